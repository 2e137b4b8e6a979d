//! Named distribution + schedule bundles for the classic distributed GEMM
//! algorithms and a few higher-order kernels.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use thiserror::Error;

use crate::cin::CinStmt;
use crate::distribution::{DistributionError, DistributionSpec, TensorDistribution};
use crate::machine::Machine;
use crate::schedule::{Schedule, ScheduleError};
use crate::sim::{SimError, SimResult, Simulator};
use crate::tensor::{build_statement, lower_to_cin, DenseTensor, Expr, TensorError, TensorIndexStmt, TensorVar};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AlgoError {
    #[error("{0} needs a square processor grid")]
    NonSquareGrid(String),
    #[error("{0} needs a cubic processor grid")]
    NonCubeGrid(String),
    #[error("bad grid: {0}")]
    BadGrid(String),
    #[error("parallel factors {par:?} do not multiply to {procs} processors")]
    FactorMismatch { par: Vec<usize>, procs: usize },
    #[error("{name} needs a {want}, got {got}")]
    GridMismatch { name: String, want: String, got: String },
    #[error("unknown algorithm {0}")]
    UnknownAlgorithm(String),
    #[error("unknown kernel {0}")]
    UnknownKernel(String),
    #[error("missing extent for index variable {0}")]
    MissingExtent(String),
    #[error(transparent)]
    Schedule(#[from] ScheduleError),
    #[error(transparent)]
    Distribution(#[from] DistributionError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Sim(#[from] SimError),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Kernel {
    /// `A(i,j) = B(i,k) * C(k,j)`
    Gemm,
    /// `A(i,j) = B(i,j,k) * c(k)`
    Ttv,
    /// `a = B(i,j,k) * C(i,j,k)`
    Innerprod,
    /// `A(i,j,l) = B(i,j,k) * C(k,l)`
    Ttm,
    /// `A(i,l) = B(i,j,k) * C(j,l) * D(k,l)`
    Mttkrp,
}

impl Kernel {
    pub const ALL: [Kernel; 5] = [Kernel::Gemm, Kernel::Ttv, Kernel::Innerprod, Kernel::Ttm, Kernel::Mttkrp];

    pub fn name(&self) -> &'static str {
        match self {
            Kernel::Gemm => "gemm",
            Kernel::Ttv => "ttv",
            Kernel::Innerprod => "innerprod",
            Kernel::Ttm => "ttm",
            Kernel::Mttkrp => "mttkrp",
        }
    }

    pub fn vars(&self) -> &'static [&'static str] {
        match self {
            Kernel::Gemm | Kernel::Ttv | Kernel::Innerprod => &["i", "j", "k"],
            Kernel::Ttm | Kernel::Mttkrp => &["i", "j", "k", "l"],
        }
    }

    /// Every index variable set to `n`.
    pub fn cube(&self, n: usize) -> Extents {
        self.vars().iter().map(|v| (v.to_string(), n)).collect()
    }

    pub fn statement(&self, ext: &Extents) -> Result<TensorIndexStmt, AlgoError> {
        let e = |v: &str| ext.get(v).copied().ok_or_else(|| AlgoError::MissingExtent(v.to_string()));
        let t = |name: &str, vs: &[&str]| -> Result<TensorVar, AlgoError> {
            let dims = vs.iter().map(|v| e(v)).collect::<Result<Vec<_>, _>>()?;
            Ok(TensorVar::new(name, dims)?)
        };
        let acc = |tv: &TensorVar, vs: &[&str]| Expr::from(tv.at(vs));
        let s = match self {
            Kernel::Gemm => {
                let (a, b, c) = (t("A", &["i", "j"])?, t("B", &["i", "k"])?, t("C", &["k", "j"])?);
                build_statement(a.at(&["i", "j"]), acc(&b, &["i", "k"]) * acc(&c, &["k", "j"]))?
            }
            Kernel::Ttv => {
                let (a, b, c) = (t("A", &["i", "j"])?, t("B", &["i", "j", "k"])?, t("c", &["k"])?);
                build_statement(a.at(&["i", "j"]), acc(&b, &["i", "j", "k"]) * acc(&c, &["k"]))?
            }
            Kernel::Innerprod => {
                let (a, b, c) = (
                    TensorVar::scalar("a"),
                    t("B", &["i", "j", "k"])?,
                    t("C", &["i", "j", "k"])?,
                );
                build_statement(a.at(&[]), acc(&b, &["i", "j", "k"]) * acc(&c, &["i", "j", "k"]))?
            }
            Kernel::Ttm => {
                let (a, b, c) = (t("A", &["i", "j", "l"])?, t("B", &["i", "j", "k"])?, t("C", &["k", "l"])?);
                build_statement(a.at(&["i", "j", "l"]), acc(&b, &["i", "j", "k"]) * acc(&c, &["k", "l"]))?
            }
            Kernel::Mttkrp => {
                let (a, b, c, d) = (
                    t("A", &["i", "l"])?,
                    t("B", &["i", "j", "k"])?,
                    t("C", &["j", "l"])?,
                    t("D", &["k", "l"])?,
                );
                build_statement(
                    a.at(&["i", "l"]),
                    acc(&b, &["i", "j", "k"]) * acc(&c, &["j", "l"]) * acc(&d, &["k", "l"]),
                )?
            }
        };
        Ok(s)
    }
}

impl fmt::Display for Kernel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Kernel {
    type Err = AlgoError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Kernel::ALL
            .into_iter()
            .find(|k| k.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| AlgoError::UnknownKernel(s.to_string()))
    }
}

/// Extent of each index variable.
pub type Extents = BTreeMap<String, usize>;

/// A kernel together with its machine, data layout and schedule.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AlgorithmBundle {
    pub name: String,
    pub kernel: Kernel,
    pub machine: Machine,
    pub distributions: Vec<(String, DistributionSpec)>,
    pub schedule: Schedule,
}

/// A bundle bound to concrete sizes.
#[derive(Clone, Debug)]
pub struct Instance {
    pub stmt: TensorIndexStmt,
    pub scheduled: CinStmt,
    pub dists: BTreeMap<String, TensorDistribution>,
}

impl AlgorithmBundle {
    pub fn instantiate(&self, ext: &Extents) -> Result<Instance, AlgoError> {
        let stmt = self.kernel.statement(ext)?;
        let scheduled = self.schedule.apply(lower_to_cin(&stmt), Some(&self.machine))?;
        let mut dists = BTreeMap::new();
        for tv in stmt.tensors() {
            let spec = self
                .distributions
                .iter()
                .find(|(n, _)| n == tv.name())
                .map(|(_, s)| s.clone())
                .ok_or_else(|| SimError::MissingDistribution(tv.name().to_string()))?;
            dists.insert(
                tv.name().to_string(),
                TensorDistribution::new(spec, tv.clone(), self.machine.clone())?,
            );
        }
        Ok(Instance { stmt, scheduled, dists })
    }

    pub fn run(&self, ext: &Extents, inputs: &BTreeMap<String, DenseTensor>, sim: &Simulator) -> Result<SimResult, AlgoError> {
        let inst = self.instantiate(ext)?;
        Ok(sim.run(&inst.scheduled, &inst.dists, inputs)?)
    }

    pub fn simulator(&self) -> Simulator {
        Simulator::new(self.machine.clone())
    }
}

fn specs(pairs: &[(&str, &str)]) -> Vec<(String, DistributionSpec)> {
    pairs
        .iter()
        .map(|(n, s)| (n.to_string(), s.parse().expect("built-in distribution parses")))
        .collect()
}

fn grid(dims: &[usize]) -> Result<Machine, AlgoError> {
    Machine::grid(dims).map_err(|e| AlgoError::BadGrid(e.to_string()))
}

fn gemm_tiles() -> Vec<(String, DistributionSpec)> {
    specs(&[("A", "xy -> xy"), ("B", "xy -> xy"), ("C", "xy -> xy")])
}

/// Broadcast panels of B and C along processor rows and columns.
pub fn summa(gx: usize, gy: usize, chunk: usize) -> Result<AlgorithmBundle, AlgoError> {
    if chunk == 0 {
        return Err(AlgoError::BadGrid("chunk must be positive".into()));
    }
    Ok(AlgorithmBundle {
        name: "summa".into(),
        kernel: Kernel::Gemm,
        machine: grid(&[gx, gy])?,
        distributions: gemm_tiles(),
        schedule: Schedule::new()
            .distribute_onto(&["i", "j"], &["io", "jo"], &["ii", "ji"])
            .split("k", "ko", "ki", chunk)
            .reorder(&["ko", "ii", "ji", "ki"])
            .communicate(&["A"], "jo")
            .communicate(&["B", "C"], "ko"),
    })
}

/// SUMMA with the k loop divided into `g` steps; Cannon without the rotation.
pub fn summa_divided(g: usize) -> Result<AlgorithmBundle, AlgoError> {
    Ok(AlgorithmBundle {
        name: "summa-divide".into(),
        kernel: Kernel::Gemm,
        machine: grid(&[g, g])?,
        distributions: gemm_tiles(),
        schedule: Schedule::new()
            .distribute_onto(&["i", "j"], &["io", "jo"], &["ii", "ji"])
            .divide("k", "ko", "ki", g)
            .reorder(&["ko", "ii", "ji", "ki"])
            .communicate(&["A"], "jo")
            .communicate(&["B", "C"], "ko"),
    })
}

pub fn cannon_on(gx: usize, gy: usize) -> Result<AlgorithmBundle, AlgoError> {
    if gx != gy {
        return Err(AlgoError::NonSquareGrid("cannon".into()));
    }
    let g = gx;
    Ok(AlgorithmBundle {
        name: "cannon".into(),
        kernel: Kernel::Gemm,
        machine: grid(&[g, g])?,
        distributions: gemm_tiles(),
        schedule: Schedule::new()
            .distribute_onto(&["i", "j"], &["io", "jo"], &["ii", "ji"])
            .divide("k", "ko", "ki", g)
            .reorder(&["ko", "ii", "ji", "ki"])
            .rotate("ko", &["io", "jo"], "kos")
            .communicate(&["A"], "jo")
            .communicate(&["B", "C"], "kos"),
    })
}

/// Systolic shifts of B along rows and C along columns.
pub fn cannon(g: usize) -> Result<AlgorithmBundle, AlgoError> {
    cannon_on(g, g)
}

/// Broadcasts B along rows and shifts C along columns.
pub fn pumma(gx: usize, gy: usize, chunk: usize) -> Result<AlgorithmBundle, AlgoError> {
    if gx != gy {
        return Err(AlgoError::NonSquareGrid("pumma".into()));
    }
    if chunk == 0 {
        return Err(AlgoError::BadGrid("chunk must be positive".into()));
    }
    Ok(AlgorithmBundle {
        name: "pumma".into(),
        kernel: Kernel::Gemm,
        machine: grid(&[gx, gy])?,
        distributions: gemm_tiles(),
        schedule: Schedule::new()
            .distribute_onto(&["i", "j"], &["io", "jo"], &["ii", "ji"])
            .split("k", "ko", "ki", chunk)
            .reorder(&["ko", "ii", "ji", "ki"])
            .rotate("ko", &["io"], "kos")
            .communicate(&["A"], "jo")
            .communicate(&["B", "C"], "kos"),
    })
}

pub fn johnson_on(dims: &[usize]) -> Result<AlgorithmBundle, AlgoError> {
    if dims.len() != 3 || dims.iter().any(|&d| d != dims[0]) {
        return Err(AlgoError::NonCubeGrid("johnson".into()));
    }
    Ok(AlgorithmBundle {
        name: "johnson".into(),
        kernel: Kernel::Gemm,
        machine: grid(dims)?,
        distributions: specs(&[("A", "xy -> xy0"), ("B", "xy -> x0y"), ("C", "xy -> 0yx")]),
        schedule: Schedule::new()
            .distribute_onto(&["i", "j", "k"], &["io", "jo", "ko"], &["ii", "ji", "ki"])
            .communicate(&["A", "B", "C"], "ko"),
    })
}

/// One task per point of a `g x g x g` cube; A is sum-reduced onto a face.
pub fn johnson(g: usize) -> Result<AlgorithmBundle, AlgoError> {
    johnson_on(&[g, g, g])
}

/// 2.5D: `gz` replicated Cannon slices over k, each reduced into A.
pub fn solomonik(gx: usize, gy: usize, gz: usize, chunk: usize) -> Result<AlgorithmBundle, AlgoError> {
    if gx != gy {
        return Err(AlgoError::BadGrid("solomonik needs gx == gy".into()));
    }
    if gz == 0 || gz > gx || chunk == 0 {
        return Err(AlgoError::BadGrid(format!("need 1 <= gz <= gx and chunk >= 1, got gz={gz}, chunk={chunk}")));
    }
    Ok(AlgorithmBundle {
        name: "solomonik".into(),
        kernel: Kernel::Gemm,
        machine: grid(&[gx, gy, gz])?,
        distributions: specs(&[("A", "xy -> xy0"), ("B", "xy -> xy*"), ("C", "xy -> xy*")]),
        schedule: Schedule::new()
            .distribute_onto(&["i", "j", "k"], &["io", "jo", "ko"], &["ii", "ji", "ki"])
            .split("ki", "kio", "kii", chunk)
            .reorder(&["kio", "ii", "ji", "kii"])
            .rotate("kio", &["io", "jo"], "kios")
            .communicate(&["A"], "ko")
            .communicate(&["B", "C"], "kios"),
    })
}

/// User-chosen decomposition: `seq` factors become sequential outer loops,
/// `par` factors are distributed over a `par` grid.
pub fn cosma_like(par: [usize; 3], seq: [usize; 3]) -> Result<AlgorithmBundle, AlgoError> {
    if seq.contains(&0) {
        return Err(AlgoError::BadGrid("sequential factors must be positive".into()));
    }
    let names = ["i", "j", "k"];
    let mut s = Schedule::new();
    let mut targets = Vec::new();
    let mut outer = Vec::new();
    for (n, &f) in seq.iter().enumerate() {
        if f > 1 {
            let (o, r) = (format!("{}s", names[n]), format!("{}r", names[n]));
            s = s.divide(names[n], &o, &r, f);
            outer.push(o);
            targets.push(r);
        } else {
            targets.push(names[n].to_string());
        }
    }
    let tref: Vec<&str> = targets.iter().map(String::as_str).collect();
    s = s.distribute_onto(&tref, &["io", "jo", "ko"], &["ii", "ji", "ki"]);
    if !outer.is_empty() {
        let mut order: Vec<&str> = outer.iter().map(String::as_str).collect();
        order.extend(["io", "jo", "ko", "ii", "ji", "ki"]);
        s = s.reorder(&order);
    }
    s = s.communicate(&["A", "B", "C"], "ko");
    Ok(AlgorithmBundle {
        name: "cosma".into(),
        kernel: Kernel::Gemm,
        machine: grid(&par)?,
        distributions: specs(&[("A", "xy -> xy0"), ("B", "xy -> xy0"), ("C", "xy -> xy0")]),
        schedule: s,
    })
}

/// SUMMA over nodes, rows of each tile split across the devices of a node,
/// with the local product handed to the blocked leaf kernel.
pub fn hierarchical(gx: usize, gy: usize, devices: usize, chunk: usize) -> Result<AlgorithmBundle, AlgoError> {
    if chunk == 0 {
        return Err(AlgoError::BadGrid("chunk must be positive".into()));
    }
    let machine = Machine::new(vec![vec![gx, gy], vec![devices]]).map_err(|e| AlgoError::BadGrid(e.to_string()))?;
    Ok(AlgorithmBundle {
        name: "hierarchical".into(),
        kernel: Kernel::Gemm,
        machine,
        distributions: specs(&[
            ("A", "xy -> xy ; xy -> x"),
            ("B", "xy -> xy ; xy -> x"),
            ("C", "xy -> xy ; xy -> x"),
        ]),
        schedule: Schedule::new()
            .distribute_onto(&["i", "j"], &["io", "jo"], &["ii", "ji"])
            .distribute_onto_level(&["ii"], &["iio"], &["iii"], 1)
            .split("k", "ko", "ki", chunk)
            .reorder(&["ko", "iii", "ji", "ki"])
            .communicate(&["A"], "iio")
            .communicate(&["B", "C"], "ko")
            .substitute(&["iii", "ji", "ki"], "gemm"),
    })
}

fn row_kernel(name: &str, kernel: Kernel, p: usize, dists: &[(&str, &str)], comm: &[&str]) -> Result<AlgorithmBundle, AlgoError> {
    Ok(AlgorithmBundle {
        name: name.into(),
        kernel,
        machine: grid(&[p])?,
        distributions: specs(dists),
        schedule: Schedule::new()
            .distribute_onto(&["i"], &["io"], &["ii"])
            .communicate(comm, "io"),
    })
}

/// Rows of B and A together, c replicated.
pub fn ttv(p: usize) -> Result<AlgorithmBundle, AlgoError> {
    row_kernel(
        "ttv",
        Kernel::Ttv,
        p,
        &[("A", "xy -> x"), ("B", "xyz -> x"), ("c", "x -> *")],
        &["A", "B", "c"],
    )
}

/// Rows of B and A together, C replicated.
pub fn ttm(p: usize) -> Result<AlgorithmBundle, AlgoError> {
    row_kernel(
        "ttm",
        Kernel::Ttm,
        p,
        &[("A", "xyz -> x"), ("B", "xyz -> x"), ("C", "xy -> *")],
        &["A", "B", "C"],
    )
}

/// Local partial sums reduced onto processor 0.
pub fn innerprod(p: usize) -> Result<AlgorithmBundle, AlgoError> {
    row_kernel(
        "innerprod",
        Kernel::Innerprod,
        p,
        &[("a", " -> 0"), ("B", "xyz -> x"), ("C", "xyz -> x")],
        &["B", "C"],
    )
}

/// B stays in place; C and D move to it and partial rows of A are reduced.
pub fn mttkrp(gx: usize, gy: usize) -> Result<AlgorithmBundle, AlgoError> {
    Ok(AlgorithmBundle {
        name: "mttkrp".into(),
        kernel: Kernel::Mttkrp,
        machine: grid(&[gx, gy])?,
        distributions: specs(&[("A", "xy -> x0"), ("B", "xyz -> xy"), ("C", "xy -> 0x"), ("D", "xy -> 00")]),
        schedule: Schedule::new()
            .distribute_onto(&["i", "j"], &["io", "jo"], &["ii", "ji"])
            .communicate(&["A", "B", "C", "D"], "jo"),
    })
}

/// Parameters for building a bundle by name.
#[derive(Clone, Debug, Default)]
pub struct Params {
    pub machine: Option<Machine>,
    pub chunk: Option<usize>,
    /// Parallel factors for `cosma`; defaults to the machine grid.
    pub par: Option<[usize; 3]>,
    /// Sequential factors for `cosma`; defaults to all ones.
    pub seq: Option<[usize; 3]>,
}

pub const ALGORITHMS: [&str; 12] = [
    "summa",
    "summa-divide",
    "cannon",
    "pumma",
    "johnson",
    "solomonik",
    "cosma",
    "hierarchical",
    "ttv",
    "ttm",
    "innerprod",
    "mttkrp",
];

fn dims_of(name: &str, m: &Machine, want: usize, label: &str) -> Result<Vec<usize>, AlgoError> {
    if m.is_hierarchical() || m.flat_dims().len() != want {
        return Err(AlgoError::GridMismatch {
            name: name.into(),
            want: label.into(),
            got: m.to_string(),
        });
    }
    Ok(m.flat_dims())
}

/// Builds a bundle from the registry.
pub fn build(name: &str, p: &Params) -> Result<AlgorithmBundle, AlgoError> {
    let default_machine = match name {
        "johnson" | "solomonik" | "cosma" => "2x2x2",
        "hierarchical" => "2x2/2",
        "ttv" | "ttm" | "innerprod" => "4",
        _ => "2x2",
    };
    let m = p.machine.clone().unwrap_or_else(|| default_machine.parse().unwrap());
    let chunk = p.chunk.unwrap_or(1);
    match name {
        "summa" => {
            let d = dims_of(name, &m, 2, "2-D grid")?;
            summa(d[0], d[1], chunk)
        }
        "summa-divide" => {
            let d = dims_of(name, &m, 2, "2-D grid")?;
            if d[0] != d[1] {
                return Err(AlgoError::NonSquareGrid(name.into()));
            }
            summa_divided(d[0])
        }
        "cannon" => {
            let d = dims_of(name, &m, 2, "2-D grid")?;
            cannon_on(d[0], d[1])
        }
        "pumma" => {
            let d = dims_of(name, &m, 2, "2-D grid")?;
            pumma(d[0], d[1], chunk)
        }
        "johnson" => {
            if m.is_hierarchical() {
                return Err(AlgoError::NonCubeGrid(name.into()));
            }
            johnson_on(&m.flat_dims())
        }
        "solomonik" => {
            let d = dims_of(name, &m, 3, "3-D grid")?;
            solomonik(d[0], d[1], d[2], chunk)
        }
        "cosma" => {
            let d = dims_of(name, &m, 3, "3-D grid")?;
            let par = p.par.unwrap_or([d[0], d[1], d[2]]);
            if par.iter().product::<usize>() != m.num_procs() || par.to_vec() != d {
                return Err(AlgoError::FactorMismatch {
                    par: par.to_vec(),
                    procs: m.num_procs(),
                });
            }
            cosma_like(par, p.seq.unwrap_or([1, 1, 1]))
        }
        "hierarchical" => {
            if m.levels().len() != 2 || m.level_dims(0).len() != 2 || m.level_dims(1).len() != 1 {
                return Err(AlgoError::GridMismatch {
                    name: name.into(),
                    want: "two-level machine like 2x2/2".into(),
                    got: m.to_string(),
                });
            }
            hierarchical(m.level_dims(0)[0], m.level_dims(0)[1], m.level_dims(1)[0], chunk)
        }
        "ttv" => ttv(dims_of(name, &m, 1, "1-D grid")?[0]),
        "ttm" => ttm(dims_of(name, &m, 1, "1-D grid")?[0]),
        "innerprod" => innerprod(dims_of(name, &m, 1, "1-D grid")?[0]),
        "mttkrp" => {
            let d = dims_of(name, &m, 2, "2-D grid")?;
            mttkrp(d[0], d[1])
        }
        other => Err(AlgoError::UnknownAlgorithm(other.into())),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grid_preconditions() {
        assert_eq!(cannon_on(2, 3).unwrap_err(), AlgoError::NonSquareGrid("cannon".into()));
        assert!(matches!(johnson_on(&[3, 3]), Err(AlgoError::NonCubeGrid(_))));
        assert!(matches!(solomonik(2, 3, 1, 1), Err(AlgoError::BadGrid(_))));
        assert!(matches!(pumma(2, 3, 1), Err(AlgoError::NonSquareGrid(_))));
        let p = Params {
            machine: Some("2x2x2".parse().unwrap()),
            par: Some([2, 2, 1]),
            ..Params::default()
        };
        assert!(matches!(build("cosma", &p), Err(AlgoError::FactorMismatch { .. })));
        assert!(matches!(build("nope", &Params::default()), Err(AlgoError::UnknownAlgorithm(_))));
    }

    #[test]
    fn every_registered_bundle_instantiates() {
        for name in ALGORITHMS {
            let b = build(name, &Params::default()).unwrap();
            let inst = b.instantiate(&b.kernel.cube(4)).unwrap();
            for d in inst.dists.values() {
                d.validate().unwrap();
            }
        }
    }

    #[test]
    fn summa_loop_order() {
        let b = summa(2, 2, 2).unwrap();
        let inst = b.instantiate(&Kernel::Gemm.cube(4)).unwrap();
        assert_eq!(
            inst.scheduled.loop_nest_order(),
            crate::tensor::vars(&["io", "jo", "ko", "ii", "ji", "ki"])
        );
    }
}
