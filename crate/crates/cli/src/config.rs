use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use clap::Args;
use serde_json::{json, Value};

use tendist::algorithms::{self, Extents, Kernel, Params};
use tendist::distribution::{parse_named, DistributionSpec, TensorDistribution};
use tendist::machine::Machine;
use tendist::notation::{index_vars, parse_statement};
use tendist::schedule::Schedule;
use tendist::tensor::{TensorIndexStmt, TensorVar};

#[derive(Args, Debug, Clone)]
pub struct ProblemArgs {
    /// Built-in kernel: gemm, ttv, innerprod, ttm, mttkrp.
    #[arg(long)]
    pub kernel: Option<String>,
    /// Inline tensor index notation, e.g. "A(i,j) = B(i,k) * C(k,j)".
    #[arg(long, conflicts_with = "kernel")]
    pub expr: Option<String>,
    /// Processor grid, e.g. 3x3 or 2x2/2 for two levels.
    #[arg(long)]
    pub machine: Option<String>,
    /// Per-tensor distribution, e.g. "A: xy->xy". Repeatable.
    #[arg(long = "dist", value_name = "NAME: SPEC")]
    pub dists: Vec<String>,
    /// Named algorithm bundle.
    #[arg(long, conflicts_with = "schedule")]
    pub algorithm: Option<String>,
    /// Schedule script, one command per line.
    #[arg(long, value_name = "FILE")]
    pub schedule: Option<PathBuf>,
    /// Extent of every index variable.
    #[arg(long)]
    pub n: Option<usize>,
    /// Per-variable extents, e.g. i=4,j=6,k=5. Overrides --n.
    #[arg(long, value_delimiter = ',', value_name = "VAR=N")]
    pub dims: Vec<String>,
    /// Chunk size for bundles that split k.
    #[arg(long)]
    pub chunk: Option<usize>,
    /// Sequential factors for the cosma bundle, e.g. 1,1,2.
    #[arg(long, value_delimiter = ',')]
    pub seq: Vec<usize>,
    /// Seed for the generated inputs.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

/// A fully resolved problem.
pub struct Problem {
    pub stmt: Option<TensorIndexStmt>,
    pub machine: Machine,
    pub dists: BTreeMap<String, TensorDistribution>,
    pub schedule: Schedule,
    pub label: Value,
}

const DEFAULT_N: usize = 4;

fn parse_dims(items: &[String]) -> Result<BTreeMap<String, usize>> {
    items
        .iter()
        .map(|s| {
            let (v, n) = s.split_once('=').ok_or_else(|| anyhow!("--dims entry {s:?} is not VAR=N"))?;
            let n: usize = n.trim().parse().with_context(|| format!("--dims entry {s:?}"))?;
            Ok((v.trim().to_string(), n))
        })
        .collect()
}

fn extents_for(vars: &[String], a: &ProblemArgs) -> Result<Extents> {
    let given = parse_dims(&a.dims)?;
    if let Some(v) = given.keys().find(|v| !vars.contains(v)) {
        bail!("--dims names {v}, which the statement does not use");
    }
    Ok(vars
        .iter()
        .map(|v| (v.clone(), given.get(v).copied().unwrap_or(a.n.unwrap_or(DEFAULT_N))))
        .collect())
}

fn parse_machine(s: &str) -> Result<Machine> {
    s.parse().map_err(|e| anyhow!("--machine {s}: {e}"))
}

fn dist_args(a: &ProblemArgs) -> Result<BTreeMap<String, DistributionSpec>> {
    a.dists
        .iter()
        .map(|s| parse_named(s).map_err(|e| anyhow!("--dist {s:?}: {e}")))
        .collect()
}

fn bind(stmt: &TensorIndexStmt, specs: &BTreeMap<String, DistributionSpec>, m: &Machine) -> Result<BTreeMap<String, TensorDistribution>> {
    let tensors = stmt.tensors();
    if let Some(n) = specs.keys().find(|n| !tensors.iter().any(|t| t.name() == n.as_str())) {
        bail!("--dist names {n}, which the statement does not use");
    }
    tensors
        .iter()
        .map(|t| {
            let spec = specs.get(t.name()).ok_or_else(|| anyhow!("no distribution for tensor {}", t.name()))?;
            let d = TensorDistribution::new(spec.clone(), t.clone(), m.clone())
                .map_err(|e| anyhow!("distribution of {}: {e}", t.name()))?;
            Ok((t.name().to_string(), d))
        })
        .collect()
}

fn read_schedule(p: &Path) -> Result<Schedule> {
    let text = std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
    Schedule::parse(&text).map_err(|e| anyhow!("{}: {e}", p.display()))
}

impl ProblemArgs {
    /// `allow_bare` admits distributions without a statement (placement only).
    pub fn resolve(&self, allow_bare: bool) -> Result<Problem> {
        let specs = dist_args(self)?;
        let machine = self.machine.as_deref().map(parse_machine).transpose()?;
        if let Some(name) = &self.algorithm {
            if self.expr.is_some() {
                bail!("--expr cannot be combined with --algorithm");
            }
            let seq = match self.seq.as_slice() {
                [] => None,
                [a, b, c] => Some([*a, *b, *c]),
                _ => bail!("--seq takes three factors"),
            };
            let params = Params {
                machine: machine.clone(),
                chunk: self.chunk,
                par: None,
                seq,
            };
            let b = algorithms::build(name, &params).map_err(|e| anyhow!("{e}"))?;
            if let Some(k) = &self.kernel {
                let k: Kernel = k.parse().map_err(|e| anyhow!("{e}"))?;
                if k != b.kernel {
                    bail!("algorithm {name} computes {}, not {k}", b.kernel);
                }
            }
            let vars: Vec<String> = b.kernel.vars().iter().map(|s| s.to_string()).collect();
            let ext = extents_for(&vars, self)?;
            let stmt = b.kernel.statement(&ext).map_err(|e| anyhow!("{e}"))?;
            let mut all: BTreeMap<String, DistributionSpec> = b.distributions.iter().cloned().collect();
            all.extend(specs.clone());
            let dists = bind(&stmt, &all, &b.machine)?;
            let label = json!({
                "algorithm": name,
                "kernel": b.kernel.name(),
                "statement": stmt.to_string(),
                "extents": ext,
                "machine": b.machine.to_string(),
                "distributions": dists.iter().map(|(n, d)| (n.clone(), d.spec().to_string())).collect::<BTreeMap<_, _>>(),
                "schedule": b.schedule.to_string(),
                "seed": self.seed,
            });
            return Ok(Problem {
                stmt: Some(stmt),
                machine: b.machine.clone(),
                dists,
                schedule: b.schedule.clone(),
                label,
            });
        }
        let machine = machine.ok_or_else(|| anyhow!("--machine is required without --algorithm"))?;
        let stmt = match (&self.kernel, &self.expr) {
            (Some(k), _) => {
                let k: Kernel = k.parse().map_err(|e| anyhow!("{e}"))?;
                let vars: Vec<String> = k.vars().iter().map(|s| s.to_string()).collect();
                Some(k.statement(&extents_for(&vars, self)?).map_err(|e| anyhow!("{e}"))?)
            }
            (None, Some(e)) => {
                let vars = index_vars(e).map_err(|err| anyhow!("--expr: {err}"))?;
                Some(parse_statement(e, &extents_for(&vars, self)?).map_err(|err| anyhow!("--expr: {err}"))?)
            }
            (None, None) if allow_bare && !specs.is_empty() => None,
            (None, None) => bail!("give --kernel, --expr or --algorithm"),
        };
        let schedule = match &self.schedule {
            Some(p) => read_schedule(p)?,
            None if stmt.is_none() || allow_bare => Schedule::new(),
            None => bail!("give exactly one of --algorithm or --schedule"),
        };
        let dists = match &stmt {
            Some(s) => bind(s, &specs, &machine)?,
            None => {
                // bare placement: each tensor gets one dimension per name in X
                let n = self.n.unwrap_or(DEFAULT_N);
                specs
                    .iter()
                    .map(|(name, spec)| {
                        let rank = spec.levels[0].x.len();
                        let t = TensorVar::new(name.clone(), vec![n; rank]).map_err(|e| anyhow!("{e}"))?;
                        let d = TensorDistribution::new(spec.clone(), t, machine.clone())
                            .map_err(|e| anyhow!("distribution of {name}: {e}"))?;
                        Ok((name.clone(), d))
                    })
                    .collect::<Result<_>>()?
            }
        };
        let label = json!({
            "kernel": self.kernel,
            "statement": stmt.as_ref().map(|s| s.to_string()),
            "extents": stmt.as_ref().map(|s| s.extents().iter().map(|(v, n)| (v.to_string(), *n)).collect::<BTreeMap<_, _>>()),
            "machine": machine.to_string(),
            "distributions": dists.iter().map(|(n, d)| (n.clone(), d.spec().to_string())).collect::<BTreeMap<_, _>>(),
            "schedule": schedule.to_string(),
            "seed": self.seed,
        });
        Ok(Problem {
            stmt,
            machine,
            dists,
            schedule,
            label,
        })
    }
}
