use std::collections::{BTreeMap, BTreeSet};

use proptest::prelude::*;

use tendist::algorithms::*;
use tendist::distribution::{HyperRect, TensorDistribution};
use tendist::inputs::{random_inputs, random_tensor};
use tendist::machine::{Machine, ProcCoord};
use tendist::sim::memory::Memories;
use tendist::sim::trace::{EventKind, Phase};
use tendist::sim::{SimError, SimResult, Simulator};
use tendist::tensor::{for_each_coord, lower_to_cin, sequential_evaluate, DenseTensor, TensorVar};

fn bundle() -> impl Strategy<Value = AlgorithmBundle> {
    let g = 1usize..=3;
    prop_oneof![
        (g.clone(), g.clone(), 1usize..=3).prop_map(|(x, y, c)| summa(x, y, c).unwrap()),
        g.clone().prop_map(|g| summa_divided(g).unwrap()),
        g.clone().prop_map(|g| cannon(g).unwrap()),
        (g.clone(), 1usize..=3).prop_map(|(g, c)| pumma(g, g, c).unwrap()),
        (1usize..=2).prop_map(|g| johnson(g).unwrap()),
        (1usize..=2, 1usize..=2, 1usize..=2)
            .prop_map(|(g, z, c)| solomonik(g, g, z.min(g), c).unwrap()),
        (prop::array::uniform3(1usize..=2), prop::array::uniform3(1usize..=2))
            .prop_map(|(p, s)| cosma_like(p, s).unwrap()),
        (1usize..=2, 1usize..=2, 1usize..=2, 1usize..=3)
            .prop_map(|(x, y, d, c)| hierarchical(x, y, d, c).unwrap()),
        (1usize..=4).prop_map(|p| ttv(p).unwrap()),
        (1usize..=4).prop_map(|p| ttm(p).unwrap()),
        (1usize..=4).prop_map(|p| innerprod(p).unwrap()),
        (g.clone(), g).prop_map(|(x, y)| mttkrp(x, y).unwrap()),
    ]
}

fn case() -> impl Strategy<Value = (AlgorithmBundle, Extents, u64)> {
    bundle().prop_flat_map(|b| {
        let vars = b.kernel.vars();
        let ext = prop::collection::vec(1usize..=7, vars.len())
            .prop_map(move |v| vars.iter().map(|s| s.to_string()).zip(v).collect::<Extents>());
        (Just(b), ext, any::<u64>())
    })
}

fn simulate(b: &AlgorithmBundle, ext: &Extents, seed: u64, workers: usize) -> (SimResult, DenseTensor, String) {
    let inst = b.instantiate(ext).unwrap();
    let inputs = random_inputs(&inst.stmt, seed);
    let want = sequential_evaluate(&inst.stmt, &inputs).unwrap();
    let sim = b.simulator().with_workers(workers);
    let r = sim
        .run(&inst.scheduled, &inst.dists, &inputs)
        .unwrap_or_else(|e| panic!("{} at {ext:?}: {e}", b.name));
    (r, want, inst.stmt.lhs().name().to_string())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn simulation_matches_oracle((b, ext, seed) in case()) {
        let (r, want, out) = simulate(&b, &ext, seed, 1);
        prop_assert!(r.outputs[&out].bit_eq(&want), "{} at {:?}", b.name, ext);
    }

    #[test]
    fn one_task_per_processor_per_step((b, ext, seed) in case()) {
        let (r, _, _) = simulate(&b, &ext, seed, 1);
        let mut launch_sizes: BTreeMap<usize, BTreeSet<usize>> = BTreeMap::new();
        for s in r.trace.steps.iter().filter(|s| s.phase == Phase::Compute) {
            let procs: BTreeSet<&ProcCoord> = s.tasks.iter().map(|t| &t.proc).collect();
            prop_assert_eq!(procs.len(), s.tasks.len(), "step {} reuses a processor", s.step);
            launch_sizes.entry(s.launch).or_default().insert(s.tasks.len());
        }
        for (l, sizes) in launch_sizes {
            prop_assert_eq!(sizes.len(), 1, "launch {} splits its domain across steps", l);
        }
    }

    #[test]
    fn deliveries_never_overlap((b, ext, seed) in case()) {
        let (r, _, _) = simulate(&b, &ext, seed, 1);
        let mut got: BTreeMap<(usize, &ProcCoord, &str), Vec<&HyperRect>> = BTreeMap::new();
        for e in r.trace.events.iter().filter(|e| e.kind == EventKind::Copy) {
            prop_assert_eq!(e.elements, e.rect.volume());
            prop_assert!(e.src != e.dst);
            got.entry((e.step, &e.dst, e.tensor.as_str())).or_default().push(&e.rect);
        }
        for rects in got.values() {
            for (n, a) in rects.iter().enumerate() {
                for b in &rects[..n] {
                    prop_assert!(a.intersect(b).is_empty(), "{} and {} both delivered", a, b);
                }
            }
        }
    }

    #[test]
    fn worker_count_does_not_change_anything((b, ext, seed) in case()) {
        let (one, _, out) = simulate(&b, &ext, seed, 1);
        let (many, _, _) = simulate(&b, &ext, seed, 4);
        prop_assert!(one.outputs[&out].bit_eq(&many.outputs[&out]));
        prop_assert_eq!(one.trace, many.trace);
    }
}

fn two_dim_spec() -> impl Strategy<Value = &'static str> {
    prop::sample::select(vec!["xy -> xy", "xy -> yx", "xy -> x0", "xy -> 0y", "xy -> x*", "xy -> *y", "xy -> **", "xy -> 00", "xy -> 1x"])
}

/// Cells each processor holds under `d`.
fn holdings(d: &TensorDistribution) -> BTreeMap<ProcCoord, BTreeSet<Vec<usize>>> {
    let mut out: BTreeMap<ProcCoord, BTreeSet<Vec<usize>>> = BTreeMap::new();
    for_each_coord(d.tensor().dims(), |c| {
        let color = d.color_of(c).unwrap();
        for p in d.processors_of(&color).unwrap() {
            out.entry(p).or_default().insert(c.to_vec());
        }
    });
    out
}

proptest! {
    #[test]
    fn redistribution_moves_exactly_the_missing_cells(
        from in two_dim_spec(),
        to in two_dim_spec(),
        dims in prop::collection::vec(1usize..=6, 2),
        grid in (2usize..=3, 2usize..=3),
        seed in any::<u64>(),
    ) {
        let m = Machine::grid(&[grid.0, grid.1]).unwrap();
        let t = TensorVar::new("T", dims.clone()).unwrap();
        let f = TensorDistribution::parse(from, t.clone(), m.clone()).unwrap();
        let g = TensorDistribution::parse(to, t, m.clone()).unwrap();
        let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(seed);
        let data = random_tensor(&dims, &mut rng);
        let r = Simulator::new(m.clone()).redistribute(&f, &g, &data).unwrap();
        let (hf, hg) = (holdings(&f), holdings(&g));
        let want: usize = hg
            .iter()
            .map(|(p, cells)| cells.difference(hf.get(p).unwrap_or(&BTreeSet::new())).count())
            .sum();
        let moved: usize = r.trace.events.iter().map(|e| e.elements).sum();
        prop_assert_eq!(moved, want);
        prop_assert!(r.trace.events.iter().all(|e| e.phase == Phase::Placement));
        prop_assert!(r.outputs["T"].bit_eq(&data));
        let mut direct = Memories::new(&m);
        direct.place_full(&g);
        for p in m.enumerate() {
            let rects = |mem: &Memories| -> BTreeSet<String> { mem.blocks(&p, "T").iter().map(|b| b.rect.to_string()).collect() };
            prop_assert_eq!(rects(&r.memory), rects(&direct));
        }
    }
}

#[test]
fn rows_to_tiles_moves_eight_elements() {
    let m = Machine::grid(&[2, 2]).unwrap();
    let t = TensorVar::new("T", vec![4, 4]).unwrap();
    let f = TensorDistribution::parse("xy -> x0", t.clone(), m.clone()).unwrap();
    let g = TensorDistribution::parse("xy -> xy", t, m.clone()).unwrap();
    let r = Simulator::new(m).redistribute(&f, &g, &DenseTensor::zeros(&[4, 4])).unwrap();
    assert_eq!(r.trace.events.iter().map(|e| e.elements).sum::<usize>(), 8);
    assert_eq!(r.trace.events.len(), 2);
}

#[test]
fn summa_broadcasts_identical_panels() {
    let b = summa(3, 3, 2).unwrap();
    let (r, want, _) = simulate(&b, &Kernel::Gemm.cube(6), 1, 1);
    assert!(r.outputs["A"].bit_eq(&want));
    let mut by_src: BTreeMap<(usize, &ProcCoord, &str), BTreeSet<String>> = BTreeMap::new();
    for e in r.trace.compute_events() {
        by_src.entry((e.step, &e.src, e.tensor.as_str())).or_default().insert(e.rect.to_string());
    }
    assert!(by_src.values().all(|rects| rects.len() == 1));
}

#[test]
fn innerprod_reduces_to_root() {
    let (r, want, _) = simulate(&innerprod(4).unwrap(), &Kernel::Innerprod.cube(4), 3, 1);
    assert!(r.outputs["a"].bit_eq(&want));
    let evs: Vec<_> = r.trace.compute_events().collect();
    assert_eq!(evs.len(), 3);
    assert!(evs.iter().all(|e| e.kind == EventKind::Reduce && e.dst == ProcCoord(vec![0])));
}

#[test]
fn mttkrp_keeps_b_in_place() {
    let (r, want, _) = simulate(&mttkrp(2, 2).unwrap(), &Kernel::Mttkrp.cube(4), 3, 1);
    assert!(r.outputs["A"].bit_eq(&want));
    let moved: BTreeSet<&str> = r.trace.compute_events().map(|e| e.tensor.as_str()).collect();
    assert!(!moved.contains("B"));
    assert!(moved.contains("C") && moved.contains("D"));
    assert!(r.trace.compute_events().any(|e| e.tensor == "A" && e.kind == EventKind::Reduce));
}

#[test]
fn replicated_placement_counts_copies() {
    let m: Machine = "2x2x2".parse().unwrap();
    let t = TensorVar::new("T", vec![4, 4]).unwrap();
    let d = TensorDistribution::parse("xy -> xy*", t, m.clone()).unwrap();
    let sim = Simulator::new(m);
    let mut s = sim.session();
    s.place(&d, DenseTensor::zeros(&[4, 4])).unwrap();
    let evs = &s.trace().events;
    assert_eq!(evs.len(), 4);
    assert!(evs.iter().all(|e| e.phase == Phase::Placement && e.elements == 4 && e.dst.0[2] == 1));
}

#[test]
fn configuration_errors() {
    let b = summa(2, 2, 1).unwrap();
    let inst = b.instantiate(&Kernel::Gemm.cube(4)).unwrap();
    let inputs = random_inputs(&inst.stmt, 0);

    let wrong = Simulator::new(Machine::grid(&[3, 3]).unwrap());
    assert!(matches!(wrong.run(&inst.scheduled, &inst.dists, &inputs), Err(SimError::MachineMismatch(_))));

    let mut partial = inputs.clone();
    partial.remove("C");
    assert!(matches!(b.simulator().run(&inst.scheduled, &inst.dists, &partial), Err(SimError::MissingInput(_))));

    let mut dists = inst.dists.clone();
    dists.remove("B");
    assert!(matches!(b.simulator().run(&inst.scheduled, &dists, &inputs), Err(SimError::MissingDistribution(_))));

    let mut rep = inst.dists.clone();
    let a = rep["A"].tensor().clone();
    rep.insert("A".into(), TensorDistribution::parse("xy -> x*", a, b.machine.clone()).unwrap());
    assert!(matches!(b.simulator().run(&inst.scheduled, &rep, &inputs), Err(SimError::WriteToReplica(_))));

    // a single distributed loop cannot cover a 2-D grid
    let one = tendist::schedule::distribute(lower_to_cin(&inst.stmt), &"i".into()).unwrap();
    assert!(matches!(b.simulator().run(&one, &inst.dists, &inputs), Err(SimError::GridMismatch { .. })));
}
