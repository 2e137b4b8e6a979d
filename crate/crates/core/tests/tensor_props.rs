use proptest::prelude::*;

use tendist::algorithms::{Extents, Kernel};
use tendist::cin::{interpret, TensorStore};
use tendist::inputs::random_inputs;
use tendist::tensor::{lower_to_cin, sequential_evaluate};

fn kernel() -> impl Strategy<Value = Kernel> {
    prop::sample::select(Kernel::ALL.to_vec())
}

fn extents(k: Kernel) -> impl Strategy<Value = Extents> {
    prop::collection::vec(1usize..=5, k.vars().len())
        .prop_map(move |v| k.vars().iter().map(|s| s.to_string()).zip(v).collect())
}

proptest! {
    #[test]
    fn oracle_is_deterministic((k, ext) in kernel().prop_flat_map(|k| (Just(k), extents(k))), seed in any::<u64>()) {
        let stmt = k.statement(&ext).unwrap();
        let inputs = random_inputs(&stmt, seed);
        let a = sequential_evaluate(&stmt, &inputs).unwrap();
        let b = sequential_evaluate(&stmt, &inputs).unwrap();
        prop_assert!(a.bit_eq(&b));
    }

    #[test]
    fn gemm_is_linear_in_b(ext in extents(Kernel::Gemm), seed in any::<u64>(), p in -3i32..=3) {
        let alpha = 2f64.powi(p);
        let stmt = Kernel::Gemm.statement(&ext).unwrap();
        let mut inputs = random_inputs(&stmt, seed);
        let base = sequential_evaluate(&stmt, &inputs).unwrap();
        let b = inputs["B"].scaled(alpha);
        inputs.insert("B".into(), b);
        let scaled = sequential_evaluate(&stmt, &inputs).unwrap();
        prop_assert!(scaled.bit_eq(&base.scaled(alpha)));
    }

    #[test]
    fn lowering_preserves_semantics((k, ext) in kernel().prop_flat_map(|k| (Just(k), extents(k))), seed in any::<u64>()) {
        let stmt = k.statement(&ext).unwrap();
        let inputs = random_inputs(&stmt, seed);
        let want = sequential_evaluate(&stmt, &inputs).unwrap();
        let mut store: TensorStore = inputs;
        interpret(&lower_to_cin(&stmt), &mut store).unwrap();
        prop_assert!(store[stmt.lhs().name()].bit_eq(&want));
    }

    #[test]
    fn inputs_are_small_integers(seed in any::<u64>()) {
        let stmt = Kernel::Mttkrp.statement(&Kernel::Mttkrp.cube(3)).unwrap();
        let a = random_inputs(&stmt, seed);
        prop_assert_eq!(a.len(), 3);
        for t in a.values() {
            prop_assert!(t.data().iter().all(|x| x.fract() == 0.0 && (-4.0..=4.0).contains(x)));
        }
        let b = random_inputs(&stmt, seed);
        prop_assert!(a.iter().zip(&b).all(|(x, y)| x.1.bit_eq(y.1)));
    }
}
