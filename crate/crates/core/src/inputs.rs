//! Seeded integer-valued inputs, so reductions are exact in any order.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::tensor::{DenseTensor, TensorIndexStmt};

pub const MIN_VALUE: i32 = -4;
pub const MAX_VALUE: i32 = 4;

pub fn random_tensor(dims: &[usize], rng: &mut impl Rng) -> DenseTensor {
    DenseTensor::from_fn(dims, |_| rng.gen_range(MIN_VALUE..=MAX_VALUE) as f64)
}

/// One tensor per input of `stmt`, filled in name order from one stream.
pub fn random_inputs(stmt: &TensorIndexStmt, seed: u64) -> BTreeMap<String, DenseTensor> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut tensors = stmt.inputs();
    tensors.sort_by(|a, b| a.name().cmp(b.name()));
    tensors
        .into_iter()
        .map(|t| {
            let v = random_tensor(t.dims(), &mut rng);
            (t.name().to_string(), v)
        })
        .collect()
}
