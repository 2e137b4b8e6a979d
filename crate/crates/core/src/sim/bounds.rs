//! Interval bounds analysis over loop nests with divide/split/rotate
//! relations.

use crate::cin::{Env, Loop, Relation, Resolver};
use crate::distribution::HyperRect;
use crate::tensor::{Access, IndexVar};

use super::SimError;

/// Inclusive interval, `None` when empty.
type Interval = Option<(usize, usize)>;

/// Range of values `v` takes when the variables in `env` are fixed and the
/// loops in `free` run over their full ranges.
pub fn var_interval(v: &IndexVar, resolver: &Resolver, env: &Env, free: &[Loop]) -> Result<Interval, SimError> {
    if let Some(x) = env.get(v) {
        return Ok(Some((x, x)));
    }
    if let Some(lp) = free.iter().find(|l| &l.var == v) {
        let r = lp.range();
        return Ok((!r.is_empty()).then(|| (r.start, r.end - 1)));
    }
    let rel = resolver
        .definition(v)
        .ok_or_else(|| SimError::NonAffineAccess(v.to_string()))?;
    let iv = |x: &IndexVar| var_interval(x, resolver, env, free);
    Ok(match rel {
        Relation::Divide {
            outer,
            inner,
            parts,
            parent_extent,
            ..
        } => affine(iv(outer)?, iv(inner)?, parent_extent.div_ceil(parts.value), *parent_extent),
        Relation::Split {
            outer,
            inner,
            chunk,
            parent_extent,
            ..
        } => affine(iv(outer)?, iv(inner)?, *chunk, *parent_extent),
        Relation::Rotate {
            over,
            result,
            extent,
            ..
        } => {
            let mut acc = iv(result)?;
            for o in over {
                acc = match (acc, iv(o)?) {
                    (Some((a, b)), Some((c, d))) => Some((a + c, b + d)),
                    _ => None,
                };
            }
            acc.map(|(lo, hi)| {
                if hi - lo + 1 >= *extent || lo / extent != hi / extent {
                    (0, extent - 1)
                } else {
                    (lo % extent, hi % extent)
                }
            })
        }
        _ => unreachable!("resolver stores defining relations only"),
    })
}

fn affine(outer: Interval, inner: Interval, stride: usize, extent: usize) -> Interval {
    let ((olo, ohi), (ilo, ihi)) = (outer?, inner?);
    let lo = olo * stride + ilo;
    let hi = (ohi * stride + ihi).min(extent.checked_sub(1)?);
    (lo <= hi).then_some((lo, hi))
}

/// Smallest box containing every coordinate `access` touches.
pub fn bounds_analysis(access: &Access, resolver: &Resolver, env: &Env, free: &[Loop]) -> Result<HyperRect, SimError> {
    let n = access.indices.len();
    let mut lo = Vec::with_capacity(n);
    let mut hi = Vec::with_capacity(n);
    for v in &access.indices {
        match var_interval(v, resolver, env, free)? {
            Some((a, b)) => {
                lo.push(a);
                hi.push(b + 1);
            }
            None => return Ok(HyperRect::new(vec![0; n], vec![0; n])),
        }
    }
    let rect = HyperRect::new(lo, hi);
    if !HyperRect::full(access.tensor.dims()).contains_rect(&rect) {
        return Err(SimError::OutOfBounds {
            tensor: access.name().to_string(),
            coord: rect.hi.iter().map(|h| h - 1).collect(),
        });
    }
    Ok(rect)
}
