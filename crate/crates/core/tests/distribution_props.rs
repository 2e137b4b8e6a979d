use std::collections::BTreeSet;

use proptest::prelude::*;

use tendist::distribution::{block_range, DistributionSpec, HyperRect, TensorDistribution};
use tendist::machine::{Machine, ProcCoord};
use tendist::tensor::{for_each_coord, TensorVar};

const NAMES: [char; 4] = ['a', 'b', 'c', 'd'];

#[derive(Clone, Debug)]
enum Y {
    Dim(usize),
    Fixed(usize),
    Bcast,
}

fn spec_text(rank: usize, ys: &[Y]) -> String {
    let x: String = NAMES[..rank].iter().collect();
    let y: String = ys
        .iter()
        .map(|y| match y {
            Y::Dim(d) => NAMES[*d].to_string(),
            Y::Fixed(v) => v.to_string(),
            Y::Bcast => "*".to_string(),
        })
        .collect();
    format!("{x} -> {y}")
}

/// (tensor dims, machine dims, one y entry per machine dim)
fn single_level() -> impl Strategy<Value = (Vec<usize>, Vec<usize>, Vec<Y>)> {
    (prop::collection::vec(1usize..=4, 1..=4), prop::collection::vec(1usize..=3, 1..=3))
        .prop_flat_map(|(tdims, mdims)| {
            let rank = tdims.len();
            let ys: Vec<BoxedStrategy<(u8, usize)>> = mdims
                .iter()
                .map(|&e| (0u8..3, 0..rank.max(e)).prop_map(move |(k, v)| (k, v)).boxed())
                .collect();
            (Just(tdims), Just(mdims), ys)
        })
        .prop_map(|(tdims, mdims, raw)| {
            let mut used = BTreeSet::new();
            let ys = raw
                .into_iter()
                .zip(&mdims)
                .map(|((k, v), &e)| match k {
                    0 if used.insert(v % tdims.len()) => Y::Dim(v % tdims.len()),
                    1 => Y::Bcast,
                    _ => Y::Fixed(v % e),
                })
                .collect();
            (tdims, mdims, ys)
        })
}

fn build(tdims: &[usize], mdims: &[usize], ys: &[Y]) -> TensorDistribution {
    let spec: DistributionSpec = spec_text(tdims.len(), ys).parse().unwrap();
    let t = TensorVar::new("T", tdims.to_vec()).unwrap();
    TensorDistribution::new(spec, t, Machine::grid(mdims).unwrap()).unwrap()
}

/// Direct coordinate -> processors map, written without colors.
fn owners(tdims: &[usize], mdims: &[usize], ys: &[Y], coord: &[usize]) -> BTreeSet<ProcCoord> {
    let choices: Vec<Vec<usize>> = ys
        .iter()
        .zip(mdims)
        .map(|(y, &e)| match y {
            Y::Dim(d) => vec![coord[*d] / tdims[*d].div_ceil(e)],
            Y::Fixed(v) => vec![*v],
            Y::Bcast => (0..e).collect(),
        })
        .collect();
    let lens: Vec<usize> = choices.iter().map(Vec::len).collect();
    let mut out = BTreeSet::new();
    for_each_coord(&lens, |ix| {
        out.insert(ProcCoord(ix.iter().zip(&choices).map(|(&i, c)| c[i]).collect()));
    });
    out
}

proptest! {
    #[test]
    fn colors_partition_the_tensor((tdims, mdims, ys) in single_level()) {
        let d = build(&tdims, &mdims, &ys);
        let colors: BTreeSet<Vec<usize>> = d.colors().into_iter().collect();
        let mut seen = vec![0usize; tdims.iter().product()];
        let mut n = 0;
        for_each_coord(&tdims, |c| {
            let col = d.color_of(c).unwrap();
            assert!(colors.contains(&col));
            let r = d.piece_bounds(&col).unwrap();
            assert!(r.contains(c), "{c:?} outside its piece {r}");
            seen[n] += 1;
            n += 1;
        });
        prop_assert!(seen.iter().all(|&s| s == 1));
        let total: usize = d.pieces().iter().map(|(_, r, _)| r.volume()).sum();
        prop_assert_eq!(total, n);
    }

    #[test]
    fn piece_bounds_are_exact((tdims, mdims, ys) in single_level()) {
        let d = build(&tdims, &mdims, &ys);
        for c in d.colors() {
            let r = d.piece_bounds(&c).unwrap();
            let mut want = 0;
            for_each_coord(&tdims, |x| {
                let same = d.color_of(x).unwrap() == c;
                assert_eq!(same, r.contains(x));
                want += same as usize;
            });
            prop_assert_eq!(r.volume(), want);
        }
    }

    #[test]
    fn composition_law((tdims, mdims, ys) in single_level()) {
        let d = build(&tdims, &mdims, &ys);
        let mut ok = true;
        for_each_coord(&tdims, |c| {
            let got: BTreeSet<ProcCoord> = d.processors_of(&d.color_of(c).unwrap()).unwrap().into_iter().collect();
            ok &= got == owners(&tdims, &mdims, &ys, c);
        });
        prop_assert!(ok);
    }

    #[test]
    fn broadcast_cardinality((tdims, mdims, ys) in single_level()) {
        let d = build(&tdims, &mdims, &ys);
        let want: usize = ys.iter().zip(&mdims).filter(|(y, _)| matches!(y, Y::Bcast)).map(|(_, e)| *e).product();
        for c in d.colors() {
            let ps = d.processors_of(&c).unwrap();
            prop_assert_eq!(ps.len(), want);
            prop_assert_eq!(&d.home_of(&c).unwrap(), &ps[0]);
        }
    }

    #[test]
    fn hierarchical_pieces_refine_outer(
        tdims in prop::collection::vec(1usize..=8, 2),
        outer in (1usize..=3, 1usize..=3),
        inner in 1usize..=3,
        inner_dim in 0usize..2,
    ) {
        let inner_name = ['x', 'y'][inner_dim];
        let spec: DistributionSpec = format!("xy -> xy ; xy -> {inner_name}").parse().unwrap();
        let m = Machine::new(vec![vec![outer.0, outer.1], vec![inner]]).unwrap();
        let t = TensorVar::new("T", tdims.clone()).unwrap();
        let d = TensorDistribution::new(spec, t.clone(), m).unwrap();
        let top = TensorDistribution::parse("xy -> xy", t, Machine::grid(&[outer.0, outer.1]).unwrap()).unwrap();
        for c0 in top.colors() {
            let outer_piece = top.piece_bounds(&c0).unwrap();
            let mut cells = BTreeSet::new();
            let mut vol = 0;
            for k in 0..inner {
                let mut c = c0.clone();
                c.push(k);
                let r = d.piece_bounds(&c).unwrap();
                prop_assert!(outer_piece.contains_rect(&r) || r.is_empty());
                vol += r.volume();
                r.for_each(|x| { cells.insert(x.to_vec()); });
            }
            prop_assert_eq!(vol, outer_piece.volume());
            prop_assert_eq!(cells.len(), outer_piece.volume());
        }
    }

    #[test]
    fn block_ranges_tile_the_extent(extent in 0usize..40, parts in 1usize..8) {
        let mut next = 0;
        for k in 0..parts {
            let (lo, hi) = block_range(extent, parts, k);
            prop_assert!(lo <= hi);
            prop_assert_eq!(lo, next);
            prop_assert!(hi - lo <= extent.div_ceil(parts));
            next = hi;
        }
        prop_assert_eq!(next, extent);
    }

    #[test]
    fn rect_intersection_is_cellwise(
        a in prop::collection::vec((0usize..5, 0usize..5), 2),
        b in prop::collection::vec((0usize..5, 0usize..5), 2),
    ) {
        let mk = |v: &[(usize, usize)]| HyperRect::new(v.iter().map(|p| p.0).collect(), v.iter().map(|p| p.1).collect());
        let (ra, rb) = (mk(&a), mk(&b));
        let i = ra.intersect(&rb);
        for_each_coord(&[6, 6], |c| assert_eq!(i.contains(c), ra.contains(c) && rb.contains(c)));
    }
}

#[test]
fn spec_strings_round_trip() {
    for s in ["xy -> xy*", "xy -> x0", "xyz -> xy ; xy -> x", " -> 0", "x -> *"] {
        let spec: DistributionSpec = s.parse().unwrap();
        let again: DistributionSpec = spec.to_string().parse().unwrap();
        assert_eq!(spec, again, "{s}");
    }
}
