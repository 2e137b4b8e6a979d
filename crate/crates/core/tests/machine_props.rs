use std::collections::BTreeSet;

use proptest::prelude::*;

use tendist::machine::Machine;

fn levels() -> impl Strategy<Value = Vec<Vec<usize>>> {
    prop::collection::vec(prop::collection::vec(1usize..=3, 1..=3), 1..=3)
}

proptest! {
    #[test]
    fn enumerate_is_distinct_and_complete(ls in levels()) {
        let m = Machine::new(ls.clone()).unwrap();
        let all = m.enumerate();
        let want: usize = ls.iter().flatten().product();
        prop_assert_eq!(all.len(), want);
        prop_assert_eq!(all.iter().collect::<BTreeSet<_>>().len(), want);
        for (n, p) in all.iter().enumerate() {
            prop_assert_eq!(m.proc_index(p), n);
        }
    }

    #[test]
    fn flatten_keeps_processors(ls in levels()) {
        let m = Machine::new(ls).unwrap();
        let f = m.flatten();
        prop_assert_eq!(f.num_procs(), m.num_procs());
        prop_assert_eq!(f.enumerate(), m.enumerate());
        prop_assert!(!f.is_hierarchical());
    }

    #[test]
    fn text_form_round_trips(ls in levels()) {
        let m = Machine::new(ls).unwrap();
        let again: Machine = m.to_string().parse().unwrap();
        prop_assert_eq!(again, m);
    }
}

#[test]
fn zero_extent_rejected() {
    assert!(Machine::grid(&[2, 0]).is_err());
    assert!("2x".parse::<Machine>().is_err());
}
