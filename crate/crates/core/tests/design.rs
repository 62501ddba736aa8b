use std::collections::{BTreeMap, BTreeSet};

use glmm::design::{expand_design, parse_nelder, BlockDesign};
use proptest::prelude::*;

fn arb_shape() -> impl Strategy<Value = BlockDesign> {
    let leaf = (1u64..5).prop_map(|levels| BlockDesign::Factor { name: String::new(), levels });
    leaf.prop_recursive(4, 7, 2, |inner| {
        (inner.clone(), inner, any::<bool>()).prop_map(|(a, b, nest)| {
            if nest {
                BlockDesign::Nest(Box::new(a), Box::new(b))
            } else {
                BlockDesign::Cross(Box::new(a), Box::new(b))
            }
        })
    })
}

/// Gives the leaves distinct names in textual order.
fn rename(t: &mut BlockDesign, next: &mut usize) {
    match t {
        BlockDesign::Factor { name, .. } => {
            *name = format!("f{next}");
            *next += 1;
        }
        BlockDesign::Nest(a, b) | BlockDesign::Cross(a, b) => {
            rename(a, next);
            rename(b, next);
        }
    }
}

fn arb_tree() -> impl Strategy<Value = BlockDesign> {
    arb_shape().prop_map(|mut t| {
        rename(&mut t, &mut 0);
        t
    })
}

/// Every combination the tree describes, as (factor index, level) pairs,
/// listed by walking the tree without any level relabelling.
fn enumerate(t: &BlockDesign) -> Vec<Vec<u64>> {
    match t {
        BlockDesign::Factor { levels, .. } => (1..=*levels).map(|l| vec![l]).collect(),
        BlockDesign::Nest(a, b) | BlockDesign::Cross(a, b) => {
            let mut out = Vec::new();
            for x in enumerate(a) {
                for y in enumerate(b) {
                    let mut r = x.clone();
                    r.extend(y);
                    out.push(r);
                }
            }
            out
        }
    }
}

fn leaf_count(t: &BlockDesign) -> usize {
    match t {
        BlockDesign::Factor { .. } => 1,
        BlockDesign::Nest(a, b) | BlockDesign::Cross(a, b) => leaf_count(a) + leaf_count(b),
    }
}

proptest! {
    #[test]
    fn row_count_matches_enumeration(tree in arb_tree()) {
        let table = expand_design(&tree).unwrap();
        let oracle = enumerate(&tree);
        prop_assert_eq!(table.nrows(), oracle.len());
        prop_assert_eq!(tree.row_count() as usize, oracle.len());
        prop_assert!(table.rows.iter().all(|r| r.len() == leaf_count(&tree) && r.iter().all(|&v| v >= 1)));
        let distinct: BTreeSet<&Vec<u64>> = table.rows.iter().collect();
        prop_assert_eq!(distinct.len(), table.nrows());
    }

    #[test]
    fn nested_children_have_one_parent(tree in arb_tree()) {
        if let BlockDesign::Nest(a, _) = &tree {
            let table = expand_design(&tree).unwrap();
            let w = leaf_count(a);
            for c in w..table.names.len() {
                let mut parent: BTreeMap<u64, &[u64]> = BTreeMap::new();
                for r in &table.rows {
                    let prev = parent.insert(r[c], &r[..w]);
                    prop_assert!(prev.is_none_or(|p| p == &r[..w]));
                }
            }
        }
    }

    #[test]
    fn expansion_is_deterministic(tree in arb_tree()) {
        let text = tree.to_string();
        let a = expand_design(&parse_nelder(&text).unwrap()).unwrap();
        let b = expand_design(&parse_nelder(&text).unwrap()).unwrap();
        prop_assert_eq!(a, b);
    }

    #[test]
    fn display_then_parse_is_identity(tree in arb_tree()) {
        let again = parse_nelder(&tree.to_string()).unwrap();
        prop_assert_eq!(&again, &tree);
        prop_assert_eq!(parse_nelder(&again.to_string()).unwrap(), tree);
    }
}

#[test]
fn printed_repeated_measures_table() {
    let t = expand_design(&parse_nelder("~(j(4) * t(5)) > i(5)").unwrap()).unwrap();
    assert_eq!(t.names, ["j", "t", "i"]);
    assert_eq!(t.nrows(), 100);
    let first: Vec<Vec<u64>> = t.rows[..6].to_vec();
    assert_eq!(first, [[1, 1, 1], [1, 1, 2], [1, 1, 3], [1, 1, 4], [1, 1, 5], [1, 2, 6]]);
}
