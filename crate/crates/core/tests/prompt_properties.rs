use std::collections::BTreeMap;

use proptest::prelude::*;
use tenet_core::domain::{class_list, ClassLabel, Constitution, Example, MutationOp};
use tenet_core::prompts::{apply_mutation, parse_answer, render_scoring_prompt};

fn classes(n: usize) -> Vec<ClassLabel> {
    let names: Vec<String> = (0..n).map(|i| format!("class{i}")).collect();
    class_list(&names).unwrap()
}

fn principle_text() -> impl Strategy<Value = String> {
    "[a-z][a-z ]{0,30}[a-z.]"
}

fn constitution() -> impl Strategy<Value = (Vec<ClassLabel>, Constitution)> {
    (1usize..4).prop_flat_map(|n| {
        prop::collection::vec(prop::collection::vec(principle_text(), 0..4), n).prop_map(move |lists| {
            let cls = classes(n);
            let mut c = Constitution::empty("Which class fits?", &cls);
            for (id, list) in lists.into_iter().enumerate() {
                for t in list {
                    c = c.with_principle(id, t);
                }
            }
            (cls, c)
        })
    })
}

/// Multiset of (class, text) pairs.
fn bag(c: &Constitution) -> BTreeMap<(usize, String), usize> {
    let mut m = BTreeMap::new();
    for p in c.iter() {
        *m.entry((p.class_id, p.text)).or_default() += 1;
    }
    m
}

fn bag_distance(a: &Constitution, b: &Constitution) -> usize {
    let (x, y) = (bag(a), bag(b));
    let keys: std::collections::BTreeSet<_> = x.keys().chain(y.keys()).collect();
    keys.into_iter()
        .map(|k| x.get(k).copied().unwrap_or(0).abs_diff(y.get(k).copied().unwrap_or(0)))
        .sum()
}

fn op_for(c: &Constitution, n_classes: usize, pick: (usize, usize, u8), text: String) -> MutationOp {
    let class_id = pick.0 % n_classes;
    let len = c.principles_for(class_id).len();
    match (pick.2 % 3, len) {
        (0, _) | (_, 0) => MutationOp::Add { class_id, new_text: text },
        (1, _) => MutationOp::Edit { class_id, index: pick.1 % len, new_text: text },
        _ => MutationOp::Delete { class_id, index: pick.1 % len },
    }
}

proptest! {
    #[test]
    fn one_mutation_changes_one_slot(
        (cls, c) in constitution(),
        pick in (any::<usize>(), any::<usize>(), any::<u8>()),
        text in principle_text(),
    ) {
        let op = op_for(&c, cls.len(), pick, text);
        let next = apply_mutation(&c, &op).unwrap();
        let d = bag_distance(&c, &next);
        match &op {
            MutationOp::Add { .. } => prop_assert_eq!(next.num_principles(), c.num_principles() + 1),
            MutationOp::Delete { .. } => prop_assert_eq!(next.num_principles() + 1, c.num_principles()),
            MutationOp::Edit { .. } => prop_assert_eq!(next.num_principles(), c.num_principles()),
        }
        match &op {
            MutationOp::Edit { class_id, index, new_text } if c.principles_for(*class_id)[*index] == *new_text => {
                prop_assert_eq!(d, 0)
            }
            MutationOp::Edit { .. } => prop_assert_eq!(d, 2),
            _ => prop_assert_eq!(d, 1),
        }
        for other in cls.iter().filter(|k| k.id != op.class_id()) {
            prop_assert_eq!(c.principles_for(other.id), next.principles_for(other.id));
        }
    }

    #[test]
    fn rendering_is_deterministic_and_injective(
        (cls, a) in constitution(),
        pick in (any::<usize>(), any::<usize>(), any::<u8>()),
        text in principle_text(),
        input in "[ -~]{1,40}",
    ) {
        let e = Example::text("x", input, None);
        let first = render_scoring_prompt(&a, &e, &cls);
        prop_assert_eq!(&first, &render_scoring_prompt(&a, &e, &cls));
        let b = apply_mutation(&a, &op_for(&a, cls.len(), pick, text)).unwrap();
        let second = render_scoring_prompt(&b, &e, &cls);
        prop_assert_eq!(a == b, first.text == second.text);
    }

    #[test]
    fn answer_tokens_parse_to_their_id(n in 1usize..12, id in 0usize..12, prefix in "[a-z ]{0,10}") {
        let cls = classes(n);
        let id = id % n;
        prop_assert_eq!(parse_answer(&format!("answer_{id}"), &cls).unwrap(), id);
        prop_assert_eq!(parse_answer(&format!("{prefix} answer_{id}"), &cls).unwrap(), id);
        let unknown = format!("answer_{n}");
        prop_assert!(parse_answer(&unknown, &cls).is_err());
    }
}
