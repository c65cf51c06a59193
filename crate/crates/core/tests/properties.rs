//! Property tests over randomly generated prompt trees and schedules.

use compflow::prompt::{
    parse_prompt, render_flat, synthesis_plan, validate_tree, AttributeKind, AttributeNode,
    NodeId, PromptTree, SubjectNode,
};
use compflow::schedule::StochasticitySchedule;
use proptest::prelude::*;
use std::collections::BTreeSet;

fn attribute_strategy() -> impl Strategy<Value = AttributeNode> {
    (
        prop_oneof![
            Just(AttributeKind::Clothing),
            Just(AttributeKind::Holding),
            Just(AttributeKind::Accessory),
        ],
        "[a-z]{3,8}",
        proptest::collection::vec("[a-z]{3,8}", 0..3),
    )
        .prop_map(|(kind, category, qualifiers)| AttributeNode {
            kind,
            text: format!("a {} {category}", qualifiers.join(" ")).replace("  ", " "),
            category,
            qualifiers,
        })
}

fn tree_strategy() -> impl Strategy<Value = PromptTree> {
    let subject = ("[a-z]{3,10}", proptest::collection::vec(attribute_strategy(), 0..3)).prop_map(
        |(label, mut attributes)| {
            // at most one attribute per kind, as the schema produces
            let mut seen = BTreeSet::new();
            attributes.retain(|a| seen.insert(a.kind.render_rank()));
            SubjectNode {
                label,
                level_prompt: String::new(),
                attributes,
            }
        },
    );
    (
        proptest::collection::vec(subject, 1..6),
        proptest::collection::vec("[a-z]{2,7}( [a-z]{2,7})?", 0..5),
    )
        .prop_filter_map("unique labels + connector count", |(subjects, connectors)| {
            let labels: BTreeSet<_> = subjects.iter().map(|s| s.label.clone()).collect();
            if labels.len() != subjects.len() {
                return None;
            }
            if connectors.len() + 1 < subjects.len() {
                return None;
            }
            let connectors = connectors[..subjects.len() - 1].to_vec();
            Some(PromptTree {
                root_text: String::new(),
                root_level_prompt: String::new(),
                subjects,
                connectors,
            })
        })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1000))]

    #[test]
    fn plans_are_always_topological(tree in tree_strategy(), folded in any::<bool>()) {
        prop_assert!(validate_tree(&tree).is_empty());
        let plan = synthesis_plan(&tree, folded).unwrap();
        let mut seen = BTreeSet::new();
        for step in &plan.steps {
            for dep in &step.deps {
                prop_assert!(seen.contains(dep), "dependency {dep} not scheduled before {}", step.target);
            }
            prop_assert!(seen.insert(step.target));
        }
        // the final step targets the root and covers every subject
        prop_assert_eq!(plan.steps.last().unwrap().target, NodeId::Root);
        prop_assert_eq!(plan.steps.last().unwrap().deps.len(), tree.subjects.len());
        // plan length: every subject once, plus attributes unless folded
        let attrs: usize = tree.subjects.iter().map(|s| s.attributes.len()).sum();
        let expected = 1 + tree.subjects.len() + if folded { 0 } else { attrs };
        prop_assert_eq!(plan.steps.len(), expected);
    }

    #[test]
    fn brief_grammar_roundtrips(seed in 0u64..500) {
        // build a brief prompt from the shipped grammar and re-parse it
        let pools = compflow::benchgen::WordPools::default();
        let mut rng = compflow::rng::stream(seed);
        use rand::Rng;
        let n = rng.random_range(1..4usize);
        let specs = compflow::benchgen::generate_subjects(&pools, n, &mut rng).unwrap();
        let subjects: Vec<SubjectNode> = specs
            .iter()
            .map(|s| SubjectNode {
                label: s.subject.clone(),
                level_prompt: String::new(),
                attributes: s
                    .assigned()
                    .iter()
                    .map(|(kind, cat)| AttributeNode {
                        kind: *kind,
                        category: cat.to_string(),
                        text: format!("a {cat}"),
                        qualifiers: vec![],
                    })
                    .collect(),
            })
            .collect();
        let connectors: Vec<String> = (0..n - 1)
            .map(|_| {
                let c = &pools.connectors;
                c[rng.random_range(0..c.len())].clone()
            })
            .collect();
        let tree = PromptTree {
            root_text: String::new(),
            root_level_prompt: String::new(),
            subjects,
            connectors,
        };
        let text = render_flat(&tree);
        let parsed = parse_prompt(&text).unwrap();
        prop_assert_eq!(parsed.subjects.len(), tree.subjects.len());
        for (a, b) in parsed.subjects.iter().zip(&tree.subjects) {
            prop_assert_eq!(&a.label, &b.label);
            prop_assert_eq!(a.attributes.len(), b.attributes.len());
        }
        let rendered = render_flat(&parsed);
        prop_assert_eq!(
            rendered.split_whitespace().collect::<Vec<_>>(),
            text.split_whitespace().collect::<Vec<_>>()
        );
    }

    #[test]
    fn schedule_budget_scales_quadratically(eta in 0.01f64..2.0, t_max in 0.1f64..4.0) {
        let one = StochasticitySchedule::constant(eta, t_max).unwrap().budget();
        let two = StochasticitySchedule::constant(2.0 * eta, t_max).unwrap().budget();
        prop_assert!((two - 4.0 * one).abs() < 1e-9 * two.max(1.0));
        let cos = StochasticitySchedule::cosine_decay(0.0, eta, t_max).unwrap();
        let quad = cos.budget();
        let closed = StochasticitySchedule::cosine_budget_closed_form(0.0, eta, t_max);
        prop_assert!((quad - closed).abs() < 1e-6 * closed.max(1e-9));
    }

    #[test]
    fn cosine_eta_is_monotone_and_bounded(
        emin in 0.0f64..0.5,
        spread in 0.0f64..1.5,
        t_max in 0.2f64..3.0,
        steps in 2usize..40,
    ) {
        let emax = emin + spread;
        let s = StochasticitySchedule::cosine_decay(emin, emax, t_max).unwrap();
        let mut prev = -1.0;
        for k in 0..=steps {
            let t = (t_max * k as f64 / steps as f64).min(t_max);
            let e = s.eta_at(t).unwrap();
            prop_assert!(e >= prev - 1e-12);
            prop_assert!((emin - 1e-12..=emax + 1e-12).contains(&e));
            prev = e;
        }
    }
}
