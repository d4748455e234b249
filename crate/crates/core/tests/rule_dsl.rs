mod support;

use forge_core::episode::{Instance, MetadataRecord};
use forge_core::intent::{
    evaluate, parse_rule, pretty_print, retrieve_by_rule, Rule, RuleError,
};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use support::dsl::{naive_eval, random_rule, random_scene};

#[test]
fn print_parse_fixpoint_on_random_trees() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let scenes: Vec<_> = (0..20).map(|i| random_scene(&mut rng, i)).collect();
    for i in 0..1000 {
        let rule = random_rule(&mut rng, 4, false);
        let text = pretty_print(&rule);
        let parsed = parse_rule(&text).unwrap_or_else(|e| panic!("#{i} {text}: {e}"));
        assert_eq!(parsed, rule, "#{i} {text}");
        assert_eq!(pretty_print(&parsed), text);
        for s in &scenes {
            assert_eq!(evaluate(&parsed, s), evaluate(&rule, s));
        }
    }
}

#[test]
fn evaluator_agrees_with_naive_evaluator() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut disagreements = 0;
    let mut trues = 0;
    for i in 0..1000 {
        let rule = random_rule(&mut rng, 4, false);
        let scene = random_scene(&mut rng, i);
        let got = evaluate(&rule, &scene);
        trues += got as usize;
        if got != naive_eval(&rule, &scene) {
            disagreements += 1;
        }
    }
    assert_eq!(disagreements, 0);
    // both outcomes are exercised
    assert!(trues > 100 && trues < 900, "{trues}");
}

#[test]
fn de_morgan_and_double_negation() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for i in 0..300 {
        let a = random_rule(&mut rng, 2, false);
        let b = random_rule(&mut rng, 2, false);
        let s = random_scene(&mut rng, i);
        let lhs = Rule::not(Rule::And(vec![a.clone(), b.clone()]));
        let rhs = Rule::Or(vec![Rule::not(a.clone()), Rule::not(b.clone())]);
        assert_eq!(evaluate(&lhs, &s), evaluate(&rhs, &s));
        let lhs = Rule::not(Rule::Or(vec![a.clone(), b.clone()]));
        let rhs = Rule::And(vec![Rule::not(a.clone()), Rule::not(b)]);
        assert_eq!(evaluate(&lhs, &s), evaluate(&rhs, &s));
        assert_eq!(evaluate(&Rule::not(Rule::not(a.clone())), &s), evaluate(&a, &s));
    }
}

#[test]
fn exists_is_monotone_in_instances() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for i in 0..300 {
        let body = random_rule(&mut rng, 3, true);
        let rule = Rule::exists(body);
        let mut scene = random_scene(&mut rng, i);
        let before = evaluate(&rule, &scene);
        let extra = random_scene(&mut rng, i + 1000).instances;
        scene.instances.extend(extra);
        if before {
            assert!(evaluate(&rule, &scene));
        }
    }
}

#[test]
fn woman_in_red_query() {
    let rule = parse_rule(
        r#"exists(category == "woman" and color == "red" and bbox within box(0, 0, 0.5, 1))"#,
    )
    .unwrap();
    let inst = |cat: &str, color: &str, bbox| Instance {
        category: cat.into(),
        attributes: [("color".to_string(), color.to_string())].into(),
        bbox,
    };
    let scene = |insts| MetadataRecord {
        scene_id: "s".into(),
        instances: insts,
        ..Default::default()
    };
    assert!(evaluate(&rule, &scene(vec![inst("woman", "red", [0.1, 0.2, 0.3, 0.8])])));
    // attributes split across two instances do not count
    assert!(!evaluate(
        &rule,
        &scene(vec![
            inst("woman", "blue", [0.1, 0.2, 0.3, 0.8]),
            inst("man", "red", [0.1, 0.2, 0.3, 0.8]),
        ])
    ));
    // right half of the frame
    assert!(!evaluate(&rule, &scene(vec![inst("woman", "red", [0.6, 0.2, 0.9, 0.8])])));
    assert!(!evaluate(&rule, &scene(vec![inst("Woman", "red", [0.1, 0.2, 0.3, 0.8])])));
    assert!(!evaluate(&rule, &scene(vec![])));
}

#[test]
fn retrieval_is_an_order_preserving_filter() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let corpus: Vec<_> = (0..200).map(|i| random_scene(&mut rng, i)).collect();
    for _ in 0..50 {
        let rule = random_rule(&mut rng, 3, false);
        let expect: Vec<String> = corpus
            .iter()
            .filter(|s| naive_eval(&rule, s))
            .map(|s| s.scene_id.clone())
            .collect();
        assert_eq!(retrieve_by_rule(&rule, &corpus), expect);
    }
    assert_eq!(retrieve_by_rule(&Rule::True, &corpus).len(), corpus.len());
    assert!(retrieve_by_rule(&Rule::False, &corpus).is_empty());
}

#[test]
fn syntax_and_scope_errors() {
    match parse_rule("a == 1 and (b == 2") {
        Err(RuleError::Syntax { offset, .. }) => assert_eq!(offset, 18),
        other => panic!("{other:?}"),
    }
    for bad in [
        r#"category == "dog""#,
        "bbox within box(0, 0, 1, 1)",
        "exists(exists(a == 1))",
        "exists(bbox within box(0.6, 0, 0.5, 1))",
    ] {
        assert!(matches!(parse_rule(bad), Err(RuleError::Scope(_))), "{bad}");
    }
    for bad in ["", "a ==", "a = 1", "AND", "a == 1 b == 2", "exists a == 1"] {
        assert!(matches!(parse_rule(bad), Err(RuleError::Syntax { .. })), "{bad:?}");
    }
    let deep = format!("{}a == 1{}", "(".repeat(300), ")".repeat(300));
    assert!(parse_rule(&deep).is_err());
}

proptest! {
    #[test]
    fn parser_is_total(s in "\\PC{0,60}") {
        let _ = parse_rule(&s);
    }

    #[test]
    fn parser_is_total_on_rule_alphabet(s in "[a-z()\"=<>!. 0-9,]{0,80}") {
        if let Ok(rule) = parse_rule(&s) {
            prop_assert_eq!(parse_rule(&pretty_print(&rule)).unwrap(), rule);
        }
    }
}
