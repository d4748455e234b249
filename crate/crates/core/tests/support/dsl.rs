//! Random rule and scene generators plus a set-based naive evaluator.

use std::collections::{BTreeMap, BTreeSet};

use forge_core::episode::{Instance, MetadataRecord};
use forge_core::intent::{CmpOp, Literal, Rule};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

pub const FIELDS: &[&str] = &["color", "size", "count", "mood", "pose_2"];
pub const WORDS: &[&str] = &["red", "blue", "3", "4.5", "", "Red", " 2 ", "a\"b", "x\\y", "-1"];
pub const CATEGORIES: &[&str] = &["woman", "man", "dog"];

pub fn literal(rng: &mut ChaCha8Rng) -> Literal {
    if rng.random_bool(0.5) {
        Literal::Str(WORDS[rng.random_range(0..WORDS.len())].to_string())
    } else {
        let choices = [3.0, 4.5, -1.0, 0.0, 2.0, 1e-3, 12.25];
        Literal::Num(choices[rng.random_range(0..choices.len())])
    }
}

pub fn op(rng: &mut ChaCha8Rng) -> CmpOp {
    CmpOp::ALL[rng.random_range(0..6)]
}

pub fn random_box(rng: &mut ChaCha8Rng) -> [f64; 4] {
    let mut xs = [rng.random_range(0..=8) as f64 / 8.0, rng.random_range(0..=8) as f64 / 8.0];
    let mut ys = [rng.random_range(0..=8) as f64 / 8.0, rng.random_range(0..=8) as f64 / 8.0];
    xs.sort_by(f64::total_cmp);
    ys.sort_by(f64::total_cmp);
    [xs[0], ys[0], xs[1], ys[1]]
}

/// Random well-scoped rule. `in_scope` marks the body of an `exists`.
pub fn random_rule(rng: &mut ChaCha8Rng, depth: usize, in_scope: bool) -> Rule {
    let leaf = depth == 0 || rng.random_bool(0.3);
    if leaf {
        return match rng.random_range(0..10) {
            0 => Rule::True,
            1 => Rule::False,
            2 if in_scope => Rule::Within { bbox: random_box(rng) },
            3 if in_scope => Rule::pred(
                "category",
                op(rng),
                Literal::Str(CATEGORIES[rng.random_range(0..3)].into()),
            ),
            _ => Rule::pred(FIELDS[rng.random_range(0..FIELDS.len())], op(rng), literal(rng)),
        };
    }
    match rng.random_range(0..4) {
        0 => Rule::not(random_rule(rng, depth - 1, in_scope)),
        1 | 2 => {
            let n = rng.random_range(2..=4);
            let kids = (0..n).map(|_| random_rule(rng, depth - 1, in_scope)).collect();
            if rng.random_bool(0.5) {
                Rule::And(kids)
            } else {
                Rule::Or(kids)
            }
        }
        _ if !in_scope => Rule::exists(random_rule(rng, depth - 1, true)),
        _ => Rule::not(random_rule(rng, depth - 1, in_scope)),
    }
}

pub fn random_scene(rng: &mut ChaCha8Rng, id: usize) -> MetadataRecord {
    let attrs = |rng: &mut ChaCha8Rng| {
        let mut m = BTreeMap::new();
        for f in FIELDS {
            if rng.random_bool(0.6) {
                m.insert(f.to_string(), WORDS[rng.random_range(0..WORDS.len())].to_string());
            }
        }
        m
    };
    let instances = (0..rng.random_range(0..4))
        .map(|_| Instance {
            category: CATEGORIES[rng.random_range(0..3)].into(),
            attributes: attrs(rng),
            bbox: random_box(rng),
        })
        .collect();
    MetadataRecord {
        scene_id: format!("s{id}"),
        instances,
        scene_attributes: attrs(rng),
        scores: BTreeMap::new(),
    }
}

// ---------------------------------------------------------------------------
// Naive evaluator: scopes are evaluated as sets of matching instance indices.
// ---------------------------------------------------------------------------

pub fn naive_cmp(value: Option<&String>, op: CmpOp, lit: &Literal) -> bool {
    let Some(value) = value else {
        return matches!(op, CmpOp::Ne);
    };
    let ord = match lit {
        Literal::Str(s) => value.as_bytes().cmp(s.as_bytes()),
        Literal::Num(n) => match value.trim().parse::<f64>() {
            Ok(v) if v.is_finite() => match v.partial_cmp(n) {
                Some(o) => o,
                None => return false,
            },
            _ => return false,
        },
    };
    use std::cmp::Ordering::*;
    match op {
        CmpOp::Eq => ord == Equal,
        CmpOp::Ne => ord != Equal,
        CmpOp::Lt => ord == Less,
        CmpOp::Le => ord != Greater,
        CmpOp::Gt => ord == Greater,
        CmpOp::Ge => ord != Less,
    }
}

pub fn matching(rule: &Rule, insts: &[Instance]) -> BTreeSet<usize> {
    let all: BTreeSet<usize> = (0..insts.len()).collect();
    match rule {
        Rule::True => all,
        Rule::False => BTreeSet::new(),
        Rule::Not(x) => all.difference(&matching(x, insts)).copied().collect(),
        Rule::And(xs) => xs.iter().fold(all, |acc, x| acc.intersection(&matching(x, insts)).copied().collect()),
        Rule::Or(xs) => xs
            .iter()
            .fold(BTreeSet::new(), |acc, x| acc.union(&matching(x, insts)).copied().collect()),
        Rule::Pred { field, op, literal } => all
            .into_iter()
            .filter(|&i| {
                let cat = insts[i].category.clone();
                let v = if field == "category" { Some(&cat) } else { insts[i].attributes.get(field) };
                naive_cmp(v, *op, literal)
            })
            .collect(),
        Rule::Within { bbox } => all
            .into_iter()
            .filter(|&i| {
                let b = insts[i].bbox;
                let cx = (b[0] + b[2]) / 2.0;
                let cy = (b[1] + b[3]) / 2.0;
                bbox[0] <= cx && cx <= bbox[2] && bbox[1] <= cy && cy <= bbox[3]
            })
            .collect(),
        Rule::Exists(_) => unreachable!("generator never nests scopes"),
    }
}

pub fn naive_eval(rule: &Rule, m: &MetadataRecord) -> bool {
    match rule {
        Rule::True => true,
        Rule::False => false,
        Rule::Not(x) => !naive_eval(x, m),
        Rule::And(xs) => !xs.iter().any(|x| !naive_eval(x, m)),
        Rule::Or(xs) => xs.iter().any(|x| naive_eval(x, m)),
        Rule::Exists(body) => !matching(body, &m.instances).is_empty(),
        Rule::Pred { field, op, literal } => naive_cmp(m.scene_attributes.get(field), *op, literal),
        Rule::Within { .. } => unreachable!(),
    }
}
