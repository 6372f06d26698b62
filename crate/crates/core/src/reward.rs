//! Rule-based rewards: exact match, edit-distance similarity, and `\boxed{}`
//! answer extraction.

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum RewardKind {
    Exact,
    Levenshtein,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RewardSpec {
    pub kind: RewardKind,
    /// Trim, casefold, and collapse whitespace runs before comparing.
    pub normalize: bool,
}

impl RewardSpec {
    pub fn new(kind: RewardKind) -> Self {
        Self {
            kind,
            normalize: true,
        }
    }
}

pub fn normalize(s: &str) -> String {
    s.split_whitespace()
        .collect::<Vec<_>>()
        .join(" ")
        .to_lowercase()
}

fn prepare<'a>(s: &'a str, spec: &RewardSpec) -> std::borrow::Cow<'a, str> {
    if spec.normalize {
        normalize(s).into()
    } else {
        s.into()
    }
}

const BOXED: &str = "\\boxed{";

/// Contents of the last `\boxed{...}`, matching nested braces. `None` when
/// there is no box or the last one never closes.
pub fn extract_boxed(text: &str) -> Option<String> {
    let start = text.rfind(BOXED)? + BOXED.len();
    let mut depth = 1usize;
    for (i, ch) in text[start..].char_indices() {
        match ch {
            '{' => depth += 1,
            '}' => {
                depth -= 1;
                if depth == 0 {
                    return Some(text[start..start + i].to_string());
                }
            }
            _ => {}
        }
    }
    None
}

pub fn exact_match_reward(pred: &str, target: &str, spec: &RewardSpec) -> f64 {
    if prepare(pred, spec) == prepare(target, spec) {
        1.0
    } else {
        0.0
    }
}

/// Unit-cost edit distance over Unicode scalar values.
pub fn levenshtein_distance(a: &str, b: &str) -> usize {
    let a: Vec<char> = a.chars().collect();
    let b: Vec<char> = b.chars().collect();
    let (a, b) = if a.len() < b.len() { (b, a) } else { (a, b) };
    let mut prev: Vec<usize> = (0..=b.len()).collect();
    let mut cur = vec![0; b.len() + 1];
    for (i, ca) in a.iter().enumerate() {
        cur[0] = i + 1;
        for (j, cb) in b.iter().enumerate() {
            let sub = prev[j] + usize::from(ca != cb);
            cur[j + 1] = sub.min(prev[j + 1] + 1).min(cur[j] + 1);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// `1 − d(pred, target) / max(|pred|, |target|)`; two empty strings score 1.
pub fn levenshtein_reward(pred: &str, target: &str, spec: &RewardSpec) -> f64 {
    let (p, t) = (prepare(pred, spec), prepare(target, spec));
    let longest = p.chars().count().max(t.chars().count());
    if longest == 0 {
        return 1.0;
    }
    let d = levenshtein_distance(&p, &t);
    (1.0 - d as f64 / longest as f64).clamp(0.0, 1.0)
}

pub fn reward(pred: &str, target: &str, spec: &RewardSpec) -> f64 {
    match spec.kind {
        RewardKind::Exact => exact_match_reward(pred, target, spec),
        RewardKind::Levenshtein => levenshtein_reward(pred, target, spec),
    }
}
