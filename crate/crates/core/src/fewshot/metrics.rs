//! Intent accuracy and SLU-F1.
//!
//! SLU-F1 here: within each example, same-type (pred, gold) entity pairs are
//! matched one-to-one, greedily by descending (word-overlap F1, char-overlap
//! F1), ties to lower (pred, gold) index. Each match adds its word F1 and
//! char F1 as partial true positives; precision divides by the number of
//! predicted entities, recall by the number of gold entities, both summed
//! over the corpus. SLU-F1 is the harmonic mean of the word and char F1.
//! Overlap F1 compares multisets of whitespace-separated words or of
//! non-whitespace characters.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fewshot::tasks::{Entity, Slots};

/// Joint exact match: every slot for commands, (scenario, action) for
/// slot-filling intents. `None` predictions (parse failures) are wrong.
pub fn accuracy(preds: &[Option<&Slots>], golds: &[&Slots]) -> Result<f64> {
    if preds.len() != golds.len() {
        return Err(Error::Invalid(format!(
            "accuracy over {} predictions and {} golds",
            preds.len(),
            golds.len()
        )));
    }
    if golds.is_empty() {
        return Err(Error::Invalid("accuracy over an empty set".into()));
    }
    let hits = preds.iter().zip(golds).filter(|(p, g)| p.is_some_and(|p| intent_match(p, g))).count();
    Ok(hits as f64 / golds.len() as f64)
}

pub fn intent_match(pred: &Slots, gold: &Slots) -> bool {
    match (pred, gold) {
        (Slots::Fsc(p), Slots::Fsc(g)) => p == g,
        (Slots::Slurp(p), Slots::Slurp(g)) => p.scenario == g.scenario && p.action == g.action,
        _ => false,
    }
}

fn overlap_f1<T: std::hash::Hash + Eq>(pred: impl Iterator<Item = T>, gold: impl Iterator<Item = T>) -> f64 {
    let mut counts: HashMap<T, i64> = HashMap::new();
    let mut np = 0usize;
    for t in pred {
        *counts.entry(t).or_default() += 1;
        np += 1;
    }
    let mut ng = 0usize;
    let mut common = 0usize;
    for t in gold {
        ng += 1;
        if let Some(c) = counts.get_mut(&t) {
            if *c > 0 {
                *c -= 1;
                common += 1;
            }
        }
    }
    // 2PR/(P+R) with P = c/np, R = c/ng, in one rounding.
    if common == 0 {
        return 0.0;
    }
    2.0 * common as f64 / (np + ng) as f64
}

pub fn word_f1(pred: &str, gold: &str) -> f64 {
    overlap_f1(pred.split_whitespace(), gold.split_whitespace())
}

pub fn char_f1(pred: &str, gold: &str) -> f64 {
    overlap_f1(pred.chars().filter(|c| !c.is_whitespace()), gold.chars().filter(|c| !c.is_whitespace()))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SluF1 {
    pub word_f1: f64,
    pub char_f1: f64,
    pub slu_f1: f64,
}

/// F1 from partial true positives; nothing predicted and nothing expected
/// scores 1.
fn prf(tp: f64, n_pred: usize, n_gold: usize) -> f64 {
    if n_pred + n_gold == 0 {
        return 1.0;
    }
    2.0 * tp / (n_pred + n_gold) as f64
}

/// Corpus-level SLU-F1 over `(pred entities, gold entities)` per example.
pub fn slu_f1(examples: &[(Vec<Entity>, Vec<Entity>)]) -> SluF1 {
    let (mut tw, mut tc) = (0.0, 0.0);
    let (mut np, mut ng) = (0, 0);
    for (pred, gold) in examples {
        np += pred.len();
        ng += gold.len();
        let mut cands = Vec::new();
        for (i, p) in pred.iter().enumerate() {
            for (j, g) in gold.iter().enumerate() {
                if p.kind == g.kind {
                    cands.push((word_f1(&p.filler, &g.filler), char_f1(&p.filler, &g.filler), i, j));
                }
            }
        }
        cands.sort_by(|a, b| {
            b.0.total_cmp(&a.0)
                .then(b.1.total_cmp(&a.1))
                .then(a.2.cmp(&b.2))
                .then(a.3.cmp(&b.3))
        });
        let mut used_p = vec![false; pred.len()];
        let mut used_g = vec![false; gold.len()];
        for (w, c, i, j) in cands {
            if used_p[i] || used_g[j] {
                continue;
            }
            used_p[i] = true;
            used_g[j] = true;
            tw += w;
            tc += c;
        }
    }
    let word = prf(tw, np, ng);
    let chr = prf(tc, np, ng);
    let slu = if word + chr > 0.0 { 2.0 * word * chr / (word + chr) } else { 0.0 };
    SluF1 {
        word_f1: word,
        char_f1: chr,
        slu_f1: slu,
    }
}
