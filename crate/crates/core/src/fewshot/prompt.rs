//! n-shot prompt plans, their assembly into mixed sequences, and in-context
//! example selection.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fewshot::data::Encoded;
use crate::lm::{LanguageModel, MixedSequence, TokenId, ARROW, NEWLINE};
use crate::numcore::{Prng, Tensor};
use crate::projector::Projector;
use crate::speechsim::cosine;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Modality {
    Text,
    Speech,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Selection {
    /// The first `n` pool examples, in pool order.
    Fixed,
    Random,
    Kate,
}

macro_rules! from_str_lower {
    ($t:ty, $($name:literal => $v:path),+) => {
        impl std::str::FromStr for $t {
            type Err = Error;
            fn from_str(s: &str) -> Result<Self> {
                match s {
                    $($name => Ok($v),)+
                    _ => Err(Error::Config(format!("unknown {} {s:?}", stringify!($t).to_lowercase()))),
                }
            }
        }
        impl $t {
            pub fn name(self) -> &'static str {
                match self {
                    $($v => $name,)+
                }
            }
        }
    };
}

from_str_lower!(Modality, "text" => Modality::Text, "speech" => Modality::Speech);
from_str_lower!(Selection, "fixed" => Selection::Fixed, "random" => Selection::Random, "kate" => Selection::Kate);

/// What stands in for a speech segment when assembling.
#[derive(Debug, Clone, Copy)]
pub enum Bridge<'a> {
    Projector(&'a Projector),
    /// The transcript's own token embeddings.
    OracleSplice(&'a LanguageModel),
}

impl Bridge<'_> {
    fn rows(&self, e: &Encoded) -> Result<Tensor> {
        match self {
            Bridge::Projector(p) => p.project(&e.pooled),
            Bridge::OracleSplice(lm) => lm.embed(&e.example.transcript),
        }
    }
}

#[derive(Debug, Clone)]
pub struct PromptPlan<'a> {
    pub instruction: Vec<TokenId>,
    pub shots: Vec<&'a Encoded>,
    pub query: &'a Encoded,
    /// Modality of the shots.
    pub modality: Modality,
    pub query_modality: Modality,
    pub selection: Selection,
}

impl PromptPlan<'_> {
    /// Closed-form assembled length: instruction, each shot's input, arrow,
    /// label and newline, then query input and arrow.
    pub fn assembled_len(&self) -> usize {
        let input = |e: &Encoded, m: Modality| match m {
            Modality::Text => e.example.transcript.len(),
            Modality::Speech => e.pooled.valid_len,
        };
        self.instruction.len()
            + self
                .shots
                .iter()
                .map(|s| input(s, self.modality) + 1 + s.label.len() + 1)
                .sum::<usize>()
            + input(self.query, self.query_modality)
            + 1
    }
}

/// `instruction ‖ (x ‖ ⇒ ‖ label ‖ \n)… ‖ query ‖ ⇒`, where `x` is either
/// transcript tokens or bridged speech rows.
pub fn assemble(plan: &PromptPlan, bridge: Option<Bridge>, max_seq_len: usize) -> Result<MixedSequence> {
    let len = plan.assembled_len();
    if len > max_seq_len {
        return Err(Error::Overlength { len, max: max_seq_len });
    }
    let mut seq = MixedSequence::new();
    seq.push_tokens(&plan.instruction);
    let push_input = |seq: &mut MixedSequence, e: &Encoded, m: Modality| -> Result<()> {
        match m {
            Modality::Text => {
                seq.push_tokens(&e.example.transcript);
            }
            Modality::Speech => {
                let b = bridge.ok_or_else(|| Error::Config("speech prompts need a projector".into()))?;
                seq.push_embeds(b.rows(e)?);
            }
        }
        Ok(())
    };
    for shot in &plan.shots {
        push_input(&mut seq, shot, plan.modality)?;
        seq.push_tokens(&[ARROW]);
        seq.push_tokens(&shot.label);
        seq.push_tokens(&[NEWLINE]);
    }
    push_input(&mut seq, plan.query, plan.query_modality)?;
    seq.push_tokens(&[ARROW]);
    debug_assert_eq!(seq.len(), len);
    Ok(seq)
}

/// Top-`n` pool indices by cosine similarity of KATE keys, ties to the lower
/// index, ordered so the most similar comes last.
pub fn kate_select(query: &[f64], pool: &[Vec<f64>], n: usize) -> Result<Vec<usize>> {
    if n > pool.len() {
        return Err(Error::Invalid(format!("asked for {n} shots from a pool of {}", pool.len())));
    }
    let mut scored: Vec<(f64, usize)> = pool.iter().enumerate().map(|(i, k)| (cosine(query, k), i)).collect();
    if scored.iter().any(|(s, _)| !s.is_finite()) {
        return Err(Error::Invalid("degenerate KATE embedding".into()));
    }
    scored.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
    let mut picked: Vec<usize> = scored[..n].iter().map(|&(_, i)| i).collect();
    picked.reverse();
    Ok(picked)
}

/// Shot indices into `pool` for one query under `selection`.
pub fn select(selection: Selection, query: &Encoded, pool: &[Encoded], n: usize, prng: &mut Prng) -> Result<Vec<usize>> {
    if n > pool.len() {
        return Err(Error::Invalid(format!("asked for {n} shots from a pool of {}", pool.len())));
    }
    match selection {
        Selection::Fixed => Ok((0..n).collect()),
        Selection::Random => {
            let mut idx: Vec<usize> = (0..pool.len()).collect();
            prng.shuffle(&mut idx);
            idx.truncate(n);
            Ok(idx)
        }
        Selection::Kate => {
            let keys: Vec<Vec<f64>> = pool.iter().map(|e| e.kate.clone()).collect();
            kate_select(&query.kate, &keys, n)
        }
    }
}
