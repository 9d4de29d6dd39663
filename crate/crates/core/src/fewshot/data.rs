//! Task datasets: examples are stored as transcript, slots and a feature
//! seed; speech features are re-derived from the seed on load.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fewshot::tasks::{self, Slots, TaskKind, ToyFscSpec, ToySlurpSpec};
use crate::lm::{TokenId, Vocab};
use crate::numcore::Prng;
use crate::parallel;
use crate::speechsim::{kate_embed, pool4, Encoder, SpeechFeatures};

/// One dataset line.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Example {
    pub transcript: Vec<TokenId>,
    pub slots: Slots,
    pub feature_seed: u64,
}

impl Example {
    pub fn label(&self, vocab: &Vocab) -> Vec<TokenId> {
        tasks::render_label(vocab, &self.slots)
    }

    pub fn features(&self, encoder: &Encoder) -> Result<SpeechFeatures> {
        encoder.encode(&self.transcript, &mut Prng::new(self.feature_seed))
    }
}

/// An example with its label tokens, pooled features and KATE key.
#[derive(Debug, Clone)]
pub struct Encoded {
    pub example: Example,
    pub label: Vec<TokenId>,
    pub pooled: SpeechFeatures,
    pub kate: Vec<f64>,
}

impl Encoded {
    pub fn new(example: Example, vocab: &Vocab, encoder: &Encoder) -> Result<Self> {
        let raw = example.features(encoder)?;
        Ok(Self {
            label: example.label(vocab),
            pooled: pool4(&raw)?,
            kate: kate_embed(&raw)?,
            example,
        })
    }
}

pub fn encode_all(examples: &[Example], encoder: &Encoder) -> Result<Vec<Encoded>> {
    let vocab = Vocab::default();
    parallel::map(examples, |e| Encoded::new(e.clone(), &vocab, encoder))
        .into_iter()
        .collect()
}

/// `n` iid examples of `kind`; transcripts from the toy grammars.
pub fn gen_task(kind: TaskKind, n: usize, seed: u64) -> Vec<Example> {
    let vocab = Vocab::default();
    let fsc = ToyFscSpec::default();
    let slurp = ToySlurpSpec::default();
    let stream = match kind {
        TaskKind::Fsc => 0x4653_43,
        TaskKind::Slurp => 0x534c_5552,
    };
    let mut rng = Prng::derive(seed, stream);
    (0..n)
        .map(|_| {
            let (slots, transcript) = tasks::sample_utterance(kind, &vocab, &fsc, &slurp, &mut rng);
            Example {
                transcript,
                slots,
                feature_seed: rng.next_u64(),
            }
        })
        .collect()
}

pub fn to_jsonl(examples: &[Example]) -> Result<String> {
    let mut out = String::new();
    for e in examples {
        out.push_str(&serde_json::to_string(e)?);
        out.push('\n');
    }
    Ok(out)
}

pub fn from_jsonl(text: &str) -> Result<Vec<Example>> {
    let vocab = Vocab::default();
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            let e: Example =
                serde_json::from_str(l).map_err(|err| Error::Invalid(format!("dataset line {}: {err}", i + 1)))?;
            vocab.check(&e.transcript)?;
            Ok(e)
        })
        .collect()
}
