//! Synthetic pretraining stream engineered to grow induction heads and to
//! teach the `x ⇒ y` demonstration format.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fewshot::tasks::{self, TaskKind, ToyFscSpec, ToySlurpSpec};
use crate::lm::vocab::{self, TokenId, Vocab, ARROW, NEWLINE};
use crate::numcore::Prng;

/// Weights of the three corpus components: repeated random segments,
/// rendered demonstrations, plain grammar sentences.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MixWeights {
    pub repeat: f64,
    pub demos: f64,
    pub sentences: f64,
}

impl Default for MixWeights {
    fn default() -> Self {
        Self {
            repeat: 0.6,
            demos: 0.28,
            sentences: 0.12,
        }
    }
}

impl MixWeights {
    pub fn validate(&self) -> Result<()> {
        let w = [self.repeat, self.demos, self.sentences];
        if w.iter().any(|x| !(*x >= 0.0)) || ((w.iter().sum::<f64>()) - 1.0).abs() > 1e-9 {
            return Err(Error::Config(format!("mix weights must be >= 0 and sum to 1: {w:?}")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Component {
    Repeat,
    Demos,
    Sentences,
}

#[derive(Debug, Clone)]
pub struct CorpusGenerator {
    vocab: Vocab,
    fsc: ToyFscSpec,
    slurp: ToySlurpSpec,
    mix: MixWeights,
    seq_len: usize,
    /// Share of demonstration sequences using the JSON slot-filling format.
    slurp_share: f64,
}

impl CorpusGenerator {
    pub fn new(mix: MixWeights, seq_len: usize) -> Result<Self> {
        mix.validate()?;
        if seq_len < 8 {
            return Err(Error::Config(format!("pretraining seq_len {seq_len} too short")));
        }
        Ok(Self {
            vocab: Vocab::default(),
            fsc: ToyFscSpec::default(),
            slurp: ToySlurpSpec::default(),
            mix,
            seq_len,
            slurp_share: 0.3,
        })
    }

    pub fn seq_len(&self) -> usize {
        self.seq_len
    }

    pub fn vocab(&self) -> &Vocab {
        &self.vocab
    }

    /// Draws one sequence of at most `seq_len` tokens.
    pub fn sample(&self, prng: &mut Prng) -> (Component, Vec<TokenId>) {
        let which = prng.weighted(&[self.mix.repeat, self.mix.demos, self.mix.sentences]);
        match which {
            0 => (Component::Repeat, self.repeat_sequence(prng)),
            1 => (Component::Demos, self.demo_sequence(prng)),
            _ => (Component::Sentences, self.sentence_sequence(prng)),
        }
    }

    /// Half the time a random segment of 2 to 24 words repeated back to back
    /// until the sequence is full, newline terminated in half of those.
    /// Otherwise a run of blocks, each a short random segment planted twice
    /// among uniform random filler words.
    pub fn repeat_sequence(&self, prng: &mut Prng) -> Vec<TokenId> {
        let words = self.vocab.word_ids();
        let n_words = (words.end - words.start) as usize;
        let word = |prng: &mut Prng| words.start + prng.below(n_words) as TokenId;
        let mut out = Vec::with_capacity(2 * self.seq_len + 64);
        if prng.bernoulli(0.5) {
            let m = 2 + prng.below(23);
            let segment: Vec<TokenId> = (0..m).map(|_| word(prng)).collect();
            let sep = prng.bernoulli(0.5);
            while out.len() < self.seq_len {
                out.extend_from_slice(&segment);
                if sep {
                    out.push(NEWLINE);
                }
            }
        } else {
            while out.len() < self.seq_len {
                let m = 2 + prng.below(10);
                let segment: Vec<TokenId> = (0..m).map(|_| word(prng)).collect();
                let lead = prng.below(8);
                out.extend((0..lead).map(|_| word(prng)));
                out.extend_from_slice(&segment);
                let gap = prng.below(20);
                out.extend((0..gap).map(|_| word(prng)));
                out.extend_from_slice(&segment);
            }
        }
        out.truncate(self.seq_len);
        out
    }

    /// Instruction line, then `x ⇒ y` lines in one format for the whole
    /// sequence. Command-format keys are drawn at random per sequence while
    /// the instruction stays fixed, so the keys are only learnable from the
    /// lines themselves.
    pub fn demo_sequence(&self, prng: &mut Prng) -> Vec<TokenId> {
        let kind = if prng.bernoulli(self.slurp_share) {
            TaskKind::Slurp
        } else {
            TaskKind::Fsc
        };
        let keys = {
            let mut pool: Vec<TokenId> = vocab::KEY_TOKENS.iter().map(|s| self.vocab.tok(s)).collect();
            prng.shuffle(&mut pool);
            [pool[0], pool[1], pool[2]]
        };
        let mut out = tasks::instruction(&self.vocab, kind);
        loop {
            let (slots, x) = tasks::sample_utterance(kind, &self.vocab, &self.fsc, &self.slurp, prng);
            let y = match &slots {
                tasks::Slots::Fsc(s) => tasks::render_fsc_label(&self.vocab, s, keys),
                tasks::Slots::Slurp(s) => tasks::render_slurp_label(&self.vocab, s),
            };
            out.extend_from_slice(&x);
            out.push(ARROW);
            out.extend_from_slice(&y);
            out.push(NEWLINE);
            if out.len() >= self.seq_len {
                break;
            }
        }
        out.truncate(self.seq_len);
        out
    }

    /// Grammar sentences separated by newlines; each is a repeat of the
    /// previous one with probability one half.
    pub fn sentence_sequence(&self, prng: &mut Prng) -> Vec<TokenId> {
        let mut out = Vec::new();
        let mut prev: Option<Vec<TokenId>> = None;
        while out.len() < self.seq_len {
            let s = match prev.take() {
                Some(p) if prng.bernoulli(0.5) => p,
                _ => {
                    let kind = if prng.bernoulli(0.5) { TaskKind::Fsc } else { TaskKind::Slurp };
                    tasks::sample_utterance(kind, &self.vocab, &self.fsc, &self.slurp, prng).1
                }
            };
            out.extend_from_slice(&s);
            out.push(NEWLINE);
            prev = Some(s);
        }
        out.truncate(self.seq_len);
        out
    }
}
