use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::error::{Error, Result};
use crate::lm::vocab::TokenId;
use crate::numcore::{argmax, Prng, Tape, Tensor, Var};

pub const LN_EPS: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LmConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub max_seq_len: usize,
    pub seed: u64,
}

impl Default for LmConfig {
    fn default() -> Self {
        Self {
            vocab_size: 64,
            d_model: 64,
            n_layers: 2,
            n_heads: 2,
            d_ff: 256,
            max_seq_len: 512,
            seed: 1,
        }
    }
}

impl LmConfig {
    pub fn validate(&self) -> Result<()> {
        if self.vocab_size == 0 || self.d_model == 0 || self.n_layers == 0 || self.d_ff == 0 {
            return Err(Error::Config(format!("degenerate LM dimensions {self:?}")));
        }
        if self.n_heads == 0 || self.d_model % self.n_heads != 0 {
            return Err(Error::Config(format!(
                "d_model {} not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if self.max_seq_len == 0 {
            return Err(Error::Config("max_seq_len must be positive".into()));
        }
        Ok(())
    }
}

/// One piece of LM input: token ids looked up in the embedding table, or
/// precomputed embedding rows spliced in as-is.
#[derive(Debug, Clone, PartialEq)]
pub enum Segment {
    Tokens(Vec<TokenId>),
    Embeds { rows: Tensor, tag: String },
}

impl Segment {
    pub fn len(&self) -> usize {
        match self {
            Segment::Tokens(t) => t.len(),
            Segment::Embeds { rows, .. } => rows.rows(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn speech(rows: Tensor) -> Self {
        Segment::Embeds {
            rows,
            tag: "speech".into(),
        }
    }
}

/// Ordered token and embedding segments forming one LM input.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct MixedSequence {
    pub segments: Vec<Segment>,
}

impl MixedSequence {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn tokens(ids: Vec<TokenId>) -> Self {
        Self {
            segments: vec![Segment::Tokens(ids)],
        }
    }

    pub fn push_tokens(&mut self, ids: &[TokenId]) -> &mut Self {
        if ids.is_empty() {
            return self;
        }
        match self.segments.last_mut() {
            Some(Segment::Tokens(t)) => t.extend_from_slice(ids),
            _ => self.segments.push(Segment::Tokens(ids.to_vec())),
        }
        self
    }

    pub fn push_embeds(&mut self, rows: Tensor) -> &mut Self {
        self.segments.push(Segment::speech(rows));
        self
    }

    pub fn len(&self) -> usize {
        self.segments.iter().map(Segment::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn has_embeds(&self) -> bool {
        self.segments
            .iter()
            .any(|s| matches!(s, Segment::Embeds { .. }))
    }

    /// Token id at each position, `None` where the position holds an
    /// embedding row.
    pub fn token_at(&self) -> Vec<Option<TokenId>> {
        let mut out = Vec::with_capacity(self.len());
        for s in &self.segments {
            match s {
                Segment::Tokens(t) => out.extend(t.iter().map(|&x| Some(x))),
                Segment::Embeds { rows, .. } => out.extend(std::iter::repeat_n(None, rows.rows())),
            }
        }
        out
    }
}

/// Tape-level input segment.
#[derive(Debug, Clone, Copy)]
pub enum TapeSegment<'a> {
    Tokens(&'a [TokenId]),
    Embeds(Var),
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerWeights {
    pub ln1_g: Tensor,
    pub ln1_b: Tensor,
    pub w_qkv: Tensor,
    pub w_o: Tensor,
    pub ln2_g: Tensor,
    pub ln2_b: Tensor,
    pub w_fc1: Tensor,
    pub b_fc1: Tensor,
    pub w_fc2: Tensor,
    pub b_fc2: Tensor,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LmWeights {
    pub tok_emb: Tensor,
    pub pos_emb: Tensor,
    pub layers: Vec<LayerWeights>,
    pub lnf_g: Tensor,
    pub lnf_b: Tensor,
    pub w_out: Tensor,
}

struct LayerVars {
    ln1_g: Var,
    ln1_b: Var,
    w_qkv: Var,
    w_o: Var,
    ln2_g: Var,
    ln2_b: Var,
    w_fc1: Var,
    b_fc1: Var,
    w_fc2: Var,
    b_fc2: Var,
}

/// The LM's weights recorded as leaves on one tape.
pub struct LmBinding {
    tok_emb: Var,
    pos_emb: Var,
    layers: Vec<LayerVars>,
    lnf_g: Var,
    lnf_b: Var,
    w_out: Var,
    vars: Vec<Var>,
}

impl LmBinding {
    /// Leaf vars in [`LmWeights::named`] order.
    pub fn vars(&self) -> &[Var] {
        &self.vars
    }
}

impl LmWeights {
    pub fn init(cfg: &LmConfig) -> Self {
        let mut rng = Prng::derive(cfg.seed, 0x4c4d);
        let d = cfg.d_model;
        let resid_scale = 1.0 / ((2 * cfg.n_layers) as f64).sqrt();
        let w = |shape: Vec<usize>, std: f64, rng: &mut Prng| Tensor::randn(shape, std, rng);
        let tok_emb = w(vec![cfg.vocab_size, d], 1.0, &mut rng);
        let pos_emb = w(vec![cfg.max_seq_len, d], 0.5, &mut rng);
        let layers = (0..cfg.n_layers)
            .map(|_| LayerWeights {
                ln1_g: Tensor::full(vec![d], 1.0),
                ln1_b: Tensor::zeros(vec![d]),
                w_qkv: w(vec![d, 3 * d], 1.0 / (d as f64).sqrt(), &mut rng),
                w_o: w(vec![d, d], resid_scale / (d as f64).sqrt(), &mut rng),
                ln2_g: Tensor::full(vec![d], 1.0),
                ln2_b: Tensor::zeros(vec![d]),
                w_fc1: w(vec![d, cfg.d_ff], 1.0 / (d as f64).sqrt(), &mut rng),
                b_fc1: Tensor::zeros(vec![cfg.d_ff]),
                w_fc2: w(vec![cfg.d_ff, d], resid_scale / (cfg.d_ff as f64).sqrt(), &mut rng),
                b_fc2: Tensor::zeros(vec![d]),
            })
            .collect();
        Self {
            tok_emb,
            pos_emb,
            layers,
            lnf_g: Tensor::full(vec![d], 1.0),
            lnf_b: Tensor::zeros(vec![d]),
            w_out: w(vec![d, cfg.vocab_size], 1.0 / (d as f64).sqrt(), &mut rng),
        }
    }

    /// Stable (name, tensor) listing used for checkpoints, hashing and the
    /// optimizer.
    pub fn named(&self) -> Vec<(String, &Tensor)> {
        let mut out = vec![
            ("tok_emb".to_string(), &self.tok_emb),
            ("pos_emb".to_string(), &self.pos_emb),
        ];
        for (i, l) in self.layers.iter().enumerate() {
            for (n, t) in [
                ("ln1_g", &l.ln1_g),
                ("ln1_b", &l.ln1_b),
                ("w_qkv", &l.w_qkv),
                ("w_o", &l.w_o),
                ("ln2_g", &l.ln2_g),
                ("ln2_b", &l.ln2_b),
                ("w_fc1", &l.w_fc1),
                ("b_fc1", &l.b_fc1),
                ("w_fc2", &l.w_fc2),
                ("b_fc2", &l.b_fc2),
            ] {
                out.push((format!("layers.{i}.{n}"), t));
            }
        }
        out.push(("lnf_g".into(), &self.lnf_g));
        out.push(("lnf_b".into(), &self.lnf_b));
        out.push(("w_out".into(), &self.w_out));
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = vec![&mut self.tok_emb, &mut self.pos_emb];
        for l in &mut self.layers {
            out.extend([
                &mut l.ln1_g,
                &mut l.ln1_b,
                &mut l.w_qkv,
                &mut l.w_o,
                &mut l.ln2_g,
                &mut l.ln2_b,
                &mut l.w_fc1,
                &mut l.b_fc1,
                &mut l.w_fc2,
                &mut l.b_fc2,
            ]);
        }
        out.extend([&mut self.lnf_g, &mut self.lnf_b, &mut self.w_out]);
        out
    }

    /// Rebuilds weights from a name lookup, checking every shape against
    /// `cfg`.
    pub fn from_named(cfg: &LmConfig, mut get: impl FnMut(&str) -> Result<Tensor>) -> Result<Self> {
        let mut w = Self::init(cfg);
        let names: Vec<String> = w.named().into_iter().map(|(n, _)| n).collect();
        for (name, slot) in names.iter().zip(w.tensors_mut()) {
            let t = get(name)?;
            if t.shape() != slot.shape() {
                return Err(Error::Checkpoint(format!(
                    "tensor {name} has shape {:?}, config expects {:?}",
                    t.shape(),
                    slot.shape()
                )));
            }
            *slot = t;
        }
        Ok(w)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LanguageModel {
    pub config: LmConfig,
    pub weights: LmWeights,
}

impl LanguageModel {
    pub fn new(config: LmConfig) -> Result<Self> {
        config.validate()?;
        let weights = LmWeights::init(&config);
        Ok(Self { config, weights })
    }

    pub fn d_model(&self) -> usize {
        self.config.d_model
    }

    pub fn to_checkpoint(&self) -> Result<Checkpoint> {
        Ok(Checkpoint::new("lm", serde_json::to_value(&self.config)?, self.weights.named()))
    }

    pub fn from_checkpoint(c: &Checkpoint) -> Result<Self> {
        c.expect_kind("lm")?;
        let config: LmConfig =
            serde_json::from_value(c.config.clone()).map_err(|e| Error::Checkpoint(format!("lm config: {e}")))?;
        config.validate()?;
        let weights = LmWeights::from_named(&config, |n| c.get(n))?;
        Ok(Self { config, weights })
    }

    pub fn vocab_size(&self) -> usize {
        self.config.vocab_size
    }

    /// Records the weights on `tape`; `trainable` controls gradient tracking.
    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> LmBinding {
        let mut vars = Vec::new();
        let mut leaf = |t: &Tensor| {
            let v = tape.input(t, trainable);
            vars.push(v);
            v
        };
        let w = &self.weights;
        let tok_emb = leaf(&w.tok_emb);
        let pos_emb = leaf(&w.pos_emb);
        let layers = w
            .layers
            .iter()
            .map(|l| LayerVars {
                ln1_g: leaf(&l.ln1_g),
                ln1_b: leaf(&l.ln1_b),
                w_qkv: leaf(&l.w_qkv),
                w_o: leaf(&l.w_o),
                ln2_g: leaf(&l.ln2_g),
                ln2_b: leaf(&l.ln2_b),
                w_fc1: leaf(&l.w_fc1),
                b_fc1: leaf(&l.b_fc1),
                w_fc2: leaf(&l.w_fc2),
                b_fc2: leaf(&l.b_fc2),
            })
            .collect();
        let lnf_g = leaf(&w.lnf_g);
        let lnf_b = leaf(&w.lnf_b);
        let w_out = leaf(&w.w_out);
        LmBinding {
            tok_emb,
            pos_emb,
            layers,
            lnf_g,
            lnf_b,
            w_out,
            vars,
        }
    }

    /// Token embedding rows (before positional terms).
    pub fn embed(&self, tokens: &[TokenId]) -> Result<Tensor> {
        let v = self.config.vocab_size;
        let d = self.config.d_model;
        let mut data = Vec::with_capacity(tokens.len() * d);
        for &t in tokens {
            if t as usize >= v {
                return Err(Error::TokenRange { id: t, vocab: v });
            }
            data.extend_from_slice(self.weights.tok_emb.row(t as usize));
        }
        Tensor::new(vec![tokens.len(), d], data)
    }

    /// Causal decoder forward on a tape; returns `[L, V]` logits.
    pub fn forward_tape(&self, tape: &mut Tape, b: &LmBinding, input: &[TapeSegment]) -> Result<Var> {
        let d = self.config.d_model;
        let v = self.config.vocab_size;
        let mut parts = Vec::with_capacity(input.len());
        for seg in input {
            match *seg {
                TapeSegment::Tokens(ids) if ids.is_empty() => {}
                TapeSegment::Tokens(ids) => {
                    let mut rows = Vec::with_capacity(ids.len());
                    for &t in ids {
                        if t as usize >= v {
                            return Err(Error::TokenRange { id: t, vocab: v });
                        }
                        rows.push(t as usize);
                    }
                    parts.push(tape.gather_rows(b.tok_emb, &rows)?);
                }
                TapeSegment::Embeds(var) => {
                    if tape.shape(var).len() != 2 || tape.shape(var)[1] != d {
                        return Err(Error::shape(
                            "forward",
                            format!("embedding segment {:?} for d_model {d}", tape.shape(var)),
                        ));
                    }
                    if tape.shape(var)[0] > 0 {
                        parts.push(var);
                    }
                }
            }
        }
        let len: usize = parts.iter().map(|p| tape.shape(*p)[0]).sum();
        if len == 0 {
            return Err(Error::Invalid("forward on an empty sequence".into()));
        }
        if len > self.config.max_seq_len {
            return Err(Error::Overlength {
                len,
                max: self.config.max_seq_len,
            });
        }
        let emb = if parts.len() == 1 {
            parts[0]
        } else {
            tape.concat_rows(&parts)?
        };
        let positions: Vec<usize> = (0..len).collect();
        let pos = tape.gather_rows(b.pos_emb, &positions)?;
        let mut x = tape.add(emb, pos)?;
        for l in &b.layers {
            let h = tape.layer_norm(x, l.ln1_g, l.ln1_b, LN_EPS)?;
            let qkv = tape.matmul(h, l.w_qkv)?;
            let att = tape.causal_attention(qkv, self.config.n_heads)?;
            let proj = tape.matmul(att, l.w_o)?;
            x = tape.add(x, proj)?;
            let h = tape.layer_norm(x, l.ln2_g, l.ln2_b, LN_EPS)?;
            let f = tape.matmul(h, l.w_fc1)?;
            let f = tape.add_row(f, l.b_fc1)?;
            let f = tape.gelu(f);
            let f = tape.matmul(f, l.w_fc2)?;
            let f = tape.add_row(f, l.b_fc2)?;
            x = tape.add(x, f)?;
        }
        let h = tape.layer_norm(x, b.lnf_g, b.lnf_b, LN_EPS)?;
        tape.matmul(h, b.w_out)
    }

    /// Gradient-free forward of a mixed sequence; `[L, V]` logits.
    pub fn forward(&self, seq: &MixedSequence) -> Result<Tensor> {
        let mut tape = Tape::new();
        let b = self.bind(&mut tape, false);
        let mut segs = Vec::with_capacity(seq.segments.len());
        for s in &seq.segments {
            segs.push(match s {
                Segment::Tokens(t) => TapeSegment::Tokens(t),
                Segment::Embeds { rows, .. } => TapeSegment::Embeds(tape.input(rows, false)),
            });
        }
        let logits = self.forward_tape(&mut tape, &b, &segs)?;
        Ok(tape.tensor(logits))
    }

    pub fn forward_tokens(&self, tokens: &[TokenId]) -> Result<Tensor> {
        self.forward(&MixedSequence::tokens(tokens.to_vec()))
    }

    /// Argmax decoding until `stop` (excluded) or `max_new` tokens.
    pub fn greedy_generate(&self, prefix: &MixedSequence, stop: TokenId, max_new: usize) -> Result<Vec<TokenId>> {
        if prefix.is_empty() {
            return Err(Error::Invalid("greedy_generate needs a nonempty prefix".into()));
        }
        let mut seq = prefix.clone();
        let mut out = Vec::new();
        for _ in 0..max_new {
            let logits = self.forward(&seq)?;
            let next = argmax(logits.row(logits.rows() - 1)) as TokenId;
            if next == stop {
                break;
            }
            out.push(next);
            seq.push_tokens(&[next]);
        }
        Ok(out)
    }
}
