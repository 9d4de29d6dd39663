//! Frozen synthetic "speech" encoder.
//!
//! Each token owns `k` codebook frames of width `d_s`; a transcript encodes
//! to the concatenation of its tokens' frames plus iid Gaussian noise, then
//! zero padding up to a fixed frame budget. Consumers read only the first
//! `valid_len` frames.

use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::error::{Error, Result};
use crate::lm::TokenId;
use crate::numcore::{Prng, Tensor};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EncoderConfig {
    /// Feature width.
    pub d_s: usize,
    /// Frames per token.
    pub k: usize,
    pub noise_sigma: f64,
    pub codebook_seed: u64,
    /// Frame budget; shorter inputs are zero padded up to it.
    pub pad_to: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            d_s: 64,
            k: 4,
            noise_sigma: 0.1,
            codebook_seed: 7,
            pad_to: 48,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d_s == 0 || self.k == 0 || !(self.noise_sigma >= 0.0) {
            return Err(Error::Config(format!("invalid encoder config {self:?}")));
        }
        Ok(())
    }
}

/// Frame matrix plus the number of leading valid frames.
#[derive(Debug, Clone, PartialEq)]
pub struct SpeechFeatures {
    pub frames: Tensor,
    pub valid_len: usize,
}

impl SpeechFeatures {
    pub fn new(frames: Tensor, valid_len: usize) -> Result<Self> {
        if frames.shape().len() != 2 || valid_len > frames.rows() {
            return Err(Error::shape(
                "speech_features",
                format!("valid_len {valid_len} for frames {:?}", frames.shape()),
            ));
        }
        Ok(Self { frames, valid_len })
    }

    pub fn dim(&self) -> usize {
        self.frames.cols()
    }

    pub fn total_frames(&self) -> usize {
        self.frames.rows()
    }

    pub fn valid_frame(&self, i: usize) -> &[f64] {
        self.frames.row(i)
    }

    /// The valid frames as a standalone `[valid_len, d]` tensor.
    pub fn valid(&self) -> Tensor {
        let d = self.dim();
        Tensor::new(
            vec![self.valid_len, d],
            self.frames.data()[..self.valid_len * d].to_vec(),
        )
        .expect("valid frames are finite")
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Encoder {
    config: EncoderConfig,
    /// `[V, k, d_s]`, never updated after construction.
    codebook: Tensor,
}

impl Encoder {
    pub fn new(config: EncoderConfig, vocab_size: usize) -> Result<Self> {
        config.validate()?;
        let mut rng = Prng::derive(config.codebook_seed, 0x5350);
        let std = 1.0 / (config.d_s as f64).sqrt();
        let codebook = Tensor::randn(vec![vocab_size, config.k, config.d_s], std, &mut rng);
        Ok(Self { config, codebook })
    }

    pub fn from_codebook(config: EncoderConfig, codebook: Tensor) -> Result<Self> {
        config.validate()?;
        if codebook.shape().len() != 3 || codebook.shape()[1..] != [config.k, config.d_s] {
            return Err(Error::Checkpoint(format!(
                "codebook shape {:?} does not match k={} d_s={}",
                codebook.shape(),
                config.k,
                config.d_s
            )));
        }
        Ok(Self { config, codebook })
    }

    pub fn to_checkpoint(&self) -> Result<Checkpoint> {
        Ok(Checkpoint::new(
            "encoder",
            serde_json::to_value(&self.config)?,
            vec![("codebook".to_string(), &self.codebook)],
        ))
    }

    pub fn from_checkpoint(c: &Checkpoint) -> Result<Self> {
        c.expect_kind("encoder")?;
        let config: EncoderConfig =
            serde_json::from_value(c.config.clone()).map_err(|e| Error::Checkpoint(format!("encoder config: {e}")))?;
        Self::from_codebook(config, c.get("codebook")?)
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.config
    }

    pub fn codebook(&self) -> &Tensor {
        &self.codebook
    }

    pub fn vocab_size(&self) -> usize {
        self.codebook.shape()[0]
    }

    fn token_frames(&self, id: TokenId) -> &[f64] {
        let span = self.config.k * self.config.d_s;
        &self.codebook.data()[id as usize * span..(id as usize + 1) * span]
    }

    /// Codebook frames plus `N(0, σ²)` noise; `valid_len = k·I`.
    pub fn encode(&self, transcript: &[TokenId], prng: &mut Prng) -> Result<SpeechFeatures> {
        if transcript.is_empty() {
            return Err(Error::Invalid("cannot encode an empty transcript".into()));
        }
        let v = self.vocab_size();
        if let Some(&id) = transcript.iter().find(|&&t| t as usize >= v) {
            return Err(Error::TokenRange { id, vocab: v });
        }
        let d = self.config.d_s;
        let valid_len = self.config.k * transcript.len();
        let total = valid_len.max(self.config.pad_to);
        let mut data = vec![0.0; total * d];
        let sigma = self.config.noise_sigma;
        for (i, &t) in transcript.iter().enumerate() {
            let span = self.config.k * d;
            let dst = &mut data[i * span..(i + 1) * span];
            dst.copy_from_slice(self.token_frames(t));
            if sigma > 0.0 {
                dst.iter_mut().for_each(|x| *x += sigma * prng.normal());
            }
        }
        SpeechFeatures::new(Tensor::new(vec![total, d], data)?, valid_len)
    }

    /// Nearest-codebook decoding of each `k`-frame block (squared
    /// Euclidean distance over the block).
    pub fn decode_nearest(&self, f: &SpeechFeatures) -> Vec<TokenId> {
        let span = self.config.k * self.config.d_s;
        let n = f.valid_len / self.config.k;
        (0..n)
            .map(|i| {
                let block = &f.frames.data()[i * span..(i + 1) * span];
                let mut best = (f64::INFINITY, 0);
                for t in 0..self.vocab_size() {
                    let dist: f64 = block
                        .iter()
                        .zip(self.token_frames(t as TokenId))
                        .map(|(a, b)| (a - b) * (a - b))
                        .sum();
                    if dist < best.0 {
                        best = (dist, t);
                    }
                }
                best.1 as TokenId
            })
            .collect()
    }
}

/// Non-overlapping mean over groups of 4 valid frames; the final partial
/// group is averaged over its actual size. Padding rows never enter a mean
/// and the output keeps zero padding proportional to the input's.
pub fn pool4(f: &SpeechFeatures) -> Result<SpeechFeatures> {
    const STRIDE: usize = 4;
    if f.valid_len == 0 {
        return Err(Error::Invalid("pool4 on features with no valid frames".into()));
    }
    let d = f.dim();
    let valid_out = f.valid_len.div_ceil(STRIDE);
    let total_out = f.total_frames().div_ceil(STRIDE).max(valid_out);
    let mut data = vec![0.0; total_out * d];
    for g in 0..valid_out {
        let start = g * STRIDE;
        let end = (start + STRIDE).min(f.valid_len);
        let dst = &mut data[g * d..(g + 1) * d];
        for r in start..end {
            dst.iter_mut().zip(f.frames.row(r)).for_each(|(a, b)| *a += b);
        }
        let n = (end - start) as f64;
        dst.iter_mut().for_each(|a| *a /= n);
    }
    SpeechFeatures::new(Tensor::new(vec![total_out, d], data)?, valid_out)
}

/// Mean of the valid frames, L2-normalized; the KATE retrieval key.
pub fn kate_embed(f: &SpeechFeatures) -> Result<Vec<f64>> {
    if f.valid_len == 0 {
        return Err(Error::Invalid("kate_embed on features with no valid frames".into()));
    }
    let d = f.dim();
    let mut mean = vec![0.0; d];
    for r in 0..f.valid_len {
        mean.iter_mut().zip(f.frames.row(r)).for_each(|(a, b)| *a += b);
    }
    mean.iter_mut().for_each(|a| *a /= f.valid_len as f64);
    let norm = mean.iter().map(|x| x * x).sum::<f64>().sqrt();
    if !(norm > 0.0) || !norm.is_finite() {
        return Err(Error::Invalid("kate_embed: zero-norm mean frame".into()));
    }
    mean.iter_mut().for_each(|a| *a /= norm);
    Ok(mean)
}

pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    dot / (na * nb)
}
