//! The trainable bridge from pooled speech frames to LM embedding rows:
//! `w_e = LN2(GELU(W·LN1(s_e) + b) + s_e)`, applied per frame.

use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::error::{Error, Result};
use crate::lm::LN_EPS;
use crate::numcore::{Prng, Tape, Tensor, Var};
use crate::speechsim::SpeechFeatures;

/// Where the single linear map sits relative to the residual.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LinearPlacement {
    /// `LN2(GELU(W·LN1(s) + b) + s)`.
    #[default]
    Branch,
    /// `u = W·s + b`, then `LN2(GELU(LN1(u)) + u)`.
    Input,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ProjectorConfig {
    pub init_seed: u64,
    pub init_std: f64,
    pub placement: LinearPlacement,
}

impl Default for ProjectorConfig {
    fn default() -> Self {
        Self {
            init_seed: 3,
            init_std: 0.02,
            placement: LinearPlacement::Branch,
        }
    }
}

pub const TENSOR_NAMES: [&str; 6] = ["ln1_g", "ln1_b", "w", "b", "ln2_g", "ln2_b"];

#[derive(Debug, Clone, PartialEq)]
pub struct ProjectorWeights {
    pub ln1_g: Tensor,
    pub ln1_b: Tensor,
    pub w: Tensor,
    pub b: Tensor,
    pub ln2_g: Tensor,
    pub ln2_b: Tensor,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Projector {
    pub config: ProjectorConfig,
    pub weights: ProjectorWeights,
}

/// Projector weights recorded on a tape, in [`TENSOR_NAMES`] order.
#[derive(Debug, Clone)]
pub struct ProjectorBinding {
    vars: [Var; 6],
}

impl ProjectorBinding {
    /// Wraps vars already on a tape, in [`TENSOR_NAMES`] order.
    pub fn from_vars(vars: [Var; 6]) -> Self {
        Self { vars }
    }

    pub fn vars(&self) -> &[Var; 6] {
        &self.vars
    }
}

impl Projector {
    /// Fresh projector: `W ~ N(0, init_std²)`, zero biases, unit gains.
    pub fn new(config: ProjectorConfig, d_s: usize, d_model: usize) -> Result<Self> {
        if d_s != d_model {
            return Err(Error::shape(
                "projector",
                format!("residual needs d_s == d_model, got {d_s} vs {d_model}"),
            ));
        }
        let mut rng = Prng::derive(config.init_seed, 0x5052);
        let weights = ProjectorWeights {
            ln1_g: Tensor::full(vec![d_s], 1.0),
            ln1_b: Tensor::zeros(vec![d_s]),
            w: Tensor::randn(vec![d_s, d_model], config.init_std, &mut rng),
            b: Tensor::zeros(vec![d_model]),
            ln2_g: Tensor::full(vec![d_model], 1.0),
            ln2_b: Tensor::zeros(vec![d_model]),
        };
        Ok(Self { config, weights })
    }

    pub fn from_tensors(config: ProjectorConfig, mut tensors: Vec<Tensor>) -> Result<Self> {
        if tensors.len() != 6 {
            return Err(Error::Checkpoint(format!("projector needs 6 tensors, got {}", tensors.len())));
        }
        let d = tensors[0].len();
        let expect: [&[usize]; 6] = [&[d], &[d], &[d, d], &[d], &[d], &[d]];
        for (i, (t, e)) in tensors.iter().zip(expect).enumerate() {
            if t.shape() != e {
                return Err(Error::Checkpoint(format!(
                    "projector tensor {} has shape {:?}, expected {e:?}",
                    TENSOR_NAMES[i],
                    t.shape()
                )));
            }
        }
        let ln2_b = tensors.pop().unwrap();
        let ln2_g = tensors.pop().unwrap();
        let b = tensors.pop().unwrap();
        let w = tensors.pop().unwrap();
        let ln1_b = tensors.pop().unwrap();
        let ln1_g = tensors.pop().unwrap();
        Ok(Self {
            config,
            weights: ProjectorWeights {
                ln1_g,
                ln1_b,
                w,
                b,
                ln2_g,
                ln2_b,
            },
        })
    }

    pub fn to_checkpoint(&self) -> Result<Checkpoint> {
        Ok(Checkpoint::new("projector", serde_json::to_value(&self.config)?, self.named()))
    }

    pub fn from_checkpoint(c: &Checkpoint) -> Result<Self> {
        c.expect_kind("projector")?;
        let config: ProjectorConfig = serde_json::from_value(c.config.clone())
            .map_err(|e| Error::Checkpoint(format!("projector config: {e}")))?;
        let tensors = TENSOR_NAMES.iter().map(|n| c.get(n)).collect::<Result<Vec<_>>>()?;
        Self::from_tensors(config, tensors)
    }

    pub fn d_model(&self) -> usize {
        self.weights.b.len()
    }

    pub fn named(&self) -> Vec<(String, &Tensor)> {
        let w = &self.weights;
        TENSOR_NAMES
            .iter()
            .map(|s| s.to_string())
            .zip([&w.ln1_g, &w.ln1_b, &w.w, &w.b, &w.ln2_g, &w.ln2_b])
            .collect()
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let w = &mut self.weights;
        vec![&mut w.ln1_g, &mut w.ln1_b, &mut w.w, &mut w.b, &mut w.ln2_g, &mut w.ln2_b]
    }

    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> ProjectorBinding {
        let w = &self.weights;
        ProjectorBinding {
            vars: [&w.ln1_g, &w.ln1_b, &w.w, &w.b, &w.ln2_g, &w.ln2_b].map(|t| tape.input(t, trainable)),
        }
    }

    /// Applies the block to `[n, d_s]` frame rows on a tape.
    pub fn project_tape(&self, tape: &mut Tape, b: &ProjectorBinding, frames: Var) -> Result<Var> {
        let d = self.d_model();
        if tape.shape(frames).len() != 2 || tape.shape(frames)[1] != d {
            return Err(Error::shape(
                "project",
                format!("frames {:?} for width {d}", tape.shape(frames)),
            ));
        }
        let [ln1_g, ln1_b, w, bias, ln2_g, ln2_b] = b.vars;
        let (branch, residual) = match self.config.placement {
            LinearPlacement::Branch => {
                let h = tape.layer_norm(frames, ln1_g, ln1_b, LN_EPS)?;
                let u = tape.matmul(h, w)?;
                let u = tape.add_row(u, bias)?;
                (tape.gelu(u), frames)
            }
            LinearPlacement::Input => {
                let u = tape.matmul(frames, w)?;
                let u = tape.add_row(u, bias)?;
                let h = tape.layer_norm(u, ln1_g, ln1_b, LN_EPS)?;
                (tape.gelu(h), u)
            }
        };
        let sum = tape.add(branch, residual)?;
        tape.layer_norm(sum, ln2_g, ln2_b, LN_EPS)
    }

    /// Embedding rows for the valid frames of pooled features.
    pub fn project(&self, pooled: &SpeechFeatures) -> Result<Tensor> {
        if pooled.valid_len == 0 {
            return Err(Error::Invalid("project needs at least one valid frame".into()));
        }
        if pooled.dim() != self.d_model() {
            return Err(Error::shape(
                "project",
                format!("feature width {} vs projector width {}", pooled.dim(), self.d_model()),
            ));
        }
        let mut tape = Tape::new();
        let b = self.bind(&mut tape, false);
        let x = tape.input(&pooled.valid(), false);
        let y = self.project_tape(&mut tape, &b, x)?;
        Ok(tape.tensor(y))
    }
}
