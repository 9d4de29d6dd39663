//! Sectioned run configuration shared by every subcommand. Unknown keys
//! are rejected; every field has a default.

use serde::{Deserialize, Serialize};

use crate::align::{AlignmentConfig, PsrtConfig};
use crate::error::{Error, Result};
use crate::fewshot::{Modality, Selection, TaskKind};
use crate::lm::{LmConfig, PretrainConfig};
use crate::projector::ProjectorConfig;
use crate::speechsim::EncoderConfig;

pub const SEED_ENV: &str = "SEAL_SEED";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TaskConfig {
    pub kind: TaskKind,
    pub n_test: usize,
    pub n_pool: usize,
    pub seed: u64,
}

impl Default for TaskConfig {
    fn default() -> Self {
        Self {
            kind: TaskKind::Fsc,
            n_test: 200,
            n_pool: 200,
            seed: 5,
        }
    }
}

impl TaskConfig {
    /// Seed of the shot pool, a stream separate from the test set's.
    pub fn pool_seed(&self) -> u64 {
        self.seed ^ 0x504f_4f4c
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub shots: Vec<usize>,
    pub modality: Vec<Modality>,
    pub selection: Vec<Selection>,
    /// Query modality; text turns the sweep into the transcript ceiling.
    pub query: Modality,
    pub max_new: usize,
    pub seed: u64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            shots: vec![0, 3, 5],
            modality: vec![Modality::Text, Modality::Speech],
            selection: vec![Selection::Kate],
            query: Modality::Speech,
            max_new: 40,
            seed: 1,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub lm: LmConfig,
    pub pretrain: PretrainConfig,
    pub encoder: EncoderConfig,
    pub projector: ProjectorConfig,
    pub align: AlignmentConfig,
    pub psrt: PsrtConfig,
    pub task: TaskConfig,
    pub eval: EvalConfig,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let c: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        c.validate()?;
        Ok(c)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        self.lm.validate()?;
        self.encoder.validate()?;
        self.pretrain.adam.validate()?;
        self.pretrain.mix.validate()?;
        self.align.validate()?;
        self.psrt.adam.validate()?;
        if self.encoder.d_s != self.lm.d_model {
            return Err(Error::Config(format!(
                "encoder.d_s {} must equal lm.d_model {}",
                self.encoder.d_s, self.lm.d_model
            )));
        }
        if self.eval.shots.is_empty() || self.eval.modality.is_empty() || self.eval.selection.is_empty() {
            return Err(Error::Config("eval sweep lists must be nonempty".into()));
        }
        Ok(())
    }

    /// Re-seeds every section from one master seed, each at its own offset.
    pub fn apply_seed(&mut self, seed: u64) {
        self.lm.seed = seed;
        self.pretrain.data_seed = seed.wrapping_add(1);
        self.encoder.codebook_seed = seed.wrapping_add(2);
        self.projector.init_seed = seed.wrapping_add(3);
        self.align.seed = seed.wrapping_add(4);
        self.psrt.seed = seed.wrapping_add(5);
        self.task.seed = seed.wrapping_add(6);
        self.eval.seed = seed.wrapping_add(7);
    }

    /// Master-seed override: the environment variable beats the flag, which
    /// beats the file.
    pub fn resolve_seed(&mut self, flag: Option<u64>, env: Option<&str>) -> Result<()> {
        let env = match env {
            Some(v) => Some(
                v.trim()
                    .parse::<u64>()
                    .map_err(|_| Error::Config(format!("{SEED_ENV}={v:?} is not an unsigned integer")))?,
            ),
            None => None,
        };
        if let Some(s) = env.or(flag) {
            self.apply_seed(s);
        }
        Ok(())
    }
}
