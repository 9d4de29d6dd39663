//! Pretrained backbones shared by the slow test targets. Each LM is cached
//! under the cargo target tmp dir, keyed by its configs and corpus, and always used as
//! reloaded from the checkpoint.

use std::path::PathBuf;
use std::time::Instant;

use sha2::{Digest, Sha256};

use seal_core::checkpoint::{hex, Checkpoint};
use seal_core::config::RunConfig;
use seal_core::lm::pretrain::{heldout_stream, induction_accuracy, pretrain};
use seal_core::lm::{CorpusGenerator, LanguageModel, PretrainReport};
use seal_core::speechsim::Encoder;
use seal_core::Result;

/// An LM pretrained from `config`, reloaded from its checkpoint.
pub struct Backbone {
    pub config: RunConfig,
    pub lm: LanguageModel,
    pub encoder: Encoder,
    pub report: PretrainReport,
    pub induction: f64,
}

fn cache_dir() -> PathBuf {
    PathBuf::from(env!("CARGO_TARGET_TMPDIR")).join("backbones")
}

pub fn backbone(config: RunConfig) -> Result<Backbone> {
    // Sample sequences join the configs in the key so corpus changes miss the cache.
    let gen = CorpusGenerator::new(config.pretrain.mix, config.pretrain.seq_len)?;
    let samples = heldout_stream(&gen, config.pretrain.data_seed, 64);
    let key = serde_json::to_vec(&(&config.lm, &config.pretrain, samples))?;
    let key = hex(&Sha256::digest(&key))[..16].to_string();
    let dir = cache_dir();
    std::fs::create_dir_all(&dir)?;
    let ckpt = dir.join(format!("lm-{key}.ckpt"));
    let report_path = dir.join(format!("lm-{key}.json"));
    if !ckpt.exists() || !report_path.exists() {
        let t = Instant::now();
        eprintln!("pretraining LM {key} ({} steps)", config.pretrain.steps);
        let (lm, report) = pretrain(&config.lm, &config.pretrain, |step, loss, _| {
            if step % 500 == 0 {
                eprintln!("  step {step} loss {loss:.4} t={:.0}s", t.elapsed().as_secs_f64());
            }
        })?;
        // Write then rename so a concurrent reader never sees a partial file.
        let tmp = dir.join(format!("lm-{key}.{}.tmp", std::process::id()));
        lm.to_checkpoint()?.save(&tmp)?;
        std::fs::rename(&tmp, &ckpt)?;
        std::fs::write(&tmp, serde_json::to_vec_pretty(&report)?)?;
        std::fs::rename(&tmp, &report_path)?;
    }
    let lm = LanguageModel::from_checkpoint(&Checkpoint::load(&ckpt)?)?;
    let report: PretrainReport = serde_json::from_slice(&std::fs::read(&report_path)?)?;
    let induction = induction_accuracy(&lm, config.pretrain.data_seed ^ 0x1d, 1000, 16)?;
    let encoder = Encoder::new(config.encoder.clone(), lm.config.vocab_size)?;
    Ok(Backbone {
        config,
        lm,
        encoder,
        report,
        induction,
    })
}

#[allow(dead_code)]
pub fn second_config() -> RunConfig {
    let mut c = RunConfig::default();
    c.lm.seed = c.lm.seed.wrapping_add(1000);
    c.pretrain.data_seed = c.pretrain.data_seed.wrapping_add(1000);
    c
}

