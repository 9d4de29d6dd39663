use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lm::corpus::{CorpusGenerator, MixWeights};
use crate::lm::model::{LanguageModel, LmConfig, TapeSegment};
use crate::lm::vocab::{TokenId, Vocab};
use crate::numcore::{argmax, AdamConfig, AdamState, Prng, Tape};
use crate::parallel;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PretrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub seq_len: usize,
    pub mix: MixWeights,
    pub adam: AdamConfig,
    pub data_seed: u64,
    pub log_every: usize,
    /// Final steps over which the rate falls linearly to `cooldown_floor`
    /// times its base value.
    pub cooldown_steps: usize,
    pub cooldown_floor: f64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            steps: 5000,
            batch_size: 8,
            seq_len: 128,
            mix: MixWeights::default(),
            adam: AdamConfig {
                lr: 3e-3,
                warmup_steps: 100,
                ..AdamConfig::default()
            },
            data_seed: 11,
            log_every: 100,
            cooldown_steps: 1500,
            cooldown_floor: 0.1,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct PretrainReport {
    /// `(step, mean batch loss)` every `log_every` steps.
    pub loss_curve: Vec<(usize, f64)>,
    pub heldout_loss_init: f64,
    pub heldout_loss_final: f64,
    pub induction_accuracy: f64,
}

/// Mean next-token loss of one sequence and its gradient for every LM
/// weight, in [`crate::lm::LmWeights::named`] order.
pub fn sequence_grads(lm: &LanguageModel, seq: &[TokenId]) -> Result<(f64, Vec<Vec<f64>>)> {
    if seq.len() < 2 {
        return Err(Error::Invalid("training sequence needs at least two tokens".into()));
    }
    let mut tape = Tape::new();
    let b = lm.bind(&mut tape, true);
    let logits = lm.forward_tape(&mut tape, &b, &[TapeSegment::Tokens(seq)])?;
    let mut targets: Vec<usize> = seq[1..].iter().map(|&t| t as usize).collect();
    targets.push(0);
    let mut mask = vec![true; seq.len()];
    mask[seq.len() - 1] = false;
    let loss = tape.cross_entropy(logits, &targets, &mask)?;
    let value = tape.scalar(loss);
    let mut grads = tape.backward(loss)?;
    let out = b
        .vars()
        .iter()
        .map(|&v| grads.take(v).unwrap_or_else(|| vec![0.0; tape.value(v).len()]))
        .collect();
    Ok((value, out))
}

/// Batch-mean loss and gradients; per-sequence work runs through
/// [`parallel::map`] and is summed in input order.
pub fn batch_grads(lm: &LanguageModel, batch: &[Vec<TokenId>]) -> Result<(f64, Vec<Vec<f64>>)> {
    let parts = parallel::map(batch, |s| sequence_grads(lm, s));
    let mut losses = Vec::with_capacity(parts.len());
    let mut grads = Vec::with_capacity(parts.len());
    for p in parts {
        let (l, g) = p?;
        losses.push(l);
        grads.push(g);
    }
    let n = batch.len() as f64;
    let mut sum = parallel::sum_in_order(grads).ok_or_else(|| Error::Invalid("empty batch".into()))?;
    sum.iter_mut().flatten().for_each(|g| *g /= n);
    Ok((losses.iter().sum::<f64>() / n, sum))
}

pub fn sequence_loss(lm: &LanguageModel, seq: &[TokenId]) -> Result<f64> {
    let mut tape = Tape::new();
    let b = lm.bind(&mut tape, false);
    let logits = lm.forward_tape(&mut tape, &b, &[TapeSegment::Tokens(seq)])?;
    let mut targets: Vec<usize> = seq[1..].iter().map(|&t| t as usize).collect();
    targets.push(0);
    let mut mask = vec![true; seq.len()];
    mask[seq.len() - 1] = false;
    let loss = tape.cross_entropy(logits, &targets, &mask)?;
    Ok(tape.scalar(loss))
}

pub fn mean_loss(lm: &LanguageModel, seqs: &[Vec<TokenId>]) -> Result<f64> {
    let losses = parallel::map(seqs, |s| sequence_loss(lm, s));
    let mut total = 0.0;
    for l in losses {
        total += l?;
    }
    Ok(total / seqs.len().max(1) as f64)
}

impl PretrainConfig {
    /// Cooldown multiplier for 0-based `step`.
    pub fn lr_scale(&self, step: usize) -> f64 {
        let start = self.steps.saturating_sub(self.cooldown_steps);
        if step < start || self.cooldown_steps == 0 {
            return 1.0;
        }
        let frac = (step - start + 1) as f64 / self.cooldown_steps as f64;
        1.0 - (1.0 - self.cooldown_floor) * frac.min(1.0)
    }
}

/// Held-out sequences drawn from a stream disjoint from training batches.
pub fn heldout_stream(gen: &CorpusGenerator, seed: u64, n: usize) -> Vec<Vec<TokenId>> {
    let mut rng = Prng::derive(seed, u64::MAX);
    (0..n).map(|_| gen.sample(&mut rng).1).collect()
}

/// Held-out `A B … A → B` probe: `A ≠ B` are random words, the filler is
/// `filler_len` random words other than `A`, and a trial scores when the
/// argmax after the second `A` is `B`.
pub fn induction_accuracy(lm: &LanguageModel, seed: u64, trials: usize, filler_len: usize) -> Result<f64> {
    let vocab = Vocab::default();
    let words = vocab.word_ids();
    let n_words = (words.end - words.start) as usize;
    let seqs: Vec<Vec<TokenId>> = (0..trials)
        .map(|i| {
            let mut rng = Prng::derive(seed, i as u64);
            let mut draw = |avoid: TokenId| loop {
                let w = words.start + rng.below(n_words) as TokenId;
                if w != avoid {
                    return w;
                }
            };
            let a = draw(TokenId::MAX);
            let b = draw(a);
            let mut seq = vec![a, b];
            seq.extend((0..filler_len).map(|_| draw(a)));
            seq.push(a);
            seq
        })
        .collect();
    let hits = parallel::map(&seqs, |s| -> Result<bool> {
        let logits = lm.forward_tokens(s)?;
        Ok(argmax(logits.row(s.len() - 1)) as TokenId == s[1])
    });
    let mut hit = 0;
    for h in hits {
        hit += usize::from(h?);
    }
    Ok(hit as f64 / trials.max(1) as f64)
}

/// Next-token training on the synthetic corpus. Deterministic for a given
/// `(lm_config, config)`.
pub fn pretrain(
    lm_config: &LmConfig,
    config: &PretrainConfig,
    mut on_log: impl FnMut(usize, f64, &LanguageModel),
) -> Result<(LanguageModel, PretrainReport)> {
    config.adam.validate()?;
    if config.seq_len > lm_config.max_seq_len {
        return Err(Error::Config(format!(
            "pretraining seq_len {} exceeds max_seq_len {}",
            config.seq_len, lm_config.max_seq_len
        )));
    }
    if config.batch_size == 0 {
        return Err(Error::Config("batch_size must be positive".into()));
    }
    let gen = CorpusGenerator::new(config.mix, config.seq_len)?;
    let mut lm = LanguageModel::new(lm_config.clone())?;
    let heldout = heldout_stream(&gen, config.data_seed, 32);
    let mut report = PretrainReport {
        heldout_loss_init: mean_loss(&lm, &heldout)?,
        ..PretrainReport::default()
    };
    {
        let mut params = lm.weights.tensors_mut();
        params.iter_mut().for_each(|p| p.set_requires_grad(true));
    }
    let mut adam = {
        let named = lm.weights.named();
        let refs: Vec<_> = named.iter().map(|(_, t)| *t).collect();
        AdamState::new(config.adam.clone(), &refs)
    };
    let mut window = 0.0;
    let mut window_n = 0;
    for step in 0..config.steps {
        let mut rng = Prng::derive(config.data_seed, step as u64);
        let batch: Vec<Vec<TokenId>> = (0..config.batch_size).map(|_| gen.sample(&mut rng).1).collect();
        let (loss, grads) = batch_grads(&lm, &batch)?;
        if !loss.is_finite() {
            return Err(Error::Diverged { step, loss });
        }
        let mut params = lm.weights.tensors_mut();
        for (p, g) in params.iter_mut().zip(&grads) {
            p.accumulate_grad(g)?;
        }
        adam.set_lr_scale(config.lr_scale(step));
        adam.step(&mut params)?;
        window += loss;
        window_n += 1;
        if config.log_every > 0 && ((step + 1) % config.log_every == 0 || step + 1 == config.steps) {
            let mean = window / window_n as f64;
            report.loss_curve.push((step + 1, mean));
            on_log(step + 1, mean, &lm);
            window = 0.0;
            window_n = 0;
        }
    }
    for p in lm.weights.tensors_mut() {
        p.set_requires_grad(false);
    }
    report.heldout_loss_final = mean_loss(&lm, &heldout)?;
    report.induction_accuracy = induction_accuracy(&lm, config.data_seed ^ 0x1d, 1000, 16)?;
    Ok((lm, report))
}
