//! Duplicate-transcript alignment: the projector is trained so that a speech
//! prefix followed by copies of its transcript yields the same next-token
//! distributions in the frozen LM as the text prefix does. Also hosts the
//! PSRT baseline, which trains the same projector with cross-entropy on the
//! transcript after a fixed "transcribe ⇒" prompt.

use serde::{Deserialize, Serialize};

use crate::checkpoint::weights_hash;
use crate::error::{Error, Result};
use crate::fewshot::tasks::{self, TaskKind, ToyFscSpec, ToySlurpSpec};
use crate::lm::{CorpusGenerator, LanguageModel, LmBinding, MixedSequence, MixWeights, TapeSegment, TokenId, Vocab, ARROW, NEWLINE};
use crate::numcore::{argmax, entropy, kl_row, log_softmax, softmax, AdamConfig, AdamState, Prng, Tape, Tensor, Var};
use crate::parallel;
use crate::projector::{Projector, ProjectorBinding, ProjectorConfig};
use crate::speechsim::{pool4, Encoder, SpeechFeatures};

/// How many transcript copies the teacher sequence carries.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CopyLayout {
    /// Prefix plus `J+1` trailing copies, `J+2` in total.
    #[default]
    PrefixPlusTrailing,
    /// `J+1` copies in total: prefix plus `J` trailing copies.
    TotalJPlusOne,
}

impl CopyLayout {
    pub fn trailing_copies(self, j: usize) -> usize {
        match self {
            CopyLayout::PrefixPlusTrailing => j + 1,
            CopyLayout::TotalJPlusOne => j,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AlignmentConfig {
    pub j: usize,
    pub layout: CopyLayout,
    pub batch_size: usize,
    pub steps: usize,
    pub adam: AdamConfig,
    pub eval_every: usize,
    pub seed: u64,
    pub n_train: usize,
    pub n_heldout: usize,
    /// Each training pair reads up to this many lines of pretraining-style
    /// text (sentences or `x ⇒ y` demos) before the transcript, so the
    /// projector sees speech at later positions too. Held-out pairs never
    /// get context.
    pub max_context: usize,
}

impl Default for AlignmentConfig {
    fn default() -> Self {
        Self {
            j: 2,
            layout: CopyLayout::PrefixPlusTrailing,
            batch_size: 8,
            steps: 2000,
            adam: AdamConfig {
                lr: 3e-3,
                warmup_steps: 100,
                ..AdamConfig::default()
            },
            eval_every: 500,
            seed: 17,
            n_train: 2000,
            n_heldout: 128,
            max_context: 4,
        }
    }
}

impl AlignmentConfig {
    pub fn validate(&self) -> Result<()> {
        self.adam.validate()?;
        if self.layout.trailing_copies(self.j) == 0 {
            return Err(Error::Config("J+1-total layout needs J >= 1 to have any loss positions".into()));
        }
        if self.batch_size == 0 || self.n_train == 0 || self.n_heldout == 0 {
            return Err(Error::Config("batch_size, n_train and n_heldout must be positive".into()));
        }
        Ok(())
    }
}

/// Logit rows read at `teacher` / `student` predict `target`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LossPosition {
    pub teacher: usize,
    pub student: usize,
    pub target: TokenId,
    /// Trailing copy this target belongs to.
    pub copy: usize,
}

#[derive(Debug, Clone)]
pub struct AlignmentPair {
    pub transcript: Vec<TokenId>,
    /// Text shared by both sides ahead of the transcript; empty in the
    /// canonical layout.
    pub context: Vec<TokenId>,
    /// `context ‖ t ‖ (NEWLINE ‖ t)×copies`, tokens only.
    pub teacher: Vec<TokenId>,
    /// Token suffix shared by both sides: `(NEWLINE ‖ t)×copies`.
    pub suffix: Vec<TokenId>,
    /// Pooled speech features of the transcript.
    pub pooled: SpeechFeatures,
    pub positions: Vec<LossPosition>,
}

impl AlignmentPair {
    pub fn teacher_sequence(&self) -> MixedSequence {
        MixedSequence::tokens(self.teacher.clone())
    }

    pub fn student_sequence(&self, projector: &Projector) -> Result<MixedSequence> {
        self.student_with(projector.project(&self.pooled)?)
    }

    fn student_with(&self, prefix: Tensor) -> Result<MixedSequence> {
        let mut seq = MixedSequence::new();
        if !self.context.is_empty() {
            seq.push_tokens(&self.context);
        }
        seq.push_embeds(prefix);
        seq.push_tokens(&self.suffix);
        Ok(seq)
    }

    fn teacher_rows(&self) -> Vec<usize> {
        self.positions.iter().map(|p| p.teacher).collect()
    }

    fn student_rows(&self) -> Vec<usize> {
        self.positions.iter().map(|p| p.student).collect()
    }
}

/// Pairs a transcript with already pooled features.
pub fn build_pair_from_features(
    transcript: &[TokenId],
    pooled: SpeechFeatures,
    trailing: usize,
    max_seq_len: usize,
) -> Result<AlignmentPair> {
    build_pair_in_context(&[], transcript, pooled, trailing, max_seq_len)
}

/// [`build_pair_from_features`] behind a text `context` that both the
/// teacher and the student read first.
pub fn build_pair_in_context(
    context: &[TokenId],
    transcript: &[TokenId],
    pooled: SpeechFeatures,
    trailing: usize,
    max_seq_len: usize,
) -> Result<AlignmentPair> {
    if transcript.is_empty() {
        return Err(Error::Invalid("alignment needs a nonempty transcript".into()));
    }
    let i_len = transcript.len();
    let mut suffix = Vec::with_capacity(trailing * (i_len + 1));
    for _ in 0..trailing {
        suffix.push(NEWLINE);
        suffix.extend_from_slice(transcript);
    }
    let teacher = [context, transcript, &suffix].concat();
    let k = context.len();
    let prefix = k + pooled.valid_len;
    let longest = teacher.len().max(prefix + suffix.len());
    if longest > max_seq_len {
        return Err(Error::Overlength {
            len: longest,
            max: max_seq_len,
        });
    }
    let mut positions = Vec::with_capacity(trailing * i_len);
    for c in 0..trailing {
        for (i, &target) in transcript.iter().enumerate() {
            // Offset of the target inside the suffix; NEWLINE at c·(I+1).
            let at = c * (i_len + 1) + 1 + i;
            positions.push(LossPosition {
                teacher: k + i_len + at - 1,
                student: prefix + at - 1,
                target,
                copy: c,
            });
        }
    }
    for p in &positions {
        assert_eq!(teacher[p.teacher + 1], p.target, "teacher target misaligned");
        assert_eq!(suffix[p.student + 1 - prefix], p.target, "student target misaligned");
    }
    Ok(AlignmentPair {
        transcript: transcript.to_vec(),
        context: context.to_vec(),
        teacher,
        suffix,
        pooled,
        positions,
    })
}

/// Encodes, pools and pairs a transcript.
pub fn build_pair(
    encoder: &Encoder,
    transcript: &[TokenId],
    trailing: usize,
    max_seq_len: usize,
    noise: &mut Prng,
) -> Result<AlignmentPair> {
    let pooled = pool4(&encoder.encode(transcript, noise)?)?;
    build_pair_from_features(transcript, pooled, trailing, max_seq_len)
}

/// Teacher next-token distributions at the loss positions, `[n, V]`.
pub fn teacher_probs(lm: &LanguageModel, pair: &AlignmentPair) -> Result<Tensor> {
    let logits = lm.forward_tokens(&pair.teacher)?;
    let rows: Vec<Vec<f64>> = pair.teacher_rows().iter().map(|&r| logits.row(r).to_vec()).collect();
    Ok(softmax(&Tensor::from_rows(&rows)?))
}

/// KL of the student read through `prefix` (a `[P, d_model]` var) against
/// precomputed teacher rows.
pub fn student_kl(
    tape: &mut Tape,
    lm: &LanguageModel,
    lb: &LmBinding,
    prefix: Var,
    pair: &AlignmentPair,
    teacher: &Tensor,
) -> Result<Var> {
    let mut segments = Vec::with_capacity(3);
    if !pair.context.is_empty() {
        segments.push(TapeSegment::Tokens(&pair.context));
    }
    segments.push(TapeSegment::Embeds(prefix));
    segments.push(TapeSegment::Tokens(&pair.suffix));
    let logits = lm.forward_tape(tape, lb, &segments)?;
    let rows = tape.gather_rows(logits, &pair.student_rows())?;
    let logq = tape.log_softmax(rows);
    tape.kl_div(teacher, logq, &vec![true; pair.positions.len()])
}

/// The projector path of the alignment loss on a tape.
pub fn projector_kl(
    tape: &mut Tape,
    lm: &LanguageModel,
    projector: &Projector,
    pb: &ProjectorBinding,
    pair: &AlignmentPair,
    teacher: &Tensor,
) -> Result<Var> {
    let lb = lm.bind(tape, false);
    let frames = tape.input(&pair.pooled.valid(), false);
    let prefix = projector.project_tape(tape, pb, frames)?;
    student_kl(tape, lm, &lb, prefix, pair, teacher)
}

/// Mean KL over the pair's loss positions, without gradients.
pub fn kl_alignment_loss(lm: &LanguageModel, projector: &Projector, pair: &AlignmentPair) -> Result<f64> {
    let teacher = teacher_probs(lm, pair)?;
    let mut tape = Tape::new();
    let pb = projector.bind(&mut tape, false);
    let loss = projector_kl(&mut tape, lm, projector, &pb, pair, &teacher)?;
    Ok(tape.scalar(loss))
}

/// Alignment loss with an arbitrary prefix in place of projected speech;
/// feeding `lm.embed(transcript)` gives the oracle splice.
pub fn splice_loss(lm: &LanguageModel, pair: &AlignmentPair, prefix: &Tensor) -> Result<f64> {
    let teacher = teacher_probs(lm, pair)?;
    let mut tape = Tape::new();
    let lb = lm.bind(&mut tape, false);
    let p = tape.input(prefix, false);
    let loss = student_kl(&mut tape, lm, &lb, p, pair, &teacher)?;
    Ok(tape.scalar(loss))
}

fn projector_grads(
    lm: &LanguageModel,
    projector: &Projector,
    pair: &AlignmentPair,
    teacher: &Tensor,
) -> Result<(f64, Vec<Vec<f64>>)> {
    let mut tape = Tape::new();
    let pb = projector.bind(&mut tape, true);
    let loss = projector_kl(&mut tape, lm, projector, &pb, pair, teacher)?;
    collect_grads(&tape, loss, &pb)
}

fn collect_grads(tape: &Tape, loss: Var, pb: &ProjectorBinding) -> Result<(f64, Vec<Vec<f64>>)> {
    let value = tape.scalar(loss);
    let mut grads = tape.backward(loss)?;
    let out = pb
        .vars()
        .iter()
        .map(|&v| grads.take(v).unwrap_or_else(|| vec![0.0; tape.value(v).len()]))
        .collect();
    Ok((value, out))
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct AlignEval {
    pub mean_kl: f64,
    /// Fraction of loss positions where teacher and student argmax agree.
    pub agreement: f64,
    pub positions: usize,
}

/// Held-out KL and argmax agreement; position-weighted over all pairs.
pub fn eval_alignment(lm: &LanguageModel, projector: &Projector, pairs: &[AlignmentPair]) -> Result<AlignEval> {
    eval_with(lm, pairs, |pair| {
        let seq = pair.student_sequence(projector)?;
        lm.forward(&seq)
    })
}

/// [`eval_alignment`] with each student prefix replaced by the transcript's
/// own embeddings.
pub fn eval_oracle_splice(lm: &LanguageModel, pairs: &[AlignmentPair]) -> Result<AlignEval> {
    eval_with(lm, pairs, |pair| lm.forward(&pair.student_with(lm.embed(&pair.transcript)?)?))
}

fn eval_with<F>(lm: &LanguageModel, pairs: &[AlignmentPair], student_logits: F) -> Result<AlignEval>
where
    F: Fn(&AlignmentPair) -> Result<Tensor> + Sync + Send,
{
    let parts = parallel::map(pairs, |pair| -> Result<(f64, usize, usize)> {
        let t_logits = lm.forward_tokens(&pair.teacher)?;
        let s_logits = student_logits(pair)?;
        let mut kl = 0.0;
        let mut agree = 0;
        for p in &pair.positions {
            let tr = t_logits.row(p.teacher);
            let sr = s_logits.row(p.student);
            let tp = softmax(&Tensor::new(vec![1, tr.len()], tr.to_vec())?);
            let sq = log_softmax(&Tensor::new(vec![1, sr.len()], sr.to_vec())?);
            kl += kl_row(tp.data(), sq.data());
            if argmax(tr) == argmax(sr) {
                agree += 1;
            }
        }
        Ok((kl, agree, pair.positions.len()))
    });
    let (mut kl, mut agree, mut n) = (0.0, 0, 0);
    for p in parts {
        let (k, a, c) = p?;
        kl += k;
        agree += a;
        n += c;
    }
    if n == 0 {
        return Err(Error::Invalid("no loss positions to evaluate".into()));
    }
    Ok(AlignEval {
        mean_kl: kl / n as f64,
        agreement: agree as f64 / n as f64,
        positions: n,
    })
}

/// Mean teacher entropy per trailing copy, averaged over pairs.
pub fn copy_entropies(lm: &LanguageModel, pairs: &[AlignmentPair]) -> Result<Vec<f64>> {
    let copies = pairs.first().map(|p| p.positions.iter().map(|q| q.copy + 1).max().unwrap_or(0)).unwrap_or(0);
    let parts = parallel::map(pairs, |pair| -> Result<Vec<(f64, usize)>> {
        let probs = teacher_probs(lm, pair)?;
        let mut acc = vec![(0.0, 0); copies];
        for (r, p) in pair.positions.iter().enumerate() {
            if p.copy < copies {
                acc[p.copy].0 += entropy(probs.row(r));
                acc[p.copy].1 += 1;
            }
        }
        Ok(acc)
    });
    let mut total = vec![(0.0, 0usize); copies];
    for p in parts {
        for (t, (e, n)) in total.iter_mut().zip(p?) {
            t.0 += e;
            t.1 += n;
        }
    }
    Ok(total.into_iter().map(|(e, n)| e / n.max(1) as f64).collect())
}

/// Transcripts from the task grammars (the sentence component of the
/// pretraining corpus), drawn from stream `stream` of `seed`.
pub fn grammar_transcripts(seed: u64, stream: u64, n: usize) -> Vec<Vec<TokenId>> {
    let vocab = Vocab::default();
    let fsc = ToyFscSpec::default();
    let slurp = ToySlurpSpec::default();
    let mut rng = Prng::derive(seed, stream);
    (0..n)
        .map(|_| {
            let kind = if rng.bernoulli(0.5) { TaskKind::Fsc } else { TaskKind::Slurp };
            tasks::sample_utterance(kind, &vocab, &fsc, &slurp, &mut rng).1
        })
        .collect()
}

const TRAIN_STREAM: u64 = 0;
const HELDOUT_STREAM: u64 = 1;
const CONTEXT_LEN: usize = 128;

/// The first `n` complete lines of `seq`, or all complete lines if fewer.
fn leading_lines(mut seq: Vec<TokenId>, n: usize) -> Vec<TokenId> {
    let end = seq
        .iter()
        .enumerate()
        .filter(|(_, &t)| t == NEWLINE)
        .map(|(i, _)| i + 1)
        .take(n)
        .last()
        .unwrap_or(0);
    seq.truncate(end);
    seq
}
const HELDOUT_NOISE: u64 = 0x4845_4c44;
const BATCH_STREAM: u64 = 0x4241_5443;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FreezeHashes {
    pub lm: String,
    pub encoder: String,
}

impl FreezeHashes {
    pub fn of(lm: &LanguageModel, encoder: &Encoder) -> Self {
        Self {
            lm: weights_hash(&lm.weights.named()),
            encoder: weights_hash(&[("codebook".to_string(), encoder.codebook())]),
        }
    }

    fn verify(&self, lm: &LanguageModel, encoder: &Encoder) -> Result<()> {
        let now = Self::of(lm, encoder);
        if now != *self {
            return Err(Error::FreezeViolation(format!(
                "backbone hashes changed: lm {} -> {}, encoder {} -> {}",
                self.lm, now.lm, self.encoder, now.encoder
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub losses: Vec<f64>,
    pub initial: AlignEval,
    pub evals: Vec<(usize, AlignEval)>,
    #[serde(rename = "final")]
    pub final_eval: AlignEval,
    pub hashes_before: FreezeHashes,
    pub hashes_after: FreezeHashes,
}

/// Minibatch Adam loop shared by both objectives. `item` returns the loss
/// and projector gradients for batch slot `b` of `step`; `on_eval` runs
/// every `eval_every` steps and after the last one.
#[allow(clippy::too_many_arguments)]
fn fit<I, E>(
    projector: &mut Projector,
    steps: usize,
    batch_size: usize,
    adam: &AdamConfig,
    eval_every: usize,
    item: I,
    mut on_eval: E,
) -> Result<Vec<f64>>
where
    I: Fn(&Projector, usize, usize) -> Result<(f64, Vec<Vec<f64>>)> + Sync + Send,
    E: FnMut(usize, &Projector) -> Result<()>,
{
    for p in projector.tensors_mut() {
        p.set_requires_grad(true);
    }
    let mut opt = {
        let named = projector.named();
        let refs: Vec<&Tensor> = named.iter().map(|(_, t)| *t).collect();
        AdamState::new(adam.clone(), &refs)
    };
    let slots: Vec<usize> = (0..batch_size).collect();
    let mut losses = Vec::with_capacity(steps);
    for step in 0..steps {
        let parts = parallel::map(&slots, |&b| item(projector, step, b));
        let mut grads = Vec::with_capacity(batch_size);
        let mut loss = 0.0;
        for p in parts {
            let (l, g) = p?;
            loss += l;
            grads.push(g);
        }
        loss /= batch_size as f64;
        if !loss.is_finite() {
            return Err(Error::Diverged { step, loss });
        }
        let mut sum = parallel::sum_in_order(grads).ok_or_else(|| Error::Invalid("empty batch".into()))?;
        sum.iter_mut().flatten().for_each(|g| *g /= batch_size as f64);
        let mut params = projector.tensors_mut();
        for (p, g) in params.iter_mut().zip(&sum) {
            p.accumulate_grad(g)?;
        }
        opt.step(&mut params)?;
        losses.push(loss);
        if (eval_every > 0 && (step + 1) % eval_every == 0) || step + 1 == steps {
            on_eval(step + 1, projector)?;
        }
    }
    for p in projector.tensors_mut() {
        p.set_requires_grad(false);
    }
    Ok(losses)
}

/// Held-out pairs with fixed noise, from a stream disjoint from training.
pub fn heldout_pairs(lm: &LanguageModel, encoder: &Encoder, config: &AlignmentConfig) -> Result<Vec<AlignmentPair>> {
    let trailing = config.layout.trailing_copies(config.j);
    grammar_transcripts(config.seed, HELDOUT_STREAM, config.n_heldout)
        .iter()
        .enumerate()
        .map(|(i, t)| {
            let mut noise = Prng::derive(config.seed ^ HELDOUT_NOISE, i as u64);
            build_pair(encoder, t, trailing, lm.config.max_seq_len, &mut noise)
        })
        .collect()
}

/// Trains a fresh projector on the duplicate-transcript KL objective.
pub fn train_projector(
    lm: &LanguageModel,
    encoder: &Encoder,
    projector_config: &ProjectorConfig,
    config: &AlignmentConfig,
    mut on_log: impl FnMut(usize, &AlignEval),
) -> Result<(Projector, TrainReport)> {
    config.validate()?;
    let hashes_before = FreezeHashes::of(lm, encoder);
    let mut projector = Projector::new(projector_config.clone(), encoder.config().d_s, lm.d_model())?;
    let trailing = config.layout.trailing_copies(config.j);
    let max_len = lm.config.max_seq_len;
    let train = grammar_transcripts(config.seed, TRAIN_STREAM, config.n_train);
    let corpus = CorpusGenerator::new(
        MixWeights {
            repeat: 0.0,
            demos: 0.5,
            sentences: 0.5,
        },
        CONTEXT_LEN,
    )?;
    let heldout = heldout_pairs(lm, encoder, config)?;
    let initial = eval_alignment(lm, &projector, &heldout)?;
    on_log(0, &initial);
    let mut evals = Vec::new();
    let losses = fit(
        &mut projector,
        config.steps,
        config.batch_size,
        &config.adam,
        config.eval_every,
        |proj, step, b| {
            let mut rng = Prng::derive(config.seed ^ BATCH_STREAM, (step * config.batch_size + b) as u64);
            let idx = rng.below(train.len());
            let context = leading_lines(corpus.sample(&mut rng).1, rng.below(config.max_context + 1));
            let pooled = pool4(&encoder.encode(&train[idx], &mut rng)?)?;
            let pair = build_pair_in_context(&context, &train[idx], pooled, trailing, max_len)?;
            projector_grads(lm, proj, &pair, &teacher_probs(lm, &pair)?)
        },
        |step, proj| {
            hashes_before.verify(lm, encoder)?;
            let e = eval_alignment(lm, proj, &heldout)?;
            on_log(step, &e);
            evals.push((step, e));
            Ok(())
        },
    )?;
    let final_eval = evals.last().map(|e| e.1).unwrap_or(initial);
    let hashes_after = FreezeHashes::of(lm, encoder);
    hashes_before.verify(lm, encoder)?;
    Ok((
        projector,
        TrainReport {
            losses,
            initial,
            evals,
            final_eval,
            hashes_before,
            hashes_after,
        },
    ))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PsrtConfig {
    pub batch_size: usize,
    pub steps: usize,
    pub adam: AdamConfig,
    pub eval_every: usize,
    pub seed: u64,
    pub n_train: usize,
    pub n_heldout: usize,
}

impl Default for PsrtConfig {
    fn default() -> Self {
        let a = AlignmentConfig::default();
        Self {
            batch_size: a.batch_size,
            steps: a.steps,
            adam: a.adam,
            eval_every: a.eval_every,
            seed: a.seed,
            n_train: a.n_train,
            n_heldout: a.n_heldout,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PsrtEval {
    pub mean_ce: f64,
    /// Token accuracy of greedy transcription from the speech prefix.
    pub transcription_accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PsrtReport {
    pub losses: Vec<f64>,
    pub initial: PsrtEval,
    pub evals: Vec<(usize, PsrtEval)>,
    #[serde(rename = "final")]
    pub final_eval: PsrtEval,
    pub hashes_before: FreezeHashes,
    pub hashes_after: FreezeHashes,
}

/// The fixed recognition prompt placed before the speech prefix.
pub fn psrt_prompt(vocab: &Vocab) -> Vec<TokenId> {
    vec![vocab.tok("transcribe"), ARROW]
}

fn psrt_loss_tape(
    tape: &mut Tape,
    lm: &LanguageModel,
    projector: &Projector,
    pb: &ProjectorBinding,
    prompt: &[TokenId],
    pooled: &SpeechFeatures,
    transcript: &[TokenId],
) -> Result<Var> {
    let lb = lm.bind(tape, false);
    let frames = tape.input(&pooled.valid(), false);
    let speech = projector.project_tape(tape, pb, frames)?;
    let logits = lm.forward_tape(
        tape,
        &lb,
        &[
            TapeSegment::Tokens(prompt),
            TapeSegment::Embeds(speech),
            TapeSegment::Tokens(transcript),
        ],
    )?;
    let start = prompt.len() + pooled.valid_len - 1;
    let rows: Vec<usize> = (start..start + transcript.len()).collect();
    let picked = tape.gather_rows(logits, &rows)?;
    let targets: Vec<usize> = transcript.iter().map(|&t| t as usize).collect();
    tape.cross_entropy(picked, &targets, &vec![true; transcript.len()])
}

/// Held-out recognition loss and greedy transcription accuracy.
pub fn eval_psrt(
    lm: &LanguageModel,
    encoder: &Encoder,
    projector: &Projector,
    transcripts: &[Vec<TokenId>],
    noise_seed: u64,
) -> Result<PsrtEval> {
    let prompt = psrt_prompt(&Vocab::default());
    let idx: Vec<usize> = (0..transcripts.len()).collect();
    let parts = parallel::map(&idx, |&i| -> Result<(f64, usize, usize)> {
        let t = &transcripts[i];
        let mut noise = Prng::derive(noise_seed, i as u64);
        let pooled = pool4(&encoder.encode(t, &mut noise)?)?;
        let mut tape = Tape::new();
        let pb = projector.bind(&mut tape, false);
        let loss = psrt_loss_tape(&mut tape, lm, projector, &pb, &prompt, &pooled, t)?;
        let mut seq = MixedSequence::tokens(prompt.clone());
        seq.push_embeds(projector.project(&pooled)?);
        let out = lm.greedy_generate(&seq, NEWLINE, t.len())?;
        let hits = t.iter().zip(&out).filter(|(a, b)| a == b).count();
        Ok((tape.scalar(loss), hits, t.len()))
    });
    let (mut ce, mut hits, mut total) = (0.0, 0, 0);
    for p in parts {
        let (l, h, n) = p?;
        ce += l;
        hits += h;
        total += n;
    }
    Ok(PsrtEval {
        mean_ce: ce / transcripts.len().max(1) as f64,
        transcription_accuracy: hits as f64 / total.max(1) as f64,
    })
}

/// Trains a fresh projector with cross-entropy on the transcript after the
/// recognition prompt and the speech prefix.
pub fn psrt_train(
    lm: &LanguageModel,
    encoder: &Encoder,
    projector_config: &ProjectorConfig,
    config: &PsrtConfig,
    mut on_log: impl FnMut(usize, &PsrtEval),
) -> Result<(Projector, PsrtReport)> {
    config.adam.validate()?;
    if config.batch_size == 0 || config.n_train == 0 || config.n_heldout == 0 {
        return Err(Error::Config("batch_size, n_train and n_heldout must be positive".into()));
    }
    let hashes_before = FreezeHashes::of(lm, encoder);
    let mut projector = Projector::new(projector_config.clone(), encoder.config().d_s, lm.d_model())?;
    let prompt = psrt_prompt(&Vocab::default());
    let train = grammar_transcripts(config.seed, TRAIN_STREAM, config.n_train);
    let heldout = grammar_transcripts(config.seed, HELDOUT_STREAM, config.n_heldout);
    let noise_seed = config.seed ^ HELDOUT_NOISE;
    let initial = eval_psrt(lm, encoder, &projector, &heldout, noise_seed)?;
    on_log(0, &initial);
    let mut evals = Vec::new();
    let losses = fit(
        &mut projector,
        config.steps,
        config.batch_size,
        &config.adam,
        config.eval_every,
        |proj, step, b| {
            let mut rng = Prng::derive(config.seed ^ BATCH_STREAM, (step * config.batch_size + b) as u64);
            let t = &train[rng.below(train.len())];
            let pooled = pool4(&encoder.encode(t, &mut rng)?)?;
            let mut tape = Tape::new();
            let pb = proj.bind(&mut tape, true);
            let loss = psrt_loss_tape(&mut tape, lm, proj, &pb, &prompt, &pooled, t)?;
            collect_grads(&tape, loss, &pb)
        },
        |step, proj| {
            hashes_before.verify(lm, encoder)?;
            let e = eval_psrt(lm, encoder, proj, &heldout, noise_seed)?;
            on_log(step, &e);
            evals.push((step, e.clone()));
            Ok(())
        },
    )?;
    let final_eval = evals.last().map(|e| e.1.clone()).unwrap_or_else(|| initial.clone());
    let hashes_after = FreezeHashes::of(lm, encoder);
    hashes_before.verify(lm, encoder)?;
    Ok((
        projector,
        PsrtReport {
            losses,
            initial,
            evals,
            final_eval,
            hashes_before,
            hashes_after,
        },
    ))
}
