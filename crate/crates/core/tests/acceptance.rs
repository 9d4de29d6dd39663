//! End-to-end acceptance run: one PASS/FAIL line per criterion, nonzero
//! exit if any fails. Pretrained LMs are cached under the cargo target tmp
//! dir, keyed by their configs; every run reloads them from the checkpoint.

use std::fmt::Write as _;
use std::panic::{self, AssertUnwindSafe};
use std::time::Instant;

use seal_core::align::{
    build_pair, grammar_transcripts, heldout_pairs, projector_kl, psrt_train, splice_loss,
    teacher_probs, train_projector, FreezeHashes, TrainReport,
};
use seal_core::config::RunConfig;
use seal_core::fewshot::{encode_all, gen_task, run_eval, Bridge, EvalCell, EvalContext, Modality, Selection, TaskKind};
use seal_core::lm::pretrain::pretrain;
use seal_core::lm::{LanguageModel, LmConfig, MixedSequence, PretrainConfig};
use seal_core::numcore::{grad_check, kl_row, log_softmax, softmax, Probe, Prng, Tape, Tensor, Var};
use seal_core::parallel;
use seal_core::projector::{Projector, ProjectorBinding, ProjectorConfig};
use seal_core::speechsim::{pool4, Encoder, EncoderConfig, SpeechFeatures};
use seal_core::{Error, Result};

#[path = "support/fixture.rs"]
mod fixture;
#[path = "support/metric_cases.rs"]
mod metric_cases;

use fixture::{backbone, second_config, Backbone};

const GRAD_TOL: f64 = 1e-4;
const KL_DROP: f64 = 0.80;
const AGREEMENT_GAIN: f64 = 0.40;
const INDUCTION: f64 = 0.95;

struct Verdict {
    pass: bool,
    detail: String,
}

impl Verdict {
    fn new(pass: bool, detail: impl Into<String>) -> Self {
        Self {
            pass,
            detail: detail.into(),
        }
    }
}

fn rand(shape: &[usize], seed: u64) -> Tensor {
    Tensor::randn(shape.to_vec(), 1.0, &mut Prng::new(seed))
}

/// `Σ x ⊙ w` for a fixed random `w`, so every output coordinate matters.
fn weighted_sum(tape: &mut Tape, x: Var, seed: u64) -> Result<Var> {
    let w = rand(tape.shape(x), seed);
    let w = tape.input(&w, false);
    let y = tape.mul(x, w)?;
    Ok(tape.sum(y))
}

fn teacher_rows(rows: usize, cols: usize, seed: u64) -> Tensor {
    softmax(&rand(&[rows, cols], seed))
}

type Case = (&'static str, Box<dyn Fn(&mut Tape, &[Var]) -> Result<Var>>, Vec<Tensor>);

fn primitive_cases() -> Vec<Case> {
    let teacher = teacher_rows(4, 6, 90);
    vec![
        (
            "matmul",
            Box::new(|t, v| {
                let y = t.matmul(v[0], v[1])?;
                weighted_sum(t, y, 1)
            }),
            vec![rand(&[3, 4], 10), rand(&[4, 5], 11)],
        ),
        (
            "add",
            Box::new(|t, v| {
                let y = t.add(v[0], v[1])?;
                weighted_sum(t, y, 2)
            }),
            vec![rand(&[3, 4], 12), rand(&[3, 4], 13)],
        ),
        (
            "mul",
            Box::new(|t, v| {
                let y = t.mul(v[0], v[1])?;
                weighted_sum(t, y, 3)
            }),
            vec![rand(&[3, 4], 14), rand(&[3, 4], 15)],
        ),
        (
            "add_row",
            Box::new(|t, v| {
                let y = t.add_row(v[0], v[1])?;
                weighted_sum(t, y, 4)
            }),
            vec![rand(&[3, 4], 16), rand(&[4], 17)],
        ),
        (
            "scale",
            Box::new(|t, v| {
                let y = t.scale(v[0], -1.7);
                weighted_sum(t, y, 5)
            }),
            vec![rand(&[3, 4], 18)],
        ),
        (
            "gelu",
            Box::new(|t, v| {
                let y = t.gelu(v[0]);
                weighted_sum(t, y, 6)
            }),
            vec![rand(&[3, 5], 19)],
        ),
        (
            "layer_norm",
            Box::new(|t, v| {
                let y = t.layer_norm(v[0], v[1], v[2], 1e-5)?;
                weighted_sum(t, y, 7)
            }),
            vec![rand(&[3, 6], 20), rand(&[6], 21), rand(&[6], 22)],
        ),
        (
            "gather_rows",
            Box::new(|t, v| {
                let y = t.gather_rows(v[0], &[2, 0, 2, 3])?;
                weighted_sum(t, y, 8)
            }),
            vec![rand(&[4, 3], 23)],
        ),
        (
            "concat_rows",
            Box::new(|t, v| {
                let y = t.concat_rows(&[v[0], v[1]])?;
                weighted_sum(t, y, 9)
            }),
            vec![rand(&[2, 3], 24), rand(&[3, 3], 25)],
        ),
        (
            "causal_attention",
            Box::new(|t, v| {
                let y = t.causal_attention(v[0], 2)?;
                weighted_sum(t, y, 10)
            }),
            vec![rand(&[5, 12], 26)],
        ),
        (
            "softmax",
            Box::new(|t, v| {
                let y = t.softmax(v[0]);
                weighted_sum(t, y, 11)
            }),
            vec![rand(&[3, 5], 27)],
        ),
        (
            "log_softmax",
            Box::new(|t, v| {
                let y = t.log_softmax(v[0]);
                weighted_sum(t, y, 12)
            }),
            vec![rand(&[3, 5], 28)],
        ),
        (
            "cross_entropy",
            Box::new(|t, v| t.cross_entropy(v[0], &[1, 4, 0, 2], &[true, true, false, true])),
            vec![rand(&[4, 5], 29)],
        ),
        (
            "kl_div",
            Box::new(move |t, v| {
                let logq = t.log_softmax(v[0]);
                t.kl_div(&teacher, logq, &[true, false, true, true])
            }),
            vec![rand(&[4, 6], 30)],
        ),
        (
            "sum",
            Box::new(|t, v| {
                let y = t.mul(v[0], v[0])?;
                Ok(t.sum(y))
            }),
            vec![rand(&[3, 4], 31)],
        ),
        (
            "mean",
            Box::new(|t, v| {
                let y = t.mul(v[0], v[0])?;
                Ok(t.mean(y))
            }),
            vec![rand(&[3, 4], 32)],
        ),
    ]
}

fn gradient_checks() -> Result<Verdict> {
    let t = Instant::now();
    let mut worst = (0.0f64, "none");
    for (name, f, inputs) in primitive_cases() {
        let err = grad_check(f, &inputs, 1e-5, Probe::All)?;
        if err > worst.0 {
            worst = (err, name);
        }
    }
    // Projector → frozen LM → KL on a narrow LM with randomized weights.
    let lm = LanguageModel::new(LmConfig {
        d_model: 16,
        d_ff: 32,
        max_seq_len: 96,
        ..LmConfig::default()
    })?;
    let encoder = Encoder::new(
        EncoderConfig {
            d_s: 16,
            ..EncoderConfig::default()
        },
        lm.config.vocab_size,
    )?;
    let transcript = &grammar_transcripts(3, 0, 1)[0];
    let pair = build_pair(&encoder, transcript, 2, lm.config.max_seq_len, &mut Prng::new(4))?;
    let teacher = teacher_probs(&lm, &pair)?;
    let config = ProjectorConfig::default();
    let shapes: [&[usize]; 6] = [&[16], &[16], &[16, 16], &[16], &[16], &[16]];
    let weights: Vec<Tensor> = shapes.iter().enumerate().map(|(i, s)| rand(s, 40 + i as u64)).collect();
    let projector = Projector::from_tensors(config, weights.clone())?;
    let composite = grad_check(
        |tape, v| {
            let pb = ProjectorBinding::from_vars([v[0], v[1], v[2], v[3], v[4], v[5]]);
            projector_kl(tape, &lm, &projector, &pb, &pair, &teacher)
        },
        &weights,
        1e-5,
        Probe::All,
    )?;
    if composite > worst.0 {
        worst = (composite, "projector→LM→KL");
    }
    let secs = t.elapsed().as_secs_f64();
    Ok(Verdict::new(
        worst.0 < GRAD_TOL && secs < 120.0,
        format!(
            "16 primitives + composite; worst rel err {:.2e} ({}), composite {:.2e}, {:.1}s",
            worst.0, worst.1, composite, secs
        ),
    ))
}

fn kl_contract(b: &Backbone) -> Result<Verdict> {
    let mut rng = Prng::new(77);
    let mut min_kl = f64::INFINITY;
    for i in 0..1000u64 {
        let cols = 2 + rng.below(63);
        let teacher = softmax(&Tensor::randn(vec![1, cols], 1.0 + rng.uniform() * 4.0, &mut rng));
        let student = Tensor::randn(vec![1, cols], 1.0 + rng.uniform() * 4.0, &mut Prng::derive(78, i));
        let mut tape = Tape::new();
        let s = tape.input(&student, false);
        let logq = tape.log_softmax(s);
        let kl = tape.kl_div(&teacher, logq, &[true])?;
        let row = kl_row(teacher.row(0), log_softmax(&student).row(0));
        min_kl = min_kl.min(tape.scalar(kl)).min(row);
    }
    let pairs = heldout_pairs(&b.lm, &b.encoder, &b.config.align)?;
    let mut splice_max: f64 = 0.0;
    for pair in pairs.iter().take(32) {
        let l = splice_loss(&b.lm, pair, &b.lm.embed(&pair.transcript)?)?;
        splice_max = splice_max.max(l.abs());
    }
    Ok(Verdict::new(
        min_kl >= 0.0 && splice_max <= 1e-10,
        format!("min KL over 10^3 pairs {min_kl:.3e}; max |oracle splice loss| over 32 pairs {splice_max:.1e}"),
    ))
}

/// Payload hashes of the LM and encoder checkpoints plus the in-memory
/// freeze witness.
fn frozen_state(b: &Backbone) -> Result<(String, String, FreezeHashes)> {
    Ok((
        b.lm.to_checkpoint()?.payload_hash(),
        b.encoder.to_checkpoint()?.payload_hash(),
        FreezeHashes::of(&b.lm, &b.encoder),
    ))
}

struct Trained {
    seal: Projector,
    seal_report: TrainReport,
    seal_secs: f64,
}

fn align(b: &Backbone) -> Result<Trained> {
    let t = Instant::now();
    let (seal, seal_report) = train_projector(&b.lm, &b.encoder, &b.config.projector, &b.config.align, |s, e| {
        eprintln!("  align step {s} kl {:.4} agreement {:.3}", e.mean_kl, e.agreement)
    })?;
    Ok(Trained {
        seal,
        seal_report,
        seal_secs: t.elapsed().as_secs_f64(),
    })
}

fn efficacy(b: &Backbone, tr: &Trained) -> Verdict {
    let (i, f) = (tr.seal_report.initial, tr.seal_report.final_eval);
    let drop = 1.0 - f.mean_kl / i.mean_kl;
    let gain = f.agreement - i.agreement;
    Verdict::new(
        b.induction >= INDUCTION && drop >= KL_DROP && gain >= AGREEMENT_GAIN && tr.seal_secs <= 1800.0,
        format!(
            "induction {:.3}; KL {:.4} -> {:.4} (drop {:.1}%); agreement {:.3} -> {:.3} (+{:.1}pp); {} steps in {:.0}s",
            b.induction,
            i.mean_kl,
            f.mean_kl,
            100.0 * drop,
            i.agreement,
            f.agreement,
            100.0 * gain,
            b.config.align.steps,
            tr.seal_secs
        ),
    )
}

fn pooling_laws(b: &Backbone, projector: &Projector) -> Result<Verdict> {
    let d = b.lm.d_model();
    let mut rng = Prng::new(5);
    let mut bad_len = Vec::new();
    let mut changed = 0;
    for valid in 1..=64usize {
        let pad = rng.below(9);
        let frames = Tensor::randn(vec![valid + pad, d], 1.0, &mut rng);
        let f = SpeechFeatures::new(frames.clone(), valid)?;
        let pooled = pool4(&f)?;
        if pooled.valid_len != valid.div_ceil(4) {
            bad_len.push(valid);
        }
        let mut perturbed = frames.clone();
        for x in &mut perturbed.data_mut()[valid * d..] {
            *x = 1e3 * rng.normal();
        }
        let g = pool4(&SpeechFeatures::new(perturbed, valid)?)?;
        let downstream = |p: &SpeechFeatures| -> Result<(Vec<f64>, Vec<f64>)> {
            let rows = projector.project(p)?;
            let mut seq = MixedSequence::new();
            seq.push_embeds(rows.clone());
            seq.push_tokens(&[1, 2]);
            Ok((rows.data().to_vec(), b.lm.forward(&seq)?.data().to_vec()))
        };
        let (a, c) = (downstream(&pooled)?, downstream(&g)?);
        let bits = |v: &[f64]| v.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
        if bits(&a.0) != bits(&c.0) || bits(&a.1) != bits(&c.1) || pooled.valid().data() != g.valid().data() {
            changed += 1;
        }
    }
    Ok(Verdict::new(
        bad_len.is_empty() && changed == 0,
        format!(
            "length law failures {:?}; valid lengths whose output changed under padding perturbation: {changed}/64",
            bad_len
        ),
    ))
}

fn icl_trends(b: &Backbone, seal: &Projector, psrt: &Projector) -> Result<Verdict> {
    let task = &b.config.task;
    let test = encode_all(&gen_task(TaskKind::Fsc, task.n_test, task.seed), &b.encoder)?;
    let pool = encode_all(&gen_task(TaskKind::Fsc, task.n_pool, task.pool_seed()), &b.encoder)?;
    let acc = |p: &Projector, n_shot: usize, modality: Modality, selection: Selection| -> Result<f64> {
        let ctx = EvalContext {
            lm: &b.lm,
            bridge: Some(Bridge::Projector(p)),
            test: &test,
            pool: &pool,
            seed: b.config.eval.seed,
            max_new: b.config.eval.max_new,
        };
        let cell = EvalCell {
            task: TaskKind::Fsc,
            n_shot,
            modality,
            query: Modality::Speech,
            selection,
        };
        Ok(run_eval(&ctx, cell)?.metric("accuracy").unwrap_or(0.0))
    };
    let mut table = String::new();
    let mut failures = Vec::new();
    let mut grid = std::collections::BTreeMap::new();
    for (name, p) in [("seal", seal), ("psrt", psrt)] {
        let zero = acc(p, 0, Modality::Speech, Selection::Fixed)?;
        write!(table, "{name} 0-shot {zero:.3};").unwrap();
        grid.insert((name, 0, "-", "-"), zero);
        for m in [Modality::Text, Modality::Speech] {
            for s in [Selection::Random, Selection::Kate] {
                for n in [3, 5] {
                    let a = acc(p, n, m, s)?;
                    write!(table, " {n}/{}/{} {a:.3}", m.name(), s.name()).unwrap();
                    grid.insert((name, n, m.name(), s.name()), a);
                }
            }
        }
        table.push_str("; ");
    }
    for m in ["text", "speech"] {
        for s in ["random", "kate"] {
            if grid[&("seal", 3, m, s)] <= grid[&("seal", 0, "-", "-")] {
                failures.push(format!("3-shot {m}/{s} not above 0-shot"));
            }
        }
        for n in [3, 5] {
            if grid[&("seal", n, m, "kate")] < grid[&("seal", n, m, "random")] {
                failures.push(format!("{n}-shot {m}: kate below random"));
            }
        }
    }
    for (&(name, n, m, s), &a) in &grid {
        if name == "seal" && a <= grid[&("psrt", n, m, s)] {
            failures.push(format!("{n}-shot {m}/{s}: seal not above psrt"));
        }
    }
    Ok(Verdict::new(
        failures.is_empty(),
        format!("n_test {}: {table}failures {failures:?}", task.n_test),
    ))
}

fn metric_oracles() -> Verdict {
    let n = metric_cases::pinned().len();
    let mut bad = metric_cases::slu_mismatches();
    bad.extend(metric_cases::accuracy_mismatches());
    let round = metric_cases::round_trip_failures(5000);
    Verdict::new(
        n == 20 && bad.is_empty() && round.is_empty(),
        format!(
            "{n} pinned SLU-F1 cases, mismatches {bad:?}; round-trip failures {} / 10000",
            round.len()
        ),
    )
}

fn determinism(b: &Backbone, seal: &Projector) -> Result<Verdict> {
    let mut config = RunConfig::default();
    config.pretrain = PretrainConfig {
        steps: 20,
        seq_len: 64,
        log_every: 5,
        ..config.pretrain
    };
    config.align.steps = 20;
    config.align.n_train = 32;
    config.align.n_heldout = 8;
    config.align.eval_every = 10;
    let run = || -> Result<(Vec<u8>, String, Vec<u8>, String)> {
        let (lm, report) = pretrain(&config.lm, &config.pretrain, |_, _, _| {})?;
        let lm_bytes = lm.to_checkpoint()?.to_bytes()?;
        let lm_report = serde_json::to_string(&report)?;
        let encoder = Encoder::new(config.encoder.clone(), lm.config.vocab_size)?;
        let (p, r) = train_projector(&lm, &encoder, &config.projector, &config.align, |_, _| {})?;
        Ok((lm_bytes, lm_report, p.to_checkpoint()?.to_bytes()?, serde_json::to_string(&r)?))
    };
    let (a, c) = (run()?, run()?);
    let runs_equal = a == c;

    let task = &b.config.task;
    let test = encode_all(&gen_task(TaskKind::Fsc, 40, task.seed), &b.encoder)?;
    let pool = encode_all(&gen_task(TaskKind::Fsc, task.n_pool, task.pool_seed()), &b.encoder)?;
    let ctx = EvalContext {
        lm: &b.lm,
        bridge: Some(Bridge::Projector(seal)),
        test: &test,
        pool: &pool,
        seed: b.config.eval.seed,
        max_new: b.config.eval.max_new,
    };
    let cell = EvalCell {
        task: TaskKind::Fsc,
        n_shot: 3,
        modality: Modality::Speech,
        query: Modality::Speech,
        selection: Selection::Random,
    };
    let one = parallel::with_threads(1, || run_eval(&ctx, cell))?;
    let four = parallel::with_threads(4, || run_eval(&ctx, cell))?;
    let eval_equal = one == four;
    Ok(Verdict::new(
        runs_equal && eval_equal,
        format!(
            "pretrain+align reruns bitwise equal: {runs_equal}; eval report under 1 vs 4 workers equal: {eval_equal} (accuracy {:?})",
            one.metric("accuracy")
        ),
    ))
}

/// Borrows a shared upstream result, turning its error into a message.
fn done<T>(r: &Result<T>) -> Result<&T> {
    r.as_ref().map_err(|e| Error::Invalid(format!("upstream step failed: {e}")))
}

fn guarded(f: impl FnOnce() -> Result<Verdict>) -> Verdict {
    match panic::catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(v)) => v,
        Ok(Err(e)) => Verdict::new(false, format!("error: {e}")),
        Err(_) => Verdict::new(false, "panicked"),
    }
}

fn main() {
    let start = Instant::now();
    let mut results: Vec<(&str, Verdict)> = Vec::new();
    let report = |name: &'static str, v: Verdict, results: &mut Vec<(&str, Verdict)>| {
        eprintln!("[{:.0}s] {} {name}: {}", start.elapsed().as_secs_f64(), if v.pass { "PASS" } else { "FAIL" }, v.detail);
        results.push((name, v));
    };

    report("1 gradient checks", guarded(gradient_checks), &mut results);

    let primary = backbone(RunConfig::default());
    let second = backbone(second_config());
    let (primary, second) = match (primary, second) {
        (Ok(p), Ok(s)) => (p, s),
        (p, s) => {
            let why = format!("{:?} / {:?}", p.err(), s.err());
            for name in ["2 KL contract", "3 freeze", "4 masking and pooling", "5 alignment efficacy", "6 ICL trends", "7 second backbone", "9 determinism"] {
                report(name, Verdict::new(false, format!("no pretrained LM: {why}")), &mut results);
            }
            report("8 metric oracles", metric_oracles(), &mut results);
            finish(&results);
        }
    };
    eprintln!(
        "primary LM: heldout loss {:.3} -> {:.3}, induction {:.3}; second LM induction {:.3}",
        primary.report.heldout_loss_init, primary.report.heldout_loss_final, primary.induction, second.induction
    );

    report("2 KL contract", guarded(|| kl_contract(&primary)), &mut results);

    let before = frozen_state(&primary);
    let trained = align(&primary);
    let after_align = frozen_state(&primary);
    let psrt = psrt_train(&primary.lm, &primary.encoder, &primary.config.projector, &primary.config.psrt, |s, e| {
        eprintln!("  psrt step {s} ce {:.4} transcription {:.3}", e.mean_ce, e.transcription_accuracy)
    });
    let after_psrt = frozen_state(&primary);
    report(
        "3 freeze",
        guarded(|| {
            let (before, after_align, after_psrt) = (before?, after_align?, after_psrt?);
            let (tr, (_, pr)) = (done(&trained)?, done(&psrt)?);
            let same = before.0 == after_align.0
                && before.0 == after_psrt.0
                && before.1 == after_align.1
                && before.1 == after_psrt.1
                && before.2 == after_align.2
                && before.2 == after_psrt.2
                && tr.seal_report.hashes_before == tr.seal_report.hashes_after
                && pr.hashes_before == pr.hashes_after;
            Ok(Verdict::new(
                same,
                format!(
                    "lm {}…, encoder {}… unchanged across {} align and {} PSRT steps: {same}",
                    &before.0[..12],
                    &before.1[..12],
                    primary.config.align.steps,
                    primary.config.psrt.steps
                ),
            ))
        }),
        &mut results,
    );

    report(
        "4 masking and pooling",
        guarded(|| pooling_laws(&primary, &done(&trained)?.seal)),
        &mut results,
    );
    report(
        "5 alignment efficacy",
        guarded(|| Ok(efficacy(&primary, done(&trained)?))),
        &mut results,
    );
    report(
        "6 ICL trends",
        guarded(|| {
            let tr = done(&trained)?;
            let (p, pr) = done(&psrt)?;
            eprintln!("  psrt transcription accuracy {:.3}", pr.final_eval.transcription_accuracy);
            icl_trends(&primary, &tr.seal, p)
        }),
        &mut results,
    );
    report(
        "7 second backbone",
        guarded(|| Ok(efficacy(&second, &align(&second)?))),
        &mut results,
    );
    report("8 metric oracles", guarded(|| Ok(metric_oracles())), &mut results);
    report(
        "9 determinism",
        guarded(|| determinism(&primary, &done(&trained)?.seal)),
        &mut results,
    );
    finish(&results);
}

fn finish(results: &[(&str, Verdict)]) -> ! {
    for (name, v) in results {
        println!("{} {name}: {}", if v.pass { "PASS" } else { "FAIL" }, v.detail);
    }
    let failed = results.iter().filter(|r| !r.1.pass).count();
    println!("{} of {} criteria passed", results.len() - failed, results.len());
    std::process::exit(i32::from(failed > 0));
}
