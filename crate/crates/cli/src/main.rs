use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;
use serde_json::json;

use seal_core::align::{psrt_train, train_projector};
use seal_core::checkpoint::{Checkpoint, VERSION};
use seal_core::config::{RunConfig, SEED_ENV};
use seal_core::fewshot::{self, Bridge, EvalCell, EvalContext, EvalReport, Modality, Selection};
use seal_core::lm::{pretrain, LanguageModel};
use seal_core::projector::Projector;
use seal_core::speechsim::Encoder;
use seal_core::{Error, Result};

#[derive(Parser)]
#[command(name = "seal", version, about = "Speech-prefix alignment to a frozen toy LM, with few-shot evaluation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// TOML run configuration; omitted sections take their defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, default_value = ".")]
    out: PathBuf,
    /// Master seed for every section. SEAL_SEED takes precedence.
    #[arg(long)]
    seed: Option<u64>,
    /// Machine-readable summary on stdout.
    #[arg(long)]
    json: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Write test.jsonl and pool.jsonl for the configured task.
    GenData(#[command(flatten)] Common),
    /// Pretrain the language model; writes lm.ckpt and pretrain_report.json.
    PretrainLm(#[command(flatten)] Common),
    /// Train the projector with the alignment KL; writes seal.ckpt and align_report.json.
    Align {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        lm: PathBuf,
    },
    /// Train the projector on the transcription objective; writes psrt.ckpt and psrt_report.json.
    Psrt {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        lm: PathBuf,
    },
    /// Few-shot sweep; writes one JSON report per cell and summary.csv.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        lm: PathBuf,
        /// Needed for speech cells.
        #[arg(long)]
        projector: Option<PathBuf>,
        /// Directory holding test.jsonl and pool.jsonl.
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_delimiter = ',')]
        shots: Option<Vec<usize>>,
        #[arg(long, value_delimiter = ',')]
        modality: Option<Vec<Modality>>,
        #[arg(long, value_delimiter = ',')]
        selection: Option<Vec<Selection>>,
        /// Query modality (default speech).
        #[arg(long)]
        query: Option<Modality>,
    },
    /// Print a checkpoint's manifest.
    Inspect {
        path: PathBuf,
        #[arg(long)]
        json: bool,
    },
}

fn load_config(c: &Common) -> Result<RunConfig> {
    let mut config = match &c.config {
        Some(p) => RunConfig::from_toml(&fs::read_to_string(p)?)?,
        None => RunConfig::default(),
    };
    let env = std::env::var(SEED_ENV).ok();
    config.resolve_seed(c.seed, env.as_deref())?;
    config.validate()?;
    Ok(config)
}

fn write_report(path: &Path, config: &RunConfig, report: &impl Serialize) -> Result<()> {
    let doc = json!({ "config": config, "report": report });
    fs::write(path, serde_json::to_string_pretty(&doc)? + "\n")?;
    Ok(())
}

fn emit(json_mode: bool, value: serde_json::Value, text: String) {
    if json_mode {
        println!("{value}");
    } else {
        print!("{text}");
    }
}

fn load_lm(path: &Path, config: &RunConfig) -> Result<LanguageModel> {
    let lm = LanguageModel::from_checkpoint(&Checkpoint::load(path)?)?;
    if lm.config.d_model != config.encoder.d_s {
        return Err(Error::Config(format!(
            "lm checkpoint width {} does not match encoder.d_s {}",
            lm.config.d_model, config.encoder.d_s
        )));
    }
    Ok(lm)
}

fn gen_data(c: &Common) -> Result<()> {
    let config = load_config(c)?;
    fs::create_dir_all(&c.out)?;
    let t = &config.task;
    let test = fewshot::gen_task(t.kind, t.n_test, t.seed);
    let pool = fewshot::gen_task(t.kind, t.n_pool, t.pool_seed());
    fs::write(c.out.join("test.jsonl"), fewshot::data::to_jsonl(&test)?)?;
    fs::write(c.out.join("pool.jsonl"), fewshot::data::to_jsonl(&pool)?)?;
    emit(
        c.json,
        json!({ "task": t.kind, "test": test.len(), "pool": pool.len() }),
        format!("{}: wrote {} test and {} pool records\n", t.kind.name(), test.len(), pool.len()),
    );
    Ok(())
}

fn pretrain_lm(c: &Common) -> Result<()> {
    let config = load_config(c)?;
    fs::create_dir_all(&c.out)?;
    let (lm, report) = pretrain(&config.lm, &config.pretrain, |step, loss, _| {
        eprintln!("step {step} loss {loss:.4}");
    })?;
    let ckpt = lm.to_checkpoint()?;
    ckpt.save(&c.out.join("lm.ckpt"))?;
    write_report(&c.out.join("pretrain_report.json"), &config, &report)?;
    emit(
        c.json,
        json!({
            "heldout_loss_init": report.heldout_loss_init,
            "heldout_loss_final": report.heldout_loss_final,
            "induction_accuracy": report.induction_accuracy,
            "payload_sha256": ckpt.payload_hash(),
        }),
        format!(
            "held-out loss {:.4} -> {:.4}, induction accuracy {:.3}\n",
            report.heldout_loss_init, report.heldout_loss_final, report.induction_accuracy
        ),
    );
    Ok(())
}

fn align(c: &Common, lm_path: &Path, psrt: bool) -> Result<()> {
    let config = load_config(c)?;
    let lm = load_lm(lm_path, &config)?;
    let encoder = Encoder::new(config.encoder.clone(), lm.config.vocab_size)?;
    fs::create_dir_all(&c.out)?;
    let (name, projector, summary, text) = if psrt {
        let (p, r) = psrt_train(&lm, &encoder, &config.projector, &config.psrt, |step, e| {
            eprintln!("step {step} ce {:.4} transcription {:.3}", e.mean_ce, e.transcription_accuracy);
        })?;
        write_report(&c.out.join("psrt_report.json"), &config, &r)?;
        let text = format!(
            "cross-entropy {:.4} -> {:.4}, transcription accuracy {:.3}\n",
            r.initial.mean_ce, r.final_eval.mean_ce, r.final_eval.transcription_accuracy
        );
        ("psrt", p, json!({ "initial": r.initial, "final": r.final_eval }), text)
    } else {
        let (p, r) = train_projector(&lm, &encoder, &config.projector, &config.align, |step, e| {
            eprintln!("step {step} kl {:.4} agreement {:.3}", e.mean_kl, e.agreement);
        })?;
        write_report(&c.out.join("align_report.json"), &config, &r)?;
        let text = format!(
            "held-out KL {:.4} -> {:.4}, agreement {:.3} -> {:.3}\n",
            r.initial.mean_kl, r.final_eval.mean_kl, r.initial.agreement, r.final_eval.agreement
        );
        ("seal", p, json!({ "initial": r.initial, "final": r.final_eval }), text)
    };
    let ckpt = projector.to_checkpoint()?;
    ckpt.save(&c.out.join(format!("{name}.ckpt")))?;
    let mut summary = summary;
    summary["payload_sha256"] = json!(ckpt.payload_hash());
    emit(c.json, summary, text);
    Ok(())
}

fn load_dataset(path: &Path) -> Result<Vec<fewshot::Example>> {
    fewshot::data::from_jsonl(&fs::read_to_string(path)?)
}

fn cell_file(cell: &EvalCell) -> String {
    let query = match cell.query {
        Modality::Speech => String::new(),
        q => format!("_{}query", q.name()),
    };
    format!(
        "eval_{}_{}shot_{}_{}{query}.json",
        cell.task.name(),
        cell.n_shot,
        cell.modality.name(),
        cell.selection.name()
    )
}

/// One row per (modality, selection, metric), one column per shot count.
fn summary_csv(config: &RunConfig, reports: &[EvalReport]) -> String {
    let e = &config.eval;
    let mut out = String::from("task,modality,selection,metric");
    for n in &e.shots {
        write!(out, ",{n}-shot").unwrap();
    }
    out.push('\n');
    let metrics: Vec<String> = reports.first().map(|r| r.metrics.keys().cloned().collect()).unwrap_or_default();
    for &m in &e.modality {
        for &s in &e.selection {
            for metric in &metrics {
                write!(out, "{},{},{},{metric}", config.task.kind.name(), m.name(), s.name()).unwrap();
                for &n in &e.shots {
                    let v = reports
                        .iter()
                        .find(|r| r.cell.n_shot == n && r.cell.modality == m && r.cell.selection == s)
                        .and_then(|r| r.metric(metric));
                    match v {
                        Some(v) => write!(out, ",{v}").unwrap(),
                        None => out.push(','),
                    }
                }
                out.push('\n');
            }
        }
    }
    out
}

#[allow(clippy::too_many_arguments)]
fn eval(
    c: &Common,
    lm_path: &Path,
    projector_path: Option<&Path>,
    data: &Path,
    shots: Option<Vec<usize>>,
    modality: Option<Vec<Modality>>,
    selection: Option<Vec<Selection>>,
    query: Option<Modality>,
) -> Result<()> {
    let mut config = load_config(c)?;
    if let Some(s) = shots {
        config.eval.shots = s;
    }
    if let Some(m) = modality {
        config.eval.modality = m;
    }
    if let Some(s) = selection {
        config.eval.selection = s;
    }
    if let Some(q) = query {
        config.eval.query = q;
    }
    config.validate()?;
    let lm = load_lm(lm_path, &config)?;
    let encoder = Encoder::new(config.encoder.clone(), lm.config.vocab_size)?;
    let projector = match projector_path {
        Some(p) => Some(Projector::from_checkpoint(&Checkpoint::load(p)?)?),
        None => None,
    };
    if let Some(p) = &projector {
        if p.d_model() != lm.config.d_model {
            return Err(Error::Config(format!(
                "projector width {} does not match lm width {}",
                p.d_model(),
                lm.config.d_model
            )));
        }
    }
    let spoken = config.eval.query == Modality::Speech || config.eval.modality.contains(&Modality::Speech);
    if spoken && projector.is_none() {
        return Err(Error::Config("speech cells need --projector".into()));
    }
    let test = fewshot::encode_all(&load_dataset(&data.join("test.jsonl"))?, &encoder)?;
    let pool = fewshot::encode_all(&load_dataset(&data.join("pool.jsonl"))?, &encoder)?;
    let ctx = EvalContext {
        lm: &lm,
        bridge: projector.as_ref().map(Bridge::Projector),
        test: &test,
        pool: &pool,
        seed: config.eval.seed,
        max_new: config.eval.max_new,
    };
    fs::create_dir_all(&c.out)?;
    let mut reports = Vec::new();
    for &n_shot in &config.eval.shots {
        for &modality in &config.eval.modality {
            for &selection in &config.eval.selection {
                let cell = EvalCell {
                    task: config.task.kind,
                    n_shot,
                    modality,
                    selection,
                    query: config.eval.query,
                };
                let report = fewshot::run_eval(&ctx, cell)?;
                eprintln!("{} {:?}", cell_file(&cell), report.metrics);
                write_report(&c.out.join(cell_file(&cell)), &config, &report)?;
                reports.push(report);
            }
        }
    }
    let csv = summary_csv(&config, &reports);
    fs::write(c.out.join("summary.csv"), &csv)?;
    let cells: Vec<_> = reports.iter().map(|r| json!({ "cell": r.cell, "metrics": r.metrics })).collect();
    emit(c.json, json!({ "cells": cells }), csv);
    Ok(())
}

fn inspect(path: &Path, json_mode: bool) -> Result<()> {
    let ckpt = Checkpoint::load(path)?;
    let tensors: Vec<_> = ckpt
        .tensors
        .iter()
        .map(|(n, t)| json!({ "name": n, "shape": t.shape() }))
        .collect();
    let mut text = format!(
        "version {VERSION}\nkind {}\npayload sha256 {}\ntensors {}\n",
        ckpt.kind,
        ckpt.payload_hash(),
        ckpt.tensors.len()
    );
    for (n, t) in &ckpt.tensors {
        writeln!(text, "  {n} {:?}", t.shape()).unwrap();
    }
    writeln!(text, "config {}", serde_json::to_string_pretty(&ckpt.config)?).unwrap();
    emit(
        json_mode,
        json!({
            "version": VERSION,
            "kind": ckpt.kind,
            "payload_sha256": ckpt.payload_hash(),
            "tensors": tensors,
            "config": ckpt.config,
        }),
        text,
    );
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenData(c) => gen_data(&c),
        Command::PretrainLm(c) => pretrain_lm(&c),
        Command::Align { common, lm } => align(&common, &lm, false),
        Command::Psrt { common, lm } => align(&common, &lm, true),
        Command::Eval {
            common,
            lm,
            projector,
            data,
            shots,
            modality,
            selection,
            query,
        } => eval(&common, &lm, projector.as_deref(), &data, shots, modality, selection, query),
        Command::Inspect { path, json } => inspect(&path, json),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
