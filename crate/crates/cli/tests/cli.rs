use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::sync::OnceLock;

use serde_json::Value;

const TINY: &str = r#"
[pretrain]
steps = 4
batch_size = 2
seq_len = 32
log_every = 2
cooldown_steps = 2

[align]
steps = 3
batch_size = 2
n_train = 6
n_heldout = 3
eval_every = 2

[psrt]
steps = 3
batch_size = 2
n_train = 6
n_heldout = 3
eval_every = 2

[task]
n_test = 5
n_pool = 8

[eval]
max_new = 10
"#;

fn seal(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_seal"))
        .args(args)
        .env_remove("SEAL_SEED")
        .output()
        .expect("spawn seal")
}

fn ok(args: &[&str]) -> Output {
    let out = seal(args);
    assert!(
        out.status.success(),
        "seal {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn write_config(dir: &Path, extra: &str) -> PathBuf {
    let p = dir.join("run.toml");
    fs::write(&p, format!("{TINY}\n{extra}")).unwrap();
    p
}

/// A tiny pretrained LM shared by the tests that need one.
fn shared_lm() -> &'static Path {
    static DIR: OnceLock<tempfile::TempDir> = OnceLock::new();
    DIR.get_or_init(|| {
        let d = tempfile::tempdir().unwrap();
        let cfg = write_config(d.path(), "");
        ok(&["pretrain-lm", "--config", s(&cfg), "--out", s(d.path())]);
        d
    })
    .path()
}

fn json_stdout(out: &Output) -> Value {
    serde_json::from_slice(&out.stdout).unwrap()
}

#[test]
fn gen_data_counts_and_is_reproducible() {
    let d = tempfile::tempdir().unwrap();
    let cfg = write_config(d.path(), "");
    let (a, b) = (d.path().join("a"), d.path().join("b"));
    let out = ok(&["gen-data", "--config", s(&cfg), "--out", s(&a), "--json"]);
    assert_eq!(json_stdout(&out)["test"], 5);
    ok(&["gen-data", "--config", s(&cfg), "--out", s(&b)]);
    for f in ["test.jsonl", "pool.jsonl"] {
        assert_eq!(fs::read(a.join(f)).unwrap(), fs::read(b.join(f)).unwrap());
    }
    assert_eq!(fs::read_to_string(a.join("test.jsonl")).unwrap().lines().count(), 5);
    assert_eq!(fs::read_to_string(a.join("pool.jsonl")).unwrap().lines().count(), 8);
}

#[test]
fn gen_data_with_zero_records_writes_empty_file() {
    let d = tempfile::tempdir().unwrap();
    let cfg = d.path().join("zero.toml");
    fs::write(&cfg, "[task]\nn_test = 0\nn_pool = 0\n").unwrap();
    ok(&["gen-data", "--config", s(&cfg), "--out", s(d.path())]);
    assert!(fs::read(d.path().join("test.jsonl")).unwrap().is_empty());
}

#[test]
fn seed_env_overrides_flag() {
    let d = tempfile::tempdir().unwrap();
    let cfg = write_config(d.path(), "");
    let run = |dir: &str, seed: &str, env: Option<&str>| {
        let mut c = Command::new(env!("CARGO_BIN_EXE_seal"));
        c.args(["gen-data", "--config", s(&cfg), "--out", s(&d.path().join(dir)), "--seed", seed]);
        match env {
            Some(v) => c.env("SEAL_SEED", v),
            None => c.env_remove("SEAL_SEED"),
        };
        assert!(c.output().unwrap().status.success());
        fs::read(d.path().join(dir).join("test.jsonl")).unwrap()
    };
    let a = run("a", "1", Some("9"));
    let b = run("b", "9", None);
    let c = run("c", "1", None);
    assert_eq!(a, b);
    assert_ne!(a, c);
}

#[test]
fn exit_codes() {
    let d = tempfile::tempdir().unwrap();
    let bad = d.path().join("bad.toml");
    fs::write(&bad, "[lm]\nwidth = 2\n").unwrap();
    assert_eq!(seal(&["gen-data", "--config", s(&bad)]).status.code(), Some(1));
    assert_eq!(seal(&["gen-data", "--bogus-flag"]).status.code(), Some(1));
    let missing = d.path().join("nope.toml");
    assert_eq!(seal(&["gen-data", "--config", s(&missing)]).status.code(), Some(2));
    assert_eq!(seal(&["inspect", s(&missing)]).status.code(), Some(2));
    assert_eq!(seal(&["--help"]).status.code(), Some(0));
}

#[test]
fn pretrain_is_reproducible_and_inspectable() {
    let lm = shared_lm();
    let d = tempfile::tempdir().unwrap();
    let cfg = write_config(d.path(), "");
    ok(&["pretrain-lm", "--config", s(&cfg), "--out", s(d.path())]);
    assert_eq!(fs::read(lm.join("lm.ckpt")).unwrap(), fs::read(d.path().join("lm.ckpt")).unwrap());
    let report: Value = serde_json::from_str(&fs::read_to_string(lm.join("pretrain_report.json")).unwrap()).unwrap();
    assert_eq!(report["config"]["pretrain"]["steps"], 4);
    let out = ok(&["inspect", s(&lm.join("lm.ckpt")), "--json"]);
    let v = json_stdout(&out);
    assert_eq!(v["kind"], "lm");
    assert_eq!(v["version"], 1);
    let names: Vec<&str> = v["tensors"].as_array().unwrap().iter().map(|t| t["name"].as_str().unwrap()).collect();
    assert!(names.contains(&"tok_emb"), "{names:?}");
}

#[test]
fn align_with_zero_steps_saves_the_initialization() {
    let lm = shared_lm();
    let d = tempfile::tempdir().unwrap();
    let cfg = write_config(d.path(), "");
    let text = fs::read_to_string(&cfg).unwrap().replace("[align]\nsteps = 3", "[align]\nsteps = 0");
    fs::write(&cfg, text).unwrap();
    ok(&["align", "--config", s(&cfg), "--out", s(d.path()), "--lm", s(&lm.join("lm.ckpt"))]);
    let saved = seal_core::checkpoint::Checkpoint::load(&d.path().join("seal.ckpt")).unwrap();
    let init = seal_core::projector::Projector::new(Default::default(), 64, 64)
        .unwrap()
        .to_checkpoint()
        .unwrap();
    assert_eq!(saved.to_bytes().unwrap(), init.to_bytes().unwrap());

    let v = json_stdout(&ok(&["inspect", s(&d.path().join("seal.ckpt")), "--json"]));
    let tensors = v["tensors"].as_array().unwrap();
    assert_eq!(tensors.len(), 6);
    let shapes: Vec<Value> = tensors.iter().map(|t| t["shape"].clone()).collect();
    assert_eq!(Value::Array(shapes), serde_json::json!([[64], [64], [64, 64], [64], [64], [64]]));
}

#[test]
fn align_and_psrt_reruns_match_and_corruption_is_caught() {
    let lm = shared_lm();
    let d = tempfile::tempdir().unwrap();
    let cfg = write_config(d.path(), "");
    let lm_ckpt = lm.join("lm.ckpt");
    let mut hashes = Vec::new();
    for sub in ["a", "b"] {
        let out = d.path().join(sub);
        let v = json_stdout(&ok(&["align", "--config", s(&cfg), "--out", s(&out), "--lm", s(&lm_ckpt), "--json"]));
        hashes.push(v["payload_sha256"].clone());
        ok(&["psrt", "--config", s(&cfg), "--out", s(&out), "--lm", s(&lm_ckpt)]);
    }
    assert_eq!(hashes[0], hashes[1]);
    let a = d.path().join("a");
    assert_eq!(fs::read(a.join("psrt.ckpt")).unwrap(), fs::read(d.path().join("b/psrt.ckpt")).unwrap());
    let report: Value = serde_json::from_str(&fs::read_to_string(a.join("align_report.json")).unwrap()).unwrap();
    assert_eq!(report["report"]["hashes_before"], report["report"]["hashes_after"]);

    let mut bytes = fs::read(a.join("seal.ckpt")).unwrap();
    let n = bytes.len();
    bytes[n - 40] ^= 0x10;
    let bad = d.path().join("bad.ckpt");
    fs::write(&bad, &bytes).unwrap();
    let out = seal(&["inspect", s(&bad)]);
    assert_eq!(out.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&out.stderr).contains("hash"));

    let mut bytes = fs::read(a.join("seal.ckpt")).unwrap();
    let pos = bytes.windows(6).position(|w| w == b"\"kind\"").unwrap();
    bytes[pos + 6] = b'#';
    fs::write(&bad, &bytes).unwrap();
    let out = seal(&["inspect", s(&bad)]);
    assert_ne!(out.status.code(), Some(0));
    assert!(String::from_utf8_lossy(&out.stderr).contains("manifest"));
}

#[test]
fn eval_sweep_writes_cells_and_consistent_summary() {
    let lm = shared_lm();
    let d = tempfile::tempdir().unwrap();
    let cfg = write_config(d.path(), "");
    let data = d.path().join("data");
    ok(&["gen-data", "--config", s(&cfg), "--out", s(&data)]);
    ok(&["align", "--config", s(&cfg), "--out", s(d.path()), "--lm", s(&lm.join("lm.ckpt"))]);
    let out_dir = d.path().join("eval");
    let args = |out: &Path, cfg: &Path| {
        vec![
            "eval".to_string(),
            "--config".into(),
            s(cfg).into(),
            "--out".into(),
            s(out).into(),
            "--lm".into(),
            s(&lm.join("lm.ckpt")).into(),
            "--projector".into(),
            s(&d.path().join("seal.ckpt")).into(),
            "--data".into(),
            s(&data).into(),
            "--shots".into(),
            "0,3,5".into(),
            "--modality".into(),
            "text,speech".into(),
            "--selection".into(),
            "random".into(),
        ]
    };
    let a = args(&out_dir, &cfg);
    ok(&a.iter().map(String::as_str).collect::<Vec<_>>());

    let cells: Vec<PathBuf> = fs::read_dir(&out_dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.extension().is_some_and(|x| x == "json"))
        .collect();
    assert_eq!(cells.len(), 6);

    let csv = fs::read_to_string(out_dir.join("summary.csv")).unwrap();
    let mut lines = csv.lines();
    assert_eq!(lines.next().unwrap(), "task,modality,selection,metric,0-shot,3-shot,5-shot");
    let rows: Vec<Vec<&str>> = lines.map(|l| l.split(',').collect()).collect();
    assert_eq!(rows.len(), 2);
    for row in &rows {
        for (col, n) in [0usize, 3, 5].iter().enumerate() {
            let f = out_dir.join(format!("eval_fsc_{n}shot_{}_random.json", row[1]));
            let v: Value = serde_json::from_str(&fs::read_to_string(f).unwrap()).unwrap();
            let want = v["report"]["metrics"][row[3]].as_f64().unwrap();
            assert_eq!(row[4 + col].parse::<f64>().unwrap(), want);
        }
    }

    // Re-running from the embedded config reproduces a report bitwise.
    let f = out_dir.join("eval_fsc_3shot_speech_random.json");
    let v: Value = serde_json::from_str(&fs::read_to_string(&f).unwrap()).unwrap();
    let config: seal_core::config::RunConfig = serde_json::from_value(v["config"].clone()).unwrap();
    let embedded = d.path().join("embedded.toml");
    fs::write(&embedded, config.to_toml().unwrap()).unwrap();
    let again = d.path().join("again");
    let b = args(&again, &embedded);
    ok(&b.iter().map(String::as_str).collect::<Vec<_>>());
    assert_eq!(fs::read(&f).unwrap(), fs::read(again.join("eval_fsc_3shot_speech_random.json")).unwrap());
}

#[test]
fn speech_eval_without_projector_is_a_validation_error() {
    let lm = shared_lm();
    let d = tempfile::tempdir().unwrap();
    let cfg = write_config(d.path(), "");
    ok(&["gen-data", "--config", s(&cfg), "--out", s(d.path())]);
    let out = seal(&[
        "eval",
        "--config",
        s(&cfg),
        "--out",
        s(d.path()),
        "--lm",
        s(&lm.join("lm.ckpt")),
        "--data",
        s(d.path()),
        "--modality",
        "speech",
    ]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn text_query_ceiling_runs_without_projector() {
    let lm = shared_lm();
    let d = tempfile::tempdir().unwrap();
    let cfg = write_config(d.path(), "");
    ok(&["gen-data", "--config", s(&cfg), "--out", s(d.path())]);
    let base = |query: &str| {
        seal(&[
            "eval",
            "--config",
            s(&cfg),
            "--out",
            s(d.path()),
            "--lm",
            s(&lm.join("lm.ckpt")),
            "--data",
            s(d.path()),
            "--shots",
            "0",
            "--modality",
            "text",
            "--query",
            query,
        ])
    };
    assert_eq!(base("speech").status.code(), Some(1));
    assert!(base("text").status.success());
    assert!(d.path().join("eval_fsc_0shot_text_kate_textquery.json").exists());
}
