use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn dipole(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_dipole")).args(args).output().expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = dipole(args);
    assert!(
        out.status.success(),
        "dipole {args:?} failed:\n{}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

const SMALL: &[&str] = &[
    "--n-patients", "80", "--set", "vocab_size=30", "--set", "n_categories=6", "--set", "visits_max=12",
    "--set", "visits_mean=6", "--set", "codes_max=5", "--set", "codes_mean=2", "--set", "n_rules=3",
    "--set", "lag=2",
];

const MODEL: &[&str] = &["--embed-dim", "6", "--hidden-dim", "6", "--attention-dim", "4", "--batch-size", "16"];

fn synth(dir: &Path) -> String {
    let corpus = dir.join("corpus.tsv").display().to_string();
    ok(&[&["synth", "--out", &corpus], SMALL].concat());
    corpus
}

fn train(corpus: &str, out: &Path, variant: &str, epochs: &str) {
    let out = out.display().to_string();
    ok(&[&["train", "--corpus", corpus, "--out", &out, "--variant", variant, "--epochs", epochs], MODEL].concat());
}

#[test]
fn synth_writes_corpus_sidecar_and_settings() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = synth(dir.path());
    assert!(fs::read_to_string(&corpus).unwrap().contains("#code"));
    let sidecar = fs::read_to_string(format!("{corpus}.rules.json")).unwrap();
    assert!(sidecar.contains("trigger_code"));
    assert!(fs::read_to_string(format!("{corpus}.run.cfg")).unwrap().contains("n_patients = 80"));
}

#[test]
fn one_epoch_run_logs_one_line_and_reloads() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = synth(dir.path());
    let model = dir.path().join("m");
    train(&corpus, &model, "dipole_c", "1");
    let log = fs::read_to_string(model.join("metrics.tsv")).unwrap();
    assert_eq!(log.lines().count(), 2, "{log}");
    assert!(log.starts_with("epoch\ttrain_loss\tval_accuracy"));
    assert!(model.join("manifest.json").exists() && model.join("params.bin").exists());
    let table = ok(&["eval", "--corpus", &corpus, "--model", &model.display().to_string()]);
    assert!(table.lines().nth(1).unwrap().starts_with("dipole_c\t"));
}

#[test]
fn eval_is_deterministic_and_compares_models() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = synth(dir.path());
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    train(&corpus, &a, "rnn", "2");
    train(&corpus, &b, "dipole_l", "2");
    let (a, b) = (a.display().to_string(), b.display().to_string());
    let args = ["eval", "--corpus", &corpus, "--model", &a, "--model", &b, "--part", "all"];
    let first = ok(&args);
    assert_eq!(first, ok(&args));
    let rows: Vec<&str> = first.lines().take(3).collect();
    assert!(rows[0].starts_with("variant\tpredictions\t#C\taccuracy\tacc@5"));
    assert!(rows[1].starts_with("rnn\t") && rows[2].starts_with("dipole_l\t"));
}

#[test]
fn interpret_exports_traces_and_dimensions() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = synth(dir.path());
    let model = dir.path().join("m");
    train(&corpus, &model, "dipole_g", "1");
    let prefix = dir.path().join("interp").display().to_string();
    ok(&["interpret", "--corpus", &corpus, "--model", &model.display().to_string(), "--out", &prefix, "--top-k", "3"]);
    let traces = fs::read_to_string(format!("{prefix}.traces.tsv")).unwrap();
    assert!(traces.starts_with("patient_id\tt\tweights\n"));
    for line in traces.lines().skip(1) {
        let fields: Vec<&str> = line.split('\t').collect();
        let t: usize = fields[1].parse().unwrap();
        assert_eq!(fields.len() - 2, t - 1);
    }
    let dims = fs::read_to_string(format!("{prefix}.dimensions.tsv")).unwrap();
    assert_eq!(dims.lines().count(), 1 + 6 * 3);
}

#[test]
fn gradcheck_passes() {
    let out = ok(&["gradcheck"]);
    assert_eq!(out.lines().filter(|l| l.ends_with("\tpass")).count(), 12, "{out}");
}

#[test]
fn bad_settings_are_rejected() {
    let out = dipole(&["gradcheck", "--set", "learning_rate=1"]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("unknown config key"));
    let out = dipole(&["gradcheck", "--variant", "lstm"]);
    assert!(!out.status.success());
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.cfg");
    fs::write(&cfg, "epochs = 3\nnonsense\n").unwrap();
    let out = dipole(&["gradcheck", "--config", &cfg.display().to_string()]);
    assert!(String::from_utf8_lossy(&out.stderr).contains("bad.cfg:2"));
}
