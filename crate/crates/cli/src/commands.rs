use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::ValueEnum;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use dipole_core::ehr_data::{encode_dataset, load_corpus, save_corpus, split, LoadOptions};
use dipole_core::interpret::{attention_traces, interpret_dimension, write_dimension_reports, write_traces};
use dipole_core::model::{load_model, save_model, CausalityMode, Model, ModelConfig, Variant};
use dipole_core::nn_core::{grad_check, GradCheckConfig};
use dipole_core::synth_gen::{generate, summarize, Sidecar};
use dipole_core::train_eval::{evaluate, train_with, EpochRecord, EvalReport, K_VALUES};
use dipole_core::{CodedSequenceDataset, EncodedPatient, PatientRecord, Tensor, Visit, Vocabulary};

use crate::config::RunConfig;

pub const RUN_CONFIG: &str = "run.cfg";
pub const METRICS: &str = "metrics.tsv";

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Part {
    Train,
    Validation,
    Test,
    All,
}

fn with_suffix(path: &Path, suffix: &str) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

fn load(cfg: &RunConfig, corpus: &Path) -> Result<CodedSequenceDataset> {
    let (dataset, summary) = load_corpus(
        corpus,
        LoadOptions {
            min_visits: cfg.min_visits,
        },
    )?;
    if summary.rejected_short > 0 {
        eprintln!(
            "skipped {} patients with fewer than {} visits",
            summary.rejected_short, cfg.min_visits
        );
    }
    Ok(dataset)
}

fn select(cfg: &RunConfig, dataset: &CodedSequenceDataset, part: Part) -> Result<CodedSequenceDataset> {
    if part == Part::All {
        return Ok(dataset.clone());
    }
    let parts = split(dataset, &cfg.split_spec())?;
    Ok(match part {
        Part::Train => parts.train,
        Part::Validation => parts.validation,
        _ => parts.test,
    })
}

pub fn synth(cfg: &RunConfig, out: &Path) -> Result<()> {
    let gen_cfg = cfg.generator();
    let generated = generate(&gen_cfg)?;
    save_corpus(&generated.dataset, out)?;
    Sidecar::new(&gen_cfg, &generated).save(with_suffix(out, ".rules.json"))?;
    cfg.save(&with_suffix(out, ".run.cfg"))?;
    println!("{}", summarize(&generated.dataset));
    println!("planted rules\t{}", generated.rules.len());
    println!("rule trigger rate\t{:.4}", generated.trigger_rate());
    Ok(())
}

pub fn train(cfg: &RunConfig, corpus: &Path, out: &Path) -> Result<()> {
    let dataset = load(cfg, corpus)?;
    let parts = split(&dataset, &cfg.split_spec())?;
    let (train_set, validation) = (encode_dataset(&parts.train)?, encode_dataset(&parts.validation)?);
    let model_cfg = cfg.model(dataset.vocabulary.n_codes(), dataset.vocabulary.n_categories());
    let model = Model::init(model_cfg, &mut ChaCha8Rng::seed_from_u64(cfg.seed))?;
    eprintln!(
        "training {} on {} patients ({} validation)",
        cfg.variant,
        train_set.len(),
        validation.len()
    );
    eprintln!("{}", EpochRecord::HEADER);
    let outcome = train_with(model, &train_set, &validation, &cfg.train(), |r| eprintln!("{}", r.to_line()))?;
    save_model(&outcome.model, out)?;
    let mut log = format!("{}\n", EpochRecord::HEADER);
    for r in &outcome.history {
        log.push_str(&r.to_line());
        log.push('\n');
    }
    fs::write(out.join(METRICS), log).context("writing metrics log")?;
    cfg.save(&out.join(RUN_CONFIG))?;
    let best = &outcome.history[outcome.best_epoch - 1];
    println!("best epoch\t{}", outcome.best_epoch);
    println!("validation accuracy\t{:.4}", best.val_accuracy);
    Ok(())
}

fn report_table(rows: &[(String, EvalReport)]) -> String {
    let mut out = String::from("variant\tpredictions\t#C\taccuracy");
    for k in K_VALUES {
        let _ = write!(out, "\tacc@{k}");
    }
    out.push('\n');
    for (name, r) in rows {
        let _ = write!(out, "{name}\t{}\t{}\t{:.4}", r.n_predictions, r.correct_count, r.accuracy);
        for k in K_VALUES {
            let _ = write!(out, "\t{:.4}", r.at(k).unwrap_or(f64::NAN));
        }
        out.push('\n');
    }
    if let Some((_, first)) = rows.first() {
        let _ = writeln!(out, "\nvariant\tgroup (visits/{})\tpatients\taccuracy", first.group_divisor);
        for (name, r) in rows {
            for g in &r.groups {
                let _ = writeln!(out, "{name}\t{}\t{}\t{:.4}", g.group, g.patients, g.accuracy);
            }
        }
    }
    out
}

pub fn eval(cfg: &RunConfig, corpus: &Path, models: &[PathBuf], part: Part, out: Option<&Path>) -> Result<()> {
    let dataset = load(cfg, corpus)?;
    let patients = encode_dataset(&select(cfg, &dataset, part)?)?;
    let mut rows = Vec::with_capacity(models.len());
    for path in models {
        let model = load_model(path).with_context(|| format!("loading {}", path.display()))?;
        let report = evaluate(&model, &patients, CausalityMode::Prefix, cfg.group_divisor, cfg.workers)?;
        rows.push((model.variant().to_string(), report));
    }
    let table = report_table(&rows);
    print!("{table}");
    if let Some(out) = out {
        fs::write(out, &table).with_context(|| format!("writing {}", out.display()))?;
        cfg.save(&with_suffix(out, ".run.cfg"))?;
    }
    Ok(())
}

pub fn interpret(cfg: &RunConfig, corpus: &Path, model: &Path, out: &Path, top_k: usize, part: Part) -> Result<()> {
    let dataset = load(cfg, corpus)?;
    let subset = select(cfg, &dataset, part)?;
    let model = load_model(model).with_context(|| format!("loading {}", model.display()))?;
    if model.variant().attention().is_some() {
        let traces = attention_traces(&model, &subset)?;
        let path = with_suffix(out, ".traces.tsv");
        fs::write(&path, write_traces(&traces)).with_context(|| format!("writing {}", path.display()))?;
        println!("attention traces\t{}\t{}", traces.len(), path.display());
    } else {
        eprintln!("{} has no attention; skipping traces", model.variant());
    }
    let w_v = model.embedding_weight();
    let reports = (0..w_v.rows())
        .map(|d| interpret_dimension(w_v, &dataset.vocabulary, d, top_k.min(dataset.vocabulary.n_codes())))
        .collect::<dipole_core::Result<Vec<_>>>()?;
    let path = with_suffix(out, ".dimensions.tsv");
    fs::write(&path, write_dimension_reports(&reports)).with_context(|| format!("writing {}", path.display()))?;
    println!("dimension reports\t{}\t{}", reports.len(), path.display());
    cfg.save(&with_suffix(out, ".run.cfg"))?;
    Ok(())
}

/// Random 4-visit patients over 5 codes in 3 categories.
fn tiny_patients(rng: &mut ChaCha8Rng) -> Result<Vec<EncodedPatient>> {
    let vocab = Vocabulary::from_pairs([("a", "x"), ("b", "x"), ("c", "y"), ("d", "y"), ("e", "z")])?;
    let mut out = Vec::new();
    for i in 0..2 {
        let visits = (0..4)
            .map(|_| {
                let codes: Vec<usize> = (0..5).filter(|_| rng.gen_bool(0.4)).collect();
                Visit::new(if codes.is_empty() { vec![rng.gen_range(0..5)] } else { codes })
            })
            .collect::<dipole_core::Result<Vec<_>>>()?;
        let record = PatientRecord::new(format!("g{i}"), visits)?;
        out.push(dipole_core::ehr_data::encode_patient(&record, &vocab)?);
    }
    Ok(out)
}

pub fn gradcheck(cfg: &RunConfig) -> Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let patients = tiny_patients(&mut rng)?;
    let mut failed = Vec::new();
    println!("variant\tmode\tmax_rel_error\tresult");
    for variant in Variant::ALL {
        for mode in [CausalityMode::Prefix, CausalityMode::Full] {
            if mode == CausalityMode::Full && !variant.bidirectional() {
                continue;
            }
            let mut mc = ModelConfig::new(variant, 5, 3).with_dims(3, 3, 2);
            mc.attentional_dim = 6;
            mc.dropout = 0.0;
            let mut model = Model::init(mc, &mut rng)?;
            // non-zero biases so every term of the gradient is exercised
            for id in model.store().ids().collect::<Vec<_>>() {
                if model.store().kind(id) == dipole_core::nn_core::ParamKind::Bias {
                    let shape = model.store().get(id).shape().to_vec();
                    let n = shape.iter().product();
                    let values = (0..n).map(|_| rng.gen_range(-0.2..0.2)).collect();
                    model.store_mut().set(id, Tensor::new(shape, values)?)?;
                }
            }
            let report = grad_check(
                model.store(),
                |tape| model.batch_loss(tape, &patients, mode),
                GradCheckConfig::default(),
            )?;
            let verdict = if report.passed() { "pass" } else { "FAIL" };
            println!("{variant}\t{mode}\t{:.3e}\t{verdict}", report.max_rel_error());
            if !report.passed() {
                eprintln!("{report}");
                failed.push(format!("{variant}/{mode}"));
            }
        }
    }
    if !failed.is_empty() {
        bail!("gradient check failed for {}", failed.join(", "));
    }
    Ok(())
}
