mod commands;
mod config;

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

use crate::config::RunConfig;

#[derive(Parser)]
#[command(name = "dipole", version, about = "Next-visit diagnosis prediction with attentive bidirectional RNNs")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic corpus with planted lagged rules.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Train one model and keep the epoch with the best validation accuracy.
    Train {
        #[arg(long)]
        corpus: PathBuf,
        /// Checkpoint directory.
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Evaluate one or more checkpoints on a split of a corpus.
    Eval {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long = "model", required = true)]
        models: Vec<PathBuf>,
        #[arg(long, default_value = "test")]
        part: commands::Part,
        /// Also write the report here.
        #[arg(long)]
        out: Option<PathBuf>,
        #[command(flatten)]
        common: Common,
    },
    /// Export attention traces and embedding-dimension summaries.
    Interpret {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        model: PathBuf,
        /// Output prefix; writes `<out>.traces.tsv` and `<out>.dimensions.tsv`.
        #[arg(long)]
        out: PathBuf,
        /// Codes listed per embedding dimension.
        #[arg(long, default_value_t = 10)]
        top_k: usize,
        #[arg(long, default_value = "test")]
        part: commands::Part,
        #[command(flatten)]
        common: Common,
    },
    /// Finite-difference gradient check of every variant at tiny sizes.
    Gradcheck {
        #[command(flatten)]
        common: Common,
    },
}

#[derive(Args, Clone, Default)]
struct Common {
    /// `key = value` file; flags below override it.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Extra `key=value` overrides.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    #[arg(long)]
    seed: Option<String>,
    #[arg(long)]
    variant: Option<String>,
    #[arg(long)]
    brnn_mode: Option<String>,
    #[arg(long)]
    split_seed: Option<String>,
    #[arg(long)]
    workers: Option<String>,
    #[arg(long)]
    epochs: Option<String>,
    #[arg(long)]
    batch_size: Option<String>,
    #[arg(long)]
    embed_dim: Option<String>,
    #[arg(long)]
    hidden_dim: Option<String>,
    #[arg(long)]
    attention_dim: Option<String>,
    #[arg(long)]
    dropout: Option<String>,
    #[arg(long)]
    l2: Option<String>,
    #[arg(long)]
    n_patients: Option<String>,
}

impl Common {
    /// Defaults, then `fallback` (if no `--config`), then `--config`, `--set` and named flags.
    fn resolve(&self, fallback: Option<PathBuf>) -> anyhow::Result<RunConfig> {
        let mut cfg = RunConfig::default();
        match (&self.config, fallback) {
            (Some(path), _) => cfg.apply_file(path)?,
            (None, Some(path)) if path.exists() => {
                eprintln!("using settings from {}", path.display());
                cfg.apply_file(&path)?;
            }
            _ => {}
        }
        for kv in &self.set {
            let (k, v) = kv
                .split_once('=')
                .ok_or_else(|| anyhow::anyhow!("--set expects KEY=VALUE, got {kv:?}"))?;
            cfg.set(k.trim(), v.trim())?;
        }
        let named = [
            ("seed", &self.seed),
            ("variant", &self.variant),
            ("brnn_mode", &self.brnn_mode),
            ("split_seed", &self.split_seed),
            ("workers", &self.workers),
            ("epochs", &self.epochs),
            ("batch_size", &self.batch_size),
            ("embed_dim", &self.embed_dim),
            ("hidden_dim", &self.hidden_dim),
            ("attention_dim", &self.attention_dim),
            ("dropout", &self.dropout),
            ("l2", &self.l2),
            ("n_patients", &self.n_patients),
        ];
        for (k, v) in named {
            if let Some(v) = v {
                cfg.set(k, v)?;
            }
        }
        Ok(cfg)
    }
}

fn run(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::Synth { out, common } => commands::synth(&common.resolve(None)?, &out),
        Command::Train { corpus, out, common } => commands::train(&common.resolve(None)?, &corpus, &out),
        Command::Eval {
            corpus,
            models,
            part,
            out,
            common,
        } => {
            let cfg = common.resolve(Some(models[0].join(commands::RUN_CONFIG)))?;
            commands::eval(&cfg, &corpus, &models, part, out.as_deref())
        }
        Command::Interpret {
            corpus,
            model,
            out,
            top_k,
            part,
            common,
        } => {
            let cfg = common.resolve(Some(model.join(commands::RUN_CONFIG)))?;
            commands::interpret(&cfg, &corpus, &model, &out, top_k, part)
        }
        Command::Gradcheck { common } => commands::gradcheck(&common.resolve(None)?),
    }
}

fn main() {
    if let Err(e) = run(Cli::parse()) {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}
