//! Flat `key = value` run configuration shared by all subcommands.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use anyhow::{anyhow, bail, Context, Result};
use dipole_core::model::{CausalityMode, ModelConfig, Variant};
use dipole_core::synth_gen::{CountSpec, GeneratorConfig};
use dipole_core::train_eval::TrainConfig;
use dipole_core::SplitSpec;

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    // generator
    pub n_patients: usize,
    pub vocab_size: usize,
    pub n_categories: usize,
    pub visits_min: usize,
    pub visits_max: usize,
    pub visits_mean: f64,
    pub codes_min: usize,
    pub codes_max: usize,
    pub codes_mean: f64,
    pub lag: usize,
    pub strength: f64,
    pub n_rules: usize,
    // data
    pub min_visits: usize,
    pub split_seed: u64,
    pub train_fraction: f64,
    pub validation_fraction: f64,
    pub test_fraction: f64,
    // model
    pub variant: Variant,
    pub embed_dim: usize,
    pub hidden_dim: usize,
    pub attention_dim: usize,
    /// 0 selects the encoder width.
    pub attentional_dim: usize,
    pub dropout: f64,
    pub l2: f64,
    pub brnn_mode: CausalityMode,
    // training
    pub batch_size: usize,
    pub epochs: usize,
    pub rho: f64,
    pub eps: f64,
    pub workers: usize,
    // evaluation
    pub group_divisor: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        let g = GeneratorConfig::default();
        let t = TrainConfig::default();
        let s = SplitSpec::default();
        RunConfig {
            seed: 0,
            n_patients: g.n_patients,
            vocab_size: g.vocab_size,
            n_categories: g.n_categories,
            visits_min: g.visits.min,
            visits_max: g.visits.max,
            visits_mean: g.visits.mean,
            codes_min: g.codes_per_visit.min,
            codes_max: g.codes_per_visit.max,
            codes_mean: g.codes_per_visit.mean,
            lag: g.dependency_lag,
            strength: g.dependency_strength,
            n_rules: g.n_rules,
            min_visits: 2,
            split_seed: s.seed,
            train_fraction: s.train_fraction,
            validation_fraction: s.validation_fraction,
            test_fraction: s.test_fraction,
            variant: Variant::DipoleC,
            embed_dim: 256,
            hidden_dim: 256,
            attention_dim: 128,
            attentional_dim: 0,
            dropout: 0.5,
            l2: 0.001,
            brnn_mode: CausalityMode::Prefix,
            batch_size: t.batch_size,
            epochs: t.epochs,
            rho: t.rho,
            eps: t.eps,
            workers: 1,
            group_divisor: 15,
        }
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T>
where
    T::Err: std::fmt::Display,
{
    value
        .parse()
        .map_err(|e| anyhow!("invalid value {value:?} for {key}: {e}"))
}

macro_rules! keys {
    ($($key:ident),* $(,)?) => {
        const KEYS: &[&str] = &[$(stringify!($key)),*];

        impl RunConfig {
            pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
                match key {
                    $(stringify!($key) => self.$key = parse(key, value)?,)*
                    _ => bail!("unknown config key {key:?} (known keys: {})", KEYS.join(", ")),
                }
                Ok(())
            }

            pub fn to_text(&self) -> String {
                let mut out = String::new();
                $(let _ = writeln!(out, "{} = {}", stringify!($key), self.$key);)*
                out
            }
        }
    };
}

keys!(
    seed, n_patients, vocab_size, n_categories, visits_min, visits_max, visits_mean, codes_min, codes_max,
    codes_mean, lag, strength, n_rules, min_visits, split_seed, train_fraction, validation_fraction,
    test_fraction, variant, embed_dim, hidden_dim, attention_dim, attentional_dim, dropout, l2, brnn_mode,
    batch_size, epochs, rho, eps, workers, group_divisor,
);

impl RunConfig {
    /// Applies `key = value` lines; blank lines and `#` comments are skipped.
    pub fn apply_text(&mut self, text: &str, origin: &str) -> Result<()> {
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| anyhow!("{origin}:{}: expected `key = value`", i + 1))?;
            self.set(k.trim(), v.trim())
                .with_context(|| format!("{origin}:{}", i + 1))?;
        }
        Ok(())
    }

    pub fn apply_file(&mut self, path: &Path) -> Result<()> {
        let text = fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        self.apply_text(&text, &path.display().to_string())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_text()).with_context(|| format!("writing {}", path.display()))
    }

    pub fn generator(&self) -> GeneratorConfig {
        GeneratorConfig {
            n_patients: self.n_patients,
            vocab_size: self.vocab_size,
            n_categories: self.n_categories,
            visits: CountSpec::new(self.visits_min, self.visits_max, self.visits_mean),
            codes_per_visit: CountSpec::new(self.codes_min, self.codes_max, self.codes_mean),
            dependency_lag: self.lag,
            dependency_strength: self.strength,
            n_rules: self.n_rules,
            seed: self.seed,
        }
    }

    pub fn split_spec(&self) -> SplitSpec {
        SplitSpec {
            train_fraction: self.train_fraction,
            validation_fraction: self.validation_fraction,
            test_fraction: self.test_fraction,
            seed: self.split_seed,
        }
    }

    pub fn model(&self, n_codes: usize, n_categories: usize) -> ModelConfig {
        let mut cfg = ModelConfig::new(self.variant, n_codes, n_categories).with_dims(
            self.embed_dim,
            self.hidden_dim,
            self.attention_dim,
        );
        if self.attentional_dim > 0 {
            cfg.attentional_dim = self.attentional_dim;
        }
        cfg.dropout = self.dropout;
        cfg.l2 = self.l2;
        cfg.brnn_mode = self.brnn_mode;
        cfg
    }

    pub fn train(&self) -> TrainConfig {
        TrainConfig {
            batch_size: self.batch_size,
            epochs: self.epochs,
            rho: self.rho,
            eps: self.eps,
            seed: self.seed,
            brnn_mode: self.brnn_mode,
            workers: self.workers,
        }
    }
}
