//! Synthetic coded-visit corpora with planted lagged dependencies.

use std::collections::BTreeSet;
use std::fmt;
use std::fs;
use std::path::Path;

use rand::distributions::{Distribution, WeightedIndex};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::ehr_data::{CodedSequenceDataset, PatientRecord, Visit, Vocabulary};
use crate::error::{Error, Result};

/// Bounds and target mean of a count distribution.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CountSpec {
    pub min: usize,
    pub max: usize,
    pub mean: f64,
}

impl CountSpec {
    pub fn new(min: usize, max: usize, mean: f64) -> Self {
        CountSpec { min, max, mean }
    }

    fn validate(&self, what: &str) -> Result<()> {
        if self.min > self.max || !(self.mean >= self.min as f64 && self.mean <= self.max as f64) {
            return Err(Error::Config(format!(
                "{what}: need min <= mean <= max, got ({}, {}, {})",
                self.min, self.max, self.mean
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GeneratorConfig {
    pub n_patients: usize,
    pub vocab_size: usize,
    pub n_categories: usize,
    pub visits: CountSpec,
    pub codes_per_visit: CountSpec,
    pub dependency_lag: usize,
    pub dependency_strength: f64,
    pub n_rules: usize,
    pub seed: u64,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        GeneratorConfig {
            n_patients: 1000,
            vocab_size: 1000,
            n_categories: 50,
            visits: CountSpec::new(5, 150, 20.45),
            codes_per_visit: CountSpec::new(1, 105, 6.35),
            dependency_lag: 3,
            dependency_strength: 0.9,
            n_rules: 10,
            seed: 0,
        }
    }
}

impl GeneratorConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.n_patients == 0 {
            return fail("n_patients must be positive".into());
        }
        if self.n_categories == 0 || self.n_categories > self.vocab_size {
            return fail(format!(
                "need 1 <= n_categories <= vocab_size, got {} and {}",
                self.n_categories, self.vocab_size
            ));
        }
        let block = self.vocab_size.div_ceil(self.n_categories);
        if block * (self.n_categories - 1) >= self.vocab_size {
            return fail(format!(
                "{} codes in blocks of {block} leave some of the {} categories empty",
                self.vocab_size, self.n_categories
            ));
        }
        self.visits.validate("visits")?;
        self.codes_per_visit.validate("codes_per_visit")?;
        if self.visits.min < 2 {
            return fail("visits.min must be at least 2".into());
        }
        if self.codes_per_visit.min == 0 {
            return fail("codes_per_visit.min must be at least 1".into());
        }
        if self.codes_per_visit.max > self.vocab_size {
            return fail(format!(
                "codes_per_visit.max {} exceeds the vocabulary size {}",
                self.codes_per_visit.max, self.vocab_size
            ));
        }
        if self.dependency_lag == 0 {
            return fail("dependency_lag must be at least 1".into());
        }
        if !(0.0..=1.0).contains(&self.dependency_strength) {
            return fail(format!("dependency_strength {} outside [0, 1]", self.dependency_strength));
        }
        if self.n_rules > self.vocab_size {
            return fail(format!("{} rules need as many distinct trigger codes", self.n_rules));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PlantedRule {
    pub trigger_code: usize,
    pub consequent_category: usize,
    pub lag: usize,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct RuleStats {
    /// Trigger visits with a visit `lag` steps later in the same record.
    pub trigger_occurrences: usize,
    /// How many of those forced the consequent.
    pub fired: usize,
}

impl RuleStats {
    pub fn fired_rate(&self) -> f64 {
        if self.trigger_occurrences == 0 {
            0.0
        } else {
            self.fired as f64 / self.trigger_occurrences as f64
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Generated {
    pub dataset: CodedSequenceDataset,
    pub rules: Vec<PlantedRule>,
    pub rule_stats: Vec<RuleStats>,
}

impl Generated {
    pub fn trigger_rate(&self) -> f64 {
        let occ: usize = self.rule_stats.iter().map(|s| s.trigger_occurrences).sum();
        let fired: usize = self.rule_stats.iter().map(|s| s.fired).sum();
        if occ == 0 {
            0.0
        } else {
            fired as f64 / occ as f64
        }
    }
}

/// Probabilities over `min..=max` proportional to `exp(log_weight(n, theta))`,
/// with `theta` found by bisection so the mean hits the target.
fn fit_truncated(spec: &CountSpec, log_weight: impl Fn(usize, f64) -> f64) -> Vec<f64> {
    let probs = |theta: f64| {
        let logs: Vec<f64> = (spec.min..=spec.max).map(|n| log_weight(n, theta)).collect();
        let top = logs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let w: Vec<f64> = logs.iter().map(|l| (l - top).exp()).collect();
        let z: f64 = w.iter().sum();
        w.into_iter().map(|x| x / z).collect::<Vec<f64>>()
    };
    let mean = |p: &[f64]| p.iter().enumerate().map(|(i, q)| (spec.min + i) as f64 * q).sum::<f64>();
    if spec.min == spec.max {
        return vec![1.0];
    }
    let (mut lo, mut hi) = (-60.0, 60.0);
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if mean(&probs(mid)) < spec.mean {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    probs(0.5 * (lo + hi))
}

/// Truncated geometric over `min..=max`: `P(n) ∝ ratio^(n - min)`.
pub fn truncated_geometric(spec: &CountSpec) -> Vec<f64> {
    fit_truncated(spec, |n, log_ratio| (n - spec.min) as f64 * log_ratio)
}

/// Truncated Poisson over `min..=max`: `P(n) ∝ λ^n / n!`.
pub fn truncated_poisson(spec: &CountSpec) -> Vec<f64> {
    let mut log_fact = vec![0.0; spec.max + 1];
    for n in 1..=spec.max {
        log_fact[n] = log_fact[n - 1] + (n as f64).ln();
    }
    fit_truncated(spec, |n, log_lambda| n as f64 * log_lambda - log_fact[n])
}

fn build_vocabulary(config: &GeneratorConfig) -> Result<Vocabulary> {
    let block = config.vocab_size.div_ceil(config.n_categories);
    let width = config.vocab_size.to_string().len();
    let gwidth = config.n_categories.to_string().len();
    Vocabulary::from_pairs(
        (0..config.vocab_size).map(|c| (format!("c{c:0width$}"), format!("g{:0gwidth$}", c / block))),
    )
}

pub fn generate(config: &GeneratorConfig) -> Result<Generated> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let vocab = build_vocabulary(config)?;
    let n_codes = vocab.n_codes();

    let mut ranked: Vec<usize> = (0..n_codes).collect();
    ranked.shuffle(&mut rng);
    let mut code_weight = vec![0.0; n_codes];
    for (rank, &c) in ranked.iter().enumerate() {
        code_weight[c] = 1.0 / (rank + 1) as f64;
    }

    let mut by_category: Vec<Vec<usize>> = vec![Vec::new(); vocab.n_categories()];
    for c in 0..n_codes {
        by_category[vocab.code_to_category()[c]].push(c);
    }

    let rules: Vec<PlantedRule> = ranked
        .choose_multiple(&mut rng, config.n_rules)
        .map(|&trigger_code| PlantedRule {
            trigger_code,
            consequent_category: rng.gen_range(0..vocab.n_categories()),
            lag: config.dependency_lag,
        })
        .collect();

    let visit_counts = WeightedIndex::new(truncated_geometric(&config.visits)).expect("valid pmf");
    let code_counts = WeightedIndex::new(truncated_poisson(&config.codes_per_visit)).expect("valid pmf");
    let all_codes: Vec<usize> = (0..n_codes).collect();
    let mut stats = vec![RuleStats::default(); rules.len()];
    let id_width = config.n_patients.to_string().len();

    let mut patients = Vec::with_capacity(config.n_patients);
    for pi in 0..config.n_patients {
        let t_total = config.visits.min + visit_counts.sample(&mut rng);
        let mut forced: Vec<BTreeSet<usize>> = vec![BTreeSet::new(); t_total];
        let mut visits = Vec::with_capacity(t_total);
        for t in 0..t_total {
            let n = config.codes_per_visit.min + code_counts.sample(&mut rng);
            let mut codes: BTreeSet<usize> = std::mem::take(&mut forced[t]);
            let extra = n.saturating_sub(codes.len());
            if extra > 0 {
                let pool: Vec<usize> = if codes.is_empty() {
                    all_codes.clone()
                } else {
                    all_codes.iter().copied().filter(|c| !codes.contains(c)).collect()
                };
                let picked = pool
                    .choose_multiple_weighted(&mut rng, extra, |&c| code_weight[c])
                    .expect("positive finite weights");
                codes.extend(picked.copied());
            }
            for (rule, stat) in rules.iter().zip(stats.iter_mut()) {
                let target = t + rule.lag;
                if target >= t_total || !codes.contains(&rule.trigger_code) {
                    continue;
                }
                stat.trigger_occurrences += 1;
                if rng.gen_bool(config.dependency_strength) {
                    stat.fired += 1;
                    let members = &by_category[rule.consequent_category];
                    forced[target].insert(members[rng.gen_range(0..members.len())]);
                }
            }
            visits.push(Visit::new(codes.into_iter().collect())?);
        }
        patients.push(PatientRecord::new(format!("p{pi:0id_width$}"), visits)?);
    }

    Ok(Generated {
        dataset: CodedSequenceDataset::new(vocab, patients)?,
        rules,
        rule_stats: stats,
    })
}

/// Written next to a generated corpus.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Sidecar {
    pub config: GeneratorConfig,
    pub rules: Vec<PlantedRule>,
    pub rule_stats: Vec<RuleStats>,
    pub trigger_rate: f64,
}

impl Sidecar {
    pub fn new(config: &GeneratorConfig, generated: &Generated) -> Self {
        Sidecar {
            config: config.clone(),
            rules: generated.rules.clone(),
            rule_stats: generated.rule_stats.clone(),
            trigger_rate: generated.trigger_rate(),
        }
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let text = serde_json::to_string_pretty(self)?;
        fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorpusStats {
    pub patients: usize,
    pub visits: usize,
    pub avg_visits_per_patient: f64,
    pub unique_codes: usize,
    pub avg_codes_per_visit: f64,
    pub max_codes_per_visit: usize,
    pub n_categories: usize,
    pub avg_categories_per_visit: f64,
    pub max_categories_per_visit: usize,
    /// Visits containing each category.
    pub category_counts: Vec<usize>,
}

pub fn summarize(dataset: &CodedSequenceDataset) -> CorpusStats {
    let vocab = &dataset.vocabulary;
    let mut seen = vec![false; vocab.n_codes()];
    let mut category_counts = vec![0; vocab.n_categories()];
    let (mut visits, mut codes, mut max_codes, mut cats, mut max_cats) = (0, 0, 0, 0, 0);
    for p in &dataset.patients {
        for v in &p.visits {
            visits += 1;
            codes += v.len();
            max_codes = max_codes.max(v.len());
            let groups: BTreeSet<usize> = v.codes().iter().map(|&c| vocab.code_to_category()[c]).collect();
            cats += groups.len();
            max_cats = max_cats.max(groups.len());
            for &g in &groups {
                category_counts[g] += 1;
            }
            for &c in v.codes() {
                seen[c] = true;
            }
        }
    }
    let ratio = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
    CorpusStats {
        patients: dataset.len(),
        visits,
        avg_visits_per_patient: ratio(visits, dataset.len()),
        unique_codes: seen.iter().filter(|&&s| s).count(),
        avg_codes_per_visit: ratio(codes, visits),
        max_codes_per_visit: max_codes,
        n_categories: vocab.n_categories(),
        avg_categories_per_visit: ratio(cats, visits),
        max_categories_per_visit: max_cats,
        category_counts,
    }
}

impl fmt::Display for CorpusStats {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "# of patients\t{}", self.patients)?;
        writeln!(f, "# of visits\t{}", self.visits)?;
        writeln!(f, "Avg. # of visits per patient\t{:.2}", self.avg_visits_per_patient)?;
        writeln!(f, "# of unique medical codes\t{}", self.unique_codes)?;
        writeln!(f, "Avg. # of medical codes per visit\t{:.2}", self.avg_codes_per_visit)?;
        writeln!(f, "Max # of medical codes per visit\t{}", self.max_codes_per_visit)?;
        writeln!(f, "# of category codes\t{}", self.n_categories)?;
        writeln!(f, "Avg. # of category codes per visit\t{:.2}", self.avg_categories_per_visit)?;
        write!(f, "Max # of category codes per visit\t{}", self.max_categories_per_visit)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ehr_data::{parse_corpus, write_corpus, LoadOptions};

    fn small() -> GeneratorConfig {
        GeneratorConfig {
            n_patients: 60,
            vocab_size: 50,
            n_categories: 10,
            visits: CountSpec::new(4, 30, 10.0),
            codes_per_visit: CountSpec::new(1, 8, 3.0),
            dependency_lag: 3,
            dependency_strength: 1.0,
            n_rules: 4,
            seed: 7,
        }
    }

    #[test]
    fn fitted_means_hit_targets() {
        for spec in [CountSpec::new(5, 150, 20.45), CountSpec::new(2, 10, 9.0), CountSpec::new(3, 3, 3.0)] {
            let p = truncated_geometric(&spec);
            let m: f64 = p.iter().enumerate().map(|(i, q)| (spec.min + i) as f64 * q).sum();
            assert!((m - spec.mean).abs() < 1e-6, "{spec:?}: {m}");
        }
        let spec = CountSpec::new(1, 105, 6.35);
        let p = truncated_poisson(&spec);
        let m: f64 = p.iter().enumerate().map(|(i, q)| (spec.min + i) as f64 * q).sum();
        assert!((m - 6.35).abs() < 1e-6);
        assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn deterministic_under_seed() {
        let a = write_corpus(&generate(&small()).unwrap().dataset);
        let b = write_corpus(&generate(&small()).unwrap().dataset);
        assert_eq!(a, b);
        let mut other = small();
        other.seed = 8;
        assert_ne!(a, write_corpus(&generate(&other).unwrap().dataset));
    }

    #[test]
    fn output_passes_load_validation() {
        let g = generate(&small()).unwrap();
        let (again, summary) = parse_corpus(&write_corpus(&g.dataset), "gen", LoadOptions::default()).unwrap();
        assert_eq!(summary.rejected_short, 0);
        assert_eq!(again, g.dataset);
        for p in &g.dataset.patients {
            assert!((4..=30).contains(&p.n_visits()));
        }
    }

    #[test]
    fn full_strength_rules_always_fire() {
        let g = generate(&small()).unwrap();
        let vocab = &g.dataset.vocabulary;
        let mut occurrences = 0;
        for rule in &g.rules {
            for p in &g.dataset.patients {
                for t in 0..p.n_visits().saturating_sub(rule.lag) {
                    if p.visits[t].contains(rule.trigger_code) {
                        occurrences += 1;
                        let later = &p.visits[t + rule.lag];
                        assert!(later.codes().iter().any(|&c| vocab.code_to_category()[c] == rule.consequent_category));
                    }
                }
            }
        }
        assert!(occurrences > 0);
        assert_eq!(g.trigger_rate(), 1.0);
    }

    #[test]
    fn infeasible_configs_are_rejected() {
        let mut c = small();
        c.codes_per_visit = CountSpec::new(1, 51, 3.0);
        assert!(generate(&c).is_err());
        let mut c = small();
        c.n_categories = 51;
        assert!(c.validate().is_err());
        let mut c = small();
        c.vocab_size = 10;
        c.n_categories = 4;
        c.codes_per_visit = CountSpec::new(1, 5, 2.0);
        // blocks of 3 cover codes 0..9 with categories 0..3; all non-empty
        assert!(c.validate().is_ok());
        c.n_categories = 6;
        // blocks of 2 fill only 5 categories
        assert!(c.validate().is_err());
        let mut c = small();
        c.dependency_strength = 1.5;
        assert!(c.validate().is_err());
        let mut c = small();
        c.visits = CountSpec::new(4, 30, 40.0);
        assert!(c.validate().is_err());
    }

    #[test]
    fn summary_counts() {
        let text = "#code a x\n#code b y\np1\ta;b;a\np2\ta,b;a;a;b;a,b\n";
        let (ds, _) = parse_corpus(text, "s", LoadOptions::default()).unwrap();
        let s = summarize(&ds);
        assert_eq!(s.avg_visits_per_patient, 4.0);
        assert_eq!(s.visits, 8);
        assert_eq!(s.max_codes_per_visit, 2);
        assert_eq!(s.category_counts, vec![6, 4]);
        assert_eq!(s.unique_codes, 2);
    }

    #[test]
    fn sidecar_round_trips() {
        let cfg = small();
        let g = generate(&cfg).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("rules.json");
        let side = Sidecar::new(&cfg, &g);
        side.save(&path).unwrap();
        assert_eq!(Sidecar::load(&path).unwrap(), side);
    }
}
