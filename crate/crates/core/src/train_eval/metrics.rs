use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::PredictionRecord;

pub const K_VALUES: [usize; 6] = [5, 10, 15, 20, 25, 30];

/// Indices of the `k` largest scores; equal scores rank by ascending index.
pub fn top_k(scores: &[f64], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    idx.truncate(k);
    idx
}

fn hits(record: &PredictionRecord, k: usize) -> usize {
    top_k(&record.scores, k)
        .into_iter()
        .filter(|g| record.truth.binary_search(g).is_ok())
        .count()
}

fn record_accuracy(record: &PredictionRecord) -> f64 {
    let k = record.truth.len();
    hits(record, k) as f64 / k as f64
}

fn check(records: &[PredictionRecord]) -> Result<()> {
    if records.is_empty() {
        return Err(Error::Contract("no prediction records".into()));
    }
    if let Some(r) = records.iter().find(|r| r.truth.is_empty()) {
        return Err(Error::Contract(format!(
            "record {}:{} has an empty target",
            r.patient_id, r.step
        )));
    }
    Ok(())
}

/// Correct categories in the top `|y|` summed over records, and the mean per-record accuracy.
pub fn accuracy(records: &[PredictionRecord]) -> Result<(usize, f64)> {
    check(records)?;
    let correct = records.iter().map(|r| hits(r, r.truth.len())).sum();
    let acc = records.iter().map(record_accuracy).sum::<f64>() / records.len() as f64;
    Ok((correct, acc))
}

/// Mean of `|top-k ∩ y| / min(k, |y|)`.
pub fn accuracy_at_k(records: &[PredictionRecord], k: usize) -> Result<f64> {
    check(records)?;
    if k == 0 {
        return Err(Error::OutOfRange("k must be positive".into()));
    }
    Ok(records
        .iter()
        .map(|r| hits(r, k) as f64 / k.min(r.truth.len()) as f64)
        .sum::<f64>()
        / records.len() as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroupAccuracy {
    /// `visits / divisor`, rounded down.
    pub group: usize,
    pub patients: usize,
    pub accuracy: f64,
}

/// Patients grouped by visit count; each group reports `Σ MA_n C_n / Σ C_n`
/// where `MA_n` is the mean accuracy of the `C_n` patients with `n` visits.
pub fn group_weighted_accuracy(records: &[PredictionRecord], divisor: usize) -> Result<Vec<GroupAccuracy>> {
    check(records)?;
    if divisor == 0 {
        return Err(Error::OutOfRange("group divisor must be positive".into()));
    }
    // patient -> (visits, accuracy sum, records)
    let mut per_patient: BTreeMap<&str, (usize, f64, usize)> = BTreeMap::new();
    for r in records {
        let e = per_patient.entry(&r.patient_id).or_insert((r.n_visits, 0.0, 0));
        e.1 += record_accuracy(r);
        e.2 += 1;
    }
    // visits -> (accuracy sum over patients, patient count)
    let mut by_visits: BTreeMap<usize, (f64, usize)> = BTreeMap::new();
    for (n, sum, count) in per_patient.values() {
        let e = by_visits.entry(*n).or_insert((0.0, 0));
        e.0 += sum / *count as f64;
        e.1 += 1;
    }
    let mut groups: BTreeMap<usize, (f64, usize)> = BTreeMap::new();
    for (n, (sum, c)) in by_visits {
        let mean = sum / c as f64;
        let e = groups.entry(n / divisor).or_insert((0.0, 0));
        e.0 += mean * c as f64;
        e.1 += c;
    }
    Ok(groups
        .into_iter()
        .map(|(group, (weighted, patients))| GroupAccuracy {
            group,
            patients,
            accuracy: weighted / patients as f64,
        })
        .collect())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub n_predictions: usize,
    pub correct_count: usize,
    pub accuracy: f64,
    pub accuracy_at_k: Vec<(usize, f64)>,
    pub group_divisor: usize,
    pub groups: Vec<GroupAccuracy>,
}

impl EvalReport {
    pub fn from_records(records: &[PredictionRecord], group_divisor: usize) -> Result<Self> {
        let (correct_count, accuracy) = accuracy(records)?;
        let accuracy_at_k = K_VALUES
            .iter()
            .map(|&k| Ok((k, accuracy_at_k(records, k)?)))
            .collect::<Result<_>>()?;
        Ok(EvalReport {
            n_predictions: records.len(),
            correct_count,
            accuracy,
            accuracy_at_k,
            group_divisor,
            groups: group_weighted_accuracy(records, group_divisor)?,
        })
    }

    pub fn at(&self, k: usize) -> Option<f64> {
        self.accuracy_at_k.iter().find(|(kk, _)| *kk == k).map(|(_, v)| *v)
    }
}

impl fmt::Display for EvalReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "predictions\t{}", self.n_predictions)?;
        writeln!(f, "#C\t{}", self.correct_count)?;
        writeln!(f, "accuracy\t{:.4}", self.accuracy)?;
        for (k, v) in &self.accuracy_at_k {
            writeln!(f, "accuracy@{k}\t{v:.4}")?;
        }
        write!(f, "group (visits/{})\tpatients\taccuracy", self.group_divisor)?;
        for g in &self.groups {
            write!(f, "\n{}\t{}\t{:.4}", g.group, g.patients, g.accuracy)?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec(id: &str, n_visits: usize, scores: &[f64], truth: &[usize]) -> PredictionRecord {
        PredictionRecord {
            patient_id: id.into(),
            step: 1,
            n_visits,
            scores: scores.to_vec(),
            truth: truth.to_vec(),
            attention: None,
        }
    }

    #[test]
    fn accuracy_examples() {
        assert_eq!(accuracy(&[rec("a", 2, &[0.5, 0.3, 0.2], &[0, 1])]).unwrap(), (2, 1.0));
        assert_eq!(accuracy(&[rec("a", 2, &[0.1, 0.2, 0.7], &[0])]).unwrap(), (0, 0.0));
        assert!(accuracy(&[]).is_err());
    }

    #[test]
    fn ties_break_by_index() {
        assert_eq!(top_k(&[0.2, 0.4, 0.4, 0.1], 2), vec![1, 2]);
        assert_eq!(top_k(&[0.0; 4], 3), vec![0, 1, 2]);
    }

    #[test]
    fn accuracy_at_k_examples() {
        let scores = [0.3, 0.5, 0.4, 0.1, 0.05, 0.02, 0.01];
        let r = [rec("a", 2, &scores, &[0])];
        assert_eq!(accuracy_at_k(&r, 5).unwrap(), 1.0);
        assert_eq!(accuracy_at_k(&r, 2).unwrap(), 0.0);
        let r = [rec("a", 2, &scores, &[3, 5, 6])];
        assert_eq!(accuracy_at_k(&r, 30).unwrap(), 1.0);
    }

    #[test]
    fn grouping_examples() {
        let recs = [
            rec("a", 3, &[0.9, 0.1], &[0]),
            rec("b", 4, &[0.9, 0.1], &[0]),
            rec("c", 31, &[0.9, 0.1], &[1]),
            rec("d", 40, &[0.9, 0.1], &[1]),
        ];
        let g = group_weighted_accuracy(&recs, 15).unwrap();
        assert_eq!(g.iter().map(|x| x.accuracy).collect::<Vec<_>>(), vec![1.0, 0.0]);
        assert_eq!(g.iter().map(|x| x.group).collect::<Vec<_>>(), vec![0, 2]);
        let one = group_weighted_accuracy(&recs, 100).unwrap();
        assert_eq!(one.len(), 1);
        assert_eq!(one[0].accuracy, 0.5);
    }

    #[test]
    fn report_lists_all_k() {
        let r = EvalReport::from_records(&[rec("a", 2, &[0.5, 0.3, 0.2], &[0, 1])], 15).unwrap();
        assert_eq!(r.accuracy_at_k.len(), 6);
        assert_eq!(r.at(5), Some(1.0));
        assert!(r.to_string().contains("accuracy@30"));
    }
}
