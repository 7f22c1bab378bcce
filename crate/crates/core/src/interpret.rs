//! Attention traces over past visits and top-code summaries of embedding dimensions.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::ehr_data::{encode_patient, CodedSequenceDataset, PatientRecord, Vocabulary};
use crate::error::{Error, Result};
use crate::model::{Model, PredictionRecord};
use crate::nn_core::Tensor;

pub const TRACE_HEADER: &str = "patient_id\tt\tweights";
pub const DIMENSION_HEADER: &str = "dimension\trank\tcode\tvalue";

#[derive(Clone, Debug, PartialEq)]
pub struct AttentionTrace {
    pub patient_id: String,
    /// 1-based step; the weights cover visits `1..t`.
    pub step: usize,
    pub weights: Vec<f64>,
    /// Codes of visits `1..=t`; empty when read back from a trace file.
    pub visits: Vec<Vec<String>>,
}

fn require_attentive(model: &Model) -> Result<()> {
    if model.variant().attention().is_none() {
        return Err(Error::UnsupportedVariant {
            variant: model.variant().to_string(),
            what: "attention traces".into(),
        });
    }
    Ok(())
}

fn predictions(model: &Model, patient: &PatientRecord, vocab: &Vocabulary) -> Result<Vec<PredictionRecord>> {
    let encoded = encode_patient(patient, vocab)?;
    model.predict(&encoded, model.config().brnn_mode)
}

fn trace_of(record: &PredictionRecord, patient: &PatientRecord, vocab: &Vocabulary) -> AttentionTrace {
    AttentionTrace {
        patient_id: record.patient_id.clone(),
        step: record.step,
        weights: record.attention.clone().unwrap_or_default(),
        visits: patient.visits[..record.step]
            .iter()
            .map(|v| v.codes().iter().map(|&c| vocab.code(c).to_string()).collect())
            .collect(),
    }
}

/// Weights the model puts on visits `1..t` when predicting visit `t + 1`,
/// using the causality mode the model was trained with.
pub fn extract_attention(model: &Model, patient: &PatientRecord, vocab: &Vocabulary, t: usize) -> Result<AttentionTrace> {
    require_attentive(model)?;
    let steps = patient.n_visits() - 1;
    if t < 2 || t > steps {
        return Err(Error::OutOfRange(format!(
            "step {t} for patient {} (valid steps 2..={steps})",
            patient.patient_id
        )));
    }
    let records = predictions(model, patient, vocab)?;
    Ok(trace_of(&records[t - 1], patient, vocab))
}

/// All traces with at least one weight, for every patient.
pub fn attention_traces(model: &Model, dataset: &CodedSequenceDataset) -> Result<Vec<AttentionTrace>> {
    require_attentive(model)?;
    let mut out = Vec::new();
    for p in &dataset.patients {
        for r in predictions(model, p, &dataset.vocabulary)?.iter().skip(1) {
            out.push(trace_of(r, p, &dataset.vocabulary));
        }
    }
    Ok(out)
}

pub fn write_traces(traces: &[AttentionTrace]) -> String {
    let mut out = String::from(TRACE_HEADER);
    out.push('\n');
    for t in traces {
        let _ = write!(out, "{}\t{}", t.patient_id, t.step);
        for w in &t.weights {
            let _ = write!(out, "\t{w:.9}");
        }
        out.push('\n');
    }
    out
}

pub fn export_traces(model: &Model, dataset: &CodedSequenceDataset, path: impl AsRef<Path>) -> Result<usize> {
    let path = path.as_ref();
    let traces = attention_traces(model, dataset)?;
    fs::write(path, write_traces(&traces)).map_err(|e| Error::io(path, e))?;
    Ok(traces.len())
}

pub fn import_traces(path: impl AsRef<Path>) -> Result<Vec<AttentionTrace>> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let syntax = |line: usize, message: String| Error::Syntax {
        path: path.to_path_buf(),
        line,
        message,
    };
    let mut lines = text.lines();
    if lines.next() != Some(TRACE_HEADER) {
        return Err(syntax(1, format!("expected header `{TRACE_HEADER}`")));
    }
    let mut out = Vec::new();
    for (i, line) in lines.enumerate() {
        let lineno = i + 2;
        let mut fields = line.split('\t');
        let patient_id = fields.next().unwrap_or_default().to_string();
        let step: usize = fields
            .next()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| syntax(lineno, "missing or invalid step".into()))?;
        let weights = fields
            .map(|f| f.parse::<f64>().map_err(|_| syntax(lineno, format!("invalid weight {f}"))))
            .collect::<Result<Vec<_>>>()?;
        if weights.len() + 1 != step {
            return Err(syntax(lineno, format!("step {step} needs {} weights, found {}", step - 1, weights.len())));
        }
        out.push(AttentionTrace {
            patient_id,
            step,
            weights,
            visits: Vec::new(),
        });
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq)]
pub struct DimensionReport {
    pub dimension: usize,
    /// Code identifiers with their rectified weights, largest first.
    pub top: Vec<(String, f64)>,
}

/// The `k` codes with the largest `max(W_v[d, c], 0)`; ties keep code order.
pub fn interpret_dimension(w_v: &Tensor, vocab: &Vocabulary, d: usize, k: usize) -> Result<DimensionReport> {
    if !w_v.is_matrix() || w_v.cols() != vocab.n_codes() {
        return Err(Error::dim(
            "interpret_dimension",
            format!("embedding {:?} for {} codes", w_v.shape(), vocab.n_codes()),
        ));
    }
    if d >= w_v.rows() {
        return Err(Error::OutOfRange(format!("dimension {d} of {}", w_v.rows())));
    }
    if k == 0 || k > vocab.n_codes() {
        return Err(Error::OutOfRange(format!("k = {k} with {} codes", vocab.n_codes())));
    }
    let row: Vec<f64> = w_v.row(d).iter().map(|&x| x.max(0.0)).collect();
    let mut idx: Vec<usize> = (0..row.len()).collect();
    idx.sort_by(|&a, &b| row[b].total_cmp(&row[a]).then(a.cmp(&b)));
    Ok(DimensionReport {
        dimension: d,
        top: idx[..k].iter().map(|&c| (vocab.code(c).to_string(), row[c])).collect(),
    })
}

pub fn write_dimension_reports(reports: &[DimensionReport]) -> String {
    let mut out = String::from(DIMENSION_HEADER);
    out.push('\n');
    for r in reports {
        for (rank, (code, value)) in r.top.iter().enumerate() {
            let _ = writeln!(out, "{}\t{}\t{code}\t{value:.6}", r.dimension, rank + 1);
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ehr_data::Visit;
    use crate::model::{ModelConfig, Variant};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn vocab() -> Vocabulary {
        Vocabulary::from_pairs([("a", "x"), ("b", "x"), ("c", "y")]).unwrap()
    }

    fn patient(id: &str, n: usize) -> PatientRecord {
        let visits = (0..n).map(|i| Visit::new(vec![i % 3]).unwrap()).collect();
        PatientRecord::new(id, visits).unwrap()
    }

    fn model(v: Variant) -> Model {
        Model::init(ModelConfig::new(v, 3, 2).with_dims(3, 3, 2), &mut ChaCha8Rng::seed_from_u64(2)).unwrap()
    }

    #[test]
    fn second_step_has_one_weight() {
        let tr = extract_attention(&model(Variant::DipoleG), &patient("p", 4), &vocab(), 2).unwrap();
        assert_eq!(tr.weights, vec![1.0]);
        assert_eq!(tr.visits, vec![vec!["a".to_string()], vec!["b".to_string()]]);
    }

    #[test]
    fn traces_sum_to_one_and_match_records() {
        let m = model(Variant::RnnC);
        let p = patient("p", 6);
        let enc = encode_patient(&p, &vocab()).unwrap();
        let recs = m.predict(&enc, m.config().brnn_mode).unwrap();
        for t in 2..=5 {
            let tr = extract_attention(&m, &p, &vocab(), t).unwrap();
            assert_eq!(tr.weights.len(), t - 1);
            assert!((tr.weights.iter().sum::<f64>() - 1.0).abs() < 1e-9);
            assert_eq!(Some(&tr.weights), recs[t - 1].attention.as_ref());
        }
        assert!(extract_attention(&m, &p, &vocab(), 1).is_err());
        assert!(extract_attention(&m, &p, &vocab(), 6).is_err());
    }

    #[test]
    fn plain_variants_are_rejected() {
        let err = extract_attention(&model(Variant::DipolePlain), &patient("p", 4), &vocab(), 2).unwrap_err();
        assert!(matches!(err, Error::UnsupportedVariant { .. }));
    }

    #[test]
    fn export_round_trip_and_counts() {
        let m = model(Variant::DipoleL);
        let ds = CodedSequenceDataset::new(vocab(), vec![patient("p1", 4), patient("p2", 2), patient("p3", 7)]).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("traces.tsv");
        assert_eq!(export_traces(&m, &ds, &path).unwrap(), 2 + 5);
        let back = import_traces(&path).unwrap();
        let orig = attention_traces(&m, &ds).unwrap();
        assert_eq!(back.len(), orig.len());
        for (a, b) in back.iter().zip(&orig) {
            assert_eq!((&a.patient_id, a.step), (&b.patient_id, b.step));
            for (x, y) in a.weights.iter().zip(&b.weights) {
                assert!((x - y).abs() < 5e-7);
            }
        }
        let empty = CodedSequenceDataset::new(vocab(), vec![]).unwrap();
        export_traces(&m, &empty, &path).unwrap();
        assert_eq!(fs::read_to_string(&path).unwrap(), format!("{TRACE_HEADER}\n"));
    }

    #[test]
    fn dimension_examples() {
        let w = Tensor::matrix(2, 3, vec![-1.0, 3.0, 2.0, -1.0, -2.0, -3.0]).unwrap();
        let r = interpret_dimension(&w, &vocab(), 0, 2).unwrap();
        assert_eq!(r.top, vec![("b".to_string(), 3.0), ("c".to_string(), 2.0)]);
        let r = interpret_dimension(&w, &vocab(), 1, 3).unwrap();
        assert_eq!(r.top, vec![("a".to_string(), 0.0), ("b".to_string(), 0.0), ("c".to_string(), 0.0)]);
        assert!(interpret_dimension(&w, &vocab(), 2, 1).is_err());
        assert!(interpret_dimension(&w, &vocab(), 0, 4).is_err());
        assert!(write_dimension_reports(&[r]).starts_with(DIMENSION_HEADER));
    }
}
