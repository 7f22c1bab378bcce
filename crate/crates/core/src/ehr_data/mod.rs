//! Patients, visits, code vocabularies and their dense encodings.

mod corpus;

use std::collections::HashMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::nn_core::Tensor;

pub use corpus::{load_corpus, parse_corpus, save_corpus, write_corpus, LoadOptions, LoadSummary};

/// Medical code vocabulary with its code → category map.
///
/// Category indices follow the order in which categories first appear in
/// the code list, so a vocabulary is fully determined by its ordered
/// `(code, category)` pairs.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocabulary {
    codes: Vec<String>,
    categories: Vec<String>,
    code_to_category: Vec<usize>,
    code_index: HashMap<String, usize>,
}

pub(crate) fn valid_identifier(s: &str) -> bool {
    !s.is_empty() && !s.chars().any(|c| c.is_whitespace() || c == ',' || c == ';')
}

impl Vocabulary {
    pub fn from_pairs<C, G>(pairs: impl IntoIterator<Item = (C, G)>) -> Result<Self>
    where
        C: Into<String>,
        G: Into<String>,
    {
        let mut codes = Vec::new();
        let mut categories: Vec<String> = Vec::new();
        let mut category_index: HashMap<String, usize> = HashMap::new();
        let mut code_to_category = Vec::new();
        let mut code_index = HashMap::new();
        for (code, category) in pairs {
            let (code, category) = (code.into(), category.into());
            if !valid_identifier(&code) || !valid_identifier(&category) {
                return Err(Error::MalformedVocabulary(format!(
                    "identifiers may not be empty or contain whitespace, ',' or ';': {code:?} -> {category:?}"
                )));
            }
            if code_index.contains_key(&code) {
                return Err(Error::MalformedVocabulary(format!("code {code} declared twice")));
            }
            let g = *category_index.entry(category.clone()).or_insert_with(|| {
                categories.push(category);
                categories.len() - 1
            });
            code_index.insert(code.clone(), codes.len());
            codes.push(code);
            code_to_category.push(g);
        }
        if codes.is_empty() {
            return Err(Error::MalformedVocabulary("no codes declared".into()));
        }
        Ok(Vocabulary {
            codes,
            categories,
            code_to_category,
            code_index,
        })
    }

    pub fn n_codes(&self) -> usize {
        self.codes.len()
    }

    pub fn n_categories(&self) -> usize {
        self.categories.len()
    }

    pub fn codes(&self) -> &[String] {
        &self.codes
    }

    pub fn categories(&self) -> &[String] {
        &self.categories
    }

    pub fn code(&self, index: usize) -> &str {
        &self.codes[index]
    }

    pub fn code_index(&self, code: &str) -> Option<usize> {
        self.code_index.get(code).copied()
    }

    pub fn category_of(&self, code_index: usize) -> Option<usize> {
        self.code_to_category.get(code_index).copied()
    }

    pub fn code_to_category(&self) -> &[usize] {
        &self.code_to_category
    }
}

/// One encounter: a non-empty sorted set of code indices.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct Visit {
    code_indices: Vec<usize>,
}

impl Visit {
    /// Sorts and deduplicates; fails on an empty set.
    pub fn new(mut code_indices: Vec<usize>) -> Result<Self> {
        code_indices.sort_unstable();
        code_indices.dedup();
        if code_indices.is_empty() {
            return Err(Error::MalformedData("visit with no codes".into()));
        }
        Ok(Visit { code_indices })
    }

    pub fn codes(&self) -> &[usize] {
        &self.code_indices
    }

    pub fn len(&self) -> usize {
        self.code_indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.code_indices.is_empty()
    }

    pub fn contains(&self, code: usize) -> bool {
        self.code_indices.binary_search(&code).is_ok()
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PatientRecord {
    pub patient_id: String,
    pub visits: Vec<Visit>,
}

impl PatientRecord {
    pub fn new(patient_id: impl Into<String>, visits: Vec<Visit>) -> Result<Self> {
        let patient_id = patient_id.into();
        if patient_id.is_empty() || patient_id.contains(['\t', '\n', '\r']) {
            return Err(Error::MalformedData(format!(
                "invalid patient id {patient_id:?}"
            )));
        }
        if visits.len() < 2 {
            return Err(Error::MalformedData(format!(
                "patient {patient_id} has {} visit(s); at least 2 are needed",
                visits.len()
            )));
        }
        Ok(PatientRecord { patient_id, visits })
    }

    pub fn n_visits(&self) -> usize {
        self.visits.len()
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CodedSequenceDataset {
    pub vocabulary: Vocabulary,
    pub patients: Vec<PatientRecord>,
}

impl CodedSequenceDataset {
    /// Checks every code index against the vocabulary.
    pub fn new(vocabulary: Vocabulary, patients: Vec<PatientRecord>) -> Result<Self> {
        let n = vocabulary.n_codes();
        for p in &patients {
            for (v, visit) in p.visits.iter().enumerate() {
                if let Some(&bad) = visit.codes().iter().find(|&&c| c >= n) {
                    return Err(Error::MalformedData(format!(
                        "patient {}, visit {}: code index {bad} >= {n}",
                        p.patient_id,
                        v + 1
                    )));
                }
            }
        }
        Ok(CodedSequenceDataset {
            vocabulary,
            patients,
        })
    }

    pub fn len(&self) -> usize {
        self.patients.len()
    }

    pub fn is_empty(&self) -> bool {
        self.patients.is_empty()
    }

    fn subset(&self, indices: &[usize]) -> CodedSequenceDataset {
        CodedSequenceDataset {
            vocabulary: self.vocabulary.clone(),
            patients: indices.iter().map(|&i| self.patients[i].clone()).collect(),
        }
    }
}

/// Multi-hot vector of length `size` with ones at the visit's codes.
pub fn encode_multihot(visit: &Visit, size: usize) -> Result<Tensor> {
    let mut data = vec![0.0; size.max(1)];
    for &c in visit.codes() {
        if c >= size {
            return Err(Error::MalformedData(format!(
                "code index {c} out of range for vocabulary of size {size}"
            )));
        }
        data[c] = 1.0;
    }
    Ok(Tensor::vector(data))
}

/// Multi-hot vector over categories: one where any visit code maps to the category.
pub fn category_target(visit: &Visit, vocab: &Vocabulary) -> Result<Tensor> {
    let mut data = vec![0.0; vocab.n_categories()];
    for &c in visit.codes() {
        let g = vocab.category_of(c).ok_or_else(|| {
            Error::MalformedVocabulary(format!("code index {c} has no category"))
        })?;
        data[g] = 1.0;
    }
    Ok(Tensor::vector(data))
}

/// Dense inputs and targets for one patient.
#[derive(Clone, Debug)]
pub struct EncodedPatient {
    pub patient_id: String,
    /// Multi-hot code vectors `x_1..x_T`.
    pub inputs: Vec<Tensor>,
    /// Category vectors `y` for visits `2..T`, i.e. the target of step `t` is `targets[t]`.
    pub targets: Vec<Tensor>,
}

impl EncodedPatient {
    pub fn n_visits(&self) -> usize {
        self.inputs.len()
    }
}

pub fn encode_patient(patient: &PatientRecord, vocab: &Vocabulary) -> Result<EncodedPatient> {
    let context = |v: usize, e: Error| match e {
        Error::MalformedData(m) => {
            Error::MalformedData(format!("patient {}, visit {}: {m}", patient.patient_id, v + 1))
        }
        other => other,
    };
    let inputs = patient
        .visits
        .iter()
        .enumerate()
        .map(|(v, visit)| encode_multihot(visit, vocab.n_codes()).map_err(|e| context(v, e)))
        .collect::<Result<Vec<_>>>()?;
    let targets = patient.visits[1..]
        .iter()
        .map(|visit| category_target(visit, vocab))
        .collect::<Result<Vec<_>>>()?;
    Ok(EncodedPatient {
        patient_id: patient.patient_id.clone(),
        inputs,
        targets,
    })
}

pub fn encode_dataset(dataset: &CodedSequenceDataset) -> Result<Vec<EncodedPatient>> {
    dataset
        .patients
        .iter()
        .map(|p| encode_patient(p, &dataset.vocabulary))
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SplitSpec {
    pub train_fraction: f64,
    pub validation_fraction: f64,
    pub test_fraction: f64,
    pub seed: u64,
}

impl SplitSpec {
    pub fn new(train: f64, validation: f64, test: f64, seed: u64) -> Result<Self> {
        let spec = SplitSpec {
            train_fraction: train,
            validation_fraction: validation,
            test_fraction: test,
            seed,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        let fractions = [
            self.train_fraction,
            self.validation_fraction,
            self.test_fraction,
        ];
        if fractions.iter().any(|f| !(*f > 0.0 && *f < 1.0)) {
            return Err(Error::Config(format!(
                "split fractions must lie in (0,1): {fractions:?}"
            )));
        }
        let total: f64 = fractions.iter().sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(Error::Config(format!("split fractions sum to {total}, not 1")));
        }
        Ok(())
    }
}

impl Default for SplitSpec {
    fn default() -> Self {
        SplitSpec {
            train_fraction: 0.75,
            validation_fraction: 0.1,
            test_fraction: 0.15,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug)]
pub struct DatasetSplit {
    pub train: CodedSequenceDataset,
    pub validation: CodedSequenceDataset,
    pub test: CodedSequenceDataset,
}

/// Sizes of each part for `n` patients: rounded validation/test, remainder to train.
pub fn split_sizes(n: usize, spec: &SplitSpec) -> Result<(usize, usize, usize)> {
    spec.validate()?;
    let validation = (spec.validation_fraction * n as f64).round() as usize;
    let test = (spec.test_fraction * n as f64).round() as usize;
    let train = n.saturating_sub(validation + test);
    if train == 0 || validation == 0 || test == 0 || train + validation + test != n {
        return Err(Error::Config(format!(
            "split of {n} patients leaves an empty part ({train}/{validation}/{test})"
        )));
    }
    Ok((train, validation, test))
}

/// Patient-level random partition, deterministic in `spec.seed`.
pub fn split(dataset: &CodedSequenceDataset, spec: &SplitSpec) -> Result<DatasetSplit> {
    if dataset.is_empty() {
        return Err(Error::Config("cannot split an empty dataset".into()));
    }
    let (n_train, n_val, _) = split_sizes(dataset.len(), spec)?;
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(spec.seed));
    Ok(DatasetSplit {
        train: dataset.subset(&order[..n_train]),
        validation: dataset.subset(&order[n_train..n_train + n_val]),
        test: dataset.subset(&order[n_train + n_val..]),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::HashSet;

    fn vocab3() -> Vocabulary {
        Vocabulary::from_pairs([("250", "endocrine"), ("254", "endocrine"), ("11720", "nails")])
            .unwrap()
    }

    fn visit(codes: &[usize]) -> Visit {
        Visit::new(codes.to_vec()).unwrap()
    }

    fn toy_dataset(n: usize) -> CodedSequenceDataset {
        let patients = (0..n)
            .map(|i| PatientRecord::new(format!("p{i}"), vec![visit(&[0]), visit(&[i % 3])]).unwrap())
            .collect();
        CodedSequenceDataset::new(vocab3(), patients).unwrap()
    }

    #[test]
    fn multihot_examples() {
        assert_eq!(encode_multihot(&visit(&[0, 1]), 3).unwrap().data(), &[1., 1., 0.]);
        assert_eq!(encode_multihot(&visit(&[2]), 3).unwrap().data(), &[0., 0., 1.]);
        assert_eq!(encode_multihot(&visit(&[0, 1, 2]), 3).unwrap().data(), &[1., 1., 1.]);
    }

    #[test]
    fn multihot_out_of_range_names_patient_and_visit() {
        let p = PatientRecord::new("alice", vec![visit(&[0]), visit(&[5])]).unwrap();
        let err = encode_patient(&p, &vocab3()).unwrap_err().to_string();
        assert!(err.contains("alice") && err.contains("visit 2"), "{err}");
    }

    #[test]
    fn category_targets() {
        let v = vocab3();
        assert_eq!(category_target(&visit(&[0, 1]), &v).unwrap().data(), &[1., 0.]);
        assert_eq!(category_target(&visit(&[1, 2]), &v).unwrap().data(), &[1., 1.]);
    }

    #[test]
    fn visits_deduplicate_and_reject_empty() {
        assert_eq!(visit(&[2, 0, 2]).codes(), &[0, 2]);
        assert!(Visit::new(vec![]).is_err());
    }

    #[test]
    fn single_visit_patient_rejected() {
        assert!(PatientRecord::new("p", vec![visit(&[0])]).is_err());
    }

    #[test]
    fn vocabulary_rejects_duplicates_and_bad_identifiers() {
        assert!(Vocabulary::from_pairs([("a", "x"), ("a", "y")]).is_err());
        assert!(Vocabulary::from_pairs([("a b", "x")]).is_err());
        assert!(Vocabulary::from_pairs([("a,b", "x")]).is_err());
    }

    #[test]
    fn split_sizes_examples() {
        let spec = SplitSpec::default();
        assert_eq!(split_sizes(20, &spec).unwrap(), (15, 2, 3));
        let spec = SplitSpec::new(0.8, 0.1, 0.1, 0).unwrap();
        assert_eq!(split_sizes(10, &spec).unwrap(), (8, 1, 1));
        assert!(split_sizes(3, &SplitSpec::default()).is_err());
    }

    #[test]
    fn split_spec_validation() {
        assert!(SplitSpec::new(0.5, 0.2, 0.2, 0).is_err());
        assert!(SplitSpec::new(1.0, 0.0, 0.0, 0).is_err());
    }

    #[test]
    fn split_is_deterministic_partition() {
        let ds = toy_dataset(20);
        let spec = SplitSpec::default();
        let a = split(&ds, &spec).unwrap();
        let b = split(&ds, &spec).unwrap();
        assert_eq!(a.train, b.train);
        assert_eq!(a.test, b.test);
        let ids: Vec<&str> = [&a.train, &a.validation, &a.test]
            .iter()
            .flat_map(|d| d.patients.iter().map(|p| p.patient_id.as_str()))
            .collect();
        let unique: HashSet<&str> = ids.iter().copied().collect();
        assert_eq!(ids.len(), 20);
        assert_eq!(unique.len(), 20);
    }

    #[test]
    fn split_rejects_empty_dataset() {
        let ds = CodedSequenceDataset::new(vocab3(), vec![]).unwrap();
        assert!(split(&ds, &SplitSpec::default()).is_err());
    }

    #[test]
    fn dataset_checks_code_range() {
        let p = PatientRecord::new("p", vec![visit(&[0]), visit(&[3])]).unwrap();
        assert!(CodedSequenceDataset::new(vocab3(), vec![p]).is_err());
    }
}
