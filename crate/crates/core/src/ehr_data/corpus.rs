//! Line-oriented corpus files.
//!
//! ```text
//! #code 250 endocrine
//! #code 254 endocrine
//! #code 11720 nails
//! p001<TAB>250,254;11720;250
//! ```
//!
//! `#code` header lines come first. Every following non-blank line is a
//! patient id, a tab, and `;`-separated visits of `,`-separated codes. Other
//! lines starting with `#` are comments.

use std::collections::HashSet;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use crate::ehr_data::{valid_identifier, CodedSequenceDataset, PatientRecord, Visit, Vocabulary};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug)]
pub struct LoadOptions {
    /// Patients with fewer visits are dropped and counted in the summary.
    pub min_visits: usize,
}

impl Default for LoadOptions {
    fn default() -> Self {
        LoadOptions { min_visits: 2 }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct LoadSummary {
    pub loaded: usize,
    pub rejected_short: usize,
    pub rejected_ids: Vec<String>,
}

pub fn load_corpus(path: impl AsRef<Path>, options: LoadOptions) -> Result<(CodedSequenceDataset, LoadSummary)> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_corpus(&text, path, options)
}

/// Parses corpus text; `origin` only labels error messages.
pub fn parse_corpus(
    text: &str,
    origin: impl Into<PathBuf>,
    options: LoadOptions,
) -> Result<(CodedSequenceDataset, LoadSummary)> {
    let origin = origin.into();
    let syntax = |line: usize, message: String| Error::Syntax {
        path: origin.clone(),
        line,
        message,
    };
    if options.min_visits < 2 {
        return Err(Error::Config("min_visits must be at least 2".into()));
    }

    let mut pairs: Vec<(String, String)> = Vec::new();
    let mut records: Vec<(usize, &str, &str)> = Vec::new();
    let mut declared = HashSet::new();
    for (i, raw) in text.lines().enumerate() {
        let lineno = i + 1;
        let line = raw.strip_suffix('\r').unwrap_or(raw);
        if line.trim().is_empty() {
            continue;
        }
        if let Some(rest) = line.strip_prefix("#code") {
            if !records.is_empty() {
                return Err(syntax(lineno, "#code declaration after patient records".into()));
            }
            let fields: Vec<&str> = rest.split_whitespace().collect();
            if !rest.starts_with([' ', '\t']) || fields.len() != 2 {
                return Err(syntax(lineno, "expected `#code <code> <category>`".into()));
            }
            if !valid_identifier(fields[0]) || !valid_identifier(fields[1]) {
                return Err(syntax(lineno, "codes and categories may not contain ',' or ';'".into()));
            }
            if !declared.insert(fields[0]) {
                return Err(syntax(lineno, format!("code {} declared twice", fields[0])));
            }
            pairs.push((fields[0].to_string(), fields[1].to_string()));
            continue;
        }
        if line.starts_with('#') {
            continue;
        }
        let (id, visits) = line
            .split_once('\t')
            .ok_or_else(|| syntax(lineno, "expected `<patient_id>\\t<visits>`".into()))?;
        records.push((lineno, id, visits));
    }

    let vocabulary = Vocabulary::from_pairs(pairs.iter().cloned()).map_err(|e| match e {
        Error::MalformedVocabulary(m) => syntax(1, m),
        other => other,
    })?;

    let mut patients = Vec::with_capacity(records.len());
    let mut summary = LoadSummary::default();
    for (lineno, id, visit_text) in records {
        if id.is_empty() {
            return Err(syntax(lineno, "empty patient id".into()));
        }
        let mut visits = Vec::new();
        for (v, chunk) in visit_text.split(';').enumerate() {
            let mut codes = Vec::new();
            for code in chunk.split(',') {
                let code = code.trim();
                if code.is_empty() {
                    return Err(syntax(lineno, format!("empty code in visit {} of {id}", v + 1)));
                }
                let idx = vocabulary
                    .code_index(code)
                    .ok_or_else(|| syntax(lineno, format!("unknown code {code} in patient {id}")))?;
                codes.push(idx);
            }
            visits.push(Visit::new(codes).map_err(|e| syntax(lineno, e.to_string()))?);
        }
        if visits.len() < options.min_visits {
            summary.rejected_short += 1;
            summary.rejected_ids.push(id.to_string());
            continue;
        }
        patients.push(PatientRecord::new(id, visits).map_err(|e| syntax(lineno, e.to_string()))?);
    }
    summary.loaded = patients.len();
    Ok((CodedSequenceDataset::new(vocabulary, patients)?, summary))
}

/// Renders a dataset in corpus format.
pub fn write_corpus(dataset: &CodedSequenceDataset) -> String {
    let vocab = &dataset.vocabulary;
    let mut out = String::new();
    for (i, code) in vocab.codes().iter().enumerate() {
        let g = vocab.code_to_category()[i];
        let _ = writeln!(out, "#code {code} {}", vocab.categories()[g]);
    }
    for p in &dataset.patients {
        out.push_str(&p.patient_id);
        out.push('\t');
        for (v, visit) in p.visits.iter().enumerate() {
            if v > 0 {
                out.push(';');
            }
            for (k, &c) in visit.codes().iter().enumerate() {
                if k > 0 {
                    out.push(',');
                }
                out.push_str(vocab.code(c));
            }
        }
        out.push('\n');
    }
    out
}

pub fn save_corpus(dataset: &CodedSequenceDataset, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, write_corpus(dataset)).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    const SAMPLE: &str = "#code 250 endocrine\n#code 254 endocrine\n#code 11720 nails\n\
        p1\t250,254;11720;250\n\
        p2\t254;254,254\n\
        p3\t11720;250;254;11720\n";

    #[test]
    fn parses_sample() {
        let (ds, summary) = parse_corpus(SAMPLE, "sample", LoadOptions::default()).unwrap();
        assert_eq!(summary.loaded, 3);
        assert_eq!(ds.vocabulary.n_codes(), 3);
        assert_eq!(ds.vocabulary.n_categories(), 2);
        assert_eq!(ds.patients[0].visits[0].codes(), &[0, 1]);
        // duplicate codes inside a visit collapse
        assert_eq!(ds.patients[1].visits[1].codes(), &[1]);
    }

    #[test]
    fn round_trip_preserves_everything() {
        let (ds, _) = parse_corpus(SAMPLE, "sample", LoadOptions::default()).unwrap();
        let text = write_corpus(&ds);
        let (again, _) = parse_corpus(&text, "again", LoadOptions::default()).unwrap();
        assert_eq!(ds, again);
    }

    #[test]
    fn unknown_code_is_named() {
        let text = "#code a x\np1\ta;b\n";
        let err = parse_corpus(text, "f.txt", LoadOptions::default()).unwrap_err().to_string();
        assert!(err.contains("unknown code b") && err.contains("f.txt:2"), "{err}");
    }

    #[test]
    fn short_patients_are_reported() {
        let text = "#code a x\np1\ta\np2\ta;a\n";
        let (ds, summary) = parse_corpus(text, "f", LoadOptions::default()).unwrap();
        assert_eq!(ds.len(), 1);
        assert_eq!(summary.rejected_short, 1);
        assert_eq!(summary.rejected_ids, vec!["p1".to_string()]);
    }

    #[test]
    fn min_visits_threshold() {
        let text = "#code a x\np1\ta;a;a;a\np2\ta;a;a;a;a\n";
        let (ds, summary) = parse_corpus(text, "f", LoadOptions { min_visits: 5 }).unwrap();
        assert_eq!(ds.len(), 1);
        assert_eq!(summary.rejected_short, 1);
    }

    #[test]
    fn syntax_errors_carry_line_numbers() {
        let err = parse_corpus("#code a x\np1 a;a\n", "f", LoadOptions::default())
            .unwrap_err()
            .to_string();
        assert!(err.contains("f:2"), "{err}");
        let err = parse_corpus("#code a\n", "f", LoadOptions::default()).unwrap_err().to_string();
        assert!(err.contains("f:1"), "{err}");
        let err = parse_corpus("#code a x\np1\ta;;a\n", "f", LoadOptions::default())
            .unwrap_err()
            .to_string();
        assert!(err.contains("empty code"), "{err}");
        let err = parse_corpus("#code a x\np1\ta;a\n#code b x\n", "f", LoadOptions::default())
            .unwrap_err()
            .to_string();
        assert!(err.contains("f:3"), "{err}");
    }

    #[test]
    fn comments_and_crlf_are_tolerated() {
        let text = "# generated\r\n#code a x\r\np1\ta;a\r\n";
        let (ds, _) = parse_corpus(text, "f", LoadOptions::default()).unwrap();
        assert_eq!(ds.len(), 1);
    }
}
