use std::collections::HashSet;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::write_file;
use crate::heads::N_CLASSES;
use crate::{Error, Result};

/// A broken campaign invariant. Any of these aborts the run.
#[derive(Clone, Debug, PartialEq, Eq, thiserror::Error, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum Violation {
    #[error("duplicate id {id:?} at row {row}")]
    DuplicateId { id: String, row: usize },
    #[error("expected {expected} rows, found {found}")]
    RowCount { expected: usize, found: usize },
    #[error("gold label differs from the reference at row {row} (id {id:?})")]
    GoldMismatch { row: usize, id: String },
    #[error("label outside 0..5 at row {row}")]
    LabelRange { row: usize },
    #[error("malformed prediction file at line {line}: {detail}")]
    Malformed { line: usize, detail: String },
    #[error("seed sets differ between compared series")]
    SeedSetMismatch,
    #[error("seed {seed} appears more than once")]
    DuplicateSeed { seed: u64 },
    #[error("prediction header does not match the run: {detail}")]
    HeaderMismatch { detail: String },
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PredictionHeader {
    pub cell: String,
    pub backbone: String,
    pub seed: u64,
    pub fingerprint: String,
    pub n_rows: usize,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PredictionRow {
    pub id: String,
    pub gold: usize,
    pub pred: usize,
}

/// Test predictions of one (cell, backbone, seed) run.
///
/// On disk: one JSON header line followed by one JSON object per row.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PredictionFile {
    pub header: PredictionHeader,
    pub rows: Vec<PredictionRow>,
}

/// Hex SHA-256 of the crate version and a configuration document, so files
/// produced by different code or settings are distinguishable.
pub fn fingerprint(config_json: &str) -> String {
    let mut h = Sha256::new();
    h.update(concat!(env!("CARGO_PKG_NAME"), "/", env!("CARGO_PKG_VERSION"), "\n"));
    h.update(config_json.as_bytes());
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

impl PredictionFile {
    pub fn new(cell: &str, backbone: &str, seed: u64, fingerprint: String, rows: Vec<PredictionRow>) -> Self {
        Self {
            header: PredictionHeader {
                cell: cell.into(),
                backbone: backbone.into(),
                seed,
                fingerprint,
                n_rows: rows.len(),
            },
            rows,
        }
    }

    pub fn gold(&self) -> Vec<usize> {
        self.rows.iter().map(|r| r.gold).collect()
    }

    pub fn preds(&self) -> Vec<usize> {
        self.rows.iter().map(|r| r.pred).collect()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = serde_json::to_vec(&self.header).expect("header serializes");
        out.push(b'\n');
        for r in &self.rows {
            serde_json::to_writer(&mut out, r).expect("row serializes");
            out.push(b'\n');
        }
        out
    }

    /// Parses a file; unparseable lines are reported as a [`Violation`].
    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let text = std::str::from_utf8(bytes).map_err(|e| Violation::Malformed {
            line: 0,
            detail: e.to_string(),
        })?;
        let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
        let (_, first) = lines.next().ok_or(Violation::Malformed {
            line: 1,
            detail: "missing header".into(),
        })?;
        let header: PredictionHeader = serde_json::from_str(first).map_err(|e| Violation::Malformed {
            line: 1,
            detail: e.to_string(),
        })?;
        let rows = lines
            .map(|(i, l)| {
                serde_json::from_str(l).map_err(|e| Violation::Malformed {
                    line: i + 1,
                    detail: e.to_string(),
                })
            })
            .collect::<std::result::Result<Vec<PredictionRow>, _>>()?;
        Ok(Self { header, rows })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        write_file(path, &self.to_bytes())
    }

    pub fn read(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

/// Checks unique ids, the declared row count, label ranges and, when a
/// reference is given, row count and gold vector against it.
pub fn validate_prediction_file(file: &PredictionFile, reference_gold: Option<&[usize]>) -> Result<(), Violation> {
    let found = file.rows.len();
    if found != file.header.n_rows {
        return Err(Violation::RowCount {
            expected: file.header.n_rows,
            found,
        });
    }
    if let Some(gold) = reference_gold {
        if gold.len() != found {
            return Err(Violation::RowCount {
                expected: gold.len(),
                found,
            });
        }
    }
    let mut ids = HashSet::with_capacity(found);
    for (row, r) in file.rows.iter().enumerate() {
        if !ids.insert(r.id.as_str()) {
            return Err(Violation::DuplicateId { id: r.id.clone(), row });
        }
        if r.gold >= N_CLASSES || r.pred >= N_CLASSES {
            return Err(Violation::LabelRange { row });
        }
        if let Some(gold) = reference_gold {
            if gold[row] != r.gold {
                return Err(Violation::GoldMismatch { row, id: r.id.clone() });
            }
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn file(rows: &[(&str, usize, usize)]) -> PredictionFile {
        let rows = rows
            .iter()
            .map(|&(id, gold, pred)| PredictionRow {
                id: id.into(),
                gold,
                pred,
            })
            .collect();
        PredictionFile::new("v2", "toy", 1, fingerprint("{}"), rows)
    }

    #[test]
    fn valid_file_passes_and_round_trips() {
        let f = file(&[("a", 0, 1), ("b", 4, 4)]);
        assert_eq!(validate_prediction_file(&f, Some(&[0, 4])), Ok(()));
        assert_eq!(PredictionFile::from_bytes(&f.to_bytes()).unwrap(), f);
    }

    #[test]
    fn violations() {
        let f = file(&[("a", 0, 1), ("a", 4, 4)]);
        assert!(matches!(
            validate_prediction_file(&f, None),
            Err(Violation::DuplicateId { row: 1, .. })
        ));
        let f = file(&[("a", 0, 1), ("b", 4, 4)]);
        assert!(matches!(
            validate_prediction_file(&f, Some(&[0, 3])),
            Err(Violation::GoldMismatch { row: 1, .. })
        ));
        assert!(matches!(
            validate_prediction_file(&f, Some(&[0, 4, 1])),
            Err(Violation::RowCount { expected: 3, found: 2 })
        ));
    }

    #[test]
    fn truncation_is_a_violation() {
        let f = file(&[("a", 0, 1), ("b", 4, 4), ("c", 2, 2)]);
        let bytes = f.to_bytes();
        // Drop the final row.
        let cut = bytes[..bytes.len() - 1].iter().rposition(|&b| b == b'\n').unwrap() + 1;
        let short = PredictionFile::from_bytes(&bytes[..cut]).unwrap();
        assert!(matches!(
            validate_prediction_file(&short, None),
            Err(Violation::RowCount { expected: 3, found: 2 })
        ));
        // Cut mid-row.
        let err = PredictionFile::from_bytes(&bytes[..bytes.len() - 4]).unwrap_err();
        assert!(matches!(err, Error::Aborted(Violation::Malformed { .. })));
    }

    #[test]
    fn fingerprint_is_stable_hex() {
        let a = fingerprint("{\"lr\":1}");
        assert_eq!(a, fingerprint("{\"lr\":1}"));
        assert_ne!(a, fingerprint("{\"lr\":2}"));
        assert_eq!(a.len(), 64);
    }
}
