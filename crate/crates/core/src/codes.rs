//! Binary medical-code matrices and their text formats.
//!
//! A record is a vector of `N` presence indicators. Each indicator is viewed
//! by the diffusion model as a one-hot token over two categories: presence
//! maps to category 0 (`[1, 0]`) and absence to category 1 (`[0, 1]`).

use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Category index of a present code.
pub const PRESENT: usize = 0;
/// Category index of an absent code.
pub const ABSENT: usize = 1;

/// Token category for a presence bit.
#[inline]
pub fn bit_to_category(bit: u8) -> usize {
    if bit == 1 {
        PRESENT
    } else {
        ABSENT
    }
}

/// Dense `n_records x n_codes` matrix of 0/1 indicators, row-major.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CodeMatrix {
    n_records: usize,
    n_codes: usize,
    bits: Vec<u8>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    code_labels: Option<Vec<String>>,
}

impl CodeMatrix {
    pub fn new(n_records: usize, n_codes: usize, bits: Vec<u8>) -> Result<Self> {
        if bits.len() != n_records * n_codes {
            return Err(Error::ShapeMismatch(format!(
                "{} bits for a {}x{} matrix",
                bits.len(),
                n_records,
                n_codes
            )));
        }
        if let Some(pos) = bits.iter().position(|&b| b > 1) {
            return Err(Error::MalformedRecord {
                line: pos / n_codes.max(1),
                msg: format!("cell value {} is not 0 or 1", bits[pos]),
            });
        }
        Ok(Self {
            n_records,
            n_codes,
            bits,
            code_labels: None,
        })
    }

    pub fn zeros(n_records: usize, n_codes: usize) -> Self {
        Self {
            n_records,
            n_codes,
            bits: vec![0; n_records * n_codes],
            code_labels: None,
        }
    }

    /// Build from nested rows of 0/1 values.
    pub fn from_rows(rows: &[Vec<u8>]) -> Result<Self> {
        let n_codes = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != n_codes) {
            return Err(Error::ShapeMismatch("rows have differing lengths".into()));
        }
        Self::new(rows.len(), n_codes, rows.concat())
    }

    pub fn with_labels(mut self, labels: Vec<String>) -> Result<Self> {
        if labels.len() != self.n_codes {
            return Err(Error::ShapeMismatch(format!(
                "{} labels for {} codes",
                labels.len(),
                self.n_codes
            )));
        }
        self.code_labels = Some(labels);
        Ok(self)
    }

    pub fn n_records(&self) -> usize {
        self.n_records
    }

    pub fn n_codes(&self) -> usize {
        self.n_codes
    }

    pub fn bits(&self) -> &[u8] {
        &self.bits
    }

    pub fn code_labels(&self) -> Option<&[String]> {
        self.code_labels.as_deref()
    }

    pub fn row(&self, r: usize) -> &[u8] {
        &self.bits[r * self.n_codes..(r + 1) * self.n_codes]
    }

    pub fn rows(&self) -> impl Iterator<Item = &[u8]> {
        // chunks_exact panics on a zero chunk size
        let n = self.n_codes.max(1);
        self.bits.chunks_exact(n).take(self.n_records)
    }

    #[inline]
    pub fn get(&self, r: usize, i: usize) -> u8 {
        self.bits[r * self.n_codes + i]
    }

    pub(crate) fn set(&mut self, r: usize, i: usize, bit: u8) {
        self.bits[r * self.n_codes + i] = bit;
    }

    /// Number of present codes in each record.
    pub fn positive_counts(&self) -> Vec<usize> {
        self.rows()
            .map(|r| r.iter().map(|&b| b as usize).sum())
            .collect()
    }

    /// Sparse view: the ascending present-code indices of each record.
    pub fn to_sparse_rows(&self) -> Vec<Vec<usize>> {
        self.rows()
            .map(|r| {
                r.iter()
                    .enumerate()
                    .filter(|(_, &b)| b == 1)
                    .map(|(i, _)| i)
                    .collect()
            })
            .collect()
    }

    /// New matrix holding the given records, in the given order.
    pub fn select_rows(&self, indices: &[usize]) -> CodeMatrix {
        let mut bits = Vec::with_capacity(indices.len() * self.n_codes);
        for &r in indices {
            bits.extend_from_slice(self.row(r));
        }
        CodeMatrix {
            n_records: indices.len(),
            n_codes: self.n_codes,
            bits,
            code_labels: self.code_labels.clone(),
        }
    }

    /// Split off one column: returns (remaining columns, the column).
    pub fn split_column(&self, col: usize) -> Result<(CodeMatrix, Vec<u8>)> {
        if col >= self.n_codes {
            return Err(Error::IndexOutOfRange {
                index: col,
                n_codes: self.n_codes,
            });
        }
        let mut features = Vec::with_capacity(self.n_records * (self.n_codes - 1));
        let mut target = Vec::with_capacity(self.n_records);
        for r in self.rows() {
            features.extend_from_slice(&r[..col]);
            features.extend_from_slice(&r[col + 1..]);
            target.push(r[col]);
        }
        Ok((
            CodeMatrix {
                n_records: self.n_records,
                n_codes: self.n_codes - 1,
                bits: features,
                code_labels: None,
            },
            target,
        ))
    }

    /// Stack two matrices with the same number of codes.
    pub fn concat(&self, other: &CodeMatrix) -> Result<CodeMatrix> {
        if self.n_codes != other.n_codes {
            return Err(Error::ShapeMismatch(format!(
                "cannot stack {} codes onto {}",
                other.n_codes, self.n_codes
            )));
        }
        let mut bits = self.bits.clone();
        bits.extend_from_slice(&other.bits);
        Ok(CodeMatrix {
            n_records: self.n_records + other.n_records,
            n_codes: self.n_codes,
            bits,
            code_labels: self.code_labels.clone(),
        })
    }
}

/// Train / validation / test partition of one dataset.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DatasetSplit {
    pub train: CodeMatrix,
    pub validation: CodeMatrix,
    pub test: CodeMatrix,
    pub split_seed: u64,
}

impl DatasetSplit {
    /// Shuffle records with `seed` and cut them into disjoint train,
    /// validation and test sets. Fractions are of the total record count;
    /// test receives the remainder.
    pub fn split(data: &CodeMatrix, train_frac: f64, valid_frac: f64, seed: u64) -> Result<Self> {
        if !(0.0..=1.0).contains(&train_frac)
            || !(0.0..=1.0).contains(&valid_frac)
            || train_frac + valid_frac > 1.0
        {
            return Err(Error::InvalidConfig(format!(
                "split fractions {train_frac} + {valid_frac} must lie in [0, 1]"
            )));
        }
        let n = data.n_records();
        let mut order: Vec<usize> = (0..n).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        order.shuffle(&mut rng);
        let n_train = (n as f64 * train_frac).round() as usize;
        let n_valid = ((n as f64 * valid_frac).round() as usize).min(n - n_train);
        Ok(Self {
            train: data.select_rows(&order[..n_train]),
            validation: data.select_rows(&order[n_train..n_train + n_valid]),
            test: data.select_rows(&order[n_train + n_valid..]),
            split_seed: seed,
        })
    }
}

/// Build a matrix from sparse rows of ascending code indices.
pub fn encode_records(sparse_rows: &[Vec<usize>], n_codes: usize) -> Result<CodeMatrix> {
    let mut m = CodeMatrix::zeros(sparse_rows.len(), n_codes);
    for (r, row) in sparse_rows.iter().enumerate() {
        let mut prev: Option<usize> = None;
        for &i in row {
            if i >= n_codes {
                return Err(Error::IndexOutOfRange { index: i, n_codes });
            }
            if prev.is_some_and(|p| i <= p) {
                return Err(Error::NonAscendingRow { row: r });
            }
            prev = Some(i);
            m.set(r, i, 1);
        }
    }
    Ok(m)
}

/// Per-code occurrence fraction.
pub fn prevalence(m: &CodeMatrix) -> Result<Vec<f64>> {
    if m.n_records() == 0 {
        return Err(Error::EmptyMatrix);
    }
    let mut counts = vec![0usize; m.n_codes()];
    for row in m.rows() {
        for (c, &b) in counts.iter_mut().zip(row) {
            *c += b as usize;
        }
    }
    let n = m.n_records() as f64;
    Ok(counts.into_iter().map(|c| c as f64 / n).collect())
}

/// Parse the canonical sparse text format:
///
/// ```text
/// N=<codes>
/// <ascending indices separated by single spaces>   (one line per record)
/// ```
///
/// An empty line is an all-zero record and the stream must end in a newline.
pub fn parse_dataset(text: &str) -> Result<CodeMatrix> {
    let (header, body) = text
        .split_once('\n')
        .ok_or_else(|| Error::MalformedHeader("missing header line".into()))?;
    let n_codes: usize = header
        .strip_prefix("N=")
        .ok_or_else(|| Error::MalformedHeader(format!("expected `N=<int>`, got `{header}`")))?
        .parse()
        .map_err(|e| Error::MalformedHeader(format!("`{header}`: {e}")))?;

    let mut rows = Vec::new();
    if !body.is_empty() {
        let body = body.strip_suffix('\n').ok_or(Error::MalformedRecord {
            line: body.lines().count() + 1,
            msg: "missing final newline".into(),
        })?;
        for (i, line) in body.split('\n').enumerate() {
            let row = if line.is_empty() {
                Vec::new()
            } else {
                line.split(' ')
                    .map(|tok| {
                        tok.parse::<usize>().map_err(|e| Error::MalformedRecord {
                            line: i + 2,
                            msg: format!("`{tok}`: {e}"),
                        })
                    })
                    .collect::<Result<Vec<_>>>()?
            };
            rows.push(row);
        }
    }
    encode_records(&rows, n_codes)
}

/// Serialize to the canonical sparse text format.
pub fn serialize_dataset(m: &CodeMatrix) -> String {
    let mut out = String::with_capacity(8 + m.n_records() * 8);
    writeln!(out, "N={}", m.n_codes()).unwrap();
    for row in m.rows() {
        let mut first = true;
        for (i, &b) in row.iter().enumerate() {
            if b == 1 {
                if !first {
                    out.push(' ');
                }
                write!(out, "{i}").unwrap();
                first = false;
            }
        }
        out.push('\n');
    }
    // n_codes == 0 has no rows to iterate; emit its empty records explicitly
    if m.n_codes() == 0 {
        for _ in 0..m.n_records() {
            out.push('\n');
        }
    }
    out
}

/// Read a headerless dense CSV of `0`/`1` cells.
pub fn parse_dense_csv(text: &str) -> Result<CodeMatrix> {
    let mut rows: Vec<Vec<u8>> = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let row = line
            .split(',')
            .map(|cell| match cell.trim() {
                "0" => Ok(0u8),
                "1" => Ok(1u8),
                other => Err(Error::MalformedRecord {
                    line: i + 1,
                    msg: format!("cell `{other}` is not 0 or 1"),
                }),
            })
            .collect::<Result<Vec<_>>>()?;
        if let Some(first) = rows.first() {
            if first.len() != row.len() {
                return Err(Error::MalformedRecord {
                    line: i + 1,
                    msg: format!("{} cells, expected {}", row.len(), first.len()),
                });
            }
        }
        rows.push(row);
    }
    CodeMatrix::from_rows(&rows)
}

/// Load a dataset file; `.csv` files are read as dense CSV, anything else
/// as the sparse format.
pub fn load_dataset(path: &std::path::Path) -> Result<CodeMatrix> {
    let text = std::fs::read_to_string(path)?;
    if path.extension().is_some_and(|e| e.eq_ignore_ascii_case("csv")) {
        parse_dense_csv(&text)
    } else {
        parse_dataset(&text)
    }
}

pub fn save_dataset(path: &std::path::Path, m: &CodeMatrix) -> Result<()> {
    crate::io::write_atomic(path, serialize_dataset(m).as_bytes())
}
