//! Loader for the numeric German-credit dataset.
//!
//! Expected format: one row per applicant, whitespace-separated integers,
//! 24 covariates followed by the class label (1 = good, 2 = bad). This is the
//! layout of the UCI `german.data-numeric` file.

use std::fmt::Write as _;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::TargetError;
use crate::autodiff::ConstMatrix;

pub const RAW_FEATURES: usize = 24;
pub const FIELDS_PER_ROW: usize = RAW_FEATURES + 1;

/// Standardized design matrix and binary responses.
#[derive(Clone, Debug, PartialEq)]
pub struct GermanCreditData {
    /// `N × P` row-major; column 0 is the constant 1.
    x: ConstMatrix,
    y: Vec<f64>,
}

impl GermanCreditData {
    pub fn new(x: ConstMatrix, y: Vec<f64>) -> Self {
        assert_eq!(x.rows(), y.len(), "design rows and labels differ");
        GermanCreditData { x, y }
    }

    pub fn num_rows(&self) -> usize {
        self.x.rows()
    }

    /// Number of covariates including the constant column.
    pub fn num_covariates(&self) -> usize {
        self.x.cols()
    }

    pub fn design(&self) -> &ConstMatrix {
        &self.x
    }

    pub fn labels(&self) -> &[f64] {
        &self.y
    }

    pub fn column(&self, j: usize) -> Vec<f64> {
        (0..self.num_rows()).map(|i| self.x.row(i)[j]).collect()
    }
}

/// Maps `value` from `[min, max]` onto `[-1, 1]`.
pub fn standardize(value: f64, min: f64, max: f64) -> f64 {
    2.0 * (value - min) / (max - min) - 1.0
}

pub fn load_german_credit(path: impl AsRef<Path>) -> Result<GermanCreditData, TargetError> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|source| TargetError::Io { path: path.display().to_string(), source })?;
    parse_german_credit(&text, &path.display().to_string())
}

/// Parses the raw text; `origin` only labels error messages.
pub fn parse_german_credit(text: &str, origin: &str) -> Result<GermanCreditData, TargetError> {
    let parse_err = |line: usize, msg: String| TargetError::Parse { path: origin.to_string(), line, msg };
    let mut raw: Vec<[f64; RAW_FEATURES]> = Vec::new();
    let mut y = Vec::new();
    for (idx, line) in text.lines().enumerate() {
        let lineno = idx + 1;
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.len() != FIELDS_PER_ROW {
            return Err(parse_err(lineno, format!("expected {FIELDS_PER_ROW} fields, found {}", fields.len())));
        }
        let mut row = [0.0; RAW_FEATURES];
        for (j, f) in fields[..RAW_FEATURES].iter().enumerate() {
            let v: i64 = f.parse().map_err(|_| parse_err(lineno, format!("field {}: `{f}` is not an integer", j + 1)))?;
            row[j] = v as f64;
        }
        let label = match fields[RAW_FEATURES] {
            "1" => 1.0,
            "2" => 0.0,
            other => return Err(parse_err(lineno, format!("label must be 1 or 2, found `{other}`"))),
        };
        raw.push(row);
        y.push(label);
    }

    let n = raw.len();
    let p = RAW_FEATURES + 1;
    let mut x = vec![0.0; n * p];
    for i in 0..n {
        x[i * p] = 1.0;
    }
    for j in 0..RAW_FEATURES {
        let min = raw.iter().map(|r| r[j]).fold(f64::INFINITY, f64::min);
        let max = raw.iter().map(|r| r[j]).fold(f64::NEG_INFINITY, f64::max);
        if n > 0 && max == min {
            log::warn!("{origin}: covariate {} is constant; mapping it to zeros", j + 1);
            continue;
        }
        for (i, r) in raw.iter().enumerate() {
            x[i * p + j + 1] = standardize(r[j], min, max);
        }
    }
    Ok(GermanCreditData::new(ConstMatrix::new(x, n, p), y))
}

/// Raw text in the German-credit layout drawn from a sparse logistic model.
///
/// Stand-in for the real file when it is not available; covariates take small
/// integer ranges like the categorical columns of the real data.
pub fn synthetic_german_credit_text(rows: usize, seed: u64) -> String {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let ranges: Vec<i64> = (0..RAW_FEATURES).map(|j| 1 + (j as i64 * 7) % 10).collect();
    let weights: Vec<f64> = (0..RAW_FEATURES).map(|j| if j % 5 == 0 { rng.random_range(-1.5..1.5) } else { 0.0 }).collect();
    let mut out = String::new();
    for _ in 0..rows {
        let feats: Vec<i64> = ranges.iter().map(|&r| rng.random_range(0..=r)).collect();
        let logit: f64 =
            feats.iter().zip(&ranges).zip(&weights).map(|((&v, &r), w)| w * (2.0 * v as f64 / r as f64 - 1.0)).sum::<f64>() + 0.8;
        let good = rng.random::<f64>() < 1.0 / (1.0 + (-logit).exp());
        for v in &feats {
            write!(out, "{v:4}").unwrap();
        }
        writeln!(out, "{:4}", if good { 1 } else { 2 }).unwrap();
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(first: [i64; 3], label: u8) -> String {
        // Remaining 21 covariates vary with the row so none is constant.
        let mut fields: Vec<String> = first.iter().map(|v| v.to_string()).collect();
        fields.extend((0..21).map(|j| (first[0] + j).to_string()));
        fields.push(label.to_string());
        fields.join(" ")
    }

    #[test]
    fn affine_map_endpoints() {
        assert_eq!(standardize(0.0, 0.0, 4.0), -1.0);
        assert_eq!(standardize(4.0, 0.0, 4.0), 1.0);
        assert_eq!(standardize(2.0, 0.0, 4.0), 0.0);
    }

    #[test]
    fn three_row_fixture() {
        let text = [row([0, 10, 7], 1), row([2, 30, 7], 2), row([4, 20, 7], 1)].join("\n");
        let d = parse_german_credit(&text, "fixture").unwrap();
        assert_eq!(d.num_rows(), 3);
        assert_eq!(d.num_covariates(), 25);
        assert_eq!(d.column(0), vec![1.0, 1.0, 1.0]);
        assert_eq!(d.column(1), vec![-1.0, 0.0, 1.0]);
        assert_eq!(d.column(2), vec![-1.0, 1.0, 0.0]);
        // constant raw column
        assert_eq!(d.column(3), vec![0.0, 0.0, 0.0]);
        assert_eq!(d.labels(), &[1.0, 0.0, 1.0]);
    }

    #[test]
    fn wrong_field_count_names_line() {
        let text = format!("{}\n1 2 3\n", row([0, 1, 2], 1));
        match parse_german_credit(&text, "f.txt") {
            Err(TargetError::Parse { line, path, .. }) => {
                assert_eq!(line, 2);
                assert_eq!(path, "f.txt");
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn bad_label_and_non_integer() {
        assert!(matches!(parse_german_credit(&row([0, 1, 2], 3), "f"), Err(TargetError::Parse { line: 1, .. })));
        let text = row([0, 1, 2], 1).replacen('0', "x", 1);
        assert!(matches!(parse_german_credit(&text, "f"), Err(TargetError::Parse { line: 1, .. })));
    }

    #[test]
    fn missing_file_names_path() {
        let err = load_german_credit("/nonexistent/german.data-numeric").unwrap_err();
        assert!(err.to_string().contains("/nonexistent/german.data-numeric"));
    }

    #[test]
    fn synthetic_text_parses_with_full_span() {
        let d = parse_german_credit(&synthetic_german_credit_text(200, 1), "synthetic").unwrap();
        assert_eq!(d.num_rows(), 200);
        assert_eq!(d.num_covariates(), 25);
        for j in 1..25 {
            let c = d.column(j);
            let min = c.iter().cloned().fold(f64::INFINITY, f64::min);
            let max = c.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            assert_eq!((min, max), (-1.0, 1.0), "column {j}");
        }
    }
}
