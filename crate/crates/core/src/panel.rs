//! Balanced-panel data model, CSV ingestion, and covariate standardization.
//!
//! Panels are stored dense: an `N x T` outcome matrix plus one `N x T` matrix
//! per covariate. Units and periods are re-indexed to `0..N-1` and `0..T-1`
//! internally; the original labels are kept for reporting. Labels are ordered
//! lexicographically (so numeric period labels should be zero-padded if their
//! natural order matters).

use std::collections::BTreeMap;
use std::path::Path;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A balanced `N x T` panel of binary outcomes and `K` real covariates.
///
/// Immutable after construction; safe to share read-only across threads.
#[derive(Debug, Clone, PartialEq)]
pub struct PanelData {
    pub n_units: usize,
    pub n_periods: usize,
    /// `N x T` matrix with entries in `{0.0, 1.0}`.
    pub y: DMatrix<f64>,
    /// `K` covariate matrices, each `N x T`.
    pub x: Vec<DMatrix<f64>>,
    pub unit_ids: Vec<String>,
    pub period_ids: Vec<String>,
}

/// Column mapping for long-format CSV files.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CsvSchema {
    pub unit: String,
    pub period: String,
    pub y: String,
    pub x: Vec<String>,
    /// Field delimiter, comma by default.
    pub delimiter: u8,
}

impl CsvSchema {
    pub fn new(unit: &str, period: &str, y: &str, x: &[&str]) -> Self {
        Self {
            unit: unit.to_string(),
            period: period.to_string(),
            y: y.to_string(),
            x: x.iter().map(|s| s.to_string()).collect(),
            delimiter: b',',
        }
    }
}

/// Per-covariate record of the centering/scaling applied by [`standardize`].
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StandardizationReport {
    /// `(mean, sd)` actually applied; `None` for covariates left untouched.
    pub applied: Vec<Option<(f64, f64)>>,
}

/// A single invariant violation found by [`validate`].
#[derive(Debug, Clone, PartialEq)]
pub enum Violation {
    NonBinaryOutcome { unit: usize, period: usize, value: f64 },
    NonFiniteCovariate { unit: usize, period: usize, covariate: usize },
    /// Unit whose outcome never varies (all 0 or all 1). A warning: the
    /// penalized first stage may still be well-behaved, so the fitter decides.
    DegenerateUnit { unit: usize, all_ones: bool },
    /// Period whose outcome never varies. Also a warning.
    DegeneratePeriod { period: usize, all_ones: bool },
}

impl Violation {
    /// Warnings flag degenerate variation; everything else breaks an invariant.
    pub fn is_warning(&self) -> bool {
        matches!(self, Violation::DegenerateUnit { .. } | Violation::DegeneratePeriod { .. })
    }
}

impl PanelData {
    pub fn n_covariates(&self) -> usize {
        self.x.len()
    }

    /// Construct from dense matrices, checking dimension agreement.
    pub fn from_matrices(y: DMatrix<f64>, x: Vec<DMatrix<f64>>) -> Result<Self> {
        let (n, t) = (y.nrows(), y.ncols());
        if n == 0 || t == 0 {
            return Err(Error::Invalid("panel must have at least one unit and one period".into()));
        }
        for (k, xk) in x.iter().enumerate() {
            if xk.nrows() != n || xk.ncols() != t {
                return Err(Error::DimensionMismatch(format!(
                    "covariate x{k} is {}x{}, expected {n}x{t}",
                    xk.nrows(),
                    xk.ncols()
                )));
            }
        }
        Ok(Self {
            n_units: n,
            n_periods: t,
            y,
            x,
            unit_ids: (0..n).map(|i| i.to_string()).collect(),
            period_ids: (0..t).map(|t| t.to_string()).collect(),
        })
    }

    /// Restrict to a subset of units (`rows`) and periods (`cols`), preserving order.
    pub fn subpanel(&self, rows: &[usize], cols: &[usize]) -> Self {
        let take = |m: &DMatrix<f64>| {
            DMatrix::from_fn(rows.len(), cols.len(), |i, j| m[(rows[i], cols[j])])
        };
        Self {
            n_units: rows.len(),
            n_periods: cols.len(),
            y: take(&self.y),
            x: self.x.iter().map(take).collect(),
            unit_ids: rows.iter().map(|&i| self.unit_ids[i].clone()).collect(),
            period_ids: cols.iter().map(|&t| self.period_ids[t].clone()).collect(),
        }
    }
}

/// Load a long-format CSV into a balanced panel.
///
/// Requires a header row. Every `(unit, period)` pair must appear exactly
/// once and the pairs must form a complete grid. Outcomes must parse to 0 or
/// 1; covariates must be finite.
pub fn load_csv(path: &Path, schema: &CsvSchema) -> Result<PanelData> {
    let mut reader = csv::ReaderBuilder::new()
        .delimiter(schema.delimiter)
        .from_path(path)
        .map_err(|e| Error::Csv(e.to_string()))?;

    let headers = reader.headers().map_err(|e| Error::Csv(e.to_string()))?.clone();
    let col = |name: &str| -> Result<usize> {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::Csv(format!("column `{name}` not found in header")))
    };
    let unit_col = col(&schema.unit)?;
    let period_col = col(&schema.period)?;
    let y_col = col(&schema.y)?;
    let x_cols: Vec<usize> = schema.x.iter().map(|c| col(c)).collect::<Result<_>>()?;

    struct Row {
        unit: String,
        period: String,
        y: f64,
        x: Vec<f64>,
    }
    let mut rows = Vec::new();
    for record in reader.records() {
        let record = record.map_err(|e| Error::Csv(e.to_string()))?;
        let field = |idx: usize| -> Result<&str> {
            record.get(idx).ok_or_else(|| Error::Csv("short record".into()))
        };
        let unit = field(unit_col)?.to_string();
        let period = field(period_col)?.to_string();
        let y_raw = field(y_col)?;
        let y: f64 = y_raw
            .trim()
            .parse()
            .map_err(|_| Error::NonBinaryOutcome {
                unit: unit.clone(),
                period: period.clone(),
                value: y_raw.to_string(),
            })?;
        if y != 0.0 && y != 1.0 {
            return Err(Error::NonBinaryOutcome { unit, period, value: y_raw.to_string() });
        }
        let mut x = Vec::with_capacity(x_cols.len());
        for (k, &xc) in x_cols.iter().enumerate() {
            let raw = field(xc)?;
            let v: f64 = raw.trim().parse().map_err(|_| Error::NonFiniteCovariate {
                unit: unit.clone(),
                period: period.clone(),
                covariate: k + 1,
            })?;
            if !v.is_finite() {
                return Err(Error::NonFiniteCovariate { unit, period, covariate: k + 1 });
            }
            x.push(v);
        }
        rows.push(Row { unit, period, y, x });
    }
    if rows.is_empty() {
        return Err(Error::Csv("file contains no data rows".into()));
    }

    // Dense re-indexing; BTreeMap gives the lexicographic label order.
    let mut units: BTreeMap<String, usize> = BTreeMap::new();
    let mut periods: BTreeMap<String, usize> = BTreeMap::new();
    for row in &rows {
        let next = units.len();
        units.entry(row.unit.clone()).or_insert(next);
        let next = periods.len();
        periods.entry(row.period.clone()).or_insert(next);
    }
    let unit_ids: Vec<String> = units.keys().cloned().collect();
    let period_ids: Vec<String> = periods.keys().cloned().collect();
    let index_of_unit: BTreeMap<&str, usize> =
        unit_ids.iter().enumerate().map(|(i, s)| (s.as_str(), i)).collect();
    let index_of_period: BTreeMap<&str, usize> =
        period_ids.iter().enumerate().map(|(i, s)| (s.as_str(), i)).collect();

    let (n, t, k) = (unit_ids.len(), period_ids.len(), schema.x.len());
    let mut y = DMatrix::from_element(n, t, f64::NAN);
    let mut x: Vec<DMatrix<f64>> = (0..k).map(|_| DMatrix::from_element(n, t, f64::NAN)).collect();
    let mut seen = vec![false; n * t];
    for row in &rows {
        let i = index_of_unit[row.unit.as_str()];
        let j = index_of_period[row.period.as_str()];
        if seen[i * t + j] {
            return Err(Error::DuplicateCell { unit: row.unit.clone(), period: row.period.clone() });
        }
        seen[i * t + j] = true;
        y[(i, j)] = row.y;
        for (kk, &v) in row.x.iter().enumerate() {
            x[kk][(i, j)] = v;
        }
    }
    for i in 0..n {
        for j in 0..t {
            if !seen[i * t + j] {
                return Err(Error::MissingCell {
                    unit: unit_ids[i].clone(),
                    period: period_ids[j].clone(),
                });
            }
        }
    }

    Ok(PanelData { n_units: n, n_periods: t, y, x, unit_ids, period_ids })
}

/// Write a panel back to long-format CSV (inverse of [`load_csv`]).
///
/// Floats are printed with shortest-roundtrip formatting, so a write/read
/// cycle reproduces the panel bit-exactly.
pub fn write_csv(data: &PanelData, path: &Path, schema: &CsvSchema) -> Result<()> {
    let mut writer = csv::WriterBuilder::new()
        .delimiter(schema.delimiter)
        .from_path(path)
        .map_err(|e| Error::Csv(e.to_string()))?;
    let mut header = vec![schema.unit.clone(), schema.period.clone(), schema.y.clone()];
    header.extend(schema.x.iter().cloned());
    writer.write_record(&header).map_err(|e| Error::Csv(e.to_string()))?;
    for i in 0..data.n_units {
        for j in 0..data.n_periods {
            let mut record = vec![
                data.unit_ids[i].clone(),
                data.period_ids[j].clone(),
                format!("{}", data.y[(i, j)]),
            ];
            for xk in &data.x {
                record.push(format!("{}", xk[(i, j)]));
            }
            writer.write_record(&record).map_err(|e| Error::Csv(e.to_string()))?;
        }
    }
    writer.flush()?;
    Ok(())
}

/// Center and scale covariates to sample mean 0 and sample SD 1 (over all
/// `N*T` cells, `n-1` denominator). Indices in `skip` are left untouched.
pub fn standardize(
    data: &PanelData,
    skip: &[usize],
) -> Result<(PanelData, StandardizationReport)> {
    let cells = (data.n_units * data.n_periods) as f64;
    let mut out = data.clone();
    let mut applied = Vec::with_capacity(data.x.len());
    for (k, xk) in data.x.iter().enumerate() {
        if skip.contains(&k) {
            applied.push(None);
            continue;
        }
        let mean = xk.iter().sum::<f64>() / cells;
        let ss: f64 = xk.iter().map(|v| (v - mean) * (v - mean)).sum();
        let sd = (ss / (cells - 1.0)).sqrt();
        if !(sd > 0.0) {
            return Err(Error::ZeroVariance(k));
        }
        out.x[k] = xk.map(|v| (v - mean) / sd);
        applied.push(Some((mean, sd)));
    }
    Ok((out, StandardizationReport { applied }))
}

/// Check panel invariants, returning one entry per violation.
///
/// Entries with [`Violation::is_warning`] flag degenerate outcome variation
/// (a unit or period that is all-0 or all-1); they do not break an invariant.
/// The list contains no non-warning entries iff the panel invariants hold.
pub fn validate(data: &PanelData) -> Vec<Violation> {
    let mut out = Vec::new();
    for i in 0..data.n_units {
        for t in 0..data.n_periods {
            let y = data.y[(i, t)];
            if y != 0.0 && y != 1.0 {
                out.push(Violation::NonBinaryOutcome { unit: i, period: t, value: y });
            }
            for (k, xk) in data.x.iter().enumerate() {
                if !xk[(i, t)].is_finite() {
                    out.push(Violation::NonFiniteCovariate { unit: i, period: t, covariate: k });
                }
            }
        }
    }
    for i in 0..data.n_units {
        let sum: f64 = data.y.row(i).iter().sum();
        if sum == 0.0 || sum == data.n_periods as f64 {
            out.push(Violation::DegenerateUnit { unit: i, all_ones: sum > 0.0 });
        }
    }
    for t in 0..data.n_periods {
        let sum: f64 = data.y.column(t).iter().sum();
        if sum == 0.0 || sum == data.n_units as f64 {
            out.push(Violation::DegeneratePeriod { period: t, all_ones: sum > 0.0 });
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    fn write_temp(contents: &str) -> std::path::PathBuf {
        let mut path = std::env::temp_dir();
        path.push(format!("ifepanel-test-{}-{}.csv", std::process::id(), rand::random::<u64>()));
        let mut f = std::fs::File::create(&path).unwrap();
        f.write_all(contents.as_bytes()).unwrap();
        path
    }

    fn schema() -> CsvSchema {
        CsvSchema::new("firm", "year", "d", &["x1"])
    }

    #[test]
    fn loads_minimal_grid() {
        let path = write_temp("firm,year,d,x1\na,1,0,0.5\na,2,1,-0.25\nb,1,1,1.5\nb,2,0,2.0\n");
        let data = load_csv(&path, &schema()).unwrap();
        assert_eq!(data.n_units, 2);
        assert_eq!(data.n_periods, 2);
        assert_eq!(data.n_covariates(), 1);
        assert_eq!(data.y[(0, 0)], 0.0);
        assert_eq!(data.x[0][(1, 1)], 2.0);
        assert_eq!(data.unit_ids, vec!["a", "b"]);
        std::fs::remove_file(path).ok();
    }

    #[test]
    fn missing_cell_names_the_pair() {
        let path = write_temp("firm,year,d,x1\na,1,0,0.5\na,2,1,-0.25\nb,1,1,1.5\n");
        match load_csv(&path, &schema()) {
            Err(Error::MissingCell { unit, period }) => {
                assert_eq!(unit, "b");
                assert_eq!(period, "2");
            }
            other => panic!("expected MissingCell, got {other:?}"),
        }
        std::fs::remove_file(path).ok();
    }

    #[test]
    fn duplicate_cell_is_rejected() {
        let path = write_temp("firm,year,d,x1\na,1,0,0.5\na,1,1,0.5\n");
        assert!(matches!(load_csv(&path, &schema()), Err(Error::DuplicateCell { .. })));
        std::fs::remove_file(path).ok();
    }

    #[test]
    fn non_binary_outcome_is_rejected() {
        let path = write_temp("firm,year,d,x1\na,1,2,0.5\na,2,1,0.5\n");
        assert!(matches!(load_csv(&path, &schema()), Err(Error::NonBinaryOutcome { .. })));
        std::fs::remove_file(path).ok();
    }

    #[test]
    fn non_finite_covariate_is_rejected() {
        let path = write_temp("firm,year,d,x1\na,1,0,nan\na,2,1,0.5\n");
        assert!(matches!(load_csv(&path, &schema()), Err(Error::NonFiniteCovariate { .. })));
        std::fs::remove_file(path).ok();
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let path = write_temp(
            "firm,year,d,x1\na,1,0,0.123456789012345\na,2,1,-0.25\nb,1,1,1.5e-7\nb,2,0,2.0\n",
        );
        let data = load_csv(&path, &schema()).unwrap();
        let mut out = std::env::temp_dir();
        out.push(format!("ifepanel-rt-{}.csv", rand::random::<u64>()));
        write_csv(&data, &out, &schema()).unwrap();
        let reread = load_csv(&out, &schema()).unwrap();
        assert_eq!(data, reread);
        std::fs::remove_file(path).ok();
        std::fs::remove_file(out).ok();
    }

    #[test]
    fn standardize_centers_and_scales() {
        let y = DMatrix::from_row_slice(2, 2, &[0.0, 1.0, 1.0, 0.0]);
        let x = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 3.0, 4.0]);
        let data = PanelData::from_matrices(y, vec![x]).unwrap();
        let (std_data, report) = standardize(&data, &[]).unwrap();
        let cells = 4.0;
        let mean: f64 = std_data.x[0].iter().sum::<f64>() / cells;
        let var: f64 =
            std_data.x[0].iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (cells - 1.0);
        assert!(mean.abs() < 1e-12);
        assert!((var.sqrt() - 1.0).abs() < 1e-12);
        let (m, s) = report.applied[0].unwrap();
        assert!((m - 2.5).abs() < 1e-12);
        assert!((s - (5.0f64 / 3.0).sqrt()).abs() < 1e-12);
    }

    #[test]
    fn standardize_is_idempotent() {
        let y = DMatrix::from_row_slice(2, 3, &[0.0, 1.0, 1.0, 0.0, 1.0, 0.0]);
        let x = DMatrix::from_row_slice(2, 3, &[1.0, -2.0, 3.5, 4.0, 0.0, 7.25]);
        let data = PanelData::from_matrices(y, vec![x]).unwrap();
        let (once, _) = standardize(&data, &[]).unwrap();
        let (twice, _) = standardize(&once, &[]).unwrap();
        for (a, b) in once.x[0].iter().zip(twice.x[0].iter()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn constant_covariate_errors_unless_skipped() {
        let y = DMatrix::from_row_slice(2, 2, &[0.0, 1.0, 1.0, 0.0]);
        let x = DMatrix::from_element(2, 2, 1.0);
        let data = PanelData::from_matrices(y, vec![x]).unwrap();
        assert!(matches!(standardize(&data, &[]), Err(Error::ZeroVariance(0))));
        let (kept, report) = standardize(&data, &[0]).unwrap();
        assert_eq!(kept.x[0], data.x[0]);
        assert!(report.applied[0].is_none());
    }

    #[test]
    fn validate_reports_coordinates() {
        let y = DMatrix::from_row_slice(2, 2, &[0.0, 1.0, 1.0, 0.0]);
        let mut x = DMatrix::from_element(2, 2, 0.5);
        x[(1, 0)] = f64::NAN;
        let data = PanelData { n_units: 2, n_periods: 2, y, x: vec![x],
            unit_ids: vec!["a".into(), "b".into()], period_ids: vec!["1".into(), "2".into()] };
        let violations = validate(&data);
        assert!(violations
            .iter()
            .any(|v| *v == Violation::NonFiniteCovariate { unit: 1, period: 0, covariate: 0 }));
    }

    #[test]
    fn degenerate_unit_is_a_warning() {
        let y = DMatrix::from_row_slice(2, 2, &[1.0, 1.0, 1.0, 0.0]);
        let x = DMatrix::from_row_slice(2, 2, &[0.1, 0.2, 0.3, 0.4]);
        let data = PanelData::from_matrices(y, vec![x]).unwrap();
        let violations = validate(&data);
        assert!(!violations.is_empty());
        assert!(violations.iter().all(|v| v.is_warning()));
        assert!(violations
            .iter()
            .any(|v| *v == Violation::DegenerateUnit { unit: 0, all_ones: true }));
    }

    #[test]
    fn valid_panel_has_no_errors() {
        let y = DMatrix::from_row_slice(2, 2, &[0.0, 1.0, 1.0, 0.0]);
        let x = DMatrix::from_row_slice(2, 2, &[0.1, 0.2, 0.3, 0.4]);
        let data = PanelData::from_matrices(y, vec![x]).unwrap();
        assert!(validate(&data).iter().all(|v| v.is_warning()));
        assert!(validate(&data).is_empty());
    }
}
