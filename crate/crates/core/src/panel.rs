//! Panel dataset: keyed firm-year observations with typed keys and numeric
//! columns that track missingness per cell.
//!
//! The dataset is kept sorted by (firm, year) and rejects duplicate firm-year
//! keys at construction, so every downstream consumer (within-firm offsets,
//! persistence statistics, fixed-effect grouping) can rely on contiguous,
//! ordered firm blocks. Missing values are represented as `None`, never as a
//! sentinel number.
//!
//! Cleaning follows the usual corporate-panel order: sector exclusion, status
//! flags, required-nonmissing filters, group-mean imputation, winsorization.

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::stats;

/// One of the four key variables attached to every row.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize)]
#[serde(rename_all = "snake_case")]
pub enum KeyVar {
    /// Firm identifier (cluster unit).
    Firm,
    /// Calendar year.
    Year,
    /// Industry classification code.
    Industry,
    /// Province / region code.
    Province,
}

/// Names of the key columns in a CSV file.
#[derive(Debug, Clone)]
pub struct PanelSchema {
    /// Header of the firm identifier column.
    pub firm: String,
    /// Header of the calendar-year column.
    pub year: String,
    /// Header of the industry code column.
    pub industry: String,
    /// Header of the province code column.
    pub province: String,
}

impl Default for PanelSchema {
    fn default() -> Self {
        PanelSchema {
            firm: "firm_id".to_string(),
            year: "year".to_string(),
            industry: "industry".to_string(),
            province: "province".to_string(),
        }
    }
}

/// A firm-year panel: four key columns plus named numeric columns.
///
/// Rows are sorted by (firm label, year); key levels are coded as dense
/// integers in sorted-label order so the coding is canonical for a given set
/// of labels regardless of input row order.
#[derive(Debug, Clone)]
pub struct PanelDataset {
    firm_labels: Vec<String>,
    industry_labels: Vec<String>,
    province_labels: Vec<String>,
    year_levels: Vec<i32>,
    firm: Vec<usize>,
    year: Vec<i32>,
    industry: Vec<usize>,
    province: Vec<usize>,
    names: Vec<String>,
    cols: Vec<Vec<Option<f64>>>,
    index: HashMap<String, usize>,
}

/// Raw per-row inputs for building a dataset before coding and sorting.
#[derive(Debug, Clone, Default)]
pub struct PanelBuilder {
    /// Firm identifier per row.
    pub firms: Vec<String>,
    /// Calendar year per row.
    pub years: Vec<i32>,
    /// Industry code per row.
    pub industries: Vec<String>,
    /// Province code per row.
    pub provinces: Vec<String>,
    /// Numeric columns: name plus one optional value per row.
    pub columns: Vec<(String, Vec<Option<f64>>)>,
}

impl PanelBuilder {
    /// Validate, code the keys, sort by (firm, year) and produce the dataset.
    pub fn build(self) -> Result<PanelDataset> {
        let n = self.firms.len();
        if n == 0 {
            return Err(Error::data("panel has no rows".to_string()));
        }
        if self.years.len() != n || self.industries.len() != n || self.provinces.len() != n {
            return Err(Error::data(format!(
                "key column lengths differ: firms {}, years {}, industries {}, provinces {}",
                self.firms.len(),
                self.years.len(),
                self.industries.len(),
                self.provinces.len()
            )));
        }
        for (name, col) in &self.columns {
            if col.len() != n {
                return Err(Error::data(format!(
                    "column `{name}` has {} values for {n} rows",
                    col.len()
                )));
            }
        }
        let mut seen = HashMap::new();
        for (name, _) in &self.columns {
            if seen.insert(name.clone(), ()).is_some() {
                return Err(Error::data(format!("duplicate column name `{name}`")));
            }
        }

        let firm_labels = sorted_levels(&self.firms);
        let industry_labels = sorted_levels(&self.industries);
        let province_labels = sorted_levels(&self.provinces);
        let mut year_levels: Vec<i32> = self.years.clone();
        year_levels.sort_unstable();
        year_levels.dedup();

        let firm_code: HashMap<&str, usize> =
            firm_labels.iter().enumerate().map(|(i, l)| (l.as_str(), i)).collect();
        let industry_code: HashMap<&str, usize> =
            industry_labels.iter().enumerate().map(|(i, l)| (l.as_str(), i)).collect();
        let province_code: HashMap<&str, usize> =
            province_labels.iter().enumerate().map(|(i, l)| (l.as_str(), i)).collect();

        let mut order: Vec<usize> = (0..n).collect();
        order.sort_by_key(|&i| (firm_code[self.firms[i].as_str()], self.years[i]));

        let mut prev: Option<(usize, i32)> = None;
        for &i in &order {
            let key = (firm_code[self.firms[i].as_str()], self.years[i]);
            if prev == Some(key) {
                return Err(Error::data(format!(
                    "duplicate firm-year key: firm `{}`, year {}",
                    self.firms[i], self.years[i]
                )));
            }
            prev = Some(key);
        }

        let firm = order.iter().map(|&i| firm_code[self.firms[i].as_str()]).collect();
        let year = order.iter().map(|&i| self.years[i]).collect();
        let industry = order.iter().map(|&i| industry_code[self.industries[i].as_str()]).collect();
        let province = order.iter().map(|&i| province_code[self.provinces[i].as_str()]).collect();

        let mut names = Vec::with_capacity(self.columns.len());
        let mut cols = Vec::with_capacity(self.columns.len());
        let mut index = HashMap::new();
        for (name, col) in self.columns {
            index.insert(name.clone(), names.len());
            names.push(name);
            cols.push(order.iter().map(|&i| col[i]).collect());
        }

        Ok(PanelDataset {
            firm_labels,
            industry_labels,
            province_labels,
            year_levels,
            firm,
            year,
            industry,
            province,
            names,
            cols,
            index,
        })
    }
}

fn sorted_levels(values: &[String]) -> Vec<String> {
    let mut levels: Vec<String> = values.to_vec();
    levels.sort();
    levels.dedup();
    levels
}

impl PanelDataset {
    /// Number of rows (firm-year observations).
    pub fn n_rows(&self) -> usize {
        self.firm.len()
    }

    /// Number of distinct firms.
    pub fn n_firms(&self) -> usize {
        self.firm_labels.len()
    }

    /// Column names in insertion order.
    pub fn column_names(&self) -> &[String] {
        &self.names
    }

    /// True when a numeric column with this name exists.
    pub fn has_column(&self, name: &str) -> bool {
        self.index.contains_key(name)
    }

    /// A numeric column by name.
    pub fn column(&self, name: &str) -> Result<&[Option<f64>]> {
        match self.index.get(name) {
            Some(&i) => Ok(&self.cols[i]),
            None => Err(Error::config(format!("unknown column `{name}`"))),
        }
    }

    /// Insert a numeric column, or replace it if the name already exists.
    pub fn set_column(&mut self, name: &str, values: Vec<Option<f64>>) -> Result<()> {
        if values.len() != self.n_rows() {
            return Err(Error::data(format!(
                "column `{name}` has {} values for {} rows",
                values.len(),
                self.n_rows()
            )));
        }
        match self.index.get(name) {
            Some(&i) => self.cols[i] = values,
            None => {
                self.index.insert(name.to_string(), self.names.len());
                self.names.push(name.to_string());
                self.cols.push(values);
            }
        }
        Ok(())
    }

    /// Insert a fully observed numeric column (convenience for derived terms).
    pub fn set_dense_column(&mut self, name: &str, values: Vec<f64>) -> Result<()> {
        self.set_column(name, values.into_iter().map(Some).collect())
    }

    /// Calendar year of each row.
    pub fn years(&self) -> &[i32] {
        &self.year
    }

    /// Distinct years present, ascending.
    pub fn year_levels(&self) -> &[i32] {
        &self.year_levels
    }

    /// Firm level code of each row (dense, in sorted-label order).
    pub fn firm_codes(&self) -> &[usize] {
        &self.firm
    }

    /// Firm label for a level code.
    pub fn firm_label(&self, code: usize) -> &str {
        &self.firm_labels[code]
    }

    /// Industry label for a level code.
    pub fn industry_label(&self, code: usize) -> &str {
        &self.industry_labels[code]
    }

    /// Province label for a level code.
    pub fn province_label(&self, code: usize) -> &str {
        &self.province_labels[code]
    }

    /// Industry level code of each row.
    pub fn industry_codes(&self) -> &[usize] {
        &self.industry
    }

    /// Province level code of each row.
    pub fn province_codes(&self) -> &[usize] {
        &self.province
    }

    /// Level codes and level count for one key variable. Years are coded by
    /// their position in the ascending list of distinct years.
    pub fn key_codes(&self, key: KeyVar) -> (Vec<usize>, usize) {
        match key {
            KeyVar::Firm => (self.firm.clone(), self.firm_labels.len()),
            KeyVar::Year => {
                let pos: HashMap<i32, usize> =
                    self.year_levels.iter().enumerate().map(|(i, &y)| (y, i)).collect();
                (self.year.iter().map(|y| pos[y]).collect(), self.year_levels.len())
            }
            KeyVar::Industry => (self.industry.clone(), self.industry_labels.len()),
            KeyVar::Province => (self.province.clone(), self.province_labels.len()),
        }
    }

    /// Row ranges of the per-firm blocks, in firm-code order.
    pub fn firm_blocks(&self) -> Vec<(usize, std::ops::Range<usize>)> {
        let mut blocks = Vec::new();
        let n = self.n_rows();
        let mut start = 0;
        for i in 1..=n {
            if i == n || self.firm[i] != self.firm[start] {
                blocks.push((self.firm[start], start..i));
                start = i;
            }
        }
        blocks
    }

    /// Row indices where every listed column is observed.
    pub fn complete_rows(&self, columns: &[&str]) -> Result<Vec<usize>> {
        let cols: Vec<&[Option<f64>]> =
            columns.iter().map(|c| self.column(c)).collect::<Result<_>>()?;
        Ok((0..self.n_rows())
            .filter(|&i| cols.iter().all(|c| c[i].is_some()))
            .collect())
    }

    /// Dense values of one column at the given rows; errors on a missing cell.
    pub fn dense_at(&self, name: &str, rows: &[usize]) -> Result<Vec<f64>> {
        let col = self.column(name)?;
        rows.iter()
            .map(|&i| {
                col[i].ok_or_else(|| {
                    Error::data(format!(
                        "column `{name}` missing at firm `{}`, year {}",
                        self.firm_labels[self.firm[i]], self.year[i]
                    ))
                })
            })
            .collect()
    }

    /// New dataset containing only the given rows (order is re-sorted by key;
    /// key levels are re-coded to the surviving labels).
    pub fn subset(&self, rows: &[usize]) -> Result<PanelDataset> {
        if rows.is_empty() {
            return Err(Error::data("row subset is empty".to_string()));
        }
        let builder = PanelBuilder {
            firms: rows.iter().map(|&i| self.firm_labels[self.firm[i]].clone()).collect(),
            years: rows.iter().map(|&i| self.year[i]).collect(),
            industries: rows
                .iter()
                .map(|&i| self.industry_labels[self.industry[i]].clone())
                .collect(),
            provinces: rows
                .iter()
                .map(|&i| self.province_labels[self.province[i]].clone())
                .collect(),
            columns: self
                .names
                .iter()
                .enumerate()
                .map(|(c, name)| (name.clone(), rows.iter().map(|&i| self.cols[c][i]).collect()))
                .collect(),
        };
        builder.build()
    }

    /// Per-firm calendar offset: value of `column` at (firm, year + offset),
    /// missing when that firm-year does not exist. Never crosses firms.
    pub fn lead_lag(&self, column: &str, offset: i32) -> Result<Vec<Option<f64>>> {
        let col = self.column(column)?;
        let mut out = vec![None; self.n_rows()];
        for (_, range) in self.firm_blocks() {
            let year_row: HashMap<i32, usize> =
                range.clone().map(|i| (self.year[i], i)).collect();
            for i in range {
                if let Some(&j) = year_row.get(&(self.year[i] + offset)) {
                    out[i] = col[j];
                }
            }
        }
        Ok(out)
    }

    /// Write the panel to CSV with keys first, then numeric columns in order.
    /// Missing cells are written as empty fields.
    pub fn write_csv(&self, path: &std::path::Path, schema: &PanelSchema) -> Result<()> {
        let mut w = csv::Writer::from_path(path)
            .map_err(|e| Error::data(format!("cannot write `{}`: {e}", path.display())))?;
        let mut header = vec![
            schema.firm.clone(),
            schema.year.clone(),
            schema.industry.clone(),
            schema.province.clone(),
        ];
        header.extend(self.names.iter().cloned());
        w.write_record(&header).map_err(|e| Error::data(format!("csv write: {e}")))?;
        for i in 0..self.n_rows() {
            let mut rec = vec![
                self.firm_labels[self.firm[i]].clone(),
                self.year[i].to_string(),
                self.industry_labels[self.industry[i]].clone(),
                self.province_labels[self.province[i]].clone(),
            ];
            for col in &self.cols {
                rec.push(match col[i] {
                    Some(v) => format!("{v}"),
                    None => String::new(),
                });
            }
            w.write_record(&rec).map_err(|e| Error::data(format!("csv write: {e}")))?;
        }
        w.flush().map_err(|e| Error::data(format!("csv write: {e}")))?;
        Ok(())
    }
}

/// Load a firm-year panel from CSV. Key columns come from `schema`; every
/// other column is numeric. Empty cells and the literal `NA` are missing;
/// anything else must parse as a number.
pub fn load_panel(path: &std::path::Path, schema: &PanelSchema) -> Result<PanelDataset> {
    let mut reader = csv::Reader::from_path(path)
        .map_err(|e| Error::data(format!("cannot open `{}`: {e}", path.display())))?;
    let headers: Vec<String> = reader
        .headers()
        .map_err(|e| Error::data(format!("csv header: {e}")))?
        .iter()
        .map(|h| h.trim().to_string())
        .collect();

    let pos = |name: &str| -> Result<usize> {
        headers.iter().position(|h| h == name).ok_or_else(|| {
            Error::data(format!("key column `{name}` not found in `{}`", path.display()))
        })
    };
    let firm_pos = pos(&schema.firm)?;
    let year_pos = pos(&schema.year)?;
    let industry_pos = pos(&schema.industry)?;
    let province_pos = pos(&schema.province)?;
    let key_pos = [firm_pos, year_pos, industry_pos, province_pos];

    let numeric: Vec<(usize, String)> = headers
        .iter()
        .enumerate()
        .filter(|(i, _)| !key_pos.contains(i))
        .map(|(i, h)| (i, h.clone()))
        .collect();

    let mut builder = PanelBuilder::default();
    for (_, name) in &numeric {
        builder.columns.push((name.clone(), Vec::new()));
    }
    for (line, record) in reader.records().enumerate() {
        let record = record.map_err(|e| Error::data(format!("csv row {}: {e}", line + 2)))?;
        let field = |i: usize| record.get(i).unwrap_or("").trim();
        builder.firms.push(field(firm_pos).to_string());
        builder.years.push(field(year_pos).parse::<i32>().map_err(|_| {
            Error::data(format!(
                "row {}: year `{}` is not an integer",
                line + 2,
                field(year_pos)
            ))
        })?);
        builder.industries.push(field(industry_pos).to_string());
        builder.provinces.push(field(province_pos).to_string());
        for (slot, (i, name)) in numeric.iter().enumerate() {
            let raw = field(*i);
            let value = if raw.is_empty() || raw == "NA" {
                None
            } else {
                Some(raw.parse::<f64>().map_err(|_| {
                    Error::data(format!(
                        "row {}: column `{name}` value `{raw}` is not numeric",
                        line + 2
                    ))
                })?)
            };
            builder.columns[slot].1.push(value);
        }
    }
    builder.build()
}

/// Cleaning configuration, applied by [`screen`] in a fixed order.
#[derive(Debug, Clone, Default)]
pub struct ScreeningConfig {
    /// Industry code prefixes to exclude (one letter covers a sector family).
    pub exclude_industries: Vec<String>,
    /// Optional status-flag column: rows with a nonzero flag are dropped.
    pub status_flag: Option<String>,
    /// Rows missing any of these columns are dropped.
    pub require_nonmissing: Vec<String>,
    /// Columns imputed with industry-year means after the row filters.
    pub impute_group_mean: Vec<String>,
    /// Columns winsorized after imputation.
    pub winsorize: Vec<String>,
    /// Winsorization limits as (lower, upper) tail probabilities.
    pub winsorize_limits: (f64, f64),
}

impl ScreeningConfig {
    /// The conventional two-sided 1% limits.
    pub fn with_default_limits(mut self) -> Self {
        self.winsorize_limits = (0.01, 0.99);
        self
    }
}

/// Row counts removed or touched by each screening stage.
#[derive(Debug, Clone, Default, serde::Serialize)]
pub struct ScreeningReport {
    /// Rows before screening.
    pub n_before: usize,
    /// Rows dropped by the sector exclusion.
    pub dropped_sector: usize,
    /// Rows dropped by the status flag.
    pub dropped_flag: usize,
    /// Rows dropped by required-nonmissing filters.
    pub dropped_required: usize,
    /// Cells filled by group-mean imputation.
    pub imputed_cells: usize,
    /// Cells clipped by winsorization.
    pub winsorized_cells: usize,
    /// Rows after screening.
    pub n_after: usize,
}

/// Apply the cleaning stages in order: sector exclusion, status flag,
/// required-nonmissing filters, group-mean imputation, winsorization.
pub fn screen(data: &PanelDataset, config: &ScreeningConfig) -> Result<(PanelDataset, ScreeningReport)> {
    let mut report = ScreeningReport { n_before: data.n_rows(), ..Default::default() };

    // Stage 1: sector exclusion by industry-code prefix.
    let keep: Vec<usize> = (0..data.n_rows())
        .filter(|&i| {
            let label = data.industry_label(data.industry_codes()[i]);
            !config.exclude_industries.iter().any(|p| label.starts_with(p.as_str()))
        })
        .collect();
    report.dropped_sector = data.n_rows() - keep.len();
    if keep.is_empty() {
        return Err(Error::data("sector exclusion removed every row".to_string()));
    }
    let mut current = data.subset(&keep)?;

    // Stage 2: status flag (nonzero drops the row; missing flags are kept).
    if let Some(flag) = &config.status_flag {
        let col = current.column(flag)?.to_vec();
        let keep: Vec<usize> = (0..current.n_rows())
            .filter(|&i| !matches!(col[i], Some(v) if v != 0.0))
            .collect();
        report.dropped_flag = current.n_rows() - keep.len();
        if keep.is_empty() {
            return Err(Error::data(format!("status flag `{flag}` removed every row")));
        }
        current = current.subset(&keep)?;
    }

    // Stage 3: required-nonmissing row filters.
    if !config.require_nonmissing.is_empty() {
        let required: Vec<&str> = config.require_nonmissing.iter().map(|s| s.as_str()).collect();
        let keep = current.complete_rows(&required)?;
        report.dropped_required = current.n_rows() - keep.len();
        if keep.is_empty() {
            return Err(Error::data("required-nonmissing filter removed every row".to_string()));
        }
        current = current.subset(&keep)?;
    }

    // Stage 4: industry-year mean imputation.
    for name in &config.impute_group_mean {
        report.imputed_cells += impute_group_mean(&mut current, name)?;
    }

    // Stage 5: winsorization.
    for name in &config.winsorize {
        report.winsorized_cells +=
            winsorize(&mut current, name, config.winsorize_limits.0, config.winsorize_limits.1)?;
    }

    report.n_after = current.n_rows();
    Ok((current, report))
}

/// Fill missing cells of `column` with the mean of nonmissing values in the
/// same industry-year cell. Cells with no nonmissing donor stay missing.
/// Returns the number of cells filled.
pub fn impute_group_mean(data: &mut PanelDataset, column: &str) -> Result<usize> {
    let col = data.column(column)?.to_vec();
    let mut sums: HashMap<(usize, i32), (f64, usize)> = HashMap::new();
    for i in 0..data.n_rows() {
        if let Some(v) = col[i] {
            let e = sums.entry((data.industry_codes()[i], data.years()[i])).or_insert((0.0, 0));
            e.0 += v;
            e.1 += 1;
        }
    }
    let mut filled = 0;
    let mut out = col;
    for i in 0..data.n_rows() {
        if out[i].is_none() {
            if let Some(&(sum, count)) = sums.get(&(data.industry_codes()[i], data.years()[i])) {
                out[i] = Some(sum / count as f64);
                filled += 1;
            }
        }
    }
    data.set_column(column, out)?;
    Ok(filled)
}

/// Two-sided winsorization of one column at tail probabilities
/// (`p_lo`, `p_hi`), computed over nonmissing values.
///
/// Clip bounds are the order statistics at positions `ceil((n-1) p_lo)` and
/// `floor((n-1) p_hi)` — the interpolation positions snapped inward — which
/// makes the operation exactly idempotent: re-winsorizing clipped data
/// recovers the same bounds bit for bit. Returns the number of cells clipped.
pub fn winsorize(data: &mut PanelDataset, column: &str, p_lo: f64, p_hi: f64) -> Result<usize> {
    if !(0.0..=1.0).contains(&p_lo) || !(0.0..=1.0).contains(&p_hi) || p_lo >= p_hi {
        return Err(Error::config(format!(
            "winsorization limits ({p_lo}, {p_hi}) must satisfy 0 <= lo < hi <= 1"
        )));
    }
    let col = data.column(column)?.to_vec();
    let mut observed: Vec<f64> = col.iter().flatten().copied().collect();
    if observed.is_empty() {
        return Err(Error::data(format!("column `{column}` has no observed values")));
    }
    observed.sort_by(|a, b| a.partial_cmp(b).expect("non-finite value in winsorize input"));
    let n = observed.len();
    let lo_pos = ((n - 1) as f64 * p_lo).ceil() as usize;
    let hi_pos = ((n - 1) as f64 * p_hi).floor() as usize;
    let (lo, hi) = (observed[lo_pos], observed[hi_pos]);

    let mut clipped = 0;
    let out: Vec<Option<f64>> = col
        .into_iter()
        .map(|cell| {
            cell.map(|v| {
                if v < lo {
                    clipped += 1;
                    lo
                } else if v > hi {
                    clipped += 1;
                    hi
                } else {
                    v
                }
            })
        })
        .collect();
    data.set_column(column, out)?;
    Ok(clipped)
}

/// Descriptive statistics of one column over its nonmissing cells.
#[derive(Debug, Clone, serde::Serialize)]
pub struct Descriptives {
    /// Column name.
    pub name: String,
    /// Observed (nonmissing) cell count.
    pub n: usize,
    /// Mean.
    pub mean: f64,
    /// Sample standard deviation.
    pub sd: f64,
    /// Minimum.
    pub min: f64,
    /// Median (interpolated).
    pub median: f64,
    /// Maximum.
    pub max: f64,
    /// Kurtosis (population convention; normal = 3).
    pub kurtosis: f64,
    /// Skewness (population convention).
    pub skewness: f64,
}

/// Compute [`Descriptives`] for one column.
pub fn describe(data: &PanelDataset, column: &str) -> Result<Descriptives> {
    let values: Vec<f64> = data.column(column)?.iter().flatten().copied().collect();
    if values.len() < 2 {
        return Err(Error::data(format!(
            "column `{column}` has {} observed values; need at least 2",
            values.len()
        )));
    }
    let min = values.iter().cloned().fold(f64::INFINITY, f64::min);
    let max = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    Ok(Descriptives {
        name: column.to_string(),
        n: values.len(),
        mean: stats::mean(&values)?,
        sd: stats::sample_sd(&values)?,
        min,
        median: stats::quantile(&values, 0.5)?,
        max,
        kurtosis: stats::kurtosis(&values)?,
        skewness: stats::skewness(&values)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn toy_panel() -> PanelDataset {
        // Two firms, three years, one firm missing a middle year.
        PanelBuilder {
            firms: ["B", "B", "A", "A", "A"].iter().map(|s| s.to_string()).collect(),
            years: vec![2019, 2021, 2019, 2020, 2021],
            industries: ["J", "J", "C1", "C1", "C1"].iter().map(|s| s.to_string()).collect(),
            provinces: ["P1", "P1", "P2", "P2", "P2"].iter().map(|s| s.to_string()).collect(),
            columns: vec![(
                "x".to_string(),
                vec![Some(10.0), Some(30.0), Some(1.0), Some(2.0), Some(3.0)],
            )],
        }
        .build()
        .unwrap()
    }

    #[test]
    fn build_sorts_by_firm_then_year_and_codes_levels_canonically() {
        let p = toy_panel();
        // Firm A sorts before firm B; rows are grouped and year-ordered.
        assert_eq!(p.firm_codes(), &[0, 0, 0, 1, 1]);
        assert_eq!(p.years(), &[2019, 2020, 2021, 2019, 2021]);
        assert_eq!(p.firm_label(0), "A");
        assert_eq!(p.firm_label(1), "B");
        let x = p.dense_at("x", &[0, 1, 2, 3, 4]).unwrap();
        assert_eq!(x, vec![1.0, 2.0, 3.0, 10.0, 30.0]);
    }

    #[test]
    fn build_rejects_duplicate_firm_year() {
        let err = PanelBuilder {
            firms: vec!["A".into(), "A".into()],
            years: vec![2020, 2020],
            industries: vec!["C".into(), "C".into()],
            provinces: vec!["P".into(), "P".into()],
            columns: vec![],
        }
        .build()
        .unwrap_err();
        assert!(matches!(err, Error::Data(ref m) if m.contains("duplicate firm-year")));
    }

    #[test]
    fn lead_and_lag_respect_firm_boundaries_and_gaps() {
        let p = toy_panel();
        let lead = p.lead_lag("x", 1).unwrap();
        // Firm A: 2019 -> 2020 value, 2020 -> 2021 value, 2021 -> none.
        // Firm B: 2019 -> none (2020 absent), 2021 -> none.
        assert_eq!(lead, vec![Some(2.0), Some(3.0), None, None, None]);
        let lag = p.lead_lag("x", -2).unwrap();
        assert_eq!(lag, vec![None, None, Some(1.0), None, Some(10.0)]);
    }

    #[test]
    fn lead_of_lag_recovers_values_on_the_overlap() {
        let p = toy_panel();
        let mut q = p.clone();
        q.set_column("lag_x", p.lead_lag("x", -1).unwrap()).unwrap();
        let roundtrip = q.lead_lag("lag_x", 1).unwrap();
        let x = q.column("x").unwrap();
        for i in 0..q.n_rows() {
            if let Some(v) = roundtrip[i] {
                assert_eq!(Some(v), x[i], "row {i}");
            }
        }
    }

    #[test]
    fn screen_applies_stages_in_order_and_counts_them() {
        let mut p = toy_panel();
        p.set_column("flag", vec![None, Some(0.0), Some(1.0), None, None]).unwrap();
        p.set_column("need", vec![Some(1.0), None, Some(1.0), Some(1.0), Some(1.0)]).unwrap();
        let config = ScreeningConfig {
            exclude_industries: vec!["J".to_string()],
            status_flag: Some("flag".to_string()),
            require_nonmissing: vec!["need".to_string()],
            impute_group_mean: vec![],
            winsorize: vec![],
            winsorize_limits: (0.01, 0.99),
        };
        let (cleaned, report) = screen(&p, &config).unwrap();
        // Industry J removes firm B (2 rows); the flag removes A/2021; the
        // required filter removes A/2020, whose `need` cell is missing.
        assert_eq!(report.dropped_sector, 2);
        assert_eq!(report.dropped_flag, 1);
        assert_eq!(report.dropped_required, 1);
        assert_eq!(cleaned.n_rows(), 1);
        assert_eq!(cleaned.years(), &[2019]);
    }

    #[test]
    fn imputation_uses_industry_year_means_and_leaves_empty_cells() {
        let mut p = PanelBuilder {
            firms: ["A", "B", "C", "D"].iter().map(|s| s.to_string()).collect(),
            years: vec![2020, 2020, 2020, 2021],
            industries: ["C1", "C1", "C1", "C9"].iter().map(|s| s.to_string()).collect(),
            provinces: vec!["P".into(); 4],
            columns: vec![(
                "x".to_string(),
                vec![Some(1.0), Some(3.0), None, None],
            )],
        }
        .build()
        .unwrap();
        let filled = impute_group_mean(&mut p, "x").unwrap();
        assert_eq!(filled, 1);
        let x = p.column("x").unwrap();
        // Industry C1 / 2020 mean is 2.0; the C9 / 2021 cell has no donor.
        assert_eq!(x[2], Some(2.0));
        assert_eq!(x[3], None);
    }

    #[test]
    fn winsorize_clips_both_tails_and_is_idempotent() {
        let values: Vec<Option<f64>> = (1..=100).map(|i| Some(i as f64)).collect();
        let mut p = PanelBuilder {
            firms: (0..100).map(|i| format!("F{i:03}")).collect(),
            years: vec![2020; 100],
            industries: vec!["C".into(); 100],
            provinces: vec!["P".into(); 100],
            columns: vec![("x".to_string(), values)],
        }
        .build()
        .unwrap();
        let clipped = winsorize(&mut p, "x", 0.05, 0.95).unwrap();
        assert!(clipped > 0);
        let first: Vec<Option<f64>> = p.column("x").unwrap().to_vec();
        let clipped_again = winsorize(&mut p, "x", 0.05, 0.95).unwrap();
        assert_eq!(clipped_again, 0, "second application must be a no-op");
        assert_eq!(first, p.column("x").unwrap());
    }

    #[test]
    fn describe_matches_hand_values() {
        let p = toy_panel();
        let d = describe(&p, "x").unwrap();
        assert_eq!(d.n, 5);
        assert_relative_eq!(d.mean, 9.2, epsilon = 1e-12);
        assert_relative_eq!(d.median, 3.0, epsilon = 1e-12);
        assert_relative_eq!(d.min, 1.0);
        assert_relative_eq!(d.max, 30.0);
    }

    #[test]
    fn csv_roundtrip_preserves_keys_values_and_missingness() {
        let mut p = toy_panel();
        p.set_column("y", vec![Some(0.5), None, Some(-1.25), Some(2.0), None]).unwrap();
        let dir = std::env::temp_dir().join("panelcausal_csv_roundtrip");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("panel.csv");
        let schema = PanelSchema::default();
        p.write_csv(&path, &schema).unwrap();
        let q = load_panel(&path, &schema).unwrap();
        assert_eq!(q.n_rows(), p.n_rows());
        assert_eq!(q.years(), p.years());
        assert_eq!(q.column("y").unwrap(), p.column("y").unwrap());
        assert_eq!(q.column("x").unwrap(), p.column("x").unwrap());
    }

    #[test]
    fn unknown_column_is_a_config_error() {
        let p = toy_panel();
        assert!(matches!(p.column("nope"), Err(Error::Config(_))));
    }
}
