//! Reporting surfaces: descriptive and correlation tables, canonical JSON,
//! and CSV/markdown rendering.
//!
//! Canonical JSON fixes every byte of a report for a given input: object
//! keys are sorted, floats print with six significant digits in a
//! platform-independent format, and non-finite values map to `null`. Two
//! runs that compute the same numbers therefore emit identical files, which
//! is the determinism contract the pipeline is tested against.

use serde::Serialize;
use serde_json::Value;

use crate::error::{Error, Result};
use crate::panel::PanelDataset;
use crate::stats;

/// One variable's summary row.
#[derive(Debug, Clone, Serialize)]
pub struct DescriptiveRow {
    /// Column name.
    pub variable: String,
    /// Non-missing observations.
    pub n: usize,
    /// Mean.
    pub mean: f64,
    /// Sample standard deviation.
    pub sd: f64,
    /// Minimum.
    pub min: f64,
    /// Median.
    pub median: f64,
    /// Maximum.
    pub max: f64,
    /// Population-moment kurtosis (normal = 3).
    pub kurtosis: f64,
    /// Population-moment skewness.
    pub skewness: f64,
}

/// Summary statistics per column, each over that column's own non-missing
/// values.
pub fn descriptive_table(data: &PanelDataset, columns: &[&str]) -> Result<Vec<DescriptiveRow>> {
    let mut rows = Vec::with_capacity(columns.len());
    for name in columns {
        let values: Vec<f64> = data.column(name)?.iter().flatten().copied().collect();
        if values.len() < 2 {
            return Err(Error::data(format!(
                "column `{name}` has {} non-missing values; need at least 2 to summarize",
                values.len()
            )));
        }
        rows.push(DescriptiveRow {
            variable: name.to_string(),
            n: values.len(),
            mean: stats::mean(&values)?,
            sd: stats::sample_sd(&values)?,
            min: values.iter().copied().fold(f64::INFINITY, f64::min),
            median: stats::quantile(&values, 0.5)?,
            max: values.iter().copied().fold(f64::NEG_INFINITY, f64::max),
            kurtosis: stats::kurtosis(&values)?,
            skewness: stats::skewness(&values)?,
        });
    }
    Ok(rows)
}

/// Pairwise correlations over the joint complete sample.
#[derive(Debug, Clone, Serialize)]
pub struct CorrelationTable {
    /// Column names, in table order.
    pub variables: Vec<String>,
    /// Correlation matrix in `variables` order.
    pub r: Vec<Vec<f64>>,
    /// Two-sided p-values (diagonal zero).
    pub p: Vec<Vec<f64>>,
    /// Rows in the joint complete sample.
    pub n: usize,
}

/// Pearson correlation matrix over rows complete in every listed column.
pub fn correlation_table(data: &PanelDataset, columns: &[&str]) -> Result<CorrelationTable> {
    if columns.len() < 2 {
        return Err(Error::config("a correlation table needs at least 2 columns".to_string()));
    }
    let rows = data.complete_rows(columns)?;
    let n = rows.len();
    let values: Vec<Vec<f64>> =
        columns.iter().map(|c| data.dense_at(c, &rows)).collect::<Result<_>>()?;
    let k = columns.len();
    let mut r = vec![vec![1.0; k]; k];
    let mut p = vec![vec![0.0; k]; k];
    for i in 0..k {
        for j in 0..i {
            let rij = stats::pearson(&values[i], &values[j])?;
            let pij = stats::pearson_p_two_sided(rij, n)?;
            r[i][j] = rij;
            r[j][i] = rij;
            p[i][j] = pij;
            p[j][i] = pij;
        }
    }
    Ok(CorrelationTable {
        variables: columns.iter().map(|c| c.to_string()).collect(),
        r,
        p,
        n,
    })
}

/// A rendered table: a name, headers, and string cells.
///
/// Stages shape their results into tables; the emitters below turn a table
/// into CSV or markdown without further formatting decisions.
#[derive(Debug, Clone, Serialize)]
pub struct Table {
    /// File-stem-friendly identifier.
    pub name: String,
    /// Column headers.
    pub headers: Vec<String>,
    /// Row-major cells.
    pub rows: Vec<Vec<String>>,
}

impl Table {
    /// Table with the given name and headers and no rows yet.
    pub fn new(name: &str, headers: &[&str]) -> Self {
        Table {
            name: name.to_string(),
            headers: headers.iter().map(|h| h.to_string()).collect(),
            rows: Vec::new(),
        }
    }

    /// Append a row; its length must match the headers.
    pub fn push_row(&mut self, row: Vec<String>) {
        debug_assert_eq!(row.len(), self.headers.len(), "row width in table `{}`", self.name);
        self.rows.push(row);
    }

    /// Render as CSV (headers first), deterministically.
    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(&self.headers).map_err(|e| Error::data(e.to_string()))?;
        for row in &self.rows {
            w.write_record(row).map_err(|e| Error::data(e.to_string()))?;
        }
        let bytes = w.into_inner().map_err(|e| Error::data(e.to_string()))?;
        String::from_utf8(bytes).map_err(|e| Error::data(e.to_string()))
    }

    /// Render as a markdown pipe table.
    pub fn to_markdown(&self) -> String {
        let escape = |s: &str| s.replace('|', "\\|");
        let mut out = String::new();
        out.push_str("| ");
        out.push_str(&self.headers.iter().map(|h| escape(h)).collect::<Vec<_>>().join(" | "));
        out.push_str(" |\n|");
        for _ in &self.headers {
            out.push_str(" --- |");
        }
        out.push('\n');
        for row in &self.rows {
            out.push_str("| ");
            out.push_str(&row.iter().map(|c| escape(c)).collect::<Vec<_>>().join(" | "));
            out.push_str(" |\n");
        }
        out
    }
}

/// A point estimate annotated with the paper-style star convention:
/// `***` below 0.01, `**` below 0.05, `*` below 0.1.
pub fn starred(estimate: f64, p: f64) -> String {
    format!("{}{}", format_significant(estimate, 6), stats::stars(p))
}

/// Format with `digits` significant digits, platform-independently.
///
/// Values whose decimal exponent lies in `[-4, digits)` print in decimal
/// notation, everything else in scientific notation; trailing zeros are
/// trimmed. Non-finite values print as `null` so the output stays valid
/// JSON.
pub fn format_significant(v: f64, digits: usize) -> String {
    assert!(digits >= 1, "need at least one significant digit");
    if !v.is_finite() {
        return "null".to_string();
    }
    if v == 0.0 {
        return "0".to_string();
    }
    // {:.*e} gives one leading digit, `digits - 1` fractional digits, and a
    // signed decimal exponent.
    let sci = format!("{:.*e}", digits - 1, v);
    let (mantissa, exp) = sci.split_once('e').expect("exponential format");
    let exp: i32 = exp.parse().expect("numeric exponent");
    let negative = mantissa.starts_with('-');
    let digits_only: String = mantissa.chars().filter(|c| c.is_ascii_digit()).collect();

    let body = if exp >= -4 && exp < digits as i32 {
        // Decimal notation: place the point after position exp + 1.
        let point = exp + 1;
        let mut s = String::new();
        if point <= 0 {
            s.push_str("0.");
            for _ in 0..-point {
                s.push('0');
            }
            s.push_str(&digits_only);
        } else if (point as usize) >= digits_only.len() {
            s.push_str(&digits_only);
            for _ in 0..(point as usize - digits_only.len()) {
                s.push('0');
            }
        } else {
            s.push_str(&digits_only[..point as usize]);
            s.push('.');
            s.push_str(&digits_only[point as usize..]);
        }
        trim_fraction(s)
    } else {
        // Scientific notation with a trimmed mantissa.
        let mut m = digits_only.clone();
        m.insert(1, '.');
        format!("{}e{}", trim_fraction(m), exp)
    };
    if negative {
        format!("-{body}")
    } else {
        body
    }
}

fn trim_fraction(s: String) -> String {
    if !s.contains('.') {
        return s;
    }
    let s = s.trim_end_matches('0');
    s.trim_end_matches('.').to_string()
}

/// Serialize to canonical JSON: sorted keys, six-significant-digit floats,
/// `null` for non-finite numbers, no insignificant whitespace.
pub fn canonical_json(value: &Value) -> String {
    let mut out = String::new();
    write_value(&mut out, value);
    out
}

/// Canonical JSON of any serializable value.
pub fn to_canonical_json<T: Serialize>(value: &T) -> Result<String> {
    let v = serde_json::to_value(value).map_err(|e| Error::data(e.to_string()))?;
    Ok(canonical_json(&v))
}

fn write_value(out: &mut String, value: &Value) {
    match value {
        Value::Null => out.push_str("null"),
        Value::Bool(b) => out.push_str(if *b { "true" } else { "false" }),
        Value::Number(n) => {
            if let Some(i) = n.as_i64() {
                out.push_str(&i.to_string());
            } else if let Some(u) = n.as_u64() {
                out.push_str(&u.to_string());
            } else {
                out.push_str(&format_significant(n.as_f64().unwrap(), 6));
            }
        }
        Value::String(s) => {
            out.push_str(&serde_json::to_string(s).expect("string serialization"));
        }
        Value::Array(items) => {
            out.push('[');
            for (i, item) in items.iter().enumerate() {
                if i > 0 {
                    out.push(',');
                }
                write_value(out, item);
            }
            out.push(']');
        }
        Value::Object(map) => {
            // serde_json's map is sorted already; sort defensively so the
            // canonical property never depends on a feature flag.
            let mut keys: Vec<&String> = map.keys().collect();
            keys.sort_unstable();
            out.push('{');
            for (i, key) in keys.iter().enumerate() {
                if i > 0 {
                    out.push(',');
                }
                out.push_str(&serde_json::to_string(key).expect("key serialization"));
                out.push(':');
                write_value(out, &map[key.as_str()]);
            }
            out.push('}');
        }
    }
}
