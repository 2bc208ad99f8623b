//! Per-method comparison tables (FP metric, outlier metrics, quantized
//! metric), aggregated over seeds.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const RUN_REPORT_SCHEMA_VERSION: u32 = 1;

/// Column order of the comparison table.
pub const RUN_REPORT_COLUMNS: [&str; 11] = [
    "model",
    "method",
    "seeds",
    "fp_ppl",
    "fp_ppl_std",
    "max_inf_norm",
    "max_inf_norm_std",
    "avg_kurtosis",
    "avg_kurtosis_std",
    "q_ppl",
    "q_ppl_std",
];

/// Outcome of one (model, method, seed) run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunRecord {
    pub schema_version: u32,
    pub model_tag: String,
    /// Method with its full hyperparameters, e.g. `clipped_softmax(alpha=4, zeta=1)`.
    pub method: String,
    pub seed: u64,
    pub fp_ppl: f64,
    pub max_inf_norm: f64,
    pub avg_kurtosis: f64,
    /// Bit-width label of the quantized metric, e.g. `W8A8`.
    pub quant_label: String,
    pub q_ppl: f64,
}

/// Mean over seeds; `std` (sample, n − 1) only when there are two or more.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Stat {
    pub mean: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub std: Option<f64>,
}

impl Stat {
    pub fn of(values: &[f64]) -> Result<Stat> {
        if values.is_empty() {
            return Err(Error::Contract("statistic over zero values".into()));
        }
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let std = (values.len() >= 2)
            .then(|| (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt());
        Ok(Stat { mean, std })
    }

    fn cell(&self) -> String {
        match self.std {
            Some(s) => format!("{}±{}", fmt_num(self.mean), fmt_num(s)),
            None => fmt_num(self.mean),
        }
    }
}

fn fmt_num(v: f64) -> String {
    if v != 0.0 && (v.abs() >= 1e5 || v.abs() < 1e-2) {
        format!("{v:.3e}")
    } else {
        format!("{v:.2}")
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunRow {
    pub model_tag: String,
    pub method: String,
    pub seeds: Vec<u64>,
    pub fp_ppl: Stat,
    pub max_inf_norm: Stat,
    pub avg_kurtosis: Stat,
    pub q_ppl: Stat,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunReport {
    pub schema_version: u32,
    pub quant_label: String,
    pub rows: Vec<RunRow>,
}

impl RunReport {
    /// Groups records by (model, method) in order of first appearance.
    pub fn from_records(records: &[RunRecord]) -> Result<RunReport> {
        let first = records.first().ok_or_else(|| Error::Contract("report over zero runs".into()))?;
        for r in records {
            if r.schema_version != RUN_REPORT_SCHEMA_VERSION {
                return Err(Error::Schema { expected: RUN_REPORT_SCHEMA_VERSION, found: r.schema_version });
            }
            if r.quant_label != first.quant_label {
                return Err(Error::Contract(format!(
                    "runs mix quantization settings {} and {}",
                    first.quant_label, r.quant_label
                )));
            }
        }
        let mut groups: Vec<Vec<&RunRecord>> = Vec::new();
        for r in records {
            match groups.iter_mut().find(|g| g[0].model_tag == r.model_tag && g[0].method == r.method) {
                Some(g) => {
                    if g.iter().any(|x| x.seed == r.seed) {
                        return Err(Error::Contract(format!("duplicate seed {} for {} / {}", r.seed, r.model_tag, r.method)));
                    }
                    g.push(r);
                }
                None => groups.push(vec![r]),
            }
        }
        let rows = groups
            .iter()
            .map(|g| {
                let stat = |f: fn(&RunRecord) -> f64| Stat::of(&g.iter().map(|r| f(r)).collect::<Vec<_>>());
                Ok(RunRow {
                    model_tag: g[0].model_tag.clone(),
                    method: g[0].method.clone(),
                    seeds: g.iter().map(|r| r.seed).collect(),
                    fp_ppl: stat(|r| r.fp_ppl)?,
                    max_inf_norm: stat(|r| r.max_inf_norm)?,
                    avg_kurtosis: stat(|r| r.avg_kurtosis)?,
                    q_ppl: stat(|r| r.q_ppl)?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let report = RunReport { schema_version: RUN_REPORT_SCHEMA_VERSION, quant_label: first.quant_label.clone(), rows };
        report.validate()?;
        Ok(report)
    }

    /// Checks the table invariants: known schema, at least one row, labeled
    /// methods, non-empty distinct seeds, std present exactly when there
    /// are two or more seeds, and finite values (quantized perplexity may
    /// be `+inf` when quantization destroys the model).
    pub fn validate(&self) -> Result<()> {
        if self.schema_version != RUN_REPORT_SCHEMA_VERSION {
            return Err(Error::Schema { expected: RUN_REPORT_SCHEMA_VERSION, found: self.schema_version });
        }
        if self.rows.is_empty() {
            return Err(Error::Contract("report has no rows".into()));
        }
        if self.quant_label.is_empty() {
            return Err(Error::Contract("report has no quantization label".into()));
        }
        for row in &self.rows {
            let what = format!("{} / {}", row.model_tag, row.method);
            if row.model_tag.is_empty() || row.method.is_empty() {
                return Err(Error::Contract(format!("row {what:?} lacks a model tag or method")));
            }
            let mut seeds = row.seeds.clone();
            seeds.sort_unstable();
            seeds.dedup();
            if seeds.is_empty() || seeds.len() != row.seeds.len() {
                return Err(Error::Contract(format!("{what}: seeds must be non-empty and distinct")));
            }
            let multi = row.seeds.len() >= 2;
            for (name, s, allow_inf) in [
                ("fp_ppl", row.fp_ppl, false),
                ("max_inf_norm", row.max_inf_norm, false),
                ("avg_kurtosis", row.avg_kurtosis, false),
                ("q_ppl", row.q_ppl, true),
            ] {
                if s.std.is_some() != multi {
                    return Err(Error::Contract(format!(
                        "{what}: {name} std must be present iff there are at least two seeds"
                    )));
                }
                let mean_ok = s.mean.is_finite() || (allow_inf && s.mean == f64::INFINITY);
                // An infinite mean leaves the spread undefined.
                let std_ok = |v: f64| (v >= 0.0 && (v.is_finite() || allow_inf)) || s.mean.is_infinite();
                if !mean_ok || s.std.is_some_and(|v| !std_ok(v)) {
                    return Err(Error::Contract(format!("{what}: {name} is not a valid number")));
                }
            }
        }
        Ok(())
    }

    pub fn to_csv(&self) -> String {
        let mut out = RUN_REPORT_COLUMNS.join(",");
        out.push('\n');
        let opt = |s: Option<f64>| s.map(|v| v.to_string()).unwrap_or_default();
        for r in &self.rows {
            let seeds: Vec<String> = r.seeds.iter().map(u64::to_string).collect();
            let _ = writeln!(
                out,
                "{},{},{},{},{},{},{},{},{},{},{}",
                csv_field(&r.model_tag),
                csv_field(&r.method),
                seeds.join(";"),
                r.fp_ppl.mean,
                opt(r.fp_ppl.std),
                r.max_inf_norm.mean,
                opt(r.max_inf_norm.std),
                r.avg_kurtosis.mean,
                opt(r.avg_kurtosis.std),
                r.q_ppl.mean,
                opt(r.q_ppl.std),
            );
        }
        out
    }

    /// Fixed-width text table; `mean±std` cells when several seeds exist.
    pub fn to_table(&self) -> String {
        let header = ["Model", "Method", "FP ppl", "Max inf. norm", "Avg. kurtosis", &self.quant_label];
        let rows: Vec<[String; 6]> = self
            .rows
            .iter()
            .map(|r| {
                [
                    r.model_tag.clone(),
                    r.method.clone(),
                    r.fp_ppl.cell(),
                    r.max_inf_norm.cell(),
                    r.avg_kurtosis.cell(),
                    r.q_ppl.cell(),
                ]
            })
            .collect();
        let mut widths = header.map(|h| h.chars().count());
        for row in &rows {
            for (w, c) in widths.iter_mut().zip(row) {
                *w = (*w).max(c.chars().count());
            }
        }
        let line = |cells: &[String]| {
            let padded: Vec<String> = cells.iter().zip(&widths).map(|(c, w)| format!("{c:<w$}")).collect();
            padded.join(" | ").trim_end().to_string()
        };
        let mut out = line(&header.map(String::from));
        out.push('\n');
        out.push_str(&widths.iter().map(|w| "-".repeat(*w)).collect::<Vec<_>>().join("-+-"));
        out.push('\n');
        for row in &rows {
            out.push_str(&line(row));
            out.push('\n');
        }
        out
    }
}

/// Checks that a CSV has exactly the report columns in order.
pub fn validate_csv_header(csv: &str) -> Result<()> {
    let header = csv.lines().next().unwrap_or_default();
    let cols: Vec<&str> = header.split(',').collect();
    if cols != RUN_REPORT_COLUMNS {
        return Err(Error::Contract(format!("unexpected report columns {header:?}")));
    }
    Ok(())
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}
