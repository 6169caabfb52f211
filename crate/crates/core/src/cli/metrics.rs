//! Metrics records and sweep tables.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Error, Result};
use crate::eval::GzslReport;
use crate::pipeline::{StageReport, Strategy};

/// Self-training settings and the metrics before the round.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SelfTrainSummary {
    pub strategy: Strategy,
    pub temperature: f64,
    pub keep_fraction: f64,
    pub before: GzslReport,
}

/// One metrics file. mIoU values are fractions in `[0, 1]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub run_id: String,
    pub seed: u64,
    pub config_hash: String,
    pub stage_reports: Vec<StageReport>,
    pub gzsl: GzslReport,
    pub per_class_iou: BTreeMap<u16, f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub self_train: Option<SelfTrainSummary>,
}

impl MetricsRecord {
    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("metrics serialize");
        s.push('\n');
        s
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_json()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let value: Value = serde_json::from_str(&text).map_err(|source| Error::Json {
            path: path.to_path_buf(),
            source,
        })?;
        validate(&value)?;
        serde_json::from_value(value).map_err(|source| Error::Json {
            path: path.to_path_buf(),
            source,
        })
    }
}

fn schema(msg: impl Into<String>) -> Error {
    Error::Config(format!("metrics schema: {}", msg.into()))
}

fn fraction(v: &Value, what: &str) -> Result<()> {
    match v.as_f64() {
        Some(x) if (0.0..=1.0).contains(&x) => Ok(()),
        _ => Err(schema(format!("{what} must be a number in [0, 1], got {v}"))),
    }
}

/// Check a parsed metrics document against the documented schema.
pub fn validate(v: &Value) -> Result<()> {
    let obj = v.as_object().ok_or_else(|| schema("top level must be an object"))?;
    for key in ["run_id", "seed", "config_hash", "stage_reports", "gzsl", "per_class_iou"] {
        if !obj.contains_key(key) {
            return Err(schema(format!("missing key {key}")));
        }
    }
    if !obj["run_id"].as_str().is_some_and(|s| !s.is_empty()) {
        return Err(schema("run_id must be a non-empty string"));
    }
    if obj["seed"].as_u64().is_none() {
        return Err(schema("seed must be an unsigned integer"));
    }
    let hash = obj["config_hash"].as_str().unwrap_or("");
    if hash.len() != 64 || !hash.bytes().all(|b| b.is_ascii_hexdigit()) {
        return Err(schema("config_hash must be 64 hex digits"));
    }
    let reports = obj["stage_reports"]
        .as_array()
        .ok_or_else(|| schema("stage_reports must be an array"))?;
    for r in reports {
        let steps = r.get("steps").and_then(Value::as_u64).ok_or_else(|| schema("stage report without steps"))?;
        r.get("stage").and_then(Value::as_str).ok_or_else(|| schema("stage report without stage"))?;
        let series = r
            .get("loss_series")
            .and_then(Value::as_object)
            .ok_or_else(|| schema("stage report without loss_series"))?;
        for (term, values) in series {
            let n = values.as_array().map(Vec::len);
            if n != Some(steps as usize) {
                return Err(schema(format!("loss series {term} has {n:?} values for {steps} steps")));
            }
        }
    }
    let gzsl = obj["gzsl"].as_object().ok_or_else(|| schema("gzsl must be an object"))?;
    for key in ["seen", "unseen", "harmonic"] {
        fraction(gzsl.get(key).unwrap_or(&Value::Null), &format!("gzsl.{key}"))?;
    }
    let iou = obj["per_class_iou"]
        .as_object()
        .ok_or_else(|| schema("per_class_iou must be an object"))?;
    for (k, v) in iou {
        if k.parse::<u16>().is_err() {
            return Err(schema(format!("per_class_iou key {k} is not a class id")));
        }
        fraction(v, &format!("per_class_iou.{k}"))?;
    }
    Ok(())
}

/// One finished run of a sweep.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRun {
    pub value: String,
    pub seed: u64,
    pub gzsl: Option<GzslReport>,
    /// Set when the run failed; the sweep carries on.
    pub error: Option<String>,
}

/// Mean and sample standard deviation of harmonic mIoU for one value.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub value: String,
    pub runs: usize,
    pub failures: usize,
    pub seen_mean: Option<f64>,
    pub unseen_mean: Option<f64>,
    pub harmonic_mean: Option<f64>,
    pub harmonic_sd: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepTable {
    pub axis: String,
    pub seeds: Vec<u64>,
    pub rows: Vec<SweepRow>,
    pub runs: Vec<SweepRun>,
}

fn mean_sd(xs: &[f64]) -> (Option<f64>, Option<f64>) {
    if xs.is_empty() {
        return (None, None);
    }
    let n = xs.len() as f64;
    let m = xs.iter().sum::<f64>() / n;
    let sd = if xs.len() > 1 {
        Some((xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0)).sqrt())
    } else {
        Some(0.0)
    };
    (Some(m), sd)
}

impl SweepTable {
    /// Aggregate runs into one row per value, keeping the order of `values`.
    pub fn new(axis: &str, values: &[String], seeds: &[u64], runs: Vec<SweepRun>) -> Self {
        let rows = values
            .iter()
            .map(|v| {
                let mine: Vec<&SweepRun> = runs.iter().filter(|r| &r.value == v).collect();
                let ok: Vec<&GzslReport> = mine.iter().filter_map(|r| r.gzsl.as_ref()).collect();
                let pick = |f: fn(&GzslReport) -> f64| ok.iter().map(|g| f(g)).collect::<Vec<_>>();
                let (harmonic_mean, harmonic_sd) = mean_sd(&pick(|g| g.harmonic));
                SweepRow {
                    value: v.clone(),
                    runs: mine.len(),
                    failures: mine.len() - ok.len(),
                    seen_mean: mean_sd(&pick(|g| g.seen)).0,
                    unseen_mean: mean_sd(&pick(|g| g.unseen)).0,
                    harmonic_mean,
                    harmonic_sd,
                }
            })
            .collect();
        SweepTable {
            axis: axis.to_string(),
            seeds: seeds.to_vec(),
            rows,
            runs,
        }
    }

    /// Per-value summary, percentages with two decimals.
    pub fn to_csv(&self) -> String {
        let pct = |x: Option<f64>| x.map_or_else(String::new, |v| format!("{:.2}", 100.0 * v));
        let mut out = format!("{},runs,failures,seen_mean,unseen_mean,harmonic_mean,harmonic_sd\n", self.axis);
        for r in &self.rows {
            out.push_str(&format!(
                "{},{},{},{},{},{},{}\n",
                r.value,
                r.runs,
                r.failures,
                pct(r.seen_mean),
                pct(r.unseen_mean),
                pct(r.harmonic_mean),
                pct(r.harmonic_sd)
            ));
        }
        out
    }

    /// `value  harmonic mean ± sd` lines for the terminal.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for r in &self.rows {
            match (r.harmonic_mean, r.harmonic_sd) {
                (Some(m), Some(sd)) => out.push_str(&format!(
                    "{:<12} {:6.2} ± {:5.2}  ({} runs, {} failed)\n",
                    r.value,
                    100.0 * m,
                    100.0 * sd,
                    r.runs,
                    r.failures
                )),
                _ => out.push_str(&format!("{:<12} no successful runs ({} failed)\n", r.value, r.failures)),
            }
        }
        out
    }
}
