use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::Regime;
use crate::error::{Error, Result};
use crate::mixing::Channel;

pub const CSV_HEADER: &str = "model_variant,regime,w,channel,metric,value,std_error,n_frames";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub model_variant: String,
    pub regime: Regime,
    pub w: f32,
    pub channel: Channel,
    pub metric: String,
    pub value: f64,
    pub std_error: f64,
    pub n_frames: usize,
}

/// Regime score: arithmetic mean over the regime's `(w, channel)` cells.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RegimeSummary {
    pub model_variant: String,
    pub regime: Regime,
    pub metric: String,
    pub value: f64,
    pub n_cells: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VariantInfo {
    pub name: String,
    pub config_hash: String,
    pub config: serde_json::Value,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RatioEstimate {
    pub model_variant: String,
    pub t_true: f32,
    pub t_estimate: f32,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportMetadata {
    pub bundle_fingerprint: String,
    pub dataset_fingerprint: String,
    pub scin_fingerprint: String,
    /// Hash and master seed of the run configuration, when driven by one.
    pub run_config_hash: Option<String>,
    pub seed: Option<u64>,
    pub mmse_count: usize,
    /// Omitted in deterministic mode so repeated runs are byte-identical.
    pub timestamp: Option<u64>,
    pub variants: Vec<VariantInfo>,
    pub regime_w_sets: Vec<(Regime, Vec<f32>)>,
    pub regime_note: String,
    pub psnr_capped_frames: usize,
    pub ms_ssim_single_scale: bool,
    pub lpips: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub metadata: ReportMetadata,
    pub rows: Vec<ReportRow>,
    pub summaries: Vec<RegimeSummary>,
    pub ratio_estimates: Vec<RatioEstimate>,
}

impl EvalReport {
    pub fn summary(&self, variant: &str, regime: Regime, metric: &str) -> Option<f64> {
        self.summaries
            .iter()
            .find(|s| s.model_variant == variant && s.regime == regime && s.metric == metric)
            .map(|s| s.value)
    }

    /// Mean of a metric over both channels at one `w`.
    pub fn cell_mean(&self, variant: &str, w: f32, metric: &str) -> Option<f64> {
        let v: Vec<f64> = self
            .rows
            .iter()
            .filter(|r| r.model_variant == variant && r.w == w && r.metric == metric)
            .map(|r| r.value)
            .collect();
        (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
    }

    pub fn to_csv(&self) -> String {
        rows_to_csv(&self.rows)
    }

    pub fn to_json(&self) -> Result<String> {
        let mut s = serde_json::to_string_pretty(self)?;
        s.push('\n');
        Ok(s)
    }

    /// Long-format `variant, regime, w, metric, value` averaged over channels.
    pub fn plot_data(&self) -> String {
        let mut out = String::from("model_variant,regime,w,metric,value\n");
        let mut seen: Vec<(String, Regime, f32, String)> = Vec::new();
        for r in &self.rows {
            let key = (r.model_variant.clone(), r.regime, r.w, r.metric.clone());
            if seen.contains(&key) {
                continue;
            }
            let vals: Vec<f64> = self
                .rows
                .iter()
                .filter(|o| {
                    o.model_variant == r.model_variant
                        && o.regime == r.regime
                        && o.w == r.w
                        && o.metric == r.metric
                })
                .map(|o| o.value)
                .collect();
            let mean = vals.iter().sum::<f64>() / vals.len() as f64;
            let _ = writeln!(out, "{},{},{},{},{}", r.model_variant, r.regime, r.w, r.metric, mean);
            seen.push(key);
        }
        out
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ReportFormat {
    Csv,
    Json,
}

impl std::str::FromStr for ReportFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "csv" => Ok(ReportFormat::Csv),
            "json" => Ok(ReportFormat::Json),
            _ => Err(Error::config(format!("unknown report format {s:?}; expected csv or json"))),
        }
    }
}

pub fn rows_to_csv(rows: &[ReportRow]) -> String {
    let mut out = String::from(CSV_HEADER);
    out.push('\n');
    for r in rows {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{}",
            r.model_variant,
            r.regime,
            r.w,
            r.channel.index(),
            r.metric,
            r.value,
            r.std_error,
            r.n_frames
        );
    }
    out
}

pub fn parse_csv(text: &str) -> Result<Vec<ReportRow>> {
    let mut lines = text.lines();
    if lines.next() != Some(CSV_HEADER) {
        return Err(Error::Format("report CSV header mismatch".into()));
    }
    let bad = |n: usize, what: &str| Error::Format(format!("report CSV line {n}: bad {what}"));
    lines
        .enumerate()
        .filter(|(_, l)| !l.is_empty())
        .map(|(i, line)| {
            let n = i + 2;
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != 8 {
                return Err(bad(n, "field count"));
            }
            Ok(ReportRow {
                model_variant: f[0].to_string(),
                regime: f[1].parse().map_err(|_| bad(n, "regime"))?,
                w: f[2].parse().map_err(|_| bad(n, "w"))?,
                channel: Channel::from_index(f[3].parse().map_err(|_| bad(n, "channel"))?)?,
                metric: f[4].to_string(),
                value: f[5].parse().map_err(|_| bad(n, "value"))?,
                std_error: f[6].parse().map_err(|_| bad(n, "std_error"))?,
                n_frames: f[7].parse().map_err(|_| bad(n, "n_frames"))?,
            })
        })
        .collect()
}

/// Writes `report.csv` / `report.json` (and `plot_data.csv` when asked) into
/// `dir`, returning the paths written.
pub fn emit_report(
    report: &EvalReport,
    dir: &Path,
    formats: &[ReportFormat],
    plot_data: bool,
) -> Result<Vec<PathBuf>> {
    if report.rows.is_empty() {
        return Err(Error::Empty("report has no rows".into()));
    }
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut written = Vec::new();
    let mut put = |name: &str, text: String| -> Result<()> {
        let p = dir.join(name);
        fs::write(&p, text).map_err(|e| Error::io(&p, e))?;
        written.push(p);
        Ok(())
    };
    for f in formats {
        match f {
            ReportFormat::Csv => put("report.csv", report.to_csv())?,
            ReportFormat::Json => put("report.json", report.to_json()?)?,
        }
    }
    if plot_data {
        put("plot_data.csv", report.plot_data())?;
    }
    Ok(written)
}
