//! Evaluation protocol: per-regime scores over `w`, ablation variants and the
//! assumed-vs-actual ratio sweep.
//!
//! For a weight `w` the input for scoring channel `c` is
//! `w * C_c + (1 - w) * C_other`, i.e. `t = 1 - w` for channel 0 and `t = w`
//! for channel 1.

mod metrics;
mod report;

pub use metrics::{
    ms_ssim, psnr, ssim, MsSsim, Psnr, MS_SSIM_MIN_SIDE, MS_SSIM_WEIGHTS, PSNR_CAP_DB, SSIM_K1,
    SSIM_K2, SSIM_SIGMA, SSIM_WINDOW,
};
pub use report::{
    emit_report, parse_csv, rows_to_csv, EvalReport, RatioEstimate, RegimeSummary, ReportFormat,
    ReportMetadata, ReportRow, VariantInfo, CSV_HEADER,
};

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::data::{ChannelFrameSet, Split};
use crate::error::{Error, Result, Violations};
use crate::fingerprint;
use crate::image::Image;
use crate::infer::{self, AcquisitionInput, Aggregation, InferenceConfig, UnmixResult};
use crate::mixing::{convert_w_to_t, mix, Channel};
use crate::nets::ModelBundle;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Regime {
    Dominant,
    Balanced,
    Weak,
}

impl fmt::Display for Regime {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Regime::Dominant => "dominant",
            Regime::Balanced => "balanced",
            Regime::Weak => "weak",
        })
    }
}

impl FromStr for Regime {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "dominant" => Ok(Regime::Dominant),
            "balanced" => Ok(Regime::Balanced),
            "weak" => Ok(Regime::Weak),
            _ => Err(Error::config(format!("unknown regime {s:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RegimeSpec {
    pub name: Regime,
    pub w_values: Vec<f32>,
}

impl RegimeSpec {
    pub fn dominant() -> Self {
        Self {
            name: Regime::Dominant,
            w_values: vec![0.7, 0.8, 0.9],
        }
    }

    pub fn balanced() -> Self {
        Self {
            name: Regime::Balanced,
            w_values: vec![0.4, 0.5, 0.6],
        }
    }

    pub fn weak() -> Self {
        Self {
            name: Regime::Weak,
            w_values: vec![0.1, 0.2, 0.3],
        }
    }

    pub fn defaults() -> Vec<Self> {
        vec![Self::dominant(), Self::balanced(), Self::weak()]
    }
}

pub const REGIME_NOTE: &str =
    "dominant = {0.7, 0.8, 0.9}; balanced and weak sets are symmetric defaults";

pub fn validate_regimes(regimes: &[RegimeSpec]) -> Result<()> {
    let mut v = Violations::new();
    v.check(!regimes.is_empty(), || "at least one regime is required".into());
    let mut seen: Vec<(f32, Regime)> = Vec::new();
    for r in regimes {
        v.check(!r.w_values.is_empty(), || format!("regime {} has no w values", r.name));
        for &w in &r.w_values {
            v.check((0.0..=1.0).contains(&w), || {
                format!("regime {}: w = {w} outside [0, 1]", r.name)
            });
            if let Some((_, other)) = seen.iter().find(|(x, _)| *x == w) {
                v.push(format!("w = {w} appears in both {other} and {}", r.name));
            }
            seen.push((w, r.name));
        }
    }
    v.into_result()
}

/// A named inference configuration to evaluate.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelVariant {
    pub name: String,
    pub config: InferenceConfig,
}

impl ModelVariant {
    /// Parses a variant token on top of `base`:
    /// `full`, `fixed:<t>`, `-agg`, an aggregation name, or `iter:<k>`.
    pub fn parse(token: &str, base: &InferenceConfig) -> Result<Self> {
        let token = token.trim();
        let mut config = base.clone();
        let name = match token {
            "full" | "scsplit" => "scSplit".to_string(),
            "-agg" | "per-frame" | "no-agg" => {
                config.per_frame = true;
                config.aggregation = Aggregation::Mean;
                "scSplit_-agg".to_string()
            }
            _ if token.starts_with("iter:") => {
                let k: usize = token[5..]
                    .parse()
                    .map_err(|_| Error::config(format!("bad step count in {token:?}")))?;
                config.steps = k;
                format!("scSplit_iter{k}")
            }
            _ => {
                let agg: Aggregation = token.parse()?;
                config.aggregation = agg;
                match agg {
                    Aggregation::Fixed(t) => format!("scSplit_{t}"),
                    other => format!("scSplit_{other}"),
                }
            }
        };
        config.validate()?;
        Ok(Self { name, config })
    }

    pub fn full(base: &InferenceConfig) -> Self {
        Self {
            name: "scSplit".into(),
            config: base.clone(),
        }
    }
}

fn test_frames(fs: &ChannelFrameSet) -> Result<Vec<(Image, Image)>> {
    let frames: Vec<(Image, Image)> = fs
        .split_frames(Split::Test)
        .map(|(a, b)| (a.clone(), b.clone()))
        .collect();
    if frames.is_empty() {
        return Err(Error::Empty("test split has no frames".into()));
    }
    Ok(frames)
}

/// Test frames superimposed at ratio `t` as one acquisition.
pub fn acquisition_at(frames: &[(Image, Image)], t: f32, name: &str) -> Result<AcquisitionInput> {
    let t = crate::mixing::MixingRatio::new(t)?;
    let mixed = frames
        .iter()
        .map(|(a, b)| mix(a, b, t))
        .collect::<Result<Vec<_>>>()?;
    AcquisitionInput::new(name, mixed)
}

/// Per-frame PSNR and MS-SSIM of one channel.
pub struct FrameScores {
    pub psnr: Vec<f64>,
    pub ms_ssim: Vec<f64>,
    pub capped: usize,
    pub single_scale: bool,
}

pub fn score_channel(pred: &[Image], gt: &[&Image]) -> Result<FrameScores> {
    let scores = crate::par::try_map_range(pred.len(), |i| -> Result<(Psnr, MsSsim)> {
        Ok((psnr(&pred[i], gt[i])?, ms_ssim(&pred[i], gt[i])?))
    })?;
    Ok(FrameScores {
        psnr: scores.iter().map(|s| s.0.db).collect(),
        ms_ssim: scores.iter().map(|s| s.1.value).collect(),
        capped: scores.iter().filter(|s| s.0.capped).count(),
        single_scale: scores.iter().any(|s| s.1.single_scale),
    })
}

pub fn mean_and_stderr(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    if v.len() < 2 {
        return (mean, 0.0);
    }
    let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}

pub const METRICS: [&str; 2] = ["psnr", "ms_ssim"];

/// Scores every variant on every `(w, channel)` cell of every regime.
pub fn evaluate_regimes(
    bundle: &ModelBundle,
    fs: &ChannelFrameSet,
    regimes: &[RegimeSpec],
    variants: &[ModelVariant],
    deterministic: bool,
) -> Result<EvalReport> {
    validate_regimes(regimes)?;
    if variants.is_empty() {
        return Err(Error::config("at least one model variant is required"));
    }
    let frames = test_frames(fs)?;
    let gts: [Vec<&Image>; 2] = [
        frames.iter().map(|f| &f.0).collect(),
        frames.iter().map(|f| &f.1).collect(),
    ];
    let mut rows = Vec::new();
    let mut estimates = Vec::new();
    let mut capped = 0;
    let mut single_scale = false;
    for v in variants {
        // Reconstruct only the channels that some (w, channel) cell scores.
        let mut needed: BTreeMap<u32, (f32, Vec<Channel>)> = BTreeMap::new();
        for r in regimes {
            for &w in &r.w_values {
                for c in Channel::BOTH {
                    let t = convert_w_to_t(w, c)?.get();
                    let e = needed.entry(t.to_bits()).or_insert((t, Vec::new()));
                    if !e.1.contains(&c) {
                        e.1.push(c);
                    }
                }
            }
        }
        let mut cache: BTreeMap<u32, UnmixResult> = BTreeMap::new();
        for (key, (t, chans)) in needed {
            let acq = acquisition_at(&frames, t, &format!("t{t}"))?;
            let res = match chans.as_slice() {
                [c] => infer::unmix_channel(&acq, bundle, &v.config, *c)?,
                _ => infer::unmix(&acq, bundle, &v.config)?,
            };
            estimates.push(RatioEstimate {
                model_variant: v.name.clone(),
                t_true: t,
                t_estimate: res.t_estimate,
            });
            cache.insert(key, res);
        }
        for r in regimes {
            for &w in &r.w_values {
                for c in Channel::BOTH {
                    let t = convert_w_to_t(w, c)?.get();
                    let res = &cache[&t.to_bits()];
                    let s = score_channel(res.channel(c), &gts[c.index()])?;
                    capped += s.capped;
                    single_scale |= s.single_scale;
                    for (metric, vals) in METRICS.iter().zip([&s.psnr, &s.ms_ssim]) {
                        let (value, std_error) = mean_and_stderr(vals);
                        rows.push(ReportRow {
                            model_variant: v.name.clone(),
                            regime: r.name,
                            w,
                            channel: c,
                            metric: metric.to_string(),
                            value,
                            std_error,
                            n_frames: vals.len(),
                        });
                    }
                }
            }
        }
    }
    let summaries = summarize(&rows, variants, regimes);
    estimates.sort_by(|a, b| {
        (a.model_variant.as_str(), a.t_true.to_bits()).cmp(&(b.model_variant.as_str(), b.t_true.to_bits()))
    });
    Ok(EvalReport {
        metadata: ReportMetadata {
            bundle_fingerprint: bundle.fingerprint(),
            dataset_fingerprint: fs.fingerprint(),
            scin_fingerprint: bundle.table.fingerprint(),
            run_config_hash: None,
            seed: None,
            mmse_count: variants[0].config.mmse_count,
            timestamp: (!deterministic).then(now_secs),
            variants: variants
                .iter()
                .map(|v| {
                    Ok(VariantInfo {
                        name: v.name.clone(),
                        config_hash: fingerprint::of_json("scsplit.infer-config", &v.config),
                        config: serde_json::to_value(&v.config)?,
                    })
                })
                .collect::<Result<_>>()?,
            regime_w_sets: regimes.iter().map(|r| (r.name, r.w_values.clone())).collect(),
            regime_note: REGIME_NOTE.into(),
            psnr_capped_frames: capped,
            ms_ssim_single_scale: single_scale,
            lpips: None,
        },
        rows,
        summaries,
        ratio_estimates: estimates,
    })
}

fn summarize(rows: &[ReportRow], variants: &[ModelVariant], regimes: &[RegimeSpec]) -> Vec<RegimeSummary> {
    let mut out = Vec::new();
    for v in variants {
        for r in regimes {
            for m in METRICS {
                let cells: Vec<f64> = rows
                    .iter()
                    .filter(|x| x.model_variant == v.name && x.regime == r.name && x.metric == m)
                    .map(|x| x.value)
                    .collect();
                out.push(RegimeSummary {
                    model_variant: v.name.clone(),
                    regime: r.name,
                    metric: m.into(),
                    value: cells.iter().sum::<f64>() / cells.len() as f64,
                    n_cells: cells.len(),
                });
            }
        }
    }
    out
}

fn now_secs() -> u64 {
    std::time::SystemTime::now()
        .duration_since(std::time::UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepCell {
    pub actual_w: f32,
    pub assumed_w: f32,
    /// Mean over both channels.
    pub psnr: f64,
    pub psnr_c0: f64,
    pub psnr_c1: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepTable {
    pub cells: Vec<SweepCell>,
}

impl SweepTable {
    /// Assumed `w` with the highest PSNR for an actual `w`.
    pub fn argmax(&self, actual_w: f32) -> Option<f32> {
        self.cells
            .iter()
            .filter(|c| c.actual_w == actual_w)
            .fold(None::<&SweepCell>, |best, c| match best {
                Some(b) if b.psnr >= c.psnr => Some(b),
                _ => Some(c),
            })
            .map(|c| c.assumed_w)
    }

    pub fn curve(&self, actual_w: f32) -> Vec<(f32, f64)> {
        self.cells
            .iter()
            .filter(|c| c.actual_w == actual_w)
            .map(|c| (c.assumed_w, c.psnr))
            .collect()
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("actual_w,assumed_w,psnr,psnr_c0,psnr_c1\n");
        for c in &self.cells {
            s.push_str(&format!(
                "{},{},{},{},{}\n",
                c.actual_w, c.assumed_w, c.psnr, c.psnr_c0, c.psnr_c1
            ));
        }
        s
    }
}

/// PSNR for inputs built at each actual `w` and unmixed with a fixed ratio
/// derived from each assumed `w`.
pub fn degradation_sweep(
    bundle: &ModelBundle,
    fs: &ChannelFrameSet,
    actual_w: &[f32],
    assumed_w: &[f32],
    base: &InferenceConfig,
) -> Result<SweepTable> {
    let frames = test_frames(fs)?;
    let gts: [Vec<&Image>; 2] = [
        frames.iter().map(|f| &f.0).collect(),
        frames.iter().map(|f| &f.1).collect(),
    ];
    let mut cells = Vec::with_capacity(actual_w.len() * assumed_w.len());
    for &aw in actual_w {
        let mut acqs = Vec::with_capacity(2);
        for c in Channel::BOTH {
            acqs.push(acquisition_at(&frames, convert_w_to_t(aw, c)?.get(), "sweep")?);
        }
        for &sw in assumed_w {
            let mut per = [0.0f64; 2];
            for c in Channel::BOTH {
                let cfg = InferenceConfig {
                    aggregation: Aggregation::Fixed(convert_w_to_t(sw, c)?.get()),
                    per_frame: false,
                    ..base.clone()
                };
                let res = infer::unmix_channel(&acqs[c.index()], bundle, &cfg, c)?;
                let s = score_channel(res.channel(c), &gts[c.index()])?;
                per[c.index()] = mean_and_stderr(&s.psnr).0;
            }
            cells.push(SweepCell {
                actual_w: aw,
                assumed_w: sw,
                psnr: (per[0] + per[1]) / 2.0,
                psnr_c0: per[0],
                psnr_c1: per[1],
            });
        }
    }
    Ok(SweepTable { cells })
}
