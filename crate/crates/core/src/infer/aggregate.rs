use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};

/// How per-tile ratio estimates are combined into one acquisition ratio.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Aggregation {
    Mean,
    Median,
    /// Centre of the most populated 0.01-wide histogram bin.
    Mode,
    /// Weighted by the normalized sum of rough channel estimates.
    WgtSum,
    /// Weighted by the normalized product of rough channel estimates.
    WgtProd,
    /// Skip estimation and use this ratio.
    Fixed(f32),
}

impl Aggregation {
    pub fn is_weighted(self) -> bool {
        matches!(self, Aggregation::WgtSum | Aggregation::WgtProd)
    }
}

impl fmt::Display for Aggregation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Aggregation::Mean => f.write_str("mean"),
            Aggregation::Median => f.write_str("median"),
            Aggregation::Mode => f.write_str("mode"),
            Aggregation::WgtSum => f.write_str("wgt_sum"),
            Aggregation::WgtProd => f.write_str("wgt_prod"),
            Aggregation::Fixed(t) => write!(f, "fixed:{t}"),
        }
    }
}

impl FromStr for Aggregation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        Ok(match s {
            "mean" => Aggregation::Mean,
            "median" => Aggregation::Median,
            "mode" => Aggregation::Mode,
            "wgt_sum" => Aggregation::WgtSum,
            "wgt_prod" => Aggregation::WgtProd,
            _ => {
                let t = s
                    .strip_prefix("fixed:")
                    .or_else(|| s.strip_prefix("fixed(").and_then(|r| r.strip_suffix(')')))
                    .ok_or_else(|| {
                        Error::config(format!(
                            "unknown aggregation {s:?}; expected mean, median, mode, wgt_sum, wgt_prod or fixed:<t>"
                        ))
                    })?;
                let t: f32 = t
                    .parse()
                    .map_err(|_| Error::config(format!("fixed ratio {t:?} is not a number")))?;
                if !(0.0..=1.0).contains(&t) {
                    return Err(Error::config(format!("fixed ratio {t} outside [0, 1]")));
                }
                Aggregation::Fixed(t)
            }
        })
    }
}

impl Serialize for Aggregation {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for Aggregation {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Aggregated {
    pub t: f32,
    /// Set when weighted aggregation fell back to the plain mean.
    pub fell_back: bool,
}

pub fn mean(values: &[f32]) -> f64 {
    values.iter().map(|&v| v as f64).sum::<f64>() / values.len() as f64
}

pub fn median(values: &[f32]) -> f64 {
    let mut v: Vec<f32> = values.to_vec();
    v.sort_by(f32::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2] as f64
    } else {
        (v[n / 2 - 1] as f64 + v[n / 2] as f64) / 2.0
    }
}

/// Centre of the fullest 0.01-wide bin over `[0, 1]`; ties go to the lower bin.
pub fn mode(values: &[f32]) -> f64 {
    let mut hist = [0u32; 100];
    for &v in values {
        let i = ((v as f64 * 100.0).floor().max(0.0) as usize).min(99);
        hist[i] += 1;
    }
    let mut best = 0;
    for i in 1..100 {
        if hist[i] > hist[best] {
            best = i;
        }
    }
    (best as f64 + 0.5) / 100.0
}

/// Combines ratio estimates. Weighted methods take per-value weights (for
/// instance a per-pixel ratio map and the matching rough-intensity weights);
/// other methods ignore them.
pub fn aggregate(values: &[f32], method: Aggregation, weights: Option<&[f32]>) -> Result<Aggregated> {
    if let Aggregation::Fixed(t) = method {
        return Ok(Aggregated { t, fell_back: false });
    }
    if values.is_empty() {
        return Err(Error::Empty("no ratio estimates to aggregate".into()));
    }
    let plain = |t: f64| Aggregated {
        t: t.clamp(0.0, 1.0) as f32,
        fell_back: false,
    };
    Ok(match method {
        Aggregation::Mean => plain(mean(values)),
        Aggregation::Median => plain(median(values)),
        Aggregation::Mode => plain(mode(values)),
        Aggregation::WgtSum | Aggregation::WgtProd => {
            let w = weights.ok_or_else(|| {
                Error::config(format!("{method} aggregation needs weights"))
            })?;
            if w.len() != values.len() {
                return Err(Error::shape(values.len(), w.len()));
            }
            let mut num = 0.0f64;
            let mut den = 0.0f64;
            for (&v, &wi) in values.iter().zip(w) {
                num += wi as f64 * v as f64;
                den += wi as f64;
            }
            if den > 0.0 && den.is_finite() {
                plain(num / den)
            } else {
                log::warn!("{method} aggregation has all-zero weights; using the mean");
                Aggregated {
                    t: mean(values).clamp(0.0, 1.0) as f32,
                    fell_back: true,
                }
            }
        }
        Aggregation::Fixed(_) => unreachable!(),
    })
}

/// Min-max scaling to `[0, 1]`; a constant input maps to zeros.
pub fn unit_scale(values: &[f32]) -> Vec<f32> {
    let (lo, hi) = values
        .iter()
        .fold((f32::INFINITY, f32::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
    let span = hi - lo;
    if span.is_finite() && span > 0.0 {
        values.iter().map(|&v| (v - lo) / span).collect()
    } else {
        vec![0.0; values.len()]
    }
}

/// Aggregation weights from rough channel estimates.
pub fn rough_weights(method: Aggregation, c0: &[f32], c1: &[f32]) -> Vec<f32> {
    let a = unit_scale(c0);
    let b = unit_scale(c1);
    match method {
        Aggregation::WgtProd => a.iter().zip(&b).map(|(x, y)| x * y).collect(),
        _ => a.iter().zip(&b).map(|(x, y)| x + y).collect(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn spec_examples() {
        let m = aggregate(&[0.4, 0.5, 0.6], Aggregation::Mean, None).unwrap();
        assert!((m.t - 0.5).abs() < 1e-7);
        let m = aggregate(&[0.1, 0.2, 0.9], Aggregation::Median, None).unwrap();
        assert_eq!(m.t, 0.2);
        assert!(aggregate(&[], Aggregation::Mean, None).is_err());
    }

    #[test]
    fn mode_picks_fullest_bin() {
        let v = [0.305, 0.301, 0.309, 0.7, 0.71, 0.0, 1.0];
        assert!((mode(&v) - 0.305).abs() < 1e-12);
    }

    #[test]
    fn zero_weights_fall_back_to_mean() {
        let r = aggregate(&[0.2, 0.4], Aggregation::WgtSum, Some(&[0.0, 0.0])).unwrap();
        assert!(r.fell_back);
        assert!((r.t - 0.3).abs() < 1e-7);
    }

    #[test]
    fn parse_roundtrip() {
        for s in ["mean", "median", "mode", "wgt_sum", "wgt_prod", "fixed:0.5"] {
            let a: Aggregation = s.parse().unwrap();
            assert_eq!(a.to_string(), s);
        }
        assert_eq!("fixed(0.25)".parse::<Aggregation>().unwrap(), Aggregation::Fixed(0.25));
        assert!("fixed:1.5".parse::<Aggregation>().is_err());
        assert!("avg".parse::<Aggregation>().is_err());
    }
}
