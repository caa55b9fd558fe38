//! Severity-cognizant input normalization.
//!
//! The mixing interval `[0, 1]` is split into `n` equal bins. For each bin we
//! draw mixed training patches with `t` uniform in `(i/n, (i+1)/n]` and record
//! the average per-patch mean and the average per-patch standard deviation.
//! A mixed patch with ratio `t` is then standardized with the statistics of bin
//! `min(floor(t * n), n - 1)`, which makes normalized inputs have zero expected
//! mean and unit expected spread for every `t`.

use std::path::Path;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::data::{ChannelFrameSet, PatchSampler, Split};
use crate::error::{Error, Result};
use crate::fingerprint;
use crate::image::{Image, Moments};
use crate::mixing::{mix, Channel, MixingRatio};
use crate::{par, rng};

pub const TABLE_VERSION: u32 = 1;
pub const DEFAULT_BINS: usize = 100;
pub const DEFAULT_SAMPLES_PER_BIN: usize = 2000;

/// Pooled pixel moments of the two channels over training patches.
///
/// `var_c0` and `var_c1` are `E[p^2] - E[p]^2` for a random pixel of a random
/// patch, and `cov` is the matching pixel covariance between the channels.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChannelStats {
    pub mean_c0: f64,
    pub mean_c1: f64,
    pub var_c0: f64,
    pub var_c1: f64,
    pub cov: f64,
}

/// Expected pooled variance of a mixed patch at ratio `t`:
/// `(1-t)^2 Var(p0) + t^2 Var(p1) + 2 t (1-t) Cov(p0, p1)`.
pub fn predict_variance(t: MixingRatio, stats: &ChannelStats) -> f64 {
    let t = t.get() as f64;
    let s = 1.0 - t;
    s * s * stats.var_c0 + t * t * stats.var_c1 + 2.0 * t * s * stats.cov
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScinTable {
    pub version: u32,
    pub n_bins: usize,
    pub mu: Vec<f32>,
    pub sigma: Vec<f32>,
    pub samples_per_bin: Vec<u64>,
    pub channel_stats: ChannelStats,
    pub patch_size_used: usize,
    pub dataset_fingerprint: String,
    pub seed: u64,
}

impl ScinTable {
    /// Bin holding ratio `t`; `t = 1` falls into the last bin.
    pub fn bin_index(&self, t: MixingRatio) -> usize {
        bin_index(t, self.n_bins)
    }

    pub fn validate(&self) -> Result<()> {
        let mut v = crate::error::Violations::new();
        v.check(self.version == TABLE_VERSION, || {
            format!("unsupported table version {}", self.version)
        });
        v.check(self.n_bins >= 1, || "n_bins must be at least 1".into());
        v.check(
            self.mu.len() == self.n_bins
                && self.sigma.len() == self.n_bins
                && self.samples_per_bin.len() == self.n_bins,
            || "mu, sigma and samples_per_bin must all have n_bins entries".into(),
        );
        for (i, (&s, &n)) in self.sigma.iter().zip(&self.samples_per_bin).enumerate() {
            v.check(n > 0, || format!("bin {i} has no samples"));
            v.check(s.is_finite() && s > 0.0, || {
                format!("bin {i} has non-positive sigma {s}")
            });
        }
        v.check(self.mu.iter().all(|m| m.is_finite()), || {
            "mu contains non-finite values".into()
        });
        v.into_result()
    }

    /// Bin statistics `(mu_i, sigma_i)` for ratio `t`.
    pub fn stats_for(&self, t: MixingRatio) -> Result<(f32, f32)> {
        if self.n_bins == 0 || self.mu.len() != self.n_bins || self.sigma.len() != self.n_bins {
            return Err(Error::Degenerate("normalization table is not built".into()));
        }
        let i = self.bin_index(t);
        let (m, s) = (self.mu[i], self.sigma[i]);
        if s.is_nan() || s <= 0.0 {
            return Err(Error::Degenerate(format!("bin {i} has sigma {s}")));
        }
        Ok((m, s))
    }

    pub fn fingerprint(&self) -> String {
        fingerprint::of_json("scsplit.scin.v1", self)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    /// Loads a table, checking its version and, when given, the fingerprint of
    /// the dataset it must have been built from.
    pub fn load(path: &Path, expected_dataset: Option<&str>) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let table: ScinTable = serde_json::from_str(&text)?;
        table.validate()?;
        if let Some(fp) = expected_dataset {
            if fp != table.dataset_fingerprint {
                return Err(Error::Fingerprint {
                    expected: fp.to_string(),
                    found: table.dataset_fingerprint.clone(),
                });
            }
        }
        Ok(table)
    }
}

pub fn bin_index(t: MixingRatio, n_bins: usize) -> usize {
    ((t.get() as f64 * n_bins as f64).floor() as usize).min(n_bins.saturating_sub(1))
}

/// Ratio drawn uniformly from the half-open bin `(i/n, (i+1)/n]`.
pub fn sample_t_in_bin(bin: usize, n_bins: usize, rng: &mut rng::Rng) -> MixingRatio {
    let u: f64 = rng.random();
    let t = (bin as f64 + 1.0 - u) / n_bins as f64;
    MixingRatio::saturating(t as f32)
}

struct BinAccumulator {
    mean_sum: f64,
    std_sum: f64,
    count: u64,
    c0: Moments,
    c1: Moments,
    cross: f64,
}

pub fn build_table(
    fs: &ChannelFrameSet,
    patch_size: usize,
    n_bins: usize,
    samples_per_bin_target: usize,
    rng_seed: u64,
) -> Result<ScinTable> {
    if n_bins == 0 {
        return Err(Error::config("n_bins must be at least 1"));
    }
    if samples_per_bin_target == 0 {
        return Err(Error::config("samples_per_bin_target must be at least 1"));
    }
    let sampler = PatchSampler::new(fs, Split::Train, patch_size)?;
    let seed = rng::derive(rng_seed, "scin.build");
    let bins = par::map_range(n_bins, |bin| {
        let mut rng = rng::stream(seed, bin as u64);
        let mut acc = BinAccumulator {
            mean_sum: 0.0,
            std_sum: 0.0,
            count: 0,
            c0: Moments::default(),
            c1: Moments::default(),
            cross: 0.0,
        };
        for _ in 0..samples_per_bin_target {
            let pair = sampler.sample(&mut rng);
            let t = sample_t_in_bin(bin, n_bins, &mut rng);
            let mixed = mix(&pair.c0, &pair.c1, t).expect("aligned crops");
            let m = Moments::of(mixed.data());
            acc.mean_sum += m.mean();
            acc.std_sum += m.std();
            acc.count += 1;
            acc.c0.push_slice(pair.c0.data());
            acc.c1.push_slice(pair.c1.data());
            acc.cross += pair
                .c0
                .data()
                .iter()
                .zip(pair.c1.data())
                .map(|(&a, &b)| a as f64 * b as f64)
                .sum::<f64>();
        }
        acc
    });

    let mut mu = Vec::with_capacity(n_bins);
    let mut sigma = Vec::with_capacity(n_bins);
    let mut samples = Vec::with_capacity(n_bins);
    let mut c0 = Moments::default();
    let mut c1 = Moments::default();
    let mut cross = 0.0;
    for (i, b) in bins.iter().enumerate() {
        let n = b.count as f64;
        let s = (b.std_sum / n) as f32;
        if s.is_nan() || s <= 0.0 {
            return Err(Error::Degenerate(format!(
                "bin {i}: mixed patches have zero spread (constant data?)"
            )));
        }
        mu.push((b.mean_sum / n) as f32);
        sigma.push(s);
        samples.push(b.count);
        c0.merge(&b.c0);
        c1.merge(&b.c1);
        cross += b.cross;
    }
    let channel_stats = ChannelStats {
        mean_c0: c0.mean(),
        mean_c1: c1.mean(),
        var_c0: c0.variance(),
        var_c1: c1.variance(),
        cov: cross / c0.count as f64 - c0.mean() * c1.mean(),
    };
    Ok(ScinTable {
        version: TABLE_VERSION,
        n_bins,
        mu,
        sigma,
        samples_per_bin: samples,
        channel_stats,
        patch_size_used: patch_size,
        dataset_fingerprint: fs.fingerprint(),
        seed: rng_seed,
    })
}

/// `(c_t - mu_i) / sigma_i` for the bin of `t`.
pub fn normalize(c_t: &Image, t: MixingRatio, table: &ScinTable) -> Result<Image> {
    let (m, s) = table.stats_for(t)?;
    Ok(affine(c_t, m as f64, s as f64, true))
}

/// Inverse of [`normalize`] for the same `t` and table.
pub fn denormalize(x: &Image, t: MixingRatio, table: &ScinTable) -> Result<Image> {
    let (m, s) = table.stats_for(t)?;
    Ok(affine(x, m as f64, s as f64, false))
}

fn affine(img: &Image, mean: f64, std: f64, forward: bool) -> Image {
    if forward {
        img.map(|v| ((v as f64 - mean) / std) as f32)
    } else {
        img.map(|v| (v as f64 * std + mean) as f32)
    }
}

/// Per-channel standardization of generator targets.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TargetChannelStats {
    pub mean_c0: f64,
    pub std_c0: f64,
    pub mean_c1: f64,
    pub std_c1: f64,
}

impl TargetChannelStats {
    /// Pooled pixel mean and standard deviation of each channel over the
    /// training frames.
    pub fn from_training(fs: &ChannelFrameSet) -> Result<Self> {
        let mut m0 = Moments::default();
        let mut m1 = Moments::default();
        for (a, b) in fs.split_frames(Split::Train) {
            m0.push_slice(a.data());
            m1.push_slice(b.data());
        }
        if m0.count == 0 {
            return Err(Error::Empty("training split is empty".into()));
        }
        let stats = Self {
            mean_c0: m0.mean(),
            std_c0: m0.std(),
            mean_c1: m1.mean(),
            std_c1: m1.std(),
        };
        stats.validate()?;
        Ok(stats)
    }

    pub fn validate(&self) -> Result<()> {
        for (ch, s) in [(0, self.std_c0), (1, self.std_c1)] {
            if !(s > 0.0 && s.is_finite()) {
                return Err(Error::Degenerate(format!(
                    "channel {ch} has zero standard deviation"
                )));
            }
        }
        Ok(())
    }

    pub fn for_channel(&self, channel: Channel) -> (f64, f64) {
        match channel {
            Channel::C0 => (self.mean_c0, self.std_c0),
            Channel::C1 => (self.mean_c1, self.std_c1),
        }
    }
}

pub fn normalize_target(c: &Image, channel: Channel, stats: &TargetChannelStats) -> Result<Image> {
    stats.validate()?;
    let (m, s) = stats.for_channel(channel);
    Ok(affine(c, m, s, true))
}

pub fn denormalize_target(
    x: &Image,
    channel: Channel,
    stats: &TargetChannelStats,
) -> Result<Image> {
    stats.validate()?;
    let (m, s) = stats.for_channel(channel);
    Ok(affine(x, m, s, false))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{synthesize_dataset, SplitCounts, SynthConfig};

    fn small_fs() -> ChannelFrameSet {
        synthesize_dataset(&SynthConfig {
            frames_per_split: SplitCounts {
                train: 6,
                val: 1,
                test: 1,
            },
            ..SynthConfig::default()
        })
        .unwrap()
    }

    fn table_of(mu: f32, sigma: f32, n: usize) -> ScinTable {
        ScinTable {
            version: TABLE_VERSION,
            n_bins: n,
            mu: vec![mu; n],
            sigma: vec![sigma; n],
            samples_per_bin: vec![1; n],
            channel_stats: ChannelStats {
                mean_c0: 0.0,
                mean_c1: 0.0,
                var_c0: 1.0,
                var_c1: 1.0,
                cov: 0.0,
            },
            patch_size_used: 8,
            dataset_fingerprint: String::new(),
            seed: 0,
        }
    }

    #[test]
    fn bin_index_edges() {
        let r = |t| MixingRatio::new(t).unwrap();
        assert_eq!(bin_index(r(0.0), 100), 0);
        assert_eq!(bin_index(r(1.0), 100), 99);
        assert_eq!(bin_index(r(0.4299), 100), 42);
        assert_eq!(bin_index(r(0.5), 100), 50);
        assert_eq!(bin_index(r(1.0), 1), 0);
    }

    #[test]
    fn sample_in_bin_stays_in_half_open_interval() {
        let mut r = rng::stream(1, 1);
        for bin in [0usize, 17, 99] {
            for _ in 0..1000 {
                let t = sample_t_in_bin(bin, 100, &mut r).get() as f64;
                assert!(t > bin as f64 / 100.0 - 1e-7 && t <= (bin + 1) as f64 / 100.0 + 1e-7);
            }
        }
    }

    #[test]
    fn normalize_constant_at_mu_is_zero() {
        let table = table_of(3.0, 2.0, 10);
        let img = Image::filled(4, 4, 3.0);
        let out = normalize(&img, MixingRatio::new(0.42).unwrap(), &table).unwrap();
        assert!(out.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn denormalize_affine_contract() {
        let table = table_of(3.0, 2.0, 10);
        let t = MixingRatio::new(0.7).unwrap();
        let zero = denormalize(&Image::zeros(2, 2), t, &table).unwrap();
        assert!(zero.data().iter().all(|&v| v == 3.0));
        let two = denormalize(&Image::filled(2, 2, 2.0), t, &table).unwrap();
        assert!(two.data().iter().all(|&v| v == 3.0 + 2.0 * 2.0));
    }

    #[test]
    fn unbuilt_table_is_rejected() {
        let mut table = table_of(0.0, 1.0, 4);
        table.n_bins = 0;
        table.mu.clear();
        table.sigma.clear();
        assert!(normalize(&Image::zeros(2, 2), MixingRatio::new(0.1).unwrap(), &table).is_err());
    }

    #[test]
    fn predict_variance_identities() {
        let perfectly_correlated = ChannelStats {
            mean_c0: 0.0,
            mean_c1: 0.0,
            var_c0: 1.0,
            var_c1: 1.0,
            cov: 1.0,
        };
        for k in 0..=10 {
            let t = MixingRatio::new(k as f32 / 10.0).unwrap();
            assert!((predict_variance(t, &perfectly_correlated) - 1.0).abs() < 1e-7);
        }
        let independent = ChannelStats {
            cov: 0.0,
            ..perfectly_correlated
        };
        let half = MixingRatio::new(0.5).unwrap();
        assert!((predict_variance(half, &independent) - 0.5).abs() < 1e-12);
    }

    #[test]
    fn table_is_deterministic_and_roundtrips_through_json() {
        let fs = small_fs();
        let a = build_table(&fs, 16, 10, 50, 3).unwrap();
        let b = build_table(&fs, 16, 10, 50, 3).unwrap();
        assert_eq!(serde_json::to_vec(&a).unwrap(), serde_json::to_vec(&b).unwrap());
        a.validate().unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("scin.json");
        a.save(&p).unwrap();
        let back = ScinTable::load(&p, Some(&fs.fingerprint())).unwrap();
        assert_eq!(back, a);
        assert_eq!(back.fingerprint(), a.fingerprint());
        assert!(matches!(
            ScinTable::load(&p, Some("deadbeef")),
            Err(Error::Fingerprint { .. })
        ));
    }

    #[test]
    fn constant_data_is_degenerate() {
        let fs = ChannelFrameSet::new(
            "flat",
            vec![Image::filled(8, 8, 1.0); 2],
            vec![Image::filled(8, 8, 2.0); 2],
            SplitCounts {
                train: 2,
                val: 0,
                test: 0,
            },
        )
        .unwrap();
        assert!(matches!(build_table(&fs, 4, 4, 5, 0), Err(Error::Degenerate(_))));
        assert!(matches!(
            TargetChannelStats::from_training(&fs),
            Err(Error::Degenerate(_))
        ));
    }

    #[test]
    fn target_roundtrip() {
        let fs = small_fs();
        let stats = TargetChannelStats::from_training(&fs).unwrap();
        let (a, b) = fs.frame(0);
        for (ch, img) in [(Channel::C0, a), (Channel::C1, b)] {
            let n = normalize_target(img, ch, &stats).unwrap();
            let back = denormalize_target(&n, ch, &stats).unwrap();
            for (p, q) in back.data().iter().zip(img.data()) {
                assert!((p - q).abs() <= 1e-6 * q.abs().max(1e-3), "{p} vs {q}");
            }
        }
    }
}
