//! Acquisition-level inference: ratio estimation, aggregation, one-step or
//! iterative unmixing with MMSE averaging, and tiled full-frame assembly.

mod aggregate;
mod tiling;

pub use aggregate::{aggregate, mean, median, mode, rough_weights, unit_scale, Aggregated, Aggregation};
pub use tiling::{coverage, stitch, tile_frame, tile_offsets, Tile};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result, Violations};
use crate::image::{Image, Moments};
use crate::mixing::{self, Channel, MixingRatio, NoiseConfig};
use crate::nets::{Generator, ModelBundle, Regressor};
use crate::scin;
use crate::{par, rng};

/// Frames from one acquisition, assumed to share a single mixing ratio.
#[derive(Clone, Debug, PartialEq)]
pub struct AcquisitionInput {
    pub name: String,
    pub frames: Vec<Image>,
}

impl AcquisitionInput {
    pub fn new(name: impl Into<String>, frames: Vec<Image>) -> Result<Self> {
        let name = name.into();
        if frames.is_empty() {
            return Err(Error::Empty(format!("acquisition {name} has no frames")));
        }
        for (i, f) in frames.iter().enumerate() {
            if f.is_empty() || !f.is_finite() {
                return Err(Error::Ingest {
                    frame: format!("{name}[{i}]"),
                    reason: "frame is empty or has non-finite pixels".into(),
                });
            }
        }
        Ok(Self { name, frames })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TileSpec {
    pub size: usize,
    pub stride: usize,
}

impl TileSpec {
    pub fn overlap(&self) -> usize {
        self.size - self.stride.min(self.size)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InferenceConfig {
    pub aggregation: Aggregation,
    pub mmse_count: usize,
    pub steps: usize,
    /// Tiling; defaults to the generator patch size with half-tile stride.
    pub tile: Option<TileSpec>,
    pub noise: NoiseConfig,
    /// Use each frame's own mean estimate instead of one acquisition ratio.
    pub per_frame: bool,
    pub seed: u64,
}

impl Default for InferenceConfig {
    fn default() -> Self {
        Self {
            aggregation: Aggregation::Mean,
            mmse_count: 10,
            steps: 1,
            tile: None,
            noise: NoiseConfig::default(),
            per_frame: false,
            seed: 0,
        }
    }
}

impl InferenceConfig {
    pub fn validate(&self) -> Result<()> {
        let mut v = Violations::new();
        v.check(self.mmse_count >= 1, || "mmse_count must be at least 1".into());
        v.check(self.steps >= 1, || "steps must be at least 1".into());
        if let Some(t) = self.tile {
            v.check(t.size >= 1, || "tile.size must be positive".into());
            v.check(t.stride >= 1 && t.stride <= t.size, || {
                format!("tile.stride {} must lie in [1, {}]", t.stride, t.size)
            });
        }
        v.check(self.noise.epsilon >= 0.0, || "noise.epsilon must be nonnegative".into());
        v.into_result()
    }

    pub fn tile_for(&self, bundle: &ModelBundle) -> TileSpec {
        self.tile.unwrap_or_else(|| {
            let size = bundle.gen0.spec().patch_size;
            TileSpec {
                size,
                stride: (size / 2).max(1),
            }
        })
    }
}

/// Input moments of one network call in iterative inference.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    pub channel: Channel,
    pub step: usize,
    pub severity: f32,
    pub input_mean: f64,
    pub input_variance: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct UnmixResult {
    pub c0_hat: Vec<Image>,
    pub c1_hat: Vec<Image>,
    pub t_estimate: f32,
    pub per_frame_t: Vec<f32>,
    pub per_patch_t: Vec<f32>,
    pub acquisition_mean: f64,
    pub acquisition_std: f64,
    pub aggregation_fell_back: bool,
    pub trace: Vec<IterationRecord>,
    pub config: InferenceConfig,
}

impl UnmixResult {
    pub fn channel(&self, c: Channel) -> &[Image] {
        match c {
            Channel::C0 => &self.c0_hat,
            Channel::C1 => &self.c1_hat,
        }
    }
}

/// Standardizes every frame with the mean and standard deviation of all
/// pixels of the acquisition.
pub fn normalize_acquisition(acq: &AcquisitionInput) -> Result<(Vec<Image>, f64, f64)> {
    let (frames, m, s) = standardize(&acq.frames)?;
    Ok((frames, m, s))
}

fn standardize(frames: &[Image]) -> Result<(Vec<Image>, f64, f64)> {
    let mut m = Moments::default();
    for f in frames {
        m.push_slice(f.data());
    }
    let (mean, std) = (m.mean(), m.std());
    if !(std > 0.0 && std.is_finite()) {
        return Err(Error::Degenerate("acquisition has zero standard deviation".into()));
    }
    let out = frames
        .iter()
        .map(|f| f.map(|v| ((v as f64 - mean) / std) as f32))
        .collect();
    Ok((out, mean, std))
}

fn check_geometry(frames: &[Image], tile: TileSpec, bundle: &ModelBundle) -> Result<()> {
    let unit = bundle
        .gen0
        .spec()
        .size_unit()
        .max(bundle.gen1.spec().size_unit())
        .max(bundle.reg.spec().size_unit());
    if !tile.size.is_multiple_of(unit) {
        return Err(Error::config(format!(
            "tile size {} must be a multiple of {unit}",
            tile.size
        )));
    }
    for (i, f) in frames.iter().enumerate() {
        let (h, w) = f.shape();
        if tile.size > h.min(w) {
            return Err(Error::config(format!(
                "tile size {} exceeds frame {i} of size {h}x{w}",
                tile.size
            )));
        }
    }
    Ok(())
}

/// Runs `Reg` on every tile of every (normalized) frame. Returns per-frame
/// lists of estimates in row-major tile order.
pub fn estimate_t(frames_norm: &[Image], reg: &Regressor, tile: TileSpec) -> Result<Vec<Vec<f32>>> {
    let tiles: Vec<Vec<Tile>> = frames_norm
        .iter()
        .map(|f| tile_frame(f, tile.size, tile.stride))
        .collect::<Result<_>>()?;
    let jobs: Vec<(usize, usize)> = tiles
        .iter()
        .enumerate()
        .flat_map(|(f, ts)| (0..ts.len()).map(move |k| (f, k)))
        .collect();
    let est = par::map_slice(&jobs, |&(f, k)| reg.forward(&tiles[f][k].image));
    let mut out: Vec<Vec<f32>> = tiles.iter().map(|t| Vec::with_capacity(t.len())).collect();
    for (&(f, _), e) in jobs.iter().zip(est) {
        out[f].push(e?);
    }
    Ok(out)
}

/// Generator prediction on full normalized frames at per-frame severities,
/// MMSE-averaged over fresh input perturbations and stitched from tiles.
fn predict_frames(
    gen: &Generator,
    frames: &[Image],
    severities: &[f32],
    tile: TileSpec,
    cfg: &InferenceConfig,
    stream_key: &str,
) -> Result<Vec<Image>> {
    let tiles: Vec<Vec<Tile>> = frames
        .iter()
        .map(|f| tile_frame(f, tile.size, tile.stride))
        .collect::<Result<_>>()?;
    let jobs: Vec<(usize, usize)> = tiles
        .iter()
        .enumerate()
        .flat_map(|(f, ts)| (0..ts.len()).map(move |k| (f, k)))
        .collect();
    let base = rng::derive(cfg.seed, stream_key);
    let outs = par::map_slice(&jobs, |&(f, k)| -> Result<Image> {
        let s = severities[f];
        let x = &tiles[f][k].image;
        let noiseless = !cfg.noise.enabled || cfg.noise.epsilon == 0.0 || s == 0.0;
        let draws = if noiseless { 1 } else { cfg.mmse_count };
        let mut r = rng::stream(base, ((f as u64) << 32) | k as u64);
        let mut acc = vec![0.0f64; x.len()];
        for _ in 0..draws {
            let mut xi = x.clone();
            mixing::perturb_in_place(&mut xi, s, &cfg.noise, &mut r);
            let y = gen.forward(&xi, s)?;
            for (a, &v) in acc.iter_mut().zip(y.data()) {
                *a += v as f64;
            }
        }
        let (h, w) = x.shape();
        Image::new(h, w, acc.iter().map(|&a| (a / draws as f64) as f32).collect())
    });
    let mut per_frame: Vec<Vec<Tile>> = tiles.iter().map(|t| Vec::with_capacity(t.len())).collect();
    for (&(f, k), out) in jobs.iter().zip(outs) {
        per_frame[f].push(Tile {
            y: tiles[f][k].y,
            x: tiles[f][k].x,
            image: out?,
        });
    }
    per_frame
        .iter()
        .zip(frames)
        .map(|(ts, f)| stitch(ts, f.height(), f.width(), tile.overlap()))
        .collect()
}

fn generator(bundle: &ModelBundle, c: Channel) -> &Generator {
    match c {
        Channel::C0 => &bundle.gen0,
        Channel::C1 => &bundle.gen1,
    }
}

/// Ratio used per frame, plus the acquisition-level value and diagnostics.
struct RatioChoice {
    per_frame: Vec<f32>,
    acquisition: f32,
    per_patch: Vec<f32>,
    fell_back: bool,
}

fn choose_ratio(
    norm: &[Image],
    bundle: &ModelBundle,
    cfg: &InferenceConfig,
    tile: TileSpec,
) -> Result<RatioChoice> {
    let n = norm.len();
    if let Aggregation::Fixed(t) = cfg.aggregation {
        return Ok(RatioChoice {
            per_frame: vec![t; n],
            acquisition: t,
            per_patch: Vec::new(),
            fell_back: false,
        });
    }
    let est = estimate_t(norm, &bundle.reg, tile)?;
    let flat: Vec<f32> = est.iter().flatten().copied().collect();
    if cfg.per_frame {
        let per_frame: Vec<f32> = est.iter().map(|e| mean(e) as f32).collect();
        return Ok(RatioChoice {
            acquisition: mean(&per_frame) as f32,
            per_frame,
            per_patch: flat,
            fell_back: false,
        });
    }
    let agg = if cfg.aggregation.is_weighted() {
        let rough_cfg = InferenceConfig {
            noise: NoiseConfig::disabled(),
            mmse_count: 1,
            ..cfg.clone()
        };
        let half = vec![0.5f32; n];
        let mut maps = Vec::new();
        let mut rough = [Vec::new(), Vec::new()];
        for c in Channel::BOTH {
            let pred = predict_frames(generator(bundle, c), norm, &half, tile, &rough_cfg, "rough")?;
            for p in pred {
                let raw = scin::denormalize_target(&p, c, &bundle.target_stats)?;
                rough[c.index()].extend_from_slice(raw.data());
            }
        }
        for (f, e) in norm.iter().zip(&est) {
            let offsets = tile_offsets(f.height(), tile.size, tile.stride)?
                .into_iter()
                .flat_map(|y| {
                    tile_offsets(f.width(), tile.size, tile.stride)
                        .expect("checked above")
                        .into_iter()
                        .map(move |x| (y, x))
                });
            let tiles: Vec<Tile> = offsets
                .zip(e)
                .map(|((y, x), &t)| Tile {
                    y,
                    x,
                    image: Image::filled(tile.size, tile.size, t),
                })
                .collect();
            let map = stitch(&tiles, f.height(), f.width(), tile.overlap())?;
            maps.extend_from_slice(map.data());
        }
        let w = rough_weights(cfg.aggregation, &rough[0], &rough[1]);
        aggregate(&maps, cfg.aggregation, Some(&w))?
    } else {
        aggregate(&flat, cfg.aggregation, None)?
    };
    Ok(RatioChoice {
        per_frame: vec![agg.t; n],
        acquisition: agg.t,
        per_patch: flat,
        fell_back: agg.fell_back,
    })
}

/// Full inference: estimate and aggregate the ratio (unless fixed), then
/// unmix every frame. Uses the iterative schedule when `cfg.steps > 1`.
pub fn unmix(acq: &AcquisitionInput, bundle: &ModelBundle, cfg: &InferenceConfig) -> Result<UnmixResult> {
    cfg.validate()?;
    let tile = cfg.tile_for(bundle);
    check_geometry(&acq.frames, tile, bundle)?;
    let (norm, mean, std) = normalize_acquisition(acq)?;
    let choice = choose_ratio(&norm, bundle, cfg, tile)?;
    let mut res = reconstruct(&norm, bundle, cfg, tile, &choice.per_frame, &Channel::BOTH)?;
    res.t_estimate = choice.acquisition;
    res.per_patch_t = choice.per_patch;
    res.aggregation_fell_back = choice.fell_back;
    res.acquisition_mean = mean;
    res.acquisition_std = std;
    Ok(res)
}

/// Unmixing with caller-supplied per-frame ratios, bypassing the regressor.
pub fn unmix_with_frame_t(
    acq: &AcquisitionInput,
    bundle: &ModelBundle,
    cfg: &InferenceConfig,
    per_frame_t: &[f32],
) -> Result<UnmixResult> {
    cfg.validate()?;
    if per_frame_t.len() != acq.frames.len() {
        return Err(Error::shape(acq.frames.len(), per_frame_t.len()));
    }
    for &t in per_frame_t {
        MixingRatio::new(t)?;
    }
    let tile = cfg.tile_for(bundle);
    check_geometry(&acq.frames, tile, bundle)?;
    let (norm, mean, std) = normalize_acquisition(acq)?;
    let mut res = reconstruct(&norm, bundle, cfg, tile, per_frame_t, &Channel::BOTH)?;
    res.t_estimate = aggregate::mean(per_frame_t) as f32;
    res.acquisition_mean = mean;
    res.acquisition_std = std;
    Ok(res)
}

/// Like [`unmix`] but reconstructs only `channel`; the result's other channel
/// is left empty.
pub fn unmix_channel(
    acq: &AcquisitionInput,
    bundle: &ModelBundle,
    cfg: &InferenceConfig,
    channel: Channel,
) -> Result<UnmixResult> {
    cfg.validate()?;
    let tile = cfg.tile_for(bundle);
    check_geometry(&acq.frames, tile, bundle)?;
    let (norm, mean, std) = normalize_acquisition(acq)?;
    let choice = choose_ratio(&norm, bundle, cfg, tile)?;
    let mut res = reconstruct(&norm, bundle, cfg, tile, &choice.per_frame, &[channel])?;
    res.t_estimate = choice.acquisition;
    res.per_patch_t = choice.per_patch;
    res.aggregation_fell_back = choice.fell_back;
    res.acquisition_mean = mean;
    res.acquisition_std = std;
    Ok(res)
}

/// Iterative inference; `steps == 1` is identical to [`unmix`].
pub fn unmix_iterative(
    acq: &AcquisitionInput,
    bundle: &ModelBundle,
    cfg: &InferenceConfig,
) -> Result<UnmixResult> {
    unmix(acq, bundle, cfg)
}

/// Severities `s0 * (k - j) / k` for `j = 0..k`.
pub fn severity_schedule(s0: f32, steps: usize) -> Vec<f32> {
    (0..steps)
        .map(|j| s0 * (steps - j) as f32 / steps as f32)
        .collect()
}

fn reconstruct(
    norm: &[Image],
    bundle: &ModelBundle,
    cfg: &InferenceConfig,
    tile: TileSpec,
    per_frame_t: &[f32],
    channels: &[Channel],
) -> Result<UnmixResult> {
    let steps = cfg.steps;
    let mut trace = Vec::new();
    let mut outputs: [Vec<Image>; 2] = [Vec::new(), Vec::new()];
    for &c in channels {
        let gen = generator(bundle, c);
        let s0: Vec<f32> = per_frame_t
            .iter()
            .map(|&t| MixingRatio::saturating(t).severity_for(c))
            .collect();
        let schedules: Vec<Vec<f32>> = s0.iter().map(|&s| severity_schedule(s, steps)).collect();
        let mut x: Vec<Image> = norm.to_vec();
        for j in 0..steps {
            if j > 0 {
                x = standardize(&x)?.0;
            }
            let s: Vec<f32> = schedules.iter().map(|sch| sch[j]).collect();
            let mut m = Moments::default();
            for f in &x {
                m.push_slice(f.data());
            }
            trace.push(IterationRecord {
                channel: c,
                step: j,
                severity: aggregate::mean(&s) as f32,
                input_mean: m.mean(),
                input_variance: m.variance(),
            });
            let key = format!("mmse.c{}.s{j}", c.index());
            let pred = predict_frames(gen, &x, &s, tile, cfg, &key)?;
            x = pred
                .into_iter()
                .zip(x)
                .zip(s0.iter().zip(&s))
                .map(|((p, xi), (&s0f, &sj))| {
                    let delta = s0f / steps as f32;
                    let alpha = if sj > 0.0 { delta / sj } else { 1.0 };
                    if alpha >= 1.0 {
                        Ok(p)
                    } else {
                        p.zip_map(&xi, |a, b| alpha * a + (1.0 - alpha) * b)
                    }
                })
                .collect::<Result<_>>()?;
        }
        outputs[c.index()] = x
            .iter()
            .map(|p| scin::denormalize_target(p, c, &bundle.target_stats))
            .collect::<Result<_>>()?;
    }
    let [c0_hat, c1_hat] = outputs;
    Ok(UnmixResult {
        c0_hat,
        c1_hat,
        t_estimate: aggregate::mean(per_frame_t) as f32,
        per_frame_t: per_frame_t.to_vec(),
        per_patch_t: Vec::new(),
        acquisition_mean: 0.0,
        acquisition_std: 1.0,
        aggregation_fell_back: false,
        trace,
        config: cfg.clone(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_arithmetic() {
        let s = severity_schedule(0.8, 4);
        let want = [0.8f32, 0.6, 0.4, 0.2];
        for (a, b) in s.iter().zip(want) {
            assert!((a - b).abs() < 1e-7);
        }
        assert_eq!(severity_schedule(0.3, 1), vec![0.3]);
    }

    #[test]
    fn acquisition_normalization_is_exact_standardization() {
        let frames = vec![
            Image::from_fn(8, 8, |y, x| (y * 8 + x) as f32),
            Image::from_fn(8, 8, |y, x| (y + 2 * x) as f32 * 0.5),
        ];
        let acq = AcquisitionInput::new("a", frames).unwrap();
        let (n, _, _) = normalize_acquisition(&acq).unwrap();
        let mut m = Moments::default();
        for f in &n {
            m.push_slice(f.data());
        }
        assert!(m.mean().abs() < 1e-6);
        assert!((m.variance() - 1.0).abs() < 1e-5);
        let single = AcquisitionInput::new("s", vec![acq.frames[0].clone()]).unwrap();
        let (n1, mean, std) = normalize_acquisition(&single).unwrap();
        let f = &acq.frames[0];
        let expect = f.map(|v| ((v as f64 - f.mean()) / f.std()) as f32);
        assert_eq!(n1[0], expect);
        assert!((mean - f.mean()).abs() < 1e-12 && (std - f.std()).abs() < 1e-12);
    }

    #[test]
    fn constant_acquisition_is_rejected() {
        let acq = AcquisitionInput::new("c", vec![Image::filled(8, 8, 3.0)]).unwrap();
        assert!(normalize_acquisition(&acq).is_err());
        assert!(AcquisitionInput::new("e", vec![]).is_err());
    }
}
