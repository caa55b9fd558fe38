//! Procedural two-channel frames with distinct structure morphologies.
//!
//! Filaments are random-walk polylines with a Gaussian cross-section, blobs are
//! soft-edged disks and rings are Gaussian annuli. Each frame draws from its
//! own RNG stream so generation order does not affect the output.

use rand::Rng as _;
use rand_distr::{Distribution, Normal, Poisson};
use serde::{Deserialize, Serialize};

use super::{ChannelFrameSet, SplitCounts};
use crate::error::{Result, Violations};
use crate::image::Image;
use crate::{par, rng};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StructureFamily {
    Filaments,
    Blobs,
    Rings,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthConfig {
    pub seed: u64,
    /// `(height, width)` in pixels.
    pub frame_size: (usize, usize),
    pub frames_per_split: SplitCounts,
    pub structure_family_c0: StructureFamily,
    pub structure_family_c1: StructureFamily,
    /// Expected structures per 1024 px² for channel 0 and channel 1.
    pub density: [f32; 2],
    /// Peak structure brightness per channel.
    pub intensity_scale: [f32; 2],
    pub background_level: f32,
    /// Relative per-frame brightness variation, uniform in `1 ± frame_jitter`.
    #[serde(default)]
    pub frame_jitter: f32,
    /// Fraction of the channel-0 signal that also appears in channel 1,
    /// producing a positive pixel covariance between channels.
    #[serde(default)]
    pub cross_talk: f32,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            seed: 7,
            frame_size: (64, 64),
            frames_per_split: SplitCounts {
                train: 24,
                val: 4,
                test: 8,
            },
            structure_family_c0: StructureFamily::Filaments,
            structure_family_c1: StructureFamily::Blobs,
            density: [6.0, 7.0],
            intensity_scale: [1.0, 1.0],
            background_level: 0.05,
            frame_jitter: 0.1,
            cross_talk: 0.0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let mut v = Violations::new();
        let (h, w) = self.frame_size;
        v.check(h >= 8 && w >= 8, || {
            format!("frame_size {h}x{w} must be at least 8x8")
        });
        v.check(self.frames_per_split.train >= 1, || {
            "frames_per_split.train must be at least 1".into()
        });
        v.check(
            self.structure_family_c0 != self.structure_family_c1,
            || "structure families of the two channels must differ".into(),
        );
        for ch in 0..2 {
            let d = self.density[ch];
            v.check(d.is_finite() && d >= 0.0, || {
                format!("density[{ch}] = {d} must be finite and nonnegative")
            });
            let s = self.intensity_scale[ch];
            v.check(s.is_finite() && s > 0.0, || {
                format!("intensity_scale[{ch}] = {s} must be positive")
            });
        }
        v.check(
            self.background_level.is_finite() && self.background_level >= 0.0,
            || format!("background_level = {} must be nonnegative", self.background_level),
        );
        v.check((0.0..1.0).contains(&self.frame_jitter), || {
            format!("frame_jitter = {} must lie in [0, 1)", self.frame_jitter)
        });
        v.check((0.0..=1.0).contains(&self.cross_talk), || {
            format!("cross_talk = {} must lie in [0, 1]", self.cross_talk)
        });
        v.into_result()
    }
}

pub fn synthesize_dataset(cfg: &SynthConfig) -> Result<ChannelFrameSet> {
    cfg.validate()?;
    let n = cfg.frames_per_split.total();
    let pairs = par::map_range(n, |i| synth_frame(cfg, i));
    let (c0, c1) = pairs.into_iter().unzip();
    ChannelFrameSet::new(
        format!("synth-{}", cfg.seed),
        c0,
        c1,
        cfg.frames_per_split,
    )
}

fn synth_frame(cfg: &SynthConfig, index: usize) -> (Image, Image) {
    let mut rng = rng::stream(cfg.seed, index as u64);
    let (h, w) = cfg.frame_size;
    let area_units = (h * w) as f64 / 1024.0;
    let families = [cfg.structure_family_c0, cfg.structure_family_c1];
    let mut signals = [vec![0.0f32; h * w], vec![0.0f32; h * w]];
    for ch in 0..2 {
        let lambda = cfg.density[ch] as f64 * area_units;
        let count = if lambda > 0.0 {
            Poisson::new(lambda).map(|p| p.sample(&mut rng) as usize).unwrap_or(0)
        } else {
            0
        };
        let jitter = 1.0 + cfg.frame_jitter * (2.0 * rng.random::<f32>() - 1.0);
        let canvas = &mut signals[ch];
        for _ in 0..count {
            let amp = cfg.intensity_scale[ch] * jitter * rng.random_range(0.6f32..1.0);
            match families[ch] {
                StructureFamily::Filaments => draw_filament(canvas, h, w, amp, &mut rng),
                StructureFamily::Blobs => draw_blob(canvas, h, w, amp, &mut rng),
                StructureFamily::Rings => draw_ring(canvas, h, w, amp, &mut rng),
            }
        }
    }
    if cfg.cross_talk > 0.0 {
        let (s0, s1) = signals.split_at_mut(1);
        for (b, &a) in s1[0].iter_mut().zip(&s0[0]) {
            *b += cfg.cross_talk * a;
        }
    }
    let [s0, s1] = signals;
    let to_image = |s: Vec<f32>| {
        Image::new(h, w, s.into_iter().map(|v| v + cfg.background_level).collect())
            .expect("canvas matches frame size")
    };
    (to_image(s0), to_image(s1))
}

/// Adds `amp * profile(dist)` over the square of half-width `reach` around `(cy, cx)`.
fn splat(
    canvas: &mut [f32],
    h: usize,
    w: usize,
    cy: f32,
    cx: f32,
    reach: f32,
    amp: f32,
    profile: impl Fn(f32) -> f32,
) {
    let y0 = (cy - reach).floor().max(0.0) as isize;
    let y1 = (cy + reach).ceil().min(h as f32 - 1.0) as isize;
    let x0 = (cx - reach).floor().max(0.0) as isize;
    let x1 = (cx + reach).ceil().min(w as f32 - 1.0) as isize;
    for y in y0..=y1 {
        for x in x0..=x1 {
            let dy = y as f32 - cy;
            let dx = x as f32 - cx;
            let d = (dy * dy + dx * dx).sqrt();
            canvas[y as usize * w + x as usize] += amp * profile(d);
        }
    }
}

fn draw_filament(canvas: &mut [f32], h: usize, w: usize, amp: f32, rng: &mut rng::Rng) {
    const SIGMA: f32 = 0.9;
    const STEP: f32 = 0.5;
    // Peak of a line of unit-weight Gaussian splats spaced STEP apart.
    let line_gain = (2.0 * std::f32::consts::PI).sqrt() * SIGMA / STEP;
    let margin = 8.0;
    let mut y = rng.random_range(-margin..h as f32 + margin);
    let mut x = rng.random_range(-margin..w as f32 + margin);
    let mut heading = rng.random_range(0.0..std::f32::consts::TAU);
    let length = rng.random_range(0.5..1.0) * h.max(w) as f32;
    let bend = Normal::new(0.0f32, 0.06).expect("valid sigma");
    let steps = (length / STEP) as usize;
    for _ in 0..steps {
        splat(canvas, h, w, y, x, 3.0 * SIGMA, amp / line_gain, |d| {
            (-d * d / (2.0 * SIGMA * SIGMA)).exp()
        });
        heading += bend.sample(rng);
        y += STEP * heading.sin();
        x += STEP * heading.cos();
    }
}

fn draw_blob(canvas: &mut [f32], h: usize, w: usize, amp: f32, rng: &mut rng::Rng) {
    let r = rng.random_range(2.5f32..6.0);
    let cy = rng.random_range(-r..h as f32 + r);
    let cx = rng.random_range(-r..w as f32 + r);
    splat(canvas, h, w, cy, cx, r + 3.0, amp, |d| {
        1.0 / (1.0 + ((d - r) / 0.7).exp())
    });
}

fn draw_ring(canvas: &mut [f32], h: usize, w: usize, amp: f32, rng: &mut rng::Rng) {
    const WIDTH: f32 = 0.9;
    let r = rng.random_range(4.0f32..8.0);
    let cy = rng.random_range(-r..h as f32 + r);
    let cx = rng.random_range(-r..w as f32 + r);
    splat(canvas, h, w, cy, cx, r + 3.0 * WIDTH, amp, |d| {
        (-(d - r) * (d - r) / (2.0 * WIDTH * WIDTH)).exp()
    });
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg() -> SynthConfig {
        SynthConfig {
            seed: 7,
            frame_size: (64, 64),
            frames_per_split: SplitCounts {
                train: 3,
                val: 1,
                test: 1,
            },
            ..SynthConfig::default()
        }
    }

    #[test]
    fn shapes_and_nonnegativity() {
        let fs = synthesize_dataset(&cfg()).unwrap();
        assert_eq!(fs.len(), 5);
        for (a, b) in fs.frames_c0().iter().zip(fs.frames_c1()) {
            assert_eq!(a.shape(), (64, 64));
            assert_eq!(b.shape(), (64, 64));
            assert!(a.data().iter().chain(b.data()).all(|&v| v >= 0.0 && v.is_finite()));
        }
    }

    #[test]
    fn deterministic_in_seed() {
        let a = synthesize_dataset(&cfg()).unwrap();
        let b = synthesize_dataset(&cfg()).unwrap();
        assert_eq!(a, b);
        let c = synthesize_dataset(&SynthConfig { seed: 8, ..cfg() }).unwrap();
        assert_ne!(a.frames_c0(), c.frames_c0());
    }

    #[test]
    fn zero_density_gives_flat_background() {
        let c = SynthConfig {
            density: [0.0, 5.0],
            background_level: 0.25,
            ..cfg()
        };
        let fs = synthesize_dataset(&c).unwrap();
        for f in fs.frames_c0() {
            assert!(f.data().iter().all(|&v| v == 0.25));
        }
        assert!(fs.frames_c1().iter().any(|f| f.min_max().1 > 0.25));
    }

    #[test]
    fn validation_lists_every_violation() {
        let c = SynthConfig {
            frame_size: (4, 64),
            structure_family_c1: StructureFamily::Filaments,
            density: [-1.0, 1.0],
            ..cfg()
        };
        match c.validate() {
            Err(crate::Error::Config(msgs)) => assert_eq!(msgs.len(), 3, "{msgs:?}"),
            other => panic!("expected config error, got {other:?}"),
        }
    }

    #[test]
    fn cross_talk_correlates_channels() {
        let c = SynthConfig {
            cross_talk: 0.6,
            ..cfg()
        };
        let fs = synthesize_dataset(&c).unwrap();
        let (a, b) = fs.frame(0);
        let (ma, mb) = (a.mean(), b.mean());
        let cov: f64 = a
            .data()
            .iter()
            .zip(b.data())
            .map(|(&x, &y)| (x as f64 - ma) * (y as f64 - mb))
            .sum::<f64>()
            / a.len() as f64;
        assert!(cov > 0.0);
    }
}
