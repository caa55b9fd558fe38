//! Superposition of channel pairs and the sampling of mixing ratios.

use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::Image;
use crate::rng::Rng;

/// Weight of channel 1 in a superimposed image, `t` in `[0, 1]`.
#[derive(Clone, Copy, Debug, PartialEq, PartialOrd, Serialize, Deserialize)]
#[serde(transparent)]
pub struct MixingRatio(f32);

impl MixingRatio {
    pub fn new(t: f32) -> Result<Self> {
        if (0.0..=1.0).contains(&t) {
            Ok(Self(t))
        } else {
            Err(Error::Range(format!("mixing ratio {t} outside [0, 1]")))
        }
    }

    /// Clamps into `[0, 1]`; NaN maps to 0.5.
    pub fn saturating(t: f32) -> Self {
        if t.is_nan() {
            Self(0.5)
        } else {
            Self(t.clamp(0.0, 1.0))
        }
    }

    #[inline]
    pub fn get(self) -> f32 {
        self.0
    }

    #[inline]
    pub fn complement(self) -> Self {
        Self(1.0 - self.0)
    }

    /// Severity fed to the generator for `channel`: `t` for channel 0 and
    /// `1 - t` for channel 1.
    #[inline]
    pub fn severity_for(self, channel: Channel) -> f32 {
        match channel {
            Channel::C0 => self.0,
            Channel::C1 => 1.0 - self.0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Channel {
    #[serde(rename = "0")]
    C0,
    #[serde(rename = "1")]
    C1,
}

impl Channel {
    pub const BOTH: [Channel; 2] = [Channel::C0, Channel::C1];

    pub fn index(self) -> usize {
        match self {
            Channel::C0 => 0,
            Channel::C1 => 1,
        }
    }

    pub fn from_index(i: usize) -> Result<Self> {
        match i {
            0 => Ok(Channel::C0),
            1 => Ok(Channel::C1),
            _ => Err(Error::Range(format!("channel index {i} is not 0 or 1"))),
        }
    }

    pub fn other(self) -> Self {
        match self {
            Channel::C0 => Channel::C1,
            Channel::C1 => Channel::C0,
        }
    }
}

impl std::fmt::Display for Channel {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}", self.index())
    }
}

/// Pixel-wise `(1 - t) * c0 + t * c1`.
pub fn mix(c0: &Image, c1: &Image, t: MixingRatio) -> Result<Image> {
    let t = t.get();
    let s = 1.0 - t;
    c0.zip_map(c1, |a, b| s * a + t * b)
}

/// Ratio `t` such that `mix(c0, c1, t)` weights the wanted channel by `w`.
pub fn convert_w_to_t(w: f32, wanted: Channel) -> Result<MixingRatio> {
    if !(0.0..=1.0).contains(&w) {
        return Err(Error::Range(format!("w = {w} outside [0, 1]")));
    }
    Ok(match wanted {
        Channel::C0 => MixingRatio(1.0 - w),
        Channel::C1 => MixingRatio(w),
    })
}

/// Mixture of a uniform on `[0, 1]` and a point mass:
/// `p(t) = U[0,1] / (1 + a) + a / (1 + a) * delta(atom_location)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TSamplerConfig {
    pub a: f32,
    pub atom_location: f32,
}

impl Default for TSamplerConfig {
    fn default() -> Self {
        Self {
            a: 1.0,
            atom_location: 0.5,
        }
    }
}

impl TSamplerConfig {
    pub fn uniform() -> Self {
        Self {
            a: 0.0,
            atom_location: 0.5,
        }
    }

    pub fn atom_mass(&self) -> f64 {
        self.a as f64 / (1.0 + self.a as f64)
    }

    pub fn validate(&self) -> Result<()> {
        let mut v = crate::error::Violations::new();
        v.check(self.a.is_finite() && self.a >= 0.0, || {
            format!("a = {} must be finite and nonnegative", self.a)
        });
        v.check((0.0..=1.0).contains(&self.atom_location), || {
            format!("atom_location = {} outside [0, 1]", self.atom_location)
        });
        v.into_result()
    }
}

pub fn sample_t(cfg: &TSamplerConfig, rng: &mut Rng) -> MixingRatio {
    let p_atom = cfg.atom_mass();
    if p_atom > 0.0 && rng.random_bool(p_atom.min(1.0)) {
        MixingRatio(cfg.atom_location)
    } else {
        MixingRatio(rng.random::<f32>())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NoiseConfig {
    pub epsilon: f32,
    pub enabled: bool,
}

impl Default for NoiseConfig {
    fn default() -> Self {
        Self {
            epsilon: 0.01,
            enabled: true,
        }
    }
}

impl NoiseConfig {
    pub fn disabled() -> Self {
        Self {
            epsilon: 0.01,
            enabled: false,
        }
    }

    fn is_identity(&self, t: f32) -> bool {
        !self.enabled || self.epsilon == 0.0 || t == 0.0
    }
}

/// `x + t * epsilon * n` with `n` standard normal per pixel.
///
/// Draws nothing from `rng` when the perturbation is the identity.
pub fn perturb(x_norm: &Image, t: MixingRatio, cfg: &NoiseConfig, rng: &mut Rng) -> Image {
    let mut out = x_norm.clone();
    perturb_in_place(&mut out, t.get(), cfg, rng);
    out
}

pub(crate) fn perturb_in_place(x: &mut Image, t: f32, cfg: &NoiseConfig, rng: &mut Rng) {
    if cfg.is_identity(t) {
        return;
    }
    let scale = t * cfg.epsilon;
    for v in x.data_mut() {
        let n: f32 = StandardNormal.sample(rng);
        *v += scale * n;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;

    fn random_pair(seed: u64, h: usize, w: usize) -> (Image, Image) {
        let mut r = rng::stream(seed, 0);
        let a = Image::from_fn(h, w, |_, _| r.random::<f32>() * 3.0);
        let b = Image::from_fn(h, w, |_, _| r.random::<f32>() * 2.0 - 0.5);
        (a, b)
    }

    #[test]
    fn endpoints_are_exact() {
        let (a, b) = random_pair(1, 8, 8);
        assert_eq!(mix(&a, &b, MixingRatio::new(0.0).unwrap()).unwrap(), a);
        assert_eq!(mix(&a, &b, MixingRatio::new(1.0).unwrap()).unwrap(), b);
    }

    #[test]
    fn equal_inputs_at_half() {
        let (a, _) = random_pair(2, 8, 8);
        let m = mix(&a, &a, MixingRatio::new(0.5).unwrap()).unwrap();
        assert_eq!(m, a);
    }

    #[test]
    fn matches_per_pixel_loop() {
        let (a, b) = random_pair(3, 8, 8);
        let t = 0.3f32;
        let m = mix(&a, &b, MixingRatio::new(t).unwrap()).unwrap();
        for y in 0..8 {
            for x in 0..8 {
                let want = (1.0 - t) * a.get(y, x) + t * b.get(y, x);
                assert_eq!(m.get(y, x), want);
            }
        }
    }

    #[test]
    fn shape_mismatch_is_an_error() {
        let a = Image::zeros(4, 4);
        let b = Image::zeros(4, 5);
        assert!(mix(&a, &b, MixingRatio::new(0.2).unwrap()).is_err());
    }

    #[test]
    fn ratio_bounds() {
        assert!(MixingRatio::new(-0.01).is_err());
        assert!(MixingRatio::new(1.01).is_err());
        assert!(MixingRatio::new(f32::NAN).is_err());
        assert_eq!(MixingRatio::saturating(1.7).get(), 1.0);
    }

    #[test]
    fn w_to_t_examples() {
        assert_eq!(convert_w_to_t(0.9, Channel::C0).unwrap().get(), 1.0 - 0.9);
        assert_eq!(convert_w_to_t(0.5, Channel::C0).unwrap().get(), 0.5);
        assert_eq!(convert_w_to_t(0.5, Channel::C1).unwrap().get(), 0.5);
        assert_eq!(convert_w_to_t(0.7, Channel::C1).unwrap().get(), 0.7);
        assert!(convert_w_to_t(1.2, Channel::C1).is_err());
    }

    #[test]
    fn w_to_t_reconstructs_evaluation_input() {
        let (a, b) = random_pair(4, 6, 6);
        for &w in &[0.1f32, 0.45, 0.8] {
            let t0 = convert_w_to_t(w, Channel::C0).unwrap();
            let via_mix = mix(&a, &b, t0).unwrap();
            let direct = a.zip_map(&b, |x, y| w * x + (1.0 - w) * y).unwrap();
            for (p, q) in via_mix.data().iter().zip(direct.data()) {
                assert!((p - q).abs() <= 1e-6 * (1.0 + q.abs()));
            }
            let t1 = convert_w_to_t(w, Channel::C1).unwrap();
            let via_mix = mix(&a, &b, t1).unwrap();
            let direct = b.zip_map(&a, |x, y| w * x + (1.0 - w) * y).unwrap();
            for (p, q) in via_mix.data().iter().zip(direct.data()) {
                assert!((p - q).abs() <= 1e-6 * (1.0 + q.abs()));
            }
        }
    }

    #[test]
    fn severity_per_channel() {
        let t = MixingRatio::new(0.3).unwrap();
        assert_eq!(t.severity_for(Channel::C0), 0.3);
        assert_eq!(t.severity_for(Channel::C1), 0.7);
    }

    #[test]
    fn perturb_identity_cases() {
        let (a, _) = random_pair(5, 8, 8);
        let mut r = rng::stream(0, 0);
        let zero = MixingRatio::new(0.0).unwrap();
        assert_eq!(perturb(&a, zero, &NoiseConfig::default(), &mut r), a);
        let one = MixingRatio::new(1.0).unwrap();
        assert_eq!(perturb(&a, one, &NoiseConfig::disabled(), &mut r), a);
    }

    #[test]
    fn perturb_noise_scale() {
        let x = Image::zeros(1000, 1000);
        let mut r = rng::stream(9, 0);
        let one = MixingRatio::new(1.0).unwrap();
        let out = perturb(&x, one, &NoiseConfig::default(), &mut r);
        let s = out.std();
        assert!((s - 0.01).abs() < 0.0005, "std = {s}");
    }

    #[test]
    fn atom_masses() {
        for (a, want) in [(1.0f32, 0.5f64), (3.0, 0.75)] {
            let cfg = TSamplerConfig {
                a,
                atom_location: 0.5,
            };
            let mut r = rng::stream(21, a as u64);
            let n = 100_000;
            let hits = (0..n).filter(|_| sample_t(&cfg, &mut r).get() == 0.5).count();
            let frac = hits as f64 / n as f64;
            assert!((frac - want).abs() <= 0.01, "a = {a}: {frac}");
        }
    }
}
