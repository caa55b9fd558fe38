use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::Image;

/// Reported value for a perfect reconstruction.
pub const PSNR_CAP_DB: f64 = 100.0;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Psnr {
    pub db: f64,
    /// The error was zero and `db` holds [`PSNR_CAP_DB`].
    pub capped: bool,
}

/// `10 log10(range^2 / MSE)` with `range = max(gt) - min(gt)`.
pub fn psnr(pred: &Image, gt: &Image) -> Result<Psnr> {
    pred.ensure_same_shape(gt)?;
    let (lo, hi) = gt.min_max();
    let range = hi as f64 - lo as f64;
    if range.is_nan() || range <= 0.0 {
        return Err(Error::Degenerate("ground truth frame is constant".into()));
    }
    let mse = pred
        .data()
        .iter()
        .zip(gt.data())
        .map(|(&a, &b)| {
            let d = a as f64 - b as f64;
            d * d
        })
        .sum::<f64>()
        / gt.len() as f64;
    if mse == 0.0 {
        return Ok(Psnr {
            db: PSNR_CAP_DB,
            capped: true,
        });
    }
    let db = 10.0 * (range * range / mse).log10();
    Ok(Psnr {
        db: db.min(PSNR_CAP_DB),
        capped: db >= PSNR_CAP_DB,
    })
}

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_K1: f64 = 0.01;
pub const SSIM_K2: f64 = 0.03;
pub const MS_SSIM_WEIGHTS: [f64; 5] = [0.0448, 0.2856, 0.3001, 0.2363, 0.1333];

/// Smallest side for which all five scales keep a full window.
pub const MS_SSIM_MIN_SIDE: usize = (SSIM_WINDOW - 1) * 16 + 1;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MsSsim {
    pub value: f64,
    /// Frames were too small for five scales; `value` is single-scale SSIM.
    pub single_scale: bool,
}

fn gaussian_window() -> [f64; SSIM_WINDOW] {
    let mut g = [0.0; SSIM_WINDOW];
    let c = (SSIM_WINDOW / 2) as f64;
    for (i, v) in g.iter_mut().enumerate() {
        let d = i as f64 - c;
        *v = (-d * d / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
    }
    let s: f64 = g.iter().sum();
    g.iter_mut().for_each(|v| *v /= s);
    g
}

/// Separable "valid" Gaussian filtering.
fn filter(x: &[f64], h: usize, w: usize, g: &[f64; SSIM_WINDOW]) -> (Vec<f64>, usize, usize) {
    let k = SSIM_WINDOW;
    let (oh, ow) = (h + 1 - k, w + 1 - k);
    let mut tmp = vec![0.0; h * ow];
    for y in 0..h {
        for x0 in 0..ow {
            let mut s = 0.0;
            for (i, gi) in g.iter().enumerate() {
                s += gi * x[y * w + x0 + i];
            }
            tmp[y * ow + x0] = s;
        }
    }
    let mut out = vec![0.0; oh * ow];
    for y0 in 0..oh {
        for x0 in 0..ow {
            let mut s = 0.0;
            for (i, gi) in g.iter().enumerate() {
                s += gi * tmp[(y0 + i) * ow + x0];
            }
            out[y0 * ow + x0] = s;
        }
    }
    (out, oh, ow)
}

/// Mean SSIM and mean contrast-structure term at one scale.
fn ssim_cs(a: &[f64], b: &[f64], h: usize, w: usize, range: f64) -> (f64, f64) {
    let g = gaussian_window();
    let aa: Vec<f64> = a.iter().map(|v| v * v).collect();
    let bb: Vec<f64> = b.iter().map(|v| v * v).collect();
    let ab: Vec<f64> = a.iter().zip(b).map(|(x, y)| x * y).collect();
    let (ma, _, _) = filter(a, h, w, &g);
    let (mb, _, _) = filter(b, h, w, &g);
    let (saa, _, _) = filter(&aa, h, w, &g);
    let (sbb, _, _) = filter(&bb, h, w, &g);
    let (sab, _, _) = filter(&ab, h, w, &g);
    let c1 = (SSIM_K1 * range).powi(2);
    let c2 = (SSIM_K2 * range).powi(2);
    let n = ma.len() as f64;
    let (mut ssim, mut cs) = (0.0, 0.0);
    for i in 0..ma.len() {
        let (mx, my) = (ma[i], mb[i]);
        let vx = saa[i] - mx * mx;
        let vy = sbb[i] - my * my;
        let cov = sab[i] - mx * my;
        let csi = (2.0 * cov + c2) / (vx + vy + c2);
        let li = (2.0 * mx * my + c1) / (mx * mx + my * my + c1);
        ssim += li * csi;
        cs += csi;
    }
    (ssim / n, cs / n)
}

/// Dynamic range shared by both frames, so the metric is symmetric.
fn joint_range(a: &Image, b: &Image) -> f64 {
    let (la, ha) = a.min_max();
    let (lb, hb) = b.min_max();
    ha.max(hb) as f64 - la.min(lb) as f64
}

fn to_f64(img: &Image) -> Vec<f64> {
    img.data().iter().map(|&v| v as f64).collect()
}

/// Single-scale SSIM with an 11x11 Gaussian window (sigma 1.5).
pub fn ssim(pred: &Image, gt: &Image) -> Result<f64> {
    pred.ensure_same_shape(gt)?;
    let (h, w) = gt.shape();
    if h.min(w) < SSIM_WINDOW {
        return Err(Error::shape(
            format!("frames at least {SSIM_WINDOW}x{SSIM_WINDOW}"),
            format!("{h}x{w}"),
        ));
    }
    let range = joint_range(pred, gt);
    if range == 0.0 {
        return Ok(1.0);
    }
    Ok(ssim_cs(&to_f64(pred), &to_f64(gt), h, w, range).0)
}

/// Five-scale MS-SSIM with the standard weights; negative contrast terms are
/// clamped to zero. Falls back to single-scale SSIM on small frames.
pub fn ms_ssim(pred: &Image, gt: &Image) -> Result<MsSsim> {
    pred.ensure_same_shape(gt)?;
    let (h, w) = gt.shape();
    if h.min(w) < MS_SSIM_MIN_SIDE {
        return Ok(MsSsim {
            value: ssim(pred, gt)?,
            single_scale: true,
        });
    }
    let range = joint_range(pred, gt);
    if range == 0.0 {
        return Ok(MsSsim {
            value: 1.0,
            single_scale: false,
        });
    }
    let (mut a, mut b) = (pred.clone(), gt.clone());
    let mut value = 1.0;
    for (level, &wt) in MS_SSIM_WEIGHTS.iter().enumerate() {
        let (hh, ww) = a.shape();
        let (s, cs) = ssim_cs(&to_f64(&a), &to_f64(&b), hh, ww, range);
        if level + 1 == MS_SSIM_WEIGHTS.len() {
            value *= s.max(0.0).powf(wt);
        } else {
            value *= cs.max(0.0).powf(wt);
            a = a.downsample2();
            b = b.downsample2();
        }
    }
    Ok(MsSsim {
        value,
        single_scale: false,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn checker(n: usize) -> Image {
        Image::from_fn(n, n, |y, x| ((y + x) % 2) as f32)
    }

    #[test]
    fn psnr_one_flipped_pixel() {
        let gt = checker(16);
        let mut p = gt.clone();
        p.set(3, 4, 1.0 - p.get(3, 4));
        let v = psnr(&p, &gt).unwrap();
        assert!((v.db - 10.0 * 256f64.log10()).abs() < 1e-9);
        assert!(!v.capped);
    }

    #[test]
    fn psnr_perfect_is_flagged() {
        let gt = checker(8);
        let v = psnr(&gt, &gt).unwrap();
        assert!(v.capped);
        assert_eq!(v.db, PSNR_CAP_DB);
    }

    #[test]
    fn psnr_constant_offset_closed_form() {
        let gt = Image::from_fn(10, 10, |y, x| (y * 10 + x) as f32 / 99.0 * 3.0);
        let p = gt.map(|v| v + 0.25);
        let v = psnr(&p, &gt).unwrap();
        assert!((v.db - 20.0 * (3.0f64 / 0.25).log10()).abs() < 1e-5);
    }

    #[test]
    fn ssim_identity_and_symmetry() {
        let a = Image::from_fn(32, 40, |y, x| ((y * 7 + x * 13) % 17) as f32);
        let b = Image::from_fn(32, 40, |y, x| ((y * 5 + x * 3) % 11) as f32);
        assert!((ms_ssim(&a, &a).unwrap().value - 1.0).abs() < 1e-12);
        let ab = ms_ssim(&a, &b).unwrap();
        let ba = ms_ssim(&b, &a).unwrap();
        assert!(ab.single_scale);
        assert_eq!(ab.value, ba.value);
    }

    #[test]
    fn inverted_frame_scores_low() {
        let a = Image::from_fn(48, 48, |y, x| {
            (((y as f32 / 6.0).sin() * (x as f32 / 5.0).cos()) + 1.0) / 2.0
        });
        let inv = a.map(|v| 1.0 - v);
        assert!(ms_ssim(&inv, &a).unwrap().value < 0.5);
    }
}
