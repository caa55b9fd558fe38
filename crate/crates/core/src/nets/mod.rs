//! Generator and regressor networks, their parameter layout and the on-disk
//! model bundle.
//!
//! Networks are small convolutional encoder(-decoder)s with hand-written
//! backward passes. All parameters of a network live in one flat `Vec<f32>`;
//! layers address it through offsets, so optimizers and checkpoints only ever
//! see a slice.

mod block;
mod bundle;
mod gen;
mod reg;
pub(crate) mod tensor;

pub use bundle::{BundleManifest, ModelBundle, BUNDLE_VERSION};
pub use gen::{ConditioningMode, GenSpec, GenTape, Generator};
pub use reg::{RegHead, RegSpec, RegTape, Regressor};

use crate::error::Result;
use crate::image::Image;

/// Mean absolute error and its gradient w.r.t. `pred`.
///
/// The subgradient at zero residual is taken as zero.
pub fn mae_loss(pred: &Image, target: &Image) -> Result<(f64, Image)> {
    pred.ensure_same_shape(target)?;
    let n = pred.len() as f64;
    let mut sum = 0.0f64;
    let mut grad = Vec::with_capacity(pred.len());
    for (&p, &t) in pred.data().iter().zip(target.data()) {
        let r = p - t;
        sum += (p as f64 - t as f64).abs();
        grad.push(if r > 0.0 {
            (1.0 / n) as f32
        } else if r < 0.0 {
            (-1.0 / n) as f32
        } else {
            0.0
        });
    }
    let (h, w) = pred.shape();
    Ok((sum / n, Image::new(h, w, grad)?))
}

/// Mean squared error over a batch of scalars and its gradient.
pub fn mse_loss(pred: &[f32], target: &[f32]) -> (f64, Vec<f32>) {
    assert_eq!(pred.len(), target.len(), "mse_loss length mismatch");
    let n = pred.len().max(1) as f64;
    let mut sum = 0.0f64;
    let grad = pred
        .iter()
        .zip(target)
        .map(|(&p, &t)| {
            let r = p as f64 - t as f64;
            sum += r * r;
            (2.0 * r / n) as f32
        })
        .collect();
    (sum / n, grad)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mixing::Channel;
    use crate::rng;
    use rand::Rng as _;
    use rand_distr::{Distribution, StandardNormal};

    fn random_image(h: usize, w: usize, seed: u64) -> Image {
        let mut r = rng::stream(seed, 0);
        Image::from_fn(h, w, |_, _| StandardNormal.sample(&mut r))
    }

    fn tiny_gen(mode: ConditioningMode) -> Generator {
        Generator::new(
            GenSpec {
                channel_index: Channel::C0,
                depth: 2,
                base_width: 3,
                conditioning_mode: mode,
                patch_size: 8,
            },
            11,
        )
        .unwrap()
    }

    fn tiny_reg(head: RegHead) -> Regressor {
        Regressor::new(
            RegSpec {
                depth: 2,
                base_width: 3,
                head,
                hidden: 4,
            },
            5,
        )
        .unwrap()
    }

    #[test]
    fn mae_matches_brute_force() {
        let a = random_image(7, 5, 1);
        let b = random_image(7, 5, 2);
        let (l, g) = mae_loss(&a, &b).unwrap();
        let mut brute = 0.0f64;
        for y in 0..7 {
            for x in 0..5 {
                brute += (a.get(y, x) as f64 - b.get(y, x) as f64).abs();
            }
        }
        assert!((l - brute / 35.0).abs() < 1e-12);
        for i in 0..35 {
            let r = a.data()[i] - b.data()[i];
            assert_eq!(g.data()[i], r.signum() / 35.0);
        }
    }

    #[test]
    fn mse_matches_brute_force() {
        let p = [0.1f32, 0.5, 0.9];
        let t = [0.2f32, 0.5, 0.4];
        let (l, g) = mse_loss(&p, &t);
        let brute = ((0.1f64 - 0.2f64).powi(2) + 0.0 + (0.9f64 - 0.4f64).powi(2)) / 3.0;
        assert!((l - brute).abs() < 1e-7);
        assert!((g[2] - 2.0 * 0.5 / 3.0).abs() < 1e-6);
    }

    #[test]
    fn generator_preserves_shape_and_is_finite() {
        for mode in [
            ConditioningMode::ScalarBroadcastConcat,
            ConditioningMode::FeatureFilm,
        ] {
            let g = tiny_gen(mode);
            let x = random_image(8, 12, 3);
            let y = g.forward(&x, 0.3).unwrap();
            assert_eq!(y.shape(), (8, 12));
            assert!(y.is_finite());
            let (y2, _) = g.forward_tape(&x, 0.3).unwrap();
            assert_eq!(y, y2);
        }
    }

    #[test]
    fn generator_rejects_bad_inputs() {
        let g = tiny_gen(ConditioningMode::ScalarBroadcastConcat);
        assert!(g.forward(&random_image(7, 8, 1), 0.5).is_err());
        assert!(g.forward(&random_image(8, 8, 1), 1.5).is_err());
        assert!(g.forward(&random_image(8, 8, 1), -0.1).is_err());
    }

    #[test]
    fn generator_severity_changes_output() {
        for mode in [
            ConditioningMode::ScalarBroadcastConcat,
            ConditioningMode::FeatureFilm,
        ] {
            let g = tiny_gen(mode);
            let x = random_image(8, 8, 4);
            let a = g.forward(&x, 0.1).unwrap();
            let b = g.forward(&x, 0.9).unwrap();
            assert_ne!(a, b);
        }
    }

    #[test]
    fn regressor_output_bounded() {
        for head in [RegHead::SigmoidBounded, RegHead::ClampedLinear] {
            let r = tiny_reg(head);
            for seed in 0..5 {
                let x = random_image(8, 8, seed).map(|v| v * 100.0);
                let t = r.forward(&x).unwrap();
                assert!((0.0..=1.0).contains(&t));
            }
            let t = r.forward(&Image::zeros(8, 8)).unwrap();
            assert!((0.0..=1.0).contains(&t));
        }
    }

    #[test]
    fn from_params_rejects_wrong_length() {
        let g = tiny_gen(ConditioningMode::ScalarBroadcastConcat);
        let mut p = g.params().to_vec();
        p.pop();
        assert!(Generator::from_params(g.spec().clone(), p).is_err());
    }

    /// Central differences at two step sizes, Richardson-combined; a parameter whose two
    /// estimates disagree straddles a ReLU or |.| kink and is skipped.
    fn check_grad(
        n: usize,
        analytic: &[f32],
        mut loss_at: impl FnMut(usize, f32) -> f64,
        seed: u64,
    ) {
        let mut r = rng::stream(seed, 9);
        let mut checked = 0;
        let mut tries = 0;
        while checked < 25 && tries < 2000 {
            tries += 1;
            let i = r.random_range(0..n);
            let a = analytic[i] as f64;
            if a.abs() < 5e-3 {
                continue;
            }
            let fd = |h: f32, f: &mut dyn FnMut(usize, f32) -> f64| {
                (f(i, h) - f(i, -h)) / (2.0 * h as f64)
            };
            let fd1 = fd(1e-2, &mut loss_at);
            let fd2 = fd(5e-3, &mut loss_at);
            if (fd1 - fd2).abs() > 2e-4 * fd1.abs().max(fd2.abs()) {
                continue;
            }
            let fd = (4.0 * fd2 - fd1) / 3.0;
            let rel = (fd - a).abs() / a.abs().max(fd.abs());
            assert!(rel < 1e-3, "param {i}: analytic {a}, numeric {fd} ({fd1}, {fd2}), rel {rel}");
            checked += 1;
        }
        assert!(checked >= 10, "too few parameters with usable gradient");
    }

    fn gen_grad_check(mode: ConditioningMode) {
        let g = tiny_gen(mode);
        let x = random_image(8, 8, 21);
        let target = random_image(8, 8, 22);
        let (y, tape) = g.forward_tape(&x, 0.35).unwrap();
        let (_, dy) = mae_loss(&y, &target).unwrap();
        let mut grads = vec![0.0f32; g.n_params()];
        g.backward(&tape, &dy, &mut grads);
        let base = g.clone();
        let loss_at = |i: usize, h: f32| {
            let mut g2 = base.clone();
            g2.params_mut()[i] += h;
            let y = g2.forward(&x, 0.35).unwrap();
            mae_loss(&y, &target).unwrap().0
        };
        check_grad(g.n_params(), &grads, loss_at, 1);
    }

    #[test]
    fn generator_gradient_matches_finite_differences() {
        gen_grad_check(ConditioningMode::ScalarBroadcastConcat);
    }

    #[test]
    fn film_generator_gradient_matches_finite_differences() {
        gen_grad_check(ConditioningMode::FeatureFilm);
    }

    #[test]
    fn regressor_gradient_matches_finite_differences() {
        let r = tiny_reg(RegHead::SigmoidBounded);
        let x = random_image(8, 8, 31);
        let (t, tape) = r.forward_tape(&x).unwrap();
        let (_, d) = mse_loss(&[t], &[0.8]);
        let mut grads = vec![0.0f32; r.n_params()];
        r.backward(&tape, d[0], &mut grads);
        let loss_at = |i: usize, h: f32| {
            let mut r2 = r.clone();
            r2.params_mut()[i] += h;
            let t = r2.forward(&x).unwrap();
            mse_loss(&[t], &[0.8]).0
        };
        check_grad(r.n_params(), &grads, loss_at, 2);
    }
}
