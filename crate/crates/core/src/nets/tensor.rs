//! Channel-major feature maps and the handful of differentiable operators the
//! generators and the regressor are built from.
//!
//! Convolutions go through im2col and a single-precision GEMM. Every operator
//! has an explicit backward; parameters live in one flat `f32` buffer and each
//! layer only stores offsets into it.

use crate::image::Image;

pub const LEAKY_SLOPE: f32 = 0.1;

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub data: Vec<f32>,
}

impl Tensor {
    pub fn zeros(c: usize, h: usize, w: usize) -> Self {
        Self {
            c,
            h,
            w,
            data: vec![0.0; c * h * w],
        }
    }

    pub fn from_image(img: &Image) -> Self {
        Self {
            c: 1,
            h: img.height(),
            w: img.width(),
            data: img.data().to_vec(),
        }
    }

    /// Stacks an image with a constant plane holding `value`.
    pub fn with_constant_plane(img: &Image, value: f32) -> Self {
        let mut data = Vec::with_capacity(2 * img.len());
        data.extend_from_slice(img.data());
        data.resize(2 * img.len(), value);
        Self {
            c: 2,
            h: img.height(),
            w: img.width(),
            data,
        }
    }

    pub fn into_image(self) -> Image {
        assert_eq!(self.c, 1, "only single-channel tensors convert to images");
        Image::new(self.h, self.w, self.data).expect("tensor dims match data")
    }

    #[inline]
    pub fn plane(&self) -> usize {
        self.h * self.w
    }
}

fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f32],
    (rsa, csa): (usize, usize),
    b: &[f32],
    (rsb, csb): (usize, usize),
    beta: f32,
    c: &mut [f32],
) {
    debug_assert!(a.len() > (m - 1) * rsa + (k - 1) * csa);
    debug_assert!(b.len() > (k - 1) * rsb + (n - 1) * csb);
    debug_assert!(c.len() >= m * n);
    // SAFETY: the asserted bounds cover every element the kernel touches, and
    // `c` does not alias `a` or `b` (distinct borrows).
    unsafe {
        matrixmultiply::sgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Unfolds `x` into a `(c * k * k) x (h * w)` column matrix, zero padding `k / 2`.
fn im2col(x: &Tensor, k: usize) -> Vec<f32> {
    let pad = (k / 2) as isize;
    let (h, w) = (x.h as isize, x.w as isize);
    let hw = x.plane();
    let mut cols = vec![0.0f32; x.c * k * k * hw];
    for ci in 0..x.c {
        let src = &x.data[ci * hw..(ci + 1) * hw];
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                let dst = &mut cols[row * hw..(row + 1) * hw];
                let dy = ky as isize - pad;
                let dx = kx as isize - pad;
                for y in 0..h {
                    let sy = y + dy;
                    if sy < 0 || sy >= h {
                        continue;
                    }
                    let x0 = (-dx).max(0);
                    let x1 = (w - dx).min(w);
                    if x0 >= x1 {
                        continue;
                    }
                    let d = (y * w) as usize;
                    let s = (sy * w) as usize;
                    dst[d + x0 as usize..d + x1 as usize].copy_from_slice(
                        &src[(s as isize + x0 + dx) as usize..(s as isize + x1 + dx) as usize],
                    );
                }
            }
        }
    }
    cols
}

/// Adjoint of [`im2col`]: folds column gradients back onto the input grid.
fn col2im(cols: &[f32], c: usize, h: usize, w: usize, k: usize) -> Tensor {
    let pad = (k / 2) as isize;
    let (hi, wi) = (h as isize, w as isize);
    let hw = h * w;
    let mut out = Tensor::zeros(c, h, w);
    for ci in 0..c {
        let dst = &mut out.data[ci * hw..(ci + 1) * hw];
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                let src = &cols[row * hw..(row + 1) * hw];
                let dy = ky as isize - pad;
                let dx = kx as isize - pad;
                for y in 0..hi {
                    let sy = y + dy;
                    if sy < 0 || sy >= hi {
                        continue;
                    }
                    let x0 = (-dx).max(0);
                    let x1 = (wi - dx).min(wi);
                    for xx in x0..x1 {
                        dst[(sy * wi + xx + dx) as usize] += src[(y * wi + xx) as usize];
                    }
                }
            }
        }
    }
    out
}

/// Same-padded stride-1 convolution with an odd square kernel.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Conv {
    pub cin: usize,
    pub cout: usize,
    pub k: usize,
    pub w_off: usize,
    pub b_off: usize,
}

impl Conv {
    pub fn new(alloc: &mut ParamAlloc, cin: usize, cout: usize, k: usize) -> Self {
        assert!(k % 2 == 1, "kernel size must be odd");
        let w_off = alloc.take(cout * cin * k * k);
        let b_off = alloc.take(cout);
        Self {
            cin,
            cout,
            k,
            w_off,
            b_off,
        }
    }

    fn fan_in(&self) -> usize {
        self.cin * self.k * self.k
    }

    pub fn init(&self, params: &mut [f32], rng: &mut crate::rng::Rng) {
        use rand_distr::{Distribution, Normal};
        let std = (2.0 / self.fan_in() as f32).sqrt();
        let dist = Normal::new(0.0, std).expect("positive std");
        for v in &mut params[self.w_off..self.w_off + self.cout * self.fan_in()] {
            *v = dist.sample(rng);
        }
        params[self.b_off..self.b_off + self.cout].fill(0.0);
    }

    pub fn forward(&self, p: &[f32], x: &Tensor) -> Tensor {
        assert_eq!(x.c, self.cin, "conv input channels");
        let hw = x.plane();
        let kk = self.fan_in();
        let weight = &p[self.w_off..self.w_off + self.cout * kk];
        let bias = &p[self.b_off..self.b_off + self.cout];
        let mut out = Tensor::zeros(self.cout, x.h, x.w);
        for (co, row) in out.data.chunks_exact_mut(hw).enumerate() {
            row.fill(bias[co]);
        }
        if self.k == 1 {
            gemm(self.cout, kk, hw, weight, (kk, 1), &x.data, (hw, 1), 1.0, &mut out.data);
        } else {
            let cols = im2col(x, self.k);
            gemm(self.cout, kk, hw, weight, (kk, 1), &cols, (hw, 1), 1.0, &mut out.data);
        }
        out
    }

    /// Accumulates weight and bias gradients into `g` and returns the input
    /// gradient when `need_dx` is set.
    pub fn backward(
        &self,
        p: &[f32],
        x: &Tensor,
        dy: &Tensor,
        g: &mut [f32],
        need_dx: bool,
    ) -> Option<Tensor> {
        let hw = x.plane();
        let kk = self.fan_in();
        let owned_cols;
        let cols: &[f32] = if self.k == 1 {
            &x.data
        } else {
            owned_cols = im2col(x, self.k);
            &owned_cols
        };
        {
            let gw = &mut g[self.w_off..self.w_off + self.cout * kk];
            gemm(self.cout, hw, kk, &dy.data, (hw, 1), cols, (1, hw), 1.0, gw);
        }
        for (co, row) in dy.data.chunks_exact(hw).enumerate() {
            g[self.b_off + co] += row.iter().sum::<f32>();
        }
        if !need_dx {
            return None;
        }
        let weight = &p[self.w_off..self.w_off + self.cout * kk];
        let mut dcols = vec![0.0f32; kk * hw];
        gemm(kk, self.cout, hw, weight, (1, kk), &dy.data, (hw, 1), 0.0, &mut dcols);
        if self.k == 1 {
            Some(Tensor {
                c: self.cin,
                h: x.h,
                w: x.w,
                data: dcols,
            })
        } else {
            Some(col2im(&dcols, self.cin, x.h, x.w, self.k))
        }
    }
}

/// Per-channel affine modulation driven by a scalar:
/// `y = x * (1 + gain(s)) + shift(s)` with `gain` and `shift` affine in `s`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Film {
    pub channels: usize,
    pub off: usize,
}

impl Film {
    pub fn new(alloc: &mut ParamAlloc, channels: usize) -> Self {
        Self {
            channels,
            off: alloc.take(4 * channels),
        }
    }

    pub fn init(&self, params: &mut [f32], rng: &mut crate::rng::Rng) {
        use rand::Rng as _;
        for v in &mut params[self.off..self.off + 4 * self.channels] {
            *v = rng.random_range(-0.1..0.1);
        }
    }

    fn coeffs(&self, p: &[f32], c: usize, s: f32) -> (f32, f32) {
        let q = &p[self.off + 4 * c..self.off + 4 * c + 4];
        (q[0] * s + q[1], q[2] * s + q[3])
    }

    pub fn forward(&self, p: &[f32], x: &Tensor, s: f32) -> Tensor {
        let hw = x.plane();
        let mut out = x.clone();
        for (c, row) in out.data.chunks_exact_mut(hw).enumerate() {
            let (gain, shift) = self.coeffs(p, c, s);
            for v in row {
                *v = *v * (1.0 + gain) + shift;
            }
        }
        out
    }

    pub fn backward(&self, p: &[f32], x: &Tensor, s: f32, dy: &Tensor, g: &mut [f32]) -> Tensor {
        let hw = x.plane();
        let mut dx = dy.clone();
        for c in 0..self.channels {
            let (gain, _) = self.coeffs(p, c, s);
            let xs = &x.data[c * hw..(c + 1) * hw];
            let ds = &dy.data[c * hw..(c + 1) * hw];
            let dgain: f32 = xs.iter().zip(ds).map(|(a, b)| a * b).sum();
            let dshift: f32 = ds.iter().sum();
            let q = self.off + 4 * c;
            g[q] += dgain * s;
            g[q + 1] += dgain;
            g[q + 2] += dshift * s;
            g[q + 3] += dshift;
            for v in &mut dx.data[c * hw..(c + 1) * hw] {
                *v *= 1.0 + gain;
            }
        }
        dx
    }
}

/// Fully connected layer on a flat vector.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Linear {
    pub nin: usize,
    pub nout: usize,
    pub w_off: usize,
    pub b_off: usize,
}

impl Linear {
    pub fn new(alloc: &mut ParamAlloc, nin: usize, nout: usize) -> Self {
        let w_off = alloc.take(nin * nout);
        let b_off = alloc.take(nout);
        Self {
            nin,
            nout,
            w_off,
            b_off,
        }
    }

    pub fn init(&self, params: &mut [f32], rng: &mut crate::rng::Rng) {
        use rand_distr::{Distribution, Normal};
        let dist = Normal::new(0.0, (2.0 / self.nin as f32).sqrt()).expect("positive std");
        for v in &mut params[self.w_off..self.w_off + self.nin * self.nout] {
            *v = dist.sample(rng);
        }
        params[self.b_off..self.b_off + self.nout].fill(0.0);
    }

    pub fn forward(&self, p: &[f32], x: &[f32]) -> Vec<f32> {
        (0..self.nout)
            .map(|o| {
                let w = &p[self.w_off + o * self.nin..self.w_off + (o + 1) * self.nin];
                p[self.b_off + o] + w.iter().zip(x).map(|(a, b)| a * b).sum::<f32>()
            })
            .collect()
    }

    pub fn backward(&self, p: &[f32], x: &[f32], dy: &[f32], g: &mut [f32]) -> Vec<f32> {
        let mut dx = vec![0.0f32; self.nin];
        for (o, &d) in dy.iter().enumerate() {
            let w = &p[self.w_off + o * self.nin..self.w_off + (o + 1) * self.nin];
            for i in 0..self.nin {
                g[self.w_off + o * self.nin + i] += d * x[i];
                dx[i] += d * w[i];
            }
            g[self.b_off + o] += d;
        }
        dx
    }
}

/// Hands out contiguous ranges of the flat parameter buffer.
#[derive(Debug, Default)]
pub struct ParamAlloc {
    len: usize,
}

impl ParamAlloc {
    pub fn take(&mut self, n: usize) -> usize {
        let off = self.len;
        self.len += n;
        off
    }

    pub fn len(&self) -> usize {
        self.len
    }
}

#[inline]
pub fn leaky(v: f32) -> f32 {
    if v > 0.0 {
        v
    } else {
        LEAKY_SLOPE * v
    }
}

pub fn leaky_relu(x: &Tensor) -> Tensor {
    Tensor {
        c: x.c,
        h: x.h,
        w: x.w,
        data: x.data.iter().map(|&v| leaky(v)).collect(),
    }
}

/// Gradient through a leaky ReLU given its pre-activation input.
pub fn leaky_relu_backward(pre: &Tensor, dy: &Tensor) -> Tensor {
    Tensor {
        data: pre
            .data
            .iter()
            .zip(&dy.data)
            .map(|(&x, &d)| if x > 0.0 { d } else { LEAKY_SLOPE * d })
            .collect(),
        c: pre.c,
        h: pre.h,
        w: pre.w,
    }
}

/// 2x2 average pooling; requires even spatial dims.
pub fn avg_pool2(x: &Tensor) -> Tensor {
    assert!(x.h.is_multiple_of(2) && x.w.is_multiple_of(2), "pooling needs even dims");
    let (h, w) = (x.h / 2, x.w / 2);
    let mut out = Tensor::zeros(x.c, h, w);
    for c in 0..x.c {
        let src = &x.data[c * x.plane()..(c + 1) * x.plane()];
        let dst = &mut out.data[c * h * w..(c + 1) * h * w];
        for y in 0..h {
            for xx in 0..w {
                let i = 2 * y * x.w + 2 * xx;
                dst[y * w + xx] = 0.25 * (src[i] + src[i + 1] + src[i + x.w] + src[i + x.w + 1]);
            }
        }
    }
    out
}

pub fn avg_pool2_backward(dy: &Tensor) -> Tensor {
    let (h, w) = (dy.h * 2, dy.w * 2);
    let mut dx = Tensor::zeros(dy.c, h, w);
    for c in 0..dy.c {
        let src = &dy.data[c * dy.plane()..(c + 1) * dy.plane()];
        let dst = &mut dx.data[c * h * w..(c + 1) * h * w];
        for y in 0..h {
            for xx in 0..w {
                dst[y * w + xx] = 0.25 * src[(y / 2) * dy.w + xx / 2];
            }
        }
    }
    dx
}

/// Nearest-neighbour 2x upsampling.
pub fn upsample2(x: &Tensor) -> Tensor {
    let (h, w) = (x.h * 2, x.w * 2);
    let mut out = Tensor::zeros(x.c, h, w);
    for c in 0..x.c {
        let src = &x.data[c * x.plane()..(c + 1) * x.plane()];
        let dst = &mut out.data[c * h * w..(c + 1) * h * w];
        for y in 0..h {
            for xx in 0..w {
                dst[y * w + xx] = src[(y / 2) * x.w + xx / 2];
            }
        }
    }
    out
}

pub fn upsample2_backward(dy: &Tensor) -> Tensor {
    let (h, w) = (dy.h / 2, dy.w / 2);
    let mut dx = Tensor::zeros(dy.c, h, w);
    for c in 0..dy.c {
        let src = &dy.data[c * dy.plane()..(c + 1) * dy.plane()];
        let dst = &mut dx.data[c * h * w..(c + 1) * h * w];
        for y in 0..dy.h {
            for xx in 0..dy.w {
                dst[(y / 2) * w + xx / 2] += src[y * dy.w + xx];
            }
        }
    }
    dx
}

pub fn concat(a: &Tensor, b: &Tensor) -> Tensor {
    assert!(a.h == b.h && a.w == b.w, "concat needs equal spatial dims");
    let mut data = Vec::with_capacity(a.data.len() + b.data.len());
    data.extend_from_slice(&a.data);
    data.extend_from_slice(&b.data);
    Tensor {
        c: a.c + b.c,
        h: a.h,
        w: a.w,
        data,
    }
}

/// Splits a concatenated gradient back into the parts of sizes `ca` and the rest.
pub fn split_channels(d: &Tensor, ca: usize) -> (Tensor, Tensor) {
    let n = ca * d.plane();
    (
        Tensor {
            c: ca,
            h: d.h,
            w: d.w,
            data: d.data[..n].to_vec(),
        },
        Tensor {
            c: d.c - ca,
            h: d.h,
            w: d.w,
            data: d.data[n..].to_vec(),
        },
    )
}

/// Mean over each channel plane.
pub fn global_avg_pool(x: &Tensor) -> Vec<f32> {
    let hw = x.plane() as f32;
    x.data
        .chunks_exact(x.plane())
        .map(|row| row.iter().sum::<f32>() / hw)
        .collect()
}

pub fn global_avg_pool_backward(dy: &[f32], c: usize, h: usize, w: usize) -> Tensor {
    let hw = (h * w) as f32;
    let mut dx = Tensor::zeros(c, h, w);
    for (ci, row) in dx.data.chunks_exact_mut(h * w).enumerate() {
        row.fill(dy[ci] / hw);
    }
    dx
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;
    use rand::Rng as _;

    fn rand_tensor(c: usize, h: usize, w: usize, seed: u64) -> Tensor {
        let mut r = rng::stream(seed, 0);
        Tensor {
            c,
            h,
            w,
            data: (0..c * h * w).map(|_| r.random_range(-1.0..1.0)).collect(),
        }
    }

    /// Direct nested-loop convolution used as an oracle.
    fn conv_naive(conv: &Conv, p: &[f32], x: &Tensor) -> Tensor {
        let pad = (conv.k / 2) as isize;
        let mut out = Tensor::zeros(conv.cout, x.h, x.w);
        for co in 0..conv.cout {
            for y in 0..x.h as isize {
                for xx in 0..x.w as isize {
                    let mut acc = p[conv.b_off + co] as f64;
                    for ci in 0..conv.cin {
                        for ky in 0..conv.k as isize {
                            for kx in 0..conv.k as isize {
                                let sy = y + ky - pad;
                                let sx = xx + kx - pad;
                                if sy < 0 || sx < 0 || sy >= x.h as isize || sx >= x.w as isize {
                                    continue;
                                }
                                let wi = conv.w_off
                                    + ((co * conv.cin + ci) * conv.k + ky as usize) * conv.k
                                    + kx as usize;
                                acc += p[wi] as f64
                                    * x.data[(ci * x.h + sy as usize) * x.w + sx as usize] as f64;
                            }
                        }
                    }
                    out.data[(co * x.h + y as usize) * x.w + xx as usize] = acc as f32;
                }
            }
        }
        out
    }

    #[test]
    fn conv_matches_naive_loops() {
        for k in [1usize, 3] {
            let mut alloc = ParamAlloc::default();
            let conv = Conv::new(&mut alloc, 3, 4, k);
            let mut p = vec![0.0; alloc.len()];
            let mut r = rng::stream(5, k as u64);
            for v in &mut p {
                *v = r.random_range(-1.0..1.0);
            }
            let x = rand_tensor(3, 5, 7, 9);
            let fast = conv.forward(&p, &x);
            let slow = conv_naive(&conv, &p, &x);
            for (a, b) in fast.data.iter().zip(&slow.data) {
                assert!((a - b).abs() < 1e-5, "{a} vs {b}");
            }
        }
    }

    #[test]
    fn col2im_is_adjoint_of_im2col() {
        // <im2col(x), y> == <x, col2im(y)>
        let x = rand_tensor(2, 4, 6, 1);
        let cols = im2col(&x, 3);
        let y = rand_tensor(1, 1, cols.len(), 2).data;
        let lhs: f64 = cols.iter().zip(&y).map(|(a, b)| (*a as f64) * (*b as f64)).sum();
        let back = col2im(&y, 2, 4, 6, 3);
        let rhs: f64 = x
            .data
            .iter()
            .zip(&back.data)
            .map(|(a, b)| (*a as f64) * (*b as f64))
            .sum();
        assert!((lhs - rhs).abs() < 1e-4, "{lhs} vs {rhs}");
    }

    #[test]
    fn pool_and_upsample_are_adjoint_up_to_scale() {
        let x = rand_tensor(2, 4, 4, 3);
        let y = rand_tensor(2, 2, 2, 4);
        let lhs: f32 = avg_pool2(&x).data.iter().zip(&y.data).map(|(a, b)| a * b).sum();
        let rhs: f32 = x
            .data
            .iter()
            .zip(&avg_pool2_backward(&y).data)
            .map(|(a, b)| a * b)
            .sum();
        assert!((lhs - rhs).abs() < 1e-5);
        let lhs: f32 = upsample2(&y).data.iter().zip(&x.data).map(|(a, b)| a * b).sum();
        let rhs: f32 = y
            .data
            .iter()
            .zip(&upsample2_backward(&x).data)
            .map(|(a, b)| a * b)
            .sum();
        assert!((lhs - rhs).abs() < 1e-5);
    }
}
