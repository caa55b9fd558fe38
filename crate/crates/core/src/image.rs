use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Single-channel 2-D intensity image, row-major `f32`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Image {
    height: usize,
    width: usize,
    data: Vec<f32>,
}

impl Image {
    pub fn new(height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != height * width {
            return Err(Error::shape(
                format!("{height}x{width} = {} values", height * width),
                format!("{} values", data.len()),
            ));
        }
        Ok(Self {
            height,
            width,
            data,
        })
    }

    pub fn zeros(height: usize, width: usize) -> Self {
        Self::filled(height, width, 0.0)
    }

    pub fn filled(height: usize, width: usize, value: f32) -> Self {
        Self {
            height,
            width,
            data: vec![value; height * width],
        }
    }

    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize) -> f32) -> Self {
        let mut data = Vec::with_capacity(height * width);
        for y in 0..height {
            for x in 0..width {
                data.push(f(y, x));
            }
        }
        Self {
            height,
            width,
            data,
        }
    }

    #[inline]
    pub fn height(&self) -> usize {
        self.height
    }

    #[inline]
    pub fn width(&self) -> usize {
        self.width
    }

    #[inline]
    pub fn shape(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.data.len()
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn data(&self) -> &[f32] {
        &self.data
    }

    #[inline]
    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize) -> f32 {
        self.data[y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, y: usize, x: usize, v: f32) {
        self.data[y * self.width + x] = v;
    }

    pub fn ensure_same_shape(&self, other: &Image) -> Result<()> {
        if self.shape() != other.shape() {
            return Err(Error::shape(
                format!("{}x{}", self.height, self.width),
                format!("{}x{}", other.height, other.width),
            ));
        }
        Ok(())
    }

    /// Copies the `ph x pw` window whose top-left corner is `(y, x)`.
    pub fn crop(&self, y: usize, x: usize, ph: usize, pw: usize) -> Result<Image> {
        if y + ph > self.height || x + pw > self.width {
            return Err(Error::Range(format!(
                "crop {ph}x{pw} at ({y},{x}) exceeds {}x{} frame",
                self.height, self.width
            )));
        }
        let mut data = Vec::with_capacity(ph * pw);
        for row in y..y + ph {
            let start = row * self.width + x;
            data.extend_from_slice(&self.data[start..start + pw]);
        }
        Ok(Image {
            height: ph,
            width: pw,
            data,
        })
    }

    pub fn map(&self, f: impl Fn(f32) -> f32) -> Image {
        Image {
            height: self.height,
            width: self.width,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn zip_map(&self, other: &Image, f: impl Fn(f32, f32) -> f32) -> Result<Image> {
        self.ensure_same_shape(other)?;
        Ok(Image {
            height: self.height,
            width: self.width,
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    pub fn mean(&self) -> f64 {
        Moments::of(&self.data).mean()
    }

    /// Population standard deviation (divides by the pixel count).
    pub fn std(&self) -> f64 {
        Moments::of(&self.data).std()
    }

    pub fn min_max(&self) -> (f32, f32) {
        self.data
            .iter()
            .fold((f32::INFINITY, f32::NEG_INFINITY), |(lo, hi), &v| {
                (lo.min(v), hi.max(v))
            })
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Average-pools by a factor of two, dropping a trailing odd row/column.
    pub fn downsample2(&self) -> Image {
        let (h, w) = (self.height / 2, self.width / 2);
        Image::from_fn(h, w, |y, x| {
            let (y2, x2) = (2 * y, 2 * x);
            0.25 * (self.get(y2, x2)
                + self.get(y2, x2 + 1)
                + self.get(y2 + 1, x2)
                + self.get(y2 + 1, x2 + 1))
        })
    }
}

/// Streaming first and second moments accumulated in `f64`.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct Moments {
    pub count: u64,
    pub sum: f64,
    pub sum_sq: f64,
}

impl Moments {
    pub fn of(values: &[f32]) -> Self {
        let mut m = Moments::default();
        m.push_slice(values);
        m
    }

    pub fn push_slice(&mut self, values: &[f32]) {
        for &v in values {
            let v = v as f64;
            self.sum += v;
            self.sum_sq += v * v;
        }
        self.count += values.len() as u64;
    }

    pub fn merge(&mut self, other: &Moments) {
        self.count += other.count;
        self.sum += other.sum;
        self.sum_sq += other.sum_sq;
    }

    pub fn mean(&self) -> f64 {
        if self.count == 0 {
            return 0.0;
        }
        self.sum / self.count as f64
    }

    pub fn variance(&self) -> f64 {
        if self.count == 0 {
            return 0.0;
        }
        let m = self.mean();
        (self.sum_sq / self.count as f64 - m * m).max(0.0)
    }

    pub fn std(&self) -> f64 {
        self.variance().sqrt()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_wrong_length() {
        assert!(Image::new(2, 3, vec![0.0; 5]).is_err());
    }

    #[test]
    fn crop_window() {
        let img = Image::from_fn(4, 5, |y, x| (y * 10 + x) as f32);
        let c = img.crop(1, 2, 2, 3).unwrap();
        assert_eq!(c.data(), &[12.0, 13.0, 14.0, 22.0, 23.0, 24.0]);
        assert!(img.crop(3, 0, 2, 2).is_err());
    }

    #[test]
    fn moments_match_two_pass() {
        let img = Image::from_fn(7, 9, |y, x| ((y * 31 + x * 17) % 13) as f32 * 0.5 - 1.0);
        let n = img.len() as f64;
        let mean: f64 = img.data().iter().map(|&v| v as f64).sum::<f64>() / n;
        let var: f64 = img
            .data()
            .iter()
            .map(|&v| (v as f64 - mean).powi(2))
            .sum::<f64>()
            / n;
        assert!((img.mean() - mean).abs() < 1e-12);
        assert!((img.std() - var.sqrt()).abs() < 1e-10);
    }
}
