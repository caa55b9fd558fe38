use rand::Rng as _;
use serde::{Deserialize, Serialize};

use super::{ChannelFrameSet, Split};
use crate::error::{Error, Result, Violations};
use crate::image::Image;
use crate::rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PatchSpec {
    pub patch_size: usize,
    /// Tiling stride used at inference; random crops ignore it.
    pub stride: usize,
    pub split: Split,
}

impl PatchSpec {
    pub fn new(patch_size: usize, stride: usize, split: Split) -> Self {
        Self {
            patch_size,
            stride,
            split,
        }
    }

    pub fn overlap(&self) -> usize {
        self.patch_size.saturating_sub(self.stride)
    }

    pub fn validate(&self, frame_dims: (usize, usize)) -> Result<()> {
        let mut v = Violations::new();
        v.check(self.patch_size >= 1, || "patch_size must be positive".into());
        v.check(
            self.stride >= 1 && self.stride <= self.patch_size,
            || {
                format!(
                    "stride {} must lie in [1, patch_size = {}]",
                    self.stride, self.patch_size
                )
            },
        );
        let (h, w) = frame_dims;
        v.check(self.patch_size <= h.min(w), || {
            format!(
                "patch_size {} exceeds smallest frame dimension {}",
                self.patch_size,
                h.min(w)
            )
        });
        v.into_result()
    }
}

/// One aligned crop pair and where it came from.
#[derive(Clone, Debug, PartialEq)]
pub struct PatchPair {
    pub frame_index: usize,
    pub y: usize,
    pub x: usize,
    pub c0: Image,
    pub c1: Image,
}

/// Draws uniformly random aligned crops from the frames of one split.
#[derive(Clone, Debug)]
pub struct PatchSampler<'a> {
    fs: &'a ChannelFrameSet,
    frames: Vec<usize>,
    patch_size: usize,
}

impl<'a> PatchSampler<'a> {
    pub fn new(fs: &'a ChannelFrameSet, split: Split, patch_size: usize) -> Result<Self> {
        let frames: Vec<usize> = fs.split_indices(split).collect();
        if frames.is_empty() {
            return Err(Error::Empty(format!("{split} split has no frames")));
        }
        for &i in &frames {
            let (h, w) = fs.frame(i).0.shape();
            if patch_size == 0 || patch_size > h.min(w) {
                return Err(Error::config(format!(
                    "patch_size {patch_size} does not fit frame {i} of size {h}x{w}"
                )));
            }
        }
        Ok(Self {
            fs,
            frames,
            patch_size,
        })
    }

    pub fn patch_size(&self) -> usize {
        self.patch_size
    }

    /// Frame index and top-left corner of a random crop.
    pub fn sample_window(&self, rng: &mut rng::Rng) -> (usize, usize, usize) {
        let frame_index = self.frames[rng.random_range(0..self.frames.len())];
        let (h, w) = self.fs.frame(frame_index).0.shape();
        let y = rng.random_range(0..=h - self.patch_size);
        let x = rng.random_range(0..=w - self.patch_size);
        (frame_index, y, x)
    }

    pub fn sample(&self, rng: &mut rng::Rng) -> PatchPair {
        let (frame_index, y, x) = self.sample_window(rng);
        self.crop(frame_index, y, x)
    }

    /// Aligned crop at a window previously returned by [`Self::sample_window`].
    pub fn crop(&self, frame_index: usize, y: usize, x: usize) -> PatchPair {
        let (a, b) = self.fs.frame(frame_index);
        let p = self.patch_size;
        PatchPair {
            frame_index,
            y,
            x,
            c0: a.crop(y, x, p, p).expect("window within frame"),
            c1: b.crop(y, x, p, p).expect("window within frame"),
        }
    }
}

/// Endless stream of random aligned crops. Each stream owns its RNG.
pub struct PatchStream<'a> {
    sampler: PatchSampler<'a>,
    rng: rng::Rng,
}

impl Iterator for PatchStream<'_> {
    type Item = PatchPair;

    fn next(&mut self) -> Option<PatchPair> {
        Some(self.sampler.sample(&mut self.rng))
    }
}

pub fn extract_patches(
    fs: &ChannelFrameSet,
    spec: PatchSpec,
    rng_seed: u64,
) -> Result<PatchStream<'_>> {
    spec.validate(fs.min_frame_dims())?;
    Ok(PatchStream {
        sampler: PatchSampler::new(fs, spec.split, spec.patch_size)?,
        rng: rng::stream(rng_seed, 0),
    })
}
