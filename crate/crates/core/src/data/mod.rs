//! Two-channel ground-truth frame sets: synthesis, ingestion and patching.

mod io;
mod patches;
mod synth;

use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fingerprint::Hasher;
use crate::image::Image;

pub use io::{
    load_acquisition, load_dataset, read_npy_stack, read_tiff_stack, save_dataset,
    write_tiff_stack, AcquisitionManifest, DatasetManifest, SourceEntry,
};
pub use patches::{extract_patches, PatchPair, PatchSampler, PatchSpec, PatchStream};
pub use synth::{synthesize_dataset, StructureFamily, SynthConfig};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl std::fmt::Display for Split {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        })
    }
}

/// Number of frames in each split. Frames are ordered train, then val, then
/// test, so splits never share a frame.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitCounts {
    pub train: usize,
    pub val: usize,
    pub test: usize,
}

impl SplitCounts {
    pub fn total(&self) -> usize {
        self.train + self.val + self.test
    }

    pub fn range(&self, split: Split) -> Range<usize> {
        match split {
            Split::Train => 0..self.train,
            Split::Val => self.train..self.train + self.val,
            Split::Test => self.train + self.val..self.total(),
        }
    }

    /// Splits `n` frames by fractions, rounding down val/test and giving the
    /// remainder to train.
    pub fn from_fractions(n: usize, val: f64, test: f64) -> Self {
        let val_n = (n as f64 * val).floor() as usize;
        let test_n = (n as f64 * test).floor() as usize;
        SplitCounts {
            train: n.saturating_sub(val_n + test_n),
            val: val_n,
            test: test_n,
        }
    }
}

/// Co-registered two-channel frames from one acquisition.
#[derive(Clone, Debug, PartialEq)]
pub struct ChannelFrameSet {
    pub name: String,
    frames_c0: Vec<Image>,
    frames_c1: Vec<Image>,
    splits: SplitCounts,
    pixel_clip_quantile: Option<f32>,
    clip_threshold: Option<f32>,
}

impl ChannelFrameSet {
    pub fn new(
        name: impl Into<String>,
        frames_c0: Vec<Image>,
        frames_c1: Vec<Image>,
        splits: SplitCounts,
    ) -> Result<Self> {
        let name = name.into();
        if frames_c0.len() != frames_c1.len() {
            return Err(Error::Ingest {
                frame: name,
                reason: format!(
                    "channel frame counts differ: {} vs {}",
                    frames_c0.len(),
                    frames_c1.len()
                ),
            });
        }
        if splits.total() != frames_c0.len() {
            return Err(Error::config(format!(
                "split counts sum to {} but there are {} frames",
                splits.total(),
                frames_c0.len()
            )));
        }
        for (i, (a, b)) in frames_c0.iter().zip(&frames_c1).enumerate() {
            if a.shape() != b.shape() {
                return Err(Error::Ingest {
                    frame: format!("{name}[{i}]"),
                    reason: format!("channel shapes differ: {:?} vs {:?}", a.shape(), b.shape()),
                });
            }
            for (ch, img) in [(0, a), (1, b)] {
                if !img.is_finite() {
                    return Err(Error::Ingest {
                        frame: format!("{name}[{i}] channel {ch}"),
                        reason: "non-finite pixel".into(),
                    });
                }
            }
        }
        Ok(Self {
            name,
            frames_c0,
            frames_c1,
            splits,
            pixel_clip_quantile: None,
            clip_threshold: None,
        })
    }

    pub fn len(&self) -> usize {
        self.frames_c0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames_c0.is_empty()
    }

    pub fn splits(&self) -> SplitCounts {
        self.splits
    }

    pub fn frames_c0(&self) -> &[Image] {
        &self.frames_c0
    }

    pub fn frames_c1(&self) -> &[Image] {
        &self.frames_c1
    }

    pub fn frame(&self, index: usize) -> (&Image, &Image) {
        (&self.frames_c0[index], &self.frames_c1[index])
    }

    pub fn split_indices(&self, split: Split) -> Range<usize> {
        self.splits.range(split)
    }

    pub fn split_frames(&self, split: Split) -> impl Iterator<Item = (&Image, &Image)> + '_ {
        self.split_indices(split).map(move |i| self.frame(i))
    }

    pub fn pixel_clip_quantile(&self) -> Option<f32> {
        self.pixel_clip_quantile
    }

    pub fn clip_threshold(&self) -> Option<f32> {
        self.clip_threshold
    }

    /// Smallest frame height and width over the whole set.
    pub fn min_frame_dims(&self) -> (usize, usize) {
        self.frames_c0.iter().fold((usize::MAX, usize::MAX), |(h, w), f| {
            (h.min(f.height()), w.min(f.width()))
        })
    }

    /// Upper-clips every frame at the `quantile` of the pooled training-split
    /// pixels of both channels. Re-applying with the same quantile is a no-op.
    pub fn apply_clip(&mut self, quantile: f32) -> Result<f32> {
        if !(quantile > 0.0 && quantile <= 1.0) {
            return Err(Error::Range(format!(
                "clip quantile {quantile} outside (0, 1]"
            )));
        }
        let range = self.split_indices(Split::Train);
        if range.is_empty() {
            return Err(Error::Empty("training split is empty".into()));
        }
        let mut pooled: Vec<f32> = Vec::new();
        for i in range {
            pooled.extend_from_slice(self.frames_c0[i].data());
            pooled.extend_from_slice(self.frames_c1[i].data());
        }
        let threshold = quantile_nearest_rank(&mut pooled, quantile as f64);
        for img in self.frames_c0.iter_mut().chain(self.frames_c1.iter_mut()) {
            for v in img.data_mut() {
                if *v > threshold {
                    *v = threshold;
                }
            }
        }
        self.pixel_clip_quantile = Some(quantile);
        self.clip_threshold = Some(threshold);
        Ok(threshold)
    }

    /// Content fingerprint over name, split layout and all pixel values.
    pub fn fingerprint(&self) -> String {
        let mut h = Hasher::new("scsplit.dataset.v1");
        h.bytes(self.name.as_bytes())
            .u64(self.splits.train as u64)
            .u64(self.splits.val as u64)
            .u64(self.splits.test as u64);
        for (a, b) in self.frames_c0.iter().zip(&self.frames_c1) {
            h.u64(a.height() as u64).u64(a.width() as u64);
            h.f32s(a.data()).f32s(b.data());
        }
        h.finish()
    }

    /// A copy with channels swapped, used for symmetry checks.
    pub fn swapped(&self) -> ChannelFrameSet {
        ChannelFrameSet {
            name: format!("{}-swapped", self.name),
            frames_c0: self.frames_c1.clone(),
            frames_c1: self.frames_c0.clone(),
            ..self.clone()
        }
    }
}

/// Nearest-rank quantile: the smallest value with at least `q * n` values at or
/// below it. Reorders `values`.
pub(crate) fn quantile_nearest_rank(values: &mut [f32], q: f64) -> f32 {
    assert!(!values.is_empty());
    let n = values.len();
    let rank = ((q * n as f64).ceil() as usize).clamp(1, n);
    let (_, v, _) = values.select_nth_unstable_by(rank - 1, |a, b| a.total_cmp(b));
    *v
}
