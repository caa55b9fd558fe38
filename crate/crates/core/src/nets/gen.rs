//! Severity-conditioned encoder-decoder generator.

use serde::{Deserialize, Serialize};

use super::block::{BlockTape, ConvBlock};
use super::tensor::{
    avg_pool2, avg_pool2_backward, concat, split_channels, upsample2, upsample2_backward, Conv,
    ParamAlloc, Tensor,
};
use crate::error::{Error, Result, Violations};
use crate::image::Image;
use crate::mixing::Channel;
use crate::rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ConditioningMode {
    /// Severity broadcast to a constant plane and concatenated to the input.
    ScalarBroadcastConcat,
    /// Severity drives per-channel scale and shift after each block's first
    /// convolution.
    FeatureFilm,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GenSpec {
    pub channel_index: Channel,
    pub depth: usize,
    pub base_width: usize,
    pub conditioning_mode: ConditioningMode,
    pub patch_size: usize,
}

impl GenSpec {
    pub fn desk(channel: Channel, patch_size: usize) -> Self {
        Self {
            channel_index: channel,
            depth: 3,
            base_width: 16,
            conditioning_mode: ConditioningMode::ScalarBroadcastConcat,
            patch_size,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let mut v = Violations::new();
        v.check(self.depth >= 2, || format!("depth {} must be at least 2", self.depth));
        v.check(self.base_width >= 1, || "base_width must be positive".into());
        let unit = 1usize << self.depth.saturating_sub(1).min(16);
        v.check(
            self.patch_size >= unit && self.patch_size.is_multiple_of(unit),
            || {
                format!(
                    "patch_size {} must be a positive multiple of {unit} for depth {}",
                    self.patch_size, self.depth
                )
            },
        );
        v.into_result()
    }

    /// Side lengths must be divisible by this for the pooling pyramid.
    pub fn size_unit(&self) -> usize {
        1 << (self.depth - 1)
    }
}

#[derive(Clone, Debug, PartialEq)]
struct Layout {
    enc: Vec<ConvBlock>,
    dec: Vec<ConvBlock>,
    out: Conv,
    n_params: usize,
}

impl Layout {
    fn new(spec: &GenSpec) -> Self {
        let film = spec.conditioning_mode == ConditioningMode::FeatureFilm;
        let in_ch = if film { 1 } else { 2 };
        let width = |l: usize| spec.base_width << l;
        let mut alloc = ParamAlloc::default();
        let mut enc = Vec::with_capacity(spec.depth);
        for l in 0..spec.depth {
            let cin = if l == 0 { in_ch } else { width(l - 1) };
            enc.push(ConvBlock::new(&mut alloc, cin, width(l), film));
        }
        // dec[l] merges the upsampled level l+1 with the level-l skip.
        let mut dec = Vec::with_capacity(spec.depth - 1);
        for l in 0..spec.depth - 1 {
            dec.push(ConvBlock::new(&mut alloc, width(l + 1) + width(l), width(l), film));
        }
        let out = Conv::new(&mut alloc, width(0), 1, 1);
        Self {
            enc,
            dec,
            out,
            n_params: alloc.len(),
        }
    }
}

/// Generator `Gen_i`: maps a normalized mixed patch and a severity in `[0, 1]`
/// to the normalized estimate of channel `i`.
#[derive(Clone, Debug, PartialEq)]
pub struct Generator {
    spec: GenSpec,
    layout: Layout,
    params: Vec<f32>,
}

pub struct GenTape {
    severity: f32,
    enc: Vec<BlockTape>,
    dec: Vec<BlockTape>,
    skip_widths: Vec<usize>,
    top: Tensor,
}

impl Generator {
    pub fn new(spec: GenSpec, seed: u64) -> Result<Self> {
        spec.validate()?;
        let layout = Layout::new(&spec);
        let mut params = vec![0.0f32; layout.n_params];
        let mut r = rng::stream(seed, spec.channel_index.index() as u64);
        for b in layout.enc.iter().chain(&layout.dec) {
            b.init(&mut params, &mut r);
        }
        layout.out.init(&mut params, &mut r);
        Ok(Self {
            spec,
            layout,
            params,
        })
    }

    pub fn from_params(spec: GenSpec, params: Vec<f32>) -> Result<Self> {
        spec.validate()?;
        let layout = Layout::new(&spec);
        if params.len() != layout.n_params {
            return Err(Error::shape(
                format!("{} generator parameters", layout.n_params),
                params.len(),
            ));
        }
        Ok(Self {
            spec,
            layout,
            params,
        })
    }

    pub fn spec(&self) -> &GenSpec {
        &self.spec
    }

    pub fn params(&self) -> &[f32] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f32] {
        &mut self.params
    }

    pub fn n_params(&self) -> usize {
        self.params.len()
    }

    fn check_input(&self, x: &Image, severity: f32) -> Result<()> {
        let unit = self.spec.size_unit();
        let (h, w) = x.shape();
        if h == 0 || w == 0 || h % unit != 0 || w % unit != 0 {
            return Err(Error::shape(
                format!("sides divisible by {unit}"),
                format!("{h}x{w}"),
            ));
        }
        if !(0.0..=1.0).contains(&severity) {
            return Err(Error::Range(format!("severity {severity} outside [0, 1]")));
        }
        Ok(())
    }

    fn input_tensor(&self, x: &Image, severity: f32) -> Tensor {
        match self.spec.conditioning_mode {
            ConditioningMode::ScalarBroadcastConcat => Tensor::with_constant_plane(x, severity),
            ConditioningMode::FeatureFilm => Tensor::from_image(x),
        }
    }

    pub fn forward(&self, x: &Image, severity: f32) -> Result<Image> {
        self.check_input(x, severity)?;
        let p = &self.params;
        let depth = self.spec.depth;
        let mut skips = Vec::with_capacity(depth);
        let mut h = self.input_tensor(x, severity);
        for (l, block) in self.layout.enc.iter().enumerate() {
            h = block.forward_only(p, &h, severity);
            if l + 1 < depth {
                let down = avg_pool2(&h);
                skips.push(h);
                h = down;
            }
        }
        for l in (0..depth - 1).rev() {
            let merged = concat(&upsample2(&h), &skips[l]);
            h = self.layout.dec[l].forward_only(p, &merged, severity);
        }
        Ok(self.layout.out.forward(p, &h).into_image())
    }

    pub fn forward_tape(&self, x: &Image, severity: f32) -> Result<(Image, GenTape)> {
        self.check_input(x, severity)?;
        let p = &self.params;
        let depth = self.spec.depth;
        let mut enc_tapes = Vec::with_capacity(depth);
        let mut skips: Vec<Tensor> = Vec::with_capacity(depth);
        let mut h = self.input_tensor(x, severity);
        for (l, block) in self.layout.enc.iter().enumerate() {
            let (out, tape) = block.forward(p, h, severity);
            enc_tapes.push(tape);
            if l + 1 < depth {
                h = avg_pool2(&out);
                skips.push(out);
            } else {
                h = out;
            }
        }
        let mut dec_tapes: Vec<Option<BlockTape>> = (0..depth - 1).map(|_| None).collect();
        let skip_widths = skips.iter().map(|s| s.c).collect();
        for l in (0..depth - 1).rev() {
            let merged = concat(&upsample2(&h), &skips[l]);
            let (out, tape) = self.layout.dec[l].forward(p, merged, severity);
            dec_tapes[l] = Some(tape);
            h = out;
        }
        let y = self.layout.out.forward(p, &h).into_image();
        Ok((
            y,
            GenTape {
                severity,
                enc: enc_tapes,
                dec: dec_tapes.into_iter().map(|t| t.expect("filled")).collect(),
                skip_widths,
                top: h,
            },
        ))
    }

    /// Gradient of a scalar loss w.r.t. all parameters, given `d_out` =
    /// dLoss/dOutput. Accumulates into `grads`.
    pub fn backward(&self, tape: &GenTape, d_out: &Image, grads: &mut [f32]) {
        let p = &self.params;
        let s = tape.severity;
        let depth = self.spec.depth;
        let dy = Tensor::from_image(d_out);
        let mut d = self
            .layout
            .out
            .backward(p, &tape.top, &dy, grads, true)
            .expect("dx requested");
        let mut d_skips: Vec<Option<Tensor>> = (0..depth - 1).map(|_| None).collect();
        for l in 0..depth - 1 {
            let d_merged = self.layout.dec[l]
                .backward(p, &tape.dec[l], s, &d, grads, true)
                .expect("dx requested");
            let up_c = d_merged.c - tape.skip_widths[l];
            let (d_up, d_skip) = split_channels(&d_merged, up_c);
            d_skips[l] = Some(d_skip);
            d = upsample2_backward(&d_up);
        }
        for l in (0..depth).rev() {
            if l + 1 < depth {
                d = avg_pool2_backward(&d);
                let skip = d_skips[l].take().expect("skip gradient");
                for (a, b) in d.data.iter_mut().zip(&skip.data) {
                    *a += b;
                }
            }
            let need_dx = l > 0;
            if let Some(dx) = self.layout.enc[l].backward(p, &tape.enc[l], s, &d, grads, need_dx) {
                d = dx;
            }
        }
    }
}
