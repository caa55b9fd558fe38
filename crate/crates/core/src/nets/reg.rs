//! Mixing-ratio regressor.

use serde::{Deserialize, Serialize};

use super::block::{BlockTape, ConvBlock};
use super::tensor::{
    avg_pool2, avg_pool2_backward, global_avg_pool, global_avg_pool_backward, leaky, Linear,
    ParamAlloc, Tensor, LEAKY_SLOPE,
};
use crate::error::{Error, Result, Violations};
use crate::image::Image;
use crate::rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RegHead {
    SigmoidBounded,
    ClampedLinear,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RegSpec {
    pub depth: usize,
    pub base_width: usize,
    pub head: RegHead,
    #[serde(default = "default_hidden")]
    pub hidden: usize,
}

fn default_hidden() -> usize {
    32
}

impl RegSpec {
    pub fn desk() -> Self {
        Self {
            depth: 3,
            base_width: 16,
            head: RegHead::SigmoidBounded,
            hidden: default_hidden(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let mut v = Violations::new();
        v.check(self.depth >= 1 && self.depth <= 16, || {
            format!("depth {} must lie in [1, 16]", self.depth)
        });
        v.check(self.base_width >= 1, || "base_width must be positive".into());
        v.check(self.hidden >= 1, || "hidden must be positive".into());
        v.into_result()
    }

    pub fn size_unit(&self) -> usize {
        1 << (self.depth - 1)
    }
}

#[derive(Clone, Debug, PartialEq)]
struct Layout {
    enc: Vec<ConvBlock>,
    fc1: Linear,
    fc2: Linear,
    n_params: usize,
}

impl Layout {
    fn new(spec: &RegSpec) -> Self {
        let mut alloc = ParamAlloc::default();
        let width = |l: usize| spec.base_width << l;
        let enc = (0..spec.depth)
            .map(|l| {
                let cin = if l == 0 { 1 } else { width(l - 1) };
                ConvBlock::new(&mut alloc, cin, width(l), false)
            })
            .collect();
        let fc1 = Linear::new(&mut alloc, width(spec.depth - 1), spec.hidden);
        let fc2 = Linear::new(&mut alloc, spec.hidden, 1);
        Self {
            enc,
            fc1,
            fc2,
            n_params: alloc.len(),
        }
    }
}

/// `Reg`: estimates the mixing ratio of a normalized mixed patch.
#[derive(Clone, Debug, PartialEq)]
pub struct Regressor {
    spec: RegSpec,
    layout: Layout,
    params: Vec<f32>,
}

pub struct RegTape {
    enc: Vec<BlockTape>,
    top_dims: (usize, usize, usize),
    pooled: Vec<f32>,
    hidden_pre: Vec<f32>,
    hidden: Vec<f32>,
    logit: f32,
}

impl Regressor {
    pub fn new(spec: RegSpec, seed: u64) -> Result<Self> {
        spec.validate()?;
        let layout = Layout::new(&spec);
        let mut params = vec![0.0f32; layout.n_params];
        let mut r = rng::stream(seed, 2);
        for b in &layout.enc {
            b.init(&mut params, &mut r);
        }
        layout.fc1.init(&mut params, &mut r);
        layout.fc2.init(&mut params, &mut r);
        Ok(Self {
            spec,
            layout,
            params,
        })
    }

    pub fn from_params(spec: RegSpec, params: Vec<f32>) -> Result<Self> {
        spec.validate()?;
        let layout = Layout::new(&spec);
        if params.len() != layout.n_params {
            return Err(Error::shape(
                format!("{} regressor parameters", layout.n_params),
                params.len(),
            ));
        }
        Ok(Self {
            spec,
            layout,
            params,
        })
    }

    pub fn spec(&self) -> &RegSpec {
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

    fn check_input(&self, x: &Image) -> Result<()> {
        let unit = self.spec.size_unit();
        let (h, w) = x.shape();
        if h == 0 || w == 0 || h % unit != 0 || w % unit != 0 {
            return Err(Error::shape(
                format!("sides divisible by {unit}"),
                format!("{h}x{w}"),
            ));
        }
        Ok(())
    }

    fn head(&self, z: f32) -> f32 {
        match self.spec.head {
            RegHead::SigmoidBounded => sigmoid(z),
            RegHead::ClampedLinear => {
                if z.is_nan() {
                    0.5
                } else {
                    z.clamp(0.0, 1.0)
                }
            }
        }
    }

    fn head_grad(&self, z: f32) -> f32 {
        match self.spec.head {
            RegHead::SigmoidBounded => {
                let s = sigmoid(z);
                s * (1.0 - s)
            }
            RegHead::ClampedLinear => {
                if (0.0..=1.0).contains(&z) {
                    1.0
                } else {
                    0.0
                }
            }
        }
    }

    pub fn forward(&self, x: &Image) -> Result<f32> {
        self.check_input(x)?;
        let p = &self.params;
        let mut h = Tensor::from_image(x);
        for (l, block) in self.layout.enc.iter().enumerate() {
            h = block.forward_only(p, &h, 0.0);
            if l + 1 < self.spec.depth {
                h = avg_pool2(&h);
            }
        }
        let pooled = global_avg_pool(&h);
        let hidden: Vec<f32> = self
            .layout
            .fc1
            .forward(p, &pooled)
            .into_iter()
            .map(leaky)
            .collect();
        let z = self.layout.fc2.forward(p, &hidden)[0];
        Ok(self.head(z))
    }

    pub fn forward_tape(&self, x: &Image) -> Result<(f32, RegTape)> {
        self.check_input(x)?;
        let p = &self.params;
        let mut tapes = Vec::with_capacity(self.spec.depth);
        let mut h = Tensor::from_image(x);
        for (l, block) in self.layout.enc.iter().enumerate() {
            let (out, tape) = block.forward(p, h, 0.0);
            tapes.push(tape);
            h = if l + 1 < self.spec.depth {
                avg_pool2(&out)
            } else {
                out
            };
        }
        let pooled = global_avg_pool(&h);
        let hidden_pre = self.layout.fc1.forward(p, &pooled);
        let hidden: Vec<f32> = hidden_pre.iter().map(|&v| leaky(v)).collect();
        let logit = self.layout.fc2.forward(p, &hidden)[0];
        Ok((
            self.head(logit),
            RegTape {
                enc: tapes,
                top_dims: (h.c, h.h, h.w),
                pooled,
                hidden_pre,
                hidden,
                logit,
            },
        ))
    }

    /// Accumulates parameter gradients of a loss with dLoss/dOutput = `d_out`.
    pub fn backward(&self, tape: &RegTape, d_out: f32, grads: &mut [f32]) {
        let p = &self.params;
        let dz = d_out * self.head_grad(tape.logit);
        let d_hidden = self.layout.fc2.backward(p, &tape.hidden, &[dz], grads);
        let d_hidden_pre: Vec<f32> = d_hidden
            .iter()
            .zip(&tape.hidden_pre)
            .map(|(&d, &x)| if x > 0.0 { d } else { LEAKY_SLOPE * d })
            .collect();
        let d_pooled = self
            .layout
            .fc1
            .backward(p, &tape.pooled, &d_hidden_pre, grads);
        let (c, h, w) = tape.top_dims;
        let mut d = global_avg_pool_backward(&d_pooled, c, h, w);
        for l in (0..self.spec.depth).rev() {
            if l + 1 < self.spec.depth {
                d = avg_pool2_backward(&d);
            }
            if let Some(dx) = self.layout.enc[l].backward(p, &tape.enc[l], 0.0, &d, grads, l > 0) {
                d = dx;
            }
        }
    }
}

fn sigmoid(z: f32) -> f32 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}
