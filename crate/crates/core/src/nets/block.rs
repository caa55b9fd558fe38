use super::tensor::{leaky_relu, leaky_relu_backward, Conv, Film, ParamAlloc, Tensor};
use crate::rng::Rng;

/// Two 3x3 convolutions with leaky ReLUs, optionally FiLM-modulated after the
/// first convolution.
#[derive(Clone, Debug, PartialEq)]
pub(crate) struct ConvBlock {
    pub a: Conv,
    pub b: Conv,
    pub film: Option<Film>,
}

pub(crate) struct BlockTape {
    x: Tensor,
    a_out: Option<Tensor>,
    a_pre: Tensor,
    h: Tensor,
    b_pre: Tensor,
}

impl ConvBlock {
    pub fn new(alloc: &mut ParamAlloc, cin: usize, cout: usize, film: bool) -> Self {
        let a = Conv::new(alloc, cin, cout, 3);
        let film = film.then(|| Film::new(alloc, cout));
        let b = Conv::new(alloc, cout, cout, 3);
        Self { a, b, film }
    }

    pub fn init(&self, p: &mut [f32], rng: &mut Rng) {
        self.a.init(p, rng);
        if let Some(f) = &self.film {
            f.init(p, rng);
        }
        self.b.init(p, rng);
    }

    pub fn forward(&self, p: &[f32], x: Tensor, s: f32) -> (Tensor, BlockTape) {
        let a_out = self.a.forward(p, &x);
        let (a_pre, a_out) = match &self.film {
            Some(f) => (f.forward(p, &a_out, s), Some(a_out)),
            None => (a_out, None),
        };
        let h = leaky_relu(&a_pre);
        let b_pre = self.b.forward(p, &h);
        let out = leaky_relu(&b_pre);
        (
            out,
            BlockTape {
                x,
                a_out,
                a_pre,
                h,
                b_pre,
            },
        )
    }

    pub fn forward_only(&self, p: &[f32], x: &Tensor, s: f32) -> Tensor {
        let mut a = self.a.forward(p, x);
        if let Some(f) = &self.film {
            a = f.forward(p, &a, s);
        }
        let h = leaky_relu(&a);
        leaky_relu(&self.b.forward(p, &h))
    }

    pub fn backward(
        &self,
        p: &[f32],
        tape: &BlockTape,
        s: f32,
        d_out: &Tensor,
        g: &mut [f32],
        need_dx: bool,
    ) -> Option<Tensor> {
        let d_bpre = leaky_relu_backward(&tape.b_pre, d_out);
        let dh = self
            .b
            .backward(p, &tape.h, &d_bpre, g, true)
            .expect("dx requested");
        let mut d_a = leaky_relu_backward(&tape.a_pre, &dh);
        if let (Some(f), Some(a_out)) = (&self.film, &tape.a_out) {
            d_a = f.backward(p, a_out, s, &d_a, g);
        }
        self.a.backward(p, &tape.x, &d_a, g, need_dx)
    }
}
