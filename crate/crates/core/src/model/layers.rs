use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::numerics::{Scalar, Tensor, Var};
use crate::params::{fan_in_uniform, Binder, ParamId, ParamStore};

pub const NORM_EPS: f64 = 1e-5;

#[derive(Debug, Clone)]
pub struct Conv {
    pub weight: ParamId,
    pub bias: ParamId,
    pub stride: [usize; 3],
    pub pad: [usize; 3],
}

impl Conv {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        rng: &mut ChaCha8Rng,
        name: &str,
        cin: usize,
        cout: usize,
        kernel: [usize; 3],
        stride: [usize; 3],
        pad: [usize; 3],
    ) -> Self {
        let fan_in = cin * kernel.iter().product::<usize>();
        let weight = store.add(
            format!("{name}.weight"),
            fan_in_uniform(&[cout, cin, kernel[0], kernel[1], kernel[2]], fan_in, rng),
        );
        let bias = store.add(format!("{name}.bias"), Tensor::zeros(&[cout]));
        Self {
            weight,
            bias,
            stride,
            pad,
        }
    }

    pub fn forward<T: Scalar>(&self, bx: &mut Binder<T>, x: Var) -> Result<Var> {
        let (w, b) = (bx.p(self.weight), bx.p(self.bias));
        bx.graph.conv3d(x, w, b, self.stride, self.pad)
    }

    /// The same convolution reduced to its per-frame spatial mean `[B, C, T]`.
    pub fn forward_spatial_mean<T: Scalar>(&self, bx: &mut Binder<T>, x: Var) -> Result<Var> {
        debug_assert_eq!(self.stride, [1, 1, 1]);
        let (w, b) = (bx.p(self.weight), bx.p(self.bias));
        bx.graph.conv3d_spatial_mean(x, w, b, self.pad)
    }
}

#[derive(Debug, Clone)]
pub struct GroupNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub groups: usize,
}

impl GroupNorm {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, name: &str, channels: usize, groups: usize) -> Self {
        Self {
            gamma: store.add(format!("{name}.gamma"), Tensor::ones(&[channels])),
            beta: store.add(format!("{name}.beta"), Tensor::zeros(&[channels])),
            groups,
        }
    }

    pub fn forward<T: Scalar>(&self, bx: &mut Binder<T>, x: Var) -> Result<Var> {
        let (g, b) = (bx.p(self.gamma), bx.p(self.beta));
        bx.graph.group_norm(x, g, b, self.groups, NORM_EPS)
    }
}

#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Linear {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, rng: &mut ChaCha8Rng, name: &str, fan_in: usize, fan_out: usize) -> Self {
        Self {
            weight: store.add(format!("{name}.weight"), fan_in_uniform(&[fan_out, fan_in], fan_in, rng)),
            bias: store.add(format!("{name}.bias"), Tensor::zeros(&[fan_out])),
        }
    }

    pub fn forward<T: Scalar>(&self, bx: &mut Binder<T>, x: Var) -> Result<Var> {
        let (w, b) = (bx.p(self.weight), bx.p(self.bias));
        bx.graph.linear(x, w, Some(b))
    }
}
