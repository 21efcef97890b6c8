//! Parameterized building blocks shared by the task network and the
//! attention pyramid.

use rand::Rng;

use crate::autodiff::{Graph, ParamId, ParamStore, Var};
use crate::tensor::{Tensor, TensorError};

#[derive(Clone, Debug)]
pub struct Conv2dLayer {
    pub weight: ParamId,
    pub bias: ParamId,
    pub stride: usize,
    pub pad: usize,
}

impl Conv2dLayer {
    /// He-uniform weights, zero bias. Registers `{name}.weight` and `{name}.bias`.
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        cin: usize,
        cout: usize,
        k: usize,
        stride: usize,
        pad: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let bound = (6.0 / (cin * k * k) as f64).sqrt();
        let w = Tensor::from_fn(&[cout, cin, k, k], |_| rng.gen_range(-bound..bound));
        Self {
            weight: store.add(format!("{name}.weight"), w),
            bias: store.add(format!("{name}.bias"), Tensor::zeros(&[cout])),
            stride,
            pad,
        }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var, TensorError> {
        let w = g.param(store, self.weight);
        let b = g.param(store, self.bias);
        g.conv2d(x, w, b, self.stride, self.pad)
    }

    pub fn in_channels(&self, store: &ParamStore) -> usize {
        store.value(self.weight).shape()[1]
    }

    pub fn out_channels(&self, store: &ParamStore) -> usize {
        store.value(self.weight).shape()[0]
    }
}

/// Uniform `±1/sqrt(fan_in)` matrix of shape `[dout×din]`.
pub fn init_matrix(rng: &mut impl Rng, dout: usize, din: usize) -> Tensor {
    let bound = 1.0 / (din as f64).sqrt();
    Tensor::from_fn(&[dout, din], |_| rng.gen_range(-bound..bound))
}
