//! Linear layers over the parameter store.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::kernels::{Graph, ParamId, ParamStore, Tensor, Var};
use crate::Result;

/// `y = x·W + b` with `W` stored as `[in × out]`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub fan_in: usize,
    pub fan_out: usize,
}

impl Linear {
    /// Xavier-uniform weights scaled by `gain`, zero bias.
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        fan_in: usize,
        fan_out: usize,
        gain: f64,
        rng: &mut impl Rng,
    ) -> Self {
        let bound = gain * (6.0 / (fan_in + fan_out) as f64).sqrt();
        let w = Tensor::from_fn(&[fan_in, fan_out], |_| rng.gen_range(-bound..bound));
        Self::from_tensors(store, name, w, Tensor::zeros(&[fan_out]))
    }

    pub fn from_tensors(store: &mut ParamStore, name: &str, weight: Tensor, bias: Tensor) -> Self {
        let (fan_in, fan_out) = (weight.shape()[0], weight.shape()[1]);
        Self {
            weight: store.add(format!("{name}.weight"), weight),
            bias: store.add(format!("{name}.bias"), bias),
            fan_in,
            fan_out,
        }
    }

    pub fn forward<'g>(&self, g: &'g Graph<'_>, x: &Var<'g>) -> Result<Var<'g>> {
        x.matmul(&g.param(self.weight))?.add_row(&g.param(self.bias))
    }

    /// Value-only forward of one input row, outside any graph.
    pub fn apply(&self, store: &ParamStore, x: &[f64]) -> Vec<f64> {
        let w = store.value(self.weight);
        let mut y = store.value(self.bias).data().to_vec();
        for (i, xi) in x.iter().enumerate() {
            for (yo, wv) in y.iter_mut().zip(w.row(i)) {
                *yo += xi * wv;
            }
        }
        y
    }

    pub fn fill_bias(&self, store: &mut ParamStore, value: f64) {
        store.value_mut(self.bias).data_mut().fill(value);
    }

    pub fn params(&self) -> [ParamId; 2] {
        [self.weight, self.bias]
    }
}

/// Two linear layers with a ReLU between them.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Mlp2 {
    pub hidden: Linear,
    pub out: Linear,
}

impl Mlp2 {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        dims: [usize; 3],
        out_gain: f64,
        rng: &mut impl Rng,
    ) -> Self {
        Self {
            hidden: Linear::new(store, &format!("{name}.0"), dims[0], dims[1], 1.0, rng),
            out: Linear::new(store, &format!("{name}.1"), dims[1], dims[2], out_gain, rng),
        }
    }

    pub fn forward<'g>(&self, g: &'g Graph<'_>, x: &Var<'g>) -> Result<Var<'g>> {
        let h = self.hidden.forward(g, x)?.relu();
        self.out.forward(g, &h)
    }

    pub fn params(&self) -> [ParamId; 4] {
        [
            self.hidden.weight,
            self.hidden.bias,
            self.out.weight,
            self.out.bias,
        ]
    }
}

pub(crate) fn normal_tensor(shape: &[usize], std: f64, rng: &mut impl Rng) -> Tensor {
    let n = Normal::new(0.0, std).expect("finite std");
    Tensor::from_fn(shape, |_| n.sample(rng))
}
