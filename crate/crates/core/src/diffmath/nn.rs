//! Small layer helpers shared by every network.

use rand::Rng;

use super::graph::{Graph, Var};
use super::params::{ParamId, ParamStore};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// How a network's parameters enter a graph.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Bind {
    /// Differentiable leaves; gradients reach the store.
    Train,
    /// Constants; the network is frozen for this graph.
    Freeze,
}

/// Read access to a parameter store under a binding mode.
#[derive(Clone, Copy)]
pub struct Params<'a> {
    pub store: &'a ParamStore,
    pub bind: Bind,
}

impl<'a> Params<'a> {
    pub fn train(store: &'a ParamStore) -> Self {
        Params {
            store,
            bind: Bind::Train,
        }
    }

    pub fn freeze(store: &'a ParamStore) -> Self {
        Params {
            store,
            bind: Bind::Freeze,
        }
    }

    pub fn get(&self, g: &mut Graph, id: ParamId) -> Var {
        match self.bind {
            Bind::Train => g.param(self.store, id),
            Bind::Freeze => g.frozen(self.store, id),
        }
    }
}

/// 2-D convolution with a per-channel bias.
#[derive(Clone, Debug)]
pub struct Conv {
    pub weight: ParamId,
    pub bias: ParamId,
    pub c_in: usize,
    pub c_out: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl Conv {
    /// Same-padded convolution with He-normal weights and zero bias.
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        c_in: usize,
        c_out: usize,
        kernel: usize,
        rng: &mut R,
    ) -> Self {
        let weight = store.add_he(
            format!("{name}.weight"),
            &[c_out, c_in, kernel, kernel],
            c_in * kernel * kernel,
            rng,
        );
        let bias = store.add(format!("{name}.bias"), Tensor::zeros(&[c_out, 1, 1]));
        Conv {
            weight,
            bias,
            c_in,
            c_out,
            kernel,
            stride: 1,
            pad: kernel / 2,
        }
    }

    pub fn forward(&self, g: &mut Graph, p: Params, x: Var) -> Result<Var> {
        let w = p.get(g, self.weight);
        let b = p.get(g, self.bias);
        let y = g.conv2d(x, w, self.stride, self.pad)?;
        g.add(y, b)
    }

    /// Scale the initial weights (e.g. to start a residual branch small).
    pub fn scale_init(&self, store: &mut ParamStore, factor: f64) {
        for v in store.value_mut(self.weight).data_mut() {
            *v *= factor;
        }
    }

    pub fn zero(&self, store: &mut ParamStore) {
        store.value_mut(self.weight).data_mut().fill(0.0);
        store.value_mut(self.bias).data_mut().fill(0.0);
    }

    pub fn param_ids(&self) -> [ParamId; 2] {
        [self.weight, self.bias]
    }
}

/// Token-wise affine map: `[N, in] -> [N, out]`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Linear {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, d_in: usize, d_out: usize, rng: &mut R) -> Self {
        let std = (1.0 / d_in as f64).sqrt();
        let weight = store.add(format!("{name}.weight"), Tensor::randn(&[d_in, d_out], std, rng));
        let bias = store.add(format!("{name}.bias"), Tensor::zeros(&[1, d_out]));
        Linear { weight, bias }
    }

    pub fn forward(&self, g: &mut Graph, p: Params, x: Var) -> Result<Var> {
        let w = p.get(g, self.weight);
        let b = p.get(g, self.bias);
        let y = g.matmul(x, w)?;
        g.add(y, b)
    }

    pub fn param_ids(&self) -> [ParamId; 2] {
        [self.weight, self.bias]
    }
}

/// 2x2 average pooling of a `[C, H, W]` tensor with even extents.
pub fn avg_pool2(g: &mut Graph, x: Var) -> Result<Var> {
    let s = g.shape(x).to_vec();
    if s.len() != 3 || !s[1].is_multiple_of(2) || !s[2].is_multiple_of(2) {
        return Err(Error::shape("avg_pool2", format!("{s:?}")));
    }
    let (c, h, w) = (s[0], s[1] / 2, s[2] / 2);
    let r = g.reshape(x, &[c, h, 2, w, 2])?;
    let p = g.permute(r, &[0, 1, 3, 2, 4])?;
    let f = g.reshape(p, &[c, h, w, 4])?;
    let m = g.mean(f, 3)?;
    g.reshape(m, &[c, h, w])
}

/// `[C, H, W] -> [H·W, C]` token matrix.
pub fn to_tokens(g: &mut Graph, x: Var) -> Result<Var> {
    let s = g.shape(x).to_vec();
    let flat = g.reshape(x, &[s[0], s[1] * s[2]])?;
    g.transpose(flat)
}

/// `[H·W, C] -> [C, H, W]`.
pub fn from_tokens(g: &mut Graph, t: Var, h: usize, w: usize) -> Result<Var> {
    let c = g.shape(t)[1];
    let tr = g.transpose(t)?;
    g.reshape(tr, &[c, h, w])
}
