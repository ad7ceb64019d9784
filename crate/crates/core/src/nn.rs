//! Parameterized layers over the tensor graph.

use vton_tensor::{Bound, GaussianRng, Graph, ParamId, ParamStore, Tensor, Var};

use crate::error::Result;

/// Largest group count `<= 8` that divides `channels` with at least four
/// channels per group.
pub fn norm_groups(channels: usize) -> usize {
    (1..=8).rev().find(|g| channels.is_multiple_of(*g) && channels / g >= 4).unwrap_or(1)
}

#[derive(Clone, Debug)]
pub struct Conv2d {
    w: ParamId,
    b: ParamId,
    stride: usize,
    pad: usize,
}

impl Conv2d {
    /// Square kernel `k` (odd), "same" padding.
    pub fn new(store: &mut ParamStore, name: &str, cin: usize, cout: usize, k: usize, stride: usize, rng: &mut GaussianRng) -> Self {
        let std = 1.0 / ((cin * k * k) as f64).sqrt();
        let w = store.add(format!("{name}.weight"), Tensor::randn_scaled(&[cout, cin, k, k], std, rng));
        let b = store.add(format!("{name}.bias"), Tensor::zeros(&[cout]));
        Self { w, b, stride, pad: k / 2 }
    }

    pub fn forward(&self, g: &mut Graph, p: &Bound, x: Var) -> Result<Var> {
        let y = g.conv2d(x, p.var(self.w), self.stride, self.pad)?;
        Ok(g.add_bias(y, p.var(self.b))?)
    }
}

#[derive(Clone, Debug)]
pub struct Linear {
    w: ParamId,
    b: ParamId,
}

impl Linear {
    pub fn new(store: &mut ParamStore, name: &str, din: usize, dout: usize, rng: &mut GaussianRng) -> Self {
        let std = 1.0 / (din as f64).sqrt();
        let w = store.add(format!("{name}.weight"), Tensor::randn_scaled(&[din, dout], std, rng));
        let b = store.add(format!("{name}.bias"), Tensor::zeros(&[dout]));
        Self { w, b }
    }

    /// `x: [B, din] -> [B, dout]`
    pub fn forward(&self, g: &mut Graph, p: &Bound, x: Var) -> Result<Var> {
        let y = g.matmul(x, p.var(self.w))?;
        Ok(g.add_bias(y, p.var(self.b))?)
    }
}

#[derive(Clone, Debug)]
pub struct GroupNorm {
    gamma: ParamId,
    beta: ParamId,
    groups: usize,
}

impl GroupNorm {
    pub fn new(store: &mut ParamStore, name: &str, channels: usize) -> Self {
        let gamma = store.add(format!("{name}.gamma"), Tensor::ones(&[channels]));
        let beta = store.add(format!("{name}.beta"), Tensor::zeros(&[channels]));
        Self {
            gamma,
            beta,
            groups: norm_groups(channels),
        }
    }

    pub fn forward(&self, g: &mut Graph, p: &Bound, x: Var) -> Result<Var> {
        Ok(g.group_norm(x, self.groups, p.var(self.gamma), p.var(self.beta))?)
    }
}

/// Channel-axis layer norm applied at every spatial position.
#[derive(Clone, Debug)]
pub struct LayerNorm {
    gamma: ParamId,
    beta: ParamId,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, channels: usize) -> Self {
        let gamma = store.add(format!("{name}.gamma"), Tensor::ones(&[channels]));
        let beta = store.add(format!("{name}.beta"), Tensor::zeros(&[channels]));
        Self { gamma, beta }
    }

    pub fn forward(&self, g: &mut Graph, p: &Bound, x: Var) -> Result<Var> {
        Ok(g.layer_norm(x, p.var(self.gamma), p.var(self.beta))?)
    }
}

/// `GN -> SiLU -> conv3 (+ time) -> GN -> SiLU -> conv3`, plus a 1x1 skip
/// projection when the channel count changes.
#[derive(Clone, Debug)]
pub struct ResBlock {
    norm1: GroupNorm,
    conv1: Conv2d,
    time_proj: Option<Linear>,
    norm2: GroupNorm,
    conv2: Conv2d,
    skip: Option<Conv2d>,
}

impl ResBlock {
    pub fn new(store: &mut ParamStore, name: &str, cin: usize, cout: usize, time_dim: Option<usize>, rng: &mut GaussianRng) -> Self {
        Self {
            norm1: GroupNorm::new(store, &format!("{name}.norm1"), cin),
            conv1: Conv2d::new(store, &format!("{name}.conv1"), cin, cout, 3, 1, rng),
            time_proj: time_dim.map(|d| Linear::new(store, &format!("{name}.time"), d, cout, rng)),
            norm2: GroupNorm::new(store, &format!("{name}.norm2"), cout),
            conv2: Conv2d::new(store, &format!("{name}.conv2"), cout, cout, 3, 1, rng),
            skip: (cin != cout).then(|| Conv2d::new(store, &format!("{name}.skip"), cin, cout, 1, 1, rng)),
        }
    }

    /// `temb` is the already activated time embedding `[B, time_dim]`.
    pub fn forward(&self, g: &mut Graph, p: &Bound, x: Var, temb: Option<Var>) -> Result<Var> {
        let h = self.norm1.forward(g, p, x)?;
        let h = g.silu(h);
        let mut h = self.conv1.forward(g, p, h)?;
        if let (Some(proj), Some(t)) = (&self.time_proj, temb) {
            let tp = proj.forward(g, p, t)?;
            h = g.add_bias(h, tp)?;
        }
        let h = self.norm2.forward(g, p, h)?;
        let h = g.silu(h);
        let h = self.conv2.forward(g, p, h)?;
        let skip = match &self.skip {
            Some(s) => s.forward(g, p, x)?,
            None => x,
        };
        Ok(g.add(h, skip)?)
    }
}
