//! Parameterized building blocks. Each layer owns [`ParamId`]s into a shared
//! [`ParamStore`] and records its forward pass on a [`Graph`].

use rand::Rng;

use crate::{Graph, ParamId, ParamStore, Tensor, Var};

/// Fully connected layer, weight `[out, in]`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub in_features: usize,
    pub out_features: usize,
}

impl Linear {
    /// Uniform init in `±init_scale / sqrt(in)`.
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        in_features: usize,
        out_features: usize,
        bias: bool,
        init_scale: f64,
        rng: &mut R,
    ) -> Self {
        let bound = init_scale / (in_features as f64).sqrt();
        let weight = store.insert(
            format!("{name}.weight"),
            Tensor::uniform(&[out_features, in_features], bound, rng),
        );
        let bias = bias.then(|| store.insert(format!("{name}.bias"), Tensor::zeros(&[out_features])));
        Self {
            weight,
            bias,
            in_features,
            out_features,
        }
    }

    pub fn forward(&self, g: &mut Graph<'_>, x: Var) -> Var {
        let w = g.param(self.weight);
        let b = self.bias.map(|b| g.param(b));
        g.linear(x, w, b)
    }
}

/// Square-kernel 2-D convolution with bias.
#[derive(Clone, Debug)]
pub struct Conv2d {
    pub weight: ParamId,
    pub bias: ParamId,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        cin: usize,
        cout: usize,
        kernel: usize,
        stride: usize,
        init_scale: f64,
        rng: &mut R,
    ) -> Self {
        let fan_in = (cin * kernel * kernel) as f64;
        let bound = init_scale / fan_in.sqrt();
        let weight = store.insert(
            format!("{name}.weight"),
            Tensor::uniform(&[cout, cin, kernel, kernel], bound, rng),
        );
        let bias = store.insert(format!("{name}.bias"), Tensor::zeros(&[cout]));
        Self {
            weight,
            bias,
            kernel,
            stride,
            pad: kernel / 2,
        }
    }

    pub fn forward(&self, g: &mut Graph<'_>, x: Var) -> Var {
        let w = g.param(self.weight);
        let b = g.param(self.bias);
        g.conv2d(x, w, Some(b), self.stride, self.pad)
    }
}

#[derive(Clone, Debug)]
pub struct GroupNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub groups: usize,
}

impl GroupNorm {
    pub const EPS: f64 = 1e-5;

    pub fn new(store: &mut ParamStore, name: &str, channels: usize, groups: usize) -> Self {
        assert_eq!(channels % groups, 0, "{name}: {channels} channels vs {groups} groups");
        Self {
            gamma: store.insert(format!("{name}.gamma"), Tensor::full(&[channels], 1.0)),
            beta: store.insert(format!("{name}.beta"), Tensor::zeros(&[channels])),
            groups,
        }
    }

    pub fn forward(&self, g: &mut Graph<'_>, x: Var) -> Var {
        let gamma = g.param(self.gamma);
        let beta = g.param(self.beta);
        g.group_norm(x, gamma, beta, self.groups, Self::EPS)
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub const EPS: f64 = 1e-5;

    pub fn new(store: &mut ParamStore, name: &str, dim: usize) -> Self {
        Self {
            gamma: store.insert(format!("{name}.gamma"), Tensor::full(&[dim], 1.0)),
            beta: store.insert(format!("{name}.beta"), Tensor::zeros(&[dim])),
        }
    }

    pub fn forward(&self, g: &mut Graph<'_>, x: Var) -> Var {
        let gamma = g.param(self.gamma);
        let beta = g.param(self.beta);
        g.layer_norm(x, gamma, beta, Self::EPS)
    }
}

/// Largest group count `<= preferred` that divides `channels`.
pub fn norm_groups(channels: usize, preferred: usize) -> usize {
    (1..=preferred.min(channels))
        .rev()
        .find(|g| channels % g == 0)
        .unwrap_or(1)
}
