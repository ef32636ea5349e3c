use rand::Rng;

use super::graph::{Graph, Var};
use super::params::{he_uniform, ParamId, ParamStore};
use super::tensor::Tensor;
use super::NumericsError;

/// Train mode uses batch statistics and records a tape; eval mode reads
/// running statistics.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Clone, Debug)]
pub struct Conv2d {
    pub weight: ParamId,
    pub bias: ParamId,
    pub stride: usize,
    pub padding: usize,
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let fan_in = in_ch * kernel * kernel;
        let weight = store.trainable(
            format!("{name}.weight"),
            he_uniform(&[out_ch, in_ch, kernel, kernel], fan_in, rng),
        );
        let bias = store.trainable(format!("{name}.bias"), Tensor::zeros(&[out_ch]));
        Self {
            weight,
            bias,
            stride,
            padding,
        }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var, NumericsError> {
        let w = g.param(store, self.weight);
        let b = g.param(store, self.bias);
        g.conv2d(x, w, Some(b), self.stride, self.padding)
    }
}

#[derive(Clone, Debug)]
pub struct ConvTranspose2d {
    pub weight: ParamId,
    pub bias: ParamId,
    pub stride: usize,
}

impl ConvTranspose2d {
    /// Kernel equal to stride: exact `stride x` upsampling.
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        in_ch: usize,
        out_ch: usize,
        stride: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let weight = store.trainable(
            format!("{name}.weight"),
            he_uniform(&[in_ch, out_ch, stride, stride], in_ch, rng),
        );
        let bias = store.trainable(format!("{name}.bias"), Tensor::zeros(&[out_ch]));
        Self {
            weight,
            bias,
            stride,
        }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var, NumericsError> {
        let w = g.param(store, self.weight);
        let b = g.param(store, self.bias);
        g.conv_transpose2d(x, w, Some(b), self.stride, 0)
    }
}

#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub in_features: usize,
    pub out_features: usize,
}

impl Linear {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        in_features: usize,
        out_features: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let weight = store.trainable(
            format!("{name}.weight"),
            he_uniform(&[out_features, in_features], in_features, rng),
        );
        let bias = store.trainable(format!("{name}.bias"), Tensor::zeros(&[out_features]));
        Self {
            weight,
            bias,
            in_features,
            out_features,
        }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var, NumericsError> {
        let w = g.param(store, self.weight);
        let b = g.param(store, self.bias);
        g.linear(x, w, Some(b))
    }
}

/// Batch normalisation with running-statistics momentum 0.1.
#[derive(Clone, Debug)]
pub struct BatchNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
    pub momentum: f64,
    pub eps: f64,
}

impl BatchNorm {
    pub fn new(store: &mut ParamStore, name: &str, channels: usize) -> Self {
        Self {
            gamma: store.trainable(format!("{name}.gamma"), Tensor::ones(&[channels])),
            beta: store.trainable(format!("{name}.beta"), Tensor::zeros(&[channels])),
            running_mean: store.buffer(format!("{name}.running_mean"), Tensor::zeros(&[channels])),
            running_var: store.buffer(format!("{name}.running_var"), Tensor::ones(&[channels])),
            momentum: 0.1,
            eps: 1e-5,
        }
    }

    pub fn forward(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        x: Var,
        mode: Mode,
    ) -> Result<Var, NumericsError> {
        g.batch_norm(
            store,
            x,
            self.gamma,
            self.beta,
            self.running_mean,
            self.running_var,
            mode == Mode::Train,
            self.momentum,
            self.eps,
        )
    }
}
