//! Parameterised building blocks shared by the backbones and the head.

use rand_distr::{Distribution, Normal};

use super::params::{BufferId, ParamId, ParamStore, Pass};
use crate::error::{Error, Result};
use crate::real::Real;
use crate::rng::Rng;
use crate::tensor::{Tensor, Var};

/// He (Kaiming) normal initialisation: `N(0, 2 / fan_in)`.
pub fn he_init<T: Real>(shape: &[usize], fan_in: usize, rng: &mut Rng) -> Result<Tensor<T>> {
    if fan_in == 0 {
        return Err(Error::contract("he_init needs fan_in ≥ 1"));
    }
    let std = (2.0 / fan_in as f64).sqrt();
    let normal = Normal::new(0.0, std).expect("positive std");
    Ok(Tensor::from_fn(shape, |_| T::lit(normal.sample(rng))))
}

/// Allocates named parameters into a store under a path prefix.
pub struct Builder<'a, T> {
    store: &'a mut ParamStore<T>,
    rng: &'a mut Rng,
    prefix: String,
}

impl<'a, T: Real> Builder<'a, T> {
    pub fn new(store: &'a mut ParamStore<T>, rng: &'a mut Rng) -> Self {
        Builder {
            store,
            rng,
            prefix: String::new(),
        }
    }

    pub fn sub(&mut self, name: &str) -> Builder<'_, T> {
        let prefix = if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{name}", self.prefix)
        };
        Builder {
            store: self.store,
            rng: self.rng,
            prefix,
        }
    }

    fn path(&self, name: &str) -> String {
        if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{name}", self.prefix)
        }
    }

    pub fn he(&mut self, name: &str, shape: &[usize], fan_in: usize) -> Result<ParamId> {
        let t = he_init(shape, fan_in, self.rng)?;
        Ok(self.store.add_param(self.path(name), t))
    }

    pub fn filled(&mut self, name: &str, shape: &[usize], value: f64) -> ParamId {
        self.store
            .add_param(self.path(name), Tensor::full(shape, T::lit(value)))
    }

    pub fn buffer(&mut self, name: &str, shape: &[usize], value: f64) -> BufferId {
        self.store
            .add_buffer(self.path(name), Tensor::full(shape, T::lit(value)))
    }
}

#[derive(Clone, Debug)]
pub struct Conv2d {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Real>(
        b: &mut Builder<'_, T>,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
        bias: bool,
    ) -> Result<Self> {
        let weight = b.he(
            "weight",
            &[out_channels, in_channels, kernel, kernel],
            in_channels * kernel * kernel,
        )?;
        let bias = bias.then(|| b.filled("bias", &[out_channels], 0.0));
        Ok(Conv2d {
            weight,
            bias,
            in_channels,
            out_channels,
            kernel,
            stride,
            pad,
        })
    }

    pub fn forward<T: Real>(&self, pass: &Pass<'_, T>, x: Var) -> Result<Var> {
        let w = pass.param(self.weight);
        let b = self.bias.map(|b| pass.param(b));
        pass.tape().conv2d(x, w, b, self.stride, self.pad)
    }
}

#[derive(Clone, Debug)]
pub struct BatchNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: BufferId,
    pub running_var: BufferId,
}

/// Normalisation epsilon used by every batch-norm layer.
pub const BN_EPS: f64 = 1e-5;

impl BatchNorm {
    pub fn new<T: Real>(b: &mut Builder<'_, T>, channels: usize) -> Self {
        BatchNorm {
            gamma: b.filled("gamma", &[channels], 1.0),
            beta: b.filled("beta", &[channels], 0.0),
            running_mean: b.buffer("running_mean", &[channels], 0.0),
            running_var: b.buffer("running_var", &[channels], 1.0),
        }
    }

    pub fn forward<T: Real>(&self, pass: &Pass<'_, T>, x: Var) -> Result<Var> {
        let g = pass.param(self.gamma);
        let b = pass.param(self.beta);
        let eps = T::lit(BN_EPS);
        if pass.training() {
            let (y, stats) = pass.tape().batch_norm(x, g, b, None, eps)?;
            if let Some(stats) = stats {
                pass.record_stats(self.running_mean, self.running_var, stats);
            }
            Ok(y)
        } else {
            let store = pass.store();
            let mean = store.buffer(self.running_mean).data();
            let var = store.buffer(self.running_var).data();
            let (y, _) = pass.tape().batch_norm(x, g, b, Some((mean, var)), eps)?;
            Ok(y)
        }
    }
}

/// Convolution (without bias) followed by batch norm and optional relu.
#[derive(Clone, Debug)]
pub struct ConvBn {
    pub conv: Conv2d,
    pub bn: BatchNorm,
    pub relu: bool,
}

impl ConvBn {
    pub fn new<T: Real>(
        b: &mut Builder<'_, T>,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        relu: bool,
    ) -> Result<Self> {
        let conv = Conv2d::new(
            &mut b.sub("conv"),
            in_channels,
            out_channels,
            kernel,
            stride,
            kernel / 2,
            false,
        )?;
        let bn = BatchNorm::new(&mut b.sub("bn"), out_channels);
        Ok(ConvBn { conv, bn, relu })
    }

    pub fn forward<T: Real>(&self, pass: &Pass<'_, T>, x: Var) -> Result<Var> {
        let y = self.conv.forward(pass, x)?;
        let y = self.bn.forward(pass, y)?;
        if self.relu {
            pass.tape().relu(y)
        } else {
            Ok(y)
        }
    }
}

/// `y = x·W + b` with `W` stored as `[in, out]`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub in_features: usize,
    pub out_features: usize,
}

impl Linear {
    pub fn new<T: Real>(
        b: &mut Builder<'_, T>,
        in_features: usize,
        out_features: usize,
    ) -> Result<Self> {
        Ok(Linear {
            weight: b.he("weight", &[in_features, out_features], in_features)?,
            bias: b.filled("bias", &[out_features], 0.0),
            in_features,
            out_features,
        })
    }

    /// Applies to a `[M, in]` matrix.
    pub fn forward<T: Real>(&self, pass: &Pass<'_, T>, x: Var) -> Result<Var> {
        let tape = pass.tape();
        let y = tape.matmul(x, pass.param(self.weight))?;
        tape.add_bias_last(y, pass.param(self.bias))
    }
}
