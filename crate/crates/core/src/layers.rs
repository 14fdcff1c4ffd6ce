//! Parameterised layers built from graph ops.

use rand_distr::{Distribution, Normal};

use crate::autograd::{Graph, ParamId, ParamStore, Var};
use crate::error::Result;
use crate::seed::Rng;
use crate::tensor::{Scalar, Tensor};

#[derive(Debug, Clone)]
pub struct Conv2dLayer {
    pub weight: ParamId,
    pub bias: ParamId,
    pub stride: usize,
    pub padding: usize,
}

impl Conv2dLayer {
    /// He-normal weights, zero bias.
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        rng: &mut Rng,
    ) -> Self {
        let fan_in = (in_channels * kernel * kernel) as f64;
        let normal = Normal::new(0.0, (2.0 / fan_in).sqrt()).expect("positive std");
        let shape = [out_channels, in_channels, kernel, kernel];
        let w = Tensor::from_fn(&shape, |_| T::from_f64_lossy(normal.sample(rng)));
        Conv2dLayer {
            weight: store.add(format!("{name}.weight"), w),
            bias: store.add(format!("{name}.bias"), Tensor::zeros(&[out_channels])),
            stride,
            padding,
        }
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, params: &ParamStore<T>, x: Var) -> Result<Var> {
        let w = g.param(params, self.weight)?;
        let b = g.param(params, self.bias)?;
        g.conv2d(x, w, Some(b), self.stride, self.padding)
    }
}

/// Batch statistics from one training forward pass, to be folded into the
/// running averages after the optimizer step.
#[derive(Debug, Clone)]
pub struct RunningStatsUpdate<T> {
    pub mean_buffer: ParamId,
    pub var_buffer: ParamId,
    pub batch_mean: Vec<T>,
    pub batch_var: Vec<T>,
}

#[derive(Debug, Clone)]
pub struct BatchNormLayer {
    pub gamma: ParamId,
    pub beta: ParamId,
    /// Indices into the model's buffer store (not optimised).
    pub running_mean: ParamId,
    pub running_var: ParamId,
    pub eps: f64,
    pub momentum: f64,
}

impl BatchNormLayer {
    pub fn new<T: Scalar>(
        params: &mut ParamStore<T>,
        buffers: &mut ParamStore<T>,
        name: &str,
        channels: usize,
    ) -> Self {
        BatchNormLayer {
            gamma: params.add(format!("{name}.gamma"), Tensor::ones(&[channels])),
            beta: params.add(format!("{name}.beta"), Tensor::zeros(&[channels])),
            running_mean: buffers.add(format!("{name}.running_mean"), Tensor::zeros(&[channels])),
            running_var: buffers.add(format!("{name}.running_var"), Tensor::ones(&[channels])),
            eps: 1e-5,
            momentum: 0.1,
        }
    }

    pub fn forward_train<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        params: &ParamStore<T>,
        x: Var,
    ) -> Result<(Var, RunningStatsUpdate<T>)> {
        let gamma = g.param(params, self.gamma)?;
        let beta = g.param(params, self.beta)?;
        let (y, mean, var) = g.batchnorm(x, gamma, beta, T::from_f64_lossy(self.eps))?;
        Ok((
            y,
            RunningStatsUpdate {
                mean_buffer: self.running_mean,
                var_buffer: self.running_var,
                batch_mean: mean,
                batch_var: var,
            },
        ))
    }

    pub fn forward_eval<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        params: &ParamStore<T>,
        buffers: &ParamStore<T>,
        x: Var,
    ) -> Result<Var> {
        let gamma = g.param(params, self.gamma)?;
        let beta = g.param(params, self.beta)?;
        g.batchnorm_eval(
            x,
            gamma,
            beta,
            buffers.get(self.running_mean),
            buffers.get(self.running_var),
            T::from_f64_lossy(self.eps),
        )
    }

    pub fn apply_update<T: Scalar>(&self, buffers: &mut ParamStore<T>, update: &RunningStatsUpdate<T>) {
        let m = T::from_f64_lossy(self.momentum);
        let keep = T::one() - m;
        for (r, &b) in buffers
            .get_mut(update.mean_buffer)
            .data_mut()
            .iter_mut()
            .zip(&update.batch_mean)
        {
            *r = keep * *r + m * b;
        }
        for (r, &b) in buffers
            .get_mut(update.var_buffer)
            .data_mut()
            .iter_mut()
            .zip(&update.batch_var)
        {
            *r = keep * *r + m * b;
        }
    }
}
