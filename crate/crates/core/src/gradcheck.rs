//! Central finite-difference checks of every differentiable path, in `f64`.
//!
//! The error of one entry is `|analytic − numeric| / max(|analytic|, |numeric|, FLOOR)`;
//! a case passes when its worst entry stays under [`TOLERANCE`]. Entries whose
//! ±step evaluations flip any ReLU are not differentiable there and are
//! skipped; a case fails if more than [`MAX_SKIPPED_FRACTION`] of its entries
//! had to be skipped.

use rand::Rng as _;
use serde::Serialize;

use crate::autograd::{Graph, ParamStore, Var};
use crate::error::Result;
use crate::layers::{BatchNormLayer, Conv2dLayer};
use crate::model::{Dcn, Mode, ModelConfig};
use crate::relation::{self, RestorationHead, COSINE_EPS};
use crate::seed::{self, Rng};
use crate::tensor::Tensor;

pub const STEP: f64 = 1e-5;
pub const TOLERANCE: f64 = 1e-4;
/// Denominator floor for entries whose true gradient is essentially zero.
pub const FLOOR: f64 = 1e-4;
pub const MAX_SKIPPED_FRACTION: f64 = 0.05;

#[derive(Debug, Clone, Serialize)]
pub struct CaseResult {
    pub name: String,
    pub entries: usize,
    /// Entries whose finite difference straddled a ReLU kink.
    pub skipped: usize,
    pub max_rel_error: f64,
    /// Input or parameter holding the worst entry, with the entry index.
    pub worst_entry: String,
    pub passed: bool,
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(FLOOR)
}

type LossFn<'a> = Box<dyn Fn(&mut Graph<f64>, &ParamStore<f64>, &[Var]) -> Result<Var> + 'a>;

/// Differentiable inputs plus a scalar loss over them.
struct Case<'a> {
    name: &'a str,
    inputs: Vec<Tensor<f64>>,
    params: ParamStore<f64>,
    loss: LossFn<'a>,
}

impl Case<'_> {
    fn value(&self, inputs: &[Tensor<f64>], params: &ParamStore<f64>) -> Result<(f64, Vec<bool>)> {
        let mut g = Graph::new();
        let vars = inputs
            .iter()
            .map(|t| g.input(t.clone()))
            .collect::<Result<Vec<_>>>()?;
        let l = (self.loss)(&mut g, params, &vars)?;
        Ok((g.value(l).item(), g.relu_pattern()))
    }

    fn run(self) -> Result<CaseResult> {
        let mut g = Graph::new();
        let vars = self
            .inputs
            .iter()
            .map(|t| g.input(t.clone()))
            .collect::<Result<Vec<_>>>()?;
        let l = (self.loss)(&mut g, &self.params, &vars)?;
        let pattern = g.relu_pattern();
        let grads = g.backward(l)?;
        let mut analytic: Vec<Tensor<f64>> = vars
            .iter()
            .zip(&self.inputs)
            .map(|(&v, t)| grads.wrt(v).cloned().unwrap_or_else(|| Tensor::zeros(t.shape())))
            .collect();
        analytic.extend(grads.for_params(&self.params));

        let mut worst = 0.0f64;
        let mut worst_entry = String::new();
        let mut entries = 0;
        let mut skipped = 0;
        let n_inputs = self.inputs.len();
        for (t, a) in analytic.iter().enumerate() {
            for i in 0..a.numel() {
                let eval = |delta: f64| -> Result<(f64, Vec<bool>)> {
                    if t < n_inputs {
                        let mut inputs = self.inputs.clone();
                        inputs[t].data_mut()[i] += delta;
                        self.value(&inputs, &self.params)
                    } else {
                        let mut params = self.params.clone();
                        let id = params.ids().nth(t - n_inputs).expect("param index");
                        params.get_mut(id).data_mut()[i] += delta;
                        self.value(&self.inputs, &params)
                    }
                };
                let ((up, up_pattern), (down, down_pattern)) = (eval(STEP)?, eval(-STEP)?);
                entries += 1;
                if up_pattern != pattern || down_pattern != pattern {
                    skipped += 1;
                    continue;
                }
                let numeric = (up - down) / (2.0 * STEP);
                let err = relative_error(a[i], numeric);
                if err > worst || worst_entry.is_empty() {
                    worst = err;
                    worst_entry = if t < n_inputs {
                        format!("input {t}[{i}]")
                    } else {
                        let id = self.params.ids().nth(t - n_inputs).expect("param index");
                        format!("{}[{i}]", self.params.name(id))
                    };
                    log::trace!("{}: {worst_entry} analytic {} numeric {numeric}", self.name, a[i]);
                }
            }
        }
        Ok(CaseResult {
            name: self.name.to_string(),
            entries,
            skipped,
            max_rel_error: worst,
            worst_entry,
            passed: worst < TOLERANCE && (skipped as f64) <= MAX_SKIPPED_FRACTION * entries as f64,
        })
    }
}

fn uniform(rng: &mut Rng, shape: &[usize]) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0))
}

/// Uniform values kept at least 0.1 away from zero, clear of ReLU kinks.
fn off_zero(rng: &mut Rng, shape: &[usize]) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| {
        let m = rng.gen_range(0.1..1.0);
        if rng.gen_bool(0.5) {
            m
        } else {
            -m
        }
    })
}

/// `Σ w ⊙ y` with fixed random weights, so every output entry matters.
fn weighted_sum(g: &mut Graph<f64>, y: Var, seed: u64) -> Result<Var> {
    let mut rng = seed::rng(seed);
    let w = uniform(&mut rng, g.value(y).shape());
    let w = g.input(w)?;
    let p = g.mul(y, w)?;
    g.sum(p)
}

fn no_params() -> ParamStore<f64> {
    ParamStore::new()
}

fn tiny_model() -> ModelConfig {
    ModelConfig {
        height: 16,
        width: 16,
        grid_rows: 2,
        grid_cols: 2,
        channels: vec![3, 4],
        reflection_hidden: 3,
        relation_channels: 4,
        lambda: 10.0,
    }
}

fn cases(rng: &mut Rng) -> Vec<Case<'static>> {
    let mut cases: Vec<Case<'static>> = Vec::new();

    cases.push(Case {
        name: "conv2d stride 1 padding 1",
        inputs: vec![
            uniform(rng, &[2, 2, 5, 4]),
            uniform(rng, &[3, 2, 3, 3]),
            uniform(rng, &[3]),
        ],
        params: no_params(),
        loss: Box::new(|g, _, v| {
            let y = g.conv2d(v[0], v[1], Some(v[2]), 1, 1)?;
            weighted_sum(g, y, 1)
        }),
    });
    cases.push(Case {
        name: "conv2d stride 2 padding 0",
        inputs: vec![uniform(rng, &[2, 7, 7]), uniform(rng, &[2, 2, 3, 2])],
        params: no_params(),
        loss: Box::new(|g, _, v| {
            let y = g.conv2d(v[0], v[1], None, 2, 0)?;
            weighted_sum(g, y, 2)
        }),
    });
    cases.push(Case {
        name: "relu",
        inputs: vec![off_zero(rng, &[2, 3, 4])],
        params: no_params(),
        loss: Box::new(|g, _, v| {
            let y = g.relu(v[0])?;
            weighted_sum(g, y, 3)
        }),
    });
    cases.push(Case {
        name: "sigmoid",
        inputs: vec![uniform(rng, &[2, 3, 4])],
        params: no_params(),
        loss: Box::new(|g, _, v| {
            let y = g.sigmoid(v[0])?;
            weighted_sum(g, y, 4)
        }),
    });
    cases.push(Case {
        name: "avg_pool",
        inputs: vec![uniform(rng, &[2, 2, 4, 6])],
        params: no_params(),
        loss: Box::new(|g, _, v| {
            let y = g.avg_pool(v[0], 2)?;
            weighted_sum(g, y, 5)
        }),
    });
    cases.push(Case {
        name: "adaptive_avg_pool uneven regions",
        inputs: vec![uniform(rng, &[2, 5, 7])],
        params: no_params(),
        loss: Box::new(|g, _, v| {
            let y = g.adaptive_avg_pool(v[0], 2, 3)?;
            weighted_sum(g, y, 6)
        }),
    });
    cases.push(Case {
        name: "batchnorm (batch statistics)",
        inputs: vec![
            uniform(rng, &[3, 2, 3, 3]),
            uniform(rng, &[2]),
            uniform(rng, &[2]),
        ],
        params: no_params(),
        loss: Box::new(|g, _, v| {
            let (y, _, _) = g.batchnorm(v[0], v[1], v[2], 1e-5)?;
            weighted_sum(g, y, 7)
        }),
    });
    let running_mean = uniform(rng, &[2]);
    let running_var = Tensor::from_fn(&[2], |_| rng.gen_range(0.5..2.0));
    cases.push(Case {
        name: "batchnorm (running statistics)",
        inputs: vec![
            uniform(rng, &[2, 2, 3, 3]),
            uniform(rng, &[2]),
            uniform(rng, &[2]),
        ],
        params: no_params(),
        loss: Box::new(move |g, _, v| {
            let y = g.batchnorm_eval(v[0], v[1], v[2], &running_mean, &running_var, 1e-5)?;
            weighted_sum(g, y, 8)
        }),
    });
    cases.push(Case {
        name: "elementwise add/sub/mul/scale/square/reshape",
        inputs: vec![uniform(rng, &[2, 3]), uniform(rng, &[2, 3])],
        params: no_params(),
        loss: Box::new(|g, _, v| {
            let a = g.add(v[0], v[1])?;
            let b = g.sub(v[0], v[1])?;
            let c = g.mul(a, b)?;
            let d = g.scale(c, 0.7)?;
            let e = g.square(d)?;
            let f = g.reshape(e, &[3, 2])?;
            weighted_sum(g, f, 9)
        }),
    });
    cases.push(Case {
        name: "cosine similarity matrix",
        inputs: vec![uniform(rng, &[2, 4, 2, 3])],
        params: no_params(),
        loss: Box::new(|g, _, v| {
            let y = g.cosine_matrix(v[0], COSINE_EPS)?;
            weighted_sum(g, y, 10)
        }),
    });

    let labels = Tensor::from_fn(&[2, 6, 6], |i| {
        let (p, q) = ((i / 6) % 6, i % 6);
        if (p < 3) == (q < 3) {
            1.0
        } else {
            -1.0
        }
    });
    cases.push(Case {
        name: "pair-wise similarity loss",
        inputs: vec![uniform(rng, &[2, 5, 2, 3])],
        params: no_params(),
        loss: Box::new(move |g, _, v| {
            let a = g.cosine_matrix(v[0], COSINE_EPS)?;
            relation::similarity_loss_on_graph(g, a, &labels)
        }),
    });
    let r_label = Tensor::from_fn(&[2, 1, 3, 3], |_| rng.gen_range(0.0..1.0));
    cases.push(Case {
        name: "reflection loss through sigmoid",
        inputs: vec![uniform(rng, &[2, 1, 3, 3])],
        params: no_params(),
        loss: Box::new(move |g, _, v| {
            let r = g.sigmoid(v[0])?;
            crate::model::reflection_loss_on_graph(g, r, &r_label)
        }),
    });

    let mut params = ParamStore::new();
    let conv = Conv2dLayer::new(&mut params, "conv", 2, 3, 3, 1, 1, rng);
    let mut buffers = ParamStore::new();
    let bn = BatchNormLayer::new(&mut params, &mut buffers, "bn", 3);
    for id in params.ids().collect::<Vec<_>>() {
        let t = uniform(rng, params.get(id).shape());
        *params.get_mut(id) = t;
    }
    cases.push(Case {
        name: "conv + batchnorm layers (parameters)",
        inputs: vec![uniform(rng, &[3, 2, 4, 4])],
        params,
        loss: Box::new(move |g, p, v| {
            let y = conv.forward(g, p, v[0])?;
            let (y, _) = bn.forward_train(g, p, y)?;
            weighted_sum(g, y, 11)
        }),
    });

    let mut params = ParamStore::new();
    let head = RestorationHead::new(&mut params, 3, 4, 2, 2, rng);
    for id in params.ids().collect::<Vec<_>>() {
        let t = uniform(rng, params.get(id).shape());
        *params.get_mut(id) = t;
    }
    cases.push(Case {
        name: "patch-feature restoration head",
        inputs: vec![uniform(rng, &[2, 3, 4, 6])],
        params,
        loss: Box::new(move |g, p, v| {
            let s = head.forward(g, p, v[0])?;
            weighted_sum(g, s, 12)
        }),
    });
    cases
}

/// Full model, `L_sim + λ·L_reflection` with respect to every parameter.
fn composite_case(rng: &mut Rng) -> Result<CaseResult> {
    let config = tiny_model();
    let model = Dcn::<f64>::new(config.clone(), 21)?;
    let images = Tensor::from_fn(&[2, 3, 16, 16], |_| rng.gen_range(0.0..1.0));
    let (hf, wf) = config.feature_extent();
    let r_label = Tensor::from_fn(&[2, 1, hf, wf], |_| rng.gen_range(0.0..1.0));
    let p = config.slots();
    let a_label = Tensor::from_fn(&[2, p, p], |i| {
        let (b, q, r) = (i / (p * p), (i / p) % p, i % p);
        let cls = |s: usize| (s + b) % 2;
        if cls(q) == cls(r) {
            1.0
        } else {
            -1.0
        }
    });
    let structure = model.clone();
    let case = Case {
        name: "full model overall loss",
        inputs: Vec::new(),
        params: model.params,
        loss: Box::new(move |g, p, _| {
            let mut m = structure.clone();
            m.params = p.clone();
            let out = m.forward(g, &images, Mode::Train, true)?;
            Ok(m.losses(g, &out, &r_label, Some(&a_label))?.overall)
        }),
    };
    case.run()
}

/// Every case; stops at the first error that prevents evaluation.
pub fn run_suite(seed: u64) -> Result<Vec<CaseResult>> {
    let mut rng = seed::rng(seed);
    let mut out = Vec::new();
    for case in cases(&mut rng) {
        out.push(case.run()?);
    }
    out.push(composite_case(&mut rng)?);
    Ok(out)
}
