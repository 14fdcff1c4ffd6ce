//! Tape-based reverse-mode differentiation.
//!
//! A [`Graph`] records every operation as a node in creation order, so the
//! reverse of the tape is a valid reverse topological order and the backward
//! sweep visits each node once. Parameters live in a [`ParamStore`] outside
//! the graph; [`Graph::param`] snapshots them onto the tape.

use crate::error::{DcnError, Result};
use crate::ops::{self, BatchNormStats};
use crate::tensor::{Scalar, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub usize);

/// Named parameter tensors in registration order.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamStore<T: Scalar> {
    names: Vec<String>,
    values: Vec<Tensor<T>>,
}

impl<T: Scalar> Default for ParamStore<T> {
    fn default() -> Self {
        ParamStore {
            names: Vec::new(),
            values: Vec::new(),
        }
    }
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor<T>) -> ParamId {
        let name = name.into();
        debug_assert!(!self.names.contains(&name), "duplicate parameter {name}");
        self.names.push(name);
        self.values.push(value);
        ParamId(self.values.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.values[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn id_of(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &Tensor<T>)> {
        self.names
            .iter()
            .zip(&self.values)
            .enumerate()
            .map(|(i, (n, v))| (ParamId(i), n.as_str(), v))
    }

    pub fn numel(&self) -> usize {
        self.values.iter().map(Tensor::numel).sum()
    }
}

#[derive(Debug)]
enum Op<T: Scalar> {
    Input,
    Param(ParamId),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    Square(Var),
    Sum(Var),
    Reshape(Var),
    Relu(Var),
    Sigmoid(Var),
    Conv2d {
        input: Var,
        kernel: Var,
        bias: Option<Var>,
        stride: usize,
        padding: usize,
    },
    AvgPool {
        input: Var,
        window: usize,
    },
    AdaptiveAvgPool {
        input: Var,
        rows: usize,
        cols: usize,
    },
    BatchNorm {
        input: Var,
        gamma: Var,
        beta: Var,
        stats: BatchNormStats<T>,
    },
    /// Inference-time normalisation with fixed statistics: an affine map.
    ChannelAffine {
        input: Var,
        gamma: Var,
        beta: Var,
        inv_std: Vec<T>,
        mean: Vec<T>,
    },
    Cosine {
        input: Var,
        eps: T,
    },
}

impl<T: Scalar> Op<T> {
    fn name(&self) -> &'static str {
        match self {
            Op::Input => "input",
            Op::Param(_) => "param",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::Square(_) => "square",
            Op::Sum(_) => "sum",
            Op::Reshape(_) => "reshape",
            Op::Relu(_) => "relu",
            Op::Sigmoid(_) => "sigmoid",
            Op::Conv2d { .. } => "conv2d",
            Op::AvgPool { .. } => "avg_pool",
            Op::AdaptiveAvgPool { .. } => "adaptive_avg_pool",
            Op::BatchNorm { .. } => "batchnorm",
            Op::ChannelAffine { .. } => "batchnorm_eval",
            Op::Cosine { .. } => "cosine_matrix",
        }
    }
}

#[derive(Debug)]
struct Node<T: Scalar> {
    value: Tensor<T>,
    op: Op<T>,
}

/// One forward pass worth of recorded operations.
#[derive(Debug)]
pub struct Graph<T: Scalar> {
    nodes: Vec<Node<T>>,
    consumed: bool,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Graph {
            nodes: Vec::new(),
            consumed: false,
        }
    }
}

fn same_shape<T: Scalar>(op: &str, a: &Tensor<T>, b: &Tensor<T>) -> Result<()> {
    if a.shape() == b.shape() {
        Ok(())
    } else {
        Err(DcnError::config(format!(
            "{op}: shape mismatch {:?} vs {:?}",
            a.shape(),
            b.shape()
        )))
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>) -> Result<Var> {
        if self.consumed {
            return Err(DcnError::State(
                "graph already differentiated; start a new forward pass".into(),
            ));
        }
        value.ensure_finite(&format!("{} output (node {})", op.name(), self.nodes.len()))?;
        self.nodes.push(Node { value, op });
        Ok(Var(self.nodes.len() - 1))
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn input(&mut self, value: Tensor<T>) -> Result<Var> {
        self.push(value, Op::Input)
    }

    pub fn param(&mut self, store: &ParamStore<T>, id: ParamId) -> Result<Var> {
        self.push(store.get(id).clone(), Op::Param(id))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (x, y) = (self.value(a), self.value(b));
        same_shape("add", x, y)?;
        let out = Tensor::new(
            x.shape(),
            x.data().iter().zip(y.data()).map(|(&p, &q)| p + q).collect(),
        )?;
        self.push(out, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (x, y) = (self.value(a), self.value(b));
        same_shape("sub", x, y)?;
        let out = Tensor::new(
            x.shape(),
            x.data().iter().zip(y.data()).map(|(&p, &q)| p - q).collect(),
        )?;
        self.push(out, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (x, y) = (self.value(a), self.value(b));
        same_shape("mul", x, y)?;
        let out = Tensor::new(
            x.shape(),
            x.data().iter().zip(y.data()).map(|(&p, &q)| p * q).collect(),
        )?;
        self.push(out, Op::Mul(a, b))
    }

    pub fn scale(&mut self, a: Var, k: T) -> Result<Var> {
        let out = self.value(a).map(|v| v * k);
        self.push(out, Op::Scale(a, k))
    }

    pub fn square(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).map(|v| v * v);
        self.push(out, Op::Square(a))
    }

    /// Sum of every element, as a one-element tensor.
    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let out = Tensor::scalar(self.value(a).sum());
        self.push(out, Op::Sum(a))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(a).clone().reshape(shape)?;
        self.push(out, Op::Reshape(a))
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        let out = ops::relu(self.value(a));
        self.push(out, Op::Relu(a))
    }

    /// Sign pattern of every ReLU input recorded so far (`true` = active).
    pub fn relu_pattern(&self) -> Vec<bool> {
        let mut out = Vec::new();
        for node in &self.nodes {
            if let Op::Relu(a) = node.op {
                out.extend(self.value(a).data().iter().map(|&v| v > T::zero()));
            }
        }
        out
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        let out = ops::sigmoid(self.value(a));
        self.push(out, Op::Sigmoid(a))
    }

    pub fn conv2d(
        &mut self,
        input: Var,
        kernel: Var,
        bias: Option<Var>,
        stride: usize,
        padding: usize,
    ) -> Result<Var> {
        let out = ops::conv2d(
            self.value(input),
            self.value(kernel),
            bias.map(|b| self.value(b)),
            stride,
            padding,
        )?;
        self.push(
            out,
            Op::Conv2d {
                input,
                kernel,
                bias,
                stride,
                padding,
            },
        )
    }

    pub fn avg_pool(&mut self, input: Var, window: usize) -> Result<Var> {
        let out = ops::avg_pool(self.value(input), window)?;
        self.push(out, Op::AvgPool { input, window })
    }

    pub fn adaptive_avg_pool(&mut self, input: Var, rows: usize, cols: usize) -> Result<Var> {
        let out = ops::adaptive_avg_pool(self.value(input), rows, cols)?;
        self.push(out, Op::AdaptiveAvgPool { input, rows, cols })
    }

    /// Training-mode batch norm. Returns the output and the batch statistics
    /// (mean, unbiased variance) for the caller's running averages.
    pub fn batchnorm(&mut self, input: Var, gamma: Var, beta: Var, eps: T) -> Result<(Var, Vec<T>, Vec<T>)> {
        let (out, stats) = ops::batchnorm_train(self.value(input), self.value(gamma), self.value(beta), eps)?;
        let (mean, var) = (stats.mean.clone(), stats.var_unbiased.clone());
        let v = self.push(
            out,
            Op::BatchNorm {
                input,
                gamma,
                beta,
                stats,
            },
        )?;
        Ok((v, mean, var))
    }

    pub fn batchnorm_eval(
        &mut self,
        input: Var,
        gamma: Var,
        beta: Var,
        running_mean: &Tensor<T>,
        running_var: &Tensor<T>,
        eps: T,
    ) -> Result<Var> {
        let out = ops::batchnorm_eval(
            self.value(input),
            self.value(gamma),
            self.value(beta),
            running_mean,
            running_var,
            eps,
        )?;
        let inv_std = running_var
            .data()
            .iter()
            .map(|&v| T::one() / (v + eps).sqrt())
            .collect();
        self.push(
            out,
            Op::ChannelAffine {
                input,
                gamma,
                beta,
                inv_std,
                mean: running_mean.data().to_vec(),
            },
        )
    }

    pub fn cosine_matrix(&mut self, input: Var, eps: T) -> Result<Var> {
        let out = ops::cosine_matrix(self.value(input), eps)?;
        self.push(out, Op::Cosine { input, eps })
    }

    /// Reverse sweep from a one-element `loss`. The graph cannot be reused afterwards.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients<T>> {
        if self.consumed {
            return Err(DcnError::State(
                "backward called twice on the same forward pass".into(),
            ));
        }
        if self.value(loss).numel() != 1 {
            return Err(DcnError::State(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        self.consumed = true;

        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::ones(self.value(loss).shape()));

        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if matches!(node.op, Op::Input | Op::Param(_)) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            let mut send = |v: Var, d: Tensor<T>| accumulate(&mut grads[v.0], d);
            match &node.op {
                Op::Input | Op::Param(_) => unreachable!(),
                Op::Add(a, b) => {
                    send(*a, g.clone());
                    send(*b, g);
                }
                Op::Sub(a, b) => {
                    send(*b, g.map(|v| -v));
                    send(*a, g);
                }
                Op::Mul(a, b) => {
                    let (x, y) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
                    send(*a, zip_map(&g, y, |d, q| d * q));
                    send(*b, zip_map(&g, x, |d, p| d * p));
                }
                Op::Scale(a, k) => send(*a, g.map(|v| v * *k)),
                Op::Square(a) => {
                    let two = T::one() + T::one();
                    send(*a, zip_map(&g, &self.nodes[a.0].value, |d, x| two * x * d));
                }
                Op::Sum(a) => {
                    let shape = self.nodes[a.0].value.shape();
                    send(*a, Tensor::full(shape, g.item()));
                }
                Op::Reshape(a) => {
                    let shape = self.nodes[a.0].value.shape().to_vec();
                    send(*a, g.reshape(&shape)?);
                }
                Op::Relu(a) => send(
                    *a,
                    zip_map(&g, &self.nodes[a.0].value, |d, x| {
                        if x > T::zero() {
                            d
                        } else {
                            T::zero()
                        }
                    }),
                ),
                Op::Sigmoid(a) => send(*a, zip_map(&g, &node.value, |d, s| d * s * (T::one() - s))),
                Op::Conv2d {
                    input,
                    kernel,
                    bias,
                    stride,
                    padding,
                } => {
                    let cg = ops::conv2d_backward(
                        &self.nodes[input.0].value,
                        &self.nodes[kernel.0].value,
                        &g,
                        *stride,
                        *padding,
                    )?;
                    send(*input, cg.input);
                    send(*kernel, cg.kernel);
                    if let Some(b) = bias {
                        let shape = self.nodes[b.0].value.shape().to_vec();
                        send(*b, cg.bias.reshape(&shape)?);
                    }
                }
                Op::AvgPool { input, window } => send(
                    *input,
                    ops::avg_pool_backward(self.nodes[input.0].value.shape(), &g, *window)?,
                ),
                Op::AdaptiveAvgPool { input, rows, cols } => send(
                    *input,
                    ops::adaptive_avg_pool_backward(self.nodes[input.0].value.shape(), &g, *rows, *cols)?,
                ),
                Op::BatchNorm {
                    input,
                    gamma,
                    beta,
                    stats,
                } => {
                    let gamma_t = &self.nodes[gamma.0].value;
                    let bg = ops::batchnorm_train_backward(stats, gamma_t, &g)?;
                    let gshape = gamma_t.shape().to_vec();
                    let bshape = self.nodes[beta.0].value.shape().to_vec();
                    send(*input, bg.input);
                    send(*gamma, bg.gamma.reshape(&gshape)?);
                    send(*beta, bg.beta.reshape(&bshape)?);
                }
                Op::ChannelAffine {
                    input,
                    gamma,
                    beta,
                    inv_std,
                    mean,
                } => {
                    let x = &self.nodes[input.0].value;
                    let gamma_t = &self.nodes[gamma.0].value;
                    let (_, c, h, w) = match *x.shape() {
                        [c, h, w] => (1, c, h, w),
                        [b, c, h, w] => (b, c, h, w),
                        _ => unreachable!("validated in forward"),
                    };
                    let plane = h * w;
                    let mut dx = vec![T::zero(); x.numel()];
                    let mut dgamma = vec![T::zero(); c];
                    let mut dbeta = vec![T::zero(); c];
                    for (idx, (&d, &xv)) in g.data().iter().zip(x.data()).enumerate() {
                        let ch = (idx / plane) % c;
                        dx[idx] = d * gamma_t[ch] * inv_std[ch];
                        dgamma[ch] = dgamma[ch] + d * (xv - mean[ch]) * inv_std[ch];
                        dbeta[ch] = dbeta[ch] + d;
                    }
                    let gshape = gamma_t.shape().to_vec();
                    let bshape = self.nodes[beta.0].value.shape().to_vec();
                    send(*input, Tensor::new(x.shape(), dx)?);
                    send(*gamma, Tensor::new(&gshape, dgamma)?);
                    send(*beta, Tensor::new(&bshape, dbeta)?);
                }
                Op::Cosine { input, eps } => send(
                    *input,
                    ops::cosine_matrix_backward(&self.nodes[input.0].value, &node.value, &g, *eps)?,
                ),
            }
        }

        for (i, g) in grads.iter().enumerate() {
            if let Some(g) = g {
                g.ensure_finite(&format!("gradient of {} (node {i})", self.nodes[i].op.name()))?;
            }
        }
        let params = self
            .nodes
            .iter()
            .enumerate()
            .filter_map(|(i, n)| match n.op {
                Op::Param(id) => Some((id, i)),
                _ => None,
            })
            .collect();
        Ok(Gradients { grads, params })
    }
}

fn zip_map<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>, f: impl Fn(T, T) -> T) -> Tensor<T> {
    Tensor::new(
        a.shape(),
        a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect(),
    )
    .expect("operands share a shape")
}

fn accumulate<T: Scalar>(slot: &mut Option<Tensor<T>>, d: Tensor<T>) {
    match slot {
        Some(acc) => acc
            .data_mut()
            .iter_mut()
            .zip(d.data())
            .for_each(|(a, &b)| *a = *a + b),
        None => *slot = Some(d),
    }
}

/// Result of a backward sweep.
#[derive(Debug)]
pub struct Gradients<T: Scalar> {
    grads: Vec<Option<Tensor<T>>>,
    params: Vec<(ParamId, usize)>,
}

impl<T: Scalar> Gradients<T> {
    /// Gradient w.r.t. any recorded node; `None` when the loss does not depend on it.
    pub fn wrt(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads[v.0].as_ref()
    }

    /// Gradients aligned with `store`. Parameters the loss never touched get zeros;
    /// a parameter placed on the tape several times gets the sum.
    pub fn for_params(&self, store: &ParamStore<T>) -> Vec<Tensor<T>> {
        let mut out: Vec<Tensor<T>> = store
            .ids()
            .map(|id| Tensor::zeros(store.get(id).shape()))
            .collect();
        for &(id, node) in &self.params {
            if let Some(g) = &self.grads[node] {
                out[id.0]
                    .data_mut()
                    .iter_mut()
                    .zip(g.data())
                    .for_each(|(a, &b)| *a = *a + b);
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gradient_of_sum_is_ones() {
        let mut g = Graph::<f64>::new();
        let x = g.input(Tensor::from_fn(&[2, 3], |i| i as f64)).unwrap();
        let s = g.sum(x).unwrap();
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.wrt(x).unwrap(), &Tensor::ones(&[2, 3]));
    }

    #[test]
    fn gradient_of_square_sum() {
        let mut g = Graph::<f64>::new();
        let x = g.input(Tensor::scalar(3.0)).unwrap();
        let sq = g.square(x).unwrap();
        let s = g.sum(sq).unwrap();
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.wrt(x).unwrap().item(), 6.0);
    }

    #[test]
    fn second_backward_is_a_state_error() {
        let mut g = Graph::<f32>::new();
        let x = g.input(Tensor::scalar(1.0)).unwrap();
        let s = g.sum(x).unwrap();
        g.backward(s).unwrap();
        assert!(matches!(g.backward(s), Err(DcnError::State(_))));
        assert!(matches!(g.input(Tensor::scalar(1.0)), Err(DcnError::State(_))));
    }

    #[test]
    fn unreachable_params_get_zero_gradient() {
        let mut store = ParamStore::<f64>::new();
        let a = store.add("a", Tensor::full(&[2], 2.0));
        let b = store.add("b", Tensor::full(&[3], 5.0));
        let mut g = Graph::new();
        let va = g.param(&store, a).unwrap();
        let sq = g.square(va).unwrap();
        let loss = g.sum(sq).unwrap();
        let grads = g.backward(loss).unwrap().for_params(&store);
        assert_eq!(grads[a.0].data(), &[4.0, 4.0]);
        assert_eq!(grads[b.0], Tensor::zeros(&[3]));
        let _ = b;
    }

    #[test]
    fn shared_node_accumulates() {
        // loss = sum(x * x) through mul, d/dx = 2x
        let mut g = Graph::<f64>::new();
        let x = g.input(Tensor::new(&[2], vec![1.5, -2.0]).unwrap()).unwrap();
        let y = g.mul(x, x).unwrap();
        let loss = g.sum(y).unwrap();
        let grads = g.backward(loss).unwrap();
        assert_eq!(grads.wrt(x).unwrap().data(), &[3.0, -4.0]);
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let mut g = Graph::<f64>::new();
        let x = g.input(Tensor::zeros(&[2])).unwrap();
        assert!(g.backward(x).is_err());
    }
}
