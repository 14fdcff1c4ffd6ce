//! The network: a conv backbone, a dense reflection head with a terminal
//! sigmoid, and the patch-feature restoration head feeding the relation loss.

use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, ParamStore, Var};
use crate::error::{DcnError, Result};
use crate::layers::{BatchNormLayer, Conv2dLayer, RunningStatsUpdate};
use crate::relation::{self, RestorationHead, COSINE_EPS};
use crate::seed;
use crate::tensor::{Scalar, Tensor};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub height: usize,
    pub width: usize,
    pub grid_rows: usize,
    pub grid_cols: usize,
    /// Output channels of each backbone stage; every stage halves the extent.
    pub channels: Vec<usize>,
    pub reflection_hidden: usize,
    pub relation_channels: usize,
    pub lambda: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            height: 96,
            width: 96,
            grid_rows: 3,
            grid_cols: 3,
            channels: vec![16, 32, 64, 64],
            reflection_hidden: 16,
            relation_channels: 32,
            lambda: 10.0,
        }
    }
}

impl ModelConfig {
    pub fn feature_channels(&self) -> usize {
        self.channels.last().copied().unwrap_or(3)
    }

    /// `(H_f, W_f)`.
    pub fn feature_extent(&self) -> (usize, usize) {
        let f = 1 << self.channels.len();
        (self.height / f, self.width / f)
    }

    pub fn slots(&self) -> usize {
        self.grid_rows * self.grid_cols
    }

    pub fn validate(&self) -> Result<()> {
        let mut bad = Vec::new();
        if self.channels.is_empty() || self.channels.contains(&0) {
            bad.push("channels".to_string());
        }
        let f = 1usize << self.channels.len().min(16);
        if self.height == 0 || !self.height.is_multiple_of(f) {
            bad.push(format!("height ({} not a multiple of {f})", self.height));
        }
        if self.width == 0 || !self.width.is_multiple_of(f) {
            bad.push(format!("width ({} not a multiple of {f})", self.width));
        }
        if self.grid_rows * self.grid_cols < 2 {
            bad.push("grid (needs at least two slots)".to_string());
        }
        let (hf, wf) = self.feature_extent();
        if self.grid_rows == 0 || hf == 0 || hf % self.grid_rows != 0 {
            bad.push(format!(
                "grid_rows (H_f = {hf} not divisible by {})",
                self.grid_rows
            ));
        }
        if self.grid_cols == 0 || wf == 0 || wf % self.grid_cols != 0 {
            bad.push(format!(
                "grid_cols (W_f = {wf} not divisible by {})",
                self.grid_cols
            ));
        }
        if self.reflection_hidden == 0 {
            bad.push("reflection_hidden".to_string());
        }
        if self.relation_channels == 0 {
            bad.push("relation_channels".to_string());
        }
        if !(self.lambda > 0.0 && self.lambda.is_finite()) {
            bad.push(format!("lambda ({} must be positive)", self.lambda));
        }
        if bad.is_empty() {
            Ok(())
        } else {
            Err(DcnError::Validation { fields: bad })
        }
    }

    /// Stable text identity stored in checkpoints.
    pub fn fingerprint(&self) -> String {
        serde_json::to_string(self).expect("config serializes")
    }
}

#[derive(Debug, Clone)]
struct Stage {
    conv1: Conv2dLayer,
    bn: BatchNormLayer,
    conv2: Conv2dLayer,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    /// Batch statistics; running averages returned for the caller to fold in.
    Train,
    /// Running statistics.
    Eval,
}

/// Graph handles from one forward pass.
#[derive(Debug)]
pub struct Forward<T: Scalar> {
    pub features: Var,
    pub reflection: Var,
    /// `B×C_s×M×N`, present when the relation branch ran.
    pub patch_features: Option<Var>,
    /// `B×P×P`.
    pub similarity: Option<Var>,
    pub stats: Vec<RunningStatsUpdate<T>>,
}

/// Loss terms on the graph; `overall` is the one to differentiate.
#[derive(Debug, Clone, Copy)]
pub struct LossVars {
    pub similarity: Option<Var>,
    pub reflection: Var,
    pub overall: Var,
}

#[derive(Debug, Clone)]
pub struct Dcn<T: Scalar> {
    pub config: ModelConfig,
    pub params: ParamStore<T>,
    pub buffers: ParamStore<T>,
    stages: Vec<Stage>,
    reflection1: Conv2dLayer,
    reflection2: Conv2dLayer,
    restoration: RestorationHead,
}

impl<T: Scalar> Dcn<T> {
    pub fn new(config: ModelConfig, init_seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = seed::rng(init_seed);
        let mut params = ParamStore::new();
        let mut buffers = ParamStore::new();
        let mut stages = Vec::new();
        let mut c_in = 3;
        for (i, &c) in config.channels.iter().enumerate() {
            let name = format!("backbone.{i}");
            stages.push(Stage {
                conv1: Conv2dLayer::new(&mut params, &format!("{name}.conv1"), c_in, c, 3, 1, 1, &mut rng),
                bn: BatchNormLayer::new(&mut params, &mut buffers, &format!("{name}.bn"), c),
                conv2: Conv2dLayer::new(&mut params, &format!("{name}.conv2"), c, c, 3, 1, 1, &mut rng),
            });
            c_in = c;
        }
        let cf = config.feature_channels();
        let reflection1 = Conv2dLayer::new(
            &mut params,
            "reflection.conv1",
            cf,
            config.reflection_hidden,
            1,
            1,
            0,
            &mut rng,
        );
        let reflection2 = Conv2dLayer::new(
            &mut params,
            "reflection.conv2",
            config.reflection_hidden,
            1,
            1,
            1,
            0,
            &mut rng,
        );
        let restoration = RestorationHead::new(
            &mut params,
            cf,
            config.relation_channels,
            config.grid_rows,
            config.grid_cols,
            &mut rng,
        );
        Ok(Dcn {
            config,
            params,
            buffers,
            stages,
            reflection1,
            reflection2,
            restoration,
        })
    }

    fn check_input(&self, images: &Tensor<T>) -> Result<()> {
        let s = images.shape();
        let want = [3, self.config.height, self.config.width];
        if s.len() != 4 || s[1..] != want {
            return Err(DcnError::config(format!(
                "model expects B×{}×{}×{} images, got {s:?}",
                want[0], want[1], want[2]
            )));
        }
        Ok(())
    }

    /// `B×3×H×W` images to `F` (`B×C_f×H_f×W_f`).
    pub fn backbone(
        &self,
        g: &mut Graph<T>,
        images: Var,
        mode: Mode,
        stats: &mut Vec<RunningStatsUpdate<T>>,
    ) -> Result<Var> {
        self.check_input(g.value(images))?;
        let mut x = images;
        for stage in &self.stages {
            x = stage.conv1.forward(g, &self.params, x)?;
            x = match mode {
                Mode::Train => {
                    let (y, update) = stage.bn.forward_train(g, &self.params, x)?;
                    stats.push(update);
                    y
                }
                Mode::Eval => stage.bn.forward_eval(g, &self.params, &self.buffers, x)?,
            };
            x = g.relu(x)?;
            x = stage.conv2.forward(g, &self.params, x)?;
            x = g.relu(x)?;
            x = g.avg_pool(x, 2)?;
        }
        Ok(x)
    }

    /// `F` to `R_pred` (`B×1×H_f×W_f`) in `[0, 1]`.
    pub fn reflection_head(&self, g: &mut Graph<T>, features: Var) -> Result<Var> {
        let x = self.reflection1.forward(g, &self.params, features)?;
        let x = g.relu(x)?;
        let x = self.reflection2.forward(g, &self.params, x)?;
        g.sigmoid(x)
    }

    /// `F` to `S` (`B×C_s×M×N`).
    pub fn restore_patch_features(&self, g: &mut Graph<T>, features: Var) -> Result<Var> {
        self.restoration.forward(g, &self.params, features)
    }

    pub fn forward(
        &self,
        g: &mut Graph<T>,
        images: &Tensor<T>,
        mode: Mode,
        relation: bool,
    ) -> Result<Forward<T>> {
        self.check_input(images)?;
        let x = g.input(images.clone())?;
        let mut stats = Vec::new();
        let features = self.backbone(g, x, mode, &mut stats)?;
        let reflection = self.reflection_head(g, features)?;
        let (patch_features, similarity) = if relation {
            let s = self.restore_patch_features(g, features)?;
            let a = g.cosine_matrix(s, T::from_f64_lossy(COSINE_EPS))?;
            (Some(s), Some(a))
        } else {
            (None, None)
        };
        Ok(Forward {
            features,
            reflection,
            patch_features,
            similarity,
            stats,
        })
    }

    /// `L_sim + λ·L_reflection` on the graph. Without `label_matrices` the
    /// similarity term is absent and the overall loss is `λ·L_reflection`.
    pub fn losses(
        &self,
        g: &mut Graph<T>,
        out: &Forward<T>,
        reflection_labels: &Tensor<T>,
        label_matrices: Option<&Tensor<T>>,
    ) -> Result<LossVars> {
        let reflection = reflection_loss_on_graph(g, out.reflection, reflection_labels)?;
        let weighted = g.scale(reflection, T::from_f64_lossy(self.config.lambda))?;
        let (similarity, overall) = match (out.similarity, label_matrices) {
            (Some(a), Some(labels)) => {
                let l = relation::similarity_loss_on_graph(g, a, labels)?;
                (Some(l), g.add(l, weighted)?)
            }
            (None, None) => (None, weighted),
            _ => {
                return Err(DcnError::config(
                    "relation branch and label matrices must be supplied together",
                ))
            }
        };
        Ok(LossVars {
            similarity,
            reflection,
            overall,
        })
    }

    /// Liveness scores of a `B×3×H×W` batch, using running statistics.
    pub fn score(&self, images: &Tensor<T>) -> Result<Vec<f64>> {
        let mut g = Graph::new();
        let out = self.forward(&mut g, images, Mode::Eval, false)?;
        Ok(per_sample(g.value(out.reflection)).map(liveness_score).collect())
    }

    pub fn apply_stats(&mut self, stats: &[RunningStatsUpdate<T>]) {
        for (stage, update) in self.stages.iter().zip(stats) {
            stage.bn.apply_update(&mut self.buffers, update);
        }
    }
}

fn per_sample<T: Scalar>(batch: &Tensor<T>) -> impl Iterator<Item = Tensor<T>> + '_ {
    (0..batch.shape()[0]).map(|i| batch.slice_outer(i, 1))
}

/// `(1/(H_f·W_f))·‖R_pred − R_label‖²` for one map, in plain arithmetic.
pub fn reflection_loss<T: Scalar>(r_pred: &Tensor<T>, r_label: &Tensor<T>) -> Result<T> {
    if r_pred.shape() != r_label.shape() {
        return Err(DcnError::config(format!(
            "reflection loss: R_pred {:?} vs R_label {:?}",
            r_pred.shape(),
            r_label.shape()
        )));
    }
    let mut acc = T::zero();
    for (&p, &l) in r_pred.data().iter().zip(r_label.data()) {
        acc = acc + (p - l) * (p - l);
    }
    Ok(acc / T::from_usize(r_pred.numel()).unwrap())
}

/// Batch mean of the per-map reflection loss.
pub fn reflection_loss_on_graph<T: Scalar>(g: &mut Graph<T>, r_pred: Var, labels: &Tensor<T>) -> Result<Var> {
    let shape = g.value(r_pred).shape().to_vec();
    if labels.shape() != shape.as_slice() {
        return Err(DcnError::config(format!(
            "reflection loss: R_pred {shape:?} vs R_label {:?}",
            labels.shape()
        )));
    }
    let target = g.input(labels.clone())?;
    let d = g.sub(r_pred, target)?;
    let sq = g.square(d)?;
    let total = g.sum(sq)?;
    let n = T::from_usize(shape.iter().product()).unwrap();
    g.scale(total, T::one() / n)
}

pub fn overall_loss<T: Scalar>(l_sim: T, l_reflection: T, lambda: T) -> T {
    l_sim + lambda * l_reflection
}

/// `1 − mean(R_pred)`; live reflection maps are all zero.
pub fn liveness_score<T: Scalar>(r_pred: Tensor<T>) -> f64 {
    1.0 - r_pred.mean().as_f64()
}

/// Block-averages a `C×H×W` map to `C×out_h×out_w`; extents must divide evenly.
pub fn area_downsample<T: Scalar>(map: &Tensor<T>, out_h: usize, out_w: usize) -> Result<Tensor<T>> {
    let (c, h, w) = map.chw()?;
    if out_h == 0 || out_w == 0 || h % out_h != 0 || w % out_w != 0 {
        return Err(DcnError::config(format!(
            "cannot area-downsample {h}×{w} to {out_h}×{out_w}"
        )));
    }
    let (fy, fx) = (h / out_h, w / out_w);
    let norm = T::from_usize(fy * fx).unwrap();
    let src = map.data();
    let mut out = Vec::with_capacity(c * out_h * out_w);
    for ch in 0..c {
        for oy in 0..out_h {
            for ox in 0..out_w {
                let mut acc = T::zero();
                for y in oy * fy..(oy + 1) * fy {
                    for x in ox * fx..(ox + 1) * fx {
                        acc = acc + src[ch * h * w + y * w + x];
                    }
                }
                out.push(acc / norm);
            }
        }
    }
    Tensor::new(&[c, out_h, out_w], out)
}
