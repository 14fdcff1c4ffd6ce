//! Local relation modelling: per-slot patch features, their pairwise cosine
//! similarity matrix, the ±1 class-agreement target, and the pair-wise loss
//! `‖A_sim − A_label‖² / (P(P−1))` summed over all entries, diagonal included.

use crate::autograd::{Graph, ParamStore, Var};
use crate::data::Class;
use crate::error::{DcnError, Result};
use crate::layers::Conv2dLayer;
use crate::seed::Rng;
use crate::tensor::{Scalar, Tensor};

/// Lower clamp on feature norms in the cosine denominator.
pub const COSINE_EPS: f64 = 1e-8;

/// `C_s×M×N` features; the vector at `(i, j)` describes grid slot `i·N + j`.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchFeatureMap<T: Scalar>(Tensor<T>);

impl<T: Scalar> PatchFeatureMap<T> {
    pub fn new(features: Tensor<T>) -> Result<Self> {
        if features.rank() != 3 {
            return Err(DcnError::config(format!(
                "patch features must be C_s×M×N, got {:?}",
                features.shape()
            )));
        }
        features.ensure_finite("patch features")?;
        Ok(PatchFeatureMap(features))
    }

    pub fn channels(&self) -> usize {
        self.0.shape()[0]
    }

    pub fn slots(&self) -> usize {
        self.0.shape()[1] * self.0.shape()[2]
    }

    pub fn tensor(&self) -> &Tensor<T> {
        &self.0
    }

    /// Feature vector of slot `p` (row-major).
    pub fn slot(&self, p: usize) -> Vec<T> {
        let n = self.slots();
        (0..self.channels()).map(|c| self.0[c * n + p]).collect()
    }
}

/// `u·v / (max(‖u‖, ε) · max(‖v‖, ε))`.
pub fn cosine<T: Scalar>(u: &[T], v: &[T]) -> Result<T> {
    if u.len() != v.len() {
        return Err(DcnError::config(format!(
            "cosine: vectors of length {} and {}",
            u.len(),
            v.len()
        )));
    }
    let eps = T::from_f64_lossy(COSINE_EPS);
    let dot: T = u.iter().zip(v).map(|(&a, &b)| a * b).sum();
    let nu = u.iter().map(|&a| a * a).sum::<T>().sqrt().max(eps);
    let nv = v.iter().map(|&b| b * b).sum::<T>().sqrt().max(eps);
    Ok(dot / (nu * nv))
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimilarityMatrix<T: Scalar>(Tensor<T>);

impl<T: Scalar> SimilarityMatrix<T> {
    pub fn tensor(&self) -> &Tensor<T> {
        &self.0
    }

    pub fn slots(&self) -> usize {
        self.0.shape()[0]
    }

    pub fn get(&self, p: usize, q: usize) -> T {
        self.0[p * self.slots() + q]
    }
}

/// `A_sim[p][q] = cosine(S_p, S_q)` over row-major slots.
pub fn build_similarity_matrix<T: Scalar>(s: &PatchFeatureMap<T>) -> Result<SimilarityMatrix<T>> {
    let a = crate::ops::cosine_matrix(s.tensor(), T::from_f64_lossy(COSINE_EPS))?;
    debug_assert!(
        similarity_invariants_hold(&a),
        "A_sim lost symmetry or unit diagonal"
    );
    Ok(SimilarityMatrix(a))
}

/// Symmetry, range, and unit diagonal for every `P×P` block of `a`.
///
/// The diagonal check is skipped for slots whose feature norm fell under the
/// clamp, where the cosine is defined as `‖v‖²/ε²` instead of one.
pub fn similarity_invariants_hold<T: Scalar>(a: &Tensor<T>) -> bool {
    let p = a.shape()[a.rank() - 1];
    let tol = 1e-6;
    a.data().chunks(p * p).all(|m| {
        (0..p).all(|i| {
            let d = m[i * p + i].as_f64();
            (d == 0.0 || (d - 1.0).abs() <= tol)
                && (0..p).all(|j| {
                    let v = m[i * p + j].as_f64();
                    v == m[j * p + i].as_f64() && v.abs() <= 1.0 + tol
                })
        })
    })
}

/// `P×P` target with `+1` where two slots share a class and `−1` otherwise.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelMatrix {
    slots: usize,
    entries: Vec<i8>,
}

impl LabelMatrix {
    pub fn slots(&self) -> usize {
        self.slots
    }

    pub fn get(&self, p: usize, q: usize) -> i8 {
        self.entries[p * self.slots + q]
    }

    pub fn entries(&self) -> &[i8] {
        &self.entries
    }

    pub fn to_tensor<T: Scalar>(&self) -> Tensor<T> {
        Tensor::from_fn(&[self.slots, self.slots], |i| {
            T::from_f64_lossy(self.entries[i] as f64)
        })
    }

    pub fn is_uniform(&self) -> bool {
        self.entries.iter().all(|&e| e == 1)
    }
}

pub fn build_label_matrix(classes: &[Class]) -> LabelMatrix {
    let p = classes.len();
    let mut entries = Vec::with_capacity(p * p);
    for a in classes {
        for b in classes {
            entries.push(if a == b { 1 } else { -1 });
        }
    }
    LabelMatrix { slots: p, entries }
}

/// Pair-wise loss for one sample, in plain arithmetic with fixed summation order.
pub fn similarity_loss<T: Scalar>(a_sim: &SimilarityMatrix<T>, a_label: &LabelMatrix) -> Result<T> {
    let p = a_sim.slots();
    if a_label.slots() != p {
        return Err(DcnError::config(format!(
            "similarity loss: A_sim is {p}×{p} but A_label is {0}×{0}",
            a_label.slots()
        )));
    }
    let mut acc = T::zero();
    for (i, &l) in a_label.entries().iter().enumerate() {
        let d = a_sim.0[i] - T::from_f64_lossy(l as f64);
        acc = acc + d * d;
    }
    Ok(acc / T::from_usize(p * (p - 1)).unwrap())
}

/// Batched, differentiable pair-wise loss averaged over the batch.
///
/// `a_sim` is `B×P×P` on the graph; `labels` is the stacked `B×P×P` target.
pub fn similarity_loss_on_graph<T: Scalar>(g: &mut Graph<T>, a_sim: Var, labels: &Tensor<T>) -> Result<Var> {
    let shape = g.value(a_sim).shape().to_vec();
    let &[b, p, p2] = shape.as_slice() else {
        return Err(DcnError::config(format!(
            "A_sim batch must be B×P×P, got {shape:?}"
        )));
    };
    if p != p2 || labels.shape() != shape.as_slice() {
        return Err(DcnError::config(format!(
            "similarity loss: A_sim {shape:?} vs A_label {:?}",
            labels.shape()
        )));
    }
    let target = g.input(labels.clone())?;
    let diff = g.sub(a_sim, target)?;
    let sq = g.square(diff)?;
    let total = g.sum(sq)?;
    g.scale(total, T::one() / T::from_usize(b * p * (p - 1)).unwrap())
}

/// Two 1×1 convolutions with a ReLU between, then adaptive pooling to the slot grid.
#[derive(Debug, Clone)]
pub struct RestorationHead {
    pub conv1: Conv2dLayer,
    pub conv2: Conv2dLayer,
    pub rows: usize,
    pub cols: usize,
}

impl RestorationHead {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        feature_channels: usize,
        relation_channels: usize,
        rows: usize,
        cols: usize,
        rng: &mut Rng,
    ) -> Self {
        RestorationHead {
            conv1: Conv2dLayer::new(
                store,
                "relation.conv1",
                feature_channels,
                relation_channels,
                1,
                1,
                0,
                rng,
            ),
            conv2: Conv2dLayer::new(
                store,
                "relation.conv2",
                relation_channels,
                relation_channels,
                1,
                1,
                0,
                rng,
            ),
            rows,
            cols,
        }
    }

    /// `F` (`B×C_f×H_f×W_f`) to `S` (`B×C_s×M×N`).
    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, params: &ParamStore<T>, features: Var) -> Result<Var> {
        let (_, h, w) = g.value(features).chw()?;
        if h < self.rows || w < self.cols {
            return Err(DcnError::config(format!(
                "slot grid {}×{} larger than the {h}×{w} feature map",
                self.rows, self.cols
            )));
        }
        let x = self.conv1.forward(g, params, features)?;
        let x = g.relu(x)?;
        let x = self.conv2.forward(g, params, x)?;
        g.adaptive_avg_pool(x, self.rows, self.cols)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn close(a: f64, b: f64) -> bool {
        (a - b).abs() < 1e-12
    }

    #[test]
    fn cosine_hand_values() {
        assert!(close(cosine(&[1.0, 0.0], &[0.0, 1.0]).unwrap(), 0.0));
        assert!(close(cosine(&[1.0, 0.0], &[-1.0, 0.0]).unwrap(), -1.0));
        assert!(close(cosine(&[3.0, 4.0], &[4.0, 3.0]).unwrap(), 0.96));
        assert!(close(cosine(&[0.3, -2.0, 5.0], &[0.3, -2.0, 5.0]).unwrap(), 1.0));
    }

    #[test]
    fn cosine_zero_vector_is_finite() {
        let c = cosine(&[0.0f64, 0.0], &[1.0, 2.0]).unwrap();
        assert_eq!(c, 0.0);
        assert!(cosine(&[1.0f64], &[1.0, 2.0]).is_err());
    }

    #[test]
    fn two_slot_orthogonal_matrix() {
        // C_s = 2, grid 1×2: S_0 = (1,0), S_1 = (0,1)
        let s = PatchFeatureMap::new(Tensor::new(&[2, 1, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap()).unwrap();
        let a = build_similarity_matrix(&s).unwrap();
        assert_eq!(a.tensor().data(), &[1.0, 0.0, 0.0, 1.0]);
    }

    #[test]
    fn identical_slots_give_all_ones() {
        let s = PatchFeatureMap::new(Tensor::from_fn(&[4, 3, 3], |i| 0.5 + (i / 9) as f64)).unwrap();
        let a = build_similarity_matrix(&s).unwrap();
        assert!(a.tensor().data().iter().all(|&v| close(v, 1.0)));
    }

    #[test]
    fn label_matrix_block_structure() {
        use Class::*;
        let l = build_label_matrix(&[Live, Live, Spoof, Spoof]);
        assert_eq!(
            l.entries(),
            &[1, 1, -1, -1, 1, 1, -1, -1, -1, -1, 1, 1, -1, -1, 1, 1]
        );
        assert!(build_label_matrix(&[Spoof; 9]).is_uniform());
    }

    #[test]
    fn loss_hand_values() {
        use Class::*;
        let labels = build_label_matrix(&[Live, Spoof]);
        let sim = SimilarityMatrix(Tensor::new(&[2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap());
        assert!(close(similarity_loss(&sim, &labels).unwrap(), 1.0));
        let exact = SimilarityMatrix(labels.to_tensor::<f64>());
        assert_eq!(similarity_loss(&exact, &labels).unwrap(), 0.0);
    }

    #[test]
    fn loss_shape_mismatch() {
        let sim = SimilarityMatrix(Tensor::<f64>::ones(&[2, 2]));
        assert!(similarity_loss(&sim, &build_label_matrix(&[Class::Live; 3])).is_err());
    }

    #[test]
    fn graph_loss_matches_plain_loss() {
        use Class::*;
        let s = Tensor::<f64>::from_fn(&[3, 2, 2], |i| ((i * 7) as f64).sin());
        let classes = [Live, Spoof, Spoof, Live];
        let labels = build_label_matrix(&classes);
        let plain = similarity_loss(
            &build_similarity_matrix(&PatchFeatureMap::new(s.clone()).unwrap()).unwrap(),
            &labels,
        )
        .unwrap();
        let mut g = Graph::new();
        let sv = g.input(s.reshape(&[1, 3, 2, 2]).unwrap()).unwrap();
        let a = g.cosine_matrix(sv, COSINE_EPS).unwrap();
        let target = labels.to_tensor::<f64>().reshape(&[1, 4, 4]).unwrap();
        let loss = similarity_loss_on_graph(&mut g, a, &target).unwrap();
        assert!((g.value(loss).item() - plain).abs() < 1e-12);
    }
}
