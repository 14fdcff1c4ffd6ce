//! Structure destruction: cut an image into an `M×N` grid of equal patches,
//! shuffle the patches, and reassemble. Every pixel-aligned label map and the
//! per-slot provenance record travel with the image through the same shuffle.
//!
//! Slots are indexed row-major, `p = r·N + c`, everywhere in the crate.

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::{Class, SampleMeta};
use crate::error::{DcnError, Result};
use crate::tensor::{Scalar, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct GridSpec {
    pub rows: usize,
    pub cols: usize,
}

/// A grid laid over a concrete `H×W` extent.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PatchGeometry {
    pub grid: GridSpec,
    pub height: usize,
    pub width: usize,
    pub patch_h: usize,
    pub patch_w: usize,
}

impl GridSpec {
    pub fn new(rows: usize, cols: usize) -> Result<GridSpec> {
        let g = GridSpec { rows, cols };
        g.check()?;
        Ok(g)
    }

    fn check(&self) -> Result<()> {
        if self.rows == 0 || self.cols == 0 || self.rows * self.cols < 2 {
            return Err(DcnError::config(format!(
                "grid {}×{} must have at least 2 slots",
                self.rows, self.cols
            )));
        }
        Ok(())
    }

    pub fn slots(&self) -> usize {
        self.rows * self.cols
    }

    pub fn geometry(&self, height: usize, width: usize) -> Result<PatchGeometry> {
        self.check()?;
        if !height.is_multiple_of(self.rows) || !width.is_multiple_of(self.cols) {
            return Err(DcnError::config(format!(
                "{height}×{width} extent is not divisible by the {}×{} grid",
                self.rows, self.cols
            )));
        }
        Ok(PatchGeometry {
            grid: *self,
            height,
            width,
            patch_h: height / self.rows,
            patch_w: width / self.cols,
        })
    }
}

/// `sigma[p]` is the source slot whose patch lands in slot `p`.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "Vec<usize>", into = "Vec<usize>")]
pub struct Permutation(Vec<usize>);

impl TryFrom<Vec<usize>> for Permutation {
    type Error = DcnError;

    fn try_from(v: Vec<usize>) -> Result<Self> {
        Permutation::new(v)
    }
}

impl From<Permutation> for Vec<usize> {
    fn from(p: Permutation) -> Vec<usize> {
        p.0
    }
}

impl Permutation {
    pub fn new(sigma: Vec<usize>) -> Result<Permutation> {
        let mut seen = vec![false; sigma.len()];
        for &s in &sigma {
            if s >= sigma.len() || std::mem::replace(&mut seen[s], true) {
                return Err(DcnError::config(format!("{sigma:?} is not a permutation")));
            }
        }
        Ok(Permutation(sigma))
    }

    pub fn identity(slots: usize) -> Permutation {
        Permutation((0..slots).collect())
    }

    /// Uniform over all `slots!` arrangements (Fisher–Yates).
    pub fn sample<R: Rng + ?Sized>(rng: &mut R, slots: usize) -> Permutation {
        let mut v: Vec<usize> = (0..slots).collect();
        v.shuffle(rng);
        Permutation(v)
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_slice(&self) -> &[usize] {
        &self.0
    }

    pub fn is_identity(&self) -> bool {
        self.0.iter().enumerate().all(|(i, &s)| i == s)
    }

    pub fn inverse(&self) -> Permutation {
        let mut inv = vec![0; self.0.len()];
        for (p, &s) in self.0.iter().enumerate() {
            inv[s] = p;
        }
        Permutation(inv)
    }

    /// The single permutation equivalent to applying `self` and then `next`.
    pub fn then(&self, next: &Permutation) -> Permutation {
        Permutation(next.0.iter().map(|&q| self.0[q]).collect())
    }
}

pub fn sample_permutation<R: Rng + ?Sized>(rng: &mut R, grid: GridSpec) -> Permutation {
    Permutation::sample(rng, grid.slots())
}

/// Where the content of one grid slot originally came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct PatchSource {
    pub class: Class,
    pub domain_id: usize,
    pub sample_id: u64,
    pub source_slot: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Provenance(pub Vec<PatchSource>);

impl Provenance {
    /// Provenance of an untouched sample: slot `p` holds its own patch `p`.
    pub fn of_sample(meta: &SampleMeta, slots: usize) -> Provenance {
        Provenance(
            (0..slots)
                .map(|p| PatchSource {
                    class: meta.class,
                    domain_id: meta.domain_id,
                    sample_id: meta.sample_id,
                    source_slot: p,
                })
                .collect(),
        )
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn slots(&self) -> &[PatchSource] {
        &self.0
    }

    pub fn permuted(&self, sigma: &Permutation) -> Provenance {
        Provenance(sigma.as_slice().iter().map(|&s| self.0[s]).collect())
    }
}

fn rank3_geometry<T: Scalar>(t: &Tensor<T>, grid: GridSpec) -> Result<(usize, PatchGeometry)> {
    let &[c, h, w] = t.shape() else {
        return Err(DcnError::config(format!(
            "expected a C×H×W map, got {:?}",
            t.shape()
        )));
    };
    Ok((c, grid.geometry(h, w)?))
}

/// The `P` patches of `image`, in row-major slot order.
pub fn split<T: Scalar>(image: &Tensor<T>, grid: GridSpec) -> Result<Vec<Tensor<T>>> {
    let (c, g) = rank3_geometry(image, grid)?;
    let mut patches = Vec::with_capacity(grid.slots());
    for p in 0..grid.slots() {
        let (r, col) = (p / grid.cols, p % grid.cols);
        let mut data = Vec::with_capacity(c * g.patch_h * g.patch_w);
        for ch in 0..c {
            for y in r * g.patch_h..(r + 1) * g.patch_h {
                let row = (ch * g.height + y) * g.width;
                data.extend_from_slice(&image.data()[row + col * g.patch_w..row + (col + 1) * g.patch_w]);
            }
        }
        patches.push(Tensor::new(&[c, g.patch_h, g.patch_w], data)?);
    }
    Ok(patches)
}

/// Inverse of [`split`].
pub fn assemble<T: Scalar>(patches: &[Tensor<T>], grid: GridSpec) -> Result<Tensor<T>> {
    if patches.len() != grid.slots() {
        return Err(DcnError::config(format!(
            "{} patches for a {}-slot grid",
            patches.len(),
            grid.slots()
        )));
    }
    let &[c, ph, pw] = patches[0].shape() else {
        return Err(DcnError::config("patches must be C×h×w"));
    };
    if patches.iter().any(|p| p.shape() != [c, ph, pw]) {
        return Err(DcnError::config("patches differ in shape"));
    }
    let (h, w) = (ph * grid.rows, pw * grid.cols);
    let mut out = vec![T::zero(); c * h * w];
    for (p, patch) in patches.iter().enumerate() {
        let (r, col) = (p / grid.cols, p % grid.cols);
        for ch in 0..c {
            for y in 0..ph {
                let dst = (ch * h + r * ph + y) * w + col * pw;
                let src = (ch * ph + y) * pw;
                out[dst..dst + pw].copy_from_slice(&patch.data()[src..src + pw]);
            }
        }
    }
    Tensor::new(&[c, h, w], out)
}

/// Copies patch `sigma[p]` of `map` into slot `p` of the result.
pub fn permute_slots<T: Scalar>(map: &Tensor<T>, grid: GridSpec, sigma: &Permutation) -> Result<Tensor<T>> {
    let (c, g) = rank3_geometry(map, grid)?;
    check_len(sigma.len(), grid)?;
    let mut out = vec![T::zero(); map.numel()];
    for (dst_slot, &src_slot) in sigma.as_slice().iter().enumerate() {
        copy_slot(map.data(), &mut out, c, &g, src_slot, dst_slot);
    }
    Tensor::new(map.shape(), out)
}

fn check_len(n: usize, grid: GridSpec) -> Result<()> {
    if n != grid.slots() {
        return Err(DcnError::config(format!(
            "permutation/provenance of length {n} for a {}-slot grid",
            grid.slots()
        )));
    }
    Ok(())
}

/// Copies slot `src_slot` of `src` into slot `dst_slot` of `dst` (both `c×H×W`).
pub(crate) fn copy_slot<T: Copy>(
    src: &[T],
    dst: &mut [T],
    c: usize,
    g: &PatchGeometry,
    src_slot: usize,
    dst_slot: usize,
) {
    let cols = g.grid.cols;
    let (sr, sc) = (src_slot / cols, src_slot % cols);
    let (dr, dc) = (dst_slot / cols, dst_slot % cols);
    for ch in 0..c {
        for y in 0..g.patch_h {
            let s = (ch * g.height + sr * g.patch_h + y) * g.width + sc * g.patch_w;
            let d = (ch * g.height + dr * g.patch_h + y) * g.width + dc * g.patch_w;
            dst[d..d + g.patch_w].copy_from_slice(&src[s..s + g.patch_w]);
        }
    }
}

/// An image together with its aligned label maps and slot provenance.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchedView<T: Scalar> {
    pub image: Tensor<T>,
    pub labels: Vec<Tensor<T>>,
    pub provenance: Provenance,
}

/// Applies `sigma` to the image, every label map, and the provenance.
///
/// Label maps may have a different resolution from the image; each is cut on
/// its own proportional grid and must be divisible by it.
pub fn destroy<T: Scalar>(
    image: &Tensor<T>,
    labels: &[Tensor<T>],
    grid: GridSpec,
    sigma: &Permutation,
    provenance: &Provenance,
) -> Result<PatchedView<T>> {
    check_len(provenance.len(), grid)?;
    let image = permute_slots(image, grid, sigma)?;
    let labels = labels
        .iter()
        .map(|l| {
            permute_slots(l, grid, sigma)
                .map_err(|e| DcnError::config(format!("label map {:?}: {e}", l.shape())))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(PatchedView {
        image,
        labels,
        provenance: provenance.permuted(sigma),
    })
}

impl<T: Scalar> PatchedView<T> {
    pub fn destroy(&self, grid: GridSpec, sigma: &Permutation) -> Result<PatchedView<T>> {
        destroy(&self.image, &self.labels, grid, sigma, &self.provenance)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::AttackType;
    use crate::seed;

    fn meta() -> SampleMeta {
        SampleMeta {
            sample_id: 7,
            class: Class::Live,
            domain_id: 0,
            attack_type: AttackType::None,
        }
    }

    #[test]
    fn split_index_arithmetic() {
        let img = Tensor::<f32>::from_fn(&[1, 4, 4], |i| i as f32);
        let patches = split(&img, GridSpec::new(2, 2).unwrap()).unwrap();
        assert_eq!(patches[0].data(), &[0.0, 1.0, 4.0, 5.0]);
        assert_eq!(patches[3].data(), &[10.0, 11.0, 14.0, 15.0]);
    }

    #[test]
    fn single_slot_grid_rejected() {
        assert!(GridSpec::new(1, 1).is_err());
        assert!(GridSpec::new(1, 2).is_ok());
    }

    #[test]
    fn indivisible_extent_rejected() {
        let img = Tensor::<f32>::zeros(&[1, 5, 4]);
        assert!(split(&img, GridSpec::new(2, 2).unwrap()).is_err());
    }

    #[test]
    fn split_assemble_round_trip() {
        let grid = GridSpec::new(3, 2).unwrap();
        let img = Tensor::<f32>::from_fn(&[2, 6, 4], |i| i as f32);
        assert_eq!(assemble(&split(&img, grid).unwrap(), grid).unwrap(), img);
    }

    #[test]
    fn swap_on_two_slot_grid_swaps_image_and_reflection() {
        let grid = GridSpec::new(1, 2).unwrap();
        let img = Tensor::<f32>::new(&[1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let refl = Tensor::<f32>::new(&[1, 2, 2], vec![0.0, 0.5, 0.0, 0.25]).unwrap();
        let sigma = Permutation::new(vec![1, 0]).unwrap();
        let out = destroy(&img, &[refl], grid, &sigma, &Provenance::of_sample(&meta(), 2)).unwrap();
        assert_eq!(out.image.data(), &[2.0, 1.0, 4.0, 3.0]);
        assert_eq!(out.labels[0].data(), &[0.5, 0.0, 0.25, 0.0]);
        assert_eq!(out.provenance.0[0].source_slot, 1);
        assert_eq!(out.provenance.0[1].source_slot, 0);
    }

    #[test]
    fn labels_use_proportional_grid() {
        let grid = GridSpec::new(2, 2).unwrap();
        let img = Tensor::<f32>::from_fn(&[3, 8, 8], |i| i as f32);
        let coarse = Tensor::<f32>::from_fn(&[1, 2, 2], |i| i as f32);
        let sigma = Permutation::new(vec![3, 2, 1, 0]).unwrap();
        let out = destroy(&img, &[coarse], grid, &sigma, &Provenance::of_sample(&meta(), 4)).unwrap();
        assert_eq!(out.labels[0].data(), &[3.0, 2.0, 1.0, 0.0]);
        let bad = Tensor::<f32>::zeros(&[1, 3, 2]);
        assert!(destroy(&img, &[bad], grid, &sigma, &Provenance::of_sample(&meta(), 4)).is_err());
    }

    #[test]
    fn inverse_restores_everything() {
        let grid = GridSpec::new(3, 3).unwrap();
        let img = Tensor::<f32>::from_fn(&[3, 9, 9], |i| (i as f32).sin());
        let refl = Tensor::<f32>::from_fn(&[1, 9, 9], |i| i as f32);
        let prov = Provenance::of_sample(&meta(), 9);
        let sigma = Permutation::sample(&mut seed::rng(3), 9);
        let once = destroy(&img, std::slice::from_ref(&refl), grid, &sigma, &prov).unwrap();
        let back = once.destroy(grid, &sigma.inverse()).unwrap();
        assert_eq!(back.image, img);
        assert_eq!(back.labels[0], refl);
        assert_eq!(back.provenance, prov);
    }

    #[test]
    fn permutation_validation() {
        assert!(Permutation::new(vec![0, 0]).is_err());
        assert!(Permutation::new(vec![0, 2]).is_err());
        assert!(Permutation::new(vec![1, 0]).is_ok());
        assert!(Permutation::identity(4).is_identity());
    }

    #[test]
    fn two_slot_permutations_are_balanced() {
        let mut rng = seed::rng(2024);
        let draws = 10_000;
        let swaps = (0..draws)
            .filter(|_| !Permutation::sample(&mut rng, 2).is_identity())
            .count();
        let freq = swaps as f64 / draws as f64;
        assert!((freq - 0.5).abs() <= 0.02, "swap frequency {freq}");
    }

    #[test]
    fn three_slot_permutations_all_occur() {
        let mut rng = seed::rng(99);
        let seen: std::collections::HashSet<Permutation> =
            (0..10_000).map(|_| Permutation::sample(&mut rng, 3)).collect();
        assert_eq!(seen.len(), 6);
    }

    #[test]
    fn fixed_seed_fixed_sequence() {
        let a: Vec<_> = {
            let mut r = seed::rng(5);
            (0..20).map(|_| Permutation::sample(&mut r, 9)).collect()
        };
        let b: Vec<_> = {
            let mut r = seed::rng(5);
            (0..20).map(|_| Permutation::sample(&mut r, 9)).collect()
        };
        assert_eq!(a, b);
    }
}
