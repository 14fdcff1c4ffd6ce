//! Content combination: swap whole grid slots of a patch-permuted image with
//! the same slots of donor images from another class or another subdomain.
//! Exchanged content is never relocated, and provenance and label maps are
//! updated alongside the pixels.

use std::ops::RangeInclusive;

use rand::seq::index;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::{Class, SampleMeta};
use crate::destruction::{copy_slot, GridSpec, PatchedView, Provenance};
use crate::error::{DcnError, Result};
use crate::tensor::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CombinationMode {
    /// Donors come from any other class.
    CrossClass,
    /// Donors come from any other domain, whatever their class.
    CrossSubdomain,
}

impl CombinationMode {
    pub fn eligible(self, base: &SampleMeta, donor: &SampleMeta) -> bool {
        match self {
            CombinationMode::CrossClass => donor.class != base.class,
            CombinationMode::CrossSubdomain => donor.domain_id != base.domain_id,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CombinationPlan {
    pub mode: CombinationMode,
    /// Distinct grid slots to overwrite.
    pub slots: Vec<usize>,
    /// `donors[i]` indexes the candidate pool and supplies `slots[i]`.
    pub donors: Vec<usize>,
}

impl CombinationPlan {
    pub fn count(&self) -> usize {
        self.slots.len()
    }
}

/// Draws an exchange count uniformly from `count_range`, that many distinct
/// slots, and one independent eligible donor per slot.
pub fn plan_combination<R: Rng + ?Sized>(
    rng: &mut R,
    base: &SampleMeta,
    pool: &[SampleMeta],
    mode: CombinationMode,
    count_range: RangeInclusive<usize>,
    grid: GridSpec,
) -> Result<CombinationPlan> {
    let p = grid.slots();
    let (lo, hi) = (*count_range.start(), *count_range.end());
    if lo == 0 || lo > hi || hi >= p {
        return Err(DcnError::config(format!(
            "exchange count range {lo}..={hi} must satisfy 0 < k < {p}"
        )));
    }
    let eligible: Vec<usize> = pool
        .iter()
        .enumerate()
        .filter(|(_, m)| mode.eligible(base, m))
        .map(|(i, _)| i)
        .collect();
    if eligible.is_empty() {
        return Err(DcnError::Planning(format!(
            "no {mode:?} donor for sample {} among {} candidates",
            base.sample_id,
            pool.len()
        )));
    }
    let count = rng.gen_range(lo..=hi);
    let mut slots = index::sample(rng, p, count).into_vec();
    slots.sort_unstable();
    let donors = (0..count)
        .map(|_| eligible[rng.gen_range(0..eligible.len())])
        .collect();
    Ok(CombinationPlan { mode, slots, donors })
}

/// Overwrites the planned slots of `base` with the same slots of the donors.
pub fn apply_combination<T: Scalar>(
    base: &PatchedView<T>,
    plan: &CombinationPlan,
    pool: &[PatchedView<T>],
    grid: GridSpec,
) -> Result<PatchedView<T>> {
    let (c, h, w) = base.image.chw()?;
    let geo = grid.geometry(h, w)?;
    let label_geo = base
        .labels
        .iter()
        .map(|l| {
            let (lc, lh, lw) = l.chw()?;
            Ok((lc, grid.geometry(lh, lw)?))
        })
        .collect::<Result<Vec<_>>>()?;
    if base.provenance.len() != grid.slots() {
        return Err(DcnError::config("provenance length differs from grid slots"));
    }

    let mut out = base.clone();
    for (&slot, &d) in plan.slots.iter().zip(&plan.donors) {
        let donor = pool
            .get(d)
            .ok_or_else(|| DcnError::config(format!("donor index {d} outside pool of {}", pool.len())))?;
        if donor.image.shape() != base.image.shape() || donor.labels.len() != base.labels.len() {
            return Err(DcnError::config(format!(
                "donor geometry {:?} does not match base {:?}",
                donor.image.shape(),
                base.image.shape()
            )));
        }
        copy_slot(donor.image.data(), out.image.data_mut(), c, &geo, slot, slot);
        for ((dst, src), (lc, lg)) in out.labels.iter_mut().zip(&donor.labels).zip(&label_geo) {
            if src.shape() != dst.shape() {
                return Err(DcnError::config(format!(
                    "donor label {:?} does not match base label {:?}",
                    src.shape(),
                    dst.shape()
                )));
            }
            copy_slot(src.data(), dst.data_mut(), *lc, lg, slot, slot);
        }
        out.provenance.0[slot] = donor.provenance.0[slot];
    }
    Ok(out)
}

pub fn class_mask(provenance: &Provenance) -> Vec<Class> {
    provenance.slots().iter().map(|s| s.class).collect()
}

pub fn domain_mask(provenance: &Provenance) -> Vec<usize> {
    provenance.slots().iter().map(|s| s.domain_id).collect()
}
