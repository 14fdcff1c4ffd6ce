//! Mini-batch composition: class-balanced sampling, patch permutation, and
//! patch exchange, with co-transformed reflection labels and class-agreement
//! targets for every view.

use rand::seq::index;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::combination::{apply_combination, class_mask, plan_combination, CombinationMode, CombinationPlan};
use crate::data::{Class, Sample, SampleMeta};
use crate::destruction::{destroy, sample_permutation, GridSpec, PatchedView, Permutation, Provenance};
use crate::error::{DcnError, Result};
use crate::model::area_downsample;
use crate::relation::build_label_matrix;
use crate::seed;
use crate::tensor::{Scalar, Tensor};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugmentConfig {
    /// Shuffle patch slots of every view; identity permutation otherwise.
    pub destruction: bool,
    pub cross_class_prob: f64,
    pub cross_subdomain_prob: f64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig {
            destruction: true,
            cross_class_prob: 0.5,
            cross_subdomain_prob: 0.5,
        }
    }
}

impl AugmentConfig {
    pub fn off() -> Self {
        AugmentConfig {
            destruction: false,
            cross_class_prob: 0.0,
            cross_subdomain_prob: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let mut bad = Vec::new();
        for (name, p) in [
            ("cross_class_prob", self.cross_class_prob),
            ("cross_subdomain_prob", self.cross_subdomain_prob),
        ] {
            if !(0.0..=1.0).contains(&p) {
                bad.push(format!("augment.{name} ({p} outside [0, 1])"));
            }
        }
        if bad.is_empty() {
            Ok(())
        } else {
            Err(DcnError::Validation { fields: bad })
        }
    }
}

/// How one training view was made.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ViewRecord {
    pub base: SampleMeta,
    pub permutation: Permutation,
    /// Exchanges in the order they were applied; donor indices point into the batch.
    pub combinations: Vec<CombinationPlan>,
    pub provenance: Provenance,
}

#[derive(Debug, Clone)]
pub struct Batch<T: Scalar> {
    pub seed: u64,
    /// `B×3×H×W`.
    pub images: Tensor<T>,
    /// `B×1×H_f×W_f`.
    pub reflection_labels: Tensor<T>,
    /// `B×P×P` entries in `{−1, +1}`.
    pub label_matrices: Tensor<T>,
    pub views: Vec<ViewRecord>,
}

/// Native-resolution views, before label downsampling.
#[derive(Debug, Clone)]
pub struct ViewSet {
    pub views: Vec<PatchedView<f32>>,
    pub records: Vec<ViewRecord>,
}

#[derive(Debug)]
pub struct BatchBuilder<'a> {
    pool: &'a [Sample],
    live: Vec<usize>,
    spoof: Vec<usize>,
    grid: GridSpec,
    feature_extent: (usize, usize),
    augment: AugmentConfig,
    batch_size: usize,
    cross_subdomain: bool,
}

impl<'a> BatchBuilder<'a> {
    pub fn new(
        pool: &'a [Sample],
        grid: GridSpec,
        feature_extent: (usize, usize),
        augment: AugmentConfig,
        batch_size: usize,
    ) -> Result<Self> {
        augment.validate()?;
        if batch_size == 0 || !batch_size.is_multiple_of(2) {
            return Err(DcnError::Batch(format!(
                "batch size {batch_size} cannot be split 1:1 into live and spoof"
            )));
        }
        let by_class = |c| -> Vec<usize> {
            pool.iter()
                .enumerate()
                .filter(|(_, s)| s.class == c)
                .map(|(i, _)| i)
                .collect()
        };
        let (live, spoof) = (by_class(Class::Live), by_class(Class::Spoof));
        let half = batch_size / 2;
        if live.len() < half || spoof.len() < half {
            return Err(DcnError::Batch(format!(
                "pool has {} live and {} spoof samples, batch needs {half} of each",
                live.len(),
                spoof.len()
            )));
        }
        let first_domain = pool[0].domain_id;
        let multi_domain = pool.iter().any(|s| s.domain_id != first_domain);
        let cross_subdomain = augment.cross_subdomain_prob > 0.0 && multi_domain;
        if augment.cross_subdomain_prob > 0.0 && !multi_domain {
            log::warn!("training pool covers a single domain; cross-subdomain exchange disabled");
        }
        Ok(BatchBuilder {
            pool,
            live,
            spoof,
            grid,
            feature_extent,
            augment,
            batch_size,
            cross_subdomain,
        })
    }

    pub fn cross_subdomain_enabled(&self) -> bool {
        self.cross_subdomain
    }

    /// Draws and augments one batch at native resolution.
    pub fn views(&self, batch_seed: u64) -> Result<ViewSet> {
        let mut rng = seed::rng(batch_seed);
        let half = self.batch_size / 2;
        let mut picks: Vec<usize> = index::sample(&mut rng, self.live.len(), half)
            .into_iter()
            .map(|i| self.live[i])
            .collect();
        picks.extend(
            index::sample(&mut rng, self.spoof.len(), half)
                .into_iter()
                .map(|i| self.spoof[i]),
        );

        let slots = self.grid.slots();
        let mut destroyed = Vec::with_capacity(picks.len());
        let mut records = Vec::with_capacity(picks.len());
        for &i in &picks {
            let s = &self.pool[i];
            let sigma = if self.augment.destruction {
                sample_permutation(&mut rng, self.grid)
            } else {
                Permutation::identity(slots)
            };
            let view = destroy(
                &s.image,
                std::slice::from_ref(&s.reflection_gt),
                self.grid,
                &sigma,
                &Provenance::of_sample(&s.meta(), slots),
            )?;
            records.push(ViewRecord {
                base: s.meta(),
                permutation: sigma,
                combinations: Vec::new(),
                provenance: view.provenance.clone(),
            });
            destroyed.push(view);
        }

        let metas: Vec<SampleMeta> = records.iter().map(|r| r.base).collect();
        let count_range = 1..=slots - 1;
        let mut views = Vec::with_capacity(destroyed.len());
        for (base, record) in destroyed.iter().zip(records.iter_mut()) {
            let mut view = base.clone();
            let modes = [
                (CombinationMode::CrossClass, self.augment.cross_class_prob, true),
                (
                    CombinationMode::CrossSubdomain,
                    self.augment.cross_subdomain_prob,
                    self.cross_subdomain,
                ),
            ];
            for (mode, p, enabled) in modes {
                if !enabled || p == 0.0 || !rng.gen_bool(p) {
                    continue;
                }
                match plan_combination(
                    &mut rng,
                    &record.base,
                    &metas,
                    mode,
                    count_range.clone(),
                    self.grid,
                ) {
                    Ok(plan) => {
                        view = apply_combination(&view, &plan, &destroyed, self.grid)?;
                        record.combinations.push(plan);
                    }
                    Err(DcnError::Planning(_)) => continue,
                    Err(e) => return Err(e),
                }
            }
            record.provenance = view.provenance.clone();
            views.push(view);
        }
        Ok(ViewSet { views, records })
    }

    pub fn build<T: Scalar>(&self, batch_seed: u64) -> Result<Batch<T>> {
        let set = self.views(batch_seed)?;
        let (hf, wf) = self.feature_extent;
        let mut images = Vec::with_capacity(set.views.len());
        let mut reflection = Vec::with_capacity(set.views.len());
        let mut labels = Vec::with_capacity(set.views.len());
        for (view, record) in set.views.iter().zip(&set.records) {
            images.push(view.image.cast::<T>());
            reflection.push(area_downsample(&view.labels[0], hf, wf)?.cast::<T>());
            labels.push(build_label_matrix(&class_mask(&record.provenance)).to_tensor::<T>());
        }
        Ok(Batch {
            seed: batch_seed,
            images: Tensor::stack(&images)?,
            reflection_labels: Tensor::stack(&reflection)?,
            label_matrices: Tensor::stack(&labels)?,
            views: set.records,
        })
    }
}

/// Seed of the batch used at `step` (1-based) of a run seeded with `train_seed`.
pub fn batch_seed(train_seed: u64, step: u64) -> u64 {
    seed::derive(seed::derive(train_seed, 0xBA7C), step)
}
