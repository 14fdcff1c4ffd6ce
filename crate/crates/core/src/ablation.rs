//! Module ablation: a reflection-only baseline, then patch shuffling, patch
//! exchange and the relation branch switched on one at a time, each scored
//! under the cross-domain protocol.

use serde::{Deserialize, Serialize};

use crate::batch::AugmentConfig;
use crate::data::{generate_split, AttackType, DatasetManifest, Sample, SplitSpec};
use crate::error::Result;
use crate::model::ModelConfig;
use crate::protocol::{run_protocol_on, EvalReport, Protocol, CROSS_TEST_SPLIT, DEV_SPLIT, TRAIN_SPLIT};
use crate::tensor::Scalar;
use crate::train::{train_in_memory, TrainConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    Baseline,
    Destruction,
    DestructionCombination,
    Full,
}

impl Variant {
    pub const ALL: [Variant; 4] = [
        Variant::Baseline,
        Variant::Destruction,
        Variant::DestructionCombination,
        Variant::Full,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Baseline => "baseline",
            Variant::Destruction => "+shuffle",
            Variant::DestructionCombination => "+shuffle+exchange",
            Variant::Full => "full",
        }
    }

    /// `config` with this variant's modules switched on and the rest off.
    pub fn apply(self, config: &TrainConfig) -> TrainConfig {
        let exchange = config.augment.clone();
        let mut c = config.clone();
        c.augment = AugmentConfig::off();
        c.relation = false;
        if self != Variant::Baseline {
            c.augment.destruction = true;
        }
        if matches!(self, Variant::DestructionCombination | Variant::Full) {
            c.augment.cross_class_prob = exchange.cross_class_prob;
            c.augment.cross_subdomain_prob = exchange.cross_subdomain_prob;
        }
        c.relation = self == Variant::Full;
        c
    }
}

/// Desk-scale optimisation settings on a smaller image and network.
pub fn reduced_config(seed: u64) -> TrainConfig {
    TrainConfig {
        seed,
        checkpoint_every: 0,
        model: ModelConfig {
            height: 48,
            width: 48,
            channels: vec![8, 16, 32],
            reflection_hidden: 8,
            relation_channels: 16,
            ..ModelConfig::default()
        },
        ..TrainConfig::default()
    }
}

/// Three domains at 48×48; domains 0 and 1 train, domain 2 is held out.
pub fn reduced_manifest(seed: u64) -> DatasetManifest {
    let split = |name: &str, count: usize, domains: Vec<usize>| SplitSpec {
        name: name.into(),
        count,
        live: count / 2,
        spoof: count / 2,
        domains,
        attack_types: vec![AttackType::Print, AttackType::Replay],
    };
    DatasetManifest {
        splits: vec![
            split(TRAIN_SPLIT, 256, vec![0, 1]),
            split(DEV_SPLIT, 128, vec![0, 1]),
            split(CROSS_TEST_SPLIT, 128, vec![2]),
        ],
        height: 48,
        width: 48,
        ..DatasetManifest::desk_scale(seed)
    }
}

/// Materialised splits shared by every run of a sweep.
#[derive(Debug, Clone)]
pub struct AblationData {
    pub train: Vec<Sample>,
    pub dev: Vec<Sample>,
    pub test: Vec<Sample>,
}

impl AblationData {
    pub fn generate(manifest: &DatasetManifest) -> Result<Self> {
        Ok(AblationData {
            train: generate_split(manifest, TRAIN_SPLIT)?,
            dev: generate_split(manifest, DEV_SPLIT)?,
            test: generate_split(manifest, CROSS_TEST_SPLIT)?,
        })
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AblationResult {
    pub variant: Variant,
    pub seed: u64,
    pub initial_loss: f64,
    pub final_loss: f64,
    pub report: EvalReport,
}

pub fn run_variant<T: Scalar>(
    base: &TrainConfig,
    variant: Variant,
    data: &AblationData,
) -> Result<AblationResult> {
    let config = variant.apply(base);
    let outcome = train_in_memory::<T>(&config, &data.train)?;
    let run = run_protocol_on(
        &outcome.checkpoint.model,
        Protocol::CrossDomain,
        &data.dev,
        data.test.clone(),
    )?;
    Ok(AblationResult {
        variant,
        seed: config.seed,
        initial_loss: outcome.log.first().map_or(f64::NAN, |r| r.l_overall),
        final_loss: outcome.log.last().map_or(f64::NAN, |r| r.l_overall),
        report: run.report,
    })
}

/// True when every value is at most its predecessor.
pub fn non_increasing(values: &[f64]) -> bool {
    values.windows(2).all(|w| w[1] <= w[0])
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn variants_switch_modules_cumulatively() {
        let base = reduced_config(1);
        let flags: Vec<_> = Variant::ALL
            .iter()
            .map(|v| {
                let c = v.apply(&base);
                (
                    c.augment.destruction,
                    c.augment.cross_class_prob > 0.0,
                    c.relation,
                )
            })
            .collect();
        assert_eq!(
            flags,
            vec![
                (false, false, false),
                (true, false, false),
                (true, true, false),
                (true, true, true)
            ]
        );
    }

    #[test]
    fn reduced_setup_is_valid() {
        reduced_config(3).validate().unwrap();
        let m = reduced_manifest(3);
        m.validate().unwrap();
        crate::protocol::check_protocol(&m, Protocol::CrossDomain).unwrap();
    }

    #[test]
    fn non_increasing_allows_ties() {
        assert!(non_increasing(&[0.4, 0.4, 0.3, 0.0]));
        assert!(!non_increasing(&[0.4, 0.41]));
        assert!(non_increasing(&[]));
    }
}
