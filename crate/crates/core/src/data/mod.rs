//! Synthetic live/spoof samples, dataset manifests and image previews.

mod manifest;
mod preview;
mod synth;

use serde::{Deserialize, Serialize};

use crate::tensor::Tensor;

pub use manifest::{generate_split, DatasetManifest, SplitSpec};
pub use preview::{encode_pgm, encode_ppm, grid_overlay, write_pgm, write_ppm};
pub use synth::{
    generate_sample, generate_sample_with_mask, DomainStyle, GeneratorConfig, GENERATOR_VERSION,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Class {
    Live,
    Spoof,
}

impl Class {
    /// Numeric label: live = 1, spoof = 0.
    pub fn label(self) -> u8 {
        match self {
            Class::Live => 1,
            Class::Spoof => 0,
        }
    }

    pub fn from_label(v: u8) -> Option<Class> {
        match v {
            1 => Some(Class::Live),
            0 => Some(Class::Spoof),
            _ => None,
        }
    }

    pub fn other(self) -> Class {
        match self {
            Class::Live => Class::Spoof,
            Class::Spoof => Class::Live,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AttackType {
    None,
    Print,
    Replay,
}

impl AttackType {
    pub fn name(self) -> &'static str {
        match self {
            AttackType::None => "none",
            AttackType::Print => "print",
            AttackType::Replay => "replay",
        }
    }

    pub fn parse(s: &str) -> Option<AttackType> {
        match s {
            "none" => Some(AttackType::None),
            "print" => Some(AttackType::Print),
            "replay" => Some(AttackType::Replay),
            _ => None,
        }
    }
}

/// The identifying fields of a sample, without pixel data.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct SampleMeta {
    pub sample_id: u64,
    pub class: Class,
    pub domain_id: usize,
    pub attack_type: AttackType,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    /// `3×H×W`, values in `[0, 1]`.
    pub image: Tensor<f32>,
    /// `1×H×W`, values in `[0, 1]`; identically zero for live samples.
    pub reflection_gt: Tensor<f32>,
    pub class: Class,
    pub domain_id: usize,
    pub attack_type: AttackType,
    pub sample_id: u64,
}

impl Sample {
    pub fn meta(&self) -> SampleMeta {
        SampleMeta {
            sample_id: self.sample_id,
            class: self.class,
            domain_id: self.domain_id,
            attack_type: self.attack_type,
        }
    }
}
