use std::collections::HashSet;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::synth::{generate_sample, GeneratorConfig, GENERATOR_VERSION};
use super::{AttackType, Class, Sample, SampleMeta};
use crate::error::{DcnError, Result};
use crate::seed;

/// One named split: how many samples of each class, drawn from which domains.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub name: String,
    pub count: usize,
    pub live: usize,
    pub spoof: usize,
    pub domains: Vec<usize>,
    #[serde(default = "default_attacks")]
    pub attack_types: Vec<AttackType>,
}

fn default_attacks() -> Vec<AttackType> {
    vec![AttackType::Print, AttackType::Replay]
}

fn default_version() -> u32 {
    GENERATOR_VERSION
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub seed: u64,
    pub num_domains: usize,
    pub height: usize,
    pub width: usize,
    #[serde(default = "default_version")]
    pub generator_version: u32,
    pub splits: Vec<SplitSpec>,
}

impl DatasetManifest {
    /// Three domains: 0 and 1 for training/dev/test, 2 held out for cross-domain testing.
    pub fn desk_scale(seed: u64) -> DatasetManifest {
        let split = |name: &str, count: usize, domains: Vec<usize>| SplitSpec {
            name: name.into(),
            count,
            live: count / 2,
            spoof: count / 2,
            domains,
            attack_types: default_attacks(),
        };
        DatasetManifest {
            seed,
            num_domains: 3,
            height: 96,
            width: 96,
            generator_version: GENERATOR_VERSION,
            splits: vec![
                split("train", 512, vec![0, 1]),
                split("dev", 128, vec![0, 1]),
                split("test", 128, vec![0, 1]),
                split("test_cross", 128, vec![2]),
            ],
        }
    }

    pub fn generator(&self) -> GeneratorConfig {
        GeneratorConfig {
            height: self.height,
            width: self.width,
            num_domains: self.num_domains,
            version: self.generator_version,
        }
    }

    pub fn load(path: &Path) -> Result<DatasetManifest> {
        let text = std::fs::read_to_string(path).map_err(|e| DcnError::io(path, e))?;
        let manifest: DatasetManifest = serde_json::from_str(&text)?;
        manifest.validate()?;
        Ok(manifest)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)?;
        std::fs::write(path, text).map_err(|e| DcnError::io(path, e))
    }

    /// Collects every inconsistency rather than stopping at the first.
    pub fn validate(&self) -> Result<()> {
        let mut bad = Vec::new();
        if self.num_domains == 0 {
            bad.push("num_domains: must be positive".to_string());
        }
        if self.height == 0 || self.width == 0 {
            bad.push(format!(
                "height/width: must be positive, got {}×{}",
                self.height, self.width
            ));
        }
        if self.splits.is_empty() {
            bad.push("splits: at least one split required".to_string());
        }
        let mut names = HashSet::new();
        for s in &self.splits {
            if !names.insert(s.name.as_str()) {
                bad.push(format!("splits.{}: duplicate split name", s.name));
            }
            if s.count == 0 {
                bad.push(format!("splits.{}.count: must be positive", s.name));
            }
            if s.live + s.spoof != s.count {
                bad.push(format!(
                    "splits.{}.count: {} does not equal live ({}) + spoof ({})",
                    s.name, s.count, s.live, s.spoof
                ));
            }
            if s.domains.is_empty() {
                bad.push(format!("splits.{}.domains: empty", s.name));
            }
            for &d in &s.domains {
                if d >= self.num_domains {
                    bad.push(format!(
                        "splits.{}.domains: domain {d} outside [0, {})",
                        s.name, self.num_domains
                    ));
                }
            }
            if s.spoof > 0 && s.attack_types.is_empty() {
                bad.push(format!("splits.{}.attack_types: empty but spoof > 0", s.name));
            }
            if s.attack_types.contains(&AttackType::None) {
                bad.push(format!("splits.{}.attack_types: 'none' is not an attack", s.name));
            }
        }
        if bad.is_empty() {
            Ok(())
        } else {
            Err(DcnError::Validation { fields: bad })
        }
    }

    pub fn split(&self, name: &str) -> Result<&SplitSpec> {
        self.splits
            .iter()
            .find(|s| s.name == name)
            .ok_or_else(|| DcnError::Validation {
                fields: vec![format!("splits: no split named '{name}'")],
            })
    }

    /// First sample id of `name`; ids are assigned consecutively across splits
    /// in manifest order, so splits never share an id.
    fn id_offset(&self, name: &str) -> u64 {
        self.splits
            .iter()
            .take_while(|s| s.name != name)
            .map(|s| s.count as u64)
            .sum()
    }

    /// Metadata of every sample in a split, in generation order, without pixels.
    pub fn split_meta(&self, name: &str) -> Result<Vec<SampleMeta>> {
        self.validate()?;
        let spec = self.split(name)?;
        let offset = self.id_offset(name);
        let nd = spec.domains.len();
        let mut out = Vec::with_capacity(spec.count);
        for i in 0..spec.count {
            let (class, j) = if i < spec.live {
                (Class::Live, i)
            } else {
                (Class::Spoof, i - spec.live)
            };
            let attack_type = match class {
                Class::Live => AttackType::None,
                Class::Spoof => spec.attack_types[(j / nd) % spec.attack_types.len()],
            };
            out.push(SampleMeta {
                sample_id: offset + i as u64,
                class,
                domain_id: spec.domains[j % nd],
                attack_type,
            });
        }
        Ok(out)
    }

    pub fn sample_seed(&self, sample_id: u64) -> u64 {
        seed::derive(self.seed, sample_id)
    }

    pub fn generate(&self, meta: &SampleMeta) -> Result<Sample> {
        let mut s = generate_sample(
            &self.generator(),
            self.sample_seed(meta.sample_id),
            meta.domain_id,
            meta.class,
            meta.attack_type,
        )?;
        s.sample_id = meta.sample_id;
        Ok(s)
    }
}

/// Materialises every sample of a split.
pub fn generate_split(manifest: &DatasetManifest, split_name: &str) -> Result<Vec<Sample>> {
    manifest
        .split_meta(split_name)?
        .iter()
        .map(|m| manifest.generate(m))
        .collect()
}
