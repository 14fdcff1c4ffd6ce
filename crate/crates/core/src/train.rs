//! The training loop, its configuration, JSON-lines log and checkpoints.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::autograd::Graph;
use crate::batch::{batch_seed, AugmentConfig, BatchBuilder};
use crate::checkpoint::{self, Checkpoint};
use crate::data::{generate_split, DatasetManifest, Sample};
use crate::destruction::GridSpec;
use crate::error::{DcnError, Result};
use crate::model::{Dcn, Mode, ModelConfig};
use crate::optim::{Adam, AdamConfig};
use crate::seed;
use crate::tensor::{DType, Scalar};

/// Learning rate used in the original full-scale setting.
pub const REFERENCE_LEARNING_RATE: f64 = 1e-5;

pub const SEED_ENV: &str = "DCN_SEED";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub seed: u64,
    pub steps: u64,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// `"f32"` or `"f64"`.
    pub dtype: String,
    /// Train the relation branch; off means the reflection loss alone.
    pub relation: bool,
    /// 0 disables periodic checkpoints; the final one is always written.
    pub checkpoint_every: u64,
    /// Dataset manifest; the desk-scale manifest with `seed` when absent.
    pub manifest: Option<PathBuf>,
    pub output_dir: PathBuf,
    pub model: ModelConfig,
    pub augment: AugmentConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            seed: 7,
            steps: 500,
            batch_size: 20,
            learning_rate: 1e-4,
            dtype: "f32".into(),
            relation: true,
            checkpoint_every: 100,
            manifest: None,
            output_dir: PathBuf::from("runs/default"),
            model: ModelConfig::default(),
            augment: AugmentConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn from_toml(text: &str) -> Result<TrainConfig> {
        toml::from_str(text).map_err(|e| DcnError::config(format!("config: {}", e.message())))
    }

    pub fn load(path: &Path) -> Result<TrainConfig> {
        let text = std::fs::read_to_string(path).map_err(|e| DcnError::io(path, e))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// Applies `DCN_SEED` when set.
    pub fn apply_env(&mut self) -> Result<()> {
        if let Ok(v) = std::env::var(SEED_ENV) {
            self.seed = v
                .trim()
                .parse()
                .map_err(|_| DcnError::config(format!("{SEED_ENV}={v:?} is not an unsigned integer")))?;
        }
        Ok(())
    }

    pub fn dtype(&self) -> Result<DType> {
        match self.dtype.as_str() {
            "f32" => Ok(DType::F32),
            "f64" => Ok(DType::F64),
            other => Err(DcnError::Validation {
                fields: vec![format!("dtype ('{other}' is not f32 or f64)")],
            }),
        }
    }

    pub fn grid(&self) -> Result<GridSpec> {
        GridSpec::new(self.model.grid_rows, self.model.grid_cols)
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.learning_rate,
            ..AdamConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let mut bad = Vec::new();
        if self.steps == 0 {
            bad.push("steps (must be positive)".to_string());
        }
        if self.batch_size == 0 || !self.batch_size.is_multiple_of(2) {
            bad.push(format!(
                "batch_size ({} must be even and positive)",
                self.batch_size
            ));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            bad.push(format!("learning_rate ({} must be positive)", self.learning_rate));
        }
        if let Err(DcnError::Validation { fields }) = self.dtype() {
            bad.extend(fields);
        }
        if let Err(DcnError::Validation { fields }) = self.model.validate() {
            bad.extend(fields.into_iter().map(|f| format!("model.{f}")));
        }
        if let Err(DcnError::Validation { fields }) = self.augment.validate() {
            bad.extend(fields);
        }
        if bad.is_empty() {
            Ok(())
        } else {
            Err(DcnError::Validation { fields: bad })
        }
    }

    pub fn dataset(&self) -> Result<DatasetManifest> {
        let manifest = match &self.manifest {
            Some(path) => DatasetManifest::load(path)?,
            None => DatasetManifest::desk_scale(self.seed),
        };
        if (manifest.height, manifest.width) != (self.model.height, self.model.width) {
            return Err(DcnError::config(format!(
                "manifest images are {}×{}, model expects {}×{}",
                manifest.height, manifest.width, self.model.height, self.model.width
            )));
        }
        Ok(manifest)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainLogRecord {
    pub step: u64,
    pub l_sim: f64,
    pub l_reflection: f64,
    pub l_overall: f64,
    /// Seconds since the trainer started.
    pub wall_time: f64,
    /// Seed the step's batch was drawn from.
    pub rng_checkpoint_id: u64,
}

impl TrainLogRecord {
    /// The record without its wall-clock field, for reproducibility checks.
    pub fn deterministic_part(&self) -> (u64, f64, f64, f64, u64) {
        (
            self.step,
            self.l_sim,
            self.l_reflection,
            self.l_overall,
            self.rng_checkpoint_id,
        )
    }
}

pub struct Trainer<'a, T: Scalar> {
    config: TrainConfig,
    builder: BatchBuilder<'a>,
    pub model: Dcn<T>,
    pub optimizer: Adam<T>,
    step: u64,
    started: Instant,
}

impl<'a, T: Scalar> Trainer<'a, T> {
    pub fn new(config: &TrainConfig, pool: &'a [Sample]) -> Result<Self> {
        config.validate()?;
        let model = Dcn::new(config.model.clone(), seed::derive(config.seed, 0x1417))?;
        let optimizer = Adam::new(config.adam(), &model.params);
        Self::assemble(config, pool, model, optimizer, 0)
    }

    /// Continues from `ck`; its model config and seed must match `config`.
    pub fn resume(config: &TrainConfig, pool: &'a [Sample], ck: Checkpoint<T>) -> Result<Self> {
        config.validate()?;
        if ck.model.config.fingerprint() != config.model.fingerprint() {
            return Err(DcnError::config(
                "checkpoint was trained with a different model config",
            ));
        }
        if ck.seed != config.seed {
            return Err(DcnError::config(format!(
                "checkpoint seed {} differs from configured seed {}",
                ck.seed, config.seed
            )));
        }
        let mut optimizer = ck.optimizer;
        optimizer.config = config.adam();
        Self::assemble(config, pool, ck.model, optimizer, ck.step)
    }

    fn assemble(
        config: &TrainConfig,
        pool: &'a [Sample],
        model: Dcn<T>,
        optimizer: Adam<T>,
        step: u64,
    ) -> Result<Self> {
        let builder = BatchBuilder::new(
            pool,
            config.grid()?,
            config.model.feature_extent(),
            config.augment.clone(),
            config.batch_size,
        )?;
        Ok(Trainer {
            config: config.clone(),
            builder,
            model,
            optimizer,
            step,
            started: Instant::now(),
        })
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    pub fn is_done(&self) -> bool {
        self.step >= self.config.steps
    }

    /// One optimizer step. Parameters are untouched if anything fails.
    pub fn train_step(&mut self) -> Result<TrainLogRecord> {
        let step = self.step + 1;
        let bs = batch_seed(self.config.seed, step);
        let abort = |e: DcnError| match e {
            DcnError::NonFinite { what } => DcnError::TrainingAborted {
                step,
                batch_seed: bs,
                reason: format!("non-finite value in {what}"),
            },
            other => other,
        };
        let batch = self.builder.build::<T>(bs)?;
        let mut g = Graph::new();
        let out = self
            .model
            .forward(&mut g, &batch.images, Mode::Train, self.config.relation)
            .map_err(abort)?;
        let labels = self.config.relation.then_some(&batch.label_matrices);
        let losses = self
            .model
            .losses(&mut g, &out, &batch.reflection_labels, labels)
            .map_err(abort)?;
        let l_sim = losses.similarity.map_or(0.0, |v| g.value(v).item().as_f64());
        let l_reflection = g.value(losses.reflection).item().as_f64();
        let l_overall = g.value(losses.overall).item().as_f64();
        let grads = g.backward(losses.overall).map_err(abort)?;
        let grads = grads.for_params(&self.model.params);
        self.optimizer
            .step(&mut self.model.params, &grads)
            .map_err(abort)?;
        self.model.apply_stats(&out.stats);
        self.step = step;
        Ok(TrainLogRecord {
            step,
            l_sim,
            l_reflection,
            l_overall,
            wall_time: self.started.elapsed().as_secs_f64(),
            rng_checkpoint_id: bs,
        })
    }

    pub fn checkpoint(&self) -> Checkpoint<T> {
        Checkpoint {
            model: self.model.clone(),
            optimizer: self.optimizer.clone(),
            step: self.step,
            seed: self.config.seed,
        }
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome<T: Scalar> {
    pub checkpoint: Checkpoint<T>,
    pub log: Vec<TrainLogRecord>,
}

/// Trains on an in-memory pool without touching the filesystem.
pub fn train_in_memory<T: Scalar>(config: &TrainConfig, pool: &[Sample]) -> Result<TrainOutcome<T>> {
    let mut trainer = Trainer::<T>::new(config, pool)?;
    let mut log = Vec::with_capacity(config.steps as usize);
    while !trainer.is_done() {
        log.push(trainer.train_step()?);
    }
    Ok(TrainOutcome {
        checkpoint: trainer.checkpoint(),
        log,
    })
}

/// Artifacts of a run written by [`train`].
#[derive(Debug, Clone)]
pub struct TrainReport {
    pub log_path: PathBuf,
    pub final_checkpoint: PathBuf,
    pub records: Vec<TrainLogRecord>,
}

pub const LOG_FILE: &str = "train_log.jsonl";
pub const FINAL_CHECKPOINT: &str = "final.dcn";
pub const LAST_GOOD_CHECKPOINT: &str = "last_good.dcn";

pub fn checkpoint_name(step: u64) -> String {
    format!("step_{step:06}.dcn")
}

pub fn read_log(path: &Path) -> Result<Vec<TrainLogRecord>> {
    let file = File::open(path).map_err(|e| DcnError::io(path, e))?;
    let mut out = Vec::new();
    for line in BufReader::new(file).lines() {
        let line = line.map_err(|e| DcnError::io(path, e))?;
        if !line.trim().is_empty() {
            out.push(serde_json::from_str(&line)?);
        }
    }
    Ok(out)
}

/// Runs training to `config.steps`, writing the log, periodic checkpoints and
/// the final checkpoint under `config.output_dir`. With `resume`, continues
/// from that checkpoint and keeps the log records up to its step.
pub fn train(config: &TrainConfig, resume: Option<&Path>) -> Result<TrainReport> {
    config.validate()?;
    match config.dtype()? {
        DType::F32 => train_files::<f32>(config, resume),
        DType::F64 => train_files::<f64>(config, resume),
    }
}

fn train_files<T: Scalar>(config: &TrainConfig, resume: Option<&Path>) -> Result<TrainReport> {
    let out_dir = &config.output_dir;
    std::fs::create_dir_all(out_dir).map_err(|e| DcnError::io(out_dir, e))?;
    if config.learning_rate != REFERENCE_LEARNING_RATE {
        log::info!(
            "learning rate {} differs from the reference full-scale setting {}",
            config.learning_rate,
            REFERENCE_LEARNING_RATE
        );
    }
    let run_header = out_dir.join("run.toml");
    std::fs::write(&run_header, config.to_toml()).map_err(|e| DcnError::io(&run_header, e))?;

    let dataset = config.dataset()?;
    let pool = generate_split(&dataset, "train")?;
    let log_path = out_dir.join(LOG_FILE);

    let (mut trainer, mut records) = match resume {
        Some(path) => {
            let ck = Checkpoint::<T>::load(path)?;
            let keep = ck.step;
            let previous = if log_path.exists() {
                read_log(&log_path)?
            } else {
                Vec::new()
            };
            let kept: Vec<_> = previous.into_iter().filter(|r| r.step <= keep).collect();
            (Trainer::resume(config, &pool, ck)?, kept)
        }
        None => (Trainer::<T>::new(config, &pool)?, Vec::new()),
    };

    let file = File::create(&log_path).map_err(|e| DcnError::io(&log_path, e))?;
    let mut writer = BufWriter::new(file);
    let write = |w: &mut BufWriter<File>, r: &TrainLogRecord| -> Result<()> {
        let line = serde_json::to_string(r)?;
        writeln!(w, "{line}").map_err(|e| DcnError::io(&log_path, e))
    };
    for r in &records {
        write(&mut writer, r)?;
    }

    while !trainer.is_done() {
        let record = match trainer.train_step() {
            Ok(r) => r,
            Err(e @ DcnError::TrainingAborted { .. }) => {
                writer.flush().map_err(|e| DcnError::io(&log_path, e))?;
                let path = out_dir.join(LAST_GOOD_CHECKPOINT);
                trainer.checkpoint().save(&path)?;
                log::error!("{e}; last good checkpoint written to {}", path.display());
                return Err(e);
            }
            Err(e) => return Err(e),
        };
        write(&mut writer, &record)?;
        log::debug!(
            "step {} L={:.6} (sim {:.6}, reflection {:.6})",
            record.step,
            record.l_overall,
            record.l_sim,
            record.l_reflection
        );
        if config.checkpoint_every > 0 && record.step % config.checkpoint_every == 0 {
            writer.flush().map_err(|e| DcnError::io(&log_path, e))?;
            trainer
                .checkpoint()
                .save(&out_dir.join(checkpoint_name(record.step)))?;
        }
        records.push(record);
    }
    writer.flush().map_err(|e| DcnError::io(&log_path, e))?;
    let final_checkpoint = out_dir.join(FINAL_CHECKPOINT);
    trainer.checkpoint().save(&final_checkpoint)?;
    Ok(TrainReport {
        log_path,
        final_checkpoint,
        records,
    })
}

/// Loads a checkpoint of either precision and returns it as `f32` or `f64`
/// according to the stored dtype.
pub enum AnyCheckpoint {
    F32(Checkpoint<f32>),
    F64(Checkpoint<f64>),
}

impl AnyCheckpoint {
    pub fn load(path: &Path) -> Result<Self> {
        let m = checkpoint::read_manifest_file(path)?;
        match m.dtype.as_str() {
            "f32" => Ok(AnyCheckpoint::F32(Checkpoint::load(path)?)),
            "f64" => Ok(AnyCheckpoint::F64(Checkpoint::load(path)?)),
            other => Err(DcnError::Format(format!("unknown dtype {other}"))),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_match_desk_scale() {
        let c = TrainConfig::default();
        c.validate().unwrap();
        assert_eq!(c.batch_size, 20);
        assert_eq!(c.model.lambda, 10.0);
        assert_eq!(c.learning_rate, 1e-4);
    }

    #[test]
    fn zero_steps_rejected() {
        let c = TrainConfig {
            steps: 0,
            ..TrainConfig::default()
        };
        let DcnError::Validation { fields } = c.validate().unwrap_err() else {
            panic!()
        };
        assert!(fields[0].starts_with("steps"));
    }

    #[test]
    fn odd_batch_rejected() {
        let c = TrainConfig {
            batch_size: 9,
            ..TrainConfig::default()
        };
        assert!(c.validate().is_err());
    }

    #[test]
    fn toml_sections_and_unknown_keys() {
        let c = TrainConfig::from_toml(
            "steps = 3\nbatch_size = 4\n[model]\nchannels = [4, 4]\n[augment]\ncross_class_prob = 1.0\n",
        )
        .unwrap();
        assert_eq!(c.steps, 3);
        assert_eq!(c.model.channels, vec![4, 4]);
        assert_eq!(c.augment.cross_class_prob, 1.0);
        assert!(c.augment.destruction);
        assert!(TrainConfig::from_toml("stepz = 3").is_err());
    }

    #[test]
    fn toml_round_trip() {
        let c = TrainConfig::default();
        assert_eq!(TrainConfig::from_toml(&c.to_toml()).unwrap(), c);
    }
}
