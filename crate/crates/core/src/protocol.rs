//! Intra- and cross-domain evaluation protocols and their file formats.

use std::collections::BTreeSet;
use std::fs::OpenOptions;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::autograd::Graph;
use crate::data::{AttackType, Class, DatasetManifest, Sample};
use crate::error::{DcnError, Result};
use crate::metrics::{apcer_bpcer_acer, eer_threshold, half_total_error, ScoredSample};
use crate::model::{Dcn, Mode};
use crate::relation::build_label_matrix;
use crate::tensor::{Scalar, Tensor};

pub const TRAIN_SPLIT: &str = "train";
pub const DEV_SPLIT: &str = "dev";
pub const TEST_SPLIT: &str = "test";
pub const CROSS_TEST_SPLIT: &str = "test_cross";

/// Samples scored per forward pass.
const EVAL_CHUNK: usize = 32;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Protocol {
    /// Threshold from `dev`, reported on `test` (same domains as training).
    Intra,
    /// Threshold from `dev`, reported on `test_cross` (held-out domains).
    CrossDomain,
}

impl Protocol {
    pub fn parse(s: &str) -> Option<Protocol> {
        match s {
            "intra" => Some(Protocol::Intra),
            "cross" | "cross_domain" => Some(Protocol::CrossDomain),
            _ => None,
        }
    }

    pub fn test_split(self) -> &'static str {
        match self {
            Protocol::Intra => TEST_SPLIT,
            Protocol::CrossDomain => CROSS_TEST_SPLIT,
        }
    }
}

/// Anything that maps samples to liveness scores (higher = more live).
pub trait Scorer {
    fn name(&self) -> String;
    fn score(&self, samples: &[Sample]) -> Result<Vec<f64>>;
}

impl<T: Scalar> Scorer for Dcn<T> {
    fn name(&self) -> String {
        "model".into()
    }

    fn score(&self, samples: &[Sample]) -> Result<Vec<f64>> {
        let mut out = Vec::with_capacity(samples.len());
        for chunk in samples.chunks(EVAL_CHUNK) {
            let images: Vec<Tensor<T>> = chunk.iter().map(|s| s.image.cast()).collect();
            out.extend(Dcn::score(self, &Tensor::stack(&images)?)?);
        }
        Ok(out)
    }
}

/// Scores each sample by `1 − mean(reflection ground truth)`.
#[derive(Debug, Clone, Copy, Default)]
pub struct OracleScorer;

impl Scorer for OracleScorer {
    fn name(&self) -> String {
        "oracle".into()
    }

    fn score(&self, samples: &[Sample]) -> Result<Vec<f64>> {
        Ok(samples
            .iter()
            .map(|s| 1.0 - s.reflection_gt.mean() as f64)
            .collect())
    }
}

#[derive(Debug, Clone, Copy)]
pub struct ConstantScorer(pub f64);

impl Scorer for ConstantScorer {
    fn name(&self) -> String {
        format!("constant({})", self.0)
    }

    fn score(&self, samples: &[Sample]) -> Result<Vec<f64>> {
        Ok(vec![self.0; samples.len()])
    }
}

pub fn score_samples(scorer: &dyn Scorer, samples: &[Sample]) -> Result<Vec<ScoredSample>> {
    let scores = scorer.score(samples)?;
    Ok(samples
        .iter()
        .zip(scores)
        .map(|(s, score)| ScoredSample {
            sample_id: s.sample_id,
            score,
            class: s.class,
            attack_type: s.attack_type,
            domain_id: s.domain_id,
        })
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Counts {
    pub live: usize,
    pub spoof: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub protocol: Protocol,
    pub scorer: String,
    pub threshold_split: String,
    pub test_split: String,
    pub threshold: f64,
    pub apcer: f64,
    pub bpcer: f64,
    pub acer: f64,
    pub far: f64,
    pub frr: f64,
    pub hter: f64,
    pub per_attack_apcer: std::collections::BTreeMap<String, f64>,
    pub counts: Counts,
}

impl EvalReport {
    /// Fixes the threshold on `dev` and reports on `test`.
    pub fn from_scores(
        protocol: Protocol,
        scorer: String,
        dev: &[ScoredSample],
        test: &[ScoredSample],
    ) -> Result<EvalReport> {
        let threshold = eer_threshold(dev)?;
        let rates = apcer_bpcer_acer(test, threshold)?;
        let ht = half_total_error(test, threshold)?;
        let live = test.iter().filter(|s| s.class == Class::Live).count();
        Ok(EvalReport {
            protocol,
            scorer,
            threshold_split: DEV_SPLIT.into(),
            test_split: protocol.test_split().into(),
            threshold,
            apcer: rates.apcer,
            bpcer: rates.bpcer,
            acer: rates.acer,
            far: ht.far,
            frr: ht.frr,
            hter: ht.hter,
            per_attack_apcer: rates.per_attack_apcer,
            counts: Counts {
                live,
                spoof: test.len() - live,
            },
        })
    }
}

#[derive(Debug, Clone)]
pub struct ProtocolRun {
    pub report: EvalReport,
    pub dev_scores: Vec<ScoredSample>,
    pub test_scores: Vec<ScoredSample>,
    pub test_samples: Vec<Sample>,
}

/// Checks that the manifest supports `protocol`.
pub fn check_protocol(manifest: &DatasetManifest, protocol: Protocol) -> Result<()> {
    let mut bad = Vec::new();
    for name in [TRAIN_SPLIT, DEV_SPLIT, protocol.test_split()] {
        if manifest.split(name).is_err() {
            bad.push(format!("splits: '{name}' required by the {protocol:?} protocol"));
        }
    }
    if !bad.is_empty() {
        return Err(DcnError::Validation { fields: bad });
    }
    let domains = |name| -> BTreeSet<usize> {
        manifest
            .split(name)
            .map(|s| s.domains.iter().copied().collect())
            .unwrap_or_default()
    };
    let train = domains(TRAIN_SPLIT);
    let test = domains(protocol.test_split());
    match protocol {
        Protocol::CrossDomain => {
            let shared: Vec<_> = train.intersection(&test).collect();
            if !shared.is_empty() {
                bad.push(format!(
                    "splits.{CROSS_TEST_SPLIT}.domains: {shared:?} also used for training"
                ));
            }
        }
        Protocol::Intra => {
            if !test.is_subset(&train) {
                bad.push(format!(
                    "splits.{TEST_SPLIT}.domains: {test:?} not all among training domains {train:?}"
                ));
            }
        }
    }
    if bad.is_empty() {
        Ok(())
    } else {
        Err(DcnError::Validation { fields: bad })
    }
}

pub fn run_protocol(
    scorer: &dyn Scorer,
    manifest: &DatasetManifest,
    protocol: Protocol,
) -> Result<ProtocolRun> {
    check_protocol(manifest, protocol)?;
    let dev = crate::data::generate_split(manifest, DEV_SPLIT)?;
    let test = crate::data::generate_split(manifest, protocol.test_split())?;
    run_protocol_on(scorer, protocol, &dev, test)
}

/// As [`run_protocol`] with splits already materialised.
pub fn run_protocol_on(
    scorer: &dyn Scorer,
    protocol: Protocol,
    dev: &[Sample],
    test: Vec<Sample>,
) -> Result<ProtocolRun> {
    let dev_scores = score_samples(scorer, dev)?;
    let test_scores = score_samples(scorer, &test)?;
    let report = EvalReport::from_scores(protocol, scorer.name(), &dev_scores, &test_scores)?;
    Ok(ProtocolRun {
        report,
        dev_scores,
        test_scores,
        test_samples: test,
    })
}

#[derive(Debug, Serialize, Deserialize)]
struct ScoreRow {
    sample_id: u64,
    score: f64,
    class: u8,
    attack_type: String,
    domain_id: usize,
}

pub fn write_scores(path: &Path, scores: &[ScoredSample]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for s in scores {
        w.serialize(ScoreRow {
            sample_id: s.sample_id,
            score: s.score,
            class: s.class.label(),
            attack_type: s.attack_type.name().into(),
            domain_id: s.domain_id,
        })?;
    }
    w.flush().map_err(|e| DcnError::io(path, e))
}

pub fn read_scores(path: &Path) -> Result<Vec<ScoredSample>> {
    let mut r = csv::Reader::from_path(path)?;
    let mut out = Vec::new();
    for row in r.deserialize() {
        let row: ScoreRow = row?;
        let class = Class::from_label(row.class)
            .ok_or_else(|| DcnError::config(format!("score file: class {} is not 0 or 1", row.class)))?;
        let attack_type = AttackType::parse(&row.attack_type).ok_or_else(|| {
            DcnError::config(format!("score file: unknown attack type {}", row.attack_type))
        })?;
        out.push(ScoredSample {
            sample_id: row.sample_id,
            score: row.score,
            class,
            attack_type,
            domain_id: row.domain_id,
        });
    }
    Ok(out)
}

/// Appends one JSON line.
pub fn append_report(path: &Path, report: &EvalReport) -> Result<()> {
    let mut f = OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(|e| DcnError::io(path, e))?;
    let line = serde_json::to_string(report)?;
    writeln!(f, "{line}").map_err(|e| DcnError::io(path, e))
}

pub fn read_reports(path: &Path) -> Result<Vec<EvalReport>> {
    let text = std::fs::read_to_string(path).map_err(|e| DcnError::io(path, e))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(DcnError::from))
        .collect()
}

/// Writes `sample_id,p,q,a_sim,a_label` for every slot pair of every sample.
/// Inputs are unmodified images, so the target matrix is all ones.
pub fn dump_similarity<T: Scalar>(model: &Dcn<T>, samples: &[Sample], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["sample_id", "p", "q", "a_sim", "a_label"])?;
    let p = model.config.slots();
    for chunk in samples.chunks(EVAL_CHUNK) {
        let images: Vec<Tensor<T>> = chunk.iter().map(|s| s.image.cast()).collect();
        let mut g = Graph::new();
        let out = model.forward(&mut g, &Tensor::stack(&images)?, Mode::Eval, true)?;
        let sim = g.value(out.similarity.expect("relation branch requested"));
        for (b, s) in chunk.iter().enumerate() {
            let labels = build_label_matrix(&vec![s.class; p]);
            for i in 0..p {
                for j in 0..p {
                    w.write_record(&[
                        s.sample_id.to_string(),
                        i.to_string(),
                        j.to_string(),
                        sim[(b * p + i) * p + j].as_f64().to_string(),
                        labels.get(i, j).to_string(),
                    ])?;
                }
            }
        }
    }
    w.flush().map_err(|e| DcnError::io(path, e))
}

/// Writes spatially averaged backbone features:
/// `sample_id,class,domain_id,attack_type,f0..f{C_f-1}`.
pub fn dump_features<T: Scalar>(model: &Dcn<T>, samples: &[Sample], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    let cf = model.config.feature_channels();
    let mut header = vec![
        "sample_id".to_string(),
        "class".into(),
        "domain_id".into(),
        "attack_type".into(),
    ];
    header.extend((0..cf).map(|c| format!("f{c}")));
    w.write_record(&header)?;
    for chunk in samples.chunks(EVAL_CHUNK) {
        let images: Vec<Tensor<T>> = chunk.iter().map(|s| s.image.cast()).collect();
        let mut g = Graph::new();
        let out = model.forward(&mut g, &Tensor::stack(&images)?, Mode::Eval, false)?;
        let f = g.value(out.features);
        let plane = f.shape()[2] * f.shape()[3];
        for (b, s) in chunk.iter().enumerate() {
            let mut row = vec![
                s.sample_id.to_string(),
                s.class.label().to_string(),
                s.domain_id.to_string(),
                s.attack_type.name().to_string(),
            ];
            for c in 0..cf {
                let start = (b * cf + c) * plane;
                let mean = f.data()[start..start + plane]
                    .iter()
                    .map(|v| v.as_f64())
                    .sum::<f64>()
                    / plane as f64;
                row.push(mean.to_string());
            }
            w.write_record(&row)?;
        }
    }
    w.flush().map_err(|e| DcnError::io(path, e))
}
