//! Presentation-attack detection error rates.
//!
//! Scores are liveness scores: a sample is classified live iff
//! `score >= threshold`, so ties go to live.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::data::{AttackType, Class};
use crate::error::{DcnError, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredSample {
    pub sample_id: u64,
    pub score: f64,
    pub class: Class,
    pub attack_type: AttackType,
    pub domain_id: usize,
}

pub fn classify_one(score: f64, threshold: f64) -> Class {
    if score >= threshold {
        Class::Live
    } else {
        Class::Spoof
    }
}

pub fn classify(scores: &[f64], threshold: f64) -> Vec<Class> {
    scores.iter().map(|&s| classify_one(s, threshold)).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorRates {
    pub apcer: f64,
    pub bpcer: f64,
    pub acer: f64,
    pub per_attack_apcer: BTreeMap<String, f64>,
}

fn check_finite(samples: &[ScoredSample]) -> Result<()> {
    match samples.iter().find(|s| !s.score.is_finite()) {
        Some(s) => Err(DcnError::NonFinite {
            what: format!("score of sample {}", s.sample_id),
        }),
        None => Ok(()),
    }
}

fn require(count: usize, class: &str) -> Result<()> {
    if count == 0 {
        Err(DcnError::Evaluation(format!(
            "no {class} samples in the evaluation set"
        )))
    } else {
        Ok(())
    }
}

/// APCER is the worst per-attack-type rate.
pub fn apcer_bpcer_acer(samples: &[ScoredSample], threshold: f64) -> Result<ErrorRates> {
    check_finite(samples)?;
    let mut per_type: BTreeMap<String, (usize, usize)> = BTreeMap::new();
    let (mut live, mut rejected) = (0usize, 0usize);
    for s in samples {
        let predicted = classify_one(s.score, threshold);
        match s.class {
            Class::Live => {
                live += 1;
                rejected += usize::from(predicted == Class::Spoof);
            }
            Class::Spoof => {
                let e = per_type.entry(s.attack_type.name().to_string()).or_default();
                e.0 += 1;
                e.1 += usize::from(predicted == Class::Live);
            }
        }
    }
    require(per_type.len(), "attack (spoof)")?;
    require(live, "bona fide (live)")?;
    let per_attack_apcer: BTreeMap<String, f64> = per_type
        .into_iter()
        .map(|(t, (n, accepted))| (t, accepted as f64 / n as f64))
        .collect();
    let apcer = per_attack_apcer.values().copied().fold(0.0, f64::max);
    let bpcer = rejected as f64 / live as f64;
    Ok(ErrorRates {
        apcer,
        bpcer,
        acer: (apcer + bpcer) / 2.0,
        per_attack_apcer,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HalfTotal {
    /// Spoof samples accepted as live.
    pub far: f64,
    /// Live samples rejected.
    pub frr: f64,
    pub hter: f64,
}

pub fn half_total_error(samples: &[ScoredSample], threshold: f64) -> Result<HalfTotal> {
    check_finite(samples)?;
    let (mut live, mut spoof, mut fa, mut fr) = (0usize, 0usize, 0usize, 0usize);
    for s in samples {
        let predicted = classify_one(s.score, threshold);
        match s.class {
            Class::Live => {
                live += 1;
                fr += usize::from(predicted == Class::Spoof);
            }
            Class::Spoof => {
                spoof += 1;
                fa += usize::from(predicted == Class::Live);
            }
        }
    }
    require(spoof, "attack (spoof)")?;
    require(live, "bona fide (live)")?;
    let far = fa as f64 / spoof as f64;
    let frr = fr as f64 / live as f64;
    Ok(HalfTotal {
        far,
        frr,
        hter: (far + frr) / 2.0,
    })
}

pub fn hter(samples: &[ScoredSample], threshold: f64) -> Result<f64> {
    Ok(half_total_error(samples, threshold)?.hter)
}

/// Threshold at the equal-error operating point.
///
/// Candidates are the midpoints between adjacent distinct scores; the one
/// minimising `|FAR − FRR|` wins and ties go to the smaller threshold. With
/// fewer than two distinct scores the single score is returned.
pub fn eer_threshold(samples: &[ScoredSample]) -> Result<f64> {
    check_finite(samples)?;
    let live_total = samples.iter().filter(|s| s.class == Class::Live).count();
    let spoof_total = samples.len() - live_total;
    require(spoof_total, "attack (spoof)")?;
    require(live_total, "bona fide (live)")?;

    let mut sorted: Vec<(f64, Class)> = samples.iter().map(|s| (s.score, s.class)).collect();
    sorted.sort_by(|a, b| a.0.total_cmp(&b.0));

    // Sweep upward; `live_below`/`spoof_below` count samples strictly below the candidate.
    let (mut live_below, mut spoof_below) = (0u128, 0u128);
    let (nl, ns) = (live_total as u128, spoof_total as u128);
    let mut best: Option<(u128, f64)> = None;
    let mut i = 0;
    while i < sorted.len() {
        let v = sorted[i].0;
        while i < sorted.len() && sorted[i].0 == v {
            match sorted[i].1 {
                Class::Live => live_below += 1,
                Class::Spoof => spoof_below += 1,
            }
            i += 1;
        }
        let Some(&(next, _)) = sorted.get(i) else { break };
        let t = v + (next - v) / 2.0;
        // FRR = live_below / nl, FAR = (ns − spoof_below) / ns, compared exactly.
        let frr = live_below * ns;
        let far = (ns - spoof_below) * nl;
        let gap = frr.abs_diff(far);
        if best.is_none_or(|(g, _)| gap < g) {
            best = Some((gap, t));
        }
    }
    Ok(best.map_or(sorted[0].0, |(_, t)| t))
}
