//! Independent oracles shared by the property tests and the acceptance run.
#![allow(dead_code)]

use dcn::combination::{apply_combination, plan_combination, CombinationMode};
use dcn::data::{AttackType, Class, SampleMeta};
use dcn::destruction::{
    assemble, destroy, sample_permutation, split, GridSpec, PatchedView, Permutation, Provenance,
};
use dcn::metrics::ScoredSample;
use dcn::relation::{build_label_matrix, build_similarity_matrix, PatchFeatureMap};
use dcn::{DcnError, Tensor};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn random_grid(r: &mut ChaCha8Rng) -> GridSpec {
    loop {
        let (rows, cols) = (r.gen_range(1..=4), r.gen_range(1..=4));
        if rows * cols >= 2 {
            return GridSpec::new(rows, cols).unwrap();
        }
    }
}

fn random_map(r: &mut ChaCha8Rng, c: usize, h: usize, w: usize) -> Tensor<f64> {
    Tensor::from_fn(&[c, h, w], |_| r.gen_range(-1.0..1.0))
}

fn meta(r: &mut ChaCha8Rng, id: u64) -> SampleMeta {
    let class = if r.gen_bool(0.5) {
        Class::Live
    } else {
        Class::Spoof
    };
    SampleMeta {
        sample_id: id,
        class,
        domain_id: r.gen_range(0..3),
        attack_type: match class {
            Class::Live => AttackType::None,
            Class::Spoof => *[AttackType::Print, AttackType::Replay].choose(r).unwrap(),
        },
    }
}

/// Patch `p` of `map`, read pixel by pixel.
fn patch_at(map: &Tensor<f64>, grid: GridSpec, p: usize) -> Vec<f64> {
    let s = map.shape();
    let (c, h, w) = (s[0], s[1], s[2]);
    let (ph, pw) = (h / grid.rows, w / grid.cols);
    let (r0, c0) = ((p / grid.cols) * ph, (p % grid.cols) * pw);
    let mut out = Vec::with_capacity(c * ph * pw);
    for ch in 0..c {
        for y in r0..r0 + ph {
            for x in c0..c0 + pw {
                out.push(map.data()[(ch * h + y) * w + x]);
            }
        }
    }
    out
}

fn sorted_bits(t: &Tensor<f64>) -> Vec<u64> {
    let mut v: Vec<u64> = t.data().iter().map(|x| x.to_bits()).collect();
    v.sort_unstable();
    v
}

/// Every permutation-algebra property on one random instance.
pub fn check_permutation_instance(seed: u64) -> Result<(), String> {
    let mut r = rng(seed);
    let grid = random_grid(&mut r);
    let slots = grid.slots();
    let (ph, pw) = (r.gen_range(1..=4), r.gen_range(1..=4));
    let c = r.gen_range(1..=3);
    let scale = r.gen_range(1..=2);
    let (h, w) = (grid.rows * ph * scale, grid.cols * pw * scale);
    let image = random_map(&mut r, c, h, w);
    let label = random_map(&mut r, 1, grid.rows * ph, grid.cols * pw);
    let m = meta(&mut r, seed);
    let provenance = Provenance::of_sample(&m, slots);
    let sigma = sample_permutation(&mut r, grid);
    let ctx = |what: &str| {
        format!(
            "seed {seed} grid {}x{} sigma {:?}: {what}",
            grid.rows,
            grid.cols,
            sigma.as_slice()
        )
    };

    let patches = split(&image, grid).map_err(|e| ctx(&e.to_string()))?;
    if patches.len() != slots || assemble(&patches, grid).map_err(|e| ctx(&e.to_string()))? != image {
        return Err(ctx("split/assemble round trip"));
    }
    let inv = sigma.inverse();
    let identity = Permutation::identity(slots);
    if sigma.then(&inv) != identity || inv.then(&sigma) != identity {
        return Err(ctx("sigma composed with its inverse is not the identity"));
    }

    let view = destroy(&image, std::slice::from_ref(&label), grid, &sigma, &provenance)
        .map_err(|e| ctx(&e.to_string()))?;
    if sorted_bits(&view.image) != sorted_bits(&image) || sorted_bits(&view.labels[0]) != sorted_bits(&label)
    {
        return Err(ctx("pixel multiset changed"));
    }
    for p in 0..slots {
        let src = sigma.as_slice()[p];
        if patch_at(&view.image, grid, p) != patch_at(&image, grid, src) {
            return Err(ctx(&format!("image slot {p} does not hold source patch {src}")));
        }
        if patch_at(&view.labels[0], grid, p) != patch_at(&label, grid, src) {
            return Err(ctx(&format!(
                "reflection slot {p} does not hold source patch {src}"
            )));
        }
        if view.provenance.slots()[p] != provenance.slots()[src]
            || view.provenance.slots()[p].source_slot != src
        {
            return Err(ctx(&format!("provenance slot {p} does not record source {src}")));
        }
    }
    let back = view.destroy(grid, &inv).map_err(|e| ctx(&e.to_string()))?;
    if back.image != image || back.labels[0] != label || back.provenance != provenance {
        return Err(ctx("inverse permutation does not restore the original"));
    }
    Ok(())
}

/// Plans and applies one random exchange and checks the bookkeeping.
/// Returns whether a plan was produced.
pub fn check_combination_instance(seed: u64) -> Result<bool, String> {
    let mut r = rng(seed);
    let grid = random_grid(&mut r);
    let slots = grid.slots();
    let n = r.gen_range(2..=10);
    let metas: Vec<SampleMeta> = (0..n as u64).map(|i| meta(&mut r, i)).collect();
    let (ph, pw) = (r.gen_range(1..=3), r.gen_range(1..=3));
    let views: Vec<PatchedView<f64>> = metas
        .iter()
        .map(|m| {
            let image = random_map(&mut r, 3, grid.rows * ph, grid.cols * pw);
            let label = random_map(&mut r, 1, grid.rows, grid.cols);
            let sigma = sample_permutation(&mut r, grid);
            destroy(&image, &[label], grid, &sigma, &Provenance::of_sample(m, slots)).unwrap()
        })
        .collect();
    let base = r.gen_range(0..n);
    let mode = if r.gen_bool(0.5) {
        CombinationMode::CrossClass
    } else {
        CombinationMode::CrossSubdomain
    };
    let lo = r.gen_range(1..slots);
    let hi = r.gen_range(lo..slots);
    let eligible = |m: &SampleMeta| match mode {
        CombinationMode::CrossClass => m.class != metas[base].class,
        CombinationMode::CrossSubdomain => m.domain_id != metas[base].domain_id,
    };
    let ctx = |what: &str| format!("seed {seed} mode {mode:?} range {lo}..={hi}: {what}");

    let plan = match plan_combination(&mut r, &metas[base], &metas, mode, lo..=hi, grid) {
        Ok(p) => p,
        Err(DcnError::Planning(_)) => {
            return if metas.iter().any(eligible) {
                Err(ctx("planning failed although an eligible donor exists"))
            } else {
                Ok(false)
            };
        }
        Err(e) => return Err(ctx(&e.to_string())),
    };
    let k = plan.count();
    if !(lo..=hi).contains(&k) || plan.donors.len() != k {
        return Err(ctx(&format!("count {k} with {} donors", plan.donors.len())));
    }
    let mut distinct = plan.slots.clone();
    distinct.sort_unstable();
    distinct.dedup();
    if distinct.len() != k || distinct.iter().any(|&s| s >= slots) {
        return Err(ctx(&format!("slots {:?} not distinct and in range", plan.slots)));
    }
    if let Some(d) = plan.donors.iter().find(|&&d| !eligible(&metas[d])) {
        return Err(ctx(&format!("donor {d} violates the eligibility constraint")));
    }

    let out = apply_combination(&views[base], &plan, &views, grid).map_err(|e| ctx(&e.to_string()))?;
    let before = views[base].provenance.slots();
    let after = out.provenance.slots();
    let changed = before.iter().zip(after).filter(|(a, b)| a != b).count();
    if changed != k {
        return Err(ctx(&format!("{changed} provenance entries differ, expected {k}")));
    }
    for p in 0..slots {
        let (expected_image, expected_label, expected_source) = match plan.slots.iter().position(|&s| s == p)
        {
            Some(i) => {
                let d = &views[plan.donors[i]];
                (
                    patch_at(&d.image, grid, p),
                    patch_at(&d.labels[0], grid, p),
                    d.provenance.slots()[p],
                )
            }
            None => (
                patch_at(&views[base].image, grid, p),
                patch_at(&views[base].labels[0], grid, p),
                before[p],
            ),
        };
        if patch_at(&out.image, grid, p) != expected_image
            || patch_at(&out.labels[0], grid, p) != expected_label
        {
            return Err(ctx(&format!(
                "slot {p} content does not match its recorded source"
            )));
        }
        if after[p] != expected_source {
            return Err(ctx(&format!("slot {p} provenance does not match its source")));
        }
    }
    Ok(true)
}

/// `A_sim` by the textbook formula, one pair at a time.
pub fn brute_force_similarity(features: &Tensor<f64>) -> Vec<f64> {
    let s = features.shape();
    let (c, p) = (s[0], s[1] * s[2]);
    let vec_of = |q: usize| -> Vec<f64> { (0..c).map(|ch| features.data()[ch * p + q]).collect() };
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-8);
    let mut out = Vec::with_capacity(p * p);
    for a in 0..p {
        for b in 0..p {
            let (u, v) = (vec_of(a), vec_of(b));
            let dot: f64 = u.iter().zip(&v).map(|(x, y)| x * y).sum();
            out.push(dot / (norm(&u) * norm(&v)));
        }
    }
    out
}

/// Compares `A_sim` and `A_label` with the brute-force oracle and checks the
/// structural properties. Returns the largest deviation from the oracle.
pub fn check_relation_instance(seed: u64) -> Result<f64, String> {
    let mut r = rng(seed);
    let (c, m, n) = (r.gen_range(1..=6), r.gen_range(1..=4), r.gen_range(1..=4));
    let features = random_map(&mut r, c, m, n);
    let p = m * n;
    let ctx = |what: &str| format!("seed {seed} C={c} grid {m}x{n}: {what}");

    let a = build_similarity_matrix(&PatchFeatureMap::new(features.clone()).unwrap())
        .map_err(|e| ctx(&e.to_string()))?;
    let oracle = brute_force_similarity(&features);
    let mut worst = 0.0f64;
    for i in 0..p {
        for j in 0..p {
            worst = worst.max((a.get(i, j) - oracle[i * p + j]).abs());
            if a.get(i, j) != a.get(j, i) {
                return Err(ctx(&format!("A_sim not symmetric at ({i}, {j})")));
            }
        }
        if (a.get(i, i) - 1.0).abs() > 1e-9 {
            return Err(ctx(&format!("A_sim diagonal {i} is {}", a.get(i, i))));
        }
    }
    if worst > 1e-9 {
        return Err(ctx(&format!("A_sim deviates from the oracle by {worst:e}")));
    }

    let k: f64 = r.gen_range(0.01..100.0);
    let scaled = build_similarity_matrix(&PatchFeatureMap::new(features.map(|v| v * k)).unwrap()).unwrap();
    for i in 0..p * p {
        if (scaled.tensor().data()[i] - a.tensor().data()[i]).abs() > 1e-9 {
            return Err(ctx(&format!("A_sim changed under scaling by {k}")));
        }
    }

    let classes: Vec<Class> = (0..p)
        .map(|_| {
            if r.gen_bool(0.5) {
                Class::Live
            } else {
                Class::Spoof
            }
        })
        .collect();
    let labels = build_label_matrix(&classes);
    for i in 0..p {
        for j in 0..p {
            let expected = if classes[i] == classes[j] { 1 } else { -1 };
            if labels.get(i, j) != expected {
                return Err(ctx(&format!("A_label ({i}, {j}) is {}", labels.get(i, j))));
            }
        }
    }
    Ok(worst)
}

/// A random scored evaluation set with both classes and at least one attack.
/// Half of the sets draw scores from a coarse grid to create ties.
pub fn random_score_set(seed: u64) -> Vec<ScoredSample> {
    let mut r = rng(seed);
    let n = r.gen_range(2..=80);
    let coarse = r.gen_bool(0.5);
    let mut out: Vec<ScoredSample> = (0..n)
        .map(|i| {
            let class = if r.gen_bool(0.5) {
                Class::Live
            } else {
                Class::Spoof
            };
            let attack_type = match class {
                Class::Live => AttackType::None,
                Class::Spoof => *[AttackType::Print, AttackType::Replay].choose(&mut r).unwrap(),
            };
            let shift = if class == Class::Live { 0.15 } else { -0.15 };
            let raw: f64 = (r.gen_range(0.0..1.0f64) + shift).clamp(0.0, 1.0);
            ScoredSample {
                sample_id: i as u64,
                score: if coarse { (raw * 10.0).round() / 10.0 } else { raw },
                class,
                attack_type,
                domain_id: 0,
            }
        })
        .collect();
    out[0].class = Class::Live;
    out[0].attack_type = AttackType::None;
    out[1].class = Class::Spoof;
    out[1].attack_type = AttackType::Print;
    out
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CountedRates {
    pub apcer: f64,
    pub bpcer: f64,
    pub acer: f64,
    pub far: f64,
    pub frr: f64,
    pub hter: f64,
}

/// Error rates by explicit counting, live iff `score >= threshold`.
pub fn counting_oracle(samples: &[ScoredSample], threshold: f64) -> CountedRates {
    let live: Vec<_> = samples.iter().filter(|s| s.class == Class::Live).collect();
    let spoof: Vec<_> = samples.iter().filter(|s| s.class == Class::Spoof).collect();
    let rejected = live.iter().filter(|s| s.score < threshold).count();
    let accepted = spoof.iter().filter(|s| s.score >= threshold).count();
    let mut apcer = 0.0f64;
    for t in [AttackType::Print, AttackType::Replay] {
        let of_type: Vec<_> = spoof.iter().filter(|s| s.attack_type == t).collect();
        if !of_type.is_empty() {
            let a = of_type.iter().filter(|s| s.score >= threshold).count();
            apcer = apcer.max(a as f64 / of_type.len() as f64);
        }
    }
    let bpcer = rejected as f64 / live.len() as f64;
    let far = accepted as f64 / spoof.len() as f64;
    CountedRates {
        apcer,
        bpcer,
        acer: (apcer + bpcer) / 2.0,
        far,
        frr: bpcer,
        hter: (far + bpcer) / 2.0,
    }
}

/// EER threshold by exhaustive search over every midpoint candidate,
/// comparing `|FAR − FRR|` as exact fractions.
pub fn brute_force_eer(samples: &[ScoredSample]) -> f64 {
    let mut values: Vec<f64> = samples.iter().map(|s| s.score).collect();
    values.sort_by(f64::total_cmp);
    values.dedup();
    if values.len() < 2 {
        return values[0];
    }
    let nl = samples.iter().filter(|s| s.class == Class::Live).count() as i128;
    let ns = samples.len() as i128 - nl;
    let mut best: Option<(i128, f64)> = None;
    for w in values.windows(2) {
        let t = w[0] + (w[1] - w[0]) / 2.0;
        let fa = samples
            .iter()
            .filter(|s| s.class == Class::Spoof && s.score >= t)
            .count() as i128;
        let fr = samples
            .iter()
            .filter(|s| s.class == Class::Live && s.score < t)
            .count() as i128;
        let gap = (fa * nl - fr * ns).abs();
        if best.is_none_or(|(g, _)| gap < g) {
            best = Some((gap, t));
        }
    }
    best.unwrap().1
}
