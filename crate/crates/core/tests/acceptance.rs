//! Acceptance run: one PASS/FAIL line per criterion.
//!
//! `cargo test --test acceptance [-- NAME...]` runs all criteria or those whose
//! name contains one of the given substrings. The exit status is zero unless
//! `DCN_ACCEPTANCE_STRICT=1` is set and a criterion failed.

mod common;

use std::process::ExitCode;
use std::time::{Duration, Instant};

use dcn::ablation::{non_increasing, reduced_config, reduced_manifest, run_variant, AblationData, Variant};
use dcn::autograd::Graph;
use dcn::data::{generate_split, Class, DatasetManifest};
use dcn::metrics::{apcer_bpcer_acer, eer_threshold, half_total_error};
use dcn::model::{reflection_loss, Dcn, Mode, ModelConfig};
use dcn::protocol::{run_protocol_on, Protocol};
use dcn::relation::{build_label_matrix, build_similarity_matrix, similarity_loss, PatchFeatureMap};
use dcn::train::{train_in_memory, TrainConfig};
use dcn::Tensor;

const GRADCHECK_BUDGET: Duration = Duration::from_secs(60);
const PERMUTATION_BUDGET: Duration = Duration::from_secs(30);
const TRAINING_BUDGET: Duration = Duration::from_secs(600);
const LOSS_TOLERANCE: f64 = 1e-9;
const SIMILARITY_TOLERANCE: f64 = 1e-9;
const PERMUTATION_INSTANCES: u64 = 1000;
const COMBINATION_PLANS: usize = 1000;
const RELATION_INSTANCES: u64 = 1000;
const METRIC_SETS: u64 = 200;
const ABLATION_SEEDS: [u64; 3] = [1, 2, 3];

type Check = fn() -> Result<String, String>;

fn gradient_correctness() -> Result<String, String> {
    let started = Instant::now();
    let results = dcn::gradcheck::run_suite(2024).map_err(|e| e.to_string())?;
    let elapsed = started.elapsed();
    let worst = results.iter().map(|r| r.max_rel_error).fold(0.0, f64::max);
    let entries: usize = results.iter().map(|r| r.entries).sum();
    let skipped: usize = results.iter().map(|r| r.skipped).sum();
    let failed: Vec<_> = results
        .iter()
        .filter(|r| !r.passed)
        .map(|r| r.name.as_str())
        .collect();
    let detail = format!(
        "{} cases, {entries} entries ({skipped} at ReLU kinks), max rel err {worst:.2e} (< 1e-4), {elapsed:.1?} (< 60 s)",
        results.len()
    );
    if failed.is_empty() && elapsed < GRADCHECK_BUDGET {
        Ok(detail)
    } else {
        Err(format!("{detail}; failing cases {failed:?}"))
    }
}

fn loss_identities() -> Result<String, String> {
    let mut problems = Vec::new();
    let mut check = |what: &str, got: f64, want: f64| {
        if (got - want).abs() > LOSS_TOLERANCE {
            problems.push(format!("{what} = {got}, expected {want}"));
        }
    };

    let classes = [Class::Live, Class::Spoof, Class::Spoof, Class::Live];
    let labels = build_label_matrix(&classes);
    let aligned = Tensor::<f64>::from_fn(&[1, 2, 2], |p| if classes[p] == Class::Live { 1.0 } else { -1.0 });
    let a = build_similarity_matrix(&PatchFeatureMap::new(aligned).unwrap()).unwrap();
    check(
        "L_sim(A_label, A_label)",
        similarity_loss(&a, &labels).unwrap(),
        0.0,
    );

    let orthogonal = Tensor::<f64>::new(&[2, 1, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
    let a = build_similarity_matrix(&PatchFeatureMap::new(orthogonal).unwrap()).unwrap();
    check(
        "L_sim two-slot example",
        similarity_loss(&a, &build_label_matrix(&[Class::Live, Class::Spoof])).unwrap(),
        1.0,
    );

    let r = Tensor::<f64>::from_fn(&[1, 6, 6], |i| (i as f64 * 0.61).cos().abs());
    check("L_reflection(R, R)", reflection_loss(&r, &r).unwrap(), 0.0);
    check(
        "L_reflection ones vs zeros",
        reflection_loss(&Tensor::<f64>::ones(&[1, 6, 6]), &Tensor::zeros(&[1, 6, 6])).unwrap(),
        1.0,
    );

    let config = ModelConfig {
        height: 16,
        width: 16,
        grid_rows: 2,
        grid_cols: 2,
        channels: vec![3, 4],
        reflection_hidden: 4,
        relation_channels: 4,
        ..ModelConfig::default()
    };
    let model = Dcn::<f64>::new(config.clone(), 9).unwrap();
    let mut r = common::rng(4);
    let images = Tensor::<f64>::from_fn(&[2, 3, 16, 16], |_| rand::Rng::gen_range(&mut r, 0.0..1.0));
    let (hf, wf) = config.feature_extent();
    let reflection = Tensor::<f64>::from_fn(&[2, 1, hf, wf], |i| (i % 3) as f64 / 2.0);
    let lm = build_label_matrix(&classes).to_tensor::<f64>();
    let label_matrices = Tensor::stack(&[lm.clone(), lm]).unwrap();
    let mut g = Graph::new();
    let out = model.forward(&mut g, &images, Mode::Train, true).unwrap();
    let losses = model
        .losses(&mut g, &out, &reflection, Some(&label_matrices))
        .unwrap();
    let sim = g.value(losses.similarity.unwrap()).item();
    let refl = g.value(losses.reflection).item();
    let overall = g.value(losses.overall).item();
    check(
        "L_overall - (L_sim + λ·L_reflection)",
        overall - (sim + config.lambda * refl),
        0.0,
    );

    if problems.is_empty() {
        Ok(format!(
            "5 identities within {LOSS_TOLERANCE:e}; model decomposition {sim:.4} + {}·{refl:.4} = {overall:.4}",
            config.lambda
        ))
    } else {
        Err(problems.join("; "))
    }
}

fn permutation_algebra() -> Result<String, String> {
    let started = Instant::now();
    for seed in 0..PERMUTATION_INSTANCES {
        common::check_permutation_instance(seed)?;
    }
    let elapsed = started.elapsed();
    let detail =
        format!("{PERMUTATION_INSTANCES} random (grid, sigma) instances exact in {elapsed:.1?} (< 30 s)");
    if elapsed < PERMUTATION_BUDGET {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn combination_bookkeeping() -> Result<String, String> {
    let (mut plans, mut unplannable, mut seed) = (0, 0, 0u64);
    while plans < COMBINATION_PLANS {
        if common::check_combination_instance(seed)? {
            plans += 1;
        } else {
            unplannable += 1;
        }
        seed += 1;
    }
    Ok(format!(
        "{plans} plans exact ({unplannable} pools without an eligible donor correctly refused)"
    ))
}

fn relation_matrices() -> Result<String, String> {
    let mut worst = 0.0f64;
    for seed in 0..RELATION_INSTANCES {
        worst = worst.max(common::check_relation_instance(seed)?);
    }
    Ok(format!(
        "{RELATION_INSTANCES} instances, max |A_sim - oracle| {worst:.1e} (<= {SIMILARITY_TOLERANCE:e}); symmetry, unit diagonal, scale invariance, A_label exact"
    ))
}

fn metrics() -> Result<String, String> {
    let mut checked = 0;
    for seed in 0..METRIC_SETS {
        let samples = common::random_score_set(seed);
        let t = eer_threshold(&samples).map_err(|e| e.to_string())?;
        if t != common::brute_force_eer(&samples) {
            return Err(format!(
                "seed {seed}: EER threshold {t} differs from exhaustive search"
            ));
        }
        let mut previous: Option<(f64, f64)> = None;
        let mut thresholds: Vec<f64> = (0..=20).map(|k| k as f64 / 20.0).collect();
        thresholds.push(t);
        thresholds.sort_by(f64::total_cmp);
        for &th in &thresholds {
            let o = common::counting_oracle(&samples, th);
            let r = apcer_bpcer_acer(&samples, th).map_err(|e| e.to_string())?;
            let h = half_total_error(&samples, th).map_err(|e| e.to_string())?;
            if (r.apcer, r.bpcer, r.acer) != (o.apcer, o.bpcer, o.acer)
                || (h.far, h.frr, h.hter) != (o.far, o.frr, o.hter)
            {
                return Err(format!(
                    "seed {seed} threshold {th}: {r:?} / {h:?} vs oracle {o:?}"
                ));
            }
            if r.acer != (r.apcer + r.bpcer) / 2.0 {
                return Err(format!("seed {seed} threshold {th}: ACER identity broken"));
            }
            if let Some((apcer, bpcer)) = previous {
                if r.apcer > apcer || r.bpcer < bpcer {
                    return Err(format!(
                        "seed {seed} threshold {th}: rates not monotone in the threshold"
                    ));
                }
            }
            previous = Some((r.apcer, r.bpcer));
            checked += 1;
        }
    }
    Ok(format!(
        "{METRIC_SETS} randomized score sets, {checked} (set, threshold) pairs equal the counting oracle exactly; ACER identity and monotonicity hold"
    ))
}

fn end_to_end_training() -> Result<String, String> {
    let started = Instant::now();
    let config = TrainConfig::default();
    let manifest = DatasetManifest::desk_scale(config.seed);
    let counts: Vec<_> = manifest
        .splits
        .iter()
        .map(|s| format!("{} {}", s.name, s.count))
        .collect();
    let pool = generate_split(&manifest, "train").map_err(|e| e.to_string())?;
    let outcome = train_in_memory::<f32>(&config, &pool).map_err(|e| e.to_string())?;
    let dev = generate_split(&manifest, "dev").map_err(|e| e.to_string())?;
    let test = generate_split(&manifest, "test").map_err(|e| e.to_string())?;
    let run =
        run_protocol_on(&outcome.checkpoint.model, Protocol::Intra, &dev, test).map_err(|e| e.to_string())?;
    let elapsed = started.elapsed();

    let initial = outcome.log.first().map(|r| r.l_overall).unwrap_or(f64::NAN);
    let last = outcome.log.last().map(|r| r.l_overall).unwrap_or(f64::NAN);
    let acer = run.report.acer;
    let detail = format!(
        "{} ({}), {} steps, L_overall {initial:.4} -> {last:.4} (ratio {:.3} <= 0.5), intra ACER {acer:.4} (< 0.5), {:.0?} (< 600 s)",
        counts.join("/"),
        format_args!("{}x{}, {} domains", manifest.height, manifest.width, manifest.num_domains),
        outcome.log.len(),
        last / initial,
        elapsed
    );
    if outcome.log.len() == 500 && last <= 0.5 * initial && acer < 0.5 && elapsed < TRAINING_BUDGET {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn ablation_trend() -> Result<String, String> {
    let data = AblationData::generate(&reduced_manifest(7)).map_err(|e| e.to_string())?;
    let mut holding = 0;
    let mut rows = Vec::new();
    for seed in ABLATION_SEEDS {
        let base = reduced_config(seed);
        let mut acers = Vec::new();
        for variant in Variant::ALL {
            let r = run_variant::<f32>(&base, variant, &data).map_err(|e| e.to_string())?;
            acers.push(r.report.acer);
        }
        let ok = non_increasing(&acers);
        holding += usize::from(ok);
        let shown: Vec<String> = acers.iter().map(|a| format!("{a:.3}")).collect();
        rows.push(format!(
            "seed {seed} [{}]{}",
            shown.join(" "),
            if ok { "" } else { " x" }
        ));
    }
    let detail = format!(
        "cross-domain ACER baseline/+shuffle/+exchange/full: {}; non-increasing on {holding}/{} seeds (need >= 2)",
        rows.join(", "),
        ABLATION_SEEDS.len()
    );
    if holding >= 2 {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn main() -> ExitCode {
    let criteria: [(&str, Check); 8] = [
        ("gradient-correctness", gradient_correctness),
        ("loss-identities", loss_identities),
        ("permutation-algebra", permutation_algebra),
        ("combination-bookkeeping", combination_bookkeeping),
        ("similarity-and-label-matrices", relation_matrices),
        ("metrics", metrics),
        ("end-to-end-training", end_to_end_training),
        ("ablation-trend", ablation_trend),
    ];
    let filters: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let mut failed = 0;
    let mut ran = 0;
    for (name, check) in criteria {
        if !filters.is_empty() && !filters.iter().any(|f| name.contains(f.as_str())) {
            continue;
        }
        ran += 1;
        match check() {
            Ok(detail) => println!("PASS {name}: {detail}"),
            Err(detail) => {
                failed += 1;
                println!("FAIL {name}: {detail}");
            }
        }
    }
    println!("{} of {ran} criteria passed", ran - failed);
    let strict = std::env::var("DCN_ACCEPTANCE_STRICT").is_ok_and(|v| v == "1");
    if strict && failed > 0 {
        ExitCode::FAILURE
    } else {
        ExitCode::SUCCESS
    }
}
