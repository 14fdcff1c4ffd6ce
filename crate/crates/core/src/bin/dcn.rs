use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use dcn::batch::{batch_seed, BatchBuilder, ViewRecord};
use dcn::data::{generate_split, grid_overlay, write_pgm, write_ppm, DatasetManifest};
use dcn::gradcheck;
use dcn::model::Dcn;
use dcn::protocol::{self, OracleScorer, Protocol, Scorer};
use dcn::train::{self, AnyCheckpoint, TrainConfig};
use dcn::{DcnError, Scalar};

#[derive(Debug, Parser)]
#[command(
    name = "dcn",
    version,
    about = "Patch-shuffling face anti-spoofing toolkit on synthetic data"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Validate a dataset manifest and write its samples as PPM/PGM files.
    GenData(GenDataArgs),
    /// Train a model from a TOML config.
    Train(TrainArgs),
    /// Score a checkpoint under the intra or cross-domain protocol.
    Eval(EvalArgs),
    /// Write one augmented batch as before/after images with provenance.
    AugmentPreview(PreviewArgs),
    /// Compare analytic gradients with central finite differences.
    Gradcheck(GradcheckArgs),
}

#[derive(Debug, Args)]
struct GenDataArgs {
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Write the default three-domain manifest to `--manifest` first.
    #[arg(long)]
    init: bool,
    /// Seed for `--init`.
    #[arg(long, default_value_t = 7)]
    seed: u64,
    /// Only validate; write no images.
    #[arg(long)]
    check: bool,
    /// At most this many samples per split.
    #[arg(long)]
    limit: Option<usize>,
}

#[derive(Debug, Args)]
struct TrainArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    steps: Option<u64>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    learning_rate: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long, value_parser = ["f32", "f64"])]
    dtype: Option<String>,
    #[arg(long)]
    manifest: Option<PathBuf>,
    #[arg(long)]
    output_dir: Option<PathBuf>,
    /// Continue from a checkpoint written by an earlier run with the same config.
    #[arg(long)]
    resume: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct EvalArgs {
    #[arg(long, required_unless_present = "oracle")]
    checkpoint: Option<PathBuf>,
    /// Desk-scale manifest with the checkpoint's seed when omitted.
    #[arg(long)]
    manifest: Option<PathBuf>,
    #[arg(long, value_parser = ["intra", "cross"])]
    protocol: String,
    /// Score with the ground-truth reflection maps instead of a model.
    #[arg(long, conflicts_with_all = ["checkpoint", "dump_sim", "dump_features"])]
    oracle: bool,
    /// Append the report as one JSON line; printed to stdout either way.
    #[arg(long)]
    report: Option<PathBuf>,
    #[arg(long)]
    dump_scores: Option<PathBuf>,
    #[arg(long)]
    dump_sim: Option<PathBuf>,
    #[arg(long)]
    dump_features: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct PreviewArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
    /// Identity permutation for every view.
    #[arg(long)]
    identity: bool,
    /// Disable patch exchange.
    #[arg(long)]
    no_augment: bool,
    /// Draw the patch grid on the after images.
    #[arg(long)]
    overlay: bool,
}

#[derive(Debug, Args)]
struct GradcheckArgs {
    #[arg(long, default_value_t = 2024)]
    seed: u64,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::GenData(a) => gen_data(a),
        Command::Train(a) => run_train(a),
        Command::Eval(a) => eval(a),
        Command::AugmentPreview(a) => augment_preview(a),
        Command::Gradcheck(a) => run_gradcheck(a),
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                DcnError::Config(_) | DcnError::Validation { .. } => ExitCode::from(2),
                _ => ExitCode::from(1),
            }
        }
    }
}

fn create_dir(path: &Path) -> dcn::Result<()> {
    std::fs::create_dir_all(path).map_err(|e| DcnError::io(path, e))
}

fn gen_data(a: GenDataArgs) -> dcn::Result<ExitCode> {
    if a.init {
        DatasetManifest::desk_scale(a.seed).save(&a.manifest)?;
    }
    let manifest = DatasetManifest::load(&a.manifest)?;
    if a.check {
        println!("{}: ok", a.manifest.display());
        return Ok(ExitCode::SUCCESS);
    }
    create_dir(&a.out)?;
    manifest.save(&a.out.join("manifest.json"))?;
    for split in &manifest.splits {
        let dir = a.out.join(&split.name);
        create_dir(&dir)?;
        let index_path = dir.join("index.csv");
        let mut index = csv::Writer::from_path(&index_path)?;
        index.write_record(["sample_id", "class", "attack_type", "domain_id"])?;
        let metas = manifest.split_meta(&split.name)?;
        let n = a.limit.map_or(metas.len(), |l| l.min(metas.len()));
        for meta in &metas[..n] {
            let s = manifest.generate(meta)?;
            write_ppm(&s.image, &dir.join(format!("{:06}.ppm", s.sample_id)))?;
            write_pgm(
                &s.reflection_gt,
                &dir.join(format!("{:06}_reflection.pgm", s.sample_id)),
            )?;
            index.write_record([
                s.sample_id.to_string(),
                s.class.label().to_string(),
                s.attack_type.name().to_string(),
                s.domain_id.to_string(),
            ])?;
        }
        index.flush().map_err(|e| DcnError::io(&index_path, e))?;
        println!("{}: {n} samples", split.name);
    }
    Ok(ExitCode::SUCCESS)
}

fn load_config(path: Option<&Path>) -> dcn::Result<TrainConfig> {
    match path {
        Some(p) => TrainConfig::load(p),
        None => Ok(TrainConfig::default()),
    }
}

fn run_train(a: TrainArgs) -> dcn::Result<ExitCode> {
    let mut config = load_config(a.config.as_deref())?;
    config.apply_env()?;
    if let Some(v) = a.steps {
        config.steps = v;
    }
    if let Some(v) = a.seed {
        config.seed = v;
    }
    if let Some(v) = a.learning_rate {
        config.learning_rate = v;
    }
    if let Some(v) = a.batch_size {
        config.batch_size = v;
    }
    if let Some(v) = a.dtype {
        config.dtype = v;
    }
    if let Some(v) = a.manifest {
        config.manifest = Some(v);
    }
    if let Some(v) = a.output_dir {
        config.output_dir = v;
    }
    config.validate()?;
    let report = train::train(&config, a.resume.as_deref())?;
    if let (Some(first), Some(last)) = (report.records.first(), report.records.last()) {
        println!(
            "step {}: L_overall {:.6} -> step {}: L_overall {:.6}",
            first.step, first.l_overall, last.step, last.l_overall
        );
    }
    println!("log: {}", report.log_path.display());
    println!("checkpoint: {}", report.final_checkpoint.display());
    Ok(ExitCode::SUCCESS)
}

fn eval(a: EvalArgs) -> dcn::Result<ExitCode> {
    let protocol = Protocol::parse(&a.protocol).expect("clap restricts the value");
    let checkpoint = a.checkpoint.as_deref().map(AnyCheckpoint::load).transpose()?;
    let manifest = match (&a.manifest, &checkpoint) {
        (Some(p), _) => DatasetManifest::load(p)?,
        (None, Some(AnyCheckpoint::F32(ck))) => DatasetManifest::desk_scale(ck.seed),
        (None, Some(AnyCheckpoint::F64(ck))) => DatasetManifest::desk_scale(ck.seed),
        (None, None) => DatasetManifest::desk_scale(TrainConfig::default().seed),
    };
    match &checkpoint {
        None => eval_with(&OracleScorer, None::<&Dcn<f64>>, &manifest, protocol, &a),
        Some(AnyCheckpoint::F32(ck)) => eval_with(&ck.model, Some(&ck.model), &manifest, protocol, &a),
        Some(AnyCheckpoint::F64(ck)) => eval_with(&ck.model, Some(&ck.model), &manifest, protocol, &a),
    }
}

fn eval_with<T: Scalar>(
    scorer: &dyn Scorer,
    model: Option<&Dcn<T>>,
    manifest: &DatasetManifest,
    protocol: Protocol,
    a: &EvalArgs,
) -> dcn::Result<ExitCode> {
    if let Some(m) = model {
        if (m.config.height, m.config.width) != (manifest.height, manifest.width) {
            return Err(DcnError::config(format!(
                "manifest images are {}×{}, checkpoint expects {}×{}",
                manifest.height, manifest.width, m.config.height, m.config.width
            )));
        }
    }
    let run = protocol::run_protocol(scorer, manifest, protocol)?;
    if let Some(p) = &a.dump_scores {
        protocol::write_scores(p, &run.test_scores)?;
    }
    if let (Some(p), Some(m)) = (&a.dump_sim, model) {
        protocol::dump_similarity(m, &run.test_samples, p)?;
    }
    if let (Some(p), Some(m)) = (&a.dump_features, model) {
        protocol::dump_features(m, &run.test_samples, p)?;
    }
    if let Some(p) = &a.report {
        protocol::append_report(p, &run.report)?;
    }
    println!("{}", serde_json::to_string_pretty(&run.report)?);
    Ok(ExitCode::SUCCESS)
}

#[derive(Serialize)]
struct PreviewSidecar<'a> {
    batch_seed: u64,
    grid_rows: usize,
    grid_cols: usize,
    views: Vec<PreviewView<'a>>,
}

#[derive(Serialize)]
struct PreviewView<'a> {
    before: String,
    after: String,
    reflection_after: String,
    #[serde(flatten)]
    record: &'a ViewRecord,
}

fn augment_preview(a: PreviewArgs) -> dcn::Result<ExitCode> {
    let mut config = load_config(a.config.as_deref())?;
    if a.identity {
        config.augment.destruction = false;
    }
    if a.no_augment {
        config.augment.cross_class_prob = 0.0;
        config.augment.cross_subdomain_prob = 0.0;
    }
    config.validate()?;
    let grid = config.grid()?;
    let dataset = config.dataset()?;
    let pool = generate_split(&dataset, protocol::TRAIN_SPLIT)?;
    let builder = BatchBuilder::new(
        &pool,
        grid,
        config.model.feature_extent(),
        config.augment.clone(),
        config.batch_size,
    )?;
    let seed = batch_seed(config.seed, a.seed);
    let set = builder.views(seed)?;
    create_dir(&a.out)?;
    let mut views = Vec::with_capacity(set.views.len());
    for (i, (view, record)) in set.views.iter().zip(&set.records).enumerate() {
        let base = pool
            .iter()
            .find(|s| s.sample_id == record.base.sample_id)
            .expect("views come from the pool");
        let before = format!("view_{i:02}_before.ppm");
        let after = format!("view_{i:02}_after.ppm");
        let reflection_after = format!("view_{i:02}_reflection_after.pgm");
        write_ppm(&base.image, &a.out.join(&before))?;
        let image = if a.overlay {
            grid_overlay(&view.image, grid)?
        } else {
            view.image.clone()
        };
        write_ppm(&image, &a.out.join(&after))?;
        write_pgm(&view.labels[0], &a.out.join(&reflection_after))?;
        views.push(PreviewView {
            before,
            after,
            reflection_after,
            record,
        });
    }
    let sidecar = PreviewSidecar {
        batch_seed: seed,
        grid_rows: grid.rows,
        grid_cols: grid.cols,
        views,
    };
    let path = a.out.join("provenance.json");
    std::fs::write(&path, serde_json::to_string_pretty(&sidecar)?).map_err(|e| DcnError::io(&path, e))?;
    println!("{} views written to {}", set.views.len(), a.out.display());
    Ok(ExitCode::SUCCESS)
}

fn run_gradcheck(a: GradcheckArgs) -> dcn::Result<ExitCode> {
    let results = gradcheck::run_suite(a.seed)?;
    let mut failed = 0;
    for r in &results {
        println!(
            "{:<44} {:>5} entries {:>3} skipped  max rel err {:.3e}  {}",
            r.name,
            r.entries,
            r.skipped,
            r.max_rel_error,
            if r.passed { "ok" } else { "FAILED" }
        );
        failed += usize::from(!r.passed);
    }
    if failed > 0 {
        eprintln!("{failed} of {} cases failed", results.len());
        return Ok(ExitCode::from(1));
    }
    Ok(ExitCode::SUCCESS)
}
