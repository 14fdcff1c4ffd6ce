//! Trains the desk-scale model in memory and prints the loss curve.
//! Usage: `train_desk [STEPS]` (default 60).

use dcn::data::generate_split;
use dcn::protocol::{run_protocol_on, Protocol};
use dcn::train::{train_in_memory, TrainConfig};

fn main() -> dcn::Result<()> {
    let steps = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(60);
    let config = TrainConfig {
        steps,
        ..TrainConfig::default()
    };
    let manifest = config.dataset()?;
    let pool = generate_split(&manifest, "train")?;
    println!("training {} steps on {} samples", config.steps, pool.len());

    let outcome = train_in_memory::<f32>(&config, &pool)?;
    let every = (steps / 10).max(1);
    for r in outcome.log.iter().filter(|r| r.step == 1 || r.step % every == 0) {
        println!(
            "step {:>4}  L_sim {:.4}  L_reflection {:.4}  L_overall {:.4}  {:>6.1}s",
            r.step, r.l_sim, r.l_reflection, r.l_overall, r.wall_time
        );
    }

    let dev = generate_split(&manifest, "dev")?;
    let test = generate_split(&manifest, "test")?;
    let run = run_protocol_on(&outcome.checkpoint.model, Protocol::Intra, &dev, test)?;
    println!(
        "intra-domain: threshold {:.4}  APCER {:.3}  BPCER {:.3}  ACER {:.3}",
        run.report.threshold, run.report.apcer, run.report.bpcer, run.report.acer
    );
    Ok(())
}
