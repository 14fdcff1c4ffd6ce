//! Reduced-scale module ablation under the cross-domain protocol.
//! Usage: `ablation [SEED...]` (default seeds 1 2 3).

use dcn::ablation::{non_increasing, reduced_config, reduced_manifest, run_variant, AblationData, Variant};

fn main() -> dcn::Result<()> {
    let seeds: Vec<u64> = std::env::args().skip(1).filter_map(|s| s.parse().ok()).collect();
    let seeds = if seeds.is_empty() { vec![1, 2, 3] } else { seeds };
    let data = AblationData::generate(&reduced_manifest(7))?;
    for seed in seeds {
        let base = reduced_config(seed);
        let mut acers = Vec::new();
        for variant in Variant::ALL {
            let r = run_variant::<f32>(&base, variant, &data)?;
            println!(
                "seed {seed} {:<18} loss {:.3} -> {:.3}  cross ACER {:.4}  HTER {:.4}",
                variant.name(),
                r.initial_loss,
                r.final_loss,
                r.report.acer,
                r.report.hter
            );
            acers.push(r.report.acer);
        }
        println!("seed {seed}: ACER non-increasing = {}", non_increasing(&acers));
    }
    Ok(())
}
