//! Scores the desk-scale dataset under both protocols. Without arguments the
//! ground-truth oracle and a constant scorer are used; pass a checkpoint path
//! to score a trained model instead.

use std::path::Path;

use dcn::data::DatasetManifest;
use dcn::protocol::{run_protocol, ConstantScorer, OracleScorer, Protocol, Scorer};
use dcn::train::AnyCheckpoint;

fn report(scorer: &dyn Scorer, manifest: &DatasetManifest) -> dcn::Result<()> {
    for protocol in [Protocol::Intra, Protocol::CrossDomain] {
        let r = run_protocol(scorer, manifest, protocol)?.report;
        println!(
            "{:<12} {:<13} thr {:.4}  APCER {:.3} BPCER {:.3} ACER {:.3}  HTER {:.3}  per attack {:?}",
            r.scorer, r.test_split, r.threshold, r.apcer, r.bpcer, r.acer, r.hter, r.per_attack_apcer
        );
    }
    Ok(())
}

fn main() -> dcn::Result<()> {
    let manifest = DatasetManifest::desk_scale(7);
    match std::env::args().nth(1) {
        Some(path) => match AnyCheckpoint::load(Path::new(&path))? {
            AnyCheckpoint::F32(ck) => report(&ck.model, &DatasetManifest::desk_scale(ck.seed)),
            AnyCheckpoint::F64(ck) => report(&ck.model, &DatasetManifest::desk_scale(ck.seed)),
        },
        None => {
            report(&OracleScorer, &manifest)?;
            report(&ConstantScorer(0.5), &manifest)
        }
    }
}
