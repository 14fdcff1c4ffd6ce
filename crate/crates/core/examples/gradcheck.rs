//! Runs the finite-difference suite and prints one line per case.

use std::time::Instant;

fn main() -> dcn::Result<()> {
    let started = Instant::now();
    let results = dcn::gradcheck::run_suite(2024)?;
    for r in &results {
        println!(
            "{:<48} {:>6} entries ({} skipped)  max rel err {:.3e} at {:<28} {}",
            r.name,
            r.entries,
            r.skipped,
            r.max_rel_error,
            r.worst_entry,
            if r.passed { "ok" } else { "FAILED" }
        );
    }
    println!("{} cases in {:.1?}", results.len(), started.elapsed());
    Ok(())
}
