//! Cross-class and cross-subdomain patch exchange with provenance bookkeeping.

use dcn::combination::{apply_combination, class_mask, domain_mask, plan_combination, CombinationMode};
use dcn::data::DatasetManifest;
use dcn::destruction::{destroy, GridSpec, PatchedView, Permutation, Provenance};
use dcn::seed;

fn main() -> dcn::Result<()> {
    let manifest = DatasetManifest::desk_scale(7);
    let metas = manifest.split_meta("train")?;
    let grid = GridSpec::new(3, 3)?;
    let picks = [metas[0], metas[1], metas[300], metas[301]];
    let views = picks
        .iter()
        .map(|m| {
            let s = manifest.generate(m)?;
            destroy(
                &s.image,
                std::slice::from_ref(&s.reflection_gt),
                grid,
                &Permutation::identity(grid.slots()),
                &Provenance::of_sample(m, grid.slots()),
            )
        })
        .collect::<dcn::Result<Vec<PatchedView<f32>>>>()?;

    let mut rng = seed::rng(5);
    for mode in [CombinationMode::CrossClass, CombinationMode::CrossSubdomain] {
        let base = &views[0];
        let plan = plan_combination(&mut rng, &picks[0], &picks, mode, 1..=grid.slots() - 1, grid)?;
        let mixed = apply_combination(base, &plan, &views, grid)?;
        let changed = base
            .provenance
            .slots()
            .iter()
            .zip(mixed.provenance.slots())
            .filter(|(a, b)| a != b)
            .count();
        println!("{mode:?}: slots {:?} from donors {:?}", plan.slots, plan.donors);
        println!("  classes {:?}", class_mask(&mixed.provenance));
        println!("  domains {:?}", domain_mask(&mixed.provenance));
        println!("  {changed} of {} provenance entries changed", plan.count());
    }
    Ok(())
}
