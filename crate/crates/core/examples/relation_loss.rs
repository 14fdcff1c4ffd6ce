//! Pairwise patch similarity against the class-agreement target.

use dcn::data::Class;
use dcn::relation::{build_label_matrix, build_similarity_matrix, similarity_loss, PatchFeatureMap};
use dcn::Tensor;

fn main() -> dcn::Result<()> {
    // Two slots with orthogonal features, one live and one spoof patch.
    let s = PatchFeatureMap::new(Tensor::<f64>::new(&[2, 1, 2], vec![1.0, 0.0, 0.0, 1.0])?)?;
    let a_sim = build_similarity_matrix(&s)?;
    let a_label = build_label_matrix(&[Class::Live, Class::Spoof]);
    println!("A_sim   = {:?}", a_sim.tensor().data());
    println!("A_label = {:?}", a_label.entries());
    println!("L_sim   = {}", similarity_loss(&a_sim, &a_label)?);

    // A 3×3 grid whose middle row was exchanged with spoof patches.
    let classes: Vec<Class> = (0..9)
        .map(|p| {
            if (3..6).contains(&p) {
                Class::Spoof
            } else {
                Class::Live
            }
        })
        .collect();
    let a_label = build_label_matrix(&classes);
    let features = Tensor::<f64>::from_fn(&[4, 3, 3], |i| {
        let (c, p) = (i / 9, i % 9);
        let spoof = (3..6).contains(&p);
        match (c, spoof) {
            (0, false) => 1.0,
            (0, true) => -1.0,
            _ => 0.05 * (p as f64),
        }
    });
    let a_sim = build_similarity_matrix(&PatchFeatureMap::new(features)?)?;
    println!("\nmixed 3×3 view, A_label rows:");
    for p in 0..9 {
        let row: Vec<i8> = (0..9).map(|q| a_label.get(p, q)).collect();
        let sim: Vec<String> = (0..9).map(|q| format!("{:+.2}", a_sim.get(p, q))).collect();
        println!("  {row:?}   {}", sim.join(" "));
    }
    println!("L_sim = {:.6}", similarity_loss(&a_sim, &a_label)?);
    Ok(())
}
