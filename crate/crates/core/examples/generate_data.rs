//! Materialises a few samples of the desk-scale dataset and writes them as
//! PPM/PGM files. Usage: `generate_data [OUT_DIR]`.

use std::path::PathBuf;

use dcn::data::{write_pgm, write_ppm, Class, DatasetManifest};

fn main() -> dcn::Result<()> {
    let out = std::env::args()
        .nth(1)
        .map(PathBuf::from)
        .unwrap_or_else(|| std::env::temp_dir().join("dcn_generate_data"));
    std::fs::create_dir_all(&out).map_err(|e| dcn::DcnError::io(&out, e))?;

    let manifest = DatasetManifest::desk_scale(7);
    for split in &manifest.splits {
        println!(
            "{:<11} {:>4} samples ({} live / {} spoof) from domains {:?}",
            split.name, split.count, split.live, split.spoof, split.domains
        );
    }

    // One live and one spoof sample per domain, taken from the train and cross splits.
    let mut metas = manifest.split_meta("train")?;
    metas.extend(manifest.split_meta("test_cross")?);
    for domain in 0..manifest.num_domains {
        for class in [Class::Live, Class::Spoof] {
            let Some(meta) = metas.iter().find(|m| m.domain_id == domain && m.class == class) else {
                continue;
            };
            let s = manifest.generate(meta)?;
            let stem = format!("d{domain}_{}_{}", s.attack_type.name(), s.sample_id);
            write_ppm(&s.image, &out.join(format!("{stem}.ppm")))?;
            write_pgm(&s.reflection_gt, &out.join(format!("{stem}_reflection.pgm")))?;
            println!(
                "domain {domain} {:<5} {:<6} mean intensity {:.3}  mean reflection {:.3}",
                format!("{:?}", s.class).to_lowercase(),
                s.attack_type.name(),
                s.image.mean(),
                s.reflection_gt.mean()
            );
        }
    }
    println!("images written to {}", out.display());
    Ok(())
}
