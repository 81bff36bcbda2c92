//! Generate a synthetic phantom dataset, print its statistics, and write
//! one slice to disk as PGM (lossless) and PNG (viewable) together with
//! its RLE-encoded masks.

use segattack::data::io::{write_mask_csv, write_pgm16, write_png_gray};
use segattack::data::phantom::{generate_phantoms, PhantomConfig};
use segattack::data::rle::rle_encode;
use segattack::data::{split_by_scan, CLASS_NAMES};
use segattack::tensor::Tensor;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let cfg = PhantomConfig { n_scans: 6, slices_per_scan: 10, seed: 7, ..Default::default() };
    let dataset = generate_phantoms(&cfg)?;
    println!(
        "generated {} slices across {} scans ({}x{} px)",
        dataset.len(),
        dataset.scan_ids().len(),
        cfg.image_size,
        cfg.image_size
    );
    println!("slices with at least one mask: {}", dataset.with_masks().len());

    for (ci, name) in CLASS_NAMES.iter().enumerate() {
        let positives = dataset
            .samples()
            .iter()
            .filter(|s| {
                let plane = cfg.image_size * cfg.image_size;
                s.mask.data()[ci * plane..(ci + 1) * plane].iter().any(|&v| v != 0.0)
            })
            .count();
        println!("  {name}: {positives} positive slices");
    }

    let (train, test) = split_by_scan(&dataset, 0.2, 3)?;
    println!(
        "scan-grouped split: {} train slices ({} scans), {} test slices ({} scans)",
        train.len(),
        train.scan_ids().len(),
        test.len(),
        test.scan_ids().len()
    );

    let out = std::env::temp_dir().join("segattack_phantom_demo");
    std::fs::create_dir_all(&out)?;
    let sample = &dataset.samples()[3];
    write_pgm16(&out.join("slice.pgm"), &sample.image)?;
    write_png_gray(&out.join("slice.png"), &sample.image)?;
    write_mask_csv(&out.join("masks.csv"), &train)?;
    println!("\nwrote {}/slice.pgm, slice.png and masks.csv", out.display());

    let plane = cfg.image_size * cfg.image_size;
    for (ci, name) in CLASS_NAMES.iter().enumerate() {
        let channel = Tensor::new(
            vec![cfg.image_size, cfg.image_size],
            sample.mask.data()[ci * plane..(ci + 1) * plane].to_vec(),
        )?;
        let rle = rle_encode(&channel)?;
        let shown = if rle.len() > 60 { format!("{}...", &rle[..60]) } else { rle };
        println!("  {} rle of {}: {}", sample.id(), name, if shown.is_empty() { "(empty)" } else { &shown });
    }
    Ok(())
}
