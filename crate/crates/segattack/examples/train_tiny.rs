//! Train a small U-Net on phantom data and watch the history: loss falls,
//! validation DSC rises, the cosine schedule decays, and the best epoch's
//! parameters are what comes back.

use segattack::data::phantom::{generate_phantoms, PhantomConfig};
use segattack::data::split_by_scan;
use segattack::models::{build_model, Arch, ModelConfig};
use segattack::training::{train, validation_dsc, TrainConfig};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let phantom = PhantomConfig {
        n_scans: 6,
        slices_per_scan: 10,
        image_size: 32,
        seed: 7,
        classes: {
            let mut classes = PhantomConfig::default().classes;
            for c in &mut classes {
                c.radius = (c.radius.0 * 0.5, c.radius.1 * 0.5);
            }
            classes
        },
        ..Default::default()
    };
    let dataset = generate_phantoms(&phantom)?;
    let (train_set, val_set) = split_by_scan(&dataset, 0.2, 3)?;
    println!("{} train / {} val slices at 32x32\n", train_set.len(), val_set.len());

    let model = build_model(&ModelConfig {
        arch: Arch::Unet,
        depth: 3,
        base_channels: 8,
        seed: 1,
        ..Default::default()
    })?;
    println!("unet depth 3 base 8: {} parameters", model.parameter_count());

    let cfg = TrainConfig {
        epochs: 8,
        batch_size: 8,
        lr_max: 2e-3,
        patience: 4,
        seed: 11,
        ..Default::default()
    };
    let (best, history) = train(model, &train_set, &val_set, &cfg)?;

    println!("\nepoch  train_loss  val_dsc  lr");
    for r in &history.records {
        println!("{:5}  {:10.4}  {:7.4}  {:.2e}", r.epoch, r.train_loss, r.val_dsc, r.lr);
    }
    println!(
        "\nbest epoch {} (val DSC {:.4}); returned checkpoint rescored: {:.4}",
        history.best_epoch,
        history.best().unwrap().val_dsc,
        validation_dsc(&best, &val_set, cfg.batch_size)?
    );
    println!("\nhistory csv:\n{}", history.to_csv());
    Ok(())
}
