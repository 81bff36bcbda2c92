//! Sweep the FGSM perturbation budget and print the DSC/attack-success
//! table: the larger the epsilon, the stronger the attack.

use segattack::attack::{epsilon_sweep, AttackConfig};
use segattack::data::phantom::{generate_phantoms, PhantomConfig};
use segattack::data::split_by_scan;
use segattack::losses::LossKind;
use segattack::models::{build_model, Arch, ModelConfig};
use segattack::training::{train, TrainConfig};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let phantom = PhantomConfig { n_scans: 6, slices_per_scan: 10, seed: 33, ..Default::default() };
    let dataset = generate_phantoms(&phantom)?;
    let (train_set, test_set) = split_by_scan(&dataset, 0.2, 3)?;

    let model = build_model(&ModelConfig {
        arch: Arch::Unet,
        depth: 3,
        base_channels: 8,
        seed: 4,
        ..Default::default()
    })?;
    let cfg = TrainConfig { epochs: 10, lr_max: 2e-3, patience: 5, seed: 17, ..Default::default() };
    println!("training on {} slices...", train_set.len());
    let (model, _) = train(model, &train_set, &test_set, &cfg)?;

    let attack_cfg = AttackConfig {
        attack_loss: LossKind::Bce,
        epsilons: Some(vec![0.0, 0.005, 0.009, 0.015, 0.03]),
        ..Default::default()
    };
    let rows = epsilon_sweep(&model, &attack_cfg, &test_set.with_masks(), 8)?;

    println!("\nepsilon   mean DSC   attack success");
    for row in &rows {
        println!("{:7}   {:8.4}   {:.4}", row.epsilon, row.mean_dsc, row.attack_success);
    }
    println!("\ncsv form:");
    println!("epsilon,mean_dsc,attack_success");
    for row in &rows {
        println!("{},{},{}", row.epsilon, row.mean_dsc, row.attack_success);
    }
    Ok(())
}
