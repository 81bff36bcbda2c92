//! Run the whole pipeline through the library API: generate phantoms,
//! train, attack under every configured loss, verify the emitted images,
//! and print the final report. Equivalent to the `segattack` CLI driven
//! by the same JSON config.

use segattack::experiment::{
    cmd_attack, cmd_check, cmd_generate, cmd_report, cmd_train, ExperimentConfig,
};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let out = std::env::temp_dir().join("segattack_full_pipeline_demo");
    let _ = std::fs::remove_dir_all(&out);
    let json = format!(
        r#"{{
  "seed": 2024,
  "output_dir": "{}",
  "phantom": {{
    "n_scans": 6,
    "slices_per_scan": 8,
    "image_size": 32,
    "classes": [
      {{ "blob_count": [1, 1], "radius": [2.5, 4.0], "intensity": [0.68, 0.78], "presence": 0.9 }},
      {{ "blob_count": [1, 1], "radius": [2.0, 3.2], "intensity": [0.46, 0.56], "presence": 0.8 }},
      {{ "blob_count": [1, 1], "radius": [1.8, 2.6], "intensity": [0.26, 0.34], "presence": 0.7 }}
    ]
  }},
  "test_fraction": 0.2,
  "models": [
    {{ "name": "unet_tiny", "arch": "unet", "depth": 3, "base_channels": 6 }}
  ],
  "train": {{ "epochs": 8, "batch_size": 8, "lr_max": 0.002, "patience": 4 }},
  "attack": {{ "epsilon": 0.009, "epsilons": [0.0, 0.009, 0.015], "losses": ["bce", "focal+dice", "focal"] }}
}}"#,
        out.display()
    );
    let cfg = ExperimentConfig::from_json(&json)?;

    let g = cmd_generate(&cfg)?;
    println!("generate: {} scans -> {} train / {} test slices", g.scans, g.train_slices, g.test_slices);

    for s in cmd_train(&cfg, None)? {
        println!(
            "train:    {} ran {} epochs, best val DSC {:.4}",
            s.model_name, s.epochs_run, s.best_val_dsc
        );
    }

    for s in cmd_attack(&cfg, None)? {
        println!(
            "attack:   {} via {:<10} DSC {:.4} -> {:.4} (AS {:.4})",
            s.model_name, s.loss, s.mean_dsc_clean, s.mean_dsc_attacked, s.attack_success
        );
    }

    let check = cmd_check(&cfg)?;
    println!("check:    {} adversarial images within their epsilon bounds", check.images_checked);

    cmd_report(&cfg)?;
    println!("\n--- report.md ---\n");
    print!("{}", std::fs::read_to_string(out.join("report.md"))?);
    println!("\nartifacts under {}", out.display());
    Ok(())
}
