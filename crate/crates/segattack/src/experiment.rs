//! Experiment front end: a single JSON config drives generation, training,
//! attacking and reporting, with every artifact written under one output
//! directory. Commands are idempotent: unchanged inputs produce
//! byte-identical outputs, and a whole pipeline is reproducible from the
//! config plus seed alone.

use crate::attack::{attack_batch, epsilon_sweep, fgsm, AttackConfig, AttackError};
use crate::data::augment::AugmentConfig;
use crate::data::io::{
    load_dataset, parse_sample_id, read_pgm, save_dataset, write_manifest, write_pgm16,
    write_png_gray, write_png_rgb,
};
use crate::data::phantom::{derive_seed, generate_phantoms, BlobClassConfig, PhantomConfig};
use crate::data::{split_by_scan, DataError, Dataset, CLASS_NAMES};
use crate::losses::{LossError, LossKind};
use crate::metrics::{binarize, diff_map, EvalRow, MetricsError};
use crate::models::{build_model, Arch, Model, ModelConfig, ModelError};
use crate::training::{train, TrainConfig, TrainError};
use crate::tensor::{Tensor, TensorError};
use serde::{Deserialize, Serialize};
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error("config: {0}")]
    Config(String),
    #[error("config json: {0}")]
    Json(#[from] serde_json::Error),
    #[error("{what} not found; {hint}")]
    MissingArtifact { what: String, hint: String },
    #[error("check failed: {0}")]
    CheckFailed(String),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Attack(#[from] AttackError),
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

// ── JSON schema ─────────────────────────────────────────────────────

fn default_version() -> u32 {
    1
}
fn default_image_size() -> usize {
    64
}
fn default_noise() -> f64 {
    0.05
}
fn default_edge() -> f64 {
    0.35
}
fn default_test_fraction() -> f64 {
    0.1
}
fn default_depth() -> usize {
    5
}
fn default_base_channels() -> usize {
    16
}
fn default_epochs() -> usize {
    15
}
fn default_batch_size() -> usize {
    8
}
fn default_lr_max() -> f64 {
    3e-4
}
fn default_lr_min() -> f64 {
    1e-6
}
fn default_weight_decay() -> f64 {
    1e-3
}
fn default_patience() -> usize {
    3
}
fn default_loss() -> String {
    "focal+dice".into()
}
fn default_epsilon() -> f64 {
    0.009
}
fn default_epsilons() -> Option<Vec<f64>> {
    Some(vec![0.0, 0.005, 0.009, 0.015])
}
fn default_attack_losses() -> Vec<String> {
    vec!["bce".into(), "focal+dice".into(), "focal".into()]
}
fn default_max_shift() -> f64 {
    0.1
}
fn default_scale_range() -> [f64; 2] {
    [0.9, 1.1]
}
fn default_deform_strength() -> f64 {
    1.5
}
fn default_deform_grid() -> usize {
    4
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawClass {
    blob_count: [usize; 2],
    radius: [f64; 2],
    intensity: [f64; 2],
    presence: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawPhantom {
    n_scans: usize,
    slices_per_scan: usize,
    #[serde(default = "default_image_size")]
    image_size: usize,
    #[serde(default = "default_noise")]
    noise_level: f64,
    #[serde(default = "default_edge")]
    edge_softness: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    classes: Option<Vec<RawClass>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    seed: Option<u64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawModel {
    name: String,
    arch: String,
    #[serde(default = "default_depth")]
    depth: usize,
    #[serde(default = "default_base_channels")]
    base_channels: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    seed: Option<u64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawAugment {
    #[serde(default = "default_max_shift")]
    max_shift: f64,
    #[serde(default = "default_scale_range")]
    scale_range: [f64; 2],
    #[serde(default = "default_deform_strength")]
    deform_strength: f64,
    #[serde(default = "default_deform_grid")]
    deform_grid: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawTrain {
    #[serde(default = "default_epochs")]
    epochs: usize,
    #[serde(default = "default_batch_size")]
    batch_size: usize,
    #[serde(default = "default_lr_max")]
    lr_max: f64,
    #[serde(default = "default_lr_min")]
    lr_min: f64,
    #[serde(default = "default_weight_decay")]
    weight_decay: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    max_iterations: Option<usize>,
    #[serde(default = "default_patience")]
    patience: usize,
    #[serde(default = "default_loss")]
    loss: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    augment: Option<RawAugment>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    seed: Option<u64>,
}

impl Default for RawTrain {
    fn default() -> Self {
        serde_json::from_str("{}").expect("all fields defaulted")
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawAttack {
    #[serde(default = "default_epsilon")]
    epsilon: f64,
    #[serde(default = "default_epsilons")]
    epsilons: Option<Vec<f64>>,
    #[serde(default = "default_attack_losses")]
    losses: Vec<String>,
}

impl Default for RawAttack {
    fn default() -> Self {
        serde_json::from_str("{}").expect("all fields defaulted")
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawConfig {
    #[serde(default = "default_version")]
    version: u32,
    seed: u64,
    output_dir: String,
    phantom: RawPhantom,
    #[serde(default = "default_test_fraction")]
    test_fraction: f64,
    models: Vec<RawModel>,
    #[serde(default)]
    train: RawTrain,
    #[serde(default)]
    attack: RawAttack,
}

// ── Resolved config ─────────────────────────────────────────────────

/// Fully resolved experiment: every sub-seed filled in, every selector
/// parsed. Constructed from JSON (see the README for the schema).
#[derive(Debug, Clone)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub output_dir: PathBuf,
    pub phantom: PhantomConfig,
    pub test_fraction: f64,
    pub split_seed: u64,
    pub models: Vec<(String, ModelConfig)>,
    pub train: TrainConfig,
    pub attack: AttackConfig,
    pub attack_losses: Vec<LossKind>,
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self, ExperimentError> {
        let raw: RawConfig = serde_json::from_str(text)?;
        Self::resolve(raw)
    }

    pub fn load(path: &Path) -> Result<Self, ExperimentError> {
        let text = std::fs::read_to_string(path).map_err(|e| ExperimentError::Config(format!(
            "cannot read config {}: {e}",
            path.display()
        )))?;
        Self::from_json(&text)
    }

    /// CLI overrides: `--seed` rewrites the global seed (and every derived
    /// sub-seed), `--out` replaces the output directory.
    pub fn apply_overrides(mut self, seed: Option<u64>, out: Option<&Path>) -> Self {
        if let Some(s) = seed {
            let keep_out = self.output_dir.clone();
            self = Self::reseed(self, s);
            self.output_dir = keep_out;
        }
        if let Some(dir) = out {
            self.output_dir = dir.to_path_buf();
        }
        self
    }

    fn reseed(mut cfg: Self, seed: u64) -> Self {
        cfg.seed = seed;
        cfg.phantom.seed = derive_seed(seed, 10, 0);
        cfg.split_seed = derive_seed(seed, 11, 0);
        for (i, (_, m)) in cfg.models.iter_mut().enumerate() {
            m.seed = derive_seed(seed, 12, i as u64);
        }
        cfg.train.seed = derive_seed(seed, 13, 0);
        cfg
    }

    fn resolve(raw: RawConfig) -> Result<Self, ExperimentError> {
        if raw.version != 1 {
            return Err(ExperimentError::Config(format!(
                "unsupported config version {} (expected 1)",
                raw.version
            )));
        }
        if raw.models.is_empty() {
            return Err(ExperimentError::Config("at least one model is required".into()));
        }
        {
            let mut names: Vec<&str> = raw.models.iter().map(|m| m.name.as_str()).collect();
            names.sort_unstable();
            names.dedup();
            if names.len() != raw.models.len() {
                return Err(ExperimentError::Config("model names must be unique".into()));
            }
        }
        if raw.attack.losses.is_empty() {
            return Err(ExperimentError::Config("attack loss list must not be empty".into()));
        }

        let seed = raw.seed;
        let defaults = PhantomConfig::default();
        let classes: [BlobClassConfig; 3] = match &raw.phantom.classes {
            None => defaults.classes.clone(),
            Some(list) if list.len() == 3 => {
                let mk = |c: &RawClass| BlobClassConfig {
                    blob_count: (c.blob_count[0], c.blob_count[1]),
                    radius: (c.radius[0], c.radius[1]),
                    intensity: (c.intensity[0], c.intensity[1]),
                    presence: c.presence,
                };
                [mk(&list[0]), mk(&list[1]), mk(&list[2])]
            }
            Some(list) => {
                return Err(ExperimentError::Config(format!(
                    "phantom.classes must have exactly 3 entries ({:?}), got {}",
                    CLASS_NAMES,
                    list.len()
                )))
            }
        };
        let phantom = PhantomConfig {
            n_scans: raw.phantom.n_scans,
            slices_per_scan: raw.phantom.slices_per_scan,
            image_size: raw.phantom.image_size,
            noise_level: raw.phantom.noise_level,
            edge_softness: raw.phantom.edge_softness,
            classes,
            seed: raw.phantom.seed.unwrap_or_else(|| derive_seed(seed, 10, 0)),
        };
        phantom.validate()?;

        if !(raw.test_fraction > 0.0 && raw.test_fraction < 1.0) {
            return Err(ExperimentError::Config(format!(
                "test_fraction {} must lie in (0, 1)",
                raw.test_fraction
            )));
        }

        let mut models = Vec::new();
        for (i, m) in raw.models.iter().enumerate() {
            let config = ModelConfig {
                arch: Arch::from_name(&m.arch)?,
                depth: m.depth,
                base_channels: m.base_channels,
                in_channels: 1,
                out_classes: 3,
                seed: m.seed.unwrap_or_else(|| derive_seed(seed, 12, i as u64)),
            };
            config.validate()?;
            if !phantom.image_size.is_multiple_of(config.required_divisor()) {
                return Err(ExperimentError::Config(format!(
                    "model {}: image_size {} is not divisible by {} (depth {})",
                    m.name,
                    phantom.image_size,
                    config.required_divisor(),
                    config.depth
                )));
            }
            models.push((m.name.clone(), config));
        }

        let augment = match &raw.train.augment {
            None => AugmentConfig::default(),
            Some(a) => AugmentConfig {
                max_shift: a.max_shift,
                scale_range: (a.scale_range[0], a.scale_range[1]),
                deform_strength: a.deform_strength,
                deform_grid: a.deform_grid,
            },
        };
        let train_cfg = TrainConfig {
            epochs: raw.train.epochs,
            batch_size: raw.train.batch_size,
            lr_max: raw.train.lr_max,
            lr_min: raw.train.lr_min,
            weight_decay: raw.train.weight_decay,
            max_iterations: raw.train.max_iterations,
            patience: raw.train.patience,
            loss: LossKind::from_selector(&raw.train.loss)?,
            augment,
            seed: raw.train.seed.unwrap_or_else(|| derive_seed(seed, 13, 0)),
        };
        train_cfg.validate()?;

        let attack = AttackConfig {
            epsilon: raw.attack.epsilon,
            attack_loss: LossKind::Bce, // placeholder; per-loss runs swap it in
            clamp: (0.0, 1.0),
            epsilons: raw.attack.epsilons.clone(),
        };
        attack.validate()?;
        let attack_losses = raw
            .attack
            .losses
            .iter()
            .map(|s| LossKind::from_selector(s))
            .collect::<Result<Vec<_>, _>>()?;

        Ok(Self {
            seed,
            output_dir: PathBuf::from(raw.output_dir),
            phantom,
            test_fraction: raw.test_fraction,
            split_seed: derive_seed(seed, 11, 0),
            models,
            train: train_cfg,
            attack,
            attack_losses,
        })
    }

    /// Flat, deterministic listing of every resolved field; the config
    /// hash in reports is computed over this text.
    pub fn canonical_description(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "seed={}", self.seed);
        let p = &self.phantom;
        let _ = writeln!(
            s,
            "phantom n_scans={} slices_per_scan={} image_size={} noise_level={} edge_softness={} seed={}",
            p.n_scans, p.slices_per_scan, p.image_size, p.noise_level, p.edge_softness, p.seed
        );
        for (name, c) in CLASS_NAMES.iter().zip(&p.classes) {
            let _ = writeln!(
                s,
                "class {name} blobs={}..{} radius={}..{} intensity={}..{} presence={}",
                c.blob_count.0, c.blob_count.1, c.radius.0, c.radius.1, c.intensity.0, c.intensity.1, c.presence
            );
        }
        let _ = writeln!(s, "split test_fraction={} seed={}", self.test_fraction, self.split_seed);
        for (name, m) in &self.models {
            let _ = writeln!(
                s,
                "model {name} arch={} depth={} base_channels={} seed={}",
                m.arch.name(),
                m.depth,
                m.base_channels,
                m.seed
            );
        }
        let t = &self.train;
        let _ = writeln!(
            s,
            "train epochs={} batch_size={} lr_max={} lr_min={} weight_decay={} max_iterations={:?} patience={} loss={} seed={}",
            t.epochs, t.batch_size, t.lr_max, t.lr_min, t.weight_decay, t.max_iterations, t.patience, t.loss, t.seed
        );
        let a = &t.augment;
        let _ = writeln!(
            s,
            "augment max_shift={} scale={}..{} deform_strength={} deform_grid={}",
            a.max_shift, a.scale_range.0, a.scale_range.1, a.deform_strength, a.deform_grid
        );
        let _ = writeln!(
            s,
            "attack epsilon={} epsilons={:?} losses={}",
            self.attack.epsilon,
            self.attack.epsilons,
            self.attack_losses.iter().map(|l| l.selector()).collect::<Vec<_>>().join(",")
        );
        s
    }

    /// FNV-1a 64-bit hash of the canonical description, in hex.
    pub fn config_hash(&self) -> String {
        let mut hash: u64 = 0xcbf29ce484222325;
        for byte in self.canonical_description().as_bytes() {
            hash ^= u64::from(*byte);
            hash = hash.wrapping_mul(0x100000001b3);
        }
        format!("{hash:016x}")
    }

    pub fn data_dir(&self) -> PathBuf {
        self.output_dir.join("data")
    }

    pub fn model_dir(&self, name: &str) -> PathBuf {
        self.output_dir.join("models").join(name)
    }

    pub fn attack_dir(&self, name: &str, loss: &LossKind) -> PathBuf {
        self.output_dir.join("attacks").join(name).join(loss.selector())
    }

    fn select_models(&self, which: Option<&str>) -> Result<Vec<(String, ModelConfig)>, ExperimentError> {
        match which {
            None => Ok(self.models.clone()),
            Some(name) => self
                .models
                .iter()
                .find(|(n, _)| n == name)
                .cloned()
                .map(|m| vec![m])
                .ok_or_else(|| {
                    ExperimentError::Config(format!(
                        "unknown model {name:?}; configured models: {}",
                        self.models.iter().map(|(n, _)| n.as_str()).collect::<Vec<_>>().join(", ")
                    ))
                }),
        }
    }
}

// ── generate ────────────────────────────────────────────────────────

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GenerateSummary {
    pub scans: usize,
    pub train_slices: usize,
    pub test_slices: usize,
}

pub fn cmd_generate(cfg: &ExperimentConfig) -> Result<GenerateSummary, ExperimentError> {
    let dataset = generate_phantoms(&cfg.phantom)?;
    let (train_set, test_set) = split_by_scan(&dataset, cfg.test_fraction, cfg.split_seed)?;
    let dir = cfg.data_dir();
    std::fs::create_dir_all(&dir)?;
    save_dataset(&dir, "train", &train_set)?;
    save_dataset(&dir, "test", &test_set)?;
    write_manifest(
        &dir.join("manifest.txt"),
        &cfg.phantom,
        cfg.test_fraction,
        cfg.split_seed,
        &train_set,
        &test_set,
    )?;
    Ok(GenerateSummary {
        scans: dataset.scan_ids().len(),
        train_slices: train_set.len(),
        test_slices: test_set.len(),
    })
}

fn load_split(cfg: &ExperimentConfig, name: &str) -> Result<Dataset, ExperimentError> {
    let dir = cfg.data_dir();
    if !dir.join(format!("{name}.csv")).exists() {
        return Err(ExperimentError::MissingArtifact {
            what: format!("dataset {}", dir.join(format!("{name}.csv")).display()),
            hint: "run `segattack generate` first".into(),
        });
    }
    Ok(load_dataset(&dir, name)?)
}

// ── train ───────────────────────────────────────────────────────────

#[derive(Debug, Clone)]
pub struct TrainSummary {
    pub model_name: String,
    pub epochs_run: usize,
    pub best_epoch: usize,
    pub best_val_dsc: f64,
}

pub fn cmd_train(
    cfg: &ExperimentConfig,
    which: Option<&str>,
) -> Result<Vec<TrainSummary>, ExperimentError> {
    let train_set = load_split(cfg, "train")?;
    let val_set = load_split(cfg, "test")?;
    let mut summaries = Vec::new();
    for (name, model_cfg) in cfg.select_models(which)? {
        let model = build_model(&model_cfg)?;
        let (best, history) = train(model, &train_set, &val_set, &cfg.train)?;
        let dir = cfg.model_dir(&name);
        std::fs::create_dir_all(&dir)?;
        best.save_checkpoint(&dir.join("checkpoint.ckpt"))?;
        history.save_csv(&dir.join("history.csv"))?;
        summaries.push(TrainSummary {
            model_name: name,
            epochs_run: history.records.len(),
            best_epoch: history.best_epoch,
            best_val_dsc: history.best().map(|r| r.val_dsc).unwrap_or(f64::NAN),
        });
    }
    Ok(summaries)
}

fn load_checkpoint(cfg: &ExperimentConfig, name: &str) -> Result<Model, ExperimentError> {
    let path = cfg.model_dir(name).join("checkpoint.ckpt");
    if !path.exists() {
        return Err(ExperimentError::MissingArtifact {
            what: format!("checkpoint {}", path.display()),
            hint: format!("run `segattack train --model {name}` first"),
        });
    }
    Ok(Model::load_checkpoint(&path)?)
}

// ── attack ──────────────────────────────────────────────────────────

#[derive(Debug, Clone)]
pub struct AttackSummary {
    pub model_name: String,
    pub loss: String,
    pub mean_dsc_clean: f64,
    pub mean_dsc_attacked: f64,
    pub attack_success: f64,
}

/// Union over class channels of a binary `[N, 3, H, W]` tensor, for one sample.
fn any_class_mask(t: &Tensor, sample: usize) -> Tensor {
    let (_, c, h, w) = (t.shape()[0], t.shape()[1], t.shape()[2], t.shape()[3]);
    let plane = h * w;
    let mut out = vec![0.0; plane];
    for ch in 0..c {
        let base = (sample * c + ch) * plane;
        for (o, &v) in out.iter_mut().zip(&t.data()[base..base + plane]) {
            if v == 1.0 {
                *o = 1.0;
            }
        }
    }
    Tensor::new(vec![h, w], out).expect("plane shape")
}

pub fn cmd_attack(
    cfg: &ExperimentConfig,
    which: Option<&str>,
) -> Result<Vec<AttackSummary>, ExperimentError> {
    let test_set = load_split(cfg, "test")?.with_masks();
    if test_set.is_empty() {
        return Err(ExperimentError::Config(
            "test split has no mask-bearing slices to attack".into(),
        ));
    }
    let batch = cfg.train.batch_size;
    let mut summaries = Vec::new();
    for (name, _) in cfg.select_models(which)? {
        let model = load_checkpoint(cfg, &name)?;
        for loss in &cfg.attack_losses {
            let attack_cfg = AttackConfig { attack_loss: loss.clone(), ..cfg.attack.clone() };
            let outcome = attack_batch(&model, &attack_cfg, &test_set, batch)?;

            let dir = cfg.attack_dir(&name, loss);
            std::fs::create_dir_all(&dir)?;

            let mut records = String::from("sample_id,dsc_clean,dsc_attacked\n");
            for r in &outcome.records {
                let _ = writeln!(records, "{},{},{}", r.sample_id, r.dsc_clean, r.dsc_attacked);
            }
            std::fs::write(dir.join("records.csv"), records)?;

            let summary = format!(
                "epsilon,mean_dsc_clean,mean_dsc_attacked,attack_success\n{},{},{},{}\n",
                attack_cfg.epsilon,
                outcome.mean_dsc_clean,
                outcome.mean_dsc_attacked,
                outcome.attack_success
            );
            std::fs::write(dir.join("summary.csv"), summary)?;

            if attack_cfg.epsilons.is_some() {
                let rows = epsilon_sweep(&model, &attack_cfg, &test_set, batch)?;
                let mut sweep = String::from("epsilon,mean_dsc,attack_success\n");
                for row in &rows {
                    let _ = writeln!(sweep, "{},{},{}", row.epsilon, row.mean_dsc, row.attack_success);
                }
                std::fs::write(dir.join("sweep.csv"), sweep)?;
            }

            write_attack_images(&model, &attack_cfg, &test_set, &dir.join("images"))?;

            summaries.push(AttackSummary {
                model_name: name.clone(),
                loss: loss.selector().into(),
                mean_dsc_clean: outcome.mean_dsc_clean,
                mean_dsc_attacked: outcome.mean_dsc_attacked,
                attack_success: outcome.attack_success,
            });
        }
    }
    Ok(summaries)
}

/// Adversarial PGM (lossless) and PNG (viewing) plus the any-class
/// TP/FP/FN diff render, per sample, named `{sample_id}_{epsilon}`.
fn write_attack_images(
    model: &Model,
    cfg: &AttackConfig,
    dataset: &Dataset,
    dir: &Path,
) -> Result<(), ExperimentError> {
    std::fs::create_dir_all(dir)?;
    let eps = cfg.epsilon;
    let indices: Vec<usize> = (0..dataset.len()).collect();
    for chunk in indices.chunks(8) {
        let (images, masks) = dataset.batch(chunk).map_err(ExperimentError::Data)?;
        let adv = fgsm(model, cfg, &images, &masks)?;
        let adv_pred = binarize(&model.forward(&adv)?, 0.5)?;
        let (_, _, h, w) = images.dims4("write_attack_images")?;
        for (bi, &di) in chunk.iter().enumerate() {
            let sample = &dataset.samples()[di];
            let id = sample.id();
            let adv_image =
                Tensor::new(vec![h, w], adv.data()[bi * h * w..(bi + 1) * h * w].to_vec())?;
            write_pgm16(&dir.join(format!("{id}_{eps}.pgm")), &adv_image)?;
            write_png_gray(&dir.join(format!("{id}_{eps}.png")), &adv_image)?;

            let pred_any = any_class_mask(&adv_pred, bi);
            let truth_any = any_class_mask(&masks, bi);
            let dm = diff_map(&pred_any, &truth_any)?;
            let rgb: Vec<u8> = dm.categories().iter().flat_map(|c| c.rgb()).collect();
            write_png_rgb(&dir.join(format!("diff_{id}_{eps}.png")), w, h, &rgb)?;
        }
    }
    Ok(())
}

// ── report ──────────────────────────────────────────────────────────

fn read_summary_csv(path: &Path) -> Result<(f64, f64, f64), ExperimentError> {
    let text = std::fs::read_to_string(path)?;
    let line = text.lines().nth(1).ok_or_else(|| ExperimentError::Config(format!(
        "{}: missing data row",
        path.display()
    )))?;
    let fields: Vec<&str> = line.split(',').collect();
    if fields.len() != 4 {
        return Err(ExperimentError::Config(format!("{}: bad row {line:?}", path.display())));
    }
    let parse = |s: &str| -> Result<f64, ExperimentError> {
        s.parse().map_err(|_| ExperimentError::Config(format!("{}: bad number {s:?}", path.display())))
    };
    Ok((parse(fields[1])?, parse(fields[2])?, parse(fields[3])?))
}

/// Assemble the evaluation rows from stored attack artifacts.
pub fn collect_rows(cfg: &ExperimentConfig) -> Result<Vec<EvalRow>, ExperimentError> {
    let mut rows = Vec::new();
    for (name, _) in &cfg.models {
        let model = load_checkpoint(cfg, name)?;
        let mut dsc_clean: Option<f64> = None;
        let mut attacked = Vec::new();
        for loss in &cfg.attack_losses {
            let path = cfg.attack_dir(name, loss).join("summary.csv");
            if !path.exists() {
                return Err(ExperimentError::MissingArtifact {
                    what: format!("attack summary {}", path.display()),
                    hint: format!("run `segattack attack --model {name}` first"),
                });
            }
            let (clean, after, _) = read_summary_csv(&path)?;
            dsc_clean.get_or_insert(clean);
            attacked.push((loss.selector().to_string(), after));
        }
        rows.push(EvalRow::new(
            name.clone(),
            model.parameter_count(),
            dsc_clean.expect("at least one attack loss"),
            attacked,
        )?);
    }
    Ok(rows)
}

fn render_report_csv(cfg: &ExperimentConfig, rows: &[EvalRow]) -> String {
    let mut header = String::from("model,parameters,dsc_normal");
    for loss in &cfg.attack_losses {
        let _ = write!(header, ",dsc_{}", loss.selector());
    }
    for loss in &cfg.attack_losses {
        let _ = write!(header, ",as_{}", loss.selector());
    }
    header.push_str(",best_attack\n");
    let mut out = header;
    for row in rows {
        let _ = write!(out, "{},{},{}", row.model_name, row.parameter_count, row.dsc_clean);
        for (_, v) in &row.dsc_attacked {
            let _ = write!(out, ",{v}");
        }
        for (_, v) in &row.attack_success {
            let _ = write!(out, ",{v}");
        }
        let _ = writeln!(out, ",{}", row.best_attack().unwrap_or("-"));
    }
    out
}

fn render_report_md(cfg: &ExperimentConfig, rows: &[EvalRow]) -> String {
    let mut out = String::new();
    out.push_str("# FGSM attack report\n\n");

    out.push_str("## DSC before and after attack\n\n");
    out.push_str("Lowest attacked DSC per row (the most successful attack) in bold.\n\n");
    let mut header = String::from("| model | parameters | normal |");
    let mut rule = String::from("|---|---|---|");
    for loss in &cfg.attack_losses {
        let _ = write!(header, " {} |", loss.selector());
        rule.push_str("---|");
    }
    out.push_str(&header);
    out.push('\n');
    out.push_str(&rule);
    out.push('\n');
    for row in rows {
        let best = row.best_attack().unwrap_or("-").to_string();
        let _ = write!(out, "| {} | {} | {:.4} |", row.model_name, row.parameter_count, row.dsc_clean);
        for (loss, v) in &row.dsc_attacked {
            if *loss == best {
                let _ = write!(out, " **{v:.4}** |");
            } else {
                let _ = write!(out, " {v:.4} |");
            }
        }
        out.push('\n');
    }

    out.push_str("\n## Attack success (relative DSC drop)\n\n");
    let mut header = String::from("| model |");
    let mut rule = String::from("|---|");
    for loss in &cfg.attack_losses {
        let _ = write!(header, " {} |", loss.selector());
        rule.push_str("---|");
    }
    out.push_str(&header);
    out.push('\n');
    out.push_str(&rule);
    out.push('\n');
    for row in rows {
        let _ = write!(out, "| {} |", row.model_name);
        for (_, v) in &row.attack_success {
            let _ = write!(out, " {v:.4} |");
        }
        out.push('\n');
    }

    out.push_str("\n## Attack-loss ordering per model\n\n");
    for row in rows {
        let mut order: Vec<(&str, f64)> =
            row.attack_success.iter().map(|(l, v)| (l.as_str(), *v)).collect();
        order.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(b.0)));
        let rendered: Vec<String> =
            order.iter().map(|(l, v)| format!("{l} ({v:.4})")).collect();
        let _ = writeln!(out, "- {}: {}", row.model_name, rendered.join(" >= "));
    }

    out.push_str("\n## Parameter count vs attack success\n\n");
    let mut by_params: Vec<&EvalRow> = rows.iter().collect();
    by_params.sort_by(|a, b| a.parameter_count.cmp(&b.parameter_count).then(a.model_name.cmp(&b.model_name)));
    for row in &by_params {
        let mean_as: f64 = row.attack_success.iter().map(|(_, v)| v).sum::<f64>()
            / row.attack_success.len().max(1) as f64;
        let _ = writeln!(out, "- {}: parameters={} mean_attack_success={:.4}", row.model_name, row.parameter_count, mean_as);
    }
    if rows.len() >= 3 {
        let xs: Vec<f64> = by_params.iter().map(|r| r.parameter_count as f64).collect();
        let ys: Vec<f64> = by_params
            .iter()
            .map(|r| {
                r.attack_success.iter().map(|(_, v)| v).sum::<f64>()
                    / r.attack_success.len().max(1) as f64
            })
            .collect();
        let _ = writeln!(out, "\nPearson correlation (parameters vs mean attack success): {:.4}", pearson(&xs, &ys));
    } else {
        out.push_str("\nToo few models for a correlation estimate; see the listing above.\n");
    }

    out.push_str("\n## Provenance\n\n");
    let _ = writeln!(out, "- seed: {}", cfg.seed);
    let _ = writeln!(out, "- config hash: {}", cfg.config_hash());
    let _ = writeln!(out, "- attack epsilon: {}", cfg.attack.epsilon);
    let _ = writeln!(
        out,
        "- models: {}",
        cfg.models.iter().map(|(n, _)| n.as_str()).collect::<Vec<_>>().join(", ")
    );
    out
}

fn pearson(xs: &[f64], ys: &[f64]) -> f64 {
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let mut cov = 0.0;
    let mut vx = 0.0;
    let mut vy = 0.0;
    for (x, y) in xs.iter().zip(ys) {
        cov += (x - mx) * (y - my);
        vx += (x - mx) * (x - mx);
        vy += (y - my) * (y - my);
    }
    if vx == 0.0 || vy == 0.0 {
        return 0.0;
    }
    cov / (vx * vy).sqrt()
}

pub fn cmd_report(cfg: &ExperimentConfig) -> Result<Vec<EvalRow>, ExperimentError> {
    let rows = collect_rows(cfg)?;
    std::fs::create_dir_all(&cfg.output_dir)?;
    std::fs::write(cfg.output_dir.join("report.csv"), render_report_csv(cfg, &rows))?;
    std::fs::write(cfg.output_dir.join("report.md"), render_report_md(cfg, &rows))?;
    Ok(rows)
}

// ── check ───────────────────────────────────────────────────────────

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CheckSummary {
    pub images_checked: usize,
}

/// Post-hoc scan of every emitted adversarial image: the L-infinity
/// distance to the stored clean image must not exceed its epsilon (plus
/// one 16-bit quantization step), and pixels must stay in [0, 1].
pub fn cmd_check(cfg: &ExperimentConfig) -> Result<CheckSummary, ExperimentError> {
    let attacks_root = cfg.output_dir.join("attacks");
    if !attacks_root.exists() {
        return Err(ExperimentError::MissingArtifact {
            what: format!("attack outputs {}", attacks_root.display()),
            hint: "run `segattack attack` first".into(),
        });
    }
    let quant_slack = 1.0 / 65535.0;
    let mut checked = 0usize;
    for (name, _) in &cfg.models {
        for loss in &cfg.attack_losses {
            let images = cfg.attack_dir(name, loss).join("images");
            if !images.exists() {
                continue;
            }
            let mut entries: Vec<PathBuf> = std::fs::read_dir(&images)?
                .collect::<Result<Vec<_>, _>>()?
                .into_iter()
                .map(|e| e.path())
                .filter(|p| p.extension().is_some_and(|e| e == "pgm"))
                .collect();
            entries.sort();
            for path in entries {
                let stem = path
                    .file_stem()
                    .and_then(|s| s.to_str())
                    .ok_or_else(|| ExperimentError::CheckFailed(format!("odd file {path:?}")))?;
                let (sample_id, eps_str) = stem.rsplit_once('_').ok_or_else(|| {
                    ExperimentError::CheckFailed(format!("cannot parse epsilon from {stem:?}"))
                })?;
                let eps: f64 = eps_str.parse().map_err(|_| {
                    ExperimentError::CheckFailed(format!("bad epsilon {eps_str:?} in {stem:?}"))
                })?;
                parse_sample_id(sample_id)?;
                let adv = read_pgm(&path)?;
                let clean = read_pgm(&cfg.data_dir().join("test").join(format!("{sample_id}.pgm")))?;
                let dist = adv.linf_distance(&clean)?;
                if dist > eps + quant_slack {
                    return Err(ExperimentError::CheckFailed(format!(
                        "{}: L-inf distance {dist} exceeds epsilon {eps}",
                        path.display()
                    )));
                }
                if adv.min() < 0.0 || adv.max() > 1.0 {
                    return Err(ExperimentError::CheckFailed(format!(
                        "{}: pixels leave [0, 1]",
                        path.display()
                    )));
                }
                checked += 1;
            }
        }
    }
    if checked == 0 {
        return Err(ExperimentError::CheckFailed("no adversarial images found".into()));
    }
    Ok(CheckSummary { images_checked: checked })
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn tiny_config_json(out: &Path) -> String {
        format!(
            r#"{{
  "seed": 7,
  "output_dir": "{}",
  "phantom": {{
    "n_scans": 4,
    "slices_per_scan": 4,
    "image_size": 32,
    "classes": [
      {{ "blob_count": [1, 2], "radius": [2.5, 4.0], "intensity": [0.62, 0.78], "presence": 1.0 }},
      {{ "blob_count": [1, 2], "radius": [2.0, 3.2], "intensity": [0.42, 0.58], "presence": 1.0 }},
      {{ "blob_count": [1, 1], "radius": [1.8, 2.6], "intensity": [0.24, 0.38], "presence": 0.75 }}
    ]
  }},
  "test_fraction": 0.25,
  "models": [
    {{ "name": "unet_tiny", "arch": "unet", "depth": 2, "base_channels": 4 }}
  ],
  "train": {{ "epochs": 2, "batch_size": 4, "patience": 2 }},
  "attack": {{ "epsilon": 0.02, "epsilons": [0.0, 0.02], "losses": ["bce", "focal+dice"] }}
}}"#,
            out.display()
        )
    }

    #[test]
    fn config_parses_resolves_and_hashes() {
        let cfg = ExperimentConfig::from_json(&tiny_config_json(Path::new("/tmp/x"))).unwrap();
        assert_eq!(cfg.models.len(), 1);
        assert_eq!(cfg.attack_losses.len(), 2);
        assert_eq!(cfg.train.epochs, 2);
        // Sub-seeds are filled deterministically from the global seed.
        let cfg2 = ExperimentConfig::from_json(&tiny_config_json(Path::new("/tmp/x"))).unwrap();
        assert_eq!(cfg.phantom.seed, cfg2.phantom.seed);
        assert_eq!(cfg.config_hash(), cfg2.config_hash());
        // Reseeding changes the hash; the override keeps the output dir.
        let cfg3 = cfg2.apply_overrides(Some(8), None);
        assert_ne!(cfg.config_hash(), cfg3.config_hash());
        assert_eq!(cfg.output_dir, cfg3.output_dir);
    }

    #[test]
    fn config_rejections() {
        assert!(ExperimentConfig::from_json("{}").is_err());
        let dup = r#"{
  "seed": 1, "output_dir": "/tmp/d",
  "phantom": { "n_scans": 2, "slices_per_scan": 2 },
  "models": [
    { "name": "m", "arch": "unet" },
    { "name": "m", "arch": "unetpp" }
  ]
}"#;
        assert!(matches!(
            ExperimentConfig::from_json(dup),
            Err(ExperimentError::Config(msg)) if msg.contains("unique")
        ));
        let bad_depth = r#"{
  "seed": 1, "output_dir": "/tmp/d",
  "phantom": { "n_scans": 2, "slices_per_scan": 2, "image_size": 40 },
  "models": [ { "name": "m", "arch": "unet", "depth": 5 } ]
}"#;
        assert!(matches!(
            ExperimentConfig::from_json(bad_depth),
            Err(ExperimentError::Config(msg)) if msg.contains("divisible")
        ));
        let unknown_field = r#"{ "seed": 1, "output_dir": "x", "phantom": { "n_scans": 1, "slices_per_scan": 1, "nscans": 2 }, "models": [] }"#;
        assert!(matches!(ExperimentConfig::from_json(unknown_field), Err(ExperimentError::Json(_))));
    }

    #[test]
    fn pearson_basics() {
        assert!((pearson(&[1.0, 2.0, 3.0], &[2.0, 4.0, 6.0]) - 1.0).abs() < 1e-12);
        assert!((pearson(&[1.0, 2.0, 3.0], &[3.0, 2.0, 1.0]) + 1.0).abs() < 1e-12);
        assert_eq!(pearson(&[1.0, 1.0], &[2.0, 3.0]), 0.0);
    }
}
