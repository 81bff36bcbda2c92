//! Training loop: AdamW with decoupled weight decay, cosine-annealed
//! learning rate, seeded shuffling and augmentation, per-epoch validation
//! DSC and early stopping on it. The returned model carries the best-epoch
//! parameters.

use crate::autodiff::Tape;
use crate::data::augment::{augment, AugmentConfig};
use crate::data::phantom::derive_seed;
use crate::data::{DataError, Dataset};
use crate::losses::{loss_node, LossError, LossKind, Reduction};
use crate::metrics::{binarize, MetricsError};
use crate::models::{Model, ModelError};
use crate::tensor::{Tensor, TensorError};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid train config: {0}")]
    InvalidConfig(String),
    #[error("{0} dataset is empty")]
    EmptyDataset(&'static str),
    #[error("training diverged (non-finite loss) at epoch {epoch}, step {step}")]
    Diverged { epoch: usize, step: usize },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("history io: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr_max: f64,
    pub lr_min: f64,
    pub weight_decay: f64,
    /// Cosine period; defaults to the full run length.
    pub max_iterations: Option<usize>,
    /// Early-stopping patience, in epochs without a validation DSC improvement.
    pub patience: usize,
    pub loss: LossKind,
    pub augment: AugmentConfig,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 15,
            batch_size: 8,
            lr_max: 3e-4,
            lr_min: 1e-6,
            weight_decay: 1e-3,
            max_iterations: None,
            patience: 3,
            loss: LossKind::default(),
            augment: AugmentConfig::default(),
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        if self.epochs == 0 || self.batch_size == 0 || self.patience == 0 {
            return Err(TrainError::InvalidConfig(
                "epochs, batch_size and patience must be positive".into(),
            ));
        }
        if !(self.lr_min > 0.0 && self.lr_min < self.lr_max) {
            return Err(TrainError::InvalidConfig(format!(
                "need 0 < lr_min < lr_max, got {} and {}",
                self.lr_min, self.lr_max
            )));
        }
        if self.weight_decay < 0.0 {
            return Err(TrainError::InvalidConfig("weight_decay must be >= 0".into()));
        }
        self.loss.validate()?;
        self.augment.validate()?;
        Ok(())
    }
}

/// Cosine annealing: `lr_min + (lr_max - lr_min)(1 + cos(pi * step/T))/2`,
/// held at `lr_min` past `T`.
pub fn cosine_lr(step: usize, t_max: usize, lr_max: f64, lr_min: f64) -> f64 {
    if t_max == 0 {
        return lr_min;
    }
    let progress = step.min(t_max) as f64 / t_max as f64;
    lr_min + 0.5 * (lr_max - lr_min) * (1.0 + (std::f64::consts::PI * progress).cos())
}

/// Adam moments plus the step counter.
#[derive(Debug, Clone)]
pub struct OptimState {
    m: BTreeMap<String, Tensor>,
    v: BTreeMap<String, Tensor>,
    t: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl OptimState {
    pub fn new(params: &BTreeMap<String, Tensor>) -> Self {
        let zeros: BTreeMap<String, Tensor> = params
            .iter()
            .map(|(k, p)| (k.clone(), Tensor::zeros(p.shape().to_vec())))
            .collect();
        Self { m: zeros.clone(), v: zeros, t: 0, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }

    pub fn step_count(&self) -> u64 {
        self.t
    }
}

/// One AdamW update: decoupled decay `p -= lr*wd*p` alongside the
/// bias-corrected Adam step `p -= lr * m_hat / (sqrt(v_hat) + eps)`.
pub fn adamw_step(
    params: &mut BTreeMap<String, Tensor>,
    grads: &BTreeMap<String, Tensor>,
    state: &mut OptimState,
    lr: f64,
    weight_decay: f64,
) -> Result<(), TrainError> {
    state.t += 1;
    let bc1 = 1.0 - state.beta1.powi(state.t as i32);
    let bc2 = 1.0 - state.beta2.powi(state.t as i32);
    for (name, p) in params.iter_mut() {
        let g = grads.get(name).ok_or_else(|| {
            TrainError::InvalidConfig(format!("missing gradient for parameter {name}"))
        })?;
        if g.shape() != p.shape() {
            return Err(TensorError::ShapeMismatch {
                op: "adamw_step",
                lhs: p.shape().to_vec(),
                rhs: g.shape().to_vec(),
            }
            .into());
        }
        let m = state.m.get_mut(name).expect("state tracks all params");
        let v = state.v.get_mut(name).expect("state tracks all params");
        for i in 0..p.numel() {
            let gi = g.data()[i];
            let mi = state.beta1 * m.data()[i] + (1.0 - state.beta1) * gi;
            let vi = state.beta2 * v.data()[i] + (1.0 - state.beta2) * gi * gi;
            m.data_mut()[i] = mi;
            v.data_mut()[i] = vi;
            let m_hat = mi / bc1;
            let v_hat = vi / bc2;
            let pi = p.data()[i];
            p.data_mut()[i] = pi - lr * weight_decay * pi - lr * m_hat / (v_hat.sqrt() + state.eps);
        }
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_dsc: f64,
    /// Learning rate at the first step of the epoch.
    pub lr: f64,
}

#[derive(Debug, Clone, Default)]
pub struct History {
    pub records: Vec<EpochRecord>,
    pub best_epoch: usize,
}

impl History {
    pub fn best(&self) -> Option<&EpochRecord> {
        self.records.get(self.best_epoch)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("epoch,train_loss,val_dsc,lr\n");
        for r in &self.records {
            out.push_str(&format!("{},{},{},{}\n", r.epoch, r.train_loss, r.val_dsc, r.lr));
        }
        out
    }

    pub fn save_csv(&self, path: &Path) -> Result<(), TrainError> {
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent)?;
        }
        let mut f = std::fs::File::create(path)?;
        f.write_all(self.to_csv().as_bytes())?;
        Ok(())
    }
}

/// Mean DSC over every nonempty sample-channel pair of `dataset`,
/// thresholding predictions at 0.5. No augmentation is applied.
pub fn validation_dsc(model: &Model, dataset: &Dataset, batch_size: usize) -> Result<f64, TrainError> {
    if dataset.is_empty() {
        return Err(TrainError::EmptyDataset("validation"));
    }
    let mut total = 0.0;
    let mut counted = 0usize;
    let indices: Vec<usize> = (0..dataset.len()).collect();
    for chunk in indices.chunks(batch_size.max(1)) {
        let (images, masks) = dataset.batch(chunk)?;
        let probs = model.forward(&images)?;
        let pred = binarize(&probs, 0.5)?;
        let (n, c, h, w) = pred.dims4("validation_dsc")?;
        for pair in 0..n * c {
            let p = &pred.data()[pair * h * w..(pair + 1) * h * w];
            let t = &masks.data()[pair * h * w..(pair + 1) * h * w];
            let inter: f64 = p.iter().zip(t).map(|(&a, &b)| a * b).sum();
            let sp: f64 = p.iter().sum();
            let st: f64 = t.iter().sum();
            if sp + st == 0.0 {
                continue;
            }
            total += 2.0 * inter / (sp + st);
            counted += 1;
        }
    }
    if counted == 0 {
        return Err(MetricsError::DscAllEmpty.into());
    }
    Ok(total / counted as f64)
}

/// Train `model`, returning the best-validation-DSC checkpoint and the
/// per-epoch history. Deterministic in `cfg.seed`; the validation set is
/// never augmented or mutated.
pub fn train(
    mut model: Model,
    train_set: &Dataset,
    val_set: &Dataset,
    cfg: &TrainConfig,
) -> Result<(Model, History), TrainError> {
    cfg.validate()?;
    if train_set.is_empty() {
        return Err(TrainError::EmptyDataset("train"));
    }
    if val_set.is_empty() {
        return Err(TrainError::EmptyDataset("validation"));
    }

    let batches_per_epoch = train_set.len().div_ceil(cfg.batch_size);
    let t_max = cfg.max_iterations.unwrap_or(cfg.epochs * batches_per_epoch);
    let mut optim = OptimState::new(model.parameters());
    let mut history = History::default();
    let mut best_dsc = f64::NEG_INFINITY;
    let mut best_params: Option<BTreeMap<String, Tensor>> = None;
    let mut since_best = 0usize;
    let mut global_step = 0usize;

    for epoch in 0..cfg.epochs {
        let lr_at_epoch_start = cosine_lr(global_step, t_max, cfg.lr_max, cfg.lr_min);
        let mut order: Vec<usize> = (0..train_set.len()).collect();
        let mut shuffle_rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, 2, epoch as u64));
        order.shuffle(&mut shuffle_rng);
        let mut aug_rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, 3, epoch as u64));

        let mut loss_acc = 0.0;
        for (step, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let (h, w) = train_set.image_size().expect("nonempty train set");
            let mut images = Vec::with_capacity(chunk.len() * h * w);
            let mut masks = Vec::with_capacity(chunk.len() * 3 * h * w);
            for &i in chunk {
                let sample = &train_set.samples()[i];
                let (img, mask) = augment(&sample.image, &sample.mask, &cfg.augment, &mut aug_rng)?;
                images.extend_from_slice(img.data());
                masks.extend_from_slice(mask.data());
            }
            let images = Tensor::new(vec![chunk.len(), 1, h, w], images)?;
            let masks = Tensor::new(vec![chunk.len(), 3, h, w], masks)?;

            let mut tape = Tape::new();
            let input = tape.constant(images);
            let pass = model.forward_on(&mut tape, input, true)?;
            let loss = loss_node(&mut tape, &cfg.loss, &masks, pass.output, Reduction::Mean)?;
            let loss_value = tape.value(loss).item()?;
            if !loss_value.is_finite() {
                return Err(TrainError::Diverged { epoch, step });
            }
            loss_acc += loss_value * chunk.len() as f64;

            let grads = tape.backward(loss)?;
            let grad_map: BTreeMap<String, Tensor> = pass
                .param_nodes
                .iter()
                .map(|(name, &node)| {
                    let g = grads
                        .get(node)
                        .cloned()
                        .unwrap_or_else(|| Tensor::zeros(tape.value(node).shape().to_vec()));
                    (name.clone(), g)
                })
                .collect();
            let lr = cosine_lr(global_step, t_max, cfg.lr_max, cfg.lr_min);
            let mut params = model.parameters().clone();
            adamw_step(&mut params, &grad_map, &mut optim, lr, cfg.weight_decay)?;
            model.set_parameters(params)?;
            global_step += 1;
        }

        let val_dsc = validation_dsc(&model, val_set, cfg.batch_size)?;
        history.records.push(EpochRecord {
            epoch,
            train_loss: loss_acc / train_set.len() as f64,
            val_dsc,
            lr: lr_at_epoch_start,
        });

        if val_dsc > best_dsc {
            best_dsc = val_dsc;
            best_params = Some(model.parameters().clone());
            history.best_epoch = epoch;
            since_best = 0;
        } else {
            since_best += 1;
            if since_best >= cfg.patience {
                break;
            }
        }
    }

    if let Some(params) = best_params {
        model.set_parameters(params)?;
    }
    Ok((model, history))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::phantom::{generate_phantoms, PhantomConfig};
    use crate::models::{build_model, Arch, ModelConfig};

    #[test]
    fn cosine_schedule_endpoints_and_midpoint() {
        let (hi, lo) = (3e-4, 1e-6);
        assert_eq!(cosine_lr(0, 100, hi, lo), hi);
        assert!((cosine_lr(100, 100, hi, lo) - lo).abs() < 1e-18);
        assert!((cosine_lr(50, 100, hi, lo) - (hi + lo) / 2.0).abs() < 1e-12);
        // Held at lr_min past T, never increasing.
        assert_eq!(cosine_lr(250, 100, hi, lo), lo);
        let mut prev = f64::INFINITY;
        for step in 0..=120 {
            let lr = cosine_lr(step, 100, hi, lo);
            assert!(lr <= prev);
            prev = lr;
        }
    }

    fn one_param(v: f64) -> BTreeMap<String, Tensor> {
        let mut m = BTreeMap::new();
        m.insert("p".to_string(), Tensor::scalar(v));
        m
    }

    #[test]
    fn adamw_zero_gradient_is_pure_decay() {
        let mut params = one_param(2.0);
        let grads = one_param(0.0);
        let mut state = OptimState::new(&params);
        adamw_step(&mut params, &grads, &mut state, 0.01, 0.1).unwrap();
        assert_eq!(params["p"].data()[0], 2.0 * (1.0 - 0.01 * 0.1));
    }

    #[test]
    fn adamw_first_step_is_signed_lr() {
        for g in [1.5, -0.5, 0.02] {
            let mut params = one_param(0.0);
            let grads = one_param(g);
            let mut state = OptimState::new(&params);
            let lr = 0.05;
            adamw_step(&mut params, &grads, &mut state, lr, 0.0).unwrap();
            let got = params["p"].data()[0];
            let want = -lr * g.signum();
            assert!((got - want).abs() <= lr * 1e-4, "g={g}: {got} vs {want}");
        }
    }

    #[test]
    fn adamw_lr_zero_is_identity() {
        let mut params = one_param(1.25);
        let grads = one_param(0.7);
        let mut state = OptimState::new(&params);
        adamw_step(&mut params, &grads, &mut state, 0.0, 0.5).unwrap();
        assert_eq!(params["p"].data()[0], 1.25);
    }

    #[test]
    fn adamw_converges_on_a_parabola() {
        let mut params = one_param(0.0);
        let mut state = OptimState::new(&params);
        for _ in 0..200 {
            let p = params["p"].data()[0];
            let grads = one_param(2.0 * (p - 3.0));
            adamw_step(&mut params, &grads, &mut state, 0.1, 0.0).unwrap();
        }
        let p = params["p"].data()[0];
        assert!((p - 3.0).abs() < 0.1, "ended at {p}");
        assert_eq!(state.step_count(), 200);
    }

    fn tiny_phantoms() -> PhantomConfig {
        let mut cfg = PhantomConfig {
            n_scans: 3,
            slices_per_scan: 4,
            image_size: 32,
            seed: 5,
            ..Default::default()
        };
        for class in &mut cfg.classes {
            class.radius = (2.0, 3.2);
            class.blob_count = (1, 1);
            class.presence = 1.0;
        }
        cfg
    }

    fn tiny_model(seed: u64) -> Model {
        build_model(&ModelConfig {
            arch: Arch::Unet,
            depth: 2,
            base_channels: 4,
            seed,
            ..Default::default()
        })
        .unwrap()
    }

    #[test]
    fn early_stopping_patience_one_stops_after_two_epochs() {
        // An lr of zero freezes the parameters, so validation DSC never
        // improves after the first epoch.
        let ds = generate_phantoms(&tiny_phantoms()).unwrap();
        let (train_set, val_set) = crate::data::split_by_scan(&ds, 0.34, 1).unwrap();
        let cfg = TrainConfig {
            epochs: 10,
            patience: 1,
            lr_max: 1e-300,
            lr_min: 1e-301,
            batch_size: 4,
            augment: AugmentConfig::disabled(),
            ..Default::default()
        };
        let (_, history) = train(tiny_model(0), &train_set, &val_set, &cfg).unwrap();
        assert_eq!(history.records.len(), 2);
        assert_eq!(history.best_epoch, 0);
    }

    #[test]
    fn training_is_deterministic_and_never_mutates_val() {
        let ds = generate_phantoms(&tiny_phantoms()).unwrap();
        let (train_set, val_set) = crate::data::split_by_scan(&ds, 0.34, 1).unwrap();
        let val_before: Vec<Vec<f64>> =
            val_set.samples().iter().map(|s| s.image.data().to_vec()).collect();
        let cfg = TrainConfig { epochs: 2, batch_size: 4, seed: 11, ..Default::default() };

        let (m1, h1) = train(tiny_model(3), &train_set, &val_set, &cfg).unwrap();
        let (m2, h2) = train(tiny_model(3), &train_set, &val_set, &cfg).unwrap();
        assert_eq!(m1.parameters(), m2.parameters());
        assert_eq!(h1.records, h2.records);

        let val_after: Vec<Vec<f64>> =
            val_set.samples().iter().map(|s| s.image.data().to_vec()).collect();
        assert_eq!(val_before, val_after);
    }

    #[test]
    fn best_epoch_dsc_matches_returned_checkpoint() {
        let ds = generate_phantoms(&tiny_phantoms()).unwrap();
        let (train_set, val_set) = crate::data::split_by_scan(&ds, 0.34, 1).unwrap();
        let cfg = TrainConfig { epochs: 3, batch_size: 4, seed: 17, ..Default::default() };
        let (model, history) = train(tiny_model(29), &train_set, &val_set, &cfg).unwrap();
        let recomputed = validation_dsc(&model, &val_set, cfg.batch_size).unwrap();
        let recorded = history.best().unwrap().val_dsc;
        assert!((recomputed - recorded).abs() <= 1e-9);
        assert!(history.records.len() <= cfg.epochs);
    }

    #[test]
    fn history_csv_shape() {
        let history = History {
            records: vec![EpochRecord { epoch: 0, train_loss: 0.5, val_dsc: 0.75, lr: 3e-4 }],
            best_epoch: 0,
        };
        let csv = history.to_csv();
        let mut lines = csv.lines();
        assert_eq!(lines.next(), Some("epoch,train_loss,val_dsc,lr"));
        assert_eq!(lines.next(), Some("0,0.5,0.75,0.0003"));
    }

    #[test]
    fn config_validation() {
        let bad = TrainConfig { lr_min: 1e-3, lr_max: 1e-4, ..Default::default() };
        assert!(bad.validate().is_err());
        let bad2 = TrainConfig { patience: 0, ..Default::default() };
        assert!(bad2.validate().is_err());
    }
}
