//! FGSM: perturb each input pixel by `epsilon` in the direction that
//! increases the attack loss, `adv = clamp(x + eps * sign(grad_x J))`.
//!
//! The attack loss is pluggable and evaluated against the ground-truth
//! mask (untargeted). Model parameters stay frozen; only the input
//! receives gradient. Because `sign` ignores positive scaling of the
//! loss, the sum and mean forms of a loss produce identical adversarial
//! images.

use crate::autodiff::Tape;
use crate::data::Dataset;
use crate::losses::{loss_node, LossError, LossKind, Reduction};
use crate::metrics::{attack_success, binarize, MetricsError};
use crate::models::{Model, ModelError};
use crate::tensor::{Tensor, TensorError};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum AttackError {
    #[error("invalid attack config: {0}")]
    InvalidConfig(String),
    #[error("input pixel {value} at index {index} lies outside the clamp range [{lo}, {hi}]")]
    InputOutOfRange { index: usize, value: f64, lo: f64, hi: f64 },
    #[error("dataset is empty")]
    EmptyDataset,
    #[error("sample {id} has no mask; score only mask-bearing slices (Dataset::with_masks)")]
    SampleWithoutMask { id: String },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

#[derive(Debug, Clone, PartialEq)]
pub struct AttackConfig {
    /// L-infinity perturbation magnitude.
    pub epsilon: f64,
    pub attack_loss: LossKind,
    /// Valid pixel range; adversarial images are clamped into it.
    pub clamp: (f64, f64),
    /// Optional ascending list for sweeps.
    pub epsilons: Option<Vec<f64>>,
}

impl Default for AttackConfig {
    fn default() -> Self {
        Self {
            epsilon: 0.009,
            attack_loss: LossKind::Bce,
            clamp: (0.0, 1.0),
            epsilons: None,
        }
    }
}

impl AttackConfig {
    pub fn validate(&self) -> Result<(), AttackError> {
        let (lo, hi) = self.clamp;
        if !(lo < hi) {
            return Err(AttackError::InvalidConfig(format!("bad clamp range [{lo}, {hi}]")));
        }
        let check_eps = |e: f64| -> Result<(), AttackError> {
            if !(e >= 0.0) || e >= hi - lo {
                return Err(AttackError::InvalidConfig(format!(
                    "epsilon {e} must satisfy 0 <= epsilon < {}",
                    hi - lo
                )));
            }
            Ok(())
        };
        check_eps(self.epsilon)?;
        if let Some(eps) = &self.epsilons {
            if eps.is_empty() {
                return Err(AttackError::InvalidConfig("empty epsilon sweep list".into()));
            }
            for window in eps.windows(2) {
                if !(window[0] < window[1]) {
                    return Err(AttackError::InvalidConfig(format!(
                        "sweep epsilons must be strictly ascending, got {eps:?}"
                    )));
                }
            }
            for &e in eps {
                check_eps(e)?;
            }
        }
        self.attack_loss.validate()?;
        Ok(())
    }
}

/// Mathematical sign with `sign(0) = 0`, so zero-gradient pixels stay put.
pub fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Apply the FGSM update to a plain tensor given a precomputed gradient.
pub fn fgsm_step(x: &Tensor, grad: &Tensor, epsilon: f64, clamp: (f64, f64)) -> Result<Tensor, AttackError> {
    if x.shape() != grad.shape() {
        return Err(TensorError::ShapeMismatch {
            op: "fgsm_step",
            lhs: x.shape().to_vec(),
            rhs: grad.shape().to_vec(),
        }
        .into());
    }
    let (lo, hi) = clamp;
    let data: Vec<f64> = x
        .data()
        .iter()
        .zip(grad.data())
        .map(|(&xi, &gi)| (xi + epsilon * sign(gi)).clamp(lo, hi))
        .collect();
    Ok(Tensor::new(x.shape().to_vec(), data)?)
}

fn check_range(x: &Tensor, clamp: (f64, f64)) -> Result<(), AttackError> {
    let (lo, hi) = clamp;
    for (index, &value) in x.data().iter().enumerate() {
        if value < lo || value > hi {
            return Err(AttackError::InputOutOfRange { index, value, lo, hi });
        }
    }
    Ok(())
}

/// Gradient of the attack loss with respect to the input batch, with model
/// parameters frozen.
pub fn input_gradient(
    model: &Model,
    attack_loss: &LossKind,
    x: &Tensor,
    y: &Tensor,
) -> Result<Tensor, AttackError> {
    attack_loss.validate()?;
    let mut tape = Tape::new();
    let input = tape.leaf(x.clone(), true);
    let pass = model.forward_on(&mut tape, input, false)?;
    // Reduction is irrelevant to the attack direction; Mean keeps the
    // loss magnitude scale-free.
    let loss = loss_node(&mut tape, attack_loss, y, pass.output, Reduction::Mean)?;
    let grads = tape.backward(loss)?;
    Ok(grads
        .get(input)
        .cloned()
        .unwrap_or_else(|| Tensor::zeros(x.shape().to_vec())))
}

/// Generate adversarial images for a batch: `x` is `[N, 1, H, W]` in the
/// clamp range, `y` is the binary `[N, 3, H, W]` ground truth.
pub fn fgsm(
    model: &Model,
    cfg: &AttackConfig,
    x: &Tensor,
    y: &Tensor,
) -> Result<Tensor, AttackError> {
    cfg.validate()?;
    check_range(x, cfg.clamp)?;
    let grad = input_gradient(model, &cfg.attack_loss, x, y)?;
    fgsm_step(x, &grad, cfg.epsilon, cfg.clamp)
}

/// Per-sample outcome of one attack run.
#[derive(Debug, Clone)]
pub struct SampleAttackRecord {
    pub sample_id: String,
    pub dsc_clean: f64,
    pub dsc_attacked: f64,
    /// `[1, H, W]` adversarial image.
    pub adv_image: Tensor,
}

/// Aggregate outcome over a dataset.
#[derive(Debug, Clone)]
pub struct AttackOutcome {
    pub records: Vec<SampleAttackRecord>,
    pub mean_dsc_clean: f64,
    pub mean_dsc_attacked: f64,
    /// Relative drop of the aggregate DSC.
    pub attack_success: f64,
}

/// DSC of one sample inside a batched prediction, averaged over its
/// nonempty channels.
fn sample_dsc(pred: &Tensor, truth: &Tensor, sample: usize) -> Option<f64> {
    let (_, c, h, w) = (
        pred.shape()[0],
        pred.shape()[1],
        pred.shape()[2],
        pred.shape()[3],
    );
    let plane = h * w;
    let mut total = 0.0;
    let mut counted = 0usize;
    for ch in 0..c {
        let base = (sample * c + ch) * plane;
        let p = &pred.data()[base..base + plane];
        let t = &truth.data()[base..base + plane];
        let inter: f64 = p.iter().zip(t).map(|(&a, &b)| a * b).sum();
        let sp: f64 = p.iter().sum();
        let st: f64 = t.iter().sum();
        if sp + st == 0.0 {
            continue;
        }
        total += 2.0 * inter / (sp + st);
        counted += 1;
    }
    (counted > 0).then(|| total / counted as f64)
}

/// Attack every sample of `dataset` at `cfg.epsilon`, scoring clean and
/// attacked predictions. Every sample must carry a mask.
pub fn attack_batch(
    model: &Model,
    cfg: &AttackConfig,
    dataset: &Dataset,
    batch_size: usize,
) -> Result<AttackOutcome, AttackError> {
    cfg.validate()?;
    if dataset.is_empty() {
        return Err(AttackError::EmptyDataset);
    }
    if let Some(s) = dataset.samples().iter().find(|s| !s.has_mask()) {
        return Err(AttackError::SampleWithoutMask { id: s.id() });
    }

    let mut records = Vec::with_capacity(dataset.len());
    let indices: Vec<usize> = (0..dataset.len()).collect();
    for chunk in indices.chunks(batch_size.max(1)) {
        let (images, masks) = dataset
            .batch(chunk)
            .map_err(|e| AttackError::InvalidConfig(e.to_string()))?;
        let clean_probs = model.forward(&images)?;
        let clean_pred = binarize(&clean_probs, 0.5)?;

        let adv = fgsm(model, cfg, &images, &masks)?;
        let adv_probs = model.forward(&adv)?;
        let adv_pred = binarize(&adv_probs, 0.5)?;

        let (_, _, h, w) = images.dims4("attack_batch")?;
        for (bi, &di) in chunk.iter().enumerate() {
            let sample = &dataset.samples()[di];
            let dsc_clean = sample_dsc(&clean_pred, &masks, bi)
                .expect("mask-bearing sample has a scored channel");
            let dsc_attacked = sample_dsc(&adv_pred, &masks, bi)
                .expect("mask-bearing sample has a scored channel");
            let adv_image = Tensor::new(
                vec![1, h, w],
                adv.data()[bi * h * w..(bi + 1) * h * w].to_vec(),
            )?;
            records.push(SampleAttackRecord {
                sample_id: sample.id(),
                dsc_clean,
                dsc_attacked,
                adv_image,
            });
        }
    }

    let n = records.len() as f64;
    let mean_dsc_clean = records.iter().map(|r| r.dsc_clean).sum::<f64>() / n;
    let mean_dsc_attacked = records.iter().map(|r| r.dsc_attacked).sum::<f64>() / n;
    let attack_success = attack_success(mean_dsc_clean, mean_dsc_attacked)?;
    Ok(AttackOutcome { records, mean_dsc_clean, mean_dsc_attacked, attack_success })
}

/// One row of an epsilon sweep.
#[derive(Debug, Clone, PartialEq)]
pub struct SweepRow {
    pub epsilon: f64,
    pub mean_dsc: f64,
    pub attack_success: f64,
}

/// Attack the dataset once per epsilon in `cfg.epsilons`. The input
/// gradient does not depend on epsilon, so it is computed once per batch
/// and reused across the sweep.
pub fn epsilon_sweep(
    model: &Model,
    cfg: &AttackConfig,
    dataset: &Dataset,
    batch_size: usize,
) -> Result<Vec<SweepRow>, AttackError> {
    cfg.validate()?;
    let epsilons = cfg
        .epsilons
        .clone()
        .ok_or_else(|| AttackError::InvalidConfig("sweep requires an epsilons list".into()))?;
    if dataset.is_empty() {
        return Err(AttackError::EmptyDataset);
    }
    if let Some(s) = dataset.samples().iter().find(|s| !s.has_mask()) {
        return Err(AttackError::SampleWithoutMask { id: s.id() });
    }

    let mut clean_sum = 0.0;
    let mut eps_sums = vec![0.0; epsilons.len()];
    let mut count = 0usize;
    let indices: Vec<usize> = (0..dataset.len()).collect();
    for chunk in indices.chunks(batch_size.max(1)) {
        let (images, masks) = dataset
            .batch(chunk)
            .map_err(|e| AttackError::InvalidConfig(e.to_string()))?;
        check_range(&images, cfg.clamp)?;
        let clean_pred = binarize(&model.forward(&images)?, 0.5)?;
        let grad = input_gradient(model, &cfg.attack_loss, &images, &masks)?;
        for bi in 0..chunk.len() {
            clean_sum += sample_dsc(&clean_pred, &masks, bi).expect("mask-bearing sample");
        }
        for (ei, &eps) in epsilons.iter().enumerate() {
            let adv = fgsm_step(&images, &grad, eps, cfg.clamp)?;
            let adv_pred = binarize(&model.forward(&adv)?, 0.5)?;
            for bi in 0..chunk.len() {
                eps_sums[ei] += sample_dsc(&adv_pred, &masks, bi).expect("mask-bearing sample");
            }
        }
        count += chunk.len();
    }

    let mean_clean = clean_sum / count as f64;
    epsilons
        .iter()
        .zip(&eps_sums)
        .map(|(&epsilon, &sum)| {
            let mean_dsc = sum / count as f64;
            Ok(SweepRow {
                epsilon,
                mean_dsc,
                attack_success: attack_success(mean_clean, mean_dsc)?,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::phantom::{generate_phantoms, PhantomConfig};
    use crate::models::{build_model, Arch, ModelConfig};
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

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

    fn random_pair(rng: &mut ChaCha8Rng, n: usize, hw: usize) -> (Tensor, Tensor) {
        let x = Tensor::new(
            vec![n, 1, hw, hw],
            (0..n * hw * hw).map(|_| rng.random_range(0.0..=1.0)).collect(),
        )
        .unwrap();
        let mut y_data = vec![0.0; n * 3 * hw * hw];
        for v in y_data.iter_mut() {
            *v = f64::from(rng.random_range(0..2u8));
        }
        let y = Tensor::new(vec![n, 3, hw, hw], y_data).unwrap();
        (x, y)
    }

    #[test]
    fn sign_convention() {
        assert_eq!(sign(2.5), 1.0);
        assert_eq!(sign(-0.1), -1.0);
        assert_eq!(sign(0.0), 0.0);
    }

    #[test]
    fn epsilon_zero_is_identity() {
        let model = tiny_model(1);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let (x, y) = random_pair(&mut rng, 2, 8);
        let cfg = AttackConfig { epsilon: 0.0, ..Default::default() };
        let adv = fgsm(&model, &cfg, &x, &y).unwrap();
        assert_eq!(adv.data(), x.data());
    }

    #[test]
    fn scalar_chain_rule_oracle() {
        // yhat = sigmoid(w * x) with w = 1, y = 1, x = 0.5. The BCE input
        // gradient is (yhat - 1) * w < 0, so the attack pushes x down.
        let mut tape = Tape::new();
        let x0 = Tensor::new(vec![1, 1, 1, 1], vec![0.5]).unwrap();
        let x = tape.leaf(x0.clone(), true);
        let w = tape.constant(Tensor::new(vec![1, 1, 1, 1], vec![1.0]).unwrap());
        let wx = tape.mul(x, w).unwrap();
        let yhat = tape.sigmoid(wx).unwrap();
        let y = Tensor::new(vec![1, 1, 1, 1], vec![1.0]).unwrap();
        let loss = loss_node(&mut tape, &LossKind::Bce, &y, yhat, Reduction::Sum).unwrap();
        let grads = tape.backward(loss).unwrap();
        let g = grads.get(x).unwrap();

        let s = 1.0 / (1.0 + (-0.5f64).exp());
        assert!((g.data()[0] - (s - 1.0)).abs() < 1e-12);
        assert!(g.data()[0] < 0.0);

        let adv = fgsm_step(&x0, g, 0.009, (0.0, 1.0)).unwrap();
        assert!((adv.data()[0] - 0.491).abs() < 1e-12);
    }

    #[test]
    fn linf_bound_and_range_hold() {
        let model = tiny_model(3);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let cfg = AttackConfig { epsilon: 0.05, ..Default::default() };
        for _ in 0..10 {
            let (x, y) = random_pair(&mut rng, 1, 8);
            let adv = fgsm(&model, &cfg, &x, &y).unwrap();
            assert!(adv.linf_distance(&x).unwrap() <= cfg.epsilon + 1e-15);
            assert!(adv.min() >= 0.0 && adv.max() <= 1.0);
        }
    }

    #[test]
    fn positive_loss_rescaling_and_reduction_are_invisible() {
        let model = tiny_model(7);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let (x, y) = random_pair(&mut rng, 1, 8);

        // Sum and mean forms differ by the positive pixel count.
        let g_sum = {
            let mut tape = Tape::new();
            let input = tape.leaf(x.clone(), true);
            let pass = model.forward_on(&mut tape, input, false).unwrap();
            let loss = loss_node(&mut tape, &LossKind::Bce, &y, pass.output, Reduction::Sum).unwrap();
            tape.backward(loss).unwrap().get(input).unwrap().clone()
        };
        let g_mean = {
            let mut tape = Tape::new();
            let input = tape.leaf(x.clone(), true);
            let pass = model.forward_on(&mut tape, input, false).unwrap();
            let loss =
                loss_node(&mut tape, &LossKind::Bce, &y, pass.output, Reduction::Mean).unwrap();
            tape.backward(loss).unwrap().get(input).unwrap().clone()
        };
        let eps = 0.009;
        let a = fgsm_step(&x, &g_sum, eps, (0.0, 1.0)).unwrap();
        let b = fgsm_step(&x, &g_mean, eps, (0.0, 1.0)).unwrap();
        assert_eq!(a.data(), b.data());

        // Doubling both hybrid weights scales the loss by 2.
        let one = AttackConfig {
            attack_loss: LossKind::HybridFocalDice { gamma: 2.0, w_dice: 1.0, w_focal: 1.0 },
            ..Default::default()
        };
        let two = AttackConfig {
            attack_loss: LossKind::HybridFocalDice { gamma: 2.0, w_dice: 2.0, w_focal: 2.0 },
            ..Default::default()
        };
        let adv1 = fgsm(&model, &one, &x, &y).unwrap();
        let adv2 = fgsm(&model, &two, &x, &y).unwrap();
        assert_eq!(adv1.data(), adv2.data());
    }

    #[test]
    fn attack_does_not_mutate_parameters_and_is_deterministic() {
        let model = tiny_model(11);
        let before = model.parameters().clone();
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let (x, y) = random_pair(&mut rng, 2, 8);
        let cfg = AttackConfig::default();
        let a = fgsm(&model, &cfg, &x, &y).unwrap();
        let b = fgsm(&model, &cfg, &x, &y).unwrap();
        assert_eq!(a.data(), b.data());
        assert_eq!(model.parameters(), &before);
    }

    #[test]
    fn directional_derivative_equals_l1_norm() {
        let model = tiny_model(17);
        let mut rng = ChaCha8Rng::seed_from_u64(19);
        // Interior pixels: no clamping at eps = 0.009.
        let x = Tensor::new(
            vec![1, 1, 8, 8],
            (0..64).map(|_| rng.random_range(0.2..0.8)).collect(),
        )
        .unwrap();
        let y = Tensor::new(
            vec![1, 3, 8, 8],
            (0..192).map(|_| f64::from(rng.random_range(0..2u8))).collect(),
        )
        .unwrap();
        let g = input_gradient(&model, &LossKind::Bce, &x, &y).unwrap();
        let eps = 0.009;
        let adv = fgsm_step(&x, &g, eps, (0.0, 1.0)).unwrap();
        let dot: f64 = g
            .data()
            .iter()
            .zip(adv.data().iter().zip(x.data()))
            .map(|(&gi, (&ai, &xi))| gi * (ai - xi))
            .sum::<f64>()
            / eps;
        let l1: f64 = g.data().iter().map(|v| v.abs()).sum();
        assert!(l1 > 0.0);
        assert!((dot - l1).abs() <= 1e-9 * l1);
    }

    fn attackable_dataset() -> Dataset {
        let mut cfg = PhantomConfig {
            n_scans: 2,
            slices_per_scan: 3,
            image_size: 32,
            ..Default::default()
        };
        for class in &mut cfg.classes {
            class.radius = (2.0, 3.2);
            class.blob_count = (1, 1);
            class.presence = 1.0;
        }
        generate_phantoms(&cfg).unwrap()
    }

    #[test]
    fn attack_batch_contract() {
        let model = tiny_model(23);
        let ds = attackable_dataset();
        let cfg = AttackConfig { epsilon: 0.0, ..Default::default() };
        let out = attack_batch(&model, &cfg, &ds, 4).unwrap();
        assert_eq!(out.records.len(), ds.len());
        for r in &out.records {
            assert_eq!(r.dsc_clean, r.dsc_attacked);
        }
        assert_eq!(out.attack_success, 0.0);
        let recomputed =
            attack_success(out.mean_dsc_clean, out.mean_dsc_attacked).unwrap();
        assert!((out.attack_success - recomputed).abs() <= 1e-9);

        let empty = Dataset::new(vec![]);
        assert!(matches!(attack_batch(&model, &cfg, &empty, 4), Err(AttackError::EmptyDataset)));
    }

    #[test]
    fn sweep_rows_and_zero_epsilon_row() {
        let model = tiny_model(29);
        let ds = attackable_dataset();
        let cfg = AttackConfig {
            epsilons: Some(vec![0.0, 0.009, 0.015]),
            ..Default::default()
        };
        let rows = epsilon_sweep(&model, &cfg, &ds, 4).unwrap();
        assert_eq!(rows.len(), 3);
        assert_eq!(rows[0].epsilon, 0.0);
        assert_eq!(rows[0].attack_success, 0.0);

        let unsorted = AttackConfig { epsilons: Some(vec![0.01, 0.005]), ..Default::default() };
        assert!(unsorted.validate().is_err());
        let too_big = AttackConfig { epsilon: 1.5, ..Default::default() };
        assert!(too_big.validate().is_err());
    }
}
