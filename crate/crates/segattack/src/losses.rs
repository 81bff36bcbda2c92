//! Segmentation loss family: Dice, BCE, Focal and the hybrid training loss.
//!
//! Ground truth `y` is a binary tensor; the prediction `yhat` is a node on
//! the tape so every loss is differentiable with respect to it. BCE and
//! Focal operate on the transformed probability `yt` (the probability the
//! model assigns to the true class of each pixel): `yhat` where `y = 1`,
//! `1 - yhat` where `y = 0`.
//!
//! Sums and means are both available. The mean form of every loss equals
//! its sum form divided by the total pixel count; Dice (which is natively
//! an average over sample-channel pairs) has its sum form scaled up by the
//! same count so the hybrid loss keeps its gradient direction under either
//! reduction.

use crate::autodiff::{NodeId, Tape, LOG_CLAMP};
use crate::tensor::{Tensor, TensorError};
use thiserror::Error;

/// Smoothing term added to the Dice numerator and denominator.
pub const DICE_SMOOTH: f64 = 1e-6;

#[derive(Debug, Error)]
pub enum LossError {
    #[error("ground-truth mask must be strictly binary (found {value} at index {index})")]
    NonBinaryTarget { index: usize, value: f64 },
    #[error("invalid loss parameters: {0}")]
    InvalidParams(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

/// Which loss drives training or an attack.
#[derive(Debug, Clone, PartialEq)]
pub enum LossKind {
    Bce,
    Focal { gamma: f64 },
    Dice,
    HybridFocalDice { gamma: f64, w_dice: f64, w_focal: f64 },
}

impl Default for LossKind {
    fn default() -> Self {
        LossKind::HybridFocalDice {
            gamma: 2.0,
            w_dice: 1.0,
            w_focal: 1.0,
        }
    }
}

impl LossKind {
    pub fn validate(&self) -> Result<(), LossError> {
        match *self {
            LossKind::Bce | LossKind::Dice => Ok(()),
            LossKind::Focal { gamma } => {
                if gamma >= 0.0 && gamma.is_finite() {
                    Ok(())
                } else {
                    Err(LossError::InvalidParams(format!("gamma must be >= 0, got {gamma}")))
                }
            }
            LossKind::HybridFocalDice { gamma, w_dice, w_focal } => {
                if !(gamma >= 0.0 && gamma.is_finite()) {
                    return Err(LossError::InvalidParams(format!("gamma must be >= 0, got {gamma}")));
                }
                if !(w_dice >= 0.0 && w_focal >= 0.0) {
                    return Err(LossError::InvalidParams(format!(
                        "hybrid weights must be nonnegative, got ({w_dice}, {w_focal})"
                    )));
                }
                if w_dice == 0.0 && w_focal == 0.0 {
                    return Err(LossError::InvalidParams(
                        "hybrid weights must not both be zero".into(),
                    ));
                }
                Ok(())
            }
        }
    }

    /// Parse the config-file selector: `bce`, `focal`, `dice` or
    /// `focal+dice`. Parameters take their defaults (gamma 2, weights 1/1).
    pub fn from_selector(s: &str) -> Result<Self, LossError> {
        match s {
            "bce" => Ok(LossKind::Bce),
            "focal" => Ok(LossKind::Focal { gamma: 2.0 }),
            "dice" => Ok(LossKind::Dice),
            "focal+dice" => Ok(LossKind::default()),
            other => Err(LossError::InvalidParams(format!(
                "unknown loss selector {other:?} (expected bce | focal | dice | focal+dice)"
            ))),
        }
    }

    pub fn selector(&self) -> &'static str {
        match self {
            LossKind::Bce => "bce",
            LossKind::Focal { .. } => "focal",
            LossKind::Dice => "dice",
            LossKind::HybridFocalDice { .. } => "focal+dice",
        }
    }
}

impl std::fmt::Display for LossKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.selector())
    }
}

/// Sum over all pixels (the literal paper form) or mean (sum over count).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Reduction {
    Sum,
    Mean,
}

fn check_binary(y: &Tensor) -> Result<(), LossError> {
    for (index, &value) in y.data().iter().enumerate() {
        if value != 0.0 && value != 1.0 {
            return Err(LossError::NonBinaryTarget { index, value });
        }
    }
    Ok(())
}

fn check_pair(tape: &Tape, y: &Tensor, yhat: NodeId, op: &'static str) -> Result<(), LossError> {
    if y.shape() != tape.value(yhat).shape() {
        return Err(TensorError::ShapeMismatch {
            op,
            lhs: y.shape().to_vec(),
            rhs: tape.value(yhat).shape().to_vec(),
        }
        .into());
    }
    check_binary(y)
}

/// Per-pixel probability of the true class (`yhat` where `y` is 1,
/// `1 - yhat` where `y` is 0), differentiable in `yhat`.
pub fn y_transform(tape: &mut Tape, y: &Tensor, yhat: NodeId) -> Result<NodeId, LossError> {
    check_pair(tape, y, yhat, "y_transform")?;
    let slope = tape.constant(y.map(|v| 2.0 * v - 1.0));
    let offset = tape.constant(y.map(|v| 1.0 - v));
    let scaled = tape.mul(yhat, slope)?;
    Ok(tape.add(scaled, offset)?)
}

fn clamped_y_transform(tape: &mut Tape, y: &Tensor, yhat: NodeId) -> Result<NodeId, LossError> {
    let yt = y_transform(tape, y, yhat)?;
    Ok(tape.clamp(yt, LOG_CLAMP, 1.0 - LOG_CLAMP)?)
}

fn reduce_negative(tape: &mut Tape, node: NodeId, reduction: Reduction) -> Result<NodeId, LossError> {
    let red = match reduction {
        Reduction::Sum => tape.sum(node)?,
        Reduction::Mean => tape.mean(node)?,
    };
    Ok(tape.scale_const(red, -1.0)?)
}

/// Binary cross entropy: `-sum log(yt)` with `yt` clamped away from 0 and 1.
pub fn bce_loss(
    tape: &mut Tape,
    y: &Tensor,
    yhat: NodeId,
    reduction: Reduction,
) -> Result<NodeId, LossError> {
    let ytc = clamped_y_transform(tape, y, yhat)?;
    let lg = tape.log(ytc)?;
    reduce_negative(tape, lg, reduction)
}

/// Focal loss: `-sum (1 - yt)^gamma * log(yt)`. With `gamma = 0` this is
/// exactly [`bce_loss`].
pub fn focal_loss(
    tape: &mut Tape,
    y: &Tensor,
    yhat: NodeId,
    gamma: f64,
    reduction: Reduction,
) -> Result<NodeId, LossError> {
    if !(gamma >= 0.0 && gamma.is_finite()) {
        return Err(LossError::InvalidParams(format!("gamma must be >= 0, got {gamma}")));
    }
    let ytc = clamped_y_transform(tape, y, yhat)?;
    let neg = tape.scale_const(ytc, -1.0)?;
    let one_minus = tape.add_const(neg, 1.0)?;
    let modulator = tape.pow_const(one_minus, gamma)?;
    let lg = tape.log(ytc)?;
    let weighted = tape.mul(modulator, lg)?;
    reduce_negative(tape, weighted, reduction)
}

/// Dice loss, computed per sample-channel pair and averaged:
/// `1 - 2 * (sum(y*yhat) + 1e-6) / (sum(y) + sum(yhat) + 1e-6)`.
///
/// The formula is taken literally, so a pair where both masks are empty
/// contributes exactly -1 (a warning is logged when that happens).
pub fn dice_loss(tape: &mut Tape, y: &Tensor, yhat: NodeId) -> Result<NodeId, LossError> {
    check_pair(tape, y, yhat, "dice_loss")?;
    let (n, c, h, w) = y.dims4("dice_loss")?;
    if n * c == 0 || h * w == 0 {
        return Err(LossError::InvalidParams(
            "dice_loss requires a nonempty [N, C, H, W] tensor".into(),
        ));
    }

    // Per-pair mask sums are constants of the graph.
    let mut y_sums = vec![0.0; n * c];
    for (pair, chunk) in y.data().chunks_exact(h * w).enumerate() {
        y_sums[pair] = chunk.iter().sum();
    }
    let yhat_value = tape.value(yhat);
    let empty_pairs = y_sums
        .iter()
        .enumerate()
        .filter(|&(pair, &sy)| {
            sy == 0.0
                && yhat_value.data()[pair * h * w..(pair + 1) * h * w]
                    .iter()
                    .all(|&v| v == 0.0)
        })
        .count();
    if empty_pairs > 0 {
        log::warn!(
            "dice_loss: {empty_pairs} sample-channel pair(s) empty on both sides; \
             the literal formula yields -1 for them (smooth-Dice would yield 0)"
        );
    }

    let y_leaf = tape.constant(y.clone());
    let y_sum_leaf = tape.constant(Tensor::new(vec![n, c], y_sums)?);

    let prod = tape.mul(yhat, y_leaf)?;
    let inter = tape.spatial_sum(prod)?;
    let num = tape.add_const(inter, DICE_SMOOTH)?;
    let yhat_sum = tape.spatial_sum(yhat)?;
    let den_raw = tape.add(yhat_sum, y_sum_leaf)?;
    let den = tape.add_const(den_raw, DICE_SMOOTH)?;
    let inv_den = tape.pow_const(den, -1.0)?;
    let ratio = tape.mul(num, inv_den)?;
    let scaled = tape.scale_const(ratio, -2.0)?;
    let per_pair = tape.add_const(scaled, 1.0)?;
    Ok(tape.mean(per_pair)?)
}

/// Weighted sum of Dice and Focal losses.
pub fn hybrid_loss(
    tape: &mut Tape,
    y: &Tensor,
    yhat: NodeId,
    gamma: f64,
    w_dice: f64,
    w_focal: f64,
    reduction: Reduction,
) -> Result<NodeId, LossError> {
    LossKind::HybridFocalDice { gamma, w_dice, w_focal }.validate()?;
    let pixels = y.numel() as f64;
    let dice = dice_loss(tape, y, yhat)?;
    let focal = focal_loss(tape, y, yhat, gamma, reduction)?;
    let dice_weight = match reduction {
        Reduction::Mean => w_dice,
        Reduction::Sum => w_dice * pixels,
    };
    let d = tape.scale_const(dice, dice_weight)?;
    let f = tape.scale_const(focal, w_focal)?;
    Ok(tape.add(d, f)?)
}

/// Build the loss selected by `kind` on the tape.
pub fn loss_node(
    tape: &mut Tape,
    kind: &LossKind,
    y: &Tensor,
    yhat: NodeId,
    reduction: Reduction,
) -> Result<NodeId, LossError> {
    kind.validate()?;
    match *kind {
        LossKind::Bce => bce_loss(tape, y, yhat, reduction),
        LossKind::Focal { gamma } => focal_loss(tape, y, yhat, gamma, reduction),
        LossKind::Dice => {
            let dice = dice_loss(tape, y, yhat)?;
            match reduction {
                Reduction::Mean => Ok(dice),
                Reduction::Sum => Ok(tape.scale_const(dice, y.numel() as f64)?),
            }
        }
        LossKind::HybridFocalDice { gamma, w_dice, w_focal } => {
            hybrid_loss(tape, y, yhat, gamma, w_dice, w_focal, reduction)
        }
    }
}

/// Evaluate a loss on plain tensors (no gradients kept).
pub fn evaluate(
    kind: &LossKind,
    y: &Tensor,
    yhat: &Tensor,
    reduction: Reduction,
) -> Result<f64, LossError> {
    let mut tape = Tape::new();
    let pred = tape.constant(yhat.clone());
    let node = loss_node(&mut tape, kind, y, pred, reduction)?;
    Ok(tape.value(node).item()?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn t(shape: Vec<usize>, data: Vec<f64>) -> Tensor {
        Tensor::new(shape, data).unwrap()
    }

    fn single(v: f64) -> Tensor {
        t(vec![1, 1, 1, 1], vec![v])
    }

    #[test]
    fn y_transform_cases() {
        let mut tape = Tape::new();
        let yhat = tape.constant(t(vec![3], vec![0.9, 0.9, 0.5]));
        let y = t(vec![3], vec![1.0, 0.0, 0.0]);
        let yt = y_transform(&mut tape, &y, yhat).unwrap();
        let got = tape.value(yt).data();
        assert_eq!(got[0], 0.9);
        assert!((got[1] - 0.1).abs() < 1e-12);
        assert_eq!(got[2], 0.5);

        let bad = t(vec![3], vec![1.0, 0.5, 0.0]);
        assert!(matches!(
            y_transform(&mut tape, &bad, yhat),
            Err(LossError::NonBinaryTarget { index: 1, .. })
        ));
    }

    #[test]
    #[allow(clippy::approx_constant)] // frozen oracle value, not ln(2)
    fn bce_single_pixel() {
        let v = evaluate(&LossKind::Bce, &single(1.0), &single(0.5), Reduction::Sum).unwrap();
        assert!((v - 0.693147).abs() < 1e-6);
        assert!((v - -(0.5f64.ln())).abs() < 1e-15);
    }

    #[test]
    fn bce_clamp_floor() {
        let y = t(vec![1, 1, 1, 2], vec![1.0, 0.0]);
        let yhat = t(vec![1, 1, 1, 2], vec![1.0, 0.0]);
        let v = evaluate(&LossKind::Bce, &y, &yhat, Reduction::Sum).unwrap();
        let per_pixel = v / 2.0;
        assert!((per_pixel - 1e-7).abs() < 1e-9);
    }

    #[test]
    fn bce_two_pixel_oracle() {
        let y = t(vec![2], vec![1.0, 0.0]);
        let yhat = t(vec![2], vec![0.8, 0.3]);
        let want = -(0.8f64.ln()) - (0.7f64.ln());
        let v = evaluate(&LossKind::Bce, &y, &yhat, Reduction::Sum).unwrap();
        assert!((v - want).abs() < 1e-12);
        assert!((v - 0.579818).abs() < 1e-6);

        let mean = evaluate(&LossKind::Bce, &y, &yhat, Reduction::Mean).unwrap();
        assert!((mean - want / 2.0).abs() < 1e-12);
    }

    #[test]
    fn focal_matches_bce_at_gamma_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        for _ in 0..200 {
            let n = rng.random_range(1..20);
            let y = t(vec![n], (0..n).map(|_| f64::from(rng.random_range(0..2u8))).collect());
            let yhat = t(vec![n], (0..n).map(|_| rng.random_range(0.0..1.0)).collect());
            let b = evaluate(&LossKind::Bce, &y, &yhat, Reduction::Sum).unwrap();
            let f = evaluate(&LossKind::Focal { gamma: 0.0 }, &y, &yhat, Reduction::Sum).unwrap();
            assert!((b - f).abs() <= 1e-12, "bce {b} vs focal(0) {f}");
        }
    }

    #[test]
    fn focal_single_pixel_oracle() {
        let v = evaluate(
            &LossKind::Focal { gamma: 2.0 },
            &single(1.0),
            &single(0.5),
            Reduction::Sum,
        )
        .unwrap();
        assert!((v - 0.173287).abs() < 1e-6);
        assert!((v - 0.25 * 2.0f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn focal_never_exceeds_bce_at_gamma_two() {
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        for _ in 0..100 {
            let n = rng.random_range(1..32);
            let y = t(vec![n], (0..n).map(|_| f64::from(rng.random_range(0..2u8))).collect());
            let yhat = t(vec![n], (0..n).map(|_| rng.random_range(0.0..1.0)).collect());
            let b = evaluate(&LossKind::Bce, &y, &yhat, Reduction::Sum).unwrap();
            let f = evaluate(&LossKind::Focal { gamma: 2.0 }, &y, &yhat, Reduction::Sum).unwrap();
            assert!(f <= b + 1e-12);
        }
    }

    #[test]
    fn dice_perfect_and_total_miss() {
        let ones = t(vec![1, 1, 2, 2], vec![1.0; 4]);
        let zeros = t(vec![1, 1, 2, 2], vec![0.0; 4]);

        let perfect = evaluate(&LossKind::Dice, &ones, &ones, Reduction::Mean).unwrap();
        assert!(perfect.abs() < 1e-6);

        let miss = evaluate(&LossKind::Dice, &ones, &zeros, Reduction::Mean).unwrap();
        assert!((1.0 - miss) < 1e-6);

        // Literal formula on an empty-vs-empty pair.
        let both_empty = evaluate(&LossKind::Dice, &zeros, &zeros, Reduction::Mean).unwrap();
        assert_eq!(both_empty, -1.0);
    }

    #[test]
    fn hybrid_oracle_and_degenerate_weights() {
        let y = single(1.0);
        let yhat = single(0.5);
        let dice_term = 1.0 - 2.0 * (0.5 + DICE_SMOOTH) / (1.5 + DICE_SMOOTH);
        let focal_term = 0.25 * 2.0f64.ln();
        let want = dice_term + focal_term;

        let v = evaluate(&LossKind::default(), &y, &yhat, Reduction::Mean).unwrap();
        assert!((v - want).abs() < 1e-12);
        assert!((v - 0.506620).abs() < 1e-6);

        let only_dice = evaluate(
            &LossKind::HybridFocalDice { gamma: 2.0, w_dice: 1.0, w_focal: 0.0 },
            &y,
            &yhat,
            Reduction::Mean,
        )
        .unwrap();
        let dice = evaluate(&LossKind::Dice, &y, &yhat, Reduction::Mean).unwrap();
        assert_eq!(only_dice, dice);

        let only_focal = evaluate(
            &LossKind::HybridFocalDice { gamma: 2.0, w_dice: 0.0, w_focal: 1.0 },
            &y,
            &yhat,
            Reduction::Mean,
        )
        .unwrap();
        let focal =
            evaluate(&LossKind::Focal { gamma: 2.0 }, &y, &yhat, Reduction::Mean).unwrap();
        assert_eq!(only_focal, focal);
    }

    #[test]
    fn mean_is_sum_over_pixels_for_every_kind() {
        let mut rng = ChaCha8Rng::seed_from_u64(37);
        let (n, c, h, w) = (2, 3, 4, 4);
        let numel = n * c * h * w;
        let y = t(
            vec![n, c, h, w],
            (0..numel).map(|_| f64::from(rng.random_range(0..2u8))).collect(),
        );
        let yhat = t(vec![n, c, h, w], (0..numel).map(|_| rng.random_range(0.01..0.99)).collect());
        for kind in [
            LossKind::Bce,
            LossKind::Focal { gamma: 2.0 },
            LossKind::Dice,
            LossKind::default(),
        ] {
            let s = evaluate(&kind, &y, &yhat, Reduction::Sum).unwrap();
            let m = evaluate(&kind, &y, &yhat, Reduction::Mean).unwrap();
            assert!(
                (s - m * numel as f64).abs() < 1e-9 * s.abs().max(1.0),
                "{kind}: sum {s} vs mean {m}"
            );
        }
    }

    #[test]
    fn gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(41);
        let (n, c, h, w) = (1, 2, 3, 3);
        let numel = n * c * h * w;
        let y = t(
            vec![n, c, h, w],
            (0..numel).map(|_| f64::from(rng.random_range(0..2u8))).collect(),
        );
        // Stay away from the clamp boundaries.
        let yhat0 = t(vec![n, c, h, w], (0..numel).map(|_| rng.random_range(0.05..0.95)).collect());

        for kind in [
            LossKind::Bce,
            LossKind::Focal { gamma: 2.0 },
            LossKind::Dice,
            LossKind::default(),
        ] {
            let mut tape = Tape::new();
            let yhat = tape.leaf(yhat0.clone(), true);
            let loss = loss_node(&mut tape, &kind, &y, yhat, Reduction::Mean).unwrap();
            let grads = tape.backward(loss).unwrap();
            let analytic = grads.get(yhat).unwrap();

            let h_step = 1e-5;
            for e in 0..numel {
                let mut plus = yhat0.clone();
                plus.data_mut()[e] += h_step;
                let mut minus = yhat0.clone();
                minus.data_mut()[e] -= h_step;
                let fp = evaluate(&kind, &y, &plus, Reduction::Mean).unwrap();
                let fm = evaluate(&kind, &y, &minus, Reduction::Mean).unwrap();
                let numeric = (fp - fm) / (2.0 * h_step);
                let a = analytic.data()[e];
                let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-4);
                assert!(rel < 1e-4, "{kind}: grad[{e}] {a} vs fd {numeric}");
            }
        }
    }

    #[test]
    fn losses_are_permutation_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(43);
        let (h, w) = (4, 4);
        let numel = h * w;
        let y_data: Vec<f64> = (0..numel).map(|_| f64::from(rng.random_range(0..2u8))).collect();
        let yhat_data: Vec<f64> = (0..numel).map(|_| rng.random_range(0.0..1.0)).collect();

        let mut perm: Vec<usize> = (0..numel).collect();
        for i in (1..numel).rev() {
            perm.swap(i, rng.random_range(0..=i));
        }
        let y = t(vec![1, 1, h, w], y_data.clone());
        let yhat = t(vec![1, 1, h, w], yhat_data.clone());
        let yp = t(vec![1, 1, h, w], perm.iter().map(|&i| y_data[i]).collect());
        let yhp = t(vec![1, 1, h, w], perm.iter().map(|&i| yhat_data[i]).collect());

        for kind in [LossKind::Bce, LossKind::Focal { gamma: 2.0 }, LossKind::Dice, LossKind::default()] {
            let a = evaluate(&kind, &y, &yhat, Reduction::Mean).unwrap();
            let b = evaluate(&kind, &yp, &yhp, Reduction::Mean).unwrap();
            assert!((a - b).abs() < 1e-12, "{kind}: {a} vs {b}");
        }
    }

    #[test]
    fn dice_decreases_toward_truth() {
        let mut rng = ChaCha8Rng::seed_from_u64(47);
        for _ in 0..20 {
            let (h, w) = (4, 4);
            let numel = h * w;
            let mut y_data: Vec<f64> =
                (0..numel).map(|_| f64::from(rng.random_range(0..2u8))).collect();
            y_data[0] = 1.0; // y not all-zero
            let yhat_data: Vec<f64> = (0..numel).map(|_| rng.random_range(0.0..1.0)).collect();
            let y = t(vec![1, 1, h, w], y_data.clone());

            let mut prev = f64::INFINITY;
            for step in 0..=10 {
                let alpha = step as f64 / 10.0;
                let blend: Vec<f64> = yhat_data
                    .iter()
                    .zip(&y_data)
                    .map(|(&p, &target)| p + alpha * (target - p))
                    .collect();
                let v = evaluate(&LossKind::Dice, &y, &t(vec![1, 1, h, w], blend), Reduction::Mean)
                    .unwrap();
                assert!(v <= prev + 1e-12, "dice rose from {prev} to {v} at alpha {alpha}");
                prev = v;
            }
        }
    }

    #[test]
    fn selector_round_trip() {
        for s in ["bce", "focal", "dice", "focal+dice"] {
            assert_eq!(LossKind::from_selector(s).unwrap().selector(), s);
        }
        assert!(LossKind::from_selector("tversky").is_err());
        assert!(LossKind::Focal { gamma: -1.0 }.validate().is_err());
        assert!(LossKind::HybridFocalDice { gamma: 2.0, w_dice: 0.0, w_focal: 0.0 }
            .validate()
            .is_err());
    }

    #[test]
    fn bce_and_focal_nonnegative_dice_bounded() {
        let mut rng = ChaCha8Rng::seed_from_u64(53);
        for _ in 0..100 {
            let n = rng.random_range(1..16);
            let y = t(
                vec![1, 1, 1, n],
                (0..n).map(|_| f64::from(rng.random_range(0..2u8))).collect(),
            );
            let yhat = t(vec![1, 1, 1, n], (0..n).map(|_| rng.random_range(0.0..1.0)).collect());
            assert!(evaluate(&LossKind::Bce, &y, &yhat, Reduction::Sum).unwrap() >= 0.0);
            assert!(
                evaluate(&LossKind::Focal { gamma: 2.0 }, &y, &yhat, Reduction::Sum).unwrap()
                    >= 0.0
            );
            let d = evaluate(&LossKind::Dice, &y, &yhat, Reduction::Mean).unwrap();
            assert!((-1.0..=1.0).contains(&d));
        }
    }
}
