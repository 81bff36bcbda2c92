//! Post-hoc evaluation: binarization, Dice Similarity Coefficient,
//! attack-success scoring and TP/FP/FN difference maps.

use crate::tensor::{Tensor, TensorError};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("threshold must lie strictly inside (0, 1), got {0}")]
    BadThreshold(f64),
    #[error("expected a binary tensor (found {value} at index {index})")]
    NonBinary { index: usize, value: f64 },
    #[error("dsc is undefined: every sample-channel pair is empty on both sides")]
    DscAllEmpty,
    #[error("attack success is undefined when the pre-attack DSC is {0}")]
    UndefinedAttackSuccess(f64),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

/// Threshold probabilities into a binary mask. Ties (`prob == threshold`)
/// go to 1.
pub fn binarize(prob: &Tensor, threshold: f64) -> Result<Tensor, MetricsError> {
    if !(threshold > 0.0 && threshold < 1.0) {
        return Err(MetricsError::BadThreshold(threshold));
    }
    Ok(prob.map(|v| if v >= threshold { 1.0 } else { 0.0 }))
}

fn check_binary_pair(pred: &Tensor, truth: &Tensor, op: &'static str) -> Result<(), MetricsError> {
    if pred.shape() != truth.shape() {
        return Err(TensorError::ShapeMismatch {
            op,
            lhs: pred.shape().to_vec(),
            rhs: truth.shape().to_vec(),
        }
        .into());
    }
    for t in [pred, truth] {
        for (index, &value) in t.data().iter().enumerate() {
            if value != 0.0 && value != 1.0 {
                return Err(MetricsError::NonBinary { index, value });
            }
        }
    }
    Ok(())
}

/// Dice Similarity Coefficient `2|y ∩ ŷ| / (|y| + |ŷ|)`, computed per
/// sample-channel pair and averaged. Pairs that are empty on both sides are
/// skipped; rank < 4 tensors are treated as a single pair.
pub fn dsc(pred: &Tensor, truth: &Tensor) -> Result<f64, MetricsError> {
    check_binary_pair(pred, truth, "dsc")?;
    let (pairs, plane) = match pred.shape() {
        &[n, c, h, w] => (n * c, h * w),
        _ => (1, pred.numel()),
    };
    let mut total = 0.0;
    let mut counted = 0usize;
    for pair in 0..pairs {
        let p = &pred.data()[pair * plane..(pair + 1) * plane];
        let t = &truth.data()[pair * plane..(pair + 1) * plane];
        let inter: f64 = p.iter().zip(t).map(|(&a, &b)| a * b).sum();
        let sp: f64 = p.iter().sum();
        let st: f64 = t.iter().sum();
        if sp + st == 0.0 {
            continue;
        }
        total += 2.0 * inter / (sp + st);
        counted += 1;
    }
    if counted == 0 {
        return Err(MetricsError::DscAllEmpty);
    }
    Ok(total / counted as f64)
}

/// Relative DSC drop caused by an attack, clamped below at 0.
pub fn attack_success(dsc_before: f64, dsc_after: f64) -> Result<f64, MetricsError> {
    if !(dsc_before > 0.0) {
        return Err(MetricsError::UndefinedAttackSuccess(dsc_before));
    }
    Ok(((dsc_before - dsc_after) / dsc_before).max(0.0))
}

/// Per-pixel confusion category of a prediction against the truth.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DiffCategory {
    TruePositive,
    FalsePositive,
    FalseNegative,
    TrueNegative,
}

impl DiffCategory {
    /// Render color: TP green, FP blue, FN red, TN black.
    pub fn rgb(self) -> [u8; 3] {
        match self {
            DiffCategory::TruePositive => [0, 200, 0],
            DiffCategory::FalsePositive => [0, 80, 255],
            DiffCategory::FalseNegative => [230, 0, 0],
            DiffCategory::TrueNegative => [0, 0, 0],
        }
    }
}

/// Categorical TP/FP/FN/TN map over a prediction-truth pair.
#[derive(Debug, Clone)]
pub struct DiffMap {
    shape: Vec<usize>,
    categories: Vec<DiffCategory>,
}

impl DiffMap {
    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn categories(&self) -> &[DiffCategory] {
        &self.categories
    }

    /// (TP, FP, FN, TN) pixel counts.
    pub fn counts(&self) -> (usize, usize, usize, usize) {
        let mut c = (0, 0, 0, 0);
        for cat in &self.categories {
            match cat {
                DiffCategory::TruePositive => c.0 += 1,
                DiffCategory::FalsePositive => c.1 += 1,
                DiffCategory::FalseNegative => c.2 += 1,
                DiffCategory::TrueNegative => c.3 += 1,
            }
        }
        c
    }

    /// DSC reconstructed from the confusion counts: `2TP / (2TP + FP + FN)`.
    pub fn dsc_from_counts(&self) -> Option<f64> {
        let (tp, fp, fn_, _) = self.counts();
        let den = 2.0 * tp as f64 + fp as f64 + fn_ as f64;
        if den == 0.0 {
            None
        } else {
            Some(2.0 * tp as f64 / den)
        }
    }
}

/// Classify each pixel of a binary prediction against a binary truth.
pub fn diff_map(pred: &Tensor, truth: &Tensor) -> Result<DiffMap, MetricsError> {
    check_binary_pair(pred, truth, "diff_map")?;
    let categories = pred
        .data()
        .iter()
        .zip(truth.data())
        .map(|(&p, &t)| match (p == 1.0, t == 1.0) {
            (true, true) => DiffCategory::TruePositive,
            (true, false) => DiffCategory::FalsePositive,
            (false, true) => DiffCategory::FalseNegative,
            (false, false) => DiffCategory::TrueNegative,
        })
        .collect();
    Ok(DiffMap {
        shape: pred.shape().to_vec(),
        categories,
    })
}

/// One row of the attack comparison table: per-model clean DSC plus
/// attacked DSC and attack success per attack loss, in table column order.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalRow {
    pub model_name: String,
    pub parameter_count: usize,
    pub dsc_clean: f64,
    /// (attack loss selector, attacked DSC) in column order.
    pub dsc_attacked: Vec<(String, f64)>,
    /// (attack loss selector, attack success) in column order.
    pub attack_success: Vec<(String, f64)>,
}

impl EvalRow {
    pub fn new(
        model_name: impl Into<String>,
        parameter_count: usize,
        dsc_clean: f64,
        dsc_attacked: Vec<(String, f64)>,
    ) -> Result<Self, MetricsError> {
        let attack_success_cols = dsc_attacked
            .iter()
            .map(|(loss, after)| Ok((loss.clone(), attack_success(dsc_clean, *after)?)))
            .collect::<Result<Vec<_>, MetricsError>>()?;
        Ok(Self {
            model_name: model_name.into(),
            parameter_count,
            dsc_clean,
            dsc_attacked,
            attack_success: attack_success_cols,
        })
    }

    /// Attack loss with the highest attack success, if any.
    pub fn best_attack(&self) -> Option<&str> {
        self.attack_success
            .iter()
            .max_by(|a, b| a.1.total_cmp(&b.1))
            .map(|(loss, _)| loss.as_str())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: Vec<usize>, data: Vec<f64>) -> Tensor {
        Tensor::new(shape, data).unwrap()
    }

    #[test]
    fn binarize_tie_rule_and_idempotence() {
        let p = t(vec![4], vec![0.5, 0.49, 0.0, 1.0]);
        let b = binarize(&p, 0.5).unwrap();
        assert_eq!(b.data(), &[1.0, 0.0, 0.0, 1.0]);
        let bb = binarize(&b, 0.5).unwrap();
        assert_eq!(bb.data(), b.data());

        let zeros = Tensor::zeros(vec![3]);
        assert!(binarize(&zeros, 0.5).unwrap().data().iter().all(|&v| v == 0.0));
        assert!(binarize(&p, 0.0).is_err());
        assert!(binarize(&p, 1.0).is_err());
    }

    #[test]
    fn dsc_basics() {
        let a = t(vec![2, 2], vec![1.0, 1.0, 0.0, 0.0]);
        assert_eq!(dsc(&a, &a).unwrap(), 1.0);

        let b = t(vec![2, 2], vec![0.0, 0.0, 1.0, 1.0]);
        assert_eq!(dsc(&a, &b).unwrap(), 0.0);

        // |y| = 4, |ŷ| = 4, overlap 2 -> 0.5
        let y = t(vec![8], vec![1.0, 1.0, 1.0, 1.0, 0.0, 0.0, 0.0, 0.0]);
        let yh = t(vec![8], vec![1.0, 1.0, 0.0, 0.0, 1.0, 1.0, 0.0, 0.0]);
        assert_eq!(dsc(&yh, &y).unwrap(), 0.5);

        let soft = t(vec![2], vec![0.5, 1.0]);
        assert!(matches!(dsc(&soft, &t(vec![2], vec![1.0, 1.0])), Err(MetricsError::NonBinary { .. })));
    }

    #[test]
    fn dsc_skips_empty_pairs_and_is_symmetric() {
        // Channel 0 disagrees, channel 1 empty on both sides: the empty
        // pair must not dilute the average.
        let pred = t(vec![1, 2, 1, 2], vec![1.0, 0.0, 0.0, 0.0]);
        let truth = t(vec![1, 2, 1, 2], vec![1.0, 1.0, 0.0, 0.0]);
        let v = dsc(&pred, &truth).unwrap();
        assert!((v - 2.0 / 3.0).abs() < 1e-12);
        assert_eq!(v, dsc(&truth, &pred).unwrap());

        let empty = Tensor::zeros(vec![1, 1, 2, 2]);
        assert!(matches!(dsc(&empty, &empty), Err(MetricsError::DscAllEmpty)));
    }

    #[test]
    fn attack_success_paper_rows() {
        let a = attack_success(0.8024, 0.3750).unwrap();
        assert!((a - 0.5327).abs() < 1e-4);
        let b = attack_success(0.7841, 0.3873).unwrap();
        assert!((b - 0.5061).abs() < 1e-4);
        assert_eq!(attack_success(0.7, 0.7).unwrap(), 0.0);
        // A strengthening attack clamps to zero rather than going negative.
        assert_eq!(attack_success(0.5, 0.9).unwrap(), 0.0);
        assert!(attack_success(0.0, 0.3).is_err());
    }

    #[test]
    fn diff_map_categories_and_counts() {
        let pred = t(vec![2, 2], vec![1.0, 1.0, 0.0, 0.0]);
        let truth = t(vec![2, 2], vec![1.0, 0.0, 1.0, 0.0]);
        let m = diff_map(&pred, &truth).unwrap();
        assert_eq!(
            m.categories(),
            &[
                DiffCategory::TruePositive,
                DiffCategory::FalsePositive,
                DiffCategory::FalseNegative,
                DiffCategory::TrueNegative,
            ]
        );
        assert_eq!(m.counts(), (1, 1, 1, 1));

        let exact = diff_map(&pred, &pred).unwrap();
        let (_, fp, fn_, _) = exact.counts();
        assert_eq!((fp, fn_), (0, 0));
    }

    #[test]
    fn diff_map_counts_reconstruct_dsc_exactly() {
        use rand::Rng;
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(61);
        for _ in 0..100 {
            let n = rng.random_range(4..64);
            let mut pred: Vec<f64> =
                (0..n).map(|_| f64::from(rng.random_range(0..2u8))).collect();
            let truth: Vec<f64> = (0..n).map(|_| f64::from(rng.random_range(0..2u8))).collect();
            pred[0] = 1.0; // keep the pair nonempty
            let p = t(vec![n], pred);
            let tr = t(vec![n], truth);
            let reconstructed = diff_map(&p, &tr).unwrap().dsc_from_counts().unwrap();
            assert_eq!(reconstructed, dsc(&p, &tr).unwrap());
        }
    }

    #[test]
    fn eval_row_recomputes_and_flags_best() {
        // Table-style row: normal 0.8024, attacked {bce 0.3750, focal+dice
        // 0.4705, focal 0.4330} -> bce flagged best.
        let row = EvalRow::new(
            "unetpp16",
            68_160_000,
            0.8024,
            vec![
                ("bce".into(), 0.3750),
                ("focal+dice".into(), 0.4705),
                ("focal".into(), 0.4330),
            ],
        )
        .unwrap();
        assert_eq!(row.best_attack(), Some("bce"));
        for (i, (_, as_v)) in row.attack_success.iter().enumerate() {
            let recomputed = attack_success(row.dsc_clean, row.dsc_attacked[i].1).unwrap();
            assert!((as_v - recomputed).abs() <= 1e-9);
        }
        assert!((row.attack_success[0].1 - 0.5327).abs() < 1e-4);
    }
}
