//! Prediction-space losses: softmax, KL divergence, the multi-sample
//! consistency loss, and the combined objective.

use crate::error::{Error, Result};

/// Floor applied to probabilities before any logarithm.
pub const PROB_FLOOR: f64 = 1e-12;

/// Probability vector over classes; entries in [0,1], summing to 1.
#[derive(Debug, Clone, PartialEq)]
pub struct PredictionDistribution {
    probs: Vec<f64>,
}

impl PredictionDistribution {
    pub fn new(probs: Vec<f64>) -> Result<Self> {
        if probs.is_empty() {
            return Err(Error::InvalidArgument("empty probability vector".into()));
        }
        if let Some(&v) = probs.iter().find(|&&v| !(-1e-9..=1.0 + 1e-9).contains(&v)) {
            return Err(Error::InvalidArgument(format!("probability {v} outside [0,1]")));
        }
        let sum: f64 = probs.iter().sum();
        if (sum - 1.0).abs() > 1e-6 {
            return Err(Error::InvalidArgument(format!("probabilities sum to {sum}, not 1")));
        }
        Ok(Self { probs })
    }

    pub fn uniform(n: usize) -> Self {
        Self { probs: vec![1.0 / n as f64; n] }
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn len(&self) -> usize {
        self.probs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.probs.is_empty()
    }

    /// Index of the largest probability, ties toward the lowest index.
    pub fn argmax(&self) -> usize {
        let mut best = 0;
        for (i, &v) in self.probs.iter().enumerate() {
            if v > self.probs[best] {
                best = i;
            }
        }
        best
    }
}

/// Sum values in ascending order so the result is independent of the caller's
/// ordering; used wherever permutation invariance must hold bitwise.
fn sum_sorted(values: &mut [f64]) -> f64 {
    values.sort_unstable_by(f64::total_cmp);
    values.iter().sum()
}

/// Max-subtracted exponential normalization.
pub fn softmax(logits: &[f64]) -> Result<PredictionDistribution> {
    if logits.is_empty() {
        return Err(Error::InvalidArgument("empty logit vector".into()));
    }
    if let Some(&v) = logits.iter().find(|v| !v.is_finite()) {
        return Err(Error::InvalidArgument(format!("non-finite logit {v}")));
    }
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&l| (l - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    Ok(PredictionDistribution { probs: exps.into_iter().map(|e| e / sum).collect() })
}

/// `sum_i p_i * log(p_i / q_i)` with both arguments floored at 1e-12 inside
/// the log; clamped at zero against rounding.
pub fn kl_divergence(p: &PredictionDistribution, q: &PredictionDistribution) -> Result<f64> {
    if p.len() != q.len() {
        return Err(Error::DimensionMismatch(format!(
            "{} classes vs {}",
            p.len(),
            q.len()
        )));
    }
    let mut total = 0.0;
    for (&pi, &qi) in p.probs.iter().zip(&q.probs) {
        if pi > 0.0 {
            total += pi * (pi.max(PROB_FLOOR).ln() - qi.max(PROB_FLOOR).ln());
        }
    }
    Ok(total.max(0.0))
}

/// Sum of KL divergences from each prediction to the arithmetic mean of all
/// predictions. Zero exactly when all predictions agree.
///
/// Both the mean and the final sum are accumulated in sorted order, so the
/// result is bitwise invariant under permutation of the samples.
pub fn consistency_loss(preds: &[PredictionDistribution]) -> Result<f64> {
    if preds.len() < 2 {
        return Err(Error::InvalidArgument(format!(
            "consistency loss needs at least 2 predictions, got {}",
            preds.len()
        )));
    }
    let n = preds[0].len();
    for p in preds {
        if p.len() != n {
            return Err(Error::DimensionMismatch(format!("{} classes vs {}", p.len(), n)));
        }
    }
    let mut mean = vec![0.0f64; n];
    let mut scratch = vec![0.0f64; preds.len()];
    for (c, m) in mean.iter_mut().enumerate() {
        for (j, p) in preds.iter().enumerate() {
            scratch[j] = p.probs[c];
        }
        *m = sum_sorted(&mut scratch) / preds.len() as f64;
    }
    let mean = PredictionDistribution { probs: mean };
    let mut divergences = preds
        .iter()
        .map(|p| kl_divergence(p, &mean))
        .collect::<Result<Vec<f64>>>()?;
    Ok(sum_sorted(&mut divergences))
}

/// Task loss plus weighted consistency loss.
#[derive(Debug, Clone, PartialEq)]
pub struct LossBreakdown {
    pub task: f64,
    pub consistency: f64,
    pub lambda: f64,
    pub total: f64,
}

/// Cross-entropy of the first sample's prediction against the label, plus
/// `lambda` times the consistency term.
pub fn total_loss(
    pred1: &PredictionDistribution,
    label: usize,
    cons: f64,
    lambda: f64,
) -> Result<LossBreakdown> {
    if label >= pred1.len() {
        return Err(Error::LabelOutOfRange { label, num_classes: pred1.len() });
    }
    if lambda < 0.0 {
        return Err(Error::InvalidArgument(format!("lambda = {lambda} must be nonnegative")));
    }
    let task = -pred1.probs[label].max(PROB_FLOOR).ln();
    Ok(LossBreakdown { task, consistency: cons, lambda, total: task + lambda * cons })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn softmax_symmetry_and_stability() {
        let d = softmax(&[0.0, 0.0, 0.0]).unwrap();
        for &p in d.probs() {
            assert!((p - 1.0 / 3.0).abs() < 1e-15);
        }
        let d = softmax(&[1000.0, 0.0]).unwrap();
        assert!((d.probs()[0] - 1.0).abs() < 1e-12);
        assert!(d.probs()[1] < 1e-12);
        assert!(softmax(&[]).is_err());
        assert!(softmax(&[f64::NAN]).is_err());
    }

    #[test]
    fn kl_identity_and_closed_form() {
        let p = PredictionDistribution::new(vec![0.2, 0.5, 0.3]).unwrap();
        assert_eq!(kl_divergence(&p, &p).unwrap(), 0.0);

        let one_hot = PredictionDistribution::new(vec![1.0, 0.0]).unwrap();
        let half = PredictionDistribution::new(vec![0.5, 0.5]).unwrap();
        let kl = kl_divergence(&one_hot, &half).unwrap();
        assert!((kl - std::f64::consts::LN_2).abs() < 1e-12);
    }

    #[test]
    fn kl_length_mismatch_is_error() {
        let p = PredictionDistribution::uniform(2);
        let q = PredictionDistribution::uniform(3);
        assert!(kl_divergence(&p, &q).is_err());
    }

    #[test]
    fn consistency_zero_for_identical_and_closed_form_triple() {
        let p = PredictionDistribution::new(vec![0.1, 0.6, 0.3]).unwrap();
        let loss = consistency_loss(&[p.clone(), p.clone(), p.clone()]).unwrap();
        assert_eq!(loss, 0.0);

        let triple = [
            PredictionDistribution::new(vec![1.0, 0.0]).unwrap(),
            PredictionDistribution::new(vec![0.0, 1.0]).unwrap(),
            PredictionDistribution::new(vec![0.5, 0.5]).unwrap(),
        ];
        let loss = consistency_loss(&triple).unwrap();
        assert!((loss - 2.0 * std::f64::consts::LN_2).abs() < 1e-12);
    }

    #[test]
    fn consistency_needs_two_predictions() {
        let p = PredictionDistribution::uniform(3);
        assert!(consistency_loss(&[p]).is_err());
    }

    #[test]
    fn total_loss_arithmetic() {
        let perfect = PredictionDistribution::new(vec![0.0, 1.0]).unwrap();
        let lb = total_loss(&perfect, 1, 0.0, 10.0).unwrap();
        assert!(lb.total.abs() < 1e-12);

        let p = PredictionDistribution::new(vec![0.3, 0.7]).unwrap();
        let lb = total_loss(&p, 0, 123.0, 0.0).unwrap();
        assert_eq!(lb.total, lb.task);

        // lambda=10, task=0.5, cons=0.02 -> total 0.7
        let p_half = PredictionDistribution::new(vec![(-0.5f64).exp(), 1.0 - (-0.5f64).exp()])
            .unwrap();
        let lb = total_loss(&p_half, 0, 0.02, 10.0).unwrap();
        assert!((lb.task - 0.5).abs() < 1e-12);
        assert!((lb.total - 0.7).abs() < 1e-12);
    }

    #[test]
    fn total_loss_label_out_of_range() {
        let p = PredictionDistribution::uniform(3);
        assert!(matches!(total_loss(&p, 3, 0.0, 1.0), Err(Error::LabelOutOfRange { .. })));
    }
}
