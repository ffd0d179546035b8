//! Sentiment-intensity metrics.

use crate::error::{Error, Result};

/// How a prediction of exactly zero is classified by [`acc2_with`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ZeroPrediction {
    /// `ŷ > 0` is positive; `ŷ = 0` counts as negative.
    #[default]
    Negative,
    /// `ŷ ≥ 0` is positive.
    Positive,
}

fn check_aligned(preds: &[f64], labels: &[f64]) -> Result<()> {
    if preds.len() != labels.len() {
        return Err(Error::Metric(format!(
            "{} predictions for {} labels",
            preds.len(),
            labels.len()
        )));
    }
    if preds.is_empty() {
        return Err(Error::Metric("no samples".into()));
    }
    Ok(())
}

/// Binary accuracy over non-neutral samples (`y ≠ 0`), strict `ŷ > 0`.
pub fn acc2(preds: &[f64], labels: &[f64]) -> Result<f64> {
    acc2_with(preds, labels, ZeroPrediction::Negative)
}

pub fn acc2_with(preds: &[f64], labels: &[f64], zero: ZeroPrediction) -> Result<f64> {
    check_aligned(preds, labels)?;
    let mut n = 0usize;
    let mut correct = 0usize;
    for (&p, &y) in preds.iter().zip(labels) {
        if y == 0.0 {
            continue;
        }
        n += 1;
        let positive = match zero {
            ZeroPrediction::Negative => p > 0.0,
            ZeroPrediction::Positive => p >= 0.0,
        };
        if positive == (y > 0.0) {
            correct += 1;
        }
    }
    if n == 0 {
        return Err(Error::Metric("binary accuracy undefined: every label is neutral".into()));
    }
    Ok(correct as f64 / n as f64)
}

/// Round half away from zero, then clip to `[-3, 3]`.
pub fn intensity_class(x: f64) -> i32 {
    x.round().clamp(-3.0, 3.0) as i32
}

/// Seven-class accuracy over all samples.
pub fn acc7(preds: &[f64], labels: &[f64]) -> Result<f64> {
    check_aligned(preds, labels)?;
    let correct = preds
        .iter()
        .zip(labels)
        .filter(|(&p, &y)| intensity_class(p) == intensity_class(y))
        .count();
    Ok(correct as f64 / preds.len() as f64)
}

pub fn mae(preds: &[f64], labels: &[f64]) -> Result<f64> {
    check_aligned(preds, labels)?;
    Ok(preds.iter().zip(labels).map(|(p, y)| (p - y).abs()).sum::<f64>() / preds.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn acc2_examples() {
        assert_eq!(acc2(&[0.5, -0.2, 1.0], &[1.0, -1.0, 0.0]).unwrap(), 1.0);
        assert_eq!(acc2(&[-1.0], &[2.0]).unwrap(), 0.0);
        assert!(acc2(&[1.0, 2.0], &[0.0, 0.0]).is_err());
        assert!(acc2(&[1.0], &[1.0, 2.0]).is_err());
    }

    #[test]
    fn zero_prediction_flag() {
        assert_eq!(acc2(&[0.0], &[1.0]).unwrap(), 0.0);
        assert_eq!(acc2_with(&[0.0], &[1.0], ZeroPrediction::Positive).unwrap(), 1.0);
    }

    #[test]
    fn acc7_binning() {
        assert_eq!(intensity_class(2.4), 2);
        assert_eq!(intensity_class(3.7), 3);
        assert_eq!(intensity_class(-2.5), -3);
        assert_eq!(intensity_class(0.5), 1);
        assert_eq!(intensity_class(-0.49), 0);
        assert_eq!(acc7(&[2.4, 3.7], &[2.0, 3.0]).unwrap(), 1.0);
    }

    #[test]
    fn mae_direct() {
        assert_eq!(mae(&[1.0, -1.0], &[0.0, 0.0]).unwrap(), 1.0);
    }
}
