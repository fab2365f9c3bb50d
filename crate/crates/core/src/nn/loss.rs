//! Soft Jaccard index, binary cross-entropy and the combined training loss.

use super::layers::sigmoid_scalar;
use super::scalar::Scalar;
use super::tensor::Tensor4;
use crate::error::{Error, Result};

/// Predictions are clamped to `[BCE_CLAMP, 1 - BCE_CLAMP]` inside the log.
pub const BCE_CLAMP: f64 = 1e-7;

fn check_pair<T: Scalar>(pred: &Tensor4<T>, target: &Tensor4<T>) -> Result<()> {
    if !pred.same_shape(target) {
        return Err(Error::shape(format!(
            "prediction {:?} vs target {:?}",
            pred.shape(),
            target.shape()
        )));
    }
    Ok(())
}

fn jaccard_sums(pred: &[f64], target: &[f64]) -> (f64, f64) {
    let (mut inter, mut total) = (0.0, 0.0);
    for (&p, &t) in pred.iter().zip(target) {
        inter += p * t;
        total += p + t;
    }
    (inter, total - inter)
}

/// `sum(p t) / (sum p + sum t - sum(p t))`, or 1 when both sums vanish.
pub fn soft_jaccard<T: Scalar>(pred: &Tensor4<T>, target: &Tensor4<T>) -> Result<f64> {
    check_pair(pred, target)?;
    Ok(soft_jaccard_slices(
        &pred.data.iter().map(|v| v.f64()).collect::<Vec<_>>(),
        &target.data.iter().map(|v| v.f64()).collect::<Vec<_>>(),
    ))
}

pub fn soft_jaccard_slices(pred: &[f64], target: &[f64]) -> f64 {
    let (inter, union) = jaccard_sums(pred, target);
    if union <= 0.0 {
        1.0
    } else {
        inter / union
    }
}

/// `d J / d pred` for the soft Jaccard index.
pub fn soft_jaccard_grad<T: Scalar>(pred: &Tensor4<T>, target: &Tensor4<T>) -> Result<Tensor4<T>> {
    check_pair(pred, target)?;
    let p: Vec<f64> = pred.data.iter().map(|v| v.f64()).collect();
    let t: Vec<f64> = target.data.iter().map(|v| v.f64()).collect();
    let (inter, union) = jaccard_sums(&p, &t);
    let mut g = pred.clone();
    if union <= 0.0 {
        g.data.iter_mut().for_each(|v| *v = T::zero());
        return Ok(g);
    }
    let u2 = union * union;
    for (o, &ti) in g.data.iter_mut().zip(&t) {
        // dI/dp = t, dU/dp = 1 - t
        *o = T::of((ti * union - inter * (1.0 - ti)) / u2);
    }
    Ok(g)
}

/// Mean binary cross-entropy and its gradient with respect to `pred`.
pub fn bce_loss<T: Scalar>(pred: &Tensor4<T>, target: &Tensor4<T>) -> Result<(f64, Tensor4<T>)> {
    check_pair(pred, target)?;
    let n = pred.data.len() as f64;
    let mut loss = 0.0;
    let mut grad = pred.clone();
    for (g, (&p, &t)) in grad.data.iter_mut().zip(pred.data.iter().zip(&target.data)) {
        let (raw, t) = (p.f64(), t.f64());
        let p = raw.clamp(BCE_CLAMP, 1.0 - BCE_CLAMP);
        loss -= t * p.ln() + (1.0 - t) * (1.0 - p).ln();
        *g = if raw == p {
            T::of((p - t) / (p * (1.0 - p)) / n)
        } else {
            T::zero()
        };
    }
    Ok((loss / n, grad))
}

/// Result of the combined training objective.
#[derive(Debug, Clone)]
pub struct LossOutput<T> {
    pub loss: f64,
    pub bce: f64,
    pub jaccard: f64,
    pub probabilities: Tensor4<T>,
    /// Gradient with respect to the logits.
    pub dlogits: Tensor4<T>,
}

/// `BCE(sigmoid(z), t) + (1 - J(sigmoid(z), t))`, with its gradient in `z`.
///
/// The BCE part of the gradient uses the unclamped closed form
/// `(p - t) / n`, which stays finite where the sigmoid saturates.
pub fn segmentation_loss<T: Scalar>(logits: &Tensor4<T>, target: &Tensor4<T>) -> Result<LossOutput<T>> {
    check_pair(logits, target)?;
    let probs = logits.map(sigmoid_scalar);
    let (bce, _) = bce_loss(&probs, target)?;
    let jaccard = soft_jaccard(&probs, target)?;
    let dj = soft_jaccard_grad(&probs, target)?;
    let n = logits.data.len() as f64;
    let mut dz = probs.clone();
    for ((g, &p), (&t, &dji)) in dz
        .data
        .iter_mut()
        .zip(&probs.data)
        .zip(target.data.iter().zip(&dj.data))
    {
        let (p, t) = (p.f64(), t.f64());
        *g = T::of((p - t) / n - dji.f64() * p * (1.0 - p));
    }
    Ok(LossOutput {
        loss: bce + 1.0 - jaccard,
        bce,
        jaccard,
        probabilities: probs,
        dlogits: dz,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn v(vals: &[f64]) -> Tensor4<f64> {
        Tensor4::from_vec(1, 1, 1, vals.len(), vals.to_vec()).unwrap()
    }

    #[test]
    fn jaccard_examples() {
        let a = v(&[1.0, 1.0, 0.0, 0.0]);
        assert_eq!(soft_jaccard(&a, &a).unwrap(), 1.0);
        let b = v(&[0.0, 0.0, 1.0, 1.0]);
        assert_eq!(soft_jaccard(&a, &b).unwrap(), 0.0);
        let c = v(&[0.0, 1.0, 1.0, 0.0]);
        assert!((soft_jaccard(&a, &c).unwrap() - 1.0 / 3.0).abs() < 1e-15);
        let z = v(&[0.0; 4]);
        assert_eq!(soft_jaccard(&z, &z).unwrap(), 1.0);
        assert!(soft_jaccard(&a, &v(&[0.0])).is_err());
    }

    #[test]
    fn bce_examples() {
        let t = v(&[0.0, 1.0, 1.0, 0.0]);
        let (loss, _) = bce_loss(&t, &t).unwrap();
        // -ln(1 - 1e-7) at every element
        assert!((loss - 1.000_000_05e-7).abs() < 1e-12, "{loss}");
        assert!(loss <= 1.6e-6);
        let half = v(&[0.5; 4]);
        let (loss, _) = bce_loss(&half, &t).unwrap();
        assert!((loss - std::f64::consts::LN_2).abs() < 1e-12);
    }
}
