use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::Scalar;

/// Adversarial mixture over groups, kept on the probability simplex.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroupWeights {
    q: Vec<f64>,
}

impl GroupWeights {
    pub fn uniform(groups: usize) -> Self {
        assert!(groups > 0, "at least one group");
        Self { q: vec![1.0 / groups as f64; groups] }
    }

    pub fn new(q: Vec<f64>) -> Result<Self> {
        let sum: f64 = q.iter().sum();
        if q.is_empty() || q.iter().any(|&v| !(v >= 0.0) || !v.is_finite()) || (sum - 1.0).abs() > 1e-9 {
            return Err(Error::Config(format!("group weights {q:?} are not on the simplex")));
        }
        Ok(Self { q })
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.q
    }

    pub fn len(&self) -> usize {
        self.q.len()
    }

    pub fn is_empty(&self) -> bool {
        self.q.is_empty()
    }
}

/// Exponentiated-gradient ascent step on the group mixture:
/// `q'_g ∝ q_g · exp(η · L_g)`.
pub fn dro_weight_update(q: &GroupWeights, group_losses: &[f64], eta_q: f64) -> Result<GroupWeights> {
    if group_losses.len() != q.len() {
        return Err(Error::Shape {
            expected: format!("{} group losses", q.len()),
            got: group_losses.len().to_string(),
        });
    }
    if let Some(l) = group_losses.iter().find(|l| !l.is_finite()) {
        return Err(Error::NonFinite(format!("group loss {l}")));
    }
    if !eta_q.is_finite() || eta_q < 0.0 {
        return Err(Error::Config(format!("DRO step size {eta_q} must be finite and non-negative")));
    }
    // shifting by the max loss leaves the normalised result unchanged and keeps exp() finite
    let top = group_losses.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let raw: Vec<f64> = q.q.iter().zip(group_losses).map(|(&w, &l)| w * (eta_q * (l - top)).exp()).collect();
    let z: f64 = raw.iter().sum();
    if !(z > 0.0) {
        return Err(Error::NonFinite("group weights collapsed to zero".into()));
    }
    Ok(GroupWeights { q: raw.into_iter().map(|v| v / z).collect() })
}

/// Numerically stable binary cross-entropy on a logit.
pub fn bce_with_logit<T: Scalar>(z: T, y: T) -> T {
    z.max(T::zero()) - z * y + (-z.abs()).exp().ln_1p()
}

/// `Σ_g q_g · mean_{i∈g} BCE(z_i, y_i)` and its gradient with respect to the
/// logits. Groups with no samples contribute nothing.
pub fn weighted_group_loss<T: Scalar>(logits: &[T], targets: &[T], groups: &[usize], q: &[f64]) -> (T, Vec<T>) {
    let mut counts = vec![0usize; q.len()];
    for &g in groups {
        counts[g] += 1;
    }
    let mut loss = T::zero();
    let mut dlogits = Vec::with_capacity(logits.len());
    for ((&z, &y), &g) in logits.iter().zip(targets).zip(groups) {
        let w = T::of(q[g] / counts[g] as f64);
        loss = loss + w * bce_with_logit(z, y);
        dlogits.push(w * (crate::nn::sigmoid(z) - y));
    }
    (loss, dlogits)
}

/// Per-group mean BCE over the samples present; absent groups get 0.
pub fn group_mean_losses<T: Scalar>(logits: &[T], targets: &[T], groups: &[usize], n_groups: usize) -> Vec<f64> {
    let mut sum = vec![0.0; n_groups];
    let mut count = vec![0usize; n_groups];
    for ((&z, &y), &g) in logits.iter().zip(targets).zip(groups) {
        sum[g] += bce_with_logit(z, y).to_f64().unwrap();
        count[g] += 1;
    }
    sum.iter().zip(&count).map(|(&s, &c)| if c == 0 { 0.0 } else { s / c as f64 }).collect()
}
