use crate::error::{CmstError, Result};
use crate::nn::Matrix;
use crate::scalar::Scalar;

/// Probabilities are clamped into `[PROB_CLAMP, 1 − PROB_CLAMP]` before `ln`.
pub const PROB_CLAMP: f64 = 1e-12;

/// Mean softmax cross-entropy of `logits` against class indices, and its
/// gradient with respect to the logits.
pub fn softmax_cross_entropy<T: Scalar>(logits: &Matrix<T>, labels: &[usize]) -> Result<(T, Matrix<T>)> {
    if labels.len() != logits.rows() {
        return Err(CmstError::shape("softmax_cross_entropy", logits.rows(), labels.len()));
    }
    let c = logits.cols();
    if let Some(&bad) = labels.iter().find(|&&l| l >= c) {
        return Err(CmstError::Input(format!("label {bad} out of range for {c} classes")));
    }
    let n = T::lit(logits.rows().max(1) as f64);
    let mut total = T::zero();
    let mut grad = Matrix::zeros(logits.rows(), c);
    for (r, &label) in labels.iter().enumerate() {
        let row = logits.row(r);
        let max = row.iter().copied().fold(T::neg_infinity(), T::max);
        let sum: T = row.iter().map(|&z| (z - max).exp()).fold(T::zero(), |a, b| a + b);
        let log_z = max + sum.ln();
        total += log_z - row[label];
        let g = grad.row_mut(r);
        for (k, gk) in g.iter_mut().enumerate() {
            let p = (row[k] - log_z).exp();
            let y = if k == label { T::one() } else { T::zero() };
            *gk = (p - y) / n;
        }
    }
    Ok((total / n, grad))
}

/// Binary cross-entropies of the discriminator outputs: image rows against
/// target 1 (`L_V`), text rows against target 0 (`L_T`).
#[derive(Debug, Clone)]
pub struct AdversarialEval<T> {
    pub l_v: T,
    pub l_t: T,
    /// `∂L_V/∂p` for each image output.
    pub grad_v: Vec<T>,
    /// `∂L_T/∂p` for each text output.
    pub grad_t: Vec<T>,
    /// Distances of every output to the clamp bounds.
    pub kinks: Vec<T>,
}

pub fn adversarial_from_probs<T: Scalar>(p_v: &[T], p_t: &[T]) -> AdversarialEval<T> {
    let lo = T::lit(PROB_CLAMP);
    let hi = T::one() - lo;
    let nv = T::lit(p_v.len().max(1) as f64);
    let nt = T::lit(p_t.len().max(1) as f64);
    let mut kinks = Vec::with_capacity(2 * (p_v.len() + p_t.len()));
    let mut l_v = T::zero();
    let mut grad_v = Vec::with_capacity(p_v.len());
    for &p in p_v {
        kinks.extend([p - lo, hi - p]);
        let pc = p.max(lo).min(hi);
        l_v -= pc.ln();
        grad_v.push(if p > lo && p < hi { -T::one() / (pc * nv) } else { T::zero() });
    }
    let mut l_t = T::zero();
    let mut grad_t = Vec::with_capacity(p_t.len());
    for &p in p_t {
        kinks.extend([p - lo, hi - p]);
        let pc = p.max(lo).min(hi);
        l_t -= (T::one() - pc).ln();
        grad_t.push(if p > lo && p < hi { T::one() / ((T::one() - pc) * nt) } else { T::zero() });
    }
    AdversarialEval {
        l_v: l_v / nv,
        l_t: l_t / nt,
        grad_v,
        grad_t,
        kinks,
    }
}
