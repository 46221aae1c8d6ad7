//! Central finite differences, used as the independent oracle for every
//! analytic gradient in the crate.

use crate::error::{CmstError, Result};
use crate::nn::mlp::{MlpNetwork, NetGrads};
use crate::scalar::Scalar;

/// Floor on the denominator of [`relative_error`], per unit of loss
/// magnitude. Gradients smaller than this are compared absolutely: a central
/// difference cannot resolve them from rounding noise.
pub const REL_ERR_FLOOR: f64 = 1e-6;

/// `(loss(θ+eps) − loss(θ−eps)) / (2·eps)` for every scalar parameter.
pub fn finite_diff_grad<T, F>(mut loss_fn: F, net: &MlpNetwork<T>, eps: T) -> Result<NetGrads<T>>
where
    T: Scalar,
    F: FnMut(&MlpNetwork<T>) -> Result<T>,
{
    if eps <= T::zero() {
        return Err(CmstError::Input("finite-difference eps must be positive".into()));
    }
    let mut probe = net.clone();
    let mut flat = net.flat_params();
    let mut grads = Vec::with_capacity(flat.len());
    for i in 0..flat.len() {
        let orig = flat[i];
        flat[i] = orig + eps;
        probe.set_flat_params(&flat)?;
        let up = checked(loss_fn(&probe)?)?;
        flat[i] = orig - eps;
        probe.set_flat_params(&flat)?;
        let down = checked(loss_fn(&probe)?)?;
        flat[i] = orig;
        grads.push((up - down) / (eps + eps));
    }
    Ok(unflatten(net, grads))
}

/// A loss evaluation together with the arguments of every non-smooth
/// operation it passed through (ReLU pre-activations, hinge margins, absolute
/// value arguments, clamp distances). Signs of these arguments identify the
/// smooth piece the loss is on.
#[derive(Debug, Clone)]
pub struct Probe<T> {
    pub loss: T,
    pub kinks: Vec<T>,
}

/// Finite-difference estimate over a flat parameter vector, skipping entries
/// where the estimate would straddle a kink: either some kink argument lies
/// within `kink_tol` of zero at θ, or some kink argument changes sign between
/// θ−eps and θ+eps. Skipped entries are `None`.
pub fn finite_diff_masked<T, F>(mut probe_fn: F, theta: &[T], eps: T, kink_tol: T) -> Result<Vec<Option<T>>>
where
    T: Scalar,
    F: FnMut(&[T]) -> Result<Probe<T>>,
{
    if eps <= T::zero() {
        return Err(CmstError::Input("finite-difference eps must be positive".into()));
    }
    let base = probe_fn(theta)?;
    checked(base.loss)?;
    let near_kink = base.kinks.iter().any(|k| k.abs() < kink_tol);
    let mut x = theta.to_vec();
    let mut out = Vec::with_capacity(theta.len());
    for i in 0..theta.len() {
        let orig = x[i];
        x[i] = orig + eps;
        let up = probe_fn(&x)?;
        x[i] = orig - eps;
        let down = probe_fn(&x)?;
        x[i] = orig;
        let crosses = |p: &Probe<T>| {
            p.kinks.len() != base.kinks.len()
                || p.kinks
                    .iter()
                    .zip(&base.kinks)
                    .any(|(a, b)| (*a > T::zero()) != (*b > T::zero()))
        };
        if near_kink || crosses(&up) || crosses(&down) {
            out.push(None);
        } else {
            out.push(Some((checked(up.loss)? - checked(down.loss)?) / (eps + eps)));
        }
    }
    Ok(out)
}

/// `|a − n| / max(|a|, |n|, REL_ERR_FLOOR · max(1, |loss|))`.
pub fn relative_error(analytic: f64, numeric: f64, loss: f64) -> f64 {
    let denom = analytic.abs().max(numeric.abs()).max(REL_ERR_FLOOR * loss.abs().max(1.0));
    (analytic - numeric).abs() / denom
}

fn checked<T: Scalar>(v: T) -> Result<T> {
    if v.is_finite() {
        Ok(v)
    } else {
        Err(CmstError::Numeric(format!("loss evaluated to {v}")))
    }
}

fn unflatten<T: Scalar>(net: &MlpNetwork<T>, flat: Vec<T>) -> NetGrads<T> {
    let mut offset = 0;
    let tensors = net
        .params()
        .iter()
        .map(|p| {
            let t = flat[offset..offset + p.len()].to_vec();
            offset += p.len();
            t
        })
        .collect();
    NetGrads { tensors }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::layer::Activation;
    use crate::nn::matrix::Matrix;
    use crate::nn::rng::Rng;

    #[test]
    fn quadratic_and_constant() {
        let mut net = MlpNetwork::<f64>::new(&[3, 2], Activation::Identity, Activation::Identity).unwrap();
        net.init_params(&mut Rng::stream(2, "q"));
        let g = finite_diff_grad(
            |n| Ok(n.flat_params().iter().map(|x| x * x).sum::<f64>() / 2.0),
            &net,
            1e-5,
        )
        .unwrap();
        for (a, b) in g.iter().zip(net.flat_params()) {
            assert!((a - b).abs() < 1e-9);
        }
        let z = finite_diff_grad(|_| Ok(3.0), &net, 1e-5).unwrap();
        assert!(z.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn rejects_bad_eps_and_nan() {
        let net = MlpNetwork::<f64>::new(&[1, 1], Activation::Identity, Activation::Identity).unwrap();
        assert!(finite_diff_grad(|_| Ok(0.0), &net, 0.0).is_err());
        assert!(matches!(
            finite_diff_grad(|_| Ok(f64::NAN), &net, 1e-5),
            Err(CmstError::Numeric(_))
        ));
    }

    #[test]
    fn backward_matches_finite_differences() {
        let mut rng = Rng::stream(17, "twolayer");
        let mut net = MlpNetwork::<f64>::new(&[4, 6, 3], Activation::Relu, Activation::Sigmoid).unwrap();
        net.init_params(&mut rng);
        let x = Matrix::from_vec(3, 4, (0..12).map(|_| rng.normal()).collect()).unwrap();
        let up = Matrix::from_vec(3, 3, (0..9).map(|_| rng.normal()).collect()).unwrap();
        let loss = |n: &MlpNetwork<f64>| -> Result<f64> {
            let y = n.predict(&x)?;
            Ok(y.data().iter().zip(up.data()).map(|(a, b)| a * b).sum())
        };
        net.forward(&x).unwrap();
        let (analytic, _) = net.backward(&up).unwrap();
        let numeric = finite_diff_grad(loss, &net, 1e-5).unwrap();
        for (a, n) in analytic.iter().zip(numeric.iter()) {
            assert!(relative_error(*a, *n, loss(&net).unwrap()) <= 1e-4, "{a} vs {n}");
        }
    }

    #[test]
    fn masked_skips_kinks() {
        // |x| at x = 0 is skipped, elsewhere the slope is ±1
        let probe = |x: &[f64]| -> Result<Probe<f64>> {
            Ok(Probe {
                loss: x[0].abs() + x[1].abs(),
                kinks: vec![x[0], x[1]],
            })
        };
        let g = finite_diff_masked(probe, &[0.5, -2.0], 1e-5, 1e-6).unwrap();
        assert!((g[0].unwrap() - 1.0).abs() < 1e-9);
        assert!((g[1].unwrap() + 1.0).abs() < 1e-9);
        let g = finite_diff_masked(probe, &[1e-7, 1.0], 1e-5, 1e-6).unwrap();
        assert!(g.iter().all(Option::is_none));
    }
}
