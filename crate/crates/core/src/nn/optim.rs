use serde::{Deserialize, Serialize};

use crate::error::{CmstError, Result};
use crate::nn::mlp::{MlpNetwork, NetGrads};
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum OptimizerKind {
    Sgd,
    Adam { beta1: f64, beta2: f64, epsilon: f64 },
}

impl OptimizerKind {
    pub fn adam_default() -> Self {
        OptimizerKind::Adam {
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OptimizerConfig {
    #[serde(flatten)]
    pub kind: OptimizerKind,
    pub learning_rate: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig {
            kind: OptimizerKind::adam_default(),
            learning_rate: 1e-3,
        }
    }
}

/// Optimizer state for one network. Adam moments mirror the parameter
/// tensors one to one.
#[derive(Debug, Clone, PartialEq)]
pub struct Optimizer<T> {
    pub kind: OptimizerKind,
    pub learning_rate: f64,
    pub step: u64,
    pub first_moment: Vec<Vec<T>>,
    pub second_moment: Vec<Vec<T>>,
}

impl<T: Scalar> Optimizer<T> {
    pub fn new(config: OptimizerConfig, net: &MlpNetwork<T>) -> Self {
        Self::for_shapes(config, &net.params().iter().map(|p| p.len()).collect::<Vec<_>>())
    }

    pub fn for_shapes(config: OptimizerConfig, shapes: &[usize]) -> Self {
        let moments = |kind: &OptimizerKind| match kind {
            OptimizerKind::Sgd => Vec::new(),
            OptimizerKind::Adam { .. } => shapes.iter().map(|&n| vec![T::zero(); n]).collect(),
        };
        Optimizer {
            kind: config.kind,
            learning_rate: config.learning_rate,
            step: 0,
            first_moment: moments(&config.kind),
            second_moment: moments(&config.kind),
        }
    }

    pub fn sgd(learning_rate: f64, net: &MlpNetwork<T>) -> Self {
        Self::new(
            OptimizerConfig {
                kind: OptimizerKind::Sgd,
                learning_rate,
            },
            net,
        )
    }

    pub fn adam(learning_rate: f64, net: &MlpNetwork<T>) -> Self {
        Self::new(
            OptimizerConfig {
                kind: OptimizerKind::adam_default(),
                learning_rate,
            },
            net,
        )
    }

    /// Applies one update to the network's parameters.
    pub fn step(&mut self, net: &mut MlpNetwork<T>, grads: &NetGrads<T>) -> Result<()> {
        self.apply(net.params_mut(), &grads.tensors)
    }

    /// Applies one update to arbitrary parameter tensors.
    pub fn apply(&mut self, params: Vec<&mut [T]>, grads: &[Vec<T>]) -> Result<()> {
        if params.len() != grads.len() {
            return Err(CmstError::shape("Optimizer::apply", params.len(), grads.len()));
        }
        for (i, (p, g)) in params.iter().zip(grads).enumerate() {
            if p.len() != g.len() {
                return Err(CmstError::shape("Optimizer::apply", format!("tensor {i} len {}", p.len()), g.len()));
            }
        }
        self.step += 1;
        let lr = T::lit(self.learning_rate);
        match self.kind {
            OptimizerKind::Sgd => {
                for (p, g) in params.into_iter().zip(grads) {
                    for (x, &dx) in p.iter_mut().zip(g) {
                        *x -= lr * dx;
                    }
                }
            }
            OptimizerKind::Adam { beta1, beta2, epsilon } => {
                if self.first_moment.len() != grads.len() {
                    return Err(CmstError::shape("Optimizer::apply moments", self.first_moment.len(), grads.len()));
                }
                let t = self.step as i32;
                let (b1, b2, eps) = (T::lit(beta1), T::lit(beta2), T::lit(epsilon));
                let c1 = T::one() - b1.powi(t);
                let c2 = T::one() - b2.powi(t);
                for (k, (p, g)) in params.into_iter().zip(grads).enumerate() {
                    let m = &mut self.first_moment[k];
                    let v = &mut self.second_moment[k];
                    for i in 0..p.len() {
                        let gi = g[i];
                        m[i] = b1 * m[i] + (T::one() - b1) * gi;
                        v[i] = b2 * v[i] + (T::one() - b2) * gi * gi;
                        let m_hat = m[i] / c1;
                        let v_hat = v[i] / c2;
                        p[i] -= lr * m_hat / (v_hat.sqrt() + eps);
                    }
                }
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::layer::Activation;

    fn scalar_net(theta: f64) -> MlpNetwork<f64> {
        let mut net = MlpNetwork::new(&[1, 1], Activation::Identity, Activation::Identity).unwrap();
        net.set_flat_params(&[theta, 0.0]).unwrap();
        net
    }

    #[test]
    fn sgd_step() {
        let mut net = scalar_net(1.0);
        let mut opt = Optimizer::sgd(0.1, &net);
        opt.step(&mut net, &NetGrads { tensors: vec![vec![1.0], vec![0.0]] }).unwrap();
        assert!((net.flat_params()[0] - 0.9).abs() < 1e-15);
    }

    #[test]
    fn zero_gradient_leaves_params() {
        for mut opt in [Optimizer::sgd(0.1, &scalar_net(1.0)), Optimizer::adam(0.1, &scalar_net(1.0))] {
            let mut net = scalar_net(1.0);
            let zero = NetGrads::zeros_like(&net);
            opt.step(&mut net, &zero).unwrap();
            assert_eq!(net.flat_params(), vec![1.0, 0.0]);
            assert_eq!(opt.step, 1);
        }
    }

    #[test]
    fn adam_minimizes_parabola() {
        // scalar reference: θ ← θ - lr·m̂/(√v̂+ε) on f(θ)=θ², g=2θ
        let (mut theta, mut m, mut v) = (1.0_f64, 0.0, 0.0);
        for t in 1..=500 {
            let g = 2.0 * theta;
            m = 0.9 * m + 0.1 * g;
            v = 0.999 * v + 0.001 * g * g;
            let mh = m / (1.0 - 0.9_f64.powi(t));
            let vh = v / (1.0 - 0.999_f64.powi(t));
            theta -= 0.01 * mh / (vh.sqrt() + 1e-8);
        }
        assert!(theta.abs() < 0.05);

        let mut net = scalar_net(1.0);
        let mut opt = Optimizer::adam(0.01, &net);
        for _ in 0..500 {
            let th = net.flat_params()[0];
            opt.step(&mut net, &NetGrads { tensors: vec![vec![2.0 * th], vec![0.0]] }).unwrap();
        }
        let got = net.flat_params()[0];
        assert!(got.abs() < 0.05);
        assert!((got - theta).abs() < 1e-12);
    }

    #[test]
    fn shape_mismatch() {
        let mut net = scalar_net(1.0);
        let mut opt = Optimizer::sgd(0.1, &net);
        assert!(opt.step(&mut net, &NetGrads { tensors: vec![vec![1.0, 2.0], vec![0.0]] }).is_err());
    }
}
