use serde::{Deserialize, Serialize};

use crate::error::{CmstError, Result};
use crate::nn::matrix::Matrix;
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Sigmoid,
    Identity,
}

impl Activation {
    #[inline]
    pub fn apply<T: Scalar>(self, x: T) -> T {
        match self {
            Activation::Relu => x.max(T::zero()),
            Activation::Sigmoid => sigmoid(x),
            Activation::Identity => x,
        }
    }

    /// Derivative evaluated at pre-activation `x`. ReLU uses 0 at the kink.
    #[inline]
    pub fn derivative<T: Scalar>(self, x: T) -> T {
        match self {
            Activation::Relu => {
                if x > T::zero() {
                    T::one()
                } else {
                    T::zero()
                }
            }
            Activation::Sigmoid => {
                let s = sigmoid(x);
                s * (T::one() - s)
            }
            Activation::Identity => T::one(),
        }
    }
}

#[inline]
pub fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

#[derive(Debug, Clone, PartialEq)]
struct LayerCache<T> {
    input: Matrix<T>,
    pre: Matrix<T>,
}

/// Fully connected layer `act(x·Wᵀ + b)` with weights stored `(out × in)`.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseLayer<T> {
    pub weights: Matrix<T>,
    pub bias: Vec<T>,
    pub activation: Activation,
    cache: Option<LayerCache<T>>,
}

/// Gradients for one layer, shaped like its parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerGrads<T> {
    pub weights: Matrix<T>,
    pub bias: Vec<T>,
}

impl<T: Scalar> DenseLayer<T> {
    pub fn zeros(input: usize, output: usize, activation: Activation) -> Self {
        DenseLayer {
            weights: Matrix::zeros(output, input),
            bias: vec![T::zero(); output],
            activation,
            cache: None,
        }
    }

    pub fn new(weights: Matrix<T>, bias: Vec<T>, activation: Activation) -> Result<Self> {
        if bias.len() != weights.rows() {
            return Err(CmstError::shape("DenseLayer::new", weights.rows(), bias.len()));
        }
        Ok(DenseLayer {
            weights,
            bias,
            activation,
            cache: None,
        })
    }

    pub fn input_dim(&self) -> usize {
        self.weights.cols()
    }

    pub fn output_dim(&self) -> usize {
        self.weights.rows()
    }

    fn pre_activation(&self, x: &Matrix<T>) -> Result<Matrix<T>> {
        if x.cols() != self.input_dim() {
            return Err(CmstError::shape("DenseLayer::forward", self.input_dim(), x.cols()));
        }
        let mut pre = x.matmul_transposed(&self.weights)?;
        for r in 0..pre.rows() {
            for (p, &b) in pre.row_mut(r).iter_mut().zip(&self.bias) {
                *p += b;
            }
        }
        Ok(pre)
    }

    pub fn forward(&mut self, x: &Matrix<T>) -> Result<Matrix<T>> {
        let pre = self.pre_activation(x)?;
        let act = self.activation;
        let out = pre.map(|v| act.apply(v));
        self.cache = Some(LayerCache {
            input: x.clone(),
            pre,
        });
        Ok(out)
    }

    pub fn predict(&self, x: &Matrix<T>) -> Result<Matrix<T>> {
        let act = self.activation;
        Ok(self.pre_activation(x)?.map(|v| act.apply(v)))
    }

    /// Pre-activations from the last cached forward pass.
    pub fn cached_pre_activation(&self) -> Option<&Matrix<T>> {
        self.cache.as_ref().map(|c| &c.pre)
    }

    pub fn backward(&self, upstream: &Matrix<T>) -> Result<(LayerGrads<T>, Matrix<T>)> {
        let cache = self
            .cache
            .as_ref()
            .ok_or_else(|| CmstError::State("backward called without a preceding forward".into()))?;
        if upstream.shape() != cache.pre.shape() {
            return Err(CmstError::shape(
                "DenseLayer::backward",
                format!("{:?}", cache.pre.shape()),
                format!("{:?}", upstream.shape()),
            ));
        }
        let act = self.activation;
        let mut delta = upstream.clone();
        for (d, &p) in delta.data_mut().iter_mut().zip(cache.pre.data()) {
            *d *= act.derivative(p);
        }
        let weights = delta.transpose_matmul(&cache.input)?;
        let mut bias = vec![T::zero(); self.output_dim()];
        for row in delta.iter_rows() {
            for (b, &d) in bias.iter_mut().zip(row) {
                *b += d;
            }
        }
        let input_grad = delta.matmul(&self.weights)?;
        Ok((LayerGrads { weights, bias }, input_grad))
    }

    pub fn clear_cache(&mut self) {
        self.cache = None;
    }

    pub fn has_cache(&self) -> bool {
        self.cache.is_some()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_layer_gradients() {
        let mut layer = DenseLayer::new(Matrix::<f64>::identity(2), vec![0.0; 2], Activation::Identity).unwrap();
        let x = Matrix::from_vec(3, 2, vec![1., 2., 3., 4., 5., 6.]).unwrap();
        assert_eq!(layer.forward(&x).unwrap(), x);
        let (g, input_grad) = layer.backward(&Matrix::filled(3, 2, 1.0)).unwrap();
        // dW[o][i] = Σ_b x[b][i]
        assert_eq!(g.weights.data(), &[9., 12., 9., 12.]);
        assert_eq!(g.bias, vec![3.0, 3.0]);
        assert_eq!(input_grad, Matrix::filled(3, 2, 1.0));
    }

    #[test]
    fn dead_relu_blocks_gradient() {
        let mut layer = DenseLayer::new(Matrix::<f64>::identity(3), vec![0.0; 3], Activation::Relu).unwrap();
        let x = Matrix::row_vector(&[-1.0, -2.0, -0.5]);
        layer.forward(&x).unwrap();
        let (_, input_grad) = layer.backward(&Matrix::filled(1, 3, 1.0)).unwrap();
        assert!(input_grad.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn backward_without_forward_is_state_error() {
        let layer = DenseLayer::<f64>::zeros(2, 2, Activation::Relu);
        assert!(matches!(
            layer.backward(&Matrix::zeros(1, 2)),
            Err(CmstError::State(_))
        ));
    }

    #[test]
    fn sigmoid_is_stable() {
        assert_eq!(sigmoid(0.0_f64), 0.5);
        assert!(sigmoid(-800.0_f64).is_finite());
        assert_eq!(sigmoid(800.0_f64), 1.0);
    }
}
