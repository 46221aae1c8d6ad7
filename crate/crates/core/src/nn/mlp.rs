use crate::error::{CmstError, Result};
use crate::nn::layer::{Activation, DenseLayer};
use crate::nn::matrix::Matrix;
use crate::nn::rng::Rng;
use crate::scalar::Scalar;

/// Sequential stack of dense layers.
#[derive(Debug, Clone, PartialEq)]
pub struct MlpNetwork<T> {
    layers: Vec<DenseLayer<T>>,
}

/// Parameter gradients in the same flat tensor order as
/// [`MlpNetwork::params`]: layer 0 weights, layer 0 bias, layer 1 weights, ...
#[derive(Debug, Clone, PartialEq)]
pub struct NetGrads<T> {
    pub tensors: Vec<Vec<T>>,
}

impl<T: Scalar> NetGrads<T> {
    pub fn zeros_like(net: &MlpNetwork<T>) -> Self {
        NetGrads {
            tensors: net.params().iter().map(|p| vec![T::zero(); p.len()]).collect(),
        }
    }

    pub fn add_assign(&mut self, other: &Self) {
        for (a, b) in self.tensors.iter_mut().zip(&other.tensors) {
            for (x, &y) in a.iter_mut().zip(b) {
                *x += y;
            }
        }
    }

    pub fn scale(&mut self, k: T) {
        for t in &mut self.tensors {
            for x in t {
                *x *= k;
            }
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = &T> {
        self.tensors.iter().flatten()
    }

    pub fn len(&self) -> usize {
        self.tensors.iter().map(Vec::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn is_finite(&self) -> bool {
        self.iter().all(|x| x.is_finite())
    }
}

impl<T: Scalar> MlpNetwork<T> {
    /// Zero-initialized network with layer sizes `dims[0] → dims[1] → …`.
    /// Hidden layers use `hidden`, the last layer uses `output`.
    pub fn new(dims: &[usize], hidden: Activation, output: Activation) -> Result<Self> {
        if dims.len() < 2 {
            return Err(CmstError::Input("network needs at least input and output dims".into()));
        }
        if dims.contains(&0) {
            return Err(CmstError::Input(format!("zero-width layer in {dims:?}")));
        }
        let n = dims.len() - 1;
        let layers = (0..n)
            .map(|i| {
                let act = if i + 1 == n { output } else { hidden };
                DenseLayer::zeros(dims[i], dims[i + 1], act)
            })
            .collect();
        Ok(MlpNetwork { layers })
    }

    pub fn from_layers(layers: Vec<DenseLayer<T>>) -> Result<Self> {
        if layers.is_empty() {
            return Err(CmstError::Input("network needs at least one layer".into()));
        }
        for w in layers.windows(2) {
            if w[0].output_dim() != w[1].input_dim() {
                return Err(CmstError::shape(
                    "MlpNetwork::from_layers",
                    w[0].output_dim(),
                    w[1].input_dim(),
                ));
            }
        }
        Ok(MlpNetwork { layers })
    }

    pub fn layers(&self) -> &[DenseLayer<T>] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [DenseLayer<T>] {
        &mut self.layers
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].input_dim()
    }

    pub fn output_dim(&self) -> usize {
        self.layers[self.layers.len() - 1].output_dim()
    }

    /// Layer widths, input first.
    pub fn dims(&self) -> Vec<usize> {
        let mut d = vec![self.input_dim()];
        d.extend(self.layers.iter().map(DenseLayer::output_dim));
        d
    }

    /// He-normal weights (std `sqrt(2 / fan_in)`) and zero biases.
    pub fn init_params(&mut self, rng: &mut Rng) {
        for layer in &mut self.layers {
            let std = (2.0 / layer.input_dim() as f64).sqrt();
            for w in layer.weights.data_mut() {
                *w = T::lit(rng.normal() * std);
            }
            layer.bias.iter_mut().for_each(|b| *b = T::zero());
        }
    }

    /// Forward pass that caches per-layer state for [`MlpNetwork::backward`].
    pub fn forward(&mut self, x: &Matrix<T>) -> Result<Matrix<T>> {
        if x.cols() != self.input_dim() {
            return Err(CmstError::shape("MlpNetwork::forward", self.input_dim(), x.cols()));
        }
        let mut h = x.clone();
        for layer in &mut self.layers {
            h = layer.forward(&h)?;
        }
        Ok(h)
    }

    /// Forward pass without touching the cache.
    pub fn predict(&self, x: &Matrix<T>) -> Result<Matrix<T>> {
        if x.cols() != self.input_dim() {
            return Err(CmstError::shape("MlpNetwork::predict", self.input_dim(), x.cols()));
        }
        let mut h = x.clone();
        for layer in &self.layers {
            h = layer.predict(&h)?;
        }
        Ok(h)
    }

    /// Gradients of `Σ upstream ⊙ output` with respect to all parameters and
    /// the input of the last cached forward pass.
    pub fn backward(&self, upstream: &Matrix<T>) -> Result<(NetGrads<T>, Matrix<T>)> {
        let mut grad = upstream.clone();
        let mut per_layer = Vec::with_capacity(self.layers.len());
        for layer in self.layers.iter().rev() {
            let (g, input_grad) = layer.backward(&grad)?;
            per_layer.push(g);
            grad = input_grad;
        }
        per_layer.reverse();
        let mut tensors = Vec::with_capacity(2 * per_layer.len());
        for g in per_layer {
            tensors.push(g.weights.into_vec());
            tensors.push(g.bias);
        }
        Ok((NetGrads { tensors }, grad))
    }

    pub fn clear_cache(&mut self) {
        self.layers.iter_mut().for_each(DenseLayer::clear_cache);
    }

    pub fn params(&self) -> Vec<&[T]> {
        self.layers
            .iter()
            .flat_map(|l| [l.weights.data(), l.bias.as_slice()])
            .collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut [T]> {
        let mut out = Vec::with_capacity(2 * self.layers.len());
        for l in &mut self.layers {
            let DenseLayer { weights, bias, .. } = l;
            out.push(weights.data_mut());
            out.push(bias.as_mut_slice());
        }
        out
    }

    pub fn num_params(&self) -> usize {
        self.params().iter().map(|p| p.len()).sum()
    }

    /// Flat copy of all parameters.
    pub fn flat_params(&self) -> Vec<T> {
        self.params().into_iter().flatten().copied().collect()
    }

    pub fn set_flat_params(&mut self, flat: &[T]) -> Result<()> {
        if flat.len() != self.num_params() {
            return Err(CmstError::shape("MlpNetwork::set_flat_params", self.num_params(), flat.len()));
        }
        let mut offset = 0;
        for p in self.params_mut() {
            p.copy_from_slice(&flat[offset..offset + p.len()]);
            offset += p.len();
        }
        Ok(())
    }

    pub fn is_finite(&self) -> bool {
        self.params().iter().all(|p| p.iter().all(|x| x.is_finite()))
    }

    pub fn cast<U: Scalar>(&self) -> MlpNetwork<U> {
        MlpNetwork {
            layers: self
                .layers
                .iter()
                .map(|l| {
                    DenseLayer::new(
                        l.weights.cast(),
                        l.bias.iter().map(|b| U::lit(b.as_f64())).collect(),
                        l.activation,
                    )
                    .expect("cast preserves shapes")
                })
                .collect(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn forward_examples() {
        let identity = MlpNetwork::from_layers(vec![DenseLayer::new(
            Matrix::<f64>::identity(3),
            vec![0.0; 3],
            Activation::Identity,
        )
        .unwrap()])
        .unwrap();
        let x = Matrix::row_vector(&[-1.0, 0.0, 2.0]);
        assert_eq!(identity.predict(&x).unwrap(), x);

        let relu = MlpNetwork::from_layers(vec![DenseLayer::new(
            Matrix::<f64>::identity(3),
            vec![0.0; 3],
            Activation::Relu,
        )
        .unwrap()])
        .unwrap();
        assert_eq!(relu.predict(&x).unwrap().data(), &[0.0, 0.0, 2.0]);

        let sig = MlpNetwork::<f64>::new(&[3, 2], Activation::Relu, Activation::Sigmoid).unwrap();
        assert!(sig.predict(&x).unwrap().data().iter().all(|&v| v == 0.5));
    }

    #[test]
    fn dimension_mismatch_is_shape_error() {
        let mut net = MlpNetwork::<f64>::new(&[3, 4, 2], Activation::Relu, Activation::Identity).unwrap();
        assert!(matches!(
            net.forward(&Matrix::zeros(2, 5)),
            Err(CmstError::Shape { .. })
        ));
        let bad = vec![DenseLayer::<f64>::zeros(3, 4, Activation::Relu), DenseLayer::zeros(5, 2, Activation::Relu)];
        assert!(MlpNetwork::from_layers(bad).is_err());
    }

    #[test]
    fn init_is_deterministic_per_stream() {
        let mut a = MlpNetwork::<f64>::new(&[4, 8, 2], Activation::Relu, Activation::Identity).unwrap();
        let mut b = a.clone();
        let mut c = a.clone();
        a.init_params(&mut Rng::stream(3, "net"));
        b.init_params(&mut Rng::stream(3, "net"));
        c.init_params(&mut Rng::stream(3, "other"));
        assert_eq!(a.flat_params(), b.flat_params());
        assert_ne!(a.flat_params(), c.flat_params());
    }

    #[test]
    fn he_init_std() {
        let mut net = MlpNetwork::<f64>::new(&[1000, 50], Activation::Relu, Activation::Relu).unwrap();
        net.init_params(&mut Rng::stream(11, "he"));
        let w = net.layers()[0].weights.data();
        let n = w.len() as f64;
        let mean = w.iter().sum::<f64>() / n;
        let std = (w.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n).sqrt();
        let target = (2.0_f64 / 1000.0).sqrt();
        assert!((std - target).abs() < 0.2 * target, "std {std} vs {target}");
        assert!(net.layers()[0].bias.iter().all(|&b| b == 0.0));
    }

    #[test]
    fn forward_is_pure() {
        let mut net = MlpNetwork::<f64>::new(&[3, 5, 2], Activation::Relu, Activation::Sigmoid).unwrap();
        net.init_params(&mut Rng::stream(1, "p"));
        let x = Matrix::from_vec(2, 3, vec![0.1, -0.2, 0.3, 1.0, 0.5, -1.5]).unwrap();
        let a = net.forward(&x).unwrap();
        let b = net.forward(&x).unwrap();
        assert_eq!(a, b);
        assert_eq!(a, net.predict(&x).unwrap());
    }

    #[test]
    fn works_in_single_precision() {
        let mut net = MlpNetwork::<f64>::new(&[3, 4, 2], Activation::Relu, Activation::Identity).unwrap();
        net.init_params(&mut Rng::stream(5, "cast"));
        let x = Matrix::from_vec(1, 3, vec![0.5, -0.25, 1.0]).unwrap();
        let y64 = net.predict(&x).unwrap();
        let y32 = net.cast::<f32>().predict(&x.cast()).unwrap();
        for (a, b) in y64.data().iter().zip(y32.data()) {
            assert!((a - f64::from(*b)).abs() < 1e-5);
        }
    }
}
