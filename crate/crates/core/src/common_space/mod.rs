//! The shared embedding space: projection generators, label classifier,
//! modality discriminator, transfer losses and the two adversarial objectives.

pub mod losses;
pub mod transfer;

use serde::{Deserialize, Serialize};

pub use losses::{adversarial_from_probs, softmax_cross_entropy, AdversarialEval, PROB_CLAMP};
pub use transfer::{
    cross_similarity, sample_transfer_triples, transfer_forward, transfer_loss_and_grad, transfer_loss_difference,
    transfer_loss_product, transfer_loss_value, CrossMetric, TermGrads, TransferDirection, TransferEval,
    TransferMode, TransferSettings, TransferTerms, TransferTriple,
};

use crate::error::{CmstError, Result};
use crate::nn::{Activation, Matrix, MlpNetwork};
use crate::scalar::Scalar;

/// Projections `G_V: R^{d_v} → R^{d_s}` and `G_T: R^{d_t} → R^{d_s}`.
#[derive(Debug, Clone, PartialEq)]
pub struct GeneratorPair<T> {
    pub g_v: MlpNetwork<T>,
    pub g_t: MlpNetwork<T>,
}

fn stack(input: usize, hidden: &[usize], output: usize) -> Vec<usize> {
    let mut dims = vec![input];
    dims.extend_from_slice(hidden);
    dims.push(output);
    dims
}

impl<T: Scalar> GeneratorPair<T> {
    pub fn new(d_v: usize, d_t: usize, hidden: &[usize], d_s: usize) -> Result<Self> {
        Ok(GeneratorPair {
            g_v: MlpNetwork::new(&stack(d_v, hidden, d_s), Activation::Relu, Activation::Identity)?,
            g_t: MlpNetwork::new(&stack(d_t, hidden, d_s), Activation::Relu, Activation::Identity)?,
        })
    }

    pub fn from_nets(g_v: MlpNetwork<T>, g_t: MlpNetwork<T>) -> Result<Self> {
        if g_v.output_dim() != g_t.output_dim() {
            return Err(CmstError::shape("GeneratorPair::from_nets", g_v.output_dim(), g_t.output_dim()));
        }
        Ok(GeneratorPair { g_v, g_t })
    }

    pub fn common_dim(&self) -> usize {
        self.g_v.output_dim()
    }

    /// Projects both modalities into the common space without caching.
    pub fn project(&self, v: &Matrix<T>, t: &Matrix<T>) -> Result<(Matrix<T>, Matrix<T>)> {
        Ok((self.g_v.predict(v)?, self.g_t.predict(t)?))
    }
}

/// Softmax classifier over the common space.
#[derive(Debug, Clone, PartialEq)]
pub struct LabelClassifier<T> {
    pub net: MlpNetwork<T>,
}

impl<T: Scalar> LabelClassifier<T> {
    pub fn new(d_s: usize, hidden: &[usize], n_classes: usize) -> Result<Self> {
        Ok(LabelClassifier {
            net: MlpNetwork::new(&stack(d_s, hidden, n_classes), Activation::Relu, Activation::Identity)?,
        })
    }

    pub fn n_classes(&self) -> usize {
        self.net.output_dim()
    }

    /// Mean softmax cross-entropy over the rows of `s`.
    pub fn label_loss(&self, s: &Matrix<T>, labels: &[usize]) -> Result<T> {
        Ok(softmax_cross_entropy(&self.net.predict(s)?, labels)?.0)
    }
}

/// Three dense layers ending in a sigmoid: probability that a common-space
/// vector came from the image modality.
#[derive(Debug, Clone, PartialEq)]
pub struct ModalityDiscriminator<T> {
    pub net: MlpNetwork<T>,
}

impl<T: Scalar> ModalityDiscriminator<T> {
    pub fn new(d_s: usize, hidden: [usize; 2]) -> Result<Self> {
        Self::from_net(MlpNetwork::new(
            &[d_s, hidden[0], hidden[1], 1],
            Activation::Relu,
            Activation::Sigmoid,
        )?)
    }

    pub fn from_net(net: MlpNetwork<T>) -> Result<Self> {
        if net.layers().len() != 3 {
            return Err(CmstError::Input(format!(
                "discriminator must have exactly 3 layers, got {}",
                net.layers().len()
            )));
        }
        if net.output_dim() != 1 || net.layers()[2].activation != Activation::Sigmoid {
            return Err(CmstError::Input("discriminator must end in a single sigmoid unit".into()));
        }
        Ok(ModalityDiscriminator { net })
    }

    /// `(L_V, L_T)`: image rows scored against 1, text rows against 0.
    pub fn adversarial_losses(&self, s_v: &Matrix<T>, s_t: &Matrix<T>) -> Result<(T, T)> {
        let p_v = self.net.predict(s_v)?;
        let p_t = self.net.predict(s_t)?;
        let e = adversarial_from_probs(p_v.data(), p_t.data());
        Ok((e.l_v, e.l_t))
    }
}

/// Component losses measured on one batch.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct ObjectiveParts<T> {
    pub label: T,
    pub sim: T,
    pub l_v: T,
    pub l_t: T,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    pub label: f64,
    pub sim: f64,
    pub adversarial: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            label: 1.0,
            sim: 1.0,
            adversarial: 1.0,
        }
    }
}

/// `L_G = L_lab + L_sim + L_V − L_T` (each term scaled by its weight).
pub fn generator_objective<T: Scalar>(parts: &ObjectiveParts<T>, weights: &LossWeights) -> T {
    T::lit(weights.label) * parts.label
        + T::lit(weights.sim) * parts.sim
        + T::lit(weights.adversarial) * (parts.l_v - parts.l_t)
}

/// `L_D = −L_V + L_T`.
pub fn discriminator_objective<T: Scalar>(parts: &ObjectiveParts<T>) -> T {
    -parts.l_v + parts.l_t
}

/// Which adversarial game the trainer plays.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum AdversarialObjective {
    /// Generator minimizes `L_V − L_T`, discriminator minimizes `−L_V + L_T`.
    #[default]
    Verbatim,
    /// Conventional GAN for comparison only: the discriminator minimizes
    /// `L_V + L_T` and the generators minimize the cross-entropy against the
    /// flipped modality labels.
    Symmetric,
}
