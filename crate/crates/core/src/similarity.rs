//! Siamese intra-modal similarity networks and their contrastive loss.
//!
//! The learned "similarity" is the squared Euclidean distance between the two
//! embeddings, so larger values mean less similar items.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::datagen::{Modality, MultimodalDataset};
use crate::error::{CmstError, Result};
use crate::nn::{squared_distance, Activation, Matrix, MlpNetwork, NetGrads, Optimizer, OptimizerConfig, Rng};
use crate::scalar::Scalar;

/// Contrastive margin `C`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Margin(f64);

impl Margin {
    pub fn new(c: f64) -> Result<Self> {
        if c > 0.0 && c.is_finite() {
            Ok(Margin(c))
        } else {
            Err(CmstError::config("margin", format!("must be positive, got {c}")))
        }
    }

    pub fn value(self) -> f64 {
        self.0
    }
}

impl Default for Margin {
    fn default() -> Self {
        Margin(1.0)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimilarityNet<T> {
    pub net: MlpNetwork<T>,
    pub modality: Modality,
}

/// Pairs of same-modality items with their same-class flags.
#[derive(Debug, Clone, PartialEq)]
pub struct PairBatch<T> {
    pub left: Matrix<T>,
    pub right: Matrix<T>,
    pub same_class: Vec<bool>,
    /// Dataset indices the rows were drawn from, when sampled from a dataset.
    pub indices: Vec<(usize, usize)>,
}

impl<T: Scalar> PairBatch<T> {
    pub fn new(left: Matrix<T>, right: Matrix<T>, same_class: Vec<bool>) -> Result<Self> {
        if left.shape() != right.shape() {
            return Err(CmstError::shape(
                "PairBatch::new",
                format!("{:?}", left.shape()),
                format!("{:?}", right.shape()),
            ));
        }
        if same_class.len() != left.rows() {
            return Err(CmstError::shape("PairBatch::new", left.rows(), same_class.len()));
        }
        Ok(PairBatch {
            left,
            right,
            same_class,
            indices: Vec::new(),
        })
    }

    pub fn len(&self) -> usize {
        self.same_class.len()
    }

    pub fn is_empty(&self) -> bool {
        self.same_class.is_empty()
    }
}

/// Result of a cached forward over pairs; feeds [`SimilarityNet::backward_pairs`].
#[derive(Debug, Clone)]
pub struct PairForward<T> {
    pub distances: Vec<T>,
    left_emb: Matrix<T>,
    right_emb: Matrix<T>,
}

impl<T: Scalar> SimilarityNet<T> {
    /// `input_dim → hidden… → embed_dim`, ReLU between layers, linear output.
    pub fn new(modality: Modality, input_dim: usize, hidden: &[usize], embed_dim: usize) -> Result<Self> {
        let mut dims = vec![input_dim];
        dims.extend_from_slice(hidden);
        dims.push(embed_dim);
        Ok(SimilarityNet {
            net: MlpNetwork::new(&dims, Activation::Relu, Activation::Identity)?,
            modality,
        })
    }

    pub fn input_dim(&self) -> usize {
        self.net.input_dim()
    }

    pub fn embed(&self, x: &Matrix<T>) -> Result<Matrix<T>> {
        self.net.predict(x)
    }

    /// `‖H(x_i) − H(x_j)‖²`.
    pub fn intra_distance(&self, x_i: &[T], x_j: &[T]) -> Result<T> {
        let d = self.input_dim();
        if x_i.len() != d || x_j.len() != d {
            return Err(CmstError::shape("intra_distance", d, format!("{} and {}", x_i.len(), x_j.len())));
        }
        let emb = self.net.predict(&Matrix::from_rows(&[x_i, x_j])?)?;
        Ok(squared_distance(emb.row(0), emb.row(1)))
    }

    /// Row-wise distances between `left` and `right`, caching for backward.
    pub fn forward_pairs(&mut self, left: &Matrix<T>, right: &Matrix<T>) -> Result<PairForward<T>> {
        if left.shape() != right.shape() {
            return Err(CmstError::shape(
                "forward_pairs",
                format!("{:?}", left.shape()),
                format!("{:?}", right.shape()),
            ));
        }
        let b = left.rows();
        let emb = self.net.forward(&left.vstack(right)?)?;
        let (left_emb, right_emb) = emb.split_rows(b);
        let distances = (0..b)
            .map(|k| squared_distance(left_emb.row(k), right_emb.row(k)))
            .collect();
        Ok(PairForward {
            distances,
            left_emb,
            right_emb,
        })
    }

    /// Parameter gradients of `Σ_k upstream[k] · distance_k` for the pairs of
    /// the preceding [`SimilarityNet::forward_pairs`] call.
    pub fn backward_pairs(&self, fwd: &PairForward<T>, upstream: &[T]) -> Result<NetGrads<T>> {
        let b = fwd.distances.len();
        if upstream.len() != b {
            return Err(CmstError::shape("backward_pairs", b, upstream.len()));
        }
        let dim = fwd.left_emb.cols();
        let mut grad = Matrix::zeros(2 * b, dim);
        let two = T::lit(2.0);
        for k in 0..b {
            let (l, r) = (fwd.left_emb.row(k), fwd.right_emb.row(k));
            for c in 0..dim {
                let g = two * upstream[k] * (l[c] - r[c]);
                grad[(k, c)] = g;
                grad[(b + k, c)] = -g;
            }
        }
        Ok(self.net.backward(&grad)?.0)
    }

    /// Mean contrastive loss over the batch.
    pub fn contrastive_loss(&self, batch: &PairBatch<T>, margin: Margin) -> Result<T> {
        let c = T::lit(margin.value());
        let left = self.net.predict(&batch.left)?;
        let right = self.net.predict(&batch.right)?;
        let mut total = T::zero();
        for k in 0..batch.len() {
            let s = squared_distance(left.row(k), right.row(k));
            total += contrastive_term(s, batch.same_class[k], c);
        }
        Ok(total / T::lit(batch.len().max(1) as f64))
    }

    /// Mean contrastive loss, its parameter gradients, and the hinge arguments
    /// `C − s` of the negative pairs.
    pub fn contrastive_loss_and_grad(&mut self, batch: &PairBatch<T>, margin: Margin) -> Result<(T, NetGrads<T>, Vec<T>)> {
        let c = T::lit(margin.value());
        let fwd = self.forward_pairs(&batch.left, &batch.right)?;
        let n = T::lit(batch.len().max(1) as f64);
        let mut total = T::zero();
        let mut upstream = Vec::with_capacity(batch.len());
        let mut kinks = Vec::new();
        for (&s, &same) in fwd.distances.iter().zip(&batch.same_class) {
            total += contrastive_term(s, same, c);
            let g = if same {
                T::one()
            } else {
                kinks.push(c - s);
                if c - s > T::zero() {
                    -T::one()
                } else {
                    T::zero()
                }
            };
            upstream.push(g / n);
        }
        let grads = self.backward_pairs(&fwd, &upstream)?;
        Ok((total / n, grads, kinks))
    }
}

/// One pair's contribution `u·s + (1−u)·max(C − s, 0)`.
#[inline]
pub fn contrastive_term<T: Scalar>(s: T, same_class: bool, margin: T) -> T {
    if same_class {
        s
    } else {
        (margin - s).max(T::zero())
    }
}

/// Draws class-balanced pairs from a pool of dataset indices.
#[derive(Debug, Clone)]
pub struct PairSampler {
    pool: Vec<usize>,
    labels: Vec<usize>,
    by_class: BTreeMap<usize, Vec<usize>>,
}

impl PairSampler {
    pub fn new(labels: &[usize], pool: &[usize]) -> Result<Self> {
        if pool.is_empty() {
            return Err(CmstError::Input("cannot sample pairs from an empty dataset".into()));
        }
        let mut by_class: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
        for &i in pool {
            by_class.entry(labels[i]).or_default().push(i);
        }
        if by_class.len() < 2 {
            return Err(CmstError::Input(
                "pair sampling needs at least two classes (no negatives available)".into(),
            ));
        }
        Ok(PairSampler {
            pool: pool.to_vec(),
            labels: labels.to_vec(),
            by_class,
        })
    }

    pub fn pool_len(&self) -> usize {
        self.pool.len()
    }

    /// `round(positive_fraction · batch_size)` same-class pairs followed by
    /// different-class pairs.
    pub fn sample(&self, batch_size: usize, positive_fraction: f64, rng: &mut Rng) -> Result<Vec<(usize, usize, bool)>> {
        if !(positive_fraction > 0.0 && positive_fraction < 1.0) {
            return Err(CmstError::Input(format!(
                "positive_fraction must lie in (0, 1), got {positive_fraction}"
            )));
        }
        let positives = (positive_fraction * batch_size as f64).round() as usize;
        let mut out = Vec::with_capacity(batch_size);
        for _ in 0..positives {
            let i = self.pool[rng.below(self.pool.len())];
            let members = &self.by_class[&self.labels[i]];
            let j = if members.len() == 1 {
                i
            } else {
                // uniform over the class minus i
                let pos = members.iter().position(|&m| m == i).expect("anchor in its class");
                let k = rng.below(members.len() - 1);
                members[if k >= pos { k + 1 } else { k }]
            };
            out.push((i, j, true));
        }
        for _ in positives..batch_size {
            let i = self.pool[rng.below(self.pool.len())];
            let j = loop {
                let j = self.pool[rng.below(self.pool.len())];
                if self.labels[j] != self.labels[i] {
                    break j;
                }
            };
            out.push((i, j, false));
        }
        Ok(out)
    }

    pub fn batch<T: Scalar>(&self, features: &Matrix<T>, pairs: &[(usize, usize, bool)]) -> PairBatch<T> {
        let left: Vec<usize> = pairs.iter().map(|p| p.0).collect();
        let right: Vec<usize> = pairs.iter().map(|p| p.1).collect();
        PairBatch {
            left: features.select_rows(&left),
            right: features.select_rows(&right),
            same_class: pairs.iter().map(|p| p.2).collect(),
            indices: pairs.iter().map(|p| (p.0, p.1)).collect(),
        }
    }
}

/// Samples one contrastive batch from the training split of `modality`.
pub fn sample_pairs(
    dataset: &MultimodalDataset,
    modality: Modality,
    batch_size: usize,
    positive_fraction: f64,
    rng: &mut Rng,
) -> Result<PairBatch<f64>> {
    let sampler = PairSampler::new(&dataset.labels(), dataset.train_indices())?;
    let pairs = sampler.sample(batch_size, positive_fraction, rng)?;
    Ok(sampler.batch(dataset.features(modality), &pairs))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SiameseConfig {
    pub hidden: Vec<usize>,
    pub embed_dim: usize,
    pub margin: Margin,
    pub positive_fraction: f64,
    pub batch_size: usize,
    pub optimizer: OptimizerConfig,
}

impl Default for SiameseConfig {
    fn default() -> Self {
        SiameseConfig {
            hidden: vec![128, 128],
            embed_dim: 32,
            margin: Margin::default(),
            positive_fraction: 0.5,
            batch_size: 64,
            optimizer: OptimizerConfig::default(),
        }
    }
}

impl SiameseConfig {
    pub fn validate(&self) -> Result<()> {
        Margin::new(self.margin.value()).map_err(|_| CmstError::config("siamese.margin", "must be positive"))?;
        if !(self.positive_fraction > 0.0 && self.positive_fraction < 1.0) {
            return Err(CmstError::config("siamese.positive_fraction", "must lie in (0, 1)"));
        }
        if self.batch_size == 0 {
            return Err(CmstError::config("siamese.batch_size", "must be at least 1"));
        }
        if self.embed_dim == 0 || self.hidden.contains(&0) {
            return Err(CmstError::config("siamese.hidden", "layer widths must be positive"));
        }
        Ok(())
    }

    /// Pair batches per epoch for a pool of `n` items.
    pub fn batches_per_epoch(&self, n: usize) -> usize {
        n.div_ceil(self.batch_size).max(1)
    }
}

/// One optimizer step on a freshly sampled contrastive batch. Returns the
/// batch loss.
pub fn siamese_step(
    net: &mut SimilarityNet<f64>,
    opt: &mut Optimizer<f64>,
    sampler: &PairSampler,
    features: &Matrix<f64>,
    cfg: &SiameseConfig,
    rng: &mut Rng,
) -> Result<f64> {
    let pairs = sampler.sample(cfg.batch_size, cfg.positive_fraction, rng)?;
    let batch = sampler.batch(features, &pairs);
    let (loss, grads, _) = net.contrastive_loss_and_grad(&batch, cfg.margin)?;
    if !loss.is_finite() {
        return Err(CmstError::Numeric(format!("contrastive loss {loss}")));
    }
    opt.step(&mut net.net, &grads)?;
    Ok(loss)
}

/// Trains a fresh similarity network on the training split. Returns the
/// network and the mean contrastive loss of every epoch.
pub fn train_siamese(
    dataset: &MultimodalDataset,
    modality: Modality,
    cfg: &SiameseConfig,
    epochs: usize,
    rng: &mut Rng,
) -> Result<(SimilarityNet<f64>, Vec<f64>)> {
    cfg.validate()?;
    if epochs == 0 {
        return Err(CmstError::config("epochs", "must be at least 1"));
    }
    let features = dataset.features(modality);
    let mut net = SimilarityNet::new(modality, features.cols(), &cfg.hidden, cfg.embed_dim)?;
    net.net.init_params(&mut rng.substream("init"));
    let mut opt = Optimizer::new(cfg.optimizer, &net.net);
    let sampler = PairSampler::new(&dataset.labels(), dataset.train_indices())?;
    let mut pair_rng = rng.substream("pairs");
    let batches = cfg.batches_per_epoch(sampler.pool_len());
    let mut curve = Vec::with_capacity(epochs);
    for _ in 0..epochs {
        let mut total = 0.0;
        for _ in 0..batches {
            total += siamese_step(&mut net, &mut opt, &sampler, features, cfg, &mut pair_rng)?;
        }
        curve.push(total / batches as f64);
    }
    net.net.clear_cache();
    Ok((net, curve))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{relative_error, DenseLayer};

    fn identity_net(d: usize) -> SimilarityNet<f64> {
        SimilarityNet {
            net: MlpNetwork::from_layers(vec![
                DenseLayer::new(Matrix::identity(d), vec![0.0; d], Activation::Identity).unwrap()
            ])
            .unwrap(),
            modality: Modality::Image,
        }
    }

    #[test]
    fn intra_distance_examples() {
        let h = identity_net(2);
        assert_eq!(h.intra_distance(&[0.0, 0.0], &[3.0, 4.0]).unwrap(), 25.0);
        assert_eq!(h.intra_distance(&[1.5, -2.0], &[1.5, -2.0]).unwrap(), 0.0);
        assert!(h.intra_distance(&[0.0], &[1.0, 2.0]).is_err());

        let mut r = SimilarityNet::<f64>::new(Modality::Text, 3, &[5], 4).unwrap();
        r.net.init_params(&mut Rng::stream(1, "h"));
        let (a, b) = ([0.3, -1.0, 2.0], [1.0, 0.0, -0.5]);
        assert_eq!(r.intra_distance(&a, &b).unwrap(), r.intra_distance(&b, &a).unwrap());
        assert_eq!(r.intra_distance(&a, &a).unwrap(), 0.0);
    }

    #[test]
    fn contrastive_cases() {
        assert_eq!(contrastive_term(0.0, true, 1.0), 0.0);
        assert_eq!(contrastive_term(1.0, false, 1.0), 0.0);
        assert_eq!(contrastive_term(3.0, false, 1.0), 0.0);
        assert_eq!(contrastive_term(0.25, false, 1.0), 0.75);

        // batch mean: positive at distance 25 and negative at distance 0.25
        let h = identity_net(2);
        let batch = PairBatch::new(
            Matrix::from_rows(&[[0.0, 0.0], [0.0, 0.0]]).unwrap(),
            Matrix::from_rows(&[[3.0, 4.0], [0.3, 0.4]]).unwrap(),
            vec![true, false],
        )
        .unwrap();
        let loss = h.contrastive_loss(&batch, Margin::new(1.0).unwrap()).unwrap();
        assert!((loss - (25.0 + 0.75) / 2.0).abs() < 1e-12);
    }

    #[test]
    fn contrastive_gradient_matches_fd() {
        let mut rng = Rng::stream(4, "cgrad");
        let mut h = SimilarityNet::<f64>::new(Modality::Image, 5, &[6], 3).unwrap();
        h.net.init_params(&mut rng);
        let rand_m = |rng: &mut Rng| Matrix::from_vec(4, 5, (0..20).map(|_| rng.normal()).collect()).unwrap();
        let batch = PairBatch::new(rand_m(&mut rng), rand_m(&mut rng), vec![true, false, false, true]).unwrap();
        let margin = Margin::new(4.0).unwrap();
        let (loss, analytic, _) = h.contrastive_loss_and_grad(&batch, margin).unwrap();
        let numeric = crate::nn::finite_diff_grad(|n| {
            SimilarityNet { net: n.clone(), modality: Modality::Image }.contrastive_loss(&batch, margin)
        }, &h.net, 1e-5)
        .unwrap();
        for (a, n) in analytic.iter().zip(numeric.iter()) {
            assert!(relative_error(*a, *n, loss) <= 1e-4, "{a} vs {n}");
        }
    }

    #[test]
    fn margin_must_be_positive() {
        assert!(Margin::new(0.0).is_err());
        assert!(Margin::new(-1.0).is_err());
        assert!(Margin::new(0.5).is_ok());
    }

    #[test]
    fn sampler_counts_and_labels() {
        let labels: Vec<usize> = (0..40).map(|i| i % 4).collect();
        let pool: Vec<usize> = (0..40).collect();
        let sampler = PairSampler::new(&labels, &pool).unwrap();
        let mut rng = Rng::stream(9, "pairs");
        let pairs = sampler.sample(8, 0.5, &mut rng).unwrap();
        assert_eq!(pairs.iter().filter(|p| p.2).count(), 4);
        for _ in 0..50 {
            for (i, j, same) in sampler.sample(64, 0.5, &mut rng).unwrap() {
                assert_eq!(same, labels[i] == labels[j]);
                if same {
                    assert_ne!(i, j);
                }
            }
        }
        assert!(sampler.sample(8, 1.0, &mut rng).is_err());
    }

    #[test]
    fn sampler_rejects_degenerate_pools() {
        let labels = vec![0usize; 10];
        let pool: Vec<usize> = (0..10).collect();
        assert!(PairSampler::new(&labels, &pool).is_err());
        assert!(PairSampler::new(&labels, &[]).is_err());
    }

    #[test]
    fn singleton_class_pairs_with_itself() {
        let labels = vec![0, 1, 1, 1];
        let sampler = PairSampler::new(&labels, &[0, 1, 2, 3]).unwrap();
        let mut rng = Rng::stream(2, "s");
        for _ in 0..20 {
            for (i, j, same) in sampler.sample(10, 0.5, &mut rng).unwrap() {
                if same && labels[i] == 0 {
                    assert_eq!(i, j);
                }
            }
        }
    }
}
