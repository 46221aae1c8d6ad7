use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::common_space::{AdversarialObjective, CrossMetric, LossWeights, TransferMode};
use crate::datagen::SyntheticConfig;
use crate::error::{CmstError, Result};
use crate::nn::OptimizerConfig;
use crate::similarity::SiameseConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum StrategyKind {
    /// Pretrain the Siamese nets, then freeze them.
    #[default]
    TwoStage,
    /// Pretrain, then keep updating them with a small learning rate.
    FineTune,
    /// No pretraining; everything learns jointly from the start.
    EndToEnd,
}

impl StrategyKind {
    pub const ALL: [StrategyKind; 3] = [StrategyKind::TwoStage, StrategyKind::FineTune, StrategyKind::EndToEnd];

    pub fn name(self) -> &'static str {
        match self {
            StrategyKind::TwoStage => "two-stage",
            StrategyKind::FineTune => "fine-tune",
            StrategyKind::EndToEnd => "end-to-end",
        }
    }
}

impl std::str::FromStr for StrategyKind {
    type Err = CmstError;

    fn from_str(s: &str) -> Result<Self> {
        StrategyKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| CmstError::config("strategy", format!("unknown strategy `{s}`")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainingStrategy {
    pub kind: StrategyKind,
    pub siamese_pretrain_epochs: usize,
    pub finetune_lr: f64,
}

impl Default for TrainingStrategy {
    fn default() -> Self {
        TrainingStrategy {
            kind: StrategyKind::TwoStage,
            siamese_pretrain_epochs: 50,
            finetune_lr: 1e-4,
        }
    }
}

impl TrainingStrategy {
    /// Pretraining epochs actually run for this strategy.
    pub fn pretrain_epochs(&self) -> usize {
        match self.kind {
            StrategyKind::EndToEnd => 0,
            _ => self.siamese_pretrain_epochs,
        }
    }
}

/// Where the intra-modal distances fed to the transfer loss come from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum SimilaritySource {
    /// Learned Siamese distance.
    #[default]
    Siamese,
    /// Plain Euclidean distance between raw input features.
    Euclidean,
    /// `1 − cos` between raw input features.
    Cosine,
}

impl SimilaritySource {
    pub const ALL: [SimilaritySource; 3] = [SimilaritySource::Cosine, SimilaritySource::Euclidean, SimilaritySource::Siamese];

    pub fn name(self) -> &'static str {
        match self {
            SimilaritySource::Siamese => "siamese",
            SimilaritySource::Euclidean => "euclidean",
            SimilaritySource::Cosine => "cosine",
        }
    }
}

impl std::str::FromStr for SimilaritySource {
    type Err = CmstError;

    fn from_str(s: &str) -> Result<Self> {
        SimilaritySource::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| CmstError::config("transfer.source", format!("unknown similarity source `{s}`")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TransferConfig {
    pub mode: TransferMode,
    pub source: SimilaritySource,
    /// Reference value for an item's similarity to its own pair.
    pub c_self: f64,
    pub metric: CrossMetric,
    pub product_clamp: Option<f64>,
    /// Triples per batch; `None` uses the batch size.
    pub triples_per_batch: Option<usize>,
}

impl Default for TransferConfig {
    fn default() -> Self {
        TransferConfig {
            mode: TransferMode::Difference,
            source: SimilaritySource::Siamese,
            c_self: 1.0,
            metric: CrossMetric::SquaredEuclidean,
            product_clamp: Some(1e3),
            triples_per_batch: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub generator_hidden: Vec<usize>,
    pub common_dim: usize,
    pub classifier_hidden: Vec<usize>,
    pub discriminator_hidden: [usize; 2],
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            generator_hidden: vec![256, 128],
            common_dim: 64,
            classifier_hidden: Vec::new(),
            discriminator_hidden: [64, 32],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub ks: Vec<usize>,
    /// mAP truncation levels; `null` is the full ranking.
    pub truncations: Vec<Option<usize>>,
    /// Snapshot interval in epochs; 0 disables snapshots.
    pub snapshot_every: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            ks: vec![1, 5, 10, 50],
            truncations: vec![None, Some(50)],
            snapshot_every: 10,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub data: SyntheticConfig,
    pub model: ModelConfig,
    pub siamese: SiameseConfig,
    pub transfer: TransferConfig,
    pub strategy: TrainingStrategy,
    pub epochs: usize,
    pub batch_size: usize,
    pub optimizer: OptimizerConfig,
    pub weights: LossWeights,
    pub adversarial: AdversarialObjective,
    /// Abort when any loss magnitude exceeds this.
    pub divergence_threshold: f64,
    /// Write a checkpoint every N main epochs; 0 writes only the final one.
    pub checkpoint_every: usize,
    pub eval: EvalConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            seed: 0,
            data: SyntheticConfig::default(),
            model: ModelConfig::default(),
            siamese: SiameseConfig::default(),
            transfer: TransferConfig::default(),
            strategy: TrainingStrategy::default(),
            epochs: 100,
            batch_size: 64,
            optimizer: OptimizerConfig::default(),
            weights: LossWeights::default(),
            adversarial: AdversarialObjective::Verbatim,
            divergence_threshold: 1e6,
            checkpoint_every: 0,
            eval: EvalConfig::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| CmstError::config("config", e.to_string()))
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("config serializes");
        s.push('\n');
        s
    }

    pub fn validate(&self) -> Result<()> {
        self.siamese.validate()?;
        let positive = |field: &str, v: f64| {
            if v > 0.0 && v.is_finite() {
                Ok(())
            } else {
                Err(CmstError::config(field, format!("must be positive, got {v}")))
            }
        };
        if self.epochs == 0 {
            return Err(CmstError::config("epochs", "must be at least 1"));
        }
        if self.batch_size < 2 {
            return Err(CmstError::config("batch_size", "must be at least 2"));
        }
        if self.optimizer.learning_rate < 0.0 || !self.optimizer.learning_rate.is_finite() {
            return Err(CmstError::config("optimizer.learning_rate", "must be finite and non-negative"));
        }
        if self.strategy.finetune_lr < 0.0 || !self.strategy.finetune_lr.is_finite() {
            return Err(CmstError::config("strategy.finetune_lr", "must be finite and non-negative"));
        }
        if !self.transfer.c_self.is_finite() {
            return Err(CmstError::config("transfer.c_self", "must be finite"));
        }
        if let Some(c) = self.transfer.product_clamp {
            positive("transfer.product_clamp", c)?;
        }
        if self.transfer.triples_per_batch == Some(0) {
            return Err(CmstError::config("transfer.triples_per_batch", "must be at least 1"));
        }
        positive("divergence_threshold", self.divergence_threshold)?;
        if self.model.common_dim == 0 {
            return Err(CmstError::config("model.common_dim", "must be at least 1"));
        }
        if self.model.generator_hidden.iter().chain(&self.model.classifier_hidden).any(|&w| w == 0)
            || self.model.discriminator_hidden.contains(&0)
        {
            return Err(CmstError::config("model", "layer widths must be positive"));
        }
        if self.eval.ks.contains(&0) {
            return Err(CmstError::config("eval.ks", "k must be at least 1"));
        }
        if self.eval.truncations.is_empty() {
            return Err(CmstError::config("eval.truncations", "need at least one truncation level"));
        }
        if self.eval.truncations.contains(&Some(0)) {
            return Err(CmstError::config("eval.truncations", "truncation must be at least 1"));
        }
        for (name, w) in [
            ("weights.label", self.weights.label),
            ("weights.sim", self.weights.sim),
            ("weights.adversarial", self.weights.adversarial),
        ] {
            if !w.is_finite() {
                return Err(CmstError::config(name, "must be finite"));
            }
        }
        Ok(())
    }

    /// SHA-256 of everything that determines the trained models. Evaluation
    /// settings are excluded so a checkpoint can be re-evaluated differently.
    pub fn model_hash(&self) -> [u8; 32] {
        let mut value = serde_json::to_value(self).expect("config serializes");
        if let Some(obj) = value.as_object_mut() {
            obj.remove("eval");
            obj.remove("checkpoint_every");
        }
        Sha256::digest(serde_json::to_vec(&value).expect("value serializes")).into()
    }

    pub fn model_hash_hex(&self) -> String {
        hex::encode(self.model_hash())
    }

    pub fn uses_siamese(&self) -> bool {
        self.transfer.source == SimilaritySource::Siamese
    }
}
