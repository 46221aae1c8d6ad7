use sha2::{Digest, Sha256};

use crate::common_space::{
    adversarial_from_probs, sample_transfer_triples, softmax_cross_entropy, transfer_forward, AdversarialObjective,
    GeneratorPair, LabelClassifier, ModalityDiscriminator, ObjectiveParts, TransferDirection, TransferSettings,
    TransferTriple,
};
use crate::datagen::{Modality, MultimodalDataset};
use crate::error::{CmstError, Result};
use crate::eval::{self, RetrievalReport};
use crate::nn::{dot, squared_distance, Matrix, NetGrads, Optimizer, Rng};
use crate::similarity::{siamese_step, PairForward, PairSampler, SimilarityNet};
use crate::training::config::{ExperimentConfig, SimilaritySource, StrategyKind};
use crate::training::metrics::{EpochRecord, EvalSnapshot, Phase};

/// Every trainable network of one experiment.
#[derive(Debug, Clone, PartialEq)]
pub struct Models {
    pub h_v: Option<SimilarityNet<f64>>,
    pub h_t: Option<SimilarityNet<f64>>,
    pub generators: GeneratorPair<f64>,
    pub classifier: LabelClassifier<f64>,
    pub discriminator: ModalityDiscriminator<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub(crate) struct Optimizers {
    pub h_v: Option<Optimizer<f64>>,
    pub h_t: Option<Optimizer<f64>>,
    pub g_v: Optimizer<f64>,
    pub g_t: Optimizer<f64>,
    pub classifier: Optimizer<f64>,
    pub discriminator: Optimizer<f64>,
}

/// Losses of one generator/discriminator round.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepRecord {
    pub l_sia: Option<f64>,
    pub l_lab: f64,
    pub l_sim: f64,
    /// Measured before the discriminator update.
    pub l_v: f64,
    pub l_t: f64,
    pub l_d: f64,
    /// Uses the discriminator after its update.
    pub l_g: f64,
}

/// Intra-modal distances for a batch of triples, plus what is needed to
/// backpropagate into live Siamese nets.
struct IntraEval {
    values: Vec<f64>,
    live: Vec<LivePairs>,
}

struct LivePairs {
    modality: Modality,
    positions: Vec<usize>,
    forward: PairForward<f64>,
}

pub struct Trainer<'a> {
    cfg: ExperimentConfig,
    data: &'a MultimodalDataset,
    labels: Vec<usize>,
    pub models: Models,
    pub(crate) opts: Optimizers,
    pub(crate) pretrain_done: usize,
    pub(crate) epoch: usize,
    pub(crate) rngs: TrainerRngs,
    sampler: Option<PairSampler>,
    frozen: Option<(Matrix<f64>, Matrix<f64>)>,
}

#[derive(Debug, Clone)]
pub(crate) struct TrainerRngs {
    pub main: Rng,
    pub main_pairs: Rng,
    pub pretrain_v: Rng,
    pub pretrain_t: Rng,
}

impl TrainerRngs {
    pub fn all_mut(&mut self) -> [&mut Rng; 4] {
        [&mut self.main, &mut self.main_pairs, &mut self.pretrain_v, &mut self.pretrain_t]
    }

    pub fn all(&self) -> [&Rng; 4] {
        [&self.main, &self.main_pairs, &self.pretrain_v, &self.pretrain_t]
    }
}

impl<'a> Trainer<'a> {
    /// Builds and initializes every model for `cfg` on `data`.
    pub fn new(cfg: &ExperimentConfig, data: &'a MultimodalDataset) -> Result<Self> {
        cfg.validate()?;
        if data.train_indices().len() < 2 {
            return Err(CmstError::Input("training split needs at least 2 pairs".into()));
        }
        let (d_v, d_t, c) = (data.v.cols(), data.t.cols(), data.n_classes());
        let m = &cfg.model;
        let seed = cfg.seed;
        let mut generators = GeneratorPair::new(d_v, d_t, &m.generator_hidden, m.common_dim)?;
        generators.g_v.init_params(&mut Rng::stream(seed, "init/g_v"));
        generators.g_t.init_params(&mut Rng::stream(seed, "init/g_t"));
        let mut classifier = LabelClassifier::new(m.common_dim, &m.classifier_hidden, c)?;
        classifier.net.init_params(&mut Rng::stream(seed, "init/classifier"));
        let mut discriminator = ModalityDiscriminator::new(m.common_dim, m.discriminator_hidden)?;
        discriminator.net.init_params(&mut Rng::stream(seed, "init/discriminator"));

        let (h_v, h_t, sampler) = if cfg.uses_siamese() {
            let s = &cfg.siamese;
            let mut h_v = SimilarityNet::new(Modality::Image, d_v, &s.hidden, s.embed_dim)?;
            h_v.net.init_params(&mut Rng::stream(seed, "init/h_v"));
            let mut h_t = SimilarityNet::new(Modality::Text, d_t, &s.hidden, s.embed_dim)?;
            h_t.net.init_params(&mut Rng::stream(seed, "init/h_t"));
            let sampler = PairSampler::new(&data.labels(), data.train_indices())?;
            (Some(h_v), Some(h_t), Some(sampler))
        } else {
            (None, None, None)
        };

        let opts = Optimizers {
            h_v: h_v.as_ref().map(|h| Optimizer::new(cfg.siamese.optimizer, &h.net)),
            h_t: h_t.as_ref().map(|h| Optimizer::new(cfg.siamese.optimizer, &h.net)),
            g_v: Optimizer::new(cfg.optimizer, &generators.g_v),
            g_t: Optimizer::new(cfg.optimizer, &generators.g_t),
            classifier: Optimizer::new(cfg.optimizer, &classifier.net),
            discriminator: Optimizer::new(cfg.optimizer, &discriminator.net),
        };
        Ok(Trainer {
            cfg: cfg.clone(),
            data,
            labels: data.labels(),
            models: Models {
                h_v,
                h_t,
                generators,
                classifier,
                discriminator,
            },
            opts,
            pretrain_done: 0,
            epoch: 0,
            rngs: TrainerRngs {
                main: Rng::stream(seed, "train/main"),
                main_pairs: Rng::stream(seed, "train/main-pairs"),
                pretrain_v: Rng::stream(seed, "train/pretrain-image"),
                pretrain_t: Rng::stream(seed, "train/pretrain-text"),
            },
            sampler,
            frozen: None,
        })
    }

    pub fn config(&self) -> &ExperimentConfig {
        &self.cfg
    }

    pub fn dataset(&self) -> &MultimodalDataset {
        self.data
    }

    /// Completed main epochs.
    pub fn epoch(&self) -> usize {
        self.epoch
    }

    pub fn pretrain_epochs_done(&self) -> usize {
        self.pretrain_done
    }

    /// Pretraining epochs this configuration runs.
    pub fn pretrain_target(&self) -> usize {
        if self.cfg.uses_siamese() {
            self.cfg.strategy.pretrain_epochs()
        } else {
            0
        }
    }

    pub fn is_pretrained(&self) -> bool {
        self.pretrain_done >= self.pretrain_target()
    }

    /// Whether the Siamese nets receive updates during the main phase.
    pub fn siamese_live(&self) -> bool {
        self.cfg.uses_siamese() && self.cfg.strategy.kind != StrategyKind::TwoStage
    }

    fn siamese_main_lr(&self) -> f64 {
        match self.cfg.strategy.kind {
            StrategyKind::FineTune => self.cfg.strategy.finetune_lr,
            _ => self.cfg.siamese.optimizer.learning_rate,
        }
    }

    /// Hex SHA-256 over the Siamese parameters, or `None` without them.
    pub fn siamese_digest(&self) -> Option<String> {
        let (h_v, h_t) = (self.models.h_v.as_ref()?, self.models.h_t.as_ref()?);
        let mut hasher = Sha256::new();
        for p in h_v.net.params().into_iter().chain(h_t.net.params()) {
            for x in p {
                hasher.update(x.to_le_bytes());
            }
        }
        Some(hex::encode(hasher.finalize()))
    }

    /// Runs one pretraining epoch over both Siamese nets.
    pub fn pretrain_epoch(&mut self) -> Result<EpochRecord> {
        let cfg = self.cfg.siamese.clone();
        let sampler = self
            .sampler
            .as_ref()
            .ok_or_else(|| CmstError::State("no Siamese networks to pretrain".into()))?;
        let batches = cfg.batches_per_epoch(sampler.pool_len());
        let mut total = 0.0;
        for (h, opt, rng, feats) in [
            (
                self.models.h_v.as_mut(),
                self.opts.h_v.as_mut(),
                &mut self.rngs.pretrain_v,
                &self.data.v,
            ),
            (
                self.models.h_t.as_mut(),
                self.opts.h_t.as_mut(),
                &mut self.rngs.pretrain_t,
                &self.data.t,
            ),
        ] {
            let (h, opt) = (h.expect("siamese net"), opt.expect("siamese optimizer"));
            for _ in 0..batches {
                total += siamese_step(h, opt, sampler, feats, &cfg, rng)?;
            }
        }
        let l_sia = total / (2 * batches) as f64;
        self.guard("l_sia", l_sia)?;
        let record = EpochRecord {
            phase: Phase::Pretrain,
            epoch: self.pretrain_done,
            l_sia: Some(l_sia),
            l_lab: None,
            l_sim: None,
            l_v: None,
            l_t: None,
            l_g: None,
            l_d: None,
            siamese_lr: Some(cfg.optimizer.learning_rate),
            siamese_digest: self.siamese_digest(),
            eval: None,
        };
        self.pretrain_done += 1;
        Ok(record)
    }

    fn guard(&self, loss: &'static str, value: f64) -> Result<()> {
        if !value.is_finite() || value.abs() > self.cfg.divergence_threshold {
            return Err(CmstError::Divergence {
                epoch: self.epoch,
                loss,
                value,
            });
        }
        Ok(())
    }

    fn prepare_main_phase(&mut self) -> Result<()> {
        if !self.is_pretrained() {
            return Err(CmstError::State("main phase requested before pretraining finished".into()));
        }
        if self.siamese_live() {
            let lr = self.siamese_main_lr();
            for opt in [self.opts.h_v.as_mut(), self.opts.h_t.as_mut()].into_iter().flatten() {
                opt.learning_rate = lr;
            }
        } else if self.cfg.uses_siamese() && self.frozen.is_none() {
            let (h_v, h_t) = (self.models.h_v.as_ref().expect("h_v"), self.models.h_t.as_ref().expect("h_t"));
            self.frozen = Some((h_v.embed(&self.data.v)?, h_t.embed(&self.data.t)?));
        }
        Ok(())
    }

    fn intra_distances(&mut self, batch: &[usize], triples: &[TransferTriple]) -> Result<IntraEval> {
        let pair = |t: &TransferTriple| (batch[t.reference], batch[t.anchor]);
        let modality = |t: &TransferTriple| match t.direction {
            TransferDirection::ImageIntra => Modality::Image,
            TransferDirection::TextIntra => Modality::Text,
        };
        match self.cfg.transfer.source {
            SimilaritySource::Euclidean | SimilaritySource::Cosine => {
                let cosine = self.cfg.transfer.source == SimilaritySource::Cosine;
                let values = triples
                    .iter()
                    .map(|t| {
                        let feats = self.data.features(modality(t));
                        let (i, j) = pair(t);
                        raw_distance(feats.row(i), feats.row(j), cosine)
                    })
                    .collect();
                Ok(IntraEval { values, live: Vec::new() })
            }
            SimilaritySource::Siamese if !self.siamese_live() => {
                let (emb_v, emb_t) = self.frozen.as_ref().expect("frozen embeddings prepared");
                let values = triples
                    .iter()
                    .map(|t| {
                        let emb = if modality(t) == Modality::Image { emb_v } else { emb_t };
                        let (i, j) = pair(t);
                        squared_distance(emb.row(i), emb.row(j))
                    })
                    .collect();
                Ok(IntraEval { values, live: Vec::new() })
            }
            SimilaritySource::Siamese => {
                let mut values = vec![0.0; triples.len()];
                let mut live = Vec::with_capacity(2);
                for m in [Modality::Image, Modality::Text] {
                    let positions: Vec<usize> = (0..triples.len()).filter(|&k| modality(&triples[k]) == m).collect();
                    if positions.is_empty() {
                        continue;
                    }
                    let feats = self.data.features(m);
                    let left: Vec<usize> = positions.iter().map(|&k| pair(&triples[k]).0).collect();
                    let right: Vec<usize> = positions.iter().map(|&k| pair(&triples[k]).1).collect();
                    let h = match m {
                        Modality::Image => self.models.h_v.as_mut(),
                        Modality::Text => self.models.h_t.as_mut(),
                    }
                    .expect("siamese net");
                    let forward = h.forward_pairs(&feats.select_rows(&left), &feats.select_rows(&right))?;
                    for (&k, &d) in positions.iter().zip(&forward.distances) {
                        values[k] = d;
                    }
                    live.push(LivePairs {
                        modality: m,
                        positions,
                        forward,
                    });
                }
                Ok(IntraEval { values, live })
            }
        }
    }

    /// One discriminator update followed by one generator and classifier
    /// update on the batch of dataset indices `batch`. Live Siamese nets are
    /// updated last.
    pub fn train_step(&mut self, batch: &[usize]) -> Result<StepRecord> {
        if batch.len() < 2 {
            return Err(CmstError::Input("a training batch needs at least 2 pairs".into()));
        }
        let b = batch.len();
        let w = self.cfg.weights;
        let verbatim = self.cfg.adversarial == AdversarialObjective::Verbatim;
        let v = self.data.v.select_rows(batch);
        let t = self.data.t.select_rows(batch);
        let batch_labels: Vec<usize> = batch.iter().chain(batch).map(|&i| self.labels[i]).collect();

        let s_v = self.models.generators.g_v.forward(&v)?;
        let s_t = self.models.generators.g_t.forward(&t)?;
        let s_all = s_v.vstack(&s_t)?;

        // discriminator
        let disc = &mut self.models.discriminator.net;
        let p = disc.forward(&s_all)?;
        let adv = adversarial_from_probs(&p.data()[..b], &p.data()[b..]);
        let (l_v, l_t) = (adv.l_v, adv.l_t);
        let l_d = if verbatim { -l_v + l_t } else { l_v + l_t };
        let sign_v = if verbatim { -1.0 } else { 1.0 };
        let up: Vec<f64> = adv
            .grad_v
            .iter()
            .map(|g| sign_v * g)
            .chain(adv.grad_t.iter().copied())
            .collect();
        let (d_grads, _) = disc.backward(&Matrix::from_vec(2 * b, 1, up)?)?;
        self.opts.discriminator.step(disc, &d_grads)?;

        // generators against the updated discriminator
        let p = disc.forward(&s_all)?;
        let (adv_g, up_g): (f64, Vec<f64>) = if verbatim {
            let e = adversarial_from_probs(&p.data()[..b], &p.data()[b..]);
            let up = e
                .grad_v
                .iter()
                .map(|g| w.adversarial * g)
                .chain(e.grad_t.iter().map(|g| -w.adversarial * g))
                .collect();
            (e.l_v - e.l_t, up)
        } else {
            // flipped targets: images scored against 0, texts against 1
            let e = adversarial_from_probs(&p.data()[b..], &p.data()[..b]);
            let up = e
                .grad_t
                .iter()
                .map(|g| w.adversarial * g)
                .chain(e.grad_v.iter().map(|g| w.adversarial * g))
                .collect();
            (e.l_v + e.l_t, up)
        };
        let (_, mut ds) = disc.backward(&Matrix::from_vec(2 * b, 1, up_g)?)?;

        let logits = self.models.classifier.net.forward(&s_all)?;
        let (l_lab, mut dlogits) = softmax_cross_entropy(&logits, &batch_labels)?;
        dlogits.scale(w.label);
        let (clf_grads, ds_lab) = self.models.classifier.net.backward(&dlogits)?;
        ds.add_assign(&ds_lab)?;

        let n_triples = self.cfg.transfer.triples_per_batch.unwrap_or(b);
        let triples = sample_transfer_triples(b, n_triples, &mut self.rngs.main)?;
        let intra = self.intra_distances(batch, &triples)?;
        let settings = TransferSettings {
            mode: self.cfg.transfer.mode,
            c_self: self.cfg.transfer.c_self,
            metric: self.cfg.transfer.metric,
            product_clamp: self.cfg.transfer.product_clamp,
        };
        let te = transfer_forward(&triples, &intra.values, &s_v, &s_t, &settings)?;
        let mut ds_transfer = te.grad_s_v.vstack(&te.grad_s_t)?;
        ds_transfer.scale(w.sim);
        ds.add_assign(&ds_transfer)?;

        let (ds_v, ds_t) = ds.split_rows(b);
        let (gv_grads, _) = self.models.generators.g_v.backward(&ds_v)?;
        let (gt_grads, _) = self.models.generators.g_t.backward(&ds_t)?;
        self.opts.g_v.step(&mut self.models.generators.g_v, &gv_grads)?;
        self.opts.g_t.step(&mut self.models.generators.g_t, &gt_grads)?;
        self.opts.classifier.step(&mut self.models.classifier.net, &clf_grads)?;

        let l_sia = if self.siamese_live() {
            Some(self.update_live_siamese(&intra, &te.grad_intra)?)
        } else {
            None
        };

        let parts = ObjectiveParts {
            label: l_lab,
            sim: te.loss,
            l_v,
            l_t,
        };
        let l_g = w.label * parts.label + w.sim * parts.sim + w.adversarial * adv_g;
        let record = StepRecord {
            l_sia,
            l_lab,
            l_sim: te.loss,
            l_v,
            l_t,
            l_d,
            l_g,
        };
        for (name, value) in [
            ("l_lab", l_lab),
            ("l_sim", te.loss),
            ("l_v", l_v),
            ("l_t", l_t),
            ("l_d", l_d),
            ("l_g", l_g),
        ] {
            self.guard(name, value)?;
        }
        if let Some(x) = l_sia {
            self.guard("l_sia", x)?;
        }
        Ok(record)
    }

    fn update_live_siamese(&mut self, intra: &IntraEval, grad_intra: &[f64]) -> Result<f64> {
        let w_sim = self.cfg.weights.sim;
        let scfg = self.cfg.siamese.clone();
        let sampler = self.sampler.as_ref().expect("sampler for live Siamese nets");
        let mut total = 0.0;
        for m in [Modality::Image, Modality::Text] {
            let (h, opt) = match m {
                Modality::Image => (self.models.h_v.as_mut(), self.opts.h_v.as_mut()),
                Modality::Text => (self.models.h_t.as_mut(), self.opts.h_t.as_mut()),
            };
            let (h, opt) = (h.expect("siamese net"), opt.expect("siamese optimizer"));
            let mut grads = NetGrads::zeros_like(&h.net);
            if let Some(lp) = intra.live.iter().find(|lp| lp.modality == m) {
                let up: Vec<f64> = lp.positions.iter().map(|&k| w_sim * grad_intra[k]).collect();
                grads.add_assign(&h.backward_pairs(&lp.forward, &up)?);
            }
            let pairs = sampler.sample(scfg.batch_size, scfg.positive_fraction, &mut self.rngs.main_pairs)?;
            let pb = sampler.batch(self.data.features(m), &pairs);
            let (loss, g, _) = h.contrastive_loss_and_grad(&pb, scfg.margin)?;
            grads.add_assign(&g);
            opt.step(&mut h.net, &grads)?;
            total += loss;
        }
        Ok(total / 2.0)
    }

    /// One pass over the shuffled training split.
    pub fn train_epoch(&mut self) -> Result<EpochRecord> {
        self.train_epoch_observed(&mut |_| {})
    }

    /// [`Trainer::train_epoch`], passing every step's losses to `on_step`.
    pub fn train_epoch_observed(&mut self, on_step: &mut dyn FnMut(&StepRecord)) -> Result<EpochRecord> {
        self.prepare_main_phase()?;
        let mut order = self.data.train_indices().to_vec();
        self.rngs.main.shuffle(&mut order);
        let mut sums = [0.0f64; 7];
        let mut steps = 0usize;
        let mut sia_steps = 0usize;
        for chunk in order.chunks(self.cfg.batch_size) {
            if chunk.len() < 2 {
                continue;
            }
            let r = self.train_step(chunk)?;
            on_step(&r);
            for (s, x) in sums.iter_mut().zip([r.l_lab, r.l_sim, r.l_v, r.l_t, r.l_g, r.l_d]) {
                *s += x;
            }
            if let Some(x) = r.l_sia {
                sums[6] += x;
                sia_steps += 1;
            }
            steps += 1;
        }
        let n = steps.max(1) as f64;
        let live = self.siamese_live();
        let epoch = self.epoch;
        self.epoch += 1;
        let every = self.cfg.eval.snapshot_every;
        let eval = if every > 0 && self.epoch.is_multiple_of(every) {
            let r = eval::evaluate(&self.models.generators, self.data, &[1], &[None], self.cfg.seed, "")?;
            Some(EvalSnapshot {
                map_avg: r.map_avg(),
                top1_avg: r.topk[0].avg.0,
            })
        } else {
            None
        };
        let (l_v, l_t) = (sums[2] / n, sums[3] / n);
        Ok(EpochRecord {
            phase: Phase::Main,
            epoch,
            l_sia: (sia_steps > 0).then(|| sums[6] / sia_steps as f64),
            l_lab: Some(sums[0] / n),
            l_sim: Some(sums[1] / n),
            l_v: Some(l_v),
            l_t: Some(l_t),
            l_g: Some(sums[4] / n),
            l_d: Some(sums[5] / n),
            siamese_lr: live.then(|| self.siamese_main_lr()),
            siamese_digest: self.siamese_digest(),
            eval,
        })
    }

    /// Runs remaining pretraining, then main epochs up to `until` (capped at
    /// the configured total). Every finished epoch is passed to `sink`.
    pub fn run_until(&mut self, until: usize, sink: &mut dyn FnMut(&EpochRecord) -> Result<()>) -> Result<()> {
        while !self.is_pretrained() {
            let r = self.pretrain_epoch()?;
            sink(&r)?;
        }
        let until = until.min(self.cfg.epochs);
        while self.epoch < until {
            let r = self.train_epoch()?;
            sink(&r)?;
        }
        Ok(())
    }

    pub fn evaluate(&self) -> Result<RetrievalReport> {
        self.evaluate_with(&self.cfg.eval.ks, &self.cfg.eval.truncations)
    }

    pub fn evaluate_with(&self, ks: &[usize], truncations: &[Option<usize>]) -> Result<RetrievalReport> {
        let n_test = self.data.test_indices().len();
        let ks: Vec<usize> = ks.iter().copied().filter(|&k| k <= n_test).collect();
        eval::evaluate(
            &self.models.generators,
            self.data,
            &ks,
            truncations,
            self.cfg.seed,
            &self.cfg.model_hash_hex(),
        )
    }

    /// Drops cached embeddings so they are rebuilt from the current nets.
    pub(crate) fn invalidate_frozen(&mut self) {
        self.frozen = None;
    }
}

fn raw_distance(a: &[f64], b: &[f64], cosine: bool) -> f64 {
    if cosine {
        let na = dot(a, a).sqrt();
        let nb = dot(b, b).sqrt();
        if na == 0.0 || nb == 0.0 {
            1.0
        } else {
            1.0 - dot(a, b) / (na * nb)
        }
    } else {
        squared_distance(a, b).sqrt()
    }
}
