//! Finite-difference verification of every loss the trainer differentiates.
//!
//! Each loss is checked on many small random configurations. For one
//! configuration the parameters of every network on the loss's gradient path
//! are concatenated into a single vector θ; the analytic gradient at θ is
//! compared entry by entry with a central difference, skipping entries whose
//! perturbation crosses a ReLU, hinge, absolute value or clamp boundary.

use serde::Serialize;

use crate::common_space::{
    adversarial_from_probs, sample_transfer_triples, softmax_cross_entropy, transfer_forward, CrossMetric,
    TransferMode, TransferSettings,
};
use crate::datagen::Modality;
use crate::error::{CmstError, Result};
use crate::nn::{finite_diff_masked, relative_error, Activation, Matrix, MlpNetwork, NetGrads, Probe, Rng};
use crate::similarity::{Margin, PairBatch, SimilarityNet};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum CheckedLoss {
    Contrastive,
    TransferValue,
    TransferDifference,
    TransferProduct,
    Label,
    AdversarialImage,
    AdversarialText,
}

impl CheckedLoss {
    pub const ALL: [CheckedLoss; 7] = [
        CheckedLoss::Contrastive,
        CheckedLoss::TransferValue,
        CheckedLoss::TransferDifference,
        CheckedLoss::TransferProduct,
        CheckedLoss::Label,
        CheckedLoss::AdversarialImage,
        CheckedLoss::AdversarialText,
    ];

    pub fn name(self) -> &'static str {
        match self {
            CheckedLoss::Contrastive => "contrastive",
            CheckedLoss::TransferValue => "transfer-value",
            CheckedLoss::TransferDifference => "transfer-difference",
            CheckedLoss::TransferProduct => "transfer-product",
            CheckedLoss::Label => "label",
            CheckedLoss::AdversarialImage => "adversarial-image",
            CheckedLoss::AdversarialText => "adversarial-text",
        }
    }
}

impl std::str::FromStr for CheckedLoss {
    type Err = CmstError;

    fn from_str(s: &str) -> Result<Self> {
        CheckedLoss::ALL
            .into_iter()
            .find(|l| l.name() == s)
            .ok_or_else(|| CmstError::config("loss", format!("unknown loss `{s}`")))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradSuiteConfig {
    pub seed: u64,
    pub configs_per_loss: usize,
    pub eps: f64,
    pub tolerance: f64,
    pub kink_tol: f64,
    /// Test hook: perturb the analytic gradient of this loss.
    pub corrupt: Option<CheckedLoss>,
}

impl Default for GradSuiteConfig {
    fn default() -> Self {
        GradSuiteConfig {
            seed: 0,
            configs_per_loss: 20,
            eps: 1e-5,
            tolerance: 1e-4,
            kink_tol: 1e-6,
            corrupt: None,
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct LossCheck {
    pub loss: CheckedLoss,
    pub configs: usize,
    pub checked: usize,
    pub skipped: usize,
    pub max_rel_err: f64,
    pub passed: bool,
}

#[derive(Debug, Clone, Serialize)]
pub struct GradSuiteReport {
    pub seed: u64,
    pub eps: f64,
    pub tolerance: f64,
    pub losses: Vec<LossCheck>,
}

impl GradSuiteReport {
    pub fn passed(&self) -> bool {
        self.losses.iter().all(|l| l.passed)
    }

    pub fn failures(&self) -> Vec<CheckedLoss> {
        self.losses.iter().filter(|l| !l.passed).map(|l| l.loss).collect()
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("report serializes");
        s.push('\n');
        s
    }

    pub fn table(&self) -> String {
        let mut out = format!("{:<22} {:>7} {:>8} {:>8} {:>12}  result\n", "loss", "configs", "checked", "skipped", "max rel err");
        for l in &self.losses {
            out.push_str(&format!(
                "{:<22} {:>7} {:>8} {:>8} {:>12.3e}  {}\n",
                l.loss.name(),
                l.configs,
                l.checked,
                l.skipped,
                l.max_rel_err,
                if l.passed { "PASS" } else { "FAIL" }
            ));
        }
        out
    }
}

/// Loss value, non-smooth arguments and the analytic gradient per network.
struct Eval {
    loss: f64,
    kinks: Vec<f64>,
    grads: Vec<NetGrads<f64>>,
}

/// The networks on one loss's gradient path plus the fixed inputs.
struct Case {
    loss: CheckedLoss,
    nets: Vec<MlpNetwork<f64>>,
    x_a: Matrix<f64>,
    x_b: Matrix<f64>,
    labels: Vec<usize>,
    same: Vec<bool>,
    triples: Vec<crate::common_space::TransferTriple>,
}

fn relu_kinks(net: &MlpNetwork<f64>, out: &mut Vec<f64>) {
    for layer in net.layers() {
        if layer.activation == Activation::Relu {
            if let Some(pre) = layer.cached_pre_activation() {
                out.extend_from_slice(pre.data());
            }
        }
    }
}

fn flat(nets: &[MlpNetwork<f64>]) -> Vec<f64> {
    nets.iter().flat_map(|n| n.flat_params()).collect()
}

fn set_flat(nets: &mut [MlpNetwork<f64>], theta: &[f64]) -> Result<()> {
    let mut offset = 0;
    for n in nets {
        let k = n.num_params();
        n.set_flat_params(&theta[offset..offset + k])?;
        offset += k;
    }
    Ok(())
}

fn rand_matrix(rows: usize, cols: usize, rng: &mut Rng) -> Matrix<f64> {
    let data = (0..rows * cols).map(|_| rng.normal()).collect();
    Matrix::from_vec(rows, cols, data).expect("sized")
}

fn rand_net(dims: &[usize], out: Activation, rng: &mut Rng) -> MlpNetwork<f64> {
    let mut net = MlpNetwork::new(dims, Activation::Relu, out).expect("valid dims");
    net.init_params(rng);
    // nonzero biases so the check also covers them away from symmetric points
    for layer in net.layers_mut() {
        layer.bias.iter_mut().for_each(|b| *b = 0.1 * rng.normal());
    }
    net
}

fn dim(rng: &mut Rng, lo: usize, hi: usize) -> usize {
    lo + rng.below(hi - lo + 1)
}

impl Case {
    fn random(loss: CheckedLoss, rng: &mut Rng) -> Case {
        let b = dim(rng, 2, 4);
        let d_a = dim(rng, 1, 8);
        let d_b = dim(rng, 1, 8);
        let h = dim(rng, 2, 8);
        let d_s = dim(rng, 1, 8);
        let c = dim(rng, 2, 5);
        let labels: Vec<usize> = (0..2 * b).map(|_| rng.below(c)).collect();
        let same: Vec<bool> = (0..b).map(|k| k % 2 == 0).collect();
        let x_a = rand_matrix(b, d_a, rng);
        let x_b = rand_matrix(b, d_b, rng);
        let nets = match loss {
            CheckedLoss::Contrastive => vec![rand_net(&[d_a, h, d_s], Activation::Identity, rng)],
            CheckedLoss::TransferValue | CheckedLoss::TransferDifference | CheckedLoss::TransferProduct => {
                let e = dim(rng, 1, 8);
                vec![
                    rand_net(&[d_a, h, d_s], Activation::Identity, rng),
                    rand_net(&[d_b, h, d_s], Activation::Identity, rng),
                    rand_net(&[d_a, h, e], Activation::Identity, rng),
                    rand_net(&[d_b, h, e], Activation::Identity, rng),
                ]
            }
            CheckedLoss::Label => {
                let hc = dim(rng, 2, 8);
                vec![
                    rand_net(&[d_a, h, d_s], Activation::Identity, rng),
                    rand_net(&[d_b, h, d_s], Activation::Identity, rng),
                    rand_net(&[d_s, hc, c], Activation::Identity, rng),
                ]
            }
            CheckedLoss::AdversarialImage | CheckedLoss::AdversarialText => {
                let input = if loss == CheckedLoss::AdversarialImage { d_a } else { d_b };
                let (h1, h2) = (dim(rng, 2, 8), dim(rng, 2, 8));
                vec![
                    rand_net(&[input, h, d_s], Activation::Identity, rng),
                    rand_net(&[d_s, h1, h2, 1], Activation::Sigmoid, rng),
                ]
            }
        };
        let triples = sample_transfer_triples(b, b, rng).expect("batch of at least 2");
        Case {
            loss,
            nets,
            x_a,
            x_b,
            labels,
            same,
            triples,
        }
    }

    fn eval(&self, nets: &mut [MlpNetwork<f64>]) -> Result<Eval> {
        let mut kinks = Vec::new();
        match self.loss {
            CheckedLoss::Contrastive => {
                let mut h = SimilarityNet {
                    net: nets[0].clone(),
                    modality: Modality::Image,
                };
                let batch = PairBatch::new(self.x_a.clone(), self.x_a.select_rows(&rotate(self.x_a.rows())), self.same.clone())?;
                let (loss, g, hinge) = h.contrastive_loss_and_grad(&batch, Margin::default())?;
                relu_kinks(&h.net, &mut kinks);
                kinks.extend(hinge);
                Ok(Eval { loss, kinks, grads: vec![g] })
            }
            CheckedLoss::TransferValue | CheckedLoss::TransferDifference | CheckedLoss::TransferProduct => {
                let mode = match self.loss {
                    CheckedLoss::TransferValue => TransferMode::Value,
                    CheckedLoss::TransferDifference => TransferMode::Difference,
                    _ => TransferMode::Product,
                };
                let s_v = nets[0].forward(&self.x_a)?;
                let s_t = nets[1].forward(&self.x_b)?;
                let mut h_v = SimilarityNet { net: nets[2].clone(), modality: Modality::Image };
                let mut h_t = SimilarityNet { net: nets[3].clone(), modality: Modality::Text };
                // intra distances from the live similarity nets, as in joint training
                let mut intra = vec![0.0; self.triples.len()];
                let mut fwds = Vec::new();
                for (m, h, x) in [(Modality::Image, &mut h_v, &self.x_a), (Modality::Text, &mut h_t, &self.x_b)] {
                    let pos: Vec<usize> = (0..self.triples.len())
                        .filter(|&k| {
                            (self.triples[k].direction == crate::common_space::TransferDirection::ImageIntra)
                                == (m == Modality::Image)
                        })
                        .collect();
                    let left: Vec<usize> = pos.iter().map(|&k| self.triples[k].reference).collect();
                    let right: Vec<usize> = pos.iter().map(|&k| self.triples[k].anchor).collect();
                    let f = h.forward_pairs(&x.select_rows(&left), &x.select_rows(&right))?;
                    for (&k, &d) in pos.iter().zip(&f.distances) {
                        intra[k] = d;
                    }
                    relu_kinks(&h.net, &mut kinks);
                    fwds.push((pos, f));
                }
                let settings = TransferSettings {
                    mode,
                    c_self: 1.0,
                    metric: CrossMetric::SquaredEuclidean,
                    product_clamp: Some(1e3),
                };
                let te = transfer_forward(&self.triples, &intra, &s_v, &s_t, &settings)?;
                relu_kinks(&nets[0], &mut kinks);
                relu_kinks(&nets[1], &mut kinks);
                kinks.extend_from_slice(&te.kinks);
                let g_v = nets[0].backward(&te.grad_s_v)?.0;
                let g_t = nets[1].backward(&te.grad_s_t)?.0;
                let mut hg = Vec::new();
                for (h, (pos, f)) in [&h_v, &h_t].into_iter().zip(&fwds) {
                    let up: Vec<f64> = pos.iter().map(|&k| te.grad_intra[k]).collect();
                    hg.push(h.backward_pairs(f, &up)?);
                }
                let g_ht = hg.pop().expect("text grads");
                let g_hv = hg.pop().expect("image grads");
                Ok(Eval {
                    loss: te.loss,
                    kinks,
                    grads: vec![g_v, g_t, g_hv, g_ht],
                })
            }
            CheckedLoss::Label => {
                let b = self.x_a.rows();
                let s = nets[0].forward(&self.x_a)?.vstack(&nets[1].forward(&self.x_b)?)?;
                let logits = nets[2].forward(&s)?;
                let (loss, dlogits) = softmax_cross_entropy(&logits, &self.labels)?;
                let (g_c, ds) = nets[2].backward(&dlogits)?;
                let (ds_v, ds_t) = ds.split_rows(b);
                let g_v = nets[0].backward(&ds_v)?.0;
                let g_t = nets[1].backward(&ds_t)?.0;
                for n in nets.iter() {
                    relu_kinks(n, &mut kinks);
                }
                Ok(Eval {
                    loss,
                    kinks,
                    grads: vec![g_v, g_t, g_c],
                })
            }
            CheckedLoss::AdversarialImage | CheckedLoss::AdversarialText => {
                let image = self.loss == CheckedLoss::AdversarialImage;
                let x = if image { &self.x_a } else { &self.x_b };
                let s = nets[0].forward(x)?;
                let p = nets[1].forward(&s)?;
                let e = if image {
                    adversarial_from_probs(p.data(), &[])
                } else {
                    adversarial_from_probs(&[], p.data())
                };
                let (loss, up) = if image { (e.l_v, e.grad_v) } else { (e.l_t, e.grad_t) };
                let (g_d, ds) = nets[1].backward(&Matrix::from_vec(up.len(), 1, up)?)?;
                let g_g = nets[0].backward(&ds)?.0;
                relu_kinks(&nets[0], &mut kinks);
                relu_kinks(&nets[1], &mut kinks);
                kinks.extend(e.kinks);
                Ok(Eval {
                    loss,
                    kinks,
                    grads: vec![g_g, g_d],
                })
            }
        }
    }
}

/// Partner index `k + 1 mod n` so every pair joins distinct rows.
fn rotate(n: usize) -> Vec<usize> {
    (0..n).map(|k| (k + 1) % n).collect()
}

struct CaseResult {
    checked: usize,
    skipped: usize,
    max_rel_err: f64,
}

fn check_case(case: &Case, cfg: &GradSuiteConfig) -> Result<CaseResult> {
    let theta = flat(&case.nets);
    let mut nets = case.nets.clone();
    let analytic = case.eval(&mut nets)?;
    let loss = analytic.loss;
    let mut analytic: Vec<f64> = analytic.grads.iter().flat_map(|g| g.iter().copied()).collect();
    if cfg.corrupt == Some(case.loss) {
        analytic.iter_mut().for_each(|g| *g = 1.5 * *g + 1e-3);
    }
    let numeric = finite_diff_masked(
        |th: &[f64]| {
            let mut nets = case.nets.clone();
            set_flat(&mut nets, th)?;
            let e = case.eval(&mut nets)?;
            Ok(Probe {
                loss: e.loss,
                kinks: e.kinks,
            })
        },
        &theta,
        cfg.eps,
        cfg.kink_tol,
    )?;
    let mut out = CaseResult {
        checked: 0,
        skipped: 0,
        max_rel_err: 0.0,
    };
    for (a, n) in analytic.iter().zip(&numeric) {
        match n {
            Some(n) => {
                out.checked += 1;
                out.max_rel_err = out.max_rel_err.max(relative_error(*a, *n, loss));
            }
            None => out.skipped += 1,
        }
    }
    Ok(out)
}

/// Runs every loss over `cfg.configs_per_loss` random configurations.
pub fn run_gradsuite(cfg: &GradSuiteConfig) -> Result<GradSuiteReport> {
    if cfg.configs_per_loss == 0 {
        return Err(CmstError::config("configs_per_loss", "must be at least 1"));
    }
    let mut losses = Vec::with_capacity(CheckedLoss::ALL.len());
    for loss in CheckedLoss::ALL {
        let mut rng = Rng::stream(cfg.seed, &format!("gradsuite/{}", loss.name()));
        let mut check = LossCheck {
            loss,
            configs: 0,
            checked: 0,
            skipped: 0,
            max_rel_err: 0.0,
            passed: true,
        };
        for _ in 0..cfg.configs_per_loss {
            let case = Case::random(loss, &mut rng);
            let r = check_case(&case, cfg)?;
            check.configs += 1;
            check.checked += r.checked;
            check.skipped += r.skipped;
            check.max_rel_err = check.max_rel_err.max(r.max_rel_err);
        }
        check.passed = check.checked > 0 && check.max_rel_err <= cfg.tolerance;
        losses.push(check);
    }
    Ok(GradSuiteReport {
        seed: cfg.seed,
        eps: cfg.eps,
        tolerance: cfg.tolerance,
        losses,
    })
}
