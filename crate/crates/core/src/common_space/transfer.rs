//! Transfer of intra-modal distances onto cross-modal distances.
//!
//! A triple `(i, j, direction)` links one intra-modal distance to two
//! cross-modal ones. For the image direction the anchor is `t_j`:
//!
//! * `intra  = s(v_i, v_j)` from the image similarity net,
//! * `paired = s(v_j, t_j)` in the common space,
//! * `cross  = s(v_i, t_j)` in the common space.
//!
//! The text direction swaps the roles of the two modalities.

use serde::{Deserialize, Serialize};

use crate::error::{CmstError, Result};
use crate::nn::{Matrix, Rng};
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TransferMode {
    Value,
    Difference,
    Product,
    None,
}

impl TransferMode {
    pub const ALL: [TransferMode; 4] = [
        TransferMode::Value,
        TransferMode::Difference,
        TransferMode::Product,
        TransferMode::None,
    ];

    pub fn name(self) -> &'static str {
        match self {
            TransferMode::Value => "value",
            TransferMode::Difference => "difference",
            TransferMode::Product => "product",
            TransferMode::None => "none",
        }
    }
}

impl std::str::FromStr for TransferMode {
    type Err = CmstError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "value" => Ok(TransferMode::Value),
            "difference" => Ok(TransferMode::Difference),
            "product" => Ok(TransferMode::Product),
            "none" => Ok(TransferMode::None),
            other => Err(CmstError::config("transfer", format!("unknown transfer mode `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TransferDirection {
    /// Image distances guide text-anchored cross distances.
    ImageIntra,
    /// Text distances guide image-anchored cross distances.
    TextIntra,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct TransferTriple {
    pub anchor: usize,
    pub reference: usize,
    pub direction: TransferDirection,
}

/// The three distances one triple compares.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TransferTerms<T> {
    /// `s(v_i, v_j)`
    pub intra: T,
    /// `s(v_j, t_j)`
    pub paired: T,
    /// `s(v_i, t_j)`
    pub cross: T,
}

/// Partial derivatives of a mean transfer loss with respect to each term.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct TermGrads<T> {
    pub intra: T,
    pub paired: T,
    pub cross: T,
}

/// Distance used in the common space.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum CrossMetric {
    #[default]
    SquaredEuclidean,
    Euclidean,
}

impl CrossMetric {
    pub fn distance<T: Scalar>(self, a: &[T], b: &[T]) -> T {
        let sq = crate::nn::squared_distance(a, b);
        match self {
            CrossMetric::SquaredEuclidean => sq,
            CrossMetric::Euclidean => sq.sqrt(),
        }
    }

    /// Adds `upstream · ∂distance/∂a` to `grad_a` and the mirror to `grad_b`.
    fn accumulate<T: Scalar>(self, a: &[T], b: &[T], upstream: T, grad_a: &mut [T], grad_b: &mut [T]) {
        let k = match self {
            CrossMetric::SquaredEuclidean => T::lit(2.0),
            CrossMetric::Euclidean => {
                let d = crate::nn::squared_distance(a, b).sqrt();
                if d > T::zero() {
                    T::one() / d
                } else {
                    T::zero()
                }
            }
        };
        for c in 0..a.len() {
            let g = upstream * k * (a[c] - b[c]);
            grad_a[c] += g;
            grad_b[c] -= g;
        }
    }
}

/// Squared Euclidean distance between two common-space vectors.
pub fn cross_similarity<T: Scalar>(a: &[T], b: &[T]) -> Result<T> {
    if a.len() != b.len() {
        return Err(CmstError::shape("cross_similarity", a.len(), b.len()));
    }
    Ok(crate::nn::squared_distance(a, b))
}

#[inline]
fn sign<T: Scalar>(x: T) -> T {
    if x > T::zero() {
        T::one()
    } else if x < T::zero() {
        -T::one()
    } else {
        T::zero()
    }
}

fn mean_of<T: Scalar>(terms: &[TransferTerms<T>], f: impl Fn(&TransferTerms<T>) -> T) -> T {
    if terms.is_empty() {
        return T::zero();
    }
    terms.iter().map(f).fold(T::zero(), |a, b| a + b) / T::lit(terms.len() as f64)
}

/// Mean of `|c_self − paired| + |intra − cross|`.
pub fn transfer_loss_value<T: Scalar>(terms: &[TransferTerms<T>], c_self: T) -> T {
    mean_of(terms, |t| (c_self - t.paired).abs() + (t.intra - t.cross).abs())
}

/// Mean of `|(paired − cross) − (c_self − intra)|`.
pub fn transfer_loss_difference<T: Scalar>(terms: &[TransferTerms<T>], c_self: T) -> T {
    mean_of(terms, |t| ((t.paired - t.cross) - (c_self - t.intra)).abs())
}

/// Mean of `|cross − intra·paired|`, with the product clamped to
/// `[-clamp, clamp]` when a clamp is given.
pub fn transfer_loss_product<T: Scalar>(terms: &[TransferTerms<T>], clamp: Option<T>) -> T {
    mean_of(terms, |t| (t.cross - clamp_product(t.intra * t.paired, clamp)).abs())
}

fn clamp_product<T: Scalar>(p: T, clamp: Option<T>) -> T {
    match clamp {
        Some(c) => p.max(-c).min(c),
        None => p,
    }
}

/// Loss value, per-term gradients, and kink arguments for `mode`.
pub fn transfer_loss_and_grad<T: Scalar>(
    mode: TransferMode,
    terms: &[TransferTerms<T>],
    c_self: T,
    clamp: Option<T>,
) -> (T, Vec<TermGrads<T>>, Vec<T>) {
    let n = T::lit(terms.len().max(1) as f64);
    let mut grads = Vec::with_capacity(terms.len());
    let mut kinks = Vec::new();
    let loss = match mode {
        TransferMode::None => {
            grads.resize(terms.len(), TermGrads::default());
            T::zero()
        }
        TransferMode::Value => {
            for t in terms {
                let a = c_self - t.paired;
                let b = t.intra - t.cross;
                kinks.extend([a, b]);
                let (sa, sb) = (sign(a) / n, sign(b) / n);
                grads.push(TermGrads {
                    intra: sb,
                    paired: -sa,
                    cross: -sb,
                });
            }
            transfer_loss_value(terms, c_self)
        }
        TransferMode::Difference => {
            for t in terms {
                let r = (t.paired - t.cross) - (c_self - t.intra);
                kinks.push(r);
                let s = sign(r) / n;
                grads.push(TermGrads {
                    intra: s,
                    paired: s,
                    cross: -s,
                });
            }
            transfer_loss_difference(terms, c_self)
        }
        TransferMode::Product => {
            for t in terms {
                let p = t.intra * t.paired;
                let r = t.cross - clamp_product(p, clamp);
                kinks.push(r);
                let s = sign(r) / n;
                let inside = match clamp {
                    Some(c) => {
                        kinks.extend([c - p, p + c]);
                        p < c && p > -c
                    }
                    None => true,
                };
                let (gi, gp) = if inside { (-s * t.paired, -s * t.intra) } else { (T::zero(), T::zero()) };
                grads.push(TermGrads {
                    intra: gi,
                    paired: gp,
                    cross: s,
                });
            }
            transfer_loss_product(terms, clamp)
        }
    };
    (loss, grads, kinks)
}

/// Settings shared by every transfer evaluation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TransferSettings<T> {
    pub mode: TransferMode,
    pub c_self: T,
    pub metric: CrossMetric,
    pub product_clamp: Option<T>,
}

/// Transfer loss over batch-local triples together with its gradients with
/// respect to the common-space rows and the intra-modal distances.
#[derive(Debug, Clone)]
pub struct TransferEval<T> {
    pub loss: T,
    pub terms: Vec<TransferTerms<T>>,
    pub grad_s_v: Matrix<T>,
    pub grad_s_t: Matrix<T>,
    pub grad_intra: Vec<T>,
    pub kinks: Vec<T>,
}

/// Evaluates the transfer loss for `triples` whose indices address rows of
/// `s_v` and `s_t`; `intra[k]` is the intra-modal distance of triple `k`.
pub fn transfer_forward<T: Scalar>(
    triples: &[TransferTriple],
    intra: &[T],
    s_v: &Matrix<T>,
    s_t: &Matrix<T>,
    settings: &TransferSettings<T>,
) -> Result<TransferEval<T>> {
    if intra.len() != triples.len() {
        return Err(CmstError::shape("transfer_forward", triples.len(), intra.len()));
    }
    if s_v.shape() != s_t.shape() {
        return Err(CmstError::shape(
            "transfer_forward",
            format!("{:?}", s_v.shape()),
            format!("{:?}", s_t.shape()),
        ));
    }
    let n = s_v.rows();
    if let Some(bad) = triples.iter().find(|t| t.anchor >= n || t.reference >= n || t.anchor == t.reference) {
        return Err(CmstError::Input(format!("invalid transfer triple {bad:?} for batch of {n}")));
    }
    let metric = settings.metric;
    // rows of the modality whose intra distance is used, and of the anchor modality
    let sides = |t: &TransferTriple| match t.direction {
        TransferDirection::ImageIntra => (s_v, s_t),
        TransferDirection::TextIntra => (s_t, s_v),
    };
    let terms: Vec<TransferTerms<T>> = triples
        .iter()
        .zip(intra)
        .map(|(t, &s_intra)| {
            let (src, anchor) = sides(t);
            TransferTerms {
                intra: s_intra,
                paired: metric.distance(src.row(t.anchor), anchor.row(t.anchor)),
                cross: metric.distance(src.row(t.reference), anchor.row(t.anchor)),
            }
        })
        .collect();
    let (loss, term_grads, mut kinks) =
        transfer_loss_and_grad(settings.mode, &terms, settings.c_self, settings.product_clamp);
    let mut grad_s_v = Matrix::zeros(n, s_v.cols());
    let mut grad_s_t = Matrix::zeros(n, s_t.cols());
    let d = s_v.cols();
    let mut ga = vec![T::zero(); d];
    let mut gb = vec![T::zero(); d];
    for (t, g) in triples.iter().zip(&term_grads) {
        if settings.mode == TransferMode::None {
            break;
        }
        let (src, anchor) = sides(t);
        let (src_grad, anchor_grad) = match t.direction {
            TransferDirection::ImageIntra => (&mut grad_s_v, &mut grad_s_t),
            TransferDirection::TextIntra => (&mut grad_s_t, &mut grad_s_v),
        };
        for (rows, up) in [((t.anchor, t.anchor), g.paired), ((t.reference, t.anchor), g.cross)] {
            ga.iter_mut().for_each(|x| *x = T::zero());
            gb.iter_mut().for_each(|x| *x = T::zero());
            metric.accumulate(src.row(rows.0), anchor.row(rows.1), up, &mut ga, &mut gb);
            crate::nn::matrix::axpy(T::one(), &ga, src_grad.row_mut(rows.0));
            crate::nn::matrix::axpy(T::one(), &gb, anchor_grad.row_mut(rows.1));
        }
    }
    if metric == CrossMetric::Euclidean {
        kinks.extend(terms.iter().flat_map(|t| [t.paired, t.cross]));
    }
    Ok(TransferEval {
        loss,
        grad_intra: term_grads.iter().map(|g| g.intra).collect(),
        terms,
        grad_s_v,
        grad_s_t,
        kinks,
    })
}

/// Uniform `(reference i, anchor j)` pairs with `i ≠ j` over `0..n`, half in
/// each direction (the image direction takes the odd one out).
pub fn sample_transfer_triples(n: usize, count: usize, rng: &mut Rng) -> Result<Vec<TransferTriple>> {
    if n < 2 {
        return Err(CmstError::Input(format!("transfer triples need at least 2 items, got {n}")));
    }
    let image = count.div_ceil(2);
    Ok((0..count)
        .map(|k| {
            let anchor = rng.below(n);
            let r = rng.below(n - 1);
            let reference = if r >= anchor { r + 1 } else { r };
            TransferTriple {
                anchor,
                reference,
                direction: if k < image {
                    TransferDirection::ImageIntra
                } else {
                    TransferDirection::TextIntra
                },
            }
        })
        .collect())
}
