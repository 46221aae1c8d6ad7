//! Retrieval evaluation: ranking, class-based mAP and pair-based top-k
//! accuracy, in both directions (image → text and text → image).
//!
//! Galleries are ranked by ascending squared Euclidean distance to the query;
//! equal distances keep ascending gallery index. Under truncation at `L`, the
//! average precision is normalized by `min(|relevant|, L)`.

use serde::{Serialize, Serializer};

use crate::common_space::GeneratorPair;
use crate::datagen::MultimodalDataset;
use crate::error::{CmstError, Result};
use crate::nn::{squared_distance, Matrix};

/// Gallery indices ordered from best to worst match.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RankedList {
    pub query: usize,
    pub order: Vec<usize>,
}

pub fn rank_gallery(query_index: usize, query: &[f64], gallery: &Matrix<f64>) -> Result<RankedList> {
    if gallery.rows() == 0 {
        return Err(CmstError::Input("cannot rank an empty gallery".into()));
    }
    if gallery.cols() != query.len() {
        return Err(CmstError::shape("rank_gallery", gallery.cols(), query.len()));
    }
    let dist: Vec<f64> = gallery.iter_rows().map(|g| squared_distance(query, g)).collect();
    let mut order: Vec<usize> = (0..gallery.rows()).collect();
    order.sort_by(|&a, &b| dist[a].total_cmp(&dist[b]).then(a.cmp(&b)));
    Ok(RankedList {
        query: query_index,
        order,
    })
}

/// Average precision of one ranking, or `None` when nothing is relevant.
pub fn average_precision(ranked: &RankedList, relevant: &[usize], truncation: Option<usize>) -> Option<f64> {
    let mut mask = vec![false; ranked.order.len()];
    for &r in relevant {
        if r < mask.len() {
            mask[r] = true;
        }
    }
    ap_masked(&ranked.order, &mask, relevant.len(), truncation)
}

fn ap_masked(order: &[usize], relevant: &[bool], n_relevant: usize, truncation: Option<usize>) -> Option<f64> {
    if n_relevant == 0 {
        return None;
    }
    let cutoff = truncation.map_or(order.len(), |l| l.min(order.len()));
    let mut hits = 0usize;
    let mut sum = 0.0;
    for (pos, &g) in order[..cutoff].iter().enumerate() {
        if relevant[g] {
            hits += 1;
            sum += hits as f64 / (pos + 1) as f64;
        }
    }
    let denom = truncation.map_or(n_relevant, |l| n_relevant.min(l));
    Some(sum / denom as f64)
}

/// Mean average precision with class-label relevance. Queries without any
/// relevant gallery item are skipped.
pub fn map_score(
    queries: &Matrix<f64>,
    gallery: &Matrix<f64>,
    query_labels: &[usize],
    gallery_labels: &[usize],
    truncation: Option<usize>,
) -> Result<f64> {
    if query_labels.len() != queries.rows() || gallery_labels.len() != gallery.rows() {
        return Err(CmstError::shape(
            "map_score",
            format!("{} query / {} gallery labels", queries.rows(), gallery.rows()),
            format!("{} / {}", query_labels.len(), gallery_labels.len()),
        ));
    }
    let mut total = 0.0;
    let mut counted = 0usize;
    let mut mask = vec![false; gallery.rows()];
    for (q, row) in queries.iter_rows().enumerate() {
        let ranked = rank_gallery(q, row, gallery)?;
        let mut n_rel = 0;
        for (m, &gl) in mask.iter_mut().zip(gallery_labels) {
            *m = gl == query_labels[q];
            n_rel += usize::from(*m);
        }
        if let Some(ap) = ap_masked(&ranked.order, &mask, n_rel, truncation) {
            total += ap;
            counted += 1;
        }
    }
    if counted == 0 {
        return Err(CmstError::Input("no query has a relevant gallery item".into()));
    }
    Ok(total / counted as f64)
}

/// 1-based rank of each query's partner `pair_ids[q]` in its ranking.
fn partner_ranks(queries: &Matrix<f64>, gallery: &Matrix<f64>, pair_ids: &[usize]) -> Result<Vec<usize>> {
    if pair_ids.len() != queries.rows() {
        return Err(CmstError::shape("topk_pair_accuracy", queries.rows(), pair_ids.len()));
    }
    let mut seen = vec![false; gallery.rows()];
    for &p in pair_ids {
        if p >= gallery.rows() || std::mem::replace(&mut seen[p], true) {
            return Err(CmstError::Input("pair ids must map queries one-to-one onto the gallery".into()));
        }
    }
    queries
        .iter_rows()
        .enumerate()
        .map(|(q, row)| {
            let ranked = rank_gallery(q, row, gallery)?;
            Ok(ranked.order.iter().position(|&g| g == pair_ids[q]).expect("partner in gallery") + 1)
        })
        .collect()
}

fn check_k(k: usize, gallery: usize) -> Result<()> {
    if k < 1 || k > gallery {
        return Err(CmstError::Input(format!("k must lie in 1..={gallery}, got {k}")));
    }
    Ok(())
}

/// Fraction of queries whose paired gallery item is within the top `k`.
pub fn topk_pair_accuracy(queries: &Matrix<f64>, gallery: &Matrix<f64>, pair_ids: &[usize], k: usize) -> Result<f64> {
    check_k(k, gallery.rows())?;
    let ranks = partner_ranks(queries, gallery, pair_ids)?;
    Ok(ranks.iter().filter(|&&r| r <= k).count() as f64 / ranks.len().max(1) as f64)
}

/// Metric value printed with exactly six decimals.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Fixed6(pub f64);

impl Serialize for Fixed6 {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        let raw = serde_json::value::RawValue::from_string(format!("{:.6}", self.0)).map_err(serde::ser::Error::custom)?;
        raw.serialize(s)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MapRow {
    /// `None` means the full ranking.
    pub truncation: Option<usize>,
    pub img2txt: Fixed6,
    pub txt2img: Fixed6,
    pub avg: Fixed6,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TopkRow {
    pub k: usize,
    pub img2txt: Fixed6,
    pub txt2img: Fixed6,
    pub avg: Fixed6,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ReportMeta {
    pub seed: u64,
    pub config_hash: String,
    pub n_queries: usize,
    pub distance: &'static str,
    pub tie_break: &'static str,
    pub ap_denominator: &'static str,
    pub gallery: &'static str,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RetrievalReport {
    pub map: Vec<MapRow>,
    pub topk: Vec<TopkRow>,
    pub metadata: ReportMeta,
}

impl RetrievalReport {
    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("report serializes");
        s.push('\n');
        s
    }

    /// mAP row for a truncation level.
    pub fn map_at(&self, truncation: Option<usize>) -> Option<&MapRow> {
        self.map.iter().find(|r| r.truncation == truncation)
    }

    /// Average mAP of the first reported truncation level.
    pub fn map_avg(&self) -> f64 {
        self.map.first().map_or(f64::NAN, |r| r.avg.0)
    }

    pub fn topk_at(&self, k: usize) -> Option<&TopkRow> {
        self.topk.iter().find(|r| r.k == k)
    }

    /// Human-readable table in Img2txt / Txt2Img / Avg. column order.
    pub fn summary_table(&self) -> String {
        let mut out = String::new();
        out.push_str(&format!("{:<14}{:>10}{:>10}{:>10}\n", "metric", "Img2txt", "Txt2Img", "Avg."));
        for r in &self.map {
            let name = match r.truncation {
                Some(l) => format!("mAP@{l}"),
                None => "mAP".to_string(),
            };
            out.push_str(&format!("{:<14}{:>10.3}{:>10.3}{:>10.3}\n", name, r.img2txt.0, r.txt2img.0, r.avg.0));
        }
        for r in &self.topk {
            out.push_str(&format!(
                "{:<14}{:>10.3}{:>10.3}{:>10.3}\n",
                format!("top-{} acc", r.k),
                r.img2txt.0,
                r.txt2img.0,
                r.avg.0
            ));
        }
        out
    }
}

/// Evaluates paired embeddings: row `i` of `s_v` and row `i` of `s_t` form a
/// pair with label `labels[i]`. Each modality queries the full other one.
pub fn evaluate_embeddings(
    s_v: &Matrix<f64>,
    s_t: &Matrix<f64>,
    labels: &[usize],
    ks: &[usize],
    truncations: &[Option<usize>],
    seed: u64,
    config_hash: &str,
) -> Result<RetrievalReport> {
    if s_v.shape() != s_t.shape() || labels.len() != s_v.rows() {
        return Err(CmstError::shape(
            "evaluate_embeddings",
            format!("{:?} and {} labels", s_v.shape(), s_v.rows()),
            format!("{:?} and {} labels", s_t.shape(), labels.len()),
        ));
    }
    let n = s_v.rows();
    for &k in ks {
        check_k(k, n)?;
    }
    let mut map = Vec::with_capacity(truncations.len());
    for &tr in truncations {
        let i2t = map_score(s_v, s_t, labels, labels, tr)?;
        let t2i = map_score(s_t, s_v, labels, labels, tr)?;
        map.push(MapRow {
            truncation: tr,
            img2txt: Fixed6(i2t),
            txt2img: Fixed6(t2i),
            avg: Fixed6((i2t + t2i) / 2.0),
        });
    }
    let ids: Vec<usize> = (0..n).collect();
    let ranks_i2t = partner_ranks(s_v, s_t, &ids)?;
    let ranks_t2i = partner_ranks(s_t, s_v, &ids)?;
    let acc = |ranks: &[usize], k: usize| ranks.iter().filter(|&&r| r <= k).count() as f64 / n.max(1) as f64;
    let topk = ks
        .iter()
        .map(|&k| {
            let (a, b) = (acc(&ranks_i2t, k), acc(&ranks_t2i, k));
            TopkRow {
                k,
                img2txt: Fixed6(a),
                txt2img: Fixed6(b),
                avg: Fixed6((a + b) / 2.0),
            }
        })
        .collect();
    Ok(RetrievalReport {
        map,
        topk,
        metadata: ReportMeta {
            seed,
            config_hash: config_hash.to_string(),
            n_queries: n,
            distance: "squared_euclidean",
            tie_break: "ascending_gallery_index",
            ap_denominator: "min(n_relevant, truncation)",
            gallery: "full_opposite_modality_test_split",
        },
    })
}

/// Projects the test split through the generators and evaluates it.
pub fn evaluate(
    generators: &GeneratorPair<f64>,
    dataset: &MultimodalDataset,
    ks: &[usize],
    truncations: &[Option<usize>],
    seed: u64,
    config_hash: &str,
) -> Result<RetrievalReport> {
    let test = dataset.test_indices();
    if test.is_empty() {
        return Err(CmstError::Input("dataset has an empty test split".into()));
    }
    let (s_v, s_t) = generators.project(&dataset.v.select_rows(test), &dataset.t.select_rows(test))?;
    let all_labels = dataset.labels();
    let labels: Vec<usize> = test.iter().map(|&i| all_labels[i]).collect();
    evaluate_embeddings(&s_v, &s_t, &labels, ks, truncations, seed, config_hash)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn list(order: &[usize]) -> RankedList {
        RankedList {
            query: 0,
            order: order.to_vec(),
        }
    }

    #[test]
    fn ranking_basics() {
        let g = Matrix::from_rows(&[[10.0, 10.0], [1.0, 2.0]]).unwrap();
        assert_eq!(rank_gallery(0, &[1.0, 2.0], &g).unwrap().order, vec![1, 0]);
        let tie = Matrix::from_rows(&[[1.0, 0.0], [-1.0, 0.0], [0.0, 1.0]]).unwrap();
        assert_eq!(rank_gallery(0, &[0.0, 0.0], &tie).unwrap().order, vec![0, 1, 2]);
        assert!(rank_gallery(0, &[0.0], &Matrix::zeros(0, 1)).is_err());
    }

    #[test]
    fn ap_examples() {
        assert_eq!(average_precision(&list(&[2, 0, 1]), &[2, 0], None), Some(1.0));
        let ap = average_precision(&list(&[0, 1, 2]), &[0, 2], None).unwrap();
        assert!((ap - 5.0 / 6.0).abs() <= 1e-12);
        let ap = average_precision(&list(&[0, 1, 2]), &[0, 2], Some(2)).unwrap();
        assert!((ap - 0.5).abs() <= 1e-12);
        assert_eq!(average_precision(&list(&[0, 1]), &[], None), None);
    }

    #[test]
    fn map_all_relevant_is_one() {
        let q = Matrix::from_rows(&[[0.0], [1.0]]).unwrap();
        let g = Matrix::from_rows(&[[3.0], [-2.0], [0.5]]).unwrap();
        assert_eq!(map_score(&q, &g, &[1, 1], &[1, 1, 1], None).unwrap(), 1.0);
        assert!(map_score(&q, &g, &[0, 0], &[1, 1, 1], None).is_err());
    }

    #[test]
    fn topk_examples_and_errors() {
        let s = Matrix::from_rows(&[[0.0, 0.0], [5.0, 0.0], [0.0, 5.0]]).unwrap();
        assert_eq!(topk_pair_accuracy(&s, &s, &[0, 1, 2], 1).unwrap(), 1.0);
        let shuffled = s.select_rows(&[2, 0, 1]);
        assert_eq!(topk_pair_accuracy(&s, &shuffled, &[1, 2, 0], 1).unwrap(), 1.0);
        assert_eq!(topk_pair_accuracy(&s, &shuffled, &[0, 1, 2], 3).unwrap(), 1.0);
        assert!(topk_pair_accuracy(&s, &s, &[0, 1, 2], 0).is_err());
        assert!(topk_pair_accuracy(&s, &s, &[0, 1, 2], 4).is_err());
        assert!(topk_pair_accuracy(&s, &s, &[0, 0, 2], 1).is_err());
    }

    #[test]
    fn report_json_is_fixed_point() {
        let s = Matrix::from_rows(&[[0.0], [1.0], [5.0], [6.0]]).unwrap();
        let r = evaluate_embeddings(&s, &s, &[0, 0, 1, 1], &[1, 2], &[None, Some(50)], 7, "abc").unwrap();
        assert_eq!(r.map_avg(), 1.0);
        let json = r.to_json();
        assert!(json.contains("\"img2txt\": 1.000000"));
        let pos = |k: &str| json.find(k).unwrap();
        assert!(pos("\"map\"") < pos("\"topk\"") && pos("\"topk\"") < pos("\"metadata\""));
        let parsed: serde_json::Value = serde_json::from_str(&json).unwrap();
        assert_eq!(parsed["topk"][0]["k"], 1);
    }
}
