//! Synthetic paired two-modality datasets and their on-disk format.
//!
//! Every pair shares a latent point drawn around its class prototype. Each
//! modality sees that point through its own fixed random map followed by
//! `tanh` and a little feature noise, so the two modalities are related but
//! not linearly aligned.
//!
//! A dataset directory holds `meta.json` and three matrix files `V.f64`,
//! `T.f64`, `Y.f64`. A matrix file is the 8-byte magic `CMSTMAT1`, rows and
//! cols as little-endian `u32`, then `rows·cols` little-endian `f64` values in
//! row-major order.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{CmstError, Result};
use crate::nn::{squared_distance, Matrix, Rng};

pub const MATRIX_MAGIC: &[u8; 8] = b"CMSTMAT1";
pub const SCHEMA_VERSION: u32 = 1;
const HEADER_LEN: usize = 16;
const PROTOTYPE_RETRIES: usize = 1000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Modality {
    Image,
    Text,
}

impl Modality {
    pub fn other(self) -> Self {
        match self {
            Modality::Image => Modality::Text,
            Modality::Text => Modality::Image,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticConfig {
    pub n_classes: usize,
    pub n_pairs: usize,
    pub d_v: usize,
    pub d_t: usize,
    pub latent_dim: usize,
    /// Minimum pairwise distance between class prototypes in latent space.
    pub class_sep: f64,
    /// Std of each pair's latent offset from its class prototype.
    pub noise_sigma: f64,
    /// Std of the additive noise on the observed features.
    pub feature_noise: f64,
    pub test_fraction: f64,
    pub seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        SyntheticConfig {
            n_classes: 10,
            n_pairs: 1000,
            d_v: 128,
            d_t: 64,
            latent_dim: 16,
            class_sep: 3.0,
            noise_sigma: 0.6,
            feature_noise: 0.05,
            test_fraction: 0.2,
            seed: 0,
        }
    }
}

impl SyntheticConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_classes < 2 {
            return Err(CmstError::config("n_classes", format!("must be at least 2, got {}", self.n_classes)));
        }
        if self.n_pairs < self.n_classes {
            return Err(CmstError::config(
                "n_pairs",
                format!("must be at least n_classes ({}), got {}", self.n_classes, self.n_pairs),
            ));
        }
        for (name, v) in [("d_v", self.d_v), ("d_t", self.d_t), ("latent_dim", self.latent_dim)] {
            if v == 0 {
                return Err(CmstError::config(name, "must be at least 1"));
            }
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return Err(CmstError::config("noise_sigma", "must be finite and non-negative"));
        }
        if !(self.feature_noise >= 0.0 && self.feature_noise.is_finite()) {
            return Err(CmstError::config("feature_noise", "must be finite and non-negative"));
        }
        if !(self.class_sep >= 0.0 && self.class_sep.is_finite()) {
            return Err(CmstError::config("class_sep", "must be finite and non-negative"));
        }
        if !(self.test_fraction > 0.0 && self.test_fraction < 1.0) {
            return Err(CmstError::config("test_fraction", "must lie in (0, 1)"));
        }
        Ok(())
    }
}

/// Paired features `v_i`, `t_i` with a shared one-hot label `y_i`.
#[derive(Debug, Clone, PartialEq)]
pub struct MultimodalDataset {
    pub v: Matrix<f64>,
    pub t: Matrix<f64>,
    pub y: Matrix<f64>,
    pub train: Vec<usize>,
    pub test: Vec<usize>,
    pub seed: u64,
}

impl MultimodalDataset {
    pub fn new(v: Matrix<f64>, t: Matrix<f64>, y: Matrix<f64>, seed: u64) -> Result<Self> {
        let n = v.rows();
        if t.rows() != n || y.rows() != n {
            return Err(CmstError::shape(
                "MultimodalDataset::new",
                format!("{n} rows in V, T, Y"),
                format!("V {n}, T {}, Y {}", t.rows(), y.rows()),
            ));
        }
        check_one_hot(&y)?;
        Ok(MultimodalDataset {
            v,
            t,
            y,
            train: (0..n).collect(),
            test: Vec::new(),
            seed,
        })
    }

    pub fn len(&self) -> usize {
        self.v.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn n_classes(&self) -> usize {
        self.y.cols()
    }

    pub fn features(&self, modality: Modality) -> &Matrix<f64> {
        match modality {
            Modality::Image => &self.v,
            Modality::Text => &self.t,
        }
    }

    /// Class index of every pair.
    pub fn labels(&self) -> Vec<usize> {
        self.y
            .iter_rows()
            .map(|row| row.iter().position(|&x| x == 1.0).expect("one-hot row"))
            .collect()
    }

    pub fn train_indices(&self) -> &[usize] {
        &self.train
    }

    pub fn test_indices(&self) -> &[usize] {
        &self.test
    }
}

fn check_one_hot(y: &Matrix<f64>) -> Result<()> {
    for (r, row) in y.iter_rows().enumerate() {
        let ones = row.iter().filter(|&&x| x == 1.0).count();
        let zeros = row.iter().filter(|&&x| x == 0.0).count();
        if ones != 1 || ones + zeros != row.len() {
            return Err(CmstError::Input(format!("label row {r} is not one-hot")));
        }
    }
    Ok(())
}

/// Generates a dataset and splits it with `cfg.test_fraction`.
pub fn generate_synthetic(cfg: &SyntheticConfig) -> Result<MultimodalDataset> {
    cfg.validate()?;
    let root = Rng::stream(cfg.seed, "datagen");

    let mut proto_rng = root.substream("prototypes");
    let prototypes = draw_prototypes(cfg, &mut proto_rng)?;

    let mut map_rng = root.substream("maps");
    let scale = 1.0 / (cfg.latent_dim as f64).sqrt();
    let a_v = random_map(cfg.d_v, cfg.latent_dim, scale, &mut map_rng);
    let a_t = random_map(cfg.d_t, cfg.latent_dim, scale, &mut map_rng);

    // balanced labels in a random order
    let mut labels: Vec<usize> = (0..cfg.n_pairs).map(|i| i % cfg.n_classes).collect();
    root.substream("labels").shuffle(&mut labels);

    let mut latent_rng = root.substream("latent");
    let mut noise_rng = root.substream("feature-noise");
    let mut v = Matrix::zeros(cfg.n_pairs, cfg.d_v);
    let mut t = Matrix::zeros(cfg.n_pairs, cfg.d_t);
    let mut y = Matrix::zeros(cfg.n_pairs, cfg.n_classes);
    let mut z = vec![0.0; cfg.latent_dim];
    for (i, &label) in labels.iter().enumerate() {
        for (zk, &pk) in z.iter_mut().zip(prototypes.row(label)) {
            *zk = pk + cfg.noise_sigma * latent_rng.normal();
        }
        observe(&a_v, &z, cfg.feature_noise, &mut noise_rng, v.row_mut(i));
        observe(&a_t, &z, cfg.feature_noise, &mut noise_rng, t.row_mut(i));
        y[(i, label)] = 1.0;
    }
    let dataset = MultimodalDataset::new(v, t, y, cfg.seed)?;
    split(dataset, cfg.test_fraction, cfg.seed)
}

fn draw_prototypes(cfg: &SyntheticConfig, rng: &mut Rng) -> Result<Matrix<f64>> {
    let min_sq = cfg.class_sep * cfg.class_sep;
    for _ in 0..PROTOTYPE_RETRIES {
        let p = Matrix::from_vec(
            cfg.n_classes,
            cfg.latent_dim,
            (0..cfg.n_classes * cfg.latent_dim).map(|_| rng.normal()).collect(),
        )?;
        let separated = (0..cfg.n_classes)
            .all(|a| (a + 1..cfg.n_classes).all(|b| squared_distance(p.row(a), p.row(b)) >= min_sq));
        if separated {
            return Ok(p);
        }
    }
    Err(CmstError::config(
        "class_sep",
        format!("no prototype set with separation {} found after {PROTOTYPE_RETRIES} retries", cfg.class_sep),
    ))
}

fn random_map(rows: usize, cols: usize, scale: f64, rng: &mut Rng) -> Matrix<f64> {
    let data = (0..rows * cols).map(|_| scale * rng.normal()).collect();
    Matrix::from_vec(rows, cols, data).expect("sized map")
}

fn observe(map: &Matrix<f64>, z: &[f64], noise: f64, rng: &mut Rng, out: &mut [f64]) {
    for (r, o) in out.iter_mut().enumerate() {
        *o = crate::nn::dot(map.row(r), z).tanh() + noise * rng.normal();
    }
}

/// Stratified train/test split. Each class sends `round(test_fraction · size)`
/// members to the test side, clamped so both sides keep at least one.
pub fn split(mut dataset: MultimodalDataset, test_fraction: f64, seed: u64) -> Result<MultimodalDataset> {
    if !(test_fraction > 0.0 && test_fraction < 1.0) {
        return Err(CmstError::Input(format!("test_fraction must lie in (0, 1), got {test_fraction}")));
    }
    let labels = dataset.labels();
    let mut rng = Rng::stream(seed, "split");
    let mut train = Vec::new();
    let mut test = Vec::new();
    for class in 0..dataset.n_classes() {
        let mut members: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == class).collect();
        if members.is_empty() {
            continue;
        }
        if members.len() < 2 {
            return Err(CmstError::Input(format!(
                "class {class} has {} member(s); splitting needs at least 2",
                members.len()
            )));
        }
        rng.shuffle(&mut members);
        let n_test = ((test_fraction * members.len() as f64).round() as usize).clamp(1, members.len() - 1);
        test.extend_from_slice(&members[..n_test]);
        train.extend_from_slice(&members[n_test..]);
    }
    train.sort_unstable();
    test.sort_unstable();
    dataset.train = train;
    dataset.test = test;
    Ok(dataset)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetMeta {
    pub schema_version: u32,
    pub n: usize,
    pub c: usize,
    pub d_v: usize,
    pub d_t: usize,
    pub seed: u64,
    pub train: Vec<usize>,
    pub test: Vec<usize>,
}

pub fn save_dataset(dataset: &MultimodalDataset, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| CmstError::io(dir, e))?;
    let meta = DatasetMeta {
        schema_version: SCHEMA_VERSION,
        n: dataset.len(),
        c: dataset.n_classes(),
        d_v: dataset.v.cols(),
        d_t: dataset.t.cols(),
        seed: dataset.seed,
        train: dataset.train.clone(),
        test: dataset.test.clone(),
    };
    let mut json = serde_json::to_vec_pretty(&meta)?;
    json.push(b'\n');
    write_file(&dir.join("meta.json"), &json)?;
    write_matrix(&dir.join("V.f64"), &dataset.v)?;
    write_matrix(&dir.join("T.f64"), &dataset.t)?;
    write_matrix(&dir.join("Y.f64"), &dataset.y)?;
    Ok(())
}

pub fn load_dataset(dir: &Path) -> Result<MultimodalDataset> {
    if !dir.is_dir() {
        return Err(CmstError::io(
            dir,
            std::io::Error::new(std::io::ErrorKind::NotFound, "dataset directory not found"),
        ));
    }
    let meta_path = dir.join("meta.json");
    let meta: DatasetMeta = serde_json::from_slice(&read_file(&meta_path)?).map_err(|e| CmstError::BadHeader {
        path: meta_path.clone(),
        reason: e.to_string(),
    })?;
    if meta.schema_version != SCHEMA_VERSION {
        return Err(CmstError::BadHeader {
            path: meta_path,
            reason: format!("unsupported schema_version {}", meta.schema_version),
        });
    }
    let v = read_matrix(&dir.join("V.f64"))?;
    let t = read_matrix(&dir.join("T.f64"))?;
    let y = read_matrix(&dir.join("Y.f64"))?;
    for (name, m, cols) in [("V.f64", &v, meta.d_v), ("T.f64", &t, meta.d_t), ("Y.f64", &y, meta.c)] {
        if m.rows() != meta.n || m.cols() != cols {
            return Err(CmstError::DimensionMismatch {
                path: dir.join(name),
                reason: format!("meta.json says {}×{}, file holds {}×{}", meta.n, cols, m.rows(), m.cols()),
            });
        }
    }
    let mut all: Vec<usize> = meta.train.iter().chain(&meta.test).copied().collect();
    all.sort_unstable();
    if all != (0..meta.n).collect::<Vec<_>>() {
        return Err(CmstError::DimensionMismatch {
            path: meta_path,
            reason: "train/test indices must partition 0..n".into(),
        });
    }
    let mut ds = MultimodalDataset::new(v, t, y, meta.seed)?;
    ds.train = meta.train;
    ds.test = meta.test;
    Ok(ds)
}

pub fn encode_matrix(m: &Matrix<f64>) -> Vec<u8> {
    let mut buf = Vec::with_capacity(HEADER_LEN + 8 * m.data().len());
    buf.extend_from_slice(MATRIX_MAGIC);
    buf.extend_from_slice(&(m.rows() as u32).to_le_bytes());
    buf.extend_from_slice(&(m.cols() as u32).to_le_bytes());
    for x in m.data() {
        buf.extend_from_slice(&x.to_le_bytes());
    }
    buf
}

pub fn decode_matrix(bytes: &[u8], path: &Path) -> Result<Matrix<f64>> {
    if bytes.len() < HEADER_LEN {
        return Err(CmstError::BadHeader {
            path: path.to_path_buf(),
            reason: format!("{} bytes is shorter than the 16-byte header", bytes.len()),
        });
    }
    if &bytes[..8] != MATRIX_MAGIC {
        return Err(CmstError::BadHeader {
            path: path.to_path_buf(),
            reason: format!("magic {:?} is not CMSTMAT1", String::from_utf8_lossy(&bytes[..8])),
        });
    }
    let rows = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes")) as usize;
    let cols = u32::from_le_bytes(bytes[12..16].try_into().expect("4 bytes")) as usize;
    let payload = &bytes[HEADER_LEN..];
    let expected = rows * cols * 8;
    if payload.len() < expected {
        return Err(CmstError::Truncated {
            path: path.to_path_buf(),
            expected,
            found: payload.len(),
        });
    }
    if payload.len() > expected {
        return Err(CmstError::DimensionMismatch {
            path: path.to_path_buf(),
            reason: format!("header says {rows}×{cols} but payload holds {} extra bytes", payload.len() - expected),
        });
    }
    let data = payload
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect();
    Matrix::from_vec(rows, cols, data)
}

pub fn write_matrix(path: &Path, m: &Matrix<f64>) -> Result<()> {
    write_file(path, &encode_matrix(m))
}

pub fn read_matrix(path: &Path) -> Result<Matrix<f64>> {
    decode_matrix(&read_file(path)?, path)
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| CmstError::io(path, e))
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| CmstError::io(PathBuf::from(path), e))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> SyntheticConfig {
        SyntheticConfig {
            n_classes: 4,
            n_pairs: 100,
            d_v: 12,
            d_t: 8,
            latent_dim: 4,
            class_sep: 1.0,
            ..SyntheticConfig::default()
        }
    }

    #[test]
    fn classes_are_balanced() {
        let ds = generate_synthetic(&small()).unwrap();
        let labels = ds.labels();
        for c in 0..4 {
            assert_eq!(labels.iter().filter(|&&l| l == c).count(), 25);
        }
    }

    #[test]
    fn zero_latent_noise_collapses_classes() {
        let cfg = SyntheticConfig {
            noise_sigma: 0.0,
            feature_noise: 0.0,
            ..small()
        };
        let ds = generate_synthetic(&cfg).unwrap();
        let labels = ds.labels();
        for i in 0..ds.len() {
            for j in 0..ds.len() {
                if labels[i] == labels[j] {
                    assert_eq!(ds.v.row(i), ds.v.row(j));
                    assert_eq!(ds.t.row(i), ds.t.row(j));
                }
            }
        }
    }

    #[test]
    fn config_errors_name_the_field() {
        let err = generate_synthetic(&SyntheticConfig { n_classes: 1, ..small() }).unwrap_err();
        assert!(err.to_string().contains("n_classes"));
        let err = generate_synthetic(&SyntheticConfig { class_sep: 1e3, ..small() }).unwrap_err();
        assert!(err.to_string().contains("class_sep"));
        assert!(generate_synthetic(&SyntheticConfig { n_pairs: 3, ..small() }).is_err());
    }

    #[test]
    fn stratified_split() {
        let ds = generate_synthetic(&small()).unwrap();
        assert_eq!(ds.test.len(), 20);
        let labels = ds.labels();
        for c in 0..4 {
            assert_eq!(ds.test.iter().filter(|&&i| labels[i] == c).count(), 5);
        }
        let mut all: Vec<usize> = ds.train.iter().chain(&ds.test).copied().collect();
        all.sort_unstable();
        assert_eq!(all, (0..100).collect::<Vec<_>>());
        let again = split(ds.clone(), 0.2, ds.seed).unwrap();
        assert_eq!(again.test, ds.test);
    }

    #[test]
    fn split_rejects_singleton_class() {
        let y = Matrix::from_rows(&[[1.0, 0.0], [0.0, 1.0], [0.0, 1.0]]).unwrap();
        let ds = MultimodalDataset::new(Matrix::zeros(3, 2), Matrix::zeros(3, 2), y, 0).unwrap();
        assert!(split(ds, 0.5, 0).is_err());
    }

    #[test]
    fn features_are_bounded() {
        let cfg = small();
        let ds = generate_synthetic(&cfg).unwrap();
        let bound = 1.0 + 10.0 * cfg.feature_noise;
        assert!(ds.v.data().iter().chain(ds.t.data()).all(|x| x.abs() <= bound));
    }

    #[test]
    fn matrix_header_errors() {
        let m = Matrix::from_rows(&[[1.0, 2.0], [3.0, 4.0]]).unwrap();
        let p = Path::new("X.f64");
        let mut bytes = encode_matrix(&m);
        assert_eq!(decode_matrix(&bytes, p).unwrap(), m);
        bytes[0] = b'X';
        assert!(matches!(decode_matrix(&bytes, p), Err(CmstError::BadHeader { .. })));
        let bytes = encode_matrix(&m);
        assert!(matches!(
            decode_matrix(&bytes[..bytes.len() - 3], p),
            Err(CmstError::Truncated { .. })
        ));
    }
}
