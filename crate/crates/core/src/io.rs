//! Feature files and synthetic data.
//!
//! # Feature file layout (version 1)
//!
//! All integers and reals are little-endian.
//!
//! | offset | size | field |
//! |---|---|---|
//! | 0 | 4 | magic `LRPF` |
//! | 4 | 4 | version `u32` (1) |
//! | 8 | 4 | dtype tag `u32` (1 = real64; 2 is reserved for real32) |
//! | 12 | 4 | `d: u32`, features per record |
//! | 16 | 8 | `n: u64`, record count |
//! | 24 | `n (4 + 8d)` | records: `label: u32` then `d` values `f64` |
//! | end - 8 | 8 | 64-bit FNV-1a of the record bytes |

use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::codec::{fnv1a64, ByteReader, ByteWriter};
use crate::error::{Error, Result};
use crate::lift::FeatureBlock;
use crate::linalg::{self, Matrix};

pub const FEATURE_MAGIC: &[u8; 4] = b"LRPF";
pub const FEATURE_VERSION: u32 = 1;
pub const DTYPE_F64: u32 = 1;
pub const DTYPE_F32_RESERVED: u32 = 2;
const HEADER_LEN: usize = 24;

/// Labelled samples stored column-wise: `features` is `d x n`.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureFile {
    pub labels: Vec<u32>,
    pub features: Matrix,
}

impl FeatureFile {
    pub fn new(features: Matrix, labels: Vec<u32>) -> Result<Self> {
        if labels.len() != features.ncols() {
            return Err(Error::invalid_arg(format!(
                "{} labels for {} samples",
                labels.len(),
                features.ncols()
            )));
        }
        if features.nrows() > u32::MAX as usize {
            return Err(Error::invalid_arg("feature dimension does not fit in u32"));
        }
        Ok(Self { labels, features })
    }

    pub fn empty(dim: usize) -> Self {
        Self {
            labels: Vec::new(),
            features: Matrix::zeros(dim, 0),
        }
    }

    pub fn dim(&self) -> usize {
        self.features.nrows()
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Distinct labels in ascending order.
    pub fn classes(&self) -> Vec<u32> {
        let mut c = self.labels.clone();
        c.sort_unstable();
        c.dedup();
        c
    }

    /// Samples whose label is in `classes`, in file order.
    pub fn select_classes(&self, classes: &[u32]) -> FeatureFile {
        let idx: Vec<usize> = (0..self.len()).filter(|&i| classes.contains(&self.labels[i])).collect();
        self.select(&idx)
    }

    pub fn select(&self, idx: &[usize]) -> FeatureFile {
        FeatureFile {
            labels: idx.iter().map(|&i| self.labels[i]).collect(),
            features: self.features.select_columns(idx),
        }
    }

    pub fn to_block(&self, task_id: usize) -> Result<FeatureBlock> {
        FeatureBlock::new(self.features.clone(), self.labels.clone(), task_id)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let d = self.dim();
        let n = self.len();
        let mut w = ByteWriter::with_capacity(HEADER_LEN + n * (4 + 8 * d) + 8);
        w.bytes(FEATURE_MAGIC);
        w.u32(FEATURE_VERSION);
        w.u32(DTYPE_F64);
        w.u32(d as u32);
        w.u64(n as u64);
        for (j, col) in self.features.column_iter().enumerate() {
            w.u32(self.labels[j]);
            w.f64s(col.as_slice());
        }
        let bytes = w.into_inner();
        let sum = fnv1a64(&bytes[HEADER_LEN..]);
        let mut out = bytes;
        out.extend_from_slice(&sum.to_le_bytes());
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = ByteReader::new(bytes);
        let magic = r.take(4).map_err(|_| Error::format(0, "file too short for a header"))?;
        if magic != FEATURE_MAGIC {
            return Err(Error::format(0, "bad magic (expected LRPF)"));
        }
        let version = r.u32()?;
        if version != FEATURE_VERSION {
            return Err(Error::format(4, format!("unsupported version {version}")));
        }
        let dtype = r.u32()?;
        if dtype != DTYPE_F64 {
            return Err(Error::format(8, format!("unsupported dtype tag {dtype}")));
        }
        let d = r.u32()? as usize;
        let n = r.u64()?;
        let record = 4 + 8 * d as u64;
        let expected = n
            .checked_mul(record)
            .and_then(|p| p.checked_add((HEADER_LEN + 8) as u64))
            .ok_or_else(|| Error::format(16, format!("record count {n} overflows")))?;
        let actual = bytes.len() as u64;
        if actual < expected {
            return Err(Error::format(
                actual,
                format!("file truncated: {expected} bytes expected, checksum missing or payload short"),
            ));
        }
        if actual > expected {
            return Err(Error::format(expected, format!("{} trailing bytes", actual - expected)));
        }
        let n = n as usize;
        let payload_end = HEADER_LEN + n * record as usize;
        let stored = u64::from_le_bytes(bytes[payload_end..].try_into().expect("8 bytes"));
        if fnv1a64(&bytes[HEADER_LEN..payload_end]) != stored {
            return Err(Error::format(payload_end as u64, "checksum mismatch"));
        }
        let mut labels = Vec::with_capacity(n);
        let mut data = Vec::with_capacity(n * d);
        for _ in 0..n {
            labels.push(r.u32()?);
            data.extend(r.f64s(d)?);
        }
        Ok(Self {
            labels,
            features: Matrix::from_vec(d, n, data),
        })
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.to_bytes())?;
        Ok(())
    }
}

pub fn read_features(path: impl AsRef<Path>) -> Result<FeatureFile> {
    FeatureFile::read(path)
}

pub fn write_features(path: impl AsRef<Path>, data: &FeatureFile) -> Result<()> {
    data.write(path)
}

/// Checksum of a whole file, recorded in manifests.
pub fn file_digest(path: impl AsRef<Path>) -> Result<String> {
    Ok(format!("{:016x}", fnv1a64(&fs::read(path)?)))
}

/// Singular values to plant.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SpectrumSpec {
    Explicit(Vec<f64>),
    /// `count` values spaced geometrically from `max` down to `min`.
    Geometric { count: usize, max: f64, min: f64 },
    /// A geometric head followed by a block of equal small values.
    Tail {
        count: usize,
        max: f64,
        min: f64,
        tail_count: usize,
        tail_value: f64,
    },
}

impl SpectrumSpec {
    pub fn values(&self) -> Result<Vec<f64>> {
        let geometric = |count: usize, max: f64, min: f64| -> Result<Vec<f64>> {
            if count == 0 || !(max > 0.0) || !(min > 0.0) || min > max {
                return Err(Error::invalid_arg(format!(
                    "geometric spectrum needs count >= 1 and 0 < min <= max (got {count}, {min}, {max})"
                )));
            }
            if count == 1 {
                return Ok(vec![max]);
            }
            let ratio = (min / max).ln() / (count - 1) as f64;
            Ok((0..count).map(|i| max * (ratio * i as f64).exp()).collect())
        };
        let v = match self {
            SpectrumSpec::Explicit(v) => v.clone(),
            SpectrumSpec::Geometric { count, max, min } => geometric(*count, *max, *min)?,
            SpectrumSpec::Tail {
                count,
                max,
                min,
                tail_count,
                tail_value,
            } => {
                let mut v = geometric(*count, *max, *min)?;
                v.extend(std::iter::repeat(*tail_value).take(*tail_count));
                v
            }
        };
        if v.is_empty() {
            return Err(Error::invalid_arg("empty spectrum"));
        }
        if let Some(x) = v.iter().find(|x| !(**x >= 0.0) || !x.is_finite()) {
            return Err(Error::invalid_arg(format!("invalid singular value {x}")));
        }
        Ok(v)
    }
}

fn default_scale() -> f64 {
    1.0
}

/// Recipe for a synthetic train/test pair.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "model", rename_all = "kebab-case")]
pub enum SyntheticSpec {
    /// Isotropic Gaussian clusters whose means are `separation * sigma` apart.
    GaussianMixture {
        dim: usize,
        classes: usize,
        train_per_class: usize,
        test_per_class: usize,
        separation: f64,
        sigma: f64,
        seed: u64,
    },
    /// `Y = W* H + noise` with `H = U diag(spectrum) V^T` planted exactly.
    ///
    /// Labels are the row-argmax of `Y`. Test features are
    /// `U diag(spectrum) g / sqrt(train_samples)` with `g ~ N(0, I)`, so the
    /// pool's second moment matches `H H^T / M` in expectation.
    PlantedLinear {
        dim: usize,
        classes: usize,
        train_samples: usize,
        test_samples: usize,
        spectrum: SpectrumSpec,
        nu: f64,
        #[serde(default = "default_scale")]
        w_scale: f64,
        seed: u64,
    },
}

/// Ground truth written next to a planted-linear dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlantedSidecar {
    pub classes: usize,
    pub dim: usize,
    pub nu: f64,
    pub seed: u64,
    pub singular_values: Vec<f64>,
    /// `W*`, row-major `classes x dim`.
    pub w_star: Vec<f64>,
}

impl PlantedSidecar {
    pub fn w_star_matrix(&self) -> Result<Matrix> {
        if self.w_star.len() != self.classes * self.dim {
            return Err(Error::Config("sidecar W* has the wrong size".into()));
        }
        Ok(Matrix::from_row_slice(self.classes, self.dim, &self.w_star))
    }
}

/// A generated dataset. Planted-linear data also carries dense targets
/// (stored as feature files whose records are target vectors) and its sidecar.
#[derive(Debug, Clone)]
pub struct SyntheticData {
    pub train: FeatureFile,
    pub test: FeatureFile,
    pub train_targets: Option<FeatureFile>,
    pub test_targets: Option<FeatureFile>,
    pub sidecar: Option<PlantedSidecar>,
}

pub const TRAIN_FILE: &str = "train.lrpf";
pub const TEST_FILE: &str = "test.lrpf";
pub const TRAIN_TARGETS_FILE: &str = "train_targets.lrpf";
pub const TEST_TARGETS_FILE: &str = "test_targets.lrpf";
pub const SIDECAR_FILE: &str = "planted.json";
pub const SPEC_FILE: &str = "spec.json";

fn gaussian(rows: usize, cols: usize, rng: &mut ChaCha20Rng) -> Matrix {
    Matrix::from_fn(rows, cols, |_, _| StandardNormal.sample(rng))
}

fn orthonormal_columns(rows: usize, cols: usize, rng: &mut ChaCha20Rng) -> Result<Matrix> {
    let (q, _) = linalg::qr_thin(&gaussian(rows, cols, rng))?;
    Ok(q)
}

fn argmax_labels(y: &Matrix) -> Vec<u32> {
    y.column_iter()
        .map(|c| crate::solver::argmax(c.as_slice()).unwrap_or(0) as u32)
        .collect()
}

pub fn gen_synthetic(spec: &SyntheticSpec) -> Result<SyntheticData> {
    match spec {
        SyntheticSpec::GaussianMixture {
            dim,
            classes,
            train_per_class,
            test_per_class,
            separation,
            sigma,
            seed,
        } => gen_mixture(*dim, *classes, *train_per_class, *test_per_class, *separation, *sigma, *seed),
        SyntheticSpec::PlantedLinear {
            dim,
            classes,
            train_samples,
            test_samples,
            spectrum,
            nu,
            w_scale,
            seed,
        } => gen_planted(*dim, *classes, *train_samples, *test_samples, &spectrum.values()?, *nu, *w_scale, *seed),
    }
}

fn gen_mixture(
    dim: usize,
    classes: usize,
    train_per_class: usize,
    test_per_class: usize,
    separation: f64,
    sigma: f64,
    seed: u64,
) -> Result<SyntheticData> {
    if dim == 0 || classes == 0 || train_per_class == 0 {
        return Err(Error::invalid_arg("mixture needs dim, classes and train_per_class >= 1"));
    }
    if !(sigma >= 0.0) || !(separation >= 0.0) {
        return Err(Error::invalid_arg("mixture needs non-negative sigma and separation"));
    }
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    // orthonormal directions when they fit, so pairwise mean distance is exact
    let dirs = if classes <= dim {
        orthonormal_columns(dim, classes, &mut rng)?
    } else {
        let mut g = gaussian(dim, classes, &mut rng);
        for mut c in g.column_iter_mut() {
            let n = c.norm();
            c /= n;
        }
        g
    };
    let means = dirs * (separation * sigma / std::f64::consts::SQRT_2);
    let draw = |per_class: usize, rng: &mut ChaCha20Rng| -> FeatureFile {
        let n = per_class * classes;
        let mut labels: Vec<u32> = (0..n).map(|i| (i % classes) as u32).collect();
        labels.shuffle(rng);
        let mut x = gaussian(dim, n, rng) * sigma;
        for (j, &l) in labels.iter().enumerate() {
            let mut col = x.column_mut(j);
            col += means.column(l as usize);
        }
        FeatureFile { labels, features: x }
    };
    let train = draw(train_per_class, &mut rng);
    let test = draw(test_per_class, &mut rng);
    Ok(SyntheticData {
        train,
        test,
        train_targets: None,
        test_targets: None,
        sidecar: None,
    })
}

#[allow(clippy::too_many_arguments)]
fn gen_planted(
    dim: usize,
    classes: usize,
    train: usize,
    test: usize,
    sigma: &[f64],
    nu: f64,
    w_scale: f64,
    seed: u64,
) -> Result<SyntheticData> {
    let r = sigma.len();
    if dim == 0 || classes == 0 || train == 0 {
        return Err(Error::invalid_arg("planted model needs dim, classes and train_samples >= 1"));
    }
    if r > dim.min(train) {
        return Err(Error::invalid_arg(format!(
            "{r} singular values do not fit a {dim}x{train} matrix"
        )));
    }
    if !(nu >= 0.0) || !nu.is_finite() {
        return Err(Error::invalid_arg(format!("noise level must be non-negative, got {nu}")));
    }
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let u = orthonormal_columns(dim, r, &mut rng)?;
    let v = orthonormal_columns(train, r, &mut rng)?;
    let mut us = u.clone();
    linalg::scale_columns(&mut us, sigma);
    let h = &us * v.transpose();
    let w_star = gaussian(classes, dim, &mut rng) * w_scale;
    let y = &w_star * &h + gaussian(classes, train, &mut rng) * nu;

    let g = gaussian(r, test, &mut rng) / (train as f64).sqrt();
    let h_test = &us * g;
    let y_test = &w_star * &h_test + gaussian(classes, test, &mut rng) * nu;

    let labels = argmax_labels(&y);
    let test_labels = argmax_labels(&y_test);
    let sidecar = PlantedSidecar {
        classes,
        dim,
        nu,
        seed,
        singular_values: sigma.to_vec(),
        w_star: w_star.transpose().as_slice().to_vec(),
    };
    Ok(SyntheticData {
        train: FeatureFile::new(h, labels.clone())?,
        test: FeatureFile::new(h_test, test_labels.clone())?,
        train_targets: Some(FeatureFile::new(y, labels)?),
        test_targets: Some(FeatureFile::new(y_test, test_labels)?),
        sidecar: Some(sidecar),
    })
}

impl SyntheticData {
    /// Writes the dataset files into `dir` and returns the paths written.
    pub fn write_to(&self, dir: impl AsRef<Path>, spec: &SyntheticSpec) -> Result<Vec<PathBuf>> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir)?;
        let mut written = Vec::new();
        let mut put = |name: &str, f: &FeatureFile| -> Result<()> {
            let p = dir.join(name);
            f.write(&p)?;
            written.push(p);
            Ok(())
        };
        put(TRAIN_FILE, &self.train)?;
        put(TEST_FILE, &self.test)?;
        if let Some(t) = &self.train_targets {
            put(TRAIN_TARGETS_FILE, t)?;
        }
        if let Some(t) = &self.test_targets {
            put(TEST_TARGETS_FILE, t)?;
        }
        if let Some(s) = &self.sidecar {
            let p = dir.join(SIDECAR_FILE);
            fs::write(&p, serde_json::to_string_pretty(s)?)?;
            written.push(p);
        }
        let p = dir.join(SPEC_FILE);
        fs::write(&p, serde_json::to_string_pretty(spec)?)?;
        written.push(p);
        Ok(written)
    }
}

pub fn read_sidecar(path: impl AsRef<Path>) -> Result<PlantedSidecar> {
    Ok(serde_json::from_str(&fs::read_to_string(path)?)?)
}
