//! Multilabel datasets on disk and the synthetic correlated-label generator.
//!
//! A dataset directory holds one subdirectory per split, each with
//! `manifest.json`, a little-endian f64 `features.bin` and a `labels.csv`
//! whose header lists the class names. An optional `embeddings.txt` at the
//! top level carries label word vectors.

use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::error::{dim_err, Error, Result};
use crate::label_graph::WordEmbeddings;
use crate::tensor::Tensor;

pub const EMBEDDINGS_FILE: &str = "embeddings.txt";

#[derive(Clone, Debug, PartialEq)]
pub struct MultilabelDataset {
    pub split: String,
    /// `[B, C, H, W]`
    pub features: Tensor,
    /// `[B, K]` of 0/1
    pub labels: Tensor,
    pub class_names: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub split: String,
    pub num_samples: usize,
    /// `[C, H, W]`
    pub sample_shape: Vec<usize>,
    pub num_classes: usize,
    pub dtype: String,
    pub features_file: String,
    pub features_sha256: String,
    pub labels_file: String,
    pub avg_labels_per_image: f64,
}

impl MultilabelDataset {
    pub fn new(
        split: impl Into<String>,
        features: Tensor,
        labels: Tensor,
        class_names: Vec<String>,
    ) -> Result<Self> {
        let (fs, ls) = (features.shape(), labels.shape());
        if fs.len() != 4 || ls.len() != 2 || fs[0] != ls[0] || ls[1] != class_names.len() {
            return Err(dim_err!(
                "features {fs:?}, labels {ls:?} and {} class names do not agree",
                class_names.len()
            ));
        }
        let k = ls[1];
        if let Some(i) = labels.data().iter().position(|&v| v != 0.0 && v != 1.0) {
            return Err(Error::Data(format!(
                "row {}: label {} for class {:?} is not 0 or 1",
                i / k + 1,
                labels.data()[i],
                class_names[i % k]
            )));
        }
        Ok(MultilabelDataset {
            split: split.into(),
            features,
            labels,
            class_names,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn num_classes(&self) -> usize {
        self.labels.shape()[1]
    }

    pub fn sample_shape(&self) -> &[usize] {
        &self.features.shape()[1..]
    }

    /// Mean number of positive labels per sample.
    pub fn avg_labels_per_image(&self) -> f64 {
        self.labels.data().iter().sum::<f64>() / self.len() as f64
    }

    /// Positive label indices per sample.
    pub fn label_sets(&self) -> Vec<Vec<usize>> {
        let k = self.num_classes();
        self.labels
            .data()
            .chunks(k)
            .map(|row| (0..k).filter(|&j| row[j] == 1.0).collect())
            .collect()
    }

    /// Features and labels of the given sample indices, in that order.
    pub fn gather(&self, idx: &[usize]) -> Result<(Tensor, Tensor)> {
        let per: usize = self.sample_shape().iter().product();
        let k = self.num_classes();
        let mut x = Vec::with_capacity(idx.len() * per);
        let mut y = Vec::with_capacity(idx.len() * k);
        for &i in idx {
            x.extend_from_slice(&self.features.data()[i * per..(i + 1) * per]);
            y.extend_from_slice(&self.labels.data()[i * k..(i + 1) * k]);
        }
        let mut xs = vec![idx.len()];
        xs.extend_from_slice(self.sample_shape());
        Ok((Tensor::new(xs, x)?, Tensor::new(vec![idx.len(), k], y)?))
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let bytes = f64_bytes(self.features.data());
        let features_path = dir.join("features.bin");
        fs::write(&features_path, &bytes).map_err(|e| Error::io(&features_path, e))?;

        let labels_path = dir.join("labels.csv");
        let mut w = csv::Writer::from_path(&labels_path).map_err(|e| csv_err(&labels_path, e))?;
        w.write_record(&self.class_names)
            .map_err(|e| csv_err(&labels_path, e))?;
        for row in self.labels.data().chunks(self.num_classes()) {
            w.write_record(row.iter().map(|&v| if v == 1.0 { "1" } else { "0" }))
                .map_err(|e| csv_err(&labels_path, e))?;
        }
        w.flush().map_err(|e| Error::io(&labels_path, e))?;

        let manifest = Manifest {
            split: self.split.clone(),
            num_samples: self.len(),
            sample_shape: self.sample_shape().to_vec(),
            num_classes: self.num_classes(),
            dtype: "f64-le".into(),
            features_file: "features.bin".into(),
            features_sha256: hex::encode(Sha256::digest(&bytes)),
            labels_file: "labels.csv".into(),
            avg_labels_per_image: self.avg_labels_per_image(),
        };
        let path = dir.join("manifest.json");
        fs::write(&path, serde_json::to_string_pretty(&manifest)? + "\n")
            .map_err(|e| Error::io(&path, e))
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join("manifest.json");
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let m: Manifest = serde_json::from_str(&text)?;
        if m.dtype != "f64-le" {
            return Err(Error::Data(format!(
                "unsupported feature dtype {:?}",
                m.dtype
            )));
        }
        if m.sample_shape.len() != 3 {
            return Err(Error::Data(format!(
                "sample shape {:?} is not [C, H, W]",
                m.sample_shape
            )));
        }

        let fpath = dir.join(&m.features_file);
        let bytes = fs::read(&fpath).map_err(|e| Error::io(&fpath, e))?;
        let digest = hex::encode(Sha256::digest(&bytes));
        if digest != m.features_sha256 {
            return Err(Error::Integrity(format!(
                "{} has sha256 {digest}, manifest says {}",
                fpath.display(),
                m.features_sha256
            )));
        }
        let per: usize = m.sample_shape.iter().product();
        if bytes.len() != m.num_samples * per * 8 {
            return Err(Error::Data(format!(
                "{} holds {} bytes, expected {} samples of {per} values",
                fpath.display(),
                bytes.len(),
                m.num_samples
            )));
        }
        let data: Vec<f64> = bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
            .collect();
        let mut shape = vec![m.num_samples];
        shape.extend(&m.sample_shape);
        let features = Tensor::new(shape, data)?;

        let lpath = dir.join(&m.labels_file);
        let (class_names, labels) = read_labels(&lpath, m.num_classes)?;
        if labels.len() != m.num_samples * m.num_classes {
            return Err(Error::Data(format!(
                "{} has {} rows, manifest says {}",
                lpath.display(),
                labels.len() / m.num_classes.max(1),
                m.num_samples
            )));
        }
        let labels = Tensor::new(vec![m.num_samples, m.num_classes], labels)?;
        Self::new(m.split, features, labels, class_names)
    }
}

fn csv_err(path: &Path, e: csv::Error) -> Error {
    Error::Data(format!("{}: {e}", path.display()))
}

fn f64_bytes(values: &[f64]) -> Vec<u8> {
    values.iter().flat_map(|v| v.to_le_bytes()).collect()
}

/// Parses a labels CSV, naming the 1-based data row of any bad entry.
fn read_labels(path: &Path, k: usize) -> Result<(Vec<String>, Vec<f64>)> {
    let mut r = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(true)
        .from_path(path)
        .map_err(|e| csv_err(path, e))?;
    let names: Vec<String> = r
        .headers()
        .map_err(|e| csv_err(path, e))?
        .iter()
        .map(|s| s.trim().to_string())
        .collect();
    if names.len() != k {
        return Err(Error::Data(format!(
            "{} header lists {} classes, manifest says {k}",
            path.display(),
            names.len()
        )));
    }
    let mut out = Vec::new();
    for (i, rec) in r.records().enumerate() {
        let row = i + 1;
        let rec = rec.map_err(|e| Error::Data(format!("{} row {row}: {e}", path.display())))?;
        if rec.len() != k {
            return Err(Error::Data(format!(
                "{} row {row}: {} fields, expected {k}",
                path.display(),
                rec.len()
            )));
        }
        for (j, field) in rec.iter().enumerate() {
            match field.trim() {
                "0" => out.push(0.0),
                "1" => out.push(1.0),
                other => {
                    return Err(Error::Data(format!(
                        "{} row {row}: label {other:?} for class {:?} is not 0 or 1",
                        path.display(),
                        names[j]
                    )))
                }
            }
        }
    }
    Ok((names, out))
}

/// Train and validation splits plus optional label embeddings.
#[derive(Clone, Debug, PartialEq)]
pub struct DatasetDir {
    pub train: MultilabelDataset,
    pub val: MultilabelDataset,
    pub embeddings: Option<WordEmbeddings>,
}

impl DatasetDir {
    pub fn save(&self, dir: &Path) -> Result<()> {
        self.train.save(&dir.join("train"))?;
        self.val.save(&dir.join("val"))?;
        if let Some(e) = &self.embeddings {
            let path = dir.join(EMBEDDINGS_FILE);
            fs::write(&path, e.to_text()).map_err(|err| Error::io(&path, err))?;
        }
        Ok(())
    }

    /// Loads both splits; embeddings are read only if the file exists.
    pub fn load(dir: &Path) -> Result<Self> {
        let train = MultilabelDataset::load(&dir.join("train"))?;
        let val = MultilabelDataset::load(&dir.join("val"))?;
        if train.class_names != val.class_names || train.sample_shape() != val.sample_shape() {
            return Err(Error::Data(
                "train and val splits disagree on classes or sample shape".into(),
            ));
        }
        let path = Self::embeddings_path(dir);
        let embeddings = if path.exists() {
            Some(WordEmbeddings::load(&path)?)
        } else {
            None
        };
        Ok(DatasetDir {
            train,
            val,
            embeddings,
        })
    }

    pub fn embeddings_path(dir: &Path) -> PathBuf {
        dir.join(EMBEDDINGS_FILE)
    }
}

/// Recipe for a synthetic dataset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthSpec {
    pub num_classes: usize,
    pub num_samples: usize,
    pub val_fraction: f64,
    /// `[C, H, W]`
    pub sample_shape: [usize; 3],
    /// One prior per class, or a single value for all.
    pub priors: Vec<f64>,
    /// Full K×K target label correlation; identity when absent.
    pub correlation: Option<Vec<Vec<f64>>>,
    /// `(i, j, r)` entries layered on top of `correlation`.
    pub pairs: Vec<(usize, usize, f64)>,
    pub noise: f64,
    pub embedding_dim: usize,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec {
            num_classes: 10,
            num_samples: 2000,
            val_fraction: 0.2,
            sample_shape: [3, 8, 8],
            priors: vec![0.2],
            correlation: None,
            pairs: vec![(0, 1, 0.8), (2, 3, 0.7)],
            noise: 1.0,
            embedding_dim: 16,
            seed: 0,
        }
    }
}

impl SynthSpec {
    /// The reference dataset: K = 10, B = 2000, two strongly co-occurring
    /// pairs, seed 0.
    pub fn reference() -> Self {
        Self::default()
    }

    pub fn class_names(&self) -> Vec<String> {
        (0..self.num_classes)
            .map(|i| format!("label{i:02}"))
            .collect()
    }

    fn prior_vector(&self) -> Result<Vec<f64>> {
        let k = self.num_classes;
        let priors = match self.priors.len() {
            1 => vec![self.priors[0]; k],
            n if n == k => self.priors.clone(),
            n => return Err(Error::Config(format!("{n} priors for {k} classes"))),
        };
        if priors.iter().any(|&p| !(p > 0.0 && p < 1.0)) {
            return Err(Error::Config("label priors must lie in (0, 1)".into()));
        }
        Ok(priors)
    }

    /// Target label correlation as a dense matrix.
    pub fn target_correlation(&self) -> Result<Vec<f64>> {
        let k = self.num_classes;
        let mut r = vec![0.0; k * k];
        for i in 0..k {
            r[i * k + i] = 1.0;
        }
        if let Some(rows) = &self.correlation {
            if rows.len() != k || rows.iter().any(|row| row.len() != k) {
                return Err(Error::Config(format!("correlation target must be {k}×{k}")));
            }
            for i in 0..k {
                for j in 0..k {
                    r[i * k + j] = rows[i][j];
                }
            }
        }
        for &(i, j, v) in &self.pairs {
            if i >= k || j >= k || i == j {
                return Err(Error::Config(format!(
                    "correlation pair ({i}, {j}) is invalid for {k} classes"
                )));
            }
            r[i * k + j] = v;
            r[j * k + i] = v;
        }
        for i in 0..k {
            if r[i * k + i] != 1.0 {
                return Err(Error::Config(
                    "correlation target needs a unit diagonal".into(),
                ));
            }
            for j in 0..k {
                let v = r[i * k + j];
                if v != r[j * k + i] || !(-1.0..=1.0).contains(&v) {
                    return Err(Error::Config(format!(
                        "correlation target must be symmetric with entries in [-1, 1] (at {i}, {j})"
                    )));
                }
            }
        }
        Ok(r)
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 2 || self.num_samples < 2 {
            return Err(Error::Config(
                "synthetic data needs at least two classes and two samples".into(),
            ));
        }
        if !(self.val_fraction > 0.0 && self.val_fraction < 1.0) {
            return Err(Error::Config("val_fraction must lie in (0, 1)".into()));
        }
        if self.sample_shape.contains(&0) || self.embedding_dim == 0 {
            return Err(Error::Config(
                "sample shape and embedding_dim must be positive".into(),
            ));
        }
        if !(self.noise >= 0.0) {
            return Err(Error::Config("noise must be >= 0".into()));
        }
        self.prior_vector()?;
        self.target_correlation()?;
        Ok(())
    }
}

/// `P(Z1 <= a, Z2 <= b)` for standard normals with correlation `rho`,
/// from `Φ(a)Φ(b) + ∫_0^ρ φ2(a, b; r) dr` with `r = sin θ` (the
/// substitution removes the endpoint singularity at |ρ| = 1).
pub fn bivariate_normal_cdf(a: f64, b: f64, rho: f64) -> f64 {
    let n = Normal::standard();
    let base = n.cdf(a) * n.cdf(b);
    let end = rho.clamp(-1.0, 1.0).asin();
    if end == 0.0 {
        return base;
    }
    let f = |t: f64| {
        let (s, c) = t.sin_cos();
        let c2 = c * c;
        if c2 == 0.0 {
            // limit at |r| = 1: the density concentrates on a = ±b
            return 0.0;
        }
        (-(a * a - 2.0 * a * b * s + b * b) / (2.0 * c2)).exp()
    };
    let steps = 400;
    let h = end / steps as f64;
    let mut acc = f(0.0) + f(end);
    for i in 1..steps {
        acc += f(i as f64 * h) * if i % 2 == 1 { 4.0 } else { 2.0 };
    }
    (base + acc * h / 3.0 / (2.0 * std::f64::consts::PI)).clamp(0.0, 1.0)
}

/// Phi coefficient of two thresholded normals with priors `pi`, `pj`.
fn phi_of_latent(ai: f64, aj: f64, pi: f64, pj: f64, rho: f64) -> f64 {
    let p11 = bivariate_normal_cdf(ai, aj, rho);
    (p11 - pi * pj) / (pi * (1.0 - pi) * pj * (1.0 - pj)).sqrt()
}

/// Latent normal correlation that yields label correlation `target`.
fn solve_latent(ai: f64, aj: f64, pi: f64, pj: f64, target: f64) -> Result<f64> {
    if target == 0.0 {
        return Ok(0.0);
    }
    let (mut lo, mut hi) = (-1.0, 1.0);
    let (flo, fhi) = (
        phi_of_latent(ai, aj, pi, pj, lo),
        phi_of_latent(ai, aj, pi, pj, hi),
    );
    if target < flo - 1e-9 || target > fhi + 1e-9 {
        return Err(Error::Config(format!(
            "label correlation {target} is unreachable with priors {pi} and {pj} (range {flo:.4}..{fhi:.4})"
        )));
    }
    for _ in 0..80 {
        let mid = 0.5 * (lo + hi);
        if phi_of_latent(ai, aj, pi, pj, mid) < target {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(0.5 * (lo + hi))
}

/// Lower Cholesky factor of a row-major `n×n` matrix; fails if it is not
/// positive semidefinite.
fn cholesky(m: &[f64], n: usize) -> Result<Vec<f64>> {
    let mut l = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..=i {
            let s: f64 = (0..j).map(|p| l[i * n + p] * l[j * n + p]).sum();
            if i == j {
                let d = m[i * n + i] - s;
                if d < -1e-10 {
                    return Err(Error::Config(
                        "correlation target is infeasible: the latent covariance is not positive semidefinite".into(),
                    ));
                }
                l[i * n + i] = d.max(0.0).sqrt();
            } else {
                l[i * n + j] = if l[j * n + j] > 0.0 {
                    (m[i * n + j] - s) / l[j * n + j]
                } else {
                    0.0
                };
            }
        }
    }
    Ok(l)
}

/// One spatial prototype per class: an oriented grating whose orientation,
/// frequency, phase and channel mix depend on the class, scaled to unit
/// RMS.
fn prototypes(k: usize, shape: [usize; 3], rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    let [c, h, w] = shape;
    (0..k)
        .map(|cls| {
            let theta = std::f64::consts::PI * cls as f64 / k as f64 + rng.random_range(-0.1..0.1);
            let freq = 1.0 + (cls % 2) as f64;
            let phase = rng.random_range(0.0..std::f64::consts::TAU);
            let mix: Vec<f64> = (0..c).map(|_| rng.random_range(-1.0..1.0)).collect();
            let (st, ct) = theta.sin_cos();
            let mut p = Vec::with_capacity(c * h * w);
            for m in &mix {
                for y in 0..h {
                    for x in 0..w {
                        let u = (x as f64 * ct + y as f64 * st) / w as f64;
                        p.push(m * (std::f64::consts::TAU * freq * u + phase).cos());
                    }
                }
            }
            let rms = (p.iter().map(|v| v * v).sum::<f64>() / p.len() as f64).sqrt();
            p.iter().map(|v| v / rms.max(1e-12)).collect()
        })
        .collect()
}

/// Draws a dataset from `spec`. Labels come from a thresholded correlated
/// Gaussian; each positive class adds its prototype, then Gaussian noise
/// is added everywhere.
pub fn generate_synthetic(spec: &SynthSpec) -> Result<DatasetDir> {
    spec.validate()?;
    let k = spec.num_classes;
    let priors = spec.prior_vector()?;
    let target = spec.target_correlation()?;
    let normal = Normal::standard();
    let cut: Vec<f64> = priors.iter().map(|&p| normal.inverse_cdf(p)).collect();

    let mut latent = vec![0.0; k * k];
    for i in 0..k {
        latent[i * k + i] = 1.0;
        for j in 0..i {
            let r = solve_latent(cut[i], cut[j], priors[i], priors[j], target[i * k + j])?;
            latent[i * k + j] = r;
            latent[j * k + i] = r;
        }
    }
    let chol = cholesky(&latent, k)?;

    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let protos = prototypes(k, spec.sample_shape, &mut rng);
    let per: usize = spec.sample_shape.iter().product();
    let b = spec.num_samples;
    let mut labels = Vec::with_capacity(b * k);
    let mut features = Vec::with_capacity(b * per);
    let mut z = vec![0.0; k];
    for _ in 0..b {
        let e = Tensor::randn(vec![k], 1.0, &mut rng);
        for (i, zi) in z.iter_mut().enumerate() {
            *zi = (0..=i).map(|j| chol[i * k + j] * e.data()[j]).sum();
        }
        let row: Vec<f64> = (0..k)
            .map(|i| if z[i] <= cut[i] { 1.0 } else { 0.0 })
            .collect();
        let noise = Tensor::randn(vec![per], spec.noise.max(0.0), &mut rng);
        let mut x = noise.into_data();
        for (cls, &y) in row.iter().enumerate() {
            if y == 1.0 {
                for (xi, pi) in x.iter_mut().zip(&protos[cls]) {
                    *xi += pi;
                }
            }
        }
        labels.extend(row);
        features.extend(x);
    }

    let names = spec.class_names();
    let n_val = ((b as f64) * spec.val_fraction)
        .round()
        .clamp(1.0, (b - 1) as f64) as usize;
    let n_train = b - n_val;
    let [c, h, w] = spec.sample_shape;
    let split = |name: &str, lo: usize, hi: usize| -> Result<MultilabelDataset> {
        MultilabelDataset::new(
            name,
            Tensor::new(
                vec![hi - lo, c, h, w],
                features[lo * per..hi * per].to_vec(),
            )?,
            Tensor::new(vec![hi - lo, k], labels[lo * k..hi * k].to_vec())?,
            names.clone(),
        )
    };
    let embeddings = WordEmbeddings::new(
        names.clone(),
        Tensor::randn(vec![k, spec.embedding_dim], 1.0, &mut rng),
    )?;
    Ok(DatasetDir {
        train: split("train", 0, n_train)?,
        val: split("val", n_train, b)?,
        embeddings: Some(embeddings),
    })
}

/// Pearson correlation between label columns `i` and `j`.
pub fn label_correlation(labels: &Tensor, i: usize, j: usize) -> f64 {
    let k = labels.shape()[1];
    let n = labels.shape()[0] as f64;
    let col = |c: usize| {
        labels
            .data()
            .iter()
            .skip(c)
            .step_by(k)
            .copied()
            .collect::<Vec<f64>>()
    };
    let (a, b) = (col(i), col(j));
    let (ma, mb) = (a.iter().sum::<f64>() / n, b.iter().sum::<f64>() / n);
    let cov: f64 = a
        .iter()
        .zip(&b)
        .map(|(x, y)| (x - ma) * (y - mb))
        .sum::<f64>()
        / n;
    let va: f64 = a.iter().map(|x| (x - ma).powi(2)).sum::<f64>() / n;
    let vb: f64 = b.iter().map(|y| (y - mb).powi(2)).sum::<f64>() / n;
    if va == 0.0 || vb == 0.0 {
        return 0.0;
    }
    cov / (va * vb).sqrt()
}
