//! Labelled feature vectors: the `FCFT` interchange format, synthetic
//! generators and stratified splitting.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng as _;
use rand_distr::{Distribution, Normal, StandardNormal};

use crate::container::{self, Reader, Writer};
use crate::error::{Error, Result};
use crate::nd::Tensor;
use crate::rng;

pub const MAGIC: &[u8; 4] = b"FCFT";
pub const VERSION: u32 = 1;
/// Label of rows without a class, e.g. out-of-distribution sets.
pub const UNLABELED: u32 = u32::MAX;

/// Feature rows with labels. Features are stored as `f32` and widened to
/// `f64` for all computation.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureDataset {
    pub dim: usize,
    pub num_classes: usize,
    pub labels: Vec<u32>,
    /// Row-major, `labels.len() * dim` values.
    pub features: Vec<f32>,
    pub provenance: String,
}

impl FeatureDataset {
    pub fn new(dim: usize, num_classes: usize, provenance: impl Into<String>) -> Self {
        FeatureDataset {
            dim,
            num_classes,
            labels: Vec::new(),
            features: Vec::new(),
            provenance: provenance.into(),
        }
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn push(&mut self, label: u32, row: &[f32]) -> Result<()> {
        if row.len() != self.dim {
            return Err(Error::invalid(format!(
                "row of length {} in a dataset of dimension {}",
                row.len(),
                self.dim
            )));
        }
        if label != UNLABELED && label as usize >= self.num_classes {
            return Err(Error::invalid(format!(
                "label {label} out of range for {} classes",
                self.num_classes
            )));
        }
        if row.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("non-finite feature value"));
        }
        self.labels.push(label);
        self.features.extend_from_slice(row);
        Ok(())
    }

    pub fn push_f64(&mut self, label: u32, row: &[f64]) -> Result<()> {
        let row: Vec<f32> = row.iter().map(|&v| v as f32).collect();
        self.push(label, &row)
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.features[i * self.dim..(i + 1) * self.dim]
    }

    pub fn row_f64(&self, i: usize) -> Vec<f64> {
        self.row(i).iter().map(|&v| f64::from(v)).collect()
    }

    pub fn is_labeled(&self, i: usize) -> bool {
        self.labels[i] != UNLABELED
    }

    /// All rows widened to a `[n, dim]` matrix.
    pub fn to_matrix(&self) -> Tensor {
        Tensor::from_parts(
            vec![self.len(), self.dim],
            self.features.iter().map(|&v| f64::from(v)).collect(),
        )
    }

    /// Rows at `indices` as a `[indices.len(), dim]` matrix.
    pub fn gather(&self, indices: &[usize]) -> Tensor {
        let mut data = Vec::with_capacity(indices.len() * self.dim);
        for &i in indices {
            data.extend(self.row(i).iter().map(|&v| f64::from(v)));
        }
        Tensor::from_parts(vec![indices.len(), self.dim], data)
    }

    pub fn subset(&self, indices: &[usize]) -> FeatureDataset {
        let mut out = FeatureDataset::new(self.dim, self.num_classes, self.provenance.clone());
        for &i in indices {
            out.labels.push(self.labels[i]);
            out.features.extend_from_slice(self.row(i));
        }
        out
    }

    pub fn validate(&self) -> Result<()> {
        if self.features.len() != self.labels.len() * self.dim {
            return Err(Error::invalid("feature buffer does not match row count"));
        }
        if let Some(&bad) = self
            .labels
            .iter()
            .find(|&&l| l != UNLABELED && l as usize >= self.num_classes)
        {
            return Err(Error::invalid(format!("label {bad} >= num_classes {}", self.num_classes)));
        }
        if self.features.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("non-finite feature value"));
        }
        Ok(())
    }
}

pub fn encode_features(ds: &FeatureDataset) -> Result<Vec<u8>> {
    ds.validate()?;
    let mut w = Writer::new(MAGIC);
    w.u32(VERSION)
        .u32(container::len_u32(ds.len(), "row count")?)
        .u32(container::len_u32(ds.dim, "dim")?)
        .u32(container::len_u32(ds.num_classes, "num_classes")?);
    w.str(&ds.provenance)?;
    for i in 0..ds.len() {
        w.u32(ds.labels[i]);
        for &v in ds.row(i) {
            w.f32(v);
        }
    }
    Ok(w.finish())
}

pub fn decode_features(bytes: &[u8]) -> Result<FeatureDataset> {
    let mut r = Reader::open(bytes, MAGIC)?;
    r.expect_version(VERSION)?;
    let count = r.u32()? as usize;
    let dim = r.u32()? as usize;
    let num_classes = r.u32()? as usize;
    let provenance = r.str()?;
    let mut ds = FeatureDataset::new(dim, num_classes, provenance);
    ds.labels.reserve(count.min(1 << 24));
    for _ in 0..count {
        let at = r.offset();
        let label = r.u32()?;
        if label != UNLABELED && label as usize >= num_classes {
            return Err(r.fail(at, format!("label {label} out of range for {num_classes} classes")));
        }
        ds.labels.push(label);
        for _ in 0..dim {
            let at = r.offset();
            let v = r.f32()?;
            if !v.is_finite() {
                return Err(r.fail(at, "non-finite feature value"));
            }
            ds.features.push(v);
        }
    }
    r.finish()?;
    Ok(ds)
}

pub fn write_features(ds: &FeatureDataset, path: impl AsRef<Path>) -> Result<()> {
    container::write_file(path.as_ref(), &encode_features(ds)?)
}

pub fn read_features(path: impl AsRef<Path>) -> Result<FeatureDataset> {
    decode_features(&container::read_file(path.as_ref())?)
}

/// Point on moon `class` at angle `theta` in `[0, pi]`.
pub fn moon_point(class: u32, theta: f64) -> [f64; 2] {
    if class == 0 {
        [theta.cos(), theta.sin()]
    } else {
        [1.0 - theta.cos(), 0.5 - theta.sin()]
    }
}

/// Two interleaving half circles, `n / 2` points each, plus isotropic noise.
pub fn gen_moons(n: usize, noise: f64, seed: u64) -> Result<FeatureDataset> {
    if n < 2 || !n.is_multiple_of(2) {
        return Err(Error::invalid(format!("moons need an even count >= 2, got {n}")));
    }
    if !(noise >= 0.0) {
        return Err(Error::invalid(format!("noise must be non-negative, got {noise}")));
    }
    let mut rng = rng::substream(seed, "moons");
    let jitter = Normal::new(0.0, noise).map_err(|e| Error::invalid(e.to_string()))?;
    let mut ds = FeatureDataset::new(2, 2, format!("moons n={n} noise={noise} seed={seed}"));
    for class in 0..2u32 {
        for _ in 0..n / 2 {
            let theta = rng.random_range(0.0..=PI);
            let [x, y] = moon_point(class, theta);
            let (dx, dy) = if noise > 0.0 {
                (jitter.sample(&mut rng), jitter.sample(&mut rng))
            } else {
                (0.0, 0.0)
            };
            ds.push_f64(class, &[x + dx, y + dy])?;
        }
    }
    Ok(ds)
}

/// Euclidean distance from `p` to the nearer of the two noiseless moon curves.
pub fn distance_to_moons(p: [f64; 2]) -> f64 {
    fn arc(p: [f64; 2], center: [f64; 2], upper: bool) -> f64 {
        let (dx, dy) = (p[0] - center[0], p[1] - center[1]);
        let on_side = if upper { dy >= 0.0 } else { dy <= 0.0 };
        if on_side {
            ((dx * dx + dy * dy).sqrt() - 1.0).abs()
        } else {
            let a = ((dx - 1.0).powi(2) + dy * dy).sqrt();
            let b = ((dx + 1.0).powi(2) + dy * dy).sqrt();
            a.min(b)
        }
    }
    arc(p, [0.0, 0.0], true).min(arc(p, [1.0, 0.5], false))
}

pub const MOONS_OOD_BOX: [[f64; 2]; 2] = [[-1.5, 2.5], [-1.0, 1.5]];
pub const MOONS_OOD_MARGIN: f64 = 0.3;

/// Uniform points in the moons bounding box, rejected within
/// [`MOONS_OOD_MARGIN`] of either curve. Rows are unlabeled.
pub fn gen_moons_ood(n: usize, seed: u64) -> Result<FeatureDataset> {
    let mut rng = rng::substream(seed, "moons-ood");
    let [[x0, x1], [y0, y1]] = MOONS_OOD_BOX;
    let mut ds = FeatureDataset::new(2, 2, format!("moons-ood n={n} seed={seed}"));
    while ds.len() < n {
        let p = [rng.random_range(x0..x1), rng.random_range(y0..y1)];
        if distance_to_moons(p) >= MOONS_OOD_MARGIN {
            ds.push_f64(UNLABELED, &p)?;
        }
    }
    Ok(ds)
}

fn sphere_point(d: usize, radius: f64, rng: &mut rng::Rng) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..d).map(|_| StandardNormal.sample(rng)).collect();
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-12 {
            return v.into_iter().map(|x| x * radius / norm).collect();
        }
    }
}

fn check_blob_args(k: usize, d: usize, sigma: f64) -> Result<()> {
    if k < 1 || d < 2 {
        return Err(Error::invalid(format!("blobs need k >= 1 and d >= 2, got k={k}, d={d}")));
    }
    if !(sigma >= 0.0) {
        return Err(Error::invalid(format!("sigma must be non-negative, got {sigma}")));
    }
    Ok(())
}

fn push_blob(
    ds: &mut FeatureDataset,
    label: u32,
    mean: &[f64],
    n: usize,
    sigma: f64,
    rng: &mut rng::Rng,
) -> Result<()> {
    for _ in 0..n {
        let row: Vec<f64> = mean
            .iter()
            .map(|&m| {
                let eps: f64 = StandardNormal.sample(rng);
                m + sigma * eps
            })
            .collect();
        ds.push_f64(label, &row)?;
    }
    Ok(())
}

/// Class means drawn uniformly on the sphere of radius `mean_scale`.
pub fn blob_means(k: usize, d: usize, mean_scale: f64, seed: u64) -> Vec<Vec<f64>> {
    let mut rng = rng::substream(seed, "blob-means");
    (0..k).map(|_| sphere_point(d, mean_scale, &mut rng)).collect()
}

/// `k` isotropic Gaussian classes of `n_per_class` rows each.
pub fn gen_blobs(
    k: usize,
    d: usize,
    n_per_class: usize,
    mean_scale: f64,
    sigma: f64,
    seed: u64,
) -> Result<FeatureDataset> {
    check_blob_args(k, d, sigma)?;
    let means = blob_means(k, d, mean_scale, seed);
    let mut rng = rng::substream(seed, "blob-rows");
    let mut ds = FeatureDataset::new(
        d,
        k,
        format!("blobs k={k} d={d} n={n_per_class} scale={mean_scale} sigma={sigma} seed={seed}"),
    );
    for (c, mean) in means.iter().enumerate() {
        push_blob(&mut ds, c as u32, mean, n_per_class, sigma, &mut rng)?;
    }
    Ok(ds)
}

/// An unlabeled blob centred on a fresh sphere point of radius `mean_scale`,
/// moved by `displacement` along a random direction.
pub fn gen_displaced_blob(
    num_classes: usize,
    d: usize,
    n: usize,
    mean_scale: f64,
    sigma: f64,
    displacement: f64,
    seed: u64,
) -> Result<FeatureDataset> {
    check_blob_args(num_classes.max(1), d, sigma)?;
    let mut rng = rng::substream(seed, "blob-ood");
    let base = sphere_point(d, mean_scale, &mut rng);
    let shift = sphere_point(d, displacement, &mut rng);
    let center: Vec<f64> = base.iter().zip(&shift).map(|(a, b)| a + b).collect();
    let mut ds = FeatureDataset::new(
        d,
        num_classes,
        format!("blob-ood d={d} n={n} displacement={displacement} seed={seed}"),
    );
    push_blob(&mut ds, UNLABELED, &center, n, sigma, &mut rng)?;
    Ok(ds)
}

/// Outcome of [`split`]; `warnings` lists classes too small to divide.
#[derive(Debug, Clone)]
pub struct Split {
    pub train: FeatureDataset,
    pub test: FeatureDataset,
    pub warnings: Vec<String>,
}

/// Seeded stratified split; each class contributes `round(fraction * n_c)` rows to train.
pub fn split(ds: &FeatureDataset, train_fraction: f64, seed: u64) -> Result<Split> {
    if !(train_fraction > 0.0 && train_fraction < 1.0) {
        return Err(Error::invalid(format!(
            "train fraction must lie in (0, 1), got {train_fraction}"
        )));
    }
    let mut by_class: BTreeMap<u32, Vec<usize>> = BTreeMap::new();
    for (i, &l) in ds.labels.iter().enumerate() {
        by_class.entry(l).or_default().push(i);
    }
    let mut rng = rng::substream(seed, "split");
    let (mut train, mut test, mut warnings) = (Vec::new(), Vec::new(), Vec::new());
    for (label, mut idx) in by_class {
        if idx.len() == 1 {
            warnings.push(format!("class {label} has a single row; assigned to train"));
            train.push(idx[0]);
            continue;
        }
        idx.shuffle(&mut rng);
        let n_train = (train_fraction * idx.len() as f64).round() as usize;
        train.extend_from_slice(&idx[..n_train]);
        test.extend_from_slice(&idx[n_train..]);
    }
    train.sort_unstable();
    test.sort_unstable();
    Ok(Split {
        train: ds.subset(&train),
        test: ds.subset(&test),
        warnings,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> FeatureDataset {
        let mut ds = FeatureDataset::new(3, 2, "unit");
        ds.push(0, &[1.0, 2.0, 3.0]).unwrap();
        ds.push(1, &[-0.5, 0.25, 8.0]).unwrap();
        ds.push(UNLABELED, &[0.0, 0.0, 1e-30]).unwrap();
        ds
    }

    #[test]
    fn roundtrip_three_rows() {
        let ds = small();
        assert_eq!(decode_features(&encode_features(&ds).unwrap()).unwrap(), ds);
    }

    #[test]
    fn empty_roundtrip_keeps_dim() {
        let ds = FeatureDataset::new(17, 4, "");
        let back = decode_features(&encode_features(&ds).unwrap()).unwrap();
        assert_eq!(back.dim, 17);
        assert!(back.is_empty());
    }

    #[test]
    fn header_layout() {
        let bytes = encode_features(&small()).unwrap();
        let word = |i: usize| u32::from_le_bytes(bytes[4 * i..4 * i + 4].try_into().unwrap());
        assert_eq!(&bytes[..4], b"FCFT");
        assert_eq!([word(1), word(2), word(3), word(4), word(5)], [1, 3, 3, 2, 4]);
        assert_eq!(&bytes[24..28], b"unit");
        assert_eq!(bytes.len(), 28 + 3 * (4 + 12) + 4);
    }

    #[test]
    fn corruption_and_truncation_rejected() {
        let bytes = encode_features(&small()).unwrap();
        let mut bad = bytes.clone();
        let last = bad.len() - 1;
        bad[last] ^= 0xff;
        assert!(matches!(decode_features(&bad), Err(Error::Format { .. })));
        assert!(decode_features(&bytes[..bytes.len() - 5]).is_err());
        let mut magic = bytes;
        magic[0] = b'X';
        assert!(matches!(decode_features(&magic), Err(Error::Format { offset: 0, .. })));
    }

    #[test]
    fn push_validates() {
        let mut ds = FeatureDataset::new(2, 2, "");
        assert!(ds.push(2, &[0.0, 0.0]).is_err());
        assert!(ds.push(0, &[0.0]).is_err());
        assert!(ds.push(0, &[f32::NAN, 0.0]).is_err());
    }

    #[test]
    fn noiseless_moons_lie_on_curves() {
        let ds = gen_moons(4, 0.0, 3).unwrap();
        assert_eq!(ds.labels.iter().filter(|&&l| l == 0).count(), 2);
        assert_eq!(ds.labels.iter().filter(|&&l| l == 1).count(), 2);
        for i in 0..ds.len() {
            assert!(distance_to_moons([f64::from(ds.row(i)[0]), f64::from(ds.row(i)[1])]) < 1e-6);
        }
        assert!(gen_moons(5, 0.1, 0).is_err());
    }

    #[test]
    fn moons_are_deterministic() {
        assert_eq!(gen_moons(100, 0.1, 9).unwrap(), gen_moons(100, 0.1, 9).unwrap());
        assert_ne!(gen_moons(100, 0.1, 9).unwrap(), gen_moons(100, 0.1, 10).unwrap());
    }

    #[test]
    fn ood_points_respect_margin() {
        let ood = gen_moons_ood(200, 1).unwrap();
        assert_eq!(ood.len(), 200);
        for i in 0..ood.len() {
            let p = [f64::from(ood.row(i)[0]), f64::from(ood.row(i)[1])];
            assert!(distance_to_moons(p) >= MOONS_OOD_MARGIN - 1e-6);
            assert!(!ood.is_labeled(i));
        }
    }

    #[test]
    fn zero_sigma_blobs_sit_on_means() {
        let ds = gen_blobs(3, 4, 5, 2.0, 0.0, 1).unwrap();
        let means = blob_means(3, 4, 2.0, 1);
        for i in 0..ds.len() {
            let m = &means[ds.labels[i] as usize];
            for (a, b) in ds.row(i).iter().zip(m) {
                assert_eq!(*a, *b as f32);
            }
        }
        for m in &means {
            let r = m.iter().map(|x| x * x).sum::<f64>().sqrt();
            assert!((r - 2.0).abs() < 1e-12);
        }
        assert_ne!(blob_means(3, 4, 2.0, 1), blob_means(3, 4, 2.0, 2));
        assert!(gen_blobs(0, 4, 1, 1.0, 1.0, 0).is_err());
        assert!(gen_blobs(2, 1, 1, 1.0, 1.0, 0).is_err());
    }

    #[test]
    fn split_is_stratified_partition() {
        let ds = gen_blobs(3, 2, 10, 1.0, 0.5, 4).unwrap();
        let s = split(&ds, 0.5, 8).unwrap();
        for c in 0..3 {
            assert_eq!(s.train.labels.iter().filter(|&&l| l == c).count(), 5);
            assert_eq!(s.test.labels.iter().filter(|&&l| l == c).count(), 5);
        }
        let mut rows: Vec<Vec<u32>> = (0..ds.len()).map(|i| ds.row(i).iter().map(|v| v.to_bits()).collect()).collect();
        let mut union: Vec<Vec<u32>> = (0..s.train.len())
            .map(|i| s.train.row(i).iter().map(|v| v.to_bits()).collect())
            .chain((0..s.test.len()).map(|i| s.test.row(i).iter().map(|v| v.to_bits()).collect()))
            .collect();
        rows.sort();
        union.sort();
        assert_eq!(rows, union);
        let again = split(&ds, 0.5, 8).unwrap();
        assert_eq!(again.train, s.train);
        assert!(split(&ds, 1.0, 0).is_err());
    }

    #[test]
    fn singleton_class_goes_to_train() {
        let mut ds = FeatureDataset::new(2, 2, "");
        ds.push(0, &[0.0, 0.0]).unwrap();
        ds.push(1, &[1.0, 1.0]).unwrap();
        ds.push(1, &[2.0, 2.0]).unwrap();
        let s = split(&ds, 0.5, 0).unwrap();
        assert_eq!(s.warnings.len(), 1);
        assert!(s.train.labels.contains(&0));
    }
}
