//! Synthetic training sets, IDX ingestion, and imagewise dataset transforms.

use std::fs;
use std::path::{Path, PathBuf};

use ndarray::{Array1, Array2, Axis};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io_util::{write_atomic, Reader};
use crate::seeding::{self, child_seed};
use crate::subspace::{random_rotation, BandMode, ImageShape, OrthonormalMatrix, Spectral};

pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

const BIN_MAGIC: &[u8; 4] = b"BMDS";
const BIN_VERSION: u32 = 1;

const STREAM_ROTATION: u64 = 1;
const STREAM_SAMPLES: u64 = 2;

/// Single discriminative coordinate `ε·y` plus `D−1` Gaussian noise coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct T1Params {
    pub epsilon: f64,
    pub sigma: f64,
    pub n_samples: usize,
    pub dim: usize,
    pub seed: u64,
}

impl T1Params {
    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon > 0.0) || !(self.sigma >= 0.0) {
            return Err(Error::InvalidParameter("T1 needs epsilon > 0 and sigma >= 0".into()));
        }
        if self.dim < 2 || self.n_samples == 0 {
            return Err(Error::InvalidParameter("T1 needs dim >= 2 and n_samples >= 1".into()));
        }
        Ok(())
    }
}

/// T1 plus a second coordinate on an interleaved lattice: `ρk` for `y=+1`,
/// `ρ(k+½)` for `y=−1`, with `k` uniform on `{−K, …, K−1}`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct T2Params {
    pub rho: f64,
    pub epsilon: f64,
    pub sigma: f64,
    pub k: i64,
    pub n_samples: usize,
    pub dim: usize,
    pub seed: u64,
}

impl T2Params {
    pub fn validate(&self) -> Result<()> {
        if !(self.rho >= 0.0) || !(self.epsilon >= 0.0) || !(self.sigma >= 0.0) {
            return Err(Error::InvalidParameter("T2 needs rho, epsilon, sigma >= 0".into()));
        }
        if self.k < 1 || self.dim < 3 || self.n_samples == 0 {
            return Err(Error::InvalidParameter("T2 needs K >= 1, dim >= 3, n_samples >= 1".into()));
        }
        Ok(())
    }
}

/// An imagewise dataset transform.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TransformOp {
    Flip,
    LowPass(usize),
    HighPass(usize),
}

/// Where a dataset came from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Source {
    T1 { params: T1Params, identity_rotation: bool },
    T2 { params: T2Params, identity_rotation: bool },
    Idx { images: PathBuf, labels: PathBuf },
    Derived { description: String },
}

/// Provenance record, serialized as the JSON sidecar of a dataset file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetMeta {
    pub source: Source,
    pub transforms: Vec<TransformOp>,
    pub image_shape: Option<ImageShape>,
    /// Row-major `D × D` rotation for synthetic sets.
    pub rotation: Option<Vec<Vec<f64>>>,
}

/// Dense features (`N × D`) with integer labels.
///
/// Synthetic sets use labels in `{−1, +1}`; image sets use `0..L`.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledDataset {
    pub features: Array2<f64>,
    pub labels: Vec<i64>,
    pub rotation: Option<OrthonormalMatrix>,
    pub image_shape: Option<ImageShape>,
    pub source: Source,
    pub transforms: Vec<TransformOp>,
}

impl LabeledDataset {
    pub fn new(features: Array2<f64>, labels: Vec<i64>, source: Source) -> Result<Self> {
        if features.nrows() != labels.len() {
            return Err(Error::CountMismatch { images: features.nrows(), labels: labels.len() });
        }
        if labels.is_empty() {
            return Err(Error::Empty("dataset".into()));
        }
        if features.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidParameter("dataset features must be finite".into()));
        }
        Ok(Self { features, labels, rotation: None, image_shape: None, source, transforms: Vec::new() })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.features.ncols()
    }

    /// `max(label) + 1` for image sets, `2` for `{−1,+1}` sets.
    pub fn num_classes(&self) -> usize {
        if self.labels.iter().all(|&y| y == 1 || y == -1) && self.labels.contains(&-1) {
            2
        } else {
            self.labels.iter().copied().max().map_or(0, |m| m as usize + 1)
        }
    }

    pub fn meta(&self) -> DatasetMeta {
        DatasetMeta {
            source: self.source.clone(),
            transforms: self.transforms.clone(),
            image_shape: self.image_shape,
            rotation: self
                .rotation
                .as_ref()
                .map(|u| u.matrix().outer_iter().map(|r| r.to_vec()).collect()),
        }
    }

    /// Rows `indices`, in the given order.
    pub fn subset(&self, indices: &[usize]) -> Self {
        let features = self.features.select(Axis(0), indices);
        let labels = indices.iter().map(|&i| self.labels[i]).collect();
        Self {
            features,
            labels,
            rotation: self.rotation.clone(),
            image_shape: self.image_shape,
            source: self.source.clone(),
            transforms: self.transforms.clone(),
        }
    }

    /// Concatenation of two datasets with matching dimension.
    pub fn union(&self, other: &Self) -> Result<Self> {
        if self.dim() != other.dim() {
            return Err(Error::DimensionMismatch { expected: self.dim(), got: other.dim() });
        }
        let features = ndarray::concatenate(Axis(0), &[self.features.view(), other.features.view()])
            .expect("matching columns");
        let mut labels = self.labels.clone();
        labels.extend_from_slice(&other.labels);
        Ok(Self {
            features,
            labels,
            rotation: None,
            image_shape: self.image_shape,
            source: Source::Derived { description: "union".into() },
            transforms: Vec::new(),
        })
    }

    /// Writes `<path>` (binary) and `<path>.json` (meta sidecar).
    pub fn save(&self, path: &Path) -> Result<()> {
        let (n, d) = self.features.dim();
        let mut bytes = Vec::with_capacity(24 + 8 * n * (d + 1));
        bytes.extend_from_slice(BIN_MAGIC);
        bytes.extend_from_slice(&BIN_VERSION.to_le_bytes());
        bytes.extend_from_slice(&(n as u64).to_le_bytes());
        bytes.extend_from_slice(&(d as u64).to_le_bytes());
        for v in self.features.iter() {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        for y in &self.labels {
            bytes.extend_from_slice(&y.to_le_bytes());
        }
        write_atomic(path, &bytes)?;
        let meta = serde_json::to_vec_pretty(&self.meta())?;
        write_atomic(&sidecar_path(path), &meta)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path)?;
        let mut r = Reader::new(&bytes, "dataset");
        if r.take(4)? != BIN_MAGIC {
            return Err(Error::Format(format!("{} is not a dataset file", path.display())));
        }
        let version = r.u32_le()?;
        if version != BIN_VERSION {
            return Err(Error::Format(format!("unsupported dataset version {version}")));
        }
        let n = r.u64_le()? as usize;
        let d = r.u64_le()? as usize;
        let features = (0..n * d).map(|_| r.f64_le()).collect::<Result<Vec<_>>>()?;
        let labels = (0..n).map(|_| r.i64_le()).collect::<Result<Vec<_>>>()?;
        let meta: DatasetMeta = serde_json::from_slice(&fs::read(sidecar_path(path))?)?;
        let features = Array2::from_shape_vec((n, d), features).expect("sizes read from header");
        let mut ds = Self::new(features, labels, meta.source)?;
        ds.transforms = meta.transforms;
        ds.image_shape = meta.image_shape;
        if let Some(rows) = meta.rotation {
            let dim = rows.len();
            let flat: Vec<f64> = rows.into_iter().flatten().collect();
            let m = Array2::from_shape_vec((dim, dim), flat)
                .map_err(|_| Error::Format("rotation is not square".into()))?;
            ds.rotation = Some(OrthonormalMatrix::from_matrix(m)?);
        }
        Ok(ds)
    }
}

pub fn sidecar_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".json");
    PathBuf::from(s)
}

fn random_label<R: Rng>(rng: &mut R) -> i64 {
    if rng.random::<bool>() {
        1
    } else {
        -1
    }
}

fn resolve_rotation(dim: usize, seed: u64, rotation: Option<OrthonormalMatrix>) -> Result<OrthonormalMatrix> {
    match rotation {
        Some(u) if u.dim() != dim => Err(Error::DimensionMismatch { expected: dim, got: u.dim() }),
        Some(u) => Ok(u),
        None => random_rotation(dim, child_seed(seed, STREAM_ROTATION)),
    }
}

/// Rotates canonical-coordinate rows `z` into `x = U z`.
fn rotate(z: Array2<f64>, u: &OrthonormalMatrix) -> Array2<f64> {
    z.dot(&u.matrix().t())
}

pub fn gen_t1(params: T1Params) -> Result<LabeledDataset> {
    gen_t1_with_rotation(params, None)
}

/// [`gen_t1`] with an explicit rotation; `None` draws one from the seed.
pub fn gen_t1_with_rotation(params: T1Params, rotation: Option<OrthonormalMatrix>) -> Result<LabeledDataset> {
    params.validate()?;
    let identity = rotation.as_ref().is_some_and(|u| u == &OrthonormalMatrix::identity(u.dim()));
    let u = resolve_rotation(params.dim, params.seed, rotation)?;
    let mut rng = seeding::rng(child_seed(params.seed, STREAM_SAMPLES));
    let (n, d) = (params.n_samples, params.dim);
    let mut z = Array2::<f64>::zeros((n, d));
    let mut labels = Vec::with_capacity(n);
    for mut row in z.outer_iter_mut() {
        let y = random_label(&mut rng);
        labels.push(y);
        row[0] = params.epsilon * y as f64;
        for v in row.iter_mut().skip(1) {
            let g: f64 = StandardNormal.sample(&mut rng);
            *v = params.sigma * g;
        }
    }
    let mut ds = LabeledDataset::new(
        rotate(z, &u),
        labels,
        Source::T1 { params, identity_rotation: identity },
    )?;
    ds.rotation = Some(u);
    Ok(ds)
}

pub fn gen_t2(params: T2Params) -> Result<LabeledDataset> {
    gen_t2_with_rotation(params, None)
}

pub fn gen_t2_with_rotation(params: T2Params, rotation: Option<OrthonormalMatrix>) -> Result<LabeledDataset> {
    params.validate()?;
    let identity = rotation.as_ref().is_some_and(|u| u == &OrthonormalMatrix::identity(u.dim()));
    let u = resolve_rotation(params.dim, params.seed, rotation)?;
    let mut rng = seeding::rng(child_seed(params.seed, STREAM_SAMPLES));
    let (n, d) = (params.n_samples, params.dim);
    let mut z = Array2::<f64>::zeros((n, d));
    let mut labels = Vec::with_capacity(n);
    for mut row in z.outer_iter_mut() {
        let y = random_label(&mut rng);
        labels.push(y);
        let k = rng.random_range(-params.k..params.k) as f64;
        row[0] = params.epsilon * y as f64;
        row[1] = if y == 1 { params.rho * k } else { params.rho * (k + 0.5) };
        for v in row.iter_mut().skip(2) {
            let g: f64 = StandardNormal.sample(&mut rng);
            *v = params.sigma * g;
        }
    }
    let mut ds = LabeledDataset::new(
        rotate(z, &u),
        labels,
        Source::T2 { params, identity_rotation: identity },
    )?;
    ds.rotation = Some(u);
    Ok(ds)
}

/// Regenerates a synthetic dataset from its recorded source.
pub fn regenerate(source: &Source) -> Result<LabeledDataset> {
    let dim_identity = |d: usize, id: bool| id.then(|| OrthonormalMatrix::identity(d));
    match source {
        Source::T1 { params, identity_rotation } => {
            gen_t1_with_rotation(*params, dim_identity(params.dim, *identity_rotation))
        }
        Source::T2 { params, identity_rotation } => {
            gen_t2_with_rotation(*params, dim_identity(params.dim, *identity_rotation))
        }
        Source::Idx { images, labels } => load_idx(images, labels),
        Source::Derived { description } => {
            Err(Error::InvalidParameter(format!("cannot regenerate derived dataset `{description}`")))
        }
    }
}

/// Parsed IDX image file: count, rows, cols and raw pixel bytes.
pub fn parse_idx_images(bytes: &[u8]) -> Result<(usize, usize, usize, &[u8])> {
    let mut r = Reader::new(bytes, "idx images");
    let magic = r.u32_be()?;
    if magic != IDX_IMAGES_MAGIC {
        return Err(Error::BadMagic { expected: IDX_IMAGES_MAGIC, found: magic });
    }
    let n = r.u32_be()? as usize;
    let rows = r.u32_be()? as usize;
    let cols = r.u32_be()? as usize;
    let pixels = r.take(n * rows * cols)?;
    Ok((n, rows, cols, pixels))
}

pub fn parse_idx_labels(bytes: &[u8]) -> Result<&[u8]> {
    let mut r = Reader::new(bytes, "idx labels");
    let magic = r.u32_be()?;
    if magic != IDX_LABELS_MAGIC {
        return Err(Error::BadMagic { expected: IDX_LABELS_MAGIC, found: magic });
    }
    let n = r.u32_be()? as usize;
    let out = r.take(n)?;
    Ok(out)
}

/// Loads an IDX image/label pair. Pixels are scaled to `[0, 1]` by `/255`.
pub fn load_idx(images_path: &Path, labels_path: &Path) -> Result<LabeledDataset> {
    let image_bytes = fs::read(images_path)?;
    let label_bytes = fs::read(labels_path)?;
    let mut ds = idx_from_bytes(&image_bytes, &label_bytes)?;
    ds.source = Source::Idx { images: images_path.to_path_buf(), labels: labels_path.to_path_buf() };
    Ok(ds)
}

pub fn idx_from_bytes(image_bytes: &[u8], label_bytes: &[u8]) -> Result<LabeledDataset> {
    let (n, rows, cols, pixels) = parse_idx_images(image_bytes)?;
    let labels = parse_idx_labels(label_bytes)?;
    if labels.len() != n {
        return Err(Error::CountMismatch { images: n, labels: labels.len() });
    }
    let features = Array2::from_shape_vec(
        (n, rows * cols),
        pixels.iter().map(|&b| b as f64 / 255.0).collect(),
    )
    .expect("sizes from header");
    let labels = labels.iter().map(|&b| b as i64).collect();
    let mut ds = LabeledDataset::new(features, labels, Source::Derived { description: "idx bytes".into() })?;
    ds.image_shape = Some(ImageShape::new(1, rows, cols));
    Ok(ds)
}

/// Serializes an image dataset back to IDX bytes (`round(255·v)`, clamped).
pub fn idx_to_bytes(ds: &LabeledDataset) -> Result<(Vec<u8>, Vec<u8>)> {
    let shape = ds
        .image_shape
        .filter(|s| s.channels == 1)
        .ok_or_else(|| Error::InvalidParameter("IDX output needs a single-channel image shape".into()))?;
    let n = ds.len();
    let mut images = Vec::with_capacity(16 + n * shape.len());
    for v in [IDX_IMAGES_MAGIC, n as u32, shape.height as u32, shape.width as u32] {
        images.extend_from_slice(&v.to_be_bytes());
    }
    images.extend(ds.features.iter().map(|&v| (v * 255.0).round().clamp(0.0, 255.0) as u8));
    let mut labels = Vec::with_capacity(8 + n);
    labels.extend_from_slice(&IDX_LABELS_MAGIC.to_be_bytes());
    labels.extend_from_slice(&(n as u32).to_be_bytes());
    for &y in &ds.labels {
        let b = u8::try_from(y).map_err(|_| Error::InvalidParameter(format!("label {y} does not fit a byte")))?;
        labels.push(b);
    }
    Ok((images, labels))
}

pub fn write_idx(ds: &LabeledDataset, images_path: &Path, labels_path: &Path) -> Result<()> {
    let (images, labels) = idx_to_bytes(ds)?;
    write_atomic(images_path, &images)?;
    write_atomic(labels_path, &labels)
}

/// Applies a spectral operator to every image; labels are untouched.
pub fn transform_dataset(ds: &LabeledDataset, op: TransformOp) -> Result<LabeledDataset> {
    let shape = ds
        .image_shape
        .ok_or_else(|| Error::InvalidParameter("dataset has no image shape".into()))?;
    if shape.len() != ds.dim() {
        return Err(Error::DimensionMismatch { expected: shape.len(), got: ds.dim() });
    }
    let sp = Spectral::new(shape);
    let mut features = Array2::<f64>::zeros(ds.features.raw_dim());
    for (src, mut dst) in ds.features.outer_iter().zip(features.outer_iter_mut()) {
        let out: Array1<f64> = match op {
            TransformOp::Flip => sp.flip(src)?,
            TransformOp::LowPass(b) => sp.band(src, BandMode::LowPass, b)?,
            TransformOp::HighPass(b) => sp.band(src, BandMode::HighPass, b)?,
        };
        dst.assign(&out);
    }
    let mut out = ds.clone();
    out.features = features;
    out.transforms.push(op);
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::subspace::diagonal_subspaces;

    fn t1(n: usize, seed: u64) -> T1Params {
        T1Params { epsilon: 5.0, sigma: 1.0, n_samples: n, dim: 100, seed }
    }

    #[test]
    fn t1_identity_rotation_places_feature() {
        let ds = gen_t1_with_rotation(t1(500, 3), Some(OrthonormalMatrix::identity(100))).unwrap();
        for (row, &y) in ds.features.outer_iter().zip(&ds.labels) {
            assert_eq!(row[0], 5.0 * y as f64);
        }
    }

    #[test]
    fn t1_noise_variance() {
        let ds = gen_t1(t1(10_000, 8)).unwrap();
        let u = ds.rotation.as_ref().unwrap();
        let z = ds.features.dot(u.matrix());
        for j in 1..100 {
            let col = z.column(j);
            let mean = col.mean().unwrap();
            let var = col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (col.len() - 1) as f64;
            assert!((0.9..=1.1).contains(&var), "coord {j}: {var}");
        }
    }

    #[test]
    fn t1_separable_by_u1_with_margin_epsilon() {
        let ds = gen_t1(t1(2000, 4)).unwrap();
        let u1 = ds.rotation.as_ref().unwrap().column(0).to_owned();
        for (row, &y) in ds.features.outer_iter().zip(&ds.labels) {
            let proj = row.dot(&u1);
            assert_close!(proj * y as f64, 5.0, 1e-10);
        }
    }

    #[test]
    fn generators_are_deterministic() {
        assert_eq!(gen_t1(t1(300, 1)).unwrap(), gen_t1(t1(300, 1)).unwrap());
        let p = T2Params { rho: 20.0, epsilon: 1.0, sigma: 1.0, k: 3, n_samples: 300, dim: 10, seed: 2 };
        assert_eq!(gen_t2(p).unwrap(), gen_t2(p).unwrap());
    }

    #[test]
    fn t2_lattice() {
        let p = T2Params { rho: 20.0, epsilon: 1.0, sigma: 1.0, k: 3, n_samples: 5000, dim: 100, seed: 5 };
        let ds = gen_t2_with_rotation(p, Some(OrthonormalMatrix::identity(100))).unwrap();
        for (row, &y) in ds.features.outer_iter().zip(&ds.labels) {
            let v = row[1];
            let tenth = v / 10.0;
            assert_eq!(tenth, tenth.round());
            assert!((-60.0..=50.0).contains(&v));
            let even = (tenth.round() as i64).rem_euclid(2) == 0;
            assert_eq!(even, y == 1, "value {v} label {y}");
            assert_eq!(row[0], y as f64);
        }
    }

    #[test]
    fn t2_zero_epsilon() {
        let p = T2Params { rho: 20.0, epsilon: 0.0, sigma: 1.0, k: 3, n_samples: 200, dim: 5, seed: 5 };
        let ds = gen_t2_with_rotation(p, Some(OrthonormalMatrix::identity(5))).unwrap();
        assert!(ds.features.column(0).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn t2_positive_class_on_multiples_of_rho() {
        let p = T2Params { rho: 7.0, epsilon: 1.0, sigma: 0.5, k: 4, n_samples: 100_000, dim: 3, seed: 6 };
        let ds = gen_t2_with_rotation(p, Some(OrthonormalMatrix::identity(3))).unwrap();
        let mut pos = std::collections::BTreeMap::new();
        let mut neg = std::collections::BTreeMap::new();
        for (row, &y) in ds.features.outer_iter().zip(&ds.labels) {
            let key = (row[1] * 2.0 / 7.0).round() as i64;
            *(if y == 1 { &mut pos } else { &mut neg }).entry(key).or_insert(0usize) += 1;
        }
        assert!(pos.keys().all(|k| k % 2 == 0));
        assert!(neg.keys().all(|k| k.rem_euclid(2) == 1));
        assert_eq!(pos.len(), 8);
        assert_eq!(neg.len(), 8);
    }

    fn tiny_idx() -> (Vec<u8>, Vec<u8>) {
        let mut images = Vec::new();
        for v in [IDX_IMAGES_MAGIC, 2, 2, 2] {
            images.extend_from_slice(&v.to_be_bytes());
        }
        images.extend_from_slice(&[0, 255, 51, 102, 255, 0, 0, 204]);
        let mut labels = Vec::new();
        labels.extend_from_slice(&IDX_LABELS_MAGIC.to_be_bytes());
        labels.extend_from_slice(&2u32.to_be_bytes());
        labels.extend_from_slice(&[3, 7]);
        (images, labels)
    }

    #[test]
    fn idx_parse_exact_values() {
        let (images, labels) = tiny_idx();
        let ds = idx_from_bytes(&images, &labels).unwrap();
        assert_eq!(ds.features.row(0).to_vec(), vec![0.0, 1.0, 0.2, 0.4]);
        assert_eq!(ds.features.row(1).to_vec(), vec![1.0, 0.0, 0.0, 0.8]);
        assert_eq!(ds.labels, vec![3, 7]);
        assert_eq!(ds.image_shape, Some(ImageShape::new(1, 2, 2)));
        let (i2, l2) = idx_to_bytes(&ds).unwrap();
        assert_eq!((i2, l2), (images, labels));
    }

    #[test]
    fn idx_errors() {
        let (images, labels) = tiny_idx();
        let mut bad = labels.clone();
        bad[..4].copy_from_slice(&IDX_IMAGES_MAGIC.to_be_bytes());
        let err = idx_from_bytes(&images, &bad).unwrap_err();
        assert!(err.to_string().contains("bad magic"));

        assert!(matches!(idx_from_bytes(&images[..15], &labels), Err(Error::Truncated(_))));
        assert!(matches!(idx_from_bytes(&images[..20], &labels), Err(Error::Truncated(_))));

        let mut one = labels[..8].to_vec();
        one[7] = 1;
        one.push(3);
        assert!(matches!(idx_from_bytes(&images, &one), Err(Error::CountMismatch { images: 2, labels: 1 })));
    }

    fn image_set(shape: ImageShape, n: usize, seed: u64) -> LabeledDataset {
        let mut rng = seeding::rng(seed);
        let features = Array2::from_shape_fn((n, shape.len()), |_| rng.random::<f64>());
        let mut ds = LabeledDataset::new(features, vec![0; n], Source::Derived { description: "test".into() }).unwrap();
        ds.image_shape = Some(shape);
        ds
    }

    #[test]
    fn transforms() {
        let ds = image_set(ImageShape::new(1, 8, 8), 20, 1);
        let twice = transform_dataset(&transform_dataset(&ds, TransformOp::Flip).unwrap(), TransformOp::Flip).unwrap();
        let err = (&twice.features - &ds.features).iter().map(|v| v.abs()).fold(0.0, f64::max);
        assert!(err <= 1e-10);
        assert_eq!(twice.transforms, vec![TransformOp::Flip, TransformOp::Flip]);
        assert_eq!(twice.labels, ds.labels);

        let lo = transform_dataset(&ds, TransformOp::LowPass(4)).unwrap();
        let zero = transform_dataset(&lo, TransformOp::HighPass(4)).unwrap();
        assert!(zero.features.iter().all(|v| v.abs() <= 1e-10));

        let big = image_set(ImageShape::new(1, 32, 32), 5, 2);
        let lo = transform_dataset(&big, TransformOp::LowPass(16)).unwrap();
        let seq = diagonal_subspaces(ImageShape::new(1, 32, 32), 8, 1).unwrap();
        for row in lo.features.outer_iter() {
            for s in seq.items.iter().filter(|s| s.block.unwrap().0 >= 16) {
                assert!(s.energy(row).unwrap() <= 1e-20);
            }
        }

        let mut flat = ds.clone();
        flat.image_shape = None;
        assert!(transform_dataset(&flat, TransformOp::Flip).is_err());
        let mut wrong = ds.clone();
        wrong.image_shape = Some(ImageShape::new(1, 4, 4));
        assert!(matches!(transform_dataset(&wrong, TransformOp::Flip), Err(Error::DimensionMismatch { .. })));
    }

    #[test]
    fn binary_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t1.bin");
        let ds = gen_t1(t1(50, 9)).unwrap();
        ds.save(&path).unwrap();
        let back = LabeledDataset::load(&path).unwrap();
        assert_eq!(back, ds);
        assert_eq!(regenerate(&back.source).unwrap(), ds);
    }
}
