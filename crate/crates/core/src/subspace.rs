//! Orthonormal bases, the 2D-DCT, and the subspace sequences used to probe a
//! classifier's boundary.
//!
//! Images are stored channel-major `(C, H, W)` and vectorized in row-major
//! order, so a flattened image and a subspace basis column always agree on
//! coordinate indexing.

use nalgebra::DMatrix;
use ndarray::linalg::general_mat_vec_mul;
use ndarray::{s, Array1, Array2, Array3, ArrayView1, ArrayView2, ArrayViewMut1, Axis};
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seeding;

/// Tolerance for orthonormality checks on constructed bases.
pub const ORTHO_TOL: f64 = 1e-10;

/// Shape of a channel-major image.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ImageShape {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
}

impl ImageShape {
    pub fn new(channels: usize, height: usize, width: usize) -> Self {
        Self { channels, height, width }
    }

    pub fn len(&self) -> usize {
        self.channels * self.height * self.width
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn min_side(&self) -> usize {
        self.height.min(self.width)
    }
}

/// Square matrix with orthonormal columns.
#[derive(Debug, Clone, PartialEq)]
pub struct OrthonormalMatrix(Array2<f64>);

impl OrthonormalMatrix {
    pub fn identity(dim: usize) -> Self {
        Self(Array2::eye(dim))
    }

    /// Wraps `m`, rejecting it unless `max |MᵀM − I| ≤ 1e−10`.
    pub fn from_matrix(m: Array2<f64>) -> Result<Self> {
        if m.nrows() != m.ncols() || m.nrows() == 0 {
            return Err(Error::InvalidParameter(format!(
                "orthonormal matrix must be square and non-empty, got {}x{}",
                m.nrows(),
                m.ncols()
            )));
        }
        let err = orthogonality_error(m.view());
        if err > ORTHO_TOL {
            return Err(Error::InvalidParameter(format!(
                "columns are not orthonormal (max deviation {err:e})"
            )));
        }
        Ok(Self(m))
    }

    pub fn dim(&self) -> usize {
        self.0.nrows()
    }

    pub fn matrix(&self) -> &Array2<f64> {
        &self.0
    }

    pub fn column(&self, i: usize) -> ArrayView1<'_, f64> {
        self.0.column(i)
    }

    pub fn into_inner(self) -> Array2<f64> {
        self.0
    }

    /// Determinant via LU.
    pub fn determinant(&self) -> f64 {
        to_nalgebra(self.0.view()).determinant()
    }
}

/// `max |BᵀB − I|` over all entries.
pub fn orthogonality_error(basis: ArrayView2<'_, f64>) -> f64 {
    let gram = basis.t().dot(&basis);
    gram.indexed_iter()
        .map(|((i, j), &v)| (v - if i == j { 1.0 } else { 0.0 }).abs())
        .fold(0.0, f64::max)
}

fn to_nalgebra(m: ArrayView2<'_, f64>) -> DMatrix<f64> {
    DMatrix::from_fn(m.nrows(), m.ncols(), |i, j| m[[i, j]])
}

/// Haar-distributed rotation in `SO(dim)`: QR of a standard Gaussian matrix
/// with the R-diagonal sign correction, then one column negated if needed so
/// that the determinant is `+1`.
pub fn random_rotation(dim: usize, seed: u64) -> Result<OrthonormalMatrix> {
    if dim == 0 {
        return Err(Error::InvalidParameter("rotation dimension must be >= 1".into()));
    }
    if dim == 1 {
        return Ok(OrthonormalMatrix::identity(1));
    }
    let mut rng = seeding::rng(seed);
    let entries: Vec<f64> = (0..dim * dim).map(|_| StandardNormal.sample(&mut rng)).collect();
    let gaussian = DMatrix::from_row_slice(dim, dim, &entries);
    let qr = gaussian.qr();
    let r = qr.r();
    let mut q = qr.q();
    for j in 0..dim {
        if r[(j, j)] < 0.0 {
            q.column_mut(j).neg_mut();
        }
    }
    if q.determinant() < 0.0 {
        q.column_mut(0).neg_mut();
    }
    let m = Array2::from_shape_fn((dim, dim), |(i, j)| q[(i, j)]);
    Ok(OrthonormalMatrix(m))
}

/// Orthonormal type-II DCT matrix: row `k`, column `j` is
/// `c_k cos(π (2j+1) k / 2n)` with `c_0 = √(1/n)`, `c_k = √(2/n)`.
pub fn dct_matrix(n: usize) -> Array2<f64> {
    let nf = n as f64;
    Array2::from_shape_fn((n, n), |(k, j)| {
        let c = if k == 0 { (1.0 / nf).sqrt() } else { (2.0 / nf).sqrt() };
        c * (std::f64::consts::PI * (2 * j + 1) as f64 * k as f64 / (2.0 * nf)).cos()
    })
}

/// A `(C, H, W)` image.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageTensor {
    pub values: Array3<f64>,
}

impl ImageTensor {
    pub fn new(values: Array3<f64>) -> Self {
        Self { values }
    }

    pub fn from_flat(shape: ImageShape, flat: ArrayView1<'_, f64>) -> Result<Self> {
        if flat.len() != shape.len() {
            return Err(Error::DimensionMismatch { expected: shape.len(), got: flat.len() });
        }
        let values = Array3::from_shape_vec(
            (shape.channels, shape.height, shape.width),
            flat.iter().copied().collect(),
        )
        .expect("length checked");
        Ok(Self { values })
    }

    pub fn shape(&self) -> ImageShape {
        let (c, h, w) = self.values.dim();
        ImageShape::new(c, h, w)
    }

    pub fn flatten(&self) -> Array1<f64> {
        self.values.iter().copied().collect()
    }

    pub fn norm(&self) -> f64 {
        self.values.iter().map(|v| v * v).sum::<f64>().sqrt()
    }
}

/// Which band a [`band_filter`] keeps.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BandMode {
    LowPass,
    HighPass,
}

/// Cached separable 2D-DCT for one image shape. Works on flattened images.
#[derive(Debug, Clone)]
pub struct Spectral {
    shape: ImageShape,
    rows: Array2<f64>,
    cols: Array2<f64>,
    /// `Mᵀ J M` for rows and columns, `J` the reversal permutation.
    flip_rows: Array2<f64>,
    flip_cols: Array2<f64>,
    /// Per-channel flip as one `HW × HW` matrix, kept for small images.
    flip_dense: Option<Array2<f64>>,
}

const DENSE_FLIP_MAX: usize = 256;

fn reversal_conjugate(m: &Array2<f64>) -> Array2<f64> {
    let reversed = m.slice(s![..;-1, ..]);
    m.t().dot(&reversed)
}

impl Spectral {
    pub fn new(shape: ImageShape) -> Self {
        let rows = dct_matrix(shape.height);
        let cols = dct_matrix(shape.width);
        let flip_rows = reversal_conjugate(&rows);
        let flip_cols = reversal_conjugate(&cols);
        let (h, w) = (shape.height, shape.width);
        let flip_dense = (h * w <= DENSE_FLIP_MAX)
            .then(|| Array2::from_shape_fn((h * w, h * w), |(p, q)| flip_rows[[p / w, q / w]] * flip_cols[[p % w, q % w]]));
        Self { shape, rows, cols, flip_rows, flip_cols, flip_dense }
    }

    pub fn shape(&self) -> ImageShape {
        self.shape
    }

    fn check(&self, flat: ArrayView1<'_, f64>) -> Result<()> {
        if flat.len() != self.shape.len() {
            return Err(Error::DimensionMismatch { expected: self.shape.len(), got: flat.len() });
        }
        Ok(())
    }

    fn per_channel<F>(&self, flat: ArrayView1<'_, f64>, f: F) -> Result<Array1<f64>>
    where
        F: Fn(ArrayView2<'_, f64>) -> Array2<f64>,
    {
        self.check(flat)?;
        let ImageShape { channels, height, width } = self.shape;
        let cube = flat.into_shape_with_order((channels, height, width)).expect("length checked");
        let mut out = Vec::with_capacity(self.shape.len());
        for c in 0..channels {
            out.extend(f(cube.index_axis(Axis(0), c)).iter().copied());
        }
        Ok(Array1::from(out))
    }

    /// `M_h · X · M_wᵀ` per channel.
    pub fn forward(&self, flat: ArrayView1<'_, f64>) -> Result<Array1<f64>> {
        self.per_channel(flat, |x| self.rows.dot(&x).dot(&self.cols.t()))
    }

    /// `M_hᵀ · Y · M_w` per channel.
    pub fn inverse(&self, flat: ArrayView1<'_, f64>) -> Result<Array1<f64>> {
        self.per_channel(flat, |y| self.rows.t().dot(&y).dot(&self.cols))
    }

    /// Reverses row and column order of the coefficients, conjugated by the DCT.
    pub fn flip(&self, flat: ArrayView1<'_, f64>) -> Result<Array1<f64>> {
        let mut out = Array1::zeros(self.shape.len());
        self.flip_into(flat, out.view_mut())?;
        Ok(out)
    }

    /// [`Spectral::flip`] writing into a caller-provided buffer.
    pub fn flip_into(&self, flat: ArrayView1<'_, f64>, mut out: ArrayViewMut1<'_, f64>) -> Result<()> {
        self.check(flat)?;
        self.check(out.view())?;
        let plane = self.shape.height * self.shape.width;
        match &self.flip_dense {
            Some(f) => {
                for c in 0..self.shape.channels {
                    let range = s![c * plane..(c + 1) * plane];
                    general_mat_vec_mul(1.0, f, &flat.slice(range), 0.0, &mut out.slice_mut(range));
                }
            }
            None => out.assign(&self.per_channel(flat, |x| self.flip_rows.dot(&x).dot(&self.flip_cols.t()))?),
        }
        Ok(())
    }

    /// Keeps (low pass) or removes (high pass) the `side × side` top-left block
    /// of DCT coefficients in every channel.
    pub fn band(&self, flat: ArrayView1<'_, f64>, mode: BandMode, side: usize) -> Result<Array1<f64>> {
        let max = self.shape.min_side();
        if side == 0 || side > max {
            return Err(Error::BandOutOfRange { side, max });
        }
        let coeffs = self.forward(flat)?;
        let ImageShape { channels, height, width } = self.shape;
        let mut cube = coeffs.into_shape_with_order((channels, height, width)).expect("shape");
        for ((_, i, j), v) in cube.indexed_iter_mut() {
            let inside = i < side && j < side;
            let keep = match mode {
                BandMode::LowPass => inside,
                BandMode::HighPass => !inside,
            };
            if !keep {
                *v = 0.0;
            }
        }
        let flat = cube.into_shape_with_order(self.shape.len()).expect("shape");
        self.inverse(flat.view())
    }

    /// Flattened spatial image of DCT atom `(i, j)` placed in channel `c`.
    pub fn atom(&self, i: usize, j: usize, c: usize) -> Array1<f64> {
        let ImageShape { channels, height, width } = self.shape;
        let mut out = Array3::<f64>::zeros((channels, height, width));
        let row = self.rows.row(i);
        let col = self.cols.row(j);
        for a in 0..height {
            for b in 0..width {
                out[[c, a, b]] = row[a] * col[b];
            }
        }
        out.into_shape_with_order(self.shape.len()).expect("shape")
    }
}

pub fn dct2(image: &ImageTensor) -> ImageTensor {
    spectral_map(image, |sp, v| sp.forward(v))
}

pub fn idct2(image: &ImageTensor) -> ImageTensor {
    spectral_map(image, |sp, v| sp.inverse(v))
}

/// `x' = D⁻¹(flip(D(x)))`: swaps low and high frequencies. An isometric involution.
pub fn flip_frequency(image: &ImageTensor) -> ImageTensor {
    spectral_map(image, |sp, v| sp.flip(v))
}

pub fn band_filter(image: &ImageTensor, mode: BandMode, side: usize) -> Result<ImageTensor> {
    let shape = image.shape();
    let sp = Spectral::new(shape);
    let out = sp.band(image.flatten().view(), mode, side)?;
    ImageTensor::from_flat(shape, out.view())
}

fn spectral_map<F>(image: &ImageTensor, f: F) -> ImageTensor
where
    F: Fn(&Spectral, ArrayView1<'_, f64>) -> Result<Array1<f64>>,
{
    let shape = image.shape();
    let sp = Spectral::new(shape);
    let out = f(&sp, image.flatten().view()).expect("shape derived from the image");
    ImageTensor::from_flat(shape, out.view()).expect("same shape")
}

/// A subspace given by an orthonormal basis (columns of a `D × S` matrix).
#[derive(Debug, Clone, PartialEq)]
pub struct Subspace {
    basis: Array2<f64>,
    pub label: String,
    /// Frequency block origin `(row, col)` for DCT-derived subspaces.
    pub block: Option<(usize, usize)>,
}

impl Subspace {
    pub fn new(basis: Array2<f64>, label: impl Into<String>) -> Result<Self> {
        let (d, s) = basis.dim();
        if s == 0 || s > d {
            return Err(Error::InvalidParameter(format!("subspace dimension {s} not in 1..={d}")));
        }
        let err = orthogonality_error(basis.view());
        if err > ORTHO_TOL {
            return Err(Error::InvalidParameter(format!(
                "subspace basis is not orthonormal (max deviation {err:e})"
            )));
        }
        Ok(Self { basis, label: label.into(), block: None })
    }

    pub fn with_block(mut self, block: (usize, usize)) -> Self {
        self.block = Some(block);
        self
    }

    /// The whole ambient space.
    pub fn full(dim: usize) -> Self {
        Self { basis: Array2::eye(dim), label: "full".into(), block: None }
    }

    /// `span{v}`.
    pub fn from_direction(v: ArrayView1<'_, f64>, label: impl Into<String>) -> Result<Self> {
        let n = l2_norm(v);
        if n == 0.0 || !n.is_finite() {
            return Err(Error::InvalidParameter("direction must be a finite non-zero vector".into()));
        }
        let col = v.mapv(|x| x / n);
        let basis = col.insert_axis(Axis(1));
        Self::new(basis, label)
    }

    /// A uniformly random `s`-dimensional subspace of `self`.
    pub fn random_within(&self, s: usize, seed: u64, label: impl Into<String>) -> Result<Self> {
        if s == 0 || s > self.dim() {
            return Err(Error::TooManyDimensions { requested: s, ambient: self.dim() });
        }
        let rot = random_rotation(self.dim(), seed)?;
        let basis = self.basis.dot(&rot.matrix().slice(s![.., ..s]));
        Self::new(basis, label)
    }

    pub fn basis(&self) -> &Array2<f64> {
        &self.basis
    }

    pub fn ambient_dim(&self) -> usize {
        self.basis.nrows()
    }

    pub fn dim(&self) -> usize {
        self.basis.ncols()
    }

    fn check(&self, v: ArrayView1<'_, f64>) -> Result<()> {
        if v.len() != self.ambient_dim() {
            return Err(Error::DimensionMismatch { expected: self.ambient_dim(), got: v.len() });
        }
        Ok(())
    }

    /// Coordinates `Bᵀv`.
    pub fn coordinates(&self, v: ArrayView1<'_, f64>) -> Result<Array1<f64>> {
        self.check(v)?;
        Ok(self.basis.t().dot(&v))
    }

    /// `B Bᵀ v`.
    pub fn project(&self, v: ArrayView1<'_, f64>) -> Result<Array1<f64>> {
        let c = self.coordinates(v)?;
        Ok(self.basis.dot(&c))
    }

    /// `‖Bᵀv‖²`, the energy of `v` inside the subspace.
    pub fn energy(&self, v: ArrayView1<'_, f64>) -> Result<f64> {
        let c = self.coordinates(v)?;
        Ok(c.dot(&c))
    }
}

/// Orthogonal projection of `v` onto `subspace`.
pub fn project(v: ArrayView1<'_, f64>, subspace: &Subspace) -> Result<Array1<f64>> {
    subspace.project(v)
}

pub fn l2_norm(v: ArrayView1<'_, f64>) -> f64 {
    v.dot(&v).sqrt()
}

/// How a sequence was generated.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scheme {
    Diagonal,
    Grid,
    Random,
    Custom,
}

/// Ordered list of subspaces sharing one ambient space.
#[derive(Debug, Clone)]
pub struct SubspaceSequence {
    pub items: Vec<Subspace>,
    pub scheme: Scheme,
    pub window: Option<usize>,
    pub stride: Option<usize>,
    pub image_shape: Option<ImageShape>,
    /// Seed and per-item dimensions for the random scheme.
    pub random: Option<(u64, Vec<usize>)>,
}

impl SubspaceSequence {
    /// A hand-assembled sequence; every item must share the same ambient dimension.
    pub fn custom(items: Vec<Subspace>) -> Result<Self> {
        let first = items.first().ok_or_else(|| Error::Empty("subspace sequence".into()))?;
        let d = first.ambient_dim();
        if let Some(bad) = items.iter().find(|s| s.ambient_dim() != d) {
            return Err(Error::DimensionMismatch { expected: d, got: bad.ambient_dim() });
        }
        Ok(Self { items, scheme: Scheme::Custom, window: None, stride: None, image_shape: None, random: None })
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn ambient_dim(&self) -> Option<usize> {
        self.items.first().map(Subspace::ambient_dim)
    }

    pub fn labels(&self) -> Vec<String> {
        self.items.iter().map(|s| s.label.clone()).collect()
    }

    /// JSON-serializable description from which the bases can be regenerated.
    pub fn descriptor(&self) -> SequenceDescriptor {
        SequenceDescriptor {
            scheme: self.scheme,
            window: self.window,
            stride: self.stride,
            image_shape: self.image_shape,
            offsets: self.items.iter().filter_map(|s| s.block).collect(),
            labels: self.labels(),
            ambient_dim: self.ambient_dim(),
            seed: self.random.as_ref().map(|r| r.0),
            dims: self.random.as_ref().map(|r| r.1.clone()),
        }
    }
}

/// Serialized form of a [`SubspaceSequence`]. Bases are never stored.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SequenceDescriptor {
    pub scheme: Scheme,
    pub window: Option<usize>,
    pub stride: Option<usize>,
    pub image_shape: Option<ImageShape>,
    pub offsets: Vec<(usize, usize)>,
    pub labels: Vec<String>,
    pub ambient_dim: Option<usize>,
    pub seed: Option<u64>,
    pub dims: Option<Vec<usize>>,
}

impl SequenceDescriptor {
    /// Regenerates the sequence. Custom sequences cannot be rebuilt.
    pub fn build(&self) -> Result<SubspaceSequence> {
        let need = |o: Option<usize>, what: &str| {
            o.ok_or_else(|| Error::InvalidParameter(format!("descriptor is missing `{what}`")))
        };
        match self.scheme {
            Scheme::Diagonal | Scheme::Grid => {
                let shape = self
                    .image_shape
                    .ok_or_else(|| Error::InvalidParameter("descriptor is missing `image_shape`".into()))?;
                let k = need(self.window, "window")?;
                let t = need(self.stride, "stride")?;
                if self.scheme == Scheme::Diagonal {
                    diagonal_subspaces(shape, k, t)
                } else {
                    grid_subspaces(shape, k, t)
                }
            }
            Scheme::Random => {
                let seed = self
                    .seed
                    .ok_or_else(|| Error::InvalidParameter("descriptor is missing `seed`".into()))?;
                let dims = self
                    .dims
                    .clone()
                    .ok_or_else(|| Error::InvalidParameter("descriptor is missing `dims`".into()))?;
                let ambient = self
                    .image_shape
                    .map(|s| s.len())
                    .or(self.ambient_dim)
                    .unwrap_or_else(|| dims.iter().sum());
                let mut seq = random_subspace_sequence(ambient, &dims, seed)?;
                seq.image_shape = self.image_shape;
                Ok(seq)
            }
            Scheme::Custom => Err(Error::InvalidParameter(
                "custom sequences cannot be regenerated from a descriptor".into(),
            )),
        }
    }
}

fn check_window(shape: ImageShape, k: usize, t: usize) -> Result<()> {
    if k == 0 || t == 0 {
        return Err(Error::InvalidParameter("window and stride must be >= 1".into()));
    }
    if k > shape.min_side() {
        return Err(Error::WindowTooLarge { k, side: shape.min_side() });
    }
    Ok(())
}

/// Subspace spanned by DCT atoms `(r+k, c+k)`, `k = 0..K`, replicated over channels.
fn dct_block(sp: &Spectral, r: usize, c: usize, k: usize, label: String) -> Subspace {
    let shape = sp.shape();
    let mut basis = Array2::<f64>::zeros((shape.len(), k * shape.channels));
    let mut col = 0;
    for step in 0..k {
        for ch in 0..shape.channels {
            basis.column_mut(col).assign(&sp.atom(r + step, c + step, ch));
            col += 1;
        }
    }
    Subspace { basis, label, block: Some((r, c)) }
}

/// Sliding window of `K` diagonal DCT atoms with stride `T`, low to high frequency.
pub fn diagonal_subspaces(shape: ImageShape, k: usize, t: usize) -> Result<SubspaceSequence> {
    check_window(shape, k, t)?;
    let count = (shape.min_side() - k) / t + 1;
    let sp = Spectral::new(shape);
    let items = (0..count)
        .map(|j| {
            let start = j * t;
            dct_block(&sp, start, start, k, format!("diag{start}"))
        })
        .collect();
    Ok(SubspaceSequence {
        items,
        scheme: Scheme::Diagonal,
        window: Some(k),
        stride: Some(t),
        image_shape: Some(shape),
        random: None,
    })
}

/// Blocks at every grid origin `(iT, jT)`, row-major over the grid.
pub fn grid_subspaces(shape: ImageShape, k: usize, t: usize) -> Result<SubspaceSequence> {
    check_window(shape, k, t)?;
    let rows = (shape.height - k) / t + 1;
    let cols = (shape.width - k) / t + 1;
    let sp = Spectral::new(shape);
    let mut items = Vec::with_capacity(rows * cols);
    for i in 0..rows {
        for j in 0..cols {
            let (r, c) = (i * t, j * t);
            items.push(dct_block(&sp, r, c, k, format!("grid{r}_{c}")));
        }
    }
    Ok(SubspaceSequence {
        items,
        scheme: Scheme::Grid,
        window: Some(k),
        stride: Some(t),
        image_shape: Some(shape),
        random: None,
    })
}

/// Disjoint consecutive column blocks of one random rotation.
pub fn random_subspace_sequence(ambient_dim: usize, dims: &[usize], seed: u64) -> Result<SubspaceSequence> {
    let total: usize = dims.iter().sum();
    if total > ambient_dim {
        return Err(Error::TooManyDimensions { requested: total, ambient: ambient_dim });
    }
    if dims.is_empty() || dims.contains(&0) {
        return Err(Error::InvalidParameter("random sequence dims must be non-empty and positive".into()));
    }
    let rot = random_rotation(ambient_dim, seed)?;
    let mut start = 0;
    let items = dims
        .iter()
        .enumerate()
        .map(|(i, &d)| {
            let basis = rot.matrix().slice(s![.., start..start + d]).to_owned();
            start += d;
            Subspace { basis, label: format!("rand{i}"), block: None }
        })
        .collect();
    Ok(SubspaceSequence {
        items,
        scheme: Scheme::Random,
        window: None,
        stride: None,
        image_shape: None,
        random: Some((seed, dims.to_vec())),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use rand::Rng;

    fn random_image(shape: ImageShape, seed: u64) -> ImageTensor {
        let mut rng = seeding::rng(seed);
        let flat: Array1<f64> = (0..shape.len()).map(|_| rng.random::<f64>()).collect();
        ImageTensor::from_flat(shape, flat.view()).unwrap()
    }

    fn max_abs_diff(a: &ImageTensor, b: &ImageTensor) -> f64 {
        a.values.iter().zip(b.values.iter()).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
    }

    #[test]
    fn rotation_dim_one_is_identity() {
        let u = random_rotation(1, 99).unwrap();
        assert_eq!(u.matrix(), &array![[1.0]]);
    }

    #[test]
    fn rotation_is_special_orthogonal() {
        let u = random_rotation(100, 7).unwrap();
        assert!(orthogonality_error(u.matrix().view()) <= 1e-10);
        assert_close!(u.determinant(), 1.0, 1e-8);
    }

    #[test]
    fn rotation_depends_on_seed() {
        let a = random_rotation(3, 1).unwrap();
        let b = random_rotation(3, 2).unwrap();
        let diff = (a.matrix() - b.matrix()).iter().map(|v| v.abs()).fold(0.0, f64::max);
        assert!(diff > 1e-3);
        assert_eq!(a, random_rotation(3, 1).unwrap());
    }

    #[test]
    fn dct_small_cases() {
        assert_eq!(dct_matrix(1), array![[1.0]]);
        let m = dct_matrix(2);
        let h = std::f64::consts::FRAC_1_SQRT_2;
        for (got, want) in m.iter().zip([h, h, h, -h]) {
            assert_close!(*got, want, 1e-4);
        }
        for n in 1..20 {
            let m = dct_matrix(n);
            assert!(orthogonality_error(m.t()) <= 1e-10, "n={n}");
        }
    }

    #[test]
    fn dct_of_constant_concentrates_at_dc() {
        let shape = ImageShape::new(1, 4, 4);
        let img = ImageTensor::new(Array3::from_elem((1, 4, 4), 0.3));
        let y = dct2(&img);
        for ((_, i, j), v) in y.values.indexed_iter() {
            let want = if i == 0 && j == 0 { 4.0 * 0.3 } else { 0.0 };
            assert_close!(*v, want, 1e-12);
        }
        assert_eq!(y.shape(), shape);
    }

    #[test]
    fn dct_matches_explicit_product() {
        let img = random_image(ImageShape::new(1, 8, 8), 3);
        let m = dct_matrix(8);
        let x = img.values.index_axis(Axis(0), 0);
        let mut expect = Array2::<f64>::zeros((8, 8));
        for k in 0..8 {
            for l in 0..8 {
                let mut acc = 0.0;
                for a in 0..8 {
                    for b in 0..8 {
                        acc += m[[k, a]] * x[[a, b]] * m[[l, b]];
                    }
                }
                expect[[k, l]] = acc;
            }
        }
        let got = dct2(&img);
        let diff = (&got.values.index_axis(Axis(0), 0) - &expect).iter().map(|v| v.abs()).fold(0.0, f64::max);
        assert!(diff <= 1e-12);
    }

    #[test]
    fn round_trip_and_norm() {
        let img = random_image(ImageShape::new(3, 5, 7), 11);
        let y = dct2(&img);
        assert!(max_abs_diff(&idct2(&y), &img) <= 1e-10);
        assert_close!(y.norm(), img.norm(), 1e-10);
    }

    #[test]
    fn flip_properties() {
        let img = random_image(ImageShape::new(2, 6, 6), 5);
        let f = flip_frequency(&img);
        assert!(max_abs_diff(&flip_frequency(&f), &img) <= 1e-10);
        assert_close!(f.norm(), img.norm(), 1e-10);

        let constant = ImageTensor::new(Array3::from_elem((1, 5, 4), 1.0));
        let spec = dct2(&flip_frequency(&constant));
        for ((_, i, j), v) in spec.values.indexed_iter() {
            if (i, j) == (4, 3) {
                assert!(v.abs() > 1.0);
            } else {
                assert_close!(*v, 0.0, 1e-10);
            }
        }
    }

    #[test]
    fn band_filters() {
        let img = random_image(ImageShape::new(1, 32, 32), 9);
        let ident = band_filter(&img, BandMode::LowPass, 32).unwrap();
        assert!(max_abs_diff(&ident, &img) <= 1e-10);

        let lo = band_filter(&img, BandMode::LowPass, 16).unwrap();
        let hi = band_filter(&img, BandMode::HighPass, 16).unwrap();
        let sum = ImageTensor::new(&lo.values + &hi.values);
        assert!(max_abs_diff(&sum, &img) <= 1e-10);

        let seq = diagonal_subspaces(img.shape(), 4, 2).unwrap();
        let flat = lo.flatten();
        for s in seq.items.iter().filter(|s| s.block.unwrap().0 >= 16) {
            assert!(s.energy(flat.view()).unwrap() <= 1e-20);
        }

        assert!(matches!(band_filter(&img, BandMode::LowPass, 33), Err(Error::BandOutOfRange { .. })));
        assert!(matches!(band_filter(&img, BandMode::HighPass, 0), Err(Error::BandOutOfRange { .. })));
    }

    #[test]
    fn diagonal_counts() {
        let s = diagonal_subspaces(ImageShape::new(1, 28, 28), 8, 1).unwrap();
        assert_eq!(s.len(), 21);
        assert!(s.items.iter().all(|x| x.dim() == 8));

        let s = diagonal_subspaces(ImageShape::new(3, 32, 32), 8, 2).unwrap();
        assert_eq!(s.len(), 13);
        assert!(s.items.iter().all(|x| x.dim() == 24));
        for item in &s.items {
            assert!(orthogonality_error(item.basis().view()) <= 1e-10);
        }

        assert!(matches!(
            diagonal_subspaces(ImageShape::new(1, 8, 8), 9, 1),
            Err(Error::WindowTooLarge { .. })
        ));
    }

    #[test]
    fn grid_contains_diagonal() {
        let shape = ImageShape::new(1, 28, 28);
        let grid = grid_subspaces(shape, 8, 3).unwrap();
        assert_eq!(grid.len(), 49);
        let diag = diagonal_subspaces(shape, 8, 3).unwrap();
        for d in &diag.items {
            let g = grid.items.iter().find(|g| g.block == d.block).unwrap();
            assert_eq!(g.basis(), d.basis());
        }
        for g in &grid.items {
            assert!(orthogonality_error(g.basis().view()) <= 1e-10);
        }
    }

    #[test]
    fn random_sequence() {
        let whole = random_subspace_sequence(6, &[6], 3).unwrap();
        assert_eq!(whole.items[0].dim(), 6);

        let seq = random_subspace_sequence(10, &[3, 4], 3).unwrap();
        let cross = seq.items[0].basis().t().dot(seq.items[1].basis());
        assert!(cross.iter().all(|v| v.abs() <= 1e-10));
        let again = random_subspace_sequence(10, &[3, 4], 3).unwrap();
        assert_eq!(seq.items[1].basis(), again.items[1].basis());

        assert!(matches!(random_subspace_sequence(10, &[6, 5], 3), Err(Error::TooManyDimensions { .. })));
    }

    #[test]
    fn projection_basics() {
        let seq = random_subspace_sequence(8, &[3, 5], 21).unwrap();
        let (s, perp) = (&seq.items[0], &seq.items[1]);
        let inside = s.basis().dot(&array![1.0, -2.0, 0.5]);
        let p = project(inside.view(), s).unwrap();
        assert!((&p - &inside).iter().all(|v| v.abs() <= 1e-10));

        let outside = perp.basis().column(2).to_owned();
        assert!(project(outside.view(), s).unwrap().iter().all(|v| v.abs() <= 1e-10));

        let v: Array1<f64> = (0..8).map(|i| (i as f64).sin()).collect();
        let pv = project(v.view(), s).unwrap();
        let r = &v - &pv;
        assert_close!(v.dot(&v), pv.dot(&pv) + r.dot(&r), 1e-8);

        assert!(matches!(project(array![1.0].view(), s), Err(Error::DimensionMismatch { .. })));
    }

    #[test]
    fn descriptor_round_trip() {
        let seq = grid_subspaces(ImageShape::new(1, 8, 8), 2, 3).unwrap();
        let json = serde_json::to_string(&seq.descriptor()).unwrap();
        let back: SequenceDescriptor = serde_json::from_str(&json).unwrap();
        let rebuilt = back.build().unwrap();
        assert_eq!(rebuilt.len(), seq.len());
        assert_eq!(rebuilt.items[4].basis(), seq.items[4].basis());

        let r = random_subspace_sequence(12, &[2, 2], 5).unwrap();
        let again = r.descriptor().build().unwrap();
        assert_eq!(again.items[1].basis(), r.items[1].basis());
    }

    #[test]
    fn random_within_stays_inside() {
        let seq = random_subspace_sequence(9, &[1, 8], 4).unwrap();
        let sub = seq.items[1].random_within(3, 8, "orth").unwrap();
        let cross = seq.items[0].basis().t().dot(sub.basis());
        assert!(cross.iter().all(|v| v.abs() <= 1e-10));
    }
}
