//! Dense linear algebra and random-number primitives shared by every module.

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use statrs::function::gamma::ln_gamma;

use crate::error::{dim_err, invalid, Error, Result};

/// Default relative tolerance for [`spectral_norm`].
pub const SPECTRAL_TOL: f64 = 1e-8;
/// Default power-iteration budget for [`spectral_norm`].
pub const SPECTRAL_MAX_ITERS: usize = 10_000;

/// Row-major dense matrix of finite reals.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawMatrix", into = "RawMatrix")]
pub struct DenseMatrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct RawMatrix {
    rows: usize,
    cols: usize,
    entries: Vec<f64>,
}

impl TryFrom<RawMatrix> for DenseMatrix {
    type Error = Error;
    fn try_from(raw: RawMatrix) -> Result<Self> {
        DenseMatrix::from_row_major(raw.rows, raw.cols, raw.entries)
    }
}

impl From<DenseMatrix> for RawMatrix {
    fn from(m: DenseMatrix) -> Self {
        RawMatrix {
            rows: m.rows,
            cols: m.cols,
            entries: m.data,
        }
    }
}

impl DenseMatrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    pub fn from_row_major(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(dim_err(format!(
                "{} entries for a {rows}x{cols} matrix",
                data.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(invalid("matrix entries must be finite"));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                data.push(f(i, j));
            }
        }
        Self { rows, cols, data }
    }

    pub fn diag(values: &[f64]) -> Self {
        let n = values.len();
        let mut m = Self::zeros(n, n);
        for (i, &v) in values.iter().enumerate() {
            m.data[i * n + i] = v;
        }
        m
    }

    /// `u vᵀ`.
    pub fn outer(u: &[f64], v: &[f64]) -> Self {
        Self::from_fn(u.len(), v.len(), |i, j| u[i] * v[j])
    }

    pub fn gaussian(rows: usize, cols: usize, std: f64, rng: &mut RngStream) -> Self {
        let data = (0..rows * cols).map(|_| std * rng.standard_normal()).collect();
        Self { rows, cols, data }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        self.data[i * self.cols + j] = v;
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    /// `M x`.
    pub fn matvec(&self, x: &[f64]) -> Vec<f64> {
        debug_assert_eq!(x.len(), self.cols);
        (0..self.rows).map(|i| dot(self.row(i), x)).collect()
    }

    /// `Mᵀ y`.
    pub fn matvec_t(&self, y: &[f64]) -> Vec<f64> {
        debug_assert_eq!(y.len(), self.rows);
        let mut out = vec![0.0; self.cols];
        for (i, &yi) in y.iter().enumerate() {
            if yi != 0.0 {
                axpy(yi, self.row(i), &mut out);
            }
        }
        out
    }

    pub fn transpose(&self) -> Self {
        Self::from_fn(self.cols, self.rows, |i, j| self.get(j, i))
    }

    pub fn scaled(&self, c: f64) -> Self {
        Self {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|v| c * v).collect(),
        }
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        self.zip_with(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &Self) -> Result<Self> {
        self.zip_with(other, |a, b| a - b)
    }

    fn zip_with(&self, other: &Self, f: impl Fn(f64, f64) -> f64) -> Result<Self> {
        if self.shape() != other.shape() {
            return Err(dim_err(format!(
                "shape {:?} vs {:?}",
                self.shape(),
                other.shape()
            )));
        }
        Ok(Self {
            rows: self.rows,
            cols: self.cols,
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    pub fn frobenius_norm(&self) -> f64 {
        norm2(&self.data)
    }

    /// Left-multiplies by `diag(d)`.
    pub fn scale_rows(&self, d: &[f64]) -> Self {
        Self::from_fn(self.rows, self.cols, |i, j| d[i] * self.get(i, j))
    }

    fn to_nalgebra(&self) -> DMatrix<f64> {
        DMatrix::from_row_slice(self.rows, self.cols, &self.data)
    }

    fn from_nalgebra(m: &DMatrix<f64>) -> Self {
        Self::from_fn(m.nrows(), m.ncols(), |i, j| m[(i, j)])
    }
}

/// Thin singular value decomposition `M = U diag(s) Vᵀ`.
#[derive(Clone, Debug)]
pub struct Svd {
    pub u: DenseMatrix,
    pub singular_values: Vec<f64>,
    pub v_t: DenseMatrix,
}

impl Svd {
    pub fn reconstruct(&self) -> DenseMatrix {
        let k = self.singular_values.len();
        let (r, c) = (self.u.rows(), self.v_t.cols());
        DenseMatrix::from_fn(r, c, |i, j| {
            (0..k)
                .map(|t| self.u.get(i, t) * self.singular_values[t] * self.v_t.get(t, j))
                .sum()
        })
    }
}

/// Full dense SVD (Golub–Kahan via nalgebra).
pub fn svd(m: &DenseMatrix) -> Result<Svd> {
    if m.rows == 0 || m.cols == 0 {
        return Err(dim_err("SVD of an empty matrix"));
    }
    let dec = m.to_nalgebra().svd(true, true);
    let u = dec
        .u
        .as_ref()
        .ok_or_else(|| Error::Numerical("SVD did not return U".into()))?;
    let v_t = dec
        .v_t
        .as_ref()
        .ok_or_else(|| Error::Numerical("SVD did not return Vᵀ".into()))?;
    Ok(Svd {
        u: DenseMatrix::from_nalgebra(u),
        singular_values: dec.singular_values.iter().copied().collect(),
        v_t: DenseMatrix::from_nalgebra(v_t),
    })
}

/// Largest singular value from a dense SVD.
pub fn spectral_norm_svd(m: &DenseMatrix) -> Result<f64> {
    let s = svd(m)?;
    Ok(s.singular_values.iter().copied().fold(0.0, f64::max))
}

/// Largest singular value of `m`.
///
/// Power iteration on `MᵀM` from the normalized all-ones vector. The
/// Rayleigh quotient increases monotonically to `σ₁²`; iteration stops once
/// the extrapolated remaining error (change · q / (1 − q), with q the observed
/// contraction of successive changes) is below `tol` relative. If that does
/// not happen within `max_iters`, or the iterate collapses to zero, the
/// result comes from a dense SVD instead.
pub fn spectral_norm(m: &DenseMatrix, tol: f64, max_iters: usize) -> Result<f64> {
    if m.rows == 0 || m.cols == 0 {
        return Err(dim_err("spectral norm of an empty matrix"));
    }
    if !(tol > 0.0) {
        return Err(invalid("spectral_norm tolerance must be positive"));
    }
    if m.data.iter().all(|&v| v == 0.0) {
        return Ok(0.0);
    }
    let n = m.cols;
    let mut x = vec![1.0 / (n as f64).sqrt(); n];
    let mut prev_lambda: Option<f64> = None;
    let mut prev_change: Option<f64> = None;
    for _ in 0..max_iters {
        let y = m.matvec(&x);
        let lambda = dot(&y, &y);
        let z = m.matvec_t(&y);
        let zn = norm2(&z);
        if zn == 0.0 || !zn.is_finite() {
            break;
        }
        for (xi, zi) in x.iter_mut().zip(&z) {
            *xi = zi / zn;
        }
        if let Some(prev) = prev_lambda {
            let change = (lambda - prev).abs() / lambda;
            if change == 0.0 {
                return Ok(lambda.sqrt());
            }
            if let Some(pc) = prev_change {
                let q = change / pc;
                if q < 1.0 && change * q / (1.0 - q) <= tol {
                    return Ok(lambda.sqrt());
                }
            }
            prev_change = Some(change);
        }
        prev_lambda = Some(lambda);
    }
    spectral_norm_svd(m)
}

/// [`spectral_norm`] with the default tolerance and iteration budget.
pub fn spectral_norm_default(m: &DenseMatrix) -> Result<f64> {
    spectral_norm(m, SPECTRAL_TOL, SPECTRAL_MAX_ITERS)
}

/// Deterministic random stream identified by `(seed, stream_id)`.
///
/// Backed by ChaCha20 with the stream id as the ChaCha stream counter, so
/// distinct ids give independent sequences under one seed.
#[derive(Clone, Debug)]
pub struct RngStream {
    seed: u64,
    stream_id: u64,
    rng: ChaCha20Rng,
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn fnv1a(bytes: &[u8]) -> u64 {
    bytes.iter().fold(0xcbf2_9ce4_8422_2325u64, |h, &b| {
        (h ^ b as u64).wrapping_mul(0x0000_0100_0000_01b3)
    })
}

impl RngStream {
    pub fn new(seed: u64, stream_id: u64) -> Self {
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        rng.set_stream(stream_id);
        Self {
            seed,
            stream_id,
            rng,
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn stream_id(&self) -> u64 {
        self.stream_id
    }

    /// Child stream for work item `index`; depends only on `(seed, stream_id, index)`.
    pub fn substream(&self, index: u64) -> Self {
        let id = splitmix64(self.stream_id ^ splitmix64(index.wrapping_add(0x5851_F42D_4C95_7F2D)));
        Self::new(self.seed, id)
    }

    /// Child stream keyed by a name, e.g. `"data"` or `"init"`.
    pub fn named(&self, name: &str) -> Self {
        self.substream(fnv1a(name.as_bytes()))
    }

    /// Uniform on `[0, 1)`.
    pub fn uniform(&mut self) -> f64 {
        self.rng.random::<f64>()
    }

    /// Standard normal via the Ziggurat method of `rand_distr::StandardNormal`.
    pub fn standard_normal(&mut self) -> f64 {
        self.rng.sample(StandardNormal)
    }

    pub fn rademacher(&mut self) -> f64 {
        if self.rng.random::<bool>() {
            1.0
        } else {
            -1.0
        }
    }

    pub fn gaussian_vec(&mut self, dim: usize) -> Vec<f64> {
        (0..dim).map(|_| self.standard_normal()).collect()
    }

    /// Uniform on the unit sphere in `R^dim`.
    pub fn unit_sphere(&mut self, dim: usize) -> Vec<f64> {
        loop {
            let mut g = self.gaussian_vec(dim);
            let n = norm2(&g);
            if n > 0.0 {
                g.iter_mut().for_each(|v| *v /= n);
                return g;
            }
        }
    }

    pub fn below(&mut self, n: usize) -> usize {
        self.rng.random_range(0..n)
    }
}

/// I.i.d. standard normal vector of length `dim`.
pub fn sample_gaussian_vector(rng: &mut RngStream, dim: usize) -> Result<Vec<f64>> {
    if dim == 0 {
        return Err(dim_err("Gaussian vector of dimension 0"));
    }
    Ok(rng.gaussian_vec(dim))
}

/// I.i.d. Rademacher (±1) vector of length `n`.
pub fn sample_rademacher(rng: &mut RngStream, n: usize) -> Result<Vec<f64>> {
    if n == 0 {
        return Err(dim_err("Rademacher vector of length 0"));
    }
    Ok((0..n).map(|_| rng.rademacher()).collect())
}

/// `E‖g‖₂` for `g ~ N(0, I_dim)`: the chi mean `√2 Γ((dim+1)/2) / Γ(dim/2)`.
pub fn expected_gaussian_norm(dim: usize) -> f64 {
    assert!(dim >= 1, "expected_gaussian_norm requires dim >= 1");
    let k = dim as f64;
    std::f64::consts::SQRT_2 * (ln_gamma((k + 1.0) / 2.0) - ln_gamma(k / 2.0)).exp()
}

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[inline]
pub fn norm2(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// `y += a x`.
#[inline]
pub fn axpy(a: f64, x: &[f64], y: &mut [f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += a * xi;
    }
}

pub fn sub_vec(a: &[f64], b: &[f64]) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| x - y).collect()
}

pub fn mean_and_std_error(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}

/// Ordinary least-squares slope and intercept of `y` on `x`.
pub fn linear_fit(x: &[f64], y: &[f64]) -> (f64, f64) {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let sxx: f64 = x.iter().map(|a| (a - mx).powi(2)).sum();
    let slope = sxy / sxx;
    (slope, my - slope * mx)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    #[test]
    fn spectral_norm_identity_diag_rank_one() {
        assert_relative_eq!(
            spectral_norm_default(&DenseMatrix::identity(3)).unwrap(),
            1.0,
            max_relative = 1e-8
        );
        assert_relative_eq!(
            spectral_norm_default(&DenseMatrix::diag(&[3.0, 1.0, 0.5])).unwrap(),
            3.0,
            max_relative = 1e-8
        );
        // ‖u‖ = 2, ‖v‖ = 3
        let u = [2.0 / 3.0_f64.sqrt(); 3];
        let v = [3.0 / 2.0, -3.0 / 2.0, 3.0 / 2.0, 3.0 / 2.0];
        let m = DenseMatrix::outer(&u, &v);
        assert_relative_eq!(spectral_norm_default(&m).unwrap(), 6.0, max_relative = 1e-8);
    }

    #[test]
    fn spectral_norm_falls_back_when_start_is_orthogonal() {
        // v ⊥ ones, so M·1 = 0 and power iteration cannot start.
        let m = DenseMatrix::outer(&[1.0, 2.0], &[1.0, -1.0]);
        let expected = 5.0_f64.sqrt() * 2.0_f64.sqrt();
        assert_relative_eq!(spectral_norm_default(&m).unwrap(), expected, max_relative = 1e-12);
    }

    #[test]
    fn spectral_norm_rejects_empty() {
        assert!(matches!(
            spectral_norm_default(&DenseMatrix::zeros(0, 3)),
            Err(Error::Dimension(_))
        ));
    }

    #[test]
    fn spectral_norm_matches_svd_on_random_matrices() {
        let mut rng = RngStream::new(11, 0);
        for trial in 0..1000 {
            let r = 1 + rng.below(64);
            let c = 1 + rng.below(64);
            let m = DenseMatrix::gaussian(r, c, 1.0, &mut rng);
            let power = spectral_norm_default(&m).unwrap();
            let exact = spectral_norm_svd(&m).unwrap();
            assert!(
                (power - exact).abs() <= SPECTRAL_TOL * exact,
                "trial {trial} ({r}x{c}): {power} vs {exact}"
            );
        }
    }

    proptest! {
        #[test]
        fn spectral_norm_is_absolutely_homogeneous(
            seed in 0u64..10_000, c in -5.0f64..5.0, r in 1usize..12, k in 1usize..12
        ) {
            let mut rng = RngStream::new(seed, 3);
            let m = DenseMatrix::gaussian(r, k, 1.0, &mut rng);
            let base = spectral_norm_default(&m).unwrap();
            let scaled = spectral_norm_default(&m.scaled(c)).unwrap();
            prop_assert!((scaled - c.abs() * base).abs() <= 1e-7 * (1.0 + c.abs() * base));
        }
    }

    #[test]
    fn gaussian_vector_is_reproducible() {
        let a = sample_gaussian_vector(&mut RngStream::new(7, 1), 4).unwrap();
        let b = sample_gaussian_vector(&mut RngStream::new(7, 1), 4).unwrap();
        assert_eq!(
            a.iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
            b.iter().map(|v| v.to_bits()).collect::<Vec<_>>()
        );
        let c = sample_gaussian_vector(&mut RngStream::new(7, 2), 4).unwrap();
        assert_ne!(a, c);
        assert!(matches!(
            sample_gaussian_vector(&mut RngStream::new(7, 1), 0),
            Err(Error::Dimension(_))
        ));
    }

    #[test]
    fn gaussian_moments() {
        let mut rng = RngStream::new(2024, 0);
        let n = 1_000_000;
        let mean = (0..n).map(|_| rng.standard_normal()).sum::<f64>() / n as f64;
        assert!(mean.abs() < 0.005, "mean {mean}");

        let mut rng = RngStream::new(2025, 0);
        let norm_mean = (0..n)
            .map(|_| norm2(&rng.gaussian_vec(2)))
            .sum::<f64>()
            / n as f64;
        assert!((norm_mean - 1.2533).abs() < 0.003, "mean norm {norm_mean}");
    }

    #[test]
    fn gaussian_passes_kolmogorov_smirnov() {
        use statrs::distribution::{ContinuousCDF, Normal};
        let normal = Normal::new(0.0, 1.0).unwrap();
        let mut rng = RngStream::new(99, 4);
        let n = 100_000;
        let mut xs: Vec<f64> = (0..n).map(|_| rng.standard_normal()).collect();
        xs.sort_by(f64::total_cmp);
        let d = xs
            .iter()
            .enumerate()
            .map(|(i, &x)| {
                let f = normal.cdf(x);
                (f - i as f64 / n as f64).max((i + 1) as f64 / n as f64 - f)
            })
            .fold(0.0, f64::max);
        // Asymptotic critical value at significance 1e-3.
        let critical = (-(0.5e-3_f64).ln() / 2.0).sqrt() / (n as f64).sqrt();
        assert!(d < critical, "KS statistic {d} >= {critical}");
    }

    #[test]
    fn rademacher_sampling() {
        let v = sample_rademacher(&mut RngStream::new(1, 0), 1).unwrap();
        assert!(v[0] == 1.0 || v[0] == -1.0);
        let mut rng = RngStream::new(5, 9);
        let n = 1_000_000;
        let mean = sample_rademacher(&mut rng, n).unwrap().iter().sum::<f64>() / n as f64;
        assert!(mean.abs() < 0.004);
        let a = sample_rademacher(&mut RngStream::new(3, 3), 32).unwrap();
        let b = sample_rademacher(&mut RngStream::new(3, 3), 32).unwrap();
        assert_eq!(a, b);
        assert!(sample_rademacher(&mut rng, 0).is_err());
    }

    #[test]
    fn chi_mean_values() {
        assert_relative_eq!(
            expected_gaussian_norm(1),
            (2.0 / std::f64::consts::PI).sqrt(),
            max_relative = 1e-12
        );
        assert_relative_eq!(
            expected_gaussian_norm(2),
            (std::f64::consts::PI / 2.0).sqrt(),
            max_relative = 1e-12
        );
        let big = expected_gaussian_norm(10_000);
        assert!(big >= 9999.0_f64.sqrt() && big <= 100.0);
    }

    #[test]
    fn substreams_are_distinct_and_stable() {
        let root = RngStream::new(1, 0);
        let a: Vec<f64> = (0..4).map(|_| root.substream(0).uniform()).collect();
        assert!(a.windows(2).all(|w| w[0] == w[1]));
        assert_ne!(root.substream(0).uniform(), root.substream(1).uniform());
        assert_ne!(root.named("data").uniform(), root.named("init").uniform());
    }

    #[test]
    fn matrix_rejects_bad_payload() {
        assert!(DenseMatrix::from_row_major(2, 2, vec![1.0; 3]).is_err());
        assert!(DenseMatrix::from_row_major(1, 1, vec![f64::NAN]).is_err());
        let json = r#"{"rows":1,"cols":2,"entries":[1.0,2.0]}"#;
        let m: DenseMatrix = serde_json::from_str(json).unwrap();
        assert_eq!(m.shape(), (1, 2));
        assert!(serde_json::from_str::<DenseMatrix>(r#"{"rows":2,"cols":2,"entries":[1.0]}"#).is_err());
    }
}
