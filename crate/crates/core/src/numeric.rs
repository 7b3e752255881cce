//! Small dense linear algebra, stable softmax helpers and Gaussian sampling.
//!
//! Vectors are plain `[f64]` slices. [`Mat`] is a square row-major matrix,
//! which is all the statistics code ever needs.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{check_dim, Result, SdcaError};

/// Seeded generator used everywhere randomness is needed.
pub type SdcaRng = ChaCha8Rng;

/// Build the crate-wide generator from a seed.
pub fn rng_from_seed(seed: u64) -> SdcaRng {
    use rand::SeedableRng;
    ChaCha8Rng::seed_from_u64(seed)
}

/// Square row-major matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Mat {
    dim: usize,
    data: Vec<f64>,
}

impl Mat {
    pub fn zeros(dim: usize) -> Self {
        Mat {
            dim,
            data: vec![0.0; dim * dim],
        }
    }

    pub fn identity(dim: usize) -> Self {
        let mut m = Mat::zeros(dim);
        for i in 0..dim {
            m[(i, i)] = 1.0;
        }
        m
    }

    pub fn from_diag(diag: &[f64]) -> Self {
        let mut m = Mat::zeros(diag.len());
        for (i, &d) in diag.iter().enumerate() {
            m[(i, i)] = d;
        }
        m
    }

    /// Build from row-major data; `data.len()` must be a perfect square.
    pub fn from_row_major(data: Vec<f64>) -> Result<Self> {
        let dim = (data.len() as f64).sqrt().round() as usize;
        if dim * dim != data.len() {
            return Err(SdcaError::DimensionMismatch {
                expected: dim * dim,
                got: data.len(),
            });
        }
        Ok(Mat { dim, data })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let dim = rows.len();
        let mut data = Vec::with_capacity(dim * dim);
        for r in rows {
            check_dim(dim, r.len())?;
            data.extend_from_slice(r);
        }
        Ok(Mat { dim, data })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn trace(&self) -> f64 {
        (0..self.dim).map(|i| self[(i, i)]).sum()
    }

    pub fn transpose(&self) -> Mat {
        let mut t = Mat::zeros(self.dim);
        for i in 0..self.dim {
            for j in 0..self.dim {
                t[(j, i)] = self[(i, j)];
            }
        }
        t
    }

    /// `(S + Sᵀ) / 2`
    pub fn symmetrized(&self) -> Mat {
        let mut s = self.clone();
        for i in 0..self.dim {
            for j in (i + 1)..self.dim {
                let v = 0.5 * (self[(i, j)] + self[(j, i)]);
                s[(i, j)] = v;
                s[(j, i)] = v;
            }
        }
        s
    }

    /// Frobenius norm.
    pub fn norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    /// Largest |S_ij − S_ji| relative to the Frobenius norm.
    pub fn asymmetry(&self) -> f64 {
        let n = self.norm();
        if n == 0.0 {
            return 0.0;
        }
        let mut worst = 0.0f64;
        for i in 0..self.dim {
            for j in (i + 1)..self.dim {
                worst = worst.max((self[(i, j)] - self[(j, i)]).abs());
            }
        }
        worst / n
    }

    pub fn is_symmetric(&self) -> bool {
        self.asymmetry() <= 1e-9
    }

    /// `self += alpha * other`
    pub fn add_scaled(&mut self, alpha: f64, other: &Mat) -> Result<()> {
        check_dim(self.dim, other.dim)?;
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += alpha * b;
        }
        Ok(())
    }

    /// `self += alpha * u vᵀ`
    pub fn add_outer(&mut self, alpha: f64, u: &[f64], v: &[f64]) {
        let d = self.dim;
        for i in 0..d {
            let ui = alpha * u[i];
            let row = &mut self.data[i * d..(i + 1) * d];
            for (r, vj) in row.iter_mut().zip(v) {
                *r += ui * vj;
            }
        }
    }

    pub fn scale(&mut self, alpha: f64) {
        for v in &mut self.data {
            *v *= alpha;
        }
    }

    /// `S x`
    pub fn mul_vec(&self, x: &[f64]) -> Result<Vec<f64>> {
        check_dim(self.dim, x.len())?;
        Ok((0..self.dim).map(|i| dot(self.row(i), x)).collect())
    }

    /// `L Lᵀ` for a lower-triangular (or any) factor.
    pub fn mul_transpose_self(&self) -> Mat {
        let d = self.dim;
        let mut out = Mat::zeros(d);
        for i in 0..d {
            for j in 0..d {
                out[(i, j)] = dot(self.row(i), self.row(j));
            }
        }
        out
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

impl std::ops::Index<(usize, usize)> for Mat {
    type Output = f64;
    fn index(&self, (i, j): (usize, usize)) -> &f64 {
        &self.data[i * self.dim + j]
    }
}

impl std::ops::IndexMut<(usize, usize)> for Mat {
    fn index_mut(&mut self, (i, j): (usize, usize)) -> &mut f64 {
        &mut self.data[i * self.dim + j]
    }
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// Scale to unit length; the zero vector is returned unchanged.
pub fn normalized(a: &[f64]) -> Vec<f64> {
    let n = norm(a);
    if n == 0.0 {
        return a.to_vec();
    }
    a.iter().map(|v| v / n).collect()
}

/// `qᵀ S q`
pub fn quadratic_form(q: &[f64], s: &Mat) -> Result<f64> {
    check_dim(s.dim(), q.len())?;
    Ok(q.iter()
        .enumerate()
        .map(|(i, qi)| qi * dot(s.row(i), q))
        .sum())
}

/// `log Σ exp(x)`, shifted by the max so large inputs cannot overflow.
pub fn log_sum_exp(x: &[f64]) -> Result<f64> {
    if x.is_empty() {
        return Err(SdcaError::EmptyInput("log_sum_exp"));
    }
    let m = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return Ok(m);
    }
    let s: f64 = x.iter().map(|v| (v - m).exp()).sum();
    Ok(m + s.ln())
}

pub fn log_softmax(logits: &[f64]) -> Result<Vec<f64>> {
    let lse = log_sum_exp(logits)?;
    Ok(logits.iter().map(|v| v - lse).collect())
}

pub fn softmax(logits: &[f64]) -> Result<Vec<f64>> {
    Ok(log_softmax(logits)?.into_iter().map(f64::exp).collect())
}

/// In-place softmax for hot loops; `x` must be non-empty.
pub(crate) fn softmax_in_place(x: &mut [f64]) {
    let m = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut s = 0.0;
    for v in x.iter_mut() {
        *v = (*v - m).exp();
        s += *v;
    }
    for v in x.iter_mut() {
        *v /= s;
    }
}

/// Lower-triangular `L` with `L Lᵀ = S`.
pub fn cholesky(s: &Mat) -> Result<Mat> {
    let d = s.dim();
    let mut l = Mat::zeros(d);
    for j in 0..d {
        let mut diag = s[(j, j)];
        for k in 0..j {
            diag -= l[(j, k)] * l[(j, k)];
        }
        if !(diag > 0.0) {
            return Err(SdcaError::NotPositiveDefinite { pivot: j });
        }
        let ljj = diag.sqrt();
        l[(j, j)] = ljj;
        for i in (j + 1)..d {
            let mut v = s[(i, j)];
            for k in 0..j {
                v -= l[(i, k)] * l[(j, k)];
            }
            l[(i, j)] = v / ljj;
        }
    }
    Ok(l)
}

/// Jitter added to the diagonal when a covariance is only semi-definite:
/// `1e-8 · trace(S) / D`.
pub fn psd_jitter(s: &Mat) -> f64 {
    if s.dim() == 0 {
        return 0.0;
    }
    1e-8 * s.trace() / s.dim() as f64
}

/// Sampling factor for a symmetric PSD matrix.
///
/// Tries a plain Cholesky first, then `S + εI` with `ε = psd_jitter(S)`
/// (growing tenfold per retry). A zero-trace matrix yields the zero factor.
pub fn psd_factor(s: &Mat) -> Result<Mat> {
    if let Ok(l) = cholesky(s) {
        return Ok(l);
    }
    let base = psd_jitter(s);
    if !(base > 0.0) {
        if s.as_slice().iter().all(|v| *v == 0.0) {
            return Ok(Mat::zeros(s.dim()));
        }
        return Err(SdcaError::NotPositiveDefinite { pivot: 0 });
    }
    let mut eps = base;
    let mut last = SdcaError::NotPositiveDefinite { pivot: 0 };
    for _ in 0..8 {
        let mut jittered = s.clone();
        for i in 0..s.dim() {
            jittered[(i, i)] += eps;
        }
        match cholesky(&jittered) {
            Ok(l) => return Ok(l),
            Err(e) => last = e,
        }
        eps *= 10.0;
    }
    Err(last)
}

/// Write `mean + L z` into `out`, with `z` fresh standard normals.
pub(crate) fn draw_with_factor(
    mean: &[f64],
    factor: &Mat,
    rng: &mut SdcaRng,
    z: &mut [f64],
    out: &mut [f64],
) {
    for zi in z.iter_mut() {
        *zi = rng.sample(StandardNormal);
    }
    for i in 0..mean.len() {
        // factor is lower-triangular
        let row = factor.row(i);
        out[i] = mean[i] + dot(&row[..=i], &z[..=i]);
    }
}

/// Draw `n` samples from `N(mean, S)`.
pub fn sample_gaussian(mean: &[f64], s: &Mat, rng: &mut SdcaRng, n: usize) -> Result<Vec<Vec<f64>>> {
    check_dim(s.dim(), mean.len())?;
    let factor = psd_factor(s)?;
    let d = mean.len();
    let mut z = vec![0.0; d];
    let mut out = Vec::with_capacity(n);
    for _ in 0..n {
        let mut x = vec![0.0; d];
        draw_with_factor(mean, &factor, rng, &mut z, &mut x);
        out.push(x);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::{any, prop, prop_assert, proptest};
    use rand::Rng;

    fn random_pd(d: usize, rng: &mut SdcaRng) -> Mat {
        let mut a = Mat::zeros(d);
        for v in a.as_mut_slice() {
            *v = rng.random_range(-1.0..1.0);
        }
        let mut s = a.mul_transpose_self();
        for i in 0..d {
            s[(i, i)] += 0.5;
        }
        s
    }

    #[test]
    fn quadratic_form_examples() {
        assert_eq!(quadratic_form(&[1.0, 0.0], &Mat::identity(2)).unwrap(), 1.0);
        let s = Mat::from_rows(&[vec![2.0, 1.0], vec![1.0, 3.0]]).unwrap();
        assert_eq!(quadratic_form(&[0.0, 0.0], &s).unwrap(), 0.0);
        // hand expansion: 1*2*1 + 1*1*2 + 2*1*1 + 2*3*2
        assert_eq!(quadratic_form(&[1.0, 2.0], &s).unwrap(), 18.0);
        assert!(matches!(
            quadratic_form(&[1.0], &s),
            Err(SdcaError::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn log_softmax_examples() {
        let v = log_softmax(&[0.0, 0.0]).unwrap();
        assert!((v[0] + 2f64.ln()).abs() < 1e-15);
        assert!((v[1] + 2f64.ln()).abs() < 1e-15);

        let v = log_softmax(&[1000.0, 0.0]).unwrap();
        assert!(v[0].abs() < 1e-12);
        assert!((v[1] + 1000.0).abs() < 1e-9);

        let x = [1.0, 2.0, 3.0];
        let z: f64 = x.iter().map(|v: &f64| v.exp()).sum();
        let v = log_softmax(&x).unwrap();
        for (a, b) in v.iter().zip(x.iter()) {
            assert!((a - (b.exp() / z).ln()).abs() < 1e-14);
        }
        assert!(log_softmax(&[]).is_err());
    }

    #[test]
    fn cholesky_examples() {
        assert_eq!(cholesky(&Mat::identity(2)).unwrap(), Mat::identity(2));
        let l = cholesky(&Mat::from_diag(&[4.0, 9.0])).unwrap();
        assert_eq!(l, Mat::from_diag(&[2.0, 3.0]));

        let mut rng = rng_from_seed(3);
        let s = random_pd(5, &mut rng);
        let l = cholesky(&s).unwrap();
        let r = l.mul_transpose_self();
        let mut diff = r.clone();
        diff.add_scaled(-1.0, &s).unwrap();
        assert!(diff.norm() / s.norm() < 1e-10);

        let indefinite = Mat::from_diag(&[1.0, -1.0]);
        assert!(matches!(
            cholesky(&indefinite),
            Err(SdcaError::NotPositiveDefinite { pivot: 1 })
        ));
    }

    #[test]
    fn psd_factor_handles_rank_deficiency() {
        // rank one: [[1,1],[1,1]]
        let s = Mat::from_rows(&[vec![1.0, 1.0], vec![1.0, 1.0]]).unwrap();
        assert!(cholesky(&s).is_err());
        let l = psd_factor(&s).unwrap();
        let r = l.mul_transpose_self();
        for (a, b) in r.as_slice().iter().zip(s.as_slice()) {
            assert!((a - b).abs() < 1e-6);
        }
        assert_eq!(psd_factor(&Mat::zeros(3)).unwrap(), Mat::zeros(3));
    }

    #[test]
    fn degenerate_gaussian_returns_mean() {
        let mut rng = rng_from_seed(1);
        let mean = [0.5, -2.0, 3.0];
        let xs = sample_gaussian(&mean, &Mat::zeros(3), &mut rng, 50).unwrap();
        assert!(xs.iter().all(|x| x == &mean));
    }

    #[test]
    fn sample_mean_and_covariance_converge() {
        let n = 100_000;
        let mut rng = rng_from_seed(42);
        let xs = sample_gaussian(&[0.0, 0.0, 0.0], &Mat::identity(3), &mut rng, n).unwrap();
        for c in 0..3 {
            let m: f64 = xs.iter().map(|x| x[c]).sum::<f64>() / n as f64;
            assert!(m.abs() < 3.0 / (n as f64).sqrt(), "coord {c} mean {m}");
        }

        let s = Mat::from_rows(&[vec![2.0, 0.6], vec![0.6, 1.0]]).unwrap();
        let xs = sample_gaussian(&[1.0, -1.0], &s, &mut rng, n).unwrap();
        let mean: Vec<f64> = (0..2)
            .map(|c| xs.iter().map(|x| x[c]).sum::<f64>() / n as f64)
            .collect();
        for i in 0..2 {
            for j in 0..2 {
                let c: f64 = xs
                    .iter()
                    .map(|x| (x[i] - mean[i]) * (x[j] - mean[j]))
                    .sum::<f64>()
                    / n as f64;
                // var of a sample covariance entry is (s_ii s_jj + s_ij²)/n
                let se = ((s[(i, i)] * s[(j, j)] + s[(i, j)].powi(2)) / n as f64).sqrt();
                assert!((c - s[(i, j)]).abs() < 3.0 * se, "cov[{i},{j}]={c}");
            }
        }
    }

    #[test]
    fn sampling_is_deterministic() {
        let s = Mat::from_rows(&[vec![1.0, 0.2], vec![0.2, 0.5]]).unwrap();
        let a = sample_gaussian(&[0.0, 1.0], &s, &mut rng_from_seed(9), 100).unwrap();
        let b = sample_gaussian(&[0.0, 1.0], &s, &mut rng_from_seed(9), 100).unwrap();
        assert_eq!(a, b);
        assert!(sample_gaussian(&[0.0], &s, &mut rng_from_seed(9), 1).is_err());
    }

    proptest! {
        #[test]
        fn log_softmax_is_shift_invariant(
            x in prop::collection::vec(-50.0f64..50.0, 1..8),
            c in -100.0f64..100.0,
        ) {
            let a = log_softmax(&x).unwrap();
            let shifted: Vec<f64> = x.iter().map(|v| v + c).collect();
            let b = log_softmax(&shifted).unwrap();
            for (u, v) in a.iter().zip(&b) {
                prop_assert!((u - v).abs() < 1e-12);
            }
            let total: f64 = a.iter().map(|v| v.exp()).sum();
            prop_assert!((total - 1.0).abs() < 1e-12);
        }

        #[test]
        fn quadratic_form_sees_only_symmetric_part(
            d in 1usize..6,
            seed in any::<u64>(),
        ) {
            let mut rng = rng_from_seed(seed);
            let mut s = Mat::zeros(d);
            for v in s.as_mut_slice() {
                *v = rng.random_range(-2.0..2.0);
            }
            let q: Vec<f64> = (0..d).map(|_| rng.random_range(-2.0..2.0)).collect();
            let a = quadratic_form(&q, &s).unwrap();
            let b = quadratic_form(&q, &s.symmetrized()).unwrap();
            prop_assert!((a - b).abs() <= 1e-12 * (1.0 + a.abs()));
        }
    }
}
