//! Generative-quality metrics and the PCA projection used to inspect
//! encoder features.
//!
//! All statistics are computed in `f64`. IS/FID/KID here are proxies: they
//! use a small classifier trained on the evaluation data in place of a
//! pretrained Inception network and are only comparable within this crate.

mod extractor;

pub use extractor::{FeatureExtractor, EXTRACTOR_FEATURES, EXTRACTOR_WIDTHS};

use nalgebra::{DMatrix, SymmetricEigen};

use crate::error::{PdmError, Result};

/// Eigenvalues below this (after symmetrization) are treated as a
/// non-PSD input rather than round-off.
pub const PSD_TOLERANCE: f64 = 1e-6;

/// Mean and (n - 1)-normalized covariance of a feature set.
#[derive(Clone, Debug, PartialEq)]
pub struct GaussianStats {
    pub mean: Vec<f64>,
    /// Row-major `F x F`.
    pub covariance: Vec<f64>,
    pub n: usize,
}

/// Mergeable running mean and scatter matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct StatsAccumulator {
    n: usize,
    mean: Vec<f64>,
    scatter: Vec<f64>,
}

impl StatsAccumulator {
    pub fn new(dim: usize) -> Self {
        Self { n: 0, mean: vec![0.0; dim], scatter: vec![0.0; dim * dim] }
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn push(&mut self, x: &[f64]) -> Result<()> {
        let f = self.dim();
        if x.len() != f {
            return Err(PdmError::DimensionMismatch { expected: f, got: x.len() });
        }
        self.n += 1;
        let delta: Vec<f64> = x.iter().zip(&self.mean).map(|(a, m)| a - m).collect();
        let n = self.n as f64;
        for (m, d) in self.mean.iter_mut().zip(&delta) {
            *m += d / n;
        }
        for i in 0..f {
            let after = x[i] - self.mean[i];
            for j in 0..f {
                self.scatter[i * f + j] += delta[j] * after;
            }
        }
        Ok(())
    }

    /// Combines two partial accumulations (pairwise update).
    pub fn merge(&self, other: &Self) -> Result<Self> {
        let f = self.dim();
        if other.dim() != f {
            return Err(PdmError::DimensionMismatch { expected: f, got: other.dim() });
        }
        let n = self.n + other.n;
        if n == 0 {
            return Ok(self.clone());
        }
        let (na, nb, nf) = (self.n as f64, other.n as f64, n as f64);
        let delta: Vec<f64> = other.mean.iter().zip(&self.mean).map(|(b, a)| b - a).collect();
        let mean = self.mean.iter().zip(&delta).map(|(a, d)| a + d * nb / nf).collect();
        let mut scatter = vec![0.0; f * f];
        for i in 0..f {
            for j in 0..f {
                scatter[i * f + j] = self.scatter[i * f + j] + other.scatter[i * f + j] + delta[i] * delta[j] * na * nb / nf;
            }
        }
        Ok(Self { n, mean, scatter })
    }

    pub fn finish(&self) -> Result<GaussianStats> {
        if self.n < 2 {
            return Err(PdmError::InvalidRange(format!("covariance needs n >= 2 samples, got {}", self.n)));
        }
        let f = self.dim();
        let denom = (self.n - 1) as f64;
        let mut cov = vec![0.0; f * f];
        for i in 0..f {
            for j in 0..f {
                // average the two triangles so the result is exactly symmetric
                cov[i * f + j] = 0.5 * (self.scatter[i * f + j] + self.scatter[j * f + i]) / denom;
            }
        }
        Ok(GaussianStats { mean: self.mean.clone(), covariance: cov, n: self.n })
    }
}

impl GaussianStats {
    pub fn from_features(features: &[Vec<f64>]) -> Result<Self> {
        let dim = features.first().map_or(0, Vec::len);
        let mut acc = StatsAccumulator::new(dim);
        for f in features {
            acc.push(f)?;
        }
        acc.finish()
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }
}

fn sym_eigen(m: &[f64], f: usize) -> SymmetricEigen<f64, nalgebra::Dyn> {
    let mat = DMatrix::from_fn(f, f, |i, j| 0.5 * (m[i * f + j] + m[j * f + i]));
    SymmetricEigen::new(mat)
}

fn check_psd(eig: &SymmetricEigen<f64, nalgebra::Dyn>, what: &str) -> Result<()> {
    if let Some(min) = eig.eigenvalues.iter().copied().reduce(f64::min) {
        if min < -PSD_TOLERANCE {
            return Err(PdmError::Numeric(format!("{what} is not positive semidefinite (eigenvalue {min:e})")));
        }
    }
    Ok(())
}

/// `||mu_r - mu_g||^2 + Tr(S_r + S_g - 2 (S_r S_g)^(1/2))`.
///
/// The trace of the square root is taken from the eigenvalues of the
/// symmetric product `S_r^(1/2) S_g S_r^(1/2)`, which shares its spectrum
/// with `S_r S_g`.
pub fn fid(real: &GaussianStats, gen: &GaussianStats) -> Result<f64> {
    let f = real.dim();
    if gen.dim() != f {
        return Err(PdmError::DimensionMismatch { expected: f, got: gen.dim() });
    }
    let er = sym_eigen(&real.covariance, f);
    check_psd(&er, "real covariance")?;
    check_psd(&sym_eigen(&gen.covariance, f), "generated covariance")?;

    let sqrt_vals = er.eigenvalues.map(|v| v.max(0.0).sqrt());
    let sqrt_r = &er.eigenvectors * DMatrix::from_diagonal(&sqrt_vals) * er.eigenvectors.transpose();
    let sg = DMatrix::from_row_slice(f, f, &gen.covariance);
    let prod = &sqrt_r * sg * &sqrt_r;
    let prod = (&prod + prod.transpose()) * 0.5;
    let ep = SymmetricEigen::new(prod);
    check_psd(&ep, "covariance product")?;
    let tr_sqrt: f64 = ep.eigenvalues.iter().map(|v| v.max(0.0).sqrt()).sum();

    let mean_term: f64 = real.mean.iter().zip(&gen.mean).map(|(a, b)| (a - b) * (a - b)).sum();
    let trace = |c: &[f64]| (0..f).map(|i| c[i * f + i]).sum::<f64>();
    Ok(mean_term + trace(&real.covariance) + trace(&gen.covariance) - 2.0 * tr_sqrt)
}

/// Cubic polynomial kernel `(x . y / F + 1)^3`.
pub fn poly_kernel(x: &[f64], y: &[f64]) -> f64 {
    let dot: f64 = x.iter().zip(y).map(|(a, b)| a * b).sum();
    (dot / x.len() as f64 + 1.0).powi(3)
}

/// Unbiased squared MMD between two feature sets under [`poly_kernel`].
pub fn kid(real: &[Vec<f64>], gen: &[Vec<f64>]) -> Result<f64> {
    let (n, m) = (real.len(), gen.len());
    if n < 2 || m < 2 {
        return Err(PdmError::InvalidRange(format!("KID needs at least 2 samples per set, got {n} and {m}")));
    }
    let f = real[0].len();
    if let Some(bad) = real.iter().chain(gen).find(|v| v.len() != f) {
        return Err(PdmError::DimensionMismatch { expected: f, got: bad.len() });
    }
    let within = |s: &[Vec<f64>]| {
        let mut acc = 0.0;
        for i in 0..s.len() {
            for j in 0..s.len() {
                if i != j {
                    acc += poly_kernel(&s[i], &s[j]);
                }
            }
        }
        acc / (s.len() * (s.len() - 1)) as f64
    };
    let mut cross = 0.0;
    for a in real {
        for b in gen {
            cross += poly_kernel(a, b);
        }
    }
    Ok(within(real) + within(gen) - 2.0 * cross / (n * m) as f64)
}

/// `exp(mean_i KL(p(y|x_i) || p(y)))` with `p(y)` the mean row.
pub fn inception_score(probs: &[Vec<f64>]) -> Result<f64> {
    let c = probs.first().map_or(0, Vec::len);
    if probs.is_empty() || c == 0 {
        return Err(PdmError::InvalidRange("inception score needs at least one non-empty row".into()));
    }
    for (i, row) in probs.iter().enumerate() {
        if row.len() != c {
            return Err(PdmError::DimensionMismatch { expected: c, got: row.len() });
        }
        let sum: f64 = row.iter().sum();
        if (sum - 1.0).abs() > 1e-6 || row.iter().any(|&p| !(p >= 0.0)) {
            return Err(PdmError::InvalidRange(format!("row {i} is not a probability vector (sum {sum})")));
        }
    }
    let n = probs.len() as f64;
    let marginal: Vec<f64> = (0..c).map(|j| probs.iter().map(|r| r[j]).sum::<f64>() / n).collect();
    let mean_kl = probs
        .iter()
        .map(|r| r.iter().zip(&marginal).filter(|(p, _)| **p > 0.0).map(|(p, q)| p * (p / q).ln()).sum::<f64>())
        .sum::<f64>()
        / n;
    Ok(mean_kl.exp())
}

/// Principal-component projection of a feature set.
#[derive(Clone, Debug)]
pub struct Projection {
    /// `N x dims` projected coordinates.
    pub points: Vec<Vec<f64>>,
    /// All eigenvalues of the `1/N`-normalized covariance, descending.
    pub eigenvalues: Vec<f64>,
    /// Unit principal axes, one per output dimension.
    pub axes: Vec<Vec<f64>>,
    pub mean: Vec<f64>,
}

/// Centers `features` and projects them onto the top `dims` principal axes.
///
/// Axis signs are fixed so the first loading above 1e-12 in magnitude is
/// positive.
pub fn pca_project(features: &[Vec<f64>], dims: usize) -> Result<Projection> {
    let n = features.len();
    if n <= 2 {
        return Err(PdmError::InvalidRange(format!("PCA needs more than 2 points, got {n}")));
    }
    let f = features[0].len();
    if dims == 0 || dims > f {
        return Err(PdmError::InvalidRange(format!("cannot project {f}-dimensional features to {dims} dimensions")));
    }
    if let Some(bad) = features.iter().find(|v| v.len() != f) {
        return Err(PdmError::DimensionMismatch { expected: f, got: bad.len() });
    }
    let mean: Vec<f64> = (0..f).map(|j| features.iter().map(|r| r[j]).sum::<f64>() / n as f64).collect();
    let mut cov = vec![0.0; f * f];
    for r in features {
        for i in 0..f {
            let di = r[i] - mean[i];
            for j in 0..f {
                cov[i * f + j] += di * (r[j] - mean[j]) / n as f64;
            }
        }
    }
    let eig = sym_eigen(&cov, f);
    let mut order: Vec<usize> = (0..f).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let eigenvalues: Vec<f64> = order.iter().map(|&i| eig.eigenvalues[i]).collect();
    let scale = eigenvalues.iter().fold(0.0f64, |a, b| a.max(b.abs()));
    if !(eigenvalues[0] > 1e-12 * scale.max(1.0)) {
        return Err(PdmError::Numeric("PCA input has rank 0".into()));
    }
    let axes: Vec<Vec<f64>> = order[..dims]
        .iter()
        .map(|&i| {
            let mut v: Vec<f64> = eig.eigenvectors.column(i).iter().copied().collect();
            if v.iter().find(|x| x.abs() > 1e-12).is_some_and(|x| *x < 0.0) {
                v.iter_mut().for_each(|x| *x = -*x);
            }
            v
        })
        .collect();
    let points = features
        .iter()
        .map(|r| axes.iter().map(|a| a.iter().zip(r).zip(&mean).map(|((ai, x), m)| ai * (x - m)).sum()).collect())
        .collect();
    Ok(Projection { points, eigenvalues, axes, mean })
}

/// Proxy IS/FID/KID of a generated set against a real set.
#[derive(Clone, Debug, PartialEq)]
pub struct ProxyMetrics {
    pub is: f64,
    pub fid: f64,
    pub kid: f64,
    pub n_real: usize,
    pub n_gen: usize,
}

impl ProxyMetrics {
    pub fn from_features(
        real_feats: &[Vec<f64>],
        gen_feats: &[Vec<f64>],
        gen_probs: &[Vec<f64>],
    ) -> Result<Self> {
        let real = GaussianStats::from_features(real_feats)?;
        let gen = GaussianStats::from_features(gen_feats)?;
        Ok(Self {
            is: inception_score(gen_probs)?,
            fid: fid(&real, &gen)?,
            kid: kid(real_feats, gen_feats)?,
            n_real: real_feats.len(),
            n_gen: gen_feats.len(),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn stats(mean: Vec<f64>, cov: Vec<f64>) -> GaussianStats {
        GaussianStats { mean, covariance: cov, n: 10 }
    }

    #[test]
    fn fid_closed_forms() {
        let a = stats(vec![0.0], vec![1.0]);
        let b = stats(vec![1.0], vec![1.0]);
        assert_relative_eq!(fid(&a, &b).unwrap(), 1.0, epsilon = 1e-9);

        let c = stats(vec![0.0, 0.0], vec![1.0, 0.0, 0.0, 1.0]);
        let d = stats(vec![0.0, 0.0], vec![4.0, 0.0, 0.0, 4.0]);
        assert_relative_eq!(fid(&c, &d).unwrap(), 2.0, epsilon = 1e-9);
        assert!(fid(&c, &c).unwrap().abs() < 1e-9);
        assert!(fid(&a, &c).is_err());
    }

    #[test]
    fn fid_rejects_indefinite_covariance() {
        let a = stats(vec![0.0, 0.0], vec![1.0, 0.0, 0.0, -0.5]);
        let b = stats(vec![0.0, 0.0], vec![1.0, 0.0, 0.0, 1.0]);
        assert!(matches!(fid(&a, &b), Err(PdmError::Numeric(_))));
        assert!(matches!(fid(&b, &a), Err(PdmError::Numeric(_))));
    }

    #[test]
    fn inception_score_values() {
        let uniform = vec![vec![0.25; 4]; 7];
        assert_eq!(inception_score(&uniform).unwrap(), 1.0);
        let onehot: Vec<Vec<f64>> = (0..5).map(|i| (0..5).map(|j| if i == j { 1.0 } else { 0.0 }).collect()).collect();
        assert_relative_eq!(inception_score(&onehot).unwrap(), 5.0, epsilon = 1e-12);
        assert_relative_eq!(inception_score(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap(), 2.0, epsilon = 1e-12);
        assert_relative_eq!(inception_score(&[vec![1.0, 0.0]]).unwrap(), 1.0, epsilon = 1e-12);
        assert!(inception_score(&[vec![0.5, 0.6]]).is_err());
    }

    #[test]
    fn kid_hand_sums() {
        // two copies of a and two copies of b: within sums only see the duplicates
        let a = vec![1.0, 0.0];
        let b = vec![0.0, 2.0];
        let real = vec![a.clone(), a.clone()];
        let gen = vec![b.clone(), b.clone()];
        let k = |x: &[f64], y: &[f64]| ((x[0] * y[0] + x[1] * y[1]) / 2.0 + 1.0f64).powi(3);
        let want = k(&a, &a) + k(&b, &b) - 2.0 * k(&a, &b);
        assert_relative_eq!(kid(&real, &gen).unwrap(), want, epsilon = 1e-12);
        assert!(kid(&real[..1], &gen).is_err());
        assert!(kid(&real, &gen[..1]).is_err());
    }

    #[test]
    fn kid_near_zero_for_iid_splits() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let pts: Vec<Vec<f64>> =
            (0..2000).map(|_| (0..4).map(|_| StandardNormal.sample(&mut rng)).collect()).collect();
        let v = kid(&pts[..1000], &pts[1000..]).unwrap();
        assert!(v.abs() < 0.01, "{v}");
    }

    #[test]
    fn accumulator_merge_matches_single_pass() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let pts: Vec<Vec<f64>> =
            (0..50).map(|_| (0..3).map(|_| StandardNormal.sample(&mut rng)).collect()).collect();
        let whole = GaussianStats::from_features(&pts).unwrap();
        let (mut a, mut b) = (StatsAccumulator::new(3), StatsAccumulator::new(3));
        pts[..17].iter().for_each(|p| a.push(p).unwrap());
        pts[17..].iter().for_each(|p| b.push(p).unwrap());
        let merged = a.merge(&b).unwrap().finish().unwrap();
        for (x, y) in whole.covariance.iter().zip(&merged.covariance) {
            assert!((x - y).abs() < 1e-12);
        }
        for (x, y) in whole.mean.iter().zip(&merged.mean) {
            assert!((x - y).abs() < 1e-12);
        }
        assert_eq!(merged.n, 50);
        assert!(StatsAccumulator::new(3).finish().is_err());
    }

    #[test]
    fn pca_axis_aligned_data() {
        // uncorrelated by construction: x is odd and y even about the center
        let pts: Vec<Vec<f64>> = (0..20).map(|i| {
            let u = i as f64 - 9.5;
            vec![u * 3.0, u.abs() - 5.0]
        }).collect();
        let p = pca_project(&pts, 2).unwrap();
        assert_relative_eq!(p.axes[0][0].abs(), 1.0, epsilon = 1e-9);
        assert_relative_eq!(p.axes[1][1].abs(), 1.0, epsilon = 1e-9);
        for (proj, orig) in p.points.iter().zip(&pts) {
            assert_relative_eq!(proj[0], orig[0] - p.mean[0], epsilon = 1e-9);
            assert_relative_eq!(proj[1].abs(), (orig[1] - p.mean[1]).abs(), epsilon = 1e-9);
        }
        assert!(pca_project(&pts[..2], 2).is_err());
        assert!(pca_project(&vec![vec![1.0, 1.0]; 5], 2).is_err());
    }

    proptest! {
        #[test]
        fn inception_score_within_bounds(rows in proptest::collection::vec(proptest::collection::vec(0.001f64..1.0, 4), 1..20)) {
            let probs: Vec<Vec<f64>> = rows.iter().map(|r| { let s: f64 = r.iter().sum(); r.iter().map(|x| x / s).collect() }).collect();
            let is = inception_score(&probs).unwrap();
            prop_assert!((1.0 - 1e-12..=4.0 + 1e-12).contains(&is));
        }

        #[test]
        fn fid_is_symmetric(seed in 0u64..1000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut draw = |shift: f64| -> Vec<Vec<f64>> {
                (0..30).map(|_| (0..3).map(|j| { let z: f64 = StandardNormal.sample(&mut rng); z * (1.0 + j as f64 * shift) + shift }).collect()).collect()
            };
            let a = GaussianStats::from_features(&draw(0.0)).unwrap();
            let b = GaussianStats::from_features(&draw(0.7)).unwrap();
            let (ab, ba) = (fid(&a, &b).unwrap(), fid(&b, &a).unwrap());
            prop_assert!((ab - ba).abs() < 1e-6, "{} vs {}", ab, ba);
        }

        #[test]
        fn pca_reconstruction_matches_discarded_spectrum(seed in 0u64..1000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let pts: Vec<Vec<f64>> = (0..40).map(|_| {
                let z: Vec<f64> = (0..4).map(|_| StandardNormal.sample(&mut rng)).collect();
                vec![z[0] * 3.0, z[0] + z[1], z[2] * 0.5, z[3] * 0.1 + z[1]]
            }).collect();
            let p = pca_project(&pts, 2).unwrap();
            let n = pts.len() as f64;
            let mut err = 0.0;
            for (x, y) in pts.iter().zip(&p.points) {
                for j in 0..4 {
                    let rec = p.mean[j] + p.axes[0][j] * y[0] + p.axes[1][j] * y[1];
                    err += (x[j] - rec).powi(2);
                }
            }
            let discarded: f64 = p.eigenvalues[2..].iter().sum();
            prop_assert!((err - n * discarded).abs() < 1e-6);
            let var = |k: usize| p.points.iter().map(|v| v[k] * v[k]).sum::<f64>() / n;
            prop_assert!(var(0) >= var(1));
        }
    }
}
