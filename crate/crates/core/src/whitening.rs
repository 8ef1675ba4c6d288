//! PCA whitening learned from a descriptor set.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::descriptor::Descriptor;
use crate::error::{Error, Result};

/// Eigenvalues below this are floored before inversion.
pub const EIGENVALUE_FLOOR: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WhiteningTransform {
    /// Identifier recorded next to whitened descriptors.
    pub id: String,
    pub mean: Vec<f64>,
    /// `dim x dim`, row-major.
    pub projection: Vec<f64>,
}

impl WhiteningTransform {
    pub fn identity(dim: usize) -> Self {
        let mut projection = vec![0.0; dim * dim];
        for i in 0..dim {
            projection[i * dim + i] = 1.0;
        }
        Self {
            id: format!("identity-{dim}"),
            mean: vec![0.0; dim],
            projection,
        }
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn validate(&self) -> Result<()> {
        let d = self.dim();
        if d == 0 || self.projection.len() != d * d {
            return Err(Error::ShapeMismatch(format!(
                "whitening with mean of length {d} needs a {d}x{d} projection, got {} entries",
                self.projection.len()
            )));
        }
        Ok(())
    }

    /// `projection * (values - mean)`, before renormalization.
    pub fn project(&self, values: &[f64]) -> Result<Vec<f64>> {
        let d = self.dim();
        if values.len() != d {
            return Err(Error::ShapeMismatch(format!("descriptor has dim {}, whitening expects {d}", values.len())));
        }
        let centred: Vec<f64> = values.iter().zip(&self.mean).map(|(v, m)| v - m).collect();
        Ok(self
            .projection
            .chunks_exact(d)
            .map(|row| row.iter().zip(&centred).map(|(a, b)| a * b).sum())
            .collect())
    }

    pub fn apply(&self, desc: &Descriptor) -> Result<Descriptor> {
        Descriptor::from_unnormalized(self.project(desc.values())?)
    }

    /// Learn mean and `Λ^{-1/2} Vᵀ` from the (population) covariance of the
    /// given descriptors. Eigenvectors are ordered by decreasing eigenvalue,
    /// each with its largest-magnitude entry positive.
    pub fn learn(descriptors: &[Descriptor], id: impl Into<String>) -> Result<Self> {
        if descriptors.len() < 2 {
            return Err(Error::InsufficientData(format!(
                "whitening needs at least 2 descriptors, got {}",
                descriptors.len()
            )));
        }
        let d = descriptors[0].dim();
        if descriptors.iter().any(|x| x.dim() != d) {
            return Err(Error::ShapeMismatch("descriptors of different dimensions".into()));
        }
        let n = descriptors.len() as f64;
        let mut mean = DVector::<f64>::zeros(d);
        for x in descriptors {
            mean += DVector::from_column_slice(x.values());
        }
        mean /= n;
        let mut cov = DMatrix::<f64>::zeros(d, d);
        for x in descriptors {
            let c = DVector::from_column_slice(x.values()) - &mean;
            cov.ger(1.0 / n, &c, &c, 1.0);
        }
        cov = (&cov + cov.transpose()) * 0.5;
        let eig = SymmetricEigen::new(cov);
        let mut order: Vec<usize> = (0..d).collect();
        order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
        let mut projection = Vec::with_capacity(d * d);
        for &k in &order {
            let lambda = eig.eigenvalues[k].max(EIGENVALUE_FLOOR);
            let v = eig.eigenvectors.column(k);
            let pivot = v.iter().copied().fold(0.0f64, |m, x| if x.abs() > m.abs() { x } else { m });
            let sign = if pivot < 0.0 { -1.0 } else { 1.0 };
            let scale = sign / lambda.sqrt();
            projection.extend(v.iter().map(|x| x * scale));
        }
        Ok(Self {
            id: id.into(),
            mean: mean.iter().copied().collect(),
            projection,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_set(seed: u64, n: usize, d: usize) -> Vec<Descriptor> {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        // correlated coordinates, positive bias
        let mix: Vec<f64> = (0..d * d).map(|_| r.gen::<f64>()).collect();
        (0..n)
            .map(|_| {
                let z: Vec<f64> = (0..d).map(|_| r.gen::<f64>() - 0.3).collect();
                let v = (0..d).map(|i| (0..d).map(|j| mix[i * d + j] * z[j]).sum::<f64>() + 0.5).collect();
                Descriptor::from_unnormalized(v).unwrap()
            })
            .collect()
    }

    /// Mean and population covariance of the projected set.
    fn projected_stats(t: &WhiteningTransform, set: &[Descriptor]) -> (Vec<f64>, Vec<f64>) {
        let d = t.dim();
        let ys: Vec<Vec<f64>> = set.iter().map(|x| t.project(x.values()).unwrap()).collect();
        let n = ys.len() as f64;
        let mut mean = vec![0.0; d];
        for y in &ys {
            for i in 0..d {
                mean[i] += y[i] / n;
            }
        }
        let mut cov = vec![0.0; d * d];
        for y in &ys {
            for i in 0..d {
                for j in 0..d {
                    cov[i * d + j] += (y[i] - mean[i]) * (y[j] - mean[j]) / n;
                }
            }
        }
        (mean, cov)
    }

    #[test]
    fn identity_leaves_descriptor_unchanged() {
        let x = Descriptor::from_unnormalized(vec![0.1, 0.7, -0.2]).unwrap();
        assert_eq!(WhiteningTransform::identity(3).apply(&x).unwrap(), x);
    }

    #[test]
    fn annihilated_mean_direction_is_undefined() {
        let x = Descriptor::from_unnormalized(vec![1.0, 0.0]).unwrap();
        let t = WhiteningTransform {
            id: "t".into(),
            mean: vec![0.0, 0.0],
            projection: vec![0.0, 0.0, 0.0, 1.0],
        };
        assert!(matches!(t.apply(&x), Err(Error::UndefinedDirection(_))));
    }

    #[test]
    fn whitened_training_set_has_identity_covariance() {
        let set = random_set(1, 100, 8);
        let t = WhiteningTransform::learn(&set, "w").unwrap();
        let (mean, cov) = projected_stats(&t, &set);
        assert!(mean.iter().all(|m| m.abs() < 1e-6));
        for i in 0..8 {
            for j in 0..8 {
                let want = if i == j { 1.0 } else { 0.0 };
                assert!((cov[i * 8 + j] - want).abs() < 1e-5, "cov[{i},{j}] = {}", cov[i * 8 + j]);
            }
        }
    }

    #[test]
    fn whitened_covariance_matches_eigen_oracle() {
        // Independent route: Cholesky factor L of the covariance gives
        // whitening L^{-1}; both must produce identity covariance, and the two
        // projections must agree up to an orthogonal factor, i.e.
        // P Σ Pᵀ = I for the learned P.
        let set = random_set(2, 60, 5);
        let d = 5;
        let n = set.len() as f64;
        let mut mean = vec![0.0; d];
        for x in &set {
            for i in 0..d {
                mean[i] += x.values()[i] / n;
            }
        }
        let mut sigma = DMatrix::<f64>::zeros(d, d);
        for x in &set {
            for i in 0..d {
                for j in 0..d {
                    sigma[(i, j)] += (x.values()[i] - mean[i]) * (x.values()[j] - mean[j]) / n;
                }
            }
        }
        let t = WhiteningTransform::learn(&set, "w").unwrap();
        let p = DMatrix::from_row_slice(d, d, &t.projection);
        let should_be_identity = &p * sigma * p.transpose();
        assert!((should_be_identity - DMatrix::<f64>::identity(d, d)).abs().max() < 1e-6);
    }

    #[test]
    fn zero_mean_identity_covariance_gives_orthonormal_projection() {
        // ±e_i for every axis: zero mean, covariance I/d... scale to get I
        let d = 4;
        let mut set = vec![];
        for i in 0..d {
            for s in [1.0, -1.0] {
                let mut v = vec![0.0; d];
                v[i] = s;
                set.push(Descriptor::from_unnormalized(v).unwrap());
            }
        }
        // covariance is I/d; rescale the learned projection by 1/sqrt(d)
        let t = WhiteningTransform::learn(&set, "w").unwrap();
        assert!(t.mean.iter().all(|m| m.abs() < 1e-12));
        let p = DMatrix::from_row_slice(d, d, &t.projection) / (d as f64).sqrt();
        let ppt = &p * p.transpose();
        assert!((ppt - DMatrix::<f64>::identity(d, d)).abs().max() < 1e-9);
    }

    #[test]
    fn duplication_does_not_change_transform() {
        let set = random_set(3, 30, 6);
        let doubled: Vec<Descriptor> = set.iter().chain(set.iter()).cloned().collect();
        let a = WhiteningTransform::learn(&set, "w").unwrap();
        let b = WhiteningTransform::learn(&doubled, "w").unwrap();
        for (x, y) in a.mean.iter().zip(&b.mean) {
            assert!((x - y).abs() < 1e-12);
        }
        for (x, y) in a.projection.iter().zip(&b.projection) {
            assert!((x - y).abs() < 1e-6 * x.abs().max(1.0), "{x} vs {y}");
        }
    }

    #[test]
    fn too_few_descriptors() {
        let set = random_set(4, 1, 3);
        assert!(matches!(
            WhiteningTransform::learn(&set, "w"),
            Err(Error::InsufficientData(_))
        ));
    }
}
