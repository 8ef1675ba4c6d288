use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Norms below this are treated as zero when normalizing.
pub const MIN_NORM: f64 = 1e-12;

/// Unit-norm global descriptor.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct Descriptor(Vec<f64>);

impl Descriptor {
    /// ℓ2-normalize `values`. Fails on a zero (or non-finite) vector.
    pub fn from_unnormalized(values: Vec<f64>) -> Result<Self> {
        let n = norm(&values);
        if !(n > MIN_NORM) || !n.is_finite() {
            return Err(Error::UndefinedDirection(format!(
                "cannot normalize a {}-dim vector of norm {n}",
                values.len()
            )));
        }
        Ok(Self(values.into_iter().map(|v| v / n).collect()))
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn dot(&self, other: &Descriptor) -> f64 {
        dot(&self.0, &other.0)
    }
}

impl TryFrom<Vec<f64>> for Descriptor {
    type Error = Error;

    fn try_from(v: Vec<f64>) -> Result<Self> {
        Descriptor::from_unnormalized(v)
    }
}

impl From<Descriptor> for Vec<f64> {
    fn from(d: Descriptor) -> Self {
        d.0
    }
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// Gradient through `v ↦ v / ‖v‖`: given the unnormalized vector and the
/// gradient on its normalized image, returns the gradient on `v`.
pub(crate) fn normalize_backward(raw: &[f64], grad: &[f64]) -> Vec<f64> {
    let n = norm(raw);
    let u: Vec<f64> = raw.iter().map(|v| v / n).collect();
    let ug = dot(&u, grad);
    grad.iter().zip(&u).map(|(g, u)| (g - u * ug) / n).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn normalizes() {
        let d = Descriptor::from_unnormalized(vec![3.0, 4.0]).unwrap();
        assert_eq!(d.values(), &[0.6, 0.8]);
        assert!((d.dot(&d) - 1.0).abs() < 1e-15);
        assert!(matches!(
            Descriptor::from_unnormalized(vec![0.0; 4]),
            Err(Error::UndefinedDirection(_))
        ));
    }

    #[test]
    fn normalize_gradient_matches_finite_differences() {
        let raw = vec![0.3, -1.2, 2.0, 0.7];
        let g = vec![0.5, 0.1, -0.4, 1.0];
        let f = |v: &[f64]| {
            let n = norm(v);
            v.iter().zip(&g).map(|(a, b)| a / n * b).sum::<f64>()
        };
        let an = normalize_backward(&raw, &g);
        for i in 0..raw.len() {
            let mut p = raw.clone();
            let mut m = raw.clone();
            p[i] += 1e-6;
            m[i] -= 1e-6;
            let fd = (f(&p) - f(&m)) / 2e-6;
            assert!((fd - an[i]).abs() < 1e-8);
        }
    }

    #[test]
    fn serde_renormalizes() {
        let d: Descriptor = serde_json::from_str("[0.0, 2.0]").unwrap();
        assert_eq!(d.values(), &[0.0, 1.0]);
        assert!(serde_json::from_str::<Descriptor>("[0.0, 0.0]").is_err());
    }
}
