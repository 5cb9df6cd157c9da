use nalgebra::{DMatrix, DVector};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::error::{Error, Result};
use crate::fitting::full_gradient;
use crate::models::{DoseDesign, ModelKind, Theta};

/// `sum_j (n_j / n) w_j g_j g_j'` over the design doses, in the estimated
/// parameters.
pub(crate) fn information(
    kind: ModelKind,
    theta: &Theta,
    design: &DoseDesign,
    dose_weights: Option<&[f64]>,
) -> DMatrix<f64> {
    let p = kind.n_free();
    let mut g = vec![0.0; 2 + kind.arity()];
    let mut m = DMatrix::zeros(p, p);
    for (j, (&d, frac)) in design.doses().iter().zip(design.fractions()).enumerate() {
        full_gradient(kind, theta, d, &mut g);
        let c = frac * dose_weights.map_or(1.0, |w| w[j]);
        for a in 0..p {
            for b in 0..p {
                m[(a, b)] += c * g[a] * g[b];
            }
        }
    }
    m
}

/// Moore-Penrose inverse of a symmetric positive semidefinite matrix.
pub(crate) struct PseudoInverse {
    inv: DMatrix<f64>,
    proj: DMatrix<f64>,
}

impl PseudoInverse {
    pub fn new(m: &DMatrix<f64>) -> Self {
        let n = m.nrows();
        let sym = (m + m.transpose()) * 0.5;
        let eig = sym.symmetric_eigen();
        let top = eig.eigenvalues.iter().fold(0.0f64, |a, &b| a.max(b.abs()));
        let tol = top * 1e-11 * n as f64;
        let mut inv = DMatrix::zeros(n, n);
        let mut proj = DMatrix::zeros(n, n);
        for (i, &lam) in eig.eigenvalues.iter().enumerate() {
            if lam > tol && lam > 0.0 {
                let v = eig.eigenvectors.column(i);
                inv += (v * v.transpose()) / lam;
                proj += v * v.transpose();
            }
        }
        PseudoInverse { inv, proj }
    }

    /// `b' M^- b`, or an error when `b` is not in the range of `M`.
    pub fn quad(&self, b: &[f64]) -> Result<f64> {
        let v = DVector::from_column_slice(b);
        let resid = &v - &self.proj * &v;
        if resid.norm() > 1e-6 * v.norm().max(f64::MIN_POSITIVE) {
            return Err(Error::SingularInformation(
                "gradient is not in the range of the information matrix".into(),
            ));
        }
        Ok(v.dot(&(&self.inv * &v)).max(0.0))
    }
}

/// Standard normal quantile.
pub(crate) fn z_quantile(p: f64) -> f64 {
    Normal::standard().inverse_cdf(p)
}
