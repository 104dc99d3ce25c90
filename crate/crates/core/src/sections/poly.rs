//! Polynomial chart payloads: sums of ambient-vector-valued monomials with
//! optional compact-support windows.

use nalgebra::{DMatrix, DVector, Vector3};

use super::window::Window;
use super::{Box3, Jet};
use crate::error::{Error, Result};

#[derive(Debug, Clone)]
pub struct PolyTerm {
    pub vector: DVector<f64>,
    pub coeff: f64,
    pub powers: [u32; 3],
    pub window: Option<Window>,
}

impl PolyTerm {
    pub fn total_degree(&self) -> u32 {
        self.powers.iter().sum()
    }

    /// Scalar factor coeff * monomial * window and its y-gradient.
    pub fn scalar_jet(&self, y: &Vector3<f64>) -> (f64, Vector3<f64>) {
        let (m, dm) = monomial_jet(self.powers, y);
        let (v, g) = match &self.window {
            Some(w) => {
                let (wv, wg) = w.jet(y);
                (m * wv, dm * wv + wg * m)
            }
            None => (m, dm),
        };
        (self.coeff * v, g * self.coeff)
    }
}

pub fn monomial_jet(powers: [u32; 3], y: &Vector3<f64>) -> (f64, Vector3<f64>) {
    let mut m = 1.0;
    let mut part = [1.0f64; 3];
    for k in 0..3 {
        part[k] = y[k].powi(powers[k] as i32);
        m *= part[k];
    }
    let mut dm = Vector3::zeros();
    for k in 0..3 {
        let p = powers[k];
        if p == 0 {
            continue;
        }
        let mut d = p as f64 * y[k].powi(p as i32 - 1);
        for j in 0..3 {
            if j != k {
                d *= part[j];
            }
        }
        dm[k] = d;
    }
    (m, dm)
}

/// Chart whose section is a finite sum of windowed vector monomials.
#[derive(Debug, Clone)]
pub struct PolyChart {
    pub id: String,
    pub domain: Box3,
    /// Declared linear charts reject nonlinear or windowed terms.
    pub linear_only: bool,
    pub terms: Vec<PolyTerm>,
    /// Added with weight t when the family parameter is applied.
    pub family_terms: Vec<PolyTerm>,
}

impl PolyChart {
    pub fn validate(&self, dim: usize) -> Result<()> {
        self.domain.validate()?;
        for term in self.terms.iter().chain(&self.family_terms) {
            if term.vector.len() != dim {
                return Err(Error::invalid(format!(
                    "chart {}: term vector length {} vs ambient dimension {dim}",
                    self.id,
                    term.vector.len()
                )));
            }
            if let Some(w) = &term.window {
                w.validate()?;
            }
            if self.linear_only && (term.total_degree() > 1 || term.window.is_some()) {
                return Err(Error::invalid(format!(
                    "chart {}: declared linear but has a nonlinear or windowed term",
                    self.id
                )));
            }
        }
        Ok(())
    }

    pub fn eval_jet(&self, dim: usize, y: &Vector3<f64>) -> Jet {
        let mut u = DVector::zeros(dim);
        let mut du = DMatrix::zeros(dim, 3);
        for term in &self.terms {
            let (s, ds) = term.scalar_jet(y);
            if s != 0.0 {
                u.axpy(s, &term.vector, 1.0);
            }
            for c in 0..3 {
                if ds[c] != 0.0 {
                    du.column_mut(c).axpy(ds[c], &term.vector, 1.0);
                }
            }
        }
        Jet { u, du }
    }

    /// Folds the family tables in at parameter t. At t = 0 the chart is
    /// returned unchanged so base coefficients stay bit-identical.
    pub fn resolved(&self, t: f64) -> PolyChart {
        let mut out = self.clone();
        if t != 0.0 {
            for f in &self.family_terms {
                let mut term = f.clone();
                term.coeff *= t;
                out.terms.push(term);
            }
        }
        out.family_terms.clear();
        out
    }
}
