//! Chart-based positive sections of the base. A chart maps a region of R^3
//! into the ambient form's vector space; the induced metric, height
//! functions, and their gradient fields are computed here, along with the
//! maximality diagnostic.

pub mod atlas;
pub mod link;
pub mod poly;
pub mod window;

use nalgebra::{DMatrix, DVector, Matrix3, Vector3};
use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lattice::{AmbientForm, LatticeClass};
pub use link::LinkChart;
pub use poly::{PolyChart, PolyTerm};
pub use window::{Window, WindowDims, WindowShape};

/// Evaluations are formula-based and stay meaningful slightly past the
/// declared domain; beyond this inflation factor they are refused.
const DOMAIN_INFLATION: f64 = 1.25;

/// Relative step for the built-in central-difference stencils.
pub const FD_REL_STEP: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Box3 {
    pub min: [f64; 3],
    pub max: [f64; 3],
}

impl Box3 {
    pub fn cube(half: f64) -> Box3 {
        Box3 {
            min: [-half; 3],
            max: [half; 3],
        }
    }

    pub fn validate(&self) -> Result<()> {
        for k in 0..3 {
            if !(self.max[k] > self.min[k]) {
                return Err(Error::invalid(format!(
                    "domain box axis {k} is empty: [{}, {}]",
                    self.min[k], self.max[k]
                )));
            }
        }
        Ok(())
    }

    pub fn center(&self) -> Vector3<f64> {
        Vector3::from_fn(|k, _| 0.5 * (self.min[k] + self.max[k]))
    }

    pub fn diameter(&self) -> f64 {
        let mut d2 = 0.0;
        for k in 0..3 {
            let e = self.max[k] - self.min[k];
            d2 += e * e;
        }
        d2.sqrt()
    }

    pub fn contains(&self, y: &Vector3<f64>) -> bool {
        (0..3).all(|k| y[k] >= self.min[k] && y[k] <= self.max[k])
    }

    /// Containment in the box scaled about its center.
    pub fn contains_scaled(&self, y: &Vector3<f64>, factor: f64) -> bool {
        let c = self.center();
        (0..3).all(|k| {
            let half = 0.5 * (self.max[k] - self.min[k]) * factor;
            (y[k] - c[k]).abs() <= half
        })
    }

    /// Signed distance to the boundary: positive inside.
    pub fn boundary_margin(&self, y: &Vector3<f64>) -> f64 {
        let mut m = f64::INFINITY;
        for k in 0..3 {
            m = m.min(y[k] - self.min[k]).min(self.max[k] - y[k]);
        }
        m
    }
}

/// Section value and Jacobian at a point: u ambient, du is ambient x 3.
#[derive(Debug, Clone)]
pub struct Jet {
    pub u: DVector<f64>,
    pub du: DMatrix<f64>,
}

/// Branch selector for two-valued charts.
#[derive(Debug, Clone, Copy)]
pub enum Sheet {
    /// Single-valued charts only.
    Single,
    /// w = principal sqrt(z).
    Principal,
    /// w = -principal sqrt(z).
    Second,
    /// The sqrt branch nearest a tracked reference; exact continuation for
    /// curves that cross the principal cut.
    NearW(Complex64),
}

#[derive(Debug, Clone)]
pub enum SectionChart {
    Poly(PolyChart),
    Link(LinkChart),
}

impl SectionChart {
    pub fn id(&self) -> &str {
        match self {
            SectionChart::Poly(c) => &c.id,
            SectionChart::Link(c) => &c.id,
        }
    }

    pub fn is_link(&self) -> bool {
        matches!(self, SectionChart::Link(_))
    }

    pub fn contains(&self, y: &Vector3<f64>) -> bool {
        match self {
            SectionChart::Poly(c) => c.domain.contains(y),
            SectionChart::Link(c) => c.contains(y),
        }
    }

    fn contains_inflated(&self, y: &Vector3<f64>) -> bool {
        match self {
            SectionChart::Poly(c) => c.domain.contains_scaled(y, DOMAIN_INFLATION),
            SectionChart::Link(c) => {
                let r = c.r_max * DOMAIN_INFLATION;
                let mid = 0.5 * (c.t_range.0 + c.t_range.1);
                let half = 0.5 * (c.t_range.1 - c.t_range.0) * DOMAIN_INFLATION;
                y[0] * y[0] + y[1] * y[1] <= r * r && (y[2] - mid).abs() <= half
            }
        }
    }

    /// Positive margin while strictly inside the declared domain.
    pub fn domain_margin(&self, y: &Vector3<f64>) -> f64 {
        match self {
            SectionChart::Poly(c) => c.domain.boundary_margin(y),
            SectionChart::Link(c) => {
                let r = (y[0] * y[0] + y[1] * y[1]).sqrt();
                (c.r_max - r).min(y[2] - c.t_range.0).min(c.t_range.1 - y[2])
            }
        }
    }

    pub fn resolved(&self, t: f64) -> SectionChart {
        match self {
            SectionChart::Poly(c) => SectionChart::Poly(c.resolved(t)),
            SectionChart::Link(c) => SectionChart::Link(c.resolved(t)),
        }
    }

    pub fn validate(&self, form: &AmbientForm, uniqueness_box: i64) -> Result<()> {
        match self {
            SectionChart::Poly(c) => c.validate(form.dim()),
            SectionChart::Link(c) => c.validate(form, uniqueness_box),
        }
    }

    pub fn as_link(&self) -> Option<&LinkChart> {
        match self {
            SectionChart::Link(c) => Some(c),
            _ => None,
        }
    }
}

/// Anything that can be evaluated like a section chart; perturbed sections
/// wrap a chart and implement this too.
pub trait SectionEval {
    fn eval_jet(&self, form: &AmbientForm, y: &Vector3<f64>, sheet: Sheet) -> Result<Jet>;

    /// Length scale for finite-difference stencils.
    fn fd_scale(&self) -> f64 {
        1.0
    }
}

impl SectionEval for SectionChart {
    fn eval_jet(&self, form: &AmbientForm, y: &Vector3<f64>, sheet: Sheet) -> Result<Jet> {
        if !self.contains_inflated(y) {
            return Err(Error::OutOfDomain(format!(
                "point ({:.4}, {:.4}, {:.4}) is outside chart {}",
                y[0],
                y[1],
                y[2],
                self.id()
            )));
        }
        match self {
            SectionChart::Poly(c) => match sheet {
                Sheet::Single => Ok(c.eval_jet(form.dim(), y)),
                _ => Err(Error::invalid(format!(
                    "chart {} is single-valued; no branch selection applies",
                    c.id
                ))),
            },
            SectionChart::Link(c) => c.eval_sheet(form.dim(), y, sheet),
        }
    }

    fn fd_scale(&self) -> f64 {
        match self {
            SectionChart::Poly(c) => c.domain.diameter(),
            SectionChart::Link(c) => (2.0 * c.r_max).max(c.t_range.1 - c.t_range.0),
        }
    }
}

#[derive(Debug, Clone)]
pub struct InducedMetric {
    pub point: Vector3<f64>,
    pub g: Matrix3<f64>,
    pub g_inv: Matrix3<f64>,
}

pub fn metric_from_jet(jet: &Jet, form: &AmbientForm, y: &Vector3<f64>) -> Result<InducedMetric> {
    let mut g = Matrix3::zeros();
    for i in 0..3 {
        let ci = jet.du.column(i);
        for j in i..3 {
            let v = (ci.transpose() * form_gram(form) * jet.du.column(j))[(0, 0)];
            g[(i, j)] = v;
            g[(j, i)] = v;
        }
    }
    let chol = g.cholesky().ok_or_else(|| Error::Positivity(format!(
        "induced metric not positive definite at ({:.4}, {:.4}, {:.4})",
        y[0], y[1], y[2]
    )))?;
    Ok(InducedMetric {
        point: *y,
        g,
        g_inv: chol.inverse(),
    })
}

fn form_gram(form: &AmbientForm) -> DMatrix<f64> {
    // pair_real is the hot path elsewhere; metric assembly goes through the
    // f64 Gram directly
    let n = form.dim();
    DMatrix::from_fn(n, n, |i, j| {
        let mut ei = DVector::zeros(n);
        ei[i] = 1.0;
        let mut ej = DVector::zeros(n);
        ej[j] = 1.0;
        form.pair_real(&ei, &ej)
    })
}

pub fn induced_metric(
    form: &AmbientForm,
    sec: &dyn SectionEval,
    y: &Vector3<f64>,
    sheet: Sheet,
) -> Result<InducedMetric> {
    let jet = sec.eval_jet(form, y, sheet)?;
    metric_from_jet(&jet, form, y)
}

/// Height value, Riemannian gradient in chart coordinates, and gradient
/// speed |grad h|_g at a point.
#[derive(Debug, Clone, Copy)]
pub struct HeightGradient {
    pub value: f64,
    pub gradient: Vector3<f64>,
    pub speed: f64,
}

pub fn height_gradient(
    form: &AmbientForm,
    sec: &dyn SectionEval,
    alpha: &LatticeClass,
    y: &Vector3<f64>,
    sheet: Sheet,
) -> Result<HeightGradient> {
    let jet = sec.eval_jet(form, y, sheet)?;
    height_gradient_from_jet(form, &jet, alpha, y)
}

pub fn height_gradient_from_jet(
    form: &AmbientForm,
    jet: &Jet,
    alpha: &LatticeClass,
    y: &Vector3<f64>,
) -> Result<HeightGradient> {
    let metric = metric_from_jet(jet, form, y)?;
    let ar = alpha.to_real();
    let value = form.pair_real(&ar, &jet.u);
    let dh = Vector3::from_fn(|c, _| {
        form.pair_real(&ar, &DVector::from_column_slice(jet.du.column(c).as_slice()))
    });
    let gradient = metric.g_inv * dh;
    let speed = dh.dot(&gradient).max(0.0).sqrt();
    Ok(HeightGradient {
        value,
        gradient,
        speed,
    })
}

/// Mean-curvature-type defect of the section at y: the form-lowered normal
/// component of the Laplace-Beltrami of the coordinate restrictions,
/// computed with central differences. Zero (to stencil order) iff the
/// section is maximal at y.
pub fn maximality_residual(
    form: &AmbientForm,
    sec: &dyn SectionEval,
    y: &Vector3<f64>,
    sheet: Sheet,
) -> Result<f64> {
    let dim = form.dim();
    let h = FD_REL_STEP * sec.fd_scale();
    // flux matrix sqrt(det g) * du * g^{-1}, differentiated per column
    let flux = |yy: &Vector3<f64>| -> Result<nalgebra::MatrixXx3<f64>> {
        let jet = sec.eval_jet(form, yy, sheet)?;
        let m = metric_from_jet(&jet, form, yy)?;
        let det = m.g.determinant();
        Ok(&jet.du * m.g_inv * det.sqrt())
    };
    let mut lap = DVector::zeros(dim);
    for i in 0..3 {
        let mut yp = *y;
        let mut ym = *y;
        yp[i] += h;
        ym[i] -= h;
        let fp = flux(&yp)?;
        let fm = flux(&ym)?;
        for a in 0..dim {
            lap[a] += (fp[(a, i)] - fm[(a, i)]) / (2.0 * h);
        }
    }
    let jet = sec.eval_jet(form, y, sheet)?;
    let m = metric_from_jet(&jet, form, y)?;
    lap /= m.g.determinant().sqrt();
    // project out the tangential part, then lower with the form
    let gram = form_gram(form);
    let dut_g = jet.du.transpose() * &gram;
    let tangential = &jet.du * (m.g_inv * (&dut_g * &lap));
    let normal = lap - tangential;
    Ok((gram * normal).norm())
}
