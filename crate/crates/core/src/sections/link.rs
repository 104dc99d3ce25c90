//! Branched chart payload near one link strand. Coordinates are
//! (z = y1 + i y2, t = y3) on a cylinder around the strand {z = 0}; the
//! section decomposes as u = base + A·y + f·delta + F with f two-valued.
//! All branched evaluation routes through the double cover z = w^2, where
//! the model term Re(b(t) z^{3/2}) = Re(b(t) w^3) is polynomial.

use nalgebra::{DMatrix, DVector, Vector3};
use num_complex::Complex64;

use super::poly::PolyTerm;
use super::window::{smoothstep, smoothstep_d, WindowShape};
use super::{Jet, Sheet};
use crate::error::{Error, Result};
use crate::lattice::{enumerate_minus2, AmbientForm, LatticeClass};

const ORTHO_TOL: f64 = 1e-9;
const SPAN_RESIDUAL_TOL: f64 = 1e-8;
const B_MIN_ABS: f64 = 1e-6;

/// Polynomial in t with complex coefficients, c[0] + c[1] t + ...
#[derive(Debug, Clone)]
pub struct ComplexPoly {
    pub coeffs: Vec<Complex64>,
}

impl ComplexPoly {
    pub fn constant(c: Complex64) -> Self {
        ComplexPoly { coeffs: vec![c] }
    }

    pub fn eval(&self, t: f64) -> Complex64 {
        let mut acc = Complex64::new(0.0, 0.0);
        for &c in self.coeffs.iter().rev() {
            acc = acc * t + c;
        }
        acc
    }

    pub fn eval_d(&self, t: f64) -> (Complex64, Complex64) {
        let mut acc = Complex64::new(0.0, 0.0);
        let mut dacc = Complex64::new(0.0, 0.0);
        for &c in self.coeffs.iter().rev() {
            dacc = dacc * t + acc;
            acc = acc * t + c;
        }
        (acc, dacc)
    }

    fn axpy(&mut self, s: f64, other: &ComplexPoly) {
        if other.coeffs.len() > self.coeffs.len() {
            self.coeffs.resize(other.coeffs.len(), Complex64::new(0.0, 0.0));
        }
        for (i, &c) in other.coeffs.iter().enumerate() {
            self.coeffs[i] += s * c;
        }
    }
}

/// Radial window in |z| for branched terms; even under w -> -w, so it never
/// disturbs branch parity.
#[derive(Debug, Clone, Copy)]
pub struct RadialWindow {
    pub r0: f64,
    pub r1: f64,
    pub shape: WindowShape,
}

impl RadialWindow {
    pub fn validate(&self) -> Result<()> {
        if !(self.r0 >= 0.0 && self.r1 > self.r0) {
            return Err(Error::invalid(format!(
                "radial window needs 0 <= r0 < r1, got [{}, {}]",
                self.r0, self.r1
            )));
        }
        Ok(())
    }

    pub fn vanishes_at_zero(&self) -> bool {
        self.shape == WindowShape::Rising && self.r0 > 0.0
    }

    /// Value and d/d|z|.
    pub fn value_d(&self, rho: f64) -> (f64, f64) {
        let width = self.r1 - self.r0;
        let x = (rho - self.r0) / width;
        let s = smoothstep(x);
        let ds = smoothstep_d(x) / width;
        match self.shape {
            WindowShape::Rising => (s, ds),
            WindowShape::Falling => (1.0 - s, -ds),
        }
    }
}

/// One term of the branched correction eta: window(|z|) * Re(c t^r w^p wbar^q).
/// Branch parity requires p + q odd; the |z|^{5/2} decay requires p + q >= 5
/// unless the window vanishes identically near the strand.
#[derive(Debug, Clone)]
pub struct EtaTerm {
    pub coeff: Complex64,
    pub w_pow: u32,
    pub wbar_pow: u32,
    pub t_pow: u32,
    pub window: Option<RadialWindow>,
}

impl EtaTerm {
    fn validate(&self) -> Result<()> {
        let deg = self.w_pow + self.wbar_pow;
        if deg % 2 == 0 {
            return Err(Error::invalid(format!(
                "branched term w^{} wbar^{} is even under w -> -w",
                self.w_pow, self.wbar_pow
            )));
        }
        if let Some(win) = &self.window {
            win.validate()?;
            if deg < 5 && !win.vanishes_at_zero() {
                return Err(Error::invalid(format!(
                    "branched term of degree {deg} < 5 needs a window vanishing at the strand"
                )));
            }
        } else if deg < 5 {
            return Err(Error::invalid(format!(
                "branched term of degree {deg} < 5 violates the decay order"
            )));
        }
        Ok(())
    }

    /// (value, wirtinger d/dw, d/dt) at (w, t).
    fn jet(&self, w: Complex64, t: f64) -> (f64, Complex64, f64) {
        let wb = w.conj();
        let wp = w.powu(self.w_pow);
        let wbq = wb.powu(self.wbar_pow);
        let tr = t.powi(self.t_pow as i32);
        // Re(A) with A = c t^r w^p wbar^q; d/dw uses A's w-part and the
        // conjugate's w^q-part
        let core = (self.coeff * tr * wp * wbq).re;
        let mut dw = Complex64::new(0.0, 0.0);
        if self.w_pow > 0 {
            dw += 0.5 * self.coeff * tr * (self.w_pow as f64) * w.powu(self.w_pow - 1) * wbq;
        }
        if self.wbar_pow > 0 {
            dw += 0.5
                * self.coeff.conj()
                * tr
                * (self.wbar_pow as f64)
                * wb.powu(self.w_pow)
                * w.powu(self.wbar_pow - 1);
        }
        let dt = if self.t_pow == 0 {
            0.0
        } else {
            (self.coeff * (self.t_pow as f64) * t.powi(self.t_pow as i32 - 1) * wp * wbq).re
        };
        match &self.window {
            None => (core, dw, dt),
            Some(win) => {
                let rho = (w * wb).re;
                let (wv, wd) = win.value_d(rho);
                // d rho / dw = wbar
                let dw_total = dw * wv + wb * (wd * core);
                (core * wv, dw_total, dt * wv)
            }
        }
    }
}

/// Branched chart at one strand.
#[derive(Debug, Clone)]
pub struct LinkChart {
    pub id: String,
    pub t_range: (f64, f64),
    /// Valid for |z| <= r_max.
    pub r_max: f64,
    pub base_point: DVector<f64>,
    /// Images of d/dy1, d/dy2, d/dy3; their span is the positive frame H.
    pub axes: [DVector<f64>; 3],
    pub family_axes: Option<[DVector<f64>; 3]>,
    pub delta: LatticeClass,
    pub b: ComplexPoly,
    pub family_b: Option<ComplexPoly>,
    pub eta: Vec<EtaTerm>,
    /// Single-valued part valued in K = (H + R delta)^perp; terms are
    /// polynomials in (y1, y2, t) vanishing to second order at the strand
    /// unless windowed away from it.
    pub big_f: Vec<PolyTerm>,
}

impl LinkChart {
    pub fn contains(&self, y: &Vector3<f64>) -> bool {
        y[0] * y[0] + y[1] * y[1] <= self.r_max * self.r_max
            && y[2] >= self.t_range.0
            && y[2] <= self.t_range.1
    }

    pub fn delta_vec(&self) -> DVector<f64> {
        self.delta.to_real()
    }

    /// Selects the square root of z for a sheet request.
    pub fn w_for_sheet(z: Complex64, sheet: Sheet) -> Result<Complex64> {
        let s = z.sqrt();
        match sheet {
            Sheet::Principal => Ok(s),
            Sheet::Second => Ok(-s),
            Sheet::NearW(w_ref) => {
                if (s - w_ref).norm_sqr() <= (-s - w_ref).norm_sqr() {
                    Ok(s)
                } else {
                    Ok(-s)
                }
            }
            Sheet::Single => Err(Error::invalid(
                "branched chart evaluation needs a sheet selection",
            )),
        }
    }

    /// f and its derivatives at (w, t): (f, wirtinger df/dw, df/dt).
    pub fn f_scalar_jet(&self, w: Complex64, t: f64) -> (f64, Complex64, f64) {
        let (b, db) = self.b.eval_d(t);
        let w3 = w * w * w;
        let mut f = (b * w3).re;
        let mut fw = 1.5 * b * w * w;
        let mut ft = (db * w3).re;
        for term in &self.eta {
            let (v, dw, dt) = term.jet(w, t);
            f += v;
            fw += dw;
            ft += dt;
        }
        (f, fw, ft)
    }

    /// Gradient of f in chart coordinates (y1, y2, y3).
    pub fn f_gradient(&self, w: Complex64, t: f64) -> (f64, Vector3<f64>) {
        let (f, fw, ft) = self.f_scalar_jet(w, t);
        let g = if w.norm_sqr() == 0.0 {
            Complex64::new(0.0, 0.0)
        } else {
            // for real f: f_y1 + i f_y2 = conj(f_w / w)
            (fw / w).conj()
        };
        (f, Vector3::new(g.re, g.im, ft))
    }

    /// Full ambient jet at (w, t); dim is the ambient dimension.
    pub fn eval_w(&self, dim: usize, w: Complex64, t: f64) -> Jet {
        let z = w * w;
        let y = Vector3::new(z.re, z.im, t);
        let mut u = self.base_point.clone();
        let mut du = DMatrix::zeros(dim, 3);
        for c in 0..3 {
            u.axpy(y[c], &self.axes[c], 1.0);
            du.column_mut(c).copy_from(&self.axes[c]);
        }
        let (f, grad_f) = self.f_gradient(w, t);
        let dv = self.delta_vec();
        u.axpy(f, &dv, 1.0);
        for c in 0..3 {
            if grad_f[c] != 0.0 {
                du.column_mut(c).axpy(grad_f[c], &dv, 1.0);
            }
        }
        for term in &self.big_f {
            let (s, ds) = term.scalar_jet(&y);
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

    pub fn eval_sheet(&self, dim: usize, y: &Vector3<f64>, sheet: Sheet) -> Result<Jet> {
        let z = Complex64::new(y[0], y[1]);
        let w = Self::w_for_sheet(z, sheet)?;
        Ok(self.eval_w(dim, w, y[2]))
    }

    /// Folds the family tables in at parameter t.
    pub fn resolved(&self, t: f64) -> LinkChart {
        let mut out = self.clone();
        if t != 0.0 {
            if let Some(fam) = &self.family_axes {
                for c in 0..3 {
                    out.axes[c] = &self.axes[c] + fam[c].scale(t);
                }
            }
            if let Some(fb) = &self.family_b {
                out.b.axpy(t, fb);
            }
        }
        out.family_axes = None;
        out.family_b = None;
        out
    }

    pub fn validate(&self, form: &AmbientForm, uniqueness_box: i64) -> Result<()> {
        let dim = form.dim();
        if self.r_max <= 0.0 {
            return Err(Error::invalid(format!("chart {}: r_max must be > 0", self.id)));
        }
        if self.t_range.1 <= self.t_range.0 {
            return Err(Error::invalid(format!("chart {}: empty t range", self.id)));
        }
        if self.base_point.len() != dim || self.axes.iter().any(|a| a.len() != dim) {
            return Err(Error::invalid(format!(
                "chart {}: ambient vectors must have length {dim}",
                self.id
            )));
        }
        if !form.is_minus2(&self.delta) {
            return Err(Error::invalid(format!(
                "chart {}: vanishing cycle {} has norm {}, need -2",
                self.id,
                self.delta,
                form.norm(&self.delta)
            )));
        }
        let dv = self.delta_vec();
        let axes_all: Vec<&DVector<f64>> = self
            .axes
            .iter()
            .chain(self.family_axes.iter().flatten())
            .collect();
        for a in &axes_all {
            let p = form.pair_real(a, &dv);
            if p.abs() > ORTHO_TOL {
                return Err(Error::invalid(format!(
                    "chart {}: axis pairs {p:.3e} with the vanishing cycle, need 0",
                    self.id
                )));
            }
        }
        for term in &self.big_f {
            if term.vector.len() != dim {
                return Err(Error::invalid(format!(
                    "chart {}: K-term vector length {} vs dimension {dim}",
                    self.id,
                    term.vector.len()
                )));
            }
            for a in &axes_all {
                if form.pair_real(&term.vector, a).abs() > ORTHO_TOL {
                    return Err(Error::invalid(format!(
                        "chart {}: K-term vector not orthogonal to the frame",
                        self.id
                    )));
                }
            }
            if form.pair_real(&term.vector, &dv).abs() > ORTHO_TOL {
                return Err(Error::invalid(format!(
                    "chart {}: K-term vector not orthogonal to the vanishing cycle",
                    self.id
                )));
            }
            let window_kills_origin = term.window.as_ref().is_some_and(|w| {
                w.shape == WindowShape::Rising
                    && w.r0 > 0.0
                    && w.dims == super::window::WindowDims::Xy
                    && w.center[0] == 0.0
                    && w.center[1] == 0.0
            });
            if term.powers[0] + term.powers[1] < 2 && !window_kills_origin {
                return Err(Error::invalid(format!(
                    "chart {}: K term must vanish to second order at the strand or be \
                     windowed off it",
                    self.id
                )));
            }
            if let Some(w) = &term.window {
                w.validate()?;
            }
        }
        for term in &self.eta {
            term.validate()?;
        }
        // b(t) nowhere zero on the strand
        let n = 257;
        for i in 0..n {
            let t = self.t_range.0
                + (self.t_range.1 - self.t_range.0) * (i as f64) / ((n - 1) as f64);
            let bv = self.b.eval(t).norm();
            if bv < B_MIN_ABS {
                return Err(Error::invalid(format!(
                    "chart {}: |b({t})| = {bv:.3e} below {B_MIN_ABS:.0e}",
                    self.id
                )));
            }
        }
        self.check_delta_unique(form, uniqueness_box)
    }

    /// Within the budget box, the only -2 classes in span(H + R delta) must
    /// be the two signs of the vanishing cycle.
    fn check_delta_unique(&self, form: &AmbientForm, box_bound: i64) -> Result<()> {
        let dim = form.dim();
        let mut m = DMatrix::zeros(dim, 4);
        for c in 0..3 {
            m.column_mut(c).copy_from(&self.axes[c]);
        }
        m.column_mut(3).copy_from(&self.delta_vec());
        let svd = m.clone().svd(true, true);
        for cls in enumerate_minus2(form, box_bound) {
            let rhs = cls.to_real();
            let sol = svd.solve(&rhs, 1e-12).map_err(Error::invalid)?;
            let resid = (&m * sol - &rhs).norm();
            if resid <= SPAN_RESIDUAL_TOL * rhs.norm().max(1.0)
                && cls != self.delta
                && cls != self.delta.neg()
            {
                return Err(Error::invalid(format!(
                    "chart {}: class {cls} also lies in the frame + vanishing-cycle span \
                     (box {box_bound})",
                    self.id
                )));
            }
        }
        Ok(())
    }
}
