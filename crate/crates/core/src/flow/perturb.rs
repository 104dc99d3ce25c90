//! Section perturbations and the linearized response of flowlines: the
//! variation field they induce on the gradient dynamics, and the solution
//! of the inhomogeneous variational equation along a flowline.

use nalgebra::{DMatrix, DVector, Matrix3, Vector3};

use crate::error::{Error, Result};
use crate::flow::dopri::{solve_ode, OdeSolution};
use crate::flow::{FlowContext, Flowline};
use crate::lattice::{AmbientForm, LatticeClass};
use crate::sections::atlas::Placement;
use crate::sections::poly::{monomial_jet, PolyTerm};
use crate::sections::window::{Window, WindowDims};
use crate::sections::{
    height_gradient_from_jet, metric_from_jet, Jet, SectionChart, SectionEval, Sheet,
};

/// Scalar polynomial-times-window profile on the base.
#[derive(Debug, Clone)]
pub struct ScalarProfile {
    pub coeff: f64,
    pub powers: [u32; 3],
    pub window: Option<Window>,
}

impl ScalarProfile {
    pub fn jet(&self, y: &Vector3<f64>) -> (f64, Vector3<f64>) {
        let (m, dm) = monomial_jet(self.powers, y);
        match &self.window {
            None => (self.coeff * m, dm * self.coeff),
            Some(w) => {
                let (wv, dw) = w.jet(y);
                (self.coeff * m * wv, (dm * wv + dw * m) * self.coeff)
            }
        }
    }
}

/// A one-parameter deformation of the section, evaluated in base
/// coordinates.
#[derive(Debug, Clone)]
pub enum Perturbation {
    /// Ambient-vector-valued polynomial terms.
    Poly(Vec<PolyTerm>),
    /// profile(y) times the pointwise form-normal projection of a fixed
    /// ambient vector; normal-valued by construction.
    NormalProjected {
        vector: DVector<f64>,
        profile: ScalarProfile,
    },
}

/// Conservative support description used for zone checks.
pub enum SupportHint {
    Balls(Vec<(Vector3<f64>, f64)>),
    Unbounded,
}

impl Perturbation {
    pub fn scaled(&self, c: f64) -> Perturbation {
        match self {
            Perturbation::Poly(terms) => Perturbation::Poly(
                terms
                    .iter()
                    .map(|t| PolyTerm {
                        coeff: c * t.coeff,
                        ..t.clone()
                    })
                    .collect(),
            ),
            Perturbation::NormalProjected { vector, profile } => Perturbation::NormalProjected {
                vector: vector.clone(),
                profile: ScalarProfile {
                    coeff: c * profile.coeff,
                    ..profile.clone()
                },
            },
        }
    }

    pub fn support(&self) -> SupportHint {
        let window_ball = |w: &Option<Window>| -> Option<(Vector3<f64>, f64)> {
            match w {
                Some(win) if matches!(win.dims, WindowDims::All3)
                    && matches!(win.shape, crate::sections::WindowShape::Falling) =>
                {
                    Some((Vector3::from_column_slice(&win.center), win.r1))
                }
                _ => None,
            }
        };
        let mut balls = Vec::new();
        match self {
            Perturbation::Poly(terms) => {
                for t in terms {
                    match window_ball(&t.window) {
                        Some(b) => balls.push(b),
                        None => return SupportHint::Unbounded,
                    }
                }
            }
            Perturbation::NormalProjected { profile, .. } => match window_ball(&profile.window) {
                Some(b) => balls.push(b),
                None => return SupportHint::Unbounded,
            },
        }
        SupportHint::Balls(balls)
    }

    /// Value and local-coordinate Jacobian of the perturbation over a chart
    /// point. Normal projections differentiate the projector by central
    /// differences of the base jet.
    pub fn eval_local(
        &self,
        form: &AmbientForm,
        base: &SectionChart,
        placement: &Placement,
        y_local: &Vector3<f64>,
        sheet: Sheet,
    ) -> Result<(DVector<f64>, DMatrix<f64>)> {
        let dim = form.dim();
        let y_g = placement.to_global(y_local);
        match self {
            Perturbation::Poly(terms) => {
                let mut val = DVector::zeros(dim);
                let mut jac = DMatrix::zeros(dim, 3);
                for t in terms {
                    let (sv, dg) = t.scalar_jet(&y_g);
                    val.axpy(sv, &t.vector, 1.0);
                    let dl = placement.rot.transpose() * dg;
                    for i in 0..3 {
                        jac.column_mut(i).axpy(dl[i], &t.vector, 1.0);
                    }
                }
                Ok((val, jac))
            }
            Perturbation::NormalProjected { vector, profile } => {
                if vector.len() != dim {
                    return Err(Error::invalid("perturbation vector has wrong dimension"));
                }
                let normal_at = |y: &Vector3<f64>| -> Result<DVector<f64>> {
                    let jet = base.eval_jet(form, y, sheet)?;
                    let m = metric_from_jet(&jet, form, y)?;
                    let mut paired = Vector3::zeros();
                    for i in 0..3 {
                        paired[i] = form.pair_real(
                            &DVector::from_column_slice(jet.du.column(i).as_slice()),
                            vector,
                        );
                    }
                    let coeffs = m.g_inv * paired;
                    let mut n = vector.clone();
                    for i in 0..3 {
                        n.axpy(-coeffs[i], &DVector::from_column_slice(jet.du.column(i).as_slice()), 1.0);
                    }
                    Ok(n)
                };
                let (phi, dphi_g) = profile.jet(&y_g);
                let dphi = placement.rot.transpose() * dphi_g;
                let n0 = normal_at(y_local)?;
                let mut jac = DMatrix::zeros(dim, 3);
                for i in 0..3 {
                    jac.column_mut(i).axpy(dphi[i], &n0, 1.0);
                }
                if phi != 0.0 {
                    let h = 1e-5 * base.fd_scale();
                    for i in 0..3 {
                        let mut yp = *y_local;
                        let mut ym = *y_local;
                        yp[i] += h;
                        ym[i] -= h;
                        let dn = (normal_at(&yp)? - normal_at(&ym)?) / (2.0 * h);
                        jac.column_mut(i).axpy(phi, &dn, 1.0);
                    }
                }
                Ok((n0 * phi, jac))
            }
        }
    }
}

/// A chart evaluated through a perturbation at deformation time t.
pub struct PerturbedSection<'a> {
    pub form: &'a AmbientForm,
    pub base: &'a SectionChart,
    pub placement: &'a Placement,
    pub sigma: &'a Perturbation,
    pub t: f64,
}

impl SectionEval for PerturbedSection<'_> {
    fn eval_jet(&self, form: &AmbientForm, y: &Vector3<f64>, sheet: Sheet) -> Result<Jet> {
        let mut jet = self.base.eval_jet(form, y, sheet)?;
        let (sv, sj) = self
            .sigma
            .eval_local(form, self.base, self.placement, y, sheet)?;
        jet.u.axpy(self.t, &sv, 1.0);
        jet.du += sj * self.t;
        Ok(jet)
    }

    fn fd_scale(&self) -> f64 {
        self.base.fd_scale()
    }
}

/// Linearized flow response along a flowline.
pub struct VariationCurve {
    sol: OdeSolution,
}

impl VariationCurve {
    pub fn at(&self, s: f64) -> Vector3<f64> {
        let v = self.sol.at(s);
        Vector3::new(v[0], v[1], v[2])
    }

    pub fn endpoint(&self) -> Vector3<f64> {
        let v = &self.sol.y_end;
        Vector3::new(v[0], v[1], v[2])
    }
}

impl FlowContext<'_> {
    fn local_field(
        &self,
        label: &LatticeClass,
        chart_idx: usize,
        w_ref: Option<num_complex::Complex64>,
        y: &Vector3<f64>,
    ) -> Result<Vector3<f64>> {
        let sheet = match w_ref {
            Some(w) => Sheet::NearW(w),
            None => Sheet::Single,
        };
        let chart = &self.atlas.charts[chart_idx].chart;
        let jet = chart.eval_jet(self.form, y, sheet)?;
        Ok(height_gradient_from_jet(self.form, &jet, label, y)?.gradient)
    }

    /// Jacobian of the gradient field in chart coordinates, by Richardson
    /// extrapolated central differences.
    pub fn field_jacobian(
        &self,
        label: &LatticeClass,
        chart_idx: usize,
        w_ref: Option<num_complex::Complex64>,
        y: &Vector3<f64>,
    ) -> Result<Matrix3<f64>> {
        let scale = self.atlas.charts[chart_idx].chart.fd_scale();
        let diff = |h: f64| -> Result<Matrix3<f64>> {
            let mut m = Matrix3::zeros();
            for i in 0..3 {
                let mut yp = *y;
                let mut ym = *y;
                yp[i] += h;
                ym[i] -= h;
                let d = (self.local_field(label, chart_idx, w_ref, &yp)?
                    - self.local_field(label, chart_idx, w_ref, &ym)?)
                    / (2.0 * h);
                m.set_column(i, &d);
            }
            Ok(m)
        };
        let h = 1e-4 * scale;
        let d1 = diff(h)?;
        let d2 = diff(0.5 * h)?;
        Ok((d2 * 4.0 - d1) / 3.0)
    }

    /// Pointwise derivative of the gradient field in the deformation
    /// parameter, by Richardson extrapolated central differences in t.
    pub fn variation_field(
        &self,
        label: &LatticeClass,
        chart_idx: usize,
        w_ref: Option<num_complex::Complex64>,
        y: &Vector3<f64>,
        sigma: &Perturbation,
    ) -> Result<Vector3<f64>> {
        let pc = &self.atlas.charts[chart_idx];
        let sheet = match w_ref {
            Some(w) => Sheet::NearW(w),
            None => Sheet::Single,
        };
        let field_at = |t: f64| -> Result<Vector3<f64>> {
            let sec = PerturbedSection {
                form: self.form,
                base: &pc.chart,
                placement: &pc.placement,
                sigma,
                t,
            };
            let jet = sec.eval_jet(self.form, y, sheet)?;
            Ok(height_gradient_from_jet(self.form, &jet, label, y)?.gradient)
        };
        let t0 = 1e-4;
        let diff = |t: f64| -> Result<Vector3<f64>> {
            Ok((field_at(t)? - field_at(-t)?) / (2.0 * t))
        };
        let d1 = diff(t0)?;
        let d2 = diff(0.5 * t0)?;
        Ok((d2 * 4.0 - d1) / 3.0)
    }

    /// The first-order model of the variation field: the metric gradient of
    /// the label pairing with the perturbation. Exact on points where the
    /// perturbation is normal-valued and vanishes.
    pub fn variation_field_simplified(
        &self,
        label: &LatticeClass,
        chart_idx: usize,
        w_ref: Option<num_complex::Complex64>,
        y: &Vector3<f64>,
        sigma: &Perturbation,
    ) -> Result<Vector3<f64>> {
        let pc = &self.atlas.charts[chart_idx];
        let sheet = match w_ref {
            Some(w) => Sheet::NearW(w),
            None => Sheet::Single,
        };
        let jet = pc.chart.eval_jet(self.form, y, sheet)?;
        let m = metric_from_jet(&jet, self.form, y)?;
        let (_, sj) = sigma.eval_local(self.form, &pc.chart, &pc.placement, y, sheet)?;
        let ar = label.to_real();
        let dm = Vector3::from_fn(|i, _| {
            self.form
                .pair_real(&ar, &DVector::from_column_slice(sj.column(i).as_slice()))
        });
        Ok(m.g_inv * dm)
    }

    /// Rejects perturbations whose support can reach any two-valued chart.
    pub fn check_support_clear_of_links(&self, sigma: &Perturbation) -> Result<()> {
        let links: Vec<usize> = (0..self.atlas.charts.len())
            .filter(|&i| self.atlas.charts[i].chart.is_link())
            .collect();
        if links.is_empty() {
            return Ok(());
        }
        let balls = match sigma.support() {
            SupportHint::Unbounded => {
                return Err(Error::invalid(
                    "perturbation support is unbounded but the atlas has branching charts",
                ))
            }
            SupportHint::Balls(b) => b,
        };
        for &j in &links {
            let pc = &self.atlas.charts[j];
            let SectionChart::Link(lc) = &pc.chart else {
                continue;
            };
            for (c, r) in &balls {
                let l = pc.placement.to_local(c);
                let radial = (l[0] * l[0] + l[1] * l[1]).sqrt();
                let mid = 0.5 * (lc.t_range.0 + lc.t_range.1);
                let half = 0.5 * (lc.t_range.1 - lc.t_range.0);
                let dr = (radial - lc.r_max).max(0.0);
                let dz = ((l[2] - mid).abs() - half).max(0.0);
                let dist = (dr * dr + dz * dz).sqrt();
                if dist <= *r {
                    return Err(Error::invalid(format!(
                        "perturbation support reaches branching chart {}",
                        lc.id
                    )));
                }
            }
        }
        Ok(())
    }

    /// Solves the variational equation J' = A J + Y along a flowline with
    /// J(0) = 0, in base coordinates. A is the field Jacobian, Y the
    /// variation field of the perturbation.
    pub fn flow_derivative(&self, fl: &Flowline, sigma: &Perturbation) -> Result<VariationCurve> {
        self.check_support_clear_of_links(sigma)?;
        let s_end = fl.s_end();
        if s_end == 0.0 {
            return Err(Error::invalid("flowline has no extent"));
        }
        let label = fl.label.clone();
        let mut rhs = |s: f64, j: &DVector<f64>| -> Result<DVector<f64>> {
            let piece = fl
                .pieces
                .iter()
                .find(|p| p.covers(s))
                .or_else(|| fl.pieces.last())
                .ok_or_else(|| Error::OutOfDomain(format!("parameter {s} beyond flowline")))?;
            let seg = &fl.segments[piece.seg];
            let y = piece.local_at(s);
            let w = match piece.w_start {
                Some(w0) => Some(crate::sections::LinkChart::w_for_sheet(
                    num_complex::Complex64::new(y[0], y[1]),
                    Sheet::NearW(w0),
                )?),
                None => None,
            };
            let a = self.field_jacobian(&label, seg.chart_idx, w, &y)?;
            let yv = self.variation_field(&label, seg.chart_idx, w, &y, sigma)?;
            let jl = Vector3::new(j[0], j[1], j[2]);
            // assemble in base coordinates
            let a_g = seg.rot * a * seg.rot.transpose();
            let y_g = seg.rot * yv;
            let out = a_g * jl + y_g;
            Ok(DVector::from_column_slice(out.as_slice()))
        };
        let sol = solve_ode(&mut rhs, 0.0, DVector::zeros(3), s_end, 1e-10, 1e-12)?;
        Ok(VariationCurve { sol })
    }

    /// Endpoint of the perturbed flow at deformation t, for single-chart
    /// flowlines; the finite-difference oracle for the variational response.
    pub fn perturbed_endpoint(
        &self,
        label: &LatticeClass,
        chart_idx: usize,
        start_local: &Vector3<f64>,
        sheet: Sheet,
        s_target: f64,
        sigma: &Perturbation,
        t: f64,
    ) -> Result<Vector3<f64>> {
        let pc = &self.atlas.charts[chart_idx];
        let sec = PerturbedSection {
            form: self.form,
            base: &pc.chart,
            placement: &pc.placement,
            sigma,
            t,
        };
        let mut rhs = |_s: f64, yv: &DVector<f64>| -> Result<DVector<f64>> {
            let y = Vector3::new(yv[0], yv[1], yv[2]);
            let jet = sec.eval_jet(self.form, &y, sheet)?;
            let hg = height_gradient_from_jet(self.form, &jet, label, &y)?;
            Ok(DVector::from_column_slice(hg.gradient.as_slice()))
        };
        let sol = solve_ode(
            &mut rhs,
            0.0,
            DVector::from_column_slice(start_local.as_slice()),
            s_target,
            1e-11,
            1e-13,
        )?;
        Ok(Vector3::new(sol.y_end[0], sol.y_end[1], sol.y_end[2]))
    }
}
