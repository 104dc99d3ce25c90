//! Local models at a branching strand. The height field of the vanishing
//! cycle has three flowline rays into each strand point; this module solves
//! for the perturbed flowlines that still terminate there (a fixed-point
//! iteration in a weighted norm), assembles the three local sheets they
//! sweep, probes for stray terminating flowlines, and integrates the two
//! plane models used for label transport across a cut.
//!
//! Everything here is chart-local: coordinates are (z = y1 + i y2, t) around
//! the strand {z = 0}, and branched evaluation goes through w with z = w^2.

use std::f64::consts::PI;

use nalgebra::{DVector, Matrix3, Vector3};
use num_complex::Complex64;

use crate::error::{Error, Result};
use crate::flow::dopri::{solve_ode, step_factor, OdePiece, OdeSolution, Stepper};
use crate::lattice::AmbientForm;
use crate::sections::link::LinkChart;
use crate::sections::height_gradient_from_jet;

/// Node count for the solution grid on [0, s0].
pub const SOLVE_NODES: usize = 256;
/// Largest acceptable measured contraction factor.
pub const KAPPA_LIMIT: f64 = 0.9;
const MAX_HALVINGS: usize = 10;
/// Distance-to-strand below which a probe counts as terminating.
pub const VIOLATION_TOL: f64 = 1e-6;
const GOLDEN_ANGLE: f64 = 2.399963229728653;

fn cx(re: f64, im: f64) -> Complex64 {
    Complex64::new(re, im)
}

/// Initial iterate for the fixed-point solve; both choices vanish at s = 0
/// and stay inside the weighted-norm unit ball for scale <= 1.
#[derive(Debug, Clone, Copy)]
pub enum PicardSeed {
    Zero,
    /// rho(s) = scale * s^2 in both components.
    Quadratic(f64),
}

#[derive(Debug, Clone, Copy)]
pub struct SolveOptions {
    pub s0: f64,
    pub seed: PicardSeed,
    /// Weighted-norm tolerance on the iterate increment. The s^{-2} weight
    /// amplifies rounding noise at the first node by (s0/255)^{-2}, which
    /// puts the attainable floor near 1e-12; tolerances below that stall.
    pub tol: f64,
    pub max_iters: usize,
}

impl Default for SolveOptions {
    fn default() -> Self {
        SolveOptions {
            s0: 0.05,
            seed: PicardSeed::Zero,
            tol: 5e-11,
            max_iters: 400,
        }
    }
}

/// Rotated frame of one terminating ray. The strand height is
/// Re(c(t) z^{3/2}) + ... with c = -2 b; the ray angles solve
/// 3 theta / 2 + arg c = 0 mod 2 pi, and the lift fixes the w-branch.
#[derive(Debug, Clone, Copy)]
struct RayFrame {
    /// Ray angle in z, lifted so theta/2 selects the branch.
    theta: f64,
    /// e^{i theta}; multiplying sheet 0 data by rot^k gives sheet k.
    rot: Complex64,
    w_dir: Complex64,
    /// Model curve amplitude: x0(s) = amp * s^2 along the ray.
    amp: f64,
    c_abs: f64,
}

fn ray_frame(chart: &LinkChart, t: f64, sheet: u8) -> RayFrame {
    let c = -2.0 * chart.b.eval(t);
    let beta = c.arg();
    // m = 2k mod 3 orders the rays so sheet k sits at e^{2 pi i k/3} times
    // sheet 0
    let m = (2 * u32::from(sheet)) % 3;
    let theta = -2.0 * beta / 3.0 + 4.0 * PI * f64::from(m) / 3.0;
    let c_abs = c.norm();
    RayFrame {
        theta,
        rot: Complex64::from_polar(1.0, theta),
        w_dir: Complex64::from_polar(1.0, theta / 2.0),
        amp: 9.0 / 16.0 * c_abs * c_abs,
        c_abs,
    }
}

/// Field evaluation in the rotated frame: zeta = e^{-i theta} z, so the
/// model ray is the positive real axis and the model coefficient is |c|.
struct LinkField<'a> {
    form: &'a AmbientForm,
    chart: &'a LinkChart,
    frame: RayFrame,
}

impl LinkField<'_> {
    /// Gradient field of the vanishing-cycle height at (zeta, tau), rotated
    /// back into the frame. Needs Re(zeta) > 0 so the principal square root
    /// is the tracked branch.
    fn tilde_v(&self, zeta: Complex64, tau: f64) -> Result<(Complex64, f64)> {
        let v = zeta.sqrt();
        let w = self.frame.w_dir * v;
        let z = self.frame.rot * zeta;
        let jet = self.chart.eval_w(self.form.dim(), w, tau);
        let y = Vector3::new(z.re, z.im, tau);
        let hg = height_gradient_from_jet(self.form, &jet, &self.chart.delta, &y)?;
        let vc = cx(hg.gradient[0], hg.gradient[1]) * self.frame.rot.conj();
        Ok((vc, hg.gradient[2]))
    }
}

/// Deviation h of a terminating flowline from its model ray, on one sheet at
/// one strand point. Values live in the rotated frame: the flowline is
/// zeta(s) = amp s^2 + h_c(s), tau(s) = t + h_r(s) for s in [0, s0].
#[derive(Debug, Clone)]
pub struct TerminatingSolution {
    pub sheet: u8,
    pub link_t: f64,
    pub s0: f64,
    pub theta: f64,
    pub amp: f64,
    pub s: Vec<f64>,
    pub h_c: Vec<Complex64>,
    pub h_r: Vec<f64>,
    pub hp_c: Vec<Complex64>,
    pub hp_r: Vec<f64>,
    /// Measured contraction factors per iteration.
    pub kappas: Vec<f64>,
    /// 1.0 for the plain iteration, 0.5 when the averaged update was needed.
    pub damping: f64,
    pub iterations: usize,
    pub halvings: usize,
    /// Weighted norm of rho - F(rho) at the accepted iterate.
    pub residual: f64,
    /// sup |h| / s^3 over the nodes.
    pub fitted_c_cubic: f64,
    /// sup |h'| / s^2 over the nodes.
    pub fitted_c_deriv: f64,
    /// sup of the square-root remainder constant |q| |z|^{3/2} / |h_C|^2.
    pub fitted_q: f64,
}

impl TerminatingSolution {
    pub fn kappa_max(&self) -> f64 {
        self.kappas.iter().copied().fold(0.0, f64::max)
    }

    pub fn h_sup(&self) -> f64 {
        (0..self.s.len())
            .map(|j| (self.h_c[j].norm_sqr() + self.h_r[j] * self.h_r[j]).sqrt())
            .fold(0.0, f64::max)
    }

    /// Cubic Hermite read of (h_c, h_r, h_c', h_r') at s, clamped to [0, s0].
    pub fn h_at(&self, s: f64) -> (Complex64, f64, Complex64, f64) {
        let n = self.s.len();
        let step = self.s[1] - self.s[0];
        let sq = s.clamp(0.0, self.s0);
        let j = ((sq / step) as usize).min(n - 2);
        let d = self.s[j + 1] - self.s[j];
        let u = (sq - self.s[j]) / d;
        let (h00, h10, h01, h11) = hermite_basis(u);
        let (d00, d10, d01, d11) = hermite_basis_d(u, d);
        let hc = h00 * self.h_c[j]
            + h10 * d * self.hp_c[j]
            + h01 * self.h_c[j + 1]
            + h11 * d * self.hp_c[j + 1];
        let hr = h00 * self.h_r[j]
            + h10 * d * self.hp_r[j]
            + h01 * self.h_r[j + 1]
            + h11 * d * self.hp_r[j + 1];
        let dhc = d00 * self.h_c[j]
            + d10 * d * self.hp_c[j]
            + d01 * self.h_c[j + 1]
            + d11 * d * self.hp_c[j + 1];
        let dhr = d00 * self.h_r[j]
            + d10 * d * self.hp_r[j]
            + d01 * self.h_r[j + 1]
            + d11 * d * self.hp_r[j + 1];
        (hc, hr, dhc, dhr)
    }

    /// Chart-local point (y1, y2, t) on the flowline at parameter s.
    pub fn point_local(&self, s: f64) -> Vector3<f64> {
        let (hc, hr, _, _) = self.h_at(s);
        let rot = Complex64::from_polar(1.0, self.theta);
        let z = rot * (self.amp * s * s + hc);
        Vector3::new(z.re, z.im, self.link_t + hr)
    }

    /// Velocity d/ds of the flowline at parameter s.
    pub fn velocity_local(&self, s: f64) -> Vector3<f64> {
        let (_, _, dhc, dhr) = self.h_at(s);
        let rot = Complex64::from_polar(1.0, self.theta);
        let zd = rot * (2.0 * self.amp * s + dhc);
        Vector3::new(zd.re, zd.im, dhr)
    }

    /// w-coordinate of the flowline point at parameter s, on this sheet's
    /// branch.
    pub fn w_local(&self, s: f64) -> Complex64 {
        let (hc, _, _, _) = self.h_at(s);
        let w_dir = Complex64::from_polar(1.0, self.theta / 2.0);
        w_dir * (self.amp * s * s + hc).sqrt()
    }

    /// Least-squares slope of log |h| against log s over s in
    /// [s0/30, s0/3]; None when h vanishes there to machine precision.
    pub fn exponent_fit(&self) -> Option<f64> {
        let lo = self.s0 / 30.0;
        let hi = self.s0 / 3.0;
        let mut xs = Vec::new();
        let mut ys = Vec::new();
        let floor = 1e-14 * self.amp * self.s0 * self.s0 * self.s0;
        for j in 1..self.s.len() {
            if self.s[j] < lo || self.s[j] > hi {
                continue;
            }
            let m = (self.h_c[j].norm_sqr() + self.h_r[j] * self.h_r[j]).sqrt();
            if m > floor {
                xs.push(self.s[j].ln());
                ys.push(m.ln());
            }
        }
        if xs.len() < 8 {
            return None;
        }
        let n = xs.len() as f64;
        let mx = xs.iter().sum::<f64>() / n;
        let my = ys.iter().sum::<f64>() / n;
        let mut sxx = 0.0;
        let mut sxy = 0.0;
        for k in 0..xs.len() {
            sxx += (xs[k] - mx) * (xs[k] - mx);
            sxy += (xs[k] - mx) * (ys[k] - my);
        }
        Some(sxy / sxx)
    }

    pub fn diagnostics_json(&self) -> String {
        serde_json::json!({
            "sheet": self.sheet,
            "link_t": self.link_t,
            "s0": self.s0,
            "theta": self.theta,
            "amp": self.amp,
            "damping": self.damping,
            "iterations": self.iterations,
            "halvings": self.halvings,
            "kappas": self.kappas,
            "residual": self.residual,
            "fitted_c_cubic": self.fitted_c_cubic,
            "fitted_c_deriv": self.fitted_c_deriv,
            "fitted_q": self.fitted_q,
        })
        .to_string()
    }
}

fn hermite_basis(u: f64) -> (f64, f64, f64, f64) {
    let u2 = u * u;
    let u3 = u2 * u;
    (
        2.0 * u3 - 3.0 * u2 + 1.0,
        u3 - 2.0 * u2 + u,
        -2.0 * u3 + 3.0 * u2,
        u3 - u2,
    )
}

fn hermite_basis_d(u: f64, d: f64) -> (f64, f64, f64, f64) {
    let u2 = u * u;
    (
        (6.0 * u2 - 6.0 * u) / d,
        (3.0 * u2 - 4.0 * u + 1.0) / d,
        (-6.0 * u2 + 6.0 * u) / d,
        (3.0 * u2 - 2.0 * u) / d,
    )
}

fn node_grid(s0: f64) -> Vec<f64> {
    (0..SOLVE_NODES)
        .map(|j| s0 * j as f64 / (SOLVE_NODES - 1) as f64)
        .collect()
}

/// Cumulative integral on a uniform grid: composite Simpson for even
/// indices, the half-cell three-point rule for odd ones. `first` supplies
/// the exact first-cell value where the integrand needs a limit at 0.
fn cumulative_simpson(h: f64, f: &[Complex64], first: Complex64) -> Vec<Complex64> {
    let n = f.len();
    let mut out = vec![cx(0.0, 0.0); n];
    if n > 1 {
        out[1] = first;
    }
    for j in 2..n {
        out[j] = if j % 2 == 0 {
            out[j - 2] + (h / 3.0) * (f[j - 2] + 4.0 * f[j - 1] + f[j])
        } else {
            out[j - 1] + (h / 12.0) * (-f[j - 2] + 8.0 * f[j - 1] + 5.0 * f[j])
        };
    }
    out
}

/// Inverse of L(h) = h' - s^{-1}(h_C, 0): the C component integrates
/// s^{-1} rho against sigma, the R component integrates directly. The
/// first cell uses the rho ~ s^2 asymptotic exactly.
fn apply_s(s: &[f64], rho_c: &[Complex64], rho_r: &[f64]) -> (Vec<Complex64>, Vec<f64>) {
    let n = s.len();
    let h = s[1] - s[0];
    let mut fc = vec![cx(0.0, 0.0); n];
    let mut fr = vec![cx(0.0, 0.0); n];
    for j in 1..n {
        fc[j] = rho_c[j] / s[j];
        fr[j] = cx(rho_r[j], 0.0);
    }
    let ic = cumulative_simpson(h, &fc, 0.5 * rho_c[1]);
    let ir = cumulative_simpson(h, &fr, cx(rho_r[1] * s[1] / 3.0, 0.0));
    let mut h_c = vec![cx(0.0, 0.0); n];
    let mut h_r = vec![0.0; n];
    for j in 0..n {
        h_c[j] = s[j] * ic[j];
        h_r[j] = ir[j].re;
    }
    (h_c, h_r)
}

fn weighted_norm(s: &[f64], rho_c: &[Complex64], rho_r: &[f64]) -> f64 {
    let mut m = 0.0f64;
    for j in 1..s.len() {
        let v = (rho_c[j].norm_sqr() + rho_r[j] * rho_r[j]).sqrt() / (s[j] * s[j]);
        m = m.max(v);
    }
    m
}

enum FOut {
    Rho(Vec<Complex64>, Vec<f64>),
    /// The iterate left the tube |h_C| < amp s^2 where the branch tracking
    /// is valid.
    LeftTube(usize),
}

/// One application of the fixed-point map. The model-field terms cancel
/// against the linear subtraction, leaving F = V(x0 + h) - 2 amp s - h_C/s,
/// whose fixed points solve the flowline equation exactly.
fn apply_f(
    field: &LinkField,
    t_anchor: f64,
    s: &[f64],
    h_c: &[Complex64],
    h_r: &[f64],
) -> Result<FOut> {
    let n = s.len();
    let amp = field.frame.amp;
    let mut rho_c = vec![cx(0.0, 0.0); n];
    let mut rho_r = vec![0.0; n];
    for j in 1..n {
        let sj = s[j];
        let z0 = amp * sj * sj;
        let zeta = cx(z0, 0.0) + h_c[j];
        if zeta.re <= 0.45 * z0 || h_c[j].norm() >= 0.8 * z0 {
            return Ok(FOut::LeftTube(j));
        }
        let tau = t_anchor + h_r[j];
        let (vc, vr) = field.tilde_v(zeta, tau)?;
        rho_c[j] = vc - 2.0 * amp * sj - h_c[j] / sj;
        rho_r[j] = vr;
    }
    Ok(FOut::Rho(rho_c, rho_r))
}

struct Converged {
    h_c: Vec<Complex64>,
    h_r: Vec<f64>,
    rho_c: Vec<Complex64>,
    rho_r: Vec<f64>,
    kappas: Vec<f64>,
    iterations: usize,
    residual: f64,
}

enum Attempt {
    Done(Box<Converged>),
    Stalled { kappa: f64 },
    LeftTube,
    Blown,
}

fn picard_attempt(
    field: &LinkField,
    t: f64,
    s: &[f64],
    opts: &SolveOptions,
    damping: f64,
) -> Result<Attempt> {
    let n = s.len();
    let (mut rho_c, mut rho_r) = match opts.seed {
        PicardSeed::Zero => (vec![cx(0.0, 0.0); n], vec![0.0; n]),
        PicardSeed::Quadratic(scale) => (
            s.iter().map(|&sj| cx(scale * sj * sj, 0.0)).collect(),
            s.iter().map(|&sj| scale * sj * sj).collect(),
        ),
    };
    let (mut h_c, mut h_r) = apply_s(s, &rho_c, &rho_r);
    let mut kappas = Vec::new();
    let mut prev_delta: Option<f64> = None;
    for iter in 1..=opts.max_iters {
        let (f_c, f_r) = match apply_f(field, t, s, &h_c, &h_r)? {
            FOut::Rho(a, b) => (a, b),
            FOut::LeftTube(_) => return Ok(Attempt::LeftTube),
        };
        let mut new_c = vec![cx(0.0, 0.0); n];
        let mut new_r = vec![0.0; n];
        let mut diff_c = vec![cx(0.0, 0.0); n];
        let mut diff_r = vec![0.0; n];
        for j in 0..n {
            new_c[j] = (1.0 - damping) * rho_c[j] + damping * f_c[j];
            new_r[j] = (1.0 - damping) * rho_r[j] + damping * f_r[j];
            diff_c[j] = new_c[j] - rho_c[j];
            diff_r[j] = new_r[j] - rho_r[j];
        }
        let delta = weighted_norm(s, &diff_c, &diff_r);
        let rho_norm = weighted_norm(s, &new_c, &new_r);
        if !delta.is_finite() || !rho_norm.is_finite() || rho_norm > 1e9 {
            return Ok(Attempt::Blown);
        }
        let stop_at = opts.tol * rho_norm.max(1.0);
        if let Some(p) = prev_delta {
            if p > 50.0 * stop_at && delta > 0.0 {
                kappas.push(delta / p);
            }
        }
        prev_delta = Some(delta);
        rho_c = new_c;
        rho_r = new_r;
        let hs = apply_s(s, &rho_c, &rho_r);
        h_c = hs.0;
        h_r = hs.1;
        if delta <= stop_at {
            let residual = match apply_f(field, t, s, &h_c, &h_r)? {
                FOut::Rho(fc, fr) => {
                    let dc: Vec<Complex64> =
                        (0..n).map(|j| rho_c[j] - fc[j]).collect();
                    let dr: Vec<f64> = (0..n).map(|j| rho_r[j] - fr[j]).collect();
                    weighted_norm(s, &dc, &dr)
                }
                FOut::LeftTube(_) => return Ok(Attempt::LeftTube),
            };
            return Ok(Attempt::Done(Box::new(Converged {
                h_c,
                h_r,
                rho_c,
                rho_r,
                kappas,
                iterations: iter,
                residual,
            })));
        }
        let k = kappas.len();
        if k >= 8 && kappas[k - 3..].iter().all(|&q| q > 0.97) {
            let kappa = kappas[k - 3..].iter().copied().fold(0.0, f64::max);
            return Ok(Attempt::Stalled { kappa });
        }
    }
    Ok(Attempt::Stalled {
        kappa: *kappas.last().unwrap_or(&1.0),
    })
}

/// Solves for the flowline terminating on the strand at parameter t along
/// the given sheet's ray, as a deviation from the model curve amp s^2. The
/// fixed point rho = F(rho) is iterated in the weighted norm
/// sup s^{-2} |rho(s)|; s0 is halved until the measured contraction factor
/// drops below 0.9. Family tables on the chart are not consulted; resolve
/// them first.
pub fn solve_terminating(
    form: &AmbientForm,
    chart: &LinkChart,
    t: f64,
    sheet: u8,
    opts: &SolveOptions,
) -> Result<TerminatingSolution> {
    if sheet >= 3 {
        return Err(Error::invalid(format!("sheet index {sheet} out of range 0..3")));
    }
    if !(t >= chart.t_range.0 && t <= chart.t_range.1) {
        return Err(Error::OutOfDomain(format!(
            "strand parameter {t} outside chart {} range [{}, {}]",
            chart.id, chart.t_range.0, chart.t_range.1
        )));
    }
    if !(opts.s0 > 0.0 && opts.s0.is_finite()) {
        return Err(Error::invalid(format!("s0 must be positive, got {}", opts.s0)));
    }
    let frame = ray_frame(chart, t, sheet);
    if frame.c_abs < 2e-6 {
        return Err(Error::invalid(format!(
            "chart {}: height coefficient {:.3e} too close to zero at t = {t}",
            chart.id, frame.c_abs
        )));
    }
    if frame.amp * opts.s0 * opts.s0 > 0.6 * chart.r_max {
        return Err(Error::invalid(format!(
            "s0 = {} puts the model ray at radius {:.3e}, past chart {} (r_max {})",
            opts.s0,
            frame.amp * opts.s0 * opts.s0,
            chart.id,
            chart.r_max
        )));
    }
    let field = LinkField { form, chart, frame };
    let mut s0 = opts.s0;
    let mut last_kappa = f64::NAN;
    for halving in 0..=MAX_HALVINGS {
        let s = node_grid(s0);
        for &damping in &[1.0, 0.5] {
            match picard_attempt(&field, t, &s, opts, damping)? {
                Attempt::Done(data) => {
                    let kmax = data.kappas.iter().copied().fold(0.0, f64::max);
                    if kmax < KAPPA_LIMIT {
                        return Ok(assemble(&field, t, sheet, s0, &s, *data, damping, halving));
                    }
                    last_kappa = kmax;
                }
                Attempt::Stalled { kappa } => last_kappa = kappa,
                Attempt::LeftTube | Attempt::Blown => last_kappa = f64::INFINITY,
            }
        }
        s0 *= 0.5;
    }
    Err(Error::NoConvergence {
        what: "terminating flowline solver",
        detail: format!(
            "contraction factor {last_kappa:.4} on chart {} at t = {t} after {MAX_HALVINGS} halvings",
            chart.id
        ),
    })
}

#[allow(clippy::too_many_arguments)]
fn assemble(
    field: &LinkField,
    t: f64,
    sheet: u8,
    s0: f64,
    s: &[f64],
    data: Converged,
    damping: f64,
    halvings: usize,
) -> TerminatingSolution {
    let n = s.len();
    let amp = field.frame.amp;
    let mut hp_c = vec![cx(0.0, 0.0); n];
    let mut hp_r = vec![0.0; n];
    for j in 1..n {
        hp_c[j] = data.rho_c[j] + data.h_c[j] / s[j];
        hp_r[j] = data.rho_r[j];
    }
    let mut c_cubic = 0.0f64;
    let mut c_deriv = 0.0f64;
    let mut c_q = 0.0f64;
    for j in 1..n {
        let sj = s[j];
        let hm = (data.h_c[j].norm_sqr() + data.h_r[j] * data.h_r[j]).sqrt();
        let hpm = (hp_c[j].norm_sqr() + hp_r[j] * hp_r[j]).sqrt();
        c_cubic = c_cubic.max(hm / (sj * sj * sj));
        c_deriv = c_deriv.max(hpm / (sj * sj));
        let z0 = amp * sj * sj;
        let zeta = cx(z0, 0.0) + data.h_c[j];
        let hc_norm = data.h_c[j].norm();
        if zeta.re > 0.0 && hc_norm > 1e-13 * z0.max(1e-300) {
            let q = 1.5 * field.frame.c_abs * zeta.sqrt().conj() - 2.0 * amp * sj
                - data.h_c[j] / sj;
            c_q = c_q.max(q.norm() * z0.powf(1.5) / (hc_norm * hc_norm));
        }
    }
    TerminatingSolution {
        sheet,
        link_t: t,
        s0,
        theta: field.frame.theta,
        amp,
        s: s.to_vec(),
        h_c: data.h_c,
        h_r: data.h_r,
        hp_c,
        hp_r,
        kappas: data.kappas,
        damping,
        iterations: data.iterations,
        halvings,
        residual: data.residual,
        fitted_c_cubic: c_cubic,
        fitted_c_deriv: c_deriv,
        fitted_q: c_q,
    }
}

/// Independent check of a solved flowline: a three-unknown Newton shoot in
/// the square-root coordinate v (zeta = v^2), integrated backward from s0
/// and matched to the model ray near s = 0, then compared against the
/// fixed-point curve on [s0/2, s0]. Returns the largest deviation.
pub fn shooting_deviation(
    form: &AmbientForm,
    chart: &LinkChart,
    sol: &TerminatingSolution,
) -> Result<f64> {
    let frame = RayFrame {
        theta: sol.theta,
        rot: Complex64::from_polar(1.0, sol.theta),
        w_dir: Complex64::from_polar(1.0, sol.theta / 2.0),
        amp: sol.amp,
        c_abs: 4.0 / 3.0 * sol.amp.sqrt(),
    };
    let field = LinkField { form, chart, frame };
    let s0 = sol.s0;
    let sa = s0 / 64.0;
    let v_scale = sol.amp.sqrt() * s0;
    let mut rhs = |_s: f64, y: &DVector<f64>| -> Result<DVector<f64>> {
        let v = cx(y[0], y[1]);
        let zeta = v * v;
        let (vc, vr) = field.tilde_v(zeta, y[2])?;
        let vd = vc / (2.0 * v);
        Ok(DVector::from_vec(vec![vd.re, vd.im, vr]))
    };
    let shoot = |rhs: &mut dyn FnMut(f64, &DVector<f64>) -> Result<DVector<f64>>,
                 d: &Vector3<f64>|
     -> Result<(Vector3<f64>, OdeSolution)> {
        let y0 = DVector::from_vec(vec![v_scale + d[0], d[1], sol.link_t + d[2]]);
        let run = solve_ode(rhs, s0, y0, sa, 1e-12, 1e-14)?;
        let v = cx(run.y_end[0], run.y_end[1]);
        let zeta = v * v;
        let g = Vector3::new(
            zeta.re - sol.amp * sa * sa,
            zeta.im,
            run.y_end[2] - sol.link_t,
        );
        Ok((g, run))
    };
    // match residual scales: the first two components are zeta-sized, the
    // third is the strand parameter
    let zs = sol.amp * s0 * s0;
    let g_rel = |g: &Vector3<f64>| {
        (g[0].abs() / zs)
            .max(g[1].abs() / zs)
            .max(g[2].abs() / (1.0 + sol.link_t.abs()))
    };
    let mut d = Vector3::zeros();
    let fd = 1e-7 * v_scale;
    for _ in 0..12 {
        let (g, _) = shoot(&mut rhs, &d)?;
        if g_rel(&g) <= 1e-12 {
            break;
        }
        let mut jac = Matrix3::zeros();
        for c in 0..3 {
            let mut dp = d;
            dp[c] += fd;
            let (gp, _) = shoot(&mut rhs, &dp)?;
            for r in 0..3 {
                jac[(r, c)] = (gp[r] - g[r]) / fd;
            }
        }
        let step = jac.lu().solve(&g).ok_or(Error::Degenerate {
            what: "shooting comparison",
            detail: "singular match Jacobian".into(),
        })?;
        d -= step;
    }
    let (g, run) = shoot(&mut rhs, &d)?;
    if g_rel(&g) > 1e-10 {
        return Err(Error::NoConvergence {
            what: "shooting comparison",
            detail: format!("relative match residual {:.3e}", g_rel(&g)),
        });
    }
    let mut dev = 0.0f64;
    for k in 0..=32 {
        let sq = s0 / 2.0 + s0 / 2.0 * k as f64 / 32.0;
        let y = run.at(sq);
        let v = cx(y[0], y[1]);
        let zeta_o = v * v;
        let tau_o = y[2];
        let (hc, hr, _, _) = sol.h_at(sq);
        let zeta_p = cx(sol.amp * sq * sq, 0.0) + hc;
        let tau_p = sol.link_t + hr;
        dev = dev.max((zeta_o - zeta_p).norm()).max((tau_o - tau_p).abs());
    }
    Ok(dev)
}

/// One local sheet swept by the terminating flowlines over a strand
/// interval.
#[derive(Debug, Clone)]
pub struct TerminatingSheet {
    pub sheet: u8,
    pub t_nodes: Vec<f64>,
    pub solutions: Vec<TerminatingSolution>,
    /// Largest remaining one-sided difference-quotient error at the strand.
    pub c1_defect: f64,
}

impl TerminatingSheet {
    /// Boundary trace on the strand, one point per t node.
    pub fn boundary(&self) -> Vec<Vector3<f64>> {
        self.solutions.iter().map(|s| s.point_local(0.0)).collect()
    }

    /// Rows (x, t, y1, y2, y3) with x the model radial coordinate amp s^2.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("x,t,y1,y2,y3\n");
        for sol in &self.solutions {
            let rot = Complex64::from_polar(1.0, sol.theta);
            for j in 0..sol.s.len() {
                let sj = sol.s[j];
                let x = sol.amp * sj * sj;
                let z = rot * (cx(x, 0.0) + sol.h_c[j]);
                let tau = sol.link_t + sol.h_r[j];
                out.push_str(&format!("{},{},{},{},{}\n", x, sol.link_t, z.re, z.im, tau));
            }
        }
        out
    }
}

/// Assembles one sheet over [t_lo, t_hi] with n_t strand samples and checks
/// that the parametrization is C^1 up to the strand: one-sided difference
/// quotients toward x = 0 must converge to the ray direction.
pub fn build_terminating_sheet(
    form: &AmbientForm,
    chart: &LinkChart,
    sheet: u8,
    t_range: (f64, f64),
    n_t: usize,
    opts: &SolveOptions,
) -> Result<TerminatingSheet> {
    if n_t < 2 {
        return Err(Error::invalid("sheet assembly needs at least 2 strand samples"));
    }
    if !(t_range.0 < t_range.1) {
        return Err(Error::invalid(format!(
            "empty strand interval [{}, {}]",
            t_range.0, t_range.1
        )));
    }
    let mut t_nodes = Vec::with_capacity(n_t);
    let mut solutions = Vec::with_capacity(n_t);
    let mut defect = 0.0f64;
    for i in 0..n_t {
        let t = t_range.0 + (t_range.1 - t_range.0) * i as f64 / (n_t - 1) as f64;
        let sol = solve_terminating(form, chart, t, sheet, opts)?;
        let b = sol.point_local(0.0);
        if (b - Vector3::new(0.0, 0.0, t)).norm() > 1e-9 {
            return Err(Error::Degenerate {
                what: "sheet boundary",
                detail: format!("boundary point off the strand at t = {t}"),
            });
        }
        let rot = Complex64::from_polar(1.0, sol.theta);
        let lim = Vector3::new(rot.re, rot.im, 0.0);
        let quot_err = |sq: f64| -> f64 {
            let x = sol.amp * sq * sq;
            let p = sol.point_local(sq);
            let q = Vector3::new(p[0] / x, p[1] / x, (p[2] - t) / x);
            (q - lim).norm()
        };
        let e1 = quot_err(sol.s0);
        let e2 = quot_err(sol.s0 / 2.0);
        let e4 = quot_err(sol.s0 / 4.0);
        if !(e2 <= 0.75 * e1 + 1e-12 && e4 <= 0.75 * e2 + 1e-12) {
            return Err(Error::Degenerate {
                what: "sheet regularity",
                detail: format!(
                    "one-sided quotients not converging at t = {t}: {e1:.3e}, {e2:.3e}, {e4:.3e}"
                ),
            });
        }
        defect = defect.max(e4);
        t_nodes.push(t);
        solutions.push(sol);
    }
    Ok(TerminatingSheet {
        sheet,
        t_nodes,
        solutions,
        c1_defect: defect,
    })
}

enum DriveStop {
    SpanEnd,
    Predicate,
    StepFloor,
    StepBudget,
}

struct DriveOutcome {
    pieces: Vec<OdePiece>,
    #[allow(dead_code)]
    reason: DriveStop,
}

/// Adaptive drive that stops when the predicate fires on any dense sample.
/// Right-hand-side failures shrink the step; underflow ends the drive
/// instead of erroring, since probes legitimately run into walls.
fn drive_with_stop(
    rhs: &mut dyn FnMut(f64, &DVector<f64>) -> Result<DVector<f64>>,
    s_from: f64,
    y0: DVector<f64>,
    s_to: f64,
    rtol: f64,
    atol: f64,
    max_steps: usize,
    stop: &mut dyn FnMut(f64, &DVector<f64>) -> bool,
) -> DriveOutcome {
    let stepper = Stepper::new(rtol, atol);
    let dir = (s_to - s_from).signum();
    let span = (s_to - s_from).abs();
    let mut s = s_from;
    let mut y = y0;
    let mut k1 = match rhs(s, &y) {
        Ok(k) => k,
        Err(_) => {
            return DriveOutcome {
                pieces: Vec::new(),
                reason: DriveStop::StepFloor,
            }
        }
    };
    let mut h = dir * 1e-3 * span;
    let floor = 1e-14 * span.max(1.0);
    let mut pieces = Vec::new();
    let mut steps = 0usize;
    loop {
        if (s_to - s) * dir <= 0.0 {
            return DriveOutcome {
                pieces,
                reason: DriveStop::SpanEnd,
            };
        }
        if (s_to - s).abs() < h.abs() {
            h = s_to - s;
        }
        if h.abs() < floor {
            return DriveOutcome {
                pieces,
                reason: DriveStop::StepFloor,
            };
        }
        steps += 1;
        if steps > max_steps {
            return DriveOutcome {
                pieces,
                reason: DriveStop::StepBudget,
            };
        }
        match stepper.try_step(rhs, s, &y, &k1, h) {
            Ok(out) if out.err <= 1.0 => {
                let piece = stepper.dense(s, h, &y, &out);
                let mut hit = false;
                for k in 1..=8 {
                    let sk = s + h * k as f64 / 8.0;
                    let yk = piece.at(sk);
                    if stop(sk, &yk) {
                        hit = true;
                        break;
                    }
                }
                pieces.push(piece);
                s += h;
                y = out.y1;
                k1 = out.k[6].clone();
                h *= step_factor(out.err);
                if hit {
                    return DriveOutcome {
                        pieces,
                        reason: DriveStop::Predicate,
                    };
                }
            }
            Ok(out) => {
                h *= step_factor(out.err).min(1.0);
            }
            Err(_) => {
                h *= 0.5;
            }
        }
    }
}

/// Minimum of |w| over the drive, refined by ternary search inside the best
/// piece and its neighbors. The dense polynomials make the refinement
/// meaningful well below the sample spacing.
fn min_abs_w(pieces: &[OdePiece]) -> f64 {
    if pieces.is_empty() {
        return f64::INFINITY;
    }
    let mut best = f64::INFINITY;
    let mut best_idx = 0usize;
    for (i, p) in pieces.iter().enumerate() {
        for k in 0..=8 {
            let sk = p.s0 + (p.s1 - p.s0) * k as f64 / 8.0;
            let yk = p.at(sk);
            let m = yk[0] * yk[0] + yk[1] * yk[1];
            if m < best {
                best = m;
                best_idx = i;
            }
        }
    }
    let lo_i = best_idx.saturating_sub(1);
    let hi_i = (best_idx + 1).min(pieces.len() - 1);
    for p in &pieces[lo_i..=hi_i] {
        let (mut a, mut b) = (p.s0.min(p.s1), p.s0.max(p.s1));
        let f = |sq: f64| {
            let yk = p.at(sq);
            yk[0] * yk[0] + yk[1] * yk[1]
        };
        for _ in 0..60 {
            let m1 = a + (b - a) / 3.0;
            let m2 = b - (b - a) / 3.0;
            if f(m1) <= f(m2) {
                b = m2;
            } else {
                a = m1;
            }
        }
        best = best.min(f(0.5 * (a + b)));
    }
    best.sqrt()
}

#[derive(Debug, Clone, Copy)]
pub struct LinkFlowProbe {
    /// Smallest |z| reached over both flow directions.
    pub min_link_distance: f64,
    pub reached_link: bool,
    /// Left the chart neighborhood through the radial or strand boundary.
    pub escaped: bool,
}

/// Integrates the vanishing-cycle flow through (w0, t0) in both directions
/// and reports how close it comes to the strand. The w-plane doubles the
/// cut z-plane, so one probe covers both branches.
pub fn probe_link_flow(
    form: &AmbientForm,
    chart: &LinkChart,
    w0: Complex64,
    t0: f64,
) -> Result<LinkFlowProbe> {
    let dim = form.dim();
    let mut c_floor = f64::INFINITY;
    for i in 0..9 {
        let t = chart.t_range.0 + (chart.t_range.1 - chart.t_range.0) * i as f64 / 8.0;
        c_floor = c_floor.min(2.0 * chart.b.eval(t).norm());
    }
    let span = 8.0 * chart.r_max.sqrt() / (0.75 * c_floor.max(2e-6));
    let mut rhs = |_s: f64, y: &DVector<f64>| -> Result<DVector<f64>> {
        let w = cx(y[0], y[1]);
        if w.norm_sqr() < 1e-24 {
            return Err(Error::Degenerate {
                what: "strand flow",
                detail: "at the strand".into(),
            });
        }
        let jet = chart.eval_w(dim, w, y[2]);
        let z = w * w;
        let hg = height_gradient_from_jet(
            form,
            &jet,
            &chart.delta,
            &Vector3::new(z.re, z.im, y[2]),
        )?;
        let vw = cx(hg.gradient[0], hg.gradient[1]) / (2.0 * w);
        Ok(DVector::from_vec(vec![vw.re, vw.im, hg.gradient[2]]))
    };
    let r_stop = 1.05 * chart.r_max;
    let (t_lo, t_hi) = chart.t_range;
    let mut escaped = false;
    let mut min_d = f64::INFINITY;
    for dir in [1.0, -1.0] {
        let mut hit_wall = false;
        let mut stop = |_s: f64, y: &DVector<f64>| {
            let r2 = y[0] * y[0] + y[1] * y[1];
            if r2 > r_stop || y[2] < t_lo || y[2] > t_hi {
                hit_wall = true;
                true
            } else {
                false
            }
        };
        let out = drive_with_stop(
            &mut rhs,
            0.0,
            DVector::from_vec(vec![w0.re, w0.im, t0]),
            dir * span,
            1e-10,
            1e-12,
            4000,
            &mut stop,
        );
        min_d = min_d.min(min_abs_w(&out.pieces));
        escaped = escaped || hit_wall;
    }
    let min_z = (min_d * min_d).min(w0.norm_sqr());
    Ok(LinkFlowProbe {
        min_link_distance: min_z,
        reached_link: min_z < 1e-12,
        escaped,
    })
}

#[derive(Debug, Clone, Copy)]
pub struct OnlySample {
    pub w_start: Complex64,
    pub t_start: f64,
    pub min_link_distance: f64,
    pub reached_link: bool,
}

#[derive(Debug, Clone)]
pub struct OnlyTerminatingReport {
    pub samples: Vec<OnlySample>,
    pub min_distance: f64,
    /// Starts that came within the violation tolerance of the strand.
    pub violations: usize,
}

/// Falsification sweep for stray terminating flowlines: low-discrepancy
/// starts away from the three sheet directions, flowed both ways. A start
/// that reaches the strand anyway is a violation.
pub fn only_terminating_check(
    form: &AmbientForm,
    chart: &LinkChart,
    budget: usize,
) -> Result<OnlyTerminatingReport> {
    let mut samples = Vec::with_capacity(budget);
    let mut min_distance = f64::INFINITY;
    let mut violations = 0usize;
    let radii = [0.25, 0.45, 0.7];
    let t_fracs = [0.5, 0.3, 0.7, 0.45];
    for i in 0..budget {
        let t = chart.t_range.0
            + (chart.t_range.1 - chart.t_range.0) * t_fracs[i % t_fracs.len()];
        let frame = ray_frame(chart, t, 0);
        let base = frame.theta / 2.0;
        let mut ang = (0.37 + i as f64 * GOLDEN_ANGLE) % (2.0 * PI);
        // keep a margin from the six terminating w-directions, spaced pi/3
        for _ in 0..64 {
            let rel = (ang - base).rem_euclid(PI / 3.0);
            if rel.min(PI / 3.0 - rel) >= 0.12 {
                break;
            }
            ang += 0.07;
        }
        let r_z = radii[i % radii.len()] * chart.r_max;
        let w0 = Complex64::from_polar(r_z.sqrt(), ang);
        let probe = probe_link_flow(form, chart, w0, t)?;
        min_distance = min_distance.min(probe.min_link_distance);
        if probe.min_link_distance < VIOLATION_TOL {
            violations += 1;
        }
        samples.push(OnlySample {
            w_start: w0,
            t_start: t,
            min_link_distance: probe.min_link_distance,
            reached_link: probe.reached_link,
        });
    }
    Ok(OnlyTerminatingReport {
        samples,
        min_distance,
        violations,
    })
}

/// The two plane models for flow past a cut: the plain branched height and
/// its shifted variant whose level curves can meet the cut.
#[derive(Debug, Clone, Copy)]
pub enum CutPlaneModel {
    /// Level curves Im z^{3/2} = epsilon; the smoothed corner flowline.
    Pure { epsilon: f64 },
    /// Level curves Im(z^{3/2} + i z) = level on the plane cut along the
    /// positive real axis.
    Shifted { level: f64 },
}

/// Integer combination (alpha, delta) labelling one curve of a cut
/// configuration.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CutLabel {
    pub alpha: i64,
    pub delta: i64,
}

#[derive(Debug, Clone)]
pub struct CutCurve {
    pub label: CutLabel,
    pub points: Vec<Complex64>,
}

#[derive(Debug, Clone)]
pub struct CutPlaneResult {
    /// The full sampled curve, ordered end to end.
    pub curve: Vec<Complex64>,
    /// Where the curve meets the cut on the positive real axis.
    pub cut_point: Option<f64>,
    /// For a cut meeting: the three outgoing curves with labels
    /// (-alpha, alpha + delta, -delta), summing to zero.
    pub config: Option<[CutCurve; 3]>,
    /// min over the positive real axis of |Im g(x) - level|.
    pub axis_level_gap: f64,
    /// Geometric distance from the curve to the positive real axis.
    pub axis_margin: f64,
    /// max |Im g - level| along the sampled curve.
    pub level_residual: f64,
}

fn dist_to_positive_axis(z: Complex64) -> f64 {
    if z.re >= 0.0 {
        z.im.abs()
    } else {
        z.norm()
    }
}

fn sample_pieces(pieces: &[OdePiece], n: usize) -> Vec<DVector<f64>> {
    if pieces.is_empty() || n == 0 {
        return Vec::new();
    }
    let s_a = pieces[0].s0;
    let s_b = pieces[pieces.len() - 1].s1;
    let mut out = Vec::with_capacity(n);
    let mut idx = 0usize;
    for k in 0..n {
        let s = s_a + (s_b - s_a) * k as f64 / (n - 1).max(1) as f64;
        while idx + 1 < pieces.len() && !pieces[idx].contains(s) {
            idx += 1;
        }
        out.push(pieces[idx].at(s));
    }
    out
}

/// Samples the model curve. Integration runs in the height parameter
/// sigma = Re g along the level set, which traces the same point set as the
/// gradient flow with unit speed in the height.
pub fn cut_plane_flow(model: CutPlaneModel, samples: usize) -> Result<CutPlaneResult> {
    if samples < 16 {
        return Err(Error::invalid("cut-plane sampling needs at least 16 points"));
    }
    match model {
        CutPlaneModel::Pure { epsilon } => cut_plane_pure(epsilon, samples),
        CutPlaneModel::Shifted { level } => cut_plane_shifted(level, samples),
    }
}

fn cut_plane_pure(eps: f64, samples: usize) -> Result<CutPlaneResult> {
    if !(eps > 0.0 && eps.is_finite()) {
        return Err(Error::invalid(format!("offset must be positive, got {eps}")));
    }
    let z0 = cx(-1.0, eps).powf(2.0 / 3.0);
    let mut rhs = |_s: f64, y: &DVector<f64>| -> Result<DVector<f64>> {
        let z = cx(y[0], y[1]);
        let d = 1.0 / (1.5 * z.sqrt());
        Ok(DVector::from_vec(vec![d.re, d.im]))
    };
    let run = solve_ode(
        &mut rhs,
        -1.0,
        DVector::from_vec(vec![z0.re, z0.im]),
        1.0,
        1e-12,
        1e-14,
    )?;
    let mut curve = Vec::with_capacity(samples);
    let mut level_residual = 0.0f64;
    let mut axis_margin = f64::INFINITY;
    for k in 0..samples {
        let sig = -1.0 + 2.0 * k as f64 / (samples - 1) as f64;
        let y = run.at(sig);
        let z = cx(y[0], y[1]);
        level_residual = level_residual.max((z.powf(1.5).im - eps).abs());
        axis_margin = axis_margin.min(dist_to_positive_axis(z));
        curve.push(z);
    }
    Ok(CutPlaneResult {
        curve,
        cut_point: None,
        config: None,
        axis_level_gap: eps,
        axis_margin,
        level_residual,
    })
}

const CUT_W_MAX: f64 = 1.6;
const CUT_SPAN: f64 = 9.0;

/// g(w) = w^3 + i w^2 doubles the shifted height; the upper half w-plane is
/// the cut z-plane and the two cut lips are the real w-half-axes.
fn shifted_g(w: Complex64) -> Complex64 {
    w * w * w + cx(0.0, 1.0) * w * w
}

fn shifted_branch(
    w_start: Complex64,
    sig_to: f64,
    samples: usize,
) -> (Vec<Complex64>, f64) {
    let mut rhs = |_s: f64, y: &DVector<f64>| -> Result<DVector<f64>> {
        let w = cx(y[0], y[1]);
        let gp = 3.0 * w * w + cx(0.0, 2.0) * w;
        if gp.norm_sqr() < 1e-20 {
            return Err(Error::Degenerate {
                what: "cut-plane flow",
                detail: "critical point".into(),
            });
        }
        let d = 1.0 / gp;
        Ok(DVector::from_vec(vec![d.re, d.im]))
    };
    let sig0 = shifted_g(w_start).re;
    let mut stop = |_s: f64, y: &DVector<f64>| y[0] * y[0] + y[1] * y[1] > CUT_W_MAX * CUT_W_MAX;
    let out = drive_with_stop(
        &mut rhs,
        sig0,
        DVector::from_vec(vec![w_start.re, w_start.im]),
        sig_to,
        1e-12,
        1e-14,
        4000,
        &mut stop,
    );
    let level = shifted_g(w_start).im;
    let mut ws = Vec::with_capacity(samples);
    let mut resid = 0.0f64;
    for y in sample_pieces(&out.pieces, samples) {
        let w = cx(y[0], y[1]);
        resid = resid.max((shifted_g(w).im - level).abs());
        ws.push(w);
    }
    if ws.is_empty() {
        ws.push(w_start);
    }
    (ws, resid)
}

/// Im g on either cut lip is x itself, so the level is met on the axis at
/// x = level exactly when that is nonnegative.
fn axis_level_gap(level: f64) -> f64 {
    if level >= 0.0 {
        0.0
    } else {
        -level
    }
}

fn cut_plane_shifted(level: f64, samples: usize) -> Result<CutPlaneResult> {
    if !(level.is_finite() && level.abs() > 1e-12) {
        return Err(Error::invalid(format!(
            "shifted model needs a level away from zero, got {level}"
        )));
    }
    let per_branch = (samples / 2).max(8);
    if level > 0.0 {
        // the level set reaches both cut lips at z = level: w = +-sqrt(level)
        let wa = cx(level.sqrt(), 0.0);
        let wb = cx(-level.sqrt(), 0.0);
        let (branch_a, ra) = shifted_branch(wa, shifted_g(wa).re - CUT_SPAN, per_branch);
        let (branch_b, rb) = shifted_branch(wb, shifted_g(wb).re + CUT_SPAN, per_branch);
        let za: Vec<Complex64> = branch_a.iter().map(|w| w * w).collect();
        let zb: Vec<Complex64> = branch_b.iter().map(|w| w * w).collect();
        let mut curve: Vec<Complex64> = za.iter().rev().copied().collect();
        curve.extend(zb.iter().copied());
        let mut axis_margin = f64::INFINITY;
        for z in &curve {
            axis_margin = axis_margin.min(dist_to_positive_axis(*z));
        }
        let axis: Vec<Complex64> = (0..per_branch)
            .map(|k| cx(level * k as f64 / (per_branch - 1) as f64, 0.0))
            .collect();
        let config = [
            CutCurve {
                label: CutLabel { alpha: -1, delta: 0 },
                points: za,
            },
            CutCurve {
                label: CutLabel { alpha: 1, delta: 1 },
                points: zb,
            },
            CutCurve {
                label: CutLabel { alpha: 0, delta: -1 },
                points: axis,
            },
        ];
        Ok(CutPlaneResult {
            curve,
            cut_point: Some(level),
            config: Some(config),
            axis_level_gap: axis_level_gap(level),
            axis_margin,
            level_residual: ra.max(rb),
        })
    } else {
        // seed on the negative z-axis: w = i r with r^3 + r^2 = -level
        let target = -level;
        let mut r = target.cbrt().max(target);
        for _ in 0..60 {
            let f = r * r * r + r * r - target;
            let df = 3.0 * r * r + 2.0 * r;
            let step = f / df;
            r -= step;
            if step.abs() < 1e-15 * r.max(1.0) {
                break;
            }
        }
        let w0 = cx(0.0, r);
        let (down, rd) = shifted_branch(w0, shifted_g(w0).re - CUT_SPAN, per_branch);
        let (up, ru) = shifted_branch(w0, shifted_g(w0).re + CUT_SPAN, per_branch);
        let mut curve: Vec<Complex64> = down.iter().rev().map(|w| w * w).collect();
        curve.extend(up.iter().map(|w| w * w));
        let mut axis_margin = f64::INFINITY;
        for z in &curve {
            axis_margin = axis_margin.min(dist_to_positive_axis(*z));
        }
        Ok(CutPlaneResult {
            curve,
            cut_point: None,
            config: None,
            axis_level_gap: axis_level_gap(level),
            axis_margin,
            level_residual: rd.max(ru),
        })
    }
}

fn point_segment_distance(p: Complex64, a: Complex64, b: Complex64) -> f64 {
    let ab = b - a;
    let len2 = ab.norm_sqr();
    if len2 == 0.0 {
        return (p - a).norm();
    }
    let t = ((p - a).re * ab.re + (p - a).im * ab.im) / len2;
    let t = t.clamp(0.0, 1.0);
    (p - (a + ab * t)).norm()
}

fn directed_hausdorff(a: &[Complex64], b: &[Complex64]) -> f64 {
    let mut worst = 0.0f64;
    for &p in a {
        let mut best = f64::INFINITY;
        if b.len() == 1 {
            best = (p - b[0]).norm();
        } else {
            for k in 0..b.len() - 1 {
                best = best.min(point_segment_distance(p, b[k], b[k + 1]));
                if best == 0.0 {
                    break;
                }
            }
        }
        worst = worst.max(best);
    }
    worst
}

/// Symmetric Hausdorff distance between two polylines, with vertices of one
/// measured against segments of the other.
pub fn polyline_hausdorff(a: &[Complex64], b: &[Complex64]) -> f64 {
    directed_hausdorff(a, b).max(directed_hausdorff(b, a))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sections::link::{ComplexPoly, EtaTerm};
    use crate::sections::PolyTerm;

    fn form_3_1() -> AmbientForm {
        AmbientForm::new(vec![
            vec![1, 0, 0, 0],
            vec![0, 1, 0, 0],
            vec![0, 0, 1, 0],
            vec![0, 0, 0, -2],
        ])
        .unwrap()
    }

    fn form_3_2() -> AmbientForm {
        AmbientForm::new(vec![
            vec![1, 0, 0, 0, 0],
            vec![0, 1, 0, 0, 0],
            vec![0, 0, 1, 0, 0],
            vec![0, 0, 0, -2, 0],
            vec![0, 0, 0, 0, -2],
        ])
        .unwrap()
    }

    fn e(dim: usize, i: usize) -> DVector<f64> {
        let mut v = DVector::zeros(dim);
        v[i] = 1.0;
        v
    }

    /// b = -2/3 makes the vanishing-cycle height Re((4/3) z^{3/2}). The
    /// radius keeps the graph metric positive out past the probe stop.
    fn model_chart(form: &AmbientForm) -> LinkChart {
        let chart = LinkChart {
            id: "strand".into(),
            t_range: (-1.0, 1.0),
            r_max: 0.4,
            base_point: DVector::zeros(form.dim()),
            axes: [e(form.dim(), 0), e(form.dim(), 1), e(form.dim(), 2)],
            family_axes: None,
            delta: form
                .class(match form.dim() {
                    4 => vec![0, 0, 0, 1],
                    _ => vec![0, 0, 0, 1, 0],
                })
                .unwrap(),
            b: ComplexPoly::constant(cx(-2.0 / 3.0, 0.0)),
            family_b: None,
            eta: vec![],
            big_f: vec![],
        };
        chart.validate(form, 1).unwrap();
        chart
    }

    /// Quintic branched term plus a quadratic single-valued term; the height
    /// perturbation is 0.1 Re(w^5) at t = 0.
    fn perturbed_chart(form: &AmbientForm) -> LinkChart {
        let mut chart = model_chart(form);
        chart.b = ComplexPoly {
            coeffs: vec![cx(-2.0 / 3.0, 0.0), cx(0.05, 0.0)],
        };
        chart.eta.push(EtaTerm {
            coeff: cx(-0.05, 0.0),
            w_pow: 5,
            wbar_pow: 0,
            t_pow: 0,
            window: None,
        });
        chart.big_f.push(PolyTerm {
            vector: e(form.dim(), 4),
            coeff: 0.08,
            powers: [2, 0, 0],
            window: None,
        });
        chart.big_f.push(PolyTerm {
            vector: e(form.dim(), 4),
            coeff: -0.06,
            powers: [0, 2, 0],
            window: None,
        });
        chart.validate(form, 1).unwrap();
        chart
    }

    // like perturbed_chart but with a section term odd in y2, so the metric
    // couples the axis to the imaginary direction and the flowline bends
    fn bending_chart(form: &AmbientForm) -> LinkChart {
        let mut chart = perturbed_chart(form);
        chart.big_f.push(PolyTerm {
            vector: e(form.dim(), 4),
            coeff: -0.06,
            powers: [1, 1, 0],
            window: None,
        });
        chart.validate(form, 1).unwrap();
        chart
    }

    #[test]
    fn integral_operators_invert_the_derivative() {
        // rho(s) = s^2: S_C gives s^3/2, S_R gives s^3/3, and
        // L(S rho) = (3/2)s^2 - s^{-1} s^3/2 recovers rho
        let s = node_grid(0.8);
        let rho_c: Vec<Complex64> = s.iter().map(|&x| cx(x * x, 0.0)).collect();
        let rho_r: Vec<f64> = s.iter().map(|&x| x * x).collect();
        let (h_c, h_r) = apply_s(&s, &rho_c, &rho_r);
        for j in 0..s.len() {
            let sj = s[j];
            assert!(
                (h_c[j] - cx(sj * sj * sj / 2.0, 0.0)).norm() < 1e-12,
                "S_C at node {j}"
            );
            assert!((h_r[j] - sj * sj * sj / 3.0).abs() < 1e-12, "S_R at node {j}");
        }
        for j in 1..s.len() {
            let sj = s[j];
            let lh = 1.5 * sj * sj - h_c[j].re / sj;
            assert!((lh - sj * sj).abs() < 1e-10, "L(S rho) at node {j}: {lh}");
        }
    }

    #[test]
    fn model_chart_solution_is_small_and_real() {
        let form = form_3_1();
        let chart = model_chart(&form);
        let opts = SolveOptions {
            s0: 0.05,
            ..SolveOptions::default()
        };
        let sol = solve_terminating(&form, &chart, 0.0, 0, &opts).unwrap();
        assert_eq!(sol.halvings, 0);
        assert_eq!(sol.damping, 1.0);
        // constant real b keeps the flowline on the axis: no imaginary or
        // strand-direction drift
        for j in 0..sol.s.len() {
            assert!(sol.h_c[j].im.abs() < 1e-13);
            assert!(sol.h_r[j].abs() < 1e-13);
        }
        // the metric correction drives h ~ (4/3) s^4, inside the cubic bound
        assert!(sol.h_sup() > 1e-8, "metric correction should be visible");
        assert!(sol.fitted_c_cubic < 0.1, "cubic fit {}", sol.fitted_c_cubic);
        let slope = sol.exponent_fit().unwrap();
        assert!(slope >= 3.5 && slope <= 4.5, "exponent {slope}");
        assert!(sol.kappa_max() < 0.5, "kappa {}", sol.kappa_max());
        assert!(sol.residual < 1e-10, "residual {}", sol.residual);
        assert_eq!(sol.point_local(0.0), Vector3::new(0.0, 0.0, 0.0));
        // w = sqrt(amp s^2 + h), so h(0.025) ~ 5e-7 shifts it by about 1e-5
        let w = sol.w_local(0.025);
        assert!(w.im.abs() < 1e-12);
        assert!((w - cx(sol.amp.sqrt() * 0.025, 0.0)).norm() < 1e-4);
        let dev = shooting_deviation(&form, &chart, &sol).unwrap();
        assert!(dev < 1e-8, "shooting deviation {dev}");
        let js = sol.diagnostics_json();
        assert!(js.contains("\"s0\":") && js.contains("\"kappas\":"));
    }

    #[test]
    fn perturbed_solution_matches_shooting_and_seeds_agree() {
        let form = form_3_2();
        let chart = perturbed_chart(&form);
        let opts = SolveOptions {
            s0: 0.04,
            ..SolveOptions::default()
        };
        let sol = solve_terminating(&form, &chart, 0.1, 0, &opts).unwrap();
        assert_eq!(sol.damping, 1.0, "real-frame data should not need damping");
        assert!(sol.kappa_max() < 0.5, "kappa {}", sol.kappa_max());
        assert!(!sol.kappas.is_empty());
        let slope = sol.exponent_fit().unwrap();
        assert!(slope >= 2.9, "exponent {slope}");
        assert!(sol.fitted_q > 0.0);
        let dev = shooting_deviation(&form, &chart, &sol).unwrap();
        assert!(dev < 1e-7, "shooting deviation {dev}");
        // the strand-direction component responds to the t-varying b
        assert!(sol.h_r.iter().any(|&v| v.abs() > 1e-12));
        let opts2 = SolveOptions {
            seed: PicardSeed::Quadratic(0.5),
            ..opts
        };
        let sol2 = solve_terminating(&form, &chart, 0.1, 0, &opts2).unwrap();
        let mut diff = 0.0f64;
        for j in 0..sol.s.len() {
            diff = diff.max((sol.h_c[j] - sol2.h_c[j]).norm());
            diff = diff.max((sol.h_r[j] - sol2.h_r[j]).abs());
        }
        assert!(diff < 1e-9, "seed dependence {diff}");
    }

    #[test]
    fn rotated_sheet_converges_through_damping() {
        // on sheet 1 the quintic coefficient acquires the phase e^{2 pi i/3},
        // which excites the conjugate-antisymmetric modes
        let form = form_3_2();
        let chart = perturbed_chart(&form);
        let opts = SolveOptions {
            s0: 0.04,
            ..SolveOptions::default()
        };
        let sol = solve_terminating(&form, &chart, 0.1, 1, &opts).unwrap();
        assert!(sol.kappa_max() < KAPPA_LIMIT, "kappa {}", sol.kappa_max());
        assert!(
            sol.h_c.iter().any(|h| h.im.abs() > 1e-12),
            "rotated frame should leave the real axis"
        );
        let dev = shooting_deviation(&form, &chart, &sol).unwrap();
        assert!(dev < 1e-7, "shooting deviation {dev}");
        let slope = sol.exponent_fit().unwrap();
        assert!(slope >= 2.9, "exponent {slope}");
    }

    #[test]
    fn asymmetric_section_bends_the_flowline() {
        // the y1*y2 section term makes g^{-1} dh point off-axis even on
        // sheet 0, so the solution is genuinely complex in the real frame
        let form = form_3_2();
        let chart = bending_chart(&form);
        let opts = SolveOptions {
            s0: 0.04,
            ..SolveOptions::default()
        };
        let sol = solve_terminating(&form, &chart, 0.1, 0, &opts).unwrap();
        assert!(sol.kappa_max() < KAPPA_LIMIT, "kappa {}", sol.kappa_max());
        assert!(
            sol.h_c.iter().any(|h| h.im.abs() > 1e-12),
            "metric coupling should push the flowline off the axis"
        );
        let dev = shooting_deviation(&form, &chart, &sol).unwrap();
        assert!(dev < 1e-7, "shooting deviation {dev}");
    }

    #[test]
    fn contraction_improves_as_s0_shrinks() {
        let form = form_3_2();
        let chart = perturbed_chart(&form);
        let mut prev: Option<f64> = None;
        for s0 in [0.08, 0.04, 0.02] {
            let opts = SolveOptions {
                s0,
                ..SolveOptions::default()
            };
            let sol = solve_terminating(&form, &chart, 0.1, 0, &opts).unwrap();
            assert_eq!(sol.halvings, 0);
            let k = sol.kappa_max();
            if let Some(p) = prev {
                assert!(k < 0.98 * p, "kappa {k} did not improve on {p}");
            }
            prev = Some(k);
        }
    }

    #[test]
    fn sheets_rotate_by_cube_roots_in_the_model() {
        let form = form_3_1();
        let chart = model_chart(&form);
        let opts = SolveOptions {
            s0: 0.05,
            ..SolveOptions::default()
        };
        let sheets: Vec<TerminatingSheet> = (0..3)
            .map(|k| {
                build_terminating_sheet(&form, &chart, k, (-0.5, 0.5), 5, &opts).unwrap()
            })
            .collect();
        let omega = Complex64::from_polar(1.0, 2.0 * PI / 3.0);
        for (i, t) in sheets[0].t_nodes.iter().enumerate() {
            for frac in [0.2, 0.6, 1.0] {
                let s = sheets[0].solutions[i].s0 * frac;
                let p0 = sheets[0].solutions[i].point_local(s);
                let z0 = cx(p0[0], p0[1]);
                // sheet 0 of the model lies on the positive real axis
                assert!(z0.im.abs() < 1e-13 && z0.re >= 0.0);
                assert!((p0[2] - t).abs() < 1e-13);
                for k in 1..3usize {
                    let pk = sheets[k].solutions[i].point_local(s);
                    let zk = cx(pk[0], pk[1]);
                    let want = z0 * omega.powu(k as u32);
                    assert!(
                        (zk - want).norm() < 1e-12,
                        "sheet {k} at t = {t}, s = {s}"
                    );
                    assert!((pk[2] - p0[2]).abs() < 1e-13);
                }
            }
        }
        for (i, t) in sheets[1].t_nodes.iter().enumerate() {
            let b = sheets[1].solutions[i].point_local(0.0);
            assert_eq!(b, Vector3::new(0.0, 0.0, *t));
        }
        let csv = sheets[2].to_csv();
        assert!(csv.starts_with("x,t,y1,y2,y3\n"));
        assert_eq!(csv.lines().count(), 1 + 5 * SOLVE_NODES);
    }

    #[test]
    fn perturbed_sheet_is_c1_with_strand_boundary() {
        let form = form_3_2();
        let chart = perturbed_chart(&form);
        let opts = SolveOptions {
            s0: 0.04,
            ..SolveOptions::default()
        };
        let sheet = build_terminating_sheet(&form, &chart, 0, (-0.2, 0.4), 4, &opts).unwrap();
        assert!(sheet.c1_defect > 0.0 && sheet.c1_defect < 0.05, "defect {}", sheet.c1_defect);
        for (i, t) in sheet.t_nodes.iter().enumerate() {
            let b = sheet.boundary()[i];
            assert!((b - Vector3::new(0.0, 0.0, *t)).norm() < 1e-9);
        }
    }

    #[test]
    fn off_sheet_probes_stay_away_from_the_strand() {
        let form = form_3_1();
        let chart = model_chart(&form);
        let report = only_terminating_check(&form, &chart, 12).unwrap();
        assert_eq!(report.samples.len(), 12);
        assert_eq!(report.violations, 0);
        assert!(
            report.min_distance > 1e-3 * chart.r_max,
            "min distance {}",
            report.min_distance
        );
        // mid-angle start between two sheet rays, radius 0.1
        let w0 = Complex64::from_polar(0.1f64.sqrt(), PI / 6.0);
        let probe = probe_link_flow(&form, &chart, w0, 0.0).unwrap();
        assert!(!probe.reached_link);
        assert!(probe.min_link_distance > 0.01, "mid-angle {}", probe.min_link_distance);
        // a start on the solved flowline does terminate
        let opts = SolveOptions {
            s0: 0.05,
            ..SolveOptions::default()
        };
        let sol = solve_terminating(&form, &chart, 0.0, 0, &opts).unwrap();
        let on = probe_link_flow(&form, &chart, sol.w_local(0.8 * sol.s0), 0.0).unwrap();
        assert!(on.reached_link, "on-sheet min {}", on.min_link_distance);
        assert!(on.min_link_distance < 1e-8);
        let empty = only_terminating_check(&form, &chart, 0).unwrap();
        assert!(empty.samples.is_empty());
        assert_eq!(empty.violations, 0);
    }

    #[test]
    fn pure_cut_curve_matches_the_closed_form() {
        for eps in [0.1, 0.01] {
            let res = cut_plane_flow(CutPlaneModel::Pure { epsilon: eps }, 801).unwrap();
            assert!(res.level_residual < 1e-9, "level residual {}", res.level_residual);
            let mut closed = Vec::with_capacity(801);
            for k in 0..801 {
                let sig = -1.0 + 2.0 * k as f64 / 800.0;
                closed.push(cx(sig, eps).powf(2.0 / 3.0));
            }
            let mut point_err = 0.0f64;
            for k in 0..801 {
                point_err = point_err.max((res.curve[k] - closed[k]).norm());
            }
            assert!(point_err < 1e-9, "eps {eps}: pointwise {point_err}");
            let h = polyline_hausdorff(&res.curve, &closed);
            assert!(h < 1e-6, "eps {eps}: hausdorff {h}");
        }
        // shrinking the offset pulls the curve onto the two limit rays
        let ray_dist = |eps: f64| -> f64 {
            let res = cut_plane_flow(CutPlaneModel::Pure { epsilon: eps }, 513).unwrap();
            let dir = Complex64::from_polar(1.0, 2.0 * PI / 3.0);
            res.curve
                .iter()
                .map(|&z| {
                    point_segment_distance(z, cx(0.0, 0.0), cx(1.1, 0.0))
                        .min(point_segment_distance(z, cx(0.0, 0.0), dir * 1.1))
                })
                .fold(0.0f64, f64::max)
        };
        let d1 = ray_dist(1e-2);
        let d2 = ray_dist(1e-3);
        assert!(d1 < 1.0 * 1e-2f64.powf(2.0 / 3.0), "d1 {d1}");
        assert!(d2 < 0.5 * d1, "d2 {d2} vs d1 {d1}");
    }

    #[test]
    fn shifted_cut_meets_the_axis_only_for_positive_levels() {
        let res = cut_plane_flow(CutPlaneModel::Shifted { level: 0.04 }, 400).unwrap();
        assert_eq!(res.cut_point, Some(0.04));
        assert!(res.level_residual < 1e-9, "level residual {}", res.level_residual);
        assert!(res.axis_level_gap < 1e-12);
        assert!(res.axis_margin < 1e-9, "should touch the axis at the cut point");
        let config = res.config.as_ref().unwrap();
        let mut alpha_sum = 0i64;
        let mut delta_sum = 0i64;
        for c in config {
            alpha_sum += c.label.alpha;
            delta_sum += c.label.delta;
            assert!(!c.points.is_empty());
        }
        assert_eq!((alpha_sum, delta_sum), (0, 0), "labels must balance");
        // both level branches emanate from the cut point
        assert!((config[0].points[0] - cx(0.04, 0.0)).norm() < 1e-9);
        assert!((config[1].points[0] - cx(0.04, 0.0)).norm() < 1e-9);
        // the strand-bound curve is the axis segment [0, p_t]
        let axis = &config[2].points;
        assert_eq!(axis[0], cx(0.0, 0.0));
        assert!((axis[axis.len() - 1] - cx(0.04, 0.0)).norm() < 1e-15);

        let neg = cut_plane_flow(CutPlaneModel::Shifted { level: -0.04 }, 400).unwrap();
        assert_eq!(neg.cut_point, None);
        assert!(neg.config.is_none());
        assert!((neg.axis_level_gap - 0.04).abs() < 1e-9, "gap {}", neg.axis_level_gap);
        assert!(neg.axis_margin > 0.01, "margin {}", neg.axis_margin);
        assert!(neg.level_residual < 1e-9);
    }
}
