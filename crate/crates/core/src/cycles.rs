//! Labeled graphs of gradient flowlines. A template names the combinatorics
//! (edges, junctions, strand ends) and rough positions; `find_graph` makes
//! it geometric by shooting flowlines from mid-edge cross sections and
//! solving the matching conditions. `find_orbit` does the closed-loop
//! analogue through a return map. `chi_pairing` evaluates the boundary
//! pairing of a labeled cycle and `calibration_check` compares it against
//! weighted length.

use nalgebra::{DMatrix, DVector, Matrix2, Vector2, Vector3};
use num_complex::Complex64;

use crate::error::{Error, Result};
use crate::flow::{FlowEventKind, FlowOptions, Flowline, Termination, TransverseDisc};
use crate::lattice::{enumerate_minus2, is_irreducible_with, AmbientForm, LatticeClass, PositiveFrame};
use crate::linkzone::{solve_terminating, SolveOptions};
use crate::scenario::Scene;
use crate::sections::{height_gradient_from_jet, metric_from_jet, Jet, SectionChart, SectionEval, Sheet};

/// Convergence target for the graph shooting residual.
pub const GRAPH_TOL: f64 = 1e-10;
/// A search that stalls above this residual reports not-found.
pub const GRAPH_STALL_TOL: f64 = 1e-8;
/// Smallest singular value of the shooting system below which a solution
/// is flagged non-transverse; the same gap applies to orbit multipliers.
pub const SIGMA_MIN_TOL: f64 = 1e-6;
/// Newton tolerance on the return-map fixed point.
pub const ORBIT_TOL: f64 = 1e-11;
/// A found orbit must close up to this defect.
pub const ORBIT_CLOSURE_TOL: f64 = 1e-9;
/// Weighted length may undercut the pairing by at most this much.
pub const CALIBRATION_TOL: f64 = 1e-8;
/// Relative slack under which a cycle counts as calibrated.
pub const NEAR_EQUALITY_REL: f64 = 1e-6;

// ---------------------------------------------------------------------------
// templates

/// End of a template edge.
#[derive(Debug, Clone)]
pub enum TemplateVertex {
    /// Trivalent junction; the search starts looking near the hint.
    Interior { hint: Vector3<f64> },
    /// Valence-1 end terminating on a link strand. The label of the
    /// incident edge must be an integer multiple of the chart's vanishing
    /// class.
    Strand { chart: String, sheet: u8, t_hint: f64 },
}

/// One edge: a label, a cross-section disc somewhere along the expected
/// flowline, a seed on that disc, and flow-parameter budgets toward each
/// end. Budgets toward junctions are seeds for unknowns; budgets toward
/// strands are fixed caps inside which the leg must reach its ring.
#[derive(Debug, Clone)]
pub struct TemplateEdge {
    pub tail: usize,
    pub head: usize,
    pub label: LatticeClass,
    pub disc: TransverseDisc,
    pub seed_xi: Vector2<f64>,
    pub l_back: f64,
    pub l_fwd: f64,
}

#[derive(Debug, Clone)]
pub struct GraphTemplate {
    pub vertices: Vec<TemplateVertex>,
    pub edges: Vec<TemplateEdge>,
}

/// Counting data of a validated template. Trivalent junctions and
/// valence-1 legs give the handshake 2m = 3n + legs, which makes the
/// shooting system square: 4m - legs unknowns against 6n + legs matching
/// conditions.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TemplateAudit {
    pub m: usize,
    pub n: usize,
    pub legs: usize,
    pub unknowns: usize,
    pub conditions: usize,
}

/// Integer k with label = k * delta, if one exists.
fn label_multiple(label: &LatticeClass, delta: &LatticeClass) -> Option<i64> {
    let a = label.coords();
    let d = delta.coords();
    let j = d.iter().position(|&c| c != 0)?;
    if d[j] == 0 || a[j] % d[j] != 0 {
        return None;
    }
    let k = a[j] / d[j];
    if k == 0 {
        return None;
    }
    if a.iter().zip(d).any(|(&ai, &di)| ai != k * di) {
        return None;
    }
    Some(k)
}

impl GraphTemplate {
    /// Structural checks: trivalent junctions with exactly balanced integer
    /// labels, valence-1 strand ends with labels along the strand's
    /// vanishing class, budgets positive. Returns the counting data.
    pub fn validate(&self, scene: &Scene) -> Result<TemplateAudit> {
        if self.edges.is_empty() {
            return Err(Error::invalid("template has no edges"));
        }
        let dim = scene.form.dim();
        let nv = self.vertices.len();
        let mut valence = vec![0usize; nv];
        let mut net = vec![vec![0i64; dim]; nv];
        for (k, e) in self.edges.iter().enumerate() {
            if e.tail >= nv || e.head >= nv {
                return Err(Error::invalid(format!("edge {k} references a missing vertex")));
            }
            if e.label.coords().len() != dim {
                return Err(Error::invalid(format!("edge {k} label has the wrong dimension")));
            }
            if e.label.is_zero() {
                return Err(Error::invalid(format!("edge {k} carries the zero label")));
            }
            if e.l_back <= 0.0 || e.l_fwd <= 0.0 || e.disc.radius <= 0.0 {
                return Err(Error::invalid(format!("edge {k} needs positive budgets and disc radius")));
            }
            valence[e.tail] += 1;
            valence[e.head] += 1;
            for (i, &c) in e.label.coords().iter().enumerate() {
                net[e.head][i] += c;
                net[e.tail][i] -= c;
            }
        }
        let mut n = 0;
        let mut legs = 0;
        for (v, tv) in self.vertices.iter().enumerate() {
            match tv {
                TemplateVertex::Interior { .. } => {
                    if valence[v] != 3 {
                        return Err(Error::invalid(format!(
                            "junction {v} has valence {}, need 3",
                            valence[v]
                        )));
                    }
                    if net[v].iter().any(|&c| c != 0) {
                        return Err(Error::invalid(format!(
                            "labels do not balance at junction {v}: net {:?}",
                            net[v]
                        )));
                    }
                    n += 1;
                }
                TemplateVertex::Strand { chart, sheet, t_hint } => {
                    if valence[v] != 1 {
                        return Err(Error::invalid(format!(
                            "strand end {v} has valence {}, need 1",
                            valence[v]
                        )));
                    }
                    let idx = scene
                        .atlas
                        .chart_index(chart)
                        .ok_or_else(|| Error::invalid(format!("strand end {v} names unknown chart {chart}")))?;
                    let SectionChart::Link(lc) = &scene.atlas.chart(idx).chart else {
                        return Err(Error::invalid(format!("chart {chart} is not a link chart")));
                    };
                    if *sheet >= 3 {
                        return Err(Error::invalid(format!("strand end {v} sheet {sheet} out of range")));
                    }
                    if *t_hint <= lc.t_range.0 || *t_hint >= lc.t_range.1 {
                        return Err(Error::invalid(format!(
                            "strand end {v} hint t = {t_hint} outside chart {chart}"
                        )));
                    }
                    let e = self
                        .edges
                        .iter()
                        .find(|e| e.tail == v || e.head == v)
                        .expect("valence 1 vertex has an incident edge");
                    if label_multiple(&e.label, &lc.delta).is_none() {
                        return Err(Error::invalid(format!(
                            "leg at vertex {v} must carry an integer multiple of the vanishing class of {chart}"
                        )));
                    }
                    legs += 1;
                }
            }
        }
        let m = self.edges.len();
        debug_assert_eq!(2 * m, 3 * n + legs);
        Ok(TemplateAudit {
            m,
            n,
            legs,
            unknowns: 4 * m - legs,
            conditions: 6 * n + legs,
        })
    }
}

// ---------------------------------------------------------------------------
// labeled cycles and the boundary pairing

#[derive(Debug, Clone)]
pub enum CycleVertex {
    /// Junction or subdivision point; incident labels must balance exactly,
    /// so the stored value never enters the pairing.
    Interior { u: DVector<f64> },
    /// Valence-1 end; u is the section value on the strand itself.
    Strand { u: DVector<f64> },
}

#[derive(Debug, Clone)]
pub struct CycleEdge {
    pub tail: usize,
    pub head: usize,
    pub label: LatticeClass,
    /// Net identification monodromy picked up from tail to head.
    pub shift: Option<LatticeClass>,
    /// Base polyline from tail to head for length quadrature. Empty for
    /// cycles whose lengths are measured along stored flowlines instead.
    pub points: Vec<Vector3<f64>>,
}

#[derive(Debug, Clone)]
pub struct LabeledCycle {
    pub vertices: Vec<CycleVertex>,
    pub edges: Vec<CycleEdge>,
}

/// Boundary pairing of a labeled cycle: the sum over edges of
/// <label, u(head) + shift - u(tail)>. Interior vertices must balance
/// exactly, so their values cancel and the result is a sum of strand-end
/// terms plus an exact integer from the monodromies. The integer part is
/// accumulated in i64 and never touches floating point until the end.
pub fn chi_pairing(form: &AmbientForm, cycle: &LabeledCycle) -> Result<f64> {
    let dim = form.dim();
    let nv = cycle.vertices.len();
    let mut valence = vec![0usize; nv];
    let mut net = vec![vec![0i64; dim]; nv];
    let mut whole = 0i64;
    for (k, e) in cycle.edges.iter().enumerate() {
        if e.tail >= nv || e.head >= nv {
            return Err(Error::invalid(format!("edge {k} references a missing vertex")));
        }
        if e.label.coords().len() != dim {
            return Err(Error::invalid(format!("edge {k} label has the wrong dimension")));
        }
        valence[e.tail] += 1;
        valence[e.head] += 1;
        for (i, &c) in e.label.coords().iter().enumerate() {
            net[e.head][i] += c;
            net[e.tail][i] -= c;
        }
        if let Some(s) = &e.shift {
            whole += form.pair(&e.label, s);
        }
    }
    let mut chi = whole as f64;
    for (v, cv) in cycle.vertices.iter().enumerate() {
        match cv {
            CycleVertex::Interior { .. } => {
                if net[v].iter().any(|&c| c != 0) {
                    return Err(Error::invalid(format!(
                        "labels do not balance at interior vertex {v}: net {:?}",
                        net[v]
                    )));
                }
            }
            CycleVertex::Strand { u } => {
                if valence[v] != 1 {
                    return Err(Error::invalid(format!(
                        "strand vertex {v} has valence {}, need 1",
                        valence[v]
                    )));
                }
                let cls = form.class(net[v].clone())?;
                chi += form.pair_class_real(&cls, u);
            }
        }
    }
    Ok(chi)
}

// ---------------------------------------------------------------------------
// calibration

#[derive(Debug, Clone, Copy)]
pub struct Calibration {
    pub weighted_length: f64,
    pub chi_abs: f64,
    /// weighted_length - chi_abs; never meaningfully negative.
    pub slack: f64,
    /// Slack below 1e-6 of the length: calibrated to numerical resolution.
    pub near_equality: bool,
}

fn finish_calibration(weighted_length: f64, chi: f64) -> Result<Calibration> {
    let chi_abs = chi.abs();
    let slack = weighted_length - chi_abs;
    if slack < -CALIBRATION_TOL {
        return Err(Error::invalid(format!(
            "weighted length {weighted_length} undercuts |pairing| {chi_abs}"
        )));
    }
    Ok(Calibration {
        weighted_length,
        chi_abs,
        slack,
        near_equality: slack < NEAR_EQUALITY_REL * weighted_length,
    })
}

/// Jet at a base point from the first single-valued chart covering it.
/// Derivatives come back in base coordinates. Paths that need link charts
/// go through the flow machinery instead, which tracks the branch.
fn bulk_jet(scene: &Scene, y: &Vector3<f64>) -> Result<Jet> {
    for pc in &scene.atlas.charts {
        if pc.chart.is_link() {
            continue;
        }
        let local = pc.placement.to_local(y);
        if !pc.chart.contains(&local) {
            continue;
        }
        let mut jet = pc.chart.eval_jet(&scene.form, &local, Sheet::Single)?;
        let rot_t = DMatrix::from_fn(3, 3, |i, j| pc.placement.rot[(j, i)]);
        jet.du = &jet.du * rot_t;
        return Ok(jet);
    }
    Err(Error::OutOfDomain(format!(
        "no single-valued chart covers ({:.4}, {:.4}, {:.4})",
        y[0], y[1], y[2]
    )))
}

/// Section value at a base point covered by a single-valued chart.
pub fn bulk_value(scene: &Scene, y: &Vector3<f64>) -> Result<DVector<f64>> {
    Ok(bulk_jet(scene, y)?.u)
}

/// Weighted length of a straight segment path: composite Simpson of
/// |segment'|_g |grad h|_g with 8 panels per segment.
pub fn polyline_weighted_length(
    scene: &Scene,
    label: &LatticeClass,
    points: &[Vector3<f64>],
) -> Result<f64> {
    let mut total = 0.0;
    for pair in points.windows(2) {
        let d = pair[1] - pair[0];
        if d.norm() == 0.0 {
            continue;
        }
        let n = 8;
        let h = 1.0 / n as f64;
        let mut acc = 0.0;
        for i in 0..=n {
            let y = pair[0] + d * (i as f64 * h);
            let jet = bulk_jet(scene, &y)?;
            let met = metric_from_jet(&jet, &scene.form, &y)?;
            let hg = height_gradient_from_jet(&scene.form, &jet, label, &y)?;
            let speed = (d.dot(&(met.g * d))).sqrt() * hg.speed;
            let w = if i == 0 || i == n {
                1.0
            } else if i % 2 == 1 {
                4.0
            } else {
                2.0
            };
            acc += w * speed;
        }
        total += acc * h / 3.0;
    }
    Ok(total)
}

/// Compares the weighted length of a cycle's polylines against its
/// boundary pairing.
pub fn calibration_check(scene: &Scene, cycle: &LabeledCycle) -> Result<Calibration> {
    let chi = chi_pairing(&scene.form, cycle)?;
    let mut wl = 0.0;
    for e in &cycle.edges {
        wl += polyline_weighted_length(scene, &e.label, &e.points)?;
    }
    finish_calibration(wl, chi)
}

// ---------------------------------------------------------------------------
// closed orbits

#[derive(Debug, Clone)]
pub struct FoundOrbit {
    pub xi: Vector2<f64>,
    /// Base point of the orbit on the disc.
    pub point: Vector3<f64>,
    /// Distance between the fixed point and its return image.
    pub closure: f64,
    pub flow: Flowline,
    /// Multipliers of the linearized return map.
    pub eigenvalues: [Complex64; 2],
    /// Net identification class the orbit wraps through.
    pub monodromy: LatticeClass,
    /// Boundary pairing <label, monodromy>, an exact integer.
    pub chi: f64,
    pub steps: usize,
}

fn eig2(m: &Matrix2<f64>) -> [Complex64; 2] {
    let tr = m[(0, 0)] + m[(1, 1)];
    let det = m[(0, 0)] * m[(1, 1)] - m[(0, 1)] * m[(1, 0)];
    let disc = Complex64::new(tr * tr - 4.0 * det, 0.0).sqrt();
    let half = Complex64::new(0.5 * tr, 0.0);
    [half + disc * 0.5, half - disc * 0.5]
}

fn wrap_class(scene: &Scene, fl: &Flowline, sign: i64, acc: &mut [i64]) {
    for ev in &fl.events {
        if let FlowEventKind::Wrap { index } = ev.kind {
            let off = &scene.atlas.identifications[index].ambient_offset;
            for (i, &c) in off.coords().iter().enumerate() {
                acc[i] += sign * c;
            }
        }
    }
}

/// Newton search for a fixed point of the return map on `disc`. The label
/// must move the flow transversally through the disc; a start where the
/// projected gradient vanishes comes back as a degenerate-start error from
/// the integrator.
pub fn find_orbit(
    scene: &Scene,
    label: &LatticeClass,
    disc: &TransverseDisc,
    seed: Vector2<f64>,
    opts: &FlowOptions,
) -> Result<FoundOrbit> {
    let ctx = scene.ctx();
    let mut xi = seed;
    let mut steps = 0;
    for _ in 0..40 {
        let (rxi, _) = ctx.return_map(label, disc, &xi, Sheet::Single, opts)?;
        let f = rxi - xi;
        if f.norm() < ORBIT_TOL {
            break;
        }
        steps += 1;
        let j = ctx.return_map_derivative(label, disc, &xi, Sheet::Single, opts)?;
        let a = j - Matrix2::identity();
        let dx = a.lu().solve(&(-f)).ok_or(Error::Degenerate {
            what: "orbit search",
            detail: "return map has a unit multiplier at the iterate".into(),
        })?;
        xi += dx;
        if dx.norm() < ORBIT_TOL {
            break;
        }
    }
    let (rxi, flow) = ctx.return_map(label, disc, &xi, Sheet::Single, opts)?;
    let closure = (rxi - xi).norm();
    if closure > ORBIT_CLOSURE_TOL {
        return Err(Error::NoConvergence {
            what: "orbit search",
            detail: format!("closure defect {closure:.3e} after {steps} corrections"),
        });
    }
    let j = ctx.return_map_derivative(label, disc, &xi, Sheet::Single, opts)?;
    let mut acc = vec![0i64; scene.form.dim()];
    wrap_class(scene, &flow, 1, &mut acc);
    let monodromy = scene.form.class(acc)?;
    let chi = scene.form.pair(label, &monodromy) as f64;
    Ok(FoundOrbit {
        xi,
        point: disc.point(&xi),
        closure,
        flow,
        eigenvalues: eig2(&j),
        monodromy,
        chi,
        steps,
    })
}

// ---------------------------------------------------------------------------
// graphs

#[derive(Debug, Clone)]
pub enum GraphVertexKind {
    Interior,
    Strand { chart: String, sheet: u8, t: f64 },
}

#[derive(Debug, Clone)]
pub struct GraphVertex {
    /// Base coordinates.
    pub position: Vector3<f64>,
    pub kind: GraphVertexKind,
    /// Section value at the vertex. At strands the two-valued part
    /// vanishes, so this is the value on the strand itself.
    pub u: DVector<f64>,
}

#[derive(Debug, Clone)]
pub struct GraphEdge {
    pub tail: usize,
    pub head: usize,
    pub label: LatticeClass,
    /// Flow from the cross-section disc down to the tail.
    pub back: Flowline,
    /// Flow from the cross-section disc up to the head.
    pub fwd: Flowline,
    /// Net identification monodromy from tail to head.
    pub shift: LatticeClass,
}

#[derive(Debug, Clone)]
pub struct GradientGraph {
    pub vertices: Vec<GraphVertex>,
    pub edges: Vec<GraphEdge>,
}

impl GradientGraph {
    /// Cycle view carrying what the boundary pairing needs. Edge polylines
    /// stay empty; lengths of found graphs come from `graph_calibration`,
    /// which integrates along the stored flows.
    pub fn to_cycle(&self) -> LabeledCycle {
        let vertices = self
            .vertices
            .iter()
            .map(|v| match v.kind {
                GraphVertexKind::Interior => CycleVertex::Interior { u: v.u.clone() },
                GraphVertexKind::Strand { .. } => CycleVertex::Strand { u: v.u.clone() },
            })
            .collect();
        let edges = self
            .edges
            .iter()
            .map(|e| CycleEdge {
                tail: e.tail,
                head: e.head,
                label: e.label.clone(),
                shift: Some(e.shift.clone()),
                points: Vec::new(),
            })
            .collect();
        LabeledCycle { vertices, edges }
    }
}

#[derive(Debug, Clone)]
pub struct FoundGraph {
    pub graph: GradientGraph,
    pub audit: TemplateAudit,
    /// Infinity norm of the matching residual at the solution.
    pub residual: f64,
    /// Smallest singular value of the shooting Jacobian at the solution.
    pub sigma_min: f64,
    pub transverse: bool,
    /// Accepted solver iterations.
    pub steps: usize,
    pub warnings: Vec<String>,
}

#[derive(Debug, Clone, Copy)]
enum End {
    Tail,
    Head,
}

struct LegPlan {
    chart_idx: usize,
    sheet: u8,
    s0: f64,
    ring: TransverseDisc,
}

struct EdgePlan {
    xi_at: usize,
    back_at: Option<usize>,
    fwd_at: Option<usize>,
    tail_leg: Option<LegPlan>,
    head_leg: Option<LegPlan>,
}

#[derive(Debug, Clone, Copy)]
struct LegFit {
    res: f64,
    t: f64,
}

struct EdgeShot {
    back: Flowline,
    fwd: Flowline,
    tail_fit: Option<LegFit>,
    head_fit: Option<LegFit>,
}

/// Freezes the evaluation ring for one strand leg: a disc transverse to
/// the terminating ray at roughly a fifth of the chart radius, wide enough
/// to catch the leg while its strand parameter moves.
fn plan_leg(scene: &Scene, chart: &str, sheet: u8, t_hint: f64) -> Result<LegPlan> {
    let chart_idx = scene
        .atlas
        .chart_index(chart)
        .ok_or_else(|| Error::invalid(format!("unknown chart {chart}")))?;
    let pc = scene.atlas.chart(chart_idx);
    let SectionChart::Link(lc) = &pc.chart else {
        return Err(Error::invalid(format!("chart {chart} is not a link chart")));
    };
    let amp_est = 2.25 * lc.b.eval(t_hint).norm_sqr();
    if amp_est <= 0.0 {
        return Err(Error::Degenerate {
            what: "strand leg",
            detail: format!("branch payload of {chart} vanishes at t = {t_hint}"),
        });
    }
    let s0 = (0.45 * lc.r_max / amp_est).sqrt();
    let sol = solve_terminating(
        &scene.form,
        lc,
        t_hint,
        sheet,
        &SolveOptions { s0, ..SolveOptions::default() },
    )?;
    let r_eval = 0.5 * sol.amp * sol.s0 * sol.s0;
    let th = sol.theta;
    let center_local = Vector3::new(r_eval * th.cos(), r_eval * th.sin(), t_hint);
    let trans = Vector3::new(-th.sin(), th.cos(), 0.0);
    let span = (lc.t_range.1 - lc.t_range.0) * 0.45;
    let ring = TransverseDisc::new(
        pc.placement.to_global(&center_local),
        pc.placement.rot * trans,
        pc.placement.rot * Vector3::z(),
        (2.5 * r_eval).min(span),
    )?;
    Ok(LegPlan {
        chart_idx,
        sheet,
        s0: sol.s0,
        ring,
    })
}

/// Transverse mismatch between a flow arrival and the terminating curve of
/// its strand chart. Two passes adjust the strand parameter; inside each,
/// a radial fixed point locates the matching curve parameter.
fn leg_fit(scene: &Scene, plan: &LegPlan, fl: &Flowline) -> Result<LegFit> {
    let pc = scene.atlas.chart(plan.chart_idx);
    let SectionChart::Link(lc) = &pc.chart else {
        return Err(Error::invalid("leg chart is not a link chart"));
    };
    let local = pc.placement.to_local(&fl.end_point());
    let z_arr = Complex64::new(local[0], local[1]);
    let t_arr = local[2];
    let mut t_end = t_arr;
    let mut fit = LegFit { res: 0.0, t: t_end };
    for _ in 0..2 {
        let sol = solve_terminating(
            &scene.form,
            lc,
            t_end,
            plan.sheet,
            &SolveOptions { s0: plan.s0, ..SolveOptions::default() },
        )?;
        let zeta = Complex64::from_polar(1.0, -sol.theta) * z_arr;
        let mut s = (zeta.re.abs() / sol.amp).sqrt();
        for _ in 0..3 {
            let (hc, _, _, _) = sol.h_at(s);
            s = ((zeta.re - hc.re).max(1e-14) / sol.amp).sqrt();
        }
        let (hc, hr, _, _) = sol.h_at(s);
        t_end += t_arr - (sol.link_t + hr);
        fit = LegFit { res: zeta.im - hc.im, t: t_end };
    }
    Ok(fit)
}

fn chart_local_end(fl: &Flowline) -> Result<(usize, Vector3<f64>, Sheet)> {
    let piece = fl
        .pieces
        .last()
        .ok_or_else(|| Error::invalid("flowline has no dense output"))?;
    let seg = &fl.segments[piece.seg];
    let local = piece.local_at(piece.s_to);
    let sheet = match seg.sheet_end {
        Some(w) => Sheet::NearW(w),
        None => Sheet::Single,
    };
    Ok((seg.chart_idx, local, sheet))
}

/// Chart value of the tracked section at the end of a flowline, without
/// identification shifts.
fn end_chart_value(scene: &Scene, fl: &Flowline) -> Result<DVector<f64>> {
    let (idx, local, sheet) = chart_local_end(fl)?;
    let pc = scene.atlas.chart(idx);
    Ok(pc.chart.eval_jet(&scene.form, &local, sheet)?.u)
}

struct Layout {
    plans: Vec<EdgePlan>,
    n_x: usize,
    /// Interior vertex ids in order, each with its (edge, end) incidences.
    junctions: Vec<(usize, Vec<(usize, End)>)>,
}

fn build_layout(scene: &Scene, template: &GraphTemplate) -> Result<Layout> {
    let mut plans = Vec::with_capacity(template.edges.len());
    let mut n_x = 0;
    for e in &template.edges {
        let xi_at = n_x;
        n_x += 2;
        let mut plan = EdgePlan {
            xi_at,
            back_at: None,
            fwd_at: None,
            tail_leg: None,
            head_leg: None,
        };
        match &template.vertices[e.tail] {
            TemplateVertex::Interior { .. } => {
                plan.back_at = Some(n_x);
                n_x += 1;
            }
            TemplateVertex::Strand { chart, sheet, t_hint } => {
                plan.tail_leg = Some(plan_leg(scene, chart, *sheet, *t_hint)?);
            }
        }
        match &template.vertices[e.head] {
            TemplateVertex::Interior { .. } => {
                plan.fwd_at = Some(n_x);
                n_x += 1;
            }
            TemplateVertex::Strand { chart, sheet, t_hint } => {
                plan.head_leg = Some(plan_leg(scene, chart, *sheet, *t_hint)?);
            }
        }
        plans.push(plan);
    }
    let mut junctions = Vec::new();
    for (v, tv) in template.vertices.iter().enumerate() {
        if matches!(tv, TemplateVertex::Interior { .. }) {
            let mut inc = Vec::new();
            for (k, e) in template.edges.iter().enumerate() {
                if e.tail == v {
                    inc.push((k, End::Tail));
                }
                if e.head == v {
                    inc.push((k, End::Head));
                }
            }
            junctions.push((v, inc));
        }
    }
    Ok(Layout { plans, n_x, junctions })
}

fn seed_vector(template: &GraphTemplate, layout: &Layout) -> DVector<f64> {
    let mut x = DVector::zeros(layout.n_x);
    for (e, p) in template.edges.iter().zip(&layout.plans) {
        x[p.xi_at] = e.seed_xi[0];
        x[p.xi_at + 1] = e.seed_xi[1];
        if let Some(i) = p.back_at {
            x[i] = e.l_back;
        }
        if let Some(i) = p.fwd_at {
            x[i] = e.l_fwd;
        }
    }
    x
}

fn shoot_half(
    scene: &Scene,
    edge: &TemplateEdge,
    leg: &Option<LegPlan>,
    start: &Vector3<f64>,
    s_max: f64,
    k: usize,
    dir: &str,
) -> Result<Flowline> {
    let ctx = scene.ctx();
    let mut opts = FlowOptions::to(s_max);
    opts.rtol = 1e-12;
    opts.atol = 1e-14;
    if let Some(l) = leg {
        opts.discs = vec![l.ring.clone()];
        opts.stop_disc = Some(0);
    }
    let fl = ctx.integrate(&edge.label, start, Sheet::Single, &opts)?;
    match (leg.is_some(), &fl.termination) {
        (true, Termination::DiscStop(0)) => Ok(fl),
        (false, Termination::MaxLength) => Ok(fl),
        (_, other) => Err(Error::not_found(format!(
            "edge {k} {dir} flow ended with {other:?} instead of reaching its target"
        ))),
    }
}

fn eval_residual(
    scene: &Scene,
    template: &GraphTemplate,
    layout: &Layout,
    x: &DVector<f64>,
) -> Result<(DVector<f64>, Vec<EdgeShot>)> {
    let mut shots = Vec::with_capacity(template.edges.len());
    for (k, (e, p)) in template.edges.iter().zip(&layout.plans).enumerate() {
        let xi = Vector2::new(x[p.xi_at], x[p.xi_at + 1]);
        let start = e.disc.point(&xi);
        let s_back = p.back_at.map(|i| x[i]).unwrap_or(e.l_back);
        let s_fwd = p.fwd_at.map(|i| x[i]).unwrap_or(e.l_fwd);
        if s_back <= 1e-9 || s_fwd <= 1e-9 {
            return Err(Error::not_found(format!("edge {k} flow budget collapsed")));
        }
        let back = shoot_half(scene, e, &p.tail_leg, &start, -s_back, k, "backward")?;
        let fwd = shoot_half(scene, e, &p.head_leg, &start, s_fwd, k, "forward")?;
        let tail_fit = p.tail_leg.as_ref().map(|l| leg_fit(scene, l, &back)).transpose()?;
        let head_fit = p.head_leg.as_ref().map(|l| leg_fit(scene, l, &fwd)).transpose()?;
        shots.push(EdgeShot { back, fwd, tail_fit, head_fit });
    }
    let mut rows = Vec::new();
    for (_, inc) in &layout.junctions {
        let pts: Vec<Vector3<f64>> = inc
            .iter()
            .map(|&(k, end)| match end {
                End::Tail => shots[k].back.end_point(),
                End::Head => shots[k].fwd.end_point(),
            })
            .collect();
        for p in &pts[1..] {
            let d = p - pts[0];
            rows.extend_from_slice(&[d[0], d[1], d[2]]);
        }
    }
    for shot in &shots {
        if let Some(f) = &shot.tail_fit {
            rows.push(f.res);
        }
        if let Some(f) = &shot.head_fit {
            rows.push(f.res);
        }
    }
    Ok((DVector::from_vec(rows), shots))
}

fn fd_jacobian(
    scene: &Scene,
    template: &GraphTemplate,
    layout: &Layout,
    x: &DVector<f64>,
    f0: &DVector<f64>,
    central: bool,
) -> Result<DMatrix<f64>> {
    let n = x.len();
    let m = f0.len();
    let mut jac = DMatrix::zeros(m, n);
    for i in 0..n {
        let h = if central { 1e-6 } else { 1e-7 } * (1.0 + x[i].abs());
        let mut xp = x.clone();
        xp[i] += h;
        let (fp, _) = eval_residual(scene, template, layout, &xp)?;
        let col = if central {
            let mut xm = x.clone();
            xm[i] -= h;
            let (fm, _) = eval_residual(scene, template, layout, &xm)?;
            (fp - fm) / (2.0 * h)
        } else {
            (fp - f0) / h
        };
        jac.set_column(i, &col);
    }
    Ok(jac)
}

/// Samples both half-flows of every edge and certifies the label
/// irreducible at each sample; a decomposition anywhere is reported with
/// its witness. Labels of self-pairing other than -2 are skipped with a
/// warning, since the certificate is only defined there.
fn certify_edges(
    scene: &Scene,
    template: &GraphTemplate,
    shots: &[EdgeShot],
    warnings: &mut Vec<String>,
) -> Result<()> {
    let minus2 = enumerate_minus2(&scene.form, scene.budget.coeff_box);
    for (k, (e, shot)) in template.edges.iter().zip(shots).enumerate() {
        if scene.form.norm(&e.label) != -2 {
            warnings.push(format!(
                "edge {k} label has self-pairing {}, irreducibility not certified",
                scene.form.norm(&e.label)
            ));
            continue;
        }
        for fl in [&shot.back, &shot.fwd] {
            let stride = (fl.pieces.len() / 6).max(1);
            for piece in fl.pieces.iter().step_by(stride) {
                let seg = &fl.segments[piece.seg];
                let local = piece.local_at(piece.s_from);
                let sheet = if seg.is_link {
                    match piece.w_start {
                        Some(w) => Sheet::NearW(w),
                        None => continue,
                    }
                } else {
                    Sheet::Single
                };
                let pc = scene.atlas.chart(seg.chart_idx);
                let jet = pc.chart.eval_jet(&scene.form, &local, sheet)?;
                let frame = PositiveFrame::new(
                    &scene.form,
                    [
                        jet.du.column(0).into_owned(),
                        jet.du.column(1).into_owned(),
                        jet.du.column(2).into_owned(),
                    ],
                )?;
                let verdict =
                    is_irreducible_with(&scene.form, &e.label, &frame, scene.budget, &minus2)?;
                if let Some(witness) = verdict.witness {
                    let at = pc.placement.to_global(&local);
                    return Err(Error::Reducible {
                        at: [at[0], at[1], at[2]],
                        parts: witness.iter().map(|c| c.coords().to_vec()).collect(),
                    });
                }
            }
        }
    }
    Ok(())
}

fn assemble_graph(
    scene: &Scene,
    template: &GraphTemplate,
    layout: &Layout,
    shots: Vec<EdgeShot>,
) -> Result<GradientGraph> {
    let dim = scene.form.dim();
    let mut vertices = Vec::with_capacity(template.vertices.len());
    for (v, tv) in template.vertices.iter().enumerate() {
        match tv {
            TemplateVertex::Interior { .. } => {
                let inc = &layout
                    .junctions
                    .iter()
                    .find(|(id, _)| *id == v)
                    .expect("interior vertex is a junction")
                    .1;
                let mut pos = Vector3::zeros();
                for &(k, end) in inc.iter() {
                    pos += match end {
                        End::Tail => shots[k].back.end_point(),
                        End::Head => shots[k].fwd.end_point(),
                    };
                }
                pos /= inc.len() as f64;
                let (k0, end0) = inc[0];
                let fl = match end0 {
                    End::Tail => &shots[k0].back,
                    End::Head => &shots[k0].fwd,
                };
                let u = end_chart_value(scene, fl)?;
                vertices.push(GraphVertex {
                    position: pos,
                    kind: GraphVertexKind::Interior,
                    u,
                });
            }
            TemplateVertex::Strand { chart, sheet, .. } => {
                let (k, end) = template
                    .edges
                    .iter()
                    .enumerate()
                    .find_map(|(k, e)| {
                        if e.tail == v {
                            Some((k, End::Tail))
                        } else if e.head == v {
                            Some((k, End::Head))
                        } else {
                            None
                        }
                    })
                    .expect("strand vertex has an incident edge");
                let fit = match end {
                    End::Tail => shots[k].tail_fit.as_ref(),
                    End::Head => shots[k].head_fit.as_ref(),
                }
                .expect("strand end has a leg fit");
                let idx = scene.atlas.chart_index(chart).expect("validated chart id");
                let pc = scene.atlas.chart(idx);
                let SectionChart::Link(lc) = &pc.chart else {
                    unreachable!("validated link chart");
                };
                let mut u = lc.base_point.clone();
                u += &lc.axes[2] * fit.t;
                vertices.push(GraphVertex {
                    position: pc.placement.to_global(&Vector3::new(0.0, 0.0, fit.t)),
                    kind: GraphVertexKind::Strand {
                        chart: chart.clone(),
                        sheet: *sheet,
                        t: fit.t,
                    },
                    u,
                });
            }
        }
    }
    let mut edges = Vec::with_capacity(template.edges.len());
    for (e, shot) in template.edges.iter().zip(shots) {
        let mut acc = vec![0i64; dim];
        wrap_class(scene, &shot.fwd, 1, &mut acc);
        wrap_class(scene, &shot.back, -1, &mut acc);
        let shift = scene.form.class(acc)?;
        edges.push(GraphEdge {
            tail: e.tail,
            head: e.head,
            label: e.label.clone(),
            back: shot.back,
            fwd: shot.fwd,
            shift,
        });
    }
    Ok(GradientGraph { vertices, edges })
}

/// Shoots the template's edges and solves the matching conditions with a
/// damped least-squares iteration. On success the residual sits below
/// `GRAPH_TOL`, the label is certified irreducible along every edge, and
/// the smallest singular value of the shooting system decides the
/// transversality flag. Backward half-edges must not cross identifications;
/// route them so wraps only happen on ascending halves.
pub fn find_graph(scene: &Scene, template: &GraphTemplate) -> Result<FoundGraph> {
    let audit = template.validate(scene)?;
    let layout = build_layout(scene, template)?;
    let mut x = seed_vector(template, &layout);
    let (mut fvec, mut shots) = eval_residual(scene, template, &layout, &x)?;
    let mut fnorm = fvec.amax();
    let mut lambda = 1e-3;
    let mut steps = 0;
    let mut best = fnorm;
    let mut stall = 0;
    while fnorm > GRAPH_TOL && steps < 80 {
        steps += 1;
        let jac = fd_jacobian(scene, template, &layout, &x, &fvec, false)?;
        let jtj = jac.transpose() * &jac;
        let jtf = jac.transpose() * &fvec;
        let mut accepted = false;
        for _ in 0..10 {
            let mut a = jtj.clone();
            for i in 0..layout.n_x {
                a[(i, i)] += lambda * jtj[(i, i)].max(1e-12);
            }
            let Some(dx) = a.lu().solve(&(-&jtf)) else {
                lambda *= 10.0;
                continue;
            };
            let xt = &x + &dx;
            match eval_residual(scene, template, &layout, &xt) {
                Ok((ft, st)) if ft.norm() < fvec.norm() => {
                    x = xt;
                    fvec = ft;
                    shots = st;
                    lambda = (lambda / 10.0).max(1e-15);
                    accepted = true;
                    break;
                }
                _ => lambda *= 10.0,
            }
        }
        if !accepted {
            return Err(Error::NoConvergence {
                what: "graph search",
                detail: format!("no acceptable step at residual {fnorm:.3e}"),
            });
        }
        fnorm = fvec.amax();
        if fnorm < 0.99 * best {
            best = fnorm;
            stall = 0;
        } else {
            stall += 1;
        }
        if stall >= 6 && best > GRAPH_STALL_TOL {
            return Err(Error::not_found(format!(
                "matching residual stalled at {best:.3e}"
            )));
        }
    }
    if fnorm > GRAPH_TOL {
        return Err(Error::not_found(format!(
            "matching residual {fnorm:.3e} after {steps} iterations"
        )));
    }
    let mut warnings = Vec::new();
    let jac = fd_jacobian(scene, template, &layout, &x, &fvec, true)?;
    let svd = jac.svd(false, false);
    let sigma_min = svd
        .singular_values
        .iter()
        .fold(f64::INFINITY, |a, &b| a.min(b));
    let transverse = sigma_min > SIGMA_MIN_TOL;
    if !transverse {
        warnings.push(format!(
            "shooting system near rank-deficient: smallest singular value {sigma_min:.3e}"
        ));
    }
    certify_edges(scene, template, &shots, &mut warnings)?;
    let graph = assemble_graph(scene, template, &layout, shots)?;
    Ok(FoundGraph {
        graph,
        audit,
        residual: fnorm,
        sigma_min,
        transverse,
        steps,
        warnings,
    })
}

/// Weighted length of a found graph against its boundary pairing. Flows
/// carry the length up to their strand rings; the remaining tail of a leg
/// contributes exactly the height drop to the strand, which is what the
/// ascent integral collapses to there.
pub fn graph_calibration(scene: &Scene, found: &FoundGraph) -> Result<Calibration> {
    let ctx = scene.ctx();
    let g = &found.graph;
    let mut wl = 0.0;
    for e in &g.edges {
        wl += ctx.weighted_length(&e.back)?;
        wl += ctx.weighted_length(&e.fwd)?;
        for (v, fl) in [(e.tail, &e.back), (e.head, &e.fwd)] {
            if matches!(g.vertices[v].kind, GraphVertexKind::Strand { .. }) {
                let u_end = end_chart_value(scene, fl)?;
                let d = &g.vertices[v].u - &u_end;
                wl += scene.form.pair_class_real(&e.label, &d).abs();
            }
        }
    }
    let chi = chi_pairing(&scene.form, &g.to_cycle())?;
    finish_calibration(wl, chi)
}

// ---------------------------------------------------------------------------
// transversality summary

#[derive(Debug, Clone)]
pub struct TransversalityReport {
    pub audit: Option<TemplateAudit>,
    pub sigma_min: Option<f64>,
    /// Distance of the return-map spectrum from 1.
    pub eigen_gap: Option<f64>,
    pub transverse: bool,
}

/// Summarizes the transversality evidence of a found graph or orbit. A
/// graph is transverse when the shooting system's smallest singular value
/// clears the gap; an orbit when its multipliers stay away from 1.
pub fn transversality_report(
    graph: Option<&FoundGraph>,
    orbit: Option<&FoundOrbit>,
) -> TransversalityReport {
    let audit = graph.map(|g| g.audit);
    let sigma_min = graph.map(|g| g.sigma_min);
    let eigen_gap = orbit.map(|o| {
        o.eigenvalues
            .iter()
            .map(|l| (l - 1.0).norm())
            .fold(f64::INFINITY, f64::min)
    });
    let mut transverse = true;
    if let Some(s) = sigma_min {
        transverse &= s > SIGMA_MIN_TOL;
    }
    if let Some(g) = eigen_gap {
        transverse &= g > SIGMA_MIN_TOL;
    }
    TransversalityReport {
        audit,
        sigma_min,
        eigen_gap,
        transverse,
    }
}
