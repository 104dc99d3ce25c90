//! Gradient flowlines of height functions over a chart atlas. Curves use
//! the natural parameter (velocity equals the metric gradient, not unit
//! speed); crossing events are localized by bisection on the dense output.

pub mod dopri;
pub mod perturb;

use nalgebra::{DVector, Matrix2, Matrix3, Vector2, Vector3};
use num_complex::Complex64;

use crate::error::{Error, Result};
use crate::lattice::{AmbientForm, LatticeClass};
use crate::sections::atlas::Atlas;
use crate::sections::{height_gradient_from_jet, HeightGradient, Jet, SectionChart, SectionEval, Sheet};
use dopri::{OdePiece, Stepper};

/// Speeds below this are treated as arrival at a zero of the field.
pub const VELOCITY_FLOOR: f64 = 1e-12;
/// Events are localized to this accuracy in the flow parameter.
pub const EVENT_S_TOL: f64 = 1e-10;
/// Events closer than this are ties, resolved by fixed priority.
pub const EVENT_TIE_TOL: f64 = 1e-12;

const EVENT_SUBSAMPLES: usize = 16;

/// Oriented disc used for crossing detection and return maps. The span
/// pair must be orthonormal; points are center + xi1 span0 + xi2 span1.
#[derive(Debug, Clone)]
pub struct TransverseDisc {
    pub center: Vector3<f64>,
    pub span: [Vector3<f64>; 2],
    pub radius: f64,
}

impl TransverseDisc {
    /// Builds a disc from any two independent spanning directions.
    pub fn new(center: Vector3<f64>, a: Vector3<f64>, b: Vector3<f64>, radius: f64) -> Result<Self> {
        let e0 = a
            .try_normalize(1e-12)
            .ok_or_else(|| Error::invalid("disc span vector is zero"))?;
        let b = b - e0 * e0.dot(&b);
        let e1 = b
            .try_normalize(1e-12)
            .ok_or_else(|| Error::invalid("disc span vectors are parallel"))?;
        if radius <= 0.0 {
            return Err(Error::invalid("disc radius must be positive"));
        }
        Ok(TransverseDisc {
            center,
            span: [e0, e1],
            radius,
        })
    }

    pub fn normal(&self) -> Vector3<f64> {
        self.span[0].cross(&self.span[1])
    }

    /// Signed offset from the disc plane.
    pub fn side(&self, y: &Vector3<f64>) -> f64 {
        self.normal().dot(&(y - self.center))
    }

    pub fn coords(&self, y: &Vector3<f64>) -> Vector2<f64> {
        let d = y - self.center;
        Vector2::new(self.span[0].dot(&d), self.span[1].dot(&d))
    }

    pub fn point(&self, xi: &Vector2<f64>) -> Vector3<f64> {
        self.center + self.span[0] * xi[0] + self.span[1] * xi[1]
    }

    pub fn within_radius(&self, y: &Vector3<f64>) -> bool {
        self.coords(y).norm() <= self.radius
    }
}

#[derive(Debug, Clone)]
pub struct FlowOptions {
    /// Signed parameter budget; negative integrates backward.
    pub s_max: f64,
    pub rtol: f64,
    pub atol: f64,
    pub discs: Vec<TransverseDisc>,
    /// Stop at the first crossing of this disc (index into `discs`).
    pub stop_disc: Option<usize>,
    pub max_steps: usize,
}

impl FlowOptions {
    pub fn to(s_max: f64) -> FlowOptions {
        FlowOptions {
            s_max,
            rtol: 1e-10,
            atol: 1e-12,
            discs: Vec::new(),
            stop_disc: None,
            max_steps: 200_000,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FlowSample {
    pub s: f64,
    /// Base coordinates.
    pub y: Vector3<f64>,
    /// Velocity in base coordinates.
    pub v: Vector3<f64>,
    pub h: f64,
    /// |gamma'|_g |grad h|_g, the rate of weighted length (= dh/ds here).
    pub weighted_speed: f64,
}

#[derive(Debug, Clone)]
pub struct FlowSegment {
    pub chart: String,
    pub chart_idx: usize,
    pub origin: Vector3<f64>,
    pub rot: Matrix3<f64>,
    pub is_link: bool,
    /// Branch reference at the end of the segment, for link charts.
    pub sheet_end: Option<Complex64>,
}

#[derive(Debug, Clone)]
pub struct DensePiece {
    pub seg: usize,
    ode: OdePiece,
    /// Truncation range actually traversed (signed, may be reversed).
    pub s_from: f64,
    pub s_to: f64,
    /// Branch reference at the start of the piece, for link charts.
    pub w_start: Option<Complex64>,
}

impl DensePiece {
    pub fn local_at(&self, s: f64) -> Vector3<f64> {
        let y = self.ode.at(s);
        Vector3::new(y[0], y[1], y[2])
    }

    pub fn covers(&self, s: f64) -> bool {
        let (lo, hi) = if self.s_to >= self.s_from {
            (self.s_from, self.s_to)
        } else {
            (self.s_to, self.s_from)
        };
        s >= lo && s <= hi
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum FlowEventKind {
    Disc(usize),
    Handoff { from: String, to: String },
    LinkEntry { chart: String },
    Wrap { index: usize },
}

#[derive(Debug, Clone)]
pub struct FlowEvent {
    pub s: f64,
    pub y: Vector3<f64>,
    pub kind: FlowEventKind,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Termination {
    MaxLength,
    DomainExit,
    VelocityFloor,
    DiscStop(usize),
}

#[derive(Debug, Clone)]
pub struct Flowline {
    pub label: LatticeClass,
    pub samples: Vec<FlowSample>,
    pub segments: Vec<FlowSegment>,
    pub pieces: Vec<DensePiece>,
    pub events: Vec<FlowEvent>,
    pub termination: Termination,
    /// Accumulated identification shifts of the tracked section value.
    pub ambient_shift: DVector<f64>,
}

impl Flowline {
    pub fn s_end(&self) -> f64 {
        self.samples.last().map(|p| p.s).unwrap_or(0.0)
    }

    pub fn h_start(&self) -> f64 {
        self.samples.first().map(|p| p.h).unwrap_or(0.0)
    }

    pub fn h_end(&self) -> f64 {
        self.samples.last().map(|p| p.h).unwrap_or(0.0)
    }

    pub fn end_point(&self) -> Vector3<f64> {
        self.samples.last().map(|p| p.y).unwrap_or_default()
    }

    fn piece_for(&self, s: f64) -> Result<&DensePiece> {
        self.pieces
            .iter()
            .find(|p| p.covers(s))
            .ok_or_else(|| Error::OutOfDomain(format!("parameter {s} outside flowline range")))
    }

    pub fn position_local(&self, s: f64) -> Result<(usize, Vector3<f64>)> {
        let p = self.piece_for(s)?;
        Ok((p.seg, p.local_at(s)))
    }

    pub fn position_global(&self, s: f64) -> Result<Vector3<f64>> {
        let (seg, y) = self.position_local(s)?;
        let sg = &self.segments[seg];
        Ok(sg.origin + sg.rot * y)
    }

    /// Densely interpolated base-coordinate polyline.
    pub fn dense_points(&self, per_piece: usize) -> Vec<(f64, Vector3<f64>)> {
        let mut out = Vec::new();
        for p in &self.pieces {
            let sg = &self.segments[p.seg];
            for j in 0..=per_piece {
                let s = p.s_from + (p.s_to - p.s_from) * j as f64 / per_piece as f64;
                let y = p.local_at(s);
                out.push((s, sg.origin + sg.rot * y));
            }
        }
        out
    }

    /// One row per accepted sample: s, position, velocity, height, rate.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("s,y1,y2,y3,v1,v2,v3,h,weighted_speed\n");
        for p in &self.samples {
            s.push_str(&format!(
                "{},{},{},{},{},{},{},{},{}\n",
                p.s, p.y[0], p.y[1], p.y[2], p.v[0], p.v[1], p.v[2], p.h, p.weighted_speed
            ));
        }
        s
    }
}

/// Shared handles for flow computations over one scenario geometry.
#[derive(Clone, Copy)]
pub struct FlowContext<'a> {
    pub form: &'a AmbientForm,
    pub atlas: &'a Atlas,
}

struct Cursor {
    chart_idx: usize,
    /// Chart-local position.
    y: Vector3<f64>,
    /// Branch reference when the current chart is two-valued.
    w_ref: Option<Complex64>,
    /// Accumulated ambient shift from identification wraps.
    shift: DVector<f64>,
    shift_h: f64,
}

impl<'a> FlowContext<'a> {
    pub fn new(form: &'a AmbientForm, atlas: &'a Atlas) -> Self {
        FlowContext { form, atlas }
    }

    fn sheet_of(&self, cur: &Cursor) -> Sheet {
        match cur.w_ref {
            Some(w) => Sheet::NearW(w),
            None => Sheet::Single,
        }
    }

    fn chart(&self, idx: usize) -> &SectionChart {
        &self.atlas.charts[idx].chart
    }

    fn eval(&self, cur: &Cursor, y: &Vector3<f64>) -> Result<Jet> {
        self.chart(cur.chart_idx)
            .eval_jet(self.form, y, self.sheet_of(cur))
    }

    fn gradient(
        &self,
        label: &LatticeClass,
        cur: &Cursor,
        y: &Vector3<f64>,
    ) -> Result<(HeightGradient, Jet)> {
        let jet = self.eval(cur, y)?;
        let hg = height_gradient_from_jet(self.form, &jet, label, y)?;
        Ok((hg, jet))
    }

    fn global_of(&self, cur: &Cursor, y: &Vector3<f64>) -> Vector3<f64> {
        self.atlas.charts[cur.chart_idx].placement.to_global(y)
    }

    fn sample(
        &self,
        label: &LatticeClass,
        cur: &Cursor,
        s: f64,
    ) -> Result<FlowSample> {
        let (hg, _) = self.gradient(label, cur, &cur.y)?;
        let pl = &self.atlas.charts[cur.chart_idx].placement;
        Ok(FlowSample {
            s,
            y: pl.to_global(&cur.y),
            v: pl.vector_to_global(&hg.gradient),
            h: hg.value + cur.shift_h,
            weighted_speed: hg.speed * hg.speed,
        })
    }

    /// Integrates the gradient flowline of `label` from a base point. The
    /// sheet hint selects the branch when the start lies in a two-valued
    /// chart and is ignored otherwise.
    pub fn integrate(
        &self,
        label: &LatticeClass,
        start: &Vector3<f64>,
        sheet_hint: Sheet,
        opts: &FlowOptions,
    ) -> Result<Flowline> {
        if opts.s_max == 0.0 {
            return Err(Error::invalid("flow budget s_max must be nonzero"));
        }
        if let Some(i) = opts.stop_disc {
            if i >= opts.discs.len() {
                return Err(Error::invalid("stop_disc index out of range"));
            }
        }
        let chart_idx = self
            .atlas
            .find_chart(start, None)
            .ok_or_else(|| Error::OutOfDomain(format!("start point {start:?} is uncovered")))?;
        let y0 = self.atlas.charts[chart_idx].placement.to_local(start);
        let w_ref = if self.chart(chart_idx).is_link() {
            let z = Complex64::new(y0[0], y0[1]);
            Some(crate::sections::LinkChart::w_for_sheet(z, sheet_hint)?)
        } else {
            None
        };
        let mut cur = Cursor {
            chart_idx,
            y: y0,
            w_ref,
            shift: DVector::zeros(self.form.dim()),
            shift_h: 0.0,
        };
        let (hg0, _) = self.gradient(label, &cur, &cur.y)?;
        if hg0.speed < VELOCITY_FLOOR {
            return Err(Error::Degenerate {
                what: "flow start",
                detail: "the field vanishes at the starting point".into(),
            });
        }

        let stepper = Stepper::new(opts.rtol, opts.atol);
        let dir = opts.s_max.signum();
        let mut s = 0.0;
        let mut h = dir * 1e-3 * opts.s_max.abs().min(1.0);
        let h_floor = 1e-14 * opts.s_max.abs().max(1.0);

        let mut fl = Flowline {
            label: label.clone(),
            samples: vec![self.sample(label, &cur, 0.0)?],
            segments: vec![self.new_segment(cur.chart_idx)],
            pieces: Vec::new(),
            events: Vec::new(),
            termination: Termination::MaxLength,
            ambient_shift: cur.shift.clone(),
        };

        let mut k1: Option<DVector<f64>> = None;
        let mut steps = 0usize;
        'drive: loop {
            if (opts.s_max - s) * dir <= 0.0 {
                fl.termination = Termination::MaxLength;
                break;
            }
            steps += 1;
            if steps > opts.max_steps {
                return Err(Error::NoConvergence {
                    what: "flowline drive",
                    detail: format!("step budget exhausted at s = {s}"),
                });
            }
            if (opts.s_max - s).abs() < h.abs() {
                h = opts.s_max - s;
            }
            if h.abs() < h_floor {
                return Err(Error::Degenerate {
                    what: "flowline step size",
                    detail: format!("underflow at s = {s} (stiff or singular field)"),
                });
            }
            let mut rhs = |_sv: f64, yv: &DVector<f64>| -> Result<DVector<f64>> {
                let y = Vector3::new(yv[0], yv[1], yv[2]);
                let (hg, _) = self.gradient(label, &cur, &y)?;
                Ok(DVector::from_column_slice(hg.gradient.as_slice()))
            };
            let yv = DVector::from_column_slice(cur.y.as_slice());
            let k1v = match &k1 {
                Some(k) => k.clone(),
                None => rhs(s, &yv)?,
            };
            let out = match stepper.try_step(&mut rhs, s, &yv, &k1v, h) {
                Ok(out) if out.err <= 1.0 => out,
                Ok(out) => {
                    h *= dopri::step_factor(out.err).min(1.0);
                    continue;
                }
                Err(_) => {
                    h *= 0.5;
                    continue;
                }
            };
            let piece = stepper.dense(s, h, &yv, &out);
            let s1 = s + h;

            // event scan over the accepted span
            let hit = self.scan_events(label, &cur, &piece, s, s1, opts, &mut fl)?;
            let (s_stop, y_stop) = match &hit {
                Some(ev) => (ev.s, piece_local(&piece, ev.s)),
                None => (s1, Vector3::new(out.y1[0], out.y1[1], out.y1[2])),
            };

            fl.pieces.push(DensePiece {
                seg: fl.segments.len() - 1,
                ode: piece,
                s_from: s,
                s_to: s_stop,
                w_start: cur.w_ref,
            });

            // advance the cursor to the (possibly truncated) step end
            cur.y = y_stop;
            if let Some(w) = cur.w_ref {
                let z = Complex64::new(cur.y[0], cur.y[1]);
                cur.w_ref = Some(crate::sections::LinkChart::w_for_sheet(z, Sheet::NearW(w))?);
                fl.segments.last_mut().unwrap().sheet_end = cur.w_ref;
            }
            fl.samples.push(self.sample(label, &cur, s_stop)?);
            s = s_stop;
            h *= dopri::step_factor(out.err);
            k1 = if hit.is_none() { Some(out.k[6].clone()) } else { None };

            match hit {
                None => {}
                Some(ev) => match ev.action {
                    EventAction::Stop(term) => {
                        fl.termination = term;
                        break 'drive;
                    }
                    EventAction::Wrap(idx) => {
                        let ident = &self.atlas.identifications[idx];
                        let y_g = self.global_of(&cur, &cur.y);
                        let u_before = self.eval(&cur, &cur.y)?.u + &cur.shift;
                        let target = ident.apply(&y_g);
                        cur.shift += ident.ambient_offset.to_real();
                        cur.shift_h = self.form.pair_real(&label.to_real(), &cur.shift);
                        fl.events.push(FlowEvent {
                            s,
                            y: y_g,
                            kind: FlowEventKind::Wrap { index: idx },
                        });
                        self.rebase(&mut cur, &mut fl, &target, &u_before, None)?;
                        fl.ambient_shift = cur.shift.clone();
                    }
                    EventAction::Handoff { to, link_entry } => {
                        let y_g = self.global_of(&cur, &cur.y);
                        let u_before = self.eval(&cur, &cur.y)?.u + &cur.shift;
                        let from = self.chart(cur.chart_idx).id().to_string();
                        fl.events.push(FlowEvent {
                            s,
                            y: y_g,
                            kind: if link_entry {
                                FlowEventKind::LinkEntry {
                                    chart: self.chart(to).id().to_string(),
                                }
                            } else {
                                FlowEventKind::Handoff {
                                    from,
                                    to: self.chart(to).id().to_string(),
                                }
                            },
                        });
                        self.rebase(&mut cur, &mut fl, &y_g, &u_before, Some(to))?;
                    }
                },
            }
        }
        Ok(fl)
    }

    fn new_segment(&self, chart_idx: usize) -> FlowSegment {
        let pc = &self.atlas.charts[chart_idx];
        FlowSegment {
            chart: pc.chart.id().to_string(),
            chart_idx,
            origin: pc.placement.origin,
            rot: pc.placement.rot,
            is_link: pc.chart.is_link(),
            sheet_end: None,
        }
    }

    /// Moves the cursor to a base point in a new chart (or the target of a
    /// wrap), choosing the sheet that keeps the tracked value continuous.
    fn rebase(
        &self,
        cur: &mut Cursor,
        fl: &mut Flowline,
        y_global: &Vector3<f64>,
        u_expected: &DVector<f64>,
        force_chart: Option<usize>,
    ) -> Result<()> {
        let exclude = force_chart.is_none().then_some(cur.chart_idx);
        let idx = match force_chart {
            Some(i) => i,
            None => self
                .atlas
                .find_chart(y_global, exclude)
                .or_else(|| self.atlas.find_chart(y_global, None))
                .ok_or_else(|| {
                    Error::OutOfDomain(format!("no chart covers wrap target {y_global:?}"))
                })?,
        };
        let local = self.atlas.charts[idx].placement.to_local(y_global);
        let chart = self.chart(idx);
        let mut best: Option<(f64, Option<Complex64>)> = None;
        let sheets: &[Sheet] = if chart.is_link() {
            &[Sheet::Principal, Sheet::Second]
        } else {
            &[Sheet::Single]
        };
        for sh in sheets {
            let Ok(jet) = chart.eval_jet(self.form, &local, *sh) else {
                continue;
            };
            let d = ((jet.u + &cur.shift) - u_expected).amax();
            let w = chart
                .is_link()
                .then(|| crate::sections::LinkChart::w_for_sheet(Complex64::new(local[0], local[1]), *sh))
                .transpose()?;
            if best.as_ref().map_or(true, |(bd, _)| d < *bd) {
                best = Some((d, w));
            }
        }
        let (dist, w) = best.ok_or_else(|| Error::Degenerate {
            what: "chart handoff",
            detail: "target chart cannot be evaluated at the handoff point".into(),
        })?;
        let scale = u_expected.amax().max(1.0);
        if dist > 1e-6 * scale {
            return Err(Error::Degenerate {
                what: "chart handoff",
                detail: format!("section value jumps by {dist:.3e} at the handoff point"),
            });
        }
        cur.chart_idx = idx;
        cur.y = local;
        cur.w_ref = w;
        fl.segments.push(self.new_segment(idx));
        Ok(())
    }

    fn scan_events(
        &self,
        label: &LatticeClass,
        cur: &Cursor,
        piece: &OdePiece,
        s0: f64,
        s1: f64,
        opts: &FlowOptions,
        fl: &mut Flowline,
    ) -> Result<Option<LocatedEvent>> {
        let pl = &self.atlas.charts[cur.chart_idx].placement;
        let local = |s: f64| piece_local(piece, s);
        let global = |s: f64| pl.to_global(&local(s));

        let mut candidates: Vec<LocatedEvent> = Vec::new();

        // identification wraps: upward crossings of the trigger plane
        for (i, ident) in self.atlas.identifications.iter().enumerate() {
            let f = |s: f64| ident.side(&global(s));
            if let Some(se) = first_crossing(&f, s0, s1, Crossing::Up) {
                candidates.push(LocatedEvent {
                    s: se,
                    priority: 0,
                    action: EventAction::Wrap(i),
                });
            }
        }

        // entry into a two-valued chart region takes over from bulk charts
        if !self.chart(cur.chart_idx).is_link() {
            for (j, pc) in self.atlas.charts.iter().enumerate() {
                let SectionChart::Link(lc) = &pc.chart else {
                    continue;
                };
                let f = |s: f64| {
                    let yl = pc.placement.to_local(&global(s));
                    let r = (yl[0] * yl[0] + yl[1] * yl[1]).sqrt();
                    let mid = 0.5 * (lc.t_range.0 + lc.t_range.1);
                    let half = 0.5 * (lc.t_range.1 - lc.t_range.0);
                    (r - lc.r_max).max((yl[2] - mid).abs() - half)
                };
                if let Some(se) = first_crossing(&f, s0, s1, Crossing::Down) {
                    candidates.push(LocatedEvent {
                        s: se,
                        priority: 1,
                        action: EventAction::Handoff {
                            to: j,
                            link_entry: true,
                        },
                    });
                }
            }
        }

        // disc crossings (both directions, inside the radius)
        for (k, disc) in opts.discs.iter().enumerate() {
            let f = |s: f64| disc.side(&global(s));
            let mut lo = s0;
            while let Some(se) = first_crossing(&f, lo, s1, Crossing::Any) {
                if disc.within_radius(&global(se)) {
                    let trivial = opts.stop_disc == Some(k)
                        && se.abs() < 1e-9 * opts.s_max.abs().max(1.0);
                    if !trivial {
                        if opts.stop_disc == Some(k) {
                            candidates.push(LocatedEvent {
                                s: se,
                                priority: 2,
                                action: EventAction::Stop(Termination::DiscStop(k)),
                            });
                            break;
                        }
                        fl.events.push(FlowEvent {
                            s: se,
                            y: global(se),
                            kind: FlowEventKind::Disc(k),
                        });
                    }
                }
                // continue past this crossing for possible later ones
                lo = se + (s1 - s0) * 1e-6;
                if (s1 - lo) * (s1 - s0).signum() <= 0.0 {
                    break;
                }
            }
        }

        // leaving the current chart
        {
            let chart = self.chart(cur.chart_idx);
            let f = |s: f64| chart.domain_margin(&local(s));
            if let Some(se) = first_crossing(&f, s0, s1, Crossing::Down) {
                let y_exit = global(se);
                let next = self.atlas.find_chart(&y_exit, Some(cur.chart_idx));
                candidates.push(LocatedEvent {
                    s: se,
                    priority: 3,
                    action: match next {
                        Some(j) => EventAction::Handoff {
                            to: j,
                            link_entry: false,
                        },
                        None => EventAction::Stop(Termination::DomainExit),
                    },
                });
            }
        }

        // field decaying to zero
        {
            let speed_end = {
                let y = local(s1);
                self.gradient(label, cur, &y).map(|(hg, _)| hg.speed)
            };
            if matches!(&speed_end, Ok(v) if *v < VELOCITY_FLOOR * 1e3) || speed_end.is_err() {
                let f = |s: f64| {
                    let y = local(s);
                    match self.gradient(label, cur, &y) {
                        Ok((hg, _)) => hg.speed - VELOCITY_FLOOR,
                        Err(_) => -VELOCITY_FLOOR,
                    }
                };
                if let Some(se) = first_crossing(&f, s0, s1, Crossing::Down) {
                    candidates.push(LocatedEvent {
                        s: se,
                        priority: 4,
                        action: EventAction::Stop(Termination::VelocityFloor),
                    });
                }
            }
        }

        let dir = (s1 - s0).signum();
        candidates.sort_by(|a, b| {
            let da = a.s * dir;
            let db = b.s * dir;
            if (da - db).abs() < EVENT_TIE_TOL {
                a.priority.cmp(&b.priority)
            } else {
                da.partial_cmp(&db).unwrap()
            }
        });
        if candidates.len() > 1
            && (candidates[0].s - candidates[1].s).abs() < EVENT_TIE_TOL
        {
            log::debug!(
                "flow event tie at s = {}: kept priority {}, deferred priority {}",
                candidates[0].s,
                candidates[0].priority,
                candidates[1].priority
            );
        }
        Ok(candidates.into_iter().next())
    }

    /// Weighted length of a flowline: the integral of |gamma'|_g |grad h|_g
    /// in the flow parameter, by composite Simpson over each dense piece.
    pub fn weighted_length(&self, fl: &Flowline) -> Result<f64> {
        let mut total = 0.0;
        for p in &fl.pieces {
            let seg = &fl.segments[p.seg];
            let mut w_run = p.w_start;
            let n = 8;
            let hseg = (p.s_to - p.s_from) / n as f64;
            if hseg == 0.0 {
                continue;
            }
            let mut acc = 0.0;
            for j in 0..=n {
                let s = p.s_from + hseg * j as f64;
                let y = p.local_at(s);
                if let Some(w) = w_run {
                    let z = Complex64::new(y[0], y[1]);
                    w_run = Some(crate::sections::LinkChart::w_for_sheet(z, Sheet::NearW(w))?);
                }
                let cur_j = Cursor {
                    chart_idx: seg.chart_idx,
                    y,
                    w_ref: w_run,
                    shift: DVector::zeros(self.form.dim()),
                    shift_h: 0.0,
                };
                let (hg, _) = self.gradient(&fl.label, &cur_j, &y)?;
                let integrand = hg.speed * hg.speed;
                let weight = if j == 0 || j == n {
                    1.0
                } else if j % 2 == 1 {
                    4.0
                } else {
                    2.0
                };
                acc += weight * integrand;
            }
            total += acc * hseg / 3.0;
        }
        Ok(total)
    }

    /// First-return map through a transverse disc, in disc coordinates.
    pub fn return_map(
        &self,
        label: &LatticeClass,
        disc: &TransverseDisc,
        xi: &Vector2<f64>,
        sheet_hint: Sheet,
        opts: &FlowOptions,
    ) -> Result<(Vector2<f64>, Flowline)> {
        let mut o = opts.clone();
        o.discs = vec![disc.clone()];
        o.stop_disc = Some(0);
        let start = disc.point(xi);
        let fl = self.integrate(label, &start, sheet_hint, &o)?;
        match fl.termination {
            Termination::DiscStop(0) => {
                let hit = fl.end_point();
                Ok((disc.coords(&hit), fl))
            }
            ref t => Err(Error::not_found(format!(
                "no first return within the flow budget (ended with {t:?})"
            ))),
        }
    }

    /// Jacobian of the return map by centered five-point differences.
    pub fn return_map_derivative(
        &self,
        label: &LatticeClass,
        disc: &TransverseDisc,
        xi: &Vector2<f64>,
        sheet_hint: Sheet,
        opts: &FlowOptions,
    ) -> Result<Matrix2<f64>> {
        let h = 1e-6 * disc.radius;
        let mut m = Matrix2::zeros();
        for k in 0..2 {
            let shifted = |mult: f64| -> Result<Vector2<f64>> {
                let mut x = *xi;
                x[k] += mult * h;
                Ok(self.return_map(label, disc, &x, sheet_hint, opts)?.0)
            };
            let p2 = shifted(2.0)?;
            let p1 = shifted(1.0)?;
            let m1 = shifted(-1.0)?;
            let m2 = shifted(-2.0)?;
            let col = (m2 - p2 + (p1 - m1) * 8.0) / (12.0 * h);
            m.set_column(k, &col);
        }
        Ok(m)
    }
}

fn piece_local(piece: &OdePiece, s: f64) -> Vector3<f64> {
    let y = piece.at(s);
    Vector3::new(y[0], y[1], y[2])
}

enum EventAction {
    Stop(Termination),
    Wrap(usize),
    Handoff { to: usize, link_entry: bool },
}

struct LocatedEvent {
    s: f64,
    priority: u8,
    action: EventAction,
}

#[derive(Clone, Copy, PartialEq)]
enum Crossing {
    /// Strictly negative to strictly positive.
    Up,
    /// Strictly positive to strictly negative.
    Down,
    Any,
}

/// Earliest sign change of f on the span from s0 to s1 (either direction),
/// localized by bisection. Subsampling bounds the crossings it can see.
fn first_crossing(f: &dyn Fn(f64) -> f64, s0: f64, s1: f64, kind: Crossing) -> Option<f64> {
    if s0 == s1 {
        return None;
    }
    let n = EVENT_SUBSAMPLES;
    let mut prev_s = s0;
    let mut prev_v = f(s0);
    for j in 1..=n {
        let s = s0 + (s1 - s0) * j as f64 / n as f64;
        let v = f(s);
        let bracket = match kind {
            Crossing::Up => prev_v < 0.0 && v > 0.0,
            Crossing::Down => prev_v > 0.0 && v < 0.0,
            Crossing::Any => (prev_v < 0.0 && v > 0.0) || (prev_v > 0.0 && v < 0.0),
        };
        if bracket {
            let (mut a, mut b) = (prev_s, s);
            let (mut fa, _fb) = (prev_v, v);
            while (b - a).abs() > EVENT_S_TOL {
                let mid = 0.5 * (a + b);
                let fm = f(mid);
                if (fa < 0.0) == (fm < 0.0) {
                    a = mid;
                    fa = fm;
                } else {
                    b = mid;
                }
            }
            return Some(0.5 * (a + b));
        }
        prev_s = s;
        prev_v = v;
    }
    None
}
