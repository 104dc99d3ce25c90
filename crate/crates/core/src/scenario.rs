//! Built-in scenes. A [`Scene`] bundles the ambient lattice, the glued chart
//! atlas, and the budgets a graph search on it runs with; the builders below
//! are the fixtures the solvers and the command line ship with.

use nalgebra::{DVector, Matrix3, Vector3};
use num_complex::Complex64;

use crate::error::{Error, Result};
use crate::flow::FlowContext;
use crate::lattice::{AmbientForm, SearchBudget};
use crate::sections::atlas::{Atlas, Identification, PlacedChart, Placement};
use crate::sections::link::{ComplexPoly, LinkChart};
use crate::sections::{
    metric_from_jet, Box3, PolyChart, PolyTerm, SectionChart, SectionEval, Sheet, Window,
    WindowDims, WindowShape,
};

/// A complete problem instance: the lattice, the charted base, and the
/// numeric budgets searches on it use.
#[derive(Debug, Clone)]
pub struct Scene {
    pub name: String,
    pub form: AmbientForm,
    pub atlas: Atlas,
    /// Budget for irreducibility certificates along found flowlines.
    pub budget: SearchBudget,
    /// Coefficient box for the -2 classes the chart frames are checked
    /// against.
    pub uniqueness_box: i64,
}

impl Scene {
    pub fn ctx(&self) -> FlowContext<'_> {
        FlowContext::new(&self.form, &self.atlas)
    }

    /// The scene with every chart's family perturbation applied at weight t.
    pub fn at(&self, t: f64) -> Scene {
        let mut out = self.clone();
        for pc in &mut out.atlas.charts {
            pc.chart = pc.chart.resolved(t);
        }
        out
    }

    pub fn validate(&self) -> Result<()> {
        self.form.require_signature_3()?;
        self.budget.validate()?;
        if self.uniqueness_box < 1 {
            return Err(Error::invalid("uniqueness box must be at least 1"));
        }
        self.atlas.validate(&self.form, self.uniqueness_box)?;
        self.check_positivity()
    }

    /// Samples every chart on a grid and requires the induced metric to be
    /// positive there, on both branches where the chart is two-valued.
    fn check_positivity(&self) -> Result<()> {
        for pc in &self.atlas.charts {
            let (locals, sheets): (Vec<Vector3<f64>>, &[Sheet]) = match &pc.chart {
                SectionChart::Poly(c) => (poly_grid(&c.domain), &[Sheet::Single]),
                SectionChart::Link(c) => (link_grid(c), &[Sheet::Principal, Sheet::Second]),
            };
            for y in &locals {
                for &sheet in sheets {
                    let jet = pc.chart.eval_jet(&self.form, y, sheet)?;
                    metric_from_jet(&jet, &self.form, y).map_err(|e| match e {
                        Error::Positivity(msg) => {
                            Error::Positivity(format!("chart {}: {msg}", pc.chart.id()))
                        }
                        other => other,
                    })?;
                }
            }
        }
        Ok(())
    }
}

fn poly_grid(domain: &Box3) -> Vec<Vector3<f64>> {
    let n = 5;
    let mut pts = Vec::new();
    for a in 0..=n {
        for b in 0..=n {
            for c in 0..=n {
                let frac = |k: usize| k as f64 / n as f64;
                pts.push(Vector3::new(
                    domain.min[0] + frac(a) * (domain.max[0] - domain.min[0]),
                    domain.min[1] + frac(b) * (domain.max[1] - domain.min[1]),
                    domain.min[2] + frac(c) * (domain.max[2] - domain.min[2]),
                ));
            }
        }
    }
    pts
}

fn link_grid(chart: &LinkChart) -> Vec<Vector3<f64>> {
    let mut pts = Vec::new();
    for rf in [0.04, 0.35, 0.7, 1.0] {
        let r = rf * chart.r_max;
        for ia in 0..8 {
            let th = std::f64::consts::TAU * ia as f64 / 8.0;
            for it in 0..=4 {
                let t =
                    chart.t_range.0 + (chart.t_range.1 - chart.t_range.0) * it as f64 / 4.0;
                pts.push(Vector3::new(r * th.cos(), r * th.sin(), t));
            }
        }
    }
    pts
}

fn basis_vec(dim: usize, entries: &[(usize, f64)]) -> DVector<f64> {
    let mut v = DVector::zeros(dim);
    for &(i, x) in entries {
        v[i] = x;
    }
    v
}

fn term(vector: &DVector<f64>, coeff: f64, powers: [u32; 3]) -> PolyTerm {
    PolyTerm {
        vector: vector.clone(),
        coeff,
        powers,
        window: None,
    }
}

/// Polynomial terms of Re(c Z^{3/2}) s^{t_pow}, Taylor-expanded about a
/// regular point of the branch. Z = z0 + step (y1 + i y2) in chart
/// coordinates and s is the third coordinate; the branch continued is the
/// principal one at z0, and the series converges for |y1 + i y2| < |z0 /
/// step|. Coefficients below 1e-17 of the largest are dropped.
pub fn branch_series(
    c: Complex64,
    z0: Complex64,
    step: Complex64,
    degree: usize,
    t_pow: u32,
    vector: &DVector<f64>,
    window: Option<Window>,
) -> Vec<PolyTerm> {
    // a_k = c binom(3/2, k) z0^{3/2 - k} step^k
    let ratio = step / z0;
    let mut a = c * z0.powf(1.5);
    let mut radial = vec![a];
    for k in 1..=degree {
        let kf = k as f64;
        a = a * ratio * ((2.5 - kf) / kf);
        radial.push(a);
    }
    let scale = radial.iter().map(|v| v.norm()).fold(0.0, f64::max);
    let mut terms = Vec::new();
    for (k, ak) in radial.iter().enumerate() {
        let mut binom = 1.0f64;
        for b in 0..=k {
            if b > 0 {
                binom = binom * (k - b + 1) as f64 / b as f64;
            }
            let coeff = (ak * Complex64::i().powu(b as u32)).re * binom;
            if coeff.abs() > scale * 1e-17 {
                terms.push(PolyTerm {
                    vector: vector.clone(),
                    coeff,
                    powers: [(k - b) as u32, b as u32, t_pow],
                    window,
                });
            }
        }
    }
    terms
}

/// Rank-5 form diag(1, 1, 3) plus a rank-2 root block: the smallest shape
/// with a positive 3-frame and two independent -2 classes for labels.
fn split_form() -> AmbientForm {
    AmbientForm::new(vec![
        vec![1, 0, 0, 0, 0],
        vec![0, 1, 0, 0, 0],
        vec![0, 0, 3, 0, 0],
        vec![0, 0, 0, -2, 1],
        vec![0, 0, 0, 1, -2],
    ])
    .unwrap()
}

/// Periodic tube carrying one attracting closed flowline.
///
/// The base box is glued top to bottom by a vertical translation and the
/// section gains one lattice unit per pass, so the label (0,0,1,1,0) has
/// height sqrt(3) t - x^2 - y^2 up the tube: its flow spirals onto the axis
/// and closes up. The family term shears the section sideways, which moves
/// the closed orbit off the axis at rate t/2.
pub fn orbit_basic() -> Scene {
    let form = split_form();
    let dim = form.dim();
    let period = 3f64.sqrt();
    let e0 = basis_vec(dim, &[(0, 1.0)]);
    let e1 = basis_vec(dim, &[(1, 1.0)]);
    // unit length under the form
    let e2n = basis_vec(dim, &[(2, 1.0 / period)]);
    let a1 = basis_vec(dim, &[(3, 1.0)]);
    let a2 = basis_vec(dim, &[(4, 1.0)]);

    let chart = PolyChart {
        id: "tube".into(),
        domain: Box3 {
            min: [-0.4, -0.4, -0.15],
            max: [0.4, 0.4, period + 0.15],
        },
        linear_only: false,
        terms: vec![
            term(&e0, 1.0, [1, 0, 0]),
            term(&e1, 1.0, [0, 1, 0]),
            term(&e2n, 1.0, [0, 0, 1]),
            term(&a1, 0.5, [2, 0, 0]),
            term(&a1, 0.5, [0, 2, 0]),
        ],
        family_terms: vec![term(&a2, 1.0, [1, 0, 0])],
    };
    let atlas = Atlas {
        charts: vec![PlacedChart {
            chart: SectionChart::Poly(chart),
            placement: Placement::default(),
        }],
        identifications: vec![Identification {
            normal: Vector3::new(0.0, 0.0, 1.0),
            plane_offset: period,
            coord_offset: Vector3::new(0.0, 0.0, -period),
            ambient_offset: form.class(vec![0, 0, 1, 0, 0]).unwrap(),
        }],
    };
    Scene {
        name: "orbit-basic".into(),
        form,
        atlas,
        budget: SearchBudget {
            coeff_box: 3,
            max_summands: 4,
        },
        uniqueness_box: 2,
    }
}

const ARC_B0: f64 = -0.1;
const ARC_B2: f64 = -0.015;
const ARC_BETA_R: f64 = -0.1;
const ARC_TAU: f64 = -0.4;
const ARC_DEGREE: usize = 24;

/// Two parallel strands joined by one monotone arc.
///
/// Strand charts sit at x = -1/2 and x = +1/2 with branch coefficient
/// b(t) = -(1/10)(1 + 0.15 t^2) and opposite deltas, so the class a1 labels
/// an edge running from the left strand to the right one. The corridor
/// chart carries each branch's polynomial continuation; a far-centered
/// window (flat to machine precision over both overlap lenses) trades the
/// left continuation for the right one mid-corridor and switches in the
/// constant beta a1, which is the arc's entire height gain. The axis leans
/// into the second root (the tau terms) so that neither root of the block
/// stays positively parallel to a1 anywhere, keeping the label
/// irreducible. At y = t = 0 both mirror symmetries pin the arc to the
/// axis, and the t^2 growth of |b| makes that position isolated.
pub fn arc_pair() -> Scene {
    let form = split_form();
    let dim = form.dim();
    let n0 = (1.0 - 1.5 * ARC_TAU * ARC_TAU).sqrt();
    let e_axis = basis_vec(
        dim,
        &[(0, 1.0 / n0), (3, 0.5 * ARC_TAU / n0), (4, ARC_TAU / n0)],
    );
    let e_y = basis_vec(dim, &[(1, 1.0)]);
    let e_t = basis_vec(dim, &[(2, 1.0 / 3f64.sqrt())]);
    let a1 = basis_vec(dim, &[(3, 1.0)]);
    let b = ComplexPoly {
        coeffs: vec![
            Complex64::new(ARC_B0, 0.0),
            Complex64::new(0.0, 0.0),
            Complex64::new(ARC_B2, 0.0),
        ],
    };

    let left = LinkChart {
        id: "strand-left".into(),
        t_range: (-0.4, 0.4),
        r_max: 0.3,
        base_point: -0.5 * &e_axis,
        axes: [e_axis.clone(), e_y.clone(), e_t.clone()],
        family_axes: None,
        delta: form.class(vec![0, 0, 0, 1, 0]).unwrap(),
        b: b.clone(),
        family_b: None,
        eta: vec![],
        big_f: vec![],
    };
    let right = LinkChart {
        id: "strand-right".into(),
        t_range: (-0.4, 0.4),
        r_max: 0.3,
        base_point: 0.5 * &e_axis + ARC_BETA_R * &a1,
        axes: [-&e_axis, -&e_y, e_t.clone()],
        family_axes: None,
        delta: form.class(vec![0, 0, 0, -1, 0]).unwrap(),
        b: b.clone(),
        family_b: None,
        eta: vec![],
        big_f: vec![],
    };

    // exactly 0 for x <= -0.2 and exactly 1 for x >= 0.2 on the corridor
    let win = Window {
        center: [-5.0, 0.0, 0.0],
        r0: 4.86,
        r1: 5.14,
        shape: WindowShape::Rising,
        dims: WindowDims::Xy,
    };
    let z0 = Complex64::new(0.5, 0.0);
    let one = Complex64::new(1.0, 0.0);
    let mut terms = vec![
        term(&e_axis, 1.0, [1, 0, 0]),
        term(&e_y, 1.0, [0, 1, 0]),
        term(&e_t, 1.0, [0, 0, 1]),
        PolyTerm {
            vector: a1.clone(),
            coeff: ARC_BETA_R,
            powers: [0, 0, 0],
            window: Some(win),
        },
    ];
    for (pow, bk) in [(0u32, ARC_B0), (2u32, ARC_B2)] {
        let c = Complex64::new(bk, 0.0);
        // left continuation everywhere, handed off to the right one where
        // the window rises
        terms.extend(branch_series(c, z0, one, ARC_DEGREE, pow, &a1, None));
        terms.extend(branch_series(-c, z0, one, ARC_DEGREE, pow, &a1, Some(win)));
        terms.extend(branch_series(-c, z0, -one, ARC_DEGREE, pow, &a1, Some(win)));
    }
    let corridor = PolyChart {
        id: "corridor".into(),
        domain: Box3 {
            min: [-0.26, -0.10, -0.25],
            max: [0.26, 0.10, 0.25],
        },
        linear_only: false,
        terms,
        family_terms: vec![],
    };

    let atlas = Atlas {
        charts: vec![
            PlacedChart {
                chart: SectionChart::Link(left),
                placement: Placement {
                    origin: Vector3::new(-0.5, 0.0, 0.0),
                    rot: Matrix3::identity(),
                },
            },
            PlacedChart {
                chart: SectionChart::Link(right),
                placement: Placement {
                    origin: Vector3::new(0.5, 0.0, 0.0),
                    rot: Matrix3::from_diagonal(&Vector3::new(-1.0, -1.0, 1.0)),
                },
            },
            PlacedChart {
                chart: SectionChart::Poly(corridor),
                placement: Placement::default(),
            },
        ],
        identifications: vec![],
    };
    Scene {
        name: "arc-pair".into(),
        form,
        atlas,
        budget: SearchBudget {
            coeff_box: 3,
            max_summands: 4,
        },
        uniqueness_box: 2,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::flow::{FlowOptions, TransverseDisc};
    use crate::linkzone::{solve_terminating, SolveOptions};
    use nalgebra::Vector2;

    #[test]
    fn branch_series_matches_direct_eval() {
        let c = Complex64::new(-0.1, 0.04);
        let z0 = Complex64::new(0.5, 0.0);
        let step = Complex64::new(-0.9, 0.2);
        let v = basis_vec(5, &[(3, 1.0)]);
        let terms = branch_series(c, z0, step, 24, 2, &v, None);
        let t = 0.7f64;
        for i in 0..7 {
            for j in 0..5 {
                let x = -0.24 + 0.08 * i as f64;
                let y = -0.08 + 0.04 * j as f64;
                let z = z0 + step * Complex64::new(x, y);
                let direct = t * t * (c * z.powf(1.5)).re;
                let mut acc = 0.0;
                for term in &terms {
                    acc += term.coeff
                        * x.powi(term.powers[0] as i32)
                        * y.powi(term.powers[1] as i32)
                        * t.powi(term.powers[2] as i32);
                }
                assert!((acc - direct).abs() < 5e-9, "({x}, {y}): {acc} vs {direct}");
            }
        }
    }

    #[test]
    fn orbit_scene_validates() {
        let scene = orbit_basic();
        scene.validate().unwrap();
        scene.at(0.1).validate().unwrap();
    }

    #[test]
    fn orbit_return_map_contracts_onto_axis() {
        let scene = orbit_basic();
        let ctx = scene.ctx();
        let period = 3f64.sqrt();
        let disc = TransverseDisc::new(
            Vector3::new(0.0, 0.0, period / 2.0),
            Vector3::new(1.0, 0.0, 0.0),
            Vector3::new(0.0, 1.0, 0.0),
            0.3,
        )
        .unwrap();
        let label = scene.form.class(vec![0, 0, 1, 1, 0]).unwrap();
        let xi = Vector2::new(0.2, -0.1);
        let (r1, _) = ctx
            .return_map(&label, &disc, &xi, Sheet::Single, &FlowOptions::to(4.0))
            .unwrap();
        // one pass up the tube contracts the offset by e^{-2}
        let ratio = r1.norm() / xi.norm();
        let expect = (-2.0f64).exp();
        assert!(
            (ratio / expect - 1.0).abs() < 0.05,
            "contraction {ratio} vs {expect}"
        );
    }

    #[test]
    fn arc_scene_validates() {
        arc_pair().validate().unwrap();
    }

    #[test]
    fn arc_axis_height_rises_left_to_right() {
        let scene = arc_pair();
        let a1 = scene.form.class(vec![0, 0, 0, 1, 0]).unwrap();
        let idx = scene.atlas.chart_index("corridor").unwrap();
        let pc = scene.atlas.chart(idx);
        let mut prev = f64::NEG_INFINITY;
        for k in 0..=200 {
            let x = -0.26 + 0.52 * k as f64 / 200.0;
            let jet = pc
                .chart
                .eval_jet(&scene.form, &Vector3::new(x, 0.0, 0.0), Sheet::Single)
                .unwrap();
            let h = scene.form.pair_class_real(&a1, &jet.u);
            assert!(h > prev, "height dips at x = {x}");
            prev = h;
        }
        // strand heights: 0 on the left, -2 beta on the right
        for (id, want) in [("strand-left", 0.0), ("strand-right", 0.2)] {
            let idx = scene.atlas.chart_index(id).unwrap();
            let jet = scene
                .atlas
                .chart(idx)
                .chart
                .eval_jet(&scene.form, &Vector3::new(1e-9, 0.0, 0.0), Sheet::Principal)
                .unwrap();
            let h = scene.form.pair_class_real(&a1, &jet.u);
            assert!((h - want).abs() < 1e-8, "{id}: {h}");
        }
    }

    #[test]
    fn arc_terminating_rays_are_clean() {
        let scene = arc_pair();
        let opts = SolveOptions {
            s0: 2.5,
            ..SolveOptions::default()
        };
        for id in ["strand-left", "strand-right"] {
            let idx = scene.atlas.chart_index(id).unwrap();
            let SectionChart::Link(chart) = &scene.atlas.chart(idx).chart else {
                panic!("{id} is not a link chart");
            };
            for t in [-0.3, 0.0, 0.25] {
                let sol = solve_terminating(&scene.form, chart, t, 0, &opts).unwrap();
                assert_eq!(sol.s0, 2.5, "{id} t={t}: ladder halved the ray");
                let amp_want = 0.0225 * (1.0 + 0.15 * t * t).powi(2);
                assert!((sol.amp - amp_want).abs() < 1e-12, "{id} t={t}: {}", sol.amp);
                assert!(sol.theta.abs() < 1e-9, "{id} t={t}: theta {}", sol.theta);
                // the payload's metric term and the strand drift of b bend
                // the flowline slightly off the model ray, never by much
                let dev = sol
                    .h_c
                    .iter()
                    .map(|v| v.norm())
                    .chain(sol.h_r.iter().map(|v| v.abs()))
                    .fold(0.0, f64::max);
                assert!(dev < 1e-2, "{id} t={t}: correction {dev}");
            }
        }
    }
}
