//! Glued collections of charts. Each chart carries a rigid placement into a
//! shared base coordinate system; identifications wrap one boundary plane
//! onto another while shifting the ambient value by a lattice vector, which
//! is how closed strands and periodic directions are modeled.

use nalgebra::{DVector, Matrix3, Vector3};

use crate::error::{Error, Result};
use crate::lattice::{AmbientForm, LatticeClass};
use crate::sections::{Sheet, SectionChart, SectionEval};

const OVERLAP_TOL: f64 = 1e-8;
const ORTHONORMAL_TOL: f64 = 1e-12;

/// Rigid motion placing a chart's local coordinates into the base.
#[derive(Debug, Clone)]
pub struct Placement {
    pub origin: Vector3<f64>,
    pub rot: Matrix3<f64>,
}

impl Default for Placement {
    fn default() -> Self {
        Placement {
            origin: Vector3::zeros(),
            rot: Matrix3::identity(),
        }
    }
}

impl Placement {
    pub fn validate(&self) -> Result<()> {
        let defect = (self.rot.transpose() * self.rot - Matrix3::identity()).norm();
        if defect > ORTHONORMAL_TOL {
            return Err(Error::invalid(format!(
                "placement rotation is non-orthonormal (defect {defect:.2e})"
            )));
        }
        if self.rot.determinant() < 0.0 {
            return Err(Error::invalid("placement rotation reverses orientation"));
        }
        Ok(())
    }

    pub fn to_local(&self, global: &Vector3<f64>) -> Vector3<f64> {
        self.rot.transpose() * (global - self.origin)
    }

    pub fn to_global(&self, local: &Vector3<f64>) -> Vector3<f64> {
        self.origin + self.rot * local
    }

    pub fn vector_to_local(&self, v: &Vector3<f64>) -> Vector3<f64> {
        self.rot.transpose() * v
    }

    pub fn vector_to_global(&self, v: &Vector3<f64>) -> Vector3<f64> {
        self.rot * v
    }
}

#[derive(Debug, Clone)]
pub struct PlacedChart {
    pub chart: SectionChart,
    pub placement: Placement,
}

impl PlacedChart {
    pub fn contains_global(&self, y_global: &Vector3<f64>) -> bool {
        self.chart.contains(&self.placement.to_local(y_global))
    }

    /// All section values over a base point, one per sheet.
    fn values_global(&self, form: &AmbientForm, y_global: &Vector3<f64>) -> Vec<DVector<f64>> {
        let local = self.placement.to_local(y_global);
        let sheets: &[Sheet] = if self.chart.is_link() {
            &[Sheet::Principal, Sheet::Second]
        } else {
            &[Sheet::Single]
        };
        sheets
            .iter()
            .filter_map(|s| self.chart.eval_jet(form, &local, *s).ok().map(|j| j.u))
            .collect()
    }
}

/// One-directional gluing: when a path crosses the plane n.y = offset in the
/// +n direction, its base point jumps by coord_offset and the section value
/// it tracks gains ambient_offset.
#[derive(Debug, Clone)]
pub struct Identification {
    pub normal: Vector3<f64>,
    pub plane_offset: f64,
    pub coord_offset: Vector3<f64>,
    pub ambient_offset: LatticeClass,
}

impl Identification {
    pub fn side(&self, y_global: &Vector3<f64>) -> f64 {
        self.normal.dot(y_global) - self.plane_offset
    }

    pub fn apply(&self, y_global: &Vector3<f64>) -> Vector3<f64> {
        y_global + self.coord_offset
    }
}

#[derive(Debug, Clone)]
pub struct Atlas {
    pub charts: Vec<PlacedChart>,
    pub identifications: Vec<Identification>,
}

impl Atlas {
    pub fn chart_index(&self, id: &str) -> Option<usize> {
        self.charts.iter().position(|c| c.chart.id() == id)
    }

    pub fn chart(&self, idx: usize) -> &PlacedChart {
        &self.charts[idx]
    }

    /// Chart lookup for a base point. Link charts win over bulk charts so
    /// branch tracking starts as soon as a point is covered by one;
    /// `exclude` skips the chart a path is currently leaving.
    pub fn find_chart(&self, y_global: &Vector3<f64>, exclude: Option<usize>) -> Option<usize> {
        let eligible = |i: &usize| Some(*i) != exclude && self.charts[*i].contains_global(y_global);
        (0..self.charts.len())
            .filter(|i| self.charts[*i].chart.is_link())
            .find(eligible)
            .or_else(|| {
                (0..self.charts.len())
                    .filter(|i| !self.charts[*i].chart.is_link())
                    .find(eligible)
            })
    }

    pub fn validate(&self, form: &AmbientForm, uniqueness_box: i64) -> Result<()> {
        if self.charts.is_empty() {
            return Err(Error::invalid("atlas has no charts"));
        }
        for (i, pc) in self.charts.iter().enumerate() {
            for other in &self.charts[..i] {
                if other.chart.id() == pc.chart.id() {
                    return Err(Error::invalid(format!(
                        "duplicate chart id {}",
                        pc.chart.id()
                    )));
                }
            }
            pc.placement.validate()?;
            pc.chart.validate(form, uniqueness_box)?;
        }
        for ident in &self.identifications {
            let n = ident.normal.norm();
            if (n - 1.0).abs() > 1e-9 {
                return Err(Error::invalid(format!(
                    "identification normal has length {n}, expected unit"
                )));
            }
            if ident.ambient_offset.coords().len() != form.dim() {
                return Err(Error::invalid(
                    "identification ambient offset has wrong dimension",
                ));
            }
        }
        self.check_overlaps(form)?;
        self.check_identifications(form)
    }

    /// Deterministic local-grid sample of a chart, in base coordinates.
    fn sample_points(&self, idx: usize) -> Vec<Vector3<f64>> {
        let pc = &self.charts[idx];
        let mut pts = Vec::new();
        match &pc.chart {
            SectionChart::Poly(c) => {
                let n = 5;
                for a in 0..=n {
                    for b in 0..=n {
                        for cc in 0..=n {
                            let frac = |k: usize| k as f64 / n as f64;
                            let local = Vector3::new(
                                c.domain.min[0]
                                    + frac(a) * (c.domain.max[0] - c.domain.min[0]),
                                c.domain.min[1]
                                    + frac(b) * (c.domain.max[1] - c.domain.min[1]),
                                c.domain.min[2]
                                    + frac(cc) * (c.domain.max[2] - c.domain.min[2]),
                            );
                            pts.push(pc.placement.to_global(&local));
                        }
                    }
                }
            }
            SectionChart::Link(c) => {
                let (nr, na, nt) = (4, 8, 5);
                for ir in 1..=nr {
                    let r = c.r_max * ir as f64 / nr as f64;
                    for ia in 0..na {
                        let th = std::f64::consts::TAU * ia as f64 / na as f64;
                        for it in 0..=nt {
                            let t = c.t_range.0
                                + (c.t_range.1 - c.t_range.0) * it as f64 / nt as f64;
                            let local = Vector3::new(r * th.cos(), r * th.sin(), t);
                            pts.push(pc.placement.to_global(&local));
                        }
                    }
                }
            }
        }
        pts
    }

    fn agree_at(
        &self,
        form: &AmbientForm,
        p: &Vector3<f64>,
        i: usize,
        j: usize,
        shift: Option<&DVector<f64>>,
        q: &Vector3<f64>,
    ) -> Result<()> {
        let ui = self.charts[i].values_global(form, p);
        let uj = self.charts[j].values_global(form, q);
        if ui.is_empty() || uj.is_empty() {
            return Ok(());
        }
        let mut best = f64::INFINITY;
        for a in &ui {
            for b in &uj {
                let mut d = a - b;
                if let Some(s) = shift {
                    d -= s;
                }
                best = best.min(d.amax());
            }
        }
        let scale = ui[0].amax().max(1.0);
        if best > OVERLAP_TOL * scale {
            return Err(Error::invalid(format!(
                "charts {} and {} disagree by {best:.3e} near ({:.3}, {:.3}, {:.3})",
                self.charts[i].chart.id(),
                self.charts[j].chart.id(),
                p[0],
                p[1],
                p[2]
            )));
        }
        Ok(())
    }

    fn check_overlaps(&self, form: &AmbientForm) -> Result<()> {
        for i in 0..self.charts.len() {
            let pts = self.sample_points(i);
            for j in 0..self.charts.len() {
                if i == j {
                    continue;
                }
                for p in &pts {
                    if self.charts[j].contains_global(p) {
                        self.agree_at(form, p, i, j, None, p)?;
                    }
                }
            }
        }
        Ok(())
    }

    fn check_identifications(&self, form: &AmbientForm) -> Result<()> {
        for ident in &self.identifications {
            let shift = ident.ambient_offset.to_real();
            let mut checked = 0usize;
            for i in 0..self.charts.len() {
                for p in self.sample_points(i) {
                    // project the sample onto the trigger plane
                    let p_on = p - ident.normal * ident.side(&p);
                    if !self.charts[i].contains_global(&p_on) {
                        continue;
                    }
                    let q = ident.apply(&p_on);
                    let Some(j) = self.find_chart(&q, None) else {
                        return Err(Error::invalid(format!(
                            "identification image ({:.3}, {:.3}, {:.3}) is uncovered",
                            q[0], q[1], q[2]
                        )));
                    };
                    self.agree_at(form, &p_on, i, j, Some(&shift), &q)?;
                    checked += 1;
                }
            }
            if checked == 0 {
                return Err(Error::invalid(
                    "identification plane does not meet any chart",
                ));
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sections::poly::{PolyChart, PolyTerm};
    use crate::sections::Box3;

    fn unit(dim: usize, i: usize) -> DVector<f64> {
        let mut v = DVector::zeros(dim);
        v[i] = 1.0;
        v
    }

    fn form4() -> AmbientForm {
        AmbientForm::new(vec![
            vec![1, 0, 0, 0],
            vec![0, 1, 0, 0],
            vec![0, 0, 1, 0],
            vec![0, 0, 0, -2],
        ])
        .unwrap()
    }

    fn linear_chart(id: &str, half: f64, slope: &DVector<f64>) -> SectionChart {
        let mut terms: Vec<PolyTerm> = (0..3)
            .map(|i| PolyTerm {
                vector: unit(4, i),
                coeff: 1.0,
                powers: [u32::from(i == 0), u32::from(i == 1), u32::from(i == 2)],
                window: None,
            })
            .collect();
        terms.push(PolyTerm {
            vector: slope.clone(),
            coeff: 1.0,
            powers: [0, 0, 1],
            window: None,
        });
        SectionChart::Poly(PolyChart {
            id: id.into(),
            domain: Box3::cube(half),
            linear_only: true,
            terms,
            family_terms: vec![],
        })
    }

    #[test]
    fn translated_placement_roundtrip_and_overlap() {
        let form = form4();
        let slope = unit(4, 3) * 0.5;
        // same affine section seen from two origins: chart b's local frame
        // is shifted by (1,0,0), its terms adjusted to match
        let chart_a = linear_chart("a", 1.0, &slope);
        let chart_b = {
            let mut c = match linear_chart("b", 1.0, &slope) {
                SectionChart::Poly(c) => c,
                _ => unreachable!(),
            };
            // u_b(local) = u_a(local + origin): add the constant column
            c.terms.push(PolyTerm {
                vector: unit(4, 0),
                coeff: 1.0,
                powers: [0, 0, 0],
                window: None,
            });
            SectionChart::Poly(c)
        };
        let atlas = Atlas {
            charts: vec![
                PlacedChart {
                    chart: chart_a,
                    placement: Placement::default(),
                },
                PlacedChart {
                    chart: chart_b,
                    placement: Placement {
                        origin: Vector3::new(1.0, 0.0, 0.0),
                        rot: Matrix3::identity(),
                    },
                },
            ],
            identifications: vec![],
        };
        atlas.validate(&form, 2).unwrap();
        let g = Vector3::new(1.4, 0.2, -0.3);
        let idx = atlas.find_chart(&g, None).unwrap();
        let local = atlas.chart(idx).placement.to_local(&g);
        let back = atlas.chart(idx).placement.to_global(&local);
        assert!((back - g).norm() < 1e-14);
    }

    #[test]
    fn mismatched_overlap_is_rejected() {
        let form = form4();
        let atlas = Atlas {
            charts: vec![
                PlacedChart {
                    chart: linear_chart("a", 1.0, &(unit(4, 3) * 0.5)),
                    placement: Placement::default(),
                },
                PlacedChart {
                    chart: linear_chart("b", 1.0, &(unit(4, 3) * 0.7)),
                    placement: Placement::default(),
                },
            ],
            identifications: vec![],
        };
        assert!(atlas.validate(&form, 2).is_err());
    }

    #[test]
    fn periodic_identification_consistency() {
        let form = form4();
        // u = (y1, y2, y3, y3); wrapping y3 = 1 back to y3 = -1 must shift
        // the tracked value by u(p) - u(p') = (0, 0, 2, 2)
        let chart = linear_chart("cyl", 1.0, &unit(4, 3));
        let good = Atlas {
            charts: vec![PlacedChart {
                chart: chart.clone(),
                placement: Placement::default(),
            }],
            identifications: vec![Identification {
                normal: Vector3::new(0.0, 0.0, 1.0),
                plane_offset: 1.0,
                coord_offset: Vector3::new(0.0, 0.0, -2.0),
                ambient_offset: form.class(vec![0, 0, 2, 2]).unwrap(),
            }],
        };
        good.validate(&form, 2).unwrap();
        let bad = Atlas {
            identifications: vec![Identification {
                ambient_offset: form.class(vec![0, 0, 1, 1]).unwrap(),
                ..good.identifications[0].clone()
            }],
            ..good.clone()
        };
        assert!(bad.validate(&form, 2).is_err());
    }

    #[test]
    fn rotated_placement_validation() {
        let mut p = Placement::default();
        p.rot[(0, 0)] = 1.1;
        assert!(p.validate().is_err());
        let c = std::f64::consts::FRAC_PI_3.cos();
        let s = std::f64::consts::FRAC_PI_3.sin();
        let rot = Matrix3::new(c, -s, 0.0, s, c, 0.0, 0.0, 0.0, 1.0);
        let p = Placement {
            origin: Vector3::new(0.5, -0.2, 0.0),
            rot,
        };
        p.validate().unwrap();
        let v = Vector3::new(0.3, 0.7, -0.1);
        assert!((p.vector_to_global(&p.vector_to_local(&v)) - v).norm() < 1e-14);
    }
}
