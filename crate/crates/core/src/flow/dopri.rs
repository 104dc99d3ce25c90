//! Embedded Dormand-Prince 5(4) stepper with quartic dense output. The
//! right-hand side may fail (chart boundaries); failed stages reject the
//! step so the driver can shrink it.

use nalgebra::DVector;

use crate::error::{Error, Result};

const C: [f64; 7] = [0.0, 0.2, 0.3, 0.8, 8.0 / 9.0, 1.0, 1.0];

const A2: [f64; 1] = [0.2];
const A3: [f64; 2] = [3.0 / 40.0, 9.0 / 40.0];
const A4: [f64; 3] = [44.0 / 45.0, -56.0 / 15.0, 32.0 / 9.0];
const A5: [f64; 4] = [
    19372.0 / 6561.0,
    -25360.0 / 2187.0,
    64448.0 / 6561.0,
    -212.0 / 729.0,
];
const A6: [f64; 5] = [
    9017.0 / 3168.0,
    -355.0 / 33.0,
    46732.0 / 5247.0,
    49.0 / 176.0,
    -5103.0 / 18656.0,
];
/// Fifth-order weights; the last row of the tableau (FSAL).
const A7: [f64; 6] = [
    35.0 / 384.0,
    0.0,
    500.0 / 1113.0,
    125.0 / 192.0,
    -2187.0 / 6784.0,
    11.0 / 84.0,
];
const B4: [f64; 7] = [
    5179.0 / 57600.0,
    0.0,
    7571.0 / 16695.0,
    393.0 / 640.0,
    -92097.0 / 339200.0,
    187.0 / 2100.0,
    1.0 / 40.0,
];
const D: [f64; 7] = [
    -12715105075.0 / 11282082432.0,
    0.0,
    87487479700.0 / 32700410799.0,
    -10690763975.0 / 1880347072.0,
    701980252875.0 / 199316789632.0,
    -1453857185.0 / 822651844.0,
    69997945.0 / 29380423.0,
];

pub type Rhs<'a> = dyn FnMut(f64, &DVector<f64>) -> Result<DVector<f64>> + 'a;

/// One accepted step, interpolable on [s0, s1] (s1 < s0 when integrating
/// backward).
#[derive(Debug, Clone)]
pub struct OdePiece {
    pub s0: f64,
    pub s1: f64,
    pub rcont: [DVector<f64>; 5],
}

impl OdePiece {
    pub fn contains(&self, s: f64) -> bool {
        let (lo, hi) = if self.s1 >= self.s0 {
            (self.s0, self.s1)
        } else {
            (self.s1, self.s0)
        };
        s >= lo && s <= hi
    }

    pub fn at(&self, s: f64) -> DVector<f64> {
        let th = (s - self.s0) / (self.s1 - self.s0);
        let th1 = 1.0 - th;
        let [r1, r2, r3, r4, r5] = &self.rcont;
        r1 + (r2 + (r3 + (r4 + r5 * th1) * th) * th1) * th
    }
}

pub struct StepOutcome {
    pub y1: DVector<f64>,
    pub err: f64,
    pub k: [DVector<f64>; 7],
}

#[derive(Debug, Clone, Copy)]
pub struct Stepper {
    pub rtol: f64,
    pub atol: f64,
}

impl Stepper {
    pub fn new(rtol: f64, atol: f64) -> Stepper {
        Stepper { rtol, atol }
    }

    /// One trial step from (s, y) with increment h; k1 = f(s, y) supplied by
    /// the caller (FSAL).
    pub fn try_step(
        &self,
        f: &mut Rhs,
        s: f64,
        y: &DVector<f64>,
        k1: &DVector<f64>,
        h: f64,
    ) -> Result<StepOutcome> {
        let stage = |acc: &[(&DVector<f64>, f64)]| {
            let mut v = y.clone();
            for (k, a) in acc {
                v.axpy(h * a, k, 1.0);
            }
            v
        };
        let k2 = f(s + C[1] * h, &stage(&[(k1, A2[0])]))?;
        let k3 = f(s + C[2] * h, &stage(&[(k1, A3[0]), (&k2, A3[1])]))?;
        let k4 = f(
            s + C[3] * h,
            &stage(&[(k1, A4[0]), (&k2, A4[1]), (&k3, A4[2])]),
        )?;
        let k5 = f(
            s + C[4] * h,
            &stage(&[(k1, A5[0]), (&k2, A5[1]), (&k3, A5[2]), (&k4, A5[3])]),
        )?;
        let k6 = f(
            s + C[5] * h,
            &stage(&[
                (k1, A6[0]),
                (&k2, A6[1]),
                (&k3, A6[2]),
                (&k4, A6[3]),
                (&k5, A6[4]),
            ]),
        )?;
        let y1 = stage(&[
            (k1, A7[0]),
            (&k3, A7[2]),
            (&k4, A7[3]),
            (&k5, A7[4]),
            (&k6, A7[5]),
        ]);
        let k7 = f(s + h, &y1)?;
        let ks = [k1.clone(), k2, k3, k4, k5, k6, k7];
        // embedded fourth-order difference
        let mut e = DVector::zeros(y.len());
        for (i, k) in ks.iter().enumerate() {
            let w = if i < 6 { A7.get(i).copied().unwrap_or(0.0) } else { 0.0 } - B4[i];
            if w != 0.0 {
                e.axpy(h * w, k, 1.0);
            }
        }
        let mut err = 0.0;
        for i in 0..y.len() {
            let sc = self.atol + self.rtol * y[i].abs().max(y1[i].abs());
            let q = e[i] / sc;
            err += q * q;
        }
        let err = (err / y.len() as f64).sqrt();
        Ok(StepOutcome { y1, err, k: ks })
    }

    pub fn dense(&self, s: f64, h: f64, y: &DVector<f64>, out: &StepOutcome) -> OdePiece {
        let dy = &out.y1 - y;
        let r1 = y.clone();
        let r3 = &out.k[0] * h - &dy;
        let r4 = &dy - &out.k[6] * h - &r3;
        let mut r5 = DVector::zeros(y.len());
        for (i, k) in out.k.iter().enumerate() {
            if D[i] != 0.0 {
                r5.axpy(h * D[i], k, 1.0);
            }
        }
        OdePiece {
            s0: s,
            s1: s + h,
            rcont: [r1, dy, r3, r4, r5],
        }
    }
}

pub fn step_factor(err: f64) -> f64 {
    if err == 0.0 {
        5.0
    } else {
        (0.9 * err.powf(-0.2)).clamp(0.2, 5.0)
    }
}

#[derive(Debug)]
pub struct OdeSolution {
    pub pieces: Vec<OdePiece>,
    pub s_end: f64,
    pub y_end: DVector<f64>,
    pub accepted: usize,
    pub rejected: usize,
}

impl OdeSolution {
    pub fn at(&self, s: f64) -> DVector<f64> {
        let p = self
            .pieces
            .iter()
            .find(|p| p.contains(s))
            .unwrap_or_else(|| {
                if (s - self.s_end).abs() <= (self.s_end - self.pieces[0].s0).abs() * 1e-12 {
                    self.pieces.last().unwrap()
                } else {
                    panic!("interpolation query {s} outside solution range")
                }
            });
        p.at(s)
    }
}

/// Event-free adaptive drive from s0 to s_end (either direction).
pub fn solve_ode(
    f: &mut Rhs,
    s0: f64,
    y0: DVector<f64>,
    s_end: f64,
    rtol: f64,
    atol: f64,
) -> Result<OdeSolution> {
    if s_end == s0 {
        return Err(Error::invalid("integration span is empty"));
    }
    let stepper = Stepper::new(rtol, atol);
    let dir = (s_end - s0).signum();
    let mut s = s0;
    let mut y = y0;
    let mut k1 = f(s, &y)?;
    let mut h = dir * 1e-3 * (s_end - s0).abs();
    let mut pieces = Vec::new();
    let mut accepted = 0;
    let mut rejected = 0;
    let h_floor = 1e-14 * (s_end - s0).abs().max(1.0);
    while (s_end - s) * dir > 0.0 {
        if (s_end - s).abs() < h.abs() {
            h = s_end - s;
        }
        if h.abs() < h_floor {
            return Err(Error::Degenerate {
                what: "integrator step size",
                detail: format!("underflow at s = {s}"),
            });
        }
        match stepper.try_step(f, s, &y, &k1, h) {
            Ok(out) if out.err <= 1.0 => {
                pieces.push(stepper.dense(s, h, &y, &out));
                s += h;
                y = out.y1;
                k1 = out.k[6].clone();
                accepted += 1;
                h *= step_factor(out.err);
            }
            Ok(out) => {
                rejected += 1;
                h *= step_factor(out.err).min(1.0);
            }
            Err(_) => {
                rejected += 1;
                h *= 0.5;
            }
        }
        if accepted + rejected > 1_000_000 {
            return Err(Error::NoConvergence {
                what: "ode drive",
                detail: format!("step budget exhausted at s = {s}"),
            });
        }
    }
    Ok(OdeSolution {
        pieces,
        s_end,
        y_end: y,
        accepted,
        rejected,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fifth_order_on_smooth_problem() {
        // y' = y, closed form e^s
        let mut f = |_s: f64, y: &DVector<f64>| Ok(y.clone());
        let sol = solve_ode(&mut f, 0.0, DVector::from_vec(vec![1.0]), 2.0, 1e-10, 1e-12)
            .unwrap();
        assert!((sol.y_end[0] - 2.0f64.exp()).abs() < 1e-9);
    }

    #[test]
    fn dense_output_matches_closed_form() {
        // y = (sin s, cos s)
        let mut f = |_s: f64, y: &DVector<f64>| Ok(DVector::from_vec(vec![y[1], -y[0]]));
        let sol = solve_ode(
            &mut f,
            0.0,
            DVector::from_vec(vec![0.0, 1.0]),
            3.0,
            1e-9,
            1e-11,
        )
        .unwrap();
        let mut worst: f64 = 0.0;
        for p in &sol.pieces {
            for j in 0..=16 {
                let s = p.s0 + (p.s1 - p.s0) * j as f64 / 16.0;
                let y = p.at(s);
                worst = worst.max((y[0] - s.sin()).abs()).max((y[1] - s.cos()).abs());
            }
        }
        assert!(worst < 1e-8, "dense error {worst}");
    }

    #[test]
    fn backward_integration() {
        let mut f = |s: f64, _y: &DVector<f64>| Ok(DVector::from_vec(vec![2.0 * s]));
        let sol = solve_ode(&mut f, 1.0, DVector::from_vec(vec![1.0]), -1.0, 1e-10, 1e-12)
            .unwrap();
        assert!((sol.y_end[0] - 1.0).abs() < 1e-10);
        let mid = sol.at(0.5);
        assert!((mid[0] - 0.25).abs() < 1e-9);
    }

    #[test]
    fn model_square_root_field() {
        // the two-component field (2 Re sqrt(z), 2 Im sqrt(z)) along the
        // positive axis, started on the known parabola
        let mut f = |_s: f64, y: &DVector<f64>| {
            let z = num_complex::Complex64::new(y[0], y[1]);
            let v = z.sqrt() * 2.0;
            Ok(DVector::from_vec(vec![v.re, v.im]))
        };
        let s0 = 0.01;
        let sol = solve_ode(
            &mut f,
            s0,
            DVector::from_vec(vec![s0 * s0, 0.0]),
            1.0,
            1e-12,
            1e-14,
        )
        .unwrap();
        let mut worst: f64 = 0.0;
        for p in &sol.pieces {
            for j in 0..=8 {
                let s = p.s0 + (p.s1 - p.s0) * j as f64 / 8.0;
                let y = p.at(s);
                worst = worst.max((y[0] - s * s).abs()).max(y[1].abs());
            }
        }
        assert!(worst < 1e-8, "square-root field error {worst}");
    }

    #[test]
    fn rhs_failure_shrinks_step_until_underflow() {
        // field blows an error past s = 0.5; the driver must not loop
        let mut f = |s: f64, _y: &DVector<f64>| {
            if s > 0.5 {
                Err(Error::OutOfDomain("wall".into()))
            } else {
                Ok(DVector::from_vec(vec![1.0]))
            }
        };
        let err = solve_ode(&mut f, 0.0, DVector::from_vec(vec![0.0]), 1.0, 1e-8, 1e-10)
            .unwrap_err();
        assert!(matches!(err, Error::Degenerate { .. }));
    }
}
