//! Compact-support radial windows built on the quintic smoothstep, used to
//! localize chart payload terms. C^2 with flat ends, so windowed sections
//! keep two continuous derivatives across the support boundary.

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// 6x^5 - 15x^4 + 10x^3 on [0,1]; first and second derivative vanish at
/// both ends.
pub fn smoothstep(x: f64) -> f64 {
    if x <= 0.0 {
        0.0
    } else if x >= 1.0 {
        1.0
    } else {
        x * x * x * (10.0 + x * (-15.0 + 6.0 * x))
    }
}

pub fn smoothstep_d(x: f64) -> f64 {
    if x <= 0.0 || x >= 1.0 {
        0.0
    } else {
        30.0 * x * x * (1.0 - x) * (1.0 - x)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WindowShape {
    /// 0 inside r0, 1 outside r1.
    Rising,
    /// 1 inside r0, 0 outside r1.
    Falling,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WindowDims {
    /// Radius in all three chart coordinates.
    All3,
    /// Cylindrical: radius in (y1, y2) only.
    Xy,
}

/// Radial window w(|P(y - center)|) with quintic smoothstep transition on
/// [r0, r1].
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Window {
    pub center: [f64; 3],
    pub r0: f64,
    pub r1: f64,
    pub shape: WindowShape,
    pub dims: WindowDims,
}

impl Window {
    pub fn validate(&self) -> Result<()> {
        if !(self.r0 >= 0.0 && self.r1 > self.r0) {
            return Err(Error::invalid(format!(
                "window radii need 0 <= r0 < r1, got [{}, {}]",
                self.r0, self.r1
            )));
        }
        Ok(())
    }

    fn radial(&self, y: &Vector3<f64>) -> (f64, Vector3<f64>) {
        let mut d = y - Vector3::new(self.center[0], self.center[1], self.center[2]);
        if self.dims == WindowDims::Xy {
            d[2] = 0.0;
        }
        (d.norm(), d)
    }

    pub fn value(&self, y: &Vector3<f64>) -> f64 {
        let (rho, _) = self.radial(y);
        let s = smoothstep((rho - self.r0) / (self.r1 - self.r0));
        match self.shape {
            WindowShape::Rising => s,
            WindowShape::Falling => 1.0 - s,
        }
    }

    /// Value and gradient with respect to y.
    pub fn jet(&self, y: &Vector3<f64>) -> (f64, Vector3<f64>) {
        let (rho, d) = self.radial(y);
        let width = self.r1 - self.r0;
        let x = (rho - self.r0) / width;
        let s = smoothstep(x);
        let (val, sign) = match self.shape {
            WindowShape::Rising => (s, 1.0),
            WindowShape::Falling => (1.0 - s, -1.0),
        };
        if x <= 0.0 || x >= 1.0 || rho == 0.0 {
            return (val, Vector3::zeros());
        }
        let grad = d * (sign * smoothstep_d(x) / (width * rho));
        (val, grad)
    }

    /// Hessian, for diagnostics; C^2 everywhere (flat ends of the quintic).
    pub fn hessian(&self, y: &Vector3<f64>) -> Matrix3<f64> {
        let (rho, d) = self.radial(y);
        let width = self.r1 - self.r0;
        let x = (rho - self.r0) / width;
        if x <= 0.0 || x >= 1.0 || rho == 0.0 {
            return Matrix3::zeros();
        }
        let sign = match self.shape {
            WindowShape::Rising => 1.0,
            WindowShape::Falling => -1.0,
        };
        let sd = smoothstep_d(x);
        let sdd = 60.0 * x * (1.0 - x) * (1.0 - 2.0 * x);
        let n = d / rho;
        let mut proj = Matrix3::identity();
        if self.dims == WindowDims::Xy {
            proj[(2, 2)] = 0.0;
        }
        let nnt = n * n.transpose();
        (nnt * (sdd / (width * width)) + (proj - nnt) * (sd / (width * rho))) * sign
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn smoothstep_ends_flat() {
        assert_eq!(smoothstep(0.0), 0.0);
        assert_eq!(smoothstep(1.0), 1.0);
        assert_eq!(smoothstep(0.5), 0.5);
        for x in [0.0, 1.0] {
            assert_eq!(smoothstep_d(x), 0.0);
        }
        // second derivative vanishes at the ends too
        let h = 1e-4;
        for x in [0.0f64, 1.0] {
            let d2 = (smoothstep_d((x + h).min(1.0)) - smoothstep_d((x - h).max(0.0))) / h;
            assert!(d2.abs() < 1e-2, "second derivative not flat: {d2}");
        }
    }

    #[test]
    fn window_gradient_matches_fd() {
        let w = Window {
            center: [0.3, -0.2, 0.1],
            r0: 0.2,
            r1: 0.9,
            shape: WindowShape::Falling,
            dims: WindowDims::All3,
        };
        let pts = [
            Vector3::new(0.5, 0.1, 0.2),
            Vector3::new(0.9, -0.4, 0.5),
            Vector3::new(0.31, -0.19, 0.11),
        ];
        for y in pts {
            let (_, g) = w.jet(&y);
            for k in 0..3 {
                let h = 1e-6;
                let mut yp = y;
                let mut ym = y;
                yp[k] += h;
                ym[k] -= h;
                let fd = (w.value(&yp) - w.value(&ym)) / (2.0 * h);
                assert!((g[k] - fd).abs() < 1e-8, "grad mismatch {} vs {}", g[k], fd);
            }
        }
    }

    #[test]
    fn window_hessian_matches_fd_and_xy_ignores_z() {
        let w = Window {
            center: [0.0, 0.0, 0.0],
            r0: 0.1,
            r1: 1.0,
            shape: WindowShape::Rising,
            dims: WindowDims::Xy,
        };
        let y = Vector3::new(0.4, 0.2, 7.0);
        assert_eq!(w.value(&y), w.value(&Vector3::new(0.4, 0.2, -3.0)));
        let hess = w.hessian(&y);
        let h = 1e-5;
        for i in 0..3 {
            for j in 0..3 {
                let mut ypp = y;
                ypp[i] += h;
                ypp[j] += h;
                let mut ypm = y;
                ypm[i] += h;
                ypm[j] -= h;
                let mut ymp = y;
                ymp[i] -= h;
                ymp[j] += h;
                let mut ymm = y;
                ymm[i] -= h;
                ymm[j] -= h;
                let fd =
                    (w.value(&ypp) - w.value(&ypm) - w.value(&ymp) + w.value(&ymm)) / (4.0 * h * h);
                assert!(
                    (hess[(i, j)] - fd).abs() < 1e-6,
                    "hessian ({i},{j}): {} vs {}",
                    hess[(i, j)],
                    fd
                );
            }
        }
    }

    #[test]
    fn flat_regions_and_center() {
        let w = Window {
            center: [0.0, 0.0, 0.0],
            r0: 0.5,
            r1: 1.0,
            shape: WindowShape::Falling,
            dims: WindowDims::All3,
        };
        let (v, g) = w.jet(&Vector3::new(0.1, 0.1, 0.0));
        assert_eq!(v, 1.0);
        assert_eq!(g, Vector3::zeros());
        let (v, g) = w.jet(&Vector3::new(2.0, 0.0, 0.0));
        assert_eq!(v, 0.0);
        assert_eq!(g, Vector3::zeros());
        let (v, g) = w.jet(&Vector3::zeros());
        assert_eq!(v, 1.0);
        assert_eq!(g, Vector3::zeros());
        assert!(Window { r0: 0.5, r1: 0.5, ..w }.validate().is_err());
    }
}
