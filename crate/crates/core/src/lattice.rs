//! Exact arithmetic for an integer bilinear form of signature (3,k),
//! its -2 classes, projections to a positive 3-frame, and the budgeted
//! irreducibility test for class decompositions.

use nalgebra::{DMatrix, DVector, Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Tolerance below which an eigenvalue of the Gram matrix counts as zero.
const SIGNATURE_EIGEN_TOL: f64 = 1e-9;

/// Positive-multiple threshold for decomposition coefficients.
const LAMBDA_TOL: f64 = 1e-9;

/// Parallelism threshold, in radians, between projected directions.
const PARALLEL_ANGLE_TOL: f64 = 1e-7;

/// Projections with frame norm below this are treated as zero.
const PROJECTION_ZERO_TOL: f64 = 1e-9;

/// Symmetric integer bilinear form on Z^dim.
#[derive(Debug, Clone)]
pub struct AmbientForm {
    gram: DMatrix<i64>,
    gram_f: DMatrix<f64>,
    signature: (usize, usize),
}

impl AmbientForm {
    /// Builds the form from Gram matrix rows; rejects non-symmetric or
    /// degenerate input.
    pub fn new(rows: Vec<Vec<i64>>) -> Result<Self> {
        let n = rows.len();
        if n == 0 {
            return Err(Error::invalid("empty Gram matrix"));
        }
        if rows.iter().any(|r| r.len() != n) {
            return Err(Error::invalid("Gram matrix is not square"));
        }
        let gram = DMatrix::from_fn(n, n, |i, j| rows[i][j]);
        if gram != gram.transpose() {
            return Err(Error::invalid("Gram matrix is not symmetric"));
        }
        let gram_f = gram.map(|v| v as f64);
        let eigen = gram_f.clone().symmetric_eigen();
        let mut pos = 0;
        let mut neg = 0;
        for &ev in eigen.eigenvalues.iter() {
            if ev.abs() <= SIGNATURE_EIGEN_TOL {
                return Err(Error::invalid(format!(
                    "Gram matrix is degenerate (eigenvalue {ev:.3e})"
                )));
            }
            if ev > 0.0 {
                pos += 1;
            } else {
                neg += 1;
            }
        }
        Ok(AmbientForm {
            gram,
            gram_f,
            signature: (pos, neg),
        })
    }

    pub fn dim(&self) -> usize {
        self.gram.nrows()
    }

    /// (positive, negative) eigenvalue counts.
    pub fn signature(&self) -> (usize, usize) {
        self.signature
    }

    /// Geometric scenarios need exactly 3 positive directions and at least
    /// one negative.
    pub fn require_signature_3(&self) -> Result<()> {
        let (p, n) = self.signature;
        if p != 3 || n < 1 {
            return Err(Error::invalid(format!(
                "form signature is ({p},{n}), need (3,k) with k >= 1"
            )));
        }
        Ok(())
    }

    /// Declares an integer class, validating the coordinate length.
    pub fn class(&self, coords: Vec<i64>) -> Result<LatticeClass> {
        if coords.len() != self.dim() {
            return Err(Error::invalid(format!(
                "class has {} coordinates, form has dimension {}",
                coords.len(),
                self.dim()
            )));
        }
        Ok(LatticeClass { coords })
    }

    pub fn pair(&self, a: &LatticeClass, b: &LatticeClass) -> i64 {
        debug_assert_eq!(a.coords.len(), self.dim());
        debug_assert_eq!(b.coords.len(), self.dim());
        let mut acc = 0i64;
        for (i, &ai) in a.coords.iter().enumerate() {
            if ai == 0 {
                continue;
            }
            for (j, &bj) in b.coords.iter().enumerate() {
                acc += ai * self.gram[(i, j)] * bj;
            }
        }
        acc
    }

    pub fn norm(&self, a: &LatticeClass) -> i64 {
        self.pair(a, a)
    }

    pub fn is_minus2(&self, a: &LatticeClass) -> bool {
        self.norm(a) == -2
    }

    /// Form value on real vectors.
    pub fn pair_real(&self, x: &DVector<f64>, y: &DVector<f64>) -> f64 {
        debug_assert_eq!(x.len(), self.dim());
        debug_assert_eq!(y.len(), self.dim());
        (x.transpose() * &self.gram_f * y)[(0, 0)]
    }

    /// Form value between an integer class and a real vector.
    pub fn pair_class_real(&self, a: &LatticeClass, y: &DVector<f64>) -> f64 {
        self.pair_real(&a.to_real(), y)
    }

    /// Reflection in a -2 class: x -> x + <x,d> d. Exact on integers.
    pub fn reflect(&self, delta: &LatticeClass, x: &LatticeClass) -> Result<LatticeClass> {
        if !self.is_minus2(delta) {
            return Err(Error::invalid(format!(
                "reflection class has norm {}, need -2",
                self.norm(delta)
            )));
        }
        let c = self.pair(x, delta);
        let coords = x
            .coords
            .iter()
            .zip(&delta.coords)
            .map(|(&xi, &di)| xi + c * di)
            .collect();
        Ok(LatticeClass { coords })
    }
}

/// Integer vector in the ambient form's coordinates.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct LatticeClass {
    coords: Vec<i64>,
}

impl LatticeClass {
    pub fn coords(&self) -> &[i64] {
        &self.coords
    }

    pub fn to_real(&self) -> DVector<f64> {
        DVector::from_iterator(self.coords.len(), self.coords.iter().map(|&v| v as f64))
    }

    pub fn is_zero(&self) -> bool {
        self.coords.iter().all(|&v| v == 0)
    }

    pub fn neg(&self) -> LatticeClass {
        LatticeClass {
            coords: self.coords.iter().map(|&v| -v).collect(),
        }
    }

    pub fn add(&self, other: &LatticeClass) -> LatticeClass {
        debug_assert_eq!(self.coords.len(), other.coords.len());
        LatticeClass {
            coords: self
                .coords
                .iter()
                .zip(&other.coords)
                .map(|(&a, &b)| a + b)
                .collect(),
        }
    }

    pub fn sub(&self, other: &LatticeClass) -> LatticeClass {
        debug_assert_eq!(self.coords.len(), other.coords.len());
        LatticeClass {
            coords: self
                .coords
                .iter()
                .zip(&other.coords)
                .map(|(&a, &b)| a - b)
                .collect(),
        }
    }

    pub fn scale(&self, k: i64) -> LatticeClass {
        LatticeClass {
            coords: self.coords.iter().map(|&v| k * v).collect(),
        }
    }
}

impl std::fmt::Display for LatticeClass {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "(")?;
        for (i, v) in self.coords.iter().enumerate() {
            if i > 0 {
                write!(f, ",")?;
            }
            write!(f, "{v}")?;
        }
        write!(f, ")")
    }
}

/// Three real vectors spanning a positive-definite 3-space of the form.
#[derive(Debug, Clone)]
pub struct PositiveFrame {
    basis: [DVector<f64>; 3],
    metric: Matrix3<f64>,
    metric_inv: Matrix3<f64>,
}

impl PositiveFrame {
    pub fn new(form: &AmbientForm, basis: [DVector<f64>; 3]) -> Result<Self> {
        for b in &basis {
            if b.len() != form.dim() {
                return Err(Error::invalid(format!(
                    "frame vector has length {}, form has dimension {}",
                    b.len(),
                    form.dim()
                )));
            }
        }
        let metric = Matrix3::from_fn(|i, j| form.pair_real(&basis[i], &basis[j]));
        let chol = metric.cholesky().ok_or_else(|| {
            Error::invalid("frame Gram matrix is not positive definite")
        })?;
        let metric_inv = chol.inverse();
        Ok(PositiveFrame {
            basis,
            metric,
            metric_inv,
        })
    }

    pub fn basis(&self) -> &[DVector<f64>; 3] {
        &self.basis
    }

    /// Gram matrix of the frame under the ambient form. For a section that
    /// is linear in this frame it is also the base metric.
    pub fn metric(&self) -> &Matrix3<f64> {
        &self.metric
    }

    pub fn metric_inv(&self) -> &Matrix3<f64> {
        &self.metric_inv
    }

    /// (<a,h_1>, <a,h_2>, <a,h_3>).
    pub fn class_pairings(&self, form: &AmbientForm, a: &LatticeClass) -> Vector3<f64> {
        let ar = a.to_real();
        Vector3::from_fn(|i, _| form.pair_real(&ar, &self.basis[i]))
    }

    /// Coefficients v of the form-orthogonal projection p(a) = sum v_i h_i,
    /// from the normal equations metric * v = pairings.
    pub fn project(&self, form: &AmbientForm, a: &LatticeClass) -> Vector3<f64> {
        self.metric_inv * self.class_pairings(form, a)
    }

    pub fn project_real(&self, form: &AmbientForm, x: &DVector<f64>) -> Vector3<f64> {
        let b = Vector3::from_fn(|i, _| form.pair_real(x, &self.basis[i]));
        self.metric_inv * b
    }

    /// Frame-metric norm of a coefficient vector.
    pub fn coeff_norm(&self, v: &Vector3<f64>) -> f64 {
        (v.transpose() * self.metric * v)[(0, 0)].max(0.0).sqrt()
    }
}

/// All integer vectors with coordinates in [-box, box] and form norm -2,
/// in lexicographic order. Prunes by interval bounds on the remaining
/// coordinates' possible contribution.
pub fn enumerate_minus2(form: &AmbientForm, box_bound: i64) -> Vec<LatticeClass> {
    let n = form.dim();
    let mut out = Vec::new();
    if box_bound < 0 {
        return out;
    }
    let mut x = vec![0i64; n];
    enumerate_rec(form, box_bound, &mut x, 0, &mut out);
    out
}

fn enumerate_rec(
    form: &AmbientForm,
    b: i64,
    x: &mut Vec<i64>,
    depth: usize,
    out: &mut Vec<LatticeClass>,
) {
    let n = form.dim();
    if depth == n {
        let c = LatticeClass { coords: x.clone() };
        if form.norm(&c) == -2 {
            out.push(c);
        }
        return;
    }
    for v in -b..=b {
        x[depth] = v;
        let (lo, hi) = tail_bounds(form, b, x, depth + 1);
        if lo <= -2 && -2 <= hi {
            enumerate_rec(form, b, x, depth + 1, out);
        }
    }
    x[depth] = 0;
}

/// Interval bounds for the form value over all completions of x[..fixed]
/// with the remaining coordinates in [-b, b].
fn tail_bounds(form: &AmbientForm, b: i64, x: &[i64], fixed: usize) -> (i64, i64) {
    let n = form.dim();
    let g = &form.gram;
    let mut base = 0i64;
    for i in 0..fixed {
        for j in 0..fixed {
            base += x[i] * g[(i, j)] * x[j];
        }
    }
    let mut lo = base;
    let mut hi = base;
    for j in fixed..n {
        let mut lin = 0i64;
        for i in 0..fixed {
            lin += 2 * x[i] * g[(i, j)];
        }
        let span = lin.abs() * b;
        lo -= span;
        hi += span;
    }
    for j in fixed..n {
        for l in fixed..n {
            let gij = g[(j, l)];
            if j == l {
                if gij >= 0 {
                    hi += gij * b * b;
                } else {
                    lo += gij * b * b;
                }
            } else {
                let span = gij.abs() * b * b;
                lo -= span;
                hi += span;
            }
        }
    }
    (lo, hi)
}

/// Search budget for class decompositions: per-coordinate bound on each
/// summand and the maximum number of summands.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SearchBudget {
    pub coeff_box: i64,
    pub max_summands: usize,
}

impl SearchBudget {
    pub fn validate(&self) -> Result<()> {
        if self.coeff_box < 1 {
            return Err(Error::invalid("decomposition budget needs coeff_box >= 1"));
        }
        if self.max_summands < 2 {
            return Err(Error::invalid(
                "decomposition budget needs max_summands >= 2",
            ));
        }
        Ok(())
    }
}

/// Outcome of the budgeted irreducibility test.
#[derive(Debug, Clone)]
pub struct Irreducibility {
    pub irreducible: bool,
    /// A decomposition of the class into -2 summands whose projections are
    /// positive multiples of the class's projection; present iff reducible.
    pub witness: Option<Vec<LatticeClass>>,
}

/// Tests whether `alpha` (norm -2, nonzero projection) splits as a sum of
/// 2..=max_summands classes of norm -2, each with coordinates in the budget
/// box and projection a positive multiple of p(alpha).
pub fn is_irreducible(
    form: &AmbientForm,
    alpha: &LatticeClass,
    frame: &PositiveFrame,
    budget: SearchBudget,
) -> Result<Irreducibility> {
    let candidates = enumerate_minus2(form, budget.coeff_box);
    is_irreducible_with(form, alpha, frame, budget, &candidates)
}

/// Same test with a precomputed -2 list for the budget box; flow-time
/// sampling reuses one list across many calls.
pub fn is_irreducible_with(
    form: &AmbientForm,
    alpha: &LatticeClass,
    frame: &PositiveFrame,
    budget: SearchBudget,
    minus2_in_box: &[LatticeClass],
) -> Result<Irreducibility> {
    budget.validate()?;
    if form.norm(alpha) != -2 {
        return Err(Error::invalid(format!(
            "irreducibility needs norm -2, class {alpha} has norm {}",
            form.norm(alpha)
        )));
    }
    let p_alpha = frame.project(form, alpha);
    let p_norm = frame.coeff_norm(&p_alpha);
    if p_norm <= PROJECTION_ZERO_TOL {
        return Err(Error::Degenerate {
            what: "irreducibility",
            detail: format!("projection of {alpha} is numerically zero ({p_norm:.3e})"),
        });
    }

    // Summands must project to lambda * p(alpha), lambda > 0; since the
    // lambdas sum to 1, each admissible summand has lambda in (0,1).
    let mut cands: Vec<(LatticeClass, f64)> = Vec::new();
    for c in minus2_in_box {
        if let Some(lambda) = positive_parallel_ratio(frame, form, c, &p_alpha, p_norm) {
            if lambda < 1.0 - LAMBDA_TOL {
                cands.push((c.clone(), lambda));
            }
        }
    }
    cands.sort_by(|a, b| a.0.cmp(&b.0));

    let mut chosen: Vec<usize> = Vec::new();
    for count in 2..=budget.max_summands {
        if search_decomposition(alpha, &cands, budget.coeff_box, 0, count, &mut chosen) {
            let witness = chosen.iter().map(|&i| cands[i].0.clone()).collect();
            return Ok(Irreducibility {
                irreducible: false,
                witness: Some(witness),
            });
        }
    }
    Ok(Irreducibility {
        irreducible: true,
        witness: None,
    })
}

/// If p(c) = lambda p(alpha) with lambda > 0 within tolerance, returns lambda.
fn positive_parallel_ratio(
    frame: &PositiveFrame,
    form: &AmbientForm,
    c: &LatticeClass,
    p_alpha: &Vector3<f64>,
    p_alpha_norm: f64,
) -> Option<f64> {
    let p_c = frame.project(form, c);
    let n_c = frame.coeff_norm(&p_c);
    if n_c <= PROJECTION_ZERO_TOL * p_alpha_norm {
        return None;
    }
    let m = frame.metric();
    let lambda = (p_c.transpose() * m * p_alpha)[(0, 0)] / (p_alpha_norm * p_alpha_norm);
    if lambda <= LAMBDA_TOL {
        return None;
    }
    let resid = p_c - p_alpha.scale(lambda);
    // sin of the angle between the directions; acos is ill-conditioned here
    let sin_angle = frame.coeff_norm(&resid) / n_c;
    if sin_angle < PARALLEL_ANGLE_TOL {
        Some(lambda)
    } else {
        None
    }
}

/// Multiset search over sorted candidates: `left` summands with indices
/// >= `from` summing to `target`. Prunes on per-coordinate reachability.
fn search_decomposition(
    target: &LatticeClass,
    cands: &[(LatticeClass, f64)],
    coeff_box: i64,
    from: usize,
    left: usize,
    chosen: &mut Vec<usize>,
) -> bool {
    if left == 1 {
        for (i, (c, _)) in cands.iter().enumerate().skip(from) {
            if c == target {
                chosen.push(i);
                return true;
            }
        }
        return false;
    }
    let reach = coeff_box * (left as i64);
    if target.coords.iter().any(|&t| t.abs() > reach) {
        return false;
    }
    for i in from..cands.len() {
        let rest = target.sub(&cands[i].0);
        chosen.push(i);
        if search_decomposition(&rest, cands, coeff_box, i, left - 1, chosen) {
            return true;
        }
        chosen.pop();
    }
    false
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn a2() -> AmbientForm {
        AmbientForm::new(vec![vec![-2, 1], vec![1, -2]]).unwrap()
    }

    /// diag(1,1,1) + A2 block, signature (3,2).
    fn ambient_a2() -> AmbientForm {
        AmbientForm::new(vec![
            vec![1, 0, 0, 0, 0],
            vec![0, 1, 0, 0, 0],
            vec![0, 0, 1, 0, 0],
            vec![0, 0, 0, -2, 1],
            vec![0, 0, 0, 1, -2],
        ])
        .unwrap()
    }

    fn e(form: &AmbientForm, i: usize) -> DVector<f64> {
        let mut v = DVector::zeros(form.dim());
        v[i] = 1.0;
        v
    }

    #[test]
    fn pair_a2_values() {
        let f = a2();
        let a10 = f.class(vec![1, 0]).unwrap();
        let a01 = f.class(vec![0, 1]).unwrap();
        let a11 = f.class(vec![1, 1]).unwrap();
        let zero = f.class(vec![0, 0]).unwrap();
        assert_eq!(f.pair(&a10, &a10), -2);
        assert_eq!(f.pair(&a10, &a01), 1);
        assert_eq!(f.pair(&a11, &a11), -2);
        assert_eq!(f.pair(&a10, &zero), 0);
    }

    #[test]
    fn pair_symmetric_bilinear_random() {
        let f = ambient_a2();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..200 {
            let rv = |rng: &mut ChaCha8Rng| {
                f.class((0..5).map(|_| rng.gen_range(-4..=4)).collect())
                    .unwrap()
            };
            let a = rv(&mut rng);
            let b = rv(&mut rng);
            let c = rv(&mut rng);
            let m = rng.gen_range(-3..=3i64);
            assert_eq!(f.pair(&a, &b), f.pair(&b, &a));
            assert_eq!(
                f.pair(&a.add(&c.scale(m)), &b),
                f.pair(&a, &b) + m * f.pair(&c, &b)
            );
        }
    }

    #[test]
    fn signature_and_validation() {
        assert_eq!(a2().signature(), (0, 2));
        let amb = ambient_a2();
        assert_eq!(amb.signature(), (3, 2));
        amb.require_signature_3().unwrap();
        assert!(a2().require_signature_3().is_err());
        assert!(AmbientForm::new(vec![vec![1, 2], vec![0, 1]]).is_err());
        assert!(AmbientForm::new(vec![vec![1, 1], vec![1, 1]]).is_err());
        assert!(amb.class(vec![1, 2, 3]).is_err());
    }

    #[test]
    fn reflection_identities() {
        let f = ambient_a2();
        let delta = f.class(vec![0, 0, 0, 1, 0]).unwrap();
        let alpha = f.class(vec![0, 0, 0, 0, 1]).unwrap();
        assert_eq!(f.reflect(&delta, &delta).unwrap(), delta.neg());
        // <alpha,delta> = 1 so the reflection translates by delta
        assert_eq!(f.pair(&alpha, &delta), 1);
        assert_eq!(f.reflect(&delta, &alpha).unwrap(), alpha.add(&delta));

        let bad = f.class(vec![1, 0, 0, 0, 0]).unwrap();
        assert!(f.reflect(&bad, &alpha).is_err());

        let mut rng = ChaCha8Rng::seed_from_u64(12);
        for _ in 0..100 {
            let x = f
                .class((0..5).map(|_| rng.gen_range(-5..=5)).collect())
                .unwrap();
            let y = f
                .class((0..5).map(|_| rng.gen_range(-5..=5)).collect())
                .unwrap();
            let rx = f.reflect(&delta, &x).unwrap();
            let ry = f.reflect(&delta, &y).unwrap();
            assert_eq!(f.reflect(&delta, &rx).unwrap(), x);
            assert_eq!(f.pair(&rx, &ry), f.pair(&x, &y));
        }
    }

    #[test]
    fn project_block_diagonal() {
        let f = AmbientForm::new(vec![
            vec![1, 0, 0, 0],
            vec![0, 1, 0, 0],
            vec![0, 0, 1, 0],
            vec![0, 0, 0, -2],
        ])
        .unwrap();
        let frame = PositiveFrame::new(&f, [e(&f, 0), e(&f, 1), e(&f, 2)]).unwrap();
        let alpha = f.class(vec![2, 0, 0, 1]).unwrap();
        let p = frame.project(&f, &alpha);
        assert!((p - Vector3::new(2.0, 0.0, 0.0)).norm() < 1e-12);

        // class in the negative block projects to zero
        let beta = f.class(vec![0, 0, 0, 3]).unwrap();
        assert!(frame.project(&f, &beta).norm() < 1e-12);
    }

    /// Cramer's rule on the 3x3 normal equations, kept independent of the
    /// library solve.
    fn project_oracle(form: &AmbientForm, frame: &PositiveFrame, a: &LatticeClass) -> [f64; 3] {
        let h = frame.basis();
        let mut m = [[0.0f64; 3]; 3];
        let mut b = [0.0f64; 3];
        for i in 0..3 {
            for j in 0..3 {
                m[i][j] = form.pair_real(&h[i], &h[j]);
            }
            b[i] = form.pair_real(&a.to_real(), &h[i]);
        }
        let det = |m: &[[f64; 3]; 3]| {
            m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1])
                - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0])
                + m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0])
        };
        let d = det(&m);
        let mut out = [0.0f64; 3];
        for k in 0..3 {
            let mut mk = m;
            for i in 0..3 {
                mk[i][k] = b[i];
            }
            out[k] = det(&mk) / d;
        }
        out
    }

    #[test]
    fn project_matches_cramer_oracle_and_residual_orthogonal() {
        let f = ambient_a2();
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        for _ in 0..50 {
            let mut basis = [e(&f, 0), e(&f, 1), e(&f, 2)];
            for b in basis.iter_mut() {
                for i in 3..5 {
                    b[i] = 0.3 * (rng.gen::<f64>() - 0.5);
                }
            }
            let frame = PositiveFrame::new(&f, basis).unwrap();
            let a = f
                .class((0..5).map(|_| rng.gen_range(-4..=4)).collect())
                .unwrap();
            let p = frame.project(&f, &a);
            let oracle = project_oracle(&f, &frame, &a);
            for k in 0..3 {
                assert!((p[k] - oracle[k]).abs() < 1e-10, "{p:?} vs {oracle:?}");
            }
            // residual a - p(a) is form-orthogonal to the frame
            let mut resid = a.to_real();
            for k in 0..3 {
                resid -= frame.basis()[k].scale(p[k]);
            }
            let a_len = a.to_real().norm();
            for k in 0..3 {
                let hk = &frame.basis()[k];
                assert!(
                    f.pair_real(&resid, hk).abs() <= 1e-10 * a_len.max(1.0) * hk.norm(),
                    "residual not orthogonal"
                );
            }
        }
    }

    #[test]
    fn frame_rejects_non_positive() {
        let f = ambient_a2();
        // e4 has norm -2; the span is not positive definite
        assert!(PositiveFrame::new(&f, [e(&f, 0), e(&f, 1), e(&f, 3)]).is_err());
    }

    #[test]
    fn enumerate_a2_roots() {
        let f = a2();
        let roots = enumerate_minus2(&f, 1);
        let expect: Vec<Vec<i64>> = vec![
            vec![-1, -1],
            vec![-1, 0],
            vec![0, -1],
            vec![0, 1],
            vec![1, 0],
            vec![1, 1],
        ];
        let got: Vec<Vec<i64>> = roots.iter().map(|c| c.coords().to_vec()).collect();
        assert_eq!(got, expect);
    }

    #[test]
    fn enumerate_rank1_and_empty_box() {
        let f = AmbientForm::new(vec![vec![-2]]).unwrap();
        let got: Vec<Vec<i64>> = enumerate_minus2(&f, 2)
            .iter()
            .map(|c| c.coords().to_vec())
            .collect();
        assert_eq!(got, vec![vec![-1], vec![1]]);
        assert!(enumerate_minus2(&f, 0).is_empty());
    }

    #[test]
    fn enumerate_matches_brute_force_and_negation_closed() {
        let f = ambient_a2();
        let fast = enumerate_minus2(&f, 2);
        // plain nested-loop oracle with no pruning
        let mut brute = Vec::new();
        for a in -2i64..=2 {
            for b in -2i64..=2 {
                for c in -2i64..=2 {
                    for d in -2i64..=2 {
                        for g in -2i64..=2 {
                            let cls = f.class(vec![a, b, c, d, g]).unwrap();
                            if f.norm(&cls) == -2 {
                                brute.push(cls);
                            }
                        }
                    }
                }
            }
        }
        assert_eq!(fast, brute);
        let set: std::collections::BTreeSet<_> = fast.iter().cloned().collect();
        for c in &fast {
            assert!(set.contains(&c.neg()));
        }
    }

    fn tilted_frame(f: &AmbientForm, t4: [f64; 3], t5: [f64; 3]) -> PositiveFrame {
        let mut basis = [e(f, 0), e(f, 1), e(f, 2)];
        for k in 0..3 {
            basis[k][3] = t4[k];
            basis[k][4] = t5[k];
        }
        PositiveFrame::new(f, basis).unwrap()
    }

    /// Direct definition check over pairs, no candidate filtering shortcuts.
    fn reducible_pair_oracle(
        form: &AmbientForm,
        frame: &PositiveFrame,
        alpha: &LatticeClass,
        coeff_box: i64,
    ) -> Option<(LatticeClass, LatticeClass)> {
        let p_alpha = frame.project(form, alpha);
        let pa2 = (p_alpha.transpose() * frame.metric() * p_alpha)[(0, 0)];
        let parallel_pos = |c: &LatticeClass| -> bool {
            let p = frame.project(form, c);
            let lambda = (p.transpose() * frame.metric() * p_alpha)[(0, 0)] / pa2;
            if lambda <= 1e-9 {
                return false;
            }
            let r = p - p_alpha.scale(lambda);
            let rn = frame.coeff_norm(&r);
            let pn = frame.coeff_norm(&p);
            pn > 0.0 && rn / pn < 1e-7
        };
        for beta in enumerate_minus2(form, coeff_box) {
            let gamma = alpha.sub(&beta);
            if gamma.coords().iter().any(|&v| v.abs() > coeff_box) {
                continue;
            }
            if form.norm(&gamma) != -2 {
                continue;
            }
            if parallel_pos(&beta) && parallel_pos(&gamma) {
                return Some((beta, gamma));
            }
        }
        None
    }

    #[test]
    fn irreducible_generic_frame() {
        let f = ambient_a2();
        // distinct projection directions for the two A2 generators
        let frame = tilted_frame(&f, [0.2, 0.0, 0.0], [0.0, 0.1, 0.0]);
        let alpha = f.class(vec![0, 0, 0, 1, 0]).unwrap();
        let budget = SearchBudget {
            coeff_box: 3,
            max_summands: 2,
        };
        let r = is_irreducible(&f, &alpha, &frame, budget).unwrap();
        assert!(r.irreducible);
        assert!(r.witness.is_none());
        assert!(reducible_pair_oracle(&f, &frame, &alpha, 3).is_none());
    }

    #[test]
    fn reducible_with_witness() {
        let f = ambient_a2();
        // both generators project to the same direction with ratio 1/2
        let frame = tilted_frame(&f, [0.2, 0.0, 0.0], [0.2, 0.0, 0.0]);
        let alpha = f.class(vec![0, 0, 0, 1, 1]).unwrap();
        let budget = SearchBudget {
            coeff_box: 3,
            max_summands: 2,
        };
        let r = is_irreducible(&f, &alpha, &frame, budget).unwrap();
        assert!(!r.irreducible);
        let w = r.witness.unwrap();
        let wset: std::collections::BTreeSet<_> = w.iter().cloned().collect();
        let expect: std::collections::BTreeSet<_> = [
            f.class(vec![0, 0, 0, 1, 0]).unwrap(),
            f.class(vec![0, 0, 0, 0, 1]).unwrap(),
        ]
        .into_iter()
        .collect();
        assert_eq!(wset, expect);
        let (b, g) = reducible_pair_oracle(&f, &frame, &alpha, 3).unwrap();
        let oset: std::collections::BTreeSet<_> = [b, g].into_iter().collect();
        assert_eq!(oset, expect);

        // recursion depth beyond 2 still finds the pair first
        let r3 = is_irreducible(
            &f,
            &alpha,
            &frame,
            SearchBudget {
                coeff_box: 3,
                max_summands: 3,
            },
        )
        .unwrap();
        assert!(!r3.irreducible);
    }

    #[test]
    fn irreducibility_sign_symmetric() {
        let f = ambient_a2();
        let frame = tilted_frame(&f, [0.2, 0.0, 0.0], [0.2, 0.0, 0.0]);
        let budget = SearchBudget {
            coeff_box: 3,
            max_summands: 2,
        };
        for coords in [vec![0, 0, 0, 1, 1], vec![0, 0, 0, 1, 0]] {
            let alpha = f.class(coords).unwrap();
            let a = is_irreducible(&f, &alpha, &frame, budget).unwrap();
            let b = is_irreducible(&f, &alpha.neg(), &frame, budget).unwrap();
            assert_eq!(a.irreducible, b.irreducible);
        }
    }

    #[test]
    fn irreducibility_preconditions() {
        let f = ambient_a2();
        let frame = tilted_frame(&f, [0.2, 0.0, 0.0], [0.0, 0.1, 0.0]);
        let budget = SearchBudget {
            coeff_box: 2,
            max_summands: 2,
        };
        // norm 0 class rejected
        let bad = f.class(vec![0, 0, 0, 0, 0]).unwrap();
        assert!(is_irreducible(&f, &bad, &frame, budget).is_err());
        // untilted frame: projection of an A2 class is zero
        let flat = PositiveFrame::new(&f, [e(&f, 0), e(&f, 1), e(&f, 2)]).unwrap();
        let alpha = f.class(vec![0, 0, 0, 1, 0]).unwrap();
        match is_irreducible(&f, &alpha, &flat, budget) {
            Err(Error::Degenerate { .. }) => {}
            other => panic!("expected degenerate projection, got {other:?}"),
        }
    }
}
