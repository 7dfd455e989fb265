//! Dense strictly convex quadratic programming.
//!
//! Solves
//!
//! ```text
//!     minimize    1/2 x' H x + f' x
//!     subject to  A x <= b
//!                 lower <= x <= upper
//! ```
//!
//! with the Goldfarb-Idnani dual active-set method. The method starts from
//! the unconstrained minimizer and adds violated constraints one at a time,
//! taking combined primal and dual steps and dropping constraints whose
//! multipliers would turn negative. A constraint that cannot be added proves
//! primal infeasibility, so no separate phase-1 problem is needed. The active
//! set is maintained through a QR-like factorization `J' N = [R; 0]` with
//! `J J' = H^-1`, updated with Givens rotations.
//!
//! Infinite bounds are ignored.

use crate::Error;
use alloc::vec;
use alloc::vec::Vec;
use libm::hypot;
use nalgebra::{DMatrix, DVector};

#[derive(Debug, Clone, PartialEq)]
pub struct QpProblem {
    pub h: DMatrix<f64>,
    pub f: DVector<f64>,
    pub a_ieq: DMatrix<f64>,
    pub b_ieq: DVector<f64>,
    pub lower: DVector<f64>,
    pub upper: DVector<f64>,
}

impl QpProblem {
    /// Unconstrained problem over `f.len()` variables.
    pub fn unconstrained(h: DMatrix<f64>, f: DVector<f64>) -> Self {
        let n = f.len();
        Self {
            h,
            f,
            a_ieq: DMatrix::zeros(0, n),
            b_ieq: DVector::zeros(0),
            lower: DVector::from_element(n, f64::NEG_INFINITY),
            upper: DVector::from_element(n, f64::INFINITY),
        }
    }

    pub fn num_vars(&self) -> usize {
        self.f.len()
    }

    pub fn num_ineq(&self) -> usize {
        self.b_ieq.len()
    }

    pub fn objective(&self, x: &DVector<f64>) -> f64 {
        0.5 * x.dot(&(&self.h * x)) + self.f.dot(x)
    }

    pub fn check_dimensions(&self) -> Result<(), Error> {
        let n = self.num_vars();
        if self.h.nrows() != n || self.h.ncols() != n {
            return Err(Error::Dimension("H must be n x n"));
        }
        if self.a_ieq.ncols() != n || self.a_ieq.nrows() != self.b_ieq.len() {
            return Err(Error::Dimension("A_ieq must be m x n with m = len(b_ieq)"));
        }
        if self.lower.len() != n || self.upper.len() != n {
            return Err(Error::Dimension("bounds must have length n"));
        }
        Ok(())
    }

    /// Largest constraint violation at `x` (zero when feasible).
    pub fn max_violation(&self, x: &DVector<f64>) -> f64 {
        let mut worst: f64 = 0.0;
        if self.num_ineq() > 0 {
            let ax = &self.a_ieq * x;
            for i in 0..self.num_ineq() {
                worst = worst.max(ax[i] - self.b_ieq[i]);
            }
        }
        for j in 0..self.num_vars() {
            worst = worst.max(self.lower[j] - x[j]).max(x[j] - self.upper[j]);
        }
        worst
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum QpStatus {
    Optimal,
    MaxIterations,
    Infeasible,
}

/// A constraint of a [`QpProblem`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Constraint {
    /// Row `i` of `A_ieq x <= b_ieq`.
    Inequality(usize),
    Lower(usize),
    Upper(usize),
}

#[derive(Debug, Clone, PartialEq)]
pub struct QpSolution {
    pub x: DVector<f64>,
    pub objective: f64,
    pub status: QpStatus,
    pub iterations: usize,
    /// Multipliers of the inequality rows (nonnegative at optimum).
    pub multipliers: DVector<f64>,
    pub lower_multipliers: DVector<f64>,
    pub upper_multipliers: DVector<f64>,
    pub active: Vec<Constraint>,
    /// Whether `H` had to be regularized before factorization.
    pub regularized: bool,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct QpSettings {
    pub tol: f64,
    pub max_iter: usize,
}

impl Default for QpSettings {
    fn default() -> Self {
        Self {
            tol: 1e-8,
            max_iter: 200,
        }
    }
}

/// Infinity norms of the KKT conditions at a solution.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KktResiduals {
    pub stationarity: f64,
    pub primal: f64,
    pub dual: f64,
    pub complementarity: f64,
}

impl KktResiduals {
    pub fn max(&self) -> f64 {
        self.stationarity
            .max(self.primal)
            .max(self.dual)
            .max(self.complementarity)
    }
}

/// KKT residuals of `sol` for `p`. Complementarity is measured as
/// `|lambda_i * slack_i|`, skipping infinite bounds.
pub fn kkt_residuals(p: &QpProblem, sol: &QpSolution) -> KktResiduals {
    let x = &sol.x;
    let mut grad = &p.h * x + &p.f;
    if p.num_ineq() > 0 {
        grad += p.a_ieq.transpose() * &sol.multipliers;
    }
    grad += &sol.upper_multipliers - &sol.lower_multipliers;
    let stationarity = grad.amax();
    let primal = p.max_violation(x);

    let mut dual: f64 = 0.0;
    let mut complementarity: f64 = 0.0;
    let ax = if p.num_ineq() > 0 {
        &p.a_ieq * x
    } else {
        DVector::zeros(0)
    };
    for i in 0..p.num_ineq() {
        let lam = sol.multipliers[i];
        dual = dual.max(-lam);
        complementarity = complementarity.max((lam * (p.b_ieq[i] - ax[i])).abs());
    }
    for j in 0..p.num_vars() {
        let (ll, lu) = (sol.lower_multipliers[j], sol.upper_multipliers[j]);
        dual = dual.max(-ll).max(-lu);
        if p.lower[j].is_finite() {
            complementarity = complementarity.max((ll * (x[j] - p.lower[j])).abs());
        }
        if p.upper[j].is_finite() {
            complementarity = complementarity.max((lu * (p.upper[j] - x[j])).abs());
        }
    }
    KktResiduals {
        stationarity,
        primal,
        dual,
        complementarity,
    }
}

/// Solves `p` from a cold start.
pub fn solve(p: &QpProblem, tol: f64, max_iter: usize) -> Result<QpSolution, Error> {
    QpSolver::new(QpSettings { tol, max_iter }).solve_cold(p)
}

/// Reusable solver. Remembers the last optimal active set and tries those
/// constraints first on the next solve.
#[derive(Debug, Clone, Default)]
pub struct QpSolver {
    pub settings: QpSettings,
    warm: Vec<Constraint>,
}

impl QpSolver {
    pub fn new(settings: QpSettings) -> Self {
        Self {
            settings,
            warm: Vec::new(),
        }
    }

    pub fn warm_set(&self) -> &[Constraint] {
        &self.warm
    }

    pub fn reset(&mut self) {
        self.warm.clear();
    }

    pub fn solve_cold(&mut self, p: &QpProblem) -> Result<QpSolution, Error> {
        self.warm.clear();
        self.solve(p)
    }

    pub fn solve(&mut self, p: &QpProblem) -> Result<QpSolution, Error> {
        let sol = dual_active_set(p, &self.settings, &self.warm)?;
        if sol.status == QpStatus::Optimal {
            self.warm.clone_from(&sol.active);
        }
        Ok(sol)
    }
}

/// Constraints in `n' x >= c` form.
struct ConstraintSet {
    ids: Vec<Constraint>,
    c: Vec<f64>,
}

impl ConstraintSet {
    fn new(p: &QpProblem) -> Self {
        let mut ids = Vec::new();
        let mut c = Vec::new();
        for i in 0..p.num_ineq() {
            ids.push(Constraint::Inequality(i));
            c.push(-p.b_ieq[i]);
        }
        for j in 0..p.num_vars() {
            if p.lower[j].is_finite() {
                ids.push(Constraint::Lower(j));
                c.push(p.lower[j]);
            }
            if p.upper[j].is_finite() {
                ids.push(Constraint::Upper(j));
                c.push(-p.upper[j]);
            }
        }
        Self { ids, c }
    }

    fn len(&self) -> usize {
        self.ids.len()
    }

    /// `n_k' v`
    fn dot(&self, p: &QpProblem, k: usize, v: &DVector<f64>) -> f64 {
        match self.ids[k] {
            Constraint::Inequality(i) => {
                let mut acc = 0.0;
                for j in 0..v.len() {
                    acc -= p.a_ieq[(i, j)] * v[j];
                }
                acc
            }
            Constraint::Lower(j) => v[j],
            Constraint::Upper(j) => -v[j],
        }
    }

    fn normal(&self, p: &QpProblem, k: usize) -> DVector<f64> {
        let n = p.num_vars();
        match self.ids[k] {
            Constraint::Inequality(i) => -p.a_ieq.row(i).transpose(),
            Constraint::Lower(j) => {
                let mut e = DVector::zeros(n);
                e[j] = 1.0;
                e
            }
            Constraint::Upper(j) => {
                let mut e = DVector::zeros(n);
                e[j] = -1.0;
                e
            }
        }
    }

    fn norm(&self, p: &QpProblem, k: usize) -> f64 {
        match self.ids[k] {
            Constraint::Inequality(i) => p.a_ieq.row(i).norm(),
            _ => 1.0,
        }
    }
}

fn factorize(h: &DMatrix<f64>) -> Option<(DMatrix<f64>, bool)> {
    let n = h.nrows();
    let sym = (h + h.transpose()) * 0.5;
    if let Some(ch) = sym.clone().cholesky() {
        return Some((ch.l(), false));
    }
    let base = (sym.trace() / n as f64).abs().max(f64::MIN_POSITIVE);
    let mut shift = 1e-8 * base;
    for _ in 0..6 {
        let mut reg = sym.clone();
        for i in 0..n {
            reg[(i, i)] += shift;
        }
        if let Some(ch) = reg.cholesky() {
            log::warn!("QP Hessian not positive definite; regularized with {shift:e} I");
            return Some((ch.l(), true));
        }
        shift *= 100.0;
    }
    None
}

fn apply_givens_cols(m: &mut DMatrix<f64>, i: usize, j: usize, c: f64, s: f64) {
    for r in 0..m.nrows() {
        let (a, b) = (m[(r, i)], m[(r, j)]);
        m[(r, i)] = c * a + s * b;
        m[(r, j)] = -s * a + c * b;
    }
}

fn dual_active_set(p: &QpProblem, settings: &QpSettings, warm: &[Constraint]) -> Result<QpSolution, Error> {
    p.check_dimensions()?;
    let n = p.num_vars();
    let cons = ConstraintSet::new(p);

    let mut out = QpSolution {
        x: DVector::zeros(n),
        objective: 0.0,
        status: QpStatus::Infeasible,
        iterations: 0,
        multipliers: DVector::zeros(p.num_ineq()),
        lower_multipliers: DVector::zeros(n),
        upper_multipliers: DVector::zeros(n),
        active: Vec::new(),
        regularized: false,
    };
    if (0..n).any(|j| p.lower[j] > p.upper[j]) {
        return Ok(out);
    }
    if n == 0 {
        out.status = QpStatus::Optimal;
        return Ok(out);
    }

    let Some((l, regularized)) = factorize(&p.h) else {
        return Err(Error::InvalidParameter("QP Hessian could not be factorized"));
    };
    out.regularized = regularized;
    // J = L^-T, so J J' = H^-1.
    let l_inv = l
        .solve_lower_triangular(&DMatrix::identity(n, n))
        .ok_or(Error::InvalidParameter("singular Cholesky factor"))?;
    let mut j_mat = l_inv.transpose();
    // Unconstrained minimizer x = -H^-1 f.
    let mut x = -(&j_mat * (j_mat.transpose() * &p.f));

    let mut r_mat = DMatrix::<f64>::zeros(n, n);
    let mut active: Vec<usize> = Vec::new();
    let mut u: Vec<f64> = Vec::new();
    let mut is_active = vec![false; cons.len()];
    let warm_idx: Vec<usize> = warm
        .iter()
        .filter_map(|w| cons.ids.iter().position(|id| id == w))
        .collect();

    let tol = settings.tol;
    let mut iterations = 0usize;
    let status = 'outer: loop {
        // Pick the constraint to add: previously active ones first.
        let violation = |k: usize, x: &DVector<f64>| (cons.dot(p, k, x) - cons.c[k]) / cons.norm(p, k).max(1e-300);
        let mut chosen: Option<(usize, f64)> = None;
        for &k in &warm_idx {
            if is_active[k] {
                continue;
            }
            let s = violation(k, &x);
            if s < -tol && chosen.is_none_or(|(_, best)| s < best) {
                chosen = Some((k, s));
            }
        }
        if chosen.is_none() {
            for (k, &active) in is_active.iter().enumerate() {
                if active {
                    continue;
                }
                let s = violation(k, &x);
                if s < -tol && chosen.is_none_or(|(_, best)| s < best) {
                    chosen = Some((k, s));
                }
            }
        }
        let Some((pk, _)) = chosen else {
            break QpStatus::Optimal;
        };
        let np = cons.normal(p, pk);
        let mut u_plus = 0.0;

        loop {
            if iterations >= settings.max_iter {
                break 'outer QpStatus::MaxIterations;
            }
            iterations += 1;
            let q = active.len();
            let s_p = np.dot(&x) - cons.c[pk];
            let d = j_mat.transpose() * &np;
            let d_norm2 = d.norm_squared();
            let tail2: f64 = (q..n).map(|i| d[i] * d[i]).sum();

            // z = J2 d2, r = R^-1 d1
            let mut z = DVector::zeros(n);
            for i in q..n {
                z.axpy(d[i], &j_mat.column(i), 1.0);
            }
            let mut r = vec![0.0; q];
            for i in (0..q).rev() {
                let mut acc = d[i];
                for k in i + 1..q {
                    acc -= r_mat[(i, k)] * r[k];
                }
                r[i] = acc / r_mat[(i, i)];
            }

            let r_scale = r.iter().fold(0.0f64, |m, v| m.max(v.abs()));
            let mut t1 = f64::INFINITY;
            let mut drop_at = None;
            for (idx, (&rj, &uj)) in r.iter().zip(u.iter()).enumerate() {
                if rj > f64::EPSILON * r_scale.max(1e-300) {
                    let t = uj / rj;
                    if t < t1 {
                        t1 = t;
                        drop_at = Some(idx);
                    }
                }
            }
            let dependent = tail2 <= 1e-12 * d_norm2;
            let t2 = if dependent { f64::INFINITY } else { -s_p / np.dot(&z) };

            if t1.is_infinite() && t2.is_infinite() {
                break 'outer QpStatus::Infeasible;
            }

            if t2.is_infinite() {
                // Dual step only, then drop.
                for (uj, rj) in u.iter_mut().zip(&r) {
                    *uj -= t1 * rj;
                }
                u_plus += t1;
                drop_constraint(
                    drop_at.unwrap_or(0),
                    &mut active,
                    &mut u,
                    &mut r_mat,
                    &mut j_mat,
                    &mut is_active,
                );
                continue;
            }

            let t = t1.min(t2);
            x.axpy(t, &z, 1.0);
            for (uj, rj) in u.iter_mut().zip(&r) {
                *uj -= t * rj;
            }
            u_plus += t;

            if t2 <= t1 {
                // Full step: add pk.
                let mut d = d;
                for i in (q + 1..n).rev() {
                    let (a, b) = (d[i - 1], d[i]);
                    if b == 0.0 {
                        continue;
                    }
                    let hyp = hypot(a, b);
                    let (c, s) = (a / hyp, b / hyp);
                    d[i - 1] = hyp;
                    d[i] = 0.0;
                    apply_givens_cols(&mut j_mat, i - 1, i, c, s);
                }
                for i in 0..=q {
                    r_mat[(i, q)] = d[i];
                }
                active.push(pk);
                u.push(u_plus);
                is_active[pk] = true;
                continue 'outer;
            }

            drop_constraint(
                drop_at.unwrap_or(0),
                &mut active,
                &mut u,
                &mut r_mat,
                &mut j_mat,
                &mut is_active,
            );
        }
    };

    out.objective = p.objective(&x);
    out.status = status;
    out.iterations = iterations;
    for (&k, &uk) in active.iter().zip(u.iter()) {
        match cons.ids[k] {
            Constraint::Inequality(i) => out.multipliers[i] = uk,
            Constraint::Lower(j) => out.lower_multipliers[j] = uk,
            Constraint::Upper(j) => out.upper_multipliers[j] = uk,
        }
    }
    let mut ids: Vec<Constraint> = active.iter().map(|&k| cons.ids[k]).collect();
    ids.sort();
    out.active = ids;
    out.x = x;
    Ok(out)
}

fn drop_constraint(
    idx: usize,
    active: &mut Vec<usize>,
    u: &mut Vec<f64>,
    r_mat: &mut DMatrix<f64>,
    j_mat: &mut DMatrix<f64>,
    is_active: &mut [bool],
) {
    let q = active.len();
    is_active[active[idx]] = false;
    active.remove(idx);
    u.remove(idx);
    // Shift R columns left over the removed one.
    for col in idx..q - 1 {
        for row in 0..q {
            r_mat[(row, col)] = r_mat[(row, col + 1)];
        }
    }
    for row in 0..q {
        r_mat[(row, q - 1)] = 0.0;
    }
    // Restore triangularity of the Hessenberg part.
    for col in idx..q - 1 {
        let (a, b) = (r_mat[(col, col)], r_mat[(col + 1, col)]);
        if b == 0.0 {
            continue;
        }
        let hyp = hypot(a, b);
        let (c, s) = (a / hyp, b / hyp);
        for k in col..q - 1 {
            let (ra, rb) = (r_mat[(col, k)], r_mat[(col + 1, k)]);
            r_mat[(col, k)] = c * ra + s * rb;
            r_mat[(col + 1, k)] = -s * ra + c * rb;
        }
        r_mat[(col + 1, col)] = 0.0;
        apply_givens_cols(j_mat, col, col + 1, c, s);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    fn boxed(h: DMatrix<f64>, f: DVector<f64>, lo: f64, hi: f64) -> QpProblem {
        let n = f.len();
        QpProblem {
            lower: DVector::from_element(n, lo),
            upper: DVector::from_element(n, hi),
            ..QpProblem::unconstrained(h, f)
        }
    }

    #[test]
    fn unconstrained_minimizer() {
        let c = DVector::from_vec(vec![1.5, -2.0, 0.25]);
        let p = QpProblem::unconstrained(DMatrix::identity(3, 3), -c.clone());
        let sol = solve(&p, 1e-8, 200).unwrap();
        assert_eq!(sol.status, QpStatus::Optimal);
        assert_eq!(sol.iterations, 0);
        assert!((&sol.x - &c).amax() < 1e-14);
        assert!(kkt_residuals(&p, &sol).max() <= 1e-10);
    }

    #[test]
    fn clipped_optimum() {
        let p = boxed(DMatrix::identity(2, 2), DVector::from_vec(vec![-2.0, -2.0]), 0.0, 1.0);
        let sol = solve(&p, 1e-8, 200).unwrap();
        assert_eq!(sol.status, QpStatus::Optimal);
        assert_relative_eq!(sol.x[0], 1.0, max_relative = 1e-14);
        assert_relative_eq!(sol.x[1], 1.0, max_relative = 1e-14);
        assert_eq!(sol.active, vec![Constraint::Upper(0), Constraint::Upper(1)]);
        assert_relative_eq!(sol.upper_multipliers[0], 1.0, max_relative = 1e-12);
    }

    #[test]
    fn general_inequality() {
        // min 1/2 (x^2 + y^2) + x  s.t.  x + 2y >= 1
        let mut p = QpProblem::unconstrained(DMatrix::identity(2, 2), DVector::from_vec(vec![1.0, 0.0]));
        p.a_ieq = DMatrix::from_row_slice(1, 2, &[-1.0, -2.0]);
        p.b_ieq = DVector::from_vec(vec![-1.0]);
        let sol = solve(&p, 1e-10, 50).unwrap();
        assert_eq!(sol.status, QpStatus::Optimal);
        assert_relative_eq!(sol.x[0], -0.6, max_relative = 1e-12);
        assert_relative_eq!(sol.x[1], 0.8, max_relative = 1e-12);
        assert!(kkt_residuals(&p, &sol).max() < 1e-12);
    }

    #[test]
    fn detects_infeasibility() {
        let mut p = QpProblem::unconstrained(DMatrix::identity(2, 2), DVector::zeros(2));
        // x0 >= 2 and x0 <= 1
        p.a_ieq = DMatrix::from_row_slice(2, 2, &[-1.0, 0.0, 1.0, 0.0]);
        p.b_ieq = DVector::from_vec(vec![-2.0, 1.0]);
        assert_eq!(solve(&p, 1e-8, 100).unwrap().status, QpStatus::Infeasible);

        let bad_box = boxed(DMatrix::identity(2, 2), DVector::zeros(2), 1.0, 0.0);
        assert_eq!(solve(&bad_box, 1e-8, 100).unwrap().status, QpStatus::Infeasible);
    }

    #[test]
    fn iteration_budget() {
        let p = boxed(DMatrix::identity(4, 4), DVector::from_element(4, -5.0), -1.0, 1.0);
        let sol = solve(&p, 1e-8, 2).unwrap();
        assert_eq!(sol.status, QpStatus::MaxIterations);
        assert_eq!(sol.iterations, 2);
    }

    #[test]
    fn dimension_errors() {
        let mut p = QpProblem::unconstrained(DMatrix::identity(2, 2), DVector::zeros(3));
        assert!(solve(&p, 1e-8, 10).is_err());
        p.h = DMatrix::identity(3, 3);
        p.b_ieq = DVector::zeros(1);
        assert!(solve(&p, 1e-8, 10).is_err());
    }

    #[test]
    fn indefinite_hessian_is_regularized() {
        let h = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, 0.0]);
        let p = boxed(h, DVector::from_vec(vec![-1.0, -1.0]), -3.0, 3.0);
        let sol = solve(&p, 1e-8, 50).unwrap();
        assert!(sol.regularized);
        assert_eq!(sol.status, QpStatus::Optimal);
        assert_relative_eq!(sol.x[0], 1.0, max_relative = 1e-6);
        assert_relative_eq!(sol.x[1], 3.0, max_relative = 1e-12);
    }

    #[test]
    fn perturbation_raises_stationarity_linearly() {
        let h = DMatrix::from_row_slice(2, 2, &[3.0, 1.0, 1.0, 2.0]);
        let p = QpProblem::unconstrained(h, DVector::from_vec(vec![1.0, -1.0]));
        let sol = solve(&p, 1e-10, 10).unwrap();
        let base = kkt_residuals(&p, &sol).stationarity;
        assert!(base < 1e-12);
        let residual_at = |eps: f64| {
            let mut s = sol.clone();
            s.x[0] += eps;
            kkt_residuals(&p, &s).stationarity
        };
        assert_relative_eq!(residual_at(1e-3), 3e-3, max_relative = 1e-8);
        assert_relative_eq!(residual_at(2e-3), 6e-3, max_relative = 1e-8);
    }

    proptest! {
        #[test]
        fn objective_scaling_invariance(seed in 0u64..1000, c in 0.01..100.0f64) {
            use rand::{Rng, SeedableRng};
            let mut rng = rand::rngs::StdRng::seed_from_u64(seed);
            let n = 4;
            let m = DMatrix::from_fn(n, n, |_, _| rng.gen_range(-1.0..1.0));
            let h = &m * m.transpose() + DMatrix::identity(n, n);
            let f = DVector::from_fn(n, |_, _| rng.gen_range(-3.0..3.0));
            let mut p = boxed(h, f, -0.5, 0.5);
            p.a_ieq = DMatrix::from_fn(3, n, |_, _| rng.gen_range(-1.0..1.0));
            p.b_ieq = DVector::from_fn(3, |_, _| rng.gen_range(0.1..1.0));
            let a = solve(&p, 1e-10, 200).unwrap();
            let mut scaled = p.clone();
            scaled.h *= c;
            scaled.f *= c;
            let b = solve(&scaled, 1e-10, 200).unwrap();
            prop_assert_eq!(a.status, QpStatus::Optimal);
            prop_assert!((a.x - b.x).amax() < 1e-8);
        }
    }
}
