//! Dense convex quadratic programming for the small control problems.
//!
//! ```text
//! minimize    ½ xᵀ H x + fᵀ x
//! subject to  Aeq x = beq,   Aineq x ≥ bineq
//! ```
//!
//! Primal active-set method. Equalities stay in the working set for the whole
//! solve. A feasible starting point is taken from the previous call's working
//! set, the equality-only minimizer, or an elastic phase-1 problem with one
//! shared slack `t ≥ 0` on every inequality, in that order.
//!
//! Multipliers follow `H x + f − Aeqᵀ μ − Aineqᵀ ν = 0` with `ν ≥ 0`.

use std::io::Write;

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

use crate::numfmt::general17;

pub const KKT_TOLERANCE: f64 = 1e-8;
pub const REGULARIZATION: f64 = 1e-10;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum QpError {
    #[error("no point satisfies the constraints")]
    Infeasible,
    #[error("objective is unbounded below on the feasible set")]
    Unbounded,
    #[error("active-set iteration limit reached")]
    MaxIterations,
    #[error("equality constraints are linearly dependent")]
    DependentConstraints,
    #[error("dimension mismatch: {0}")]
    Dimension(String),
}

#[derive(Debug, Clone, PartialEq)]
pub struct QpProblem {
    pub h: DMatrix<f64>,
    pub f: DVector<f64>,
    pub a_eq: DMatrix<f64>,
    pub b_eq: DVector<f64>,
    pub a_ineq: DMatrix<f64>,
    pub b_ineq: DVector<f64>,
}

impl QpProblem {
    pub fn new(h: DMatrix<f64>, f: DVector<f64>) -> Self {
        let n = f.len();
        QpProblem {
            h,
            f,
            a_eq: DMatrix::zeros(0, n),
            b_eq: DVector::zeros(0),
            a_ineq: DMatrix::zeros(0, n),
            b_ineq: DVector::zeros(0),
        }
    }

    pub fn with_equalities(mut self, a: DMatrix<f64>, b: DVector<f64>) -> Self {
        self.a_eq = a;
        self.b_eq = b;
        self
    }

    pub fn with_inequalities(mut self, a: DMatrix<f64>, b: DVector<f64>) -> Self {
        self.a_ineq = a;
        self.b_ineq = b;
        self
    }

    pub fn dim(&self) -> usize {
        self.f.len()
    }

    pub fn objective(&self, x: &DVector<f64>) -> f64 {
        0.5 * x.dot(&(&self.h * x)) + self.f.dot(x)
    }

    fn validate(&self) -> Result<(), QpError> {
        let n = self.dim();
        let dims_ok = self.h.nrows() == n
            && self.h.ncols() == n
            && self.a_eq.ncols() == n
            && self.a_eq.nrows() == self.b_eq.len()
            && self.a_ineq.ncols() == n
            && self.a_ineq.nrows() == self.b_ineq.len();
        if !dims_ok {
            return Err(QpError::Dimension(format!(
                "n = {n}, H {}x{}, Aeq {}x{} / {}, Aineq {}x{} / {}",
                self.h.nrows(),
                self.h.ncols(),
                self.a_eq.nrows(),
                self.a_eq.ncols(),
                self.b_eq.len(),
                self.a_ineq.nrows(),
                self.a_ineq.ncols(),
                self.b_ineq.len()
            )));
        }
        let scale = 1.0 + self.h.amax();
        if (&self.h - self.h.transpose()).amax() > 1e-12 * scale {
            return Err(QpError::Dimension("H is not symmetric".into()));
        }
        Ok(())
    }

    /// Plain-text dump: a header line `n m_eq m_ineq`, then H, f, Aeq, beq,
    /// Aineq, bineq, one matrix row per line, entries formatted `%.17g`.
    pub fn write_dump<W: Write>(&self, w: &mut W) -> std::io::Result<()> {
        writeln!(w, "{} {} {}", self.dim(), self.b_eq.len(), self.b_ineq.len())?;
        let rows = |m: &DMatrix<f64>, w: &mut W| -> std::io::Result<()> {
            for r in 0..m.nrows() {
                let line: Vec<String> = m.row(r).iter().map(|v| general17(*v)).collect();
                writeln!(w, "{}", line.join(" "))?;
            }
            Ok(())
        };
        rows(&self.h, w)?;
        rows(&DMatrix::from_row_slice(1, self.dim(), self.f.as_slice()), w)?;
        rows(&self.a_eq, w)?;
        rows(&DMatrix::from_row_slice(1, self.b_eq.len(), self.b_eq.as_slice()), w)?;
        rows(&self.a_ineq, w)?;
        rows(&DMatrix::from_row_slice(1, self.b_ineq.len(), self.b_ineq.as_slice()), w)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct QpSolution {
    pub x: DVector<f64>,
    pub eq_multipliers: DVector<f64>,
    pub ineq_multipliers: DVector<f64>,
    /// Indices of inequality rows in the final working set, ascending.
    pub active_set: Vec<usize>,
    pub kkt_residual: f64,
    pub objective: f64,
    pub iterations: usize,
    /// Diagonal shift added to H, zero unless the reduced Hessian was singular.
    pub regularization: f64,
}

/// Max of stationarity, primal infeasibility, negative multipliers and
/// complementary slackness violation.
pub fn kkt_residual(problem: &QpProblem, x: &DVector<f64>, mu: &DVector<f64>, nu: &DVector<f64>) -> f64 {
    let stationarity = &problem.h * x + &problem.f - problem.a_eq.transpose() * mu - problem.a_ineq.transpose() * nu;
    let eq = &problem.a_eq * x - &problem.b_eq;
    let slack = &problem.a_ineq * x - &problem.b_ineq;
    let mut r = stationarity.amax().max(eq.amax());
    for i in 0..slack.len() {
        r = r.max((-slack[i]).max(0.0)).max((-nu[i]).max(0.0)).max((nu[i] * slack[i]).abs());
    }
    r
}

/// Reusable solver; remembers the last working set for warm starts.
#[derive(Debug, Clone)]
pub struct QpSolver {
    pub max_iterations: usize,
    warm: Option<(usize, Vec<usize>)>,
}

impl Default for QpSolver {
    fn default() -> Self {
        QpSolver { max_iterations: 200, warm: None }
    }
}

struct Kkt {
    x: DVector<f64>,
    mu: DVector<f64>,
    nu: DVector<f64>,
}

/// Solves `[H −Aᵀ; A 0] [x; y] = [−f; b]` with one step of iterative refinement.
fn solve_kkt(h: &DMatrix<f64>, f: &DVector<f64>, a: &DMatrix<f64>, b: &DVector<f64>) -> Option<DVector<f64>> {
    let n = h.nrows();
    let m = a.nrows();
    let mut k = DMatrix::zeros(n + m, n + m);
    k.view_mut((0, 0), (n, n)).copy_from(h);
    k.view_mut((0, n), (n, m)).copy_from(&(-a.transpose()));
    k.view_mut((n, 0), (m, n)).copy_from(a);
    let mut rhs = DVector::zeros(n + m);
    rhs.rows_mut(0, n).copy_from(&(-f));
    rhs.rows_mut(n, m).copy_from(b);
    let lu = k.clone().full_piv_lu();
    if !lu.is_invertible() {
        return None;
    }
    let mut sol = lu.solve(&rhs)?;
    let scale = k.amax().max(1.0);
    // Reject numerically singular systems that LU still accepts.
    let pivot_min = lu.u().diagonal().iter().fold(f64::INFINITY, |acc, v| acc.min(v.abs()));
    if pivot_min < 1e-13 * scale {
        return None;
    }
    let residual = &rhs - &k * &sol;
    if let Some(corr) = lu.solve(&residual) {
        sol += corr;
    }
    sol.iter().all(|v| v.is_finite()).then_some(sol)
}

fn stack_rows(top: &DMatrix<f64>, bottom: &DMatrix<f64>, rows: &[usize]) -> DMatrix<f64> {
    let n = top.ncols();
    let mut a = DMatrix::zeros(top.nrows() + rows.len(), n);
    a.view_mut((0, 0), (top.nrows(), n)).copy_from(top);
    for (r, &i) in rows.iter().enumerate() {
        a.row_mut(top.nrows() + r).copy_from(&bottom.row(i));
    }
    a
}

fn working_kkt(p: &QpProblem, working: &[usize]) -> Option<Kkt> {
    let n = p.dim();
    let me = p.b_eq.len();
    let a = stack_rows(&p.a_eq, &p.a_ineq, working);
    let mut b = DVector::zeros(me + working.len());
    b.rows_mut(0, me).copy_from(&p.b_eq);
    for (r, &i) in working.iter().enumerate() {
        b[me + r] = p.b_ineq[i];
    }
    let sol = solve_kkt(&p.h, &p.f, &a, &b)?;
    let mut nu = DVector::zeros(p.b_ineq.len());
    for (r, &i) in working.iter().enumerate() {
        nu[i] = sol[n + me + r];
    }
    Some(Kkt { x: sol.rows(0, n).into_owned(), mu: sol.rows(n, me).into_owned(), nu })
}

fn feasibility_tol(p: &QpProblem) -> f64 {
    1e-10 * (1.0 + p.b_ineq.amax().max(p.b_eq.amax()))
}

fn is_feasible(p: &QpProblem, x: &DVector<f64>) -> bool {
    let tol = feasibility_tol(p);
    (&p.a_ineq * x - &p.b_ineq).iter().all(|s| *s >= -tol) && (&p.a_eq * x - &p.b_eq).amax() <= tol
}

/// Orthonormal basis of the null space of `a` (columns), from the
/// eigen-decomposition of `aᵀa`.
fn null_space(a: &DMatrix<f64>, n: usize) -> Result<DMatrix<f64>, QpError> {
    if a.nrows() == 0 {
        return Ok(DMatrix::identity(n, n));
    }
    let eig = (a.transpose() * a).symmetric_eigen();
    let top = eig.eigenvalues.amax();
    let tol = 1e-12 * top.max(1e-300);
    let cols: Vec<usize> = (0..n).filter(|&i| eig.eigenvalues[i] <= tol).collect();
    if n - cols.len() < a.nrows() {
        return Err(QpError::DependentConstraints);
    }
    Ok(DMatrix::from_fn(n, cols.len(), |r, c| eig.eigenvectors[(r, cols[c])]))
}

impl QpSolver {
    pub fn new() -> Self {
        Self::default()
    }

    /// Drops the remembered working set.
    pub fn reset(&mut self) {
        self.warm = None;
    }

    pub fn solve(&mut self, problem: &QpProblem) -> Result<QpSolution, QpError> {
        problem.validate()?;
        let n = problem.dim();
        let mut p = problem.clone();
        p.h = 0.5 * (&p.h + p.h.transpose());

        let z = null_space(&p.a_eq, n)?;
        let mut regularization = 0.0;
        if z.ncols() > 0 {
            let reduced = z.transpose() * &p.h * &z;
            let eig = reduced.symmetric_eigen();
            let lo = eig.eigenvalues.min();
            let scale = 1.0 + p.h.amax();
            if lo <= 1e-12 * scale {
                if lo < -1e-9 * scale {
                    // Negative curvature on the equality manifold: nonconvex.
                    return Err(QpError::Unbounded);
                }
                self.check_recession(&p, &z, &eig)?;
                regularization = REGULARIZATION;
                for i in 0..n {
                    p.h[(i, i)] += regularization;
                }
            }
        }

        let (x0, working, mut iterations) = self.starting_point(&p)?;
        let (kkt, working, iters) = active_set_loop(&p, x0, working, self.max_iterations)?;
        iterations += iters;

        let bound = 1e8 * (1.0 + p.f.amax() + p.b_eq.amax().max(p.b_ineq.amax()));
        if regularization > 0.0 && kkt.x.amax() > bound {
            return Err(QpError::Unbounded);
        }
        self.warm = Some((n, working.clone()));
        let kkt_residual = kkt_residual(problem, &kkt.x, &kkt.mu, &kkt.nu);
        Ok(QpSolution {
            objective: problem.objective(&kkt.x),
            x: kkt.x,
            eq_multipliers: kkt.mu,
            ineq_multipliers: kkt.nu,
            active_set: working,
            kkt_residual,
            iterations,
            regularization,
        })
    }

    /// Rejects problems whose zero-curvature directions decrease the cost
    /// without meeting any inequality.
    fn check_recession(
        &self,
        p: &QpProblem,
        z: &DMatrix<f64>,
        eig: &nalgebra::SymmetricEigen<f64, nalgebra::Dyn>,
    ) -> Result<(), QpError> {
        let scale = 1.0 + p.h.amax();
        for k in 0..eig.eigenvalues.len() {
            if eig.eigenvalues[k] > 1e-12 * scale {
                continue;
            }
            let d = z * eig.eigenvectors.column(k);
            let slope = p.f.dot(&d);
            if slope.abs() <= 1e-12 * (1.0 + p.f.amax()) {
                continue;
            }
            // Descent direction is −sign(slope)·d; it must hit some inequality.
            let descent = -slope.signum() * &d;
            let blocked = (0..p.b_ineq.len()).any(|i| p.a_ineq.row(i).dot(&descent.transpose()) < -1e-12);
            if !blocked {
                return Err(QpError::Unbounded);
            }
        }
        Ok(())
    }

    fn starting_point(&self, p: &QpProblem) -> Result<(DVector<f64>, Vec<usize>, usize), QpError> {
        if let Some((n, warm)) = &self.warm {
            if *n == p.dim() && warm.iter().all(|&i| i < p.b_ineq.len()) {
                if let Some(k) = working_kkt(p, warm) {
                    if is_feasible(p, &k.x) {
                        return Ok((k.x, warm.clone(), 0));
                    }
                }
            }
        }
        let eq_only = working_kkt(p, &[]).ok_or(QpError::DependentConstraints)?;
        if is_feasible(p, &eq_only.x) {
            return Ok((eq_only.x, Vec::new(), 0));
        }
        elastic_phase(p, eq_only.x, self.max_iterations)
    }
}

/// Phase 1: adds a slack `t` shared by all inequalities and penalizes it
/// linearly (exact penalty), escalating the weight until `t` reaches zero.
fn elastic_phase(p: &QpProblem, x0: DVector<f64>, max_iterations: usize) -> Result<(DVector<f64>, Vec<usize>, usize), QpError> {
    let n = p.dim();
    let mi = p.b_ineq.len();
    let mut h = DMatrix::zeros(n + 1, n + 1);
    h.view_mut((0, 0), (n, n)).copy_from(&p.h);
    h[(n, n)] = 1.0;
    let mut a_eq = DMatrix::zeros(p.b_eq.len(), n + 1);
    a_eq.view_mut((0, 0), (p.b_eq.len(), n)).copy_from(&p.a_eq);
    let mut a_ineq = DMatrix::zeros(mi + 1, n + 1);
    a_ineq.view_mut((0, 0), (mi, n)).copy_from(&p.a_ineq);
    for i in 0..mi {
        a_ineq[(i, n)] = 1.0;
    }
    a_ineq[(mi, n)] = 1.0;
    let mut b_ineq = DVector::zeros(mi + 1);
    b_ineq.rows_mut(0, mi).copy_from(&p.b_ineq);

    let violation = (&p.b_ineq - &p.a_ineq * &x0).max().max(0.0);
    let mut y = DVector::zeros(n + 1);
    y.rows_mut(0, n).copy_from(&x0);
    y[n] = violation;
    let scale = 1.0 + p.f.amax() + p.h.amax() * (1.0 + x0.amax());
    let mut working = Vec::new();
    let mut iterations = 0;
    let feas = feasibility_tol(p);
    for exponent in [2, 5, 8, 11, 14] {
        let mut f = DVector::zeros(n + 1);
        f.rows_mut(0, n).copy_from(&p.f);
        f[n] = scale * 10f64.powi(exponent);
        let aux = QpProblem { h: h.clone(), f, a_eq: a_eq.clone(), b_eq: p.b_eq.clone(), a_ineq: a_ineq.clone(), b_ineq: b_ineq.clone() };
        let (kkt, w, iters) = active_set_loop(&aux, y, working, max_iterations)?;
        iterations += iters;
        y = kkt.x;
        working = w;
        if y[n] <= feas {
            let x = y.rows(0, n).into_owned();
            let orig: Vec<usize> = working.iter().copied().filter(|&i| i < mi).collect();
            // Keep the working set only if it is consistent at x.
            return if is_feasible(p, &x) && working_kkt(p, &orig).is_some() {
                Ok((x, orig, iterations))
            } else if is_feasible(p, &x) {
                Ok((x, Vec::new(), iterations))
            } else {
                Err(QpError::Infeasible)
            };
        }
    }
    Err(QpError::Infeasible)
}

fn active_set_loop(
    p: &QpProblem,
    mut x: DVector<f64>,
    mut working: Vec<usize>,
    max_iterations: usize,
) -> Result<(Kkt, Vec<usize>, usize), QpError> {
    let mi = p.b_ineq.len();
    for iter in 1..=max_iterations {
        let kkt = working_kkt(p, &working).ok_or(QpError::DependentConstraints)?;
        let step = &kkt.x - &x;
        if step.amax() <= 1e-12 * (1.0 + x.amax()) {
            let nu_scale = 1.0 + kkt.nu.amax();
            let mut leaving: Option<(usize, f64)> = None;
            for &i in &working {
                let v = kkt.nu[i];
                if v < -1e-12 * nu_scale && leaving.is_none_or(|(j, best)| v < best || (v == best && i < j)) {
                    leaving = Some((i, v));
                }
            }
            match leaving {
                None => {
                    working.sort_unstable();
                    return Ok((kkt, working, iter));
                }
                Some((i, _)) => {
                    working.retain(|&j| j != i);
                    x = kkt.x;
                }
            }
            continue;
        }
        let mut alpha = 1.0;
        let mut blocking = None;
        for i in 0..mi {
            if working.contains(&i) {
                continue;
            }
            let row = p.a_ineq.row(i);
            let ap = row.dot(&step.transpose());
            if ap < -1e-14 * (1.0 + row.amax() * step.amax()) {
                let ratio = ((p.b_ineq[i] - row.dot(&x.transpose())) / ap).max(0.0);
                if ratio < alpha {
                    alpha = ratio;
                    blocking = Some(i);
                }
            }
        }
        x += alpha * step;
        if let Some(i) = blocking {
            working.push(i);
        }
    }
    Err(QpError::MaxIterations)
}

/// One-shot solve without warm start.
pub fn solve(problem: &QpProblem) -> Result<QpSolution, QpError> {
    QpSolver::new().solve(problem)
}
