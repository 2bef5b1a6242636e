//! Dense primal active-set solver for small convex QPs:
//!
//! ```text
//! min ½ xᵀHx + gᵀx   s.t.   A_eq x + b_eq = 0,   A_in x + b_in ≥ 0
//! ```
//!
//! `H` must be positive definite. Each iteration solves the equality-
//! constrained subproblem on the working set through an LU factorization
//! of the KKT matrix.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

/// Primal feasibility tolerance.
pub const FEAS_TOL: f64 = 1e-9;
const STEP_TOL: f64 = 1e-10;
const DUAL_TOL: f64 = 1e-10;

#[derive(Clone, Debug)]
pub struct QpProblem {
    pub h: DMatrix<f64>,
    pub g: DVector<f64>,
    pub a_eq: DMatrix<f64>,
    pub b_eq: DVector<f64>,
    pub a_in: DMatrix<f64>,
    pub b_in: DVector<f64>,
}

#[derive(Clone, Debug)]
pub struct QpSolution {
    pub x: DVector<f64>,
    /// Indices of inequality rows active at the solution.
    pub active: Vec<usize>,
    /// Multipliers of the equality rows.
    pub lambda_eq: DVector<f64>,
    /// Multipliers of all inequality rows (zero when inactive).
    pub lambda_in: DVector<f64>,
    pub iterations: usize,
    /// Infinity norm of the stationarity and primal equality residuals.
    pub kkt_residual: f64,
}

impl QpProblem {
    pub fn unconstrained(h: DMatrix<f64>, g: DVector<f64>) -> Self {
        let n = g.len();
        Self {
            h,
            g,
            a_eq: DMatrix::zeros(0, n),
            b_eq: DVector::zeros(0),
            a_in: DMatrix::zeros(0, n),
            b_in: DVector::zeros(0),
        }
    }

    pub fn dim(&self) -> usize {
        self.g.len()
    }

    fn check(&self) -> Result<()> {
        let n = self.dim();
        let ok = self.h.nrows() == n
            && self.h.ncols() == n
            && self.a_eq.ncols() == n
            && self.a_eq.nrows() == self.b_eq.len()
            && self.a_in.ncols() == n
            && self.a_in.nrows() == self.b_in.len();
        if !ok {
            return Err(Error::InvalidInput("inconsistent QP dimensions".into()));
        }
        let finite = self.h.iter().chain(self.g.iter()).chain(self.a_eq.iter())
            .chain(self.b_eq.iter()).chain(self.a_in.iter()).chain(self.b_in.iter())
            .all(|v| v.is_finite());
        if !finite {
            return Err(Error::NonFinite("QP data"));
        }
        Ok(())
    }

    /// Inequality residuals `A_in x + b_in`.
    pub fn slacks(&self, x: &DVector<f64>) -> DVector<f64> {
        &self.a_in * x + &self.b_in
    }

    pub fn objective(&self, x: &DVector<f64>) -> f64 {
        0.5 * x.dot(&(&self.h * x)) + self.g.dot(x)
    }

    /// Minimum-norm point satisfying the equality rows.
    pub fn equality_point(&self) -> DVector<f64> {
        if self.a_eq.nrows() == 0 {
            return DVector::zeros(self.dim());
        }
        let svd = self.a_eq.clone().svd(true, true);
        svd.solve(&(-&self.b_eq), 1e-12)
            .unwrap_or_else(|_| DVector::zeros(self.dim()))
    }
}

/// Solves from the feasible start `x0`.
pub fn solve_from(p: &QpProblem, x0: DVector<f64>, max_iter: usize) -> Result<QpSolution> {
    p.check()?;
    let n = p.dim();
    let m_eq = p.a_eq.nrows();
    let m_in = p.a_in.nrows();
    if x0.len() != n {
        return Err(Error::DimensionMismatch {
            expected: n,
            found: x0.len(),
        });
    }
    if (&p.a_eq * &x0 + &p.b_eq).iter().any(|r| r.abs() > 1e-7) || p.slacks(&x0).iter().any(|s| *s < -FEAS_TOL) {
        return Err(Error::Infeasible);
    }

    let mut x = x0;
    let mut working: Vec<usize> = Vec::new();
    for iter in 0..max_iter {
        let m_w = m_eq + working.len();
        let dim = n + m_w;
        let mut kkt = DMatrix::zeros(dim, dim);
        kkt.view_mut((0, 0), (n, n)).copy_from(&p.h);
        let mut a_w = DMatrix::zeros(m_w, n);
        if m_eq > 0 {
            a_w.view_mut((0, 0), (m_eq, n)).copy_from(&p.a_eq);
        }
        for (k, &row) in working.iter().enumerate() {
            a_w.row_mut(m_eq + k).copy_from(&p.a_in.row(row));
        }
        kkt.view_mut((0, n), (n, m_w)).copy_from(&(-a_w.transpose()));
        kkt.view_mut((n, 0), (m_w, n)).copy_from(&a_w);
        let mut rhs = DVector::zeros(dim);
        rhs.rows_mut(0, n).copy_from(&(-(&p.h * &x + &p.g)));
        let sol = kkt
            .lu()
            .solve(&rhs)
            .ok_or_else(|| Error::InvalidInput("singular KKT system".into()))?;
        let step = sol.rows(0, n).into_owned();
        let lambda = sol.rows(n, m_w).into_owned();

        let scale = 1.0 + x.amax();
        if step.amax() <= STEP_TOL * scale {
            let mut worst = None;
            let mut most_negative = -DUAL_TOL;
            for k in 0..working.len() {
                if lambda[m_eq + k] < most_negative {
                    most_negative = lambda[m_eq + k];
                    worst = Some(k);
                }
            }
            match worst {
                Some(k) => {
                    working.remove(k);
                    continue;
                }
                None => {
                    let mut lambda_in = DVector::zeros(m_in);
                    for (k, &row) in working.iter().enumerate() {
                        lambda_in[row] = lambda[m_eq + k];
                    }
                    let lambda_eq = lambda.rows(0, m_eq).into_owned();
                    let stationarity = &p.h * &x + &p.g
                        - p.a_eq.transpose() * &lambda_eq
                        - p.a_in.transpose() * &lambda_in;
                    let primal = &p.a_eq * &x + &p.b_eq;
                    let kkt_residual = stationarity
                        .iter()
                        .chain(primal.iter())
                        .fold(0.0f64, |acc, v| acc.max(v.abs()));
                    let slacks = p.slacks(&x);
                    let mut active: Vec<usize> =
                        (0..m_in).filter(|&r| slacks[r] <= FEAS_TOL).collect();
                    active.sort_unstable();
                    return Ok(QpSolution {
                        x,
                        active,
                        lambda_eq,
                        lambda_in,
                        iterations: iter + 1,
                        kkt_residual,
                    });
                }
            }
        }

        let mut alpha = 1.0;
        let mut blocking = None;
        let slacks = p.slacks(&x);
        for row in 0..m_in {
            if working.contains(&row) {
                continue;
            }
            let ap = p.a_in.row(row).dot(&step.transpose());
            if ap < -1e-15 {
                let t = (slacks[row].max(0.0)) / -ap;
                if t < alpha {
                    alpha = t;
                    blocking = Some(row);
                }
            }
        }
        x += &step * alpha;
        if let Some(row) = blocking {
            working.push(row);
        }
    }
    Err(Error::InvalidInput(format!("QP did not converge in {max_iter} iterations")))
}

/// Solves starting from the minimum-norm equality point, or from the
/// origin when that point violates an inequality.
pub fn solve(p: &QpProblem) -> Result<QpSolution> {
    p.check()?;
    let start = p.equality_point();
    let feasible = |x: &DVector<f64>| {
        (&p.a_eq * x + &p.b_eq).iter().all(|r| r.abs() <= 1e-7)
            && p.slacks(x).iter().all(|s| *s >= -FEAS_TOL)
    };
    let max_iter = 10 * (p.dim() + p.a_in.nrows()) + 50;
    if feasible(&start) {
        return solve_from(p, start, max_iter);
    }
    let origin = DVector::zeros(p.dim());
    if feasible(&origin) {
        return solve_from(p, origin, max_iter);
    }
    Err(Error::Infeasible)
}
