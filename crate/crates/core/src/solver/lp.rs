//! Dense two-phase primal simplex with bounded variables.
//!
//! Sized for the per-user schedule problems: a few dozen variables and
//! rows. Upper bounds are handled implicitly (nonbasic variables rest at
//! either bound), so a box constraint never costs a tableau row.
//!
//! An optional secondary objective breaks ties among optima of the primary
//! objective lexicographically: once no primary-improving column remains,
//! pivots are restricted to columns with zero primary reduced cost.

use thiserror::Error;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Relation {
    Le,
    Ge,
    Eq,
}

#[derive(Clone, Debug)]
pub struct Constraint {
    pub coeffs: Vec<f64>,
    pub relation: Relation,
    pub rhs: f64,
}

#[derive(Clone, Debug, Error, PartialEq)]
pub enum LpError {
    #[error("linear program is infeasible (phase-one residual {residual:.3e})")]
    Infeasible { residual: f64 },
    #[error("linear program is unbounded")]
    Unbounded,
    #[error("simplex exceeded {0} pivots")]
    IterationLimit(usize),
    #[error("malformed linear program: {0}")]
    Malformed(String),
}

#[derive(Clone, Debug)]
pub struct LpSolution {
    pub x: Vec<f64>,
    pub objective: f64,
    pub pivots: usize,
}

/// `minimize objective·x` subject to `lower <= x <= upper` and the row
/// constraints. Lower bounds must be finite; upper bounds may be infinite.
#[derive(Clone, Debug)]
pub struct LinearProgram {
    pub objective: Vec<f64>,
    pub secondary: Option<Vec<f64>>,
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
    pub constraints: Vec<Constraint>,
}

const PIVOT_TOL: f64 = 1e-10;
const FEAS_TOL: f64 = 1e-9;
const DEGENERATE_SWITCH: usize = 64;

impl LinearProgram {
    pub fn new(objective: Vec<f64>, lower: Vec<f64>, upper: Vec<f64>) -> Self {
        Self {
            objective,
            secondary: None,
            lower,
            upper,
            constraints: Vec::new(),
        }
    }

    pub fn with_secondary(mut self, secondary: Vec<f64>) -> Self {
        self.secondary = Some(secondary);
        self
    }

    pub fn push(&mut self, coeffs: Vec<f64>, relation: Relation, rhs: f64) {
        self.constraints.push(Constraint { coeffs, relation, rhs });
    }

    pub fn num_vars(&self) -> usize {
        self.objective.len()
    }

    fn check_shape(&self) -> Result<(), LpError> {
        let n = self.num_vars();
        if self.lower.len() != n || self.upper.len() != n {
            return Err(LpError::Malformed("bound vectors do not match objective".into()));
        }
        if let Some(sec) = &self.secondary {
            if sec.len() != n {
                return Err(LpError::Malformed("secondary objective length".into()));
            }
        }
        for (j, (&l, &u)) in self.lower.iter().zip(&self.upper).enumerate() {
            if !l.is_finite() || u.is_nan() {
                return Err(LpError::Malformed(format!("variable {j} has bad bounds")));
            }
            if u < l - FEAS_TOL {
                return Err(LpError::Infeasible { residual: l - u });
            }
        }
        for (i, c) in self.constraints.iter().enumerate() {
            if c.coeffs.len() != n || !c.rhs.is_finite() {
                return Err(LpError::Malformed(format!("constraint {i} is malformed")));
            }
        }
        Ok(())
    }

    pub fn solve(&self) -> Result<LpSolution, LpError> {
        self.check_shape()?;
        let mut tab = Tableau::build(self);
        tab.run_phase_one()?;
        tab.run_phase_two(self)?;
        let x = tab.structural_values(self);
        let objective = self.objective.iter().zip(&x).map(|(c, v)| c * v).sum();
        Ok(LpSolution {
            x,
            objective,
            pivots: tab.pivots,
        })
    }
}

struct Tableau {
    rows: usize,
    cols: usize,
    n_struct: usize,
    first_artificial: usize,
    // row-major, rows × cols, holds B⁻¹A
    t: Vec<f64>,
    basis: Vec<usize>,
    xb: Vec<f64>,
    upper: Vec<f64>,
    at_upper: Vec<bool>,
    is_basic: Vec<bool>,
    excluded: Vec<bool>,
    pivots: usize,
    max_pivots: usize,
}

impl Tableau {
    fn build(lp: &LinearProgram) -> Self {
        let n = lp.num_vars();
        let m = lp.constraints.len();
        let n_slack = lp.constraints.iter().filter(|c| c.relation != Relation::Eq).count();

        // Shift x = lower + y so every structural variable lives in [0, u - l].
        let mut rhs: Vec<f64> = lp
            .constraints
            .iter()
            .map(|c| c.rhs - c.coeffs.iter().zip(&lp.lower).map(|(a, l)| a * l).sum::<f64>())
            .collect();

        // Decide which rows can start with their slack basic and which need
        // an artificial.
        let mut slack_col = vec![usize::MAX; m];
        let mut slack_sign = vec![0.0; m];
        let mut row_sign = vec![1.0; m];
        let mut needs_art = vec![false; m];
        let mut next_slack = n;
        for (i, c) in lp.constraints.iter().enumerate() {
            let s = match c.relation {
                Relation::Le => 1.0,
                Relation::Ge => -1.0,
                Relation::Eq => 0.0,
            };
            if s != 0.0 {
                slack_col[i] = next_slack;
                slack_sign[i] = s;
                next_slack += 1;
            }
            if rhs[i] < 0.0 {
                row_sign[i] = -1.0;
                rhs[i] = -rhs[i];
            }
            needs_art[i] = !(s != 0.0 && s * row_sign[i] > 0.0);
        }
        let n_art = needs_art.iter().filter(|&&b| b).count();
        let first_artificial = n + n_slack;
        let cols = first_artificial + n_art;

        let mut t = vec![0.0; m * cols];
        let mut basis = vec![0; m];
        let mut next_art = first_artificial;
        for (i, c) in lp.constraints.iter().enumerate() {
            let row = &mut t[i * cols..(i + 1) * cols];
            for (j, a) in c.coeffs.iter().enumerate() {
                row[j] = row_sign[i] * a;
            }
            if slack_col[i] != usize::MAX {
                row[slack_col[i]] = row_sign[i] * slack_sign[i];
            }
            if needs_art[i] {
                row[next_art] = 1.0;
                basis[i] = next_art;
                next_art += 1;
            } else {
                basis[i] = slack_col[i];
            }
        }

        let mut upper = vec![f64::INFINITY; cols];
        for j in 0..n {
            upper[j] = (lp.upper[j] - lp.lower[j]).max(0.0);
        }
        let mut is_basic = vec![false; cols];
        for &b in &basis {
            is_basic[b] = true;
        }

        Self {
            rows: m,
            cols,
            n_struct: n,
            first_artificial,
            t,
            basis,
            xb: rhs,
            upper,
            at_upper: vec![false; cols],
            is_basic,
            excluded: vec![false; cols],
            pivots: 0,
            max_pivots: 200 * (m + cols + 10),
        }
    }

    fn reduced_costs(&self, cost: &[f64]) -> Vec<f64> {
        let mut d = cost.to_vec();
        for i in 0..self.rows {
            let cb = cost[self.basis[i]];
            if cb != 0.0 {
                let row = &self.t[i * self.cols..(i + 1) * self.cols];
                for (dj, a) in d.iter_mut().zip(row) {
                    *dj -= cb * a;
                }
            }
        }
        for (j, dj) in d.iter_mut().enumerate() {
            if self.is_basic[j] {
                *dj = 0.0;
            }
        }
        d
    }

    fn improving(&self, j: usize, dj: f64, tol: f64) -> bool {
        if self.at_upper[j] {
            dj > tol
        } else {
            dj < -tol && self.upper[j] > 0.0
        }
    }

    fn choose_entering(&self, d: &[f64], d2: Option<&[f64]>, tol: f64, tol2: f64, bland: bool) -> Option<usize> {
        let candidates = (0..self.cols).filter(|&j| !self.is_basic[j] && !self.excluded[j]);
        let mut best: Option<(usize, f64)> = None;
        for j in candidates.clone() {
            if self.improving(j, d[j], tol) {
                if bland {
                    return Some(j);
                }
                let score = d[j].abs();
                if best.is_none_or(|(_, s)| score > s) {
                    best = Some((j, score));
                }
            }
        }
        if best.is_some() {
            return best.map(|(j, _)| j);
        }
        let d2 = d2?;
        for j in candidates {
            // Secondary moves may not disturb the primary optimum: the column
            // must be primary-neutral, or pinned against the bound it sits on.
            if d[j].abs() <= tol && self.improving(j, d2[j], tol2) {
                if bland {
                    return Some(j);
                }
                let score = d2[j].abs();
                if best.is_none_or(|(_, s)| score > s) {
                    best = Some((j, score));
                }
            }
        }
        best.map(|(j, _)| j)
    }

    /// Runs pivots until no improving column remains. `costs` is the primary
    /// cost row, `secondary` the optional tie-break row.
    fn optimize(&mut self, costs: &[f64], secondary: Option<&[f64]>) -> Result<(), LpError> {
        let scale = costs.iter().fold(1.0_f64, |m, c| m.max(c.abs()));
        let tol = 1e-11 * scale;
        let mut d = self.reduced_costs(costs);
        let mut d2 = secondary.map(|s| self.reduced_costs(s));
        let tol2 = secondary
            .map(|s| 1e-11 * s.iter().fold(1.0_f64, |m, c| m.max(c.abs())))
            .unwrap_or(0.0);
        let mut degenerate_run = 0usize;
        let mut refreshes = 0usize;

        loop {
            if self.pivots >= self.max_pivots {
                return Err(LpError::IterationLimit(self.pivots));
            }
            let bland = degenerate_run > DEGENERATE_SWITCH;
            let Some(q) = self.choose_entering(&d, d2.as_deref(), tol, tol2, bland) else {
                // Confirm optimality against freshly computed reduced costs
                // before accepting; incremental updates drift slightly.
                if refreshes < 3 {
                    let fresh = self.reduced_costs(costs);
                    let fresh2 = secondary.map(|s| self.reduced_costs(s));
                    let more = self
                        .choose_entering(&fresh, fresh2.as_deref(), tol, tol2, false)
                        .is_some();
                    d = fresh;
                    d2 = fresh2;
                    if more {
                        refreshes += 1;
                        continue;
                    }
                }
                return Ok(());
            };
            let dir = if self.at_upper[q] { -1.0 } else { 1.0 };

            // Ratio test.
            let mut theta = self.upper[q];
            let mut leave: Option<(usize, bool)> = None;
            let mut best_alpha = 0.0;
            for i in 0..self.rows {
                let alpha = self.t[i * self.cols + q] * dir;
                let b = self.basis[i];
                let (limit, to_upper) = if alpha > PIVOT_TOL {
                    (self.xb[i].max(0.0) / alpha, false)
                } else if alpha < -PIVOT_TOL && self.upper[b].is_finite() {
                    ((self.upper[b] - self.xb[i]).max(0.0) / -alpha, true)
                } else {
                    continue;
                };
                let take = match leave {
                    None => limit <= theta,
                    Some((r, _)) => {
                        limit < theta - 1e-12
                            || (limit <= theta + 1e-12
                                && if bland {
                                    b < self.basis[r]
                                } else {
                                    alpha.abs() > best_alpha
                                })
                    }
                };
                if take {
                    theta = theta.min(limit);
                    leave = Some((i, to_upper));
                    best_alpha = alpha.abs();
                }
            }
            if !theta.is_finite() {
                return Err(LpError::Unbounded);
            }
            if theta <= 1e-12 {
                degenerate_run += 1;
            } else {
                degenerate_run = 0;
            }
            self.pivots += 1;

            for i in 0..self.rows {
                let alpha = self.t[i * self.cols + q];
                if alpha != 0.0 {
                    self.xb[i] -= dir * theta * alpha;
                }
            }

            match leave {
                None => {
                    // Bound flip: entering variable crosses its whole range.
                    self.at_upper[q] = !self.at_upper[q];
                }
                Some((r, to_upper)) => {
                    let entering_value = if dir > 0.0 { theta } else { self.upper[q] - theta };
                    let leaving = self.basis[r];
                    self.is_basic[leaving] = false;
                    self.at_upper[leaving] = to_upper;
                    self.is_basic[q] = true;
                    self.at_upper[q] = false;
                    self.basis[r] = q;
                    self.xb[r] = entering_value;
                    self.pivot(r, q, &mut d, d2.as_mut());
                }
            }
        }
    }

    fn pivot(&mut self, r: usize, q: usize, d: &mut [f64], d2: Option<&mut Vec<f64>>) {
        let cols = self.cols;
        let p = self.t[r * cols + q];
        {
            let row = &mut self.t[r * cols..(r + 1) * cols];
            for v in row.iter_mut() {
                *v /= p;
            }
            row[q] = 1.0;
        }
        let pivot_row: Vec<f64> = self.t[r * cols..(r + 1) * cols].to_vec();
        for i in 0..self.rows {
            if i == r {
                continue;
            }
            let f = self.t[i * cols + q];
            if f == 0.0 {
                continue;
            }
            let row = &mut self.t[i * cols..(i + 1) * cols];
            for (v, pr) in row.iter_mut().zip(&pivot_row) {
                *v -= f * pr;
            }
            row[q] = 0.0;
        }
        let fq = d[q];
        if fq != 0.0 {
            for (v, pr) in d.iter_mut().zip(&pivot_row) {
                *v -= fq * pr;
            }
        }
        d[q] = 0.0;
        if let Some(d2) = d2 {
            let fq = d2[q];
            if fq != 0.0 {
                for (v, pr) in d2.iter_mut().zip(&pivot_row) {
                    *v -= fq * pr;
                }
            }
            d2[q] = 0.0;
        }
    }

    fn run_phase_one(&mut self) -> Result<(), LpError> {
        if self.first_artificial == self.cols {
            return Ok(());
        }
        let mut cost = vec![0.0; self.cols];
        for c in cost.iter_mut().skip(self.first_artificial) {
            *c = 1.0;
        }
        self.optimize(&cost, None)?;
        let residual: f64 = (0..self.rows)
            .filter(|&i| self.basis[i] >= self.first_artificial)
            .map(|i| self.xb[i].max(0.0))
            .sum();
        if residual > FEAS_TOL * (1.0 + self.rows as f64) {
            return Err(LpError::Infeasible { residual });
        }
        // Artificials are pinned to zero from here on; basic ones get driven
        // out by degenerate pivots as soon as their row is touched.
        for j in self.first_artificial..self.cols {
            self.upper[j] = 0.0;
            self.excluded[j] = true;
            self.at_upper[j] = false;
        }
        for i in 0..self.rows {
            if self.basis[i] >= self.first_artificial {
                self.xb[i] = 0.0;
            }
        }
        Ok(())
    }

    fn run_phase_two(&mut self, lp: &LinearProgram) -> Result<(), LpError> {
        let mut cost = vec![0.0; self.cols];
        cost[..self.n_struct].copy_from_slice(&lp.objective);
        let secondary = lp.secondary.as_ref().map(|s| {
            let mut v = vec![0.0; self.cols];
            v[..self.n_struct].copy_from_slice(s);
            v
        });
        self.optimize(&cost, secondary.as_deref())
    }

    fn structural_values(&self, lp: &LinearProgram) -> Vec<f64> {
        let mut y = vec![0.0; self.n_struct];
        for (j, yj) in y.iter_mut().enumerate() {
            if !self.is_basic[j] && self.at_upper[j] {
                *yj = self.upper[j];
            }
        }
        for (i, &b) in self.basis.iter().enumerate() {
            if b < self.n_struct {
                y[b] = self.xb[i].clamp(0.0, self.upper[b]);
            }
        }
        y.iter().zip(&lp.lower).map(|(v, l)| v + l).collect()
    }
}
