//! Self-contained linear-programming solver: a sparse, bounded-variable,
//! two-phase revised simplex method with LU-factorized basis, product-form
//! eta updates and periodic refactorization. Deterministic: no randomized
//! tie-breaking, so identical inputs yield identical pivot sequences.

pub mod lu;

use lu::{LuFactors, WorkVec};
use thiserror::Error;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Sense {
    Le,
    Eq,
    Ge,
}

#[derive(Debug, Error)]
pub enum LpError {
    #[error("variable index {0} out of range")]
    BadVariable(usize),
    #[error("invalid bounds for variable {0}: [{1}, {2}]")]
    BadBounds(usize, f64, f64),
    #[error("basis hint names variable {0} twice or out of range")]
    BadBasisHint(usize),
    #[error("basis factorization failed at slot {0}; the hinted basis is singular")]
    SingularBasis(usize),
}

/// Column-oriented LP: minimize `c . x` subject to row constraints and
/// variable bounds.
#[derive(Debug, Clone, Default)]
pub struct Problem {
    obj: Vec<f64>,
    lower: Vec<f64>,
    upper: Vec<f64>,
    cols: Vec<Vec<(usize, f64)>>,
    row_sense: Vec<Sense>,
    rhs: Vec<f64>,
}

impl Problem {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add_var(&mut self, obj: f64, lower: f64, upper: f64) -> usize {
        self.obj.push(obj);
        self.lower.push(lower);
        self.upper.push(upper);
        self.cols.push(Vec::new());
        self.obj.len() - 1
    }

    /// Add a row `sum coef * x  <sense>  rhs`. Entries must name existing
    /// variables; duplicate entries are summed.
    pub fn add_row(&mut self, sense: Sense, rhs: f64, entries: &[(usize, f64)]) -> usize {
        let row = self.rhs.len();
        self.row_sense.push(sense);
        self.rhs.push(rhs);
        for &(j, v) in entries {
            if v != 0.0 {
                if let Some(slot) = self.cols[j].iter_mut().find(|(r, _)| *r == row) {
                    slot.1 += v;
                } else {
                    self.cols[j].push((row, v));
                }
            }
        }
        row
    }

    pub fn set_bounds(&mut self, var: usize, lower: f64, upper: f64) {
        self.lower[var] = lower;
        self.upper[var] = upper;
    }

    pub fn bounds(&self, var: usize) -> (f64, f64) {
        (self.lower[var], self.upper[var])
    }

    pub fn num_vars(&self) -> usize {
        self.obj.len()
    }

    pub fn num_rows(&self) -> usize {
        self.rhs.len()
    }

    pub fn num_nonzeros(&self) -> usize {
        self.cols.iter().map(Vec::len).sum()
    }

    /// Sparse `(row, coefficient)` entries of a variable's column.
    pub fn col_entries(&self, var: usize) -> &[(usize, f64)] {
        &self.cols[var]
    }

    pub fn row_info(&self, row: usize) -> (Sense, f64) {
        (self.row_sense[row], self.rhs[row])
    }

    /// Plain-text dump for debugging, one row per line.
    pub fn write_text<W: std::io::Write>(&self, mut out: W) -> std::io::Result<()> {
        writeln!(out, "minimize")?;
        for (j, &c) in self.obj.iter().enumerate() {
            if c != 0.0 {
                write!(out, " {c:+}*x{j}")?;
            }
        }
        writeln!(out, "\nsubject to")?;
        let mut rows: Vec<Vec<(usize, f64)>> = vec![Vec::new(); self.num_rows()];
        for (j, col) in self.cols.iter().enumerate() {
            for &(r, v) in col {
                rows[r].push((j, v));
            }
        }
        for (r, row) in rows.iter().enumerate() {
            write!(out, "r{r}:")?;
            for &(j, v) in row {
                write!(out, " {v:+}*x{j}")?;
            }
            let op = match self.row_sense[r] {
                Sense::Le => "<=",
                Sense::Eq => "=",
                Sense::Ge => ">=",
            };
            writeln!(out, " {op} {}", self.rhs[r])?;
        }
        writeln!(out, "bounds")?;
        for j in 0..self.num_vars() {
            writeln!(out, " {} <= x{j} <= {}", self.lower[j], self.upper[j])?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Status {
    Optimal,
    Infeasible,
    Unbounded,
    IterLimit,
}

/// Wrapper making a non-optimal status usable as an error value.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SolveStatusError(pub Status);

impl std::fmt::Display for SolveStatusError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let what = match self.0 {
            Status::Optimal => "optimal",
            Status::Infeasible => "infeasible",
            Status::Unbounded => "unbounded",
            Status::IterLimit => "iteration limit reached",
        };
        write!(f, "{what}")
    }
}

impl std::error::Error for SolveStatusError {}

#[derive(Debug, Clone)]
pub struct Solution {
    pub status: Status,
    pub objective: f64,
    pub x: Vec<f64>,
    pub iterations: usize,
    /// Final basis, one variable per row; slacks are `num_vars + row`.
    /// Together with `at_upper` this makes a [`WarmStart`] for a re-solve
    /// of the same problem, possibly with extra rows appended.
    pub basis: Vec<usize>,
    /// Bound status of every variable and slack at termination.
    pub at_upper: Vec<bool>,
}

/// Basis and bound status carried from one solve to the next. Rows present
/// in the new problem but not covered by `basis` start with their slack
/// basic, so appending cutting planes keeps the start point valid.
#[derive(Debug, Clone)]
pub struct WarmStart {
    pub basis: Vec<usize>,
    pub at_upper: Vec<bool>,
}

impl From<&Solution> for WarmStart {
    fn from(s: &Solution) -> Self {
        Self {
            basis: s.basis.clone(),
            at_upper: s.at_upper.clone(),
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct Options {
    pub max_iterations: usize,
    pub feas_tol: f64,
    pub dual_tol: f64,
    pub refactor_every: usize,
}

impl Default for Options {
    fn default() -> Self {
        Self {
            max_iterations: 5_000_000,
            feas_tol: 1e-7,
            dual_tol: 1e-7,
            refactor_every: 40,
        }
    }
}

pub fn solve(p: &Problem, opts: &Options) -> Result<Solution, LpError> {
    solve_with_basis(p, opts, None)
}

/// `row_basis[i]`, when given, names a structural variable to place in the
/// basis for row `i` (`None` = the row's slack). A good hint can remove
/// phase 1 entirely.
pub fn solve_with_basis(
    p: &Problem,
    opts: &Options,
    row_basis: Option<&[Option<usize>]>,
) -> Result<Solution, LpError> {
    Simplex::new(p, opts, row_basis, None)?.run()
}

/// Re-solve `p` starting from the basis and bound statuses of a previous
/// solution of the same problem. `p` may have gained rows since then (their
/// slacks start basic); columns must be unchanged.
pub fn solve_warm(p: &Problem, opts: &Options, warm: &WarmStart) -> Result<Solution, LpError> {
    Simplex::new(p, opts, None, Some(warm))?.run()
}

const NONE: usize = usize::MAX;

struct Simplex<'a> {
    p: &'a Problem,
    opts: Options,
    m: usize,
    n: usize,
    /// Row-wise adjacency of the structural columns.
    rows: Vec<Vec<(usize, f64)>>,
    // Bounds for all n + m variables (structurals then slacks).
    lower: Vec<f64>,
    upper: Vec<f64>,
    cost: Vec<f64>,
    basis: Vec<usize>,
    slot_of: Vec<usize>,
    at_upper: Vec<bool>,
    x_b: Vec<f64>,
    d: Vec<f64>,
    factor: LuFactors,
    etas: Vec<Eta>,
    iterations: usize,
    phase1: bool,
    needs_refresh: bool,
    degenerate_streak: usize,
}

struct Eta {
    slot: usize,
    w: Vec<(usize, f64)>,
    w_r: f64,
}

impl<'a> Simplex<'a> {
    fn new(
        p: &'a Problem,
        opts: &Options,
        row_basis: Option<&[Option<usize>]>,
        warm: Option<&WarmStart>,
    ) -> Result<Self, LpError> {
        let m = p.num_rows();
        let n = p.num_vars();
        for j in 0..n {
            if p.lower[j] > p.upper[j] || p.lower[j].is_nan() || p.upper[j].is_nan() {
                return Err(LpError::BadBounds(j, p.lower[j], p.upper[j]));
            }
        }
        let mut lower = p.lower.clone();
        let mut upper = p.upper.clone();
        let mut cost = p.obj.clone();
        for i in 0..m {
            let (lo, hi) = match p.row_sense[i] {
                Sense::Le => (0.0, f64::INFINITY),
                Sense::Ge => (f64::NEG_INFINITY, 0.0),
                Sense::Eq => (0.0, 0.0),
            };
            lower.push(lo);
            upper.push(hi);
            cost.push(0.0);
        }
        let mut rows: Vec<Vec<(usize, f64)>> = vec![Vec::new(); m];
        for (j, col) in p.cols.iter().enumerate() {
            for &(r, v) in col {
                rows[r].push((j, v));
            }
        }

        let mut basis: Vec<usize> = (0..m).map(|i| n + i).collect();
        if let Some(hint) = row_basis {
            let mut used = vec![false; n];
            for (i, h) in hint.iter().enumerate().take(m) {
                if let Some(j) = *h {
                    if j >= n || used[j] {
                        return Err(LpError::BadBasisHint(j));
                    }
                    used[j] = true;
                    basis[i] = j;
                }
            }
        }
        let mut at_upper: Vec<bool> = (0..n + m)
            .map(|j| !lower[j].is_finite() && upper[j].is_finite())
            .collect();
        if let Some(w) = warm {
            if w.basis.len() > m || w.at_upper.len() > n + m {
                return Err(LpError::BadBasisHint(w.basis.len()));
            }
            for (i, &j) in w.basis.iter().enumerate() {
                if j >= n + m {
                    return Err(LpError::BadBasisHint(j));
                }
                basis[i] = j;
            }
            at_upper[..w.at_upper.len()].copy_from_slice(&w.at_upper);
        }
        let mut slot_of = vec![NONE; n + m];
        for (i, &j) in basis.iter().enumerate() {
            if slot_of[j] != NONE {
                return Err(LpError::BadBasisHint(j));
            }
            slot_of[j] = i;
        }

        let factor = factorize_basis(p, m, &basis)?;
        let mut s = Self {
            p,
            opts: *opts,
            m,
            n,
            rows,
            lower,
            upper,
            cost,
            basis,
            slot_of,
            at_upper,
            x_b: vec![0.0; m],
            d: vec![0.0; n + m],
            factor,
            etas: Vec::new(),
            iterations: 0,
            phase1: false,
            needs_refresh: false,
            degenerate_streak: 0,
        };
        s.recompute_x_b();
        Ok(s)
    }

    fn nb_value(&self, j: usize) -> f64 {
        if self.at_upper[j] {
            self.upper[j]
        } else if self.lower[j].is_finite() {
            self.lower[j]
        } else {
            0.0
        }
    }

    fn column(&self, j: usize) -> ColRef<'_> {
        if j < self.n {
            ColRef::Structural(&self.p.cols[j])
        } else {
            ColRef::Slack(j - self.n)
        }
    }

    fn recompute_x_b(&mut self) {
        // x_B = B^-1 (b - N x_N)
        let mut rhs = self.p.rhs.clone();
        for j in 0..self.n + self.m {
            if self.slot_of[j] != NONE {
                continue;
            }
            let v = self.nb_value(j);
            if v == 0.0 {
                continue;
            }
            match self.column(j) {
                ColRef::Structural(col) => {
                    for &(r, a) in col {
                        rhs[r] -= a * v;
                    }
                }
                ColRef::Slack(r) => rhs[r] -= v,
            }
        }
        let mut work = WorkVec::new(self.m);
        for (r, &v) in rhs.iter().enumerate() {
            if v != 0.0 {
                work.add(self.factor.row_pos[r], v);
            }
        }
        self.factor.solve_in_place(&mut work);
        self.apply_etas(&mut work);
        for i in 0..self.m {
            self.x_b[i] = work.vals[i];
        }
    }

    fn apply_etas(&self, work: &mut WorkVec) {
        for eta in &self.etas {
            let vr = work.vals[eta.slot];
            if vr == 0.0 && !work.seen[eta.slot] {
                continue;
            }
            let pivot = vr / eta.w_r;
            work.set(eta.slot, pivot);
            if pivot != 0.0 {
                for &(i, wv) in &eta.w {
                    if i != eta.slot {
                        work.add(i, -wv * pivot);
                    }
                }
            }
        }
    }

    fn apply_etas_transposed(&self, work: &mut WorkVec) {
        for eta in self.etas.iter().rev() {
            let mut acc = work.vals[eta.slot];
            for &(i, wv) in &eta.w {
                if i != eta.slot {
                    acc -= wv * work.vals[i];
                }
            }
            work.set(eta.slot, acc / eta.w_r);
        }
    }

    /// FTRAN: `B^-1 a_j` into `work` (slot space).
    fn ftran(&self, j: usize, work: &mut WorkVec) {
        work.clear();
        match self.column(j) {
            ColRef::Structural(col) => {
                for &(r, v) in col {
                    work.add(self.factor.row_pos[r], v);
                }
            }
            ColRef::Slack(r) => work.add(self.factor.row_pos[r], 1.0),
        }
        self.factor.solve_in_place(work);
        self.apply_etas(work);
    }

    /// BTRAN of the unit vector for `slot`: the corresponding row of
    /// `B^-1`, returned indexed by original row.
    fn btran_unit(&self, slot: usize, work: &mut WorkVec, alpha: &mut Vec<(usize, f64)>) {
        work.clear();
        work.add(slot, 1.0);
        self.apply_etas_transposed(work);
        self.factor.solve_transposed_in_place(work);
        alpha.clear();
        for r in 0..self.m {
            let v = work.vals[self.factor.row_pos[r]];
            if v != 0.0 {
                alpha.push((r, v));
            }
        }
    }

    fn phase1_cost(&self, slot: usize) -> f64 {
        let j = self.basis[slot];
        let x = self.x_b[slot];
        if x < self.lower[j] - self.opts.feas_tol {
            -1.0
        } else if x > self.upper[j] + self.opts.feas_tol {
            1.0
        } else {
            0.0
        }
    }

    fn infeasibility(&self) -> f64 {
        let mut sum = 0.0;
        for i in 0..self.m {
            let j = self.basis[i];
            let x = self.x_b[i];
            if x < self.lower[j] {
                sum += self.lower[j] - x;
            } else if x > self.upper[j] {
                sum += x - self.upper[j];
            }
        }
        sum
    }

    fn recompute_reduced_costs(&mut self) {
        // y solves B^T y = c_B; d_j = c_j - y . a_j.
        let mut work = WorkVec::new(self.m);
        for i in 0..self.m {
            let c = if self.phase1 {
                self.phase1_cost(i)
            } else {
                self.cost[self.basis[i]]
            };
            if c != 0.0 {
                work.add(i, c);
            }
        }
        self.apply_etas_transposed(&mut work);
        self.factor.solve_transposed_in_place(&mut work);
        let mut y = vec![0.0; self.m];
        for r in 0..self.m {
            y[r] = work.vals[self.factor.row_pos[r]];
        }
        for j in 0..self.n + self.m {
            if self.slot_of[j] != NONE {
                self.d[j] = 0.0;
                continue;
            }
            let c = if self.phase1 { 0.0 } else { self.cost[j] };
            let dot = match self.column(j) {
                ColRef::Structural(col) => col.iter().map(|&(r, v)| v * y[r]).sum::<f64>(),
                ColRef::Slack(r) => y[r],
            };
            self.d[j] = c - dot;
        }
        self.needs_refresh = false;
    }

    fn refactorize(&mut self) -> Result<(), LpError> {
        let t0 = std::time::Instant::now();
        self.factor = factorize_basis(self.p, self.m, &self.basis)?;
        if std::env::var_os("FREEWAY_LP_TRACE").is_some() {
            eprintln!(
                "lp refactor at iter {}: nnz {} in {:.3} s",
                self.iterations,
                self.factor.nnz(),
                t0.elapsed().as_secs_f64()
            );
        }
        self.etas.clear();
        self.recompute_x_b();
        self.recompute_reduced_costs();
        Ok(())
    }

    /// Entering variable by Devex pricing (largest `d_j^2 / weight`);
    /// `bland` switches to lowest-index to break degeneracy cycles.
    fn choose_entering(&self, bland: bool) -> Option<(usize, f64)> {
        // Phase 2 scales the tolerance by the objective's magnitude so
        // that problems with uniformly small costs still converge to
        // relative optimality; phase-1 costs are unit-sized already.
        let tol = if self.phase1 {
            self.opts.dual_tol
        } else {
            let c_inf = self
                .cost
                .iter()
                .fold(0.0f64, |a, &c| a.max(c.abs()))
                .max(1e-30);
            self.opts.dual_tol * c_inf.min(1.0)
        };
        let mut best: Option<(usize, f64, f64)> = None;
        for j in 0..self.n + self.m {
            if self.slot_of[j] != NONE || self.lower[j] == self.upper[j] {
                continue;
            }
            let d = self.d[j];
            let free = !self.lower[j].is_finite() && !self.upper[j].is_finite();
            // Direction: +1 increases x_j (profitable if d < 0), -1
            // decreases it (profitable if d > 0 and we sit above a valid
            // lower range).
            let dir = if free {
                if d < -tol {
                    1.0
                } else if d > tol {
                    -1.0
                } else {
                    continue;
                }
            } else if !self.at_upper[j] {
                if d < -tol {
                    1.0
                } else {
                    continue;
                }
            } else if d > tol {
                -1.0
            } else {
                continue;
            };
            if bland {
                return Some((j, dir));
            }
            let score = d.abs();
            if best.map_or(true, |(_, _, bs)| score > bs) {
                best = Some((j, dir, score));
            }
        }
        best.map(|(j, dir, _)| (j, dir))
    }

    /// Harris-style two-pass ratio test. Returns the blocking slot (or
    /// `None` for a bound flip / unbounded ray) and the step length.
    fn ratio_test(&self, w: &WorkVec, dir: f64, entering_range: f64) -> (Option<usize>, f64) {
        let tol = self.opts.feas_tol;
        let piv_tol = 1e-9;
        // Blocking bound for basic slot `i` moving by `delta` per unit
        // step. In phase 1, a basic beyond a bound blocks when it returns
        // to the violated bound (first-block rule, so basis costs change
        // only at the leaving slot); moving further away is penalized by
        // the objective, not the ratio test.
        let block_target = |i: usize, delta: f64| -> Option<f64> {
            let j = self.basis[i];
            let x = self.x_b[i];
            let (lo, hi) = (self.lower[j], self.upper[j]);
            let target = if delta > 0.0 {
                if x < lo - tol {
                    lo
                } else if x > hi + tol {
                    return None; // already above: moving up never blocks
                } else {
                    hi
                }
            } else if x > hi + tol {
                hi
            } else if x < lo - tol {
                return None;
            } else {
                lo
            };
            target.is_finite().then_some(target)
        };
        // Pass 1: maximal step with bounds relaxed by the feasibility
        // tolerance.
        let mut theta_max = entering_range;
        for &i in &w.touched {
            if i >= self.m {
                continue;
            }
            let wv = w.vals[i];
            if wv.abs() <= piv_tol {
                continue;
            }
            let delta = -dir * wv; // change of x_b[i] per unit step
            let Some(target) = block_target(i, delta) else {
                continue;
            };
            let room = if delta < 0.0 {
                self.x_b[i] - target
            } else {
                target - self.x_b[i]
            };
            let t = (room + tol) / delta.abs();
            if t < theta_max {
                theta_max = t;
            }
        }
        if !theta_max.is_finite() {
            return (None, f64::INFINITY);
        }
        // Pass 2: among blockers within theta_max, take the largest pivot.
        let mut best: Option<(usize, f64, f64)> = None; // slot, |pivot|, theta
        for &i in &w.touched {
            if i >= self.m {
                continue;
            }
            let wv = w.vals[i];
            if wv.abs() <= piv_tol {
                continue;
            }
            let delta = -dir * wv;
            let Some(target) = block_target(i, delta) else {
                continue;
            };
            let room = if delta < 0.0 {
                self.x_b[i] - target
            } else {
                target - self.x_b[i]
            };
            let t = room / delta.abs();
            if t <= theta_max {
                let better = match best {
                    None => true,
                    Some((_, bp, _)) => wv.abs() > bp,
                };
                if better {
                    best = Some((i, wv.abs(), t.max(0.0)));
                }
            }
        }
        match best {
            Some((i, _, t)) => (Some(i), t),
            None => (None, entering_range),
        }
    }

    fn run(&mut self) -> Result<Solution, LpError> {
        // Phase 1 if the starting point is infeasible.
        if self.infeasibility() > self.opts.feas_tol * (self.m as f64).max(1.0) {
            self.phase1 = true;
            self.recompute_reduced_costs();
            let status = self.iterate()?;
            if status != Status::Optimal {
                return Ok(self.finish(status));
            }
            if self.infeasibility() > self.opts.feas_tol * (self.m as f64).max(1.0) * 10.0 {
                return Ok(self.finish(Status::Infeasible));
            }
            self.phase1 = false;
        }
        self.recompute_reduced_costs();
        let status = self.iterate()?;
        Ok(self.finish(status))
    }

    /// Inner simplex loop for the current phase. `Status::Optimal` means
    /// no improving direction is left.
    fn iterate(&mut self) -> Result<Status, LpError> {
        let mut w = WorkVec::new(self.m);
        let mut alpha_work = WorkVec::new(self.m);
        let mut alpha: Vec<(usize, f64)> = Vec::new();
        let mut since_refactor = 0usize;
        let mut touched_cols: Vec<usize> = Vec::new();
        let mut col_seen = vec![false; self.n + self.m];
        let mut col_acc = vec![0.0f64; self.n + self.m];
        let mut tm = [std::time::Duration::ZERO; 8];
        loop {
            if self.iterations >= self.opts.max_iterations {
                return Ok(Status::IterLimit);
            }
            if since_refactor >= self.opts.refactor_every {
                self.refactorize()?;
                since_refactor = 0;
                if std::env::var_os("FREEWAY_LP_TRACE").is_some() {
                    eprintln!("  tm entering {:?} ftran {:?} ratio {:?} btran {:?} dj {:?} eta {:?} recomp {:?} infeas {:?}", tm[0], tm[1], tm[2], tm[3], tm[4], tm[5], tm[6], tm[7]);
                    tm = [std::time::Duration::ZERO; 8];
                }
            }
            if self.needs_refresh {
                let t_6 = std::time::Instant::now();
                self.recompute_reduced_costs();
                tm[6] += t_6.elapsed();
            }
            if self.phase1 {
                let t_7 = std::time::Instant::now();
                let inf = self.infeasibility();
                tm[7] += t_7.elapsed();
                if inf <= self.opts.feas_tol {
                    return Ok(Status::Optimal);
                }
            }
            let bland = self.degenerate_streak > 1000;
            let t_0 = std::time::Instant::now();
            let choice = self.choose_entering(bland);
            tm[0] += t_0.elapsed();
            let Some((q, dir)) = choice else {
                // Only trust apparent optimality on exact reduced costs:
                // the incremental updates drift, so refresh and re-check.
                if self.etas.is_empty() && !self.needs_refresh {
                    return Ok(Status::Optimal);
                }
                self.refactorize()?;
                since_refactor = 0;
                continue;
            };
            self.iterations += 1;
            if self.iterations % 5000 == 0 && std::env::var_os("FREEWAY_LP_TRACE").is_some() {
                eprintln!(
                    "lp iter {} phase1={} infeas {:.3e} etas {}",
                    self.iterations,
                    self.phase1,
                    self.infeasibility(),
                    self.etas.len()
                );
            }
            let t_1 = std::time::Instant::now();
            self.ftran(q, &mut w);
            tm[1] += t_1.elapsed();

            let entering_range = self.upper[q] - self.lower[q]; // inf for rays
            let t_2 = std::time::Instant::now();
            let (blocking, theta) = self.ratio_test(&w, dir, entering_range);
            tm[2] += t_2.elapsed();
            match blocking {
                None => {
                    if !theta.is_finite() {
                        // An apparent ray can be an artifact of drifted
                        // incremental reduced costs picking a wrong entering
                        // direction; re-verify on a fresh factorization.
                        if !self.etas.is_empty() || self.needs_refresh {
                            self.refactorize()?;
                            since_refactor = 0;
                            self.recompute_reduced_costs();
                            continue;
                        }
                        return if self.phase1 {
                            // Bounded-below phase-1 objective cannot have a
                            // descent ray; treat as numerical failure.
                            Ok(Status::Infeasible)
                        } else {
                            Ok(Status::Unbounded)
                        };
                    }
                    // Bound flip: entering moves across its range.
                    for &i in &w.touched {
                        if i < self.m {
                            self.x_b[i] -= dir * theta * w.vals[i];
                        }
                    }
                    self.at_upper[q] = !self.at_upper[q];
                    if self.phase1 {
                        self.needs_refresh = true;
                    }
                    self.degenerate_streak = 0;
                    since_refactor += 1; // count as work towards refresh
                    continue;
                }
                Some(r) => {
                    let w_r = w.vals[r];
                    let leaving = self.basis[r];
                    let entering_val = self.nb_value(q) + dir * theta;

                    if theta <= 1e-10 {
                        self.degenerate_streak += 1;
                    } else {
                        self.degenerate_streak = 0;
                    }

                    // Update basic values.
                    let mut crossings = false;
                    for &i in &w.touched {
                        if i >= self.m || i == r {
                            continue;
                        }
                        let j = self.basis[i];
                        let was_infeasible = self.x_b[i] < self.lower[j] - self.opts.feas_tol
                            || self.x_b[i] > self.upper[j] + self.opts.feas_tol;
                        self.x_b[i] -= dir * theta * w.vals[i];
                        if self.phase1 {
                            let is_infeasible = self.x_b[i] < self.lower[j] - self.opts.feas_tol
                                || self.x_b[i] > self.upper[j] + self.opts.feas_tol;
                            if was_infeasible != is_infeasible {
                                crossings = true;
                            }
                        }
                    }

                    // Leaving variable exits at the bound it hit.
                    let leave_val = self.x_b[r] - dir * theta * w_r;
                    let lo = self.lower[leaving];
                    let hi = self.upper[leaving];
                    self.at_upper[leaving] = if lo.is_finite() && hi.is_finite() {
                        (leave_val - hi).abs() < (leave_val - lo).abs()
                    } else {
                        hi.is_finite()
                    };

                    // Reduced-cost update: d_j -= (d_q / w_r) * (alpha . a_j)
                    // with alpha = row r of B^-1.
                    let d_q = self.d[q];
                    let ratio = d_q / w_r;
                    if ratio != 0.0 {
                        let t_3 = std::time::Instant::now();
                        self.btran_unit(r, &mut alpha_work, &mut alpha);
                        tm[3] += t_3.elapsed();
                        let t_4 = std::time::Instant::now();
                        touched_cols.clear();
                        for &(row, av) in &alpha {
                            for &(j, coef) in &self.rows[row] {
                                if !col_seen[j] {
                                    col_seen[j] = true;
                                    touched_cols.push(j);
                                }
                                col_acc[j] += av * coef;
                            }
                            // Slack of `row`.
                            let sj = self.n + row;
                            if !col_seen[sj] {
                                col_seen[sj] = true;
                                touched_cols.push(sj);
                            }
                            col_acc[sj] += av;
                        }
                        for &j in &touched_cols {
                            if self.slot_of[j] == NONE {
                                self.d[j] -= ratio * col_acc[j];
                            }
                            col_acc[j] = 0.0;
                            col_seen[j] = false;
                        }
                        tm[4] += t_4.elapsed();
                    }
                    self.d[leaving] = -ratio;
                    self.d[q] = 0.0;

                    // Pivot bookkeeping.
                    self.basis[r] = q;
                    self.slot_of[q] = r;
                    self.slot_of[leaving] = NONE;
                    self.x_b[r] = entering_val;
                    let t_5 = std::time::Instant::now();
                    let w_sparse: Vec<(usize, f64)> = w
                        .touched
                        .iter()
                        .filter(|&&i| i < self.m && w.vals[i] != 0.0)
                        .map(|&i| (i, w.vals[i]))
                        .collect();
                    self.etas.push(Eta { slot: r, w: w_sparse, w_r });
                    tm[5] += t_5.elapsed();
                    since_refactor += 1;
                    if self.phase1 && crossings {
                        self.needs_refresh = true;
                    }
                }
            }
        }
    }

    fn finish(&self, status: Status) -> Solution {
        let mut x = vec![0.0; self.n];
        for (j, xv) in x.iter_mut().enumerate() {
            *xv = if self.slot_of[j] != NONE {
                self.x_b[self.slot_of[j]]
            } else {
                self.nb_value(j)
            };
        }
        let objective = x.iter().zip(&self.p.obj).map(|(a, b)| a * b).sum();
        Solution {
            status,
            objective,
            x,
            iterations: self.iterations,
            basis: self.basis.clone(),
            at_upper: self.at_upper.clone(),
        }
    }
}

enum ColRef<'a> {
    Structural(&'a [(usize, f64)]),
    Slack(usize),
}

fn factorize_basis(p: &Problem, m: usize, basis: &[usize]) -> Result<LuFactors, LpError> {
    let n = p.num_vars();
    let cols: Vec<Vec<(usize, f64)>> = basis
        .iter()
        .map(|&j| {
            if j < n {
                p.cols[j].clone()
            } else {
                vec![(j - n, 1.0)]
            }
        })
        .collect();
    LuFactors::factorize(m, &cols).map_err(|e| match e {
        lu::LuError::Singular { slot } => LpError::SingularBasis(slot),
    })
}
