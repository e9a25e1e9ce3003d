//! Bounded-variable revised simplex.
//!
//! Small, dense and deterministic: designed for the relaxations this crate
//! generates (a few hundred rows and columns), not for general large-scale
//! use. Two-phase start with artificial variables, Dantzig pricing with an
//! automatic switch to Bland's rule after a run of degenerate pivots (which
//! restores the termination guarantee), dense basis inverse with periodic
//! refactorization, and dual values for every row.
//!
//! Bounds are first-class: every variable lives in `[lower, upper]` where
//! either side may be infinite; free variables are split internally. A
//! nonbasic variable sits at one of its finite bounds and the ratio test
//! supports bound flips.

use thiserror::Error;

/// Row comparison sense.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RowSense {
    Le,
    Eq,
    Ge,
}

/// One linear constraint: `Σ coeffs · x  sense  rhs`.
#[derive(Debug, Clone)]
pub struct SparseRow {
    /// `(column, coefficient)` pairs; columns may repeat (they are summed).
    pub coeffs: Vec<(usize, f64)>,
    pub sense: RowSense,
    pub rhs: f64,
}

/// A linear program: minimize `objective · x` subject to rows and bounds.
#[derive(Debug, Clone)]
pub struct LpProblem {
    pub num_vars: usize,
    pub objective: Vec<f64>,
    pub rows: Vec<SparseRow>,
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
}

impl LpProblem {
    /// An empty problem with `num_vars` variables bounded `[0, +inf)` and a
    /// zero objective.
    pub fn new(num_vars: usize) -> Self {
        LpProblem {
            num_vars,
            objective: vec![0.0; num_vars],
            rows: Vec::new(),
            lower: vec![0.0; num_vars],
            upper: vec![f64::INFINITY; num_vars],
        }
    }
}

/// Solver tolerances and limits.
#[derive(Debug, Clone)]
pub struct LpConfig {
    /// Primal feasibility tolerance, scaled by `1 + |rhs|` per row.
    pub feas_tol: f64,
    /// Smallest pivot magnitude accepted by the ratio test.
    pub pivot_tol: f64,
    /// Total pivot budget across both phases.
    pub max_iters: usize,
    /// Rebuild the basis inverse after this many pivots.
    pub refactor_every: usize,
    /// Switch from Dantzig to Bland pricing after this many consecutive
    /// degenerate pivots.
    pub degeneracy_switch: usize,
}

impl Default for LpConfig {
    fn default() -> Self {
        LpConfig {
            feas_tol: 1e-7,
            pivot_tol: 1e-9,
            max_iters: 50_000,
            refactor_every: 128,
            degeneracy_switch: 50,
        }
    }
}

/// Outcome category of a solve.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LpStatus {
    Optimal,
    Infeasible,
    Unbounded,
    /// Pivot budget exhausted before reaching an optimum.
    IterationLimit,
}

/// Result of [`solve_lp`]. `x`, `objective`, `duals` and `dual_objective`
/// are meaningful only when `status` is [`LpStatus::Optimal`].
#[derive(Debug, Clone)]
pub struct LpSolution {
    pub status: LpStatus,
    pub x: Vec<f64>,
    pub objective: f64,
    /// One multiplier per input row, in input order and orientation.
    pub duals: Vec<f64>,
    /// Dual bound implied by `duals` and the reduced costs; equals
    /// `objective` (to tolerance) at an optimum.
    pub dual_objective: f64,
    pub iterations: usize,
}

/// A structurally unusable problem (not mere infeasibility).
#[derive(Debug, Error, PartialEq, Eq)]
pub enum LpError {
    #[error("{0}")]
    Malformed(String),
}

/// How an original variable maps into internal columns.
#[derive(Debug, Clone, Copy)]
enum VarMap {
    /// `x = lower + col`, `col ∈ [0, upper-lower]`.
    Shift { col: usize, offset: f64 },
    /// `x = upper - col`, `col ∈ [0, +inf)` (finite upper, infinite lower).
    Mirror { col: usize, offset: f64 },
    /// `x = pos - neg`, both `[0, +inf)` (free variable).
    Split { pos: usize, neg: usize },
}

/// Where a nonbasic internal column currently rests.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum NonbasicAt {
    Lower,
    Upper,
    /// The column is basic.
    Basic,
}

struct Tableau {
    /// Sparse internal columns (structural, slack, artificial).
    cols: Vec<Vec<(usize, f64)>>,
    /// Internal upper bounds (lower bounds are all zero).
    ub: Vec<f64>,
    /// Right-hand side of the internal equality system (non-negative).
    b: Vec<f64>,
    /// Phase-2 objective per internal column.
    cost: Vec<f64>,
    /// First artificial column index; artificials are the trailing columns.
    first_artificial: usize,
    m: usize,
}

fn dot_col(col: &[(usize, f64)], y: &[f64]) -> f64 {
    col.iter().map(|&(r, a)| a * y[r]).sum()
}

struct Simplex<'a> {
    t: &'a Tableau,
    cfg: &'a LpConfig,
    /// Dense row-major basis inverse, m×m.
    binv: Vec<f64>,
    /// Basis member per row.
    basis: Vec<usize>,
    /// Position of each column: Basic / Lower / Upper.
    state: Vec<NonbasicAt>,
    /// Row index of each basic column (inverse of `basis`).
    basic_row: Vec<usize>,
    /// Current basic variable values (aligned with `basis`).
    xb: Vec<f64>,
    iterations: usize,
    pivots_since_refactor: usize,
    degenerate_run: usize,
    bland: bool,
    /// Hard upper bounds override (used to freeze artificials in phase 2).
    ub_override: Vec<f64>,
}

enum StepOutcome {
    Optimal,
    Unbounded,
    Moved,
}

impl<'a> Simplex<'a> {
    fn new(t: &'a Tableau, cfg: &'a LpConfig) -> Self {
        let m = t.m;
        let n = t.cols.len();
        // Initial basis: the trailing per-row basic columns chosen by the
        // tableau builder (slack or artificial), recorded via `b`.
        let mut binv = vec![0.0; m * m];
        for i in 0..m {
            binv[i * m + i] = 1.0;
        }
        let mut state = vec![NonbasicAt::Lower; n];
        let mut basis = Vec::with_capacity(m);
        let mut basic_row = vec![usize::MAX; n];
        // The builder guarantees one designated initial basic column per row
        // whose sparse pattern is a single +1 in that row; they are the last
        // m columns, in row order.
        for i in 0..m {
            let col = n - m + i;
            debug_assert_eq!(t.cols[col].len(), 1);
            debug_assert_eq!(t.cols[col][0].0, i);
            basis.push(col);
            basic_row[col] = i;
            state[col] = NonbasicAt::Basic;
        }
        let xb = t.b.clone();
        Simplex {
            t,
            cfg,
            binv,
            basis,
            state,
            basic_row,
            xb,
            iterations: 0,
            pivots_since_refactor: 0,
            degenerate_run: 0,
            bland: false,
            ub_override: t.ub.clone(),
        }
    }

    fn ub(&self, col: usize) -> f64 {
        self.ub_override[col]
    }

    /// Recompute `binv` from scratch by Gauss-Jordan with partial pivoting,
    /// then refresh `xb`. Returns false if the basis matrix is numerically
    /// singular.
    fn refactor(&mut self) -> bool {
        let m = self.t.m;
        if m == 0 {
            return true;
        }
        // Dense basis matrix, column per basis member.
        let mut mat = vec![0.0; m * m];
        for (k, &col) in self.basis.iter().enumerate() {
            for &(r, a) in &self.t.cols[col] {
                mat[r * m + k] = a;
            }
        }
        let mut inv = vec![0.0; m * m];
        for i in 0..m {
            inv[i * m + i] = 1.0;
        }
        for k in 0..m {
            // Partial pivot on column k.
            let mut best = k;
            let mut best_val = mat[k * m + k].abs();
            for r in k + 1..m {
                let v = mat[r * m + k].abs();
                if v > best_val {
                    best = r;
                    best_val = v;
                }
            }
            if best_val < 1e-12 {
                return false;
            }
            if best != k {
                for c in 0..m {
                    mat.swap(k * m + c, best * m + c);
                    inv.swap(k * m + c, best * m + c);
                }
            }
            let piv = mat[k * m + k];
            for c in 0..m {
                mat[k * m + c] /= piv;
                inv[k * m + c] /= piv;
            }
            for r in 0..m {
                if r != k {
                    let f = mat[r * m + k];
                    if f != 0.0 {
                        for c in 0..m {
                            mat[r * m + c] -= f * mat[k * m + c];
                            inv[r * m + c] -= f * inv[k * m + c];
                        }
                    }
                }
            }
        }
        self.binv = inv;
        self.recompute_xb();
        self.pivots_since_refactor = 0;
        true
    }

    /// `xb = binv · (b - N·x_N)` from scratch.
    fn recompute_xb(&mut self) {
        let m = self.t.m;
        let mut rhs = self.t.b.clone();
        for col in 0..self.t.cols.len() {
            if self.state[col] == NonbasicAt::Upper {
                let v = self.ub(col);
                if v != 0.0 {
                    for &(r, a) in &self.t.cols[col] {
                        rhs[r] -= a * v;
                    }
                }
            }
        }
        for i in 0..m {
            let mut acc = 0.0;
            for r in 0..m {
                acc += self.binv[i * m + r] * rhs[r];
            }
            self.xb[i] = acc;
        }
    }

    /// `y = c_B · binv` for the given per-column cost vector.
    fn duals_for(&self, cost: &[f64]) -> Vec<f64> {
        let m = self.t.m;
        let mut y = vec![0.0; m];
        for i in 0..m {
            let cb = cost[self.basis[i]];
            if cb != 0.0 {
                for r in 0..m {
                    y[r] += cb * self.binv[i * m + r];
                }
            }
        }
        y
    }

    /// α = binv · A_col.
    fn ftran(&self, col: usize) -> Vec<f64> {
        let m = self.t.m;
        let mut alpha = vec![0.0; m];
        for &(r, a) in &self.t.cols[col] {
            for i in 0..m {
                alpha[i] += self.binv[i * m + r] * a;
            }
        }
        alpha
    }

    /// One simplex iteration for the objective `cost`.
    fn step(&mut self, cost: &[f64]) -> StepOutcome {
        let y = self.duals_for(cost);
        let n = self.t.cols.len();
        let tol = self.cfg.pivot_tol.max(1e-12);

        // Pricing: find an entering column.
        let mut entering: Option<(usize, f64, bool)> = None; // (col, |d|, increase?)
        for col in 0..n {
            let at = self.state[col];
            if at == NonbasicAt::Basic {
                continue;
            }
            let ub = self.ub(col);
            if ub <= 0.0 {
                continue; // fixed at zero, cannot move
            }
            let d = cost[col] - dot_col(&self.t.cols[col], &y);
            let (eligible, increase) = match at {
                NonbasicAt::Lower => (d < -tol, true),
                NonbasicAt::Upper => (d > tol, false),
                NonbasicAt::Basic => unreachable!(),
            };
            if !eligible {
                continue;
            }
            if self.bland {
                entering = Some((col, d.abs(), increase));
                break;
            }
            match entering {
                Some((_, best, _)) if d.abs() <= best => {}
                _ => entering = Some((col, d.abs(), increase)),
            }
        }
        let Some((j, _, increase)) = entering else {
            return StepOutcome::Optimal;
        };

        // Ratio test. Moving x_j by θ along ±1 changes xb by ∓α·θ.
        let alpha = self.ftran(j);
        let m = self.t.m;
        let own_range = self.ub(j); // entering may traverse its whole range
        let mut theta = own_range;
        let mut leaving: Option<(usize, bool)> = None; // (row, leaves_at_upper)
        let mut leaving_mag = 0.0;
        for i in 0..m {
            let a = if increase { alpha[i] } else { -alpha[i] };
            if a > self.cfg.pivot_tol {
                // basic i decreases towards 0
                let t = (self.xb[i] / a).max(0.0);
                if t < theta - 1e-12
                    || (t < theta + 1e-12 && self.better_leaving(i, a.abs(), leaving, leaving_mag))
                {
                    theta = t;
                    leaving = Some((i, false));
                    leaving_mag = a.abs();
                }
            } else if a < -self.cfg.pivot_tol {
                // basic i increases towards its upper bound
                let ub_i = self.ub(self.basis[i]);
                if ub_i.is_finite() {
                    let t = ((ub_i - self.xb[i]) / -a).max(0.0);
                    if t < theta - 1e-12
                        || (t < theta + 1e-12
                            && self.better_leaving(i, a.abs(), leaving, leaving_mag))
                    {
                        theta = t;
                        leaving = Some((i, true));
                        leaving_mag = a.abs();
                    }
                }
            }
        }

        if theta.is_infinite() {
            return StepOutcome::Unbounded;
        }
        self.iterations += 1;
        if theta <= 1e-12 {
            self.degenerate_run += 1;
            if self.degenerate_run >= self.cfg.degeneracy_switch {
                self.bland = true;
            }
        } else {
            self.degenerate_run = 0;
            self.bland = false;
        }

        // Apply the move to the basic values.
        for i in 0..m {
            let delta = alpha[i] * theta;
            if increase {
                self.xb[i] -= delta;
            } else {
                self.xb[i] += delta;
            }
        }

        match leaving {
            None => {
                // Bound flip: j travels to its other bound, basis unchanged.
                self.state[j] = if increase { NonbasicAt::Upper } else { NonbasicAt::Lower };
            }
            Some((row, at_upper)) => {
                let out = self.basis[row];
                self.state[out] = if at_upper { NonbasicAt::Upper } else { NonbasicAt::Lower };
                self.basic_row[out] = usize::MAX;
                // Entering value: distance travelled from its current bound.
                let enter_val = if increase {
                    theta
                } else {
                    self.ub(j) - theta
                };
                self.basis[row] = j;
                self.basic_row[j] = row;
                self.state[j] = NonbasicAt::Basic;
                // Eta update of binv: pivot on alpha[row].
                let piv = alpha[row];
                debug_assert!(piv.abs() > 1e-13);
                for c in 0..m {
                    self.binv[row * m + c] /= piv;
                }
                for i in 0..m {
                    if i != row {
                        let f = alpha[i];
                        if f != 0.0 {
                            for c in 0..m {
                                self.binv[i * m + c] -= f * self.binv[row * m + c];
                            }
                        }
                    }
                }
                self.xb[row] = enter_val;
                self.pivots_since_refactor += 1;
                if self.pivots_since_refactor >= self.cfg.refactor_every {
                    self.refactor();
                }
            }
        }
        StepOutcome::Moved
    }

    /// Deterministic tie-breaking for the leaving row: prefer the larger
    /// pivot magnitude for stability, then the lower basis variable index.
    /// Under Bland's rule, strictly the lowest basis variable index.
    fn better_leaving(
        &self,
        row: usize,
        mag: f64,
        current: Option<(usize, bool)>,
        current_mag: f64,
    ) -> bool {
        let Some((cur_row, _)) = current else { return true };
        if self.bland {
            return self.basis[row] < self.basis[cur_row];
        }
        if mag > current_mag * (1.0 + 1e-9) {
            return true;
        }
        if current_mag > mag * (1.0 + 1e-9) {
            return false;
        }
        self.basis[row] < self.basis[cur_row]
    }

    /// Run the simplex loop for `cost` until optimal/unbounded or the pivot
    /// budget is exhausted.
    fn optimize(&mut self, cost: &[f64]) -> LpStatus {
        loop {
            if self.iterations >= self.cfg.max_iters {
                return LpStatus::IterationLimit;
            }
            match self.step(cost) {
                StepOutcome::Optimal => return LpStatus::Optimal,
                StepOutcome::Unbounded => return LpStatus::Unbounded,
                StepOutcome::Moved => {}
            }
        }
    }
}

/// Solve a linear program.
///
/// Deterministic: identical problems produce bit-identical solutions.
pub fn solve_lp(problem: &LpProblem, config: &LpConfig) -> Result<LpSolution, LpError> {
    let n = problem.num_vars;
    if problem.objective.len() != n || problem.lower.len() != n || problem.upper.len() != n {
        return Err(LpError::Malformed(format!(
            "inconsistent sizes: {} vars, {} objective, {} lower, {} upper",
            n,
            problem.objective.len(),
            problem.lower.len(),
            problem.upper.len()
        )));
    }
    for row in &problem.rows {
        for &(c, a) in &row.coeffs {
            if c >= n {
                return Err(LpError::Malformed(format!(
                    "row references column {c} but there are only {n} variables"
                )));
            }
            if !a.is_finite() {
                return Err(LpError::Malformed("non-finite row coefficient".into()));
            }
        }
        if !row.rhs.is_finite() {
            return Err(LpError::Malformed("non-finite right-hand side".into()));
        }
    }
    for j in 0..n {
        if !problem.objective[j].is_finite() {
            return Err(LpError::Malformed("non-finite objective coefficient".into()));
        }
        if problem.lower[j].is_nan() || problem.upper[j].is_nan() {
            return Err(LpError::Malformed("NaN bound".into()));
        }
    }

    let infeasible = |iterations| {
        Ok(LpSolution {
            status: LpStatus::Infeasible,
            x: vec![0.0; n],
            objective: 0.0,
            duals: vec![0.0; problem.rows.len()],
            dual_objective: 0.0,
            iterations,
        })
    };

    // Empty variable boxes decide feasibility immediately.
    for j in 0..n {
        if problem.lower[j] > problem.upper[j] {
            return infeasible(0);
        }
    }

    // --- Internal standardization -----------------------------------------
    // Map every original variable to internal columns with lower bound 0.
    let mut varmap = Vec::with_capacity(n);
    let mut ub = Vec::new();
    let mut cost = Vec::new();
    let mut obj_const = 0.0;
    for j in 0..n {
        let (l, u, c) = (problem.lower[j], problem.upper[j], problem.objective[j]);
        if l.is_finite() {
            varmap.push(VarMap::Shift { col: ub.len(), offset: l });
            ub.push(u - l);
            cost.push(c);
            obj_const += c * l;
        } else if u.is_finite() {
            varmap.push(VarMap::Mirror { col: ub.len(), offset: u });
            ub.push(f64::INFINITY);
            cost.push(-c);
            obj_const += c * u;
        } else {
            varmap.push(VarMap::Split { pos: ub.len(), neg: ub.len() + 1 });
            ub.push(f64::INFINITY);
            ub.push(f64::INFINITY);
            cost.push(c);
            cost.push(-c);
        }
    }
    let n_struct = ub.len();

    // Dense accumulation of each row over internal structural columns.
    let m = problem.rows.len();
    let mut dense = vec![0.0; n_struct];
    let mut int_rows: Vec<(Vec<(usize, f64)>, RowSense, f64)> = Vec::with_capacity(m);
    for row in &problem.rows {
        for v in dense.iter_mut() {
            *v = 0.0;
        }
        let mut rhs = row.rhs;
        for &(c, a) in &row.coeffs {
            match varmap[c] {
                VarMap::Shift { col, offset } => {
                    dense[col] += a;
                    rhs -= a * offset;
                }
                VarMap::Mirror { col, offset } => {
                    dense[col] -= a;
                    rhs -= a * offset;
                }
                VarMap::Split { pos, neg } => {
                    dense[pos] += a;
                    dense[neg] -= a;
                }
            }
        }
        let (mut coeffs, mut sense, mut b) = (Vec::new(), row.sense, rhs);
        // Normalize to non-negative rhs so the initial basis is feasible.
        let flip = b < 0.0;
        if flip {
            b = -b;
            sense = match sense {
                RowSense::Le => RowSense::Ge,
                RowSense::Eq => RowSense::Eq,
                RowSense::Ge => RowSense::Le,
            };
        }
        for (col, &a) in dense.iter().enumerate() {
            if a != 0.0 {
                coeffs.push((col, if flip { -a } else { a }));
            }
        }
        int_rows.push((coeffs, sense, b));
    }
    // Track row negation for dual recovery.
    let row_flipped: Vec<bool> = problem
        .rows
        .iter()
        .zip(&int_rows)
        .map(|(orig, int)| {
            let mut rhs = orig.rhs;
            for &(c, a) in &orig.coeffs {
                match varmap[c] {
                    VarMap::Shift { offset, .. } => rhs -= a * offset,
                    VarMap::Mirror { offset, .. } => rhs -= a * offset,
                    VarMap::Split { .. } => {}
                }
            }
            rhs < 0.0 && int.2 >= 0.0 && rhs != int.2
        })
        .collect();

    // Columns: structural | slack/surplus | initial basics (slack reuse or
    // artificial), exactly one designated initial basic column per row,
    // appended in row order as the trailing m columns.
    let mut cols: Vec<Vec<(usize, f64)>> = (0..n_struct).map(|_| Vec::new()).collect();
    for (i, (coeffs, _, _)) in int_rows.iter().enumerate() {
        for &(c, a) in coeffs {
            cols[c].push((i, a));
        }
    }
    // Surplus columns for Ge rows (they cannot serve as the initial basis).
    for (i, (_, sense, _)) in int_rows.iter().enumerate() {
        if *sense == RowSense::Ge {
            cols.push(vec![(i, -1.0)]);
            ub.push(f64::INFINITY);
            cost.push(0.0);
        }
    }
    // Trailing initial basic columns: slack (+1, free to grow) for Le rows,
    // artificial (+1, to be driven to zero) for Eq/Ge rows.
    let first_artificial = cols.len();
    let mut is_artificial = Vec::new();
    for (i, (_, sense, _)) in int_rows.iter().enumerate() {
        cols.push(vec![(i, 1.0)]);
        ub.push(f64::INFINITY);
        cost.push(0.0);
        is_artificial.push(!matches!(sense, RowSense::Le));
    }

    let tableau = Tableau {
        cols,
        ub,
        b: int_rows.iter().map(|r| r.2).collect(),
        cost,
        first_artificial,
        m,
    };

    let mut sx = Simplex::new(&tableau, config);

    // --- Phase 1: minimize the sum of artificials -------------------------
    let needs_phase1 = is_artificial.iter().any(|&a| a);
    if needs_phase1 {
        let mut phase1_cost = vec![0.0; tableau.cols.len()];
        for (k, &art) in is_artificial.iter().enumerate() {
            if art {
                phase1_cost[tableau.first_artificial + k] = 1.0;
            }
        }
        let status = sx.optimize(&phase1_cost);
        if status == LpStatus::IterationLimit {
            return Ok(LpSolution {
                status: LpStatus::IterationLimit,
                x: vec![0.0; n],
                objective: 0.0,
                duals: vec![0.0; m],
                dual_objective: 0.0,
                iterations: sx.iterations,
            });
        }
        debug_assert_ne!(status, LpStatus::Unbounded, "phase 1 is bounded below by 0");
        let max_b = tableau.b.iter().cloned().fold(0.0, f64::max);
        let infeas: f64 = (0..m)
            .filter(|&i| {
                let c = sx.basis[i];
                c >= tableau.first_artificial && is_artificial[c - tableau.first_artificial]
            })
            .map(|i| sx.xb[i].max(0.0))
            .sum();
        if infeas > config.feas_tol * (1.0 + max_b) {
            return infeasible(sx.iterations);
        }
        // Freeze artificials at zero for phase 2.
        for (k, &art) in is_artificial.iter().enumerate() {
            if art {
                let col = tableau.first_artificial + k;
                sx.ub_override[col] = 0.0;
                if sx.state[col] == NonbasicAt::Upper {
                    sx.state[col] = NonbasicAt::Lower;
                }
            }
        }
        // Try to pivot remaining artificials out of the basis.
        for row in 0..m {
            let c = sx.basis[row];
            if c < tableau.first_artificial || !is_artificial[c - tableau.first_artificial] {
                continue;
            }
            let mut replacement = None;
            for col in 0..tableau.first_artificial {
                if sx.state[col] == NonbasicAt::Basic {
                    continue;
                }
                let alpha = sx.ftran(col);
                if alpha[row].abs() > 1e-7 {
                    replacement = Some((col, alpha));
                    break;
                }
            }
            if let Some((col, alpha)) = replacement {
                // Degenerate basis swap; values are refreshed afterwards.
                let out = sx.basis[row];
                sx.state[out] = NonbasicAt::Lower;
                sx.basic_row[out] = usize::MAX;
                sx.basis[row] = col;
                sx.basic_row[col] = row;
                sx.state[col] = NonbasicAt::Basic;
                let piv = alpha[row];
                let mm = tableau.m;
                for cc in 0..mm {
                    sx.binv[row * mm + cc] /= piv;
                }
                for i in 0..mm {
                    if i != row {
                        let f = alpha[i];
                        if f != 0.0 {
                            for cc in 0..mm {
                                sx.binv[i * mm + cc] -= f * sx.binv[row * mm + cc];
                            }
                        }
                    }
                }
                sx.recompute_xb();
            }
        }
        sx.bland = false;
        sx.degenerate_run = 0;
    }

    // --- Phase 2: original objective ---------------------------------------
    let status = sx.optimize(&tableau.cost);
    match status {
        LpStatus::Optimal => {}
        LpStatus::Unbounded => {
            return Ok(LpSolution {
                status: LpStatus::Unbounded,
                x: vec![0.0; n],
                objective: f64::NEG_INFINITY,
                duals: vec![0.0; m],
                dual_objective: f64::NEG_INFINITY,
                iterations: sx.iterations,
            });
        }
        LpStatus::IterationLimit => {
            return Ok(LpSolution {
                status: LpStatus::IterationLimit,
                x: vec![0.0; n],
                objective: 0.0,
                duals: vec![0.0; m],
                dual_objective: 0.0,
                iterations: sx.iterations,
            });
        }
        LpStatus::Infeasible => unreachable!("phase 2 never reports infeasible"),
    }

    // Fresh basic values for the final answer.
    if !sx.refactor() {
        return Ok(LpSolution {
            status: LpStatus::IterationLimit,
            x: vec![0.0; n],
            objective: 0.0,
            duals: vec![0.0; m],
            dual_objective: 0.0,
            iterations: sx.iterations,
        });
    }

    // Internal values.
    let mut internal = vec![0.0; tableau.cols.len()];
    for col in 0..tableau.cols.len() {
        internal[col] = match sx.state[col] {
            NonbasicAt::Basic => sx.xb[sx.basic_row[col]],
            NonbasicAt::Lower => 0.0,
            NonbasicAt::Upper => sx.ub(col),
        };
    }

    // Map back to the original variables.
    let mut x = vec![0.0; n];
    for j in 0..n {
        x[j] = match varmap[j] {
            VarMap::Shift { col, offset } => offset + internal[col],
            VarMap::Mirror { col, offset } => offset - internal[col],
            VarMap::Split { pos, neg } => internal[pos] - internal[neg],
        };
        // Snap roundoff back into the box.
        x[j] = x[j].clamp(problem.lower[j], problem.upper[j]);
    }
    let objective: f64 = (0..n).map(|j| problem.objective[j] * x[j]).sum();

    // Duals in original row orientation.
    let y = sx.duals_for(&tableau.cost);
    let duals: Vec<f64> = (0..m)
        .map(|i| if row_flipped[i] { -y[i] } else { y[i] })
        .collect();

    // Dual objective: y·b plus reduced-cost terms of nonbasic columns at
    // finite nonzero bounds (internal lowers are all zero).
    let mut dual_objective = obj_const;
    for i in 0..m {
        dual_objective += y[i] * tableau.b[i];
    }
    for col in 0..tableau.cols.len() {
        if sx.state[col] == NonbasicAt::Upper {
            let u = sx.ub(col);
            if u.is_finite() && u != 0.0 {
                let d = tableau.cost[col] - dot_col(&tableau.cols[col], &y);
                dual_objective += d * u;
            }
        }
    }

    Ok(LpSolution {
        status: LpStatus::Optimal,
        x,
        objective,
        duals,
        dual_objective,
        iterations: sx.iterations,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn cfg() -> LpConfig {
        LpConfig::default()
    }

    fn row(coeffs: &[(usize, f64)], sense: RowSense, rhs: f64) -> SparseRow {
        SparseRow { coeffs: coeffs.to_vec(), sense, rhs }
    }

    #[test]
    fn single_variable_lower_binding() {
        // minimize x subject to x >= 3, x in [0, 10]
        let mut p = LpProblem::new(1);
        p.objective = vec![1.0];
        p.rows.push(row(&[(0, 1.0)], RowSense::Ge, 3.0));
        p.upper = vec![10.0];
        let s = solve_lp(&p, &cfg()).unwrap();
        assert_eq!(s.status, LpStatus::Optimal);
        assert_relative_eq!(s.objective, 3.0, max_relative = 1e-9);
        assert_relative_eq!(s.x[0], 3.0, max_relative = 1e-9);
    }

    #[test]
    fn degenerate_face_optimum() {
        // minimize x+y with three constraints meeting at (1,1): the optimum
        // sits on a degenerate vertex and still reads 2.
        let mut p = LpProblem::new(2);
        p.objective = vec![1.0, 1.0];
        p.rows.push(row(&[(0, 1.0), (1, 1.0)], RowSense::Ge, 2.0));
        p.rows.push(row(&[(0, 1.0)], RowSense::Ge, 1.0));
        p.rows.push(row(&[(1, 1.0)], RowSense::Ge, 1.0));
        p.upper = vec![10.0, 10.0];
        let s = solve_lp(&p, &cfg()).unwrap();
        assert_eq!(s.status, LpStatus::Optimal);
        assert_relative_eq!(s.objective, 2.0, max_relative = 1e-9);
    }

    #[test]
    fn two_variable_vertex_optimum() {
        // minimize -x - 2y s.t. x+y <= 4, y <= 3, x,y in [0,5]:
        // optimum -7 at the vertex (1,3).
        let mut p = LpProblem::new(2);
        p.objective = vec![-1.0, -2.0];
        p.rows.push(row(&[(0, 1.0), (1, 1.0)], RowSense::Le, 4.0));
        p.rows.push(row(&[(1, 1.0)], RowSense::Le, 3.0));
        p.upper = vec![5.0, 5.0];
        let s = solve_lp(&p, &cfg()).unwrap();
        assert_eq!(s.status, LpStatus::Optimal);
        assert_relative_eq!(s.objective, -7.0, max_relative = 1e-9);
        assert_relative_eq!(s.x[0], 1.0, epsilon = 1e-8);
        assert_relative_eq!(s.x[1], 3.0, epsilon = 1e-8);
    }

    #[test]
    fn infeasible_contradictory_rows() {
        let mut p = LpProblem::new(1);
        p.rows.push(row(&[(0, 1.0)], RowSense::Ge, 5.0));
        p.rows.push(row(&[(0, 1.0)], RowSense::Le, 2.0));
        let s = solve_lp(&p, &cfg()).unwrap();
        assert_eq!(s.status, LpStatus::Infeasible);
    }

    #[test]
    fn infeasible_empty_box() {
        let mut p = LpProblem::new(1);
        p.lower = vec![2.0];
        p.upper = vec![1.0];
        let s = solve_lp(&p, &cfg()).unwrap();
        assert_eq!(s.status, LpStatus::Infeasible);
    }

    #[test]
    fn unbounded_ray() {
        let mut p = LpProblem::new(1);
        p.objective = vec![-1.0];
        let s = solve_lp(&p, &cfg()).unwrap();
        assert_eq!(s.status, LpStatus::Unbounded);
    }

    #[test]
    fn equality_rows_and_upper_bounds() {
        // minimize 2x + 3y s.t. x + y = 5, x <= 2 → x=2, y=3, obj 13.
        let mut p = LpProblem::new(2);
        p.objective = vec![2.0, 3.0];
        p.rows.push(row(&[(0, 1.0), (1, 1.0)], RowSense::Eq, 5.0));
        p.upper = vec![2.0, f64::INFINITY];
        let s = solve_lp(&p, &cfg()).unwrap();
        assert_eq!(s.status, LpStatus::Optimal);
        assert_relative_eq!(s.objective, 13.0, max_relative = 1e-9);
        assert_relative_eq!(s.x[0], 2.0, epsilon = 1e-8);
        assert_relative_eq!(s.x[1], 3.0, epsilon = 1e-8);
    }

    #[test]
    fn free_variable_split() {
        // minimize x with free x and x >= -4: optimum -4.
        let mut p = LpProblem::new(1);
        p.objective = vec![1.0];
        p.lower = vec![f64::NEG_INFINITY];
        p.upper = vec![f64::INFINITY];
        p.rows.push(row(&[(0, 1.0)], RowSense::Ge, -4.0));
        let s = solve_lp(&p, &cfg()).unwrap();
        assert_eq!(s.status, LpStatus::Optimal);
        assert_relative_eq!(s.objective, -4.0, max_relative = 1e-9);
    }

    #[test]
    fn mirrored_variable() {
        // maximize x (minimize -x) with x <= 7 and lower bound -inf,
        // plus a row keeping x >= 1.
        let mut p = LpProblem::new(1);
        p.objective = vec![-1.0];
        p.lower = vec![f64::NEG_INFINITY];
        p.upper = vec![7.0];
        p.rows.push(row(&[(0, 1.0)], RowSense::Ge, 1.0));
        let s = solve_lp(&p, &cfg()).unwrap();
        assert_eq!(s.status, LpStatus::Optimal);
        assert_relative_eq!(s.x[0], 7.0, max_relative = 1e-9);
    }

    #[test]
    fn duals_match_objective_at_optimum() {
        let mut p = LpProblem::new(3);
        p.objective = vec![1.0, 2.0, -1.0];
        p.rows.push(row(&[(0, 1.0), (1, 1.0), (2, 1.0)], RowSense::Eq, 10.0));
        p.rows.push(row(&[(0, 1.0), (1, -1.0)], RowSense::Le, 4.0));
        p.rows.push(row(&[(1, 1.0), (2, 1.0)], RowSense::Ge, 3.0));
        p.upper = vec![8.0, 8.0, 8.0];
        let s = solve_lp(&p, &cfg()).unwrap();
        assert_eq!(s.status, LpStatus::Optimal);
        assert_relative_eq!(s.objective, s.dual_objective, epsilon = 1e-6);
    }

    #[test]
    fn repeated_solves_are_bit_identical() {
        let mut p = LpProblem::new(3);
        p.objective = vec![0.3, -1.7, 0.9];
        p.rows.push(row(&[(0, 2.0), (1, 1.0)], RowSense::Le, 3.5));
        p.rows.push(row(&[(1, 1.0), (2, 4.0)], RowSense::Ge, 1.0));
        p.rows.push(row(&[(0, 1.0), (2, -1.0)], RowSense::Eq, 0.25));
        p.upper = vec![2.0, 2.0, 2.0];
        let a = solve_lp(&p, &cfg()).unwrap();
        let b = solve_lp(&p, &cfg()).unwrap();
        assert_eq!(a.status, b.status);
        assert_eq!(a.objective.to_bits(), b.objective.to_bits());
        for (xa, xb) in a.x.iter().zip(&b.x) {
            assert_eq!(xa.to_bits(), xb.to_bits());
        }
        assert_eq!(a.iterations, b.iterations);
    }

    #[test]
    fn duplicate_column_entries_are_summed() {
        // x appears twice in the row: (1+1)x >= 4 → x >= 2.
        let mut p = LpProblem::new(1);
        p.objective = vec![1.0];
        p.rows.push(row(&[(0, 1.0), (0, 1.0)], RowSense::Ge, 4.0));
        let s = solve_lp(&p, &cfg()).unwrap();
        assert_eq!(s.status, LpStatus::Optimal);
        assert_relative_eq!(s.x[0], 2.0, max_relative = 1e-9);
    }

    #[test]
    fn malformed_problem_is_rejected() {
        let mut p = LpProblem::new(1);
        p.rows.push(row(&[(3, 1.0)], RowSense::Le, 1.0));
        assert!(matches!(solve_lp(&p, &cfg()), Err(LpError::Malformed(_))));
    }

    #[test]
    fn fixed_variables_stay_fixed() {
        let mut p = LpProblem::new(2);
        p.objective = vec![-1.0, -1.0];
        p.lower = vec![2.5, 0.0];
        p.upper = vec![2.5, 1.0];
        p.rows.push(row(&[(0, 1.0), (1, 1.0)], RowSense::Le, 3.0));
        let s = solve_lp(&p, &cfg()).unwrap();
        assert_eq!(s.status, LpStatus::Optimal);
        assert_relative_eq!(s.x[0], 2.5, max_relative = 1e-12);
        assert_relative_eq!(s.x[1], 0.5, max_relative = 1e-9);
    }
}
