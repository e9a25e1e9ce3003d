//! Global optimization of the bilinear planning program.
//!
//! The program built by the formulation layer is linear except for
//! flow-times-concentration products and the regenerator selection gates.
//! This solver removes the gates by enumerating the regenerator options
//! (each option yields a folded, purely bilinear program) and then runs a
//! spatial branch-and-bound over all folded programs at once:
//!
//! * every distinct product `x·y` gets an auxiliary variable constrained by
//!   its four McCormick envelope rows, giving an LP whose optimum is a valid
//!   lower bound for the node's box;
//! * nodes branch on fractional pipe binaries first, then on the variable
//!   of the most violated product, at the relaxation value clamped away
//!   from the box edges;
//! * a fixed-point heuristic (alternating a linear program in the flows
//!   with closed-form concentration updates) produces incumbents, which are
//!   accepted only after the independent residual checker passes them.
//!
//! The search is deterministic: ties break on variable order and node
//! sequence numbers, and wall-clock time influences nothing unless a time
//! limit is explicitly enabled.

use std::collections::{BTreeMap, BinaryHeap};
use std::fmt;
use std::time::{Duration, Instant};

use thiserror::Error;

use crate::formulation::{
    build_program, period_costs, ConstraintTag, Program, VarRole,
};
use crate::lp::{solve_lp, LpConfig, LpError, LpProblem, LpStatus, RowSense, SparseRow};
use crate::model::{
    ContamValue, ModelError, NetworkInstance, ObjectiveKind, PeriodState, PlantConc, PlantFlag,
    PlantValue, ReuseFlow, SinkValue, Solution, SourceValue,
};
use crate::verify::residuals;

/// Binaries further than this from an integer count as fractional.
const INT_TOL: f64 = 1e-6;
/// A product is consistent when `|w - x·y| / (1 + |x·y|)` is below this.
const PRODUCT_TOL: f64 = 1e-7;
/// Candidate solutions must pass the residual checker at this tolerance.
const RESIDUAL_TOL: f64 = 1e-6;

/// Tuning knobs for [`solve`].
#[derive(Debug, Clone)]
pub struct SolverConfig {
    pub objective: ObjectiveKind,
    /// Stop once `(incumbent - bound) / max(1, |incumbent|)` drops here.
    pub gap_rel: f64,
    /// Wall-clock budget; ignored while `deterministic` is set.
    pub time_limit: Option<Duration>,
    /// Maximum branch-and-bound nodes to process.
    pub max_nodes: Option<usize>,
    /// Ignore the clock so repeated runs explore identical trees.
    pub deterministic: bool,
    /// Keep a per-node log in the report.
    pub record_nodes: bool,
}

impl Default for SolverConfig {
    fn default() -> Self {
        SolverConfig {
            objective: ObjectiveKind::Cost,
            gap_rel: 0.01,
            time_limit: Some(Duration::from_secs(300)),
            max_nodes: None,
            deterministic: false,
            record_nodes: false,
        }
    }
}

/// Why the search stopped.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TerminationReason {
    /// Tree exhausted (or gap closed to numerical zero).
    Optimal,
    /// Relative gap reached the configured target.
    GapReached,
    /// Node budget exhausted before the gap closed.
    NodeLimit,
    /// Wall-clock budget exhausted before the gap closed.
    TimeLimit,
    /// The model admits no feasible operating point.
    Infeasible,
}

impl fmt::Display for TerminationReason {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            TerminationReason::Optimal => "optimal",
            TerminationReason::GapReached => "gap-reached",
            TerminationReason::NodeLimit => "node-limit",
            TerminationReason::TimeLimit => "time-limit",
            TerminationReason::Infeasible => "infeasible",
        };
        f.write_str(s)
    }
}

/// One processed node, kept when `record_nodes` is on.
#[derive(Debug, Clone)]
pub struct NodeRecord {
    pub seq: usize,
    pub regenerator: u32,
    pub depth: usize,
    /// Best-first key the node was popped with (its parent's bound;
    /// `-inf` for roots). Non-decreasing over a run.
    pub entry_bound: f64,
    /// Bound recomputed for the node's own box.
    pub bound: f64,
    pub outcome: String,
}

/// Everything [`solve`] learned.
#[derive(Debug)]
pub struct SolveReport {
    /// Best verified operating plan, if any was found.
    pub solution: Option<Solution>,
    /// Proven lower bound on the objective.
    pub lower_bound: f64,
    pub gap_abs: f64,
    pub gap_rel: f64,
    pub nodes_explored: usize,
    pub lp_solves: usize,
    pub wall_time: Duration,
    pub termination: TerminationReason,
    pub node_log: Vec<NodeRecord>,
}

/// Failures outside normal search outcomes (infeasibility is an outcome,
/// not an error).
#[derive(Debug, Error)]
pub enum SolveError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("relaxation failure: {0}")]
    Lp(#[from] LpError),
}

/// The four envelope rows of `w = x·y` over the box
/// `x ∈ [lx, ux], y ∈ [ly, uy]`, written on columns `(w, x, y)`.
///
/// Every point with `w` exactly `x·y` inside the box satisfies all four;
/// the rows are the tightest linear relaxation of the product on that box.
pub fn mccormick_rows(
    w: usize,
    x: usize,
    y: usize,
    (lx, ux): (f64, f64),
    (ly, uy): (f64, f64),
) -> [SparseRow; 4] {
    let row = |cy: f64, cx: f64, sense: RowSense, rhs: f64| SparseRow {
        coeffs: vec![(w, 1.0), (x, -cy), (y, -cx)],
        sense,
        rhs,
    };
    [
        // w ≥ ly·x + lx·y − lx·ly
        row(ly, lx, RowSense::Ge, -lx * ly),
        // w ≥ uy·x + ux·y − ux·uy
        row(uy, ux, RowSense::Ge, -ux * uy),
        // w ≤ ly·x + ux·y − ux·ly
        row(ly, ux, RowSense::Le, -ux * ly),
        // w ≤ uy·x + lx·y − lx·uy
        row(uy, lx, RowSense::Le, -lx * uy),
    ]
}

/// One regenerator option's gate-free program.
struct Folded {
    regenerator: u32,
    program: Program,
    /// Distinct `(flow, conc)` pairs, in first-appearance order.
    products: Vec<(usize, usize)>,
}

/// One open box of the search tree.
struct Node {
    folded: usize,
    bounds: Vec<(f64, f64)>,
    depth: usize,
    /// Valid lower bound inherited from the parent's relaxation.
    bound: f64,
    seq: usize,
}

/// Heap ordering: smallest bound first, then deepest, then oldest.
struct PoolEntry(Node);

impl PartialEq for PoolEntry {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == std::cmp::Ordering::Equal
    }
}
impl Eq for PoolEntry {}
impl PartialOrd for PoolEntry {
    fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
        Some(self.cmp(other))
    }
}
impl Ord for PoolEntry {
    fn cmp(&self, other: &Self) -> std::cmp::Ordering {
        // BinaryHeap pops the maximum, so "greater" must mean "pop next".
        other
            .0
            .bound
            .total_cmp(&self.0.bound)
            .then(self.0.depth.cmp(&other.0.depth))
            .then(other.0.seq.cmp(&self.0.seq))
    }
}

struct Search<'a> {
    instance: &'a NetworkInstance,
    config: &'a SolverConfig,
    lp_cfg: LpConfig,
    folded: Vec<Folded>,
    pool: BinaryHeap<PoolEntry>,
    incumbent: Option<(Solution, f64)>,
    /// Smallest bound among nodes closed without proof or refutation
    /// (degenerate boxes the heuristic could not certify). Keeps the
    /// reported bound honest in that corner case.
    lost_bound: f64,
    closed_unverified: usize,
    nodes_explored: usize,
    lp_solves: usize,
    next_seq: usize,
    log: Vec<NodeRecord>,
}

/// Plan the park: returns the best verified solution found together with
/// the proven bound, counters and the stop reason.
pub fn solve(instance: &NetworkInstance, config: &SolverConfig) -> Result<SolveReport, SolveError> {
    let start = Instant::now();
    let base = build_program(instance, config.objective)?;

    let mut search = Search {
        instance,
        config,
        lp_cfg: LpConfig::default(),
        folded: Vec::new(),
        pool: BinaryHeap::new(),
        incumbent: None,
        lost_bound: f64::INFINITY,
        closed_unverified: 0,
        nodes_explored: 0,
        lp_solves: 0,
        next_seq: 0,
        log: Vec::new(),
    };
    for reg in &instance.regenerators {
        let mut program = base.fold_regenerator(reg.index);
        tighten_for_regenerator(&mut program, instance, reg);
        let products = program.bilinear_products();
        let mut folded = Folded { regenerator: reg.index, program, products };
        let mut bounds: Vec<(f64, f64)> =
            folded.program.variables.iter().map(|v| (v.lower, v.upper)).collect();
        let feasible = tighten_bounds(&folded.program, &mut bounds)
            && match probe_bounds(&folded, &mut bounds, &search.lp_cfg) {
                Some(lps) => {
                    search.lp_solves += lps;
                    true
                }
                None => false,
            };
        if feasible {
            // Carry the probed boxes into the stored program so the
            // heuristic clamps its guesses to them as well.
            for (v, &(lo, hi)) in folded.program.variables.iter_mut().zip(&bounds) {
                v.lower = lo;
                v.upper = hi;
            }
        }
        search.folded.push(folded);
        if feasible {
            let seq = search.take_seq();
            search.pool.push(PoolEntry(Node {
                folded: search.folded.len() - 1,
                bounds,
                depth: 0,
                bound: f64::NEG_INFINITY,
                seq,
            }));
        }
    }

    let termination = loop {
        if let Some(max) = config.max_nodes {
            if search.nodes_explored >= max {
                break TerminationReason::NodeLimit;
            }
        }
        if !config.deterministic {
            if let Some(limit) = config.time_limit {
                if start.elapsed() >= limit {
                    break TerminationReason::TimeLimit;
                }
            }
        }
        let lb = search.open_bound();
        if let Some((_, inc)) = &search.incumbent {
            let gap = relative_gap(*inc, lb);
            if gap <= config.gap_rel {
                break if search.pool.is_empty() && gap <= 1e-9 {
                    TerminationReason::Optimal
                } else {
                    TerminationReason::GapReached
                };
            }
        }
        let Some(PoolEntry(node)) = search.pool.pop() else {
            break match &search.incumbent {
                Some((_, inc)) => {
                    if search.lost_bound >= inc - 1e-9 * (1.0 + inc.abs()) {
                        TerminationReason::Optimal
                    } else if relative_gap(*inc, search.lost_bound) <= config.gap_rel {
                        TerminationReason::GapReached
                    } else {
                        TerminationReason::NodeLimit
                    }
                }
                None if search.closed_unverified == 0 => TerminationReason::Infeasible,
                None => TerminationReason::NodeLimit,
            };
        };
        search.process(node)?;
    };

    let lower_bound = match (&search.incumbent, termination) {
        (Some((_, inc)), TerminationReason::Optimal) => *inc,
        // Pruned regions only guarantee values at or above the incumbent, so
        // the incumbent caps what the open nodes can prove.
        (Some((_, inc)), _) => search.open_bound().min(*inc),
        _ => search.open_bound(),
    };
    let (solution, gap_abs, gap_rel) = match search.incumbent {
        Some((sol, inc)) => {
            let abs = (inc - lower_bound).max(0.0);
            (Some(sol), abs, abs / inc.abs().max(1.0))
        }
        None => (None, f64::INFINITY, f64::INFINITY),
    };
    Ok(SolveReport {
        solution,
        lower_bound,
        gap_abs,
        gap_rel,
        nodes_explored: search.nodes_explored,
        lp_solves: search.lp_solves,
        wall_time: start.elapsed(),
        termination,
        node_log: search.log,
    })
}

fn relative_gap(incumbent: f64, bound: f64) -> f64 {
    (incumbent - bound).max(0.0) / incumbent.abs().max(1.0)
}

impl<'a> Search<'a> {
    fn take_seq(&mut self) -> usize {
        self.next_seq += 1;
        self.next_seq - 1
    }

    /// Smallest bound any unexplored region might still hold.
    fn open_bound(&self) -> f64 {
        let pool = self.pool.peek().map_or(f64::INFINITY, |e| e.0.bound);
        pool.min(self.lost_bound)
    }

    fn record(&mut self, node: &Node, bound: f64, outcome: &str) {
        if self.config.record_nodes {
            self.log.push(NodeRecord {
                seq: node.seq,
                regenerator: self.folded[node.folded].regenerator,
                depth: node.depth,
                entry_bound: node.bound,
                bound,
                outcome: outcome.to_string(),
            });
        }
    }

    fn incumbent_cutoff(&self) -> f64 {
        self.incumbent
            .as_ref()
            .map_or(f64::INFINITY, |(_, v)| v - 1e-9 * (1.0 + v.abs()))
    }

    fn try_incumbent(&mut self, candidate: Solution, value: f64) {
        let better = match &self.incumbent {
            None => true,
            Some((_, best)) => value < best - 1e-9 * (1.0 + value.abs()),
        };
        if better {
            self.incumbent = Some((candidate, value));
        }
    }

    fn process(&mut self, node: Node) -> Result<(), SolveError> {
        self.nodes_explored += 1;
        if node.bound >= self.incumbent_cutoff() {
            self.record(&node, node.bound, "pruned-bound");
            return Ok(());
        }
        let mut bounds = node.bounds.clone();
        if !tighten_bounds(&self.folded[node.folded].program, &mut bounds) {
            self.record(&node, node.bound, "pruned-tightening");
            return Ok(());
        }
        let lp = relaxation_lp(&self.folded[node.folded], &bounds);
        let sol = solve_lp(&lp, &self.lp_cfg)?;
        self.lp_solves += 1;
        let bound = match sol.status {
            LpStatus::Infeasible => {
                self.record(&node, node.bound, "pruned-infeasible");
                return Ok(());
            }
            LpStatus::Optimal => node.bound.max(sol.objective),
            // An unfinished LP proves nothing new; keep the inherited bound.
            LpStatus::IterationLimit => node.bound,
            LpStatus::Unbounded => {
                return Err(SolveError::Lp(LpError::Malformed(
                    "relaxation unbounded despite finite boxes".into(),
                )))
            }
        };
        if bound >= self.incumbent_cutoff() {
            self.record(&node, bound, "pruned-bound");
            return Ok(());
        }

        let folded = &self.folded[node.folded];
        let program = &folded.program;
        let n = program.num_vars();
        let x = &sol.x;

        // Most fractional unpinned binary.
        let mut frac_bin: Option<(usize, f64)> = None;
        for v in &program.variables {
            if !v.integral {
                continue;
            }
            let (lo, hi) = bounds[v.id];
            if hi - lo < 0.5 {
                continue;
            }
            let frac = (x[v.id] - x[v.id].round()).abs();
            if frac > INT_TOL && frac_bin.map_or(true, |(_, f)| frac > f + 1e-12) {
                frac_bin = Some((v.id, frac));
            }
        }
        // Accumulate product violations per participating variable; branching
        // a variable shared by many violated envelopes (the hub outlet
        // concentration feeds one per sink) tightens them all at once.
        let mut scores: BTreeMap<usize, f64> = BTreeMap::new();
        let mut worst_viol = 0.0_f64;
        for (k, &(fv, cv)) in folded.products.iter().enumerate() {
            let exact = x[fv] * x[cv];
            let viol = (x[n + k] - exact).abs() / (1.0 + exact.abs());
            worst_viol = worst_viol.max(viol);
            if viol > PRODUCT_TOL {
                *scores.entry(fv).or_default() += viol;
                *scores.entry(cv).or_default() += viol;
            }
        }
        let products_ok = worst_viol <= PRODUCT_TOL;
        let point_feasible = frac_bin.is_none() && products_ok;

        // Heuristic: always from consistent points and roots, otherwise on a
        // fixed cadence.
        if point_feasible || node.depth == 0 || self.nodes_explored % 8 == 0 {
            if let Some((cand, value)) = self.polish(node.folded, &x[..n], node.depth == 0) {
                self.try_incumbent(cand, value);
            }
        }
        if point_feasible && sol.status == LpStatus::Optimal {
            // The relaxation optimum itself satisfies the products, so this
            // box is solved: its bound equals the best point inside it.
            self.record(&node, bound, "leaf");
            if self.incumbent.is_none() {
                // The heuristic failed to certify the point; keep the bound
                // honest rather than silently claiming exhaustion.
                self.lost_bound = self.lost_bound.min(bound);
                self.closed_unverified += 1;
            }
            return Ok(());
        }
        if bound >= self.incumbent_cutoff() {
            self.record(&node, bound, "pruned-bound");
            return Ok(());
        }

        // Branch. Choose the spatial candidate first so its availability can
        // steer the ordering below.
        let rel_width = |i: usize| {
            let (l, u) = bounds[i];
            (u - l) / (1.0 + l.abs().max(u.abs()))
        };
        // Weight accumulated violation by box width so a nearly-pinned
        // variable never wins over a wide one with similar violation.
        let mut var = usize::MAX;
        let mut var_score = 0.0;
        for (&v, &s) in &scores {
            let score = s * rel_width(v);
            if score > var_score + 1e-15 {
                var = v;
                var_score = score;
            }
        }
        let spatial_ok = var != usize::MAX && rel_width(var) > 1e-9;
        // Fixed pipe charges are a sliver of the objective while envelope
        // slack drives the bound, so shrink product boxes before resolving
        // binaries whenever some product is still materially inconsistent.
        if frac_bin.is_some() && (worst_viol <= 1e-4 || !spatial_ok) {
            let (id, _) = frac_bin.unwrap();
            self.record(&node, bound, "branched-binary");
            for pin in [0.0, 1.0] {
                let mut child = bounds.clone();
                child[id] = (pin, pin);
                let seq = self.take_seq();
                self.pool.push(PoolEntry(Node {
                    folded: node.folded,
                    bounds: child,
                    depth: node.depth + 1,
                    bound,
                    seq,
                }));
            }
            return Ok(());
        }
        if !spatial_ok {
            // Every participating box is degenerate but some product still
            // disagrees: numerics, not geometry. Close the node without
            // claiming anything.
            self.record(&node, bound, "degenerate-box");
            self.lost_bound = self.lost_bound.min(bound);
            self.closed_unverified += 1;
            return Ok(());
        }
        let (l, u) = bounds[var];
        let split = x[var].clamp(l + 0.25 * (u - l), l + 0.75 * (u - l));
        self.record(&node, bound, "branched-spatial");
        for child_bounds in [(l, split), (split, u)] {
            let mut child = bounds.clone();
            child[var] = child_bounds;
            let seq = self.take_seq();
            self.pool.push(PoolEntry(Node {
                folded: node.folded,
                bounds: child,
                depth: node.depth + 1,
                bound,
                seq,
            }));
        }
        Ok(())
    }

    /// Incumbent heuristic: run the fixed-point alternation from the
    /// concentrations the relaxation's flows would physically produce; at
    /// root nodes additionally from the relaxation's own concentration
    /// point, an everything-exported mixing estimate and the worst-case
    /// (upper-bound) concentrations. Keeps the best verified result.
    fn polish(&mut self, fi: usize, x0: &[f64], root: bool) -> Option<(Solution, f64)> {
        let mut starts: Vec<BTreeMap<usize, f64>> = vec![self.conc_from_flows(fi, x0)];
        if root {
            // The relaxation's concentration variables sit wherever the
            // envelopes allow — a different, occasionally useful guess.
            let conc_vars = || {
                self.folded[fi].program.variables.iter().filter(|v| {
                    matches!(v.role, VarRole::ExportConc { .. } | VarRole::HubOutletConc { .. })
                })
            };
            starts.push(conc_vars().map(|v| (v.id, x0[v.id].clamp(v.lower, v.upper))).collect());
            starts.push(self.export_mix_guess(fi));
            starts.push(conc_vars().map(|v| (v.id, v.upper)).collect());
        }
        let mut best: Option<(Solution, f64)> = None;
        for conc in starts {
            if let Some((cand, value)) = self.polish_from(fi, conc) {
                let better = match &best {
                    None => true,
                    Some((_, b)) => value < b - 1e-12 * (1.0 + value.abs()),
                };
                if better {
                    best = Some((cand, value));
                }
            }
        }
        best
    }

    /// Concentrations that would arise if every plant sent its whole
    /// effluent to the hub: each plant's flow-weighted source mix, and the
    /// park-wide mix scaled by what the regenerator leaves in.
    fn export_mix_guess(&self, fi: usize) -> BTreeMap<usize, f64> {
        let folded = &self.folded[fi];
        let reg = self
            .instance
            .regenerators
            .iter()
            .find(|r| r.index == folded.regenerator)
            .expect("folded program references a catalog option");
        let mut out = BTreeMap::new();
        for v in &folded.program.variables {
            let t = v.period;
            let mix = |plant: Option<&crate::model::PlantId>, contaminant: &str| {
                let mut flow = 0.0;
                let mut load = 0.0;
                for s in &self.instance.sources {
                    if plant.is_some_and(|p| p != &s.plant)
                        || !self.instance.scenario.is_active(&s.plant, t)
                    {
                        continue;
                    }
                    flow += s.flow[t - 1];
                    load += s.flow[t - 1] * s.conc.get(contaminant).map_or(0.0, |vals| vals[t - 1]);
                }
                if flow > 0.0 {
                    load / flow
                } else {
                    0.0
                }
            };
            match &v.role {
                VarRole::ExportConc { plant, contaminant } => {
                    out.insert(v.id, mix(Some(plant), contaminant).clamp(v.lower, v.upper));
                }
                VarRole::HubOutletConc { contaminant } => {
                    let keep = 1.0 - reg.removal_ratio.get(contaminant).copied().unwrap_or(0.0);
                    out.insert(v.id, (keep * mix(None, contaminant)).clamp(v.lower, v.upper));
                }
                _ => {}
            }
        }
        out
    }

    /// Fixed-point incumbent heuristic: freeze concentrations, optimize the
    /// flows by LP, re-derive the concentrations from the flows, repeat.
    /// Binaries are pinned to the installation pattern implied by the flows
    /// (monotone over time). Only residual-verified candidates are returned.
    fn polish_from(&mut self, fi: usize, mut conc: BTreeMap<usize, f64>) -> Option<(Solution, f64)> {
        let mut pattern: Option<BTreeMap<usize, f64>> = None;
        let mut tried_all_on = false;
        let mut best: Option<(Solution, f64)> = None;

        for _round in 0..50 {
            let lp = self.flows_lp(fi, &conc, pattern.as_ref());
            let Ok(sol) = solve_lp(&lp, &self.lp_cfg) else { return best };
            self.lp_solves += 1;
            if sol.status != LpStatus::Optimal {
                if pattern.is_some() && !tried_all_on {
                    // The flow-derived pattern can be infeasible (a pipe that
                    // carried a trickle must move at least the minimum flow);
                    // retry with every pipe installed from plant entry on.
                    pattern = Some(self.all_on_pattern(fi));
                    tried_all_on = true;
                    continue;
                }
                return best;
            }
            let derived = self.pattern_from_flows(fi, &sol.x);
            if pattern.as_ref() != Some(&derived) {
                pattern = Some(derived);
                continue;
            }
            if let Some(candidate) = self.build_solution(fi, &sol.x) {
                let value = candidate.objective_value;
                if residuals(self.instance, &candidate).pass(RESIDUAL_TOL) {
                    let better = match &best {
                        None => true,
                        Some((_, b)) => value < b - 1e-12 * (1.0 + value.abs()),
                    };
                    if better {
                        best = Some((candidate, value));
                    }
                }
            }
            let next = self.conc_from_flows(fi, &sol.x);
            let moved = next
                .iter()
                .map(|(id, v)| (v - conc.get(id).copied().unwrap_or(0.0)).abs() / (1.0 + v.abs()))
                .fold(0.0, f64::max);
            conc = next;
            if moved <= 1e-9 {
                break;
            }
        }
        best
    }

    /// LP over the flows with concentrations frozen at `conc`: product rows
    /// become linear, the definition rows of the frozen quantities are
    /// dropped, and removal is priced directly onto the exports.
    fn flows_lp(
        &self,
        fi: usize,
        conc: &BTreeMap<usize, f64>,
        pattern: Option<&BTreeMap<usize, f64>>,
    ) -> LpProblem {
        let folded = &self.folded[fi];
        let program = &folded.program;
        let mut lp = LpProblem::new(program.num_vars());
        for v in &program.variables {
            let (mut lo, mut hi) = (v.lower, v.upper);
            if let Some(&c) = conc.get(&v.id) {
                lo = c;
                hi = c;
            }
            if matches!(v.role, VarRole::MassRemoved { .. }) {
                // Removal follows from the frozen concentrations; its cost
                // moves onto the export columns below.
                lo = 0.0;
                hi = 0.0;
            }
            if v.integral {
                if let Some(p) = pattern {
                    if let Some(&pin) = p.get(&v.id) {
                        lo = pin.clamp(v.lower, v.upper);
                        hi = lo;
                    }
                }
            }
            lp.lower[v.id] = lo;
            lp.upper[v.id] = hi;
        }
        for c in &program.constraints {
            if matches!(
                c.tag,
                ConstraintTag::EffluentQuality { .. }
                    | ConstraintTag::HubMassBalance { .. }
                    | ConstraintTag::RemovalDefinition { .. }
            ) {
                continue;
            }
            let mut coeffs = c.linear.terms.clone();
            for b in &c.bilinear {
                coeffs.push((b.flow, b.coefficient * conc.get(&b.conc).copied().unwrap_or(0.0)));
            }
            lp.rows.push(SparseRow { coeffs, sense: c.sense, rhs: c.rhs });
        }
        for &(v, coeff) in &program.objective.linear.terms {
            lp.objective[v] += coeff;
        }
        // Substitute removed mass = Σ removal·export·exportconc into the
        // objective so hub use is priced although the mass column is pinned.
        let reg = self.instance.regenerator(folded.regenerator);
        for t in 1..=program.periods {
            for contaminant in &self.instance.contaminants {
                let Some(mv) = program.mass_removed_var(t, contaminant) else { continue };
                let coeff = program.objective.linear.coeff(mv);
                if coeff == 0.0 {
                    continue;
                }
                let rr = reg
                    .and_then(|r| r.removal_ratio.get(contaminant))
                    .copied()
                    .unwrap_or(0.0);
                for plant in &self.instance.plants {
                    let (Some(ev), Some(cv)) = (
                        program.export_var(t, plant),
                        program.export_conc_var(t, plant, contaminant),
                    ) else {
                        continue;
                    };
                    lp.objective[ev] += coeff * rr * conc.get(&cv).copied().unwrap_or(0.0);
                }
            }
        }
        lp
    }

    /// Earliest-use installation pattern implied by the flows: a pipe is on
    /// from the first period its flow is positive.
    fn pattern_from_flows(&self, fi: usize, x: &[f64]) -> BTreeMap<usize, f64> {
        let program = &self.folded[fi].program;
        let mut pattern = BTreeMap::new();
        for plant in &self.instance.plants {
            let mut export_on = false;
            let mut import_on = false;
            for t in 1..=program.periods {
                if let Some(ev) = program.export_var(t, plant) {
                    export_on = export_on || x[ev] > 1e-7;
                    if let Some(yv) = program.export_pipe_var(t, plant) {
                        pattern.insert(yv, if export_on { 1.0 } else { 0.0 });
                    }
                }
                if let Some(gv) = program.import_total_var(t, plant) {
                    import_on = import_on || x[gv] > 1e-7;
                    if let Some(lv) = program.import_pipe_var(t, plant) {
                        pattern.insert(lv, if import_on { 1.0 } else { 0.0 });
                    }
                }
            }
        }
        pattern
    }

    /// Every pipe installed wherever its variable may be 1.
    fn all_on_pattern(&self, fi: usize) -> BTreeMap<usize, f64> {
        let program = &self.folded[fi].program;
        program
            .variables
            .iter()
            .filter(|v| {
                matches!(v.role, VarRole::ExportPipe { .. } | VarRole::ImportPipe { .. })
            })
            .map(|v| (v.id, if v.upper > 0.5 { 1.0 } else { 0.0 }))
            .collect()
    }

    /// Closed-form concentrations implied by the flows.
    fn conc_from_flows(&self, fi: usize, x: &[f64]) -> BTreeMap<usize, f64> {
        let folded = &self.folded[fi];
        let program = &folded.program;
        let inst = self.instance;
        let reg = inst.regenerator(folded.regenerator);
        let mut out = BTreeMap::new();
        for t in 1..=program.periods {
            let mut total_export = 0.0;
            let mut plant_conc: BTreeMap<(&str, usize), f64> = BTreeMap::new();
            for (pi, plant) in inst.plants.iter().enumerate() {
                let f = program.export_var(t, plant).map_or(0.0, |v| x[v]);
                let d = program.discharge_var(t, plant).map_or(0.0, |v| x[v]);
                total_export += f;
                for c in &inst.contaminants {
                    let load: f64 = inst
                        .sources_of(plant)
                        .map(|s| {
                            let w = program.source_outlet_var(t, s.id).map_or(0.0, |v| x[v]);
                            w * s.conc.get(c).map_or(0.0, |series| series[t - 1])
                        })
                        .sum();
                    let value = if f + d > 1e-10 { load / (f + d) } else { 0.0 };
                    plant_conc.insert((c.as_str(), pi), value);
                    if let Some(cv) = program.export_conc_var(t, plant, c) {
                        out.insert(cv, value);
                    }
                }
            }
            for c in &inst.contaminants {
                let inlet: f64 = inst
                    .plants
                    .iter()
                    .enumerate()
                    .map(|(pi, plant)| {
                        let f = program.export_var(t, plant).map_or(0.0, |v| x[v]);
                        f * plant_conc.get(&(c.as_str(), pi)).copied().unwrap_or(0.0)
                    })
                    .sum();
                let rr = reg.and_then(|r| r.removal_ratio.get(c)).copied().unwrap_or(0.0);
                let outlet =
                    if total_export > 1e-10 { inlet * (1.0 - rr) / total_export } else { 0.0 };
                if let Some(cv) = program.hub_outlet_conc_var(t, c) {
                    out.insert(cv, outlet);
                }
            }
        }
        out
    }

    /// Assemble a full solution from a flow vector: flows come from `x`,
    /// concentrations and removed mass are recomputed so the mixing
    /// identities hold exactly, and costs follow from the assembled state.
    fn build_solution(&self, fi: usize, x: &[f64]) -> Option<Solution> {
        let folded = &self.folded[fi];
        let program = &folded.program;
        let inst = self.instance;
        let reg = inst.regenerator(folded.regenerator);
        let mut periods = Vec::with_capacity(program.periods);
        for t in 1..=program.periods {
            let active = inst.active_plants(t).ok()?;
            let mut state = PeriodState { period: t, ..Default::default() };
            let mut total_export = 0.0;
            for plant in &active {
                let f = program.export_var(t, plant).map_or(0.0, |v| x[v]);
                let d = program.discharge_var(t, plant).map_or(0.0, |v| x[v]);
                let g = program.import_total_var(t, plant).map_or(0.0, |v| x[v]);
                total_export += f;
                state.export.push(PlantValue { plant: (*plant).clone(), value: f });
                state.discharge.push(PlantValue { plant: (*plant).clone(), value: d });
                state.hub_import.push(PlantValue { plant: (*plant).clone(), value: g });
                state.export_pipe.push(PlantFlag {
                    plant: (*plant).clone(),
                    on: program.export_pipe_var(t, plant).map_or(false, |v| x[v] > 0.5),
                });
                state.import_pipe.push(PlantFlag {
                    plant: (*plant).clone(),
                    on: program.import_pipe_var(t, plant).map_or(false, |v| x[v] > 0.5),
                });
                for src in inst.sources_of(plant) {
                    let w = program.source_outlet_var(t, src.id).map_or(0.0, |v| x[v]);
                    state.effluent.push(SourceValue { source: src.id, value: w });
                    for snk in inst.sinks_of(plant) {
                        let flow = program.reuse_var(t, src.id, snk.id).map_or(0.0, |v| x[v]);
                        if flow > 1e-9 {
                            state.reuse.push(ReuseFlow { source: src.id, sink: snk.id, flow });
                        }
                    }
                }
                for snk in inst.sinks_of(plant) {
                    state.fresh.push(SinkValue {
                        sink: snk.id,
                        value: program.fresh_var(t, snk.id).map_or(0.0, |v| x[v]),
                    });
                    state.sink_import.push(SinkValue {
                        sink: snk.id,
                        value: program.sink_import_var(t, snk.id).map_or(0.0, |v| x[v]),
                    });
                }
            }
            // Concentrations from the flows, exactly as mixed.
            let mut inlet: BTreeMap<&str, f64> = BTreeMap::new();
            for plant in &active {
                let f = program.export_var(t, plant).map_or(0.0, |v| x[v]);
                let d = program.discharge_var(t, plant).map_or(0.0, |v| x[v]);
                for c in &inst.contaminants {
                    let load: f64 = inst
                        .sources_of(plant)
                        .map(|s| {
                            let w = program.source_outlet_var(t, s.id).map_or(0.0, |v| x[v]);
                            w * s.conc.get(c).map_or(0.0, |series| series[t - 1])
                        })
                        .sum();
                    let conc = if f + d > 1e-10 { load / (f + d) } else { 0.0 };
                    state.effluent_conc.push(PlantConc {
                        plant: (*plant).clone(),
                        contaminant: c.clone(),
                        value: conc,
                    });
                    *inlet.entry(c.as_str()).or_insert(0.0) += f * conc;
                }
            }
            for c in &inst.contaminants {
                let load = inlet.get(c.as_str()).copied().unwrap_or(0.0);
                let rr = reg.and_then(|r| r.removal_ratio.get(c)).copied().unwrap_or(0.0);
                let removed = rr * load;
                let outlet =
                    if total_export > 1e-10 { (load - removed) / total_export } else { 0.0 };
                state.hub_outlet_conc.push(ContamValue { contaminant: c.clone(), value: outlet });
                state.mass_removed.push(ContamValue { contaminant: c.clone(), value: removed });
            }
            state.costs = period_costs(inst, &state, folded.regenerator);
            periods.push(state);
        }
        let weights = &inst.scenario.period_weights;
        let objective_value = match program.objective_kind {
            ObjectiveKind::Cost => periods
                .iter()
                .zip(weights)
                .map(|(p, w)| w * p.costs.total())
                .sum(),
            ObjectiveKind::Freshwater => periods
                .iter()
                .zip(weights)
                .map(|(p, w)| w * p.total_fresh())
                .sum(),
        };
        Some(Solution {
            objective: program.objective_kind,
            objective_value,
            regenerator: folded.regenerator,
            periods,
        })
    }
}

/// Shrink concentration and removal boxes using the folded-in removal
/// ratio. The hub outlet is a flow-weighted mix of plant effluents scaled by
/// `1 - rr`, so it lives inside the scaled hull of the active source
/// concentrations (when the hub is idle its defining rows degenerate to
/// 0 = 0, so the bounds exclude nothing feasible), and the removed mass is
/// at most `rr` times the total contaminant load.
fn tighten_for_regenerator(
    program: &mut Program,
    instance: &NetworkInstance,
    reg: &crate::model::RegeneratorOption,
) {
    for v in &mut program.variables {
        let t = v.period;
        match &v.role {
            VarRole::HubOutletConc { contaminant } => {
                let keep = 1.0 - reg.removal_ratio.get(contaminant).copied().unwrap_or(0.0);
                let mut lo = f64::INFINITY;
                let mut hi = 0.0_f64;
                for s in &instance.sources {
                    if !instance.scenario.is_active(&s.plant, t) {
                        continue;
                    }
                    let c = s.conc.get(contaminant).map_or(0.0, |vals| vals[t - 1]);
                    lo = lo.min(c);
                    hi = hi.max(c);
                }
                if lo.is_finite() {
                    v.lower = v.lower.max(keep * lo).min(v.upper);
                    v.upper = v.upper.min(keep * hi).max(v.lower);
                }
            }
            VarRole::MassRemoved { contaminant } => {
                let rr = reg.removal_ratio.get(contaminant).copied().unwrap_or(0.0);
                v.upper *= rr;
            }
            _ => {}
        }
    }
}

/// Bound probing at the root: minimize and maximize each concentration and
/// removal variable over the envelope relaxation and adopt the optima as
/// bounds. Anything the relaxation cannot reach, no real solution reaches,
/// so the shrunken boxes are valid everywhere in this folded program's tree.
/// Returns the number of LPs solved, or `None` when the relaxation itself is
/// infeasible (then the whole folded program can be dropped).
fn probe_bounds(
    folded: &Folded,
    bounds: &mut [(f64, f64)],
    lp_cfg: &LpConfig,
) -> Option<usize> {
    let targets: Vec<usize> = folded
        .program
        .variables
        .iter()
        .filter(|v| {
            matches!(
                v.role,
                VarRole::ExportConc { .. }
                    | VarRole::HubOutletConc { .. }
                    | VarRole::MassRemoved { .. }
            )
        })
        .map(|v| v.id)
        .collect();
    let mut lps = 0;
    for _round in 0..2 {
        let mut moved = false;
        for &v in &targets {
            for dir in [1.0, -1.0] {
                let (lo, hi) = bounds[v];
                if hi - lo <= 1e-7 * (1.0 + hi.abs()) {
                    continue;
                }
                let mut lp = relaxation_lp(folded, bounds);
                lp.objective.iter_mut().for_each(|c| *c = 0.0);
                lp.objective[v] = dir;
                let Ok(sol) = solve_lp(&lp, lp_cfg) else { return Some(lps) };
                lps += 1;
                match sol.status {
                    LpStatus::Infeasible => return None,
                    LpStatus::Optimal => {
                        let margin = 1e-9 * (1.0 + sol.objective.abs());
                        if dir > 0.0 {
                            let new_lo = (sol.objective - margin).clamp(lo, hi);
                            if new_lo > lo + 1e-7 * (1.0 + lo.abs()) {
                                moved = true;
                            }
                            bounds[v].0 = new_lo;
                        } else {
                            let new_hi = (-sol.objective + margin).clamp(lo, hi);
                            if new_hi < hi - 1e-7 * (1.0 + hi.abs()) {
                                moved = true;
                            }
                            bounds[v].1 = new_hi;
                        }
                    }
                    _ => {}
                }
            }
        }
        if !moved {
            break;
        }
    }
    Some(lps)
}

/// The node relaxation: every variable boxed by the node, one auxiliary
/// column per product with its envelope rows, model rows written on the
/// auxiliaries.
fn relaxation_lp(folded: &Folded, bounds: &[(f64, f64)]) -> LpProblem {
    let program = &folded.program;
    let n = program.num_vars();
    let products = &folded.products;
    let mut lp = LpProblem::new(n + products.len());
    for (i, &(lo, hi)) in bounds.iter().enumerate() {
        lp.lower[i] = lo;
        lp.upper[i] = hi;
    }
    let mut aux: BTreeMap<(usize, usize), usize> = BTreeMap::new();
    for (k, &(fv, cv)) in products.iter().enumerate() {
        let w = n + k;
        aux.insert((fv, cv), w);
        let (lx, ux) = bounds[fv];
        let (ly, uy) = bounds[cv];
        let corners = [lx * ly, lx * uy, ux * ly, ux * uy];
        lp.lower[w] = corners.iter().copied().fold(f64::INFINITY, f64::min);
        lp.upper[w] = corners.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        lp.rows.extend(mccormick_rows(w, fv, cv, (lx, ux), (ly, uy)));
    }
    for c in &program.constraints {
        debug_assert!(c.gated_bilinear.is_empty(), "relaxation requires a folded program");
        let mut coeffs = c.linear.terms.clone();
        for b in &c.bilinear {
            coeffs.push((aux[&(b.flow, b.conc)], b.coefficient));
        }
        lp.rows.push(SparseRow { coeffs, sense: c.sense, rhs: c.rhs });
    }
    debug_assert!(program.objective.gated_linear.is_empty());
    for &(v, coeff) in &program.objective.linear.terms {
        lp.objective[v] += coeff;
    }
    for b in &program.objective.bilinear {
        lp.objective[aux[&(b.flow, b.conc)]] += b.coefficient;
    }
    lp
}

/// One pass of interval propagation over the purely linear rows. Returns
/// false when some variable's box empties (the node is infeasible).
fn tighten_bounds(program: &Program, bounds: &mut [(f64, f64)]) -> bool {
    for c in &program.constraints {
        if !c.bilinear.is_empty() || !c.gated_bilinear.is_empty() {
            continue;
        }
        let terms = &c.linear.terms;
        match c.sense {
            RowSense::Le => {
                if !propagate_le(terms, c.rhs, bounds) {
                    return false;
                }
            }
            RowSense::Ge => {
                let negated: Vec<(usize, f64)> = terms.iter().map(|&(v, a)| (v, -a)).collect();
                if !propagate_le(&negated, -c.rhs, bounds) {
                    return false;
                }
            }
            RowSense::Eq => {
                let negated: Vec<(usize, f64)> = terms.iter().map(|&(v, a)| (v, -a)).collect();
                if !propagate_le(terms, c.rhs, bounds)
                    || !propagate_le(&negated, -c.rhs, bounds)
                {
                    return false;
                }
            }
        }
    }
    for v in &program.variables {
        if !v.integral {
            continue;
        }
        let (lo, hi) = bounds[v.id];
        let lo = (lo - 1e-9).ceil();
        let hi = (hi + 1e-9).floor();
        if lo > hi {
            return false;
        }
        bounds[v.id] = (lo, hi);
    }
    true
}

/// Tighten every variable of `Σ a·x ≤ rhs` against the interval minimum of
/// the other terms.
fn propagate_le(terms: &[(usize, f64)], rhs: f64, bounds: &mut [(f64, f64)]) -> bool {
    let mut min_sum = 0.0;
    for &(v, a) in terms {
        let (lo, hi) = bounds[v];
        min_sum += if a > 0.0 { a * lo } else { a * hi };
    }
    if min_sum > rhs + 1e-7 * (1.0 + rhs.abs()) {
        return false;
    }
    for &(v, a) in terms {
        if a == 0.0 {
            continue;
        }
        let (lo, hi) = bounds[v];
        let own_min = if a > 0.0 { a * lo } else { a * hi };
        let slack = rhs - (min_sum - own_min);
        let limit = slack / a;
        if !limit.is_finite() {
            continue;
        }
        if a > 0.0 {
            if limit < hi {
                bounds[v].1 = limit.max(lo);
            }
        } else if limit > lo {
            bounds[v].0 = limit.min(hi);
        }
        let (lo, hi) = bounds[v];
        if lo > hi + 1e-9 * (1.0 + hi.abs()) {
            return false;
        }
        if lo > hi {
            let mid = 0.5 * (lo + hi);
            bounds[v] = (mid, mid);
        }
    }
    true
}
