//! Independent verification of solutions.
//!
//! Everything here recomputes physics and economics directly from the
//! instance data rather than reusing the formulation layer, so the two
//! implementations cross-check each other: a transcription mistake in one
//! shows up as a residual or a mismatched objective instead of passing
//! silently through shared code.
//!
//! Three tools:
//! * [`residuals`] — evaluates every model rule at a solution and reports
//!   how far each is from holding exactly;
//! * [`brute_force_tiny`] — exhaustive grid search over the few independent
//!   degrees of freedom of a very small instance;
//! * [`compare_to_reference`] — checks a solution against a published
//!   reference row (freshwater, regenerator choice, cost).

use std::collections::BTreeMap;

use thiserror::Error;

use crate::model::{EconomicParams, NetworkInstance, ObjectiveKind, PeriodState, Solution};

/// One evaluated rule: `raw` is the absolute defect, `scaled` divides it by
/// `max(1, |reference magnitude|)` so tolerances are meaningful across
/// flows (~10 t/h) and loads (~10⁵ g/h).
#[derive(Debug, Clone)]
pub struct ResidualEntry {
    pub label: String,
    pub period: usize,
    pub raw: f64,
    pub scaled: f64,
}

/// Everything [`residuals`] found.
#[derive(Debug, Clone, Default)]
pub struct ResidualReport {
    pub entries: Vec<ResidualEntry>,
    /// Structural problems that make residuals meaningless (unknown ids,
    /// inactive plants referenced, period mismatches, broken persistence).
    pub issues: Vec<String>,
}

impl ResidualReport {
    fn push(&mut self, label: String, period: usize, raw: f64, scale: f64) {
        let scaled = raw.abs() / scale.abs().max(1.0);
        self.entries.push(ResidualEntry { label, period, raw, scaled });
    }

    /// Largest scaled residual (0 when no entries).
    pub fn max_scaled(&self) -> f64 {
        self.entries.iter().map(|e| e.scaled).fold(0.0, f64::max)
    }

    /// True when there are no structural issues and every scaled residual is
    /// within `tol`.
    pub fn pass(&self, tol: f64) -> bool {
        self.issues.is_empty() && self.max_scaled() <= tol
    }

    /// The `n` worst entries, most violated first.
    pub fn worst(&self, n: usize) -> Vec<&ResidualEntry> {
        let mut sorted: Vec<&ResidualEntry> = self.entries.iter().collect();
        sorted.sort_by(|a, b| b.scaled.total_cmp(&a.scaled));
        sorted.truncate(n);
        sorted
    }
}

/// Annualization factor recomputed through the present-value series
/// `1 / Σ (1+u)^-k` — deliberately a different formula from the closed form
/// used elsewhere.
fn annuity_series_factor(interest_rate: f64, economic_life: u32) -> f64 {
    let mut pv = 0.0;
    for k in 1..=economic_life {
        pv += (1.0 + interest_rate).powi(-(k as i32));
    }
    1.0 / pv
}

struct Checker<'a> {
    inst: &'a NetworkInstance,
    report: ResidualReport,
}

impl<'a> Checker<'a> {
    fn issue(&mut self, msg: String) {
        self.report.issues.push(msg);
    }

    /// Structural screening of one period's collections: every referenced
    /// entity must exist, belong to an active plant, be unique, and carry a
    /// non-negative value.
    fn screen_period(&mut self, state: &PeriodState, t: usize) {
        let inst = self.inst;
        let active: Vec<_> = match inst.active_plants(t) {
            Ok(a) => a.into_iter().cloned().collect(),
            Err(e) => {
                self.issue(format!("period {t}: {e}"));
                return;
            }
        };
        let source_plant: BTreeMap<u32, _> =
            inst.sources.iter().map(|s| (s.id.0, s.plant.clone())).collect();
        let sink_plant: BTreeMap<u32, _> =
            inst.sinks.iter().map(|s| (s.id.0, s.plant.clone())).collect();

        let mut seen_arcs = BTreeMap::new();
        for r in &state.reuse {
            match (source_plant.get(&r.source.0), sink_plant.get(&r.sink.0)) {
                (Some(sp), Some(kp)) => {
                    if sp != kp {
                        self.issue(format!(
                            "period {t}: reuse arc src {} -> snk {} crosses plants {sp} -> {kp}",
                            r.source.0, r.sink.0
                        ));
                    } else if !active.contains(sp) {
                        self.issue(format!(
                            "period {t}: reuse arc src {} -> snk {} references inactive plant {sp}",
                            r.source.0, r.sink.0
                        ));
                    }
                }
                _ => self.issue(format!(
                    "period {t}: reuse arc src {} -> snk {} references unknown ids",
                    r.source.0, r.sink.0
                )),
            }
            if r.flow < -1e-9 {
                self.issue(format!(
                    "period {t}: negative reuse flow {} on src {} -> snk {}",
                    r.flow, r.source.0, r.sink.0
                ));
            }
            if seen_arcs.insert((r.source.0, r.sink.0), ()).is_some() {
                self.issue(format!(
                    "period {t}: duplicate reuse arc src {} -> snk {}",
                    r.source.0, r.sink.0
                ));
            }
        }
        let check_sink_list = |list: &[crate::model::SinkValue], what: &str, rep: &mut Self| {
            let mut seen = BTreeMap::new();
            for v in list {
                match sink_plant.get(&v.sink.0) {
                    Some(p) if active.contains(p) => {}
                    Some(p) => rep.issue(format!(
                        "period {t}: {what} lists snk {} of inactive plant {p}",
                        v.sink.0
                    )),
                    None => rep.issue(format!("period {t}: {what} lists unknown snk {}", v.sink.0)),
                }
                if v.value < -1e-9 {
                    rep.issue(format!("period {t}: negative {what} {} on snk {}", v.value, v.sink.0));
                }
                if seen.insert(v.sink.0, ()).is_some() {
                    rep.issue(format!("period {t}: duplicate {what} entry for snk {}", v.sink.0));
                }
            }
        };
        check_sink_list(&state.fresh, "freshwater", self);
        check_sink_list(&state.sink_import, "hub delivery", self);
        let mut seen = BTreeMap::new();
        for v in &state.effluent {
            match source_plant.get(&v.source.0) {
                Some(p) if active.contains(p) => {}
                Some(p) => self.issue(format!(
                    "period {t}: effluent lists src {} of inactive plant {p}",
                    v.source.0
                )),
                None => self.issue(format!("period {t}: effluent lists unknown src {}", v.source.0)),
            }
            if v.value < -1e-9 {
                self.issue(format!(
                    "period {t}: negative effluent {} on src {}",
                    v.value, v.source.0
                ));
            }
            if seen.insert(v.source.0, ()).is_some() {
                self.issue(format!("period {t}: duplicate effluent entry for src {}", v.source.0));
            }
        }
        for (list, what) in [
            (&state.export, "hub export"),
            (&state.discharge, "discharge"),
            (&state.hub_import, "hub import"),
        ] {
            let mut seen = BTreeMap::new();
            for v in list {
                if !inst.plants.contains(&v.plant) {
                    self.issue(format!("period {t}: {what} lists unknown plant {}", v.plant));
                } else if !active.contains(&v.plant) {
                    self.issue(format!("period {t}: {what} lists inactive plant {}", v.plant));
                }
                if v.value < -1e-9 {
                    self.issue(format!(
                        "period {t}: negative {what} {} at plant {}",
                        v.value, v.plant
                    ));
                }
                if seen.insert(v.plant.clone(), ()).is_some() {
                    self.issue(format!("period {t}: duplicate {what} entry for plant {}", v.plant));
                }
            }
        }
        for c in &state.effluent_conc {
            if c.value < -1e-9 {
                self.issue(format!(
                    "period {t}: negative effluent concentration {} at plant {}",
                    c.value, c.plant
                ));
            }
        }
        for c in state.hub_outlet_conc.iter().chain(&state.mass_removed) {
            if c.value < -1e-9 {
                self.issue(format!(
                    "period {t}: negative hub quantity {} for {}",
                    c.value, c.contaminant
                ));
            }
        }
    }

    /// Balance, quality, gating, hub and cost rules for one period.
    fn check_period(&mut self, state: &PeriodState, t: usize, regenerator: u32) {
        let inst = self.inst;
        let Ok(active) = inst.active_plants(t) else { return };
        let active: Vec<_> = active.into_iter().cloned().collect();
        let hub_cap = inst.hub_flow_cap();
        let hub_min = inst.economics.hub_flow_min;

        for plant in &active {
            let sources: Vec<_> = inst.sources_of(plant).collect();
            let sinks: Vec<_> = inst.sinks_of(plant).collect();

            // Source balances.
            for src in &sources {
                let reuse_out: f64 = state
                    .reuse
                    .iter()
                    .filter(|r| r.source == src.id)
                    .map(|r| r.flow)
                    .sum();
                let supply = src.flow[t - 1];
                let raw = reuse_out + state.effluent_of(src.id) - supply;
                self.report.push(format!("source_balance(src {}, t{t})", src.id.0), t, raw, supply);
            }
            // Sink balances and quality.
            for snk in &sinks {
                let reuse_in: f64 = state
                    .reuse
                    .iter()
                    .filter(|r| r.sink == snk.id)
                    .map(|r| r.flow)
                    .sum();
                let demand = snk.flow[t - 1];
                let raw =
                    reuse_in + state.fresh_to(snk.id) + state.sink_import_of(snk.id) - demand;
                self.report.push(format!("sink_balance(snk {}, t{t})", snk.id.0), t, raw, demand);

                for c in &inst.contaminants {
                    let Some(limit) = snk.max_conc.get(c).map(|v| v[t - 1]) else { continue };
                    let mut load = 0.0;
                    for r in state.reuse.iter().filter(|r| r.sink == snk.id) {
                        let conc = sources
                            .iter()
                            .find(|s| s.id == r.source)
                            .and_then(|s| s.conc.get(c).map(|v| v[t - 1]))
                            .unwrap_or(0.0);
                        load += r.flow * conc;
                    }
                    let fresh_conc = inst.economics.freshwater_conc.get(c).copied().unwrap_or(0.0);
                    load += state.fresh_to(snk.id) * fresh_conc;
                    load += state.sink_import_of(snk.id) * state.hub_outlet_conc_of(c);
                    let cap = demand * limit;
                    let raw = (load - cap).max(0.0);
                    self.report.push(format!("sink_quality(snk {}, {c}, t{t})", snk.id.0), t, raw, cap);
                }
            }
            // Plant-level balances.
            let import_sum: f64 = sinks.iter().map(|s| state.sink_import_of(s.id)).sum();
            let g = state.hub_import_of(plant);
            self.report.push(
                format!("plant_import_balance({plant}, t{t})"),
                t,
                import_sum - g,
                g,
            );
            let effluent_sum: f64 = sources.iter().map(|s| state.effluent_of(s.id)).sum();
            let f = state.export_of(plant);
            let d = state.discharge_of(plant);
            self.report.push(
                format!("plant_effluent_split({plant}, t{t})"),
                t,
                effluent_sum - f - d,
                effluent_sum,
            );
            // Pipe gating.
            let y = if state.export_pipe_on(plant) { 1.0 } else { 0.0 };
            let l = if state.import_pipe_on(plant) { 1.0 } else { 0.0 };
            self.report.push(
                format!("export_pipe_upper({plant}, t{t})"),
                t,
                (f - hub_cap * y).max(0.0),
                hub_cap,
            );
            self.report.push(
                format!("export_pipe_lower({plant}, t{t})"),
                t,
                (hub_min * y - f).max(0.0),
                1.0,
            );
            self.report.push(
                format!("import_pipe_upper({plant}, t{t})"),
                t,
                (g - hub_cap * l).max(0.0),
                hub_cap,
            );
            self.report.push(
                format!("import_pipe_lower({plant}, t{t})"),
                t,
                (hub_min * l - g).max(0.0),
                1.0,
            );
            // Effluent mixing per contaminant.
            for c in &inst.contaminants {
                let load: f64 = sources
                    .iter()
                    .map(|s| {
                        state.effluent_of(s.id) * s.conc.get(c).map_or(0.0, |v| v[t - 1])
                    })
                    .sum();
                let conc = state.effluent_conc_of(c, plant);
                let raw = load - (f + d) * conc;
                self.report.push(format!("effluent_quality({plant}, {c}, t{t})"), t, raw, load);
            }
        }

        // Hub-level rules.
        let total_export: f64 = active.iter().map(|p| state.export_of(p)).sum();
        let total_import: f64 = active.iter().map(|p| state.hub_import_of(p)).sum();
        self.report.push(
            format!("hub_flow_balance(t{t})"),
            t,
            total_export - total_import,
            total_export,
        );
        let ratio = inst.regenerator(regenerator);
        for c in &inst.contaminants {
            let inlet_load: f64 = active
                .iter()
                .map(|p| state.export_of(p) * state.effluent_conc_of(c, p))
                .sum();
            let outlet_load: f64 = active
                .iter()
                .map(|p| state.hub_import_of(p) * state.hub_outlet_conc_of(c))
                .sum();
            let removed = state.mass_removed_of(c);
            self.report.push(
                format!("hub_mass_balance({c}, t{t})"),
                t,
                inlet_load - outlet_load - removed,
                inlet_load,
            );
            let rr = ratio.and_then(|r| r.removal_ratio.get(c)).copied().unwrap_or(0.0);
            self.report.push(
                format!("removal_definition({c}, t{t})"),
                t,
                removed - rr * inlet_load,
                inlet_load,
            );
        }

        // Costs, recomputed from first principles.
        let e = &inst.economics;
        let af = annuity_series_factor(e.interest_rate, e.economic_life);
        let flow_coef = e.distance_m * af * e.pipe_unit_cost * 1000.0
            / (3600.0 * e.water_density * e.pipe_velocity);
        let fixed_coef = e.distance_m * af * e.pipe_fixed_cost;
        let mut investment = 0.0;
        for p in &active {
            investment += flow_coef * (state.export_of(p) + state.hub_import_of(p));
            if state.export_pipe_on(p) {
                investment += fixed_coef;
            }
            if state.import_pipe_on(p) {
                investment += fixed_coef;
            }
        }
        let fresh_cost = e.annual_hours * e.freshwater_price * state.total_fresh();
        let discharge_cost = e.annual_hours * e.discharge_price * state.total_discharge();
        let removed: f64 = state.mass_removed.iter().map(|c| c.value).sum();
        let regen_cost =
            e.annual_hours * ratio.map_or(0.0, |r| r.unit_cost) * 1e-3 * removed;
        let cb = &state.costs;
        self.report.push(format!("cost_investment(t{t})"), t, cb.investment - investment, investment);
        self.report.push(format!("cost_fresh(t{t})"), t, cb.freshwater_cost - fresh_cost, fresh_cost);
        self.report.push(
            format!("cost_discharge(t{t})"),
            t,
            cb.discharge_cost - discharge_cost,
            discharge_cost,
        );
        self.report.push(format!("cost_regen(t{t})"), t, cb.regeneration_cost - regen_cost, regen_cost);
        self.report.push(
            format!("cost_operating(t{t})"),
            t,
            cb.operating - (cb.freshwater_cost + cb.discharge_cost + cb.regeneration_cost),
            cb.operating,
        );
    }
}

/// Evaluate every model rule at `solution` and report the defects.
///
/// The checker shares no code with the program builder: balances, quality
/// limits, hub behaviour and costs are recomputed from the instance alone.
pub fn residuals(instance: &NetworkInstance, solution: &Solution) -> ResidualReport {
    let mut checker = Checker { inst: instance, report: ResidualReport::default() };

    if instance.regenerator(solution.regenerator).is_none() {
        checker.issue(format!(
            "solution selects regenerator {} which is not in the catalog",
            solution.regenerator
        ));
    }
    let horizon = instance.horizon();
    if solution.periods.len() != horizon {
        checker.issue(format!(
            "solution covers {} periods but the instance plans {horizon}",
            solution.periods.len()
        ));
    }
    for (idx, state) in solution.periods.iter().enumerate() {
        let t = idx + 1;
        if state.period != t {
            checker.issue(format!("periods out of order: entry {idx} is period {}", state.period));
        }
        if t > horizon {
            continue;
        }
        checker.screen_period(state, t);
        checker.check_period(state, t, solution.regenerator);
    }
    // Installed equipment must stay installed.
    for w in solution.periods.windows(2) {
        let (prev, next) = (&w[0], &w[1]);
        for flag in &prev.export_pipe {
            if flag.on && !next.export_pipe_on(&flag.plant) {
                checker.issue(format!(
                    "export pipe of plant {} disappears between period {} and {}",
                    flag.plant, prev.period, next.period
                ));
            }
        }
        for flag in &prev.import_pipe {
            if flag.on && !next.import_pipe_on(&flag.plant) {
                checker.issue(format!(
                    "import pipe of plant {} disappears between period {} and {}",
                    flag.plant, prev.period, next.period
                ));
            }
        }
    }
    // Objective consistency.
    let weights = &instance.scenario.period_weights;
    let recomputed = match solution.objective {
        ObjectiveKind::Cost => solution
            .periods
            .iter()
            .zip(weights)
            .map(|(p, w)| {
                // Inline weighted total over the *recomputed* component sums
                // would duplicate check_period; the stated per-period costs
                // are already verified there, so weight those.
                w * p.costs.total()
            })
            .sum::<f64>(),
        ObjectiveKind::Freshwater => solution
            .periods
            .iter()
            .zip(weights)
            .map(|(p, w)| w * p.total_fresh())
            .sum::<f64>(),
    };
    let raw = solution.objective_value - recomputed;
    checker
        .report
        .push("objective_value".to_string(), 0, raw, recomputed);
    checker.report
}

/// Why the exhaustive oracle refused an instance.
#[derive(Debug, Error)]
pub enum OracleError {
    #[error("instance too large for exhaustive search: {0}")]
    TooLarge(String),
    #[error("instance unusable: {0}")]
    Invalid(String),
}

/// The best point an exhaustive grid search found.
#[derive(Debug, Clone, Copy)]
pub struct OracleResult {
    /// Weighted objective value at the best grid point.
    pub objective: f64,
    /// Weighted freshwater intake at that point (t/h).
    pub freshwater: f64,
    /// Regenerator option selected there.
    pub regenerator: u32,
}

/// One free coordinate of the grid search.
struct Dim {
    period: usize,
    kind: DimKind,
    upper: f64,
}

enum DimKind {
    /// Reuse arc: indexes into the instance source/sink lists.
    Reuse { source: usize, sink: usize },
    /// Hub delivery to one sink.
    Import { sink: usize },
    /// Hub export of one plant (all active plants except the last).
    Export { plant: usize },
}

/// Exhaustively grid-search a very small instance.
///
/// Only the independent coordinates are enumerated — same-plant reuse arcs,
/// per-sink hub deliveries and all-but-one plant exports; every other
/// quantity (effluent, discharge, freshwater, concentrations, removed mass,
/// pipe installations) follows from the balances. Pipe binaries take their
/// cheapest persistent values. Refuses instances whose grid would exceed a
/// few million points.
pub fn brute_force_tiny(
    instance: &NetworkInstance,
    kind: ObjectiveKind,
    step: f64,
) -> Result<OracleResult, OracleError> {
    if !(step > 0.0) {
        return Err(OracleError::Invalid("step must be positive".into()));
    }
    let horizon = instance.horizon();
    let hub_cap = instance.hub_flow_cap();
    let hub_enabled = hub_cap > 0.0;

    // Assemble the free coordinates.
    let mut dims: Vec<Dim> = Vec::new();
    for t in 1..=horizon {
        let active = instance
            .active_plants(t)
            .map_err(|e| OracleError::Invalid(e.to_string()))?;
        for (si, src) in instance.sources.iter().enumerate() {
            if !active.contains(&&src.plant) {
                continue;
            }
            for (ki, snk) in instance.sinks.iter().enumerate() {
                if snk.plant != src.plant {
                    continue;
                }
                dims.push(Dim {
                    period: t,
                    kind: DimKind::Reuse { source: si, sink: ki },
                    upper: src.flow[t - 1].min(snk.flow[t - 1]),
                });
            }
        }
        if hub_enabled {
            for (ki, snk) in instance.sinks.iter().enumerate() {
                if !active.contains(&&snk.plant) {
                    continue;
                }
                dims.push(Dim {
                    period: t,
                    kind: DimKind::Import { sink: ki },
                    upper: snk.flow[t - 1].min(hub_cap),
                });
            }
            let active_positions: Vec<usize> = instance
                .plants
                .iter()
                .enumerate()
                .filter(|(_, p)| active.contains(&p))
                .map(|(i, _)| i)
                .collect();
            for &pi in active_positions.iter().take(active_positions.len().saturating_sub(1)) {
                let src_total: f64 = instance
                    .sources_of(&instance.plants[pi])
                    .map(|s| s.flow[t - 1])
                    .sum();
                dims.push(Dim {
                    period: t,
                    kind: DimKind::Export { plant: pi },
                    upper: src_total.min(hub_cap),
                });
            }
        }
    }
    let mut points = 1f64;
    for d in &dims {
        points *= (d.upper / step).floor() + 1.0;
    }
    if dims.len() > 5 || points > 5e6 {
        return Err(OracleError::TooLarge(format!(
            "{} grid dimensions, ~{points:.0} points",
            dims.len()
        )));
    }

    let mut best: Option<OracleResult> = None;
    let mut values = vec![0.0; dims.len()];
    for reg in &instance.regenerators {
        enumerate(instance, kind, &dims, &mut values, 0, step, reg.index, &mut best);
    }
    best.ok_or_else(|| OracleError::Invalid("no feasible grid point found".into()))
}

fn enumerate(
    instance: &NetworkInstance,
    kind: ObjectiveKind,
    dims: &[Dim],
    values: &mut Vec<f64>,
    depth: usize,
    step: f64,
    regenerator: u32,
    best: &mut Option<OracleResult>,
) {
    if depth == dims.len() {
        if let Some(candidate) = evaluate_point(instance, kind, dims, values, regenerator) {
            let better = match best {
                None => true,
                Some(b) => candidate.objective < b.objective - 1e-12,
            };
            if better {
                *best = Some(candidate);
            }
        }
        return;
    }
    let upper = dims[depth].upper;
    let mut v = 0.0;
    loop {
        values[depth] = v;
        enumerate(instance, kind, dims, values, depth + 1, step, regenerator, best);
        if v >= upper {
            break;
        }
        v = (v + step).min(upper);
    }
}

/// Derive every dependent quantity at one grid point; `None` if infeasible.
fn evaluate_point(
    instance: &NetworkInstance,
    kind: ObjectiveKind,
    dims: &[Dim],
    values: &[f64],
    regenerator: u32,
) -> Option<OracleResult> {
    const TOL: f64 = 1e-9;
    let horizon = instance.horizon();
    let e = &instance.economics;
    let hub_cap = instance.hub_flow_cap();
    let hub_min = e.hub_flow_min;
    let reg = instance.regenerator(regenerator)?;
    let af = annuity_series_factor(e.interest_rate, e.economic_life);
    let flow_coef =
        e.distance_m * af * e.pipe_unit_cost * 1000.0 / (3600.0 * e.water_density * e.pipe_velocity);
    let fixed_coef = e.distance_m * af * e.pipe_fixed_cost;

    let mut weighted_objective = 0.0;
    let mut weighted_fresh = 0.0;
    // Pipe persistence: once needed, installed for the rest of the horizon.
    let mut export_pipe = vec![false; instance.plants.len()];
    let mut import_pipe = vec![false; instance.plants.len()];

    for t in 1..=horizon {
        let w = instance.scenario.period_weights[t - 1];
        let active: Vec<bool> = instance
            .plants
            .iter()
            .map(|p| instance.scenario.is_active(p, t))
            .collect();

        // Gather this period's coordinates.
        let mut reuse: BTreeMap<(usize, usize), f64> = BTreeMap::new();
        let mut import: BTreeMap<usize, f64> = BTreeMap::new();
        let mut export: BTreeMap<usize, f64> = BTreeMap::new();
        for (d, &v) in dims.iter().zip(values) {
            if d.period != t {
                continue;
            }
            match d.kind {
                DimKind::Reuse { source, sink } => {
                    reuse.insert((source, sink), v);
                }
                DimKind::Import { sink } => {
                    import.insert(sink, v);
                }
                DimKind::Export { plant } => {
                    export.insert(plant, v);
                }
            }
        }

        // Per-plant imports and the balancing export of the last plant.
        let mut plant_import = vec![0.0; instance.plants.len()];
        for (ki, snk) in instance.sinks.iter().enumerate() {
            let g = import.get(&ki).copied().unwrap_or(0.0);
            let pi = instance.plants.iter().position(|p| *p == snk.plant)?;
            plant_import[pi] += g;
        }
        let total_import: f64 = plant_import.iter().sum();
        let active_positions: Vec<usize> =
            (0..instance.plants.len()).filter(|&i| active[i]).collect();
        let mut plant_export = vec![0.0; instance.plants.len()];
        for (&pi, &v) in &export {
            plant_export[pi] = v;
        }
        if let Some(&last) = active_positions.last() {
            let assigned: f64 = export.values().sum();
            let remainder = total_import - assigned;
            if remainder < -TOL {
                return None;
            }
            let src_total: f64 = instance
                .sources_of(&instance.plants[last])
                .map(|s| s.flow[t - 1])
                .sum();
            if remainder > src_total.min(hub_cap) + TOL {
                return None;
            }
            plant_export[last] = remainder.max(0.0);
        } else if total_import > TOL {
            return None;
        }

        // Effluent per source, freshwater per sink.
        let mut effluent: Vec<f64> = Vec::with_capacity(instance.sources.len());
        for (si, src) in instance.sources.iter().enumerate() {
            if !instance.scenario.is_active(&src.plant, t) {
                effluent.push(0.0);
                continue;
            }
            let out: f64 = (0..instance.sinks.len())
                .map(|ki| reuse.get(&(si, ki)).copied().unwrap_or(0.0))
                .sum();
            let w_i = src.flow[t - 1] - out;
            if w_i < -TOL {
                return None;
            }
            effluent.push(w_i.max(0.0));
        }
        let mut fresh = vec![0.0; instance.sinks.len()];
        for (ki, snk) in instance.sinks.iter().enumerate() {
            if !instance.scenario.is_active(&snk.plant, t) {
                continue;
            }
            let reuse_in: f64 = (0..instance.sources.len())
                .map(|si| reuse.get(&(si, ki)).copied().unwrap_or(0.0))
                .sum();
            let g = import.get(&ki).copied().unwrap_or(0.0);
            let f = snk.flow[t - 1] - reuse_in - g;
            if f < -TOL {
                return None;
            }
            fresh[ki] = f.max(0.0);
        }
        // Discharge per plant.
        let mut discharge = vec![0.0; instance.plants.len()];
        for (pi, plant) in instance.plants.iter().enumerate() {
            if !active[pi] {
                continue;
            }
            let collected: f64 = instance
                .sources
                .iter()
                .enumerate()
                .filter(|(_, s)| s.plant == *plant)
                .map(|(si, _)| effluent[si])
                .sum();
            let d = collected - plant_export[pi];
            if d < -TOL {
                return None;
            }
            discharge[pi] = d.max(0.0);
        }
        // Pipe gating with persistence: a pipe is installed from its first
        // use onward, and an installed pipe must carry at least the minimum
        // flow in every later period too.
        for pi in 0..instance.plants.len() {
            if plant_export[pi] > TOL {
                export_pipe[pi] = true;
            }
            if export_pipe[pi]
                && (plant_export[pi] < hub_min - TOL || plant_export[pi] > hub_cap + TOL)
            {
                return None;
            }
            if plant_import[pi] > TOL {
                import_pipe[pi] = true;
            }
            if import_pipe[pi]
                && (plant_import[pi] < hub_min - TOL || plant_import[pi] > hub_cap + TOL)
            {
                return None;
            }
        }

        // Concentrations and hub behaviour per contaminant.
        let total_export: f64 = plant_export.iter().sum();
        let mut regen_cost = 0.0;
        let mut hub_outlet = BTreeMap::new();
        for c in &instance.contaminants {
            let mut inlet_load = 0.0;
            for (pi, plant) in instance.plants.iter().enumerate() {
                if !active[pi] || plant_export[pi] <= TOL {
                    continue;
                }
                let collected: f64 = instance
                    .sources
                    .iter()
                    .enumerate()
                    .filter(|(_, s)| s.plant == *plant)
                    .map(|(si, _)| effluent[si])
                    .sum();
                if collected <= TOL {
                    continue;
                }
                let load: f64 = instance
                    .sources
                    .iter()
                    .enumerate()
                    .filter(|(_, s)| s.plant == *plant)
                    .map(|(si, s)| effluent[si] * s.conc.get(c).map_or(0.0, |v| v[t - 1]))
                    .sum();
                inlet_load += plant_export[pi] * (load / collected);
            }
            let rr = reg.removal_ratio.get(c).copied().unwrap_or(0.0);
            let removed = rr * inlet_load;
            let outlet = if total_export > TOL { (inlet_load - removed) / total_export } else { 0.0 };
            hub_outlet.insert(c.clone(), outlet);
            regen_cost += e.annual_hours * reg.unit_cost * 1e-3 * removed;
        }
        // Sink quality.
        for (ki, snk) in instance.sinks.iter().enumerate() {
            if !instance.scenario.is_active(&snk.plant, t) {
                continue;
            }
            for c in &instance.contaminants {
                let Some(limit) = snk.max_conc.get(c).map(|v| v[t - 1]) else { continue };
                let mut load = 0.0;
                for (si, src) in instance.sources.iter().enumerate() {
                    if let Some(&r) = reuse.get(&(si, ki)) {
                        load += r * src.conc.get(c).map_or(0.0, |v| v[t - 1]);
                    }
                }
                load += fresh[ki] * e.freshwater_conc.get(c).copied().unwrap_or(0.0);
                load += import.get(&ki).copied().unwrap_or(0.0) * hub_outlet[c];
                if load > snk.flow[t - 1] * limit + 1e-6 {
                    return None;
                }
            }
        }

        // Period cost and freshwater.
        let total_fresh: f64 = fresh.iter().sum();
        let total_discharge: f64 = discharge.iter().sum();
        weighted_fresh += w * total_fresh;
        match kind {
            ObjectiveKind::Freshwater => {
                weighted_objective += w * total_fresh;
            }
            ObjectiveKind::Cost => {
                let mut investment = 0.0;
                for pi in 0..instance.plants.len() {
                    investment += flow_coef * (plant_export[pi] + plant_import[pi]);
                    if export_pipe[pi] {
                        investment += fixed_coef;
                    }
                    if import_pipe[pi] {
                        investment += fixed_coef;
                    }
                }
                let operating = e.annual_hours
                    * (e.freshwater_price * total_fresh + e.discharge_price * total_discharge)
                    + regen_cost;
                weighted_objective += w * (investment + operating);
            }
        }
    }

    Some(OracleResult {
        objective: weighted_objective,
        freshwater: weighted_fresh,
        regenerator,
    })
}

/// Column header every reference CSV must carry.
pub const REFERENCE_CSV_HEADER: &str =
    "model,freshwater_tph,wastewater_tph,removal_ratio,weighted_cost_M,fresh_cost_M,waste_cost_M,pipe_capital_M";

/// One published reference operating point.
#[derive(Debug, Clone, PartialEq)]
pub struct ReferenceRow {
    pub model: String,
    pub freshwater_tph: f64,
    pub wastewater_tph: f64,
    pub removal_ratio: f64,
    pub weighted_cost_m: f64,
    pub fresh_cost_m: f64,
    pub waste_cost_m: f64,
    pub pipe_capital_m: f64,
}

/// Parse a reference CSV (`#` comment lines allowed before the header).
pub fn parse_reference_csv(text: &str) -> Result<Vec<ReferenceRow>, String> {
    let mut lines = text
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty() && !l.starts_with('#'));
    let header = lines.next().ok_or("reference CSV is empty")?;
    if header != REFERENCE_CSV_HEADER {
        return Err(format!("unexpected header: {header}"));
    }
    let mut rows = Vec::new();
    for (i, line) in lines.enumerate() {
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 8 {
            return Err(format!("row {}: expected 8 fields, got {}", i + 1, fields.len()));
        }
        let num = |s: &str, what: &str| -> Result<f64, String> {
            s.trim()
                .parse::<f64>()
                .map_err(|e| format!("row {}: bad {what} {s:?}: {e}", i + 1))
        };
        rows.push(ReferenceRow {
            model: fields[0].trim().to_string(),
            freshwater_tph: num(fields[1], "freshwater_tph")?,
            wastewater_tph: num(fields[2], "wastewater_tph")?,
            removal_ratio: num(fields[3], "removal_ratio")?,
            weighted_cost_m: num(fields[4], "weighted_cost_M")?,
            fresh_cost_m: num(fields[5], "fresh_cost_M")?,
            waste_cost_m: num(fields[6], "waste_cost_M")?,
            pipe_capital_m: num(fields[7], "pipe_capital_M")?,
        });
    }
    Ok(rows)
}

/// Economic parameters back-derived from a published reference row.
#[derive(Debug, Clone)]
pub struct ImpliedParameters {
    pub model: String,
    /// $/tonne implied by the freshwater cost column.
    pub freshwater_price: f64,
    /// $/tonne implied by the wastewater cost column.
    pub discharge_price: f64,
    /// Annualization factor implied by the pipeline-capital column.
    pub annualization_factor: f64,
}

/// Recover unpublished economics from a reference row.
///
/// Published tables report operating costs but not the prices behind them;
/// this inverts the row so fixtures can be cross-checked: a transcription
/// slip in a flow or cost column lands the implied parameter far outside
/// its plausible band.
///
/// * prices: `cost = AWH · price · flow`, so `price = cost/(AWH·flow)`;
/// * annualization factor: the pipeline-capital column divided by the
///   reconstructed investment of a full hub topology — one export and one
///   import pipeline per plant, hub throughput taken at the published
///   freshwater flowrate (the row's only flow-scale column).
pub fn implied_parameters(
    row: &ReferenceRow,
    econ: &EconomicParams,
    plants: usize,
) -> ImpliedParameters {
    let hours = econ.annual_hours;
    let price = |cost_m: f64, flow: f64| {
        if hours * flow > 0.0 {
            cost_m * 1e6 / (hours * flow)
        } else {
            f64::NAN
        }
    };
    // Cross-section term: $ per t/h of pipe flow (p·D·area per unit flow).
    let per_flow = econ.pipe_unit_cost * econ.distance_m * 1000.0
        / (3600.0 * econ.water_density * econ.pipe_velocity);
    let fixed = econ.pipe_fixed_cost * econ.distance_m * (2 * plants) as f64;
    let investment = fixed + 2.0 * row.freshwater_tph * per_flow;
    let annualization_factor =
        if investment > 0.0 { row.pipe_capital_m * 1e6 / investment } else { f64::NAN };
    ImpliedParameters {
        model: row.model.clone(),
        freshwater_price: price(row.fresh_cost_m, row.freshwater_tph),
        discharge_price: price(row.waste_cost_m, row.wastewater_tph),
        annualization_factor,
    }
}

/// Which aspects [`compare_to_reference`] should enforce.
#[derive(Debug, Clone, Copy)]
pub struct ReferenceChecks {
    /// Final-period freshwater within the relative slack (two-sided).
    pub freshwater: bool,
    /// Weighted cost at or below reference plus slack (one-sided).
    pub cost: bool,
    /// Selected removal ratio equals the reference exactly.
    pub removal_ratio: bool,
}

/// One enforced comparison line.
#[derive(Debug, Clone)]
pub struct CheckLine {
    pub name: String,
    pub expected: f64,
    pub actual: f64,
    pub pass: bool,
    pub detail: String,
}

/// Outcome of comparing a solution against a reference row.
#[derive(Debug, Clone)]
pub struct ReferenceComparison {
    pub model: String,
    pub lines: Vec<CheckLine>,
    /// Informational only: discharge regularly differs from published
    /// wastewater columns because park-wide balances tie discharge to
    /// freshwater intake.
    pub wastewater_delta_pct: f64,
}

impl ReferenceComparison {
    pub fn pass(&self) -> bool {
        self.lines.iter().all(|l| l.pass)
    }
}

/// Compare `solution` with a published `row`.
///
/// Freshwater and the per-component flows are final-period values (the
/// park's end configuration); cost is the weighted objective in M$/yr.
pub fn compare_to_reference(
    row: &ReferenceRow,
    instance: &NetworkInstance,
    solution: &Solution,
    fresh_slack: f64,
    cost_slack: f64,
    checks: ReferenceChecks,
) -> ReferenceComparison {
    let mut lines = Vec::new();
    let last = solution.final_period();
    if checks.freshwater {
        let actual = last.total_fresh();
        let expected = row.freshwater_tph;
        let pass = (actual - expected).abs() <= fresh_slack * expected.abs();
        lines.push(CheckLine {
            name: "freshwater_tph".into(),
            expected,
            actual,
            pass,
            detail: format!("within ±{:.1}%", fresh_slack * 100.0),
        });
    }
    if checks.removal_ratio {
        let actual = instance
            .regenerator(solution.regenerator)
            .and_then(|r| instance.contaminants.first().and_then(|c| r.removal_ratio.get(c)))
            .copied()
            .unwrap_or(f64::NAN);
        let expected = row.removal_ratio;
        let pass = (actual - expected).abs() <= 1e-6;
        lines.push(CheckLine {
            name: "removal_ratio".into(),
            expected,
            actual,
            pass,
            detail: "exact match".into(),
        });
    }
    if checks.cost {
        let actual = solution.weighted_cost(&instance.scenario.period_weights) / 1e6;
        let expected = row.weighted_cost_m;
        let pass = actual <= expected * (1.0 + cost_slack);
        lines.push(CheckLine {
            name: "weighted_cost_M".into(),
            expected,
            actual,
            pass,
            detail: format!("at most reference +{:.1}% (one-sided)", cost_slack * 100.0),
        });
    }
    let wastewater_delta_pct = if row.wastewater_tph != 0.0 {
        (last.total_discharge() - row.wastewater_tph) / row.wastewater_tph * 100.0
    } else {
        0.0
    };
    ReferenceComparison { model: row.model.clone(), lines, wastewater_delta_pct }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{
        annualization_factor, ContamValue, CostBreakdown, PlantFlag, PlantId, PlantValue,
        ReuseFlow, SinkId, SinkValue, Solution, SourceId, SourceValue,
    };
    use crate::testutil::{tiny_hub_free_instance, tiny_hub_instance};
    use approx::assert_relative_eq;

    /// The optimal operating point of the hub-free tiny instance, written
    /// out by hand: reuse 5 t/h, effluent 5 t/h discharged, freshwater 5 t/h.
    fn tiny_hub_free_solution() -> Solution {
        let inst = tiny_hub_free_instance();
        let a = PlantId::from("A");
        let e = &inst.economics;
        let fresh_cost = e.annual_hours * e.freshwater_price * 5.0;
        let discharge_cost = e.annual_hours * e.discharge_price * 5.0;
        let state = crate::model::PeriodState {
            period: 1,
            reuse: vec![ReuseFlow { source: SourceId(1), sink: SinkId(1), flow: 5.0 }],
            fresh: vec![SinkValue { sink: SinkId(1), value: 5.0 }],
            effluent: vec![SourceValue { source: SourceId(1), value: 5.0 }],
            export: vec![PlantValue { plant: a.clone(), value: 0.0 }],
            discharge: vec![PlantValue { plant: a.clone(), value: 5.0 }],
            hub_import: vec![PlantValue { plant: a.clone(), value: 0.0 }],
            sink_import: vec![SinkValue { sink: SinkId(1), value: 0.0 }],
            effluent_conc: vec![crate::model::PlantConc {
                plant: a.clone(),
                contaminant: "tds".into(),
                value: 100.0,
            }],
            hub_outlet_conc: vec![ContamValue { contaminant: "tds".into(), value: 0.0 }],
            mass_removed: vec![ContamValue { contaminant: "tds".into(), value: 0.0 }],
            export_pipe: vec![PlantFlag { plant: a.clone(), on: false }],
            import_pipe: vec![PlantFlag { plant: a, on: false }],
            costs: CostBreakdown {
                investment: 0.0,
                operating: fresh_cost + discharge_cost,
                freshwater_cost: fresh_cost,
                discharge_cost,
                regeneration_cost: 0.0,
            },
        };
        Solution {
            objective: crate::model::ObjectiveKind::Cost,
            objective_value: fresh_cost + discharge_cost,
            regenerator: 1,
            periods: vec![state],
        }
    }

    #[test]
    fn correct_solution_passes_residuals() {
        let inst = tiny_hub_free_instance();
        let sol = tiny_hub_free_solution();
        let report = residuals(&inst, &sol);
        assert!(report.issues.is_empty(), "issues: {:?}", report.issues);
        assert!(report.max_scaled() <= 1e-9, "worst: {:?}", report.worst(3));
        assert!(report.pass(1e-6));
    }

    #[test]
    fn perturbed_flow_is_caught() {
        let inst = tiny_hub_free_instance();
        let mut sol = tiny_hub_free_solution();
        sol.periods[0].fresh[0].value = 5.3;
        let report = residuals(&inst, &sol);
        assert!(!report.pass(1e-6));
        let worst = report.worst(3);
        assert!(
            worst.iter().any(|e| e.label.starts_with("sink_balance")),
            "expected sink balance among worst, got {worst:?}"
        );
    }

    #[test]
    fn perturbed_cost_is_caught() {
        let inst = tiny_hub_free_instance();
        let mut sol = tiny_hub_free_solution();
        sol.periods[0].costs.freshwater_cost += 123.0;
        let report = residuals(&inst, &sol);
        assert!(!report.pass(1e-6));
        assert!(report.entries.iter().any(|e| e.label.starts_with("cost_fresh") && e.raw > 1.0));
    }

    #[test]
    fn cross_plant_reuse_is_an_issue() {
        let inst = crate::testutil::staged_two_plant_instance();
        let mut sol = tiny_hub_free_solution();
        // Source 1 belongs to plant A, sink 2 to plant B.
        sol.periods[0].reuse.push(ReuseFlow { source: SourceId(1), sink: SinkId(2), flow: 1.0 });
        let report = residuals(&inst, &sol);
        assert!(report.issues.iter().any(|i| i.contains("crosses plants")));
    }

    #[test]
    fn period_count_mismatch_is_an_issue() {
        let inst = crate::testutil::staged_two_plant_instance();
        let sol = tiny_hub_free_solution(); // one period vs horizon of two
        let report = residuals(&inst, &sol);
        assert!(report.issues.iter().any(|i| i.contains("covers 1 periods")));
    }

    #[test]
    fn unknown_regenerator_is_an_issue() {
        let inst = tiny_hub_free_instance();
        let mut sol = tiny_hub_free_solution();
        sol.regenerator = 42;
        let report = residuals(&inst, &sol);
        assert!(report.issues.iter().any(|i| i.contains("regenerator 42")));
    }

    #[test]
    fn oracle_finds_hub_free_optimum() {
        let inst = tiny_hub_free_instance();
        // Freshwater: reuse is capped by the 50 ppm limit at 5 t/h.
        let r = brute_force_tiny(&inst, ObjectiveKind::Freshwater, 0.01).unwrap();
        assert_relative_eq!(r.freshwater, 5.0, epsilon = 1e-9);
        // Cost: same point, 5 t/h bought and 5 t/h discharged.
        let r = brute_force_tiny(&inst, ObjectiveKind::Cost, 0.01).unwrap();
        assert_relative_eq!(r.objective, 8000.0 * 0.5 * 5.0 * 2.0, epsilon = 1e-6);
        assert_relative_eq!(r.freshwater, 5.0, epsilon = 1e-9);
    }

    #[test]
    fn oracle_uses_hub_when_it_wins() {
        let inst = tiny_hub_instance();
        // With a 25 ppm limit, direct reuse alone manages 2.5 t/h, but
        // sending 5 t/h through the 50%-removal hub reaches 5 t/h saved.
        let r = brute_force_tiny(&inst, ObjectiveKind::Freshwater, 0.05).unwrap();
        assert_relative_eq!(r.freshwater, 5.0, epsilon = 1e-9);

        let r = brute_force_tiny(&inst, ObjectiveKind::Cost, 0.05).unwrap();
        let e = &inst.economics;
        let af = annualization_factor(e.interest_rate, e.economic_life);
        let flow_coef = e.distance_m * af * e.pipe_unit_cost * 1000.0
            / (3600.0 * e.water_density * e.pipe_velocity);
        let fixed_coef = e.distance_m * af * e.pipe_fixed_cost;
        // Optimal point: no direct reuse, 5 t/h through the hub.
        let expected = 8000.0 * 0.5 * 5.0      // freshwater
            + 8000.0 * 0.5 * 5.0               // discharge
            + flow_coef * 10.0 + 2.0 * fixed_coef // pipes (5 out + 5 back)
            + 8000.0 * 1.0 * 1e-3 * 250.0;     // 250 g/h removed at 1 $/kg
        assert_relative_eq!(r.objective, expected, max_relative = 1e-9);
    }

    #[test]
    fn oracle_rejects_large_instances() {
        let inst = crate::testutil::staged_two_plant_instance();
        // 2 periods of arcs+imports+exports exceeds the dimension cap.
        match brute_force_tiny(&inst, ObjectiveKind::Cost, 0.5) {
            Err(OracleError::TooLarge(_)) => {}
            other => panic!("expected TooLarge, got {other:?}"),
        }
    }

    #[test]
    fn reference_csv_round_trip() {
        let text = format!(
            "# reference rows\n{REFERENCE_CSV_HEADER}\ncase,142.89,142.90,0.5,1.24,0.58,0.58,0.02\n"
        );
        let rows = parse_reference_csv(&text).unwrap();
        assert_eq!(rows.len(), 1);
        assert_eq!(rows[0].model, "case");
        assert_relative_eq!(rows[0].freshwater_tph, 142.89);
        assert_relative_eq!(rows[0].pipe_capital_m, 0.02);
        assert!(parse_reference_csv("bad,header\n1,2").is_err());
    }

    #[test]
    fn implied_parameters_recover_prices_and_annualization() {
        let econ = crate::testutil::default_economics();
        let row = ReferenceRow {
            model: "case".into(),
            freshwater_tph: 142.89,
            wastewater_tph: 142.90,
            removal_ratio: 0.5,
            weighted_cost_m: 1.24,
            fresh_cost_m: 0.58,
            waste_cost_m: 0.58,
            pipe_capital_m: 0.02,
        };
        let implied = implied_parameters(&row, &econ, 3);
        // 0.58e6 / (8000 h · 142.89 t/h)
        assert_relative_eq!(implied.freshwater_price, 0.50738, epsilon = 1e-4);
        assert_relative_eq!(implied.discharge_price, 0.50735, epsilon = 1e-4);
        // 0.02e6 / (6 pipes · 250·100 $ + 2·142.89 t/h · 200 $/(t/h))
        assert_relative_eq!(implied.annualization_factor, 0.09654, epsilon = 1e-4);
        // The recovered factor agrees with the annuity at the shipped terms.
        let annuity = annualization_factor(econ.interest_rate, econ.economic_life);
        assert!((implied.annualization_factor - annuity).abs() < 0.005);
    }

    #[test]
    fn reference_comparison_enforces_requested_checks() {
        let inst = tiny_hub_free_instance();
        let sol = tiny_hub_free_solution();
        let row = ReferenceRow {
            model: "tiny".into(),
            freshwater_tph: 5.0,
            wastewater_tph: 4.0,
            removal_ratio: 0.5,
            weighted_cost_m: 0.04,
            fresh_cost_m: 0.02,
            waste_cost_m: 0.02,
            pipe_capital_m: 0.0,
        };
        let all = ReferenceChecks { freshwater: true, cost: true, removal_ratio: true };
        let cmp = compare_to_reference(&row, &inst, &sol, 0.02, 0.05, all);
        assert!(cmp.pass(), "{:#?}", cmp.lines);
        // Wastewater differs by +25% but is informational only.
        assert_relative_eq!(cmp.wastewater_delta_pct, 25.0, epsilon = 1e-9);

        let strict = ReferenceRow { freshwater_tph: 4.0, ..row.clone() };
        let cmp = compare_to_reference(&strict, &inst, &sol, 0.02, 0.05, all);
        assert!(!cmp.pass());
        // Disable the failing check and it passes again.
        let cmp = compare_to_reference(
            &strict,
            &inst,
            &sol,
            0.02,
            0.05,
            ReferenceChecks { freshwater: false, cost: true, removal_ratio: true },
        );
        assert!(cmp.pass());
    }

    #[test]
    fn annuity_series_matches_closed_form() {
        for &(u, n) in &[(0.05, 15u32), (0.1, 10), (0.0, 8), (0.3, 1)] {
            assert_relative_eq!(
                annuity_series_factor(u, n),
                annualization_factor(u, n),
                max_relative = 1e-12
            );
        }
    }
}
