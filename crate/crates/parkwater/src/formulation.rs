//! Translation of a [`NetworkInstance`] into an explicit optimization
//! program.
//!
//! The program is a mixed-integer bilinear model: all constraints are linear
//! except for flow-times-concentration products, which are kept symbolic as
//! [`BilinearTerm`]s so the solver can build convex envelopes around them.
//! Terms that are additionally switched by a regenerator-choice binary are
//! kept as *gated* terms; [`Program::fold_regenerator`] collapses them once
//! a choice is fixed.
//!
//! Variable and constraint order is fully deterministic: periods outermost,
//! then role groups, then instance order. Variables belonging to plants that
//! have not yet entered the park in a period are still created but pinned to
//! `[0, 0]`, which keeps indexing uniform across periods.
//!
//! Units follow the model layer: flows t/h, concentrations ppm (g/t),
//! contaminant mass g/h, costs $/yr.

use std::collections::BTreeMap;
use std::fmt;

use crate::lp::RowSense;
use crate::model::{
    annualization_factor, CostBreakdown, ModelError, NetworkInstance, ObjectiveKind, PeriodState,
    PlantId, SinkId, SourceId,
};

/// What a decision variable measures.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum VarRole {
    /// Direct reuse from a source to a sink of the same plant (t/h).
    Reuse { source: SourceId, sink: SinkId },
    /// Freshwater supplied to a sink (t/h).
    Fresh { sink: SinkId },
    /// Source flow sent to the plant's effluent collector (t/h).
    SourceOutlet { source: SourceId },
    /// Plant effluent exported to the regeneration hub (t/h).
    Export { plant: PlantId },
    /// Plant effluent discharged to the environment (t/h).
    Discharge { plant: PlantId },
    /// Regenerated water imported by a plant from the hub (t/h).
    ImportTotal { plant: PlantId },
    /// Regenerated water routed to one sink (t/h).
    SinkImport { sink: SinkId },
    /// Concentration of a plant's collected effluent (ppm).
    ExportConc { plant: PlantId, contaminant: String },
    /// Concentration of the hub outlet after regeneration (ppm).
    HubOutletConc { contaminant: String },
    /// Contaminant mass removed in the hub (g/h).
    MassRemoved { contaminant: String },
    /// Export pipeline installed for a plant (binary).
    ExportPipe { plant: PlantId },
    /// Import pipeline installed for a plant (binary).
    ImportPipe { plant: PlantId },
    /// Regenerator option selected in the hub (binary).
    RegenChoice { option: u32 },
}

/// One decision variable of the program.
#[derive(Debug, Clone, PartialEq)]
pub struct VariableInfo {
    pub id: usize,
    pub role: VarRole,
    /// Planning period, 1-based.
    pub period: usize,
    pub lower: f64,
    pub upper: f64,
    /// Restricted to integer values (here: always 0/1).
    pub integral: bool,
}

/// Sparse linear expression `Σ coeff · x`.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct LinearExpr {
    /// `(variable, coefficient)`, sorted by variable after canonicalization.
    pub terms: Vec<(usize, f64)>,
}

impl LinearExpr {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, var: usize, coeff: f64) {
        self.terms.push((var, coeff));
    }

    /// Sort by variable, merge duplicates, drop exact zeros.
    pub fn canonicalize(&mut self) {
        self.terms.sort_by_key(|&(v, _)| v);
        let mut merged: Vec<(usize, f64)> = Vec::with_capacity(self.terms.len());
        for &(v, c) in &self.terms {
            match merged.last_mut() {
                Some((lv, lc)) if *lv == v => *lc += c,
                _ => merged.push((v, c)),
            }
        }
        merged.retain(|&(_, c)| c != 0.0);
        self.terms = merged;
    }

    pub fn coeff(&self, var: usize) -> f64 {
        self.terms
            .iter()
            .find(|&&(v, _)| v == var)
            .map_or(0.0, |&(_, c)| c)
    }

    /// Evaluate against a full assignment.
    pub fn value(&self, x: &[f64]) -> f64 {
        self.terms.iter().map(|&(v, c)| c * x[v]).sum()
    }
}

/// `coefficient · x_flow · x_conc` — the only nonlinearity in the model.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BilinearTerm {
    pub coefficient: f64,
    pub flow: usize,
    pub conc: usize,
}

/// A bilinear term that only applies while `gate` (a binary variable) is 1.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GatedBilinear {
    pub gate: usize,
    pub term: BilinearTerm,
}

/// A linear objective contribution that only applies while `gate` is 1.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GatedLinear {
    pub gate: usize,
    pub var: usize,
    pub coeff: f64,
}

/// Which model rule produced a constraint. Carries enough detail to report
/// residuals precisely.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ConstraintTag {
    /// Source flow splits into same-plant reuse plus collected effluent.
    SourceBalance { source: SourceId, period: usize },
    /// Sink demand is met by reuse, freshwater and hub imports.
    SinkBalance { sink: SinkId, period: usize },
    /// Contaminant load into a sink stays below its acceptance limit.
    SinkQuality { sink: SinkId, contaminant: String, period: usize },
    /// Hub water imported by a plant equals what its sinks receive.
    PlantImportBalance { plant: PlantId, period: usize },
    /// Collected effluent splits into hub export and discharge.
    PlantEffluentSplit { plant: PlantId, period: usize },
    /// Import below pipeline capacity unless the pipe is installed.
    ImportPipeUpper { plant: PlantId, period: usize },
    /// Installed import pipes carry at least the minimum flow.
    ImportPipeLower { plant: PlantId, period: usize },
    /// Export below pipeline capacity unless the pipe is installed.
    ExportPipeUpper { plant: PlantId, period: usize },
    /// Installed export pipes carry at least the minimum flow.
    ExportPipeLower { plant: PlantId, period: usize },
    /// Mixing rule defining the collected-effluent concentration.
    EffluentQuality { plant: PlantId, contaminant: String, period: usize },
    /// Hub water in equals hub water out.
    HubFlowBalance { period: usize },
    /// Hub contaminant in equals contaminant out plus removed mass.
    HubMassBalance { contaminant: String, period: usize },
    /// Removed mass equals the selected regenerator's removal ratio times
    /// the inlet load.
    RemovalDefinition { contaminant: String, period: usize },
    /// Exactly one regenerator option is selected.
    RegenSingle { period: usize },
    /// A selected regenerator stays selected in later periods.
    RegenPersist { option: u32, period: usize },
    /// An installed export pipe stays installed.
    ExportPipePersist { plant: PlantId, period: usize },
    /// An installed import pipe stays installed.
    ImportPipePersist { plant: PlantId, period: usize },
}

impl ConstraintTag {
    /// Short machine-friendly label of the rule family.
    pub fn kind(&self) -> &'static str {
        match self {
            ConstraintTag::SourceBalance { .. } => "source_balance",
            ConstraintTag::SinkBalance { .. } => "sink_balance",
            ConstraintTag::SinkQuality { .. } => "sink_quality",
            ConstraintTag::PlantImportBalance { .. } => "plant_import_balance",
            ConstraintTag::PlantEffluentSplit { .. } => "plant_effluent_split",
            ConstraintTag::ImportPipeUpper { .. } => "import_pipe_upper",
            ConstraintTag::ImportPipeLower { .. } => "import_pipe_lower",
            ConstraintTag::ExportPipeUpper { .. } => "export_pipe_upper",
            ConstraintTag::ExportPipeLower { .. } => "export_pipe_lower",
            ConstraintTag::EffluentQuality { .. } => "effluent_quality",
            ConstraintTag::HubFlowBalance { .. } => "hub_flow_balance",
            ConstraintTag::HubMassBalance { .. } => "hub_mass_balance",
            ConstraintTag::RemovalDefinition { .. } => "removal_definition",
            ConstraintTag::RegenSingle { .. } => "regen_single",
            ConstraintTag::RegenPersist { .. } => "regen_persist",
            ConstraintTag::ExportPipePersist { .. } => "export_pipe_persist",
            ConstraintTag::ImportPipePersist { .. } => "import_pipe_persist",
        }
    }

    /// The planning period the constraint belongs to.
    pub fn period(&self) -> usize {
        match self {
            ConstraintTag::SourceBalance { period, .. }
            | ConstraintTag::SinkBalance { period, .. }
            | ConstraintTag::SinkQuality { period, .. }
            | ConstraintTag::PlantImportBalance { period, .. }
            | ConstraintTag::PlantEffluentSplit { period, .. }
            | ConstraintTag::ImportPipeUpper { period, .. }
            | ConstraintTag::ImportPipeLower { period, .. }
            | ConstraintTag::ExportPipeUpper { period, .. }
            | ConstraintTag::ExportPipeLower { period, .. }
            | ConstraintTag::EffluentQuality { period, .. }
            | ConstraintTag::HubFlowBalance { period }
            | ConstraintTag::HubMassBalance { period, .. }
            | ConstraintTag::RemovalDefinition { period, .. }
            | ConstraintTag::RegenSingle { period }
            | ConstraintTag::RegenPersist { period, .. }
            | ConstraintTag::ExportPipePersist { period, .. }
            | ConstraintTag::ImportPipePersist { period, .. } => *period,
        }
    }
}

impl fmt::Display for ConstraintTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let t = self.period();
        match self {
            ConstraintTag::SourceBalance { source, .. } => {
                write!(f, "source_balance(src {}, t{t})", source.0)
            }
            ConstraintTag::SinkBalance { sink, .. } => {
                write!(f, "sink_balance(snk {}, t{t})", sink.0)
            }
            ConstraintTag::SinkQuality { sink, contaminant, .. } => {
                write!(f, "sink_quality(snk {}, {contaminant}, t{t})", sink.0)
            }
            ConstraintTag::PlantImportBalance { plant, .. } => {
                write!(f, "plant_import_balance({plant}, t{t})")
            }
            ConstraintTag::PlantEffluentSplit { plant, .. } => {
                write!(f, "plant_effluent_split({plant}, t{t})")
            }
            ConstraintTag::ImportPipeUpper { plant, .. } => {
                write!(f, "import_pipe_upper({plant}, t{t})")
            }
            ConstraintTag::ImportPipeLower { plant, .. } => {
                write!(f, "import_pipe_lower({plant}, t{t})")
            }
            ConstraintTag::ExportPipeUpper { plant, .. } => {
                write!(f, "export_pipe_upper({plant}, t{t})")
            }
            ConstraintTag::ExportPipeLower { plant, .. } => {
                write!(f, "export_pipe_lower({plant}, t{t})")
            }
            ConstraintTag::EffluentQuality { plant, contaminant, .. } => {
                write!(f, "effluent_quality({plant}, {contaminant}, t{t})")
            }
            ConstraintTag::HubFlowBalance { .. } => write!(f, "hub_flow_balance(t{t})"),
            ConstraintTag::HubMassBalance { contaminant, .. } => {
                write!(f, "hub_mass_balance({contaminant}, t{t})")
            }
            ConstraintTag::RemovalDefinition { contaminant, .. } => {
                write!(f, "removal_definition({contaminant}, t{t})")
            }
            ConstraintTag::RegenSingle { .. } => write!(f, "regen_single(t{t})"),
            ConstraintTag::RegenPersist { option, .. } => {
                write!(f, "regen_persist(option {option}, t{t})")
            }
            ConstraintTag::ExportPipePersist { plant, .. } => {
                write!(f, "export_pipe_persist({plant}, t{t})")
            }
            ConstraintTag::ImportPipePersist { plant, .. } => {
                write!(f, "import_pipe_persist({plant}, t{t})")
            }
        }
    }
}

/// One constraint: `linear + Σ bilinear + Σ gated_bilinear  sense  rhs`.
#[derive(Debug, Clone, PartialEq)]
pub struct Constraint {
    pub linear: LinearExpr,
    pub bilinear: Vec<BilinearTerm>,
    pub gated_bilinear: Vec<GatedBilinear>,
    pub sense: RowSense,
    pub rhs: f64,
    pub tag: ConstraintTag,
}

/// Objective: `linear + Σ bilinear + Σ gated_linear`, always minimized.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Objective {
    pub linear: LinearExpr,
    pub bilinear: Vec<BilinearTerm>,
    pub gated_linear: Vec<GatedLinear>,
}

/// Effective size of a program (pinned `[0,0]` placeholders excluded).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ModelSize {
    pub continuous: usize,
    pub binary: usize,
    pub constraints: usize,
}

impl fmt::Display for ModelSize {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{} continuous / {} binary / {} constraints",
            self.continuous, self.binary, self.constraints
        )
    }
}

/// Deterministic variable lookup tables. Plants and contaminants are keyed
/// by their position in the instance, sources/sinks by their numeric id.
#[derive(Debug, Clone, Default, PartialEq)]
struct Lookup {
    reuse: BTreeMap<(usize, u32, u32), usize>,
    fresh: BTreeMap<(usize, u32), usize>,
    source_outlet: BTreeMap<(usize, u32), usize>,
    export: BTreeMap<(usize, usize), usize>,
    discharge: BTreeMap<(usize, usize), usize>,
    import_total: BTreeMap<(usize, usize), usize>,
    sink_import: BTreeMap<(usize, u32), usize>,
    export_conc: BTreeMap<(usize, usize, usize), usize>,
    hub_outlet_conc: BTreeMap<(usize, usize), usize>,
    mass_removed: BTreeMap<(usize, usize), usize>,
    export_pipe: BTreeMap<(usize, usize), usize>,
    import_pipe: BTreeMap<(usize, usize), usize>,
    regen_choice: BTreeMap<(usize, u32), usize>,
    plant_pos: BTreeMap<PlantId, usize>,
    contaminant_pos: BTreeMap<String, usize>,
}

/// The assembled optimization program.
#[derive(Debug, Clone, PartialEq)]
pub struct Program {
    pub variables: Vec<VariableInfo>,
    pub constraints: Vec<Constraint>,
    pub objective: Objective,
    pub objective_kind: ObjectiveKind,
    /// Number of planning periods.
    pub periods: usize,
    lookup: Lookup,
}

impl Program {
    pub fn num_vars(&self) -> usize {
        self.variables.len()
    }

    fn plant_pos(&self, plant: &PlantId) -> Option<usize> {
        self.lookup.plant_pos.get(plant).copied()
    }

    fn contaminant_pos(&self, contaminant: &str) -> Option<usize> {
        self.lookup.contaminant_pos.get(contaminant).copied()
    }

    pub fn reuse_var(&self, t: usize, source: SourceId, sink: SinkId) -> Option<usize> {
        self.lookup.reuse.get(&(t, source.0, sink.0)).copied()
    }

    pub fn fresh_var(&self, t: usize, sink: SinkId) -> Option<usize> {
        self.lookup.fresh.get(&(t, sink.0)).copied()
    }

    pub fn source_outlet_var(&self, t: usize, source: SourceId) -> Option<usize> {
        self.lookup.source_outlet.get(&(t, source.0)).copied()
    }

    pub fn export_var(&self, t: usize, plant: &PlantId) -> Option<usize> {
        self.lookup.export.get(&(t, self.plant_pos(plant)?)).copied()
    }

    pub fn discharge_var(&self, t: usize, plant: &PlantId) -> Option<usize> {
        self.lookup.discharge.get(&(t, self.plant_pos(plant)?)).copied()
    }

    pub fn import_total_var(&self, t: usize, plant: &PlantId) -> Option<usize> {
        self.lookup.import_total.get(&(t, self.plant_pos(plant)?)).copied()
    }

    pub fn sink_import_var(&self, t: usize, sink: SinkId) -> Option<usize> {
        self.lookup.sink_import.get(&(t, sink.0)).copied()
    }

    pub fn export_conc_var(&self, t: usize, plant: &PlantId, contaminant: &str) -> Option<usize> {
        let key = (t, self.plant_pos(plant)?, self.contaminant_pos(contaminant)?);
        self.lookup.export_conc.get(&key).copied()
    }

    pub fn hub_outlet_conc_var(&self, t: usize, contaminant: &str) -> Option<usize> {
        let key = (t, self.contaminant_pos(contaminant)?);
        self.lookup.hub_outlet_conc.get(&key).copied()
    }

    pub fn mass_removed_var(&self, t: usize, contaminant: &str) -> Option<usize> {
        let key = (t, self.contaminant_pos(contaminant)?);
        self.lookup.mass_removed.get(&key).copied()
    }

    pub fn export_pipe_var(&self, t: usize, plant: &PlantId) -> Option<usize> {
        self.lookup.export_pipe.get(&(t, self.plant_pos(plant)?)).copied()
    }

    pub fn import_pipe_var(&self, t: usize, plant: &PlantId) -> Option<usize> {
        self.lookup.import_pipe.get(&(t, self.plant_pos(plant)?)).copied()
    }

    pub fn regen_choice_var(&self, t: usize, option: u32) -> Option<usize> {
        self.lookup.regen_choice.get(&(t, option)).copied()
    }

    /// Effective model size: variables whose box is not pinned to a point,
    /// split continuous/binary, plus the emitted constraint count.
    pub fn model_size(&self) -> ModelSize {
        let mut continuous = 0;
        let mut binary = 0;
        for v in &self.variables {
            if v.upper > v.lower {
                if v.integral {
                    binary += 1;
                } else {
                    continuous += 1;
                }
            }
        }
        ModelSize { continuous, binary, constraints: self.constraints.len() }
    }

    /// Fix the hub regenerator to `option` for the whole horizon: pins every
    /// regenerator-choice binary and folds gated terms into plain ones.
    /// Terms gated by the chosen option become ordinary bilinear/linear
    /// terms; all other gated terms are dropped. The returned program
    /// contains no gated terms.
    pub fn fold_regenerator(&self, option: u32) -> Program {
        let mut folded = self.clone();
        for v in &mut folded.variables {
            if let VarRole::RegenChoice { option: s } = v.role {
                let on = s == option;
                v.lower = if on { 1.0 } else { 0.0 };
                v.upper = v.lower;
            }
        }
        let chosen: Vec<bool> = self
            .variables
            .iter()
            .map(|v| matches!(v.role, VarRole::RegenChoice { option: s } if s == option))
            .collect();
        for c in &mut folded.constraints {
            for g in std::mem::take(&mut c.gated_bilinear) {
                if chosen[g.gate] {
                    c.bilinear.push(g.term);
                }
            }
        }
        for g in std::mem::take(&mut folded.objective.gated_linear) {
            if chosen[g.gate] {
                folded.objective.linear.add(g.var, g.coeff);
            }
        }
        folded.objective.linear.canonicalize();
        folded
    }

    /// Distinct `(flow, conc)` product pairs across all constraints and the
    /// objective (gated terms included), in first-appearance order.
    pub fn bilinear_products(&self) -> Vec<(usize, usize)> {
        let mut seen = BTreeMap::new();
        let mut out = Vec::new();
        let mut visit = |t: &BilinearTerm, out: &mut Vec<(usize, usize)>| {
            let key = (t.flow, t.conc);
            if seen.insert(key, ()).is_none() {
                out.push(key);
            }
        };
        for c in &self.constraints {
            for t in &c.bilinear {
                visit(t, &mut out);
            }
            for g in &c.gated_bilinear {
                visit(&g.term, &mut out);
            }
        }
        for t in &self.objective.bilinear {
            visit(t, &mut out);
        }
        out
    }
}

struct Builder<'a> {
    instance: &'a NetworkInstance,
    variables: Vec<VariableInfo>,
    constraints: Vec<Constraint>,
    lookup: Lookup,
    /// Plants active per period, as positions into `instance.plants`.
    active: Vec<Vec<bool>>,
}

impl<'a> Builder<'a> {
    fn new(instance: &'a NetworkInstance) -> Result<Self, ModelError> {
        let horizon = instance.horizon();
        let mut active = Vec::with_capacity(horizon);
        for t in 1..=horizon {
            let set = instance.active_plants(t)?;
            active.push(
                instance
                    .plants
                    .iter()
                    .map(|p| set.contains(&p))
                    .collect::<Vec<bool>>(),
            );
        }
        let mut lookup = Lookup::default();
        for (pos, p) in instance.plants.iter().enumerate() {
            lookup.plant_pos.insert(p.clone(), pos);
        }
        for (pos, c) in instance.contaminants.iter().enumerate() {
            lookup.contaminant_pos.insert(c.clone(), pos);
        }
        Ok(Builder {
            instance,
            variables: Vec::new(),
            constraints: Vec::new(),
            lookup,
            active,
        })
    }

    fn is_active(&self, plant_pos: usize, t: usize) -> bool {
        self.active[t - 1][plant_pos]
    }

    fn push_var(&mut self, role: VarRole, period: usize, lower: f64, upper: f64, integral: bool) -> usize {
        let id = self.variables.len();
        self.variables.push(VariableInfo { id, role, period, lower, upper, integral });
        id
    }

    /// Create every variable of period `t`, in fixed role order.
    fn add_period_variables(&mut self, t: usize) {
        let inst = self.instance;
        let hub_cap = inst.hub_flow_cap();

        // Same-plant reuse arcs.
        for (ppos, plant) in inst.plants.iter().enumerate() {
            let on = self.is_active(ppos, t);
            for src in inst.sources_of(plant) {
                for snk in inst.sinks_of(plant) {
                    let ub = if on { src.flow[t - 1].min(snk.flow[t - 1]) } else { 0.0 };
                    let id = self.push_var(
                        VarRole::Reuse { source: src.id, sink: snk.id },
                        t,
                        0.0,
                        ub,
                        false,
                    );
                    self.lookup.reuse.insert((t, src.id.0, snk.id.0), id);
                }
            }
        }
        // Freshwater to sinks.
        for (ppos, plant) in inst.plants.iter().enumerate() {
            let on = self.is_active(ppos, t);
            for snk in inst.sinks_of(plant) {
                let ub = if on { snk.flow[t - 1] } else { 0.0 };
                let id = self.push_var(VarRole::Fresh { sink: snk.id }, t, 0.0, ub, false);
                self.lookup.fresh.insert((t, snk.id.0), id);
            }
        }
        // Source flow to the plant effluent collector.
        for (ppos, plant) in inst.plants.iter().enumerate() {
            let on = self.is_active(ppos, t);
            for src in inst.sources_of(plant) {
                let ub = if on { src.flow[t - 1] } else { 0.0 };
                let id = self.push_var(VarRole::SourceOutlet { source: src.id }, t, 0.0, ub, false);
                self.lookup.source_outlet.insert((t, src.id.0), id);
            }
        }
        // Plant-level hub flows.
        for (ppos, plant) in inst.plants.iter().enumerate() {
            let on = self.is_active(ppos, t);
            let src_total: f64 = inst.sources_of(plant).map(|s| s.flow[t - 1]).sum();
            let snk_total: f64 = inst.sinks_of(plant).map(|s| s.flow[t - 1]).sum();
            let exp_ub = if on { src_total.min(hub_cap) } else { 0.0 };
            let id = self.push_var(VarRole::Export { plant: plant.clone() }, t, 0.0, exp_ub, false);
            self.lookup.export.insert((t, ppos), id);
            let dis_ub = if on { src_total } else { 0.0 };
            let id = self.push_var(VarRole::Discharge { plant: plant.clone() }, t, 0.0, dis_ub, false);
            self.lookup.discharge.insert((t, ppos), id);
            let imp_ub = if on { snk_total.min(hub_cap) } else { 0.0 };
            let id =
                self.push_var(VarRole::ImportTotal { plant: plant.clone() }, t, 0.0, imp_ub, false);
            self.lookup.import_total.insert((t, ppos), id);
        }
        // Hub water routed to individual sinks.
        for (ppos, plant) in inst.plants.iter().enumerate() {
            let on = self.is_active(ppos, t);
            for snk in inst.sinks_of(plant) {
                let ub = if on { snk.flow[t - 1].min(hub_cap) } else { 0.0 };
                let id = self.push_var(VarRole::SinkImport { sink: snk.id }, t, 0.0, ub, false);
                self.lookup.sink_import.insert((t, snk.id.0), id);
            }
        }
        // Collected-effluent concentrations per plant and contaminant. The
        // effluent is a mix of the plant's own sources, so its concentration
        // lives inside their convex hull; when no effluent flows the defining
        // row degenerates to 0 = 0 and the bounds cut nothing real.
        for (ppos, plant) in inst.plants.iter().enumerate() {
            let on = self.is_active(ppos, t);
            for (cpos, c) in inst.contaminants.iter().enumerate() {
                let concs: Vec<f64> = inst
                    .sources_of(plant)
                    .map(|s| s.conc.get(c).map_or(0.0, |v| v[t - 1]))
                    .collect();
                let max_c = concs.iter().copied().fold(0.0, f64::max);
                let min_c = concs.iter().copied().fold(f64::INFINITY, f64::min).min(max_c);
                let (lb, ub) = if on { (min_c, max_c) } else { (0.0, 0.0) };
                let id = self.push_var(
                    VarRole::ExportConc { plant: plant.clone(), contaminant: c.clone() },
                    t,
                    lb,
                    ub,
                    false,
                );
                self.lookup.export_conc.insert((t, ppos, cpos), id);
            }
        }
        // Hub outlet concentration per contaminant.
        for (cpos, c) in inst.contaminants.iter().enumerate() {
            let ub = inst.max_source_conc(c, t);
            let id = self.push_var(VarRole::HubOutletConc { contaminant: c.clone() }, t, 0.0, ub, false);
            self.lookup.hub_outlet_conc.insert((t, cpos), id);
        }
        // Mass removed in the hub per contaminant (g/h).
        for (cpos, c) in inst.contaminants.iter().enumerate() {
            let load: f64 = inst
                .sources
                .iter()
                .filter(|s| inst.scenario.is_active(&s.plant, t))
                .map(|s| s.flow[t - 1] * s.conc.get(c).map_or(0.0, |v| v[t - 1]))
                .sum();
            let id = self.push_var(VarRole::MassRemoved { contaminant: c.clone() }, t, 0.0, load, false);
            self.lookup.mass_removed.insert((t, cpos), id);
        }
        // Pipe-installation binaries.
        for (ppos, plant) in inst.plants.iter().enumerate() {
            let on = self.is_active(ppos, t);
            let ub = if on { 1.0 } else { 0.0 };
            let id = self.push_var(VarRole::ExportPipe { plant: plant.clone() }, t, 0.0, ub, true);
            self.lookup.export_pipe.insert((t, ppos), id);
        }
        for (ppos, plant) in inst.plants.iter().enumerate() {
            let on = self.is_active(ppos, t);
            let ub = if on { 1.0 } else { 0.0 };
            let id = self.push_var(VarRole::ImportPipe { plant: plant.clone() }, t, 0.0, ub, true);
            self.lookup.import_pipe.insert((t, ppos), id);
        }
        // Regenerator-choice binaries.
        for r in &inst.regenerators {
            let id = self.push_var(VarRole::RegenChoice { option: r.index }, t, 0.0, 1.0, true);
            self.lookup.regen_choice.insert((t, r.index), id);
        }
    }

    fn push_row(
        &mut self,
        mut linear: LinearExpr,
        bilinear: Vec<BilinearTerm>,
        gated_bilinear: Vec<GatedBilinear>,
        sense: RowSense,
        rhs: f64,
        tag: ConstraintTag,
    ) {
        linear.canonicalize();
        self.constraints.push(Constraint { linear, bilinear, gated_bilinear, sense, rhs, tag });
    }

    /// Emit every constraint of period `t` over the plants active in it.
    fn add_period_constraints(&mut self, t: usize) {
        let inst = self.instance;
        let hub_cap = inst.hub_flow_cap();
        let hub_min = inst.economics.hub_flow_min;
        let active_plants: Vec<(usize, PlantId)> = inst
            .plants
            .iter()
            .enumerate()
            .filter(|(ppos, _)| self.is_active(*ppos, t))
            .map(|(ppos, p)| (ppos, p.clone()))
            .collect();

        // Source balances: reuse out plus collected effluent equals supply.
        for (_, plant) in &active_plants {
            let sources: Vec<_> = inst.sources_of(plant).cloned().collect();
            let sinks: Vec<_> = inst.sinks_of(plant).cloned().collect();
            for src in &sources {
                let mut lin = LinearExpr::new();
                for snk in &sinks {
                    lin.add(self.lookup.reuse[&(t, src.id.0, snk.id.0)], 1.0);
                }
                lin.add(self.lookup.source_outlet[&(t, src.id.0)], 1.0);
                self.push_row(
                    lin,
                    vec![],
                    vec![],
                    RowSense::Eq,
                    src.flow[t - 1],
                    ConstraintTag::SourceBalance { source: src.id, period: t },
                );
            }
        }
        // Sink balances: reuse in plus freshwater plus hub import equals demand.
        for (_, plant) in &active_plants {
            let sources: Vec<_> = inst.sources_of(plant).cloned().collect();
            let sinks: Vec<_> = inst.sinks_of(plant).cloned().collect();
            for snk in &sinks {
                let mut lin = LinearExpr::new();
                for src in &sources {
                    lin.add(self.lookup.reuse[&(t, src.id.0, snk.id.0)], 1.0);
                }
                lin.add(self.lookup.fresh[&(t, snk.id.0)], 1.0);
                lin.add(self.lookup.sink_import[&(t, snk.id.0)], 1.0);
                self.push_row(
                    lin,
                    vec![],
                    vec![],
                    RowSense::Eq,
                    snk.flow[t - 1],
                    ConstraintTag::SinkBalance { sink: snk.id, period: t },
                );
            }
        }
        // Sink quality limits (skipped for contaminants a sink does not cap).
        for (_, plant) in &active_plants {
            let sources: Vec<_> = inst.sources_of(plant).cloned().collect();
            let sinks: Vec<_> = inst.sinks_of(plant).cloned().collect();
            for snk in &sinks {
                for (cpos, c) in inst.contaminants.iter().enumerate() {
                    let Some(limit) = snk.max_conc.get(c).map(|v| v[t - 1]) else {
                        continue;
                    };
                    let mut lin = LinearExpr::new();
                    for src in &sources {
                        let conc = src.conc.get(c).map_or(0.0, |v| v[t - 1]);
                        lin.add(self.lookup.reuse[&(t, src.id.0, snk.id.0)], conc);
                    }
                    let fresh_conc = inst.economics.freshwater_conc.get(c).copied().unwrap_or(0.0);
                    lin.add(self.lookup.fresh[&(t, snk.id.0)], fresh_conc);
                    let bil = vec![BilinearTerm {
                        coefficient: 1.0,
                        flow: self.lookup.sink_import[&(t, snk.id.0)],
                        conc: self.lookup.hub_outlet_conc[&(t, cpos)],
                    }];
                    self.push_row(
                        lin,
                        bil,
                        vec![],
                        RowSense::Le,
                        snk.flow[t - 1] * limit,
                        ConstraintTag::SinkQuality {
                            sink: snk.id,
                            contaminant: c.clone(),
                            period: t,
                        },
                    );
                }
            }
        }
        // Plant import balances: hub water equals what the plant's sinks take.
        for (ppos, plant) in &active_plants {
            let mut lin = LinearExpr::new();
            for snk in inst.sinks_of(plant) {
                lin.add(self.lookup.sink_import[&(t, snk.id.0)], 1.0);
            }
            lin.add(self.lookup.import_total[&(t, *ppos)], -1.0);
            self.push_row(
                lin,
                vec![],
                vec![],
                RowSense::Eq,
                0.0,
                ConstraintTag::PlantImportBalance { plant: plant.clone(), period: t },
            );
        }
        // Effluent splits: collected effluent goes to the hub or discharge.
        for (ppos, plant) in &active_plants {
            let mut lin = LinearExpr::new();
            for src in inst.sources_of(plant) {
                lin.add(self.lookup.source_outlet[&(t, src.id.0)], 1.0);
            }
            lin.add(self.lookup.export[&(t, *ppos)], -1.0);
            lin.add(self.lookup.discharge[&(t, *ppos)], -1.0);
            self.push_row(
                lin,
                vec![],
                vec![],
                RowSense::Eq,
                0.0,
                ConstraintTag::PlantEffluentSplit { plant: plant.clone(), period: t },
            );
        }
        // Pipe capacity gating.
        for (ppos, plant) in &active_plants {
            let g = self.lookup.import_total[&(t, *ppos)];
            let l = self.lookup.import_pipe[&(t, *ppos)];
            let mut up = LinearExpr::new();
            up.add(g, 1.0);
            up.add(l, -hub_cap);
            self.push_row(
                up,
                vec![],
                vec![],
                RowSense::Le,
                0.0,
                ConstraintTag::ImportPipeUpper { plant: plant.clone(), period: t },
            );
            let mut lo = LinearExpr::new();
            lo.add(g, 1.0);
            lo.add(l, -hub_min);
            self.push_row(
                lo,
                vec![],
                vec![],
                RowSense::Ge,
                0.0,
                ConstraintTag::ImportPipeLower { plant: plant.clone(), period: t },
            );
        }
        for (ppos, plant) in &active_plants {
            let f = self.lookup.export[&(t, *ppos)];
            let y = self.lookup.export_pipe[&(t, *ppos)];
            let mut up = LinearExpr::new();
            up.add(f, 1.0);
            up.add(y, -hub_cap);
            self.push_row(
                up,
                vec![],
                vec![],
                RowSense::Le,
                0.0,
                ConstraintTag::ExportPipeUpper { plant: plant.clone(), period: t },
            );
            let mut lo = LinearExpr::new();
            lo.add(f, 1.0);
            lo.add(y, -hub_min);
            self.push_row(
                lo,
                vec![],
                vec![],
                RowSense::Ge,
                0.0,
                ConstraintTag::ExportPipeLower { plant: plant.clone(), period: t },
            );
        }
        // Effluent mixing: load collected equals outgoing flow times its
        // concentration.
        for (ppos, plant) in &active_plants {
            for (cpos, c) in inst.contaminants.iter().enumerate() {
                let mut lin = LinearExpr::new();
                for src in inst.sources_of(plant) {
                    let conc = src.conc.get(c).map_or(0.0, |v| v[t - 1]);
                    lin.add(self.lookup.source_outlet[&(t, src.id.0)], conc);
                }
                let conc_var = self.lookup.export_conc[&(t, *ppos, cpos)];
                let bil = vec![
                    BilinearTerm {
                        coefficient: -1.0,
                        flow: self.lookup.export[&(t, *ppos)],
                        conc: conc_var,
                    },
                    BilinearTerm {
                        coefficient: -1.0,
                        flow: self.lookup.discharge[&(t, *ppos)],
                        conc: conc_var,
                    },
                ];
                self.push_row(
                    lin,
                    bil,
                    vec![],
                    RowSense::Eq,
                    0.0,
                    ConstraintTag::EffluentQuality {
                        plant: plant.clone(),
                        contaminant: c.clone(),
                        period: t,
                    },
                );
            }
        }
        // Hub balances.
        if !active_plants.is_empty() {
            let mut lin = LinearExpr::new();
            for (ppos, _) in &active_plants {
                lin.add(self.lookup.export[&(t, *ppos)], 1.0);
                lin.add(self.lookup.import_total[&(t, *ppos)], -1.0);
            }
            self.push_row(
                lin,
                vec![],
                vec![],
                RowSense::Eq,
                0.0,
                ConstraintTag::HubFlowBalance { period: t },
            );
            for (cpos, c) in inst.contaminants.iter().enumerate() {
                let mut bil = Vec::new();
                for (ppos, _) in &active_plants {
                    bil.push(BilinearTerm {
                        coefficient: 1.0,
                        flow: self.lookup.export[&(t, *ppos)],
                        conc: self.lookup.export_conc[&(t, *ppos, cpos)],
                    });
                    bil.push(BilinearTerm {
                        coefficient: -1.0,
                        flow: self.lookup.import_total[&(t, *ppos)],
                        conc: self.lookup.hub_outlet_conc[&(t, cpos)],
                    });
                }
                let mut lin = LinearExpr::new();
                lin.add(self.lookup.mass_removed[&(t, cpos)], -1.0);
                self.push_row(
                    lin,
                    bil,
                    vec![],
                    RowSense::Eq,
                    0.0,
                    ConstraintTag::HubMassBalance { contaminant: c.clone(), period: t },
                );
            }
            // Removed mass defined by the selected regenerator's ratio
            // applied to the hub inlet load.
            for (cpos, c) in inst.contaminants.iter().enumerate() {
                let mut lin = LinearExpr::new();
                lin.add(self.lookup.mass_removed[&(t, cpos)], 1.0);
                let mut gated = Vec::new();
                for r in &inst.regenerators {
                    let rr = r.removal_ratio.get(c).copied().unwrap_or(0.0);
                    if rr == 0.0 {
                        continue;
                    }
                    let gate = self.lookup.regen_choice[&(t, r.index)];
                    for (ppos, _) in &active_plants {
                        gated.push(GatedBilinear {
                            gate,
                            term: BilinearTerm {
                                coefficient: -rr,
                                flow: self.lookup.export[&(t, *ppos)],
                                conc: self.lookup.export_conc[&(t, *ppos, cpos)],
                            },
                        });
                    }
                }
                self.push_row(
                    lin,
                    vec![],
                    gated,
                    RowSense::Eq,
                    0.0,
                    ConstraintTag::RemovalDefinition { contaminant: c.clone(), period: t },
                );
            }
        }
        // Exactly one regenerator option selected.
        let mut lin = LinearExpr::new();
        for r in &inst.regenerators {
            lin.add(self.lookup.regen_choice[&(t, r.index)], 1.0);
        }
        self.push_row(lin, vec![], vec![], RowSense::Eq, 1.0, ConstraintTag::RegenSingle {
            period: t,
        });
        // Persistence: installed equipment stays installed.
        if t >= 2 {
            for r in &inst.regenerators {
                let mut lin = LinearExpr::new();
                lin.add(self.lookup.regen_choice[&(t, r.index)], 1.0);
                lin.add(self.lookup.regen_choice[&(t - 1, r.index)], -1.0);
                self.push_row(
                    lin,
                    vec![],
                    vec![],
                    RowSense::Ge,
                    0.0,
                    ConstraintTag::RegenPersist { option: r.index, period: t },
                );
            }
            for (ppos, plant) in inst.plants.iter().enumerate() {
                let mut lin = LinearExpr::new();
                lin.add(self.lookup.export_pipe[&(t, ppos)], 1.0);
                lin.add(self.lookup.export_pipe[&(t - 1, ppos)], -1.0);
                self.push_row(
                    lin,
                    vec![],
                    vec![],
                    RowSense::Ge,
                    0.0,
                    ConstraintTag::ExportPipePersist { plant: plant.clone(), period: t },
                );
                let mut lin = LinearExpr::new();
                lin.add(self.lookup.import_pipe[&(t, ppos)], 1.0);
                lin.add(self.lookup.import_pipe[&(t - 1, ppos)], -1.0);
                self.push_row(
                    lin,
                    vec![],
                    vec![],
                    RowSense::Ge,
                    0.0,
                    ConstraintTag::ImportPipePersist { plant: plant.clone(), period: t },
                );
            }
        }
    }

    fn build_objective(&self, kind: ObjectiveKind) -> Objective {
        let inst = self.instance;
        let mut obj = Objective::default();
        let weights = &inst.scenario.period_weights;
        match kind {
            ObjectiveKind::Freshwater => {
                for t in 1..=inst.horizon() {
                    let w = weights[t - 1];
                    for (ppos, plant) in inst.plants.iter().enumerate() {
                        if !self.is_active(ppos, t) {
                            continue;
                        }
                        for snk in inst.sinks_of(plant) {
                            obj.linear.add(self.lookup.fresh[&(t, snk.id.0)], w);
                        }
                    }
                }
            }
            ObjectiveKind::Cost => {
                let e = &inst.economics;
                let af = annualization_factor(e.interest_rate, e.economic_life);
                // $/yr per (t/h) of pipeline flow: distance times pipe price
                // per unit cross-section, annualized.
                let flow_coef = e.distance_m * af * e.pipe_unit_cost * 1000.0
                    / (3600.0 * e.water_density * e.pipe_velocity);
                // $/yr per installed pipe.
                let fixed_coef = e.distance_m * af * e.pipe_fixed_cost;
                for t in 1..=inst.horizon() {
                    let w = weights[t - 1];
                    for (ppos, plant) in inst.plants.iter().enumerate() {
                        if !self.is_active(ppos, t) {
                            continue;
                        }
                        obj.linear.add(self.lookup.export[&(t, ppos)], w * flow_coef);
                        obj.linear.add(self.lookup.import_total[&(t, ppos)], w * flow_coef);
                        obj.linear.add(self.lookup.export_pipe[&(t, ppos)], w * fixed_coef);
                        obj.linear.add(self.lookup.import_pipe[&(t, ppos)], w * fixed_coef);
                        for snk in inst.sinks_of(plant) {
                            obj.linear.add(
                                self.lookup.fresh[&(t, snk.id.0)],
                                w * e.annual_hours * e.freshwater_price,
                            );
                        }
                        obj.linear.add(
                            self.lookup.discharge[&(t, ppos)],
                            w * e.annual_hours * e.discharge_price,
                        );
                    }
                    // Regeneration: $/yr per (g/h) removed, active only under
                    // the matching choice binary.
                    for r in &inst.regenerators {
                        let gate = self.lookup.regen_choice[&(t, r.index)];
                        let coeff = w * e.annual_hours * r.unit_cost * 1e-3;
                        if coeff == 0.0 {
                            continue;
                        }
                        for cpos in 0..inst.contaminants.len() {
                            obj.gated_linear.push(GatedLinear {
                                gate,
                                var: self.lookup.mass_removed[&(t, cpos)],
                                coeff,
                            });
                        }
                    }
                }
            }
        }
        obj.linear.canonicalize();
        obj
    }
}

/// Build the full multi-period program for `instance`.
///
/// Defaults baked into the translation:
/// * a source concentration entry missing for some contaminant reads 0 ppm;
/// * a sink with no limit entry for a contaminant is unconstrained in it
///   (no quality row is emitted);
/// * freshwater concentration defaults to 0 ppm per contaminant.
pub fn build_program(
    instance: &NetworkInstance,
    kind: ObjectiveKind,
) -> Result<Program, ModelError> {
    let mut b = Builder::new(instance)?;
    for t in 1..=instance.horizon() {
        b.add_period_variables(t);
    }
    for t in 1..=instance.horizon() {
        b.add_period_constraints(t);
    }
    let objective = b.build_objective(kind);
    Ok(Program {
        variables: b.variables,
        constraints: b.constraints,
        objective,
        objective_kind: kind,
        periods: instance.horizon(),
        lookup: b.lookup,
    })
}

/// Annual cost breakdown of one period's operating point ($/yr, unweighted).
///
/// Pipeline capital is charged for the flows and installations present in
/// the state; an unknown regenerator index contributes zero regeneration
/// cost (the residual checker reports it separately).
pub fn period_costs(
    instance: &NetworkInstance,
    state: &PeriodState,
    regenerator: u32,
) -> CostBreakdown {
    let e = &instance.economics;
    let af = annualization_factor(e.interest_rate, e.economic_life);
    let flow_coef =
        e.distance_m * af * e.pipe_unit_cost * 1000.0 / (3600.0 * e.water_density * e.pipe_velocity);
    let fixed_coef = e.distance_m * af * e.pipe_fixed_cost;
    let mut investment = 0.0;
    for pv in &state.export {
        investment += flow_coef * pv.value;
    }
    for pv in &state.hub_import {
        investment += flow_coef * pv.value;
    }
    for f in &state.export_pipe {
        if f.on {
            investment += fixed_coef;
        }
    }
    for f in &state.import_pipe {
        if f.on {
            investment += fixed_coef;
        }
    }
    let freshwater_cost = e.annual_hours * e.freshwater_price * state.total_fresh();
    let discharge_cost = e.annual_hours * e.discharge_price * state.total_discharge();
    let unit_cost = instance.regenerator(regenerator).map_or(0.0, |r| r.unit_cost);
    let removed: f64 = state.mass_removed.iter().map(|c| c.value).sum();
    let regeneration_cost = e.annual_hours * unit_cost * 1e-3 * removed;
    CostBreakdown {
        investment,
        operating: freshwater_cost + discharge_cost + regeneration_cost,
        freshwater_cost,
        discharge_cost,
        regeneration_cost,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{CostBreakdown, PlantFlag, PlantValue};
    use crate::testutil::{single_plant_instance, staged_two_plant_instance};
    use approx::assert_relative_eq;

    fn find_row<'a>(p: &'a Program, pred: impl Fn(&ConstraintTag) -> bool) -> &'a Constraint {
        p.constraints
            .iter()
            .find(|c| pred(&c.tag))
            .expect("expected constraint present")
    }

    #[test]
    fn single_plant_counts() {
        let inst = single_plant_instance();
        let p = build_program(&inst, ObjectiveKind::Cost).unwrap();
        let size = p.model_size();
        // 4 reuse + 2 fresh + 2 outlet + 3 hub flows + 2 sink imports
        // + 1 effluent conc + 1 hub conc + 1 removed mass = 16 continuous;
        // 2 pipes + 2 regenerator choices = 4 binaries.
        assert_eq!(size.continuous, 16);
        assert_eq!(size.binary, 4);
        // 2 source + 2 sink balances, 2 quality rows, import balance,
        // effluent split, 4 pipe rows, 1 mixing, hub flow + mass + removal,
        // 1 selection row.
        assert_eq!(size.constraints, 17);
        assert_eq!(p.num_vars(), 20);
    }

    #[test]
    fn balance_right_hand_sides_match_instance_data() {
        let inst = single_plant_instance();
        let p = build_program(&inst, ObjectiveKind::Cost).unwrap();
        let r = find_row(&p, |t| {
            matches!(t, ConstraintTag::SourceBalance { source, .. } if source.0 == 1)
        });
        assert_relative_eq!(r.rhs, 40.0);
        let r = find_row(&p, |t| {
            matches!(t, ConstraintTag::SinkBalance { sink, .. } if sink.0 == 1)
        });
        assert_relative_eq!(r.rhs, 50.0);
        // Quality limit: 50 t/h at max 50 ppm.
        let r = find_row(&p, |t| {
            matches!(t, ConstraintTag::SinkQuality { sink, .. } if sink.0 == 1)
        });
        assert_relative_eq!(r.rhs, 2500.0);
        assert_eq!(r.sense, RowSense::Le);
        let r = find_row(&p, |t| matches!(t, ConstraintTag::RegenSingle { .. }));
        assert_relative_eq!(r.rhs, 1.0);
        // Removed-mass ceiling: total inlet load 40·100 + 60·400 g/h.
        let mrem = p.mass_removed_var(1, "tds").unwrap();
        assert_relative_eq!(p.variables[mrem].upper, 28_000.0);
    }

    #[test]
    fn bilinear_terms_pair_flows_with_concentrations() {
        let inst = staged_two_plant_instance();
        let p = build_program(&inst, ObjectiveKind::Cost).unwrap();
        let is_flow = |v: usize| {
            matches!(
                p.variables[v].role,
                VarRole::SinkImport { .. }
                    | VarRole::Export { .. }
                    | VarRole::Discharge { .. }
                    | VarRole::ImportTotal { .. }
            )
        };
        let is_conc = |v: usize| {
            matches!(
                p.variables[v].role,
                VarRole::ExportConc { .. } | VarRole::HubOutletConc { .. }
            )
        };
        let mut seen = 0;
        for c in &p.constraints {
            for b in &c.bilinear {
                assert!(is_flow(b.flow), "flow side must be a flow variable");
                assert!(is_conc(b.conc), "conc side must be a concentration");
                seen += 1;
            }
            for g in &c.gated_bilinear {
                assert!(is_flow(g.term.flow));
                assert!(is_conc(g.term.conc));
                assert!(matches!(p.variables[g.gate].role, VarRole::RegenChoice { .. }));
                seen += 1;
            }
        }
        assert!(seen > 0);
        assert!(p.objective.bilinear.is_empty());
    }

    #[test]
    fn build_is_deterministic() {
        let inst = staged_two_plant_instance();
        let a = build_program(&inst, ObjectiveKind::Cost).unwrap();
        let b = build_program(&inst, ObjectiveKind::Cost).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn staged_entry_pins_late_plants_and_links_periods() {
        let inst = staged_two_plant_instance();
        let p = build_program(&inst, ObjectiveKind::Cost).unwrap();
        let b = PlantId::from("B");
        // Plant B enters in period 2: its period-1 variables are pinned.
        let v = p.export_var(1, &b).unwrap();
        assert_eq!(p.variables[v].upper, 0.0);
        let v = p.export_var(2, &b).unwrap();
        assert!(p.variables[v].upper > 0.0);
        // Its period-1 balances are not emitted.
        assert!(!p.constraints.iter().any(|c| matches!(
            &c.tag,
            ConstraintTag::PlantEffluentSplit { plant, period: 1 } if *plant == b
        )));
        assert!(p.constraints.iter().any(|c| matches!(
            &c.tag,
            ConstraintTag::PlantEffluentSplit { plant, period: 2 } if *plant == b
        )));
        // Persistence rows link consecutive periods.
        let persists = p
            .constraints
            .iter()
            .filter(|c| {
                matches!(
                    c.tag,
                    ConstraintTag::RegenPersist { .. }
                        | ConstraintTag::ExportPipePersist { .. }
                        | ConstraintTag::ImportPipePersist { .. }
                )
            })
            .count();
        // 1 regenerator option + 2 plants × 2 pipe kinds, one period link.
        assert_eq!(persists, 5);
    }

    #[test]
    fn fold_regenerator_removes_gates() {
        let inst = single_plant_instance();
        let p = build_program(&inst, ObjectiveKind::Cost).unwrap();
        let gated_rows: usize = p.constraints.iter().map(|c| c.gated_bilinear.len()).sum();
        assert!(gated_rows > 0);
        assert!(!p.objective.gated_linear.is_empty());

        let f = p.fold_regenerator(1);
        assert!(f.constraints.iter().all(|c| c.gated_bilinear.is_empty()));
        assert!(f.objective.gated_linear.is_empty());
        // The chosen binary is pinned on, the other off, in every period.
        let chosen = f.regen_choice_var(1, 1).unwrap();
        assert_eq!(f.variables[chosen].lower, 1.0);
        assert_eq!(f.variables[chosen].upper, 1.0);
        let other = f.regen_choice_var(1, 2).unwrap();
        assert_eq!(f.variables[other].upper, 0.0);
        // The removal row gained plain bilinear terms scaled by the ratio.
        let r = find_row(&f, |t| matches!(t, ConstraintTag::RemovalDefinition { .. }));
        assert_eq!(r.bilinear.len(), 1);
        assert_relative_eq!(r.bilinear[0].coefficient, -0.5);
        // The objective now charges removed mass directly.
        let mrem = f.mass_removed_var(1, "tds").unwrap();
        // weight 1 × 8000 h/yr × 1.0 $/kg × 1e-3 kg/g.
        assert_relative_eq!(f.objective.linear.coeff(mrem), 8.0);
    }

    #[test]
    fn freshwater_objective_touches_only_fresh_variables() {
        let inst = staged_two_plant_instance();
        let p = build_program(&inst, ObjectiveKind::Freshwater).unwrap();
        assert!(!p.objective.linear.terms.is_empty());
        for &(v, c) in &p.objective.linear.terms {
            assert!(matches!(p.variables[v].role, VarRole::Fresh { .. }));
            let w = inst.scenario.period_weights[p.variables[v].period - 1];
            assert_relative_eq!(c, w);
        }
        assert!(p.objective.gated_linear.is_empty());
    }

    #[test]
    fn shared_products_are_listed_once() {
        let inst = single_plant_instance();
        let p = build_program(&inst, ObjectiveKind::Cost).unwrap();
        let products = p.bilinear_products();
        let mut unique = products.clone();
        unique.sort_unstable();
        unique.dedup();
        assert_eq!(products.len(), unique.len());
        // The export·conc product appears in mixing, hub-mass and removal
        // rows but must be listed exactly once.
        let a = PlantId::from("A");
        let f = p.export_var(1, &a).unwrap();
        let c = p.export_conc_var(1, &a, "tds").unwrap();
        assert_eq!(products.iter().filter(|&&(x, y)| x == f && y == c).count(), 1);
    }

    #[test]
    fn period_cost_components_follow_prices() {
        let inst = single_plant_instance();
        let e = &inst.economics;
        let af = annualization_factor(e.interest_rate, e.economic_life);
        let mut state = PeriodState { period: 1, ..Default::default() };
        state.export.push(PlantValue { plant: PlantId::from("A"), value: 10.0 });
        state.hub_import.push(PlantValue { plant: PlantId::from("A"), value: 10.0 });
        state.export_pipe.push(PlantFlag { plant: PlantId::from("A"), on: true });
        state.import_pipe.push(PlantFlag { plant: PlantId::from("A"), on: true });
        state.fresh.push(crate::model::SinkValue { sink: crate::model::SinkId(1), value: 20.0 });
        state.discharge.push(PlantValue { plant: PlantId::from("A"), value: 5.0 });
        state
            .mass_removed
            .push(crate::model::ContamValue { contaminant: "tds".into(), value: 1000.0 });
        let cb = period_costs(&inst, &state, 1);
        let flow_coef = e.distance_m * af * e.pipe_unit_cost * 1000.0
            / (3600.0 * e.water_density * e.pipe_velocity);
        assert_relative_eq!(
            cb.investment,
            flow_coef * 20.0 + 2.0 * e.distance_m * af * e.pipe_fixed_cost,
            max_relative = 1e-12
        );
        assert_relative_eq!(cb.freshwater_cost, 8000.0 * 0.5 * 20.0);
        assert_relative_eq!(cb.discharge_cost, 8000.0 * 0.5 * 5.0);
        assert_relative_eq!(cb.regeneration_cost, 8000.0 * 1.0 * 1e-3 * 1000.0);
        assert_relative_eq!(cb.operating, cb.freshwater_cost + cb.discharge_cost + cb.regeneration_cost);
        // Unknown regenerator: no regeneration charge.
        let cb2 = period_costs(&inst, &state, 99);
        assert_relative_eq!(cb2.regeneration_cost, 0.0);
    }

    #[test]
    fn hub_disabled_instance_still_builds() {
        let mut inst = single_plant_instance();
        inst.economics.hub_flow_max = Some(0.0);
        let p = build_program(&inst, ObjectiveKind::Cost).unwrap();
        let a = PlantId::from("A");
        let v = p.export_var(1, &a).unwrap();
        assert_eq!(p.variables[v].upper, 0.0);
        let v = p.import_total_var(1, &a).unwrap();
        assert_eq!(p.variables[v].upper, 0.0);
    }

    #[test]
    fn sink_without_limit_entry_gets_no_quality_row() {
        let mut inst = single_plant_instance();
        inst.sinks[1].max_conc.clear();
        let p = build_program(&inst, ObjectiveKind::Cost).unwrap();
        assert!(!p.constraints.iter().any(|c| matches!(
            c.tag,
            ConstraintTag::SinkQuality { sink, .. } if sink.0 == 2
        )));
        assert!(p.constraints.iter().any(|c| matches!(
            c.tag,
            ConstraintTag::SinkQuality { sink, .. } if sink.0 == 1
        )));
    }

    #[test]
    fn cost_breakdown_total_is_consistent() {
        let cb = CostBreakdown {
            investment: 1.0,
            operating: 6.0,
            freshwater_cost: 1.0,
            discharge_cost: 2.0,
            regeneration_cost: 3.0,
        };
        assert_relative_eq!(cb.total(), 7.0);
    }
}
