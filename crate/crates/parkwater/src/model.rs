//! Instance and solution data types.
//!
//! Units used throughout the crate:
//!
//! * flows: tonne/h
//! * concentrations: ppm (equivalently g/tonne)
//! * contaminant mass loads: g/h (flow × concentration)
//! * removed-mass unit cost: $/kg
//! * water prices: $/tonne
//! * annual costs: $/yr (reports scale to M$/yr only when printing)

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Name of a plant, e.g. `"A"`.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct PlantId(pub String);

impl fmt::Display for PlantId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl From<&str> for PlantId {
    fn from(s: &str) -> Self {
        PlantId(s.to_owned())
    }
}

/// Identifier of a water source (park-wide, not per plant).
#[derive(
    Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize,
)]
#[serde(transparent)]
pub struct SourceId(pub u32);

/// Identifier of a water sink (park-wide, not per plant).
#[derive(
    Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize,
)]
#[serde(transparent)]
pub struct SinkId(pub u32);

impl fmt::Display for SourceId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

impl fmt::Display for SinkId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

/// A water source: a stream a plant must dispose of every period.
///
/// `flow[t-1]` and `conc[contaminant][t-1]` give the flowrate (t/h) and the
/// contaminant concentration (ppm) in period `t`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SourceSpec {
    pub id: SourceId,
    pub plant: PlantId,
    pub flow: Vec<f64>,
    pub conc: BTreeMap<String, Vec<f64>>,
}

/// A water sink: a demand that must be met exactly every period, subject to
/// a maximum inlet concentration per contaminant.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SinkSpec {
    pub id: SinkId,
    pub plant: PlantId,
    pub flow: Vec<f64>,
    pub max_conc: BTreeMap<String, Vec<f64>>,
}

/// One entry of the hub regenerator catalog.
///
/// Installing option `index` removes the fraction `removal_ratio[c]` of each
/// contaminant's inlet mass load and costs `unit_cost` dollars per kg of
/// removed mass.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegeneratorOption {
    pub index: u32,
    pub removal_ratio: BTreeMap<String, f64>,
    pub unit_cost: f64,
}

/// Cost and hydraulic parameters shared by the whole park.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EconomicParams {
    /// Plant-to-hub pipeline length (m).
    pub distance_m: f64,
    /// Pipeline cost per cross-section and length ($/m³-ish parameter `p`).
    pub pipe_unit_cost: f64,
    /// Fixed pipeline cost parameter `q` (paired with `pipe_unit_cost`).
    pub pipe_fixed_cost: f64,
    /// Water density (kg/m³).
    pub water_density: f64,
    /// Design velocity in cross-plant pipelines (m/s).
    pub pipe_velocity: f64,
    /// Annual working hours (h/yr).
    pub annual_hours: f64,
    /// Fractional interest rate used for annualizing pipe capital.
    pub interest_rate: f64,
    /// Economic life of the pipelines (years).
    pub economic_life: u32,
    /// Freshwater price ($/tonne).
    pub freshwater_price: f64,
    /// Effluent discharge price ($/tonne).
    pub discharge_price: f64,
    /// Freshwater contaminant content (ppm), usually 0.
    pub freshwater_conc: BTreeMap<String, f64>,
    /// Minimum flow a built cross-plant pipeline must carry (t/h).
    pub hub_flow_min: f64,
    /// Maximum flow of a cross-plant pipeline (t/h). `None` defaults to the
    /// largest total source flow over the horizon.
    pub hub_flow_max: Option<f64>,
}

/// Planning horizon: how many periods, their objective weights and the
/// period in which each plant joins the park.
///
/// A plant with entry period `e` exists in all periods `t >= e` and in none
/// before; its flows are forced to zero before entry.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scenario {
    pub period_count: usize,
    pub period_weights: Vec<f64>,
    pub plant_entry: BTreeMap<PlantId, usize>,
}

impl Scenario {
    /// Whether `plant` participates in period `t` (1-based).
    pub fn is_active(&self, plant: &PlantId, t: usize) -> bool {
        self.plant_entry.get(plant).is_some_and(|&e| t >= e)
    }
}

/// A complete planning problem.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetworkInstance {
    pub contaminants: Vec<String>,
    pub plants: Vec<PlantId>,
    pub sources: Vec<SourceSpec>,
    pub sinks: Vec<SinkSpec>,
    pub regenerators: Vec<RegeneratorOption>,
    pub economics: EconomicParams,
    pub scenario: Scenario,
    /// Free-text provenance notes carried through round trips.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub notes: Vec<String>,
}

impl NetworkInstance {
    /// Number of planning periods.
    pub fn horizon(&self) -> usize {
        self.scenario.period_count
    }

    /// Plants participating in period `t` (1-based), in instance order.
    pub fn active_plants(&self, t: usize) -> Result<Vec<&PlantId>, ModelError> {
        if t < 1 || t > self.horizon() {
            return Err(ModelError::PeriodOutOfRange {
                period: t,
                horizon: self.horizon(),
            });
        }
        Ok(self
            .plants
            .iter()
            .filter(|p| self.scenario.is_active(p, t))
            .collect())
    }

    /// Sources belonging to `plant`, in instance order.
    pub fn sources_of<'a>(&'a self, plant: &PlantId) -> impl Iterator<Item = &'a SourceSpec> {
        let plant = plant.clone();
        self.sources.iter().filter(move |s| s.plant == plant)
    }

    /// Sinks belonging to `plant`, in instance order.
    pub fn sinks_of<'a>(&'a self, plant: &PlantId) -> impl Iterator<Item = &'a SinkSpec> {
        let plant = plant.clone();
        self.sinks.iter().filter(move |s| s.plant == plant)
    }

    /// Total source flow of active plants in period `t` (t/h).
    pub fn total_source_flow(&self, t: usize) -> f64 {
        self.sources
            .iter()
            .filter(|s| self.scenario.is_active(&s.plant, t))
            .map(|s| s.flow[t - 1])
            .sum()
    }

    /// Total sink demand of active plants in period `t` (t/h).
    pub fn total_sink_flow(&self, t: usize) -> f64 {
        self.sinks
            .iter()
            .filter(|s| self.scenario.is_active(&s.plant, t))
            .map(|s| s.flow[t - 1])
            .sum()
    }

    /// Largest source concentration of contaminant `c` among active plants
    /// in period `t`; 0.0 when no source is active.
    pub fn max_source_conc(&self, c: &str, t: usize) -> f64 {
        self.sources
            .iter()
            .filter(|s| self.scenario.is_active(&s.plant, t))
            .filter_map(|s| s.conc.get(c).map(|v| v[t - 1]))
            .fold(0.0, f64::max)
    }

    /// Effective cross-plant pipeline capacity (t/h).
    pub fn hub_flow_cap(&self) -> f64 {
        self.economics.hub_flow_max.unwrap_or_else(|| {
            (1..=self.horizon())
                .map(|t| self.total_source_flow(t))
                .fold(0.0, f64::max)
        })
    }

    pub fn regenerator(&self, index: u32) -> Option<&RegeneratorOption> {
        self.regenerators.iter().find(|r| r.index == index)
    }
}

/// Errors from model-level queries.
#[derive(Debug, Error, PartialEq, Eq)]
pub enum ModelError {
    #[error("period {period} outside horizon 1..={horizon}")]
    PeriodOutOfRange { period: usize, horizon: usize },
}

/// Which quantity the planner minimizes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ObjectiveKind {
    /// Weighted annual cost ($/yr): pipe capital + freshwater + discharge +
    /// regeneration.
    Cost,
    /// Weighted freshwater intake (t/h).
    Freshwater,
}

impl fmt::Display for ObjectiveKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ObjectiveKind::Cost => f.write_str("cost"),
            ObjectiveKind::Freshwater => f.write_str("freshwater"),
        }
    }
}

/// Annual cost components of one period, all in $/yr.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct CostBreakdown {
    /// Annualized cross-plant pipeline capital.
    pub investment: f64,
    /// Freshwater + discharge + regeneration operating cost.
    pub operating: f64,
    pub freshwater_cost: f64,
    pub discharge_cost: f64,
    pub regeneration_cost: f64,
}

impl CostBreakdown {
    pub fn total(&self) -> f64 {
        self.investment + self.operating
    }
}

/// Flow on one in-plant reuse arc.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ReuseFlow {
    pub source: SourceId,
    pub sink: SinkId,
    pub flow: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SinkValue {
    pub sink: SinkId,
    pub value: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SourceValue {
    pub source: SourceId,
    pub value: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlantValue {
    pub plant: PlantId,
    pub value: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlantConc {
    pub plant: PlantId,
    pub contaminant: String,
    pub value: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContamValue {
    pub contaminant: String,
    pub value: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlantFlag {
    pub plant: PlantId,
    pub on: bool,
}

/// All decisions of one period.
///
/// Only active plants' entities appear; every collection is sorted by its
/// natural id so serialization is deterministic.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct PeriodState {
    /// 1-based period index.
    pub period: usize,
    /// In-plant reuse flows f(source → sink) (t/h).
    pub reuse: Vec<ReuseFlow>,
    /// Freshwater into each sink (t/h).
    pub fresh: Vec<SinkValue>,
    /// Source outflow routed to the plant's effluent header (t/h).
    pub effluent: Vec<SourceValue>,
    /// Plant → hub export (t/h).
    pub export: Vec<PlantValue>,
    /// Plant → environment discharge (t/h).
    pub discharge: Vec<PlantValue>,
    /// Hub → plant return flow (t/h).
    pub hub_import: Vec<PlantValue>,
    /// Hub water received by each sink (t/h).
    pub sink_import: Vec<SinkValue>,
    /// Concentration of each plant's collected effluent (ppm).
    pub effluent_conc: Vec<PlantConc>,
    /// Concentration of the hub outlet (ppm).
    pub hub_outlet_conc: Vec<ContamValue>,
    /// Contaminant mass removed in the hub (g/h).
    pub mass_removed: Vec<ContamValue>,
    /// Whether the plant → hub pipeline is built in this period.
    pub export_pipe: Vec<PlantFlag>,
    /// Whether the hub → plant pipeline is built in this period.
    pub import_pipe: Vec<PlantFlag>,
    /// Annual cost breakdown of this period.
    pub costs: CostBreakdown,
}

macro_rules! lookup {
    ($vec:expr, $field:ident, $key:expr) => {
        $vec.iter().find(|e| e.$field == $key).map(|e| e.value)
    };
}

impl PeriodState {
    pub fn reuse_flow(&self, source: SourceId, sink: SinkId) -> f64 {
        self.reuse
            .iter()
            .find(|r| r.source == source && r.sink == sink)
            .map_or(0.0, |r| r.flow)
    }

    pub fn fresh_to(&self, sink: SinkId) -> f64 {
        lookup!(self.fresh, sink, sink).unwrap_or(0.0)
    }

    pub fn effluent_of(&self, source: SourceId) -> f64 {
        lookup!(self.effluent, source, source).unwrap_or(0.0)
    }

    pub fn export_of(&self, plant: &PlantId) -> f64 {
        lookup!(self.export, plant, *plant).unwrap_or(0.0)
    }

    pub fn discharge_of(&self, plant: &PlantId) -> f64 {
        lookup!(self.discharge, plant, *plant).unwrap_or(0.0)
    }

    pub fn hub_import_of(&self, plant: &PlantId) -> f64 {
        lookup!(self.hub_import, plant, *plant).unwrap_or(0.0)
    }

    pub fn sink_import_of(&self, sink: SinkId) -> f64 {
        lookup!(self.sink_import, sink, sink).unwrap_or(0.0)
    }

    pub fn effluent_conc_of(&self, contaminant: &str, plant: &PlantId) -> f64 {
        self.effluent_conc
            .iter()
            .find(|e| e.plant == *plant && e.contaminant == contaminant)
            .map_or(0.0, |e| e.value)
    }

    pub fn hub_outlet_conc_of(&self, contaminant: &str) -> f64 {
        self.hub_outlet_conc
            .iter()
            .find(|e| e.contaminant == contaminant)
            .map_or(0.0, |e| e.value)
    }

    pub fn mass_removed_of(&self, contaminant: &str) -> f64 {
        self.mass_removed
            .iter()
            .find(|e| e.contaminant == contaminant)
            .map_or(0.0, |e| e.value)
    }

    pub fn export_pipe_on(&self, plant: &PlantId) -> bool {
        self.export_pipe
            .iter()
            .find(|e| e.plant == *plant)
            .is_some_and(|e| e.on)
    }

    pub fn import_pipe_on(&self, plant: &PlantId) -> bool {
        self.import_pipe
            .iter()
            .find(|e| e.plant == *plant)
            .is_some_and(|e| e.on)
    }

    /// Total freshwater intake of this period (t/h).
    pub fn total_fresh(&self) -> f64 {
        self.fresh.iter().map(|f| f.value).sum()
    }

    /// Total discharge of this period (t/h).
    pub fn total_discharge(&self) -> f64 {
        self.discharge.iter().map(|d| d.value).sum()
    }
}

/// A complete plan over the horizon.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Solution {
    pub objective: ObjectiveKind,
    /// Weighted objective value: $/yr for cost, t/h for freshwater.
    pub objective_value: f64,
    /// Catalog index of the hub regenerator; a single option serves the whole
    /// horizon because an installed regenerator is never replaced.
    pub regenerator: u32,
    pub periods: Vec<PeriodState>,
}

impl Solution {
    /// Weighted total cost over the horizon ($/yr).
    pub fn weighted_cost(&self, weights: &[f64]) -> f64 {
        self.periods
            .iter()
            .zip(weights)
            .map(|(p, w)| w * p.costs.total())
            .sum()
    }

    /// Weighted freshwater intake over the horizon (t/h).
    pub fn weighted_fresh(&self, weights: &[f64]) -> f64 {
        self.periods
            .iter()
            .zip(weights)
            .map(|(p, w)| w * p.total_fresh())
            .sum()
    }

    /// State of the last period, the park's steady end configuration.
    pub fn final_period(&self) -> &PeriodState {
        self.periods.last().expect("solution has at least one period")
    }
}

/// One violation found by [`validate_instance`].
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ValidationIssue {
    /// Where in the instance the problem sits, e.g. `sources[3].flow[0]`.
    pub path: String,
    pub message: String,
}

impl fmt::Display for ValidationIssue {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}", self.path, self.message)
    }
}

fn check_finite(
    issues: &mut Vec<ValidationIssue>,
    path: String,
    value: f64,
    min: f64,
    what: &str,
) {
    if !value.is_finite() {
        issues.push(ValidationIssue {
            path,
            message: format!("{what} must be finite, got {value}"),
        });
    } else if value < min {
        issues.push(ValidationIssue {
            path,
            message: format!("{what} must be >= {min}, got {value}"),
        });
    }
}

fn check_series(
    issues: &mut Vec<ValidationIssue>,
    path: &str,
    series: &[f64],
    periods: usize,
    what: &str,
) {
    if series.len() != periods {
        issues.push(ValidationIssue {
            path: path.to_owned(),
            message: format!(
                "{what} must list one value per period ({periods}), got {}",
                series.len()
            ),
        });
    }
    for (t, &v) in series.iter().enumerate() {
        check_finite(issues, format!("{path}[{t}]"), v, 0.0, what);
    }
}

fn check_conc_map(
    issues: &mut Vec<ValidationIssue>,
    path: &str,
    map: &BTreeMap<String, Vec<f64>>,
    contaminants: &[String],
    periods: usize,
    what: &str,
) {
    for c in contaminants {
        match map.get(c) {
            None => issues.push(ValidationIssue {
                path: path.to_owned(),
                message: format!("missing {what} for contaminant {c:?}"),
            }),
            Some(series) => check_series(issues, &format!("{path}.{c}"), series, periods, what),
        }
    }
    for key in map.keys() {
        if !contaminants.contains(key) {
            issues.push(ValidationIssue {
                path: format!("{path}.{key}"),
                message: format!("{what} given for undeclared contaminant {key:?}"),
            });
        }
    }
}

/// Check an instance for structural and numeric defects.
///
/// Pure and deterministic: the same instance always yields the same issue
/// list, in instance order. An empty list means the instance is well-formed
/// (it may still be infeasible, which only solving can tell).
pub fn validate_instance(instance: &NetworkInstance) -> Vec<ValidationIssue> {
    let mut issues = Vec::new();
    let periods = instance.scenario.period_count;
    let contaminants = &instance.contaminants;

    if contaminants.is_empty() {
        issues.push(ValidationIssue {
            path: "contaminants".into(),
            message: "at least one contaminant is required".into(),
        });
    }
    for (i, c) in contaminants.iter().enumerate() {
        if contaminants[..i].contains(c) {
            issues.push(ValidationIssue {
                path: format!("contaminants[{i}]"),
                message: format!("duplicate contaminant {c:?}"),
            });
        }
    }

    if instance.plants.is_empty() {
        issues.push(ValidationIssue {
            path: "plants".into(),
            message: "at least one plant is required".into(),
        });
    }
    for (i, p) in instance.plants.iter().enumerate() {
        if instance.plants[..i].contains(p) {
            issues.push(ValidationIssue {
                path: format!("plants[{i}]"),
                message: format!("duplicate plant {p}"),
            });
        }
    }

    for (i, src) in instance.sources.iter().enumerate() {
        let path = format!("sources[{i}]");
        if instance.sources[..i].iter().any(|s| s.id == src.id) {
            issues.push(ValidationIssue {
                path: path.clone(),
                message: format!("duplicate source id {}", src.id),
            });
        }
        if !instance.plants.contains(&src.plant) {
            issues.push(ValidationIssue {
                path: format!("{path}.plant"),
                message: format!("unknown plant {}", src.plant),
            });
        }
        check_series(&mut issues, &format!("{path}.flow"), &src.flow, periods, "source flow");
        check_conc_map(
            &mut issues,
            &format!("{path}.conc"),
            &src.conc,
            contaminants,
            periods,
            "source concentration",
        );
    }

    for (i, sink) in instance.sinks.iter().enumerate() {
        let path = format!("sinks[{i}]");
        if instance.sinks[..i].iter().any(|s| s.id == sink.id) {
            issues.push(ValidationIssue {
                path: path.clone(),
                message: format!("duplicate sink id {}", sink.id),
            });
        }
        if !instance.plants.contains(&sink.plant) {
            issues.push(ValidationIssue {
                path: format!("{path}.plant"),
                message: format!("unknown plant {}", sink.plant),
            });
        }
        check_series(&mut issues, &format!("{path}.flow"), &sink.flow, periods, "sink flow");
        check_conc_map(
            &mut issues,
            &format!("{path}.max_conc"),
            &sink.max_conc,
            contaminants,
            periods,
            "sink concentration limit",
        );
    }

    if instance.regenerators.is_empty() {
        issues.push(ValidationIssue {
            path: "regenerators".into(),
            message: "the hub catalog must offer at least one regenerator".into(),
        });
    }
    for (i, reg) in instance.regenerators.iter().enumerate() {
        let path = format!("regenerators[{i}]");
        if instance.regenerators[..i].iter().any(|r| r.index == reg.index) {
            issues.push(ValidationIssue {
                path: path.clone(),
                message: format!("duplicate regenerator index {}", reg.index),
            });
        }
        for c in contaminants {
            match reg.removal_ratio.get(c) {
                None => issues.push(ValidationIssue {
                    path: format!("{path}.removal_ratio"),
                    message: format!("missing removal ratio for contaminant {c:?}"),
                }),
                Some(&rr) => {
                    if !rr.is_finite() || !(0.0..=1.0).contains(&rr) {
                        issues.push(ValidationIssue {
                            path: format!("{path}.removal_ratio.{c}"),
                            message: format!("removal ratio must lie in [0, 1], got {rr}"),
                        });
                    }
                }
            }
        }
        check_finite(&mut issues, format!("{path}.unit_cost"), reg.unit_cost, 0.0, "unit cost");
    }

    let eco = &instance.economics;
    check_finite(&mut issues, "economics.distance_m".into(), eco.distance_m, 0.0, "distance");
    check_finite(
        &mut issues,
        "economics.pipe_unit_cost".into(),
        eco.pipe_unit_cost,
        0.0,
        "pipe unit cost",
    );
    check_finite(
        &mut issues,
        "economics.pipe_fixed_cost".into(),
        eco.pipe_fixed_cost,
        0.0,
        "pipe fixed cost",
    );
    if !(eco.water_density.is_finite() && eco.water_density > 0.0) {
        issues.push(ValidationIssue {
            path: "economics.water_density".into(),
            message: format!("water density must be positive, got {}", eco.water_density),
        });
    }
    if !(eco.pipe_velocity.is_finite() && eco.pipe_velocity > 0.0) {
        issues.push(ValidationIssue {
            path: "economics.pipe_velocity".into(),
            message: format!("pipe velocity must be positive, got {}", eco.pipe_velocity),
        });
    }
    if !(eco.annual_hours.is_finite() && eco.annual_hours > 0.0) {
        issues.push(ValidationIssue {
            path: "economics.annual_hours".into(),
            message: format!("annual hours must be positive, got {}", eco.annual_hours),
        });
    }
    check_finite(
        &mut issues,
        "economics.interest_rate".into(),
        eco.interest_rate,
        0.0,
        "interest rate",
    );
    if eco.economic_life < 1 {
        issues.push(ValidationIssue {
            path: "economics.economic_life".into(),
            message: "economic life must be at least one year".into(),
        });
    }
    check_finite(
        &mut issues,
        "economics.freshwater_price".into(),
        eco.freshwater_price,
        0.0,
        "freshwater price",
    );
    check_finite(
        &mut issues,
        "economics.discharge_price".into(),
        eco.discharge_price,
        0.0,
        "discharge price",
    );
    // Freshwater entries are optional (missing means 0 ppm) but the ones
    // present must be usable numbers.
    for (c, &v) in &eco.freshwater_conc {
        check_finite(
            &mut issues,
            format!("economics.freshwater_conc.{c}"),
            v,
            0.0,
            "freshwater concentration",
        );
    }
    check_finite(
        &mut issues,
        "economics.hub_flow_min".into(),
        eco.hub_flow_min,
        0.0,
        "hub flow minimum",
    );
    if let Some(cap) = eco.hub_flow_max {
        check_finite(&mut issues, "economics.hub_flow_max".into(), cap, 0.0, "hub flow maximum");
        if cap.is_finite() && cap < eco.hub_flow_min {
            issues.push(ValidationIssue {
                path: "economics.hub_flow_max".into(),
                message: format!(
                    "hub flow maximum {cap} is below the minimum {}",
                    eco.hub_flow_min
                ),
            });
        }
    }

    let scen = &instance.scenario;
    if scen.period_count < 1 {
        issues.push(ValidationIssue {
            path: "scenario.period_count".into(),
            message: "at least one period is required".into(),
        });
    }
    if scen.period_weights.len() != scen.period_count {
        issues.push(ValidationIssue {
            path: "scenario.period_weights".into(),
            message: format!(
                "expected {} weights, got {}",
                scen.period_count,
                scen.period_weights.len()
            ),
        });
    }
    for (t, &w) in scen.period_weights.iter().enumerate() {
        check_finite(
            &mut issues,
            format!("scenario.period_weights[{t}]"),
            w,
            0.0,
            "period weight",
        );
    }
    for plant in &instance.plants {
        match scen.plant_entry.get(plant) {
            None => issues.push(ValidationIssue {
                path: "scenario.plant_entry".into(),
                message: format!("missing entry period for plant {plant}"),
            }),
            Some(&e) => {
                if e < 1 || e > scen.period_count {
                    issues.push(ValidationIssue {
                        path: format!("scenario.plant_entry.{plant}"),
                        message: format!(
                            "entry period {e} outside horizon 1..={}",
                            scen.period_count
                        ),
                    });
                }
            }
        }
    }
    for plant in scen.plant_entry.keys() {
        if !instance.plants.contains(plant) {
            issues.push(ValidationIssue {
                path: format!("scenario.plant_entry.{plant}"),
                message: format!("entry period given for undeclared plant {plant}"),
            });
        }
    }

    issues
}

/// Capital-recovery factor: the fraction of an investment charged per year
/// over `economic_life` years at fractional `interest_rate`.
///
/// `AF = u (1+u)^n / ((1+u)^n - 1)`, with the zero-interest limit `1/n`.
pub fn annualization_factor(interest_rate: f64, economic_life: u32) -> f64 {
    assert!(economic_life >= 1, "economic life must be at least one year");
    assert!(
        interest_rate.is_finite() && interest_rate >= 0.0,
        "interest rate must be finite and non-negative"
    );
    let n = economic_life as f64;
    if interest_rate == 0.0 {
        return 1.0 / n;
    }
    let growth = (1.0 + interest_rate).powf(n);
    interest_rate * growth / (growth - 1.0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    /// Independent route to the capital-recovery factor: the reciprocal of
    /// the present value of a unit annuity, summed term by term.
    fn annuity_series_factor(u: f64, n: u32) -> f64 {
        let pv: f64 = (1..=n).map(|k| (1.0 + u).powi(-(k as i32))).sum();
        1.0 / pv
    }

    #[test]
    fn annualization_factor_matches_annuity_series() {
        for &(u, n) in &[
            (0.05, 15),
            (0.10, 10),
            (0.05, 1),
            (0.01, 40),
            (0.20, 5),
            (0.07, 25),
        ] {
            assert_relative_eq!(
                annualization_factor(u, n),
                annuity_series_factor(u, n),
                max_relative = 1e-12
            );
        }
    }

    #[test]
    fn annualization_factor_known_values() {
        // One-year life repays principal plus one year of interest.
        assert_relative_eq!(annualization_factor(0.05, 1), 1.05, max_relative = 1e-12);
        assert_relative_eq!(annualization_factor(0.05, 15), 0.0963423, max_relative = 1e-5);
        assert_relative_eq!(annualization_factor(0.10, 10), 0.1627454, max_relative = 1e-5);
        // Zero interest spreads the principal evenly.
        assert_relative_eq!(annualization_factor(0.0, 8), 0.125, max_relative = 1e-12);
    }

    #[test]
    fn annualization_factor_monotonic() {
        // Decreasing in economic life, increasing in interest rate.
        for i in 0..10 {
            let u = 0.01 + 0.02 * i as f64;
            for n in 1..10u32 {
                assert!(annualization_factor(u, n) > annualization_factor(u, n + 1));
            }
        }
        for n in [1u32, 5, 15, 30] {
            for i in 0..10 {
                let u = 0.01 + 0.02 * i as f64;
                assert!(annualization_factor(u + 0.02, n) > annualization_factor(u, n));
            }
        }
        // Always within (0, 1 + u] and above straight-line depreciation.
        for i in 0..=10 {
            let u = 0.03 * i as f64;
            for n in [1u32, 2, 7, 20] {
                let af = annualization_factor(u, n);
                assert!(af > 0.0 && af <= 1.0 + u + 1e-12);
                assert!(af >= 1.0 / n as f64 - 1e-12);
            }
        }
    }

    fn two_plant_instance() -> NetworkInstance {
        NetworkInstance {
            contaminants: vec!["c1".into()],
            plants: vec!["A".into(), "B".into()],
            sources: vec![SourceSpec {
                id: SourceId(1),
                plant: "A".into(),
                flow: vec![10.0, 10.0],
                conc: [("c1".to_string(), vec![100.0, 100.0])].into(),
            }],
            sinks: vec![SinkSpec {
                id: SinkId(1),
                plant: "A".into(),
                flow: vec![10.0, 10.0],
                max_conc: [("c1".to_string(), vec![50.0, 50.0])].into(),
            }],
            regenerators: vec![RegeneratorOption {
                index: 1,
                removal_ratio: [("c1".to_string(), 0.5)].into(),
                unit_cost: 1.0,
            }],
            economics: EconomicParams {
                distance_m: 100.0,
                pipe_unit_cost: 7200.0,
                pipe_fixed_cost: 250.0,
                water_density: 1000.0,
                pipe_velocity: 1.0,
                annual_hours: 8000.0,
                interest_rate: 0.05,
                economic_life: 15,
                freshwater_price: 0.5,
                discharge_price: 0.5,
                freshwater_conc: [("c1".to_string(), 0.0)].into(),
                hub_flow_min: 0.1,
                hub_flow_max: None,
            },
            scenario: Scenario {
                period_count: 2,
                period_weights: vec![0.5, 0.5],
                plant_entry: [("A".into(), 1), ("B".into(), 2)].into(),
            },
            notes: Vec::new(),
        }
    }

    #[test]
    fn valid_instance_yields_no_issues() {
        assert!(validate_instance(&two_plant_instance()).is_empty());
    }

    #[test]
    fn validation_is_pure() {
        let inst = two_plant_instance();
        assert_eq!(validate_instance(&inst), validate_instance(&inst));
    }

    #[test]
    fn validation_flags_negative_flow() {
        let mut inst = two_plant_instance();
        inst.sources[0].flow[1] = -1.0;
        let issues = validate_instance(&inst);
        assert_eq!(issues.len(), 1);
        assert_eq!(issues[0].path, "sources[0].flow[1]");
    }

    #[test]
    fn validation_flags_unknown_plant_and_bad_ratio() {
        let mut inst = two_plant_instance();
        inst.sinks[0].plant = "Z".into();
        inst.regenerators[0].removal_ratio.insert("c1".into(), 1.5);
        let issues = validate_instance(&inst);
        assert!(issues.iter().any(|i| i.path == "sinks[0].plant"));
        assert!(issues
            .iter()
            .any(|i| i.path == "regenerators[0].removal_ratio.c1"));
    }

    #[test]
    fn validation_flags_period_length_mismatch() {
        let mut inst = two_plant_instance();
        inst.sinks[0].flow.pop();
        inst.scenario.period_weights.push(0.5);
        let issues = validate_instance(&inst);
        assert!(issues.iter().any(|i| i.path == "sinks[0].flow"));
        assert!(issues.iter().any(|i| i.path == "scenario.period_weights"));
    }

    #[test]
    fn validation_flags_entry_outside_horizon() {
        let mut inst = two_plant_instance();
        inst.scenario.plant_entry.insert("B".into(), 7);
        let issues = validate_instance(&inst);
        assert!(issues
            .iter()
            .any(|i| i.path == "scenario.plant_entry.B" && i.message.contains("outside")));
    }

    #[test]
    fn active_plants_respects_entry_periods() {
        let inst = two_plant_instance();
        let t1: Vec<_> = inst.active_plants(1).unwrap();
        assert_eq!(t1, vec![&PlantId::from("A")]);
        let t2: Vec<_> = inst.active_plants(2).unwrap();
        assert_eq!(t2, vec![&PlantId::from("A"), &PlantId::from("B")]);
        assert_eq!(
            inst.active_plants(0),
            Err(ModelError::PeriodOutOfRange { period: 0, horizon: 2 })
        );
        assert_eq!(
            inst.active_plants(3),
            Err(ModelError::PeriodOutOfRange { period: 3, horizon: 2 })
        );
    }

    #[test]
    fn activity_is_monotone_over_periods() {
        let inst = two_plant_instance();
        for plant in &inst.plants {
            let mut seen = false;
            for t in 1..=inst.horizon() {
                let active = inst.scenario.is_active(plant, t);
                assert!(!seen || active, "plant {plant} left the park at t={t}");
                seen |= active;
            }
        }
    }

    #[test]
    fn hub_flow_cap_defaults_to_peak_source_flow() {
        let mut inst = two_plant_instance();
        assert_relative_eq!(inst.hub_flow_cap(), 10.0);
        inst.economics.hub_flow_max = Some(3.0);
        assert_relative_eq!(inst.hub_flow_cap(), 3.0);
    }
}
