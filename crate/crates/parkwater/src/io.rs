//! Problem and solution files.
//!
//! Instances and solutions are JSON documents mirroring the [`crate::model`]
//! types field by field. Reading an instance is strict about structure
//! (malformed JSON and missing or mistyped fields are errors) but lenient
//! about extras: unrecognized keys produce warnings with their JSON path so
//! typos like `"fow"` don't silently drop data. Every parsed instance also
//! passes through [`validate_instance`] before it is returned.
//!
//! Besides the JSON round trip this module renders two presentation
//! formats: a summary CSV (one row per solved model, megadollar costs) and
//! a Graphviz sketch of one period's water network.

use std::fmt;

use serde_json::Value;
use thiserror::Error;

use crate::model::{validate_instance, NetworkInstance, Solution};
use crate::verify::ResidualReport;

/// How bad a file finding is.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Severity {
    /// The file is usable; something in it looks suspicious.
    Warning,
    /// The file cannot be used as an instance.
    Error,
}

/// One finding while reading a file, located by JSON path.
#[derive(Debug, Clone)]
pub struct FileIssue {
    pub severity: Severity,
    pub path: String,
    pub message: String,
}

impl fmt::Display for FileIssue {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let tag = match self.severity {
            Severity::Warning => "warning",
            Severity::Error => "error",
        };
        write!(f, "{tag}: {}: {}", self.path, self.message)
    }
}

fn format_issues(issues: &[FileIssue]) -> String {
    issues.iter().map(|i| format!("  {i}")).collect::<Vec<_>>().join("\n")
}

/// Why a file could not be read or written.
#[derive(Debug, Error)]
pub enum IoError {
    /// Not JSON at all, or a solution file with the wrong shape.
    #[error("unreadable input: {0}")]
    Syntax(#[from] serde_json::Error),
    /// Structurally readable but not a usable instance.
    #[error("invalid instance:\n{}", format_issues(.0))]
    Invalid(Vec<FileIssue>),
}

/// Expected JSON shape, used only to locate unrecognized keys.
enum Shape {
    /// Object with a fixed key set.
    Object(&'static [(&'static str, Shape)]),
    /// Array of one shape.
    Array(&'static Shape),
    /// Object with arbitrary keys (contaminant maps, plant maps).
    MapOf(&'static Shape),
    /// Scalar; nothing nested to check.
    Leaf,
}

const SERIES: Shape = Shape::Array(&Shape::Leaf);

const SOURCE_SHAPE: Shape = Shape::Object(&[
    ("id", Shape::Leaf),
    ("plant", Shape::Leaf),
    ("flow", SERIES),
    ("conc", Shape::MapOf(&SERIES)),
]);

const SINK_SHAPE: Shape = Shape::Object(&[
    ("id", Shape::Leaf),
    ("plant", Shape::Leaf),
    ("flow", SERIES),
    ("max_conc", Shape::MapOf(&SERIES)),
]);

const REGENERATOR_SHAPE: Shape = Shape::Object(&[
    ("index", Shape::Leaf),
    ("removal_ratio", Shape::MapOf(&Shape::Leaf)),
    ("unit_cost", Shape::Leaf),
]);

const ECONOMICS_SHAPE: Shape = Shape::Object(&[
    ("distance_m", Shape::Leaf),
    ("pipe_unit_cost", Shape::Leaf),
    ("pipe_fixed_cost", Shape::Leaf),
    ("water_density", Shape::Leaf),
    ("pipe_velocity", Shape::Leaf),
    ("annual_hours", Shape::Leaf),
    ("interest_rate", Shape::Leaf),
    ("economic_life", Shape::Leaf),
    ("freshwater_price", Shape::Leaf),
    ("discharge_price", Shape::Leaf),
    ("freshwater_conc", Shape::MapOf(&Shape::Leaf)),
    ("hub_flow_min", Shape::Leaf),
    ("hub_flow_max", Shape::Leaf),
]);

const SCENARIO_SHAPE: Shape = Shape::Object(&[
    ("period_count", Shape::Leaf),
    ("period_weights", SERIES),
    ("plant_entry", Shape::MapOf(&Shape::Leaf)),
]);

const INSTANCE_SHAPE: Shape = Shape::Object(&[
    ("contaminants", SERIES),
    ("plants", SERIES),
    ("sources", Shape::Array(&SOURCE_SHAPE)),
    ("sinks", Shape::Array(&SINK_SHAPE)),
    ("regenerators", Shape::Array(&REGENERATOR_SHAPE)),
    ("economics", ECONOMICS_SHAPE),
    ("scenario", SCENARIO_SHAPE),
    ("notes", SERIES),
]);

fn scan_unknown_keys(value: &Value, shape: &Shape, path: &str, issues: &mut Vec<FileIssue>) {
    match (shape, value) {
        (Shape::Object(fields), Value::Object(map)) => {
            for (key, child) in map {
                match fields.iter().find(|(name, _)| name == key) {
                    Some((_, child_shape)) => {
                        scan_unknown_keys(child, child_shape, &format!("{path}.{key}"), issues);
                    }
                    None => issues.push(FileIssue {
                        severity: Severity::Warning,
                        path: format!("{path}.{key}"),
                        message: "unrecognized key (ignored)".into(),
                    }),
                }
            }
        }
        (Shape::Array(inner), Value::Array(items)) => {
            for (i, item) in items.iter().enumerate() {
                scan_unknown_keys(item, inner, &format!("{path}[{i}]"), issues);
            }
        }
        (Shape::MapOf(inner), Value::Object(map)) => {
            for (key, item) in map {
                scan_unknown_keys(item, inner, &format!("{path}.{key}"), issues);
            }
        }
        // Type mismatches are left for serde, which reports them precisely.
        _ => {}
    }
}

/// Parse an instance document.
///
/// Returns the instance plus any warnings (unrecognized keys). Malformed
/// JSON is [`IoError::Syntax`]; missing/mistyped fields and semantic
/// problems found by [`validate_instance`] are [`IoError::Invalid`].
pub fn parse_instance(text: &str) -> Result<(NetworkInstance, Vec<FileIssue>), IoError> {
    let value: Value = serde_json::from_str(text)?;
    let mut issues = Vec::new();
    scan_unknown_keys(&value, &INSTANCE_SHAPE, "$", &mut issues);
    let instance: NetworkInstance = match serde_json::from_value(value) {
        Ok(inst) => inst,
        Err(e) => {
            issues.push(FileIssue {
                severity: Severity::Error,
                path: "$".into(),
                message: e.to_string(),
            });
            return Err(IoError::Invalid(issues));
        }
    };
    let semantic = validate_instance(&instance);
    if !semantic.is_empty() {
        issues.extend(semantic.into_iter().map(|v| FileIssue {
            severity: Severity::Error,
            path: v.path,
            message: v.message,
        }));
        return Err(IoError::Invalid(issues));
    }
    Ok((instance, issues))
}

/// Render an instance as pretty JSON (newline terminated).
pub fn write_instance(instance: &NetworkInstance) -> String {
    let mut s = serde_json::to_string_pretty(instance).expect("instances serialize");
    s.push('\n');
    s
}

/// Parse a solution document.
pub fn parse_solution(text: &str) -> Result<Solution, IoError> {
    Ok(serde_json::from_str(text)?)
}

/// Render a solution as pretty JSON (newline terminated).
pub fn write_solution(solution: &Solution) -> String {
    let mut s = serde_json::to_string_pretty(solution).expect("solutions serialize");
    s.push('\n');
    s
}

/// Header of the summary CSV.
pub const SUMMARY_CSV_HEADER: &str = "model,freshwater_tph,wastewater_tph,removal_ratio,\
weighted_cost_M,fresh_cost_M,waste_cost_M,pipe_capital_M";

/// One summary line: final-period flows and cost components plus the
/// weighted objective, costs in M$/yr.
#[derive(Debug, Clone)]
pub struct SummaryRow {
    pub model: String,
    pub freshwater_tph: f64,
    pub wastewater_tph: f64,
    pub removal_ratio: f64,
    pub weighted_cost_m: f64,
    pub fresh_cost_m: f64,
    pub waste_cost_m: f64,
    pub pipe_capital_m: f64,
}

impl SummaryRow {
    /// Summarize a solution: flow and component columns describe the final
    /// period (the park's end configuration), the cost column is the
    /// period-weighted total, and the removal ratio is the selected
    /// regenerator's ratio for the first contaminant.
    pub fn from_solution(model: &str, instance: &NetworkInstance, solution: &Solution) -> Self {
        let last = solution.final_period();
        let removal_ratio = instance
            .regenerator(solution.regenerator)
            .and_then(|r| {
                instance.contaminants.first().and_then(|c| r.removal_ratio.get(c)).copied()
            })
            .unwrap_or(0.0);
        SummaryRow {
            model: model.to_string(),
            freshwater_tph: last.total_fresh(),
            wastewater_tph: last.total_discharge(),
            removal_ratio,
            weighted_cost_m: solution.weighted_cost(&instance.scenario.period_weights) / 1e6,
            fresh_cost_m: last.costs.freshwater_cost / 1e6,
            waste_cost_m: last.costs.discharge_cost / 1e6,
            pipe_capital_m: last.costs.investment / 1e6,
        }
    }
}

/// Render summary rows as CSV (flows to 0.01 t/h, costs to 0.01 M$).
pub fn write_summary_csv(rows: &[SummaryRow]) -> String {
    let mut out = String::from(SUMMARY_CSV_HEADER);
    out.push('\n');
    for r in rows {
        out.push_str(&format!(
            "{},{:.2},{:.2},{},{:.2},{:.2},{:.2},{:.2}\n",
            r.model,
            r.freshwater_tph,
            r.wastewater_tph,
            r.removal_ratio,
            r.weighted_cost_m,
            r.fresh_cost_m,
            r.waste_cost_m,
            r.pipe_capital_m,
        ));
    }
    out
}

/// Graphviz sketch of one period's network: a cluster per plant with its
/// sources, sinks and effluent header, plus freshwater, hub and discharge
/// nodes. Flows below 0.005 t/h are left out to keep the picture readable.
pub fn write_network_dot(
    instance: &NetworkInstance,
    solution: &Solution,
    period: usize,
) -> Result<String, IoError> {
    let state = solution
        .periods
        .iter()
        .find(|p| p.period == period)
        .ok_or_else(|| {
            IoError::Invalid(vec![FileIssue {
                severity: Severity::Error,
                path: format!("$.periods[{period}]"),
                message: format!(
                    "solution has no period {period} (it covers {})",
                    solution.periods.len()
                ),
            }])
        })?;
    let active = instance.active_plants(period).map_err(|e| {
        IoError::Invalid(vec![FileIssue {
            severity: Severity::Error,
            path: "$.scenario".into(),
            message: e.to_string(),
        }])
    })?;
    const EPS: f64 = 5e-3;
    let mut dot = String::new();
    dot.push_str("digraph network {\n");
    dot.push_str("  rankdir=LR;\n  node [shape=box, fontsize=10];\n");
    dot.push_str("  fresh [label=\"freshwater\", shape=ellipse];\n");
    dot.push_str("  hub [label=\"regeneration hub\", shape=ellipse];\n");
    dot.push_str("  env [label=\"discharge\", shape=ellipse];\n");
    for plant in &active {
        dot.push_str(&format!("  subgraph \"cluster_{plant}\" {{\n"));
        dot.push_str(&format!("    label=\"plant {plant}\";\n"));
        for src in instance.sources_of(plant) {
            dot.push_str(&format!("    src_{} [label=\"src {}\"];\n", src.id, src.id));
        }
        for snk in instance.sinks_of(plant) {
            dot.push_str(&format!("    snk_{} [label=\"snk {}\"];\n", snk.id, snk.id));
        }
        dot.push_str(&format!(
            "    header_{plant} [label=\"{plant} header\", shape=cds];\n"
        ));
        dot.push_str(&format!(
            "    inlet_{plant} [label=\"{plant} inlet\", shape=cds];\n"
        ));
        dot.push_str("  }\n");
    }
    let edge = |out: &mut String, from: &str, to: &str, flow: f64| {
        if flow > EPS {
            out.push_str(&format!("  {from} -> {to} [label=\"{flow:.2}\"];\n"));
        }
    };
    for r in &state.reuse {
        edge(&mut dot, &format!("src_{}", r.source), &format!("snk_{}", r.sink), r.flow);
    }
    for plant in &active {
        for src in instance.sources_of(plant) {
            edge(
                &mut dot,
                &format!("src_{}", src.id),
                &format!("header_{plant}"),
                state.effluent_of(src.id),
            );
        }
        for snk in instance.sinks_of(plant) {
            edge(&mut dot, "fresh", &format!("snk_{}", snk.id), state.fresh_to(snk.id));
            edge(
                &mut dot,
                &format!("inlet_{plant}"),
                &format!("snk_{}", snk.id),
                state.sink_import_of(snk.id),
            );
        }
        edge(&mut dot, &format!("header_{plant}"), "hub", state.export_of(plant));
        edge(&mut dot, &format!("header_{plant}"), "env", state.discharge_of(plant));
        edge(&mut dot, "hub", &format!("inlet_{plant}"), state.hub_import_of(plant));
    }
    dot.push_str("}\n");
    Ok(dot)
}

/// Human-readable account of a solution: objective, hub choice, per-period
/// flows and costs, and the worst residuals from the independent checker.
pub fn write_report(
    instance: &NetworkInstance,
    solution: &Solution,
    residuals: &ResidualReport,
) -> String {
    let mut out = String::new();
    out.push_str(&format!(
        "objective ({}): {:.6}\n",
        solution.objective, solution.objective_value
    ));
    let reg = instance.regenerator(solution.regenerator);
    match reg {
        Some(r) => {
            let ratios: Vec<String> = r
                .removal_ratio
                .iter()
                .map(|(c, rr)| format!("{c} {:.0}%", rr * 100.0))
                .collect();
            out.push_str(&format!(
                "hub regenerator: option {} (removal {}, {:.3} $/kg)\n",
                r.index,
                ratios.join(", "),
                r.unit_cost
            ));
        }
        None => out.push_str(&format!(
            "hub regenerator: option {} (not in catalog!)\n",
            solution.regenerator
        )),
    }
    for state in &solution.periods {
        let c = &state.costs;
        out.push_str(&format!(
            "period {}: fresh {:.2} t/h, discharge {:.2} t/h, hub {:.2} t/h, cost {:.0} $/yr \
             (capital {:.0}, fresh {:.0}, discharge {:.0}, regen {:.0})\n",
            state.period,
            state.total_fresh(),
            state.total_discharge(),
            state.export.iter().map(|p| p.value).sum::<f64>(),
            c.total(),
            c.investment,
            c.freshwater_cost,
            c.discharge_cost,
            c.regeneration_cost,
        ));
    }
    out.push_str(&format!(
        "residuals: max scaled {:.3e} over {} checks",
        residuals.max_scaled(),
        residuals.entries.len()
    ));
    if residuals.issues.is_empty() {
        out.push('\n');
    } else {
        out.push_str(&format!(", {} structural issues:\n", residuals.issues.len()));
        for issue in &residuals.issues {
            out.push_str(&format!("  {issue}\n"));
        }
    }
    for worst in residuals.worst(3) {
        out.push_str(&format!(
            "  {}: raw {:.3e}, scaled {:.3e}\n",
            worst.label, worst.raw, worst.scaled
        ));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ObjectiveKind;
    use crate::solver::{solve, SolverConfig};
    use crate::testutil::{tiny_hub_instance, tiny_two_plant_instance};
    use crate::verify::residuals;

    fn solved(instance: &NetworkInstance) -> Solution {
        let config = SolverConfig {
            objective: ObjectiveKind::Cost,
            gap_rel: 1e-4,
            time_limit: None,
            max_nodes: Some(20_000),
            deterministic: true,
            record_nodes: false,
        };
        solve(instance, &config).unwrap().solution.expect("solvable fixture")
    }

    #[test]
    fn instance_round_trip_preserves_everything() {
        let inst = tiny_two_plant_instance();
        let text = write_instance(&inst);
        let (parsed, warnings) = parse_instance(&text).unwrap();
        assert!(warnings.is_empty(), "{warnings:?}");
        assert_eq!(parsed, inst);
    }

    #[test]
    fn unknown_keys_warn_with_their_path() {
        let inst = tiny_hub_instance();
        let mut value: Value = serde_json::from_str(&write_instance(&inst)).unwrap();
        value["colour"] = Value::String("blue".into());
        value["sources"][0]["fow"] = Value::from(3.0);
        let text = serde_json::to_string(&value).unwrap();
        let (parsed, warnings) = parse_instance(&text).unwrap();
        assert_eq!(parsed, inst);
        let paths: Vec<&str> = warnings.iter().map(|w| w.path.as_str()).collect();
        assert!(paths.contains(&"$.colour"), "{paths:?}");
        assert!(paths.contains(&"$.sources[0].fow"), "{paths:?}");
        assert!(warnings.iter().all(|w| w.severity == Severity::Warning));
    }

    #[test]
    fn missing_field_is_invalid_not_syntax() {
        let inst = tiny_hub_instance();
        let mut value: Value = serde_json::from_str(&write_instance(&inst)).unwrap();
        value["sources"][0].as_object_mut().unwrap().remove("flow");
        let text = serde_json::to_string(&value).unwrap();
        match parse_instance(&text) {
            Err(IoError::Invalid(issues)) => {
                assert!(issues.iter().any(|i| i.message.contains("flow")), "{issues:?}");
            }
            other => panic!("expected Invalid, got {other:?}"),
        }
    }

    #[test]
    fn malformed_json_is_a_syntax_error() {
        match parse_instance("{ not json") {
            Err(IoError::Syntax(_)) => {}
            other => panic!("expected Syntax, got {other:?}"),
        }
    }

    #[test]
    fn semantic_validation_failures_are_reported() {
        let mut inst = tiny_hub_instance();
        inst.scenario.period_weights = vec![1.0, 1.0]; // horizon is 1
        let text = write_instance(&inst);
        match parse_instance(&text) {
            Err(IoError::Invalid(issues)) => {
                assert!(
                    issues.iter().any(|i| i.path.contains("period_weights")),
                    "{issues:?}"
                );
            }
            other => panic!("expected Invalid, got {other:?}"),
        }
    }

    #[test]
    fn solution_round_trip_preserves_everything() {
        let inst = tiny_two_plant_instance();
        let sol = solved(&inst);
        let text = write_solution(&sol);
        let parsed = parse_solution(&text).unwrap();
        assert_eq!(parsed, sol);
    }

    #[test]
    fn summary_csv_has_exact_header_and_rounding() {
        let inst = tiny_hub_instance();
        let sol = solved(&inst);
        let row = SummaryRow::from_solution("tiny", &inst, &sol);
        let csv = write_summary_csv(&[row]);
        let mut lines = csv.lines();
        assert_eq!(
            lines.next().unwrap(),
            "model,freshwater_tph,wastewater_tph,removal_ratio,weighted_cost_M,\
fresh_cost_M,waste_cost_M,pipe_capital_M"
        );
        let data = lines.next().unwrap();
        assert!(data.starts_with("tiny,5.00,5.00,0.5,0.05,"), "{data}");
    }

    #[test]
    fn dot_sketch_lists_plants_and_flows() {
        let inst = tiny_two_plant_instance();
        let sol = solved(&inst);
        let dot = write_network_dot(&inst, &sol, 1).unwrap();
        assert!(dot.contains("subgraph \"cluster_A\""));
        assert!(dot.contains("subgraph \"cluster_B\""));
        // The cost optimum reuses and regenerates everything, so the sketch
        // must show in-plant arcs and hub traffic.
        assert!(dot.contains("src_1 -> snk_1"));
        assert!(dot.contains("header_A -> hub"));
        assert!(dot.contains("hub -> inlet_B"));
        assert!(dot.starts_with("digraph network {"));
        assert!(write_network_dot(&inst, &sol, 9).is_err());
    }

    #[test]
    fn report_mentions_objective_and_residuals() {
        let inst = tiny_hub_instance();
        let sol = solved(&inst);
        let rep = residuals(&inst, &sol);
        let text = write_report(&inst, &sol, &rep);
        assert!(text.contains("objective (cost)"));
        assert!(text.contains("hub regenerator: option"));
        assert!(text.contains("period 1:"));
        assert!(text.contains("residuals: max scaled"));
    }
}
