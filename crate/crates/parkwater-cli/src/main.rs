//! Command-line driver: validate instances, solve them, re-render solved
//! networks, and sweep the planning horizon to see how staging affects cost.
//!
//! Exit codes: 0 success, 1 instance validation errors, 2 unreadable or
//! malformed file, 3 proven infeasible, 4 search ended without a plan,
//! 5 solution file fails the residual check.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Duration;

use clap::{Args, Parser, Subcommand, ValueEnum};
use parkwater::io::{self, FileIssue, Severity, SummaryRow};
use parkwater::model::{NetworkInstance, ObjectiveKind, Solution};
use parkwater::solver::{solve, SolverConfig, TerminationReason};
use parkwater::verify;

const EXIT_VALIDATION: u8 = 1;
const EXIT_UNREADABLE: u8 = 2;
const EXIT_INFEASIBLE: u8 = 3;
const EXIT_NO_PLAN: u8 = 4;
const EXIT_RESIDUALS: u8 = 5;

#[derive(Parser)]
#[command(name = "parkwater", version, about = "Plan cross-plant water reuse networks")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Check instance files and print every issue found.
    Validate {
        /// Instance documents to check.
        #[arg(required = true)]
        paths: Vec<PathBuf>,
    },
    /// Solve an instance and write solution, report, summary and DOT files.
    Solve {
        /// Instance document.
        instance: PathBuf,
        #[command(flatten)]
        opts: SolveOpts,
    },
    /// Re-render a solved network: text report on stdout, DOT files on request.
    Report {
        /// Instance the solution belongs to.
        instance: PathBuf,
        /// Solution document written by `solve`.
        solution: PathBuf,
        /// Directory for regenerated DOT files (omit to skip them).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Solve every prefix of the planning horizon (r = 1..=R periods) and
    /// tabulate how the weighted cost moves with the number of periods.
    Sweep {
        /// Instance document.
        instance: PathBuf,
        #[command(flatten)]
        opts: SolveOpts,
    },
}

#[derive(Args)]
struct SolveOpts {
    /// What to minimize.
    #[arg(long, value_enum, default_value_t = CliObjective::Cost)]
    objective: CliObjective,
    /// Relative optimality gap at which the search stops.
    #[arg(long, default_value_t = 0.01)]
    gap: f64,
    /// Wall-clock budget in seconds; ignored while --deterministic is on.
    #[arg(long, value_name = "SECONDS", default_value_t = 300.0)]
    time_limit: f64,
    /// Branch-and-bound node budget.
    #[arg(long, default_value_t = 20_000)]
    max_nodes: usize,
    /// Reproducible runs: the clock is ignored so the explored tree (and
    /// every output byte) depends only on the input.
    #[arg(long, default_value_t = true, action = clap::ArgAction::Set, value_name = "BOOL")]
    deterministic: bool,
    /// Output directory (default: the instance path with extension `out`).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum CliObjective {
    Cost,
    Freshwater,
}

impl From<CliObjective> for ObjectiveKind {
    fn from(o: CliObjective) -> Self {
        match o {
            CliObjective::Cost => ObjectiveKind::Cost,
            CliObjective::Freshwater => ObjectiveKind::Freshwater,
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let code = match cli.command {
        Command::Validate { paths } => cmd_validate(&paths),
        Command::Solve { instance, opts } => cmd_solve(&instance, &opts),
        Command::Report { instance, solution, out } => {
            cmd_report(&instance, &solution, out.as_deref())
        }
        Command::Sweep { instance, opts } => cmd_sweep(&instance, &opts),
    };
    ExitCode::from(code)
}

fn print_issue(path: &Path, issue: &FileIssue) {
    let sev = match issue.severity {
        Severity::Error => "error",
        Severity::Warning => "warning",
    };
    eprintln!("{}: {sev}: {}: {}", path.display(), issue.path, issue.message);
}

/// Load and parse an instance, printing diagnostics; `Err` carries the exit
/// code for the failure class: unreadable or syntactically broken files are
/// [`EXIT_UNREADABLE`], semantically invalid ones [`EXIT_VALIDATION`].
fn load_instance(path: &Path) -> Result<NetworkInstance, u8> {
    let text = match fs::read_to_string(path) {
        Ok(t) => t,
        Err(e) => {
            eprintln!("{}: error: {e}", path.display());
            return Err(EXIT_UNREADABLE);
        }
    };
    match io::parse_instance(&text) {
        Ok((instance, warnings)) => {
            for issue in &warnings {
                print_issue(path, issue);
            }
            Ok(instance)
        }
        Err(e @ io::IoError::Syntax(_)) => {
            eprintln!("{}: error: {e}", path.display());
            Err(EXIT_UNREADABLE)
        }
        Err(io::IoError::Invalid(issues)) => {
            for issue in &issues {
                print_issue(path, issue);
            }
            Err(EXIT_VALIDATION)
        }
    }
}

fn cmd_validate(paths: &[PathBuf]) -> u8 {
    let mut worst = 0u8;
    for path in paths {
        match load_instance(path) {
            Err(code) => worst = worst.max(code),
            Ok(_) => println!("{}: ok", path.display()),
        }
    }
    worst
}

fn solver_config(opts: &SolveOpts) -> SolverConfig {
    SolverConfig {
        objective: opts.objective.into(),
        gap_rel: opts.gap,
        time_limit: Some(Duration::from_secs_f64(opts.time_limit.max(0.0))),
        max_nodes: Some(opts.max_nodes),
        deterministic: opts.deterministic,
        record_nodes: false,
    }
}

fn out_dir(instance: &Path, opts: &SolveOpts) -> PathBuf {
    opts.out.clone().unwrap_or_else(|| instance.with_extension("out"))
}

fn model_name(instance: &Path) -> String {
    instance
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "instance".to_owned())
}

fn cmd_solve(instance_path: &Path, opts: &SolveOpts) -> u8 {
    let instance = match load_instance(instance_path) {
        Ok(i) => i,
        Err(code) => return code,
    };
    let config = solver_config(opts);
    let report = match solve(&instance, &config) {
        Ok(r) => r,
        Err(e) => {
            eprintln!("{}: error: {e}", instance_path.display());
            return EXIT_NO_PLAN;
        }
    };
    println!("termination {}", report.termination);
    println!("nodes {}", report.nodes_explored);
    println!("lp_solves {}", report.lp_solves);
    if report.termination == TerminationReason::Infeasible {
        eprintln!("{}: no feasible operating plan exists", instance_path.display());
        return EXIT_INFEASIBLE;
    }
    let Some(solution) = &report.solution else {
        eprintln!(
            "{}: search stopped ({}) before finding a plan; raise --max-nodes or --time-limit",
            instance_path.display(),
            report.termination
        );
        return EXIT_NO_PLAN;
    };
    println!("objective {:.6}", solution.objective_value);
    println!("lower_bound {:.6}", report.lower_bound);
    println!("gap_rel {:.6}", report.gap_rel);
    println!("regenerator {}", solution.regenerator);
    let last = solution.final_period();
    println!("fresh_tph {:.2}", last.total_fresh());
    println!("discharge_tph {:.2}", last.total_discharge());

    let dir = out_dir(instance_path, opts);
    if let Err(e) = write_solve_outputs(&dir, &model_name(instance_path), &instance, solution) {
        eprintln!("{}: error: {e}", dir.display());
        return EXIT_UNREADABLE;
    }
    println!("out_dir {}", dir.display());
    0
}

fn write_solve_outputs(
    dir: &Path,
    model: &str,
    instance: &NetworkInstance,
    solution: &Solution,
) -> Result<(), String> {
    let fail = |e: std::io::Error| e.to_string();
    fs::create_dir_all(dir).map_err(fail)?;
    fs::write(dir.join("solution.json"), io::write_solution(solution)).map_err(fail)?;
    let residuals = verify::residuals(instance, solution);
    fs::write(dir.join("report.txt"), io::write_report(instance, solution, &residuals))
        .map_err(fail)?;
    let row = SummaryRow::from_solution(model, instance, solution);
    fs::write(dir.join("summary.csv"), io::write_summary_csv(&[row])).map_err(fail)?;
    for state in &solution.periods {
        let dot = io::write_network_dot(instance, solution, state.period)
            .map_err(|e| e.to_string())?;
        fs::write(dir.join(format!("network_t{}.dot", state.period)), dot).map_err(fail)?;
    }
    Ok(())
}

fn cmd_report(instance_path: &Path, solution_path: &Path, out: Option<&Path>) -> u8 {
    let instance = match load_instance(instance_path) {
        Ok(i) => i,
        Err(code) => return code,
    };
    let text = match fs::read_to_string(solution_path) {
        Ok(t) => t,
        Err(e) => {
            eprintln!("{}: error: {e}", solution_path.display());
            return EXIT_UNREADABLE;
        }
    };
    let solution = match io::parse_solution(&text) {
        Ok(s) => s,
        Err(e) => {
            eprintln!("{}: error: {e}", solution_path.display());
            return EXIT_UNREADABLE;
        }
    };
    let residuals = verify::residuals(&instance, &solution);
    if !residuals.pass(1e-6) {
        eprintln!(
            "{}: solution violates the network equations (stale or edited file?)",
            solution_path.display()
        );
        for entry in residuals.worst(5) {
            eprintln!("  {} (t{}) residual {:.3e}", entry.label, entry.period, entry.scaled);
        }
        return EXIT_RESIDUALS;
    }
    print!("{}", io::write_report(&instance, &solution, &residuals));
    if let Some(dir) = out {
        if let Err(e) = fs::create_dir_all(dir) {
            eprintln!("{}: error: {e}", dir.display());
            return EXIT_UNREADABLE;
        }
        for state in &solution.periods {
            match io::write_network_dot(&instance, &solution, state.period) {
                Ok(dot) => {
                    let path = dir.join(format!("network_t{}.dot", state.period));
                    if let Err(e) = fs::write(&path, dot) {
                        eprintln!("{}: error: {e}", path.display());
                        return EXIT_UNREADABLE;
                    }
                }
                Err(e) => {
                    eprintln!("{}: error: {e}", solution_path.display());
                    return EXIT_UNREADABLE;
                }
            }
        }
    }
    0
}

/// Restrict a planning problem to its first `r` periods.
///
/// Plants that only enter after period `r` disappear along with their
/// sources and sinks; the remaining period weights are rescaled to keep
/// their proportions and sum to one. `r = R` returns the instance as-is.
fn truncate_horizon(instance: &NetworkInstance, r: usize) -> NetworkInstance {
    let mut out = instance.clone();
    if r >= instance.scenario.period_count {
        return out;
    }
    out.scenario.period_count = r;
    out.scenario.period_weights.truncate(r);
    let sum: f64 = out.scenario.period_weights.iter().sum();
    if sum > 0.0 {
        for w in &mut out.scenario.period_weights {
            *w /= sum;
        }
    } else {
        out.scenario.period_weights = vec![1.0 / r as f64; r];
    }
    out.scenario.plant_entry.retain(|_, &mut e| e <= r);
    let keep = out.scenario.plant_entry.clone();
    out.plants.retain(|p| keep.contains_key(p));
    out.sources.retain(|s| keep.contains_key(&s.plant));
    out.sinks.retain(|s| keep.contains_key(&s.plant));
    for src in &mut out.sources {
        src.flow.truncate(r);
        for series in src.conc.values_mut() {
            series.truncate(r);
        }
    }
    for snk in &mut out.sinks {
        snk.flow.truncate(r);
        for series in snk.max_conc.values_mut() {
            series.truncate(r);
        }
    }
    out
}

fn cmd_sweep(instance_path: &Path, opts: &SolveOpts) -> u8 {
    let instance = match load_instance(instance_path) {
        Ok(i) => i,
        Err(code) => return code,
    };
    let config = solver_config(opts);
    let model = model_name(instance_path);
    let horizon = instance.scenario.period_count;
    let mut lines = vec![format!("{},status", io::SUMMARY_CSV_HEADER)];
    let mut successes = 0usize;
    let mut failure_code = EXIT_NO_PLAN;
    for r in 1..=horizon {
        let truncated = truncate_horizon(&instance, r);
        let name = format!("{model}_r{r}");
        match solve(&truncated, &config) {
            Ok(report) => match &report.solution {
                Some(solution) => {
                    let row = SummaryRow::from_solution(&name, &truncated, solution);
                    let csv = io::write_summary_csv(&[row]);
                    let line = csv.lines().nth(1).unwrap_or_default().to_owned();
                    lines.push(format!("{line},{}", report.termination));
                    successes += 1;
                }
                None => {
                    if report.termination == TerminationReason::Infeasible {
                        failure_code = EXIT_INFEASIBLE;
                    }
                    lines.push(format!("{name},,,,,,,,{}", report.termination));
                }
            },
            Err(e) => {
                eprintln!("{name}: error: {e}");
                lines.push(format!("{name},,,,,,,,error"));
            }
        }
    }
    let mut csv = lines.join("\n");
    csv.push('\n');
    print!("{csv}");
    let dir = out_dir(instance_path, opts);
    if let Err(e) = fs::create_dir_all(&dir).and_then(|()| fs::write(dir.join("sweep.csv"), &csv))
    {
        eprintln!("{}: error: {e}", dir.display());
        return EXIT_UNREADABLE;
    }
    if successes > 0 {
        0
    } else {
        failure_code
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use parkwater::model::validate_instance;

    fn staged() -> NetworkInstance {
        let text = std::fs::read_to_string(concat!(
            env!("CARGO_MANIFEST_DIR"),
            "/../../data/eip1_case2.json"
        ))
        .unwrap();
        io::parse_instance(&text).unwrap().0
    }

    #[test]
    fn truncation_keeps_only_entered_plants() {
        let full = staged();
        let one = truncate_horizon(&full, 1);
        assert_eq!(one.scenario.period_count, 1);
        assert_eq!(one.scenario.period_weights, vec![1.0]);
        assert_eq!(one.plants.len(), 1, "only the founding plant stays");
        assert!(one.sources.iter().all(|s| s.flow.len() == 1));
        assert!(validate_instance(&one).is_empty());

        let two = truncate_horizon(&full, 2);
        assert_eq!(two.plants.len(), 2);
        let wsum: f64 = two.scenario.period_weights.iter().sum();
        assert!((wsum - 1.0).abs() < 1e-12);
        assert!(validate_instance(&two).is_empty());
    }

    #[test]
    fn truncation_to_full_horizon_is_identity() {
        let full = staged();
        assert_eq!(truncate_horizon(&full, 3), full);
        assert_eq!(truncate_horizon(&full, 9), full);
    }
}
