//! `tiergate` command-line driver.
//!
//! Exit codes: 0 on success, 2 when the scenario or arguments are invalid,
//! 3 when a run or an output write fails.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use thiserror::Error;

use tiergate::config::{ConfigError, ScenarioConfig, BUILTIN_SCENARIOS};
use tiergate::output::{emit_comparison, emit_sweep, emit_trace, Provenance, TraceFormat};
use tiergate::sim::{
    compare, run, sweep, Comparison, PhaseMetrics, Policy, RunSummary, SweepParam, SweepPoint,
};
use tiergate::{Overrides, Scenario};

#[derive(Debug, Parser)]
#[command(
    name = "tiergate",
    version,
    about = "Simulate safe query gating across local, edge and cloud strategies"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Run one policy on one seed.
    Run {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value = "safeobo")]
        policy: Policy,
        /// Defaults to the scenario's first seed.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Run several policies over several seeds and compare costs.
    Compare {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_delimiter = ',', default_value = "safeobo,uniform,oracle")]
        policies: Vec<Policy>,
        /// Baseline for cost reductions; added to the comparison if missing.
        #[arg(long, default_value = "always:72b-graphrag")]
        reference: Policy,
        /// Defaults to the scenario's seed list.
        #[arg(long, value_delimiter = ',')]
        seeds: Option<Vec<u64>>,
    },
    /// Check a scenario without running it.
    Validate {
        #[arg(long)]
        scenario: String,
        /// Print the scenario in canonical form.
        #[arg(long)]
        print: bool,
    },
    /// Vary one parameter and report seed-averaged metrics per value.
    Sweep {
        #[command(flatten)]
        common: Common,
        /// warmup, beta, qos-acc or qos-delay
        #[arg(long)]
        param: SweepParam,
        #[arg(long, value_delimiter = ',', required = true)]
        values: Vec<f64>,
        #[arg(long, default_value = "safeobo")]
        policy: Policy,
        #[arg(long, value_delimiter = ',')]
        seeds: Option<Vec<u64>>,
    },
}

#[derive(Debug, Args)]
struct Common {
    /// Scenario file, or one of the built-in names.
    #[arg(long)]
    scenario: String,
    #[arg(long)]
    steps: Option<u64>,
    /// Warm-up length T0.
    #[arg(long)]
    warmup: Option<u64>,
    /// Confidence multiplier for both the safe set and acquisition.
    #[arg(long)]
    beta: Option<f64>,
    #[arg(long = "qos-acc")]
    qos_acc: Option<f64>,
    #[arg(long = "qos-delay")]
    qos_delay: Option<f64>,
    /// Directory for trace, summary and manifest files.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, default_value = "csv")]
    format: TraceFormat,
}

impl Common {
    fn overrides(&self) -> Overrides {
        Overrides {
            steps: self.steps,
            warmup_steps: self.warmup,
            beta: self.beta,
            min_accuracy: self.qos_acc,
            max_delay_s: self.qos_delay,
        }
    }
}

#[derive(Debug, Error)]
enum CliError {
    #[error("{0}")]
    Invalid(String),
    #[error("{0}")]
    Runtime(String),
}

impl CliError {
    fn code(&self) -> u8 {
        match self {
            CliError::Invalid(_) => 2,
            CliError::Runtime(_) => 3,
        }
    }
}

impl From<ConfigError> for CliError {
    fn from(e: ConfigError) -> Self {
        CliError::Invalid(e.to_string())
    }
}

fn runtime(e: impl std::fmt::Display) -> CliError {
    CliError::Runtime(e.to_string())
}

struct Loaded {
    scenario: Scenario,
    provenance: Provenance,
}

/// Reads a scenario file or built-in and applies the command-line overrides.
fn load(name: &str, overrides: Overrides) -> Result<Loaded, CliError> {
    let path = Path::new(name);
    let (config, bytes) = if path.is_file() {
        let bytes = std::fs::read(path)
            .map_err(|e| CliError::Invalid(format!("cannot read {name}: {e}")))?;
        (ScenarioConfig::load_and_validate(path)?, bytes)
    } else if BUILTIN_SCENARIOS.contains(&name) {
        let config = ScenarioConfig::builtin(name)?;
        let text = ScenarioConfig::builtin_source(name)
            .map(str::to_owned)
            .unwrap_or_else(|| config.to_toml_string());
        (config, text.into_bytes())
    } else {
        return Err(CliError::Invalid(format!(
            "no scenario file {name:?} and no built-in of that name (built-ins: {})",
            BUILTIN_SCENARIOS.join(", ")
        )));
    };
    let mut config = config;
    config.apply(&overrides)?;
    let scenario = Scenario::new(config)?;
    let provenance = Provenance::new(name, &bytes, overrides);
    Ok(Loaded {
        scenario,
        provenance,
    })
}

fn check_policy(scenario: &Scenario, policy: &Policy) -> Result<(), CliError> {
    if let Policy::AlwaysArm(arm) = policy {
        if scenario.config.arm_index(arm).is_none() {
            return Err(CliError::Invalid(format!(
                "policy {policy} names an unknown arm; arms are {}",
                scenario.arm_names().join(", ")
            )));
        }
    }
    Ok(())
}

fn seeds_or_default(seeds: Option<Vec<u64>>, scenario: &Scenario) -> Result<Vec<u64>, CliError> {
    let seeds = seeds.unwrap_or_else(|| scenario.config.seeds.clone());
    if seeds.is_empty() {
        return Err(CliError::Invalid("no seeds given".into()));
    }
    Ok(seeds)
}

fn metrics_line(label: &str, m: &PhaseMetrics) -> String {
    format!(
        "  {label:<8} steps {:>6}  cost {:>9.3}  accuracy {:.4}  delay {:>7.3}s  violations {:.4}",
        m.steps, m.mean_cost, m.accuracy, m.mean_delay_s, m.violation_rate
    )
}

fn print_summary(s: &RunSummary) {
    println!(
        "{} seed {} ({} steps, warm-up {})",
        s.policy, s.seed, s.total_steps, s.warmup_steps
    );
    println!("{}", metrics_line("overall", &s.overall));
    println!("{}", metrics_line("warm-up", &s.warmup));
    println!("{}", metrics_line("exploit", &s.exploit));
    let counts: Vec<String> = s
        .arm_counts
        .iter()
        .map(|(a, n)| format!("{a}={n}"))
        .collect();
    println!("  arms     {}", counts.join(" "));
}

fn print_comparison(c: &Comparison) {
    println!(
        "{:<24} {:>12} {:>10} {:>10} {:>11} {:>11}",
        "policy", "exploit cost", "stddev", "accuracy", "violations", "reduction"
    );
    for row in &c.rows {
        println!(
            "{:<24} {:>12.3} {:>10.3} {:>10.4} {:>11.4} {:>10.1}%",
            row.policy.to_string(),
            row.exploit.mean_cost,
            row.exploit_cost_stddev,
            row.exploit.accuracy,
            row.exploit.violation_rate,
            100.0 * row.reduction_exploit
        );
    }
    println!(
        "reductions are exploitation-phase cost relative to {}",
        c.reference
    );
}

fn print_sweep(points: &[SweepPoint]) {
    println!(
        "{:<10} {:>12} {:>10} {:>11}",
        "value", "exploit cost", "accuracy", "violations"
    );
    for p in points {
        println!(
            "{:<10} {:>12.3} {:>10.4} {:>11.4}",
            p.value, p.exploit.mean_cost, p.exploit.accuracy, p.exploit.violation_rate
        );
    }
}

fn report_files(files: &[PathBuf]) {
    for f in files {
        println!("wrote {}", f.display());
    }
}

fn execute(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Validate { scenario, print } => {
            let loaded = load(&scenario, Overrides::default())?;
            let cfg = &loaded.scenario.config;
            if print {
                print!("{}", cfg.to_toml_string());
            } else {
                println!(
                    "{}: ok ({} arms, {} steps, {} seeds, sha256 {})",
                    cfg.name,
                    cfg.arms.len(),
                    cfg.steps,
                    cfg.seeds.len(),
                    loaded.provenance.config_sha256
                );
            }
            Ok(())
        }
        Command::Run {
            common,
            policy,
            seed,
        } => {
            let loaded = load(&common.scenario, common.overrides())?;
            let scenario = &loaded.scenario;
            check_policy(scenario, &policy)?;
            let seed = seed.or(scenario.config.seeds.first().copied()).unwrap_or(0);
            let out = run(scenario, &policy, seed, scenario.config.steps).map_err(runtime)?;
            print_summary(&out.summary);
            if let Some(dir) = &common.out {
                let emitted = emit_trace(
                    &out.records,
                    &out.summary,
                    &loaded.provenance,
                    dir,
                    common.format,
                )
                .map_err(runtime)?;
                report_files(&emitted.files);
            }
            Ok(())
        }
        Command::Compare {
            common,
            policies,
            reference,
            seeds,
        } => {
            let loaded = load(&common.scenario, common.overrides())?;
            let scenario = &loaded.scenario;
            for p in policies.iter().chain([&reference]) {
                check_policy(scenario, p)?;
            }
            let seeds = seeds_or_default(seeds, scenario)?;
            let cmp = compare(
                scenario,
                &policies,
                &reference,
                &seeds,
                scenario.config.steps,
            )
            .map_err(runtime)?;
            print_comparison(&cmp);
            if let Some(dir) = &common.out {
                let emitted = emit_comparison(&cmp, &loaded.provenance, dir, common.format)
                    .map_err(runtime)?;
                report_files(&emitted.files);
            }
            Ok(())
        }
        Command::Sweep {
            common,
            param,
            values,
            policy,
            seeds,
        } => {
            let loaded = load(&common.scenario, common.overrides())?;
            let scenario = &loaded.scenario;
            check_policy(scenario, &policy)?;
            let seeds = seeds_or_default(seeds, scenario)?;
            let steps = scenario.config.steps;
            // A bad value (say a zero warm-up) is a configuration problem, not a crash.
            let points =
                sweep(scenario, param, &values, &policy, &seeds, steps).map_err(|e| match e {
                    tiergate::sim::SimError::Config(c) => CliError::from(c),
                    other => runtime(other),
                })?;
            print_sweep(&points);
            if let Some(dir) = &common.out {
                let emitted = emit_sweep(
                    &points,
                    &policy.to_string(),
                    &seeds,
                    steps,
                    &loaded.provenance,
                    dir,
                    common.format,
                )
                .map_err(runtime)?;
                report_files(&emitted.files);
            }
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match execute(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.code())
        }
    }
}
