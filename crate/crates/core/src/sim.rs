//! Episode loop and baselines.
//!
//! Each step: the home edge issues a query, link delays are sampled, the best
//! edge is located, the policy picks an arm, the environment realizes the
//! outcome, the gate learns from it, and finally the home edge's knowledge
//! store records the query. Outcomes are keyed by `(seed, step, arm)`, so
//! different policies on the same seed face the same queries and draws.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::config::{ConfigError, Overrides, Scenario};
use crate::cost::{CostError, Outcome};
use crate::environment::Environment;
use crate::gate::{Context, Gate, GateError, Phase, QosSpec};
use crate::knowledge::KnowledgeError;
use crate::rng::{stream_rng, Stream};

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(into = "String", try_from = "String")]
pub enum Policy {
    SafeObo,
    /// Always the named arm.
    AlwaysArm(String),
    UniformRandom,
    /// Cheapest arm meeting QoS in expectation, from ground truth.
    Oracle,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("unknown policy {0:?}; expected safeobo, uniform, oracle or always:<arm>")]
pub struct PolicyParseError(String);

impl FromStr for Policy {
    type Err = PolicyParseError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "safeobo" => Ok(Policy::SafeObo),
            "uniform" => Ok(Policy::UniformRandom),
            "oracle" => Ok(Policy::Oracle),
            _ => match s.strip_prefix("always:") {
                Some(arm) if !arm.is_empty() => Ok(Policy::AlwaysArm(arm.to_owned())),
                _ => Err(PolicyParseError(s.to_owned())),
            },
        }
    }
}

impl fmt::Display for Policy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Policy::SafeObo => f.write_str("safeobo"),
            Policy::AlwaysArm(arm) => write!(f, "always:{arm}"),
            Policy::UniformRandom => f.write_str("uniform"),
            Policy::Oracle => f.write_str("oracle"),
        }
    }
}

impl From<Policy> for String {
    fn from(p: Policy) -> Self {
        p.to_string()
    }
}

impl TryFrom<String> for Policy {
    type Error = PolicyParseError;

    fn try_from(s: String) -> Result<Self, Self::Error> {
        s.parse()
    }
}

#[derive(Debug, Error)]
pub enum SimError {
    #[error("policy refers to unknown arm {0:?}")]
    UnknownArm(String),

    #[error("a run needs at least one step")]
    NoSteps,

    #[error("no policies or seeds to compare")]
    EmptyComparison,

    #[error(transparent)]
    Config(#[from] ConfigError),

    #[error("step {step}: {source}")]
    Gate {
        step: u64,
        #[source]
        source: GateError,
    },

    #[error("step {step}: {source}")]
    Cost {
        step: u64,
        #[source]
        source: CostError,
    },

    #[error("step {step}: {source}")]
    Knowledge {
        step: u64,
        #[source]
        source: KnowledgeError,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    /// 1-based.
    pub step: u64,
    /// Edge that issued the query.
    pub edge_id: usize,
    pub context: Context,
    pub arm: String,
    pub arm_index: usize,
    pub phase: Phase,
    pub outcome: Outcome,
    /// Estimated safe-set size; 0 for policies without a gate.
    pub safe_set_size: usize,
    pub acc_violation: bool,
    pub delay_violation: bool,
}

/// Aggregates over a contiguous block of steps. All means are 0 when `steps` is 0.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct PhaseMetrics {
    pub steps: u64,
    pub cost_sum: f64,
    pub mean_cost: f64,
    pub mean_resource_cost: f64,
    pub mean_time_cost: f64,
    pub accuracy: f64,
    pub mean_delay_s: f64,
    pub acc_violation_rate: f64,
    pub delay_violation_rate: f64,
    /// Fraction of steps violating either constraint.
    pub violation_rate: f64,
}

impl PhaseMetrics {
    pub fn from_records<'a>(records: impl IntoIterator<Item = &'a StepRecord>) -> Self {
        let mut m = Self::default();
        let (mut ur, mut ud, mut acc, mut delay) = (0.0, 0.0, 0.0, 0.0);
        let (mut av, mut dv, mut any) = (0u64, 0u64, 0u64);
        for r in records {
            m.steps += 1;
            m.cost_sum += r.outcome.total_cost;
            ur += r.outcome.resource_cost_tflops;
            ud += r.outcome.time_cost_tflops;
            acc += r.outcome.accuracy;
            delay += r.outcome.delay_s;
            av += u64::from(r.acc_violation);
            dv += u64::from(r.delay_violation);
            any += u64::from(r.acc_violation || r.delay_violation);
        }
        if m.steps > 0 {
            let n = m.steps as f64;
            m.mean_cost = m.cost_sum / n;
            m.mean_resource_cost = ur / n;
            m.mean_time_cost = ud / n;
            m.accuracy = acc / n;
            m.mean_delay_s = delay / n;
            m.acc_violation_rate = av as f64 / n;
            m.delay_violation_rate = dv as f64 / n;
            m.violation_rate = any as f64 / n;
        }
        m
    }

    /// Field-wise mean over runs.
    pub fn average(runs: &[PhaseMetrics]) -> Self {
        if runs.is_empty() {
            return Self::default();
        }
        let n = runs.len() as f64;
        let avg = |f: fn(&PhaseMetrics) -> f64| runs.iter().map(f).sum::<f64>() / n;
        Self {
            steps: (runs.iter().map(|r| r.steps).sum::<u64>() as f64 / n).round() as u64,
            cost_sum: avg(|r| r.cost_sum),
            mean_cost: avg(|r| r.mean_cost),
            mean_resource_cost: avg(|r| r.mean_resource_cost),
            mean_time_cost: avg(|r| r.mean_time_cost),
            accuracy: avg(|r| r.accuracy),
            mean_delay_s: avg(|r| r.mean_delay_s),
            acc_violation_rate: avg(|r| r.acc_violation_rate),
            delay_violation_rate: avg(|r| r.delay_violation_rate),
            violation_rate: avg(|r| r.violation_rate),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub policy: Policy,
    pub seed: u64,
    pub total_steps: u64,
    pub warmup_steps: u64,
    pub overall: PhaseMetrics,
    pub warmup: PhaseMetrics,
    pub exploit: PhaseMetrics,
    /// Selections per arm name; sums to `total_steps`.
    pub arm_counts: BTreeMap<String, u64>,
}

impl RunSummary {
    pub fn from_records(
        policy: Policy,
        seed: u64,
        warmup_steps: u64,
        arm_names: &[&str],
        records: &[StepRecord],
    ) -> Self {
        let mut arm_counts: BTreeMap<String, u64> =
            arm_names.iter().map(|n| (n.to_string(), 0)).collect();
        for r in records {
            *arm_counts.entry(r.arm.clone()).or_insert(0) += 1;
        }
        Self {
            policy,
            seed,
            total_steps: records.len() as u64,
            warmup_steps,
            overall: PhaseMetrics::from_records(records),
            warmup: PhaseMetrics::from_records(records.iter().filter(|r| r.phase == Phase::Warmup)),
            exploit: PhaseMetrics::from_records(
                records.iter().filter(|r| r.phase == Phase::Exploit),
            ),
            arm_counts,
        }
    }
}

#[derive(Debug, Clone)]
pub struct RunOutput {
    pub records: Vec<StepRecord>,
    pub summary: RunSummary,
}

/// Cheapest arm expected to meet `qos`; if none does, the most accurate.
/// Ties go to the lowest index.
pub fn oracle_policy(env: &Environment, ctx: &Context, qos: &QosSpec) -> usize {
    let arms = 0..env.arms.len();
    let feasible = arms.clone().filter(|&a| {
        env.expected_accuracy(a, ctx) >= qos.min_accuracy
            && env.expected_delay(a, ctx) <= qos.max_delay_s
    });
    let cheapest = feasible.fold(None, |best: Option<(usize, f64)>, a| {
        let c = env.expected_cost(a, ctx);
        match best {
            Some((_, bc)) if bc <= c => best,
            _ => Some((a, c)),
        }
    });
    match cheapest {
        Some((a, _)) => a,
        None => arms
            .fold(None, |best: Option<(usize, f64)>, a| {
                let p = env.expected_accuracy(a, ctx);
                match best {
                    Some((_, bp)) if bp >= p => best,
                    _ => Some((a, p)),
                }
            })
            .map(|(a, _)| a)
            .expect("at least one arm"),
    }
}

enum Chooser {
    Gate(Box<Gate>),
    Fixed(usize),
    Uniform,
    Oracle,
}

/// Runs `steps` steps of `policy`. Identical inputs give identical outputs.
pub fn run(
    scenario: &Scenario,
    policy: &Policy,
    seed: u64,
    steps: u64,
) -> Result<RunOutput, SimError> {
    if steps == 0 {
        return Err(SimError::NoSteps);
    }
    let env = &scenario.env;
    let qos = scenario.gate.qos;
    let warmup = scenario.gate.warmup_steps;
    let names = scenario.arm_names();
    let mut chooser = match policy {
        Policy::SafeObo => Chooser::Gate(Box::new(
            Gate::new(scenario.actions(), scenario.gate.clone(), seed)
                .map_err(|source| SimError::Gate { step: 0, source })?,
        )),
        Policy::AlwaysArm(name) => Chooser::Fixed(
            names
                .iter()
                .position(|n| n == name)
                .ok_or_else(|| SimError::UnknownArm(name.clone()))?,
        ),
        Policy::UniformRandom => Chooser::Uniform,
        Policy::Oracle => Chooser::Oracle,
    };
    let mut knowledge = scenario.knowledge_layer();
    let edges = knowledge.stores.len();
    let mut records = Vec::with_capacity(steps as usize);

    for t in 0..steps {
        let step = t + 1;
        let home = (t % edges as u64) as usize;
        let query = env.workload.next_query(&env.universe, seed, t, home);
        let net = env.workload.sample_network(seed, t);
        let (best, overlap) = knowledge
            .best_edge(&query.keywords)
            .map_err(|source| SimError::Knowledge { step, source })?;
        let ctx = Context {
            cloud_delay_s: net.cloud_delay_s,
            best_edge_delay_s: net.edge_delays_s[best],
            best_overlap_ratio: overlap,
            best_edge_id: best,
            multi_hop: query.multi_hop,
            query_len_tokens: query.query_len_tokens,
            entity_count: query.entity_count,
        };
        let phase = if t < warmup {
            Phase::Warmup
        } else {
            Phase::Exploit
        };
        let (arm, safe_set_size) = match &mut chooser {
            Chooser::Gate(gate) => {
                let d = gate.decide(&ctx);
                debug_assert_eq!(d.phase, phase);
                (d.arm, d.safe_set_size)
            }
            Chooser::Fixed(a) => (*a, 0),
            Chooser::Uniform => {
                let mut rng = stream_rng(seed, Stream::Policy, t, 0);
                (rng.random_range(0..env.arms.len()), 0)
            }
            Chooser::Oracle => (oracle_policy(env, &ctx, &qos), 0),
        };
        let outcome = env
            .realize_outcome(arm, &ctx, seed, t)
            .map_err(|source| SimError::Cost { step, source })?;
        if let Chooser::Gate(gate) = &mut chooser {
            gate.update(&ctx, arm, &outcome)
                .map_err(|source| SimError::Gate { step, source })?;
        }
        knowledge.record(home, &query.keywords, t);
        records.push(StepRecord {
            step,
            edge_id: home,
            context: ctx,
            arm: names[arm].to_owned(),
            arm_index: arm,
            phase,
            outcome,
            safe_set_size,
            acc_violation: qos.accuracy_violated(outcome.accuracy),
            delay_violation: qos.delay_violated(outcome.delay_s),
        });
    }

    let summary =
        RunSummary::from_records(policy.clone(), seed, warmup.min(steps), &names, &records);
    Ok(RunOutput { records, summary })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonRow {
    pub policy: Policy,
    pub runs: Vec<RunSummary>,
    /// Seed-averaged metrics.
    pub overall: PhaseMetrics,
    pub exploit: PhaseMetrics,
    /// Sample standard deviation of the per-seed exploitation mean cost.
    pub exploit_cost_stddev: f64,
    /// `1 - cost / reference cost`, as a fraction.
    pub reduction_overall: f64,
    pub reduction_exploit: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub reference: Policy,
    pub seeds: Vec<u64>,
    pub steps: u64,
    pub rows: Vec<ComparisonRow>,
}

impl Comparison {
    pub fn row(&self, policy: &Policy) -> Option<&ComparisonRow> {
        self.rows.iter().find(|r| &r.policy == policy)
    }
}

fn reduction(cost: f64, reference: f64) -> f64 {
    if cost == reference {
        0.0
    } else {
        1.0 - cost / reference
    }
}

/// Runs every (policy, seed) pair in parallel and reports seed-averaged
/// metrics with cost reductions against `reference`, which is added to the
/// policy list if missing.
pub fn compare(
    scenario: &Scenario,
    policies: &[Policy],
    reference: &Policy,
    seeds: &[u64],
    steps: u64,
) -> Result<Comparison, SimError> {
    if policies.is_empty() || seeds.is_empty() {
        return Err(SimError::EmptyComparison);
    }
    let mut policies = policies.to_vec();
    if !policies.contains(reference) {
        policies.push(reference.clone());
    }
    let jobs: Vec<(usize, u64)> = (0..policies.len())
        .flat_map(|p| seeds.iter().map(move |&s| (p, s)))
        .collect();
    let summaries: Vec<RunSummary> = jobs
        .par_iter()
        .map(|&(p, s)| run(scenario, &policies[p], s, steps).map(|o| o.summary))
        .collect::<Result<_, _>>()?;

    let mut rows: Vec<ComparisonRow> = policies
        .iter()
        .enumerate()
        .map(|(p, policy)| {
            let runs: Vec<RunSummary> = summaries[p * seeds.len()..(p + 1) * seeds.len()].to_vec();
            let overall =
                PhaseMetrics::average(&runs.iter().map(|r| r.overall).collect::<Vec<_>>());
            let exploit =
                PhaseMetrics::average(&runs.iter().map(|r| r.exploit).collect::<Vec<_>>());
            let exploit_cost_stddev = sample_stddev(runs.iter().map(|r| r.exploit.mean_cost));
            ComparisonRow {
                policy: policy.clone(),
                runs,
                overall,
                exploit,
                exploit_cost_stddev,
                reduction_overall: 0.0,
                reduction_exploit: 0.0,
            }
        })
        .collect();
    let reference_row = rows
        .iter()
        .find(|r| &r.policy == reference)
        .expect("added above");
    let (ref_overall, ref_exploit) = (
        reference_row.overall.mean_cost,
        reference_row.exploit.mean_cost,
    );
    for row in &mut rows {
        row.reduction_overall = reduction(row.overall.mean_cost, ref_overall);
        row.reduction_exploit = reduction(row.exploit.mean_cost, ref_exploit);
    }
    Ok(Comparison {
        reference: reference.clone(),
        seeds: seeds.to_vec(),
        steps,
        rows,
    })
}

fn sample_stddev(xs: impl Iterator<Item = f64>) -> f64 {
    let xs: Vec<f64> = xs.collect();
    if xs.len() < 2 {
        return 0.0;
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    (xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
}

/// Scenario parameter varied by [`sweep`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepParam {
    Warmup,
    Beta,
    QosAcc,
    QosDelay,
}

impl FromStr for SweepParam {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "warmup" => Ok(Self::Warmup),
            "beta" => Ok(Self::Beta),
            "qos-acc" => Ok(Self::QosAcc),
            "qos-delay" => Ok(Self::QosDelay),
            _ => Err(format!(
                "unknown sweep parameter {s:?}; expected warmup, beta, qos-acc or qos-delay"
            )),
        }
    }
}

impl SweepParam {
    pub fn overrides(self, value: f64) -> Overrides {
        let mut o = Overrides::default();
        match self {
            SweepParam::Warmup => o.warmup_steps = Some(value.round() as u64),
            SweepParam::Beta => o.beta = Some(value),
            SweepParam::QosAcc => o.min_accuracy = Some(value),
            SweepParam::QosDelay => o.max_delay_s = Some(value),
        }
        o
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub value: f64,
    pub overall: PhaseMetrics,
    pub exploit: PhaseMetrics,
    pub runs: Vec<RunSummary>,
}

/// Seed-averaged results of `policy` at each value of `param`.
pub fn sweep(
    scenario: &Scenario,
    param: SweepParam,
    values: &[f64],
    policy: &Policy,
    seeds: &[u64],
    steps: u64,
) -> Result<Vec<SweepPoint>, SimError> {
    if values.is_empty() || seeds.is_empty() {
        return Err(SimError::EmptyComparison);
    }
    let scenarios: Vec<Scenario> = values
        .iter()
        .map(|&v| scenario.with_overrides(&param.overrides(v)))
        .collect::<Result<_, _>>()?;
    let jobs: Vec<(usize, u64)> = (0..values.len())
        .flat_map(|i| seeds.iter().map(move |&s| (i, s)))
        .collect();
    let summaries: Vec<RunSummary> = jobs
        .par_iter()
        .map(|&(i, s)| run(&scenarios[i], policy, s, steps).map(|o| o.summary))
        .collect::<Result<_, _>>()?;
    Ok(values
        .iter()
        .enumerate()
        .map(|(i, &value)| {
            let runs = summaries[i * seeds.len()..(i + 1) * seeds.len()].to_vec();
            SweepPoint {
                value,
                overall: PhaseMetrics::average(&runs.iter().map(|r| r.overall).collect::<Vec<_>>()),
                exploit: PhaseMetrics::average(&runs.iter().map(|r| r.exploit).collect::<Vec<_>>()),
                runs,
            }
        })
        .collect())
}
