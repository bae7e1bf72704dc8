//! The collaborative gate.
//!
//! For the first `warmup_steps` decisions the gate picks arms uniformly at
//! random. Afterwards it keeps the arms whose accuracy lower bound clears the
//! accuracy floor and whose delay upper bound stays under the delay ceiling,
//! always including the safe seed, and picks the arm with the smallest cost
//! lower bound among them. Three GPs, over the same (context, arm) features,
//! model total cost, accuracy and delay.

use std::fmt;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cost::Outcome;
use crate::gp::{GpError, GpModel, KernelParams, Posterior, Standardize};
use crate::rng::{stream_rng, Stream};

/// Number of context features ahead of the one-hot arm encoding.
pub const CONTEXT_FEATURES: usize = 6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Retrieval {
    #[serde(rename = "none")]
    NoRetrieval,
    EdgeNaive,
    CloudGraph,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Generation {
    LocalSlm,
    CloudLlm,
}

/// Where to retrieve from and where to generate.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Action {
    pub retrieval: Retrieval,
    pub generation: Generation,
}

impl Action {
    pub const fn new(retrieval: Retrieval, generation: Generation) -> Self {
        Self {
            retrieval,
            generation,
        }
    }

    /// The four strategies: local SLM alone, SLM with edge retrieval, SLM with
    /// cloud graph retrieval, and the cloud LLM with cloud graph retrieval.
    pub fn default_arms() -> Vec<Action> {
        use Generation::*;
        use Retrieval::*;
        vec![
            Action::new(NoRetrieval, LocalSlm),
            Action::new(EdgeNaive, LocalSlm),
            Action::new(CloudGraph, LocalSlm),
            Action::new(CloudGraph, CloudLlm),
        ]
    }

    pub fn uses_edge(&self) -> bool {
        self.retrieval == Retrieval::EdgeNaive
    }

    pub fn uses_cloud(&self) -> bool {
        self.retrieval == Retrieval::CloudGraph || self.generation == Generation::CloudLlm
    }
}

impl fmt::Display for Action {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let r = match self.retrieval {
            Retrieval::NoRetrieval => "none",
            Retrieval::EdgeNaive => "edge_naive",
            Retrieval::CloudGraph => "cloud_graph",
        };
        let g = match self.generation {
            Generation::LocalSlm => "local_slm",
            Generation::CloudLlm => "cloud_llm",
        };
        write!(f, "{r}+{g}")
    }
}

/// What the gate sees before deciding.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Context {
    pub cloud_delay_s: f64,
    pub best_edge_delay_s: f64,
    pub best_overlap_ratio: f64,
    pub best_edge_id: usize,
    pub multi_hop: bool,
    pub query_len_tokens: u32,
    pub entity_count: u32,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct QosSpec {
    pub min_accuracy: f64,
    pub max_delay_s: f64,
}

impl QosSpec {
    pub fn is_valid(&self) -> bool {
        (0.0..=1.0).contains(&self.min_accuracy)
            && self.max_delay_s.is_finite()
            && self.max_delay_s > 0.0
    }

    pub fn accuracy_violated(&self, accuracy: f64) -> bool {
        accuracy < self.min_accuracy
    }

    pub fn delay_violated(&self, delay_s: f64) -> bool {
        delay_s > self.max_delay_s
    }
}

/// Normalizers for the integer query-complexity features.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FeatureScale {
    pub query_len_norm: f64,
    pub entity_norm: f64,
}

impl Default for FeatureScale {
    fn default() -> Self {
        Self {
            query_len_norm: 32.0,
            entity_norm: 8.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum GateError {
    #[error("unknown arm index {index} (have {arms})")]
    UnknownArm { index: usize, arms: usize },

    #[error("outcome has non-finite fields: {0:?}")]
    NonFiniteOutcome(Outcome),

    #[error("invalid gate configuration: {0}")]
    Config(String),

    #[error("{which} model: {source}")]
    Gp {
        which: &'static str,
        #[source]
        source: GpError,
    },
}

/// Feature encoding `[cloud delay, edge delay, overlap, multi-hop, length, entities] ++ one-hot(arm)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Featurizer {
    arms: usize,
    scale: FeatureScale,
}

impl Featurizer {
    pub fn new(arms: usize, scale: FeatureScale) -> Self {
        Self { arms, scale }
    }

    pub fn dim(&self) -> usize {
        CONTEXT_FEATURES + self.arms
    }

    pub fn featurize(&self, ctx: &Context, arm: usize) -> Result<Vec<f64>, GateError> {
        if arm >= self.arms {
            return Err(GateError::UnknownArm {
                index: arm,
                arms: self.arms,
            });
        }
        let mut v = Vec::with_capacity(self.dim());
        v.extend([
            ctx.cloud_delay_s,
            ctx.best_edge_delay_s,
            ctx.best_overlap_ratio,
            if ctx.multi_hop { 1.0 } else { 0.0 },
            f64::from(ctx.query_len_tokens) / self.scale.query_len_norm,
            f64::from(ctx.entity_count) / self.scale.entity_norm,
        ]);
        v.extend((0..self.arms).map(|i| if i == arm { 1.0 } else { 0.0 }));
        Ok(v)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GateConfig {
    /// Indices into the feasible arm list that are always considered safe.
    pub safe_seed: Vec<usize>,
    pub beta_safe: f64,
    pub beta_acq: f64,
    pub warmup_steps: u64,
    pub qos: QosSpec,
    pub kernel_cost: KernelParams,
    pub kernel_accuracy: KernelParams,
    pub kernel_delay: KernelParams,
    pub window: usize,
    pub standardize: Standardize,
    pub features: FeatureScale,
}

/// Posterior bounds of one arm in one context, in natural units.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ArmPosterior {
    pub cost: Posterior,
    pub accuracy: Posterior,
    pub delay: Posterior,
}

/// Arms whose accuracy LCB and delay UCB satisfy `qos`, plus the seed, in index order.
pub fn safe_set_from(
    posteriors: &[ArmPosterior],
    safe_seed: &[usize],
    qos: &QosSpec,
    beta: f64,
) -> Vec<usize> {
    (0..posteriors.len())
        .filter(|i| {
            let p = &posteriors[*i];
            safe_seed.contains(i)
                || (p.accuracy.lower(beta) >= qos.min_accuracy
                    && p.delay.upper(beta) <= qos.max_delay_s)
        })
        .collect()
}

/// Arm in `candidates` with the smallest cost LCB; ties go to the lowest index.
pub fn argmin_cost_lcb(posteriors: &[ArmPosterior], candidates: &[usize], beta: f64) -> usize {
    let mut best = candidates[0];
    let mut best_value = posteriors[best].cost.lower(beta);
    for &i in &candidates[1..] {
        let value = posteriors[i].cost.lower(beta);
        if value < best_value || (value == best_value && i < best) {
            best = i;
            best_value = value;
        }
    }
    best
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Warmup,
    Exploit,
}

impl fmt::Display for Phase {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Phase::Warmup => "warmup",
            Phase::Exploit => "exploit",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Decision {
    pub arm: usize,
    pub phase: Phase,
    /// Size of the estimated safe set at decision time.
    pub safe_set_size: usize,
}

#[derive(Debug, Clone)]
pub struct Gate {
    arms: Vec<Action>,
    config: GateConfig,
    featurizer: Featurizer,
    cost: GpModel,
    accuracy: GpModel,
    delay: GpModel,
    step: u64,
    rng: ChaCha8Rng,
}

impl Gate {
    pub fn new(arms: Vec<Action>, config: GateConfig, seed: u64) -> Result<Self, GateError> {
        if arms.is_empty() {
            return Err(GateError::Config("no feasible arms".into()));
        }
        if config.safe_seed.is_empty() {
            return Err(GateError::Config("safe seed is empty".into()));
        }
        if let Some(&bad) = config.safe_seed.iter().find(|&&i| i >= arms.len()) {
            return Err(GateError::UnknownArm {
                index: bad,
                arms: arms.len(),
            });
        }
        for (name, beta) in [
            ("beta_safe", config.beta_safe),
            ("beta_acq", config.beta_acq),
        ] {
            if !(beta.is_finite() && beta > 0.0) {
                return Err(GateError::Config(format!("{name} must be positive")));
            }
        }
        if config.warmup_steps == 0 {
            return Err(GateError::Config("warmup_steps must be positive".into()));
        }
        if !config.qos.is_valid() {
            return Err(GateError::Config(format!("invalid QoS {:?}", config.qos)));
        }
        let featurizer = Featurizer::new(arms.len(), config.features);
        let model = |which: &'static str, params: &KernelParams| {
            if params.dim() != featurizer.dim() {
                return Err(GateError::Config(format!(
                    "{which} kernel has {} length scales, features have {}",
                    params.dim(),
                    featurizer.dim()
                )));
            }
            GpModel::new(params.clone(), config.window, config.standardize)
                .map_err(|source| GateError::Gp { which, source })
        };
        let cost = model("cost", &config.kernel_cost)?;
        let accuracy = model("accuracy", &config.kernel_accuracy)?;
        let delay = model("delay", &config.kernel_delay)?;
        Ok(Self {
            arms,
            featurizer,
            cost,
            accuracy,
            delay,
            step: 0,
            rng: stream_rng(seed, Stream::Gate, 0, 0),
            config,
        })
    }

    pub fn arms(&self) -> &[Action] {
        &self.arms
    }

    pub fn config(&self) -> &GateConfig {
        &self.config
    }

    /// Number of updates applied so far.
    pub fn step(&self) -> u64 {
        self.step
    }

    pub fn phase(&self) -> Phase {
        if self.step < self.config.warmup_steps {
            Phase::Warmup
        } else {
            Phase::Exploit
        }
    }

    pub fn models(&self) -> [&GpModel; 3] {
        [&self.cost, &self.accuracy, &self.delay]
    }

    pub fn featurize(&self, ctx: &Context, arm: usize) -> Result<Vec<f64>, GateError> {
        self.featurizer.featurize(ctx, arm)
    }

    pub fn posteriors(&self, ctx: &Context) -> Vec<ArmPosterior> {
        self.evaluate(ctx, true)
    }

    /// Posteriors for every arm. Without `with_cost` the cost entries hold the
    /// cost model's prior, which the safe set never reads.
    fn evaluate(&self, ctx: &Context, with_cost: bool) -> Vec<ArmPosterior> {
        let xs: Vec<Vec<f64>> = (0..self.arms.len())
            .map(|arm| self.featurizer.featurize(ctx, arm).expect("arm in range"))
            .collect();
        let queries: Vec<&[f64]> = xs.iter().map(Vec::as_slice).collect();
        let batch = |gp: &GpModel| {
            gp.posteriors(&queries)
                .expect("dimension checked at construction")
        };
        let accuracy = batch(&self.accuracy);
        let delay = batch(&self.delay);
        let cost = if with_cost {
            batch(&self.cost)
        } else {
            Vec::new()
        };
        accuracy
            .into_iter()
            .zip(delay)
            .enumerate()
            .map(|(i, (accuracy, delay))| ArmPosterior {
                cost: cost.get(i).copied().unwrap_or_else(|| self.cost.prior()),
                accuracy,
                delay,
            })
            .collect()
    }

    pub fn safe_set(&self, ctx: &Context) -> Vec<usize> {
        safe_set_from(
            &self.posteriors(ctx),
            &self.config.safe_seed,
            &self.config.qos,
            self.config.beta_safe,
        )
    }

    /// Chooses an arm. Warm-up draws ignore the models entirely; the safe set
    /// is still evaluated so its size can be reported.
    pub fn decide(&mut self, ctx: &Context) -> Decision {
        let phase = self.phase();
        let posteriors = self.evaluate(ctx, phase == Phase::Exploit);
        let safe = safe_set_from(
            &posteriors,
            &self.config.safe_seed,
            &self.config.qos,
            self.config.beta_safe,
        );
        let arm = match phase {
            Phase::Warmup => self.rng.random_range(0..self.arms.len()),
            Phase::Exploit => argmin_cost_lcb(&posteriors, &safe, self.config.beta_acq),
        };
        Decision {
            arm,
            phase,
            safe_set_size: safe.len(),
        }
    }

    /// Feeds `(total cost, accuracy, delay)` of the executed arm to the three models.
    pub fn update(
        &mut self,
        ctx: &Context,
        arm: usize,
        outcome: &Outcome,
    ) -> Result<(), GateError> {
        let x = self.featurizer.featurize(ctx, arm)?;
        if !outcome.is_finite() {
            return Err(GateError::NonFiniteOutcome(*outcome));
        }
        let observe = |gp: &mut GpModel, which: &'static str, y: f64| {
            gp.observe(&x, y)
                .map_err(|source| GateError::Gp { which, source })
        };
        observe(&mut self.cost, "cost", outcome.total_cost)?;
        observe(&mut self.accuracy, "accuracy", outcome.accuracy)?;
        observe(&mut self.delay, "delay", outcome.delay_s)?;
        self.step += 1;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cost::CostWeights;
    use proptest::prelude::*;

    fn ctx() -> Context {
        Context {
            cloud_delay_s: 0.3,
            best_edge_delay_s: 0.02,
            best_overlap_ratio: 1.0,
            best_edge_id: 2,
            multi_hop: false,
            query_len_tokens: 16,
            entity_count: 3,
        }
    }

    fn config(warmup: u64, sf2: f64) -> GateConfig {
        let k = KernelParams::isotropic(CONTEXT_FEATURES + 4, sf2, 1.0, 0.05).unwrap();
        GateConfig {
            safe_seed: vec![3],
            beta_safe: 2.0,
            beta_acq: 2.0,
            warmup_steps: warmup,
            qos: QosSpec {
                min_accuracy: 0.8,
                max_delay_s: 1.0,
            },
            kernel_cost: k.clone(),
            kernel_accuracy: k.clone(),
            kernel_delay: k,
            window: 64,
            standardize: Standardize::Window,
            features: FeatureScale::default(),
        }
    }

    fn post(mean: f64, stddev: f64) -> Posterior {
        Posterior { mean, stddev }
    }

    fn arm(cost: (f64, f64), acc: (f64, f64), delay: (f64, f64)) -> ArmPosterior {
        ArmPosterior {
            cost: post(cost.0, cost.1),
            accuracy: post(acc.0, acc.1),
            delay: post(delay.0, delay.1),
        }
    }

    #[test]
    fn one_hot_suffix() {
        let f = Featurizer::new(4, FeatureScale::default());
        let v = f.featurize(&ctx(), 2).unwrap();
        assert_eq!(&v[CONTEXT_FEATURES..], &[0.0, 0.0, 1.0, 0.0]);
        assert_eq!((v[2], v[3]), (1.0, 0.0));
        let w = f.featurize(&ctx(), 0).unwrap();
        assert_eq!(v[..CONTEXT_FEATURES], w[..CONTEXT_FEATURES]);
        assert_ne!(v[CONTEXT_FEATURES..], w[CONTEXT_FEATURES..]);
        assert_eq!(
            f.featurize(&ctx(), 4),
            Err(GateError::UnknownArm { index: 4, arms: 4 })
        );
    }

    #[test]
    fn safe_set_inequalities() {
        let qos = QosSpec {
            min_accuracy: 0.80,
            max_delay_s: 1.0,
        };
        let ok = arm((1.0, 0.0), (0.90, 0.02), (0.5, 0.05));
        let too_uncertain = arm((1.0, 0.0), (0.85, 0.05), (0.5, 0.05));
        let seed = arm((1.0, 0.0), (0.0, 1.0), (9.0, 1.0));
        let set = safe_set_from(&[ok, too_uncertain, seed], &[2], &qos, 2.0);
        assert_eq!(set, vec![0, 2]);
    }

    #[test]
    fn argmin_examples() {
        let a = arm((40.0, 0.0), (1.0, 0.0), (0.0, 0.0));
        let b = arm((12.5, 0.0), (1.0, 0.0), (0.0, 0.0));
        assert_eq!(argmin_cost_lcb(&[a, b], &[0, 1], 2.0), 1);
        // equal LCBs: lowest index wins
        let c = arm((16.5, 2.0), (1.0, 0.0), (0.0, 0.0));
        assert_eq!(argmin_cost_lcb(&[a, b, c], &[2, 1], 2.0), 1);
        assert_eq!(argmin_cost_lcb(&[a, b], &[0], 2.0), 0);
    }

    #[test]
    fn empty_models_give_seed_only() {
        let gate = Gate::new(Action::default_arms(), config(10, 25.0), 1).unwrap();
        assert_eq!(gate.safe_set(&ctx()), vec![3]);
    }

    #[test]
    fn warmup_draws_are_uniform() {
        let mut gate = Gate::new(Action::default_arms(), config(u64::MAX, 1.0), 9).unwrap();
        let mut counts = [0usize; 4];
        for _ in 0..10_000 {
            counts[gate.decide(&ctx()).arm] += 1;
        }
        for c in counts {
            let f = c as f64 / 10_000.0;
            assert!((f - 0.25).abs() <= 0.02, "{counts:?}");
        }
    }

    #[test]
    fn collapsed_safe_set_picks_seed() {
        let mut gate = Gate::new(Action::default_arms(), config(1, 25.0), 3).unwrap();
        let w = CostWeights::default();
        gate.update(&ctx(), 0, &Outcome::new(1.0, 0.1, 0.1, 0.1, &w))
            .unwrap();
        // arm 0 is cheap but no model supports its safety; the seed is the only choice
        let d = gate.decide(&ctx());
        assert_eq!(d.phase, Phase::Exploit);
        assert_eq!(d.arm, 3);
    }

    #[test]
    fn update_counts_and_rejects_nan() {
        let mut gate = Gate::new(Action::default_arms(), config(5, 1.0), 3).unwrap();
        let w = CostWeights::default();
        gate.update(&ctx(), 1, &Outcome::new(1.0, 0.9, 22.0, 1.1, &w))
            .unwrap();
        assert_eq!(gate.models()[0].len(), 1);
        assert_eq!(gate.step(), 1);
        let bad = Outcome::new(f64::NAN, 0.9, 22.0, 1.1, &w);
        assert!(matches!(
            gate.update(&ctx(), 1, &bad),
            Err(GateError::NonFiniteOutcome(_))
        ));
        assert_eq!(gate.step(), 1);
        assert!(gate.models().iter().all(|m| m.len() == 1));
    }

    #[test]
    fn repeated_observation_shrinks_between_targets() {
        let mut gate = Gate::new(Action::default_arms(), config(5, 1.0), 3).unwrap();
        let w = CostWeights {
            delta1: 1.0,
            delta2: 0.0,
        };
        gate.update(&ctx(), 1, &Outcome::new(1.0, 0.5, 10.0, 0.0, &w))
            .unwrap();
        gate.update(&ctx(), 1, &Outcome::new(0.0, 0.7, 30.0, 0.0, &w))
            .unwrap();
        let p = gate.posteriors(&ctx())[1];
        assert!(p.cost.mean > 10.0 && p.cost.mean < 30.0, "{p:?}");
        assert!(p.accuracy.mean > 0.0 && p.accuracy.mean < 1.0, "{p:?}");
    }

    #[test]
    fn rejects_bad_configs() {
        let mut c = config(5, 1.0);
        c.safe_seed = vec![];
        assert!(Gate::new(Action::default_arms(), c, 0).is_err());
        let mut c = config(5, 1.0);
        c.safe_seed = vec![7];
        assert!(matches!(
            Gate::new(Action::default_arms(), c, 0),
            Err(GateError::UnknownArm { index: 7, .. })
        ));
        let mut c = config(5, 1.0);
        c.kernel_delay = KernelParams::isotropic(3, 1.0, 1.0, 0.1).unwrap();
        assert!(Gate::new(Action::default_arms(), c, 0).is_err());
    }

    fn arb_posterior() -> impl Strategy<Value = ArmPosterior> {
        (0.0f64..1.0, 0.0f64..0.3, 0.0f64..3.0, 0.0f64..1.0)
            .prop_map(|(a, sa, d, sd)| arm((1.0, 0.0), (a, sa), (d, sd)))
    }

    proptest! {
        #[test]
        fn seed_always_included_and_beta_monotone(
            posts in prop::collection::vec(arb_posterior(), 4),
            seed_idx in 0usize..4,
            acc in 0.0f64..1.0,
            delay in 0.1f64..3.0,
            b1 in 0.0f64..4.0,
            db in 0.0f64..4.0,
        ) {
            let qos = QosSpec { min_accuracy: acc, max_delay_s: delay };
            let small = safe_set_from(&posts, &[seed_idx], &qos, b1);
            let large = safe_set_from(&posts, &[seed_idx], &qos, b1 + db);
            prop_assert!(small.contains(&seed_idx));
            prop_assert!(large.contains(&seed_idx));
            for i in &large {
                prop_assert!(small.contains(i));
            }
        }
    }
}
