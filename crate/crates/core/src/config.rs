//! Scenario files.
//!
//! A scenario is a TOML document describing the arms, the gate, the knowledge
//! layer and the workload. Loading validates everything at once and reports
//! every problem with its field path.

use std::collections::HashSet;
use std::fmt;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cost::CostWeights;
use crate::environment::{ArmSpec, Environment, Universe, WorkloadSpec};
use crate::gate::{Action, FeatureScale, GateConfig, QosSpec, CONTEXT_FEATURES};
use crate::gp::{KernelParams, Standardize, DEFAULT_JITTER, DEFAULT_WINDOW};
use crate::knowledge::{
    Chunk, ChunkId, Community, CommunityId, DistributionParams, KeywordId, KnowledgeLayer,
    SynonymMap, TriggerScope,
};

const TABLE3: &str = include_str!("../scenarios/table3.toml");

/// Names accepted by [`ScenarioConfig::builtin`].
pub const BUILTIN_SCENARIOS: &[&str] = &["table3", "table3-strict"];

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfigIssue {
    pub path: String,
    pub message: String,
}

impl fmt::Display for ConfigIssue {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}", self.path, self.message)
    }
}

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("parse error: {0}")]
    Parse(String),

    #[error("{} validation error(s):\n{}", .0.len(), join_issues(.0))]
    Invalid(Vec<ConfigIssue>),

    #[error("unknown scenario {0:?}")]
    UnknownScenario(String),
}

fn join_issues(issues: &[ConfigIssue]) -> String {
    issues
        .iter()
        .map(|i| format!("  {i}"))
        .collect::<Vec<_>>()
        .join("\n")
}

/// Squared-exponential kernel with one length scale per context feature and a
/// shared length scale for the one-hot arm features.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct KernelSpec {
    pub signal_variance: f64,
    pub noise_variance: f64,
    pub context_length_scale: [f64; CONTEXT_FEATURES],
    pub arm_length_scale: f64,
    #[serde(default = "default_jitter")]
    pub jitter: f64,
}

fn default_jitter() -> f64 {
    DEFAULT_JITTER
}

impl KernelSpec {
    pub fn params(&self, arms: usize) -> KernelParams {
        let mut length_scale = self.context_length_scale.to_vec();
        length_scale.extend(std::iter::repeat_n(self.arm_length_scale, arms));
        KernelParams {
            signal_variance: self.signal_variance,
            length_scale,
            noise_variance: self.noise_variance,
            jitter: self.jitter,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct KernelSet {
    pub cost: KernelSpec,
    pub accuracy: KernelSpec,
    pub delay: KernelSpec,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GateSection {
    pub warmup_steps: u64,
    pub beta_safe: f64,
    pub beta_acq: f64,
    /// Arm names always treated as safe.
    pub safe_seed: Vec<String>,
    #[serde(default = "default_window")]
    pub window: usize,
    #[serde(default)]
    pub standardize: Standardize,
    #[serde(default)]
    pub features: FeatureScale,
    pub kernel: KernelSet,
}

fn default_window() -> usize {
    DEFAULT_WINDOW
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ChunkSpec {
    pub id: ChunkId,
    pub keywords: Vec<KeywordId>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CommunitySpec {
    pub id: CommunityId,
    pub keywords: Vec<KeywordId>,
    pub chunks: Vec<ChunkSpec>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum UniverseSpec {
    Generated {
        topics: usize,
        keywords_per_topic: usize,
        chunks_per_topic: usize,
        keywords_per_chunk: usize,
    },
    Explicit {
        communities: Vec<CommunitySpec>,
    },
}

impl UniverseSpec {
    pub fn topic_count(&self) -> usize {
        match self {
            UniverseSpec::Generated { topics, .. } => *topics,
            UniverseSpec::Explicit { communities } => communities.len(),
        }
    }

    pub fn build(&self) -> Universe {
        match self {
            UniverseSpec::Generated {
                topics,
                keywords_per_topic,
                chunks_per_topic,
                keywords_per_chunk,
            } => Universe::generated(
                *topics,
                *keywords_per_topic,
                *chunks_per_topic,
                *keywords_per_chunk,
            ),
            UniverseSpec::Explicit { communities } => Universe::from_communities(
                communities
                    .iter()
                    .map(|c| {
                        let chunks = c
                            .chunks
                            .iter()
                            .map(|ch| {
                                let mut keywords = ch.keywords.clone();
                                keywords.sort_unstable();
                                keywords.dedup();
                                Chunk {
                                    id: ch.id,
                                    keywords,
                                    community_id: c.id,
                                    inserted_at_step: 0,
                                }
                            })
                            .collect();
                        Community::new(c.id, c.keywords.clone(), chunks)
                    })
                    .collect(),
            ),
        }
    }

    fn issues(&self, out: &mut Vec<ConfigIssue>) {
        let base = "knowledge.universe";
        match self {
            UniverseSpec::Generated {
                topics,
                keywords_per_topic,
                chunks_per_topic,
                keywords_per_chunk,
            } => {
                for (name, v) in [
                    ("topics", topics),
                    ("keywords_per_topic", keywords_per_topic),
                    ("chunks_per_topic", chunks_per_topic),
                    ("keywords_per_chunk", keywords_per_chunk),
                ] {
                    if *v == 0 {
                        push(out, format!("{base}.{name}"), "must be positive");
                    }
                }
                if topics * chunks_per_topic > ChunkId::MAX as usize {
                    push(out, format!("{base}.chunks_per_topic"), "too many chunks");
                }
            }
            UniverseSpec::Explicit { communities } => {
                if communities.is_empty() {
                    push(out, format!("{base}.communities"), "must not be empty");
                }
                let mut ids = HashSet::new();
                let mut chunk_ids = HashSet::new();
                for (i, c) in communities.iter().enumerate() {
                    let path = format!("{base}.communities[{i}]");
                    if !ids.insert(c.id) {
                        push(
                            out,
                            format!("{path}.id"),
                            format!("duplicate community id {}", c.id),
                        );
                    }
                    if c.keywords.is_empty() {
                        push(out, format!("{path}.keywords"), "must not be empty");
                    }
                    for (j, ch) in c.chunks.iter().enumerate() {
                        if ch.keywords.is_empty() {
                            push(
                                out,
                                format!("{path}.chunks[{j}].keywords"),
                                "must not be empty",
                            );
                        }
                        if !chunk_ids.insert(ch.id) {
                            push(
                                out,
                                format!("{path}.chunks[{j}].id"),
                                format!("duplicate chunk id {}", ch.id),
                            );
                        }
                    }
                }
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct KnowledgeSection {
    pub edges: usize,
    #[serde(default = "default_capacity")]
    pub capacity: usize,
    #[serde(default = "default_trigger")]
    pub trigger_threshold: u32,
    #[serde(default = "default_top_k")]
    pub top_k: usize,
    #[serde(default = "default_push_limit")]
    pub push_limit: usize,
    #[serde(default)]
    pub trigger_scope: TriggerScope,
    #[serde(default)]
    pub prefill: Prefill,
    /// Groups of interchangeable keywords; unlisted keywords stand alone.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub synonyms: Vec<Vec<KeywordId>>,
    pub universe: UniverseSpec,
}

/// Initial contents of the edge stores.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Prefill {
    #[default]
    Empty,
    /// Each edge starts with the communities of its most popular topics at
    /// step 0, as many as fit.
    Popular,
}

fn default_capacity() -> usize {
    1000
}

fn default_trigger() -> u32 {
    DistributionParams::default().trigger_threshold
}

fn default_top_k() -> usize {
    DistributionParams::default().top_k
}

fn default_push_limit() -> usize {
    DistributionParams::default().push_limit
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioConfig {
    pub name: String,
    pub steps: u64,
    pub seeds: Vec<u64>,
    pub qos: QosSpec,
    #[serde(default)]
    pub weights: CostWeights,
    pub gate: GateSection,
    pub knowledge: KnowledgeSection,
    pub workload: WorkloadSpec,
    pub arms: Vec<ArmSpec>,
}

/// Command-line adjustments applied on top of a loaded scenario.
#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct Overrides {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub steps: Option<u64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub warmup_steps: Option<u64>,
    /// Sets both the safety and acquisition multipliers.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub beta: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub min_accuracy: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub max_delay_s: Option<f64>,
}

impl Overrides {
    pub fn is_empty(&self) -> bool {
        *self == Self::default()
    }
}

fn push(out: &mut Vec<ConfigIssue>, path: impl Into<String>, message: impl Into<String>) {
    out.push(ConfigIssue {
        path: path.into(),
        message: message.into(),
    });
}

fn positive(out: &mut Vec<ConfigIssue>, path: &str, v: f64) {
    if !(v.is_finite() && v > 0.0) {
        push(out, path, format!("must be positive, got {v}"));
    }
}

impl ScenarioConfig {
    /// Parses without validating.
    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        toml::from_str(text).map_err(|e| ConfigError::Parse(e.to_string()))
    }

    pub fn from_toml_str(text: &str) -> Result<Self, ConfigError> {
        let cfg = Self::parse(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load_and_validate(path: impl AsRef<Path>) -> Result<Self, ConfigError> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.to_owned(),
            source,
        })?;
        Self::from_toml_str(&text)
    }

    /// A scenario shipped with the library.
    pub fn builtin(name: &str) -> Result<Self, ConfigError> {
        match name {
            "table3" => Self::from_toml_str(TABLE3),
            "table3-strict" => {
                let mut cfg = Self::from_toml_str(TABLE3)?;
                cfg.name = "table3-strict".into();
                cfg.qos.max_delay_s = 1.0;
                cfg.validate()?;
                Ok(cfg)
            }
            _ => Err(ConfigError::UnknownScenario(name.into())),
        }
    }

    /// Raw TOML of a built-in scenario file, if it has one.
    pub fn builtin_source(name: &str) -> Option<&'static str> {
        (name == "table3").then_some(TABLE3)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("scenario config serializes")
    }

    pub fn arm_index(&self, name: &str) -> Option<usize> {
        self.arms.iter().position(|a| a.name == name)
    }

    pub fn apply(&mut self, o: &Overrides) -> Result<(), ConfigError> {
        if let Some(v) = o.steps {
            self.steps = v;
        }
        if let Some(v) = o.warmup_steps {
            self.gate.warmup_steps = v;
        }
        if let Some(v) = o.beta {
            self.gate.beta_safe = v;
            self.gate.beta_acq = v;
        }
        if let Some(v) = o.min_accuracy {
            self.qos.min_accuracy = v;
        }
        if let Some(v) = o.max_delay_s {
            self.qos.max_delay_s = v;
        }
        self.validate()
    }

    pub fn issues(&self) -> Vec<ConfigIssue> {
        let mut out = Vec::new();
        if self.steps == 0 {
            push(&mut out, "steps", "must be positive");
        }
        if self.seeds.is_empty() {
            push(&mut out, "seeds", "must not be empty");
        }
        if !(0.0..=1.0).contains(&self.qos.min_accuracy) {
            push(&mut out, "qos.min_accuracy", "must lie in [0, 1]");
        }
        positive(&mut out, "qos.max_delay_s", self.qos.max_delay_s);
        if !self.weights.is_valid() {
            push(
                &mut out,
                "weights",
                "must be nonnegative with a positive sum",
            );
        }

        if self.arms.is_empty() {
            push(&mut out, "arms", "must not be empty");
        }
        let mut names = HashSet::new();
        for (i, arm) in self.arms.iter().enumerate() {
            if !names.insert(arm.name.as_str()) {
                push(
                    &mut out,
                    format!("arms[{i}].name"),
                    format!("duplicate arm name {:?}", arm.name),
                );
            }
            out.extend(
                arm.issues(&format!("arms[{i}]"))
                    .into_iter()
                    .map(|(path, message)| ConfigIssue { path, message }),
            );
        }

        let g = &self.gate;
        if g.warmup_steps == 0 {
            push(&mut out, "gate.warmup_steps", "must be positive");
        }
        positive(&mut out, "gate.beta_safe", g.beta_safe);
        positive(&mut out, "gate.beta_acq", g.beta_acq);
        if g.safe_seed.is_empty() {
            push(&mut out, "gate.safe_seed", "must not be empty");
        }
        for (i, name) in g.safe_seed.iter().enumerate() {
            if self.arm_index(name).is_none() {
                push(
                    &mut out,
                    format!("gate.safe_seed[{i}]"),
                    format!("unknown arm {name:?}"),
                );
            }
        }
        if g.window == 0 {
            push(&mut out, "gate.window", "must be positive");
        }
        positive(
            &mut out,
            "gate.features.query_len_norm",
            g.features.query_len_norm,
        );
        positive(
            &mut out,
            "gate.features.entity_norm",
            g.features.entity_norm,
        );
        for (which, k) in [
            ("cost", &g.kernel.cost),
            ("accuracy", &g.kernel.accuracy),
            ("delay", &g.kernel.delay),
        ] {
            let path = format!("gate.kernel.{which}");
            if !(k.signal_variance.is_finite() && k.signal_variance >= 0.0) {
                push(
                    &mut out,
                    format!("{path}.signal_variance"),
                    "must be nonnegative",
                );
            }
            if !(k.noise_variance.is_finite() && k.noise_variance >= 0.0) {
                push(
                    &mut out,
                    format!("{path}.noise_variance"),
                    "must be nonnegative",
                );
            }
            for (d, l) in k.context_length_scale.iter().enumerate() {
                positive(&mut out, &format!("{path}.context_length_scale[{d}]"), *l);
            }
            positive(
                &mut out,
                &format!("{path}.arm_length_scale"),
                k.arm_length_scale,
            );
            positive(&mut out, &format!("{path}.jitter"), k.jitter);
        }

        let kn = &self.knowledge;
        for (name, v) in [
            ("edges", kn.edges),
            ("capacity", kn.capacity),
            ("trigger_threshold", kn.trigger_threshold as usize),
            ("top_k", kn.top_k),
            ("push_limit", kn.push_limit),
        ] {
            if v == 0 {
                push(&mut out, format!("knowledge.{name}"), "must be positive");
            }
        }
        if let Err(e) = SynonymMap::from_groups(&kn.synonyms) {
            push(&mut out, "knowledge.synonyms", e.to_string());
        }
        kn.universe.issues(&mut out);

        out.extend(
            self.workload
                .issues(kn.edges, kn.universe.topic_count())
                .into_iter()
                .map(|(path, message)| ConfigIssue { path, message }),
        );
        out
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let issues = self.issues();
        if issues.is_empty() {
            Ok(())
        } else {
            Err(ConfigError::Invalid(issues))
        }
    }
}

/// A validated scenario resolved into runtime objects.
#[derive(Debug, Clone)]
pub struct Scenario {
    pub config: ScenarioConfig,
    pub env: Environment,
    pub gate: GateConfig,
}

impl Scenario {
    pub fn new(config: ScenarioConfig) -> Result<Self, ConfigError> {
        config.validate()?;
        let arms = config.arms.len();
        let g = &config.gate;
        let gate = GateConfig {
            safe_seed: g
                .safe_seed
                .iter()
                .map(|n| config.arm_index(n).expect("validated"))
                .collect(),
            beta_safe: g.beta_safe,
            beta_acq: g.beta_acq,
            warmup_steps: g.warmup_steps,
            qos: config.qos,
            kernel_cost: g.kernel.cost.params(arms),
            kernel_accuracy: g.kernel.accuracy.params(arms),
            kernel_delay: g.kernel.delay.params(arms),
            window: g.window,
            standardize: g.standardize,
            features: g.features,
        };
        let env = Environment {
            arms: config.arms.clone(),
            workload: config.workload.clone(),
            universe: config.knowledge.universe.build(),
            weights: config.weights,
        };
        Ok(Self { config, env, gate })
    }

    pub fn builtin(name: &str) -> Result<Self, ConfigError> {
        Self::new(ScenarioConfig::builtin(name)?)
    }

    pub fn with_overrides(&self, o: &Overrides) -> Result<Self, ConfigError> {
        let mut cfg = self.config.clone();
        cfg.apply(o)?;
        Self::new(cfg)
    }

    pub fn actions(&self) -> Vec<Action> {
        self.config.arms.iter().map(|a| a.action).collect()
    }

    pub fn arm_names(&self) -> Vec<&str> {
        self.config.arms.iter().map(|a| a.name.as_str()).collect()
    }

    /// Fresh, empty edge stores over the scenario's cloud communities.
    pub fn knowledge_layer(&self) -> KnowledgeLayer {
        let kn = &self.config.knowledge;
        let mut layer = KnowledgeLayer::new(
            kn.edges,
            kn.capacity,
            self.env.universe.communities.clone(),
            SynonymMap::from_groups(&kn.synonyms).expect("validated"),
            DistributionParams {
                trigger_threshold: kn.trigger_threshold,
                top_k: kn.top_k,
                push_limit: kn.push_limit,
            },
            kn.trigger_scope,
        );
        if kn.prefill == Prefill::Popular {
            let topics = self.env.universe.topics.len();
            for store in &mut layer.stores {
                let weights = self.env.workload.popularity(store.edge_id, 0, topics);
                let mut order: Vec<usize> = (0..topics).collect();
                order.sort_by(|&a, &b| weights[b].total_cmp(&weights[a]).then(a.cmp(&b)));
                store.prefill(order.iter().map(|&t| &self.env.universe.communities[t]));
            }
        }
        layer
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn paths(err: ConfigError) -> Vec<String> {
        match err {
            ConfigError::Invalid(issues) => issues.into_iter().map(|i| i.path).collect(),
            other => panic!("expected validation error, got {other}"),
        }
    }

    #[test]
    fn builtin_scenarios_load() {
        for name in BUILTIN_SCENARIOS {
            let s = Scenario::builtin(name).unwrap();
            assert_eq!(
                s.gate.kernel_cost.dim(),
                CONTEXT_FEATURES + s.config.arms.len()
            );
        }
        assert!(matches!(
            ScenarioConfig::builtin("nope"),
            Err(ConfigError::UnknownScenario(_))
        ));
    }

    #[test]
    fn unknown_safe_seed_is_named() {
        let mut cfg = ScenarioConfig::builtin("table3").unwrap();
        cfg.gate.safe_seed = vec!["missing".into()];
        assert_eq!(
            paths(cfg.validate().unwrap_err()),
            vec!["gate.safe_seed[0]"]
        );
    }

    #[test]
    fn all_issues_are_reported() {
        let mut cfg = ScenarioConfig::builtin("table3").unwrap();
        cfg.gate.kernel.delay.context_length_scale[2] = -1.0;
        cfg.qos.max_delay_s = 0.0;
        cfg.knowledge.top_k = 0;
        assert_eq!(
            paths(cfg.validate().unwrap_err()),
            vec![
                "qos.max_delay_s",
                "gate.kernel.delay.context_length_scale[2]",
                "knowledge.top_k",
            ]
        );
    }

    #[test]
    fn overrides_apply_and_revalidate() {
        let mut cfg = ScenarioConfig::builtin("table3").unwrap();
        let o = Overrides {
            warmup_steps: Some(7),
            beta: Some(1.5),
            max_delay_s: Some(2.0),
            ..Default::default()
        };
        cfg.apply(&o).unwrap();
        assert_eq!(cfg.gate.warmup_steps, 7);
        assert_eq!((cfg.gate.beta_safe, cfg.gate.beta_acq), (1.5, 1.5));
        assert_eq!(cfg.qos.max_delay_s, 2.0);
        let bad = Overrides {
            min_accuracy: Some(1.5),
            ..Default::default()
        };
        assert_eq!(
            paths(cfg.apply(&bad).unwrap_err()),
            vec!["qos.min_accuracy"]
        );
    }

    #[test]
    fn kernel_spec_expands_over_arms() {
        let k = KernelSpec {
            signal_variance: 1.0,
            noise_variance: 0.1,
            context_length_scale: [1.0, 2.0, 3.0, 4.0, 5.0, 6.0],
            arm_length_scale: 0.5,
            jitter: DEFAULT_JITTER,
        };
        let p = k.params(3);
        assert_eq!(
            p.length_scale,
            vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 0.5, 0.5, 0.5]
        );
    }
}
