//! Synthetic workload and outcome oracle.
//!
//! Stands in for real retrieval and model serving: queries are drawn from
//! drifting per-edge topic popularities, and for a given (context, arm) the
//! environment realizes correctness, delay and token counts from declared
//! response profiles. Every sample comes from a stream keyed by
//! `(seed, stream, step, lane)`.

use std::f64::consts::TAU;

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::seq::index;
use rand::Rng;
use rand_distr::Normal;
use serde::{Deserialize, Serialize};
use statrs::distribution::{Continuous, ContinuousCDF, Normal as StdNormal};

use crate::cost::{
    resource_cost, time_cost, total_cost, ArmCostProfile, CostError, CostWeights, MeanStd, Outcome,
};
use crate::gate::{Action, Context, Retrieval};
use crate::knowledge::{Chunk, Community, KeywordId};
use crate::rng::{stream_rng, Stream};

/// Draws `max(0, N(mean, stddev))`; a zero stddev returns the mean exactly.
pub fn sample_clamped<R: Rng + ?Sized>(rng: &mut R, dist: MeanStd) -> f64 {
    if dist.stddev == 0.0 {
        return dist.mean.max(0.0);
    }
    let normal = Normal::new(dist.mean, dist.stddev).expect("validated stddev");
    normal.sample(rng).max(0.0)
}

/// `E[max(0, X)]` for `X ~ N(mean, stddev)`.
pub fn clamped_mean(dist: MeanStd) -> f64 {
    if dist.stddev == 0.0 {
        return dist.mean.max(0.0);
    }
    let z = dist.mean / dist.stddev;
    let std = StdNormal::standard();
    dist.mean * std.cdf(z) + dist.stddev * std.pdf(z)
}

/// Rounded normal clamped into `[min, max]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IntDist {
    pub mean: f64,
    pub stddev: f64,
    pub min: u32,
    pub max: u32,
}

impl IntDist {
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R, shift: f64) -> u32 {
        let x = sample_clamped(rng, MeanStd::new((self.mean + shift).max(0.0), self.stddev));
        (x.round() as u32).clamp(self.min, self.max)
    }

    fn issues(&self, path: &str, out: &mut Vec<(String, String)>) {
        if !(self.mean.is_finite() && self.mean >= 0.0) {
            out.push((format!("{path}.mean"), "must be nonnegative".into()));
        }
        if !(self.stddev.is_finite() && self.stddev >= 0.0) {
            out.push((format!("{path}.stddev"), "must be nonnegative".into()));
        }
        if self.min > self.max {
            out.push((format!("{path}.min"), "must not exceed max".into()));
        }
    }
}

fn mean_std_issues(d: &MeanStd, path: &str, out: &mut Vec<(String, String)>) {
    for (field, v) in [("mean", d.mean), ("stddev", d.stddev)] {
        if !(v.is_finite() && v >= 0.0) {
            out.push((
                format!("{path}.{field}"),
                format!("must be nonnegative, got {v}"),
            ));
        }
    }
}

fn rate_issue(v: f64, path: String, out: &mut Vec<(String, String)>) {
    if !(0.0..=1.0).contains(&v) {
        out.push((path, format!("must lie in [0, 1], got {v}")));
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArmResponseProfile {
    pub base_accuracy: f64,
    /// Accuracy gained per unit overlap; applies only to edge retrieval.
    #[serde(default)]
    pub overlap_slope: f64,
    #[serde(default)]
    pub multihop_penalty: f64,
    /// Service delay, excluding network links.
    pub delay: MeanStd,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArmSpec {
    pub name: String,
    pub action: Action,
    pub cost: ArmCostProfile,
    pub response: ArmResponseProfile,
}

impl ArmSpec {
    pub fn issues(&self, path: &str) -> Vec<(String, String)> {
        let mut out: Vec<(String, String)> = self
            .cost
            .issues()
            .into_iter()
            .map(|(f, m)| (format!("{path}.cost.{f}"), m))
            .collect();
        let r = &self.response;
        rate_issue(
            r.base_accuracy,
            format!("{path}.response.base_accuracy"),
            &mut out,
        );
        if !r.overlap_slope.is_finite() {
            out.push((
                format!("{path}.response.overlap_slope"),
                "must be finite".into(),
            ));
        }
        if !(r.multihop_penalty.is_finite() && r.multihop_penalty >= 0.0) {
            out.push((
                format!("{path}.response.multihop_penalty"),
                "must be nonnegative".into(),
            ));
        }
        mean_std_issues(&r.delay, &format!("{path}.response.delay"), &mut out);
        out
    }

    /// Probability that the arm answers correctly in `ctx`.
    pub fn success_probability(&self, ctx: &Context) -> f64 {
        let r = &self.response;
        let mut p = r.base_accuracy;
        if self.action.retrieval == Retrieval::EdgeNaive {
            p += r.overlap_slope * ctx.best_overlap_ratio;
        }
        if ctx.multi_hop {
            p -= r.multihop_penalty;
        }
        p.clamp(0.0, 1.0)
    }

    /// Network delay on the arm's path in `ctx`.
    pub fn network_delay(&self, ctx: &Context) -> f64 {
        let mut d = 0.0;
        if self.action.uses_edge() {
            d += ctx.best_edge_delay_s;
        }
        if self.action.uses_cloud() {
            d += ctx.cloud_delay_s;
        }
        d
    }

    pub fn expected_delay(&self, ctx: &Context) -> f64 {
        clamped_mean(self.response.delay) + self.network_delay(ctx)
    }

    pub fn expected_cost(&self, ctx: &Context, weights: &CostWeights) -> f64 {
        let c = &self.cost;
        let tokens = clamped_mean(c.input_tokens) + clamped_mean(c.output_tokens);
        let ur = 2.0 * c.model_params * tokens / 1e12 * c.calibration;
        let ud = self.expected_delay(ctx) * c.gpu_rate_tflops;
        total_cost(weights, ur, ud)
    }

    /// Realizes one query's outcome for this arm. Draw order is fixed:
    /// correctness, service delay, input tokens, output tokens.
    pub fn realize<R: Rng + ?Sized>(
        &self,
        ctx: &Context,
        weights: &CostWeights,
        rng: &mut R,
    ) -> Result<Outcome, CostError> {
        let p = self.success_probability(ctx);
        let correct = rng.random::<f64>() < p;
        let delay = sample_clamped(rng, self.response.delay) + self.network_delay(ctx);
        let tokens_in = sample_clamped(rng, self.cost.input_tokens);
        let tokens_out = sample_clamped(rng, self.cost.output_tokens);
        let ur = resource_cost(&self.cost, tokens_in, tokens_out)?;
        let ud = time_cost(&self.cost, delay)?;
        Ok(Outcome::new(
            if correct { 1.0 } else { 0.0 },
            delay,
            ur,
            ud,
            weights,
        ))
    }
}

/// Topics and the cloud communities that hold their knowledge, one to one.
#[derive(Debug, Clone, PartialEq)]
pub struct Universe {
    pub topics: Vec<Vec<KeywordId>>,
    pub communities: Vec<Community>,
}

impl Universe {
    /// Topic `t` owns keywords `t*K .. t*K+K`; its chunk `j` carries
    /// `keywords_per_chunk` consecutive topic keywords starting at `j mod K`.
    pub fn generated(
        topics: usize,
        keywords_per_topic: usize,
        chunks_per_topic: usize,
        keywords_per_chunk: usize,
    ) -> Self {
        let k = keywords_per_topic;
        let mut topic_keywords = Vec::with_capacity(topics);
        let mut communities = Vec::with_capacity(topics);
        for t in 0..topics {
            let kws: Vec<KeywordId> = (0..k).map(|i| (t * k + i) as KeywordId).collect();
            let chunks = (0..chunks_per_topic)
                .map(|j| {
                    let mut keywords: Vec<KeywordId> = (0..keywords_per_chunk.min(k))
                        .map(|r| kws[(j + r) % k])
                        .collect();
                    keywords.sort_unstable();
                    Chunk {
                        id: (t * chunks_per_topic + j) as u32,
                        keywords,
                        community_id: t as u32,
                        inserted_at_step: 0,
                    }
                })
                .collect();
            communities.push(Community::new(t as u32, kws.clone(), chunks));
            topic_keywords.push(kws);
        }
        Self {
            topics: topic_keywords,
            communities,
        }
    }

    pub fn from_communities(communities: Vec<Community>) -> Self {
        Self {
            topics: communities.iter().map(|c| c.keywords.clone()).collect(),
            communities,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Popularity {
    /// Topic at rank `r` gets weight `(r + 1)^-exponent`; edge `e` ranks topic
    /// `i` at `(i + e * edge_offset) mod n`.
    Zipf { exponent: f64, edge_offset: usize },
    /// One weight vector per edge.
    Explicit { weights: Vec<Vec<f64>> },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DriftSegment {
    pub start_step: u64,
    pub rotate: usize,
}

/// How popularity moves over time. A rotation by `r` gives topic `i` the
/// base weight of topic `i + r`.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Drift {
    #[default]
    None,
    /// Rotation of the last segment that has started.
    Piecewise { segments: Vec<DriftSegment> },
    /// Rotates by `rotate` more every `every` steps.
    Periodic { every: u64, rotate: usize },
    /// Topic `i` is scaled by `1 + amplitude * sin(2 pi (step / period + i / n))`.
    Sinusoidal { period: f64, amplitude: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetworkSpec {
    pub cloud: MeanStd,
    pub edges: Vec<MeanStd>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct NetworkSample {
    pub cloud_delay_s: f64,
    pub edge_delays_s: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WorkloadSpec {
    pub popularity: Popularity,
    #[serde(default)]
    pub drift: Drift,
    pub keywords_per_query: usize,
    /// Chance of one extra keyword from another topic.
    #[serde(default)]
    pub offtopic_rate: f64,
    pub multihop_rate: f64,
    pub query_len: IntDist,
    pub entity_count: IntDist,
    #[serde(default)]
    pub multihop_len_bonus: f64,
    #[serde(default)]
    pub multihop_entity_bonus: f64,
    pub network: NetworkSpec,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Query {
    pub topic: usize,
    pub keywords: Vec<KeywordId>,
    pub multi_hop: bool,
    pub query_len_tokens: u32,
    pub entity_count: u32,
}

impl WorkloadSpec {
    pub fn issues(&self, edges: usize, topics: usize) -> Vec<(String, String)> {
        let mut out = Vec::new();
        match &self.popularity {
            Popularity::Zipf { exponent, .. } => {
                if !(exponent.is_finite() && *exponent >= 0.0) {
                    out.push((
                        "workload.popularity.exponent".into(),
                        "must be nonnegative".into(),
                    ));
                }
            }
            Popularity::Explicit { weights } => {
                if weights.len() != edges {
                    out.push((
                        "workload.popularity.weights".into(),
                        format!(
                            "expected one vector per edge ({edges}), got {}",
                            weights.len()
                        ),
                    ));
                }
                for (e, w) in weights.iter().enumerate() {
                    let path = format!("workload.popularity.weights[{e}]");
                    if w.len() != topics {
                        out.push((path, format!("expected {topics} weights, got {}", w.len())));
                    } else if w.iter().any(|x| !(x.is_finite() && *x >= 0.0)) {
                        out.push((path, "weights must be nonnegative".into()));
                    } else if (w.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
                        out.push((path, "weights must sum to 1".into()));
                    }
                }
            }
        }
        match &self.drift {
            Drift::None | Drift::Piecewise { .. } => {}
            Drift::Periodic { every, .. } => {
                if *every == 0 {
                    out.push(("workload.drift.every".into(), "must be positive".into()));
                }
            }
            Drift::Sinusoidal { period, amplitude } => {
                if !(period.is_finite() && *period > 0.0) {
                    out.push(("workload.drift.period".into(), "must be positive".into()));
                }
                if !(0.0..1.0).contains(amplitude) {
                    out.push((
                        "workload.drift.amplitude".into(),
                        "must lie in [0, 1)".into(),
                    ));
                }
            }
        }
        if self.keywords_per_query == 0 {
            out.push((
                "workload.keywords_per_query".into(),
                "must be positive".into(),
            ));
        }
        if topics < 2 && self.offtopic_rate > 0.0 {
            out.push((
                "workload.offtopic_rate".into(),
                "needs at least two topics".into(),
            ));
        }
        rate_issue(
            self.offtopic_rate,
            "workload.offtopic_rate".into(),
            &mut out,
        );
        rate_issue(
            self.multihop_rate,
            "workload.multihop_rate".into(),
            &mut out,
        );
        self.query_len.issues("workload.query_len", &mut out);
        self.entity_count.issues("workload.entity_count", &mut out);
        for (name, v) in [
            ("multihop_len_bonus", self.multihop_len_bonus),
            ("multihop_entity_bonus", self.multihop_entity_bonus),
        ] {
            if !v.is_finite() {
                out.push((format!("workload.{name}"), "must be finite".into()));
            }
        }
        mean_std_issues(&self.network.cloud, "workload.network.cloud", &mut out);
        if self.network.edges.len() != edges {
            out.push((
                "workload.network.edges".into(),
                format!("expected {edges} links, got {}", self.network.edges.len()),
            ));
        }
        for (e, link) in self.network.edges.iter().enumerate() {
            mean_std_issues(link, &format!("workload.network.edges[{e}]"), &mut out);
        }
        out
    }

    /// Undrifted topic distribution at `edge`.
    pub fn base_popularity(&self, edge: usize, topics: usize) -> Vec<f64> {
        match &self.popularity {
            Popularity::Zipf {
                exponent,
                edge_offset,
            } => {
                let w: Vec<f64> = (0..topics)
                    .map(|i| {
                        let rank = (i + edge * edge_offset) % topics;
                        ((rank + 1) as f64).powf(-exponent)
                    })
                    .collect();
                let z: f64 = w.iter().sum();
                w.into_iter().map(|x| x / z).collect()
            }
            Popularity::Explicit { weights } => weights[edge].clone(),
        }
    }

    /// Topic distribution at `edge` after drift to `step`.
    pub fn popularity(&self, edge: usize, step: u64, topics: usize) -> Vec<f64> {
        let base = self.base_popularity(edge, topics);
        let rotate = |r: usize| (0..topics).map(|i| base[(i + r) % topics]).collect();
        match &self.drift {
            Drift::None => base,
            Drift::Piecewise { segments } => {
                let r = segments
                    .iter()
                    .filter(|s| s.start_step <= step)
                    .max_by_key(|s| s.start_step)
                    .map_or(0, |s| s.rotate);
                rotate(r)
            }
            Drift::Periodic { every, rotate: r } => {
                let turns = (step / every) as usize;
                rotate(turns.wrapping_mul(*r) % topics.max(1))
            }
            Drift::Sinusoidal { period, amplitude } => {
                let phase = step as f64 / period;
                let w: Vec<f64> = base
                    .iter()
                    .enumerate()
                    .map(|(i, b)| {
                        b * (1.0 + amplitude * (TAU * (phase + i as f64 / topics as f64)).sin())
                    })
                    .collect();
                let z: f64 = w.iter().sum();
                w.into_iter().map(|x| x / z).collect()
            }
        }
    }

    /// The query issued at `edge` on `step`.
    pub fn next_query(&self, universe: &Universe, seed: u64, step: u64, edge: usize) -> Query {
        let mut rng = stream_rng(seed, Stream::Query, step, edge as u64);
        let n = universe.topics.len();
        let weights = self.popularity(edge, step, n);
        let topic = WeightedIndex::new(&weights)
            .expect("validated popularity")
            .sample(&mut rng);
        let pool = &universe.topics[topic];
        let take = self.keywords_per_query.min(pool.len());
        let mut keywords: Vec<KeywordId> = index::sample(&mut rng, pool.len(), take)
            .into_iter()
            .map(|i| pool[i])
            .collect();
        if rng.random::<f64>() < self.offtopic_rate {
            let other = (topic + 1 + rng.random_range(0..n - 1)) % n;
            let pool = &universe.topics[other];
            keywords.push(pool[rng.random_range(0..pool.len())]);
        }
        keywords.sort_unstable();
        keywords.dedup();
        let multi_hop = rng.random::<f64>() < self.multihop_rate;
        let (len_shift, ent_shift) = if multi_hop {
            (self.multihop_len_bonus, self.multihop_entity_bonus)
        } else {
            (0.0, 0.0)
        };
        Query {
            topic,
            keywords,
            multi_hop,
            query_len_tokens: self.query_len.sample(&mut rng, len_shift),
            entity_count: self.entity_count.sample(&mut rng, ent_shift),
        }
    }

    /// Link delays on `step`, observed before the decision.
    pub fn sample_network(&self, seed: u64, step: u64) -> NetworkSample {
        let mut rng = stream_rng(seed, Stream::Network, step, 0);
        NetworkSample {
            cloud_delay_s: sample_clamped(&mut rng, self.network.cloud),
            edge_delays_s: self
                .network
                .edges
                .iter()
                .map(|&d| sample_clamped(&mut rng, d))
                .collect(),
        }
    }
}

/// Arms, workload and cost weights: everything needed to answer "what would
/// happen if arm `a` served this query".
#[derive(Debug, Clone)]
pub struct Environment {
    pub arms: Vec<ArmSpec>,
    pub workload: WorkloadSpec,
    pub universe: Universe,
    pub weights: CostWeights,
}

impl Environment {
    pub fn realize_outcome(
        &self,
        arm: usize,
        ctx: &Context,
        seed: u64,
        step: u64,
    ) -> Result<Outcome, CostError> {
        let mut rng = stream_rng(seed, Stream::Outcome, step, arm as u64);
        self.arms[arm].realize(ctx, &self.weights, &mut rng)
    }

    pub fn expected_accuracy(&self, arm: usize, ctx: &Context) -> f64 {
        self.arms[arm].success_probability(ctx)
    }

    pub fn expected_delay(&self, arm: usize, ctx: &Context) -> f64 {
        self.arms[arm].expected_delay(ctx)
    }

    pub fn expected_cost(&self, arm: usize, ctx: &Context) -> f64 {
        self.arms[arm].expected_cost(ctx, &self.weights)
    }
}
