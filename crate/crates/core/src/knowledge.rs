//! Edge knowledge stores and cloud-to-edge distribution.
//!
//! Each edge holds a FIFO queue of keyword-tagged chunks. Queries are counted
//! and their keywords buffered; once the trigger threshold is reached the
//! cloud ranks its communities by how many of their keywords match the buffer,
//! takes the top `k`, and pushes up to `push_limit` chunks to the edge,
//! alternating between the selected communities.
//!
//! Keyword similarity is modelled by a partition of keyword ids into synonym
//! classes: two keywords match iff they share a class.

use std::collections::{BTreeMap, HashMap, VecDeque};

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub type KeywordId = u32;
pub type ChunkId = u32;
pub type CommunityId = u32;
pub type EdgeId = usize;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum KnowledgeError {
    #[error("query has no keywords")]
    EmptyQuery,

    #[error("keyword {0} appears in more than one synonym class")]
    OverlappingClasses(KeywordId),

    #[error("no edge stores")]
    NoStores,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Chunk {
    pub id: ChunkId,
    pub keywords: Vec<KeywordId>,
    pub community_id: CommunityId,
    pub inserted_at_step: u64,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Community {
    pub id: CommunityId,
    pub keywords: Vec<KeywordId>,
    /// Sorted by chunk id.
    pub chunks: Vec<Chunk>,
}

impl Community {
    /// Builds a community, tagging every chunk with its id and sorting chunks by id.
    pub fn new(id: CommunityId, keywords: Vec<KeywordId>, mut chunks: Vec<Chunk>) -> Self {
        for chunk in &mut chunks {
            chunk.community_id = id;
        }
        chunks.sort_by_key(|c| c.id);
        Self {
            id,
            keywords,
            chunks,
        }
    }
}

/// Partition of keyword ids into synonym classes. Keywords not listed in any
/// group form singleton classes.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct SynonymMap {
    class_of: HashMap<KeywordId, KeywordId>,
    members: HashMap<KeywordId, Vec<KeywordId>>,
}

impl SynonymMap {
    pub fn identity() -> Self {
        Self::default()
    }

    pub fn from_groups(groups: &[Vec<KeywordId>]) -> Result<Self, KnowledgeError> {
        let mut map = Self::default();
        for group in groups {
            let mut group = group.clone();
            group.sort_unstable();
            group.dedup();
            let Some(&rep) = group.first() else { continue };
            for &k in &group {
                if map.class_of.insert(k, rep).is_some() {
                    return Err(KnowledgeError::OverlappingClasses(k));
                }
            }
            map.members.insert(rep, group);
        }
        Ok(map)
    }

    /// Representative (smallest member) of the keyword's class.
    pub fn class(&self, k: KeywordId) -> KeywordId {
        self.class_of.get(&k).copied().unwrap_or(k)
    }

    /// Members of the keyword's class, or `None` for a singleton.
    pub fn group(&self, k: KeywordId) -> Option<&[KeywordId]> {
        self.class_of
            .get(&k)
            .map(|rep| self.members[rep].as_slice())
    }

    pub fn same_class(&self, a: KeywordId, b: KeywordId) -> bool {
        self.class(a) == self.class(b)
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TriggerScope {
    /// Each edge counts its own queries.
    #[default]
    PerEdge,
    /// One cloud-wide counter; every edge with buffered queries is refreshed.
    Global,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DistributionParams {
    pub trigger_threshold: u32,
    pub top_k: usize,
    pub push_limit: usize,
}

impl Default for DistributionParams {
    fn default() -> Self {
        Self {
            trigger_threshold: 20,
            top_k: 3,
            push_limit: 500,
        }
    }
}

/// What one distribution pushed to an edge.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Distribution {
    pub communities: Vec<CommunityId>,
    pub inserted: Vec<ChunkId>,
    pub evicted: Vec<ChunkId>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EdgeStore {
    pub edge_id: EdgeId,
    capacity: usize,
    queue: VecDeque<Chunk>,
    keyword_index: HashMap<KeywordId, u32>,
    held: HashMap<ChunkId, u32>,
    pending_qa: u32,
    recent_keywords: Vec<KeywordId>,
}

impl EdgeStore {
    pub fn new(edge_id: EdgeId, capacity: usize) -> Self {
        assert!(capacity > 0, "edge store capacity must be positive");
        Self {
            edge_id,
            capacity,
            queue: VecDeque::new(),
            keyword_index: HashMap::new(),
            held: HashMap::new(),
            pending_qa: 0,
            recent_keywords: Vec::new(),
        }
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.queue.len()
    }

    pub fn is_empty(&self) -> bool {
        self.queue.is_empty()
    }

    pub fn chunks(&self) -> impl Iterator<Item = &Chunk> {
        self.queue.iter()
    }

    pub fn pending_qa(&self) -> u32 {
        self.pending_qa
    }

    pub fn recent_keywords(&self) -> &[KeywordId] {
        &self.recent_keywords
    }

    /// Number of held chunks carrying each keyword.
    pub fn keyword_index(&self) -> &HashMap<KeywordId, u32> {
        &self.keyword_index
    }

    pub fn holds_keyword(&self, k: KeywordId) -> bool {
        self.keyword_index.contains_key(&k)
    }

    pub fn holds_chunk(&self, id: ChunkId) -> bool {
        self.held.contains_key(&id)
    }

    /// Appends chunks in order, evicting from the front while over capacity.
    /// Returns the ids of evicted chunks, oldest first.
    pub fn insert_chunks(&mut self, chunks: impl IntoIterator<Item = Chunk>) -> Vec<ChunkId> {
        let mut evicted = Vec::new();
        for chunk in chunks {
            for &k in &chunk.keywords {
                *self.keyword_index.entry(k).or_insert(0) += 1;
            }
            *self.held.entry(chunk.id).or_insert(0) += 1;
            self.queue.push_back(chunk);
            while self.queue.len() > self.capacity {
                let old = self.queue.pop_front().expect("queue over capacity");
                for k in &old.keywords {
                    decrement(&mut self.keyword_index, k);
                }
                decrement(&mut self.held, &old.id);
                evicted.push(old.id);
            }
        }
        evicted
    }

    /// Fills free capacity with chunks from `communities`, in order, without
    /// evicting anything.
    pub fn prefill<'a>(&mut self, communities: impl IntoIterator<Item = &'a Community>) -> usize {
        let free = self.capacity - self.len();
        let chunks: Vec<Chunk> = communities
            .into_iter()
            .flat_map(|c| c.chunks.iter())
            .filter(|c| !self.holds_chunk(c.id))
            .take(free)
            .cloned()
            .collect();
        let n = chunks.len();
        self.insert_chunks(chunks);
        n
    }

    /// Counts one answered query and buffers its keywords.
    pub fn record_query(&mut self, query_keywords: &[KeywordId]) {
        self.pending_qa += 1;
        self.recent_keywords.extend_from_slice(query_keywords);
    }

    /// Pushes chunks from the best-matching communities and clears the query
    /// buffer and counter.
    pub fn distribute(
        &mut self,
        cloud: &[Community],
        params: &DistributionParams,
        syn: &SynonymMap,
        step: u64,
    ) -> Distribution {
        let selected = top_communities(cloud, &self.recent_keywords, params.top_k, syn);
        let mut cursors = vec![0usize; selected.len()];
        let mut picked: Vec<Chunk> = Vec::new();
        'fill: while picked.len() < params.push_limit {
            let mut progressed = false;
            for (slot, &ci) in selected.iter().enumerate() {
                let chunks = &cloud[ci].chunks;
                while cursors[slot] < chunks.len() && self.holds_chunk(chunks[cursors[slot]].id) {
                    cursors[slot] += 1;
                }
                if let Some(chunk) = chunks.get(cursors[slot]) {
                    cursors[slot] += 1;
                    progressed = true;
                    picked.push(Chunk {
                        inserted_at_step: step,
                        ..chunk.clone()
                    });
                    if picked.len() == params.push_limit {
                        break 'fill;
                    }
                }
            }
            if !progressed {
                break;
            }
        }
        let inserted = picked.iter().map(|c| c.id).collect();
        let evicted = self.insert_chunks(picked);
        self.pending_qa = 0;
        self.recent_keywords.clear();
        Distribution {
            communities: selected.iter().map(|&i| cloud[i].id).collect(),
            inserted,
            evicted,
        }
    }

    /// Records a query and, if the counter reaches the threshold, distributes.
    pub fn record_query_and_maybe_update(
        &mut self,
        query_keywords: &[KeywordId],
        cloud: &[Community],
        params: &DistributionParams,
        syn: &SynonymMap,
        step: u64,
    ) -> Option<Distribution> {
        self.record_query(query_keywords);
        (self.pending_qa >= params.trigger_threshold)
            .then(|| self.distribute(cloud, params, syn, step))
    }
}

fn decrement<K: std::hash::Hash + Eq>(map: &mut HashMap<K, u32>, key: &K) {
    if let Some(count) = map.get_mut(key) {
        *count -= 1;
        if *count == 0 {
            map.remove(key);
        }
    }
}

/// Indices into `cloud` of the `k` communities with the most keyword matches
/// against `recent` (counted with multiplicity), ties by community id.
/// Communities with no match are never selected.
pub fn top_communities(
    cloud: &[Community],
    recent: &[KeywordId],
    k: usize,
    syn: &SynonymMap,
) -> Vec<usize> {
    let mut wanted: HashMap<KeywordId, u64> = HashMap::new();
    for &kw in recent {
        *wanted.entry(syn.class(kw)).or_insert(0) += 1;
    }
    let mut scored: Vec<(u64, CommunityId, usize)> = cloud
        .iter()
        .enumerate()
        .map(|(i, c)| {
            let score = c
                .keywords
                .iter()
                .map(|&kw| wanted.get(&syn.class(kw)).copied().unwrap_or(0))
                .sum();
            (score, c.id, i)
        })
        .filter(|(score, _, _)| *score > 0)
        .collect();
    scored.sort_by(|a, b| b.0.cmp(&a.0).then(a.1.cmp(&b.1)));
    scored.into_iter().take(k).map(|(_, _, i)| i).collect()
}

/// Fraction of query keywords whose synonym class is represented in the store.
pub fn overlap_ratio(
    query_keywords: &[KeywordId],
    store: &EdgeStore,
    syn: &SynonymMap,
) -> Result<f64, KnowledgeError> {
    if query_keywords.is_empty() {
        return Err(KnowledgeError::EmptyQuery);
    }
    let covered = query_keywords
        .iter()
        .filter(|&&k| match syn.group(k) {
            Some(group) => group.iter().any(|&m| store.holds_keyword(m)),
            None => store.holds_keyword(k),
        })
        .count();
    Ok(covered as f64 / query_keywords.len() as f64)
}

/// Store with the highest overlap; ties go to the lowest edge id.
pub fn best_edge(
    query_keywords: &[KeywordId],
    stores: &[EdgeStore],
    syn: &SynonymMap,
) -> Result<(EdgeId, f64), KnowledgeError> {
    let mut best: Option<(EdgeId, f64)> = None;
    for store in stores {
        let ratio = overlap_ratio(query_keywords, store, syn)?;
        best = match best {
            Some((id, r)) if r > ratio || (r == ratio && id < store.edge_id) => Some((id, r)),
            _ => Some((store.edge_id, ratio)),
        };
    }
    best.ok_or(KnowledgeError::NoStores)
}

/// All edge stores plus the cloud communities they draw from.
#[derive(Debug, Clone)]
pub struct KnowledgeLayer {
    pub stores: Vec<EdgeStore>,
    pub cloud: Vec<Community>,
    pub synonyms: SynonymMap,
    pub params: DistributionParams,
    pub scope: TriggerScope,
    global_pending: u32,
}

impl KnowledgeLayer {
    pub fn new(
        edges: usize,
        capacity: usize,
        cloud: Vec<Community>,
        synonyms: SynonymMap,
        params: DistributionParams,
        scope: TriggerScope,
    ) -> Self {
        Self {
            stores: (0..edges).map(|e| EdgeStore::new(e, capacity)).collect(),
            cloud,
            synonyms,
            params,
            scope,
            global_pending: 0,
        }
    }

    pub fn best_edge(&self, query_keywords: &[KeywordId]) -> Result<(EdgeId, f64), KnowledgeError> {
        best_edge(query_keywords, &self.stores, &self.synonyms)
    }

    /// Records a query answered for `edge`; returns the distributions it triggered.
    pub fn record(
        &mut self,
        edge: EdgeId,
        query_keywords: &[KeywordId],
        step: u64,
    ) -> BTreeMap<EdgeId, Distribution> {
        let mut out = BTreeMap::new();
        match self.scope {
            TriggerScope::PerEdge => {
                if let Some(d) = self.stores[edge].record_query_and_maybe_update(
                    query_keywords,
                    &self.cloud,
                    &self.params,
                    &self.synonyms,
                    step,
                ) {
                    out.insert(edge, d);
                }
            }
            TriggerScope::Global => {
                self.stores[edge].record_query(query_keywords);
                self.global_pending += 1;
                if self.global_pending >= self.params.trigger_threshold {
                    self.global_pending = 0;
                    for store in &mut self.stores {
                        if store.pending_qa() > 0 {
                            let d =
                                store.distribute(&self.cloud, &self.params, &self.synonyms, step);
                            out.insert(store.edge_id, d);
                        }
                    }
                }
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn chunk(id: ChunkId, keywords: &[KeywordId]) -> Chunk {
        Chunk {
            id,
            keywords: keywords.to_vec(),
            community_id: 0,
            inserted_at_step: 0,
        }
    }

    fn store_with(keywords: &[KeywordId]) -> EdgeStore {
        let mut s = EdgeStore::new(0, 100);
        s.insert_chunks(
            keywords
                .iter()
                .enumerate()
                .map(|(i, &k)| chunk(i as u32, &[k])),
        );
        s
    }

    #[test]
    fn overlap_examples() {
        let syn = SynonymMap::identity();
        let s = store_with(&[1, 2]);
        let r = overlap_ratio(&[1, 2, 3], &s, &syn).unwrap();
        assert!((r - 2.0 / 3.0).abs() < 1e-12);
        assert_eq!(overlap_ratio(&[1, 2], &s, &syn).unwrap(), 1.0);
        assert_eq!(
            overlap_ratio(&[], &s, &syn),
            Err(KnowledgeError::EmptyQuery)
        );

        let syn = SynonymMap::from_groups(&[vec![1, 9]]).unwrap();
        let s = store_with(&[9]);
        assert_eq!(overlap_ratio(&[1], &s, &syn).unwrap(), 1.0);
        assert_eq!(overlap_ratio(&[2], &s, &syn).unwrap(), 0.0);
    }

    #[test]
    fn synonym_groups_must_be_disjoint() {
        assert_eq!(
            SynonymMap::from_groups(&[vec![1, 2], vec![2, 3]]),
            Err(KnowledgeError::OverlappingClasses(2))
        );
        let syn = SynonymMap::from_groups(&[vec![5, 3]]).unwrap();
        assert_eq!(syn.class(5), 3);
        assert_eq!(syn.group(4), None);
        assert_eq!(syn.group(5), Some([3, 5].as_slice()));
        assert!(syn.same_class(3, 5));
    }

    #[test]
    fn best_edge_examples() {
        let syn = SynonymMap::identity();
        let mut stores: Vec<EdgeStore> = (1..=3).map(|e| EdgeStore::new(e, 10)).collect();
        // ratios 0.2, 0.9, 0.5 need 10 query keywords
        let q: Vec<KeywordId> = (0..10).collect();
        for (store, n) in stores.iter_mut().zip([2u32, 9, 5]) {
            store.insert_chunks((0..n).map(|k| chunk(k, &[k])));
        }
        assert_eq!(best_edge(&q, &stores, &syn).unwrap(), (2, 0.9));

        let ties: Vec<EdgeStore> = [3, 1, 2].iter().map(|&e| EdgeStore::new(e, 10)).collect();
        assert_eq!(best_edge(&q, &ties, &syn).unwrap(), (1, 0.0));

        assert_eq!(best_edge(&q, &stores[..1], &syn).unwrap(), (1, 0.2));
        assert_eq!(best_edge(&q, &[], &syn), Err(KnowledgeError::NoStores));
    }

    #[test]
    fn fifo_eviction() {
        let mut s = EdgeStore::new(0, 3);
        let evicted = s.insert_chunks((1..=4).map(|i| chunk(i, &[i])));
        assert_eq!(evicted, vec![1]);
        assert_eq!(s.chunks().map(|c| c.id).collect::<Vec<_>>(), vec![2, 3, 4]);
        assert!(!s.holds_keyword(1));

        let mut s = EdgeStore::new(0, 10);
        assert!(s.insert_chunks((1..=4).map(|i| chunk(i, &[i]))).is_empty());
    }

    fn community(
        id: CommunityId,
        keywords: &[KeywordId],
        chunk_ids: std::ops::Range<u32>,
    ) -> Community {
        Community::new(
            id,
            keywords.to_vec(),
            chunk_ids.map(|c| chunk(c, &keywords[..1])).collect(),
        )
    }

    #[test]
    fn prefill_stops_at_capacity() {
        let cloud = vec![community(0, &[1], 0..4), community(1, &[2], 4..8)];
        let mut s = EdgeStore::new(0, 6);
        assert_eq!(s.prefill(&cloud), 6);
        assert_eq!(
            s.chunks().map(|c| c.id).collect::<Vec<_>>(),
            vec![0, 1, 2, 3, 4, 5]
        );
        assert_eq!(s.prefill(&cloud), 0);
    }

    #[test]
    fn trigger_fires_on_the_twentieth_query() {
        let cloud = vec![community(0, &[1, 2], 0..30)];
        let params = DistributionParams::default();
        let syn = SynonymMap::identity();
        let mut s = EdgeStore::new(0, 1000);
        for step in 0..19 {
            assert!(s
                .record_query_and_maybe_update(&[1], &cloud, &params, &syn, step)
                .is_none());
        }
        assert!(s.is_empty());
        let d = s
            .record_query_and_maybe_update(&[1], &cloud, &params, &syn, 19)
            .unwrap();
        assert_eq!(d.inserted.len(), 30);
        assert_eq!(s.pending_qa(), 0);
        assert!(s.recent_keywords().is_empty());
        assert!(s.chunks().all(|c| c.inserted_at_step == 19));
    }

    #[test]
    fn top_k_by_score() {
        // recent keywords: 10 x5, 20 x3, 30 x1
        let recent: Vec<KeywordId> = [[10u32; 5].as_slice(), &[20; 3], &[30]].concat();
        let cloud = vec![
            community(7, &[30], 0..1),
            community(8, &[20], 1..2),
            community(9, &[10], 2..3),
            community(6, &[99], 3..4),
        ];
        let top = top_communities(&cloud, &recent, 2, &SynonymMap::identity());
        assert_eq!(
            top.iter().map(|&i| cloud[i].id).collect::<Vec<_>>(),
            vec![9, 8]
        );
        let all = top_communities(&cloud, &recent, 10, &SynonymMap::identity());
        assert_eq!(all.len(), 3, "zero-score communities are skipped");
    }

    #[test]
    fn push_limit_truncates_round_robin() {
        let cloud = vec![community(0, &[1], 0..400), community(1, &[2], 1000..1400)];
        let params = DistributionParams {
            trigger_threshold: 1,
            top_k: 2,
            push_limit: 500,
        };
        let mut s = EdgeStore::new(0, 1000);
        let d = s
            .record_query_and_maybe_update(&[1, 1, 2], &cloud, &params, &SynonymMap::identity(), 0)
            .unwrap();
        assert_eq!(d.communities, vec![0, 1]);
        assert_eq!(d.inserted.len(), 500);
        assert_eq!(&d.inserted[..4], &[0, 1000, 1, 1001]);
        assert_eq!(s.len(), 500);
    }

    #[test]
    fn held_chunks_are_not_pushed_twice() {
        let cloud = vec![community(0, &[1], 0..5)];
        let params = DistributionParams {
            trigger_threshold: 1,
            top_k: 1,
            push_limit: 3,
        };
        let syn = SynonymMap::identity();
        let mut s = EdgeStore::new(0, 100);
        let first = s
            .record_query_and_maybe_update(&[1], &cloud, &params, &syn, 0)
            .unwrap();
        let second = s
            .record_query_and_maybe_update(&[1], &cloud, &params, &syn, 1)
            .unwrap();
        assert_eq!(first.inserted, vec![0, 1, 2]);
        assert_eq!(second.inserted, vec![3, 4]);
    }

    #[test]
    fn global_scope_refreshes_every_active_edge() {
        let cloud = vec![community(0, &[1], 0..5), community(1, &[2], 5..10)];
        let params = DistributionParams {
            trigger_threshold: 3,
            top_k: 1,
            push_limit: 10,
        };
        let mut layer = KnowledgeLayer::new(
            3,
            50,
            cloud,
            SynonymMap::identity(),
            params,
            TriggerScope::Global,
        );
        assert!(layer.record(0, &[1], 0).is_empty());
        assert!(layer.record(1, &[2], 1).is_empty());
        let out = layer.record(0, &[1], 2);
        assert_eq!(out.keys().copied().collect::<Vec<_>>(), vec![0, 1]);
        assert_eq!(out[&0].communities, vec![0]);
        assert_eq!(out[&1].communities, vec![1]);
        assert!(layer.stores[2].is_empty());
    }

    fn rebuilt_index(s: &EdgeStore) -> HashMap<KeywordId, u32> {
        let mut idx = HashMap::new();
        for c in s.chunks() {
            for &k in &c.keywords {
                *idx.entry(k).or_insert(0) += 1;
            }
        }
        idx
    }

    proptest! {
        #[test]
        fn index_and_capacity_hold(cap in 1usize..20, batches in prop::collection::vec(prop::collection::vec((0u32..50, prop::collection::vec(0u32..15, 1..4)), 0..12), 0..10)) {
            let mut s = EdgeStore::new(0, cap);
            let mut reference: VecDeque<u32> = VecDeque::new();
            for batch in batches {
                for (id, _) in &batch {
                    reference.push_back(*id);
                    while reference.len() > cap {
                        reference.pop_front();
                    }
                }
                s.insert_chunks(batch.into_iter().map(|(id, kws)| chunk(id, &kws)));
                prop_assert!(s.len() <= cap);
                prop_assert_eq!(s.keyword_index(), &rebuilt_index(&s));
                prop_assert_eq!(s.chunks().map(|c| c.id).collect::<VecDeque<_>>(), reference.clone());
            }
        }

        #[test]
        fn overlap_in_unit_interval(query in prop::collection::vec(0u32..30, 1..8), held in prop::collection::vec(0u32..30, 0..20)) {
            let s = store_with(&held);
            let r = overlap_ratio(&query, &s, &SynonymMap::identity()).unwrap();
            prop_assert!((0.0..=1.0).contains(&r));
            let all_present = query.iter().all(|k| held.contains(k));
            prop_assert_eq!(r == 1.0, all_present);
        }
    }
}
