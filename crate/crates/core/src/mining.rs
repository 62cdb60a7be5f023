//! Triplet mining against a periodically refreshed descriptor cache.

use std::collections::BTreeMap;
use std::io::Write;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geo::geo_distance;
use crate::io::{Dataset, Domain, Manifest, Role};
use crate::model::VprModel;

/// Descriptors of database records, valid for one parameter generation.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct DescriptorCache {
    vectors: BTreeMap<u64, Vec<f64>>,
    generation: u64,
    refresh_every: usize,
}

impl DescriptorCache {
    pub fn new(refresh_every: usize) -> Self {
        Self {
            vectors: BTreeMap::new(),
            generation: 0,
            refresh_every,
        }
    }

    pub fn generation(&self) -> u64 {
        self.generation
    }

    pub fn refresh_every(&self) -> usize {
        self.refresh_every
    }

    pub fn get(&self, id: u64) -> Option<&[f64]> {
        self.vectors.get(&id).map(Vec::as_slice)
    }

    pub fn len(&self) -> usize {
        self.vectors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vectors.is_empty()
    }

    /// Whether the cache must be rebuilt before mining at `iteration`.
    pub fn is_due(&self, iteration: usize) -> bool {
        self.generation == 0 || (self.refresh_every > 0 && iteration % self.refresh_every == 0)
    }

    /// Replaces every vector and advances the generation.
    pub fn replace(&mut self, vectors: BTreeMap<u64, Vec<f64>>) -> Result<()> {
        let mut lens = vectors.values().map(Vec::len);
        if let Some(first) = lens.next() {
            if lens.any(|l| l != first) {
                return Err(Error::dim("cached descriptors differ in length"));
            }
        }
        self.vectors = vectors;
        self.generation += 1;
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MiningPolicy {
    pub positive_radius_m: f64,
    pub negative_exclusion_radius_m: f64,
    pub negatives_per_query: usize,
    /// Training iterations between cache refreshes.
    pub cache_refresh_every: usize,
    /// When set, hard negatives are searched within this many randomly drawn
    /// candidates instead of the whole database.
    pub negative_sample: Option<usize>,
    /// Margin of the triplet loss applied to mined triplets.
    pub margin: f64,
}

impl Default for MiningPolicy {
    fn default() -> Self {
        Self {
            positive_radius_m: 10.0,
            negative_exclusion_radius_m: 25.0,
            negatives_per_query: 1,
            cache_refresh_every: 100,
            negative_sample: None,
            margin: 0.1,
        }
    }
}

impl MiningPolicy {
    pub fn validate(&self) -> Result<()> {
        if !(self.positive_radius_m > 0.0 && self.negative_exclusion_radius_m >= self.positive_radius_m) {
            return Err(Error::Config(format!(
                "need 0 < positive radius ({}) ≤ negative exclusion radius ({})",
                self.positive_radius_m, self.negative_exclusion_radius_m
            )));
        }
        if !(self.margin > 0.0) {
            return Err(Error::Config(format!("margin must be positive, got {}", self.margin)));
        }
        if self.negatives_per_query == 0 || self.negative_sample == Some(0) {
            return Err(Error::Config("negative counts must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Triplet {
    pub query: u64,
    pub positive: u64,
    /// Hardest first.
    pub negatives: Vec<u64>,
    pub d_pos: f64,
    pub d_neg: Vec<f64>,
}

/// Records that can serve as positives or negatives: source `train` and
/// `gallery` records.
pub fn database_ids(manifest: &Manifest) -> Vec<u64> {
    manifest
        .select(Domain::Source, &[Role::Train, Role::Gallery])
        .map(|r| r.id)
        .collect()
}

fn distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// Best positive and hardest negatives for `query_id` from the cached
/// database descriptors. Deterministic given the cache generation and seed.
pub fn mine_triplet(
    query_id: u64,
    manifest: &Manifest,
    cache: &DescriptorCache,
    policy: &MiningPolicy,
    seed: u64,
) -> Result<Triplet> {
    let query = manifest
        .get(query_id)
        .ok_or_else(|| Error::Contract(format!("query {query_id} is not in the manifest")))?;
    let qd = cache
        .get(query_id)
        .ok_or_else(|| Error::Contract(format!("query {query_id} has no cached descriptor")))?;
    let mut positives = Vec::new();
    let mut negatives = Vec::new();
    for r in manifest.select(Domain::Source, &[Role::Train, Role::Gallery]) {
        if r.id == query_id {
            continue;
        }
        let ground = geo_distance(&query.coord, &r.coord)?;
        let in_pos = ground <= policy.positive_radius_m;
        let in_neg = ground > policy.negative_exclusion_radius_m;
        if !(in_pos || in_neg) {
            continue;
        }
        let d = cache
            .get(r.id)
            .ok_or_else(|| Error::Contract(format!("record {} has no cached descriptor", r.id)))?;
        if d.len() != qd.len() {
            return Err(Error::dim("cached descriptors differ in length"));
        }
        let entry = (distance(qd, d), r.id);
        if in_pos {
            positives.push(entry);
        } else {
            negatives.push(entry);
        }
    }
    let order = |a: &(f64, u64), b: &(f64, u64)| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1));
    let &(d_pos, positive) = positives
        .iter()
        .min_by(|a, b| order(a, b))
        .ok_or(Error::QueryUnusable {
            query_id,
            reason: "no database record within the positive radius",
        })?;
    if negatives.is_empty() {
        return Err(Error::QueryUnusable {
            query_id,
            reason: "no database record beyond the negative exclusion radius",
        });
    }
    negatives.sort_by(|a, b| a.1.cmp(&b.1));
    if let Some(n) = policy.negative_sample.filter(|&n| n < negatives.len()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(cache.generation());
        let mut picked: Vec<usize> = sample(&mut rng, negatives.len(), n).into_vec();
        picked.sort_unstable();
        negatives = picked.into_iter().map(|i| negatives[i]).collect();
    }
    negatives.sort_by(order);
    negatives.truncate(policy.negatives_per_query);
    Ok(Triplet {
        query: query_id,
        positive,
        negatives: negatives.iter().map(|n| n.1).collect(),
        d_pos,
        d_neg: negatives.iter().map(|n| n.0).collect(),
    })
}

/// Recomputes the descriptors of every database record in `dataset` with the
/// model's current parameters.
pub fn refresh_cache(model: &VprModel, dataset: &Dataset, cache: &mut DescriptorCache) -> Result<()> {
    let mut vectors = BTreeMap::new();
    for id in database_ids(dataset.manifest()) {
        vectors.insert(id, model.describe(dataset.image(id)?)?.into_vec());
    }
    cache.replace(vectors)
}

/// CSV log of emitted triplets (`iteration,query_id,pos_id,neg_id,d_pos,d_neg`).
pub struct TripletLog<W: Write> {
    out: W,
}

impl<W: Write> TripletLog<W> {
    pub fn new(mut out: W) -> Result<Self> {
        writeln!(out, "iteration,query_id,pos_id,neg_id,d_pos,d_neg")?;
        Ok(Self { out })
    }

    pub fn log(&mut self, iteration: usize, t: &Triplet) -> Result<()> {
        for (n, d) in t.negatives.iter().zip(&t.d_neg) {
            writeln!(self.out, "{iteration},{},{},{n},{},{d}", t.query, t.positive, t.d_pos)?;
        }
        Ok(())
    }

    pub fn into_inner(self) -> W {
        self.out
    }
}
