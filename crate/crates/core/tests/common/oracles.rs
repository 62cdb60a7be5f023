//! Exhaustive-scan references for retrieval and mining, written without the
//! library's ranking code.

use std::collections::BTreeMap;
use std::path::PathBuf;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use vpr_core::eval::{DescriptorIndex, EvalQuery};
use vpr_core::geo::{geo_distance, Coordinate};
use vpr_core::io::{Domain, Manifest, Record, Role};
use vpr_core::mining::{DescriptorCache, MiningPolicy};

pub fn random_vec(rng: &mut ChaCha8Rng, dim: usize) -> Vec<f64> {
    (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect()
}

pub struct Instance {
    pub index: DescriptorIndex,
    pub coords: BTreeMap<u64, Coordinate>,
    pub queries: Vec<EvalQuery>,
}

/// Gallery on a 1-D street with random descriptors; ids are shuffled so that
/// insertion order says nothing about position.
pub fn retrieval_instance(rng: &mut ChaCha8Rng, gallery: usize, queries: usize, dim: usize) -> Instance {
    let mut ids: Vec<u64> = (0..gallery as u64).map(|i| 1000 + 3 * i).collect();
    ids.shuffle(rng);
    let mut index = DescriptorIndex::new(dim);
    let mut coords = BTreeMap::new();
    for &id in &ids {
        index.push(id, &random_vec(rng, dim)).unwrap();
        coords.insert(id, Coordinate::utm(rng.random_range(0.0..2000.0), 0.0));
    }
    let queries = (0..queries as u64)
        .map(|id| EvalQuery {
            id,
            coord: Coordinate::utm(rng.random_range(0.0..2000.0), 0.0),
            descriptor: random_vec(rng, dim),
        })
        .collect();
    Instance { index, coords, queries }
}

fn sq(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum()
}

/// Every gallery id, nearest first, ties by lower id.
pub fn oracle_ranking(index: &DescriptorIndex, q: &[f64]) -> Vec<u64> {
    let mut all: Vec<(f64, u64)> = index
        .ids()
        .iter()
        .enumerate()
        .map(|(i, &id)| (sq(index.row(i), q), id))
        .collect();
    all.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap().then(a.1.cmp(&b.1)));
    all.into_iter().map(|x| x.1).collect()
}

pub struct OracleRecall {
    pub recalls: Vec<f64>,
    pub evaluated: usize,
    pub excluded: Vec<u64>,
}

pub fn oracle_recall(inst: &Instance, radius: f64, ns: &[usize]) -> OracleRecall {
    let mut hits = vec![0usize; ns.len()];
    let mut evaluated = 0;
    let mut excluded = Vec::new();
    for q in &inst.queries {
        let ranking = oracle_ranking(&inst.index, &q.descriptor);
        let is_pos = |id: &u64| geo_distance(&q.coord, &inst.coords[id]).unwrap() <= radius;
        let Some(first) = ranking.iter().position(is_pos) else {
            excluded.push(q.id);
            continue;
        };
        evaluated += 1;
        for (h, &n) in hits.iter_mut().zip(ns) {
            *h += usize::from(first < n);
        }
    }
    OracleRecall {
        recalls: hits.iter().map(|&h| h as f64 / evaluated.max(1) as f64).collect(),
        evaluated,
        excluded,
    }
}

fn rec(id: u64, e: f64, n: f64, role: Role, domain: Domain) -> Record {
    Record {
        id,
        path: PathBuf::from(format!("{id}.vprt")),
        coord: Coordinate::utm(e, n),
        role,
        domain,
        labels: (role == Role::Train && domain == Domain::Source).then(|| PathBuf::from(format!("{id}.pgm"))),
    }
}

/// Query 0 at the origin, database records scattered within 60 m, and a few
/// target and query records that mining must ignore.
pub fn mining_instance(rng: &mut ChaCha8Rng, n: usize, dim: usize) -> (Manifest, DescriptorCache) {
    let mut records = vec![rec(0, 0.0, 0.0, Role::Train, Domain::Source)];
    let mut vectors = BTreeMap::from([(0, random_vec(rng, dim))]);
    for id in 1..=n as u64 {
        let (role, domain) = match rng.random_range(0..10) {
            0 => (Role::Query, Domain::Source),
            1 => (Role::Gallery, Domain::Target),
            2..=5 => (Role::Train, Domain::Source),
            _ => (Role::Gallery, Domain::Source),
        };
        let e = rng.random_range(-60.0..60.0);
        let nn = rng.random_range(-60.0..60.0);
        records.push(rec(id, e, nn, role, domain));
        // coarse values so that distance ties happen
        let v = (0..dim).map(|_| f64::from(rng.random_range(-3..=3)) / 3.0).collect();
        vectors.insert(id, v);
    }
    let mut cache = DescriptorCache::new(10);
    cache.replace(vectors).unwrap();
    (Manifest::new(records, "").unwrap(), cache)
}

/// Positive and hard negatives for query 0 by exhaustive scan.
pub fn oracle_triplet(m: &Manifest, cache: &DescriptorCache, policy: &MiningPolicy) -> Option<(u64, Vec<u64>)> {
    let q = cache.get(0).unwrap();
    let d = |id: u64| sq(q, cache.get(id).unwrap()).sqrt();
    let mut pos: Option<(f64, u64)> = None;
    let mut neg = Vec::new();
    for r in (1u64..).map_while(|id| m.get(id)) {
        let id = r.id;
        if r.domain != Domain::Source || r.role == Role::Query {
            continue;
        }
        let Coordinate::Utm { easting, northing } = r.coord else {
            unreachable!()
        };
        let ground = easting.hypot(northing);
        if ground <= policy.positive_radius_m {
            let c = (d(id), id);
            if pos.map_or(true, |p| c.0 < p.0 || (c.0 == p.0 && c.1 < p.1)) {
                pos = Some(c);
            }
        } else if ground > policy.negative_exclusion_radius_m {
            neg.push((d(id), id));
        }
    }
    neg.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    let (_, p) = pos?;
    if neg.is_empty() {
        return None;
    }
    Some((p, neg.iter().take(policy.negatives_per_query).map(|x| x.1).collect()))
}
