//! Exact nearest-neighbour retrieval and Recall@N under a ground-distance
//! threshold.

use std::collections::{BTreeMap, HashSet};
use std::fmt::Write as _;
use std::io::{Read, Write};

use crate::error::{Error, Result};
use crate::geo::{geo_distance, Coordinate};

pub const DB_MAGIC: &[u8; 4] = b"VPRD";
pub const DEFAULT_NS: [usize; 3] = [1, 5, 10];
pub const DEFAULT_POSITIVE_RADIUS_M: f64 = 25.0;

/// Gallery descriptors as rows of one matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct DescriptorIndex {
    dim: usize,
    ids: Vec<u64>,
    data: Vec<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Neighbor {
    pub id: u64,
    pub distance: f64,
}

fn squared_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

impl DescriptorIndex {
    pub fn new(dim: usize) -> Self {
        Self {
            dim,
            ids: Vec::new(),
            data: Vec::new(),
        }
    }

    pub fn from_rows<I, V>(dim: usize, rows: I) -> Result<Self>
    where
        I: IntoIterator<Item = (u64, V)>,
        V: AsRef<[f64]>,
    {
        let mut index = Self::new(dim);
        for (id, v) in rows {
            index.push(id, v.as_ref())?;
        }
        Ok(index)
    }

    pub fn push(&mut self, id: u64, descriptor: &[f64]) -> Result<()> {
        if descriptor.len() != self.dim {
            return Err(Error::dim(format!(
                "descriptor of length {} in an index of dimension {}",
                descriptor.len(),
                self.dim
            )));
        }
        if self.ids.contains(&id) {
            return Err(Error::Contract(format!("id {id} already indexed")));
        }
        self.ids.push(id);
        self.data.extend_from_slice(descriptor);
        Ok(())
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn ids(&self) -> &[u64] {
        &self.ids
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn get(&self, id: u64) -> Option<&[f64]> {
        self.ids.iter().position(|&x| x == id).map(|i| self.row(i))
    }

    /// Every gallery record ordered by ascending distance, ties by lower id.
    pub fn rank(&self, query: &[f64]) -> Result<Vec<Neighbor>> {
        if query.len() != self.dim {
            return Err(Error::dim(format!(
                "query of length {} against an index of dimension {}",
                query.len(),
                self.dim
            )));
        }
        let mut scored: Vec<(f64, u64)> = (0..self.len())
            .map(|i| (squared_distance(self.row(i), query), self.ids[i]))
            .collect();
        scored.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        Ok(scored
            .into_iter()
            .map(|(d2, id)| Neighbor {
                id,
                distance: d2.sqrt(),
            })
            .collect())
    }

    /// The `k` nearest records, ascending by distance.
    pub fn knn(&self, query: &[f64], k: usize) -> Result<Vec<Neighbor>> {
        if k == 0 {
            return Err(Error::Contract("k must be at least 1".into()));
        }
        if self.is_empty() {
            return Err(Error::Contract("cannot search an empty index".into()));
        }
        let mut ranked = self.rank(query)?;
        ranked.truncate(k);
        Ok(ranked)
    }

    pub fn write<W: Write>(&self, mut w: W) -> Result<()> {
        let count = u32::try_from(self.len()).map_err(|_| Error::format("VPRD", "too many records"))?;
        let dim = u32::try_from(self.dim).map_err(|_| Error::format("VPRD", "dimension too large"))?;
        w.write_all(DB_MAGIC)?;
        w.write_all(&count.to_le_bytes())?;
        w.write_all(&dim.to_le_bytes())?;
        for i in 0..self.len() {
            w.write_all(&self.ids[i].to_le_bytes())?;
            for v in self.row(i) {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn read<R: Read>(mut r: R) -> Result<Self> {
        let mut head = [0u8; 12];
        r.read_exact(&mut head)
            .map_err(|_| Error::format("VPRD", "truncated header"))?;
        if &head[..4] != DB_MAGIC {
            return Err(Error::format("VPRD", "bad magic"));
        }
        let count = u32::from_le_bytes(head[4..8].try_into().expect("4 bytes")) as usize;
        let dim = u32::from_le_bytes(head[8..12].try_into().expect("4 bytes")) as usize;
        let mut index = Self::new(dim);
        let mut buf = vec![0u8; 8 * (dim + 1)];
        for _ in 0..count {
            r.read_exact(&mut buf)
                .map_err(|_| Error::format("VPRD", "truncated record"))?;
            let id = u64::from_le_bytes(buf[..8].try_into().expect("8 bytes"));
            let row: Vec<f64> = buf[8..]
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            index.push(id, &row).map_err(|e| Error::format("VPRD", e.to_string()))?;
        }
        let mut rest = [0u8; 1];
        if r.read(&mut rest)? != 0 {
            return Err(Error::format("VPRD", "trailing bytes after last record"));
        }
        Ok(index)
    }
}

/// A probe with its location and descriptor.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalQuery {
    pub id: u64,
    pub coord: Coordinate,
    pub descriptor: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalResult {
    pub ns: Vec<usize>,
    /// Recall at each entry of `ns`, as a fraction.
    pub recalls: Vec<f64>,
    /// 1-based rank of the first geographic positive, per evaluated query,
    /// ordered by query id.
    pub first_positive: Vec<(u64, usize)>,
    /// Queries without any gallery record inside the radius.
    pub excluded: Vec<u64>,
}

impl EvalResult {
    pub fn query_count(&self) -> usize {
        self.first_positive.len()
    }

    pub fn recall(&self, n: usize) -> Option<f64> {
        self.ns.iter().position(|&x| x == n).map(|i| self.recalls[i])
    }

    /// Recall values as percentages joined in the `1 / 5 / 10` layout.
    pub fn slash_row(&self) -> String {
        self.recalls
            .iter()
            .map(|r| format!("{:.1}", 100.0 * r))
            .collect::<Vec<_>>()
            .join(" / ")
    }
}

/// Recall@N: the fraction of queries with a gallery record within
/// `radius_m` among their `N` nearest descriptors.
pub fn recall_at_n(
    index: &DescriptorIndex,
    gallery_coords: &BTreeMap<u64, Coordinate>,
    queries: &[EvalQuery],
    radius_m: f64,
    ns: &[usize],
) -> Result<EvalResult> {
    if ns.is_empty() || ns.contains(&0) {
        return Err(Error::Contract("recall cutoffs must be positive".into()));
    }
    let mut coords = Vec::with_capacity(index.len());
    for id in index.ids() {
        let c = gallery_coords
            .get(id)
            .ok_or_else(|| Error::Contract(format!("gallery record {id} has no coordinate")))?;
        coords.push((*id, *c));
    }
    let mut order: Vec<&EvalQuery> = queries.iter().collect();
    order.sort_by_key(|q| q.id);
    if order.windows(2).any(|w| w[0].id == w[1].id) {
        return Err(Error::Contract("duplicate query id".into()));
    }
    let mut first_positive = Vec::new();
    let mut excluded = Vec::new();
    for q in order {
        let mut positives = HashSet::new();
        for (id, c) in &coords {
            if geo_distance(&q.coord, c)? <= radius_m {
                positives.insert(*id);
            }
        }
        if positives.is_empty() {
            excluded.push(q.id);
            continue;
        }
        let ranked = index.rank(&q.descriptor)?;
        let rank = ranked
            .iter()
            .position(|n| positives.contains(&n.id))
            .expect("a positive exists in the gallery")
            + 1;
        first_positive.push((q.id, rank));
    }
    if first_positive.is_empty() {
        return Err(Error::UndefinedMean(
            "no query has a gallery record within the radius".into(),
        ));
    }
    let total = first_positive.len() as f64;
    let recalls = ns
        .iter()
        .map(|&n| first_positive.iter().filter(|(_, r)| *r <= n).count() as f64 / total)
        .collect();
    Ok(EvalResult {
        ns: ns.to_vec(),
        recalls,
        first_positive,
        excluded,
    })
}

/// CSV report: one row per labelled result.
pub fn report_csv(rows: &[(&str, &EvalResult)]) -> String {
    let mut out = String::new();
    let ns = rows.first().map(|(_, r)| r.ns.clone()).unwrap_or_default();
    out.push_str("label,queries,excluded");
    for n in &ns {
        let _ = write!(out, ",recall@{n}");
    }
    out.push('\n');
    for (label, r) in rows {
        let _ = write!(out, "{label},{},{}", r.query_count(), r.excluded.len());
        for v in &r.recalls {
            let _ = write!(out, ",{v}");
        }
        out.push('\n');
    }
    out
}

/// Fixed-width table with a `1 / 5 / 10` recall column.
pub fn report_table(rows: &[(&str, &EvalResult)]) -> String {
    let ns = rows.first().map(|(_, r)| r.ns.clone()).unwrap_or_default();
    let head = ns.iter().map(usize::to_string).collect::<Vec<_>>().join(" / ");
    let width = rows.iter().map(|(l, _)| l.len()).max().unwrap_or(0).max(5);
    let mut out = format!("{:width$}  {:>8}  Recall@N {head}\n", "split", "queries");
    for (label, r) in rows {
        let _ = writeln!(out, "{label:width$}  {:>8}  {}", r.query_count(), r.slash_row());
    }
    out
}
