//! Lexical neighborhoods: minhash signatures, a banded LSH index with exact
//! Jaccard verification, and breadth-first mining of training edit pairs.

use std::collections::{BTreeMap, HashMap, VecDeque};
use std::io::{BufRead, Write};

use rand::Rng;
use rayon::prelude::*;

use crate::corpus::Corpus;
use crate::error::{Error, Result};

/// Neighborhood membership requires Jaccard distance strictly below this.
pub const NEIGHBOR_THRESHOLD: f64 = 0.5;

/// Jaccard distance between the distinct-token sets of `a` and `b`.
pub fn jaccard_distance(a: &[u32], b: &[u32]) -> Result<f64> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::Empty("token set"));
    }
    Ok(sorted_set_distance(&token_set(a), &token_set(b)))
}

/// Sorted, deduplicated token ids.
pub fn token_set(tokens: &[u32]) -> Vec<u32> {
    let mut s = tokens.to_vec();
    s.sort_unstable();
    s.dedup();
    s
}

/// Jaccard distance on sorted distinct sets (merge walk).
fn sorted_set_distance(a: &[u32], b: &[u32]) -> f64 {
    let (mut i, mut j, mut inter) = (0, 0, 0usize);
    while i < a.len() && j < b.len() {
        match a[i].cmp(&b[j]) {
            std::cmp::Ordering::Less => i += 1,
            std::cmp::Ordering::Greater => j += 1,
            std::cmp::Ordering::Equal => {
                inter += 1;
                i += 1;
                j += 1;
            }
        }
    }
    let union = a.len() + b.len() - inter;
    1.0 - inter as f64 / union as f64
}

#[inline]
pub(crate) fn mix64(x: u64) -> u64 {
    // splitmix64 finalizer
    let mut z = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MinHashSignature {
    pub mins: Vec<u64>,
}

impl MinHashSignature {
    /// Fraction of agreeing rows; an unbiased estimate of Jaccard similarity.
    pub fn similarity(&self, other: &MinHashSignature) -> f64 {
        let agree = self
            .mins
            .iter()
            .zip(&other.mins)
            .filter(|(a, b)| a == b)
            .count();
        agree as f64 / self.mins.len() as f64
    }
}

/// A family of `n_hash` seeded hash functions over token ids.
#[derive(Debug, Clone)]
pub struct MinHasher {
    keys: Vec<u64>,
}

impl MinHasher {
    pub fn new(n_hash: usize, seed: u64) -> Self {
        let keys = (0..n_hash as u64)
            .map(|i| mix64(seed ^ mix64(i.wrapping_add(0x5851_F42D_4C95_7F2D))))
            .collect();
        Self { keys }
    }

    pub fn n_hash(&self) -> usize {
        self.keys.len()
    }

    #[inline]
    pub fn hash(&self, i: usize, token: u32) -> u64 {
        mix64(self.keys[i] ^ u64::from(token))
    }

    pub fn signature(&self, tokens: &[u32]) -> MinHashSignature {
        signature_with(tokens, self.n_hash(), |i, t| self.hash(i, t))
    }
}

/// Minhash signature under an arbitrary per-row hash family.
pub fn signature_with<F>(tokens: &[u32], n_hash: usize, hash: F) -> MinHashSignature
where
    F: Fn(usize, u32) -> u64,
{
    let mut mins = vec![u64::MAX; n_hash];
    for &t in tokens {
        for (i, m) in mins.iter_mut().enumerate() {
            let h = hash(i, t);
            if h < *m {
                *m = h;
            }
        }
    }
    MinHashSignature { mins }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LshParams {
    pub bands: usize,
    pub rows: usize,
    pub seed: u64,
    /// Whether a query for a corpus sentence may return its own index.
    pub include_self: bool,
}

impl Default for LshParams {
    fn default() -> Self {
        Self {
            bands: 32,
            rows: 4,
            seed: 0,
            include_self: false,
        }
    }
}

impl LshParams {
    pub fn n_hash(&self) -> usize {
        self.bands * self.rows
    }

    /// Probability that a pair with Jaccard similarity `s` shares a bucket.
    pub fn collision_probability(&self, s: f64) -> f64 {
        1.0 - (1.0 - s.powi(self.rows as i32)).powi(self.bands as i32)
    }
}

/// Banded minhash index over a corpus. Immutable once built.
#[derive(Debug, Clone)]
pub struct LshIndex {
    params: LshParams,
    hasher: MinHasher,
    sets: Vec<Vec<u32>>,
    tables: Vec<HashMap<u64, Vec<u32>>>,
}

impl LshIndex {
    pub fn build(corpus: &Corpus, params: LshParams) -> Result<Self> {
        if params.bands == 0 || params.rows == 0 {
            return Err(Error::InvalidArgument("lsh bands and rows must be positive".into()));
        }
        let hasher = MinHasher::new(params.n_hash(), params.seed);
        let sets: Vec<Vec<u32>> = corpus.sentences.par_iter().map(|s| token_set(&s.ids)).collect();
        let band_keys: Vec<Vec<u64>> = sets
            .par_iter()
            .map(|s| band_keys(&hasher.signature(s), &params))
            .collect();
        let mut tables: Vec<HashMap<u64, Vec<u32>>> = vec![HashMap::new(); params.bands];
        for (id, keys) in band_keys.iter().enumerate() {
            for (table, &key) in tables.iter_mut().zip(keys) {
                table.entry(key).or_default().push(id as u32);
            }
        }
        Ok(Self {
            params,
            hasher,
            sets,
            tables,
        })
    }

    pub fn params(&self) -> &LshParams {
        &self.params
    }

    pub fn len(&self) -> usize {
        self.sets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sets.is_empty()
    }

    /// Distinct token set of an indexed sentence.
    pub fn token_set(&self, id: usize) -> &[u32] {
        &self.sets[id]
    }

    /// Union of the query's bucket members, before verification.
    pub fn candidates(&self, tokens: &[u32]) -> Vec<u32> {
        let set = token_set(tokens);
        let keys = band_keys(&self.hasher.signature(&set), &self.params);
        let mut out: Vec<u32> = keys
            .iter()
            .zip(&self.tables)
            .filter_map(|(k, table)| table.get(k))
            .flatten()
            .copied()
            .collect();
        out.sort_unstable();
        out.dedup();
        out
    }

    /// Verified neighbors of `tokens`: indexed sentences at exact Jaccard
    /// distance below 0.5, sorted by id. `self_id` names the query's own
    /// corpus index, excluded unless `include_self` is set.
    pub fn query_neighborhood(&self, tokens: &[u32], self_id: Option<usize>) -> Vec<(usize, f64)> {
        let set = token_set(tokens);
        if set.is_empty() {
            return Vec::new();
        }
        self.candidates(&set)
            .into_iter()
            .map(|c| c as usize)
            .filter(|&c| self.params.include_self || Some(c) != self_id)
            .filter_map(|c| {
                let d = sorted_set_distance(&set, &self.sets[c]);
                (d < NEIGHBOR_THRESHOLD).then_some((c, d))
            })
            .collect()
    }
}

fn band_keys(sig: &MinHashSignature, params: &LshParams) -> Vec<u64> {
    sig.mins
        .chunks_exact(params.rows)
        .enumerate()
        .map(|(band, rows)| {
            rows.iter()
                .fold(mix64(band as u64), |acc, &v| mix64(acc ^ v))
        })
        .collect()
}

/// An undirected training edge, stored with the smaller id first.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NeighborEdge {
    pub proto_id: usize,
    pub target_id: usize,
    pub distance: f64,
}

impl NeighborEdge {
    pub fn new(a: usize, b: usize, distance: f64) -> Self {
        Self {
            proto_id: a.min(b),
            target_id: a.max(b),
            distance,
        }
    }
}

#[derive(Debug, Clone)]
pub struct MiningResult {
    pub edges: Vec<NeighborEdge>,
    /// Distinct edges encountered before sampling.
    pub encountered: usize,
    /// Sentences expanded by the search.
    pub visited: usize,
}

/// Breadth-first search over the verified-neighbor graph from `n_seeds`
/// random seeds. Every encountered edge is kept, then `budget` distinct
/// edges are drawn uniformly (all of them if fewer). Output is sorted by
/// `(proto_id, target_id)`.
pub fn mine_pairs_bfs<R: Rng + ?Sized>(
    index: &LshIndex,
    n_seeds: usize,
    budget: usize,
    rng: &mut R,
) -> MiningResult {
    let n = index.len();
    let mut edges: BTreeMap<(usize, usize), f64> = BTreeMap::new();
    let mut visited = vec![false; n];
    let mut n_visited = 0;
    let seeds = rand::seq::index::sample(rng, n, n_seeds.min(n));
    let mut queue = VecDeque::new();
    for seed in seeds.iter() {
        if visited[seed] {
            continue;
        }
        visited[seed] = true;
        queue.push_back(seed);
        while let Some(node) = queue.pop_front() {
            n_visited += 1;
            for (nb, d) in index.query_neighborhood(index.token_set(node), Some(node)) {
                if nb == node {
                    continue;
                }
                let e = NeighborEdge::new(node, nb, d);
                edges.insert((e.proto_id, e.target_id), d);
                if !visited[nb] {
                    visited[nb] = true;
                    queue.push_back(nb);
                }
            }
        }
    }
    let encountered = edges.len();
    let all: Vec<NeighborEdge> = edges
        .into_iter()
        .map(|((a, b), d)| NeighborEdge::new(a, b, d))
        .collect();
    let edges = if budget >= all.len() {
        all
    } else {
        let mut picks = rand::seq::index::sample(rng, all.len(), budget).into_vec();
        picks.sort_unstable();
        picks.into_iter().map(|i| all[i]).collect()
    };
    MiningResult {
        edges,
        encountered,
        visited: n_visited,
    }
}

/// Directed `(prototype, target)` training pairs: both orderings of each edge.
pub fn training_pairs(edges: &[NeighborEdge]) -> Vec<(usize, usize)> {
    edges
        .iter()
        .flat_map(|e| [(e.proto_id, e.target_id), (e.target_id, e.proto_id)])
        .collect()
}

pub fn write_pairs_tsv<W: Write>(edges: &[NeighborEdge], mut w: W) -> Result<()> {
    writeln!(w, "proto_id\ttarget_id\tjaccard_distance")?;
    for e in edges {
        writeln!(w, "{}\t{}\t{}", e.proto_id, e.target_id, e.distance)?;
    }
    Ok(())
}

pub fn read_pairs_tsv<R: BufRead>(r: R) -> Result<Vec<NeighborEdge>> {
    let mut lines = r.lines();
    match lines.next() {
        Some(Ok(h)) if h.trim_end() == "proto_id\ttarget_id\tjaccard_distance" => {}
        _ => return Err(Error::Format("pairs file: missing or wrong header".into())),
    }
    let mut out = Vec::new();
    for (i, line) in lines.enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let bad = || Error::Format(format!("pairs file: malformed row {}", i + 2));
        let mut cols = line.split('\t');
        let a: usize = cols.next().and_then(|c| c.parse().ok()).ok_or_else(bad)?;
        let b: usize = cols.next().and_then(|c| c.parse().ok()).ok_or_else(bad)?;
        let d: f64 = cols.next().and_then(|c| c.trim().parse().ok()).ok_or_else(bad)?;
        out.push(NeighborEdge::new(a, b, d));
    }
    Ok(out)
}
