//! Structural node embeddings from second-order biased random walks and
//! skip-gram training with negative sampling.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::{read_all, ByteReader};
use crate::graph::{NodeId, RoadGraph};
use crate::rng::derive_seed;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EmbeddingParams {
    pub dim: usize,
    /// Return bias: weight `1/p` for stepping back to the previous node.
    pub p: f64,
    /// In-out bias: weight `1/q` for moving two hops away.
    pub q: f64,
    pub walk_length: usize,
    pub walks_per_node: usize,
    pub window: usize,
    pub negatives: usize,
    pub epochs: usize,
    pub lr: f64,
}

impl Default for EmbeddingParams {
    fn default() -> Self {
        Self {
            dim: 64,
            p: 1.0,
            q: 1.0,
            walk_length: 40,
            walks_per_node: 10,
            window: 5,
            negatives: 5,
            epochs: 5,
            lr: 0.025,
        }
    }
}

/// Unnormalized second-order weight of moving `prev -> cur -> next`.
pub fn transition_weight(graph: &RoadGraph, prev: usize, next: usize, p: f64, q: f64) -> f64 {
    if next == prev {
        1.0 / p
    } else if graph.neighbors_at(prev).binary_search(&next).is_ok() {
        1.0
    } else {
        1.0 / q
    }
}

fn pick(weights: &[f64], rng: &mut ChaCha8Rng) -> usize {
    let total: f64 = weights.iter().sum();
    let mut u = rng.random::<f64>() * total;
    for (i, w) in weights.iter().enumerate() {
        if u < *w {
            return i;
        }
        u -= w;
    }
    // Rounding fallback: last positive weight.
    weights.iter().rposition(|w| *w > 0.0).unwrap_or(0)
}

fn walk_from(graph: &RoadGraph, start: usize, length: usize, p: f64, q: f64, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let mut walk = Vec::with_capacity(length);
    walk.push(start);
    let mut weights = Vec::new();
    while walk.len() < length {
        let cur = *walk.last().expect("non-empty");
        let nbrs = graph.neighbors_at(cur);
        if nbrs.is_empty() {
            break;
        }
        let next = if walk.len() == 1 {
            nbrs[rng.random_range(0..nbrs.len())]
        } else {
            let prev = walk[walk.len() - 2];
            weights.clear();
            weights.extend(nbrs.iter().map(|&x| transition_weight(graph, prev, x, p, q)));
            nbrs[pick(&weights, rng)]
        };
        walk.push(next);
    }
    walk
}

/// Dense-index walks: for each round `0..walks_per_node`, one walk from every
/// node in ascending id order. Each walk has its own RNG stream keyed by
/// `(seed, node, round)`, so the result does not depend on thread count.
pub fn generate_walk_indices(graph: &RoadGraph, params: &EmbeddingParams, seed: u64) -> Result<Vec<Vec<usize>>> {
    if !(params.p > 0.0 && params.q > 0.0) {
        return Err(Error::Invalid("walk biases p and q must be positive".into()));
    }
    let n = graph.node_count();
    let jobs: Vec<(usize, usize)> = (0..params.walks_per_node)
        .flat_map(|r| (0..n).map(move |v| (r, v)))
        .collect();
    Ok(jobs
        .into_par_iter()
        .map(|(round, v)| {
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &[v as u64, round as u64]));
            walk_from(graph, v, params.walk_length.max(1), params.p, params.q, &mut rng)
        })
        .collect())
}

pub fn generate_walks(graph: &RoadGraph, params: &EmbeddingParams, seed: u64) -> Result<Vec<Vec<NodeId>>> {
    Ok(generate_walk_indices(graph, params, seed)?
        .into_iter()
        .map(|w| w.into_iter().map(|i| graph.id(i)).collect())
        .collect())
}

#[derive(Clone, Debug, PartialEq)]
pub struct StructEmbeddings {
    pub dim: usize,
    pub ids: Vec<NodeId>,
    /// Row-major `ids.len() x dim`.
    pub table: Vec<f32>,
}

impl StructEmbeddings {
    pub fn row(&self, ix: usize) -> &[f32] {
        &self.table[ix * self.dim..(ix + 1) * self.dim]
    }

    pub fn get(&self, id: NodeId) -> Option<&[f32]> {
        self.ids.binary_search(&id).ok().map(|i| self.row(i))
    }
}

#[derive(Clone, Debug)]
pub struct SkipGramReport {
    /// Mean SGNS loss per positive pair, one entry per epoch.
    pub epoch_loss: Vec<f64>,
    pub unvisited: Vec<NodeId>,
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Skip-gram with negative sampling over dense-index walks. Single-threaded.
pub fn train_skipgram(
    walks: &[Vec<usize>],
    ids: &[NodeId],
    params: &EmbeddingParams,
    seed: u64,
) -> Result<(StructEmbeddings, SkipGramReport)> {
    if walks.is_empty() {
        return Err(Error::Empty("skip-gram needs at least one walk"));
    }
    let n = ids.len();
    let d = params.dim;
    if d == 0 {
        return Err(Error::Invalid("embedding dimension must be positive".into()));
    }
    let mut init_rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &[0x1217]));
    let mut w_in: Vec<f64> = (0..n * d)
        .map(|_| (init_rng.random::<f64>() - 0.5) / d as f64)
        .collect();
    let mut w_out = vec![0.0f64; n * d];

    let mut freq = vec![0u64; n];
    for w in walks {
        for &v in w {
            freq[v] += 1;
        }
    }
    let unvisited: Vec<NodeId> = (0..n).filter(|&v| freq[v] == 0).map(|v| ids[v]).collect();
    if !unvisited.is_empty() {
        log::warn!("{} node(s) never visited by walks keep their initialization", unvisited.len());
    }
    // Unigram^0.75 sampling table.
    let weights: Vec<f64> = freq.iter().map(|&f| (f as f64).powf(0.75)).collect();
    let total: f64 = weights.iter().sum();
    let mut cdf = Vec::with_capacity(n);
    let mut acc = 0.0;
    for w in &weights {
        acc += w / total;
        cdf.push(acc);
    }

    let pairs_per_epoch: usize = walks
        .iter()
        .map(|w| {
            (0..w.len())
                .map(|i| {
                    let lo = i.saturating_sub(params.window);
                    let hi = (i + params.window).min(w.len() - 1);
                    hi - lo
                })
                .sum::<usize>()
        })
        .sum();
    let total_steps = (pairs_per_epoch * params.epochs).max(1) as f64;
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &[0x5e65]));
    let mut step = 0usize;
    let mut epoch_loss = Vec::with_capacity(params.epochs);
    let mut grad = vec![0.0f64; d];

    for _ in 0..params.epochs {
        let mut loss = 0.0;
        let mut count = 0usize;
        for walk in walks {
            for (i, &center) in walk.iter().enumerate() {
                let lo = i.saturating_sub(params.window);
                let hi = (i + params.window).min(walk.len() - 1);
                for (j, &ctx) in walk.iter().enumerate().take(hi + 1).skip(lo) {
                    if j == i {
                        continue;
                    }
                    let lr = params.lr * (1.0 - step as f64 / total_steps).max(1e-4);
                    step += 1;
                    grad.fill(0.0);
                    let ci = center * d;
                    for k in 0..=params.negatives {
                        let (target, label) = if k == 0 {
                            (ctx, 1.0)
                        } else {
                            let u: f64 = rng.random();
                            let t = cdf.partition_point(|c| *c < u).min(n - 1);
                            if t == ctx {
                                continue;
                            }
                            (t, 0.0)
                        };
                        let ti = target * d;
                        let dot: f64 = (0..d).map(|c| w_in[ci + c] * w_out[ti + c]).sum();
                        let s = sigmoid(dot);
                        loss -= if label > 0.0 { s.max(1e-12).ln() } else { (1.0 - s).max(1e-12).ln() };
                        let g = (label - s) * lr;
                        for c in 0..d {
                            grad[c] += g * w_out[ti + c];
                            w_out[ti + c] += g * w_in[ci + c];
                        }
                    }
                    for c in 0..d {
                        w_in[ci + c] += grad[c];
                    }
                    count += 1;
                }
            }
        }
        epoch_loss.push(if count == 0 { 0.0 } else { loss / count as f64 });
    }

    if w_in.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("structural embeddings".into()));
    }
    Ok((
        StructEmbeddings {
            dim: d,
            ids: ids.to_vec(),
            table: w_in.into_iter().map(|v| v as f32).collect(),
        },
        SkipGramReport { epoch_loss, unvisited },
    ))
}

/// Walks plus skip-gram in one call.
pub fn embed_graph(graph: &RoadGraph, params: &EmbeddingParams, seed: u64) -> Result<StructEmbeddings> {
    let walks = generate_walk_indices(graph, params, seed)?;
    Ok(train_skipgram(&walks, graph.ids(), params, seed)?.0)
}

const EMB_MAGIC: &[u8; 4] = b"RNEM";
const EMB_VERSION: u32 = 1;

pub fn write_embeddings(emb: &StructEmbeddings, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut buf = Vec::with_capacity(16 + emb.table.len() * 4 + emb.ids.len() * 8);
    buf.extend_from_slice(EMB_MAGIC);
    buf.extend_from_slice(&EMB_VERSION.to_le_bytes());
    buf.extend_from_slice(&(emb.dim as u32).to_le_bytes());
    buf.extend_from_slice(&(emb.ids.len() as u64).to_le_bytes());
    for (i, id) in emb.ids.iter().enumerate() {
        buf.extend_from_slice(&id.0.to_le_bytes());
        for v in emb.row(i) {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    w.write_all(&buf).map_err(|e| Error::io(path, e))?;
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_embeddings(path: impl AsRef<Path>) -> Result<StructEmbeddings> {
    let bytes = read_all(path.as_ref())?;
    let mut r = ByteReader {
        bytes: &bytes,
        pos: 0,
        what: "embedding cache",
    };
    if r.take(4)? != EMB_MAGIC {
        return Err(Error::parse("embedding cache", "bad magic"));
    }
    let version = r.u32()?;
    if version != EMB_VERSION {
        return Err(Error::parse("embedding cache", format!("unsupported version {version}")));
    }
    let dim = r.u32()? as usize;
    let count = r.u64()? as usize;
    let mut ids = Vec::with_capacity(count);
    let mut table = Vec::with_capacity(count * dim);
    for _ in 0..count {
        ids.push(NodeId(r.u64()?));
        for _ in 0..dim {
            table.push(r.f32()?);
        }
    }
    if !r.done() {
        return Err(Error::parse("embedding cache", "trailing bytes"));
    }
    Ok(StructEmbeddings { dim, ids, table })
}
