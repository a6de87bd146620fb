use std::collections::HashMap;

use roadnext::embeddings::{
    embed_graph, generate_walk_indices, read_embeddings, train_skipgram, transition_weight, write_embeddings,
    EmbeddingParams,
};
use roadnext::{NodeId, PlanarPoint, RoadGraph};

fn graph(nodes: &[u64], edges: &[(u64, u64)]) -> RoadGraph {
    RoadGraph::new(
        (0.0, 0.0),
        nodes
            .iter()
            .enumerate()
            .map(|(i, &id)| (NodeId(id), PlanarPoint::new(i as f64 * 50.0, (i % 2) as f64 * 30.0)))
            .collect(),
        &edges.iter().map(|&(a, b)| (NodeId(a), NodeId(b))).collect::<Vec<_>>(),
    )
    .unwrap()
}

/// A 5-node graph with a triangle, so all three weight classes occur.
fn five() -> RoadGraph {
    graph(&[0, 1, 2, 3, 4], &[(0, 1), (1, 2), (2, 0), (2, 3), (3, 4), (1, 4)])
}

#[test]
fn second_order_frequencies_match_exact_chain() {
    let g = five();
    let (p, q) = (2.0, 0.5);
    let params = EmbeddingParams {
        p,
        q,
        walk_length: 40,
        walks_per_node: 20_000,
        ..Default::default()
    };
    let walks = generate_walk_indices(&g, &params, 17).unwrap();
    assert_eq!(walks.len(), 100_000);
    let mut counts: HashMap<(usize, usize, usize), f64> = HashMap::new();
    let mut totals: HashMap<(usize, usize), f64> = HashMap::new();
    for w in &walks {
        for t in w.windows(3) {
            *counts.entry((t[0], t[1], t[2])).or_default() += 1.0;
            *totals.entry((t[0], t[1])).or_default() += 1.0;
        }
    }
    for (&(prev, cur), &total) in &totals {
        // exact chain: 1/p back, 1 to a common neighbor, 1/q outward
        let nbrs = g.neighbors_at(cur);
        let weights: Vec<f64> = nbrs
            .iter()
            .map(|&x| {
                if x == prev {
                    1.0 / p
                } else if g.neighbors_at(prev).contains(&x) {
                    1.0
                } else {
                    1.0 / q
                }
            })
            .collect();
        let z: f64 = weights.iter().sum();
        for (&x, w) in nbrs.iter().zip(&weights) {
            assert_eq!(transition_weight(&g, prev, x, p, q), *w);
            let emp = counts.get(&(prev, cur, x)).copied().unwrap_or(0.0) / total;
            assert!((emp - w / z).abs() < 0.01, "{prev}->{cur}->{x}: {emp} vs {}", w / z);
        }
    }
}

fn cosine(a: &[f32], b: &[f32]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| *x as f64 * *y as f64).sum();
    let na: f64 = a.iter().map(|x| (*x as f64).powi(2)).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| (*x as f64).powi(2)).sum::<f64>().sqrt();
    dot / (na * nb)
}

#[test]
fn disconnected_cliques_separate() {
    let g = graph(&[0, 1, 2, 3, 4, 5], &[(0, 1), (1, 2), (2, 0), (3, 4), (4, 5), (5, 3)]);
    let params = EmbeddingParams {
        dim: 16,
        walk_length: 20,
        walks_per_node: 20,
        ..Default::default()
    };
    let emb = embed_graph(&g, &params, 4).unwrap();
    let (mut intra, mut inter) = (Vec::new(), Vec::new());
    for a in 0..6usize {
        for b in a + 1..6 {
            let c = cosine(emb.row(a), emb.row(b));
            if (a < 3) == (b < 3) {
                intra.push(c);
            } else {
                inter.push(c);
            }
        }
    }
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    assert!(mean(&intra) > mean(&inter), "{} vs {}", mean(&intra), mean(&inter));
}

#[test]
fn order_preserving_relabel_gives_identical_rows() {
    let edges = [(0, 1), (1, 2), (2, 0), (2, 3), (3, 4), (1, 4)];
    let a = five();
    let relabel = |v: u64| 1000 + 7 * v;
    let b = graph(
        &[0, 1, 2, 3, 4].map(relabel),
        &edges.map(|(x, y)| (relabel(x), relabel(y))),
    );
    let params = EmbeddingParams {
        dim: 8,
        walks_per_node: 5,
        ..Default::default()
    };
    let ea = embed_graph(&a, &params, 11).unwrap();
    let eb = embed_graph(&b, &params, 11).unwrap();
    for v in 0..5u64 {
        assert_eq!(ea.get(NodeId(v)).unwrap(), eb.get(NodeId(relabel(v))).unwrap());
    }
}

#[test]
fn thread_count_does_not_matter() {
    let g = five();
    let params = EmbeddingParams {
        dim: 8,
        walks_per_node: 8,
        ..Default::default()
    };
    let run = |threads: usize| {
        rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build()
            .unwrap()
            .install(|| embed_graph(&g, &params, 21).unwrap())
    };
    assert_eq!(run(1), run(4));
}

#[test]
fn cache_round_trip_and_corruption() {
    let g = five();
    let params = EmbeddingParams {
        dim: 4,
        walks_per_node: 2,
        ..Default::default()
    };
    let emb = embed_graph(&g, &params, 2).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("e.bin");
    write_embeddings(&emb, &path).unwrap();
    assert_eq!(read_embeddings(&path).unwrap(), emb);
    let mut bytes = std::fs::read(&path).unwrap();
    bytes.truncate(bytes.len() - 3);
    std::fs::write(&path, &bytes).unwrap();
    assert!(read_embeddings(&path).is_err());
}

#[test]
fn skipgram_loss_decreases() {
    // a ring is large enough that negatives rarely hit the context
    let ids: Vec<u64> = (0..40).collect();
    let ring: Vec<(u64, u64)> = (0..40).map(|i| (i, (i + 1) % 40)).collect();
    let g = graph(&ids, &ring);
    let params = EmbeddingParams {
        dim: 8,
        walks_per_node: 20,
        epochs: 5,
        ..Default::default()
    };
    let walks = generate_walk_indices(&g, &params, 8).unwrap();
    let (_, report) = train_skipgram(&walks, g.ids(), &params, 8).unwrap();
    assert_eq!(report.epoch_loss.len(), 5);
    assert!(report.epoch_loss[4] < report.epoch_loss[0], "{:?}", report.epoch_loss);
    assert!(report.unvisited.is_empty());
}
