//! Synthetic grid cities and GPS walkers with known ground truth.
//!
//! The walker policy is explicit, so the best achievable next-node accuracy
//! on a set of examples can be computed exactly and compared with a trained
//! model.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Poisson};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::PreparedExample;
use crate::error::{Error, Result};
use crate::features::{Categories, DEFAULT_CATEGORIES};
use crate::graph::{bearing, save_graph, save_pois, wrap_angle, NodeId, PlanarPoint, Poi, RoadGraph};
use crate::projection::{save_trajectories, Example, ExampleKey, GpsSample, GpsStream, Scale};
use crate::rng::derive_seed;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PoiSpec {
    /// Background intensity per km² for each category; shorter lists are
    /// padded with zeros.
    pub background: Vec<f64>,
    pub hotspots: usize,
    pub hotspot_size: usize,
    /// Standard deviation of a hotspot cluster in meters.
    pub hotspot_spread: f64,
    pub hotspot_category: usize,
    /// Hotspot centers keep at least this distance from every street.
    pub street_clearance: f64,
}

impl Default for PoiSpec {
    fn default() -> Self {
        Self {
            background: vec![20.0; DEFAULT_CATEGORIES.len()],
            hotspots: 60,
            hotspot_size: 10,
            hotspot_spread: 20.0,
            hotspot_category: 0,
            street_clearance: 40.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CitySpec {
    pub rows: usize,
    pub cols: usize,
    pub edge_length: f64,
    pub origin: (f64, f64),
    pub pois: PoiSpec,
}

impl Default for CitySpec {
    fn default() -> Self {
        Self {
            rows: 20,
            cols: 20,
            edge_length: 200.0,
            origin: (39.9, 116.4),
            pois: PoiSpec::default(),
        }
    }
}

#[derive(Clone, Debug)]
pub struct SynthCity {
    pub spec: CitySpec,
    pub graph: RoadGraph,
    pub pois: Vec<Poi>,
    pub categories: Categories,
}

pub fn grid_node(spec: &CitySpec, r: usize, c: usize) -> NodeId {
    NodeId((r * spec.cols + c) as u64)
}

pub fn gen_city(spec: &CitySpec, seed: u64) -> Result<SynthCity> {
    if spec.rows < 2 || spec.cols < 2 {
        return Err(Error::Invalid(format!("grid {}x{} needs at least 2x2", spec.rows, spec.cols)));
    }
    if !(spec.edge_length > 0.0) {
        return Err(Error::Invalid("edge length must be positive".into()));
    }
    let categories = Categories::default();
    if spec.pois.hotspots > 0 && spec.pois.hotspot_category >= categories.len() {
        return Err(Error::UnknownCategory(format!("#{}", spec.pois.hotspot_category)));
    }
    let l = spec.edge_length;
    let mut nodes = Vec::with_capacity(spec.rows * spec.cols);
    let mut edges = Vec::new();
    for r in 0..spec.rows {
        for c in 0..spec.cols {
            nodes.push((grid_node(spec, r, c), PlanarPoint::new(c as f64 * l, r as f64 * l)));
            if c + 1 < spec.cols {
                edges.push((grid_node(spec, r, c), grid_node(spec, r, c + 1)));
            }
            if r + 1 < spec.rows {
                edges.push((grid_node(spec, r, c), grid_node(spec, r + 1, c)));
            }
        }
    }
    let graph = RoadGraph::new(spec.origin, nodes, &edges)?;

    let (w, h) = ((spec.cols - 1) as f64 * l, (spec.rows - 1) as f64 * l);
    let (x0, y0, x1, y1) = (-l / 2.0, -l / 2.0, w + l / 2.0, h + l / 2.0);
    let area_km2 = (x1 - x0) * (y1 - y0) / 1e6;
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &[0xc17e]));
    let mut pois = Vec::new();
    for (cat, &intensity) in spec.pois.background.iter().enumerate().take(categories.len()) {
        if !(intensity > 0.0) {
            continue;
        }
        let n = Poisson::new(intensity * area_km2)
            .map_err(|e| Error::Invalid(e.to_string()))?
            .sample(&mut rng) as usize;
        for _ in 0..n {
            let pos = PlanarPoint::new(rng.random_range(x0..x1), rng.random_range(y0..y1));
            pois.push(Poi {
                id: pois.len() as u64,
                category: cat,
                pos,
            });
        }
    }
    if spec.pois.hotspots > 0 && spec.pois.hotspot_size > 0 {
        let clear = spec.pois.street_clearance.min(l / 2.0 - 1.0).max(0.0);
        let spread = Normal::new(0.0, spec.pois.hotspot_spread.max(0.0)).map_err(|e| Error::Invalid(e.to_string()))?;
        let mut placed = 0;
        while placed < spec.pois.hotspots {
            let cx = rng.random_range(0.0..w);
            let cy = rng.random_range(0.0..h);
            let off = |v: f64| {
                let m = v.rem_euclid(l);
                m.min(l - m)
            };
            if off(cx) < clear || off(cy) < clear {
                continue;
            }
            placed += 1;
            for _ in 0..spec.pois.hotspot_size {
                let pos = PlanarPoint::new(cx + spread.sample(&mut rng), cy + spread.sample(&mut rng));
                pois.push(Poi {
                    id: pois.len() as u64,
                    category: spec.pois.hotspot_category,
                    pos,
                });
            }
        }
    }
    Ok(SynthCity {
        spec: spec.clone(),
        graph,
        pois,
        categories,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct WalkerPolicy {
    /// Probability mass reserved for going straight when possible.
    pub persistence: f64,
    /// Softmax temperature on the attractor count of each direction.
    pub attraction: f64,
    pub attractor_category: usize,
    /// Attractor POIs within this distance of the current node are counted
    /// in the ±45° wedge around each outgoing street.
    pub attraction_radius: f64,
    /// Meters per second.
    pub speed: f64,
    /// Seconds between GPS fixes.
    pub sample_period: f64,
    /// Per-axis GPS noise in meters.
    pub gps_noise: f64,
    /// Chance of pausing at a node.
    pub dwell_prob: f64,
    /// A pause lasts `k * dwell_secs + dwell_secs / 2` for k in 1..=3 and
    /// yields k repeated visits.
    pub dwell_secs: f64,
}

impl Default for WalkerPolicy {
    fn default() -> Self {
        Self {
            persistence: 0.5,
            attraction: 1.0,
            attractor_category: 0,
            attraction_radius: 150.0,
            speed: 10.0,
            sample_period: 2.0,
            gps_noise: 3.0,
            dwell_prob: 0.0,
            dwell_secs: 30.0,
        }
    }
}

/// Precomputed attractor bearings per node.
#[derive(Clone, Debug)]
pub struct PolicyModel {
    policy: WalkerPolicy,
    attractors: Vec<Vec<f64>>,
}

impl PolicyModel {
    pub fn new(city: &SynthCity, policy: &WalkerPolicy) -> Self {
        let g = &city.graph;
        let attractors = (0..g.node_count())
            .map(|ix| {
                let here = g.position_at(ix);
                city.pois
                    .iter()
                    .filter(|p| p.category == policy.attractor_category)
                    .filter(|p| here.dist(&p.pos) <= policy.attraction_radius)
                    .filter_map(|p| bearing(here, p.pos).ok())
                    .collect()
            })
            .collect();
        Self {
            policy: policy.clone(),
            attractors,
        }
    }

    /// Attractor POIs of `here` inside the quarter-plane wedge facing `to`.
    pub fn wedge_count(&self, graph: &RoadGraph, here: usize, to: usize) -> usize {
        let Ok(dir) = bearing(graph.position_at(here), graph.position_at(to)) else {
            return 0;
        };
        self.attractors[here]
            .iter()
            .filter(|b| wrap_angle(**b - dir).abs() < std::f64::consts::FRAC_PI_4)
            .count()
    }

    /// Next-node distribution at `here` after arriving from `prev`, as
    /// `(neighbor index, probability)` in adjacency order.
    pub fn transition(&self, graph: &RoadGraph, prev: Option<usize>, here: usize) -> Vec<(usize, f64)> {
        let nbrs = graph.neighbors_at(here);
        let options: Vec<usize> = match prev {
            Some(p) if nbrs.len() > 1 => nbrs.iter().copied().filter(|&u| u != p).collect(),
            _ => nbrs.to_vec(),
        };
        let logits: Vec<f64> = options
            .iter()
            .map(|&u| self.policy.attraction * self.wedge_count(graph, here, u) as f64)
            .collect();
        let mx = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = logits.iter().map(|v| (v - mx).exp()).collect();
        let total: f64 = exps.iter().sum();
        let straight = prev.and_then(|p| {
            let heading = bearing(graph.position_at(p), graph.position_at(here)).ok()?;
            options.iter().position(|&u| {
                bearing(graph.position_at(here), graph.position_at(u))
                    .map(|b| wrap_angle(b - heading).abs() < 1e-9)
                    .unwrap_or(false)
            })
        });
        let beta = match straight {
            Some(_) => self.policy.persistence,
            None => 0.0,
        };
        options
            .iter()
            .enumerate()
            .map(|(k, &u)| {
                let s = if Some(k) == straight { beta } else { 0.0 };
                (u, s + (1.0 - beta) * exps[k] / total)
            })
            .collect()
    }
}

#[derive(Clone, Debug)]
pub struct Simulation {
    pub streams: Vec<GpsStream>,
    /// Node sequence of each walker including dwell repeats.
    pub truth: Vec<Vec<NodeId>>,
}

fn sample_index(rng: &mut ChaCha8Rng, probs: &[(usize, f64)]) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (i, (_, p)) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    probs.len() - 1
}

/// Walks `n_walkers` agents for `steps` moves each and emits noisy GPS.
pub fn simulate_walkers(
    city: &SynthCity,
    policy: &WalkerPolicy,
    n_walkers: usize,
    steps: usize,
    seed: u64,
) -> Result<Simulation> {
    if steps < 2 {
        return Err(Error::Invalid("walkers need at least 2 steps".into()));
    }
    if !(policy.speed > 0.0 && policy.sample_period > 0.0) || !(0.0..=1.0).contains(&policy.persistence) {
        return Err(Error::Invalid("walker speed, sample period and persistence out of range".into()));
    }
    let model = PolicyModel::new(city, policy);
    let g = &city.graph;
    let walks: Vec<(GpsStream, Vec<NodeId>)> = (0..n_walkers)
        .into_par_iter()
        .map(|w| {
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &[0x3a1c, w as u64]));
            let noise = Normal::new(0.0, policy.gps_noise.max(0.0)).expect("finite sigma");
            let start = rng.random_range(0..g.node_count());
            let mut path = vec![start];
            let mut pauses = vec![0.0];
            let mut truth = vec![g.id(start)];
            let mut prev = None;
            let mut here = start;
            for _ in 0..steps {
                let probs = model.transition(g, prev, here);
                let next = probs[sample_index(&mut rng, &probs)].0;
                prev = Some(here);
                here = next;
                path.push(here);
                truth.push(g.id(here));
                let mut pause = 0.0;
                if policy.dwell_prob > 0.0 && rng.random::<f64>() < policy.dwell_prob {
                    let k = rng.random_range(1..=3usize);
                    pause = k as f64 * policy.dwell_secs + policy.dwell_secs / 2.0;
                    truth.extend(std::iter::repeat_n(g.id(here), k));
                }
                pauses.push(pause);
            }
            // piecewise-linear motion: (t_start, t_end, from, to)
            let mut legs = Vec::new();
            let mut t = 0.0;
            for i in 1..path.len() {
                let (a, b) = (g.position_at(path[i - 1]), g.position_at(path[i]));
                let dt = a.dist(&b) / policy.speed;
                legs.push((t, t + dt, a, b));
                t += dt;
                if pauses[i] > 0.0 {
                    legs.push((t, t + pauses[i], b, b));
                    t += pauses[i];
                }
            }
            let total = t;
            let mut samples = Vec::new();
            let mut k = 0usize;
            let mut leg = 0usize;
            loop {
                let mut ts = k as f64 * policy.sample_period;
                if ts > total {
                    if samples.last().is_some_and(|s: &GpsSample| s.t < total) {
                        ts = total;
                    } else {
                        break;
                    }
                }
                while leg + 1 < legs.len() && legs[leg].1 < ts {
                    leg += 1;
                }
                let (t0, t1, a, b) = legs[leg];
                let f = if t1 > t0 { ((ts - t0) / (t1 - t0)).clamp(0.0, 1.0) } else { 1.0 };
                let pos = PlanarPoint::new(
                    a.x + f * (b.x - a.x) + noise.sample(&mut rng),
                    a.y + f * (b.y - a.y) + noise.sample(&mut rng),
                );
                samples.push(GpsSample { t: ts, pos });
                if ts >= total {
                    break;
                }
                k += 1;
            }
            (
                GpsStream {
                    user: w.to_string(),
                    samples,
                },
                truth,
            )
        })
        .collect();
    let (streams, truth) = walks.into_iter().unzip();
    Ok(Simulation { streams, truth })
}

/// Last node before `v_T` that differs from it.
fn previous_distinct(context: &[NodeId]) -> Option<NodeId> {
    let last = *context.last()?;
    context.iter().rev().find(|v| **v != last).copied()
}

/// Mean over examples of the most likely next node's probability under the
/// policy, i.e. the best achievable Acc@1.
pub fn bayes_ceiling(city: &SynthCity, policy: &WalkerPolicy, examples: &[Example]) -> Result<f64> {
    if examples.is_empty() {
        return Err(Error::Empty("examples"));
    }
    let model = PolicyModel::new(city, policy);
    let g = &city.graph;
    let mut total = 0.0;
    for ex in examples {
        let here = g.index_of(ex.last()).ok_or(Error::UnknownNode(ex.last()))?;
        let prev = previous_distinct(&ex.context).and_then(|p| g.index_of(p));
        let best = model
            .transition(g, prev, here)
            .iter()
            .map(|(_, p)| *p)
            .fold(0.0, f64::max);
        total += best;
    }
    Ok(total / examples.len() as f64)
}

/// Expected Acc@1 of a uniform guess.
pub fn chance_level(examples: &[Example]) -> Result<f64> {
    if examples.is_empty() {
        return Err(Error::Empty("examples"));
    }
    Ok(examples.iter().map(|e| 1.0 / e.candidates.len() as f64).sum::<f64>() / examples.len() as f64)
}

/// A random model input with `t` history tokens and `c` candidates at
/// distinct lattice positions, for property and gradient tests.
pub fn random_prepared(in_dim: usize, struct_dim: usize, t: usize, c: usize, seed: u64) -> PreparedExample {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut draw = |n: usize| -> Vec<f64> { (0..n).map(|_| rng.random_range(-1.0..1.0)).collect() };
    let history = draw(t * in_dim);
    let candidates = draw(c * in_dim);
    let structural = draw((t + c) * struct_dim);
    let positions = (0..t + c)
        .map(|i| PlanarPoint::new((i % 5) as f64 * 97.0 + 3.0 * i as f64, (i / 5) as f64 * 89.0 - 7.0 * i as f64))
        .collect();
    let label = rng.random_range(0..c);
    let a: f64 = rng.random_range(-std::f64::consts::PI..std::f64::consts::PI);
    PreparedExample {
        key: ExampleKey {
            stream: 0,
            piece: 0,
            scale: Scale::Short,
            index: 0,
        },
        t,
        c,
        in_dim,
        struct_dim,
        history,
        candidates,
        structural,
        positions,
        candidate_ids: (0..c as u64).map(NodeId).collect(),
        label,
        direction: [a.cos(), a.sin()],
    }
}

/// Writes `graph.json`, `pois.csv` and `trajectories.csv` into `dir`.
pub fn write_city(city: &SynthCity, sim: &Simulation, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let origin = city.graph.origin();
    save_graph(&city.graph, dir.join("graph.json"))?;
    save_pois(&city.pois, &city.categories, origin, dir.join("pois.csv"))?;
    save_trajectories(&sim.streams, origin, dir.join("trajectories.csv"))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny(rows: usize, cols: usize, edge: f64) -> CitySpec {
        CitySpec {
            rows,
            cols,
            edge_length: edge,
            pois: PoiSpec {
                background: vec![],
                hotspots: 0,
                ..PoiSpec::default()
            },
            ..CitySpec::default()
        }
    }

    #[test]
    fn two_by_two_square() {
        let city = gen_city(&tiny(2, 2, 100.0), 1).unwrap();
        assert_eq!(city.graph.node_count(), 4);
        assert_eq!(city.graph.edge_count(), 4);
        assert!(city.pois.is_empty());
        let p = city.graph.position(NodeId(3)).unwrap();
        assert_eq!((p.x, p.y), (100.0, 100.0));
    }

    #[test]
    fn grid_edge_count() {
        let city = gen_city(&CitySpec::default(), 2).unwrap();
        assert_eq!(city.graph.node_count(), 400);
        assert_eq!(city.graph.edge_count(), 760);
    }

    #[test]
    fn full_persistence_goes_straight() {
        let city = gen_city(&tiny(5, 5, 200.0), 3).unwrap();
        let policy = WalkerPolicy {
            persistence: 1.0,
            ..WalkerPolicy::default()
        };
        let m = PolicyModel::new(&city, &policy);
        let g = &city.graph;
        let (a, b, c) = (
            g.index_of(NodeId(10)).unwrap(),
            g.index_of(NodeId(11)).unwrap(),
            g.index_of(NodeId(12)).unwrap(),
        );
        let t = m.transition(g, Some(a), b);
        let p: f64 = t.iter().map(|(_, p)| p).sum();
        assert!((p - 1.0).abs() < 1e-12);
        assert_eq!(t.iter().find(|(u, _)| *u == c).unwrap().1, 1.0);
    }

    #[test]
    fn simulation_respects_adjacency() {
        let city = gen_city(&CitySpec::default(), 4).unwrap();
        let sim = simulate_walkers(&city, &WalkerPolicy::default(), 5, 30, 9).unwrap();
        for truth in &sim.truth {
            assert_eq!(truth.len(), 31);
            for w in truth.windows(2) {
                assert!(city.graph.has_edge(w[0], w[1]));
            }
        }
    }
}
