//! GPS-to-graph projection without path imputation.
//!
//! Raw samples are quality-filtered, snapped to their nearest road edge,
//! turned into intersection visits by a buffer with hysteresis, cleaned of
//! short out-and-back twigs, split wherever consecutive visits are not
//! adjacent, and finally cut into fixed node-count segments from which one
//! next-node example each is built.

use std::cmp::Ordering;
use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{bearing, project_coords, unproject_coords, NodeId, PlanarPoint, RoadGraph};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GpsSample {
    pub t: f64,
    pub pos: PlanarPoint,
}

/// Time-ordered samples of one user.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GpsStream {
    pub user: String,
    pub samples: Vec<GpsSample>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NodeSequence {
    pub nodes: Vec<NodeId>,
    /// Registration time of each node, aligned with `nodes`.
    pub times: Vec<f64>,
    /// Index of the raw stream this sequence came from.
    pub stream: usize,
    /// Index of the piece within the stream after splitting.
    pub piece: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Scale {
    Short,
    Mid,
    Long,
    Extended,
    Full,
}

impl Scale {
    pub const WINDOWED: [Scale; 4] = [Scale::Short, Scale::Mid, Scale::Long, Scale::Extended];
    pub const ALL: [Scale; 5] = [Scale::Short, Scale::Mid, Scale::Long, Scale::Extended, Scale::Full];

    /// Inclusive node-count range of the scale.
    pub fn range(&self) -> (usize, usize) {
        match self {
            Scale::Short => (7, 20),
            Scale::Mid => (20, 40),
            Scale::Long => (40, 100),
            Scale::Extended => (100, 256),
            Scale::Full => (2, usize::MAX),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Scale::Short => "short",
            Scale::Mid => "mid",
            Scale::Long => "long",
            Scale::Extended => "extended",
            Scale::Full => "full",
        }
    }

    /// Cohort label used in reports.
    pub fn cohort(&self) -> &'static str {
        match self {
            Scale::Short => "1km",
            Scale::Mid => "3km",
            Scale::Long => "5km",
            Scale::Extended => "7km",
            Scale::Full => "full",
        }
    }
}

impl fmt::Display for Scale {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Scale {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Scale::ALL
            .into_iter()
            .find(|sc| sc.name() == s)
            .ok_or_else(|| Error::parse("scale", format!("unknown scale {s:?}")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Windows {
    pub short: usize,
    pub mid: usize,
    pub long: usize,
    pub extended: usize,
    /// Also emit one segment per whole sequence.
    pub full: bool,
}

impl Default for Windows {
    fn default() -> Self {
        Self {
            short: 14,
            mid: 30,
            long: 70,
            extended: 128,
            full: true,
        }
    }
}

impl Windows {
    /// Window length of a windowed scale; `None` for `Full` or when the
    /// size is 0, which disables that scale.
    pub fn size(&self, scale: Scale) -> Option<usize> {
        let w = match scale {
            Scale::Short => self.short,
            Scale::Mid => self.mid,
            Scale::Long => self.long,
            Scale::Extended => self.extended,
            Scale::Full => 0,
        };
        (w > 0).then_some(w)
    }

    pub fn validate(&self) -> Result<()> {
        for sc in Scale::WINDOWED {
            let Some(w) = self.size(sc) else { continue };
            let (lo, hi) = sc.range();
            if w < lo || w > hi {
                return Err(Error::Invalid(format!("{sc} window {w} outside {lo}..={hi}")));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ProjectionParams {
    pub search_radius: f64,
    /// Upper bound of the per-node buffer radius.
    pub buffer_max: f64,
    /// Buffer as a fraction of the node's shortest incident edge.
    pub buffer_fraction: f64,
    pub margin: f64,
    pub v_max: f64,
    /// Continuous presence inside one buffer this long appends a repeat.
    pub dwell_secs: f64,
    /// Snap candidates within this distance of the best are heading ties.
    pub tie_tolerance: f64,
    pub windows: Windows,
}

impl Default for ProjectionParams {
    fn default() -> Self {
        Self {
            search_radius: 50.0,
            buffer_max: 30.0,
            buffer_fraction: 0.4,
            margin: 5.0,
            v_max: 50.0,
            dwell_secs: 30.0,
            tie_tolerance: 2.0,
            windows: Windows::default(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Snap {
    pub edge: usize,
    /// Distance along the edge from its lower-index endpoint.
    pub offset: f64,
    pub distance: f64,
    pub pos: PlanarPoint,
}

fn project_on_segment(p: PlanarPoint, a: PlanarPoint, b: PlanarPoint) -> (PlanarPoint, f64) {
    let (vx, vy) = (b.x - a.x, b.y - a.y);
    let len2 = vx * vx + vy * vy;
    let t = if len2 == 0.0 {
        0.0
    } else {
        (((p.x - a.x) * vx + (p.y - a.y) * vy) / len2).clamp(0.0, 1.0)
    };
    let q = PlanarPoint::new(a.x + t * vx, a.y + t * vy);
    (q, t * len2.sqrt())
}

/// Snaps `p` to its nearest edge within `search_radius`. Edges whose
/// distance is within `tie_tolerance` of the best are tie-broken by heading:
/// the edge most parallel to `heading` (radians) wins.
pub fn snap_to_edge(
    p: PlanarPoint,
    heading: Option<f64>,
    graph: &RoadGraph,
    search_radius: f64,
    tie_tolerance: f64,
) -> Option<Snap> {
    let near = graph.edges_within(p, search_radius);
    let &(best_edge, best) = near.first()?;
    let mut chosen = best_edge;
    if let Some(h) = heading {
        let mut best_align = f64::NEG_INFINITY;
        let mut best_key = (f64::INFINITY, usize::MAX);
        for &(e, d) in near.iter().take_while(|(_, d)| *d <= best + tie_tolerance) {
            let (a, b) = graph.edges()[e];
            let dir = bearing(graph.position_at(a), graph.position_at(b)).unwrap_or(0.0);
            let align = (dir - h).cos().abs();
            let better = align > best_align + 1e-12
                || ((align - best_align).abs() <= 1e-12 && (d, e) < best_key);
            if better {
                best_align = align;
                best_key = (d, e);
                chosen = e;
            }
        }
    } else {
        // Equal distances: lowest edge index.
        chosen = near
            .iter()
            .take_while(|(_, d)| *d == best)
            .map(|(e, _)| *e)
            .min()
            .unwrap_or(best_edge);
    }
    let (a, b) = graph.edges()[chosen];
    let (pos, offset) = project_on_segment(p, graph.position_at(a), graph.position_at(b));
    Some(Snap {
        edge: chosen,
        offset,
        distance: pos.dist(&p),
        pos,
    })
}

/// Buffer radius around node `ix`.
pub fn node_buffer(graph: &RoadGraph, ix: usize, params: &ProjectionParams) -> f64 {
    let here = graph.position_at(ix);
    let shortest = graph
        .neighbors_at(ix)
        .iter()
        .map(|&j| here.dist(&graph.position_at(j)))
        .fold(f64::INFINITY, f64::min);
    params.buffer_max.min(params.buffer_fraction * shortest)
}

/// Turns snapped positions (with timestamps) into intersection visits.
///
/// A node is registered when the position is inside its buffer and it is
/// the nearest node. After registering `c`, a different node only registers
/// once it is nearer than `c` by `margin`, or the position is farther than
/// `buffer(c) + margin` from `c`. Leaving `c` that way and coming back
/// registers `c` again, and so does every `dwell_secs` of continuous
/// presence.
pub fn detect_hits(snapped: &[(f64, PlanarPoint)], graph: &RoadGraph, params: &ProjectionParams) -> Vec<NodeId> {
    detect_hits_timed(snapped, graph, params).into_iter().map(|(v, _)| v).collect()
}

/// [`detect_hits`] with the time at which each visit was registered.
pub fn detect_hits_timed(
    snapped: &[(f64, PlanarPoint)],
    graph: &RoadGraph,
    params: &ProjectionParams,
) -> Vec<(NodeId, f64)> {
    let mut out = Vec::new();
    let mut current: Option<usize> = None;
    let mut left = false;
    let mut last_reg_t = 0.0;
    for &(t, pos) in snapped {
        let Some((v, dv)) = graph.nearest_node(pos) else {
            continue;
        };
        let bv = node_buffer(graph, v, params);
        match current {
            None => {
                if dv <= bv {
                    out.push((graph.id(v), t));
                    current = Some(v);
                    left = false;
                    last_reg_t = t;
                }
            }
            Some(c) => {
                let dc = pos.dist(&graph.position_at(c));
                let bc = node_buffer(graph, c, params);
                if dc > bc + params.margin {
                    left = true;
                }
                if v != c {
                    if dv <= bv && (dv < dc - params.margin || dc > bc + params.margin) {
                        out.push((graph.id(v), t));
                        current = Some(v);
                        left = false;
                        last_reg_t = t;
                    }
                } else if dv <= bv {
                    if left {
                        out.push((graph.id(c), t));
                        left = false;
                        last_reg_t = t;
                    } else if t - last_reg_t >= params.dwell_secs {
                        out.push((graph.id(c), t));
                        last_reg_t = t;
                    }
                }
            }
        }
    }
    out
}

/// Run-length view: each node with the items of its run.
fn runs<T: Copy>(seq: &[T], id: impl Fn(&T) -> NodeId) -> Vec<(NodeId, Vec<T>)> {
    let mut out: Vec<(NodeId, Vec<T>)> = Vec::new();
    for x in seq {
        let v = id(x);
        match out.last_mut() {
            Some((u, items)) if *u == v => items.push(*x),
            _ => out.push((v, vec![*x])),
        }
    }
    out
}

/// Removes `v,a,v` and `v,a,b,v` detours on the distinct-node view until
/// none remain; the first run of `v` survives with its repeats.
pub fn prune_twigs(seq: &[NodeId]) -> Vec<NodeId> {
    prune_twigs_by(seq, |v| *v)
}

fn prune_twigs_by<T: Copy>(seq: &[T], id: impl Fn(&T) -> NodeId) -> Vec<T> {
    let mut r = runs(seq, id);
    'outer: loop {
        for i in 0..r.len() {
            for hop in [2usize, 3] {
                if i + hop < r.len() && r[i].0 == r[i + hop].0 {
                    r.drain(i + 1..=i + hop);
                    // merging can create a new adjacent duplicate run
                    if i + 1 < r.len() && r[i + 1].0 == r[i].0 {
                        let extra = r.remove(i + 1).1;
                        r[i].1.extend(extra);
                    }
                    continue 'outer;
                }
            }
        }
        break;
    }
    r.into_iter().flat_map(|(_, items)| items).collect()
}

fn speed(a: &GpsSample, b: &GpsSample) -> f64 {
    let dt = (b.t - a.t).abs();
    let d = a.pos.dist(&b.pos);
    if dt == 0.0 {
        if d == 0.0 {
            0.0
        } else {
            f64::INFINITY
        }
    } else {
        d / dt
    }
}

/// Drops isolated outliers (implausible speed to both neighbors), then
/// splits wherever a remaining gap is still implausible.
pub fn quality_filter(stream: &[GpsSample], v_max: f64) -> Vec<Vec<GpsSample>> {
    let n = stream.len();
    let keep: Vec<bool> = (0..n)
        .map(|i| {
            if i == 0 || i + 1 == n {
                return true;
            }
            !(speed(&stream[i - 1], &stream[i]) > v_max && speed(&stream[i], &stream[i + 1]) > v_max)
        })
        .collect();
    let kept: Vec<GpsSample> = stream
        .iter()
        .zip(&keep)
        .filter(|(_, k)| **k)
        .map(|(s, _)| *s)
        .collect();
    let mut out: Vec<Vec<GpsSample>> = Vec::new();
    let mut cur: Vec<GpsSample> = Vec::new();
    for s in kept {
        if let Some(prev) = cur.last() {
            if speed(prev, &s) > v_max {
                out.push(std::mem::take(&mut cur));
            }
        }
        cur.push(s);
    }
    if !cur.is_empty() {
        out.push(cur);
    }
    out
}

/// Splits wherever consecutive distinct visits are not adjacent.
pub fn split_on_gaps(seq: &[NodeId], graph: &RoadGraph) -> Vec<Vec<NodeId>> {
    split_on_gaps_by(seq, graph, |v| *v)
}

fn split_on_gaps_by<T: Copy>(seq: &[T], graph: &RoadGraph, id: impl Fn(&T) -> NodeId) -> Vec<Vec<T>> {
    let mut out = Vec::new();
    let mut cur: Vec<T> = Vec::new();
    for x in seq {
        if let Some(last) = cur.last() {
            let (u, v) = (id(last), id(x));
            if u != v && !graph.has_edge(u, v) {
                out.push(std::mem::take(&mut cur));
            }
        }
        cur.push(*x);
    }
    if !cur.is_empty() {
        out.push(cur);
    }
    out
}

fn heading_at(samples: &[GpsSample], i: usize) -> Option<f64> {
    let a = if i > 0 { samples[i - 1].pos } else { samples[i].pos };
    let b = if i + 1 < samples.len() { samples[i + 1].pos } else { samples[i].pos };
    bearing(a, b).ok()
}

/// Full projection of one raw stream into node sequences.
pub fn project_stream(
    samples: &[GpsSample],
    stream: usize,
    graph: &RoadGraph,
    params: &ProjectionParams,
) -> Vec<NodeSequence> {
    let mut sequences = Vec::new();
    for chunk in quality_filter(samples, params.v_max) {
        // Unsnappable samples leave the mapped graph and break the run.
        let mut run: Vec<(f64, PlanarPoint)> = Vec::new();
        let mut runs_out = Vec::new();
        for i in 0..chunk.len() {
            match snap_to_edge(chunk[i].pos, heading_at(&chunk, i), graph, params.search_radius, params.tie_tolerance) {
                Some(s) => run.push((chunk[i].t, s.pos)),
                None => {
                    if !run.is_empty() {
                        runs_out.push(std::mem::take(&mut run));
                    }
                }
            }
        }
        if !run.is_empty() {
            runs_out.push(run);
        }
        for r in runs_out {
            let hits = detect_hits_timed(&r, graph, params);
            let pruned = prune_twigs_by(&hits, |h| h.0);
            for piece in split_on_gaps_by(&pruned, graph, |h| h.0) {
                let piece = prune_twigs_by(&piece, |h| h.0);
                if !piece.is_empty() {
                    sequences.push(piece);
                }
            }
        }
    }
    sequences
        .into_iter()
        .enumerate()
        .map(|(k, hits)| NodeSequence {
            nodes: hits.iter().map(|h| h.0).collect(),
            times: hits.iter().map(|h| h.1).collect(),
            stream,
            piece: k,
        })
        .collect()
}

/// Projects every stream; output is in stream order regardless of threads.
pub fn project_streams(streams: &[GpsStream], graph: &RoadGraph, params: &ProjectionParams) -> Vec<NodeSequence> {
    streams
        .par_iter()
        .enumerate()
        .map(|(i, s)| project_stream(&s.samples, i, graph, params))
        .collect::<Vec<_>>()
        .into_iter()
        .flatten()
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Segment {
    pub nodes: Vec<NodeId>,
    /// Registration times aligned with `nodes`; empty when read from cache.
    #[serde(default)]
    pub times: Vec<f64>,
    pub scale: Scale,
    pub stream: usize,
    pub piece: usize,
    /// Window index within the sequence for this scale.
    pub index: usize,
}

/// Cuts consecutive non-overlapping windows per scale; a trailing remainder
/// survives only if it reaches the scale's minimum length.
pub fn segment_stream(seq: &NodeSequence, windows: &Windows) -> Vec<Segment> {
    let mut out = Vec::new();
    let timed = seq.times.len() == seq.nodes.len();
    let times = |a: usize, b: usize| if timed { seq.times[a..b].to_vec() } else { Vec::new() };
    for scale in Scale::WINDOWED {
        let Some(w) = windows.size(scale) else { continue };
        let (lo, _) = scale.range();
        for (index, chunk) in seq.nodes.chunks(w).enumerate() {
            if chunk.len() == w || chunk.len() >= lo {
                out.push(Segment {
                    nodes: chunk.to_vec(),
                    times: times(index * w, index * w + chunk.len()),
                    scale,
                    stream: seq.stream,
                    piece: seq.piece,
                    index,
                });
            }
        }
    }
    if windows.full && seq.nodes.len() >= Scale::Full.range().0 {
        out.push(Segment {
            nodes: seq.nodes.clone(),
            times: times(0, seq.nodes.len()),
            scale: Scale::Full,
            stream: seq.stream,
            piece: seq.piece,
            index: 0,
        });
    }
    out
}

/// Planar displacement between two nodes; bearing is `None` for a repeat.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct StepGeometry {
    pub dx: f64,
    pub dy: f64,
    pub length: f64,
    pub bearing: Option<f64>,
}

impl StepGeometry {
    pub fn between(a: PlanarPoint, b: PlanarPoint) -> Self {
        let (dx, dy) = (b.x - a.x, b.y - a.y);
        Self {
            dx,
            dy,
            length: dx.hypot(dy),
            bearing: bearing(a, b).ok(),
        }
    }

    /// `[dx/1000, dy/1000, length/1000, cos, sin]`, zeros when undefined.
    pub fn features(&self) -> [f64; 5] {
        let (c, s) = self.bearing.map_or((0.0, 0.0), |b| (b.cos(), b.sin()));
        [self.dx / 1000.0, self.dy / 1000.0, self.length / 1000.0, c, s]
    }
}

/// Identifies where an example was cut from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct ExampleKey {
    pub stream: usize,
    pub piece: usize,
    pub scale: Scale,
    pub index: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Example {
    pub key: ExampleKey,
    pub context: Vec<NodeId>,
    pub candidates: Vec<NodeId>,
    pub label: NodeId,
    /// One entry per context node; the first is all zeros.
    pub steps: Vec<StepGeometry>,
    /// From `v_T` to each candidate, aligned with `candidates`.
    pub candidate_geometry: Vec<StepGeometry>,
}

impl Example {
    pub fn scale(&self) -> Scale {
        self.key.scale
    }

    pub fn last(&self) -> NodeId {
        *self.context.last().expect("non-empty context")
    }

    pub fn label_index(&self) -> usize {
        self.candidates
            .iter()
            .position(|c| *c == self.label)
            .expect("label among candidates")
    }
}

/// Builds the final-step example of a segment, or `None` when the segment
/// never moves (all nodes equal) or is empty.
pub fn build_example(segment: &Segment, graph: &RoadGraph) -> Option<Example> {
    let nodes = &segment.nodes;
    let label = *nodes.last()?;
    // first index of the trailing run of `label`
    let mut start = nodes.len() - 1;
    while start > 0 && nodes[start - 1] == label {
        start -= 1;
    }
    if start == 0 {
        return None;
    }
    let context: Vec<NodeId> = nodes[..start].to_vec();
    let v_t = *context.last().expect("non-empty");
    assert!(graph.has_edge(v_t, label), "final transition {v_t}->{label} is not an edge");
    let candidates = graph.neighbors(v_t);
    let pos = |id: NodeId| graph.position(id).expect("node in graph");
    let mut steps = Vec::with_capacity(context.len());
    steps.push(StepGeometry::default());
    for w in context.windows(2) {
        steps.push(StepGeometry::between(pos(w[0]), pos(w[1])));
    }
    let here = pos(v_t);
    let candidate_geometry = candidates.iter().map(|&c| StepGeometry::between(here, pos(c))).collect();
    Some(Example {
        key: ExampleKey {
            stream: segment.stream,
            piece: segment.piece,
            scale: segment.scale,
            index: segment.index,
        },
        context,
        candidates,
        label,
        steps,
        candidate_geometry,
    })
}

pub fn build_examples(segments: &[Segment], graph: &RoadGraph) -> Vec<Example> {
    segments.iter().filter_map(|s| build_example(s, graph)).collect()
}

fn user_order(a: &str, b: &str) -> Ordering {
    match (a.parse::<u64>(), b.parse::<u64>()) {
        (Ok(x), Ok(y)) => x.cmp(&y),
        _ => a.cmp(b),
    }
}

#[derive(Debug, Deserialize, Serialize)]
struct TrajRow {
    user: String,
    t: f64,
    lat: f64,
    lon: f64,
}

/// Reads the trajectory CSV (`user,t,lat,lon`), which must be sorted by user
/// and then strictly by time.
pub fn load_trajectories(path: impl AsRef<Path>, origin: (f64, f64)) -> Result<Vec<GpsStream>> {
    let path = path.as_ref();
    let mut rdr = csv::Reader::from_path(path).map_err(|e| Error::parse(path.display().to_string(), e))?;
    let mut streams: Vec<GpsStream> = Vec::new();
    for (i, row) in rdr.deserialize::<TrajRow>().enumerate() {
        let ctx = || format!("{}: row {}", path.display(), i + 2);
        let row = row.map_err(|e| Error::parse(ctx(), e))?;
        let pos = project_coords(row.lat, row.lon, origin).map_err(|e| Error::parse(ctx(), e))?;
        let sample = GpsSample { t: row.t, pos };
        match streams.last_mut() {
            Some(s) if s.user == row.user => {
                let prev = s.samples.last().expect("non-empty").t;
                if !(row.t > prev) {
                    return Err(Error::parse(ctx(), format!("timestamps not increasing for user {}", row.user)));
                }
                s.samples.push(sample);
            }
            Some(s) if user_order(&s.user, &row.user) != Ordering::Less => {
                return Err(Error::parse(ctx(), format!("user {} out of order", row.user)));
            }
            _ => streams.push(GpsStream {
                user: row.user,
                samples: vec![sample],
            }),
        }
    }
    Ok(streams)
}

pub fn save_trajectories(streams: &[GpsStream], origin: (f64, f64), path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::parse(path.display().to_string(), e))?;
    for s in streams {
        for g in &s.samples {
            let (lat, lon) = unproject_coords(g.pos, origin);
            w.serialize(TrajRow {
                user: s.user.clone(),
                t: g.t,
                lat,
                lon,
            })
            .map_err(|e| Error::parse(path.display().to_string(), e))?;
        }
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Segment cache: one `scale<TAB>id,id,...` line per segment.
pub fn write_segments(segments: &[Segment], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for s in segments {
        let ids: Vec<String> = s.nodes.iter().map(|n| n.0.to_string()).collect();
        writeln!(w, "{}\t{}", s.scale, ids.join(",")).map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Reads a segment cache. Provenance (stream, window) is not stored, so
/// segments are keyed by line number.
pub fn read_segments(path: impl AsRef<Path>) -> Result<Vec<Segment>> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.is_empty() {
            continue;
        }
        let ctx = || format!("{}: line {}", path.display(), i + 1);
        let (scale, ids) = line.split_once('\t').ok_or_else(|| Error::parse(ctx(), "missing tab"))?;
        let scale: Scale = scale.parse().map_err(|e| Error::parse(ctx(), e))?;
        let nodes = ids
            .split(',')
            .map(|s| s.parse::<u64>().map(NodeId).map_err(|e| Error::parse(ctx(), e)))
            .collect::<Result<Vec<_>>>()?;
        out.push(Segment {
            nodes,
            times: Vec::new(),
            scale,
            stream: i,
            piece: 0,
            index: 0,
        });
    }
    Ok(out)
}
