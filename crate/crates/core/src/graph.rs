//! Road graph data model: intersections with planar coordinates, undirected
//! road segments, POIs, and the file formats they are read from.
//!
//! Coordinates are projected once at load time with a local equirectangular
//! projection, so every downstream computation works in meters.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;
use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;

use rstar::primitives::{GeomWithData, Line};
use rstar::RTree;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::Categories;

/// Meters per degree of longitude at the equator.
pub const METERS_PER_DEG_LON: f64 = 111_320.0;
/// Meters per degree of latitude.
pub const METERS_PER_DEG_LAT: f64 = 110_540.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct NodeId(pub u64);

impl fmt::Display for NodeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

/// Meters east (`x`) and north (`y`) of the projection origin.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PlanarPoint {
    pub x: f64,
    pub y: f64,
}

impl PlanarPoint {
    pub const fn new(x: f64, y: f64) -> Self {
        Self { x, y }
    }

    pub fn dist(&self, other: &PlanarPoint) -> f64 {
        (self.x - other.x).hypot(self.y - other.y)
    }

    pub fn dist2(&self, other: &PlanarPoint) -> f64 {
        let dx = self.x - other.x;
        let dy = self.y - other.y;
        dx * dx + dy * dy
    }

    pub fn is_valid(&self) -> bool {
        self.x.is_finite() && self.y.is_finite() && self.x.abs() < 1e7 && self.y.abs() < 1e7
    }

    fn as_array(&self) -> [f64; 2] {
        [self.x, self.y]
    }
}

/// Projects `(lat, lon)` in degrees to meters around `origin = (lat0, lon0)`.
pub fn project_coords(lat: f64, lon: f64, origin: (f64, f64)) -> Result<PlanarPoint> {
    if !(lat.abs() <= 90.0 && lon.abs() <= 180.0) {
        return Err(Error::CoordinateRange { lat, lon });
    }
    let (lat0, lon0) = origin;
    Ok(PlanarPoint {
        x: (lon - lon0) * lat0.to_radians().cos() * METERS_PER_DEG_LON,
        y: (lat - lat0) * METERS_PER_DEG_LAT,
    })
}

/// Inverse of [`project_coords`]; returns `(lat, lon)`.
pub fn unproject_coords(p: PlanarPoint, origin: (f64, f64)) -> (f64, f64) {
    let (lat0, lon0) = origin;
    (
        lat0 + p.y / METERS_PER_DEG_LAT,
        lon0 + p.x / (lat0.to_radians().cos() * METERS_PER_DEG_LON),
    )
}

/// Bearing from `from` to `to`, counter-clockwise from east, in `(-π, π]`.
pub fn bearing(from: PlanarPoint, to: PlanarPoint) -> Result<f64> {
    let dx = to.x - from.x;
    let dy = to.y - from.y;
    if dx == 0.0 && dy == 0.0 {
        return Err(Error::UndefinedBearing);
    }
    Ok(wrap_angle(dy.atan2(dx)))
}

/// Wraps an angle into `(-π, π]`.
pub fn wrap_angle(a: f64) -> f64 {
    use std::f64::consts::{PI, TAU};
    let mut w = a % TAU;
    if w <= -PI {
        w += TAU;
    } else if w > PI {
        w -= TAU;
    }
    w
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Poi {
    pub id: u64,
    pub category: usize,
    pub pos: PlanarPoint,
}

type NodePoint = GeomWithData<[f64; 2], usize>;
type EdgeLine = GeomWithData<Line<[f64; 2]>, usize>;

/// Undirected intersection graph. Immutable once built.
///
/// Nodes are stored densely in ascending [`NodeId`] order, so a node's dense
/// index orders the same way as its id and adjacency lists sorted by index
/// are sorted by id.
#[derive(Clone, Debug)]
pub struct RoadGraph {
    ids: Vec<NodeId>,
    pos: Vec<PlanarPoint>,
    index: HashMap<NodeId, usize>,
    adj: Vec<Vec<usize>>,
    edges: Vec<(usize, usize)>,
    origin: (f64, f64),
    node_tree: RTree<NodePoint>,
    edge_tree: RTree<EdgeLine>,
}

impl RoadGraph {
    /// Builds a graph from planar nodes and undirected edges. Duplicate
    /// edges collapse; self-loops and dangling endpoints are errors.
    pub fn new(
        origin: (f64, f64),
        nodes: Vec<(NodeId, PlanarPoint)>,
        edges: &[(NodeId, NodeId)],
    ) -> Result<Self> {
        let mut seen = HashMap::with_capacity(nodes.len());
        for (i, (id, p)) in nodes.iter().enumerate() {
            if seen.insert(*id, i).is_some() {
                return Err(Error::DuplicateNode { index: i, id: *id });
            }
            if !p.is_valid() {
                return Err(Error::parse(
                    format!("node record {i} (id {id})"),
                    "planar coordinate is not finite or exceeds 1e7 m",
                ));
            }
        }
        let mut nodes = nodes;
        nodes.sort_by_key(|(id, _)| *id);
        let ids: Vec<NodeId> = nodes.iter().map(|(id, _)| *id).collect();
        let pos: Vec<PlanarPoint> = nodes.iter().map(|(_, p)| *p).collect();
        let index: HashMap<NodeId, usize> = ids.iter().enumerate().map(|(i, id)| (*id, i)).collect();

        let mut edge_set = BTreeSet::new();
        for (i, &(a, b)) in edges.iter().enumerate() {
            let ia = *index.get(&a).ok_or(Error::DanglingEndpoint {
                index: i,
                a,
                b,
                missing: a,
            })?;
            let ib = *index.get(&b).ok_or(Error::DanglingEndpoint {
                index: i,
                a,
                b,
                missing: b,
            })?;
            if ia == ib {
                return Err(Error::SelfLoop { index: i, id: a });
            }
            edge_set.insert((ia.min(ib), ia.max(ib)));
        }
        let edges: Vec<(usize, usize)> = edge_set.into_iter().collect();
        let mut adj = vec![Vec::new(); ids.len()];
        for &(a, b) in &edges {
            adj[a].push(b);
            adj[b].push(a);
        }
        for list in &mut adj {
            list.sort_unstable();
        }

        let node_tree = RTree::bulk_load(
            pos.iter()
                .enumerate()
                .map(|(i, p)| NodePoint::new(p.as_array(), i))
                .collect(),
        );
        let edge_tree = RTree::bulk_load(
            edges
                .iter()
                .enumerate()
                .map(|(e, &(a, b))| EdgeLine::new(Line::new(pos[a].as_array(), pos[b].as_array()), e))
                .collect(),
        );

        Ok(Self {
            ids,
            pos,
            index,
            adj,
            edges,
            origin,
            node_tree,
            edge_tree,
        })
    }

    pub fn node_count(&self) -> usize {
        self.ids.len()
    }

    pub fn edge_count(&self) -> usize {
        self.edges.len()
    }

    pub fn origin(&self) -> (f64, f64) {
        self.origin
    }

    /// Node ids in ascending order; position `i` is dense index `i`.
    pub fn ids(&self) -> &[NodeId] {
        &self.ids
    }

    pub fn id(&self, ix: usize) -> NodeId {
        self.ids[ix]
    }

    pub fn index_of(&self, id: NodeId) -> Option<usize> {
        self.index.get(&id).copied()
    }

    pub fn contains(&self, id: NodeId) -> bool {
        self.index.contains_key(&id)
    }

    pub fn position(&self, id: NodeId) -> Option<PlanarPoint> {
        self.index_of(id).map(|i| self.pos[i])
    }

    pub fn position_at(&self, ix: usize) -> PlanarPoint {
        self.pos[ix]
    }

    /// Dense neighbor indices, ascending.
    pub fn neighbors_at(&self, ix: usize) -> &[usize] {
        &self.adj[ix]
    }

    /// Neighbor ids, ascending.
    pub fn neighbors(&self, id: NodeId) -> Vec<NodeId> {
        self.index_of(id)
            .map(|i| self.adj[i].iter().map(|&j| self.ids[j]).collect())
            .unwrap_or_default()
    }

    pub fn degree(&self, id: NodeId) -> usize {
        self.index_of(id).map_or(0, |i| self.adj[i].len())
    }

    pub fn has_edge(&self, a: NodeId, b: NodeId) -> bool {
        match (self.index_of(a), self.index_of(b)) {
            (Some(ia), Some(ib)) => self.adj[ia].binary_search(&ib).is_ok(),
            _ => false,
        }
    }

    /// Edges as dense index pairs `(a, b)` with `a < b`.
    pub fn edges(&self) -> &[(usize, usize)] {
        &self.edges
    }

    pub fn edge_ids(&self, e: usize) -> (NodeId, NodeId) {
        let (a, b) = self.edges[e];
        (self.ids[a], self.ids[b])
    }

    /// Nearest node by Euclidean distance; ties go to the smallest id.
    pub fn nearest_node(&self, p: PlanarPoint) -> Option<(usize, f64)> {
        let mut it = self.node_tree.nearest_neighbor_iter_with_distance_2(&p.as_array());
        let (first, best) = it.next()?;
        let mut winner = first.data;
        for (cand, d2) in it {
            if d2 > best {
                break;
            }
            winner = winner.min(cand.data);
        }
        Some((winner, best.sqrt()))
    }

    /// Dense indices of nodes within `radius` (inclusive), ascending.
    pub fn nodes_within(&self, p: PlanarPoint, radius: f64) -> Vec<usize> {
        let mut out: Vec<usize> = self
            .node_tree
            .locate_within_distance(p.as_array(), radius * radius)
            .map(|n| n.data)
            .collect();
        out.sort_unstable();
        out
    }

    /// Edges whose segment lies within `radius` of `p`, as `(edge, distance)`
    /// in ascending distance order.
    pub fn edges_within(&self, p: PlanarPoint, radius: f64) -> Vec<(usize, f64)> {
        let mut out = Vec::new();
        for (line, d2) in self.edge_tree.nearest_neighbor_iter_with_distance_2(&p.as_array()) {
            if d2 > radius * radius {
                break;
            }
            out.push((line.data, d2.sqrt()));
        }
        out
    }

    /// Serializes to the Graph JSON document, converting back to lat/lon.
    pub fn to_document(&self) -> GraphDocument {
        GraphDocument {
            origin: Some([self.origin.0, self.origin.1]),
            nodes: self
                .ids
                .iter()
                .zip(&self.pos)
                .map(|(id, p)| {
                    let (lat, lon) = unproject_coords(*p, self.origin);
                    NodeRecord { id: id.0, lat, lon }
                })
                .collect(),
            edges: self
                .edges
                .iter()
                .map(|&(a, b)| [self.ids[a].0, self.ids[b].0])
                .collect(),
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct NodeRecord {
    pub id: u64,
    pub lat: f64,
    pub lon: f64,
}

/// On-disk graph: `{"origin":[lat,lon], "nodes":[{"id","lat","lon"}], "edges":[[a,b],...]}`.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct GraphDocument {
    #[serde(default)]
    pub origin: Option<[f64; 2]>,
    pub nodes: Vec<NodeRecord>,
    pub edges: Vec<[u64; 2]>,
}

impl GraphDocument {
    pub fn into_graph(self) -> Result<RoadGraph> {
        if self.nodes.is_empty() {
            return Err(Error::Empty("graph has no nodes"));
        }
        let origin = match self.origin {
            Some([lat, lon]) => (lat, lon),
            None => {
                let n = self.nodes.len() as f64;
                let lat = self.nodes.iter().map(|r| r.lat).sum::<f64>() / n;
                let lon = self.nodes.iter().map(|r| r.lon).sum::<f64>() / n;
                (lat, lon)
            }
        };
        let mut nodes = Vec::with_capacity(self.nodes.len());
        for (i, r) in self.nodes.iter().enumerate() {
            let p = project_coords(r.lat, r.lon, origin).map_err(|e| {
                Error::parse(format!("node record {i} (id {})", r.id), e)
            })?;
            nodes.push((NodeId(r.id), p));
        }
        let edges: Vec<(NodeId, NodeId)> = self
            .edges
            .iter()
            .map(|[a, b]| (NodeId(*a), NodeId(*b)))
            .collect();
        RoadGraph::new(origin, nodes, &edges)
    }
}

pub fn load_graph(path: impl AsRef<Path>) -> Result<RoadGraph> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let doc: GraphDocument = serde_json::from_reader(BufReader::new(file))
        .map_err(|e| Error::parse(path.display().to_string(), e))?;
    doc.into_graph()
}

pub fn save_graph(graph: &RoadGraph, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    serde_json::to_writer(&mut w, &graph.to_document())
        .map_err(|e| Error::parse(path.display().to_string(), e))?;
    w.flush().map_err(|e| Error::io(path, e))
}

#[derive(Debug, Deserialize, Serialize)]
struct PoiRow {
    id: u64,
    category: String,
    lat: f64,
    lon: f64,
}

/// Reads a POI CSV (`id,category,lat,lon`), projecting around `origin`.
pub fn load_pois(path: impl AsRef<Path>, categories: &Categories, origin: (f64, f64)) -> Result<Vec<Poi>> {
    let path = path.as_ref();
    let mut rdr = csv::Reader::from_path(path).map_err(|e| Error::parse(path.display().to_string(), e))?;
    let mut out = Vec::new();
    for (i, row) in rdr.deserialize::<PoiRow>().enumerate() {
        let ctx = || format!("{}: row {}", path.display(), i + 2);
        let row = row.map_err(|e| Error::parse(ctx(), e))?;
        let category = categories
            .index_of(&row.category)
            .ok_or_else(|| Error::parse(ctx(), Error::UnknownCategory(row.category.clone())))?;
        let pos = project_coords(row.lat, row.lon, origin).map_err(|e| Error::parse(ctx(), e))?;
        out.push(Poi {
            id: row.id,
            category,
            pos,
        });
    }
    Ok(out)
}

pub fn save_pois(pois: &[Poi], categories: &Categories, origin: (f64, f64), path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::parse(path.display().to_string(), e))?;
    for p in pois {
        let (lat, lon) = unproject_coords(p.pos, origin);
        w.serialize(PoiRow {
            id: p.id,
            category: categories.name(p.category).to_string(),
            lat,
            lon,
        })
        .map_err(|e| Error::parse(path.display().to_string(), e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Assigns each POI to its nearest node (ties to the smallest id). Every
/// node appears in the result, possibly with an empty list.
pub fn assign_pois(graph: &RoadGraph, pois: &[Poi]) -> BTreeMap<NodeId, Vec<Poi>> {
    let mut out: BTreeMap<NodeId, Vec<Poi>> = graph.ids().iter().map(|id| (*id, Vec::new())).collect();
    for poi in pois {
        if let Some((ix, _)) = graph.nearest_node(poi.pos) {
            out.get_mut(&graph.id(ix)).expect("node present").push(poi.clone());
        }
    }
    out
}
