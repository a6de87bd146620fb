//! Sector-wise directional POI descriptors.
//!
//! Around every node, POIs of each category within radius `R` are summarized
//! by circular statistics of their distance and bearing, by per-sector
//! densities over `S` equal angular sectors, and by a presence flag. The
//! per-category blocks are concatenated in a fixed category order, giving a
//! descriptor of length `(5 + S + 1) * |C|` (168 at `S = 8`, `|C| = 12`).

use std::f64::consts::PI;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rayon::prelude::*;
use rstar::primitives::GeomWithData;
use rstar::RTree;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{bearing, NodeId, PlanarPoint, Poi, RoadGraph};

pub const DEFAULT_CATEGORIES: [&str; 12] = [
    "food",
    "shop",
    "education",
    "health",
    "transport",
    "leisure",
    "finance",
    "tourism",
    "office",
    "public_service",
    "residential",
    "other",
];

pub const GEO_DIM: usize = 4;

/// Ordered POI category list; a category's position is its index.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Categories {
    names: Vec<String>,
}

impl Default for Categories {
    fn default() -> Self {
        Self::new(DEFAULT_CATEGORIES.iter().map(|s| s.to_string()).collect())
    }
}

impl Categories {
    pub fn new(names: Vec<String>) -> Self {
        Self { names }
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    /// Case-sensitive lookup.
    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    pub fn name(&self, ix: usize) -> &str {
        &self.names[ix]
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }
}

/// Index arithmetic for the concatenated descriptor.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FeatureLayout {
    pub sectors: usize,
    pub categories: usize,
}

impl FeatureLayout {
    pub fn new(sectors: usize, categories: usize) -> Self {
        Self { sectors, categories }
    }

    pub fn per_category(&self) -> usize {
        5 + self.sectors + 1
    }

    pub fn dim(&self) -> usize {
        self.per_category() * self.categories
    }

    pub fn category_offset(&self, c: usize) -> usize {
        c * self.per_category()
    }

    /// Range of the sector-density slots of category `c`.
    pub fn sector_range(&self, c: usize) -> std::ops::Range<usize> {
        let start = self.category_offset(c) + 5;
        start..start + self.sectors
    }

    pub fn presence_slot(&self, c: usize) -> usize {
        self.category_offset(c) + 5 + self.sectors
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct CircularStats {
    pub mu_d: f64,
    pub var_d: f64,
    pub m_c: f64,
    pub m_s: f64,
    pub r: f64,
}

impl CircularStats {
    pub fn to_array(&self) -> [f64; 5] {
        [self.mu_d, self.var_d, self.m_c, self.m_s, self.r]
    }
}

/// Population statistics of `(distance, bearing)` pairs. Empty input gives
/// all zeros.
pub fn circular_stats(pois: &[(f64, f64)]) -> CircularStats {
    if pois.is_empty() {
        return CircularStats::default();
    }
    let n = pois.len() as f64;
    let mu_d = pois.iter().map(|p| p.0).sum::<f64>() / n;
    let var_d = pois.iter().map(|p| (p.0 - mu_d).powi(2)).sum::<f64>() / n;
    let m_c = pois.iter().map(|p| p.1.cos()).sum::<f64>() / n;
    let m_s = pois.iter().map(|p| p.1.sin()).sum::<f64>() / n;
    CircularStats {
        mu_d,
        var_d,
        m_c,
        m_s,
        r: m_c.hypot(m_s).min(1.0),
    }
}

/// Sector of `theta` among `sectors` equal arcs of `(-π, π]`; sector 0 is
/// `(-π, -π + 2π/S]`.
pub fn sector_index(theta: f64, sectors: usize) -> usize {
    let width = 2.0 * PI / sectors as f64;
    let t = ((theta + PI) / width).ceil() as isize - 1;
    t.clamp(0, sectors as isize - 1) as usize
}

/// Area of one sector, `πR²/S`.
pub fn sector_area(sectors: usize, radius: f64) -> f64 {
    PI * radius * radius / sectors as f64
}

/// Per-sector POI counts divided by the sector area.
pub fn sector_densities(pois: &[(f64, f64)], sectors: usize, radius: f64) -> Vec<f64> {
    sector_counts(pois, sectors)
        .into_iter()
        .map(|c| c as f64 / sector_area(sectors, radius))
        .collect()
}

pub fn sector_counts(pois: &[(f64, f64)], sectors: usize) -> Vec<usize> {
    let mut counts = vec![0usize; sectors];
    for &(_, theta) in pois {
        counts[sector_index(theta, sectors)] += 1;
    }
    counts
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureParams {
    pub radius: f64,
    pub sectors: usize,
}

impl Default for FeatureParams {
    fn default() -> Self {
        Self {
            radius: 150.0,
            sectors: 8,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct NodeDescriptor {
    pub node: NodeId,
    pub x: Vec<f64>,
    pub mask: Vec<bool>,
    pub geo: [f64; GEO_DIM],
}

/// `[degree/8, cos(mean bearing), sin(mean bearing), mean edge length / 1000]`,
/// with a circular mean over outgoing edge bearings.
pub fn geometric_features(graph: &RoadGraph, ix: usize) -> [f64; GEO_DIM] {
    let nbrs = graph.neighbors_at(ix);
    if nbrs.is_empty() {
        return [0.0; GEO_DIM];
    }
    let here = graph.position_at(ix);
    let (mut sc, mut ss, mut len) = (0.0, 0.0, 0.0);
    for &j in nbrs {
        let there = graph.position_at(j);
        let b = bearing(here, there).unwrap_or(0.0);
        sc += b.cos();
        ss += b.sin();
        len += here.dist(&there);
    }
    let n = nbrs.len() as f64;
    let res = sc.hypot(ss);
    let (c, s) = if res / n < 1e-9 { (0.0, 0.0) } else { (sc / res, ss / res) };
    [n / 8.0, c, s, len / n / 1000.0]
}

/// Builds one node's descriptor from the POIs in `nearby`; POIs farther than
/// the radius are ignored, so callers may pass any superset.
pub fn aggregate_node(
    graph: &RoadGraph,
    node: NodeId,
    nearby: &[Poi],
    params: &FeatureParams,
    categories: &Categories,
) -> Result<NodeDescriptor> {
    if !(params.radius > 0.0) || params.sectors == 0 {
        return Err(Error::Invalid(format!(
            "radius {} and sectors {} must be positive",
            params.radius, params.sectors
        )));
    }
    let ix = graph.index_of(node).ok_or(Error::UnknownNode(node))?;
    let center = graph.position_at(ix);
    let layout = FeatureLayout::new(params.sectors, categories.len());
    let mut per_cat: Vec<Vec<(f64, f64)>> = vec![Vec::new(); categories.len()];
    for poi in nearby {
        if poi.category >= categories.len() {
            return Err(Error::UnknownCategory(format!("#{}", poi.category)));
        }
        let d = center.dist(&poi.pos);
        if d <= params.radius {
            // A POI on top of the node has no bearing; it counts as due east.
            let theta = bearing(center, poi.pos).unwrap_or(0.0);
            per_cat[poi.category].push((d, theta));
        }
    }
    let mut x = vec![0.0; layout.dim()];
    let mut mask = vec![false; layout.dim()];
    for (c, items) in per_cat.iter_mut().enumerate() {
        if items.is_empty() {
            continue;
        }
        // Input order must not matter; sum in a canonical order.
        items.sort_by(|a, b| a.partial_cmp(b).expect("finite"));
        let off = layout.category_offset(c);
        let stats = circular_stats(items);
        x[off..off + 5].copy_from_slice(&stats.to_array());
        mask[off..off + 5].fill(true);
        let counts = sector_counts(items, params.sectors);
        let area = sector_area(params.sectors, params.radius);
        for (k, &cnt) in counts.iter().enumerate() {
            if cnt > 0 {
                x[off + 5 + k] = cnt as f64 / area;
                mask[off + 5 + k] = true;
            }
        }
        let p = layout.presence_slot(c);
        x[p] = 1.0;
        mask[p] = true;
    }
    Ok(NodeDescriptor {
        node,
        x,
        mask,
        geo: geometric_features(graph, ix),
    })
}

type PoiPoint = GeomWithData<[f64; 2], usize>;

/// Radius queries over a POI set.
pub struct PoiIndex<'a> {
    pois: &'a [Poi],
    tree: RTree<PoiPoint>,
}

impl<'a> PoiIndex<'a> {
    pub fn new(pois: &'a [Poi]) -> Self {
        let tree = RTree::bulk_load(
            pois.iter()
                .enumerate()
                .map(|(i, p)| PoiPoint::new([p.pos.x, p.pos.y], i))
                .collect(),
        );
        Self { pois, tree }
    }

    /// POIs within `radius` of `p`, in input order.
    pub fn within(&self, p: PlanarPoint, radius: f64) -> Vec<Poi> {
        let mut ix: Vec<usize> = self
            .tree
            .locate_within_distance([p.x, p.y], radius * radius)
            .map(|g| g.data)
            .collect();
        ix.sort_unstable();
        ix.into_iter().map(|i| self.pois[i].clone()).collect()
    }
}

/// Descriptors for every node, in dense node order.
#[derive(Clone, Debug, PartialEq)]
pub struct DescriptorTable {
    pub layout: FeatureLayout,
    pub rows: Vec<NodeDescriptor>,
}

impl DescriptorTable {
    pub fn dim(&self) -> usize {
        self.layout.dim()
    }
}

pub fn build_descriptors(
    graph: &RoadGraph,
    pois: &[Poi],
    params: &FeatureParams,
    categories: &Categories,
) -> Result<DescriptorTable> {
    let index = PoiIndex::new(pois);
    let rows = (0..graph.node_count())
        .into_par_iter()
        .map(|ix| {
            let near = index.within(graph.position_at(ix), params.radius);
            aggregate_node(graph, graph.id(ix), &near, params, categories)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(DescriptorTable {
        layout: FeatureLayout::new(params.sectors, categories.len()),
        rows,
    })
}

/// Column-wise z-score normalizer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Normalizer {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
    pub epsilon: f64,
}

impl Normalizer {
    pub const EPSILON: f64 = 1e-8;

    /// Fits population mean and standard deviation over `rows`.
    pub fn fit<R: AsRef<[f64]>>(rows: &[R]) -> Result<Self> {
        if rows.len() < 2 {
            return Err(Error::Invalid(format!(
                "normalizer needs at least 2 rows, got {}",
                rows.len()
            )));
        }
        let dim = rows[0].as_ref().len();
        if rows.iter().any(|r| r.as_ref().len() != dim) {
            return Err(Error::Shape("ragged normalizer rows".into()));
        }
        let n = rows.len() as f64;
        let mut mean = vec![0.0; dim];
        for r in rows {
            for (m, v) in mean.iter_mut().zip(r.as_ref()) {
                *m += v;
            }
        }
        mean.iter_mut().for_each(|m| *m /= n);
        let mut var = vec![0.0; dim];
        for r in rows {
            for ((s, v), m) in var.iter_mut().zip(r.as_ref()).zip(&mean) {
                *s += (v - m) * (v - m);
            }
        }
        let std = var
            .into_iter()
            .map(|s| (s / n).sqrt().max(Self::EPSILON))
            .collect();
        Ok(Self {
            mean,
            std,
            epsilon: Self::EPSILON,
        })
    }

    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        x.iter()
            .zip(&self.mean)
            .zip(&self.std)
            .map(|((v, m), s)| (v - m) / s.max(self.epsilon))
            .collect()
    }
}

pub fn fit_normalizer(descriptors: &[&NodeDescriptor]) -> Result<Normalizer> {
    let rows: Vec<&[f64]> = descriptors.iter().map(|d| d.x.as_slice()).collect();
    Normalizer::fit(&rows)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CoverageRow {
    pub radius: f64,
    pub coverage: f64,
    pub duplicate: f64,
    pub avg_nodes: f64,
    pub marginal_gain: f64,
}

/// Radius sweep of POI coverage: fraction of POIs within `R` of at least one
/// node, fraction of covered POIs within `R` of two or more, mean number of
/// covering nodes per covered POI, and the marginal gain of each step
/// relative to what is left to cover at the largest radius.
pub fn coverage_report(graph: &RoadGraph, pois: &[Poi], radii: &[f64]) -> Result<Vec<CoverageRow>> {
    if pois.is_empty() {
        return Err(Error::Empty("coverage report needs POIs"));
    }
    if radii.windows(2).any(|w| w[1] < w[0]) {
        return Err(Error::Invalid("radius grid must be ascending".into()));
    }
    let n = pois.len() as f64;
    let mut raw = Vec::with_capacity(radii.len());
    for &r in radii {
        let counts: Vec<usize> = pois
            .par_iter()
            .map(|p| graph.nodes_within(p.pos, r).len())
            .collect();
        let covered = counts.iter().filter(|&&c| c >= 1).count();
        let dup = counts.iter().filter(|&&c| c >= 2).count();
        let total: usize = counts.iter().sum();
        let frac = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
        raw.push((r, covered as f64 / n, frac(dup, covered), frac(total, covered)));
    }
    let cov_max = raw.last().map_or(0.0, |r| r.1);
    let mut rows = Vec::with_capacity(raw.len());
    for (i, &(radius, coverage, duplicate, avg_nodes)) in raw.iter().enumerate() {
        let marginal_gain = if i == 0 {
            0.0
        } else {
            let prev = raw[i - 1].1;
            let room = cov_max - prev;
            if room > 0.0 {
                (coverage - prev) / room
            } else {
                0.0
            }
        };
        rows.push(CoverageRow {
            radius,
            coverage,
            duplicate,
            avg_nodes,
            marginal_gain,
        });
    }
    Ok(rows)
}

pub fn write_coverage_csv(rows: &[CoverageRow], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::parse(path.display().to_string(), e))?;
    w.write_record(["R", "coverage", "duplicate", "avg_nodes", "marginal_gain"])
        .map_err(|e| Error::parse(path.display().to_string(), e))?;
    for r in rows {
        w.write_record([
            format!("{}", r.radius),
            format!("{:.4}", r.coverage),
            format!("{:.4}", r.duplicate),
            format!("{:.4}", r.avg_nodes),
            format!("{:.4}", r.marginal_gain),
        ])
        .map_err(|e| Error::parse(path.display().to_string(), e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

const FEATURE_MAGIC: &[u8; 4] = b"RNFC";
const FEATURE_VERSION: u32 = 1;

/// Writes the binary feature cache: header `{magic, version, S, |C|,
/// node_count}` then per node `(id, x as f64, packed mask bits, geo as f64)`,
/// all little-endian.
pub fn write_feature_cache(table: &DescriptorTable, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let mut buf = Vec::new();
    buf.extend_from_slice(FEATURE_MAGIC);
    buf.extend_from_slice(&FEATURE_VERSION.to_le_bytes());
    buf.extend_from_slice(&(table.layout.sectors as u32).to_le_bytes());
    buf.extend_from_slice(&(table.layout.categories as u32).to_le_bytes());
    buf.extend_from_slice(&(table.rows.len() as u64).to_le_bytes());
    for row in &table.rows {
        buf.extend_from_slice(&row.node.0.to_le_bytes());
        for v in &row.x {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        let mut bits = vec![0u8; row.mask.len().div_ceil(8)];
        for (i, &m) in row.mask.iter().enumerate() {
            if m {
                bits[i / 8] |= 1 << (i % 8);
            }
        }
        buf.extend_from_slice(&bits);
        for v in &row.geo {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    w.write_all(&buf).map_err(|e| Error::io(path, e))?;
    w.flush().map_err(|e| Error::io(path, e))
}

pub(crate) struct ByteReader<'a> {
    pub bytes: &'a [u8],
    pub pos: usize,
    pub what: &'static str,
}

impl<'a> ByteReader<'a> {
    pub fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::parse(
                self.what,
                format!("truncated at byte {} (need {n} more)", self.pos),
            ));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }
    pub fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
    pub fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
    pub fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
    pub fn f32(&mut self) -> Result<f32> {
        Ok(f32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
    pub fn done(&self) -> bool {
        self.pos == self.bytes.len()
    }
}

pub(crate) fn read_all(path: &Path) -> Result<Vec<u8>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut bytes = Vec::new();
    BufReader::new(file)
        .read_to_end(&mut bytes)
        .map_err(|e| Error::io(path, e))?;
    Ok(bytes)
}

pub fn read_feature_cache(path: impl AsRef<Path>) -> Result<DescriptorTable> {
    let path = path.as_ref();
    let bytes = read_all(path)?;
    let mut r = ByteReader {
        bytes: &bytes,
        pos: 0,
        what: "feature cache",
    };
    if r.take(4)? != FEATURE_MAGIC {
        return Err(Error::parse("feature cache", "bad magic"));
    }
    let version = r.u32()?;
    if version != FEATURE_VERSION {
        return Err(Error::parse("feature cache", format!("unsupported version {version}")));
    }
    let sectors = r.u32()? as usize;
    let cats = r.u32()? as usize;
    let count = r.u64()? as usize;
    let layout = FeatureLayout::new(sectors, cats);
    let dim = layout.dim();
    let mut rows = Vec::with_capacity(count);
    for _ in 0..count {
        let node = NodeId(r.u64()?);
        let x = (0..dim).map(|_| r.f64()).collect::<Result<Vec<_>>>()?;
        let bits = r.take(dim.div_ceil(8))?;
        let mask = (0..dim).map(|i| bits[i / 8] & (1 << (i % 8)) != 0).collect();
        let mut geo = [0.0; GEO_DIM];
        for g in &mut geo {
            *g = r.f64()?;
        }
        rows.push(NodeDescriptor { node, x, mask, geo });
    }
    if !r.done() {
        return Err(Error::parse("feature cache", "trailing bytes"));
    }
    Ok(DescriptorTable { layout, rows })
}
