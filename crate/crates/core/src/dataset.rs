//! Feature assembly: turns an [`Example`] into the dense model inputs.
//!
//! Branch-removal flags act here, at the boundary between cached features and
//! the model, so the rest of the preprocessing is untouched.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::embeddings::StructEmbeddings;
use crate::error::{Error, Result};
use crate::features::{DescriptorTable, Normalizer, GEO_DIM};
use crate::graph::{NodeId, PlanarPoint, RoadGraph};
use crate::projection::{Example, ExampleKey, Scale, StepGeometry};

pub const STEP_DIM: usize = 5;

/// Input branches that can be switched off.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(default)]
pub struct InputFlags {
    pub no_poi: bool,
    /// Zeroes the node geometric-feature difference; step geometry stays.
    pub no_geo: bool,
    pub no_node2vec: bool,
    /// Feeds normalized descriptors instead of their differences.
    pub no_poi_diff: bool,
}

impl InputFlags {
    pub fn validate(&self) -> Result<()> {
        if self.no_poi && self.no_poi_diff {
            return Err(Error::Invalid(
                "no_poi and no_poi_diff contradict: the POI branch is either removed or undifferenced".into(),
            ));
        }
        Ok(())
    }
}

/// Per-node model inputs in dense graph order.
#[derive(Clone, Debug)]
pub struct NodeFeatures {
    pub poi_dim: usize,
    pub struct_dim: usize,
    ids: Vec<NodeId>,
    index: HashMap<NodeId, usize>,
    /// Normalized descriptors, `N x poi_dim`.
    poi: Vec<f64>,
    geo: Vec<[f64; GEO_DIM]>,
    structural: Vec<f64>,
    positions: Vec<PlanarPoint>,
}

impl NodeFeatures {
    pub fn new(
        graph: &RoadGraph,
        table: &DescriptorTable,
        normalizer: &Normalizer,
        embeddings: &StructEmbeddings,
    ) -> Result<Self> {
        let n = graph.node_count();
        if table.rows.len() != n {
            return Err(Error::Shape(format!(
                "descriptor table has {} rows for {n} graph nodes",
                table.rows.len()
            )));
        }
        let poi_dim = table.dim();
        if normalizer.mean.len() != poi_dim {
            return Err(Error::Shape(format!(
                "normalizer width {} differs from descriptor width {poi_dim}",
                normalizer.mean.len()
            )));
        }
        let mut poi = Vec::with_capacity(n * poi_dim);
        let mut geo = Vec::with_capacity(n);
        let mut structural = Vec::with_capacity(n * embeddings.dim);
        for (ix, row) in table.rows.iter().enumerate() {
            if row.node != graph.id(ix) {
                return Err(Error::Shape(format!("descriptor row {ix} is node {} not {}", row.node, graph.id(ix))));
            }
            poi.extend(normalizer.apply(&row.x));
            geo.push(row.geo);
            let e = embeddings.get(row.node).ok_or(Error::MissingEmbedding(row.node))?;
            structural.extend(e.iter().map(|v| *v as f64));
        }
        Ok(Self {
            poi_dim,
            struct_dim: embeddings.dim,
            ids: graph.ids().to_vec(),
            index: graph.ids().iter().enumerate().map(|(i, id)| (*id, i)).collect(),
            poi,
            geo,
            structural,
            positions: (0..n).map(|i| graph.position_at(i)).collect(),
        })
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    fn ix(&self, id: NodeId) -> Result<usize> {
        self.index.get(&id).copied().ok_or(Error::UnknownNode(id))
    }

    pub fn poi(&self, id: NodeId) -> Result<&[f64]> {
        let i = self.ix(id)?;
        Ok(&self.poi[i * self.poi_dim..(i + 1) * self.poi_dim])
    }

    pub fn geo(&self, id: NodeId) -> Result<[f64; GEO_DIM]> {
        Ok(self.geo[self.ix(id)?])
    }

    pub fn structural(&self, id: NodeId) -> Result<&[f64]> {
        let i = self.ix(id)?;
        Ok(&self.structural[i * self.struct_dim..(i + 1) * self.struct_dim])
    }

    pub fn position(&self, id: NodeId) -> Result<PlanarPoint> {
        Ok(self.positions[self.ix(id)?])
    }

    /// Replaces the normalized descriptor rows, keeping everything else.
    pub fn with_poi_rows(&self, table: &DescriptorTable, normalizer: &Normalizer) -> Result<Self> {
        let mut out = self.clone();
        if table.rows.len() != self.len() || table.dim() != self.poi_dim {
            return Err(Error::Shape("replacement descriptor table shape".into()));
        }
        out.poi = table.rows.iter().flat_map(|r| normalizer.apply(&r.x)).collect();
        Ok(out)
    }
}

/// Dense inputs for one example. History rows come first, then candidates.
#[derive(Clone, Debug, PartialEq)]
pub struct PreparedExample {
    pub key: ExampleKey,
    pub t: usize,
    pub c: usize,
    pub in_dim: usize,
    pub struct_dim: usize,
    /// `T x in_dim`: `[Δpoi ‖ Δg ‖ step geometry]`.
    pub history: Vec<f64>,
    /// `C x in_dim`, relative to `v_T`.
    pub candidates: Vec<f64>,
    /// `(T + C) x struct_dim`.
    pub structural: Vec<f64>,
    pub positions: Vec<PlanarPoint>,
    pub candidate_ids: Vec<NodeId>,
    pub label: usize,
    /// Unit vector from `v_T` to the label.
    pub direction: [f64; 2],
}

impl PreparedExample {
    pub fn n(&self) -> usize {
        self.t + self.c
    }

    pub fn scale(&self) -> Scale {
        self.key.scale
    }
}

fn push_row(
    out: &mut Vec<f64>,
    poi: &[f64],
    prev_poi: Option<&[f64]>,
    geo: [f64; GEO_DIM],
    prev_geo: Option<[f64; GEO_DIM]>,
    step: &StepGeometry,
    flags: &InputFlags,
) {
    if flags.no_poi {
        out.extend(std::iter::repeat_n(0.0, poi.len()));
    } else if flags.no_poi_diff {
        out.extend_from_slice(poi);
    } else {
        match prev_poi {
            Some(p) => out.extend(poi.iter().zip(p).map(|(a, b)| a - b)),
            None => out.extend(std::iter::repeat_n(0.0, poi.len())),
        }
    }
    match (prev_geo, flags.no_geo) {
        (Some(p), false) => out.extend(geo.iter().zip(&p).map(|(a, b)| a - b)),
        _ => out.extend([0.0; GEO_DIM]),
    }
    out.extend(step.features());
}

/// Assembles model inputs for `ex`.
pub fn prepare(ex: &Example, features: &NodeFeatures, flags: &InputFlags) -> Result<PreparedExample> {
    let t = ex.context.len();
    let c = ex.candidates.len();
    if t == 0 || c == 0 {
        return Err(Error::Empty("example context or candidate set"));
    }
    let in_dim = features.poi_dim + GEO_DIM + STEP_DIM;
    let mut history = Vec::with_capacity(t * in_dim);
    for (i, id) in ex.context.iter().enumerate() {
        let (prev_poi, prev_geo) = if i == 0 {
            (None, None)
        } else {
            (Some(features.poi(ex.context[i - 1])?), Some(features.geo(ex.context[i - 1])?))
        };
        let step = if i == 0 { StepGeometry::default() } else { ex.steps[i] };
        push_row(&mut history, features.poi(*id)?, prev_poi, features.geo(*id)?, prev_geo, &step, flags);
    }
    let last = ex.last();
    let mut candidates = Vec::with_capacity(c * in_dim);
    for (j, id) in ex.candidates.iter().enumerate() {
        push_row(
            &mut candidates,
            features.poi(*id)?,
            Some(features.poi(last)?),
            features.geo(*id)?,
            Some(features.geo(last)?),
            &ex.candidate_geometry[j],
            flags,
        );
    }
    let mut structural = Vec::with_capacity((t + c) * features.struct_dim);
    let mut positions = Vec::with_capacity(t + c);
    for id in ex.context.iter().chain(&ex.candidates) {
        if flags.no_node2vec {
            structural.extend(std::iter::repeat_n(0.0, features.struct_dim));
        } else {
            structural.extend_from_slice(features.structural(*id)?);
        }
        positions.push(features.position(*id)?);
    }
    let label = ex
        .candidates
        .iter()
        .position(|u| *u == ex.label)
        .ok_or(Error::LabelNotCandidate(ex.label))?;
    let g = &ex.candidate_geometry[label];
    if g.length <= 0.0 {
        return Err(Error::UndefinedBearing);
    }
    let direction = [g.dx / g.length, g.dy / g.length];
    if history.iter().chain(&candidates).chain(&structural).any(|v| !v.is_finite()) {
        return Err(Error::NonFinite(format!("inputs of example {:?}", ex.key)));
    }
    Ok(PreparedExample {
        key: ex.key,
        t,
        c,
        in_dim,
        struct_dim: features.struct_dim,
        history,
        candidates,
        structural,
        positions,
        candidate_ids: ex.candidates.clone(),
        label,
        direction,
    })
}

pub fn prepare_all(examples: &[Example], features: &NodeFeatures, flags: &InputFlags) -> Result<Vec<PreparedExample>> {
    use rayon::prelude::*;
    examples.par_iter().map(|e| prepare(e, features, flags)).collect()
}
