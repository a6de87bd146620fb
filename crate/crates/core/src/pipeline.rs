//! Run configuration and end-to-end experiment drivers.

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::dataset::{prepare_all, InputFlags, NodeFeatures, PreparedExample};
use crate::embeddings::{embed_graph, read_embeddings, write_embeddings, EmbeddingParams, StructEmbeddings};
use crate::error::{Error, Result};
use crate::evaluation::{
    perturb_coordinates, perturb_poi, report, score_examples, write_robustness_csv, CohortMetrics, MetricsReport,
    PerturbationKind, RobustnessRow,
};
use crate::features::{
    build_descriptors, coverage_report, read_feature_cache, write_coverage_csv, write_feature_cache, Categories,
    CoverageRow, DescriptorTable, FeatureLayout, FeatureParams, Normalizer,
};
use crate::graph::{assign_pois, load_graph, load_pois, save_graph, save_pois, NodeId, Poi, RoadGraph};
use crate::model::{load_checkpoint, save_checkpoint, Model, ModelConfig};
use crate::projection::{
    build_example, build_examples, load_trajectories, project_streams, read_segments, save_trajectories,
    segment_stream, write_segments, Example, GpsStream, NodeSequence, ProjectionParams, Segment,
};
use crate::rng::derive_seed;
use crate::testkit::{gen_city, simulate_walkers, CitySpec, Simulation, SynthCity, WalkerPolicy};
use crate::training::{split_dataset, train, write_train_log, EpochLog, Split, TrainOutcome, TrainParams};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Paths {
    pub graph: PathBuf,
    pub pois: PathBuf,
    pub trajectories: PathBuf,
    /// Caches, checkpoints and reports.
    pub work_dir: PathBuf,
}

impl Default for Paths {
    fn default() -> Self {
        Self {
            graph: "data/graph.json".into(),
            pois: "data/pois.csv".into(),
            trajectories: "data/trajectories.csv".into(),
            work_dir: "out".into(),
        }
    }
}

impl Paths {
    pub fn work(&self, file: &str) -> PathBuf {
        self.work_dir.join(file)
    }
}

/// File names inside the work directory.
pub mod files {
    pub const GRAPH: &str = "graph.json";
    pub const ASSIGNMENT: &str = "poi_assignment.csv";
    pub const EMBEDDINGS: &str = "embeddings.bin";
    pub const FEATURES: &str = "features.bin";
    pub const SEGMENTS: &str = "segments.tsv";
    /// Best-validation weights; `eval` and `robustness` read this one.
    pub const CHECKPOINT: &str = "model.ckpt";
    pub const FINAL_CHECKPOINT: &str = "model_final.ckpt";
    pub const TRAIN_LOG: &str = "train_log.csv";
    pub const METRICS_JSON: &str = "metrics.json";
    pub const METRICS_CSV: &str = "metrics.csv";
    pub const ABLATION: &str = "ablation.csv";
    pub const SWEEP: &str = "sweep.csv";
    pub const COVERAGE: &str = "coverage.csv";
    pub const PROVENANCE: &str = "provenance.json";

    pub fn robustness(kind: &str) -> String {
        format!("robustness_{kind}.csv")
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthParams {
    pub city: CitySpec,
    pub policy: WalkerPolicy,
    pub walkers: usize,
    pub steps: usize,
}

impl Default for SynthParams {
    fn default() -> Self {
        Self {
            city: CitySpec::default(),
            policy: WalkerPolicy::default(),
            walkers: 100,
            steps: 200,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalParams {
    pub bootstrap_resamples: usize,
    pub robustness_trials: usize,
    pub coordinate_levels: Vec<f64>,
    pub poi_levels: Vec<f64>,
    pub coverage_radii: Vec<f64>,
    pub sector_grid: Vec<usize>,
    pub radius_grid: Vec<f64>,
    /// `(L_std, L_rel)` pairs.
    pub layer_splits: Vec<(usize, usize)>,
    pub sweep_layers: Vec<usize>,
    pub sweep_heads: Vec<usize>,
}

impl Default for EvalParams {
    fn default() -> Self {
        Self {
            bootstrap_resamples: 10_000,
            robustness_trials: 10,
            coordinate_levels: PerturbationKind::Coordinate.default_levels(),
            poi_levels: PerturbationKind::Poi.default_levels(),
            coverage_radii: vec![50.0, 100.0, 150.0, 200.0, 250.0, 300.0],
            sector_grid: vec![2, 4, 8, 16],
            radius_grid: vec![50.0, 100.0, 150.0, 200.0],
            layer_splits: vec![(4, 0), (3, 1), (2, 2), (1, 3), (0, 4)],
            sweep_layers: vec![1, 2, 4, 6, 8],
            sweep_heads: vec![2, 4, 8, 16],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub seed: u64,
    pub paths: Paths,
    pub categories: Categories,
    pub features: FeatureParams,
    pub projection: ProjectionParams,
    pub embedding: EmbeddingParams,
    pub model: ModelConfig,
    pub training: TrainParams,
    pub split: [f64; 3],
    pub evaluation: EvalParams,
    pub synth: SynthParams,
}

impl Default for RunConfig {
    fn default() -> Self {
        let mut cfg = Self {
            seed: 42,
            paths: Paths::default(),
            categories: Categories::default(),
            features: FeatureParams::default(),
            projection: ProjectionParams::default(),
            embedding: EmbeddingParams::default(),
            model: ModelConfig::default(),
            training: TrainParams::default(),
            split: [0.8, 0.1, 0.1],
            evaluation: EvalParams::default(),
            synth: SynthParams::default(),
        };
        cfg.sync_dims();
        cfg
    }
}

impl RunConfig {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg: RunConfig =
            serde_json::from_str(&text).map_err(|e| Error::parse(path.display().to_string(), e))?;
        cfg.sync_dims();
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let text = serde_json::to_string_pretty(self).map_err(|e| Error::parse("config", e))?;
        std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
    }

    /// Derives model input widths from the feature and embedding settings.
    pub fn sync_dims(&mut self) {
        self.model.poi_dim = FeatureLayout::new(self.features.sectors, self.categories.len()).dim();
        self.model.d_s = self.embedding.dim;
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.projection.windows.validate()?;
        if self.categories.is_empty() {
            return Err(Error::Invalid("category list is empty".into()));
        }
        if !(self.features.radius > 0.0) || self.features.sectors == 0 {
            return Err(Error::Invalid("feature radius and sector count must be positive".into()));
        }
        if self.split.iter().any(|r| !(*r >= 0.0)) || (self.split.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(Error::Invalid(format!("split ratios {:?} must be non-negative and sum to 1", self.split)));
        }
        if self.training.epochs == 0 || self.training.batch_size == 0 {
            return Err(Error::Invalid("epochs and batch size must be positive".into()));
        }
        Ok(())
    }

    /// SHA-256 over the configuration with file locations removed, so the
    /// same experiment hashes identically wherever it runs.
    pub fn hash(&self) -> String {
        let mut v = serde_json::to_value(self).expect("config serializes");
        if let Some(o) = v.as_object_mut() {
            o.remove("paths");
        }
        let bytes = serde_json::to_vec(&v).expect("config serializes");
        hex::encode(Sha256::digest(&bytes))
    }
}

/// Descriptor table, its clean normalizer and the assembled node inputs.
#[derive(Clone, Debug)]
pub struct FeatureSet {
    pub params: FeatureParams,
    pub table: DescriptorTable,
    pub normalizer: Normalizer,
    pub nodes: NodeFeatures,
}

impl FeatureSet {
    pub fn from_parts(
        graph: &RoadGraph,
        params: FeatureParams,
        table: DescriptorTable,
        normalizer: Normalizer,
        embeddings: &StructEmbeddings,
    ) -> Result<Self> {
        let nodes = NodeFeatures::new(graph, &table, &normalizer, embeddings)?;
        Ok(Self {
            params,
            table,
            normalizer,
            nodes,
        })
    }

    /// Builds descriptors for every node; the normalizer is fit on the rows
    /// of `fit_nodes` only.
    pub fn build(
        graph: &RoadGraph,
        pois: &[Poi],
        categories: &Categories,
        params: FeatureParams,
        embeddings: &StructEmbeddings,
        fit_nodes: &BTreeSet<NodeId>,
    ) -> Result<Self> {
        let table = build_descriptors(graph, pois, &params, categories)?;
        let normalizer = fit_on(&table, fit_nodes)?;
        Self::from_parts(graph, params, table, normalizer, embeddings)
    }
}

fn fit_on(table: &DescriptorTable, nodes: &BTreeSet<NodeId>) -> Result<Normalizer> {
    let rows: Vec<&[f64]> = table
        .rows
        .iter()
        .filter(|r| nodes.contains(&r.node))
        .map(|r| r.x.as_slice())
        .collect();
    Normalizer::fit(&rows)
}

/// Everything an experiment needs besides model settings.
#[derive(Clone, Debug)]
pub struct Corpus {
    pub graph: RoadGraph,
    pub pois: Vec<Poi>,
    pub categories: Categories,
    pub embeddings: StructEmbeddings,
    pub examples: Vec<Example>,
    pub split: Split,
}

#[derive(Clone, Debug)]
pub struct PreparedSplit {
    pub train: Vec<PreparedExample>,
    pub val: Vec<PreparedExample>,
    pub test: Vec<PreparedExample>,
}

/// Projects and segments streams in canonical order.
pub fn segments_from_streams(streams: &[GpsStream], graph: &RoadGraph, params: &ProjectionParams) -> Vec<Segment> {
    project_streams(streams, graph, params)
        .iter()
        .flat_map(|s| segment_stream(s, &params.windows))
        .collect()
}

impl Corpus {
    pub fn new(
        graph: RoadGraph,
        pois: Vec<Poi>,
        categories: Categories,
        embeddings: StructEmbeddings,
        examples: Vec<Example>,
        ratios: [f64; 3],
        seed: u64,
    ) -> Result<Self> {
        let split = split_dataset(examples.len(), ratios, seed)?;
        Ok(Self {
            graph,
            pois,
            categories,
            embeddings,
            examples,
            split,
        })
    }

    /// Every node seen by a training example, as history or candidate.
    pub fn train_nodes(&self) -> BTreeSet<NodeId> {
        self.split
            .train
            .iter()
            .flat_map(|&i| {
                let e = &self.examples[i];
                e.context.iter().chain(&e.candidates).copied()
            })
            .collect()
    }

    pub fn features(&self, params: FeatureParams) -> Result<FeatureSet> {
        FeatureSet::build(
            &self.graph,
            &self.pois,
            &self.categories,
            params,
            &self.embeddings,
            &self.train_nodes(),
        )
    }

    pub fn subset(&self, ix: &[usize]) -> Vec<Example> {
        ix.iter().map(|&i| self.examples[i].clone()).collect()
    }

    pub fn prepare(&self, nodes: &NodeFeatures, flags: &InputFlags) -> Result<PreparedSplit> {
        Ok(PreparedSplit {
            train: prepare_all(&self.subset(&self.split.train), nodes, flags)?,
            val: prepare_all(&self.subset(&self.split.val), nodes, flags)?,
            test: prepare_all(&self.subset(&self.split.test), nodes, flags)?,
        })
    }
}

/// Initializes and trains a model with seeds derived from `seed`.
pub fn fit(
    cfg: &ModelConfig,
    tp: &TrainParams,
    data: &PreparedSplit,
    seed: u64,
    on_epoch: impl FnMut(&EpochLog),
) -> Result<TrainOutcome> {
    let model = Model::init(cfg.clone(), derive_seed(seed, &[0x1]))?;
    train(model, &data.train, &data.val, tp, derive_seed(seed, &[0x2]), on_epoch)
}

/// The metrics JSON document.
pub fn metrics_json(report: &MetricsReport, config_hash: &str, split: &str) -> serde_json::Value {
    let cohort = |m: &CohortMetrics| {
        serde_json::json!({"acc1": m.acc1, "acc3": m.acc3, "acc5": m.acc5, "mrr": m.mrr})
    };
    let mut cohorts = serde_json::Map::new();
    for (k, m) in &report.cohorts {
        cohorts.insert(k.clone(), cohort(m));
    }
    cohorts.insert("all".into(), cohort(&report.overall));
    serde_json::json!({
        "config_hash": config_hash,
        "split": split,
        "cohorts": cohorts,
        "mean_auc": report.mean_auc,
        "n": report.n,
    })
}

/// `cohort,acc1,acc3,acc5,mrr,n`, one row per cohort then `all`.
pub fn metrics_table_csv(report: &MetricsReport) -> String {
    let mut s = String::from("cohort,acc1,acc3,acc5,mrr,n\n");
    let mut row = |k: &str, m: &CohortMetrics| {
        s.push_str(&format!("{k},{:.4},{:.4},{:.4},{:.4},{}\n", m.acc1, m.acc3, m.acc5, m.mrr, m.n));
    };
    for (k, m) in &report.cohorts {
        row(k, m);
    }
    row("all", &report.overall);
    s
}

/// One ablation configuration.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Variant {
    pub name: String,
    pub flags: InputFlags,
    pub sectors: usize,
    pub radius: f64,
    pub l_std: usize,
    pub l_rel: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AblationGrid {
    /// Input-branch removal.
    Branches,
    /// `(L_std, L_rel)` splits.
    Layers,
    Sectors,
    Radius,
}

impl std::str::FromStr for AblationGrid {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "branches" => Ok(Self::Branches),
            "layers" => Ok(Self::Layers),
            "sectors" => Ok(Self::Sectors),
            "radius" => Ok(Self::Radius),
            _ => Err(Error::parse("ablation grid", format!("unknown grid {s:?}"))),
        }
    }
}

pub fn variants(cfg: &RunConfig, grid: AblationGrid) -> Vec<Variant> {
    let base = Variant {
        name: "full".into(),
        flags: cfg.model.inputs,
        sectors: cfg.features.sectors,
        radius: cfg.features.radius,
        l_std: cfg.model.l_std,
        l_rel: cfg.model.l_rel,
    };
    let with = |name: &str, f: &dyn Fn(&mut Variant)| {
        let mut v = base.clone();
        v.name = name.to_string();
        f(&mut v);
        v
    };
    match grid {
        AblationGrid::Branches => vec![
            base.clone(),
            with("no_poi", &|v| v.flags.no_poi = true),
            with("no_geo", &|v| v.flags.no_geo = true),
            with("no_node2vec", &|v| v.flags.no_node2vec = true),
            with("no_poi_diff", &|v| v.flags.no_poi_diff = true),
            with("step_geometry_only", &|v| {
                v.flags.no_poi = true;
                v.flags.no_geo = true;
                v.flags.no_node2vec = true;
            }),
        ],
        AblationGrid::Layers => cfg
            .evaluation
            .layer_splits
            .iter()
            .map(|&(s, r)| {
                with(&format!("layers_{s}_{r}"), &|v| {
                    v.l_std = s;
                    v.l_rel = r;
                })
            })
            .collect(),
        AblationGrid::Sectors => cfg
            .evaluation
            .sector_grid
            .iter()
            .map(|&s| with(&format!("sectors_{s}"), &|v| v.sectors = s))
            .collect(),
        AblationGrid::Radius => cfg
            .evaluation
            .radius_grid
            .iter()
            .map(|&r| with(&format!("radius_{r}"), &|v| v.radius = r))
            .collect(),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub variant: Variant,
    pub report: MetricsReport,
}

/// Trains every variant from scratch with the shared seed and reports
/// test metrics.
pub fn run_ablation(cfg: &RunConfig, corpus: &Corpus, variants: &[Variant]) -> Result<Vec<AblationRow>> {
    let mut cache: BTreeMap<(usize, u64), FeatureSet> = BTreeMap::new();
    let mut rows = Vec::with_capacity(variants.len());
    for v in variants {
        v.flags.validate()?;
        let key = (v.sectors, v.radius.to_bits());
        if !cache.contains_key(&key) {
            let params = FeatureParams {
                radius: v.radius,
                sectors: v.sectors,
            };
            cache.insert(key, corpus.features(params)?);
        }
        let fs = &cache[&key];
        let data = corpus.prepare(&fs.nodes, &v.flags)?;
        let mut mc = cfg.model.clone();
        mc.inputs = v.flags;
        mc.l_std = v.l_std;
        mc.l_rel = v.l_rel;
        mc.poi_dim = fs.table.dim();
        let out = fit(&mc, &cfg.training, &data, cfg.seed, |_| {})?;
        let report = report(&score_examples(&out.model, &data.test)?)?;
        log::info!("ablation {}: acc@1 {:.4}", v.name, report.overall.acc1);
        rows.push(AblationRow {
            variant: v.clone(),
            report,
        });
    }
    Ok(rows)
}

pub fn write_ablation_csv(rows: &[AblationRow], path: impl AsRef<Path>) -> Result<()> {
    let mut s = String::from(
        "variant,no_poi,no_geo,no_node2vec,no_poi_diff,sectors,radius,l_std,l_rel,acc1,acc3,acc5,mrr,mean_auc,n\n",
    );
    for r in rows {
        let (v, m) = (&r.variant, &r.report);
        s.push_str(&format!(
            "{},{},{},{},{},{},{},{},{},{},{},{},{},{},{}\n",
            v.name,
            v.flags.no_poi,
            v.flags.no_geo,
            v.flags.no_node2vec,
            v.flags.no_poi_diff,
            v.sectors,
            v.radius,
            v.l_std,
            v.l_rel,
            m.overall.acc1,
            m.overall.acc3,
            m.overall.acc5,
            m.overall.mrr,
            m.mean_auc.map_or(String::new(), |a| a.to_string()),
            m.n
        ));
    }
    let path = path.as_ref();
    std::fs::write(path, s).map_err(|e| Error::io(path, e))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub layers: usize,
    pub heads: usize,
    pub val_acc1: f64,
}

/// One training run per `(L, H)`; the last layer is relation-aware.
pub fn sweep_lh(
    cfg: &RunConfig,
    corpus: &Corpus,
    features: &FeatureSet,
    layers: &[usize],
    heads: &[usize],
) -> Result<Vec<SweepRow>> {
    for &h in heads {
        if h == 0 || cfg.model.d % h != 0 {
            return Err(Error::Invalid(format!("d = {} is not divisible by H = {h}", cfg.model.d)));
        }
    }
    if layers.contains(&0) {
        return Err(Error::Invalid("sweep depths must be positive".into()));
    }
    let data = corpus.prepare(&features.nodes, &cfg.model.inputs)?;
    let mut rows = Vec::new();
    for &l in layers {
        for &h in heads {
            let mut mc = cfg.model.clone();
            mc.l_rel = l.min(1);
            mc.l_std = l - mc.l_rel;
            mc.heads = h;
            let out = fit(&mc, &cfg.training, &data, cfg.seed, |_| {})?;
            let val_acc1 = out.log.last().map_or(0.0, |e| e.val_acc1);
            log::info!("sweep L={l} H={h}: val acc@1 {val_acc1:.4}");
            rows.push(SweepRow {
                layers: l,
                heads: h,
                val_acc1,
            });
        }
    }
    Ok(rows)
}

pub fn write_sweep_csv(rows: &[SweepRow], path: impl AsRef<Path>) -> Result<()> {
    let mut s = String::from("L,H,val_acc1\n");
    for r in rows {
        s.push_str(&format!("{},{},{}\n", r.layers, r.heads, r.val_acc1));
    }
    let path = path.as_ref();
    std::fs::write(path, s).map_err(|e| Error::io(path, e))
}

/// Cuts the time span of a clean segment out of a perturbed projection of
/// the same stream. The label is the perturbed visit registered closest to
/// the clean label time; history reaches back to the visit closest to the
/// clean start time.
pub fn recut_segment(clean: &Segment, pieces: &[&NodeSequence]) -> Option<Segment> {
    let (t0, t1) = (*clean.times.first()?, *clean.times.last()?);
    let (pi, li, _) = pieces
        .iter()
        .enumerate()
        .flat_map(|(pi, p)| p.times.iter().enumerate().map(move |(i, &t)| (pi, i, (t - t1).abs())))
        .min_by(|a, b| a.2.total_cmp(&b.2))?;
    let p = pieces[pi];
    let si = (0..=li).min_by(|&a, &b| (p.times[a] - t0).abs().total_cmp(&(p.times[b] - t0).abs()))?;
    Some(Segment {
        nodes: p.nodes[si..=li].to_vec(),
        times: p.times[si..=li].to_vec(),
        scale: clean.scale,
        stream: clean.stream,
        piece: clean.piece,
        index: clean.index,
    })
}

/// Perturbation trials against a trained model. Coordinate noise re-projects
/// every stream and re-cuts each clean test segment by time; POI noise
/// re-scores the clean test examples under perturbed descriptors. Test
/// examples that no longer yield a valid example are left out of that trial.
#[allow(clippy::too_many_arguments)]
pub fn run_robustness(
    cfg: &RunConfig,
    corpus: &Corpus,
    streams: &[GpsStream],
    features: &FeatureSet,
    model: &Model<f32>,
    kind: PerturbationKind,
    levels: &[f64],
    trials: usize,
) -> Result<Vec<RobustnessRow>> {
    if trials == 0 {
        return Err(Error::Invalid("at least one trial is required".into()));
    }
    if levels.windows(2).any(|w| w[1] < w[0]) || levels.iter().any(|l| !(*l >= 0.0)) {
        return Err(Error::Invalid(format!("levels {levels:?} must be ascending and non-negative")));
    }
    let graph = &corpus.graph;
    let flags = &model.config.inputs;
    let clean: Vec<(Segment, Example)> = segments_from_streams(streams, graph, &cfg.projection)
        .into_iter()
        .filter_map(|s| build_example(&s, graph).map(|e| (s, e)))
        .collect();
    if clean.len() != corpus.examples.len()
        || clean.iter().zip(&corpus.examples).any(|((_, a), b)| a.context != b.context || a.label != b.label)
    {
        return Err(Error::Invalid(
            "trajectories do not reproduce the example set; rerun `roadnext project` with the current configuration"
                .into(),
        ));
    }
    let test: Vec<&(Segment, Example)> = corpus.split.test.iter().map(|&i| &clean[i]).collect();
    let clean_test: Vec<Example> = test.iter().map(|(_, e)| e.clone()).collect();
    let mut rows = Vec::new();
    for (li, &level) in levels.iter().enumerate() {
        for trial in 0..trials {
            let seed = derive_seed(cfg.seed, &[0x0b05, kind as u64, li as u64, trial as u64]);
            let prepared = match kind {
                PerturbationKind::Coordinate => {
                    let noisy = project_streams(&perturb_coordinates(streams, level, seed), graph, &cfg.projection);
                    let mut by_stream: Vec<Vec<&NodeSequence>> = vec![Vec::new(); streams.len()];
                    for seq in &noisy {
                        by_stream[seq.stream].push(seq);
                    }
                    let examples: Vec<Example> = test
                        .iter()
                        .filter_map(|(seg, _)| recut_segment(seg, &by_stream[seg.stream]))
                        .filter_map(|seg| build_example(&seg, graph))
                        .collect();
                    if examples.len() < test.len() {
                        log::debug!(
                            "coordinate level {level} trial {trial}: {} of {} test examples survive",
                            examples.len(),
                            test.len()
                        );
                    }
                    prepare_all(&examples, &features.nodes, flags)?
                }
                PerturbationKind::Poi => {
                    let table = perturb_poi(&features.table, level, seed);
                    let nodes = features.nodes.with_poi_rows(&table, &features.normalizer)?;
                    prepare_all(&clean_test, &nodes, flags)?
                }
            };
            let m = if prepared.is_empty() {
                log::warn!("{} level {level} trial {trial}: no test example survived", kind.name());
                CohortMetrics {
                    acc1: f64::NAN,
                    acc3: f64::NAN,
                    acc5: f64::NAN,
                    mrr: f64::NAN,
                    n: 0,
                }
            } else {
                report(&score_examples(model, &prepared)?)?.overall
            };
            rows.push(RobustnessRow {
                kind,
                level,
                trial,
                acc1: m.acc1,
                acc3: m.acc3,
                acc5: m.acc5,
                mrr: m.mrr,
            });
        }
    }
    Ok(rows)
}

/// Records `artifact -> config hash` in the work directory's provenance file.
pub fn record_provenance(work_dir: &Path, artifact: &str, hash: &str) -> Result<()> {
    let path = work_dir.join(files::PROVENANCE);
    let mut map: BTreeMap<String, String> = match std::fs::read_to_string(&path) {
        Ok(text) => serde_json::from_str(&text).map_err(|e| Error::parse(path.display().to_string(), e))?,
        Err(_) => BTreeMap::new(),
    };
    map.insert(artifact.to_string(), hash.to_string());
    let text = serde_json::to_string_pretty(&map).map_err(|e| Error::parse("provenance", e))?;
    std::fs::write(&path, text + "\n").map_err(|e| Error::io(&path, e))
}

fn require(path: &Path, producer: &'static str) -> Result<()> {
    if path.exists() {
        Ok(())
    } else {
        Err(Error::MissingArtifact {
            path: path.to_path_buf(),
            producer,
        })
    }
}

fn create_parent(path: &Path) -> Result<()> {
    match path.parent() {
        Some(dir) if !dir.as_os_str().is_empty() => std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e)),
        _ => Ok(()),
    }
}

fn work_dir(cfg: &RunConfig) -> Result<&Path> {
    let dir = cfg.paths.work_dir.as_path();
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    Ok(dir)
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Generates a synthetic city and walker streams at the configured input paths.
pub fn stage_synth(cfg: &RunConfig) -> Result<()> {
    let city = gen_city(&cfg.synth.city, derive_seed(cfg.seed, &[0x5e01]))?;
    let sim = simulate_walkers(
        &city,
        &cfg.synth.policy,
        cfg.synth.walkers,
        cfg.synth.steps,
        derive_seed(cfg.seed, &[0x5e02]),
    )?;
    let origin = city.graph.origin();
    for p in [&cfg.paths.graph, &cfg.paths.pois, &cfg.paths.trajectories] {
        create_parent(p)?;
    }
    save_graph(&city.graph, &cfg.paths.graph)?;
    save_pois(&city.pois, &city.categories, origin, &cfg.paths.pois)?;
    save_trajectories(&sim.streams, origin, &cfg.paths.trajectories)
}

/// In-memory equivalent of `synth` through `project`, with the same seeds.
pub fn synthetic_corpus(cfg: &RunConfig) -> Result<(SynthCity, Simulation, Corpus)> {
    let city = gen_city(&cfg.synth.city, derive_seed(cfg.seed, &[0x5e01]))?;
    let sim = simulate_walkers(
        &city,
        &cfg.synth.policy,
        cfg.synth.walkers,
        cfg.synth.steps,
        derive_seed(cfg.seed, &[0x5e02]),
    )?;
    let embeddings = embed_graph(&city.graph, &cfg.embedding, derive_seed(cfg.seed, &[0xe3b]))?;
    let segments = segments_from_streams(&sim.streams, &city.graph, &cfg.projection);
    let examples = build_examples(&segments, &city.graph);
    let corpus = Corpus::new(
        city.graph.clone(),
        city.pois.clone(),
        city.categories.clone(),
        embeddings,
        examples,
        cfg.split,
        cfg.seed,
    )?;
    Ok((city, sim, corpus))
}

fn work_graph(cfg: &RunConfig) -> Result<RoadGraph> {
    let path = cfg.paths.work(files::GRAPH);
    require(&path, "build-graph")?;
    load_graph(path)
}

fn input_pois(cfg: &RunConfig, graph: &RoadGraph) -> Result<Vec<Poi>> {
    require(&cfg.paths.pois, "synth")?;
    load_pois(&cfg.paths.pois, &cfg.categories, graph.origin())
}

/// Validates the input graph and POIs; writes the graph and per-node POI
/// counts into the work directory.
pub fn stage_build_graph(cfg: &RunConfig) -> Result<()> {
    require(&cfg.paths.graph, "synth")?;
    let graph = load_graph(&cfg.paths.graph)?;
    let pois = input_pois(cfg, &graph)?;
    let dir = work_dir(cfg)?;
    save_graph(&graph, dir.join(files::GRAPH))?;
    let mut s = String::from("node,category,count\n");
    for (node, list) in assign_pois(&graph, &pois) {
        let mut counts = BTreeMap::<usize, usize>::new();
        for p in &list {
            *counts.entry(p.category).or_default() += 1;
        }
        for (c, n) in counts {
            s.push_str(&format!("{node},{},{n}\n", cfg.categories.name(c)));
        }
    }
    write_text(&dir.join(files::ASSIGNMENT), &s)?;
    record_provenance(dir, files::GRAPH, &cfg.hash())
}

pub fn stage_embed(cfg: &RunConfig) -> Result<()> {
    let graph = work_graph(cfg)?;
    let emb = embed_graph(&graph, &cfg.embedding, derive_seed(cfg.seed, &[0xe3b]))?;
    let dir = work_dir(cfg)?;
    write_embeddings(&emb, dir.join(files::EMBEDDINGS))?;
    record_provenance(dir, files::EMBEDDINGS, &cfg.hash())
}

pub fn stage_featurize(cfg: &RunConfig) -> Result<()> {
    let graph = work_graph(cfg)?;
    let pois = input_pois(cfg, &graph)?;
    let table = build_descriptors(&graph, &pois, &cfg.features, &cfg.categories)?;
    let dir = work_dir(cfg)?;
    write_feature_cache(&table, dir.join(files::FEATURES))?;
    record_provenance(dir, files::FEATURES, &cfg.hash())
}

fn input_streams(cfg: &RunConfig, graph: &RoadGraph) -> Result<Vec<GpsStream>> {
    require(&cfg.paths.trajectories, "synth")?;
    load_trajectories(&cfg.paths.trajectories, graph.origin())
}

/// Projects trajectories and writes the segment cache; returns the segment count.
pub fn stage_project(cfg: &RunConfig) -> Result<usize> {
    let graph = work_graph(cfg)?;
    let streams = input_streams(cfg, &graph)?;
    let segments = segments_from_streams(&streams, &graph, &cfg.projection);
    let dir = work_dir(cfg)?;
    write_segments(&segments, dir.join(files::SEGMENTS))?;
    record_provenance(dir, files::SEGMENTS, &cfg.hash())?;
    Ok(segments.len())
}

/// Loads every cached artifact a training or evaluation stage needs.
pub fn load_corpus(cfg: &RunConfig) -> Result<(Corpus, FeatureSet)> {
    let graph = work_graph(cfg)?;
    let pois = input_pois(cfg, &graph)?;
    let emb_path = cfg.paths.work(files::EMBEDDINGS);
    require(&emb_path, "embed")?;
    let feat_path = cfg.paths.work(files::FEATURES);
    require(&feat_path, "featurize")?;
    let seg_path = cfg.paths.work(files::SEGMENTS);
    require(&seg_path, "project")?;
    let embeddings = read_embeddings(emb_path)?;
    let table = read_feature_cache(&feat_path)?;
    if table.dim() != cfg.model.poi_dim {
        return Err(Error::Invalid(format!(
            "{} has descriptor width {} but the configuration expects {}; rerun `roadnext featurize`",
            feat_path.display(),
            table.dim(),
            cfg.model.poi_dim
        )));
    }
    let examples = build_examples(&read_segments(seg_path)?, &graph);
    let corpus = Corpus::new(graph, pois, cfg.categories.clone(), embeddings, examples, cfg.split, cfg.seed)?;
    let normalizer = fit_on(&table, &corpus.train_nodes())?;
    let features = FeatureSet::from_parts(&corpus.graph, cfg.features.clone(), table, normalizer, &corpus.embeddings)?;
    Ok((corpus, features))
}

/// Trains on the cached corpus and writes the best-validation and final
/// checkpoints and the epoch log.
pub fn stage_train(cfg: &RunConfig, on_epoch: impl FnMut(&EpochLog)) -> Result<TrainOutcome> {
    let (corpus, features) = load_corpus(cfg)?;
    let data = corpus.prepare(&features.nodes, &cfg.model.inputs)?;
    let out = fit(&cfg.model, &cfg.training, &data, cfg.seed, on_epoch)?;
    let dir = work_dir(cfg)?;
    save_checkpoint(&out.best, dir.join(files::CHECKPOINT))?;
    save_checkpoint(&out.model, dir.join(files::FINAL_CHECKPOINT))?;
    write_train_log(&out.log, dir.join(files::TRAIN_LOG))?;
    let hash = cfg.hash();
    record_provenance(dir, files::CHECKPOINT, &hash)?;
    record_provenance(dir, files::FINAL_CHECKPOINT, &hash)?;
    record_provenance(dir, files::TRAIN_LOG, &hash)?;
    Ok(out)
}

fn checkpoint(cfg: &RunConfig) -> Result<Model<f32>> {
    let path = cfg.paths.work(files::CHECKPOINT);
    require(&path, "train")?;
    load_checkpoint(path)
}

/// Output of the evaluation stage.
#[derive(Clone, Debug)]
pub struct EvalOutput {
    pub report: MetricsReport,
    pub json: String,
    pub table: String,
}

/// Scores the test split with the saved checkpoint and writes the metrics
/// JSON and CSV.
pub fn stage_eval(cfg: &RunConfig) -> Result<EvalOutput> {
    let model = checkpoint(cfg)?;
    let (corpus, features) = load_corpus(cfg)?;
    let test = prepare_all(&corpus.subset(&corpus.split.test), &features.nodes, &model.config.inputs)?;
    let report = report(&score_examples(&model, &test)?)?;
    let hash = cfg.hash();
    let json = serde_json::to_string_pretty(&metrics_json(&report, &hash, "test")).map_err(|e| Error::parse("metrics", e))?
        + "\n";
    let table = metrics_table_csv(&report);
    let dir = work_dir(cfg)?;
    write_text(&dir.join(files::METRICS_JSON), &json)?;
    write_text(&dir.join(files::METRICS_CSV), &table)?;
    record_provenance(dir, files::METRICS_CSV, &hash)?;
    Ok(EvalOutput { report, json, table })
}

pub fn stage_robustness(cfg: &RunConfig, kind: PerturbationKind) -> Result<Vec<RobustnessRow>> {
    let model = checkpoint(cfg)?;
    let (corpus, features) = load_corpus(cfg)?;
    let streams = input_streams(cfg, &corpus.graph)?;
    let levels = match kind {
        PerturbationKind::Coordinate => &cfg.evaluation.coordinate_levels,
        PerturbationKind::Poi => &cfg.evaluation.poi_levels,
    };
    let rows = run_robustness(
        cfg,
        &corpus,
        &streams,
        &features,
        &model,
        kind,
        levels,
        cfg.evaluation.robustness_trials,
    )?;
    let dir = work_dir(cfg)?;
    let name = files::robustness(kind.name());
    write_robustness_csv(&rows, dir.join(&name))?;
    record_provenance(dir, &name, &cfg.hash())?;
    Ok(rows)
}

pub fn stage_ablate(cfg: &RunConfig, grid: AblationGrid) -> Result<Vec<AblationRow>> {
    let (corpus, _) = load_corpus(cfg)?;
    let rows = run_ablation(cfg, &corpus, &variants(cfg, grid))?;
    let dir = work_dir(cfg)?;
    write_ablation_csv(&rows, dir.join(files::ABLATION))?;
    record_provenance(dir, files::ABLATION, &cfg.hash())?;
    Ok(rows)
}

pub fn stage_sweep(cfg: &RunConfig) -> Result<Vec<SweepRow>> {
    let (corpus, features) = load_corpus(cfg)?;
    let rows = sweep_lh(
        cfg,
        &corpus,
        &features,
        &cfg.evaluation.sweep_layers,
        &cfg.evaluation.sweep_heads,
    )?;
    let dir = work_dir(cfg)?;
    write_sweep_csv(&rows, dir.join(files::SWEEP))?;
    record_provenance(dir, files::SWEEP, &cfg.hash())?;
    Ok(rows)
}

pub fn stage_coverage(cfg: &RunConfig) -> Result<Vec<CoverageRow>> {
    let graph = work_graph(cfg)?;
    let pois = input_pois(cfg, &graph)?;
    let rows = coverage_report(&graph, &pois, &cfg.evaluation.coverage_radii)?;
    let dir = work_dir(cfg)?;
    write_coverage_csv(&rows, dir.join(files::COVERAGE))?;
    record_provenance(dir, files::COVERAGE, &cfg.hash())?;
    Ok(rows)
}
