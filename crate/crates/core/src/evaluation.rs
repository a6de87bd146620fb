//! Ranking metrics, cohort reports, paired bootstrap and input perturbations.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::PreparedExample;
use crate::error::{Error, Result};
use crate::features::DescriptorTable;
use crate::graph::{NodeId, PlanarPoint};
use crate::model::Model;
use crate::projection::{GpsSample, GpsStream, Scale};
use crate::rng::derive_seed;

/// 1-based rank of `scores[label]`; every other candidate scoring at least
/// as high counts as ranked above it.
pub fn rank_of_index(scores: &[f64], label: usize) -> Result<usize> {
    let s = *scores.get(label).ok_or(Error::Shape(format!("label index {label} of {}", scores.len())))?;
    Ok(1 + scores.iter().enumerate().filter(|&(j, v)| j != label && *v >= s).count())
}

pub fn rank_of_label(scores: &[f64], candidates: &[NodeId], label: NodeId) -> Result<usize> {
    if scores.len() != candidates.len() {
        return Err(Error::Shape(format!("{} scores for {} candidates", scores.len(), candidates.len())));
    }
    let ix = candidates.iter().position(|c| *c == label).ok_or(Error::LabelNotCandidate(label))?;
    rank_of_index(scores, ix)
}

pub fn acc_at_k(ranks: &[usize], k: usize) -> Result<f64> {
    if ranks.is_empty() {
        return Err(Error::Empty("ranks"));
    }
    Ok(ranks.iter().filter(|r| **r <= k).count() as f64 / ranks.len() as f64)
}

pub fn mrr(ranks: &[usize]) -> Result<f64> {
    if ranks.is_empty() {
        return Err(Error::Empty("ranks"));
    }
    Ok(ranks.iter().map(|r| 1.0 / *r as f64).sum::<f64>() / ranks.len() as f64)
}

/// Mann–Whitney AUC of the label against the other candidates, ties at
/// one half; `None` with fewer than two candidates.
pub fn example_auc(scores: &[f64], label: usize) -> Option<f64> {
    if scores.len() < 2 {
        return None;
    }
    let s = scores[label];
    let (mut below, mut tied) = (0usize, 0usize);
    for (j, v) in scores.iter().enumerate() {
        if j == label {
            continue;
        }
        if *v < s {
            below += 1;
        } else if *v == s {
            tied += 1;
        }
    }
    Some((below as f64 + 0.5 * tied as f64) / (scores.len() - 1) as f64)
}

/// Mean per-example AUC over examples with at least two candidates.
pub fn mean_roc_auc<'a>(items: impl IntoIterator<Item = (&'a [f64], usize)>) -> Result<f64> {
    let (mut sum, mut n) = (0.0, 0usize);
    for (scores, label) in items {
        if let Some(a) = example_auc(scores, label) {
            sum += a;
            n += 1;
        }
    }
    if n == 0 {
        return Err(Error::AucUndefined);
    }
    Ok(sum / n as f64)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CohortMetrics {
    pub acc1: f64,
    pub acc3: f64,
    pub acc5: f64,
    pub mrr: f64,
    pub n: usize,
}

impl CohortMetrics {
    pub fn from_ranks(ranks: &[usize]) -> Result<Self> {
        Ok(Self {
            acc1: acc_at_k(ranks, 1)?,
            acc3: acc_at_k(ranks, 3)?,
            acc5: acc_at_k(ranks, 5)?,
            mrr: mrr(ranks)?,
            n: ranks.len(),
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub overall: CohortMetrics,
    /// Keyed by cohort label (`1km`, `3km`, `5km`, `7km`, `full`).
    pub cohorts: BTreeMap<String, CohortMetrics>,
    pub mean_auc: Option<f64>,
    pub n: usize,
}

/// Per-example outcome kept for paired comparisons.
#[derive(Clone, Debug, PartialEq)]
pub struct Scored {
    pub scale: Scale,
    pub scores: Vec<f64>,
    pub label: usize,
    pub rank: usize,
}

pub fn score_examples(model: &Model<f32>, examples: &[PreparedExample]) -> Result<Vec<Scored>> {
    examples
        .par_iter()
        .map(|ex| {
            let p = model.predict(ex)?;
            let rank = rank_of_index(&p.scores, ex.label)?;
            Ok(Scored {
                scale: ex.scale(),
                scores: p.scores,
                label: ex.label,
                rank,
            })
        })
        .collect()
}

pub fn report(scored: &[Scored]) -> Result<MetricsReport> {
    let ranks: Vec<usize> = scored.iter().map(|s| s.rank).collect();
    let overall = CohortMetrics::from_ranks(&ranks)?;
    let mut cohorts = BTreeMap::new();
    for scale in Scale::ALL {
        let r: Vec<usize> = scored.iter().filter(|s| s.scale == scale).map(|s| s.rank).collect();
        if !r.is_empty() {
            cohorts.insert(scale.cohort().to_string(), CohortMetrics::from_ranks(&r)?);
        }
    }
    let mean_auc = mean_roc_auc(scored.iter().map(|s| (s.scores.as_slice(), s.label))).ok();
    Ok(MetricsReport {
        overall,
        cohorts,
        mean_auc,
        n: scored.len(),
    })
}

pub fn evaluate(model: &Model<f32>, examples: &[PreparedExample]) -> Result<MetricsReport> {
    report(&score_examples(model, examples)?)
}

/// Ranks from a fixed scoring rule, for baselines.
pub fn baseline_ranks(examples: &[PreparedExample], score: impl Fn(&PreparedExample, usize) -> f64) -> Result<Vec<usize>> {
    examples
        .iter()
        .map(|ex| {
            let s: Vec<f64> = (0..ex.c).map(|j| score(ex, j)).collect();
            rank_of_index(&s, ex.label)
        })
        .collect()
}

/// Expected Acc@1 of a uniformly random ranking; equals the chance level.
pub fn uniform_baseline_acc1(examples: &[PreparedExample]) -> Result<f64> {
    if examples.is_empty() {
        return Err(Error::Empty("examples"));
    }
    Ok(examples.iter().map(|e| 1.0 / e.c as f64).sum::<f64>() / examples.len() as f64)
}

/// Acc@1 of a random ranking drawn with `seed`.
pub fn random_baseline_acc1(examples: &[PreparedExample], seed: u64) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &[0xba5e]));
    let scores: Vec<Vec<f64>> = examples.iter().map(|e| (0..e.c).map(|_| rng.random()).collect()).collect();
    let ranks = examples
        .iter()
        .zip(&scores)
        .map(|(e, s)| rank_of_index(s, e.label))
        .collect::<Result<Vec<_>>>()?;
    acc_at_k(&ranks, 1)
}

/// Expected Acc@1 of ranking candidates by a node prior (e.g. degree) with
/// ties broken uniformly at random.
pub fn prior_baseline_acc1(examples: &[PreparedExample], prior: impl Fn(NodeId) -> f64) -> Result<f64> {
    if examples.is_empty() {
        return Err(Error::Empty("examples"));
    }
    let mut total = 0.0;
    for ex in examples {
        let p: Vec<f64> = ex.candidate_ids.iter().map(|u| prior(*u)).collect();
        let best = p.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let top = p.iter().filter(|v| **v == best).count();
        if p[ex.label] == best {
            total += 1.0 / top as f64;
        }
    }
    Ok(total / examples.len() as f64)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Bootstrap {
    /// Acc@1(A) - Acc@1(B) on the full sample.
    pub delta: f64,
    pub mean: f64,
    pub ci: (f64, f64),
    pub p_value: f64,
}

/// Paired bootstrap of the Acc@1 difference between two systems.
pub fn paired_bootstrap(a: &[usize], b: &[usize], resamples: usize, seed: u64) -> Result<Bootstrap> {
    if a.len() != b.len() {
        return Err(Error::Shape(format!("paired rank lists of length {} and {}", a.len(), b.len())));
    }
    if a.is_empty() || resamples == 0 {
        return Err(Error::Empty("paired ranks or resamples"));
    }
    let n = a.len();
    let diff: Vec<f64> = a
        .iter()
        .zip(b)
        .map(|(x, y)| (*x == 1) as u8 as f64 - (*y == 1) as u8 as f64)
        .collect();
    let delta = diff.iter().sum::<f64>() / n as f64;
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &[0xb007]));
    let mut stats: Vec<f64> = (0..resamples)
        .map(|_| (0..n).map(|_| diff[rng.random_range(0..n)]).sum::<f64>() / n as f64)
        .collect();
    stats.sort_by(|x, y| x.partial_cmp(y).expect("finite"));
    let q = |p: f64| {
        let pos = p * (resamples - 1) as f64;
        let (lo, hi) = (pos.floor() as usize, pos.ceil() as usize);
        stats[lo] + (stats[hi] - stats[lo]) * (pos - lo as f64)
    };
    let le = stats.iter().filter(|v| **v <= 0.0).count() as f64 / resamples as f64;
    let ge = stats.iter().filter(|v| **v >= 0.0).count() as f64 / resamples as f64;
    Ok(Bootstrap {
        delta,
        mean: stats.iter().sum::<f64>() / resamples as f64,
        ci: (q(0.025), q(0.975)),
        p_value: (2.0 * le.min(ge)).min(1.0),
    })
}

/// Adds independent zero-mean Gaussian offsets (meters, per axis) to every
/// sample.
pub fn perturb_coordinates(streams: &[GpsStream], sigma: f64, seed: u64) -> Vec<GpsStream> {
    if sigma == 0.0 {
        return streams.to_vec();
    }
    let normal = Normal::new(0.0, sigma).expect("finite sigma");
    streams
        .iter()
        .enumerate()
        .map(|(i, s)| {
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &[0xc0, i as u64]));
            GpsStream {
                user: s.user.clone(),
                samples: s
                    .samples
                    .iter()
                    .map(|g| GpsSample {
                        t: g.t,
                        pos: PlanarPoint::new(g.pos.x + normal.sample(&mut rng), g.pos.y + normal.sample(&mut rng)),
                    })
                    .collect(),
            }
        })
        .collect()
}

/// Multiplicative noise on sector bins: each bin is scaled by `1 + ε`,
/// negatives clip to zero, and each (node, category) block is rescaled to
/// its original mass. Statistics and presence slots are untouched.
pub fn perturb_poi(table: &DescriptorTable, sigma: f64, seed: u64) -> DescriptorTable {
    if sigma == 0.0 {
        return table.clone();
    }
    let normal = Normal::new(0.0, sigma).expect("finite sigma");
    let layout = table.layout;
    let mut out = table.clone();
    for (ix, row) in out.rows.iter_mut().enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &[0x901, ix as u64]));
        for c in 0..layout.categories {
            let range = layout.sector_range(c);
            let eps: Vec<f64> = range.clone().map(|_| normal.sample(&mut rng)).collect();
            let bins = &mut row.x[range];
            let mass: f64 = bins.iter().sum();
            if mass == 0.0 {
                continue;
            }
            let noisy: Vec<f64> = bins.iter().zip(&eps).map(|(h, e)| (h * (1.0 + e)).max(0.0)).collect();
            let noisy_mass: f64 = noisy.iter().sum();
            if noisy_mass > 0.0 {
                for (b, v) in bins.iter_mut().zip(noisy) {
                    *b = v * mass / noisy_mass;
                }
            }
        }
    }
    out
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PerturbationKind {
    Coordinate,
    Poi,
}

impl PerturbationKind {
    pub fn name(&self) -> &'static str {
        match self {
            PerturbationKind::Coordinate => "coordinate",
            PerturbationKind::Poi => "poi",
        }
    }

    pub fn default_levels(&self) -> Vec<f64> {
        match self {
            PerturbationKind::Coordinate => vec![0.0, 10.0, 20.0, 30.0, 40.0, 50.0],
            PerturbationKind::Poi => vec![0.0, 0.05, 0.10, 0.15, 0.20, 0.25],
        }
    }
}

impl std::str::FromStr for PerturbationKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "coordinate" => Ok(Self::Coordinate),
            "poi" => Ok(Self::Poi),
            _ => Err(Error::parse("perturbation kind", format!("{s:?} is neither coordinate nor poi"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RobustnessRow {
    pub kind: PerturbationKind,
    pub level: f64,
    pub trial: usize,
    pub acc1: f64,
    pub acc3: f64,
    pub acc5: f64,
    pub mrr: f64,
}

pub fn write_robustness_csv(rows: &[RobustnessRow], path: impl AsRef<std::path::Path>) -> Result<()> {
    let path = path.as_ref();
    let err = |e: csv::Error| Error::parse(path.display().to_string(), e);
    let mut w = csv::Writer::from_path(path).map_err(err)?;
    w.write_record(["kind", "level", "trial", "acc1", "acc3", "acc5", "mrr"]).map_err(err)?;
    for r in rows {
        w.write_record([
            r.kind.name().to_string(),
            r.level.to_string(),
            r.trial.to_string(),
            r.acc1.to_string(),
            r.acc3.to_string(),
            r.acc5.to_string(),
            r.mrr.to_string(),
        ])
        .map_err(err)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Mean and population standard deviation of `acc1` per level.
pub fn summarize_robustness(rows: &[RobustnessRow]) -> Vec<(f64, f64, f64)> {
    let mut levels: Vec<f64> = rows.iter().map(|r| r.level).collect();
    levels.sort_by(|a, b| a.partial_cmp(b).expect("finite"));
    levels.dedup();
    levels
        .into_iter()
        .map(|lv| {
            // trials where no example survived carry NaN and are skipped
            let v: Vec<f64> = rows
                .iter()
                .filter(|r| r.level == lv && r.acc1.is_finite())
                .map(|r| r.acc1)
                .collect();
            let m = v.iter().sum::<f64>() / v.len() as f64;
            let var = v.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / v.len() as f64;
            (lv, m, var.sqrt())
        })
        .collect()
}
