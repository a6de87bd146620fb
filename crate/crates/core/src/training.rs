//! Dataset splitting, Adam, the training loop and gradient verification.

use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Gradients, Mat, ParamStore};
use crate::dataset::PreparedExample;
use crate::error::{Error, Result};
use crate::evaluation::{acc_at_k, mrr, rank_of_index};
use crate::model::Model;
use crate::rng::derive_seed;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainParams {
    pub batch_size: usize,
    pub epochs: usize,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Global gradient-norm ceiling.
    pub clip_norm: f64,
}

impl Default for TrainParams {
    fn default() -> Self {
        Self {
            batch_size: 16,
            epochs: 10,
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            clip_norm: 5.0,
        }
    }
}

/// Index lists into an example slice.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Split {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

/// Seeded shuffle of example positions `0..n`, then a contiguous cut by
/// `ratios`. Positions refer to the canonical example order (stream, piece,
/// scale, window), which the segment cache preserves.
pub fn split_dataset(n: usize, ratios: [f64; 3], seed: u64) -> Result<Split> {
    if n == 0 {
        return Err(Error::Empty("examples to split"));
    }
    if ratios.iter().any(|r| !(*r >= 0.0)) || (ratios.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return Err(Error::Invalid(format!("split ratios {ratios:?} must be non-negative and sum to 1")));
    }
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &[0x5b17]));
    order.shuffle(&mut rng);
    let n_train = ((ratios[0] * n as f64).round() as usize).min(n);
    let n_val = ((ratios[1] * n as f64).round() as usize).min(n - n_train);
    let mut split = Split {
        train: order[..n_train].to_vec(),
        val: order[n_train..n_train + n_val].to_vec(),
        test: order[n_train + n_val..].to_vec(),
    };
    split.train.sort_unstable();
    split.val.sort_unstable();
    split.test.sort_unstable();
    Ok(split)
}

#[derive(Clone, Debug)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    m: Vec<Mat<f32>>,
    v: Vec<Mat<f32>>,
}

impl Adam {
    pub fn new(params: &ParamStore<f32>, tp: &TrainParams) -> Self {
        let zeros = |t: &Mat<f32>| Mat::zeros(t.rows, t.cols);
        Self {
            lr: tp.lr,
            beta1: tp.beta1,
            beta2: tp.beta2,
            eps: tp.eps,
            step: 0,
            m: params.iter().map(|(_, t)| zeros(t)).collect(),
            v: params.iter().map(|(_, t)| zeros(t)).collect(),
        }
    }

    pub fn update(&mut self, params: &mut ParamStore<f32>, grads: &Gradients<f32>) {
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        let (b1, b2) = (self.beta1 as f32, self.beta2 as f32);
        let step_size = (self.lr / bc1) as f32;
        let bc2_sqrt = bc2.sqrt() as f32;
        let eps = self.eps as f32;
        for id in 0..params.len() {
            let (m, v) = (&mut self.m[id], &mut self.v[id]);
            let p = params.tensor_mut(id);
            match &grads.tensors[id] {
                Some(g) => {
                    for k in 0..p.data.len() {
                        m.data[k] = b1 * m.data[k] + (1.0 - b1) * g.data[k];
                        v.data[k] = b2 * v.data[k] + (1.0 - b2) * g.data[k] * g.data[k];
                        p.data[k] -= step_size * m.data[k] / (v.data[k].sqrt() / bc2_sqrt + eps);
                    }
                }
                None => {
                    for k in 0..p.data.len() {
                        m.data[k] *= b1;
                        v.data[k] *= b2;
                        p.data[k] -= step_size * m.data[k] / (v.data[k].sqrt() / bc2_sqrt + eps);
                    }
                }
            }
        }
    }
}

/// Scales `grads` down to `max_norm` when its global norm exceeds it;
/// returns the norm before clipping.
pub fn clip_global_norm(grads: &mut Gradients<f32>, max_norm: f64) -> f64 {
    let norm = grads
        .tensors
        .iter()
        .flatten()
        .flat_map(|t| t.data.iter())
        .map(|v| (*v as f64) * (*v as f64))
        .sum::<f64>()
        .sqrt();
    if norm > max_norm && norm > 0.0 {
        grads.scale((max_norm / norm) as f32);
    }
    norm
}

fn check_finite(grads: &Gradients<f32>, params: &ParamStore<f32>) -> Result<()> {
    for (id, g) in grads.tensors.iter().enumerate() {
        if let Some(g) = g {
            if g.data.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite(format!("gradient of {}", params.names()[id])));
            }
        }
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_acc1: f64,
    pub val_mrr: f64,
    pub seconds: f64,
}

pub struct TrainOutcome {
    pub model: Model<f32>,
    pub best: Model<f32>,
    pub best_epoch: usize,
    pub log: Vec<EpochLog>,
}

/// Acc@1 and MRR of `model` on `examples` (0 when empty).
pub fn quick_eval(model: &Model<f32>, examples: &[PreparedExample]) -> Result<(f64, f64)> {
    if examples.is_empty() {
        return Ok((0.0, 0.0));
    }
    let ranks = examples
        .par_iter()
        .map(|ex| {
            let p = model.predict(ex)?;
            rank_of_index(&p.scores, ex.label)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((acc_at_k(&ranks, 1)?, mrr(&ranks)?))
}

/// Averaged loss and gradients of one batch; accumulation follows batch
/// order, so the result does not depend on the thread count.
pub fn batch_gradients(
    model: &Model<f32>,
    batch: &[&PreparedExample],
    dropout_seed: Option<u64>,
) -> Result<(f64, Gradients<f32>)> {
    let w = 1.0 / batch.len() as f32;
    let parts = batch
        .par_iter()
        .enumerate()
        .map(|(i, ex)| {
            let mut rng = dropout_seed.map(|s| ChaCha8Rng::seed_from_u64(derive_seed(s, &[i as u64])));
            model.loss_and_grad(ex, rng.as_mut(), w)
        })
        .collect::<Result<Vec<_>>>()?;
    let mut total = Gradients::empty(model.params.len());
    let mut loss = 0.0;
    for (l, g, _) in &parts {
        loss += l;
        total.accumulate(g);
    }
    Ok((loss / batch.len() as f64, total))
}

pub fn train(
    mut model: Model<f32>,
    train_set: &[PreparedExample],
    val_set: &[PreparedExample],
    tp: &TrainParams,
    seed: u64,
    mut on_epoch: impl FnMut(&EpochLog),
) -> Result<TrainOutcome> {
    if train_set.is_empty() {
        return Err(Error::Empty("training split"));
    }
    if tp.batch_size == 0 {
        return Err(Error::Invalid("batch size must be positive".into()));
    }
    let mut adam = Adam::new(&model.params, tp);
    let mut best = model.clone();
    let mut best_score = (f64::NEG_INFINITY, f64::NEG_INFINITY);
    let mut best_epoch = 0;
    let mut log = Vec::with_capacity(tp.epochs);
    for epoch in 1..=tp.epochs {
        let started = Instant::now();
        let mut order: Vec<usize> = (0..train_set.len()).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(seed, &[0x7a11, epoch as u64])));
        let mut loss_sum = 0.0;
        for (b, chunk) in order.chunks(tp.batch_size).enumerate() {
            let batch: Vec<&PreparedExample> = chunk.iter().map(|&i| &train_set[i]).collect();
            let dropout_seed = derive_seed(seed, &[0xd409, epoch as u64, b as u64]);
            let (loss, mut grads) = batch_gradients(&model, &batch, Some(dropout_seed))?;
            if !loss.is_finite() {
                return Err(Error::Diverged { epoch, batch: b, loss });
            }
            check_finite(&grads, &model.params)?;
            clip_global_norm(&mut grads, tp.clip_norm);
            adam.update(&mut model.params, &grads);
            loss_sum += loss * chunk.len() as f64;
        }
        let (val_acc1, val_mrr) = quick_eval(&model, val_set)?;
        let entry = EpochLog {
            epoch,
            train_loss: loss_sum / train_set.len() as f64,
            val_acc1,
            val_mrr,
            seconds: started.elapsed().as_secs_f64(),
        };
        log::info!(
            "epoch {epoch}: loss {:.4} val acc@1 {:.4} mrr {:.4} ({:.1}s)",
            entry.train_loss,
            val_acc1,
            val_mrr,
            entry.seconds
        );
        on_epoch(&entry);
        if (val_acc1, val_mrr) > best_score {
            best_score = (val_acc1, val_mrr);
            best = model.clone();
            best_epoch = epoch;
        }
        log.push(entry);
    }
    Ok(TrainOutcome {
        model,
        best,
        best_epoch,
        log,
    })
}

pub fn write_train_log(log: &[EpochLog], path: impl AsRef<std::path::Path>) -> Result<()> {
    let path = path.as_ref();
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::parse(path.display().to_string(), e))?;
    w.write_record(["epoch", "train_loss", "val_acc1", "val_mrr", "seconds"])
        .map_err(|e| Error::parse(path.display().to_string(), e))?;
    for e in log {
        w.write_record([
            e.epoch.to_string(),
            e.train_loss.to_string(),
            e.val_acc1.to_string(),
            e.val_mrr.to_string(),
            format!("{:.3}", e.seconds),
        ])
        .map_err(|e| Error::parse(path.display().to_string(), e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Worst analytic-vs-numeric disagreement of one tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct GradCheck {
    pub name: String,
    pub max_rel_error: f64,
    pub max_abs_error: f64,
}

/// Compares reverse-mode gradients of the total loss with central finite
/// differences for every tensor. Relative error is taken against
/// `max(|analytic|, |numeric|, floor)`.
pub fn gradcheck(model: &Model<f64>, ex: &PreparedExample, step: f64, floor: f64) -> Result<Vec<GradCheck>> {
    let (_, grads, _) = model.loss_and_grad(ex, None, 1.0)?;
    let names = model.params.names().to_vec();
    (0..model.params.len())
        .into_par_iter()
        .map(|id| {
            let analytic = grads.dense(id, model.params.tensor(id));
            let mut probe = model.clone();
            let mut worst_rel: f64 = 0.0;
            let mut worst_abs: f64 = 0.0;
            for k in 0..analytic.len() {
                let orig = probe.params.tensor(id).data[k];
                probe.params.tensor_mut(id).data[k] = orig + step;
                let up = probe.loss(ex)?;
                probe.params.tensor_mut(id).data[k] = orig - step;
                let down = probe.loss(ex)?;
                probe.params.tensor_mut(id).data[k] = orig;
                let numeric = (up - down) / (2.0 * step);
                let a = analytic.data[k];
                let abs = (a - numeric).abs();
                worst_abs = worst_abs.max(abs);
                worst_rel = worst_rel.max(abs / a.abs().max(numeric.abs()).max(floor));
            }
            Ok(GradCheck {
                name: names[id].clone(),
                max_rel_error: worst_rel,
                max_abs_error: worst_abs,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn split_sizes() {
        let s = split_dataset(100, [0.8, 0.1, 0.1], 1).unwrap();
        assert_eq!((s.train.len(), s.val.len(), s.test.len()), (80, 10, 10));
        let s = split_dataset(10, [0.8, 0.1, 0.1], 1).unwrap();
        assert_eq!((s.train.len(), s.val.len(), s.test.len()), (8, 1, 1));
        let mut all: Vec<usize> = s.train.iter().chain(&s.val).chain(&s.test).copied().collect();
        all.sort_unstable();
        assert_eq!(all, (0..10).collect::<Vec<_>>());
        assert!(split_dataset(0, [0.8, 0.1, 0.1], 1).is_err());
    }

    #[test]
    fn adam_zero_gradient_is_identity() {
        let mut store = ParamStore::default();
        store.insert("w", Mat::from_vec(1, 3, vec![0.5f32, -1.0, 2.0]));
        let before = store.clone();
        let mut adam = Adam::new(&store, &TrainParams::default());
        let g = Gradients {
            tensors: vec![Some(Mat::zeros(1, 3))],
        };
        adam.update(&mut store, &g);
        assert_eq!(store, before);
    }
}
