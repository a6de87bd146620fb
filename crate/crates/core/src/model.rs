//! The sequence model: CfC recurrence over input differences, a gated
//! structural mixer, candidate states appended after the history, standard
//! and bearing-biased attention layers, and the scoring and direction heads.

use std::io::Write;
use std::path::Path;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Gradients, Mat, ParamStore, Real, Tape, Var};
use crate::dataset::{InputFlags, PreparedExample, STEP_DIM};
use crate::error::{Error, Result};
use crate::features::{ByteReader, GEO_DIM};
use crate::graph::bearing;
use crate::rng::derive_seed;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub d: usize,
    pub heads: usize,
    pub l_std: usize,
    pub l_rel: usize,
    pub d_ffn: usize,
    /// CfC state width.
    pub d_h: usize,
    /// Structural embedding width.
    pub d_s: usize,
    pub poi_dim: usize,
    pub gamma: f64,
    pub dropout: f64,
    /// Sinusoidal positions on history tokens.
    pub positional_encoding: bool,
    /// Gate the CfC target with `sigmoid(a_t)`.
    pub gate_a: bool,
    /// History tokens attend only to earlier history tokens.
    pub causal: bool,
    pub inputs: InputFlags,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            d: 256,
            heads: 4,
            l_std: 3,
            l_rel: 1,
            d_ffn: 256,
            d_h: 256,
            d_s: 64,
            poi_dim: 168,
            gamma: 0.1,
            dropout: 0.1,
            positional_encoding: false,
            gate_a: false,
            causal: false,
            inputs: InputFlags::default(),
        }
    }
}

impl ModelConfig {
    /// Small configuration for finite-difference checks.
    pub fn tiny(poi_dim: usize, d_s: usize) -> Self {
        Self {
            d: 8,
            heads: 2,
            l_std: 1,
            l_rel: 1,
            d_ffn: 8,
            d_h: 8,
            d_s,
            poi_dim,
            dropout: 0.0,
            ..Self::default()
        }
    }

    pub fn layers(&self) -> usize {
        self.l_std + self.l_rel
    }

    pub fn in_dim(&self) -> usize {
        self.poi_dim + GEO_DIM + STEP_DIM
    }

    pub fn head_dim(&self) -> usize {
        self.d / self.heads
    }

    pub fn validate(&self) -> Result<()> {
        if self.heads == 0 || self.d % self.heads != 0 {
            return Err(Error::Invalid(format!("d = {} is not divisible by H = {}", self.d, self.heads)));
        }
        if self.layers() == 0 {
            return Err(Error::Invalid("at least one attention layer is required".into()));
        }
        if !(self.gamma >= 0.0) || !self.gamma.is_finite() {
            return Err(Error::Invalid(format!("gamma = {} must be finite and >= 0", self.gamma)));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Invalid(format!("dropout = {} must lie in [0, 1)", self.dropout)));
        }
        if [self.d, self.d_ffn, self.d_h, self.d_s, self.poi_dim].contains(&0) {
            return Err(Error::Invalid("model widths must be positive".into()));
        }
        self.inputs.validate()
    }

    pub fn is_rel_layer(&self, l: usize) -> bool {
        l >= self.l_std
    }
}

#[derive(Clone, Copy, Debug)]
enum Init {
    /// Uniform on `±1/sqrt(fan_in)`.
    Uniform(usize),
    Const(f64),
    Normal(f64),
}

/// Every learnable tensor as `(name, rows, cols)` in registry order.
pub fn tensor_specs(cfg: &ModelConfig) -> Vec<(String, usize, usize)> {
    specs(cfg).into_iter().map(|(n, r, c, _)| (n, r, c)).collect()
}

fn specs(cfg: &ModelConfig) -> Vec<(String, usize, usize, Init)> {
    let (d, dh, ds, f) = (cfg.d, cfg.d_h, cfg.d_s, cfg.d_ffn);
    let cfc_in = cfg.in_dim() + dh;
    // softplus(tau) = 1
    let tau = (std::f64::consts::E - 1.0).ln();
    let mut v = vec![
        ("cfc.tau".to_string(), 1, dh, Init::Const(tau)),
        ("cfc.w".into(), cfc_in, 2 * dh, Init::Uniform(cfc_in)),
        ("cfc.b".into(), 1, 2 * dh, Init::Uniform(cfc_in)),
        ("mix.w_struct".into(), ds, dh, Init::Uniform(ds)),
        ("mix.w_gate".into(), 2 * dh, dh, Init::Uniform(2 * dh)),
        ("mix.b_gate".into(), 1, dh, Init::Uniform(2 * dh)),
        ("mix.w_proj".into(), dh, d, Init::Uniform(dh)),
        ("mix.b_proj".into(), 1, d, Init::Uniform(dh)),
        ("type.observed".into(), 1, d, Init::Normal(0.01)),
        ("type.candidate".into(), 1, d, Init::Normal(0.01)),
    ];
    for l in 0..cfg.layers() {
        let p = |s: &str| format!("layers.{l}.{s}");
        v.push((p("ln1.gamma"), 1, d, Init::Const(1.0)));
        v.push((p("ln1.beta"), 1, d, Init::Const(0.0)));
        for m in ["q", "k", "v", "o"] {
            v.push((p(&format!("attn.w{m}")), d, d, Init::Uniform(d)));
            v.push((p(&format!("attn.b{m}")), 1, d, Init::Uniform(d)));
        }
        if cfg.is_rel_layer(l) {
            v.push((p("rel.lambda"), 1, cfg.heads, Init::Const(0.1)));
            v.push((p("rel.w"), cfg.heads, 2, Init::Uniform(2)));
        }
        v.push((p("ln2.gamma"), 1, d, Init::Const(1.0)));
        v.push((p("ln2.beta"), 1, d, Init::Const(0.0)));
        v.push((p("ffn.w1"), d, f, Init::Uniform(d)));
        v.push((p("ffn.b1"), 1, f, Init::Uniform(d)));
        v.push((p("ffn.w2"), f, d, Init::Uniform(f)));
        v.push((p("ffn.b2"), 1, d, Init::Uniform(f)));
    }
    v.push(("final_ln.gamma".into(), 1, d, Init::Const(1.0)));
    v.push(("final_ln.beta".into(), 1, d, Init::Const(0.0)));
    v.push(("head.w".into(), d, 1, Init::Uniform(d)));
    v.push(("head.b".into(), 1, 1, Init::Uniform(d)));
    v.push(("dir.w".into(), d, 2, Init::Uniform(d)));
    v
}

/// Total learnable scalars for `cfg`.
pub fn parameter_count(cfg: &ModelConfig) -> usize {
    tensor_specs(cfg).iter().map(|(_, r, c)| r * c).sum()
}

#[derive(Clone, Debug)]
pub struct Model<R: Real> {
    pub config: ModelConfig,
    pub params: ParamStore<R>,
}

/// Scores, probabilities and predicted direction for one example.
#[derive(Clone, Debug, PartialEq)]
pub struct Prediction {
    pub scores: Vec<f64>,
    pub probs: Vec<f64>,
    pub direction: [f64; 2],
}

/// Handles into the tape for one forward pass.
pub struct Forward {
    /// `C x 1`
    pub scores: Var,
    /// `1 x 2`, before normalization.
    pub direction: Var,
    pub ce: Var,
    pub dir_loss: Option<Var>,
    pub loss: Var,
    /// Per layer, per head attention weights `(T + C) x (T + C)`.
    pub attention: Vec<Vec<Var>>,
    /// Per relation-aware layer, per head bias matrices.
    pub bias: Vec<Vec<Var>>,
    /// CfC states `h_1..h_T`.
    pub states: Vec<Var>,
    /// Candidate CfC states, `C x d_h`.
    pub candidate_states: Var,
    /// Token matrix after mixing and type embeddings, `(T + C) x d`.
    pub tokens: Var,
    /// Output of every layer, `(T + C) x d`.
    pub layer_outputs: Vec<Var>,
}

/// Attention visibility as a row-major `(T + C)^2` boolean mask.
pub fn attention_mask(t: usize, c: usize, causal: bool) -> Vec<bool> {
    let n = t + c;
    let mut m = vec![false; n * n];
    for p in 0..n {
        for q in 0..n {
            m[p * n + q] = if p < t {
                q < t && (!causal || q <= p)
            } else {
                q < t || q == p
            };
        }
    }
    m
}

/// Row-centered `cos θ_{p→q}` and `sin θ_{p→q}` over visible keys. Diagonal
/// and coincident pairs contribute 0 before centering; hidden pairs stay 0.
pub fn bearing_matrices(ex: &PreparedExample, mask: &[bool]) -> (Mat<f64>, Mat<f64>) {
    let n = ex.n();
    let mut cos = Mat::zeros(n, n);
    let mut sin = Mat::zeros(n, n);
    for p in 0..n {
        let mut visible = 0usize;
        let (mut sc, mut ss) = (0.0, 0.0);
        for q in 0..n {
            if !mask[p * n + q] {
                continue;
            }
            visible += 1;
            if p == q {
                continue;
            }
            if let Ok(th) = bearing(ex.positions[p], ex.positions[q]) {
                let (s, c) = th.sin_cos();
                cos.data[p * n + q] = c;
                sin.data[p * n + q] = s;
                sc += c;
                ss += s;
            }
        }
        if visible == 0 {
            continue;
        }
        let (mc, ms) = (sc / visible as f64, ss / visible as f64);
        for q in 0..n {
            if mask[p * n + q] {
                cos.data[p * n + q] -= mc;
                sin.data[p * n + q] -= ms;
            }
        }
    }
    (cos, sin)
}

fn sinusoid(t: usize, d: usize) -> Vec<f64> {
    let mut out = vec![0.0; t * d];
    for pos in 0..t {
        for i in 0..d {
            let k = (i / 2) as f64;
            let angle = pos as f64 / 10000f64.powf(2.0 * k / d as f64);
            out[pos * d + i] = if i % 2 == 0 { angle.sin() } else { angle.cos() };
        }
    }
    out
}

fn dropout_mask<R: Real>(rows: usize, cols: usize, rate: f64, rng: &mut ChaCha8Rng) -> Mat<R> {
    let keep = R::lit(1.0 / (1.0 - rate));
    let data = (0..rows * cols)
        .map(|_| if rng.random::<f64>() < rate { R::zero() } else { keep })
        .collect();
    Mat::from_vec(rows, cols, data)
}

impl<R: Real> Model<R> {
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut params = ParamStore::default();
        for (i, (name, rows, cols, init)) in specs(&config).into_iter().enumerate() {
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &[0x1417, i as u64]));
            let data: Vec<f64> = (0..rows * cols)
                .map(|_| match init {
                    Init::Uniform(fan_in) => {
                        let a = 1.0 / (fan_in as f64).sqrt();
                        rng.random_range(-a..a)
                    }
                    Init::Const(v) => v,
                    Init::Normal(s) => s * rng.sample::<f64, _>(StandardNormal),
                })
                .collect();
            params.insert(name, Mat::from_f64(rows, cols, &data));
        }
        Ok(Self { config, params })
    }

    pub fn parameter_count(&self) -> usize {
        self.params.num_scalars()
    }

    pub fn cast<S: Real>(&self) -> Model<S> {
        Model {
            config: self.config.clone(),
            params: self.params.cast(),
        }
    }

    fn check_input(&self, ex: &PreparedExample) -> Result<()> {
        let cfg = &self.config;
        if ex.in_dim != cfg.in_dim() || ex.struct_dim != cfg.d_s {
            return Err(Error::Shape(format!(
                "example widths (in {}, struct {}) differ from model (in {}, struct {})",
                ex.in_dim,
                ex.struct_dim,
                cfg.in_dim(),
                cfg.d_s
            )));
        }
        if ex.t == 0 || ex.c == 0 || ex.label >= ex.c {
            return Err(Error::Shape("example needs history, candidates and a label among them".into()));
        }
        Ok(())
    }

    /// Records the forward pass on `tape`. `dropout` supplies the mask RNG
    /// during training and is `None` at evaluation.
    pub fn forward<'p>(
        &'p self,
        tape: &mut Tape<'p, R>,
        ex: &PreparedExample,
        mut dropout: Option<&mut ChaCha8Rng>,
    ) -> Result<Forward> {
        self.check_input(ex)?;
        let cfg = &self.config;
        let (t, c, n) = (ex.t, ex.c, ex.n());
        let (dh, d, in_dim) = (cfg.d_h, cfg.d, cfg.in_dim());

        // CfC recurrence
        let tau = tape.param_named("cfc.tau");
        let w = tape.param_named("cfc.w");
        let b = tape.param_named("cfc.b");
        let sp = tape.softplus(tau);
        let neg = tape.scale(sp, -R::one());
        let alpha = tape.exp(neg);
        let one_minus = tape.affine(alpha, -R::one(), R::one());
        let w_in = tape.slice_rows(w, 0, in_dim);
        let w_h = tape.slice_rows(w, in_dim, in_dim + dh);
        let xh = tape.constant(Mat::from_f64(t, in_dim, &ex.history));
        let xin = tape.matmul(xh, w_in);
        let mut h = tape.constant(Mat::zeros(1, dh));
        let mut states = Vec::with_capacity(t);
        for i in 0..t {
            let hw = tape.matmul(h, w_h);
            let xi = tape.slice_rows(xin, i, i + 1);
            let pre = tape.add(xi, hw);
            let pre = tape.add(pre, b);
            let target = self.cfc_target(tape, pre);
            let keep = tape.mul(alpha, h);
            let fresh = tape.mul(one_minus, target);
            h = tape.add(keep, fresh);
            states.push(h);
        }

        // one CfC step per candidate from h_T
        let xc = tape.constant(Mat::from_f64(c, in_dim, &ex.candidates));
        let xcw = tape.matmul(xc, w_in);
        let hw = tape.matmul(h, w_h);
        let hwb = tape.add(hw, b);
        let pre = tape.add_row(xcw, hwb);
        let target = self.cfc_target(tape, pre);
        let fresh = tape.mul_row(target, one_minus);
        let keep = tape.mul(alpha, h);
        let candidate_states = tape.add_row(fresh, keep);

        let mut rows = states.clone();
        rows.push(candidate_states);
        let all_h = tape.concat_rows(&rows);

        // gated structural mixer
        let s_raw = tape.constant(Mat::from_f64(n, cfg.d_s, &ex.structural));
        let w_struct = tape.param_named("mix.w_struct");
        let s = tape.matmul(s_raw, w_struct);
        let hs = tape.concat_cols(&[all_h, s]);
        let w_gate = tape.param_named("mix.w_gate");
        let b_gate = tape.param_named("mix.b_gate");
        let gate = tape.matmul(hs, w_gate);
        let gate = tape.add_row(gate, b_gate);
        let gate = tape.sigmoid(gate);
        let diff = tape.sub(s, all_h);
        let moved = tape.mul(gate, diff);
        let mixed = tape.add(all_h, moved);
        let w_proj = tape.param_named("mix.w_proj");
        let b_proj = tape.param_named("mix.b_proj");
        let z = tape.matmul(mixed, w_proj);
        let z = tape.add_row(z, b_proj);

        // type embeddings
        let obs = tape.param_named("type.observed");
        let cand = tape.param_named("type.candidate");
        let zh = tape.slice_rows(z, 0, t);
        let mut zh = tape.add_row(zh, obs);
        if cfg.positional_encoding {
            let pe = tape.constant(Mat::from_f64(t, d, &sinusoid(t, d)));
            zh = tape.add(zh, pe);
        }
        let zc = tape.slice_rows(z, t, n);
        let zc = tape.add_row(zc, cand);
        let tokens = tape.concat_rows(&[zh, zc]);

        let mask = attention_mask(t, c, cfg.causal);
        let (cos, sin) = if cfg.l_rel > 0 {
            let (cm, sm) = bearing_matrices(ex, &mask);
            (Some(Arc::new(cm.cast::<R>())), Some(Arc::new(sm.cast::<R>())))
        } else {
            (None, None)
        };

        let mut z = tokens;
        let mut attention = Vec::with_capacity(cfg.layers());
        let mut biases = Vec::new();
        let mut layer_outputs = Vec::with_capacity(cfg.layers());
        for l in 0..cfg.layers() {
            let rel = if cfg.is_rel_layer(l) {
                Some((cos.clone().expect("rel matrices"), sin.clone().expect("rel matrices")))
            } else {
                None
            };
            let (out, att, bias) = self.layer(tape, z, l, &mask, rel, dropout.as_deref_mut());
            z = out;
            attention.push(att);
            if !bias.is_empty() {
                biases.push(bias);
            }
            layer_outputs.push(z);
        }

        let g = tape.param_named("final_ln.gamma");
        let be = tape.param_named("final_ln.beta");
        let zf = tape.layer_norm(z, g, be);
        let zc = tape.slice_rows(zf, t, n);
        let hw = tape.param_named("head.w");
        let hb = tape.param_named("head.b");
        let scores = tape.matmul(zc, hw);
        let scores = tape.add_row(scores, hb);
        let ce = tape.cross_entropy(scores, ex.label);

        let zt = tape.slice_rows(zf, t - 1, t);
        let dw = tape.param_named("dir.w");
        let direction = tape.matmul(zt, dw);
        let (loss, dir_loss) = if cfg.gamma > 0.0 {
            let target = [R::lit(ex.direction[0]), R::lit(ex.direction[1])];
            let dl = tape.direction_loss(direction, target);
            let weighted = tape.scale(dl, R::lit(cfg.gamma));
            (tape.add(ce, weighted), Some(dl))
        } else {
            (ce, None)
        };
        Ok(Forward {
            scores,
            direction,
            ce,
            dir_loss,
            loss,
            attention,
            bias: biases,
            states,
            candidate_states,
            tokens,
            layer_outputs,
        })
    }

    fn cfc_target(&self, tape: &mut Tape<'_, R>, pre: Var) -> Var {
        let dh = self.config.d_h;
        let bpart = tape.slice_cols(pre, dh, 2 * dh);
        let target = tape.tanh(bpart);
        if self.config.gate_a {
            let a = tape.slice_cols(pre, 0, dh);
            let ga = tape.sigmoid(a);
            tape.mul(ga, target)
        } else {
            target
        }
    }

    #[allow(clippy::type_complexity)]
    fn layer(
        &self,
        tape: &mut Tape<'_, R>,
        z: Var,
        l: usize,
        mask: &[bool],
        rel: Option<(Arc<Mat<R>>, Arc<Mat<R>>)>,
        mut dropout: Option<&mut ChaCha8Rng>,
    ) -> (Var, Vec<Var>, Vec<Var>) {
        let cfg = &self.config;
        let name = |s: &str| format!("layers.{l}.{s}");
        let (n, d) = tape.shape(z);
        let dk = cfg.head_dim();

        let g1 = tape.param_named(&name("ln1.gamma"));
        let b1 = tape.param_named(&name("ln1.beta"));
        let x = tape.layer_norm(z, g1, b1);
        let proj = |tape: &mut Tape<'_, R>, m: &str| {
            let w = tape.param_named(&name(&format!("attn.w{m}")));
            let b = tape.param_named(&name(&format!("attn.b{m}")));
            let y = tape.matmul(x, w);
            tape.add_row(y, b)
        };
        let q = proj(tape, "q");
        let k = proj(tape, "k");
        let v = proj(tape, "v");
        let rel_params = rel.as_ref().map(|_| {
            (
                tape.param_named(&name("rel.lambda")),
                tape.param_named(&name("rel.w")),
            )
        });
        let inv = R::lit(1.0 / (dk as f64).sqrt());
        let mut heads = Vec::with_capacity(cfg.heads);
        let mut weights = Vec::with_capacity(cfg.heads);
        let mut biases = Vec::new();
        for hd in 0..cfg.heads {
            let (lo, hi) = (hd * dk, (hd + 1) * dk);
            let qh = tape.slice_cols(q, lo, hi);
            let kh = tape.slice_cols(k, lo, hi);
            let vh = tape.slice_cols(v, lo, hi);
            let logits = tape.matmul_nt(qh, kh);
            let mut logits = tape.scale(logits, inv);
            if let (Some((cos, sin)), Some((lam, w))) = (&rel, rel_params) {
                let bias = tape.bearing_bias(lam, w, hd, cos.clone(), sin.clone());
                biases.push(bias);
                logits = tape.add(logits, bias);
            }
            let p = tape.masked_softmax(logits, mask);
            weights.push(p);
            heads.push(tape.matmul(p, vh));
        }
        let o = tape.concat_cols(&heads);
        let wo = tape.param_named(&name("attn.wo"));
        let bo = tape.param_named(&name("attn.bo"));
        let o = tape.matmul(o, wo);
        let mut o = tape.add_row(o, bo);
        if let Some(rng) = dropout.as_deref_mut() {
            if cfg.dropout > 0.0 {
                o = tape.mul_const(o, dropout_mask(n, d, cfg.dropout, rng));
            }
        }
        let z = tape.add(z, o);

        let g2 = tape.param_named(&name("ln2.gamma"));
        let b2 = tape.param_named(&name("ln2.beta"));
        let x2 = tape.layer_norm(z, g2, b2);
        let w1 = tape.param_named(&name("ffn.w1"));
        let bb1 = tape.param_named(&name("ffn.b1"));
        let w2 = tape.param_named(&name("ffn.w2"));
        let bb2 = tape.param_named(&name("ffn.b2"));
        let f = tape.matmul(x2, w1);
        let f = tape.add_row(f, bb1);
        let f = tape.gelu(f);
        let f = tape.matmul(f, w2);
        let mut f = tape.add_row(f, bb2);
        if let Some(rng) = dropout {
            if cfg.dropout > 0.0 {
                f = tape.mul_const(f, dropout_mask(n, d, cfg.dropout, rng));
            }
        }
        (tape.add(z, f), weights, biases)
    }

    /// Evaluation-mode prediction.
    pub fn predict(&self, ex: &PreparedExample) -> Result<Prediction> {
        let mut tape = Tape::new(&self.params);
        let out = self.forward(&mut tape, ex, None)?;
        Ok(prediction(&tape, &out))
    }

    /// Loss and parameter gradients scaled by `weight`.
    pub fn loss_and_grad(
        &self,
        ex: &PreparedExample,
        dropout: Option<&mut ChaCha8Rng>,
        weight: R,
    ) -> Result<(f64, Gradients<R>, bool)> {
        let mut tape = Tape::new(&self.params);
        let out = self.forward(&mut tape, ex, dropout)?;
        let loss = tape.value(out.loss).data[0].to_f64().unwrap_or(f64::NAN);
        let grads = tape.backward(out.loss, weight);
        Ok((loss, grads, tape.clamped()))
    }

    /// Loss only, without dropout.
    pub fn loss(&self, ex: &PreparedExample) -> Result<f64> {
        let mut tape = Tape::new(&self.params);
        let out = self.forward(&mut tape, ex, None)?;
        Ok(tape.value(out.loss).data[0].to_f64().unwrap_or(f64::NAN))
    }
}

/// Reads scores, softmax probabilities and the unit direction off a tape.
pub fn prediction<R: Real>(tape: &Tape<'_, R>, out: &Forward) -> Prediction {
    let scores: Vec<f64> = tape
        .value(out.scores)
        .data
        .iter()
        .map(|v| v.to_f64().unwrap_or(f64::NAN))
        .collect();
    let mx = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = scores.iter().map(|s| (s - mx).exp()).collect();
    let sum: f64 = exps.iter().sum();
    let dv = tape.value(out.direction);
    let (x, y) = (dv.data[0].to_f64().unwrap_or(0.0), dv.data[1].to_f64().unwrap_or(0.0));
    let norm = (x * x + y * y + crate::autodiff::DIR_EPS).sqrt();
    Prediction {
        probs: exps.iter().map(|e| e / sum).collect(),
        scores,
        direction: [x / norm, y / norm],
    }
}

const CHECKPOINT_MAGIC: &[u8; 4] = b"RNCK";
const CHECKPOINT_VERSION: u32 = 1;

/// Writes `{magic, version, config JSON, named f32 tensors}`.
pub fn save_checkpoint<R: Real>(model: &Model<R>, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut buf = Vec::new();
    buf.extend_from_slice(CHECKPOINT_MAGIC);
    buf.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    let cfg = serde_json::to_vec(&model.config).map_err(|e| Error::Checkpoint(e.to_string()))?;
    buf.extend_from_slice(&(cfg.len() as u32).to_le_bytes());
    buf.extend_from_slice(&cfg);
    buf.extend_from_slice(&(model.params.len() as u32).to_le_bytes());
    for (name, t) in model.params.iter() {
        buf.extend_from_slice(&(name.len() as u32).to_le_bytes());
        buf.extend_from_slice(name.as_bytes());
        buf.extend_from_slice(&2u32.to_le_bytes());
        buf.extend_from_slice(&(t.rows as u64).to_le_bytes());
        buf.extend_from_slice(&(t.cols as u64).to_le_bytes());
        for v in &t.data {
            buf.extend_from_slice(&v.to_f32().unwrap_or(f32::NAN).to_le_bytes());
        }
    }
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&buf).map_err(|e| Error::io(path, e))
}

/// Reads a checkpoint, checking that its tensors match the registry of the
/// stored configuration exactly.
pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Model<f32>> {
    let path = path.as_ref();
    let bytes = crate::features::read_all(path)?;
    let mut r = ByteReader {
        bytes: &bytes,
        pos: 0,
        what: "checkpoint",
    };
    if r.take(4)? != CHECKPOINT_MAGIC {
        return Err(Error::Checkpoint(format!("{}: bad magic", path.display())));
    }
    let version = r.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::Checkpoint(format!("{}: unsupported version {version}", path.display())));
    }
    let len = r.u32()? as usize;
    let config: ModelConfig =
        serde_json::from_slice(r.take(len)?).map_err(|e| Error::Checkpoint(format!("config block: {e}")))?;
    config.validate()?;
    let expected = tensor_specs(&config);
    let count = r.u32()? as usize;
    if count != expected.len() {
        return Err(Error::Checkpoint(format!(
            "{} tensors stored, registry expects {}",
            count,
            expected.len()
        )));
    }
    let mut params = ParamStore::default();
    for (name, rows, cols) in expected {
        let nlen = r.u32()? as usize;
        let got = String::from_utf8(r.take(nlen)?.to_vec()).map_err(|e| Error::Checkpoint(e.to_string()))?;
        if got != name {
            return Err(Error::Checkpoint(format!("expected tensor {name}, found {got}")));
        }
        let rank = r.u32()?;
        if rank != 2 {
            return Err(Error::Checkpoint(format!("{name}: rank {rank}")));
        }
        let (rr, cc) = (r.u64()? as usize, r.u64()? as usize);
        if (rr, cc) != (rows, cols) {
            return Err(Error::Checkpoint(format!("{name}: shape {rr}x{cc}, expected {rows}x{cols}")));
        }
        let data = (0..rows * cols).map(|_| r.f32()).collect::<Result<Vec<_>>>()?;
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("checkpoint tensor {name}")));
        }
        params.insert(name, Mat::from_vec(rows, cols, data));
    }
    if !r.done() {
        return Err(Error::Checkpoint("trailing bytes".into()));
    }
    Ok(Model { config, params })
}
