//! Tape-based reverse-mode differentiation over dense row-major matrices.
//!
//! A [`Tape`] records every operation of one forward pass. Parameters are
//! borrowed from a [`ParamStore`] rather than copied, and [`Tape::backward`]
//! returns their gradients aligned with the store's tensor order. The engine
//! is generic over [`Real`] so the same model code runs in `f32` for training
//! and in `f64` for finite-difference verification.

use std::collections::HashMap;
use std::fmt::Debug;
use std::iter::Sum;
use std::ops::{AddAssign, MulAssign, SubAssign};

use num_traits::{Float, FromPrimitive, ToPrimitive};

/// Floating-point element type of the engine.
pub trait Real:
    Float + FromPrimitive + ToPrimitive + AddAssign + SubAssign + MulAssign + Sum + Default + Debug + Send + Sync + 'static
{
    /// `c = alpha * a @ b + beta * c` with explicit strides.
    #[allow(clippy::too_many_arguments)]
    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: &[Self],
        rsa: usize,
        csa: usize,
        b: &[Self],
        rsb: usize,
        csb: usize,
        beta: Self,
        c: &mut [Self],
        rsc: usize,
        csc: usize,
    );

    fn lit(v: f64) -> Self {
        Self::from_f64(v).expect("representable")
    }
}

macro_rules! impl_real {
    ($t:ty, $f:path) => {
        impl Real for $t {
            fn gemm(
                m: usize,
                k: usize,
                n: usize,
                alpha: Self,
                a: &[Self],
                rsa: usize,
                csa: usize,
                b: &[Self],
                rsb: usize,
                csb: usize,
                beta: Self,
                c: &mut [Self],
                rsc: usize,
                csc: usize,
            ) {
                if m == 0 || n == 0 {
                    return;
                }
                let span = |r: usize, c: usize, rs: usize, cs: usize| (r - 1) * rs + (c - 1) * cs + 1;
                if k > 0 {
                    assert!(a.len() >= span(m, k, rsa, csa) && b.len() >= span(k, n, rsb, csb));
                }
                assert!(c.len() >= span(m, n, rsc, csc));
                // SAFETY: the asserts above keep every strided access in bounds.
                unsafe {
                    $f(
                        m,
                        k,
                        n,
                        alpha,
                        a.as_ptr(),
                        rsa as isize,
                        csa as isize,
                        b.as_ptr(),
                        rsb as isize,
                        csb as isize,
                        beta,
                        c.as_mut_ptr(),
                        rsc as isize,
                        csc as isize,
                    )
                }
            }
        }
    };
}

impl_real!(f32, matrixmultiply::sgemm);
impl_real!(f64, matrixmultiply::dgemm);

/// Dense row-major matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct Mat<R> {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<R>,
}

impl<R: Real> Mat<R> {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![R::zero(); rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<R>) -> Self {
        assert_eq!(data.len(), rows * cols, "matrix data length");
        Self { rows, cols, data }
    }

    pub fn from_f64(rows: usize, cols: usize, data: &[f64]) -> Self {
        Self::from_vec(rows, cols, data.iter().map(|&v| R::lit(v)).collect())
    }

    pub fn scalar(v: R) -> Self {
        Self::from_vec(1, 1, vec![v])
    }

    pub fn at(&self, r: usize, c: usize) -> R {
        self.data[r * self.cols + c]
    }

    pub fn row(&self, r: usize) -> &[R] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    fn add_assign(&mut self, other: &Mat<R>) {
        debug_assert_eq!(self.shape(), other.shape());
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += *b;
        }
    }

    pub fn cast<S: Real>(&self) -> Mat<S> {
        Mat {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|v| S::from_f64(v.to_f64().unwrap_or(f64::NAN)).expect("cast")).collect(),
        }
    }
}

/// Named, ordered tensor registry.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamStore<R> {
    names: Vec<String>,
    tensors: Vec<Mat<R>>,
    index: HashMap<String, usize>,
}

impl<R: Real> Default for ParamStore<R> {
    fn default() -> Self {
        Self {
            names: Vec::new(),
            tensors: Vec::new(),
            index: HashMap::new(),
        }
    }
}

impl<R: Real> ParamStore<R> {
    pub fn insert(&mut self, name: impl Into<String>, value: Mat<R>) -> usize {
        let name = name.into();
        assert!(!self.index.contains_key(&name), "duplicate tensor name {name}");
        let id = self.tensors.len();
        self.index.insert(name.clone(), id);
        self.names.push(name);
        self.tensors.push(value);
        id
    }

    pub fn id(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    /// Panics when `name` is not registered; model code only asks for its own names.
    pub fn expect_id(&self, name: &str) -> usize {
        self.id(name).unwrap_or_else(|| panic!("unregistered tensor {name}"))
    }

    pub fn get(&self, name: &str) -> Option<&Mat<R>> {
        self.id(name).map(|i| &self.tensors[i])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Mat<R>> {
        self.id(name).map(move |i| &mut self.tensors[i])
    }

    pub fn tensor(&self, id: usize) -> &Mat<R> {
        &self.tensors[id]
    }

    pub fn tensor_mut(&mut self, id: usize) -> &mut Mat<R> {
        &mut self.tensors[id]
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Mat<R>)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(Mat::len).sum()
    }

    pub fn cast<S: Real>(&self) -> ParamStore<S> {
        ParamStore {
            names: self.names.clone(),
            tensors: self.tensors.iter().map(Mat::cast).collect(),
            index: self.index.clone(),
        }
    }
}

/// Gradients aligned with a [`ParamStore`]; `None` means exactly zero.
#[derive(Clone, Debug)]
pub struct Gradients<R> {
    pub tensors: Vec<Option<Mat<R>>>,
}

impl<R: Real> Gradients<R> {
    pub fn empty(n: usize) -> Self {
        Self {
            tensors: vec![None; n],
        }
    }

    /// Adds `other` into `self`.
    pub fn accumulate(&mut self, other: &Gradients<R>) {
        for (a, b) in self.tensors.iter_mut().zip(&other.tensors) {
            if let Some(b) = b {
                match a {
                    Some(a) => a.add_assign(b),
                    None => *a = Some(b.clone()),
                }
            }
        }
    }

    pub fn scale(&mut self, s: R) {
        for t in self.tensors.iter_mut().flatten() {
            t.data.iter_mut().for_each(|v| *v *= s);
        }
    }

    pub fn global_norm(&self) -> R {
        self.tensors
            .iter()
            .flatten()
            .flat_map(|t| t.data.iter())
            .map(|v| *v * *v)
            .sum::<R>()
            .sqrt()
    }

    /// Dense view of tensor `id`, zeros when absent.
    pub fn dense(&self, id: usize, like: &Mat<R>) -> Mat<R> {
        self.tensors[id].clone().unwrap_or_else(|| Mat::zeros(like.rows, like.cols))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Clone, Copy, Debug)]
enum Unary {
    Tanh,
    Sigmoid,
    Gelu,
    Exp,
    Softplus,
}

#[derive(Debug)]
enum Op<R> {
    Constant,
    Param(usize),
    MatMul(Var, Var),
    /// `a @ bᵀ`
    MatMulNT(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    /// `a + row` broadcast over rows.
    AddRow(Var, Var),
    /// `a * row` broadcast over rows.
    MulRow(Var, Var),
    /// `scale * a + shift`
    Affine(Var, R),
    /// Elementwise product with a fixed matrix (dropout masks).
    MulConst(Var, Mat<R>),
    Unary(Var, Unary),
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    SliceCols(Var, usize),
    SliceRows(Var, usize),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Mat<R>,
        rstd: Vec<R>,
    },
    MaskedSoftmax(Var),
    BearingBias {
        lambda: Var,
        w: Var,
        head: usize,
        cos: std::sync::Arc<Mat<R>>,
        sin: std::sync::Arc<Mat<R>>,
    },
    CrossEntropy {
        scores: Var,
        label: usize,
        probs: Vec<R>,
        clamped: bool,
    },
    DirectionLoss {
        v: Var,
        target: [R; 2],
        norm: R,
    },
}

struct Node<R> {
    value: Mat<R>,
    op: Op<R>,
}

pub const CE_CLAMP: f64 = 1e-12;
pub const LN_EPS: f64 = 1e-5;
pub const DIR_EPS: f64 = 1e-8;

pub struct Tape<'p, R: Real> {
    params: &'p ParamStore<R>,
    nodes: Vec<Node<R>>,
    param_vars: HashMap<usize, Var>,
    clamped: bool,
}

fn sigmoid<R: Real>(x: R) -> R {
    if x >= R::zero() {
        R::one() / (R::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (R::one() + e)
    }
}

fn softplus<R: Real>(x: R) -> R {
    x.max(R::zero()) + (-x.abs()).exp().ln_1p()
}

fn gelu_parts<R: Real>(x: R) -> (R, R) {
    let c = R::lit((2.0 / std::f64::consts::PI).sqrt());
    let k = R::lit(0.044715);
    let half = R::lit(0.5);
    let u = c * (x + k * x * x * x);
    let t = u.tanh();
    let y = half * x * (R::one() + t);
    let dy = half * (R::one() + t) + half * x * (R::one() - t * t) * c * (R::one() + R::lit(3.0) * k * x * x);
    (y, dy)
}

impl<'p, R: Real> Tape<'p, R> {
    pub fn new(params: &'p ParamStore<R>) -> Self {
        Self {
            params,
            nodes: Vec::with_capacity(512),
            param_vars: HashMap::new(),
            clamped: false,
        }
    }

    fn push(&mut self, value: Mat<R>, op: Op<R>) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Mat<R> {
        match self.nodes[v.0].op {
            Op::Param(id) => self.params.tensor(id),
            _ => &self.nodes[v.0].value,
        }
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.value(v).shape()
    }

    /// True when a cross-entropy term hit the probability floor.
    pub fn clamped(&self) -> bool {
        self.clamped
    }

    pub fn constant(&mut self, m: Mat<R>) -> Var {
        self.push(m, Op::Constant)
    }

    pub fn param(&mut self, id: usize) -> Var {
        if let Some(v) = self.param_vars.get(&id) {
            return *v;
        }
        let v = self.push(Mat::zeros(0, 0), Op::Param(id));
        self.param_vars.insert(id, v);
        v
    }

    pub fn param_named(&mut self, name: &str) -> Var {
        let id = self.params.expect_id(name);
        self.param(id)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (av, bv) = (self.value(a), self.value(b));
        assert_eq!(av.cols, bv.rows, "matmul inner dims");
        let mut out = Mat::zeros(av.rows, bv.cols);
        R::gemm(
            av.rows, av.cols, bv.cols, R::one(), &av.data, av.cols, 1, &bv.data, bv.cols, 1, R::zero(), &mut out.data,
            bv.cols, 1,
        );
        self.push(out, Op::MatMul(a, b))
    }

    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Var {
        let (av, bv) = (self.value(a), self.value(b));
        assert_eq!(av.cols, bv.cols, "matmul_nt inner dims");
        let mut out = Mat::zeros(av.rows, bv.rows);
        R::gemm(
            av.rows, av.cols, bv.rows, R::one(), &av.data, av.cols, 1, &bv.data, 1, bv.cols, R::zero(), &mut out.data,
            bv.rows, 1,
        );
        self.push(out, Op::MatMulNT(a, b))
    }

    fn zip(&mut self, a: Var, b: Var, f: impl Fn(R, R) -> R, op: Op<R>) -> Var {
        let (av, bv) = (self.value(a), self.value(b));
        assert_eq!(av.shape(), bv.shape(), "elementwise shapes");
        let data = av.data.iter().zip(&bv.data).map(|(x, y)| f(*x, *y)).collect();
        let out = Mat::from_vec(av.rows, av.cols, data);
        self.push(out, op)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        self.zip(a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        self.zip(a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        self.zip(a, b, |x, y| x * y, Op::Mul(a, b))
    }

    fn row_op(&mut self, a: Var, r: Var, f: impl Fn(R, R) -> R, op: Op<R>) -> Var {
        let (av, rv) = (self.value(a), self.value(r));
        assert!(rv.rows == 1 && rv.cols == av.cols, "row broadcast shape");
        let data = av
            .data
            .chunks(av.cols.max(1))
            .flat_map(|row| row.iter().zip(&rv.data).map(|(x, y)| f(*x, *y)).collect::<Vec<_>>())
            .collect();
        let out = Mat::from_vec(av.rows, av.cols, data);
        self.push(out, op)
    }

    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        self.row_op(a, row, |x, y| x + y, Op::AddRow(a, row))
    }

    pub fn mul_row(&mut self, a: Var, row: Var) -> Var {
        self.row_op(a, row, |x, y| x * y, Op::MulRow(a, row))
    }

    /// `scale * a + shift`
    pub fn affine(&mut self, a: Var, scale: R, shift: R) -> Var {
        let av = self.value(a);
        let out = Mat::from_vec(av.rows, av.cols, av.data.iter().map(|x| scale * *x + shift).collect());
        self.push(out, Op::Affine(a, scale))
    }

    pub fn scale(&mut self, a: Var, s: R) -> Var {
        self.affine(a, s, R::zero())
    }

    pub fn mul_const(&mut self, a: Var, m: Mat<R>) -> Var {
        let av = self.value(a);
        assert_eq!(av.shape(), m.shape());
        let out = Mat::from_vec(av.rows, av.cols, av.data.iter().zip(&m.data).map(|(x, y)| *x * *y).collect());
        self.push(out, Op::MulConst(a, m))
    }

    fn unary(&mut self, a: Var, u: Unary) -> Var {
        let av = self.value(a);
        let f: fn(R) -> R = match u {
            Unary::Tanh => |x: R| x.tanh(),
            Unary::Sigmoid => sigmoid,
            Unary::Gelu => |x: R| gelu_parts(x).0,
            Unary::Exp => |x: R| x.exp(),
            Unary::Softplus => softplus,
        };
        let out = Mat::from_vec(av.rows, av.cols, av.data.iter().map(|x| f(*x)).collect());
        self.push(out, Op::Unary(a, u))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Tanh)
    }
    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Sigmoid)
    }
    pub fn gelu(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Gelu)
    }
    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Exp)
    }
    pub fn softplus(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Softplus)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let rows = self.value(parts[0]).rows;
        let cols: usize = parts.iter().map(|p| self.value(*p).cols).sum();
        let mut out = Mat::zeros(rows, cols);
        let mut off = 0;
        for p in parts {
            let pv = self.value(*p);
            assert_eq!(pv.rows, rows, "concat_cols rows");
            for r in 0..rows {
                out.data[r * cols + off..r * cols + off + pv.cols].copy_from_slice(pv.row(r));
            }
            off += pv.cols;
        }
        self.push(out, Op::ConcatCols(parts.to_vec()))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        let cols = self.value(parts[0]).cols;
        let mut data = Vec::new();
        let mut rows = 0;
        for p in parts {
            let pv = self.value(*p);
            assert_eq!(pv.cols, cols, "concat_rows cols");
            data.extend_from_slice(&pv.data);
            rows += pv.rows;
        }
        self.push(Mat::from_vec(rows, cols, data), Op::ConcatRows(parts.to_vec()))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Var {
        let av = self.value(a);
        assert!(start <= end && end <= av.cols);
        let w = end - start;
        let mut data = Vec::with_capacity(av.rows * w);
        for r in 0..av.rows {
            data.extend_from_slice(&av.row(r)[start..end]);
        }
        let out = Mat::from_vec(av.rows, w, data);
        self.push(out, Op::SliceCols(a, start))
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, end: usize) -> Var {
        let av = self.value(a);
        assert!(start <= end && end <= av.rows);
        let out = Mat::from_vec(end - start, av.cols, av.data[start * av.cols..end * av.cols].to_vec());
        self.push(out, Op::SliceRows(a, start))
    }

    /// Row-wise layer normalization with affine `gamma`, `beta` (both `1 x n`).
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Var {
        let xv = self.value(x);
        let (g, b) = (self.value(gamma), self.value(beta));
        let n = xv.cols;
        let nf = R::from_usize(n).expect("usize");
        let mut xhat = Mat::zeros(xv.rows, n);
        let mut rstd = Vec::with_capacity(xv.rows);
        let mut out = Mat::zeros(xv.rows, n);
        for r in 0..xv.rows {
            let row = xv.row(r);
            let mean = row.iter().copied().sum::<R>() / nf;
            let var = row.iter().map(|v| (*v - mean) * (*v - mean)).sum::<R>() / nf;
            let rs = R::one() / (var + R::lit(LN_EPS)).sqrt();
            rstd.push(rs);
            for c in 0..n {
                let h = (row[c] - mean) * rs;
                xhat.data[r * n + c] = h;
                out.data[r * n + c] = h * g.data[c] + b.data[c];
            }
        }
        self.push(
            out,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            },
        )
    }

    /// Row-wise softmax over entries where `mask` is true; masked entries are
    /// exactly zero.
    pub fn masked_softmax(&mut self, x: Var, mask: &[bool]) -> Var {
        let xv = self.value(x);
        assert_eq!(mask.len(), xv.len());
        let mut out = Mat::zeros(xv.rows, xv.cols);
        for r in 0..xv.rows {
            let row = xv.row(r);
            let m = &mask[r * xv.cols..(r + 1) * xv.cols];
            let mx = row
                .iter()
                .zip(m)
                .filter(|(_, k)| **k)
                .map(|(v, _)| *v)
                .fold(R::neg_infinity(), R::max);
            if mx == R::neg_infinity() {
                continue;
            }
            let mut sum = R::zero();
            for c in 0..xv.cols {
                if m[c] {
                    let e = (row[c] - mx).exp();
                    out.data[r * xv.cols + c] = e;
                    sum += e;
                }
            }
            for c in 0..xv.cols {
                out.data[r * xv.cols + c] = out.data[r * xv.cols + c] / sum;
            }
        }
        self.push(out, Op::MaskedSoftmax(x))
    }

    /// Bias `lambda[head] * (w[head,0] * cos + w[head,1] * sin)` for fixed
    /// (already row-centered) bearing matrices.
    pub fn bearing_bias(
        &mut self,
        lambda: Var,
        w: Var,
        head: usize,
        cos: std::sync::Arc<Mat<R>>,
        sin: std::sync::Arc<Mat<R>>,
    ) -> Var {
        let l = self.value(lambda).data[head];
        let wv = self.value(w);
        let (w0, w1) = (wv.data[head * 2], wv.data[head * 2 + 1]);
        let data = cos.data.iter().zip(&sin.data).map(|(c, s)| l * (w0 * *c + w1 * *s)).collect();
        let out = Mat::from_vec(cos.rows, cos.cols, data);
        self.push(
            out,
            Op::BearingBias {
                lambda,
                w,
                head,
                cos,
                sin,
            },
        )
    }

    /// `-ln p[label]` for `p = softmax(scores)`, scores shaped `C x 1`.
    pub fn cross_entropy(&mut self, scores: Var, label: usize) -> Var {
        let sv = self.value(scores);
        let mx = sv.data.iter().copied().fold(R::neg_infinity(), R::max);
        let exps: Vec<R> = sv.data.iter().map(|s| (*s - mx).exp()).collect();
        let sum: R = exps.iter().copied().sum();
        let probs: Vec<R> = exps.iter().map(|e| *e / sum).collect();
        let p = probs[label];
        let clamped = p < R::lit(CE_CLAMP);
        if clamped {
            self.clamped = true;
            log::warn!("label probability {:?} clamped before log", p.to_f64());
        }
        let loss = -p.max(R::lit(CE_CLAMP)).ln();
        self.push(
            Mat::scalar(loss),
            Op::CrossEntropy {
                scores,
                label,
                probs,
                clamped,
            },
        )
    }

    /// `1 - normalize(v) · target` for `v` shaped `1 x 2`.
    pub fn direction_loss(&mut self, v: Var, target: [R; 2]) -> Var {
        let vv = self.value(v);
        let norm = (vv.data[0] * vv.data[0] + vv.data[1] * vv.data[1] + R::lit(DIR_EPS)).sqrt();
        let loss = R::one() - (vv.data[0] * target[0] + vv.data[1] * target[1]) / norm;
        self.push(Mat::scalar(loss), Op::DirectionLoss { v, target, norm })
    }

    /// Reverse pass from scalar `loss` with seed `seed`. Returns parameter
    /// gradients aligned with the store.
    pub fn backward(&self, loss: Var, seed: R) -> Gradients<R> {
        assert_eq!(self.shape(loss), (1, 1), "backward from a scalar");
        let mut grads: Vec<Option<Mat<R>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Mat::scalar(seed));
        let mut out = Gradients::empty(self.params.len());

        fn acc<R: Real>(grads: &mut [Option<Mat<R>>], v: Var, g: Mat<R>) {
            match &mut grads[v.0] {
                Some(existing) => existing.add_assign(&g),
                slot => *slot = Some(g),
            }
        }

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            match &node.op {
                Op::Constant => {}
                Op::Param(id) => out.tensors[*id] = Some(g),
                Op::MatMul(a, b) => {
                    let (av, bv) = (self.value(*a), self.value(*b));
                    let (m, k, n) = (av.rows, av.cols, bv.cols);
                    // dA = G Bᵀ ; dB = Aᵀ G
                    let mut da = Mat::zeros(m, k);
                    R::gemm(m, n, k, R::one(), &g.data, n, 1, &bv.data, 1, n, R::zero(), &mut da.data, k, 1);
                    let mut db = Mat::zeros(k, n);
                    R::gemm(k, m, n, R::one(), &av.data, 1, k, &g.data, n, 1, R::zero(), &mut db.data, n, 1);
                    acc(&mut grads, *a, da);
                    acc(&mut grads, *b, db);
                }
                Op::MatMulNT(a, b) => {
                    let (av, bv) = (self.value(*a), self.value(*b));
                    let (m, k, n) = (av.rows, av.cols, bv.rows);
                    // C = A Bᵀ: dA = G B ; dB = Gᵀ A
                    let mut da = Mat::zeros(m, k);
                    R::gemm(m, n, k, R::one(), &g.data, n, 1, &bv.data, k, 1, R::zero(), &mut da.data, k, 1);
                    let mut db = Mat::zeros(n, k);
                    R::gemm(n, m, k, R::one(), &g.data, 1, n, &av.data, k, 1, R::zero(), &mut db.data, k, 1);
                    acc(&mut grads, *a, da);
                    acc(&mut grads, *b, db);
                }
                Op::Add(a, b) => {
                    acc(&mut grads, *b, g.clone());
                    acc(&mut grads, *a, g);
                }
                Op::Sub(a, b) => {
                    let mut neg = g.clone();
                    neg.data.iter_mut().for_each(|v| *v = -*v);
                    acc(&mut grads, *b, neg);
                    acc(&mut grads, *a, g);
                }
                Op::Mul(a, b) => {
                    let (av, bv) = (self.value(*a), self.value(*b));
                    let ga = Mat::from_vec(g.rows, g.cols, g.data.iter().zip(&bv.data).map(|(x, y)| *x * *y).collect());
                    let gb = Mat::from_vec(g.rows, g.cols, g.data.iter().zip(&av.data).map(|(x, y)| *x * *y).collect());
                    acc(&mut grads, *a, ga);
                    acc(&mut grads, *b, gb);
                }
                Op::AddRow(a, r) => {
                    let mut gr = Mat::zeros(1, g.cols);
                    for row in g.data.chunks(g.cols.max(1)) {
                        for (s, v) in gr.data.iter_mut().zip(row) {
                            *s += *v;
                        }
                    }
                    acc(&mut grads, *r, gr);
                    acc(&mut grads, *a, g);
                }
                Op::MulRow(a, r) => {
                    let (av, rv) = (self.value(*a), self.value(*r));
                    let mut gr = Mat::zeros(1, g.cols);
                    let mut ga = Mat::zeros(g.rows, g.cols);
                    for i in 0..g.rows {
                        for c in 0..g.cols {
                            let gv = g.data[i * g.cols + c];
                            gr.data[c] += gv * av.data[i * g.cols + c];
                            ga.data[i * g.cols + c] = gv * rv.data[c];
                        }
                    }
                    acc(&mut grads, *r, gr);
                    acc(&mut grads, *a, ga);
                }
                Op::Affine(a, s) => {
                    let mut ga = g;
                    ga.data.iter_mut().for_each(|v| *v *= *s);
                    acc(&mut grads, *a, ga);
                }
                Op::MulConst(a, m) => {
                    let mut ga = g;
                    ga.data.iter_mut().zip(&m.data).for_each(|(v, k)| *v *= *k);
                    acc(&mut grads, *a, ga);
                }
                Op::Unary(a, u) => {
                    let y = &node.value;
                    let x = self.value(*a);
                    let data = g
                        .data
                        .iter()
                        .zip(&y.data)
                        .zip(&x.data)
                        .map(|((gv, yv), xv)| {
                            let d = match u {
                                Unary::Tanh => R::one() - *yv * *yv,
                                Unary::Sigmoid => *yv * (R::one() - *yv),
                                Unary::Gelu => gelu_parts(*xv).1,
                                Unary::Exp => *yv,
                                Unary::Softplus => sigmoid(*xv),
                            };
                            *gv * d
                        })
                        .collect();
                    acc(&mut grads, *a, Mat::from_vec(g.rows, g.cols, data));
                }
                Op::ConcatCols(parts) => {
                    let mut off = 0;
                    for p in parts {
                        let w = self.value(*p).cols;
                        let mut gp = Mat::zeros(g.rows, w);
                        for r in 0..g.rows {
                            gp.data[r * w..(r + 1) * w].copy_from_slice(&g.data[r * g.cols + off..r * g.cols + off + w]);
                        }
                        off += w;
                        acc(&mut grads, *p, gp);
                    }
                }
                Op::ConcatRows(parts) => {
                    let mut off = 0;
                    for p in parts {
                        let n = self.value(*p).len();
                        let rows = self.value(*p).rows;
                        acc(&mut grads, *p, Mat::from_vec(rows, g.cols, g.data[off..off + n].to_vec()));
                        off += n;
                    }
                }
                Op::SliceCols(a, start) => {
                    let av = self.value(*a);
                    let mut ga = Mat::zeros(av.rows, av.cols);
                    for r in 0..g.rows {
                        ga.data[r * av.cols + start..r * av.cols + start + g.cols].copy_from_slice(g.row(r));
                    }
                    acc(&mut grads, *a, ga);
                }
                Op::SliceRows(a, start) => {
                    let av = self.value(*a);
                    let mut ga = Mat::zeros(av.rows, av.cols);
                    ga.data[start * av.cols..start * av.cols + g.len()].copy_from_slice(&g.data);
                    acc(&mut grads, *a, ga);
                }
                Op::LayerNorm {
                    x,
                    gamma,
                    beta,
                    xhat,
                    rstd,
                } => {
                    let gm = self.value(*gamma);
                    let n = g.cols;
                    let nf = R::from_usize(n).expect("usize");
                    let mut dx = Mat::zeros(g.rows, n);
                    let mut dg = Mat::zeros(1, n);
                    let mut db = Mat::zeros(1, n);
                    let mut dxhat = vec![R::zero(); n];
                    for r in 0..g.rows {
                        let gr = g.row(r);
                        let xh = xhat.row(r);
                        let mut s1 = R::zero();
                        let mut s2 = R::zero();
                        for c in 0..n {
                            dg.data[c] += gr[c] * xh[c];
                            db.data[c] += gr[c];
                            dxhat[c] = gr[c] * gm.data[c];
                            s1 += dxhat[c];
                            s2 += dxhat[c] * xh[c];
                        }
                        let (m1, m2) = (s1 / nf, s2 / nf);
                        for c in 0..n {
                            dx.data[r * n + c] = rstd[r] * (dxhat[c] - m1 - xh[c] * m2);
                        }
                    }
                    acc(&mut grads, *x, dx);
                    acc(&mut grads, *gamma, dg);
                    acc(&mut grads, *beta, db);
                }
                Op::MaskedSoftmax(a) => {
                    let y = &node.value;
                    let mut ga = Mat::zeros(g.rows, g.cols);
                    for r in 0..g.rows {
                        let (yr, gr) = (y.row(r), g.row(r));
                        let dot: R = yr.iter().zip(gr).map(|(p, q)| *p * *q).sum();
                        for c in 0..g.cols {
                            ga.data[r * g.cols + c] = yr[c] * (gr[c] - dot);
                        }
                    }
                    acc(&mut grads, *a, ga);
                }
                Op::BearingBias {
                    lambda,
                    w,
                    head,
                    cos,
                    sin,
                } => {
                    let lv = self.value(*lambda);
                    let wv = self.value(*w);
                    let l = lv.data[*head];
                    let (w0, w1) = (wv.data[head * 2], wv.data[head * 2 + 1]);
                    let gc: R = g.data.iter().zip(&cos.data).map(|(a, b)| *a * *b).sum();
                    let gs: R = g.data.iter().zip(&sin.data).map(|(a, b)| *a * *b).sum();
                    let mut dl = Mat::zeros(lv.rows, lv.cols);
                    dl.data[*head] = w0 * gc + w1 * gs;
                    let mut dw = Mat::zeros(wv.rows, wv.cols);
                    dw.data[head * 2] = l * gc;
                    dw.data[head * 2 + 1] = l * gs;
                    acc(&mut grads, *lambda, dl);
                    acc(&mut grads, *w, dw);
                }
                Op::CrossEntropy {
                    scores,
                    label,
                    probs,
                    clamped,
                } => {
                    let gv = g.data[0];
                    let mut gs = Mat::zeros(probs.len(), 1);
                    if !clamped {
                        for (k, p) in probs.iter().enumerate() {
                            let onehot = if k == *label { R::one() } else { R::zero() };
                            gs.data[k] = gv * (*p - onehot);
                        }
                    }
                    acc(&mut grads, *scores, gs);
                }
                Op::DirectionLoss { v, target, norm } => {
                    let vv = self.value(*v);
                    let gv = g.data[0];
                    let dhat = [vv.data[0] / *norm, vv.data[1] / *norm];
                    let dot = dhat[0] * target[0] + dhat[1] * target[1];
                    let gvec = (0..2)
                        .map(|k| -gv * (target[k] - dhat[k] * dot) / *norm)
                        .collect();
                    acc(&mut grads, *v, Mat::from_vec(1, 2, gvec));
                }
            }
        }
        out
    }
}
