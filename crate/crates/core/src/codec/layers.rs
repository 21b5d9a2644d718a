//! Transformer building blocks, once on the tape and once on plain slices for
//! the cached decoding path.

use rand::Rng;

use crate::diffcore::kernels::{self, dot, layer_norm_row, softmax_in_place, vec_mat};
use crate::diffcore::{DiffError, ParamStore, Tape, Tensor, Var};

/// Additive mask value for disallowed attention or output entries.
pub const MASKED: f64 = -1e9;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DenseIdx {
    pub w: usize,
    pub b: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NormIdx {
    pub gain: usize,
    pub bias: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AttnIdx {
    pub norm: NormIdx,
    pub q: usize,
    pub k: usize,
    pub v: usize,
    pub o: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FfnIdx {
    pub norm: NormIdx,
    pub up: DenseIdx,
    pub down: DenseIdx,
}

pub fn add_dense<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, fan_in: usize, fan_out: usize, rng: &mut R) -> DenseIdx {
    let w = store.add_normal(&format!("{name}.w"), fan_in, fan_out, (1.0 / fan_in as f64).sqrt(), rng);
    let b = store.add(format!("{name}.b"), Tensor::zeros(1, fan_out));
    DenseIdx { w, b }
}

pub fn add_norm(store: &mut ParamStore, name: &str, width: usize) -> NormIdx {
    let gain = store.add(format!("{name}.gain"), Tensor::filled(1, width, 1.0));
    let bias = store.add(format!("{name}.bias"), Tensor::zeros(1, width));
    NormIdx { gain, bias }
}

pub fn add_attention<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, d: usize, rng: &mut R) -> AttnIdx {
    let norm = add_norm(store, &format!("{name}.norm"), d);
    let std = (1.0 / d as f64).sqrt();
    let q = store.add_normal(&format!("{name}.q"), d, d, std, rng);
    let k = store.add_normal(&format!("{name}.k"), d, d, std, rng);
    let v = store.add_normal(&format!("{name}.v"), d, d, std, rng);
    let o = store.add_normal(&format!("{name}.o"), d, d, std, rng);
    AttnIdx { norm, q, k, v, o }
}

pub fn add_ffn<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, d: usize, hidden: usize, rng: &mut R) -> FfnIdx {
    FfnIdx {
        norm: add_norm(store, &format!("{name}.norm"), d),
        up: add_dense(store, &format!("{name}.up"), d, hidden, rng),
        down: add_dense(store, &format!("{name}.down"), hidden, d, rng),
    }
}

pub fn dense(tape: &mut Tape, p: &[Var], idx: DenseIdx, x: Var) -> Result<Var, DiffError> {
    let y = tape.matmul(x, p[idx.w])?;
    tape.add(y, p[idx.b])
}

pub fn norm(tape: &mut Tape, p: &[Var], idx: NormIdx, x: Var) -> Result<Var, DiffError> {
    tape.layer_norm(x, p[idx.gain], p[idx.bias])
}

/// Single-head scaled dot-product attention of normalized `x` over `memory`
/// (or over itself when `memory` is `None`), with an optional additive mask.
pub fn attention(
    tape: &mut Tape,
    p: &[Var],
    idx: AttnIdx,
    x: Var,
    memory: Option<Var>,
    mask: Option<&Tensor>,
) -> Result<Var, DiffError> {
    let a = norm(tape, p, idx.norm, x)?;
    let src = memory.unwrap_or(a);
    let q = tape.matmul(a, p[idx.q])?;
    let k = tape.matmul(src, p[idx.k])?;
    let v = tape.matmul(src, p[idx.v])?;
    let d = tape.value(q).cols();
    let s = tape.matmul_nt(q, k)?;
    let mut s = tape.scale(s, 1.0 / (d as f64).sqrt());
    if let Some(m) = mask {
        let m = tape.constant(m.clone());
        s = tape.add(s, m)?;
    }
    let w = tape.softmax(s);
    let ctx = tape.matmul(w, v)?;
    let out = tape.matmul(ctx, p[idx.o])?;
    tape.add(x, out)
}

pub fn ffn(tape: &mut Tape, p: &[Var], idx: FfnIdx, x: Var) -> Result<Var, DiffError> {
    let a = norm(tape, p, idx.norm, x)?;
    let h = dense(tape, p, idx.up, a)?;
    let h = tape.relu(h);
    let out = dense(tape, p, idx.down, h)?;
    tape.add(x, out)
}

/// `x · w + b` on plain tensors.
pub fn dense_plain(store: &ParamStore, idx: DenseIdx, x: &Tensor) -> Tensor {
    let w = store.tensor(idx.w);
    let b = store.tensor(idx.b);
    let (m, k) = x.dims();
    let n = w.cols();
    let mut out: Vec<f64> = b.data().repeat(m);
    kernels::gemm_nn(x.data(), w.data(), &mut out, m, k, n);
    Tensor::from_vec(m, n, out)
}

pub fn matmul_plain(x: &Tensor, w: &Tensor) -> Tensor {
    let (m, k) = x.dims();
    let n = w.cols();
    let mut out = vec![0.0; m * n];
    kernels::gemm_nn(x.data(), w.data(), &mut out, m, k, n);
    Tensor::from_vec(m, n, out)
}

pub fn norm_row(store: &ParamStore, idx: NormIdx, x: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; x.len()];
    layer_norm_row(x, store.tensor(idx.gain).data(), store.tensor(idx.bias).data(), &mut out);
    out
}

/// Keys and values of an attention layer for a fixed row set.
#[derive(Debug, Clone)]
pub struct KvCache {
    pub width: usize,
    pub keys: Vec<f64>,
    pub values: Vec<f64>,
}

impl KvCache {
    pub fn empty(width: usize) -> Self {
        Self {
            width,
            keys: Vec::new(),
            values: Vec::new(),
        }
    }

    pub fn rows(&self) -> usize {
        self.keys.len() / self.width
    }

    pub fn push(&mut self, store: &ParamStore, idx: AttnIdx, src: &[f64]) {
        let d = self.width;
        self.keys.extend(vec_mat(src, store.tensor(idx.k).data(), None, d));
        self.values.extend(vec_mat(src, store.tensor(idx.v).data(), None, d));
    }

    pub fn over(store: &ParamStore, idx: AttnIdx, memory: &Tensor) -> Self {
        let d = memory.cols();
        Self {
            width: d,
            keys: matmul_plain(memory, store.tensor(idx.k)).into_data(),
            values: matmul_plain(memory, store.tensor(idx.v)).into_data(),
        }
    }
}

/// One query row against a cache; returns `x + attention(x)`.
pub fn attend_row(store: &ParamStore, idx: AttnIdx, x: &[f64], normed: &[f64], cache: &KvCache) -> Vec<f64> {
    let d = cache.width;
    let q = vec_mat(normed, store.tensor(idx.q).data(), None, d);
    let scale = 1.0 / (d as f64).sqrt();
    let mut scores: Vec<f64> = (0..cache.rows())
        .map(|j| dot(&q, &cache.keys[j * d..(j + 1) * d]) * scale)
        .collect();
    softmax_in_place(&mut scores);
    let mut ctx = vec![0.0; d];
    for (j, &w) in scores.iter().enumerate() {
        for (c, &v) in ctx.iter_mut().zip(&cache.values[j * d..(j + 1) * d]) {
            *c += w * v;
        }
    }
    let out = vec_mat(&ctx, store.tensor(idx.o).data(), None, d);
    x.iter().zip(out).map(|(a, b)| a + b).collect()
}

pub fn ffn_row(store: &ParamStore, idx: FfnIdx, x: &[f64]) -> Vec<f64> {
    let a = norm_row(store, idx.norm, x);
    let up = store.tensor(idx.up.w);
    let mut h = vec_mat(&a, up.data(), Some(store.tensor(idx.up.b).data()), up.cols());
    kernels::relu_in_place(&mut h);
    let down = store.tensor(idx.down.w);
    let out = vec_mat(&h, down.data(), Some(store.tensor(idx.down.b).data()), down.cols());
    x.iter().zip(out).map(|(a, b)| a + b).collect()
}
