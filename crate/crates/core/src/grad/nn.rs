//! Layers built on the tape: linear, layer norm, multi-head attention and
//! patch embedding.

use rand::Rng;

use super::param::{ParamId, ParamStore};
use super::tape::{Tape, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Init {
    XavierUniform,
    Zeros,
}

/// `y = x · W + b` with `W: [in, out]`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        init: Init,
        rng: &mut R,
    ) -> Result<Self> {
        let w = match init {
            Init::XavierUniform => {
                let a = (6.0 / (in_dim + out_dim) as f64).sqrt();
                Tensor::uniform(vec![in_dim, out_dim], -a, a, rng)
            }
            Init::Zeros => Tensor::zeros(vec![in_dim, out_dim]),
        };
        let weight = store.insert(format!("{name}.weight"), w)?;
        let bias = store.insert(format!("{name}.bias"), Tensor::zeros(vec![out_dim]))?;
        Ok(Self { weight, bias, in_dim, out_dim })
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let w = tape.param(store, self.weight);
        let b = tape.param(store, self.bias);
        let y = tape.matmul(x, w)?;
        tape.add_row(y, b)
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub eps: f64,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize, eps: f64) -> Result<Self> {
        let gamma = store.insert(format!("{name}.gamma"), Tensor::full(vec![dim], 1.0))?;
        let beta = store.insert(format!("{name}.beta"), Tensor::zeros(vec![dim]))?;
        Ok(Self { gamma, beta, eps })
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let g = tape.param(store, self.gamma);
        let b = tape.param(store, self.beta);
        layer_norm(tape, x, Some((g, b)), self.eps)
    }
}

/// Layer normalization over the last axis, with an optional `(gamma, beta)`
/// affine.
pub fn layer_norm(tape: &mut Tape, x: Var, affine: Option<(Var, Var)>, eps: f64) -> Result<Var> {
    if tape.shape(x).last().copied().unwrap_or(0) == 0 {
        return Err(Error::dim("layer_norm over an empty axis"));
    }
    let y = tape.normalize_rows(x, eps);
    match affine {
        Some((g, b)) => {
            let y = tape.mul_row(y, g)?;
            tape.add_row(y, b)
        }
        None => Ok(y),
    }
}

/// Scaled dot-product attention with `heads` heads.
/// `q: [nq, d]`, `k, v: [nk, d]`, output `[nq, d]`.
pub fn attention(tape: &mut Tape, q: Var, k: Var, v: Var, heads: usize) -> Result<Var> {
    let (sq, sk, sv) = (tape.shape(q).to_vec(), tape.shape(k).to_vec(), tape.shape(v).to_vec());
    if sq.len() != 2 || sk.len() != 2 || sv.len() != 2 {
        return Err(Error::dim(format!("attention expects matrices: {sq:?} {sk:?} {sv:?}")));
    }
    let d = sq[1];
    if sk[1] != d || sv[1] != d {
        return Err(Error::dim(format!("attention width: q {sq:?}, k {sk:?}, v {sv:?}")));
    }
    if sk[0] != sv[0] {
        return Err(Error::dim(format!("key/value rows differ: {} vs {}", sk[0], sv[0])));
    }
    if heads == 0 || d % heads != 0 {
        return Err(Error::dim(format!("width {d} not divisible by {heads} heads")));
    }
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut outs = Vec::with_capacity(heads);
    for h in 0..heads {
        let (qh, kh, vh) = if heads == 1 {
            (q, k, v)
        } else {
            (
                tape.slice_cols(q, h * dh, dh)?,
                tape.slice_cols(k, h * dh, dh)?,
                tape.slice_cols(v, h * dh, dh)?,
            )
        };
        let scores = tape.matmul_nt(qh, kh)?;
        let scores = tape.scale(scores, scale);
        let w = tape.softmax(scores);
        outs.push(tape.matmul(w, vh)?);
    }
    if heads == 1 {
        Ok(outs[0])
    } else {
        tape.concat_cols(&outs)
    }
}

/// Flat source indices that unfold `[f, h, w, c]` into
/// `[f * (h/p) * (w/p), p * p * c]` patch rows. Token order is
/// (frame, patch row, patch col); within a row, (dy, dx, channel).
pub fn patch_indices(shape: &[usize], patch: usize) -> Result<Vec<usize>> {
    let [f, h, w, c] = *shape else {
        return Err(Error::dim(format!("patch input must be [f, h, w, c], got {shape:?}")));
    };
    if patch == 0 || h % patch != 0 || w % patch != 0 {
        return Err(Error::dim(format!("spatial dims {h}x{w} not divisible by patch {patch}")));
    }
    let (ph, pw) = (h / patch, w / patch);
    let mut idx = Vec::with_capacity(f * h * w * c);
    for fi in 0..f {
        for py in 0..ph {
            for px in 0..pw {
                for dy in 0..patch {
                    for dx in 0..patch {
                        let (y, x) = (py * patch + dy, px * patch + dx);
                        let base = ((fi * h + y) * w + x) * c;
                        idx.extend(base..base + c);
                    }
                }
            }
        }
    }
    Ok(idx)
}

/// Inverse permutation of [`patch_indices`].
pub fn unpatch_indices(shape: &[usize], patch: usize) -> Result<Vec<usize>> {
    let fwd = patch_indices(shape, patch)?;
    let mut inv = vec![0; fwd.len()];
    for (dst, &src) in fwd.iter().enumerate() {
        inv[src] = dst;
    }
    Ok(inv)
}

/// Non-overlapping patch unfold followed by a shared linear map.
#[derive(Clone, Debug)]
pub struct PatchEmbed {
    pub proj: Linear,
    pub patch: usize,
    pub channels: usize,
}

impl PatchEmbed {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        channels: usize,
        patch: usize,
        dim: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let proj = Linear::new(store, name, patch * patch * channels, dim, Init::XavierUniform, rng)?;
        Ok(Self { proj, patch, channels })
    }

    /// `frames: [f, h, w, c]` → `[f * (h/p) * (w/p), dim]`.
    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, frames: Var) -> Result<Var> {
        let shape = tape.shape(frames).to_vec();
        if shape.len() != 4 || shape[3] != self.channels {
            return Err(Error::dim(format!(
                "patch embed expects [f, h, w, {}], got {shape:?}",
                self.channels
            )));
        }
        let idx = patch_indices(&shape, self.patch)?;
        let tokens = shape[0] * (shape[1] / self.patch) * (shape[2] / self.patch);
        let rows = tape.gather(frames, idx, vec![tokens, self.patch * self.patch * self.channels])?;
        self.proj.forward(tape, store, rows)
    }
}
