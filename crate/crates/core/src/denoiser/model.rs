//! Toy multi-view diffusion transformer. Each block applies, residually:
//! self-attention within a view, cross-attention to reference tokens,
//! per-frame attention across all views, and an MLP. The reference and
//! cross-view projections start at zero so both branches are exact no-ops
//! at initialization. No camera embedding is used; viewpoint information
//! arrives only through the condition channels.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::codec::Codec;
use crate::error::{Error, Result};
use crate::flow::VelocityField;
use crate::grad::{attention, unpatch_indices, Init, LayerNorm, Linear, ParamStore, PatchEmbed, Tape, Tensor, Var};

pub const LN_EPS: f64 = 1e-5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DenoiserConfig {
    pub depth: usize,
    pub dim: usize,
    pub heads: usize,
    pub patch: usize,
    pub mlp_ratio: usize,
    pub temporal_stride: usize,
    pub spatial_stride: usize,
    pub seed: u64,
}

impl Default for DenoiserConfig {
    fn default() -> Self {
        Self { depth: 2, dim: 64, heads: 4, patch: 1, mlp_ratio: 2, temporal_stride: 4, spatial_stride: 8, seed: 0 }
    }
}

impl DenoiserConfig {
    /// Desk-scale model for 16-pixel toy videos: 2×2 spatial folding keeps
    /// an 8×8 latent grid.
    pub fn toy() -> Self {
        Self { spatial_stride: 2, ..Self::default() }
    }

    pub fn codec(&self) -> Codec {
        Codec { temporal: self.temporal_stride, spatial: self.spatial_stride }
    }

    pub fn channels(&self) -> usize {
        self.codec().channels()
    }

    pub fn validate(&self) -> Result<()> {
        if self.depth == 0 || self.dim == 0 || self.patch == 0 || self.mlp_ratio == 0 {
            return Err(Error::Config("depth, dim, patch and mlp_ratio must be positive".into()));
        }
        if self.heads == 0 || self.dim % self.heads != 0 || self.dim % 2 != 0 {
            return Err(Error::Config(format!("dim {} must be even and divisible by {} heads", self.dim, self.heads)));
        }
        Codec::new(self.temporal_stride, self.spatial_stride).map(|_| ())
    }
}

/// Which residual branches run.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Branches {
    pub reference: bool,
    pub sync: bool,
}

impl Branches {
    pub const ALL: Self = Self { reference: true, sync: true };
    pub const NO_SYNC: Self = Self { reference: true, sync: false };
    pub const NONE: Self = Self { reference: false, sync: false };
}

/// Conditioning shared by all target views of one sample.
#[derive(Clone, Debug, PartialEq)]
pub struct MultiViewCond {
    /// Clean reference latent `[f', h, w, C]`.
    pub reference: Tensor,
    /// Per target view: partial-render and normal latents concatenated,
    /// `[f', h, w, 2C]`.
    pub conditions: Vec<Tensor>,
}

/// `q, k, v, o` projections around multi-head attention.
#[derive(Clone, Debug)]
pub struct AttnLayer {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
}

impl AttnLayer {
    fn new(store: &mut ParamStore, name: &str, dim: usize, zero_out: bool, rng: &mut ChaCha8Rng) -> Result<Self> {
        let x = Init::XavierUniform;
        Ok(Self {
            q: Linear::new(store, &format!("{name}.q"), dim, dim, x, rng)?,
            k: Linear::new(store, &format!("{name}.k"), dim, dim, x, rng)?,
            v: Linear::new(store, &format!("{name}.v"), dim, dim, x, rng)?,
            o: Linear::new(store, &format!("{name}.o"), dim, dim, if zero_out { Init::Zeros } else { x }, rng)?,
        })
    }

    /// `o(attn(q(xq), k(xkv), v(xkv)))`.
    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, xq: Var, xkv: Var, heads: usize) -> Result<Var> {
        let q = self.q.forward(tape, store, xq)?;
        let k = self.k.forward(tape, store, xkv)?;
        let v = self.v.forward(tape, store, xkv)?;
        let a = attention(tape, q, k, v, heads)?;
        self.o.forward(tape, store, a)
    }
}

/// `x + o(attn(LN(x), ref))`: queries from the view, keys and values from
/// reference tokens.
#[derive(Clone, Debug)]
pub struct RefAttention {
    pub norm: LayerNorm,
    pub attn: AttnLayer,
}

impl RefAttention {
    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var, reference: Var, heads: usize) -> Result<Var> {
        let (sx, sr) = (tape.shape(x).to_vec(), tape.shape(reference).to_vec());
        if sx.len() != 2 || sr.len() != 2 || sx[1] != sr[1] {
            return Err(Error::dim(format!("ref attention: tokens {sx:?} vs reference {sr:?}")));
        }
        let h = self.norm.forward(tape, store, x)?;
        let a = self.attn.forward(tape, store, h, reference, heads)?;
        tape.add(x, a)
    }
}

/// Per-frame self-attention over the union of every stream's tokens for
/// that frame, added back residually to each stream.
#[derive(Clone, Debug)]
pub struct SyncAttention {
    pub norm: LayerNorm,
    pub attn: AttnLayer,
}

fn row_block(tape: &mut Tape, x: Var, start: usize, rows: usize) -> Result<Var> {
    let cols = tape.shape(x)[1];
    tape.gather(x, (start * cols..(start + rows) * cols).collect(), vec![rows, cols])
}

impl SyncAttention {
    /// `streams[s]` is `[frames * tokens_per_frame, dim]`, frame-major.
    pub fn forward(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        streams: &[Var],
        tokens_per_frame: usize,
        heads: usize,
    ) -> Result<Vec<Var>> {
        let shape = tape.shape(*streams.first().ok_or_else(|| Error::dim("sync attention over no streams"))?).to_vec();
        if shape.len() != 2 || tokens_per_frame == 0 || shape[0] % tokens_per_frame != 0 {
            return Err(Error::dim(format!("sync stream {shape:?} with {tokens_per_frame} tokens per frame")));
        }
        if let Some(bad) = streams.iter().find(|&&s| tape.shape(s) != shape.as_slice()) {
            return Err(Error::dim(format!("sync streams differ: {shape:?} vs {:?}", tape.shape(*bad))));
        }
        let frames = shape[0] / tokens_per_frame;
        let mut deltas: Vec<Vec<Var>> = vec![Vec::with_capacity(frames); streams.len()];
        for j in 0..frames {
            let parts = streams
                .iter()
                .map(|&s| row_block(tape, s, j * tokens_per_frame, tokens_per_frame))
                .collect::<Result<Vec<_>>>()?;
            let joint = tape.concat_rows(&parts)?;
            let h = self.norm.forward(tape, store, joint)?;
            let out = self.attn.forward(tape, store, h, h, heads)?;
            for (s, d) in deltas.iter_mut().enumerate() {
                d.push(row_block(tape, out, s * tokens_per_frame, tokens_per_frame)?);
            }
        }
        streams
            .iter()
            .zip(deltas)
            .map(|(&s, d)| {
                let d = if d.len() == 1 { d[0] } else { tape.concat_rows(&d)? };
                tape.add(s, d)
            })
            .collect()
    }
}

#[derive(Clone, Debug)]
pub struct Block {
    pub norm1: LayerNorm,
    pub self_attn: AttnLayer,
    pub reference: RefAttention,
    pub sync: SyncAttention,
    pub norm2: LayerNorm,
    pub fc1: Linear,
    pub fc2: Linear,
}

#[derive(Clone, Debug)]
pub struct Denoiser {
    pub config: DenoiserConfig,
    pub store: ParamStore,
    pub embed: PatchEmbed,
    pub ref_embed: PatchEmbed,
    pub time1: Linear,
    pub time2: Linear,
    pub blocks: Vec<Block>,
    pub norm_out: LayerNorm,
    pub out: Linear,
}

/// Parameters of the cross-view attention blocks.
pub fn is_sync_param(name: &str) -> bool {
    name.split('.').nth(2) == Some("sync") && name.starts_with("blocks.")
}

/// Sinusoidal features of `1000 t`, half sines then half cosines.
pub fn time_features(t: f64, dim: usize) -> Tensor {
    let half = dim / 2;
    let mut v = vec![0.0; dim];
    for i in 0..half {
        let freq = (-(10_000f64).ln() * i as f64 / half as f64).exp();
        v[i] = (1000.0 * t * freq).sin();
        v[half + i] = (1000.0 * t * freq).cos();
    }
    Tensor::new(vec![1, dim], v).expect("length matches")
}

/// Fixed sinusoidal position code for tokens ordered (frame, row, col).
/// Channel `c` encodes axis `c % 3` at frequency index `c / 3`.
pub fn positional_encoding(frames: usize, rows: usize, cols: usize, dim: usize) -> Tensor {
    let per_axis = dim.div_ceil(3);
    let mut data = Vec::with_capacity(frames * rows * cols * dim);
    for f in 0..frames {
        for r in 0..rows {
            for c in 0..cols {
                let pos = [f as f64, r as f64, c as f64];
                for ch in 0..dim {
                    let k = ch / 3;
                    let freq = (-(100f64).ln() * (k / 2) as f64 / per_axis as f64).exp();
                    let phase = pos[ch % 3] * freq;
                    data.push(if k % 2 == 0 { phase.sin() } else { phase.cos() });
                }
            }
        }
    }
    Tensor::new(vec![frames * rows * cols, dim], data).expect("length matches")
}

impl Denoiser {
    pub fn new(config: DenoiserConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut store = ParamStore::new();
        let (d, c, p) = (config.dim, config.channels(), config.patch);
        let xav = Init::XavierUniform;
        let embed = PatchEmbed::new(&mut store, "embed", 3 * c, p, d, &mut rng)?;
        let ref_embed = PatchEmbed::new(&mut store, "ref_embed", c, p, d, &mut rng)?;
        let time1 = Linear::new(&mut store, "time.0", d, d, xav, &mut rng)?;
        let time2 = Linear::new(&mut store, "time.1", d, d, xav, &mut rng)?;
        let mut blocks = Vec::with_capacity(config.depth);
        for i in 0..config.depth {
            let n = format!("blocks.{i}");
            blocks.push(Block {
                norm1: LayerNorm::new(&mut store, &format!("{n}.norm1"), d, LN_EPS)?,
                self_attn: AttnLayer::new(&mut store, &format!("{n}.attn"), d, false, &mut rng)?,
                reference: RefAttention {
                    norm: LayerNorm::new(&mut store, &format!("{n}.ref.norm"), d, LN_EPS)?,
                    attn: AttnLayer::new(&mut store, &format!("{n}.ref"), d, true, &mut rng)?,
                },
                sync: SyncAttention {
                    norm: LayerNorm::new(&mut store, &format!("{n}.sync.norm"), d, LN_EPS)?,
                    attn: AttnLayer::new(&mut store, &format!("{n}.sync"), d, true, &mut rng)?,
                },
                norm2: LayerNorm::new(&mut store, &format!("{n}.norm2"), d, LN_EPS)?,
                fc1: Linear::new(&mut store, &format!("{n}.mlp.0"), d, d * config.mlp_ratio, xav, &mut rng)?,
                fc2: Linear::new(&mut store, &format!("{n}.mlp.1"), d * config.mlp_ratio, d, xav, &mut rng)?,
            });
        }
        let norm_out = LayerNorm::new(&mut store, "norm_out", d, LN_EPS)?;
        let out = Linear::new(&mut store, "out", d, p * p * c, xav, &mut rng)?;
        Ok(Self { config, store, embed, ref_embed, time1, time2, blocks, norm_out, out })
    }

    fn check_inputs(&self, x_shape: &[usize], cond: &MultiViewCond) -> Result<(usize, [usize; 4])> {
        let c = self.config.channels();
        let [m, lf, lh, lw, xc] = *x_shape else {
            return Err(Error::dim(format!("state must be [views, f', h, w, C], got {x_shape:?}")));
        };
        if xc != c || m == 0 {
            return Err(Error::dim(format!("state {x_shape:?}: expected {c} channels and at least one view")));
        }
        let p = self.config.patch;
        if lh % p != 0 || lw % p != 0 {
            return Err(Error::dim(format!("latent {lh}x{lw} not divisible by patch {p}")));
        }
        if cond.reference.shape() != [lf, lh, lw, c] {
            return Err(Error::dim(format!("reference {:?} vs latent [{lf}, {lh}, {lw}, {c}]", cond.reference.shape())));
        }
        if cond.conditions.len() != m {
            return Err(Error::dim(format!("{} condition stacks for {m} views", cond.conditions.len())));
        }
        if let Some(bad) = cond.conditions.iter().find(|t| t.shape() != [lf, lh, lw, 2 * c]) {
            return Err(Error::dim(format!("condition {:?} vs [{lf}, {lh}, {lw}, {}]", bad.shape(), 2 * c)));
        }
        Ok((m, [lf, lh, lw, c]))
    }

    /// Velocity for every target view; `x` is `[views, f', h, w, C]`.
    pub fn forward(&self, tape: &mut Tape, x: Var, cond: &MultiViewCond, t: f64, branches: Branches) -> Result<Var> {
        let s = &self.store;
        let (m, lat) = self.check_inputs(tape.shape(x), cond)?;
        let [lf, lh, lw, c] = lat;
        let p = self.config.patch;
        let (ph, pw) = (lh / p, lw / p);
        let tpf = ph * pw;
        let heads = self.config.heads;
        let inner = lf * lh * lw * c;
        let pos = tape.constant(positional_encoding(lf, ph, pw, self.config.dim));

        let feats = tape.constant(time_features(t, self.config.dim));
        let temb = self.time1.forward(tape, s, feats)?;
        let temb = tape.silu(temb);
        let temb = self.time2.forward(tape, s, temb)?;
        let temb = tape.reshape(temb, vec![self.config.dim])?;

        let rlat = tape.constant(cond.reference.clone());
        let rtok = self.ref_embed.forward(tape, s, rlat)?;
        let rtok = tape.add(rtok, pos)?;

        let mut hs = Vec::with_capacity(m);
        for (v, cv) in cond.conditions.iter().enumerate() {
            let xv = tape.gather(x, (v * inner..(v + 1) * inner).collect(), lat.to_vec())?;
            let cv = tape.constant(cv.clone());
            let inp = tape.concat_cols(&[xv, cv])?;
            let tok = self.embed.forward(tape, s, inp)?;
            let tok = tape.add(tok, pos)?;
            hs.push(tape.add_row(tok, temb)?);
        }

        for (bi, b) in self.blocks.iter().enumerate() {
            for h in hs.iter_mut() {
                let n = b.norm1.forward(tape, s, *h)?;
                let a = b.self_attn.forward(tape, s, n, n, heads)?;
                *h = tape.add(*h, a)?;
                if branches.reference {
                    *h = b.reference.forward(tape, s, *h, rtok, heads)?;
                }
            }
            if branches.sync {
                let mut streams = Vec::with_capacity(m + 1);
                streams.push(rtok);
                streams.extend_from_slice(&hs);
                let out = b.sync.forward(tape, s, &streams, tpf, heads)?;
                hs.copy_from_slice(&out[1..]);
            }
            for h in hs.iter_mut() {
                let n = b.norm2.forward(tape, s, *h)?;
                let u = b.fc1.forward(tape, s, n)?;
                let u = tape.gelu(u);
                let u = b.fc2.forward(tape, s, u)?;
                *h = tape.add(*h, u)?;
                if !tape.value(*h).is_finite() {
                    return Err(Error::Model { block: bi });
                }
            }
        }

        let unpatch = unpatch_indices(&lat, p)?;
        let mut outs = Vec::with_capacity(m);
        for h in hs {
            let n = self.norm_out.forward(tape, s, h)?;
            let y = self.out.forward(tape, s, n)?;
            outs.push(tape.gather(y, unpatch.clone(), lat.to_vec())?);
        }
        let y = tape.concat_rows(&outs)?;
        tape.reshape(y, vec![m, lf, lh, lw, c])
    }

    /// Plain-value forward pass.
    pub fn predict(&self, x: &Tensor, cond: &MultiViewCond, t: f64, branches: Branches) -> Result<Tensor> {
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone());
        let y = self.forward(&mut tape, xv, cond, t, branches)?;
        Ok(tape.value(y).clone())
    }

    pub fn with_branches(&self, branches: Branches) -> Configured<'_> {
        Configured { model: self, branches }
    }
}

/// A denoiser with a fixed branch selection, usable as a velocity field.
#[derive(Clone, Copy)]
pub struct Configured<'a> {
    pub model: &'a Denoiser,
    pub branches: Branches,
}

impl VelocityField for Configured<'_> {
    type Cond = MultiViewCond;

    fn velocity(&self, tape: &mut Tape, x: Var, cond: &MultiViewCond, t: f64) -> Result<Var> {
        self.model.forward(tape, x, cond, t, self.branches)
    }
}
