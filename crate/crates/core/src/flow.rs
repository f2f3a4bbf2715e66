//! Flow matching: linear noise-to-data interpolant, velocity regression
//! loss, and the uniform-grid Euler sampler. Time runs from 0 (noise) to
//! 1 (data).

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grad::{Tape, Tensor, Var};

/// A velocity model `v(x, cond, t)` evaluated on a tape.
pub trait VelocityField {
    type Cond: ?Sized;

    fn velocity(&self, tape: &mut Tape, x: Var, cond: &Self::Cond, t: f64) -> Result<Var>;
}

/// `(1 − t)·x0 + t·x1`.
pub fn interpolate(x0: &Tensor, x1: &Tensor, t: f64) -> Result<Tensor> {
    if !(0.0..=1.0).contains(&t) {
        return Err(Error::contract(format!("t must lie in [0, 1], got {t}")));
    }
    x0.zip_map(x1, |a, b| (1.0 - t) * a + t * b)
}

#[derive(Clone, Debug, PartialEq)]
pub struct FlowSample {
    pub x0: Tensor,
    pub x1: Tensor,
    pub t: f64,
    pub xt: Tensor,
    /// `x1 − x0`, independent of `t`.
    pub target_v: Tensor,
}

impl FlowSample {
    pub fn new(x0: Tensor, x1: Tensor, t: f64) -> Result<Self> {
        let xt = interpolate(&x0, &x1, t)?;
        let target_v = x1.sub(&x0)?;
        Ok(Self { x0, x1, t, xt, target_v })
    }

    /// Standard-normal `x0` and uniform `t`.
    pub fn draw<R: Rng + ?Sized>(x1: Tensor, rng: &mut R) -> Result<Self> {
        let x0 = Tensor::randn(x1.shape().to_vec(), rng);
        let t = rng.random::<f64>();
        Self::new(x0, x1, t)
    }
}

/// Mean over the batch of the mean-per-element squared velocity error.
pub fn fm_loss<M: VelocityField + ?Sized>(
    tape: &mut Tape,
    model: &M,
    batch: &[(FlowSample, &M::Cond)],
) -> Result<Var> {
    if batch.is_empty() {
        return Err(Error::Training("empty batch".into()));
    }
    let mut terms = Vec::with_capacity(batch.len());
    for (s, cond) in batch {
        let x = tape.constant(s.xt.clone());
        let v = model.velocity(tape, x, cond, s.t)?;
        if !tape.value(v).is_finite() {
            return Err(Error::Training(format!("non-finite velocity at t = {}", s.t)));
        }
        let target = tape.constant(s.target_v.clone());
        let d = tape.sub(v, target)?;
        let sq = tape.square(d);
        terms.push(tape.mean(sq));
    }
    let mut total = terms[0];
    for &t in &terms[1..] {
        total = tape.add(total, t)?;
    }
    Ok(tape.scale(total, 1.0 / batch.len() as f64))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SamplerConfig {
    pub steps: usize,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self { steps: 50 }
    }
}

impl SamplerConfig {
    pub fn new(steps: usize) -> Result<Self> {
        if steps == 0 {
            return Err(Error::Config("sampler needs at least one step".into()));
        }
        Ok(Self { steps })
    }

    /// `t_k = k / K` for `k = 0..=K`.
    pub fn grid(&self) -> Vec<f64> {
        (0..=self.steps).map(|k| k as f64 / self.steps as f64).collect()
    }
}

/// Euler integration `x ← x + v(x, t_k) / K` from `t = 0` to `t = 1`.
pub fn sample_euler<M: VelocityField + ?Sized>(
    model: &M,
    x0: &Tensor,
    cond: &M::Cond,
    cfg: &SamplerConfig,
) -> Result<Tensor> {
    let k_steps = SamplerConfig::new(cfg.steps)?.steps;
    let mut x = x0.clone();
    let kf = k_steps as f64;
    for k in 0..k_steps {
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone());
        let v = model.velocity(&mut tape, xv, cond, k as f64 / kf)?;
        let v = tape.value(v);
        if v.shape() != x.shape() {
            return Err(Error::dim(format!("velocity {:?} vs state {:?}", v.shape(), x.shape())));
        }
        for (xi, vi) in x.data_mut().iter_mut().zip(v.data()) {
            *xi += vi / kf;
        }
        if !x.is_finite() {
            return Err(Error::Divergence { step: k, reason: "non-finite sampler state".into() });
        }
    }
    Ok(x)
}
