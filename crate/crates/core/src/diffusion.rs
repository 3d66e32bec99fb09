//! Noise schedules, deterministic DDIM steps, spatially masked guidance and
//! the multi-step residual prediction of the clean sample.
//!
//! Masked guidance mixes the two noise predictions pointwise,
//! `ε = (1 − M)·ε_uncond + M·ε_cond`. A constant mask `M ≡ 1 + ω` recovers
//! ordinary classifier-free guidance with scale `ω`; the border mask only
//! changes the weight near the image edge.

use std::cell::Cell;

use crate::error::{Error, Result};
use crate::numerics::{Tape, Tensor, Var};

/// Linear β schedule and its cumulative products.
#[derive(Clone, Debug, PartialEq)]
pub struct NoiseSchedule {
    betas: Vec<f64>,
    /// `alpha_bars[t]` for `t = 0..=T`, with `alpha_bars[0] = 1`.
    alpha_bars: Vec<f64>,
}

impl NoiseSchedule {
    pub fn linear(steps: usize, beta_min: f64, beta_max: f64) -> Result<Self> {
        if steps < 2 {
            return Err(Error::Config(format!("schedule needs at least 2 steps, got {steps}")));
        }
        if !(beta_min > 0.0 && beta_min <= beta_max && beta_max < 1.0) {
            return Err(Error::Config(format!(
                "need 0 < beta_min <= beta_max < 1, got ({beta_min}, {beta_max})"
            )));
        }
        let betas: Vec<f64> = (0..steps)
            .map(|i| beta_min + (beta_max - beta_min) * i as f64 / (steps - 1) as f64)
            .collect();
        let mut alpha_bars = Vec::with_capacity(steps + 1);
        alpha_bars.push(1.0);
        let mut acc = 1.0;
        for b in &betas {
            acc *= 1.0 - b;
            alpha_bars.push(acc);
        }
        Ok(Self { betas, alpha_bars })
    }

    /// Number of grid steps `T`.
    pub fn steps(&self) -> usize {
        self.betas.len()
    }

    pub fn betas(&self) -> &[f64] {
        &self.betas
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bars
    }

    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.alpha_bars[t]
    }

    /// Forward-process sample `√ᾱ_t·x0 + √(1 − ᾱ_t)·noise`.
    pub fn noised(&self, x0: &Tensor, noise: &Tensor, t: usize) -> Result<Tensor> {
        let ab = self.alpha_bar(t);
        x0.scale(ab.sqrt()).axpy((1.0 - ab).sqrt(), noise)
    }
}

/// Builds the linear schedule used throughout the crate.
pub fn make_schedule(steps: usize, beta_min: f64, beta_max: f64) -> Result<NoiseSchedule> {
    NoiseSchedule::linear(steps, beta_min, beta_max)
}

/// Per-position guidance weights `M`.
#[derive(Clone, Debug, PartialEq)]
pub struct GuidanceMask {
    grid: Tensor,
    m_mid: f64,
    m_edge: f64,
    /// Positions carrying the edge weight.
    edge: Vec<bool>,
}

impl GuidanceMask {
    /// `m_mid` on `[h/16, 15h/16) × [w/16, 15w/16)`, `m_edge` elsewhere.
    pub fn border(h: usize, w: usize, m_mid: f64, m_edge: f64) -> Self {
        let inside = |i: usize, n: usize| 16 * i >= n && 16 * i < 15 * n;
        let mut edge = Vec::with_capacity(h * w);
        let mut data = Vec::with_capacity(h * w);
        for i in 0..h {
            for j in 0..w {
                let interior = inside(i, h) && inside(j, w);
                edge.push(!interior);
                data.push(if interior { m_mid } else { m_edge });
            }
        }
        Self {
            grid: Tensor::new(vec![h, w], data).expect("grid sized h*w"),
            m_mid,
            m_edge,
            edge,
        }
    }

    /// The same weight everywhere; carries no edge region.
    pub fn uniform(shape: &[usize], weight: f64) -> Self {
        let grid = Tensor::full(shape, weight);
        let edge = vec![false; grid.len()];
        Self {
            grid,
            m_mid: weight,
            m_edge: weight,
            edge,
        }
    }

    pub fn grid(&self) -> &Tensor {
        &self.grid
    }

    pub fn m_mid(&self) -> f64 {
        self.m_mid
    }

    pub fn m_edge(&self) -> f64 {
        self.m_edge
    }

    /// Flat positions of the border band, in grid order.
    pub fn edge_region(&self) -> &[bool] {
        &self.edge
    }
}

/// Discrete conditioning; the prompt string rides along as metadata.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Conditioning {
    pub token: usize,
    pub prompt_text: String,
}

impl Conditioning {
    pub fn new(token: usize, prompt_text: impl Into<String>) -> Self {
        Self {
            token,
            prompt_text: prompt_text.into(),
        }
    }
}

/// A noise-prediction network `ε_θ(x_t, t, token)`.
pub trait Denoiser {
    /// Shape of one latent, without a batch axis.
    fn latent_shape(&self) -> &[usize];

    /// Size of the conditioning table, unconditional token included.
    fn vocab_size(&self) -> usize;

    fn uncond_token(&self) -> usize;

    /// Predictions for the latent `x` under each token, stacked along a new
    /// leading axis.
    fn predict<'t>(&self, x: Var<'t>, t: usize, tokens: &[usize]) -> Result<Var<'t>>;
}

/// Wraps a denoiser and counts `predict` calls.
pub struct CountingDenoiser<'a, D: ?Sized> {
    inner: &'a D,
    calls: Cell<usize>,
}

impl<'a, D: Denoiser + ?Sized> CountingDenoiser<'a, D> {
    pub fn new(inner: &'a D) -> Self {
        Self {
            inner,
            calls: Cell::new(0),
        }
    }

    pub fn calls(&self) -> usize {
        self.calls.get()
    }
}

impl<D: Denoiser + ?Sized> Denoiser for CountingDenoiser<'_, D> {
    fn latent_shape(&self) -> &[usize] {
        self.inner.latent_shape()
    }

    fn vocab_size(&self) -> usize {
        self.inner.vocab_size()
    }

    fn uncond_token(&self) -> usize {
        self.inner.uncond_token()
    }

    fn predict<'t>(&self, x: Var<'t>, t: usize, tokens: &[usize]) -> Result<Var<'t>> {
        self.calls.set(self.calls.get() + 1);
        self.inner.predict(x, t, tokens)
    }
}

/// `(1 − M)·ε_uncond + M·ε_cond` from a single batched denoiser call.
pub fn masked_epsilon<'t, D: Denoiser + ?Sized>(
    denoiser: &D,
    x_t: Var<'t>,
    t: usize,
    cond: &Conditioning,
    mask: &GuidanceMask,
) -> Result<Var<'t>> {
    let shape = x_t.shape();
    if shape != denoiser.latent_shape() {
        return Err(Error::Shape(format!(
            "latent shape {:?} does not match denoiser {:?}",
            shape,
            denoiser.latent_shape()
        )));
    }
    let grid = mask.grid().shape();
    if grid.len() > shape.len() || shape[shape.len() - grid.len()..] != *grid {
        return Err(Error::Shape(format!(
            "mask grid {grid:?} does not cover latent extent {shape:?}"
        )));
    }
    if cond.token >= denoiser.vocab_size() {
        return Err(Error::Contract(format!(
            "conditioning token {} outside embedding table of {}",
            cond.token,
            denoiser.vocab_size()
        )));
    }
    let tape = x_t.tape();
    let eps = denoiser.predict(x_t, t, &[denoiser.uncond_token(), cond.token])?;
    let uncond = eps.select(0)?;
    let conditional = eps.select(1)?;
    let m = tape.constant(mask.grid().clone());
    let one_minus_m = tape.constant(mask.grid().map(|v| 1.0 - v));
    uncond.mul(one_minus_m)?.add(conditional.mul(m)?)
}

fn check_step(t: usize, dt: usize, schedule: &NoiseSchedule) -> Result<()> {
    if dt == 0 || dt > t || t > schedule.steps() {
        return Err(Error::StepRange(format!(
            "need 1 <= dT <= t <= T, got dT={dt}, t={t}, T={}",
            schedule.steps()
        )));
    }
    Ok(())
}

/// Deterministic DDIM update from grid step `t` to `t − dt`:
/// `√(ᾱ_{t−dt}/ᾱ_t)·(x_t − √(1−ᾱ_t)·ε) + √(1−ᾱ_{t−dt})·ε`.
pub fn ddim_step<'t>(
    x_t: Var<'t>,
    t: usize,
    dt: usize,
    eps: Var<'t>,
    schedule: &NoiseSchedule,
) -> Result<Var<'t>> {
    check_step(t, dt, schedule)?;
    let a_t = schedule.alpha_bar(t);
    let a_prev = schedule.alpha_bar(t - dt);
    let ratio = (a_prev / a_t).sqrt();
    let shrunk = x_t.sub(eps.scale((1.0 - a_t).sqrt()))?.scale(ratio);
    shrunk.add(eps.scale((1.0 - a_prev).sqrt()))
}

/// [`ddim_step`] on plain tensors.
pub fn ddim_step_tensor(
    x_t: &Tensor,
    t: usize,
    dt: usize,
    eps: &Tensor,
    schedule: &NoiseSchedule,
) -> Result<Tensor> {
    let tape = Tape::new();
    let x = tape.constant(x_t.clone());
    let e = tape.constant(eps.clone());
    Ok(ddim_step(x, t, dt, e, schedule)?.value())
}

/// Step intervals `[ΔT_1, …, ΔT_k]` of the residual prediction at step `t`:
/// `k = ⌈t / ⌊T/K⌋⌉`, `ΔT_1 = t mod ⌊T/K⌋` (a full stride when that is 0),
/// the rest full strides. `ΔT_k` is applied first.
pub fn k_schedule(t: usize, steps: usize, max_iters: usize) -> Result<Vec<usize>> {
    if max_iters == 0 {
        return Err(Error::Contract(
            "K = 0 disables residual prediction; use x_t directly".into(),
        ));
    }
    if t == 0 || t > steps {
        return Err(Error::StepRange(format!("need 1 <= t <= T, got t={t}, T={steps}")));
    }
    let stride = steps / max_iters;
    if stride == 0 {
        return Err(Error::Config(format!("K={max_iters} exceeds T={steps}")));
    }
    let k = t.div_ceil(stride);
    let first = match t % stride {
        0 => stride,
        r => r,
    };
    let mut intervals = vec![stride; k];
    intervals[0] = first;
    Ok(intervals)
}

/// Coarse estimate of `x_0` by composing DDIM steps over
/// [`k_schedule`]; the identity when `max_iters` is 0.
pub fn residual_predict<'t, D: Denoiser + ?Sized>(
    denoiser: &D,
    x_t: Var<'t>,
    t: usize,
    cond: &Conditioning,
    mask: &GuidanceMask,
    max_iters: usize,
    schedule: &NoiseSchedule,
) -> Result<Var<'t>> {
    if max_iters == 0 {
        return Ok(x_t);
    }
    let intervals = k_schedule(t, schedule.steps(), max_iters)?;
    let mut x = x_t;
    let mut now = t;
    for &dt in intervals.iter().rev() {
        let eps = masked_epsilon(denoiser, x, now, cond, mask)?;
        x = ddim_step(x, now, dt, eps, schedule)?;
        now -= dt;
    }
    debug_assert_eq!(now, 0);
    Ok(x)
}
