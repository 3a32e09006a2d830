//! Score-based diffusion decoder with an informative prior `N(mu, I)`.
//!
//! Forward process: `dx = ½ β(t) (mu - x) dt + sqrt(β(t)) dW` with
//! `β(t) = beta0 + (beta1 - beta0) t`. Its marginal given `x0` is Gaussian
//! with mean `mu + (x0 - mu) e^{-B/2}` and variance `1 - e^{-B}`, where
//! `B(t) = ∫ β`. The score net predicts `-eps`; the score is that output
//! divided by `sqrt(lam)`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{linear_named, residual_mlp, Bound, Init, ParameterStore};
use crate::regression::select_rows;
use crate::rng::{self, Rng};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;
use rand::Rng as _;

const PREFIX: &str = "diff";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DiffusionSchedule {
    pub beta0: f64,
    pub beta1: f64,
    pub t_min: f64,
    pub n_sample_steps: usize,
}

impl Default for DiffusionSchedule {
    fn default() -> Self {
        Self {
            beta0: 0.05,
            beta1: 20.0,
            t_min: 1e-4,
            n_sample_steps: 100,
        }
    }
}

impl DiffusionSchedule {
    pub fn validate(&self) -> Result<()> {
        if !(self.beta0 > 0.0 && self.beta1 >= self.beta0 && self.beta1.is_finite()) {
            return Err(Error::contract(format!(
                "need 0 < beta0 <= beta1, got {} and {}",
                self.beta0, self.beta1
            )));
        }
        if !(self.t_min > 0.0 && self.t_min < 1.0) {
            return Err(Error::contract(format!("t_min must lie in (0, 1), got {}", self.t_min)));
        }
        if self.n_sample_steps == 0 {
            return Err(Error::contract("n_sample_steps must be at least 1"));
        }
        Ok(())
    }

    pub fn beta(&self, t: f64) -> f64 {
        self.beta0 + (self.beta1 - self.beta0) * t
    }

    /// `B(t) = ∫_0^t β`.
    pub fn integral(&self, t: f64) -> f64 {
        self.beta0 * t + 0.5 * (self.beta1 - self.beta0) * t * t
    }

    /// `(shrink, lam)` of the forward marginal at time `t`.
    pub fn marginal_stats(&self, t: f64) -> Result<(f64, f64)> {
        if !(0.0..=1.0).contains(&t) {
            return Err(Error::contract(format!("t = {t} outside [0, 1]")));
        }
        let b = self.integral(t);
        Ok(((-0.5 * b).exp(), -(-b).exp_m1()))
    }
}

/// `x_t = mu + (x0 - mu) shrink + sqrt(lam) eps` at a single time for all rows.
pub fn forward_sample(x0: &Tensor, mu: &Tensor, t: f64, eps: &Tensor, schedule: &DiffusionSchedule) -> Result<Tensor> {
    let (shrink, lam) = schedule.marginal_stats(t)?;
    let d = x0.zip_with(mu, "forward_sample", |x, m| m + (x - m) * shrink)?;
    d.zip_with(eps, "forward_sample", |v, e| v + lam.sqrt() * e)
}

/// Sinusoidal embedding: `dim / 2` sines then `dim / 2` cosines, frequencies geometric in `[1, 1000]`.
pub fn time_embed(t: f64, dim: usize) -> Result<Tensor> {
    if dim == 0 || dim % 2 == 1 {
        return Err(Error::contract(format!(
            "time embedding dim must be even and positive, got {dim}"
        )));
    }
    let half = dim / 2;
    let omega = |k: usize| {
        if half == 1 {
            1.0
        } else {
            1000f64.powf(k as f64 / (half - 1) as f64)
        }
    };
    let mut data: Vec<f64> = (0..half).map(|k| (t * omega(k)).sin()).collect();
    data.extend((0..half).map(|k| (t * omega(k)).cos()));
    Tensor::new(vec![dim], data)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DiffusionConfig {
    pub hidden: usize,
    pub depth: usize,
    pub time_dim: usize,
    pub schedule: DiffusionSchedule,
}

impl Default for DiffusionConfig {
    fn default() -> Self {
        Self {
            hidden: 64,
            depth: 2,
            time_dim: 16,
            schedule: DiffusionSchedule::default(),
        }
    }
}

impl DiffusionConfig {
    pub fn validate(&self) -> Result<()> {
        self.schedule.validate()?;
        if self.hidden == 0 || self.depth == 0 {
            return Err(Error::contract("score net needs hidden >= 1 and depth >= 1"));
        }
        time_embed(0.0, self.time_dim).map(|_| ())
    }

    /// Projector and score-net output layers start at zero.
    pub fn init(&self, init: &mut Init, cond_dim: usize, target_dim: usize) -> Result<()> {
        self.validate()?;
        init.linear_zero(&format!("{PREFIX}.proj"), cond_dim, target_dim)?;
        init.linear(
            &format!("{PREFIX}.score.in"),
            target_dim + cond_dim + self.time_dim,
            self.hidden,
        )?;
        init.residual_mlp(&format!("{PREFIX}.score.mlp"), self.hidden, self.hidden, self.depth)?;
        init.linear_zero(&format!("{PREFIX}.score.out"), self.hidden, target_dim)
    }
}

/// Prior mean `mu = projector(c)`.
pub fn project(tape: &mut Tape, params: &Bound, c: Var) -> Result<Var> {
    linear_named(tape, params, &format!("{PREFIX}.proj"), c)
}

fn time_rows(times: &[f64], dim: usize) -> Result<Tensor> {
    let mut data = Vec::with_capacity(times.len() * dim);
    for &t in times {
        data.extend_from_slice(time_embed(t, dim)?.data());
    }
    Tensor::new(vec![times.len(), dim], data)
}

/// Raw score-net output for `x_t` at per-row times; approximates `-eps`.
pub fn noise_net(
    tape: &mut Tape,
    params: &Bound,
    cfg: &DiffusionConfig,
    x_t: Var,
    c: Var,
    times: &[f64],
) -> Result<Var> {
    let temb = tape.constant(time_rows(times, cfg.time_dim)?);
    let x = tape.concat(&[x_t, c, temb], 1)?;
    let h = linear_named(tape, params, &format!("{PREFIX}.score.in"), x)?;
    let h = residual_mlp(tape, params, &format!("{PREFIX}.score.mlp"), h, cfg.depth)?;
    linear_named(tape, params, &format!("{PREFIX}.score.out"), h)
}

/// Random draws for one loss evaluation: a time per row (shared within an
/// utterance) and standard-normal noise.
#[derive(Clone, Debug)]
pub struct LossNoise {
    pub times: Vec<f64>,
    pub eps: Tensor,
}

impl LossNoise {
    /// One `t ~ U(t_min, 1)` per utterance of the given row lengths.
    pub fn draw(lengths: &[usize], target_dim: usize, schedule: &DiffusionSchedule, rng: &mut Rng) -> Result<Self> {
        let mut times = Vec::new();
        for &n in lengths {
            let t = rng.random_range(schedule.t_min..1.0);
            times.extend(std::iter::repeat_n(t, n));
        }
        let rows = times.len();
        let eps = Tensor::new(vec![rows, target_dim], rng::normals(rng, rows * target_dim))?;
        Ok(Self { times, eps })
    }
}

pub struct DiffusionLoss {
    pub total: Var,
    pub score_term: Var,
    pub l1_term: Var,
}

/// `mean_valid[lam ‖s + eps/sqrt(lam)‖²] + mean_valid,dims |mu - x0|`.
///
/// With `s = net / sqrt(lam)` the first term is `‖net + eps‖²`.
pub fn diffusion_loss(
    tape: &mut Tape,
    params: &Bound,
    cfg: &DiffusionConfig,
    x0: &Tensor,
    c: Var,
    noise: &LossNoise,
    mask: &[bool],
) -> Result<DiffusionLoss> {
    let (n, d) = x0.dims2()?;
    if noise.times.len() != n || noise.eps.shape() != x0.shape() {
        return Err(Error::contract("noise draws do not match the targets"));
    }
    let valid = mask.iter().filter(|&&m| m).count();
    let mu = project(tape, params, c)?;
    // x_t = mu (1 - shrink) + x0 shrink + sqrt(lam) eps, with per-row (shrink, lam)
    let mut keep = Vec::with_capacity(n * d);
    let mut rest = Vec::with_capacity(n * d);
    for i in 0..n {
        let (shrink, lam) = cfg.schedule.marginal_stats(noise.times[i])?;
        for j in 0..d {
            keep.push(1.0 - shrink);
            rest.push(x0.row(i)[j] * shrink + lam.sqrt() * noise.eps.row(i)[j]);
        }
    }
    let keep = tape.constant(Tensor::new(vec![n, d], keep)?);
    let rest = tape.constant(Tensor::new(vec![n, d], rest)?);
    let mu_part = tape.mul(mu, keep)?;
    let xt = tape.add(mu_part, rest)?;
    let net = noise_net(tape, params, cfg, xt, c, &noise.times)?;
    let eps = tape.constant(noise.eps.clone());
    let r = tape.add(net, eps)?;
    let r = select_rows(tape, r, mask)?;
    let rr = tape.mul(r, r)?;
    let sq = tape.sum(rr, None)?;
    let score_term = tape.scale(sq, 1.0 / valid as f64)?;

    let target = tape.constant(x0.clone());
    let diff = tape.sub(mu, target)?;
    let diff = select_rows(tape, diff, mask)?;
    let abs = tape.abs(diff)?;
    let l1_term = tape.mean(abs, None)?;
    let total = tape.add(score_term, l1_term)?;
    Ok(DiffusionLoss {
        total,
        score_term,
        l1_term,
    })
}

/// Euler–Maruyama integration of the reverse SDE from `t = 1` down to `t_min`.
///
/// `x1 ~ N(mu, tau² I)`; each step applies
/// `x += h β(t) (½ (x - mu) + s(x, t)) + tau sqrt(h β(t)) ξ`.
/// `fill_normals` supplies standard-normal draws for a buffer shaped like `mu`.
pub fn reverse_sample_with<S, N>(
    mu: &Tensor,
    schedule: &DiffusionSchedule,
    tau: f64,
    n_steps: usize,
    mut fill_normals: N,
    score: S,
) -> Result<Tensor>
where
    S: FnMut(&Tensor, f64) -> Result<Tensor>,
    N: FnMut(&mut [f64]),
{
    if !(tau >= 0.0) {
        return Err(Error::contract(format!("tau must be non-negative, got {tau}")));
    }
    let mut xi = vec![0.0; mu.len()];
    fill_normals(&mut xi);
    let mut x1 = mu.clone();
    for (v, z) in x1.data_mut().iter_mut().zip(&xi) {
        *v += tau * z;
    }
    reverse_integrate(x1, mu, schedule, tau, n_steps, fill_normals, score)
}

/// The Euler loop of [`reverse_sample_with`] from a given starting state.
pub fn reverse_integrate<S, N>(
    mut x: Tensor,
    mu: &Tensor,
    schedule: &DiffusionSchedule,
    tau: f64,
    n_steps: usize,
    mut fill_normals: N,
    mut score: S,
) -> Result<Tensor>
where
    S: FnMut(&Tensor, f64) -> Result<Tensor>,
    N: FnMut(&mut [f64]),
{
    schedule.validate()?;
    if n_steps == 0 {
        return Err(Error::contract("reverse sampling needs at least one step"));
    }
    if !(tau >= 0.0) {
        return Err(Error::contract(format!("tau must be non-negative, got {tau}")));
    }
    if x.shape() != mu.shape() {
        return Err(Error::contract("starting state and prior mean differ in shape"));
    }
    let h = (1.0 - schedule.t_min) / n_steps as f64;
    let mut xi = vec![0.0; mu.len()];
    for step in 0..n_steps {
        let t = 1.0 - step as f64 * h;
        let s = score(&x, t)?;
        if s.shape() != x.shape() {
            return Err(Error::contract("score has the wrong shape"));
        }
        let b = schedule.beta(t);
        let noise = tau * (h * b).sqrt();
        fill_normals(&mut xi);
        for (((v, &m), &sv), &z) in x.data_mut().iter_mut().zip(mu.data()).zip(s.data()).zip(&xi) {
            *v += h * b * (0.5 * (*v - m) + sv) + noise * z;
        }
        if !x.all_finite() {
            return Err(Error::Numeric(format!(
                "reverse sampling state is not finite at step {step}"
            )));
        }
    }
    Ok(x)
}

/// Prior means for conditioning rows, without gradients.
pub fn prior_mean(params: &ParameterStore, c: &Tensor) -> Result<Tensor> {
    let mut tape = Tape::new();
    let bound = params.bind(&mut tape);
    let c = tape.constant(c.clone());
    let mu = project(&mut tape, &bound, c)?;
    Ok(tape.value(mu).clone())
}

/// Reverse sampling with the learned score.
pub fn reverse_sample_noise<N: FnMut(&mut [f64])>(
    params: &ParameterStore,
    cfg: &DiffusionConfig,
    c: &Tensor,
    tau: f64,
    n_steps: usize,
    fill_normals: N,
) -> Result<Tensor> {
    let mu = prior_mean(params, c)?;
    let (rows, _) = c.dims2()?;
    let mut tape = Tape::new();
    let bound = params.bind(&mut tape);
    let cv = tape.constant(c.clone());
    let mark = tape.mark();
    reverse_sample_with(&mu, &cfg.schedule, tau, n_steps, fill_normals, |x, t| {
        tape.rewind(mark);
        let (_, lam) = cfg.schedule.marginal_stats(t)?;
        let xv = tape.constant(x.clone());
        let net = noise_net(&mut tape, &bound, cfg, xv, cv, &vec![t; rows])?;
        Ok(tape.value(net).map(|v| v / lam.sqrt()))
    })
}

/// [`reverse_sample_noise`] drawing from a single stream.
pub fn reverse_sample(
    params: &ParameterStore,
    cfg: &DiffusionConfig,
    c: &Tensor,
    tau: f64,
    n_steps: usize,
    rng: &mut Rng,
) -> Result<Tensor> {
    reverse_sample_noise(params, cfg, c, tau, n_steps, |buf| {
        for v in buf {
            *v = rng::normal(rng);
        }
    })
}
