//! Minibatch Adam training shared by every head.

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{adam_step, clip_global_norm, AdamConfig, AdamState, Bound, ParameterStore};
use crate::rng::{self, Rng};
use crate::tape::{Tape, Var};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub steps: usize,
    /// utterances per step
    pub batch_size: usize,
    pub lr: f64,
    /// learning rate at the last step as a fraction of `lr`, reached by cosine decay
    pub final_lr_scale: f64,
    pub clip: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 2000,
            batch_size: 32,
            lr: 1e-3,
            final_lr_scale: 1.0,
            clip: 5.0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::contract("batch_size must be at least 1"));
        }
        if !(self.lr > 0.0 && self.clip > 0.0 && (0.0..=1.0).contains(&self.final_lr_scale)) {
            return Err(Error::contract(
                "lr and clip must be positive, final_lr_scale in [0, 1]",
            ));
        }
        Ok(())
    }

    pub fn lr_at(&self, step: usize) -> f64 {
        if self.steps <= 1 {
            return self.lr;
        }
        let p = step as f64 / (self.steps - 1) as f64;
        let cos = 0.5 * (1.0 + (std::f64::consts::PI * p).cos());
        self.lr * (self.final_lr_scale + (1.0 - self.final_lr_scale) * cos)
    }
}

/// A scalar loss plus named components reported alongside it.
pub struct Objective {
    pub total: Var,
    pub parts: Vec<Var>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepLoss {
    pub step: usize,
    pub loss: f64,
    pub parts: Vec<f64>,
}

/// Epoch-shuffled minibatches of item indices.
struct Batches {
    order: Vec<usize>,
    pos: usize,
    size: usize,
    rng: Rng,
}

impl Batches {
    fn new(n: usize, size: usize, seed: u64) -> Self {
        let mut b = Self {
            order: (0..n).collect(),
            pos: n,
            size: size.min(n),
            rng: rng::stream(seed, "train/batches"),
        };
        b.reshuffle();
        b
    }

    fn reshuffle(&mut self) {
        self.order.shuffle(&mut self.rng);
        self.pos = 0;
    }

    fn next(&mut self) -> Vec<usize> {
        if self.pos + self.size > self.order.len() {
            self.reshuffle();
        }
        let out = self.order[self.pos..self.pos + self.size].to_vec();
        self.pos += self.size;
        out
    }
}

fn diverged(step: usize, e: Error) -> Error {
    match e {
        Error::Numeric(msg) | Error::Domain(msg) => Error::Diverged { step, msg },
        other => other,
    }
}

/// Run `cfg.steps` Adam updates. `objective` builds the loss for a batch of
/// item indices; the rng it receives is the run's noise stream.
///
/// The returned curve holds the loss of each step's batch before its update.
pub fn train_loop<F>(
    params: &mut ParameterStore,
    n_items: usize,
    cfg: &TrainConfig,
    seed: u64,
    mut objective: F,
) -> Result<(Vec<StepLoss>, AdamState)>
where
    F: FnMut(&mut Tape, &Bound, &[usize], &mut Rng) -> Result<Objective>,
{
    cfg.validate()?;
    if n_items == 0 {
        return Err(Error::contract("cannot train on an empty corpus"));
    }
    let mut adam = AdamState::new(
        params,
        AdamConfig {
            lr: cfg.lr,
            ..AdamConfig::default()
        },
    );
    let mut batches = Batches::new(n_items, cfg.batch_size, seed);
    let mut noise = rng::stream(seed, "train/noise");
    let mut curve = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let idx = batches.next();
        let mut tape = Tape::new();
        let bound = params.bind(&mut tape);
        let obj = objective(&mut tape, &bound, &idx, &mut noise).map_err(|e| diverged(step, e))?;
        let loss = tape.value(obj.total).item()?;
        if !loss.is_finite() {
            return Err(Error::Diverged {
                step,
                msg: format!("loss is {loss}"),
            });
        }
        let parts = obj
            .parts
            .iter()
            .map(|&v| tape.value(v).item())
            .collect::<Result<Vec<_>>>()?;
        let grads = tape.backward(obj.total).map_err(|e| diverged(step, e))?;
        let mut grads = bound.grads(&grads);
        let norm = clip_global_norm(&mut grads, cfg.clip);
        if !norm.is_finite() {
            return Err(Error::Diverged {
                step,
                msg: format!("gradient norm is {norm}"),
            });
        }
        adam.config.lr = cfg.lr_at(step);
        adam_step(params, &grads, &mut adam)?;
        curve.push(StepLoss { step, loss, parts });
    }
    Ok((curve, adam))
}
