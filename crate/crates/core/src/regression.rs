//! Deterministic regression head trained with an L1 or L2 loss.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{linear_named, residual_mlp, Bound, Init};
use crate::tape::{Tape, Var};

const PREFIX: &str = "reg";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Loss {
    L1,
    L2,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RegressionConfig {
    pub hidden: usize,
    pub depth: usize,
}

impl Default for RegressionConfig {
    fn default() -> Self {
        Self { hidden: 64, depth: 2 }
    }
}

impl RegressionConfig {
    /// The output projection starts at zero, so an untrained head predicts 0.
    pub fn init(&self, init: &mut Init, cond_dim: usize, target_dim: usize) -> Result<()> {
        init.residual_mlp(&format!("{PREFIX}.mlp"), cond_dim, self.hidden, self.depth)?;
        init.linear_zero(&format!("{PREFIX}.out"), cond_dim, target_dim)
    }
}

/// `[n, cond_dim]` conditioning to `[n, D]` predictions.
pub fn predict(tape: &mut Tape, params: &Bound, cfg: &RegressionConfig, c: Var) -> Result<Var> {
    let w = tape.value(params.get(&format!("{PREFIX}.out.weight"))?).dims2()?;
    let (_, cd) = tape.value(c).dims2()?;
    if w.0 != cd {
        return Err(Error::contract(format!(
            "conditioning has {cd} columns, head expects {}",
            w.0
        )));
    }
    let h = residual_mlp(tape, params, &format!("{PREFIX}.mlp"), c, cfg.depth)?;
    linear_named(tape, params, &format!("{PREFIX}.out"), h)
}

/// Row indices of valid positions; errors when there are none.
pub(crate) fn valid_rows(mask: &[bool], rows: usize) -> Result<Option<Vec<Option<usize>>>> {
    if mask.len() != rows {
        return Err(Error::contract(format!(
            "mask has {} entries for {rows} rows",
            mask.len()
        )));
    }
    if !mask.contains(&true) {
        return Err(Error::contract("mask selects no positions"));
    }
    if mask.iter().all(|&m| m) {
        return Ok(None);
    }
    Ok(Some(
        mask.iter()
            .enumerate()
            .filter(|(_, &m)| m)
            .map(|(i, _)| Some(i))
            .collect(),
    ))
}

/// Keep only masked rows of `x`.
pub(crate) fn select_rows(tape: &mut Tape, x: Var, mask: &[bool]) -> Result<Var> {
    let (rows, _) = tape.value(x).dims2()?;
    match valid_rows(mask, rows)? {
        None => Ok(x),
        Some(ids) => tape.gather_rows(x, &ids),
    }
}

fn masked_mean(tape: &mut Tape, pred: Var, target: Var, mask: &[bool], loss: Loss) -> Result<Var> {
    if tape.value(pred).shape() != tape.value(target).shape() {
        return Err(Error::contract(format!(
            "prediction {:?} and target {:?} differ in shape",
            tape.value(pred).shape(),
            tape.value(target).shape()
        )));
    }
    let d = tape.sub(pred, target)?;
    let d = select_rows(tape, d, mask)?;
    let e = match loss {
        Loss::L1 => tape.abs(d)?,
        Loss::L2 => tape.mul(d, d)?,
    };
    tape.mean(e, None)
}

/// Mean over valid positions and dimensions of `(pred - target)^2`.
pub fn loss_l2(tape: &mut Tape, pred: Var, target: Var, mask: &[bool]) -> Result<Var> {
    masked_mean(tape, pred, target, mask, Loss::L2)
}

/// Mean over valid positions and dimensions of `|pred - target|`.
pub fn loss_l1(tape: &mut Tape, pred: Var, target: Var, mask: &[bool]) -> Result<Var> {
    masked_mean(tape, pred, target, mask, Loss::L1)
}

pub fn loss(tape: &mut Tape, kind: Loss, pred: Var, target: Var, mask: &[bool]) -> Result<Var> {
    masked_mean(tape, pred, target, mask, kind)
}
