use crate::error::{Error, Result};
use crate::nn::Bound;
use crate::tape::{Tape, Var};

/// `x W + b` for `x: [n, d_in]`, `W: [d_in, d_out]`, `b: [d_out]`.
pub fn linear(tape: &mut Tape, x: Var, w: Var, b: Var) -> Result<Var> {
    let (n, _) = tape.value(x).dims2()?;
    let (_, d_out) = tape.value(w).dims2()?;
    if tape.value(b).shape() != [d_out] {
        return Err(Error::dim(format!(
            "linear: bias shape {:?} does not match weight {:?}",
            tape.value(b).shape(),
            tape.value(w).shape()
        )));
    }
    let xw = tape.matmul(x, w)?;
    let bb = tape.broadcast_rows(b, n)?;
    tape.add(xw, bb)
}

/// [`linear`] with `{prefix}.weight` / `{prefix}.bias` taken from `params`.
pub fn linear_named(tape: &mut Tape, params: &Bound, prefix: &str, x: Var) -> Result<Var> {
    let w = params.get(&format!("{prefix}.weight"))?;
    let b = params.get(&format!("{prefix}.bias"))?;
    linear(tape, x, w, b)
}

pub fn embedding_lookup(tape: &mut Tape, table: Var, ids: &[usize]) -> Result<Var> {
    let ids: Vec<Option<usize>> = ids.iter().copied().map(Some).collect();
    tape.gather_rows(table, &ids)
}

/// `depth` blocks of `x <- x + fc2(tanh(fc1(x)))`.
pub fn residual_mlp(tape: &mut Tape, params: &Bound, prefix: &str, x: Var, depth: usize) -> Result<Var> {
    if depth == 0 {
        return Err(Error::contract("residual_mlp depth must be at least 1"));
    }
    let mut h = x;
    for i in 0..depth {
        let a = linear_named(tape, params, &format!("{prefix}.{i}.fc1"), h)?;
        let a = tape.tanh(a)?;
        let a = linear_named(tape, params, &format!("{prefix}.{i}.fc2"), a)?;
        h = tape.add(h, a)?;
    }
    Ok(h)
}
