//! Conditional normalizing flow built from affine coupling steps.
//!
//! Step `k` splits features into halves `(a, b)`, computes `(log s, t)` from
//! `[a ‖ c]` and maps `b -> b * exp(log s) + t`. Even steps transform the
//! second half, odd steps the first. The prior on `z` is `N(0, I)`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{linear_named, residual_mlp, Bound, Init, ParameterStore};
use crate::rng::{self, Rng};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

const PREFIX: &str = "flow";

pub const HALF_LN_2PI: f64 = 0.918_938_533_204_672_8;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FlowConfig {
    pub n_steps: usize,
    pub hidden: usize,
    pub depth: usize,
    pub s_max: f64,
}

impl Default for FlowConfig {
    fn default() -> Self {
        Self {
            n_steps: 8,
            hidden: 64,
            depth: 2,
            s_max: 3.0,
        }
    }
}

/// Widths of the two column blocks at step `k`, and whether the second block is the transformed one.
fn halves(k: usize, d: usize) -> (usize, usize, bool) {
    let first = d / 2;
    (first, d - first, k.is_multiple_of(2))
}

impl FlowConfig {
    pub fn validate(&self, target_dim: usize) -> Result<()> {
        if self.n_steps < 2 {
            return Err(Error::contract("flow needs at least 2 coupling steps"));
        }
        if target_dim < 2 {
            return Err(Error::contract("flow needs a target dimension of at least 2"));
        }
        if self.hidden == 0 || self.depth == 0 {
            return Err(Error::contract("coupling nets need hidden >= 1 and depth >= 1"));
        }
        if !(self.s_max > 0.0 && self.s_max.is_finite()) {
            return Err(Error::contract(format!("s_max must be positive, got {}", self.s_max)));
        }
        Ok(())
    }

    /// Coupling output layers start at zero, so the untrained flow is the identity.
    pub fn init(&self, init: &mut Init, cond_dim: usize, target_dim: usize) -> Result<()> {
        self.validate(target_dim)?;
        for k in 0..self.n_steps {
            let (p0, p1, second) = halves(k, target_dim);
            let (da, db) = if second { (p0, p1) } else { (p1, p0) };
            init.linear(&format!("{PREFIX}.{k}.in"), da + cond_dim, self.hidden)?;
            init.residual_mlp(&format!("{PREFIX}.{k}.mlp"), self.hidden, self.hidden, self.depth)?;
            init.linear_zero(&format!("{PREFIX}.{k}.out"), self.hidden, 2 * db)?;
        }
        Ok(())
    }
}

struct Split {
    a: Var,
    b: Var,
    second: bool,
}

fn split(tape: &mut Tape, h: Var, k: usize) -> Result<Split> {
    let (_, d) = tape.value(h).dims2()?;
    let (p0, p1, second) = halves(k, d);
    let parts = tape.split(h, 1, &[p0, p1])?;
    Ok(if second {
        Split {
            a: parts[0],
            b: parts[1],
            second,
        }
    } else {
        Split {
            a: parts[1],
            b: parts[0],
            second,
        }
    })
}

fn join(tape: &mut Tape, a: Var, b: Var, second: bool) -> Result<Var> {
    if second {
        tape.concat(&[a, b], 1)
    } else {
        tape.concat(&[b, a], 1)
    }
}

/// Capped `(log s, t)` for step `k`.
fn scale_shift(tape: &mut Tape, params: &Bound, cfg: &FlowConfig, k: usize, a: Var, c: Var) -> Result<(Var, Var)> {
    let x = tape.concat(&[a, c], 1)?;
    let h = linear_named(tape, params, &format!("{PREFIX}.{k}.in"), x)?;
    let h = residual_mlp(tape, params, &format!("{PREFIX}.{k}.mlp"), h, cfg.depth)?;
    let out = linear_named(tape, params, &format!("{PREFIX}.{k}.out"), h)?;
    let (_, w) = tape.value(out).dims2()?;
    let parts = tape.split(out, 1, &[w / 2, w / 2])?;
    let raw = tape.scale(parts[0], 1.0 / cfg.s_max)?;
    let capped = tape.tanh(raw)?;
    let log_s = tape.scale(capped, cfg.s_max)?;
    Ok((log_s, parts[1]))
}

/// One forward coupling step; returns `h'` and the per-element `log s` whose sum is the log-det.
pub fn coupling_forward(
    tape: &mut Tape,
    params: &Bound,
    cfg: &FlowConfig,
    k: usize,
    h: Var,
    c: Var,
) -> Result<(Var, Var)> {
    let sp = split(tape, h, k)?;
    let (log_s, t) = scale_shift(tape, params, cfg, k, sp.a, c)?;
    let s = tape.exp(log_s)?;
    let bs = tape.mul(sp.b, s)?;
    let b = tape.add(bs, t)?;
    Ok((join(tape, sp.a, b, sp.second)?, log_s))
}

/// Inverse of [`coupling_forward`]; the returned log-scales are those of the inverse map (`-log s`).
pub fn coupling_inverse(
    tape: &mut Tape,
    params: &Bound,
    cfg: &FlowConfig,
    k: usize,
    h: Var,
    c: Var,
) -> Result<(Var, Var)> {
    let sp = split(tape, h, k)?;
    let (log_s, t) = scale_shift(tape, params, cfg, k, sp.a, c)?;
    let neg = tape.scale(log_s, -1.0)?;
    let inv_s = tape.exp(neg)?;
    let bt = tape.sub(sp.b, t)?;
    let b = tape.mul(bt, inv_s)?;
    Ok((join(tape, sp.a, b, sp.second)?, neg))
}

/// Data to latent through every step. The second value holds each step's log-scales.
pub fn flow_forward(tape: &mut Tape, params: &Bound, cfg: &FlowConfig, x: Var, c: Var) -> Result<(Var, Vec<Var>)> {
    let mut h = x;
    let mut logs = Vec::with_capacity(cfg.n_steps);
    for k in 0..cfg.n_steps {
        let (next, ls) = coupling_forward(tape, params, cfg, k, h, c)?;
        h = next;
        logs.push(ls);
    }
    Ok((h, logs))
}

/// Latent to data, undoing the steps in reverse order.
pub fn flow_inverse(tape: &mut Tape, params: &Bound, cfg: &FlowConfig, z: Var, c: Var) -> Result<(Var, Vec<Var>)> {
    let mut h = z;
    let mut logs = Vec::with_capacity(cfg.n_steps);
    for k in (0..cfg.n_steps).rev() {
        let (next, ls) = coupling_inverse(tape, params, cfg, k, h, c)?;
        h = next;
        logs.push(ls);
    }
    Ok((h, logs))
}

/// Per-row log-determinant from a list of per-step log-scales.
pub fn row_log_det(tape: &Tape, logs: &[Var]) -> Vec<f64> {
    let mut out: Vec<f64> = Vec::new();
    for &v in logs {
        let t = tape.value(v);
        let (n, w) = t.dims2().expect("log-scales are matrices");
        out.resize(n, 0.0);
        for (i, o) in out.iter_mut().enumerate() {
            *o += t.data()[i * w..(i + 1) * w].iter().sum::<f64>();
        }
    }
    out
}

/// Negative log-likelihood per valid position and dimension.
pub fn flow_nll(tape: &mut Tape, params: &Bound, cfg: &FlowConfig, x: Var, c: Var, mask: &[bool]) -> Result<Var> {
    let (_, d) = tape.value(x).dims2()?;
    let valid = mask.iter().filter(|&&m| m).count();
    let (z, logs) = flow_forward(tape, params, cfg, x, c)?;
    let z = crate::regression::select_rows(tape, z, mask)?;
    let zz = tape.mul(z, z)?;
    let energy = tape.sum(zz, None)?;
    let mut total = tape.scale(energy, 0.5)?;
    for ls in logs {
        let ls = crate::regression::select_rows(tape, ls, mask)?;
        let s = tape.sum(ls, None)?;
        total = tape.sub(total, s)?;
    }
    let per_dim = tape.scale(total, 1.0 / (valid * d) as f64)?;
    let offset = tape.constant(Tensor::scalar(HALF_LN_2PI));
    tape.add(per_dim, offset)
}

/// Map latents `z` to data under conditioning `c` without recording gradients.
pub fn flow_decode(params: &ParameterStore, cfg: &FlowConfig, c: &Tensor, z: Tensor) -> Result<Tensor> {
    let mut tape = Tape::new();
    let bound = params.bind(&mut tape);
    let c = tape.constant(c.clone());
    let z = tape.constant(z);
    let (x, _) = flow_inverse(&mut tape, &bound, cfg, z, c)?;
    Ok(tape.value(x).clone())
}

/// Draw `z ~ N(0, tau^2 I)` row by row and invert the flow.
pub fn flow_sample(
    params: &ParameterStore,
    cfg: &FlowConfig,
    c: &Tensor,
    target_dim: usize,
    tau: f64,
    rng: &mut Rng,
) -> Result<Tensor> {
    if !(tau >= 0.0) {
        return Err(Error::contract(format!("tau must be non-negative, got {tau}")));
    }
    let (n, _) = c.dims2()?;
    let z: Vec<f64> = rng::normals(rng, n * target_dim).into_iter().map(|v| tau * v).collect();
    flow_decode(params, cfg, c, Tensor::new(vec![n, target_dim], z)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::params_check;
    use rand::Rng as _;

    fn tiny(seed: u64, d: usize, cd: usize, randomize: bool) -> (FlowConfig, ParameterStore) {
        let cfg = FlowConfig {
            n_steps: 4,
            hidden: 5,
            depth: 1,
            s_max: 3.0,
        };
        let mut init = Init::new(seed);
        cfg.init(&mut init, cd, d).unwrap();
        let mut p = init.finish();
        if randomize {
            let mut r = rng::stream(seed, "perturb");
            for (_, t) in p.iter_mut() {
                for v in t.data_mut() {
                    *v += r.random_range(-0.5..0.5);
                }
            }
        }
        (cfg, p)
    }

    fn random(r: &mut Rng, n: usize, d: usize) -> Tensor {
        Tensor::new(vec![n, d], rng::normals(r, n * d)).unwrap()
    }

    #[test]
    fn zero_init_step_is_identity() {
        let (cfg, p) = tiny(0, 2, 3, false);
        let mut r = rng::stream(0, "x");
        let mut tape = Tape::new();
        let b = p.bind(&mut tape);
        let xv = random(&mut r, 4, 2);
        let x = tape.constant(xv.clone());
        let c = tape.constant(random(&mut r, 4, 3));
        let (h, ls) = coupling_forward(&mut tape, &b, &cfg, 0, x, c).unwrap();
        assert_eq!(tape.value(h), &xv);
        assert!(tape.value(ls).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn hand_set_affine_step() {
        // out.bias holds raw (log s, t); the cap maps raw r to 3 tanh(r / 3) = ln 2
        let (cfg, mut p) = tiny(0, 2, 1, false);
        let raw = 3.0 * (2f64.ln() / 3.0).atanh();
        *p.get_mut("flow.0.out.bias").unwrap() = Tensor::new(vec![2], vec![raw, 1.0]).unwrap();
        let mut tape = Tape::new();
        let b = p.bind(&mut tape);
        let x = tape.constant(Tensor::from_rows(&[vec![0.4, 3.0]]).unwrap());
        let c = tape.constant(Tensor::zeros(&[1, 1]));
        let (h, ls) = coupling_forward(&mut tape, &b, &cfg, 0, x, c).unwrap();
        let h = tape.value(h).data();
        assert_eq!(h[0], 0.4);
        assert!((h[1] - 7.0).abs() < 1e-12);
        assert!((tape.value(ls).data()[0] - 2f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn roundtrip_and_log_det_cancel() {
        for seed in 0..50 {
            let d = 2 + (seed as usize % 3) * 3;
            let (cfg, p) = tiny(seed, d, 3, true);
            let mut r = rng::stream(seed, "roundtrip");
            let mut tape = Tape::new();
            let b = p.bind(&mut tape);
            let xv = random(&mut r, 5, d);
            let x = tape.constant(xv.clone());
            let c = tape.constant(random(&mut r, 5, 3));
            let (z, fwd) = flow_forward(&mut tape, &b, &cfg, x, c).unwrap();
            let (back, inv) = flow_inverse(&mut tape, &b, &cfg, z, c).unwrap();
            for (a, b) in tape.value(back).data().iter().zip(xv.data()) {
                assert!((a - b).abs() < 1e-10);
            }
            for (f, i) in row_log_det(&tape, &fwd).iter().zip(row_log_det(&tape, &inv)) {
                assert!((f + i).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn identity_nll_anchors() {
        let (cfg, p) = tiny(1, 2, 2, false);
        let mut tape = Tape::new();
        let b = p.bind(&mut tape);
        let x = tape.constant(Tensor::zeros(&[3, 2]));
        let c = tape.constant(Tensor::zeros(&[3, 2]));
        let nll = flow_nll(&mut tape, &b, &cfg, x, c, &[true; 3]).unwrap();
        assert!((tape.value(nll).item().unwrap() - HALF_LN_2PI).abs() < 1e-12);

        let mut r = rng::stream(1, "gauss");
        let n = 100_000;
        let x = tape.constant(random(&mut r, n, 2));
        let c = tape.constant(Tensor::zeros(&[n, 2]));
        let nll = flow_nll(&mut tape, &b, &cfg, x, c, &vec![true; n]).unwrap();
        let entropy = 0.5 * (1.0 + (2.0 * std::f64::consts::PI).ln());
        assert!((tape.value(nll).item().unwrap() - entropy).abs() < 0.01);
    }

    #[test]
    fn masked_rows_do_not_count() {
        let (cfg, p) = tiny(3, 2, 2, true);
        let mut r = rng::stream(3, "mask");
        let xv = random(&mut r, 4, 2);
        let cv = random(&mut r, 4, 2);
        let eval = |x: Tensor, c: Tensor, mask: &[bool]| {
            let mut tape = Tape::new();
            let b = p.bind(&mut tape);
            let x = tape.constant(x);
            let c = tape.constant(c);
            let v = flow_nll(&mut tape, &b, &cfg, x, c, mask).unwrap();
            tape.value(v).item().unwrap()
        };
        let full = eval(
            xv.gather_rows(&[Some(0), Some(2)]).unwrap(),
            cv.gather_rows(&[Some(0), Some(2)]).unwrap(),
            &[true; 2],
        );
        let masked = eval(xv, cv, &[true, false, true, false]);
        assert!((full - masked).abs() < 1e-12);
    }

    #[test]
    fn nll_gradients() {
        for seed in 0..10 {
            let (cfg, p) = tiny(seed, 2, 3, true);
            let mut r = rng::stream(seed, "nll-grad");
            let x = random(&mut r, 3, 2);
            let c = random(&mut r, 3, 3);
            let err = params_check(
                &p,
                |tape, b| {
                    let x = tape.constant(x.clone());
                    let c = tape.constant(c.clone());
                    flow_nll(tape, b, &cfg, x, c, &[true, true, false])
                },
                1e-5,
            )
            .unwrap();
            assert!(err < 1e-4, "seed {seed}: {err}");
        }
    }

    #[test]
    fn sampling_degenerate_cases() {
        let (cfg, p) = tiny(2, 2, 2, false);
        let c = Tensor::zeros(&[3, 2]);
        let mut r1 = rng::stream(1, "s");
        let z = flow_sample(&p, &cfg, &c, 2, 1.0, &mut r1).unwrap();
        let mut r2 = rng::stream(1, "s");
        assert_eq!(z.data(), rng::normals(&mut r2, 6).as_slice());

        let (cfg, p) = tiny(2, 2, 2, true);
        let a = flow_sample(&p, &cfg, &c, 2, 0.0, &mut rng::stream(1, "a")).unwrap();
        let b = flow_sample(&p, &cfg, &c, 2, 0.0, &mut rng::stream(2, "b")).unwrap();
        assert_eq!(a, b);
        assert_eq!(a, flow_decode(&p, &cfg, &c, Tensor::zeros(&[3, 2])).unwrap());
        assert!(flow_sample(&p, &cfg, &c, 2, -0.1, &mut r1).is_err());
    }
}
