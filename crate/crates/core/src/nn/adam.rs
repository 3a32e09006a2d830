use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{GradMap, ParameterStore};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub b1: f64,
    pub b2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            b1: 0.9,
            b2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First/second moments in parameter-store order.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub config: AdamConfig,
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
    pub t: u64,
}

impl AdamState {
    pub fn new(params: &ParameterStore, config: AdamConfig) -> Self {
        let zeros: Vec<Tensor> = params.iter().map(|(_, p)| Tensor::zeros(p.shape())).collect();
        Self {
            config,
            m: zeros.clone(),
            v: zeros,
            t: 0,
        }
    }
}

/// One bias-corrected Adam update of every parameter.
pub fn adam_step(params: &mut ParameterStore, grads: &GradMap, state: &mut AdamState) -> Result<()> {
    if state.m.len() != params.len() {
        return Err(Error::contract(format!(
            "optimizer state tracks {} tensors, store has {}",
            state.m.len(),
            params.len()
        )));
    }
    for (name, _) in params.iter() {
        if !grads.contains_key(name) {
            return Err(Error::contract(format!("missing gradient for parameter {name}")));
        }
    }
    state.t += 1;
    let AdamConfig { lr, b1, b2, eps } = state.config;
    let c1 = 1.0 - b1.powi(state.t as i32);
    let c2 = 1.0 - b2.powi(state.t as i32);
    for (i, (name, p)) in params.iter_mut().enumerate() {
        let g = &grads[name];
        if g.shape() != p.shape() {
            return Err(Error::contract(format!(
                "gradient for {name} has shape {:?}, parameter {:?}",
                g.shape(),
                p.shape()
            )));
        }
        let m = state.m[i].data_mut();
        let v = state.v[i].data_mut();
        for (((pv, &gv), mv), vv) in p.data_mut().iter_mut().zip(g.data()).zip(m).zip(v) {
            *mv = b1 * *mv + (1.0 - b1) * gv;
            *vv = b2 * *vv + (1.0 - b2) * gv * gv;
            let m_hat = *mv / c1;
            let v_hat = *vv / c2;
            *pv -= lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
    Ok(())
}

/// Scale all gradients so their joint L2 norm is at most `max_norm`. Returns the norm before scaling.
pub fn clip_global_norm(grads: &mut GradMap, max_norm: f64) -> f64 {
    let norm = grads
        .values()
        .flat_map(|g| g.data().iter())
        .map(|v| v * v)
        .sum::<f64>()
        .sqrt();
    if norm > max_norm {
        let s = max_norm / norm;
        for g in grads.values_mut() {
            g.data_mut().iter_mut().for_each(|v| *v *= s);
        }
    }
    norm
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar_store(v: f64) -> ParameterStore {
        let mut s = ParameterStore::new();
        s.insert("p", Tensor::scalar(v)).unwrap();
        s
    }

    fn grad(v: f64) -> GradMap {
        let mut g = GradMap::new();
        g.insert("p".into(), Tensor::scalar(v));
        g
    }

    #[test]
    fn zero_gradient_is_a_no_op() {
        let mut p = scalar_store(0.37);
        let mut st = AdamState::new(&p, AdamConfig::default());
        for _ in 0..5 {
            adam_step(&mut p, &grad(0.0), &mut st).unwrap();
        }
        assert_eq!(p.get("p").unwrap().data(), &[0.37]);
        assert_eq!(st.t, 5);
    }

    #[test]
    fn single_step_by_hand() {
        let mut p = scalar_store(0.0);
        let cfg = AdamConfig {
            lr: 0.1,
            ..AdamConfig::default()
        };
        let mut st = AdamState::new(&p, cfg);
        adam_step(&mut p, &grad(1.0), &mut st).unwrap();
        // m_hat = v_hat = 1
        let expect = -0.1 * 1.0 / (1.0 + 1e-8);
        assert_eq!(p.get("p").unwrap().data()[0], expect);
        assert!((expect + 0.0999999990).abs() < 1e-12);
    }

    #[test]
    fn missing_gradient_is_contract_error() {
        let mut p = scalar_store(0.0);
        let mut st = AdamState::new(&p, AdamConfig::default());
        assert!(matches!(
            adam_step(&mut p, &GradMap::new(), &mut st),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn repeated_runs_are_bitwise_identical() {
        let run = || {
            let mut p = scalar_store(1.0);
            let mut st = AdamState::new(&p, AdamConfig::default());
            for i in 0..100 {
                let x = p.get("p").unwrap().data()[0];
                adam_step(&mut p, &grad(2.0 * x + (i as f64).sin()), &mut st).unwrap();
            }
            p.get("p").unwrap().data()[0].to_bits()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn clipping() {
        let mut g = grad(10.0);
        let n = clip_global_norm(&mut g, 5.0);
        assert_eq!(n, 10.0);
        assert_eq!(g["p"].data(), &[5.0]);
        let mut small = grad(1.0);
        clip_global_norm(&mut small, 5.0);
        assert_eq!(small["p"].data(), &[1.0]);
    }
}
