//! Reverse-mode automatic differentiation over [`Tensor`] values.
//!
//! A [`Tape`] records every operation applied to its [`Var`] handles in
//! execution order, which is also a topological order. [`Tape::backward`]
//! walks the record in reverse and returns a gradient for every node.
//!
//! ```
//! use prosody_core::tape::Tape;
//! use prosody_core::tensor::Tensor;
//!
//! let mut tape = Tape::new();
//! let x = tape.leaf(Tensor::new(vec![2], vec![1.0, -2.0]).unwrap());
//! let sq = tape.mul(x, x).unwrap();
//! let loss = tape.sum(sq, None).unwrap();
//! let grads = tape.backward(loss).unwrap();
//! assert_eq!(grads.get(x).data(), &[2.0, -4.0]);
//! ```

use crate::error::{Error, Result};
use crate::tensor::{gemm_acc, sigmoid, Elementwise, Reduce, Tensor};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Exp(Var),
    Log(Var),
    Tanh(Var),
    Softplus(Var),
    Abs(Var),
    Scale(Var, f64),
    Reduce(Var, Reduce, Option<usize>),
    Concat(Vec<Var>, usize),
    Slice { src: Var, axis: usize, offset: usize },
    GatherRows(Var, Vec<Option<usize>>),
    BroadcastRows(Var),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients of a scalar with respect to every node of the tape it came from.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Tensor>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> &Tensor {
        &self.grads[v.0]
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Current length; pass to [`Tape::rewind`] to drop everything recorded after it.
    pub fn mark(&self) -> usize {
        self.nodes.len()
    }

    pub fn rewind(&mut self, mark: usize) {
        self.nodes.truncate(mark);
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf)
    }

    /// Same as [`Tape::leaf`]; used where the caller never reads the gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).matmul(self.value(b))?;
        Ok(self.push(out, Op::MatMul(a, b)))
    }

    pub fn elementwise(&mut self, op: Elementwise, a: Var, b: Option<Var>) -> Result<Var> {
        let out = self.value(a).elementwise(op, b.map(|b| self.value(b)))?;
        let rec = match (op, b) {
            (Elementwise::Add, Some(b)) => Op::Add(a, b),
            (Elementwise::Sub, Some(b)) => Op::Sub(a, b),
            (Elementwise::Mul, Some(b)) => Op::Mul(a, b),
            (Elementwise::Exp, None) => Op::Exp(a),
            (Elementwise::Log, None) => Op::Log(a),
            (Elementwise::Tanh, None) => Op::Tanh(a),
            (Elementwise::Softplus, None) => Op::Softplus(a),
            (Elementwise::Abs, None) => Op::Abs(a),
            (Elementwise::Scale(s), None) => Op::Scale(a, s),
            // operand-count mismatches were rejected by the forward call
            _ => unreachable!(),
        };
        Ok(self.push(out, rec))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.elementwise(Elementwise::Add, a, Some(b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.elementwise(Elementwise::Sub, a, Some(b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.elementwise(Elementwise::Mul, a, Some(b))
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        self.elementwise(Elementwise::Exp, a, None)
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        self.elementwise(Elementwise::Log, a, None)
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        self.elementwise(Elementwise::Tanh, a, None)
    }

    pub fn softplus(&mut self, a: Var) -> Result<Var> {
        self.elementwise(Elementwise::Softplus, a, None)
    }

    pub fn abs(&mut self, a: Var) -> Result<Var> {
        self.elementwise(Elementwise::Abs, a, None)
    }

    pub fn scale(&mut self, a: Var, alpha: f64) -> Result<Var> {
        self.elementwise(Elementwise::Scale(alpha), a, None)
    }

    pub fn reduce(&mut self, op: Reduce, a: Var, axis: Option<usize>) -> Result<Var> {
        let out = self.value(a).reduce(op, axis)?;
        Ok(self.push(out, Op::Reduce(a, op, axis)))
    }

    pub fn sum(&mut self, a: Var, axis: Option<usize>) -> Result<Var> {
        self.reduce(Reduce::Sum, a, axis)
    }

    pub fn mean(&mut self, a: Var, axis: Option<usize>) -> Result<Var> {
        self.reduce(Reduce::Mean, a, axis)
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let values: Vec<&Tensor> = parts.iter().map(|&v| self.value(v)).collect();
        let out = Tensor::concat(&values, axis)?;
        Ok(self.push(out, Op::Concat(parts.to_vec(), axis)))
    }

    pub fn split(&mut self, a: Var, axis: usize, sizes: &[usize]) -> Result<Vec<Var>> {
        let parts = self.value(a).split(axis, sizes)?;
        let mut offset = 0;
        let mut out = Vec::with_capacity(parts.len());
        for (part, &len) in parts.into_iter().zip(sizes) {
            out.push(self.push(part, Op::Slice { src: a, axis, offset }));
            offset += len;
        }
        Ok(out)
    }

    pub fn gather_rows(&mut self, table: Var, ids: &[Option<usize>]) -> Result<Var> {
        let out = self.value(table).gather_rows(ids)?;
        Ok(self.push(out, Op::GatherRows(table, ids.to_vec())))
    }

    pub fn broadcast_rows(&mut self, a: Var, n: usize) -> Result<Var> {
        let out = self.value(a).broadcast_rows(n)?;
        Ok(self.push(out, Op::BroadcastRows(a)))
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if !self.value(loss).is_scalar() {
            return Err(Error::contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            let out = &node.value;
            match &node.op {
                Op::Leaf => {}
                Op::MatMul(a, b) => {
                    let av = self.value(*a);
                    let bv = self.value(*b);
                    let (m, k) = (av.shape()[0], av.shape()[1]);
                    let n = bv.shape()[1];
                    let ga = slot(&mut grads, *a, m * k);
                    gemm_acc(m, n, k, &g, false, bv.data(), true, ga, 1.0);
                    let gb = slot(&mut grads, *b, k * n);
                    gemm_acc(k, m, n, av.data(), true, &g, false, gb, 1.0);
                }
                Op::Add(a, b) => {
                    accumulate(&mut grads, *a, g.iter().copied());
                    accumulate(&mut grads, *b, g.iter().copied());
                }
                Op::Sub(a, b) => {
                    accumulate(&mut grads, *a, g.iter().copied());
                    accumulate(&mut grads, *b, g.iter().map(|v| -v));
                }
                Op::Mul(a, b) => {
                    let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                    accumulate(&mut grads, *a, g.iter().zip(bv).map(|(g, y)| g * y));
                    accumulate(&mut grads, *b, g.iter().zip(av).map(|(g, x)| g * x));
                }
                Op::Exp(a) => {
                    accumulate(&mut grads, *a, g.iter().zip(out.data()).map(|(g, y)| g * y));
                }
                Op::Log(a) => {
                    let x = self.value(*a).data();
                    accumulate(&mut grads, *a, g.iter().zip(x).map(|(g, x)| g / x));
                }
                Op::Tanh(a) => {
                    accumulate(&mut grads, *a, g.iter().zip(out.data()).map(|(g, y)| g * (1.0 - y * y)));
                }
                Op::Softplus(a) => {
                    let x = self.value(*a).data();
                    accumulate(&mut grads, *a, g.iter().zip(x).map(|(g, &x)| g * sigmoid(x)));
                }
                Op::Abs(a) => {
                    let x = self.value(*a).data();
                    accumulate(
                        &mut grads,
                        *a,
                        g.iter().zip(x).map(|(g, &x)| {
                            if x > 0.0 {
                                *g
                            } else if x < 0.0 {
                                -g
                            } else {
                                0.0
                            }
                        }),
                    );
                }
                Op::Scale(a, s) => {
                    accumulate(&mut grads, *a, g.iter().map(|g| g * s));
                }
                Op::Reduce(a, op, axis) => {
                    let src = self.value(*a);
                    let mut full = vec![0.0; src.len()];
                    match axis {
                        None => {
                            let v = match op {
                                Reduce::Sum => g[0],
                                Reduce::Mean => g[0] / src.len() as f64,
                            };
                            full.iter_mut().for_each(|x| *x = v);
                        }
                        Some(axis) => {
                            let shape = src.shape();
                            let outer: usize = shape[..*axis].iter().product();
                            let len = shape[*axis];
                            let inner: usize = shape[axis + 1..].iter().product();
                            let f = match op {
                                Reduce::Sum => 1.0,
                                Reduce::Mean => 1.0 / len as f64,
                            };
                            for o in 0..outer {
                                for l in 0..len {
                                    let dst = &mut full[(o * len + l) * inner..][..inner];
                                    for (d, gv) in dst.iter_mut().zip(&g[o * inner..][..inner]) {
                                        *d = gv * f;
                                    }
                                }
                            }
                        }
                    }
                    accumulate(&mut grads, *a, full.into_iter());
                }
                Op::Concat(parts, axis) => {
                    let shape = out.shape();
                    let outer: usize = shape[..*axis].iter().product();
                    let inner: usize = shape[axis + 1..].iter().product();
                    let total = shape[*axis];
                    let mut offset = 0;
                    for p in parts {
                        let len = self.value(*p).shape()[*axis];
                        let dst = slot(&mut grads, *p, outer * len * inner);
                        for o in 0..outer {
                            let src = &g[(o * total + offset) * inner..][..len * inner];
                            for (d, s) in dst[o * len * inner..][..len * inner].iter_mut().zip(src) {
                                *d += s;
                            }
                        }
                        offset += len;
                    }
                }
                Op::Slice { src, axis, offset } => {
                    let full_shape = self.value(*src).shape().to_vec();
                    let outer: usize = full_shape[..*axis].iter().product();
                    let inner: usize = full_shape[axis + 1..].iter().product();
                    let total = full_shape[*axis];
                    let len = out.shape()[*axis];
                    let n = full_shape.iter().product();
                    let dst = slot(&mut grads, *src, n);
                    for o in 0..outer {
                        let d = &mut dst[(o * total + offset) * inner..][..len * inner];
                        for (d, s) in d.iter_mut().zip(&g[o * len * inner..][..len * inner]) {
                            *d += s;
                        }
                    }
                }
                Op::GatherRows(table, ids) => {
                    let tv = self.value(*table);
                    let d = tv.shape()[1];
                    let dst = slot(&mut grads, *table, tv.len());
                    for (r, id) in ids.iter().enumerate() {
                        if let Some(i) = id {
                            for (dv, gv) in dst[i * d..(i + 1) * d].iter_mut().zip(&g[r * d..][..d]) {
                                *dv += gv;
                            }
                        }
                    }
                }
                Op::BroadcastRows(a) => {
                    let d = self.value(*a).len();
                    let dst = slot(&mut grads, *a, d);
                    for row in g.chunks(d) {
                        for (dv, gv) in dst.iter_mut().zip(row) {
                            *dv += gv;
                        }
                    }
                }
            }
            grads[idx] = Some(g);
        }

        let grads = grads
            .into_iter()
            .zip(&self.nodes)
            .map(|(g, node)| {
                let shape = node.value.shape().to_vec();
                match g {
                    Some(g) => Tensor::new(shape, g),
                    None => Ok(Tensor::zeros(&shape)),
                }
                .and_then(|t| t.ensure_finite("backward"))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Gradients { grads })
    }
}

fn slot(grads: &mut [Option<Vec<f64>>], v: Var, n: usize) -> &mut [f64] {
    grads[v.0].get_or_insert_with(|| vec![0.0; n])
}

fn accumulate(grads: &mut [Option<Vec<f64>>], v: Var, g: impl ExactSizeIterator<Item = f64>) {
    let n = g.len();
    for (d, s) in slot(grads, v, n).iter_mut().zip(g) {
        *d += s;
    }
}
