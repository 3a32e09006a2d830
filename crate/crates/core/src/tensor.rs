//! Dense row-major `f64` tensors.
//!
//! Every operation here is a pure function of its inputs. There is no
//! implicit broadcasting: binary operations require identical shapes, and
//! the only scalar-times-tensor operation is [`Elementwise::Scale`].
//! Row-bias addition goes through [`Tensor::broadcast_rows`], which the caller
//! invokes explicitly.

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

/// Pointwise operations. Binary variants take a second operand of identical shape.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Elementwise {
    Add,
    Sub,
    Mul,
    Exp,
    Log,
    Tanh,
    Softplus,
    Abs,
    Scale(f64),
}

impl Elementwise {
    pub fn is_binary(self) -> bool {
        matches!(self, Elementwise::Add | Elementwise::Sub | Elementwise::Mul)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Reduce {
    Sum,
    Mean,
}

pub(crate) fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.is_empty() || shape.contains(&0) {
            return Err(Error::dim(format!(
                "shape must be a non-empty list of positive sizes, got {shape:?}"
            )));
        }
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::dim(format!(
                "shape {shape:?} holds {n} values but {} were given",
                data.len()
            )));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![value; n],
        }
    }

    pub fn scalar(value: f64) -> Self {
        Self {
            shape: vec![1],
            data: vec![value],
        }
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let n = rows.len();
        let d = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != d) {
            return Err(Error::dim("ragged rows"));
        }
        Self::new(vec![n, d], rows.concat())
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1
    }

    /// Number of rows and columns of a rank-2 tensor.
    pub fn dims2(&self) -> Result<(usize, usize)> {
        match self.shape[..] {
            [r, c] => Ok((r, c)),
            _ => Err(Error::dim(format!("expected a matrix, got shape {:?}", self.shape))),
        }
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let d = self.data.len() / self.shape[0];
        &self.data[i * d..(i + 1) * d]
    }

    pub fn item(&self) -> Result<f64> {
        if self.is_scalar() {
            Ok(self.data[0])
        } else {
            Err(Error::contract(format!(
                "expected a scalar, got shape {:?}",
                self.shape
            )))
        }
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Self> {
        Self::new(shape.to_vec(), self.data.clone())
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub(crate) fn ensure_finite(self, op: &str) -> Result<Self> {
        if let Some(pos) = self.data.iter().position(|v| !v.is_finite()) {
            return Err(Error::Numeric(format!(
                "{op} produced a non-finite value ({}) at flat index {pos}",
                self.data[pos]
            )));
        }
        Ok(self)
    }

    fn same_shape(&self, other: &Tensor, op: &str) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::dim(format!(
                "{op}: shapes {:?} and {:?} differ",
                self.shape, other.shape
            )));
        }
        Ok(())
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn zip_with(&self, other: &Tensor, op: &str, f: impl Fn(f64, f64) -> f64) -> Result<Self> {
        self.same_shape(other, op)?;
        Ok(Self {
            shape: self.shape.clone(),
            data: self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect(),
        })
    }

    pub fn matmul(&self, other: &Tensor) -> Result<Self> {
        let (m, k) = self.dims2()?;
        let (k2, n) = other.dims2()?;
        if k != k2 {
            return Err(Error::dim(format!(
                "matmul: inner dimensions disagree for {:?} x {:?}",
                self.shape, other.shape
            )));
        }
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, &self.data, false, &other.data, false, &mut out);
        Self::new(vec![m, n], out)?.ensure_finite("matmul")
    }

    pub fn elementwise(&self, op: Elementwise, other: Option<&Tensor>) -> Result<Self> {
        let out = match (op, other) {
            (Elementwise::Add, Some(b)) => self.zip_with(b, "add", |x, y| x + y)?,
            (Elementwise::Sub, Some(b)) => self.zip_with(b, "sub", |x, y| x - y)?,
            (Elementwise::Mul, Some(b)) => self.zip_with(b, "mul", |x, y| x * y)?,
            (op, Some(_)) if !op.is_binary() => return Err(Error::contract(format!("{op:?} takes one operand"))),
            (op, None) if op.is_binary() => return Err(Error::contract(format!("{op:?} takes two operands"))),
            (Elementwise::Exp, None) => self.map(f64::exp),
            (Elementwise::Log, None) => {
                if let Some(v) = self.data.iter().find(|&&v| v <= 0.0 || v.is_nan()) {
                    return Err(Error::Domain(format!("log of non-positive value {v}")));
                }
                self.map(f64::ln)
            }
            (Elementwise::Tanh, None) => self.map(f64::tanh),
            (Elementwise::Softplus, None) => self.map(softplus),
            (Elementwise::Abs, None) => self.map(f64::abs),
            (Elementwise::Scale(alpha), None) => self.map(|v| alpha * v),
            _ => unreachable!(),
        };
        out.ensure_finite(&format!("{op:?}"))
    }

    fn check_axis(&self, axis: usize) -> Result<()> {
        if axis >= self.rank() {
            return Err(Error::dim(format!(
                "axis {axis} out of range for shape {:?}",
                self.shape
            )));
        }
        Ok(())
    }

    /// (outer, axis length, inner) strides for addressing along `axis`.
    fn axis_layout(&self, axis: usize) -> (usize, usize, usize) {
        let outer = self.shape[..axis].iter().product();
        let inner = self.shape[axis + 1..].iter().product();
        (outer, self.shape[axis], inner)
    }

    pub fn reduce(&self, op: Reduce, axis: Option<usize>) -> Result<Self> {
        let Some(axis) = axis else {
            let s: f64 = self.data.iter().sum();
            let v = match op {
                Reduce::Sum => s,
                Reduce::Mean => s / self.len() as f64,
            };
            return Self::scalar(v).ensure_finite("reduce");
        };
        self.check_axis(axis)?;
        let (outer, len, inner) = self.axis_layout(axis);
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for a in 0..len {
                let src = &self.data[(o * len + a) * inner..(o * len + a + 1) * inner];
                for (acc, &v) in out[o * inner..(o + 1) * inner].iter_mut().zip(src) {
                    *acc += v;
                }
            }
        }
        if op == Reduce::Mean {
            let inv = 1.0 / len as f64;
            out.iter_mut().for_each(|v| *v *= inv);
        }
        let mut shape: Vec<usize> = self.shape.clone();
        shape.remove(axis);
        if shape.is_empty() {
            shape.push(1);
        }
        Self::new(shape, out)?.ensure_finite("reduce")
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn concat(parts: &[&Tensor], axis: usize) -> Result<Self> {
        let first = parts.first().ok_or_else(|| Error::dim("concat of zero tensors"))?;
        first.check_axis(axis)?;
        for p in &parts[1..] {
            let agree = p.rank() == first.rank()
                && p.shape
                    .iter()
                    .zip(&first.shape)
                    .enumerate()
                    .all(|(i, (a, b))| i == axis || a == b);
            if !agree {
                return Err(Error::dim(format!(
                    "concat along axis {axis}: shapes {:?} and {:?} disagree",
                    first.shape, p.shape
                )));
            }
        }
        let (outer, _, inner) = first.axis_layout(axis);
        let total: usize = parts.iter().map(|p| p.shape[axis]).sum();
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for p in parts {
                let chunk = p.shape[axis] * inner;
                data.extend_from_slice(&p.data[o * chunk..(o + 1) * chunk]);
            }
        }
        let mut shape = first.shape.clone();
        shape[axis] = total;
        Self::new(shape, data)
    }

    pub fn split(&self, axis: usize, sizes: &[usize]) -> Result<Vec<Self>> {
        self.check_axis(axis)?;
        if sizes.iter().sum::<usize>() != self.shape[axis] || sizes.contains(&0) {
            return Err(Error::dim(format!(
                "split sizes {sizes:?} do not partition axis {axis} of shape {:?}",
                self.shape
            )));
        }
        let mut offset = 0;
        let mut out = Vec::with_capacity(sizes.len());
        for &len in sizes {
            out.push(self.slice_axis(axis, offset, len));
            offset += len;
        }
        Ok(out)
    }

    pub(crate) fn slice_axis(&self, axis: usize, offset: usize, len: usize) -> Self {
        let (outer, full, inner) = self.axis_layout(axis);
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let start = (o * full + offset) * inner;
            data.extend_from_slice(&self.data[start..start + len * inner]);
        }
        let mut shape = self.shape.clone();
        shape[axis] = len;
        Self { shape, data }
    }

    /// Row gather from a `[V, d]` table; `None` selects a zero row.
    pub fn gather_rows(&self, ids: &[Option<usize>]) -> Result<Self> {
        let (v, d) = self.dims2()?;
        if ids.is_empty() {
            return Err(Error::dim("gather of zero rows"));
        }
        let mut data = Vec::with_capacity(ids.len() * d);
        for id in ids {
            match *id {
                Some(i) if i >= v => return Err(Error::Index { index: i, size: v }),
                Some(i) => data.extend_from_slice(&self.data[i * d..(i + 1) * d]),
                None => data.extend(std::iter::repeat_n(0.0, d)),
            }
        }
        Self::new(vec![ids.len(), d], data)
    }

    /// Repeat a `[d]` vector as the `n` rows of an `[n, d]` matrix.
    pub fn broadcast_rows(&self, n: usize) -> Result<Self> {
        if self.rank() != 1 {
            return Err(Error::dim(format!(
                "broadcast_rows expects a vector, got {:?}",
                self.shape
            )));
        }
        let mut data = Vec::with_capacity(n * self.len());
        for _ in 0..n {
            data.extend_from_slice(&self.data);
        }
        Self::new(vec![n, self.len()], data)
    }
}

/// `out (+)= op(a) * op(b)` for row-major operands, where `op` optionally transposes.
/// Shapes are given for the product: `op(a)` is `m x k`, `op(b)` is `k x n`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm_acc(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_trans: bool,
    b: &[f64],
    b_trans: bool,
    out: &mut [f64],
    beta: f64,
) {
    assert_eq!(a.len(), m * k);
    assert_eq!(b.len(), k * n);
    assert_eq!(out.len(), m * n);
    let (rsa, csa) = if a_trans { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_trans { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: the asserted slice lengths cover every index reachable through
    // the given dimensions and strides.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            out.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(m: usize, k: usize, n: usize, a: &[f64], a_trans: bool, b: &[f64], b_trans: bool, out: &mut [f64]) {
    gemm_acc(m, k, n, a, a_trans, b, b_trans, out, 0.0);
}
