//! Dense row-major tensors and the plain numeric kernels shared by the tape.

use crate::error::{Error, Result};
use crate::real::Real;

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<F: Real = f32> {
    shape: Vec<usize>,
    data: Vec<F>,
    grad: Option<Vec<F>>,
    requires_grad: bool,
}

impl<F: Real> Tensor<F> {
    pub fn new(shape: &[usize], data: Vec<F>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::dim(format!(
                "shape {:?} holds {} values, got {}",
                shape,
                n,
                data.len()
            )));
        }
        Ok(Self { shape: shape.to_vec(), data, grad: None, requires_grad: false })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Self { shape: shape.to_vec(), data: vec![F::zero(); n], grad: None, requires_grad: false }
    }

    pub fn full(shape: &[usize], value: F) -> Self {
        let mut t = Self::zeros(shape);
        t.data.iter_mut().for_each(|x| *x = value);
        t
    }

    pub fn scalar(value: F) -> Self {
        Self { shape: vec![], data: vec![value], grad: None, requires_grad: false }
    }

    pub fn vector(data: Vec<F>) -> Self {
        Self { shape: vec![data.len()], data, grad: None, requires_grad: false }
    }

    /// Builds a `rows × cols` matrix from nested rows.
    pub fn from_rows(rows: &[Vec<F>]) -> Result<Self> {
        let cols = rows.first().map_or(0, |r| r.len());
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::dim("ragged rows"));
        }
        let data = rows.iter().flatten().copied().collect();
        Self::new(&[rows.len(), cols], data)
    }

    pub fn identity(n: usize) -> Self {
        let mut t = Self::zeros(&[n, n]);
        for i in 0..n {
            t.data[i * n + i] = F::one();
        }
        t
    }

    pub fn with_requires_grad(mut self, flag: bool) -> Self {
        self.requires_grad = flag;
        self
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[F] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [F] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<F> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn grad(&self) -> Option<&[F]> {
        self.grad.as_deref()
    }

    pub fn zero_grad(&mut self) {
        self.grad = None;
    }

    pub(crate) fn accumulate_grad(&mut self, g: &[F]) {
        match &mut self.grad {
            Some(acc) => acc.iter_mut().zip(g).for_each(|(a, b)| *a += *b),
            None => self.grad = Some(g.to_vec()),
        }
    }

    /// Number of rows when viewed as a matrix over the last axis.
    pub fn rows(&self) -> usize {
        match self.shape.len() {
            0 => 1,
            _ => self.data.len().checked_div(self.cols()).unwrap_or(0),
        }
    }

    /// Extent of the last axis (1 for scalars).
    pub fn cols(&self) -> usize {
        self.shape.last().copied().unwrap_or(1)
    }

    pub fn row(&self, i: usize) -> &[F] {
        let c = self.cols();
        &self.data[i * c..(i + 1) * c]
    }

    pub fn item(&self) -> F {
        self.data[0]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != self.data.len() {
            return Err(Error::dim(format!("cannot reshape {:?} into {:?}", self.shape, shape)));
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    pub fn cast<G: Real>(&self) -> Tensor<G> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|x| G::of(x.f64())).collect(),
            grad: self.grad.as_ref().map(|g| g.iter().map(|x| G::of(x.f64())).collect()),
            requires_grad: self.requires_grad,
        }
    }

    pub fn matmul(&self, other: &Tensor<F>) -> Result<Tensor<F>> {
        let (m, k) = matrix_dims(self)?;
        let (k2, n) = matrix_dims(other)?;
        if k != k2 {
            return Err(Error::dim(format!(
                "matmul inner dimensions disagree: {:?} · {:?}",
                self.shape, other.shape
            )));
        }
        let mut out = vec![F::zero(); m * n];
        matmul_into(&self.data, &other.data, &mut out, m, k, n);
        Tensor::new(&[m, n], out)
    }

    pub fn softmax(&self, axis: usize) -> Result<Tensor<F>> {
        let (outer, len, inner) = axis_layout(&self.shape, axis)?;
        let mut out = self.data.clone();
        softmax_axis(&mut out, outer, len, inner);
        Tensor::new(&self.shape, out)
    }
}

pub(crate) fn matrix_dims<F: Real>(t: &Tensor<F>) -> Result<(usize, usize)> {
    match t.shape() {
        [r, c] => Ok((*r, *c)),
        [c] => Ok((1, *c)),
        s => Err(Error::dim(format!("expected a matrix, got shape {:?}", s))),
    }
}

/// Splits `shape` around `axis` into (outer, axis extent, inner).
pub(crate) fn axis_layout(shape: &[usize], axis: usize) -> Result<(usize, usize, usize)> {
    if axis >= shape.len() {
        return Err(Error::dim(format!("axis {} out of range for shape {:?}", axis, shape)));
    }
    let len = shape[axis];
    if len == 0 {
        return Err(Error::dim(format!("softmax over empty axis {} of {:?}", axis, shape)));
    }
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    Ok((outer, len, inner))
}

/// `out[m×n] = a[m×k] · b[k×n]`, overwriting `out`.
pub(crate) fn matmul_into<F: Real>(a: &[F], b: &[F], out: &mut [F], m: usize, k: usize, n: usize) {
    out.iter_mut().for_each(|x| *x = F::zero());
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == F::zero() {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

/// `out[m×k] += g[m×n] · b[k×n]ᵀ`.
pub(crate) fn matmul_a_bt_acc<F: Real>(g: &[F], b: &[F], out: &mut [F], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let grow = &g[i * n..(i + 1) * n];
        for p in 0..k {
            let brow = &b[p * n..(p + 1) * n];
            let mut s = F::zero();
            for (x, y) in grow.iter().zip(brow) {
                s += *x * *y;
            }
            out[i * k + p] += s;
        }
    }
}

/// `out[k×n] += a[m×k]ᵀ · g[m×n]`.
pub(crate) fn matmul_at_b_acc<F: Real>(a: &[F], g: &[F], out: &mut [F], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let grow = &g[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == F::zero() {
                continue;
            }
            let orow = &mut out[p * n..(p + 1) * n];
            for (o, &gv) in orow.iter_mut().zip(grow) {
                *o += av * gv;
            }
        }
    }
}

/// In-place softmax along the middle extent of an (outer, len, inner) layout.
/// Each slice is shifted by its maximum before exponentiation.
pub(crate) fn softmax_axis<F: Real>(x: &mut [F], outer: usize, len: usize, inner: usize) {
    for o in 0..outer {
        for i in 0..inner {
            let idx = |j: usize| (o * len + j) * inner + i;
            let mut max = F::neg_infinity();
            for j in 0..len {
                max = max.max(x[idx(j)]);
            }
            let mut sum = F::zero();
            for j in 0..len {
                let e = (x[idx(j)] - max).exp();
                x[idx(j)] = e;
                sum += e;
            }
            for j in 0..len {
                x[idx(j)] /= sum;
            }
        }
    }
}

/// Cosine similarity with each norm floored at `eps`. Zero vectors give 0.
pub fn cosine_sim<F: Real>(u: &[F], v: &[F], eps: F) -> Result<F> {
    if u.len() != v.len() {
        return Err(Error::dim(format!("cosine of lengths {} and {}", u.len(), v.len())));
    }
    let dot: F = u.iter().zip(v).map(|(a, b)| *a * *b).sum();
    let nu = norm(u).max(eps);
    let nv = norm(v).max(eps);
    Ok(dot / (nu * nv))
}

pub(crate) fn norm<F: Real>(u: &[F]) -> F {
    u.iter().map(|x| *x * *x).sum::<F>().sqrt()
}

pub const COSINE_EPS: f64 = 1e-8;

#[cfg(test)]
mod tests {
    use super::*;

    fn m(rows: &[&[f32]]) -> Tensor {
        Tensor::from_rows(&rows.iter().map(|r| r.to_vec()).collect::<Vec<_>>()).unwrap()
    }

    #[test]
    fn matmul_identity() {
        let a = m(&[&[1., 2.], &[3., 4.]]);
        assert_eq!(Tensor::identity(2).matmul(&a).unwrap(), a);
    }

    #[test]
    fn matmul_row_by_column() {
        let out = m(&[&[1., 2.]]).matmul(&m(&[&[3.], &[4.]])).unwrap();
        assert_eq!(out.shape(), &[1, 1]);
        assert_eq!(out.item(), 11.0);
    }

    #[test]
    fn matmul_zero_annihilates() {
        let b = m(&[&[1., -2.], &[3., 0.5], &[7., 9.]]);
        let out = Tensor::<f32>::zeros(&[2, 3]).matmul(&b).unwrap();
        assert_eq!(out, Tensor::zeros(&[2, 2]));
    }

    #[test]
    fn matmul_shape_mismatch_names_shapes() {
        let err = Tensor::<f32>::zeros(&[2, 3]).matmul(&Tensor::zeros(&[2, 3])).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[2, 3]"), "{msg}");
    }

    #[test]
    fn softmax_examples() {
        let s = Tensor::vector(vec![0.0f32, 0.0]).softmax(0).unwrap();
        assert_eq!(s.data(), &[0.5, 0.5]);
        let s = Tensor::vector(vec![1.0f64, 2.0, 3.0]).softmax(0).unwrap();
        for (got, want) in s.data().iter().zip([0.09003057, 0.24472847, 0.66524096]) {
            assert!((got - want).abs() < 1e-6);
        }
        let s = Tensor::vector(vec![1000.0f32, 1000.0]).softmax(0).unwrap();
        assert_eq!(s.data(), &[0.5, 0.5]);
    }

    #[test]
    fn softmax_along_first_axis() {
        let s = m(&[&[0., 10.], &[0., 10.]]).softmax(0).unwrap();
        assert_eq!(s.data(), &[0.5, 0.5, 0.5, 0.5]);
    }

    #[test]
    fn softmax_empty_axis_is_error() {
        assert!(Tensor::<f32>::zeros(&[2, 0]).softmax(1).is_err());
        assert!(Tensor::<f32>::zeros(&[2, 2]).softmax(2).is_err());
    }

    #[test]
    fn cosine_examples() {
        let v = [0.3f64, -1.2, 2.0];
        let neg: Vec<f64> = v.iter().map(|x| -x).collect();
        assert!((cosine_sim(&v, &v, 1e-8).unwrap() - 1.0).abs() < 1e-12);
        assert!((cosine_sim(&v, &neg, 1e-8).unwrap() + 1.0).abs() < 1e-12);
        assert_eq!(cosine_sim(&[1.0f64, 0.0], &[0.0, 1.0], 1e-8).unwrap(), 0.0);
        assert_eq!(cosine_sim(&[0.0f32; 3], &[0.0; 3], 1e-8).unwrap(), 0.0);
        assert!(cosine_sim(&[1.0f32], &[1.0, 2.0], 1e-8).is_err());
    }
}
