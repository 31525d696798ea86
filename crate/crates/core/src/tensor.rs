//! Dense row-major `f64` tensors.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::math;
use crate::{Error, Result};

/// Epsilon added to the variance inside the square root of layer norm.
pub const LAYER_NORM_EPS: f64 = 1e-5;

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.is_empty() || shape.contains(&0) {
            return Err(Error::InvalidTensor(format!(
                "extents must be positive, got {shape:?}"
            )));
        }
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::InvalidTensor(format!(
                "shape {shape:?} needs {n} elements, got {}",
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

    pub fn eye(n: usize) -> Self {
        let mut t = Self::zeros(&[n, n]);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> f64) -> Self {
        let n: usize = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: (0..n).map(&mut f).collect(),
        }
    }

    #[inline]
    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    #[inline]
    pub fn data(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.data.len()
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    /// Size of the last axis.
    pub fn last_dim(&self) -> usize {
        *self.shape.last().expect("tensor has at least one axis")
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != self.data.len() || shape.contains(&0) {
            return Err(Error::Shape {
                op: "reshape",
                lhs: self.shape,
                rhs: shape.to_vec(),
            });
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        assert_eq!(self.shape, other.shape, "max_abs_diff shape mismatch");
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| math::abs(a - b))
            .fold(0.0, f64::max)
    }

    /// Batched matrix product `[.., r, k] x [.., k, c] -> [.., r, c]`.
    ///
    /// Leading batch extents must either match or be absent on one side, in
    /// which case that operand is shared across the batch.
    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        let err = || Error::Shape {
            op: "matmul",
            lhs: self.shape.clone(),
            rhs: other.shape.clone(),
        };
        if self.rank() < 2 || other.rank() < 2 {
            return Err(err());
        }
        let (ab, am) = self.shape.split_at(self.rank() - 2);
        let (bb, bm) = other.shape.split_at(other.rank() - 2);
        let (r, k) = (am[0], am[1]);
        let (k2, c) = (bm[0], bm[1]);
        if k != k2 {
            return Err(err());
        }
        let batch: Vec<usize> = if ab == bb || bb.is_empty() {
            ab.to_vec()
        } else if ab.is_empty() {
            bb.to_vec()
        } else {
            return Err(err());
        };
        let nb: usize = batch.iter().product();
        let a_stride = if ab.is_empty() { 0 } else { r * k };
        let b_stride = if bb.is_empty() { 0 } else { k * c };
        let mut out = vec![0.0; nb * r * c];
        for bi in 0..nb {
            let a = &self.data[bi * a_stride..bi * a_stride + r * k];
            let b = &other.data[bi * b_stride..bi * b_stride + k * c];
            let o = &mut out[bi * r * c..(bi + 1) * r * c];
            matmul_into(a, b, o, r, k, c);
        }
        let mut shape = batch;
        shape.push(r);
        shape.push(c);
        Ok(Tensor { shape, data: out })
    }

    /// Swaps the last two axes.
    pub fn transpose_last2(&self) -> Result<Tensor> {
        let n = self.rank();
        if n < 2 {
            return Err(Error::Shape {
                op: "transpose",
                lhs: self.shape.clone(),
                rhs: Vec::new(),
            });
        }
        let mut axes: Vec<usize> = (0..n).collect();
        axes.swap(n - 2, n - 1);
        self.permute(&axes)
    }

    /// General axis permutation: output axis `i` is input axis `axes[i]`.
    pub fn permute(&self, axes: &[usize]) -> Result<Tensor> {
        let n = self.rank();
        let mut seen = vec![false; n];
        if axes.len() != n || axes.iter().any(|&a| a >= n || core::mem::replace(&mut seen[a], true))
        {
            return Err(Error::Shape {
                op: "permute",
                lhs: self.shape.clone(),
                rhs: axes.to_vec(),
            });
        }
        let in_strides = strides(&self.shape);
        let out_shape: Vec<usize> = axes.iter().map(|&a| self.shape[a]).collect();
        // stride in the input for each output axis
        let s: Vec<usize> = axes.iter().map(|&a| in_strides[a]).collect();
        let mut out = Vec::with_capacity(self.data.len());
        let mut idx = vec![0usize; n];
        let mut offset = 0usize;
        for _ in 0..self.data.len() {
            out.push(self.data[offset]);
            // odometer increment over the output index
            let mut ax = n;
            while ax > 0 {
                ax -= 1;
                idx[ax] += 1;
                offset += s[ax];
                if idx[ax] < out_shape[ax] {
                    break;
                }
                offset -= s[ax] * out_shape[ax];
                idx[ax] = 0;
            }
        }
        Ok(Tensor {
            shape: out_shape,
            data: out,
        })
    }

    /// Softmax over the last axis with max subtraction.
    pub fn softmax_lastdim(&self) -> Tensor {
        let d = self.last_dim();
        let mut out = self.data.clone();
        for row in out.chunks_mut(d) {
            softmax_row(row, None);
        }
        Tensor {
            shape: self.shape.clone(),
            data: out,
        }
    }

    /// Layer normalization over the last axis with population variance.
    pub fn layer_norm(&self, gain: &Tensor, bias: &Tensor) -> Result<Tensor> {
        let d = self.last_dim();
        if gain.len() != d || bias.len() != d {
            return Err(Error::Shape {
                op: "layer_norm",
                lhs: self.shape.clone(),
                rhs: gain.shape.clone(),
            });
        }
        let mut out = self.data.clone();
        for row in out.chunks_mut(d) {
            let (mean, inv_std) = row_moments(row);
            for (i, v) in row.iter_mut().enumerate() {
                *v = (*v - mean) * inv_std * gain.data[i] + bias.data[i];
            }
        }
        Ok(Tensor {
            shape: self.shape.clone(),
            data: out,
        })
    }

    pub fn sigmoid(&self) -> Tensor {
        self.map(math::sigmoid)
    }
}

pub(crate) fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1usize; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

/// `o += a(r x k) * b(k x c)`; `o` must start zeroed for a plain product.
#[inline]
pub(crate) fn matmul_into(a: &[f64], b: &[f64], o: &mut [f64], r: usize, k: usize, c: usize) {
    for i in 0..r {
        let orow = &mut o[i * c..(i + 1) * c];
        for kk in 0..k {
            let av = a[i * k + kk];
            let brow = &b[kk * c..(kk + 1) * c];
            for (ov, bv) in orow.iter_mut().zip(brow) {
                *ov += av * bv;
            }
        }
    }
}

/// In-place softmax of one row; masked-out entries (`valid[i] == false`) get 0.
/// Returns false when every entry is masked.
pub(crate) fn softmax_row(row: &mut [f64], valid: Option<&[bool]>) -> bool {
    let is_valid = |i: usize| valid.is_none_or(|v| v[i]);
    let mut max = f64::NEG_INFINITY;
    for (i, &x) in row.iter().enumerate() {
        if is_valid(i) && x > max {
            max = x;
        }
    }
    if max == f64::NEG_INFINITY {
        return false;
    }
    let mut sum = 0.0;
    for (i, x) in row.iter_mut().enumerate() {
        if is_valid(i) {
            *x = math::exp(*x - max);
            sum += *x;
        } else {
            *x = 0.0;
        }
    }
    for x in row.iter_mut() {
        *x /= sum;
    }
    true
}

/// Mean and `1/sqrt(var + eps)` of a slice (population variance).
pub(crate) fn row_moments(row: &[f64]) -> (f64, f64) {
    let n = row.len() as f64;
    let mean = row.iter().sum::<f64>() / n;
    let var = row.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
    (mean, 1.0 / math::sqrt(var + LAYER_NORM_EPS))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    fn random(shape: &[usize], seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
    }

    #[test]
    fn rejects_bad_shapes() {
        assert!(Tensor::new(vec![2, 2], vec![1.0; 3]).is_err());
        assert!(Tensor::new(vec![0, 2], vec![]).is_err());
    }

    #[test]
    fn matmul_identity_and_projection() {
        let x = t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(Tensor::eye(2).matmul(&x).unwrap(), x);
        let p = t(&[2, 2], &[1.0, 0.0, 0.0, 0.0]);
        let v = t(&[2, 1], &[5.0, 7.0]);
        assert_eq!(p.matmul(&v).unwrap().data(), &[5.0, 0.0]);
    }

    #[test]
    fn matmul_matches_triple_loop() {
        let a = random(&[3, 4], 7);
        let b = random(&[4, 2], 8);
        let c = a.matmul(&b).unwrap();
        for i in 0..3 {
            for j in 0..2 {
                let mut acc = 0.0;
                for k in 0..4 {
                    acc += a.data()[i * 4 + k] * b.data()[k * 2 + j];
                }
                assert_eq!(c.data()[i * 2 + j], acc);
            }
        }
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let a = Tensor::zeros(&[2, 3]);
        let b = Tensor::zeros(&[2, 3]);
        let msg = alloc::string::ToString::to_string(&a.matmul(&b).unwrap_err());
        assert!(msg.contains("[2, 3] and [2, 3]"), "{msg}");
    }

    #[test]
    fn batched_matmul_broadcasts_shared_operand() {
        let a = random(&[2, 3, 4], 1);
        let w = random(&[4, 5], 2);
        let out = a.matmul(&w).unwrap();
        assert_eq!(out.shape(), &[2, 3, 5]);
        let a1 = Tensor::new(vec![3, 4], a.data()[12..].to_vec()).unwrap();
        assert_eq!(&out.data()[15..], a1.matmul(&w).unwrap().data());
    }

    #[test]
    fn permute_round_trip() {
        let x = random(&[2, 3, 4], 3);
        let y = x.permute(&[2, 0, 1]).unwrap();
        assert_eq!(y.shape(), &[4, 2, 3]);
        // y[k, i, j] == x[i, j, k]
        assert_eq!(y.data()[(3 * 2 + 1) * 3 + 2], x.data()[(3 + 2) * 4 + 3]);
        assert_eq!(y.permute(&[1, 2, 0]).unwrap(), x);
    }

    #[test]
    fn softmax_examples() {
        let s = t(&[2], &[0.0, 0.0]).softmax_lastdim();
        assert_eq!(s.data(), &[0.5, 0.5]);
        let s = t(&[2], &[core::f64::consts::LN_2, 0.0]).softmax_lastdim();
        assert!((s.data()[0] - 2.0 / 3.0).abs() < 1e-15);
        assert!((s.data()[1] - 1.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn softmax_matches_exp_normalize() {
        let x = random(&[5], 3);
        let s = x.softmax_lastdim();
        let denom: f64 = x.data().iter().map(|v| v.exp()).sum();
        for i in 0..5 {
            assert!((s.data()[i] - x.data()[i].exp() / denom).abs() < 1e-12);
        }
    }

    #[test]
    fn layer_norm_examples() {
        let g = Tensor::full(&[3], 1.0);
        let b = Tensor::zeros(&[3]);
        let y = t(&[3], &[1.0, 1.0, 1.0]).layer_norm(&g, &b).unwrap();
        assert_eq!(y.data(), &[0.0, 0.0, 0.0]);
        let g = Tensor::full(&[2], 1.0);
        let b = Tensor::zeros(&[2]);
        let y = t(&[2], &[-1.0, 1.0]).layer_norm(&g, &b).unwrap();
        assert!((y.data()[0] + 1.0).abs() < 1e-4 && (y.data()[1] - 1.0).abs() < 1e-4);
    }

    #[test]
    fn layer_norm_matches_scalar_loop() {
        let x = random(&[6], 11);
        let g = random(&[6], 12);
        let b = random(&[6], 13);
        let y = x.layer_norm(&g, &b).unwrap();
        let xs = x.data();
        let mut mean = 0.0;
        for v in xs {
            mean += v;
        }
        mean /= 6.0;
        let mut var = 0.0;
        for v in xs {
            var += (v - mean) * (v - mean);
        }
        var /= 6.0;
        for i in 0..6 {
            let want = (xs[i] - mean) / (var + 1e-5).sqrt() * g.data()[i] + b.data()[i];
            assert!((y.data()[i] - want).abs() < 1e-10);
        }
    }

    #[test]
    fn sigmoid_examples() {
        let y = t(&[3], &[0.0, 50.0, 3f64.ln()]).sigmoid();
        assert_eq!(y.data()[0], 0.5);
        assert!((y.data()[1] - 1.0).abs() < 1e-12);
        assert!((y.data()[2] - 0.75).abs() < 1e-15);
    }

    proptest::proptest! {
        #[test]
        fn softmax_rows_sum_to_one(v in proptest::collection::vec(-30.0f64..30.0, 1..12)) {
            let n = v.len();
            let s = Tensor::new(alloc::vec![n], v).unwrap().softmax_lastdim();
            let sum: f64 = s.data().iter().sum();
            proptest::prop_assert!((sum - 1.0).abs() < 1e-12);
            proptest::prop_assert!(s.data().iter().all(|&p| p >= 0.0));
        }

        #[test]
        fn layer_norm_shift_invariant(v in proptest::collection::vec(-5.0f64..5.0, 2..10), c in -100.0f64..100.0) {
            let n = v.len();
            let g = Tensor::full(&[n], 1.3);
            let b = Tensor::full(&[n], -0.2);
            let x = Tensor::new(alloc::vec![n], v.clone()).unwrap();
            let xs = Tensor::new(alloc::vec![n], v.iter().map(|a| a + c).collect()).unwrap();
            let d = x.layer_norm(&g, &b).unwrap().max_abs_diff(&xs.layer_norm(&g, &b).unwrap());
            proptest::prop_assert!(d < 1e-9);
        }

        #[test]
        fn identity_matmul_is_exact(r in 1usize..5, c in 1usize..5, seed in 0u64..1000) {
            let x = random(&[r, c], seed);
            proptest::prop_assert_eq!(Tensor::eye(r).matmul(&x).unwrap(), x);
        }
    }
}
