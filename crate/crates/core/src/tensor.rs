//! Dense row-major tensors and the value-level kernels the differentiation
//! graph is built on.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Shape-carrying array of scalars in row-major order.
///
/// Extents may be zero (an empty sequence has shape `[0, d]`); a rank-0
/// tensor holds exactly one value.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<F> {
    shape: Vec<usize>,
    data: Vec<F>,
}

pub(crate) fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

pub(crate) fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

/// Right-aligned broadcast of two shapes; `None` when incompatible.
pub fn broadcast_shape(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0; rank];
    for i in 0..rank {
        let da = if i + a.len() >= rank { a[i + a.len() - rank] } else { 1 };
        let db = if i + b.len() >= rank { b[i + b.len() - rank] } else { 1 };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => return None,
        };
    }
    Some(out)
}

/// Strides of `shape` viewed inside the broadcast shape `out`; broadcast axes get 0.
fn broadcast_strides(shape: &[usize], out: &[usize]) -> Vec<usize> {
    let own = strides(shape);
    let offset = out.len() - shape.len();
    (0..out.len())
        .map(|i| {
            if i < offset || shape[i - offset] == 1 {
                0
            } else {
                own[i - offset]
            }
        })
        .collect()
}

/// Visits every multi-index of `shape` in row-major order, yielding the
/// flat offsets computed with each of the supplied stride vectors.
fn for_each_offset<const N: usize>(
    shape: &[usize],
    strides: [&[usize]; N],
    mut f: impl FnMut([usize; N]),
) {
    let total = numel(shape);
    if total == 0 {
        return;
    }
    let rank = shape.len();
    let mut idx = vec![0usize; rank];
    let mut offs = [0usize; N];
    for _ in 0..total {
        f(offs);
        for ax in (0..rank).rev() {
            idx[ax] += 1;
            for (o, s) in offs.iter_mut().zip(strides.iter()) {
                *o += s[ax];
            }
            if idx[ax] < shape[ax] {
                break;
            }
            for (o, s) in offs.iter_mut().zip(strides.iter()) {
                *o -= s[ax] * shape[ax];
            }
            idx[ax] = 0;
        }
    }
}

/// `out[m,n] += a[m,k] * b[k,n]` on contiguous row-major blocks.
fn gemm_acc<F: Scalar>(m: usize, k: usize, n: usize, a: &[F], b: &[F], out: &mut [F]) {
    for i in 0..m {
        let out_row = &mut out[i * n..(i + 1) * n];
        for (p, &aip) in a[i * k..(i + 1) * k].iter().enumerate() {
            if aip == F::zero() {
                continue;
            }
            let b_row = &b[p * n..(p + 1) * n];
            for (o, &bv) in out_row.iter_mut().zip(b_row) {
                *o += aip * bv;
            }
        }
    }
}

impl<F: Scalar> Tensor<F> {
    pub fn new(shape: impl Into<Vec<usize>>, data: Vec<F>) -> Result<Self> {
        let shape = shape.into();
        if numel(&shape) != data.len() {
            return Err(Error::dim("Tensor::new", &shape, &[data.len()]));
        }
        Ok(Self { shape, data })
    }

    pub fn from_f64(shape: impl Into<Vec<usize>>, values: &[f64]) -> Result<Self> {
        Self::new(shape, values.iter().map(|&v| F::lit(v)).collect())
    }

    pub fn full(shape: impl Into<Vec<usize>>, value: F) -> Self {
        let shape = shape.into();
        let n = numel(&shape);
        Self {
            shape,
            data: vec![value; n],
        }
    }

    pub fn zeros(shape: impl Into<Vec<usize>>) -> Self {
        Self::full(shape, F::zero())
    }

    pub fn ones(shape: impl Into<Vec<usize>>) -> Self {
        Self::full(shape, F::one())
    }

    pub fn scalar(value: F) -> Self {
        Self {
            shape: Vec::new(),
            data: vec![value],
        }
    }

    /// Rows stacked into a `[rows.len(), d]` matrix.
    pub fn from_rows(rows: &[Vec<F>], d: usize) -> Result<Self> {
        let mut data = Vec::with_capacity(rows.len() * d);
        for r in rows {
            if r.len() != d {
                return Err(Error::dim("Tensor::from_rows", &[r.len()], &[d]));
            }
            data.extend_from_slice(r);
        }
        Self::new(vec![rows.len(), d], data)
    }

    pub fn randn<R: Rng + ?Sized>(shape: impl Into<Vec<usize>>, sd: f64, rng: &mut R) -> Self {
        let shape = shape.into();
        let data = (0..numel(&shape))
            .map(|_| {
                let z: f64 = StandardNormal.sample(rng);
                F::lit(z * sd)
            })
            .collect();
        Self { shape, data }
    }

    pub fn uniform<R: Rng + ?Sized>(
        shape: impl Into<Vec<usize>>,
        lo: f64,
        hi: f64,
        rng: &mut R,
    ) -> Self {
        let shape = shape.into();
        let data = (0..numel(&shape))
            .map(|_| F::lit(rng.random_range(lo..hi)))
            .collect();
        Self { shape, data }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
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

    /// The single value of a one-element tensor.
    pub fn item(&self) -> Result<F> {
        if self.data.len() != 1 {
            return Err(Error::dim("Tensor::item", &self.shape, &[1]));
        }
        Ok(self.data[0])
    }

    pub fn get(&self, index: &[usize]) -> F {
        debug_assert_eq!(index.len(), self.shape.len());
        let off: usize = index
            .iter()
            .zip(strides(&self.shape))
            .map(|(i, s)| i * s)
            .sum();
        self.data[off]
    }

    /// Row `i` of a rank-2 tensor.
    pub fn row(&self, i: usize) -> &[F] {
        let d = *self.shape.last().unwrap_or(&1);
        &self.data[i * d..(i + 1) * d]
    }

    pub fn rows(&self) -> usize {
        if self.shape.len() < 2 {
            1
        } else {
            self.shape[0]
        }
    }

    pub fn cols(&self) -> usize {
        *self.shape.last().unwrap_or(&1)
    }

    pub fn reshape(mut self, shape: impl Into<Vec<usize>>) -> Result<Self> {
        let shape = shape.into();
        if numel(&shape) != self.data.len() {
            return Err(Error::dim("reshape", &self.shape, &shape));
        }
        self.shape = shape;
        Ok(self)
    }

    pub fn map(&self, f: impl Fn(F) -> F) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn cast<G: Scalar>(&self) -> Tensor<G> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| G::lit(v.to_f64_lossy())).collect(),
        }
    }

    pub fn sum_all(&self) -> F {
        crate::scalar::sum(self.data.iter().copied())
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn sq_norm(&self) -> F {
        crate::scalar::sum(self.data.iter().map(|&v| v * v))
    }

    pub fn max_abs_diff(&self, other: &Self) -> F {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| (a - b).abs())
            .fold(F::zero(), F::max)
    }

    /// Elementwise binary op under right-aligned broadcasting.
    pub fn broadcast_zip(&self, other: &Self, f: impl Fn(F, F) -> F) -> Result<Self> {
        if self.shape == other.shape {
            let data = self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect();
            return Ok(Self {
                shape: self.shape.clone(),
                data,
            });
        }
        let out_shape = broadcast_shape(&self.shape, &other.shape)
            .ok_or_else(|| Error::dim("broadcast", &self.shape, &other.shape))?;
        // Common case: `other` is a suffix of `self` (bias rows, broadcast vectors).
        if out_shape == self.shape
            && other.shape.len() <= self.shape.len()
            && self.shape[self.shape.len() - other.shape.len()..] == other.shape[..]
            && !other.data.is_empty()
        {
            let chunk = other.data.len();
            let data = self
                .data
                .chunks(chunk)
                .flat_map(|c| c.iter().zip(&other.data).map(|(&a, &b)| f(a, b)))
                .collect();
            return Ok(Self {
                shape: out_shape,
                data,
            });
        }
        let sa = broadcast_strides(&self.shape, &out_shape);
        let sb = broadcast_strides(&other.shape, &out_shape);
        let mut data = Vec::with_capacity(numel(&out_shape));
        for_each_offset(&out_shape, [&sa, &sb], |[oa, ob]| {
            data.push(f(self.data[oa], other.data[ob]))
        });
        Ok(Self {
            shape: out_shape,
            data,
        })
    }

    /// Sums a broadcast result back down to `shape` (the adjoint of broadcasting).
    pub fn sum_to_shape(&self, shape: &[usize]) -> Result<Self> {
        if self.shape == shape {
            return Ok(self.clone());
        }
        match broadcast_shape(shape, &self.shape) {
            Some(s) if s == self.shape => {}
            _ => return Err(Error::dim("sum_to_shape", &self.shape, shape)),
        }
        let n = numel(shape);
        let mut out = vec![F::zero(); n];
        if shape.len() <= self.shape.len()
            && self.shape[self.shape.len() - shape.len()..] == shape[..]
            && n > 0
        {
            for c in self.data.chunks(n) {
                for (o, &v) in out.iter_mut().zip(c) {
                    *o += v;
                }
            }
        } else {
            let st = broadcast_strides(shape, &self.shape);
            let own = strides(&self.shape);
            for_each_offset(&self.shape, [&st, &own], |[ot, os]| out[ot] += self.data[os]);
        }
        Self::new(shape.to_vec(), out)
    }

    /// Batched matrix product `[..., M, K] x [..., K, N]` with broadcast batch extents.
    pub fn matmul(&self, other: &Self) -> Result<Self> {
        let err = || Error::dim("matmul", &self.shape, &other.shape);
        if self.rank() < 2 || other.rank() < 2 {
            return Err(err());
        }
        let (ra, rb) = (self.rank(), other.rank());
        let (m, k) = (self.shape[ra - 2], self.shape[ra - 1]);
        let (k2, n) = (other.shape[rb - 2], other.shape[rb - 1]);
        if k != k2 {
            return Err(err());
        }
        let batch_a = &self.shape[..ra - 2];
        let batch_b = &other.shape[..rb - 2];
        let batch = broadcast_shape(batch_a, batch_b).ok_or_else(err)?;
        let mut out_shape = batch.clone();
        out_shape.extend([m, n]);
        let mut out = vec![F::zero(); numel(&out_shape)];
        if batch.is_empty() {
            gemm_acc(m, k, n, &self.data, &other.data, &mut out);
        } else {
            let sa = broadcast_strides(batch_a, &batch);
            let sb = broadcast_strides(batch_b, &batch);
            let mut bi = 0;
            for_each_offset(&batch, [&sa, &sb], |[oa, ob]| {
                let a = &self.data[oa * m * k..(oa + 1) * m * k];
                let b = &other.data[ob * k * n..(ob + 1) * k * n];
                gemm_acc(m, k, n, a, b, &mut out[bi * m * n..(bi + 1) * m * n]);
                bi += 1;
            });
        }
        Self::new(out_shape, out)
    }

    /// Axis permutation; `perm[i]` names the source axis of output axis `i`.
    pub fn permute(&self, perm: &[usize]) -> Result<Self> {
        let rank = self.rank();
        let mut seen = vec![false; rank];
        if perm.len() != rank || perm.iter().any(|&p| p >= rank || std::mem::replace(&mut seen[p], true)) {
            return Err(Error::dim("permute", &self.shape, perm));
        }
        let out_shape: Vec<usize> = perm.iter().map(|&p| self.shape[p]).collect();
        let src = strides(&self.shape);
        let permuted: Vec<usize> = perm.iter().map(|&p| src[p]).collect();
        let mut data = Vec::with_capacity(self.data.len());
        for_each_offset(&out_shape, [&permuted], |[o]| data.push(self.data[o]));
        Self::new(out_shape, data)
    }

    /// Swaps the last two axes.
    pub fn transpose(&self) -> Result<Self> {
        let r = self.rank();
        if r < 2 {
            return Err(Error::Axis {
                op: "transpose",
                axis: 1,
                rank: r,
            });
        }
        let mut perm: Vec<usize> = (0..r).collect();
        perm.swap(r - 2, r - 1);
        self.permute(&perm)
    }

    /// `(outer, extent, inner)` decomposition around `axis`.
    pub(crate) fn axis_split(&self, axis: usize, op: &'static str) -> Result<(usize, usize, usize)> {
        if axis >= self.rank() {
            return Err(Error::Axis {
                op,
                axis,
                rank: self.rank(),
            });
        }
        let outer = numel(&self.shape[..axis]);
        let inner = numel(&self.shape[axis + 1..]);
        Ok((outer, self.shape[axis], inner))
    }

    /// Numerically stabilized softmax along `axis`.
    pub fn softmax(&self, axis: usize) -> Result<Self> {
        let (outer, n, inner) = self.axis_split(axis, "softmax")?;
        let mut out = self.data.clone();
        for o in 0..outer {
            for i in 0..inner {
                let base = o * n * inner + i;
                let mut mx = F::neg_infinity();
                for j in 0..n {
                    mx = mx.max(out[base + j * inner]);
                }
                let mut total = F::zero();
                for j in 0..n {
                    let e = (out[base + j * inner] - mx).exp();
                    out[base + j * inner] = e;
                    total += e;
                }
                for j in 0..n {
                    out[base + j * inner] /= total;
                }
            }
        }
        Self::new(self.shape.clone(), out)
    }

    /// Sum along `axis`, removing it.
    pub fn sum_axis(&self, axis: usize) -> Result<Self> {
        let (outer, n, inner) = self.axis_split(axis, "sum")?;
        let mut out = vec![F::zero(); outer * inner];
        for o in 0..outer {
            for j in 0..n {
                let src = &self.data[(o * n + j) * inner..(o * n + j + 1) * inner];
                for (d, &s) in out[o * inner..(o + 1) * inner].iter_mut().zip(src) {
                    *d += s;
                }
            }
        }
        let mut shape = self.shape.clone();
        shape.remove(axis);
        Self::new(shape, out)
    }

    /// Rows `[start, start + len)` along `axis`.
    pub fn narrow(&self, axis: usize, start: usize, len: usize) -> Result<Self> {
        let (outer, n, inner) = self.axis_split(axis, "narrow")?;
        if start + len > n {
            return Err(Error::IndexOutOfRange {
                what: "narrow range",
                index: start + len,
                size: n,
            });
        }
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            data.extend_from_slice(&self.data[(o * n + start) * inner..(o * n + start + len) * inner]);
        }
        let mut shape = self.shape.clone();
        shape[axis] = len;
        Self::new(shape, data)
    }

    /// Concatenation along `axis`; all other extents must agree.
    pub fn concat(parts: &[&Self], axis: usize) -> Result<Self> {
        let first = parts.first().ok_or(Error::Empty("concat of zero tensors"))?;
        let (outer, _, inner) = first.axis_split(axis, "concat")?;
        let mut total = 0;
        for p in parts {
            let ok = p.rank() == first.rank()
                && p.shape
                    .iter()
                    .zip(&first.shape)
                    .enumerate()
                    .all(|(i, (a, b))| i == axis || a == b);
            if !ok {
                return Err(Error::dim("concat", &first.shape, &p.shape));
            }
            total += p.shape[axis];
        }
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for p in parts {
                let n = p.shape[axis];
                data.extend_from_slice(&p.data[o * n * inner..(o + 1) * n * inner]);
            }
        }
        let mut shape = first.shape.clone();
        shape[axis] = total;
        Self::new(shape, data)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], v: &[f64]) -> Tensor<f64> {
        Tensor::from_f64(shape.to_vec(), v).unwrap()
    }

    #[test]
    fn identity_matmul() {
        let i = t(&[2, 2], &[1., 0., 0., 1.]);
        let a = t(&[2, 2], &[1., 2., 3., 4.]);
        assert_eq!(i.matmul(&a).unwrap(), a);
    }

    #[test]
    fn row_by_column() {
        let a = t(&[1, 2], &[1., 2.]);
        let b = t(&[2, 1], &[3., 4.]);
        assert_eq!(a.matmul(&b).unwrap().data(), &[11.0]);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let a = t(&[2, 3], &[0.; 6]);
        let b = t(&[2, 3], &[0.; 6]);
        let msg = a.matmul(&b).unwrap_err().to_string();
        assert!(msg.contains("[2, 3]"), "{msg}");
    }

    #[test]
    fn batched_matmul_broadcasts_batch_of_one() {
        let a = t(&[2, 1, 2], &[1., 2., 3., 4.]);
        let b = t(&[1, 2, 1], &[1., 1.]);
        let c = a.matmul(&b).unwrap();
        assert_eq!(c.shape(), &[2, 1, 1]);
        assert_eq!(c.data(), &[3., 7.]);
    }

    #[test]
    fn broadcast_and_reduce_back() {
        let big = Tensor::<f64>::ones(vec![3, 5, 4]);
        let small = t(&[3, 1, 4], &[1.; 12]);
        let s = big.broadcast_zip(&small, |a, b| a + b).unwrap();
        assert_eq!(s.shape(), &[3, 5, 4]);
        let back = s.sum_to_shape(&[3, 1, 4]).unwrap();
        assert!(back.data().iter().all(|&v| v == 10.0));
    }

    #[test]
    fn permute_round_trip() {
        let a = t(&[2, 3, 4], &(0..24).map(|v| v as f64).collect::<Vec<_>>());
        let p = a.permute(&[1, 2, 0]).unwrap();
        assert_eq!(p.shape(), &[3, 4, 2]);
        assert_eq!(p.get(&[2, 1, 1]), a.get(&[1, 2, 1]));
        assert_eq!(p.permute(&[2, 0, 1]).unwrap(), a);
    }

    #[test]
    fn softmax_uniform_and_large_logits() {
        let s = t(&[3], &[0., 0., 0.]).softmax(0).unwrap();
        for v in s.data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
        let s = t(&[2], &[1000., 0.]).softmax(0).unwrap();
        assert!(s.all_finite());
        assert!((s.data()[0] - 1.0).abs() < 1e-12 && s.data()[1] < 1e-12);
    }

    #[test]
    fn narrow_and_concat_invert() {
        let a = t(&[4, 2], &[1., 2., 3., 4., 5., 6., 7., 8.]);
        let top = a.narrow(0, 0, 1).unwrap();
        let rest = a.narrow(0, 1, 3).unwrap();
        assert_eq!(Tensor::concat(&[&top, &rest], 0).unwrap(), a);
        let l = a.narrow(1, 0, 1).unwrap();
        let r = a.narrow(1, 1, 1).unwrap();
        assert_eq!(Tensor::concat(&[&l, &r], 1).unwrap(), a);
    }
}
