//! Dense row-major tensors.
//!
//! The only array type in the crate. Shapes are explicit `Vec<usize>`
//! extents, data is one contiguous buffer, and every exported operation
//! returns a fresh tensor (no strided views cross module boundaries).
//! Binary operations broadcast numpy-style: shapes are right-aligned and an
//! extent of 1 stretches. Selection operations (max, argmax, topk) break
//! ties toward the lowest index so results are reproducible.

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::Elem;
use rand_distr::{Distribution, Normal};

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<Elem>,
}

fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

/// Row-major strides for a shape.
pub fn strides_for(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1usize; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

/// Broadcast two shapes numpy-style (right-aligned, 1 stretches).
pub fn broadcast_shapes(a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    let nd = a.len().max(b.len());
    let mut out = vec![0usize; nd];
    for i in 0..nd {
        let da = if i < nd - a.len() { 1 } else { a[i - (nd - a.len())] };
        let db = if i < nd - b.len() { 1 } else { b[i - (nd - b.len())] };
        if da == db || da == 1 || db == 1 {
            out[i] = da.max(db);
        } else {
            return Err(Error::shape(format!(
                "cannot broadcast {:?} with {:?} (axis {}: {} vs {})",
                a, b, i, da, db
            )));
        }
    }
    Ok(out)
}

/// Strides of `shape` aligned to a broadcast target, 0 on stretched axes.
fn broadcast_strides(shape: &[usize], target: &[usize]) -> Vec<usize> {
    let own = strides_for(shape);
    let pad = target.len() - shape.len();
    let mut out = vec![0usize; target.len()];
    for i in 0..shape.len() {
        out[pad + i] = if shape[i] == 1 && target[pad + i] != 1 { 0 } else { own[i] };
    }
    out
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<Elem>) -> Result<Tensor> {
        if numel(&shape) != data.len() {
            return Err(Error::shape(format!(
                "shape {:?} holds {} elements, got {}",
                shape,
                numel(&shape),
                data.len()
            )));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Tensor {
        Tensor { shape: shape.to_vec(), data: vec![0.0; numel(shape)] }
    }

    pub fn ones(shape: &[usize]) -> Tensor {
        Tensor::full(shape, 1.0)
    }

    pub fn full(shape: &[usize], v: Elem) -> Tensor {
        Tensor { shape: shape.to_vec(), data: vec![v; numel(shape)] }
    }

    pub fn scalar(v: Elem) -> Tensor {
        Tensor { shape: vec![], data: vec![v] }
    }

    /// Gaussian init, mean 0.
    pub fn randn(shape: &[usize], std: Elem, rng: &mut Rng) -> Tensor {
        if std == 0.0 {
            return Tensor::zeros(shape);
        }
        let dist = Normal::new(0.0f64, std as f64).expect("std must be finite");
        let data = (0..numel(shape)).map(|_| dist.sample(rng) as Elem).collect();
        Tensor { shape: shape.to_vec(), data }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn ndim(&self) -> usize {
        self.shape.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[Elem] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [Elem] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<Elem> {
        self.data
    }

    /// Scalar value of a one-element tensor.
    pub fn item(&self) -> Result<Elem> {
        if self.data.len() != 1 {
            return Err(Error::shape(format!("item() on shape {:?}", self.shape)));
        }
        Ok(self.data[0])
    }

    pub fn at(&self, idx: &[usize]) -> Elem {
        debug_assert_eq!(idx.len(), self.shape.len());
        let s = strides_for(&self.shape);
        let off: usize = idx.iter().zip(&s).map(|(i, st)| i * st).sum();
        self.data[off]
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor> {
        if numel(shape) != self.data.len() {
            return Err(Error::shape(format!(
                "reshape {:?} -> {:?} changes element count",
                self.shape, shape
            )));
        }
        Ok(Tensor { shape: shape.to_vec(), data: self.data.clone() })
    }

    pub fn map(&self, f: impl Fn(Elem) -> Elem) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn scale(&self, c: Elem) -> Tensor {
        self.map(|v| v * c)
    }

    pub fn add_scalar(&self, c: Elem) -> Tensor {
        self.map(|v| v + c)
    }

    pub fn relu(&self) -> Tensor {
        self.map(|v| if v > 0.0 { v } else { 0.0 })
    }

    pub fn sigmoid(&self) -> Tensor {
        self.map(|v| 1.0 / (1.0 + (-v).exp()))
    }

    pub fn exp(&self) -> Tensor {
        self.map(Elem::exp)
    }

    pub fn ln(&self) -> Tensor {
        self.map(Elem::ln)
    }

    /// Tanh-form gelu; smooth, so finite differences stay well behaved.
    pub fn gelu(&self) -> Tensor {
        self.map(gelu_scalar)
    }

    pub fn binary(&self, other: &Tensor, f: impl Fn(Elem, Elem) -> Elem) -> Result<Tensor> {
        if self.shape == other.shape {
            let data = self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect();
            return Ok(Tensor { shape: self.shape.clone(), data });
        }
        let out_shape = broadcast_shapes(&self.shape, &other.shape)?;
        let sa = broadcast_strides(&self.shape, &out_shape);
        let sb = broadcast_strides(&other.shape, &out_shape);
        let n = numel(&out_shape);
        let nd = out_shape.len();
        let mut data = Vec::with_capacity(n);
        let mut idx = vec![0usize; nd];
        let (mut oa, mut ob) = (0usize, 0usize);
        for _ in 0..n {
            data.push(f(self.data[oa], other.data[ob]));
            for ax in (0..nd).rev() {
                idx[ax] += 1;
                oa += sa[ax];
                ob += sb[ax];
                if idx[ax] < out_shape[ax] {
                    break;
                }
                idx[ax] = 0;
                oa -= sa[ax] * out_shape[ax];
                ob -= sb[ax] * out_shape[ax];
            }
        }
        Ok(Tensor { shape: out_shape, data })
    }

    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        self.binary(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        self.binary(other, |a, b| a - b)
    }

    pub fn mul(&self, other: &Tensor) -> Result<Tensor> {
        self.binary(other, |a, b| a * b)
    }

    /// Division; a zero divisor yields ±inf, which downstream finiteness
    /// checks flag.
    pub fn div(&self, other: &Tensor) -> Result<Tensor> {
        self.binary(other, |a, b| a / b)
    }

    pub fn maximum(&self, other: &Tensor) -> Result<Tensor> {
        self.binary(other, |a, b| if a >= b { a } else { b })
    }

    /// Batched matrix product over the last two axes; leading axes broadcast.
    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        if self.ndim() < 2 || other.ndim() < 2 {
            return Err(Error::shape(format!(
                "matmul needs >= 2 dims, got {:?} x {:?}",
                self.shape, other.shape
            )));
        }
        let (m, ka) = (self.shape[self.ndim() - 2], self.shape[self.ndim() - 1]);
        let (kb, n) = (other.shape[other.ndim() - 2], other.shape[other.ndim() - 1]);
        if ka != kb {
            return Err(Error::shape(format!(
                "matmul inner extents disagree: {:?} x {:?}",
                self.shape, other.shape
            )));
        }
        let la = &self.shape[..self.ndim() - 2];
        let lb = &other.shape[..other.ndim() - 2];
        let batch = broadcast_shapes(la, lb)?;
        let nb = numel(&batch);
        // strides in units of whole matrices
        let sa = broadcast_strides(la, &batch);
        let sb = broadcast_strides(lb, &batch);
        let sout = strides_for(&batch);
        let (ma, mb) = (m * ka, kb * n);

        let mut out_shape = batch.clone();
        out_shape.push(m);
        out_shape.push(n);
        let mut data = vec![0.0; nb * m * n];

        for bi in 0..nb {
            let (mut oa, mut ob) = (0usize, 0usize);
            for ax in 0..batch.len() {
                let id = (bi / sout[ax]) % batch[ax];
                oa += id * sa[ax];
                ob += id * sb[ax];
            }
            matmul_2d(
                &self.data[oa * ma..oa * ma + ma],
                &other.data[ob * mb..ob * mb + mb],
                &mut data[bi * m * n..(bi + 1) * m * n],
                m,
                ka,
                n,
            );
        }
        Tensor::new(out_shape, data)
    }

    /// Swap the last two axes.
    pub fn transpose_last(&self) -> Result<Tensor> {
        let nd = self.ndim();
        if nd < 2 {
            return Err(Error::shape("transpose_last needs >= 2 dims".to_string()));
        }
        let mut axes: Vec<usize> = (0..nd).collect();
        axes.swap(nd - 2, nd - 1);
        self.permute(&axes)
    }

    /// Reorder axes; `axes` is a permutation of 0..ndim.
    pub fn permute(&self, axes: &[usize]) -> Result<Tensor> {
        let nd = self.ndim();
        let mut seen = vec![false; nd];
        if axes.len() != nd || axes.iter().any(|&a| a >= nd || std::mem::replace(&mut seen[a], true)) {
            return Err(Error::shape(format!("bad permutation {:?} for {:?}", axes, self.shape)));
        }
        let out_shape: Vec<usize> = axes.iter().map(|&a| self.shape[a]).collect();
        let src_strides = strides_for(&self.shape);
        // stride to advance in the source when the i-th output axis ticks
        let step: Vec<usize> = axes.iter().map(|&a| src_strides[a]).collect();
        let n = self.data.len();
        let mut data = Vec::with_capacity(n);
        let mut idx = vec![0usize; nd];
        let mut off = 0usize;
        for _ in 0..n {
            data.push(self.data[off]);
            for ax in (0..nd).rev() {
                idx[ax] += 1;
                off += step[ax];
                if idx[ax] < out_shape[ax] {
                    break;
                }
                idx[ax] = 0;
                off -= step[ax] * out_shape[ax];
            }
        }
        Tensor::new(out_shape, data)
    }

    pub fn sum_all(&self) -> Elem {
        self.data.iter().sum()
    }

    pub fn mean_all(&self) -> Elem {
        if self.data.is_empty() {
            return 0.0;
        }
        self.sum_all() / self.data.len() as Elem
    }

    /// Sum out one axis (the axis disappears).
    pub fn sum_axis(&self, axis: usize) -> Result<Tensor> {
        self.reduce_axis(axis, |acc, v| acc + v, 0.0)
    }

    pub fn mean_axis(&self, axis: usize) -> Result<Tensor> {
        let n = *self
            .shape
            .get(axis)
            .ok_or_else(|| Error::shape(format!("axis {} of {:?}", axis, self.shape)))?;
        if n == 0 {
            return Err(Error::shape("mean over empty axis".to_string()));
        }
        Ok(self.sum_axis(axis)?.scale(1.0 / n as Elem))
    }

    fn reduce_axis(&self, axis: usize, f: impl Fn(Elem, Elem) -> Elem, init: Elem) -> Result<Tensor> {
        if axis >= self.ndim() {
            return Err(Error::shape(format!("axis {} of {:?}", axis, self.shape)));
        }
        if self.shape[axis] == 0 {
            return Err(Error::shape("reduce over empty axis".to_string()));
        }
        let outer: usize = self.shape[..axis].iter().product();
        let mid = self.shape[axis];
        let inner: usize = self.shape[axis + 1..].iter().product();
        let mut out_shape = self.shape.clone();
        out_shape.remove(axis);
        let mut data = vec![init; outer * inner];
        for o in 0..outer {
            for m in 0..mid {
                let src = &self.data[(o * mid + m) * inner..(o * mid + m + 1) * inner];
                let dst = &mut data[o * inner..(o + 1) * inner];
                for (d, &s) in dst.iter_mut().zip(src) {
                    *d = f(*d, s);
                }
            }
        }
        Tensor::new(out_shape, data)
    }

    /// Max over the last axis: values plus argmax indices, lowest index on
    /// ties.
    pub fn max_last(&self) -> Result<(Tensor, Vec<usize>)> {
        let nd = self.ndim();
        if nd == 0 || self.shape[nd - 1] == 0 {
            return Err(Error::shape("max over empty axis".to_string()));
        }
        let last = self.shape[nd - 1];
        let rows = self.data.len() / last;
        let mut vals = Vec::with_capacity(rows);
        let mut idxs = Vec::with_capacity(rows);
        for r in 0..rows {
            let row = &self.data[r * last..(r + 1) * last];
            let (mut bi, mut bv) = (0usize, row[0]);
            for (i, &v) in row.iter().enumerate().skip(1) {
                if v > bv {
                    bv = v;
                    bi = i;
                }
            }
            vals.push(bv);
            idxs.push(bi);
        }
        Ok((Tensor::new(self.shape[..nd - 1].to_vec(), vals)?, idxs))
    }

    pub fn argmax_last(&self) -> Result<Vec<usize>> {
        Ok(self.max_last()?.1)
    }

    /// k largest along the last axis, descending, ties to the lower index.
    /// Returned indices refer to positions in the original axis and have the
    /// same layout as the values (`rows * k`, row-major).
    pub fn topk_last(&self, k: usize) -> Result<(Tensor, Vec<usize>)> {
        let nd = self.ndim();
        if nd == 0 {
            return Err(Error::shape("topk needs >= 1 dim".to_string()));
        }
        let last = self.shape[nd - 1];
        if k > last {
            return Err(Error::invalid(format!("topk k={} > extent {}", k, last)));
        }
        let rows = self.data.len() / last.max(1);
        let mut vals = Vec::with_capacity(rows * k);
        let mut idxs = Vec::with_capacity(rows * k);
        let mut taken = vec![false; last];
        for r in 0..rows {
            let row = &self.data[r * last..(r + 1) * last];
            taken.iter_mut().for_each(|t| *t = false);
            for _ in 0..k {
                let mut bi = usize::MAX;
                let mut bv = Elem::NEG_INFINITY;
                for (i, &v) in row.iter().enumerate() {
                    if !taken[i] && (v > bv || bi == usize::MAX) {
                        bv = v;
                        bi = i;
                    }
                }
                taken[bi] = true;
                vals.push(bv);
                idxs.push(bi);
            }
        }
        let mut out_shape = self.shape[..nd - 1].to_vec();
        out_shape.push(k);
        Ok((Tensor::new(out_shape, vals)?, idxs))
    }

    /// Select sub-slabs along `axis` in the given order (repeats allowed).
    pub fn index_select(&self, axis: usize, indices: &[usize]) -> Result<Tensor> {
        if axis >= self.ndim() {
            return Err(Error::shape(format!("axis {} of {:?}", axis, self.shape)));
        }
        let extent = self.shape[axis];
        if let Some(&bad) = indices.iter().find(|&&i| i >= extent) {
            return Err(Error::invalid(format!(
                "index {} out of range for axis {} (extent {})",
                bad, axis, extent
            )));
        }
        let outer: usize = self.shape[..axis].iter().product();
        let inner: usize = self.shape[axis + 1..].iter().product();
        let mut out_shape = self.shape.clone();
        out_shape[axis] = indices.len();
        let mut data = Vec::with_capacity(outer * indices.len() * inner);
        for o in 0..outer {
            for &i in indices {
                let start = (o * extent + i) * inner;
                data.extend_from_slice(&self.data[start..start + inner]);
            }
        }
        Tensor::new(out_shape, data)
    }

    /// Scatter-add `src` slabs into a copy of `self` along `axis`:
    /// out[.., indices[j], ..] += src[.., j, ..].
    pub fn scatter_add(&self, axis: usize, indices: &[usize], src: &Tensor) -> Result<Tensor> {
        if axis >= self.ndim() || src.ndim() != self.ndim() {
            return Err(Error::shape(format!(
                "scatter_add axis {} of {:?} from {:?}",
                axis, self.shape, src.shape
            )));
        }
        for (d, (a, b)) in self.shape.iter().zip(src.shape.iter()).enumerate() {
            if d != axis && a != b {
                return Err(Error::shape(format!(
                    "scatter_add shapes {:?} vs {:?} differ off-axis",
                    self.shape, src.shape
                )));
            }
        }
        if src.shape[axis] != indices.len() {
            return Err(Error::shape("scatter_add index count mismatch".to_string()));
        }
        let extent = self.shape[axis];
        if let Some(&bad) = indices.iter().find(|&&i| i >= extent) {
            return Err(Error::invalid(format!(
                "scatter index {} out of range (extent {})",
                bad, extent
            )));
        }
        let outer: usize = self.shape[..axis].iter().product();
        let inner: usize = self.shape[axis + 1..].iter().product();
        let mut out = self.clone();
        for o in 0..outer {
            for (j, &i) in indices.iter().enumerate() {
                let s = (o * indices.len() + j) * inner;
                let d = (o * extent + i) * inner;
                for t in 0..inner {
                    out.data[d + t] += src.data[s + t];
                }
            }
        }
        Ok(out)
    }

    pub fn concat(parts: &[&Tensor], axis: usize) -> Result<Tensor> {
        let first = parts.first().ok_or_else(|| Error::invalid("concat of nothing"))?;
        if axis >= first.ndim() {
            return Err(Error::shape(format!("concat axis {} of {:?}", axis, first.shape)));
        }
        let mut total = 0usize;
        for p in parts {
            if p.ndim() != first.ndim() {
                return Err(Error::shape("concat rank mismatch".to_string()));
            }
            for (d, (a, b)) in first.shape.iter().zip(p.shape.iter()).enumerate() {
                if d != axis && a != b {
                    return Err(Error::shape(format!(
                        "concat shapes {:?} vs {:?} differ off-axis",
                        first.shape, p.shape
                    )));
                }
            }
            total += p.shape[axis];
        }
        let outer: usize = first.shape[..axis].iter().product();
        let inner: usize = first.shape[axis + 1..].iter().product();
        let mut out_shape = first.shape.clone();
        out_shape[axis] = total;
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for p in parts {
                let e = p.shape[axis];
                data.extend_from_slice(&p.data[o * e * inner..(o + 1) * e * inner]);
            }
        }
        Tensor::new(out_shape, data)
    }

    /// Contiguous slice `[start, start+len)` along `axis`.
    pub fn narrow(&self, axis: usize, start: usize, len: usize) -> Result<Tensor> {
        if axis >= self.ndim() || start + len > self.shape[axis] {
            return Err(Error::shape(format!(
                "narrow axis {} [{}, {}) of {:?}",
                axis,
                start,
                start + len,
                self.shape
            )));
        }
        let extent = self.shape[axis];
        let outer: usize = self.shape[..axis].iter().product();
        let inner: usize = self.shape[axis + 1..].iter().product();
        let mut out_shape = self.shape.clone();
        out_shape[axis] = len;
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let s = (o * extent + start) * inner;
            data.extend_from_slice(&self.data[s..s + len * inner]);
        }
        Tensor::new(out_shape, data)
    }

    /// Softmax over the last axis (max-shifted for stability).
    pub fn softmax_last(&self) -> Result<Tensor> {
        let nd = self.ndim();
        if nd == 0 || self.shape[nd - 1] == 0 {
            return Err(Error::shape("softmax over empty axis".to_string()));
        }
        let last = self.shape[nd - 1];
        let mut data = self.data.clone();
        for row in data.chunks_mut(last) {
            let m = row.iter().cloned().fold(Elem::NEG_INFINITY, Elem::max);
            let mut z = 0.0;
            for v in row.iter_mut() {
                *v = (*v - m).exp();
                z += *v;
            }
            for v in row.iter_mut() {
                *v /= z;
            }
        }
        Tensor::new(self.shape.clone(), data)
    }

    /// Sum a gradient-shaped tensor down to `target` (inverse of broadcast).
    pub fn reduce_to_shape(&self, target: &[usize]) -> Result<Tensor> {
        if self.shape == target {
            return Ok(self.clone());
        }
        let mut t = self.clone();
        while t.ndim() > target.len() {
            t = t.sum_axis(0)?;
        }
        for ax in 0..target.len() {
            if t.shape[ax] != target[ax] {
                if target[ax] != 1 {
                    return Err(Error::shape(format!(
                        "cannot reduce {:?} to {:?}",
                        self.shape, target
                    )));
                }
                let summed = t.sum_axis(ax)?;
                let mut shp = summed.shape.clone();
                shp.insert(ax, 1);
                t = summed.reshape(&shp)?;
            }
        }
        Ok(t)
    }

    /// Largest absolute difference; shapes must match.
    pub fn max_abs_diff(&self, other: &Tensor) -> Result<Elem> {
        if self.shape != other.shape {
            return Err(Error::shape(format!(
                "max_abs_diff {:?} vs {:?}",
                self.shape, other.shape
            )));
        }
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, Elem::max))
    }
}

pub fn gelu_scalar(x: Elem) -> Elem {
    const C: Elem = 0.797_884_560_802_865_4; // sqrt(2/pi)
    const A: Elem = 0.044715;
    0.5 * x * (1.0 + (C * (x + A * x * x * x)).tanh())
}

pub fn gelu_grad_scalar(x: Elem) -> Elem {
    const C: Elem = 0.797_884_560_802_865_4;
    const A: Elem = 0.044715;
    let u = C * (x + A * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * C * (1.0 + 3.0 * A * x * x)
}

/// out[m, n] = sum_k a[m, k] * b[k, n]; `a`, `b` are leading slices at the
/// batch offset, row-major.
fn matmul_2d(a: &[Elem], b: &[Elem], out: &mut [Elem], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let orow = &mut out[i * n..(i + 1) * n];
        for (kk, &aik) in arow.iter().enumerate() {
            let brow = &b[kk * n..(kk + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += aik * bv;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::rng_from;
    use proptest::prelude::*;

    fn t(shape: &[usize], data: &[Elem]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn matmul_identity() {
        let i2 = t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]);
        assert_eq!(i2.matmul(&i2).unwrap(), i2);
    }

    #[test]
    fn matmul_orthogonal_vectors() {
        let a = t(&[1, 2], &[1.0, 0.0]);
        let b = t(&[2, 1], &[0.0, 1.0]);
        assert_eq!(a.matmul(&b).unwrap(), t(&[1, 1], &[0.0]));
    }

    #[test]
    fn matmul_matches_triple_loop() {
        let mut rng = rng_from(1);
        let a = Tensor::randn(&[3, 4], 1.0, &mut rng);
        let b = Tensor::randn(&[4, 5], 1.0, &mut rng);
        let c = a.matmul(&b).unwrap();
        for i in 0..3 {
            for j in 0..5 {
                let mut acc = 0.0;
                for k in 0..4 {
                    acc += a.at(&[i, k]) * b.at(&[k, j]);
                }
                assert!((c.at(&[i, j]) - acc).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn matmul_identity_associativity() {
        let mut rng = rng_from(2);
        let a = Tensor::randn(&[4, 4], 1.0, &mut rng);
        let b = Tensor::randn(&[4, 3], 1.0, &mut rng);
        let i4 = {
            let mut m = Tensor::zeros(&[4, 4]);
            for i in 0..4 {
                m.data_mut()[i * 4 + i] = 1.0;
            }
            m
        };
        let left = a.matmul(&i4).unwrap().matmul(&b).unwrap();
        let right = a.matmul(&b).unwrap();
        assert!(left.max_abs_diff(&right).unwrap() < 1e-12);
    }

    #[test]
    fn matmul_batched_broadcasts() {
        let mut rng = rng_from(3);
        let a = Tensor::randn(&[2, 3, 3, 4], 1.0, &mut rng);
        let b = Tensor::randn(&[4, 5], 1.0, &mut rng);
        let c = a.matmul(&b).unwrap();
        assert_eq!(c.shape(), &[2, 3, 3, 5]);
        for b0 in 0..2 {
            for b1 in 0..3 {
                for i in 0..3 {
                    for j in 0..5 {
                        let mut acc = 0.0;
                        for k in 0..4 {
                            acc += a.at(&[b0, b1, i, k]) * b.at(&[k, j]);
                        }
                        assert!((c.at(&[b0, b1, i, j]) - acc).abs() < 1e-12);
                    }
                }
            }
        }
    }

    #[test]
    fn matmul_shape_mismatch_errors() {
        let a = Tensor::zeros(&[2, 3]);
        let b = Tensor::zeros(&[4, 2]);
        assert!(a.matmul(&b).is_err());
    }

    #[test]
    fn elementwise_examples() {
        assert_eq!(Tensor::scalar(0.0).sigmoid().item().unwrap(), 0.5);
        let s = Tensor::scalar(0.5).sigmoid().item().unwrap();
        assert!((s - 0.622_459_331_201_854_6).abs() < 1e-12);
        assert_eq!(Tensor::scalar(-3.0).relu().item().unwrap(), 0.0);
        assert_eq!(Tensor::scalar(3.0).relu().item().unwrap(), 3.0);
    }

    #[test]
    fn broadcasting_right_aligned() {
        let a = t(&[2, 3], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let b = t(&[3], &[10.0, 20.0, 30.0]);
        let c = a.add(&b).unwrap();
        assert_eq!(c, t(&[2, 3], &[11.0, 22.0, 33.0, 14.0, 25.0, 36.0]));
        let col = t(&[2, 1], &[100.0, 200.0]);
        let d = a.add(&col).unwrap();
        assert_eq!(d, t(&[2, 3], &[101.0, 102.0, 103.0, 204.0, 205.0, 206.0]));
        assert!(a.add(&t(&[2], &[0.0, 0.0])).is_err());
    }

    #[test]
    fn reduce_examples() {
        let (v, i) = t(&[3], &[0.2, 0.9, 0.9]).max_last().unwrap();
        assert_eq!(v.item().unwrap(), 0.9);
        assert_eq!(i, vec![1]);
        assert_eq!(t(&[3], &[1.0, 2.0, 3.0]).mean_all(), 2.0);
        let mut rng = rng_from(4);
        let m = Tensor::randn(&[4, 4], 1.0, &mut rng);
        let mut acc = 0.0;
        for v in m.data() {
            acc += v;
        }
        assert!((m.sum_all() - acc).abs() < 1e-12);
    }

    #[test]
    fn sum_axis_against_loop() {
        let m = t(&[2, 3], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        assert_eq!(m.sum_axis(0).unwrap(), t(&[3], &[5.0, 7.0, 9.0]));
        assert_eq!(m.sum_axis(1).unwrap(), t(&[2], &[6.0, 15.0]));
        assert!(m.sum_axis(2).is_err());
    }

    #[test]
    fn topk_examples() {
        let (v, i) = t(&[3], &[0.1, 0.7, 0.4]).topk_last(2).unwrap();
        assert_eq!(v, t(&[2], &[0.7, 0.4]));
        assert_eq!(i, vec![1, 2]);
        let (_, i) = t(&[3], &[5.0, 5.0, 1.0]).topk_last(2).unwrap();
        assert_eq!(i, vec![0, 1]);
        assert!(t(&[3], &[1.0, 2.0, 3.0]).topk_last(4).is_err());
    }

    #[test]
    fn topk_matches_sort_oracle() {
        let mut rng = rng_from(5);
        let v = Tensor::randn(&[64], 1.0, &mut rng);
        let (vals, idxs) = v.topk_last(64).unwrap();
        let mut pairs: Vec<(usize, Elem)> = v.data().iter().cloned().enumerate().collect();
        pairs.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
        for (k, (i, x)) in pairs.iter().enumerate() {
            assert_eq!(idxs[k], *i);
            assert_eq!(vals.data()[k], *x);
        }
    }

    #[test]
    fn gather_scatter_examples() {
        let m = t(&[2, 1], &[1.0, 2.0]);
        assert_eq!(m.index_select(0, &[1, 0]).unwrap(), t(&[2, 1], &[2.0, 1.0]));
        let z = Tensor::zeros(&[1, 2]);
        let src = t(&[2, 2], &[3.0, 4.0, 3.0, 4.0]);
        let s = z.scatter_add(0, &[0, 0], &src).unwrap();
        assert_eq!(s, t(&[1, 2], &[6.0, 8.0]));
        assert!(m.index_select(0, &[2]).is_err());
    }

    #[test]
    fn concat_narrow_roundtrip() {
        let a = t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]);
        let b = t(&[2, 1], &[5.0, 6.0]);
        let c = Tensor::concat(&[&a, &b], 1).unwrap();
        assert_eq!(c, t(&[2, 3], &[1.0, 2.0, 5.0, 3.0, 4.0, 6.0]));
        assert_eq!(c.narrow(1, 0, 2).unwrap(), a);
        assert_eq!(c.narrow(1, 2, 1).unwrap(), b);
    }

    #[test]
    fn permute_roundtrip() {
        let mut rng = rng_from(6);
        let x = Tensor::randn(&[2, 3, 4], 1.0, &mut rng);
        let p = x.permute(&[2, 0, 1]).unwrap();
        assert_eq!(p.shape(), &[4, 2, 3]);
        assert_eq!(p.at(&[3, 1, 2]), x.at(&[1, 2, 3]));
        let back = p.permute(&[1, 2, 0]).unwrap();
        assert_eq!(back, x);
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let mut rng = rng_from(7);
        let x = Tensor::randn(&[3, 5], 2.0, &mut rng);
        let s = x.softmax_last().unwrap();
        for r in 0..3 {
            let sum: Elem = s.data()[r * 5..(r + 1) * 5].iter().sum();
            assert!((sum - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn reduce_to_shape_inverts_broadcast() {
        let g = Tensor::ones(&[2, 3, 4]);
        assert_eq!(g.reduce_to_shape(&[4]).unwrap(), Tensor::full(&[4], 6.0));
        assert_eq!(
            g.reduce_to_shape(&[3, 1]).unwrap(),
            Tensor::full(&[3, 1], 8.0)
        );
    }

    #[test]
    fn randn_deterministic() {
        let a = Tensor::randn(&[8], 0.02, &mut rng_from(9));
        let b = Tensor::randn(&[8], 0.02, &mut rng_from(9));
        assert_eq!(a, b);
    }

    proptest! {
        #[test]
        fn prop_topk_prefix_of_sort(v in proptest::collection::vec(-1000i32..1000, 1..40), k in 1usize..8) {
            let n = v.len();
            let k = k.min(n);
            let data: Vec<Elem> = v.iter().map(|&x| x as Elem).collect();
            let t = Tensor::new(vec![n], data.clone()).unwrap();
            let (vals, idxs) = t.topk_last(k).unwrap();
            let mut pairs: Vec<(usize, Elem)> = data.iter().cloned().enumerate().collect();
            pairs.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
            for j in 0..k {
                prop_assert_eq!(idxs[j], pairs[j].0);
                prop_assert_eq!(vals.data()[j], pairs[j].1);
            }
        }

        #[test]
        fn prop_scatter_add_matches_loop(idx in proptest::collection::vec(0usize..5, 1..10)) {
            let m = idx.len();
            let src_data: Vec<Elem> = (0..m * 2).map(|i| i as Elem).collect();
            let src = Tensor::new(vec![m, 2], src_data.clone()).unwrap();
            let out = Tensor::zeros(&[5, 2]).scatter_add(0, &idx, &src).unwrap();
            let mut oracle = vec![0.0 as Elem; 10];
            for (j, &i) in idx.iter().enumerate() {
                oracle[i * 2] += src_data[j * 2];
                oracle[i * 2 + 1] += src_data[j * 2 + 1];
            }
            prop_assert_eq!(out.into_data(), oracle);
        }

        #[test]
        fn prop_matmul_matches_loop(m in 1usize..4, k in 1usize..4, n in 1usize..4, seed in 0u64..1000) {
            let mut rng = rng_from(seed);
            let a = Tensor::randn(&[m, k], 1.0, &mut rng);
            let b = Tensor::randn(&[k, n], 1.0, &mut rng);
            let c = a.matmul(&b).unwrap();
            for i in 0..m {
                for j in 0..n {
                    let mut acc = 0.0;
                    for kk in 0..k {
                        acc += a.at(&[i, kk]) * b.at(&[kk, j]);
                    }
                    prop_assert!((c.at(&[i, j]) - acc).abs() < 1e-12);
                }
            }
        }
    }
}
