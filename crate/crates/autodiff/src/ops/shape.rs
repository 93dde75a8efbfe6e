use crate::graph::Var;
use crate::tensor::{permute_data, Real, Tensor};

fn outer_inner(shape: &[usize], axis: usize) -> (usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, inner)
}

impl<'g, T: Real> Var<'g, T> {
    pub fn reshape(&self, shape: &[usize]) -> Var<'g, T> {
        let xv = self.value();
        let old = xv.shape().to_vec();
        let value = xv
            .reshape(shape)
            .unwrap_or_else(|_| panic!("cannot reshape {old:?} to {shape:?}"));
        self.graph.op(value, &[*self], move |g, _| {
            vec![Some(g.reshape(&old).expect("reshape grad"))]
        })
    }

    /// Axis permutation; output axis `i` is input axis `perm[i]`.
    pub fn permute(&self, perm: &[usize]) -> Var<'g, T> {
        let xv = self.value();
        let value = permute_data(xv.data(), xv.shape(), perm);
        let mut inverse = vec![0; perm.len()];
        for (i, &p) in perm.iter().enumerate() {
            inverse[p] = i;
        }
        self.graph.op(value, &[*self], move |g, _| {
            vec![Some(permute_data(g.data(), g.shape(), &inverse))]
        })
    }

    /// Concatenate along `axis`; all other extents must agree.
    pub fn concat(parts: &[Var<'g, T>], axis: usize) -> Var<'g, T> {
        let first = parts.first().expect("concat of nothing");
        let values: Vec<_> = parts.iter().map(|p| p.value()).collect();
        let base = values[0].shape().to_vec();
        for v in &values {
            assert_eq!(v.rank(), base.len(), "concat rank mismatch");
            for (ax, (&a, &b)) in v.shape().iter().zip(&base).enumerate() {
                assert!(ax == axis || a == b, "concat extent mismatch on axis {ax}");
            }
        }
        let sizes: Vec<usize> = values.iter().map(|v| v.dim(axis)).collect();
        let total: usize = sizes.iter().sum();
        let (outer, inner) = outer_inner(&base, axis);
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for (v, &s) in values.iter().zip(&sizes) {
                out.extend_from_slice(&v.data()[o * s * inner..(o + 1) * s * inner]);
            }
        }
        let mut shape = base.clone();
        shape[axis] = total;
        first.graph.op(Tensor::from_vec(&shape, out), parts, move |g, p| {
            let gd = g.data();
            let mut offset = 0;
            let mut grads = Vec::with_capacity(p.len());
            for (k, &s) in sizes.iter().enumerate() {
                let mut d = Vec::with_capacity(outer * s * inner);
                for o in 0..outer {
                    let start = o * total * inner + offset * inner;
                    d.extend_from_slice(&gd[start..start + s * inner]);
                }
                grads.push(Some(Tensor::from_vec(p[k].shape(), d)));
                offset += s;
            }
            grads
        })
    }

    /// Slice `len` entries starting at `start` along `axis`.
    pub fn narrow(&self, axis: usize, start: usize, len: usize) -> Var<'g, T> {
        let xv = self.value();
        let shape = xv.shape().to_vec();
        assert!(start + len <= shape[axis], "narrow out of range");
        let (outer, inner) = outer_inner(&shape, axis);
        let full = shape[axis];
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let s = (o * full + start) * inner;
            out.extend_from_slice(&xv.data()[s..s + len * inner]);
        }
        let mut out_shape = shape.clone();
        out_shape[axis] = len;
        self.graph
            .op(Tensor::from_vec(&out_shape, out), &[*self], move |g, _| {
                let mut d = Tensor::zeros(&shape);
                let dd = d.data_mut();
                for o in 0..outer {
                    let s = (o * full + start) * inner;
                    dd[s..s + len * inner]
                        .copy_from_slice(&g.data()[o * len * inner..(o + 1) * len * inner]);
                }
                vec![Some(d)]
            })
    }

    /// Row lookup: `self` is a `[V, D]` table, result is `[ids.len(), D]`.
    pub fn embedding(&self, ids: &[usize]) -> Var<'g, T> {
        let tv = self.value();
        assert_eq!(tv.rank(), 2, "embedding table must be 2-d");
        let (vocab, d) = (tv.dim(0), tv.dim(1));
        let mut out = Vec::with_capacity(ids.len() * d);
        for &i in ids {
            assert!(i < vocab, "embedding index {i} out of range {vocab}");
            out.extend_from_slice(&tv.data()[i * d..(i + 1) * d]);
        }
        let ids = ids.to_vec();
        self.graph
            .op(Tensor::from_vec(&[ids.len(), d], out), &[*self], move |g, _| {
                let mut dt = Tensor::zeros(&[vocab, d]);
                let dd = dt.data_mut();
                for (row, &i) in ids.iter().enumerate() {
                    for (a, &b) in dd[i * d..(i + 1) * d]
                        .iter_mut()
                        .zip(&g.data()[row * d..(row + 1) * d])
                    {
                        *a += b;
                    }
                }
                vec![Some(dt)]
            })
    }

    pub fn sum_all(&self) -> Var<'g, T> {
        let xv = self.value();
        let shape = xv.shape().to_vec();
        self.graph
            .op(Tensor::scalar(xv.sum()), &[*self], move |g, _| {
                vec![Some(Tensor::full(&shape, g.item()))]
            })
    }

    pub fn mean_all(&self) -> Var<'g, T> {
        let n = self.value().numel().max(1);
        self.sum_all().scale(1.0 / n as f64)
    }

    /// Mean over one axis, which is removed from the shape.
    pub fn mean_axis(&self, axis: usize) -> Var<'g, T> {
        let xv = self.value();
        let shape = xv.shape().to_vec();
        let (outer, inner) = outer_inner(&shape, axis);
        let len = shape[axis];
        let inv = T::one() / T::from_usize(len.max(1)).unwrap();
        let mut out = vec![T::zero(); outer * inner];
        for o in 0..outer {
            for k in 0..len {
                let src = &xv.data()[(o * len + k) * inner..(o * len + k + 1) * inner];
                for (a, &b) in out[o * inner..(o + 1) * inner].iter_mut().zip(src) {
                    *a += b;
                }
            }
        }
        out.iter_mut().for_each(|v| *v *= inv);
        let mut out_shape = shape.clone();
        out_shape.remove(axis);
        self.graph
            .op(Tensor::from_vec(&out_shape, out), &[*self], move |g, _| {
                let mut d = Tensor::zeros(&shape);
                let dd = d.data_mut();
                for o in 0..outer {
                    let src = &g.data()[o * inner..(o + 1) * inner];
                    for k in 0..len {
                        for (a, &b) in dd[(o * len + k) * inner..(o * len + k + 1) * inner]
                            .iter_mut()
                            .zip(src)
                        {
                            *a = b * inv;
                        }
                    }
                }
                vec![Some(d)]
            })
    }

    /// Softmax over the last axis with an optional key mask.
    ///
    /// For a `[..., q, k]` input the mask has one entry per (batch, key), i.e.
    /// `numel / (q * k) * k` entries, shared across the query axis. Masked keys
    /// get weight exactly zero; a row with every key masked is all zeros.
    pub fn softmax_last(&self, key_mask: Option<&[bool]>) -> Var<'g, T> {
        let xv = self.value();
        let shape = xv.shape().to_vec();
        let k = *shape.last().expect("softmax on scalar");
        let q = if shape.len() >= 2 { shape[shape.len() - 2] } else { 1 };
        let rows = xv.numel() / k;
        if let Some(m) = key_mask {
            assert_eq!(m.len(), rows / q * k, "softmax mask length");
        }
        let mut out = vec![T::zero(); xv.numel()];
        for r in 0..rows {
            let src = &xv.data()[r * k..(r + 1) * k];
            let mask = key_mask.map(|m| &m[(r / q) * k..(r / q + 1) * k]);
            let valid = |j: usize| mask.is_none_or(|m| m[j]);
            let mut max = T::neg_infinity();
            for (j, &v) in src.iter().enumerate() {
                if valid(j) && v > max {
                    max = v;
                }
            }
            if max == T::neg_infinity() {
                continue;
            }
            let dst = &mut out[r * k..(r + 1) * k];
            let mut sum = T::zero();
            for j in 0..k {
                if valid(j) {
                    let e = (src[j] - max).exp();
                    dst[j] = e;
                    sum += e;
                }
            }
            for v in dst.iter_mut() {
                *v /= sum;
            }
        }
        let saved = std::sync::Arc::new(Tensor::from_vec(&shape, out));
        let y = saved.clone();
        self.graph.op(saved, &[*self], move |g, _| {
            let mut d = vec![T::zero(); g.numel()];
            for r in 0..rows {
                let yr = &y.data()[r * k..(r + 1) * k];
                let gr = &g.data()[r * k..(r + 1) * k];
                let dot: T = yr.iter().zip(gr).map(|(&a, &b)| a * b).sum();
                for ((o, &a), &b) in d[r * k..(r + 1) * k].iter_mut().zip(yr).zip(gr) {
                    *o = a * (b - dot);
                }
            }
            vec![Some(Tensor::from_vec(&shape, d))]
        })
    }
}

#[cfg(test)]
mod tests {
    use crate::{Graph, Tensor};

    #[test]
    fn masked_softmax_zeroes_masked_keys() {
        let g = Graph::<f64>::new();
        let x = g.constant(Tensor::from_vec(&[1, 2, 3], vec![1.0, 2.0, 3.0, 0.0, 0.0, 9.0]));
        let y = x.softmax_last(Some(&[true, true, false])).to_tensor();
        assert_eq!(y.data()[2], 0.0);
        assert_eq!(y.data()[5], 0.0);
        assert!((y.data()[3] - 0.5).abs() < 1e-15);
        let z = x.softmax_last(Some(&[false, false, false])).to_tensor();
        assert!(z.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn concat_and_narrow_are_inverse() {
        let g = Graph::<f64>::new();
        let a = g.constant(Tensor::from_fn(&[2, 2, 3], |i| i as f64));
        let b = g.constant(Tensor::from_fn(&[2, 1, 3], |i| 100.0 + i as f64));
        let c = crate::Var::concat(&[a, b], 1);
        assert_eq!(c.shape(), vec![2, 3, 3]);
        assert_eq!(c.narrow(1, 0, 2).to_tensor(), a.to_tensor());
        assert_eq!(c.narrow(1, 2, 1).to_tensor(), b.to_tensor());
    }
}
