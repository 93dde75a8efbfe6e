use std::sync::Arc;

use crate::graph::Var;
use crate::tensor::{strides_of, Real, Tensor};

/// Broadcast result shape of two shapes (numpy rules, right-aligned).
pub(crate) fn broadcast_shape(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
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

/// Source offsets of `in_shape` for every element of `out_shape`.
fn broadcast_offsets(out_shape: &[usize], in_shape: &[usize]) -> Vec<usize> {
    let rank = out_shape.len();
    let pad = rank - in_shape.len();
    let in_strides = strides_of(in_shape);
    let strides: Vec<usize> = (0..rank)
        .map(|i| {
            if i < pad || in_shape[i - pad] == 1 {
                0
            } else {
                in_strides[i - pad]
            }
        })
        .collect();
    let numel: usize = out_shape.iter().product();
    let mut offsets = Vec::with_capacity(numel);
    if numel == 0 {
        return offsets;
    }
    if rank == 0 {
        offsets.push(0);
        return offsets;
    }
    let mut idx = vec![0usize; rank];
    let mut off = 0usize;
    let last = rank - 1;
    loop {
        for j in 0..out_shape[last] {
            offsets.push(off + j * strides[last]);
        }
        let mut axis = last;
        loop {
            if axis == 0 {
                return offsets;
            }
            axis -= 1;
            idx[axis] += 1;
            off += strides[axis];
            if idx[axis] < out_shape[axis] {
                break;
            }
            off -= strides[axis] * out_shape[axis];
            idx[axis] = 0;
        }
    }
}

/// Sum `grad` (shaped like the broadcast output) back down to `in_shape`.
fn reduce_to_impl<T: Real>(grad: &Tensor<T>, in_shape: &[usize]) -> Tensor<T> {
    if grad.shape() == in_shape {
        return grad.clone();
    }
    let offsets = broadcast_offsets(grad.shape(), in_shape);
    let mut out = Tensor::zeros(in_shape);
    let od = out.data_mut();
    for (&o, &g) in offsets.iter().zip(grad.data()) {
        od[o] += g;
    }
    out
}

enum Binary {
    Add,
    Sub,
    Mul,
}

fn binary<'g, T: Real>(a: Var<'g, T>, b: Var<'g, T>, kind: Binary) -> Var<'g, T> {
    let av = a.value();
    let bv = b.value();
    let out_shape = broadcast_shape(av.shape(), bv.shape()).unwrap_or_else(|| {
        panic!(
            "cannot broadcast {:?} with {:?}",
            av.shape(),
            bv.shape()
        )
    });
    let f = |x: T, y: T| match kind {
        Binary::Add => x + y,
        Binary::Sub => x - y,
        Binary::Mul => x * y,
    };
    let value = if av.shape() == bv.shape() {
        av.zip_map(&bv, f)
    } else {
        let ao = broadcast_offsets(&out_shape, av.shape());
        let bo = broadcast_offsets(&out_shape, bv.shape());
        let (ad, bd) = (av.data(), bv.data());
        let data = ao.iter().zip(&bo).map(|(&i, &j)| f(ad[i], bd[j])).collect();
        Tensor::from_vec(&out_shape, data)
    };
    let a_shape = av.shape().to_vec();
    let b_shape = bv.shape().to_vec();
    let needs_a = a.requires_grad();
    let needs_b = b.requires_grad();
    a.graph().op(value, &[a, b], move |g, parents| {
        let (x, y) = (parents[0], parents[1]);
        match kind {
            Binary::Add => vec![
                needs_a.then(|| reduce_to_impl(g, &a_shape)),
                needs_b.then(|| reduce_to_impl(g, &b_shape)),
            ],
            Binary::Sub => vec![
                needs_a.then(|| reduce_to_impl(g, &a_shape)),
                needs_b.then(|| reduce_to_impl(&g.map(|v| -v), &b_shape)),
            ],
            Binary::Mul => {
                let ga = needs_a.then(|| {
                    let yb = broadcast_to(y, g.shape());
                    reduce_to_impl(&g.zip_map(&yb, |u, v| u * v), &a_shape)
                });
                let gb = needs_b.then(|| {
                    let xb = broadcast_to(x, g.shape());
                    reduce_to_impl(&g.zip_map(&xb, |u, v| u * v), &b_shape)
                });
                vec![ga, gb]
            }
        }
    })
}

fn broadcast_to<T: Real>(t: &Tensor<T>, shape: &[usize]) -> Tensor<T> {
    if t.shape() == shape {
        return t.clone();
    }
    let offs = broadcast_offsets(shape, t.shape());
    let d = t.data();
    Tensor::from_vec(shape, offs.iter().map(|&o| d[o]).collect())
}

fn unary<'g, T: Real>(
    x: Var<'g, T>,
    f: impl Fn(T) -> T,
    // derivative from (input, output)
    df: impl Fn(T, T) -> T + 'static,
) -> Var<'g, T> {
    let xv = x.value();
    let out = Arc::new(xv.map(f));
    let saved = out.clone();
    x.graph().op(out, &[x], move |g, parents| {
        let xin = parents[0];
        let data = g
            .data()
            .iter()
            .zip(xin.data())
            .zip(saved.data())
            .map(|((&gi, &xi), &yi)| gi * df(xi, yi))
            .collect();
        vec![Some(Tensor::from_vec(g.shape(), data))]
    })
}

impl<'g, T: Real> Var<'g, T> {
    /// Elementwise sum with broadcasting.
    pub fn add(&self, other: &Var<'g, T>) -> Var<'g, T> {
        binary(*self, *other, Binary::Add)
    }

    pub fn sub(&self, other: &Var<'g, T>) -> Var<'g, T> {
        binary(*self, *other, Binary::Sub)
    }

    pub fn mul(&self, other: &Var<'g, T>) -> Var<'g, T> {
        binary(*self, *other, Binary::Mul)
    }

    pub fn scale(&self, s: f64) -> Var<'g, T> {
        let s = T::lit(s);
        let value = self.value().map(|x| x * s);
        self.graph
            .op(value, &[*self], move |g, _| vec![Some(g.map(|v| v * s))])
    }

    pub fn add_scalar(&self, s: f64) -> Var<'g, T> {
        let s = T::lit(s);
        let value = self.value().map(|x| x + s);
        self.graph.op(value, &[*self], |g, _| vec![Some(g.clone())])
    }

    pub fn neg(&self) -> Var<'g, T> {
        self.scale(-1.0)
    }

    pub fn sqr(&self) -> Var<'g, T> {
        unary(*self, |x| x * x, |x, _| x + x)
    }

    pub fn exp(&self) -> Var<'g, T> {
        unary(*self, |x| x.exp(), |_, y| y)
    }

    pub fn tanh(&self) -> Var<'g, T> {
        unary(*self, |x| x.tanh(), |_, y| T::one() - y * y)
    }

    pub fn sigmoid(&self) -> Var<'g, T> {
        unary(*self, sigmoid, |_, y| y * (T::one() - y))
    }

    pub fn relu(&self) -> Var<'g, T> {
        unary(
            *self,
            |x| x.max(T::zero()),
            |x, _| if x > T::zero() { T::one() } else { T::zero() },
        )
    }

    /// `x * sigmoid(x)`.
    pub fn silu(&self) -> Var<'g, T> {
        unary(
            *self,
            |x| x * sigmoid(x),
            |x, _| {
                let s = sigmoid(x);
                s * (T::one() + x * (T::one() - s))
            },
        )
    }
}

#[inline]
pub(crate) fn sigmoid<T: Real>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::Graph;

    #[test]
    fn broadcast_shapes() {
        assert_eq!(broadcast_shape(&[2, 3, 4], &[3, 1]), Some(vec![2, 3, 4]));
        assert_eq!(broadcast_shape(&[2, 1], &[1, 5]), Some(vec![2, 5]));
        assert_eq!(broadcast_shape(&[2, 3], &[4]), None);
    }

    #[test]
    fn broadcast_add_and_reduce() {
        let g = Graph::<f64>::new();
        let x = g.leaf(Tensor::from_fn(&[2, 3], |i| i as f64), true);
        let b = g.leaf(Tensor::from_vec(&[3], vec![10.0, 20.0, 30.0]), true);
        let y = x.add(&b);
        assert_eq!(y.to_tensor().data(), &[10.0, 21.0, 32.0, 13.0, 24.0, 35.0]);
        let loss = y.sum_all();
        let grads = g.backward(loss);
        assert_eq!(grads.get(b).unwrap().data(), &[2.0, 2.0, 2.0]);
        assert_eq!(grads.get(x).unwrap().data(), &[1.0; 6]);
    }
}
