use std::sync::Arc;

use crate::graph::Var;
use crate::tensor::{Real, Tensor};

/// Normalize contiguous segments of `len` elements; returns (xhat, inv_std per segment).
fn normalize_segments<T: Real>(x: &[T], len: usize, eps: T) -> (Vec<T>, Vec<T>) {
    let segs = x.len() / len;
    let mut xhat = vec![T::zero(); x.len()];
    let mut inv = vec![T::zero(); segs];
    let n = T::from_usize(len).unwrap();
    for s in 0..segs {
        let seg = &x[s * len..(s + 1) * len];
        let mean = seg.iter().copied().sum::<T>() / n;
        let var = seg.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / n;
        let istd = T::one() / (var + eps).sqrt();
        inv[s] = istd;
        for (o, &v) in xhat[s * len..(s + 1) * len].iter_mut().zip(seg) {
            *o = (v - mean) * istd;
        }
    }
    (xhat, inv)
}

/// Backward of segment normalization given dL/dxhat.
fn normalize_backward<T: Real>(dxhat: &[T], xhat: &[T], inv: &[T], len: usize) -> Vec<T> {
    let n = T::from_usize(len).unwrap();
    let mut dx = vec![T::zero(); dxhat.len()];
    for (s, &istd) in inv.iter().enumerate() {
        let r = s * len..(s + 1) * len;
        let (dh, xh) = (&dxhat[r.clone()], &xhat[r.clone()]);
        let mean_d = dh.iter().copied().sum::<T>() / n;
        let mean_dx = dh.iter().zip(xh).map(|(&a, &b)| a * b).sum::<T>() / n;
        for ((o, &a), &b) in dx[r].iter_mut().zip(dh).zip(xh) {
            *o = istd * (a - mean_d - b * mean_dx);
        }
    }
    dx
}

impl<'g, T: Real> Var<'g, T> {
    /// Group normalization over `[N, C, ...]` with per-channel affine parameters.
    pub fn group_norm(
        &self,
        groups: usize,
        gamma: &Var<'g, T>,
        beta: &Var<'g, T>,
        eps: f64,
    ) -> Var<'g, T> {
        let xv = self.value();
        assert!(xv.rank() >= 2, "group_norm needs [N, C, ...]");
        let (n, c) = (xv.dim(0), xv.dim(1));
        assert!(groups > 0 && c % groups == 0, "channels {c} not divisible by {groups} groups");
        let spatial = xv.numel() / (n * c);
        let seg = (c / groups) * spatial;
        let (xhat, inv) = normalize_segments(xv.data(), seg, T::lit(eps));
        let gv = gamma.value();
        let bv = beta.value();
        assert_eq!(gv.shape(), &[c]);
        assert_eq!(bv.shape(), &[c]);
        let mut out = vec![T::zero(); xv.numel()];
        for ni in 0..n {
            for ci in 0..c {
                let r = (ni * c + ci) * spatial..(ni * c + ci + 1) * spatial;
                let (gm, bt) = (gv.data()[ci], bv.data()[ci]);
                for (o, &h) in out[r.clone()].iter_mut().zip(&xhat[r]) {
                    *o = h * gm + bt;
                }
            }
        }
        let shape = xv.shape().to_vec();
        let xhat = Arc::new(xhat);
        let (need_x, need_g, need_b) = (
            self.requires_grad(),
            gamma.requires_grad(),
            beta.requires_grad(),
        );
        self.graph.op(
            Tensor::from_vec(&shape, out),
            &[*self, *gamma, *beta],
            move |g, p| {
                let gd = g.data();
                let gm = p[1].data();
                let gx = need_x.then(|| {
                    let mut dxhat = vec![T::zero(); gd.len()];
                    for ni in 0..n {
                        for ci in 0..c {
                            let r = (ni * c + ci) * spatial..(ni * c + ci + 1) * spatial;
                            for (o, &v) in dxhat[r.clone()].iter_mut().zip(&gd[r]) {
                                *o = v * gm[ci];
                            }
                        }
                    }
                    Tensor::from_vec(&shape, normalize_backward(&dxhat, &xhat, &inv, seg))
                });
                let mut dgamma = vec![T::zero(); c];
                let mut dbeta = vec![T::zero(); c];
                if need_g || need_b {
                    for ni in 0..n {
                        for ci in 0..c {
                            let r = (ni * c + ci) * spatial..(ni * c + ci + 1) * spatial;
                            for (&v, &h) in gd[r.clone()].iter().zip(&xhat[r]) {
                                dgamma[ci] += v * h;
                                dbeta[ci] += v;
                            }
                        }
                    }
                }
                vec![
                    gx,
                    need_g.then(|| Tensor::from_vec(&[c], dgamma)),
                    need_b.then(|| Tensor::from_vec(&[c], dbeta)),
                ]
            },
        )
    }

    /// Layer normalization over the last axis.
    pub fn layer_norm(&self, gamma: &Var<'g, T>, beta: &Var<'g, T>, eps: f64) -> Var<'g, T> {
        let xv = self.value();
        let d = *xv.shape().last().expect("layer_norm on scalar");
        let (xhat, inv) = normalize_segments(xv.data(), d, T::lit(eps));
        let gv = gamma.value();
        let bv = beta.value();
        assert_eq!(gv.shape(), &[d]);
        let out: Vec<T> = xhat
            .iter()
            .enumerate()
            .map(|(i, &h)| h * gv.data()[i % d] + bv.data()[i % d])
            .collect();
        let shape = xv.shape().to_vec();
        let xhat = Arc::new(xhat);
        let (need_x, need_g, need_b) = (
            self.requires_grad(),
            gamma.requires_grad(),
            beta.requires_grad(),
        );
        self.graph.op(
            Tensor::from_vec(&shape, out),
            &[*self, *gamma, *beta],
            move |g, p| {
                let gd = g.data();
                let gm = p[1].data();
                let gx = need_x.then(|| {
                    let dxhat: Vec<T> = gd.iter().enumerate().map(|(i, &v)| v * gm[i % d]).collect();
                    Tensor::from_vec(&shape, normalize_backward(&dxhat, &xhat, &inv, d))
                });
                let mut dgamma = vec![T::zero(); d];
                let mut dbeta = vec![T::zero(); d];
                for (i, (&v, &h)) in gd.iter().zip(xhat.iter()).enumerate() {
                    dgamma[i % d] += v * h;
                    dbeta[i % d] += v;
                }
                vec![
                    gx,
                    need_g.then(|| Tensor::from_vec(&[d], dgamma)),
                    need_b.then(|| Tensor::from_vec(&[d], dbeta)),
                ]
            },
        )
    }
}
