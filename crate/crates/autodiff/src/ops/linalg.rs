use crate::graph::Var;
use crate::tensor::{gemm, Real, Tensor};

impl<'g, T: Real> Var<'g, T> {
    /// `[..., k] x [k, n] -> [..., n]`; leading axes are treated as rows.
    pub fn matmul(&self, w: &Var<'g, T>) -> Var<'g, T> {
        let xv = self.value();
        let wv = w.value();
        assert_eq!(wv.rank(), 2, "matmul rhs must be 2-d, got {:?}", wv.shape());
        let k = wv.dim(0);
        let n = wv.dim(1);
        let xs = xv.shape();
        assert_eq!(
            *xs.last().expect("matmul lhs rank 0"),
            k,
            "matmul inner dims {xs:?} x {:?}",
            wv.shape()
        );
        let rows = xv.numel() / k;
        let mut out = vec![T::zero(); rows * n];
        gemm(rows, k, n, T::one(), xv.data(), false, wv.data(), false, T::zero(), &mut out);
        let mut out_shape = xs.to_vec();
        *out_shape.last_mut().unwrap() = n;
        let need_x = self.requires_grad();
        let need_w = w.requires_grad();
        self.graph.op(Tensor::from_vec(&out_shape, out), &[*self, *w], move |g, p| {
            let (x, w) = (p[0], p[1]);
            let gx = need_x.then(|| {
                let mut d = vec![T::zero(); rows * k];
                gemm(rows, n, k, T::one(), g.data(), false, w.data(), true, T::zero(), &mut d);
                Tensor::from_vec(x.shape(), d)
            });
            let gw = need_w.then(|| {
                let mut d = vec![T::zero(); k * n];
                gemm(k, rows, n, T::one(), x.data(), true, g.data(), false, T::zero(), &mut d);
                Tensor::from_vec(&[k, n], d)
            });
            vec![gx, gw]
        })
    }

    /// Affine map `x W + b`.
    pub fn linear(&self, w: &Var<'g, T>, b: Option<&Var<'g, T>>) -> Var<'g, T> {
        let y = self.matmul(w);
        match b {
            Some(b) => y.add(b),
            None => y,
        }
    }

    /// Batched product `[B, m, k] x [B, k, n] -> [B, m, n]`.
    ///
    /// With `trans_rhs` the right operand is stored as `[B, n, k]`.
    pub fn bmm(&self, rhs: &Var<'g, T>, trans_rhs: bool) -> Var<'g, T> {
        let av = self.value();
        let bv = rhs.value();
        assert!(av.rank() == 3 && bv.rank() == 3, "bmm needs rank-3 operands");
        let (batch, m, k) = (av.dim(0), av.dim(1), av.dim(2));
        assert_eq!(bv.dim(0), batch, "bmm batch mismatch");
        let n = if trans_rhs {
            assert_eq!(bv.dim(2), k, "bmm inner dims");
            bv.dim(1)
        } else {
            assert_eq!(bv.dim(1), k, "bmm inner dims");
            bv.dim(2)
        };
        let mut out = vec![T::zero(); batch * m * n];
        for bi in 0..batch {
            gemm(
                m,
                k,
                n,
                T::one(),
                &av.data()[bi * m * k..],
                false,
                &bv.data()[bi * k * n..],
                trans_rhs,
                T::zero(),
                &mut out[bi * m * n..(bi + 1) * m * n],
            );
        }
        let need_a = self.requires_grad();
        let need_b = rhs.requires_grad();
        self.graph.op(
            Tensor::from_vec(&[batch, m, n], out),
            &[*self, *rhs],
            move |g, p| {
                let (a, b) = (p[0], p[1]);
                let gd = g.data();
                let ga = need_a.then(|| {
                    let mut d = vec![T::zero(); batch * m * k];
                    for bi in 0..batch {
                        // dA = dC op(B)^T
                        gemm(
                            m,
                            n,
                            k,
                            T::one(),
                            &gd[bi * m * n..],
                            false,
                            &b.data()[bi * k * n..],
                            !trans_rhs,
                            T::zero(),
                            &mut d[bi * m * k..(bi + 1) * m * k],
                        );
                    }
                    Tensor::from_vec(&[batch, m, k], d)
                });
                let gb = need_b.then(|| {
                    let mut d = vec![T::zero(); batch * k * n];
                    for bi in 0..batch {
                        let dst = &mut d[bi * k * n..(bi + 1) * k * n];
                        if trans_rhs {
                            // d(B_stored) = dC^T A  -> [n, k]
                            gemm(
                                n,
                                m,
                                k,
                                T::one(),
                                &gd[bi * m * n..],
                                true,
                                &a.data()[bi * m * k..],
                                false,
                                T::zero(),
                                dst,
                            );
                        } else {
                            gemm(
                                k,
                                m,
                                n,
                                T::one(),
                                &a.data()[bi * m * k..],
                                true,
                                &gd[bi * m * n..],
                                false,
                                T::zero(),
                                dst,
                            );
                        }
                    }
                    Tensor::from_vec(b.shape(), d)
                });
                vec![ga, gb]
            },
        )
    }
}
