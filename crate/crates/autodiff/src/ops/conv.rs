use std::sync::Arc;

use crate::graph::Var;
use crate::tensor::{gemm, Real, Tensor};

#[derive(Clone, Copy, Debug)]
struct ConvGeom {
    n: usize,
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
}

impl ConvGeom {
    fn rows(&self) -> usize {
        self.c * self.kh * self.kw
    }

    fn cols(&self) -> usize {
        self.n * self.ho * self.wo
    }
}

fn im2col<T: Real>(x: &[T], g: &ConvGeom) -> Vec<T> {
    let cols = g.cols();
    let mut out = vec![T::zero(); g.rows() * cols];
    let plane = g.h * g.w;
    for c in 0..g.c {
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let r = (c * g.kh + ki) * g.kw + kj;
                let row = &mut out[r * cols..(r + 1) * cols];
                for n in 0..g.n {
                    let src = &x[(n * g.c + c) * plane..(n * g.c + c + 1) * plane];
                    for oh in 0..g.ho {
                        let ih = (oh * g.stride + ki) as isize - g.pad as isize;
                        if ih < 0 || ih >= g.h as isize {
                            continue;
                        }
                        let base = (n * g.ho + oh) * g.wo;
                        let srow = &src[ih as usize * g.w..(ih as usize + 1) * g.w];
                        for ow in 0..g.wo {
                            let iw = (ow * g.stride + kj) as isize - g.pad as isize;
                            if iw >= 0 && iw < g.w as isize {
                                row[base + ow] = srow[iw as usize];
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

fn col2im<T: Real>(cols_data: &[T], g: &ConvGeom) -> Vec<T> {
    let cols = g.cols();
    let plane = g.h * g.w;
    let mut x = vec![T::zero(); g.n * g.c * plane];
    for c in 0..g.c {
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let r = (c * g.kh + ki) * g.kw + kj;
                let row = &cols_data[r * cols..(r + 1) * cols];
                for n in 0..g.n {
                    let dst = &mut x[(n * g.c + c) * plane..(n * g.c + c + 1) * plane];
                    for oh in 0..g.ho {
                        let ih = (oh * g.stride + ki) as isize - g.pad as isize;
                        if ih < 0 || ih >= g.h as isize {
                            continue;
                        }
                        let base = (n * g.ho + oh) * g.wo;
                        let drow = &mut dst[ih as usize * g.w..(ih as usize + 1) * g.w];
                        for ow in 0..g.wo {
                            let iw = (ow * g.stride + kj) as isize - g.pad as isize;
                            if iw >= 0 && iw < g.w as isize {
                                drow[iw as usize] += row[base + ow];
                            }
                        }
                    }
                }
            }
        }
    }
    x
}

impl<'g, T: Real> Var<'g, T> {
    /// 2-d convolution, NCHW input, `[out, in, kh, kw]` weights.
    pub fn conv2d(
        &self,
        weight: &Var<'g, T>,
        bias: Option<&Var<'g, T>>,
        stride: usize,
        pad: usize,
    ) -> Var<'g, T> {
        let xv = self.value();
        let wv = weight.value();
        assert_eq!(xv.rank(), 4, "conv2d input must be NCHW, got {:?}", xv.shape());
        assert_eq!(wv.rank(), 4, "conv2d weight must be rank 4");
        let (n, c, h, w) = (xv.dim(0), xv.dim(1), xv.dim(2), xv.dim(3));
        let (o, wc, kh, kw) = (wv.dim(0), wv.dim(1), wv.dim(2), wv.dim(3));
        assert_eq!(c, wc, "conv2d channel mismatch: input {c}, weight {wc}");
        assert!(stride >= 1);
        assert!(h + 2 * pad >= kh && w + 2 * pad >= kw, "conv2d kernel larger than input");
        let ho = (h + 2 * pad - kh) / stride + 1;
        let wo = (w + 2 * pad - kw) / stride + 1;
        let geom = ConvGeom {
            n,
            c,
            h,
            w,
            kh,
            kw,
            stride,
            pad,
            ho,
            wo,
        };
        let cols = Arc::new(im2col(xv.data(), &geom));
        let ncols = geom.cols();
        let krows = geom.rows();
        let mut out_mat = vec![T::zero(); o * ncols];
        gemm(o, krows, ncols, T::one(), wv.data(), false, &cols, false, T::zero(), &mut out_mat);
        let bias_val = bias.map(|b| b.value());
        let hw = ho * wo;
        let mut out = vec![T::zero(); n * o * hw];
        for oc in 0..o {
            let bv = bias_val.as_ref().map_or(T::zero(), |b| b.data()[oc]);
            let src = &out_mat[oc * ncols..(oc + 1) * ncols];
            for ni in 0..n {
                let dst = &mut out[(ni * o + oc) * hw..(ni * o + oc + 1) * hw];
                for (d, &s) in dst.iter_mut().zip(&src[ni * hw..(ni + 1) * hw]) {
                    *d = s + bv;
                }
            }
        }
        let value = Tensor::from_vec(&[n, o, ho, wo], out);
        let need_x = self.requires_grad();
        let need_w = weight.requires_grad();
        let need_b = bias.is_some_and(|b| b.requires_grad());
        let mut parents = vec![*self, *weight];
        if let Some(b) = bias {
            parents.push(*b);
        }
        let has_bias = bias.is_some();
        self.graph.op(value, &parents, move |g, p| {
            let wv = p[1];
            let gd = g.data();
            // [N, O, HW] -> [O, N*HW]
            let mut gmat = vec![T::zero(); o * ncols];
            for ni in 0..n {
                for oc in 0..o {
                    gmat[oc * ncols + ni * hw..oc * ncols + (ni + 1) * hw]
                        .copy_from_slice(&gd[(ni * o + oc) * hw..(ni * o + oc + 1) * hw]);
                }
            }
            let gx = need_x.then(|| {
                let mut dcols = vec![T::zero(); krows * ncols];
                gemm(krows, o, ncols, T::one(), wv.data(), true, &gmat, false, T::zero(), &mut dcols);
                Tensor::from_vec(&[n, c, h, w], col2im(&dcols, &geom))
            });
            let gw = need_w.then(|| {
                let mut dw = vec![T::zero(); o * krows];
                gemm(o, ncols, krows, T::one(), &gmat, false, &cols, true, T::zero(), &mut dw);
                Tensor::from_vec(&[o, c, kh, kw], dw)
            });
            let mut res = vec![gx, gw];
            if has_bias {
                res.push(need_b.then(|| {
                    Tensor::from_fn(&[o], |oc| {
                        gmat[oc * ncols..(oc + 1) * ncols].iter().copied().sum()
                    })
                }));
            }
            res
        })
    }

    /// Nearest-neighbour 2x upsampling of an NCHW tensor.
    pub fn upsample_nearest2x(&self) -> Var<'g, T> {
        let xv = self.value();
        assert_eq!(xv.rank(), 4, "upsample needs NCHW");
        let (n, c, h, w) = (xv.dim(0), xv.dim(1), xv.dim(2), xv.dim(3));
        let (h2, w2) = (2 * h, 2 * w);
        let mut out = vec![T::zero(); n * c * h2 * w2];
        let xd = xv.data();
        for plane in 0..n * c {
            let src = &xd[plane * h * w..(plane + 1) * h * w];
            let dst = &mut out[plane * h2 * w2..(plane + 1) * h2 * w2];
            for i in 0..h2 {
                for j in 0..w2 {
                    dst[i * w2 + j] = src[(i / 2) * w + j / 2];
                }
            }
        }
        self.graph
            .op(Tensor::from_vec(&[n, c, h2, w2], out), &[*self], move |g, _| {
                let gd = g.data();
                let mut dx = vec![T::zero(); n * c * h * w];
                for plane in 0..n * c {
                    let src = &gd[plane * h2 * w2..(plane + 1) * h2 * w2];
                    let dst = &mut dx[plane * h * w..(plane + 1) * h * w];
                    for i in 0..h2 {
                        for j in 0..w2 {
                            dst[(i / 2) * w + j / 2] += src[i * w2 + j];
                        }
                    }
                }
                vec![Some(Tensor::from_vec(&[n, c, h, w], dx))]
            })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::Graph;

    /// Direct seven-loop convolution used as a reference.
    fn naive_conv(x: &Tensor<f64>, w: &Tensor<f64>, stride: usize, pad: usize) -> Tensor<f64> {
        let (n, c, h, wd) = (x.dim(0), x.dim(1), x.dim(2), x.dim(3));
        let (o, _, kh, kw) = (w.dim(0), w.dim(1), w.dim(2), w.dim(3));
        let ho = (h + 2 * pad - kh) / stride + 1;
        let wo = (wd + 2 * pad - kw) / stride + 1;
        let mut out = Tensor::zeros(&[n, o, ho, wo]);
        for ni in 0..n {
            for oc in 0..o {
                for i in 0..ho {
                    for j in 0..wo {
                        let mut acc = 0.0;
                        for ci in 0..c {
                            for a in 0..kh {
                                for b in 0..kw {
                                    let ih = (i * stride + a) as isize - pad as isize;
                                    let iw = (j * stride + b) as isize - pad as isize;
                                    if ih >= 0 && iw >= 0 && (ih as usize) < h && (iw as usize) < wd {
                                        acc += x.data()[((ni * c + ci) * h + ih as usize) * wd + iw as usize]
                                            * w.data()[((oc * c + ci) * kh + a) * kw + b];
                                    }
                                }
                            }
                        }
                        out.data_mut()[((ni * o + oc) * ho + i) * wo + j] = acc;
                    }
                }
            }
        }
        out
    }

    #[test]
    fn conv_matches_direct_loops() {
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        for &(stride, pad) in &[(1, 1), (2, 1), (1, 0), (2, 0)] {
            let x = Tensor::<f64>::randn(&[2, 3, 7, 6], &mut rng);
            let w = Tensor::<f64>::randn(&[4, 3, 3, 3], &mut rng);
            let g = Graph::new();
            let y = g.constant(x.clone()).conv2d(&g.constant(w.clone()), None, stride, pad);
            let r = naive_conv(&x, &w, stride, pad);
            assert_eq!(y.shape(), r.shape());
            for (a, b) in y.to_tensor().data().iter().zip(r.data()) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }
}
