use crate::graph::Var;
use crate::ops::elementwise::sigmoid;
use crate::tensor::{Real, Tensor};

impl<'g, T: Real> Var<'g, T> {
    /// Mean squared error against `target` (same shape).
    pub fn mse(&self, target: &Var<'g, T>) -> Var<'g, T> {
        assert_eq!(self.shape(), target.shape(), "mse shape mismatch");
        self.sub(target).sqr().mean_all()
    }

    /// Mean binary cross-entropy of logits against 0/1 targets.
    pub fn bce_with_logits(&self, targets: &Tensor<T>) -> Var<'g, T> {
        let xv = self.value();
        assert_eq!(xv.shape(), targets.shape(), "bce shape mismatch");
        let n = T::from_usize(xv.numel().max(1)).unwrap();
        let loss: T = xv
            .data()
            .iter()
            .zip(targets.data())
            .map(|(&x, &y)| x.max(T::zero()) - x * y + (T::one() + (-x.abs()).exp()).ln())
            .sum::<T>()
            / n;
        let targets = targets.clone();
        self.graph.op(Tensor::scalar(loss), &[*self], move |g, p| {
            let s = g.item() / n;
            let d = p[0]
                .data()
                .iter()
                .zip(targets.data())
                .map(|(&x, &y)| (sigmoid(x) - y) * s)
                .collect();
            vec![Some(Tensor::from_vec(p[0].shape(), d))]
        })
    }

    /// Mean softmax cross-entropy of `[N, K]` logits against class indices.
    pub fn cross_entropy(&self, labels: &[usize]) -> Var<'g, T> {
        let xv = self.value();
        assert_eq!(xv.rank(), 2, "cross_entropy expects [N, K] logits");
        let (n, k) = (xv.dim(0), xv.dim(1));
        assert_eq!(labels.len(), n, "cross_entropy label count");
        let mut probs = vec![T::zero(); n * k];
        let mut loss = T::zero();
        for i in 0..n {
            let row = &xv.data()[i * k..(i + 1) * k];
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let sum: T = row.iter().map(|&v| (v - max).exp()).sum();
            for j in 0..k {
                probs[i * k + j] = (row[j] - max).exp() / sum;
            }
            assert!(labels[i] < k, "label out of range");
            loss += sum.ln() + max - row[labels[i]];
        }
        let nn = T::from_usize(n.max(1)).unwrap();
        let labels = labels.to_vec();
        self.graph
            .op(Tensor::scalar(loss / nn), &[*self], move |g, _| {
                let s = g.item() / nn;
                let mut d = probs.clone();
                for (i, &l) in labels.iter().enumerate() {
                    d[i * k + l] -= T::one();
                }
                d.iter_mut().for_each(|v| *v *= s);
                vec![Some(Tensor::from_vec(&[n, k], d))]
            })
    }
}
