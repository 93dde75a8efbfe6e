use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use storyldm_autodiff::{Ctx, Graph, ParamStore, Tensor};
use storyldm_core::attention::{attend, scaled_dot_attention, CrossAttention, MemoryAttention, MemoryBatch};

fn naive(q: &Tensor<f64>, k: &Tensor<f64>, v: &Tensor<f64>) -> Vec<Vec<f64>> {
    let (nq, nk, d, dv) = (q.dim(0), k.dim(0), q.dim(1), v.dim(1));
    (0..nq)
        .map(|i| {
            let scores: Vec<f64> = (0..nk)
                .map(|j| (0..d).map(|c| q.data()[i * d + c] * k.data()[j * d + c]).sum::<f64>() / (d as f64).sqrt())
                .collect();
            let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let w: Vec<f64> = scores.iter().map(|s| (s - max).exp()).collect();
            let z: f64 = w.iter().sum();
            (0..dv)
                .map(|c| (0..nk).map(|j| w[j] / z * v.data()[j * dv + c]).sum())
                .collect()
        })
        .collect()
}

fn rows(t: &Tensor<f64>, order: &[usize]) -> Tensor<f64> {
    let w = t.dim(1);
    Tensor::from_vec(
        &[order.len(), w],
        order.iter().flat_map(|&r| t.data()[r * w..(r + 1) * w].to_vec()).collect(),
    )
}

#[test]
fn matches_naive_softmax_loops() {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    for (nq, nk, d, dv) in [(1, 1, 1, 1), (3, 5, 4, 2), (7, 2, 8, 6), (4, 9, 3, 3)] {
        let q = Tensor::randn(&[nq, d], &mut rng).map(|x| 2.0 * x);
        let k = Tensor::randn(&[nk, d], &mut rng);
        let v = Tensor::randn(&[nk, dv], &mut rng);
        let out = scaled_dot_attention(&q, &k, &v).unwrap();
        for (i, row) in naive(&q, &k, &v).iter().enumerate() {
            for (c, want) in row.iter().enumerate() {
                assert!((out.data()[i * dv + c] - want).abs() < 1e-12);
            }
        }
    }
}

#[test]
fn key_permutation_invariance_and_query_equivariance() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let (q, k, v) = (
        Tensor::<f64>::randn(&[5, 4], &mut rng),
        Tensor::randn(&[6, 4], &mut rng),
        Tensor::randn(&[6, 3], &mut rng),
    );
    let base = scaled_dot_attention(&q, &k, &v).unwrap();
    let mut perm: Vec<usize> = (0..6).collect();
    perm.shuffle(&mut rng);
    let permuted = scaled_dot_attention(&q, &rows(&k, &perm), &rows(&v, &perm)).unwrap();
    for (a, b) in base.data().iter().zip(permuted.data()) {
        assert!((a - b).abs() < 1e-12);
    }
    let mut qp: Vec<usize> = (0..5).collect();
    qp.shuffle(&mut rng);
    let out = scaled_dot_attention(&rows(&q, &qp), &k, &v).unwrap();
    assert!(out
        .data()
        .iter()
        .zip(rows(&base, &qp).data())
        .all(|(a, b)| (a - b).abs() < 1e-12));
}

#[test]
fn outputs_lie_in_the_convex_hull_of_values() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for _ in 0..20 {
        let nk = rng.random_range(1..8);
        let q = Tensor::<f64>::randn(&[4, 3], &mut rng).map(|x| 5.0 * x);
        let k = Tensor::randn(&[nk, 3], &mut rng);
        let v = Tensor::randn(&[nk, 2], &mut rng);
        let out = scaled_dot_attention(&q, &k, &v).unwrap();
        for c in 0..2 {
            let col: Vec<f64> = (0..nk).map(|j| v.data()[j * 2 + c]).collect();
            let (lo, hi) = col.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(l, h), &x| (l.min(x), h.max(x)));
            for i in 0..4 {
                let o = out.data()[i * 2 + c];
                assert!(o >= lo - 1e-12 && o <= hi + 1e-12);
            }
        }
    }
}

#[test]
fn masked_keys_are_ignored() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let (q, k, v) = (
        Tensor::<f64>::randn(&[1, 2, 4], &mut rng),
        Tensor::randn(&[1, 5, 4], &mut rng),
        Tensor::randn(&[1, 5, 3], &mut rng),
    );
    let mask = [true, false, true, false, true];
    let g = Graph::inference();
    let masked = attend(g.constant(q.clone()), g.constant(k.clone()), g.constant(v.clone()), Some(&mask)).to_tensor();
    let keep = [0, 2, 4];
    let squeeze = |t: &Tensor<f64>| t.reshape(&[t.dim(1), t.dim(2)]).unwrap();
    let want = scaled_dot_attention(&squeeze(&q), &rows(&squeeze(&k), &keep), &rows(&squeeze(&v), &keep)).unwrap();
    for (a, b) in masked.data().iter().zip(want.data()) {
        assert!((a - b).abs() < 1e-12);
    }
    let none = attend(g.constant(q), g.constant(k), g.constant(v), Some(&[false; 5])).to_tensor();
    assert!(none.data().iter().all(|&x| x == 0.0));
}

#[test]
fn memory_attention_mixes_projected_maps_with_one_weight_per_entry() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut store = ParamStore::<f64>::new();
    let mem = MemoryAttention::new(&mut store, "m", 6, 4, 3, 5, &mut rng);
    let g = Graph::inference();
    let cx = Ctx::new(&g, &store);
    let feats = Tensor::randn(&[1, 2, 3, 2, 2], &mut rng);
    let batch = MemoryBatch {
        keys: cx.constant(Tensor::randn(&[1, 2, 6], &mut rng)),
        feats: cx.constant(feats.clone()),
        mask: vec![true, true],
    };
    let cur = cx.constant(Tensor::randn(&[1, 6], &mut rng));
    let out = mem.forward(&cx, cur, Some(&batch), (2, 2)).unwrap().to_tensor();
    assert_eq!(out.shape(), &[1, 5, 2, 2]);

    // P_n[c, p] = Σ_k W_v[k, c] F_n[k, p]
    let wv = store.get(mem.v.weight_name()).expect("value projection").clone();
    let proj = |n: usize, c: usize, p: usize| -> f64 {
        (0..3)
            .map(|k| {
                wv.data()[k * 5 + c] * feats.data()[((n * 3) + k) * 4 + p]
            })
            .sum()
    };
    let w0 = (out.data()[0] - proj(1, 0, 0)) / (proj(0, 0, 0) - proj(1, 0, 0));
    assert!((0.0..=1.0).contains(&w0));
    for c in 0..5 {
        for p in 0..4 {
            let want = w0 * proj(0, c, p) + (1.0 - w0) * proj(1, c, p);
            assert!((out.data()[c * 4 + p] - want).abs() < 1e-9);
        }
    }
}

#[test]
fn cross_attention_preserves_shape_and_ignores_padding_tokens() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut store = ParamStore::<f64>::new();
    let ca = CrossAttention::new(&mut store, "c", 4, 6, 2, &mut rng);
    let g = Graph::inference();
    let cx = Ctx::new(&g, &store);
    let x = cx.constant(Tensor::randn(&[1, 4, 3, 3], &mut rng));
    let mut text = Tensor::randn(&[1, 3, 6], &mut rng);
    let mask = [true, true, false];
    let a = ca.forward(&cx, x, cx.constant(text.clone()), &mask).unwrap().to_tensor();
    assert_eq!(a.shape(), &[1, 4, 3, 3]);
    for v in &mut text.data_mut()[12..] {
        *v = 100.0;
    }
    let b = ca.forward(&cx, x, cx.constant(text), &mask).unwrap().to_tensor();
    assert!(a.data().iter().zip(b.data()).all(|(p, q)| (p - q).abs() < 1e-12));
    assert!(ca.forward(&cx, x, cx.constant(Tensor::zeros(&[1, 3, 5])), &mask).is_err());
}
