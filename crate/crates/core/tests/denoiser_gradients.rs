use std::cell::RefCell;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use storyldm_autodiff::fd::{numeric_grads, relative_error};
use storyldm_autodiff::{Ctx, Graph, ParamStore, Tensor};
use storyldm_core::attention::{MemoryEntry, MemoryView, VisualMemory};
use storyldm_core::denoiser::{encoding_batch, memory_input, ConditioningBundle, MemoryInput, UNet, UNetConfig};
use storyldm_core::error::Error;
use storyldm_core::textenc::SentenceEncoding;

fn tiny() -> UNetConfig {
    UNetConfig {
        latent_channels: 2,
        latent_size: 4,
        base_channels: 4,
        channel_mults: vec![1, 2],
        time_dim: 8,
        text_dim: 6,
        memory_key_dim: 4,
        adapter_channels: 2,
        groups: 2,
        frame_slots: 4,
        diffusion_steps: 10,
        use_memory: true,
        use_frame_position: true,
    }
}

fn sentence(rng: &mut ChaCha8Rng, real: usize) -> SentenceEncoding<f64> {
    SentenceEncoding {
        tokens: Tensor::randn(&[3, 6], rng),
        pooled: Tensor::randn(&[6], rng),
        mask: (0..3).map(|i| i < real).collect(),
    }
}

#[test]
fn analytic_gradients_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut store = ParamStore::<f64>::new();
    let net = UNet::new(&mut store, "u", tiny(), &mut rng).unwrap();
    let count: usize = store.names().map(|n| store.get(n).unwrap().numel()).sum();
    assert!(count <= 10_000, "{count} parameters");
    // perturb the zero-initialised tensors so every path carries signal
    let names: Vec<String> = store.names().map(str::to_string).collect();
    for n in &names {
        let t = store.get(n).unwrap();
        let noise = Tensor::randn(t.shape(), &mut rng).map(|x| 0.1 * x);
        let mixed = t.zip_map(&noise, |a, b| a + b);
        store.set(n.clone(), mixed);
    }

    let z = Tensor::randn(&[2, 2, 4, 4], &mut rng);
    let target = Tensor::randn(&[2, 2, 4, 4], &mut rng);
    let sents = [sentence(&mut rng, 3), sentence(&mut rng, 2)];
    let keys = Tensor::randn(&[2, 2, 6], &mut rng);
    let latents = Tensor::randn(&[2, 2, 2, 4, 4], &mut rng);
    let mask = vec![true, false, true, true];

    let run = |params: &ParamStore<f64>, grads: bool| {
        let g = if grads { Graph::new() } else { Graph::inference() };
        let cx = Ctx::new(&g, params);
        let text = encoding_batch(&cx, &[&sents[0], &sents[1]]);
        let memory = MemoryInput::Latents {
            keys: cx.constant(keys.clone()),
            latents: cx.constant(latents.clone()),
            mask: mask.clone(),
        };
        let out = net
            .forward(&cx, cx.constant(z.clone()), &[3, 9], &[1, 2], &text, Some(memory))
            .unwrap();
        let l = out.mul(&cx.constant(target.clone())).sum_all();
        let value = l.value().item();
        (value, grads.then(|| g.param_grads(&g.backward(l))))
    };
    let analytic = run(&store, true).1.unwrap();
    let numeric = numeric_grads(&store, 1e-5, |p| run(p, false).0);
    for (name, num) in &numeric {
        let ana = analytic.get(name).unwrap_or_else(|| panic!("no gradient for {name}"));
        let err = relative_error(ana, num);
        assert!(err < 1e-4, "{name}: relative error {err}");
    }
}

struct Tracking {
    inner: VisualMemory<f64>,
    reads: RefCell<Vec<usize>>,
}

impl MemoryView<f64> for Tracking {
    fn len(&self) -> usize {
        self.inner.len()
    }

    fn entry(&self, i: usize) -> &MemoryEntry<f64> {
        self.reads.borrow_mut().push(i);
        self.inner.entry(i)
    }
}

fn memory_of(net: &UNet, store: &ParamStore<f64>, frames: &[usize], rng: &mut ChaCha8Rng) -> VisualMemory<f64> {
    let mut mem = VisualMemory::new(16);
    for &f in frames {
        let latent = Tensor::randn(&[2, 4, 4], rng);
        mem = mem
            .append(MemoryEntry {
                frame_index: f,
                sentence: sentence(rng, 3),
                feats: net.memory_features(store, &latent).unwrap(),
                latent,
            })
            .unwrap();
    }
    mem
}

#[test]
fn prediction_reads_only_earlier_frames() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut store = ParamStore::<f64>::new();
    let net = UNet::new(&mut store, "u", tiny(), &mut rng).unwrap();
    let z = Tensor::randn(&[2, 4, 4], &mut rng);
    let s = sentence(&mut rng, 3);

    let view = Tracking {
        inner: memory_of(&net, &store, &[0, 1], &mut rng),
        reads: RefCell::new(Vec::new()),
    };
    let bundle = ConditioningBundle {
        sentence: &s,
        memory: &view,
        frame: 2,
        t: 5,
    };
    let with = net.predict_noise(&store, &z, &bundle).unwrap();
    let reads = view.reads.borrow().clone();
    assert!(!reads.is_empty());
    assert!(reads.iter().all(|&i| view.inner.entry(i).frame_index < 2));

    let empty = VisualMemory::new(16);
    let without = net
        .predict_noise(&store, &z, &ConditioningBundle { memory: &empty, ..bundle })
        .unwrap();
    assert_ne!(with, without);

    let future = memory_of(&net, &store, &[0, 2], &mut rng);
    let r = net.predict_noise(&store, &z, &ConditioningBundle { memory: &future, ..bundle });
    assert!(matches!(r, Err(Error::OutOfRange { .. })));
}

#[test]
fn batched_stories_do_not_see_each_others_memory() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut store = ParamStore::<f64>::new();
    let net = UNet::new(&mut store, "u", tiny(), &mut rng).unwrap();
    let z = Tensor::randn(&[2, 2, 4, 4], &mut rng);
    let sents = [sentence(&mut rng, 3), sentence(&mut rng, 3)];
    let a = memory_of(&net, &store, &[0], &mut rng);
    let b1 = memory_of(&net, &store, &[0, 1, 2], &mut rng);
    let b2 = memory_of(&net, &store, &[1, 2], &mut rng);

    let run = |other: &VisualMemory<f64>| {
        let g = Graph::inference();
        let cx = Ctx::new(&g, &store);
        let text = encoding_batch(&cx, &[&sents[0], &sents[1]]);
        let mem = memory_input(&cx, &[&a as &dyn MemoryView<f64>, other], 3, 2).unwrap();
        let out = net.forward(&cx, cx.constant(z.clone()), &[4, 4], &[3, 3], &text, mem).unwrap();
        out.to_tensor()
    };
    let (x, y) = (run(&b1), run(&b2));
    let n = 2 * 4 * 4;
    for i in 0..n {
        assert!((x.data()[i] - y.data()[i]).abs() < 1e-12);
    }
    assert!((n..2 * n).any(|i| (x.data()[i] - y.data()[i]).abs() > 1e-9));
}
