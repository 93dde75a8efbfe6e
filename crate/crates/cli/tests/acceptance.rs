//! Acceptance suite: one PASS/FAIL line per criterion.
//!
//! The end-to-end ablation (2000 training stories, gap ≥ 10 points) is cached under the
//! cargo target tmp dir, so only the first run pays for training, about an hour on one
//! CPU core. `STORYLDM_ACCEPT_FALLBACK=1` uses the 500-story budget (gap ≥ 5 points).
//! Correctness failures exit non-zero; an ablation gap below threshold is reported and
//! only fails the process when `STORYLDM_ACCEPT_STRICT=1`.

use std::path::PathBuf;
use std::sync::Arc;
use std::time::Instant;

use axum::body::Body;
use axum::http::{Request, StatusCode};
use base64::Engine;
use http_body_util::BodyExt;
use nalgebra::DMatrix;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde_json::{json, Value};
use sha2::{Digest, Sha256};
use storyldm_autodiff::fd::{numeric_grads, relative_error};
use storyldm_autodiff::{Ctx, Graph, ParamStore, Tensor};
use storyldm_cli::ablation::{run_ablation, stories, AblationConfig, TEST_FIRST_ID};
use storyldm_core::attention::{scaled_dot_attention, MemoryAttention, MemoryBatch};
use storyldm_core::checkpoint::load_codec;
use storyldm_core::denoiser::{encoding_batch, MemoryInput, UNet, UNetConfig};
use storyldm_core::diffusion::{make_schedule, p_sample_step, q_sample, NoiseSchedule};
use storyldm_core::evalsuite::{classifier_accuracy, compute_fid, story_metrics, Classifier};
use storyldm_core::latentcodec::{CodecConfig, LatentCodec};
use storyldm_core::pipeline::{sample_story, ModelConfig, StoryModel};
use storyldm_core::synthstory::{Background, Character, FrameLabel};
use storyldm_core::textenc::{SentenceEncoding, Vocabulary};
use storyldm_service::{router, AppState};
use tower::ServiceExt;

type Outcome = Result<String, String>;

fn check(cond: bool, msg: String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg)
    }
}

fn work_dir() -> PathBuf {
    let base = option_env!("CARGO_TARGET_TMPDIR").map(PathBuf::from).unwrap_or_else(std::env::temp_dir);
    base.join("storyldm-acceptance")
}

fn flag(name: &str) -> bool {
    std::env::var(name).is_ok_and(|v| v == "1")
}

// brute-force softmax attention, one query row at a time
fn naive(q: &[f64], k: &[f64], v: &[f64], nq: usize, nk: usize, d: usize, dv: usize) -> Vec<f64> {
    let mut out = vec![0.0; nq * dv];
    for i in 0..nq {
        let mut s = vec![0.0; nk];
        for j in 0..nk {
            for c in 0..d {
                s[j] += q[i * d + c] * k[j * d + c];
            }
            s[j] /= (d as f64).sqrt();
        }
        let max = s.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = s.iter().map(|x| (x - max).exp()).collect();
        let z: f64 = e.iter().sum();
        for j in 0..nk {
            for c in 0..dv {
                out[i * dv + c] += e[j] / z * v[j * dv + c];
            }
        }
    }
    out
}

fn p1() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let (mut worst, mut worst_row) = (0.0f64, 0.0f64);
    for _ in 0..100 {
        let (nq, nk, d, dv) = (
            rng.random_range(1..9),
            rng.random_range(1..12),
            rng.random_range(1..17),
            rng.random_range(1..9),
        );
        let q = Tensor::<f64>::randn(&[nq, d], &mut rng).map(|x| 3.0 * x);
        let k = Tensor::randn(&[nk, d], &mut rng);
        let v = Tensor::randn(&[nk, dv], &mut rng);
        let got = scaled_dot_attention(&q, &k, &v).map_err(|e| e.to_string())?;
        let want = naive(q.data(), k.data(), v.data(), nq, nk, d, dv);
        worst = got.data().iter().zip(&want).map(|(a, b)| (a - b).abs()).fold(worst, f64::max);
        // identity values expose the attention weights themselves
        let eye = Tensor::from_vec(&[nk, nk], (0..nk * nk).map(|i| if i / nk == i % nk { 1.0 } else { 0.0 }).collect());
        let w = scaled_dot_attention(&q, &k, &eye).map_err(|e| e.to_string())?;
        for r in 0..nq {
            let s: f64 = w.data()[r * nk..(r + 1) * nk].iter().sum();
            worst_row = worst_row.max((s - 1.0).abs());
        }
    }
    check(worst < 1e-6, format!("oracle max error {worst:.2e}"))?;
    check(worst_row < 1e-6, format!("row sum error {worst_row:.2e}"))?;

    let mut store = ParamStore::<f64>::new();
    let mem = MemoryAttention::new(&mut store, "m", 8, 6, 4, 5, &mut rng);
    let g = Graph::inference();
    let cx = Ctx::new(&g, &store);
    let (n, h, w) = (5, 3, 3);
    let keys = Tensor::randn(&[1, n, 8], &mut rng);
    let feats = Tensor::randn(&[1, n, 4, h, w], &mut rng);
    let cur = cx.constant(Tensor::randn(&[1, 8], &mut rng));
    let run = |keys: Tensor<f64>, feats: Tensor<f64>, mask: Vec<bool>| {
        let batch = MemoryBatch {
            keys: cx.constant(keys),
            feats: cx.constant(feats),
            mask,
        };
        mem.forward(&cx, cur, Some(&batch), (h, w)).map(|v| v.to_tensor())
    };
    let base = run(keys.clone(), feats.clone(), vec![true; n]).map_err(|e| e.to_string())?;
    let mut perm: Vec<usize> = (0..n).collect();
    perm.shuffle(&mut rng);
    let pick = |t: &Tensor<f64>, per: usize| -> Tensor<f64> {
        let mut shape = t.shape().to_vec();
        shape[0] = 1;
        Tensor::from_vec(&shape, perm.iter().flat_map(|&i| t.data()[i * per..(i + 1) * per].to_vec()).collect())
    };
    let permuted = run(pick(&keys, 8), pick(&feats, 4 * h * w), vec![true; n]).map_err(|e| e.to_string())?;
    let perm_err = base.data().iter().zip(permuted.data()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    check(perm_err < 1e-5, format!("permutation error {perm_err:.2e}"))?;

    let none = mem.forward(&cx, cur, None, (h, w)).map_err(|e| e.to_string())?.to_tensor();
    let masked = run(keys, feats, vec![false; n]).map_err(|e| e.to_string())?;
    check(
        none.data().iter().chain(masked.data()).all(|&x| x == 0.0),
        "empty memory output is not exactly zero".into(),
    )?;
    Ok(format!(
        "100 shapes: oracle err {worst:.1e}, row-sum err {worst_row:.1e}; permutation err {perm_err:.1e}; empty memory = 0"
    ))
}

fn p2() -> Outcome {
    let s = NoiseSchedule::default();
    check(s.alpha_bars().windows(2).all(|w| w[1] < w[0]), "alpha_bar not strictly decreasing".into())?;
    let two = make_schedule(2, 0.1, 0.2).map_err(|e| e.to_string())?;
    let (a1, a2) = (two.alpha_bar(1).unwrap(), two.alpha_bar(2).unwrap());
    check(
        (a1 - 0.9).abs() <= 1e-15 && (a2 - 0.72).abs() <= 1e-15,
        format!("T=2 alpha_bar = ({a1}, {a2})"),
    )?;

    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let n = 100_000;
    let z0 = 0.8;
    let moments = |x: &[f64]| {
        let m = x.iter().sum::<f64>() / x.len() as f64;
        (m, x.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (x.len() - 1) as f64)
    };
    let mut detail = Vec::new();
    for t in [1, 50, 120, 200] {
        let ab = s.alpha_bar(t).unwrap();
        let eps = Tensor::<f64>::randn(&[n], &mut rng);
        let zt = q_sample(&Tensor::full(&[n], z0), t, &eps, &s).map_err(|e| e.to_string())?;
        let (m, v) = moments(zt.data());
        let sd = (1.0 - ab).sqrt();
        check(
            (m - ab.sqrt() * z0).abs() <= 4.0 * sd / (n as f64).sqrt(),
            format!("t={t}: mean {m} vs {}", ab.sqrt() * z0),
        )?;
        check((v - (1.0 - ab)).abs() <= 0.02 * (1.0 - ab), format!("t={t}: variance {v} vs {}", 1.0 - ab))?;
        // t successive single-step noisings
        let mut it = vec![z0; n];
        for k in 1..=t {
            let (a, b) = (s.alpha(k).unwrap(), s.beta(k).unwrap());
            for x in &mut it {
                let e: f64 = StandardNormal.sample(&mut rng);
                *x = a.sqrt() * *x + b.sqrt() * e;
            }
        }
        let (mi, vi) = moments(&it);
        check(
            (mi - ab.sqrt() * z0).abs() <= 4.0 * sd / (n as f64).sqrt() && (vi - (1.0 - ab)).abs() <= 0.02 * (1.0 - ab),
            format!("t={t}: iterated noising moments ({mi}, {vi})"),
        )?;
        detail.push(format!("t={t} mean {m:.4} var {v:.4}"));
    }

    let z0 = Tensor::<f64>::randn(&[3, 4, 4], &mut rng);
    let mut z = Tensor::randn(&[3, 4, 4], &mut rng);
    for t in (1..=s.steps).rev() {
        let ab = s.alpha_bar(t).unwrap();
        let eps = z.zip_map(&z0, |zt, x| (zt - ab.sqrt() * x) / (1.0 - ab).sqrt());
        z = p_sample_step(&z, t, &eps, &s, &mut rng).map_err(|e| e.to_string())?;
    }
    let rt = z.data().iter().zip(z0.data()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    check(rt < 1e-5, format!("round trip error {rt:.2e}"))?;
    Ok(format!("T=2 ({a1}, {a2}); N=1e5 {}; round trip err {rt:.1e}", detail.join(", ")))
}

fn p3() -> Outcome {
    let config = UNetConfig {
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
    };
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut store = ParamStore::<f64>::new();
    let net = UNet::new(&mut store, "u", config, &mut rng).map_err(|e| e.to_string())?;
    let names: Vec<String> = store.names().map(str::to_string).collect();
    let count: usize = names.iter().map(|n| store.get(n).unwrap().numel()).sum();
    check(count <= 10_000, format!("{count} parameters"))?;
    for n in &names {
        let t = store.get(n).unwrap();
        let noisy = t.zip_map(&Tensor::randn(t.shape(), &mut rng), |a, b| a + 0.1 * b);
        store.set(n.clone(), noisy);
    }
    let z = Tensor::randn(&[2, 2, 4, 4], &mut rng);
    let target = Tensor::randn(&[2, 2, 4, 4], &mut rng);
    let sent = |rng: &mut ChaCha8Rng, real: usize| SentenceEncoding {
        tokens: Tensor::randn(&[3, 6], rng),
        pooled: Tensor::randn(&[6], rng),
        mask: (0..3).map(|i| i < real).collect(),
    };
    let sents = [sent(&mut rng, 3), sent(&mut rng, 2)];
    let keys = Tensor::randn(&[2, 2, 6], &mut rng);
    let latents = Tensor::randn(&[2, 2, 2, 4, 4], &mut rng);
    let run = |params: &ParamStore<f64>, grads: bool| {
        let g = if grads { Graph::new() } else { Graph::inference() };
        let cx = Ctx::new(&g, params);
        let text = encoding_batch(&cx, &[&sents[0], &sents[1]]);
        let memory = MemoryInput::Latents {
            keys: cx.constant(keys.clone()),
            latents: cx.constant(latents.clone()),
            mask: vec![true, false, true, true],
        };
        let out = net.forward(&cx, cx.constant(z.clone()), &[2, 8], &[1, 2], &text, Some(memory)).unwrap();
        let l = out.mul(&cx.constant(target.clone())).sum_all();
        (l.value().item(), grads.then(|| g.param_grads(&g.backward(l))))
    };
    let analytic = run(&store, true).1.unwrap();
    let numeric = numeric_grads(&store, 1e-5, |p| run(p, false).0);
    let mut worst = (0.0f64, String::new());
    for (name, num) in &numeric {
        let ana = analytic.get(name).ok_or_else(|| format!("no gradient for {name}"))?;
        let err = relative_error(ana, num);
        if err > worst.0 {
            worst = (err, name.clone());
        }
    }
    check(worst.0 < 1e-4, format!("{}: relative error {:.2e}", worst.1, worst.0))?;
    Ok(format!("{count} params in {} groups, max rel err {:.1e} ({})", numeric.len(), worst.0, worst.1))
}

fn codec_path() -> PathBuf {
    let c = AblationConfig::default();
    work_dir().join(format!("codec-{}-{}.ckpt", c.data_seed, c.codec_stories))
}

fn p4() -> Outcome {
    let path = codec_path();
    if !path.exists() {
        return Err(format!("{} missing (the ablation trains it)", path.display()));
    }
    let codec = load_codec(&path).map_err(|e| e.to_string())?;
    let held = stories(0, TEST_FIRST_ID..TEST_FIRST_ID + 50).map_err(|e| e.to_string())?;
    let imgs: Vec<_> = held.iter().flat_map(|s| s.frames.iter()).collect();
    let trained = codec.reconstruction_psnr(&imgs).map_err(|e| e.to_string())?;
    let fresh = LatentCodec::new(CodecConfig::default(), 0).map_err(|e| e.to_string())?;
    let untrained = fresh.reconstruction_psnr(&imgs).map_err(|e| e.to_string())?;
    check(trained >= 25.0, format!("trained PSNR {trained:.2} dB"))?;
    check(untrained < 15.0, format!("untrained PSNR {untrained:.2} dB"))?;
    Ok(format!("held-out PSNR {trained:.2} dB trained, {untrained:.2} dB untrained"))
}

fn label(chars: &[Character], bg: Background) -> FrameLabel {
    FrameLabel {
        characters: chars.to_vec(),
        background: bg,
    }
}

fn p6(final_vs_init: Option<(f64, f64)>) -> Outcome {
    use Background::*;
    use Character::*;
    let path = work_dir().join(format!("classifier-0-{}.ckpt", AblationConfig::default().classifier_stories));
    let clf = Classifier::load(&path).map_err(|e| format!("{}: {e}", path.display()))?;
    let test = stories(0, TEST_FIRST_ID..TEST_FIRST_ID + 200).map_err(|e| e.to_string())?;
    let pairs: Vec<_> = test.iter().flat_map(|s| s.frames.iter().zip(&s.labels)).collect();
    let acc = classifier_accuracy(&clf, &pairs).map_err(|e| e.to_string())?;
    check(
        acc.char_acc >= 0.98 && acc.bg_acc >= 0.98,
        format!("classifier char {:.4} bg {:.4}", acc.char_acc, acc.bg_acc),
    )?;

    let truth = [
        label(&[Tony], Snow),
        label(&[Lisa, Jhon], Grass),
        label(&[Lisa], Sand),
        label(&[Jhon], Snow),
        label(&[Tony, Lisa], Grass),
        label(&[Jhon], Sand),
    ];
    let pred = [
        label(&[Tony], Snow),
        label(&[Lisa], Grass),
        label(&[Lisa], Snow),
        label(&[Tony], Snow),
        label(&[Tony, Lisa], Grass),
        label(&[Jhon, Lisa], Grass),
    ];
    // char: exact 3/6; micro tp 6 fp 2 fn 2. bg: 4/6; per-class F1 snow 4/5, grass 4/5, sand 0
    let m = story_metrics(&pred, &truth).map_err(|e| e.to_string())?;
    let want = (0.5, 0.75, 4.0 / 6.0, 1.6 / 3.0);
    let got = [m.char_acc, m.char_f1, m.bg_acc, m.bg_f1];
    check(
        got.iter().zip([want.0, want.1, want.2, want.3]).all(|(a, b)| (a - b).abs() < 1e-12),
        format!("hand case {:?} vs {want:?}", (m.char_acc, m.char_f1, m.bg_acc, m.bg_f1)),
    )?;

    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let gauss = |rng: &mut ChaCha8Rng, n: usize, mu: &[f64]| -> Vec<Vec<f64>> {
        (0..n)
            .map(|_| mu.iter().map(|m| { let e: f64 = StandardNormal.sample(rng); m + e }).collect::<Vec<f64>>())
            .collect()
    };
    let mu = [0.9, -0.4, 0.3, 1.1, 0.0, -0.7, 0.5, 0.2];
    let norm2: f64 = mu.iter().map(|x| x * x).sum();
    let x = gauss(&mut rng, 10_000, &[0.0; 8]);
    let y = gauss(&mut rng, 10_000, &mu);
    let self_fid = compute_fid(&x, &x).map_err(|e| e.to_string())?;
    let (xy, yx) = (compute_fid(&x, &y).map_err(|e| e.to_string())?, compute_fid(&y, &x).map_err(|e| e.to_string())?);
    check(self_fid.abs() <= 1e-6, format!("FID(X,X) = {self_fid:.2e}"))?;
    check((xy - yx).abs() <= 1e-6, format!("FID asymmetry {:.2e}", (xy - yx).abs()))?;
    check((xy - norm2).abs() <= 0.05 * norm2, format!("shift FID {xy:.4} vs |mu|^2 {norm2:.4}"))?;

    // independent square-root check of the covariance product
    let a = DMatrix::from_fn(6, 6, |_, _| rng.random::<f64>() - 0.5);
    let b = DMatrix::from_fn(6, 6, |_, _| rng.random::<f64>() - 0.5);
    let (sa, sb) = (&a * a.transpose(), &b * b.transpose());
    let root = storyldm_core::evalsuite::product_sqrt(&sa, &sb).map_err(|e| e.to_string())?;
    let prod = &sa * &sb;
    let rel = (&root * &root - &prod).norm() / prod.norm();
    check(rel < 1e-5, format!("sqrt reconstruction {rel:.2e}"))?;

    let Some((init, fin)) = final_vs_init else {
        return Err("no trained checkpoint to compare FID against".into());
    };
    check(fin < init, format!("final FID {fin:.3} not below initial {init:.3}"))?;
    Ok(format!(
        "classifier char {:.4} bg {:.4}; hand case exact; FID(X,X) {self_fid:.1e}, shift {xy:.3} vs {norm2:.3}; FID init {init:.2} -> final {fin:.2}",
        acc.char_acc, acc.bg_acc
    ))
}

fn tiny_model() -> Result<StoryModel, String> {
    let vocab = Vocabulary::build(["Tony walks on the sand.", "He jumps.", "He climbs.", "She walks."]).map_err(|e| e.to_string())?;
    let codec = Arc::new(
        LatentCodec::new(
            CodecConfig {
                widths: [4, 4],
                ..Default::default()
            },
            1,
        )
        .map_err(|e| e.to_string())?,
    );
    let cfg = ModelConfig::tiny(vocab.len(), &codec);
    StoryModel::new(cfg, vocab, codec, 7).map_err(|e| e.to_string())
}

fn hashes(frames: &[storyldm_core::image::Image]) -> Vec<String> {
    frames
        .iter()
        .map(|f| Sha256::digest(f.to_png_bytes().unwrap()).iter().map(|b| format!("{b:02x}")).collect())
        .collect()
}

async fn call(app: &axum::Router, method: &str, uri: &str, body: Option<Value>) -> (StatusCode, Value) {
    let req = Request::builder().method(method).uri(uri).header("content-type", "application/json");
    let req = req.body(body.map_or_else(Body::empty, |b| Body::from(b.to_string()))).unwrap();
    let resp = app.clone().oneshot(req).await.unwrap();
    let status = resp.status();
    let bytes = resp.into_body().collect().await.unwrap().to_bytes();
    (status, serde_json::from_slice(&bytes).unwrap_or(Value::Null))
}

fn p7() -> Outcome {
    let model = tiny_model()?;
    let a = sample_story(&model, &["Tony walks on the sand.", "He jumps.", "He climbs."], 4).map_err(|e| e.to_string())?;
    let b = sample_story(&model, &["Tony walks on the sand.", "He jumps.", "She walks."], 4).map_err(|e| e.to_string())?;
    let again = sample_story(&model, &["Tony walks on the sand.", "He jumps.", "He climbs."], 4).map_err(|e| e.to_string())?;
    let (ha, hb, h2) = (hashes(&a.frames), hashes(&b.frames), hashes(&again.frames));
    check(ha[..2] == hb[..2], "earlier frames changed with a later sentence".into())?;
    check(ha[2] != hb[2], "last frame ignores its sentence".into())?;
    check(ha == h2 && a.latents == again.latents, "same seed produced different stories".into())?;

    let ckpt = model.checkpoint_id();
    let app = router(AppState::new(vec![model], None).map_err(|e| e.to_string())?);
    let rt = tokio::runtime::Runtime::new().map_err(|e| e.to_string())?;
    rt.block_on(async {
        let (_, v) = call(&app, "POST", "/sessions", Some(json!({"checkpoint": ckpt, "seed": 9}))).await;
        let parent = v["id"].as_str().ok_or("no session id")?.to_string();
        for s in ["Tony walks on the sand.", "He jumps."] {
            let (st, _) = call(&app, "POST", &format!("/sessions/{parent}/frames"), Some(json!({ "sentence": s }))).await;
            check(st == StatusCode::OK, format!("extend returned {st}"))?;
        }
        let (_, v) = call(&app, "POST", &format!("/sessions/{parent}/branch"), Some(json!({"at": 2}))).await;
        let child = v["id"].as_str().ok_or("no branch id")?.to_string();
        call(&app, "POST", &format!("/sessions/{parent}/frames"), Some(json!({"sentence": "He climbs."}))).await;
        call(&app, "POST", &format!("/sessions/{child}/frames"), Some(json!({"sentence": "She walks."}))).await;
        let (_, p) = call(&app, "GET", &format!("/sessions/{parent}"), None).await;
        let (_, c) = call(&app, "GET", &format!("/sessions/{child}"), None).await;
        let digest = |f: &Value| -> String {
            let png = base64::engine::general_purpose::STANDARD.decode(f["image"].as_str().unwrap_or("")).unwrap_or_default();
            Sha256::digest(&png).iter().map(|b| format!("{b:02x}")).collect()
        };
        let (pf, cf) = (p["frames"].as_array().ok_or("no frames")?, c["frames"].as_array().ok_or("no frames")?);
        check(pf.len() == 3 && cf.len() == 3, format!("frame counts {} / {}", pf.len(), cf.len()))?;
        check(
            (0..2).all(|k| digest(&pf[k]) == digest(&cf[k]) && digest(&pf[k]) == pf[k]["sha256"]),
            "branch prefix hashes differ".into(),
        )?;
        check(digest(&pf[2]) != digest(&cf[2]), "branch suffixes coincide".into())?;
        Ok::<(), String>(())
    })?;
    Ok("causal prefix, same-seed identity, API branch prefix hashes match".into())
}

fn main() {
    let strict = flag("STORYLDM_ACCEPT_STRICT");
    let fallback = flag("STORYLDM_ACCEPT_FALLBACK");
    let dir = work_dir();
    let mut hard_fail = false;
    let mut report = |id: &str, name: &str, t: Instant, r: &Outcome, hard: bool| {
        let secs = t.elapsed().as_secs_f64();
        match r {
            Ok(msg) => println!("PASS {id} {name}: {msg} [{secs:.1}s]"),
            Err(msg) => {
                println!("FAIL {id} {name}: {msg} [{secs:.1}s]");
                hard_fail |= hard;
            }
        }
    };

    let t = Instant::now();
    report("P1", "attention", t, &p1(), true);
    let t = Instant::now();
    report("P2", "diffusion", t, &p2(), true);
    let t = Instant::now();
    report("P3", "gradients", t, &p3(), true);

    let (cfg, need) = if fallback {
        (AblationConfig::fallback(), 5.0)
    } else {
        (AblationConfig::default(), 10.0)
    };
    let t5 = Instant::now();
    eprintln!("ablation cache: {}", dir.join(cfg.key()).display());
    let ablation = run_ablation(&cfg, &dir, &mut |m| eprintln!("  {m}"));

    let t = Instant::now();
    report("P4", "codec", t, &p4(), true);

    let p5 = match &ablation {
        Ok(r) => {
            let (gc, gb) = r.gaps();
            let (m, b) = (&r.memory.report.referenced, &r.baseline.report.referenced);
            let msg = format!(
                "{} stories, referenced frames: memory char {:.3} bg {:.3}, baseline char {:.3} bg {:.3}; gap {gc:.1}/{gb:.1} points (need {need})",
                cfg.train_stories, m.char_acc, m.bg_acc, b.char_acc, b.bg_acc
            );
            if gc >= need && gb >= need {
                Ok(msg)
            } else {
                Err(msg)
            }
        }
        Err(e) => Err(format!("{e:#}")),
    };
    report("P5", "ablation", t5, &p5, strict);

    let t = Instant::now();
    let fids = ablation.as_ref().ok().map(|r| (r.init_fid, r.memory.subset_fid));
    report("P6", "metrics", t, &p6(fids), true);
    let t = Instant::now();
    report("P7", "autoregression", t, &p7(), true);

    if hard_fail {
        std::process::exit(1);
    }
}
