//! End-to-end acceptance gate. Each test covers one numbered criterion and
//! prints a single pass/fail line (visible with `--nocapture` or on failure).

use crossflow::flow::{self, FlowField};
use crossflow::gradcheck;
use crossflow::kernel::{self, KernelParams, EMBED_DIAG_LOGIT, FLOW_DIAG_LOGIT};
use crossflow::net;
use crossflow::synth::{self, SceneConfig};
use crossflow::train::{self, AdamState, LossKind, TrainConfig, TrainScene};
use ndarray::Array2;
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use std::time::Instant;

fn report(criterion: u32, name: &str, passed: bool, detail: &str) {
    println!(
        "criterion {criterion:2} ({name}): {} — {detail}",
        if passed { "PASS" } else { "FAIL" }
    );
}

fn random_instance(rng: &mut ChaCha8Rng, n: usize, d: usize) -> (Array2<f64>, Array2<f64>) {
    let flows = Array2::from_shape_fn((n, 2), |_| rng.gen_range(-1.0..1.0));
    let mut emb: Array2<f64> = Array2::from_shape_fn((n, d), |_| rng.gen_range(-1.0..1.0));
    for mut row in emb.rows_mut() {
        if row.dot(&row).sqrt() < 0.1 {
            row[0] += 0.5;
        }
    }
    (flows, emb)
}

#[test]
fn criterion_01_loss_level_gradients() {
    let start = Instant::now();
    let r = gradcheck::check_loss_gradients().unwrap();
    let elapsed = start.elapsed().as_secs_f64();
    let passed = r.passed && elapsed < 5.0;
    report(
        1,
        "loss-level gradients vs finite differences",
        passed,
        &format!("max rel err {:.3e} (tol {:.0e}), {:.2}s", r.max_rel_err, r.tol, elapsed),
    );
    assert!(passed);
}

#[test]
fn criterion_02_full_chain_gradients() {
    let start = Instant::now();
    let r = gradcheck::check_full_chain(9, 10, 1.0).unwrap();
    let elapsed = start.elapsed().as_secs_f64();
    let passed = r.passed && elapsed < 30.0;
    report(
        2,
        "full-chain gradients vs finite differences",
        passed,
        &format!("max rel err {:.3e} (tol {:.0e}), {:.2}s", r.max_rel_err, r.tol, elapsed),
    );
    assert!(passed);
}

/// Random orthogonal matrix via Gram-Schmidt on a random square matrix.
fn random_orthogonal(rng: &mut ChaCha8Rng, d: usize) -> Array2<f64> {
    loop {
        let a: Array2<f64> = Array2::from_shape_fn((d, d), |_| rng.gen_range(-1.0..1.0));
        let mut q = Array2::<f64>::zeros((d, d));
        let mut ok = true;
        for i in 0..d {
            let mut v = a.row(i).to_owned();
            for j in 0..i {
                let proj = v.dot(&q.row(j));
                v = &v - &(&q.row(j) * proj);
            }
            let norm = v.dot(&v).sqrt();
            if norm < 1e-8 {
                ok = false;
                break;
            }
            q.row_mut(i).assign(&(&v / norm));
        }
        if ok {
            return q;
        }
    }
}

#[test]
fn criterion_03_invariance_suite() {
    const TOL: f64 = 1e-9;
    let mut rng = ChaCha8Rng::seed_from_u64(33);
    let kp = KernelParams::from_sigma_sq(0.25);
    let mut worst = (0.0f64, 0.0f64, 0.0f64);
    for _ in 0..100 {
        let n = rng.gen_range(2..=12);
        let d = if rng.gen_bool(0.5) { 3 } else { 16 };
        let (flows, emb) = random_instance(&mut rng, n, d);
        let base = kernel::cross_pixel_loss(flows.view(), emb.view(), kp).unwrap();

        let q = random_orthogonal(&mut rng, d);
        let rotated = emb.dot(&q.t());
        let l_rot = kernel::cross_pixel_loss(flows.view(), rotated.view(), kp).unwrap();
        worst.0 = worst.0.max((l_rot - base).abs());

        let c = rng.gen_range(0.1..10.0);
        let scaled = &emb * c;
        let l_scale = kernel::cross_pixel_loss(flows.view(), scaled.view(), kp).unwrap();
        worst.1 = worst.1.max((l_scale - base).abs());

        let tx = rng.gen_range(-0.5..0.5);
        let ty = rng.gen_range(-0.5..0.5);
        let mut shifted = flows.clone();
        for mut row in shifted.rows_mut() {
            row[0] += tx;
            row[1] += ty;
        }
        let l_shift = kernel::cross_pixel_loss(shifted.view(), emb.view(), kp).unwrap();
        worst.2 = worst.2.max((l_shift - base).abs());
    }
    let passed = worst.0 <= TOL && worst.1 <= TOL && worst.2 <= TOL;
    report(
        3,
        "loss invariances",
        passed,
        &format!(
            "max |delta|: orthogonal {:.2e}, scale {:.2e}, flow shift {:.2e} (tol {TOL:.0e})",
            worst.0, worst.1, worst.2
        ),
    );
    assert!(passed);
}

#[test]
fn criterion_04_normalization_and_entropy_bound() {
    let mut rng = ChaCha8Rng::seed_from_u64(44);
    let kp = KernelParams::from_sigma_sq(0.25);
    let mut worst_col = 0.0f64;
    let mut worst_bound = f64::INFINITY;
    let mut worst_eq = 0.0f64;
    for _ in 0..100 {
        let n = rng.gen_range(2..=12);
        let (flows, emb) = random_instance(&mut rng, n, 16);
        let kf = kernel::flow_kernel_matrix(flows.view(), kp).unwrap();
        let kphi = kernel::embedding_kernel_matrix(emb.view()).unwrap();
        let sf = kernel::column_softmax(kf.matrix.view(), FLOW_DIAG_LOGIT);
        let sphi = kernel::column_softmax(kphi.view(), EMBED_DIAG_LOGIT);
        for s in [&sf, &sphi] {
            for sum in kernel::column_sums(s.view()) {
                worst_col = worst_col.max((sum - 1.0).abs());
            }
        }
        let loss = kernel::cross_pixel_loss(flows.view(), emb.view(), kp).unwrap();
        let floor = kernel::column_entropy_sum(sf.view());
        worst_bound = worst_bound.min(loss - floor);
        // inject the prediction equal to the target: loss must hit the floor
        let injected = kernel::cross_entropy(sf.view(), sf.view());
        worst_eq = worst_eq.max((injected - floor).abs());
    }
    let passed = worst_col <= 1e-10 && worst_bound >= -1e-12 && worst_eq <= 1e-12;
    report(
        4,
        "column normalization and entropy floor",
        passed,
        &format!(
            "max |col sum - 1| {worst_col:.2e}, min (loss - floor) {worst_bound:.2e}, \
             max injection gap {worst_eq:.2e}"
        ),
    );
    assert!(passed);
}

#[test]
fn criterion_05_fixed_point_codec() {
    const N: usize = 100_000;
    let mut worst = 0.0f64;
    let data: Vec<[f64; 2]> = (0..N)
        .map(|i| {
            let v = -500.0 + 1000.0 * i as f64 / (N - 1) as f64;
            [v, -v]
        })
        .collect();
    let field = FlowField::new(N, 1, data.clone()).unwrap();
    let (encoded, _) = flow::encode_flow(&field);
    let decoded = flow::decode_flow(&encoded);
    for (a, b) in field.data().iter().zip(decoded.data().iter()) {
        worst = worst.max((a[0] - b[0]).abs()).max((a[1] - b[1]).abs());
    }
    // bit-exact container round trip on codes
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("grid.flo16");
    flow::write_flow_file(&encoded, &path).unwrap();
    let reread = flow::read_flow_file(&path).unwrap();
    let bit_exact = reread.codes() == encoded.codes();
    let passed = worst <= 1.0 / 128.0 && bit_exact;
    report(
        5,
        "fixed-point flow codec",
        passed,
        &format!("max round-trip error {worst:.6} (bound {:.6}), file bit-exact: {bit_exact}", 1.0 / 128.0),
    );
    assert!(passed);
}

#[test]
fn criterion_06_kta_sanity() {
    let mut rng = ChaCha8Rng::seed_from_u64(66);
    let k: Array2<f64> = Array2::from_shape_fn((6, 6), |_| rng.gen_range(-1.0..1.0));
    let e_self = (kernel::kta(k.view(), k.view()).unwrap() - 1.0).abs();
    let scaled = &k * 3.0;
    let e_scale = (kernel::kta(k.view(), scaled.view()).unwrap() - 1.0).abs();
    let id: Array2<f64> = Array2::eye(2);
    let perm = ndarray::array![[0.0, 1.0], [1.0, 0.0]];
    let zero = kernel::kta(id.view(), perm.view()).unwrap();
    let passed = e_self <= 1e-12 && e_scale <= 1e-12 && zero == 0.0;
    report(
        6,
        "kernel target alignment sanity",
        passed,
        &format!("|kta(K,K)-1| {e_self:.2e}, |kta(K,3K)-1| {e_scale:.2e}, permuted case {zero}"),
    );
    assert!(passed);
}

#[test]
fn criterion_07_overfit_halves_loss() {
    let start = Instant::now();
    let scene_cfg = SceneConfig::default();
    let s = synth::generate_scene(&scene_cfg, 5).unwrap();
    let scene = TrainScene { image: s.image, flow: s.flow, masks: s.masks };
    let cfg = TrainConfig {
        batch_size: 1,
        pixels_per_image: 512,
        lr: 1e-4,
        seed: 0,
        ..Default::default()
    };
    let mut params = net::init_embed_params(cfg.seed);
    let mut state = AdamState::for_params(&params);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let sample = net::sample_pixels(scene.height(), scene.width(), 512, 123).unwrap();
    let initial = train::similarity_scene_loss(&scene, &sample, &params, &cfg).unwrap();
    for _ in 0..500 {
        train::similarity_step(&[&scene], &mut params, &mut state, &cfg, &mut rng).unwrap();
    }
    let final_loss = train::similarity_scene_loss(&scene, &sample, &params, &cfg).unwrap();
    let elapsed = start.elapsed().as_secs_f64();
    let ratio = final_loss / initial;
    let passed = ratio <= 0.5 && elapsed < 120.0;
    report(
        7,
        "single-scene overfit halves the loss",
        passed,
        &format!(
            "initial {initial:.3}, final {final_loss:.3}, ratio {ratio:.4} (need <= 0.5), {elapsed:.0}s"
        ),
    );
    assert!(passed);
}

fn make_scenes(count: usize, base_seed: u64) -> Vec<TrainScene> {
    let cfg = SceneConfig::default();
    (0..count)
        .map(|i| {
            let s = synth::generate_scene(&cfg, base_seed + i as u64).unwrap();
            TrainScene { image: s.image, flow: s.flow, masks: s.masks }
        })
        .collect()
}

/// Mean grouping margin of i.i.d. random unit embeddings over the held-out
/// scenes' sampled id structure; establishes the chance level.
fn random_embedding_margin(scenes: &[TrainScene], trials: usize) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(777);
    let mut total = 0.0;
    let mut count = 0usize;
    for _ in 0..trials {
        for (i, scene) in scenes.iter().enumerate() {
            let sample = net::sample_pixels(scene.height(), scene.width(), 256, i as u64).unwrap();
            let ids: Vec<u8> = sample
                .iter()
                .map(|&(r, c)| scene.masks[r * scene.width() + c])
                .collect();
            let emb: Array2<f64> =
                Array2::from_shape_fn((sample.len(), 16), |_| rng.gen_range(-1.0..1.0));
            total += synth::grouping_margin(emb.view(), &ids).unwrap();
            count += 1;
        }
    }
    total / count as f64
}

#[test]
fn criterion_08_common_fate_grouping() {
    let start = Instant::now();
    let train_scenes = make_scenes(200, 1);
    let val_scenes = make_scenes(20, 1001);
    let test_scenes = make_scenes(20, 2001);

    let chance = random_embedding_margin(&test_scenes, 50);

    let cfg = TrainConfig {
        batch_size: 8,
        pixels_per_image: 256,
        max_steps: 600,
        val_interval: 100,
        patience: 5,
        seed: 0,
        ..Default::default()
    };
    let outcome = train::train_on_scenes(&cfg, &train_scenes, &val_scenes).unwrap();
    let train_secs = start.elapsed().as_secs_f64();
    let (margin, _) = train::evaluate_grouping(
        &outcome.best_params,
        &test_scenes,
        256,
        0,
        train::FeatureKind::Embedding,
    )
    .unwrap();

    // baseline comparison with the same budget (reported, non-gating)
    let base_cfg = TrainConfig {
        loss: LossKind::Baseline,
        lr: 0.01,
        batch_size: 8,
        pixels_per_image: 256,
        max_steps: 600,
        val_interval: 100,
        patience: 5,
        seed: 0,
        ..Default::default()
    };
    let base_outcome = train::train_on_scenes(&base_cfg, &train_scenes, &val_scenes).unwrap();
    let (base_margin, _) = train::evaluate_grouping(
        &base_outcome.best_params,
        &test_scenes,
        256,
        0,
        train::FeatureKind::Hypercolumn,
    )
    .unwrap();

    let passed = margin >= 0.3 && chance <= 0.1 && train_secs < 900.0;
    report(
        8,
        "common-fate grouping margin",
        passed,
        &format!(
            "similarity margin {margin:.4} (need >= 0.3), chance level {chance:.4} (need <= 0.1), \
             baseline margin {base_margin:.4} [reported], training {train_secs:.0}s"
        ),
    );
    assert!(passed);
}

#[test]
fn criterion_09_baseline_loss_anchor() {
    // zeroed parameters give uniform logits over 16 bins on both axes
    let mut params = net::init_baseline_params(0);
    params.scale(0.0);
    let scene_cfg = SceneConfig::default();
    let s = synth::generate_scene(&scene_cfg, 7).unwrap();
    let scene = TrainScene { image: s.image, flow: s.flow, masks: s.masks };
    let cfg = TrainConfig::baseline();
    let sample = net::sample_pixels(64, 64, 128, 9).unwrap();
    let uniform = train::baseline_scene_loss(&scene, &sample, &params, &cfg).unwrap();
    let anchor = 2.0 * (16.0f64).ln();
    let anchor_ok = (uniform - anchor).abs() <= 1e-9;

    let mut params = net::init_baseline_params(0);
    let mut state = AdamState::for_params(&params);
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let initial = train::baseline_scene_loss(&scene, &sample, &params, &cfg).unwrap();
    for _ in 0..200 {
        train::baseline_step(&[&scene], &mut params, &mut state, &cfg, &mut rng).unwrap();
    }
    let final_loss = train::baseline_scene_loss(&scene, &sample, &params, &cfg).unwrap();
    let decreased = final_loss < initial;
    let passed = anchor_ok && decreased;
    report(
        9,
        "baseline loss anchor and descent",
        passed,
        &format!(
            "uniform loss {uniform:.9} vs 2 ln 16 = {anchor:.9}; 200-step loss {initial:.3} -> {final_loss:.3}"
        ),
    );
    assert!(passed);
}

#[test]
fn criterion_10_reproducibility() {
    let train_scenes = make_scenes(4, 31);
    let val_scenes = make_scenes(2, 131);
    let cfg = TrainConfig {
        batch_size: 2,
        pixels_per_image: 64,
        max_steps: 20,
        val_interval: 5,
        patience: 50,
        seed: 12,
        ..Default::default()
    };
    let dir = tempfile::tempdir().unwrap();
    let mut blobs = Vec::new();
    for run in 0..2 {
        let outcome = train::train_on_scenes(&cfg, &train_scenes, &val_scenes).unwrap();
        let ckpt = dir.path().join(format!("ckpt{run}.cpm"));
        net::write_checkpoint(&outcome.best_params, &ckpt).unwrap();
        blobs.push((std::fs::read(&ckpt).unwrap(), outcome.log.to_csv()));
    }
    let ckpt_equal = blobs[0].0 == blobs[1].0;
    let log_equal = blobs[0].1 == blobs[1].1;
    let passed = ckpt_equal && log_equal;
    report(
        10,
        "identical seeds reproduce bytes",
        passed,
        &format!("checkpoints identical: {ckpt_equal}, logs identical: {log_equal}"),
    );
    assert!(passed);
}
