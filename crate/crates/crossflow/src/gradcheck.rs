//! Finite-difference verification of the analytic gradients, at two levels:
//! the loss boundary alone, and the full chain through the network.

use crate::kernel::{self, KernelParams};
use crate::net::{self, ParamSet};
use crate::synth::{self, SceneConfig};
use crate::train::{TrainConfig, TrainError};
use ndarray::Array2;
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;

/// One compared gradient entry.
#[derive(Debug, Clone)]
pub struct GradCheckCase {
    pub label: String,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_err: f64,
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub cases: Vec<GradCheckCase>,
    pub max_rel_err: f64,
    pub tol: f64,
    pub passed: bool,
}

fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-6)
}

fn finish(cases: Vec<GradCheckCase>, tol: f64) -> GradCheckReport {
    let max_rel_err = cases.iter().map(|c| c.rel_err).fold(0.0, f64::max);
    GradCheckReport { max_rel_err, tol, passed: max_rel_err <= tol, cases }
}

/// Ten random instances covering all combinations of pixel count and
/// embedding dimension, plus repeats with fresh seeds.
pub fn default_loss_instances() -> Vec<(usize, usize, u64)> {
    let mut v = Vec::new();
    let mut seed = 1;
    for &n in &[2usize, 5, 8] {
        for &d in &[3usize, 16] {
            v.push((n, d, seed));
            seed += 1;
        }
    }
    for &(n, d) in &[(2, 16), (5, 3), (8, 16), (8, 3)] {
        v.push((n, d, seed));
        seed += 1;
    }
    v
}

/// Compare every entry of the analytic loss gradient (embeddings and rho)
/// against central differences on the default random instances.
pub fn check_loss_gradients() -> Result<GradCheckReport, TrainError> {
    check_loss_gradients_on(&default_loss_instances())
}

/// Same check on caller-supplied (pixel count, dimension, seed) instances.
pub fn check_loss_gradients_on(
    instances: &[(usize, usize, u64)],
) -> Result<GradCheckReport, TrainError> {
    const STEP: f64 = 1e-5;
    const TOL: f64 = 1e-4;
    let mut cases = Vec::new();
    for &(n, d, seed) in instances {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let flows = Array2::from_shape_fn((n, 2), |_| rng.gen_range(-1.0..1.0));
        let mut emb: Array2<f64> = Array2::from_shape_fn((n, d), |_| rng.gen_range(-1.0..1.0));
        // keep rows safely away from the zero-norm failure mode
        for mut row in emb.rows_mut() {
            let norm = row.dot(&row).sqrt();
            if norm < 0.1 {
                row[0] += 0.5;
            }
        }
        let rho = rng.gen_range(-1.0..0.5);
        let params = KernelParams { rho };
        let lg = kernel::loss_gradients(flows.view(), emb.view(), params)?;

        for i in 0..n {
            for j in 0..d {
                let probe = |delta: f64| {
                    let mut e = emb.clone();
                    e[[i, j]] += delta;
                    kernel::cross_pixel_loss(flows.view(), e.view(), params)
                };
                let numeric = (probe(STEP)? - probe(-STEP)?) / (2.0 * STEP);
                let analytic = lg.d_embeddings[[i, j]];
                cases.push(GradCheckCase {
                    label: format!("n{n} d{d} emb[{i},{j}]"),
                    analytic,
                    numeric,
                    rel_err: rel_err(analytic, numeric),
                });
            }
        }
        let probe_rho = |delta: f64| {
            kernel::cross_pixel_loss(flows.view(), emb.view(), KernelParams { rho: rho + delta })
        };
        let numeric = (probe_rho(STEP)? - probe_rho(-STEP)?) / (2.0 * STEP);
        cases.push(GradCheckCase {
            label: format!("n{n} d{d} rho"),
            analytic: lg.d_rho,
            numeric,
            rel_err: rel_err(lg.d_rho, numeric),
        });
    }
    Ok(finish(cases, TOL))
}

/// Compare analytic parameter gradients of the full pipeline (backbone,
/// hypercolumns, head, loss) against central differences on a random probe
/// of parameter coordinates. `corruption` scales the analytic gradient and
/// exists so a deliberate mismatch can be shown to fail; 1.0 means none.
pub fn check_full_chain(
    seed: u64,
    probe_count: usize,
    corruption: f64,
) -> Result<GradCheckReport, TrainError> {
    const STEP: f64 = 1e-5;
    const TOL: f64 = 1e-3;
    let scene_cfg = SceneConfig { height: 16, width: 16, ..Default::default() };
    let scene = synth::generate_scene(&scene_cfg, seed)?;
    let params = net::init_embed_params(seed.wrapping_add(1));
    let cfg = TrainConfig::default();
    let sample = net::sample_pixels(16, 16, 4, seed.wrapping_add(2))?;

    let loss_at = |p: &ParamSet| -> Result<f64, TrainError> {
        let fwd = net::embed_forward(&scene.image, &sample, p)?;
        let mut flows = Array2::zeros((sample.len(), 2));
        for (i, &(row, col)) in sample.iter().enumerate() {
            let [fx, fy] = scene.flow.get(col, row);
            flows[[i, 0]] = crate::flow::normalize_component(fx, cfg.flow_bound);
            flows[[i, 1]] = crate::flow::normalize_component(fy, cfg.flow_bound);
        }
        let kp = KernelParams { rho: p.scalar("rho") };
        Ok(kernel::cross_pixel_loss(flows.view(), fwd.head.embeddings.view(), kp)?)
    };

    // analytic gradient of the same objective
    let mut grads = params.zeros_like();
    {
        let fwd = net::embed_forward(&scene.image, &sample, &params)?;
        let mut flows = Array2::zeros((sample.len(), 2));
        for (i, &(row, col)) in sample.iter().enumerate() {
            let [fx, fy] = scene.flow.get(col, row);
            flows[[i, 0]] = crate::flow::normalize_component(fx, cfg.flow_bound);
            flows[[i, 1]] = crate::flow::normalize_component(fy, cfg.flow_bound);
        }
        let kp = KernelParams { rho: params.scalar("rho") };
        let lg = kernel::loss_gradients(flows.view(), fwd.head.embeddings.view(), kp)?;
        net::embed_backward(&fwd, &params, &lg.d_embeddings, &mut grads);
        grads.get_mut("rho")[ndarray::IxDyn(&[0])] += lg.d_rho;
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(3));
    let total = params.flat_len();
    let count = probe_count.min(total);
    let mut indices: Vec<usize> =
        rand::seq::index::sample(&mut rng, total, count).into_iter().collect();
    // always include rho (the last coordinate) in the probe
    let rho_index = total - 1;
    if !indices.contains(&rho_index) {
        indices.pop();
        indices.push(rho_index);
    }

    let mut cases = Vec::new();
    for idx in indices {
        let base = params.flat_get(idx);
        let mut plus = params.clone();
        plus.flat_set(idx, base + STEP);
        let mut minus = params.clone();
        minus.flat_set(idx, base - STEP);
        let numeric = (loss_at(&plus)? - loss_at(&minus)?) / (2.0 * STEP);
        let analytic = grads.flat_get(idx) * corruption;
        cases.push(GradCheckCase {
            label: format!("{}[{idx}]", params.flat_name(idx)),
            analytic,
            numeric,
            rel_err: rel_err(analytic, numeric),
        });
    }
    Ok(finish(cases, TOL))
}
