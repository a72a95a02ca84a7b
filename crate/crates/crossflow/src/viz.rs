//! Visualization helpers: project 16-d embeddings to RGB and render kernel
//! rows as grayscale heatmaps.

use crate::net::EMBED_DIM;
use crate::pnm::{GrayImage, RgbImage};
use ndarray::{Array2, ArrayView2};
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;

/// Seeded random projection from embedding space to three color channels,
/// with unit-norm rows.
pub fn projection_matrix(seed: u64) -> Array2<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut p = Array2::from_shape_fn((3, EMBED_DIM), |_| rng.gen_range(-1.0f64..1.0));
    for mut row in p.rows_mut() {
        let norm = row.dot(&row).sqrt().max(1e-12);
        row.mapv_inplace(|v| v / norm);
    }
    p
}

/// Map per-pixel embeddings (row-major, one row per pixel) to an RGB image.
/// Each channel is min-max scaled independently; a constant channel maps
/// to mid-gray.
pub fn embeddings_to_rgb(
    emb: ArrayView2<f64>,
    width: usize,
    height: usize,
    seed: u64,
) -> RgbImage {
    let proj = projection_matrix(seed);
    let projected = emb.dot(&proj.t()); // n x 3
    let n = projected.nrows();
    let mut pixels = vec![0u8; 3 * n];
    for c in 0..3 {
        let col = projected.column(c);
        let min = col.fold(f64::INFINITY, |a, &b| a.min(b));
        let max = col.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        for i in 0..n {
            pixels[3 * i + c] = if max > min {
                ((col[i] - min) / (max - min) * 255.0).round() as u8
            } else {
                128
            };
        }
    }
    RgbImage { width, height, pixels }
}

/// Render one kernel row (or any vector of similarities) back onto the image
/// grid as a grayscale heatmap, min-max scaled.
pub fn heatmap_to_pgm(values: &[f64], width: usize, height: usize) -> GrayImage {
    let min = values.iter().copied().fold(f64::INFINITY, f64::min);
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let pixels = values
        .iter()
        .map(|&v| {
            if max > min {
                ((v - min) / (max - min) * 255.0).round() as u8
            } else {
                128
            }
        })
        .collect();
    GrayImage { width, height, pixels }
}
