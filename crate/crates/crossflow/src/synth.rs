//! Synthetic moving-shapes scenes: flat-colored non-occluding rectangles and
//! disks over a background, each region carrying one constant translation as
//! ground-truth flow, plus the grouping-margin metric over object masks.

use crate::flow::{self, FlowError, FlowField};
use crate::pnm::{self, GrayImage, PnmError, RgbImage};
use ndarray::{Array2, Array3, ArrayView2};
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use std::io::Write;
use std::path::{Path, PathBuf};

#[derive(Debug, thiserror::Error)]
pub enum SynthError {
    #[error("invalid scene config: {0}")]
    BadConfig(String),
    #[error("could not place object {0} without occlusion after {1} attempts")]
    PlacementInfeasible(usize, usize),
    #[error("fewer than 2 distinct object ids among sampled pixels")]
    TooFewGroups,
    #[error("no same-group or no cross-group pixel pairs in the sample")]
    DegeneratePairs,
    #[error("flow error: {0}")]
    Flow(#[from] FlowError),
    #[error("image error for {path}: {source}")]
    Image { path: PathBuf, source: PnmError },
    #[error("i/o error for {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ShapeKind {
    Rectangle,
    Disk,
}

#[derive(Debug, Clone)]
pub struct SceneConfig {
    pub height: usize,
    pub width: usize,
    /// Inclusive range of object counts.
    pub k_min: usize,
    pub k_max: usize,
    pub shapes: Vec<ShapeKind>,
    /// Uniform per-pixel texture noise amplitude.
    pub noise_amp: f64,
    /// Object flow magnitude range in pixels.
    pub flow_mag: (f64, f64),
    /// Background flow magnitude range in pixels (0, 0 for a static camera).
    pub bg_flow_mag: (f64, f64),
}

impl Default for SceneConfig {
    fn default() -> Self {
        Self {
            height: 64,
            width: 64,
            k_min: 2,
            k_max: 4,
            shapes: vec![ShapeKind::Rectangle, ShapeKind::Disk],
            noise_amp: 0.03,
            flow_mag: (2.0, 10.0),
            bg_flow_mag: (0.0, 1.0),
        }
    }
}

impl SceneConfig {
    fn validate(&self) -> Result<(), SynthError> {
        if self.height < 16 || self.width < 16 {
            return Err(SynthError::BadConfig("image must be at least 16x16".into()));
        }
        if self.k_min > self.k_max {
            return Err(SynthError::BadConfig("k_min exceeds k_max".into()));
        }
        if self.shapes.is_empty() {
            return Err(SynthError::BadConfig("no shape kinds enabled".into()));
        }
        if !(self.flow_mag.0 <= self.flow_mag.1) || self.flow_mag.1 > 500.0 {
            return Err(SynthError::BadConfig(
                "flow magnitude range invalid or beyond codec bounds".into(),
            ));
        }
        if !(self.bg_flow_mag.0 <= self.bg_flow_mag.1) || self.bg_flow_mag.1 > 500.0 {
            return Err(SynthError::BadConfig("background flow range invalid".into()));
        }
        Ok(())
    }
}

/// One rendered scene with ground truth. Mask id 0 is the background.
#[derive(Debug, Clone)]
pub struct Scene {
    /// (3, H, W) image with values in [0, 1].
    pub image: Array3<f64>,
    pub flow: FlowField,
    /// Per-pixel object id, row-major.
    pub masks: Vec<u8>,
}

struct Placed {
    kind: ShapeKind,
    // bounding box, inclusive
    r0: usize,
    r1: usize,
    c0: usize,
    c1: usize,
}

impl Placed {
    fn covers(&self, r: usize, c: usize) -> bool {
        if r < self.r0 || r > self.r1 || c < self.c0 || c > self.c1 {
            return false;
        }
        match self.kind {
            ShapeKind::Rectangle => true,
            ShapeKind::Disk => {
                let cy = (self.r0 + self.r1) as f64 / 2.0;
                let cx = (self.c0 + self.c1) as f64 / 2.0;
                let ry = (self.r1 - self.r0) as f64 / 2.0;
                let rx = (self.c1 - self.c0) as f64 / 2.0;
                let dy = (r as f64 - cy) / ry.max(0.5);
                let dx = (c as f64 - cx) / rx.max(0.5);
                dy * dy + dx * dx <= 1.0
            }
        }
    }

    fn boxes_overlap(&self, other: &Placed) -> bool {
        self.r0 <= other.r1 && other.r0 <= self.r1 && self.c0 <= other.c1 && other.c0 <= self.c1
    }
}

fn random_translation(rng: &mut ChaCha8Rng, mag_range: (f64, f64)) -> [f64; 2] {
    let mag = if mag_range.1 > mag_range.0 {
        rng.gen_range(mag_range.0..mag_range.1)
    } else {
        mag_range.0
    };
    let angle = rng.gen_range(0.0..std::f64::consts::TAU);
    [mag * angle.cos(), mag * angle.sin()]
}

fn distinct_color(rng: &mut ChaCha8Rng, existing: &[[f64; 3]]) -> [f64; 3] {
    for _ in 0..200 {
        let c = [rng.gen_range(0.0..1.0), rng.gen_range(0.0..1.0), rng.gen_range(0.0..1.0)];
        let ok = existing.iter().all(|e| {
            (0..3).map(|i| (c[i] - e[i]).abs()).fold(0.0f64, f64::max) >= 0.2
        });
        if ok {
            return c;
        }
    }
    // fall back to the last draw; with few objects this is effectively
    // unreachable
    [rng.gen_range(0.0..1.0), rng.gen_range(0.0..1.0), rng.gen_range(0.0..1.0)]
}

/// Deterministically render one scene from a seed.
pub fn generate_scene(cfg: &SceneConfig, seed: u64) -> Result<Scene, SynthError> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (h, w) = (cfg.height, cfg.width);
    let k = rng.gen_range(cfg.k_min..=cfg.k_max);

    let mut placed: Vec<Placed> = Vec::new();
    const MAX_ATTEMPTS: usize = 200;
    for obj in 0..k {
        let mut ok = false;
        for _ in 0..MAX_ATTEMPTS {
            let kind = cfg.shapes[rng.gen_range(0..cfg.shapes.len())];
            let sh = rng.gen_range(h / 8..=h / 3);
            let sw = rng.gen_range(w / 8..=w / 3);
            let r0 = rng.gen_range(0..h - sh);
            let c0 = rng.gen_range(0..w - sw);
            let cand = Placed { kind, r0, r1: r0 + sh, c0, c1: c0 + sw };
            if placed.iter().all(|p| !p.boxes_overlap(&cand)) {
                placed.push(cand);
                ok = true;
                break;
            }
        }
        if !ok {
            return Err(SynthError::PlacementInfeasible(obj, MAX_ATTEMPTS));
        }
    }

    let mut colors = vec![distinct_color(&mut rng, &[])]; // background
    for _ in 0..k {
        let c = distinct_color(&mut rng, &colors);
        colors.push(c);
    }
    let mut flows = vec![random_translation(&mut rng, cfg.bg_flow_mag)];
    for _ in 0..k {
        flows.push(random_translation(&mut rng, cfg.flow_mag));
    }

    let mut masks = vec![0u8; h * w];
    for r in 0..h {
        for c in 0..w {
            for (i, p) in placed.iter().enumerate() {
                if p.covers(r, c) {
                    masks[r * w + c] = (i + 1) as u8;
                    break;
                }
            }
        }
    }

    let mut image = Array3::zeros((3, h, w));
    let mut flow_data = vec![[0.0; 2]; h * w];
    for r in 0..h {
        for c in 0..w {
            let id = masks[r * w + c] as usize;
            for ch in 0..3 {
                let noise = rng.gen_range(-cfg.noise_amp..=cfg.noise_amp);
                image[[ch, r, c]] = (colors[id][ch] + noise).clamp(0.0, 1.0);
            }
            flow_data[r * w + c] = flows[id];
        }
    }
    let flow = FlowField::new(w, h, flow_data)?;
    Ok(Scene { image, flow, masks })
}

/// Quantize a scene image to 8-bit RGB.
pub fn scene_to_rgb(scene: &Scene) -> RgbImage {
    let (_, h, w) = scene.image.dim();
    let mut pixels = Vec::with_capacity(3 * h * w);
    for r in 0..h {
        for c in 0..w {
            for ch in 0..3 {
                pixels.push((scene.image[[ch, r, c]] * 255.0).round().clamp(0.0, 255.0) as u8);
            }
        }
    }
    RgbImage { width: w, height: h, pixels }
}

/// Convert an 8-bit RGB image back to a (3, H, W) array in [0, 1].
pub fn rgb_to_array(img: &RgbImage) -> Array3<f64> {
    let (h, w) = (img.height, img.width);
    Array3::from_shape_fn((3, h, w), |(ch, r, c)| {
        img.pixels[3 * (r * w + c) + ch] as f64 / 255.0
    })
}

/// File names of one dataset entry.
pub fn scene_file_names(index: usize) -> (String, String, String) {
    (
        format!("scene_{index:05}.ppm"),
        format!("scene_{index:05}.flo16"),
        format!("scene_{index:05}.mask.pgm"),
    )
}

/// Generate `count` scenes into `out_dir` and write a tab-separated manifest
/// listing image, flow, and mask paths. Returns the manifest path.
/// Re-running with the same seed reproduces byte-identical files.
pub fn generate_dataset(
    cfg: &SceneConfig,
    count: usize,
    seed: u64,
    out_dir: &Path,
) -> Result<PathBuf, SynthError> {
    std::fs::create_dir_all(out_dir)
        .map_err(|e| SynthError::Io { path: out_dir.to_path_buf(), source: e })?;
    let mut manifest = String::new();
    for i in 0..count {
        let scene = generate_scene(cfg, seed.wrapping_add(i as u64))?;
        let (img_name, flow_name, mask_name) = scene_file_names(i);
        let img_path = out_dir.join(&img_name);
        pnm::write_ppm(&scene_to_rgb(&scene), &img_path)
            .map_err(|e| SynthError::Image { path: img_path.clone(), source: e })?;
        let (encoded, _) = flow::encode_flow(&scene.flow);
        let flow_path = out_dir.join(&flow_name);
        flow::write_flow_file(&encoded, &flow_path)?;
        let mask_path = out_dir.join(&mask_name);
        let mask_img = GrayImage {
            width: scene.flow.width(),
            height: scene.flow.height(),
            pixels: scene.masks.clone(),
        };
        pnm::write_pgm(&mask_img, &mask_path)
            .map_err(|e| SynthError::Image { path: mask_path.clone(), source: e })?;
        manifest.push_str(&format!("{img_name}\t{flow_name}\t{mask_name}\n"));
    }
    let manifest_path = out_dir.join("manifest.txt");
    let mut f = std::fs::File::create(&manifest_path)
        .map_err(|e| SynthError::Io { path: manifest_path.clone(), source: e })?;
    f.write_all(manifest.as_bytes())
        .map_err(|e| SynthError::Io { path: manifest_path.clone(), source: e })?;
    Ok(manifest_path)
}

/// Mean cosine similarity over same-id pixel pairs minus the mean over
/// different-id pairs; embeddings are normalized defensively.
pub fn grouping_margin(emb: ArrayView2<f64>, ids: &[u8]) -> Result<f64, SynthError> {
    assert_eq!(emb.nrows(), ids.len());
    let mut distinct: Vec<u8> = ids.to_vec();
    distinct.sort();
    distinct.dedup();
    if distinct.len() < 2 {
        return Err(SynthError::TooFewGroups);
    }
    let n = emb.nrows();
    let mut unit = Array2::zeros(emb.raw_dim());
    for i in 0..n {
        let norm = emb.row(i).dot(&emb.row(i)).sqrt().max(1e-12);
        for j in 0..emb.ncols() {
            unit[[i, j]] = emb[[i, j]] / norm;
        }
    }
    let mut same_sum = 0.0;
    let mut same_cnt = 0usize;
    let mut diff_sum = 0.0;
    let mut diff_cnt = 0usize;
    for i in 0..n {
        for j in (i + 1)..n {
            let cos = unit.row(i).dot(&unit.row(j));
            if ids[i] == ids[j] {
                same_sum += cos;
                same_cnt += 1;
            } else {
                diff_sum += cos;
                diff_cnt += 1;
            }
        }
    }
    if same_cnt == 0 || diff_cnt == 0 {
        return Err(SynthError::DegeneratePairs);
    }
    Ok(same_sum / same_cnt as f64 - diff_sum / diff_cnt as f64)
}
