use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use crossflow::flow::{self, FlowField};
use crossflow::kernel::{self, KernelParams};
use crossflow::net;
use crossflow::pnm;
use crossflow::synth::{self, SceneConfig};
use crossflow::train::{self, FeatureKind, LossKind, TrainConfig};
use crossflow::viz;
use ndarray::Array2;
use std::path::{Path, PathBuf};

#[derive(Parser)]
#[command(name = "crossflow", version, about = "Pixel embeddings from optical-flow similarity")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum FeaturesArg {
    Embedding,
    Hypercolumn,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic moving-shapes dataset with ground-truth flow.
    Gen {
        #[arg(long)]
        count: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 64)]
        height: usize,
        #[arg(long, default_value_t = 64)]
        width: usize,
        #[arg(long, default_value_t = 2)]
        k_min: usize,
        #[arg(long, default_value_t = 4)]
        k_max: usize,
        #[arg(long, default_value_t = 0.03)]
        noise: f64,
    },
    /// Train the similarity-loss embedding model.
    Train(TrainArgs),
    /// Train the direct flow-classification baseline.
    TrainBaseline(TrainArgs),
    /// Verify analytic gradients against finite differences.
    GradCheck {
        /// Number of independent full-chain instances.
        #[arg(long, default_value_t = 1)]
        seeds: u64,
        #[arg(long, default_value_t = 9)]
        seed: u64,
    },
    /// Embed every pixel of an image and write an RGB projection.
    Embed {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        image: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Render one kernel row over the full pixel grid as a heatmap.
    KernelRow {
        /// Flow file source for the flow kernel.
        #[arg(long, conflicts_with_all = ["checkpoint", "image"])]
        flow: Option<PathBuf>,
        /// Checkpoint source for the embedding kernel (requires --image).
        #[arg(long, requires = "image")]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        image: Option<PathBuf>,
        /// Pixel column of the reference pixel.
        #[arg(long)]
        px: usize,
        /// Pixel row of the reference pixel.
        #[arg(long)]
        py: usize,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0.0036)]
        sigma_sq: f64,
        /// Magnitude bound of the logarithmic flow normalization.
        #[arg(long, default_value_t = flow::DEFAULT_FLOW_BOUND)]
        m: f64,
    },
    /// Report grouping margins of a checkpoint on a manifest of scenes.
    EvalGrouping {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long, default_value_t = 256)]
        pixels: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, value_enum, default_value_t = FeaturesArg::Embedding)]
        features: FeaturesArg,
    },
    /// Convert a plain-text flow listing (x y fx fy per line) to .flo16.
    FlowEnc {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Convert a .flo16 file to a plain-text flow listing.
    FlowDec {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(clap::Args)]
struct TrainArgs {
    #[arg(long)]
    train_manifest: PathBuf,
    #[arg(long)]
    val_manifest: PathBuf,
    /// Output directory for checkpoint.cpm and log.csv.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Learning rate; defaults to 1e-4 (similarity) or 0.01 (baseline).
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long, default_value_t = 1000)]
    steps: usize,
    #[arg(long, default_value_t = 8)]
    batch_size: usize,
    /// Sampled pixels per image.
    #[arg(long, default_value_t = 512)]
    pixels: usize,
    #[arg(long, default_value_t = 100)]
    val_interval: usize,
    #[arg(long, default_value_t = 5)]
    patience: usize,
    /// Enable horizontal-flip augmentation.
    #[arg(long, default_value_t = false)]
    hflip: bool,
}

fn main() {
    if let Err(e) = run() {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}

fn run() -> Result<()> {
    match Cli::parse().command {
        Command::Gen { count, seed, out, height, width, k_min, k_max, noise } => {
            if count == 0 {
                bail!("count must be ≥ 1");
            }
            let cfg = SceneConfig {
                height,
                width,
                k_min,
                k_max,
                noise_amp: noise,
                ..Default::default()
            };
            let manifest = synth::generate_dataset(&cfg, count, seed, &out)?;
            println!("{}", manifest.display());
            Ok(())
        }
        Command::Train(args) => cmd_train(args, LossKind::Similarity),
        Command::TrainBaseline(args) => cmd_train(args, LossKind::Baseline),
        Command::GradCheck { seeds, seed } => cmd_grad_check(seeds, seed),
        Command::Embed { checkpoint, image, out, seed } => cmd_embed(&checkpoint, &image, &out, seed),
        Command::KernelRow { flow, checkpoint, image, px, py, out, sigma_sq, m } => {
            cmd_kernel_row(flow.as_deref(), checkpoint.as_deref(), image.as_deref(), px, py, &out, sigma_sq, m)
        }
        Command::EvalGrouping { checkpoint, manifest, pixels, seed, features } => {
            cmd_eval_grouping(&checkpoint, &manifest, pixels, seed, features)
        }
        Command::FlowEnc { input, out } => cmd_flow_enc(&input, &out),
        Command::FlowDec { input, out } => cmd_flow_dec(&input, &out),
    }
}

fn cmd_train(args: TrainArgs, loss: LossKind) -> Result<()> {
    let mut cfg = match loss {
        LossKind::Similarity => TrainConfig::default(),
        LossKind::Baseline => TrainConfig::baseline(),
    };
    if let Some(lr) = args.lr {
        cfg.lr = lr;
    }
    cfg.batch_size = args.batch_size;
    cfg.pixels_per_image = args.pixels;
    cfg.max_steps = args.steps;
    cfg.val_interval = args.val_interval;
    cfg.patience = args.patience;
    cfg.seed = args.seed;
    cfg.hflip = args.hflip;

    let outcome = train::train(&cfg, &args.train_manifest, &args.val_manifest)?;
    std::fs::create_dir_all(&args.out)
        .with_context(|| format!("creating {}", args.out.display()))?;
    net::write_checkpoint(&outcome.best_params, &args.out.join("checkpoint.cpm"))?;
    std::fs::write(args.out.join("log.csv"), outcome.log.to_csv())?;
    println!(
        "steps {} best_val_loss {:.6}",
        outcome.steps_run, outcome.best_val_loss
    );
    Ok(())
}

fn cmd_grad_check(full_chain_instances: u64, base_seed: u64) -> Result<()> {
    let loss_report = crossflow::gradcheck::check_loss_gradients()?;
    println!(
        "loss-level max rel err {:.3e} (tol {:.0e}): {}",
        loss_report.max_rel_err,
        loss_report.tol,
        if loss_report.passed { "PASS" } else { "FAIL" }
    );
    let mut all_passed = loss_report.passed;
    let mut failing: Vec<String> = loss_report
        .cases
        .iter()
        .filter(|c| c.rel_err > loss_report.tol)
        .map(|c| c.label.clone())
        .collect();
    for i in 0..full_chain_instances {
        let report = crossflow::gradcheck::check_full_chain(base_seed.wrapping_add(i), 10, 1.0)?;
        println!(
            "full-chain seed {} max rel err {:.3e} (tol {:.0e}): {}",
            base_seed.wrapping_add(i),
            report.max_rel_err,
            report.tol,
            if report.passed { "PASS" } else { "FAIL" }
        );
        all_passed &= report.passed;
        failing.extend(
            report.cases.iter().filter(|c| c.rel_err > report.tol).map(|c| c.label.clone()),
        );
    }
    if !all_passed {
        bail!("gradient check failed for: {}", failing.join(", "));
    }
    Ok(())
}

fn dense_sample(height: usize, width: usize) -> Vec<(usize, usize)> {
    (0..height).flat_map(|r| (0..width).map(move |c| (r, c))).collect()
}

fn cmd_embed(checkpoint: &Path, image: &Path, out: &Path, seed: u64) -> Result<()> {
    let params = net::read_checkpoint(checkpoint)?;
    let rgb = pnm::read_ppm(image)?;
    let arr = synth::rgb_to_array(&rgb);
    let sample = dense_sample(rgb.height, rgb.width);
    let fwd = net::embed_forward(&arr, &sample, &params)?;
    let img = viz::embeddings_to_rgb(fwd.head.embeddings.view(), rgb.width, rgb.height, seed);
    pnm::write_ppm(&img, out)?;
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn cmd_kernel_row(
    flow_path: Option<&Path>,
    checkpoint: Option<&Path>,
    image: Option<&Path>,
    px: usize,
    py: usize,
    out: &Path,
    sigma_sq: f64,
    m: f64,
) -> Result<()> {
    let (row, width, height) = match (flow_path, checkpoint, image) {
        (Some(flow_path), None, None) => {
            let field = flow::decode_flow(&flow::read_flow_file(flow_path)?);
            if px >= field.width() || py >= field.height() {
                bail!(
                    "pixel ({px}, {py}) out of bounds for {}x{}",
                    field.width(),
                    field.height()
                );
            }
            let normalized = flow::normalize_flow(&field, m)?;
            let n = field.width() * field.height();
            let mut flows = Array2::zeros((n, 2));
            for r in 0..field.height() {
                for c in 0..field.width() {
                    let v = normalized.get(c, r);
                    flows[[r * field.width() + c, 0]] = v[0];
                    flows[[r * field.width() + c, 1]] = v[1];
                }
            }
            let k = kernel::flow_kernel_matrix(flows.view(), KernelParams::from_sigma_sq(sigma_sq))?;
            let p = py * field.width() + px;
            let row: Vec<f64> = (0..n).map(|q| k.matrix[[p, q]]).collect();
            (row, field.width(), field.height())
        }
        (None, Some(checkpoint), Some(image)) => {
            let params = net::read_checkpoint(checkpoint)?;
            let rgb = pnm::read_ppm(image)?;
            if px >= rgb.width || py >= rgb.height {
                bail!("pixel ({px}, {py}) out of bounds for {}x{}", rgb.width, rgb.height);
            }
            let arr = synth::rgb_to_array(&rgb);
            let sample = dense_sample(rgb.height, rgb.width);
            let fwd = net::embed_forward(&arr, &sample, &params)?;
            let k = kernel::embedding_kernel_matrix(fwd.head.embeddings.view())?;
            let p = py * rgb.width + px;
            let n = rgb.width * rgb.height;
            let row: Vec<f64> = (0..n).map(|q| k[[p, q]]).collect();
            (row, rgb.width, rgb.height)
        }
        _ => bail!("provide either --flow, or --checkpoint with --image"),
    };
    pnm::write_pgm(&viz::heatmap_to_pgm(&row, width, height), out)?;
    Ok(())
}

fn cmd_eval_grouping(
    checkpoint: &Path,
    manifest: &Path,
    pixels: usize,
    seed: u64,
    features: FeaturesArg,
) -> Result<()> {
    let params = net::read_checkpoint(checkpoint)?;
    let scenes = train::load_manifest(manifest)?;
    let kind = match features {
        FeaturesArg::Embedding => FeatureKind::Embedding,
        FeaturesArg::Hypercolumn => FeatureKind::Hypercolumn,
    };
    let (mean, per_scene) = train::evaluate_grouping(&params, &scenes, pixels, seed, kind)?;
    println!("scene,margin");
    for (i, m) in per_scene.iter().enumerate() {
        println!("{i},{m:.6}");
    }
    println!("mean,{mean:.6}");
    Ok(())
}

fn cmd_flow_enc(input: &Path, out: &Path) -> Result<()> {
    let text = std::fs::read_to_string(input)
        .with_context(|| format!("reading {}", input.display()))?;
    let mut entries: Vec<(usize, usize, f64, f64)> = Vec::new();
    let mut max_x = 0usize;
    let mut max_y = 0usize;
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let parts: Vec<&str> = line.split_whitespace().collect();
        if parts.len() != 4 {
            bail!("line {}: expected `x y fx fy`", i + 1);
        }
        let x: usize = parts[0].parse().with_context(|| format!("line {}: bad x", i + 1))?;
        let y: usize = parts[1].parse().with_context(|| format!("line {}: bad y", i + 1))?;
        let fx: f64 = parts[2].parse().with_context(|| format!("line {}: bad fx", i + 1))?;
        let fy: f64 = parts[3].parse().with_context(|| format!("line {}: bad fy", i + 1))?;
        max_x = max_x.max(x);
        max_y = max_y.max(y);
        entries.push((x, y, fx, fy));
    }
    if entries.is_empty() {
        bail!("empty input");
    }
    let (width, height) = (max_x + 1, max_y + 1);
    if entries.len() != width * height {
        bail!(
            "grid inferred as {width}x{height} but {} lines were given",
            entries.len()
        );
    }
    let mut data = vec![None; width * height];
    for (x, y, fx, fy) in entries {
        let slot = &mut data[y * width + x];
        if slot.is_some() {
            bail!("duplicate entry for pixel ({x}, {y})");
        }
        *slot = Some([fx, fy]);
    }
    let data: Vec<[f64; 2]> = data
        .into_iter()
        .enumerate()
        .map(|(i, v)| v.ok_or_else(|| anyhow::anyhow!("missing pixel ({}, {})", i % width, i / width)))
        .collect::<Result<_>>()?;
    let field = FlowField::new(width, height, data)?;
    let (encoded, saturated) = flow::encode_flow(&field);
    flow::write_flow_file(&encoded, out)?;
    if saturated > 0 {
        eprintln!("warning: {saturated} components saturated the fixed-point range");
    }
    Ok(())
}

fn cmd_flow_dec(input: &Path, out: &Path) -> Result<()> {
    let field = flow::decode_flow(&flow::read_flow_file(input)?);
    let mut text = String::new();
    for y in 0..field.height() {
        for x in 0..field.width() {
            let [fx, fy] = field.get(x, y);
            text.push_str(&format!("{x} {y} {fx} {fy}\n"));
        }
    }
    std::fs::write(out, text).with_context(|| format!("writing {}", out.display()))?;
    Ok(())
}
