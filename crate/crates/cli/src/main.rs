//! `cainn`: operator entry point for the coupling-flow anomaly detector.
//!
//! Exit codes: 0 success, 1 contract or numeric errors, 2 I/O and file
//! format errors, 3 verification-suite failure. Subcommands that report
//! results (`train`, `eval`, `score`) print exactly one JSON document to
//! stdout; progress and diagnostics go to stderr.
//!
//! `CAINN_PRECISION` selects the element type for every tensor in the
//! process: `f32` (default) or `f64`. Files carry their dtype, so one
//! pipeline should stick to one setting end to end.

use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Instant;

use cainn_core::eval::{
    anomaly_heatmap, evaluate, generate_from_latent, image_score, perturb_latent,
    sample_standard_normal, upsample_bilinear,
};
use cainn_core::io::{
    export_pgm, read_features, synth_generate, write_features, DatasetManifest, Label,
    SynthConfig,
};
use cainn_core::subnet::Variant;
use cainn_core::train::{load_checkpoint, save_checkpoint, train, Checkpoint, TrainConfig};
use cainn_core::verify::{all_passed, run as run_verify, VerifyLevel};
use cainn_core::{Error, Result, Scalar, Shape};

use clap::{Args, Parser, Subcommand};

#[derive(Parser)]
#[command(
    name = "cainn",
    version,
    about = "Attention-augmented invertible-flow anomaly detection on feature maps"
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a synthetic textured dataset with stamped defects
    GenData(GenDataArgs),
    /// Fit a flow to the normal samples of a manifest
    Train(TrainArgs),
    /// Score a labeled test manifest and report image/pixel AUROC
    Eval(EvalArgs),
    /// Score a single feature file
    Score(ScoreArgs),
    /// Sample or accept a latent, perturb it, and invert it to features
    Generate(GenerateArgs),
    /// Run the built-in invariant checks
    Verify(VerifyArgs),
}

#[derive(Args)]
struct GenDataArgs {
    /// Output directory for images, features, masks, and manifests
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 200)]
    train: usize,
    #[arg(long, default_value_t = 40)]
    test_normal: usize,
    #[arg(long, default_value_t = 40)]
    test_anomalous: usize,
    /// Square image side, a positive multiple of 4
    #[arg(long, default_value_t = 32)]
    image_size: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Smallest defect extent in pixels
    #[arg(long, default_value_t = 6)]
    anomaly_min: usize,
    /// Largest defect extent in pixels
    #[arg(long, default_value_t = 12)]
    anomaly_max: usize,
    /// Mean intensity added inside the defect region
    #[arg(long, default_value_t = 0.75)]
    intensity_shift: f64,
}

#[derive(Args)]
struct TrainArgs {
    /// Training manifest; every record must be labeled normal
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long, default_value = "cac")]
    variant: String,
    /// Number of coupling steps K
    #[arg(long, default_value_t = 2)]
    steps: usize,
    #[arg(long, default_value_t = 5e-4)]
    lr: f64,
    #[arg(long, default_value_t = 750)]
    epochs: usize,
    #[arg(long, default_value_t = 32)]
    batch: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Soft-clamp bound for coupling scales
    #[arg(long, default_value_t = 1.9)]
    clamp: f64,
    /// Disable the soft clamp entirely
    #[arg(long)]
    no_clamp: bool,
    /// Checkpoint path to write
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EvalArgs {
    /// Test manifest with both normal and anomalous records
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    checkpoint: PathBuf,
    /// Write one PGM heatmap per anomalous record into this directory
    #[arg(long)]
    heatmap_dir: Option<PathBuf>,
}

#[derive(Args)]
struct ScoreArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Single-sample feature file to score
    #[arg(long)]
    features: PathBuf,
    /// Optional feature-resolution heatmap to write
    #[arg(long)]
    heatmap: Option<PathBuf>,
}

#[derive(Args)]
struct GenerateArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Latent feature file to invert; omitted = sample a standard normal
    #[arg(long)]
    latent: Option<PathBuf>,
    /// Seed for latent sampling
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Latent edit `c,h,w,magnitude`; repeatable
    #[arg(long, value_name = "C,H,W,MAG")]
    perturb: Vec<String>,
    /// Generated feature file to write
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct VerifyArgs {
    /// fast: invertibility, metric oracle, gate bounds; full: adds
    /// finite-difference derivative checks
    #[arg(long, default_value = "fast")]
    level: String,
}

fn main() {
    std::process::exit(real_main());
}

fn real_main() -> i32 {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                print!("{e}");
                return 0;
            }
            eprint!("{e}");
            return 1;
        }
    };
    let precision = std::env::var("CAINN_PRECISION").unwrap_or_else(|_| "f32".to_string());
    let outcome = match precision.as_str() {
        "f32" => dispatch::<f32>(cli.cmd),
        "f64" => dispatch::<f64>(cli.cmd),
        other => {
            eprintln!("error: CAINN_PRECISION must be f32 or f64, got {other:?}");
            return 1;
        }
    };
    match outcome {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            if e.is_io_class() {
                2
            } else {
                1
            }
        }
    }
}

fn dispatch<T: Scalar>(cmd: Cmd) -> Result<i32> {
    match cmd {
        Cmd::GenData(a) => cmd_gen_data::<T>(a),
        Cmd::Train(a) => cmd_train::<T>(a),
        Cmd::Eval(a) => cmd_eval::<T>(a),
        Cmd::Score(a) => cmd_score::<T>(a),
        Cmd::Generate(a) => cmd_generate::<T>(a),
        Cmd::Verify(a) => cmd_verify(a),
    }
}

fn print_json(value: &serde_json::Value) -> Result<i32> {
    let text = serde_json::to_string_pretty(value)
        .map_err(|e| Error::contract("json", e.to_string()))?;
    println!("{text}");
    Ok(0)
}

fn cmd_gen_data<T: Scalar>(a: GenDataArgs) -> Result<i32> {
    let cfg = SynthConfig {
        n_train: a.train,
        n_test_normal: a.test_normal,
        n_test_anomalous: a.test_anomalous,
        image_size: a.image_size,
        seed: a.seed,
        anomaly_min: a.anomaly_min,
        anomaly_max: a.anomaly_max,
        intensity_shift: a.intensity_shift,
    };
    let paths = synth_generate::<T>(&cfg, &a.out)?;
    eprintln!(
        "wrote {} train, {} normal test, {} anomalous test samples under {}",
        cfg.n_train,
        cfg.n_test_normal,
        cfg.n_test_anomalous,
        a.out.display()
    );
    eprintln!("train manifest: {}", paths.train_manifest.display());
    eprintln!("test manifest:  {}", paths.test_manifest.display());
    Ok(0)
}

fn cmd_train<T: Scalar>(a: TrainArgs) -> Result<i32> {
    let manifest = DatasetManifest::load(&a.manifest)?;
    if let Some(bad) = manifest.records.iter().find(|r| r.label != Label::Normal) {
        return Err(Error::contract(
            "train",
            format!(
                "training manifest must be all normal, {} is labeled {}",
                bad.features.display(),
                bad.label
            ),
        ));
    }
    let samples: Vec<_> = manifest
        .records
        .iter()
        .map(|r| manifest.load_features::<T>(r))
        .collect::<Result<_>>()?;
    let cfg = TrainConfig {
        epochs: a.epochs,
        learning_rate: a.lr,
        batch_size: a.batch,
        steps: a.steps,
        variant: Variant::from_str(&a.variant)?,
        seed: a.seed,
        clamp_alpha: if a.no_clamp { None } else { Some(a.clamp) },
    };
    eprintln!(
        "training {} on {} samples: K={}, lr={}, {} epochs, batch {}",
        cfg.variant, samples.len(), cfg.steps, cfg.learning_rate, cfg.epochs, cfg.batch_size
    );
    let started = Instant::now();
    let out = train(&samples, &cfg)?;
    let wall = started.elapsed().as_secs_f64();
    if out.diverged {
        eprintln!(
            "training diverged after {} completed epochs, checkpoint holds the last finite model",
            out.loss_history.len()
        );
    }
    let ck = Checkpoint { config: cfg, model: out.model, loss_history: out.loss_history.clone() };
    save_checkpoint(&ck, &a.out)?;
    eprintln!("checkpoint written to {}", a.out.display());
    print_json(&serde_json::json!({
        "final_loss": out.loss_history.last().copied(),
        "epochs": out.loss_history.len(),
        "wall_seconds": wall,
    }))
}

fn heatmap_name(features: &Path) -> String {
    let stem = features
        .file_stem()
        .and_then(|s| s.to_str())
        .unwrap_or("record");
    format!("{}.pgm", stem.trim_end_matches("_feat"))
}

fn cmd_eval<T: Scalar>(a: EvalArgs) -> Result<i32> {
    let manifest = DatasetManifest::load(&a.manifest)?;
    let ck = load_checkpoint::<T>(&a.checkpoint)?;
    let result = evaluate(&ck.model, &manifest)?;
    eprintln!(
        "scored {} images: image AUROC {:.4}, pixel AUROC {:.4}",
        result.n_images, result.image_auroc, result.pixel_auroc
    );
    if let Some(dir) = &a.heatmap_dir {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir.clone(), e))?;
        let mut written = 0usize;
        for r in &manifest.records {
            if r.label != Label::Anomalous {
                continue;
            }
            let features = manifest.load_features::<T>(r)?;
            let map = anomaly_heatmap(&ck.model, &features)?;
            let up = upsample_bilinear(&map, r.image_dims.0, r.image_dims.1)?;
            let path = dir.join(heatmap_name(&r.features));
            export_pgm(up.upsampled.as_ref().expect("upsampled"), &path)?;
            written += 1;
        }
        eprintln!("wrote {written} heatmaps to {}", dir.display());
    }
    let value = serde_json::to_value(&result)
        .map_err(|e| Error::contract("json", e.to_string()))?;
    print_json(&value)
}

fn cmd_score<T: Scalar>(a: ScoreArgs) -> Result<i32> {
    let ck = load_checkpoint::<T>(&a.checkpoint)?;
    let features = read_features::<T>(&a.features)?;
    let map = anomaly_heatmap(&ck.model, &features)?;
    let score = image_score(&map)?;
    if let Some(path) = &a.heatmap {
        export_pgm(&map.scores, path)?;
        eprintln!("heatmap written to {}", path.display());
    }
    let dims = features.shape();
    print_json(&serde_json::json!({
        "features": a.features.display().to_string(),
        "image_score": score,
        "dims": { "c": dims.c, "h": dims.h, "w": dims.w },
    }))
}

fn parse_perturb(raw: &str) -> Result<(usize, usize, usize, f64)> {
    let parts: Vec<&str> = raw.split(',').collect();
    let bad = || Error::contract("generate", format!("--perturb expects c,h,w,mag, got {raw:?}"));
    if parts.len() != 4 {
        return Err(bad());
    }
    let c = parts[0].trim().parse().map_err(|_| bad())?;
    let h = parts[1].trim().parse().map_err(|_| bad())?;
    let w = parts[2].trim().parse().map_err(|_| bad())?;
    let mag = parts[3].trim().parse().map_err(|_| bad())?;
    Ok((c, h, w, mag))
}

fn cmd_generate<T: Scalar>(a: GenerateArgs) -> Result<i32> {
    let ck = load_checkpoint::<T>(&a.checkpoint)?;
    let (c, h, w) = ck.model.input_dims;
    let mut z = match &a.latent {
        Some(path) => {
            let t = read_features::<T>(path)?;
            let s = t.shape();
            if (s.n, s.c, s.h, s.w) != (1, c, h, w) {
                return Err(Error::shape(
                    "generate",
                    format!("latent is {s}, checkpoint expects (1, {c}, {h}, {w})"),
                ));
            }
            t
        }
        None => sample_standard_normal::<T>(Shape::new(1, c, h, w), a.seed),
    };
    for raw in &a.perturb {
        let (pc, ph, pw, mag) = parse_perturb(raw)?;
        z = perturb_latent(&z, &[(pc, ph, pw)], mag)?;
    }
    let generated = generate_from_latent(&z, &ck.model)?;
    write_features(&generated, &a.out)?;
    eprintln!("generated features written to {}", a.out.display());
    Ok(0)
}

fn cmd_verify(a: VerifyArgs) -> Result<i32> {
    let level = VerifyLevel::from_str(&a.level)?;
    let results = run_verify(level);
    for r in &results {
        let tag = if r.passed { "ok  " } else { "FAIL" };
        eprintln!("{tag} {}: {}", r.name, r.detail);
    }
    let failed = results.iter().filter(|r| !r.passed).count();
    eprintln!("{} checks at level {level}, {failed} failed", results.len());
    if all_passed(&results) {
        Ok(0)
    } else {
        Ok(3)
    }
}
