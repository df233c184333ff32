use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use tilewise_core::harness::{write_json, Experiment, ExperimentConfig};
use tilewise_core::metrics::{uniform_baseline, uniform_baseline_mc};
use tilewise_core::nets::TileClassifier;
use tilewise_core::tensor::Tensor;
use tilewise_core::xai::{explain_tile_with, mask_pixels, write_gray_png, write_pgm, Aggregator};
use tilewise_core::{Error, Result};

/// Contextual activation×gradient explanations for MIL tile classifiers on synthetic slides.
#[derive(Debug, Parser)]
#[command(name = "tilewise-xai", version)]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct Common {
    /// Experiment config (TOML); defaults apply to missing keys.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Master seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true, env = "TILEWISE_XAI_OUT", default_value = "tilewise-out")]
    out: PathBuf,
    /// Worker threads (0 = all cores, 1 = fully serial).
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Thresholds t (repeatable or comma-separated).
    #[arg(long = "t", global = true, value_delimiter = ',')]
    thresholds: Vec<f64>,
    /// Channel aggregators (repeatable or comma-separated).
    #[arg(long = "agg", global = true, value_delimiter = ',')]
    aggregators: Vec<Aggregator>,
    /// Conv layers to fuse, e.g. 2,4,6,8.
    #[arg(long, global = true, value_delimiter = ',')]
    layers: Vec<usize>,
    /// Shifted grids for the stability study (01, 10, 11).
    #[arg(long = "shift", global = true, value_delimiter = ',')]
    shifts: Vec<String>,
    /// Config override `section.key=value` (repeatable).
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Write the synthetic slides of every split to <out>/data.
    GenData,
    /// Train the segmentation model.
    TrainSeg,
    /// Pretrain the backbone and train the MIL classifier.
    TrainMil,
    /// Explain one tile image with a saved classifier.
    Explain {
        /// RGB PNG of tile size L×L.
        #[arg(long)]
        tile: PathBuf,
        /// Classifier checkpoint; defaults to <out>/checkpoints/classifier.json.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Score explanations on the test split (trains missing models).
    Evaluate,
    /// Run the shifted-grid stability study.
    Stability,
    /// Closed-form uniform-noise baseline with a Monte Carlo check.
    Baseline {
        /// Tile side for the Monte Carlo maps.
        #[arg(long, default_value_t = 64)]
        side: usize,
        #[arg(long, default_value_t = 400)]
        trials: usize,
    },
    /// gen-data, train-seg, train-mil, evaluate and stability in one go.
    Run,
}

fn resolve_config(c: &Common) -> Result<ExperimentConfig> {
    let mut cfg = match &c.config {
        Some(path) => ExperimentConfig::load(path)?,
        None => ExperimentConfig::default(),
    };
    for o in &c.overrides {
        cfg.apply_override(o)?;
    }
    if let Some(seed) = c.seed {
        cfg.seed = seed;
    }
    if let Some(threads) = c.threads {
        cfg.threads = threads;
    }
    if !c.thresholds.is_empty() {
        cfg.xai.thresholds = c.thresholds.clone();
    }
    if !c.aggregators.is_empty() {
        cfg.xai.aggregator = c.aggregators[0];
        cfg.evaluation.aggregators = c.aggregators.clone();
    }
    if !c.layers.is_empty() {
        cfg.xai.layers = c.layers.clone();
    }
    if !c.shifts.is_empty() {
        cfg.stability.shifts = c.shifts.clone();
    }
    cfg.validate()?;
    Ok(cfg)
}

fn baseline(thresholds: &[f64], side: usize, trials: usize, seed: u64) -> Result<()> {
    let ts = if thresholds.is_empty() { &[0.5, 0.8, 0.9, 0.95][..] } else { thresholds };
    for &t in ts {
        let b = uniform_baseline(t)?;
        let mc = uniform_baseline_mc(t, side, trials, seed)?;
        println!(
            "t={t} iou={:.6} precision={:.6} mc_iou={:.6}±{:.6} mc_precision={:.6}±{:.6} trials={}",
            b.iou, b.precision, mc.iou.mean, mc.iou.stderr, mc.precision.mean, mc.precision.stderr, mc.trials
        );
    }
    Ok(())
}

fn load_tile(path: &Path) -> Result<Tensor> {
    let img = image::open(path)?.to_rgb8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    Tensor::new(vec![h, w, 3], img.into_raw().into_iter().map(f64::from).collect())
}

fn explain(cfg: &ExperimentConfig, out: &Path, tile_path: &Path, checkpoint: Option<PathBuf>) -> Result<()> {
    let ck = checkpoint.unwrap_or_else(|| out.join("checkpoints").join("classifier.json"));
    let classifier = TileClassifier::load(&ck)?;
    let tile = load_tile(tile_path)?;
    let l = classifier.tile_size();
    if tile.shape() != [l, l, 3] {
        return Err(Error::InvalidArgument(format!(
            "tile {} is {}×{}, the classifier expects {l}×{l}",
            tile_path.display(),
            tile.shape()[1],
            tile.shape()[0]
        )));
    }
    let dir = out.join("explain");
    std::fs::create_dir_all(&dir).map_err(|e| Error::Io {
        path: dir.clone(),
        source: e,
    })?;
    let stem = tile_path.file_stem().and_then(|s| s.to_str()).unwrap_or("tile").to_owned();
    for e in explain_tile_with(&classifier, &tile, &cfg.xai, &cfg.evaluation.aggregators)? {
        let base = format!("{stem}_{}", e.aggregator);
        write_gray_png(&dir.join(format!("{base}.png")), l, l, e.map.to_gray8())?;
        let mut masks = Vec::new();
        for (t, m) in &e.masks {
            let name = format!("{base}_t{:.0}.pgm", t * 100.0);
            write_pgm(&dir.join(&name), l, l, &mask_pixels(m))?;
            masks.push(serde_json::json!({"threshold": t, "mask": name, "popcount": m.popcount()}));
        }
        let record = serde_json::json!({
            "tile": tile_path.display().to_string(),
            "checkpoint": ck.display().to_string(),
            "aggregator": e.aggregator,
            "prediction": e.score,
            "layers": cfg.xai.layers,
            "xai_digest": cfg.xai.digest(),
            "heatmap": format!("{base}.png"),
            "masks": masks,
        });
        write_json(&dir.join(format!("{base}.json")), &record)?;
        println!("{base}: prediction={:.6}", e.score);
    }
    Ok(())
}

fn print_evaluation(s: &tilewise_core::harness::EvaluationSummary) {
    let fmt = |v: Option<f64>| v.map_or("n/a".to_owned(), |v| format!("{v:.4}"));
    println!(
        "test slides={} tiles={} slide_auc={} segnet_dice={}",
        s.test_slides,
        s.test_tiles,
        fmt(s.slide_auc),
        fmt(s.segnet_dice)
    );
    for r in &s.scores {
        println!(
            "{} {} t={} tiles={} I={} P={} IoU={}",
            r.gt_source.name(),
            r.aggregator,
            r.threshold,
            r.tiles,
            fmt(r.intersection_rate),
            fmt(r.mean_precision),
            fmt(r.mean_iou)
        );
    }
}

fn print_stability(s: &tilewise_core::harness::StabilitySummary) {
    println!(
        "stability slides={} candidate_pairs={} excluded_by_floor={}",
        s.slides, s.candidate_pairs, s.excluded_prediction_floor
    );
    for g in &s.groups {
        let mean = g.mean_iou.map_or("n/a".to_owned(), |v| format!("{v:.4}"));
        println!(
            "{} t={} pairs={} mean_iou={mean} uniform={:.4} empty_union={}",
            g.aggregator, g.threshold, g.pairs, g.uniform_iou, g.excluded_empty_union
        );
    }
}

fn dispatch(cli: Cli) -> Result<()> {
    let cfg = resolve_config(&cli.common)?;
    if cfg.threads > 0 {
        // fails only if a pool exists already, which is harmless
        let _ = rayon::ThreadPoolBuilder::new().num_threads(cfg.threads).build_global();
    }
    let out = cli.common.out.clone();
    match cli.command {
        Command::Baseline { side, trials } => return baseline(&cli.common.thresholds, side, trials, cfg.seed),
        Command::Explain { tile, checkpoint } => {
            std::fs::create_dir_all(&out).map_err(|e| Error::Io {
                path: out.clone(),
                source: e,
            })?;
            let resolved = out.join("config.resolved.toml");
            std::fs::write(&resolved, cfg.to_toml_string()?).map_err(|e| Error::Io { path: resolved, source: e })?;
            return explain(&cfg, &out, &tile, checkpoint);
        }
        _ => {}
    }
    let mut exp = Experiment::new(cfg, &out)?;
    match cli.command {
        Command::GenData => println!("wrote {} slides to {}", exp.gen_data()?, out.join("data").display()),
        Command::TrainSeg => {
            exp.train_segnet()?;
            println!("segnet checkpoint: {}", exp.checkpoint_path("segnet").display());
        }
        Command::TrainMil => {
            exp.train_classifier()?;
            println!("classifier checkpoint: {}", exp.checkpoint_path("classifier").display());
        }
        Command::Evaluate => print_evaluation(&exp.evaluate()?),
        Command::Stability => print_stability(&exp.stability()?),
        Command::Run => {
            exp.gen_data()?;
            let report = exp.run()?;
            print_evaluation(&report.evaluation);
            print_stability(&report.stability);
        }
        Command::Baseline { .. } | Command::Explain { .. } => unreachable!("handled above"),
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error[{}]: {e}", e.category());
            if matches!(e, Error::Config(_)) {
                ExitCode::from(2)
            } else {
                ExitCode::FAILURE
            }
        }
    }
}
