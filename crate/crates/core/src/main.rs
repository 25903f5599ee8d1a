use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use acdr::config::RunConfig;
use acdr::data::{generate, load_image_png, load_mask_png, save_mask_png, split, write_dataset, Split, SyntheticSpec};
use acdr::metrics::{per_image_csv, MetricReport};
use acdr::model::UNet;
use acdr::pipeline::{evaluate, infer, load_datasets, save_overlay, sweep, sweep_table, train, SweepAxis};

#[derive(Parser)]
#[command(name = "acdr", version, about = "Active-contour segmentation with a learned displacement field")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model and write checkpoints and logs to --out.
    Train {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        quiet: bool,
    },
    /// Segment one image with a trained checkpoint.
    Infer {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        image: PathBuf,
        /// Ground-truth mask drawn into the overlay.
        #[arg(long)]
        gt: Option<PathBuf>,
        #[command(flatten)]
        run: RunArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score a checkpoint on the test split.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[command(flatten)]
        run: RunArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train and test one model per value of a sensitivity axis.
    Sweep {
        /// vertices, iterations, resolution or losses.
        #[arg(long)]
        axis: String,
        #[command(flatten)]
        run: RunArgs,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        quiet: bool,
    },
    /// Write a synthetic dataset directory.
    GenData {
        #[arg(long, default_value_t = 250)]
        n: usize,
        #[arg(long, default_value_t = 64)]
        size: usize,
        #[arg(long, default_value = "ellipse")]
        family: String,
        #[arg(long, default_value = "flat")]
        texture: String,
        #[arg(long, default_value_t = 0.05)]
        noise: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 0.8)]
        train_frac: f64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Overlay images for the first test samples.
    Viz {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value_t = 8)]
        count: usize,
        #[command(flatten)]
        run: RunArgs,
        #[arg(long)]
        out: PathBuf,
    },
}

/// Run settings: a config file, then individual flags, then `--set`.
#[derive(Args, Clone, Default)]
struct RunArgs {
    /// Flat `key = value` config file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override any config key, e.g. `--set tau=0.5`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    #[arg(long)]
    k: Option<usize>,
    #[arg(long, short = 'T')]
    iterations: Option<usize>,
    #[arg(long)]
    lambda1: Option<f64>,
    #[arg(long)]
    lambda2: Option<f64>,
    #[arg(long)]
    lr: Option<f32>,
    #[arg(long)]
    batch: Option<usize>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    tau: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    /// Dataset directory (images/, masks/, index.csv).
    #[arg(long)]
    data: Option<PathBuf>,
}

impl RunArgs {
    /// Resolves settings; `fallback` is read when no `--config` is given.
    fn resolve(&self, fallback: Option<&Path>) -> Result<RunConfig> {
        let mut cfg = RunConfig::default();
        let file = self.config.as_deref().or(fallback.filter(|p| p.exists()));
        if let Some(path) = file {
            let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
            cfg.apply_text(&text).with_context(|| format!("in {}", path.display()))?;
        }
        let flags: [(&str, Option<String>); 10] = [
            ("k", self.k.map(|v| v.to_string())),
            ("iterations", self.iterations.map(|v| v.to_string())),
            ("lambda1", self.lambda1.map(|v| v.to_string())),
            ("lambda2", self.lambda2.map(|v| v.to_string())),
            ("lr", self.lr.map(|v| v.to_string())),
            ("batch", self.batch.map(|v| v.to_string())),
            ("epochs", self.epochs.map(|v| v.to_string())),
            ("tau", self.tau.map(|v| v.to_string())),
            ("seed", self.seed.map(|v| v.to_string())),
            ("data_dir", self.data.as_ref().map(|p| p.display().to_string())),
        ];
        for (key, value) in flags {
            if let Some(v) = value {
                cfg.set(key, &v)?;
            }
        }
        for kv in &self.set {
            let (k, v) = kv.split_once('=').with_context(|| format!("--set {kv:?}: expected KEY=VALUE"))?;
            cfg.set(k.trim(), v)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

fn config_beside(checkpoint: &Path) -> Option<PathBuf> {
    checkpoint.parent().map(|d| d.join("config.txt"))
}

fn create(out: &Path) -> Result<()> {
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))
}

fn write(path: PathBuf, text: &str) -> Result<()> {
    fs::write(&path, text).with_context(|| format!("writing {}", path.display()))
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train { run, out, quiet } => {
            let cfg = run.resolve(None)?;
            let data = load_datasets(&cfg)?;
            let mut result = train(&cfg, &data, &out, !quiet)?;
            if !data.test.is_empty() {
                let eval = evaluate(&mut result.best, &data.test, &cfg)?;
                write(out.join("test_metrics.csv"), &format!("{}\n{}\n", MetricReport::csv_header(), eval.report.csv_row()))?;
                println!("best epoch {} (val mIoU {:.4}); test set:", result.best_epoch, result.best_val_miou);
                print!("{}", eval.report.table());
            }
        }
        Command::Infer { checkpoint, image, gt, run, out } => {
            let cfg = run.resolve(config_beside(&checkpoint).as_deref())?;
            let mut net = UNet::load(&checkpoint)?;
            let img = load_image_png(&image)?;
            let trace = infer(&mut net, &img, &cfg)?;
            let gt = gt.map(|p| load_mask_png(&p)).transpose()?;
            if let Some(g) = &gt {
                if (g.h, g.w) != (img.shape()[1], img.shape()[2]) {
                    bail!("ground truth {}x{} does not match image {:?}", g.h, g.w, img.shape());
                }
            }
            create(&out)?;
            trace.write_csv(&out.join("trace.csv"))?;
            save_mask_png(&out.join("mask.png"), &trace.masks[0])?;
            save_overlay(&out.join("overlay.png"), &img, &trace, gt.as_ref())?;
            let last = trace.last();
            println!("{} vertices; final polygon:", last.len());
            for v in last.vertices() {
                println!("{:.3},{:.3}", v.x, v.y);
            }
        }
        Command::Eval { checkpoint, run, out } => {
            let cfg = run.resolve(config_beside(&checkpoint).as_deref())?;
            let mut net = UNet::load(&checkpoint)?;
            let data = load_datasets(&cfg)?;
            if data.test.is_empty() {
                bail!("test split is empty");
            }
            let eval = evaluate(&mut net, &data.test, &cfg)?;
            create(&out)?;
            write(out.join("metrics.csv"), &format!("{}\n{}\n", MetricReport::csv_header(), eval.report.csv_row()))?;
            let ids: Vec<String> = data.test.iter().map(|s| s.id.clone()).collect();
            write(out.join("per_image.csv"), &per_image_csv(&ids, &eval.per_image))?;
            print!("{}", eval.report.table());
        }
        Command::Sweep { axis, run, out, quiet } => {
            let axis: SweepAxis = axis.parse()?;
            let cfg = run.resolve(None)?;
            let data = load_datasets(&cfg)?;
            let rows = sweep(&cfg, axis, &data, &out, !quiet)?;
            print!("{}", sweep_table(axis, &rows));
        }
        Command::GenData { n, size, family, texture, noise, seed, train_frac, out } => {
            let spec = SyntheticSpec {
                n,
                size,
                family: family.parse()?,
                noise_sigma: noise,
                texture: texture.parse()?,
                seed,
            };
            let samples = generate(&spec)?;
            let (_, test) = split(samples.len(), train_frac, seed)?;
            let mut splits = vec![Split::Train; samples.len()];
            for i in test {
                splits[i] = Split::Test;
            }
            write_dataset(&out, &samples, &splits)?;
            println!("wrote {n} samples to {}", out.display());
        }
        Command::Viz { checkpoint, count, run, out } => {
            let cfg = run.resolve(config_beside(&checkpoint).as_deref())?;
            let mut net = UNet::load(&checkpoint)?;
            let data = load_datasets(&cfg)?;
            create(&out)?;
            for s in data.test.iter().take(count) {
                let trace = infer(&mut net, &s.image, &cfg)?;
                save_overlay(&out.join(format!("{}_overlay.png", s.id)), &s.image, &trace, Some(&s.mask))?;
                trace.write_csv(&out.join(format!("{}_trace.csv", s.id)))?;
            }
            println!("wrote {} overlays to {}", count.min(data.test.len()), out.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
