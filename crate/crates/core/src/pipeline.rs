//! Training, evaluation, inference and sensitivity sweeps.
//!
//! Every sample starts from the same centered circle `P⁰` and the same
//! Delaunay faces. A batch runs one network forward, evolves each
//! sample's contour through its own field, averages the per-sample losses
//! and takes one optimizer step.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::RunConfig;
use crate::contour::{evolve, EvolutionTrace, EvolveMode};
use crate::data::{augment, generate, load_dataset, save_image_png, Sample, Split};
use crate::error::{Error, Result};
use crate::geometry::{delaunay, init_circle, FaceList, Polygon};
use crate::metrics::{ImageScores, MetricReport};
use crate::model::UNet;
use crate::renderer::{rasterize_hard, Mask};
use crate::tensor::{save_tensors, Adam, AdamConfig, Graph, Mode, Tensor};

/// Augmentation choices applied when [`RunConfig::augment`] is set.
pub const AUGMENT_SCALES: [f64; 4] = [0.75, 1.0, 1.25, 1.5];
pub const AUGMENT_ROTATIONS: [f64; 10] = [0.0, 15.0, 45.0, 60.0, 90.0, 135.0, 180.0, 210.0, 240.0, 270.0];

#[derive(Clone, Debug, Default)]
pub struct Datasets {
    pub train: Vec<Sample>,
    pub val: Vec<Sample>,
    pub test: Vec<Sample>,
}

/// Synthetic subsets come from independent seed streams. A dataset
/// directory's `test` split doubles as validation and test set.
pub fn load_datasets(cfg: &RunConfig) -> Result<Datasets> {
    if let Some(dir) = &cfg.data_dir {
        let all = load_dataset(dir)?;
        let mut d = Datasets::default();
        for (s, split) in all {
            match split {
                Split::Train => d.train.push(s),
                Split::Test => d.test.push(s),
            }
        }
        d.val = d.test.clone();
        return Ok(d);
    }
    let subset = |n: usize, stream: u64| -> Result<Vec<Sample>> {
        if n == 0 {
            Ok(Vec::new())
        } else {
            generate(&cfg.synthetic(n, stream))
        }
    };
    Ok(Datasets {
        train: subset(cfg.n_train, 0)?,
        val: subset(cfg.n_val, 1)?,
        test: subset(cfg.n_test, 2)?,
    })
}

/// Resamples a `[c, h, w]` image to `size × size`: box-averaged for whole
/// downscaling factors, bilinear (corner aligned) otherwise.
pub fn resample_image(t: &Tensor, size: usize) -> Result<Tensor> {
    let [c, h, w] = *t.shape() else {
        return Err(Error::shape("resample", format!("expected [c, h, w], got {:?}", t.shape())));
    };
    if (h, w) == (size, size) {
        return Ok(t.clone());
    }
    let d = t.data();
    let mut out = vec![0.0f32; c * size * size];
    if h % size == 0 && w % size == 0 && h >= size {
        let (fy, fx) = (h / size, w / size);
        let norm = (fy * fx) as f32;
        for ch in 0..c {
            for y in 0..size {
                for x in 0..size {
                    let mut acc = 0.0;
                    for yy in 0..fy {
                        for xx in 0..fx {
                            acc += d[ch * h * w + (y * fy + yy) * w + x * fx + xx];
                        }
                    }
                    out[ch * size * size + y * size + x] = acc / norm;
                }
            }
        }
    } else {
        let ratio = |src: usize| if size > 1 { (src - 1) as f64 / (size - 1) as f64 } else { 0.0 };
        let (ry, rx) = (ratio(h), ratio(w));
        for ch in 0..c {
            for y in 0..size {
                let sy = y as f64 * ry;
                let y0 = (sy.floor() as usize).min(h - 1);
                let y1 = (y0 + 1).min(h - 1);
                let fy = (sy - y0 as f64) as f32;
                for x in 0..size {
                    let sx = x as f64 * rx;
                    let x0 = (sx.floor() as usize).min(w - 1);
                    let x1 = (x0 + 1).min(w - 1);
                    let fx = (sx - x0 as f64) as f32;
                    let at = |yy: usize, xx: usize| d[ch * h * w + yy * w + xx];
                    out[ch * size * size + y * size + x] = (1.0 - fy) * ((1.0 - fx) * at(y0, x0) + fx * at(y0, x1))
                        + fy * ((1.0 - fx) * at(y1, x0) + fx * at(y1, x1));
                }
            }
        }
    }
    Tensor::new(vec![c, size, size], out)
}

fn resample_mask(m: &Mask, size: usize) -> Result<Mask> {
    let t = resample_image(&Tensor::new(vec![1, m.h, m.w], m.values.clone())?, size)?;
    Ok(Mask {
        h: size,
        w: size,
        values: t.data().iter().map(|&v| if v >= 0.5 { 1.0 } else { 0.0 }).collect(),
    })
}

/// Sample as the network sees it under `cfg.input_size`.
fn network_sample(s: &Sample, cfg: &RunConfig) -> Result<Sample> {
    match cfg.input_size {
        Some(size) if (s.mask.h, s.mask.w) != (size, size) => Ok(Sample {
            image: resample_image(&s.image, size)?,
            mask: resample_mask(&s.mask, size)?,
            id: s.id.clone(),
        }),
        _ => Ok(s.clone()),
    }
}

/// Initial contour and its faces for `h × w` network inputs.
pub fn initial_contour(cfg: &RunConfig, h: usize, w: usize) -> Result<(Polygon, FaceList)> {
    let p0 = init_circle(h, w, cfg.k, cfg.init_diameter * h.min(w) as f64)?;
    let faces = delaunay(p0.vertices())?;
    Ok((p0, faces))
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub seg: f64,
    pub balloon: f64,
    pub curvature: f64,
    pub val: MetricReport,
}

impl EpochRecord {
    pub const CSV_HEADER: &'static str = "epoch,train_loss,seg,balloon,curvature,val_f1,val_miou,val_wcov,val_boundf";

    pub fn csv_row(&self) -> String {
        format!(
            "{},{:.8},{:.8},{:.8},{:.8},{}",
            self.epoch,
            self.train_loss,
            self.seg,
            self.balloon,
            self.curvature,
            self.val.csv_row()
        )
    }
}

pub struct TrainResult {
    pub history: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub best_val_miou: f64,
    pub net: UNet,
    pub best: UNet,
}

/// Trains from scratch and writes into `out`:
/// `config.txt`, `metrics.csv` (per epoch), `losses.csv` (per step),
/// `best.ckpt` (highest validation mIoU) and `final.ckpt` (latest epoch,
/// with optimizer state). A non-finite loss aborts the run and leaves the
/// checkpoints of the last completed epoch in place.
pub fn train(cfg: &RunConfig, data: &Datasets, out: &Path, verbose: bool) -> Result<TrainResult> {
    cfg.validate()?;
    if data.train.is_empty() {
        return Err(Error::invalid("train", "training split is empty"));
    }
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    cfg.save(&out.join("config.txt"))?;
    let write = |name: &str, text: &str| -> Result<()> {
        let p = out.join(name);
        fs::write(&p, text).map_err(|e| Error::io(&p, e))
    };

    let train_set: Vec<Sample> = data.train.iter().map(|s| network_sample(s, cfg)).collect::<Result<_>>()?;
    let (h, w) = train_set[0].size();
    cfg.unet.check_size(h, w)?;
    let (p0, faces) = initial_contour(cfg, h, w)?;
    let weights = cfg.loss_weights(h.max(w));
    let raster = cfg.raster();

    let mut net = UNet::new(cfg.unet, cfg.seed)?;
    let adam_cfg = AdamConfig {
        lr: cfg.lr,
        ..AdamConfig::default()
    };
    let mut adam = Adam::new(adam_cfg, net.params().iter().map(|t| t.shape()))?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed_0f_da7a);
    let mut order: Vec<usize> = (0..train_set.len()).collect();

    let mut metrics_csv = format!("{}\n", EpochRecord::CSV_HEADER);
    let mut losses_csv = String::from("epoch,step,seg,balloon,curvature,total\n");
    let mut history = Vec::new();
    let mut best: Option<(usize, f64, UNet)> = None;
    let mut global_step = 0u64;
    // The epoch log on disk lists exactly the completed epochs, whatever
    // stops the run.
    write("metrics.csv", &metrics_csv)?;
    write("losses.csv", &losses_csv)?;

    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut sums = [0.0f64; 4];
        let mut batches = 0usize;
        for (step, chunk) in order.chunks(cfg.batch).enumerate() {
            let batch: Vec<Sample> = chunk
                .iter()
                .map(|&i| {
                    let s = &train_set[i];
                    if cfg.augment {
                        let scale = *AUGMENT_SCALES.choose(&mut rng).expect("nonempty");
                        let rot = *AUGMENT_ROTATIONS.choose(&mut rng).expect("nonempty");
                        augment(s, scale, rot)
                    } else {
                        Ok(s.clone())
                    }
                })
                .collect::<Result<_>>()?;
            let mut g = Graph::new(cfg.seed.wrapping_mul(0x9e37_79b9).wrapping_add(global_step));
            global_step += 1;
            let images = Tensor::stack(&batch.iter().map(|s| s.image.clone()).collect::<Vec<_>>())?;
            let x = g.constant(images);
            let fwd = net.forward(&mut g, x, Mode::Train)?;
            let n = batch.len();
            let mut total = None;
            let mut terms_sum = [0.0f64; 4];
            for (i, s) in batch.iter().enumerate() {
                let field = g.select(fwd.field, i)?;
                let trace = g.evolve(&p0, &faces, field, cfg.iterations, raster)?;
                let gt = g.constant(s.mask.to_tensor());
                let terms = g.total_loss(&trace.masks, gt, &trace.polygons[1..], weights)?;
                for (acc, v) in terms_sum.iter_mut().zip([terms.seg, terms.balloon, terms.curvature, terms.total]) {
                    *acc += g.value(v).item() as f64 / n as f64;
                }
                total = Some(match total {
                    None => terms.total,
                    Some(t) => g.add(t, terms.total)?,
                });
            }
            let loss = g.scale(total.expect("nonempty batch"), 1.0 / n as f32);
            let value = g.value(loss).item();
            if !value.is_finite() {
                write("metrics.csv", &metrics_csv)?;
                write("losses.csv", &losses_csv)?;
                return Err(Error::non_finite(
                    "train",
                    format!("loss {value} at epoch {epoch}, step {step}; last good checkpoint kept"),
                ));
            }
            g.backward(loss)?;
            let grads: Vec<Option<&Tensor>> = fwd.params.iter().map(|&v| g.grad(v)).collect();
            adam.step(net.params_mut(), &grads)?;
            writeln!(
                losses_csv,
                "{epoch},{step},{:.8},{:.8},{:.8},{:.8}",
                terms_sum[0], terms_sum[1], terms_sum[2], terms_sum[3]
            )
            .expect("string write");
            for (acc, v) in sums.iter_mut().zip(terms_sum) {
                *acc += v;
            }
            batches += 1;
        }
        let mean = |v: f64| v / batches as f64;
        let val_set = if data.val.is_empty() { &data.train } else { &data.val };
        let val = evaluate(&mut net, val_set, cfg)?.report;
        let record = EpochRecord {
            epoch,
            train_loss: mean(sums[3]),
            seg: mean(sums[0]),
            balloon: mean(sums[1]),
            curvature: mean(sums[2]),
            val,
        };
        if verbose {
            eprintln!(
                "epoch {epoch:>3}  loss {:.5}  val mIoU {:.4}  BoundF {:.4}",
                record.train_loss, val.miou, val.boundf
            );
        }
        metrics_csv.push_str(&record.csv_row());
        metrics_csv.push('\n');
        history.push(record);

        let mut state = net.state_tensors();
        state.extend(
            adam.state_tensors(net.param_names())
                .into_iter()
                .map(|(n, t)| (format!("opt.{n}"), t)),
        );
        save_tensors(&out.join("final.ckpt"), &state)?;
        if best.as_ref().is_none_or(|b| val.miou > b.1) {
            net.save(&out.join("best.ckpt"))?;
            best = Some((epoch, val.miou, net.clone()));
        }
        write("metrics.csv", &metrics_csv)?;
        write("losses.csv", &losses_csv)?;

        if let (Some(p), Some((b, _, _))) = (cfg.patience, &best) {
            if epoch >= b + p {
                break;
            }
        }
    }
    let (best_epoch, best_val_miou, best) = match best {
        Some(b) => b,
        None => (0, 0.0, net.clone()),
    };
    Ok(TrainResult {
        history,
        best_epoch,
        best_val_miou,
        net,
        best,
    })
}

/// Per-sample predictions at the original resolution.
pub struct Evaluation {
    pub report: MetricReport,
    pub per_image: Vec<ImageScores>,
    pub masks: Vec<Mask>,
    pub traces: Vec<EvolutionTrace>,
}

/// Eval-mode evolution for every sample. Contours are predicted at the
/// network input size and scaled back to the sample's own size before
/// hard rasterization.
pub fn evaluate(net: &mut UNet, samples: &[Sample], cfg: &RunConfig) -> Result<Evaluation> {
    if samples.is_empty() {
        return Err(Error::invalid("evaluate", "no samples"));
    }
    let mut traces = Vec::with_capacity(samples.len());
    let mut masks = Vec::with_capacity(samples.len());
    for chunk in samples.chunks(cfg.batch.max(1)) {
        let inputs: Vec<Sample> = chunk.iter().map(|s| network_sample(s, cfg)).collect::<Result<_>>()?;
        let fields = predict_fields(net, &inputs)?;
        for ((s, input), field) in chunk.iter().zip(&inputs).zip(fields) {
            let (trace, mask) = contour_from_field(&field, input.size(), s.size(), cfg)?;
            traces.push(trace);
            masks.push(mask);
        }
    }
    let gts: Vec<Mask> = samples.iter().map(|s| s.mask.clone()).collect();
    let (report, per_image) = MetricReport::evaluate(&masks, &gts)?;
    Ok(Evaluation {
        report,
        per_image,
        masks,
        traces,
    })
}

fn predict_fields(net: &mut UNet, inputs: &[Sample]) -> Result<Vec<Tensor>> {
    let mut g = Graph::new(0);
    let x = g.constant(Tensor::stack(&inputs.iter().map(|s| s.image.clone()).collect::<Vec<_>>())?);
    let fwd = net.forward(&mut g, x, Mode::Eval)?;
    let field = g.value(fwd.field);
    Ok((0..inputs.len()).map(|i| field.index_axis0(i)).collect())
}

fn contour_from_field(
    field: &Tensor,
    input_size: (usize, usize),
    target: (usize, usize),
    cfg: &RunConfig,
) -> Result<(EvolutionTrace, Mask)> {
    let (h, w) = input_size;
    let (p0, faces) = initial_contour(cfg, h, w)?;
    let mut trace = evolve(&p0, &faces, field, cfg.iterations, EvolveMode::Eval, cfg.raster())?;
    if target != input_size {
        for p in &mut trace.polygons {
            *p = p.rescaled(input_size, target);
        }
        trace.masks = vec![rasterize_hard(trace.last(), &faces, target.0, target.1)];
    }
    let mask = trace.masks[0].clone();
    Ok((trace, mask))
}

/// Evolution for a single image at its own resolution.
pub fn infer(net: &mut UNet, image: &Tensor, cfg: &RunConfig) -> Result<EvolutionTrace> {
    let [c, h, w] = *image.shape() else {
        return Err(Error::shape("infer", format!("expected [c, h, w], got {:?}", image.shape())));
    };
    if c != net.config.in_channels {
        return Err(Error::shape("infer", format!("{c} channels, model expects {}", net.config.in_channels)));
    }
    let input = match cfg.input_size {
        Some(s) => resample_image(image, s)?,
        None => image.clone(),
    };
    let in_size = (input.shape()[1], input.shape()[2]);
    net.config.check_size(in_size.0, in_size.1)?;
    let field = net.predict(&input)?;
    Ok(contour_from_field(&field, in_size, (h, w), cfg)?.0)
}

const BLUE: [u8; 3] = [40, 90, 255];
const YELLOW: [u8; 3] = [255, 220, 0];
const GREEN: [u8; 3] = [0, 200, 70];

/// Image upscaled by `zoom` with the ground-truth outline in green, the
/// initial contour in blue and the final contour in yellow.
pub fn overlay(image: &Tensor, initial: &Polygon, last: &Polygon, gt: Option<&Mask>, zoom: usize) -> Result<Tensor> {
    let [3, h, w] = *image.shape() else {
        return Err(Error::shape("overlay", format!("expected [3, h, w], got {:?}", image.shape())));
    };
    let (oh, ow) = (h * zoom, w * zoom);
    let src = image.data();
    let mut rgb = vec![0u8; 3 * oh * ow];
    for y in 0..oh {
        for x in 0..ow {
            for c in 0..3 {
                let v = src[c * h * w + (y / zoom) * w + x / zoom];
                rgb[(y * ow + x) * 3 + c] = (v.clamp(0.0, 1.0) * 255.0).round() as u8;
            }
        }
    }
    let mut put = |x: i64, y: i64, color: [u8; 3]| {
        if x >= 0 && y >= 0 && (x as usize) < ow && (y as usize) < oh {
            let i = (y as usize * ow + x as usize) * 3;
            rgb[i..i + 3].copy_from_slice(&color);
        }
    };
    if let Some(m) = gt {
        for (y, x) in crate::metrics::boundary_pixels(m) {
            for dy in 0..zoom {
                for dx in 0..zoom {
                    put((x * zoom + dx) as i64, (y * zoom + dy) as i64, GREEN);
                }
            }
        }
    }
    let z = zoom as f64;
    for (poly, color) in [(initial, BLUE), (last, YELLOW)] {
        let v = poly.vertices();
        for i in 0..v.len() {
            let (a, b) = (v[i], v[(i + 1) % v.len()]);
            let (ax, ay) = ((a.x + 0.5) * z, (a.y + 0.5) * z);
            let (bx, by) = ((b.x + 0.5) * z, (b.y + 0.5) * z);
            let steps = ((bx - ax).abs().max((by - ay).abs()).ceil() as usize).max(1);
            for s in 0..=steps {
                let t = s as f64 / steps as f64;
                put((ax + t * (bx - ax)) as i64, (ay + t * (by - ay)) as i64, color);
            }
        }
    }
    let plane = oh * ow;
    let mut data = vec![0.0f32; 3 * plane];
    for i in 0..plane {
        for c in 0..3 {
            data[c * plane + i] = rgb[i * 3 + c] as f32 / 255.0;
        }
    }
    Tensor::new(vec![3, oh, ow], data)
}

pub fn save_overlay(path: &Path, image: &Tensor, trace: &EvolutionTrace, gt: Option<&Mask>) -> Result<()> {
    let ov = overlay(image, &trace.polygons[0], trace.last(), gt, 4)?;
    save_image_png(path, &ov)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SweepAxis {
    Vertices,
    Iterations,
    Resolution,
    Losses,
}

impl std::str::FromStr for SweepAxis {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "vertices" => Ok(Self::Vertices),
            "iterations" => Ok(Self::Iterations),
            "resolution" => Ok(Self::Resolution),
            "losses" => Ok(Self::Losses),
            _ => Err(Error::invalid("sweep", format!("unknown axis {s:?}"))),
        }
    }
}

impl SweepAxis {
    pub fn name(self) -> &'static str {
        match self {
            Self::Vertices => "vertices",
            Self::Iterations => "iterations",
            Self::Resolution => "resolution",
            Self::Losses => "losses",
        }
    }

    /// Row labels and the configuration of each row.
    pub fn variants(self, base: &RunConfig) -> Vec<(String, RunConfig)> {
        let with = |f: &dyn Fn(&mut RunConfig)| {
            let mut c = base.clone();
            f(&mut c);
            c
        };
        match self {
            Self::Vertices => [4, 8, 16, 32, 64, 128]
                .iter()
                .map(|&k| (k.to_string(), with(&|c| c.k = k)))
                .collect(),
            Self::Iterations => (1..=5)
                .map(|t| (t.to_string(), with(&|c| c.iterations = t)))
                .collect(),
            Self::Resolution => [16, 32, 64, 128]
                .iter()
                .map(|&r| (r.to_string(), with(&|c| c.input_size = (r != c.size).then_some(r))))
                .collect(),
            Self::Losses => [("seg", false, false), ("seg+K", false, true), ("seg+B", true, false), ("full", true, true)]
                .iter()
                .map(|&(label, balloon, curvature)| {
                    let cfg = with(&|c| {
                        if !balloon {
                            c.lambda1 = 0.0;
                        }
                        if !curvature {
                            c.lambda2 = 0.0;
                        }
                    });
                    (label.to_string(), cfg)
                })
                .collect(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SweepRow {
    pub label: String,
    pub report: MetricReport,
    pub epochs_run: usize,
}

pub fn sweep_csv(axis: SweepAxis, rows: &[SweepRow]) -> String {
    let mut s = format!("{},{},epochs\n", axis.name(), MetricReport::csv_header());
    for r in rows {
        writeln!(s, "{},{},{}", r.label, r.report.csv_row(), r.epochs_run).expect("string write");
    }
    s
}

pub fn sweep_table(axis: SweepAxis, rows: &[SweepRow]) -> String {
    let mut s = format!("{:<12}{:>8}{:>8}{:>8}{:>8}{:>8}\n", axis.name(), "F1", "mIoU", "WCov", "BoundF", "epochs");
    for r in rows {
        writeln!(
            s,
            "{:<12}{:>8.4}{:>8.4}{:>8.4}{:>8.4}{:>8}",
            r.label, r.report.f1, r.report.miou, r.report.wcov, r.report.boundf, r.epochs_run
        )
        .expect("string write");
    }
    s
}

/// Result of [`tested_run`].
#[derive(Clone, Debug)]
pub struct TestedRun {
    pub dir: PathBuf,
    pub report: MetricReport,
    pub epochs_run: usize,
    /// Wall-clock time of training and testing.
    pub seconds: f64,
}

const RUN_HEADER: &str = "f1,miou,wcov,boundf,epochs,seconds";

/// FNV-1a of the config snapshot; names a run directory.
fn config_key(cfg: &RunConfig) -> String {
    let hash = cfg
        .to_text()
        .bytes()
        .fold(0xcbf2_9ce4_8422_2325u64, |h, b| (h ^ b as u64).wrapping_mul(0x0100_0000_01b3));
    format!("{hash:016x}")
}

fn cached_run(dir: &Path, cfg: &RunConfig) -> Option<TestedRun> {
    if fs::read_to_string(dir.join("config.txt")).ok()? != cfg.to_text() {
        return None;
    }
    let text = fs::read_to_string(dir.join("run.csv")).ok()?;
    let mut lines = text.lines();
    if lines.next()? != RUN_HEADER {
        return None;
    }
    let fields: Vec<&str> = lines.next()?.split(',').collect();
    let [f1, miou, wcov, boundf, epochs, seconds] = fields[..] else {
        return None;
    };
    Some(TestedRun {
        dir: dir.to_path_buf(),
        report: MetricReport::from_csv_row(&[f1, miou, wcov, boundf].join(",")).ok()?,
        epochs_run: epochs.parse().ok()?,
        seconds: seconds.parse().ok()?,
    })
}

/// Trains `cfg` and scores its best checkpoint on the test split (the
/// validation split when there is none), under `runs/<config hash>/`
/// with the scores in `run.csv`. A
/// directory already holding a finished run of the same config is reused,
/// so the dataset must be a function of the config.
pub fn tested_run(cfg: &RunConfig, data: &Datasets, runs: &Path, verbose: bool) -> Result<TestedRun> {
    let dir = runs.join(config_key(cfg));
    if let Some(done) = cached_run(&dir, cfg) {
        if verbose {
            eprintln!("reusing {}", dir.display());
        }
        return Ok(done);
    }
    let start = Instant::now();
    let test = if data.test.is_empty() { &data.val } else { &data.test };
    let mut result = train(cfg, data, &dir, verbose)?;
    let report = evaluate(&mut result.best, test, cfg)?.report;
    let run = TestedRun {
        dir,
        report,
        epochs_run: result.history.len(),
        seconds: start.elapsed().as_secs_f64(),
    };
    // Written last: its presence marks the run as finished.
    let path = run.dir.join("run.csv");
    let text = format!("{RUN_HEADER}\n{},{},{:.1}\n", report.csv_row(), run.epochs_run, run.seconds);
    fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
    Ok(run)
}

/// Trains and tests one model per axis value through [`tested_run`] in
/// `out/runs/`; the table goes to `out/sweep_<axis>.csv`.
pub fn sweep(base: &RunConfig, axis: SweepAxis, data: &Datasets, out: &Path, verbose: bool) -> Result<Vec<SweepRow>> {
    let mut rows = Vec::new();
    for (label, cfg) in axis.variants(base) {
        if verbose {
            eprintln!("sweep {} = {label}", axis.name());
        }
        let run = tested_run(&cfg, data, &out.join("runs"), verbose)?;
        rows.push(SweepRow {
            label,
            report: run.report,
            epochs_run: run.epochs_run,
        });
    }
    let path = out.join(format!("sweep_{}.csv", axis.name()));
    fs::write(&path, sweep_csv(axis, &rows)).map_err(|e| Error::io(&path, e))?;
    Ok(rows)
}
