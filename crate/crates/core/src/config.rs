//! Run settings and their flat `key = value` text form.
//!
//! Blank lines and lines starting with `#` are ignored. Every key of
//! [`RunConfig::KEYS`] is written back out, so a saved snapshot fully
//! determines a run.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::data::{ShapeFamily, SyntheticSpec, Texture};
use crate::error::{Error, Result};
use crate::losses::LossWeights;
use crate::model::{FieldHead, UNetConfig};
use crate::renderer::{RasterConfig, SoftUnion};

/// Coordinate frame in which contour curvature is measured.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CurvatureFrame {
    Pixels,
    /// Coordinates scaled by `2 / max(h, w)`, so the weight means the same
    /// at every resolution.
    Normalized,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub k: usize,
    pub iterations: usize,
    pub lambda1: f64,
    pub lambda2: f64,
    pub curvature_frame: CurvatureFrame,
    pub lr: f32,
    pub batch: usize,
    pub epochs: usize,
    /// Stop once validation mIoU has not improved for this many epochs.
    pub patience: Option<usize>,
    pub tau: f64,
    pub union: SoftUnion,
    pub seed: u64,
    /// Initial circle diameter as a fraction of the smaller image side.
    pub init_diameter: f64,
    pub augment: bool,
    pub unet: UNetConfig,
    /// Dataset directory; when absent a synthetic set is generated.
    pub data_dir: Option<PathBuf>,
    pub family: ShapeFamily,
    pub texture: Texture,
    pub noise_sigma: f64,
    pub size: usize,
    pub n_train: usize,
    pub n_val: usize,
    pub n_test: usize,
    /// Resample images to this side length before the network sees them;
    /// predictions are scored at the original size.
    pub input_size: Option<usize>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            k: 16,
            iterations: 3,
            lambda1: 1e-2,
            lambda2: 0.5,
            curvature_frame: CurvatureFrame::Normalized,
            lr: 1e-3,
            batch: 8,
            epochs: 30,
            patience: None,
            tau: 1.0,
            union: SoftUnion::Outline,
            seed: 0,
            init_diameter: 0.25,
            augment: false,
            unet: UNetConfig::default(),
            data_dir: None,
            family: ShapeFamily::Ellipse,
            texture: Texture::Flat,
            noise_sigma: 0.05,
            size: 64,
            n_train: 200,
            n_val: 50,
            n_test: 50,
            input_size: None,
        }
    }
}

fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::invalid("config", format!("{key}: cannot parse {value:?}")))
}

fn optional(value: &str) -> Option<&str> {
    match value {
        "" | "none" => None,
        v => Some(v),
    }
}

impl RunConfig {
    pub const KEYS: &'static [&'static str] = &[
        "k",
        "iterations",
        "lambda1",
        "lambda2",
        "curvature_frame",
        "lr",
        "batch",
        "epochs",
        "patience",
        "tau",
        "union",
        "seed",
        "init_diameter",
        "augment",
        "in_channels",
        "base_channels",
        "depth",
        "dropout",
        "field_scale",
        "head",
        "data_dir",
        "family",
        "texture",
        "noise_sigma",
        "size",
        "n_train",
        "n_val",
        "n_test",
        "input_size",
    ];

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        match key {
            "k" => self.k = parse(key, v)?,
            "iterations" | "T" => self.iterations = parse(key, v)?,
            "lambda1" => self.lambda1 = parse(key, v)?,
            "lambda2" => self.lambda2 = parse(key, v)?,
            "curvature_frame" => {
                self.curvature_frame = match v {
                    "pixels" => CurvatureFrame::Pixels,
                    "normalized" => CurvatureFrame::Normalized,
                    _ => return Err(Error::invalid("config", format!("curvature_frame: {v:?}"))),
                }
            }
            "lr" => self.lr = parse(key, v)?,
            "batch" => self.batch = parse(key, v)?,
            "epochs" => self.epochs = parse(key, v)?,
            "patience" => self.patience = optional(v).map(|v| parse(key, v)).transpose()?,
            "tau" => self.tau = parse(key, v)?,
            "union" => {
                self.union = match v {
                    "outline" => SoftUnion::Outline,
                    "product" => SoftUnion::Product,
                    _ => return Err(Error::invalid("config", format!("union: {v:?}"))),
                }
            }
            "seed" => self.seed = parse(key, v)?,
            "init_diameter" => self.init_diameter = parse(key, v)?,
            "augment" => self.augment = parse(key, v)?,
            "in_channels" => self.unet.in_channels = parse(key, v)?,
            "base_channels" => self.unet.base_channels = parse(key, v)?,
            "depth" => self.unet.depth = parse(key, v)?,
            "dropout" => self.unet.dropout = parse(key, v)?,
            "field_scale" => self.unet.field_scale = parse(key, v)?,
            "head" => {
                self.unet.head = match v {
                    "linear" => FieldHead::Linear,
                    "sigmoid" => FieldHead::Sigmoid,
                    _ => return Err(Error::invalid("config", format!("head: {v:?}"))),
                }
            }
            "data_dir" => self.data_dir = optional(v).map(PathBuf::from),
            "family" => self.family = v.parse()?,
            "texture" => self.texture = v.parse()?,
            "noise_sigma" => self.noise_sigma = parse(key, v)?,
            "size" => self.size = parse(key, v)?,
            "n_train" => self.n_train = parse(key, v)?,
            "n_val" => self.n_val = parse(key, v)?,
            "n_test" => self.n_test = parse(key, v)?,
            "input_size" => self.input_size = optional(v).map(|v| parse(key, v)).transpose()?,
            _ => return Err(Error::invalid("config", format!("unknown key {key:?}"))),
        }
        Ok(())
    }

    pub fn get(&self, key: &str) -> Option<String> {
        let opt = |o: Option<String>| o.unwrap_or_else(|| "none".to_string());
        Some(match key {
            "k" => self.k.to_string(),
            "iterations" => self.iterations.to_string(),
            "lambda1" => self.lambda1.to_string(),
            "lambda2" => self.lambda2.to_string(),
            "curvature_frame" => match self.curvature_frame {
                CurvatureFrame::Pixels => "pixels".into(),
                CurvatureFrame::Normalized => "normalized".into(),
            },
            "lr" => self.lr.to_string(),
            "batch" => self.batch.to_string(),
            "epochs" => self.epochs.to_string(),
            "patience" => opt(self.patience.map(|p| p.to_string())),
            "tau" => self.tau.to_string(),
            "union" => match self.union {
                SoftUnion::Outline => "outline".into(),
                SoftUnion::Product => "product".into(),
            },
            "seed" => self.seed.to_string(),
            "init_diameter" => self.init_diameter.to_string(),
            "augment" => self.augment.to_string(),
            "in_channels" => self.unet.in_channels.to_string(),
            "base_channels" => self.unet.base_channels.to_string(),
            "depth" => self.unet.depth.to_string(),
            "dropout" => self.unet.dropout.to_string(),
            "field_scale" => self.unet.field_scale.to_string(),
            "head" => match self.unet.head {
                FieldHead::Linear => "linear".into(),
                FieldHead::Sigmoid => "sigmoid".into(),
            },
            "data_dir" => opt(self.data_dir.as_ref().map(|p| p.display().to_string())),
            "family" => self.family.to_string(),
            "texture" => self.texture.to_string(),
            "noise_sigma" => self.noise_sigma.to_string(),
            "size" => self.size.to_string(),
            "n_train" => self.n_train.to_string(),
            "n_val" => self.n_val.to_string(),
            "n_test" => self.n_test.to_string(),
            "input_size" => opt(self.input_size.map(|s| s.to_string())),
            _ => return None,
        })
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for key in Self::KEYS {
            writeln!(s, "{key} = {}", self.get(key).expect("known key")).expect("string write");
        }
        s
    }

    /// Applies every `key = value` line of `text` on top of `self`.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (n, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::invalid("config", format!("line {}: expected key = value", n + 1)))?;
            self.set(key.trim(), value)?;
        }
        Ok(())
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        cfg.apply_text(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_text(&text)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |what: String| Err(Error::invalid("config", what));
        if self.k < 3 {
            return fail(format!("k = {} must be at least 3", self.k));
        }
        if self.iterations < 1 {
            return fail("iterations must be at least 1".into());
        }
        if !(self.lr > 0.0) || !self.lr.is_finite() {
            return fail(format!("lr = {} must be positive", self.lr));
        }
        if self.batch == 0 {
            return fail("batch must be positive".into());
        }
        if !(self.tau > 0.0) {
            return fail(format!("tau = {} must be positive", self.tau));
        }
        if !(self.init_diameter > 0.0 && self.init_diameter <= 1.0) {
            return fail(format!("init_diameter = {} outside (0, 1]", self.init_diameter));
        }
        self.loss_weights(self.size).validate()?;
        self.unet.validate()?;
        let side = self.input_size.unwrap_or(self.size);
        self.unet.check_size(side, side)
    }

    pub fn raster(&self) -> RasterConfig {
        RasterConfig::new(self.tau, self.union)
    }

    /// Loss weights for images whose larger side is `side` pixels.
    pub fn loss_weights(&self, side: usize) -> LossWeights {
        LossWeights {
            lambda1: self.lambda1,
            lambda2: self.lambda2,
            curvature_scale: match self.curvature_frame {
                CurvatureFrame::Pixels => 1.0,
                CurvatureFrame::Normalized => 2.0 / side.max(1) as f64,
            },
        }
    }

    /// Synthetic spec for one of the three generated subsets.
    pub fn synthetic(&self, n: usize, stream: u64) -> SyntheticSpec {
        SyntheticSpec {
            n,
            size: self.size,
            family: self.family,
            noise_sigma: self.noise_sigma,
            texture: self.texture,
            seed: self.seed.wrapping_mul(1_000_003).wrapping_add(stream),
        }
    }
}
