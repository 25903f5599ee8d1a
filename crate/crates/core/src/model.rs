//! U-Net mapping an image to a two-channel displacement field.
//!
//! Encoder level `i` has `base · 2^i` channels and runs three 3×3
//! convolutions (each followed by dropout), then relu, batch norm and a
//! 2×2 max-pool. Its pre-pool activation is the skip for decoder level `i`.
//! Decoder level `j` normalizes and rectifies the tensor coming from below,
//! resizes it to the skip, concatenates `[skip, up]` and runs three 3×3
//! convolutions. Level 0 has no dropout. A 1×1 convolution then produces
//! the field.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::{load_tensors, save_tensors, Graph, Mode, RunningStats, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FieldHead {
    /// Raw 1×1 convolution output times `field_scale`.
    Linear,
    /// `field_scale · (2σ(z) − 1)`, bounded to `±field_scale` pixels.
    Sigmoid,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct UNetConfig {
    pub in_channels: usize,
    pub base_channels: usize,
    pub depth: usize,
    pub dropout: f32,
    pub field_scale: f32,
    pub head: FieldHead,
}

impl Default for UNetConfig {
    fn default() -> Self {
        Self {
            in_channels: 3,
            base_channels: 16,
            depth: 4,
            dropout: 0.0,
            field_scale: 1.0,
            head: FieldHead::Linear,
        }
    }
}

impl UNetConfig {
    pub fn validate(&self) -> Result<()> {
        if self.in_channels == 0 || self.base_channels == 0 || self.depth == 0 {
            return Err(Error::invalid("unet", format!("degenerate config {self:?}")));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::invalid("unet", format!("dropout {} outside [0, 1)", self.dropout)));
        }
        if !self.field_scale.is_finite() || self.field_scale <= 0.0 {
            return Err(Error::invalid("unet", format!("field_scale {} must be positive", self.field_scale)));
        }
        Ok(())
    }

    pub fn channels(&self, level: usize) -> usize {
        self.base_channels << level
    }

    /// Rejects spatial sizes the pooling pyramid cannot halve `depth` times.
    pub fn check_size(&self, h: usize, w: usize) -> Result<()> {
        let div = 1usize << self.depth;
        if h == 0 || w == 0 || h % div != 0 || w % div != 0 {
            return Err(Error::invalid(
                "unet",
                format!("image {h}x{w} is not divisible by 2^{} = {div}", self.depth),
            ));
        }
        Ok(())
    }

    fn to_tensor(self) -> Tensor {
        let head = match self.head {
            FieldHead::Linear => 0.0,
            FieldHead::Sigmoid => 1.0,
        };
        Tensor::new(
            vec![6],
            vec![
                self.in_channels as f32,
                self.base_channels as f32,
                self.depth as f32,
                self.dropout,
                self.field_scale,
                head,
            ],
        )
        .expect("6 values")
    }

    fn from_tensor(t: &Tensor) -> Result<Self> {
        let d = t.data();
        if d.len() != 6 {
            return Err(Error::invalid("unet", format!("config record has {} values", d.len())));
        }
        let cfg = Self {
            in_channels: d[0] as usize,
            base_channels: d[1] as usize,
            depth: d[2] as usize,
            dropout: d[3],
            field_scale: d[4],
            head: if d[5] == 0.0 { FieldHead::Linear } else { FieldHead::Sigmoid },
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

const CONFIG_KEY: &str = "meta.unet";

/// Convolution parameter indices into [`UNet::params`].
#[derive(Clone, Copy, Debug)]
struct Conv {
    weight: usize,
    bias: usize,
}

#[derive(Clone, Copy, Debug)]
struct Norm {
    gamma: usize,
    beta: usize,
    stats: usize,
}

#[derive(Clone, Debug)]
struct Level {
    convs: [Conv; 3],
    norm: Norm,
}

/// Parameters, running statistics and layer wiring of a U-Net.
#[derive(Clone, Debug)]
pub struct UNet {
    pub config: UNetConfig,
    names: Vec<String>,
    params: Vec<Tensor>,
    stat_names: Vec<String>,
    stats: Vec<RunningStats>,
    encoder: Vec<Level>,
    decoder: Vec<Level>,
    head: Conv,
}

/// A forward pass recorded on a graph.
pub struct Forward {
    /// `[n, 2, h, w]` displacement field.
    pub field: Var,
    /// Graph leaves of the parameters, aligned with [`UNet::params`].
    pub params: Vec<Var>,
    /// Output of the deepest max-pool.
    pub bottleneck: Var,
}

struct Builder {
    rng: ChaCha8Rng,
    names: Vec<String>,
    params: Vec<Tensor>,
    stat_names: Vec<String>,
    stats: Vec<RunningStats>,
}

impl Builder {
    fn push(&mut self, name: String, t: Tensor) -> usize {
        self.names.push(name);
        self.params.push(t);
        self.params.len() - 1
    }

    /// Weights and biases uniform in `±1/√fan_in`.
    fn conv(&mut self, name: &str, c_in: usize, c_out: usize, k: usize) -> Conv {
        let fan_in = c_in * k * k;
        let bound = 1.0 / (fan_in as f32).sqrt();
        let mut draw = |n: usize| -> Vec<f32> { (0..n).map(|_| self.rng.random_range(-bound..bound)).collect() };
        let w = draw(c_out * fan_in);
        let b = draw(c_out);
        Conv {
            weight: self.push(format!("{name}.weight"), Tensor::new(vec![c_out, c_in, k, k], w).expect("shape")),
            bias: self.push(format!("{name}.bias"), Tensor::new(vec![c_out], b).expect("shape")),
        }
    }

    fn norm(&mut self, name: &str, c: usize) -> Norm {
        self.stat_names.push(name.to_string());
        self.stats.push(RunningStats::new(c));
        Norm {
            gamma: self.push(format!("{name}.gamma"), Tensor::ones(&[c])),
            beta: self.push(format!("{name}.beta"), Tensor::zeros(&[c])),
            stats: self.stats.len() - 1,
        }
    }

    fn triple(&mut self, name: &str, c_in: usize, c_out: usize) -> [Conv; 3] {
        [
            self.conv(&format!("{name}.conv0"), c_in, c_out, 3),
            self.conv(&format!("{name}.conv1"), c_out, c_out, 3),
            self.conv(&format!("{name}.conv2"), c_out, c_out, 3),
        ]
    }
}

impl UNet {
    pub fn new(config: UNetConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut b = Builder {
            rng: ChaCha8Rng::seed_from_u64(seed),
            names: Vec::new(),
            params: Vec::new(),
            stat_names: Vec::new(),
            stats: Vec::new(),
        };
        let depth = config.depth;
        let mut encoder = Vec::with_capacity(depth);
        for i in 0..depth {
            let c_in = if i == 0 { config.in_channels } else { config.channels(i - 1) };
            let c = config.channels(i);
            let convs = b.triple(&format!("enc{i}"), c_in, c);
            let norm = b.norm(&format!("enc{i}.bn"), c);
            encoder.push(Level { convs, norm });
        }
        let mut decoder = Vec::with_capacity(depth);
        for j in 0..depth {
            // The tensor arriving from below has as many channels as the skip.
            let c = config.channels(j);
            let out = if j == 0 { config.base_channels } else { config.channels(j - 1) };
            let norm = b.norm(&format!("dec{j}.bn"), c);
            let convs = b.triple(&format!("dec{j}"), 2 * c, out);
            decoder.push(Level { convs, norm });
        }
        let head = b.conv("head", config.base_channels, 2, 1);
        Ok(Self {
            config,
            names: b.names,
            params: b.params,
            stat_names: b.stat_names,
            stats: b.stats,
            encoder,
            decoder,
            head,
        })
    }

    pub fn param_names(&self) -> &[String] {
        &self.names
    }

    pub fn params(&self) -> &[Tensor] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Tensor] {
        &mut self.params
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().map(Tensor::numel).sum()
    }

    pub fn running_stats(&self) -> &[RunningStats] {
        &self.stats
    }

    /// Sets the head to zero so the predicted field vanishes everywhere.
    pub fn zero_head(&mut self) {
        for i in [self.head.weight, self.head.bias] {
            self.params[i] = Tensor::zeros(self.params[i].shape());
        }
    }

    fn conv_block(&self, g: &mut Graph, p: &[Var], x: Var, convs: &[Conv; 3], dropout: f32, mode: Mode) -> Result<Var> {
        let mut x = x;
        for c in convs {
            x = g.conv2d(x, p[c.weight], Some(p[c.bias]), 1, 1)?;
            if dropout > 0.0 {
                x = g.dropout(x, dropout, mode)?;
            }
        }
        Ok(x)
    }

    /// Records a forward pass of `[n, c, h, w]` (or `[c, h, w]`) images.
    /// Parameters enter the graph as leaves that require gradients only
    /// in train mode. Train mode updates the running statistics.
    pub fn forward(&mut self, g: &mut Graph, image: Var, mode: Mode) -> Result<Forward> {
        let shape = g.shape(image).to_vec();
        let (c, h, w) = match shape[..] {
            [c, h, w] | [_, c, h, w] => (c, h, w),
            _ => return Err(Error::shape("unet", format!("image must be [n,c,h,w] or [c,h,w], got {shape:?}"))),
        };
        if c != self.config.in_channels {
            return Err(Error::shape(
                "unet",
                format!("image has {c} channels, model expects {}", self.config.in_channels),
            ));
        }
        self.config.check_size(h, w)?;
        let train = mode == Mode::Train;
        let p: Vec<Var> = self.params.iter().map(|t| g.leaf(t.clone(), train)).collect();
        let drop = self.config.dropout;

        let mut x = image;
        let mut skips = Vec::with_capacity(self.config.depth);
        for level in &self.encoder {
            x = self.conv_block(g, &p, x, &level.convs, drop, mode)?;
            x = g.relu(x);
            let n = level.norm;
            x = g.batchnorm2d(x, p[n.gamma], p[n.beta], &mut self.stats[n.stats], mode)?;
            skips.push(x);
            x = g.maxpool2d(x, 2)?;
        }
        let bottleneck = x;
        for j in (0..self.config.depth).rev() {
            let level = &self.decoder[j];
            let n = level.norm;
            x = g.batchnorm2d(x, p[n.gamma], p[n.beta], &mut self.stats[n.stats], mode)?;
            x = g.relu(x);
            let skip = skips[j];
            let s = g.shape(skip).to_vec();
            let (sh, sw) = (s[s.len() - 2], s[s.len() - 1]);
            x = g.bilinear_resize(x, sh, sw)?;
            let axis = if s.len() == 4 { 1 } else { 0 };
            x = g.concat(skip, x, axis)?;
            let d = if j == 0 { 0.0 } else { drop };
            x = self.conv_block(g, &p, x, &level.convs, d, mode)?;
        }
        x = g.conv2d(x, p[self.head.weight], Some(p[self.head.bias]), 1, 0)?;
        let s = self.config.field_scale;
        let field = match self.config.head {
            FieldHead::Linear if s == 1.0 => x,
            FieldHead::Linear => g.scale(x, s),
            FieldHead::Sigmoid => {
                let z = g.sigmoid(x);
                g.affine(z, 2.0 * s, -s)
            }
        };
        Ok(Forward {
            field,
            params: p,
            bottleneck,
        })
    }

    /// Eval-mode field for a single `[c, h, w]` image, as `[2, h, w]`.
    pub fn predict(&mut self, image: &Tensor) -> Result<Tensor> {
        let mut g = Graph::new(0);
        let x = g.constant(image.clone());
        let out = self.forward(&mut g, x, Mode::Eval)?;
        let field = g.value(out.field).clone();
        match field.shape() {
            [1, 2, h, w] => {
                let (h, w) = (*h, *w);
                field.reshape(&[2, h, w])
            }
            _ => Ok(field),
        }
    }

    /// Parameters, running statistics and config as named tensors.
    pub fn state_tensors(&self) -> Vec<(String, Tensor)> {
        let mut out = vec![(CONFIG_KEY.to_string(), self.config.to_tensor())];
        out.extend(self.names.iter().cloned().zip(self.params.iter().cloned()));
        for (name, s) in self.stat_names.iter().zip(&self.stats) {
            let c = s.mean.len();
            out.push((format!("{name}.running_mean"), Tensor::new(vec![c], s.mean.clone()).expect("c")));
            out.push((format!("{name}.running_var"), Tensor::new(vec![c], s.var.clone()).expect("c")));
        }
        out
    }

    /// Rebuilds a model from [`UNet::state_tensors`] output.
    pub fn from_state(state: &[(String, Tensor)]) -> Result<Self> {
        let find = |key: &str| {
            state
                .iter()
                .find(|(n, _)| n == key)
                .map(|(_, t)| t)
                .ok_or_else(|| Error::invalid("unet", format!("checkpoint lacks {key}")))
        };
        let config = UNetConfig::from_tensor(find(CONFIG_KEY)?)?;
        let mut net = Self::new(config, 0)?;
        for (name, slot) in net.names.iter().zip(net.params.iter_mut()) {
            let t = find(name)?;
            if t.shape() != slot.shape() {
                return Err(Error::shape("unet", format!("{name}: {:?} vs {:?}", t.shape(), slot.shape())));
            }
            *slot = t.clone();
        }
        for (name, s) in net.stat_names.iter().zip(net.stats.iter_mut()) {
            let mean = find(&format!("{name}.running_mean"))?;
            let var = find(&format!("{name}.running_var"))?;
            if mean.numel() != s.mean.len() || var.numel() != s.var.len() {
                return Err(Error::shape("unet", format!("{name}: running stats size")));
            }
            s.mean = mean.data().to_vec();
            s.var = var.data().to_vec();
        }
        Ok(net)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        save_tensors(path, &self.state_tensors())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_state(&load_tensors(path)?)
    }
}
