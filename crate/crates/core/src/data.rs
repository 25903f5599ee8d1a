//! Samples, synthetic shape datasets, augmentation and PNG storage.
//!
//! On disk a dataset is `<root>/images/<id>.png` (RGB),
//! `<root>/masks/<id>.png` (8-bit gray, foreground at `>= 128`) and
//! `<root>/index.csv` with columns `id,split`.

use std::f64::consts::PI;
use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use image::{ColorType, GrayImage, ImageFormat, RgbImage};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::renderer::Mask;
use crate::tensor::Tensor;

/// An image in `[0, 1]` as `[3, h, w]`, its binary mask and a name.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub image: Tensor,
    pub mask: Mask,
    pub id: String,
}

impl Sample {
    pub fn new(image: Tensor, mask: Mask, id: impl Into<String>) -> Result<Self> {
        match *image.shape() {
            [3, h, w] if (h, w) == (mask.h, mask.w) => {}
            _ => {
                return Err(Error::shape(
                    "sample",
                    format!("image {:?} with {}x{} mask", image.shape(), mask.h, mask.w),
                ))
            }
        }
        if !mask.is_binary() {
            return Err(Error::invalid("sample", "mask is not binary"));
        }
        Ok(Self {
            image,
            mask,
            id: id.into(),
        })
    }

    pub fn size(&self) -> (usize, usize) {
        (self.mask.h, self.mask.w)
    }
}

macro_rules! named_enum {
    ($name:ident { $($variant:ident => $text:literal),+ $(,)? }) => {
        #[derive(Clone, Copy, Debug, PartialEq, Eq)]
        pub enum $name { $($variant),+ }

        impl $name {
            pub const ALL: &'static [$name] = &[$($name::$variant),+];
        }

        impl fmt::Display for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(match self { $($name::$variant => $text),+ })
            }
        }

        impl FromStr for $name {
            type Err = Error;
            fn from_str(s: &str) -> Result<Self> {
                match s {
                    $($text => Ok($name::$variant),)+
                    _ => Err(Error::invalid(stringify!($name), format!("unknown value {s:?}"))),
                }
            }
        }
    };
}

named_enum!(ShapeFamily {
    ConvexPolygon => "convex-polygon",
    Star => "star",
    Ellipse => "ellipse",
    RoundedRect => "rounded-rect",
});

named_enum!(Texture {
    Flat => "flat",
    Gradient => "gradient",
    Speckle => "speckle",
});

named_enum!(Split {
    Train => "train",
    Test => "test",
});

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SyntheticSpec {
    pub n: usize,
    pub size: usize,
    pub family: ShapeFamily,
    pub noise_sigma: f64,
    pub texture: Texture,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            n: 200,
            size: 64,
            family: ShapeFamily::Ellipse,
            noise_sigma: 0.05,
            texture: Texture::Flat,
            seed: 0,
        }
    }
}

/// Fraction of the image a generated shape may cover.
pub const AREA_RANGE: (f64, f64) = (0.05, 0.60);
/// Largest center offset from the image center, as a fraction of size.
pub const CENTER_JITTER: f64 = 0.10;
/// Smallest per-channel gap between foreground and background colors.
const MIN_CONTRAST: f64 = 0.3;

/// Inside test in continuous pixel coordinates.
type Shape = Box<dyn Fn(f64, f64) -> bool>;

fn rotate(dx: f64, dy: f64, theta: f64) -> (f64, f64) {
    let (s, c) = theta.sin_cos();
    (dx * c + dy * s, -dx * s + dy * c)
}

/// Even-odd point-in-polygon.
fn in_polygon(poly: &[(f64, f64)], x: f64, y: f64) -> bool {
    let mut inside = false;
    let n = poly.len();
    for i in 0..n {
        let (xi, yi) = poly[i];
        let (xj, yj) = poly[(i + n - 1) % n];
        if (yi > y) != (yj > y) && x < (xj - xi) * (y - yi) / (yj - yi) + xi {
            inside = !inside;
        }
    }
    inside
}

fn draw_shape(rng: &mut ChaCha8Rng, family: ShapeFamily, size: f64) -> Shape {
    let cx = (size - 1.0) / 2.0 + rng.random_range(-CENTER_JITTER..CENTER_JITTER) * size;
    let cy = (size - 1.0) / 2.0 + rng.random_range(-CENTER_JITTER..CENTER_JITTER) * size;
    let theta = rng.random_range(0.0..PI);
    match family {
        ShapeFamily::Ellipse => {
            let a = rng.random_range(0.12..0.42) * size;
            let b = rng.random_range(0.12..0.42) * size;
            Box::new(move |x, y| {
                let (u, v) = rotate(x - cx, y - cy, theta);
                (u / a).powi(2) + (v / b).powi(2) <= 1.0
            })
        }
        ShapeFamily::ConvexPolygon => {
            // Points on an ellipse at sorted angles are in convex position.
            let a = rng.random_range(0.15..0.42) * size;
            let b = rng.random_range(0.15..0.42) * size;
            let k = rng.random_range(3..=8);
            let mut angles: Vec<f64> = (0..k).map(|_| rng.random_range(0.0..2.0 * PI)).collect();
            angles.sort_by(f64::total_cmp);
            let poly: Vec<(f64, f64)> = angles
                .iter()
                .map(|&t| {
                    let (u, v) = rotate(a * t.cos(), b * t.sin(), -theta);
                    (cx + u, cy + v)
                })
                .collect();
            Box::new(move |x, y| in_polygon(&poly, x, y))
        }
        ShapeFamily::Star => {
            let spikes = rng.random_range(4..=7);
            let outer = rng.random_range(0.25..0.45) * size;
            let inner = outer * rng.random_range(0.4..0.7);
            let poly: Vec<(f64, f64)> = (0..2 * spikes)
                .map(|i| {
                    let r = if i % 2 == 0 { outer } else { inner };
                    let t = theta + PI * i as f64 / spikes as f64;
                    (cx + r * t.cos(), cy + r * t.sin())
                })
                .collect();
            Box::new(move |x, y| in_polygon(&poly, x, y))
        }
        ShapeFamily::RoundedRect => {
            let hw = rng.random_range(0.12..0.4) * size;
            let hh = rng.random_range(0.12..0.4) * size;
            let r = hw.min(hh) * rng.random_range(0.1..0.6);
            Box::new(move |x, y| {
                let (u, v) = rotate(x - cx, y - cy, theta);
                let (qx, qy) = (u.abs() - (hw - r), v.abs() - (hh - r));
                let outside = qx.max(0.0).hypot(qy.max(0.0));
                outside + qx.max(qy).min(0.0) <= r
            })
        }
    }
}

/// Number of 4-connected foreground components.
pub fn component_count(m: &Mask) -> usize {
    let mut seen = vec![false; m.h * m.w];
    let mut count = 0;
    let mut stack = Vec::new();
    for start in 0..m.h * m.w {
        if seen[start] || m.values[start] < 0.5 {
            continue;
        }
        count += 1;
        seen[start] = true;
        stack.push(start);
        while let Some(i) = stack.pop() {
            let (y, x) = (i / m.w, i % m.w);
            let mut visit = |j: usize| {
                if !seen[j] && m.values[j] >= 0.5 {
                    seen[j] = true;
                    stack.push(j);
                }
            };
            if y > 0 {
                visit(i - m.w);
            }
            if y + 1 < m.h {
                visit(i + m.w);
            }
            if x > 0 {
                visit(i - 1);
            }
            if x + 1 < m.w {
                visit(i + 1);
            }
        }
    }
    count
}

fn paint(rng: &mut ChaCha8Rng, mask: &Mask, texture: Texture, noise_sigma: f64) -> Tensor {
    let (fg, bg) = loop {
        let fg: [f64; 3] = std::array::from_fn(|_| rng.random_range(0.0..1.0));
        let bg: [f64; 3] = std::array::from_fn(|_| rng.random_range(0.0..1.0));
        if fg.iter().zip(&bg).any(|(a, b)| (a - b).abs() >= MIN_CONTRAST) {
            break (fg, bg);
        }
    };
    let (h, w) = (mask.h, mask.w);
    let size = h.max(w) as f64;
    let phi = rng.random_range(0.0..2.0 * PI);
    let ramp = rng.random_range(0.1..0.3);
    let noise = Normal::new(0.0, noise_sigma.max(0.0)).expect("finite sigma");
    let mut data = vec![0.0f32; 3 * h * w];
    for c in 0..3 {
        for y in 0..h {
            for x in 0..w {
                let base = if mask.is_on(y, x) { fg[c] } else { bg[c] };
                let mut v = match texture {
                    Texture::Flat => base,
                    Texture::Gradient => base + ramp * ((x as f64 * phi.cos() + y as f64 * phi.sin()) / size - 0.5),
                    Texture::Speckle => base * rng.random_range(0.75..1.25),
                };
                if noise_sigma > 0.0 {
                    v += noise.sample(rng);
                }
                data[c * h * w + y * w + x] = v.clamp(0.0, 1.0) as f32;
            }
        }
    }
    Tensor::new(vec![3, h, w], data).expect("3 x h x w")
}

/// Deterministic synthetic dataset. Shapes are redrawn until the mask is
/// one 4-connected component covering [`AREA_RANGE`] of the image.
pub fn generate(spec: &SyntheticSpec) -> Result<Vec<Sample>> {
    if spec.n == 0 || spec.size < 4 {
        return Err(Error::invalid("generate", format!("n = {}, size = {}", spec.n, spec.size)));
    }
    if !(spec.noise_sigma >= 0.0) || !spec.noise_sigma.is_finite() {
        return Err(Error::invalid("generate", format!("noise_sigma = {}", spec.noise_sigma)));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let s = spec.size;
    let total = (s * s) as f64;
    let mut out = Vec::with_capacity(spec.n);
    while out.len() < spec.n {
        let shape = draw_shape(&mut rng, spec.family, s as f64);
        let mask = Mask::from_fn(s, s, |y, x| if shape(x as f64, y as f64) { 1.0 } else { 0.0 });
        let frac = mask.sum() / total;
        if frac < AREA_RANGE.0 || frac > AREA_RANGE.1 || component_count(&mask) != 1 {
            continue;
        }
        let image = paint(&mut rng, &mask, spec.texture, spec.noise_sigma);
        let id = format!("{}_{:05}", spec.family, out.len());
        out.push(Sample { image, mask, id });
    }
    Ok(out)
}

/// Snaps coordinates within rounding distance of the lattice onto it, so
/// right-angle rotations permute pixels exactly.
fn snap(v: f64) -> f64 {
    let r = v.round();
    if (v - r).abs() < 1e-9 {
        r
    } else {
        v
    }
}

/// Rotates by `rot_deg` (from `+x` toward `+y`) and scales by `scale`
/// about the image center, keeping the original size. Images resample
/// bilinearly with edge replication; masks take the nearest pixel and are
/// background outside the source.
pub fn augment(s: &Sample, scale: f64, rot_deg: f64) -> Result<Sample> {
    if !(scale > 0.0) || !scale.is_finite() || !rot_deg.is_finite() {
        return Err(Error::invalid("augment", format!("scale {scale}, rotation {rot_deg}")));
    }
    let (h, w) = s.size();
    let (cx, cy) = ((w as f64 - 1.0) / 2.0, (h as f64 - 1.0) / 2.0);
    let (sin, cos) = rot_deg.to_radians().sin_cos();
    let source = |y: usize, x: usize| {
        let (dx, dy) = (x as f64 - cx, y as f64 - cy);
        let u = (dx * cos + dy * sin) / scale + cx;
        let v = (-dx * sin + dy * cos) / scale + cy;
        (snap(u), snap(v))
    };
    let mask = Mask::from_fn(h, w, |y, x| {
        let (u, v) = source(y, x);
        let (ui, vi) = (u.round(), v.round());
        if ui < 0.0 || vi < 0.0 || ui > (w - 1) as f64 || vi > (h - 1) as f64 {
            0.0
        } else {
            s.mask.get(vi as usize, ui as usize)
        }
    });
    let src = s.image.data();
    let plane = h * w;
    let mut data = vec![0.0f32; 3 * plane];
    for y in 0..h {
        for x in 0..w {
            let (u, v) = source(y, x);
            let u = u.clamp(0.0, (w - 1) as f64);
            let v = v.clamp(0.0, (h - 1) as f64);
            let (x0, y0) = (u.floor() as usize, v.floor() as usize);
            let (x1, y1) = ((x0 + 1).min(w - 1), (y0 + 1).min(h - 1));
            let (fx, fy) = (u - x0 as f64, v - y0 as f64);
            for c in 0..3 {
                let at = |yy: usize, xx: usize| src[c * plane + yy * w + xx] as f64;
                let val = if fx == 0.0 && fy == 0.0 {
                    at(y0, x0)
                } else {
                    (1.0 - fx) * (1.0 - fy) * at(y0, x0)
                        + fx * (1.0 - fy) * at(y0, x1)
                        + (1.0 - fx) * fy * at(y1, x0)
                        + fx * fy * at(y1, x1)
                };
                data[c * plane + y * w + x] = val.clamp(0.0, 1.0) as f32;
            }
        }
    }
    Ok(Sample {
        image: Tensor::new(vec![3, h, w], data)?,
        mask,
        id: s.id.clone(),
    })
}

/// Seeded shuffle of `0..n` cut into `round(n · train_frac)` training and
/// the remaining test indices.
pub fn split(n: usize, train_frac: f64, seed: u64) -> Result<(Vec<usize>, Vec<usize>)> {
    if !(0.0..=1.0).contains(&train_frac) {
        return Err(Error::invalid("split", format!("train fraction {train_frac}")));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let cut = (n as f64 * train_frac).round() as usize;
    let test = order.split_off(cut);
    Ok((order, test))
}

fn to_byte(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

fn ensure_parent(path: &Path) -> Result<()> {
    match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => fs::create_dir_all(p).map_err(|e| Error::io(p, e)),
        _ => Ok(()),
    }
}

pub fn save_image_png(path: &Path, image: &Tensor) -> Result<()> {
    let [3, h, w] = *image.shape() else {
        return Err(Error::shape("save_image_png", format!("expected [3, h, w], got {:?}", image.shape())));
    };
    let d = image.data();
    let plane = h * w;
    let raw = (0..plane).flat_map(|i| [to_byte(d[i]), to_byte(d[plane + i]), to_byte(d[2 * plane + i])]).collect();
    let img = RgbImage::from_raw(w as u32, h as u32, raw).expect("buffer size");
    ensure_parent(path)?;
    img.save_with_format(path, ImageFormat::Png)
        .map_err(|e| Error::format(path, e.to_string()))
}

/// Gray PNG of the mask scaled to `0..=255`; soft masks are kept as gray.
pub fn save_mask_png(path: &Path, mask: &Mask) -> Result<()> {
    let raw = mask.values.iter().map(|&v| to_byte(v)).collect();
    let img = GrayImage::from_raw(mask.w as u32, mask.h as u32, raw).expect("buffer size");
    ensure_parent(path)?;
    img.save_with_format(path, ImageFormat::Png)
        .map_err(|e| Error::format(path, e.to_string()))
}

fn open_png(path: &Path) -> Result<image::DynamicImage> {
    if !path.exists() {
        return Err(Error::io(path, std::io::Error::from(std::io::ErrorKind::NotFound)));
    }
    image::open(path).map_err(|e| Error::format(path, e.to_string()))
}

/// 8-bit RGB or gray PNG as a `[3, h, w]` tensor in `[0, 1]`.
pub fn load_image_png(path: &Path) -> Result<Tensor> {
    let img = open_png(path)?;
    let rgb = match img.color() {
        ColorType::Rgb8 | ColorType::L8 => img.to_rgb8(),
        other => return Err(Error::format(path, format!("expected 8-bit RGB or gray PNG, found {other:?}"))),
    };
    let (w, h) = (rgb.width() as usize, rgb.height() as usize);
    let plane = h * w;
    let mut data = vec![0.0f32; 3 * plane];
    for (i, px) in rgb.pixels().enumerate() {
        for c in 0..3 {
            data[c * plane + i] = px[c] as f32 / 255.0;
        }
    }
    Tensor::new(vec![3, h, w], data)
}

/// 8-bit gray PNG thresholded at 128.
pub fn load_mask_png(path: &Path) -> Result<Mask> {
    let img = open_png(path)?;
    if img.color() != ColorType::L8 {
        return Err(Error::format(path, format!("expected 8-bit gray PNG, found {:?}", img.color())));
    }
    let g = img.to_luma8();
    let (w, h) = (g.width() as usize, g.height() as usize);
    Ok(Mask {
        h,
        w,
        values: g.pixels().map(|p| if p[0] >= 128 { 1.0 } else { 0.0 }).collect(),
    })
}

/// Writes samples and their split labels under `root`.
pub fn write_dataset(root: &Path, samples: &[Sample], splits: &[Split]) -> Result<()> {
    if samples.len() != splits.len() {
        return Err(Error::invalid("write_dataset", "one split label per sample required"));
    }
    let mut index = String::from("id,split\n");
    for (s, split) in samples.iter().zip(splits) {
        save_image_png(&root.join("images").join(format!("{}.png", s.id)), &s.image)?;
        save_mask_png(&root.join("masks").join(format!("{}.png", s.id)), &s.mask)?;
        index.push_str(&format!("{},{split}\n", s.id));
    }
    let path = root.join("index.csv");
    fs::write(&path, index).map_err(|e| Error::io(&path, e))
}

/// Reads a dataset written by [`write_dataset`], in index order.
pub fn load_dataset(root: &Path) -> Result<Vec<(Sample, Split)>> {
    let path = root.join("index.csv");
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let mut lines = text.lines();
    if lines.next().map(str::trim) != Some("id,split") {
        return Err(Error::format(&path, "missing id,split header"));
    }
    let mut out = Vec::new();
    for (n, line) in lines.enumerate().filter(|(_, l)| !l.trim().is_empty()) {
        let (id, split) = line
            .split_once(',')
            .ok_or_else(|| Error::format(&path, format!("line {}: expected id,split", n + 2)))?;
        let split: Split = split.trim().parse()?;
        let image = load_image_png(&root.join("images").join(format!("{id}.png")))?;
        let mask = load_mask_png(&root.join("masks").join(format!("{id}.png")))?;
        out.push((Sample::new(image, mask, id)?, split));
    }
    Ok(out)
}
