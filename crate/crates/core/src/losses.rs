//! Mask agreement, balloon and curvature losses.
//!
//! Each term has a plain `f64` evaluator and a graph version for training.

use crate::error::{Error, Result};
use crate::geometry::Polygon;
use crate::renderer::Mask;
use crate::tensor::{Backward, Graph, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossWeights {
    /// Balloon weight.
    pub lambda1: f64,
    /// Curvature weight.
    pub lambda2: f64,
    /// Multiplies vertex coordinates before curvature is measured. `1.0`
    /// measures in pixels; `2 / size` measures in a resolution-independent
    /// `[-1, 1]` frame.
    pub curvature_scale: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda1: 1e-2,
            lambda2: 0.5,
            curvature_scale: 1.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("lambda1", self.lambda1),
            ("lambda2", self.lambda2),
            ("curvature_scale", self.curvature_scale),
        ] {
            if !(v >= 0.0) || !v.is_finite() {
                return Err(Error::invalid("loss weights", format!("{name} = {v} must be finite and non-negative")));
            }
        }
        Ok(())
    }
}

fn check_same(op: &'static str, a: &Mask, b: &Mask) -> Result<()> {
    if (a.h, a.w) != (b.h, b.w) {
        return Err(Error::shape(op, format!("{}x{} vs {}x{}", a.h, a.w, b.h, b.w)));
    }
    Ok(())
}

pub fn mse(a: &Mask, b: &Mask) -> Result<f64> {
    check_same("mse", a, b)?;
    let n = a.values.len().max(1) as f64;
    Ok(a.values
        .iter()
        .zip(&b.values)
        .map(|(&x, &y)| (x as f64 - y as f64).powi(2))
        .sum::<f64>()
        / n)
}

/// Per-step mean squared error, summed over steps.
pub fn seg_loss(masks: &[Mask], gt: &Mask) -> Result<f64> {
    masks.iter().map(|m| mse(m, gt)).sum()
}

/// Mean uncovered fraction of the mask.
pub fn balloon_loss(mask: &Mask) -> f64 {
    mask.values.iter().map(|&v| 1.0 - v as f64).sum::<f64>() / mask.values.len().max(1) as f64
}

/// Mean norm of the cyclic second difference of the vertices.
pub fn curvature_loss(p: &Polygon) -> f64 {
    let v = p.vertices();
    let k = v.len();
    (0..k)
        .map(|j| {
            let (a, b, c) = (v[(j + k - 1) % k], v[j], v[(j + 1) % k]);
            (a.x - 2.0 * b.x + c.x).hypot(a.y - 2.0 * b.y + c.y)
        })
        .sum::<f64>()
        / k as f64
}

pub fn total_loss(masks: &[Mask], gt: &Mask, polygons: &[Polygon], w: LossWeights) -> Result<f64> {
    if masks.len() != polygons.len() {
        return Err(Error::invalid(
            "total_loss",
            format!("{} masks for {} polygons", masks.len(), polygons.len()),
        ));
    }
    let seg = seg_loss(masks, gt)?;
    let balloon: f64 = masks.iter().map(balloon_loss).sum();
    let curvature: f64 = polygons
        .iter()
        .map(|p| w.curvature_scale * curvature_loss(p))
        .sum();
    Ok(seg + w.lambda1 * balloon + w.lambda2 * curvature)
}

struct CurvatureOp {
    scale: f64,
}

impl CurvatureOp {
    fn second_differences(&self, pts: &[f32]) -> Vec<[f64; 2]> {
        let k = pts.len() / 2;
        let at = |j: usize| [pts[2 * j] as f64, pts[2 * j + 1] as f64];
        (0..k)
            .map(|j| {
                let (a, b, c) = (at((j + k - 1) % k), at(j), at((j + 1) % k));
                [
                    self.scale * (a[0] - 2.0 * b[0] + c[0]),
                    self.scale * (a[1] - 2.0 * b[1] + c[1]),
                ]
            })
            .collect()
    }
}

impl Backward for CurvatureOp {
    fn backward(&self, inputs: &[&Tensor], _: &Tensor, grad: &Tensor, _: &[bool]) -> Vec<Option<Tensor>> {
        let pts = inputs[0].data();
        let k = pts.len() / 2;
        let coef = grad.item() as f64 * self.scale / k as f64;
        let mut g = vec![0.0f64; pts.len()];
        for (j, u) in self.second_differences(pts).into_iter().enumerate() {
            let n = u[0].hypot(u[1]);
            if n == 0.0 {
                continue;
            }
            for (d, ud) in u.iter().enumerate() {
                let unit = coef * ud / n;
                g[2 * ((j + k - 1) % k) + d] += unit;
                g[2 * j + d] -= 2.0 * unit;
                g[2 * ((j + 1) % k) + d] += unit;
            }
        }
        let data = g.into_iter().map(|v| v as f32).collect();
        vec![Some(Tensor::new(inputs[0].shape().to_vec(), data).expect("same shape"))]
    }
    fn name(&self) -> &'static str {
        "curvature_loss"
    }
}

/// Graph handles of the per-term losses of one sample.
#[derive(Clone, Copy, Debug)]
pub struct LossTerms {
    pub seg: Var,
    pub balloon: Var,
    pub curvature: Var,
    pub total: Var,
}

impl Graph {
    pub fn seg_loss(&mut self, masks: &[Var], gt: Var) -> Result<Var> {
        let (first, rest) = masks
            .split_first()
            .ok_or_else(|| Error::invalid("seg_loss", "no masks"))?;
        let mut acc = self.mse(*first, gt)?;
        for &m in rest {
            let e = self.mse(m, gt)?;
            acc = self.add(acc, e)?;
        }
        Ok(acc)
    }

    pub fn balloon_loss(&mut self, mask: Var) -> Var {
        let m = self.mean(mask);
        self.affine(m, -1.0, 1.0)
    }

    /// Curvature of a `[k, 2]` vertex tensor after multiplying coordinates
    /// by `scale`.
    pub fn curvature_loss(&mut self, points: Var, scale: f64) -> Result<Var> {
        let pts = self.value(points);
        if pts.rank() != 2 || pts.shape()[1] != 2 || pts.shape()[0] < 3 {
            return Err(Error::shape("curvature_loss", format!("expected [k >= 3, 2], got {:?}", pts.shape())));
        }
        let op = CurvatureOp { scale };
        let k = pts.shape()[0] as f64;
        let value: f64 = op
            .second_differences(pts.data())
            .iter()
            .map(|u| u[0].hypot(u[1]))
            .sum::<f64>()
            / k;
        Ok(self.record(op, &[points], Tensor::scalar(value as f32)))
    }

    /// `seg + λ₁·Σ_t balloon(M̄ᵗ) + λ₂·Σ_t curvature(Pᵗ)`. Terms whose weight
    /// is zero are left out of the sum, so the total is then exactly `seg`.
    pub fn total_loss(&mut self, masks: &[Var], gt: Var, polygons: &[Var], w: LossWeights) -> Result<LossTerms> {
        w.validate()?;
        if masks.len() != polygons.len() {
            return Err(Error::invalid(
                "total_loss",
                format!("{} masks for {} polygons", masks.len(), polygons.len()),
            ));
        }
        let seg = self.seg_loss(masks, gt)?;
        let mut balloon = self.constant(Tensor::scalar(0.0));
        for &m in masks {
            let b = self.balloon_loss(m);
            balloon = self.add(balloon, b)?;
        }
        let mut curvature = self.constant(Tensor::scalar(0.0));
        for &p in polygons {
            let c = self.curvature_loss(p, w.curvature_scale)?;
            curvature = self.add(curvature, c)?;
        }
        let mut total = seg;
        if w.lambda1 != 0.0 {
            let b = self.scale(balloon, w.lambda1 as f32);
            total = self.add(total, b)?;
        }
        if w.lambda2 != 0.0 {
            let c = self.scale(curvature, w.lambda2 as f32);
            total = self.add(total, c)?;
        }
        Ok(LossTerms {
            seg,
            balloon,
            curvature,
            total,
        })
    }
}
