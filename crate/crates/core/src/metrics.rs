//! Region and boundary agreement between binary masks.
//!
//! Dataset figures are per-image means (macro averages), except weighted
//! coverage which weights each image by its ground-truth area.

use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::renderer::Mask;

/// Match distances, in pixels, over which the boundary score is averaged.
pub const BOUNDARY_THRESHOLDS: [f64; 5] = [1.0, 2.0, 3.0, 4.0, 5.0];

fn check_pair(op: &'static str, pred: &Mask, gt: &Mask) -> Result<()> {
    if (pred.h, pred.w) != (gt.h, gt.w) {
        return Err(Error::shape(op, format!("{}x{} vs {}x{}", pred.h, pred.w, gt.h, gt.w)));
    }
    for (what, m) in [("prediction", pred), ("ground truth", gt)] {
        if !m.is_binary() {
            return Err(Error::invalid(op, format!("{what} mask is not binary")));
        }
    }
    Ok(())
}

/// Pixel F1 and IoU; two empty masks agree perfectly.
pub fn f1_iou(pred: &Mask, gt: &Mask) -> Result<(f64, f64)> {
    check_pair("f1_iou", pred, gt)?;
    let (mut tp, mut fp, mut fn_) = (0usize, 0usize, 0usize);
    for (&p, &g) in pred.values.iter().zip(&gt.values) {
        match (p == 1.0, g == 1.0) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, true) => fn_ += 1,
            (false, false) => {}
        }
    }
    if tp + fp + fn_ == 0 {
        return Ok((1.0, 1.0));
    }
    let (tp, fp, fn_) = (tp as f64, fp as f64, fn_ as f64);
    Ok((2.0 * tp / (2.0 * tp + fp + fn_), tp / (tp + fp + fn_)))
}

/// Ground-truth-area-weighted mean IoU over images, one region each.
pub fn wcov(preds: &[Mask], gts: &[Mask]) -> Result<f64> {
    if gts.is_empty() || preds.len() != gts.len() {
        return Err(Error::invalid(
            "wcov",
            format!("{} predictions for {} ground truths", preds.len(), gts.len()),
        ));
    }
    let mut weighted = 0.0;
    let mut total = 0.0;
    let mut plain = 0.0;
    for (p, g) in preds.iter().zip(gts) {
        let (_, iou) = f1_iou(p, g)?;
        let area = g.sum();
        weighted += area * iou;
        total += area;
        plain += iou;
    }
    Ok(if total > 0.0 { weighted / total } else { plain / gts.len() as f64 })
}

/// Foreground pixels with a 4-neighbor in the background; outside the
/// image counts as background.
pub fn boundary_pixels(m: &Mask) -> Vec<(usize, usize)> {
    let on = |y: isize, x: isize| {
        y >= 0 && x >= 0 && (y as usize) < m.h && (x as usize) < m.w && m.is_on(y as usize, x as usize)
    };
    let mut out = Vec::new();
    for y in 0..m.h as isize {
        for x in 0..m.w as isize {
            if on(y, x) && !(on(y - 1, x) && on(y + 1, x) && on(y, x - 1) && on(y, x + 1)) {
                out.push((y as usize, x as usize));
            }
        }
    }
    out
}

/// Exact Euclidean distance from each of `from` to the nearest of `to`.
fn nearest_distances(from: &[(usize, usize)], to: &[(usize, usize)]) -> Vec<f64> {
    from.iter()
        .map(|&(y, x)| {
            to.iter()
                .map(|&(v, u)| {
                    let (dy, dx) = (y as f64 - v as f64, x as f64 - u as f64);
                    dy * dy + dx * dx
                })
                .fold(f64::INFINITY, f64::min)
                .sqrt()
        })
        .collect()
}

/// Boundary F1 averaged over [`BOUNDARY_THRESHOLDS`].
pub fn boundf(pred: &Mask, gt: &Mask) -> Result<f64> {
    check_pair("boundf", pred, gt)?;
    let (bp, bg) = (boundary_pixels(pred), boundary_pixels(gt));
    match (bp.is_empty(), bg.is_empty()) {
        (true, true) => return Ok(1.0),
        (true, false) | (false, true) => return Ok(0.0),
        _ => {}
    }
    let dp = nearest_distances(&bp, &bg);
    let dg = nearest_distances(&bg, &bp);
    let frac = |d: &[f64], t: f64| d.iter().filter(|&&v| v <= t).count() as f64 / d.len() as f64;
    let total: f64 = BOUNDARY_THRESHOLDS
        .iter()
        .map(|&t| {
            let (precision, recall) = (frac(&dp, t), frac(&dg, t));
            if precision + recall == 0.0 {
                0.0
            } else {
                2.0 * precision * recall / (precision + recall)
            }
        })
        .sum();
    Ok(total / BOUNDARY_THRESHOLDS.len() as f64)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ImageScores {
    pub f1: f64,
    pub iou: f64,
    pub boundf: f64,
}

pub fn score(pred: &Mask, gt: &Mask) -> Result<ImageScores> {
    let (f1, iou) = f1_iou(pred, gt)?;
    Ok(ImageScores {
        f1,
        iou,
        boundf: boundf(pred, gt)?,
    })
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MetricReport {
    pub f1: f64,
    pub miou: f64,
    pub wcov: f64,
    pub boundf: f64,
}

impl MetricReport {
    /// Scores every pair and averages them.
    pub fn evaluate(preds: &[Mask], gts: &[Mask]) -> Result<(Self, Vec<ImageScores>)> {
        let cover = wcov(preds, gts)?;
        let per: Vec<ImageScores> = preds.iter().zip(gts).map(|(p, g)| score(p, g)).collect::<Result<_>>()?;
        let n = per.len() as f64;
        let mean = |f: fn(&ImageScores) -> f64| per.iter().map(f).sum::<f64>() / n;
        let report = Self {
            f1: mean(|s| s.f1),
            miou: mean(|s| s.iou),
            wcov: cover,
            boundf: mean(|s| s.boundf),
        };
        Ok((report, per))
    }

    pub fn csv_header() -> &'static str {
        "f1,miou,wcov,boundf"
    }

    pub fn csv_row(&self) -> String {
        format!("{:.6},{:.6},{:.6},{:.6}", self.f1, self.miou, self.wcov, self.boundf)
    }

    /// Parses a row written by [`MetricReport::csv_row`].
    pub fn from_csv_row(row: &str) -> Result<Self> {
        let v: Vec<f64> = row
            .trim()
            .split(',')
            .map(|f| f.parse().map_err(|_| Error::invalid("metrics", format!("bad field {f:?}"))))
            .collect::<Result<_>>()?;
        match v[..] {
            [f1, miou, wcov, boundf] => Ok(Self { f1, miou, wcov, boundf }),
            _ => Err(Error::invalid("metrics", format!("expected 4 fields, got {}", v.len()))),
        }
    }

    pub fn table(&self) -> String {
        let mut s = String::new();
        writeln!(s, "{:<8}{:>8}", "metric", "value").expect("string write");
        for (name, v) in [("F1", self.f1), ("mIoU", self.miou), ("WCov", self.wcov), ("BoundF", self.boundf)] {
            writeln!(s, "{name:<8}{v:>8.4}").expect("string write");
        }
        s
    }
}

/// Per-image rows `id,f1,iou,boundf`.
pub fn per_image_csv(ids: &[String], scores: &[ImageScores]) -> String {
    let mut s = String::from("id,f1,iou,boundf\n");
    for (id, sc) in ids.iter().zip(scores) {
        writeln!(s, "{id},{:.6},{:.6},{:.6}", sc.f1, sc.iou, sc.boundf).expect("string write");
    }
    s
}
