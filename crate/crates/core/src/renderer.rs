//! Soft polygon rasterizer with analytic vertex gradients.
//!
//! Each pixel center gets a signed distance to the rasterized shape
//! (negative inside) which is squashed through a logistic of width `tau`.
//! Two ways of combining the triangle faces are provided:
//!
//! * [`SoftUnion::Product`]: each face is rasterized on its own and the
//!   results are merged as `1 - Π(1 - o_f)`. Shared interior edges dip to
//!   `0.75` within about `tau` of the seam.
//! * [`SoftUnion::Outline`]: the signed distance is taken to the mesh
//!   outline (edges owned by a single face) with inside meaning "inside any
//!   face". No seams, and identical to `Product` away from the outline.
//!
//! Both converge to hard pixel-center coverage as `tau → 0`.

use crate::error::{Error, Result};
use crate::geometry::{FaceList, Point, Polygon};
use crate::tensor::{Backward, Graph, Tensor, Var};

/// Signed distances beyond this many `tau` saturate the logistic to within
/// about 1e-13 of 0 or 1 and contribute no gradient.
const SATURATION: f64 = 30.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SoftUnion {
    Product,
    Outline,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RasterConfig {
    /// Logistic width in pixels.
    pub tau: f64,
    pub union: SoftUnion,
}

impl Default for RasterConfig {
    fn default() -> Self {
        Self {
            tau: 1.0,
            union: SoftUnion::Outline,
        }
    }
}

impl RasterConfig {
    pub fn new(tau: f64, union: SoftUnion) -> Self {
        Self { tau, union }
    }
}

/// Row-major `h × w` occupancy image with values in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Mask {
    pub h: usize,
    pub w: usize,
    pub values: Vec<f32>,
}

impl Mask {
    pub fn zeros(h: usize, w: usize) -> Self {
        Self {
            h,
            w,
            values: vec![0.0; h * w],
        }
    }

    pub fn from_fn(h: usize, w: usize, mut f: impl FnMut(usize, usize) -> f32) -> Self {
        let mut values = Vec::with_capacity(h * w);
        for y in 0..h {
            for x in 0..w {
                values.push(f(y, x));
            }
        }
        Self { h, w, values }
    }

    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        match *t.shape() {
            [h, w] => Ok(Self {
                h,
                w,
                values: t.data().to_vec(),
            }),
            _ => Err(Error::shape("mask", format!("expected [h, w], got {:?}", t.shape()))),
        }
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(vec![self.h, self.w], self.values.clone()).expect("h x w")
    }

    pub fn get(&self, y: usize, x: usize) -> f32 {
        self.values[y * self.w + x]
    }

    pub fn is_on(&self, y: usize, x: usize) -> bool {
        self.get(y, x) >= 0.5
    }

    pub fn sum(&self) -> f64 {
        self.values.iter().map(|&v| v as f64).sum()
    }

    pub fn is_binary(&self) -> bool {
        self.values.iter().all(|&v| v == 0.0 || v == 1.0)
    }

    pub fn threshold(&self, level: f32) -> Self {
        Self {
            h: self.h,
            w: self.w,
            values: self.values.iter().map(|&v| if v >= level { 1.0 } else { 0.0 }).collect(),
        }
    }
}

fn logistic(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

/// Distance from `p` to segment `ab`, with its gradient with respect to
/// `a` and `b` (zero when `p` sits on the segment).
fn segment_distance(p: Point, a: Point, b: Point) -> (f64, [f64; 4]) {
    let (ex, ey) = (b.x - a.x, b.y - a.y);
    let len2 = ex * ex + ey * ey;
    let t = if len2 > 0.0 {
        (((p.x - a.x) * ex + (p.y - a.y) * ey) / len2).clamp(0.0, 1.0)
    } else {
        0.0
    };
    let (qx, qy) = (a.x + t * ex, a.y + t * ey);
    let (dx, dy) = (p.x - qx, p.y - qy);
    let d = (dx * dx + dy * dy).sqrt();
    if d <= 1e-12 {
        return (d, [0.0; 4]);
    }
    let (nx, ny) = (dx / d, dy / d);
    (d, [-(1.0 - t) * nx, -(1.0 - t) * ny, -t * nx, -t * ny])
}

/// Point-in-triangle with boundary counted as inside; degenerate triangles
/// contain nothing.
fn in_triangle(p: Point, a: Point, b: Point, c: Point) -> bool {
    let area = (b.x - a.x) * (c.y - a.y) - (b.y - a.y) * (c.x - a.x);
    if area == 0.0 {
        return false;
    }
    let s = area.signum();
    let e0 = s * ((b.x - a.x) * (p.y - a.y) - (b.y - a.y) * (p.x - a.x));
    let e1 = s * ((c.x - b.x) * (p.y - b.y) - (c.y - b.y) * (p.x - b.x));
    let e2 = s * ((a.x - c.x) * (p.y - c.y) - (a.y - c.y) * (p.x - c.x));
    e0 >= 0.0 && e1 >= 0.0 && e2 >= 0.0
}

/// Signed distance to the nearest of a set of segments, the winning
/// segment's endpoints and the distance gradient with respect to them.
struct Nearest {
    d: f64,
    ends: [usize; 2],
    grad: [f64; 4],
}

fn nearest_segment(p: Point, verts: &[Point], edges: impl Iterator<Item = [usize; 2]>) -> Option<Nearest> {
    let mut best: Option<Nearest> = None;
    for [i, j] in edges {
        let (d, grad) = segment_distance(p, verts[i], verts[j]);
        if best.as_ref().is_none_or(|b| d < b.d) {
            best = Some(Nearest { d, ends: [i, j], grad });
        }
    }
    best
}

/// Geometry prepared once per rasterization call.
struct Scene<'a> {
    verts: &'a [Point],
    /// Faces rotated to start at their smallest index and sorted, so the
    /// floating-point union does not depend on the caller's face order.
    faces: Vec<[usize; 3]>,
    outline: Vec<[usize; 2]>,
    /// Per-face bounding boxes `(xmin, xmax, ymin, ymax)`.
    bounds: Vec<[f64; 4]>,
    cfg: RasterConfig,
}

impl<'a> Scene<'a> {
    fn new(verts: &'a [Point], faces: &'a FaceList, cfg: RasterConfig) -> Result<Self> {
        if !(cfg.tau > 0.0) {
            return Err(Error::invalid("rasterize", format!("tau = {} must be positive", cfg.tau)));
        }
        if let Some(i) = verts.iter().position(|p| !p.x.is_finite() || !p.y.is_finite()) {
            return Err(Error::non_finite("rasterize", format!("at vertex {i}")));
        }
        if let Some(f) = faces.faces.iter().find(|f| f.iter().any(|&i| i >= verts.len())) {
            return Err(Error::invalid(
                "rasterize",
                format!("face {f:?} indexes past {} vertices", verts.len()),
            ));
        }
        let mut canonical: Vec<[usize; 3]> = faces
            .faces
            .iter()
            .map(|&[a, b, c]| match a.min(b).min(c) {
                m if m == a => [a, b, c],
                m if m == b => [b, c, a],
                _ => [c, a, b],
            })
            .collect();
        canonical.sort_unstable();
        let bounds = canonical
            .iter()
            .map(|f| {
                let [a, b, c] = f.map(|i| verts[i]);
                [
                    a.x.min(b.x).min(c.x),
                    a.x.max(b.x).max(c.x),
                    a.y.min(b.y).min(c.y),
                    a.y.max(b.y).max(c.y),
                ]
            })
            .collect();
        Ok(Self {
            verts,
            faces: canonical,
            outline: faces.boundary_edges(),
            bounds,
            cfg,
        })
    }

    fn inside_any(&self, p: Point) -> bool {
        self.faces.iter().zip(&self.bounds).any(|(f, b)| {
            p.x >= b[0]
                && p.x <= b[1]
                && p.y >= b[2]
                && p.y <= b[3]
                && in_triangle(p, self.verts[f[0]], self.verts[f[1]], self.verts[f[2]])
        })
    }

    /// Mask value at `p`; when `upstream` is given, also adds
    /// `upstream · ∂mask/∂vertex` into `grad`.
    fn pixel(&self, p: Point, upstream: Option<(f64, &mut [[f64; 2]])>) -> f64 {
        let tau = self.cfg.tau;
        match self.cfg.union {
            SoftUnion::Outline => {
                let Some(near) = nearest_segment(p, self.verts, self.outline.iter().copied()) else {
                    return 0.0;
                };
                let sign = if self.inside_any(p) { -1.0 } else { 1.0 };
                let sd = sign * near.d;
                let m = logistic(-sd / tau);
                if let Some((g, grad)) = upstream {
                    if sd.abs() < SATURATION * tau {
                        let coef = g * -m * (1.0 - m) / tau * sign;
                        accumulate(grad, &near, coef);
                    }
                }
                m
            }
            SoftUnion::Product => {
                let mut occupancy = Vec::with_capacity(self.faces.len());
                let mut nearest = Vec::with_capacity(self.faces.len());
                for f in &self.faces {
                    let [a, b, c] = *f;
                    let near = nearest_segment(p, self.verts, [[a, b], [b, c], [c, a]].into_iter())
                        .expect("three edges");
                    let sign = if in_triangle(p, self.verts[a], self.verts[b], self.verts[c]) {
                        -1.0
                    } else {
                        1.0
                    };
                    occupancy.push(logistic(sign * near.d / -tau));
                    nearest.push((sign, near));
                }
                let empty: f64 = occupancy.iter().map(|o| 1.0 - o).product();
                if let Some((g, grad)) = upstream {
                    // Products of (1 - o) over all faces but one, via prefix/suffix.
                    let n = occupancy.len();
                    let mut suffix = vec![1.0; n + 1];
                    for i in (0..n).rev() {
                        suffix[i] = suffix[i + 1] * (1.0 - occupancy[i]);
                    }
                    let mut prefix = 1.0;
                    for i in 0..n {
                        let o = occupancy[i];
                        let (sign, near) = &nearest[i];
                        if near.d < SATURATION * tau {
                            let others = prefix * suffix[i + 1];
                            let coef = g * others * -o * (1.0 - o) / tau * sign;
                            accumulate(grad, near, coef);
                        }
                        prefix *= 1.0 - o;
                    }
                }
                1.0 - empty
            }
        }
    }
}

fn accumulate(grad: &mut [[f64; 2]], near: &Nearest, coef: f64) {
    let [i, j] = near.ends;
    grad[i][0] += coef * near.grad[0];
    grad[i][1] += coef * near.grad[1];
    grad[j][0] += coef * near.grad[2];
    grad[j][1] += coef * near.grad[3];
}

fn pixel_center(y: usize, x: usize) -> Point {
    Point::new(x as f64, y as f64)
}

/// Soft mask of the polygon's faces on an `h × w` grid of pixel centers.
pub fn rasterize(p: &Polygon, f: &FaceList, h: usize, w: usize, cfg: RasterConfig) -> Result<Mask> {
    let scene = Scene::new(p.vertices(), f, cfg)?;
    if f.is_empty() {
        return Ok(Mask::zeros(h, w));
    }
    Ok(Mask::from_fn(h, w, |y, x| scene.pixel(pixel_center(y, x), None) as f32))
}

/// Vector-Jacobian product of [`rasterize`]: per-vertex `(∂/∂x, ∂/∂y)` of
/// `Σ grad_mask · mask`.
pub fn rasterize_backward(
    p: &Polygon,
    f: &FaceList,
    h: usize,
    w: usize,
    cfg: RasterConfig,
    grad_mask: &[f32],
) -> Result<Vec<[f64; 2]>> {
    if grad_mask.len() != h * w {
        return Err(Error::shape(
            "rasterize_backward",
            format!("{} upstream values for a {h}x{w} mask", grad_mask.len()),
        ));
    }
    let scene = Scene::new(p.vertices(), f, cfg)?;
    let mut grad = vec![[0.0; 2]; p.len()];
    if f.is_empty() {
        return Ok(grad);
    }
    for y in 0..h {
        for x in 0..w {
            let g = grad_mask[y * w + x] as f64;
            if g != 0.0 {
                scene.pixel(pixel_center(y, x), Some((g, &mut grad)));
            }
        }
    }
    Ok(grad)
}

/// Binary pixel-center coverage by any face. Evaluation only.
pub fn rasterize_hard(p: &Polygon, f: &FaceList, h: usize, w: usize) -> Mask {
    let verts = p.vertices();
    let faces: Vec<[Point; 3]> = f
        .faces
        .iter()
        .filter(|t| t.iter().all(|&i| i < verts.len()))
        .map(|t| t.map(|i| verts[i]))
        .collect();
    Mask::from_fn(h, w, |y, x| {
        let c = pixel_center(y, x);
        let hit = faces.iter().any(|&[a, b, t]| in_triangle(c, a, b, t));
        if hit {
            1.0
        } else {
            0.0
        }
    })
}

struct RasterOp {
    faces: FaceList,
    h: usize,
    w: usize,
    cfg: RasterConfig,
}

impl Backward for RasterOp {
    fn backward(&self, inputs: &[&Tensor], _: &Tensor, grad: &Tensor, _: &[bool]) -> Vec<Option<Tensor>> {
        let poly = Polygon::from_tensor(inputs[0]).expect("validated in forward");
        let g = rasterize_backward(&poly, &self.faces, self.h, self.w, self.cfg, grad.data())
            .expect("validated in forward");
        let data = g.iter().flat_map(|v| [v[0] as f32, v[1] as f32]).collect();
        vec![Some(Tensor::new(inputs[0].shape().to_vec(), data).expect("k x 2"))]
    }
    fn name(&self) -> &'static str {
        "rasterize"
    }
}

impl Graph {
    /// Records [`rasterize`] on a `[k, 2]` vertex tensor; output is `[h, w]`.
    pub fn rasterize(&mut self, vertices: Var, faces: &FaceList, h: usize, w: usize, cfg: RasterConfig) -> Result<Var> {
        let poly = Polygon::from_tensor(self.value(vertices))?;
        let mask = rasterize(&poly, faces, h, w, cfg)?;
        let op = RasterOp {
            faces: faces.clone(),
            h,
            w,
            cfg,
        };
        Ok(self.record(op, &[vertices], mask.to_tensor()))
    }
}
