//! Contour evolution along a static displacement field.
//!
//! The field is a `[2, h, w]` tensor: channel 0 moves vertices along `+x`
//! (columns), channel 1 along `+y` (rows), both in pixels. Each step
//! samples the field bilinearly at every vertex, adds the displacement and
//! clamps the result back onto the pixel grid.

use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};
use crate::geometry::{FaceList, Point, Polygon};
use crate::renderer::{rasterize_hard, Mask, RasterConfig};
use crate::tensor::{Backward, Graph, Tensor, Var};

/// Slack for points that drift past the grid edge by float rounding.
const RANGE_SLACK: f64 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EvolveMode {
    /// Soft masks after every step, for the loss.
    Train,
    /// A single hard mask of the final polygon.
    Eval,
}

/// Polygons `P⁰..P^T` plus masks: one soft mask per step in train mode,
/// the hard mask of `P^T` alone in eval mode.
#[derive(Clone, Debug)]
pub struct EvolutionTrace {
    pub polygons: Vec<Polygon>,
    pub faces: FaceList,
    pub masks: Vec<Mask>,
}

impl EvolutionTrace {
    pub fn last(&self) -> &Polygon {
        self.polygons.last().expect("at least P0")
    }

    /// Rows of `t,vertex_index,x,y`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("t,vertex_index,x,y\n");
        for (t, p) in self.polygons.iter().enumerate() {
            for (i, v) in p.vertices().iter().enumerate() {
                writeln!(out, "{t},{i},{},{}", v.x, v.y).expect("string write");
            }
        }
        out
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv()).map_err(|e| Error::io(path, e))
    }
}

fn field_dims(op: &'static str, field: &Tensor) -> Result<(usize, usize)> {
    match *field.shape() {
        [2, h, w] if h >= 1 && w >= 1 => Ok((h, w)),
        _ => Err(Error::shape(op, format!("field must be [2, h, w], got {:?}", field.shape()))),
    }
}

/// Corner texels and fractional offsets of a bilinear lookup.
struct Cell {
    x0: usize,
    x1: usize,
    y0: usize,
    y1: usize,
    fx: f64,
    fy: f64,
}

fn cell(op: &'static str, h: usize, w: usize, p: Point) -> Result<Cell> {
    let (xmax, ymax) = ((w - 1) as f64, (h - 1) as f64);
    let ok = |v: f64, hi: f64| v >= -RANGE_SLACK && v <= hi + RANGE_SLACK;
    if !ok(p.x, xmax) || !ok(p.y, ymax) {
        return Err(Error::invalid(
            op,
            format!("point ({}, {}) outside [0, {xmax}] x [0, {ymax}]", p.x, p.y),
        ));
    }
    let (x, y) = (p.x.clamp(0.0, xmax), p.y.clamp(0.0, ymax));
    let x0 = (x.floor() as usize).min(w.saturating_sub(2));
    let y0 = (y.floor() as usize).min(h.saturating_sub(2));
    Ok(Cell {
        x0,
        x1: (x0 + 1).min(w - 1),
        y0,
        y1: (y0 + 1).min(h - 1),
        fx: x - x0 as f64,
        fy: y - y0 as f64,
    })
}

impl Cell {
    fn weights(&self) -> [(usize, usize, f64); 4] {
        let (fx, fy) = (self.fx, self.fy);
        [
            (self.y0, self.x0, (1.0 - fx) * (1.0 - fy)),
            (self.y0, self.x1, fx * (1.0 - fy)),
            (self.y1, self.x0, (1.0 - fx) * fy),
            (self.y1, self.x1, fx * fy),
        ]
    }

    /// Value and `(∂/∂x, ∂/∂y)` of one channel.
    fn eval(&self, chan: &[f32], w: usize) -> (f64, f64, f64) {
        let at = |y: usize, x: usize| chan[y * w + x] as f64;
        let (a, b, c, d) = (at(self.y0, self.x0), at(self.y0, self.x1), at(self.y1, self.x0), at(self.y1, self.x1));
        let (fx, fy) = (self.fx, self.fy);
        let v = (1.0 - fx) * (1.0 - fy) * a + fx * (1.0 - fy) * b + (1.0 - fx) * fy * c + fx * fy * d;
        let dx = (1.0 - fy) * (b - a) + fy * (d - c);
        let dy = (1.0 - fx) * (c - a) + fx * (d - b);
        (v, dx, dy)
    }
}

/// Bilinear lookup of the displacement at `p`.
pub fn sample_field(field: &Tensor, p: Point) -> Result<[f64; 2]> {
    let (h, w) = field_dims("sample_field", field)?;
    let c = cell("sample_field", h, w, p)?;
    let data = field.data();
    let plane = h * w;
    Ok([c.eval(&data[..plane], w).0, c.eval(&data[plane..], w).0])
}

/// One update: move every vertex by the sampled field, then clamp into
/// `[0, w-1] × [0, h-1]`.
pub fn step(p: &Polygon, field: &Tensor) -> Result<Polygon> {
    let (h, w) = field_dims("step", field)?;
    let moved = p
        .vertices()
        .iter()
        .enumerate()
        .map(|(i, &v)| {
            let [dx, dy] = sample_field(field, v)?;
            if !dx.is_finite() || !dy.is_finite() {
                return Err(Error::non_finite("step", format!("displacement at vertex {i}")));
            }
            Ok(Point::new(v.x + dx, v.y + dy))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Polygon::new(moved)?.clamped(h, w))
}

/// Runs `iterations` steps from `p0` with `faces` fixed.
pub fn evolve(
    p0: &Polygon,
    faces: &FaceList,
    field: &Tensor,
    iterations: usize,
    mode: EvolveMode,
    raster: RasterConfig,
) -> Result<EvolutionTrace> {
    if iterations == 0 {
        return Err(Error::invalid("evolve", "iterations must be at least 1"));
    }
    let (h, w) = field_dims("evolve", field)?;
    let mut polygons = vec![p0.clone()];
    let mut masks = Vec::new();
    for _ in 0..iterations {
        let next = step(polygons.last().expect("nonempty"), field)?;
        if mode == EvolveMode::Train {
            masks.push(crate::renderer::rasterize(&next, faces, h, w, raster)?);
        }
        polygons.push(next);
    }
    if mode == EvolveMode::Eval {
        masks.push(rasterize_hard(polygons.last().expect("nonempty"), faces, h, w));
    }
    Ok(EvolutionTrace {
        polygons,
        faces: faces.clone(),
        masks,
    })
}

struct SampleOp;

impl Backward for SampleOp {
    fn backward(&self, inputs: &[&Tensor], _: &Tensor, grad: &Tensor, needs: &[bool]) -> Vec<Option<Tensor>> {
        let (field, points) = (inputs[0], inputs[1]);
        let [_, h, w] = *field.shape() else { unreachable!() };
        let plane = h * w;
        let data = field.data();
        let mut gfield = needs[0].then(|| Tensor::zeros(field.shape()));
        let mut gpoints = needs[1].then(|| Tensor::zeros(points.shape()));
        for (i, (pt, g)) in points.data().chunks_exact(2).zip(grad.data().chunks_exact(2)).enumerate() {
            let c = cell("sample_field", h, w, Point::new(pt[0] as f64, pt[1] as f64)).expect("checked in forward");
            if let Some(gf) = gfield.as_mut() {
                let gf = gf.data_mut();
                for (ch, &gc) in g.iter().enumerate() {
                    for (y, x, wt) in c.weights() {
                        gf[ch * plane + y * w + x] += (wt * gc as f64) as f32;
                    }
                }
            }
            if let Some(gp) = gpoints.as_mut() {
                let (mut gx, mut gy) = (0.0, 0.0);
                for (ch, &gc) in g.iter().enumerate() {
                    let (_, dx, dy) = c.eval(&data[ch * plane..(ch + 1) * plane], w);
                    gx += gc as f64 * dx;
                    gy += gc as f64 * dy;
                }
                gp.data_mut()[2 * i] = gx as f32;
                gp.data_mut()[2 * i + 1] = gy as f32;
            }
        }
        vec![gfield, gpoints]
    }
    fn name(&self) -> &'static str {
        "sample_field"
    }
}

struct ClampOp {
    xmax: f32,
    ymax: f32,
}

impl Backward for ClampOp {
    fn backward(&self, inputs: &[&Tensor], _: &Tensor, grad: &Tensor, _: &[bool]) -> Vec<Option<Tensor>> {
        let mut g = grad.clone();
        for (i, (gv, &v)) in g.data_mut().iter_mut().zip(inputs[0].data()).enumerate() {
            let hi = if i % 2 == 0 { self.xmax } else { self.ymax };
            if !(0.0..=hi).contains(&v) {
                *gv = 0.0;
            }
        }
        vec![Some(g)]
    }
    fn name(&self) -> &'static str {
        "clamp_points"
    }
}

/// Polygons and soft masks of an evolution recorded on a graph.
pub struct GraphTrace {
    pub polygons: Vec<Var>,
    pub masks: Vec<Var>,
}

impl Graph {
    /// Bilinear samples of a `[2, h, w]` field at `[k, 2]` points, as `[k, 2]`.
    pub fn sample_field(&mut self, field: Var, points: Var) -> Result<Var> {
        let f = self.value(field);
        let (h, w) = field_dims("sample_field", f)?;
        let pts = self.value(points);
        if pts.rank() != 2 || pts.shape()[1] != 2 {
            return Err(Error::shape("sample_field", format!("points must be [k, 2], got {:?}", pts.shape())));
        }
        let plane = h * w;
        let mut out = Vec::with_capacity(pts.numel());
        for pt in pts.data().chunks_exact(2) {
            let c = cell("sample_field", h, w, Point::new(pt[0] as f64, pt[1] as f64))?;
            out.push(c.eval(&f.data()[..plane], w).0 as f32);
            out.push(c.eval(&f.data()[plane..], w).0 as f32);
        }
        let value = Tensor::new(pts.shape().to_vec(), out)?;
        Ok(self.record(SampleOp, &[field, points], value))
    }

    /// Clamps `[k, 2]` points into `[0, w-1] × [0, h-1]`; clamped
    /// coordinates pass no gradient.
    pub fn clamp_points(&mut self, points: Var, h: usize, w: usize) -> Var {
        let (xmax, ymax) = ((w.max(1) - 1) as f32, (h.max(1) - 1) as f32);
        let value = self.value(points).clone();
        let mut out = value;
        for (i, v) in out.data_mut().iter_mut().enumerate() {
            let hi = if i % 2 == 0 { xmax } else { ymax };
            *v = v.clamp(0.0, hi);
        }
        self.record(ClampOp { xmax, ymax }, &[points], out)
    }

    /// One differentiable contour update.
    pub fn contour_step(&mut self, points: Var, field: Var) -> Result<Var> {
        let (h, w) = field_dims("contour_step", self.value(field))?;
        let d = self.sample_field(field, points)?;
        if !self.value(d).is_finite() {
            return Err(Error::non_finite("contour_step", "in sampled displacement"));
        }
        let moved = self.add(points, d)?;
        Ok(self.clamp_points(moved, h, w))
    }

    /// Differentiable evolution with a soft mask after every step.
    pub fn evolve(
        &mut self,
        p0: &Polygon,
        faces: &FaceList,
        field: Var,
        iterations: usize,
        raster: RasterConfig,
    ) -> Result<GraphTrace> {
        if iterations == 0 {
            return Err(Error::invalid("evolve", "iterations must be at least 1"));
        }
        let (h, w) = field_dims("evolve", self.value(field))?;
        let mut polygons = vec![self.constant(p0.to_tensor())];
        let mut masks = Vec::with_capacity(iterations);
        for _ in 0..iterations {
            let next = self.contour_step(*polygons.last().expect("nonempty"), field)?;
            masks.push(self.rasterize(next, faces, h, w, raster)?);
            polygons.push(next);
        }
        Ok(GraphTrace { polygons, masks })
    }
}
