//! Polygons, the fixed initial contour and Delaunay face lists.
//!
//! Coordinates are continuous pixel units: `x` is the column, `y` the row,
//! and `(0, 0)` is the center of the top-left pixel.

use std::collections::HashMap;
use std::f64::consts::PI;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Point {
    pub x: f64,
    pub y: f64,
}

impl Point {
    pub const fn new(x: f64, y: f64) -> Self {
        Self { x, y }
    }

    pub fn dist(self, other: Point) -> f64 {
        (self.x - other.x).hypot(self.y - other.y)
    }
}

/// Closed contour; the last vertex connects back to the first.
#[derive(Clone, Debug, PartialEq)]
pub struct Polygon {
    vertices: Vec<Point>,
}

impl Polygon {
    pub fn new(vertices: Vec<Point>) -> Result<Self> {
        if vertices.len() < 3 {
            return Err(Error::invalid(
                "polygon",
                format!("need at least 3 vertices, got {}", vertices.len()),
            ));
        }
        if let Some(i) = vertices.iter().position(|p| !p.x.is_finite() || !p.y.is_finite()) {
            return Err(Error::non_finite("polygon", format!("at vertex {i}")));
        }
        Ok(Self { vertices })
    }

    pub fn vertices(&self) -> &[Point] {
        &self.vertices
    }

    pub fn len(&self) -> usize {
        self.vertices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vertices.is_empty()
    }

    /// `[k, 2]` tensor of `(x, y)` rows.
    pub fn to_tensor(&self) -> Tensor {
        let data = self
            .vertices
            .iter()
            .flat_map(|p| [p.x as f32, p.y as f32])
            .collect();
        Tensor::new(vec![self.vertices.len(), 2], data).expect("k x 2")
    }

    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        match *t.shape() {
            [_, 2] => Self::new(
                t.data()
                    .chunks_exact(2)
                    .map(|c| Point::new(c[0] as f64, c[1] as f64))
                    .collect(),
            ),
            _ => Err(Error::shape(
                "polygon",
                format!("expected [k, 2] vertex tensor, got {:?}", t.shape()),
            )),
        }
    }

    /// Clamps every vertex into `[0, w-1] × [0, h-1]`.
    pub fn clamped(&self, h: usize, w: usize) -> Self {
        let (xmax, ymax) = ((w.max(1) - 1) as f64, (h.max(1) - 1) as f64);
        Self {
            vertices: self
                .vertices
                .iter()
                .map(|p| Point::new(p.x.clamp(0.0, xmax), p.y.clamp(0.0, ymax)))
                .collect(),
        }
    }

    pub fn within(&self, h: usize, w: usize) -> bool {
        let (xmax, ymax) = ((w.max(1) - 1) as f64, (h.max(1) - 1) as f64);
        self.vertices
            .iter()
            .all(|p| (0.0..=xmax).contains(&p.x) && (0.0..=ymax).contains(&p.y))
    }

    /// Maps vertices between two raster resolutions, keeping pixel
    /// centers aligned.
    pub fn rescaled(&self, from: (usize, usize), to: (usize, usize)) -> Self {
        let sy = to.0 as f64 / from.0 as f64;
        let sx = to.1 as f64 / from.1 as f64;
        Self {
            vertices: self
                .vertices
                .iter()
                .map(|p| Point::new((p.x + 0.5) * sx - 0.5, (p.y + 0.5) * sy - 0.5))
                .collect(),
        }
    }
}

/// Triangles as index triplets into a vertex list.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct FaceList {
    pub faces: Vec<[usize; 3]>,
}

impl FaceList {
    pub fn len(&self) -> usize {
        self.faces.len()
    }

    pub fn is_empty(&self) -> bool {
        self.faces.is_empty()
    }

    /// Edges used by exactly one face, i.e. the outline of the mesh.
    /// Returned sorted so the result does not depend on face order.
    pub fn boundary_edges(&self) -> Vec<[usize; 2]> {
        let mut count: HashMap<(usize, usize), usize> = HashMap::new();
        for f in &self.faces {
            for e in 0..3 {
                let (a, b) = (f[e], f[(e + 1) % 3]);
                *count.entry((a.min(b), a.max(b))).or_default() += 1;
            }
        }
        let mut edges: Vec<[usize; 2]> = count
            .into_iter()
            .filter(|&(_, n)| n == 1)
            .map(|((a, b), _)| [a, b])
            .collect();
        edges.sort_unstable();
        edges
    }
}

/// `k` points counterclockwise (in `x`-right, `y`-down pixel axes, starting
/// at angle 0 along `+x`) on a circle of the given diameter centered in the
/// image. Vertices falling outside the pixel grid are clamped onto it.
pub fn init_circle(h: usize, w: usize, k: usize, diameter: f64) -> Result<Polygon> {
    if k < 3 {
        return Err(Error::invalid("init_circle", format!("k = {k} must be at least 3")));
    }
    if !(diameter > 0.0) || diameter > h.min(w) as f64 {
        return Err(Error::invalid(
            "init_circle",
            format!("diameter {diameter} does not fit a {h}x{w} image"),
        ));
    }
    let (cx, cy) = ((w as f64 - 1.0) / 2.0, (h as f64 - 1.0) / 2.0);
    let r = diameter / 2.0;
    let vertices = (0..k)
        .map(|j| {
            let a = 2.0 * PI * j as f64 / k as f64;
            Point::new(cx + r * a.cos(), cy + r * a.sin())
        })
        .collect();
    Ok(Polygon::new(vertices)?.clamped(h, w))
}

/// Absolute shoelace area.
pub fn polygon_area(p: &Polygon) -> f64 {
    signed_area(p.vertices()).abs()
}

pub(crate) fn signed_area(v: &[Point]) -> f64 {
    let n = v.len();
    (0..n)
        .map(|i| {
            let (a, b) = (v[i], v[(i + 1) % n]);
            a.x * b.y - b.x * a.y
        })
        .sum::<f64>()
        / 2.0
}

pub fn triangle_area(a: Point, b: Point, c: Point) -> f64 {
    orient(a, b, c).abs() / 2.0
}

/// Twice the signed area of `abc`; positive when counterclockwise.
pub fn orient(a: Point, b: Point, c: Point) -> f64 {
    (b.x - a.x) * (c.y - a.y) - (b.y - a.y) * (c.x - a.x)
}

// ---------------------------------------------------------------------------
// Bowyer–Watson

const GHOST: usize = usize::MAX;

fn coord(p: Point) -> robust::Coord<f64> {
    robust::Coord { x: p.x, y: p.y }
}

/// Exact orientation sign; positive when `abc` turns counterclockwise.
fn orient_sign(a: Point, b: Point, c: Point) -> i8 {
    sign(robust::orient2d(coord(a), coord(b), coord(c)))
}

/// Exact in-circle sign for counterclockwise `abc`: positive when `d` lies
/// strictly inside the circumcircle.
fn incircle_sign(a: Point, b: Point, c: Point, d: Point) -> i8 {
    sign(robust::incircle(coord(a), coord(b), coord(c), coord(d)))
}

fn sign(v: f64) -> i8 {
    if v > 0.0 {
        1
    } else if v < 0.0 {
        -1
    } else {
        0
    }
}

#[derive(Clone, Copy)]
struct Tri {
    v: [usize; 3],
    alive: bool,
}

impl Tri {
    fn is_ghost(&self) -> bool {
        self.v.contains(&GHOST)
    }
}

/// Delaunay triangulation by incremental Bowyer–Watson insertion.
///
/// The outside of the hull is covered by ghost triangles sharing one vertex
/// at infinity, so no bounding super-triangle is needed. Cocircular ties are
/// broken as if each newly inserted point were lifted infinitesimally above
/// every older point, which places it outside circles through four or more
/// cocircular points; the result is a valid Delaunay triangulation of the
/// perturbed input. Faces are returned counterclockwise.
pub fn delaunay(points: &[Point]) -> Result<FaceList> {
    let n = points.len();
    if n < 3 {
        return Err(Error::invalid("delaunay", format!("need at least 3 points, got {n}")));
    }
    if let Some(i) = points.iter().position(|p| !p.x.is_finite() || !p.y.is_finite()) {
        return Err(Error::non_finite("delaunay", format!("at point {i}")));
    }
    let seed = (2..n)
        .find(|&j| orient_sign(points[0], points[1], points[j]) != 0 && points[0] != points[1])
        .ok_or_else(|| Error::invalid("delaunay", format!("all {n} points are collinear")))?;
    let (mut a, mut b, c) = (0, 1, seed);
    if orient_sign(points[a], points[b], points[c]) < 0 {
        std::mem::swap(&mut a, &mut b);
    }
    let mut tris = vec![
        Tri { v: [a, b, c], alive: true },
        Tri { v: [b, a, GHOST], alive: true },
        Tri { v: [c, b, GHOST], alive: true },
        Tri { v: [a, c, GHOST], alive: true },
    ];

    for p in (2..n).filter(|&i| i != seed) {
        insert(points, &mut tris, p)?;
        if tris.len() > 8 * n {
            tris.retain(|t| t.alive);
        }
    }

    let faces = tris
        .iter()
        .filter(|t| t.alive && !t.is_ghost())
        .map(|t| t.v)
        .collect();
    Ok(FaceList { faces })
}

fn in_conflict(points: &[Point], t: &Tri, p: Point) -> bool {
    match t.v.iter().position(|&v| v == GHOST) {
        None => {
            let [a, b, c] = t.v.map(|i| points[i]);
            incircle_sign(a, b, c, p) > 0
        }
        Some(g) => {
            // Ghost triangle over hull edge u→v (interior to the right).
            let u = points[t.v[(g + 1) % 3]];
            let v = points[t.v[(g + 2) % 3]];
            match orient_sign(u, v, p) {
                1 => true,
                -1 => false,
                _ => {
                    let dot = (p.x - u.x) * (v.x - u.x) + (p.y - u.y) * (v.y - u.y);
                    let len2 = (v.x - u.x).powi(2) + (v.y - u.y).powi(2);
                    dot > 0.0 && dot < len2
                }
            }
        }
    }
}

fn insert(points: &[Point], tris: &mut Vec<Tri>, p: usize) -> Result<()> {
    let pt = points[p];
    let cavity: Vec<usize> = (0..tris.len())
        .filter(|&i| tris[i].alive && in_conflict(points, &tris[i], pt))
        .collect();
    if cavity.is_empty() {
        return Err(Error::invalid(
            "delaunay",
            format!("point {p} at ({}, {}) duplicates an earlier point", pt.x, pt.y),
        ));
    }
    let mut edges: HashMap<(usize, usize), usize> = HashMap::new();
    for &i in &cavity {
        let v = tris[i].v;
        for e in 0..3 {
            *edges.entry((v[e], v[(e + 1) % 3])).or_default() += 1;
        }
    }
    let mut boundary: Vec<(usize, usize)> = edges
        .keys()
        .filter(|&&(u, v)| !edges.contains_key(&(v, u)))
        .copied()
        .collect();
    boundary.sort_unstable();
    for &(u, v) in &boundary {
        if u != GHOST && v != GHOST && orient_sign(points[u], points[v], pt) <= 0 {
            return Err(Error::invalid(
                "delaunay",
                format!("degenerate configuration while inserting point {p}"),
            ));
        }
    }
    for &i in &cavity {
        tris[i].alive = false;
    }
    for (u, v) in boundary {
        // Keep the ghost vertex in the last slot's cyclic position.
        tris.push(Tri {
            v: [u, v, p],
            alive: true,
        });
    }
    Ok(())
}
