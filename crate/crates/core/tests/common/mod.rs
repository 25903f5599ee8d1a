//! Independent f64 reference implementations and finite-difference tools.
//!
//! Nothing here calls into the crate's numeric kernels; the oracles are
//! written straight from the definitions so they can judge them.
#![allow(dead_code)]

use acdr::geometry::{FaceList, Point};
use rand::Rng;

/// Central differences of `f` at `x`.
pub fn central_diff(f: impl Fn(&[f64]) -> f64, x: &[f64], eps: f64) -> Vec<f64> {
    let mut probe = x.to_vec();
    (0..x.len())
        .map(|i| {
            probe[i] = x[i] + eps;
            let up = f(&probe);
            probe[i] = x[i] - eps;
            let down = f(&probe);
            probe[i] = x[i];
            (up - down) / (2.0 * eps)
        })
        .collect()
}

/// `‖a − b‖ / max(‖a‖, ‖b‖)`; zero when both vanish.
pub fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let diff: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    let scale = norm(a).max(norm(b));
    if scale == 0.0 {
        0.0
    } else {
        norm(&diff) / scale
    }
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Values exactly representable in f32, so both sides see the same input.
pub fn random_f32s(rng: &mut impl Rng, n: usize, lo: f64, hi: f64) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(lo..hi) as f32 as f64).collect()
}

pub fn to_f32(v: &[f64]) -> Vec<f32> {
    v.iter().map(|&x| x as f32).collect()
}

pub fn to_f64(v: &[f32]) -> Vec<f64> {
    v.iter().map(|&x| x as f64).collect()
}

pub fn conv2d(
    x: &[f64],
    [n, c_in, h, w]: [usize; 4],
    wt: &[f64],
    [c_out, kh, kw]: [usize; 3],
    bias: Option<&[f64]>,
    stride: usize,
    pad: usize,
) -> Vec<f64> {
    let ho = (h + 2 * pad - kh) / stride + 1;
    let wo = (w + 2 * pad - kw) / stride + 1;
    let mut out = vec![0.0; n * c_out * ho * wo];
    for s in 0..n {
        for co in 0..c_out {
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut acc = bias.map_or(0.0, |b| b[co]);
                    for ci in 0..c_in {
                        for ki in 0..kh {
                            for kj in 0..kw {
                                let iy = (oy * stride + ki) as isize - pad as isize;
                                let ix = (ox * stride + kj) as isize - pad as isize;
                                if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                                    continue;
                                }
                                acc += x[((s * c_in + ci) * h + iy as usize) * w + ix as usize]
                                    * wt[((co * c_in + ci) * kh + ki) * kw + kj];
                            }
                        }
                    }
                    out[((s * c_out + co) * ho + oy) * wo + ox] = acc;
                }
            }
        }
    }
    out
}

pub fn maxpool(x: &[f64], [n, c, h, w]: [usize; 4], k: usize) -> Vec<f64> {
    let (oh, ow) = (h / k, w / k);
    let mut out = Vec::with_capacity(n * c * oh * ow);
    for plane in 0..n * c {
        for oy in 0..oh {
            for ox in 0..ow {
                let mut m = f64::NEG_INFINITY;
                for dy in 0..k {
                    for dx in 0..k {
                        m = m.max(x[plane * h * w + (oy * k + dy) * w + ox * k + dx]);
                    }
                }
                out.push(m);
            }
        }
    }
    out
}

/// Bilinear resize with corner pixels aligned.
pub fn resize(x: &[f64], [n, c, h, w]: [usize; 4], oh: usize, ow: usize) -> Vec<f64> {
    let src = |o: usize, len_in: usize, len_out: usize| {
        if len_out > 1 {
            o as f64 * (len_in - 1) as f64 / (len_out - 1) as f64
        } else {
            0.0
        }
    };
    let mut out = Vec::with_capacity(n * c * oh * ow);
    for plane in 0..n * c {
        let at = |y: usize, x_: usize| x[plane * h * w + y * w + x_];
        for oy in 0..oh {
            for ox in 0..ow {
                let (sy, sx) = (src(oy, h, oh), src(ox, w, ow));
                let (y0, x0) = (sy.floor() as usize, sx.floor() as usize);
                let (y1, x1) = ((y0 + 1).min(h - 1), (x0 + 1).min(w - 1));
                let (fy, fx) = (sy - y0 as f64, sx - x0 as f64);
                out.push(
                    (1.0 - fy) * ((1.0 - fx) * at(y0, x0) + fx * at(y0, x1))
                        + fy * ((1.0 - fx) * at(y1, x0) + fx * at(y1, x1)),
                );
            }
        }
    }
    out
}

/// Training-mode batch normalization with the biased batch variance.
pub fn batchnorm(x: &[f64], [n, c, h, w]: [usize; 4], gamma: &[f64], beta: &[f64], eps: f64) -> Vec<f64> {
    let hw = h * w;
    let mut out = vec![0.0; x.len()];
    for ch in 0..c {
        let idx = || (0..n).flat_map(move |s| (0..hw).map(move |i| (s * c + ch) * hw + i));
        let m = (n * hw) as f64;
        let mean = idx().map(|i| x[i]).sum::<f64>() / m;
        let var = idx().map(|i| (x[i] - mean).powi(2)).sum::<f64>() / m;
        for i in idx() {
            out[i] = gamma[ch] * (x[i] - mean) / (var + eps).sqrt() + beta[ch];
        }
    }
    out
}

pub fn mse(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>() / a.len() as f64
}

/// Bilinear lookup of a `[2, h, w]` field at `(x, y)`.
pub fn sample(field: &[f64], h: usize, w: usize, x: f64, y: f64) -> [f64; 2] {
    let x0 = (x.floor() as usize).min(w - 2);
    let y0 = (y.floor() as usize).min(h - 2);
    let (fx, fy) = (x - x0 as f64, y - y0 as f64);
    let mut out = [0.0; 2];
    for (c, o) in out.iter_mut().enumerate() {
        let at = |yy: usize, xx: usize| field[c * h * w + yy * w + xx];
        *o = (1.0 - fx) * (1.0 - fy) * at(y0, x0)
            + fx * (1.0 - fy) * at(y0, x0 + 1)
            + (1.0 - fx) * fy * at(y0 + 1, x0)
            + fx * fy * at(y0 + 1, x0 + 1);
    }
    out
}

pub fn segment_distance(p: [f64; 2], a: [f64; 2], b: [f64; 2]) -> f64 {
    let e = [b[0] - a[0], b[1] - a[1]];
    let len2 = e[0] * e[0] + e[1] * e[1];
    let t = if len2 == 0.0 {
        0.0
    } else {
        (((p[0] - a[0]) * e[0] + (p[1] - a[1]) * e[1]) / len2).clamp(0.0, 1.0)
    };
    (p[0] - a[0] - t * e[0]).hypot(p[1] - a[1] - t * e[1])
}

fn cross(o: [f64; 2], a: [f64; 2], b: [f64; 2]) -> f64 {
    (a[0] - o[0]) * (b[1] - o[1]) - (a[1] - o[1]) * (b[0] - o[0])
}

/// Barycentric inside test, boundary included.
pub fn in_triangle(p: [f64; 2], a: [f64; 2], b: [f64; 2], c: [f64; 2]) -> bool {
    let area = cross(a, b, c);
    if area == 0.0 {
        return false;
    }
    let l1 = cross(p, b, c) / area;
    let l2 = cross(a, p, c) / area;
    let l3 = cross(a, b, p) / area;
    l1 >= 0.0 && l2 >= 0.0 && l3 >= 0.0
}

/// Signed distance to a triangle, negative inside.
pub fn triangle_sd(p: [f64; 2], a: [f64; 2], b: [f64; 2], c: [f64; 2]) -> f64 {
    let d = segment_distance(p, a, b)
        .min(segment_distance(p, b, c))
        .min(segment_distance(p, c, a));
    if in_triangle(p, a, b, c) {
        -d
    } else {
        d
    }
}

fn logistic(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

/// Soft mask, faces merged as `1 − Π(1 − o_f)`.
pub fn soft_product(verts: &[[f64; 2]], faces: &FaceList, h: usize, w: usize, tau: f64) -> Vec<f64> {
    let mut out = Vec::with_capacity(h * w);
    for y in 0..h {
        for x in 0..w {
            let p = [x as f64, y as f64];
            let empty: f64 = faces
                .faces
                .iter()
                .map(|f| 1.0 - logistic(-triangle_sd(p, verts[f[0]], verts[f[1]], verts[f[2]]) / tau))
                .product();
            out.push(1.0 - empty);
        }
    }
    out
}

/// Edges used by exactly one face.
pub fn outline_edges(faces: &FaceList) -> Vec<[usize; 2]> {
    let mut all: Vec<[usize; 2]> = faces
        .faces
        .iter()
        .flat_map(|f| [[f[0], f[1]], [f[1], f[2]], [f[2], f[0]]])
        .map(|[a, b]| [a.min(b), a.max(b)])
        .collect();
    all.sort_unstable();
    let mut out = Vec::new();
    let mut i = 0;
    while i < all.len() {
        let mut j = i;
        while j < all.len() && all[j] == all[i] {
            j += 1;
        }
        if j - i == 1 {
            out.push(all[i]);
        }
        i = j;
    }
    out
}

/// Soft mask from the signed distance to the mesh outline.
pub fn soft_outline(verts: &[[f64; 2]], faces: &FaceList, h: usize, w: usize, tau: f64) -> Vec<f64> {
    let edges = outline_edges(faces);
    let mut out = Vec::with_capacity(h * w);
    for y in 0..h {
        for x in 0..w {
            let p = [x as f64, y as f64];
            let d = edges
                .iter()
                .map(|e| segment_distance(p, verts[e[0]], verts[e[1]]))
                .fold(f64::INFINITY, f64::min);
            let inside = faces
                .faces
                .iter()
                .any(|f| in_triangle(p, verts[f[0]], verts[f[1]], verts[f[2]]));
            let sd = if inside { -d } else { d };
            out.push(if edges.is_empty() { 0.0 } else { logistic(-sd / tau) });
        }
    }
    out
}

/// Pixel-center coverage of a convex polygon given in either orientation.
pub fn convex_coverage(poly: &[[f64; 2]], h: usize, w: usize) -> Vec<f64> {
    let k = poly.len();
    let mut out = Vec::with_capacity(h * w);
    for y in 0..h {
        for x in 0..w {
            let p = [x as f64, y as f64];
            let signs: Vec<f64> = (0..k).map(|i| cross(poly[i], poly[(i + 1) % k], p)).collect();
            let inside = signs.iter().all(|&s| s >= 0.0) || signs.iter().all(|&s| s <= 0.0);
            out.push(if inside { 1.0 } else { 0.0 });
        }
    }
    out
}

pub fn shoelace(poly: &[[f64; 2]]) -> f64 {
    let k = poly.len();
    (0..k)
        .map(|i| {
            let (a, b) = (poly[i], poly[(i + 1) % k]);
            a[0] * b[1] - b[0] * a[1]
        })
        .sum::<f64>()
        .abs()
        / 2.0
}

/// Convex hull by monotone chain, counter-clockwise in (x, y), no
/// collinear points.
pub fn convex_hull(mut pts: Vec<[f64; 2]>) -> Vec<[f64; 2]> {
    pts.sort_by(|a, b| a.partial_cmp(b).expect("finite"));
    pts.dedup();
    if pts.len() < 3 {
        return pts;
    }
    let mut hull: Vec<[f64; 2]> = Vec::new();
    for pass in 0..2 {
        let start = hull.len();
        let iter: Box<dyn Iterator<Item = &[f64; 2]>> = if pass == 0 {
            Box::new(pts.iter())
        } else {
            Box::new(pts.iter().rev())
        };
        for &p in iter {
            while hull.len() >= start + 2 && cross(hull[hull.len() - 2], hull[hull.len() - 1], p) <= 0.0 {
                hull.pop();
            }
            hull.push(p);
        }
        hull.pop();
    }
    hull
}

/// Circumcircle center and squared radius.
pub fn circumcircle(a: [f64; 2], b: [f64; 2], c: [f64; 2]) -> ([f64; 2], f64) {
    let d = 2.0 * (a[0] * (b[1] - c[1]) + b[0] * (c[1] - a[1]) + c[0] * (a[1] - b[1]));
    let sq = |p: [f64; 2]| p[0] * p[0] + p[1] * p[1];
    let ux = (sq(a) * (b[1] - c[1]) + sq(b) * (c[1] - a[1]) + sq(c) * (a[1] - b[1])) / d;
    let uy = (sq(a) * (c[0] - b[0]) + sq(b) * (a[0] - c[0]) + sq(c) * (b[0] - a[0])) / d;
    let r2 = (a[0] - ux).powi(2) + (a[1] - uy).powi(2);
    ([ux, uy], r2)
}

pub fn points(v: &[[f64; 2]]) -> Vec<Point> {
    v.iter().map(|p| Point::new(p[0], p[1])).collect()
}

pub fn pairs(v: &[Point]) -> Vec<[f64; 2]> {
    v.iter().map(|p| [p.x, p.y]).collect()
}

/// Per-step soft masks of the contour evolved through a static field,
/// clamping into the image after each step.
pub fn evolve_masks(
    p0: &[[f64; 2]],
    faces: &FaceList,
    field: &[f64],
    h: usize,
    w: usize,
    steps: usize,
    tau: f64,
    outline: bool,
) -> (Vec<Vec<[f64; 2]>>, Vec<Vec<f64>>) {
    let mut p = p0.to_vec();
    let mut polys = Vec::new();
    let mut masks = Vec::new();
    for _ in 0..steps {
        p = p
            .iter()
            .map(|&[x, y]| {
                let d = sample(field, h, w, x, y);
                [(x + d[0]).clamp(0.0, (w - 1) as f64), (y + d[1]).clamp(0.0, (h - 1) as f64)]
            })
            .collect();
        masks.push(if outline {
            soft_outline(&p, faces, h, w, tau)
        } else {
            soft_product(&p, faces, h, w, tau)
        });
        polys.push(p.clone());
    }
    (polys, masks)
}

/// Cyclic mean second-difference norm.
pub fn curvature(p: &[[f64; 2]]) -> f64 {
    let k = p.len();
    (0..k)
        .map(|j| {
            let (a, b, c) = (p[(j + k - 1) % k], p[j], p[(j + 1) % k]);
            (a[0] - 2.0 * b[0] + c[0]).hypot(a[1] - 2.0 * b[1] + c[1])
        })
        .sum::<f64>()
        / k as f64
}

pub fn balloon(m: &[f64]) -> f64 {
    m.iter().map(|v| 1.0 - v).sum::<f64>() / m.len() as f64
}
