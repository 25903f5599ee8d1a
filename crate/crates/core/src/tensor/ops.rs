//! Differentiable operations recorded on a [`Graph`].

use rand::Rng;

use super::gemm::{sgemm, Layout};
use super::graph::{Backward, Graph, Var};
use super::{nchw, with_nchw, Tensor};
use crate::error::{Error, Result};

pub const BN_EPS: f32 = 1e-5;
pub const BN_MOMENTUM: f32 = 0.1;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

fn same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::shape(op, format!("{:?} vs {:?}", a.shape(), b.shape())));
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Elementwise

struct AddOp;

impl Backward for AddOp {
    fn backward(&self, _: &[&Tensor], _: &Tensor, grad: &Tensor, needs: &[bool]) -> Vec<Option<Tensor>> {
        needs.iter().map(|&n| n.then(|| grad.clone())).collect()
    }
    fn name(&self) -> &'static str {
        "add"
    }
}

struct SubOp;

impl Backward for SubOp {
    fn backward(&self, _: &[&Tensor], _: &Tensor, grad: &Tensor, needs: &[bool]) -> Vec<Option<Tensor>> {
        vec![
            needs[0].then(|| grad.clone()),
            needs[1].then(|| grad.map(|g| -g)),
        ]
    }
    fn name(&self) -> &'static str {
        "sub"
    }
}

struct MulOp;

impl Backward for MulOp {
    fn backward(&self, inputs: &[&Tensor], _: &Tensor, grad: &Tensor, needs: &[bool]) -> Vec<Option<Tensor>> {
        let times = |other: &Tensor| {
            let data = grad.data().iter().zip(other.data()).map(|(g, o)| g * o).collect();
            Tensor::new(grad.shape().to_vec(), data).expect("same shape")
        };
        vec![
            needs[0].then(|| times(inputs[1])),
            needs[1].then(|| times(inputs[0])),
        ]
    }
    fn name(&self) -> &'static str {
        "mul"
    }
}

struct AffineOp {
    scale: f32,
}

impl Backward for AffineOp {
    fn backward(&self, _: &[&Tensor], _: &Tensor, grad: &Tensor, _: &[bool]) -> Vec<Option<Tensor>> {
        vec![Some(grad.map(|g| g * self.scale))]
    }
    fn name(&self) -> &'static str {
        "affine"
    }
}

struct SumOp {
    scale: f32,
}

impl Backward for SumOp {
    fn backward(&self, inputs: &[&Tensor], _: &Tensor, grad: &Tensor, _: &[bool]) -> Vec<Option<Tensor>> {
        vec![Some(Tensor::full(inputs[0].shape(), grad.item() * self.scale))]
    }
    fn name(&self) -> &'static str {
        "sum"
    }
}

struct ReluOp;

impl Backward for ReluOp {
    fn backward(&self, inputs: &[&Tensor], _: &Tensor, grad: &Tensor, _: &[bool]) -> Vec<Option<Tensor>> {
        let data = grad
            .data()
            .iter()
            .zip(inputs[0].data())
            .map(|(&g, &x)| if x > 0.0 { g } else { 0.0 })
            .collect();
        vec![Some(Tensor::new(grad.shape().to_vec(), data).expect("same shape"))]
    }
    fn name(&self) -> &'static str {
        "relu"
    }
}

struct SigmoidOp;

impl Backward for SigmoidOp {
    fn backward(&self, _: &[&Tensor], output: &Tensor, grad: &Tensor, _: &[bool]) -> Vec<Option<Tensor>> {
        let data = grad
            .data()
            .iter()
            .zip(output.data())
            .map(|(&g, &s)| g * s * (1.0 - s))
            .collect();
        vec![Some(Tensor::new(grad.shape().to_vec(), data).expect("same shape"))]
    }
    fn name(&self) -> &'static str {
        "sigmoid"
    }
}

/// Survivor mask already multiplied by `1 / (1 - p)`.
struct DropoutOp {
    mask: Vec<f32>,
}

impl Backward for DropoutOp {
    fn backward(&self, _: &[&Tensor], _: &Tensor, grad: &Tensor, _: &[bool]) -> Vec<Option<Tensor>> {
        let data = grad.data().iter().zip(&self.mask).map(|(g, m)| g * m).collect();
        vec![Some(Tensor::new(grad.shape().to_vec(), data).expect("same shape"))]
    }
    fn name(&self) -> &'static str {
        "dropout"
    }
}

struct ReshapeOp;

impl Backward for ReshapeOp {
    fn backward(&self, inputs: &[&Tensor], _: &Tensor, grad: &Tensor, _: &[bool]) -> Vec<Option<Tensor>> {
        vec![Some(grad.clone().reshape(inputs[0].shape()).expect("same numel"))]
    }
    fn name(&self) -> &'static str {
        "reshape"
    }
}

struct SelectOp {
    index: usize,
}

impl Backward for SelectOp {
    fn backward(&self, inputs: &[&Tensor], _: &Tensor, grad: &Tensor, _: &[bool]) -> Vec<Option<Tensor>> {
        let mut full = Tensor::zeros(inputs[0].shape());
        let inner = grad.numel();
        full.data_mut()[self.index * inner..(self.index + 1) * inner].copy_from_slice(grad.data());
        vec![Some(full)]
    }
    fn name(&self) -> &'static str {
        "select"
    }
}

struct ConcatOp {
    outer: usize,
    inner_a: usize,
    inner_b: usize,
}

impl Backward for ConcatOp {
    fn backward(&self, inputs: &[&Tensor], _: &Tensor, grad: &Tensor, needs: &[bool]) -> Vec<Option<Tensor>> {
        let (ia, ib) = (self.inner_a, self.inner_b);
        let g = grad.data();
        let mut ga = needs[0].then(|| Vec::with_capacity(self.outer * ia));
        let mut gb = needs[1].then(|| Vec::with_capacity(self.outer * ib));
        for o in 0..self.outer {
            let base = o * (ia + ib);
            if let Some(ga) = ga.as_mut() {
                ga.extend_from_slice(&g[base..base + ia]);
            }
            if let Some(gb) = gb.as_mut() {
                gb.extend_from_slice(&g[base + ia..base + ia + ib]);
            }
        }
        vec![
            ga.map(|d| Tensor::new(inputs[0].shape().to_vec(), d).expect("concat grad")),
            gb.map(|d| Tensor::new(inputs[1].shape().to_vec(), d).expect("concat grad")),
        ]
    }
    fn name(&self) -> &'static str {
        "concat"
    }
}

struct MseOp;

impl Backward for MseOp {
    fn backward(&self, inputs: &[&Tensor], _: &Tensor, grad: &Tensor, needs: &[bool]) -> Vec<Option<Tensor>> {
        let n = inputs[0].numel() as f32;
        let scale = 2.0 * grad.item() / n;
        let diff: Vec<f32> = inputs[0]
            .data()
            .iter()
            .zip(inputs[1].data())
            .map(|(a, b)| scale * (a - b))
            .collect();
        let shape = inputs[0].shape().to_vec();
        let gb = needs[1].then(|| Tensor::new(shape.clone(), diff.iter().map(|d| -d).collect()).expect("mse"));
        let ga = needs[0].then(|| Tensor::new(shape, diff).expect("mse"));
        vec![ga, gb]
    }
    fn name(&self) -> &'static str {
        "mse"
    }
}

impl Graph {
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        same_shape("add", ta, tb)?;
        let data = ta.data().iter().zip(tb.data()).map(|(x, y)| x + y).collect();
        let out = Tensor::new(ta.shape().to_vec(), data)?;
        Ok(self.record(AddOp, &[a, b], out))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        same_shape("sub", ta, tb)?;
        let data = ta.data().iter().zip(tb.data()).map(|(x, y)| x - y).collect();
        let out = Tensor::new(ta.shape().to_vec(), data)?;
        Ok(self.record(SubOp, &[a, b], out))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        same_shape("mul", ta, tb)?;
        let data = ta.data().iter().zip(tb.data()).map(|(x, y)| x * y).collect();
        let out = Tensor::new(ta.shape().to_vec(), data)?;
        Ok(self.record(MulOp, &[a, b], out))
    }

    /// `scale · x + shift`, elementwise.
    pub fn affine(&mut self, x: Var, scale: f32, shift: f32) -> Var {
        let out = self.value(x).map(|v| scale * v + shift);
        self.record(AffineOp { scale }, &[x], out)
    }

    pub fn scale(&mut self, x: Var, scale: f32) -> Var {
        self.affine(x, scale, 0.0)
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let total: f64 = self.value(x).data().iter().map(|&v| v as f64).sum();
        self.record(SumOp { scale: 1.0 }, &[x], Tensor::scalar(total as f32))
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let n = t.numel().max(1);
        let total: f64 = t.data().iter().map(|&v| v as f64).sum();
        let scale = 1.0 / n as f32;
        self.record(SumOp { scale }, &[x], Tensor::scalar((total / n as f64) as f32))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| v.max(0.0));
        self.record(ReluOp, &[x], out)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| 1.0 / (1.0 + (-v).exp()));
        self.record(SigmoidOp, &[x], out)
    }

    /// Inverted dropout. Identity in eval mode or when `p == 0`.
    pub fn dropout(&mut self, x: Var, p: f32, mode: Mode) -> Result<Var> {
        if !(0.0..1.0).contains(&p) {
            return Err(Error::invalid("dropout", format!("p = {p} outside [0, 1)")));
        }
        if mode == Mode::Eval || p == 0.0 {
            return Ok(x);
        }
        let keep = 1.0 / (1.0 - p);
        let numel = self.value(x).numel();
        let rng = self.rng();
        let mask: Vec<f32> = (0..numel)
            .map(|_| if rng.random::<f32>() < p { 0.0 } else { keep })
            .collect();
        let t = self.value(x);
        let data = t.data().iter().zip(&mask).map(|(v, m)| v * m).collect();
        let out = Tensor::new(t.shape().to_vec(), data)?;
        Ok(self.record(DropoutOp { mask }, &[x], out))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(x).clone().reshape(shape)?;
        Ok(self.record(ReshapeOp, &[x], out))
    }

    /// Slice `index` out of the leading axis.
    pub fn select(&mut self, x: Var, index: usize) -> Result<Var> {
        let t = self.value(x);
        if t.rank() == 0 || index >= t.shape()[0] {
            return Err(Error::invalid(
                "select",
                format!("index {index} out of range for shape {:?}", t.shape()),
            ));
        }
        let out = t.index_axis0(index);
        Ok(self.record(SelectOp { index }, &[x], out))
    }

    pub fn concat(&mut self, a: Var, b: Var, axis: usize) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let (sa, sb) = (ta.shape(), tb.shape());
        if axis >= sa.len() {
            return Err(Error::invalid(
                "concat",
                format!("axis {axis} out of range for rank {}", sa.len()),
            ));
        }
        let compatible = sa.len() == sb.len()
            && sa.iter().zip(sb).enumerate().all(|(i, (x, y))| i == axis || x == y);
        if !compatible {
            return Err(Error::shape(
                "concat",
                format!("{sa:?} and {sb:?} differ off axis {axis}"),
            ));
        }
        let outer: usize = sa[..axis].iter().product();
        let inner_a: usize = sa[axis..].iter().product();
        let inner_b: usize = sb[axis..].iter().product();
        let mut data = Vec::with_capacity(ta.numel() + tb.numel());
        for o in 0..outer {
            data.extend_from_slice(&ta.data()[o * inner_a..(o + 1) * inner_a]);
            data.extend_from_slice(&tb.data()[o * inner_b..(o + 1) * inner_b]);
        }
        let mut shape = sa.to_vec();
        shape[axis] += sb[axis];
        let out = Tensor::new(shape, data)?;
        Ok(self.record(ConcatOp { outer, inner_a, inner_b }, &[a, b], out))
    }

    /// Mean squared difference over all elements.
    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        same_shape("mse", ta, tb)?;
        let n = ta.numel().max(1);
        let total: f64 = ta
            .data()
            .iter()
            .zip(tb.data())
            .map(|(&x, &y)| {
                let d = (x - y) as f64;
                d * d
            })
            .sum();
        Ok(self.record(MseOp, &[a, b], Tensor::scalar((total / n as f64) as f32)))
    }
}

// ---------------------------------------------------------------------------
// Convolution

#[derive(Clone, Copy)]
struct ConvGeom {
    n: usize,
    c_in: usize,
    h: usize,
    w: usize,
    c_out: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
}

impl ConvGeom {
    fn patch(&self) -> usize {
        self.c_in * self.kh * self.kw
    }

    fn positions(&self) -> usize {
        self.ho * self.wo
    }

    /// 1×1, stride 1, no padding: the input plane is already the column matrix.
    fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.stride == 1 && self.pad == 0
    }

    /// Output columns `[lo, hi)` whose input column `ox·stride + kj - pad`
    /// falls inside the image.
    fn valid_cols(&self, kj: usize) -> (usize, usize) {
        let s = self.stride;
        let lo = self.pad.saturating_sub(kj).div_ceil(s).min(self.wo);
        let hi = if self.w + self.pad > kj {
            ((self.w + self.pad - kj - 1) / s + 1).min(self.wo)
        } else {
            0
        };
        (lo, hi.max(lo))
    }

    fn im2col(&self, x: &[f32], col: &mut [f32]) {
        let p = self.positions();
        for ci in 0..self.c_in {
            let plane = &x[ci * self.h * self.w..(ci + 1) * self.h * self.w];
            for ki in 0..self.kh {
                for kj in 0..self.kw {
                    let row = (ci * self.kh + ki) * self.kw + kj;
                    let dst = &mut col[row * p..(row + 1) * p];
                    let (lo, hi) = self.valid_cols(kj);
                    for oy in 0..self.ho {
                        let iy = (oy * self.stride + ki) as isize - self.pad as isize;
                        let out_row = &mut dst[oy * self.wo..(oy + 1) * self.wo];
                        if iy < 0 || iy >= self.h as isize {
                            out_row.fill(0.0);
                            continue;
                        }
                        let src = &plane[iy as usize * self.w..(iy as usize + 1) * self.w];
                        out_row[..lo].fill(0.0);
                        out_row[hi..].fill(0.0);
                        let first = lo * self.stride + kj - self.pad;
                        if self.stride == 1 {
                            out_row[lo..hi].copy_from_slice(&src[first..first + (hi - lo)]);
                        } else {
                            for (i, o) in out_row[lo..hi].iter_mut().enumerate() {
                                *o = src[first + i * self.stride];
                            }
                        }
                    }
                }
            }
        }
    }

    fn col2im(&self, col: &[f32], dx: &mut [f32]) {
        let p = self.positions();
        for ci in 0..self.c_in {
            let plane = &mut dx[ci * self.h * self.w..(ci + 1) * self.h * self.w];
            for ki in 0..self.kh {
                for kj in 0..self.kw {
                    let row = (ci * self.kh + ki) * self.kw + kj;
                    let src = &col[row * p..(row + 1) * p];
                    let (lo, hi) = self.valid_cols(kj);
                    for oy in 0..self.ho {
                        let iy = (oy * self.stride + ki) as isize - self.pad as isize;
                        if iy < 0 || iy >= self.h as isize {
                            continue;
                        }
                        let dst = &mut plane[iy as usize * self.w..(iy as usize + 1) * self.w];
                        let from = &src[oy * self.wo + lo..oy * self.wo + hi];
                        let first = lo * self.stride + kj - self.pad;
                        if self.stride == 1 {
                            for (d, v) in dst[first..first + (hi - lo)].iter_mut().zip(from) {
                                *d += v;
                            }
                        } else {
                            for (i, v) in from.iter().enumerate() {
                                dst[first + i * self.stride] += v;
                            }
                        }
                    }
                }
            }
        }
    }
}

struct Conv2dOp {
    geom: ConvGeom,
    has_bias: bool,
}

impl Backward for Conv2dOp {
    fn backward(&self, inputs: &[&Tensor], _: &Tensor, grad: &Tensor, needs: &[bool]) -> Vec<Option<Tensor>> {
        let g = self.geom;
        let (x, weight) = (inputs[0], inputs[1]);
        let (kk, p) = (g.patch(), g.positions());
        let in_plane = g.c_in * g.h * g.w;
        let out_plane = g.c_out * p;
        let mut dx = needs[0].then(|| Tensor::zeros(x.shape()));
        let mut dw = needs[1].then(|| Tensor::zeros(weight.shape()));
        let mut col = if g.is_pointwise() { Vec::new() } else { vec![0.0; kk * p] };
        let mut dcol = if needs[0] && !g.is_pointwise() {
            vec![0.0; kk * p]
        } else {
            Vec::new()
        };

        for s in 0..g.n {
            let xs = &x.data()[s * in_plane..(s + 1) * in_plane];
            let gs = &grad.data()[s * out_plane..(s + 1) * out_plane];
            if let Some(dw) = dw.as_mut() {
                let cols: &[f32] = if g.is_pointwise() {
                    xs
                } else {
                    g.im2col(xs, &mut col);
                    &col
                };
                // dW += dY · colᵀ
                sgemm(g.c_out, p, kk, gs, Layout::rows(p), cols, Layout::transposed(p), 1.0, dw.data_mut());
            }
            if let Some(dx) = dx.as_mut() {
                let dxs = &mut dx.data_mut()[s * in_plane..(s + 1) * in_plane];
                if g.is_pointwise() {
                    // dX = Wᵀ · dY
                    sgemm(kk, g.c_out, p, weight.data(), Layout::transposed(kk), gs, Layout::rows(p), 0.0, dxs);
                } else {
                    sgemm(kk, g.c_out, p, weight.data(), Layout::transposed(kk), gs, Layout::rows(p), 0.0, &mut dcol);
                    g.col2im(&dcol, dxs);
                }
            }
        }

        let db = (self.has_bias && needs[2]).then(|| {
            let mut db = vec![0.0f32; g.c_out];
            for s in 0..g.n {
                for (co, acc) in db.iter_mut().enumerate() {
                    let start = s * out_plane + co * p;
                    *acc += grad.data()[start..start + p].iter().sum::<f32>();
                }
            }
            Tensor::new(vec![g.c_out], db).expect("bias grad")
        });

        let mut out = vec![dx, dw];
        if self.has_bias {
            out.push(db);
        }
        out
    }
    fn name(&self) -> &'static str {
        "conv2d"
    }
}

impl Graph {
    /// 2-D cross-correlation. `input` is `[c_in,h,w]` or `[n,c_in,h,w]`,
    /// `weight` is `[c_out,c_in,kh,kw]`, `bias` is `[c_out]`.
    pub fn conv2d(
        &mut self,
        input: Var,
        weight: Var,
        bias: Option<Var>,
        stride: usize,
        padding: usize,
    ) -> Result<Var> {
        let (xt, wt) = (self.value(input), self.value(weight));
        let (n, c_in, h, w) = nchw("conv2d", xt.shape())?;
        let [c_out, wc_in, kh, kw] = *wt.shape() else {
            return Err(Error::shape(
                "conv2d",
                format!("weight must be [c_out,c_in,kh,kw], got {:?}", wt.shape()),
            ));
        };
        if wc_in != c_in {
            return Err(Error::shape(
                "conv2d",
                format!(
                    "input {:?} has {c_in} channels but weight {:?} expects {wc_in}",
                    xt.shape(),
                    wt.shape()
                ),
            ));
        }
        if kh % 2 == 0 || kw % 2 == 0 {
            return Err(Error::invalid("conv2d", format!("kernel {kh}x{kw} must be odd")));
        }
        if stride == 0 {
            return Err(Error::invalid("conv2d", "stride must be at least 1"));
        }
        if h + 2 * padding < kh || w + 2 * padding < kw {
            return Err(Error::shape(
                "conv2d",
                format!("kernel {kh}x{kw} larger than padded input {:?}", xt.shape()),
            ));
        }
        if let Some(b) = bias {
            if self.value(b).shape() != [c_out] {
                return Err(Error::shape(
                    "conv2d",
                    format!("bias {:?} does not match {c_out} output channels", self.value(b).shape()),
                ));
            }
        }
        let geom = ConvGeom {
            n,
            c_in,
            h,
            w,
            c_out,
            kh,
            kw,
            stride,
            pad: padding,
            ho: (h + 2 * padding - kh) / stride + 1,
            wo: (w + 2 * padding - kw) / stride + 1,
        };
        let (kk, p) = (geom.patch(), geom.positions());
        let mut out = vec![0.0f32; n * c_out * p];
        let mut col = if geom.is_pointwise() { Vec::new() } else { vec![0.0; kk * p] };
        let bias_values = bias.map(|b| self.value(b).data().to_vec());
        for s in 0..n {
            let xs = &xt.data()[s * c_in * h * w..(s + 1) * c_in * h * w];
            let os = &mut out[s * c_out * p..(s + 1) * c_out * p];
            if let Some(bv) = &bias_values {
                for (co, &b) in bv.iter().enumerate() {
                    os[co * p..(co + 1) * p].fill(b);
                }
            }
            let cols: &[f32] = if geom.is_pointwise() {
                xs
            } else {
                geom.im2col(xs, &mut col);
                &col
            };
            sgemm(c_out, kk, p, wt.data(), Layout::rows(kk), cols, Layout::rows(p), 1.0, os);
        }
        let out = Tensor::new(with_nchw(xt.rank(), n, c_out, geom.ho, geom.wo), out)?;
        let mut inputs = vec![input, weight];
        inputs.extend(bias);
        Ok(self.record(
            Conv2dOp {
                geom,
                has_bias: bias.is_some(),
            },
            &inputs,
            out,
        ))
    }
}

// ---------------------------------------------------------------------------
// Pooling and resampling

struct MaxPoolOp {
    argmax: Vec<usize>,
}

impl Backward for MaxPoolOp {
    fn backward(&self, inputs: &[&Tensor], _: &Tensor, grad: &Tensor, _: &[bool]) -> Vec<Option<Tensor>> {
        let mut dx = Tensor::zeros(inputs[0].shape());
        let d = dx.data_mut();
        for (&src, &g) in self.argmax.iter().zip(grad.data()) {
            d[src] += g;
        }
        vec![Some(dx)]
    }
    fn name(&self) -> &'static str {
        "maxpool2d"
    }
}

/// Source index pair and blend weight for one output coordinate.
#[derive(Clone, Copy)]
struct Tap {
    lo: usize,
    hi: usize,
    frac: f32,
}

/// Align-corners sampling positions along one axis.
fn taps(len_in: usize, len_out: usize) -> Vec<Tap> {
    (0..len_out)
        .map(|o| {
            let src = if len_out > 1 {
                o as f64 * (len_in - 1) as f64 / (len_out - 1) as f64
            } else {
                0.0
            };
            let lo = (src.floor() as usize).min(len_in - 1);
            let hi = (lo + 1).min(len_in - 1);
            Tap {
                lo,
                hi,
                frac: (src - lo as f64) as f32,
            }
        })
        .collect()
}

struct ResizeOp {
    ty: Vec<Tap>,
    tx: Vec<Tap>,
    planes: usize,
    h: usize,
    w: usize,
}

impl Backward for ResizeOp {
    fn backward(&self, inputs: &[&Tensor], _: &Tensor, grad: &Tensor, _: &[bool]) -> Vec<Option<Tensor>> {
        let mut dx = Tensor::zeros(inputs[0].shape());
        let (oh, ow) = (self.ty.len(), self.tx.len());
        let d = dx.data_mut();
        for plane in 0..self.planes {
            let src = &mut d[plane * self.h * self.w..(plane + 1) * self.h * self.w];
            let g = &grad.data()[plane * oh * ow..(plane + 1) * oh * ow];
            for (oy, ty) in self.ty.iter().enumerate() {
                for (ox, tx) in self.tx.iter().enumerate() {
                    let v = g[oy * ow + ox];
                    let (fy, fx) = (ty.frac, tx.frac);
                    src[ty.lo * self.w + tx.lo] += v * (1.0 - fy) * (1.0 - fx);
                    src[ty.lo * self.w + tx.hi] += v * (1.0 - fy) * fx;
                    src[ty.hi * self.w + tx.lo] += v * fy * (1.0 - fx);
                    src[ty.hi * self.w + tx.hi] += v * fy * fx;
                }
            }
        }
        vec![Some(dx)]
    }
    fn name(&self) -> &'static str {
        "bilinear_resize"
    }
}

impl Graph {
    /// Non-overlapping max pooling with a square `window`. Ties go to the
    /// first element in row-major order.
    pub fn maxpool2d(&mut self, input: Var, window: usize) -> Result<Var> {
        let xt = self.value(input);
        let (n, c, h, w) = nchw("maxpool2d", xt.shape())?;
        if window == 0 || h % window != 0 || w % window != 0 {
            return Err(Error::shape(
                "maxpool2d",
                format!("spatial size {h}x{w} not divisible by window {window}"),
            ));
        }
        let (oh, ow) = (h / window, w / window);
        let mut out = Vec::with_capacity(n * c * oh * ow);
        let mut argmax = Vec::with_capacity(n * c * oh * ow);
        let x = xt.data();
        for plane in 0..n * c {
            let base = plane * h * w;
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut best = base + oy * window * w + ox * window;
                    for dy in 0..window {
                        for dx in 0..window {
                            let idx = base + (oy * window + dy) * w + ox * window + dx;
                            if x[idx] > x[best] {
                                best = idx;
                            }
                        }
                    }
                    out.push(x[best]);
                    argmax.push(best);
                }
            }
        }
        let out = Tensor::new(with_nchw(xt.rank(), n, c, oh, ow), out)?;
        Ok(self.record(MaxPoolOp { argmax }, &[input], out))
    }

    /// Bilinear resampling with aligned corners.
    pub fn bilinear_resize(&mut self, input: Var, out_h: usize, out_w: usize) -> Result<Var> {
        if out_h == 0 || out_w == 0 {
            return Err(Error::invalid(
                "bilinear_resize",
                format!("output size {out_h}x{out_w} must be positive"),
            ));
        }
        let xt = self.value(input);
        let (n, c, h, w) = nchw("bilinear_resize", xt.shape())?;
        let (ty, tx) = (taps(h, out_h), taps(w, out_w));
        let mut out = Vec::with_capacity(n * c * out_h * out_w);
        for plane in 0..n * c {
            let src = &xt.data()[plane * h * w..(plane + 1) * h * w];
            for t in &ty {
                for s in &tx {
                    let top = src[t.lo * w + s.lo] * (1.0 - s.frac) + src[t.lo * w + s.hi] * s.frac;
                    let bottom = src[t.hi * w + s.lo] * (1.0 - s.frac) + src[t.hi * w + s.hi] * s.frac;
                    out.push(top * (1.0 - t.frac) + bottom * t.frac);
                }
            }
        }
        let out = Tensor::new(with_nchw(xt.rank(), n, c, out_h, out_w), out)?;
        let op = ResizeOp {
            ty,
            tx,
            planes: n * c,
            h,
            w,
        };
        Ok(self.record(op, &[input], out))
    }
}

// ---------------------------------------------------------------------------
// Batch normalization

/// Per-channel running estimates used in eval mode.
#[derive(Clone, Debug, PartialEq)]
pub struct RunningStats {
    pub mean: Vec<f32>,
    pub var: Vec<f32>,
}

impl RunningStats {
    pub fn new(channels: usize) -> Self {
        Self {
            mean: vec![0.0; channels],
            var: vec![1.0; channels],
        }
    }
}

struct BatchNormOp {
    n: usize,
    c: usize,
    hw: usize,
    xhat: Vec<f32>,
    inv_std: Vec<f32>,
    batch_stats: bool,
}

impl Backward for BatchNormOp {
    fn backward(&self, inputs: &[&Tensor], _: &Tensor, grad: &Tensor, needs: &[bool]) -> Vec<Option<Tensor>> {
        let gamma = inputs[1].data();
        let dy = grad.data();
        let m = (self.n * self.hw) as f64;
        let mut dgamma = vec![0.0f64; self.c];
        let mut dbeta = vec![0.0f64; self.c];
        for s in 0..self.n {
            for ch in 0..self.c {
                let start = (s * self.c + ch) * self.hw;
                for i in start..start + self.hw {
                    dgamma[ch] += (dy[i] * self.xhat[i]) as f64;
                    dbeta[ch] += dy[i] as f64;
                }
            }
        }
        let dx = needs[0].then(|| {
            let mut dx = vec![0.0f32; dy.len()];
            for ch in 0..self.c {
                let g = gamma[ch] as f64;
                let inv = self.inv_std[ch] as f64;
                // Sums of dxhat and dxhat·xhat, where dxhat = dy·gamma.
                let (sum_d, sum_dx) = (dbeta[ch] * g, dgamma[ch] * g);
                for s in 0..self.n {
                    let start = (s * self.c + ch) * self.hw;
                    for i in start..start + self.hw {
                        let dxhat = dy[i] as f64 * g;
                        dx[i] = if self.batch_stats {
                            (inv / m * (m * dxhat - sum_d - self.xhat[i] as f64 * sum_dx)) as f32
                        } else {
                            (dxhat * inv) as f32
                        };
                    }
                }
            }
            Tensor::new(inputs[0].shape().to_vec(), dx).expect("bn dx")
        });
        let to_tensor = |v: Vec<f64>| Tensor::new(vec![self.c], v.into_iter().map(|x| x as f32).collect()).expect("bn");
        vec![
            dx,
            needs[1].then(|| to_tensor(dgamma)),
            needs[2].then(|| to_tensor(dbeta)),
        ]
    }
    fn name(&self) -> &'static str {
        "batchnorm2d"
    }
}

impl Graph {
    /// Batch normalization over `(n, h, w)` per channel.
    ///
    /// Train mode normalizes with the biased batch variance and moves
    /// `stats` toward the batch mean and unbiased variance by
    /// [`BN_MOMENTUM`]; eval mode normalizes with `stats`.
    pub fn batchnorm2d(
        &mut self,
        input: Var,
        gamma: Var,
        beta: Var,
        stats: &mut RunningStats,
        mode: Mode,
    ) -> Result<Var> {
        let xt = self.value(input);
        let (n, c, h, w) = nchw("batchnorm2d", xt.shape())?;
        let hw = h * w;
        if n * hw == 0 {
            return Err(Error::invalid("batchnorm2d", format!("empty batch {:?}", xt.shape())));
        }
        for (what, t) in [("gamma", self.value(gamma)), ("beta", self.value(beta))] {
            if t.shape() != [c] {
                return Err(Error::shape(
                    "batchnorm2d",
                    format!("{what} {:?} does not match {c} channels", t.shape()),
                ));
            }
        }
        if stats.mean.len() != c || stats.var.len() != c {
            return Err(Error::shape(
                "batchnorm2d",
                format!("running stats hold {} channels, input has {c}", stats.mean.len()),
            ));
        }
        let x = xt.data();
        let m = (n * hw) as f64;
        let (mean, var): (Vec<f64>, Vec<f64>) = match mode {
            Mode::Train => {
                let mut mean = vec![0.0f64; c];
                let mut sq = vec![0.0f64; c];
                for s in 0..n {
                    for ch in 0..c {
                        let start = (s * c + ch) * hw;
                        mean[ch] += x[start..start + hw].iter().map(|&v| v as f64).sum::<f64>();
                    }
                }
                mean.iter_mut().for_each(|v| *v /= m);
                for s in 0..n {
                    for ch in 0..c {
                        let start = (s * c + ch) * hw;
                        sq[ch] += x[start..start + hw]
                            .iter()
                            .map(|&v| (v as f64 - mean[ch]).powi(2))
                            .sum::<f64>();
                    }
                }
                let var: Vec<f64> = sq.iter().map(|v| v / m).collect();
                let unbias = if m > 1.0 { m / (m - 1.0) } else { 1.0 };
                for ch in 0..c {
                    stats.mean[ch] = (1.0 - BN_MOMENTUM) * stats.mean[ch] + BN_MOMENTUM * mean[ch] as f32;
                    stats.var[ch] = (1.0 - BN_MOMENTUM) * stats.var[ch] + BN_MOMENTUM * (var[ch] * unbias) as f32;
                }
                (mean, var)
            }
            Mode::Eval => (
                stats.mean.iter().map(|&v| v as f64).collect(),
                stats.var.iter().map(|&v| v as f64).collect(),
            ),
        };
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + BN_EPS as f64).sqrt()).collect();
        let (gv, bv) = (self.value(gamma).data(), self.value(beta).data());
        let mut xhat = vec![0.0f32; x.len()];
        let mut out = vec![0.0f32; x.len()];
        for s in 0..n {
            for ch in 0..c {
                let start = (s * c + ch) * hw;
                for i in start..start + hw {
                    let xh = ((x[i] as f64 - mean[ch]) * inv_std[ch]) as f32;
                    xhat[i] = xh;
                    out[i] = gv[ch] * xh + bv[ch];
                }
            }
        }
        let out = Tensor::new(xt.shape().to_vec(), out)?;
        let op = BatchNormOp {
            n,
            c,
            hw,
            xhat,
            inv_std: inv_std.iter().map(|&v| v as f32).collect(),
            batch_stats: mode == Mode::Train,
        };
        Ok(self.record(op, &[input, gamma, beta], out))
    }
}
