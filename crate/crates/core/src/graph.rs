//! Eager reverse-mode automatic differentiation over [`Tensor`]s.
//!
//! A [`Graph`] is a tape: every operation evaluates immediately and records a
//! backward closure. Values are therefore available mid-construction, which
//! the loss stack relies on (validity masks and clip thresholds are computed
//! from forward values and re-enter the tape as constants).
//!
//! The op set is exactly what the pipeline needs: elementwise arithmetic with
//! scalar broadcasting, reductions, pooling/resizing, channel concat/softmax.
//! Convolution, pixel-adaptive convolution, bilinear sampling and rigid
//! warping live in their owning modules as additional `impl Graph` blocks.

use std::cell::RefCell;

use crate::tensor::Tensor;

pub type NodeId = usize;

type BackFn = Box<dyn Fn(&Tensor) -> Vec<(NodeId, Tensor)>>;
pub(crate) type BackFnAlias = BackFn;

struct Node {
    value: Tensor,
    needs_grad: bool,
    back: Option<BackFn>,
}

/// Reverse-mode tape. One graph per forward pass; parameters enter as leaves.
#[derive(Default)]
pub struct Graph {
    nodes: RefCell<Vec<Node>>,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Leaf that does not require gradients.
    pub fn constant(&self, value: Tensor) -> NodeId {
        self.push(value, false, None)
    }

    /// Leaf that accumulates gradients.
    pub fn param(&self, value: Tensor) -> NodeId {
        self.push(value, true, None)
    }

    pub fn value(&self, id: NodeId) -> Tensor {
        self.nodes.borrow()[id].value.clone()
    }

    pub fn shape(&self, id: NodeId) -> Vec<usize> {
        self.nodes.borrow()[id].value.shape().to_vec()
    }

    pub fn needs_grad(&self, id: NodeId) -> bool {
        self.nodes.borrow()[id].needs_grad
    }

    pub(crate) fn push(&self, value: Tensor, needs_grad: bool, back: Option<BackFn>) -> NodeId {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            needs_grad,
            back,
        });
        nodes.len() - 1
    }

    pub(crate) fn unary_op(
        &self,
        x: NodeId,
        forward: impl Fn(f64) -> f64,
        // derivative as a function of (input, output) per element
        deriv: impl Fn(f64, f64) -> f64 + 'static,
    ) -> NodeId {
        let xv = self.value(x);
        let yv = xv.map(&forward);
        let needs = self.needs_grad(x);
        let back: Option<BackFn> = if needs {
            let xv2 = xv.clone();
            let yv2 = yv.clone();
            Some(Box::new(move |g: &Tensor| {
                let mut gx = g.clone();
                {
                    let d = gx.data_mut();
                    for (i, dv) in d.iter_mut().enumerate() {
                        *dv *= deriv(xv2.data()[i], yv2.data()[i]);
                    }
                }
                vec![(x, gx)]
            }))
        } else {
            None
        };
        self.push(yv, needs, back)
    }

    // ---- elementwise unary -------------------------------------------------

    pub fn neg(&self, x: NodeId) -> NodeId {
        self.unary_op(x, |v| -v, |_, _| -1.0)
    }

    pub fn exp(&self, x: NodeId) -> NodeId {
        self.unary_op(x, f64::exp, |_, y| y)
    }

    pub fn ln(&self, x: NodeId) -> NodeId {
        self.unary_op(x, f64::ln, |v, _| 1.0 / v)
    }

    pub fn sqrt(&self, x: NodeId) -> NodeId {
        self.unary_op(x, f64::sqrt, |_, y| 0.5 / y)
    }

    pub fn square(&self, x: NodeId) -> NodeId {
        self.unary_op(x, |v| v * v, |v, _| 2.0 * v)
    }

    pub fn recip(&self, x: NodeId) -> NodeId {
        self.unary_op(x, |v| 1.0 / v, |v, _| -1.0 / (v * v))
    }

    pub fn abs(&self, x: NodeId) -> NodeId {
        self.unary_op(x, f64::abs, |v, _| {
            if v > 0.0 {
                1.0
            } else if v < 0.0 {
                -1.0
            } else {
                0.0
            }
        })
    }

    pub fn relu(&self, x: NodeId) -> NodeId {
        self.unary_op(x, |v| v.max(0.0), |v, _| if v > 0.0 { 1.0 } else { 0.0 })
    }

    pub fn sigmoid(&self, x: NodeId) -> NodeId {
        self.unary_op(
            x,
            |v| 1.0 / (1.0 + (-v).exp()),
            |_, y| y * (1.0 - y),
        )
    }

    pub fn add_const(&self, x: NodeId, c: f64) -> NodeId {
        self.unary_op(x, move |v| v + c, |_, _| 1.0)
    }

    pub fn mul_const(&self, x: NodeId, c: f64) -> NodeId {
        self.unary_op(x, move |v| v * c, move |_, _| c)
    }

    /// `min(x, c)` elementwise; gradient passes where `x <= c` (ties follow
    /// the un-clipped branch, so clipping at the maximum is a full identity).
    pub fn clamp_max_const(&self, x: NodeId, c: f64) -> NodeId {
        self.unary_op(
            x,
            move |v| v.min(c),
            move |v, _| if v <= c { 1.0 } else { 0.0 },
        )
    }

    /// `max(x, c)` elementwise; gradient passes only where `x > c`.
    pub fn clamp_min_const(&self, x: NodeId, c: f64) -> NodeId {
        self.unary_op(
            x,
            move |v| v.max(c),
            move |v, _| if v > c { 1.0 } else { 0.0 },
        )
    }

    // ---- elementwise binary with scalar broadcasting ------------------------

    fn binary_op(
        &self,
        a: NodeId,
        b: NodeId,
        forward: impl Fn(f64, f64) -> f64,
        da: impl Fn(f64, f64) -> f64 + 'static,
        db: impl Fn(f64, f64) -> f64 + 'static,
    ) -> NodeId {
        let av = self.value(a);
        let bv = self.value(b);
        let (out_shape, a_scalar, b_scalar) = broadcast_shapes(av.shape(), bv.shape());
        let n: usize = out_shape.iter().product();
        let mut data = Vec::with_capacity(n);
        for i in 0..n {
            let x = av.data()[if a_scalar { 0 } else { i }];
            let y = bv.data()[if b_scalar { 0 } else { i }];
            data.push(forward(x, y));
        }
        let out = Tensor::new(out_shape, data);
        let na = self.needs_grad(a);
        let nb = self.needs_grad(b);
        let needs = na || nb;
        let back: Option<BackFn> = if needs {
            let av2 = av.clone();
            let bv2 = bv.clone();
            Some(Box::new(move |g: &Tensor| {
                let mut out = Vec::new();
                if na {
                    out.push((a, reduce_for(&av2, g, &bv2, &da, a_scalar, b_scalar, true)));
                }
                if nb {
                    out.push((b, reduce_for(&bv2, g, &av2, &db, a_scalar, b_scalar, false)));
                }
                out
            }))
        } else {
            None
        };
        self.push(out, needs, back)
    }

    pub fn add(&self, a: NodeId, b: NodeId) -> NodeId {
        self.binary_op(a, b, |x, y| x + y, |_, _| 1.0, |_, _| 1.0)
    }

    pub fn sub(&self, a: NodeId, b: NodeId) -> NodeId {
        self.binary_op(a, b, |x, y| x - y, |_, _| 1.0, |_, _| -1.0)
    }

    pub fn mul(&self, a: NodeId, b: NodeId) -> NodeId {
        self.binary_op(a, b, |x, y| x * y, |_, y| y, |x, _| x)
    }

    pub fn div(&self, a: NodeId, b: NodeId) -> NodeId {
        self.binary_op(
            a,
            b,
            |x, y| x / y,
            |_, y| 1.0 / y,
            |x, y| -x / (y * y),
        )
    }

    // ---- reductions ----------------------------------------------------------

    pub fn sum(&self, x: NodeId) -> NodeId {
        let xv = self.value(x);
        let out = Tensor::scalar(xv.sum());
        let needs = self.needs_grad(x);
        let shape = xv.shape().to_vec();
        let back: Option<BackFn> = if needs {
            Some(Box::new(move |g: &Tensor| {
                vec![(x, Tensor::full(shape.clone(), g.item()))]
            }))
        } else {
            None
        };
        self.push(out, needs, back)
    }

    pub fn mean(&self, x: NodeId) -> NodeId {
        let n = self.value(x).len();
        let s = self.sum(x);
        self.mul_const(s, 1.0 / n as f64)
    }

    /// Masked mean: `sum(x * mask) / count`, with `mask` a constant tensor and
    /// `count` fixed by the caller (usually the number of mask-ones).
    pub fn masked_mean(&self, x: NodeId, mask: &Tensor, count: f64) -> NodeId {
        let m = self.constant(mask.clone());
        let prod = self.mul(x, m);
        let s = self.sum(prod);
        self.mul_const(s, 1.0 / count.max(1.0))
    }

    // ---- spatial ops on NCHW tensors ----------------------------------------

    /// 3x3 box mean with the window clipped at image borders (each output is
    /// the mean of the 4..9 in-bounds neighbours).
    pub fn mean_pool3x3(&self, x: NodeId) -> NodeId {
        let xv = self.value(x);
        let (n, c, h, w) = xv.dims4();
        let mut out = vec![0.0; xv.len()];
        for ni in 0..n {
            for ci in 0..c {
                let base = (ni * c + ci) * h * w;
                for y in 0..h {
                    for xx in 0..w {
                        let mut acc = 0.0;
                        let mut cnt = 0.0;
                        for dy in -1i64..=1 {
                            for dx in -1i64..=1 {
                                let yy = y as i64 + dy;
                                let xc = xx as i64 + dx;
                                if yy >= 0 && yy < h as i64 && xc >= 0 && xc < w as i64 {
                                    acc += xv.data()[base + yy as usize * w + xc as usize];
                                    cnt += 1.0;
                                }
                            }
                        }
                        out[base + y * w + xx] = acc / cnt;
                    }
                }
            }
        }
        let out = Tensor::new(xv.shape().to_vec(), out);
        let needs = self.needs_grad(x);
        let back: Option<BackFn> = if needs {
            Some(Box::new(move |g: &Tensor| {
                let mut gx = vec![0.0; g.len()];
                for ni in 0..n {
                    for ci in 0..c {
                        let base = (ni * c + ci) * h * w;
                        for y in 0..h {
                            for xx in 0..w {
                                let mut cnt = 0.0;
                                for dy in -1i64..=1 {
                                    for dx in -1i64..=1 {
                                        let yy = y as i64 + dy;
                                        let xc = xx as i64 + dx;
                                        if yy >= 0 && yy < h as i64 && xc >= 0 && xc < w as i64 {
                                            cnt += 1.0;
                                        }
                                    }
                                }
                                let gv = g.data()[base + y * w + xx] / cnt;
                                for dy in -1i64..=1 {
                                    for dx in -1i64..=1 {
                                        let yy = y as i64 + dy;
                                        let xc = xx as i64 + dx;
                                        if yy >= 0 && yy < h as i64 && xc >= 0 && xc < w as i64 {
                                            gx[base + yy as usize * w + xc as usize] += gv;
                                        }
                                    }
                                }
                            }
                        }
                    }
                }
                vec![(x, Tensor::new(g.shape().to_vec(), gx))]
            }))
        } else {
            None
        };
        self.push(out, needs, back)
    }

    pub fn upsample_nearest2x(&self, x: NodeId) -> NodeId {
        let xv = self.value(x);
        let (n, c, h, w) = xv.dims4();
        let (oh, ow) = (h * 2, w * 2);
        let mut out = vec![0.0; n * c * oh * ow];
        for ni in 0..n {
            for ci in 0..c {
                let ib = (ni * c + ci) * h * w;
                let ob = (ni * c + ci) * oh * ow;
                for y in 0..oh {
                    for xx in 0..ow {
                        out[ob + y * ow + xx] = xv.data()[ib + (y / 2) * w + (xx / 2)];
                    }
                }
            }
        }
        let out = Tensor::new(vec![n, c, oh, ow], out);
        let needs = self.needs_grad(x);
        let back: Option<BackFn> = if needs {
            Some(Box::new(move |g: &Tensor| {
                let mut gx = vec![0.0; n * c * h * w];
                for ni in 0..n {
                    for ci in 0..c {
                        let ib = (ni * c + ci) * h * w;
                        let ob = (ni * c + ci) * oh * ow;
                        for y in 0..oh {
                            for xx in 0..ow {
                                gx[ib + (y / 2) * w + (xx / 2)] += g.data()[ob + y * ow + xx];
                            }
                        }
                    }
                }
                vec![(x, Tensor::new(vec![n, c, h, w], gx))]
            }))
        } else {
            None
        };
        self.push(out, needs, back)
    }

    /// Bilinear resize with half-pixel-centre sampling.
    pub fn resize_bilinear(&self, x: NodeId, oh: usize, ow: usize) -> NodeId {
        let xv = self.value(x);
        let (n, c, h, w) = xv.dims4();
        if oh == h && ow == w {
            // no-op resize; still emit an identity node for uniform wiring
            return self.mul_const(x, 1.0);
        }
        let sy = h as f64 / oh as f64;
        let sx = w as f64 / ow as f64;
        // Precompute interpolation taps per output row/column.
        let taps = |o: usize, scale: f64, size: usize| -> (usize, usize, f64) {
            let pos = ((o as f64 + 0.5) * scale - 0.5).clamp(0.0, (size - 1) as f64);
            let i0 = pos.floor() as usize;
            let i1 = (i0 + 1).min(size - 1);
            (i0, i1, pos - i0 as f64)
        };
        let row_taps: Vec<(usize, usize, f64)> = (0..oh).map(|y| taps(y, sy, h)).collect();
        let col_taps: Vec<(usize, usize, f64)> = (0..ow).map(|xx| taps(xx, sx, w)).collect();
        let mut out = vec![0.0; n * c * oh * ow];
        for ni in 0..n {
            for ci in 0..c {
                let ib = (ni * c + ci) * h * w;
                let ob = (ni * c + ci) * oh * ow;
                for y in 0..oh {
                    let (y0, y1, fy) = row_taps[y];
                    for xx in 0..ow {
                        let (x0, x1, fx) = col_taps[xx];
                        let v00 = xv.data()[ib + y0 * w + x0];
                        let v01 = xv.data()[ib + y0 * w + x1];
                        let v10 = xv.data()[ib + y1 * w + x0];
                        let v11 = xv.data()[ib + y1 * w + x1];
                        out[ob + y * ow + xx] = (1.0 - fy) * ((1.0 - fx) * v00 + fx * v01)
                            + fy * ((1.0 - fx) * v10 + fx * v11);
                    }
                }
            }
        }
        let out = Tensor::new(vec![n, c, oh, ow], out);
        let needs = self.needs_grad(x);
        let back: Option<BackFn> = if needs {
            let row_taps = row_taps.clone();
            let col_taps = col_taps.clone();
            Some(Box::new(move |g: &Tensor| {
                let mut gx = vec![0.0; n * c * h * w];
                for ni in 0..n {
                    for ci in 0..c {
                        let ib = (ni * c + ci) * h * w;
                        let ob = (ni * c + ci) * oh * ow;
                        for y in 0..oh {
                            let (y0, y1, fy) = row_taps[y];
                            for xx in 0..ow {
                                let (x0, x1, fx) = col_taps[xx];
                                let gv = g.data()[ob + y * ow + xx];
                                gx[ib + y0 * w + x0] += gv * (1.0 - fy) * (1.0 - fx);
                                gx[ib + y0 * w + x1] += gv * (1.0 - fy) * fx;
                                gx[ib + y1 * w + x0] += gv * fy * (1.0 - fx);
                                gx[ib + y1 * w + x1] += gv * fy * fx;
                            }
                        }
                    }
                }
                vec![(x, Tensor::new(vec![n, c, h, w], gx))]
            }))
        } else {
            None
        };
        self.push(out, needs, back)
    }

    pub fn concat_ch(&self, xs: &[NodeId]) -> NodeId {
        assert!(!xs.is_empty());
        let vals: Vec<Tensor> = xs.iter().map(|&id| self.value(id)).collect();
        let (n, _, h, w) = vals[0].dims4();
        let mut c_total = 0;
        for v in &vals {
            let (vn, vc, vh, vw) = v.dims4();
            assert_eq!((vn, vh, vw), (n, h, w), "concat_ch spatial mismatch");
            c_total += vc;
        }
        let mut out = vec![0.0; n * c_total * h * w];
        let plane = h * w;
        for ni in 0..n {
            let mut co = 0;
            for v in &vals {
                let vc = v.shape()[1];
                for ci in 0..vc {
                    let src = &v.data()[(ni * vc + ci) * plane..(ni * vc + ci + 1) * plane];
                    let dst = (ni * c_total + co + ci) * plane;
                    out[dst..dst + plane].copy_from_slice(src);
                }
                co += vc;
            }
        }
        let out = Tensor::new(vec![n, c_total, h, w], out);
        let needs = xs.iter().any(|&id| self.needs_grad(id));
        let back: Option<BackFn> = if needs {
            let ids: Vec<NodeId> = xs.to_vec();
            let chans: Vec<usize> = vals.iter().map(|v| v.shape()[1]).collect();
            let needs_each: Vec<bool> = ids.iter().map(|&id| self.needs_grad(id)).collect();
            Some(Box::new(move |g: &Tensor| {
                let mut res = Vec::new();
                let mut co = 0;
                for (k, &id) in ids.iter().enumerate() {
                    let vc = chans[k];
                    if needs_each[k] {
                        let mut gx = vec![0.0; n * vc * plane];
                        for ni in 0..n {
                            for ci in 0..vc {
                                let src = (ni * c_total + co + ci) * plane;
                                let dst = (ni * vc + ci) * plane;
                                gx[dst..dst + plane]
                                    .copy_from_slice(&g.data()[src..src + plane]);
                            }
                        }
                        res.push((id, Tensor::new(vec![n, vc, h, w], gx)));
                    }
                    co += vc;
                }
                res
            }))
        } else {
            None
        };
        self.push(out, needs, back)
    }

    /// Channel slice `[c0, c0 + len)` of an NCHW tensor.
    pub fn slice_ch(&self, x: NodeId, c0: usize, len: usize) -> NodeId {
        let xv = self.value(x);
        let (n, c, h, w) = xv.dims4();
        assert!(c0 + len <= c, "slice_ch out of range");
        let plane = h * w;
        let mut out = vec![0.0; n * len * plane];
        for ni in 0..n {
            for ci in 0..len {
                let src = (ni * c + c0 + ci) * plane;
                let dst = (ni * len + ci) * plane;
                out[dst..dst + plane].copy_from_slice(&xv.data()[src..src + plane]);
            }
        }
        let out = Tensor::new(vec![n, len, h, w], out);
        let needs = self.needs_grad(x);
        let back: Option<BackFn> = if needs {
            Some(Box::new(move |g: &Tensor| {
                let mut gx = vec![0.0; n * c * plane];
                for ni in 0..n {
                    for ci in 0..len {
                        let dst = (ni * c + c0 + ci) * plane;
                        let src = (ni * len + ci) * plane;
                        gx[dst..dst + plane].copy_from_slice(&g.data()[src..src + plane]);
                    }
                }
                vec![(x, Tensor::new(vec![n, c, h, w], gx))]
            }))
        } else {
            None
        };
        self.push(out, needs, back)
    }

    /// Mean over the channel axis: NCHW -> [N, 1, H, W].
    pub fn mean_channels(&self, x: NodeId) -> NodeId {
        let xv = self.value(x);
        let (n, c, h, w) = xv.dims4();
        let plane = h * w;
        let mut out = vec![0.0; n * plane];
        for ni in 0..n {
            for ci in 0..c {
                let base = (ni * c + ci) * plane;
                for i in 0..plane {
                    out[ni * plane + i] += xv.data()[base + i];
                }
            }
        }
        let inv = 1.0 / c as f64;
        for v in out.iter_mut() {
            *v *= inv;
        }
        let out = Tensor::new(vec![n, 1, h, w], out);
        let needs = self.needs_grad(x);
        let back: Option<BackFn> = if needs {
            Some(Box::new(move |g: &Tensor| {
                let mut gx = vec![0.0; n * c * plane];
                for ni in 0..n {
                    for ci in 0..c {
                        let base = (ni * c + ci) * plane;
                        for i in 0..plane {
                            gx[base + i] = g.data()[ni * plane + i] * inv;
                        }
                    }
                }
                vec![(x, Tensor::new(vec![n, c, h, w], gx))]
            }))
        } else {
            None
        };
        self.push(out, needs, back)
    }

    /// Forward first difference along x: NCHW -> [N, C, H, W-1].
    pub fn diff_x(&self, x: NodeId) -> NodeId {
        let xv = self.value(x);
        let (n, c, h, w) = xv.dims4();
        assert!(w >= 2);
        let mut out = vec![0.0; n * c * h * (w - 1)];
        for nc in 0..n * c {
            for y in 0..h {
                let row = nc * h * w + y * w;
                let orow = nc * h * (w - 1) + y * (w - 1);
                for xx in 0..w - 1 {
                    out[orow + xx] = xv.data()[row + xx + 1] - xv.data()[row + xx];
                }
            }
        }
        let out = Tensor::new(vec![n, c, h, w - 1], out);
        let needs = self.needs_grad(x);
        let back: Option<BackFn> = if needs {
            Some(Box::new(move |g: &Tensor| {
                let mut gx = vec![0.0; n * c * h * w];
                for nc in 0..n * c {
                    for y in 0..h {
                        let row = nc * h * w + y * w;
                        let grow = nc * h * (w - 1) + y * (w - 1);
                        for xx in 0..w - 1 {
                            let gv = g.data()[grow + xx];
                            gx[row + xx + 1] += gv;
                            gx[row + xx] -= gv;
                        }
                    }
                }
                vec![(x, Tensor::new(vec![n, c, h, w], gx))]
            }))
        } else {
            None
        };
        self.push(out, needs, back)
    }

    /// Forward first difference along y: NCHW -> [N, C, H-1, W].
    pub fn diff_y(&self, x: NodeId) -> NodeId {
        let xv = self.value(x);
        let (n, c, h, w) = xv.dims4();
        assert!(h >= 2);
        let mut out = vec![0.0; n * c * (h - 1) * w];
        for nc in 0..n * c {
            for y in 0..h - 1 {
                let row = nc * h * w + y * w;
                let orow = nc * (h - 1) * w + y * w;
                for xx in 0..w {
                    out[orow + xx] = xv.data()[row + w + xx] - xv.data()[row + xx];
                }
            }
        }
        let out = Tensor::new(vec![n, c, h - 1, w], out);
        let needs = self.needs_grad(x);
        let back: Option<BackFn> = if needs {
            Some(Box::new(move |g: &Tensor| {
                let mut gx = vec![0.0; n * c * h * w];
                for nc in 0..n * c {
                    for y in 0..h - 1 {
                        let row = nc * h * w + y * w;
                        let grow = nc * (h - 1) * w + y * w;
                        for xx in 0..w {
                            let gv = g.data()[grow + xx];
                            gx[row + w + xx] += gv;
                            gx[row + xx] -= gv;
                        }
                    }
                }
                vec![(x, Tensor::new(vec![n, c, h, w], gx))]
            }))
        } else {
            None
        };
        self.push(out, needs, back)
    }

    /// Softmax over the channel axis of an NCHW tensor.
    pub fn softmax_ch(&self, x: NodeId) -> NodeId {
        let xv = self.value(x);
        let (n, c, h, w) = xv.dims4();
        let plane = h * w;
        let mut out = vec![0.0; xv.len()];
        for ni in 0..n {
            for p in 0..plane {
                let mut mx = f64::NEG_INFINITY;
                for ci in 0..c {
                    mx = mx.max(xv.data()[(ni * c + ci) * plane + p]);
                }
                let mut z = 0.0;
                for ci in 0..c {
                    let e = (xv.data()[(ni * c + ci) * plane + p] - mx).exp();
                    out[(ni * c + ci) * plane + p] = e;
                    z += e;
                }
                for ci in 0..c {
                    out[(ni * c + ci) * plane + p] /= z;
                }
            }
        }
        let out = Tensor::new(xv.shape().to_vec(), out);
        let needs = self.needs_grad(x);
        let back: Option<BackFn> = if needs {
            let yv = out.clone();
            Some(Box::new(move |g: &Tensor| {
                let mut gx = vec![0.0; g.len()];
                for ni in 0..n {
                    for p in 0..plane {
                        let mut dot = 0.0;
                        for ci in 0..c {
                            let idx = (ni * c + ci) * plane + p;
                            dot += g.data()[idx] * yv.data()[idx];
                        }
                        for ci in 0..c {
                            let idx = (ni * c + ci) * plane + p;
                            gx[idx] = yv.data()[idx] * (g.data()[idx] - dot);
                        }
                    }
                }
                vec![(x, Tensor::new(g.shape().to_vec(), gx))]
            }))
        } else {
            None
        };
        self.push(out, needs, back)
    }

    /// Spatial mean per (batch, channel): NCHW -> [N, C].
    pub fn mean_hw(&self, x: NodeId) -> NodeId {
        let xv = self.value(x);
        let (n, c, h, w) = xv.dims4();
        let plane = (h * w) as f64;
        let mut out = vec![0.0; n * c];
        for ni in 0..n {
            for ci in 0..c {
                let base = (ni * c + ci) * h * w;
                out[ni * c + ci] = xv.data()[base..base + h * w].iter().sum::<f64>() / plane;
            }
        }
        let out = Tensor::new(vec![n, c], out);
        let needs = self.needs_grad(x);
        let back: Option<BackFn> = if needs {
            Some(Box::new(move |g: &Tensor| {
                let mut gx = vec![0.0; n * c * h * w];
                for ni in 0..n {
                    for ci in 0..c {
                        let gv = g.data()[ni * c + ci] / plane;
                        let base = (ni * c + ci) * h * w;
                        for v in gx[base..base + h * w].iter_mut() {
                            *v = gv;
                        }
                    }
                }
                vec![(x, Tensor::new(vec![n, c, h, w], gx))]
            }))
        } else {
            None
        };
        self.push(out, needs, back)
    }

    // ---- backward ------------------------------------------------------------

    /// Backpropagate from a scalar node. Returns per-node gradients.
    pub fn backward(&self, loss: NodeId) -> Gradients {
        let nodes = self.nodes.borrow();
        assert_eq!(nodes[loss].value.len(), 1, "backward() needs a scalar loss");
        let mut grads: Vec<Option<Tensor>> = (0..nodes.len()).map(|_| None).collect();
        grads[loss] = Some(Tensor::scalar(1.0));
        for id in (0..=loss).rev() {
            let Some(g) = grads[id].clone() else { continue };
            let node = &nodes[id];
            if !node.needs_grad {
                continue;
            }
            if let Some(back) = &node.back {
                for (pid, contrib) in back(&g) {
                    if !nodes[pid].needs_grad {
                        continue;
                    }
                    match &mut grads[pid] {
                        Some(existing) => existing.add_assign(&contrib),
                        slot => *slot = Some(contrib),
                    }
                }
            }
        }
        Gradients { grads }
    }
}

pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, id: NodeId) -> Option<&Tensor> {
        self.grads.get(id).and_then(|g| g.as_ref())
    }

    /// Gradient of a leaf, or zeros of the given shape when the leaf is
    /// disconnected from the loss.
    pub fn get_or_zeros(&self, id: NodeId, shape: &[usize]) -> Tensor {
        match self.get(id) {
            Some(g) => g.clone(),
            None => Tensor::zeros(shape.to_vec()),
        }
    }
}

fn broadcast_shapes(a: &[usize], b: &[usize]) -> (Vec<usize>, bool, bool) {
    let an: usize = a.iter().product();
    let bn: usize = b.iter().product();
    if a == b {
        (a.to_vec(), false, false)
    } else if an == 1 {
        (b.to_vec(), true, false)
    } else if bn == 1 {
        (a.to_vec(), false, true)
    } else {
        panic!("incompatible shapes {a:?} vs {b:?}");
    }
}

#[allow(clippy::too_many_arguments)]
fn reduce_for(
    target: &Tensor,
    g: &Tensor,
    other: &Tensor,
    deriv: &impl Fn(f64, f64) -> f64,
    a_scalar: bool,
    b_scalar: bool,
    is_a: bool,
) -> Tensor {
    let n = g.len();
    let target_scalar = if is_a { a_scalar } else { b_scalar };
    let other_scalar = if is_a { b_scalar } else { a_scalar };
    // deriv takes (x, y) in the op's (a, b) order.
    let get_pair = |i: usize| -> (f64, f64) {
        let t = target.data()[if target_scalar { 0 } else { i }];
        let o = other.data()[if other_scalar { 0 } else { i }];
        if is_a {
            (t, o)
        } else {
            (o, t)
        }
    };
    if target_scalar {
        let mut acc = 0.0;
        for i in 0..n {
            let (x, y) = get_pair(i);
            acc += g.data()[i] * deriv(x, y);
        }
        Tensor::new(target.shape().to_vec(), vec![acc])
    } else {
        let mut out = Vec::with_capacity(n);
        for i in 0..n {
            let (x, y) = get_pair(i);
            out.push(g.data()[i] * deriv(x, y));
        }
        Tensor::new(target.shape().to_vec(), out)
    }
}

/// Central finite-difference gradient checking.
///
/// This is the independent oracle used by both the test suites and the
/// `selftest` command: it never touches the backward closures it validates.
pub mod gradcheck {
    use super::{Graph, NodeId};
    use crate::tensor::Tensor;

    pub struct CheckReport {
        pub max_rel_err: f64,
        pub checked: usize,
        pub worst: Option<(usize, usize, f64, f64)>, // (input idx, element, analytic, fd)
    }

    impl CheckReport {
        pub fn passes(&self, tol: f64) -> bool {
            self.max_rel_err < tol
        }
    }

    /// Compare analytic gradients of `build` (a scalar-valued graph function
    /// of the inputs) against central differences with step `h`.
    ///
    /// Differences below the round-off floor of the central difference
    /// (`~eps * |f| / h`) are not meaningful and are compared absolutely;
    /// everything else is compared relatively.
    pub fn check_scalar_fn(
        inputs: &[Tensor],
        build: impl Fn(&Graph, &[NodeId]) -> NodeId,
        h: f64,
    ) -> CheckReport {
        let eval = |vals: &[Tensor]| -> f64 {
            let g = Graph::new();
            let ids: Vec<NodeId> = vals.iter().map(|t| g.param(t.clone())).collect();
            let out = build(&g, &ids);
            g.value(out).item()
        };

        // analytic
        let g = Graph::new();
        let ids: Vec<NodeId> = inputs.iter().map(|t| g.param(t.clone())).collect();
        let out = build(&g, &ids);
        let f0 = g.value(out).item();
        let grads = g.backward(out);
        let analytic: Vec<Tensor> = ids
            .iter()
            .zip(inputs)
            .map(|(&id, t)| grads.get_or_zeros(id, t.shape()))
            .collect();

        // cancellation noise of the central difference, with safety margin
        let noise_floor = 64.0 * f64::EPSILON * f0.abs().max(1.0) / h;

        let mut max_rel = 0.0;
        let mut worst = None;
        let mut checked = 0;
        for (k, input) in inputs.iter().enumerate() {
            for j in 0..input.len() {
                let mut plus = inputs.to_vec();
                let mut minus = inputs.to_vec();
                plus[k].data_mut()[j] += h;
                minus[k].data_mut()[j] -= h;
                let fd = (eval(&plus) - eval(&minus)) / (2.0 * h);
                let an = analytic[k].data()[j];
                checked += 1;
                if (an - fd).abs() <= noise_floor {
                    continue;
                }
                let rel = (an - fd).abs() / an.abs().max(fd.abs()).max(1e-8);
                if rel > max_rel {
                    max_rel = rel;
                    worst = Some((k, j, an, fd));
                }
            }
        }
        CheckReport {
            max_rel_err: max_rel,
            checked,
            worst,
        }
    }
}
