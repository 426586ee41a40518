//! Differentiable network operators: convolution blocks, group
//! normalization, and the pixel-adaptive convolution (PAC) behind the
//! task-specific feature guidance (TFG) layers.
//!
//! PAC modulates a learned spatial kernel per pixel with a Gaussian on
//! guidance-feature differences:
//!
//! ```text
//! y_i = sum_{j in Omega(i)} exp(-1/2 * ||a f_i - a f_j||^2) * W[j - i] * x_j + b
//! ```
//!
//! With constant guidance (or `a -> 0`) the Gaussian is 1 everywhere and PAC
//! reduces exactly to a standard convolution, which is what the guidance
//! scale schedule exploits at the start of training.

use std::cell::RefCell;
use std::collections::BTreeMap;
use std::io::{Read, Write};

use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use thiserror::Error;

use crate::graph::{BackFnAlias, Graph, NodeId};
use crate::tensor::Tensor;

#[derive(Debug, Error)]
pub enum NnError {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("corrupt parameter archive: {0}")]
    Corrupt(String),
}

// ---------------------------------------------------------------------------
// parameter registry
// ---------------------------------------------------------------------------

/// Named parameter tensors with deterministic iteration order.
#[derive(Default, Clone)]
pub struct Params {
    map: BTreeMap<String, Tensor>,
}

impl Params {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: &str, value: Tensor) {
        assert!(
            self.map.insert(name.to_string(), value).is_none(),
            "duplicate parameter {name}"
        );
    }

    pub fn get(&self, name: &str) -> &Tensor {
        self.map
            .get(name)
            .unwrap_or_else(|| panic!("unknown parameter {name}"))
    }

    pub fn get_mut(&mut self, name: &str) -> &mut Tensor {
        self.map
            .get_mut(name)
            .unwrap_or_else(|| panic!("unknown parameter {name}"))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.map.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.map.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor)> {
        self.map.iter_mut()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.map.keys()
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    /// Total number of scalar entries under a name prefix.
    pub fn scalar_count(&self, prefix: &str) -> usize {
        self.map
            .iter()
            .filter(|(k, _)| k.starts_with(prefix))
            .map(|(_, v)| v.len())
            .sum()
    }

    /// He-normal initialized convolution weight plus zero bias.
    pub fn init_conv(
        &mut self,
        name: &str,
        out_ch: usize,
        in_ch: usize,
        k: usize,
        rng: &mut ChaCha8Rng,
    ) {
        let fan_in = (in_ch * k * k) as f64;
        let std = (2.0 / fan_in).sqrt();
        let w = Tensor::randn(vec![out_ch, in_ch, k, k], rng).map(|v| v * std);
        self.insert(&format!("{name}.w"), w);
        self.insert(&format!("{name}.b"), Tensor::zeros(vec![out_ch]));
    }

    /// Unit-scale, zero-shift group-norm parameters.
    pub fn init_norm(&mut self, name: &str, channels: usize) {
        self.insert(&format!("{name}.g"), Tensor::full(vec![channels], 1.0));
        self.insert(&format!("{name}.s"), Tensor::zeros(vec![channels]));
    }

    /// Binary archive: little-endian f64 payloads keyed by name. Exact
    /// round-trip (bit-level) by construction.
    pub fn write_to(&self, w: &mut impl Write) -> Result<(), NnError> {
        w.write_all(&(self.map.len() as u64).to_le_bytes())?;
        for (name, tensor) in &self.map {
            let name_bytes = name.as_bytes();
            w.write_all(&(name_bytes.len() as u64).to_le_bytes())?;
            w.write_all(name_bytes)?;
            w.write_all(&(tensor.shape().len() as u64).to_le_bytes())?;
            for &d in tensor.shape() {
                w.write_all(&(d as u64).to_le_bytes())?;
            }
            for &v in tensor.data() {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn read_from(r: &mut impl Read) -> Result<Self, NnError> {
        let mut u64buf = [0u8; 8];
        let mut read_u64 = |r: &mut dyn Read| -> Result<u64, NnError> {
            r.read_exact(&mut u64buf)?;
            Ok(u64::from_le_bytes(u64buf))
        };
        let count = read_u64(r)?;
        let mut map = BTreeMap::new();
        for _ in 0..count {
            let name_len = read_u64(r)? as usize;
            if name_len > 1 << 16 {
                return Err(NnError::Corrupt("implausible name length".into()));
            }
            let mut name = vec![0u8; name_len];
            r.read_exact(&mut name)?;
            let name = String::from_utf8(name)
                .map_err(|_| NnError::Corrupt("non-utf8 parameter name".into()))?;
            let rank = read_u64(r)? as usize;
            if rank > 8 {
                return Err(NnError::Corrupt("implausible tensor rank".into()));
            }
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(read_u64(r)? as usize);
            }
            let n: usize = shape.iter().product();
            let mut data = Vec::with_capacity(n);
            let mut fbuf = [0u8; 8];
            for _ in 0..n {
                r.read_exact(&mut fbuf)?;
                data.push(f64::from_le_bytes(fbuf));
            }
            map.insert(name, Tensor::new(shape, data));
        }
        Ok(Self { map })
    }
}

/// Binds registry parameters into a graph, once each, on first use.
pub struct Binder<'a> {
    pub graph: &'a Graph,
    params: &'a Params,
    ids: RefCell<BTreeMap<String, NodeId>>,
}

impl<'a> Binder<'a> {
    pub fn new(graph: &'a Graph, params: &'a Params) -> Self {
        Self {
            graph,
            params,
            ids: RefCell::new(BTreeMap::new()),
        }
    }

    pub fn node(&self, name: &str) -> NodeId {
        if let Some(&id) = self.ids.borrow().get(name) {
            return id;
        }
        let id = self.graph.param(self.params.get(name).clone());
        self.ids.borrow_mut().insert(name.to_string(), id);
        id
    }

    pub fn has_param(&self, name: &str) -> bool {
        self.params.contains(name)
    }

    pub fn bound(&self) -> BTreeMap<String, NodeId> {
        self.ids.borrow().clone()
    }
}

// ---------------------------------------------------------------------------
// convolution
// ---------------------------------------------------------------------------

impl Graph {
    /// 2D convolution, NCHW x [O, I, k, k] -> NCHW, zero padding.
    pub fn conv2d(&self, x: NodeId, w: NodeId, b: NodeId, stride: usize, pad: usize) -> NodeId {
        let xv = self.value(x);
        let wv = self.value(w);
        let bv = self.value(b);
        let (n, c, h, win) = xv.dims4();
        let (o, ci, k, k2) = wv.dims4();
        assert_eq!(k, k2, "kernel must be square");
        assert_eq!(c, ci, "channel mismatch: input {c}, weight {ci}");
        assert_eq!(bv.shape(), &[o]);
        let oh = (h + 2 * pad - k) / stride + 1;
        let ow = (win + 2 * pad - k) / stride + 1;
        let out = conv2d_forward(&xv, &wv, &bv, stride, pad, oh, ow);
        let needs_x = self.needs_grad(x);
        let needs_w = self.needs_grad(w);
        let needs_b = self.needs_grad(b);
        let needs = needs_x || needs_w || needs_b;
        let back: Option<BackFnAlias> = if needs {
            let xv2 = xv.clone();
            let wv2 = wv.clone();
            Some(Box::new(move |g: &Tensor| {
                let mut res = Vec::new();
                if needs_x {
                    res.push((x, conv2d_grad_input(g, &wv2, n, c, h, win, stride, pad)));
                }
                if needs_w {
                    res.push((w, conv2d_grad_weight(g, &xv2, o, c, k, stride, pad)));
                }
                if needs_b {
                    let (gn, go, gh, gw_) = g.dims4();
                    debug_assert_eq!(go, o);
                    let mut gb = vec![0.0; o];
                    for ni in 0..gn {
                        for oi in 0..o {
                            let base = (ni * o + oi) * gh * gw_;
                            gb[oi] += g.data()[base..base + gh * gw_].iter().sum::<f64>();
                        }
                    }
                    res.push((b, Tensor::new(vec![o], gb)));
                }
                res
            }))
        } else {
            None
        };
        self.push(out, needs, back)
    }

    /// Group normalization with affine parameters `gamma`, `beta` of shape [C].
    pub fn group_norm(
        &self,
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        groups: usize,
        eps: f64,
    ) -> NodeId {
        let xv = self.value(x);
        let gv = self.value(gamma);
        let bv = self.value(beta);
        let (n, c, h, w) = xv.dims4();
        assert_eq!(c % groups, 0, "channels {c} not divisible by groups {groups}");
        assert_eq!(gv.shape(), &[c]);
        assert_eq!(bv.shape(), &[c]);
        let cg = c / groups;
        let gsize = (cg * h * w) as f64;
        let plane = h * w;
        let mut xhat = vec![0.0; xv.len()];
        let mut sigma = vec![0.0; n * groups];
        for ni in 0..n {
            for gi in 0..groups {
                let mut mean = 0.0;
                for ci in 0..cg {
                    let base = (ni * c + gi * cg + ci) * plane;
                    mean += xv.data()[base..base + plane].iter().sum::<f64>();
                }
                mean /= gsize;
                let mut var = 0.0;
                for ci in 0..cg {
                    let base = (ni * c + gi * cg + ci) * plane;
                    for i in 0..plane {
                        let d = xv.data()[base + i] - mean;
                        var += d * d;
                    }
                }
                var /= gsize;
                let s = (var + eps).sqrt();
                sigma[ni * groups + gi] = s;
                for ci in 0..cg {
                    let base = (ni * c + gi * cg + ci) * plane;
                    for i in 0..plane {
                        xhat[base + i] = (xv.data()[base + i] - mean) / s;
                    }
                }
            }
        }
        let mut out = vec![0.0; xv.len()];
        for ni in 0..n {
            for ci in 0..c {
                let base = (ni * c + ci) * plane;
                let (ga, be) = (gv.data()[ci], bv.data()[ci]);
                for i in 0..plane {
                    out[base + i] = xhat[base + i] * ga + be;
                }
            }
        }
        let out = Tensor::new(xv.shape().to_vec(), out);
        let needs_x = self.needs_grad(x);
        let needs_g = self.needs_grad(gamma);
        let needs_b = self.needs_grad(beta);
        let needs = needs_x || needs_g || needs_b;
        let back: Option<BackFnAlias> = if needs {
            let xhat = Tensor::new(xv.shape().to_vec(), xhat);
            let gv2 = gv.clone();
            Some(Box::new(move |g: &Tensor| {
                let mut res = Vec::new();
                if needs_g || needs_b {
                    let mut gg = vec![0.0; c];
                    let mut gb = vec![0.0; c];
                    for ni in 0..n {
                        for ci in 0..c {
                            let base = (ni * c + ci) * plane;
                            for i in 0..plane {
                                gg[ci] += g.data()[base + i] * xhat.data()[base + i];
                                gb[ci] += g.data()[base + i];
                            }
                        }
                    }
                    if needs_g {
                        res.push((gamma, Tensor::new(vec![c], gg)));
                    }
                    if needs_b {
                        res.push((beta, Tensor::new(vec![c], gb)));
                    }
                }
                if needs_x {
                    let mut gx = vec![0.0; g.len()];
                    for ni in 0..n {
                        for gi in 0..groups {
                            // ghat = g * gamma within the group
                            let mut mean_ghat = 0.0;
                            let mut mean_ghat_xhat = 0.0;
                            for ci in 0..cg {
                                let ch = gi * cg + ci;
                                let base = (ni * c + ch) * plane;
                                let ga = gv2.data()[ch];
                                for i in 0..plane {
                                    let gh = g.data()[base + i] * ga;
                                    mean_ghat += gh;
                                    mean_ghat_xhat += gh * xhat.data()[base + i];
                                }
                            }
                            mean_ghat /= gsize;
                            mean_ghat_xhat /= gsize;
                            let s = sigma[ni * groups + gi];
                            for ci in 0..cg {
                                let ch = gi * cg + ci;
                                let base = (ni * c + ch) * plane;
                                let ga = gv2.data()[ch];
                                for i in 0..plane {
                                    let gh = g.data()[base + i] * ga;
                                    gx[base + i] = (gh
                                        - mean_ghat
                                        - xhat.data()[base + i] * mean_ghat_xhat)
                                        / s;
                                }
                            }
                        }
                    }
                    res.push((x, Tensor::new(g.shape().to_vec(), gx)));
                }
                res
            }))
        } else {
            None
        };
        self.push(out, needs, back)
    }

    /// Pixel-adaptive convolution. `x` [N, Cin, H, W] is convolved with the
    /// spatial kernel `w` [O, Cin, k, k], each tap modulated by
    /// `exp(-1/2 * alpha^2 * ||f_i - f_j||^2)` over the guidance channels of
    /// `f` [N, Cg, H, W]. Same-size output (padding (k-1)/2).
    pub fn pac(&self, x: NodeId, f: NodeId, w: NodeId, b: NodeId, alpha: f64) -> NodeId {
        let xv = self.value(x);
        let fv = self.value(f);
        let wv = self.value(w);
        let bv = self.value(b);
        let (n, c, h, win) = xv.dims4();
        let (fn_, cg, fh, fw) = fv.dims4();
        let (o, ci, k, k2) = wv.dims4();
        assert_eq!(k % 2, 1, "PAC kernel must be odd");
        assert_eq!(k, k2);
        assert_eq!(c, ci, "task channel mismatch");
        assert_eq!(
            (fn_, fh, fw),
            (n, h, win),
            "guidance must be spatially aligned with the task features"
        );
        assert_eq!(bv.shape(), &[o]);
        let kernel = pac_kernel(&fv, n, cg, h, win, k, alpha);
        let out = pac_forward_impl(&xv, &kernel, &wv, &bv, n, c, o, h, win, k);
        let needs_x = self.needs_grad(x);
        let needs_f = self.needs_grad(f);
        let needs_w = self.needs_grad(w);
        let needs_b = self.needs_grad(b);
        let needs = needs_x || needs_f || needs_w || needs_b;
        let back: Option<BackFnAlias> = if needs {
            let xv2 = xv.clone();
            let fv2 = fv.clone();
            let wv2 = wv.clone();
            Some(Box::new(move |g: &Tensor| {
                pac_backward(
                    g,
                    &xv2,
                    &fv2,
                    &wv2,
                    &kernel,
                    alpha,
                    PacDims {
                        n,
                        c,
                        cg,
                        o,
                        h,
                        w: win,
                        k,
                    },
                    (needs_x, needs_f, needs_w, needs_b),
                    (x, f, w, b),
                )
            }))
        } else {
            None
        };
        self.push(out, needs, back)
    }

    /// Task-specific feature guidance layer: PAC followed by ReLU.
    pub fn tfg(&self, x: NodeId, f: NodeId, w: NodeId, b: NodeId, alpha: f64) -> NodeId {
        let p = self.pac(x, f, w, b, alpha);
        self.relu(p)
    }
}

fn conv2d_forward(
    x: &Tensor,
    w: &Tensor,
    b: &Tensor,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
) -> Tensor {
    let (n, c, h, win) = x.dims4();
    let (o, _, k, _) = w.dims4();
    let mut out = vec![0.0; n * o * oh * ow];
    out.par_chunks_mut(oh * ow)
        .enumerate()
        .for_each(|(idx, plane)| {
            let ni = idx / o;
            let oi = idx % o;
            for v in plane.iter_mut() {
                *v = b.data()[oi];
            }
            for ci in 0..c {
                let xbase = (ni * c + ci) * h * win;
                let wbase = (oi * c + ci) * k * k;
                for ky in 0..k {
                    for kx in 0..k {
                        let wv = w.data()[wbase + ky * k + kx];
                        if wv == 0.0 {
                            continue;
                        }
                        for oy in 0..oh {
                            let iy = (oy * stride + ky) as i64 - pad as i64;
                            if iy < 0 || iy >= h as i64 {
                                continue;
                            }
                            let xrow = xbase + iy as usize * win;
                            let orow = oy * ow;
                            for ox in 0..ow {
                                let ix = (ox * stride + kx) as i64 - pad as i64;
                                if ix < 0 || ix >= win as i64 {
                                    continue;
                                }
                                plane[orow + ox] += wv * x.data()[xrow + ix as usize];
                            }
                        }
                    }
                }
            }
        });
    Tensor::new(vec![n, o, oh, ow], out)
}

#[allow(clippy::too_many_arguments)]
fn conv2d_grad_input(
    g: &Tensor,
    w: &Tensor,
    n: usize,
    c: usize,
    h: usize,
    win: usize,
    stride: usize,
    pad: usize,
) -> Tensor {
    let (_, o, oh, ow) = g.dims4();
    let (_, _, k, _) = w.dims4();
    let mut gx = vec![0.0; n * c * h * win];
    gx.par_chunks_mut(h * win)
        .enumerate()
        .for_each(|(idx, plane)| {
            let ni = idx / c;
            let ci = idx % c;
            for oi in 0..o {
                let gbase = (ni * o + oi) * oh * ow;
                let wbase = (oi * c + ci) * k * k;
                for ky in 0..k {
                    for kx in 0..k {
                        let wv = w.data()[wbase + ky * k + kx];
                        if wv == 0.0 {
                            continue;
                        }
                        for oy in 0..oh {
                            let iy = (oy * stride + ky) as i64 - pad as i64;
                            if iy < 0 || iy >= h as i64 {
                                continue;
                            }
                            let prow = iy as usize * win;
                            let grow = gbase + oy * ow;
                            for ox in 0..ow {
                                let ix = (ox * stride + kx) as i64 - pad as i64;
                                if ix < 0 || ix >= win as i64 {
                                    continue;
                                }
                                plane[prow + ix as usize] += wv * g.data()[grow + ox];
                            }
                        }
                    }
                }
            }
        });
    Tensor::new(vec![n, c, h, win], gx)
}

fn conv2d_grad_weight(
    g: &Tensor,
    x: &Tensor,
    o: usize,
    c: usize,
    k: usize,
    stride: usize,
    pad: usize,
) -> Tensor {
    let (n, _, h, win) = x.dims4();
    let (_, _, oh, ow) = g.dims4();
    let mut gw = vec![0.0; o * c * k * k];
    gw.par_chunks_mut(k * k)
        .enumerate()
        .for_each(|(idx, taps)| {
            let oi = idx / c;
            let ci = idx % c;
            for ky in 0..k {
                for kx in 0..k {
                    let mut acc = 0.0;
                    for ni in 0..n {
                        let gbase = (ni * o + oi) * oh * ow;
                        let xbase = (ni * c + ci) * h * win;
                        for oy in 0..oh {
                            let iy = (oy * stride + ky) as i64 - pad as i64;
                            if iy < 0 || iy >= h as i64 {
                                continue;
                            }
                            let xrow = xbase + iy as usize * win;
                            let grow = gbase + oy * ow;
                            for ox in 0..ow {
                                let ix = (ox * stride + kx) as i64 - pad as i64;
                                if ix < 0 || ix >= win as i64 {
                                    continue;
                                }
                                acc += g.data()[grow + ox] * x.data()[xrow + ix as usize];
                            }
                        }
                    }
                    taps[ky * k + kx] = acc;
                }
            }
        });
    Tensor::new(vec![o, c, k, k], gw)
}

/// Adapting kernel K[n, p, tap]: Gaussian on scaled guidance differences.
/// Out-of-bounds taps get K = 0 (their padded inputs are zero anyway).
fn pac_kernel(f: &Tensor, n: usize, cg: usize, h: usize, w: usize, k: usize, alpha: f64) -> Tensor {
    let r = (k / 2) as i64;
    let plane = h * w;
    let a2 = alpha * alpha;
    let mut kernel = vec![0.0; n * plane * k * k];
    kernel
        .par_chunks_mut(plane * k * k)
        .enumerate()
        .for_each(|(ni, kn)| {
            for y in 0..h as i64 {
                for x in 0..w as i64 {
                    let p = (y * w as i64 + x) as usize;
                    for ky in -r..=r {
                        for kx in -r..=r {
                            let (yy, xx) = (y + ky, x + kx);
                            let tap = ((ky + r) * k as i64 + (kx + r)) as usize;
                            if yy < 0 || yy >= h as i64 || xx < 0 || xx >= w as i64 {
                                continue;
                            }
                            let q = (yy * w as i64 + xx) as usize;
                            let mut d2 = 0.0;
                            for g in 0..cg {
                                let base = (ni * cg + g) * plane;
                                let diff = f.data()[base + p] - f.data()[base + q];
                                d2 += diff * diff;
                            }
                            kn[p * k * k + tap] = (-0.5 * a2 * d2).exp();
                        }
                    }
                }
            }
        });
    Tensor::new(vec![n, plane, k * k], kernel)
}

#[allow(clippy::too_many_arguments)]
fn pac_forward_impl(
    x: &Tensor,
    kernel: &Tensor,
    w: &Tensor,
    b: &Tensor,
    n: usize,
    c: usize,
    o: usize,
    h: usize,
    win: usize,
    k: usize,
) -> Tensor {
    let r = (k / 2) as i64;
    let plane = h * win;
    let mut out = vec![0.0; n * o * plane];
    out.par_chunks_mut(plane).enumerate().for_each(|(idx, op)| {
        let ni = idx / o;
        let oi = idx % o;
        let kbase = ni * plane * k * k;
        for y in 0..h as i64 {
            for x_ in 0..win as i64 {
                let p = (y * win as i64 + x_) as usize;
                let mut acc = b.data()[oi];
                for ky in -r..=r {
                    for kx in -r..=r {
                        let (yy, xx) = (y + ky, x_ + kx);
                        if yy < 0 || yy >= h as i64 || xx < 0 || xx >= win as i64 {
                            continue;
                        }
                        let q = (yy * win as i64 + xx) as usize;
                        let tap = ((ky + r) * k as i64 + (kx + r)) as usize;
                        let kv = kernel.data()[kbase + p * k * k + tap];
                        if kv == 0.0 {
                            continue;
                        }
                        let mut dot = 0.0;
                        for ci in 0..c {
                            dot += w.data()[(oi * c + ci) * k * k + tap]
                                * x.data()[(ni * c + ci) * plane + q];
                        }
                        acc += kv * dot;
                    }
                }
                op[p] = acc;
            }
        }
    });
    Tensor::new(vec![n, o, h, win], out)
}

struct PacDims {
    n: usize,
    c: usize,
    cg: usize,
    o: usize,
    h: usize,
    w: usize,
    k: usize,
}

#[allow(clippy::too_many_arguments)]
fn pac_backward(
    g: &Tensor,
    x: &Tensor,
    f: &Tensor,
    w: &Tensor,
    kernel: &Tensor,
    alpha: f64,
    dims: PacDims,
    needs: (bool, bool, bool, bool),
    ids: (NodeId, NodeId, NodeId, NodeId),
) -> Vec<(NodeId, Tensor)> {
    let PacDims {
        n,
        c,
        cg,
        o,
        h,
        w: win,
        k,
    } = dims;
    let (needs_x, needs_f, needs_w, needs_b) = needs;
    let (x_id, f_id, w_id, b_id) = ids;
    let r = (k / 2) as i64;
    let plane = h * win;
    let a2 = alpha * alpha;
    let mut res = Vec::new();

    if needs_b {
        let mut gb = vec![0.0; o];
        for ni in 0..n {
            for oi in 0..o {
                let base = (ni * o + oi) * plane;
                gb[oi] += g.data()[base..base + plane].iter().sum::<f64>();
            }
        }
        res.push((b_id, Tensor::new(vec![o], gb)));
    }

    if needs_w {
        let mut gw = vec![0.0; o * c * k * k];
        gw.par_chunks_mut(c * k * k)
            .enumerate()
            .for_each(|(oi, gwo)| {
                for ni in 0..n {
                    let kbase = ni * plane * k * k;
                    let gbase = (ni * o + oi) * plane;
                    for y in 0..h as i64 {
                        for x_ in 0..win as i64 {
                            let p = (y * win as i64 + x_) as usize;
                            let gv = g.data()[gbase + p];
                            if gv == 0.0 {
                                continue;
                            }
                            for ky in -r..=r {
                                for kx in -r..=r {
                                    let (yy, xx) = (y + ky, x_ + kx);
                                    if yy < 0 || yy >= h as i64 || xx < 0 || xx >= win as i64 {
                                        continue;
                                    }
                                    let q = (yy * win as i64 + xx) as usize;
                                    let tap = ((ky + r) * k as i64 + (kx + r)) as usize;
                                    let kv = kernel.data()[kbase + p * k * k + tap];
                                    if kv == 0.0 {
                                        continue;
                                    }
                                    for ci in 0..c {
                                        gwo[ci * k * k + tap] +=
                                            gv * kv * x.data()[(ni * c + ci) * plane + q];
                                    }
                                }
                            }
                        }
                    }
                }
            });
        res.push((w_id, Tensor::new(vec![o, c, k, k], gw)));
    }

    if needs_x {
        // gather form: x[q] receives from centres p = q - offset
        let mut gx = vec![0.0; n * c * plane];
        gx.par_chunks_mut(plane).enumerate().for_each(|(idx, gxp)| {
            let ni = idx / c;
            let ci = idx % c;
            let kbase = ni * plane * k * k;
            for y in 0..h as i64 {
                for x_ in 0..win as i64 {
                    let q = (y * win as i64 + x_) as usize;
                    let mut acc = 0.0;
                    for ky in -r..=r {
                        for kx in -r..=r {
                            let (py, px) = (y - ky, x_ - kx);
                            if py < 0 || py >= h as i64 || px < 0 || px >= win as i64 {
                                continue;
                            }
                            let p = (py * win as i64 + px) as usize;
                            let tap = ((ky + r) * k as i64 + (kx + r)) as usize;
                            let kv = kernel.data()[kbase + p * k * k + tap];
                            if kv == 0.0 {
                                continue;
                            }
                            for oi in 0..o {
                                acc += g.data()[(ni * o + oi) * plane + p]
                                    * kv
                                    * w.data()[(oi * c + ci) * k * k + tap];
                            }
                        }
                    }
                    gxp[q] = acc;
                }
            }
        });
        res.push((x_id, Tensor::new(vec![n, c, h, win], gx)));
    }

    if needs_f {
        // first the gradient w.r.t. the adapting kernel entries
        let mut gk = vec![0.0; n * plane * k * k];
        gk.par_chunks_mut(plane * k * k)
            .enumerate()
            .for_each(|(ni, gkn)| {
                for y in 0..h as i64 {
                    for x_ in 0..win as i64 {
                        let p = (y * win as i64 + x_) as usize;
                        for ky in -r..=r {
                            for kx in -r..=r {
                                let (yy, xx) = (y + ky, x_ + kx);
                                if yy < 0 || yy >= h as i64 || xx < 0 || xx >= win as i64 {
                                    continue;
                                }
                                let q = (yy * win as i64 + xx) as usize;
                                let tap = ((ky + r) * k as i64 + (kx + r)) as usize;
                                let mut acc = 0.0;
                                for oi in 0..o {
                                    let gv = g.data()[(ni * o + oi) * plane + p];
                                    if gv == 0.0 {
                                        continue;
                                    }
                                    let mut dot = 0.0;
                                    for ci in 0..c {
                                        dot += w.data()[(oi * c + ci) * k * k + tap]
                                            * x.data()[(ni * c + ci) * plane + q];
                                    }
                                    acc += gv * dot;
                                }
                                gkn[p * k * k + tap] = acc;
                            }
                        }
                    }
                }
            });
        // then through K = exp(-a^2/2 * sum_g (f_g[p] - f_g[q])^2)
        let mut gf = vec![0.0; n * cg * plane];
        gf.par_chunks_mut(plane).enumerate().for_each(|(idx, gfp)| {
            let ni = idx / cg;
            let gi = idx % cg;
            let fbase = (ni * cg + gi) * plane;
            let kbase = ni * plane * k * k;
            for y in 0..h as i64 {
                for x_ in 0..win as i64 {
                    let p = (y * win as i64 + x_) as usize;
                    let mut acc = 0.0;
                    for ky in -r..=r {
                        for kx in -r..=r {
                            let tap = ((ky + r) * k as i64 + (kx + r)) as usize;
                            // p as the centre, q = p + offset
                            let (yy, xx) = (y + ky, x_ + kx);
                            if yy >= 0 && yy < h as i64 && xx >= 0 && xx < win as i64 {
                                let q = (yy * win as i64 + xx) as usize;
                                let kv = kernel.data()[kbase + p * k * k + tap];
                                let diff = f.data()[fbase + p] - f.data()[fbase + q];
                                acc += gk[kbase + p * k * k + tap] * kv * (-a2 * diff);
                            }
                            // p as the neighbour of centre pc = p - offset
                            let (py, px) = (y - ky, x_ - kx);
                            if py >= 0 && py < h as i64 && px >= 0 && px < win as i64 {
                                let pc = (py * win as i64 + px) as usize;
                                let kv = kernel.data()[kbase + pc * k * k + tap];
                                let diff = f.data()[fbase + pc] - f.data()[fbase + p];
                                acc += gk[kbase + pc * k * k + tap] * kv * (a2 * diff);
                            }
                        }
                    }
                    gfp[p] = acc;
                }
            }
        });
        res.push((f_id, Tensor::new(vec![n, cg, h, win], gf)));
    }

    res
}

/// Largest divisor of `channels` that is at most 8; group count for the
/// normalization layers.
pub fn norm_groups(channels: usize) -> usize {
    (1..=8.min(channels))
        .rev()
        .find(|g| channels % g == 0)
        .unwrap_or(1)
}

// ---------------------------------------------------------------------------
// plain-tensor wrappers for the operator API
// ---------------------------------------------------------------------------

/// Parameters of one pixel-adaptive convolution.
#[derive(Clone)]
pub struct PacParams {
    /// spatial kernel, [out_ch, in_ch, k, k] with odd k
    pub weight: Tensor,
    /// per-output-channel bias
    pub bias: Tensor,
    /// guidance scale in (0, 1]
    pub alpha: f64,
}

impl PacParams {
    pub fn kernel_size(&self) -> usize {
        self.weight.shape()[3]
    }
}

/// One-shot PAC forward on plain tensors.
pub fn pac_forward(x: &Tensor, f: &Tensor, params: &PacParams) -> Tensor {
    let g = Graph::new();
    let xn = g.constant(x.clone());
    let fnode = g.constant(f.clone());
    let wn = g.constant(params.weight.clone());
    let bn = g.constant(params.bias.clone());
    g.value(g.pac(xn, fnode, wn, bn, params.alpha))
}

/// One-shot TFG forward (PAC + ReLU) on plain tensors.
pub fn tfg_forward(x: &Tensor, f: &Tensor, params: &PacParams) -> Tensor {
    let g = Graph::new();
    let xn = g.constant(x.clone());
    let fnode = g.constant(f.clone());
    let wn = g.constant(params.weight.clone());
    let bn = g.constant(params.bias.clone());
    g.value(g.tfg(xn, fnode, wn, bn, params.alpha))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::gradcheck::check_scalar_fn;
    use approx::assert_relative_eq;
    use rand_chacha::rand_core::SeedableRng;

    fn rt(shape: Vec<usize>, seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::randn(shape, &mut rng)
    }

    /// Independent naive PAC: quintuple loop straight from the definition.
    fn pac_oracle(x: &Tensor, f: &Tensor, w: &Tensor, b: &Tensor, alpha: f64) -> Tensor {
        let (n, c, h, win) = x.dims4();
        let (_, cg, _, _) = f.dims4();
        let (o, _, k, _) = w.dims4();
        let r = (k / 2) as i64;
        let mut out = vec![0.0; n * o * h * win];
        for ni in 0..n {
            for oi in 0..o {
                for y in 0..h as i64 {
                    for x_ in 0..win as i64 {
                        let mut acc = b.data()[oi];
                        for ky in -r..=r {
                            for kx in -r..=r {
                                let (yy, xx) = (y + ky, x_ + kx);
                                if yy < 0 || yy >= h as i64 || xx < 0 || xx >= win as i64 {
                                    continue;
                                }
                                let mut d2 = 0.0;
                                for gi in 0..cg {
                                    let base = (ni * cg + gi) * h * win;
                                    let a = f.data()[base + (y * win as i64 + x_) as usize];
                                    let bb = f.data()[base + (yy * win as i64 + xx) as usize];
                                    d2 += (alpha * a - alpha * bb).powi(2);
                                }
                                let kv = (-0.5 * d2).exp();
                                for ci in 0..c {
                                    acc += kv
                                        * w.data()[(oi * c + ci) * k * k
                                            + ((ky + r) * k as i64 + kx + r) as usize]
                                        * x.data()[(ni * c + ci) * h * win
                                            + (yy * win as i64 + xx) as usize];
                                }
                            }
                        }
                        out[(ni * o + oi) * h * win + (y * win as i64 + x_) as usize] = acc;
                    }
                }
            }
        }
        Tensor::new(vec![n, o, h, win], out)
    }

    #[test]
    fn conv2d_identity_1x1() {
        let g = Graph::new();
        let x = g.constant(rt(vec![1, 2, 5, 5], 1));
        // identity 1x1 conv: w[o][i] = delta(o, i)
        let w = g.constant(Tensor::new(vec![2, 2, 1, 1], vec![1.0, 0.0, 0.0, 1.0]));
        let b = g.constant(Tensor::zeros(vec![2]));
        let y = g.conv2d(x, w, b, 1, 0);
        assert_eq!(g.value(y).data(), g.value(x).data());
    }

    #[test]
    fn conv2d_shapes_stride2() {
        let g = Graph::new();
        let x = g.constant(rt(vec![2, 3, 8, 8], 2));
        let w = g.constant(rt(vec![4, 3, 3, 3], 3).map(|v| v * 0.1));
        let b = g.constant(Tensor::zeros(vec![4]));
        let y = g.conv2d(x, w, b, 2, 1);
        assert_eq!(g.shape(y), vec![2, 4, 4, 4]);
    }

    #[test]
    fn conv2d_gradcheck() {
        let x = rt(vec![1, 2, 5, 5], 4);
        let w = rt(vec![3, 2, 3, 3], 5).map(|v| v * 0.3);
        let b = rt(vec![3], 6);
        let rep = check_scalar_fn(
            &[x, w, b],
            |g, ids| {
                let y = g.conv2d(ids[0], ids[1], ids[2], 1, 1);
                let sq = g.square(y);
                g.sum(sq)
            },
            1e-5,
        );
        assert!(rep.passes(1e-4), "max rel err {}", rep.max_rel_err);
        // strided variant
        let x = rt(vec![1, 2, 6, 6], 7);
        let w = rt(vec![2, 2, 3, 3], 8).map(|v| v * 0.3);
        let b = rt(vec![2], 9);
        let rep = check_scalar_fn(
            &[x, w, b],
            |g, ids| {
                let y = g.conv2d(ids[0], ids[1], ids[2], 2, 1);
                let sq = g.square(y);
                g.sum(sq)
            },
            1e-5,
        );
        assert!(rep.passes(1e-4), "strided: max rel err {}", rep.max_rel_err);
    }

    #[test]
    fn group_norm_normalizes_and_gradchecks() {
        let x = rt(vec![2, 4, 3, 3], 10);
        let gamma = Tensor::full(vec![4], 1.0);
        let beta = Tensor::zeros(vec![4]);
        let g = Graph::new();
        let xn = g.constant(x.clone());
        let gn = g.constant(gamma.clone());
        let bn = g.constant(beta.clone());
        let y = g.value(g.group_norm(xn, gn, bn, 2, 1e-5));
        // each (n, group) slice has ~zero mean, ~unit variance
        for ni in 0..2 {
            for gi in 0..2 {
                let mut vals = Vec::new();
                for ci in 0..2 {
                    let base = (ni * 4 + gi * 2 + ci) * 9;
                    vals.extend_from_slice(&y.data()[base..base + 9]);
                }
                let mean: f64 = vals.iter().sum::<f64>() / vals.len() as f64;
                let var: f64 =
                    vals.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / vals.len() as f64;
                assert_relative_eq!(mean, 0.0, epsilon = 1e-10);
                assert_relative_eq!(var, 1.0, epsilon = 1e-3);
            }
        }
        let rep = check_scalar_fn(
            &[x, rt(vec![4], 11), rt(vec![4], 12)],
            |g, ids| {
                let y = g.group_norm(ids[0], ids[1], ids[2], 2, 1e-5);
                let s = g.sigmoid(y);
                let sq = g.square(s);
                g.sum(sq)
            },
            1e-5,
        );
        assert!(rep.passes(1e-4), "max rel err {}", rep.max_rel_err);
    }

    #[test]
    fn pac_matches_loop_oracle() {
        let x = rt(vec![1, 2, 4, 4], 13);
        let f = rt(vec![1, 3, 4, 4], 14);
        let w = rt(vec![2, 2, 3, 3], 15).map(|v| v * 0.4);
        let b = rt(vec![2], 16);
        for alpha in [1.0, 0.37, 0.01] {
            let got = pac_forward(
                &x,
                &f,
                &PacParams {
                    weight: w.clone(),
                    bias: b.clone(),
                    alpha,
                },
            );
            let want = pac_oracle(&x, &f, &w, &b, alpha);
            for (a, e) in got.data().iter().zip(want.data()) {
                assert_relative_eq!(a, e, epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn pac_with_constant_guidance_is_standard_convolution() {
        let x = rt(vec![1, 3, 6, 6], 17);
        let f = Tensor::full(vec![1, 2, 6, 6], 3.7);
        let w = rt(vec![4, 3, 3, 3], 18).map(|v| v * 0.3);
        let b = rt(vec![4], 19);
        let g = Graph::new();
        let xn = g.constant(x.clone());
        let fnode = g.constant(f.clone());
        let wn = g.constant(w.clone());
        let bn = g.constant(b.clone());
        let pac = g.value(g.pac(xn, fnode, wn, bn, 1.0));
        let conv = g.value(g.conv2d(xn, wn, bn, 1, 1));
        let linf = pac
            .data()
            .iter()
            .zip(conv.data())
            .map(|(a, c)| (a - c).abs())
            .fold(0.0f64, f64::max);
        assert!(linf < 1e-6, "L-inf {linf}");
    }

    #[test]
    fn pac_alpha_zero_limit_recovers_convolution() {
        let x = rt(vec![1, 2, 5, 5], 20);
        let f = rt(vec![1, 2, 5, 5], 21); // arbitrary guidance
        let w = rt(vec![2, 2, 3, 3], 22).map(|v| v * 0.3);
        let b = rt(vec![2], 23);
        let g = Graph::new();
        let xn = g.constant(x);
        let fnode = g.constant(f);
        let wn = g.constant(w);
        let bn = g.constant(b);
        let conv = g.value(g.conv2d(xn, wn, bn, 1, 1));
        let mut prev = f64::INFINITY;
        for alpha in [1e-2, 1e-3, 1e-4] {
            let pac = g.value(g.pac(xn, fnode, wn, bn, alpha));
            let linf = pac
                .data()
                .iter()
                .zip(conv.data())
                .map(|(a, c)| (a - c).abs())
                .fold(0.0f64, f64::max);
            assert!(linf < prev, "deviation must shrink with alpha");
            prev = linf;
        }
        assert!(prev < 1e-7, "alpha=1e-4 deviation {prev}");
    }

    #[test]
    fn pac_is_invariant_to_uniform_guidance_offset() {
        let x = rt(vec![1, 2, 4, 4], 24);
        let f = rt(vec![1, 2, 4, 4], 25);
        let w = rt(vec![2, 2, 3, 3], 26).map(|v| v * 0.4);
        let b = rt(vec![2], 27);
        let p = PacParams {
            weight: w,
            bias: b,
            alpha: 0.8,
        };
        let base = pac_forward(&x, &f, &p);
        let shifted = pac_forward(&x, &f.map(|v| v + 2.0), &p);
        for (a, bv) in base.data().iter().zip(shifted.data()) {
            assert_relative_eq!(a, bv, epsilon = 1e-12);
        }
        // dyadic guidance values make the cancellation exact at the bit level
        let fq = f.map(|v| (v * 4.0).round() / 4.0);
        let exact_base = pac_forward(&x, &fq, &p);
        let exact_shift = pac_forward(&x, &fq.map(|v| v + 2.0), &p);
        assert_eq!(exact_base.data(), exact_shift.data());
    }

    #[test]
    fn pac_gradcheck_all_inputs() {
        let x = rt(vec![1, 2, 4, 4], 28);
        let f = rt(vec![1, 2, 4, 4], 29);
        let w = rt(vec![2, 2, 3, 3], 30).map(|v| v * 0.4);
        let b = rt(vec![2], 31);
        let rep = check_scalar_fn(
            &[x, f, w, b],
            |g, ids| {
                let y = g.pac(ids[0], ids[1], ids[2], ids[3], 0.7);
                let sq = g.square(y);
                g.sum(sq)
            },
            1e-5,
        );
        assert!(rep.passes(1e-4), "max rel err {}", rep.max_rel_err);
    }

    #[test]
    fn tfg_is_rectified_pac_and_gradchecks() {
        let x = rt(vec![1, 2, 4, 4], 32);
        let f = rt(vec![1, 2, 4, 4], 33);
        let w = rt(vec![2, 2, 3, 3], 34).map(|v| v * 0.4);
        let b = Tensor::full(vec![2], -100.0);
        // a very negative bias drives the PAC output negative everywhere
        let p = PacParams {
            weight: w.clone(),
            bias: b,
            alpha: 0.5,
        };
        let out = tfg_forward(&x, &f, &p);
        assert!(out.data().iter().all(|&v| v == 0.0));

        let rep = check_scalar_fn(
            &[x, f, w, rt(vec![2], 35)],
            |g, ids| {
                let y = g.tfg(ids[0], ids[1], ids[2], ids[3], 0.7);
                let sq = g.square(y);
                g.sum(sq)
            },
            1e-5,
        );
        assert!(rep.passes(1e-4), "max rel err {}", rep.max_rel_err);
    }

    #[test]
    fn params_archive_round_trips_bit_exact() {
        let mut p = Params::new();
        let mut rng = ChaCha8Rng::seed_from_u64(36);
        p.init_conv("enc.conv1", 4, 3, 3, &mut rng);
        p.init_norm("enc.norm1", 4);
        let mut buf = Vec::new();
        p.write_to(&mut buf).unwrap();
        let q = Params::read_from(&mut buf.as_slice()).unwrap();
        assert_eq!(p.len(), q.len());
        for (name, t) in p.iter() {
            assert_eq!(t, q.get(name), "mismatch in {name}");
        }
    }

    #[test]
    fn norm_groups_divides_channels() {
        assert_eq!(norm_groups(8), 8);
        assert_eq!(norm_groups(12), 6);
        assert_eq!(norm_groups(7), 7);
        assert_eq!(norm_groups(3), 3);
        assert_eq!(norm_groups(48), 8);
    }
}
