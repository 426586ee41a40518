//! The self-supervised and supervised loss stack.
//!
//! Per-scale photometric (SSIM + L1) supervision with a validity mask,
//! percentile clipping, depth-consistency reweighting and edge-guided
//! smoothness; cross-entropy for lumen segmentation; and the two ways of
//! combining the tasks (fixed weights vs. learned homoscedastic uncertainty).
//!
//! All ops come in a tape form (for training) and every scalar landing in a
//! [`LossBundle`] is produced with fixed, deterministic reduction order.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::graph::{Graph, NodeId};
use crate::tensor::Tensor;

#[derive(Debug, Error)]
pub enum LossError {
    #[error("class count mismatch: posteriors have {posterior} classes, labels {labels}")]
    ClassMismatch { posterior: usize, labels: usize },
}

/// SSIM stabilization constants for unit-range images.
pub const SSIM_C1: f64 = 0.01 * 0.01;
pub const SSIM_C2: f64 = 0.03 * 0.03;
/// Posterior floor applied before the cross-entropy log.
pub const POSTERIOR_FLOOR: f64 = 1e-7;
/// Guard for the depth-consistency denominator; pixels below it are flagged
/// degenerate and excluded.
pub const DC_DENOM_EPS: f64 = 1e-12;

/// Fixed loss hyper-parameters.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct LossWeights {
    /// SSIM/L1 blend
    pub eta: f64,
    /// weight of the reweighted photometric term
    pub sigma_photo: f64,
    /// weight of the depth-consistency term
    pub sigma_consistency: f64,
    /// weight of the edge-guided smoothness term
    pub sigma_smooth: f64,
    /// clip percentile in (0, 100]
    pub clip_percentile: f64,
    /// number of disparity scales
    pub scales: usize,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            eta: 0.85,
            sigma_photo: 1.0,
            sigma_consistency: 0.5,
            sigma_smooth: 0.001,
            clip_percentile: 95.0,
            scales: 4,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<(), String> {
        if !(0.0..=1.0).contains(&self.eta) {
            return Err(format!("eta must be in [0, 1], got {}", self.eta));
        }
        if self.sigma_photo < 0.0 || self.sigma_consistency < 0.0 || self.sigma_smooth < 0.0 {
            return Err("sigma weights must be non-negative".into());
        }
        if !(0.0 < self.clip_percentile && self.clip_percentile <= 100.0) {
            return Err(format!(
                "clip percentile must be in (0, 100], got {}",
                self.clip_percentile
            ));
        }
        if self.scales == 0 {
            return Err("scale count must be at least 1".into());
        }
        Ok(())
    }
}

/// Learned per-task noise parameters (positive by construction: the trained
/// variables are log-gammas).
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct TaskUncertainty {
    pub gamma_depth: f64,
    pub gamma_lumen: f64,
}

impl TaskUncertainty {
    pub fn validate(&self) -> Result<(), String> {
        if self.gamma_depth <= 0.0 || self.gamma_lumen <= 0.0 {
            return Err("gamma parameters must be positive".into());
        }
        Ok(())
    }
}

/// Task weighting mode for the combined objective.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum TaskWeighting {
    /// learned homoscedastic uncertainty
    Learned,
    /// fixed linear combination `w_d * L_d + w_l * L_l`
    Fixed { w_depth: f64, w_lumen: f64 },
}

/// Every named term of one training step, for logging and inspection.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LossBundle {
    /// un-reweighted photometric loss per scale (L_v)
    pub photometric: Vec<f64>,
    /// occlusion-reweighted photometric loss per scale (L_v')
    pub photometric_reweighted: Vec<f64>,
    /// depth-consistency loss per scale (L_c)
    pub consistency: Vec<f64>,
    /// edge-guided smoothness per scale (L_e)
    pub smoothness: Vec<f64>,
    /// combined depth objective (L_d)
    pub depth_total: f64,
    /// lumen cross-entropy (L_l)
    pub lumen: f64,
    /// combined multi-task objective (L)
    pub total: f64,
    pub gamma_depth: f64,
    pub gamma_lumen: f64,
    /// PAC guidance scale in effect
    pub alpha: f64,
    /// fraction of pixels kept by the validity mask (scale 0, both directions)
    pub valid_fraction: f64,
    /// set when a validity mask came out empty (degenerate batch)
    pub degenerate_mask: bool,
}

impl LossBundle {
    pub fn all_finite(&self) -> bool {
        let vecs = [
            &self.photometric,
            &self.photometric_reweighted,
            &self.consistency,
            &self.smoothness,
        ];
        vecs.iter().all(|v| v.iter().all(|x| x.is_finite()))
            && self.depth_total.is_finite()
            && self.lumen.is_finite()
            && self.total.is_finite()
            && self.gamma_depth.is_finite()
            && self.gamma_lumen.is_finite()
    }
}

/// Per-scale masks and maps retained for inspection and debug dumps.
#[derive(Clone)]
pub struct MaskBundle {
    /// validity mask V (target direction, full resolution)
    pub validity: Tensor,
    /// ego mask from the warp
    pub ego: Tensor,
    /// depth-consistency map DC
    pub dc: Tensor,
}

// ---------------------------------------------------------------------------
// individual ops (tape form)
// ---------------------------------------------------------------------------

/// Per-pixel SSIM in [-1, 1] with a 3x3 border-clipped mean window,
/// channel-averaged. Zero-radius windows at corners still hold 4 samples.
pub fn ssim_map_g(g: &Graph, a: NodeId, b: NodeId) -> NodeId {
    let (_, c, _, _) = g.value(a).dims4();
    let mut acc: Option<NodeId> = None;
    for ci in 0..c {
        let ac = g.slice_ch(a, ci, 1);
        let bc = g.slice_ch(b, ci, 1);
        let mu_a = g.mean_pool3x3(ac);
        let mu_b = g.mean_pool3x3(bc);
        let a2 = g.square(ac);
        let b2 = g.square(bc);
        let ab = g.mul(ac, bc);
        let mu_a2 = g.square(mu_a);
        let mu_b2 = g.square(mu_b);
        let mu_ab = g.mul(mu_a, mu_b);
        let var_a = g.sub(g.mean_pool3x3(a2), mu_a2);
        let var_b = g.sub(g.mean_pool3x3(b2), mu_b2);
        let cov = g.sub(g.mean_pool3x3(ab), mu_ab);
        let num1 = g.add_const(g.mul_const(mu_ab, 2.0), SSIM_C1);
        let num2 = g.add_const(g.mul_const(cov, 2.0), SSIM_C2);
        let den1 = g.add_const(g.add(mu_a2, mu_b2), SSIM_C1);
        let den2 = g.add_const(g.add(var_a, var_b), SSIM_C2);
        let ssim = g.div(g.mul(num1, num2), g.mul(den1, den2));
        acc = Some(match acc {
            None => ssim,
            Some(prev) => g.add(prev, ssim),
        });
    }
    g.mul_const(acc.unwrap(), 1.0 / c as f64)
}

/// Photometric cost: per-pixel `eta * (1 - SSIM)/2 + (1 - eta) * |I - Ihat|`
/// (un-normalized map) plus the masked mean over `v`.
pub fn photometric_loss_g(
    g: &Graph,
    i_t: NodeId,
    i_hat: NodeId,
    eta: f64,
    v: &Tensor,
) -> (NodeId, NodeId) {
    let ssim = ssim_map_g(g, i_t, i_hat);
    let dssim = g.mul_const(g.add_const(g.neg(ssim), 1.0), 0.5);
    let l1 = g.mean_channels(g.abs(g.sub(i_t, i_hat)));
    let cost = g.add(g.mul_const(dssim, eta), g.mul_const(l1, 1.0 - eta));
    let count = v.sum();
    let scalar = g.masked_mean(cost, v, count);
    (cost, scalar)
}

/// Validity mask: ego mask AND the reconstruction being strictly better than
/// the static (no-warp) source. Channel differences are compared as
/// channel-mean absolute values. Plain (non-differentiable) op.
pub fn validity_mask(i_t: &Tensor, i_hat: &Tensor, i_s: &Tensor, mego: &Tensor) -> Tensor {
    let (n, c, h, w) = i_t.dims4();
    assert_eq!(i_hat.shape(), i_t.shape());
    assert_eq!(i_s.shape(), i_t.shape());
    assert_eq!(mego.shape(), &[n, 1, h, w]);
    let plane = h * w;
    let mut out = vec![0.0; n * plane];
    for ni in 0..n {
        for i in 0..plane {
            if mego.data()[ni * plane + i] == 0.0 {
                continue;
            }
            let mut rec = 0.0;
            let mut stat = 0.0;
            for ci in 0..c {
                let idx = (ni * c + ci) * plane + i;
                rec += (i_t.data()[idx] - i_hat.data()[idx]).abs();
                stat += (i_t.data()[idx] - i_s.data()[idx]).abs();
            }
            if rec < stat {
                out[ni * plane + i] = 1.0;
            }
        }
    }
    Tensor::new(vec![n, 1, h, w], out)
}

/// Nearest-rank percentile of the masked entries of a cost map. `None` when
/// the mask is empty.
pub fn masked_percentile(cost: &Tensor, mask: &Tensor, p: f64) -> Option<f64> {
    assert!(p > 0.0 && p <= 100.0);
    let mask_data = mask.data();
    let mut vals: Vec<f64> = cost
        .data()
        .iter()
        .zip(mask_data)
        .filter(|(_, &m)| m != 0.0)
        .map(|(&v, _)| v)
        .collect();
    if vals.is_empty() {
        return None;
    }
    vals.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let rank = ((p / 100.0) * vals.len() as f64).ceil() as usize;
    Some(vals[rank.max(1) - 1])
}

/// Clip the cost map at the nearest-rank percentile of its masked entries.
/// The threshold is a per-call statistic, excluded from the gradient path.
pub fn clip_outliers_g(g: &Graph, cost: NodeId, v: &Tensor, p: f64) -> (NodeId, Option<f64>) {
    let theta = masked_percentile(&g.value(cost), v, p);
    match theta {
        Some(t) => (g.clamp_max_const(cost, t), Some(t)),
        None => (cost, None),
    }
}

/// Depth-consistency map `|a - b| / (a + b)` and its masked mean. Pixels with
/// a degenerate denominator are excluded from the mask.
pub fn depth_consistency_g(
    g: &Graph,
    z_t: NodeId,
    z_s: NodeId,
    v: &Tensor,
) -> (NodeId, NodeId, Tensor) {
    let denom_vals = g.value(z_t).zip_map(&g.value(z_s), |a, b| a + b);
    let v_eff = v.zip_map(&denom_vals, |m, d| if d > DC_DENOM_EPS { m } else { 0.0 });
    let num = g.abs(g.sub(z_t, z_s));
    let den = g.clamp_min_const(g.add(z_t, z_s), DC_DENOM_EPS);
    let dc = g.div(num, den);
    let count = v_eff.sum();
    let l_c = g.masked_mean(dc, &v_eff, count);
    (dc, l_c, v_eff)
}

/// Occlusion-reweighted photometric loss: masked mean of `(1 - DC) * cost`.
pub fn occlusion_reweight_g(g: &Graph, cost: NodeId, dc: NodeId, v: &Tensor) -> NodeId {
    let m_o = g.add_const(g.neg(dc), 1.0);
    let weighted = g.mul(m_o, cost);
    g.masked_mean(weighted, v, v.sum())
}

/// Edge-guided smoothness on the normalized inverse depth: per axis the mean
/// of `exp(-|grad I|) * |grad D'|` with forward first differences, image
/// gradients averaged over channels, summed over the two axes.
pub fn edge_smoothness_g(g: &Graph, img: NodeId, depth: NodeId) -> NodeId {
    let inv = g.recip(depth);
    let mean_inv = g.mean(inv);
    let dprime = g.div(inv, mean_inv);
    let gx_d = g.abs(g.diff_x(dprime));
    let gy_d = g.abs(g.diff_y(dprime));
    let gx_i = g.mean_channels(g.abs(g.diff_x(img)));
    let gy_i = g.mean_channels(g.abs(g.diff_y(img)));
    let wx = g.exp(g.neg(gx_i));
    let wy = g.exp(g.neg(gy_i));
    let term_x = g.mean(g.mul(wx, gx_d));
    let term_y = g.mean(g.mul(wy, gy_d));
    g.add(term_x, term_y)
}

/// Combined depth objective from per-scale (L_v', L_c, L_e) triples:
/// mean over scales of `s1 * L_v' + s2 * L_c + s3 * L_e`.
pub fn total_depth_loss_g(
    g: &Graph,
    per_scale: &[(NodeId, NodeId, NodeId)],
    w: &LossWeights,
) -> NodeId {
    assert!(!per_scale.is_empty());
    let mut acc: Option<NodeId> = None;
    for &(l_vp, l_c, l_e) in per_scale {
        let a = g.mul_const(l_vp, w.sigma_photo);
        let b = g.mul_const(l_c, w.sigma_consistency);
        let c = g.mul_const(l_e, w.sigma_smooth);
        let s = g.add(g.add(a, b), c);
        acc = Some(match acc {
            None => s,
            Some(prev) => g.add(prev, s),
        });
    }
    g.mul_const(acc.unwrap(), 1.0 / per_scale.len() as f64)
}

/// One-hot encode integer labels [N, 1, H, W] into [N, C, H, W].
pub fn one_hot(labels: &Tensor, num_classes: usize) -> Tensor {
    let (n, c1, h, w) = labels.dims4();
    assert_eq!(c1, 1, "labels must have a single channel");
    let plane = h * w;
    let mut out = vec![0.0; n * num_classes * plane];
    for ni in 0..n {
        for i in 0..plane {
            let cls = labels.data()[ni * plane + i] as usize;
            assert!(cls < num_classes, "label {cls} out of range");
            out[(ni * num_classes + cls) * plane + i] = 1.0;
        }
    }
    Tensor::new(vec![n, num_classes, h, w], out)
}

/// Cross-entropy of one frame's posteriors against one-hot labels, as a mean
/// over pixels. Posteriors are floored before the log.
pub fn cross_entropy_g(g: &Graph, posteriors: NodeId, one_hot_labels: &Tensor) -> Result<NodeId, LossError> {
    let pv = g.value(posteriors);
    let (n, c, h, w) = pv.dims4();
    let (ln_, lc, lh, lw) = one_hot_labels.dims4();
    if (n, h, w) != (ln_, lh, lw) || c != lc {
        return Err(LossError::ClassMismatch {
            posterior: c,
            labels: lc,
        });
    }
    let floored = g.clamp_min_const(posteriors, POSTERIOR_FLOOR);
    let logp = g.ln(floored);
    let lbl = g.constant(one_hot_labels.clone());
    let prod = g.mul(lbl, logp);
    let summed = g.mean_channels(prod); // mean over C = sum / C
    let per_pixel = g.mul_const(summed, -(c as f64)); // restore the class sum
    Ok(g.mean(per_pixel))
}

/// Lumen segmentation loss: summed cross-entropy over both frames, each as a
/// per-pixel mean.
pub fn lumen_loss_g(
    g: &Graph,
    s_t: NodeId,
    s_s: NodeId,
    labels_t: &Tensor,
    labels_s: &Tensor,
) -> Result<NodeId, LossError> {
    let ce_t = cross_entropy_g(g, s_t, labels_t)?;
    let ce_s = cross_entropy_g(g, s_s, labels_s)?;
    Ok(g.add(ce_t, ce_s))
}

/// Homoscedastic multi-task combination:
/// `L_d / (2 g1^2) + L_l / (2 g2^2) + log(1 + g1) + log(1 + g2)`,
/// differentiable in the gamma nodes.
pub fn multitask_loss_g(
    g: &Graph,
    l_d: NodeId,
    l_l: NodeId,
    gamma_depth: NodeId,
    gamma_lumen: NodeId,
) -> NodeId {
    let term = |l: NodeId, gamma: NodeId| {
        let denom = g.mul_const(g.square(gamma), 2.0);
        let weighted = g.div(l, denom);
        let reg = g.ln(g.add_const(gamma, 1.0));
        g.add(weighted, reg)
    };
    let a = term(l_d, gamma_depth);
    let b = term(l_l, gamma_lumen);
    g.add(a, b)
}

/// Plain evaluation of the multi-task objective.
pub fn multitask_loss(l_d: f64, l_l: f64, u: &TaskUncertainty) -> f64 {
    l_d / (2.0 * u.gamma_depth * u.gamma_depth)
        + l_l / (2.0 * u.gamma_lumen * u.gamma_lumen)
        + (1.0 + u.gamma_depth).ln()
        + (1.0 + u.gamma_lumen).ln()
}

/// Fixed-weight linear combination of the two task losses.
pub fn fixed_weight_loss(l_d: f64, l_l: f64, w_depth: f64, w_lumen: f64) -> f64 {
    assert!(w_depth >= 0.0 && w_lumen >= 0.0);
    w_depth * l_d + w_lumen * l_l
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::gradcheck::check_scalar_fn;
    use approx::assert_relative_eq;
    use rand::Rng;
    use rand_chacha::rand_core::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rimg(shape: Vec<usize>, seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = shape.iter().product();
        Tensor::new(shape, (0..n).map(|_| rng.gen_range(0.0..1.0)).collect())
    }

    /// Naive sliding-window SSIM at one pixel of one channel.
    fn ssim_oracle_at(a: &Tensor, b: &Tensor, ci: usize, y: usize, x: usize) -> f64 {
        let (_, c, h, w) = a.dims4();
        let mut wa = Vec::new();
        let mut wb = Vec::new();
        for dy in -1i64..=1 {
            for dx in -1i64..=1 {
                let yy = y as i64 + dy;
                let xx = x as i64 + dx;
                if yy >= 0 && yy < h as i64 && xx >= 0 && xx < w as i64 {
                    let idx = ci * h * w + yy as usize * w + xx as usize;
                    debug_assert!(ci < c);
                    wa.push(a.data()[idx]);
                    wb.push(b.data()[idx]);
                }
            }
        }
        let n = wa.len() as f64;
        let mu_a: f64 = wa.iter().sum::<f64>() / n;
        let mu_b: f64 = wb.iter().sum::<f64>() / n;
        let var_a: f64 = wa.iter().map(|v| v * v).sum::<f64>() / n - mu_a * mu_a;
        let var_b: f64 = wb.iter().map(|v| v * v).sum::<f64>() / n - mu_b * mu_b;
        let cov: f64 = wa.iter().zip(&wb).map(|(p, q)| p * q).sum::<f64>() / n - mu_a * mu_b;
        ((2.0 * mu_a * mu_b + SSIM_C1) * (2.0 * cov + SSIM_C2))
            / ((mu_a * mu_a + mu_b * mu_b + SSIM_C1) * (var_a + var_b + SSIM_C2))
    }

    #[test]
    fn ssim_identity_is_one() {
        let a = rimg(vec![1, 3, 6, 6], 1);
        let g = Graph::new();
        let an = g.constant(a.clone());
        let m = g.value(ssim_map_g(&g, an, an));
        for &v in m.data() {
            assert_relative_eq!(v, 1.0, epsilon = 1e-12);
        }
    }

    #[test]
    fn ssim_is_symmetric_and_bounded() {
        let a = rimg(vec![1, 1, 8, 8], 2);
        let b = rimg(vec![1, 1, 8, 8], 3);
        let g = Graph::new();
        let an = g.constant(a);
        let bn = g.constant(b);
        let ab = g.value(ssim_map_g(&g, an, bn));
        let ba = g.value(ssim_map_g(&g, bn, an));
        for (x, y) in ab.data().iter().zip(ba.data()) {
            assert_relative_eq!(x, y, epsilon = 1e-12);
            assert!((-1.0..=1.0).contains(x), "ssim out of range: {x}");
        }
    }

    #[test]
    fn ssim_luminance_penalty_grows_with_offset() {
        let a = Tensor::full(vec![1, 1, 6, 6], 0.5);
        let g = Graph::new();
        let an = g.constant(a);
        let mut prev = 1.0;
        for offset in [0.1, 0.2, 0.4] {
            let bn = g.constant(Tensor::full(vec![1, 1, 6, 6], 0.5 + offset));
            let m = g.value(ssim_map_g(&g, an, bn));
            let v = m.data()[18];
            assert!(v < prev, "offset {offset}: {v} !< {prev}");
            prev = v;
        }
    }

    #[test]
    fn ssim_matches_sliding_window_oracle() {
        let a = rimg(vec![1, 2, 7, 7], 4);
        let b = rimg(vec![1, 2, 7, 7], 5);
        let g = Graph::new();
        let an = g.constant(a.clone());
        let bn = g.constant(b.clone());
        let m = g.value(ssim_map_g(&g, an, bn));
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        for _ in 0..50 {
            let y = rng.gen_range(0..7);
            let x = rng.gen_range(0..7);
            let want =
                (ssim_oracle_at(&a, &b, 0, y, x) + ssim_oracle_at(&a, &b, 1, y, x)) / 2.0;
            assert_relative_eq!(m.data()[y * 7 + x], want, epsilon = 1e-10);
        }
    }

    #[test]
    fn photometric_zero_on_identical_images() {
        let a = rimg(vec![1, 3, 6, 6], 7);
        let v = Tensor::full(vec![1, 1, 6, 6], 1.0);
        let g = Graph::new();
        let an = g.constant(a);
        let (_, l) = photometric_loss_g(&g, an, an, 0.85, &v);
        assert_relative_eq!(g.value(l).item(), 0.0, epsilon = 1e-12);
    }

    #[test]
    fn photometric_eta_zero_is_masked_mae() {
        let a = rimg(vec![1, 3, 6, 6], 8);
        let b = rimg(vec![1, 3, 6, 6], 9);
        let mut v = Tensor::zeros(vec![1, 1, 6, 6]);
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        for i in 0..36 {
            if rng.gen_bool(0.6) {
                v.data_mut()[i] = 1.0;
            }
        }
        let g = Graph::new();
        let an = g.constant(a.clone());
        let bn = g.constant(b.clone());
        let (_, l) = photometric_loss_g(&g, an, bn, 0.0, &v);
        // oracle: masked channel-mean absolute error
        let mut acc = 0.0;
        let mut count = 0.0;
        for i in 0..36 {
            if v.data()[i] == 0.0 {
                continue;
            }
            count += 1.0;
            let mut d = 0.0;
            for c in 0..3 {
                d += (a.data()[c * 36 + i] - b.data()[c * 36 + i]).abs();
            }
            acc += d / 3.0;
        }
        assert_relative_eq!(g.value(l).item(), acc / count, epsilon = 1e-12);
    }

    #[test]
    fn photometric_empty_mask_is_zero() {
        let a = rimg(vec![1, 3, 4, 4], 11);
        let b = rimg(vec![1, 3, 4, 4], 12);
        let v = Tensor::zeros(vec![1, 1, 4, 4]);
        let g = Graph::new();
        let (_, l) = photometric_loss_g(&g, g.constant(a), g.constant(b), 0.85, &v);
        assert_eq!(g.value(l).item(), 0.0);
    }

    #[test]
    fn validity_excludes_static_pixels() {
        // I_t == I_s at every pixel: the strict inequality fails everywhere
        let i_t = rimg(vec![1, 3, 5, 5], 13);
        let i_s = i_t.clone();
        let i_hat = rimg(vec![1, 3, 5, 5], 14);
        let mego = Tensor::full(vec![1, 1, 5, 5], 1.0);
        let v = validity_mask(&i_t, &i_hat, &i_s, &mego);
        assert!(v.data().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn validity_is_ego_mask_on_perfect_reconstruction() {
        let i_t = rimg(vec![1, 3, 5, 5], 15);
        let i_s = rimg(vec![1, 3, 5, 5], 16);
        let mut mego = Tensor::full(vec![1, 1, 5, 5], 1.0);
        mego.data_mut()[7] = 0.0;
        let v = validity_mask(&i_t, &i_t, &i_s, &mego);
        assert_eq!(v.data(), mego.data());
    }

    #[test]
    fn validity_dominated_by_ego_mask() {
        let i_t = rimg(vec![1, 3, 5, 5], 17);
        let i_hat = rimg(vec![1, 3, 5, 5], 18);
        let i_s = rimg(vec![1, 3, 5, 5], 19);
        let mut rng = ChaCha8Rng::seed_from_u64(20);
        let mego = Tensor::new(
            vec![1, 1, 5, 5],
            (0..25)
                .map(|_| if rng.gen_bool(0.5) { 1.0 } else { 0.0 })
                .collect(),
        );
        let v = validity_mask(&i_t, &i_hat, &i_s, &mego);
        for (vi, mi) in v.data().iter().zip(mego.data()) {
            assert!(vi <= mi);
            assert!(*vi == 0.0 || *vi == 1.0);
        }
    }

    #[test]
    fn clip_p100_is_identity() {
        let cost = rimg(vec![1, 1, 6, 6], 21);
        let v = Tensor::full(vec![1, 1, 6, 6], 1.0);
        let g = Graph::new();
        let cn = g.param(cost.clone());
        let (clipped, theta) = clip_outliers_g(&g, cn, &v, 100.0);
        assert_eq!(g.value(clipped).data(), cost.data());
        assert_eq!(theta.unwrap(), cost.max());
        // gradient is the identity too
        let s = g.sum(clipped);
        let grads = g.backward(s);
        assert!(grads.get(cn).unwrap().data().iter().all(|&x| x == 1.0));
    }

    #[test]
    fn clip_nearest_rank_1_to_100() {
        let costs: Vec<f64> = (1..=100).map(|i| i as f64).collect();
        let cost = Tensor::new(vec![1, 1, 10, 10], costs);
        let v = Tensor::full(vec![1, 1, 10, 10], 1.0);
        let g = Graph::new();
        let cn = g.constant(cost);
        let (clipped, theta) = clip_outliers_g(&g, cn, &v, 95.0);
        assert_eq!(theta.unwrap(), 95.0);
        let out = g.value(clipped);
        for (i, &x) in out.data().iter().enumerate() {
            let want = ((i + 1) as f64).min(95.0);
            assert_eq!(x, want);
        }
    }

    #[test]
    fn clip_matches_sort_oracle_and_is_idempotent() {
        let mut rng = ChaCha8Rng::seed_from_u64(22);
        let cost = Tensor::new(
            vec![1, 1, 8, 8],
            (0..64).map(|_| rng.gen_range(0.0..5.0)).collect(),
        );
        let v = Tensor::new(
            vec![1, 1, 8, 8],
            (0..64)
                .map(|_| if rng.gen_bool(0.7) { 1.0 } else { 0.0 })
                .collect(),
        );
        let p = 90.0;
        // sort-based oracle
        let mut vals: Vec<f64> = cost
            .data()
            .iter()
            .zip(v.data())
            .filter(|(_, &m)| m == 1.0)
            .map(|(&c, _)| c)
            .collect();
        vals.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let rank = ((p / 100.0) * vals.len() as f64).ceil() as usize;
        let theta_oracle = vals[rank - 1];

        let g = Graph::new();
        let cn = g.constant(cost.clone());
        let (clipped, theta) = clip_outliers_g(&g, cn, &v, p);
        assert_eq!(theta.unwrap(), theta_oracle);
        let out = g.value(clipped);
        for (c0, c1) in cost.data().iter().zip(out.data()) {
            assert!(c1 <= c0, "clip must never increase a cost");
            assert_eq!(*c1, c0.min(theta_oracle));
        }
        // idempotent: clipping the clipped map with the same mask leaves it be
        let (clipped2, _) = clip_outliers_g(&g, clipped, &v, p);
        assert_eq!(g.value(clipped2).data(), out.data());
    }

    #[test]
    fn dc_basic_values_and_scale_invariance() {
        let g = Graph::new();
        let v = Tensor::full(vec![1, 1, 1, 2], 1.0);
        let zt = g.constant(Tensor::new(vec![1, 1, 1, 2], vec![3.0, 5.0]));
        let zs = g.constant(Tensor::new(vec![1, 1, 1, 2], vec![1.0, 5.0]));
        let (dc, l_c, _) = depth_consistency_g(&g, zt, zs, &v);
        let dcv = g.value(dc);
        assert_relative_eq!(dcv.data()[0], 0.5, epsilon = 1e-12);
        assert_relative_eq!(dcv.data()[1], 0.0, epsilon = 1e-12);
        assert_relative_eq!(g.value(l_c).item(), 0.25, epsilon = 1e-12);
        // joint positive scaling leaves DC unchanged
        for k in [0.5, 2.0, 7.3] {
            let ztk = g.constant(Tensor::new(vec![1, 1, 1, 2], vec![3.0 * k, 5.0 * k]));
            let zsk = g.constant(Tensor::new(vec![1, 1, 1, 2], vec![k, 5.0 * k]));
            let (dck, _, _) = depth_consistency_g(&g, ztk, zsk, &v);
            for (a, b) in g.value(dck).data().iter().zip(dcv.data()) {
                assert_relative_eq!(a, b, epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn dc_degenerate_denominator_is_excluded() {
        let g = Graph::new();
        let v = Tensor::full(vec![1, 1, 1, 2], 1.0);
        let zt = g.constant(Tensor::new(vec![1, 1, 1, 2], vec![0.0, 2.0]));
        let zs = g.constant(Tensor::new(vec![1, 1, 1, 2], vec![0.0, 2.0]));
        let (_, l_c, v_eff) = depth_consistency_g(&g, zt, zs, &v);
        assert_eq!(v_eff.data(), &[0.0, 1.0]);
        assert_relative_eq!(g.value(l_c).item(), 0.0, epsilon = 1e-12);
    }

    #[test]
    fn occlusion_reweight_endpoints_and_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let cost = Tensor::new(
            vec![1, 1, 4, 4],
            (0..16).map(|_| rng.gen_range(0.0..2.0)).collect(),
        );
        let v = Tensor::full(vec![1, 1, 4, 4], 1.0);
        let g = Graph::new();
        let cn = g.constant(cost.clone());

        let zero_dc = g.constant(Tensor::zeros(vec![1, 1, 4, 4]));
        let lvp = occlusion_reweight_g(&g, cn, zero_dc, &v);
        assert_relative_eq!(g.value(lvp).item(), cost.mean(), epsilon = 1e-12);

        let one_dc = g.constant(Tensor::full(vec![1, 1, 4, 4], 1.0));
        let lvp = occlusion_reweight_g(&g, cn, one_dc, &v);
        assert_relative_eq!(g.value(lvp).item(), 0.0, epsilon = 1e-12);

        let dc = Tensor::new(
            vec![1, 1, 4, 4],
            (0..16).map(|_| rng.gen_range(0.0..1.0)).collect(),
        );
        let dcn = g.constant(dc.clone());
        let lvp = occlusion_reweight_g(&g, cn, dcn, &v);
        let oracle: f64 = cost
            .data()
            .iter()
            .zip(dc.data())
            .map(|(c, d)| (1.0 - d) * c)
            .sum::<f64>()
            / 16.0;
        assert_relative_eq!(g.value(lvp).item(), oracle, epsilon = 1e-12);
    }

    #[test]
    fn smoothness_zero_for_constant_depth() {
        let img = rimg(vec![1, 3, 6, 6], 24);
        let depth = Tensor::full(vec![1, 1, 6, 6], 7.0);
        let g = Graph::new();
        let l = edge_smoothness_g(&g, g.constant(img), g.constant(depth));
        assert_relative_eq!(g.value(l).item(), 0.0, epsilon = 1e-12);
    }

    #[test]
    fn smoothness_equals_normalized_ramp_slope_on_flat_image() {
        // inverse depth is linear in x: 1/D = a + b x
        let (a, b) = (0.2, 0.05);
        let (h, w) = (6, 8);
        let mut depth = vec![0.0; h * w];
        for y in 0..h {
            for x in 0..w {
                depth[y * w + x] = 1.0 / (a + b * x as f64);
            }
        }
        let depth = Tensor::new(vec![1, 1, h, w], depth);
        let img = Tensor::full(vec![1, 3, h, w], 0.5);
        let g = Graph::new();
        let l = edge_smoothness_g(&g, g.constant(img), g.constant(depth));
        // mean(1/D) = a + b*(w-1)/2; the normalized slope is b / that
        let mean_inv = a + b * (w as f64 - 1.0) / 2.0;
        assert_relative_eq!(g.value(l).item(), b / mean_inv, epsilon = 1e-10);
    }

    #[test]
    fn smoothness_prefers_depth_edges_on_image_edges() {
        let (h, w) = (6, 8);
        // depth discontinuity in the middle column
        let mut depth = vec![2.0; h * w];
        for y in 0..h {
            for x in w / 2..w {
                depth[y * w + x] = 6.0;
            }
        }
        let depth = Tensor::new(vec![1, 1, h, w], depth);
        // image with an intensity edge at the same place vs flat image
        let mut edge_img = vec![0.2; 3 * h * w];
        for c in 0..3 {
            for y in 0..h {
                for x in w / 2..w {
                    edge_img[c * h * w + y * w + x] = 0.9;
                }
            }
        }
        let edge_img = Tensor::new(vec![1, 3, h, w], edge_img);
        let flat_img = Tensor::full(vec![1, 3, h, w], 0.2);
        let g = Graph::new();
        let dn = g.constant(depth);
        let aligned = g.value(edge_smoothness_g(&g, g.constant(edge_img), dn)).item();
        let unaligned = g.value(edge_smoothness_g(&g, g.constant(flat_img), dn)).item();
        assert!(
            aligned < unaligned,
            "edge-aligned {aligned} should be below flat-image {unaligned}"
        );
    }

    #[test]
    fn total_depth_loss_arithmetic() {
        let g = Graph::new();
        let w = LossWeights::default();
        let one = g.constant(Tensor::scalar(1.0));
        let l = total_depth_loss_g(&g, &[(one, one, one)], &w);
        assert_relative_eq!(g.value(l).item(), 1.501, epsilon = 1e-12);
        // scale-average invariance on identical bundles
        let l4 = total_depth_loss_g(&g, &[(one, one, one); 4], &w);
        assert_relative_eq!(g.value(l4).item(), 1.501, epsilon = 1e-12);
        // all zero
        let zero = g.constant(Tensor::scalar(0.0));
        let lz = total_depth_loss_g(&g, &[(zero, zero, zero); 4], &w);
        assert_eq!(g.value(lz).item(), 0.0);
    }

    #[test]
    fn lumen_loss_perfect_and_uniform() {
        let labels = Tensor::new(vec![1, 1, 2, 2], vec![0.0, 1.0, 1.0, 0.0]);
        let oh = one_hot(&labels, 2);
        let g = Graph::new();
        // perfect one-hot predictions: loss is the floor epsilon, ~0
        let perfect = g.constant(oh.clone());
        let l = lumen_loss_g(&g, perfect, perfect, &oh, &oh).unwrap();
        assert!(g.value(l).item().abs() < 1e-9);
        // uniform posteriors: ln 2 per frame per pixel, two frames
        let uniform = g.constant(Tensor::full(vec![1, 2, 2, 2], 0.5));
        let l = lumen_loss_g(&g, uniform, uniform, &oh, &oh).unwrap();
        assert_relative_eq!(g.value(l).item(), 2.0 * (2.0f64).ln(), epsilon = 1e-12);
    }

    #[test]
    fn lumen_loss_matches_per_pixel_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(25);
        let (h, w, c) = (3, 4, 3);
        // random posteriors that sum to 1
        let mut post = vec![0.0; c * h * w];
        for i in 0..h * w {
            let mut vals: Vec<f64> = (0..c).map(|_| rng.gen_range(0.01..1.0)).collect();
            let s: f64 = vals.iter().sum();
            for v in vals.iter_mut() {
                *v /= s;
            }
            for (ci, v) in vals.iter().enumerate() {
                post[ci * h * w + i] = *v;
            }
        }
        let post = Tensor::new(vec![1, c, h, w], post);
        let labels = Tensor::new(
            vec![1, 1, h, w],
            (0..h * w).map(|_| rng.gen_range(0..c) as f64).collect(),
        );
        let oh = one_hot(&labels, c);
        let g = Graph::new();
        let pn = g.constant(post.clone());
        let l = cross_entropy_g(&g, pn, &oh).unwrap();
        // scalar oracle
        let mut acc = 0.0;
        for i in 0..h * w {
            let cls = labels.data()[i] as usize;
            acc -= post.data()[cls * h * w + i].max(POSTERIOR_FLOOR).ln();
        }
        assert_relative_eq!(g.value(l).item(), acc / (h * w) as f64, epsilon = 1e-12);
    }

    #[test]
    fn lumen_class_mismatch_is_an_error() {
        let g = Graph::new();
        let post = g.constant(Tensor::full(vec![1, 3, 2, 2], 1.0 / 3.0));
        let labels = Tensor::new(vec![1, 1, 2, 2], vec![0.0, 1.0, 1.0, 0.0]);
        let oh = one_hot(&labels, 2);
        assert!(matches!(
            cross_entropy_g(&g, post, &oh),
            Err(LossError::ClassMismatch { .. })
        ));
    }

    #[test]
    fn multitask_unit_gammas() {
        let u = TaskUncertainty {
            gamma_depth: 1.0,
            gamma_lumen: 1.0,
        };
        let l = multitask_loss(2.0, 3.0, &u);
        assert_relative_eq!(l, 2.5 + 2.0 * (2.0f64).ln(), epsilon = 1e-12);
    }

    #[test]
    fn multitask_stationary_gamma_matches_grid_search() {
        // for fixed L_d, the optimal gamma satisfies gamma^3 / (1 + gamma) = L_d
        for l_d in [0.05, 0.3, 1.2] {
            let objective =
                |gamma: f64| l_d / (2.0 * gamma * gamma) + (1.0 + gamma).ln();
            // brute-force 1-D minimization
            let mut best = (f64::INFINITY, 0.0);
            let mut x = 0.01;
            while x < 10.0 {
                let v = objective(x);
                if v < best.0 {
                    best = (v, x);
                }
                x += 1e-4;
            }
            let gamma_star = best.1;
            let lhs = gamma_star.powi(3) / (1.0 + gamma_star);
            assert_relative_eq!(lhs, l_d, max_relative = 1e-2);
        }
    }

    #[test]
    fn multitask_weight_decreases_in_gamma() {
        let mut prev = f64::INFINITY;
        for gamma in [0.5, 1.0, 2.0, 4.0] {
            let w = 1.0 / (2.0 * gamma * gamma);
            assert!(w < prev);
            prev = w;
        }
    }

    #[test]
    fn fixed_weight_examples() {
        assert_eq!(fixed_weight_loss(2.0, 3.0, 1.0, 1.0), 5.0);
        assert_relative_eq!(
            fixed_weight_loss(1.0, 2.0, 0.6, 0.4),
            1.4,
            epsilon = 1e-12
        );
        assert_eq!(fixed_weight_loss(7.0, 3.0, 0.0, 1.0), 3.0);
    }

    #[test]
    fn loss_stack_gradcheck() {
        // photometric + clip + consistency reweighting, through all inputs
        let i_t = rimg(vec![1, 2, 5, 5], 26);
        let i_hat = rimg(vec![1, 2, 5, 5], 27);
        let zt = rimg(vec![1, 1, 5, 5], 28).map(|v| v + 2.0);
        let zs = rimg(vec![1, 1, 5, 5], 29).map(|v| v + 2.0);
        let v = Tensor::full(vec![1, 1, 5, 5], 1.0);
        let rep = check_scalar_fn(
            &[i_hat.clone(), zt.clone(), zs.clone()],
            |g, ids| {
                let it = g.constant(i_t.clone());
                let (cost, _) = photometric_loss_g(g, it, ids[0], 0.85, &v);
                let (dc, l_c, v_eff) = depth_consistency_g(g, ids[1], ids[2], &v);
                let l_vp = occlusion_reweight_g(g, cost, dc, &v_eff);
                let both = g.add(l_vp, l_c);
                g.mul_const(both, 3.0)
            },
            1e-5,
        );
        assert!(rep.passes(1e-4), "max rel err {}", rep.max_rel_err);
    }

    #[test]
    fn smoothness_gradcheck() {
        let img = rimg(vec![1, 3, 5, 5], 30);
        let depth = rimg(vec![1, 1, 5, 5], 31).map(|v| v * 3.0 + 2.0);
        let rep = check_scalar_fn(
            &[depth],
            |g, ids| {
                let im = g.constant(img.clone());
                edge_smoothness_g(g, im, ids[0])
            },
            1e-6,
        );
        assert!(rep.passes(1e-4), "max rel err {}", rep.max_rel_err);
    }

    #[test]
    fn lumen_and_multitask_gradcheck() {
        let mut rng = ChaCha8Rng::seed_from_u64(32);
        let logits = Tensor::randn(vec![1, 2, 4, 4], &mut rng);
        let labels = Tensor::new(
            vec![1, 1, 4, 4],
            (0..16).map(|_| rng.gen_range(0..2) as f64).collect(),
        );
        let oh = one_hot(&labels, 2);
        let rho = Tensor::new(vec![1], vec![0.3]);
        let l_d_const = 0.7;
        let rep = check_scalar_fn(
            &[logits, rho],
            |g, ids| {
                let post = g.softmax_ch(ids[0]);
                let ce = cross_entropy_g(g, post, &oh).unwrap();
                let gamma = g.exp(ids[1]);
                let l_d = g.constant(Tensor::scalar(l_d_const));
                multitask_loss_g(g, l_d, ce, gamma, gamma)
            },
            1e-5,
        );
        assert!(rep.passes(1e-4), "max rel err {}", rep.max_rel_err);
    }
}
