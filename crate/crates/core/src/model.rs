//! The multi-task network: two residual encoders (depth, lumen), two
//! multi-scale decoders run in lock-step and cross-connected by TFG pathways,
//! and a pose head that reuses the depth encoder.
//!
//! The depth decoder emits sigmoid disparity at four scales; the lumen
//! decoder emits class posteriors at full resolution. At each pathway level
//! the decoders exchange guided features: the depth stream receives a TFG of
//! its own features guided by the lumen features and vice versa, fused by
//! addition. The pose head consumes the concatenated bottleneck features of
//! the two frames — at inference only the depth and lumen paths run.

use std::io::Read;
use std::path::Path;

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::graph::{Graph, NodeId};
use crate::nn::{norm_groups, Binder, Params};
use crate::tensor::Tensor;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("input size {0}x{1} must be divisible by 32")]
    BadSize(usize, usize),
    #[error("invalid config: {0}")]
    BadConfig(String),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("corrupt checkpoint: {0}")]
    Corrupt(String),
    #[error(transparent)]
    Params(#[from] crate::nn::NnError),
}

/// How the cross-task pathways are realized.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PathwayKind {
    /// pixel-adaptive convolution modulated by the other task's features
    Pac,
    /// same weights applied as a plain convolution (guidance ignored)
    Conv,
    /// pathways disabled entirely
    Off,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SoftEnNetConfig {
    /// channels of the five encoder levels (H/2 .. H/32)
    pub encoder_channels: [usize; 5],
    /// channels of the five decoder levels, deepest first
    pub decoder_channels: [usize; 5],
    /// number of disparity scales (heads at decoder levels 0..scales-1)
    pub scales: usize,
    /// lumen classes
    pub num_classes: usize,
    /// decoder levels carrying TFG connections (subset of 0..scales)
    pub pathway_levels: Vec<usize>,
    pub pathway_kind: PathwayKind,
    /// PAC kernel size (odd)
    pub pac_kernel: usize,
    /// effective minimum depth (scene units); the scaling map hits it at d=1
    pub d_min: f64,
    /// maximum depth (scene units); the scaling map approaches it as d->0
    pub d_max: f64,
    /// scale applied to the raw pose regression output
    pub pose_scale: f64,
}

impl SoftEnNetConfig {
    /// Desk-scale preset: small channel widths, full pathway wiring.
    pub fn small() -> Self {
        Self {
            encoder_channels: [8, 8, 16, 24, 32],
            decoder_channels: [24, 16, 12, 8, 8],
            scales: 4,
            num_classes: 2,
            pathway_levels: vec![0, 1, 2, 3],
            pathway_kind: PathwayKind::Pac,
            pac_kernel: 3,
            d_min: 0.1,
            d_max: 20.0,
            pose_scale: 0.01,
        }
    }

    /// Full-width preset mirroring an 18-layer residual backbone.
    pub fn standard() -> Self {
        Self {
            encoder_channels: [64, 64, 128, 256, 512],
            decoder_channels: [256, 128, 64, 32, 16],
            ..Self::small()
        }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        if self.scales == 0 || self.scales > 4 {
            return Err(ModelError::BadConfig(format!(
                "scales must be in 1..=4, got {}",
                self.scales
            )));
        }
        if self.num_classes < 2 {
            return Err(ModelError::BadConfig("need at least two classes".into()));
        }
        if self.pac_kernel % 2 == 0 {
            return Err(ModelError::BadConfig("PAC kernel must be odd".into()));
        }
        if !(0.0 < self.d_min && self.d_min < self.d_max) {
            return Err(ModelError::BadConfig(format!(
                "need 0 < d_min < d_max, got {} and {}",
                self.d_min, self.d_max
            )));
        }
        if self.pathway_levels.iter().any(|&l| l >= self.scales) {
            return Err(ModelError::BadConfig(
                "pathway levels must be existing decoder head levels".into(),
            ));
        }
        Ok(())
    }
}

/// Full-network outputs for one image (plain tensors).
pub struct ModelOutputs {
    /// sigmoid disparity pyramid, scale s at resolution H/2^s
    pub disparity: Vec<Tensor>,
    /// metric depth pyramid (same layout)
    pub depth: Vec<Tensor>,
    /// per-pixel class posteriors at full resolution
    pub lumen_posteriors: Tensor,
}

/// Tape handles of one forward pass.
pub struct ForwardNodes {
    pub disparity: Vec<NodeId>,
    pub lumen_posteriors: NodeId,
    /// bottleneck features, reused by the pose head
    pub bottleneck: NodeId,
}

pub struct SoftEnNet {
    pub config: SoftEnNetConfig,
    pub params: Params,
}

impl SoftEnNet {
    /// Fresh network with He-initialized weights, deterministic in the seed.
    pub fn new(config: SoftEnNetConfig, seed: u64) -> Result<Self, ModelError> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = Params::new();
        for enc in ["depth_enc", "lumen_enc"] {
            init_encoder(&mut p, enc, &config.encoder_channels, &mut rng);
        }
        for dec in ["depth_dec", "lumen_dec"] {
            init_decoder(
                &mut p,
                dec,
                &config.encoder_channels,
                &config.decoder_channels,
                &mut rng,
            );
        }
        // heads
        for s in 0..config.scales {
            p.init_conv(
                &format!("depth_dec.disp{s}"),
                1,
                config.decoder_channels[4 - s],
                3,
                &mut rng,
            );
            // start near the far end of the depth range
            p.get_mut(&format!("depth_dec.disp{s}.b")).data_mut()[0] = -3.9;
        }
        p.init_conv(
            "lumen_dec.classes",
            config.num_classes,
            config.decoder_channels[4],
            3,
            &mut rng,
        );
        // pathway PACs (same channel count on both sides of each level)
        for &level in &config.pathway_levels {
            let ch = config.decoder_channels[4 - level];
            p.init_conv(
                &format!("pathway.depth{level}"),
                ch,
                ch,
                config.pac_kernel,
                &mut rng,
            );
            p.init_conv(
                &format!("pathway.lumen{level}"),
                ch,
                ch,
                config.pac_kernel,
                &mut rng,
            );
        }
        // pose decoder: four convolutions on the concatenated bottlenecks
        let c5 = config.encoder_channels[4];
        p.init_conv("pose_dec.conv0", c5, 2 * c5, 3, &mut rng);
        p.init_conv("pose_dec.conv1", c5, c5, 3, &mut rng);
        p.init_conv("pose_dec.conv2", c5, c5, 3, &mut rng);
        p.init_conv("pose_dec.conv3", 6, c5, 1, &mut rng);
        // learned task uncertainties, stored as log-gamma (gamma = 1 at init)
        p.insert("uncertainty.rho_depth", Tensor::zeros(vec![1]));
        p.insert("uncertainty.rho_lumen", Tensor::zeros(vec![1]));
        Ok(Self { config, params: p })
    }

    pub fn check_input(&self, img: &Tensor) -> Result<(), ModelError> {
        let (_, _, h, w) = img.dims4();
        if h % 32 != 0 || w % 32 != 0 {
            return Err(ModelError::BadSize(h, w));
        }
        Ok(())
    }

    /// Encoder pyramid (five levels, H/2 .. H/32) under a name prefix.
    pub fn encoder_g(&self, b: &Binder, prefix: &str, x: NodeId) -> [NodeId; 5] {
        let e1 = conv_norm_relu(b, &format!("{prefix}.stem"), x, 2, 3);
        let e2 = stage_g(b, &format!("{prefix}.stage1"), e1);
        let e3 = stage_g(b, &format!("{prefix}.stage2"), e2);
        let e4 = stage_g(b, &format!("{prefix}.stage3"), e3);
        let e5 = stage_g(b, &format!("{prefix}.stage4"), e4);
        [e1, e2, e3, e4, e5]
    }

    /// Joint two-decoder pass with cross-task pathways. Returns the disparity
    /// pyramid (scale 0 first) and the lumen posteriors.
    pub fn forward_g(&self, b: &Binder, img: NodeId, alpha: f64) -> ForwardNodes {
        let g = b.graph;
        let e_d = self.encoder_g(b, "depth_enc", img);
        let e_l = self.encoder_g(b, "lumen_enc", img);
        let mut xd = e_d[4];
        let mut xl = e_l[4];
        let mut disp: Vec<Option<NodeId>> = vec![None; self.config.scales];
        for level in (0..5usize).rev() {
            let skip = if level >= 1 {
                Some((e_d[level - 1], e_l[level - 1]))
            } else {
                None
            };
            xd = decoder_level_g(b, &format!("depth_dec.l{level}"), xd, skip.map(|s| s.0));
            xl = decoder_level_g(b, &format!("lumen_dec.l{level}"), xl, skip.map(|s| s.1));
            if level < self.config.scales
                && self.config.pathway_levels.contains(&level)
                && self.config.pathway_kind != PathwayKind::Off
            {
                let (hd, hl) = (xd, xl);
                let wd = b.node(&format!("pathway.depth{level}.w"));
                let bd = b.node(&format!("pathway.depth{level}.b"));
                let wl = b.node(&format!("pathway.lumen{level}.w"));
                let bl = b.node(&format!("pathway.lumen{level}.b"));
                let pad = self.config.pac_kernel / 2;
                let (guided_d, guided_l) = match self.config.pathway_kind {
                    PathwayKind::Pac => (
                        g.tfg(hd, hl, wd, bd, alpha),
                        g.tfg(hl, hd, wl, bl, alpha),
                    ),
                    PathwayKind::Conv => (
                        g.relu(g.conv2d(hd, wd, bd, 1, pad)),
                        g.relu(g.conv2d(hl, wl, bl, 1, pad)),
                    ),
                    PathwayKind::Off => unreachable!(),
                };
                xd = g.add(xd, guided_d);
                xl = g.add(xl, guided_l);
            }
            if level < self.config.scales {
                let w = b.node(&format!("depth_dec.disp{level}.w"));
                let bias = b.node(&format!("depth_dec.disp{level}.b"));
                disp[level] = Some(g.sigmoid(g.conv2d(xd, w, bias, 1, 1)));
            }
        }
        let w = b.node("lumen_dec.classes.w");
        let bias = b.node("lumen_dec.classes.b");
        let logits = g.conv2d(xl, w, bias, 1, 1);
        ForwardNodes {
            disparity: disp.into_iter().map(Option::unwrap).collect(),
            lumen_posteriors: g.softmax_ch(logits),
            bottleneck: e_d[4],
        }
    }

    /// Pose head on precomputed bottleneck features of the two frames.
    /// Output `[N, 6]`: axis-angle then translation, scaled for stability.
    pub fn pose_g(&self, b: &Binder, bottleneck_t: NodeId, bottleneck_s: NodeId) -> NodeId {
        let g = b.graph;
        let x = g.concat_ch(&[bottleneck_t, bottleneck_s]);
        let x = g.relu(g.conv2d(
            x,
            b.node("pose_dec.conv0.w"),
            b.node("pose_dec.conv0.b"),
            1,
            1,
        ));
        let x = g.relu(g.conv2d(
            x,
            b.node("pose_dec.conv1.w"),
            b.node("pose_dec.conv1.b"),
            1,
            1,
        ));
        let x = g.relu(g.conv2d(
            x,
            b.node("pose_dec.conv2.w"),
            b.node("pose_dec.conv2.b"),
            1,
            1,
        ));
        let x = g.conv2d(
            x,
            b.node("pose_dec.conv3.w"),
            b.node("pose_dec.conv3.b"),
            1,
            0,
        );
        g.mul_const(g.mean_hw(x), self.config.pose_scale)
    }

    // ---- plain-tensor API ----------------------------------------------------

    /// Disparity pyramid for a batch of images.
    pub fn depth_forward(&self, img: &Tensor, alpha: f64) -> Result<Vec<Tensor>, ModelError> {
        self.check_input(img)?;
        let g = Graph::new();
        let b = Binder::new(&g, &self.params);
        let x = g.constant(img.clone());
        let out = self.forward_g(&b, x, alpha);
        Ok(out.disparity.iter().map(|&id| g.value(id)).collect())
    }

    /// Full-resolution class posteriors for a batch of images.
    pub fn lumen_forward(&self, img: &Tensor, alpha: f64) -> Result<Tensor, ModelError> {
        self.check_input(img)?;
        let g = Graph::new();
        let b = Binder::new(&g, &self.params);
        let x = g.constant(img.clone());
        let out = self.forward_g(&b, x, alpha);
        Ok(g.value(out.lumen_posteriors))
    }

    /// Both heads in one pass, plus metric depth.
    pub fn softennet_forward(&self, img: &Tensor, alpha: f64) -> Result<ModelOutputs, ModelError> {
        self.check_input(img)?;
        let g = Graph::new();
        let b = Binder::new(&g, &self.params);
        let x = g.constant(img.clone());
        let out = self.forward_g(&b, x, alpha);
        let disparity: Vec<Tensor> = out.disparity.iter().map(|&id| g.value(id)).collect();
        let depth = disparity
            .iter()
            .map(|d| disparity_to_depth(d, self.config.d_min, self.config.d_max))
            .collect();
        Ok(ModelOutputs {
            disparity,
            depth,
            lumen_posteriors: g.value(out.lumen_posteriors),
        })
    }

    /// 6-DOF pose from a channel-concatenated image pair [N, 6, H, W].
    pub fn pose_forward(&self, pair: &Tensor) -> Result<Tensor, ModelError> {
        let (_, c, h, w) = pair.dims4();
        if c != 6 {
            return Err(ModelError::BadConfig(format!(
                "pose input must have 6 channels, got {c}"
            )));
        }
        if h % 32 != 0 || w % 32 != 0 {
            return Err(ModelError::BadSize(h, w));
        }
        let g = Graph::new();
        let b = Binder::new(&g, &self.params);
        let pn = g.constant(pair.clone());
        let i_t = g.slice_ch(pn, 0, 3);
        let i_s = g.slice_ch(pn, 3, 3);
        let e_t = self.encoder_g(&b, "depth_enc", i_t);
        let e_s = self.encoder_g(&b, "depth_enc", i_s);
        Ok(g.value(self.pose_g(&b, e_t[4], e_s[4])))
    }

    /// Current learned task uncertainties.
    pub fn uncertainty(&self) -> crate::losses::TaskUncertainty {
        crate::losses::TaskUncertainty {
            gamma_depth: self.params.get("uncertainty.rho_depth").item().exp(),
            gamma_lumen: self.params.get("uncertainty.rho_lumen").item().exp(),
        }
    }
}

/// Monotone map from sigmoid disparity to metric depth:
/// `D = 1 / (d * (1/d_min - 1/d_max) + 1/d_max)`, so `d -> 0` gives `d_max`
/// and `d = 1` gives `d_min`.
pub fn disparity_to_depth(d: &Tensor, d_min: f64, d_max: f64) -> Tensor {
    let slope = 1.0 / d_min - 1.0 / d_max;
    let offset = 1.0 / d_max;
    d.map(|v| 1.0 / (v * slope + offset))
}

/// Tape version of the disparity-to-depth scaling.
pub fn disparity_to_depth_g(g: &Graph, d: NodeId, d_min: f64, d_max: f64) -> NodeId {
    let slope = 1.0 / d_min - 1.0 / d_max;
    let offset = 1.0 / d_max;
    g.recip(g.add_const(g.mul_const(d, slope), offset))
}

/// PAC guidance scale schedule: starts at 1e-4 and doubles every
/// `double_every` epochs until it reaches 1.
pub fn pac_alpha_schedule(epoch: usize, double_every: usize) -> f64 {
    let doublings = (epoch / double_every.max(1)) as i32;
    (1e-4 * 2f64.powi(doublings)).min(1.0)
}

// ---------------------------------------------------------------------------
// blocks
// ---------------------------------------------------------------------------

fn conv_norm_relu(b: &Binder, name: &str, x: NodeId, stride: usize, pad: usize) -> NodeId {
    let g = b.graph;
    let w = b.node(&format!("{name}.conv.w"));
    let bias = b.node(&format!("{name}.conv.b"));
    let y = g.conv2d(x, w, bias, stride, pad);
    let ch = g.shape(y)[1];
    let gamma = b.node(&format!("{name}.norm.g"));
    let beta = b.node(&format!("{name}.norm.s"));
    let y = g.group_norm(y, gamma, beta, norm_groups(ch), 1e-5);
    g.relu(y)
}

/// Residual basic block; projection shortcut when shape changes.
fn basic_block_g(b: &Binder, name: &str, x: NodeId, stride: usize) -> NodeId {
    let g = b.graph;
    let w1 = b.node(&format!("{name}.conv1.w"));
    let b1 = b.node(&format!("{name}.conv1.b"));
    let h = g.conv2d(x, w1, b1, stride, 1);
    let ch = g.shape(h)[1];
    let h = g.group_norm(
        h,
        b.node(&format!("{name}.norm1.g")),
        b.node(&format!("{name}.norm1.s")),
        norm_groups(ch),
        1e-5,
    );
    let h = g.relu(h);
    let w2 = b.node(&format!("{name}.conv2.w"));
    let b2 = b.node(&format!("{name}.conv2.b"));
    let h = g.conv2d(h, w2, b2, 1, 1);
    let h = g.group_norm(
        h,
        b.node(&format!("{name}.norm2.g")),
        b.node(&format!("{name}.norm2.s")),
        norm_groups(ch),
        1e-5,
    );
    let skip = if b.has_param(&format!("{name}.proj.conv.w")) {
        let ws = b.node(&format!("{name}.proj.conv.w"));
        let bs = b.node(&format!("{name}.proj.conv.b"));
        let s = g.conv2d(x, ws, bs, stride, 0);
        g.group_norm(
            s,
            b.node(&format!("{name}.proj.norm.g")),
            b.node(&format!("{name}.proj.norm.s")),
            norm_groups(ch),
            1e-5,
        )
    } else {
        x
    };
    g.relu(g.add(h, skip))
}

/// Two basic blocks, the first with stride 2.
fn stage_g(b: &Binder, name: &str, x: NodeId) -> NodeId {
    let x = basic_block_g(b, &format!("{name}.block0"), x, 2);
    basic_block_g(b, &format!("{name}.block1"), x, 1)
}

/// One decoder level: conv block, x2 nearest upsample, optional skip concat,
/// conv block.
fn decoder_level_g(b: &Binder, name: &str, x: NodeId, skip: Option<NodeId>) -> NodeId {
    let g = b.graph;
    let x = conv_norm_relu(b, &format!("{name}.pre"), x, 1, 1);
    let x = g.upsample_nearest2x(x);
    let x = match skip {
        Some(s) => g.concat_ch(&[x, s]),
        None => x,
    };
    conv_norm_relu(b, &format!("{name}.post"), x, 1, 1)
}

fn init_encoder(p: &mut Params, prefix: &str, ch: &[usize; 5], rng: &mut ChaCha8Rng) {
    p.init_conv(&format!("{prefix}.stem.conv"), ch[0], 3, 7, rng);
    p.init_norm(&format!("{prefix}.stem.norm"), ch[0]);
    for (i, stage) in ["stage1", "stage2", "stage3", "stage4"].iter().enumerate() {
        let cin = ch[i];
        let cout = ch[i + 1];
        let name = format!("{prefix}.{stage}");
        // block0 (stride 2, projection shortcut)
        p.init_conv(&format!("{name}.block0.conv1"), cout, cin, 3, rng);
        p.init_norm(&format!("{name}.block0.norm1"), cout);
        p.init_conv(&format!("{name}.block0.conv2"), cout, cout, 3, rng);
        p.init_norm(&format!("{name}.block0.norm2"), cout);
        p.init_conv(&format!("{name}.block0.proj.conv"), cout, cin, 1, rng);
        p.init_norm(&format!("{name}.block0.proj.norm"), cout);
        // block1 (identity shortcut)
        p.init_conv(&format!("{name}.block1.conv1"), cout, cout, 3, rng);
        p.init_norm(&format!("{name}.block1.norm1"), cout);
        p.init_conv(&format!("{name}.block1.conv2"), cout, cout, 3, rng);
        p.init_norm(&format!("{name}.block1.norm2"), cout);
    }
}

fn init_decoder(
    p: &mut Params,
    prefix: &str,
    enc: &[usize; 5],
    dec: &[usize; 5],
    rng: &mut ChaCha8Rng,
) {
    // level 4 (deepest) .. level 0
    for level in (0..5usize).rev() {
        let idx = 4 - level;
        let cin = if level == 4 { enc[4] } else { dec[idx - 1] };
        let dch = dec[idx];
        let name = format!("{prefix}.l{level}");
        p.init_conv(&format!("{name}.pre.conv"), dch, cin, 3, rng);
        p.init_norm(&format!("{name}.pre.norm"), dch);
        let skip_ch = if level >= 1 { enc[level - 1] } else { 0 };
        p.init_conv(&format!("{name}.post.conv"), dch, dch + skip_ch, 3, rng);
        p.init_norm(&format!("{name}.post.norm"), dch);
    }
}

// ---------------------------------------------------------------------------
// checkpoint archive
// ---------------------------------------------------------------------------

const CHECKPOINT_MAGIC: &[u8; 8] = b"SENCKPT1";

/// Everything needed to resume: config, schedule position, parameters and
/// (optionally) first/second optimizer moments plus the step count.
pub struct Checkpoint {
    pub config: SoftEnNetConfig,
    pub epoch: usize,
    pub step: usize,
    pub alpha: f64,
    pub params: Params,
    pub opt_m: Option<Params>,
    pub opt_v: Option<Params>,
    pub opt_t: usize,
}

impl Checkpoint {
    pub fn save(&self, path: &Path) -> Result<(), ModelError> {
        let mut buf: Vec<u8> = Vec::new();
        buf.extend_from_slice(CHECKPOINT_MAGIC);
        let cfg = toml::to_string(&self.config)
            .map_err(|e| ModelError::Corrupt(format!("config serialization: {e}")))?;
        buf.extend_from_slice(&(cfg.len() as u64).to_le_bytes());
        buf.extend_from_slice(cfg.as_bytes());
        buf.extend_from_slice(&(self.epoch as u64).to_le_bytes());
        buf.extend_from_slice(&(self.step as u64).to_le_bytes());
        buf.extend_from_slice(&self.alpha.to_le_bytes());
        self.params.write_to(&mut buf)?;
        let has_opt = self.opt_m.is_some() && self.opt_v.is_some();
        buf.push(has_opt as u8);
        if has_opt {
            buf.extend_from_slice(&(self.opt_t as u64).to_le_bytes());
            self.opt_m.as_ref().unwrap().write_to(&mut buf)?;
            self.opt_v.as_ref().unwrap().write_to(&mut buf)?;
        }
        std::fs::write(path, buf)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, ModelError> {
        let data = std::fs::read(path)?;
        let mut r = data.as_slice();
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != CHECKPOINT_MAGIC {
            return Err(ModelError::Corrupt("bad magic".into()));
        }
        let mut u = [0u8; 8];
        r.read_exact(&mut u)?;
        let cfg_len = u64::from_le_bytes(u) as usize;
        if cfg_len > 1 << 20 {
            return Err(ModelError::Corrupt("implausible config length".into()));
        }
        let mut cfg = vec![0u8; cfg_len];
        r.read_exact(&mut cfg)?;
        let config: SoftEnNetConfig = toml::from_str(
            std::str::from_utf8(&cfg).map_err(|_| ModelError::Corrupt("non-utf8 config".into()))?,
        )
        .map_err(|e| ModelError::Corrupt(format!("config parse: {e}")))?;
        r.read_exact(&mut u)?;
        let epoch = u64::from_le_bytes(u) as usize;
        r.read_exact(&mut u)?;
        let step = u64::from_le_bytes(u) as usize;
        r.read_exact(&mut u)?;
        let alpha = f64::from_le_bytes(u);
        let params = Params::read_from(&mut r)?;
        let mut flag = [0u8; 1];
        r.read_exact(&mut flag)?;
        let (opt_m, opt_v, opt_t) = if flag[0] == 1 {
            r.read_exact(&mut u)?;
            let t = u64::from_le_bytes(u) as usize;
            let m = Params::read_from(&mut r)?;
            let v = Params::read_from(&mut r)?;
            (Some(m), Some(v), t)
        } else {
            (None, None, 0)
        };
        Ok(Self {
            config,
            epoch,
            step,
            alpha,
            params,
            opt_m,
            opt_v,
            opt_t,
        })
    }

    /// Model view of the checkpoint.
    pub fn model(&self) -> Result<SoftEnNet, ModelError> {
        self.config.validate()?;
        Ok(SoftEnNet {
            config: self.config.clone(),
            params: self.params.clone(),
        })
    }
}
