//! Rigid-motion warping, backprojection and differentiable sampling.
//!
//! The central construction: back-project the target depth map through the
//! camera, transform by the predicted 6-DOF pose, re-project into the source
//! view and bilinearly sample. Out-of-view and invalid projections carry a
//! flag (the ego mask) instead of raising.
//!
//! Both plain-tensor and tape versions are provided; the tape version fuses
//! unproject/transform/project into one op with analytic Jacobians for the
//! depth map and the axis-angle pose.

use crate::camera::CameraModel;
use crate::graph::{Graph, NodeId};
use crate::tensor::Tensor;

/// Rigid transform: orthonormal rotation plus translation, applied as
/// `R p + t`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Pose {
    pub rotation: [[f64; 3]; 3],
    pub translation: [f64; 3],
}

impl Pose {
    pub fn identity() -> Self {
        Self {
            rotation: [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]],
            translation: [0.0, 0.0, 0.0],
        }
    }

    /// Build from a 6-vector: axis-angle rotation (radians) then translation.
    /// The zero vector maps to the identity.
    pub fn from_6dof(params: &[f64; 6]) -> Self {
        let rot = rodrigues([params[0], params[1], params[2]]);
        Self {
            rotation: rot,
            translation: [params[3], params[4], params[5]],
        }
    }

    /// Axis-angle plus translation. Inverse of [`Pose::from_6dof`] for
    /// rotation angles below pi.
    pub fn to_6dof(&self) -> [f64; 6] {
        let aa = log_so3(&self.rotation);
        [
            aa[0],
            aa[1],
            aa[2],
            self.translation[0],
            self.translation[1],
            self.translation[2],
        ]
    }

    pub fn transform(&self, p: [f64; 3]) -> [f64; 3] {
        let r = &self.rotation;
        [
            r[0][0] * p[0] + r[0][1] * p[1] + r[0][2] * p[2] + self.translation[0],
            r[1][0] * p[0] + r[1][1] * p[1] + r[1][2] * p[2] + self.translation[1],
            r[2][0] * p[0] + r[2][1] * p[1] + r[2][2] * p[2] + self.translation[2],
        ]
    }

    /// `self * other`: apply `other` first, then `self`.
    pub fn compose(&self, other: &Pose) -> Pose {
        let mut rotation = [[0.0; 3]; 3];
        for i in 0..3 {
            for j in 0..3 {
                rotation[i][j] = (0..3)
                    .map(|k| self.rotation[i][k] * other.rotation[k][j])
                    .sum();
            }
        }
        Pose {
            rotation,
            translation: self.transform(other.translation),
        }
    }

    pub fn inverse(&self) -> Pose {
        let mut rt = [[0.0; 3]; 3];
        for i in 0..3 {
            for j in 0..3 {
                rt[i][j] = self.rotation[j][i];
            }
        }
        let t = self.translation;
        let translation = [
            -(rt[0][0] * t[0] + rt[0][1] * t[1] + rt[0][2] * t[2]),
            -(rt[1][0] * t[0] + rt[1][1] * t[1] + rt[1][2] * t[2]),
            -(rt[2][0] * t[0] + rt[2][1] * t[1] + rt[2][2] * t[2]),
        ];
        Pose {
            rotation: rt,
            translation,
        }
    }

    /// Relative transform mapping points in frame `from` to frame `to`, given
    /// both camera-to-world poses.
    pub fn relative(from_cam_to_world: &Pose, to_cam_to_world: &Pose) -> Pose {
        to_cam_to_world.inverse().compose(from_cam_to_world)
    }

    pub fn is_identity(&self) -> bool {
        *self == Self::identity()
    }

    /// Max deviation of `R^T R` from the identity.
    pub fn orthonormality_error(&self) -> f64 {
        let r = &self.rotation;
        let mut err: f64 = 0.0;
        for i in 0..3 {
            for j in 0..3 {
                let dot: f64 = (0..3).map(|k| r[k][i] * r[k][j]).sum();
                let target = if i == j { 1.0 } else { 0.0 };
                err = err.max((dot - target).abs());
            }
        }
        err
    }
}

/// Rodrigues formula with a Taylor fallback near zero.
pub fn rodrigues(axis_angle: [f64; 3]) -> [[f64; 3]; 3] {
    let theta2 = axis_angle.iter().map(|v| v * v).sum::<f64>();
    let theta = theta2.sqrt();
    let (a, b) = if theta < 1e-4 {
        // sin(t)/t and (1-cos(t))/t^2
        (1.0 - theta2 / 6.0, 0.5 - theta2 / 24.0)
    } else {
        (theta.sin() / theta, (1.0 - theta.cos()) / theta2)
    };
    let k = skew(axis_angle);
    let k2 = mat_mul(&k, &k);
    let mut r = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            r[i][j] = if i == j { 1.0 } else { 0.0 } + a * k[i][j] + b * k2[i][j];
        }
    }
    r
}

/// Left Jacobian of SO(3): relates additive axis-angle perturbations to the
/// group's left tangent, `d(R(w)p)/dw = -[R p]_x J_l(w)`.
pub fn left_jacobian_so3(axis_angle: [f64; 3]) -> [[f64; 3]; 3] {
    let theta2 = axis_angle.iter().map(|v| v * v).sum::<f64>();
    let theta = theta2.sqrt();
    let (b, c) = if theta < 1e-4 {
        // (1-cos t)/t^2 and (t - sin t)/t^3
        (0.5 - theta2 / 24.0, 1.0 / 6.0 - theta2 / 120.0)
    } else {
        (
            (1.0 - theta.cos()) / theta2,
            (theta - theta.sin()) / (theta2 * theta),
        )
    };
    let k = skew(axis_angle);
    let k2 = mat_mul(&k, &k);
    let mut j = [[0.0; 3]; 3];
    for i in 0..3 {
        for jj in 0..3 {
            j[i][jj] = if i == jj { 1.0 } else { 0.0 } + b * k[i][jj] + c * k2[i][jj];
        }
    }
    j
}

/// Axis-angle from a rotation matrix (angles in [0, pi]).
fn log_so3(r: &[[f64; 3]; 3]) -> [f64; 3] {
    let trace = r[0][0] + r[1][1] + r[2][2];
    let cos_theta = ((trace - 1.0) * 0.5).clamp(-1.0, 1.0);
    let theta = cos_theta.acos();
    if theta < 1e-9 {
        return [0.0, 0.0, 0.0];
    }
    if theta < std::f64::consts::PI - 1e-6 {
        let scale = theta / (2.0 * theta.sin());
        [
            scale * (r[2][1] - r[1][2]),
            scale * (r[0][2] - r[2][0]),
            scale * (r[1][0] - r[0][1]),
        ]
    } else {
        // near pi: use the diagonal to recover the axis
        let xx = (r[0][0] - cos_theta) / (1.0 - cos_theta);
        let yy = (r[1][1] - cos_theta) / (1.0 - cos_theta);
        let zz = (r[2][2] - cos_theta) / (1.0 - cos_theta);
        let mut axis = [
            xx.max(0.0).sqrt(),
            yy.max(0.0).sqrt(),
            zz.max(0.0).sqrt(),
        ];
        // fix signs from the off-diagonal entries
        if r[2][1] - r[1][2] < 0.0 {
            axis[0] = -axis[0];
        }
        if r[0][2] - r[2][0] < 0.0 {
            axis[1] = -axis[1];
        }
        if r[1][0] - r[0][1] < 0.0 {
            axis[2] = -axis[2];
        }
        let norm = (axis[0] * axis[0] + axis[1] * axis[1] + axis[2] * axis[2]).sqrt();
        if norm < 1e-12 {
            return [theta, 0.0, 0.0];
        }
        [
            theta * axis[0] / norm,
            theta * axis[1] / norm,
            theta * axis[2] / norm,
        ]
    }
}

fn skew(v: [f64; 3]) -> [[f64; 3]; 3] {
    [
        [0.0, -v[2], v[1]],
        [v[2], 0.0, -v[0]],
        [-v[1], v[0], 0.0],
    ]
}

fn mat_mul(a: &[[f64; 3]; 3], b: &[[f64; 3]; 3]) -> [[f64; 3]; 3] {
    let mut out = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            out[i][j] = (0..3).map(|k| a[i][k] * b[k][j]).sum();
        }
    }
    out
}

fn cross(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}

fn mat_vec(m: &[[f64; 3]; 3], v: [f64; 3]) -> [f64; 3] {
    [
        m[0][0] * v[0] + m[0][1] * v[1] + m[0][2] * v[2],
        m[1][0] * v[0] + m[1][1] * v[1] + m[1][2] * v[2],
        m[2][0] * v[0] + m[2][1] * v[1] + m[2][2] * v[2],
    ]
}

fn mat_t_vec(m: &[[f64; 3]; 3], v: [f64; 3]) -> [f64; 3] {
    [
        m[0][0] * v[0] + m[1][0] * v[1] + m[2][0] * v[2],
        m[0][1] * v[0] + m[1][1] * v[1] + m[2][1] * v[2],
        m[0][2] * v[0] + m[1][2] * v[1] + m[2][2] * v[2],
    ]
}

/// Per-pixel unit-z rays for a camera, precomputed once per resolution.
#[derive(Clone)]
pub struct RayTable {
    pub width: usize,
    pub height: usize,
    pub dirs: Vec<[f64; 3]>,
    pub valid: Vec<bool>,
}

impl RayTable {
    pub fn new(cam: &CameraModel) -> Self {
        let (w, h) = (cam.width(), cam.height());
        let mut dirs = vec![[0.0, 0.0, 1.0]; w * h];
        let mut valid = vec![false; w * h];
        for y in 0..h {
            for x in 0..w {
                if let Some(d) = cam.ray([x as f64, y as f64]) {
                    dirs[y * w + x] = d;
                    valid[y * w + x] = true;
                }
            }
        }
        Self {
            width: w,
            height: h,
            dirs,
            valid,
        }
    }
}

/// Continuous source coordinates per target pixel, with in-bounds flags.
#[derive(Debug, Clone)]
pub struct SamplingGrid {
    /// source u per target pixel, H x W
    pub u: Tensor,
    /// source v per target pixel, H x W
    pub v: Tensor,
    /// 1.0 where the projection is valid and inside [0, W-1] x [0, H-1]
    pub valid: Tensor,
}

fn in_bounds(u: f64, v: f64, w: usize, h: usize) -> bool {
    u >= 0.0 && u <= (w - 1) as f64 && v >= 0.0 && v <= (h - 1) as f64
}

/// Back-project a depth map to a camera-frame point cloud, laid out as
/// `[3, H, W]`. For the pinhole model the z channel equals the input depth.
pub fn backproject(depth: &Tensor, cam: &CameraModel) -> Tensor {
    let shape = depth.shape();
    assert_eq!(shape.len(), 2, "depth map must be H x W");
    let (h, w) = (shape[0], shape[1]);
    let rays = RayTable::new(cam);
    assert_eq!((rays.height, rays.width), (h, w));
    let mut out = vec![0.0; 3 * h * w];
    for i in 0..h * w {
        let d = depth.data()[i];
        let dir = rays.dirs[i];
        out[i] = d * dir[0];
        out[h * w + i] = d * dir[1];
        out[2 * h * w + i] = d * dir[2];
    }
    Tensor::new(vec![3, h, w], out)
}

fn warp_pixel(
    cam: &CameraModel,
    dir: [f64; 3],
    depth: f64,
    pose: &Pose,
) -> Option<([f64; 2], f64)> {
    let p = [depth * dir[0], depth * dir[1], depth * dir[2]];
    let q = pose.transform(p);
    cam.project(q).map(|uv| (uv, q[2]))
}

/// Project each target pixel into the source view: grid(p) = project(T *
/// backproject(D_t)). The identity pose reproduces the native pixel grid
/// exactly.
pub fn warp_coordinates(depth: &Tensor, pose: &Pose, cam: &CameraModel) -> SamplingGrid {
    let shape = depth.shape();
    let (h, w) = (shape[0], shape[1]);
    let rays = RayTable::new(cam);
    let mut gu = vec![-1.0; h * w];
    let mut gv = vec![-1.0; h * w];
    let mut valid = vec![0.0; h * w];
    let identity = pose.is_identity();
    for y in 0..h {
        for x in 0..w {
            let i = y * w + x;
            if !rays.valid[i] || depth.data()[i] <= 0.0 {
                continue;
            }
            if identity {
                gu[i] = x as f64;
                gv[i] = y as f64;
                valid[i] = 1.0;
                continue;
            }
            if let Some((uv, _)) = warp_pixel(cam, rays.dirs[i], depth.data()[i], pose) {
                gu[i] = uv[0];
                gv[i] = uv[1];
                valid[i] = if in_bounds(uv[0], uv[1], w, h) { 1.0 } else { 0.0 };
            }
        }
    }
    SamplingGrid {
        u: Tensor::new(vec![h, w], gu),
        v: Tensor::new(vec![h, w], gv),
        valid: Tensor::new(vec![h, w], valid),
    }
}

/// Bilinearly sample `img` ([C, H, W]) at the grid coordinates. Out-of-bounds
/// samples produce zeros with a zero ego-mask entry.
pub fn bilinear_sample(img: &Tensor, grid: &SamplingGrid) -> (Tensor, Tensor) {
    let (c, h, w) = {
        let s = img.shape();
        assert_eq!(s.len(), 3, "image must be C x H x W");
        (s[0], s[1], s[2])
    };
    assert_eq!(grid.u.shape(), &[h, w], "grid size mismatch");
    let mut out = vec![0.0; c * h * w];
    let mut mego = vec![0.0; h * w];
    for i in 0..h * w {
        if grid.valid.data()[i] == 0.0 {
            continue;
        }
        let (u, v) = (grid.u.data()[i], grid.v.data()[i]);
        if !in_bounds(u, v, w, h) {
            continue;
        }
        mego[i] = 1.0;
        let x0 = u.floor() as usize;
        let y0 = v.floor() as usize;
        let x1 = (x0 + 1).min(w - 1);
        let y1 = (y0 + 1).min(h - 1);
        let fx = u - x0 as f64;
        let fy = v - y0 as f64;
        for ci in 0..c {
            let base = ci * h * w;
            let v00 = img.data()[base + y0 * w + x0];
            let v01 = img.data()[base + y0 * w + x1];
            let v10 = img.data()[base + y1 * w + x0];
            let v11 = img.data()[base + y1 * w + x1];
            out[base + i] = (1.0 - fy) * ((1.0 - fx) * v00 + fx * v01)
                + fy * ((1.0 - fx) * v10 + fx * v11);
        }
    }
    (
        Tensor::new(vec![c, h, w], out),
        Tensor::new(vec![h, w], mego),
    )
}

/// Synthesize the target view from the source image using the target depth
/// and the target-to-source pose. Returns the reconstruction and ego mask.
pub fn synthesize_target(
    img_s: &Tensor,
    depth_t: &Tensor,
    pose_t_to_s: &Pose,
    cam: &CameraModel,
) -> (Tensor, Tensor) {
    let grid = warp_coordinates(depth_t, pose_t_to_s, cam);
    bilinear_sample(img_s, &grid)
}

/// Depth reprojection pair: `z_t` is the z-component of the transformed
/// target cloud (per target pixel), `sampled_s` is the source depth map
/// bilinearly sampled at the warp grid. Also returns the joint validity mask.
pub fn project_depth(
    depth_t: &Tensor,
    pose_t_to_s: &Pose,
    cam: &CameraModel,
    depth_s: &Tensor,
) -> (Tensor, Tensor, Tensor) {
    let shape = depth_t.shape();
    let (h, w) = (shape[0], shape[1]);
    let rays = RayTable::new(cam);
    let grid = warp_coordinates(depth_t, pose_t_to_s, cam);
    let mut zt = vec![0.0; h * w];
    let identity = pose_t_to_s.is_identity();
    for i in 0..h * w {
        if grid.valid.data()[i] == 0.0 {
            continue;
        }
        if identity {
            zt[i] = depth_t.data()[i];
        } else if let Some((_, z)) = warp_pixel(cam, rays.dirs[i], depth_t.data()[i], pose_t_to_s)
        {
            zt[i] = z;
        }
    }
    let ds3 = depth_s.reshape(vec![1, h, w]);
    let (sampled, mego) = bilinear_sample(&ds3, &grid);
    let valid = grid.valid.zip_map(&mego, |a, b| a * b);
    (
        Tensor::new(vec![h, w], zt),
        sampled.reshape(vec![h, w]),
        valid,
    )
}

/// Tape outputs of the fused rigid warp.
pub struct WarpNodes {
    /// source u per target pixel, [N, 1, H, W]
    pub grid_u: NodeId,
    /// source v per target pixel, [N, 1, H, W]
    pub grid_v: NodeId,
    /// z-component of the transformed target cloud, [N, 1, H, W]
    pub z_t: NodeId,
    /// 1.0 where projection succeeded and landed in bounds (constant)
    pub valid: Tensor,
}

impl Graph {
    /// Fused unproject -> rigid transform -> project, differentiable in the
    /// depth map `[N, 1, H, W]` and the pose `[N, 6]` (axis-angle, translation).
    pub fn rigid_warp(&self, depth: NodeId, pose: NodeId, cam: &CameraModel, rays: &RayTable) -> WarpNodes {
        let dv = self.value(depth);
        let pv = self.value(pose);
        let (n, c1, h, w) = dv.dims4();
        assert_eq!(c1, 1, "depth must have one channel");
        assert_eq!(pv.shape(), &[n, 6], "pose must be [N, 6]");
        assert_eq!((rays.height, rays.width), (h, w));
        let plane = h * w;
        let mut packed = vec![0.0; n * 3 * plane];
        let mut valid = vec![0.0; n * plane];
        for ni in 0..n {
            let p6: [f64; 6] = pv.data()[ni * 6..ni * 6 + 6].try_into().unwrap();
            let pose_n = Pose::from_6dof(&p6);
            let identity = p6 == [0.0; 6];
            let db = ni * plane;
            for y in 0..h {
                for x in 0..w {
                    let i = y * w + x;
                    let d = dv.data()[db + i];
                    let ob = ni * 3 * plane;
                    if !rays.valid[i] || d <= 0.0 {
                        packed[ob + i] = -1.0;
                        packed[ob + plane + i] = -1.0;
                        packed[ob + 2 * plane + i] = 1.0;
                        continue;
                    }
                    if identity {
                        packed[ob + i] = x as f64;
                        packed[ob + plane + i] = y as f64;
                        packed[ob + 2 * plane + i] = d;
                        valid[db + i] = 1.0;
                        continue;
                    }
                    match warp_pixel(cam, rays.dirs[i], d, &pose_n) {
                        Some((uv, z)) => {
                            packed[ob + i] = uv[0];
                            packed[ob + plane + i] = uv[1];
                            packed[ob + 2 * plane + i] = z;
                            valid[db + i] =
                                if in_bounds(uv[0], uv[1], w, h) { 1.0 } else { 0.0 };
                        }
                        None => {
                            packed[ob + i] = -1.0;
                            packed[ob + plane + i] = -1.0;
                            packed[ob + 2 * plane + i] = 1.0;
                        }
                    }
                }
            }
        }
        let out = Tensor::new(vec![n, 3, h, w], packed);
        let needs = self.needs_grad(depth) || self.needs_grad(pose);
        let needs_depth = self.needs_grad(depth);
        let needs_pose = self.needs_grad(pose);
        let back: Option<super::graph::BackFnAlias> = if needs {
            let cam = *cam;
            let dirs = rays.dirs.clone();
            let ray_valid = rays.valid.clone();
            let dv2 = dv.clone();
            let pv2 = pv.clone();
            Some(Box::new(move |g: &Tensor| {
                let mut g_depth = vec![0.0; n * plane];
                let mut g_pose = vec![0.0; n * 6];
                for ni in 0..n {
                    let p6: [f64; 6] = pv2.data()[ni * 6..ni * 6 + 6].try_into().unwrap();
                    let omega = [p6[0], p6[1], p6[2]];
                    let pose_n = Pose::from_6dof(&p6);
                    let r = pose_n.rotation;
                    let jl = left_jacobian_so3(omega);
                    let db = ni * plane;
                    let ob = ni * 3 * plane;
                    let mut gt = [0.0; 3];
                    let mut gw = [0.0; 3];
                    for i in 0..plane {
                        let d = dv2.data()[db + i];
                        if !ray_valid[i] || d <= 0.0 {
                            continue;
                        }
                        let dir = dirs[i];
                        let p = [d * dir[0], d * dir[1], d * dir[2]];
                        let q = pose_n.transform(p);
                        let Some((_, jac)) = cam.project_jacobian(q) else {
                            continue;
                        };
                        let gu = g.data()[ob + i];
                        let gvv = g.data()[ob + plane + i];
                        let gz = g.data()[ob + 2 * plane + i];
                        // dL/dQ = gu * duv/dQ row0 + gv * row1 + gz * e_z
                        let gq = [
                            gu * jac[0][0] + gvv * jac[1][0],
                            gu * jac[0][1] + gvv * jac[1][1],
                            gu * jac[0][2] + gvv * jac[1][2] + gz,
                        ];
                        if needs_depth {
                            let rdir = mat_vec(&r, dir);
                            g_depth[db + i] =
                                gq[0] * rdir[0] + gq[1] * rdir[1] + gq[2] * rdir[2];
                        }
                        if needs_pose {
                            gt[0] += gq[0];
                            gt[1] += gq[1];
                            gt[2] += gq[2];
                            // dQ/dw = -[R p]_x J_l  =>  g_w += J_l^T (R p x gQ)
                            let rp = [
                                q[0] - pose_n.translation[0],
                                q[1] - pose_n.translation[1],
                                q[2] - pose_n.translation[2],
                            ];
                            let cx = cross(rp, gq);
                            let contrib = mat_t_vec(&jl, cx);
                            gw[0] += contrib[0];
                            gw[1] += contrib[1];
                            gw[2] += contrib[2];
                        }
                    }
                    if needs_pose {
                        g_pose[ni * 6] = gw[0];
                        g_pose[ni * 6 + 1] = gw[1];
                        g_pose[ni * 6 + 2] = gw[2];
                        g_pose[ni * 6 + 3] = gt[0];
                        g_pose[ni * 6 + 4] = gt[1];
                        g_pose[ni * 6 + 5] = gt[2];
                    }
                }
                let mut res = Vec::new();
                if needs_depth {
                    res.push((depth, Tensor::new(vec![n, 1, h, w], g_depth)));
                }
                if needs_pose {
                    res.push((pose, Tensor::new(vec![n, 6], g_pose)));
                }
                res
            }))
        } else {
            None
        };
        let packed_id = self.push(out, needs, back);
        WarpNodes {
            grid_u: self.slice_ch(packed_id, 0, 1),
            grid_v: self.slice_ch(packed_id, 1, 1),
            z_t: self.slice_ch(packed_id, 2, 1),
            valid: Tensor::new(vec![n, 1, h, w], valid),
        }
    }

    /// Differentiable bilinear sampling of `img` `[N, C, H, W]` at grids
    /// `[N, 1, H, W]`. Returns the sampled node and the constant ego mask
    /// (`extra_valid`, when given, is intersected in).
    pub fn bilinear_sample_g(
        &self,
        img: NodeId,
        grid_u: NodeId,
        grid_v: NodeId,
        extra_valid: Option<&Tensor>,
    ) -> (NodeId, Tensor) {
        let iv = self.value(img);
        let uv = self.value(grid_u);
        let vv = self.value(grid_v);
        let (n, c, h, w) = iv.dims4();
        assert_eq!(uv.shape(), &[n, 1, h, w]);
        assert_eq!(vv.shape(), &[n, 1, h, w]);
        let plane = h * w;
        let mut out = vec![0.0; n * c * plane];
        let mut mego = vec![0.0; n * plane];
        for ni in 0..n {
            for i in 0..plane {
                let u = uv.data()[ni * plane + i];
                let v = vv.data()[ni * plane + i];
                if !in_bounds(u, v, w, h) {
                    continue;
                }
                if let Some(extra) = extra_valid {
                    if extra.data()[ni * plane + i] == 0.0 {
                        continue;
                    }
                }
                mego[ni * plane + i] = 1.0;
                let x0 = u.floor() as usize;
                let y0 = v.floor() as usize;
                let x1 = (x0 + 1).min(w - 1);
                let y1 = (y0 + 1).min(h - 1);
                let fx = u - x0 as f64;
                let fy = v - y0 as f64;
                for ci in 0..c {
                    let base = (ni * c + ci) * plane;
                    let v00 = iv.data()[base + y0 * w + x0];
                    let v01 = iv.data()[base + y0 * w + x1];
                    let v10 = iv.data()[base + y1 * w + x0];
                    let v11 = iv.data()[base + y1 * w + x1];
                    out[base + i] = (1.0 - fy) * ((1.0 - fx) * v00 + fx * v01)
                        + fy * ((1.0 - fx) * v10 + fx * v11);
                }
            }
        }
        let mego = Tensor::new(vec![n, 1, h, w], mego);
        let out = Tensor::new(vec![n, c, h, w], out);
        let needs_img = self.needs_grad(img);
        let needs_u = self.needs_grad(grid_u);
        let needs_v = self.needs_grad(grid_v);
        let needs = needs_img || needs_u || needs_v;
        let back: Option<super::graph::BackFnAlias> = if needs {
            let iv2 = iv.clone();
            let uv2 = uv.clone();
            let vv2 = vv.clone();
            let mego2 = mego.clone();
            Some(Box::new(move |g: &Tensor| {
                let mut g_img = vec![0.0; n * c * plane];
                let mut g_u = vec![0.0; n * plane];
                let mut g_v = vec![0.0; n * plane];
                for ni in 0..n {
                    for i in 0..plane {
                        if mego2.data()[ni * plane + i] == 0.0 {
                            continue;
                        }
                        let u = uv2.data()[ni * plane + i];
                        let v = vv2.data()[ni * plane + i];
                        let x0 = u.floor() as usize;
                        let y0 = v.floor() as usize;
                        let x1 = (x0 + 1).min(w - 1);
                        let y1 = (y0 + 1).min(h - 1);
                        let fx = u - x0 as f64;
                        let fy = v - y0 as f64;
                        for ci in 0..c {
                            let base = (ni * c + ci) * plane;
                            let gv_out = g.data()[base + i];
                            if gv_out == 0.0 {
                                continue;
                            }
                            if needs_img {
                                g_img[base + y0 * w + x0] += gv_out * (1.0 - fy) * (1.0 - fx);
                                g_img[base + y0 * w + x1] += gv_out * (1.0 - fy) * fx;
                                g_img[base + y1 * w + x0] += gv_out * fy * (1.0 - fx);
                                g_img[base + y1 * w + x1] += gv_out * fy * fx;
                            }
                            if needs_u || needs_v {
                                let v00 = iv2.data()[base + y0 * w + x0];
                                let v01 = iv2.data()[base + y0 * w + x1];
                                let v10 = iv2.data()[base + y1 * w + x0];
                                let v11 = iv2.data()[base + y1 * w + x1];
                                let du = (1.0 - fy) * (v01 - v00) + fy * (v11 - v10);
                                let dv = (1.0 - fx) * (v10 - v00) + fx * (v11 - v01);
                                g_u[ni * plane + i] += gv_out * du;
                                g_v[ni * plane + i] += gv_out * dv;
                            }
                        }
                    }
                }
                let mut res = Vec::new();
                if needs_img {
                    res.push((img, Tensor::new(vec![n, c, h, w], g_img)));
                }
                if needs_u {
                    res.push((grid_u, Tensor::new(vec![n, 1, h, w], g_u)));
                }
                if needs_v {
                    res.push((grid_v, Tensor::new(vec![n, 1, h, w], g_v)));
                }
                res
            }))
        } else {
            None
        };
        (self.push(out, needs, back), mego)
    }
}
