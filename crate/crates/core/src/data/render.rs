//! Procedural colon-tube renderer.
//!
//! The scene is a cylinder of varying radius bent along a smooth parametric
//! centerline. Geometry is ray-marched against the implicit surface in a
//! straightened coordinate frame; the gentle-bend limit keeps that marching
//! conservative. Shading is Lambertian with a single camera-colocated point
//! light and inverse-square falloff, so image brightness carries distance
//! information the way an endoscope's ring light does. Albedo is procedural
//! value noise in tube-surface coordinates (axial position, azimuth), which
//! makes the texture view-consistent across frames.

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::camera::CameraModel;
use crate::geometry::Pose;
use crate::tensor::Tensor;

use super::{DataError, Frame, TubeConfig};

/// Ray-march hit tolerance (scene units).
const HIT_EPS: f64 = 1e-7;
/// Conservative step factor compensating the bend distortion.
const STEP_FACTOR: f64 = 0.6;

#[derive(Clone)]
struct Centerline {
    amp_x: [f64; 2],
    freq_x: [f64; 2],
    phase_x: [f64; 2],
    amp_y: [f64; 2],
    freq_y: [f64; 2],
    phase_y: [f64; 2],
}

impl Centerline {
    fn offset(&self, z: f64) -> (f64, f64) {
        let x = self.amp_x[0] * (self.freq_x[0] * z + self.phase_x[0]).sin()
            + self.amp_x[1] * (self.freq_x[1] * z + self.phase_x[1]).sin();
        let y = self.amp_y[0] * (self.freq_y[0] * z + self.phase_y[0]).sin()
            + self.amp_y[1] * (self.freq_y[1] * z + self.phase_y[1]).sin();
        (x, y)
    }

    fn slope(&self, z: f64) -> (f64, f64) {
        let x = self.amp_x[0] * self.freq_x[0] * (self.freq_x[0] * z + self.phase_x[0]).cos()
            + self.amp_x[1] * self.freq_x[1] * (self.freq_x[1] * z + self.phase_x[1]).cos();
        let y = self.amp_y[0] * self.freq_y[0] * (self.freq_y[0] * z + self.phase_y[0]).cos()
            + self.amp_y[1] * self.freq_y[1] * (self.freq_y[1] * z + self.phase_y[1]).cos();
        (x, y)
    }

    fn max_slope(&self) -> f64 {
        let sx = self.amp_x[0].abs() * self.freq_x[0] + self.amp_x[1].abs() * self.freq_x[1];
        let sy = self.amp_y[0].abs() * self.freq_y[0] + self.amp_y[1].abs() * self.freq_y[1];
        (sx * sx + sy * sy).sqrt()
    }
}

/// A fully determined scene: geometry, texture and camera track.
pub struct TubeScene {
    pub config: TubeConfig,
    cam: CameraModel,
    curve: Centerline,
    tex_seed: u64,
}

impl TubeScene {
    pub fn new(config: &TubeConfig, seed: u64) -> Result<Self, DataError> {
        config.validate()?;
        let cam = config.camera()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let bend = config.bend_amplitude * config.radius;
        let curve = Centerline {
            amp_x: [
                rng.gen_range(0.4..1.0) * bend,
                rng.gen_range(0.2..0.5) * bend,
            ],
            freq_x: [rng.gen_range(0.04..0.07), rng.gen_range(0.09..0.13)],
            phase_x: [rng.gen_range(0.0..6.28), rng.gen_range(0.0..6.28)],
            amp_y: [
                rng.gen_range(0.4..1.0) * bend,
                rng.gen_range(0.2..0.5) * bend,
            ],
            freq_y: [rng.gen_range(0.04..0.07), rng.gen_range(0.09..0.13)],
            phase_y: [rng.gen_range(0.0..6.28), rng.gen_range(0.0..6.28)],
        };
        // self-intersection guard: the radial warp must stay bijective
        if curve.max_slope() > 0.35 {
            return Err(DataError::DegenerateGeometry(format!(
                "centerline slope {:.3} too steep for radius {}",
                curve.max_slope(),
                config.radius
            )));
        }
        let tex_seed = rng.gen::<u64>();
        Ok(Self {
            config: config.clone(),
            cam,
            curve,
            tex_seed,
        })
    }

    pub fn camera(&self) -> CameraModel {
        self.cam
    }

    /// Camera-to-world pose at a frame index: the camera rides the
    /// centerline, looking along its tangent.
    pub fn camera_pose(&self, frame: usize) -> Pose {
        let z = frame as f64 * self.config.camera_speed;
        let (cx, cy) = self.curve.offset(z);
        let (sx, sy) = self.curve.slope(z);
        let forward = normalize([sx, sy, 1.0]);
        // reference right vector; the tangent never leaves the z cone
        let r0 = [1.0, 0.0, 0.0];
        let dot = r0[0] * forward[0] + r0[1] * forward[1] + r0[2] * forward[2];
        let right = normalize([
            r0[0] - dot * forward[0],
            r0[1] - dot * forward[1],
            r0[2] - dot * forward[2],
        ]);
        let down = cross(forward, right);
        Pose {
            rotation: [
                [right[0], down[0], forward[0]],
                [right[1], down[1], forward[1]],
                [right[2], down[2], forward[2]],
            ],
            translation: [cx, cy, z],
        }
    }

    /// Tube radius at axial position `z`, azimuth `phi`: haustral folds are
    /// periodic constrictions with a mild azimuthal wobble.
    fn radius_at(&self, z: f64, phi: f64) -> f64 {
        let c = &self.config;
        let fold_phase = 0.5 + 0.5 * (2.0 * std::f64::consts::PI * z / c.fold_period).cos();
        let fold = c.fold_amplitude * fold_phase.powi(3);
        let wobble = 0.03 * value_noise(z * 0.9, phi_units(phi, 8.0), 8, self.tex_seed ^ 0x77);
        c.radius * (1.0 - fold + wobble)
    }

    /// Signed distance proxy: positive inside the open tube, zero at the wall.
    fn sdf(&self, p: [f64; 3]) -> f64 {
        let (ox, oy) = self.curve.offset(p[2]);
        let wx = p[0] - ox;
        let wy = p[1] - oy;
        let radial = (wx * wx + wy * wy).sqrt();
        let phi = wy.atan2(wx);
        self.radius_at(p[2], phi) - radial
    }

    /// March a world-space ray from `origin`; returns travel distance and the
    /// hit point, or `None` past `t_max`.
    pub fn cast_ray(&self, origin: [f64; 3], dir: [f64; 3], t_max: f64) -> Option<(f64, [f64; 3])> {
        let mut t = 1e-4;
        let mut prev_t = t;
        let at = |t: f64| {
            [
                origin[0] + t * dir[0],
                origin[1] + t * dir[1],
                origin[2] + t * dir[2],
            ]
        };
        let mut d = self.sdf(at(t));
        if d <= 0.0 {
            return None; // started outside the open tube
        }
        while t < t_max {
            if d < HIT_EPS {
                break;
            }
            prev_t = t;
            t += (d * STEP_FACTOR).max(1e-5);
            d = self.sdf(at(t));
        }
        if t >= t_max && d >= HIT_EPS {
            return None;
        }
        // bisection refine between the last inside point and the crossing
        let (mut lo, mut hi) = (prev_t, t);
        for _ in 0..60 {
            let mid = 0.5 * (lo + hi);
            if self.sdf(at(mid)) > 0.0 {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        let t_hit = 0.5 * (lo + hi);
        Some((t_hit, at(t_hit)))
    }

    fn surface_normal(&self, p: [f64; 3]) -> [f64; 3] {
        let h = 1e-5;
        let mut n = [0.0; 3];
        for a in 0..3 {
            let mut pp = p;
            let mut pm = p;
            pp[a] += h;
            pm[a] -= h;
            // sdf decreases toward the wall, so the gradient points inward
            n[a] = self.sdf(pm) - self.sdf(pp);
        }
        normalize(n)
    }

    fn albedo(&self, p: [f64; 3]) -> [f64; 3] {
        let (ox, oy) = self.curve.offset(p[2]);
        let phi = (p[1] - oy).atan2(p[0] - ox);
        let z = p[2];
        let c = &self.config;
        let base = fbm(
            z * 1.4,
            phi_units(phi, 16.0),
            16,
            c.texture_octaves,
            self.tex_seed,
        );
        // vein-like streaks: anisotropic noise stretched along the axis
        let vein_field = fbm(
            z * 0.35,
            phi_units(phi, 48.0),
            48,
            3,
            self.tex_seed ^ 0x5eed,
        );
        let vein = smoothstep(0.62, 0.72, vein_field) * c.vein_density.min(2.0) * 0.3;
        let tone = 0.45 + 0.5 * base;
        [
            (0.80 * tone + 0.12 * vein).clamp(0.0, 1.0),
            (0.46 * tone - 0.06 * vein).clamp(0.0, 1.0),
            (0.40 * tone - 0.04 * vein).clamp(0.0, 1.0),
        ]
    }

    /// Render one frame with exact per-pixel depth, lumen labels derived by
    /// the caller, and the exact camera pose.
    pub fn render(&self, frame: usize) -> Frame {
        let c = &self.config;
        let (w, h) = (c.width, c.height);
        let pose = self.camera_pose(frame);
        let origin = pose.translation;
        let mut rgb = vec![0.0; 3 * h * w];
        let mut depth = vec![c.d_max; h * w];
        for y in 0..h {
            for x in 0..w {
                let i = y * w + x;
                let Some(ray_cam) = self.cam.ray([x as f64, y as f64]) else {
                    continue;
                };
                let ray_cam = normalize(ray_cam);
                let dir = mat_vec(&pose.rotation, ray_cam);
                // march far enough that the z-depth cap is reachable
                let t_cap = c.d_max / ray_cam[2].max(1e-3) + 4.0 * c.radius;
                if let Some((t_hit, hit)) = self.cast_ray(origin, dir, t_cap) {
                    let z_cam = t_hit * ray_cam[2];
                    depth[i] = z_cam.min(c.d_max).max(1e-4);
                    let n = self.surface_normal(hit);
                    let l = [-dir[0], -dir[1], -dir[2]];
                    let mut lambert = n[0] * l[0] + n[1] * l[1] + n[2] * l[2];
                    if lambert < 0.0 {
                        lambert = -lambert; // normal orientation is arbitrary
                    }
                    let atten = 1.0 / (1.0 + c.light_falloff * t_hit * t_hit);
                    let alb = self.albedo(hit);
                    for ch in 0..3 {
                        rgb[ch * h * w + i] =
                            (0.03 + alb[ch] * lambert * atten).clamp(0.0, 1.0);
                    }
                }
            }
        }
        let depth = Tensor::new(vec![h, w], depth);
        let lumen = super::lumen_gt_from_depth(&depth, c.lumen_percentile).0;
        Frame {
            rgb: Tensor::new(vec![3, h, w], rgb),
            gt_depth: Some(depth),
            gt_lumen: Some(lumen),
            gt_pose: Some(pose),
            index: frame,
        }
    }
}

fn phi_units(phi: f64, period: f64) -> f64 {
    // map azimuth to a periodic lattice coordinate in [0, period)
    (phi / (2.0 * std::f64::consts::PI) + 0.5) * period
}

fn normalize(v: [f64; 3]) -> [f64; 3] {
    let n = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
    [v[0] / n, v[1] / n, v[2] / n]
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

fn smoothstep(lo: f64, hi: f64, x: f64) -> f64 {
    let t = ((x - lo) / (hi - lo)).clamp(0.0, 1.0);
    t * t * (3.0 - 2.0 * t)
}

/// Integer lattice hash to [0, 1): splitmix-style bit mixing, platform
/// independent.
fn hash2(ix: i64, iy: i64, seed: u64) -> f64 {
    let mut h = seed
        ^ (ix as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15)
        ^ (iy as u64).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    h ^= h >> 30;
    h = h.wrapping_mul(0xBF58_476D_1CE4_E5B9);
    h ^= h >> 27;
    h = h.wrapping_mul(0x94D0_49BB_1331_11EB);
    h ^= h >> 31;
    (h >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
}

/// Bilinear value noise, periodic in y with the given integer period.
fn value_noise(x: f64, y: f64, period_y: i64, seed: u64) -> f64 {
    let x0 = x.floor();
    let y0 = y.floor();
    let fx = x - x0;
    let fy = y - y0;
    let sx = fx * fx * (3.0 - 2.0 * fx);
    let sy = fy * fy * (3.0 - 2.0 * fy);
    let (ix, iy) = (x0 as i64, y0 as i64);
    let wrap = |v: i64| v.rem_euclid(period_y);
    let v00 = hash2(ix, wrap(iy), seed);
    let v01 = hash2(ix + 1, wrap(iy), seed);
    let v10 = hash2(ix, wrap(iy + 1), seed);
    let v11 = hash2(ix + 1, wrap(iy + 1), seed);
    (1.0 - sy) * ((1.0 - sx) * v00 + sx * v01) + sy * ((1.0 - sx) * v10 + sx * v11)
}

/// Fractal sum of value noise, result in [0, 1].
fn fbm(x: f64, y: f64, period_y: i64, octaves: usize, seed: u64) -> f64 {
    let mut acc = 0.0;
    let mut amp = 0.5;
    let mut total = 0.0;
    let mut fx = x;
    let mut fy = y;
    let mut period = period_y;
    for o in 0..octaves.max(1) {
        acc += amp * value_noise(fx, fy, period.max(1), seed.wrapping_add(o as u64 * 0x9e37));
        total += amp;
        amp *= 0.5;
        fx *= 2.0;
        fy *= 2.0;
        period *= 2;
    }
    acc / total
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn noise_is_deterministic_and_periodic_in_y() {
        let a = value_noise(3.7, 2.2, 8, 42);
        let b = value_noise(3.7, 2.2, 8, 42);
        assert_eq!(a, b);
        let c = value_noise(3.7, 2.2 + 8.0, 8, 42);
        assert!((a - c).abs() < 1e-12, "period wrap mismatch: {a} vs {c}");
        assert!((0.0..=1.0).contains(&a));
    }

    #[test]
    fn sdf_sign_and_wall_distance() {
        let cfg = TubeConfig {
            fold_amplitude: 0.0,
            bend_amplitude: 0.0,
            ..TubeConfig::default_small()
        };
        let scene = TubeScene::new(&cfg, 1).unwrap();
        // on the axis the sdf is about the radius (up to the wobble term)
        let d = scene.sdf([0.0, 0.0, 5.0]);
        assert!((d - cfg.radius).abs() < 0.1 * cfg.radius);
        // far outside the wall the sdf is negative
        assert!(scene.sdf([3.0 * cfg.radius, 0.0, 5.0]) < 0.0);
    }

    #[test]
    fn cast_ray_hits_the_wall_at_the_radius() {
        let cfg = TubeConfig {
            fold_amplitude: 0.0,
            bend_amplitude: 0.0,
            ..TubeConfig::default_small()
        };
        let scene = TubeScene::new(&cfg, 2).unwrap();
        let (t, hit) = scene
            .cast_ray([0.0, 0.0, 5.0], [1.0, 0.0, 0.0], 50.0)
            .unwrap();
        let r_here = scene.radius_at(5.0, 0.0);
        assert!((t - r_here).abs() < 1e-5, "t {t} vs radius {r_here}");
        assert!((hit[0] - r_here).abs() < 1e-5);
    }

    #[test]
    fn camera_pose_is_orthonormal_and_advances() {
        let cfg = TubeConfig::default_small();
        let scene = TubeScene::new(&cfg, 3).unwrap();
        for f in [0, 10, 50] {
            let p = scene.camera_pose(f);
            assert!(p.orthonormality_error() < 1e-12);
        }
        let p0 = scene.camera_pose(0);
        let p1 = scene.camera_pose(1);
        let dz = p1.translation[2] - p0.translation[2];
        assert!((dz - cfg.camera_speed).abs() < 1e-12);
    }
}
