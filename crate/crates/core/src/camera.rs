//! Differentiable camera projection models.
//!
//! Two models are supported: pinhole and double sphere (for wide-FOV optics).
//! Both map 3D points in the camera frame to continuous pixel coordinates and
//! back. "Depth" throughout this crate means the z-component of the point in
//! the camera frame, not ray length, so unprojection scales the pixel ray to
//! unit z.
//!
//! Invalid projections are flagged (`Option`), never raised: batched warping
//! consumes the flags as the ego mask.

use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CameraError {
    #[error("invalid camera parameters: {0}")]
    InvalidParams(String),
    #[error("depth must be positive, got {0}")]
    NonPositiveDepth(f64),
    #[error("pixel ({0}, {1}) has no valid unprojection")]
    OutsideDomain(f64, f64),
    #[error("failed to read camera file: {0}")]
    Io(#[from] std::io::Error),
    #[error("malformed camera file: {0}")]
    Parse(String),
}

/// Focal lengths and principal point in pixels, plus image size.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Intrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
}

impl Intrinsics {
    pub fn validate(&self) -> Result<(), CameraError> {
        if self.fx <= 0.0 || self.fy <= 0.0 {
            return Err(CameraError::InvalidParams(
                "focal lengths must be positive".into(),
            ));
        }
        if !(0.0..self.width as f64).contains(&self.cx)
            || !(0.0..self.height as f64).contains(&self.cy)
        {
            return Err(CameraError::InvalidParams(
                "principal point must lie inside the image".into(),
            ));
        }
        Ok(())
    }
}

/// Double-sphere distortion parameters. With `xi == 0` and `alpha == 0` the
/// model degenerates to the pinhole model with the same intrinsics.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DoubleSphereParams {
    pub xi: f64,
    pub alpha: f64,
}

impl DoubleSphereParams {
    pub fn validate(&self) -> Result<(), CameraError> {
        if !(0.0..1.0).contains(&self.alpha) {
            return Err(CameraError::InvalidParams(format!(
                "alpha must be in [0, 1), got {}",
                self.alpha
            )));
        }
        if !self.xi.is_finite() {
            return Err(CameraError::InvalidParams("xi must be finite".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum Projection {
    Pinhole,
    DoubleSphere(DoubleSphereParams),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CameraModel {
    pub intrinsics: Intrinsics,
    pub projection: Projection,
}

const DENOM_EPS: f64 = 1e-9;

impl CameraModel {
    pub fn pinhole(intrinsics: Intrinsics) -> Result<Self, CameraError> {
        intrinsics.validate()?;
        Ok(Self {
            intrinsics,
            projection: Projection::Pinhole,
        })
    }

    pub fn double_sphere(
        intrinsics: Intrinsics,
        params: DoubleSphereParams,
    ) -> Result<Self, CameraError> {
        intrinsics.validate()?;
        params.validate()?;
        Ok(Self {
            intrinsics,
            projection: Projection::DoubleSphere(params),
        })
    }

    pub fn width(&self) -> usize {
        self.intrinsics.width
    }

    pub fn height(&self) -> usize {
        self.intrinsics.height
    }

    /// Project a camera-frame point to a continuous pixel coordinate.
    /// Returns `None` when the point is outside the model's valid domain.
    pub fn project(&self, p: [f64; 3]) -> Option<[f64; 2]> {
        let k = &self.intrinsics;
        let [x, y, z] = p;
        match self.projection {
            Projection::Pinhole => {
                if z <= DENOM_EPS {
                    return None;
                }
                Some([k.cx + k.fx * x / z, k.cy + k.fy * y / z])
            }
            Projection::DoubleSphere(ds) => {
                let (xi, alpha) = (ds.xi, ds.alpha);
                let d1 = (x * x + y * y + z * z).sqrt();
                let gamma = xi * d1 + z;
                let d2 = (x * x + y * y + gamma * gamma).sqrt();
                let denom = alpha * d2 + (1.0 - alpha) * gamma;
                if denom <= DENOM_EPS || !ds_projection_valid(xi, alpha, z, d1) {
                    return None;
                }
                Some([k.cx + k.fx * x / denom, k.cy + k.fy * y / denom])
            }
        }
    }

    /// Projection plus its Jacobian with respect to the 3D point.
    pub fn project_jacobian(&self, p: [f64; 3]) -> Option<([f64; 2], [[f64; 3]; 2])> {
        let k = &self.intrinsics;
        let [x, y, z] = p;
        match self.projection {
            Projection::Pinhole => {
                if z <= DENOM_EPS {
                    return None;
                }
                let uv = [k.cx + k.fx * x / z, k.cy + k.fy * y / z];
                let jac = [
                    [k.fx / z, 0.0, -k.fx * x / (z * z)],
                    [0.0, k.fy / z, -k.fy * y / (z * z)],
                ];
                Some((uv, jac))
            }
            Projection::DoubleSphere(ds) => {
                let (xi, alpha) = (ds.xi, ds.alpha);
                let d1 = (x * x + y * y + z * z).sqrt();
                if d1 <= DENOM_EPS {
                    return None;
                }
                let gamma = xi * d1 + z;
                let d2 = (x * x + y * y + gamma * gamma).sqrt();
                let denom = alpha * d2 + (1.0 - alpha) * gamma;
                if denom <= DENOM_EPS || !ds_projection_valid(xi, alpha, z, d1) {
                    return None;
                }
                let uv = [k.cx + k.fx * x / denom, k.cy + k.fy * y / denom];
                // d(d1)/dP = P / d1
                let dd1 = [x / d1, y / d1, z / d1];
                // d(gamma)/dP = xi * dd1 + e_z
                let dgamma = [xi * dd1[0], xi * dd1[1], xi * dd1[2] + 1.0];
                // d(d2)/dP = (x e_x + y e_y + gamma dgamma) / d2
                let dd2 = [
                    (x + gamma * dgamma[0]) / d2,
                    (y + gamma * dgamma[1]) / d2,
                    (gamma * dgamma[2]) / d2,
                ];
                let ddenom = [
                    alpha * dd2[0] + (1.0 - alpha) * dgamma[0],
                    alpha * dd2[1] + (1.0 - alpha) * dgamma[1],
                    alpha * dd2[2] + (1.0 - alpha) * dgamma[2],
                ];
                let d2inv = 1.0 / (denom * denom);
                let mut jac = [[0.0; 3]; 2];
                for a in 0..3 {
                    let dx = if a == 0 { 1.0 } else { 0.0 };
                    let dy = if a == 1 { 1.0 } else { 0.0 };
                    jac[0][a] = k.fx * (dx * denom - x * ddenom[a]) * d2inv;
                    jac[1][a] = k.fy * (dy * denom - y * ddenom[a]) * d2inv;
                }
                Some((uv, jac))
            }
        }
    }

    /// Unit-z ray through a pixel: the camera-frame direction `(rx, ry, 1)`
    /// such that `unproject(p, depth) = depth * ray`. `None` when the pixel
    /// has no valid unprojection or the ray points away from the image plane.
    pub fn ray(&self, pixel: [f64; 2]) -> Option<[f64; 3]> {
        let k = &self.intrinsics;
        let [u, v] = pixel;
        match self.projection {
            Projection::Pinhole => Some([(u - k.cx) / k.fx, (v - k.cy) / k.fy, 1.0]),
            Projection::DoubleSphere(ds) => {
                let (xi, alpha) = (ds.xi, ds.alpha);
                let mx = (u - k.cx) / k.fx;
                let my = (v - k.cy) / k.fy;
                let r2 = mx * mx + my * my;
                if alpha > 0.5 && r2 > 1.0 / (2.0 * alpha - 1.0) {
                    return None;
                }
                let s = (1.0 - (2.0 * alpha - 1.0) * r2).sqrt();
                let mz = (1.0 - alpha * alpha * r2) / (alpha * s + 1.0 - alpha);
                let w = (mz * mz + (1.0 - xi * xi) * r2).sqrt();
                let den = mz * mz + r2;
                if den <= DENOM_EPS {
                    return None;
                }
                let factor = (mz * xi + w) / den;
                let dz = factor * mz - xi;
                if dz <= DENOM_EPS {
                    return None;
                }
                Some([factor * mx / dz, factor * my / dz, 1.0])
            }
        }
    }

    /// Back-project a pixel at the given z-depth into the camera frame.
    pub fn unproject(&self, pixel: [f64; 2], depth: f64) -> Result<[f64; 3], CameraError> {
        if depth <= 0.0 {
            return Err(CameraError::NonPositiveDepth(depth));
        }
        let ray = self
            .ray(pixel)
            .ok_or(CameraError::OutsideDomain(pixel[0], pixel[1]))?;
        Ok([depth * ray[0], depth * ray[1], depth])
    }

    /// Unprojection plus its Jacobian with respect to `(u, v, depth)`.
    pub fn unproject_jacobian(
        &self,
        pixel: [f64; 2],
        depth: f64,
    ) -> Result<([f64; 3], [[f64; 3]; 3]), CameraError> {
        if depth <= 0.0 {
            return Err(CameraError::NonPositiveDepth(depth));
        }
        let k = &self.intrinsics;
        let [u, v] = pixel;
        let ray = self
            .ray(pixel)
            .ok_or(CameraError::OutsideDomain(u, v))?;
        let point = [depth * ray[0], depth * ray[1], depth];
        // dP/d(u,v) = depth * d(ray)/d(u,v); dP/d(depth) = ray.
        let dray = match self.projection {
            Projection::Pinhole => [[1.0 / k.fx, 0.0], [0.0, 1.0 / k.fy], [0.0, 0.0]],
            Projection::DoubleSphere(ds) => {
                let (xi, alpha) = (ds.xi, ds.alpha);
                let mx = (u - k.cx) / k.fx;
                let my = (v - k.cy) / k.fy;
                let r2 = mx * mx + my * my;
                let s = (1.0 - (2.0 * alpha - 1.0) * r2).sqrt();
                let den_m = alpha * s + 1.0 - alpha;
                let mz = (1.0 - alpha * alpha * r2) / den_m;
                // chain rule through r2
                let ds_dr2 = -(2.0 * alpha - 1.0) / (2.0 * s);
                let dmz_dr2 =
                    (-alpha * alpha * den_m - (1.0 - alpha * alpha * r2) * alpha * ds_dr2)
                        / (den_m * den_m);
                let w = (mz * mz + (1.0 - xi * xi) * r2).sqrt();
                let dw_dr2 = (2.0 * mz * dmz_dr2 + (1.0 - xi * xi)) / (2.0 * w);
                let num = mz * xi + w;
                let dnum_dr2 = xi * dmz_dr2 + dw_dr2;
                let den = mz * mz + r2;
                let dden_dr2 = 2.0 * mz * dmz_dr2 + 1.0;
                let factor = num / den;
                let dfactor_dr2 = (dnum_dr2 * den - num * dden_dr2) / (den * den);
                // unit-sphere point q = factor * (mx, my, mz) - (0, 0, xi)
                let qz = factor * mz - xi;
                let qx = factor * mx;
                let qy = factor * my;
                // partials of (qx, qy, qz) w.r.t. (mx, my)
                let dr2_dm = [2.0 * mx, 2.0 * my];
                let mut dq = [[0.0; 2]; 3];
                for (a, &dr2) in dr2_dm.iter().enumerate() {
                    dq[0][a] = dfactor_dr2 * dr2 * mx + if a == 0 { factor } else { 0.0 };
                    dq[1][a] = dfactor_dr2 * dr2 * my + if a == 1 { factor } else { 0.0 };
                    dq[2][a] = dfactor_dr2 * dr2 * mz + factor * dmz_dr2 * dr2;
                }
                // ray = (qx/qz, qy/qz, 1)
                let mut dray_m = [[0.0; 2]; 3];
                for a in 0..2 {
                    dray_m[0][a] = (dq[0][a] * qz - qx * dq[2][a]) / (qz * qz);
                    dray_m[1][a] = (dq[1][a] * qz - qy * dq[2][a]) / (qz * qz);
                }
                // (mx, my) = ((u - cx)/fx, (v - cy)/fy)
                [
                    [dray_m[0][0] / k.fx, dray_m[0][1] / k.fy],
                    [dray_m[1][0] / k.fx, dray_m[1][1] / k.fy],
                    [0.0, 0.0],
                ]
            }
        };
        let jac = [
            [depth * dray[0][0], depth * dray[0][1], ray[0]],
            [depth * dray[1][0], depth * dray[1][1], ray[1]],
            [0.0, 0.0, 1.0],
        ];
        Ok((point, jac))
    }

    // ---- key-value text serialization ---------------------------------------

    /// Serialize to the dataset `camera.txt` format: one `key value` pair per
    /// line. Float values use Rust's shortest round-trip representation.
    pub fn to_text(&self) -> String {
        let k = &self.intrinsics;
        let mut out = String::new();
        let kind = match self.projection {
            Projection::Pinhole => "pinhole",
            Projection::DoubleSphere(_) => "double_sphere",
        };
        out.push_str(&format!("kind {kind}\n"));
        out.push_str(&format!("fx {}\n", k.fx));
        out.push_str(&format!("fy {}\n", k.fy));
        out.push_str(&format!("cx {}\n", k.cx));
        out.push_str(&format!("cy {}\n", k.cy));
        out.push_str(&format!("width {}\n", k.width));
        out.push_str(&format!("height {}\n", k.height));
        if let Projection::DoubleSphere(ds) = self.projection {
            out.push_str(&format!("xi {}\n", ds.xi));
            out.push_str(&format!("alpha {}\n", ds.alpha));
        }
        out
    }

    pub fn from_text(text: &str) -> Result<Self, CameraError> {
        let mut kind = None;
        let mut vals = std::collections::BTreeMap::new();
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let mut parts = line.split_whitespace();
            let key = parts
                .next()
                .ok_or_else(|| CameraError::Parse(format!("line {}", lineno + 1)))?;
            let value = parts
                .next()
                .ok_or_else(|| CameraError::Parse(format!("missing value on line {}", lineno + 1)))?;
            if key == "kind" {
                kind = Some(value.to_string());
            } else {
                let v: f64 = value.parse().map_err(|_| {
                    CameraError::Parse(format!("bad number {value:?} on line {}", lineno + 1))
                })?;
                vals.insert(key.to_string(), v);
            }
        }
        let get = |key: &str| -> Result<f64, CameraError> {
            vals.get(key)
                .copied()
                .ok_or_else(|| CameraError::Parse(format!("missing key {key}")))
        };
        let intrinsics = Intrinsics {
            fx: get("fx")?,
            fy: get("fy")?,
            cx: get("cx")?,
            cy: get("cy")?,
            width: get("width")? as usize,
            height: get("height")? as usize,
        };
        match kind.as_deref() {
            Some("pinhole") => Self::pinhole(intrinsics),
            Some("double_sphere") => Self::double_sphere(
                intrinsics,
                DoubleSphereParams {
                    xi: get("xi")?,
                    alpha: get("alpha")?,
                },
            ),
            Some(other) => Err(CameraError::Parse(format!("unknown kind {other:?}"))),
            None => Err(CameraError::Parse("missing kind".into())),
        }
    }

    pub fn save(&self, path: &Path) -> Result<(), CameraError> {
        std::fs::write(path, self.to_text())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, CameraError> {
        Self::from_text(&std::fs::read_to_string(path)?)
    }
}

impl fmt::Display for CameraModel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let k = &self.intrinsics;
        match self.projection {
            Projection::Pinhole => write!(
                f,
                "pinhole {}x{} fx={} fy={} cx={} cy={}",
                k.width, k.height, k.fx, k.fy, k.cx, k.cy
            ),
            Projection::DoubleSphere(ds) => write!(
                f,
                "double_sphere {}x{} fx={} fy={} cx={} cy={} xi={} alpha={}",
                k.width, k.height, k.fx, k.fy, k.cx, k.cy, ds.xi, ds.alpha
            ),
        }
    }
}

fn ds_projection_valid(xi: f64, alpha: f64, z: f64, d1: f64) -> bool {
    let w1 = if alpha <= 0.5 {
        alpha / (1.0 - alpha)
    } else {
        (1.0 - alpha) / alpha
    };
    let w2 = (w1 + xi) / (2.0 * w1 * xi + xi * xi + 1.0).sqrt();
    z > -w2 * d1
}
