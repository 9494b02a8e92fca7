//! Built-in analytic scenes and light rigs for testing and demos.
//!
//! Each scene provides exact per-pixel depth and normals, so rendered
//! captures come with ground truth attached. The default geometry mimics a
//! desktop capture rig: an object 30 cm from the camera lit by a ring of
//! LEDs around the lens.

use nalgebra::Vector3;

use crate::error::{Error, Result};
use crate::geometry::{CameraIntrinsics, DepthMap, NormalMap};
use crate::lighting::PointLight;

/// Analytic scene: exact depth, exact normals, shared mask.
#[derive(Debug, Clone)]
pub struct Scene {
    pub depth: DepthMap,
    pub normals: NormalMap,
}

/// The built-in scene family.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SceneKind {
    /// Sphere of radius 5 cm centered 30 cm from the camera.
    Sphere,
    /// Slanted plane around 30 cm.
    Plane,
    /// Sinusoidal relief on a plane at 30 cm.
    Wave,
}

impl SceneKind {
    pub fn parse(name: &str) -> Result<Self> {
        match name {
            "sphere" => Ok(SceneKind::Sphere),
            "plane" => Ok(SceneKind::Plane),
            "wave" => Ok(SceneKind::Wave),
            other => Err(Error::arg(format!(
                "unknown scene '{other}' (expected sphere, plane, or wave)"
            ))),
        }
    }
}

/// 256x256 camera with a field of view that frames the default scenes.
pub fn default_camera() -> CameraIntrinsics {
    CameraIntrinsics::new(450.0, 450.0, 128.0, 128.0, 256, 256).unwrap()
}

/// Build one of the analytic scenes for the given camera.
pub fn build_scene(kind: SceneKind, cam: &CameraIntrinsics) -> Scene {
    match kind {
        SceneKind::Sphere => sphere_scene(cam, Vector3::new(0.0, 0.0, 0.30), 0.05),
        SceneKind::Plane => plane_scene(cam, 0.25, -0.15, 0.30),
        SceneKind::Wave => wave_scene(cam, 0.30, 0.004, 48.0),
    }
}

/// Sphere at `center` with radius `r`; pixels whose ray misses are masked out.
pub fn sphere_scene(cam: &CameraIntrinsics, center: Vector3<f64>, r: f64) -> Scene {
    let mut depth = DepthMap::new(cam.width, cam.height);
    let mut normals = NormalMap::new(cam.width, cam.height);
    for v in 0..cam.height {
        for u in 0..cam.width {
            // Ray X = t * dir with dir_z = 1, so the hit's t is its depth.
            let dir = Vector3::new(
                (u as f64 - cam.cx) / cam.fx,
                (v as f64 - cam.cy) / cam.fy,
                1.0,
            );
            let a = dir.norm_squared();
            let b = -2.0 * dir.dot(&center);
            let c = center.norm_squared() - r * r;
            let disc = b * b - 4.0 * a * c;
            if disc <= 0.0 {
                continue;
            }
            let t = (-b - disc.sqrt()) / (2.0 * a);
            if t <= 0.0 {
                continue;
            }
            let x = dir * t;
            let mut n = (x - center) / r;
            if n.z > 0.0 {
                // Numerical guard; the near intersection always faces the camera.
                n = -n;
            }
            depth.set(u, v, t);
            normals.set(u, v, n);
        }
    }
    Scene { depth, normals }
}

/// Slanted plane `z = z0 / (1 - a(u-cx)/fx - b(v-cy)/fy)` covering the frame.
pub fn plane_scene(cam: &CameraIntrinsics, a: f64, b: f64, z0: f64) -> Scene {
    let mut depth = DepthMap::new(cam.width, cam.height);
    let mut normals = NormalMap::new(cam.width, cam.height);
    let n = Vector3::new(a, b, -1.0).normalize();
    for v in 0..cam.height {
        for u in 0..cam.width {
            let den = 1.0 - a * (u as f64 - cam.cx) / cam.fx - b * (v as f64 - cam.cy) / cam.fy;
            depth.set(u, v, z0 / den);
            normals.set(u, v, n);
        }
    }
    Scene { depth, normals }
}

/// Sinusoidal relief: depth varies with pixel position, normals are the
/// exact tangent-plane normals of the resulting surface.
pub fn wave_scene(cam: &CameraIntrinsics, z0: f64, amplitude: f64, period_px: f64) -> Scene {
    let mut depth = DepthMap::new(cam.width, cam.height);
    let mut normals = NormalMap::new(cam.width, cam.height);
    let k = std::f64::consts::TAU / period_px;
    for v in 0..cam.height {
        for u in 0..cam.width {
            let (su, sv) = (u as f64 - cam.cx, v as f64 - cam.cy);
            let z = z0 + amplitude * (k * su).sin() * (k * sv).sin();
            let dz_du = amplitude * k * (k * su).cos() * (k * sv).sin();
            let dz_dv = amplitude * k * (k * su).sin() * (k * sv).cos();
            // Tangents of X(u, v) = [(u-cx) z / fx, (v-cy) z / fy, z].
            let tu = Vector3::new((z + su * dz_du) / cam.fx, sv * dz_du / cam.fy, dz_du);
            let tv = Vector3::new(su * dz_dv / cam.fx, (z + sv * dz_dv) / cam.fy, dz_dv);
            let mut n = tu.cross(&tv).normalize();
            if n.z > 0.0 {
                n = -n;
            }
            depth.set(u, v, z);
            normals.set(u, v, n);
        }
    }
    Scene { depth, normals }
}

/// Ring of `count` LEDs of radius `radius` in the camera plane (z = 0),
/// pointed forward, with shared brightness and falloff exponent.
pub fn ring_lights(count: usize, radius: f64, phi: f64, mu: f64) -> Result<Vec<PointLight>> {
    if count == 0 {
        return Err(Error::arg("a light ring needs at least one LED"));
    }
    (0..count)
        .map(|i| {
            let angle = std::f64::consts::TAU * i as f64 / count as f64;
            PointLight::new(
                Vector3::new(radius * angle.cos(), radius * angle.sin(), 0.0),
                [phi; 3],
                Vector3::new(0.0, 0.0, 1.0),
                mu,
            )
        })
        .collect()
}

/// Default rig for the built-in scenes: 15 LEDs on a 10 cm ring, brightness
/// chosen so a Lambertian object at 30 cm is well exposed.
pub fn default_ring() -> Vec<PointLight> {
    ring_lights(15, 0.10, 0.1, 0.5).unwrap()
}

/// Move every light away from `center` by `factor`, scaling brightness by
/// `factor^2` so the exposure at `center` is preserved. This produces a
/// far-field variant of a rig: directions stay put while the attenuation
/// variation across the object vanishes.
pub fn scale_lights_about(
    lights: &[PointLight],
    center: &Vector3<f64>,
    factor: f64,
) -> Result<Vec<PointLight>> {
    if !(factor.is_finite() && factor > 0.0) {
        return Err(Error::arg("scale factor must be positive"));
    }
    lights
        .iter()
        .map(|l| {
            PointLight::new(
                center + (l.position - center) * factor,
                [
                    l.phi[0] * factor * factor,
                    l.phi[1] * factor * factor,
                    l.phi[2] * factor * factor,
                ],
                l.direction,
                l.mu,
            )
        })
        .collect()
}
