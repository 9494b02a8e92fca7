//! Anisotropic point-light model and attenuation compensation.
//!
//! Each LED is a point source with an RGB brightness, a principal direction,
//! and an angular falloff exponent. The irradiance reaching a surface point X
//! scales with `phi * cos(angle to principal direction)^mu / distance^2`;
//! dividing a measured intensity by this factor recovers a brightness-scaled
//! BRDF sample, which is what the observation maps are built from.

use nalgebra::Vector3;

use crate::error::{Error, Result};
use crate::geometry::{back_project, CameraIntrinsics, DepthMap};
use crate::render::RgbImageF;

/// A point light source in the camera frame.
#[derive(Debug, Clone, PartialEq)]
pub struct PointLight {
    /// Position in meters.
    pub position: Vector3<f64>,
    /// RGB brightness.
    pub phi: [f64; 3],
    /// Principal direction (unit vector) the LED points along.
    pub direction: Vector3<f64>,
    /// Angular falloff exponent; 0 is isotropic.
    pub mu: f64,
}

impl PointLight {
    pub fn new(position: Vector3<f64>, phi: [f64; 3], direction: Vector3<f64>, mu: f64) -> Result<Self> {
        if phi.iter().any(|p| !(p.is_finite() && *p > 0.0)) {
            return Err(Error::arg("light brightness must be positive"));
        }
        if !(mu.is_finite() && mu >= 0.0) {
            return Err(Error::arg("anisotropy exponent must be non-negative"));
        }
        let norm = direction.norm();
        if !norm.is_finite() || norm < 1e-12 {
            return Err(Error::arg("light direction must be a nonzero vector"));
        }
        Ok(PointLight { position, phi, direction: direction / norm, mu })
    }

    /// Isotropic white light of unit brightness.
    pub fn isotropic(position: Vector3<f64>) -> Self {
        PointLight {
            position,
            phi: [1.0; 3],
            direction: Vector3::new(0.0, 0.0, 1.0),
            mu: 0.0,
        }
    }
}

/// Unit vector from the surface point toward the light, and the distance.
#[inline]
pub fn lighting_vector(light: &PointLight, x: &Vector3<f64>) -> (Vector3<f64>, f64) {
    let to_light = light.position - x;
    let dist = to_light.norm();
    (to_light / dist, dist)
}

/// Brightness-free part of the attenuation at X:
/// `max(0, s.D)^mu / dist^2`, where s points from the light toward X.
///
/// The clamp means a point behind an anisotropic LED receives nothing, while
/// `mu = 0` stays isotropic everywhere (0^0 evaluates to 1). A light exactly
/// at the surface point yields +inf; callers treat non-finite factors as
/// invalid samples.
#[inline]
pub fn geometric_factor(light: &PointLight, x: &Vector3<f64>) -> f64 {
    let from_light = x - light.position;
    let dist2 = from_light.norm_squared();
    if dist2 < 1e-18 {
        return f64::INFINITY;
    }
    let s_hat = from_light / dist2.sqrt();
    let cos = s_hat.dot(&light.direction).max(0.0);
    cos.powf(light.mu) / dist2
}

/// Full per-channel attenuation at X: brightness times the geometric factor.
#[inline]
pub fn attenuation(light: &PointLight, x: &Vector3<f64>) -> [f64; 3] {
    let g = geometric_factor(light, x);
    [light.phi[0] * g, light.phi[1] * g, light.phi[2] * g]
}

/// Divide a captured image stack by the per-pixel attenuation of each light.
///
/// The surface point for pixel (u, v) is back-projected at `depth`. Output
/// pixels are zeroed (and reported invalid through the returned masks)
/// where the depth mask is unset or the attenuation is zero/non-finite in
/// any channel.
pub fn compensate(
    images: &[RgbImageF],
    depth: &DepthMap,
    cam: &CameraIntrinsics,
    lights: &[PointLight],
) -> Result<(Vec<RgbImageF>, Vec<Vec<bool>>)> {
    if images.len() != lights.len() {
        return Err(Error::arg(format!(
            "{} images but {} lights",
            images.len(),
            lights.len()
        )));
    }
    for img in images {
        if img.width != depth.width || img.height != depth.height {
            return Err(Error::arg("image dimensions do not match the depth map"));
        }
    }
    let (w, h) = (depth.width, depth.height);
    let mut out = Vec::with_capacity(images.len());
    let mut valid = Vec::with_capacity(images.len());
    for (img, light) in images.iter().zip(lights) {
        let mut j = RgbImageF::new(w, h);
        let mut ok = vec![false; w * h];
        for v in 0..h {
            for u in 0..w {
                let idx = v * w + u;
                if !depth.mask[idx] {
                    continue;
                }
                let x = back_project(cam, u as f64, v as f64, depth.data[idx]);
                let a = attenuation(light, &x);
                if a.iter().any(|c| !c.is_finite() || *c <= 0.0) {
                    continue;
                }
                let i = img.get(u, v);
                j.set(u, v, [i[0] / a[0], i[1] / a[1], i[2] / a[2]]);
                ok[idx] = true;
            }
        }
        out.push(j);
        valid.push(ok);
    }
    Ok((out, valid))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    #[test]
    fn attenuation_matches_worked_example() {
        // phi = 2, forward-pointing LED at the origin with mu = 2, surface at
        // [0.3, 0, 0.4]: cos = 0.8, dist = 0.5, a = 2 * 0.64 / 0.25 = 5.12.
        let light = PointLight::new(
            Vector3::zeros(),
            [2.0, 2.0, 2.0],
            Vector3::new(0.0, 0.0, 1.0),
            2.0,
        )
        .unwrap();
        let a = attenuation(&light, &Vector3::new(0.3, 0.0, 0.4));
        for c in a {
            assert_relative_eq!(c, 5.12, epsilon = 1e-12);
        }
    }

    #[test]
    fn isotropic_light_follows_inverse_square() {
        let light = PointLight::isotropic(Vector3::zeros());
        let near = geometric_factor(&light, &Vector3::new(0.0, 0.0, 0.5));
        let far = geometric_factor(&light, &Vector3::new(0.0, 0.0, 1.0));
        assert_relative_eq!(near / far, 4.0, epsilon = 1e-12);
    }

    #[test]
    fn isotropic_light_ignores_direction() {
        // mu = 0 must illuminate points behind the LED's principal direction.
        let light = PointLight::new(
            Vector3::zeros(),
            [1.0; 3],
            Vector3::new(0.0, 0.0, 1.0),
            0.0,
        )
        .unwrap();
        let behind = geometric_factor(&light, &Vector3::new(0.0, 0.0, -2.0));
        assert_relative_eq!(behind, 0.25, epsilon = 1e-12);
    }

    #[test]
    fn point_behind_anisotropic_light_is_dark() {
        let light = PointLight::new(
            Vector3::zeros(),
            [1.0; 3],
            Vector3::new(0.0, 0.0, 1.0),
            1.5,
        )
        .unwrap();
        assert_eq!(geometric_factor(&light, &Vector3::new(0.0, 0.0, -1.0)), 0.0);
    }

    #[test]
    fn light_at_surface_point_is_non_finite() {
        let light = PointLight::isotropic(Vector3::new(0.1, 0.2, 0.3));
        assert!(geometric_factor(&light, &Vector3::new(0.1, 0.2, 0.3)).is_infinite());
    }

    #[test]
    fn compensate_inverts_constant_attenuation() {
        // A stack rendered as i = phi * B, compensated at the same depth with
        // an LED whose geometric factor is 1 (isotropic at unit distance),
        // must return exactly B.
        let cam = CameraIntrinsics::new(100.0, 100.0, 1.0, 1.0, 3, 3).unwrap();
        let mut depth = DepthMap::new(3, 3);
        for v in 0..3 {
            for u in 0..3 {
                depth.set(u, v, 1.0);
            }
        }
        // Isotropic LED at distance 1 from every pixel is impossible on a
        // plane, so place it per-pixel equivalently: use the principal pixel
        // only.
        let light = PointLight::new(
            Vector3::new(0.0, 0.0, 0.0),
            [2.0, 2.0, 2.0],
            Vector3::new(0.0, 0.0, 1.0),
            0.0,
        )
        .unwrap();
        let b = [0.25, 0.5, 0.75];
        let mut img = RgbImageF::new(3, 3);
        let x = back_project(&cam, 1.0, 1.0, 1.0);
        let a = attenuation(&light, &x);
        img.set(1, 1, [a[0] * b[0], a[1] * b[1], a[2] * b[2]]);
        let (j, valid) = compensate(&[img], &depth, &cam, &[light]).unwrap();
        let got = j[0].get(1, 1);
        for c in 0..3 {
            assert_relative_eq!(got[c], b[c], epsilon = 1e-15);
        }
        assert!(valid[0][4]);
    }

    proptest! {
        #[test]
        fn attenuation_scales_with_brightness(
            phi in 0.25..4.0f64,
            px in -0.3..0.3f64,
            py in -0.3..0.3f64,
            mu in 0.0..3.0f64,
            scale in 0.5..2.0f64,
        ) {
            let x = Vector3::new(0.05, -0.02, 0.5);
            let base = PointLight::new(
                Vector3::new(px, py, 0.0),
                [phi; 3],
                Vector3::new(0.1, -0.05, 1.0),
                mu,
            ).unwrap();
            let scaled = PointLight { phi: [phi * scale; 3], ..base.clone() };
            let a0 = attenuation(&base, &x);
            let a1 = attenuation(&scaled, &x);
            for c in 0..3 {
                prop_assert!((a1[c] - scale * a0[c]).abs() <= 1e-12 * a0[c].abs().max(1.0));
            }
        }

        #[test]
        fn lighting_vector_is_unit(
            px in -0.5..0.5f64,
            py in -0.5..0.5f64,
            pz in -0.1..0.2f64,
        ) {
            let light = PointLight::isotropic(Vector3::new(px, py, pz));
            let x = Vector3::new(0.01, 0.02, 0.6);
            let (l, dist) = lighting_vector(&light, &x);
            prop_assert!((l.norm() - 1.0).abs() < 1e-12);
            prop_assert!((x + l * dist - light.position).norm() < 1e-12);
        }
    }
}
