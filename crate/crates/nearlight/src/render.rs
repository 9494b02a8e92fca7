//! Per-pixel reflectance model and synthetic capture rendering.
//!
//! The reflectance is a Lambertian term blended with a Blinn-Phong lobe whose
//! color shifts from white toward the albedo with a metallic factor. On top
//! of the local model, a cheap stochastic layer approximates global effects:
//! Bernoulli cast shadows, a constant ambient term, and a per-light
//! self-reflection term. Intensities can be quantized to emulate a camera
//! with a limited bit depth.

use nalgebra::Vector3;
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::geometry::{back_project, CameraIntrinsics, DepthMap, NormalMap};
use crate::lighting::{attenuation, lighting_vector, PointLight};

/// Row-major linear RGB image with f64 channels.
#[derive(Debug, Clone, PartialEq)]
pub struct RgbImageF {
    pub width: usize,
    pub height: usize,
    pub data: Vec<[f64; 3]>,
}

impl RgbImageF {
    pub fn new(width: usize, height: usize) -> Self {
        RgbImageF { width, height, data: vec![[0.0; 3]; width * height] }
    }

    #[inline]
    pub fn get(&self, u: usize, v: usize) -> [f64; 3] {
        self.data[v * self.width + u]
    }

    #[inline]
    pub fn set(&mut self, u: usize, v: usize, rgb: [f64; 3]) {
        self.data[v * self.width + u] = rgb;
    }
}

/// Surface material: Lambertian base blended with a Blinn-Phong lobe.
#[derive(Debug, Clone, PartialEq)]
pub struct Material {
    /// Diffuse RGB albedo in [0, 1].
    pub albedo: [f64; 3],
    /// Blend weight of the specular lobe in [0, 1]; 0 is pure Lambertian.
    pub specular_weight: f64,
    /// Blinn-Phong exponent; larger is shinier.
    pub shininess: f64,
    /// 0 gives a white highlight, 1 tints it with the albedo.
    pub metallic: f64,
}

impl Material {
    pub fn lambertian(albedo: [f64; 3]) -> Self {
        Material { albedo, specular_weight: 0.0, shininess: 1.0, metallic: 0.0 }
    }
}

/// Stochastic global-illumination stand-in used while rendering.
#[derive(Debug, Clone, PartialEq)]
pub struct GlobalIllumApprox {
    /// Probability that a given light is shadowed at this pixel.
    pub shadow_prob: f64,
    /// RGB term added to every light's intensity.
    pub ambient: [f64; 3],
    /// RGB self-reflection magnitude; each light adds a uniformly random
    /// fraction of it.
    pub self_reflection: [f64; 3],
}

impl GlobalIllumApprox {
    pub fn none() -> Self {
        GlobalIllumApprox { shadow_prob: 0.0, ambient: [0.0; 3], self_reflection: [0.0; 3] }
    }

    pub fn is_none(&self) -> bool {
        self.shadow_prob == 0.0
            && self.ambient == [0.0; 3]
            && self.self_reflection == [0.0; 3]
    }
}

/// Intensity quantization emulating a fixed-bit-depth camera.
///
/// `levels = Some(1024)` reproduces a 10-bit sensor; `None` disables
/// quantization entirely.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct QuantizationSpec {
    pub levels: Option<u32>,
}

impl Default for QuantizationSpec {
    fn default() -> Self {
        QuantizationSpec { levels: Some(1024) }
    }
}

impl QuantizationSpec {
    pub fn off() -> Self {
        QuantizationSpec { levels: None }
    }

    /// Clamp to [0, 1] and round to the nearest representable level
    /// (half away from zero).
    #[inline]
    pub fn apply(&self, v: f64) -> f64 {
        let clamped = v.clamp(0.0, 1.0);
        match self.levels {
            None => clamped,
            Some(levels) => {
                debug_assert!(levels >= 2);
                let top = (levels - 1) as f64;
                (clamped * top).round() / top
            }
        }
    }
}

/// BRDF sample for unit vectors n (normal), l (toward light), v (toward
/// camera): Lambertian plus a metallic-tinted Blinn-Phong lobe.
///
/// The specular term is gated on the light being on the front side of the
/// surface; a degenerate half vector (l opposite v) contributes nothing.
/// With albedo in [0, 1] the result stays in [0, 1] per channel.
pub fn shade(n: &Vector3<f64>, l: &Vector3<f64>, v: &Vector3<f64>, material: &Material) -> [f64; 3] {
    let n_dot_l = n.dot(l).max(0.0);
    let s = material.specular_weight;
    let mut out = [0.0; 3];
    let diffuse = n_dot_l * (1.0 - s);
    for c in 0..3 {
        out[c] = material.albedo[c] * diffuse;
    }
    if s > 0.0 && n_dot_l > 0.0 {
        let half = l + v;
        let half_norm = half.norm();
        if half_norm > 1e-12 {
            let n_dot_h = n.dot(&(half / half_norm)).max(0.0);
            let lobe = s * n_dot_h.powf(material.shininess);
            for c in 0..3 {
                // White highlight tinted toward the albedo by `metallic`.
                let spec_color = 1.0 + material.metallic * (material.albedo[c] - 1.0);
                out[c] += spec_color * lobe;
            }
        }
    }
    out
}

/// Render one pixel under every light: attenuated reflectance, Bernoulli
/// shadowing, ambient and self-reflection terms, then quantization.
///
/// Per light the RNG draws the shadow coin first and the self-reflection
/// fraction second, so results are reproducible for a given RNG state.
pub fn render_pixel(
    x: &Vector3<f64>,
    n: &Vector3<f64>,
    material: &Material,
    lights: &[PointLight],
    gi: &GlobalIllumApprox,
    quant: &QuantizationSpec,
    rng: &mut impl Rng,
) -> Vec<[f64; 3]> {
    let view = -x.normalize();
    let mut out = Vec::with_capacity(lights.len());
    for light in lights {
        let (l, _) = lighting_vector(light, x);
        let a = attenuation(light, x);
        let b = shade(n, &l, &view, material);
        let shadow = if gi.shadow_prob > 0.0 {
            if rng.gen::<f64>() < gi.shadow_prob {
                0.0
            } else {
                1.0
            }
        } else {
            1.0
        };
        let refl_scale = if gi.self_reflection == [0.0; 3] {
            0.0
        } else {
            rng.gen::<f64>()
        };
        let mut rgb = [0.0; 3];
        for c in 0..3 {
            let raw = a[c] * b[c] * shadow + gi.ambient[c] + refl_scale * gi.self_reflection[c];
            rgb[c] = quant.apply(raw);
        }
        out.push(rgb);
    }
    out
}

/// Per-pixel material assignment for a rendered scene.
#[derive(Debug, Clone)]
pub enum MaterialField {
    Uniform(Material),
    PerPixel(Vec<Material>),
}

impl MaterialField {
    fn at(&self, idx: usize) -> &Material {
        match self {
            MaterialField::Uniform(m) => m,
            MaterialField::PerPixel(v) => &v[idx],
        }
    }
}

/// Render a full capture stack (one image per light) from known geometry.
///
/// Pixels outside the depth mask stay black. Each pixel uses an RNG stream
/// derived from `seed` and its index, so the output is identical for any
/// thread count.
pub fn render_scene(
    cam: &CameraIntrinsics,
    depth: &DepthMap,
    normals: &NormalMap,
    materials: &MaterialField,
    lights: &[PointLight],
    gi: &GlobalIllumApprox,
    quant: &QuantizationSpec,
    seed: u64,
) -> Result<Vec<RgbImageF>> {
    let (w, h) = (depth.width, depth.height);
    if normals.width != w || normals.height != h {
        return Err(Error::arg("normal map dimensions do not match the depth map"));
    }
    if let MaterialField::PerPixel(v) = materials {
        if v.len() != w * h {
            return Err(Error::arg("per-pixel material count does not match the image size"));
        }
    }
    if lights.is_empty() {
        return Err(Error::arg("at least one light is required"));
    }

    let rows: Vec<Vec<Vec<[f64; 3]>>> = (0..h)
        .into_par_iter()
        .map(|v| {
            let mut row = Vec::with_capacity(w);
            for u in 0..w {
                let idx = v * w + u;
                if !depth.mask[idx] || !normals.mask[idx] {
                    row.push(vec![[0.0; 3]; lights.len()]);
                    continue;
                }
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                rng.set_stream(idx as u64);
                let x = back_project(cam, u as f64, v as f64, depth.data[idx]);
                row.push(render_pixel(
                    &x,
                    &normals.data[idx],
                    materials.at(idx),
                    lights,
                    gi,
                    quant,
                    &mut rng,
                ));
            }
            row
        })
        .collect();

    let mut stack = vec![RgbImageF::new(w, h); lights.len()];
    for (v, row) in rows.iter().enumerate() {
        for (u, pixel) in row.iter().enumerate() {
            for (m, rgb) in pixel.iter().enumerate() {
                stack[m].set(u, v, *rgb);
            }
        }
    }
    Ok(stack)
}
