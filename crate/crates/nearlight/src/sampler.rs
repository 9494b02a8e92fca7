//! Training-data generation: draw a random near-field configuration (camera,
//! surface point, LED layout, material, global-illumination strength), render
//! per-light intensities, perturb the setup parameters, and emit
//! (observation map, ground-truth normal) pairs.
//!
//! Two modes exist. `General` draws everything — focal length, working
//! distance, and an LED grid whose extent scales with the distance — to cover
//! a wide family of rigs. `Specific` copies the LED layout and camera from a
//! calibration file and only samples the surface point, so the network can be
//! tuned to one physical setup.
//!
//! The perturbations model test-time errors: the depth estimate is off
//! (`z'`), and the rig parameters are miscalibrated. The *map* side is always
//! compensated at the perturbed depth. In `Forward` order (general mode) the
//! map also uses perturbed light parameters while the render uses the true
//! ones; `Reverse` order (specific mode) swaps the light parameters — the
//! render is perturbed and the map uses the calibration values verbatim — so
//! the map side of a specific-mode record matches exactly what the
//! reconstruction pipeline will compute at test time.
//!
//! Record generation is a pure function of (seed, record index), so streams
//! can be produced in parallel and are reproducible bit for bit.

use nalgebra::Vector3;
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::io::CalibrationFile;
use crate::lighting::{attenuation, lighting_vector, PointLight};
use crate::obsmap::{build_map, MapSample, ObservationMap};
use crate::render::{shade, GlobalIllumApprox, Material, QuantizationSpec};

/// Working distance range in meters.
pub const Z_RANGE: (f64, f64) = (0.10, 1.70);
/// Normalized focal length range (focal / half image width).
pub const F_NORM_RANGE: (f64, f64) = (1.0, 10.0);
/// Per-LED brightness range; sampled uniformly in log scale.
pub const PHI_RANGE: (f64, f64) = (0.25, 4.0);
/// Per-LED angular dissipation exponent range.
pub const MU_RANGE: (f64, f64) = (0.0, 3.0);
/// Light count bounds in general mode.
pub const LIGHT_COUNT_RANGE: (usize, usize) = (15, 288);
/// Grid resolution (columns, rows) that candidate LED positions are drawn
/// from; 24 * 12 = 288 makes the maximum count exactly fill the grid.
pub const LIGHT_GRID: (usize, usize) = (24, 12);
/// Side length of the LED rectangle relative to the working distance.
pub const LIGHT_RECT_REL: (f64, f64) = (0.5, 3.0);
/// Central hole radius (cameras sit there) relative to the working distance.
pub const LIGHT_HOLE_REL: f64 = 0.66;
/// LED plane offset along the optical axis relative to the working distance.
pub const LIGHT_PLANE_OFFSET_REL: f64 = 0.25;
/// Per-coordinate LED position jitter relative to the working distance.
pub const LIGHT_JITTER_REL: f64 = 0.05;
/// Per-component deviation of the LED principal direction from the axis.
pub const LIGHT_DIRECTION_DEV: f64 = 0.1;
/// Minimum cosine between the sampled normal and the viewing vector.
pub const MIN_NORMAL_VIEW_COS: f64 = 0.05;
/// Upper bound of the per-record Bernoulli shadow probability.
pub const SHADOW_PROB_MAX: f64 = 0.35;
/// Upper bound of the per-record constant ambient term.
pub const AMBIENT_MAX: f64 = 0.05;
/// Upper bound of the self-reflection magnitude as a fraction of the mean
/// direct signal.
pub const SELF_REFLECTION_MAX: f64 = 0.15;

/// Which rig family to draw configurations from.
#[derive(Debug, Clone)]
pub enum SampleMode {
    /// Everything sampled: camera, working distance, LED layout.
    General,
    /// LED layout and camera copied from a calibration file.
    Specific(CalibrationFile),
}

/// Material family a stream draws from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MaterialFamily {
    /// Diffuse only; albedo per channel in [0.1, 1].
    Lambertian,
    /// A mix of diffuse and glossy/metallic surfaces.
    Mixed,
}

/// Which side of the record receives the perturbed light parameters.
/// The perturbed depth always lands on the map side.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PerturbOrder {
    /// Render with true lights, build the map with perturbed lights.
    Forward,
    /// Render with perturbed lights, build the map with the true
    /// (calibration) lights verbatim.
    Reverse,
}

/// One fully sampled configuration, before perturbation.
#[derive(Debug, Clone)]
pub struct ConfigSample {
    /// Normalized image coordinates in [-1, 1]^2.
    pub uv: (f64, f64),
    /// Normalized focal lengths (x, y); equal in general mode.
    pub f_norm: (f64, f64),
    /// Working distance (depth of the surface point) in meters.
    pub z: f64,
    /// The surface point in the camera frame.
    pub point: Vector3<f64>,
    /// Unit vector from the point toward the camera.
    pub view: Vector3<f64>,
    /// Ground-truth unit normal, z-component <= 0.
    pub normal: Vector3<f64>,
    pub lights: Vec<PointLight>,
    pub material: Material,
    /// Per-record global-illumination strengths. `self_reflection` here is a
    /// *fraction of the mean direct signal*; it is resolved to an absolute
    /// magnitude during rendering (see [`resolve_self_reflection`]).
    pub gi: GlobalIllumApprox,
}

/// Magnitudes of the setup perturbations applied when generating records.
///
/// Each draw happens only if its magnitude is positive, so a zero spec
/// consumes no randomness and is an exact identity.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PerturbationSpec {
    /// Depth: z' = z + N(0, depth_rel_sigma * z), redrawn while z' <= 0.
    pub depth_rel_sigma: f64,
    /// LED position: each coordinate += U(-position_rel*z, position_rel*z).
    pub position_rel: f64,
    /// LED brightness: phi *= 1 + U(-brightness_rel, brightness_rel).
    pub brightness_rel: f64,
    /// LED direction: each component += U(-direction_abs, direction_abs),
    /// then renormalized.
    pub direction_abs: f64,
    /// Dissipation exponent, additive part: mu += U(0, aniso_add).
    pub aniso_add: f64,
    /// Dissipation exponent, multiplicative part:
    /// mu *= 1 + U(-aniso_mul_rel, aniso_mul_rel).
    pub aniso_mul_rel: f64,
    /// Also draw one shared perturbation per distribution and apply it to
    /// every light, modeling systematic rig errors.
    pub systematic: bool,
}

impl PerturbationSpec {
    /// No perturbation at all; `perturb` becomes an exact identity.
    pub fn zero() -> Self {
        PerturbationSpec {
            depth_rel_sigma: 0.0,
            position_rel: 0.0,
            brightness_rel: 0.0,
            direction_abs: 0.0,
            aniso_add: 0.0,
            aniso_mul_rel: 0.0,
            systematic: false,
        }
    }
}

impl Default for PerturbationSpec {
    fn default() -> Self {
        PerturbationSpec {
            depth_rel_sigma: 0.05,
            position_rel: 0.001,
            brightness_rel: 0.01,
            direction_abs: 0.1,
            aniso_add: 0.1,
            aniso_mul_rel: 0.1,
            systematic: true,
        }
    }
}

/// A perturbed copy of the depth and the light parameters.
#[derive(Debug, Clone)]
pub struct PerturbedSetup {
    pub z: f64,
    pub lights: Vec<PointLight>,
}

/// Everything needed to generate a reproducible record stream.
#[derive(Debug, Clone)]
pub struct StreamConfig {
    pub mode: SampleMode,
    pub family: MaterialFamily,
    pub order: PerturbOrder,
    pub perturb: PerturbationSpec,
    /// Draw per-record global-illumination strengths; off renders clean.
    pub gi: bool,
    pub quant: QuantizationSpec,
    /// Observation-map resolution.
    pub d: usize,
    pub seed: u64,
}

impl StreamConfig {
    /// General-mode stream with default perturbations, gi, and a 10-bit
    /// camera.
    pub fn general(family: MaterialFamily, seed: u64) -> Self {
        StreamConfig {
            mode: SampleMode::General,
            family,
            order: PerturbOrder::Forward,
            perturb: PerturbationSpec::default(),
            gi: true,
            quant: QuantizationSpec::default(),
            d: 32,
            seed,
        }
    }

    /// Setup-specific stream: lights copied from the calibration on the map
    /// side, render side perturbed.
    pub fn specific(calib: CalibrationFile, family: MaterialFamily, seed: u64) -> Self {
        StreamConfig {
            mode: SampleMode::Specific(calib),
            family,
            order: PerturbOrder::Reverse,
            perturb: PerturbationSpec::default(),
            gi: true,
            quant: QuantizationSpec::default(),
            d: 32,
            seed,
        }
    }

    /// Clean stream: no perturbation, no gi, no quantization. Map cells then
    /// reproduce the shading function exactly.
    pub fn clean(family: MaterialFamily, seed: u64) -> Self {
        StreamConfig {
            mode: SampleMode::General,
            family,
            order: PerturbOrder::Forward,
            perturb: PerturbationSpec::zero(),
            gi: false,
            quant: QuantizationSpec::off(),
            d: 32,
            seed,
        }
    }
}

/// One training pair plus the scalars that describe where it came from.
#[derive(Debug, Clone)]
pub struct TrainingRecord {
    pub map: ObservationMap,
    /// Ground-truth unit normal, z-component <= 0.
    pub target: Vector3<f64>,
    pub z: f64,
    pub f_norm: f64,
    pub light_count: usize,
}

fn uniform(rng: &mut impl Rng, lo: f64, hi: f64) -> f64 {
    rng.gen_range(lo..hi)
}

/// Draw one configuration. General mode samples camera, point, and LED
/// layout from the documented ranges; specific mode copies the rig from the
/// calibration and samples only the point (and material / gi strengths).
///
/// `gi` controls whether global-illumination strengths are drawn (otherwise
/// they are zero and rendering is clean).
pub fn sample_config(
    rng: &mut impl Rng,
    mode: &SampleMode,
    family: MaterialFamily,
    gi: bool,
) -> ConfigSample {
    let f_norm = match mode {
        SampleMode::General => {
            let f = uniform(rng, F_NORM_RANGE.0, F_NORM_RANGE.1);
            (f, f)
        }
        SampleMode::Specific(calib) => {
            let c = &calib.camera;
            (
                c.fx / (c.width as f64 / 2.0),
                c.fy / (c.height as f64 / 2.0),
            )
        }
    };
    let uv = (uniform(rng, -1.0, 1.0), uniform(rng, -1.0, 1.0));
    let z = uniform(rng, Z_RANGE.0, Z_RANGE.1);
    // Ray with unit z-component, so `z` is the depth coordinate.
    let ray = Vector3::new(uv.0 / f_norm.0, uv.1 / f_norm.1, 1.0);
    let point = ray * z;
    let view = -point.normalize();

    // Uniform on the camera-facing hemisphere, rejecting near-grazing
    // normals (unobservable in practice).
    let normal = loop {
        let nz: f64 = uniform(rng, -1.0, 1.0);
        let theta = uniform(rng, 0.0, std::f64::consts::TAU);
        let r = (1.0 - nz * nz).sqrt();
        let n = Vector3::new(r * theta.cos(), r * theta.sin(), -nz.abs());
        if n.dot(&view) > MIN_NORMAL_VIEW_COS {
            break n;
        }
    };

    let lights = match mode {
        SampleMode::General => sample_light_layout(rng, z),
        SampleMode::Specific(calib) => calib.lights.clone(),
    };

    let material = sample_material(rng, family);
    let gi = if gi {
        GlobalIllumApprox {
            shadow_prob: uniform(rng, 0.0, SHADOW_PROB_MAX),
            ambient: [uniform(rng, 0.0, AMBIENT_MAX); 3],
            // Fraction of the mean direct signal; resolved while rendering.
            self_reflection: [uniform(rng, 0.0, SELF_REFLECTION_MAX); 3],
        }
    } else {
        GlobalIllumApprox::none()
    };

    ConfigSample { uv, f_norm, z, point, view, normal, lights, material, gi }
}

/// LEDs live on a grid over a rectangle in a plane near the camera, with a
/// central hole where the camera sits. The rectangle, hole, and plane offset
/// all scale with the working distance. Geometry is redrawn until at least
/// 15 grid points survive the hole; the used count is uniform between 15 and
/// the survivor count.
fn sample_light_layout(rng: &mut impl Rng, z: f64) -> Vec<PointLight> {
    let (cols, rows) = LIGHT_GRID;
    let mut available: Vec<(f64, f64)> = Vec::with_capacity(cols * rows);
    loop {
        let rect_w = z * uniform(rng, LIGHT_RECT_REL.0, LIGHT_RECT_REL.1);
        let rect_h = z * uniform(rng, LIGHT_RECT_REL.0, LIGHT_RECT_REL.1);
        let hole = z * uniform(rng, 0.0, LIGHT_HOLE_REL);
        available.clear();
        for j in 0..rows {
            for i in 0..cols {
                let x = -rect_w / 2.0 + rect_w * i as f64 / (cols - 1) as f64;
                let y = -rect_h / 2.0 + rect_h * j as f64 / (rows - 1) as f64;
                if x.hypot(y) > hole {
                    available.push((x, y));
                }
            }
        }
        if available.len() >= LIGHT_COUNT_RANGE.0 {
            break;
        }
    }
    let offset = z * uniform(rng, 0.0, LIGHT_PLANE_OFFSET_REL);
    let max_count = available.len().min(LIGHT_COUNT_RANGE.1);
    let count = rng.gen_range(LIGHT_COUNT_RANGE.0..=max_count);
    // Partial Fisher-Yates: the first `count` entries become the selection.
    for k in 0..count {
        let pick = rng.gen_range(k..available.len());
        available.swap(k, pick);
    }

    let jitter = z * LIGHT_JITTER_REL;
    (0..count)
        .map(|k| {
            let (gx, gy) = available[k];
            let position = Vector3::new(
                gx + uniform(rng, -jitter, jitter),
                gy + uniform(rng, -jitter, jitter),
                offset + uniform(rng, -jitter, jitter),
            );
            let dev = LIGHT_DIRECTION_DEV;
            let direction = Vector3::new(
                uniform(rng, -dev, dev),
                uniform(rng, -dev, dev),
                1.0 + uniform(rng, -dev, dev),
            )
            .normalize();
            let phi = uniform(rng, PHI_RANGE.0.ln(), PHI_RANGE.1.ln()).exp();
            let mu = uniform(rng, MU_RANGE.0, MU_RANGE.1);
            PointLight { position, phi: [phi; 3], direction, mu }
        })
        .collect()
}

fn sample_material(rng: &mut impl Rng, family: MaterialFamily) -> Material {
    match family {
        MaterialFamily::Lambertian => Material::lambertian([
            uniform(rng, 0.1, 1.0),
            uniform(rng, 0.1, 1.0),
            uniform(rng, 0.1, 1.0),
        ]),
        MaterialFamily::Mixed => {
            // A quarter of the mixed stream stays diffuse so the network
            // keeps an anchor; the rest is glossy to metallic.
            if rng.gen::<f64>() < 0.25 {
                Material::lambertian([
                    uniform(rng, 0.1, 1.0),
                    uniform(rng, 0.1, 1.0),
                    uniform(rng, 0.1, 1.0),
                ])
            } else {
                Material {
                    albedo: [
                        uniform(rng, 0.05, 0.95),
                        uniform(rng, 0.05, 0.95),
                        uniform(rng, 0.05, 0.95),
                    ],
                    specular_weight: uniform(rng, 0.2, 0.9),
                    shininess: uniform(rng, 2.0f64.ln(), 100.0f64.ln()).exp(),
                    metallic: uniform(rng, 0.0, 1.0),
                }
            }
        }
    }
}

/// Perturb the depth and the per-light parameters.
///
/// Draw order is fixed: depth first (redrawn while z' <= 0), then — when
/// `systematic` is set — one shared draw per distribution, then per light:
/// position (3), brightness (1), direction (3), additive exponent (1),
/// multiplicative exponent (1). Zero-magnitude entries draw nothing, so
/// `PerturbationSpec::zero()` returns the inputs bit for bit.
pub fn perturb(
    z: f64,
    lights: &[PointLight],
    spec: &PerturbationSpec,
    rng: &mut impl Rng,
) -> PerturbedSetup {
    let z_out = if spec.depth_rel_sigma > 0.0 {
        let normal = Normal::new(0.0, spec.depth_rel_sigma * z).expect("finite sigma");
        loop {
            let candidate = z + normal.sample(rng);
            if candidate > 0.0 {
                break candidate;
            }
        }
    } else {
        z
    };

    let zero3 = Vector3::zeros();
    let (sys_pos, sys_phi, sys_dir, sys_add, sys_mul) = if spec.systematic {
        (
            draw_offset3(rng, spec.position_rel * z),
            draw_factor(rng, spec.brightness_rel),
            draw_offset3(rng, spec.direction_abs),
            draw_one_sided(rng, spec.aniso_add),
            draw_factor(rng, spec.aniso_mul_rel),
        )
    } else {
        (zero3, 1.0, zero3, 0.0, 1.0)
    };

    let lights_out = lights
        .iter()
        .map(|light| {
            let d_pos = draw_offset3(rng, spec.position_rel * z);
            let f_phi = draw_factor(rng, spec.brightness_rel);
            let d_dir = draw_offset3(rng, spec.direction_abs);
            let a_add = draw_one_sided(rng, spec.aniso_add);
            let f_mul = draw_factor(rng, spec.aniso_mul_rel);
            if d_pos == zero3
                && f_phi == 1.0
                && d_dir == zero3
                && a_add == 0.0
                && f_mul == 1.0
                && !spec.systematic
            {
                return light.clone();
            }
            let direction = light.direction + d_dir + sys_dir;
            let norm = direction.norm();
            PointLight {
                position: light.position + d_pos + sys_pos,
                phi: [
                    light.phi[0] * f_phi * sys_phi,
                    light.phi[1] * f_phi * sys_phi,
                    light.phi[2] * f_phi * sys_phi,
                ],
                direction: if norm > 1e-9 { direction / norm } else { light.direction },
                mu: light.mu * f_mul * sys_mul + a_add + sys_add,
            }
        })
        .collect();

    PerturbedSetup { z: z_out, lights: lights_out }
}

fn draw_offset3(rng: &mut impl Rng, magnitude: f64) -> Vector3<f64> {
    if magnitude > 0.0 {
        Vector3::new(
            uniform(rng, -magnitude, magnitude),
            uniform(rng, -magnitude, magnitude),
            uniform(rng, -magnitude, magnitude),
        )
    } else {
        Vector3::zeros()
    }
}

fn draw_factor(rng: &mut impl Rng, magnitude: f64) -> f64 {
    if magnitude > 0.0 {
        1.0 + uniform(rng, -magnitude, magnitude)
    } else {
        1.0
    }
}

fn draw_one_sided(rng: &mut impl Rng, magnitude: f64) -> f64 {
    if magnitude > 0.0 {
        uniform(rng, 0.0, magnitude)
    } else {
        0.0
    }
}

/// Assign the true and perturbed light parameters to the render and map
/// sides. The perturbed depth is always on the map side; `Reverse` swaps
/// only the light parameters, leaving the map with the true (calibration)
/// lights verbatim.
pub fn split_sides<'a>(
    order: PerturbOrder,
    true_lights: &'a [PointLight],
    perturbed: &'a PerturbedSetup,
) -> (&'a [PointLight], &'a [PointLight]) {
    match order {
        PerturbOrder::Forward => (true_lights, &perturbed.lights),
        PerturbOrder::Reverse => (&perturbed.lights, true_lights),
    }
}

/// Resolve the relative self-reflection fraction stored in a sampled
/// [`GlobalIllumApprox`] into an absolute magnitude, given the mean direct
/// signal of the record.
pub fn resolve_self_reflection(gi: &GlobalIllumApprox, mean_signal: f64) -> GlobalIllumApprox {
    GlobalIllumApprox {
        shadow_prob: gi.shadow_prob,
        ambient: gi.ambient,
        self_reflection: [
            gi.self_reflection[0] * mean_signal,
            gi.self_reflection[1] * mean_signal,
            gi.self_reflection[2] * mean_signal,
        ],
    }
}

/// Result of rendering and compensating one record.
pub struct BuiltMap {
    pub map: ObservationMap,
    /// Lights whose direct (unshadowed, front-facing) term reached the map.
    pub contributing: usize,
}

/// Render per-light intensities at the render-side parameters, compensate
/// them with the map-side parameters, and bin into an observation map.
///
/// Camera model: the sensor sees `a * shade + ambient + refl`, exposed so
/// the brightest sample fills the range, then quantized. Compensation
/// divides by the full map-side attenuation (the map builder then receives
/// unit brightness). Without quantization the division is composed as the
/// attenuation ratio `a_render / a_map`, which is exactly 1.0 whenever the
/// two sides agree — so clean records reproduce the shading function bit for
/// bit. With quantization the absolute error per cell is at most half an
/// exposure step divided by the attenuation, i.e. <= 0.5/(levels-1) times
/// the max/min attenuation ratio over the used lights.
///
/// Per light the RNG draws the shadow coin first and the self-reflection
/// fraction second (each only when its strength is nonzero), matching the
/// scene renderer.
#[allow(clippy::too_many_arguments)]
pub fn build_training_map(
    render_point: &Vector3<f64>,
    normal: &Vector3<f64>,
    view: &Vector3<f64>,
    material: &Material,
    gi: &GlobalIllumApprox,
    render_lights: &[PointLight],
    map_point: &Vector3<f64>,
    map_lights: &[PointLight],
    quant: &QuantizationSpec,
    d: usize,
    rng: &mut impl Rng,
) -> Result<BuiltMap> {
    if render_lights.len() != map_lights.len() {
        return Err(Error::arg("render and map sides must have the same light count"));
    }
    let n = render_lights.len();

    // Pass 1 (no randomness): attenuations, shades, direct signal.
    let mut a_render = vec![[0.0f64; 3]; n];
    let mut a_map = vec![[0.0f64; 3]; n];
    let mut dirs = vec![Vector3::zeros(); n];
    let mut shades = vec![[0.0f64; 3]; n];
    let mut usable = vec![false; n];
    let mut signal_sum = 0.0;
    let mut signal_count = 0usize;
    for m in 0..n {
        let (l_render, _) = lighting_vector(&render_lights[m], render_point);
        let (l_map, _) = lighting_vector(&map_lights[m], map_point);
        dirs[m] = l_map;
        a_render[m] = attenuation(&render_lights[m], render_point);
        a_map[m] = attenuation(&map_lights[m], map_point);
        shades[m] = shade(normal, &l_render, view, material);
        // A sample is usable when both sides have finite positive
        // attenuation; a zero or infinite factor cannot be compensated.
        usable[m] = (0..3).all(|c| {
            a_render[m][c].is_finite()
                && a_render[m][c] > 0.0
                && a_map[m][c].is_finite()
                && a_map[m][c] > 0.0
        });
        if usable[m] {
            for c in 0..3 {
                signal_sum += a_render[m][c] * shades[m][c];
                signal_count += 1;
            }
        }
    }
    let mean_signal = if signal_count > 0 { signal_sum / signal_count as f64 } else { 0.0 };
    let gi = resolve_self_reflection(gi, mean_signal);

    // Pass 2: per-light shadow coin and self-reflection fraction.
    let mut shadow = vec![1.0f64; n];
    let mut refl = vec![0.0f64; n];
    for m in 0..n {
        if gi.shadow_prob > 0.0 && rng.gen::<f64>() < gi.shadow_prob {
            shadow[m] = 0.0;
        }
        if gi.self_reflection != [0.0; 3] {
            refl[m] = rng.gen::<f64>();
        }
    }

    let mut contributing = 0usize;
    let mut samples = Vec::with_capacity(n);
    match quant.levels {
        None => {
            for m in 0..n {
                if !usable[m] {
                    samples.push(MapSample { dir: dirs[m], j: [0.0; 3], valid: false });
                    continue;
                }
                let mut j = [0.0f64; 3];
                for c in 0..3 {
                    let ratio = a_render[m][c] / a_map[m][c];
                    j[c] = shades[m][c] * ratio * shadow[m]
                        + (gi.ambient[c] + refl[m] * gi.self_reflection[c]) / a_map[m][c];
                }
                if shadow[m] > 0.0 && shades[m].iter().any(|b| *b > 0.0) {
                    contributing += 1;
                }
                samples.push(MapSample { dir: dirs[m], j, valid: true });
            }
        }
        Some(levels) => {
            // Physical staging: sensor intensities, shared exposure, then
            // quantization and compensation.
            let mut raw = vec![[0.0f64; 3]; n];
            let mut exposure = 0.0f64;
            for m in 0..n {
                if !usable[m] {
                    continue;
                }
                for c in 0..3 {
                    raw[m][c] = a_render[m][c] * shades[m][c] * shadow[m]
                        + gi.ambient[c]
                        + refl[m] * gi.self_reflection[c];
                    exposure = exposure.max(raw[m][c]);
                }
            }
            if exposure <= 0.0 {
                // Nothing reached the sensor; caller redraws.
                return build_empty(dirs, view, d).map(|map| BuiltMap { map, contributing: 0 });
            }
            let top = (levels - 1) as f64;
            for m in 0..n {
                if !usable[m] {
                    samples.push(MapSample { dir: dirs[m], j: [0.0; 3], valid: false });
                    continue;
                }
                let mut j = [0.0f64; 3];
                for c in 0..3 {
                    let quantized = (raw[m][c] / exposure * top).round() / top * exposure;
                    j[c] = quantized / a_map[m][c];
                }
                if shadow[m] > 0.0 && shades[m].iter().any(|b| *b > 0.0) {
                    contributing += 1;
                }
                samples.push(MapSample { dir: dirs[m], j, valid: true });
            }
        }
    }

    if samples.iter().all(|s| !s.valid) {
        return build_empty(dirs, view, d).map(|map| BuiltMap { map, contributing: 0 });
    }
    let unit_phi = vec![[1.0f64; 3]; n];
    let map = build_map(&samples, &unit_phi, *view, d)?;
    Ok(BuiltMap { map, contributing })
}

fn build_empty(dirs: Vec<Vector3<f64>>, view: &Vector3<f64>, d: usize) -> Result<ObservationMap> {
    // A placeholder map for discarded records: one zeroed valid sample keeps
    // the builder's shape contract.
    let samples = [MapSample {
        dir: dirs.first().copied().unwrap_or_else(|| Vector3::new(0.0, 0.0, -1.0)),
        j: [0.0; 3],
        valid: true,
    }];
    build_map(&samples, &[[1.0; 3]], *view, d)
}

/// Generate one record: a pure function of (stream, index). Configurations
/// where no light contributes any direct signal (all shadowed or
/// back-facing) are discarded and redrawn from the same RNG stream.
pub fn generate_record(stream: &StreamConfig, index: u64) -> Result<TrainingRecord> {
    if stream.d < 2 {
        return Err(Error::arg("map resolution must be at least 2"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(stream.seed);
    rng.set_stream(index);

    const MAX_REDRAWS: usize = 256;
    for _ in 0..MAX_REDRAWS {
        let cfg = sample_config(&mut rng, &stream.mode, stream.family, stream.gi);
        let perturbed = perturb(cfg.z, &cfg.lights, &stream.perturb, &mut rng);
        let map_point = cfg.point * (perturbed.z / cfg.z);
        let (render_lights, map_lights) = split_sides(stream.order, &cfg.lights, &perturbed);
        let built = build_training_map(
            &cfg.point,
            &cfg.normal,
            &cfg.view,
            &cfg.material,
            &cfg.gi,
            render_lights,
            &map_point,
            map_lights,
            &stream.quant,
            stream.d,
            &mut rng,
        )?;
        if built.contributing == 0 {
            continue;
        }
        return Ok(TrainingRecord {
            map: built.map,
            target: cfg.normal,
            z: cfg.z,
            f_norm: cfg.f_norm.0,
            light_count: cfg.lights.len(),
        });
    }
    Err(Error::domain(format!(
        "no usable configuration after {MAX_REDRAWS} redraws at record {index}"
    )))
}

/// Generate `count` consecutive records starting at `start`, in parallel.
/// Output order and content depend only on (stream, start, count).
pub fn record_stream(stream: &StreamConfig, start: u64, count: usize) -> Result<Vec<TrainingRecord>> {
    (0..count as u64)
        .into_par_iter()
        .map(|k| generate_record(stream, start + k))
        .collect()
}
