//! Photometric light-rig calibration against planar targets.
//!
//! A matte plane of known pose and fixed diffuse albedo is photographed once
//! per LED. Each observed pixel then pins one equation
//! `i = phi * rho * max(0, L.N) * cos^mu(angle to axis) / dist^2`
//! per channel, and the rig parameters (position, brightness, principal
//! direction, falloff exponent per LED) are fit by full-batch Adam on a
//! Huber-smoothed L1 residual with analytic gradients.
//!
//! The target albedo `rho` is *fixed*, not estimated: scaling `rho` by k and
//! every brightness by 1/k leaves the model identical, so the data cannot
//! determine both (see `gauge_scaling_is_invisible`).

use nalgebra::{Matrix3, Vector3};

use crate::error::{Error, Result};
use crate::geometry::CameraIntrinsics;
use crate::lighting::{geometric_factor, lighting_vector, PointLight};
use crate::regressor::Adam;

/// Diffuse albedo assumed for the calibration target.
pub const TARGET_RHO: f64 = 0.5;

/// Parameters of one light packed for the optimizer:
/// position (3), brightness (3), direction (3), falloff (1).
const PER_LIGHT: usize = 10;

/// One surface point of a calibration target with its measured intensities.
#[derive(Debug, Clone)]
pub struct CalibrationSample {
    /// Point on the target, camera frame.
    pub point: Vector3<f64>,
    /// Unit normal of the target at that point (camera-facing).
    pub normal: Vector3<f64>,
    /// Measured RGB per light, in light order.
    pub intensity: Vec<[f64; 3]>,
}

/// A calibration data set: samples plus the fixed target albedo.
#[derive(Debug, Clone)]
pub struct CalibrationProblem {
    pub samples: Vec<CalibrationSample>,
    pub rho: f64,
}

/// Optimizer settings for [`calibrate`].
#[derive(Debug, Clone)]
pub struct CalibConfig {
    pub iters: usize,
    pub lr: f64,
    /// Huber smoothing scale: |r| is replaced by sqrt(r^2 + delta^2) - delta.
    pub huber_delta: f64,
    /// The learning rate drops to a tenth after this fraction of the run,
    /// for a clean final descent into the basin.
    pub fine_phase: f64,
    /// Record the loss every this many iterations (plus the final one).
    pub record_every: usize,
}

impl Default for CalibConfig {
    fn default() -> Self {
        CalibConfig {
            iters: 2000,
            lr: 1e-3,
            huber_delta: 1e-4,
            fine_phase: 0.7,
            record_every: 50,
        }
    }
}

/// Result of a calibration run.
#[derive(Debug, Clone)]
pub struct CalibrationOutcome {
    pub lights: Vec<PointLight>,
    /// Loss history at `record_every` strides, ending with the final loss.
    pub losses: Vec<f64>,
    /// Mean absolute residual of the returned lights over all equations.
    pub mean_abs_residual: f64,
    pub warnings: Vec<String>,
}

/// Model intensity of one light at a sample, per channel.
fn model_intensity(
    light: &PointLight,
    rho: f64,
    point: &Vector3<f64>,
    normal: &Vector3<f64>,
) -> [f64; 3] {
    let (lhat, _) = lighting_vector(light, point);
    let lam = lhat.dot(normal).max(0.0);
    let g = geometric_factor(light, point);
    if !g.is_finite() {
        return [0.0; 3];
    }
    [
        light.phi[0] * rho * lam * g,
        light.phi[1] * rho * lam * g,
        light.phi[2] * rho * lam * g,
    ]
}

impl CalibrationProblem {
    fn validate(&self, light_count: usize) -> Result<()> {
        if self.samples.is_empty() {
            return Err(Error::arg("calibration problem has no samples"));
        }
        if !(self.rho.is_finite() && self.rho > 0.0) {
            return Err(Error::arg("target albedo must be positive"));
        }
        for s in &self.samples {
            if s.intensity.len() != light_count {
                return Err(Error::arg(format!(
                    "sample has {} intensities but there are {} lights",
                    s.intensity.len(),
                    light_count
                )));
            }
        }
        Ok(())
    }

    /// Number of distinct target poses among the samples (by normal).
    pub fn distinct_poses(&self) -> usize {
        let mut normals: Vec<Vector3<f64>> = Vec::new();
        for s in &self.samples {
            if !normals.iter().any(|n| (n - s.normal).norm() < 1e-9) {
                normals.push(s.normal);
            }
        }
        normals.len()
    }

    /// Huber-smoothed mean residual of `lights` on this problem.
    pub fn loss(&self, lights: &[PointLight], delta: f64) -> f64 {
        let mut acc = 0.0;
        for s in &self.samples {
            for (m, light) in lights.iter().enumerate() {
                let model = model_intensity(light, self.rho, &s.point, &s.normal);
                for c in 0..3 {
                    let r = model[c] - s.intensity[m][c];
                    acc += (r * r + delta * delta).sqrt() - delta;
                }
            }
        }
        acc / (self.samples.len() * lights.len() * 3) as f64
    }

    /// Mean absolute residual (plain L1) of `lights` on this problem.
    pub fn mean_abs_residual(&self, lights: &[PointLight]) -> f64 {
        let mut acc = 0.0;
        for s in &self.samples {
            for (m, light) in lights.iter().enumerate() {
                let model = model_intensity(light, self.rho, &s.point, &s.normal);
                for c in 0..3 {
                    acc += (model[c] - s.intensity[m][c]).abs();
                }
            }
        }
        acc / (self.samples.len() * lights.len() * 3) as f64
    }

    /// Loss plus its gradient with respect to every light's packed
    /// parameters. Direction gradients are projected onto the unit sphere's
    /// tangent plane, matching the renormalize-after-step update.
    pub fn loss_and_grad(&self, lights: &[PointLight], delta: f64) -> (f64, Vec<f64>) {
        let mut grad = vec![0.0f64; lights.len() * PER_LIGHT];
        let mut acc = 0.0;
        for s in &self.samples {
            for (m, light) in lights.iter().enumerate() {
                let u = light.position - s.point;
                let dist2 = u.norm_squared();
                if dist2 < 1e-18 {
                    continue;
                }
                let dist = dist2.sqrt();
                let lhat = u / dist;
                let lam = lhat.dot(&s.normal).max(0.0);
                let s_hat = -lhat;
                let raw_cos = s_hat.dot(&light.direction);
                let cos = raw_cos.max(0.0);
                let q = cos.powf(light.mu) / dist2; // geometric factor

                // Position derivatives of the factors, zero inside clamps.
                let dlam_dp = if lam > 0.0 {
                    (s.normal - lhat * lhat.dot(&s.normal)) / dist
                } else {
                    Vector3::zeros()
                };
                let proj = Matrix3::identity() - lhat * lhat.transpose();
                let (dq_dp, dq_ddir, dq_dmu);
                if raw_cos > 0.0 {
                    let cpm1 = if light.mu == 0.0 {
                        0.0
                    } else {
                        light.mu * cos.powf(light.mu - 1.0)
                    };
                    let dcos_dp = -(proj * light.direction) / dist;
                    dq_dp = dcos_dp * (cpm1 / dist2) + lhat * (-2.0 * cos.powf(light.mu) / (dist2 * dist));
                    dq_ddir = s_hat * (cpm1 / dist2);
                    dq_dmu = q * cos.ln();
                } else if light.mu == 0.0 {
                    // Isotropic: q = 1/dist^2 regardless of the clamp.
                    dq_dp = lhat * (-2.0 / (dist2 * dist));
                    dq_ddir = Vector3::zeros();
                    dq_dmu = 0.0;
                } else {
                    dq_dp = Vector3::zeros();
                    dq_ddir = Vector3::zeros();
                    dq_dmu = 0.0;
                }

                for c in 0..3 {
                    let k = light.phi[c] * self.rho;
                    let model = k * lam * q;
                    let r = model - s.intensity[m][c];
                    acc += (r * r + delta * delta).sqrt() - delta;
                    let w = r / (r * r + delta * delta).sqrt();

                    let g = &mut grad[m * PER_LIGHT..(m + 1) * PER_LIGHT];
                    let dp = (dlam_dp * q + dq_dp * lam) * (w * k);
                    g[0] += dp.x;
                    g[1] += dp.y;
                    g[2] += dp.z;
                    g[3 + c] += w * self.rho * lam * q;
                    let dd = dq_ddir * (w * k * lam);
                    g[6] += dd.x;
                    g[7] += dd.y;
                    g[8] += dd.z;
                    g[9] += w * k * lam * dq_dmu;
                }
            }
        }
        let n = (self.samples.len() * lights.len() * 3) as f64;
        for v in &mut grad {
            *v /= n;
        }
        // Tangent projection of each direction gradient.
        for (m, light) in lights.iter().enumerate() {
            let g = &mut grad[m * PER_LIGHT + 6..m * PER_LIGHT + 9];
            let gd = Vector3::new(g[0], g[1], g[2]);
            let t = gd - light.direction * light.direction.dot(&gd);
            g[0] = t.x;
            g[1] = t.y;
            g[2] = t.z;
        }
        (acc / n, grad)
    }
}

fn pack(lights: &[PointLight]) -> Vec<f64> {
    let mut p = Vec::with_capacity(lights.len() * PER_LIGHT);
    for l in lights {
        p.extend_from_slice(&[l.position.x, l.position.y, l.position.z]);
        p.extend_from_slice(&l.phi);
        p.extend_from_slice(&[l.direction.x, l.direction.y, l.direction.z]);
        p.push(l.mu);
    }
    p
}

/// Rebuild lights from packed parameters, normalizing directions and
/// clamping brightness and falloff into their valid ranges.
fn unpack(params: &[f64], reference: &[PointLight]) -> Vec<PointLight> {
    reference
        .iter()
        .enumerate()
        .map(|(m, old)| {
            let p = &params[m * PER_LIGHT..(m + 1) * PER_LIGHT];
            let dir = Vector3::new(p[6], p[7], p[8]);
            let dir = if dir.norm() > 1e-9 {
                dir / dir.norm()
            } else {
                old.direction
            };
            PointLight {
                position: Vector3::new(p[0], p[1], p[2]),
                phi: [p[3].max(1e-6), p[4].max(1e-6), p[5].max(1e-6)],
                direction: dir,
                mu: p[9].max(0.0),
            }
        })
        .collect()
}

/// Fit the light parameters to a calibration problem starting from
/// `initial`. Full-batch Adam; directions are renormalized and constraints
/// re-clamped after every step.
pub fn calibrate(
    problem: &CalibrationProblem,
    initial: &[PointLight],
    cfg: &CalibConfig,
) -> Result<CalibrationOutcome> {
    if initial.is_empty() {
        return Err(Error::arg("calibration needs at least one light"));
    }
    problem.validate(initial.len())?;
    if cfg.iters == 0 {
        return Err(Error::arg("calibration needs at least one iteration"));
    }

    let mut warnings = Vec::new();
    if problem.distinct_poses() < 2 {
        warnings.push(
            "single target pose poorly constrains light positions; capture several tilted poses"
                .to_string(),
        );
    }

    let mut params = pack(initial);
    let mut lights = initial.to_vec();
    let mut adam = Adam::with_shapes(&[params.len()], cfg.lr);
    let fine_at = ((cfg.iters as f64) * cfg.fine_phase) as usize;
    let mut losses = Vec::new();
    let mut last_loss = f64::INFINITY;
    for it in 0..cfg.iters {
        if it == fine_at {
            adam.lr = cfg.lr * 0.1;
        }
        let (loss, grad) = problem.loss_and_grad(&lights, cfg.huber_delta);
        if it % cfg.record_every.max(1) == 0 {
            losses.push(loss);
        }
        last_loss = loss;
        let mut views: Vec<&mut [f64]> = vec![&mut params[..]];
        adam.step_slices(&mut views, &[&grad[..]]);
        lights = unpack(&params, &lights);
        if loss < 1e-14 {
            break;
        }
    }
    losses.push(last_loss);

    let mean_abs_residual = problem.mean_abs_residual(&lights);
    Ok(CalibrationOutcome {
        lights,
        losses,
        mean_abs_residual,
        warnings,
    })
}

/// One planar target pose: the plane passes through `(0, 0, center_depth)`
/// with the given (camera-facing) unit normal.
#[derive(Debug, Clone, Copy)]
pub struct PlanePose {
    pub normal: Vector3<f64>,
    pub center_depth: f64,
}

impl PlanePose {
    /// Pose tilted by the given slopes: normal along `(tx, ty, -1)`.
    pub fn tilted(tx: f64, ty: f64, center_depth: f64) -> Self {
        PlanePose {
            normal: Vector3::new(tx, ty, -1.0).normalize(),
            center_depth,
        }
    }
}

/// Build a noise-free calibration problem by evaluating the forward model
/// over a pixel grid (every `stride` pixels) of each plane pose.
pub fn synthetic_plane_problem(
    cam: &CameraIntrinsics,
    poses: &[PlanePose],
    lights: &[PointLight],
    rho: f64,
    stride: usize,
) -> Result<CalibrationProblem> {
    if poses.is_empty() || lights.is_empty() || stride == 0 {
        return Err(Error::arg(
            "synthetic calibration needs poses, lights, and a positive stride",
        ));
    }
    let mut samples = Vec::new();
    for pose in poses {
        if pose.normal.z >= 0.0 || !(pose.center_depth > 0.0) {
            return Err(Error::arg(
                "plane poses must face the camera at positive depth",
            ));
        }
        let anchor = Vector3::new(0.0, 0.0, pose.center_depth);
        let mut v = stride / 2;
        while v < cam.height {
            let mut u = stride / 2;
            while u < cam.width {
                let ray = Vector3::new(
                    (u as f64 - cam.cx) / cam.fx,
                    (v as f64 - cam.cy) / cam.fy,
                    1.0,
                );
                let denom = pose.normal.dot(&ray);
                if denom.abs() > 1e-9 {
                    let t = pose.normal.dot(&anchor) / denom;
                    if t > 1e-3 {
                        let point = ray * t;
                        let intensity = lights
                            .iter()
                            .map(|l| model_intensity(l, rho, &point, &pose.normal))
                            .collect();
                        samples.push(CalibrationSample {
                            point,
                            normal: pose.normal,
                            intensity,
                        });
                    }
                }
                u += stride;
            }
            v += stride;
        }
    }
    Ok(CalibrationProblem { samples, rho })
}
