//! Normal regression: angular loss, a closed-form Lambertian solver, and a
//! compact convolutional network (`net`, `train`).

mod net;
mod train;

pub use net::{CompactNet, NetGrads, TrainingEcho};
pub use train::{train, Adam, TrainConfig, TrainReport};

use nalgebra::{Matrix3, Vector3};

use crate::error::{Error, Result};
use crate::obsmap::ObservationMap;
use crate::sampler::{generate_record, StreamConfig};

/// Anything that maps an observation map to a unit surface normal.
pub trait NormalRegressor: Sync {
    /// Predict a unit normal with non-positive z-component.
    fn predict(&self, map: &ObservationMap) -> Result<Vector3<f64>>;
}

/// Angle in radians between two nonzero vectors, in `[0, pi]`.
pub fn angular_loss(target: &Vector3<f64>, pred: &Vector3<f64>) -> f64 {
    let s = target.cross(pred).norm();
    let c = target.dot(pred);
    s.atan2(c)
}

/// Gradient of [`angular_loss`] with respect to `pred`.
///
/// Valid for non-unit vectors. Within about 1 degree of exact alignment or
/// opposition the exact gradient is numerically unstable (the cross product
/// vanishes), so the gradient of `1 - cos` between the unit directions is
/// used instead; it points the same way and stays finite.
pub fn angular_loss_grad(target: &Vector3<f64>, pred: &Vector3<f64>) -> Vector3<f64> {
    let cross = target.cross(pred);
    let s = cross.norm();
    let c = target.dot(pred);
    let theta = s.atan2(c);
    let guard = 1.0f64.to_radians();
    if theta < guard || theta > std::f64::consts::PI - guard {
        // d(1 - t.n / (|t||n|)) / dn, i.e. descent toward/away from alignment.
        let tn = target.norm();
        let pn = pred.norm();
        if tn < 1e-300 || pn < 1e-300 {
            return Vector3::zeros();
        }
        let tu = target / tn;
        let pu = pred / pn;
        return -(tu - pu * tu.dot(&pu)) / pn;
    }
    let t2 = target.norm_squared();
    let ds = (pred * t2 - target * c) / s;
    (ds * c - target * s) / (s * s + c * c)
}

/// Result of the closed-form Lambertian fit.
#[derive(Debug, Clone)]
pub struct LambertianFit {
    /// Unit normal, z-component <= 0.
    pub normal: Vector3<f64>,
    /// Per-channel diffuse albedo estimate.
    pub albedo: [f64; 3],
    /// Number of cells that survived the robustness filters.
    pub used: usize,
}

const SHADOW_FRACTION: f64 = 0.02;
const HIGHLIGHT_FRACTION: f64 = 0.1;
const HIGHLIGHT_MIN_KEEP: usize = 6;
const RIM_LIMIT_SQ: f64 = 0.9;

/// Least-squares Lambertian normal from an observation map.
///
/// Each occupied cell contributes one gray-level sample at the direction of
/// its center. Cells too close to the horizon are dropped (their z-component
/// is poorly conditioned), as are near-black cells (shadow) and, when more
/// than [`HIGHLIGHT_MIN_KEEP`] samples remain, the brightest tenth
/// (specular highlights). Cells are weighted by the squared z-component of
/// their direction: a cell center's (x, y) is known only to half-cell
/// accuracy and the z error that induces grows as 1/|z| toward the horizon,
/// so 1/(1 + (dz/dr)^2) = z^2 is the inverse of the direction-error
/// variance. The scaled normal solves the weighted 3x3 normal equations;
/// a rank-deficient system is a domain error. The recovered direction is
/// invariant to uniform scaling of the map values.
pub fn lambertian_solve(map: &ObservationMap) -> Result<LambertianFit> {
    let mut dirs: Vec<Vector3<f64>> = Vec::new();
    let mut gray: Vec<f64> = Vec::new();
    let mut rgb: Vec<[f64; 3]> = Vec::new();
    let mut counts: Vec<f64> = Vec::new();
    let h2_12 = (2.0 / map.d as f64).powi(2) / 12.0;
    for (ix, iy, value) in map.occupied_cells() {
        let (x, y) = map.cell_center(ix, iy);
        let r2 = x * x + y * y;
        if r2 > RIM_LIMIT_SQ {
            continue;
        }
        let az = (1.0 - r2).sqrt();
        // Expected z of a direction uniform over the cell, not the center z:
        // the sphere constraint is convex, so in-cell samples average
        // shallower (second-order Jensen correction).
        let z = -az + (h2_12 / 2.0) * (2.0 / az + r2 / (az * az * az));
        dirs.push(Vector3::new(x, y, z));
        gray.push((value[0] + value[1] + value[2]) / 3.0);
        rgb.push(value);
        counts.push(map.count(ix, iy).max(1) as f64);
    }
    let max_gray = gray.iter().cloned().fold(0.0f64, f64::max);
    if max_gray <= 0.0 {
        return Err(Error::domain("lambertian solve: no usable signal"));
    }

    let mut keep: Vec<usize> = (0..gray.len())
        .filter(|&i| gray[i] >= SHADOW_FRACTION * max_gray)
        .collect();
    if keep.len() > HIGHLIGHT_MIN_KEEP {
        keep.sort_by(|&a, &b| gray[a].total_cmp(&gray[b]));
        let drop = ((keep.len() as f64) * HIGHLIGHT_FRACTION).ceil() as usize;
        keep.truncate(keep.len() - drop);
    }
    if keep.len() < 3 {
        return Err(Error::domain(
            "lambertian solve: fewer than 3 samples after filtering",
        ));
    }

    // In-cell covariance of the true direction around the cell center:
    // (x, y) are uniform over the cell, z follows through the sphere
    // constraint with slope (x/|z|, y/|z|); averaging m samples in one cell
    // shrinks it by m.
    let cov = |i: usize| -> Matrix3<f64> {
        let (x, y, az) = (dirs[i].x, dirs[i].y, dirs[i].z.abs());
        let (sx, sy) = (x / az, y / az);
        Matrix3::new(1.0, 0.0, sx, 0.0, 1.0, sy, sx, sy, sx * sx + sy * sy)
            * (h2_12 / counts[i])
    };

    // Weighted least squares with the errors-in-variables correction: cell
    // centers are a noisy reading of the true directions, which biases the
    // plain normal equations (attenuation), so the accumulated noise
    // covariance is subtracted. Falls back to the uncorrected system if the
    // correction breaks positive definiteness (tiny or pathological
    // direction spreads).
    let solve_weighted = |weights: Option<&[f64]>| -> Result<Vector3<f64>> {
        let mut ata = Matrix3::<f64>::zeros();
        let mut atb = Vector3::<f64>::zeros();
        let mut noise = Matrix3::<f64>::zeros();
        for (k, &i) in keep.iter().enumerate() {
            let w = weights.map_or(1.0, |w| w[k]);
            ata += dirs[i] * dirs[i].transpose() * w;
            atb += dirs[i] * (gray[i] * w);
            noise += cov(i) * w;
        }
        // Directions are unit vectors, so trace(ata) is the total weight and
        // the relative determinant is a scale-free conditioning measure.
        let scale = ata.trace() / 3.0;
        let solve_spd = |m: &Matrix3<f64>| -> Option<Vector3<f64>> {
            if m.determinant() <= 1e-12 * scale * scale * scale {
                return None;
            }
            m.cholesky().map(|ch| ch.solve(&atb))
        };
        let scaled = solve_spd(&(ata - noise))
            .or_else(|| solve_spd(&ata))
            .ok_or_else(|| Error::domain("lambertian solve: rank-deficient light directions"))?;
        let norm = scaled.norm();
        if norm < 1e-12 || !norm.is_finite() {
            return Err(Error::domain("lambertian solve: degenerate solution"));
        }
        Ok(orient_camera_facing(scaled / norm))
    };

    // Pass 1 estimates the normal; pass 2 reweights each cell by the inverse
    // of its residual variance, which is the direction noise projected onto
    // the normal. Pass 1's answer stands if reweighting degenerates.
    let first = solve_weighted(None)?;
    let weights: Vec<f64> = keep
        .iter()
        .map(|&i| {
            let var = (first.dot(&(cov(i) * first))).max(h2_12 * 1e-2);
            1.0 / var
        })
        .collect();
    let normal = solve_weighted(Some(&weights)).unwrap_or(first);

    // Per-channel albedo refit with the direction fixed.
    let mut albedo = [0.0f64; 3];
    let mut denom = 0.0;
    for &i in &keep {
        let ln = dirs[i].dot(&normal).max(0.0);
        denom += ln * ln;
        for c in 0..3 {
            albedo[c] += rgb[i][c] * ln;
        }
    }
    if denom > 0.0 {
        for a in &mut albedo {
            *a /= denom;
        }
    }
    Ok(LambertianFit {
        normal,
        albedo,
        used: keep.len(),
    })
}

/// Closed-form Lambertian baseline as a [`NormalRegressor`].
#[derive(Debug, Clone, Copy, Default)]
pub struct LambertianSolver;

impl NormalRegressor for LambertianSolver {
    fn predict(&self, map: &ObservationMap) -> Result<Vector3<f64>> {
        Ok(lambertian_solve(map)?.normal)
    }
}

/// Enforce the camera-facing convention on a unit estimate.
///
/// A positive z-component is clamped to the horizon and the vector is
/// renormalized. Outright negation would be catastrophic for nearly
/// edge-on normals, where estimation noise can push z infinitesimally
/// positive: negating then reverses the (accurate) x and y components.
/// A degenerate clamp (estimate along +z) falls back to straight-on.
pub fn orient_camera_facing(v: Vector3<f64>) -> Vector3<f64> {
    if v.z <= 0.0 {
        return v;
    }
    let planar = Vector3::new(v.x, v.y, 0.0);
    let n = planar.norm();
    if n < 1e-12 {
        Vector3::new(0.0, 0.0, -1.0)
    } else {
        planar / n
    }
}

/// Predict one normal per map; any per-map failure fails the batch.
pub fn predict_batch(
    regressor: &dyn NormalRegressor,
    maps: &[ObservationMap],
) -> Result<Vec<Vector3<f64>>> {
    maps.iter().map(|m| regressor.predict(m)).collect()
}

/// Accuracy of a regressor over a window of a record stream.
#[derive(Debug, Clone, Copy)]
pub struct EvalStats {
    /// Mean angular error in degrees over successful predictions.
    pub mean_deg: f64,
    /// Records with a successful prediction.
    pub evaluated: usize,
    /// Records where the regressor returned an error.
    pub failed: usize,
}

/// Mean angular error of `regressor` on records `start..start + count`.
pub fn evaluate_stream(
    regressor: &dyn NormalRegressor,
    stream: &StreamConfig,
    start: u64,
    count: usize,
) -> Result<EvalStats> {
    let mut sum = 0.0;
    let mut evaluated = 0usize;
    let mut failed = 0usize;
    for k in 0..count as u64 {
        let record = generate_record(stream, start + k)?;
        match regressor.predict(&record.map) {
            Ok(pred) => {
                sum += angular_loss(&record.target, &pred).to_degrees();
                evaluated += 1;
            }
            Err(_) => failed += 1,
        }
    }
    if evaluated == 0 {
        return Err(Error::domain("evaluation window produced no predictions"));
    }
    Ok(EvalStats {
        mean_deg: sum / evaluated as f64,
        evaluated,
        failed,
    })
}
