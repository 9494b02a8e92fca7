//! Iterative reconstruction: an image stack becomes depth and normals.
//!
//! Near a point-light rig the per-pixel attenuation depends on the unknown
//! geometry, so the loop alternates: divide the images by the attenuation
//! implied by the current depth, regress per-pixel normals from the
//! resulting observation maps, and integrate the normal field back into
//! depth. A flat plane at the expected working distance seeds the loop; the
//! geometry-attenuation coupling usually settles within two rounds.
//!
//! [`naive_reconstruct`] is the distant-light baseline: raw intensities and
//! one fixed direction per LED (taken from the mask centroid), no
//! compensation, a single pass. Near a rig it is systematically wrong;
//! moved far away the two agree, which is a useful sanity probe for the
//! whole stack.

use nalgebra::Vector3;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::geometry::{back_project, flat_plane_init, viewing_vector, DepthMap, NormalMap};
use crate::integrator::{integrate, normals_to_gradients, IntegratorConfig};
use crate::io::Dataset;
use crate::lighting::{geometric_factor, lighting_vector};
use crate::obsmap::{build_map, MapSample};
use crate::regressor::{angular_loss, NormalRegressor};

/// Settings for [`reconstruct`] and [`naive_reconstruct`].
#[derive(Debug, Clone)]
pub struct ReconstructionConfig {
    /// Compensate/regress/integrate rounds.
    pub iterations: usize,
    /// Observation-map resolution (must match the regressor's expectation
    /// for network regressors).
    pub d: usize,
    /// Depth of the flat initialization, meters. Set this to the expected
    /// working distance of the capture.
    pub mean_distance: f64,
    pub integrator: IntegratorConfig,
}

impl Default for ReconstructionConfig {
    fn default() -> Self {
        ReconstructionConfig {
            iterations: 2,
            d: 32,
            mean_distance: 0.30,
            integrator: IntegratorConfig::default(),
        }
    }
}

/// State after one reconstruction round.
#[derive(Debug, Clone)]
pub struct IterationSnapshot {
    /// Depth after this round's integration.
    pub depth: DepthMap,
    /// Normals regressed during this round.
    pub normals: NormalMap,
    /// Mean angular difference to the previous round's normals, degrees.
    /// `None` on the first round.
    pub normal_change_deg: Option<f64>,
    /// Pixels whose regression failed this round (they are masked out).
    pub regression_failures: usize,
}

/// Final maps plus the per-round history.
#[derive(Debug, Clone)]
pub struct Reconstruction {
    pub depth: DepthMap,
    pub normals: NormalMap,
    pub history: Vec<IterationSnapshot>,
}

/// How per-light samples are formed for the regressor.
enum SampleModel<'a> {
    /// Back-project each pixel, divide by the geometric attenuation of each
    /// light at that point, use the true per-pixel light direction.
    NearField,
    /// One fixed direction per light, raw intensities.
    FixedDirections(&'a [Vector3<f64>]),
}

/// Regress a normal map from the dataset under the given depth hypothesis.
fn regress_normals(
    dataset: &Dataset,
    regressor: &dyn NormalRegressor,
    depth: &DepthMap,
    d: usize,
    model: &SampleModel,
) -> Result<(NormalMap, usize)> {
    let cam = &dataset.calib.camera;
    let lights = &dataset.calib.lights;
    let phi: Vec<[f64; 3]> = lights.iter().map(|l| l.phi).collect();
    let (w, h) = (depth.width, depth.height);

    let rows: Vec<Result<(Vec<Option<Vector3<f64>>>, usize)>> = (0..h)
        .into_par_iter()
        .map(|v| {
            let mut row: Vec<Option<Vector3<f64>>> = vec![None; w];
            let mut failed = 0usize;
            let mut samples = Vec::with_capacity(lights.len());
            for u in 0..w {
                let idx = v * w + u;
                if !depth.mask[idx] {
                    continue;
                }
                samples.clear();
                match model {
                    SampleModel::NearField => {
                        let x = back_project(cam, u as f64, v as f64, depth.data[idx]);
                        for (m, light) in lights.iter().enumerate() {
                            let (dir, _) = lighting_vector(light, &x);
                            let g = geometric_factor(light, &x);
                            let valid = g.is_finite() && g > 0.0;
                            let i = dataset.images[m].get(u, v);
                            let j = if valid {
                                [i[0] / g, i[1] / g, i[2] / g]
                            } else {
                                [0.0; 3]
                            };
                            samples.push(MapSample { dir, j, valid });
                        }
                    }
                    SampleModel::FixedDirections(dirs) => {
                        for (m, _) in lights.iter().enumerate() {
                            samples.push(MapSample {
                                dir: dirs[m],
                                j: dataset.images[m].get(u, v),
                                valid: true,
                            });
                        }
                    }
                }
                let map = build_map(&samples, &phi, viewing_vector(cam, u as f64, v as f64), d)?;
                match regressor.predict(&map) {
                    Ok(n) => row[u] = Some(n),
                    Err(_) => failed += 1,
                }
            }
            Ok((row, failed))
        })
        .collect();

    let mut normals = NormalMap::new(w, h);
    let mut failures = 0usize;
    for (v, row) in rows.into_iter().enumerate() {
        let (row, failed) = row?;
        failures += failed;
        for (u, n) in row.into_iter().enumerate() {
            if let Some(n) = n {
                normals.set(u, v, n);
            }
        }
    }
    Ok((normals, failures))
}

fn validate(dataset: &Dataset, cfg: &ReconstructionConfig) -> Result<()> {
    if cfg.iterations == 0 {
        return Err(Error::arg("reconstruction needs at least one iteration"));
    }
    if !(cfg.mean_distance.is_finite() && cfg.mean_distance > 0.0) {
        return Err(Error::arg("mean distance must be positive"));
    }
    if dataset.images.is_empty() {
        return Err(Error::arg("dataset has no images"));
    }
    let cam = &dataset.calib.camera;
    if cam.width != dataset.width || cam.height != dataset.height {
        return Err(Error::arg("camera intrinsics do not match the image size"));
    }
    Ok(())
}

/// Run the iterative loop on a captured dataset.
///
/// Each round compensates with the latest depth, regresses normals, and
/// integrates; rounds after the first warm-start the integration from the
/// previous round's depth so they refine it rather than re-solve from
/// scratch. Pixels whose regression fails in a round are excluded from that
/// round's integration; the depth mask can therefore shrink across rounds.
pub fn reconstruct(
    dataset: &Dataset,
    regressor: &dyn NormalRegressor,
    cfg: &ReconstructionConfig,
) -> Result<Reconstruction> {
    validate(dataset, cfg)?;
    let mut depth = flat_plane_init(
        &dataset.mask,
        dataset.width,
        dataset.height,
        cfg.mean_distance,
    )?;
    let mut history: Vec<IterationSnapshot> = Vec::with_capacity(cfg.iterations);
    for round in 0..cfg.iterations {
        let (normals, regression_failures) =
            regress_normals(dataset, regressor, &depth, cfg.d, &SampleModel::NearField)?;
        let field = normals_to_gradients(&dataset.calib.camera, &normals);
        // Later rounds refine the previous round's depth rather than
        // re-solving the field from scratch.
        let icfg = IntegratorConfig {
            warm_start: round > 0,
            ..cfg.integrator.clone()
        };
        let (new_depth, _) = integrate(&field, &depth, &icfg)?;
        let normal_change_deg = history
            .last()
            .and_then(|prev| mean_normal_change_deg(&prev.normals, &normals));
        history.push(IterationSnapshot {
            depth: new_depth.clone(),
            normals,
            normal_change_deg,
            regression_failures,
        });
        depth = new_depth;
    }
    let last = history.last().expect("at least one iteration ran");
    Ok(Reconstruction {
        depth,
        normals: last.normals.clone(),
        history,
    })
}

/// Distant-light baseline: no compensation, one fixed direction per LED
/// (from the light to the mask centroid at the working distance), one pass.
pub fn naive_reconstruct(
    dataset: &Dataset,
    regressor: &dyn NormalRegressor,
    cfg: &ReconstructionConfig,
) -> Result<Reconstruction> {
    validate(dataset, cfg)?;
    let depth = flat_plane_init(
        &dataset.mask,
        dataset.width,
        dataset.height,
        cfg.mean_distance,
    )?;
    let (cu, cv) = depth.mask_centroid()?;
    let anchor = back_project(&dataset.calib.camera, cu, cv, cfg.mean_distance);
    let dirs: Vec<Vector3<f64>> = dataset
        .calib
        .lights
        .iter()
        .map(|l| lighting_vector(l, &anchor).0)
        .collect();
    let (normals, regression_failures) = regress_normals(
        dataset,
        regressor,
        &depth,
        cfg.d,
        &SampleModel::FixedDirections(&dirs),
    )?;
    let field = normals_to_gradients(&dataset.calib.camera, &normals);
    let (new_depth, _) = integrate(&field, &depth, &cfg.integrator)?;
    let snapshot = IterationSnapshot {
        depth: new_depth.clone(),
        normals: normals.clone(),
        normal_change_deg: None,
        regression_failures,
    };
    Ok(Reconstruction {
        depth: new_depth,
        normals,
        history: vec![snapshot],
    })
}

/// Mean angular difference between two normal maps over their common mask,
/// in degrees. `None` when the masks do not overlap.
pub fn mean_normal_change_deg(a: &NormalMap, b: &NormalMap) -> Option<f64> {
    if a.width != b.width || a.height != b.height {
        return None;
    }
    let mut acc = 0.0;
    let mut n = 0usize;
    for idx in 0..a.data.len() {
        if a.mask[idx] && b.mask[idx] {
            acc += angular_loss(&a.data[idx], &b.data[idx]);
            n += 1;
        }
    }
    if n == 0 {
        None
    } else {
        Some((acc / n as f64).to_degrees())
    }
}

/// Reconstruction quality against ground truth.
#[derive(Debug, Clone, Copy)]
pub struct Metrics {
    /// Mean angular normal error, degrees.
    pub mae_deg: f64,
    /// Mean absolute depth error, millimeters.
    pub mze_mm: f64,
    /// Pixels the means were taken over.
    pub evaluated: usize,
}

/// Shrink a mask by one pixel: a pixel survives only if it and its four
/// neighbors are set (image borders count as unset).
pub fn erode_mask(mask: &[bool], width: usize, height: usize) -> Vec<bool> {
    let mut out = vec![false; mask.len()];
    for v in 0..height {
        for u in 0..width {
            let idx = v * width + u;
            out[idx] = mask[idx]
                && u > 0
                && u + 1 < width
                && v > 0
                && v + 1 < height
                && mask[idx - 1]
                && mask[idx + 1]
                && mask[idx - width]
                && mask[idx + width];
        }
    }
    out
}

/// Compare a reconstruction against ground truth over the pixels valid in
/// all four maps, after eroding that common mask `interior` times. Erosion
/// keeps boundary pixels — where one-sided differences and grazing normals
/// dominate any method's error — out of the average.
pub fn evaluate(
    depth: &DepthMap,
    normals: &NormalMap,
    gt_depth: &DepthMap,
    gt_normals: &NormalMap,
    interior: usize,
) -> Result<Metrics> {
    let (w, h) = (depth.width, depth.height);
    if [gt_depth.width, normals.width, gt_normals.width] != [w, w, w]
        || [gt_depth.height, normals.height, gt_normals.height] != [h, h, h]
    {
        return Err(Error::arg("evaluation maps disagree in size"));
    }
    let mut mask: Vec<bool> = (0..w * h)
        .map(|i| depth.mask[i] && normals.mask[i] && gt_depth.mask[i] && gt_normals.mask[i])
        .collect();
    for _ in 0..interior {
        mask = erode_mask(&mask, w, h);
    }
    let mut angle = 0.0;
    let mut dz = 0.0;
    let mut n = 0usize;
    for idx in 0..w * h {
        if mask[idx] {
            angle += angular_loss(&gt_normals.data[idx], &normals.data[idx]);
            dz += (depth.data[idx] - gt_depth.data[idx]).abs();
            n += 1;
        }
    }
    if n == 0 {
        return Err(Error::domain("no pixels left to evaluate"));
    }
    Ok(Metrics {
        mae_deg: (angle / n as f64).to_degrees(),
        mze_mm: dz / n as f64 * 1000.0,
        evaluated: n,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::CameraIntrinsics;
    use crate::io::{CalibrationFile, Dataset};
    use crate::regressor::LambertianSolver;
    use crate::render::{render_scene, GlobalIllumApprox, Material, MaterialField, QuantizationSpec};
    use crate::scenes::{ring_lights, sphere_scene};

    /// Small sphere capture: quarter-size camera, 15-LED ring, plain
    /// Lambertian surface, no noise.
    fn sphere_dataset() -> Dataset {
        let cam = CameraIntrinsics::new(112.5, 112.5, 32.0, 32.0, 64, 64).unwrap();
        let scene = sphere_scene(&cam, Vector3::new(0.0, 0.0, 0.30), 0.05);
        let lights = ring_lights(15, 0.10, 0.1, 0.5).unwrap();
        let images = render_scene(
            &cam,
            &scene.depth,
            &scene.normals,
            &MaterialField::Uniform(Material::lambertian([0.7, 0.6, 0.5])),
            &lights,
            &GlobalIllumApprox::none(),
            &QuantizationSpec::off(),
            7,
        )
        .unwrap();
        Dataset {
            images,
            mask: scene.depth.mask.clone(),
            width: cam.width,
            height: cam.height,
            calib: CalibrationFile::new(cam, lights),
            gt_depth: Some(scene.depth),
            gt_normals: Some(scene.normals),
        }
    }

    #[test]
    fn sphere_reconstruction_is_accurate() {
        let dataset = sphere_dataset();
        // The normals fix the shape only; the constant depth offset stays at
        // its initialization, so seed the loop at the true mean distance.
        let cfg = ReconstructionConfig {
            mean_distance: dataset.gt_depth.as_ref().unwrap().mean_depth().unwrap(),
            ..Default::default()
        };
        let recon = reconstruct(&dataset, &LambertianSolver, &cfg).unwrap();
        let m = evaluate(
            &recon.depth,
            &recon.normals,
            dataset.gt_depth.as_ref().unwrap(),
            dataset.gt_normals.as_ref().unwrap(),
            2,
        )
        .unwrap();
        assert!(m.mae_deg < 3.0, "normal MAE {} deg", m.mae_deg);
        assert!(m.mze_mm < 3.0, "depth error {} mm", m.mze_mm);
        assert!(m.evaluated > 500);
        assert_eq!(recon.history.len(), 2);
        assert!(recon.history[0].normal_change_deg.is_none());
        assert!(recon.history[1].normal_change_deg.is_some());
    }

    #[test]
    #[ignore = "diagnostic: error structure of the sphere reconstruction"]
    fn diag_sphere_error_structure() {
        let dataset = sphere_dataset();
        let gt_d = dataset.gt_depth.as_ref().unwrap();
        let gt_n = dataset.gt_normals.as_ref().unwrap();
        for d in [16usize, 32, 48, 64] {
            let cfg = ReconstructionConfig {
                d,
                mean_distance: gt_d.mean_depth().unwrap(),
                ..Default::default()
            };
            let recon = reconstruct(&dataset, &LambertianSolver, &cfg).unwrap();
            for (k, snap) in recon.history.iter().enumerate() {
                let m = evaluate(&snap.depth, &snap.normals, gt_d, gt_n, 2).unwrap();
                println!(
                    "d={d} iter={k}: mae={:.3} mze={:.3} failed={} change={:?}",
                    m.mae_deg, m.mze_mm, snap.regression_failures, snap.normal_change_deg
                );
            }
            // Error by true slant angle.
            let recon_n = &recon.normals;
            let mut buckets = vec![(0.0f64, 0usize); 9];
            for idx in 0..gt_n.data.len() {
                if gt_n.mask[idx] && recon_n.mask[idx] {
                    let slant = gt_n.data[idx].z.abs().acos().to_degrees();
                    let err = angular_loss(&gt_n.data[idx], &recon_n.data[idx]).to_degrees();
                    let b = ((slant / 10.0) as usize).min(8);
                    buckets[b].0 += err;
                    buckets[b].1 += 1;
                }
            }
            for (b, (sum, n)) in buckets.iter().enumerate() {
                if *n > 0 {
                    println!("  slant {}0-{}0 deg: mean err {:.3} ({n} px)", b, b + 1, sum / *n as f64);
                }
            }
        }
    }

    #[test]
    fn naive_baseline_is_worse_near_field() {
        let dataset = sphere_dataset();
        let cfg = ReconstructionConfig {
            mean_distance: dataset.gt_depth.as_ref().unwrap().mean_depth().unwrap(),
            ..Default::default()
        };
        let full = reconstruct(&dataset, &LambertianSolver, &cfg).unwrap();
        let naive = naive_reconstruct(&dataset, &LambertianSolver, &cfg).unwrap();
        let gt_d = dataset.gt_depth.as_ref().unwrap();
        let gt_n = dataset.gt_normals.as_ref().unwrap();
        let m_full = evaluate(&full.depth, &full.normals, gt_d, gt_n, 2).unwrap();
        let m_naive = evaluate(&naive.depth, &naive.normals, gt_d, gt_n, 2).unwrap();
        assert!(
            m_naive.mae_deg > 1.5 * m_full.mae_deg,
            "naive {} vs full {}",
            m_naive.mae_deg,
            m_full.mae_deg
        );
    }

    #[test]
    fn evaluation_of_ground_truth_is_zero() {
        let dataset = sphere_dataset();
        let gt_d = dataset.gt_depth.as_ref().unwrap();
        let gt_n = dataset.gt_normals.as_ref().unwrap();
        let m = evaluate(gt_d, gt_n, gt_d, gt_n, 1).unwrap();
        assert_eq!(m.mae_deg, 0.0);
        assert_eq!(m.mze_mm, 0.0);

        let mut shifted = gt_d.clone();
        for (z, &m) in shifted.data.iter_mut().zip(&shifted.mask) {
            if m {
                *z += 0.001;
            }
        }
        let m = evaluate(&shifted, gt_n, gt_d, gt_n, 1).unwrap();
        assert!((m.mze_mm - 1.0).abs() < 1e-9);
    }

    #[test]
    fn erosion_removes_the_rim() {
        let mask = vec![true; 25];
        let eroded = erode_mask(&mask, 5, 5);
        assert_eq!(eroded.iter().filter(|&&m| m).count(), 9);
    }

    #[test]
    fn bad_configs_are_rejected() {
        let dataset = sphere_dataset();
        let solver = LambertianSolver;
        for cfg in [
            ReconstructionConfig { iterations: 0, ..Default::default() },
            ReconstructionConfig { mean_distance: -1.0, ..Default::default() },
        ] {
            match reconstruct(&dataset, &solver, &cfg) {
                Err(Error::Argument(_)) => {}
                other => panic!("expected argument error, got {other:?}"),
            }
        }
    }
}
