//! Acceptance gate: nine end-to-end checks, one per shipped guarantee.
//!
//! Each check prints a single `A<n> PASS/FAIL: ...` line (run with
//! `--nocapture` to see the PASS lines; FAIL lines surface on their own)
//! and then asserts the same condition. The tests are numbered in the
//! order they are meant to run; with one worker they execute sequentially
//! and A2/A3 reuse A1's rendered capture and reconstruction.
//!
//! The two `probe_*` tests are ignored diagnostics used to size the
//! training and stream-difficulty expectations; they assert nothing.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::Command;
use std::sync::OnceLock;
use std::time::Instant;

use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use nearlight::calibration::{
    calibrate, synthetic_plane_problem, CalibConfig, PlanePose, TARGET_RHO,
};
use nearlight::geometry::flat_plane_init;
use nearlight::integrator::{integrate, normals_to_gradients, IntegratorConfig};
use nearlight::io::{CalibrationFile, Dataset};
use nearlight::lighting::{attenuation, lighting_vector, PointLight};
use nearlight::obsmap::cell_index;
use nearlight::pipeline::{
    evaluate, naive_reconstruct, reconstruct, Metrics, Reconstruction, ReconstructionConfig,
};
use nearlight::regressor::{
    angular_loss, angular_loss_grad, evaluate_stream, train, CompactNet, LambertianSolver,
    TrainConfig,
};
use nearlight::render::{
    render_scene, shade, GlobalIllumApprox, Material, MaterialField, QuantizationSpec,
};
use nearlight::sampler::{
    generate_record, sample_config, MaterialFamily, SampleMode, StreamConfig, TrainingRecord,
};
use nearlight::scenes::{build_scene, default_camera, default_ring, scale_lights_about, SceneKind};

/// Mask erosion used whenever a reconstruction is scored: boundary pixels
/// see one-sided differences and grazing normals, which dominate any
/// method's error and say nothing about the interior solution.
const INTERIOR: usize = 2;

fn report(id: &str, ok: bool, detail: &str) {
    println!("{id} {}: {detail}", if ok { "PASS" } else { "FAIL" });
    assert!(ok, "{id}: {detail}");
}

/// Render the reference capture: Lambertian sphere (radius 5 cm, 30 cm from
/// the camera) under the 15-LED, 20 cm-diameter ring, clean sensor.
fn sphere_capture(lights: Vec<PointLight>) -> Dataset {
    let cam = default_camera();
    let scene = build_scene(SceneKind::Sphere, &cam);
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

/// The reference capture's working distance. Shading fixes shape only, so
/// the reconstruction keeps whatever absolute depth it is seeded with; a
/// real capture takes the operator-measured distance, and the ground-truth
/// mean stands in for that measurement here.
fn working_distance(dataset: &Dataset) -> f64 {
    dataset.gt_depth.as_ref().unwrap().mean_depth().unwrap()
}

fn score(dataset: &Dataset, recon: &Reconstruction) -> Metrics {
    evaluate(
        &recon.depth,
        &recon.normals,
        dataset.gt_depth.as_ref().unwrap(),
        dataset.gt_normals.as_ref().unwrap(),
        INTERIOR,
    )
    .unwrap()
}

struct SphereRun {
    dataset: Dataset,
    metrics: Metrics,
    mean_depth: f64,
    /// Wall time of render + reconstruct + evaluate, seconds.
    seconds: f64,
}

static SPHERE: OnceLock<SphereRun> = OnceLock::new();

/// The full reference workflow, timed, computed once and shared.
fn sphere_run() -> &'static SphereRun {
    SPHERE.get_or_init(|| {
        let t0 = Instant::now();
        let dataset = sphere_capture(default_ring());
        let mean_depth = working_distance(&dataset);
        let cfg = ReconstructionConfig {
            mean_distance: mean_depth,
            ..Default::default()
        };
        let recon = reconstruct(&dataset, &LambertianSolver, &cfg).unwrap();
        let metrics = score(&dataset, &recon);
        SphereRun {
            dataset,
            metrics,
            mean_depth,
            seconds: t0.elapsed().as_secs_f64(),
        }
    })
}

#[test]
fn a1_sphere_reconstruction_is_accurate_and_fast() {
    let run = sphere_run();
    let m = run.metrics;
    let budget_mm = 10.0 * run.mean_depth; // 1% of the mean depth, in mm
    let ok = m.mze_mm < budget_mm && m.mze_mm < 3.0 && m.mae_deg < 3.0 && run.seconds < 120.0;
    report(
        "A1",
        ok,
        &format!(
            "sphere 256x256, 2 rounds: depth error {:.3} mm (< {:.2} mm and < 3 mm), \
             normal error {:.3} deg (< 3 deg), {:.1} s (< 120 s), {} px scored",
            m.mze_mm, budget_mm, m.mae_deg, run.seconds, m.evaluated
        ),
    );
}

#[test]
fn a2_compensation_matters_near_but_not_far() {
    let run = sphere_run();
    let cfg = ReconstructionConfig {
        mean_distance: run.mean_depth,
        ..Default::default()
    };

    let naive_near = naive_reconstruct(&run.dataset, &LambertianSolver, &cfg).unwrap();
    let naive_near_m = score(&run.dataset, &naive_near);

    // Same scene lit from ~6 m: every LED moved 20x away from the sphere
    // center, brightness scaled to keep the exposure.
    let far_lights =
        scale_lights_about(&default_ring(), &Vector3::new(0.0, 0.0, 0.30), 20.0).unwrap();
    let far = sphere_capture(far_lights);
    let comp_far_m = score(&far, &reconstruct(&far, &LambertianSolver, &cfg).unwrap());
    let naive_far_m = score(&far, &naive_reconstruct(&far, &LambertianSolver, &cfg).unwrap());

    let near_ratio = naive_near_m.mze_mm / run.metrics.mze_mm;
    let far_ratio = naive_far_m.mze_mm / comp_far_m.mze_mm;
    let ok = near_ratio >= 2.0 && far_ratio < 1.2;
    report(
        "A2",
        ok,
        &format!(
            "uncompensated/compensated depth error: {:.2}x near the ring (>= 2x required; \
             {:.3} vs {:.3} mm), {:.2}x with lights at 6 m (< 1.2x required; {:.3} vs {:.3} mm)",
            near_ratio,
            naive_near_m.mze_mm,
            run.metrics.mze_mm,
            far_ratio,
            naive_far_m.mze_mm,
            comp_far_m.mze_mm
        ),
    );
}

#[test]
fn a3_iterations_settle_and_do_not_regress() {
    let run = sphere_run();
    let cfg = ReconstructionConfig {
        iterations: 3,
        mean_distance: run.mean_depth,
        ..Default::default()
    };
    let recon = reconstruct(&run.dataset, &LambertianSolver, &cfg).unwrap();
    let change12 = recon.history[1].normal_change_deg.unwrap();
    let change23 = recon.history[2].normal_change_deg.unwrap();
    let gt_depth = run.dataset.gt_depth.as_ref().unwrap();
    let gt_normals = run.dataset.gt_normals.as_ref().unwrap();
    let per_round: Vec<Metrics> = recon
        .history
        .iter()
        .map(|s| evaluate(&s.depth, &s.normals, gt_depth, gt_normals, INTERIOR).unwrap())
        .collect();
    let ok = change23 < change12 && per_round[1].mze_mm <= per_round[0].mze_mm;
    report(
        "A3",
        ok,
        &format!(
            "normal change per round {:.3} -> {:.3} deg (decreasing), depth error \
             round 1 {:.3} mm -> round 2 {:.3} mm (non-increasing)",
            change12, change23, per_round[0].mze_mm, per_round[1].mze_mm
        ),
    );
}

/// Independent expectation for one sampler record: replay the record's
/// configuration draw, evaluate the shading function directly at the true
/// geometry, and bin the values with the same averaging the map builder
/// uses. Returns the expected cells/counts and the spread of the true
/// attenuations over the lights that reach the map.
struct ExpectedMap {
    cells: Vec<[f64; 3]>,
    counts: Vec<u32>,
    attenuation_spread: f64,
}

fn expected_map(seed: u64, index: u64, family: MaterialFamily, d: usize) -> ExpectedMap {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    // The generator redraws configurations until some light contributes
    // direct signal; with zero perturbation and no global illumination the
    // configuration draw is the only use of the stream.
    for _ in 0..256 {
        let cfg = sample_config(&mut rng, &SampleMode::General, family, false);
        let mut cells = vec![[0.0f64; 3]; d * d];
        let mut counts = vec![0u32; d * d];
        let mut contributing = 0usize;
        let mut a_min = f64::INFINITY;
        let mut a_max = 0.0f64;
        for light in &cfg.lights {
            let (dir, _) = lighting_vector(light, &cfg.point);
            let a = attenuation(light, &cfg.point);
            if !a.iter().all(|c| c.is_finite() && *c > 0.0) {
                continue;
            }
            let b = shade(&cfg.normal, &dir, &cfg.view, &cfg.material);
            if b.iter().any(|c| *c > 0.0) {
                contributing += 1;
            }
            for c in 0..3 {
                a_min = a_min.min(a[c]);
                a_max = a_max.max(a[c]);
            }
            let cell = cell_index(dir.y, d) * d + cell_index(dir.x, d);
            for c in 0..3 {
                cells[cell][c] += b[c];
            }
            counts[cell] += 1;
        }
        if contributing == 0 {
            continue;
        }
        for i in 0..d * d {
            if counts[i] > 0 {
                let k = counts[i] as f64;
                for c in 0..3 {
                    cells[i][c] /= k;
                }
            }
        }
        return ExpectedMap {
            cells,
            counts,
            attenuation_spread: a_max / a_min,
        };
    }
    panic!("no usable configuration at record {index}");
}

#[test]
fn a4_sampler_round_trip_reproduces_shading() {
    const PER_FAMILY: usize = 500;
    let lanes = [(MaterialFamily::Lambertian, 41u64), (MaterialFamily::Mixed, 42u64)];
    let mut exact_cells = 0usize;
    let mut worst_quant = 0.0f64; // error as a fraction of its bound
    let mut exact = true;
    let mut quant_bounded = true;
    for (family, seed) in lanes {
        let clean = StreamConfig::clean(family, seed);
        let quantized = StreamConfig {
            quant: QuantizationSpec::default(), // 10-bit sensor
            ..StreamConfig::clean(family, seed)
        };
        let levels_top = 1023.0;
        for index in 0..PER_FAMILY as u64 {
            let want = expected_map(seed, index, family, clean.d);
            let record = generate_record(&clean, index).unwrap();
            for iy in 0..clean.d {
                for ix in 0..clean.d {
                    let i = iy * clean.d + ix;
                    if record.map.count(ix, iy) != want.counts[i]
                        || record.map.cell(ix, iy) != want.cells[i]
                    {
                        exact = false;
                    }
                    if want.counts[i] > 0 {
                        exact_cells += 1;
                    }
                }
            }

            let q = generate_record(&quantized, index).unwrap();
            let bound = want.attenuation_spread / levels_top;
            for iy in 0..clean.d {
                for ix in 0..clean.d {
                    let i = iy * clean.d + ix;
                    if want.counts[i] == 0 {
                        continue;
                    }
                    let got = q.map.cell(ix, iy);
                    for c in 0..3 {
                        let err = (got[c] - want.cells[i][c]).abs();
                        if err > bound {
                            quant_bounded = false;
                        }
                        worst_quant = worst_quant.max(err / bound);
                    }
                }
            }
        }
    }
    let ok = exact && quant_bounded;
    report(
        "A4",
        ok,
        &format!(
            "1000 records: {exact_cells} occupied cells equal the shading function \
             bit for bit ({}), 10-bit lane stays within 1/1023 of the attenuation \
             spread (worst {:.3} of the bound, {})",
            if exact { "yes" } else { "no" },
            worst_quant,
            if quant_bounded { "yes" } else { "no" }
        ),
    );
}

/// Largest relative disagreement between analytic and central-difference
/// derivatives; `probes` draws are taken from `probe`.
fn max_rel_error(probes: usize, mut probe: impl FnMut() -> (f64, f64), floor: f64) -> f64 {
    let mut worst = 0.0f64;
    for _ in 0..probes {
        let (fd, analytic) = probe();
        let denom = fd.abs().max(analytic.abs()).max(floor);
        worst = worst.max(((fd - analytic) / denom).abs());
    }
    worst
}

fn a5_angular_lane(rng: &mut ChaCha8Rng) -> f64 {
    let random_vec = |rng: &mut ChaCha8Rng| loop {
        let v = Vector3::new(
            rng.gen_range(-1.0..1.0),
            rng.gen_range(-1.0..1.0),
            rng.gen_range(-1.0..1.0),
        );
        if v.norm() > 0.3 {
            return v;
        }
    };
    let draw_pair = |rng: &mut ChaCha8Rng| loop {
        let t = random_vec(rng);
        let p = random_vec(rng);
        let theta = angular_loss(&t, &p);
        // The analytic gradient switches to a stable surrogate within a
        // degree of exact (anti-)alignment; probe the exact branch only.
        if theta > 0.1 && theta < std::f64::consts::PI - 0.1 {
            return (t, p);
        }
    };
    max_rel_error(
        50,
        move || {
            let (t, p) = draw_pair(rng);
            let i = rng.gen_range(0..3);
            let eps = 1e-6;
            let mut hi = p;
            let mut lo = p;
            hi[i] += eps;
            lo[i] -= eps;
            let fd = (angular_loss(&t, &hi) - angular_loss(&t, &lo)) / (2.0 * eps);
            (fd, angular_loss_grad(&t, &p)[i])
        },
        1e-9,
    )
}

fn a5_network_lane(rng: &mut ChaCha8Rng) -> f64 {
    let mut net = CompactNet::new(16, 7).unwrap();
    let mut stream = StreamConfig::clean(MaterialFamily::Lambertian, 901);
    stream.d = 16;
    let record = generate_record(&stream, 0).unwrap();
    // A target 30 degrees away from the current output keeps every probe on
    // the smooth part of the loss.
    let out = net.forward_unit(&record.map).unwrap();
    let axis = out.cross(&Vector3::new(0.3, 0.7, 0.1)).normalize();
    let angle = 30.0f64.to_radians();
    let target = out * angle.cos()
        + axis.cross(&out) * angle.sin()
        + axis * axis.dot(&out) * (1.0 - angle.cos());
    let batch = vec![TrainingRecord {
        target,
        ..record.clone()
    }];
    let (_, grads) = net.loss_and_grad(&batch).unwrap();
    let counts: Vec<usize> = net.param_slices().iter().map(|s| s.len()).collect();
    max_rel_error(
        50,
        move || {
            let s = rng.gen_range(0..counts.len());
            let e = rng.gen_range(0..counts[s]);
            let analytic = grads.slices()[s][e];
            let eps = 1e-5;
            let original = net.param_slices()[s][e];
            net.param_slices_mut()[s][e] = original + eps;
            let hi = net.loss_and_grad(&batch).unwrap().0;
            net.param_slices_mut()[s][e] = original - eps;
            let lo = net.loss_and_grad(&batch).unwrap().0;
            net.param_slices_mut()[s][e] = original;
            ((hi - lo) / (2.0 * eps), analytic)
        },
        1e-7,
    )
}

fn a5_calibration_lane(rng: &mut ChaCha8Rng) -> f64 {
    let truth = test_rig();
    let problem =
        synthetic_plane_problem(&default_camera(), &test_poses(), &truth, TARGET_RHO, 64).unwrap();
    // Evaluate at a perturbed rig so the residuals (and gradients) are
    // nonzero.
    let lights = perturbed_rig(rng, &truth, 0.005);
    let delta = 1e-4;
    let (_, grad) = problem.loss_and_grad(&lights, delta);
    max_rel_error(
        50,
        move || {
            let li = rng.gen_range(0..lights.len());
            let k = rng.gen_range(0..10);
            let mut hi = lights.clone();
            let mut lo = lights.clone();
            let (value, apply): (f64, fn(&mut PointLight, usize, f64)) = match k {
                0..=2 => (lights[li].position[k], |l, k, v| l.position[k] = v),
                3..=5 => (lights[li].phi[k - 3], |l, k, v| l.phi[k - 3] = v),
                6..=8 => (
                    lights[li].direction[k - 6],
                    // The direction gradient lives on the unit sphere, so
                    // the probe renormalizes after stepping; the chain rule
                    // of that renormalization is exactly the tangent
                    // projection the analytic gradient applies.
                    |l, k, v| {
                        l.direction[k - 6] = v;
                        l.direction = l.direction.normalize();
                    },
                ),
                _ => (lights[li].mu, |l, _, v| l.mu = v),
            };
            let eps = 1e-7 * value.abs().max(1.0);
            apply(&mut hi[li], k, value + eps);
            apply(&mut lo[li], k, value - eps);
            let fd = (problem.loss(&hi, delta) - problem.loss(&lo, delta)) / (2.0 * eps);
            (fd, grad[li * 10 + k])
        },
        1e-9,
    )
}

#[test]
fn a5_analytic_gradients_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(55);
    let angular = a5_angular_lane(&mut rng);
    let network = a5_network_lane(&mut rng);
    let calibration = a5_calibration_lane(&mut rng);
    let ok = angular < 1e-4 && network < 1e-4 && calibration < 1e-4;
    report(
        "A5",
        ok,
        &format!(
            "worst relative gradient error over 50 probes each: angular loss {:.2e}, \
             network parameters {:.2e}, rig model {:.2e} (all < 1e-4)",
            angular, network, calibration
        ),
    );
}

/// Integrate a scene's true normal field from a flat start whose constant
/// carries the right gauge (mean log-depth), and return the mean relative
/// depth error plus the per-round objective trace.
fn integrate_scene(kind: SceneKind) -> (f64, Vec<f64>) {
    let cam = default_camera();
    let scene = build_scene(kind, &cam);
    let field = normals_to_gradients(&cam, &scene.normals);
    let mut sum = 0.0;
    let mut n = 0usize;
    for i in 0..scene.depth.data.len() {
        if scene.depth.mask[i] && field.mask[i] {
            sum += scene.depth.data[i].ln();
            n += 1;
        }
    }
    let z0 = flat_plane_init(
        &scene.depth.mask,
        cam.width,
        cam.height,
        (sum / n as f64).exp(),
    )
    .unwrap();
    let (depth, rep) = integrate(&field, &z0, &IntegratorConfig::default()).unwrap();
    let mut err = 0.0;
    let mut m = 0usize;
    for i in 0..depth.data.len() {
        if depth.mask[i] && scene.depth.mask[i] {
            err += (depth.data[i] - scene.depth.data[i]).abs() / scene.depth.data[i];
            m += 1;
        }
    }
    (err / m as f64, rep.objective)
}

/// Largest relative objective increase between consecutive rounds;
/// nonpositive means the trace never rose.
fn worst_uptick(objective: &[f64]) -> f64 {
    objective
        .windows(2)
        .map(|w| (w[1] - w[0]) / w[0].abs().max(1.0))
        .fold(0.0f64, f64::max)
}

#[test]
fn a6_integrator_is_exact_monotone_and_pinnable() {
    let (plane_err, plane_obj) = integrate_scene(SceneKind::Plane);
    let (sphere_err, sphere_obj) = integrate_scene(SceneKind::Sphere);

    // With a dominant anchor weight the solution must stay glued to the
    // initialization even though the sphere's gradients pull hard.
    let cam = default_camera();
    let scene = build_scene(SceneKind::Sphere, &cam);
    let field = normals_to_gradients(&cam, &scene.normals);
    let z0 = flat_plane_init(&scene.depth.mask, cam.width, cam.height, 0.30).unwrap();
    let cfg = IntegratorConfig {
        lambda: 1e3,
        ..Default::default()
    };
    let (pinned, pinned_rep) = integrate(&field, &z0, &cfg).unwrap();
    let mut max_pull = 0.0f64;
    for i in 0..pinned.data.len() {
        if pinned.mask[i] {
            max_pull = max_pull.max((pinned.data[i].ln() - 0.30f64.ln()).abs());
        }
    }

    // The solver reports the objective of its retained solution, so the
    // trace must be non-increasing exactly, with no float allowance.
    let uptick = worst_uptick(&plane_obj)
        .max(worst_uptick(&sphere_obj))
        .max(worst_uptick(&pinned_rep.objective));
    let monotone = uptick <= 0.0;
    let ok = plane_err < 1e-3 && sphere_err < 1e-2 && monotone && max_pull <= 1e-3;
    report(
        "A6",
        ok,
        &format!(
            "true-normal integration: plane {:.4}% (< 0.1%), sphere {:.3}% (< 1%) relative \
             depth error; objective non-increasing in all runs (worst uptick {:.1e} rel, \
             <= 0); anchor weight 1e3 holds log-depth within {:.6e} of the start (<= 1e-3)",
            plane_err * 100.0,
            sphere_err * 100.0,
            uptick,
            max_pull
        ),
    );
}

fn test_rig() -> Vec<PointLight> {
    vec![
        PointLight::new(
            Vector3::new(0.08, 0.05, 0.02),
            [0.9, 1.0, 1.1],
            Vector3::new(-0.2, -0.1, 1.0),
            0.8,
        )
        .unwrap(),
        PointLight::new(
            Vector3::new(-0.09, 0.04, 0.01),
            [1.2, 1.1, 0.8],
            Vector3::new(0.15, -0.05, 1.0),
            1.5,
        )
        .unwrap(),
        PointLight::new(
            Vector3::new(0.02, -0.10, 0.03),
            [1.0, 0.7, 0.9],
            Vector3::new(0.0, 0.2, 1.0),
            0.3,
        )
        .unwrap(),
    ]
}

fn test_poses() -> Vec<PlanePose> {
    vec![
        PlanePose::tilted(0.0, 0.0, 0.30),
        PlanePose::tilted(0.25, -0.1, 0.28),
        PlanePose::tilted(-0.15, 0.2, 0.33),
    ]
}

/// Jitter a rig: positions by exactly `pos_m` in a random direction,
/// brightness by up to 10%, directions by up to 0.05 per component, the
/// falloff exponent by up to 0.2.
fn perturbed_rig(rng: &mut ChaCha8Rng, truth: &[PointLight], pos_m: f64) -> Vec<PointLight> {
    truth
        .iter()
        .map(|l| {
            let jitter = Vector3::new(
                rng.gen_range(-1.0..1.0),
                rng.gen_range(-1.0..1.0),
                rng.gen_range(-1.0..1.0),
            )
            .normalize()
                * pos_m;
            let mut phi = l.phi;
            for p in &mut phi {
                *p *= 1.0 + rng.gen_range(-0.10..0.10);
            }
            let dir = l.direction
                + Vector3::new(
                    rng.gen_range(-0.05..0.05),
                    rng.gen_range(-0.05..0.05),
                    rng.gen_range(-0.05..0.05),
                );
            PointLight {
                position: l.position + jitter,
                phi,
                direction: dir.normalize(),
                mu: (l.mu + rng.gen_range(-0.2..0.2)).max(0.0),
            }
        })
        .collect()
}

#[test]
fn a7_rig_refinement_recovers_the_truth() {
    let t0 = Instant::now();
    let cam = default_camera();
    let truth: Vec<PointLight> = (0..8)
        .map(|m| {
            let angle = std::f64::consts::TAU * m as f64 / 8.0;
            PointLight::new(
                Vector3::new(0.10 * angle.cos(), 0.10 * angle.sin(), 0.0),
                [0.8; 3],
                Vector3::new(0.0, 0.0, 1.0),
                0.6,
            )
            .unwrap()
        })
        .collect();
    let problem = synthetic_plane_problem(&cam, &test_poses(), &truth, TARGET_RHO, 8).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let start = perturbed_rig(&mut rng, &truth, 0.005);
    let outcome = calibrate(&problem, &start, &CalibConfig::default()).unwrap();

    let mut worst_pos = 0.0f64;
    let mut worst_phi = 0.0f64;
    let mut worst_mu = 0.0f64;
    for (got, want) in outcome.lights.iter().zip(&truth) {
        worst_pos = worst_pos.max((got.position - want.position).norm());
        for c in 0..3 {
            worst_phi = worst_phi.max((got.phi[c] - want.phi[c]).abs() / want.phi[c]);
        }
        worst_mu = worst_mu.max((got.mu - want.mu).abs());
    }
    let seconds = t0.elapsed().as_secs_f64();
    let ok = worst_pos < 1e-3
        && worst_phi < 0.01
        && worst_mu < 0.05
        && outcome.mean_abs_residual < 0.005
        && seconds < 60.0;
    report(
        "A7",
        ok,
        &format!(
            "8-LED rig from 5 mm / 10% start: position error {:.3} mm (< 1 mm), brightness \
             {:.3}% (< 1%), falloff exponent {:.4} (< 0.05), residual {:.2e} (< 5e-3), \
             {:.1} s (< 60 s)",
            worst_pos * 1e3,
            worst_phi * 100.0,
            worst_mu,
            outcome.mean_abs_residual,
            seconds
        ),
    );
}

#[test]
fn a8_network_learns_both_stream_difficulties() {
    let t0 = Instant::now();

    // Lane 1: clean Lambertian records, where the closed-form solver is the
    // (near-exact) oracle the network has to approach.
    let clean = StreamConfig::clean(MaterialFamily::Lambertian, 801);
    let clean_count = 200_000u64;
    let mut net_clean = CompactNet::new(clean.d, 801).unwrap();
    let report1 = train(
        &mut net_clean,
        &clean,
        &TrainConfig {
            records: clean_count,
            ..Default::default()
        },
    )
    .unwrap();
    let net_clean_stats = evaluate_stream(&net_clean, &clean, clean_count, 2000).unwrap();
    let solver_clean_stats = evaluate_stream(&LambertianSolver, &clean, clean_count, 2000).unwrap();

    // Lane 2: the full simulator - glossy/metallic materials, shadows,
    // ambient and self-reflection, rig perturbations, a 10-bit sensor. The
    // Lambertian model is badly wrong here; the network has to stay useful.
    let mixed = StreamConfig::general(MaterialFamily::Mixed, 802);
    let mixed_count = 500_000u64;
    let mut net_mixed = CompactNet::new(mixed.d, 802).unwrap();
    let report2 = train(
        &mut net_mixed,
        &mixed,
        &TrainConfig {
            records: mixed_count,
            ..Default::default()
        },
    )
    .unwrap();
    let net_mixed_stats = evaluate_stream(&net_mixed, &mixed, mixed_count, 2000).unwrap();
    let solver_mixed_stats = evaluate_stream(&LambertianSolver, &mixed, mixed_count, 2000).unwrap();

    let hours = t0.elapsed().as_secs_f64() / 3600.0;
    let ok = net_clean_stats.mean_deg < 5.0
        && solver_clean_stats.mean_deg < 0.5
        && net_mixed_stats.mean_deg < 15.0
        && solver_mixed_stats.mean_deg > 20.0
        && hours < 2.0;
    report(
        "A8",
        ok,
        &format!(
            "held-out mean angular error - clean 200k: network {:.2} deg (< 5), solver \
             {:.3} deg (< 0.5); mixed 500k: network {:.2} deg (< 15), solver {:.2} deg \
             (> 20); {:.2} h (< 2 h); final chunk losses {:.3} / {:.3} rad",
            net_clean_stats.mean_deg,
            solver_clean_stats.mean_deg,
            net_mixed_stats.mean_deg,
            solver_mixed_stats.mean_deg,
            hours,
            report1.chunk_losses.last().unwrap(),
            report2.chunk_losses.last().unwrap()
        ),
    );
}

fn cli() -> Command {
    Command::new(env!("CARGO_BIN_EXE_nearlight"))
}

fn run_cli(args: &[&str]) -> Vec<u8> {
    let out = cli().args(args).output().expect("binary should run");
    assert!(
        out.status.success(),
        "cli {:?} failed:\n{}",
        args,
        String::from_utf8_lossy(&out.stderr)
    );
    out.stdout
}

/// Every file under `root`, keyed by relative path.
fn collect_files(root: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    let mut files = BTreeMap::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for entry in std::fs::read_dir(&dir).unwrap() {
            let path = entry.unwrap().path();
            if path.is_dir() {
                stack.push(path);
            } else {
                let rel = path.strip_prefix(root).unwrap().to_path_buf();
                files.insert(rel, std::fs::read(&path).unwrap());
            }
        }
    }
    files
}

/// One pass over every CLI workflow, writing all outputs under `root`.
/// Returns the concatenated stdout of the workflows.
fn drive_cli_workflows(root: &Path) -> Vec<u8> {
    let p = |name: &str| root.join(name).to_str().unwrap().to_string();
    let sphere = p("sphere");
    let plane = p("plane");
    let wave = p("wave");
    let records = p("records.bin");
    let ckpt = p("net.ckpt");
    let recon = p("recon");
    let calib = p("refined.calib.txt");

    let mut stdout = Vec::new();
    // Global-illumination noise on so the render exercises its RNG.
    stdout.extend(run_cli(&[
        "render", "--scene", "sphere", "--out", &sphere, "--shadow", "0.1", "--ambient", "0.01",
        "--reflection", "0.05", "--seed", "9",
    ]));
    stdout.extend(run_cli(&["render", "--scene", "plane", "--out", &plane, "--seed", "10"]));
    stdout.extend(run_cli(&["render", "--scene", "wave", "--out", &wave, "--seed", "11"]));
    stdout.extend(run_cli(&["sample", "--out", &records, "--count", "64", "--seed", "3"]));
    stdout.extend(run_cli(&[
        "train", "--out", &ckpt, "--records", "512", "--batch", "64", "--chunks", "4",
        "--map-res", "16", "--family", "lambertian", "--clean", "--seed", "5", "--net-seed", "11",
    ]));
    stdout.extend(run_cli(&[
        "reconstruct", "--data", &sphere, "--out", &recon, "--regressor", "solver",
        "--iterations", "1", "--distance", "0.265",
    ]));
    stdout.extend(run_cli(&[
        "calibrate", "--data", &plane, "--data", &wave, "--out", &calib, "--iters", "200",
    ]));
    stdout.extend(run_cli(&[
        "evaluate",
        "--data",
        &sphere,
        "--depth",
        &format!("{recon}/depth.pfm"),
        "--normals",
        &format!("{recon}/normals.pfm"),
    ]));
    stdout
}

#[test]
fn a9_cli_reruns_are_byte_identical() {
    // Outputs echo and record the paths they were asked to use (stdout and
    // manifests), so a faithful re-run repeats the exact command lines: the
    // first run's files are snapshotted and removed, then recreated.
    let tmp = tempfile::tempdir().unwrap();
    let root = tmp.path().join("work");

    std::fs::create_dir_all(&root).unwrap();
    let stdout1 = drive_cli_workflows(&root);
    let files1 = collect_files(&root);
    std::fs::remove_dir_all(&root).unwrap();

    std::fs::create_dir_all(&root).unwrap();
    let stdout2 = drive_cli_workflows(&root);
    let files2 = collect_files(&root);

    let same_names: Vec<_> = files1.keys().collect();
    let mut diff: Vec<String> = Vec::new();
    if files1.len() != files2.len() {
        diff.push("file sets differ".to_string());
    }
    for (name, bytes) in &files1 {
        if files2.get(name) != Some(bytes) {
            diff.push(name.display().to_string());
        }
    }
    let stdout_same = stdout1 == stdout2;
    let ok = diff.is_empty() && stdout_same;
    report(
        "A9",
        ok,
        &format!(
            "6 workflows re-run with identical command lines: {} output files \
             byte-identical ({}), printed results identical ({})",
            same_names.len(),
            if diff.is_empty() {
                "yes".to_string()
            } else {
                format!("differs: {}", diff.join(", "))
            },
            stdout_same
        ),
    );
}

/// Diagnostic: objective traces of the three integrator runs, and where
/// they rise.
#[test]
#[ignore = "diagnostic: integrator objective traces"]
fn probe_objective_traces() {
    let (_, plane_obj) = integrate_scene(SceneKind::Plane);
    let (_, sphere_obj) = integrate_scene(SceneKind::Sphere);
    let cam = default_camera();
    let scene = build_scene(SceneKind::Sphere, &cam);
    let field = normals_to_gradients(&cam, &scene.normals);
    let z0 = flat_plane_init(&scene.depth.mask, cam.width, cam.height, 0.30).unwrap();
    let cfg = IntegratorConfig {
        lambda: 1e3,
        ..Default::default()
    };
    let (_, pinned_rep) = integrate(&field, &z0, &cfg).unwrap();
    for (name, obj) in [
        ("plane", &plane_obj),
        ("sphere", &sphere_obj),
        ("pinned", &pinned_rep.objective),
    ] {
        println!(
            "{name}: {} rounds, first {:?}, last {:?}",
            obj.len(),
            &obj[..obj.len().min(5)],
            &obj[obj.len().saturating_sub(3)..]
        );
        for (i, w) in obj.windows(2).enumerate() {
            if w[1] > w[0] {
                println!(
                    "  rise at round {}: {} -> {} (rel {:.2e})",
                    i + 1,
                    w[0],
                    w[1],
                    (w[1] - w[0]) / w[0].abs().max(1.0)
                );
            }
        }
    }
}

/// Diagnostic: how hard each record stream is for the closed-form solver.
#[test]
#[ignore = "diagnostic: stream difficulty for the closed-form solver"]
fn probe_stream_difficulty() {
    let clean = StreamConfig::clean(MaterialFamily::Lambertian, 801);
    let mixed = StreamConfig::general(MaterialFamily::Mixed, 802);
    let t0 = Instant::now();
    let s1 = evaluate_stream(&LambertianSolver, &clean, 200_000, 2000).unwrap();
    let t1 = Instant::now();
    let s2 = evaluate_stream(&LambertianSolver, &mixed, 500_000, 2000).unwrap();
    println!(
        "solver on clean: {:.3} deg ({} ok, {} failed) in {:.1} s",
        s1.mean_deg,
        s1.evaluated,
        s1.failed,
        (t1 - t0).as_secs_f64()
    );
    println!(
        "solver on mixed: {:.3} deg ({} ok, {} failed) in {:.1} s",
        s2.mean_deg,
        s2.evaluated,
        s2.failed,
        t1.elapsed().as_secs_f64()
    );
}

/// Diagnostic: re-solve the reference sphere's per-round integrations at
/// the pipeline's defaults and at a generous budget, to show how far from
/// converged each round's solve stops and what that costs in depth error.
#[test]
#[ignore = "diagnostic: per-round integration convergence on the sphere"]
fn probe_round_convergence() {
    let run = sphere_run();
    let dataset = &run.dataset;
    let gt_depth = dataset.gt_depth.as_ref().unwrap();
    let gt_normals = dataset.gt_normals.as_ref().unwrap();
    let cam = &dataset.calib.camera;
    let cfg = ReconstructionConfig {
        iterations: 2,
        mean_distance: run.mean_depth,
        ..Default::default()
    };
    let recon = reconstruct(dataset, &LambertianSolver, &cfg).unwrap();
    let flat = flat_plane_init(&dataset.mask, dataset.width, dataset.height, run.mean_depth)
        .unwrap();
    let inits = [&flat, &recon.history[0].depth];
    for (round, snap) in recon.history.iter().enumerate() {
        let field = normals_to_gradients(cam, &snap.normals);
        for (label, outer) in [("default", IntegratorConfig::default().max_iters), ("4x", 4800)] {
            let icfg = IntegratorConfig {
                max_iters: outer,
                warm_start: round > 0,
                ..Default::default()
            };
            let t0 = Instant::now();
            let (depth, rep) = integrate(&field, inits[round], &icfg).unwrap();
            let m = evaluate(&depth, &snap.normals, gt_depth, gt_normals, INTERIOR).unwrap();
            println!(
                "round {} {label}: {} iters, converged {}, obj {:.6e}, \
                 mze {:.4} mm, {:.1} s",
                round + 1,
                rep.objective.len(),
                rep.converged,
                rep.objective.last().unwrap(),
                m.mze_mm,
                t0.elapsed().as_secs_f64()
            );
        }
    }
}

/// Diagnostic: per-round accuracy with the ring moved far away.
#[test]
#[ignore = "diagnostic: far-light accuracy per round"]
fn probe_far_rounds() {
    let far_lights =
        scale_lights_about(&default_ring(), &Vector3::new(0.0, 0.0, 0.30), 20.0).unwrap();
    let far = sphere_capture(far_lights);
    let mean = working_distance(&far);
    for iters in [1usize, 2, 3] {
        let cfg = ReconstructionConfig {
            iterations: iters,
            mean_distance: mean,
            ..Default::default()
        };
        let recon = reconstruct(&far, &LambertianSolver, &cfg).unwrap();
        let m = score(&far, &recon);
        println!(
            "far iterations {}: mze {:.4} mm, mae {:.3} deg",
            iters, m.mze_mm, m.mae_deg
        );
    }
}

/// Diagnostic: short training run to extrapolate the full-length cost.
#[test]
#[ignore = "diagnostic: training throughput and early loss trajectory"]
fn probe_training_speed() {
    let clean = StreamConfig::clean(MaterialFamily::Lambertian, 801);
    let mut net = CompactNet::new(clean.d, 801).unwrap();
    let records = 20_000u64;
    let t0 = Instant::now();
    let rep = train(
        &mut net,
        &clean,
        &TrainConfig {
            records,
            chunks: 5,
            ..Default::default()
        },
    )
    .unwrap();
    let train_s = t0.elapsed().as_secs_f64();
    let stats = evaluate_stream(&net, &clean, 200_000, 1000).unwrap();
    println!(
        "{records} records in {:.1} s ({:.1} ms/batch), chunk losses {:?}, held-out {:.2} deg",
        train_s,
        1e3 * train_s / rep.batches as f64,
        rep.chunk_losses,
        stats.mean_deg
    );
}
