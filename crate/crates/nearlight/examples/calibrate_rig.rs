//! Refine a misremembered light rig from plane captures. Three tilted
//! poses of a matte plane pin down per-LED position, brightness,
//! principal direction, and falloff; the fit starts from a rig whose
//! positions are 5 mm off and brightnesses 10% off.

use nalgebra::Vector3;
use nearlight::calibration::{
    calibrate, synthetic_plane_problem, CalibConfig, PlanePose, TARGET_RHO,
};
use nearlight::lighting::PointLight;
use nearlight::scenes::{default_camera, ring_lights};

fn main() -> nearlight::Result<()> {
    let cam = default_camera();
    let truth = ring_lights(8, 0.10, 0.8, 0.6)?;
    let poses = [
        PlanePose::tilted(0.0, 0.0, 0.30),
        PlanePose::tilted(0.25, -0.10, 0.28),
        PlanePose::tilted(-0.15, 0.20, 0.33),
    ];
    let problem = synthetic_plane_problem(&cam, &poses, &truth, TARGET_RHO, 16)?;
    println!("{} samples from {} poses", problem.samples.len(), poses.len());

    let start: Vec<PointLight> = truth
        .iter()
        .enumerate()
        .map(|(k, l)| {
            let s = if k % 2 == 0 { 1.0 } else { -1.0 };
            PointLight {
                position: l.position + s * Vector3::new(0.003, -0.003, 0.002),
                phi: [l.phi[0] * 1.1, l.phi[1] * 0.9, l.phi[2] * 1.1],
                direction: (l.direction + Vector3::new(0.03 * s, 0.02, 0.0)).normalize(),
                mu: l.mu + 0.2 * s,
            }
        })
        .collect();

    let report = |name: &str, rig: &[PointLight]| {
        let mut pos: f64 = 0.0;
        let mut phi: f64 = 0.0;
        let mut mu: f64 = 0.0;
        for (got, want) in rig.iter().zip(&truth) {
            pos = pos.max((got.position - want.position).norm());
            for c in 0..3 {
                phi = phi.max((got.phi[c] - want.phi[c]).abs() / want.phi[c]);
            }
            mu = mu.max((got.mu - want.mu).abs());
        }
        println!(
            "{name}: worst position error {:.3} mm, brightness {:.2}%, falloff {:.4}",
            pos * 1000.0,
            phi * 100.0,
            mu
        );
    };

    report("before", &start);
    let outcome = calibrate(&problem, &start, &CalibConfig::default())?;
    report("after", &outcome.lights);
    println!(
        "mean absolute residual {:.2e} after {} recorded losses",
        outcome.mean_abs_residual,
        outcome.losses.len()
    );
    Ok(())
}
