//! Depth from normals alone: convert a known normal field to log-depth
//! gradients and integrate, starting from a flat plane. The wavy relief
//! comes back to within a few micrometers.

use nearlight::geometry::flat_plane_init;
use nearlight::integrator::{integrate, normals_to_gradients, IntegratorConfig};
use nearlight::scenes::{build_scene, default_camera, SceneKind};

fn main() -> nearlight::Result<()> {
    let cam = default_camera();
    let scene = build_scene(SceneKind::Wave, &cam);

    let field = normals_to_gradients(&cam, &scene.normals);
    let z0 = flat_plane_init(
        &scene.depth.mask,
        scene.depth.width,
        scene.depth.height,
        scene.depth.mean_depth()?,
    )?;
    let (depth, report) = integrate(&field, &z0, &IntegratorConfig::default())?;

    println!(
        "integrated in {} iterations (converged: {}), objective {:.3e} -> {:.3e}",
        report.iterations,
        report.converged,
        report.objective.first().unwrap(),
        report.objective.last().unwrap()
    );

    let mut err: f64 = 0.0;
    let mut worst: f64 = 0.0;
    let mut n = 0usize;
    for idx in 0..depth.data.len() {
        if depth.mask[idx] && scene.depth.mask[idx] {
            let e = (depth.data[idx] - scene.depth.data[idx]).abs();
            err += e;
            worst = worst.max(e);
            n += 1;
        }
    }
    println!(
        "depth error vs truth: mean {:.2} um, worst {:.2} um over {} px",
        err / n as f64 * 1e6,
        worst * 1e6,
        n
    );
    Ok(())
}
