//! Full loop on a synthetic sphere: render a capture stack, reconstruct
//! depth and normals with the diffuse solver, and score the result against
//! the ground truth the renderer used.

use nalgebra::Vector3;
use nearlight::geometry::CameraIntrinsics;
use nearlight::io::{CalibrationFile, Dataset};
use nearlight::pipeline::{evaluate, reconstruct, ReconstructionConfig};
use nearlight::regressor::LambertianSolver;
use nearlight::render::{
    render_scene, GlobalIllumApprox, Material, MaterialField, QuantizationSpec,
};
use nearlight::scenes::{ring_lights, sphere_scene};

fn main() -> nearlight::Result<()> {
    let cam = CameraIntrinsics::new(225.0, 225.0, 64.0, 64.0, 128, 128)?;
    let scene = sphere_scene(&cam, Vector3::new(0.0, 0.0, 0.30), 0.05);
    let lights = ring_lights(15, 0.10, 0.1, 0.5)?;

    let images = render_scene(
        &cam,
        &scene.depth,
        &scene.normals,
        &MaterialField::Uniform(Material::lambertian([0.7, 0.6, 0.5])),
        &lights,
        &GlobalIllumApprox::none(),
        &QuantizationSpec::off(),
        11,
    )?;
    let dataset = Dataset {
        images,
        mask: scene.depth.mask.clone(),
        width: cam.width,
        height: cam.height,
        calib: CalibrationFile::new(cam, lights),
        gt_depth: Some(scene.depth),
        gt_normals: Some(scene.normals),
    };

    let cfg = ReconstructionConfig {
        mean_distance: dataset.gt_depth.as_ref().unwrap().mean_depth()?,
        ..Default::default()
    };
    let recon = reconstruct(&dataset, &LambertianSolver, &cfg)?;

    for (k, snap) in recon.history.iter().enumerate() {
        match snap.normal_change_deg {
            Some(change) => println!("round {}: normals moved {:.3} deg on average", k + 1, change),
            None => println!("round {}: initial regression", k + 1),
        }
    }

    let m = evaluate(
        &recon.depth,
        &recon.normals,
        dataset.gt_depth.as_ref().unwrap(),
        dataset.gt_normals.as_ref().unwrap(),
        2,
    )?;
    println!(
        "normals {:.3} deg MAE, depth {:.3} mm mean error over {} px",
        m.mae_deg, m.mze_mm, m.evaluated
    );
    Ok(())
}
