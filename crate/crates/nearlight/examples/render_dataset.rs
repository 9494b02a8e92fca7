//! Synthesize a capture dataset: a sphere under a 15-LED ring, with
//! stochastic shadows, ambient light, and a 10-bit sensor.

use nearlight::io::{save_dataset, CalibrationFile, Dataset};
use nearlight::render::{
    render_scene, GlobalIllumApprox, Material, MaterialField, QuantizationSpec,
};
use nearlight::scenes::{build_scene, default_camera, default_ring, SceneKind};

fn main() -> nearlight::Result<()> {
    let cam = default_camera();
    let scene = build_scene(SceneKind::Sphere, &cam);
    let lights = default_ring();

    let material = Material {
        albedo: [0.65, 0.55, 0.45],
        specular_weight: 0.25,
        shininess: 40.0,
        metallic: 0.3,
    };
    let gi = GlobalIllumApprox {
        shadow_prob: 0.05,
        ambient: [0.01; 3],
        self_reflection: [0.02; 3],
    };

    let images = render_scene(
        &cam,
        &scene.depth,
        &scene.normals,
        &MaterialField::Uniform(material),
        &lights,
        &gi,
        &QuantizationSpec::default(),
        42,
    )?;

    let masked = scene.depth.mask.iter().filter(|&&m| m).count();
    let mut peak: f64 = 0.0;
    for img in &images {
        for v in 0..img.height {
            for u in 0..img.width {
                let rgb = img.get(u, v);
                peak = peak.max(rgb[0]).max(rgb[1]).max(rgb[2]);
            }
        }
    }
    println!(
        "rendered {} captures of {}x{} px ({} on the object, peak intensity {:.3})",
        images.len(),
        cam.width,
        cam.height,
        masked,
        peak
    );

    let out = std::env::temp_dir().join("nearlight-examples/sphere-dataset");
    let dataset = Dataset {
        images,
        mask: scene.depth.mask.clone(),
        width: cam.width,
        height: cam.height,
        calib: CalibrationFile::new(cam, lights),
        gt_depth: Some(scene.depth),
        gt_normals: Some(scene.normals),
    };
    save_dataset(&out, &dataset)?;
    println!("saved dataset to {}", out.display());
    Ok(())
}
