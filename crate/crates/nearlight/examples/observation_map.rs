//! Anatomy of one observation map: the per-light samples of a single
//! surface point, binned over light-direction (x, y) into a d x d grid,
//! then handed to the diffuse solver.

use nalgebra::Vector3;
use nearlight::lighting::{geometric_factor, lighting_vector};
use nearlight::obsmap::{build_map, MapSample};
use nearlight::regressor::{angular_loss, lambertian_solve};
use nearlight::render::{shade, Material};
use nearlight::scenes::ring_lights;

fn main() -> nearlight::Result<()> {
    let lights = ring_lights(48, 0.12, 0.1, 0.5)?;
    let point = Vector3::new(0.02, -0.01, 0.28);
    let normal = Vector3::new(0.3, -0.2, -1.0).normalize();
    let view = -point.normalize();
    let material = Material::lambertian([0.8, 0.55, 0.35]);

    let phi: Vec<[f64; 3]> = lights.iter().map(|l| l.phi).collect();
    let samples: Vec<MapSample> = lights
        .iter()
        .map(|light| {
            let (dir, _) = lighting_vector(light, &point);
            let g = geometric_factor(light, &point);
            let b = shade(&normal, &dir, &view, &material);
            // Camera intensity would be phi * g * b; geometric compensation
            // leaves phi * b, and build_map divides phi out.
            MapSample {
                dir,
                j: [light.phi[0] * b[0], light.phi[1] * b[1], light.phi[2] * b[2]],
                valid: g.is_finite() && g > 0.0,
            }
        })
        .collect();

    let d = 16;
    let map = build_map(&samples, &phi, view, d)?;
    println!(
        "{} lights -> {} occupied cells of {}x{}:",
        lights.len(),
        map.occupancy(),
        d,
        d
    );
    let shades = [' ', '.', ':', '-', '=', '+', '*', '#', '%', '@'];
    let peak = map
        .occupied_cells()
        .map(|(_, _, rgb)| rgb[0])
        .fold(0.0f64, f64::max);
    for iy in 0..d {
        let mut row = String::new();
        for ix in 0..d {
            if map.occupied(ix, iy) {
                let level = (map.cell(ix, iy)[0] / peak * 9.0).round() as usize;
                row.push(shades[level.min(9)]);
            } else {
                row.push(' ');
            }
        }
        println!("  |{row}|");
    }

    let fit = lambertian_solve(&map)?;
    println!(
        "solver: normal off by {:.3} deg, albedo [{:.3} {:.3} {:.3}] from {} cells",
        angular_loss(&normal, &fit.normal).to_degrees(),
        fit.albedo[0],
        fit.albedo[1],
        fit.albedo[2],
        fit.used
    );
    Ok(())
}
