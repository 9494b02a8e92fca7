//! Command-line interface.
//!
//! The subcommands mirror the library entry points: `render` synthesizes a
//! capture dataset from a built-in scene, `sample` writes training-record
//! shards, `train` fits the compact network on a streamed dataset,
//! `reconstruct` runs the iterative loop on a capture directory,
//! `calibrate` refines LED parameters from captures of known geometry, and
//! `evaluate` scores reconstructed maps against ground truth.
//!
//! Every command that writes files also writes a manifest (command, crate
//! version, seed, flags — no timestamps) next to them, and runs are
//! deterministic: the same invocation produces byte-identical outputs.
//! Exit codes: 0 on success, 2 for usage or argument errors, 1 for any
//! other failure; failures print a single `error: ...` line to stderr.

use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::calibration::{
    calibrate, CalibConfig, CalibrationProblem, CalibrationSample, TARGET_RHO,
};
use crate::error::{Error, Result};
use crate::geometry::back_project;
use crate::io::{
    load_dataset, read_calibration, read_depth_pfm, read_normals_pfm, save_dataset,
    write_calibration, write_depth_pfm, write_normals_pfm, write_records, CalibrationFile,
    Dataset, RunManifest,
};
use crate::pipeline::{
    evaluate, naive_reconstruct, reconstruct, ReconstructionConfig,
};
use crate::regressor::{CompactNet, LambertianSolver, NormalRegressor, TrainConfig};
use crate::render::{
    render_scene, GlobalIllumApprox, Material, MaterialField, QuantizationSpec,
};
use crate::sampler::{record_stream, PerturbOrder, SampleMode, StreamConfig};
use crate::scenes::{build_scene, ring_lights, SceneKind};

#[derive(Parser)]
#[command(
    name = "nearlight",
    version,
    about = "Near-field point-light photometric stereo",
    propagate_version = true
)]
pub struct Cli {
    /// Worker threads (0 uses one per core).
    #[arg(long, global = true, default_value_t = 0)]
    pub threads: usize,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand)]
pub enum Command {
    /// Synthesize a capture dataset from a built-in scene.
    Render(RenderArgs),
    /// Generate training records and write them as a shard file.
    Sample(SampleArgs),
    /// Train the compact normal-regression network on a streamed dataset.
    Train(TrainArgs),
    /// Reconstruct depth and normals from a capture directory.
    Reconstruct(ReconstructArgs),
    /// Refine LED parameters from captures of known geometry.
    Calibrate(CalibrateArgs),
    /// Score reconstructed maps against a dataset's ground truth.
    Evaluate(EvaluateArgs),
}

fn parse_rgb(s: &str) -> std::result::Result<[f64; 3], String> {
    let parts: Vec<&str> = s.split(',').collect();
    if parts.len() != 3 {
        return Err(format!("expected r,g,b but got '{s}'"));
    }
    let mut rgb = [0.0; 3];
    for (slot, part) in rgb.iter_mut().zip(&parts) {
        *slot = part
            .trim()
            .parse::<f64>()
            .map_err(|e| format!("bad component '{part}': {e}"))?;
    }
    Ok(rgb)
}

/// Sensor bit depth to a quantization spec; 0 disables quantization.
fn bits_to_quant(bits: u32) -> Result<QuantizationSpec> {
    match bits {
        0 => Ok(QuantizationSpec::off()),
        2..=16 => Ok(QuantizationSpec { levels: Some(1u32 << bits) }),
        _ => Err(Error::arg("bit depth must be 0 (off) or between 2 and 16")),
    }
}

#[derive(Args)]
pub struct RenderArgs {
    /// Scene: sphere, plane, or wave.
    #[arg(long, default_value = "sphere")]
    scene: String,
    /// Output dataset directory.
    #[arg(long)]
    out: PathBuf,
    /// Number of LEDs on the ring rig.
    #[arg(long, default_value_t = 15)]
    lights: usize,
    /// Ring radius, meters.
    #[arg(long, default_value_t = 0.10)]
    ring_radius: f64,
    /// LED brightness, applied to all channels.
    #[arg(long, default_value_t = 0.1)]
    phi: f64,
    /// LED anisotropy (falloff) exponent.
    #[arg(long, default_value_t = 0.5)]
    mu: f64,
    /// Diffuse albedo as r,g,b.
    #[arg(long, default_value = "0.7,0.6,0.5", value_parser = parse_rgb)]
    albedo: [f64; 3],
    /// Specular lobe weight in [0, 1].
    #[arg(long, default_value_t = 0.0)]
    specular: f64,
    /// Blinn-Phong exponent of the specular lobe.
    #[arg(long, default_value_t = 16.0)]
    shininess: f64,
    /// Highlight tint: 0 white, 1 albedo-colored.
    #[arg(long, default_value_t = 0.0)]
    metallic: f64,
    /// Per-light shadowing probability in [0, 1).
    #[arg(long, default_value_t = 0.0)]
    shadow: f64,
    /// Ambient intensity added per light.
    #[arg(long, default_value_t = 0.0)]
    ambient: f64,
    /// Self-reflection magnitude per light.
    #[arg(long, default_value_t = 0.0)]
    reflection: f64,
    /// Sensor bit depth; 0 renders unquantized.
    #[arg(long, default_value_t = 10)]
    bits: u32,
    #[arg(long, default_value_t = 7)]
    seed: u64,
}

#[derive(Copy, Clone, PartialEq, Eq, ValueEnum)]
enum FamilyArg {
    Lambertian,
    Mixed,
}

impl From<FamilyArg> for crate::sampler::MaterialFamily {
    fn from(f: FamilyArg) -> Self {
        match f {
            FamilyArg::Lambertian => crate::sampler::MaterialFamily::Lambertian,
            FamilyArg::Mixed => crate::sampler::MaterialFamily::Mixed,
        }
    }
}

/// Assemble a record stream from the shared sampling flags.
fn stream_from_flags(
    family: FamilyArg,
    clean: bool,
    calib: &Option<PathBuf>,
    d: usize,
    seed: u64,
) -> Result<StreamConfig> {
    let mut stream = if clean {
        StreamConfig::clean(family.into(), seed)
    } else {
        StreamConfig::general(family.into(), seed)
    };
    if let Some(path) = calib {
        stream.mode = SampleMode::Specific(read_calibration(path)?);
        stream.order = PerturbOrder::Reverse;
    }
    stream.d = d;
    Ok(stream)
}

#[derive(Args)]
pub struct SampleArgs {
    /// Output shard file.
    #[arg(long)]
    out: PathBuf,
    /// Records to generate.
    #[arg(long)]
    count: usize,
    /// Index of the first record in the stream.
    #[arg(long, default_value_t = 0)]
    start: u64,
    #[arg(long, value_enum, default_value_t = FamilyArg::Mixed)]
    family: FamilyArg,
    /// Draw the rig from this calibration file instead of sampling one;
    /// the map side then uses the calibrated parameters verbatim.
    #[arg(long)]
    calib: Option<PathBuf>,
    /// Disable perturbations, global illumination, and quantization.
    #[arg(long)]
    clean: bool,
    /// Observation-map resolution.
    #[arg(long, default_value_t = 32)]
    map_res: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
pub struct TrainArgs {
    /// Output checkpoint file.
    #[arg(long)]
    out: PathBuf,
    /// Records to stream through, each visited once.
    #[arg(long, default_value_t = 200_000)]
    records: u64,
    #[arg(long, default_value_t = 128)]
    batch: usize,
    #[arg(long, default_value_t = 1e-3)]
    lr: f64,
    /// Chunks for loss reporting and divergence decisions.
    #[arg(long, default_value_t = 10)]
    chunks: usize,
    #[arg(long, value_enum, default_value_t = FamilyArg::Mixed)]
    family: FamilyArg,
    /// Train for a specific rig described by this calibration file.
    #[arg(long)]
    calib: Option<PathBuf>,
    /// Stream clean records (no perturbation, gi, or quantization).
    #[arg(long)]
    clean: bool,
    /// Observation-map resolution (network input size).
    #[arg(long, default_value_t = 32)]
    map_res: usize,
    /// Stream seed.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Weight-initialization seed.
    #[arg(long, default_value_t = 1)]
    net_seed: u64,
}

#[derive(Copy, Clone, PartialEq, Eq, ValueEnum)]
enum RegressorArg {
    /// Weighted least squares under a diffuse model.
    Solver,
    /// The trained convolutional network (requires --model).
    Net,
    /// Distant-light baseline: no compensation, fixed directions.
    Naive,
}

#[derive(Args)]
pub struct ReconstructArgs {
    /// Capture dataset directory.
    #[arg(long)]
    data: PathBuf,
    /// Output directory for depth.pfm and normals.pfm.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, value_enum, default_value_t = RegressorArg::Solver)]
    regressor: RegressorArg,
    /// Network checkpoint (with --regressor net).
    #[arg(long)]
    model: Option<PathBuf>,
    /// Compensate/regress/integrate rounds.
    #[arg(long, default_value_t = 2)]
    iterations: usize,
    /// Observation-map resolution; a network checkpoint fixes it.
    #[arg(long)]
    map_res: Option<usize>,
    /// Working distance, meters. Defaults to the ground-truth mean depth
    /// when the dataset carries ground truth.
    #[arg(long)]
    distance: Option<f64>,
    /// Mask erosion radius for the metrics line.
    #[arg(long, default_value_t = 2)]
    interior: usize,
}

#[derive(Args)]
pub struct CalibrateArgs {
    /// Capture directories of known geometry (repeat for several poses).
    /// Each must carry ground-truth depth and normals; the first one's
    /// calibration file is the initial guess.
    #[arg(long, required = true)]
    data: Vec<PathBuf>,
    /// Output calibration file.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 2000)]
    iters: usize,
    #[arg(long, default_value_t = 1e-3)]
    lr: f64,
    /// Diffuse albedo of the calibration target.
    #[arg(long, default_value_t = TARGET_RHO)]
    rho: f64,
    /// Use every stride-th pixel in each direction.
    #[arg(long, default_value_t = 8)]
    stride: usize,
}

#[derive(Args)]
pub struct EvaluateArgs {
    /// Dataset directory holding the ground truth.
    #[arg(long)]
    data: PathBuf,
    /// Reconstructed depth map (PFM).
    #[arg(long)]
    depth: PathBuf,
    /// Reconstructed normal map (PFM).
    #[arg(long)]
    normals: PathBuf,
    /// Mask erosion radius.
    #[arg(long, default_value_t = 2)]
    interior: usize,
}

fn cmd_render(a: &RenderArgs) -> Result<()> {
    let kind = SceneKind::parse(&a.scene)?;
    for (name, v) in [
        ("specular", a.specular),
        ("metallic", a.metallic),
        ("shadow", a.shadow),
    ] {
        if !(0.0..=1.0).contains(&v) {
            return Err(Error::arg(format!("{name} must lie in [0, 1]")));
        }
    }
    if a.albedo.iter().any(|c| !(0.0..=1.0).contains(c)) {
        return Err(Error::arg("albedo components must lie in [0, 1]"));
    }
    if a.ambient < 0.0 || a.reflection < 0.0 || a.shininess <= 0.0 {
        return Err(Error::arg("ambient, reflection, and shininess must be positive"));
    }
    let cam = crate::scenes::default_camera();
    let scene = build_scene(kind, &cam);
    let lights = ring_lights(a.lights, a.ring_radius, a.phi, a.mu)?;
    let material = Material {
        albedo: a.albedo,
        specular_weight: a.specular,
        shininess: a.shininess,
        metallic: a.metallic,
    };
    let gi = GlobalIllumApprox {
        shadow_prob: a.shadow,
        ambient: [a.ambient; 3],
        self_reflection: [a.reflection; 3],
    };
    let images = render_scene(
        &cam,
        &scene.depth,
        &scene.normals,
        &MaterialField::Uniform(material),
        &lights,
        &gi,
        &bits_to_quant(a.bits)?,
        a.seed,
    )?;
    let count = images.len();
    let dataset = Dataset {
        images,
        mask: scene.depth.mask.clone(),
        width: cam.width,
        height: cam.height,
        calib: CalibrationFile::new(cam, lights),
        gt_depth: Some(scene.depth),
        gt_normals: Some(scene.normals),
    };
    save_dataset(&a.out, &dataset)?;
    RunManifest::new("render", Some(a.seed))
        .flag("scene", &a.scene)
        .flag("lights", a.lights)
        .flag("ring_radius", a.ring_radius)
        .flag("phi", a.phi)
        .flag("mu", a.mu)
        .flag("albedo", format!("{},{},{}", a.albedo[0], a.albedo[1], a.albedo[2]))
        .flag("specular", a.specular)
        .flag("shininess", a.shininess)
        .flag("metallic", a.metallic)
        .flag("shadow", a.shadow)
        .flag("ambient", a.ambient)
        .flag("reflection", a.reflection)
        .flag("bits", a.bits)
        .write(&a.out)?;
    println!("wrote {count} captures to {}", a.out.display());
    Ok(())
}

fn cmd_sample(a: &SampleArgs) -> Result<()> {
    let stream = stream_from_flags(a.family, a.clean, &a.calib, a.map_res, a.seed)?;
    let records = record_stream(&stream, a.start, a.count)?;
    let pairs: Vec<_> = records.into_iter().map(|r| (r.map, r.target)).collect();
    write_records(&a.out, a.map_res, &pairs)?;
    RunManifest::new("sample", Some(a.seed))
        .flag("count", a.count)
        .flag("start", a.start)
        .flag("family", if a.family == FamilyArg::Mixed { "mixed" } else { "lambertian" })
        .flag("clean", a.clean)
        .flag("map_res", a.map_res)
        .flag("calib", a.calib.as_deref().unwrap_or(Path::new("")).display())
        .write(&manifest_path_for(&a.out))?;
    println!("wrote {} records to {}", pairs.len(), a.out.display());
    Ok(())
}

fn cmd_train(a: &TrainArgs) -> Result<()> {
    let stream = stream_from_flags(a.family, a.clean, &a.calib, a.map_res, a.seed)?;
    let mut net = CompactNet::new(a.map_res, a.net_seed)?;
    let cfg = TrainConfig {
        records: a.records,
        batch: a.batch,
        lr: a.lr,
        chunks: a.chunks,
        ..Default::default()
    };
    let report = crate::regressor::train(&mut net, &stream, &cfg)?;
    net.save(&a.out)?;
    for (i, loss) in report.chunk_losses.iter().enumerate() {
        println!(
            "chunk {}/{}: mean angular loss {loss:.6} rad",
            i + 1,
            report.chunk_losses.len()
        );
    }
    RunManifest::new("train", Some(a.seed))
        .flag("records", a.records)
        .flag("batch", a.batch)
        .flag("lr", a.lr)
        .flag("chunks", a.chunks)
        .flag("family", if a.family == FamilyArg::Mixed { "mixed" } else { "lambertian" })
        .flag("clean", a.clean)
        .flag("map_res", a.map_res)
        .flag("net_seed", a.net_seed)
        .flag("calib", a.calib.as_deref().unwrap_or(Path::new("")).display())
        .write(&manifest_path_for(&a.out))?;
    println!("saved checkpoint to {}", a.out.display());
    Ok(())
}

fn cmd_reconstruct(a: &ReconstructArgs) -> Result<()> {
    let dataset = load_dataset(&a.data)?;
    let distance = match a.distance {
        Some(d) => d,
        None => dataset
            .gt_depth
            .as_ref()
            .ok_or_else(|| {
                Error::arg("dataset has no ground-truth depth; pass --distance")
            })?
            .mean_depth()?,
    };
    let (regressor, d): (Box<dyn NormalRegressor>, usize) = match a.regressor {
        RegressorArg::Solver | RegressorArg::Naive => {
            (Box::new(LambertianSolver), a.map_res.unwrap_or(32))
        }
        RegressorArg::Net => {
            let path = a
                .model
                .as_ref()
                .ok_or_else(|| Error::arg("--regressor net requires --model"))?;
            let net = CompactNet::load(path)?;
            let d = net.d();
            if let Some(flag_d) = a.map_res {
                if flag_d != d {
                    return Err(Error::arg(format!(
                        "--map-res {flag_d} conflicts with the checkpoint's {d}"
                    )));
                }
            }
            (Box::new(net), d)
        }
    };
    let cfg = ReconstructionConfig {
        iterations: a.iterations,
        d,
        mean_distance: distance,
        integrator: Default::default(),
    };
    let recon = if a.regressor == RegressorArg::Naive {
        naive_reconstruct(&dataset, regressor.as_ref(), &cfg)?
    } else {
        reconstruct(&dataset, regressor.as_ref(), &cfg)?
    };
    fs::create_dir_all(&a.out)?;
    write_depth_pfm(&a.out.join("depth.pfm"), &recon.depth)?;
    write_normals_pfm(&a.out.join("normals.pfm"), &recon.normals)?;
    RunManifest::new("reconstruct", None)
        .flag("data", a.data.display())
        .flag(
            "regressor",
            match a.regressor {
                RegressorArg::Solver => "solver",
                RegressorArg::Net => "net",
                RegressorArg::Naive => "naive",
            },
        )
        .flag("model", a.model.as_deref().unwrap_or(Path::new("")).display())
        .flag("iterations", a.iterations)
        .flag("map_res", d)
        .flag("distance", distance)
        .flag("interior", a.interior)
        .write(&a.out)?;
    println!(
        "wrote depth.pfm and normals.pfm to {}",
        a.out.display()
    );
    if let (Some(gt_d), Some(gt_n)) = (&dataset.gt_depth, &dataset.gt_normals) {
        let m = evaluate(&recon.depth, &recon.normals, gt_d, gt_n, a.interior)?;
        println!("MAE_deg={} MZE_mm={}", m.mae_deg, m.mze_mm);
    }
    Ok(())
}

fn cmd_calibrate(a: &CalibrateArgs) -> Result<()> {
    if a.stride == 0 {
        return Err(Error::arg("stride must be positive"));
    }
    let mut samples = Vec::new();
    let mut rig: Option<CalibrationFile> = None;
    for dir in &a.data {
        let ds = load_dataset(dir)?;
        let gt_depth = ds
            .gt_depth
            .as_ref()
            .ok_or_else(|| Error::arg(format!("{} has no gt_depth.pfm", dir.display())))?;
        let gt_normals = ds
            .gt_normals
            .as_ref()
            .ok_or_else(|| Error::arg(format!("{} has no gt_normals.pfm", dir.display())))?;
        match &rig {
            None => rig = Some(ds.calib.clone()),
            Some(first) => {
                if first.lights.len() != ds.calib.lights.len() {
                    return Err(Error::arg("capture directories disagree in light count"));
                }
            }
        }
        let cam = &ds.calib.camera;
        let mut v = a.stride / 2;
        while v < ds.height {
            let mut u = a.stride / 2;
            while u < ds.width {
                let idx = v * ds.width + u;
                if ds.mask[idx] && gt_depth.mask[idx] && gt_normals.mask[idx] {
                    samples.push(CalibrationSample {
                        point: back_project(cam, u as f64, v as f64, gt_depth.data[idx]),
                        normal: gt_normals.data[idx],
                        intensity: ds.images.iter().map(|img| img.get(u, v)).collect(),
                    });
                }
                u += a.stride;
            }
            v += a.stride;
        }
    }
    let rig = rig.expect("at least one directory is required");
    let problem = CalibrationProblem { samples, rho: a.rho };
    let cfg = CalibConfig {
        iters: a.iters,
        lr: a.lr,
        ..Default::default()
    };
    let outcome = calibrate(&problem, &rig.lights, &cfg)?;
    for w in &outcome.warnings {
        eprintln!("warning: {w}");
    }
    write_calibration(&a.out, &CalibrationFile::new(rig.camera, outcome.lights))?;
    RunManifest::new("calibrate", None)
        .flag("iters", a.iters)
        .flag("lr", a.lr)
        .flag("rho", a.rho)
        .flag("stride", a.stride)
        .flag(
            "data",
            a.data
                .iter()
                .map(|p| p.display().to_string())
                .collect::<Vec<_>>()
                .join(";"),
        )
        .write(&manifest_path_for(&a.out))?;
    println!("residual={}", outcome.mean_abs_residual);
    println!("wrote calibration to {}", a.out.display());
    Ok(())
}

fn cmd_evaluate(a: &EvaluateArgs) -> Result<()> {
    let ds = load_dataset(&a.data)?;
    let gt_depth = ds
        .gt_depth
        .as_ref()
        .ok_or_else(|| Error::arg("dataset has no ground-truth depth"))?;
    let gt_normals = ds
        .gt_normals
        .as_ref()
        .ok_or_else(|| Error::arg("dataset has no ground-truth normals"))?;
    let depth = read_depth_pfm(&a.depth)?;
    let normals = read_normals_pfm(&a.normals)?;
    let m = evaluate(&depth, &normals, gt_depth, gt_normals, a.interior)?;
    println!("MAE_deg={} MZE_mm={}", m.mae_deg, m.mze_mm);
    Ok(())
}

/// Manifest path for a command whose output is a single file.
fn manifest_path_for(out: &Path) -> PathBuf {
    let mut name = out.file_name().unwrap_or_default().to_os_string();
    name.push(".manifest.json");
    out.with_file_name(name)
}

/// Run one parsed command.
pub fn dispatch(command: &Command) -> Result<()> {
    match command {
        Command::Render(a) => cmd_render(a),
        Command::Sample(a) => cmd_sample(a),
        Command::Train(a) => cmd_train(a),
        Command::Reconstruct(a) => cmd_reconstruct(a),
        Command::Calibrate(a) => cmd_calibrate(a),
        Command::Evaluate(a) => cmd_evaluate(a),
    }
}

/// Parse `args` (excluding the program name is fine — pass everything
/// through) and run. Returns the process exit code.
pub fn run_from<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.exit_code() == 0 { 0 } else { 2 };
        }
    };
    if cli.threads > 0 {
        // Ignore failure: the global pool can only be set once per process.
        let _ = rayon::ThreadPoolBuilder::new()
            .num_threads(cli.threads)
            .build_global();
    }
    match dispatch(&cli.command) {
        Ok(()) => 0,
        Err(e @ Error::Argument(_)) => {
            eprintln!("error: {e}");
            2
        }
        Err(e) => {
            eprintln!("error: {e}");
            1
        }
    }
}

/// Entry point of the `nearlight` binary.
pub fn run() -> i32 {
    run_from(std::env::args_os())
}
