//! File formats: 16-bit PNG stacks, PFM float maps, calibration text files,
//! the on-disk dataset layout, and packed training-record shards.
//!
//! A dataset directory holds one 16-bit linear PNG per light
//! (`light_000.png`, `light_001.png`, ...), an 8-bit `mask.png` (nonzero
//! means valid), a `calib.txt` with camera and per-light parameters, and
//! optionally `gt_depth.pfm` / `gt_normals.pfm` ground truth.

use std::fs;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use nalgebra::Vector3;

use crate::error::{Error, Result};
use crate::geometry::{CameraIntrinsics, DepthMap, NormalMap};
use crate::lighting::PointLight;
use crate::obsmap::ObservationMap;
use crate::render::RgbImageF;

// ---------------------------------------------------------------------------
// 16-bit PNG images and masks

/// Write a linear RGB image as a 16-bit PNG; values are clamped to [0, 1]
/// and scaled by 65535.
pub fn write_image16(path: &Path, img: &RgbImageF) -> Result<()> {
    let mut buf = image::ImageBuffer::<image::Rgb<u16>, Vec<u16>>::new(
        img.width as u32,
        img.height as u32,
    );
    for (u, v, px) in buf.enumerate_pixels_mut() {
        let rgb = img.get(u as usize, v as usize);
        let quant = |x: f64| (x.clamp(0.0, 1.0) * 65535.0).round() as u16;
        *px = image::Rgb([quant(rgb[0]), quant(rgb[1]), quant(rgb[2])]);
    }
    buf.save(path)?;
    Ok(())
}

/// Read a 16-bit (or 8-bit) PNG into linear RGB in [0, 1].
pub fn read_image16(path: &Path) -> Result<RgbImageF> {
    let dynimg = image::open(path)?;
    let rgb16 = dynimg.to_rgb16();
    let mut img = RgbImageF::new(rgb16.width() as usize, rgb16.height() as usize);
    for (u, v, px) in rgb16.enumerate_pixels() {
        img.set(
            u as usize,
            v as usize,
            [
                px.0[0] as f64 / 65535.0,
                px.0[1] as f64 / 65535.0,
                px.0[2] as f64 / 65535.0,
            ],
        );
    }
    Ok(img)
}

/// Write a validity mask as an 8-bit grayscale PNG (255 = valid).
pub fn write_mask(path: &Path, mask: &[bool], width: usize, height: usize) -> Result<()> {
    if mask.len() != width * height {
        return Err(Error::arg("mask length does not match dimensions"));
    }
    let mut buf = image::GrayImage::new(width as u32, height as u32);
    for (u, v, px) in buf.enumerate_pixels_mut() {
        *px = image::Luma([if mask[v as usize * width + u as usize] { 255 } else { 0 }]);
    }
    buf.save(path)?;
    Ok(())
}

/// Read a mask PNG; any nonzero pixel is valid.
pub fn read_mask(path: &Path) -> Result<(Vec<bool>, usize, usize)> {
    let img = image::open(path)?.to_luma8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let mask = img.pixels().map(|p| p.0[0] != 0).collect();
    Ok((mask, w, h))
}

// ---------------------------------------------------------------------------
// PFM float maps

/// Write a 1- or 3-channel float map as little-endian PFM (scale -1.0).
///
/// PFM stores rows bottom-to-top; NaN values are refused because readers
/// cannot distinguish them from damage.
pub fn write_pfm(path: &Path, data: &[f32], width: usize, height: usize, channels: usize) -> Result<()> {
    if channels != 1 && channels != 3 {
        return Err(Error::arg("PFM supports 1 or 3 channels"));
    }
    if data.len() != width * height * channels {
        return Err(Error::arg("PFM data length does not match dimensions"));
    }
    if data.iter().any(|v| v.is_nan()) {
        return Err(Error::domain("refusing to write NaN values to PFM"));
    }
    let file = fs::File::create(path)?;
    let mut out = BufWriter::new(file);
    let tag = if channels == 3 { "PF" } else { "Pf" };
    write!(out, "{tag}\n{width} {height}\n-1.0\n")?;
    for row in (0..height).rev() {
        for v in &data[row * width * channels..(row + 1) * width * channels] {
            out.write_all(&v.to_le_bytes())?;
        }
    }
    out.flush()?;
    Ok(())
}

/// Parsed PFM contents, rows already flipped to top-to-bottom order.
pub struct Pfm {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    pub data: Vec<f32>,
}

/// Read a PFM file, handling both little-endian (negative scale) and
/// big-endian (positive scale) payloads.
pub fn read_pfm(path: &Path) -> Result<Pfm> {
    let file = fs::File::open(path)?;
    let mut reader = BufReader::new(file);

    let read_token = |reader: &mut BufReader<fs::File>| -> Result<String> {
        // Tokens are separated by whitespace (including newlines).
        let mut token = Vec::new();
        let mut byte = [0u8; 1];
        loop {
            if reader.read(&mut byte)? == 0 {
                return Err(Error::parse(path, "truncated header"));
            }
            if byte[0].is_ascii_whitespace() {
                if token.is_empty() {
                    continue;
                }
                break;
            }
            token.push(byte[0]);
        }
        Ok(String::from_utf8_lossy(&token).into_owned())
    };

    let tag = read_token(&mut reader)?;
    let channels = match tag.as_str() {
        "PF" => 3,
        "Pf" => 1,
        other => return Err(Error::parse(path, format!("bad PFM tag '{other}'"))),
    };
    let width: usize = read_token(&mut reader)?
        .parse()
        .map_err(|_| Error::parse(path, "bad width"))?;
    let height: usize = read_token(&mut reader)?
        .parse()
        .map_err(|_| Error::parse(path, "bad height"))?;
    let scale: f64 = read_token(&mut reader)?
        .parse()
        .map_err(|_| Error::parse(path, "bad scale"))?;
    if width == 0 || height == 0 || width.saturating_mul(height) > (1 << 30) {
        return Err(Error::parse(path, "unreasonable dimensions"));
    }
    let little_endian = scale < 0.0;

    let count = width * height * channels;
    let mut raw = vec![0u8; count * 4];
    reader
        .read_exact(&mut raw)
        .map_err(|_| Error::parse(path, "truncated payload"))?;
    let mut bottom_up = Vec::with_capacity(count);
    for chunk in raw.chunks_exact(4) {
        let bytes = [chunk[0], chunk[1], chunk[2], chunk[3]];
        bottom_up.push(if little_endian {
            f32::from_le_bytes(bytes)
        } else {
            f32::from_be_bytes(bytes)
        });
    }
    // Flip rows to top-to-bottom.
    let mut data = Vec::with_capacity(count);
    for row in (0..height).rev() {
        data.extend_from_slice(&bottom_up[row * width * channels..(row + 1) * width * channels]);
    }
    Ok(Pfm { width, height, channels, data })
}

/// Write a depth map as 1-channel PFM; invalid pixels become 0.
pub fn write_depth_pfm(path: &Path, depth: &DepthMap) -> Result<()> {
    let data: Vec<f32> = depth
        .data
        .iter()
        .zip(&depth.mask)
        .map(|(z, &m)| if m { *z as f32 } else { 0.0 })
        .collect();
    write_pfm(path, &data, depth.width, depth.height, 1)
}

/// Read a depth map from 1-channel PFM; non-positive or non-finite pixels
/// are masked out.
pub fn read_depth_pfm(path: &Path) -> Result<DepthMap> {
    let pfm = read_pfm(path)?;
    if pfm.channels != 1 {
        return Err(Error::parse(path, "depth PFM must have one channel"));
    }
    let mut depth = DepthMap::new(pfm.width, pfm.height);
    for (i, &z) in pfm.data.iter().enumerate() {
        if z.is_finite() && z > 0.0 {
            depth.data[i] = z as f64;
            depth.mask[i] = true;
        }
    }
    Ok(depth)
}

/// Write a normal map as 3-channel PFM; invalid pixels become 0.
pub fn write_normals_pfm(path: &Path, normals: &NormalMap) -> Result<()> {
    let mut data = Vec::with_capacity(normals.data.len() * 3);
    for (n, &m) in normals.data.iter().zip(&normals.mask) {
        if m {
            data.extend_from_slice(&[n.x as f32, n.y as f32, n.z as f32]);
        } else {
            data.extend_from_slice(&[0.0, 0.0, 0.0]);
        }
    }
    write_pfm(path, &data, normals.width, normals.height, 3)
}

/// Read a normal map from 3-channel PFM; near-zero vectors are masked out,
/// everything else is renormalized.
pub fn read_normals_pfm(path: &Path) -> Result<NormalMap> {
    let pfm = read_pfm(path)?;
    if pfm.channels != 3 {
        return Err(Error::parse(path, "normal PFM must have three channels"));
    }
    let mut normals = NormalMap::new(pfm.width, pfm.height);
    for i in 0..pfm.width * pfm.height {
        let n = Vector3::new(
            pfm.data[3 * i] as f64,
            pfm.data[3 * i + 1] as f64,
            pfm.data[3 * i + 2] as f64,
        );
        let norm = n.norm();
        if norm.is_finite() && norm > 1e-6 {
            normals.data[i] = n / norm;
            normals.mask[i] = true;
        }
    }
    Ok(normals)
}

// ---------------------------------------------------------------------------
// Calibration files

/// Camera plus per-LED parameters, as stored in `calib.txt`.
#[derive(Debug, Clone, PartialEq)]
pub struct CalibrationFile {
    pub version: u32,
    pub camera: CameraIntrinsics,
    pub lights: Vec<PointLight>,
}

pub const CALIBRATION_VERSION: u32 = 1;

impl CalibrationFile {
    pub fn new(camera: CameraIntrinsics, lights: Vec<PointLight>) -> Self {
        CalibrationFile { version: CALIBRATION_VERSION, camera, lights }
    }
}

/// Write a calibration file. The format is line-oriented text:
///
/// ```text
/// version 1
/// camera fx 450 fy 450 cx 128 cy 128 width 256 height 256
/// lights 2
/// light 0 position -0.1 0 0 phi 0.1 0.1 0.1 direction 0 0 1 mu 0.5
/// light 1 position 0.1 0 0 phi 0.1 0.1 0.1 direction 0 0 1 mu 0.5
/// ```
///
/// Floats use Rust's shortest round-trip formatting, so write/read is an
/// exact identity.
pub fn write_calibration(path: &Path, calib: &CalibrationFile) -> Result<()> {
    let mut out = String::new();
    out.push_str(&format!("version {}\n", calib.version));
    let c = &calib.camera;
    out.push_str(&format!(
        "camera fx {} fy {} cx {} cy {} width {} height {}\n",
        c.fx, c.fy, c.cx, c.cy, c.width, c.height
    ));
    out.push_str(&format!("lights {}\n", calib.lights.len()));
    for (i, l) in calib.lights.iter().enumerate() {
        out.push_str(&format!(
            "light {} position {} {} {} phi {} {} {} direction {} {} {} mu {}\n",
            i,
            l.position.x,
            l.position.y,
            l.position.z,
            l.phi[0],
            l.phi[1],
            l.phi[2],
            l.direction.x,
            l.direction.y,
            l.direction.z,
            l.mu
        ));
    }
    fs::write(path, out)?;
    Ok(())
}

/// Read a calibration file written by [`write_calibration`].
pub fn read_calibration(path: &Path) -> Result<CalibrationFile> {
    let text = fs::read_to_string(path)?;
    let all: Vec<&str> = text.split_whitespace().collect();
    let mut pos = 0usize;
    let mut next = |what: &str| -> Result<&str> {
        let t = all
            .get(pos)
            .ok_or_else(|| Error::parse(path, format!("missing {what}")))?;
        pos += 1;
        Ok(t)
    };
    macro_rules! expect {
        ($word:expr) => {{
            let t = next($word)?;
            if t != $word {
                return Err(Error::parse(path, format!("expected '{}', found '{t}'", $word)));
            }
        }};
    }
    macro_rules! num {
        ($ty:ty, $what:expr) => {
            next($what)?
                .parse::<$ty>()
                .map_err(|_| Error::parse(path, concat!("bad ", $what)))?
        };
    }

    expect!("version");
    let version: u32 = num!(u32, "version");
    if version != CALIBRATION_VERSION {
        return Err(Error::parse(path, format!("unsupported version {version}")));
    }
    expect!("camera");
    expect!("fx");
    let fx = num!(f64, "fx");
    expect!("fy");
    let fy = num!(f64, "fy");
    expect!("cx");
    let cx = num!(f64, "cx");
    expect!("cy");
    let cy = num!(f64, "cy");
    expect!("width");
    let width = num!(usize, "width");
    expect!("height");
    let height = num!(usize, "height");
    let camera = CameraIntrinsics::new(fx, fy, cx, cy, width, height)
        .map_err(|e| Error::parse(path, e.to_string()))?;

    expect!("lights");
    let count: usize = num!(usize, "light count");
    let mut lights = Vec::with_capacity(count);
    for i in 0..count {
        expect!("light");
        let idx: usize = num!(usize, "light index");
        if idx != i {
            return Err(Error::parse(path, format!("light {i} has index {idx}")));
        }
        expect!("position");
        let position = Vector3::new(num!(f64, "position"), num!(f64, "position"), num!(f64, "position"));
        expect!("phi");
        let phi = [num!(f64, "phi"), num!(f64, "phi"), num!(f64, "phi")];
        expect!("direction");
        let direction = Vector3::new(
            num!(f64, "direction"),
            num!(f64, "direction"),
            num!(f64, "direction"),
        );
        expect!("mu");
        let mu = num!(f64, "mu");
        let mut light = PointLight::new(position, phi, direction, mu)
            .map_err(|e| Error::parse(path, format!("light {i}: {e}")))?;
        if (direction.norm() - 1.0).abs() < 1e-12 {
            // Already unit length: keep the stored bytes so that
            // write -> read -> write is an exact identity.
            light.direction = direction;
        }
        lights.push(light);
    }
    if pos != all.len() {
        return Err(Error::parse(path, "trailing content after last light"));
    }
    Ok(CalibrationFile { version, camera, lights })
}

// ---------------------------------------------------------------------------
// Dataset directories

/// An in-memory capture dataset.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub images: Vec<RgbImageF>,
    pub mask: Vec<bool>,
    pub width: usize,
    pub height: usize,
    pub calib: CalibrationFile,
    pub gt_depth: Option<DepthMap>,
    pub gt_normals: Option<NormalMap>,
}

/// File name of the capture under light `m`.
pub fn light_file_name(m: usize) -> String {
    format!("light_{m:03}.png")
}

/// Save a dataset directory (creates it if needed).
pub fn save_dataset(dir: &Path, dataset: &Dataset) -> Result<()> {
    fs::create_dir_all(dir)?;
    if dataset.images.len() != dataset.calib.lights.len() {
        return Err(Error::arg("image count does not match light count"));
    }
    for (m, img) in dataset.images.iter().enumerate() {
        write_image16(&dir.join(light_file_name(m)), img)?;
    }
    write_mask(&dir.join("mask.png"), &dataset.mask, dataset.width, dataset.height)?;
    write_calibration(&dir.join("calib.txt"), &dataset.calib)?;
    if let Some(depth) = &dataset.gt_depth {
        write_depth_pfm(&dir.join("gt_depth.pfm"), depth)?;
    }
    if let Some(normals) = &dataset.gt_normals {
        write_normals_pfm(&dir.join("gt_normals.pfm"), normals)?;
    }
    Ok(())
}

/// Load a dataset directory; ground truth is optional.
pub fn load_dataset(dir: &Path) -> Result<Dataset> {
    let calib = read_calibration(&dir.join("calib.txt"))?;
    let (mask, width, height) = read_mask(&dir.join("mask.png"))?;
    let mut images = Vec::with_capacity(calib.lights.len());
    for m in 0..calib.lights.len() {
        let path = dir.join(light_file_name(m));
        if !path.exists() {
            return Err(Error::parse(
                dir,
                format!("calibration lists {} lights but {} is missing", calib.lights.len(), light_file_name(m)),
            ));
        }
        let img = read_image16(&path)?;
        if img.width != width || img.height != height {
            return Err(Error::parse(&path, "image size differs from the mask"));
        }
        images.push(img);
    }
    let gt_depth = {
        let p = dir.join("gt_depth.pfm");
        if p.exists() { Some(read_depth_pfm(&p)?) } else { None }
    };
    let gt_normals = {
        let p = dir.join("gt_normals.pfm");
        if p.exists() { Some(read_normals_pfm(&p)?) } else { None }
    };
    Ok(Dataset { images, mask, width, height, calib, gt_depth, gt_normals })
}

// ---------------------------------------------------------------------------
// Training-record shards

/// Write training records as one shard: a small header followed by packed
/// little-endian f32 values, each record being the d*d*6 map tensor and the
/// 3-vector target.
pub fn write_records(path: &Path, d: usize, records: &[(ObservationMap, Vector3<f64>)]) -> Result<()> {
    let file = fs::File::create(path)?;
    let mut out = BufWriter::new(file);
    out.write_all(&(d as u32).to_le_bytes())?;
    out.write_all(&(records.len() as u32).to_le_bytes())?;
    for (map, target) in records {
        if map.d != d {
            return Err(Error::arg("record map resolution differs from the shard header"));
        }
        for v in map.to_tensor() {
            out.write_all(&(v as f32).to_le_bytes())?;
        }
        for c in [target.x, target.y, target.z] {
            out.write_all(&(c as f32).to_le_bytes())?;
        }
    }
    out.flush()?;
    Ok(())
}

/// Read a record shard written by [`write_records`].
pub fn read_records(path: &Path) -> Result<(usize, Vec<(ObservationMap, Vector3<f64>)>)> {
    let mut raw = Vec::new();
    fs::File::open(path)?.read_to_end(&mut raw)?;
    if raw.len() < 8 {
        return Err(Error::parse(path, "missing header"));
    }
    let d = u32::from_le_bytes([raw[0], raw[1], raw[2], raw[3]]) as usize;
    let count = u32::from_le_bytes([raw[4], raw[5], raw[6], raw[7]]) as usize;
    if d < 2 || d > 1024 {
        return Err(Error::parse(path, format!("unreasonable map resolution {d}")));
    }
    let rec_len = d * d * 6 + 3;
    let expected = 8 + count * rec_len * 4;
    if raw.len() != expected {
        return Err(Error::parse(
            path,
            format!("file has {} bytes, expected {expected}", raw.len()),
        ));
    }
    let mut records = Vec::with_capacity(count);
    let mut offset = 8;
    let mut tensor = vec![0.0f64; d * d * 6];
    for _ in 0..count {
        for t in tensor.iter_mut() {
            *t = f32::from_le_bytes(raw[offset..offset + 4].try_into().unwrap()) as f64;
            offset += 4;
        }
        let mut target = [0.0f64; 3];
        for t in target.iter_mut() {
            *t = f32::from_le_bytes(raw[offset..offset + 4].try_into().unwrap()) as f64;
            offset += 4;
        }
        records.push((
            ObservationMap::from_tensor(d, &tensor)?,
            Vector3::new(target[0], target[1], target[2]),
        ));
    }
    Ok((d, records))
}

/// Serialize a run manifest (command, seed, version, flags) as stable JSON
/// next to the outputs of a CLI invocation.
#[derive(Debug, Clone, serde::Serialize)]
pub struct RunManifest {
    pub command: String,
    pub version: String,
    pub seed: Option<u64>,
    pub flags: std::collections::BTreeMap<String, String>,
}

impl RunManifest {
    pub fn new(command: &str, seed: Option<u64>) -> Self {
        RunManifest {
            command: command.to_string(),
            version: env!("CARGO_PKG_VERSION").to_string(),
            seed,
            flags: std::collections::BTreeMap::new(),
        }
    }

    pub fn flag(mut self, key: &str, value: impl ToString) -> Self {
        self.flags.insert(key.to_string(), value.to_string());
        self
    }

    /// Write the manifest as `manifest.json` in `dir` (or to the exact path
    /// if it ends with `.json`).
    pub fn write(&self, target: &Path) -> Result<PathBuf> {
        let path = if target.extension().map_or(false, |e| e == "json") {
            target.to_path_buf()
        } else {
            target.join("manifest.json")
        };
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent)?;
        }
        let json = serde_json::to_string_pretty(self)
            .map_err(|e| Error::domain(format!("manifest serialization failed: {e}")))?;
        fs::write(&path, json + "\n")?;
        Ok(path)
    }
}
