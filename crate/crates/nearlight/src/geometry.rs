//! Camera model and dense depth/normal grids.
//!
//! Conventions used everywhere in this crate:
//! - camera at the origin, x right, y down, z forward (into the scene);
//! - "depth" is the z coordinate of the surface point, not ray length;
//! - pixel (u, v) indexes column u and row v, with (cx, cy) in pixel units;
//! - surface normals are unit vectors with non-positive z (facing the camera);
//! - viewing vectors point from the surface toward the camera.

use nalgebra::Vector3;

use crate::error::{Error, Result};

/// Pinhole camera intrinsics in pixel units.
#[derive(Debug, Clone, PartialEq)]
pub struct CameraIntrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
}

impl CameraIntrinsics {
    pub fn new(fx: f64, fy: f64, cx: f64, cy: f64, width: usize, height: usize) -> Result<Self> {
        if !(fx.is_finite() && fy.is_finite() && cx.is_finite() && cy.is_finite()) {
            return Err(Error::arg("camera intrinsics must be finite"));
        }
        if fx <= 0.0 || fy <= 0.0 {
            return Err(Error::arg("focal lengths must be positive"));
        }
        if width == 0 || height == 0 {
            return Err(Error::arg("image dimensions must be nonzero"));
        }
        Ok(CameraIntrinsics { fx, fy, cx, cy, width, height })
    }

    /// Focal length normalized by half the image width.
    pub fn f_norm(&self) -> f64 {
        self.fx / (self.width as f64 / 2.0)
    }
}

/// Dense per-pixel depth with a validity mask.
#[derive(Debug, Clone, PartialEq)]
pub struct DepthMap {
    pub width: usize,
    pub height: usize,
    /// Row-major z values in meters; meaningful only where `mask` is set.
    pub data: Vec<f64>,
    pub mask: Vec<bool>,
}

impl DepthMap {
    pub fn new(width: usize, height: usize) -> Self {
        DepthMap {
            width,
            height,
            data: vec![0.0; width * height],
            mask: vec![false; width * height],
        }
    }

    #[inline]
    pub fn idx(&self, u: usize, v: usize) -> usize {
        debug_assert!(u < self.width && v < self.height);
        v * self.width + u
    }

    #[inline]
    pub fn get(&self, u: usize, v: usize) -> f64 {
        self.data[v * self.width + u]
    }

    #[inline]
    pub fn is_valid(&self, u: usize, v: usize) -> bool {
        self.mask[v * self.width + u]
    }

    pub fn set(&mut self, u: usize, v: usize, z: f64) {
        let i = self.idx(u, v);
        self.data[i] = z;
        self.mask[i] = true;
    }

    /// Mean depth over the valid mask.
    pub fn mean_depth(&self) -> Result<f64> {
        let mut sum = 0.0;
        let mut n = 0usize;
        for (z, &m) in self.data.iter().zip(&self.mask) {
            if m {
                sum += z;
                n += 1;
            }
        }
        if n == 0 {
            return Err(Error::domain("depth map has an empty mask"));
        }
        Ok(sum / n as f64)
    }

    /// Centroid (u, v) of the valid mask in pixel coordinates.
    pub fn mask_centroid(&self) -> Result<(f64, f64)> {
        let mut su = 0.0;
        let mut sv = 0.0;
        let mut n = 0usize;
        for v in 0..self.height {
            for u in 0..self.width {
                if self.mask[v * self.width + u] {
                    su += u as f64;
                    sv += v as f64;
                    n += 1;
                }
            }
        }
        if n == 0 {
            return Err(Error::domain("depth map has an empty mask"));
        }
        Ok((su / n as f64, sv / n as f64))
    }
}

/// Dense per-pixel unit normals with a validity mask.
#[derive(Debug, Clone, PartialEq)]
pub struct NormalMap {
    pub width: usize,
    pub height: usize,
    /// Row-major unit normals in the camera frame, z-component <= 0.
    pub data: Vec<Vector3<f64>>,
    pub mask: Vec<bool>,
}

impl NormalMap {
    pub fn new(width: usize, height: usize) -> Self {
        NormalMap {
            width,
            height,
            data: vec![Vector3::zeros(); width * height],
            mask: vec![false; width * height],
        }
    }

    #[inline]
    pub fn idx(&self, u: usize, v: usize) -> usize {
        debug_assert!(u < self.width && v < self.height);
        v * self.width + u
    }

    #[inline]
    pub fn get(&self, u: usize, v: usize) -> Vector3<f64> {
        self.data[v * self.width + u]
    }

    #[inline]
    pub fn is_valid(&self, u: usize, v: usize) -> bool {
        self.mask[v * self.width + u]
    }

    pub fn set(&mut self, u: usize, v: usize, n: Vector3<f64>) {
        let i = self.idx(u, v);
        self.data[i] = n;
        self.mask[i] = true;
    }
}

/// Scene point on the ray through pixel (u, v) at depth z.
#[inline]
pub fn back_project(cam: &CameraIntrinsics, u: f64, v: f64, z: f64) -> Vector3<f64> {
    Vector3::new((u - cam.cx) * z / cam.fx, (v - cam.cy) * z / cam.fy, z)
}

/// Pixel coordinates of a scene point; the point must have positive depth.
#[inline]
pub fn project(cam: &CameraIntrinsics, x: &Vector3<f64>) -> (f64, f64) {
    debug_assert!(x.z > 0.0, "projected points must lie in front of the camera");
    (cam.fx * x.x / x.z + cam.cx, cam.fy * x.y / x.z + cam.cy)
}

/// Unit vector from the surface point under pixel (u, v) toward the camera.
///
/// Depends only on the pixel ray, not on depth; its z-component is always
/// negative.
#[inline]
pub fn viewing_vector(cam: &CameraIntrinsics, u: f64, v: f64) -> Vector3<f64> {
    let ray = Vector3::new((u - cam.cx) / cam.fx, (v - cam.cy) / cam.fy, 1.0);
    -ray.normalize()
}

/// Constant-depth initialization over an existing mask.
pub fn flat_plane_init(mask: &[bool], width: usize, height: usize, distance: f64) -> Result<DepthMap> {
    if mask.len() != width * height {
        return Err(Error::arg("mask length does not match dimensions"));
    }
    if !(distance.is_finite() && distance > 0.0) {
        return Err(Error::arg("plane distance must be positive"));
    }
    let mut depth = DepthMap::new(width, height);
    for (i, &m) in mask.iter().enumerate() {
        if m {
            depth.data[i] = distance;
            depth.mask[i] = true;
        }
    }
    Ok(depth)
}

/// Per-pixel normals from a depth map by differencing back-projected points.
///
/// Tangents along u and v come from central differences where both neighbors
/// are valid and one-sided differences at mask boundaries; the normal is their
/// cross product, oriented toward the camera (z <= 0). Pixels without a valid
/// neighbor pair along either axis, or with a degenerate cross product, are
/// masked out.
pub fn normals_from_depth(cam: &CameraIntrinsics, depth: &DepthMap) -> NormalMap {
    let (w, h) = (depth.width, depth.height);
    let mut normals = NormalMap::new(w, h);
    let point = |u: usize, v: usize| back_project(cam, u as f64, v as f64, depth.get(u, v));

    for v in 0..h {
        for u in 0..w {
            if !depth.is_valid(u, v) {
                continue;
            }
            let left = u > 0 && depth.is_valid(u - 1, v);
            let right = u + 1 < w && depth.is_valid(u + 1, v);
            let up = v > 0 && depth.is_valid(u, v - 1);
            let down = v + 1 < h && depth.is_valid(u, v + 1);

            let tu = match (left, right) {
                (true, true) => (point(u + 1, v) - point(u - 1, v)) / 2.0,
                (false, true) => point(u + 1, v) - point(u, v),
                (true, false) => point(u, v) - point(u - 1, v),
                (false, false) => continue,
            };
            let tv = match (up, down) {
                (true, true) => (point(u, v + 1) - point(u, v - 1)) / 2.0,
                (false, true) => point(u, v + 1) - point(u, v),
                (true, false) => point(u, v) - point(u, v - 1),
                (false, false) => continue,
            };

            let cross = tu.cross(&tv);
            let norm = cross.norm();
            if norm < 1e-14 || !norm.is_finite() {
                continue;
            }
            let mut n = cross / norm;
            if n.z > 0.0 {
                n = -n;
            }
            normals.set(u, v, n);
        }
    }
    normals
}
