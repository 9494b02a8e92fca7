//! Per-pixel observation maps.
//!
//! An observation map is a d x d grid over the (x, y) components of the unit
//! surface-to-light directions seen at one pixel. Each occupied cell holds
//! the brightness-normalized compensated intensity of the lights that fall
//! into it (averaged on collision), and three extra channels broadcast the
//! pixel's viewing vector, giving the d x d x 6 input the normal regressors
//! consume.

use nalgebra::Vector3;

use crate::error::{Error, Result};

/// One compensated sample feeding a map cell.
#[derive(Debug, Clone, Copy)]
pub struct MapSample {
    /// Unit vector from the surface point toward the light, camera frame.
    pub dir: Vector3<f64>,
    /// Attenuation-compensated RGB intensity (still scaled by the light's
    /// brightness; `build_map` divides it out).
    pub j: [f64; 3],
    /// False drops the sample (e.g. the light was ill-posed at this pixel).
    pub valid: bool,
}

/// d x d x 6 observation map: averaged RGB samples plus the broadcast
/// viewing vector.
#[derive(Debug, Clone, PartialEq)]
pub struct ObservationMap {
    pub d: usize,
    /// Row-major cell values, indexed `[iy * d + ix]`.
    rgb: Vec<[f64; 3]>,
    /// Samples accumulated per cell; 0 means unoccupied.
    counts: Vec<u32>,
    /// Viewing vector broadcast over the three view channels.
    pub view: Vector3<f64>,
}

impl ObservationMap {
    #[inline]
    pub fn cell(&self, ix: usize, iy: usize) -> [f64; 3] {
        self.rgb[iy * self.d + ix]
    }

    #[inline]
    pub fn occupied(&self, ix: usize, iy: usize) -> bool {
        self.counts[iy * self.d + ix] > 0
    }

    /// Number of occupied cells.
    pub fn occupancy(&self) -> usize {
        self.counts.iter().filter(|&&c| c > 0).count()
    }

    /// Number of samples averaged into a cell. Maps rebuilt from a tensor
    /// report 1 for every occupied cell (exact counts do not survive
    /// serialization).
    #[inline]
    pub fn count(&self, ix: usize, iy: usize) -> u32 {
        self.counts[iy * self.d + ix]
    }

    /// Direction (x, y) components at the center of a cell.
    #[inline]
    pub fn cell_center(&self, ix: usize, iy: usize) -> (f64, f64) {
        let d = self.d as f64;
        (2.0 * (ix as f64 + 0.5) / d - 1.0, 2.0 * (iy as f64 + 0.5) / d - 1.0)
    }

    /// Iterate over occupied cells as (ix, iy, rgb).
    pub fn occupied_cells(&self) -> impl Iterator<Item = (usize, usize, [f64; 3])> + '_ {
        (0..self.d * self.d).filter_map(move |i| {
            if self.counts[i] > 0 {
                Some((i % self.d, i / self.d, self.rgb[i]))
            } else {
                None
            }
        })
    }

    /// Materialize the d x d x 6 tensor in channel-major order
    /// `[channel][row][column]` with channels (r, g, b, vx, vy, vz).
    pub fn to_tensor(&self) -> Vec<f64> {
        let dd = self.d * self.d;
        let mut t = vec![0.0; dd * 6];
        for i in 0..dd {
            t[i] = self.rgb[i][0];
            t[dd + i] = self.rgb[i][1];
            t[2 * dd + i] = self.rgb[i][2];
        }
        t[3 * dd..4 * dd].fill(self.view.x);
        t[4 * dd..5 * dd].fill(self.view.y);
        t[5 * dd..6 * dd].fill(self.view.z);
        t
    }

    /// Rebuild a map from a channel-major tensor (inverse of `to_tensor`).
    ///
    /// Occupancy is approximated as "any nonzero channel", which is enough
    /// for regression; exact occupancy does not survive serialization.
    pub fn from_tensor(d: usize, tensor: &[f64]) -> Result<Self> {
        let dd = d * d;
        if tensor.len() != dd * 6 {
            return Err(Error::arg(format!(
                "tensor has {} values, expected {} for d = {}",
                tensor.len(),
                dd * 6,
                d
            )));
        }
        let mut rgb = vec![[0.0; 3]; dd];
        let mut counts = vec![0u32; dd];
        for i in 0..dd {
            rgb[i] = [tensor[i], tensor[dd + i], tensor[2 * dd + i]];
            if rgb[i] != [0.0; 3] {
                counts[i] = 1;
            }
        }
        let view = Vector3::new(tensor[3 * dd], tensor[4 * dd], tensor[5 * dd]);
        Ok(ObservationMap { d, rgb, counts, view })
    }
}

/// Grid index of a direction component: `floor(d * (x + 1) / 2)`, clamped
/// into the grid so directions on the +1 boundary land in the last cell.
#[inline]
pub fn cell_index(component: f64, d: usize) -> usize {
    let raw = (d as f64 * (component + 1.0) / 2.0).floor();
    (raw.max(0.0) as usize).min(d - 1)
}

/// Build the observation map of one pixel.
///
/// `samples[m]` and `phi[m]` describe light m: the sample's compensated
/// intensity is divided channel-wise by the light's brightness, then
/// accumulated into the cell addressed by the direction's (x, y)
/// components. Colliding samples are averaged (sum then divide, so the
/// result does not depend on sample order). Invalid or non-finite samples
/// are skipped; unoccupied cells stay zero.
pub fn build_map(
    samples: &[MapSample],
    phi: &[[f64; 3]],
    view: Vector3<f64>,
    d: usize,
) -> Result<ObservationMap> {
    if d < 2 {
        return Err(Error::arg("map resolution must be at least 2"));
    }
    if samples.len() != phi.len() {
        return Err(Error::arg(format!(
            "{} samples but {} brightness entries",
            samples.len(),
            phi.len()
        )));
    }
    let dd = d * d;
    let mut sums = vec![[0.0f64; 3]; dd];
    let mut counts = vec![0u32; dd];
    for (sample, ph) in samples.iter().zip(phi) {
        if !sample.valid {
            continue;
        }
        if ph.iter().any(|p| !(p.is_finite() && *p > 0.0)) {
            return Err(Error::arg("light brightness must be positive and finite"));
        }
        let dir = sample.dir;
        if !(dir.x.is_finite() && dir.y.is_finite()) || sample.j.iter().any(|c| !c.is_finite()) {
            continue;
        }
        debug_assert!((dir.norm() - 1.0).abs() < 1e-6, "sample directions must be unit");
        let ix = cell_index(dir.x, d);
        let iy = cell_index(dir.y, d);
        let cell = iy * d + ix;
        for c in 0..3 {
            sums[cell][c] += sample.j[c] / ph[c];
        }
        counts[cell] += 1;
    }
    let mut rgb = vec![[0.0f64; 3]; dd];
    for i in 0..dd {
        if counts[i] > 0 {
            let k = counts[i] as f64;
            rgb[i] = [sums[i][0] / k, sums[i][1] / k, sums[i][2] / k];
        }
    }
    Ok(ObservationMap { d, rgb, counts, view })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;
    use rand::seq::SliceRandom;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn sample(dir: Vector3<f64>, j: [f64; 3]) -> MapSample {
        MapSample { dir: dir.normalize(), j, valid: true }
    }

    #[test]
    fn brightness_is_divided_out() {
        let s = sample(Vector3::new(0.0, 0.0, -1.0), [0.4, 0.4, 0.4]);
        let map = build_map(&[s], &[[2.0, 2.0, 2.0]], Vector3::new(0.0, 0.0, -1.0), 32).unwrap();
        let (ix, iy) = (cell_index(0.0, 32), cell_index(0.0, 32));
        assert_eq!(map.cell(ix, iy), [0.2, 0.2, 0.2]);
        assert_eq!(map.occupancy(), 1);
    }

    #[test]
    fn cell_addressing_matches_direction_components() {
        // x = 0.5, y = -0.5 at d = 32 lands in cell (24, 8).
        assert_eq!(cell_index(0.5, 32), 24);
        assert_eq!(cell_index(-0.5, 32), 8);
        // Boundary directions are clamped into the grid.
        assert_eq!(cell_index(1.0, 32), 31);
        assert_eq!(cell_index(-1.0, 32), 0);
    }

    #[test]
    fn collisions_are_averaged() {
        let dir = Vector3::new(0.2, 0.1, -1.0).normalize();
        let s1 = MapSample { dir, j: [0.2, 0.4, 0.6], valid: true };
        let s2 = MapSample { dir, j: [0.4, 0.6, 0.8], valid: true };
        let map = build_map(
            &[s1, s2],
            &[[1.0; 3], [1.0; 3]],
            Vector3::new(0.0, 0.0, -1.0),
            32,
        )
        .unwrap();
        let ix = cell_index(dir.x, 32);
        let iy = cell_index(dir.y, 32);
        let got = map.cell(ix, iy);
        assert_relative_eq!(got[0], 0.3, epsilon = 1e-15);
        assert_relative_eq!(got[1], 0.5, epsilon = 1e-15);
        assert_relative_eq!(got[2], 0.7, epsilon = 1e-15);
        assert_eq!(map.occupancy(), 1);
    }

    #[test]
    fn invalid_samples_are_skipped() {
        let good = sample(Vector3::new(0.0, 0.0, -1.0), [0.5; 3]);
        let bad = MapSample { valid: false, ..good };
        let nan = MapSample { j: [f64::NAN; 3], ..good };
        let map = build_map(
            &[bad, nan],
            &[[1.0; 3], [1.0; 3]],
            Vector3::new(0.0, 0.0, -1.0),
            16,
        )
        .unwrap();
        assert_eq!(map.occupancy(), 0);
        assert!(map.rgb.iter().all(|c| *c == [0.0; 3]));
    }

    #[test]
    fn zero_intensity_is_a_real_observation() {
        let s = sample(Vector3::new(0.3, 0.0, -1.0), [0.0; 3]);
        let map = build_map(&[s], &[[1.0; 3]], Vector3::new(0.0, 0.0, -1.0), 16).unwrap();
        assert_eq!(map.occupancy(), 1);
    }

    #[test]
    fn tensor_roundtrip_preserves_values() {
        let samples = vec![
            sample(Vector3::new(0.1, 0.2, -1.0), [0.3, 0.2, 0.1]),
            sample(Vector3::new(-0.4, 0.0, -1.0), [0.6, 0.5, 0.4]),
        ];
        let view = Vector3::new(0.05, -0.02, -1.0).normalize();
        let map = build_map(&samples, &[[1.0; 3], [2.0; 3]], view, 8).unwrap();
        let t = map.to_tensor();
        assert_eq!(t.len(), 8 * 8 * 6);
        let back = ObservationMap::from_tensor(8, &t).unwrap();
        for iy in 0..8 {
            for ix in 0..8 {
                assert_eq!(map.cell(ix, iy), back.cell(ix, iy));
            }
        }
        assert_relative_eq!((back.view - view).norm(), 0.0, epsilon = 1e-15);
    }

    proptest! {
        #[test]
        fn scaling_j_and_phi_together_is_invariant(
            scale in 0.1..10.0f64,
            jx in 0.0..1.0f64,
            dirx in -0.9..0.9f64,
            diry in -0.9..0.9f64,
            phi in 0.25..4.0f64,
        ) {
            let dir = Vector3::new(dirx, diry, -1.0).normalize();
            let s = MapSample { dir, j: [jx; 3], valid: true };
            let scaled = MapSample { j: [jx * scale; 3], ..s };
            let view = Vector3::new(0.0, 0.0, -1.0);
            let a = build_map(&[s], &[[phi; 3]], view, 32).unwrap();
            let b = build_map(&[scaled], &[[phi * scale; 3]], view, 32).unwrap();
            let ix = cell_index(dir.x, 32);
            let iy = cell_index(dir.y, 32);
            let (ca, cb) = (a.cell(ix, iy), b.cell(ix, iy));
            for c in 0..3 {
                prop_assert!((ca[c] - cb[c]).abs() <= 1e-12 * ca[c].abs().max(1.0));
            }
        }

        #[test]
        fn sample_order_does_not_matter(seed in 0u64..1000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut samples: Vec<MapSample> = (0..40)
                .map(|i| {
                    let x = ((i * 7919) % 200) as f64 / 100.0 - 1.0;
                    let y = ((i * 104729) % 200) as f64 / 100.0 - 1.0;
                    sample(Vector3::new(x * 0.7, y * 0.7, -1.0), [0.1 + 0.01 * i as f64; 3])
                })
                .collect();
            let phi = vec![[1.0f64; 3]; samples.len()];
            let view = Vector3::new(0.0, 0.0, -1.0);
            let before = build_map(&samples, &phi, view, 16).unwrap();
            samples.shuffle(&mut rng);
            let after = build_map(&samples, &phi, view, 16).unwrap();
            for iy in 0..16 {
                for ix in 0..16 {
                    let (a, b) = (before.cell(ix, iy), after.cell(ix, iy));
                    for c in 0..3 {
                        prop_assert!((a[c] - b[c]).abs() < 1e-12);
                    }
                }
            }
        }
    }
}
