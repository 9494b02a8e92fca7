//! Compact convolutional network mapping observation maps to unit normals.
//!
//! Fixed architecture: four 3x3 convolutions (channels 7 -> 12 -> 24 -> 48
//! -> 48, zero padding, stride 1), each followed by SiLU and 2x2 max
//! pooling, then two dense layers (hidden width 640) and L2 normalization
//! of the 3-vector output. The seven input channels are the three map
//! colors (each normalized by its mean over occupied cells), the constant
//! viewing direction, and cell occupancy. For d = 32 this is 1.6e5
//! parameters. All math is f64; checkpoints store weights as little-endian
//! f32, and saving rounds the live weights to f32 precision so a reloaded
//! network predicts bit-identically to the one that was saved.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read as IoRead, Write as IoWrite};
use std::path::Path;

use nalgebra::{DMatrix, DVector, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::obsmap::ObservationMap;
use crate::sampler::TrainingRecord;

use super::{angular_loss, angular_loss_grad};

/// Channel counts through the convolutional stages (input first).
pub const CHANNELS: [usize; 5] = [7, 12, 24, 48, 48];
/// Width of the hidden dense layer.
pub const FC_HIDDEN: usize = 640;
const POOLS: usize = 4;
const MAGIC: &[u8; 6] = b"NLNET\0";
const VERSION: u32 = 1;

/// Training parameters echoed into a checkpoint for provenance.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainingEcho {
    pub seed: u64,
    pub records: u64,
    pub batch: u32,
    pub lr: f64,
}

#[derive(Debug, Clone)]
struct Conv3x3 {
    in_ch: usize,
    out_ch: usize,
    /// out_ch x (in_ch * 9).
    w: DMatrix<f64>,
    b: DVector<f64>,
}

#[derive(Debug, Clone)]
struct Dense {
    /// out x in.
    w: DMatrix<f64>,
    b: DVector<f64>,
}

/// The network. Construct with [`CompactNet::new`], train with
/// [`super::train`], persist with [`CompactNet::save`] / [`CompactNet::load`].
#[derive(Debug, Clone)]
pub struct CompactNet {
    d: usize,
    convs: Vec<Conv3x3>,
    fc1: Dense,
    fc2: Dense,
    /// Provenance of the last completed training run, if any.
    pub echo: Option<TrainingEcho>,
}

/// Parameter gradients with the same shapes as the network.
#[derive(Debug, Clone)]
pub struct NetGrads {
    convs: Vec<(DMatrix<f64>, DVector<f64>)>,
    fc1: (DMatrix<f64>, DVector<f64>),
    fc2: (DMatrix<f64>, DVector<f64>),
}

#[inline]
fn silu(x: f64) -> f64 {
    x / (1.0 + (-x).exp())
}

#[inline]
fn dsilu(x: f64) -> f64 {
    let s = 1.0 / (1.0 + (-x).exp());
    s * (1.0 + x * (1.0 - s))
}

/// Unfold a (channels x h*w) feature map into 3x3 patches with zero padding.
fn im2col(input: &DMatrix<f64>, h: usize, w: usize) -> DMatrix<f64> {
    let ch = input.nrows();
    let mut col = DMatrix::zeros(ch * 9, h * w);
    for y in 0..h {
        for x in 0..w {
            let s = y * w + x;
            for k in 0..9 {
                let yy = y + k / 3;
                let xx = x + k % 3;
                if yy >= 1 && yy <= h && xx >= 1 && xx <= w {
                    let src = (yy - 1) * w + (xx - 1);
                    for c in 0..ch {
                        col[(c * 9 + k, s)] = input[(c, src)];
                    }
                }
            }
        }
    }
    col
}

/// Scatter patch gradients back onto the input layout (adjoint of `im2col`).
fn col2im(dcol: &DMatrix<f64>, ch: usize, h: usize, w: usize) -> DMatrix<f64> {
    let mut dx = DMatrix::zeros(ch, h * w);
    for y in 0..h {
        for x in 0..w {
            let s = y * w + x;
            for k in 0..9 {
                let yy = y + k / 3;
                let xx = x + k % 3;
                if yy >= 1 && yy <= h && xx >= 1 && xx <= w {
                    let src = (yy - 1) * w + (xx - 1);
                    for c in 0..ch {
                        dx[(c, src)] += dcol[(c * 9 + k, s)];
                    }
                }
            }
        }
    }
    dx
}

fn maxpool2(input: &DMatrix<f64>, h: usize, w: usize) -> (DMatrix<f64>, Vec<u32>) {
    let (oh, ow) = (h / 2, w / 2);
    let ch = input.nrows();
    let mut out = DMatrix::zeros(ch, oh * ow);
    let mut idx = vec![0u32; ch * oh * ow];
    for c in 0..ch {
        for oy in 0..oh {
            for ox in 0..ow {
                let os = oy * ow + ox;
                let mut best = f64::NEG_INFINITY;
                let mut bs = 0usize;
                for dy in 0..2 {
                    for dx in 0..2 {
                        let s = (2 * oy + dy) * w + (2 * ox + dx);
                        let v = input[(c, s)];
                        if v > best {
                            best = v;
                            bs = s;
                        }
                    }
                }
                out[(c, os)] = best;
                idx[c * oh * ow + os] = bs as u32;
            }
        }
    }
    (out, idx)
}

struct Cache {
    cols: Vec<DMatrix<f64>>,
    pre: Vec<DMatrix<f64>>,
    pool_idx: Vec<Vec<u32>>,
    flat: DVector<f64>,
    fc1_pre: DVector<f64>,
    fc1_act: DVector<f64>,
    out_raw: Vector3<f64>,
    out_unit: Vector3<f64>,
    degenerate: bool,
}

impl CompactNet {
    /// Fresh network for d x d maps with deterministic (seeded) Kaiming-style
    /// initialization. `d` must be a positive multiple of 16 so the four
    /// pooling stages divide evenly.
    pub fn new(d: usize, seed: u64) -> Result<Self> {
        if d == 0 || d % 16 != 0 || d > 1024 {
            return Err(Error::arg(format!(
                "map resolution {d} must be a positive multiple of 16 (at most 1024)"
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut convs = Vec::with_capacity(POOLS);
        for i in 0..POOLS {
            let (in_ch, out_ch) = (CHANNELS[i], CHANNELS[i + 1]);
            let fan_in = in_ch * 9;
            convs.push(Conv3x3 {
                in_ch,
                out_ch,
                w: init_matrix(&mut rng, out_ch, fan_in),
                b: DVector::zeros(out_ch),
            });
        }
        let flat = CHANNELS[POOLS] * (d >> POOLS) * (d >> POOLS);
        let fc1 = Dense {
            w: init_matrix(&mut rng, FC_HIDDEN, flat),
            b: DVector::zeros(FC_HIDDEN),
        };
        let fc2 = Dense {
            w: init_matrix(&mut rng, 3, FC_HIDDEN),
            b: DVector::zeros(3),
        };
        Ok(CompactNet {
            d,
            convs,
            fc1,
            fc2,
            echo: None,
        })
    }

    /// Map resolution this network was built for.
    pub fn d(&self) -> usize {
        self.d
    }

    /// Total number of trainable parameters.
    pub fn param_count(&self) -> usize {
        self.param_slices().iter().map(|s| s.len()).sum()
    }

    /// Read-only views of every parameter block in checkpoint order.
    pub fn param_slices(&self) -> Vec<&[f64]> {
        let mut out = Vec::with_capacity(2 * POOLS + 4);
        for c in &self.convs {
            out.push(c.w.as_slice());
            out.push(c.b.as_slice());
        }
        out.push(self.fc1.w.as_slice());
        out.push(self.fc1.b.as_slice());
        out.push(self.fc2.w.as_slice());
        out.push(self.fc2.b.as_slice());
        out
    }

    /// Mutable views of every parameter block in checkpoint order.
    pub fn param_slices_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out = Vec::with_capacity(2 * POOLS + 4);
        for c in &mut self.convs {
            out.push(c.w.as_mut_slice());
            out.push(c.b.as_mut_slice());
        }
        out.push(self.fc1.w.as_mut_slice());
        out.push(self.fc1.b.as_mut_slice());
        out.push(self.fc2.w.as_mut_slice());
        out.push(self.fc2.b.as_mut_slice());
        out
    }

    fn input_matrix(&self, map: &ObservationMap) -> Result<DMatrix<f64>> {
        if map.d != self.d {
            return Err(Error::arg(format!(
                "map resolution {} does not match network resolution {}",
                map.d, self.d
            )));
        }
        let mut tensor = map.to_tensor();
        // Materials and rig brightness scale each color channel by an
        // arbitrary factor that carries no normal information, so each
        // channel is normalized by its mean over occupied cells. A floor
        // tied to the brightest channel keeps a nearly black channel from
        // being amplified into noise.
        let dd = self.d * self.d;
        let occupied = map.occupancy();
        if occupied > 0 {
            let mut means = [0.0; 3];
            for (c, m) in means.iter_mut().enumerate() {
                *m = tensor[c * dd..(c + 1) * dd].iter().sum::<f64>() / occupied as f64;
            }
            let top = means[0].max(means[1]).max(means[2]);
            if top > 1e-12 {
                for (c, m) in means.iter().enumerate() {
                    let scale = m.max(1e-3 * top);
                    for v in &mut tensor[c * dd..(c + 1) * dd] {
                        *v /= scale;
                    }
                }
            }
        }
        // Occupancy channel: a dark sample and an empty cell are otherwise
        // indistinguishable, and the lit-hemisphere boundary is a strong
        // normal cue.
        tensor.reserve(dd);
        for iy in 0..self.d {
            for ix in 0..self.d {
                tensor.push(if map.occupied(ix, iy) { 1.0 } else { 0.0 });
            }
        }
        Ok(DMatrix::from_row_slice(CHANNELS[0], dd, &tensor))
    }

    fn forward(&self, input: &DMatrix<f64>) -> Cache {
        let mut h = self.d;
        let mut cols = Vec::with_capacity(POOLS);
        let mut pre = Vec::with_capacity(POOLS);
        let mut pool_idx = Vec::with_capacity(POOLS);
        let mut x = input.clone();
        for conv in &self.convs {
            let col = im2col(&x, h, h);
            let mut z = &conv.w * &col;
            for r in 0..conv.out_ch {
                z.row_mut(r).add_scalar_mut(conv.b[r]);
            }
            let act = z.map(silu);
            let (p, idx) = maxpool2(&act, h, h);
            cols.push(col);
            pre.push(z);
            pool_idx.push(idx);
            h /= 2;
            x = p;
        }
        let hw = h * h;
        let ch = CHANNELS[POOLS];
        let mut flat = DVector::zeros(ch * hw);
        for c in 0..ch {
            for s in 0..hw {
                flat[c * hw + s] = x[(c, s)];
            }
        }
        let fc1_pre = &self.fc1.w * &flat + &self.fc1.b;
        let fc1_act = fc1_pre.map(silu);
        let out = &self.fc2.w * &fc1_act + &self.fc2.b;
        let out_raw = Vector3::new(out[0], out[1], out[2]);
        let norm = out_raw.norm();
        let degenerate = norm < 1e-12;
        let out_unit = if degenerate {
            Vector3::new(0.0, 0.0, -1.0)
        } else {
            out_raw / norm
        };
        Cache {
            cols,
            pre,
            pool_idx,
            flat,
            fc1_pre,
            fc1_act,
            out_raw,
            out_unit,
            degenerate,
        }
    }

    /// Unit-normalized network output before the orientation fix.
    pub fn forward_unit(&self, map: &ObservationMap) -> Result<Vector3<f64>> {
        let input = self.input_matrix(map)?;
        Ok(self.forward(&input).out_unit)
    }

    /// Mean angular loss (radians) and mean parameter gradients over a batch.
    pub fn loss_and_grad(&self, batch: &[TrainingRecord]) -> Result<(f64, NetGrads)> {
        if batch.is_empty() {
            return Err(Error::arg("empty training batch"));
        }
        let mut grads = NetGrads::zeros_like(self);
        let mut loss_sum = 0.0;
        for record in batch {
            let input = self.input_matrix(&record.map)?;
            let cache = self.forward(&input);
            loss_sum += angular_loss(&record.target, &cache.out_unit);
            if cache.degenerate {
                continue;
            }
            let g_unit = angular_loss_grad(&record.target, &cache.out_unit);
            self.backward(&cache, &g_unit, &mut grads);
        }
        let inv = 1.0 / batch.len() as f64;
        grads.scale(inv);
        Ok((loss_sum * inv, grads))
    }

    fn backward(&self, cache: &Cache, g_unit: &Vector3<f64>, grads: &mut NetGrads) {
        // Through normalization: g_raw = (g - u (u . g)) / |raw|.
        let norm = cache.out_raw.norm();
        let u = cache.out_unit;
        let g_raw = (g_unit - u * u.dot(g_unit)) / norm;

        let g_raw_v = DVector::from_row_slice(&[g_raw.x, g_raw.y, g_raw.z]);
        grads.fc2.0 += &g_raw_v * cache.fc1_act.transpose();
        grads.fc2.1 += &g_raw_v;
        let g_fc1_act = self.fc2.w.transpose() * &g_raw_v;
        let g_fc1_pre = g_fc1_act.zip_map(&cache.fc1_pre, |g, z| g * dsilu(z));
        grads.fc1.0 += &g_fc1_pre * cache.flat.transpose();
        grads.fc1.1 += &g_fc1_pre;
        let g_flat = self.fc1.w.transpose() * &g_fc1_pre;

        // Unflatten onto the last pooled feature map.
        let mut h = self.d >> POOLS;
        let ch = CHANNELS[POOLS];
        let hw = h * h;
        let mut g_pooled = DMatrix::zeros(ch, hw);
        for c in 0..ch {
            for s in 0..hw {
                g_pooled[(c, s)] = g_flat[c * hw + s];
            }
        }

        for stage in (0..POOLS).rev() {
            let conv = &self.convs[stage];
            let pre = &cache.pre[stage];
            let idx = &cache.pool_idx[stage];
            let hin = h * 2;
            // Un-pool: route each pooled gradient to its argmax position.
            let mut g_act: DMatrix<f64> = DMatrix::zeros(conv.out_ch, hin * hin);
            let ohw = h * h;
            for c in 0..conv.out_ch {
                for os in 0..ohw {
                    g_act[(c, idx[c * ohw + os] as usize)] += g_pooled[(c, os)];
                }
            }
            let g_pre = g_act.zip_map(pre, |g, z| g * dsilu(z));
            grads.convs[stage].0 += &g_pre * cache.cols[stage].transpose();
            grads.convs[stage].1 += g_pre.column_sum();
            if stage > 0 {
                let g_col = conv.w.transpose() * &g_pre;
                g_pooled = col2im(&g_col, conv.in_ch, hin, hin);
                h = hin;
            }
        }
    }

    /// Serialize to `path`, first rounding the live weights to f32 precision
    /// so the network in memory and the one on disk predict identically.
    pub fn save(&mut self, path: &Path) -> Result<()> {
        for slice in self.param_slices_mut() {
            for v in slice {
                *v = *v as f32 as f64;
            }
        }
        let mut w = BufWriter::new(File::create(path)?);
        w.write_all(MAGIC)?;
        w.write_all(&VERSION.to_le_bytes())?;
        w.write_all(&(self.d as u32).to_le_bytes())?;
        w.write_all(&(POOLS as u32).to_le_bytes())?;
        for i in 0..=POOLS {
            w.write_all(&(CHANNELS[i] as u32).to_le_bytes())?;
        }
        w.write_all(&(FC_HIDDEN as u32).to_le_bytes())?;
        w.write_all(&(self.param_count() as u64).to_le_bytes())?;
        for slice in self.param_slices() {
            for &v in slice {
                w.write_all(&(v as f32).to_le_bytes())?;
            }
        }
        match self.echo {
            Some(e) => {
                w.write_all(&[1u8])?;
                w.write_all(&e.seed.to_le_bytes())?;
                w.write_all(&e.records.to_le_bytes())?;
                w.write_all(&e.batch.to_le_bytes())?;
                w.write_all(&e.lr.to_le_bytes())?;
            }
            None => w.write_all(&[0u8])?,
        }
        w.flush()?;
        Ok(())
    }

    /// Load a checkpoint written by [`CompactNet::save`].
    pub fn load(path: &Path) -> Result<Self> {
        let mut r = BufReader::new(File::open(path)?);
        let bad = |msg: &str| Error::parse(path, msg);
        let mut magic = [0u8; 6];
        r.read_exact(&mut magic).map_err(|_| bad("truncated header"))?;
        if &magic != MAGIC {
            return Err(bad("not a network checkpoint (bad magic)"));
        }
        if read_u32(&mut r, path)? != VERSION {
            return Err(bad("unsupported checkpoint version"));
        }
        let d = read_u32(&mut r, path)? as usize;
        let pools = read_u32(&mut r, path)? as usize;
        if pools != POOLS {
            return Err(bad("unexpected number of convolution stages"));
        }
        for i in 0..=POOLS {
            if read_u32(&mut r, path)? as usize != CHANNELS[i] {
                return Err(bad("unexpected channel configuration"));
            }
        }
        if read_u32(&mut r, path)? as usize != FC_HIDDEN {
            return Err(bad("unexpected hidden layer width"));
        }
        let mut net = CompactNet::new(d, 0).map_err(|e| bad(&e.to_string()))?;
        let count = read_u64(&mut r, path)? as usize;
        if count != net.param_count() {
            return Err(bad(&format!(
                "checkpoint holds {count} parameters, architecture needs {}",
                net.param_count()
            )));
        }
        let mut payload = vec![0u8; count * 4];
        r.read_exact(&mut payload)
            .map_err(|_| bad("truncated weight payload"))?;
        let mut k = 0usize;
        for slice in net.param_slices_mut() {
            for v in slice {
                let bytes: [u8; 4] = payload[4 * k..4 * k + 4].try_into().unwrap();
                *v = f32::from_le_bytes(bytes) as f64;
                k += 1;
            }
        }
        let mut flag = [0u8; 1];
        r.read_exact(&mut flag).map_err(|_| bad("truncated trailer"))?;
        net.echo = if flag[0] == 1 {
            Some(TrainingEcho {
                seed: read_u64(&mut r, path)?,
                records: read_u64(&mut r, path)?,
                batch: read_u32(&mut r, path)?,
                lr: read_f64(&mut r, path)?,
            })
        } else {
            None
        };
        Ok(net)
    }
}

fn init_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> DMatrix<f64> {
    let limit = (6.0 / cols as f64).sqrt();
    let mut m = DMatrix::zeros(rows, cols);
    for v in m.as_mut_slice() {
        *v = rng.gen_range(-limit..limit);
    }
    m
}

fn read_u32(r: &mut impl IoRead, path: &Path) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)
        .map_err(|_| Error::parse(path, "truncated field"))?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64(r: &mut impl IoRead, path: &Path) -> Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)
        .map_err(|_| Error::parse(path, "truncated field"))?;
    Ok(u64::from_le_bytes(b))
}

fn read_f64(r: &mut impl IoRead, path: &Path) -> Result<f64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)
        .map_err(|_| Error::parse(path, "truncated field"))?;
    Ok(f64::from_le_bytes(b))
}

impl NetGrads {
    /// Zero gradients shaped like `net`.
    pub fn zeros_like(net: &CompactNet) -> Self {
        NetGrads {
            convs: net
                .convs
                .iter()
                .map(|c| {
                    (
                        DMatrix::zeros(c.w.nrows(), c.w.ncols()),
                        DVector::zeros(c.b.len()),
                    )
                })
                .collect(),
            fc1: (
                DMatrix::zeros(net.fc1.w.nrows(), net.fc1.w.ncols()),
                DVector::zeros(net.fc1.b.len()),
            ),
            fc2: (
                DMatrix::zeros(net.fc2.w.nrows(), net.fc2.w.ncols()),
                DVector::zeros(net.fc2.b.len()),
            ),
        }
    }

    fn scale(&mut self, k: f64) {
        for s in self.slices_mut() {
            for v in s {
                *v *= k;
            }
        }
    }

    /// Read-only views aligned with [`CompactNet::param_slices`].
    pub fn slices(&self) -> Vec<&[f64]> {
        let mut out = Vec::with_capacity(2 * self.convs.len() + 4);
        for (w, b) in &self.convs {
            out.push(w.as_slice());
            out.push(b.as_slice());
        }
        out.push(self.fc1.0.as_slice());
        out.push(self.fc1.1.as_slice());
        out.push(self.fc2.0.as_slice());
        out.push(self.fc2.1.as_slice());
        out
    }

    fn slices_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out = Vec::with_capacity(2 * self.convs.len() + 4);
        for (w, b) in &mut self.convs {
            out.push(w.as_mut_slice());
            out.push(b.as_mut_slice());
        }
        out.push(self.fc1.0.as_mut_slice());
        out.push(self.fc1.1.as_mut_slice());
        out.push(self.fc2.0.as_mut_slice());
        out.push(self.fc2.1.as_mut_slice());
        out
    }
}

impl super::NormalRegressor for CompactNet {
    /// Forward pass, then the orientation fix of
    /// [`super::orient_camera_facing`]. An all-zero (or otherwise
    /// degenerate) map still yields a defined unit output.
    fn predict(&self, map: &ObservationMap) -> Result<Vector3<f64>> {
        let unit = self.forward_unit(map)?;
        Ok(super::orient_camera_facing(unit))
    }
}
