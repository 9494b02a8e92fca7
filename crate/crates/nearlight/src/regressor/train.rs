//! Streamed training of [`CompactNet`] with Adam.
//!
//! Records come straight from a seeded generator, so there is no dataset on
//! disk and no shuffling state: batch k always holds records
//! `k * batch .. (k + 1) * batch` of the stream, which makes a run a pure
//! function of (stream seed, network seed, config).

use crate::error::{Error, Result};
use crate::sampler::{record_stream, StreamConfig};

use super::net::{CompactNet, NetGrads, TrainingEcho};

/// Adam optimizer state for one network.
#[derive(Debug, Clone)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    t: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    /// Fresh state for parameter blocks of the given lengths.
    pub fn with_shapes(shapes: &[usize], lr: f64) -> Self {
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: shapes.iter().map(|&n| vec![0.0; n]).collect(),
            v: shapes.iter().map(|&n| vec![0.0; n]).collect(),
        }
    }

    /// Fresh state shaped like `net`.
    pub fn new(net: &CompactNet, lr: f64) -> Self {
        let shapes: Vec<usize> = net.param_slices().iter().map(|s| s.len()).collect();
        Adam::with_shapes(&shapes, lr)
    }

    /// One bias-corrected update over aligned parameter/gradient slices.
    pub fn step_slices(&mut self, params: &mut [&mut [f64]], grads: &[&[f64]]) {
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t as i32);
        let c2 = 1.0 - self.beta2.powi(self.t as i32);
        for (k, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            let (m, v) = (&mut self.m[k], &mut self.v[k]);
            for i in 0..p.len() {
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g[i];
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g[i] * g[i];
                let mh = m[i] / c1;
                let vh = v[i] / c2;
                p[i] -= self.lr * mh / (vh.sqrt() + self.eps);
            }
        }
    }

    /// One update on the network.
    pub fn step(&mut self, net: &mut CompactNet, grads: &NetGrads) {
        let mut params = net.param_slices_mut();
        self.step_slices(&mut params, &grads.slices());
    }
}

/// Training hyperparameters.
#[derive(Debug, Clone)]
pub struct TrainConfig {
    /// Total records to stream through, visited once each.
    pub records: u64,
    pub batch: usize,
    /// Initial learning rate.
    pub lr: f64,
    /// Reporting granularity: the run is split into this many chunks and
    /// divergence decisions use chunk-average losses.
    pub chunks: usize,
    /// Learning-rate floor the cosine schedule anneals down to.
    pub min_lr: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            records: 200_000,
            batch: 128,
            lr: 1e-3,
            chunks: 10,
            min_lr: 1e-5,
        }
    }
}

/// Outcome of a completed training run.
#[derive(Debug, Clone)]
pub struct TrainReport {
    /// Mean angular loss (radians) per chunk, in order.
    pub chunk_losses: Vec<f64>,
    pub final_lr: f64,
    pub batches: u64,
}

/// Tracks chunk-average losses and flags divergence: three consecutive
/// averages above the first chunk's average abort the run.
#[derive(Debug, Default)]
pub(crate) struct DivergenceMonitor {
    initial: Option<f64>,
    consecutive: usize,
}

impl DivergenceMonitor {
    /// Feed one chunk average; `Some((count, initial))` means abort.
    pub(crate) fn observe(&mut self, avg: f64) -> Option<(usize, f64)> {
        match self.initial {
            None => {
                self.initial = Some(avg);
                None
            }
            Some(initial) => {
                if avg > initial {
                    self.consecutive += 1;
                } else {
                    self.consecutive = 0;
                }
                if self.consecutive >= 3 {
                    Some((self.consecutive, initial))
                } else {
                    None
                }
            }
        }
    }
}

/// Stream `cfg.records` records through the network once, in batches, with
/// Adam and a cosine learning-rate schedule annealing from `cfg.lr` to
/// `cfg.min_lr`. On success the network's `echo` records the run.
/// Divergence aborts with [`Error::Diverged`].
pub fn train(net: &mut CompactNet, stream: &StreamConfig, cfg: &TrainConfig) -> Result<TrainReport> {
    if stream.d != net.d() {
        return Err(Error::arg(format!(
            "stream resolution {} does not match network resolution {}",
            stream.d,
            net.d()
        )));
    }
    if cfg.batch == 0 || cfg.records == 0 {
        return Err(Error::arg("training needs a positive batch and record count"));
    }
    let total_batches = (cfg.records / cfg.batch as u64).max(1);
    let chunks = (cfg.chunks as u64).clamp(1, total_batches);
    let per_chunk = total_batches.div_ceil(chunks);

    let mut adam = Adam::new(net, cfg.lr);
    let mut monitor = DivergenceMonitor::default();
    let mut chunk_losses = Vec::new();
    let mut index = 0u64;
    let mut batches_done = 0u64;
    let floor = cfg.min_lr.min(cfg.lr);
    while batches_done < total_batches {
        let mut acc = 0.0;
        let mut n = 0u64;
        while n < per_chunk && batches_done < total_batches {
            let progress = batches_done as f64 / total_batches as f64;
            adam.lr = floor
                + 0.5 * (cfg.lr - floor) * (1.0 + (std::f64::consts::PI * progress).cos());
            let batch = record_stream(stream, index, cfg.batch)?;
            index += cfg.batch as u64;
            let (loss, grads) = net.loss_and_grad(&batch)?;
            adam.step(net, &grads);
            acc += loss;
            n += 1;
            batches_done += 1;
        }
        let avg = acc / n as f64;
        chunk_losses.push(avg);
        if let Some((epochs, initial)) = monitor.observe(avg) {
            return Err(Error::Diverged {
                epochs,
                initial,
                last: avg,
            });
        }
    }
    net.echo = Some(TrainingEcho {
        seed: stream.seed,
        records: index,
        batch: cfg.batch as u32,
        lr: cfg.lr,
    });
    Ok(TrainReport {
        chunk_losses,
        final_lr: adam.lr,
        batches: batches_done,
    })
}
