use std::fmt::Write as _;
use std::time::Instant;

use log::{debug, info};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::adam::{Adam, AdamConfig};
use super::loss::{total_loss_tape, LossWeights};
use crate::error::{Error, Result};
use crate::image::Image2D;
use crate::inr::{HashGridConfig, InrModel, MlpConfig, SamplingSpec};
use crate::psf::PsfKernel;
use crate::render::{image_constant, render_bmode_tape, Compression};
use crate::tensorgraph::{Shape, Tape};

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub iterations: usize,
    pub adam: AdamConfig,
    pub weights: LossWeights,
    pub compression: Compression,
    pub oversample: usize,
    pub jitter: bool,
    pub seed: u64,
    /// Log progress every this many iterations (0 disables).
    pub log_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            iterations: 5000,
            adam: AdamConfig::default(),
            weights: LossWeights::default(),
            compression: Compression::default(),
            oversample: 2,
            jitter: true,
            seed: 0,
            log_every: 500,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.iterations < 1 {
            return Err(Error::invalid("iterations must be at least 1"));
        }
        if self.oversample < 1 {
            return Err(Error::invalid("oversample must be at least 1"));
        }
        self.adam.validate()?;
        self.weights.validate()?;
        self.compression.validate()
    }
}

/// Loss terms of one iteration. `ssim` is the similarity itself, not `1 - SSIM`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossRecord {
    pub total: f64,
    pub ssim: f64,
    pub l2: f64,
    pub tv: f64,
}

#[derive(Clone, Debug)]
pub struct TrainReport {
    pub history: Vec<LossRecord>,
    pub wall_clock_secs: f64,
}

impl TrainReport {
    pub fn final_loss(&self) -> f64 {
        self.history.last().map_or(f64::NAN, |r| r.total)
    }

    /// `iteration,total,ssim,l2,tv`, one row per iteration.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("iteration,total,ssim,l2,tv\n");
        for (i, r) in self.history.iter().enumerate() {
            writeln!(s, "{i},{:e},{:e},{:e},{:e}", r.total, r.ssim, r.l2, r.tv).expect("write to string");
        }
        s
    }
}

/// Freshly initialised model. Weights come from a separate stream of the
/// same seed so they stay independent of the jitter draws in [`train`].
pub fn init_model(grid: &HashGridConfig, mlp: &MlpConfig, seed: u64) -> Result<InrModel> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(1);
    InrModel::new(grid.clone(), mlp.clone(), &mut rng)
}

/// Sampling grid for a target under `cfg`.
pub fn sampling_for(target: &Image2D, cfg: &TrainConfig) -> SamplingSpec {
    SamplingSpec::for_image(target, cfg.oversample, cfg.jitter)
}

/// Fits `model` so that its rendered B-mode matches `target`.
///
/// `kernel` must be sampled at the fine spacing `(dx / o, dz / o)`.
pub fn train(target: &Image2D, kernel: &PsfKernel, model: &mut InrModel, cfg: &TrainConfig) -> Result<TrainReport> {
    cfg.validate()?;
    let spec = sampling_for(target, cfg);
    spec.validate()?;
    kernel.check_spacing(&spec.fine_image(vec![0.0; spec.fine_rows() * spec.fine_cols()])?)?;
    if let Some(bad) = target.data().iter().find(|v| !(0.0..=1.0).contains(*v)) {
        return Err(Error::invalid(format!("target must be normalised to [0, 1], found {bad}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut adam = Adam::new(cfg.adam, model.params());
    let mut history = Vec::with_capacity(cfg.iterations);
    let started = Instant::now();
    let fine = Shape::Matrix(spec.fine_rows(), spec.fine_cols());

    for it in 0..cfg.iterations {
        let mut tape = Tape::new();
        let bound = model.bind(&mut tape, true);
        let coords = spec.coords(&mut rng);
        let field = model.forward_tape(&mut tape, &bound, &coords)?;
        let s = tape.reshape(field, fine)?;
        let pred = render_bmode_tape(&mut tape, s, kernel, cfg.oversample, cfg.compression)?;
        let tgt = image_constant(&mut tape, target);
        let loss = total_loss_tape(&mut tape, pred, tgt, s, cfg.weights)?;
        let total = tape.value(loss.total).item();
        if !total.is_finite() {
            let culprit = tape
                .first_non_finite()
                .map_or_else(|| "unknown".to_string(), |(id, name)| format!("node {id} ({name})"));
            return Err(Error::NonFinite(format!(
                "loss became {total} at iteration {it}; first non-finite tensor: {culprit}"
            )));
        }
        let record = LossRecord {
            total,
            ssim: tape.value(loss.ssim).item(),
            l2: tape.value(loss.l2).item(),
            tv: tape.value(loss.tv).item(),
        };
        let grads = tape.backward(loss.total)?;
        let g: Vec<Option<&[f64]>> = bound.vars.iter().map(|&v| grads.get(v)).collect();
        adam.step(model.params_mut(), &g)?;
        history.push(record);
        if cfg.log_every > 0 && (it % cfg.log_every == 0 || it + 1 == cfg.iterations) {
            info!(
                "iter {it}: loss {:.5} (ssim {:.4}, l2 {:.5}, tv {:.4})",
                record.total, record.ssim, record.l2, record.tv
            );
        }
    }
    let wall_clock_secs = started.elapsed().as_secs_f64();
    debug!("trained {} iterations in {wall_clock_secs:.1} s", cfg.iterations);
    Ok(TrainReport {
        history,
        wall_clock_secs,
    })
}

/// Unjittered fine-grid estimate of the echogenicity map.
pub fn estimate(model: &InrModel, target: &Image2D, oversample: usize) -> Result<Image2D> {
    let spec = SamplingSpec::for_image(target, oversample, false);
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    crate::inr::sample_grid(model, &spec, &mut rng)
}
