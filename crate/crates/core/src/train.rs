//! Training loop: random fixed-length segments, Adam with warmup, cosine
//! decay and gradient clipping, divergence guard.

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::content::Codebook;
use crate::corpus::Utterance;
use crate::diffusion::DiffusionSchedule;
use crate::error::{Error, Result};
use crate::model::{LossDraws, LossValues, MelNorm, Model, TrainExample};
use crate::params::Adam;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub segment_frames: usize,
    /// Peak learning rate, reached after `warmup_steps`.
    pub learning_rate: f64,
    pub warmup_steps: usize,
    /// Cosine decay ends at this fraction of the peak rate.
    pub final_lr_fraction: f64,
    /// Global gradient L2 norm limit; 0 disables clipping.
    pub grad_clip: f64,
    pub seed: u64,
    /// Write a checkpoint every this many steps (0 disables).
    pub checkpoint_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            steps: 3000,
            batch_size: 8,
            segment_frames: 64,
            learning_rate: 1e-3,
            warmup_steps: 100,
            final_lr_fraction: 0.1,
            grad_clip: 1.0,
            seed: 0,
            checkpoint_every: 500,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.segment_frames == 0 {
            return Err(Error::Config("batch_size and segment_frames must be >= 1".into()));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config("learning_rate must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.final_lr_fraction) {
            return Err(Error::Config("final_lr_fraction must be in [0, 1]".into()));
        }
        if !(self.grad_clip >= 0.0) {
            return Err(Error::Config("grad_clip must be >= 0".into()));
        }
        Ok(())
    }

    /// Learning rate for 1-based `step`: linear warmup, then cosine decay
    /// from the peak to `final_lr_fraction` of it at `steps`.
    pub fn learning_rate_at(&self, step: usize) -> f64 {
        let peak = self.learning_rate;
        if step <= self.warmup_steps {
            return peak * step as f64 / self.warmup_steps.max(1) as f64;
        }
        let span = self.steps.saturating_sub(self.warmup_steps).max(1) as f64;
        let progress = ((step - self.warmup_steps) as f64 / span).min(1.0);
        let cos = 0.5 * (1.0 + (std::f64::consts::PI * progress).cos());
        peak * (self.final_lr_fraction + (1.0 - self.final_lr_fraction) * cos)
    }
}

/// Scales `grads` in place so their global L2 norm is at most `limit`.
/// Returns the norm before clipping.
pub fn clip_global_norm(grads: &mut [Option<Array2<f32>>], limit: f64) -> f64 {
    let norm = grads
        .iter()
        .flatten()
        .map(|g| g.iter().map(|&v| (v as f64) * (v as f64)).sum::<f64>())
        .sum::<f64>()
        .sqrt();
    if limit > 0.0 && norm > limit {
        let k = (limit / norm) as f32;
        for g in grads.iter_mut().flatten() {
            g.mapv_inplace(|v| v * k);
        }
    }
    norm
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub total: f64,
    pub diff: f64,
    pub enc: f64,
    /// Global gradient norm before clipping.
    pub grad_norm: f64,
    pub learning_rate: f64,
}

/// Quantizes every utterance into a full-length training example.
pub fn prepare_examples(codebook: &Codebook, utterances: &[Utterance]) -> Result<Vec<TrainExample<f32>>> {
    utterances
        .iter()
        .map(|u| {
            Ok(TrainExample {
                units: codebook.quantize(&u.content_features)?,
                mel: u.mel_frames.clone(),
            })
        })
        .collect()
}

/// Owns the model, optimizer and sampling state of one run.
pub struct Trainer {
    pub model: Model<f32>,
    pub config: TrainConfig,
    pub schedule: DiffusionSchedule,
    pub log: Vec<StepRecord>,
    adam: Adam<f32>,
    rng: ChaCha8Rng,
    examples: Vec<TrainExample<f32>>,
}

impl Trainer {
    pub fn new(
        model: Model<f32>,
        examples: Vec<TrainExample<f32>>,
        config: TrainConfig,
        schedule: DiffusionSchedule,
    ) -> Result<Self> {
        config.validate()?;
        schedule.validate()?;
        if examples.iter().all(|e| e.units.is_empty()) {
            return Err(Error::InsufficientData("training corpus is empty".into()));
        }
        let mut model = model;
        model.mel_norm = MelNorm::fit(examples.iter().map(|e| e.mel.view()))?;
        let adam = Adam::new(&model.params, config.learning_rate);
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        rng.set_stream(2);
        Ok(Trainer {
            model,
            config,
            schedule,
            log: Vec::new(),
            adam,
            rng,
            examples,
        })
    }

    pub fn steps_done(&self) -> usize {
        self.log.len()
    }

    fn sample_batch(&mut self) -> Vec<TrainExample<f32>> {
        let seg = self.config.segment_frames;
        (0..self.config.batch_size)
            .map(|_| loop {
                let ex = &self.examples[self.rng.random_range(0..self.examples.len())];
                let len = ex.units.len();
                if len == 0 {
                    continue;
                }
                if len <= seg {
                    break ex.clone();
                }
                let start = self.rng.random_range(0..=len - seg);
                break TrainExample {
                    units: ex.units[start..start + seg].to_vec(),
                    mel: ex.mel.slice(ndarray::s![start..start + seg, ..]).to_owned(),
                };
            })
            .collect()
    }

    /// One optimizer step. A non-finite loss or parameter aborts the run.
    pub fn step(&mut self) -> Result<StepRecord> {
        let step = self.log.len() + 1;
        let batch = self.sample_batch();
        let draws = LossDraws::sample(&batch, &self.schedule, &mut self.rng);
        let (v, grads): (LossValues, _) = self.model.loss_and_grads(&batch, &draws, &self.schedule)?;
        if !v.total.is_finite() {
            return Err(Error::Diverged {
                step,
                detail: format!("loss is {} (diff {}, enc {})", v.total, v.diff, v.enc),
            });
        }
        let mut grads = grads.into_param_grads();
        let grad_norm = clip_global_norm(&mut grads, self.config.grad_clip);
        self.adam.lr = self.config.learning_rate_at(step);
        self.adam.step(&mut self.model.params, &grads);
        if !self.model.params.all_finite() {
            return Err(Error::Diverged {
                step,
                detail: "non-finite parameter after update".into(),
            });
        }
        let rec = StepRecord {
            step,
            total: v.total,
            diff: v.diff,
            enc: v.enc,
            grad_norm,
            learning_rate: self.adam.lr,
        };
        self.log.push(rec);
        Ok(rec)
    }

    /// Runs the remaining configured steps, calling `on_step` after each.
    pub fn run<C>(&mut self, mut on_step: C) -> Result<()>
    where
        C: FnMut(&Trainer, &StepRecord) -> Result<()>,
    {
        while self.log.len() < self.config.steps {
            let rec = self.step()?;
            on_step(self, &rec)?;
        }
        Ok(())
    }
}

/// Mean total loss over `window` log entries starting at index `start`.
pub fn moving_average(log: &[StepRecord], start: usize, window: usize) -> f64 {
    let slice = &log[start..(start + window).min(log.len())];
    slice.iter().map(|r| r.total).sum::<f64>() / slice.len() as f64
}
