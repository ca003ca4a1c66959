//! Adam optimization of the full objective with reproducible random streams.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use num_traits::Float;

use crate::autodiff::Tape;
use crate::error::{Error, Result};
use crate::kspace::KSpaceOperator;
use crate::losses::{objective_graph, LossReport, LossWeights, Measurement, ObjectiveInput};
use crate::model::{EnhancerModel, ModelConfig};
use crate::params::ParamStore;
use crate::real::Real;
use crate::rng::{domain, Rng};
use crate::synth::{Augmentation, SampleRecord, DEFAULT_RATIO};
use crate::tensor::Tensor;

pub const METRICS_HEADER: &str =
    "epoch,nll_npp,guide,pixel_l1,structural,dc,total,grad_clip_events";

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StepOutcome {
    Applied,
    /// A gradient was not finite; parameters and moments are untouched.
    Skipped,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Adam<T> {
    pub config: AdamConfig,
    pub first: Vec<Tensor<T>>,
    pub second: Vec<Tensor<T>>,
    /// Number of applied updates.
    pub step: u64,
    pub skipped: u64,
}

impl<T: Real> Adam<T> {
    pub fn new(params: &ParamStore<T>, config: AdamConfig) -> Self {
        let zeros = || {
            params
                .iter()
                .map(|(_, p)| Tensor::zeros(p.shape()))
                .collect()
        };
        Adam {
            config,
            first: zeros(),
            second: zeros(),
            step: 0,
            skipped: 0,
        }
    }

    /// One bias-corrected update with learning rate `lr`.
    pub fn update(
        &mut self,
        params: &mut ParamStore<T>,
        grads: &[Tensor<T>],
        lr: f64,
    ) -> Result<StepOutcome> {
        if grads.len() != params.len() || self.first.len() != params.len() {
            return Err(Error::arg(
                "adam",
                format!("{} gradients for {} parameters", grads.len(), params.len()),
            ));
        }
        if grads.iter().any(|g| g.first_non_finite().is_some()) {
            self.skipped += 1;
            return Ok(StepOutcome::Skipped);
        }
        self.step += 1;
        let c = self.config;
        let t = self.step as i32;
        let bc1 = 1.0 - Float::powi(c.beta1, t);
        let bc2 = 1.0 - Float::powi(c.beta2, t);
        let (b1, b2) = (T::c(c.beta1), T::c(c.beta2));
        let (nb1, nb2) = (T::c(1.0 - c.beta1), T::c(1.0 - c.beta2));
        let (ibc1, ibc2) = (T::c(1.0 / bc1), T::c(1.0 / bc2));
        let (lr, eps) = (T::c(lr), T::c(c.eps));
        for (k, id) in params.ids().collect::<Vec<_>>().into_iter().enumerate() {
            let g = grads[k].data();
            let m = self.first[k].data_mut();
            let v = self.second[k].data_mut();
            let p = params.get_mut(id).data_mut();
            for i in 0..p.len() {
                m[i] = b1 * m[i] + nb1 * g[i];
                v[i] = b2 * v[i] + nb2 * g[i] * g[i];
                let mh = m[i] * ibc1;
                let vh = v[i] * ibc2;
                p[i] -= lr * mh / (vh.sqrt() + eps);
            }
        }
        Ok(StepOutcome::Applied)
    }
}

/// Everything that shapes a training run.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub model: ModelConfig,
    pub low_size: usize,
    pub adam: AdamConfig,
    pub batch_size: usize,
    pub epochs: usize,
    pub weights: LossWeights,
    pub guide: bool,
    pub dc: bool,
    pub seed: u64,
    pub clip_norm: f64,
    pub dequantization: f64,
    pub augment: bool,
    /// Epochs after which the learning rate halves. Empty by default.
    pub lr_milestones: Vec<usize>,
    pub checkpoint_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl TrainConfig {
    pub fn desk() -> Self {
        let model = ModelConfig::desk();
        TrainConfig {
            low_size: model.size / DEFAULT_RATIO,
            model,
            adam: AdamConfig::default(),
            batch_size: 8,
            epochs: 30,
            weights: LossWeights::default(),
            guide: true,
            dc: true,
            seed: 0,
            clip_norm: 100.0,
            dequantization: 1.0 / 256.0,
            augment: true,
            lr_milestones: Vec::new(),
            checkpoint_every: 10,
        }
    }

    pub fn full() -> Self {
        let model = ModelConfig::full();
        TrainConfig {
            low_size: model.size / DEFAULT_RATIO,
            model,
            epochs: 500,
            checkpoint_every: 50,
            ..Self::desk()
        }
    }

    /// Loss weights with the ablation switches applied.
    pub fn effective_weights(&self) -> LossWeights {
        LossWeights {
            alpha: self.weights.alpha,
            guide: if self.guide { self.weights.guide } else { 0.0 },
            dc: if self.dc { self.weights.dc } else { 0.0 },
        }
    }

    pub fn lr_at(&self, epoch: usize) -> f64 {
        let halvings = self.lr_milestones.iter().filter(|&&m| m <= epoch).count();
        self.adam.lr * Float::powi(0.5, halvings as i32)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.effective_weights().validate()?;
        let bad = |m: String| Err(Error::arg("train config", m));
        if self.batch_size == 0 {
            return bad("batch size must be positive".into());
        }
        if !(self.adam.lr > 0.0) || !(self.clip_norm > 0.0) || !(self.dequantization >= 0.0) {
            return bad("lr, clip norm and dequantization must be positive".into());
        }
        if self.low_size == 0 || !self.low_size.is_multiple_of(2) || self.low_size > self.model.size
        {
            return bad(format!(
                "low-resolution size {} is invalid for size {}",
                self.low_size, self.model.size
            ));
        }
        Ok(())
    }
}

/// Epoch means of the loss report plus optimizer events.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochMetrics {
    /// 1-based epoch number.
    pub epoch: usize,
    pub nll: f64,
    pub guide: f64,
    pub pixel_l1: f64,
    pub structural: f64,
    pub dc: f64,
    pub total: f64,
    pub grad_clip_events: u64,
    pub skipped_steps: u64,
}

impl EpochMetrics {
    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{}",
            self.epoch,
            self.nll,
            self.guide,
            self.pixel_l1,
            self.structural,
            self.dc,
            self.total,
            self.grad_clip_events
        )
    }
}

/// Counters that, with the config, pin down every random stream.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct TrainProgress {
    pub epoch: usize,
    pub global_step: u64,
    pub clip_events: u64,
}

pub struct Trainer<T: Real> {
    pub config: TrainConfig,
    pub model: EnhancerModel<T>,
    pub adam: Adam<T>,
    pub progress: TrainProgress,
    op: KSpaceOperator<T>,
}

/// Per-sample random streams are indexed by this many slots per step.
const STREAM_SLOTS: u64 = 1 << 16;

impl<T: Real> Trainer<T> {
    pub fn new(config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let model = EnhancerModel::new(config.model.clone(), config.seed)?;
        let adam = Adam::new(model.params(), config.adam);
        Self::resume(config, model, adam, TrainProgress::default())
    }

    pub fn resume(
        config: TrainConfig,
        model: EnhancerModel<T>,
        adam: Adam<T>,
        progress: TrainProgress,
    ) -> Result<Self> {
        config.validate()?;
        if model.config() != &config.model {
            return Err(Error::Architecture(
                "model does not match the training config".into(),
            ));
        }
        let op = KSpaceOperator::new(config.model.size, config.low_size)?;
        Ok(Trainer {
            config,
            model,
            adam,
            progress,
            op,
        })
    }

    fn check_data(&self, data: &[SampleRecord<T>]) -> Result<()> {
        if data.is_empty() {
            return Err(Error::arg("train", "no training samples"));
        }
        let n = self.config.model.size;
        for r in data {
            if r.size() != n || r.low_size() != self.config.low_size {
                return Err(Error::arg(
                    "train",
                    format!(
                        "sample {} is {}x{} / {}x{}, expected {n}x{n} / {}x{}",
                        r.seed,
                        r.size(),
                        r.size(),
                        r.low_size(),
                        r.low_size(),
                        self.config.low_size,
                        self.config.low_size
                    ),
                ));
            }
        }
        Ok(())
    }

    /// The augmented, dequantized example used at `slot` of the current step.
    fn prepare(&self, record: &SampleRecord<T>, slot: u64) -> Result<(SampleRecord<T>, Tensor<T>)> {
        let index = self.progress.global_step * STREAM_SLOTS + slot;
        let seed = self.config.seed;
        let rec = if self.config.augment {
            Augmentation::draw(&mut Rng::stream(seed, domain::AUGMENT, index)).apply(record)?
        } else {
            record.clone()
        };
        let mut rng = Rng::stream(seed, domain::DEQUANTIZE, index);
        let amp = self.config.dequantization;
        let target = rec.image.map(|v| v + T::c(rng.uniform() * amp));
        Ok((rec, target))
    }

    /// Batch-mean gradients of the objective, in parameter order. Runs actnorm
    /// initialization first if the model has not seen data yet.
    pub fn gradients(
        &mut self,
        batch: &[&SampleRecord<T>],
    ) -> Result<(Vec<Tensor<T>>, Vec<LossReport>)> {
        let prepared = batch
            .iter()
            .enumerate()
            .map(|(j, r)| self.prepare(r, j as u64))
            .collect::<Result<Vec<_>>>()?;
        if !self.model.is_initialized() {
            let init: Vec<_> = prepared
                .iter()
                .map(|(r, t)| (t.clone(), r.condition()))
                .collect();
            self.model.initialize_actnorm(&init)?;
        }
        let weights = self.config.effective_weights();
        let mut sum: Option<Vec<Tensor<T>>> = None;
        let mut reports = Vec::with_capacity(batch.len());
        for (j, (rec, target)) in prepared.iter().enumerate() {
            let index = self.progress.global_step * STREAM_SLOTS + j as u64;
            let mut rng = Rng::stream(self.config.seed, domain::TEMPERATURE, index);
            let tau = rng.uniform();
            let noise = self.model.draw_noise(&mut rng);
            let measured = Measurement::from_low(&rec.low)?;
            let cond = rec.condition();
            let input = ObjectiveInput {
                target,
                measured: &measured,
                cond: &cond,
            };
            let mut tape = Tape::new();
            let bind = self.model.params().bind(&mut tape, true);
            let (loss, report) = objective_graph(
                &self.model,
                &mut tape,
                &bind,
                &self.op,
                &input,
                weights,
                tau,
                &noise,
            )?;
            if !report.total.is_finite() {
                return Err(Error::NonFinite {
                    op: "training loss",
                    index: j,
                });
            }
            let mut grads = tape.backward(loss)?;
            let g = bind.collect(&mut grads, self.model.params());
            sum = Some(match sum {
                None => g,
                Some(mut acc) => {
                    for (a, b) in acc.iter_mut().zip(&g) {
                        for (x, y) in a.data_mut().iter_mut().zip(b.data()) {
                            *x += *y;
                        }
                    }
                    acc
                }
            });
            reports.push(report);
        }
        let mut grads = sum.ok_or_else(|| Error::arg("train", "empty batch"))?;
        let inv = T::c(1.0 / batch.len() as f64);
        for g in grads.iter_mut() {
            for v in g.data_mut() {
                *v *= inv;
            }
        }
        Ok((grads, reports))
    }

    /// One optimizer step on `batch`. Returns per-sample reports.
    pub fn step(&mut self, batch: &[&SampleRecord<T>]) -> Result<Vec<LossReport>> {
        let (mut grads, reports) = self.gradients(batch)?;
        let norm2: f64 = grads
            .iter()
            .flat_map(|g| g.data())
            .map(|v| v.f64() * v.f64())
            .sum();
        let norm = Float::sqrt(norm2);
        if norm.is_finite() && norm > self.config.clip_norm {
            let s = T::c(self.config.clip_norm / norm);
            for g in grads.iter_mut() {
                for v in g.data_mut() {
                    *v *= s;
                }
            }
            self.progress.clip_events += 1;
        }
        let lr = self.config.lr_at(self.progress.epoch);
        self.adam.update(self.model.params_mut(), &grads, lr)?;
        self.progress.global_step += 1;
        Ok(reports)
    }

    /// One pass over `data` in a seeded order.
    pub fn train_epoch(&mut self, data: &[SampleRecord<T>]) -> Result<EpochMetrics> {
        self.check_data(data)?;
        let order = Rng::stream(
            self.config.seed,
            domain::SHUFFLE,
            self.progress.epoch as u64,
        )
        .permutation(data.len());
        let clips_before = self.progress.clip_events;
        let skipped_before = self.adam.skipped;
        let mut acc = [0.0f64; 6];
        let mut count = 0usize;
        for chunk in order.chunks(self.config.batch_size) {
            let batch: Vec<&SampleRecord<T>> = chunk.iter().map(|&i| &data[i]).collect();
            for r in self.step(&batch)? {
                for (a, v) in
                    acc.iter_mut()
                        .zip([r.nll, r.guide, r.pixel_l1, r.structural, r.dc, r.total])
                {
                    *a += v;
                }
                count += 1;
            }
        }
        self.progress.epoch += 1;
        let k = count as f64;
        Ok(EpochMetrics {
            epoch: self.progress.epoch,
            nll: acc[0] / k,
            guide: acc[1] / k,
            pixel_l1: acc[2] / k,
            structural: acc[3] / k,
            dc: acc[4] / k,
            total: acc[5] / k,
            grad_clip_events: self.progress.clip_events - clips_before,
            skipped_steps: self.adam.skipped - skipped_before,
        })
    }
}
