//! The conditional flow enhancer: architecture, likelihood and sampling.

use alloc::format;
use alloc::vec::Vec;

use num_traits::Float;

use crate::autodiff::{Tape, Var};
use crate::condition::{
    check_temperature, gaussian_log_prob, sum_vars, BaseDistribution, Condition, ConditionEncoder,
    Encoded, EncoderLayout, GaussianLevel,
};
use crate::error::{Error, Result};
use crate::flow::{
    merge, split, ActNorm, AffineInjector, CondAffineCoupling, FlowStep, InvConv1x1, StepKind,
    Transition,
};
use crate::params::{Binding, ParamStore};
use crate::real::Real;
use crate::rng::{domain, Rng};
use crate::tensor::Tensor;

/// Architecture switches and sizes.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ModelConfig {
    /// Side length `N` of the square maps.
    pub size: usize,
    pub scales: usize,
    /// Flow steps per scale.
    pub steps: usize,
    /// Steps of the full-resolution single-channel stage.
    pub flow1_steps: usize,
    /// Whether the full-resolution stage contains affine injectors.
    pub flow1_injector: bool,
    /// Width of coupling and injector networks.
    pub hidden: usize,
    pub cond_width: usize,
    pub cond_features: usize,
    pub residual_blocks: usize,
    /// Feed T1 and FLAIR to the encoder (otherwise only the SR map).
    pub mri_prior: bool,
    /// Learned conditional base (otherwise the standard normal).
    pub cond_base: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl ModelConfig {
    pub fn desk() -> Self {
        ModelConfig {
            size: 32,
            scales: 2,
            steps: 4,
            flow1_steps: 2,
            flow1_injector: true,
            hidden: 32,
            cond_width: 16,
            cond_features: 8,
            residual_blocks: 2,
            mri_prior: true,
            cond_base: true,
        }
    }

    pub fn full() -> Self {
        ModelConfig {
            size: 64,
            scales: 4,
            steps: 12,
            hidden: 64,
            cond_width: 32,
            cond_features: 16,
            ..Self::desk()
        }
    }

    /// Actnorm-only flow over the full-resolution map with the fixed
    /// standard-normal base.
    pub fn actnorm_only(size: usize) -> Self {
        ModelConfig {
            size,
            scales: 0,
            steps: 0,
            flow1_steps: 1,
            flow1_injector: false,
            cond_base: false,
            ..Self::desk()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: alloc::string::String| Err(Error::Architecture(m));
        if self.size < 2 || !self.size.is_multiple_of(2) {
            return fail(format!(
                "size must be even and at least 2, got {}",
                self.size
            ));
        }
        if self.scales > 0 && !self.size.is_multiple_of(1 << self.scales) {
            return fail(format!(
                "size {} is not divisible by 2^{} for {} scales",
                self.size, self.scales, self.scales
            ));
        }
        if self.hidden == 0 || self.cond_width == 0 || self.cond_features == 0 {
            return fail("network widths must be positive".into());
        }
        Ok(())
    }

    /// `[C,H,W]` of every latent, splits first and the final output last.
    pub fn latent_shapes(&self) -> Vec<Vec<usize>> {
        let mut out = Vec::new();
        let (mut c, mut h) = (1, self.size);
        for s in 1..=self.scales {
            c *= 4;
            h /= 2;
            if s < self.scales {
                out.push(alloc::vec![c / 2, h, h]);
                c /= 2;
            }
        }
        out.push(alloc::vec![c, h, h]);
        out
    }

    /// Resolution level of each latent (0 = full size).
    fn latent_levels(&self) -> Vec<usize> {
        if self.scales == 0 {
            alloc::vec![0]
        } else {
            (1..=self.scales).collect()
        }
    }

    fn encoder_layout(&self) -> EncoderLayout {
        let mut feature_levels = Vec::new();
        if self.flow1_injector && self.flow1_steps > 0 {
            feature_levels.push(0);
        }
        if self.steps > 0 {
            feature_levels.extend(1..=self.scales);
        }
        let latent_levels = if self.cond_base {
            self.latent_levels()
                .into_iter()
                .zip(self.latent_shapes())
                .map(|(l, s)| (l, s[0]))
                .collect()
        } else {
            Vec::new()
        };
        EncoderLayout {
            size: self.size,
            input_channels: if self.mri_prior { 3 } else { 1 },
            width: self.cond_width,
            feature_channels: self.cond_features,
            feature_levels,
            latent_levels,
            residual_blocks: self.residual_blocks,
        }
    }
}

/// One entry of the flow in execution order.
#[derive(Debug, Clone)]
pub enum Stage {
    /// A step operating at resolution `level`.
    Step { step: FlowStep, level: usize },
    /// Half the channels leave as a latent.
    Split { level: usize },
}

/// Value-level result of the training-direction pass.
#[derive(Debug, Clone, PartialEq)]
pub struct ForwardPass<T> {
    pub latents: Vec<Tensor<T>>,
    pub logdet: T,
    /// Log-determinant of every stage in order (zero for splits).
    pub stage_logdets: Vec<T>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NllReport<T> {
    /// Negative log-likelihood in nats.
    pub nll: T,
    pub per_pixel: T,
    pub log_prob: T,
    pub logdet: T,
}

#[derive(Debug, Clone)]
pub struct EnhancerModel<T> {
    config: ModelConfig,
    params: ParamStore<T>,
    encoder: ConditionEncoder,
    stages: Vec<Stage>,
    initialized: bool,
}

impl<T: Real> EnhancerModel<T> {
    /// Fresh model with parameters drawn from the `seed` init stream.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = Rng::stream(seed, domain::INIT, 0);
        let mut params = ParamStore::new();
        let encoder = ConditionEncoder::new(&mut params, config.encoder_layout(), &mut rng);
        let cu = config.cond_features;
        let mut stages = Vec::new();
        for k in 0..config.flow1_steps {
            let name = format!("flow.f1.{k}");
            stages.push(Stage::Step {
                step: FlowStep::ActNorm(ActNorm::new(&mut params, &format!("{name}.actnorm"), 1)),
                level: 0,
            });
            if config.flow1_injector {
                let inj = AffineInjector::new(
                    &mut params,
                    &format!("{name}.injector"),
                    1,
                    cu,
                    config.hidden,
                    &mut rng,
                );
                stages.push(Stage::Step {
                    step: FlowStep::AffineInjector(inj),
                    level: 0,
                });
            }
        }
        let mut c = 1;
        for s in 1..=config.scales {
            c *= 4;
            stages.push(Stage::Step {
                step: FlowStep::Squeeze,
                level: s,
            });
            for k in 0..config.steps {
                let name = format!("flow.s{s}.{k}");
                let steps = [
                    FlowStep::ActNorm(ActNorm::new(&mut params, &format!("{name}.actnorm"), c)),
                    FlowStep::InvConv1x1(InvConv1x1::new(
                        &mut params,
                        &format!("{name}.invconv"),
                        c,
                        &mut rng,
                    )),
                    FlowStep::AffineInjector(AffineInjector::new(
                        &mut params,
                        &format!("{name}.injector"),
                        c,
                        cu,
                        config.hidden,
                        &mut rng,
                    )),
                    FlowStep::CondAffineCoupling(CondAffineCoupling::new(
                        &mut params,
                        &format!("{name}.coupling"),
                        c,
                        cu,
                        config.hidden,
                        &mut rng,
                    )?),
                ];
                stages.extend(steps.into_iter().map(|step| Stage::Step { step, level: s }));
            }
            let tr = Transition::new(&mut params, &format!("flow.s{s}.transition"), c, &mut rng);
            stages.push(Stage::Step {
                step: FlowStep::Transition(tr),
                level: s,
            });
            if s < config.scales {
                stages.push(Stage::Split { level: s });
                c /= 2;
            }
        }
        Ok(EnhancerModel {
            config,
            params,
            encoder,
            stages,
            initialized: false,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.params
    }

    pub fn stages(&self) -> &[Stage] {
        &self.stages
    }

    pub fn is_initialized(&self) -> bool {
        self.initialized
    }

    /// Mark actnorm layers as initialized, e.g. after loading trained
    /// parameters.
    pub fn set_initialized(&mut self, initialized: bool) {
        self.initialized = initialized;
    }

    pub fn latent_shapes(&self) -> Vec<Vec<usize>> {
        self.config.latent_shapes()
    }

    pub fn latent_len(&self) -> usize {
        self.latent_shapes()
            .iter()
            .map(|s| s.iter().product::<usize>())
            .sum()
    }

    fn check_image(&self, image: &Tensor<T>) -> Result<()> {
        let n = self.config.size;
        if image.shape() != [1, n, n] {
            return Err(Error::ShapeMismatch {
                op: "enhancer input",
                left: image.shape().to_vec(),
                right: alloc::vec![1, n, n],
            });
        }
        Ok(())
    }

    fn check_latents(&self, z: &[Tensor<T>]) -> Result<()> {
        let shapes = self.latent_shapes();
        if z.len() != shapes.len() {
            return Err(Error::arg(
                "latent pyramid",
                format!("expected {} levels, got {}", shapes.len(), z.len()),
            ));
        }
        for (zi, s) in z.iter().zip(&shapes) {
            if zi.shape() != s.as_slice() {
                return Err(Error::ShapeMismatch {
                    op: "latent pyramid",
                    left: zi.shape().to_vec(),
                    right: s.clone(),
                });
            }
        }
        Ok(())
    }

    // ---- graph-level API ------------------------------------------------

    pub fn encode(
        &self,
        tape: &mut Tape<T>,
        bind: &Binding,
        cond: &Condition<T>,
    ) -> Result<Encoded> {
        let input = self.encoder.input(tape, cond)?;
        self.encoder.forward(tape, bind, input)
    }

    /// Training direction: image to latents plus total log-determinant.
    pub fn forward_graph(
        &self,
        tape: &mut Tape<T>,
        bind: &Binding,
        x: Var,
        enc: &Encoded,
    ) -> Result<(Vec<Var>, Var, Vec<Var>)> {
        let mut h = x;
        let mut latents = Vec::new();
        let mut lds = Vec::with_capacity(self.stages.len());
        for (i, stage) in self.stages.iter().enumerate() {
            match stage {
                Stage::Step { step, level } => {
                    let (y, ld) = step
                        .forward(tape, bind, h, enc.feature(*level))
                        .map_err(|e| e.at_step(i, step.kind().name()))?;
                    h = y;
                    lds.push(ld);
                }
                Stage::Split { .. } => {
                    let (kept, z) =
                        split(tape, h).map_err(|e| e.at_step(i, StepKind::Split.name()))?;
                    latents.push(z);
                    h = kept;
                    lds.push(tape.constant(Tensor::scalar(T::zero())));
                }
            }
        }
        latents.push(h);
        let total = sum_vars(tape, &lds)?;
        Ok((latents, total, lds))
    }

    /// Inference direction: latents to image plus the inverse
    /// log-determinant.
    pub fn inverse_graph(
        &self,
        tape: &mut Tape<T>,
        bind: &Binding,
        z: &[Var],
        enc: &Encoded,
    ) -> Result<(Var, Var)> {
        let (last, rest) = z
            .split_last()
            .ok_or_else(|| Error::arg("latent pyramid", "no levels"))?;
        let mut h = *last;
        let mut pending = rest.len();
        let mut lds = Vec::with_capacity(self.stages.len());
        for (i, stage) in self.stages.iter().enumerate().rev() {
            match stage {
                Stage::Step { step, level } => {
                    let (x, ld) = step
                        .inverse(tape, bind, h, enc.feature(*level))
                        .map_err(|e| e.at_step(i, step.kind().name()))?;
                    h = x;
                    lds.push(ld);
                }
                Stage::Split { .. } => {
                    pending = pending
                        .checked_sub(1)
                        .ok_or_else(|| Error::arg("latent pyramid", "too few levels"))?;
                    h = merge(tape, h, rest[pending])
                        .map_err(|e| e.at_step(i, StepKind::Split.name()))?;
                }
            }
        }
        let total = sum_vars(tape, &lds)?;
        Ok((h, total))
    }

    /// Log density of latents under the (conditional) base.
    pub fn log_prob_graph(&self, tape: &mut Tape<T>, z: &[Var], enc: &Encoded) -> Result<Var> {
        let mut terms = Vec::with_capacity(z.len());
        for (i, &zi) in z.iter().enumerate() {
            let params = enc.base.as_ref().map(|b| b[i]);
            terms.push(gaussian_log_prob(tape, zi, params)?);
        }
        sum_vars(tape, &terms)
    }

    /// `z = mean + tau * sigma * eps` on the tape, differentiable through the
    /// base heads. `eps` holds one standard-normal tensor per level.
    pub fn sample_graph(
        &self,
        tape: &mut Tape<T>,
        enc: &Encoded,
        tau: f64,
        eps: &[Tensor<T>],
    ) -> Result<Vec<Var>> {
        check_temperature(tau)?;
        let shapes = self.latent_shapes();
        let mut out = Vec::with_capacity(shapes.len());
        for (i, shape) in shapes.iter().enumerate() {
            let noise = if tau == 0.0 {
                None
            } else {
                let e = eps
                    .get(i)
                    .ok_or_else(|| Error::arg("latent sample", "missing noise level"))?;
                Some(e.map(|v| v * T::c(tau)))
            };
            let z = match (enc.base.as_ref().map(|b| b[i]), noise) {
                (Some((mean, _)), None) => mean,
                (Some((mean, log_sigma)), Some(n)) => {
                    let sigma = tape.exp(log_sigma)?;
                    let n = tape.constant(n);
                    let d = tape.mul(sigma, n)?;
                    tape.add(mean, d)?
                }
                (None, None) => tape.constant(Tensor::zeros(shape)),
                (None, Some(n)) => tape.constant(n),
            };
            out.push(z);
        }
        Ok(out)
    }

    /// Standard-normal noise for every latent level.
    pub fn draw_noise(&self, rng: &mut Rng) -> Vec<Tensor<T>> {
        self.latent_shapes()
            .iter()
            .map(|s| rng.normal_tensor(s))
            .collect()
    }

    // ---- value-level API ------------------------------------------------

    fn frozen(&self) -> (Tape<T>, Binding) {
        let mut tape = Tape::new();
        let bind = self.params.bind(&mut tape, false);
        (tape, bind)
    }

    pub fn forward(&self, image: &Tensor<T>, cond: &Condition<T>) -> Result<ForwardPass<T>> {
        self.check_image(image)?;
        let (mut tape, bind) = self.frozen();
        let enc = self.encode(&mut tape, &bind, cond)?;
        let x = tape.constant(image.clone());
        let (z, ld, lds) = self.forward_graph(&mut tape, &bind, x, &enc)?;
        Ok(ForwardPass {
            latents: z.iter().map(|&v| tape.value(v).clone()).collect(),
            logdet: tape.value(ld).item(),
            stage_logdets: lds.iter().map(|&v| tape.value(v).item()).collect(),
        })
    }

    /// Inverse pass; also returns the inverse log-determinant.
    pub fn inverse_with_logdet(
        &self,
        z: &[Tensor<T>],
        cond: &Condition<T>,
    ) -> Result<(Tensor<T>, T)> {
        self.check_latents(z)?;
        let (mut tape, bind) = self.frozen();
        let enc = self.encode(&mut tape, &bind, cond)?;
        let zv: Vec<Var> = z.iter().map(|t| tape.constant(t.clone())).collect();
        let (x, ld) = self.inverse_graph(&mut tape, &bind, &zv, &enc)?;
        Ok((tape.value(x).clone(), tape.value(ld).item()))
    }

    pub fn inverse(&self, z: &[Tensor<T>], cond: &Condition<T>) -> Result<Tensor<T>> {
        Ok(self.inverse_with_logdet(z, cond)?.0)
    }

    pub fn nll(&self, image: &Tensor<T>, cond: &Condition<T>) -> Result<NllReport<T>> {
        self.check_image(image)?;
        let (mut tape, bind) = self.frozen();
        let enc = self.encode(&mut tape, &bind, cond)?;
        let x = tape.constant(image.clone());
        let (z, ld, _) = self.forward_graph(&mut tape, &bind, x, &enc)?;
        let lp = self.log_prob_graph(&mut tape, &z, &enc)?;
        let log_prob = tape.value(lp).item();
        let logdet = tape.value(ld).item();
        let nll = -log_prob - logdet;
        Ok(NllReport {
            nll,
            per_pixel: nll / T::c((self.config.size * self.config.size) as f64),
            log_prob,
            logdet,
        })
    }

    /// The base distribution predicted for `cond`.
    pub fn base(&self, cond: &Condition<T>) -> Result<BaseDistribution<T>> {
        let (mut tape, bind) = self.frozen();
        let enc = self.encode(&mut tape, &bind, cond)?;
        Ok(match &enc.base {
            None => BaseDistribution::standard(&self.latent_shapes()),
            Some(levels) => BaseDistribution {
                levels: levels
                    .iter()
                    .map(|&(m, ls)| GaussianLevel {
                        mean: tape.value(m).clone(),
                        log_sigma: tape.value(ls).clone(),
                    })
                    .collect(),
            },
        })
    }

    /// Enhanced map: inverse pass at a latent drawn with temperature `tau`.
    pub fn enhance(&self, cond: &Condition<T>, tau: f64, rng: &mut Rng) -> Result<Tensor<T>> {
        if !self.initialized {
            return Err(Error::Uninitialized);
        }
        let z = self.base(cond)?.sample(tau, rng)?;
        self.inverse(&z, cond)
    }

    /// Pixelwise mean and population standard deviation over `samples`
    /// enhancements, sample `i` drawn from its own stream of `master_seed`.
    pub fn uncertainty(
        &self,
        cond: &Condition<T>,
        tau: f64,
        samples: usize,
        master_seed: u64,
    ) -> Result<(Tensor<T>, Tensor<T>)> {
        if samples < 2 {
            return Err(Error::arg(
                "uncertainty",
                format!("need at least 2 samples, got {samples}"),
            ));
        }
        if !self.initialized {
            return Err(Error::Uninitialized);
        }
        let base = self.base(cond)?;
        let n = self.config.size * self.config.size;
        let mut sum = alloc::vec![0.0f64; n];
        let mut sq = alloc::vec![0.0f64; n];
        for i in 0..samples {
            let mut rng = Rng::stream(master_seed, domain::UNCERTAINTY, i as u64);
            let z = base.sample(tau, &mut rng)?;
            let x = self.inverse(&z, cond)?;
            for (j, v) in x.data().iter().enumerate() {
                sum[j] += v.f64();
                sq[j] += v.f64() * v.f64();
            }
        }
        let k = samples as f64;
        let shape = [1, self.config.size, self.config.size];
        let mean = Tensor::from_fn(&shape, |j| T::c(sum[j] / k));
        let std = Tensor::from_fn(&shape, |j| {
            let m = sum[j] / k;
            T::c(Float::sqrt((sq[j] / k - m * m).max(0.0)))
        });
        Ok((mean, std))
    }

    /// Data-dependent actnorm initialization over `batch`, walking the flow
    /// stage by stage. Runs at most once; later calls are no-ops.
    pub fn initialize_actnorm(&mut self, batch: &[(Tensor<T>, Condition<T>)]) -> Result<()> {
        if self.initialized {
            return Ok(());
        }
        if batch.is_empty() {
            return Err(Error::arg("actnorm init", "empty batch"));
        }
        let mut features = Vec::with_capacity(batch.len());
        for (image, cond) in batch {
            self.check_image(image)?;
            let (mut tape, bind) = self.frozen();
            let enc = self.encode(&mut tape, &bind, cond)?;
            let f: Vec<Option<Tensor<T>>> = enc
                .features
                .iter()
                .map(|v| v.map(|v| tape.value(v).clone()))
                .collect();
            features.push(f);
        }
        let mut acts: Vec<Tensor<T>> = batch.iter().map(|b| b.0.clone()).collect();
        for i in 0..self.stages.len() {
            let actnorm = match &self.stages[i] {
                Stage::Step {
                    step: FlowStep::ActNorm(a),
                    ..
                } => Some(a.clone()),
                Stage::Step {
                    step: FlowStep::Transition(t),
                    ..
                } => Some(t.actnorm.clone()),
                _ => None,
            };
            if let Some(a) = actnorm {
                let refs: Vec<&Tensor<T>> = acts.iter().collect();
                let (b, s) = a
                    .init_values(&refs)
                    .map_err(|e| e.at_step(i, StepKind::ActNorm.name()))?;
                self.params.set(a.bias, b)?;
                self.params.set(a.scale, s)?;
            }
            for (x, f) in acts.iter_mut().zip(&features) {
                *x = self.apply_stage(i, x, f)?;
            }
        }
        self.initialized = true;
        Ok(())
    }

    fn apply_stage(
        &self,
        i: usize,
        x: &Tensor<T>,
        features: &[Option<Tensor<T>>],
    ) -> Result<Tensor<T>> {
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone());
        match &self.stages[i] {
            Stage::Split { .. } => {
                let (kept, _) = split(&mut tape, xv)?;
                Ok(tape.value(kept).clone())
            }
            Stage::Step { step, level } => {
                let bind = self.params.bind(&mut tape, false);
                let u = features
                    .get(*level)
                    .and_then(Option::as_ref)
                    .map(|f| tape.constant(f.clone()));
                let (y, _) = step
                    .forward(&mut tape, &bind, xv, u)
                    .map_err(|e| e.at_step(i, step.kind().name()))?;
                Ok(tape.value(y).clone())
            }
        }
    }
}
