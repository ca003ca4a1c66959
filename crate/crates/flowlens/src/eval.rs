//! Test-split scoring: fidelity, consistency and sharpness of enhancements.

use flowlens_core::kspace::high_frequency_ratio;
use flowlens_core::losses::{dc_loss_value, psnr, ssim};
use flowlens_core::rng::domain;
use flowlens_core::synth::SampleRecord;
use flowlens_core::{EnhancerModel, Real, Rng, Tensor};

use crate::error::{CliError, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Scores {
    pub psnr: f64,
    pub ssim: f64,
    pub dc: f64,
    pub hf_ratio: f64,
}

/// Scores `enhanced` against the record's ground truth and measurement.
pub fn score<T: Real>(record: &SampleRecord<T>, enhanced: &Tensor<T>) -> Result<Scores> {
    Ok(Scores {
        psnr: psnr(enhanced, &record.image)?,
        ssim: ssim(enhanced, &record.image)?,
        dc: dc_loss_value(&record.low, enhanced)?,
        hf_ratio: high_frequency_ratio(enhanced, record.low_size())?.f64(),
    })
}

/// Enhancement of sample `index`; its latent noise comes from a stream of
/// `seed` fixed per sample, so every temperature reuses the same draw.
pub fn enhance_sample<T: Real>(
    model: &EnhancerModel<T>,
    record: &SampleRecord<T>,
    tau: f64,
    seed: u64,
    index: usize,
) -> Result<Tensor<T>> {
    let mut rng = Rng::stream(seed, domain::EVAL, index as u64);
    let out = model.enhance(&record.condition(), tau, &mut rng)?;
    if let Some(i) = out.first_non_finite() {
        return Err(CliError::Numerical(format!(
            "enhancement of sample {index} is non-finite at pixel {i}"
        )));
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SweepRow {
    pub tau: f64,
    pub scores: Scores,
}

pub const SWEEP_HEADER: &str = "tau,psnr,ssim,dc,hf_ratio";

impl SweepRow {
    pub fn csv_row(&self) -> String {
        let s = self.scores;
        format!("{},{},{},{},{}", self.tau, s.psnr, s.ssim, s.dc, s.hf_ratio)
    }
}

fn mean_scores(all: &[Scores]) -> Scores {
    let k = all.len() as f64;
    Scores {
        psnr: all.iter().map(|s| s.psnr).sum::<f64>() / k,
        ssim: all.iter().map(|s| s.ssim).sum::<f64>() / k,
        dc: all.iter().map(|s| s.dc).sum::<f64>() / k,
        hf_ratio: all.iter().map(|s| s.hf_ratio).sum::<f64>() / k,
    }
}

/// Mean scores over `records` at every temperature in `taus`.
pub fn sweep<T: Real>(
    model: &EnhancerModel<T>,
    records: &[SampleRecord<T>],
    taus: &[f64],
    seed: u64,
) -> Result<Vec<SweepRow>> {
    if taus.is_empty() {
        return Err(CliError::Usage("the temperature list is empty".into()));
    }
    if records.is_empty() {
        return Err(CliError::Data("no samples to evaluate".into()));
    }
    taus.iter()
        .map(|&tau| {
            let scores = records
                .iter()
                .enumerate()
                .map(|(i, r)| score(r, &enhance_sample(model, r, tau, seed, i)?))
                .collect::<Result<Vec<_>>>()?;
            Ok(SweepRow {
                tau,
                scores: mean_scores(&scores),
            })
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalRow {
    pub index: usize,
    pub seed: u64,
    pub psnr: f64,
    pub ssim: f64,
    /// Negative log-likelihood of the ground truth, nats per pixel.
    pub nll: f64,
}

pub const EVAL_HEADER: &str = "sample,seed,psnr,ssim,nll_npp";

/// Per-sample fidelity and likelihood; the last row holds the means.
pub fn evaluate<T: Real>(
    model: &EnhancerModel<T>,
    records: &[(usize, SampleRecord<T>)],
    tau: f64,
    seed: u64,
) -> Result<(Vec<EvalRow>, EvalRow)> {
    if records.is_empty() {
        return Err(CliError::Data("no samples to evaluate".into()));
    }
    let rows = records
        .iter()
        .enumerate()
        .map(|(i, (index, r))| {
            let s = score(r, &enhance_sample(model, r, tau, seed, i)?)?;
            let nll = model.nll(&r.image, &r.condition())?.per_pixel.f64();
            Ok(EvalRow {
                index: *index,
                seed: r.seed,
                psnr: s.psnr,
                ssim: s.ssim,
                nll,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let k = rows.len() as f64;
    let mean = EvalRow {
        index: 0,
        seed: 0,
        psnr: rows.iter().map(|r| r.psnr).sum::<f64>() / k,
        ssim: rows.iter().map(|r| r.ssim).sum::<f64>() / k,
        nll: rows.iter().map(|r| r.nll).sum::<f64>() / k,
    };
    Ok((rows, mean))
}
