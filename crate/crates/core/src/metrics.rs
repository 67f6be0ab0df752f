//! Evaluation metrics: waveform PSNR, per-condition sample diversity and
//! agreement between generated audio and its conditioning.

use rand::Rng;
use rustfft::num_complex::Complex;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use crate::data::SynthParams;
use crate::error::{Error, Result};
use crate::flow::{sample_latent, Synthesizer};
use crate::spectral::{hann, multires_stft_loss, LossConfig};
use crate::tensor::{Real, Tensor};

/// Reported for identical inputs, where PSNR is unbounded.
pub const PSNR_CAP_DB: f64 = 1000.0;

/// Analysis window of the condition estimator, centred on each frame.
pub const ANALYSIS_WINDOW: usize = 1024;
const ANALYSIS_FFT: usize = 4096;

pub fn psnr<F: Real>(x_ref: &[F], x_gen: &[F], peak: f64) -> Result<f64> {
    if x_ref.len() != x_gen.len() || x_ref.is_empty() {
        return Err(Error::shape("psnr", &[x_ref.len()], &[x_gen.len()]));
    }
    if !(peak > 0.0) {
        return Err(Error::invalid(format!(
            "psnr peak must be positive, got {peak}"
        )));
    }
    let mse = x_ref
        .iter()
        .zip(x_gen)
        .map(|(a, b)| (a.f64() - b.f64()).powi(2))
        .sum::<f64>()
        / x_ref.len() as f64;
    if mse == 0.0 {
        return Ok(PSNR_CAP_DB);
    }
    Ok((10.0 * (peak * peak / mse).log10()).min(PSNR_CAP_DB))
}

/// Per-frame `[log f0, amplitude]` estimates, laid out `[2, frames]` like
/// the generator's conditioning. The fundamental is the strongest spectral
/// peak inside the configured f0 range (parabolic interpolation on log
/// magnitude); amplitude is the window-weighted RMS divided by the RMS of
/// the unit-amplitude harmonic stack.
pub fn extract_condition<F: Real>(x: &[F], p: &SynthParams) -> Result<Tensor<f64>> {
    p.validate()?;
    if x.len() != p.length {
        return Err(Error::shape("extract_condition", &[p.length], &[x.len()]));
    }
    let frames = p.frames();
    let window: Vec<f64> = hann(ANALYSIS_WINDOW);
    let fft = FftPlanner::<f64>::new().plan_fft_forward(ANALYSIS_FFT);
    let mut buf = vec![Complex::new(0.0, 0.0); ANALYSIS_FFT];
    let stack_rms = (p.partial_weights().iter().map(|w| w * w).sum::<f64>() / 2.0).sqrt();
    let lo_bin = ((p.f0_min * 0.8 * ANALYSIS_FFT as f64).floor() as usize).max(1);
    let hi_bin = ((p.f0_max * 1.2 * ANALYSIS_FFT as f64).ceil() as usize).min(ANALYSIS_FFT / 2 - 1);
    let mut out = vec![0.0; 2 * frames];
    for f in 0..frames {
        let centre = (f * p.hop + p.hop / 2) as isize;
        let start = centre - (ANALYSIS_WINDOW / 2) as isize;
        buf.fill(Complex::new(0.0, 0.0));
        let (mut energy, mut wsum) = (0.0, 0.0);
        for (i, w) in window.iter().enumerate() {
            let t = start + i as isize;
            if t < 0 || t as usize >= x.len() {
                continue;
            }
            let v = x[t as usize].f64() * w;
            buf[i] = Complex::new(v, 0.0);
            energy += v * v;
            wsum += w * w;
        }
        let rms = if wsum > 0.0 {
            (energy / wsum).sqrt()
        } else {
            0.0
        };
        if rms < 1e-9 {
            out[f] = p.f0_min.ln();
            out[frames + f] = 0.0;
            continue;
        }
        fft.process(&mut buf);
        let logmag = |k: usize| (buf[k].norm() + 1e-300).ln();
        let k = (lo_bin..=hi_bin)
            .max_by(|&a, &b| buf[a].norm().total_cmp(&buf[b].norm()))
            .expect("non-empty bin range");
        let (l, m, r) = (logmag(k - 1), logmag(k), logmag(k + 1));
        let denom = l - 2.0 * m + r;
        let offset = if denom < 0.0 {
            (0.5 * (l - r) / denom).clamp(-0.5, 0.5)
        } else {
            0.0
        };
        let f0 = ((k as f64 + offset) / ANALYSIS_FFT as f64).clamp(p.f0_min, p.f0_max);
        out[f] = f0.ln();
        out[frames + f] = rms / stack_rms;
    }
    Ok(Tensor::from_parts(vec![2, frames], out))
}

/// Condition consistency in dB: PSNR between re-extracted and given
/// features, each mapped to `[0, 1]` by its configured range.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Consistency {
    pub overall_db: f64,
    pub f0_db: f64,
    pub amplitude_db: f64,
}

fn normalized_features<F: Real>(c: &[F], p: &SynthParams) -> Vec<f64> {
    let frames = p.frames();
    let (lo, hi) = (p.f0_min.ln(), p.f0_max.ln());
    let amp_scale = if p.amp_max > 0.0 { p.amp_max } else { 1.0 };
    c.iter()
        .enumerate()
        .map(|(i, v)| {
            if i < frames {
                (v.f64() - lo) / (hi - lo)
            } else {
                v.f64() / amp_scale
            }
        })
        .collect()
}

pub fn consistency_metric<F: Real>(
    x_gen: &[F],
    c: &Tensor<F>,
    p: &SynthParams,
) -> Result<Consistency> {
    let frames = p.frames();
    if c.shape() != [2, frames] {
        return Err(Error::shape("consistency", &[2, frames], c.shape()));
    }
    let est = extract_condition(x_gen, p)?;
    let a = normalized_features(est.data(), p);
    let b = normalized_features(c.data(), p);
    Ok(Consistency {
        overall_db: psnr(&a, &b, 1.0)?,
        f0_db: psnr(&a[..frames], &b[..frames], 1.0)?,
        amplitude_db: psnr(&a[frames..], &b[frames..], 1.0)?,
    })
}

/// Mean of `distance` over all unordered pairs.
pub fn pairwise_diversity<T>(
    samples: &[T],
    distance: impl Fn(&T, &T) -> Result<f64>,
) -> Result<f64> {
    let k = samples.len();
    if k < 2 {
        return Err(Error::invalid(format!(
            "diversity needs K >= 2 samples, got {k}"
        )));
    }
    let mut total = 0.0;
    for i in 0..k {
        for j in i + 1..k {
            total += distance(&samples[i], &samples[j])?;
        }
    }
    Ok(total / (k * (k - 1) / 2) as f64)
}

/// Multi-resolution STFT loss averaged over both argument orders, so the
/// distance is symmetric. An all-silent side contributes no term; two
/// identical signals are at distance 0.
pub fn spectral_distance<F: Real>(a: &Tensor<F>, b: &Tensor<F>, cfg: &LossConfig) -> Result<f64> {
    if a == b {
        return Ok(0.0);
    }
    let mut terms = Vec::with_capacity(2);
    for (r, g) in [(a, b), (b, a)] {
        match multires_stft_loss(r, g, cfg) {
            Ok(v) => terms.push(v),
            Err(Error::Degenerate(_)) => {}
            Err(e) => return Err(e),
        }
    }
    if terms.is_empty() {
        return Err(Error::Degenerate(
            "spectral distance between silent signals".into(),
        ));
    }
    Ok(terms.iter().sum::<f64>() / terms.len() as f64)
}

/// Diversity of `model` for one condition `c [2, frames]`: `k` latents are
/// drawn from `N(0, σ² I)` and the `k` generated waveforms compared pairwise.
pub fn diversity_score<F: Real, S: Synthesizer<F>, R: Rng>(
    model: &S,
    c: &Tensor<F>,
    k: usize,
    sigma: f64,
    rng: &mut R,
    distance: impl Fn(&Tensor<F>, &Tensor<F>) -> Result<f64>,
) -> Result<f64> {
    if k < 2 {
        return Err(Error::invalid(format!(
            "diversity needs K >= 2 samples, got {k}"
        )));
    }
    let samples = draw_samples(model, c, k, sigma, rng)?;
    pairwise_diversity(&samples, distance)
}

/// `k` waveforms for one condition, generated as one batch.
pub fn draw_samples<F: Real, S: Synthesizer<F>, R: Rng>(
    model: &S,
    c: &Tensor<F>,
    k: usize,
    sigma: f64,
    rng: &mut R,
) -> Result<Vec<Tensor<F>>> {
    let [ch, frames] = c.shape()[..] else {
        return Err(Error::shape("diversity condition", &[2, 0], c.shape()));
    };
    let cb = Tensor::stack_batch(&vec![c.clone().reshape([1, ch, frames])?; k])?;
    let len = model.frame_hop() * frames;
    let z = sample_latent(rng, model.latent_shape(k, len)?, sigma);
    let x = model.sample(&z, &cb)?;
    (0..k)
        .map(|i| x.batch_slice(i, i + 1)?.reshape([len]))
        .collect()
}
