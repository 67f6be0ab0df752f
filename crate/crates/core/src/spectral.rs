//! Distillation objective: L1 reconstruction plus a multi-resolution STFT
//! feature loss made of spectral-convergence and log-magnitude terms.
//!
//! Per resolution, with `S = |STFT(x_ref)|` and `Ŝ = |STFT(x_gen)|`:
//!
//! * spectral convergence `‖S − Ŝ‖_F / ‖S‖_F` (Frobenius over the batch),
//! * log magnitude `mean |log max(S, floor) − log max(Ŝ, floor)|`.
//!
//! The feature loss averages `SC + LogMag` over resolutions (or sums them,
//! see [`Aggregate`]); the total is `L1 + α · feature`.

use serde::{Deserialize, Serialize};

use rustfft::num_complex::Complex;
use rustfft::FftPlanner;

use crate::error::{Error, Result};
use crate::graph::{Eager, Graph};
use crate::tensor::{Real, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StftConfig {
    pub fft_size: usize,
    pub win_size: usize,
    pub hop: usize,
}

impl StftConfig {
    pub const fn new(fft_size: usize, win_size: usize, hop: usize) -> Self {
        StftConfig {
            fft_size,
            win_size,
            hop,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !self.fft_size.is_power_of_two() {
            return Err(Error::config(format!(
                "fft_size {} is not a power of two",
                self.fft_size
            )));
        }
        if self.hop == 0 || self.hop > self.win_size || self.win_size > self.fft_size {
            return Err(Error::config(format!(
                "need 0 < hop <= win_size <= fft_size, got {self:?}"
            )));
        }
        Ok(())
    }

    pub fn bins(&self) -> usize {
        self.fft_size / 2 + 1
    }

    /// Frames covering a signal of `len` samples (no padding).
    pub fn frames(&self, len: usize) -> Result<usize> {
        if len < self.win_size {
            return Err(Error::invalid(format!(
                "signal of {len} samples is shorter than one {}-sample window",
                self.win_size
            )));
        }
        Ok(1 + (len - self.win_size) / self.hop)
    }
}

/// Periodic Hann window.
pub fn hann<F: Real>(len: usize) -> Vec<F> {
    let n = len as f64;
    (0..len)
        .map(|i| F::of(0.5 - 0.5 * (2.0 * std::f64::consts::PI * i as f64 / n).cos()))
        .collect()
}

fn signal_rows<F: Real>(shape: &[usize]) -> Result<(usize, usize)> {
    match shape {
        [b, n] => Ok((*b, *n)),
        _ => Err(Error::shape("stft_magnitude", shape, &[0, 0])),
    }
}

/// Magnitudes `[B, frames, bins]` and the complex spectrum they came from.
pub(crate) fn stft_forward<F: Real>(
    x: &Tensor<F>,
    cfg: &StftConfig,
) -> Result<(Tensor<F>, Vec<Complex<F>>)> {
    cfg.validate()?;
    let (batch, len) = signal_rows::<F>(x.shape())?;
    let frames = cfg.frames(len)?;
    let bins = cfg.bins();
    let window = hann::<F>(cfg.win_size);
    let fft = FftPlanner::<F>::new().plan_fft_forward(cfg.fft_size);
    let mut buf = vec![Complex::new(F::zero(), F::zero()); cfg.fft_size];
    let mut scratch = vec![Complex::new(F::zero(), F::zero()); fft.get_inplace_scratch_len()];
    let mut spec = Vec::with_capacity(batch * frames * bins);
    let mut mag = Vec::with_capacity(batch * frames * bins);
    for row in x.data().chunks_exact(len) {
        for f in 0..frames {
            let seg = &row[f * cfg.hop..f * cfg.hop + cfg.win_size];
            for (i, c) in buf.iter_mut().enumerate() {
                *c = if i < cfg.win_size {
                    Complex::new(seg[i] * window[i], F::zero())
                } else {
                    Complex::new(F::zero(), F::zero())
                };
            }
            fft.process_with_scratch(&mut buf, &mut scratch);
            for c in &buf[..bins] {
                spec.push(*c);
                mag.push((c.re * c.re + c.im * c.im).sqrt());
            }
        }
    }
    Ok((Tensor::from_parts(vec![batch, frames, bins], mag), spec))
}

/// Adjoint of [`stft_forward`]. With `A_k = G_k · conj(X_k) / |X_k|` the
/// gradient of a windowed frame is `Re(DFT(A))`, scattered back through the
/// window into overlapping frame positions.
pub(crate) fn stft_backward<F: Real>(
    x_shape: &[usize],
    cfg: &StftConfig,
    spec: &[Complex<F>],
    mag: &Tensor<F>,
    g: &Tensor<F>,
) -> Result<Tensor<F>> {
    let (batch, len) = signal_rows::<F>(x_shape)?;
    let frames = cfg.frames(len)?;
    let bins = cfg.bins();
    let window = hann::<F>(cfg.win_size);
    let fft = FftPlanner::<F>::new().plan_fft_forward(cfg.fft_size);
    let mut buf = vec![Complex::new(F::zero(), F::zero()); cfg.fft_size];
    let mut scratch = vec![Complex::new(F::zero(), F::zero()); fft.get_inplace_scratch_len()];
    let mut gx = vec![F::zero(); batch * len];
    for b in 0..batch {
        for f in 0..frames {
            let base = (b * frames + f) * bins;
            for c in buf.iter_mut() {
                *c = Complex::new(F::zero(), F::zero());
            }
            for k in 0..bins {
                let m = mag.data()[base + k];
                if m > F::zero() {
                    buf[k] = spec[base + k].conj() * (g.data()[base + k] / m);
                }
            }
            fft.process_with_scratch(&mut buf, &mut scratch);
            let dst = &mut gx[b * len + f * cfg.hop..b * len + f * cfg.hop + cfg.win_size];
            for (i, d) in dst.iter_mut().enumerate() {
                *d += window[i] * buf[i].re;
            }
        }
    }
    Ok(Tensor::from_parts(vec![batch, len], gx))
}

/// Magnitude spectrogram of a `[B, N]` batch (or a 1-D signal as `[1, N]`).
pub fn stft_magnitude<F: Real>(x: &Tensor<F>, cfg: &StftConfig) -> Result<Tensor<F>> {
    let x2 = as_rows(x)?;
    Ok(stft_forward(&x2, cfg)?.0)
}

fn as_rows<F: Real>(x: &Tensor<F>) -> Result<Tensor<F>> {
    match x.shape() {
        [n] => x.clone().reshape([1, *n]),
        [_, _] => Ok(x.clone()),
        [b, 1, n] => x.clone().reshape([*b, *n]),
        s => Err(Error::shape("signal", s, &[0, 1, 0])),
    }
}

/// How per-resolution STFT losses are combined.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Aggregate {
    #[default]
    Mean,
    Sum,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossConfig {
    pub alpha: f64,
    pub resolutions: Vec<StftConfig>,
    pub log_floor: f64,
    pub aggregate: Aggregate,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            alpha: 1e-2,
            resolutions: vec![
                StftConfig::new(256, 256, 64),
                StftConfig::new(512, 512, 128),
                StftConfig::new(1024, 1024, 256),
            ],
            log_floor: 1e-7,
            aggregate: Aggregate::Mean,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha >= 0.0 && self.alpha.is_finite()) {
            return Err(Error::config(format!(
                "alpha must be >= 0, got {}",
                self.alpha
            )));
        }
        if self.resolutions.is_empty() {
            return Err(Error::config("at least one STFT resolution is required"));
        }
        if !(self.log_floor > 0.0) {
            return Err(Error::config("log_floor must be positive"));
        }
        for r in &self.resolutions {
            r.validate()?;
        }
        Ok(())
    }

    /// Shortest signal every resolution can analyse.
    pub fn min_length(&self) -> usize {
        self.resolutions
            .iter()
            .map(|r| r.win_size)
            .max()
            .unwrap_or(0)
    }
}

/// Reference-side spectrogram with its Frobenius norm, computed once per
/// resolution and shared by both terms.
struct RefSpec<F> {
    mag: Tensor<F>,
    norm: F,
}

fn ref_spec<F: Real>(x_ref: &Tensor<F>, cfg: &StftConfig) -> Result<RefSpec<F>> {
    let mag = stft_forward(&as_rows(x_ref)?, cfg)?.0;
    let norm = mag.data().iter().map(|&v| v * v).sum::<F>().sqrt();
    Ok(RefSpec { mag, norm })
}

fn gen_rows<F: Real, G: Graph<F>>(g: &mut G, x: &G::V) -> Result<G::V> {
    let shape = g.value(x).shape().to_vec();
    match shape[..] {
        [_, _] => Ok(x.clone()),
        [b, 1, n] => g.reshape(x, &[b, n]),
        [n] => g.reshape(x, &[1, n]),
        _ => Err(Error::shape("signal", &shape, &[0, 1, 0])),
    }
}

fn check_pair<F: Real>(x_ref: &Tensor<F>, gen: &Tensor<F>) -> Result<()> {
    if x_ref.len() != gen.len() {
        return Err(Error::shape("stft loss", x_ref.shape(), gen.shape()));
    }
    Ok(())
}

fn sc_term<F: Real, G: Graph<F>>(g: &mut G, r: &RefSpec<F>, gen_mag: &G::V) -> Result<G::V> {
    if r.norm <= F::zero() {
        return Err(Error::Degenerate(
            "spectral convergence of an all-zero reference".into(),
        ));
    }
    let s_ref = g.constant(r.mag.clone());
    let diff = g.sub(gen_mag, &s_ref)?;
    let sq = g.mul(&diff, &diff)?;
    let ss = g.sum(&sq)?;
    let num = g.sqrt(&ss)?;
    g.scale(&num, F::one() / r.norm)
}

fn logmag_term<F: Real, G: Graph<F>>(
    g: &mut G,
    r: &RefSpec<F>,
    gen_mag: &G::V,
    floor: F,
) -> Result<G::V> {
    let log_ref = g.constant(r.mag.map(|v| v.max(floor).ln()));
    let clamped = g.clamp_min(gen_mag, floor)?;
    let log_gen = g.log(&clamped)?;
    let d = g.sub(&log_ref, &log_gen)?;
    let a = g.abs(&d)?;
    g.mean(&a)
}

/// Spectral convergence of `x_gen` against the constant reference `x_ref`.
pub fn spectral_convergence_on<F: Real, G: Graph<F>>(
    g: &mut G,
    x_ref: &Tensor<F>,
    x_gen: &G::V,
    cfg: &StftConfig,
) -> Result<G::V> {
    check_pair(x_ref, g.value(x_gen))?;
    let r = ref_spec(x_ref, cfg)?;
    let rows = gen_rows(g, x_gen)?;
    let m = g.stft_magnitude(&rows, *cfg)?;
    sc_term(g, &r, &m)
}

/// Mean absolute log-magnitude difference.
pub fn log_stft_magnitude_on<F: Real, G: Graph<F>>(
    g: &mut G,
    x_ref: &Tensor<F>,
    x_gen: &G::V,
    cfg: &StftConfig,
    log_floor: f64,
) -> Result<G::V> {
    check_pair(x_ref, g.value(x_gen))?;
    let r = ref_spec(x_ref, cfg)?;
    let rows = gen_rows(g, x_gen)?;
    let m = g.stft_magnitude(&rows, *cfg)?;
    logmag_term(g, &r, &m, F::of(log_floor))
}

/// Multi-resolution STFT loss.
pub fn multires_stft_loss_on<F: Real, G: Graph<F>>(
    g: &mut G,
    x_ref: &Tensor<F>,
    x_gen: &G::V,
    cfg: &LossConfig,
) -> Result<G::V> {
    if cfg.resolutions.is_empty() {
        return Err(Error::config("at least one STFT resolution is required"));
    }
    check_pair(x_ref, g.value(x_gen))?;
    let rows = gen_rows(g, x_gen)?;
    let floor = F::of(cfg.log_floor);
    let mut acc: Option<G::V> = None;
    for res in &cfg.resolutions {
        let r = ref_spec(x_ref, res)?;
        let m = g.stft_magnitude(&rows, *res)?;
        let sc = sc_term(g, &r, &m)?;
        let lm = logmag_term(g, &r, &m, floor)?;
        let term = g.add(&sc, &lm)?;
        acc = Some(match acc {
            Some(a) => g.add(&a, &term)?,
            None => term,
        });
    }
    let total = acc.expect("non-empty resolutions");
    match cfg.aggregate {
        Aggregate::Mean => g.scale(&total, F::one() / F::of(cfg.resolutions.len() as f64)),
        Aggregate::Sum => Ok(total),
    }
}

/// Mean absolute difference between teacher and student samples.
pub fn l1_reconstruction_on<F: Real, G: Graph<F>>(
    g: &mut G,
    x_teacher: &Tensor<F>,
    x_student: &G::V,
) -> Result<G::V> {
    if g.value(x_student).shape() != x_teacher.shape() {
        return Err(Error::shape(
            "l1_reconstruction",
            x_teacher.shape(),
            g.value(x_student).shape(),
        ));
    }
    let t = g.constant(x_teacher.clone());
    let d = g.sub(&t, x_student)?;
    let a = g.abs(&d)?;
    g.mean(&a)
}

/// Graph handles for the distillation loss and its two components.
pub struct DistillTerms<V> {
    pub total: V,
    pub rec: V,
    pub feature: V,
}

/// `L = L_rec + α · L_feature`.
pub fn total_distill_loss_on<F: Real, G: Graph<F>>(
    g: &mut G,
    x_teacher: &Tensor<F>,
    x_student: &G::V,
    cfg: &LossConfig,
) -> Result<DistillTerms<G::V>> {
    let rec = l1_reconstruction_on(g, x_teacher, x_student)?;
    let feature = multires_stft_loss_on(g, x_teacher, x_student, cfg)?;
    let weighted = g.scale(&feature, F::of(cfg.alpha))?;
    let total = g.add(&rec, &weighted)?;
    Ok(DistillTerms {
        total,
        rec,
        feature,
    })
}

/// Scalar values of the distillation loss terms.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossParts {
    pub total: f64,
    pub rec: f64,
    pub feature: f64,
}

fn eager_scalar<F: Real>(
    x_gen: &Tensor<F>,
    f: impl FnOnce(&mut Eager<F>, &<Eager<F> as Graph<F>>::V) -> Result<<Eager<F> as Graph<F>>::V>,
) -> Result<f64> {
    let mut g = Eager::new();
    let v = g.constant(x_gen.clone());
    Ok(f(&mut g, &v)?.item().f64())
}

pub fn spectral_convergence<F: Real>(
    x_ref: &Tensor<F>,
    x_gen: &Tensor<F>,
    cfg: &StftConfig,
) -> Result<f64> {
    eager_scalar(x_gen, |g, v| spectral_convergence_on(g, x_ref, v, cfg))
}

pub fn log_stft_magnitude<F: Real>(
    x_ref: &Tensor<F>,
    x_gen: &Tensor<F>,
    cfg: &StftConfig,
    log_floor: f64,
) -> Result<f64> {
    eager_scalar(x_gen, |g, v| {
        log_stft_magnitude_on(g, x_ref, v, cfg, log_floor)
    })
}

pub fn multires_stft_loss<F: Real>(
    x_ref: &Tensor<F>,
    x_gen: &Tensor<F>,
    cfg: &LossConfig,
) -> Result<f64> {
    eager_scalar(x_gen, |g, v| multires_stft_loss_on(g, x_ref, v, cfg))
}

pub fn l1_reconstruction<F: Real>(x_teacher: &Tensor<F>, x_student: &Tensor<F>) -> Result<f64> {
    eager_scalar(x_student, |g, v| l1_reconstruction_on(g, x_teacher, v))
}

pub fn total_distill_loss<F: Real>(
    x_teacher: &Tensor<F>,
    x_student: &Tensor<F>,
    cfg: &LossConfig,
) -> Result<LossParts> {
    let mut g = Eager::new();
    let v = g.constant(x_student.clone());
    let t = total_distill_loss_on(&mut g, x_teacher, &v, cfg)?;
    Ok(LossParts {
        total: t.total.item().f64(),
        rec: t.rec.item().f64(),
        feature: t.feature.item().f64(),
    })
}
