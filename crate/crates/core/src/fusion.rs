//! Inference-time rewrites of a trained teacher and throughput timing.
//!
//! Passes run in a fixed order: weight norms are folded, actnorms are
//! folded into the following 1×1 convolution, then mixing inverses are
//! cached, so every matrix is final before it is inverted.

use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::flow::{sample_latent, FlowConfig, FlowLayout, FlowModel, Synthesizer};
use crate::kernels::logabsdet_inverse;
use crate::nn::{gaussian, Conv1d};
use crate::params::ParamStore;
use crate::tensor::{Real, Tensor};

/// Residual bound on `W · W⁻¹ − I` (max-abs entry) for a cached inverse.
pub const INVERSE_TOLERANCE: f64 = 1e-5;
/// Environment variable naming the benchmark thread count.
pub const THREADS_ENV: &str = "NFDISTILL_BENCH_THREADS";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Pass {
    FoldWeightNorm,
    FuseActnorm,
    CacheInverse,
}

/// Standalone weight-norm fold of one convolution.
pub fn fold_weight_norm<F: Real>(conv: &mut Conv1d, store: &mut ParamStore<F>) -> Result<bool> {
    conv.fold_weight_norm(store)
}

/// Inverse of a mixing matrix, verified against its residual.
pub fn precompute_inverse<F: Real>(w: &Tensor<F>) -> Result<Tensor<F>> {
    let (_, inv, _) = logabsdet_inverse(w)?;
    let n = w.dim(0);
    let (a, b) = (w.data(), inv.data());
    let mut worst = 0.0f64;
    for i in 0..n {
        for j in 0..n {
            let dot: f64 = (0..n)
                .map(|k| a[i * n + k].f64() * b[k * n + j].f64())
                .sum();
            let target = if i == j { 1.0 } else { 0.0 };
            worst = worst.max((dot - target).abs());
        }
    }
    if !(worst < INVERSE_TOLERANCE) {
        return Err(Error::invalid(format!(
            "cached inverse residual {worst:e} exceeds {INVERSE_TOLERANCE:e}"
        )));
    }
    Ok(inv)
}

/// A linear layer of a step, for standalone fusion.
#[derive(Clone, Debug, PartialEq)]
pub enum Layer<F> {
    /// `y = scale ⊙ x + bias`, per channel.
    ActNorm { scale: Tensor<F>, bias: Tensor<F> },
    /// `y = W x + bias`, `W [C, C]`.
    Conv1x1 {
        weight: Tensor<F>,
        bias: Option<Tensor<F>>,
    },
    /// Any other layer; blocks fusion across it.
    Opaque(String),
}

/// `W' = W · diag(s)` and `b' = W · b (+ b₀)`.
fn fold_affine<F: Real>(
    scale: &Tensor<F>,
    shift: &Tensor<F>,
    weight: &Tensor<F>,
    bias: Option<&Tensor<F>>,
) -> Result<(Tensor<F>, Tensor<F>)> {
    let n = scale.len();
    if weight.shape() != [n, n] || shift.len() != n || bias.is_some_and(|b| b.len() != n) {
        return Err(Error::shape("fuse actnorm", &[n, n], weight.shape()));
    }
    let (w, s, b) = (weight.data(), scale.data(), shift.data());
    let fused = Tensor::from_fn([n, n], |k| F::of(w[k].f64() * s[k % n].f64()));
    let new_bias = Tensor::from_fn([n], |i| {
        let acc: f64 = (0..n).map(|j| w[i * n + j].f64() * b[j].f64()).sum();
        F::of(acc + bias.map_or(0.0, |b0| b0.data()[i].f64()))
    });
    Ok((fused, new_bias))
}

/// Replace `chain[at]` (an actnorm) and `chain[at + 1]` (a 1×1 conv) by one
/// fused conv. Errors unless the two are adjacent in that order.
pub fn fuse_actnorm_into_conv<F: Real>(chain: &mut Vec<Layer<F>>, at: usize) -> Result<()> {
    let (Some(Layer::ActNorm { scale, bias }), Some(Layer::Conv1x1 { weight, bias: b0 })) =
        (chain.get(at), chain.get(at + 1))
    else {
        return Err(Error::invalid(format!(
            "layer {at} is not an actnorm immediately followed by a 1x1 convolution"
        )));
    };
    let (weight, bias) = fold_affine(scale, bias, weight, b0.as_ref())?;
    chain.splice(
        at..at + 2,
        [Layer::Conv1x1 {
            weight,
            bias: Some(bias),
        }],
    );
    Ok(())
}

/// Reference evaluation of a linear chain on `x [B, C, T]`, in 64-bit.
pub fn eval_chain<F: Real>(chain: &[Layer<F>], x: &Tensor<F>) -> Result<Tensor<F>> {
    let (b, c, t) = x.bct("eval chain")?;
    let mut h: Vec<f64> = x.data().iter().map(|v| v.f64()).collect();
    for layer in chain {
        match layer {
            Layer::ActNorm { scale, bias } => {
                for (i, v) in h.iter_mut().enumerate() {
                    let ch = (i / t) % c;
                    *v = *v * scale.data()[ch].f64() + bias.data()[ch].f64();
                }
            }
            Layer::Conv1x1 { weight, bias } => {
                let w = weight.data();
                let mut out = vec![0.0; h.len()];
                for bi in 0..b {
                    for o in 0..c {
                        let b0 = bias.as_ref().map_or(0.0, |v| v.data()[o].f64());
                        for ti in 0..t {
                            let acc: f64 = (0..c)
                                .map(|i| w[o * c + i].f64() * h[(bi * c + i) * t + ti])
                                .sum();
                            out[(bi * c + o) * t + ti] = acc + b0;
                        }
                    }
                }
                h = out;
            }
            Layer::Opaque(name) => {
                return Err(Error::invalid(format!(
                    "cannot evaluate opaque layer {name}"
                )));
            }
        }
    }
    Ok(Tensor::from_parts(
        x.shape().to_vec(),
        h.into_iter().map(F::of).collect(),
    ))
}

fn fold_teacher_weight_norm<F: Real>(m: &mut FlowModel<F>) -> Result<bool> {
    let mut any = false;
    for step in &mut m.steps {
        for conv in step.coupling.convs_mut() {
            any |= conv.fold_weight_norm(&mut m.store)?;
        }
    }
    if any {
        m.layout.weight_norm_folded = true;
    }
    Ok(any)
}

fn is_identity<F: Real>(scale: &Tensor<F>, bias: &Tensor<F>) -> bool {
    scale.data().iter().all(|&v| v == F::one()) && bias.data().iter().all(|&v| v == F::zero())
}

/// Fold step `k`'s actnorm into its mix. Identity actnorms are kept unless
/// `force` is set.
fn fuse_step_actnorm<F: Real>(m: &mut FlowModel<F>, k: usize, force: bool) -> Result<bool> {
    let step = &mut m.steps[k];
    let Some(an) = step.actnorm else {
        return Ok(false);
    };
    let store = &mut m.store;
    let (scale, shift) = (store.get(an.scale).clone(), store.get(an.bias).clone());
    if !force && is_identity(&scale, &shift) {
        return Ok(false);
    }
    let old_bias = step.mix.bias.map(|id| store.get(id).clone());
    let (w, b) = fold_affine(
        &scale,
        &shift,
        store.get(step.mix.weight),
        old_bias.as_ref(),
    )?;
    store.set(step.mix.weight, w)?;
    match step.mix.bias {
        Some(id) => store.set(id, b)?,
        None => step.mix.bias = Some(store.add(format!("steps.{k}.mix.bias"), b)),
    }
    store.retire(an.scale);
    store.retire(an.bias);
    step.actnorm = None;
    if let Some(inv) = step.mix.inverse.take() {
        store.retire(inv);
        m.layout.steps[k].inverse_cached = false;
    }
    m.layout.steps[k].actnorm_fused = true;
    Ok(true)
}

fn cache_step_inverse<F: Real>(m: &mut FlowModel<F>, k: usize) -> Result<bool> {
    let step = &mut m.steps[k];
    if step.mix.inverse.is_some() {
        return Ok(false);
    }
    let inv = precompute_inverse(m.store.get(step.mix.weight))
        .map_err(|e| Error::invalid(format!("step {k}: {e}")))?;
    step.mix.inverse = Some(m.store.add_derived(format!("steps.{k}.mix.inverse"), inv));
    m.layout.steps[k].inverse_cached = true;
    Ok(true)
}

/// Passes that changed anything, in order.
fn apply_passes<F: Real>(m: &mut FlowModel<F>) -> Result<Vec<Pass>> {
    let mut applied = Vec::new();
    if fold_teacher_weight_norm(m)? {
        applied.push(Pass::FoldWeightNorm);
    }
    let mut fused = false;
    for k in 0..m.steps.len() {
        fused |= fuse_step_actnorm(m, k, false)?;
    }
    if fused {
        applied.push(Pass::FuseActnorm);
    }
    let mut cached = false;
    for k in 0..m.steps.len() {
        cached |= cache_step_inverse(m, k)?;
    }
    if cached {
        applied.push(Pass::CacheInverse);
    }
    Ok(applied)
}

/// A model with the parameter structure described by `layout`, holding
/// placeholder values; used to load checkpoints by name.
pub fn rebuild_flow<F: Real>(cfg: FlowConfig, layout: &FlowLayout) -> Result<FlowModel<F>> {
    let mut m = FlowModel::new(cfg, &mut ChaCha8Rng::seed_from_u64(0))?;
    if layout.steps.len() != m.steps.len() {
        return Err(Error::Format {
            kind: "checkpoint",
            reason: format!(
                "layout lists {} steps, config has {}",
                layout.steps.len(),
                m.steps.len()
            ),
        });
    }
    if layout.weight_norm_folded {
        fold_teacher_weight_norm(&mut m)?;
    }
    for (k, s) in layout.steps.iter().enumerate() {
        if s.actnorm_fused {
            fuse_step_actnorm(&mut m, k, true)?;
        }
        if s.inverse_cached {
            cache_step_inverse(&mut m, k)?;
        }
    }
    m.layout = layout.clone();
    Ok(m)
}

/// Side-by-side check of a fusion.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FusionCheck {
    /// Independent random `(z, c)` pairs.
    pub inputs: usize,
    /// Conditioning frames per input.
    pub frames: usize,
    pub seed: u64,
    /// Max-abs sample deviation beyond which fusion is rejected.
    pub budget: Option<f64>,
}

impl Default for FusionCheck {
    fn default() -> Self {
        FusionCheck {
            inputs: 100,
            frames: 2,
            seed: 0,
            budget: Some(1e-4),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FusionReport {
    pub passes_applied: Vec<Pass>,
    pub inputs: usize,
    pub max_abs_deviation: f64,
    pub unfused_throughput: Option<BenchResult>,
    pub fused_throughput: Option<BenchResult>,
    /// Fused over unfused median throughput.
    pub speedup: Option<f64>,
}

/// Random latents and conditioning for `model`.
pub fn probe_inputs<F: Real, S: Synthesizer<F>>(
    model: &S,
    batch: usize,
    frames: usize,
    cond_channels: usize,
    seed: u64,
) -> Result<(Tensor<F>, Tensor<F>)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let len = frames * model.frame_hop();
    let z = sample_latent(&mut rng, model.latent_shape(batch, len)?, 1.0);
    let c = Tensor::from_parts(
        vec![batch, cond_channels, frames],
        gaussian(&mut rng, batch * cond_channels * frames, 1.0),
    );
    Ok((z, c))
}

/// `m` rebuilt from its layout, so parameters sit in the order a decoded
/// checkpoint uses.
fn canonical<F: Real>(m: &FlowModel<F>) -> Result<FlowModel<F>> {
    let named: Vec<(String, Tensor<F>)> = m
        .store()
        .iter()
        .map(|(_, e)| (e.name.clone(), e.tensor.clone()))
        .collect();
    let mut out = rebuild_flow(m.config().clone(), m.layout())?;
    out.store_mut().load_from(&named)?;
    Ok(out)
}

/// Apply every applicable pass. On any failure, including a deviation over
/// budget, `model` is left untouched.
pub fn fuse_model<F: Real>(model: &mut FlowModel<F>, check: &FusionCheck) -> Result<FusionReport> {
    if check.inputs == 0 || check.frames == 0 {
        return Err(Error::config("fusion check needs at least one input frame"));
    }
    let mut fused = model.clone();
    let passes_applied = apply_passes(&mut fused)?;
    let (z, c) = probe_inputs(
        model,
        check.inputs,
        check.frames,
        model.cond_channels(),
        check.seed,
    )?;
    let before = model.sample(&z, &c)?;
    let after = fused.sample(&z, &c)?;
    let deviation = before.max_abs_diff(&after)?.f64();
    if let Some(budget) = check.budget {
        if !(deviation <= budget) {
            return Err(Error::invalid(format!(
                "fused outputs deviate by {deviation:e}, over the {budget:e} budget"
            )));
        }
    }
    *model = canonical(&fused)?;
    Ok(FusionReport {
        passes_applied,
        inputs: check.inputs,
        max_abs_deviation: deviation,
        unfused_throughput: None,
        fused_throughput: None,
        speedup: None,
    })
}

/// [`fuse_model`] followed by an interleaved throughput comparison.
pub fn fuse_and_bench(
    model: &mut FlowModel<f32>,
    check: &FusionCheck,
    bench: &BenchConfig,
) -> Result<FusionReport> {
    let original = model.clone();
    let mut report = fuse_model(model, check)?;
    let (before, after) = bench_pair(&original, model, bench)?;
    report.speedup = Some(after.median_samples_per_sec / before.median_samples_per_sec);
    report.unfused_throughput = Some(before);
    report.fused_throughput = Some(after);
    Ok(report)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BenchConfig {
    pub batch: usize,
    /// Samples per generated waveform.
    pub len: usize,
    pub warmup: usize,
    pub reps: usize,
    pub seed: u64,
}

impl Default for BenchConfig {
    fn default() -> Self {
        BenchConfig {
            batch: 8,
            len: 4096,
            warmup: 2,
            reps: 5,
            seed: 0,
        }
    }
}

impl BenchConfig {
    pub fn validate(&self) -> Result<()> {
        if self.warmup < 2 || self.reps < 5 {
            return Err(Error::config(format!(
                "benchmarks need >= 2 warmups and >= 5 timed reps, got {} and {}",
                self.warmup, self.reps
            )));
        }
        if self.batch == 0 || self.len == 0 {
            return Err(Error::config("benchmark batch and length must be positive"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchResult {
    pub median_samples_per_sec: f64,
    pub min_samples_per_sec: f64,
    pub max_samples_per_sec: f64,
    /// Median in 10⁶ samples per second.
    pub median_mhz: f64,
    pub batch: usize,
    pub len: usize,
    pub warmup: usize,
    pub reps: usize,
    pub threads: usize,
    pub dtype: String,
}

/// Worker count from the environment; the kernels are single-threaded, so
/// anything other than 1 is rejected.
pub fn bench_threads() -> Result<usize> {
    match std::env::var(THREADS_ENV) {
        Err(_) => Ok(1),
        Ok(v) => match v.trim().parse::<usize>() {
            Ok(1) => Ok(1),
            _ => Err(Error::config(format!(
                "{THREADS_ENV}={v}: benchmarks run on exactly one worker thread"
            ))),
        },
    }
}

struct Timer<'a, F: Real> {
    run: Box<dyn Fn() -> Result<Tensor<F>> + 'a>,
    secs: Vec<f64>,
}

impl<F: Real> Timer<'_, F> {
    fn once(&mut self, record: bool) -> Result<()> {
        let t0 = Instant::now();
        let x = (self.run)()?;
        let dt = t0.elapsed().as_secs_f64();
        if let Some(i) = x.first_non_finite() {
            return Err(Error::NonFinite {
                op: "benchmark sample",
                index: i,
            });
        }
        std::hint::black_box(&x);
        if record {
            self.secs.push(dt);
        }
        Ok(())
    }
}

fn timer<'a, F: Real, S: Synthesizer<F>>(model: &'a S, cfg: &BenchConfig) -> Result<Timer<'a, F>> {
    let frames = cfg.len / model.frame_hop();
    if frames == 0 || cfg.len % model.frame_hop() != 0 {
        return Err(Error::config(format!(
            "benchmark length {} is not a multiple of the frame hop {}",
            cfg.len,
            model.frame_hop()
        )));
    }
    let (z, c) = probe_inputs(model, cfg.batch, frames, model.cond_channels(), cfg.seed)?;
    Ok(Timer {
        run: Box::new(move || model.sample(&z, &c)),
        secs: Vec::with_capacity(cfg.reps),
    })
}

fn summarize<F: Real>(secs: &[f64], cfg: &BenchConfig, threads: usize) -> BenchResult {
    let samples = (cfg.batch * cfg.len) as f64;
    let mut rates: Vec<f64> = secs.iter().map(|s| samples / s.max(1e-12)).collect();
    rates.sort_by(f64::total_cmp);
    let n = rates.len();
    let median = if n % 2 == 1 {
        rates[n / 2]
    } else {
        0.5 * (rates[n / 2 - 1] + rates[n / 2])
    };
    BenchResult {
        median_samples_per_sec: median,
        min_samples_per_sec: rates[0],
        max_samples_per_sec: rates[n - 1],
        median_mhz: median / 1e6,
        batch: cfg.batch,
        len: cfg.len,
        warmup: cfg.warmup,
        reps: cfg.reps,
        threads,
        dtype: std::any::type_name::<F>().to_string(),
    }
}

/// Median samples per second of `model.sample` on fixed random inputs.
pub fn bench_throughput<F: Real, S: Synthesizer<F>>(
    model: &S,
    cfg: &BenchConfig,
) -> Result<BenchResult> {
    cfg.validate()?;
    let threads = bench_threads()?;
    let mut t = timer(model, cfg)?;
    for _ in 0..cfg.warmup {
        t.once(false)?;
    }
    for _ in 0..cfg.reps {
        t.once(true)?;
    }
    Ok(summarize::<F>(&t.secs, cfg, threads))
}

/// Two models timed in alternation, so drift in machine load affects both.
pub fn bench_pair<F: Real, A: Synthesizer<F>, B: Synthesizer<F>>(
    a: &A,
    b: &B,
    cfg: &BenchConfig,
) -> Result<(BenchResult, BenchResult)> {
    cfg.validate()?;
    let threads = bench_threads()?;
    let (mut ta, mut tb) = (timer(a, cfg)?, timer(b, cfg)?);
    for _ in 0..cfg.warmup {
        ta.once(false)?;
        tb.once(false)?;
    }
    for _ in 0..cfg.reps {
        ta.once(true)?;
        tb.once(true)?;
    }
    Ok((
        summarize::<F>(&ta.secs, cfg, threads),
        summarize::<F>(&tb.secs, cfg, threads),
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn inverse_of_diagonal() {
        let w = Tensor::<f64>::new([2, 2], vec![2.0, 0.0, 0.0, 0.5]).unwrap();
        assert_eq!(
            precompute_inverse(&w).unwrap().data(),
            &[0.5, 0.0, 0.0, 2.0]
        );
        assert_eq!(
            precompute_inverse(&Tensor::<f64>::eye(3)).unwrap(),
            Tensor::eye(3)
        );
        let s = Tensor::<f64>::new([2, 2], vec![1.0, 2.0, 2.0, 4.0]).unwrap();
        assert!(matches!(
            precompute_inverse(&s),
            Err(Error::Singular { .. })
        ));
    }

    #[test]
    fn actnorm_fuse_examples() {
        let mut chain = vec![
            Layer::ActNorm {
                scale: Tensor::<f64>::new([2], vec![2.0, 3.0]).unwrap(),
                bias: Tensor::zeros([2]),
            },
            Layer::Conv1x1 {
                weight: Tensor::eye(2),
                bias: None,
            },
        ];
        fuse_actnorm_into_conv(&mut chain, 0).unwrap();
        assert_eq!(
            chain,
            vec![Layer::Conv1x1 {
                weight: Tensor::new([2, 2], vec![2.0, 0.0, 0.0, 3.0]).unwrap(),
                bias: Some(Tensor::zeros([2])),
            }]
        );
    }

    #[test]
    fn actnorm_fuse_requires_adjacency() {
        let an = Layer::ActNorm {
            scale: Tensor::<f64>::full([2], 1.0),
            bias: Tensor::zeros([2]),
        };
        let conv = Layer::Conv1x1 {
            weight: Tensor::eye(2),
            bias: None,
        };
        let mut gap = vec![an.clone(), Layer::Opaque("coupling".into()), conv.clone()];
        assert!(fuse_actnorm_into_conv(&mut gap, 0).is_err());
        let mut reversed = vec![conv, an];
        assert!(fuse_actnorm_into_conv(&mut reversed, 0).is_err());
        assert!(fuse_actnorm_into_conv(&mut reversed, 1).is_err());
        assert_eq!(reversed.len(), 2);
    }

    #[test]
    fn thread_override_is_validated() {
        assert_eq!(bench_threads().unwrap(), 1);
    }

    #[test]
    fn bench_config_minimums() {
        let ok = BenchConfig::default();
        assert!(ok.validate().is_ok());
        assert!(BenchConfig {
            warmup: 1,
            ..ok.clone()
        }
        .validate()
        .is_err());
        assert!(BenchConfig { reps: 4, ..ok }.validate().is_err());
    }
}
