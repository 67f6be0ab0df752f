//! Adam, the One-Cycle schedule, and the teacher, distillation and ablation
//! training loops.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::flow::{sample_latent, FlowModel, Synthesizer};
use crate::fusion::{bench_throughput, BenchConfig, BenchResult};
use crate::graph::{Gradients, Graph, Tape};
use crate::params::{ParamId, ParamStore};
use crate::spectral::{total_distill_loss, total_distill_loss_on, LossConfig, LossParts};
use crate::student::{capacity_matched, StudentConfig, StudentModel, Variant};
use crate::tensor::{Real, Tensor};

#[derive(Clone, Debug)]
struct Moments {
    m: Vec<f64>,
    v: Vec<f64>,
}

/// Adam with bias-corrected moments, kept in 64-bit regardless of the
/// parameter type.
#[derive(Clone, Debug)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Rescale the global gradient norm down to this value when exceeded.
    pub grad_clip: Option<f64>,
    step: u64,
    moments: BTreeMap<ParamId, Moments>,
}

impl Adam {
    pub fn new(beta1: f64, beta2: f64, eps: f64) -> Self {
        Adam {
            beta1,
            beta2,
            eps,
            grad_clip: None,
            step: 0,
            moments: BTreeMap::new(),
        }
    }

    pub fn from_config(cfg: &OptimConfig) -> Self {
        Adam {
            grad_clip: cfg.grad_clip,
            ..Adam::new(cfg.beta1, cfg.beta2, cfg.eps)
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// First and second moments of `id`, if it has been updated.
    pub fn moments(&self, id: ParamId) -> Option<(&[f64], &[f64])> {
        self.moments.get(&id).map(|m| (&m.m[..], &m.v[..]))
    }

    /// One update of every trainable parameter of `store`. Parameters with no
    /// gradient are treated as having a zero gradient. Nothing is modified
    /// unless every gradient is finite.
    pub fn step<F: Real>(
        &mut self,
        store: &mut ParamStore<F>,
        grads: &Gradients<F>,
        lr: f64,
    ) -> Result<()> {
        let ids = store.trainable_ids();
        let mut flat = Vec::with_capacity(ids.len());
        for &id in &ids {
            let n = store.get(id).len();
            let g: Vec<f64> = match grads.param(store, id) {
                Some(t) => {
                    if t.len() != n {
                        return Err(Error::shape("adam", store.get(id).shape(), t.shape()));
                    }
                    t.data().iter().map(|v| v.f64()).collect()
                }
                None => vec![0.0; n],
            };
            if g.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFiniteGradient {
                    param: store.name(id).to_string(),
                });
            }
            flat.push(g);
        }
        self.apply(store, &ids, flat, lr)
    }

    /// Update from explicit 64-bit gradients, one per id.
    pub fn apply<F: Real>(
        &mut self,
        store: &mut ParamStore<F>,
        ids: &[ParamId],
        mut grads: Vec<Vec<f64>>,
        lr: f64,
    ) -> Result<()> {
        if !(lr > 0.0 && lr.is_finite()) {
            return Err(Error::invalid(format!(
                "learning rate must be positive, got {lr}"
            )));
        }
        if ids.len() != grads.len() {
            return Err(Error::invalid("one gradient per parameter is required"));
        }
        for (id, g) in ids.iter().zip(&grads) {
            if g.len() != store.get(*id).len() {
                return Err(Error::shape("adam", store.get(*id).shape(), &[g.len()]));
            }
            if g.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFiniteGradient {
                    param: store.name(*id).to_string(),
                });
            }
        }
        if let Some(clip) = self.grad_clip {
            let norm = grads.iter().flatten().map(|v| v * v).sum::<f64>().sqrt();
            if norm > clip {
                let k = clip / norm;
                grads.iter_mut().flatten().for_each(|v| *v *= k);
            }
        }
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        for (&id, g) in ids.iter().zip(&grads) {
            let st = self.moments.entry(id).or_insert_with(|| Moments {
                m: vec![0.0; g.len()],
                v: vec![0.0; g.len()],
            });
            let p = store.get_mut(id).data_mut();
            for i in 0..g.len() {
                st.m[i] = self.beta1 * st.m[i] + (1.0 - self.beta1) * g[i];
                st.v[i] = self.beta2 * st.v[i] + (1.0 - self.beta2) * g[i] * g[i];
                let update = lr * (st.m[i] / c1) / ((st.v[i] / c2).sqrt() + self.eps);
                p[i] = F::of(p[i].f64() - update);
            }
        }
        Ok(())
    }
}

/// Linear warmup from `floor · max_lr` to `max_lr`, then cosine decay back
/// to `floor · max_lr` at `total_steps`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct OneCycle {
    pub max_lr: f64,
    pub warmup_steps: usize,
    pub total_steps: usize,
    pub floor: f64,
}

impl OneCycle {
    pub fn validate(&self) -> Result<()> {
        if !(self.max_lr > 0.0 && self.max_lr.is_finite()) {
            return Err(Error::config(format!(
                "max_lr must be positive, got {}",
                self.max_lr
            )));
        }
        if !(self.floor > 0.0 && self.floor <= 1.0) {
            return Err(Error::config(format!(
                "lr floor must be in (0, 1], got {}",
                self.floor
            )));
        }
        if self.warmup_steps > self.total_steps {
            return Err(Error::config(format!(
                "warmup {} exceeds the {} step budget",
                self.warmup_steps, self.total_steps
            )));
        }
        Ok(())
    }

    pub fn lr(&self, step: usize) -> Result<f64> {
        if step > self.total_steps {
            return Err(Error::invalid(format!(
                "step {step} outside schedule of {} steps",
                self.total_steps
            )));
        }
        let lo = self.floor * self.max_lr;
        if step < self.warmup_steps {
            let u = step as f64 / self.warmup_steps as f64;
            return Ok(lo + (self.max_lr - lo) * u);
        }
        let span = self.total_steps - self.warmup_steps;
        if span == 0 {
            return Ok(self.max_lr);
        }
        let u = (step - self.warmup_steps) as f64 / span as f64;
        Ok(lo + (self.max_lr - lo) * 0.5 * (1.0 + (std::f64::consts::PI * u).cos()))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimConfig {
    pub max_lr: f64,
    pub steps: usize,
    pub warmup_steps: usize,
    pub lr_floor: f64,
    pub batch: usize,
    /// Training segment length in samples.
    pub segment: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub grad_clip: Option<f64>,
    pub seed: u64,
    /// Steps between checkpoint callbacks; `None` disables them.
    pub checkpoint_every: Option<usize>,
    /// Steps between validation passes (distillation only).
    pub val_every: usize,
    /// Validation conditions, taken from the start of the first examples.
    pub val_examples: usize,
}

impl Default for OptimConfig {
    fn default() -> Self {
        OptimConfig {
            max_lr: 1e-3,
            steps: 2000,
            warmup_steps: 200,
            lr_floor: 0.01,
            batch: 32,
            segment: 1024,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            grad_clip: None,
            seed: 0,
            checkpoint_every: None,
            val_every: 100,
            val_examples: 16,
        }
    }
}

impl OptimConfig {
    pub fn schedule(&self) -> OneCycle {
        OneCycle {
            max_lr: self.max_lr,
            warmup_steps: self.warmup_steps,
            total_steps: self.steps,
            floor: self.lr_floor,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.schedule().validate()?;
        let bad = |m: String| Err(Error::config(m));
        if self.batch == 0 || self.segment == 0 {
            return bad("batch and segment must be positive".into());
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return bad(format!(
                "betas must lie in [0, 1), got {} and {}",
                self.beta1, self.beta2
            ));
        }
        if !(self.eps > 0.0) {
            return bad("eps must be positive".into());
        }
        if self.grad_clip.is_some_and(|c| !(c > 0.0)) {
            return bad("grad_clip must be positive".into());
        }
        if self.checkpoint_every == Some(0) || self.val_every == 0 {
            return bad("cadences must be positive".into());
        }
        if self.val_examples == 0 {
            return bad("at least one validation example is required".into());
        }
        Ok(())
    }

    /// Generator for the batch of `step`; independent of every other step.
    pub fn step_rng(&self, step: usize) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(step as u64 + 1);
        rng
    }

    fn val_rng(&self) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(u64::MAX);
        rng
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub step: usize,
    pub lr: f64,
    /// One value per entry of [`TrainRun::columns`].
    pub values: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ValLog {
    pub step: usize,
    pub loss: LossParts,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainRun {
    pub seed: u64,
    pub batch: usize,
    pub steps: usize,
    pub checkpoint_every: Option<usize>,
    pub columns: Vec<String>,
    pub history: Vec<StepLog>,
    pub validation: Vec<ValLog>,
}

impl TrainRun {
    fn new(opt: &OptimConfig, columns: &[&str]) -> Self {
        TrainRun {
            seed: opt.seed,
            batch: opt.batch,
            steps: opt.steps,
            checkpoint_every: opt.checkpoint_every,
            columns: columns.iter().map(|s| s.to_string()).collect(),
            history: Vec::new(),
            validation: Vec::new(),
        }
    }

    /// Values of one logged column.
    pub fn column(&self, name: &str) -> Option<Vec<f64>> {
        let i = self.columns.iter().position(|c| c == name)?;
        Some(self.history.iter().map(|r| r.values[i]).collect())
    }

    /// Mean of the last `window` values of a column.
    pub fn smoothed_tail(&self, name: &str, window: usize) -> Option<f64> {
        let v = self.column(name)?;
        let w = window.min(v.len());
        (w > 0).then(|| v[v.len() - w..].iter().sum::<f64>() / w as f64)
    }

    pub fn final_validation(&self) -> Option<&LossParts> {
        self.validation.last().map(|v| &v.loss)
    }

    /// `step,lr,<columns…>` with one row per executed step. Values use
    /// Rust's shortest round-trip formatting.
    pub fn loss_csv(&self) -> String {
        let mut s = String::from("step,lr");
        for c in &self.columns {
            s.push(',');
            s.push_str(c);
        }
        s.push('\n');
        for r in &self.history {
            let _ = write!(s, "{},{}", r.step, r.lr);
            for v in &r.values {
                let _ = write!(s, ",{v}");
            }
            s.push('\n');
        }
        s
    }

    pub fn validation_csv(&self) -> String {
        let mut s = String::from("step,total,rec,feature\n");
        for v in &self.validation {
            let _ = writeln!(
                s,
                "{},{},{},{}",
                v.step, v.loss.total, v.loss.rec, v.loss.feature
            );
        }
        s
    }
}

/// Any failure of a training step that signals numerical blow-up.
fn is_divergence(e: &Error) -> bool {
    matches!(e, Error::NonFinite { .. } | Error::NonFiniteGradient { .. })
}

fn diverged(step: usize) -> Error {
    Error::Diverged {
        step,
        last_good_step: step,
    }
}

/// Maximum-likelihood training of `model`. Actnorm is initialized from the
/// first batch (at least 16 examples) unless already initialized. On
/// divergence the model is left at the state after the last successful
/// update, which is reported in the error.
pub fn train_teacher<F: Real>(
    model: &mut FlowModel<F>,
    data: &Dataset,
    opt: &OptimConfig,
    mut on_checkpoint: impl FnMut(usize, &FlowModel<F>) -> Result<()>,
) -> Result<TrainRun> {
    opt.validate()?;
    if data.is_empty() {
        return Err(Error::invalid("training set is empty"));
    }
    model.config().latent_len(opt.segment)?;
    let schedule = opt.schedule();
    if !model.layout().initialized {
        let (x, c) = data.random_batch(&mut opt.step_rng(0), opt.batch.max(16), opt.segment)?;
        model.actnorm_init(&x.cast(), &c.cast())?;
    }
    let mut adam = Adam::from_config(opt);
    let mut run = TrainRun::new(opt, &["nll"]);
    for step in 0..opt.steps {
        let lr = schedule.lr(step)?;
        let (x, c) = data.random_batch(&mut opt.step_rng(step), opt.batch, opt.segment)?;
        let outcome = (|| -> Result<f64> {
            let mut g = Tape::new();
            let xv = g.input(x.cast());
            let cv = g.constant(c.cast());
            let loss = model.nll(&mut g, &xv, &cv)?;
            let value = g.value(&loss).item().f64();
            if !value.is_finite() {
                return Err(Error::NonFinite {
                    op: "nll",
                    index: 0,
                });
            }
            let grads = g.backward(loss)?;
            adam.step(model.store_mut(), &grads, lr)?;
            Ok(value)
        })();
        let nll = match outcome {
            Ok(v) => v,
            Err(e) if is_divergence(&e) => return Err(diverged(step)),
            Err(e) => return Err(e),
        };
        run.history.push(StepLog {
            step,
            lr,
            values: vec![nll],
        });
        if opt.checkpoint_every.is_some_and(|k| (step + 1) % k == 0) {
            on_checkpoint(step + 1, model)?;
        }
    }
    Ok(run)
}

/// Fixed held-out conditions with teacher targets for a fixed latent.
pub struct ValidationSet<F> {
    pub z: Tensor<F>,
    pub c: Tensor<F>,
    pub x_teacher: Tensor<F>,
}

impl<F: Real> ValidationSet<F> {
    pub fn build(teacher: &FlowModel<F>, data: &Dataset, opt: &OptimConfig) -> Result<Self> {
        let n = opt.val_examples.min(data.len());
        if n == 0 {
            return Err(Error::invalid("validation set is empty"));
        }
        let picks: Vec<(usize, usize)> = (0..n).map(|i| (i, 0)).collect();
        let (_, c) = data.batch(&picks, opt.segment)?;
        let c: Tensor<F> = c.cast();
        let z = sample_latent(
            &mut opt.val_rng(),
            teacher.latent_shape(n, opt.segment)?,
            teacher.config().sigma,
        );
        let x_teacher = teacher.sample(&z, &c)?;
        Ok(ValidationSet { z, c, x_teacher })
    }

    pub fn evaluate<S: Synthesizer<F>>(&self, student: &S, loss: &LossConfig) -> Result<LossParts> {
        let x = student.sample(&self.z, &self.c)?;
        total_distill_loss(&self.x_teacher, &x, loss)
    }
}

/// Errors unless `student` consumes the teacher's latents and conditioning
/// and produces waveforms of the same shape.
pub fn check_pairing<F: Real>(
    teacher: &FlowModel<F>,
    student: &StudentModel<F>,
    segment: usize,
) -> Result<()> {
    let t = teacher.config();
    let s = student.teacher_config();
    let zt = teacher.latent_shape(1, segment)?;
    let zs = student.latent_shape(1, segment)?;
    if zt != zs {
        return Err(Error::shape("teacher/student latent", &zt, &zs));
    }
    if (t.cond_channels, t.cond_hop) != (s.cond_channels, s.cond_hop) {
        return Err(Error::shape(
            "teacher/student conditioning",
            &[t.cond_channels, t.cond_hop],
            &[s.cond_channels, s.cond_hop],
        ));
    }
    if t.sigma != s.sigma {
        return Err(Error::config(format!(
            "teacher sigma {} differs from the student's {}",
            t.sigma, s.sigma
        )));
    }
    Ok(())
}

/// Supervised distillation of the frozen `teacher` into `student`: every
/// batch draws fresh `z ~ N(0, σ² I)` and conditioning from `train`, and the
/// student regresses the teacher's sample. Validation runs on fixed
/// conditions from `val` at step 0, every `val_every` steps and at the end.
pub fn distill<F: Real>(
    teacher: &FlowModel<F>,
    student: &mut StudentModel<F>,
    train: &Dataset,
    val: &Dataset,
    loss: &LossConfig,
    opt: &OptimConfig,
    mut on_checkpoint: impl FnMut(usize, &StudentModel<F>) -> Result<()>,
) -> Result<TrainRun> {
    opt.validate()?;
    loss.validate()?;
    check_pairing(teacher, student, opt.segment)?;
    if opt.segment < loss.min_length() {
        return Err(Error::config(format!(
            "segment {} is shorter than the longest STFT window {}",
            opt.segment,
            loss.min_length()
        )));
    }
    if train.is_empty() {
        return Err(Error::invalid("training set is empty"));
    }
    let schedule = opt.schedule();
    let val_set = ValidationSet::build(teacher, val, opt)?;
    let mut adam = Adam::from_config(opt);
    let mut run = TrainRun::new(opt, &["total", "rec", "feature"]);
    run.validation.push(ValLog {
        step: 0,
        loss: val_set.evaluate(student, loss)?,
    });
    let sigma = teacher.config().sigma;
    for step in 0..opt.steps {
        let lr = schedule.lr(step)?;
        let mut rng = opt.step_rng(step);
        let (_, c) = train.random_batch(&mut rng, opt.batch, opt.segment)?;
        let c: Tensor<F> = c.cast();
        let z = sample_latent(
            &mut rng,
            teacher.latent_shape(opt.batch, opt.segment)?,
            sigma,
        );
        let x_teacher = teacher.sample(&z, &c)?;
        let outcome = (|| -> Result<[f64; 3]> {
            let mut g = Tape::new();
            let zv = g.constant(z.clone());
            let cv = g.constant(c.clone());
            let xs = student.synthesize(&mut g, &zv, &cv)?;
            let terms = total_distill_loss_on(&mut g, &x_teacher, &xs, loss)?;
            let vals = [&terms.total, &terms.rec, &terms.feature].map(|v| g.value(v).item().f64());
            if vals.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite {
                    op: "distill loss",
                    index: 0,
                });
            }
            let grads = g.backward(terms.total)?;
            adam.step(student.store_mut(), &grads, lr)?;
            Ok(vals)
        })();
        let vals = match outcome {
            Ok(v) => v,
            Err(e) if is_divergence(&e) => return Err(diverged(step)),
            Err(e) => return Err(e),
        };
        run.history.push(StepLog {
            step,
            lr,
            values: vals.to_vec(),
        });
        let done = step + 1;
        if done % opt.val_every == 0 || done == opt.steps {
            run.validation.push(ValLog {
                step: done,
                loss: val_set.evaluate(student, loss)?,
            });
        }
        if opt.checkpoint_every.is_some_and(|k| done % k == 0) {
            on_checkpoint(done, student)?;
        }
    }
    Ok(run)
}

/// Shapes of the three ablation students.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AblationConfig {
    /// Flow-shaped reference; its width is forced to the latent channel count.
    pub flow_shaped: StudentConfig,
    pub wide_width: usize,
    pub feed_forward_blocks: usize,
    pub tolerance: f64,
}

impl Default for AblationConfig {
    fn default() -> Self {
        AblationConfig {
            flow_shaped: StudentConfig {
                variant: Variant::FlowShaped,
                inner_width: 8,
                blocks: 4,
                layers: 4,
                hidden: 64,
                kernel: 3,
                weight_norm: false,
                mix_shift: false,
            },
            wide_width: 32,
            feed_forward_blocks: 4,
            tolerance: 0.05,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationEntry {
    pub variant: Variant,
    pub config: StudentConfig,
    pub params: usize,
    pub final_validation: LossParts,
    pub throughput: BenchResult,
    pub run: TrainRun,
}

/// A trained ablation student with its report.
#[derive(Clone, Debug)]
pub struct AblationArm {
    pub entry: AblationEntry,
    pub student: StudentModel<f32>,
}

/// Matched-capacity students of all three variants, each distilled from
/// the same initial seed on the same batches for the same budget.
pub fn run_ablation(
    teacher: &FlowModel<f32>,
    train: &Dataset,
    val: &Dataset,
    loss: &LossConfig,
    opt: &OptimConfig,
    ablation: &AblationConfig,
    bench: &BenchConfig,
) -> Result<Vec<AblationArm>> {
    let tcfg = teacher.config();
    let reference = StudentConfig {
        inner_width: tcfg.squeeze,
        ..ablation.flow_shaped.clone()
    };
    let configs = capacity_matched(
        tcfg,
        &reference,
        ablation.wide_width,
        ablation.feed_forward_blocks,
        ablation.tolerance,
    )?;
    let mut out = Vec::with_capacity(3);
    for cfg in configs {
        let mut rng = ChaCha8Rng::seed_from_u64(opt.seed);
        let mut student = StudentModel::<f32>::new(cfg.clone(), tcfg, &mut rng)?;
        let run = distill(teacher, &mut student, train, val, loss, opt, |_, _| Ok(()))?;
        let throughput = bench_throughput(&student, bench)?;
        let entry = AblationEntry {
            variant: cfg.variant,
            params: student.param_count(),
            config: cfg,
            final_validation: *run.final_validation().expect("validation at step 0"),
            throughput,
            run,
        };
        out.push(AblationArm { entry, student });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar_store(w: f64) -> (ParamStore<f64>, ParamId) {
        let mut s = ParamStore::new();
        let id = s.add("w", Tensor::scalar(w));
        (s, id)
    }

    #[test]
    fn first_step_moves_by_lr_against_the_gradient_sign() {
        for g in [1e-3, 0.3, -7.0, 1e4] {
            let (mut s, id) = scalar_store(0.5);
            let mut adam = Adam::new(0.9, 0.999, 1e-8);
            adam.apply(&mut s, &[id], vec![vec![g]], 0.01).unwrap();
            let moved = s.get(id).item() - 0.5;
            assert!(
                (moved + 0.01 * g.signum()).abs() < 1e-4 * 0.01,
                "g={g} moved {moved}"
            );
            let exact = -0.01 * g / (g.abs() + 1e-8);
            assert!((moved - exact).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_gradient_leaves_parameters() {
        let (mut s, id) = scalar_store(0.25);
        let mut adam = Adam::new(0.9, 0.999, 1e-8);
        adam.apply(&mut s, &[id], vec![vec![0.0]], 0.1).unwrap();
        assert_eq!(s.get(id).item(), 0.25);
        assert_eq!(adam.moments(id).unwrap(), (&[0.0][..], &[0.0][..]));
        assert_eq!(adam.steps_taken(), 1);
    }

    #[test]
    fn descends_a_quadratic() {
        // Scalar oracle of the same recursion.
        let (mut w, mut m, mut v) = (1.0f64, 0.0, 0.0);
        let mut oracle = Vec::new();
        for t in 1..=10 {
            let g = 2.0 * w;
            m = 0.9 * m + 0.1 * g;
            v = 0.999 * v + 0.001 * g * g;
            w -=
                0.1 * (m / (1.0 - 0.9f64.powi(t))) / ((v / (1.0 - 0.999f64.powi(t))).sqrt() + 1e-8);
            oracle.push(w);
        }
        let (mut s, id) = scalar_store(1.0);
        let mut adam = Adam::new(0.9, 0.999, 1e-8);
        let mut prev = 1.0f64;
        for want in oracle {
            let mut g = Tape::new();
            let wv = g.param(&s, id);
            let sq = g.mul(&wv, &wv).unwrap();
            let grads = g.backward(sq).unwrap();
            adam.step(&mut s, &grads, 0.1).unwrap();
            let w = s.get(id).item();
            assert!(w.abs() < prev.abs());
            assert!((w - want).abs() < 1e-14, "{w} vs {want}");
            prev = w;
        }
    }

    #[test]
    fn non_finite_gradient_names_the_parameter() {
        let (mut s, id) = scalar_store(1.0);
        let mut adam = Adam::new(0.9, 0.999, 1e-8);
        match adam.apply(&mut s, &[id], vec![vec![f64::NAN]], 0.1) {
            Err(Error::NonFiniteGradient { param }) => assert_eq!(param, "w"),
            other => panic!("{other:?}"),
        }
        assert_eq!(s.get(id).item(), 1.0);
        assert_eq!(adam.steps_taken(), 0);
    }

    #[test]
    fn clipping_bounds_the_global_norm() {
        let mut s = ParamStore::<f64>::new();
        let id = s.add("w", Tensor::zeros([2]));
        let mut adam = Adam::new(0.0, 0.0, 0.0);
        adam.grad_clip = Some(1.0);
        adam.apply(&mut s, &[id], vec![vec![30.0, 40.0]], 1.0)
            .unwrap();
        let (m, _) = adam.moments(id).unwrap();
        assert!((m[0] - 0.6).abs() < 1e-12 && (m[1] - 0.8).abs() < 1e-12);
    }

    #[test]
    fn one_cycle_shape() {
        let s = OneCycle {
            max_lr: 1e-3,
            warmup_steps: 200,
            total_steps: 2000,
            floor: 0.01,
        };
        assert_eq!(s.lr(0).unwrap(), 1e-5);
        assert_eq!(s.lr(200).unwrap(), 1e-3);
        assert!((s.lr(2000).unwrap() - 1e-5).abs() < 1e-18);
        let lrs: Vec<f64> = (0..=2000).map(|t| s.lr(t).unwrap()).collect();
        assert!(lrs[..=200].windows(2).all(|w| w[1] > w[0]));
        assert!(lrs[200..].windows(2).all(|w| w[1] <= w[0]));
        assert!(s.lr(2001).is_err());
    }

    #[test]
    fn one_cycle_validation() {
        let ok = OneCycle {
            max_lr: 1.0,
            warmup_steps: 0,
            total_steps: 0,
            floor: 0.5,
        };
        assert!(ok.validate().is_ok());
        assert_eq!(ok.lr(0).unwrap(), 1.0);
        assert!(OneCycle {
            warmup_steps: 1,
            ..ok
        }
        .validate()
        .is_err());
        assert!(OneCycle { floor: 0.0, ..ok }.validate().is_err());
        assert!(OneCycle { max_lr: -1.0, ..ok }.validate().is_err());
    }

    #[test]
    fn step_generators_are_independent_streams() {
        use rand::Rng;
        let opt = OptimConfig::default();
        let a: u64 = opt.step_rng(3).gen();
        let b: u64 = opt.step_rng(3).gen();
        let c: u64 = opt.step_rng(4).gen();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn csv_layout() {
        let mut run = TrainRun::new(&OptimConfig::default(), &["total", "rec"]);
        assert_eq!(run.loss_csv(), "step,lr,total,rec\n");
        run.history.push(StepLog {
            step: 0,
            lr: 0.5,
            values: vec![1.25, 0.1],
        });
        assert_eq!(run.loss_csv(), "step,lr,total,rec\n0,0.5,1.25,0.1\n");
        assert_eq!(run.smoothed_tail("rec", 10), Some(0.1));
        assert_eq!(run.column("missing"), None);
    }
}
