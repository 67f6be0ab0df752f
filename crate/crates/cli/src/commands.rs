//! One function per subcommand. Every output file is written atomically.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use anyhow::{bail, ensure, Context, Result};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde_json::json;

use nfdistill::checkpoint::{Checkpoint, Model};
use nfdistill::data::{write_atomic, Dataset, Split};
use nfdistill::flow::{sample_latent, FlowModel, Synthesizer};
use nfdistill::fusion::{bench_pair, bench_throughput, fuse_and_bench};
use nfdistill::metrics::{consistency_metric, diversity_score, spectral_distance};
use nfdistill::spectral::{l1_reconstruction, multires_stft_loss};
use nfdistill::student::StudentModel;
use nfdistill::train::{
    distill as distill_loop, run_ablation, train_teacher as train_loop, TrainRun,
};
use nfdistill::{Error, Tensor};

use crate::config::RunConfig;
use crate::report::{digest, MetricReport};

pub const TRAIN_FILE: &str = "train.nfds";
pub const VALIDATION_FILE: &str = "validation.nfds";
pub const HELD_OUT_FILE: &str = "held-out.nfds";

/// Smoothing window for the reported final training loss.
pub const SMOOTHING: usize = 100;

fn split_file(split: Split) -> &'static str {
    match split {
        Split::Train => TRAIN_FILE,
        Split::Validation => VALIDATION_FILE,
        Split::HeldOut => HELD_OUT_FILE,
    }
}

fn write(path: &Path, bytes: &[u8]) -> Result<()> {
    write_atomic(path, bytes).with_context(|| format!("writing {}", path.display()))
}

fn ensure_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

fn producer(command: &str, cfg: &RunConfig) -> serde_json::Value {
    json!({ "command": command, "config": cfg.to_value(), "config_hash": cfg.hash() })
}

fn save_checkpoint(
    path: &Path,
    model: Model,
    step: usize,
    command: &str,
    cfg: &RunConfig,
) -> Result<()> {
    let ck = Checkpoint {
        model,
        step,
        producer: Some(producer(command, cfg)),
    };
    write(path, &ck.encode()?)
}

fn read_with_digest(path: &Path) -> Result<(Vec<u8>, String)> {
    let bytes = std::fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    let d = digest(&bytes);
    Ok((bytes, d))
}

fn load_checkpoint(
    path: &Path,
    role: &str,
    inputs: &mut BTreeMap<String, String>,
) -> Result<Checkpoint> {
    let (bytes, d) = read_with_digest(path)?;
    inputs.insert(role.into(), d);
    Checkpoint::decode(&bytes).with_context(|| format!("loading {}", path.display()))
}

fn load_split(
    dir: &Path,
    split: Split,
    cfg: &RunConfig,
    inputs: &mut BTreeMap<String, String>,
) -> Result<Dataset> {
    let path = dir.join(split_file(split));
    let (bytes, d) = read_with_digest(&path)?;
    let ds = Dataset::decode(&bytes).with_context(|| format!("loading {}", path.display()))?;
    ensure!(
        ds.params == cfg.data.params,
        "{} was generated with different synthesis parameters than the run configuration",
        path.display()
    );
    if let Some(e) = ds
        .examples
        .iter()
        .find(|e| Split::of_seed(e.seed) != Some(split))
    {
        bail!(
            "{} holds seed {} from outside its split",
            path.display(),
            e.seed
        );
    }
    inputs.insert(split_file(split).into(), d);
    Ok(ds)
}

fn write_run(out: &Path, stem: &str, run: &TrainRun) -> Result<()> {
    write(
        &out.join(format!("{stem}_loss.csv")),
        run.loss_csv().as_bytes(),
    )?;
    if !run.validation.is_empty() {
        write(
            &out.join(format!("{stem}_validation.csv")),
            run.validation_csv().as_bytes(),
        )?;
    }
    Ok(())
}

fn write_report(path: &Path, report: &MetricReport) -> Result<()> {
    write(path, report.to_json().as_bytes())
}

/// Train, validation and held-out splits into `out`.
pub fn gen_data(cfg: &RunConfig, out: &Path) -> Result<()> {
    ensure_dir(out)?;
    let d = &cfg.data;
    for (split, n) in [
        (Split::Train, d.train_examples),
        (Split::Validation, d.validation_examples),
        (Split::HeldOut, d.held_out_examples),
    ] {
        let ds = Dataset::generate(&d.params, split, n)?;
        let path = out.join(split_file(split));
        write(&path, &ds.encode()?)?;
        println!("{}: {n} examples", path.display());
    }
    println!("config hash {}", cfg.hash());
    Ok(())
}

pub fn train_teacher(cfg: &RunConfig, data: &Path, out: &Path) -> Result<()> {
    const CMD: &str = "train-teacher";
    ensure_dir(out)?;
    let mut inputs = BTreeMap::new();
    let train = load_split(data, Split::Train, cfg, &mut inputs)?;
    let mut model = FlowModel::<f32>::new(
        cfg.teacher.clone(),
        &mut ChaCha8Rng::seed_from_u64(cfg.seed),
    )?;
    let ckpt = out.join("teacher.ckpt.nfdl");
    let result = train_loop(&mut model, &train, &cfg.teacher_train, |step, m| {
        save_checkpoint(&ckpt, Model::Teacher(m.clone()), step, CMD, cfg)
            .map_err(|e| Error::Invalid(format!("{e:#}")))
    });
    let run = match result {
        Ok(run) => run,
        Err(e @ Error::Diverged { last_good_step, .. }) => {
            let path = out.join("teacher.last_good.nfdl");
            save_checkpoint(&path, Model::Teacher(model), last_good_step, CMD, cfg)?;
            bail!("{e}; last good state saved to {}", path.display());
        }
        Err(e) => return Err(e.into()),
    };
    let steps = run.history.len();
    save_checkpoint(
        &out.join("teacher.nfdl"),
        Model::Teacher(model.clone()),
        steps,
        CMD,
        cfg,
    )?;
    write_run(out, "teacher", &run)?;
    let mut report = MetricReport::new(CMD, cfg, inputs);
    report
        .metric("steps", steps as f64)
        .metric("params", model.param_count() as f64)
        .metric("params_analytic", cfg.teacher.param_count() as f64);
    if let Some(nll) = run.column("nll").filter(|v| !v.is_empty()) {
        report.metric("post_init_nll", nll[0]).metric(
            "final_nll_smoothed",
            run.smoothed_tail("nll", SMOOTHING).expect("non-empty"),
        );
    }
    write_report(&out.join("teacher_report.json"), &report)?;
    println!("teacher: {steps} steps, {} parameters", model.param_count());
    Ok(())
}

pub fn distill(cfg: &RunConfig, data: &Path, teacher: &Path, out: &Path) -> Result<()> {
    const CMD: &str = "distill";
    ensure_dir(out)?;
    let mut inputs = BTreeMap::new();
    let teacher = load_checkpoint(teacher, "teacher", &mut inputs)?.into_teacher()?;
    let train = load_split(data, Split::Train, cfg, &mut inputs)?;
    let val = load_split(data, Split::Validation, cfg, &mut inputs)?;
    train.check_disjoint(&val)?;
    let mut student = StudentModel::<f32>::new(
        cfg.student.clone(),
        teacher.config(),
        &mut ChaCha8Rng::seed_from_u64(cfg.seed),
    )?;
    let ckpt = out.join("student.ckpt.nfdl");
    let run = distill_loop(
        &teacher,
        &mut student,
        &train,
        &val,
        &cfg.distill.loss,
        &cfg.distill.optim,
        |step, s| {
            save_checkpoint(&ckpt, Model::Student(s.clone()), step, CMD, cfg)
                .map_err(|e| Error::Invalid(format!("{e:#}")))
        },
    )?;
    let steps = run.history.len();
    save_checkpoint(
        &out.join("student.nfdl"),
        Model::Student(student.clone()),
        steps,
        CMD,
        cfg,
    )?;
    write_run(out, "student", &run)?;
    let mut report = MetricReport::new(CMD, cfg, inputs);
    let first = run.validation.first().expect("validation at step 0").loss;
    let last = run.final_validation().expect("validation at step 0");
    report
        .metric("steps", steps as f64)
        .metric("params", student.param_count() as f64)
        .metric(
            "params_analytic",
            cfg.student.param_count(teacher.config())? as f64,
        )
        .metric("initial_validation_total", first.total)
        .metric("final_validation_total", last.total)
        .metric("final_validation_rec", last.rec)
        .metric("final_validation_feature", last.feature)
        .detail("variant", cfg.student.variant);
    write_report(&out.join("distill_report.json"), &report)?;
    println!(
        "student: {steps} steps, validation loss {:.5} -> {:.5}",
        first.total, last.total
    );
    Ok(())
}

pub fn ablate(cfg: &RunConfig, data: &Path, teacher: &Path, out: &Path) -> Result<()> {
    const CMD: &str = "ablate";
    ensure_dir(out)?;
    let mut inputs = BTreeMap::new();
    let teacher = load_checkpoint(teacher, "teacher", &mut inputs)?.into_teacher()?;
    let train = load_split(data, Split::Train, cfg, &mut inputs)?;
    let val = load_split(data, Split::Validation, cfg, &mut inputs)?;
    train.check_disjoint(&val)?;
    let arms = run_ablation(
        &teacher,
        &train,
        &val,
        &cfg.distill.loss,
        &cfg.distill.optim,
        &cfg.ablation,
        &cfg.bench,
    )?;
    let mut report = MetricReport::new(CMD, cfg, inputs);
    let mut entries = Vec::new();
    let mut timing = Vec::new();
    for arm in &arms {
        let e = &arm.entry;
        let label = e.variant.label();
        write_run(out, &format!("ablation_{label}"), &e.run)?;
        let steps = e.run.history.len();
        save_checkpoint(
            &out.join(format!("ablation_{label}.nfdl")),
            Model::Student(arm.student.clone()),
            steps,
            CMD,
            cfg,
        )?;
        entries.push(json!({
            "variant": e.variant,
            "config": e.config,
            "params": e.params,
            "final_validation": e.final_validation,
        }));
        timing.push(json!({ "variant": e.variant, "throughput": e.throughput }));
        report.metric(
            &format!("{label}.final_validation_total"),
            e.final_validation.total,
        );
        println!(
            "{label}: {} parameters, final validation loss {:.5}",
            e.params, e.final_validation.total
        );
    }
    report
        .detail("variants", entries)
        .timing("throughput", timing);
    write_report(&out.join("ablation_report.json"), &report)?;
    Ok(())
}

pub fn fuse(cfg: &RunConfig, checkpoint: &Path, out: &Path) -> Result<()> {
    const CMD: &str = "fuse";
    ensure_dir(out)?;
    let mut inputs = BTreeMap::new();
    let ck = load_checkpoint(checkpoint, "teacher", &mut inputs)?;
    let step = ck.step;
    let mut model = ck
        .into_teacher()
        .context("fusion applies to flow teachers")?;
    let fr = fuse_and_bench(&mut model, &cfg.fusion, &cfg.bench)?;
    save_checkpoint(
        &out.join("teacher_fused.nfdl"),
        Model::Teacher(model),
        step,
        CMD,
        cfg,
    )?;
    let mut report = MetricReport::new(CMD, cfg, inputs);
    report
        .metric("passes_applied", fr.passes_applied.len() as f64)
        .metric("max_abs_deviation", fr.max_abs_deviation)
        .metric("inputs", fr.inputs as f64)
        .detail("passes", &fr.passes_applied)
        .timing("speedup", fr.speedup)
        .timing("unfused", &fr.unfused_throughput)
        .timing("fused", &fr.fused_throughput);
    write_report(&out.join("fusion_report.json"), &report)?;
    println!(
        "fused: passes {:?}, deviation {:.3e}, speedup {:.3}x",
        fr.passes_applied,
        fr.max_abs_deviation,
        fr.speedup.unwrap_or(f64::NAN)
    );
    Ok(())
}

/// Analytic trainable-parameter count of an unfused model.
fn analytic_params(m: &Model) -> Result<usize> {
    Ok(match m {
        Model::Teacher(t) => t.config().param_count(),
        Model::Student(s) => s.config().param_count(s.teacher_config())?,
    })
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

pub fn eval(
    cfg: &RunConfig,
    data: &Path,
    teacher: &Path,
    student: &Path,
    out: &Path,
) -> Result<()> {
    const CMD: &str = "eval";
    ensure_dir(out)?;
    let mut inputs = BTreeMap::new();
    let teacher = load_checkpoint(teacher, "teacher", &mut inputs)?.model;
    let student = load_checkpoint(student, "student", &mut inputs)?.model;
    let train = load_split(data, Split::Train, cfg, &mut inputs)?;
    let held = load_split(data, Split::HeldOut, cfg, &mut inputs)?;
    held.check_disjoint(&train)?;
    ensure!(
        held.len() >= cfg.eval.conditions,
        "held-out split has {} examples, {} requested",
        held.len(),
        cfg.eval.conditions
    );
    let (tz, sz) = (
        teacher.latent_shape(1, cfg.data.params.length)?,
        student.latent_shape(1, cfg.data.params.length)?,
    );
    ensure!(
        tz == sz,
        "teacher latent {tz:?} and student latent {sz:?} differ"
    );

    let n = cfg.eval.conditions;
    let p = &cfg.data.params;
    let picks: Vec<(usize, usize)> = (0..n).map(|i| (i, 0)).collect();
    let (_, c) = held.batch(&picks, p.length)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.eval.seed);
    let sigma = match &teacher {
        Model::Teacher(t) => t.config().sigma,
        Model::Student(s) => s.teacher_config().sigma,
    };
    let z = sample_latent(&mut rng, teacher.latent_shape(n, p.length)?, sigma);
    let xt = teacher.sample(&z, &c)?;
    let xs = student.sample(&z, &c)?;

    let loss = &cfg.distill.loss;
    let mut report = MetricReport::new(CMD, cfg, inputs);
    report
        .metric("l1_to_teacher", l1_reconstruction(&xt, &xs)?)
        .metric("stft_to_teacher", multires_stft_loss(&xt, &xs, loss)?);

    let mut cons = [Vec::with_capacity(n), Vec::with_capacity(n)];
    let mut div = [Vec::with_capacity(n), Vec::with_capacity(n)];
    let dist = |a: &Tensor<f32>, b: &Tensor<f32>| spectral_distance(a, b, loss);
    let mut rngs = [
        ChaCha8Rng::seed_from_u64(cfg.eval.seed),
        ChaCha8Rng::seed_from_u64(cfg.eval.seed),
    ];
    for i in 0..n {
        let ci = c.batch_slice(i, i + 1)?;
        let cf = ci.clone().reshape([2, p.frames()])?;
        for (k, (x, m)) in [(&xt, &teacher), (&xs, &student)].into_iter().enumerate() {
            let xi = x.batch_slice(i, i + 1)?;
            cons[k].push(consistency_metric(xi.data(), &cf, p)?.overall_db);
            div[k].push(diversity_score(
                m,
                &cf,
                cfg.eval.diversity_k,
                sigma,
                &mut rngs[k],
                dist,
            )?);
        }
    }
    report
        .metric("teacher_consistency_db", mean(&cons[0]))
        .metric("student_consistency_db", mean(&cons[1]))
        .metric("teacher_diversity", mean(&div[0]))
        .metric("student_diversity", mean(&div[1]))
        .metric("diversity_ratio", mean(&div[1]) / mean(&div[0]))
        .metric("teacher_params", teacher.param_count() as f64)
        .metric("student_params", student.param_count() as f64)
        .metric("teacher_params_analytic", analytic_params(&teacher)? as f64)
        .metric("student_params_analytic", analytic_params(&student)? as f64);
    let (bt, bs) = bench_pair(&teacher, &student, &cfg.bench)?;
    report
        .timing("teacher_throughput", &bt)
        .timing("student_throughput", &bs)
        .timing(
            "speedup",
            bs.median_samples_per_sec / bt.median_samples_per_sec,
        );
    write_report(&out.join("eval_report.json"), &report)?;
    println!(
        "eval: L1 {:.5}, diversity teacher {:.4} student {:.4}",
        report.metrics["l1_to_teacher"],
        report.metrics["teacher_diversity"],
        report.metrics["student_diversity"]
    );
    Ok(())
}

pub fn bench(cfg: &RunConfig, teacher: &Path, student: Option<&Path>, out: &Path) -> Result<()> {
    const CMD: &str = "bench";
    ensure_dir(out)?;
    let mut inputs = BTreeMap::new();
    let teacher = load_checkpoint(teacher, "teacher", &mut inputs)?.model;
    let mut report = MetricReport::new(CMD, cfg, inputs.clone());
    report.metric("teacher_params", teacher.param_count() as f64);
    match student {
        Some(path) => {
            let student = load_checkpoint(path, "student", &mut inputs)?.model;
            report = MetricReport {
                inputs: inputs.clone(),
                ..MetricReport::new(CMD, cfg, inputs)
            };
            let (bt, bs) = bench_pair(&teacher, &student, &cfg.bench)?;
            println!(
                "teacher {:.4} MHz, student {:.4} MHz ({:.2}x)",
                bt.median_mhz,
                bs.median_mhz,
                bs.median_samples_per_sec / bt.median_samples_per_sec
            );
            report
                .metric("teacher_params", teacher.param_count() as f64)
                .metric("student_params", student.param_count() as f64)
                .timing(
                    "speedup",
                    bs.median_samples_per_sec / bt.median_samples_per_sec,
                )
                .timing("teacher", bt)
                .timing("student", bs);
        }
        None => {
            let bt = bench_throughput(&teacher, &cfg.bench)?;
            println!("teacher {:.4} MHz", bt.median_mhz);
            report.timing("teacher", bt);
        }
    }
    report.detail("bench", &cfg.bench);
    write_report(&out.join("bench_report.json"), &report)?;
    Ok(())
}

/// Paths accepted by every command.
#[derive(Clone, Debug, Default)]
pub struct Common {
    pub config: Option<PathBuf>,
    pub seed: Option<u64>,
}

impl Common {
    pub fn resolve(&self) -> Result<RunConfig> {
        let cfg = RunConfig::load(self.config.as_deref())?;
        let cfg = match self.seed {
            Some(s) => cfg.with_seed(s),
            None => cfg,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}
