use nfdistill::flow::{sample_latent, EarlyOutput, FlowConfig, FlowModel, Synthesizer};
use nfdistill::student::{StudentConfig, StudentModel, Variant};
use nfdistill::{grad_check_model, Error, Graph, Parametric, Real, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn teacher_cfg(early: Option<EarlyOutput>) -> FlowConfig {
    FlowConfig {
        squeeze: 4,
        steps: 4,
        coupling_layers: 2,
        coupling_hidden: 6,
        early_output: early,
        cond_hop: 8,
        ..FlowConfig::default()
    }
}

fn jitter<F: Real, M: Parametric<F>>(m: &mut M, rng: &mut ChaCha8Rng, std: f64) {
    let store = m.params_mut();
    for id in store.trainable_ids() {
        for v in store.get_mut(id).data_mut() {
            *v = F::of(v.f64() + rng.gen_range(-1.0..1.0) * std);
        }
    }
}

fn random_teacher(cfg: FlowConfig, seed: u64) -> FlowModel<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut t = FlowModel::<f64>::new(cfg, &mut rng).unwrap();
    jitter(&mut t, &mut rng, 0.2);
    t.mark_initialized();
    t
}

fn students(t: &FlowConfig, rng: &mut ChaCha8Rng) -> Vec<StudentModel<f64>> {
    Variant::ALL
        .into_iter()
        .map(|variant| {
            let cfg = StudentConfig {
                variant,
                inner_width: if variant == Variant::FlowShaped { 4 } else { 6 },
                blocks: 2,
                layers: 2,
                hidden: 5,
                weight_norm: variant == Variant::WideFlow,
                ..StudentConfig::default()
            };
            let mut s = StudentModel::new(cfg, t, rng).unwrap();
            jitter(&mut s, rng, 0.2);
            s
        })
        .collect()
}

fn inputs(rng: &mut ChaCha8Rng, batch: usize, len: usize) -> (Tensor<f64>, Tensor<f64>) {
    let z = sample_latent(rng, [batch, 4, len / 4], 1.0);
    let c = Tensor::from_fn([batch, 2, len / 8], |_| rng.gen_range(-1.0..1.0));
    (z, c)
}

#[test]
fn clone_of_teacher_reproduces_samples_exactly() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for early in [
        None,
        Some(EarlyOutput {
            every: 2,
            channels: 1,
        }),
    ] {
        let t: FlowModel<f32> = random_teacher(teacher_cfg(early), 2).cast();
        let s = StudentModel::clone_teacher(&t).unwrap();
        assert_eq!(s.variant(), Variant::FlowShaped);
        let g = 4;
        assert_eq!(s.param_count(), t.param_count() + 2 * (g * g + g));
        let (z, c) = inputs(&mut rng, 3, 64);
        let (z, c) = (z.cast::<f32>(), c.cast::<f32>());
        assert_eq!(s.sample(&z, &c).unwrap(), t.sample(&z, &c).unwrap());
    }
}

#[test]
fn zero_exit_gives_silence() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let t = teacher_cfg(None);
    for mut s in students(&t, &mut rng) {
        let exit = s.exit().clone();
        for id in s.params().trainable_ids() {
            if s.params().name(id).starts_with("exit.") {
                let shape = s.params().get(id).shape().to_vec();
                s.params_mut().set(id, Tensor::zeros(shape)).unwrap();
            }
        }
        assert!(!exit.is_weight_normed());
        let (z, c) = inputs(&mut rng, 2, 32);
        let x = s.sample(&z, &c).unwrap();
        assert_eq!(x.shape(), [2, 32]);
        assert_eq!(x.max_abs(), 0.0);
    }
}

#[test]
fn output_is_deterministic_and_shaped_like_teacher() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let t = teacher_cfg(None);
    for s in students(&t, &mut rng) {
        let (z, c) = inputs(&mut rng, 2, 64);
        let a = s.sample(&z, &c).unwrap();
        assert_eq!(a, s.sample(&z, &c).unwrap());
        assert_eq!(a.shape(), [2, 64]);
        assert_eq!(s.latent_shape(2, 64).unwrap(), [2, 4, 16]);
    }
}

#[test]
fn every_latent_coordinate_reaches_the_output() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let t = teacher_cfg(Some(EarlyOutput {
        every: 2,
        channels: 1,
    }));
    for s in students(&t, &mut rng) {
        let (z, c) = inputs(&mut rng, 1, 64);
        let base = s.sample(&z, &c).unwrap();
        for j in 0..16 {
            let i = j * z.len() / 16;
            let mut zp = z.clone();
            zp.data_mut()[i] += 0.5;
            let d = s.sample(&zp, &c).unwrap().max_abs_diff(&base).unwrap();
            assert!(d > 0.0, "{:?}: coordinate {i} has no effect", s.variant());
        }
    }
}

#[test]
fn parameter_gradients_of_squared_output() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let t = teacher_cfg(Some(EarlyOutput {
        every: 2,
        channels: 1,
    }));
    for s in students(&t, &mut rng) {
        let (z, c) = inputs(&mut rng, 2, 32);
        let err = grad_check_model(
            &s,
            5,
            |g, m: &StudentModel<f64>| {
                let zv = g.constant(z.clone());
                let cv = g.constant(c.clone());
                let x = m.synthesize(g, &zv, &cv)?;
                let sq = g.mul(&x, &x)?;
                g.sum(&sq)
            },
            1e-6,
        )
        .unwrap();
        assert!(err < 1e-6, "{:?}: {err}", s.variant());
    }
}

#[test]
fn mismatched_shapes_are_rejected() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let t = teacher_cfg(None);
    let s = &students(&t, &mut rng)[2];
    let c = Tensor::zeros([1, 2, 4]);
    assert!(s.sample(&Tensor::zeros([1, 3, 8]), &c).is_err());
    assert!(s
        .sample(&Tensor::zeros([1, 4, 8]), &Tensor::zeros([1, 2, 3]))
        .is_err());
    let bad = StudentConfig {
        variant: Variant::FlowShaped,
        inner_width: 8,
        ..StudentConfig::flow_shaped_like(&t)
    };
    assert!(matches!(
        StudentModel::<f32>::new(bad, &t, &mut rng),
        Err(Error::Config(_))
    ));
}

#[test]
fn paper_scale_shapes() {
    let t = FlowConfig::default();
    let v3 = StudentConfig {
        inner_width: 96,
        blocks: 2,
        layers: 8,
        ..StudentConfig::default()
    };
    assert!(v3.param_count(&t).unwrap() > 0);
    let wide = StudentConfig {
        variant: Variant::WideFlow,
        inner_width: 96,
        ..StudentConfig::default()
    };
    assert_eq!(wide.inner_width / t.squeeze, 12);
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let m = StudentModel::<f32>::new(wide.clone(), &t, &mut rng).unwrap();
    assert_eq!(m.param_count(), wide.param_count(&t).unwrap());
}
