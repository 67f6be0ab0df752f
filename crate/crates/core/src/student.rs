//! Feed-forward students `S(z, c) → x̂`.
//!
//! All three designs read the complete latent through an entry 1×1
//! convolution and finish with an exit 1×1 convolution and an unsqueeze, so
//! their outputs line up with the teacher's samples.

use rand::{Rng, SeedableRng};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::flow::{
    coupling_inverse, linear_inverse, upsample_condition, FlowConfig, FlowModel, InverseLinear,
    Synthesizer, MAX_DEPTH, MAX_KERNEL, MAX_LAYERS, MAX_WIDTH,
};
use crate::graph::{Graph, Parametric};
use crate::kernels::logabsdet_inverse;
use crate::nn::{random_orthogonal, Conv1d, ConvSpec, Init, WaveNet, WaveNetSpec};
use crate::params::{ParamId, ParamStore};
use crate::tensor::{Real, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Variant {
    /// Clone of the teacher's inverse pass with free parameters.
    FlowShaped,
    /// Flow steps at a wider width with unconstrained 1×1 mixing.
    WideFlow,
    /// Stack of gated WaveNet blocks.
    FeedForward,
}

impl Variant {
    pub const ALL: [Variant; 3] = [Variant::FlowShaped, Variant::WideFlow, Variant::FeedForward];

    pub fn label(self) -> &'static str {
        match self {
            Variant::FlowShaped => "flow-shaped",
            Variant::WideFlow => "wide-flow",
            Variant::FeedForward => "feed-forward",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct StudentConfig {
    pub variant: Variant,
    /// Residual width of the feed-forward stack, or the step width of the
    /// wide flow. Must equal the latent channel count for the flow-shaped student.
    pub inner_width: usize,
    /// Flow steps (flow-shaped, wide-flow) or WaveNet blocks (feed-forward).
    pub blocks: usize,
    pub layers: usize,
    /// Hidden width of coupling conditioners; unused by the feed-forward stack.
    pub hidden: usize,
    pub kernel: usize,
    pub weight_norm: bool,
    /// Flow-shaped only: a learned shift ahead of each mixing matrix.
    pub mix_shift: bool,
}

impl Default for StudentConfig {
    fn default() -> Self {
        StudentConfig {
            variant: Variant::FeedForward,
            inner_width: 64,
            blocks: 2,
            layers: 4,
            hidden: 64,
            kernel: 3,
            weight_norm: false,
            mix_shift: false,
        }
    }
}

impl StudentConfig {
    /// Flow-shaped student with the teacher's step structure.
    pub fn flow_shaped_like(teacher: &FlowConfig) -> Self {
        StudentConfig {
            variant: Variant::FlowShaped,
            inner_width: teacher.squeeze,
            blocks: teacher.steps,
            layers: teacher.coupling_layers,
            hidden: teacher.coupling_hidden,
            kernel: teacher.kernel,
            weight_norm: teacher.weight_norm,
            mix_shift: false,
        }
    }

    /// Teacher configuration the flow-shaped body mirrors.
    fn body_flow(&self, teacher: &FlowConfig) -> FlowConfig {
        FlowConfig {
            steps: self.blocks,
            coupling_layers: self.layers,
            coupling_hidden: self.hidden,
            kernel: self.kernel,
            weight_norm: self.weight_norm,
            ..teacher.clone()
        }
    }

    pub fn validate(&self, teacher: &FlowConfig) -> Result<()> {
        teacher.validate()?;
        let bad = |m: String| Err(Error::config(m));
        let limits = [
            ("inner_width", self.inner_width, MAX_WIDTH),
            ("blocks", self.blocks, MAX_DEPTH),
            ("layers", self.layers, MAX_LAYERS),
            ("hidden", self.hidden, MAX_WIDTH),
            ("kernel", self.kernel, MAX_KERNEL),
        ];
        if let Some((name, v, max)) = limits.iter().find(|(_, v, max)| v > max) {
            return bad(format!("{name} = {v} exceeds the supported maximum {max}"));
        }
        if self.inner_width == 0 || self.blocks == 0 || self.layers == 0 {
            return bad(format!("degenerate student {self:?}"));
        }
        if self.kernel % 2 == 0 {
            return bad(format!("student kernel {} must be odd", self.kernel));
        }
        match self.variant {
            Variant::FlowShaped => {
                if self.inner_width != teacher.squeeze {
                    return bad(format!(
                        "flow-shaped student width {} must equal the {} latent channels",
                        self.inner_width, teacher.squeeze
                    ));
                }
                if self.hidden == 0 {
                    return bad("coupling hidden width must be positive".into());
                }
                self.body_flow(teacher).validate()
            }
            Variant::WideFlow if self.hidden == 0 && self.inner_width > 1 => {
                bad("coupling hidden width must be positive".into())
            }
            _ => Ok(()),
        }
    }

    fn wide_coupling(&self, teacher: &FlowConfig) -> Option<WaveNetSpec> {
        let w = self.inner_width;
        (w >= 2).then(|| WaveNetSpec {
            in_channels: Some(w.div_ceil(2)),
            hidden: self.hidden,
            layers: self.layers,
            kernel: self.kernel,
            cond_channels: teacher.cond_channels,
            out_channels: 2 * (w / 2),
            weight_norm: self.weight_norm,
            zero_end: true,
        })
    }

    fn block_spec(&self, teacher: &FlowConfig) -> WaveNetSpec {
        WaveNetSpec {
            in_channels: None,
            hidden: self.inner_width,
            layers: self.layers,
            kernel: self.kernel,
            cond_channels: teacher.cond_channels,
            out_channels: self.inner_width,
            weight_norm: self.weight_norm,
            zero_end: false,
        }
    }

    /// Trainable scalars of a student built from this config.
    pub fn param_count(&self, teacher: &FlowConfig) -> Result<usize> {
        self.validate(teacher)?;
        let g = teacher.squeeze;
        let w = self.inner_width;
        let pw = |cin, cout| ConvSpec::pointwise(cin, cout).count();
        Ok(match self.variant {
            Variant::FlowShaped => {
                let body = self.body_flow(teacher);
                let steps: usize = body
                    .step_channels()
                    .iter()
                    .map(|&c| {
                        body.coupling_spec(c).count()
                            + c * c
                            + 2 * c
                            + if self.mix_shift { c } else { 0 }
                    })
                    .sum();
                2 * pw(g, g) + steps
            }
            Variant::WideFlow => {
                let coupling = self.wide_coupling(teacher).map_or(0, |s| s.count());
                let mix = ConvSpec::pointwise(w, w)
                    .weight_norm(self.weight_norm)
                    .count();
                pw(g, w) + self.blocks * (coupling + mix) + pw(w, g)
            }
            Variant::FeedForward => {
                pw(g, w) + self.blocks * self.block_spec(teacher).count() + pw(w, g)
            }
        })
    }
}

#[derive(Clone, Debug)]
struct FlowShapedStep {
    channels: usize,
    coupling: WaveNet,
    pre_shift: Option<ParamId>,
    matrix: ParamId,
    post_shift: ParamId,
    post_scale: ParamId,
}

#[derive(Clone, Debug)]
struct WideStep {
    coupling: Option<WaveNet>,
    mix: Conv1d,
}

#[derive(Clone, Debug)]
enum Body {
    FlowShaped(Vec<FlowShapedStep>),
    WideFlow(Vec<WideStep>),
    FeedForward(Vec<WaveNet>),
}

#[derive(Clone, Debug)]
pub struct StudentModel<F: Real> {
    cfg: StudentConfig,
    teacher: FlowConfig,
    entry: Conv1d,
    body: Body,
    exit: Conv1d,
    store: ParamStore<F>,
}

impl<F: Real> StudentModel<F> {
    pub fn new<R: Rng>(cfg: StudentConfig, teacher: &FlowConfig, rng: &mut R) -> Result<Self> {
        cfg.validate(teacher)?;
        let mut store = ParamStore::new();
        let g = teacher.squeeze;
        let w = cfg.inner_width;
        let wn = cfg.weight_norm;
        let (entry, body, exit) = match cfg.variant {
            Variant::FlowShaped => {
                let entry = Conv1d::new(
                    &mut store,
                    "entry",
                    ConvSpec::pointwise(g, g).init(Init::Identity),
                    rng,
                );
                let flow = cfg.body_flow(teacher);
                let mut steps = Vec::with_capacity(cfg.blocks);
                for (k, c) in flow.step_channels().into_iter().enumerate() {
                    let p = format!("body.{k}");
                    let coupling = WaveNet::new(
                        &mut store,
                        &format!("{p}.coupling"),
                        flow.coupling_spec(c),
                        rng,
                    )?;
                    let pre_shift = cfg
                        .mix_shift
                        .then(|| store.add(format!("{p}.pre_shift"), Tensor::zeros([c])));
                    let matrix = store.add(format!("{p}.matrix"), random_orthogonal(c, rng));
                    let post_shift = store.add(format!("{p}.post_shift"), Tensor::zeros([c]));
                    let post_scale =
                        store.add(format!("{p}.post_scale"), Tensor::full([c], F::one()));
                    steps.push(FlowShapedStep {
                        channels: c,
                        coupling,
                        pre_shift,
                        matrix,
                        post_shift,
                        post_scale,
                    });
                }
                let exit = Conv1d::new(
                    &mut store,
                    "exit",
                    ConvSpec::pointwise(g, g).init(Init::Identity),
                    rng,
                );
                (entry, Body::FlowShaped(steps), exit)
            }
            Variant::WideFlow => {
                let entry = Conv1d::new(&mut store, "entry", ConvSpec::pointwise(g, w), rng);
                let mut steps = Vec::with_capacity(cfg.blocks);
                for k in 0..cfg.blocks {
                    let coupling = match cfg.wide_coupling(teacher) {
                        Some(spec) => Some(WaveNet::new(
                            &mut store,
                            &format!("body.{k}.coupling"),
                            spec,
                            rng,
                        )?),
                        None => None,
                    };
                    let mix = Conv1d::new(
                        &mut store,
                        &format!("body.{k}.mix"),
                        ConvSpec::pointwise(w, w).weight_norm(wn),
                        rng,
                    );
                    steps.push(WideStep { coupling, mix });
                }
                let exit = Conv1d::new(&mut store, "exit", ConvSpec::pointwise(w, g), rng);
                (entry, Body::WideFlow(steps), exit)
            }
            Variant::FeedForward => {
                let entry = Conv1d::new(&mut store, "entry", ConvSpec::pointwise(g, w), rng);
                let blocks = (0..cfg.blocks)
                    .map(|k| {
                        WaveNet::new(
                            &mut store,
                            &format!("body.{k}"),
                            cfg.block_spec(teacher),
                            rng,
                        )
                    })
                    .collect::<Result<Vec<_>>>()?;
                let exit = Conv1d::new(&mut store, "exit", ConvSpec::pointwise(w, g), rng);
                (entry, Body::FeedForward(blocks), exit)
            }
        };
        Ok(StudentModel {
            cfg,
            teacher: teacher.clone(),
            entry,
            body,
            exit,
            store,
        })
    }

    /// Flow-shaped student reproducing `teacher`'s sampling pass: identity
    /// entry/exit and the tensors the teacher's inverse uses, as parameters.
    pub fn clone_teacher(teacher: &FlowModel<F>) -> Result<Self> {
        let tcfg = teacher.config();
        let fused = teacher.steps.iter().any(|s| s.mix.bias.is_some());
        if fused && teacher.steps.iter().any(|s| s.mix.bias.is_none()) {
            return Err(Error::invalid("teacher is partially fused"));
        }
        let cfg = StudentConfig {
            weight_norm: !teacher.layout().weight_norm_folded && tcfg.weight_norm,
            mix_shift: fused,
            ..StudentConfig::flow_shaped_like(tcfg)
        };
        cfg.validate(tcfg)?;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
        let mut out = StudentModel::<F>::new(cfg, tcfg, &mut rng)?;
        let mut store = ParamStore::new();
        let g = tcfg.squeeze;
        out.entry = Conv1d::new(
            &mut store,
            "entry",
            ConvSpec::pointwise(g, g).init(Init::Identity),
            &mut rng,
        );
        let tstore = teacher.params();
        let mut steps = Vec::with_capacity(teacher.steps.len());
        for (k, ts) in teacher.steps.iter().enumerate() {
            let c = ts.channels;
            let p = format!("body.{k}");
            let coupling = ts.coupling.transplant(
                tstore,
                &mut store,
                &format!("steps.{k}.coupling"),
                &format!("{p}.coupling"),
            );
            let matrix = match ts.mix.inverse {
                Some(id) => tstore.get(id).clone(),
                None => logabsdet_inverse(tstore.get(ts.mix.weight))?.1,
            };
            let pre_shift = ts
                .mix
                .bias
                .map(|id| store.add(format!("{p}.pre_shift"), tstore.get(id).map(|v| -v)));
            let matrix = store.add(format!("{p}.matrix"), matrix);
            let (shift, scale) = match ts.actnorm {
                Some(an) => (
                    tstore.get(an.bias).map(|v| -v),
                    tstore.get(an.scale).map(|v| F::one() / v),
                ),
                None => (Tensor::zeros([c]), Tensor::full([c], F::one())),
            };
            let post_shift = store.add(format!("{p}.post_shift"), shift);
            let post_scale = store.add(format!("{p}.post_scale"), scale);
            steps.push(FlowShapedStep {
                channels: c,
                coupling,
                pre_shift,
                matrix,
                post_shift,
                post_scale,
            });
        }
        out.body = Body::FlowShaped(steps);
        out.exit = Conv1d::new(
            &mut store,
            "exit",
            ConvSpec::pointwise(g, g).init(Init::Identity),
            &mut rng,
        );
        out.store = store;
        Ok(out)
    }

    pub fn config(&self) -> &StudentConfig {
        &self.cfg
    }

    pub fn teacher_config(&self) -> &FlowConfig {
        &self.teacher
    }

    pub fn variant(&self) -> Variant {
        self.cfg.variant
    }

    pub fn param_count(&self) -> usize {
        self.store.count()
    }

    pub fn store_mut(&mut self) -> &mut ParamStore<F> {
        &mut self.store
    }

    /// The exit projection.
    pub fn exit(&self) -> &Conv1d {
        &self.exit
    }

    pub fn cast<G: Real>(&self) -> StudentModel<G> {
        StudentModel {
            cfg: self.cfg.clone(),
            teacher: self.teacher.clone(),
            entry: self.entry.clone(),
            body: self.body.clone(),
            exit: self.exit.clone(),
            store: self.store.cast(),
        }
    }

    fn forward_body<G: Graph<F>>(&self, g: &mut G, h: &G::V, cond: &G::V) -> Result<G::V> {
        let store = &self.store;
        match &self.body {
            Body::FlowShaped(steps) => {
                let flow = self.cfg.body_flow(&self.teacher);
                let sizes = flow.latent_pieces();
                let mut pieces = Vec::with_capacity(sizes.len());
                let mut rest = h.clone();
                for &n in &sizes[..sizes.len() - 1] {
                    let (p, r) = g.split_channels(&rest, n)?;
                    pieces.push(p);
                    rest = r;
                }
                let mut h = rest;
                for (k, step) in steps.iter().enumerate().rev() {
                    if flow.early_output.is_some_and(|e| (k + 1) % e.every == 0) {
                        let p = pieces.pop().expect("piece per emission");
                        h = g.concat_channels(&p, &h)?;
                    }
                    let split = step.channels.div_ceil(2);
                    h = coupling_inverse(g, store, &step.coupling, split, &h, cond)?;
                    let parts = InverseLinear {
                        pre_shift: step.pre_shift.map(|id| g.param(store, id)),
                        matrix: g.param(store, step.matrix),
                        post_shift: Some(g.param(store, step.post_shift)),
                        post_scale: Some(g.param(store, step.post_scale)),
                    };
                    h = linear_inverse(g, &parts, &h)?;
                }
                Ok(h)
            }
            Body::WideFlow(steps) => {
                let w = self.cfg.inner_width;
                let mut h = h.clone();
                for step in steps {
                    if let Some(net) = &step.coupling {
                        h = coupling_inverse(g, store, net, w.div_ceil(2), &h, cond)?;
                    }
                    h = step.mix.forward(g, store, &h)?;
                }
                Ok(h)
            }
            Body::FeedForward(blocks) => {
                let mut h = h.clone();
                for block in blocks {
                    h = block.forward(g, store, &h, cond)?;
                }
                Ok(h)
            }
        }
    }
}

impl<F: Real> Parametric<F> for StudentModel<F> {
    fn params(&self) -> &ParamStore<F> {
        &self.store
    }

    fn params_mut(&mut self) -> &mut ParamStore<F> {
        &mut self.store
    }
}

impl<F: Real> Synthesizer<F> for StudentModel<F> {
    fn synthesize<G: Graph<F>>(&self, g: &mut G, z: &G::V, c: &G::V) -> Result<G::V> {
        let t = &self.teacher;
        let (b, ch, tl) = g.value(z).bct("student")?;
        if ch != t.squeeze || tl == 0 {
            return Err(Error::shape(
                "student latent",
                &[b, t.squeeze, tl],
                g.value(z).shape(),
            ));
        }
        let rate = t.cond_hop / t.squeeze;
        let want = [b, t.cond_channels, tl / rate];
        if tl % rate != 0 || g.value(c).shape() != want {
            return Err(Error::shape("student condition", &want, g.value(c).shape()));
        }
        let cond = upsample_condition(g, c, rate)?;
        let h = self.entry.forward(g, &self.store, z)?;
        let h = self.forward_body(g, &h, &cond)?;
        let y = self.exit.forward(g, &self.store, &h)?;
        let x = g.unsqueeze(&y, t.squeeze)?;
        g.reshape(&x, &[b, tl * t.squeeze])
    }

    fn latent_shape(&self, batch: usize, len: usize) -> Result<[usize; 3]> {
        Ok([batch, self.teacher.squeeze, self.teacher.latent_len(len)?])
    }

    fn store(&self) -> &ParamStore<F> {
        &self.store
    }

    fn frame_hop(&self) -> usize {
        self.teacher.cond_hop
    }

    fn cond_channels(&self) -> usize {
        self.teacher.cond_channels
    }
}

/// Configurations of all three variants whose parameter counts lie within
/// `tolerance` (relative) of the flow-shaped student's. The wide flow keeps
/// `wide_width` and searches its coupling hidden width; the feed-forward
/// stack searches its residual width.
pub fn capacity_matched(
    teacher: &FlowConfig,
    flow_shaped: &StudentConfig,
    wide_width: usize,
    feed_forward_blocks: usize,
    tolerance: f64,
) -> Result<[StudentConfig; 3]> {
    if flow_shaped.variant != Variant::FlowShaped {
        return Err(Error::config(
            "capacity matching starts from a flow-shaped student",
        ));
    }
    let target = flow_shaped.param_count(teacher)? as f64;
    let search = |make: &dyn Fn(usize) -> StudentConfig| -> Result<(StudentConfig, usize)> {
        let mut best: Option<(StudentConfig, usize)> = None;
        for h in 1..=2048 {
            let cfg = make(h);
            let Ok(n) = cfg.param_count(teacher) else {
                continue;
            };
            let better = best
                .as_ref()
                .is_none_or(|(_, m)| (n as f64 - target).abs() < (*m as f64 - target).abs());
            if better {
                best = Some((cfg, n));
            }
            if n as f64 > target * (1.0 + tolerance) {
                break;
            }
        }
        best.ok_or_else(|| Error::CapacityMismatch("no admissible width".into()))
    };
    let wide = search(&|h| StudentConfig {
        variant: Variant::WideFlow,
        inner_width: wide_width,
        hidden: h,
        mix_shift: false,
        ..flow_shaped.clone()
    })?;
    let ff = search(&|w| StudentConfig {
        variant: Variant::FeedForward,
        inner_width: w,
        blocks: feed_forward_blocks,
        mix_shift: false,
        ..flow_shaped.clone()
    })?;
    let counts = [target as usize, wide.1, ff.1];
    if counts
        .iter()
        .any(|&n| (n as f64 - target).abs() > tolerance * target)
    {
        return Err(Error::CapacityMismatch(format!(
            "parameter counts {counts:?} are not within {:.0}% of each other",
            tolerance * 100.0
        )));
    }
    Ok([flow_shaped.clone(), wide.0, ff.0])
}
