//! Conditional Glow/WaveGlow-style flow teacher.
//!
//! Data direction (`x → z`): squeeze the waveform into `g` channels, then per
//! step apply actnorm `y = s ⊙ x + b`, an invertible 1×1 convolution and an
//! affine coupling whose lower `⌈C/2⌉` channels condition the upper ones.
//! Optionally, the first channels of the activation are emitted into `z`
//! every few steps. Sampling runs the same steps backwards.

use rand::{Rng, SeedableRng};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Eager, Graph, Parametric};
use crate::kernels::{self, logabsdet_inverse};
use crate::nn::{gaussian, random_orthogonal, WaveNet, WaveNetSpec};
use crate::params::{ParamId, ParamStore};
use crate::tensor::{Real, Tensor};

pub(crate) const MAX_WIDTH: usize = 8192;
pub(crate) const MAX_DEPTH: usize = 1024;
/// Dilations double per layer.
pub(crate) const MAX_LAYERS: usize = 24;
pub(crate) const MAX_KERNEL: usize = 63;

/// Emit `channels` latent channels after every `every`-th step.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EarlyOutput {
    pub every: usize,
    pub channels: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FlowConfig {
    pub squeeze: usize,
    pub steps: usize,
    pub coupling_layers: usize,
    pub coupling_hidden: usize,
    pub kernel: usize,
    pub weight_norm: bool,
    pub early_output: Option<EarlyOutput>,
    pub sigma: f64,
    pub cond_channels: usize,
    /// Waveform samples per conditioning frame.
    pub cond_hop: usize,
}

impl Default for FlowConfig {
    fn default() -> Self {
        FlowConfig {
            squeeze: 8,
            steps: 8,
            coupling_layers: 4,
            coupling_hidden: 64,
            kernel: 3,
            weight_norm: true,
            early_output: None,
            sigma: 1.0,
            cond_channels: 2,
            cond_hop: 64,
        }
    }
}

impl FlowConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::config(m));
        let limits = [
            ("squeeze", self.squeeze, MAX_WIDTH),
            ("steps", self.steps, MAX_DEPTH),
            ("coupling_layers", self.coupling_layers, MAX_LAYERS),
            ("coupling_hidden", self.coupling_hidden, MAX_WIDTH),
            ("kernel", self.kernel, MAX_KERNEL),
            ("cond_channels", self.cond_channels, MAX_WIDTH),
            ("cond_hop", self.cond_hop, 1 << 20),
        ];
        if let Some((name, v, max)) = limits.iter().find(|(_, v, max)| v > max) {
            return bad(format!("{name} = {v} exceeds the supported maximum {max}"));
        }
        if self.squeeze < 2 {
            return bad(format!(
                "squeeze group {} leaves nothing to couple",
                self.squeeze
            ));
        }
        if self.steps == 0 || self.coupling_layers == 0 || self.coupling_hidden == 0 {
            return bad("flow needs at least one step, layer and hidden channel".into());
        }
        if self.kernel % 2 == 0 {
            return bad(format!("coupling kernel {} must be odd", self.kernel));
        }
        if !(self.sigma > 0.0 && self.sigma.is_finite()) {
            return bad(format!("sigma must be positive, got {}", self.sigma));
        }
        if self.cond_channels == 0 {
            return bad("conditioning needs at least one channel".into());
        }
        if self.cond_hop == 0 || self.cond_hop % self.squeeze != 0 {
            return bad(format!(
                "conditioning hop {} must be a multiple of the squeeze group {}",
                self.cond_hop, self.squeeze
            ));
        }
        if let Some(e) = self.early_output {
            if e.every == 0 || e.channels == 0 {
                return bad("early output needs a positive period and channel count".into());
            }
        }
        let widths = self.step_channels();
        if widths.iter().any(|&c| c < 2) {
            return bad(format!(
                "early output leaves fewer than 2 channels: {widths:?}"
            ));
        }
        if self.latent_pieces().last().is_some_and(|&r| r == 0) {
            return bad("early output consumes every channel".into());
        }
        Ok(())
    }

    fn emits_after(&self, step: usize) -> Option<usize> {
        let e = self.early_output?;
        ((step + 1) % e.every == 0).then_some(e.channels)
    }

    /// Channel count seen by each step.
    pub fn step_channels(&self) -> Vec<usize> {
        let mut c = self.squeeze;
        (0..self.steps)
            .map(|k| {
                let here = c;
                if let Some(n) = self.emits_after(k) {
                    c = c.saturating_sub(n);
                }
                here
            })
            .collect()
    }

    /// Channel sizes of the pieces of `z`, in emission order, ending with
    /// the output of the last step.
    pub fn latent_pieces(&self) -> Vec<usize> {
        let mut c = self.squeeze;
        let mut pieces = Vec::new();
        for k in 0..self.steps {
            if let Some(n) = self.emits_after(k) {
                pieces.push(n.min(c));
                c = c.saturating_sub(n);
            }
        }
        pieces.push(c);
        pieces
    }

    pub fn coupling_spec(&self, channels: usize) -> WaveNetSpec {
        let lower = channels.div_ceil(2);
        WaveNetSpec {
            in_channels: Some(lower),
            hidden: self.coupling_hidden,
            layers: self.coupling_layers,
            kernel: self.kernel,
            cond_channels: self.cond_channels,
            out_channels: 2 * (channels - lower),
            weight_norm: self.weight_norm,
            zero_end: true,
        }
    }

    /// Trainable scalars of a freshly built (unfused) teacher.
    pub fn param_count(&self) -> usize {
        self.step_channels()
            .iter()
            .map(|&c| 2 * c + c * c + self.coupling_spec(c).count())
            .sum()
    }

    /// Squeezed length for a waveform of `len` samples.
    pub fn latent_len(&self, len: usize) -> Result<usize> {
        if len == 0 || len % self.cond_hop != 0 {
            return Err(Error::invalid(format!(
                "waveform length {len} is not a positive multiple of the frame hop {}",
                self.cond_hop
            )));
        }
        Ok(len / self.squeeze)
    }
}

/// Structural state that survives a checkpoint round trip.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FlowLayout {
    pub initialized: bool,
    pub weight_norm_folded: bool,
    pub steps: Vec<StepLayout>,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StepLayout {
    pub actnorm_fused: bool,
    pub inverse_cached: bool,
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct ActNorm {
    pub scale: ParamId,
    pub bias: ParamId,
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct Mix {
    /// `[C, C]`.
    pub weight: ParamId,
    /// Present once an actnorm has been folded in.
    pub bias: Option<ParamId>,
    pub inverse: Option<ParamId>,
}

#[derive(Clone, Debug)]
pub(crate) struct Step {
    pub channels: usize,
    pub actnorm: Option<ActNorm>,
    pub mix: Mix,
    pub coupling: WaveNet,
}

impl Step {
    fn split(&self) -> usize {
        self.channels.div_ceil(2)
    }
}

/// Tensors that undo the linear part of a step: `x = inv_s ⊙ (A (y + pre) + post)`.
/// Any missing piece is the identity.
pub(crate) struct InverseLinear<V> {
    pub pre_shift: Option<V>,
    pub matrix: V,
    pub post_shift: Option<V>,
    pub post_scale: Option<V>,
}

/// Inverse of an affine coupling without the Jacobian bookkeeping.
pub(crate) fn coupling_inverse<F: Real, G: Graph<F>>(
    g: &mut G,
    store: &ParamStore<F>,
    net: &WaveNet,
    split: usize,
    y: &G::V,
    cond: &G::V,
) -> Result<G::V> {
    let (ya, yb) = g.split_channels(y, split)?;
    let h = net.forward(g, store, &ya, cond)?;
    let nb = g.value(&yb).dim(1);
    let (log_s, t) = g.split_channels(&h, nb)?;
    let neg = g.scale(&log_s, -F::one())?;
    let inv_s = g.exp(&neg)?;
    let shifted = g.sub(&yb, &t)?;
    let xb = g.mul(&shifted, &inv_s)?;
    g.concat_channels(&ya, &xb)
}

pub(crate) fn linear_inverse<F: Real, G: Graph<F>>(
    g: &mut G,
    parts: &InverseLinear<G::V>,
    y: &G::V,
) -> Result<G::V> {
    let mut y = y.clone();
    if let Some(p) = &parts.pre_shift {
        y = g.add_channel(&y, p)?;
    }
    let c = g.value(&parts.matrix).dim(0);
    let m = g.reshape(&parts.matrix, &[c, c, 1])?;
    y = g.conv1d(&y, &m, None, 1)?;
    if let Some(p) = &parts.post_shift {
        y = g.add_channel(&y, p)?;
    }
    if let Some(p) = &parts.post_scale {
        y = g.mul_channel(&y, p)?;
    }
    Ok(y)
}

/// Nearest-frame upsampling of `[B, C, frames]` conditioning to `[B, C, frames·r]`.
pub fn upsample_condition<F: Real, G: Graph<F>>(g: &mut G, c: &G::V, r: usize) -> Result<G::V> {
    if r == 1 {
        return Ok(c.clone());
    }
    let up = kernels::repeat_time(g.value(c), r)?;
    Ok(g.constant(up))
}

/// Anything mapping `(z, c)` to a waveform `[B, T]`.
pub trait Synthesizer<F: Real> {
    fn synthesize<G: Graph<F>>(&self, g: &mut G, z: &G::V, c: &G::V) -> Result<G::V>;
    /// Shape of `z` for `batch` waveforms of `len` samples.
    fn latent_shape(&self, batch: usize, len: usize) -> Result<[usize; 3]>;
    fn store(&self) -> &ParamStore<F>;
    /// Waveform samples per conditioning frame.
    fn frame_hop(&self) -> usize;
    fn cond_channels(&self) -> usize;

    /// Eager convenience wrapper.
    fn sample(&self, z: &Tensor<F>, c: &Tensor<F>) -> Result<Tensor<F>> {
        let mut g = Eager::new();
        let zv = g.constant(z.clone());
        let cv = g.constant(c.clone());
        let x = self.synthesize(&mut g, &zv, &cv)?;
        Ok(g.value(&x).clone())
    }
}

/// Draw `z ~ N(0, σ² I)`.
pub fn sample_latent<F: Real, R: Rng>(rng: &mut R, shape: [usize; 3], sigma: f64) -> Tensor<F> {
    let n = shape.iter().product();
    Tensor::from_parts(shape.to_vec(), gaussian(rng, n, sigma))
}

#[derive(Clone, Debug)]
pub struct FlowModel<F: Real> {
    pub(crate) cfg: FlowConfig,
    pub(crate) layout: FlowLayout,
    pub(crate) steps: Vec<Step>,
    pub(crate) store: ParamStore<F>,
}

impl<F: Real> FlowModel<F> {
    /// Random orthogonal mixes, unit actnorms and zero coupling outputs.
    /// Actnorm still awaits data-dependent initialization.
    pub fn new<R: Rng>(cfg: FlowConfig, rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        let mut store = ParamStore::new();
        let mut steps = Vec::with_capacity(cfg.steps);
        for (k, c) in cfg.step_channels().into_iter().enumerate() {
            let scale = store.add(
                format!("steps.{k}.actnorm.scale"),
                Tensor::full([c], F::one()),
            );
            let bias = store.add(format!("steps.{k}.actnorm.bias"), Tensor::zeros([c]));
            let weight = store.add(format!("steps.{k}.mix.weight"), random_orthogonal(c, rng));
            let coupling = WaveNet::new(
                &mut store,
                &format!("steps.{k}.coupling"),
                cfg.coupling_spec(c),
                rng,
            )?;
            steps.push(Step {
                channels: c,
                actnorm: Some(ActNorm { scale, bias }),
                mix: Mix {
                    weight,
                    bias: None,
                    inverse: None,
                },
                coupling,
            });
        }
        let layout = FlowLayout {
            initialized: false,
            weight_norm_folded: false,
            steps: vec![StepLayout::default(); cfg.steps],
        };
        Ok(FlowModel {
            cfg,
            layout,
            steps,
            store,
        })
    }

    /// Every step at the identity: `z = squeeze(x)`, zero log-determinant.
    pub fn identity(cfg: FlowConfig) -> Result<Self> {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
        let mut m = Self::new(cfg, &mut rng)?;
        for s in &m.steps {
            m.store.set(s.mix.weight, Tensor::eye(s.channels))?;
        }
        m.layout.initialized = true;
        Ok(m)
    }

    pub fn config(&self) -> &FlowConfig {
        &self.cfg
    }

    pub fn layout(&self) -> &FlowLayout {
        &self.layout
    }

    pub fn store_mut(&mut self) -> &mut ParamStore<F> {
        &mut self.store
    }

    pub fn param_count(&self) -> usize {
        self.store.count()
    }

    pub fn num_steps(&self) -> usize {
        self.steps.len()
    }

    /// Mark actnorm as initialized without looking at data (parameters were
    /// set by other means, e.g. loaded or assigned in a test).
    pub fn mark_initialized(&mut self) {
        self.layout.initialized = true;
    }

    pub fn cast<G: Real>(&self) -> FlowModel<G> {
        FlowModel {
            cfg: self.cfg.clone(),
            layout: self.layout.clone(),
            steps: self.steps.clone(),
            store: self.store.cast(),
        }
    }

    fn ready(&self) -> Result<()> {
        if self.layout.initialized {
            Ok(())
        } else {
            Err(Error::Uninitialized)
        }
    }

    fn cond_rate(&self) -> usize {
        self.cfg.cond_hop / self.cfg.squeeze
    }

    fn check_condition(&self, c: &Tensor<F>, batch: usize, latent_len: usize) -> Result<()> {
        let want = [batch, self.cfg.cond_channels, latent_len / self.cond_rate()];
        if c.shape() != want {
            return Err(Error::shape("flow condition", &want, c.shape()));
        }
        Ok(())
    }

    /// One step in the data direction on squeezed activations, with the
    /// condition already upsampled. Returns `(y, logdet)`.
    pub fn step_forward<G: Graph<F>>(
        &self,
        g: &mut G,
        k: usize,
        x: &G::V,
        cond: &G::V,
    ) -> Result<(G::V, G::V)> {
        let step = self
            .steps
            .get(k)
            .ok_or_else(|| Error::invalid(format!("no step {k}")))?;
        let store = &self.store;
        let (b, c, t) = g.value(x).bct("flow step")?;
        if c != step.channels {
            return Err(Error::shape(
                "flow step",
                &[b, step.channels, t],
                &[b, c, t],
            ));
        }
        let bt = F::of((b * t) as f64);
        let mut y = x.clone();
        let mut terms = Vec::with_capacity(3);
        if let Some(an) = step.actnorm {
            let s = g.param(store, an.scale);
            let bias = g.param(store, an.bias);
            y = g.mul_channel(&y, &s)?;
            y = g.add_channel(&y, &bias)?;
            let a = g.abs(&s)?;
            let l = g.log(&a)?;
            let l = g.sum(&l)?;
            terms.push(g.scale(&l, bt)?);
        }
        let w = g.param(store, step.mix.weight);
        let w3 = g.reshape(&w, &[c, c, 1])?;
        let mb = step.mix.bias.map(|id| g.param(store, id));
        y = g.conv1d(&y, &w3, mb.as_ref(), 1)?;
        let lad = g.logabsdet(&w)?;
        terms.push(g.scale(&lad, bt)?);

        let (ya, yb) = g.split_channels(&y, step.split())?;
        let h = step.coupling.forward(g, store, &ya, cond)?;
        let (log_s, shift) = g.split_channels(&h, c - step.split())?;
        let e = g.exp(&log_s)?;
        let scaled = g.mul(&e, &yb)?;
        let yb = g.add(&scaled, &shift)?;
        terms.push(g.sum(&log_s)?);
        let y = g.concat_channels(&ya, &yb)?;

        let mut ld = terms[0].clone();
        for t in &terms[1..] {
            ld = g.add(&ld, t)?;
        }
        Ok((y, ld))
    }

    pub(crate) fn inverse_linear<G: Graph<F>>(
        &self,
        g: &mut G,
        k: usize,
    ) -> Result<InverseLinear<G::V>> {
        let step = &self.steps[k];
        let store = &self.store;
        let matrix = match step.mix.inverse {
            Some(id) => g.param(store, id),
            None => g.constant(logabsdet_inverse(store.get(step.mix.weight))?.1),
        };
        let pre_shift = step
            .mix
            .bias
            .map(|id| g.constant(store.get(id).map(|v| -v)));
        let (post_shift, post_scale) = match step.actnorm {
            Some(an) => (
                Some(g.constant(store.get(an.bias).map(|v| -v))),
                Some(g.constant(store.get(an.scale).map(|v| F::one() / v))),
            ),
            None => (None, None),
        };
        Ok(InverseLinear {
            pre_shift,
            matrix,
            post_shift,
            post_scale,
        })
    }

    /// Exact inverse of [`FlowModel::step_forward`].
    pub fn step_inverse<G: Graph<F>>(
        &self,
        g: &mut G,
        k: usize,
        y: &G::V,
        cond: &G::V,
    ) -> Result<G::V> {
        let step = self
            .steps
            .get(k)
            .ok_or_else(|| Error::invalid(format!("no step {k}")))?;
        let (b, c, t) = g.value(y).bct("flow step inverse")?;
        if c != step.channels {
            return Err(Error::shape(
                "flow step inverse",
                &[b, step.channels, t],
                &[b, c, t],
            ));
        }
        let x = coupling_inverse(g, &self.store, &step.coupling, step.split(), y, cond)?;
        let parts = self.inverse_linear(g, k)?;
        linear_inverse(g, &parts, &x)
    }

    /// `x [B, T]`, `c [B, cond, frames]` to `(z [B, g, T/g], logdet)`.
    pub fn forward<G: Graph<F>>(&self, g: &mut G, x: &G::V, c: &G::V) -> Result<(G::V, G::V)> {
        self.ready()?;
        let xs = g.value(x).shape().to_vec();
        let [b, len] = xs[..] else {
            return Err(Error::shape("flow forward", &[0, 0], &xs));
        };
        let tl = self.cfg.latent_len(len)?;
        self.check_condition(g.value(c), b, tl)?;
        let cond = upsample_condition(g, c, self.cond_rate())?;
        let x3 = g.reshape(x, &[b, 1, len])?;
        let mut h = g.squeeze(&x3, self.cfg.squeeze)?;
        let mut pieces = Vec::new();
        let mut logdet: Option<G::V> = None;
        for k in 0..self.steps.len() {
            let (y, ld) = self.step_forward(g, k, &h, &cond)?;
            logdet = Some(match logdet {
                Some(acc) => g.add(&acc, &ld)?,
                None => ld,
            });
            h = y;
            if let Some(n) = self.cfg.emits_after(k) {
                let (e, rest) = g.split_channels(&h, n)?;
                pieces.push(e);
                h = rest;
            }
        }
        let mut z = h;
        for p in pieces.iter().rev() {
            z = g.concat_channels(p, &z)?;
        }
        Ok((z, logdet.expect("at least one step")))
    }

    /// Inverse pass: `z [B, g, T/g]` and `c` to `x [B, T]`. Early-output
    /// channels re-enter before the step that emitted them.
    pub fn sample_graph<G: Graph<F>>(&self, g: &mut G, z: &G::V, c: &G::V) -> Result<G::V> {
        self.ready()?;
        let (b, ch, tl) = g.value(z).bct("flow sample")?;
        if ch != self.cfg.squeeze {
            return Err(Error::shape(
                "flow sample",
                &[b, self.cfg.squeeze, tl],
                g.value(z).shape(),
            ));
        }
        if tl == 0 || (tl * self.cfg.squeeze) % self.cfg.cond_hop != 0 {
            return Err(Error::invalid(format!(
                "latent length {tl} does not cover whole conditioning frames"
            )));
        }
        self.check_condition(g.value(c), b, tl)?;
        let cond = upsample_condition(g, c, self.cond_rate())?;
        let sizes = self.cfg.latent_pieces();
        let mut pieces = Vec::with_capacity(sizes.len());
        let mut rest = z.clone();
        for &n in &sizes[..sizes.len() - 1] {
            let (p, r) = g.split_channels(&rest, n)?;
            pieces.push(p);
            rest = r;
        }
        let mut h = rest;
        for k in (0..self.steps.len()).rev() {
            if self.cfg.emits_after(k).is_some() {
                let p = pieces.pop().expect("piece per emission");
                h = g.concat_channels(&p, &h)?;
            }
            h = self.step_inverse(g, k, &h, &cond)?;
        }
        let x = g.unsqueeze(&h, self.cfg.squeeze)?;
        g.reshape(&x, &[b, tl * self.cfg.squeeze])
    }

    /// Gaussian negative log-likelihood per dimension, in nats.
    pub fn nll<G: Graph<F>>(&self, g: &mut G, x: &G::V, c: &G::V) -> Result<G::V> {
        let d = g.value(x).len() as f64;
        let sigma = self.cfg.sigma;
        let (z, logdet) = self.forward(g, x, c)?;
        let sq = g.mul(&z, &z)?;
        let sq = g.sum(&sq)?;
        let energy = g.scale(&sq, F::of(1.0 / (2.0 * sigma * sigma)))?;
        let e = g.sub(&energy, &logdet)?;
        let norm = d * (sigma * (2.0 * std::f64::consts::PI).sqrt()).ln();
        let total = g.add_scalar(&e, F::of(norm))?;
        g.scale(&total, F::of(1.0 / d))
    }

    /// Eager `x → (z, logdet)`.
    pub fn encode(&self, x: &Tensor<F>, c: &Tensor<F>) -> Result<(Tensor<F>, F)> {
        let mut g = Eager::new();
        let xv = g.constant(x.clone());
        let cv = g.constant(c.clone());
        let (z, ld) = self.forward(&mut g, &xv, &cv)?;
        Ok((z.as_ref().clone(), ld.item()))
    }

    pub fn nll_value(&self, x: &Tensor<F>, c: &Tensor<F>) -> Result<f64> {
        let mut g = Eager::new();
        let xv = g.constant(x.clone());
        let cv = g.constant(c.clone());
        Ok(self.nll(&mut g, &xv, &cv)?.item().f64())
    }

    /// Data-dependent actnorm initialization: each step's scale and bias are
    /// set so its output has zero mean and unit variance per channel on
    /// `x [B, T]`, processing steps in order.
    pub fn actnorm_init(&mut self, x: &Tensor<F>, c: &Tensor<F>) -> Result<()> {
        const MIN_BATCH: usize = 16;
        let xs = x.shape().to_vec();
        let [b, len] = xs[..] else {
            return Err(Error::shape("actnorm init", &[MIN_BATCH, 0], &xs));
        };
        if b < MIN_BATCH {
            return Err(Error::invalid(format!(
                "actnorm init needs a batch of at least {MIN_BATCH}, got {b}"
            )));
        }
        if self.steps.iter().any(|s| s.actnorm.is_none()) {
            return Err(Error::invalid(
                "actnorm layers were fused into the mixing convolutions",
            ));
        }
        let tl = self.cfg.latent_len(len)?;
        self.check_condition(c, b, tl)?;
        let cond_t = kernels::repeat_time(c, self.cond_rate())?;
        let mut h = Tensor::from_parts(
            vec![b, self.cfg.squeeze, tl],
            kernels::squeeze(x.data(), b, 1, len, self.cfg.squeeze),
        );
        for k in 0..self.steps.len() {
            let an = self.steps[k].actnorm.expect("checked above");
            let ch = self.steps[k].channels;
            let mut scale = Vec::with_capacity(ch);
            let mut bias = Vec::with_capacity(ch);
            for c in 0..ch {
                let vals = (0..b).flat_map(|bi| {
                    let o = (bi * ch + c) * tl;
                    h.data()[o..o + tl].iter().map(|v| v.f64())
                });
                let n = (b * tl) as f64;
                let mean = vals.clone().sum::<f64>() / n;
                let var = vals.map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
                if !(var > 1e-12) {
                    return Err(Error::Degenerate(format!(
                        "actnorm init: channel {c} of step {k} has zero variance"
                    )));
                }
                let sd = var.sqrt();
                scale.push(F::of(1.0 / sd));
                bias.push(F::of(-mean / sd));
            }
            self.store
                .set(an.scale, Tensor::from_parts(vec![ch], scale))?;
            self.store
                .set(an.bias, Tensor::from_parts(vec![ch], bias))?;
            let mut g = Eager::new();
            let hv = g.constant(h);
            let cv = g.constant(cond_t.clone());
            let (y, _) = self.step_forward(&mut g, k, &hv, &cv)?;
            h = y.as_ref().clone();
            if let Some(n) = self.cfg.emits_after(k) {
                h = h.channels(n, ch)?;
            }
        }
        self.layout.initialized = true;
        Ok(())
    }
}

impl<F: Real> Parametric<F> for FlowModel<F> {
    fn params(&self) -> &ParamStore<F> {
        &self.store
    }

    fn params_mut(&mut self) -> &mut ParamStore<F> {
        &mut self.store
    }
}

impl<F: Real> Synthesizer<F> for FlowModel<F> {
    fn synthesize<G: Graph<F>>(&self, g: &mut G, z: &G::V, c: &G::V) -> Result<G::V> {
        self.sample_graph(g, z, c)
    }

    fn latent_shape(&self, batch: usize, len: usize) -> Result<[usize; 3]> {
        Ok([batch, self.cfg.squeeze, self.cfg.latent_len(len)?])
    }

    fn store(&self) -> &ParamStore<F> {
        &self.store
    }

    fn frame_hop(&self) -> usize {
        self.cfg.cond_hop
    }

    fn cond_channels(&self) -> usize {
        self.cfg.cond_channels
    }
}
