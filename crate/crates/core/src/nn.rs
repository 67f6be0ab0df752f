//! Convolution layers and the gated WaveNet stack used as coupling
//! conditioner, flow-student body and feed-forward student block.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{eval, Graph, Op};
use crate::params::{ParamId, ParamStore};
use crate::tensor::{Real, Tensor};

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Init {
    /// `U(−1/√fan_in, 1/√fan_in)`.
    FanIn,
    /// Fan-in uniform scaled by a constant.
    Scaled(f64),
    Zeros,
    /// Identity on the first `min(cin, cout)` channels (centre tap).
    Identity,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ConvWeight {
    Plain(ParamId),
    /// `w = g ⊙ v / ‖v‖`, norm taken per output channel.
    WeightNorm {
        v: ParamId,
        g: ParamId,
    },
}

#[derive(Clone, Debug)]
pub struct Conv1d {
    pub cin: usize,
    pub cout: usize,
    pub kernel: usize,
    pub dilation: usize,
    pub name: String,
    pub weight: ConvWeight,
    pub bias: Option<ParamId>,
}

#[derive(Clone, Copy, Debug)]
pub struct ConvSpec {
    pub cin: usize,
    pub cout: usize,
    pub kernel: usize,
    pub dilation: usize,
    pub bias: bool,
    pub weight_norm: bool,
    pub init: Init,
}

impl ConvSpec {
    pub fn pointwise(cin: usize, cout: usize) -> Self {
        ConvSpec {
            cin,
            cout,
            kernel: 1,
            dilation: 1,
            bias: true,
            weight_norm: false,
            init: Init::FanIn,
        }
    }

    pub fn init(mut self, init: Init) -> Self {
        self.init = init;
        self
    }

    pub fn weight_norm(mut self, on: bool) -> Self {
        self.weight_norm = on;
        self
    }

    pub fn bias(mut self, on: bool) -> Self {
        self.bias = on;
        self
    }

    pub fn count(&self) -> usize {
        let w = self.cout * self.cin * self.kernel;
        let g = if self.weight_norm { self.cout } else { 0 };
        let b = if self.bias { self.cout } else { 0 };
        w + g + b
    }
}

fn uniform<F: Real, R: Rng>(rng: &mut R, n: usize, bound: f64) -> Vec<F> {
    (0..n)
        .map(|_| F::of(rng.gen_range(-1.0..1.0) * bound))
        .collect()
}

pub(crate) fn gaussian<F: Real, R: Rng>(rng: &mut R, n: usize, std: f64) -> Vec<F> {
    (0..n)
        .map(|_| {
            let v: f64 = StandardNormal.sample(rng);
            F::of(v * std)
        })
        .collect()
}

impl Conv1d {
    pub fn new<F: Real, R: Rng>(
        store: &mut ParamStore<F>,
        name: &str,
        spec: ConvSpec,
        rng: &mut R,
    ) -> Self {
        let ConvSpec {
            cin,
            cout,
            kernel,
            dilation,
            ..
        } = spec;
        let fan_in = (cin * kernel) as f64;
        let bound = 1.0 / fan_in.sqrt();
        let n = cout * cin * kernel;
        let w: Vec<F> = match spec.init {
            Init::FanIn => uniform(rng, n, bound),
            Init::Scaled(k) => uniform(rng, n, bound * k),
            Init::Zeros => vec![F::zero(); n],
            Init::Identity => {
                let mut w = vec![F::zero(); n];
                for c in 0..cin.min(cout) {
                    w[(c * cin + c) * kernel + kernel / 2] = F::one();
                }
                w
            }
        };
        let w = Tensor::from_parts(vec![cout, cin, kernel], w);
        let weight = if spec.weight_norm {
            let norms: Vec<F> = w
                .data()
                .chunks_exact(cin * kernel)
                .map(|r| {
                    let n = r.iter().map(|&v| v * v).sum::<F>().sqrt();
                    // A zero row (zero init) keeps a unit direction and zero gain.
                    if n > F::zero() {
                        n
                    } else {
                        F::zero()
                    }
                })
                .collect();
            let mut v = w.clone();
            for (row, n) in v.data_mut().chunks_exact_mut(cin * kernel).zip(&norms) {
                if *n == F::zero() {
                    row.fill(F::one());
                }
            }
            let vid = store.add(format!("{name}.weight_v"), v);
            let gid = store.add(
                format!("{name}.weight_g"),
                Tensor::from_parts(vec![cout], norms),
            );
            ConvWeight::WeightNorm { v: vid, g: gid }
        } else {
            ConvWeight::Plain(store.add(format!("{name}.weight"), w))
        };
        let bias = spec.bias.then(|| {
            let b = match spec.init {
                Init::FanIn | Init::Scaled(_) => uniform(rng, cout, bound),
                Init::Zeros | Init::Identity => vec![F::zero(); cout],
            };
            store.add(format!("{name}.bias"), Tensor::from_parts(vec![cout], b))
        });
        Conv1d {
            cin,
            cout,
            kernel,
            dilation,
            name: name.to_string(),
            weight,
            bias,
        }
    }

    pub fn weight_handle<F: Real, G: Graph<F>>(
        &self,
        g: &mut G,
        store: &ParamStore<F>,
    ) -> Result<G::V> {
        match self.weight {
            ConvWeight::Plain(w) => Ok(g.param(store, w)),
            ConvWeight::WeightNorm { v, g: gain } => {
                let v = g.param(store, v);
                let gain = g.param(store, gain);
                g.weight_norm(&v, &gain)
            }
        }
    }

    pub fn forward<F: Real, G: Graph<F>>(
        &self,
        g: &mut G,
        store: &ParamStore<F>,
        x: &G::V,
    ) -> Result<G::V> {
        let w = self.weight_handle(g, store)?;
        let b = self.bias.map(|b| g.param(store, b));
        g.conv1d(x, &w, b.as_ref(), self.dilation)
    }

    /// The weight actually applied, with weight norm evaluated.
    pub fn effective_weight<F: Real>(&self, store: &ParamStore<F>) -> Result<Tensor<F>> {
        match self.weight {
            ConvWeight::Plain(w) => Ok(store.get(w).clone()),
            ConvWeight::WeightNorm { v, g } => {
                Ok(eval(&Op::WeightNorm, &[store.get(v), store.get(g)])?.0)
            }
        }
    }

    pub fn is_weight_normed(&self) -> bool {
        matches!(self.weight, ConvWeight::WeightNorm { .. })
    }

    /// Replace a weight-norm parameterization with the plain weight it
    /// evaluates to. Returns whether anything changed.
    pub fn fold_weight_norm<F: Real>(&mut self, store: &mut ParamStore<F>) -> Result<bool> {
        let ConvWeight::WeightNorm { v, g } = self.weight else {
            return Ok(false);
        };
        let w = self.effective_weight(store)?;
        store.retire(v);
        store.retire(g);
        self.weight = ConvWeight::Plain(store.add(format!("{}.weight", self.name), w));
        Ok(true)
    }

    /// Copy this layer's tensors into `to`, renaming the `from_prefix` part
    /// of every name to `to_prefix`.
    pub fn transplant<F: Real>(
        &self,
        from: &ParamStore<F>,
        to: &mut ParamStore<F>,
        from_prefix: &str,
        to_prefix: &str,
    ) -> Conv1d {
        let name = self.name.replacen(from_prefix, to_prefix, 1);
        let mut copy = |id: ParamId| {
            let n = from.name(id).replacen(from_prefix, to_prefix, 1);
            to.add(n, from.get(id).clone())
        };
        let weight = match self.weight {
            ConvWeight::Plain(w) => ConvWeight::Plain(copy(w)),
            ConvWeight::WeightNorm { v, g } => ConvWeight::WeightNorm {
                v: copy(v),
                g: copy(g),
            },
        };
        let bias = self.bias.map(copy);
        Conv1d {
            name,
            weight,
            bias,
            ..self.clone()
        }
    }

    pub fn param_count<F: Real>(&self, store: &ParamStore<F>) -> usize {
        let w = match self.weight {
            ConvWeight::Plain(w) => store.get(w).len(),
            ConvWeight::WeightNorm { v, g } => store.get(v).len() + store.get(g).len(),
        };
        w + self.bias.map_or(0, |b| store.get(b).len())
    }
}

/// Shape of a gated residual stack.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WaveNetSpec {
    /// Input channels; `None` when the input already has `hidden` channels.
    pub in_channels: Option<usize>,
    pub hidden: usize,
    pub layers: usize,
    pub kernel: usize,
    pub cond_channels: usize,
    pub out_channels: usize,
    pub weight_norm: bool,
    /// Zero-initialized output projection (identity coupling at init).
    pub zero_end: bool,
}

impl WaveNetSpec {
    /// Trainable scalars of a stack built from this spec.
    pub fn count(&self) -> usize {
        let h = self.hidden;
        let wn = self.weight_norm;
        let mut n = 0;
        if let Some(cin) = self.in_channels {
            n += ConvSpec::pointwise(cin, h).weight_norm(wn).count();
        }
        for i in 0..self.layers {
            let last = i + 1 == self.layers;
            n += ConvSpec {
                cin: h,
                cout: 2 * h,
                kernel: self.kernel,
                dilation: 1,
                bias: true,
                weight_norm: wn,
                init: Init::FanIn,
            }
            .count();
            n += ConvSpec::pointwise(self.cond_channels, 2 * h)
                .weight_norm(wn)
                .count();
            n += ConvSpec::pointwise(h, if last { h } else { 2 * h })
                .weight_norm(wn)
                .count();
        }
        n + ConvSpec::pointwise(h, self.out_channels).count()
    }
}

#[derive(Clone, Debug)]
struct ResidualLayer {
    dilated: Conv1d,
    cond: Conv1d,
    res_skip: Conv1d,
    last: bool,
}

/// Non-causal gated residual stack: per layer a dilated convolution plus a
/// conditioning projection feed `tanh ⊙ sigmoid`, a 1×1 convolution splits
/// the result into a residual (added back) and a skip output (summed).
#[derive(Clone, Debug)]
pub struct WaveNet {
    pub spec: WaveNetSpec,
    start: Option<Conv1d>,
    layers: Vec<ResidualLayer>,
    end: Conv1d,
}

impl WaveNet {
    pub fn new<F: Real, R: Rng>(
        store: &mut ParamStore<F>,
        name: &str,
        spec: WaveNetSpec,
        rng: &mut R,
    ) -> Result<Self> {
        if spec.hidden == 0 || spec.layers == 0 || spec.out_channels == 0 {
            return Err(Error::config(format!("degenerate WaveNet spec {spec:?}")));
        }
        if spec.kernel % 2 == 0 {
            return Err(Error::config("WaveNet kernel size must be odd"));
        }
        let h = spec.hidden;
        let wn = spec.weight_norm;
        let start = spec.in_channels.map(|cin| {
            Conv1d::new(
                store,
                &format!("{name}.start"),
                ConvSpec::pointwise(cin, h).weight_norm(wn),
                rng,
            )
        });
        let mut layers = Vec::with_capacity(spec.layers);
        for i in 0..spec.layers {
            let last = i + 1 == spec.layers;
            let dilated = Conv1d::new(
                store,
                &format!("{name}.layers.{i}.dilated"),
                ConvSpec {
                    cin: h,
                    cout: 2 * h,
                    kernel: spec.kernel,
                    dilation: 1 << i,
                    bias: true,
                    weight_norm: wn,
                    init: Init::FanIn,
                },
                rng,
            );
            let cond = Conv1d::new(
                store,
                &format!("{name}.layers.{i}.cond"),
                ConvSpec::pointwise(spec.cond_channels, 2 * h).weight_norm(wn),
                rng,
            );
            let res_skip = Conv1d::new(
                store,
                &format!("{name}.layers.{i}.res_skip"),
                ConvSpec::pointwise(h, if last { h } else { 2 * h }).weight_norm(wn),
                rng,
            );
            layers.push(ResidualLayer {
                dilated,
                cond,
                res_skip,
                last,
            });
        }
        let end = Conv1d::new(
            store,
            &format!("{name}.end"),
            ConvSpec::pointwise(h, spec.out_channels).init(if spec.zero_end {
                Init::Zeros
            } else {
                Init::FanIn
            }),
            rng,
        );
        Ok(WaveNet {
            spec,
            start,
            layers,
            end,
        })
    }

    pub fn forward<F: Real, G: Graph<F>>(
        &self,
        g: &mut G,
        store: &ParamStore<F>,
        x: &G::V,
        cond: &G::V,
    ) -> Result<G::V> {
        let h = self.spec.hidden;
        let mut audio = match &self.start {
            Some(s) => s.forward(g, store, x)?,
            None => x.clone(),
        };
        let mut skip: Option<G::V> = None;
        for layer in &self.layers {
            let a = layer.dilated.forward(g, store, &audio)?;
            let c = layer.cond.forward(g, store, cond)?;
            let pre = g.add(&a, &c)?;
            let (pt, ps) = g.split_channels(&pre, h)?;
            let t = g.tanh(&pt)?;
            let s = g.sigmoid(&ps)?;
            let acts = g.mul(&t, &s)?;
            let rs = layer.res_skip.forward(g, store, &acts)?;
            let skip_part = if layer.last {
                rs
            } else {
                let (res, sk) = g.split_channels(&rs, h)?;
                audio = g.add(&audio, &res)?;
                sk
            };
            skip = Some(match skip {
                Some(acc) => g.add(&acc, &skip_part)?,
                None => skip_part,
            });
        }
        let skip = skip.expect("at least one layer");
        self.end.forward(g, store, &skip)
    }

    /// See [`Conv1d::transplant`].
    pub fn transplant<F: Real>(
        &self,
        from: &ParamStore<F>,
        to: &mut ParamStore<F>,
        from_prefix: &str,
        to_prefix: &str,
    ) -> WaveNet {
        let mut net = self.clone();
        for conv in net.convs_mut() {
            *conv = conv.transplant(from, to, from_prefix, to_prefix);
        }
        net
    }

    pub fn convs_mut(&mut self) -> impl Iterator<Item = &mut Conv1d> {
        let start = self.start.iter_mut();
        let layers = self
            .layers
            .iter_mut()
            .flat_map(|l| [&mut l.dilated, &mut l.cond, &mut l.res_skip]);
        start.chain(layers).chain(std::iter::once(&mut self.end))
    }

    pub fn convs(&self) -> impl Iterator<Item = &Conv1d> {
        let start = self.start.iter();
        let layers = self
            .layers
            .iter()
            .flat_map(|l| [&l.dilated, &l.cond, &l.res_skip]);
        start.chain(layers).chain(std::iter::once(&self.end))
    }

    /// Exit projection; `x̂ = 0` checks and zero-gradient audits touch it.
    pub fn end(&self) -> &Conv1d {
        &self.end
    }
}

/// Random orthogonal `n×n` matrix (QR of a Gaussian matrix, sign-fixed).
pub fn random_orthogonal<F: Real, R: Rng>(n: usize, rng: &mut R) -> Tensor<F> {
    let g: Vec<f64> = gaussian(rng, n * n, 1.0);
    let m = nalgebra::DMatrix::from_row_slice(n, n, &g);
    let qr = m.qr();
    let q = qr.q();
    let r = qr.r();
    let mut out = Vec::with_capacity(n * n);
    for i in 0..n {
        for j in 0..n {
            let sign = if r[(j, j)] < 0.0 { -1.0 } else { 1.0 };
            out.push(F::of(q[(i, j)] * sign));
        }
    }
    Tensor::from_parts(vec![n, n], out)
}
