//! Execution backends and reverse-mode differentiation.
//!
//! Model code is written once against [`Graph`]. [`Eager`] evaluates
//! primitives and forgets them; [`Tape`] records every primitive with the
//! values its adjoint needs and replays adjoints in reverse on
//! [`Tape::backward`]. Both call the same kernels, so a tape forward pass and
//! an eager forward pass produce identical bits.

use std::collections::HashMap;
use std::rc::Rc;

use rustfft::num_complex::Complex;

use crate::error::{Error, Result};
use crate::kernels::{self, ConvGeom};
use crate::params::{ParamId, ParamStore};
use crate::spectral::{stft_backward, stft_forward, StftConfig};
use crate::tensor::{Real, Tensor};

/// One differentiable primitive.
#[derive(Clone, Debug)]
pub enum Op<F> {
    Add,
    Sub,
    Mul,
    Scale(F),
    AddScalar(F),
    Exp,
    Log,
    Tanh,
    Sigmoid,
    Abs,
    Sqrt,
    ClampMin(F),
    Sum,
    Mean,
    MatMul,
    /// Inputs: `x [B,Cin,T]`, `w [Cout,Cin,K]`, optional `bias [Cout]`.
    Conv1d {
        dilation: usize,
    },
    /// Channel range of a `[B,C,T]` tensor.
    Slice {
        lo: usize,
        hi: usize,
    },
    /// Channel concatenation of two `[B,C_i,T]` tensors.
    Concat,
    /// `x [B,C,T] + p [C]` broadcast over batch and time.
    AddChannel,
    /// `x [B,C,T] ⊙ p [C]` broadcast over batch and time.
    MulChannel,
    Squeeze(usize),
    Unsqueeze(usize),
    Reshape(Vec<usize>),
    LogAbsDet,
    /// `[B, N]` waveform to `[B, frames, bins]` magnitude.
    StftMag(StftConfig),
    /// Inputs: direction `v [O, ...]`, gain `g [O]`; `w = g ⊙ v / ‖v‖` per row.
    WeightNorm,
}

impl<F> Op<F> {
    pub fn name(&self) -> &'static str {
        match self {
            Op::Add => "add",
            Op::Sub => "sub",
            Op::Mul => "mul",
            Op::Scale(_) => "scale",
            Op::AddScalar(_) => "add_scalar",
            Op::Exp => "exp",
            Op::Log => "log",
            Op::Tanh => "tanh",
            Op::Sigmoid => "sigmoid",
            Op::Abs => "abs",
            Op::Sqrt => "sqrt",
            Op::ClampMin(_) => "clamp_min",
            Op::Sum => "sum",
            Op::Mean => "mean",
            Op::MatMul => "matmul",
            Op::Conv1d { .. } => "conv1d",
            Op::Slice { .. } => "slice_channels",
            Op::Concat => "concat_channels",
            Op::AddChannel => "add_channel",
            Op::MulChannel => "mul_channel",
            Op::Squeeze(_) => "squeeze",
            Op::Unsqueeze(_) => "unsqueeze",
            Op::Reshape(_) => "reshape",
            Op::LogAbsDet => "logabsdet",
            Op::StftMag(_) => "stft_magnitude",
            Op::WeightNorm => "weight_norm",
        }
    }
}

/// Values kept for an adjoint beyond inputs and output.
#[derive(Debug, Default)]
pub(crate) enum Saved<F> {
    #[default]
    Nothing,
    Matrix(Tensor<F>),
    Spectrum(Vec<Complex<F>>),
    Norms(Vec<F>),
}

fn same_shape<F: Real>(op: &'static str, a: &Tensor<F>, b: &Tensor<F>) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::shape(op, a.shape(), b.shape()));
    }
    Ok(())
}

fn zip_map<F: Real>(a: &Tensor<F>, b: &Tensor<F>, f: impl Fn(F, F) -> F) -> Tensor<F> {
    Tensor::from_parts(
        a.shape().to_vec(),
        a.data()
            .iter()
            .zip(b.data())
            .map(|(&x, &y)| f(x, y))
            .collect(),
    )
}

#[inline]
fn sigmoid<F: Real>(x: F) -> F {
    if x >= F::zero() {
        F::one() / (F::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (F::one() + e)
    }
}

fn expect_inputs<F: Real>(
    op: &Op<F>,
    xs: &[&Tensor<F>],
    n: std::ops::RangeInclusive<usize>,
) -> Result<()> {
    if !n.contains(&xs.len()) {
        return Err(Error::invalid(format!(
            "{}: expected {n:?} inputs, got {}",
            op.name(),
            xs.len()
        )));
    }
    Ok(())
}

fn per_channel<F: Real>(
    op: &'static str,
    x: &Tensor<F>,
    p: &Tensor<F>,
) -> Result<(usize, usize, usize)> {
    let (b, c, t) = x.bct(op)?;
    if p.shape() != [c] {
        return Err(Error::shape(op, x.shape(), p.shape()));
    }
    Ok((b, c, t))
}

fn broadcast_channel<F: Real>(
    x: &Tensor<F>,
    p: &Tensor<F>,
    (b, c, t): (usize, usize, usize),
    f: impl Fn(F, F) -> F,
) -> Tensor<F> {
    let mut out = Vec::with_capacity(x.len());
    for bi in 0..b {
        for ci in 0..c {
            let pv = p.data()[ci];
            let row = &x.data()[(bi * c + ci) * t..(bi * c + ci + 1) * t];
            out.extend(row.iter().map(|&v| f(v, pv)));
        }
    }
    Tensor::from_parts(x.shape().to_vec(), out)
}

/// Forward evaluation of one primitive.
pub(crate) fn eval<F: Real>(op: &Op<F>, xs: &[&Tensor<F>]) -> Result<(Tensor<F>, Saved<F>)> {
    let unary = |f: &dyn Fn(F) -> F| -> Result<(Tensor<F>, Saved<F>)> {
        expect_inputs(op, xs, 1..=1)?;
        Ok((xs[0].map(f), Saved::Nothing))
    };
    let out = match op {
        Op::Add | Op::Sub | Op::Mul => {
            expect_inputs(op, xs, 2..=2)?;
            same_shape(op.name(), xs[0], xs[1])?;
            let t = match op {
                Op::Add => zip_map(xs[0], xs[1], |a, b| a + b),
                Op::Sub => zip_map(xs[0], xs[1], |a, b| a - b),
                _ => zip_map(xs[0], xs[1], |a, b| a * b),
            };
            (t, Saved::Nothing)
        }
        Op::Scale(k) => unary(&|v| v * *k)?,
        Op::AddScalar(k) => unary(&|v| v + *k)?,
        Op::Exp => unary(&|v| v.exp())?,
        Op::Log => unary(&|v| v.ln())?,
        Op::Tanh => unary(&|v| v.tanh())?,
        Op::Sigmoid => unary(&sigmoid)?,
        Op::Abs => unary(&|v| v.abs())?,
        Op::Sqrt => unary(&|v| v.sqrt())?,
        Op::ClampMin(f) => unary(&|v| v.max(*f))?,
        Op::Sum | Op::Mean => {
            expect_inputs(op, xs, 1..=1)?;
            let s: F = xs[0].data().iter().copied().sum();
            let v = if matches!(op, Op::Mean) {
                s / F::of(xs[0].len().max(1) as f64)
            } else {
                s
            };
            (Tensor::scalar(v), Saved::Nothing)
        }
        Op::MatMul => {
            expect_inputs(op, xs, 2..=2)?;
            let (a, b) = (xs[0], xs[1]);
            let (m, k, n) = match (a.shape(), b.shape()) {
                ([m, k], [k2, n]) if k == k2 => (*m, *k, *n),
                _ => return Err(Error::shape("matmul", a.shape(), b.shape())),
            };
            (
                Tensor::from_parts(vec![m, n], kernels::matmul(a.data(), b.data(), m, k, n)),
                Saved::Nothing,
            )
        }
        Op::Conv1d { dilation } => {
            expect_inputs(op, xs, 2..=3)?;
            let g = ConvGeom::check(xs[0], xs[1], *dilation)?;
            let bias = match xs.get(2) {
                Some(b) if b.shape() == [g.cout] => Some(b.data()),
                Some(b) => return Err(Error::shape("conv1d bias", xs[1].shape(), b.shape())),
                None => None,
            };
            let out = kernels::conv1d(xs[0].data(), xs[1].data(), bias, g);
            (
                Tensor::from_parts(vec![g.batch, g.cout, g.time], out),
                Saved::Nothing,
            )
        }
        Op::Slice { lo, hi } => {
            expect_inputs(op, xs, 1..=1)?;
            (xs[0].channels(*lo, *hi)?, Saved::Nothing)
        }
        Op::Concat => {
            expect_inputs(op, xs, 2..=2)?;
            (Tensor::cat_channels(&[xs[0], xs[1]])?, Saved::Nothing)
        }
        Op::AddChannel | Op::MulChannel => {
            expect_inputs(op, xs, 2..=2)?;
            let dims = per_channel(op.name(), xs[0], xs[1])?;
            let t = if matches!(op, Op::AddChannel) {
                broadcast_channel(xs[0], xs[1], dims, |v, p| v + p)
            } else {
                broadcast_channel(xs[0], xs[1], dims, |v, p| v * p)
            };
            (t, Saved::Nothing)
        }
        Op::Squeeze(g) => {
            expect_inputs(op, xs, 1..=1)?;
            let (b, c, t) = xs[0].bct("squeeze")?;
            if *g == 0 || t % g != 0 {
                return Err(Error::invalid(format!(
                    "squeeze: length {t} is not divisible by group {g}"
                )));
            }
            let d = kernels::squeeze(xs[0].data(), b, c, t, *g);
            (Tensor::from_parts(vec![b, c * g, t / g], d), Saved::Nothing)
        }
        Op::Unsqueeze(g) => {
            expect_inputs(op, xs, 1..=1)?;
            let (b, cg, tt) = xs[0].bct("unsqueeze")?;
            if *g == 0 || cg % g != 0 {
                return Err(Error::invalid(format!(
                    "unsqueeze: {cg} channels are not divisible by group {g}"
                )));
            }
            let d = kernels::unsqueeze(xs[0].data(), b, cg / g, tt * g, *g);
            (
                Tensor::from_parts(vec![b, cg / g, tt * g], d),
                Saved::Nothing,
            )
        }
        Op::Reshape(shape) => {
            expect_inputs(op, xs, 1..=1)?;
            (xs[0].clone().reshape(shape.clone())?, Saved::Nothing)
        }
        Op::LogAbsDet => {
            expect_inputs(op, xs, 1..=1)?;
            let (lad, inv, _) = kernels::logabsdet_inverse(xs[0])?;
            (Tensor::scalar(lad), Saved::Matrix(inv))
        }
        Op::StftMag(cfg) => {
            expect_inputs(op, xs, 1..=1)?;
            let (mag, spec) = stft_forward(xs[0], cfg)?;
            (mag, Saved::Spectrum(spec))
        }
        Op::WeightNorm => {
            expect_inputs(op, xs, 2..=2)?;
            let (v, g) = (xs[0], xs[1]);
            let rows = *v.shape().first().unwrap_or(&0);
            if g.shape() != [rows] || rows == 0 {
                return Err(Error::shape("weight_norm", v.shape(), g.shape()));
            }
            let inner = v.len() / rows;
            let mut norms = Vec::with_capacity(rows);
            let mut out = Vec::with_capacity(v.len());
            for (r, row) in v.data().chunks_exact(inner).enumerate() {
                let n = row.iter().map(|&x| x * x).sum::<F>().sqrt();
                if n <= F::zero() {
                    return Err(Error::Degenerate(format!(
                        "weight_norm: direction row {r} has zero norm"
                    )));
                }
                let k = g.data()[r] / n;
                out.extend(row.iter().map(|&x| x * k));
                norms.push(n);
            }
            (
                Tensor::from_parts(v.shape().to_vec(), out),
                Saved::Norms(norms),
            )
        }
    };
    out.0.ensure_finite(op.name())?;
    Ok(out)
}

/// Adjoint of one primitive: gradients for each input flagged in `need`.
pub(crate) fn adjoint<F: Real>(
    op: &Op<F>,
    xs: &[&Tensor<F>],
    out: &Tensor<F>,
    saved: &Saved<F>,
    g: &Tensor<F>,
    need: &[bool],
) -> Result<Vec<Option<Tensor<F>>>> {
    let want = |i: usize| need.get(i).copied().unwrap_or(false);
    let one = |t: Tensor<F>| Ok(vec![Some(t)]);
    match op {
        Op::Add => Ok(vec![want(0).then(|| g.clone()), want(1).then(|| g.clone())]),
        Op::Sub => Ok(vec![
            want(0).then(|| g.clone()),
            want(1).then(|| g.map(|v| -v)),
        ]),
        Op::Mul => Ok(vec![
            want(0).then(|| zip_map(g, xs[1], |a, b| a * b)),
            want(1).then(|| zip_map(g, xs[0], |a, b| a * b)),
        ]),
        Op::Scale(k) => one(g.scaled(*k)),
        Op::AddScalar(_) => one(g.clone()),
        Op::Exp => one(zip_map(g, out, |a, y| a * y)),
        Op::Log => one(zip_map(g, xs[0], |a, x| a / x)),
        Op::Tanh => one(zip_map(g, out, |a, y| a * (F::one() - y * y))),
        Op::Sigmoid => one(zip_map(g, out, |a, y| a * y * (F::one() - y))),
        Op::Abs => one(zip_map(g, xs[0], |a, x| {
            if x > F::zero() {
                a
            } else if x < F::zero() {
                -a
            } else {
                F::zero()
            }
        })),
        Op::Sqrt => one(zip_map(g, out, |a, y| {
            if y > F::zero() {
                a / (y + y)
            } else {
                F::zero()
            }
        })),
        Op::ClampMin(f) => one(zip_map(g, xs[0], |a, x| if x > *f { a } else { F::zero() })),
        Op::Sum => one(Tensor::full(xs[0].shape().to_vec(), g.item())),
        Op::Mean => one(Tensor::full(
            xs[0].shape().to_vec(),
            g.item() / F::of(xs[0].len().max(1) as f64),
        )),
        Op::MatMul => {
            let (a, b) = (xs[0], xs[1]);
            let (m, k, n) = (a.dim(0), a.dim(1), b.dim(1));
            let ga = want(0).then(|| {
                let bt = kernels::transpose(b.data(), k, n);
                Tensor::from_parts(vec![m, k], kernels::matmul(g.data(), &bt, m, n, k))
            });
            let gb = want(1).then(|| {
                let at = kernels::transpose(a.data(), m, k);
                Tensor::from_parts(vec![k, n], kernels::matmul(&at, g.data(), k, m, n))
            });
            Ok(vec![ga, gb])
        }
        Op::Conv1d { dilation } => {
            let geom = ConvGeom::check(xs[0], xs[1], *dilation)?;
            let gx = want(0).then(|| {
                Tensor::from_parts(
                    xs[0].shape().to_vec(),
                    kernels::conv1d_grad_input(g.data(), xs[1].data(), geom),
                )
            });
            let gw = want(1).then(|| {
                Tensor::from_parts(
                    xs[1].shape().to_vec(),
                    kernels::conv1d_grad_weight(g.data(), xs[0].data(), geom),
                )
            });
            let gb = (xs.len() > 2 && want(2)).then(|| {
                Tensor::from_parts(
                    vec![geom.cout],
                    kernels::channel_sums(g.data(), geom.batch, geom.cout, geom.time),
                )
            });
            Ok(vec![gx, gw, gb])
        }
        Op::Slice { lo, hi } => {
            let (b, c, t) = xs[0].bct("slice_channels")?;
            let mut gx = Tensor::zeros([b, c, t]);
            let w = hi - lo;
            for bi in 0..b {
                gx.data_mut()[(bi * c + lo) * t..(bi * c + hi) * t]
                    .copy_from_slice(&g.data()[bi * w * t..(bi + 1) * w * t]);
            }
            one(gx)
        }
        Op::Concat => {
            let ca = xs[0].dim(1);
            let cb = xs[1].dim(1);
            Ok(vec![
                want(0).then(|| g.channels(0, ca)).transpose()?,
                want(1).then(|| g.channels(ca, ca + cb)).transpose()?,
            ])
        }
        Op::AddChannel => {
            let (b, c, t) = xs[0].bct("add_channel")?;
            Ok(vec![
                want(0).then(|| g.clone()),
                want(1)
                    .then(|| Tensor::from_parts(vec![c], kernels::channel_sums(g.data(), b, c, t))),
            ])
        }
        Op::MulChannel => {
            let dims @ (b, c, t) = xs[0].bct("mul_channel")?;
            Ok(vec![
                want(0).then(|| broadcast_channel(g, xs[1], dims, |v, p| v * p)),
                want(1).then(|| {
                    let gx = zip_map(g, xs[0], |a, x| a * x);
                    Tensor::from_parts(vec![c], kernels::channel_sums(gx.data(), b, c, t))
                }),
            ])
        }
        Op::Squeeze(k) => {
            let (b, c, t) = xs[0].bct("squeeze")?;
            one(Tensor::from_parts(
                vec![b, c, t],
                kernels::unsqueeze(g.data(), b, c, t, *k),
            ))
        }
        Op::Unsqueeze(k) => {
            let (b, c, t) = out.bct("unsqueeze")?;
            one(Tensor::from_parts(
                xs[0].shape().to_vec(),
                kernels::squeeze(g.data(), b, c, t, *k),
            ))
        }
        Op::Reshape(_) => one(g.clone().reshape(xs[0].shape().to_vec())?),
        Op::LogAbsDet => {
            let Saved::Matrix(inv) = saved else {
                return Err(Error::invalid("logabsdet adjoint without saved inverse"));
            };
            let n = inv.dim(0);
            let k = g.item();
            let t = kernels::transpose(inv.data(), n, n);
            one(Tensor::from_parts(
                vec![n, n],
                t.into_iter().map(|v| v * k).collect(),
            ))
        }
        Op::StftMag(cfg) => {
            let Saved::Spectrum(spec) = saved else {
                return Err(Error::invalid("stft adjoint without saved spectrum"));
            };
            one(stft_backward(xs[0].shape(), cfg, spec, out, g)?)
        }
        Op::WeightNorm => {
            let Saved::Norms(norms) = saved else {
                return Err(Error::invalid("weight_norm adjoint without saved norms"));
            };
            let (v, gain) = (xs[0], xs[1]);
            let rows = gain.len();
            let inner = v.len() / rows;
            let mut gv = Vec::with_capacity(v.len());
            let mut gg = Vec::with_capacity(rows);
            for r in 0..rows {
                let vr = &v.data()[r * inner..(r + 1) * inner];
                let gr = &g.data()[r * inner..(r + 1) * inner];
                let n = norms[r];
                // u = v / n; dL/dg = G·u; dL/dv = g/n (G − (G·u) u)
                let gu = vr.iter().zip(gr).map(|(&a, &b)| a * b).sum::<F>() / n;
                gg.push(gu);
                let k = gain.data()[r] / n;
                gv.extend(vr.iter().zip(gr).map(|(&a, &b)| k * (b - gu * a / n)));
            }
            Ok(vec![
                want(0).then(|| Tensor::from_parts(v.shape().to_vec(), gv)),
                want(1).then(|| Tensor::from_parts(vec![rows], gg)),
            ])
        }
    }
}

/// Execution backend for model code.
pub trait Graph<F: Real> {
    type V: Clone;

    fn value<'a>(&'a self, v: &'a Self::V) -> &'a Tensor<F>;
    fn constant(&mut self, t: Tensor<F>) -> Self::V;
    fn param(&mut self, store: &ParamStore<F>, id: ParamId) -> Self::V;
    fn apply(&mut self, op: Op<F>, inputs: &[&Self::V]) -> Result<Self::V>;

    fn add(&mut self, a: &Self::V, b: &Self::V) -> Result<Self::V> {
        self.apply(Op::Add, &[a, b])
    }
    fn sub(&mut self, a: &Self::V, b: &Self::V) -> Result<Self::V> {
        self.apply(Op::Sub, &[a, b])
    }
    fn mul(&mut self, a: &Self::V, b: &Self::V) -> Result<Self::V> {
        self.apply(Op::Mul, &[a, b])
    }
    fn scale(&mut self, a: &Self::V, k: F) -> Result<Self::V> {
        self.apply(Op::Scale(k), &[a])
    }
    fn add_scalar(&mut self, a: &Self::V, k: F) -> Result<Self::V> {
        self.apply(Op::AddScalar(k), &[a])
    }
    fn exp(&mut self, a: &Self::V) -> Result<Self::V> {
        self.apply(Op::Exp, &[a])
    }
    fn log(&mut self, a: &Self::V) -> Result<Self::V> {
        self.apply(Op::Log, &[a])
    }
    fn tanh(&mut self, a: &Self::V) -> Result<Self::V> {
        self.apply(Op::Tanh, &[a])
    }
    fn sigmoid(&mut self, a: &Self::V) -> Result<Self::V> {
        self.apply(Op::Sigmoid, &[a])
    }
    fn abs(&mut self, a: &Self::V) -> Result<Self::V> {
        self.apply(Op::Abs, &[a])
    }
    fn sqrt(&mut self, a: &Self::V) -> Result<Self::V> {
        self.apply(Op::Sqrt, &[a])
    }
    fn clamp_min(&mut self, a: &Self::V, floor: F) -> Result<Self::V> {
        self.apply(Op::ClampMin(floor), &[a])
    }
    fn sum(&mut self, a: &Self::V) -> Result<Self::V> {
        self.apply(Op::Sum, &[a])
    }
    fn mean(&mut self, a: &Self::V) -> Result<Self::V> {
        self.apply(Op::Mean, &[a])
    }
    fn matmul(&mut self, a: &Self::V, b: &Self::V) -> Result<Self::V> {
        self.apply(Op::MatMul, &[a, b])
    }
    fn conv1d(
        &mut self,
        x: &Self::V,
        w: &Self::V,
        bias: Option<&Self::V>,
        dilation: usize,
    ) -> Result<Self::V> {
        match bias {
            Some(b) => self.apply(Op::Conv1d { dilation }, &[x, w, b]),
            None => self.apply(Op::Conv1d { dilation }, &[x, w]),
        }
    }
    fn slice_channels(&mut self, x: &Self::V, lo: usize, hi: usize) -> Result<Self::V> {
        self.apply(Op::Slice { lo, hi }, &[x])
    }
    /// Split `[B,C,T]` into channels `[0, at)` and `[at, C)`.
    fn split_channels(&mut self, x: &Self::V, at: usize) -> Result<(Self::V, Self::V)> {
        let c = self.value(x).bct("split_channels")?.1;
        if at > c {
            return Err(Error::invalid(format!("split at {at} of {c} channels")));
        }
        Ok((
            self.slice_channels(x, 0, at)?,
            self.slice_channels(x, at, c)?,
        ))
    }
    fn concat_channels(&mut self, a: &Self::V, b: &Self::V) -> Result<Self::V> {
        self.apply(Op::Concat, &[a, b])
    }
    fn add_channel(&mut self, x: &Self::V, p: &Self::V) -> Result<Self::V> {
        self.apply(Op::AddChannel, &[x, p])
    }
    fn mul_channel(&mut self, x: &Self::V, p: &Self::V) -> Result<Self::V> {
        self.apply(Op::MulChannel, &[x, p])
    }
    fn squeeze(&mut self, x: &Self::V, group: usize) -> Result<Self::V> {
        self.apply(Op::Squeeze(group), &[x])
    }
    fn unsqueeze(&mut self, x: &Self::V, group: usize) -> Result<Self::V> {
        self.apply(Op::Unsqueeze(group), &[x])
    }
    fn reshape(&mut self, x: &Self::V, shape: &[usize]) -> Result<Self::V> {
        self.apply(Op::Reshape(shape.to_vec()), &[x])
    }
    fn logabsdet(&mut self, w: &Self::V) -> Result<Self::V> {
        self.apply(Op::LogAbsDet, &[w])
    }
    fn stft_magnitude(&mut self, x: &Self::V, cfg: StftConfig) -> Result<Self::V> {
        self.apply(Op::StftMag(cfg), &[x])
    }
    fn weight_norm(&mut self, v: &Self::V, g: &Self::V) -> Result<Self::V> {
        self.apply(Op::WeightNorm, &[v, g])
    }
}

/// Evaluate-and-forget backend used for inference.
#[derive(Default)]
pub struct Eager<F: Real> {
    params: HashMap<(u64, ParamId), Rc<Tensor<F>>>,
}

impl<F: Real> Eager<F> {
    pub fn new() -> Self {
        Eager {
            params: HashMap::new(),
        }
    }
}

impl<F: Real> Graph<F> for Eager<F> {
    type V = Rc<Tensor<F>>;

    fn value<'a>(&'a self, v: &'a Self::V) -> &'a Tensor<F> {
        v
    }

    fn constant(&mut self, t: Tensor<F>) -> Self::V {
        Rc::new(t)
    }

    fn param(&mut self, store: &ParamStore<F>, id: ParamId) -> Self::V {
        self.params
            .entry((store.uid(), id))
            .or_insert_with(|| Rc::new(store.get(id).clone()))
            .clone()
    }

    fn apply(&mut self, op: Op<F>, inputs: &[&Self::V]) -> Result<Self::V> {
        let xs: Vec<&Tensor<F>> = inputs.iter().map(|v| v.as_ref()).collect();
        Ok(Rc::new(eval(&op, &xs)?.0))
    }
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

struct Node<F> {
    value: Tensor<F>,
    op: Option<Op<F>>,
    inputs: Vec<Var>,
    saved: Saved<F>,
    requires_grad: bool,
}

/// Recording backend. Confined to one thread; values are kept until the
/// tape is dropped.
pub struct Tape<F: Real> {
    nodes: Vec<Node<F>>,
    params: HashMap<(u64, ParamId), Var>,
}

impl<F: Real> Default for Tape<F> {
    fn default() -> Self {
        Self::new()
    }
}

impl<F: Real> Tape<F> {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            params: HashMap::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, node: Node<F>) -> Var {
        self.nodes.push(node);
        Var(self.nodes.len() - 1)
    }

    /// Differentiable leaf that is not a model parameter.
    pub fn input(&mut self, t: Tensor<F>) -> Var {
        self.push(Node {
            value: t,
            op: None,
            inputs: Vec::new(),
            saved: Saved::Nothing,
            requires_grad: true,
        })
    }

    /// Reverse sweep from a scalar `loss`. Adjoints are applied in strict
    /// reverse recording order; shared leaves accumulate a single gradient.
    pub fn backward(&self, loss: Var) -> Result<Gradients<F>> {
        let root = &self.nodes[loss.0];
        if root.value.len() != 1 {
            return Err(Error::NonScalarLoss(root.value.shape().to_vec()));
        }
        let mut grads: Vec<Option<Tensor<F>>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(root.value.shape().to_vec(), F::one()));
        let mut leaves = HashMap::new();
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(op) = &node.op else {
                leaves.insert(i, g);
                continue;
            };
            let xs: Vec<&Tensor<F>> = node.inputs.iter().map(|v| &self.nodes[v.0].value).collect();
            let need: Vec<bool> = node
                .inputs
                .iter()
                .map(|v| self.nodes[v.0].requires_grad)
                .collect();
            let parts = adjoint(op, &xs, &node.value, &node.saved, &g, &need)?;
            for (input, part) in node.inputs.iter().zip(parts) {
                let Some(part) = part else { continue };
                if !self.nodes[input.0].requires_grad {
                    continue;
                }
                match &mut grads[input.0] {
                    Some(acc) => {
                        for (a, p) in acc.data_mut().iter_mut().zip(part.data()) {
                            *a += *p;
                        }
                    }
                    slot @ None => *slot = Some(part),
                }
            }
        }
        Ok(Gradients {
            leaves,
            params: self.params.clone(),
        })
    }
}

impl<F: Real> Graph<F> for Tape<F> {
    type V = Var;

    fn value<'a>(&'a self, v: &'a Var) -> &'a Tensor<F> {
        &self.nodes[v.0].value
    }

    fn constant(&mut self, t: Tensor<F>) -> Var {
        self.push(Node {
            value: t,
            op: None,
            inputs: Vec::new(),
            saved: Saved::Nothing,
            requires_grad: false,
        })
    }

    fn param(&mut self, store: &ParamStore<F>, id: ParamId) -> Var {
        if let Some(v) = self.params.get(&(store.uid(), id)) {
            return *v;
        }
        let v = self.push(Node {
            value: store.get(id).clone(),
            op: None,
            inputs: Vec::new(),
            saved: Saved::Nothing,
            requires_grad: true,
        });
        self.params.insert((store.uid(), id), v);
        v
    }

    fn apply(&mut self, op: Op<F>, inputs: &[&Var]) -> Result<Var> {
        let xs: Vec<&Tensor<F>> = inputs.iter().map(|v| &self.nodes[v.0].value).collect();
        let (value, saved) = eval(&op, &xs)?;
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        Ok(self.push(Node {
            value,
            op: Some(op),
            inputs: inputs.iter().map(|v| **v).collect(),
            saved: if requires_grad { saved } else { Saved::Nothing },
            requires_grad,
        }))
    }
}

/// Leaf gradients produced by [`Tape::backward`].
pub struct Gradients<F> {
    leaves: HashMap<usize, Tensor<F>>,
    params: HashMap<(u64, ParamId), Var>,
}

impl<F: Real> Gradients<F> {
    pub fn wrt(&self, v: Var) -> Option<&Tensor<F>> {
        self.leaves.get(&v.0)
    }

    /// Gradient of a store entry, `None` when the loss does not depend on it.
    pub fn param(&self, store: &ParamStore<F>, id: ParamId) -> Option<&Tensor<F>> {
        self.params
            .get(&(store.uid(), id))
            .and_then(|v| self.leaves.get(&v.0))
    }
}

fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / numeric.abs().max(1.0)
}

/// Largest `|analytic − central difference| / max(1, |central difference|)`
/// over every coordinate of `x`, for a scalar-valued `f`.
pub fn grad_check(
    f: impl Fn(&mut Tape<f64>, Var) -> Result<Var>,
    x: &Tensor<f64>,
    eps: f64,
) -> Result<f64> {
    let mut tape = Tape::new();
    let xv = tape.input(x.clone());
    let y = f(&mut tape, xv)?;
    let grads = tape.backward(y)?;
    let analytic = grads
        .wrt(xv)
        .cloned()
        .unwrap_or_else(|| Tensor::zeros(x.shape().to_vec()));
    let eval_at = |probe: &Tensor<f64>, i: usize| -> Result<f64> {
        let mut t = Tape::new();
        let v = t.input(probe.clone());
        let y = f(&mut t, v).map_err(|e| match e {
            Error::NonFinite { .. } => Error::GradCheckNonFinite { coordinate: i },
            other => other,
        })?;
        Ok(t.value(&y).item())
    };
    let mut worst = 0.0f64;
    let mut probe = x.clone();
    for i in 0..x.len() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + eps;
        let up = eval_at(&probe, i)?;
        probe.data_mut()[i] = orig - eps;
        let down = eval_at(&probe, i)?;
        probe.data_mut()[i] = orig;
        let numeric = (up - down) / (2.0 * eps);
        if !numeric.is_finite() {
            return Err(Error::GradCheckNonFinite { coordinate: i });
        }
        worst = worst.max(rel_err(analytic.data()[i], numeric));
    }
    Ok(worst)
}

/// Models that own a [`ParamStore`].
pub trait Parametric<F: Real> {
    fn params(&self) -> &ParamStore<F>;
    fn params_mut(&mut self) -> &mut ParamStore<F>;
}

impl<F: Real> Parametric<F> for ParamStore<F> {
    fn params(&self) -> &ParamStore<F> {
        self
    }

    fn params_mut(&mut self) -> &mut ParamStore<F> {
        self
    }
}

/// [`grad_check`] over parameters of a store. At most `per_tensor`
/// evenly spaced coordinates of each trainable tensor are probed.
pub fn grad_check_params(
    store: &ParamStore<f64>,
    per_tensor: usize,
    f: impl Fn(&mut Tape<f64>, &ParamStore<f64>) -> Result<Var>,
    eps: f64,
) -> Result<f64> {
    grad_check_model(store, per_tensor, f, eps)
}

/// [`grad_check_params`] for a whole model, perturbed in place on a clone.
pub fn grad_check_model<M: Parametric<f64> + Clone>(
    model: &M,
    per_tensor: usize,
    f: impl Fn(&mut Tape<f64>, &M) -> Result<Var>,
    eps: f64,
) -> Result<f64> {
    let mut probe = model.clone();
    let mut tape = Tape::new();
    let y = f(&mut tape, &probe)?;
    let grads = tape.backward(y)?;
    let mut worst = 0.0f64;
    let mut coordinate = 0;
    for id in probe.params().trainable_ids() {
        let n = probe.params().get(id).len();
        let analytic = grads.param(probe.params(), id).cloned();
        let picks: Vec<usize> = if n <= per_tensor {
            (0..n).collect()
        } else {
            (0..per_tensor).map(|j| j * n / per_tensor).collect()
        };
        for i in picks {
            let orig = probe.params().get(id).data()[i];
            let mut ev = |v: f64| -> Result<f64> {
                probe.params_mut().get_mut(id).data_mut()[i] = v;
                let mut t = Tape::new();
                let y = f(&mut t, &probe).map_err(|e| match e {
                    Error::NonFinite { .. } => Error::GradCheckNonFinite { coordinate },
                    other => other,
                })?;
                Ok(t.value(&y).item())
            };
            let up = ev(orig + eps)?;
            let down = ev(orig - eps)?;
            probe.params_mut().get_mut(id).data_mut()[i] = orig;
            let numeric = (up - down) / (2.0 * eps);
            let a = analytic.as_ref().map_or(0.0, |g| g.data()[i]);
            worst = worst.max(rel_err(a, numeric));
            coordinate += 1;
        }
    }
    Ok(worst)
}
