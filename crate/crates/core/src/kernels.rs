//! Raw numeric kernels shared by every execution backend.
//!
//! Forward kernels accumulate each output element in the same order as the
//! obvious scalar loop (bias first, then inputs in index order), so results
//! are reproducible against a naive reference bit for bit.

use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

/// First and one-past-last output index for which `t + off` is inside `0..len`.
#[inline]
fn valid_range(len: usize, off: isize) -> (usize, usize) {
    let lo = if off < 0 { (-off) as usize } else { 0 };
    let hi = if off > 0 {
        len.saturating_sub(off as usize)
    } else {
        len
    };
    (lo.min(hi), hi)
}

#[inline]
fn axpy<F: Real>(out: &mut [F], a: F, x: &[F]) {
    for (o, &v) in out.iter_mut().zip(x) {
        *o += a * v;
    }
}

/// Dot product with eight independent accumulators.
#[inline]
pub(crate) fn dot<F: Real>(a: &[F], b: &[F]) -> F {
    let mut acc = [F::zero(); 8];
    let ca = a.chunks_exact(8);
    let cb = b.chunks_exact(8);
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (xa, xb) in ca.zip(cb) {
        for j in 0..8 {
            acc[j] += xa[j] * xb[j];
        }
    }
    let mut tail = F::zero();
    for (x, y) in ra.iter().zip(rb) {
        tail += *x * *y;
    }
    let s = ((acc[0] + acc[4]) + (acc[1] + acc[5])) + ((acc[2] + acc[6]) + (acc[3] + acc[7]));
    s + tail
}

pub(crate) fn sum_fast<F: Real>(a: &[F]) -> F {
    let mut acc = [F::zero(); 8];
    let ca = a.chunks_exact(8);
    let rem = ca.remainder();
    for x in ca {
        for j in 0..8 {
            acc[j] += x[j];
        }
    }
    let mut tail = F::zero();
    for v in rem {
        tail += *v;
    }
    acc.iter().copied().sum::<F>() + tail
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub batch: usize,
    pub cin: usize,
    pub cout: usize,
    pub kernel: usize,
    pub dilation: usize,
    pub time: usize,
}

impl ConvGeom {
    pub fn check(x: &Tensor<impl Real>, w: &Tensor<impl Real>, dilation: usize) -> Result<Self> {
        let (batch, cin, time) = x.bct("conv1d")?;
        let (cout, wcin, kernel) = match w.shape()[..] {
            [o, i, k] => (o, i, k),
            _ => return Err(Error::shape("conv1d", x.shape(), w.shape())),
        };
        if wcin != cin {
            return Err(Error::shape("conv1d", x.shape(), w.shape()));
        }
        if kernel % 2 == 0 {
            return Err(Error::invalid(format!(
                "conv1d: symmetric padding needs an odd kernel, got {kernel}"
            )));
        }
        if dilation == 0 {
            return Err(Error::invalid("conv1d: dilation must be >= 1"));
        }
        Ok(ConvGeom {
            batch,
            cin,
            cout,
            kernel,
            dilation,
            time,
        })
    }

    #[inline]
    fn pad(&self) -> isize {
        (self.dilation * (self.kernel - 1) / 2) as isize
    }

    #[inline]
    fn offset(&self, k: usize) -> isize {
        (k * self.dilation) as isize - self.pad()
    }

    pub fn macs(&self) -> usize {
        self.batch * self.cout * self.cin * self.kernel * self.time
    }
}

/// Non-causal 1-D convolution with symmetric zero padding; output length
/// equals input length.
pub fn conv1d<F: Real>(x: &[F], w: &[F], bias: Option<&[F]>, g: ConvGeom) -> Vec<F> {
    let ConvGeom {
        batch,
        cin,
        cout,
        kernel,
        time,
        ..
    } = g;
    let mut out = vec![F::zero(); batch * cout * time];
    const OB: usize = 4;
    for b in 0..batch {
        let xb = &x[b * cin * time..(b + 1) * cin * time];
        let ob = &mut out[b * cout * time..(b + 1) * cout * time];
        for (blk, rows) in ob.chunks_mut(OB * time).enumerate() {
            let co0 = blk * OB;
            let nrows = rows.len() / time;
            if let Some(bias) = bias {
                for r in 0..nrows {
                    rows[r * time..(r + 1) * time].fill(bias[co0 + r]);
                }
            }
            for ci in 0..cin {
                let xr = &xb[ci * time..(ci + 1) * time];
                for k in 0..kernel {
                    let off = g.offset(k);
                    let (lo, hi) = valid_range(time, off);
                    if lo >= hi {
                        continue;
                    }
                    let src = &xr[(lo as isize + off) as usize..(hi as isize + off) as usize];
                    for r in 0..nrows {
                        let wv = w[((co0 + r) * cin + ci) * kernel + k];
                        axpy(&mut rows[r * time + lo..r * time + hi], wv, src);
                    }
                }
            }
        }
    }
    out
}

/// Gradient of [`conv1d`] with respect to its input.
pub fn conv1d_grad_input<F: Real>(gout: &[F], w: &[F], g: ConvGeom) -> Vec<F> {
    let ConvGeom {
        batch,
        cin,
        cout,
        kernel,
        time,
        ..
    } = g;
    let mut gx = vec![F::zero(); batch * cin * time];
    for b in 0..batch {
        for co in 0..cout {
            let gr = &gout[(b * cout + co) * time..(b * cout + co + 1) * time];
            for ci in 0..cin {
                let gxr = &mut gx[(b * cin + ci) * time..(b * cin + ci + 1) * time];
                for k in 0..kernel {
                    let off = g.offset(k);
                    let (lo, hi) = valid_range(time, off);
                    if lo >= hi {
                        continue;
                    }
                    let wv = w[(co * cin + ci) * kernel + k];
                    let dst = &mut gxr[(lo as isize + off) as usize..(hi as isize + off) as usize];
                    axpy(dst, wv, &gr[lo..hi]);
                }
            }
        }
    }
    gx
}

/// Gradient of [`conv1d`] with respect to its weight.
pub fn conv1d_grad_weight<F: Real>(gout: &[F], x: &[F], g: ConvGeom) -> Vec<F> {
    let ConvGeom {
        batch,
        cin,
        cout,
        kernel,
        time,
        ..
    } = g;
    let mut gw = vec![F::zero(); cout * cin * kernel];
    for co in 0..cout {
        for ci in 0..cin {
            for k in 0..kernel {
                let off = g.offset(k);
                let (lo, hi) = valid_range(time, off);
                if lo >= hi {
                    continue;
                }
                let mut acc = F::zero();
                for b in 0..batch {
                    let gr = &gout[(b * cout + co) * time..(b * cout + co + 1) * time];
                    let xr = &x[(b * cin + ci) * time..(b * cin + ci + 1) * time];
                    acc += dot(
                        &gr[lo..hi],
                        &xr[(lo as isize + off) as usize..(hi as isize + off) as usize],
                    );
                }
                gw[(co * cin + ci) * kernel + k] = acc;
            }
        }
    }
    gw
}

/// Sum of `[B, C, T]` over batch and time, per channel.
pub fn channel_sums<F: Real>(x: &[F], batch: usize, ch: usize, time: usize) -> Vec<F> {
    let mut out = vec![F::zero(); ch];
    for b in 0..batch {
        for (c, o) in out.iter_mut().enumerate() {
            *o += sum_fast(&x[(b * ch + c) * time..(b * ch + c + 1) * time]);
        }
    }
    out
}

/// Row-major `[m, k] × [k, n]`.
pub fn matmul<F: Real>(a: &[F], b: &[F], m: usize, k: usize, n: usize) -> Vec<F> {
    let mut out = vec![F::zero(); m * n];
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            axpy(orow, a[i * k + p], &b[p * n..(p + 1) * n]);
        }
    }
    out
}

pub fn transpose<F: Real>(a: &[F], rows: usize, cols: usize) -> Vec<F> {
    let mut out = vec![F::zero(); rows * cols];
    for i in 0..rows {
        for j in 0..cols {
            out[j * rows + i] = a[i * cols + j];
        }
    }
    out
}

/// `[B, C, T] → [B, C·g, T/g]` with `out[c·g + j, t] = x[c, t·g + j]`.
pub fn squeeze<F: Real>(x: &[F], batch: usize, ch: usize, time: usize, g: usize) -> Vec<F> {
    let tt = time / g;
    let mut out = vec![F::zero(); x.len()];
    for b in 0..batch {
        for c in 0..ch {
            let src = &x[(b * ch + c) * time..(b * ch + c + 1) * time];
            for j in 0..g {
                let dst =
                    &mut out[(b * ch * g + c * g + j) * tt..(b * ch * g + c * g + j + 1) * tt];
                for (t, d) in dst.iter_mut().enumerate() {
                    *d = src[t * g + j];
                }
            }
        }
    }
    out
}

/// Inverse of [`squeeze`]: `[B, C·g, T/g] → [B, C, T]`.
pub fn unsqueeze<F: Real>(x: &[F], batch: usize, ch: usize, time: usize, g: usize) -> Vec<F> {
    let tt = time / g;
    let mut out = vec![F::zero(); x.len()];
    for b in 0..batch {
        for c in 0..ch {
            let dst = &mut out[(b * ch + c) * time..(b * ch + c + 1) * time];
            for j in 0..g {
                let src = &x[(b * ch * g + c * g + j) * tt..(b * ch * g + c * g + j + 1) * tt];
                for (t, s) in src.iter().enumerate() {
                    dst[t * g + j] = *s;
                }
            }
        }
    }
    out
}

/// Nearest-frame upsampling along time: `[B, C, F] → [B, C, F·r]`.
pub fn repeat_time<F: Real>(x: &Tensor<F>, r: usize) -> Result<Tensor<F>> {
    let (b, c, f) = x.bct("repeat_time")?;
    if r == 0 {
        return Err(Error::invalid("repeat factor must be >= 1"));
    }
    let mut out = Vec::with_capacity(b * c * f * r);
    for row in x.data().chunks_exact(f.max(1)) {
        for &v in row {
            out.extend(std::iter::repeat(v).take(r));
        }
    }
    Ok(Tensor::from_parts(vec![b, c, f * r], out))
}

/// `log|det A|` and `A⁻¹` of a square matrix, computed in 64-bit.
pub fn logabsdet_inverse<F: Real>(a: &Tensor<F>) -> Result<(F, Tensor<F>, f64)> {
    let n = match a.shape()[..] {
        [r, c] if r == c => r,
        _ => return Err(Error::shape("logabsdet", a.shape(), &[0, 0])),
    };
    let m = nalgebra::DMatrix::<f64>::from_row_iterator(n, n, a.data().iter().map(|v| v.f64()));
    let lu = m.lu();
    let det = lu.determinant();
    if !det.is_finite() || det.abs() <= 1e-8 {
        return Err(Error::Singular { det });
    }
    let inv = lu.try_inverse().ok_or(Error::Singular { det })?;
    let mut data = Vec::with_capacity(n * n);
    for i in 0..n {
        for j in 0..n {
            data.push(F::of(inv[(i, j)]));
        }
    }
    Ok((
        F::of(det.abs().ln()),
        Tensor::from_parts(vec![n, n], data),
        det,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive_conv(x: &[f64], w: &[f64], bias: Option<&[f64]>, g: ConvGeom) -> Vec<f64> {
        let pad = (g.dilation * (g.kernel - 1) / 2) as isize;
        let mut out = vec![0.0; g.batch * g.cout * g.time];
        for b in 0..g.batch {
            for co in 0..g.cout {
                for t in 0..g.time {
                    let mut acc = bias.map_or(0.0, |bb| bb[co]);
                    for ci in 0..g.cin {
                        for k in 0..g.kernel {
                            let src = t as isize + (k * g.dilation) as isize - pad;
                            if src >= 0 && (src as usize) < g.time {
                                acc += w[(co * g.cin + ci) * g.kernel + k]
                                    * x[(b * g.cin + ci) * g.time + src as usize];
                            }
                        }
                    }
                    out[(b * g.cout + co) * g.time + t] = acc;
                }
            }
        }
        out
    }

    #[test]
    fn valid_ranges() {
        assert_eq!(valid_range(10, -2), (2, 10));
        assert_eq!(valid_range(10, 3), (0, 7));
        let (lo, hi) = valid_range(2, 5);
        assert!(lo >= hi);
        let (lo, hi) = valid_range(2, -5);
        assert!(lo >= hi);
    }

    #[test]
    fn conv_matches_scalar_loop_bitwise() {
        let g = ConvGeom {
            batch: 2,
            cin: 3,
            cout: 6,
            kernel: 5,
            dilation: 3,
            time: 11,
        };
        let x: Vec<f64> = (0..g.batch * g.cin * g.time)
            .map(|i| ((i * 37 % 101) as f64 - 50.0) / 17.0)
            .collect();
        let w: Vec<f64> = (0..g.cout * g.cin * g.kernel)
            .map(|i| ((i * 13 % 29) as f64 - 14.0) / 7.0)
            .collect();
        let bias: Vec<f64> = (0..g.cout).map(|i| i as f64 * 0.1).collect();
        assert_eq!(
            conv1d(&x, &w, Some(&bias), g),
            naive_conv(&x, &w, Some(&bias), g)
        );
        assert_eq!(conv1d(&x, &w, None, g), naive_conv(&x, &w, None, g));
    }

    #[test]
    fn squeeze_roundtrip() {
        let x: Vec<f32> = (0..2 * 3 * 12).map(|i| i as f32).collect();
        let s = squeeze(&x, 2, 3, 12, 4);
        assert_eq!(unsqueeze(&s, 2, 3, 12, 4), x);
    }

    #[test]
    fn dot_matches_sequential() {
        let a: Vec<f64> = (0..37).map(|i| i as f64 * 0.5).collect();
        let b: Vec<f64> = (0..37).map(|i| 1.0 - i as f64 * 0.25).collect();
        let seq: f64 = a.iter().zip(&b).map(|(x, y)| x * y).sum();
        assert!((dot(&a, &b) - seq).abs() < 1e-9);
    }
}
