//! Forward and backward arithmetic for the primitives.

use super::{gemm, MatRef, Real, Tensor};
use crate::error::{contract, Result};

/// Splits a shape into `(batch, batched)` given the rank of one sample.
fn batch_of(shape: &[usize], sample_rank: usize, what: &str) -> Result<(usize, bool)> {
    if shape.len() == sample_rank {
        Ok((1, false))
    } else if shape.len() == sample_rank + 1 {
        Ok((shape[0], true))
    } else {
        Err(contract(format!(
            "{what}: expected rank {sample_rank} or {}, got shape {shape:?}",
            sample_rank + 1
        )))
    }
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct ConvGeom {
    pub batch: usize,
    pub batched: bool,
    pub cin: usize,
    pub h: usize,
    pub w: usize,
    pub cout: usize,
    pub k: usize,
    pub pad: usize,
    pub oh: usize,
    pub ow: usize,
}

impl ConvGeom {
    pub fn new(input: &[usize], kernels: &[usize], bias: &[usize], pad: usize) -> Result<Self> {
        let (batch, batched) = batch_of(input, 3, "conv2d input")?;
        let s = &input[input.len() - 3..];
        let (cin, h, w) = (s[0], s[1], s[2]);
        if kernels.len() != 4 {
            return Err(contract(format!("conv2d kernels must be rank 4, got {kernels:?}")));
        }
        let (cout, kc, k, k2) = (kernels[0], kernels[1], kernels[2], kernels[3]);
        if kc != cin {
            return Err(contract(format!(
                "conv2d kernels expect {kc} input channels, input has {cin}"
            )));
        }
        if k != k2 || k % 2 == 0 {
            return Err(contract(format!("conv2d kernel must be square and odd, got {k}x{k2}")));
        }
        if bias != [cout] {
            return Err(contract(format!("conv2d bias shape {bias:?}, expected [{cout}]")));
        }
        if h + 2 * pad < k || w + 2 * pad < k {
            return Err(contract(format!(
                "conv2d output would be empty: {h}x{w} input, kernel {k}, padding {pad}"
            )));
        }
        Ok(Self {
            batch,
            batched,
            cin,
            h,
            w,
            cout,
            k,
            pad,
            oh: h + 2 * pad - k + 1,
            ow: w + 2 * pad - k + 1,
        })
    }

    pub fn in_len(&self) -> usize {
        self.cin * self.h * self.w
    }

    pub fn out_plane(&self) -> usize {
        self.oh * self.ow
    }

    pub fn patch_len(&self) -> usize {
        self.cin * self.k * self.k
    }

    pub fn out_shape(&self) -> Vec<usize> {
        let s = [self.cout, self.oh, self.ow];
        if self.batched {
            vec![self.batch, s[0], s[1], s[2]]
        } else {
            s.to_vec()
        }
    }

    /// Valid output-column range for kernel column `kx`.
    fn col_range(&self, kx: usize) -> (usize, usize) {
        let lo = self.pad.saturating_sub(kx);
        let hi = (self.w + self.pad).saturating_sub(kx).min(self.ow);
        (lo, hi.max(lo))
    }
}

/// Unfolds one sample into a `(cin·k·k) × (oh·ow)` matrix.
fn im2col<T: Real>(x: &[T], g: &ConvGeom, col: &mut [T]) {
    let p = g.out_plane();
    for ci in 0..g.cin {
        let plane = &x[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = (ci * g.k + ky) * g.k + kx;
                let dst = &mut col[row * p..(row + 1) * p];
                let (lo, hi) = g.col_range(kx);
                for oy in 0..g.oh {
                    let out = &mut dst[oy * g.ow..(oy + 1) * g.ow];
                    let iy = oy + ky;
                    if iy < g.pad || iy - g.pad >= g.h {
                        out.fill(T::zero());
                        continue;
                    }
                    let src = &plane[(iy - g.pad) * g.w..(iy - g.pad + 1) * g.w];
                    out[..lo].fill(T::zero());
                    out[hi..].fill(T::zero());
                    let ix0 = lo + kx - g.pad;
                    out[lo..hi].copy_from_slice(&src[ix0..ix0 + (hi - lo)]);
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: accumulates a column matrix back onto a sample.
fn col2im<T: Real>(col: &[T], g: &ConvGeom, x: &mut [T]) {
    let p = g.out_plane();
    for ci in 0..g.cin {
        let plane = &mut x[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = (ci * g.k + ky) * g.k + kx;
                let src_rows = &col[row * p..(row + 1) * p];
                let (lo, hi) = g.col_range(kx);
                for oy in 0..g.oh {
                    let iy = oy + ky;
                    if iy < g.pad || iy - g.pad >= g.h {
                        continue;
                    }
                    let src = &src_rows[oy * g.ow + lo..oy * g.ow + hi];
                    let ix0 = lo + kx - g.pad;
                    let dst = &mut plane[(iy - g.pad) * g.w + ix0..(iy - g.pad) * g.w + ix0 + (hi - lo)];
                    for (d, &s) in dst.iter_mut().zip(src) {
                        *d += s;
                    }
                }
            }
        }
    }
}

pub(crate) fn conv2d_forward<T: Real>(x: &[T], kernels: &[T], bias: &[T], g: &ConvGeom) -> Vec<T> {
    let p = g.out_plane();
    let kk = g.patch_len();
    let mut out = vec![T::zero(); g.batch * g.cout * p];
    let mut col = vec![T::zero(); kk * p];
    for n in 0..g.batch {
        im2col(&x[n * g.in_len()..(n + 1) * g.in_len()], g, &mut col);
        let o = &mut out[n * g.cout * p..(n + 1) * g.cout * p];
        for (c, row) in o.chunks_exact_mut(p).enumerate() {
            row.fill(bias[c]);
        }
        gemm(MatRef::new(kernels, g.cout, kk), MatRef::new(&col, kk, p), T::one(), o);
    }
    out
}

pub(crate) struct ConvGrads<T> {
    pub input: Option<Vec<T>>,
    pub kernels: Option<Vec<T>>,
    pub bias: Option<Vec<T>>,
}

pub(crate) fn conv2d_backward<T: Real>(
    x: &[T],
    kernels: &[T],
    grad_out: &[T],
    g: &ConvGeom,
    need: [bool; 3],
) -> ConvGrads<T> {
    let p = g.out_plane();
    let kk = g.patch_len();
    let mut dx = need[0].then(|| vec![T::zero(); g.batch * g.in_len()]);
    let mut dk = need[1].then(|| vec![T::zero(); g.cout * kk]);
    let mut db = need[2].then(|| vec![T::zero(); g.cout]);
    let mut col = vec![T::zero(); kk * p];
    for n in 0..g.batch {
        let go = &grad_out[n * g.cout * p..(n + 1) * g.cout * p];
        if let Some(dk) = dk.as_mut() {
            im2col(&x[n * g.in_len()..(n + 1) * g.in_len()], g, &mut col);
            // dK += dY · colᵀ
            gemm(MatRef::new(go, g.cout, p), MatRef::t(&col, p, kk), T::one(), dk);
        }
        if let Some(db) = db.as_mut() {
            for (c, row) in go.chunks_exact(p).enumerate() {
                db[c] += row.iter().copied().sum::<T>();
            }
        }
        if let Some(dx) = dx.as_mut() {
            // dcol = Kᵀ · dY
            gemm(MatRef::t(kernels, kk, g.cout), MatRef::new(go, g.cout, p), T::zero(), &mut col);
            col2im(&col, g, &mut dx[n * g.in_len()..(n + 1) * g.in_len()]);
        }
    }
    ConvGrads { input: dx, kernels: dk, bias: db }
}

/// Cross-correlation of `input` (`[C,H,W]` or `[N,C,H,W]`) with
/// `kernels` (`[C_out,C_in,k,k]`) plus a per-channel bias, zero padding.
pub fn conv2d<T: Real>(
    input: &Tensor<T>,
    kernels: &Tensor<T>,
    bias: &Tensor<T>,
    padding: usize,
) -> Result<Tensor<T>> {
    let g = ConvGeom::new(input.shape(), kernels.shape(), bias.shape(), padding)?;
    let out = Tensor::new(g.out_shape(), conv2d_forward(input.data(), kernels.data(), bias.data(), &g))?;
    out.ensure_finite("conv2d")?;
    Ok(out)
}

pub(crate) fn maxpool2_forward<T: Real>(input: &Tensor<T>) -> Result<(Tensor<T>, Vec<u32>)> {
    let shape = input.shape();
    let (batch, batched) = batch_of(shape, 3, "maxpool2 input")?;
    let s = &shape[shape.len() - 3..];
    let (c, h, w) = (s[0], s[1], s[2]);
    if h % 2 != 0 || w % 2 != 0 {
        return Err(contract(format!("maxpool2 needs even spatial dims, got {h}x{w}")));
    }
    let (oh, ow) = (h / 2, w / 2);
    let x = input.data();
    let mut out = Vec::with_capacity(batch * c * oh * ow);
    let mut arg = Vec::with_capacity(out.capacity());
    for plane in 0..batch * c {
        let base = plane * h * w;
        for oy in 0..oh {
            for ox in 0..ow {
                let i0 = base + 2 * oy * w + 2 * ox;
                // row-major scan; strict comparison keeps the first maximum
                let mut best = i0;
                for cand in [i0 + 1, i0 + w, i0 + w + 1] {
                    if x[cand] > x[best] {
                        best = cand;
                    }
                }
                out.push(x[best]);
                arg.push(best as u32);
            }
        }
    }
    let out_shape = if batched { vec![batch, c, oh, ow] } else { vec![c, oh, ow] };
    let out = Tensor::new(out_shape, out)?;
    out.ensure_finite("maxpool2")?;
    Ok((out, arg))
}

/// 2×2 non-overlapping max pooling.
pub fn maxpool2<T: Real>(input: &Tensor<T>) -> Result<Tensor<T>> {
    maxpool2_forward(input).map(|(t, _)| t)
}

pub(crate) fn maxpool2_backward<T: Real>(argmax: &[u32], grad_out: &[T], input_len: usize) -> Vec<T> {
    let mut dx = vec![T::zero(); input_len];
    for (&i, &g) in argmax.iter().zip(grad_out) {
        dx[i as usize] += g;
    }
    dx
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct DenseGeom {
    pub batch: usize,
    pub batched: bool,
    pub n_in: usize,
    pub n_out: usize,
}

impl DenseGeom {
    pub fn new(input: &[usize], weights: &[usize], bias: &[usize]) -> Result<Self> {
        let (batch, batched) = batch_of(input, 1, "dense input")?;
        let n_in = input[input.len() - 1];
        if weights.len() != 2 || weights[1] != n_in {
            return Err(contract(format!(
                "dense weights {weights:?} do not accept input of width {n_in}"
            )));
        }
        if bias != [weights[0]] {
            return Err(contract(format!("dense bias {bias:?}, expected [{}]", weights[0])));
        }
        Ok(Self { batch, batched, n_in, n_out: weights[0] })
    }

    pub fn out_shape(&self) -> Vec<usize> {
        if self.batched {
            vec![self.batch, self.n_out]
        } else {
            vec![self.n_out]
        }
    }
}

pub(crate) fn dense_forward<T: Real>(x: &[T], w: &[T], b: &[T], g: &DenseGeom) -> Vec<T> {
    let mut out = Vec::with_capacity(g.batch * g.n_out);
    for _ in 0..g.batch {
        out.extend_from_slice(b);
    }
    gemm(MatRef::new(x, g.batch, g.n_in), MatRef::t(w, g.n_in, g.n_out), T::one(), &mut out);
    out
}

pub(crate) struct DenseGrads<T> {
    pub input: Option<Vec<T>>,
    pub weights: Option<Vec<T>>,
    pub bias: Option<Vec<T>>,
}

pub(crate) fn dense_backward<T: Real>(
    x: &[T],
    w: &[T],
    grad_out: &[T],
    g: &DenseGeom,
    need: [bool; 3],
) -> DenseGrads<T> {
    let input = need[0].then(|| {
        let mut dx = vec![T::zero(); g.batch * g.n_in];
        gemm(MatRef::new(grad_out, g.batch, g.n_out), MatRef::new(w, g.n_out, g.n_in), T::zero(), &mut dx);
        dx
    });
    let weights = need[1].then(|| {
        let mut dw = vec![T::zero(); g.n_out * g.n_in];
        gemm(MatRef::t(grad_out, g.n_out, g.batch), MatRef::new(x, g.batch, g.n_in), T::zero(), &mut dw);
        dw
    });
    let bias = need[2].then(|| {
        let mut db = vec![T::zero(); g.n_out];
        for row in grad_out.chunks_exact(g.n_out) {
            for (d, &v) in db.iter_mut().zip(row) {
                *d += v;
            }
        }
        db
    });
    DenseGrads { input, weights, bias }
}

/// Fully connected layer: `weights · input + bias`.
pub fn dense<T: Real>(input: &Tensor<T>, weights: &Tensor<T>, bias: &Tensor<T>) -> Result<Tensor<T>> {
    let g = DenseGeom::new(input.shape(), weights.shape(), bias.shape())?;
    let out = Tensor::new(g.out_shape(), dense_forward(input.data(), weights.data(), bias.data(), &g))?;
    out.ensure_finite("dense")?;
    Ok(out)
}

pub fn relu<T: Real>(input: &Tensor<T>) -> Tensor<T> {
    input.map(|v| if v > T::zero() { v } else { T::zero() })
}

/// Mean absolute error between equally shaped tensors.
pub fn l1_loss<T: Real>(pred: &Tensor<T>, target: &Tensor<T>) -> Result<T> {
    if pred.shape() != target.shape() {
        return Err(contract(format!(
            "l1_loss shapes differ: {:?} vs {:?}",
            pred.shape(),
            target.shape()
        )));
    }
    let n = T::from_usize(pred.len()).expect("length fits");
    let total: T = pred.data().iter().zip(target.data()).map(|(&p, &t)| (p - t).abs()).sum();
    let loss = total / n;
    if !loss.is_finite() {
        return Err(crate::error::numeric("l1_loss is not finite"));
    }
    Ok(loss)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn identity_kernel_is_passthrough() {
        let x = t(&[1, 4, 4], &(0..16).map(|v| v as f64 * 0.5 - 3.0).collect::<Vec<_>>());
        let k = t(&[1, 1, 1, 1], &[1.0]);
        let b = t(&[1], &[0.0]);
        assert_eq!(conv2d(&x, &k, &b, 0).unwrap(), x);
    }

    #[test]
    fn zero_input_gives_bias_planes() {
        let x = Tensor::<f64>::zeros(&[2, 8, 8]);
        let k = Tensor::from_f64(vec![3, 2, 3, 3], &(0..54).map(|v| (v as f64).sin()).collect::<Vec<_>>()).unwrap();
        let b = t(&[3], &[0.5, -1.0, 2.0]);
        let y = conv2d(&x, &k, &b, 1).unwrap();
        assert_eq!(y.shape(), &[3, 8, 8]);
        for (c, plane) in y.data().chunks(64).enumerate() {
            assert!(plane.iter().all(|&v| v == b.data()[c]));
        }
    }

    #[test]
    fn conv_matches_direct_loop() {
        let (cin, h, w, cout, k, pad) = (2, 5, 6, 3, 3, 1);
        let x: Vec<f64> = (0..cin * h * w).map(|i| ((i * 7 % 11) as f64) - 5.0).collect();
        let kern: Vec<f64> = (0..cout * cin * k * k).map(|i| ((i * 5 % 7) as f64) * 0.25 - 0.7).collect();
        let bias = vec![0.1, -0.2, 0.3];
        let y = conv2d(&t(&[cin, h, w], &x), &t(&[cout, cin, k, k], &kern), &t(&[cout], &bias), pad).unwrap();
        for co in 0..cout {
            for oy in 0..h {
                for ox in 0..w {
                    let mut acc = bias[co];
                    for ci in 0..cin {
                        for ky in 0..k {
                            for kx in 0..k {
                                let iy = oy as isize + ky as isize - pad as isize;
                                let ix = ox as isize + kx as isize - pad as isize;
                                if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < w {
                                    acc += kern[((co * cin + ci) * k + ky) * k + kx]
                                        * x[(ci * h + iy as usize) * w + ix as usize];
                                }
                            }
                        }
                    }
                    let got = y.data()[(co * h + oy) * w + ox];
                    assert!((got - acc).abs() < 1e-12, "{got} vs {acc}");
                }
            }
        }
    }

    #[test]
    fn conv_shape_errors() {
        let x = Tensor::<f64>::zeros(&[2, 4, 4]);
        let b = Tensor::<f64>::zeros(&[1]);
        assert!(conv2d(&x, &Tensor::zeros(&[1, 3, 3, 3]), &b, 1).is_err());
        assert!(conv2d(&x, &Tensor::zeros(&[1, 2, 2, 2]), &b, 1).is_err());
        assert!(conv2d(&x, &Tensor::zeros(&[1, 2, 3, 3]), &Tensor::zeros(&[2]), 1).is_err());
        assert!(conv2d(&Tensor::<f64>::zeros(&[2, 1, 1]), &Tensor::zeros(&[1, 2, 3, 3]), &b, 0).is_err());
    }

    #[test]
    fn maxpool_cases() {
        assert_eq!(maxpool2(&t(&[1, 2, 2], &[1.0, 2.0, 3.0, 4.0])).unwrap().data(), &[4.0]);
        let c = Tensor::full(&[2, 4, 6], 1.5f64);
        assert_eq!(maxpool2(&c).unwrap(), Tensor::full(&[2, 2, 3], 1.5));
        assert!(maxpool2(&Tensor::<f64>::zeros(&[1, 3, 4])).is_err());
        let (_, arg) = maxpool2_forward(&t(&[1, 2, 2], &[5.0; 4])).unwrap();
        assert_eq!(arg, vec![0]);
        assert_eq!(maxpool2_backward(&arg, &[2.0f64], 4), vec![2.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn dense_cases() {
        let x = t(&[3], &[1.0, -2.0, 0.5]);
        let eye = t(&[3, 3], &[1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0]);
        assert_eq!(dense(&x, &eye, &Tensor::zeros(&[3])).unwrap(), x);
        let b = t(&[2], &[4.0, -1.0]);
        assert_eq!(dense(&x, &Tensor::zeros(&[2, 3]), &b).unwrap(), b);
        assert!(dense(&x, &Tensor::zeros(&[2, 4]), &b).is_err());
        assert!(dense(&x, &Tensor::zeros(&[2, 3]), &Tensor::zeros(&[3])).is_err());
    }

    #[test]
    fn relu_and_l1() {
        assert_eq!(relu(&t(&[3], &[-1.0, 0.0, 2.0])).data(), &[0.0, 0.0, 2.0]);
        assert!(relu(&t(&[3], &[-1.0, -3.0, -0.1])).data().iter().all(|&v| v == 0.0));
        let p = t(&[2], &[1.0, 2.0]);
        assert_eq!(l1_loss(&p, &p).unwrap(), 0.0);
        assert_eq!(l1_loss(&p, &t(&[2], &[2.0, 4.0])).unwrap(), 1.5);
        assert!(l1_loss(&p, &t(&[3], &[0.0; 3])).is_err());
    }
}
