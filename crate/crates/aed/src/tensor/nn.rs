//! Convolution, pooling and batch normalization on NCHW tensors.

use super::gemm::{gemm_nn, gemm_nt, gemm_tn};
use super::{accum_grad, Scalar, Tape, Tensor};
use crate::error::{Error, Result};

/// im2col for one sample: input[C×H×W] -> col[(C·kh·kw) × (oh·ow)].
#[allow(clippy::too_many_arguments)]
fn im2col<T: Scalar>(
    x: &[T],
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
    col: &mut [T],
) {
    let opix = oh * ow;
    for ch in 0..c {
        for ki in 0..kh {
            for kj in 0..kw {
                let row = (ch * kh + ki) * kw + kj;
                let dst = &mut col[row * opix..(row + 1) * opix];
                for oi in 0..oh {
                    let iy = (oi * stride + ki) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        for v in dst[oi * ow..(oi + 1) * ow].iter_mut() {
                            *v = T::zero();
                        }
                        continue;
                    }
                    let src_row = &x[(ch * h + iy as usize) * w..(ch * h + iy as usize + 1) * w];
                    for oj in 0..ow {
                        let ix = (oj * stride + kj) as isize - pad as isize;
                        dst[oi * ow + oj] = if ix < 0 || ix >= w as isize {
                            T::zero()
                        } else {
                            src_row[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

/// Scatter-add of a col buffer back into the input gradient.
#[allow(clippy::too_many_arguments)]
fn col2im_add<T: Scalar>(
    col: &[T],
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
    gx: &mut [T],
) {
    let opix = oh * ow;
    for ch in 0..c {
        for ki in 0..kh {
            for kj in 0..kw {
                let row = (ch * kh + ki) * kw + kj;
                let src = &col[row * opix..(row + 1) * opix];
                for oi in 0..oh {
                    let iy = (oi * stride + ki) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let base = (ch * h + iy as usize) * w;
                    for oj in 0..ow {
                        let ix = (oj * stride + kj) as isize - pad as isize;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        gx[base + ix as usize] = gx[base + ix as usize] + src[oi * ow + oj];
                    }
                }
            }
        }
    }
}

/// 2-D cross-correlation. input[N×C×H×W], kernel[F×C×kh×kw], optional
/// bias[F]. Output extent (H + 2·pad − kh)/stride + 1 must be ≥ 1.
pub fn conv2d<T: Scalar>(
    tape: &Tape,
    input: &Tensor<T>,
    kernel: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    stride: usize,
    pad: usize,
) -> Result<Tensor<T>> {
    let ish = input.shape();
    let ksh = kernel.shape();
    if ish.len() != 4 || ksh.len() != 4 {
        return Err(Error::Dim(format!(
            "conv2d wants 4-D input/kernel, got {ish:?} and {ksh:?}"
        )));
    }
    if ish[1] != ksh[1] {
        return Err(Error::Dim(format!(
            "conv2d channel mismatch: input {ish:?} vs kernel {ksh:?}"
        )));
    }
    let (n, c, h, w) = (ish[0], ish[1], ish[2], ish[3]);
    let (f, kh, kw) = (ksh[0], ksh[2], ksh[3]);
    if stride == 0 {
        return Err(Error::Config("conv2d stride must be >= 1".into()));
    }
    if h + 2 * pad < kh || w + 2 * pad < kw {
        return Err(Error::Config(format!(
            "conv2d non-positive output extent for input {ish:?}, kernel {ksh:?}, pad {pad}"
        )));
    }
    let oh = (h + 2 * pad - kh) / stride + 1;
    let ow = (w + 2 * pad - kw) / stride + 1;
    if let Some(b) = bias {
        if b.shape() != [f] {
            return Err(Error::Dim(format!(
                "conv2d bias shape {:?} vs {f} filters",
                b.shape()
            )));
        }
    }

    let pointwise = kh == 1 && kw == 1 && stride == 1 && pad == 0;
    let opix = oh * ow;
    let krows = c * kh * kw;
    let mut out = vec![T::zero(); n * f * opix];
    {
        let xd = input.data();
        let kd = kernel.data();
        let mut col = if pointwise {
            Vec::new()
        } else {
            vec![T::zero(); krows * opix]
        };
        for q in 0..n {
            let xq = &xd[q * c * h * w..(q + 1) * c * h * w];
            let oq = &mut out[q * f * opix..(q + 1) * f * opix];
            if pointwise {
                gemm_nn(f, opix, c, &kd, xq, oq);
            } else {
                im2col(xq, c, h, w, kh, kw, stride, pad, oh, ow, &mut col);
                gemm_nn(f, opix, krows, &kd, &col, oq);
            }
        }
        if let Some(b) = bias {
            let bd = b.data();
            for q in 0..n {
                for fi in 0..f {
                    let base = (q * f + fi) * opix;
                    for v in out[base..base + opix].iter_mut() {
                        *v = *v + bd[fi];
                    }
                }
            }
        }
    }
    let out = Tensor::from_vec(&[n, f, oh, ow], out)?;
    if tape.recording() {
        let (x2, k2, o2) = (input.clone(), kernel.clone(), out.clone());
        let b2 = bias.cloned();
        tape.record(&out, Box::new(move || {
            let Some(g) = o2.grad_ref() else { return };
            if let Some(b) = &b2 {
                if b.tracked() {
                    let mut db = vec![T::zero(); f];
                    for q in 0..n {
                        for fi in 0..f {
                            let base = (q * f + fi) * opix;
                            for &gv in g[base..base + opix].iter() {
                                db[fi] = db[fi] + gv;
                            }
                        }
                    }
                    accum_grad(b, &db);
                }
            }
            let want_dk = k2.tracked();
            let want_dx = x2.tracked();
            if !want_dk && !want_dx {
                return;
            }
            let xd = x2.data();
            let kd = k2.data();
            let mut dk = vec![T::zero(); f * krows];
            let mut dx = vec![T::zero(); if want_dx { n * c * h * w } else { 0 }];
            let mut col = if pointwise {
                Vec::new()
            } else {
                vec![T::zero(); krows * opix]
            };
            let mut dcol = if pointwise || !want_dx {
                Vec::new()
            } else {
                vec![T::zero(); krows * opix]
            };
            for q in 0..n {
                let xq = &xd[q * c * h * w..(q + 1) * c * h * w];
                let gq = &g[q * f * opix..(q + 1) * f * opix];
                if pointwise {
                    if want_dk {
                        gemm_nt(f, krows, opix, gq, xq, &mut dk);
                    }
                    if want_dx {
                        gemm_tn(
                            krows,
                            opix,
                            f,
                            &kd,
                            gq,
                            &mut dx[q * c * h * w..(q + 1) * c * h * w],
                        );
                    }
                } else {
                    im2col(xq, c, h, w, kh, kw, stride, pad, oh, ow, &mut col);
                    if want_dk {
                        gemm_nt(f, krows, opix, gq, &col, &mut dk);
                    }
                    if want_dx {
                        for v in dcol.iter_mut() {
                            *v = T::zero();
                        }
                        gemm_tn(krows, opix, f, &kd, gq, &mut dcol);
                        col2im_add(
                            &dcol,
                            c,
                            h,
                            w,
                            kh,
                            kw,
                            stride,
                            pad,
                            oh,
                            ow,
                            &mut dx[q * c * h * w..(q + 1) * c * h * w],
                        );
                    }
                }
            }
            drop(xd);
            drop(kd);
            drop(g);
            if want_dk {
                accum_grad(&k2, &dk);
            }
            if want_dx {
                accum_grad(&x2, &dx);
            }
        }));
    }
    Ok(out)
}

fn padded_extent(e: usize) -> usize {
    if e % 2 == 0 {
        e
    } else {
        e + 1
    }
}

/// 2×2/stride-2 max pool. Odd extents are padded right/bottom with the
/// background value 0; gradient goes to the first argmax in row-major
/// scan order.
pub fn maxpool2d<T: Scalar>(tape: &Tape, input: &Tensor<T>) -> Result<Tensor<T>> {
    pool2d(tape, input, true)
}

/// 2×2/stride-2 average pool (fixed window normalization 1/4); gradient
/// is distributed uniformly.
pub fn avgpool2d<T: Scalar>(tape: &Tape, input: &Tensor<T>) -> Result<Tensor<T>> {
    pool2d(tape, input, false)
}

fn pool2d<T: Scalar>(tape: &Tape, input: &Tensor<T>, max: bool) -> Result<Tensor<T>> {
    let ish = input.shape();
    if ish.len() != 4 {
        return Err(Error::Dim(format!("pool2d wants 4-D input, got {ish:?}")));
    }
    let (n, c, h, w) = (ish[0], ish[1], ish[2], ish[3]);
    let (ph, pw) = (padded_extent(h), padded_extent(w));
    let (oh, ow) = (ph / 2, pw / 2);
    let opix = oh * ow;
    let mut out = vec![T::zero(); n * c * opix];
    let mut arg: Vec<usize> = if max { vec![usize::MAX; n * c * opix] } else { Vec::new() };
    {
        let xd = input.data();
        for plane in 0..n * c {
            let xq = &xd[plane * h * w..(plane + 1) * h * w];
            for oi in 0..oh {
                for oj in 0..ow {
                    let oix = plane * opix + oi * ow + oj;
                    if max {
                        let mut best = T::zero(); // background pad value
                        let mut best_ix = usize::MAX;
                        let mut seen = false;
                        for di in 0..2 {
                            for dj in 0..2 {
                                let (iy, ix) = (oi * 2 + di, oj * 2 + dj);
                                let v = if iy < h && ix < w {
                                    xq[iy * w + ix]
                                } else {
                                    T::zero()
                                };
                                if !seen || v > best {
                                    best = v;
                                    best_ix = if iy < h && ix < w {
                                        iy * w + ix
                                    } else {
                                        usize::MAX
                                    };
                                    seen = true;
                                }
                            }
                        }
                        out[oix] = best;
                        arg[oix] = best_ix;
                    } else {
                        let mut acc = T::zero();
                        for di in 0..2 {
                            for dj in 0..2 {
                                let (iy, ix) = (oi * 2 + di, oj * 2 + dj);
                                if iy < h && ix < w {
                                    acc = acc + xq[iy * w + ix];
                                }
                            }
                        }
                        out[oix] = acc * T::from_f64(0.25);
                    }
                }
            }
        }
    }
    let out = Tensor::from_vec(&[n, c, oh, ow], out)?;
    if tape.recording() {
        let (x2, o2) = (input.clone(), out.clone());
        tape.record(&out, Box::new(move || {
            let Some(g) = o2.grad_ref() else { return };
            if !x2.tracked() {
                return;
            }
            let mut gx = x2.grad_mut();
            for plane in 0..n * c {
                for oi in 0..oh {
                    for oj in 0..ow {
                        let oix = plane * opix + oi * ow + oj;
                        if max {
                            let best_ix = arg[oix];
                            if best_ix != usize::MAX {
                                let ix = plane * h * w + best_ix;
                                gx[ix] = gx[ix] + g[oix];
                            }
                        } else {
                            let share = g[oix] * T::from_f64(0.25);
                            for di in 0..2 {
                                for dj in 0..2 {
                                    let (iy, jx) = (oi * 2 + di, oj * 2 + dj);
                                    if iy < h && jx < w {
                                        let ix = plane * h * w + iy * w + jx;
                                        gx[ix] = gx[ix] + share;
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }));
    }
    Ok(out)
}

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

/// Per-channel batch normalization on [N×C×H×W]. Train mode normalizes
/// by batch statistics and updates the running stats in place; eval mode
/// normalizes by the running stats.
#[allow(clippy::too_many_arguments)]
pub fn batchnorm2d<T: Scalar>(
    tape: &Tape,
    input: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    running_mean: &Tensor<T>,
    running_var: &Tensor<T>,
    train: bool,
) -> Result<Tensor<T>> {
    let ish = input.shape();
    if ish.len() != 4 {
        return Err(Error::Dim(format!("batchnorm wants 4-D input, got {ish:?}")));
    }
    let (n, c, h, w) = (ish[0], ish[1], ish[2], ish[3]);
    for (name, t) in [
        ("gamma", gamma),
        ("beta", beta),
        ("running_mean", running_mean),
        ("running_var", running_var),
    ] {
        if t.shape() != [c] {
            return Err(Error::Dim(format!(
                "batchnorm {name} shape {:?} vs {c} channels",
                t.shape()
            )));
        }
    }
    let m = n * h * w;
    if m == 0 {
        return Err(Error::Config("batchnorm over a zero-size batch".into()));
    }
    let eps = T::from_f64(BN_EPS);
    let inv_m = T::one() / T::from_f64(m as f64);

    let (mean, var) = if train {
        let xd = input.data();
        let mut mean = vec![T::zero(); c];
        let mut var = vec![T::zero(); c];
        for ch in 0..c {
            let mut acc = T::zero();
            for q in 0..n {
                let base = (q * c + ch) * h * w;
                for &v in xd[base..base + h * w].iter() {
                    acc = acc + v;
                }
            }
            let mu = acc * inv_m;
            let mut vacc = T::zero();
            for q in 0..n {
                let base = (q * c + ch) * h * w;
                for &v in xd[base..base + h * w].iter() {
                    let d = v - mu;
                    vacc = vacc + d * d;
                }
            }
            mean[ch] = mu;
            var[ch] = vacc * inv_m;
        }
        drop(xd);
        // momentum update of running stats
        let mom = T::from_f64(BN_MOMENTUM);
        let keep = T::one() - mom;
        {
            let mut rm = running_mean.data_mut();
            let mut rv = running_var.data_mut();
            for ch in 0..c {
                rm[ch] = keep * rm[ch] + mom * mean[ch];
                rv[ch] = keep * rv[ch] + mom * var[ch];
            }
        }
        (mean, var)
    } else {
        (running_mean.to_vec(), running_var.to_vec())
    };

    let mut out = vec![T::zero(); input.numel()];
    let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
    {
        let xd = input.data();
        let gd = gamma.data();
        let bd = beta.data();
        for q in 0..n {
            for ch in 0..c {
                let base = (q * c + ch) * h * w;
                let (mu, istd, ga, be) = (mean[ch], inv_std[ch], gd[ch], bd[ch]);
                for i in base..base + h * w {
                    out[i] = (xd[i] - mu) * istd * ga + be;
                }
            }
        }
    }
    let out = Tensor::from_vec(ish, out)?;
    if tape.recording() {
        let (x2, g2, b2, o2) = (input.clone(), gamma.clone(), beta.clone(), out.clone());
        tape.record(&out, Box::new(move || {
            let Some(g) = o2.grad_ref() else { return };
            let xd = x2.data();
            let gad = g2.data();
            let plane = h * w;
            let mut dgamma = vec![T::zero(); c];
            let mut dbeta = vec![T::zero(); c];
            let mut dx = if x2.tracked() {
                vec![T::zero(); xd.len()]
            } else {
                Vec::new()
            };
            for ch in 0..c {
                let (mu, istd) = (mean[ch], inv_std[ch]);
                let mut sum_g = T::zero();
                let mut sum_gx = T::zero();
                for q in 0..n {
                    let base = (q * c + ch) * plane;
                    for i in base..base + plane {
                        let xhat = (xd[i] - mu) * istd;
                        sum_g = sum_g + g[i];
                        sum_gx = sum_gx + g[i] * xhat;
                    }
                }
                dbeta[ch] = sum_g;
                dgamma[ch] = sum_gx;
                if x2.tracked() {
                    let ga = gad[ch];
                    if train {
                        // dx = gamma*istd/m * (m*g - sum_g - xhat*sum_gx)
                        let coef = ga * istd * inv_m;
                        let mf = T::from_f64(m as f64);
                        for q in 0..n {
                            let base = (q * c + ch) * plane;
                            for i in base..base + plane {
                                let xhat = (xd[i] - mu) * istd;
                                dx[i] = coef * (mf * g[i] - sum_g - xhat * sum_gx);
                            }
                        }
                    } else {
                        let coef = ga * istd;
                        for q in 0..n {
                            let base = (q * c + ch) * plane;
                            for i in base..base + plane {
                                dx[i] = coef * g[i];
                            }
                        }
                    }
                }
            }
            drop(xd);
            drop(gad);
            drop(g);
            if g2.tracked() {
                accum_grad(&g2, &dgamma);
            }
            if b2.tracked() {
                accum_grad(&b2, &dbeta);
            }
            if x2.tracked() {
                accum_grad(&x2, &dx);
            }
        }));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::check::{finite_diff_grad, max_rel_err, FD_STEP};
    use crate::tensor::ops::{mul, sum_all};
    use crate::util::SplitMix64;

    fn t64(shape: &[usize], v: Vec<f64>) -> Tensor<f64> {
        Tensor::from_vec(shape, v).unwrap()
    }

    #[test]
    fn conv_1x1_kernel_scales() {
        // 3x3 ones, 1x1 kernel [2] -> all-2 map
        let tape = Tape::inference();
        let x = t64(&[1, 1, 3, 3], vec![1.0; 9]);
        let k = t64(&[1, 1, 1, 1], vec![2.0]);
        let y = conv2d(&tape, &x, &k, None, 1, 0).unwrap();
        assert_eq!(y.shape(), &[1, 1, 3, 3]);
        assert_eq!(y.to_vec(), vec![2.0; 9]);
    }

    #[test]
    fn conv_3x3_all_ones_center_sum() {
        // input 1..9, all-ones 3x3 kernel, pad 1 -> center = 45
        let tape = Tape::inference();
        let x = t64(&[1, 1, 3, 3], (1..=9).map(f64::from).collect());
        let k = t64(&[1, 1, 3, 3], vec![1.0; 9]);
        let y = conv2d(&tape, &x, &k, None, 1, 1).unwrap();
        assert_eq!(y.shape(), &[1, 1, 3, 3]);
        assert_eq!(y.to_vec()[4], 45.0);
    }

    #[test]
    fn conv_non_positive_output_is_config_error() {
        let tape = Tape::inference();
        let x = t64(&[1, 1, 2, 2], vec![0.0; 4]);
        let k = t64(&[1, 1, 3, 3], vec![0.0; 9]);
        assert!(matches!(
            conv2d(&tape, &x, &k, None, 1, 0),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn conv_grad_check_random() {
        // 1x2x5x5 input, 3x2x3x3 kernel vs central differences
        let mut rng = SplitMix64::new(11);
        let xv: Vec<f64> = (0..50).map(|_| rng.uniform(-1.0, 1.0)).collect();
        let kv: Vec<f64> = (0..54).map(|_| rng.uniform(-1.0, 1.0)).collect();
        let bv: Vec<f64> = (0..3).map(|_| rng.uniform(-0.5, 0.5)).collect();
        let x = Tensor::param(&[1, 2, 5, 5], xv).unwrap();
        let k = Tensor::param(&[3, 2, 3, 3], kv).unwrap();
        let b = Tensor::param(&[3], bv).unwrap();
        let run = |tape: &Tape| {
            let y = conv2d(tape, &x, &k, Some(&b), 1, 1).unwrap();
            sum_all(tape, &mul(tape, &y, &y).unwrap())
        };
        let tape = Tape::new();
        let loss = run(&tape);
        tape.backward(&loss).unwrap();
        for p in [&x, &k, &b] {
            let analytic = p.grad().unwrap();
            let fd = finite_diff_grad(p, FD_STEP, || run(&Tape::inference()).item());
            assert!(max_rel_err(&analytic, &fd) < 1e-3);
        }
    }

    #[test]
    fn maxpool_and_avgpool_2x2() {
        let tape = Tape::inference();
        let x = t64(&[1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]);
        assert_eq!(maxpool2d(&tape, &x).unwrap().to_vec(), vec![4.0]);
        assert_eq!(avgpool2d(&tape, &x).unwrap().to_vec(), vec![2.5]);
    }

    #[test]
    fn maxpool_tie_routes_grad_to_first_rowmajor() {
        let tape = Tape::new();
        let x = Tensor::param(&[1, 1, 2, 2], vec![7.0; 4]).unwrap();
        let y = maxpool2d(&tape, &x).unwrap();
        assert_eq!(y.to_vec(), vec![7.0]);
        let loss = sum_all(&tape, &y);
        tape.backward(&loss).unwrap();
        assert_eq!(x.grad().unwrap(), vec![1.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn pool_pads_odd_extents() {
        let tape = Tape::inference();
        let x = t64(&[1, 1, 3, 3], (1..=9).map(f64::from).collect());
        let y = maxpool2d(&tape, &x).unwrap();
        assert_eq!(y.shape(), &[1, 1, 2, 2]);
        // windows: [1,2,4,5], [3,-,6,-], [7,8,-,-], [9,-,-,-]
        assert_eq!(y.to_vec(), vec![5.0, 6.0, 8.0, 9.0]);
    }

    #[test]
    fn pool_grad_check() {
        let mut rng = SplitMix64::new(21);
        let xv: Vec<f64> = (0..32).map(|_| rng.uniform(-1.0, 1.0)).collect();
        let x = Tensor::param(&[1, 2, 4, 4], xv).unwrap();
        for max in [true, false] {
            let run = |tape: &Tape| {
                let y = if max {
                    maxpool2d(tape, &x).unwrap()
                } else {
                    avgpool2d(tape, &x).unwrap()
                };
                sum_all(tape, &mul(tape, &y, &y).unwrap())
            };
            let tape = Tape::new();
            let loss = run(&tape);
            tape.backward(&loss).unwrap();
            let analytic = x.grad().unwrap();
            let fd = finite_diff_grad(&x, FD_STEP, || run(&Tape::inference()).item());
            assert!(max_rel_err(&analytic, &fd) < 1e-3, "max={max}");
            x.zero_grad();
        }
    }

    fn bn_params(c: usize) -> (Tensor<f64>, Tensor<f64>, Tensor<f64>, Tensor<f64>) {
        (
            Tensor::param(&[c], vec![1.0; c]).unwrap(),
            Tensor::param(&[c], vec![0.0; c]).unwrap(),
            Tensor::zeros(&[c]),
            Tensor::from_vec(&[c], vec![1.0; c]).unwrap(),
        )
    }

    #[test]
    fn batchnorm_identity_on_standardized_input() {
        // zero-mean unit-var per channel, gamma=1 beta=0 -> output ≈ input
        let vals = vec![-1.0, 1.0, -1.0, 1.0, 1.0, -1.0, 1.0, -1.0];
        let x = t64(&[2, 1, 2, 2], vals.clone());
        let (g, b, rm, rv) = bn_params(1);
        let tape = Tape::inference();
        let y = batchnorm2d(&tape, &x, &g, &b, &rm, &rv, true).unwrap();
        for (yv, xv) in y.to_vec().iter().zip(vals.iter()) {
            assert!((yv - xv).abs() < 1e-4);
        }
    }

    #[test]
    fn batchnorm_constant_channel_gives_beta() {
        let x = t64(&[1, 2, 2, 2], vec![3.0, 3.0, 3.0, 3.0, -1.5, -1.5, -1.5, -1.5]);
        let (g, b, rm, rv) = bn_params(2);
        b.data_mut()[0] = 0.7;
        b.data_mut()[1] = -0.2;
        let tape = Tape::inference();
        let y = batchnorm2d(&tape, &x, &g, &b, &rm, &rv, true).unwrap();
        let yd = y.to_vec();
        for &v in &yd[..4] {
            assert!((v - 0.7).abs() < 1e-4);
        }
        for &v in &yd[4..] {
            assert!((v + 0.2).abs() < 1e-4);
        }
    }

    #[test]
    fn batchnorm_grad_check() {
        let mut rng = SplitMix64::new(31);
        let xv: Vec<f64> = (0..24).map(|_| rng.uniform(-2.0, 2.0)).collect();
        let x = Tensor::param(&[2, 3, 2, 2], xv).unwrap();
        let g = Tensor::param(&[3], vec![1.2, 0.8, -0.5]).unwrap();
        let b = Tensor::param(&[3], vec![0.1, -0.3, 0.0]).unwrap();
        let run = |tape: &Tape| {
            let rm = Tensor::zeros(&[3]);
            let rv = Tensor::from_vec(&[3], vec![1.0; 3]).unwrap();
            let y = batchnorm2d(tape, &x, &g, &b, &rm, &rv, true).unwrap();
            sum_all(tape, &mul(tape, &y, &y).unwrap())
        };
        let tape = Tape::new();
        let loss = run(&tape);
        tape.backward(&loss).unwrap();
        for p in [&x, &g, &b] {
            let analytic = p.grad().unwrap();
            let fd = finite_diff_grad(p, FD_STEP, || run(&Tape::inference()).item());
            assert!(max_rel_err(&analytic, &fd) < 1e-3);
        }
    }

    #[test]
    fn batchnorm_updates_running_stats() {
        let x = t64(&[1, 1, 2, 2], vec![2.0, 2.0, 2.0, 2.0]);
        let (g, b, rm, rv) = bn_params(1);
        let tape = Tape::inference();
        batchnorm2d(&tape, &x, &g, &b, &rm, &rv, true).unwrap();
        // rm = 0.9*0 + 0.1*2 = 0.2 ; rv = 0.9*1 + 0.1*0 = 0.9
        assert!((rm.to_vec()[0] - 0.2).abs() < 1e-12);
        assert!((rv.to_vec()[0] - 0.9).abs() < 1e-12);
    }
}
