//! Differentiable operations: elementwise math, reductions, shape
//! surgery, matrix products, softmax, embedding lookup, cross-entropy.
//!
//! Each function computes the forward result and, when the tape is
//! recording, pushes a backward closure capturing the involved tensors.

use super::gemm::{gemm_nn, gemm_nt, gemm_tn};
use super::{accum_grad, Scalar, Tape, Tensor};
use crate::error::{Error, Result};

fn dim_err<T>(msg: String) -> Result<T> {
    Err(Error::Dim(msg))
}

/// Strides of `b` against the shape of `a`, with 0 on broadcast axes.
/// `b` may have fewer axes (left-padded with 1) or extent-1 axes.
fn broadcast_strides(a_shape: &[usize], b_shape: &[usize]) -> Option<Vec<usize>> {
    if b_shape.len() > a_shape.len() {
        return None;
    }
    let pad = a_shape.len() - b_shape.len();
    let mut strides = vec![0usize; a_shape.len()];
    let mut acc = 1usize;
    for ax in (0..a_shape.len()).rev() {
        let bdim = if ax < pad { 1 } else { b_shape[ax - pad] };
        if bdim == a_shape[ax] {
            strides[ax] = acc;
            acc *= bdim;
        } else if bdim == 1 {
            strides[ax] = 0;
        } else {
            return None;
        }
    }
    Some(strides)
}

/// Visit every flat output index together with the broadcast offset into b.
fn for_each_bcast(a_shape: &[usize], b_strides: &[usize], mut f: impl FnMut(usize, usize)) {
    let rank = a_shape.len();
    let n: usize = a_shape.iter().product();
    let mut idx = vec![0usize; rank];
    let mut boff = 0usize;
    for flat in 0..n {
        f(flat, boff);
        for ax in (0..rank).rev() {
            idx[ax] += 1;
            boff += b_strides[ax];
            if idx[ax] < a_shape[ax] {
                break;
            }
            boff -= b_strides[ax] * a_shape[ax];
            idx[ax] = 0;
        }
    }
}

fn binary_op<T: Scalar>(
    tape: &Tape,
    a: &Tensor<T>,
    b: &Tensor<T>,
    name: &str,
    fwd: impl Fn(T, T) -> T,
    // (a_val, b_val, out_grad) -> (da, db)
    bwd: impl Fn(T, T, T) -> (T, T) + 'static,
) -> Result<Tensor<T>> {
    if a.shape() == b.shape() {
        let out: Vec<T> = {
            let ad = a.data();
            let bd = b.data();
            ad.iter().zip(bd.iter()).map(|(&x, &y)| fwd(x, y)).collect()
        };
        let out = Tensor::from_vec(a.shape(), out)?;
        if tape.recording() {
            let (a2, b2, o2) = (a.clone(), b.clone(), out.clone());
            tape.record(&out, Box::new(move || {
                let Some(g) = o2.grad_ref() else { return };
                let ad = a2.data();
                let bd = b2.data();
                let pairs: Vec<(T, T)> = g
                    .iter()
                    .zip(ad.iter().zip(bd.iter()))
                    .map(|(&gv, (&x, &y))| bwd(x, y, gv))
                    .collect();
                drop(ad);
                drop(bd);
                drop(g);
                if a2.tracked() {
                    let mut ga = a2.grad_mut();
                    for (gv, &(da, _)) in ga.iter_mut().zip(pairs.iter()) {
                        *gv = *gv + da;
                    }
                }
                if b2.tracked() {
                    let mut gb = b2.grad_mut();
                    for (gv, &(_, db)) in gb.iter_mut().zip(pairs.iter()) {
                        *gv = *gv + db;
                    }
                }
            }));
        }
        return Ok(out);
    }

    // rhs broadcast
    let Some(bstr) = broadcast_strides(a.shape(), b.shape()) else {
        return dim_err(format!(
            "{name}: shapes {:?} and {:?} do not broadcast",
            a.shape(),
            b.shape()
        ));
    };
    let mut out = vec![T::zero(); a.numel()];
    {
        let ad = a.data();
        let bd = b.data();
        for_each_bcast(a.shape(), &bstr, |i, bo| out[i] = fwd(ad[i], bd[bo]));
    }
    let out = Tensor::from_vec(a.shape(), out)?;
    if tape.recording() {
        let (a2, b2, o2) = (a.clone(), b.clone(), out.clone());
        let a_shape = a.shape().to_vec();
        tape.record(&out, Box::new(move || {
            let Some(g) = o2.grad_ref() else { return };
            let ad = a2.data();
            let bd = b2.data();
            let mut da = vec![T::zero(); ad.len()];
            let mut db = vec![T::zero(); bd.len()];
            for_each_bcast(&a_shape, &bstr, |i, bo| {
                let (dx, dy) = bwd(ad[i], bd[bo], g[i]);
                da[i] = da[i] + dx;
                db[bo] = db[bo] + dy;
            });
            drop(ad);
            drop(bd);
            drop(g);
            if a2.tracked() {
                accum_grad(&a2, &da);
            }
            if b2.tracked() {
                accum_grad(&b2, &db);
            }
        }));
    }
    Ok(out)
}

/// Elementwise add; rhs may broadcast (extent-1 or missing leading axes).
pub fn add<T: Scalar>(tape: &Tape, a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    binary_op(tape, a, b, "add", |x, y| x + y, |_, _, g| (g, g))
}

/// Elementwise multiply; rhs may broadcast.
pub fn mul<T: Scalar>(tape: &Tape, a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    binary_op(tape, a, b, "mul", |x, y| x * y, |x, y, g| (g * y, g * x))
}

fn unary_op<T: Scalar>(
    tape: &Tape,
    a: &Tensor<T>,
    fwd: impl Fn(T) -> T,
    // (input, output, out_grad) -> da
    bwd: impl Fn(T, T, T) -> T + 'static,
) -> Tensor<T> {
    let out: Vec<T> = a.data().iter().map(|&x| fwd(x)).collect();
    let out = Tensor::from_vec(a.shape(), out).expect("same shape");
    if tape.recording() {
        let (a2, o2) = (a.clone(), out.clone());
        tape.record(&out, Box::new(move || {
            let Some(g) = o2.grad_ref() else { return };
            if !a2.tracked() {
                return;
            }
            let da: Vec<T> = {
                let ad = a2.data();
                let od = o2.data();
                g.iter()
                    .zip(ad.iter().zip(od.iter()))
                    .map(|(&gv, (&x, &y))| bwd(x, y, gv))
                    .collect()
            };
            drop(g);
            accum_grad(&a2, &da);
        }));
    }
    out
}

pub fn neg<T: Scalar>(tape: &Tape, a: &Tensor<T>) -> Tensor<T> {
    unary_op(tape, a, |x| -x, |_, _, g| -g)
}

/// Multiply by a compile-time constant (not differentiated through c).
pub fn scale<T: Scalar>(tape: &Tape, a: &Tensor<T>, c: T) -> Tensor<T> {
    unary_op(tape, a, |x| x * c, move |_, _, g| g * c)
}

pub fn relu<T: Scalar>(tape: &Tape, a: &Tensor<T>) -> Tensor<T> {
    unary_op(
        tape,
        a,
        |x| if x > T::zero() { x } else { T::zero() },
        |x, _, g| if x > T::zero() { g } else { T::zero() },
    )
}

pub fn tanh<T: Scalar>(tape: &Tape, a: &Tensor<T>) -> Tensor<T> {
    unary_op(tape, a, |x| x.tanh(), |_, y, g| g * (T::one() - y * y))
}

pub fn sigmoid<T: Scalar>(tape: &Tape, a: &Tensor<T>) -> Tensor<T> {
    unary_op(
        tape,
        a,
        |x| T::one() / (T::one() + (-x).exp()),
        |_, y, g| g * y * (T::one() - y),
    )
}

pub fn sum_all<T: Scalar>(tape: &Tape, a: &Tensor<T>) -> Tensor<T> {
    let s = a.data().iter().fold(T::zero(), |acc, &x| acc + x);
    let out = Tensor::scalar(s);
    if tape.recording() {
        let (a2, o2) = (a.clone(), out.clone());
        tape.record(&out, Box::new(move || {
            let Some(g) = o2.grad_ref() else { return };
            let gv = g[0];
            drop(g);
            if a2.tracked() {
                let mut ga = a2.grad_mut();
                for v in ga.iter_mut() {
                    *v = *v + gv;
                }
            }
        }));
    }
    out
}

pub fn mean_all<T: Scalar>(tape: &Tape, a: &Tensor<T>) -> Tensor<T> {
    let n = T::from_f64(a.numel() as f64);
    let s = sum_all(tape, a);
    scale(tape, &s, T::one() / n)
}

/// Concatenate along `axis`; all other extents must agree.
pub fn concat<T: Scalar>(tape: &Tape, parts: &[&Tensor<T>], axis: usize) -> Result<Tensor<T>> {
    if parts.is_empty() {
        return dim_err("concat of zero tensors".into());
    }
    let rank = parts[0].shape().len();
    if axis >= rank {
        return dim_err(format!(
            "concat axis {axis} out of range for rank {rank}"
        ));
    }
    let mut out_shape = parts[0].shape().to_vec();
    let mut axis_total = 0usize;
    for p in parts {
        if p.shape().len() != rank {
            return dim_err(format!(
                "concat rank mismatch: {:?} vs {:?}",
                parts[0].shape(),
                p.shape()
            ));
        }
        for (ax, (&d0, &d)) in out_shape.iter().zip(p.shape().iter()).enumerate() {
            if ax != axis && d0 != d {
                return dim_err(format!(
                    "concat extent mismatch off axis {axis}: {:?} vs {:?}",
                    parts[0].shape(),
                    p.shape()
                ));
            }
        }
        axis_total += p.shape()[axis];
    }
    out_shape[axis] = axis_total;

    let outer: usize = out_shape[..axis].iter().product();
    let inner: usize = out_shape[axis + 1..].iter().product();
    let mut out = vec![T::zero(); outer * axis_total * inner];
    let mut offsets = Vec::with_capacity(parts.len());
    {
        let mut axis_off = 0usize;
        for p in parts {
            offsets.push(axis_off);
            let pd = p.data();
            let plen = p.shape()[axis];
            for o in 0..outer {
                let src = &pd[o * plen * inner..(o + 1) * plen * inner];
                let dst_start = (o * axis_total + axis_off) * inner;
                out[dst_start..dst_start + plen * inner].copy_from_slice(src);
            }
            axis_off += plen;
        }
    }
    let out = Tensor::from_vec(&out_shape, out)?;
    if tape.recording() {
        let parts2: Vec<Tensor<T>> = parts.iter().map(|p| (*p).clone()).collect();
        let o2 = out.clone();
        tape.record(&out, Box::new(move || {
            let Some(g) = o2.grad_ref() else { return };
            for (p, &axis_off) in parts2.iter().zip(offsets.iter()) {
                if !p.tracked() {
                    continue;
                }
                let plen = p.shape()[axis];
                let mut gp = p.grad_mut();
                for o in 0..outer {
                    let src_start = (o * axis_total + axis_off) * inner;
                    let dst = &mut gp[o * plen * inner..(o + 1) * plen * inner];
                    let src = &g[src_start..src_start + plen * inner];
                    for (d, &s) in dst.iter_mut().zip(src.iter()) {
                        *d = *d + s;
                    }
                }
            }
        }));
    }
    Ok(out)
}

/// Contiguous slice of length `len` starting at `start` along `axis`.
pub fn narrow<T: Scalar>(
    tape: &Tape,
    a: &Tensor<T>,
    axis: usize,
    start: usize,
    len: usize,
) -> Result<Tensor<T>> {
    let rank = a.shape().len();
    if axis >= rank {
        return dim_err(format!("narrow axis {axis} out of range for rank {rank}"));
    }
    let extent = a.shape()[axis];
    if start + len > extent || len == 0 {
        return dim_err(format!(
            "narrow [{start}..{}) out of extent {extent} on {:?}",
            start + len,
            a.shape()
        ));
    }
    let outer: usize = a.shape()[..axis].iter().product();
    let inner: usize = a.shape()[axis + 1..].iter().product();
    let mut out_shape = a.shape().to_vec();
    out_shape[axis] = len;
    let mut out = vec![T::zero(); outer * len * inner];
    {
        let ad = a.data();
        for o in 0..outer {
            let src_start = (o * extent + start) * inner;
            out[o * len * inner..(o + 1) * len * inner]
                .copy_from_slice(&ad[src_start..src_start + len * inner]);
        }
    }
    let out = Tensor::from_vec(&out_shape, out)?;
    if tape.recording() {
        let (a2, o2) = (a.clone(), out.clone());
        tape.record(&out, Box::new(move || {
            let Some(g) = o2.grad_ref() else { return };
            if !a2.tracked() {
                return;
            }
            let mut ga = a2.grad_mut();
            for o in 0..outer {
                let dst_start = (o * extent + start) * inner;
                let src = &g[o * len * inner..(o + 1) * len * inner];
                let dst = &mut ga[dst_start..dst_start + len * inner];
                for (d, &s) in dst.iter_mut().zip(src.iter()) {
                    *d = *d + s;
                }
            }
        }));
    }
    Ok(out)
}

/// Same data, new shape (element count must match).
pub fn reshape<T: Scalar>(tape: &Tape, a: &Tensor<T>, shape: &[usize]) -> Result<Tensor<T>> {
    let want: usize = shape.iter().product();
    if want != a.numel() {
        return dim_err(format!(
            "reshape {:?} -> {:?} changes element count",
            a.shape(),
            shape
        ));
    }
    let out = Tensor::from_vec(shape, a.to_vec())?;
    if tape.recording() {
        let (a2, o2) = (a.clone(), out.clone());
        tape.record(&out, Box::new(move || {
            let Some(g) = o2.grad_ref() else { return };
            if a2.tracked() {
                accum_grad(&a2, &g);
            }
        }));
    }
    Ok(out)
}

/// Numerically stable softmax along `axis` (max subtraction). `-inf`
/// inputs get exactly zero weight.
pub fn softmax<T: Scalar>(tape: &Tape, a: &Tensor<T>, axis: usize) -> Result<Tensor<T>> {
    let rank = a.shape().len();
    if axis >= rank {
        return dim_err(format!("softmax axis {axis} out of range for rank {rank}"));
    }
    let len = a.shape()[axis];
    let outer: usize = a.shape()[..axis].iter().product();
    let inner: usize = a.shape()[axis + 1..].iter().product();
    let mut out = vec![T::zero(); a.numel()];
    {
        let ad = a.data();
        for o in 0..outer {
            for i in 0..inner {
                let at = |j: usize| (o * len + j) * inner + i;
                let mut mx = T::neg_infinity();
                for j in 0..len {
                    if ad[at(j)] > mx {
                        mx = ad[at(j)];
                    }
                }
                let mut denom = T::zero();
                for j in 0..len {
                    let e = (ad[at(j)] - mx).exp();
                    out[at(j)] = e;
                    denom = denom + e;
                }
                for j in 0..len {
                    out[at(j)] = out[at(j)] / denom;
                }
            }
        }
    }
    let out = Tensor::from_vec(a.shape(), out)?;
    if tape.recording() {
        let (a2, o2) = (a.clone(), out.clone());
        tape.record(&out, Box::new(move || {
            let Some(g) = o2.grad_ref() else { return };
            if !a2.tracked() {
                return;
            }
            let od = o2.data();
            let mut da = vec![T::zero(); od.len()];
            for o in 0..outer {
                for i in 0..inner {
                    let at = |j: usize| (o * len + j) * inner + i;
                    let mut dot = T::zero();
                    for j in 0..len {
                        dot = dot + od[at(j)] * g[at(j)];
                    }
                    for j in 0..len {
                        da[at(j)] = od[at(j)] * (g[at(j)] - dot);
                    }
                }
            }
            drop(od);
            drop(g);
            accum_grad(&a2, &da);
        }));
    }
    Ok(out)
}

/// Replace masked elements with `value`; gradient is blocked there.
pub fn mask_fill<T: Scalar>(
    tape: &Tape,
    a: &Tensor<T>,
    mask: &[bool],
    value: T,
) -> Result<Tensor<T>> {
    if mask.len() != a.numel() {
        return dim_err(format!(
            "mask length {} vs tensor {:?}",
            mask.len(),
            a.shape()
        ));
    }
    let out: Vec<T> = a
        .data()
        .iter()
        .zip(mask.iter())
        .map(|(&x, &m)| if m { value } else { x })
        .collect();
    let out = Tensor::from_vec(a.shape(), out)?;
    if tape.recording() {
        let (a2, o2) = (a.clone(), out.clone());
        let mask2 = mask.to_vec();
        tape.record(&out, Box::new(move || {
            let Some(g) = o2.grad_ref() else { return };
            if !a2.tracked() {
                return;
            }
            let da: Vec<T> = g
                .iter()
                .zip(mask2.iter())
                .map(|(&gv, &m)| if m { T::zero() } else { gv })
                .collect();
            drop(g);
            accum_grad(&a2, &da);
        }));
    }
    Ok(out)
}

/// 2-D matrix product a[m×k]·b[k×n].
pub fn matmul<T: Scalar>(tape: &Tape, a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let (ash, bsh) = (a.shape(), b.shape());
    if ash.len() != 2 || bsh.len() != 2 || ash[1] != bsh[0] {
        return dim_err(format!("matmul shape mismatch: {ash:?} · {bsh:?}"));
    }
    let (m, k, n) = (ash[0], ash[1], bsh[1]);
    let mut out = vec![T::zero(); m * n];
    gemm_nn(m, n, k, &a.data(), &b.data(), &mut out);
    let out = Tensor::from_vec(&[m, n], out)?;
    if tape.recording() {
        let (a2, b2, o2) = (a.clone(), b.clone(), out.clone());
        tape.record(&out, Box::new(move || {
            let Some(g) = o2.grad_ref() else { return };
            if a2.tracked() {
                // da += g · bᵀ
                let mut da = vec![T::zero(); m * k];
                gemm_nt(m, k, n, &g, &b2.data(), &mut da);
                accum_grad(&a2, &da);
            }
            if b2.tracked() {
                // db += aᵀ · g
                let mut db = vec![T::zero(); k * n];
                gemm_tn(k, n, m, &a2.data(), &g, &mut db);
                accum_grad(&b2, &db);
            }
        }));
    }
    Ok(out)
}

/// Batched 3-D matrix product a[N×m×k]·b[N×k×n].
pub fn bmm<T: Scalar>(tape: &Tape, a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let (ash, bsh) = (a.shape(), b.shape());
    if ash.len() != 3 || bsh.len() != 3 || ash[0] != bsh[0] || ash[2] != bsh[1] {
        return dim_err(format!("bmm shape mismatch: {ash:?} · {bsh:?}"));
    }
    let (nb, m, k, n) = (ash[0], ash[1], ash[2], bsh[2]);
    let mut out = vec![T::zero(); nb * m * n];
    {
        let ad = a.data();
        let bd = b.data();
        for q in 0..nb {
            gemm_nn(
                m,
                n,
                k,
                &ad[q * m * k..(q + 1) * m * k],
                &bd[q * k * n..(q + 1) * k * n],
                &mut out[q * m * n..(q + 1) * m * n],
            );
        }
    }
    let out = Tensor::from_vec(&[nb, m, n], out)?;
    if tape.recording() {
        let (a2, b2, o2) = (a.clone(), b.clone(), out.clone());
        tape.record(&out, Box::new(move || {
            let Some(g) = o2.grad_ref() else { return };
            if a2.tracked() {
                let mut da = vec![T::zero(); nb * m * k];
                let bd = b2.data();
                for q in 0..nb {
                    gemm_nt(
                        m,
                        k,
                        n,
                        &g[q * m * n..(q + 1) * m * n],
                        &bd[q * k * n..(q + 1) * k * n],
                        &mut da[q * m * k..(q + 1) * m * k],
                    );
                }
                drop(bd);
                accum_grad(&a2, &da);
            }
            if b2.tracked() {
                let mut db = vec![T::zero(); nb * k * n];
                let ad = a2.data();
                for q in 0..nb {
                    gemm_tn(
                        k,
                        n,
                        m,
                        &ad[q * m * k..(q + 1) * m * k],
                        &g[q * m * n..(q + 1) * m * n],
                        &mut db[q * k * n..(q + 1) * k * n],
                    );
                }
                drop(ad);
                accum_grad(&b2, &db);
            }
        }));
    }
    Ok(out)
}

/// Row lookup: table[V×E] gathered at `indices` -> [N×E].
pub fn embedding<T: Scalar>(
    tape: &Tape,
    table: &Tensor<T>,
    indices: &[usize],
) -> Result<Tensor<T>> {
    let tsh = table.shape();
    if tsh.len() != 2 {
        return dim_err(format!("embedding table must be 2-D, got {tsh:?}"));
    }
    let (v, e) = (tsh[0], tsh[1]);
    if let Some(&bad) = indices.iter().find(|&&i| i >= v) {
        return dim_err(format!("embedding index {bad} out of vocabulary {v}"));
    }
    let n = indices.len();
    let mut out = vec![T::zero(); n * e];
    {
        let td = table.data();
        for (row, &ix) in indices.iter().enumerate() {
            out[row * e..(row + 1) * e].copy_from_slice(&td[ix * e..(ix + 1) * e]);
        }
    }
    let out = Tensor::from_vec(&[n, e], out)?;
    if tape.recording() {
        let (t2, o2) = (table.clone(), out.clone());
        let idx = indices.to_vec();
        tape.record(&out, Box::new(move || {
            let Some(g) = o2.grad_ref() else { return };
            if !t2.tracked() {
                return;
            }
            let mut gt = t2.grad_mut();
            for (row, &ix) in idx.iter().enumerate() {
                let dst = &mut gt[ix * e..(ix + 1) * e];
                let src = &g[row * e..(row + 1) * e];
                for (d, &s) in dst.iter_mut().zip(src.iter()) {
                    *d = *d + s;
                }
            }
        }));
    }
    Ok(out)
}

/// Mean over unmasked rows of ann[N×L×C] -> [N×C]. `mask[n*L + l]` true
/// marks padding. Errors if any sample is fully masked.
pub fn masked_mean_rows<T: Scalar>(
    tape: &Tape,
    ann: &Tensor<T>,
    mask: &[bool],
) -> Result<Tensor<T>> {
    let sh = ann.shape();
    if sh.len() != 3 {
        return dim_err(format!("masked_mean_rows wants [N,L,C], got {sh:?}"));
    }
    let (n, l, c) = (sh[0], sh[1], sh[2]);
    if mask.len() != n * l {
        return dim_err(format!("mask length {} vs N*L={}", mask.len(), n * l));
    }
    let mut counts = vec![0usize; n];
    for q in 0..n {
        counts[q] = mask[q * l..(q + 1) * l].iter().filter(|&&m| !m).count();
        if counts[q] == 0 {
            return Err(Error::Usage(format!(
                "sample {q}: all annotation positions are masked"
            )));
        }
    }
    let mut out = vec![T::zero(); n * c];
    {
        let ad = ann.data();
        for q in 0..n {
            for j in 0..l {
                if mask[q * l + j] {
                    continue;
                }
                let src = &ad[(q * l + j) * c..(q * l + j + 1) * c];
                let dst = &mut out[q * c..(q + 1) * c];
                for (d, &s) in dst.iter_mut().zip(src.iter()) {
                    *d = *d + s;
                }
            }
            let inv = T::one() / T::from_f64(counts[q] as f64);
            for d in out[q * c..(q + 1) * c].iter_mut() {
                *d = *d * inv;
            }
        }
    }
    let out = Tensor::from_vec(&[n, c], out)?;
    if tape.recording() {
        let (a2, o2) = (ann.clone(), out.clone());
        let mask2 = mask.to_vec();
        tape.record(&out, Box::new(move || {
            let Some(g) = o2.grad_ref() else { return };
            if !a2.tracked() {
                return;
            }
            let mut ga = a2.grad_mut();
            for q in 0..n {
                let inv = T::one() / T::from_f64(counts[q] as f64);
                for j in 0..l {
                    if mask2[q * l + j] {
                        continue;
                    }
                    let dst = &mut ga[(q * l + j) * c..(q * l + j + 1) * c];
                    let src = &g[q * c..(q + 1) * c];
                    for (d, &s) in dst.iter_mut().zip(src.iter()) {
                        *d = *d + s * inv;
                    }
                }
            }
        }));
    }
    Ok(out)
}

/// Permute [N×C×H×W] to the attention layout [N×(H·W)×C].
pub fn nchw_to_nlc<T: Scalar>(tape: &Tape, x: &Tensor<T>) -> Result<Tensor<T>> {
    let sh = x.shape();
    if sh.len() != 4 {
        return dim_err(format!("nchw_to_nlc wants rank 4, got {sh:?}"));
    }
    let (n, c, h, w) = (sh[0], sh[1], sh[2], sh[3]);
    let l = h * w;
    let mut out = vec![T::zero(); n * l * c];
    {
        let xd = x.data();
        for q in 0..n {
            for ch in 0..c {
                for p in 0..l {
                    out[(q * l + p) * c + ch] = xd[(q * c + ch) * l + p];
                }
            }
        }
    }
    let out = Tensor::from_vec(&[n, l, c], out)?;
    if tape.recording() {
        let (x2, o2) = (x.clone(), out.clone());
        tape.record(&out, Box::new(move || {
            let Some(g) = o2.grad_ref() else { return };
            if !x2.tracked() {
                return;
            }
            let mut gx = x2.grad_mut();
            for q in 0..n {
                for ch in 0..c {
                    for p in 0..l {
                        gx[(q * c + ch) * l + p] = gx[(q * c + ch) * l + p] + g[(q * l + p) * c + ch];
                    }
                }
            }
        }));
    }
    Ok(out)
}

/// Sum of negative log-softmax probabilities of `targets` over the rows
/// of `logits[N×V]` where `valid` is set. Returns the scalar sum; divide
/// by the valid count for a mean. Fused forward/backward.
pub fn cross_entropy_sum<T: Scalar>(
    tape: &Tape,
    logits: &Tensor<T>,
    targets: &[usize],
    valid: &[bool],
) -> Result<Tensor<T>> {
    let sh = logits.shape();
    if sh.len() != 2 || targets.len() != sh[0] || valid.len() != sh[0] {
        return dim_err(format!(
            "cross_entropy: logits {sh:?} with {} targets / {} valid flags",
            targets.len(),
            valid.len()
        ));
    }
    let (n, v) = (sh[0], sh[1]);
    if let Some(&bad) = targets.iter().find(|&&t| t >= v) {
        return dim_err(format!("target index {bad} out of vocabulary {v}"));
    }
    let mut probs = vec![T::zero(); n * v];
    let mut loss = T::zero();
    {
        let ld = logits.data();
        for r in 0..n {
            let row = &ld[r * v..(r + 1) * v];
            let mx = row.iter().fold(T::neg_infinity(), |m, &x| m.max(x));
            let mut denom = T::zero();
            for (j, &x) in row.iter().enumerate() {
                let e = (x - mx).exp();
                probs[r * v + j] = e;
                denom = denom + e;
            }
            for j in 0..v {
                probs[r * v + j] = probs[r * v + j] / denom;
            }
            if valid[r] {
                // -log p[t] = log(denom) - (x_t - mx)
                loss = loss + denom.ln() - (row[targets[r]] - mx);
            }
        }
    }
    let out = Tensor::scalar(loss);
    if tape.recording() {
        let (l2, o2) = (logits.clone(), out.clone());
        let targets2 = targets.to_vec();
        let valid2 = valid.to_vec();
        tape.record(&out, Box::new(move || {
            let Some(g) = o2.grad_ref() else { return };
            let gv = g[0];
            drop(g);
            if !l2.tracked() {
                return;
            }
            let mut gl = l2.grad_mut();
            for r in 0..n {
                if !valid2[r] {
                    continue;
                }
                for j in 0..v {
                    let onehot = if j == targets2[r] { T::one() } else { T::zero() };
                    gl[r * v + j] = gl[r * v + j] + gv * (probs[r * v + j] - onehot);
                }
            }
        }));
    }
    Ok(out)
}

/// Argmax of each row of a [N×V] tensor; lowest index wins ties.
pub fn argmax_rows<T: Scalar>(t: &Tensor<T>) -> Vec<usize> {
    let sh = t.shape();
    debug_assert_eq!(sh.len(), 2);
    let (n, v) = (sh[0], sh[1]);
    let d = t.data();
    (0..n)
        .map(|r| {
            let row = &d[r * v..(r + 1) * v];
            let mut best = 0usize;
            for (j, &x) in row.iter().enumerate() {
                if x > row[best] {
                    best = j;
                }
            }
            best
        })
        .collect()
}
