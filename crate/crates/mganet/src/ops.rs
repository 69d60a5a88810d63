//! Pure forward/backward implementations of the network's operation set.
//!
//! Feature maps are rank-3 `(F, T, C)`: frequency rows, time columns,
//! channels last, row-major. Kernels are `(kh, kw, Cin, Cout)`. All
//! functions here are side-effect free; the autodiff tape records them and
//! replays the matching `*_backward` rules.

use crate::error::{Error, Result};
use crate::tensor::{gemm_rm, Scalar, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Padding {
    /// Zero padding chosen so output extent = ceil(input / stride); an odd
    /// total pad puts the extra zero on the high-index side.
    Same,
    /// No padding; output extent = (input - kernel) / stride + 1.
    Valid,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Elu,
    Sigmoid,
    Relu,
    Identity,
}

/// Resolved convolution geometry for one spatial axis.
#[derive(Clone, Copy, Debug)]
pub(crate) struct AxisGeom {
    pub out: usize,
    pub pad_low: usize,
}

pub(crate) fn conv_axis_geom(
    input: usize,
    kernel: usize,
    stride: usize,
    padding: Padding,
) -> Result<AxisGeom> {
    if stride == 0 {
        return Err(Error::Shape { op: "conv2d", detail: "stride must be >= 1".into() });
    }
    match padding {
        Padding::Same => {
            if kernel % 2 == 0 {
                return Err(Error::Shape {
                    op: "conv2d",
                    detail: format!("`same` padding requires odd kernel extents, got {kernel}"),
                });
            }
            let out = input.div_ceil(stride);
            let span = (out - 1) * stride + kernel;
            let pad_total = span.saturating_sub(input);
            Ok(AxisGeom { out, pad_low: pad_total / 2 })
        }
        Padding::Valid => {
            if input < kernel {
                return Err(Error::Shape {
                    op: "conv2d",
                    detail: format!("valid conv needs input {input} >= kernel {kernel}"),
                });
            }
            Ok(AxisGeom { out: (input - kernel) / stride + 1, pad_low: 0 })
        }
    }
}

fn check_rank3<T: Scalar>(op: &'static str, x: &Tensor<T>) -> Result<(usize, usize, usize)> {
    match x.shape() {
        [f, t, c] => Ok((*f, *t, *c)),
        other => Err(Error::Shape {
            op,
            detail: format!("expected rank-3 (F,T,C) tensor, got shape {other:?}"),
        }),
    }
}

fn check_kernel<T: Scalar>(op: &'static str, w: &Tensor<T>) -> Result<(usize, usize, usize, usize)> {
    match w.shape() {
        [kh, kw, cin, cout] => Ok((*kh, *kw, *cin, *cout)),
        other => Err(Error::Shape {
            op,
            detail: format!("expected rank-4 (kh,kw,Cin,Cout) kernel, got shape {other:?}"),
        }),
    }
}

/// Gathers convolution patches into a `(out_f*out_t, kh*kw*cin)` row-major
/// matrix, with zeros where a tap falls outside the input.
#[allow(clippy::too_many_arguments)]
fn im2col<T: Scalar>(
    x: &[T],
    (in_f, in_t, cin): (usize, usize, usize),
    (kh, kw): (usize, usize),
    (sh, sw): (usize, usize),
    (pad_f, pad_t): (usize, usize),
    (out_f, out_t): (usize, usize),
) -> Vec<T> {
    let k = kh * kw * cin;
    let mut cols = vec![T::ZERO; out_f * out_t * k];
    for fo in 0..out_f {
        for to in 0..out_t {
            let row = (fo * out_t + to) * k;
            for dh in 0..kh {
                let fi = (fo * sh + dh) as isize - pad_f as isize;
                if fi < 0 || fi as usize >= in_f {
                    continue;
                }
                let fi = fi as usize;
                for dw in 0..kw {
                    let ti = (to * sw + dw) as isize - pad_t as isize;
                    if ti < 0 || ti as usize >= in_t {
                        continue;
                    }
                    let ti = ti as usize;
                    let src = (fi * in_t + ti) * cin;
                    let dst = row + (dh * kw + dw) * cin;
                    cols[dst..dst + cin].copy_from_slice(&x[src..src + cin]);
                }
            }
        }
    }
    cols
}

/// Adjoint of [`im2col`]: scatter-adds a patch matrix back onto the input grid.
#[allow(clippy::too_many_arguments)]
fn col2im_add<T: Scalar>(
    cols: &[T],
    (in_f, in_t, cin): (usize, usize, usize),
    (kh, kw): (usize, usize),
    (sh, sw): (usize, usize),
    (pad_f, pad_t): (usize, usize),
    (out_f, out_t): (usize, usize),
    out: &mut [T],
) {
    let k = kh * kw * cin;
    for fo in 0..out_f {
        for to in 0..out_t {
            let row = (fo * out_t + to) * k;
            for dh in 0..kh {
                let fi = (fo * sh + dh) as isize - pad_f as isize;
                if fi < 0 || fi as usize >= in_f {
                    continue;
                }
                let fi = fi as usize;
                for dw in 0..kw {
                    let ti = (to * sw + dw) as isize - pad_t as isize;
                    if ti < 0 || ti as usize >= in_t {
                        continue;
                    }
                    let ti = ti as usize;
                    let dst = (fi * in_t + ti) * cin;
                    let src = row + (dh * kw + dw) * cin;
                    for c in 0..cin {
                        out[dst + c] += cols[src + c];
                    }
                }
            }
        }
    }
}

/// True when the AVX2+FMA variants of the direct kernels may run.
#[inline]
fn have_avx2_fma() -> bool {
    #[cfg(target_arch = "x86_64")]
    {
        std::arch::is_x86_feature_detected!("avx2") && std::arch::is_x86_feature_detected!("fma")
    }
    #[cfg(not(target_arch = "x86_64"))]
    {
        false
    }
}

/// Wraps a generic kernel body in a runtime-dispatched AVX2+FMA version;
/// the body is re-vectorized by the compiler under the wider feature set.
macro_rules! multiversion {
    ($body:ident => $name:ident ( $($arg:ident : $ty:ty),* ) -> $ret:ty) => {
        fn $name<T: Scalar, const CO: usize>($($arg: $ty),*) -> $ret {
            #[cfg(target_arch = "x86_64")]
            {
                #[target_feature(enable = "avx2,fma")]
                unsafe fn wide<T: Scalar, const CO: usize>($($arg: $ty),*) -> $ret {
                    $body::<T, CO>($($arg),*)
                }
                if have_avx2_fma() {
                    // sound: the required CPU features were just verified
                    return unsafe { wide::<T, CO>($($arg),*) };
                }
            }
            $body::<T, CO>($($arg),*)
        }
    };
}

/// Direct 3x3 stride-1 `same` convolution, monomorphized over the output
/// channel count so the accumulator lives in a register array and the
/// channel loop unrolls completely. Interior positions (all nine taps
/// valid) take a branch-free path; borders fall back to tap clipping.
#[inline(always)]
fn conv3x3_same_co_body<T: Scalar, const CO: usize>(
    x: &[T],
    (f, t, cin): (usize, usize, usize),
    w: &[T],
    bias: Option<&[T]>,
) -> Vec<T> {
    debug_assert!(t >= 1 && f >= 1);
    let mut out = vec![T::ZERO; f * t * CO];
    let mut base = [T::ZERO; CO];
    if let Some(b) = bias {
        base.copy_from_slice(b);
    }
    let row_len = t * cin;
    for fo in 0..f {
        let out_row = &mut out[fo * t * CO..(fo + 1) * t * CO];
        let dh_lo = if fo == 0 { 1 } else { 0 };
        let dh_hi = if fo + 1 == f { 2 } else { 3 };
        let full_rows = dh_lo == 0 && dh_hi == 3;
        for to in 0..t {
            let mut acc = base;
            if full_rows && to >= 1 && to + 1 < t {
                for dh in 0..3 {
                    let x_row = &x[(fo + dh - 1) * row_len..(fo + dh) * row_len];
                    let taps = &w[dh * 3 * cin * CO..(dh * 3 + 3) * cin * CO];
                    let xs = &x_row[(to - 1) * cin..(to + 2) * cin];
                    for (k, &xv) in xs.iter().enumerate() {
                        let ws = &taps[k * CO..(k + 1) * CO];
                        for co in 0..CO {
                            acc[co] += xv * ws[co];
                        }
                    }
                }
            } else {
                for dh in dh_lo..dh_hi {
                    let x_row = &x[(fo + dh - 1) * row_len..(fo + dh) * row_len];
                    for dw in 0..3usize {
                        let ti = to + dw;
                        if ti < 1 || ti > t {
                            continue;
                        }
                        let ti = ti - 1;
                        let xs = &x_row[ti * cin..(ti + 1) * cin];
                        let tap = &w[(dh * 3 + dw) * cin * CO..(dh * 3 + dw + 1) * cin * CO];
                        for (ci, &xv) in xs.iter().enumerate() {
                            let ws = &tap[ci * CO..(ci + 1) * CO];
                            for co in 0..CO {
                                acc[co] += xv * ws[co];
                            }
                        }
                    }
                }
            }
            out_row[to * CO..(to + 1) * CO].copy_from_slice(&acc);
        }
    }
    out
}

multiversion!(conv3x3_same_co_body => conv3x3_same_co(
    x: &[T], dims: (usize, usize, usize), w: &[T], bias: Option<&[T]>) -> Vec<T>);

/// Direct 1x1 stride-1 convolution (pure channel mixing), same
/// monomorphization trick.
#[inline(always)]
fn conv1x1_co_body<T: Scalar, const CO: usize>(
    x: &[T],
    cin: usize,
    w: &[T],
    bias: Option<&[T]>,
) -> Vec<T> {
    let positions = x.len() / cin;
    let mut out = vec![T::ZERO; positions * CO];
    let mut base = [T::ZERO; CO];
    if let Some(b) = bias {
        base.copy_from_slice(b);
    }
    for (xs, os) in x.chunks_exact(cin).zip(out.chunks_exact_mut(CO)) {
        let mut acc = base;
        for (ci, &xv) in xs.iter().enumerate() {
            let ws = &w[ci * CO..(ci + 1) * CO];
            for co in 0..CO {
                acc[co] += xv * ws[co];
            }
        }
        os.copy_from_slice(&acc);
    }
    out
}

multiversion!(conv1x1_co_body => conv1x1_co(
    x: &[T], cin: usize, w: &[T], bias: Option<&[T]>) -> Vec<T>);

macro_rules! dispatch_cout {
    ($cout:expr, $fixed:ident, $dynamic:expr, ($($arg:expr),*)) => {
        match $cout {
            1 => Some($fixed::<T, 1>($($arg),*)),
            2 => Some($fixed::<T, 2>($($arg),*)),
            4 => Some($fixed::<T, 4>($($arg),*)),
            8 => Some($fixed::<T, 8>($($arg),*)),
            12 => Some($fixed::<T, 12>($($arg),*)),
            16 => Some($fixed::<T, 16>($($arg),*)),
            24 => Some($fixed::<T, 24>($($arg),*)),
            32 => Some($fixed::<T, 32>($($arg),*)),
            48 => Some($fixed::<T, 48>($($arg),*)),
            64 => Some($fixed::<T, 64>($($arg),*)),
            96 => Some($fixed::<T, 96>($($arg),*)),
            128 => Some($fixed::<T, 128>($($arg),*)),
            _ => $dynamic,
        }
    };
}

fn conv3x3_same_direct<T: Scalar>(
    x: &[T],
    dims: (usize, usize, usize),
    w: &[T],
    bias: Option<&[T]>,
    cout: usize,
) -> Option<Vec<T>> {
    dispatch_cout!(cout, conv3x3_same_co, None, (x, dims, w, bias))
}

fn conv1x1_direct<T: Scalar>(
    x: &[T],
    cin: usize,
    w: &[T],
    bias: Option<&[T]>,
    cout: usize,
) -> Option<Vec<T>> {
    dispatch_cout!(cout, conv1x1_co, None, (x, cin, w, bias))
}

/// Kernel flipped in both spatial taps and with channels swapped:
/// `w'(dh,dw,co,ci) = w(2-dh, 2-dw, ci, co)`. The input gradient of a 3x3
/// `same` conv is a forward 3x3 `same` conv of the output gradient with
/// this kernel.
fn flip_swap_3x3<T: Scalar>(w: &[T], cin: usize, cout: usize) -> Vec<T> {
    let mut out = vec![T::ZERO; w.len()];
    for dh in 0..3 {
        for dw in 0..3 {
            let src = (dh * 3 + dw) * cin * cout;
            let dst = ((2 - dh) * 3 + (2 - dw)) * cin * cout;
            for ci in 0..cin {
                for co in 0..cout {
                    out[dst + co * cin + ci] = w[src + ci * cout + co];
                }
            }
        }
    }
    out
}

/// 2-D convolution of an `(F,T,Cin)` map with an `(kh,kw,Cin,Cout)` kernel.
pub fn conv2d<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    stride: (usize, usize),
    padding: Padding,
) -> Result<Tensor<T>> {
    let (in_f, in_t, cin) = check_rank3("conv2d", x)?;
    let (kh, kw, w_cin, cout) = check_kernel("conv2d", w)?;
    if cin != w_cin {
        return Err(Error::Shape {
            op: "conv2d",
            detail: format!("input shape {:?} has {cin} channels but kernel shape {:?} expects {w_cin}", x.shape(), w.shape()),
        });
    }
    if let Some(b) = bias {
        if b.shape() != [cout] {
            return Err(Error::Shape {
                op: "conv2d",
                detail: format!("bias shape {:?} does not match Cout {cout}", b.shape()),
            });
        }
    }
    let gf = conv_axis_geom(in_f, kh, stride.0, padding)?;
    let gt = conv_axis_geom(in_t, kw, stride.1, padding)?;
    let bias_slice = bias.map(|b| b.data());

    if stride == (1, 1) && kh == 3 && kw == 3 && padding == Padding::Same {
        if let Some(out) = conv3x3_same_direct(x.data(), (in_f, in_t, cin), w.data(), bias_slice, cout) {
            return Ok(Tensor::new(vec![in_f, in_t, cout], out));
        }
    }
    if stride == (1, 1) && kh == 1 && kw == 1 {
        if let Some(out) = conv1x1_direct(x.data(), cin, w.data(), bias_slice, cout) {
            return Ok(Tensor::new(vec![in_f, in_t, cout], out));
        }
        // 1x1 is a plain matrix product; skip the (identity) im2col copy
        let positions = in_f * in_t;
        let mut out = vec![T::ZERO; positions * cout];
        gemm_rm(positions, cin, cout, x.data(), false, w.data(), false, T::ZERO, &mut out);
        if let Some(b) = bias_slice {
            for row in out.chunks_exact_mut(cout) {
                for (o, &bv) in row.iter_mut().zip(b) {
                    *o += bv;
                }
            }
        }
        return Ok(Tensor::new(vec![in_f, in_t, cout], out));
    }

    let cols = im2col(
        x.data(),
        (in_f, in_t, cin),
        (kh, kw),
        stride,
        (gf.pad_low, gt.pad_low),
        (gf.out, gt.out),
    );
    let positions = gf.out * gt.out;
    let k = kh * kw * cin;
    let mut out = vec![T::ZERO; positions * cout];
    gemm_rm(positions, k, cout, &cols, false, w.data(), false, T::ZERO, &mut out);
    if let Some(b) = bias {
        let bd = b.data();
        for p in 0..positions {
            let row = &mut out[p * cout..(p + 1) * cout];
            for (o, &bv) in row.iter_mut().zip(bd) {
                *o += bv;
            }
        }
    }
    Ok(Tensor::new(vec![gf.out, gt.out, cout], out))
}

/// Weight gradient of the 3x3 `same` path: per-tap accumulation with the
/// unrolled output-channel inner loop (the 9*cin*cout accumulator stays
/// L1-resident).
#[inline(always)]
fn conv3x3_same_grad_w_co_body<T: Scalar, const CO: usize>(
    x: &[T],
    (f, t, cin): (usize, usize, usize),
    go: &[T],
) -> Vec<T> {
    let mut grad_w = vec![T::ZERO; 9 * cin * CO];
    for dh in 0..3usize {
        for dw in 0..3usize {
            let gw_tap = &mut grad_w[(dh * 3 + dw) * cin * CO..(dh * 3 + dw + 1) * cin * CO];
            let fo_lo = if dh == 0 { 1 } else { 0 };
            let fo_hi = if dh == 2 { f - 1 } else { f };
            let to_lo = if dw == 0 { 1 } else { 0 };
            let to_hi = if dw == 2 { t - 1 } else { t };
            for fo in fo_lo..fo_hi {
                let fi = fo + dh - 1;
                let x_row = &x[fi * t * cin..(fi + 1) * t * cin];
                let go_row = &go[fo * t * CO..(fo + 1) * t * CO];
                // per-(ci) register accumulators over the row break the
                // store-to-load dependency on the shared gw slots
                for ci in 0..cin {
                    let mut acc0 = [T::ZERO; CO];
                    let mut acc1 = [T::ZERO; CO];
                    let mut to = to_lo;
                    while to + 1 < to_hi {
                        let xv0 = x_row[(to + dw - 1) * cin + ci];
                        let gs0 = &go_row[to * CO..(to + 1) * CO];
                        let xv1 = x_row[(to + dw) * cin + ci];
                        let gs1 = &go_row[(to + 1) * CO..(to + 2) * CO];
                        for co in 0..CO {
                            acc0[co] += xv0 * gs0[co];
                            acc1[co] += xv1 * gs1[co];
                        }
                        to += 2;
                    }
                    if to < to_hi {
                        let xv = x_row[(to + dw - 1) * cin + ci];
                        let gs = &go_row[to * CO..(to + 1) * CO];
                        for co in 0..CO {
                            acc0[co] += xv * gs[co];
                        }
                    }
                    let gw = &mut gw_tap[ci * CO..(ci + 1) * CO];
                    for co in 0..CO {
                        gw[co] = gw[co] + acc0[co] + acc1[co];
                    }
                }
            }
        }
    }
    grad_w
}

multiversion!(conv3x3_same_grad_w_co_body => conv3x3_same_grad_w_co(
    x: &[T], dims: (usize, usize, usize), go: &[T]) -> Vec<T>);

fn conv3x3_same_grad_w<T: Scalar>(
    x: &[T],
    dims: (usize, usize, usize),
    cout: usize,
    go: &[T],
) -> Option<Vec<T>> {
    dispatch_cout!(cout, conv3x3_same_grad_w_co, None, (x, dims, go))
}

#[inline(always)]
fn conv1x1_grad_w_co_body<T: Scalar, const CO: usize>(x: &[T], cin: usize, go: &[T]) -> Vec<T> {
    let mut grad_w = vec![T::ZERO; cin * CO];
    for (xs, gs) in x.chunks_exact(cin).zip(go.chunks_exact(CO)) {
        for (ci, &xv) in xs.iter().enumerate() {
            let gw = &mut grad_w[ci * CO..(ci + 1) * CO];
            for co in 0..CO {
                gw[co] += xv * gs[co];
            }
        }
    }
    grad_w
}

multiversion!(conv1x1_grad_w_co_body => conv1x1_grad_w_co(
    x: &[T], cin: usize, go: &[T]) -> Vec<T>);

fn conv1x1_grad_w<T: Scalar>(x: &[T], cin: usize, cout: usize, go: &[T]) -> Option<Vec<T>> {
    dispatch_cout!(cout, conv1x1_grad_w_co, None, (x, cin, go))
}

/// Gradients of [`conv2d`]. The input and kernel gradients are computed
/// only when requested, so a conv fed by constants skips that work.
pub fn conv2d_backward<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    stride: (usize, usize),
    padding: Padding,
    grad_out: &Tensor<T>,
    need_x: bool,
    need_w: bool,
) -> (Option<Tensor<T>>, Option<Tensor<T>>, Tensor<T>) {
    let (in_f, in_t, cin) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let (kh, kw, _, cout) = (w.shape()[0], w.shape()[1], w.shape()[2], w.shape()[3]);
    let gf = conv_axis_geom(in_f, kh, stride.0, padding).expect("geom already validated");
    let gt = conv_axis_geom(in_t, kw, stride.1, padding).expect("geom already validated");
    let positions = gf.out * gt.out;
    let k = kh * kw * cin;
    let go = grad_out.data();

    // bias: sum over positions
    let mut grad_b = vec![T::ZERO; cout];
    for p in 0..positions {
        for c in 0..cout {
            grad_b[c] += go[p * cout + c];
        }
    }
    let grad_b = Tensor::new(vec![cout], grad_b);
    let wrap = |v: Vec<T>, shape: &[usize]| Tensor::new(shape.to_vec(), v);

    if stride == (1, 1) && kh == 3 && kw == 3 && padding == Padding::Same {
        // grad_x is a forward conv of grad_out with the flipped, swapped kernel
        let gx = if need_x {
            let w_fs = flip_swap_3x3(w.data(), cin, cout);
            conv3x3_same_direct(go, (in_f, in_t, cout), &w_fs, None, cin)
        } else {
            None
        };
        let gw = if need_w {
            conv3x3_same_grad_w(x.data(), (in_f, in_t, cin), cout, go)
        } else {
            None
        };
        match (need_x, need_w, gx, gw) {
            (true, true, Some(gx), Some(gw)) => {
                return (Some(wrap(gx, x.shape())), Some(wrap(gw, w.shape())), grad_b)
            }
            (true, false, Some(gx), _) => return (Some(wrap(gx, x.shape())), None, grad_b),
            (false, true, _, Some(gw)) => return (None, Some(wrap(gw, w.shape())), grad_b),
            (false, false, ..) => return (None, None, grad_b),
            _ => {} // a channel count outside the dispatch table: generic path
        }
    }
    if stride == (1, 1) && kh == 1 && kw == 1 {
        let gx = need_x.then(|| {
            let mut w_swapped = vec![T::ZERO; w.numel()];
            for ci in 0..cin {
                for co in 0..cout {
                    w_swapped[co * cin + ci] = w.data()[ci * cout + co];
                }
            }
            match conv1x1_direct(go, cout, &w_swapped, None, cin) {
                Some(gx) => gx,
                None => {
                    let mut gx = vec![T::ZERO; positions * cin];
                    gemm_rm(positions, cout, cin, go, false, &w_swapped, false, T::ZERO, &mut gx);
                    gx
                }
            }
        });
        let gw = need_w.then(|| match conv1x1_grad_w(x.data(), cin, cout, go) {
            Some(gw) => gw,
            None => {
                let mut gw = vec![T::ZERO; cin * cout];
                gemm_rm(cin, positions, cout, x.data(), true, go, false, T::ZERO, &mut gw);
                gw
            }
        });
        return (
            gx.map(|v| wrap(v, x.shape())),
            gw.map(|v| wrap(v, w.shape())),
            grad_b,
        );
    }

    // generic path: weights via colsᵀ (K,P) × grad_out (P,Cout)
    let gw = if need_w {
        let cols = im2col(
            x.data(),
            (in_f, in_t, cin),
            (kh, kw),
            stride,
            (gf.pad_low, gt.pad_low),
            (gf.out, gt.out),
        );
        let mut grad_w = vec![T::ZERO; k * cout];
        gemm_rm(k, positions, cout, &cols, true, go, false, T::ZERO, &mut grad_w);
        Some(wrap(grad_w, w.shape()))
    } else {
        None
    };

    // input: grad_cols (P,K) = grad_out (P,Cout) × wᵀ (Cout,K), then scatter
    let gx = if need_x {
        let mut grad_cols = vec![T::ZERO; positions * k];
        gemm_rm(positions, cout, k, go, false, w.data(), true, T::ZERO, &mut grad_cols);
        let mut grad_x = vec![T::ZERO; in_f * in_t * cin];
        col2im_add(
            &grad_cols,
            (in_f, in_t, cin),
            (kh, kw),
            stride,
            (gf.pad_low, gt.pad_low),
            (gf.out, gt.out),
            &mut grad_x,
        );
        Some(wrap(grad_x, x.shape()))
    } else {
        None
    };

    (gx, gw, grad_b)
}

fn tconv_check(kh: usize, kw: usize, sh: usize, sw: usize) -> Result<()> {
    if kh % 2 == 0 || kw % 2 == 0 || sh == 0 || sw == 0 {
        return Err(Error::Config(format!(
            "transposed_conv2d supports odd kernels and stride >= 1, got kernel {kh}x{kw} stride ({sh},{sw})"
        )));
    }
    Ok(())
}

/// Transposed convolution: scatter-add adjoint of a `same`-padded strided
/// [`conv2d`]. Output spatial extents are exactly `input * stride`.
pub fn transposed_conv2d<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    stride: (usize, usize),
) -> Result<Tensor<T>> {
    let (in_f, in_t, cin) = check_rank3("transposed_conv2d", x)?;
    let (kh, kw, w_cin, cout) = check_kernel("transposed_conv2d", w)?;
    if cin != w_cin {
        return Err(Error::Shape {
            op: "transposed_conv2d",
            detail: format!("input shape {:?} has {cin} channels but kernel shape {:?} expects {w_cin}", x.shape(), w.shape()),
        });
    }
    let (sh, sw) = stride;
    tconv_check(kh, kw, sh, sw)?;
    let out_f = in_f * sh;
    let out_t = in_t * sw;
    // Pads of the conv this op is adjoint to (out_f -> in_f at stride sh).
    let gf = conv_axis_geom(out_f, kh, sh, Padding::Same)?;
    let gt = conv_axis_geom(out_t, kw, sw, Padding::Same)?;
    debug_assert_eq!(gf.out, in_f);
    debug_assert_eq!(gt.out, in_t);

    // Per-tap: cols_tap (P,Cout) = x (P,Cin) × w_tap (Cin,Cout), scattered.
    let positions = in_f * in_t;
    let mut out = vec![T::ZERO; out_f * out_t * cout];
    let mut tap_buf = vec![T::ZERO; positions * cout];
    for dh in 0..kh {
        for dw in 0..kw {
            let w_tap = &w.data()[(dh * kw + dw) * cin * cout..(dh * kw + dw + 1) * cin * cout];
            gemm_rm(positions, cin, cout, x.data(), false, w_tap, false, T::ZERO, &mut tap_buf);
            for fi in 0..in_f {
                let of = (fi * sh + dh) as isize - gf.pad_low as isize;
                if of < 0 || of as usize >= out_f {
                    continue;
                }
                for ti in 0..in_t {
                    let ot = (ti * sw + dw) as isize - gt.pad_low as isize;
                    if ot < 0 || ot as usize >= out_t {
                        continue;
                    }
                    let src = (fi * in_t + ti) * cout;
                    let dst = (of as usize * out_t + ot as usize) * cout;
                    for c in 0..cout {
                        out[dst + c] += tap_buf[src + c];
                    }
                }
            }
        }
    }
    Ok(Tensor::new(vec![out_f, out_t, cout], out))
}

/// Channel-swapped copy: `(kh,kw,Cin,Cout)` -> `(kh,kw,Cout,Cin)`.
fn swap_kernel_channels<T: Scalar>(w: &Tensor<T>) -> Tensor<T> {
    let (kh, kw, cin, cout) = (w.shape()[0], w.shape()[1], w.shape()[2], w.shape()[3]);
    let mut out = vec![T::ZERO; w.numel()];
    let wd = w.data();
    for tap in 0..kh * kw {
        for ci in 0..cin {
            for co in 0..cout {
                out[(tap * cout + co) * cin + ci] = wd[(tap * cin + ci) * cout + co];
            }
        }
    }
    Tensor::new(vec![kh, kw, cout, cin], out)
}

/// Gradients of [`transposed_conv2d`] w.r.t. input and kernel.
pub fn transposed_conv2d_backward<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    stride: (usize, usize),
    grad_out: &Tensor<T>,
) -> (Tensor<T>, Tensor<T>) {
    // The forward is the adjoint of a strided same conv, so the input grad is
    // that conv applied to grad_out with swapped channels.
    let w_swapped = swap_kernel_channels(w);
    let grad_x = conv2d(grad_out, &w_swapped, None, stride, Padding::Same)
        .expect("geometry validated in forward");

    let (in_f, in_t, cin) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let (kh, kw, cout) = (w.shape()[0], w.shape()[1], w.shape()[3]);
    let (sh, sw) = stride;
    let out_f = in_f * sh;
    let out_t = in_t * sw;
    let gf = conv_axis_geom(out_f, kh, sh, Padding::Same).unwrap();
    let gt = conv_axis_geom(out_t, kw, sw, Padding::Same).unwrap();
    let go = grad_out.data();
    let xd = x.data();

    // grad_w[tap] (Cin,Cout) = xᵀ (Cin,P) × gathered grad_out at that tap
    let positions = in_f * in_t;
    let mut grad_w = vec![T::ZERO; kh * kw * cin * cout];
    let mut gathered = vec![T::ZERO; positions * cout];
    for dh in 0..kh {
        for dw in 0..kw {
            gathered.fill(T::ZERO);
            for fi in 0..in_f {
                let of = (fi * sh + dh) as isize - gf.pad_low as isize;
                if of < 0 || of as usize >= out_f {
                    continue;
                }
                for ti in 0..in_t {
                    let ot = (ti * sw + dw) as isize - gt.pad_low as isize;
                    if ot < 0 || ot as usize >= out_t {
                        continue;
                    }
                    let dst = (fi * in_t + ti) * cout;
                    let src = (of as usize * out_t + ot as usize) * cout;
                    gathered[dst..dst + cout].copy_from_slice(&go[src..src + cout]);
                }
            }
            let tap = dh * kw + dw;
            gemm_rm(
                cin,
                positions,
                cout,
                xd,
                true,
                &gathered,
                false,
                T::ZERO,
                &mut grad_w[tap * cin * cout..(tap + 1) * cin * cout],
            );
        }
    }
    (grad_x, Tensor::new(w.shape().to_vec(), grad_w))
}

/// Average pooling over non-overlapping `(ph, pw)` windows. Extents must
/// divide exactly; there is no silent truncation.
pub fn pool_avg<T: Scalar>(x: &Tensor<T>, window: (usize, usize)) -> Result<Tensor<T>> {
    let (f, t, c) = check_rank3("pool2d", x)?;
    let (ph, pw) = window;
    if ph == 0 || pw == 0 || f % ph != 0 || t % pw != 0 {
        return Err(Error::Shape {
            op: "pool2d",
            detail: format!("input {:?} not divisible by window ({ph},{pw})", x.shape()),
        });
    }
    let (of, ot) = (f / ph, t / pw);
    let inv = T::from_f64(1.0 / (ph * pw) as f64);
    let xd = x.data();
    let mut out = vec![T::ZERO; of * ot * c];
    for fo in 0..of {
        for to in 0..ot {
            let dst = (fo * ot + to) * c;
            for df in 0..ph {
                for dt in 0..pw {
                    let src = ((fo * ph + df) * t + (to * pw + dt)) * c;
                    for ch in 0..c {
                        out[dst + ch] += xd[src + ch];
                    }
                }
            }
            for ch in 0..c {
                out[dst + ch] = out[dst + ch] * inv;
            }
        }
    }
    Ok(Tensor::new(vec![of, ot, c], out))
}

pub fn pool_avg_backward<T: Scalar>(
    x_shape: &[usize],
    window: (usize, usize),
    grad_out: &Tensor<T>,
) -> Tensor<T> {
    let (f, t, c) = (x_shape[0], x_shape[1], x_shape[2]);
    let (ph, pw) = window;
    let (of, ot) = (f / ph, t / pw);
    let inv = T::from_f64(1.0 / (ph * pw) as f64);
    let go = grad_out.data();
    let mut grad_x = vec![T::ZERO; f * t * c];
    for fo in 0..of {
        for to in 0..ot {
            let src = (fo * ot + to) * c;
            for df in 0..ph {
                for dt in 0..pw {
                    let dst = ((fo * ph + df) * t + (to * pw + dt)) * c;
                    for ch in 0..c {
                        grad_x[dst + ch] += go[src + ch] * inv;
                    }
                }
            }
        }
    }
    Tensor::new(x_shape.to_vec(), grad_x)
}

/// Global average pooling to `(1,1,C)`.
pub fn pool_global_avg<T: Scalar>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let (f, t, c) = check_rank3("pool2d", x)?;
    let n = f * t;
    let inv = T::from_f64(1.0 / n as f64);
    let xd = x.data();
    let mut out = vec![T::ZERO; c];
    for p in 0..n {
        for ch in 0..c {
            out[ch] += xd[p * c + ch];
        }
    }
    for v in &mut out {
        *v = *v * inv;
    }
    Ok(Tensor::new(vec![1, 1, c], out))
}

pub fn pool_global_avg_backward<T: Scalar>(x_shape: &[usize], grad_out: &Tensor<T>) -> Tensor<T> {
    let (f, t, c) = (x_shape[0], x_shape[1], x_shape[2]);
    let inv = T::from_f64(1.0 / (f * t) as f64);
    let go = grad_out.data();
    let mut grad_x = vec![T::ZERO; f * t * c];
    for p in 0..f * t {
        for ch in 0..c {
            grad_x[p * c + ch] = go[ch] * inv;
        }
    }
    Tensor::new(x_shape.to_vec(), grad_x)
}

#[inline]
fn sigmoid_stable<T: Scalar>(v: T) -> T {
    if v >= T::ZERO {
        T::ONE / (T::ONE + (-v).exp())
    } else {
        let e = v.exp();
        e / (T::ONE + e)
    }
}

/// Elementwise activation. ELU uses alpha = 1.
pub fn activation<T: Scalar>(x: &Tensor<T>, kind: Activation) -> Tensor<T> {
    match kind {
        Activation::Elu => x.map(Scalar::elu),
        Activation::Sigmoid => x.map(sigmoid_stable),
        Activation::Relu => x.map(|v| v.max(T::ZERO)),
        Activation::Identity => x.clone(),
    }
}

/// Backward of [`activation`]; `y` is the forward output (enough to recover
/// every derivative here).
pub fn activation_backward<T: Scalar>(y: &Tensor<T>, kind: Activation, grad_out: &Tensor<T>) -> Tensor<T> {
    let yd = y.data();
    let go = grad_out.data();
    let data = match kind {
        // y = e^v - 1 for v < 0, so dy/dv = e^v = y + 1
        Activation::Elu => yd
            .iter()
            .zip(go)
            .map(|(&y, &g)| if y >= T::ZERO { g } else { g * (y + T::ONE) })
            .collect(),
        Activation::Sigmoid => yd.iter().zip(go).map(|(&y, &g)| g * y * (T::ONE - y)).collect(),
        Activation::Relu => yd
            .iter()
            .zip(go)
            .map(|(&y, &g)| if y > T::ZERO { g } else { T::ZERO })
            .collect(),
        Activation::Identity => go.to_vec(),
    };
    Tensor::new(y.shape().to_vec(), data)
}

fn axis_spans(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer: usize = shape[..axis].iter().product();
    let len = shape[axis];
    let inner: usize = shape[axis + 1..].iter().product();
    (outer, len, inner)
}

/// Max-stabilized softmax along `axis`.
pub fn softmax_axis<T: Scalar>(x: &Tensor<T>, axis: usize) -> Result<Tensor<T>> {
    if axis >= x.shape().len() {
        return Err(Error::Shape {
            op: "softmax_axis",
            detail: format!("axis {axis} out of range for shape {:?}", x.shape()),
        });
    }
    let (outer, len, inner) = axis_spans(x.shape(), axis);
    let xd = x.data();
    let mut out = vec![T::ZERO; xd.len()];
    for o in 0..outer {
        for i in 0..inner {
            let idx = |a: usize| (o * len + a) * inner + i;
            let mut m = xd[idx(0)];
            for a in 1..len {
                m = m.max(xd[idx(a)]);
            }
            let mut sum = T::ZERO;
            for a in 0..len {
                let e = (xd[idx(a)] - m).exp();
                out[idx(a)] = e;
                sum += e;
            }
            for a in 0..len {
                out[idx(a)] = out[idx(a)] / sum;
            }
        }
    }
    Ok(Tensor::new(x.shape().to_vec(), out))
}

pub fn softmax_axis_backward<T: Scalar>(y: &Tensor<T>, axis: usize, grad_out: &Tensor<T>) -> Tensor<T> {
    let (outer, len, inner) = axis_spans(y.shape(), axis);
    let yd = y.data();
    let go = grad_out.data();
    let mut grad_x = vec![T::ZERO; yd.len()];
    for o in 0..outer {
        for i in 0..inner {
            let idx = |a: usize| (o * len + a) * inner + i;
            let mut dot = T::ZERO;
            for a in 0..len {
                dot += go[idx(a)] * yd[idx(a)];
            }
            for a in 0..len {
                grad_x[idx(a)] = yd[idx(a)] * (go[idx(a)] - dot);
            }
        }
    }
    Tensor::new(y.shape().to_vec(), grad_x)
}

/// 2-D matrix product `(m,k) · (k,n) -> (m,n)`.
pub fn matmul<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let (m, ka) = match a.shape() {
        [m, k] => (*m, *k),
        s => {
            return Err(Error::Shape { op: "matmul", detail: format!("lhs must be rank 2, got {s:?}") })
        }
    };
    let (kb, n) = match b.shape() {
        [k, n] => (*k, *n),
        s => {
            return Err(Error::Shape { op: "matmul", detail: format!("rhs must be rank 2, got {s:?}") })
        }
    };
    if ka != kb {
        return Err(Error::Shape {
            op: "matmul",
            detail: format!("inner extents differ: {:?} vs {:?}", a.shape(), b.shape()),
        });
    }
    let mut out = vec![T::ZERO; m * n];
    gemm_rm(m, ka, n, a.data(), false, b.data(), false, T::ZERO, &mut out);
    Ok(Tensor::new(vec![m, n], out))
}

pub fn matmul_backward<T: Scalar>(
    a: &Tensor<T>,
    b: &Tensor<T>,
    grad_out: &Tensor<T>,
) -> (Tensor<T>, Tensor<T>) {
    let (m, k) = (a.shape()[0], a.shape()[1]);
    let n = b.shape()[1];
    let mut grad_a = vec![T::ZERO; m * k];
    gemm_rm(m, n, k, grad_out.data(), false, b.data(), true, T::ZERO, &mut grad_a);
    let mut grad_b = vec![T::ZERO; k * n];
    gemm_rm(k, m, n, a.data(), true, grad_out.data(), false, T::ZERO, &mut grad_b);
    (
        Tensor::new(vec![m, k], grad_a),
        Tensor::new(vec![k, n], grad_b),
    )
}

/// Affine map on a flat vector: `x (n) · w (n,m) + b (m)`.
pub fn dense<T: Scalar>(x: &Tensor<T>, w: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let n = x.numel();
    let (wn, m) = match w.shape() {
        [wn, m] => (*wn, *m),
        s => {
            return Err(Error::Shape { op: "dense", detail: format!("weight must be rank 2, got {s:?}") })
        }
    };
    if wn != n || b.numel() != m {
        return Err(Error::Shape {
            op: "dense",
            detail: format!(
                "x {:?} · w {:?} + b {:?}: inner extents do not match",
                x.shape(),
                w.shape(),
                b.shape()
            ),
        });
    }
    let prod = matmul(&x.reshaped(&[1, n]), w)?;
    let mut out = prod.into_data();
    for (o, &bv) in out.iter_mut().zip(b.data()) {
        *o += bv;
    }
    Ok(Tensor::new(vec![m], out))
}

/// Concatenation along `axis`; all other extents must agree.
pub fn concat<T: Scalar>(xs: &[&Tensor<T>], axis: usize) -> Result<Tensor<T>> {
    let first = xs.first().ok_or_else(|| Error::Shape {
        op: "concat",
        detail: "empty input list".into(),
    })?;
    let rank = first.shape().len();
    if axis >= rank {
        return Err(Error::Shape {
            op: "concat",
            detail: format!("axis {axis} out of range for rank {rank}"),
        });
    }
    let mut axis_total = 0;
    for x in xs {
        if x.shape().len() != rank {
            return Err(Error::Shape {
                op: "concat",
                detail: format!("rank mismatch: {:?} vs {:?}", first.shape(), x.shape()),
            });
        }
        for (d, (&a, &b)) in first.shape().iter().zip(x.shape()).enumerate() {
            if d != axis && a != b {
                return Err(Error::Shape {
                    op: "concat",
                    detail: format!("off-axis extent mismatch at dim {d}: {:?} vs {:?}", first.shape(), x.shape()),
                });
            }
        }
        axis_total += x.shape()[axis];
    }
    let mut out_shape = first.shape().to_vec();
    out_shape[axis] = axis_total;
    let (outer, _, inner) = axis_spans(&out_shape, axis);
    let mut out = vec![T::ZERO; out_shape.iter().product()];
    for o in 0..outer {
        let mut offset = 0;
        for x in xs {
            let len = x.shape()[axis];
            let block = len * inner;
            let src = &x.data()[o * block..(o + 1) * block];
            let dst_start = (o * axis_total + offset) * inner;
            out[dst_start..dst_start + block].copy_from_slice(src);
            offset += len;
        }
    }
    Ok(Tensor::new(out_shape, out))
}

/// Contiguous slice `[start, start+len)` along `axis`.
pub fn slice<T: Scalar>(x: &Tensor<T>, axis: usize, start: usize, len: usize) -> Result<Tensor<T>> {
    let rank = x.shape().len();
    if axis >= rank || start + len > x.shape()[axis] {
        return Err(Error::Shape {
            op: "slice",
            detail: format!("slice axis {axis} range {start}..{} out of shape {:?}", start + len, x.shape()),
        });
    }
    let (outer, full, inner) = axis_spans(x.shape(), axis);
    let mut out_shape = x.shape().to_vec();
    out_shape[axis] = len;
    let mut out = vec![T::ZERO; outer * len * inner];
    for o in 0..outer {
        let src = (o * full + start) * inner;
        let dst = o * len * inner;
        out[dst..dst + len * inner].copy_from_slice(&x.data()[src..src + len * inner]);
    }
    Ok(Tensor::new(out_shape, out))
}

/// Adjoint of [`slice`]: place `grad_out` back into a zero tensor of the
/// original shape.
pub fn slice_backward<T: Scalar>(
    x_shape: &[usize],
    axis: usize,
    start: usize,
    grad_out: &Tensor<T>,
) -> Tensor<T> {
    let (outer, full, inner) = axis_spans(x_shape, axis);
    let len = grad_out.shape()[axis];
    let mut grad_x = vec![T::ZERO; x_shape.iter().product()];
    for o in 0..outer {
        let dst = (o * full + start) * inner;
        let src = o * len * inner;
        grad_x[dst..dst + len * inner].copy_from_slice(&grad_out.data()[src..src + len * inner]);
    }
    Tensor::new(x_shape.to_vec(), grad_x)
}

/// Broadcast attention-mask multiply: `x (F,T,C) ⊗ mask (k,1,C)` where
/// `F = k·r`; mask row `g` is repeated over the `r` frequency rows of group
/// `g` and over all time columns. The only broadcast the stack allows.
pub fn mask_mul<T: Scalar>(x: &Tensor<T>, mask: &Tensor<T>) -> Result<Tensor<T>> {
    let (f, t, c) = check_rank3("mask_mul", x)?;
    let (k, one, mc) = check_rank3("mask_mul", mask)?;
    if one != 1 || mc != c || k == 0 || f % k != 0 {
        return Err(Error::Shape {
            op: "mask_mul",
            detail: format!("mask {:?} does not broadcast over {:?}", mask.shape(), x.shape()),
        });
    }
    let r = f / k;
    let xd = x.data();
    let md = mask.data();
    let mut out = vec![T::ZERO; xd.len()];
    for fi in 0..f {
        let g = fi / r;
        for ti in 0..t {
            let base = (fi * t + ti) * c;
            for ch in 0..c {
                out[base + ch] = xd[base + ch] * md[g * c + ch];
            }
        }
    }
    Ok(Tensor::new(vec![f, t, c], out))
}

pub fn mask_mul_backward<T: Scalar>(
    x: &Tensor<T>,
    mask: &Tensor<T>,
    grad_out: &Tensor<T>,
) -> (Tensor<T>, Tensor<T>) {
    let (f, t, c) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let k = mask.shape()[0];
    let r = f / k;
    let xd = x.data();
    let md = mask.data();
    let go = grad_out.data();
    let mut grad_x = vec![T::ZERO; xd.len()];
    let mut grad_m = vec![T::ZERO; md.len()];
    for fi in 0..f {
        let g = fi / r;
        for ti in 0..t {
            let base = (fi * t + ti) * c;
            for ch in 0..c {
                grad_x[base + ch] = go[base + ch] * md[g * c + ch];
                grad_m[g * c + ch] += go[base + ch] * xd[base + ch];
            }
        }
    }
    (
        Tensor::new(x.shape().to_vec(), grad_x),
        Tensor::new(mask.shape().to_vec(), grad_m),
    )
}

/// Numerically stable softplus, `ln(1 + e^v)`.
#[inline]
pub fn softplus<T: Scalar>(v: T) -> T {
    v.max(T::ZERO) + (-v.abs()).exp().ln_1p()
}

/// Fused cross-entropy from logits: `logsumexp(logits) - logits[class]`.
pub fn cross_entropy_from_logits<T: Scalar>(logits: &Tensor<T>, class: usize) -> Result<T> {
    let n = logits.numel();
    if class >= n {
        return Err(Error::Contract(format!("class {class} out of range 0..{n}")));
    }
    let d = logits.data();
    let mut m = d[0];
    for &v in d {
        m = m.max(v);
    }
    let mut sum = T::ZERO;
    for &v in d {
        sum += (v - m).exp();
    }
    Ok(m + sum.ln() - d[class])
}

/// Gradient of [`cross_entropy_from_logits`]: `softmax(logits) - onehot(class)`.
pub fn cross_entropy_from_logits_backward<T: Scalar>(
    logits: &Tensor<T>,
    class: usize,
    grad: T,
) -> Tensor<T> {
    let d = logits.data();
    let mut m = d[0];
    for &v in d {
        m = m.max(v);
    }
    let mut sum = T::ZERO;
    let mut exps: Vec<T> = Vec::with_capacity(d.len());
    for &v in d {
        let e = (v - m).exp();
        exps.push(e);
        sum += e;
    }
    let data = exps
        .iter()
        .enumerate()
        .map(|(i, &e)| {
            let p = e / sum;
            let t = if i == class { T::ONE } else { T::ZERO };
            grad * (p - t)
        })
        .collect();
    Tensor::new(logits.shape().to_vec(), data)
}

/// Mean binary cross-entropy of sigmoid logits against (possibly soft)
/// targets: `mean(softplus(z) - t·z)`. Fusing through the sigmoid keeps the
/// gradient bounded when activations saturate.
pub fn bce_from_logits<T: Scalar>(z: &Tensor<T>, targets: &[T]) -> Result<T> {
    if z.numel() != targets.len() {
        return Err(Error::Shape {
            op: "bce_from_logits",
            detail: format!("{} logits vs {} targets", z.numel(), targets.len()),
        });
    }
    let n = T::from_f64(z.numel() as f64);
    let mut acc = T::ZERO;
    for (&zi, &ti) in z.data().iter().zip(targets) {
        acc += softplus(zi) - ti * zi;
    }
    Ok(acc / n)
}

pub fn bce_from_logits_backward<T: Scalar>(z: &Tensor<T>, targets: &[T], grad: T) -> Tensor<T> {
    let inv_n = T::ONE / T::from_f64(z.numel() as f64);
    let data = z
        .data()
        .iter()
        .zip(targets)
        .map(|(&zi, &ti)| grad * (sigmoid_stable(zi) - ti) * inv_n)
        .collect();
    Tensor::new(z.shape().to_vec(), data)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t3(f: usize, t: usize, c: usize, vals: &[f64]) -> Tensor<f64> {
        Tensor::<f64>::from_f64_slice(&[f, t, c], vals)
    }

    #[test]
    fn conv_identity_kernel() {
        let x = Tensor::<f64>::ones(&[3, 3, 1]);
        let w = Tensor::<f64>::ones(&[1, 1, 1, 1]);
        let b = Tensor::<f64>::zeros(&[1]);
        let y = conv2d(&x, &w, Some(&b), (1, 1), Padding::Same).unwrap();
        assert_eq!(y, Tensor::<f64>::ones(&[3, 3, 1]));
    }

    #[test]
    fn conv_box_sum_valid() {
        let x = Tensor::<f64>::ones(&[1, 4, 1]);
        let w = Tensor::<f64>::ones(&[1, 3, 1, 1]);
        let y = conv2d(&x, &w, None, (1, 1), Padding::Valid).unwrap();
        assert_eq!(y.shape(), &[1, 2, 1]);
        assert_eq!(y.data(), &[3.0, 3.0]);
    }

    #[test]
    fn conv_channel_mismatch_names_shapes() {
        let x = Tensor::<f64>::ones(&[2, 2, 3]);
        let w = Tensor::<f64>::ones(&[1, 1, 2, 1]);
        let err = conv2d(&x, &w, None, (1, 1), Padding::Same).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[2, 2, 3]") && msg.contains("[1, 1, 2, 1]"), "{msg}");
    }

    #[test]
    fn same_padding_prefers_high_side() {
        // Even input with stride 2, kernel 3: total pad 1 goes high.
        let g = conv_axis_geom(4, 3, 2, Padding::Same).unwrap();
        assert_eq!(g.out, 2);
        assert_eq!(g.pad_low, 0);
    }

    #[test]
    fn tconv_identity_impulse() {
        let x = t3(1, 4, 1, &[1.0, 2.0, 3.0, 4.0]);
        let w = Tensor::<f64>::from_f64_slice(&[1, 3, 1, 1], &[0.0, 1.0, 0.0]);
        let y = transposed_conv2d(&x, &w, (1, 1)).unwrap();
        assert_eq!(y, x);
    }

    #[test]
    fn tconv_doubles_time() {
        let x = Tensor::<f64>::ones(&[1, 4, 1]);
        let w = Tensor::<f64>::ones(&[1, 3, 1, 1]);
        let y = transposed_conv2d(&x, &w, (1, 2)).unwrap();
        assert_eq!(y.shape(), &[1, 8, 1]);
    }

    #[test]
    fn pool_mean_of_four() {
        let x = t3(2, 2, 1, &[1.0, 2.0, 3.0, 4.0]);
        let y = pool_avg(&x, (2, 2)).unwrap();
        assert_eq!(y.shape(), &[1, 1, 1]);
        assert_eq!(y.data(), &[2.5]);
    }

    #[test]
    fn pool_rejects_non_divisible() {
        let x = Tensor::<f64>::ones(&[3, 4, 1]);
        assert!(pool_avg(&x, (2, 2)).is_err());
    }

    #[test]
    fn global_pool_constant() {
        let x = Tensor::<f64>::filled(&[4, 5, 2], 0.7);
        let y = pool_global_avg(&x).unwrap();
        assert_eq!(y.shape(), &[1, 1, 2]);
        for &v in y.data() {
            assert!((v - 0.7).abs() < 1e-15);
        }
    }

    #[test]
    fn elu_values() {
        let x = Tensor::<f64>::from_f64_slice(&[3], &[0.0, 1.0, -(2.0f64.ln())]);
        let y = activation(&x, Activation::Elu);
        assert_eq!(y.data()[0], 0.0);
        assert_eq!(y.data()[1], 1.0);
        assert!((y.data()[2] - (-0.5)).abs() < 1e-15);
    }

    #[test]
    fn sigmoid_at_zero() {
        let x = Tensor::<f64>::from_f64_slice(&[1], &[0.0]);
        assert_eq!(activation(&x, Activation::Sigmoid).data()[0], 0.5);
    }

    #[test]
    fn softmax_uniform_and_closed_form() {
        let x = Tensor::<f64>::zeros(&[4]);
        let y = softmax_axis(&x, 0).unwrap();
        for &v in y.data() {
            assert!((v - 0.25).abs() < 1e-15);
        }
        let x = Tensor::<f64>::from_f64_slice(&[2], &[1.0f64.ln(), 3.0f64.ln()]);
        let y = softmax_axis(&x, 0).unwrap();
        assert!((y.data()[0] - 0.25).abs() < 1e-12);
        assert!((y.data()[1] - 0.75).abs() < 1e-12);
    }

    #[test]
    fn softmax_shift_invariance() {
        let x = Tensor::<f64>::from_f64_slice(&[5], &[0.3, -1.2, 2.0, 0.0, 4.5]);
        let shifted = x.map(|v| v + 123.456);
        let a = softmax_axis(&x, 0).unwrap();
        let b = softmax_axis(&shifted, 0).unwrap();
        assert!(a.max_abs_diff(&b) <= 1e-12);
    }

    #[test]
    fn dense_identity_and_hand_case() {
        let x = Tensor::<f64>::from_f64_slice(&[3], &[1.0, 2.0, 3.0]);
        let mut w = Tensor::<f64>::zeros(&[3, 3]);
        for i in 0..3 {
            w.data_mut()[i * 3 + i] = 1.0;
        }
        let b = Tensor::<f64>::zeros(&[3]);
        assert_eq!(dense(&x, &w, &b).unwrap().data(), &[1.0, 2.0, 3.0]);

        let x = Tensor::<f64>::from_f64_slice(&[2], &[1.0, 1.0]);
        let w = Tensor::<f64>::from_f64_slice(&[2, 1], &[1.0, 1.0]);
        let b = Tensor::<f64>::from_f64_slice(&[1], &[-2.0]);
        assert_eq!(dense(&x, &w, &b).unwrap().data(), &[0.0]);
    }

    #[test]
    fn concat_single_input_is_identity() {
        let x = t3(2, 3, 1, &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        assert_eq!(concat(&[&x], 0).unwrap(), x);
    }

    #[test]
    fn concat_slice_round_trip() {
        let a = Tensor::<f64>::from_f64_slice(&[1, 1, 2], &[1.0, 2.0]);
        let b = Tensor::<f64>::from_f64_slice(&[1, 1, 2], &[3.0, 4.0]);
        let c = Tensor::<f64>::from_f64_slice(&[1, 1, 2], &[5.0, 6.0]);
        let cat = concat(&[&a, &b, &c], 0).unwrap();
        assert_eq!(cat.shape(), &[3, 1, 2]);
        assert_eq!(slice(&cat, 0, 0, 1).unwrap(), a);
        assert_eq!(slice(&cat, 0, 1, 1).unwrap(), b);
        assert_eq!(slice(&cat, 0, 2, 1).unwrap(), c);
    }

    #[test]
    fn concat_rejects_off_axis_mismatch() {
        let a = Tensor::<f64>::ones(&[2, 3, 1]);
        let b = Tensor::<f64>::ones(&[2, 4, 1]);
        assert!(concat(&[&a, &b], 0).is_err());
    }

    #[test]
    fn mask_mul_repeats_rows() {
        let x = Tensor::<f64>::ones(&[4, 2, 1]);
        let mask = Tensor::<f64>::from_f64_slice(&[2, 1, 1], &[0.25, 0.5]);
        let y = mask_mul(&x, &mask).unwrap();
        assert_eq!(y.data(), &[0.25, 0.25, 0.25, 0.25, 0.5, 0.5, 0.5, 0.5]);
    }

    #[test]
    fn cross_entropy_uniform_is_ln_classes() {
        let logits = Tensor::<f64>::zeros(&[256]);
        let loss = cross_entropy_from_logits(&logits, 17).unwrap();
        assert!((loss - 256.0f64.ln()).abs() <= 1e-12);
    }

    #[test]
    fn bce_constant_half_is_ln2() {
        // sigmoid(0) = 0.5 everywhere
        let z = Tensor::<f64>::zeros(&[7]);
        let targets = [1.0, 0.0, 0.5, 1.0, 0.0, 0.5, 1.0];
        let loss = bce_from_logits(&z, &targets).unwrap();
        assert!((loss - 2.0f64.ln()).abs() <= 1e-12);
    }
}
