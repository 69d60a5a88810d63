//! Brute-force reference implementations shared by the integration suites.
//!
//! Everything here is written as plain nested loops, independent of the
//! im2col/GEMM path used by the library, so the two can check each other.

#![allow(dead_code)]
#![allow(clippy::needless_range_loop)]

use mganet::ops::Padding;
use mganet::Tensor;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

pub fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    Tensor::<f64>::rand_uniform(rng, shape, lo, hi)
}

/// Output extent and low-side padding for one conv axis, mirroring the
/// documented padding contract (extra pad on the high-index side).
pub fn axis_geom(input: usize, kernel: usize, stride: usize, padding: Padding) -> (usize, usize) {
    match padding {
        Padding::Same => {
            let out = input.div_ceil(stride);
            let pad_total = ((out - 1) * stride + kernel).saturating_sub(input);
            (out, pad_total / 2)
        }
        Padding::Valid => ((input - kernel) / stride + 1, 0),
    }
}

/// Quadruple-loop direct convolution.
pub fn conv2d_oracle(
    x: &Tensor<f64>,
    w: &Tensor<f64>,
    bias: Option<&Tensor<f64>>,
    stride: (usize, usize),
    padding: Padding,
) -> Tensor<f64> {
    let (f, t, cin) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let (kh, kw, _, cout) = (w.shape()[0], w.shape()[1], w.shape()[2], w.shape()[3]);
    let (of, pf) = axis_geom(f, kh, stride.0, padding);
    let (ot, pt) = axis_geom(t, kw, stride.1, padding);
    let mut out = vec![0.0; of * ot * cout];
    for fo in 0..of {
        for to in 0..ot {
            for co in 0..cout {
                let mut acc = bias.map_or(0.0, |b| b.data()[co]);
                for dh in 0..kh {
                    for dw in 0..kw {
                        let fi = (fo * stride.0 + dh) as isize - pf as isize;
                        let ti = (to * stride.1 + dw) as isize - pt as isize;
                        if fi < 0 || fi as usize >= f || ti < 0 || ti as usize >= t {
                            continue;
                        }
                        for ci in 0..cin {
                            acc += x.data()[((fi as usize) * t + ti as usize) * cin + ci]
                                * w.data()[((dh * kw + dw) * cin + ci) * cout + co];
                        }
                    }
                }
                out[(fo * ot + to) * cout + co] = acc;
            }
        }
    }
    Tensor::new(vec![of, ot, cout], out)
}

/// Scatter-add oracle for the transposed convolution.
pub fn transposed_conv2d_oracle(
    x: &Tensor<f64>,
    w: &Tensor<f64>,
    stride: (usize, usize),
) -> Tensor<f64> {
    let (f, t, cin) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let (kh, kw, _, cout) = (w.shape()[0], w.shape()[1], w.shape()[2], w.shape()[3]);
    let (out_f, out_t) = (f * stride.0, t * stride.1);
    let (_, pf) = axis_geom(out_f, kh, stride.0, Padding::Same);
    let (_, pt) = axis_geom(out_t, kw, stride.1, Padding::Same);
    let mut out = vec![0.0; out_f * out_t * cout];
    for fi in 0..f {
        for ti in 0..t {
            for dh in 0..kh {
                for dw in 0..kw {
                    let of = (fi * stride.0 + dh) as isize - pf as isize;
                    let ot = (ti * stride.1 + dw) as isize - pt as isize;
                    if of < 0 || of as usize >= out_f || ot < 0 || ot as usize >= out_t {
                        continue;
                    }
                    for ci in 0..cin {
                        for co in 0..cout {
                            out[((of as usize) * out_t + ot as usize) * cout + co] += x.data()
                                [(fi * t + ti) * cin + ci]
                                * w.data()[((dh * kw + dw) * cin + ci) * cout + co];
                        }
                    }
                }
            }
        }
    }
    Tensor::new(vec![out_f, out_t, cout], out)
}

/// Loop oracle for window average pooling.
pub fn pool_avg_oracle(x: &Tensor<f64>, window: (usize, usize)) -> Tensor<f64> {
    let (f, t, c) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let (ph, pw) = window;
    let (of, ot) = (f / ph, t / pw);
    let mut out = vec![0.0; of * ot * c];
    for fo in 0..of {
        for to in 0..ot {
            for ch in 0..c {
                let mut acc = 0.0;
                for df in 0..ph {
                    for dt in 0..pw {
                        acc += x.data()[((fo * ph + df) * t + (to * pw + dt)) * c + ch];
                    }
                }
                out[(fo * ot + to) * c + ch] = acc / (ph * pw) as f64;
            }
        }
    }
    Tensor::new(vec![of, ot, c], out)
}

/// Loop oracle for the affine layer.
pub fn dense_oracle(x: &Tensor<f64>, w: &Tensor<f64>, b: &Tensor<f64>) -> Tensor<f64> {
    let n = x.numel();
    let m = w.shape()[1];
    let mut out = vec![0.0; m];
    for j in 0..m {
        let mut acc = b.data()[j];
        for i in 0..n {
            acc += x.data()[i] * w.data()[i * m + j];
        }
        out[j] = acc;
    }
    Tensor::new(vec![m], out)
}

/// Explicit two-pass oracle for global attention pooling over one frequency
/// group: logits in a first pass, normalized weighted sum in a second.
pub fn attention_pool_oracle(x: &Tensor<f64>, w: &Tensor<f64>) -> Tensor<f64> {
    let (f, t, cin) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let positions = f * t;
    let mut logits = vec![0.0; positions];
    for p in 0..positions {
        let mut acc = 0.0;
        for ci in 0..cin {
            acc += x.data()[p * cin + ci] * w.data()[ci];
        }
        logits[p] = if acc >= 0.0 { acc } else { acc.exp() - 1.0 };
    }
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&l| (l - m).exp()).collect();
    let total: f64 = exps.iter().sum();
    let mut z = vec![0.0; cin];
    for p in 0..positions {
        let weight = exps[p] / total;
        for ci in 0..cin {
            z[ci] += weight * x.data()[p * cin + ci];
        }
    }
    Tensor::new(vec![cin], z)
}

fn elu(v: f64) -> f64 {
    if v >= 0.0 {
        v
    } else {
        v.exp() - 1.0
    }
}

fn sigmoid(v: f64) -> f64 {
    1.0 / (1.0 + (-v).exp())
}

/// Step-by-step oracle for one attention branch: pool, bottleneck with ELU,
/// expansion, sigmoid.
#[allow(clippy::too_many_arguments)]
pub fn attention_branch_oracle(
    x: &Tensor<f64>,
    proj: &Tensor<f64>,
    fc1_w: &Tensor<f64>,
    fc1_b: &Tensor<f64>,
    fc2_w: &Tensor<f64>,
    fc2_b: &Tensor<f64>,
) -> Vec<f64> {
    let z = attention_pool_oracle(x, proj);
    let h: Vec<f64> = dense_oracle(&z, fc1_w, fc1_b).into_data().into_iter().map(elu).collect();
    let h = Tensor::new(vec![h.len()], h);
    dense_oracle(&h, fc2_w, fc2_b).into_data().into_iter().map(sigmoid).collect()
}

/// Assemble-by-hand oracle for the whole grouped attention module: trunk by
/// composing the loop oracles, masks per group, repeat-broadcast multiply.
pub fn gamodule_oracle(
    x: &Tensor<f64>,
    params: &mganet::params::NetworkParams<f64>,
    prefix: &str,
    pool: usize,
    groups: usize,
) -> Tensor<f64> {
    let (f, t, _) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    // trunk
    let mut h = x.clone();
    for i in 0..3 {
        let w = params.get(&format!("{prefix}.trunk.conv{i}.w")).unwrap();
        let b = params.get(&format!("{prefix}.trunk.conv{i}.b")).unwrap();
        let conv = conv2d_oracle(&h, w, Some(b), (1, 1), Padding::Same);
        h = conv.map(elu);
    }
    let trunk = pool_avg_oracle(&h, (pool, 1));
    // masks from the module input
    let rows_per_group = f / groups;
    let c = trunk.shape()[2];
    let mut mask = Vec::with_capacity(groups * c);
    for g in 0..groups {
        let mut group = vec![0.0; rows_per_group * t * x.shape()[2]];
        let cin = x.shape()[2];
        for r in 0..rows_per_group {
            for ti in 0..t {
                for ci in 0..cin {
                    group[(r * t + ti) * cin + ci] =
                        x.data()[(((g * rows_per_group) + r) * t + ti) * cin + ci];
                }
            }
        }
        let group = Tensor::new(vec![rows_per_group, t, cin], group);
        let ap = format!("{prefix}.attn.g{g}");
        mask.extend(attention_branch_oracle(
            &group,
            params.get(&format!("{ap}.proj")).unwrap(),
            params.get(&format!("{ap}.fc1.w")).unwrap(),
            params.get(&format!("{ap}.fc1.b")).unwrap(),
            params.get(&format!("{ap}.fc2.w")).unwrap(),
            params.get(&format!("{ap}.fc2.b")).unwrap(),
        ));
    }
    // repeat-broadcast multiply
    let (fp, tt) = (trunk.shape()[0], trunk.shape()[1]);
    let r = fp / groups;
    let mut out = vec![0.0; trunk.numel()];
    for fi in 0..fp {
        for ti in 0..tt {
            for ch in 0..c {
                out[(fi * tt + ti) * c + ch] =
                    trunk.data()[(fi * tt + ti) * c + ch] * mask[(fi / r) * c + ch];
            }
        }
    }
    Tensor::new(trunk.shape().to_vec(), out)
}

pub fn inner_product(a: &Tensor<f64>, b: &Tensor<f64>) -> f64 {
    a.data().iter().zip(b.data()).map(|(x, y)| x * y).sum()
}

/// Kernel with swapped channel axes, `(kh,kw,Cin,Cout)` -> `(kh,kw,Cout,Cin)`.
pub fn swap_kernel(w: &Tensor<f64>) -> Tensor<f64> {
    let (kh, kw, cin, cout) = (w.shape()[0], w.shape()[1], w.shape()[2], w.shape()[3]);
    let mut out = vec![0.0; w.numel()];
    for tap in 0..kh * kw {
        for ci in 0..cin {
            for co in 0..cout {
                out[(tap * cout + co) * cin + ci] = w.data()[(tap * cin + ci) * cout + co];
            }
        }
    }
    Tensor::new(vec![kh, kw, cout, cin], out)
}

/// Spectral-flux onset envelope of a mel spectrogram: per frame, the sum of
/// positive bin-wise differences against the previous frame.
pub fn onset_envelope(spec: &mganet::frontend::MelSpectrogram) -> Vec<f64> {
    let bins = mganet::frontend::MEL_BINS;
    let mut env = vec![0.0; spec.frames];
    for t in 1..spec.frames {
        let mut acc = 0.0;
        for b in 0..bins {
            let d = spec.at(b, t) - spec.at(b, t - 1);
            if d > 0.0 {
                acc += d;
            }
        }
        env[t] = acc;
    }
    env
}

/// Local maxima above `ratio * max(env)`, refined to sub-frame positions by
/// parabolic interpolation.
pub fn envelope_peaks(env: &[f64], ratio: f64) -> Vec<f64> {
    let max = env.iter().cloned().fold(0.0f64, f64::max);
    let threshold = ratio * max;
    let mut peaks = Vec::new();
    for i in 1..env.len().saturating_sub(1) {
        if env[i] > threshold && env[i] >= env[i - 1] && env[i] > env[i + 1] {
            let (a, b, c) = (env[i - 1], env[i], env[i + 1]);
            let denom = a - 2.0 * b + c;
            let shift = if denom.abs() > 1e-12 { 0.5 * (a - c) / denom } else { 0.0 };
            peaks.push(i as f64 + shift.clamp(-0.5, 0.5));
        }
    }
    peaks
}

/// Median of consecutive differences.
pub fn median_spacing(peaks: &[f64]) -> Option<f64> {
    median_spacing_strided(peaks, 1)
}

/// Median per-period spacing measured across `stride` periods at a time,
/// which divides the per-peak quantization bias by the stride.
pub fn median_spacing_strided(peaks: &[f64], stride: usize) -> Option<f64> {
    if peaks.len() < stride + 1 {
        return None;
    }
    let mut d: Vec<f64> = peaks
        .windows(stride + 1)
        .map(|w| (w[stride] - w[0]) / stride as f64)
        .collect();
    d.sort_by(|a, b| a.partial_cmp(b).unwrap());
    Some(if d.len() % 2 == 1 {
        d[d.len() / 2]
    } else {
        (d[d.len() / 2 - 1] + d[d.len() / 2]) / 2.0
    })
}

/// Pearson correlation coefficient.
pub fn pearson(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let mut cov = 0.0;
    let mut va = 0.0;
    let mut vb = 0.0;
    for (&x, &y) in a.iter().zip(b) {
        cov += (x - ma) * (y - mb);
        va += (x - ma) * (x - ma);
        vb += (y - mb) * (y - mb);
    }
    if va == 0.0 || vb == 0.0 {
        return 0.0;
    }
    cov / (va.sqrt() * vb.sqrt())
}

/// Draws a small random conv case: returns (x, w, bias, stride).
pub fn random_conv_case(
    rng: &mut ChaCha8Rng,
) -> (Tensor<f64>, Tensor<f64>, Tensor<f64>, (usize, usize)) {
    let f = rng.random_range(1..8usize);
    let t = rng.random_range(1..10usize);
    let cin = rng.random_range(1..4usize);
    let cout = rng.random_range(1..5usize);
    let kh = *[1usize, 3, 5].get(rng.random_range(0..3usize)).unwrap();
    let kw = *[1usize, 3, 5].get(rng.random_range(0..3usize)).unwrap();
    let stride = (rng.random_range(1..3usize), rng.random_range(1..3usize));
    let x = rand_tensor(rng, &[f, t, cin], -1.0, 1.0);
    let w = rand_tensor(rng, &[kh, kw, cin, cout], -1.0, 1.0);
    let b = rand_tensor(rng, &[cout], -0.5, 0.5);
    (x, w, b, stride)
}
