//! Built-in verification: oracle equivalences for the core math ops and a
//! gradient-check sweep, runnable from the CLI. Each check reports one
//! pass/fail line; any failure should make the caller exit non-zero.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::attention::{attention_pool, gamodule_forward, GaModuleConfig};
use crate::checkpoint::Checkpoint;
use crate::network::{build_network, forward_tempo, NetworkConfig};
use crate::ops::{self, Activation, Padding};
use crate::params::{Binder, NetworkParams};
use crate::tape::{grad_check, Tape};
use crate::tensor::Tensor;

pub struct CheckResult {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

fn check(name: &'static str, run: impl FnOnce() -> Result<String, String>) -> CheckResult {
    match run() {
        Ok(detail) => CheckResult { name, passed: true, detail },
        Err(detail) => CheckResult { name, passed: false, detail },
    }
}

fn rand_t(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    Tensor::rand_uniform(rng, shape, -1.0, 1.0)
}

fn conv_oracle(x: &Tensor<f64>, w: &Tensor<f64>, b: &Tensor<f64>) -> Tensor<f64> {
    let (f, t, cin) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let (kh, kw, cout) = (w.shape()[0], w.shape()[1], w.shape()[3]);
    let (pf, pt) = (kh / 2, kw / 2);
    let mut out = vec![0.0; f * t * cout];
    for fo in 0..f {
        for to in 0..t {
            for co in 0..cout {
                let mut acc = b.data()[co];
                for dh in 0..kh {
                    for dw in 0..kw {
                        let fi = fo as isize + dh as isize - pf as isize;
                        let ti = to as isize + dw as isize - pt as isize;
                        if fi < 0 || fi >= f as isize || ti < 0 || ti >= t as isize {
                            continue;
                        }
                        for ci in 0..cin {
                            acc += x.data()[((fi as usize) * t + ti as usize) * cin + ci]
                                * w.data()[((dh * kw + dw) * cin + ci) * cout + co];
                        }
                    }
                }
                out[(fo * t + to) * cout + co] = acc;
            }
        }
    }
    Tensor::new(vec![f, t, cout], out)
}

fn dot(a: &Tensor<f64>, b: &Tensor<f64>) -> f64 {
    a.data().iter().zip(b.data()).map(|(x, y)| x * y).sum()
}

/// Runs the whole suite; deterministic and self-contained.
pub fn run() -> Vec<CheckResult> {
    let mut results = Vec::new();

    results.push(check("conv2d vs quadruple-loop oracle", || {
        for seed in 0..5u64 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let x = rand_t(&mut rng, &[5, 7, 2]);
            let w = rand_t(&mut rng, &[3, 3, 2, 4]);
            let b = rand_t(&mut rng, &[4]);
            let got = ops::conv2d(&x, &w, Some(&b), (1, 1), Padding::Same).map_err(|e| e.to_string())?;
            let want = conv_oracle(&x, &w, &b);
            let d = got.max_abs_diff(&want);
            if d > 1e-12 {
                return Err(format!("seed {seed}: max diff {d:e}"));
            }
        }
        Ok("5 instances <= 1e-12".into())
    }));

    results.push(check("transposed conv scatter + adjoint identity", || {
        for seed in 0..5u64 {
            let mut rng = ChaCha8Rng::seed_from_u64(10 + seed);
            let v = rand_t(&mut rng, &[2, 8, 2]);
            let k = rand_t(&mut rng, &[1, 3, 2, 3]);
            let y = rand_t(&mut rng, &[2, 4, 3]);
            // swapped-channel copy of k
            let mut ks = vec![0.0; k.numel()];
            for tap in 0..3 {
                for ci in 0..2 {
                    for co in 0..3 {
                        ks[(tap * 3 + co) * 2 + ci] = k.data()[(tap * 2 + ci) * 3 + co];
                    }
                }
            }
            let k_swapped = Tensor::new(vec![1, 3, 3, 2], ks);
            let conv_v = ops::conv2d(&v, &k, None, (1, 2), Padding::Same).map_err(|e| e.to_string())?;
            let tconv_y = ops::transposed_conv2d(&y, &k_swapped, (1, 2)).map_err(|e| e.to_string())?;
            let lhs = dot(&conv_v, &y);
            let rhs = dot(&v, &tconv_y);
            if (lhs - rhs).abs() > 1e-10 {
                return Err(format!("seed {seed}: <conv v, y> = {lhs} vs <v, tconv y> = {rhs}"));
            }
        }
        Ok("adjoint holds <= 1e-10".into())
    }));

    results.push(check("pool2d vs loop oracle", || {
        for seed in 0..5u64 {
            let mut rng = ChaCha8Rng::seed_from_u64(20 + seed);
            let x = rand_t(&mut rng, &[6, 8, 3]);
            let got = ops::pool_avg(&x, (3, 2)).map_err(|e| e.to_string())?;
            for fo in 0..2 {
                for to in 0..4 {
                    for c in 0..3 {
                        let mut acc = 0.0;
                        for df in 0..3 {
                            for dt in 0..2 {
                                acc += x.data()[((fo * 3 + df) * 8 + to * 2 + dt) * 3 + c];
                            }
                        }
                        let want = acc / 6.0;
                        let v = got.data()[(fo * 4 + to) * 3 + c];
                        if (v - want).abs() > 1e-12 {
                            return Err(format!("seed {seed}: {v} vs {want}"));
                        }
                    }
                }
            }
        }
        Ok("5 instances <= 1e-12".into())
    }));

    results.push(check("dense vs loop oracle", || {
        for seed in 0..5u64 {
            let mut rng = ChaCha8Rng::seed_from_u64(30 + seed);
            let x = rand_t(&mut rng, &[7]);
            let w = rand_t(&mut rng, &[7, 4]);
            let b = rand_t(&mut rng, &[4]);
            let got = ops::dense(&x, &w, &b).map_err(|e| e.to_string())?;
            for j in 0..4 {
                let want = b.data()[j]
                    + (0..7).map(|i| x.data()[i] * w.data()[i * 4 + j]).sum::<f64>();
                if (got.data()[j] - want).abs() > 1e-12 {
                    return Err(format!("seed {seed} col {j}"));
                }
            }
        }
        Ok("5 instances <= 1e-12".into())
    }));

    results.push(check("attention pool vs two-pass oracle", || {
        for seed in 0..5u64 {
            let mut rng = ChaCha8Rng::seed_from_u64(40 + seed);
            let x = rand_t(&mut rng, &[3, 4, 2]);
            let w = rand_t(&mut rng, &[1, 1, 2, 1]);
            let mut tape = Tape::new();
            let xid = tape.constant(x.clone());
            let wid = tape.constant(w.clone());
            let z = attention_pool(&mut tape, xid, wid).map_err(|e| e.to_string())?;
            // two-pass oracle
            let mut logits = [0.0; 12];
            for (p, l) in logits.iter_mut().enumerate() {
                let raw = x.data()[p * 2] * w.data()[0] + x.data()[p * 2 + 1] * w.data()[1];
                *l = if raw >= 0.0 { raw } else { raw.exp() - 1.0 };
            }
            let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let exps: Vec<f64> = logits.iter().map(|&l| (l - m).exp()).collect();
            let total: f64 = exps.iter().sum();
            let mut want = [0.0; 2];
            for p in 0..12 {
                for c in 0..2 {
                    want[c] += exps[p] / total * x.data()[p * 2 + c];
                }
            }
            for c in 0..2 {
                if (tape.value(z).data()[c] - want[c]).abs() > 1e-12 {
                    return Err(format!("seed {seed} channel {c}"));
                }
            }
        }
        Ok("5 instances <= 1e-12".into())
    }));

    results.push(check("softmax contract (sum 1, shift invariant)", || {
        let mut rng = ChaCha8Rng::seed_from_u64(50);
        let x = rand_t(&mut rng, &[64]);
        let y = ops::softmax_axis(&x, 0).map_err(|e| e.to_string())?;
        let sum: f64 = y.data().iter().sum();
        if (sum - 1.0).abs() > 1e-9 || y.data().iter().any(|&v| v < 0.0) {
            return Err(format!("sum {sum}"));
        }
        let shifted = ops::softmax_axis(&x.map(|v| v + 41.5), 0).map_err(|e| e.to_string())?;
        if y.max_abs_diff(&shifted) > 1e-12 {
            return Err("shift invariance broken".into());
        }
        Ok("holds".into())
    }));

    results.push(check("gradient sweep over core ops", || {
        let mut worst: f64 = 0.0;
        for seed in 0..3u64 {
            let mut rng = ChaCha8Rng::seed_from_u64(60 + seed);
            let x = rand_t(&mut rng, &[4, 4, 2]);
            let w = rand_t(&mut rng, &[3, 3, 2, 2]);
            let b = rand_t(&mut rng, &[2]);
            let (wc, bc) = (w.clone(), b.clone());
            let e = grad_check(
                move |tape, x| {
                    let w = tape.constant(wc.clone());
                    let b = tape.constant(bc.clone());
                    let y = tape.conv2d(x, w, Some(b), (1, 1), Padding::Same)?;
                    let y = tape.activation(y, Activation::Elu);
                    let p = tape.pool_avg(y, (2, 2))?;
                    Ok(tape.sum(p))
                },
                &x.map(|v| if v.abs() < 1e-3 { v + 0.5 } else { v }),
                1e-5,
            )
            .map_err(|e| e.to_string())?;
            worst = worst.max(e);

            let logits = rand_t(&mut rng, &[16]);
            let e = grad_check(|tape, l| tape.cross_entropy_logits(l, 3), &logits, 1e-5)
                .map_err(|e| e.to_string())?;
            worst = worst.max(e);

            let z = rand_t(&mut rng, &[10]);
            let targets: Vec<f64> = (0..10).map(|i| (i % 2) as f64).collect();
            let e = grad_check(move |tape, z| tape.bce_logits(z, targets.clone()), &z, 1e-5)
                .map_err(|e| e.to_string())?;
            worst = worst.max(e);
        }
        if worst > 1e-6 {
            return Err(format!("max relative error {worst:e} > 1e-6"));
        }
        Ok(format!("max relative error {worst:e}"))
    }));

    results.push(check("grouped attention module gradient", || {
        let config = GaModuleConfig { in_channels: 2, out_channels: 4, pool: 2, groups: 3, in_freq: 6, in_time: 4 };
        let mut rng = ChaCha8Rng::seed_from_u64(70);
        let mut params = NetworkParams::new();
        for i in 0..3 {
            let ci = if i == 0 { 2 } else { 4 };
            params.insert(format!("m.trunk.conv{i}.w"), rand_t(&mut rng, &[3, 3, ci, 4]));
            params.insert(format!("m.trunk.conv{i}.b"), rand_t(&mut rng, &[4]));
        }
        for g in 0..3 {
            params.insert(format!("m.attn.g{g}.proj"), rand_t(&mut rng, &[1, 1, 2, 1]));
            params.insert(format!("m.attn.g{g}.fc1.w"), rand_t(&mut rng, &[2, 1]));
            params.insert(format!("m.attn.g{g}.fc1.b"), rand_t(&mut rng, &[1]));
            params.insert(format!("m.attn.g{g}.fc2.w"), rand_t(&mut rng, &[1, 4]));
            params.insert(format!("m.attn.g{g}.fc2.b"), rand_t(&mut rng, &[4]));
        }
        let x = rand_t(&mut rng, &[6, 4, 2]);
        let e = grad_check(
            |tape, x| {
                let mut binder = Binder::new(&params, false);
                let m = gamodule_forward(tape, &mut binder, x, "m", &config, false)?;
                let sq = tape.mul(m.out, m.out)?;
                Ok(tape.sum(sq))
            },
            &x,
            1e-5,
        )
        .map_err(|e| e.to_string())?;
        if e > 1e-4 {
            return Err(format!("relative error {e:e} > 1e-4"));
        }
        Ok(format!("relative error {e:e}"))
    }));

    results.push(check("full network composite gradient", || {
        let config = NetworkConfig {
            freq_in: 9,
            time_in: 16,
            channels: vec![4, 4],
            pools: vec![3, 3],
            groups: vec![3, 1],
            branches: 3,
            include_beat_branch: false,
            attention_bypass: false,
        };
        let params = build_network::<f64>(&config, 7).map_err(|e| e.to_string())?;
        let mut rng = ChaCha8Rng::seed_from_u64(80);
        let x = rand_t(&mut rng, &[9, 16, 1]);
        let e = grad_check(
            |tape, x| {
                let mut binder = Binder::new(&params, false);
                let trace = forward_tempo(tape, &mut binder, x, &config)?;
                tape.cross_entropy_logits(trace.logits, 11)
            },
            &x,
            1e-5,
        )
        .map_err(|e| e.to_string())?;
        if e > 1e-4 {
            return Err(format!("relative error {e:e} > 1e-4"));
        }
        Ok(format!("relative error {e:e}"))
    }));

    results.push(check("checkpoint byte round trip", || {
        let config = NetworkConfig::standard(0.25);
        let params = build_network::<f32>(&config, 5).map_err(|e| e.to_string())?;
        let ck = Checkpoint::new(config, params).map_err(|e| e.to_string())?;
        let back = Checkpoint::from_bytes(&ck.to_bytes()).map_err(|e| e.to_string())?;
        if back != ck {
            return Err("round trip not bit-exact".into());
        }
        Ok("bit-exact".into())
    }));

    results
}
