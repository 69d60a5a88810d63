//! Grouped attention module against the explicit two-pass / assemble-by-hand
//! oracles, plus the module-level invariants.

mod common;

use common::*;
use mganet::attention::{attention_branch, attention_pool, gamodule_forward, trunk_forward, GaModuleConfig};
use mganet::params::{Binder, NetworkParams};
use mganet::tape::Tape;
use mganet::Tensor;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const TOL: f64 = 1e-12;

fn module_params(config: &GaModuleConfig, seed: u64) -> NetworkParams<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (cin, c, h) = (config.in_channels, config.out_channels, config.bottleneck());
    let mut p = NetworkParams::new();
    for i in 0..3 {
        let ci = if i == 0 { cin } else { c };
        p.insert(format!("m.trunk.conv{i}.w"), rand_tensor(&mut rng, &[3, 3, ci, c], -0.7, 0.7));
        p.insert(format!("m.trunk.conv{i}.b"), rand_tensor(&mut rng, &[c], -0.2, 0.2));
    }
    for g in 0..config.groups {
        p.insert(format!("m.attn.g{g}.proj"), rand_tensor(&mut rng, &[1, 1, cin, 1], -0.7, 0.7));
        p.insert(format!("m.attn.g{g}.fc1.w"), rand_tensor(&mut rng, &[cin, h], -0.7, 0.7));
        p.insert(format!("m.attn.g{g}.fc1.b"), rand_tensor(&mut rng, &[h], -0.2, 0.2));
        p.insert(format!("m.attn.g{g}.fc2.w"), rand_tensor(&mut rng, &[h, c], -0.7, 0.7));
        p.insert(format!("m.attn.g{g}.fc2.b"), rand_tensor(&mut rng, &[c], -0.2, 0.2));
    }
    p
}

#[test]
fn attention_pool_matches_two_pass_oracle() {
    for seed in 0..24u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = rand_tensor(&mut rng, &[3, 4, 2], -2.0, 2.0);
        let w = rand_tensor(&mut rng, &[1, 1, 2, 1], -2.0, 2.0);
        let mut tape = Tape::new();
        let xid = tape.constant(x.clone());
        let wid = tape.constant(w.clone());
        let z = attention_pool(&mut tape, xid, wid).unwrap();
        let want = attention_pool_oracle(&x, &w);
        assert!(
            tape.value(z).max_abs_diff(&want) <= TOL,
            "attention_pool mismatch at seed {seed}"
        );
    }
}

#[test]
fn attention_weights_sum_to_one_and_are_nonnegative() {
    for seed in 0..10u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
        let x = rand_tensor(&mut rng, &[5, 7, 3], -4.0, 4.0);
        let w = rand_tensor(&mut rng, &[1, 1, 3, 1], -4.0, 4.0);
        // replicate the pooling front: conv -> ELU -> softmax over positions
        let mut tape = Tape::new();
        let xid = tape.constant(x);
        let wid = tape.constant(w);
        let logits = tape.conv2d(xid, wid, None, (1, 1), mganet::ops::Padding::Same).unwrap();
        let logits = tape.activation(logits, mganet::ops::Activation::Elu);
        let flat = tape.reshape(logits, &[35]).unwrap();
        let weights = tape.softmax_axis(flat, 0).unwrap();
        let w = tape.value(weights);
        assert!(w.data().iter().all(|&v| v >= 0.0));
        let sum: f64 = w.data().iter().sum();
        assert!((sum - 1.0).abs() <= 1e-9, "weights sum {sum}");
    }
}

#[test]
fn attention_branch_matches_step_by_step_oracle() {
    for seed in 0..20u64 {
        let config = GaModuleConfig { in_channels: 3, out_channels: 5, pool: 1, groups: 1, in_freq: 4, in_time: 3 };
        let params = module_params(&config, 200 + seed);
        let mut rng = ChaCha8Rng::seed_from_u64(300 + seed);
        let x = rand_tensor(&mut rng, &[4, 3, 3], -1.5, 1.5);
        let mut tape = Tape::new();
        let xid = tape.constant(x.clone());
        let mut binder = Binder::new(&params, false);
        let mask = attention_branch(&mut tape, &mut binder, xid, "m.attn.g0").unwrap();
        let want = attention_branch_oracle(
            &x,
            params.get("m.attn.g0.proj").unwrap(),
            params.get("m.attn.g0.fc1.w").unwrap(),
            params.get("m.attn.g0.fc1.b").unwrap(),
            params.get("m.attn.g0.fc2.w").unwrap(),
            params.get("m.attn.g0.fc2.b").unwrap(),
        );
        for (got, want) in tape.value(mask).data().iter().zip(&want) {
            assert!((got - want).abs() <= TOL, "branch mismatch at seed {seed}");
        }
    }
}

#[test]
fn trunk_identity_kernels_pass_nonnegative_input_through() {
    // center-tap identity kernels, zero bias, p = 1: trunk output == input
    // (ELU is identity on non-negative values)
    let c = 3usize;
    let mut params = NetworkParams::new();
    for i in 0..3 {
        let mut w = Tensor::<f64>::zeros(&[3, 3, c, c]);
        for ch in 0..c {
            // tap (1,1), in channel == out channel
            w.data_mut()[((3 + 1) * c + ch) * c + ch] = 1.0;
        }
        params.insert(format!("m.trunk.conv{i}.w"), w);
        params.insert(format!("m.trunk.conv{i}.b"), Tensor::<f64>::zeros(&[c]));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let x = rand_tensor(&mut rng, &[4, 6, c], 0.0, 2.0);
    let mut tape = Tape::new();
    let xid = tape.constant(x.clone());
    let mut binder = Binder::new(&params, false);
    let out = trunk_forward(&mut tape, &mut binder, xid, "m", 1).unwrap();
    assert!(tape.value(out).max_abs_diff(&x) <= TOL);
}

#[test]
fn trunk_first_stage_geometry() {
    // (81, 128, 1) with p = 3 and C = 16 pools to (27, 128, 16)
    let config = GaModuleConfig { in_channels: 1, out_channels: 16, pool: 3, groups: 3, in_freq: 81, in_time: 128 };
    let params = module_params(&config, 42);
    let mut rng = ChaCha8Rng::seed_from_u64(43);
    let x = rand_tensor(&mut rng, &[81, 128, 1], -1.0, 1.0);
    let mut tape = Tape::new();
    let xid = tape.constant(x);
    let mut binder = Binder::new(&params, false);
    let out = trunk_forward(&mut tape, &mut binder, xid, "m", 3).unwrap();
    assert_eq!(tape.shape(out), &[27, 128, 16]);
}

#[test]
fn gamodule_matches_assemble_by_hand_oracle() {
    let config = GaModuleConfig { in_channels: 2, out_channels: 4, pool: 2, groups: 3, in_freq: 6, in_time: 4 };
    for seed in 0..22u64 {
        let params = module_params(&config, 400 + seed);
        let mut rng = ChaCha8Rng::seed_from_u64(500 + seed);
        let x = rand_tensor(&mut rng, &[6, 4, 2], -1.5, 1.5);
        let mut tape = Tape::new();
        let xid = tape.constant(x.clone());
        let mut binder = Binder::new(&params, false);
        let m = gamodule_forward(&mut tape, &mut binder, xid, "m", &config, false).unwrap();
        let want = gamodule_oracle(&x, &params, "m", config.pool, config.groups);
        assert!(
            tape.value(m.out).max_abs_diff(&want) <= TOL,
            "gamodule mismatch at seed {seed}: {:e}",
            tape.value(m.out).max_abs_diff(&want)
        );
    }
}

#[test]
fn bypass_equals_trunk_exactly() {
    let config = GaModuleConfig { in_channels: 2, out_channels: 4, pool: 2, groups: 3, in_freq: 6, in_time: 4 };
    let params = module_params(&config, 7);
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let x = rand_tensor(&mut rng, &[6, 4, 2], -1.0, 1.0);

    let mut tape = Tape::new();
    let xid = tape.constant(x.clone());
    let mut binder = Binder::new(&params, false);
    let bypassed = gamodule_forward(&mut tape, &mut binder, xid, "m", &config, true).unwrap();

    let mut tape2 = Tape::new();
    let xid2 = tape2.constant(x);
    let mut binder2 = Binder::new(&params, false);
    let trunk = trunk_forward(&mut tape2, &mut binder2, xid2, "m", config.pool).unwrap();

    assert_eq!(tape.value(bypassed.out), tape2.value(trunk));
    assert_eq!(tape.value(bypassed.out), tape.value(bypassed.trunk));
}

#[test]
fn k1_reduces_to_global_attention_over_whole_feature() {
    let config = GaModuleConfig { in_channels: 2, out_channels: 4, pool: 2, groups: 1, in_freq: 6, in_time: 4 };
    let params = module_params(&config, 17);
    let mut rng = ChaCha8Rng::seed_from_u64(18);
    let x = rand_tensor(&mut rng, &[6, 4, 2], -1.0, 1.0);

    let mut tape = Tape::new();
    let xid = tape.constant(x.clone());
    let mut binder = Binder::new(&params, false);
    let m = gamodule_forward(&mut tape, &mut binder, xid, "m", &config, false).unwrap();

    // one attention branch over the whole input, one mask row everywhere
    let mut tape2 = Tape::new();
    let xid2 = tape2.constant(x.clone());
    let mut binder2 = Binder::new(&params, false);
    let mask = attention_branch(&mut tape2, &mut binder2, xid2, "m.attn.g0").unwrap();
    let mask = tape2.value(mask).clone();
    let trunk = gamodule_oracle(&x, &params, "m", config.pool, 1);
    for fi in 0..3 {
        for ti in 0..4 {
            for ch in 0..4 {
                let got = tape.value(m.out).data()[(fi * 4 + ti) * 4 + ch];
                let t = trunk.data()[(fi * 4 + ti) * 4 + ch];
                assert!((got - t).abs() <= TOL);
                let _ = mask.data()[ch];
            }
        }
    }
}

#[test]
fn group_independence_of_masks() {
    // perturbing input rows of group 1 must leave the other groups' mask
    // rows bit-identical
    let config = GaModuleConfig { in_channels: 2, out_channels: 4, pool: 1, groups: 3, in_freq: 6, in_time: 4 };
    let params = module_params(&config, 33);
    let mut rng = ChaCha8Rng::seed_from_u64(34);
    let x = rand_tensor(&mut rng, &[6, 4, 2], -1.0, 1.0);
    let mut x2 = x.clone();
    // rows 2..4 belong to group 1 (two rows per group)
    for ti in 0..4 {
        for ci in 0..2 {
            x2.data_mut()[((2 * 4) + ti) * 2 + ci] += 0.37;
            x2.data_mut()[((3 * 4) + ti) * 2 + ci] -= 0.21;
        }
    }

    let masks = |input: &Tensor<f64>| -> Vec<Vec<f64>> {
        (0..3)
            .map(|g| {
                let mut tape = Tape::new();
                let mut group = vec![0.0; 2 * 4 * 2];
                for r in 0..2 {
                    for ti in 0..4 {
                        for ci in 0..2 {
                            group[(r * 4 + ti) * 2 + ci] = input.data()[(((g * 2) + r) * 4 + ti) * 2 + ci];
                        }
                    }
                }
                let gid = tape.constant(Tensor::new(vec![2, 4, 2], group));
                let mut binder = Binder::new(&params, false);
                let mask = attention_branch(&mut tape, &mut binder, gid, &format!("m.attn.g{g}")).unwrap();
                tape.value(mask).data().to_vec()
            })
            .collect()
    };
    let before = masks(&x);
    let after = masks(&x2);
    assert_eq!(before[0], after[0], "group 0 mask changed");
    assert_ne!(before[1], after[1], "group 1 mask should change");
    assert_eq!(before[2], after[2], "group 2 mask changed");
}
