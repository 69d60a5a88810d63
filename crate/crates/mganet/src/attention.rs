//! Grouped attention module: a three-conv trunk downsampled in frequency,
//! recalibrated by per-frequency-group channel attention masks.
//!
//! The input is split into `k` contiguous frequency groups. Each group is
//! squeezed to a channel descriptor by global attention pooling (scalar
//! logit per position via a 1x1 projection, ELU, softmax over all
//! positions, weighted sum), pushed through a bottleneck (reduction 4 on
//! the input channels, ELU, then expansion to the trunk channel count) and
//! a sigmoid. The k masks concatenate along frequency to `(k,1,C)` and
//! multiply the pooled trunk output with row-repeat broadcasting.

use crate::error::{Error, Result};
use crate::ops::{Activation, Padding};
use crate::params::Binder;
use crate::tape::{NodeId, Tape};
use crate::tensor::Scalar;

/// Geometry and sizing of one module instance.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct GaModuleConfig {
    pub in_channels: usize,
    pub out_channels: usize,
    /// Frequency pooling size `p`.
    pub pool: usize,
    /// Attention group count `k`.
    pub groups: usize,
    pub in_freq: usize,
    pub in_time: usize,
}

impl GaModuleConfig {
    /// Attention bottleneck width: input channels reduced by 4, floored at 1.
    pub fn bottleneck(&self) -> usize {
        (self.in_channels / 4).max(1)
    }

    pub fn out_freq(&self) -> usize {
        self.in_freq / self.pool
    }

    pub fn validate(&self) -> Result<()> {
        let c = *self;
        let fail = |why: String| Err(Error::Config(format!("gamodule {c:?}: {why}")));
        if c.in_channels == 0 || c.out_channels == 0 || c.in_freq == 0 || c.in_time == 0 {
            return fail("zero-sized dimension".into());
        }
        if c.out_channels < 4 {
            return fail(format!("out_channels {} < 4 leaves no bottleneck room", c.out_channels));
        }
        if c.groups == 0 || c.in_freq % c.groups != 0 {
            return fail(format!("in_freq {} not divisible by groups {}", c.in_freq, c.groups));
        }
        if c.pool == 0 || c.in_freq % c.pool != 0 {
            return fail(format!("in_freq {} not divisible by pool {}", c.in_freq, c.pool));
        }
        if (c.in_freq / c.pool) % c.groups != 0 {
            return fail(format!(
                "pooled freq {} not divisible by groups {}",
                c.in_freq / c.pool,
                c.groups
            ));
        }
        Ok(())
    }
}

/// Global attention pooling of one frequency group.
///
/// `x` is `(Fg, T, Cin)`; `w` is the `(1,1,Cin,1)` projection. Produces the
/// `(Cin)` descriptor: softmax over all `Fg*T` positions of `ELU(w·x_j)`,
/// then the weighted sum of position vectors.
pub fn attention_pool<T: Scalar>(tape: &mut Tape<T>, x: NodeId, w: NodeId) -> Result<NodeId> {
    let (f, t, cin) = match tape.shape(x) {
        [f, t, c] => (*f, *t, *c),
        s => {
            return Err(Error::Shape {
                op: "attention_pool",
                detail: format!("expected (Fg,T,Cin) input, got {s:?}"),
            })
        }
    };
    let positions = f * t;
    let logits = tape.conv2d_act(x, w, None, (1, 1), Padding::Same, Activation::Elu)?;
    let logits = tape.reshape(logits, &[positions])?;
    let weights = tape.softmax_axis(logits, 0)?;
    let weights_row = tape.reshape(weights, &[1, positions])?;
    let x_mat = tape.reshape(x, &[positions, cin])?;
    let z = tape.matmul(weights_row, x_mat)?;
    tape.reshape(z, &[cin])
}

/// One attention branch: pool, bottleneck (ELU), expand, sigmoid; result is
/// a `(1,1,C)` mask with every entry strictly inside (0,1).
pub fn attention_branch<T: Scalar>(
    tape: &mut Tape<T>,
    binder: &mut Binder<'_, T>,
    group: NodeId,
    prefix: &str,
) -> Result<NodeId> {
    let proj = binder.node(tape, &format!("{prefix}.proj"))?;
    let z = attention_pool(tape, group, proj)?;
    let w1 = binder.node(tape, &format!("{prefix}.fc1.w"))?;
    let b1 = binder.node(tape, &format!("{prefix}.fc1.b"))?;
    let h = tape.dense(z, w1, b1)?;
    let h = tape.activation(h, Activation::Elu);
    let w2 = binder.node(tape, &format!("{prefix}.fc2.w"))?;
    let b2 = binder.node(tape, &format!("{prefix}.fc2.b"))?;
    let a = tape.dense(h, w2, b2)?;
    let a = tape.activation(a, Activation::Sigmoid);
    let c = tape.value(a).numel();
    tape.reshape(a, &[1, 1, c])
}

/// Trunk: three 3x3 `same` convolutions with ELU, then frequency pooling
/// by `p`. Time resolution is preserved throughout.
pub fn trunk_forward<T: Scalar>(
    tape: &mut Tape<T>,
    binder: &mut Binder<'_, T>,
    x: NodeId,
    prefix: &str,
    pool: usize,
) -> Result<NodeId> {
    let mut cur = x;
    for i in 0..3 {
        let w = binder.node(tape, &format!("{prefix}.trunk.conv{i}.w"))?;
        let b = binder.node(tape, &format!("{prefix}.trunk.conv{i}.b"))?;
        cur = tape.conv2d_act(cur, w, Some(b), (1, 1), Padding::Same, Activation::Elu)?;
    }
    tape.pool_avg(cur, (pool, 1))
}

/// Output of [`gamodule_forward`]: the pooled trunk map (pre-attention) and
/// the attention-recalibrated result.
pub struct GaModuleOut {
    pub trunk: NodeId,
    pub out: NodeId,
}

/// Full module: trunk processing plus `k` independent attention branches
/// reading the module input. With `bypass` the masks are skipped entirely
/// and the output is exactly the trunk output.
pub fn gamodule_forward<T: Scalar>(
    tape: &mut Tape<T>,
    binder: &mut Binder<'_, T>,
    x: NodeId,
    prefix: &str,
    config: &GaModuleConfig,
    bypass: bool,
) -> Result<GaModuleOut> {
    config.validate()?;
    if tape.shape(x) != [config.in_freq, config.in_time, config.in_channels] {
        return Err(Error::Shape {
            op: "gamodule_forward",
            detail: format!(
                "input {:?} does not match config ({}, {}, {})",
                tape.shape(x),
                config.in_freq,
                config.in_time,
                config.in_channels
            ),
        });
    }
    let trunk = trunk_forward(tape, binder, x, prefix, config.pool)?;
    if bypass {
        return Ok(GaModuleOut { trunk, out: trunk });
    }
    let group_rows = config.in_freq / config.groups;
    let mut masks = Vec::with_capacity(config.groups);
    for g in 0..config.groups {
        let group = tape.slice(x, 0, g * group_rows, group_rows)?;
        let mask = attention_branch(tape, binder, group, &format!("{prefix}.attn.g{g}"))?;
        masks.push(mask);
    }
    let mask = tape.concat(&masks, 0)?;
    let out = tape.mask_mul(trunk, mask)?;
    Ok(GaModuleOut { trunk, out })
}
