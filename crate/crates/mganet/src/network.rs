//! Network assembly: parallel time-scale branches of grouped-attention
//! modules, cross-branch fusion after every stage, the 256-class tempo
//! head, and the optional beat-tracking branch.

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::attention::{gamodule_forward, GaModuleConfig};
use crate::error::{Error, Result};
use crate::frontend::MelSegment;
use crate::ops::{Activation, Padding};
use crate::params::{Binder, NetworkParams};
use crate::tape::{NodeId, Tape};
use crate::tensor::{Scalar, Tensor};

pub const CLASS_COUNT: usize = 256;
pub const BPM_MIN: f64 = 30.0;
pub const BPM_MAX: f64 = 285.0;

/// BPM represented by a class index (class `i` is `30 + i` BPM).
pub fn class_to_bpm(class: usize) -> f64 {
    debug_assert!(class < CLASS_COUNT);
    BPM_MIN + class as f64
}

/// Class index for a BPM value; the flag reports when the value had to be
/// clamped into `[30, 285]`.
pub fn bpm_to_class(bpm: f64) -> (usize, bool) {
    let rounded = bpm.round();
    if rounded < BPM_MIN {
        (0, true)
    } else if rounded > BPM_MAX {
        (CLASS_COUNT - 1, true)
    } else {
        ((rounded - BPM_MIN) as usize, false)
    }
}

/// Sizing of the whole network. `channels`/`pools`/`groups` are per stage;
/// branch `b` runs at time resolution `time_in >> b`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct NetworkConfig {
    pub freq_in: usize,
    pub time_in: usize,
    pub channels: Vec<usize>,
    pub pools: Vec<usize>,
    pub groups: Vec<usize>,
    pub branches: usize,
    pub include_beat_branch: bool,
    /// Ablation: drop the attention branches, keep only trunks.
    pub attention_bypass: bool,
}

impl NetworkConfig {
    /// The reference geometry: 81 mel rows, 128 frames, four stages pooling
    /// 81 -> 27 -> 9 -> 3 -> 1, channels (16,32,64,128) scaled by `width`,
    /// groups (3,3,3,1), three branches.
    pub fn standard(width: f64) -> Self {
        let scale = |base: usize| ((base as f64 * width).round() as usize).max(4);
        NetworkConfig {
            freq_in: 81,
            time_in: 128,
            channels: vec![scale(16), scale(32), scale(64), scale(128)],
            pools: vec![3, 3, 3, 3],
            groups: vec![3, 3, 3, 1],
            branches: 3,
            include_beat_branch: false,
            attention_bypass: false,
        }
    }

    pub fn stages(&self) -> usize {
        self.channels.len()
    }

    pub fn stage_in_channels(&self, stage: usize) -> usize {
        if stage == 0 {
            1
        } else {
            self.channels[stage - 1]
        }
    }

    /// Frequency extent entering a stage.
    pub fn freq_at_stage(&self, stage: usize) -> usize {
        let mut f = self.freq_in;
        for s in 0..stage {
            f /= self.pools[s];
        }
        f
    }

    pub fn branch_time(&self, branch: usize) -> usize {
        self.time_in >> branch
    }

    /// Channel count of the per-branch tempo head output (256 at width 1).
    pub fn head_channels(&self) -> usize {
        2 * self.channels[self.stages() - 1]
    }

    pub fn feature_channels(&self) -> usize {
        self.channels[self.stages() - 1]
    }

    /// Beat branch conv channel schedule (128, 32, 1 at width 1).
    pub fn beat_channels(&self) -> [usize; 3] {
        let c = self.feature_channels();
        [c, (c / 4).max(1), 1]
    }

    pub fn module_config(&self, branch: usize, stage: usize) -> GaModuleConfig {
        GaModuleConfig {
            in_channels: self.stage_in_channels(stage),
            out_channels: self.channels[stage],
            pool: self.pools[stage],
            groups: self.groups[stage],
            in_freq: self.freq_at_stage(stage),
            in_time: self.branch_time(branch),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.branches == 0 || self.branches > 3 {
            return Err(Error::Config(format!("branches must be 1..=3, got {}", self.branches)));
        }
        let stages = self.stages();
        if stages == 0 || self.pools.len() != stages || self.groups.len() != stages {
            return Err(Error::Config(format!(
                "schedule lengths disagree: channels {}, pools {}, groups {}",
                stages,
                self.pools.len(),
                self.groups.len()
            )));
        }
        let scale = 1usize << (self.branches - 1);
        if self.time_in % scale != 0 || self.branch_time(self.branches - 1) == 0 {
            return Err(Error::Config(format!(
                "time extent {} does not divide across {} branches",
                self.time_in, self.branches
            )));
        }
        for s in 0..stages {
            self.module_config(0, s)
                .validate()
                .map_err(|e| Error::Config(format!("stage {s}: {e}")))?;
        }
        if self.freq_at_stage(stages) != 1 {
            return Err(Error::Config(format!(
                "frequency ladder must end at 1, got {} after {} stages",
                self.freq_at_stage(stages),
                stages
            )));
        }
        Ok(())
    }
}

enum Init {
    Glorot { fan_in: usize, fan_out: usize },
    Zero,
}

fn conv_entry(name: String, kh: usize, kw: usize, cin: usize, cout: usize) -> [(String, Vec<usize>, Init); 2] {
    [
        (
            format!("{name}.w"),
            vec![kh, kw, cin, cout],
            Init::Glorot { fan_in: kh * kw * cin, fan_out: kh * kw * cout },
        ),
        (format!("{name}.b"), vec![cout], Init::Zero),
    ]
}

fn dense_entry(name: String, n: usize, m: usize) -> [(String, Vec<usize>, Init); 2] {
    [
        (format!("{name}.w"), vec![n, m], Init::Glorot { fan_in: n, fan_out: m }),
        (format!("{name}.b"), vec![m], Init::Zero),
    ]
}

/// Single source of truth for every parameter name, its shape, and its
/// initializer, in deterministic creation order.
fn param_layout(config: &NetworkConfig) -> Vec<(String, Vec<usize>, Init)> {
    let mut out = Vec::new();
    let stages = config.stages();
    for b in 0..config.branches {
        for s in 0..stages {
            let mc = config.module_config(b, s);
            let prefix = format!("branch{b}.stage{s}");
            out.extend(conv_entry(format!("{prefix}.trunk.conv0"), 3, 3, mc.in_channels, mc.out_channels));
            out.extend(conv_entry(format!("{prefix}.trunk.conv1"), 3, 3, mc.out_channels, mc.out_channels));
            out.extend(conv_entry(format!("{prefix}.trunk.conv2"), 3, 3, mc.out_channels, mc.out_channels));
            if !config.attention_bypass {
                let h = mc.bottleneck();
                for g in 0..mc.groups {
                    let ap = format!("{prefix}.attn.g{g}");
                    out.push((
                        format!("{ap}.proj"),
                        vec![1, 1, mc.in_channels, 1],
                        Init::Glorot { fan_in: mc.in_channels, fan_out: 1 },
                    ));
                    out.extend(dense_entry(format!("{ap}.fc1"), mc.in_channels, h));
                    out.extend(dense_entry(format!("{ap}.fc2"), h, mc.out_channels));
                }
            }
        }
    }
    if config.branches > 1 {
        for s in 0..stages {
            let c = config.channels[s];
            for i in 0..config.branches {
                out.extend(conv_entry(format!("fuse{s}.b{i}"), 1, 1, config.branches * c, c));
            }
            for j in 0..config.branches {
                for i in 0..j {
                    for step in 0..(j - i) {
                        out.extend(conv_entry(format!("fuse{s}.up.b{j}to{i}.k{step}"), 1, 3, c, c));
                    }
                }
            }
        }
    }
    let c_last = config.feature_channels();
    let head = config.head_channels();
    for b in 0..config.branches {
        out.extend(conv_entry(format!("head.b{b}"), 1, 3, c_last, head));
    }
    out.extend(dense_entry("classifier".into(), config.branches * head, CLASS_COUNT));
    if config.include_beat_branch {
        for b in 1..config.branches {
            for step in 0..b {
                out.extend(conv_entry(format!("beat.up.b{b}.k{step}"), 1, 3, c_last, c_last));
            }
        }
        let bc = config.beat_channels();
        out.extend(conv_entry("beat.conv0".into(), 1, 3, config.branches * c_last, bc[0]));
        out.extend(conv_entry("beat.conv1".into(), 1, 3, bc[0], bc[1]));
        out.extend(conv_entry("beat.conv2".into(), 1, 3, bc[1], bc[2]));
    }
    out
}

/// Expected name -> shape map for a config (checkpoint validation).
pub fn expected_param_shapes(config: &NetworkConfig) -> BTreeMap<String, Vec<usize>> {
    param_layout(config)
        .into_iter()
        .map(|(name, shape, _)| (name, shape))
        .collect()
}

/// Glorot-uniform initialized parameters, deterministic in the seed.
pub fn build_network<T: Scalar>(config: &NetworkConfig, seed: u64) -> Result<NetworkParams<T>> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params = NetworkParams::new();
    for (name, shape, init) in param_layout(config) {
        let tensor = match init {
            Init::Glorot { fan_in, fan_out } => {
                let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
                Tensor::rand_uniform(&mut rng, &shape, -limit, limit)
            }
            Init::Zero => Tensor::zeros(&shape),
        };
        params.insert(name, tensor);
    }
    Ok(params)
}

/// Time-axis rescaling factors used by the fusion exchange.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TimeScale {
    Down2,
    Down4,
    Up2,
    Up4,
}

impl TimeScale {
    pub fn up_steps(&self) -> usize {
        match self {
            TimeScale::Up2 => 1,
            TimeScale::Up4 => 2,
            _ => 0,
        }
    }
}

/// Rescales the time axis: average pooling for downscales, learned 1x3
/// stride-2 transposed convolutions (one `(w, b)` kernel pair per doubling)
/// for upscales.
pub fn time_rescale<T: Scalar>(
    tape: &mut Tape<T>,
    x: NodeId,
    scale: TimeScale,
    up_kernels: &[(NodeId, NodeId)],
) -> Result<NodeId> {
    if up_kernels.len() != scale.up_steps() {
        return Err(Error::Config(format!(
            "time_rescale {scale:?} needs {} kernel pairs, got {}",
            scale.up_steps(),
            up_kernels.len()
        )));
    }
    match scale {
        TimeScale::Down2 => tape.pool_avg(x, (1, 2)),
        TimeScale::Down4 => tape.pool_avg(x, (1, 4)),
        TimeScale::Up2 | TimeScale::Up4 => {
            let mut cur = x;
            for &(w, b) in up_kernels {
                cur = tape.transposed_conv2d(cur, w, (1, 2))?;
                cur = tape.add_bias(cur, b)?;
            }
            Ok(cur)
        }
    }
}

/// Everything a tempo forward pass exposes: class logits, the per-branch
/// pre-classifier feature maps, and the Grad-CAM layer catalogue.
pub struct ForwardTrace {
    pub logits: NodeId,
    pub features: Vec<NodeId>,
    pub layers: BTreeMap<String, NodeId>,
}

/// The shared trunk of both heads: per-branch feature maps plus the layer
/// catalogue.
pub struct FeatureTrace {
    pub features: Vec<NodeId>,
    pub layers: BTreeMap<String, NodeId>,
}

/// Branch/fusion pipeline up to the pre-classifier feature maps.
pub fn forward_features<T: Scalar>(
    tape: &mut Tape<T>,
    binder: &mut Binder<'_, T>,
    input: NodeId,
    config: &NetworkConfig,
) -> Result<FeatureTrace> {
    if tape.shape(input) != [config.freq_in, config.time_in, 1] {
        return Err(Error::Shape {
            op: "forward_tempo",
            detail: format!(
                "segment shape {:?} does not match network input ({}, {}, 1)",
                tape.shape(input),
                config.freq_in,
                config.time_in
            ),
        });
    }
    let mut layers = BTreeMap::new();
    let mut cur: Vec<NodeId> = Vec::with_capacity(config.branches);
    for b in 0..config.branches {
        let x = if b == 0 { input } else { tape.pool_avg(input, (1, 1 << b))? };
        cur.push(x);
    }

    for s in 0..config.stages() {
        let mut stage_out = Vec::with_capacity(config.branches);
        for b in 0..config.branches {
            let mc = config.module_config(b, s);
            let prefix = format!("branch{b}.stage{s}");
            let m = gamodule_forward(tape, binder, cur[b], &prefix, &mc, config.attention_bypass)?;
            layers.insert(format!("{prefix}.trunk"), m.trunk);
            layers.insert(format!("{prefix}.out"), m.out);
            stage_out.push(m.out);
        }
        if config.branches == 1 {
            cur = stage_out;
            continue;
        }
        let mut fused = Vec::with_capacity(config.branches);
        for i in 0..config.branches {
            let mut parts = Vec::with_capacity(config.branches);
            for (j, &out_j) in stage_out.iter().enumerate() {
                let part = if j == i {
                    out_j
                } else if j < i {
                    let scale = if i - j == 1 { TimeScale::Down2 } else { TimeScale::Down4 };
                    time_rescale(tape, out_j, scale, &[])?
                } else {
                    let scale = if j - i == 1 { TimeScale::Up2 } else { TimeScale::Up4 };
                    let mut kernels = Vec::with_capacity(j - i);
                    for step in 0..(j - i) {
                        let w = binder.node(tape, &format!("fuse{s}.up.b{j}to{i}.k{step}.w"))?;
                        let bias = binder.node(tape, &format!("fuse{s}.up.b{j}to{i}.k{step}.b"))?;
                        kernels.push((w, bias));
                    }
                    time_rescale(tape, out_j, scale, &kernels)?
                };
                parts.push(part);
            }
            let cat = tape.concat(&parts, 2)?;
            let w = binder.node(tape, &format!("fuse{s}.b{i}.w"))?;
            let bias = binder.node(tape, &format!("fuse{s}.b{i}.b"))?;
            let mixed = tape.conv2d_act(cat, w, Some(bias), (1, 1), Padding::Same, Activation::Elu)?;
            fused.push(mixed);
        }
        cur = fused;
    }

    let features = cur;
    for (b, &feat) in features.iter().enumerate() {
        layers.insert(format!("branch{b}.features"), feat);
    }
    Ok(FeatureTrace { features, layers })
}

/// Full tempo forward pass over a tape. `input` must be `(freq_in, time_in, 1)`.
pub fn forward_tempo<T: Scalar>(
    tape: &mut Tape<T>,
    binder: &mut Binder<'_, T>,
    input: NodeId,
    config: &NetworkConfig,
) -> Result<ForwardTrace> {
    let FeatureTrace { features, layers } = forward_features(tape, binder, input, config)?;
    let head_ch = config.head_channels();
    let mut pooled = Vec::with_capacity(config.branches);
    for (b, &feat) in features.iter().enumerate() {
        let w = binder.node(tape, &format!("head.b{b}.w"))?;
        let bias = binder.node(tape, &format!("head.b{b}.b"))?;
        let h = tape.conv2d_act(feat, w, Some(bias), (1, 1), Padding::Same, Activation::Elu)?;
        let g = tape.pool_global_avg(h)?;
        pooled.push(tape.reshape(g, &[head_ch])?);
    }
    let stacked = tape.concat(&pooled, 0)?;
    let cw = binder.node(tape, "classifier.w")?;
    let cb = binder.node(tape, "classifier.b")?;
    let logits = tape.dense(stacked, cw, cb)?;

    Ok(ForwardTrace { logits, features, layers })
}

/// Beat branch forward: upsample the lower-resolution feature maps to full
/// time length, concatenate channels, and run three 1x3 convolutions
/// (ELU, ELU, linear) into a per-frame sigmoid.
pub struct BeatTrace {
    /// Pre-sigmoid frame logits, shape `[time_in]`.
    pub logits: NodeId,
    /// Sigmoid activation, shape `[time_in]`.
    pub activation: NodeId,
}

pub fn forward_beats<T: Scalar>(
    tape: &mut Tape<T>,
    binder: &mut Binder<'_, T>,
    features: &[NodeId],
    config: &NetworkConfig,
) -> Result<BeatTrace> {
    if !config.include_beat_branch {
        return Err(Error::Capability(
            "beat branch is disabled in this network configuration".into(),
        ));
    }
    if features.len() != config.branches {
        return Err(Error::Shape {
            op: "forward_beats",
            detail: format!("expected {} feature maps, got {}", config.branches, features.len()),
        });
    }
    let mut full_res = Vec::with_capacity(features.len());
    for (b, &feat) in features.iter().enumerate() {
        let mut cur = feat;
        for step in 0..b {
            let w = binder.node(tape, &format!("beat.up.b{b}.k{step}.w"))?;
            let bias = binder.node(tape, &format!("beat.up.b{b}.k{step}.b"))?;
            cur = tape.transposed_conv2d(cur, w, (1, 2))?;
            cur = tape.add_bias(cur, bias)?;
        }
        full_res.push(cur);
    }
    let cat = tape.concat(&full_res, 2)?;
    let mut cur = cat;
    for (i, act) in [Activation::Elu, Activation::Elu, Activation::Identity]
        .into_iter()
        .enumerate()
    {
        let w = binder.node(tape, &format!("beat.conv{i}.w"))?;
        let bias = binder.node(tape, &format!("beat.conv{i}.b"))?;
        cur = tape.conv2d_act(cur, w, Some(bias), (1, 1), Padding::Same, act)?;
    }
    let logits = tape.reshape(cur, &[config.time_in])?;
    let activation = tape.activation(logits, Activation::Sigmoid);
    Ok(BeatTrace { logits, activation })
}

/// Probability distribution over the 256 BPM classes. Always stored in
/// double precision so the sum-to-one contract holds regardless of the
/// network precision.
#[derive(Clone, Debug, PartialEq)]
pub struct TempoDistribution {
    probs: Vec<f64>,
}

impl TempoDistribution {
    pub fn from_logits<T: Scalar>(logits: &Tensor<T>) -> Result<Self> {
        if logits.numel() != CLASS_COUNT {
            return Err(Error::Shape {
                op: "tempo_distribution",
                detail: format!("expected {CLASS_COUNT} logits, got shape {:?}", logits.shape()),
            });
        }
        let vals: Vec<f64> = logits.data().iter().map(|v| v.to_f64()).collect();
        let m = vals.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = vals.iter().map(|v| (v - m).exp()).collect();
        let sum: f64 = exps.iter().sum();
        Ok(TempoDistribution { probs: exps.into_iter().map(|e| e / sum).collect() })
    }

    pub fn from_probs(probs: Vec<f64>) -> Result<Self> {
        if probs.len() != CLASS_COUNT {
            return Err(Error::Shape {
                op: "tempo_distribution",
                detail: format!("expected {CLASS_COUNT} probabilities, got {}", probs.len()),
            });
        }
        let sum: f64 = probs.iter().sum();
        if probs.iter().any(|&p| p < 0.0) || (sum - 1.0).abs() > 1e-6 {
            return Err(Error::Contract(format!(
                "probabilities must be non-negative and sum to 1 (sum = {sum})"
            )));
        }
        Ok(TempoDistribution { probs })
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    /// Arithmetic mean of several distributions.
    pub fn mean_of(dists: &[TempoDistribution]) -> Result<TempoDistribution> {
        if dists.is_empty() {
            return Err(Error::Contract("cannot average zero distributions".into()));
        }
        let mut acc = vec![0.0; CLASS_COUNT];
        for d in dists {
            for (a, p) in acc.iter_mut().zip(&d.probs) {
                *a += p;
            }
        }
        let n = dists.len() as f64;
        Ok(TempoDistribution { probs: acc.into_iter().map(|v| v / n).collect() })
    }

    /// Ties break toward the lower class index.
    pub fn argmax_class(&self) -> usize {
        let mut best = 0;
        for (i, &p) in self.probs.iter().enumerate() {
            if p > self.probs[best] {
                best = i;
            }
        }
        best
    }

    pub fn top_k(&self, k: usize) -> Vec<(usize, f64)> {
        let mut ix: Vec<usize> = (0..CLASS_COUNT).collect();
        ix.sort_by(|&a, &b| self.probs[b].partial_cmp(&self.probs[a]).unwrap().then(a.cmp(&b)));
        ix.into_iter().take(k).map(|i| (i, self.probs[i])).collect()
    }
}

/// Per-frame beat probability for one segment.
#[derive(Clone, Debug, PartialEq)]
pub struct BeatActivation {
    pub values: Vec<f64>,
}

impl BeatActivation {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.iter().any(|&v| !(0.0..=1.0).contains(&v)) {
            return Err(Error::Contract("beat activation outside [0,1]".into()));
        }
        Ok(BeatActivation { values })
    }

    /// Frames that are strict local maxima above the threshold.
    pub fn peak_frames(&self, threshold: f64) -> Vec<usize> {
        let v = &self.values;
        (0..v.len())
            .filter(|&i| {
                v[i] > threshold
                    && (i == 0 || v[i] >= v[i - 1])
                    && (i + 1 == v.len() || v[i] > v[i + 1])
            })
            .collect()
    }
}

/// A config/parameter pair ready for inference.
pub struct Network<T: Scalar> {
    pub config: NetworkConfig,
    pub params: NetworkParams<T>,
}

impl<T: Scalar> Network<T> {
    /// Validates that the parameter set matches the config layout exactly.
    pub fn new(config: NetworkConfig, params: NetworkParams<T>) -> Result<Self> {
        config.validate()?;
        let expected = expected_param_shapes(&config);
        for (name, shape) in &expected {
            let t = params.get(name)?;
            if t.shape() != shape.as_slice() {
                return Err(Error::Config(format!(
                    "parameter {name:?} has shape {:?}, expected {shape:?}",
                    t.shape()
                )));
            }
        }
        for name in params.names() {
            if !expected.contains_key(name) {
                return Err(Error::Config(format!("unexpected parameter {name:?} for this config")));
            }
        }
        Ok(Network { config, params })
    }

    pub fn build(config: NetworkConfig, seed: u64) -> Result<Self> {
        let params = build_network(&config, seed)?;
        Ok(Network { config, params })
    }

    /// Tempo distribution for one segment (inference path).
    pub fn distribution(&self, segment: &MelSegment) -> Result<TempoDistribution> {
        let mut tape = Tape::new();
        let mut binder = Binder::new(&self.params, false);
        let input = tape.constant(segment.to_tensor::<T>());
        let trace = forward_tempo(&mut tape, &mut binder, input, &self.config)?;
        TempoDistribution::from_logits(tape.value(trace.logits))
    }

    /// Beat activation for one segment; requires the beat branch.
    pub fn beat_activation(&self, segment: &MelSegment) -> Result<BeatActivation> {
        let mut tape = Tape::new();
        let mut binder = Binder::new(&self.params, false);
        let input = tape.constant(segment.to_tensor::<T>());
        let trace = forward_tempo(&mut tape, &mut binder, input, &self.config)?;
        let beat = forward_beats(&mut tape, &mut binder, &trace.features, &self.config)?;
        BeatActivation::new(tape.value(beat.activation).data().iter().map(|v| v.to_f64()).collect())
    }
}
