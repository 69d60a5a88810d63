//! Training: tempo-scale augmentation, scale-&-crop batching, losses, Adam,
//! and the validation-driven training loop with optional multitask
//! (tempo + beat) alternation.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::eval::aggregate_global_tempo;
use crate::frontend::{MelSegment, MelSpectrogram, MEL_BINS, SEGMENT_FRAMES};
use crate::network::{
    bpm_to_class, build_network, forward_beats, forward_features, forward_tempo, NetworkConfig,
    TempoDistribution, BPM_MAX, BPM_MIN,
};
use crate::params::{Binder, NetworkParams};
use crate::tape::Tape;
use crate::tensor::{Scalar, Tensor};

/// One training track: full-track spectrogram, tempo label, optional beat
/// annotation (spectrogram frame indices), and how often it has been picked
/// for augmentation.
#[derive(Clone, Debug)]
pub struct TrainExample {
    pub track_id: String,
    pub spec: MelSpectrogram,
    pub bpm: f64,
    pub beat_frames: Option<Vec<usize>>,
    pub selection_count: u32,
}

impl TrainExample {
    pub fn new(track_id: impl Into<String>, spec: MelSpectrogram, bpm: f64) -> Self {
        TrainExample {
            track_id: track_id.into(),
            spec,
            bpm,
            beat_frames: None,
            selection_count: 0,
        }
    }
}

/// A held-out validation track.
#[derive(Clone, Debug)]
pub struct ValTrack {
    pub track_id: String,
    pub spec: MelSpectrogram,
    pub bpm: f64,
}

/// Loop hyperparameters. Desk-scale defaults; the reference schedule
/// (interval 500, patience 50,000) is available via [`TrainRunConfig::paper_schedule`].
#[derive(Clone, Debug)]
pub struct TrainRunConfig {
    pub batch_size: usize,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    /// Validate every this many iterations.
    pub validation_interval: u64,
    /// Stop after this many iterations without a validation improvement.
    pub patience: u64,
    pub seed: u64,
    pub multitask: bool,
    /// Tempo-scale augmentation factor range for dataset construction.
    pub augment_lo: f64,
    pub augment_hi: f64,
    /// Per-draw scale-&-crop jitter range.
    pub crop_lo: f64,
    pub crop_hi: f64,
    /// Augmented dataset size; `None` grows the set to 2.5x the originals.
    pub augment_target: Option<usize>,
    /// A track may be selected for augmentation at most this many times.
    pub selection_cap: u32,
    /// Batch-assembly workers. Each worker draws from its own RNG stream
    /// derived from (seed, worker id), so the sampled augmentations depend
    /// on this count; runs are deterministic per (seed, workers) pair.
    pub workers: usize,
    /// Threads for gradient evaluation over batch elements. Results are
    /// bit-identical for any value (reduction order is fixed); `None`
    /// uses up to four hardware threads.
    pub gradient_threads: Option<usize>,
    /// Segment hop used during validation aggregation.
    pub val_hop: usize,
}

impl Default for TrainRunConfig {
    fn default() -> Self {
        TrainRunConfig {
            batch_size: 32,
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            validation_interval: 50,
            patience: 2_000,
            seed: 17,
            multitask: false,
            augment_lo: 0.7,
            augment_hi: 1.4,
            crop_lo: 0.8,
            crop_hi: 1.2,
            augment_target: None,
            selection_cap: 15,
            workers: 1,
            gradient_threads: None,
            val_hop: SEGMENT_FRAMES,
        }
    }
}

impl TrainRunConfig {
    /// The reference validation schedule: every 500 iterations, 50,000
    /// iterations of patience.
    pub fn paper_schedule(mut self) -> Self {
        self.validation_interval = 500;
        self.patience = 50_000;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0
            || self.learning_rate <= 0.0
            || self.validation_interval == 0
            || self.workers == 0
            || self.val_hop == 0
        {
            return Err(Error::Config("training parameters must be positive".into()));
        }
        if self.patience < self.validation_interval {
            return Err(Error::Config(format!(
                "patience {} must be at least the validation interval {}",
                self.patience, self.validation_interval
            )));
        }
        if self.augment_lo > self.augment_hi || self.crop_lo > self.crop_hi || self.augment_lo <= 0.0 || self.crop_lo <= 0.0 {
            return Err(Error::Config("augmentation factor ranges are invalid".into()));
        }
        Ok(())
    }
}

/// Linear time-axis resampling of a spectrogram: speeding up a track by
/// `factor` shortens it to `frames / factor` columns. Factor 1 is the
/// bit-identical pass-through.
pub fn time_scale_spectrogram(spec: &MelSpectrogram, factor: f64) -> MelSpectrogram {
    assert!(factor > 0.0, "scale factor must be positive");
    if factor == 1.0 || spec.frames == 0 {
        return spec.clone();
    }
    let new_frames = ((spec.frames as f64 / factor).round() as usize).max(1);
    let mut values = vec![0.0; MEL_BINS * new_frames];
    for j in 0..new_frames {
        let pos = (j as f64 * factor).min((spec.frames - 1) as f64);
        let lo = pos.floor() as usize;
        let hi = (lo + 1).min(spec.frames - 1);
        let t = pos - lo as f64;
        for b in 0..MEL_BINS {
            values[b * new_frames + j] = spec.at(b, lo) * (1.0 - t) + spec.at(b, hi) * t;
        }
    }
    MelSpectrogram::new(new_frames, values)
}

/// Beat frame indices after [`time_scale_spectrogram`] with the same factor.
pub fn scale_beat_frames(beats: &[usize], factor: f64) -> Vec<usize> {
    beats.iter().map(|&b| (b as f64 / factor).round() as usize).collect()
}

/// Dataset-level tempo-scale augmentation. Returns `None` (a skip signal)
/// when the source's selection budget is exhausted; otherwise increments
/// the count and returns a new example with the scaled spectrogram,
/// label `bpm * factor`, and scaled beat annotation.
pub fn augment_tempo_scale(source: &mut TrainExample, factor: f64, cap: u32) -> Option<TrainExample> {
    if source.selection_count >= cap {
        return None;
    }
    source.selection_count += 1;
    let spec = time_scale_spectrogram(&source.spec, factor);
    let beat_frames = source.beat_frames.as_ref().map(|b| scale_beat_frames(b, factor));
    Some(TrainExample {
        track_id: source.track_id.clone(),
        spec,
        bpm: source.bpm * factor,
        beat_frames,
        selection_count: 0,
    })
}

/// One 128-frame segment starting at `start` (tiled when the spectrogram is
/// shorter than a segment), normalized like the inference frontend.
fn segment_at(spec: &MelSpectrogram, start: usize, track_id: &str) -> MelSegment {
    let start = if spec.frames > SEGMENT_FRAMES {
        start.min(spec.frames - SEGMENT_FRAMES)
    } else {
        0
    };
    let segs = crate::frontend::make_segments(spec, SEGMENT_FRAMES.max(1), track_id);
    // make_segments with hop >= frames always yields the segment at 0; for a
    // non-zero start we cut directly.
    if start == 0 {
        return segs.into_iter().next().expect("non-empty spectrogram");
    }
    let mut values = vec![0.0; MEL_BINS * SEGMENT_FRAMES];
    for b in 0..MEL_BINS {
        for j in 0..SEGMENT_FRAMES {
            values[b * SEGMENT_FRAMES + j] = spec.at(b, (start + j) % spec.frames);
        }
    }
    // normalize exactly like the frontend
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    let std = var.sqrt();
    if std < crate::frontend::STD_FLOOR {
        values.fill(0.0);
    } else {
        for v in &mut values {
            *v = (*v - mean) / std;
        }
    }
    MelSegment { track_id: track_id.to_string(), start_frame: start, values }
}

/// Per-draw scale-&-crop: rescale time by the factor, cut 128 frames at the
/// offset (tiling when too short), and scale the label accordingly.
pub fn scale_and_crop(
    spec: &MelSpectrogram,
    bpm: f64,
    factor: f64,
    offset: usize,
    track_id: &str,
) -> Result<(MelSegment, f64)> {
    if spec.frames == 0 {
        return Err(Error::Contract(format!("track {track_id:?} has an empty spectrogram")));
    }
    let scaled = time_scale_spectrogram(spec, factor);
    Ok((segment_at(&scaled, offset, track_id), bpm * factor))
}

/// Cross-entropy against a distribution (reporting form): `-ln p[class]`.
pub fn cross_entropy(dist: &TempoDistribution, class: usize) -> Result<f64> {
    if class >= dist.probs().len() {
        return Err(Error::Contract(format!("class {class} out of range")));
    }
    Ok(-dist.probs()[class].ln())
}

/// Mean binary cross-entropy of an activation against (possibly soft)
/// targets, probabilities clamped to `[1e-7, 1 - 1e-7]`.
pub fn binary_cross_entropy(activation: &[f64], targets: &[f64]) -> Result<f64> {
    if activation.len() != targets.len() {
        return Err(Error::Shape {
            op: "binary_cross_entropy",
            detail: format!("{} activations vs {} targets", activation.len(), targets.len()),
        });
    }
    let n = activation.len() as f64;
    let mut acc = 0.0;
    for (&a, &t) in activation.iter().zip(targets) {
        let a = a.clamp(1e-7, 1.0 - 1e-7);
        acc -= t * a.ln() + (1.0 - t) * (1.0 - a).ln();
    }
    Ok(acc / n)
}

/// Per-frame beat targets: 1 on annotated frames, 0.5 on their +-1
/// neighbors, 0 elsewhere.
pub fn widen_beat_targets(beat_frames: &[usize], len: usize) -> Vec<f64> {
    let mut t = vec![0.0; len];
    for &b in beat_frames {
        if b < len {
            t[b] = 1.0;
        }
        if b >= 1 && b - 1 < len {
            t[b - 1] = f64::max(t[b - 1], 0.5);
        }
        if b + 1 < len {
            t[b + 1] = f64::max(t[b + 1], 0.5);
        }
    }
    t
}

/// Per-parameter Adam state.
#[derive(Clone, Debug)]
pub struct AdamState<T: Scalar> {
    pub m: Tensor<T>,
    pub v: Tensor<T>,
    pub step: u64,
}

/// One bias-corrected Adam update over the parameters named in `grads`.
/// Rejects the whole step (no parameter is touched) if any gradient is
/// non-finite.
pub fn adam_step<T: Scalar>(
    params: &mut NetworkParams<T>,
    grads: &BTreeMap<String, Tensor<T>>,
    states: &mut BTreeMap<String, AdamState<T>>,
    cfg: &TrainRunConfig,
    batch_id: u64,
) -> Result<()> {
    for (name, grad) in grads {
        if grad.data().iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFiniteGradient { param: name.clone(), batch: batch_id });
        }
    }
    let lr = T::from_f64(cfg.learning_rate);
    let b1 = T::from_f64(cfg.beta1);
    let b2 = T::from_f64(cfg.beta2);
    let eps = T::from_f64(cfg.epsilon);
    for (name, grad) in grads {
        let param = params.get_mut(name)?;
        let state = states.entry(name.clone()).or_insert_with(|| AdamState {
            m: Tensor::zeros(grad.shape()),
            v: Tensor::zeros(grad.shape()),
            step: 0,
        });
        state.step += 1;
        let bc1 = T::ONE - T::from_f64(cfg.beta1.powi(state.step as i32));
        let bc2 = T::ONE - T::from_f64(cfg.beta2.powi(state.step as i32));
        let (m, v) = (state.m.data_mut(), state.v.data_mut());
        for ((p, &g), (mi, vi)) in param.data_mut().iter_mut().zip(grad.data()).zip(m.iter_mut().zip(v.iter_mut())) {
            *mi = b1 * *mi + (T::ONE - b1) * g;
            *vi = b2 * *vi + (T::ONE - b2) * g * g;
            let m_hat = *mi / bc1;
            let v_hat = *vi / bc2;
            *p = *p - lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
    Ok(())
}

/// Grows the example list with tempo-scaled copies until `target` entries
/// exist (originals retained), respecting the per-track selection cap and
/// rejecting draws whose label would leave `[30, 285]`.
pub fn build_augmented_set(
    mut examples: Vec<TrainExample>,
    cfg: &TrainRunConfig,
    rng: &mut ChaCha8Rng,
) -> Vec<TrainExample> {
    let originals = examples.len();
    let target = cfg.augment_target.unwrap_or(originals * 5 / 2);
    let mut augmented: Vec<TrainExample> = Vec::new();
    let mut attempts = 0usize;
    let attempt_cap = target.saturating_mul(50).max(1000);
    while originals + augmented.len() < target && attempts < attempt_cap {
        attempts += 1;
        let idx = rng.random_range(0..originals);
        let factor = rng.random_range(cfg.augment_lo..=cfg.augment_hi);
        let label = examples[idx].bpm * factor;
        if !(BPM_MIN..=BPM_MAX).contains(&label.round()) {
            continue;
        }
        if let Some(aug) = augment_tempo_scale(&mut examples[idx], factor, cfg.selection_cap) {
            augmented.push(aug);
        }
    }
    examples.extend(augmented);
    examples
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainLogRecord {
    pub iteration: u64,
    pub loss: f64,
    pub val_acc1: f64,
}

pub struct TrainOutcome<T: Scalar> {
    pub best_params: NetworkParams<T>,
    pub best_acc1: f64,
    pub best_iteration: u64,
    pub iterations: u64,
    pub log: Vec<TrainLogRecord>,
}

type GradMap<T> = BTreeMap<String, Tensor<T>>;

enum Target<T> {
    Class(usize),
    Beats(Vec<T>),
}

struct BatchItem<T: Scalar> {
    input: Tensor<T>,
    target: Target<T>,
}

fn example_gradient<T: Scalar>(
    config: &NetworkConfig,
    params: &NetworkParams<T>,
    item: &BatchItem<T>,
) -> Result<(GradMap<T>, f64)> {
    let mut tape = Tape::new();
    let mut binder = Binder::new(params, true);
    let input = tape.constant(item.input.clone());
    let loss_node = match &item.target {
        Target::Class(class) => {
            let trace = forward_tempo(&mut tape, &mut binder, input, config)?;
            tape.cross_entropy_logits(trace.logits, *class)?
        }
        Target::Beats(targets) => {
            let trace = forward_features(&mut tape, &mut binder, input, config)?;
            let beat = forward_beats(&mut tape, &mut binder, &trace.features, config)?;
            tape.bce_logits(beat.logits, targets.clone())?
        }
    };
    let loss = tape.value(loss_node).item().to_f64();
    let mut grads = tape.backward(loss_node)?;
    Ok((binder.collect_reached_grads(&mut grads), loss))
}

fn batch_gradients<T: Scalar>(
    config: &NetworkConfig,
    params: &NetworkParams<T>,
    items: &[BatchItem<T>],
    pool: Option<&rayon::ThreadPool>,
) -> Result<(GradMap<T>, f64)> {
    let results: Vec<Result<(GradMap<T>, f64)>> = match pool {
        Some(pool) => pool.install(|| {
            use rayon::prelude::*;
            items.par_iter().map(|item| example_gradient(config, params, item)).collect()
        }),
        None => items.iter().map(|item| example_gradient(config, params, item)).collect(),
    };
    // deterministic reduction: fixed (batch) order regardless of workers
    let mut acc: GradMap<T> = BTreeMap::new();
    let mut loss_sum = 0.0;
    for r in results {
        let (grads, loss) = r?;
        loss_sum += loss;
        for (name, g) in grads {
            match acc.get_mut(&name) {
                Some(t) => t.add_assign(&g),
                None => {
                    acc.insert(name, g);
                }
            }
        }
    }
    let inv = T::from_f64(1.0 / items.len() as f64);
    for t in acc.values_mut() {
        t.scale_in_place(inv);
    }
    Ok((acc, loss_sum / items.len() as f64))
}

/// Validation Accuracy1 over full tracks (segment distributions averaged).
pub fn validation_accuracy1<T: Scalar>(
    config: &NetworkConfig,
    params: &NetworkParams<T>,
    val: &[ValTrack],
    hop: usize,
) -> Result<f64> {
    let mut hits = 0usize;
    for track in val {
        let est = aggregate_global_tempo(config, params, &track.spec, &track.track_id, hop)?;
        if crate::eval::accuracy1(est.bpm, track.bpm) {
            hits += 1;
        }
    }
    Ok(hits as f64 / val.len() as f64)
}

/// Draws one training item from an example: jittered scale-&-crop with the
/// label kept inside the class range.
fn draw_item<T: Scalar>(
    example: &TrainExample,
    cfg: &TrainRunConfig,
    beat_task: bool,
    rng: &mut ChaCha8Rng,
) -> Result<BatchItem<T>> {
    let mut factor = 1.0;
    for _ in 0..20 {
        let f = rng.random_range(cfg.crop_lo..=cfg.crop_hi);
        if (BPM_MIN..=BPM_MAX).contains(&(example.bpm * f).round()) {
            factor = f;
            break;
        }
    }
    let scaled = time_scale_spectrogram(&example.spec, factor);
    let max_start = scaled.frames.saturating_sub(SEGMENT_FRAMES);
    let offset = if max_start == 0 { 0 } else { rng.random_range(0..=max_start) };
    let segment = segment_at(&scaled, offset, &example.track_id);
    if beat_task {
        let beats = example
            .beat_frames
            .as_ref()
            .expect("beat task requires beat annotations");
        let shifted: Vec<usize> = scale_beat_frames(beats, factor)
            .into_iter()
            .filter_map(|b| b.checked_sub(offset))
            .filter(|&b| b < SEGMENT_FRAMES)
            .collect();
        let targets = widen_beat_targets(&shifted, SEGMENT_FRAMES)
            .into_iter()
            .map(T::from_f64)
            .collect();
        Ok(BatchItem { input: segment.to_tensor(), target: Target::Beats(targets) })
    } else {
        let (class, _) = bpm_to_class(example.bpm * factor);
        Ok(BatchItem { input: segment.to_tensor(), target: Target::Class(class) })
    }
}

/// Full training run: Glorot init from the seed, augmented-set
/// construction, epoch shuffling with on-the-fly scale-&-crop, Adam,
/// periodic validation with best-checkpoint retention, and patience-based
/// stopping. With `multitask` the tempo and beat objectives alternate every
/// epoch over shared trunk parameters.
pub fn train_run<T: Scalar>(
    net_config: &NetworkConfig,
    examples: Vec<TrainExample>,
    val: &[ValTrack],
    cfg: &TrainRunConfig,
) -> Result<TrainOutcome<T>> {
    train_run_observed(net_config, examples, val, cfg, |_| {})
}

/// [`train_run`] with a per-validation observer (progress reporting).
pub fn train_run_observed<T: Scalar>(
    net_config: &NetworkConfig,
    examples: Vec<TrainExample>,
    val: &[ValTrack],
    cfg: &TrainRunConfig,
    mut on_validation: impl FnMut(&TrainLogRecord),
) -> Result<TrainOutcome<T>> {
    cfg.validate()?;
    net_config.validate()?;
    if examples.is_empty() || val.is_empty() {
        return Err(Error::Config("training and validation sets must be non-empty".into()));
    }
    for v in val {
        if examples.iter().any(|e| e.track_id == v.track_id) {
            return Err(Error::Config(format!(
                "validation track {:?} leaks into the training set",
                v.track_id
            )));
        }
    }
    if cfg.multitask && !examples.iter().any(|e| e.beat_frames.is_some()) {
        return Err(Error::Config("multitask training needs beat-annotated examples".into()));
    }
    if cfg.multitask && !net_config.include_beat_branch {
        return Err(Error::Config("multitask training needs include_beat_branch".into()));
    }

    let mut aug_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    aug_rng.set_stream(1);
    let examples = build_augmented_set(examples, cfg, &mut aug_rng);
    let beat_indices: Vec<usize> = examples
        .iter()
        .enumerate()
        .filter_map(|(i, e)| e.beat_frames.is_some().then_some(i))
        .collect();

    let mut params = build_network::<T>(net_config, cfg.seed)?;
    let mut states: BTreeMap<String, AdamState<T>> = BTreeMap::new();
    let threads = cfg.gradient_threads.unwrap_or_else(|| {
        std::thread::available_parallelism().map_or(1, |n| n.get().min(4))
    });
    let pool = if threads > 1 {
        Some(
            rayon::ThreadPoolBuilder::new()
                .num_threads(threads)
                .build()
                .map_err(|e| Error::Config(format!("gradient pool: {e}")))?,
        )
    } else {
        None
    };

    // shuffle order comes from the loop stream; item draws come from the
    // per-worker assembly streams
    let mut loop_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    loop_rng.set_stream(2);
    let mut assembly_rngs: Vec<ChaCha8Rng> = (0..cfg.workers)
        .map(|w| {
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
            rng.set_stream(1000 + w as u64);
            rng
        })
        .collect();

    let mut iteration = 0u64;
    let mut best_acc1 = -1.0f64;
    let mut best_iteration = 0u64;
    let mut best_params = params.clone();
    let mut log = Vec::new();
    let mut interval_loss = 0.0f64;
    let mut interval_count = 0u64;
    let mut epoch = 0u64;

    'training: loop {
        let beat_epoch = cfg.multitask && epoch % 2 == 1;
        let mut order: Vec<usize> = if beat_epoch {
            beat_indices.clone()
        } else {
            (0..examples.len()).collect()
        };
        order.shuffle(&mut loop_rng);

        for chunk in order.chunks(cfg.batch_size) {
            let items: Vec<BatchItem<T>> = chunk
                .iter()
                .enumerate()
                .map(|(j, &i)| {
                    let rng = &mut assembly_rngs[j % cfg.workers];
                    draw_item(&examples[i], cfg, beat_epoch, rng)
                })
                .collect::<Result<_>>()?;
            let (grads, loss) = batch_gradients(net_config, &params, &items, pool.as_ref())?;
            adam_step(&mut params, &grads, &mut states, cfg, iteration)?;
            iteration += 1;
            interval_loss += loss;
            interval_count += 1;

            if iteration % cfg.validation_interval == 0 {
                let acc1 = validation_accuracy1(net_config, &params, val, cfg.val_hop)?;
                let record = TrainLogRecord {
                    iteration,
                    loss: interval_loss / interval_count.max(1) as f64,
                    val_acc1: acc1,
                };
                on_validation(&record);
                log.push(record);
                interval_loss = 0.0;
                interval_count = 0;
                // patience runs on strict improvements; among ties the most
                // recent (longest-trained) parameters are retained
                if acc1 >= best_acc1 {
                    if acc1 > best_acc1 {
                        best_iteration = iteration;
                    }
                    best_acc1 = acc1;
                    best_params = params.clone();
                }
                if iteration - best_iteration >= cfg.patience {
                    break 'training;
                }
            }
        }
        epoch += 1;
    }

    Ok(TrainOutcome { best_params, best_acc1, best_iteration, iterations: iteration, log })
}
