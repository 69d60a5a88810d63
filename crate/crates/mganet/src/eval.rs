//! Evaluation: global tempo aggregation over full tracks, Accuracy1 and
//! Accuracy2, dataset reports, and Grad-CAM heatmaps over the exposed
//! layer catalogue.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::frontend::{self, MelSegment, MelSpectrogram, MEL_BINS, SEGMENT_FRAMES};
use crate::network::{
    class_to_bpm, forward_tempo, Network, NetworkConfig, TempoDistribution,
};
use crate::params::{Binder, NetworkParams};
use crate::tape::Tape;
use crate::tensor::Scalar;

/// Octave-error factors forgiven by Accuracy2, ordered by |ln f| so the
/// closest-to-1 factor wins ties.
pub const ACC2_FACTORS: [f64; 5] = [1.0, 2.0, 0.5, 3.0, 1.0 / 3.0];

/// Hit iff the estimate lies within +-4% of the truth (inclusive bound).
pub fn accuracy1(estimate_bpm: f64, truth_bpm: f64) -> bool {
    debug_assert!(truth_bpm > 0.0);
    (estimate_bpm - truth_bpm).abs() <= 0.04 * truth_bpm
}

/// Accuracy1 against `truth * f` for f in {1, 2, 3, 1/2, 1/3}; returns the
/// matched factor when hit.
pub fn accuracy2(estimate_bpm: f64, truth_bpm: f64) -> (bool, Option<f64>) {
    for f in ACC2_FACTORS {
        if accuracy1(estimate_bpm, truth_bpm * f) {
            return (true, Some(f));
        }
    }
    (false, None)
}

/// Global tempo for one track: averaged segment distributions, argmax class.
#[derive(Clone, Debug)]
pub struct TempoEstimate {
    pub track_id: String,
    pub bpm: f64,
    pub distribution: TempoDistribution,
    pub segment_count: usize,
}

/// Runs the classifier over non-overlapping (or `hop`-strided) 128-frame
/// segments and averages the distributions. Ties in the argmax break toward
/// the lower class.
pub fn aggregate_global_tempo<T: Scalar>(
    config: &NetworkConfig,
    params: &NetworkParams<T>,
    spec: &MelSpectrogram,
    track_id: &str,
    hop: usize,
) -> Result<TempoEstimate> {
    let segments = frontend::make_segments(spec, hop, track_id);
    if segments.is_empty() {
        return Err(Error::Contract(format!(
            "track {track_id:?} produced no segments (empty audio?)"
        )));
    }
    let mut dists = Vec::with_capacity(segments.len());
    for seg in &segments {
        let mut tape = Tape::new();
        let mut binder = Binder::new(params, false);
        let input = tape.constant(seg.to_tensor::<T>());
        let trace = forward_tempo(&mut tape, &mut binder, input, config)?;
        dists.push(TempoDistribution::from_logits(tape.value(trace.logits))?);
    }
    let distribution = TempoDistribution::mean_of(&dists)?;
    let class = distribution.argmax_class();
    Ok(TempoEstimate {
        track_id: track_id.to_string(),
        bpm: class_to_bpm(class),
        distribution,
        segment_count: segments.len(),
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrackResult {
    pub track_id: String,
    pub truth_bpm: f64,
    pub estimate_bpm: f64,
    pub acc1: bool,
    pub acc2: bool,
    pub factor: Option<f64>,
}

/// Per-track rows plus aggregates. Failed tracks are excluded from the
/// aggregates and listed separately.
#[derive(Clone, Debug, Default)]
pub struct MetricsReport {
    pub rows: Vec<TrackResult>,
    pub failures: Vec<(String, String)>,
}

impl MetricsReport {
    pub fn score(&mut self, track_id: &str, truth: f64, estimate: f64) {
        let acc1 = accuracy1(estimate, truth);
        let (acc2, factor) = accuracy2(estimate, truth);
        self.rows.push(TrackResult {
            track_id: track_id.to_string(),
            truth_bpm: truth,
            estimate_bpm: estimate,
            acc1,
            acc2,
            factor,
        });
    }

    pub fn acc1(&self) -> f64 {
        if self.rows.is_empty() {
            return 0.0;
        }
        self.rows.iter().filter(|r| r.acc1).count() as f64 / self.rows.len() as f64
    }

    pub fn acc2(&self) -> f64 {
        if self.rows.is_empty() {
            return 0.0;
        }
        self.rows.iter().filter(|r| r.acc2).count() as f64 / self.rows.len() as f64
    }

    /// One record per track, then a summary block.
    pub fn render(&self) -> String {
        let mut out = String::new();
        out.push_str("track\ttruth_bpm\testimate_bpm\tacc1\tacc2\tfactor\n");
        for r in &self.rows {
            let factor = r.factor.map_or("-".to_string(), |f| format!("{f:.6}"));
            let _ = writeln!(
                out,
                "{}\t{:.3}\t{:.3}\t{}\t{}\t{}",
                r.track_id, r.truth_bpm, r.estimate_bpm, r.acc1 as u8, r.acc2 as u8, factor
            );
        }
        for (id, why) in &self.failures {
            let _ = writeln!(out, "# failed {id}: {why}");
        }
        let _ = writeln!(out, "# tracks = {}", self.rows.len());
        let _ = writeln!(out, "# failures = {}", self.failures.len());
        let _ = writeln!(out, "# accuracy1 = {:.4}", self.acc1());
        let _ = writeln!(out, "# accuracy2 = {:.4}", self.acc2());
        out
    }
}

/// Evaluates every annotated file. Unreadable files become per-track
/// failures; an empty annotation list is an error, not an empty report.
pub fn evaluate_dataset<T: Scalar>(
    config: &NetworkConfig,
    params: &NetworkParams<T>,
    annotations: &[(PathBuf, f64)],
    hop: usize,
) -> Result<MetricsReport> {
    if annotations.is_empty() {
        return Err(Error::Contract("annotation list is empty; nothing to evaluate".into()));
    }
    let mut report = MetricsReport::default();
    for (path, truth) in annotations {
        let id = path.to_string_lossy().to_string();
        match frontend::wav_to_mel(path)
            .and_then(|spec| aggregate_global_tempo(config, params, &spec, &id, hop))
        {
            Ok(est) => report.score(&id, *truth, est.bpm),
            Err(e) => report.failures.push((id, e.to_string())),
        }
    }
    Ok(report)
}

/// Grad-CAM output: channel-weighted, ReLU-rectified sum over one feature
/// map, plus its bilinear upsampling to input resolution.
#[derive(Clone, Debug)]
pub struct Heatmap {
    pub layer: String,
    pub target_class: usize,
    /// Raw map dimensions `(rows, cols)` of the chosen layer.
    pub raw_shape: (usize, usize),
    pub raw: Vec<f64>,
    /// Upsampled to `MEL_BINS x SEGMENT_FRAMES`.
    pub rendered: Vec<f64>,
}

fn bilinear_upsample(src: &[f64], (h, w): (usize, usize), (oh, ow): (usize, usize)) -> Vec<f64> {
    let mut out = vec![0.0; oh * ow];
    for i in 0..oh {
        let fy = ((i as f64 + 0.5) * h as f64 / oh as f64 - 0.5).clamp(0.0, (h - 1) as f64);
        let y0 = fy.floor() as usize;
        let y1 = (y0 + 1).min(h - 1);
        let ty = fy - y0 as f64;
        for j in 0..ow {
            let fx = ((j as f64 + 0.5) * w as f64 / ow as f64 - 0.5).clamp(0.0, (w - 1) as f64);
            let x0 = fx.floor() as usize;
            let x1 = (x0 + 1).min(w - 1);
            let tx = fx - x0 as f64;
            let a = src[y0 * w + x0] * (1.0 - tx) + src[y0 * w + x1] * tx;
            let b = src[y1 * w + x0] * (1.0 - tx) + src[y1 * w + x1] * tx;
            out[i * ow + j] = a * (1.0 - ty) + b * ty;
        }
    }
    out
}

/// Names addressable by [`grad_cam`] for a config.
pub fn layer_catalogue(config: &NetworkConfig) -> Vec<String> {
    let mut names = Vec::new();
    for b in 0..config.branches {
        for s in 0..config.stages() {
            names.push(format!("branch{b}.stage{s}.trunk"));
            names.push(format!("branch{b}.stage{s}.out"));
        }
        names.push(format!("branch{b}.features"));
    }
    names
}

/// Gradient-weighted class activation map for one segment and one layer.
///
/// Channel weights are the global average of d(class logit)/d(feature);
/// the map is `ReLU(sum_c w_c * feature_c)`.
pub fn grad_cam<T: Scalar>(
    network: &Network<T>,
    segment: &MelSegment,
    target_class: usize,
    layer: &str,
) -> Result<Heatmap> {
    if target_class >= crate::network::CLASS_COUNT {
        return Err(Error::Contract(format!("target class {target_class} out of range")));
    }
    let mut tape = Tape::new();
    let mut binder = Binder::new(&network.params, true);
    let input = tape.constant(segment.to_tensor::<T>());
    let trace = forward_tempo(&mut tape, &mut binder, input, &network.config)?;
    let &node = trace.layers.get(layer).ok_or_else(|| Error::UnknownLayer {
        given: layer.to_string(),
        valid: layer_catalogue(&network.config),
    })?;
    let score = tape.slice(trace.logits, 0, target_class, 1)?;
    let grads = tape.backward(score)?;
    let grad = grads.wrt_or_zeros(node, &tape);
    let feature = tape.value(node);

    let (f, t, c) = (feature.shape()[0], feature.shape()[1], feature.shape()[2]);
    let positions = (f * t) as f64;
    let mut weights = vec![0.0; c];
    for p in 0..f * t {
        for ch in 0..c {
            weights[ch] += grad.data()[p * c + ch].to_f64();
        }
    }
    for w in &mut weights {
        *w /= positions;
    }
    let mut raw = vec![0.0; f * t];
    for p in 0..f * t {
        let mut acc = 0.0;
        for ch in 0..c {
            acc += weights[ch] * feature.data()[p * c + ch].to_f64();
        }
        raw[p] = acc.max(0.0);
    }
    let rendered = bilinear_upsample(&raw, (f, t), (MEL_BINS, SEGMENT_FRAMES));
    Ok(Heatmap {
        layer: layer.to_string(),
        target_class,
        raw_shape: (f, t),
        raw,
        rendered,
    })
}

/// Linear blue-to-red colormap over `t` in [0,1].
pub fn colormap(t: f64) -> [u8; 3] {
    let t = t.clamp(0.0, 1.0);
    [(255.0 * t).round() as u8, 0, (255.0 * (1.0 - t)).round() as u8]
}

/// Writes the rendered heatmap as binary PPM (P6) plus a CSV sidecar with
/// the raw values. Values are min-max normalized for display; a constant
/// map (zero range) renders the colormap midpoint.
pub fn render_heatmap(h: &Heatmap, ppm_path: impl AsRef<Path>, csv_path: impl AsRef<Path>) -> Result<()> {
    let ppm_path = ppm_path.as_ref();
    let csv_path = csv_path.as_ref();

    let lo = h.rendered.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = h.rendered.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let range = hi - lo;
    let mut ppm = format!("P6\n{} {}\n255\n", SEGMENT_FRAMES, MEL_BINS).into_bytes();
    for &v in &h.rendered {
        let t = if range > 0.0 { (v - lo) / range } else { 0.5 };
        ppm.extend_from_slice(&colormap(t));
    }
    fs::write(ppm_path, ppm).map_err(|e| Error::io(ppm_path, e))?;

    let (rows, cols) = h.raw_shape;
    let mut csv = String::new();
    for r in 0..rows {
        let line: Vec<String> = (0..cols).map(|c| format!("{}", h.raw[r * cols + c])).collect();
        csv.push_str(&line.join(","));
        csv.push('\n');
    }
    fs::write(csv_path, csv).map_err(|e| Error::io(csv_path, e))
}

/// Reads back a heatmap CSV sidecar (tests use this for the round-trip
/// contract).
pub fn read_heatmap_csv(path: impl AsRef<Path>) -> Result<Vec<Vec<f64>>> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .map(|line| {
            line.split(',')
                .map(|v| {
                    v.parse::<f64>().map_err(|_| Error::Parse {
                        offset: 0,
                        detail: format!("bad csv value {v:?} in {path:?}"),
                    })
                })
                .collect()
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    #[test]
    fn accuracy1_boundaries() {
        assert!(accuracy1(103.9, 100.0));
        assert!(accuracy1(104.0, 100.0), "4.0% is inclusive");
        assert!(!accuracy1(104.1, 100.0));
        assert!(accuracy1(96.0, 100.0));
        assert!(!accuracy1(95.9, 100.0));
    }

    #[test]
    fn accuracy2_octaves() {
        let (hit, f) = accuracy2(60.0, 120.0);
        assert!(hit);
        assert_eq!(f, Some(0.5));
        let (hit, f) = accuracy2(178.0, 60.0);
        assert!(hit, "178 within 4% of 180");
        assert_eq!(f, Some(3.0));
        let (hit, f) = accuracy2(150.0, 100.0);
        assert!(!hit, "1.5 is not a permitted factor");
        assert_eq!(f, None);
    }

    #[test]
    fn acc2_superset_of_acc1() {
        let mut k = 0u64;
        for _ in 0..1000 {
            k = k.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            let est = 30.0 + (k >> 33) as f64 % 256.0;
            k = k.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            let truth = 30.0 + (k >> 33) as f64 % 256.0;
            if accuracy1(est, truth) {
                assert!(accuracy2(est, truth).0, "acc1 hit must be acc2 hit ({est}, {truth})");
            }
        }
    }

    #[test]
    fn report_aggregates_match_row_means() {
        let mut r = MetricsReport::default();
        r.score("a", 100.0, 100.0); // both hit
        r.score("b", 100.0, 200.0); // acc2 only
        r.score("c", 100.0, 150.0); // neither
        assert!((r.acc1() - 1.0 / 3.0).abs() < 1e-12);
        assert!((r.acc2() - 2.0 / 3.0).abs() < 1e-12);
        let text = r.render();
        assert!(text.contains("# accuracy1 = 0.3333"));
        assert!(text.contains("# accuracy2 = 0.6667"));
    }

    #[test]
    fn aggregate_mean_matches_loop_and_argmax_scaling_invariance() {
        use crate::network::CLASS_COUNT;
        // three synthetic distributions, mean computed by an explicit loop
        let mut dists = Vec::new();
        let mut raw = Vec::new();
        for s in 0..3 {
            let mut logits = Tensor::<f64>::zeros(&[CLASS_COUNT]);
            for (i, v) in logits.data_mut().iter_mut().enumerate() {
                *v = (((i * (s + 3)) % 97) as f64) / 11.0;
            }
            let d = TempoDistribution::from_logits(&logits).unwrap();
            raw.push(d.probs().to_vec());
            dists.push(d);
        }
        let mean = TempoDistribution::mean_of(&dists).unwrap();
        for i in 0..CLASS_COUNT {
            let want = (raw[0][i] + raw[1][i] + raw[2][i]) / 3.0;
            assert!((mean.probs()[i] - want).abs() <= 1e-15);
        }
        // argmax is invariant to scaling every segment distribution by the
        // same positive constant (the mean scales, the argmax does not)
        let base = mean.argmax_class();
        let scaled: Vec<f64> = mean.probs().iter().map(|p| p * 7.5).collect();
        let mut best = 0;
        for (i, &p) in scaled.iter().enumerate() {
            if p > scaled[best] {
                best = i;
            }
        }
        assert_eq!(base, best);
    }

    #[test]
    fn argmax_ties_break_toward_lower_class() {
        let mut probs = vec![0.0; crate::network::CLASS_COUNT];
        probs[40] = 0.5;
        probs[90] = 0.5;
        let d = TempoDistribution::from_probs(probs).unwrap();
        assert_eq!(d.argmax_class(), 40);
    }

    #[test]
    fn empty_annotation_list_is_an_error() {
        let config = crate::network::NetworkConfig::standard(0.25);
        let params = crate::network::build_network::<f32>(&config, 1).unwrap();
        let err = evaluate_dataset(&config, &params, &[], 128).unwrap_err();
        assert!(matches!(err, Error::Contract(_)));
    }

    #[test]
    fn colormap_endpoints() {
        assert_eq!(colormap(0.0), [0, 0, 255]);
        assert_eq!(colormap(1.0), [255, 0, 0]);
        assert_eq!(colormap(0.5), [128, 0, 128]);
    }

    #[test]
    fn bilinear_identity_on_same_size() {
        let src: Vec<f64> = (0..12).map(|v| v as f64).collect();
        let out = bilinear_upsample(&src, (3, 4), (3, 4));
        for (a, b) in src.iter().zip(&out) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn render_constant_heatmap_is_midpoint_color() {
        let dir = tempfile::tempdir().unwrap();
        let h = Heatmap {
            layer: "x".into(),
            target_class: 0,
            raw_shape: (2, 2),
            raw: vec![1.0, 1.0, 1.0, 1.0],
            rendered: vec![1.0; MEL_BINS * SEGMENT_FRAMES],
        };
        let ppm = dir.path().join("h.ppm");
        let csv = dir.path().join("h.csv");
        render_heatmap(&h, &ppm, &csv).unwrap();
        let bytes = std::fs::read(&ppm).unwrap();
        let header_end = bytes.windows(4).position(|w| w == b"255\n").unwrap() + 4;
        let body = &bytes[header_end..];
        assert_eq!(&body[0..3], &colormap(0.5));
        assert!(body.chunks(3).all(|px| px == &body[0..3]));

        let back = read_heatmap_csv(&csv).unwrap();
        assert_eq!(back, vec![vec![1.0, 1.0], vec![1.0, 1.0]]);
    }

    #[test]
    fn heatmap_csv_round_trips_bit_exactly() {
        let dir = tempfile::tempdir().unwrap();
        let raw = vec![0.1234567890123456, 1.0 / 3.0, 2.0f64.sqrt(), 1e-300];
        let h = Heatmap {
            layer: "x".into(),
            target_class: 3,
            raw_shape: (2, 2),
            raw: raw.clone(),
            rendered: vec![0.0; MEL_BINS * SEGMENT_FRAMES],
        };
        let ppm = dir.path().join("h.ppm");
        let csv = dir.path().join("h.csv");
        render_heatmap(&h, &ppm, &csv).unwrap();
        let back = read_heatmap_csv(&csv).unwrap();
        assert_eq!(back[0][0].to_bits(), raw[0].to_bits());
        assert_eq!(back[0][1].to_bits(), raw[1].to_bits());
        assert_eq!(back[1][0].to_bits(), raw[2].to_bits());
        assert_eq!(back[1][1].to_bits(), raw[3].to_bits());
    }
}
