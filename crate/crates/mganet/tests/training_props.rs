//! Training-side properties: augmentation label math, onset-spacing under
//! spectrogram time scaling, and crop-offset coverage.

mod common;

use common::{envelope_peaks, median_spacing, onset_envelope};
use mganet::frontend;
use mganet::network::bpm_to_class;
use mganet::synth::{gen_click_track, SynthSpec};
use mganet::train::{augment_tempo_scale, scale_and_crop, time_scale_spectrogram, TrainExample};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1000))]
    #[test]
    fn augmented_label_formula_is_exact(
        bpm in 40.0f64..200.0,
        factor in 0.7f64..1.4,
    ) {
        let label = bpm * factor;
        let rounded = label.round();
        prop_assume!((30.0..=285.0).contains(&rounded));
        let (class, clamped) = bpm_to_class(label);
        prop_assert!(!clamped);
        prop_assert_eq!(class, (rounded - 30.0) as usize);
    }
}

#[test]
fn spectrogram_scaling_shrinks_onset_spacing() {
    // factor 1.4 compresses inter-onset spacing by 1/1.4 within one frame
    let factor = 1.4;
    let mut failures = 0;
    for seed in 0..10u64 {
        let spec = SynthSpec { duration_seconds: 10.0, jitter: 0.0, ..SynthSpec::default() };
        let bpm = 70.0 + 9.0 * seed as f64;
        let (audio, _) = gen_click_track(bpm, &spec, 100 + seed);
        let mel = frontend::buffer_to_mel(&audio).unwrap();
        let scaled = time_scale_spectrogram(&mel, factor);

        let spacing = |m: &frontend::MelSpectrogram| {
            median_spacing(&envelope_peaks(&onset_envelope(m), 0.3)).unwrap()
        };
        let before = spacing(&mel);
        let after = spacing(&scaled);
        if (before / factor - after).abs() > 1.0 {
            failures += 1;
            eprintln!("seed {seed}: {before} / {factor} vs {after}");
        }
    }
    assert_eq!(failures, 0, "onset spacing violated the 1/factor rule");
}

#[test]
fn augment_scales_beats_with_the_spectrogram() {
    let mut values = vec![0.0; frontend::MEL_BINS * 280];
    for (i, v) in values.iter_mut().enumerate() {
        *v = (i % 17) as f64;
    }
    let mut ex = TrainExample::new("t", frontend::MelSpectrogram::new(280, values), 100.0);
    ex.beat_frames = Some(vec![0, 70, 140, 210]);
    let aug = augment_tempo_scale(&mut ex, 1.4, 15).unwrap();
    assert_eq!(aug.beat_frames.as_ref().unwrap(), &vec![0, 50, 100, 150]);
    assert_eq!(aug.spec.frames, 200);
}

#[test]
fn crop_offsets_cover_the_valid_range_roughly_uniformly() {
    // chi-square over 8 bins at 10k draws; generous threshold (p ~ 0.01)
    let frames = 128 + 256;
    let max_start = 256u64;
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut counts = [0u64; 8];
    let draws = 10_000;
    for _ in 0..draws {
        let offset = rng.random_range(0..=max_start);
        counts[(offset * 8 / (max_start + 1)) as usize] += 1;
    }
    let expected = draws as f64 / 8.0;
    let chi2: f64 = counts.iter().map(|&c| (c as f64 - expected).powi(2) / expected).sum();
    // 7 degrees of freedom, p = 0.01 critical value
    assert!(chi2 < 18.48, "offset distribution chi2 {chi2} (counts {counts:?})");
    // and scale_and_crop actually honors the requested offset
    let spec = frontend::MelSpectrogram::new(
        frames,
        (0..frontend::MEL_BINS * frames).map(|i| (i % 13) as f64).collect(),
    );
    let (seg, _) = scale_and_crop(&spec, 100.0, 1.0, 57, "t").unwrap();
    assert_eq!(seg.start_frame, 57);
}
