//! Frontend pipeline properties: determinism, frame-count formula,
//! normalization bounds, and tempo consistency on synthetic clicks.

mod common;

use common::{envelope_peaks, median_spacing, median_spacing_strided, onset_envelope};
use mganet::frontend::{self, frame_count, FRAME_HOP_SECONDS, SEGMENT_FRAMES};
use mganet::synth::{gen_click_track, SynthSpec};
use mganet::wav::{decode_wav, encode_wav};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[test]
fn identical_bytes_give_bit_identical_segments() {
    let spec = SynthSpec { duration_seconds: 8.0, ..SynthSpec::default() };
    let (audio, _) = gen_click_track(97.3, &spec, 11);
    let bytes = encode_wav(&audio);

    let run = |bytes: &[u8]| {
        let buf = decode_wav(bytes).unwrap();
        let mel = frontend::buffer_to_mel(&buf).unwrap();
        frontend::make_segments(&mel, 64, "t")
    };
    let a = run(&bytes);
    let b = run(&bytes);
    assert_eq!(a.len(), b.len());
    for (x, y) in a.iter().zip(&b) {
        assert_eq!(x.values, y.values, "pipeline must be bit-deterministic");
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]
    #[test]
    fn frame_count_matches_floor_formula(len in 0usize..60_000) {
        let expected = if len < 1024 { 0 } else { (len - 1024) / 512 + 1 };
        prop_assert_eq!(frame_count(len), expected);
    }

    #[test]
    fn segment_count_matches_formula(frames in 1usize..600, hop in 1usize..256) {
        let spec = frontend::MelSpectrogram::new(
            frames,
            (0..frontend::MEL_BINS * frames).map(|i| (i % 31) as f64).collect(),
        );
        let segs = frontend::make_segments(&spec, hop, "t");
        let expected = if frames < SEGMENT_FRAMES {
            1
        } else {
            (frames - SEGMENT_FRAMES) / hop + 1
        };
        prop_assert_eq!(segs.len(), expected);
    }
}

#[test]
fn stft_matches_direct_dft_oracle() {
    // naive O(n^2) DFT of the Hann-windowed frame, written independently
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let samples: Vec<f64> = (0..2048).map(|_| rng.random_range(-0.8..0.8)).collect();
    let buf = mganet::wav::AudioBuffer { samples: samples.clone(), sample_rate: 11025 };
    let mags = frontend::stft_magnitude(&buf).unwrap();

    let window: Vec<f64> = (0..1024)
        .map(|n| 0.5 - 0.5 * (2.0 * std::f64::consts::PI * n as f64 / 1024.0).cos())
        .collect();
    for frame in 0..mags.frames {
        let start = frame * 512;
        for bin in [0usize, 1, 7, 86, 255, 512] {
            let (mut re, mut im) = (0.0f64, 0.0f64);
            for n in 0..1024 {
                let v = samples[start + n] * window[n];
                let ang = -2.0 * std::f64::consts::PI * (bin * n) as f64 / 1024.0;
                re += v * ang.cos();
                im += v * ang.sin();
            }
            let want = (re * re + im * im).sqrt();
            let got = mags.at(bin, frame);
            assert!(
                (got - want).abs() <= 1e-8 * want.max(1.0),
                "frame {frame} bin {bin}: fft {got} vs dft {want}"
            );
        }
    }

    // DC case from the operation contract: bin 0 equals the window sum
    let dc = mganet::wav::AudioBuffer { samples: vec![1.0; 2048], sample_rate: 11025 };
    let mags = frontend::stft_magnitude(&dc).unwrap();
    let win_sum: f64 = window.iter().sum();
    assert!((mags.at(0, 0) - win_sum).abs() <= 1e-9);
}

#[test]
fn click_track_tempo_recovered_from_frontend() {
    // ground-truth consistency: median inter-onset spacing within 2%
    for (i, bpm) in [72.5, 96.0, 121.7, 150.0, 174.3].into_iter().enumerate() {
        let spec = SynthSpec { duration_seconds: 10.0, jitter: 0.0, ..SynthSpec::default() };
        let (audio, _) = gen_click_track(bpm, &spec, 40 + i as u64);
        let mel = frontend::buffer_to_mel(&audio).unwrap();
        let env = onset_envelope(&mel);
        let peaks = envelope_peaks(&env, 0.3);
        // spacing across 4 periods at a time keeps per-peak quantization
        // bias well under the 2% budget
        let spacing = median_spacing_strided(&peaks, 4).expect("clicks must produce onsets");
        let recovered = 60.0 / (spacing * FRAME_HOP_SECONDS);
        assert!(
            (recovered - bpm).abs() / bpm <= 0.02,
            "bpm {bpm}: recovered {recovered} off by more than 2%"
        );
    }
}

#[test]
fn faster_audio_shrinks_onset_spacing() {
    // time-stretching audio by 1/f scales inter-onset frame spacing by ~1/f
    let spec = SynthSpec { duration_seconds: 10.0, jitter: 0.0, ..SynthSpec::default() };
    let factor = 1.25;
    let (slow, _) = gen_click_track(100.0, &spec, 5);
    let (fast, _) = gen_click_track(100.0 * factor, &spec, 5);
    let spacing = |audio| {
        let mel = frontend::buffer_to_mel(audio).unwrap();
        median_spacing(&envelope_peaks(&onset_envelope(&mel), 0.3)).unwrap()
    };
    let s_slow = spacing(&slow);
    let s_fast = spacing(&fast);
    assert!(
        (s_slow / factor - s_fast).abs() <= 1.0,
        "spacing {s_slow} / {factor} vs {s_fast} differs by more than a frame"
    );
}
