//! Synthetic click-track corpora with exactly known BPM and beat times.
//!
//! Each beat is rendered from a mix of timbres occupying distinct frequency
//! regions (low kick thump, mid click, broadband hat noise, optional
//! sustained pad), so grouped frequency attention has real structure to
//! find. Generation is deterministic per (seed, track index).

use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::manifest;
use crate::network::{BPM_MAX, BPM_MIN};
use crate::wav::{write_wav, AudioBuffer};

pub const SYNTH_RATE: u32 = crate::frontend::SAMPLE_RATE;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Timbres {
    pub click: bool,
    pub kick: bool,
    pub hat: bool,
    pub pad: bool,
}

impl Default for Timbres {
    fn default() -> Self {
        Timbres { click: true, kick: true, hat: true, pad: false }
    }
}

#[derive(Clone, Debug)]
pub struct SynthSpec {
    pub count: usize,
    pub bpm_lo: f64,
    pub bpm_hi: f64,
    pub duration_seconds: f64,
    pub timbres: Timbres,
    /// Beat time jitter as a fraction of the period; must stay below 0.1.
    pub jitter: f64,
    /// White-noise floor relative to full scale, in dB (e.g. -60).
    pub noise_floor_db: f64,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec {
            count: 16,
            bpm_lo: 60.0,
            bpm_hi: 180.0,
            duration_seconds: 12.0,
            timbres: Timbres::default(),
            jitter: 0.0,
            noise_floor_db: -60.0,
            seed: 17,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        if !(BPM_MIN..=BPM_MAX).contains(&self.bpm_lo)
            || !(BPM_MIN..=BPM_MAX).contains(&self.bpm_hi)
            || self.bpm_lo > self.bpm_hi
        {
            return Err(Error::Config(format!(
                "bpm range [{}, {}] must lie inside [{BPM_MIN}, {BPM_MAX}]",
                self.bpm_lo, self.bpm_hi
            )));
        }
        if self.jitter >= 0.1 || self.jitter < 0.0 {
            return Err(Error::Config(format!("jitter {} must be in [0, 0.1)", self.jitter)));
        }
        if self.duration_seconds <= 0.0 || self.count == 0 {
            return Err(Error::Config("duration and count must be positive".into()));
        }
        Ok(())
    }
}

fn add_damped_sine(samples: &mut [f64], start: usize, freq: f64, amp: f64, tau: f64) {
    let rate = SYNTH_RATE as f64;
    let len = ((4.0 * tau) * rate) as usize;
    for n in 0..len {
        let Some(slot) = samples.get_mut(start + n) else { break };
        let t = n as f64 / rate;
        *slot += amp * (-t / tau).exp() * (2.0 * std::f64::consts::PI * freq * t).sin();
    }
}

fn add_noise_burst(samples: &mut [f64], start: usize, amp: f64, tau: f64, rng: &mut ChaCha8Rng) {
    let rate = SYNTH_RATE as f64;
    let len = ((4.0 * tau) * rate) as usize;
    for n in 0..len {
        let noise: f64 = rng.random_range(-1.0..1.0);
        let Some(slot) = samples.get_mut(start + n) else { break };
        let t = n as f64 / rate;
        *slot += amp * (-t / tau).exp() * noise;
    }
}

/// Renders one click track. Returns the audio and the exact (possibly
/// jittered) beat times in seconds.
pub fn gen_click_track(bpm: f64, spec: &SynthSpec, seed: u64) -> (AudioBuffer, Vec<f64>) {
    let rate = SYNTH_RATE as f64;
    let total = (spec.duration_seconds * rate).round() as usize;
    let mut samples = vec![0.0f64; total];
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let period = 60.0 / bpm;
    let mut beats = Vec::new();
    let mut k = 0usize;
    loop {
        let nominal = k as f64 * period;
        if nominal >= spec.duration_seconds {
            break;
        }
        let jitter = if spec.jitter > 0.0 {
            spec.jitter * period * rng.random_range(-1.0..1.0)
        } else {
            0.0
        };
        let t = (nominal + jitter).max(0.0);
        beats.push(t);
        let start = (t * rate).round() as usize;
        if spec.timbres.click {
            add_damped_sine(&mut samples, start, 3000.0, 0.5, 0.004);
        }
        if spec.timbres.kick {
            add_damped_sine(&mut samples, start, 70.0, 0.6, 0.06);
        }
        if spec.timbres.hat {
            add_noise_burst(&mut samples, start, 0.35, 0.008, &mut rng);
        }
        k += 1;
    }
    if spec.timbres.pad {
        for (n, s) in samples.iter_mut().enumerate() {
            let t = n as f64 / rate;
            for f in [220.0, 277.18, 329.63] {
                *s += 0.04 * (2.0 * std::f64::consts::PI * f * t).sin();
            }
        }
    }
    if spec.noise_floor_db > -120.0 {
        let amp = 10.0f64.powf(spec.noise_floor_db / 20.0);
        for s in samples.iter_mut() {
            *s += amp * rng.random_range(-1.0..1.0);
        }
    }
    let peak = samples.iter().fold(0.0f64, |a, &v| a.max(v.abs()));
    if peak > 0.95 {
        let scale = 0.95 / peak;
        for s in samples.iter_mut() {
            *s *= scale;
        }
    }
    (AudioBuffer { samples, sample_rate: SYNTH_RATE }, beats)
}

fn track_seed(seed: u64, index: usize) -> u64 {
    // splitmix64 of (seed + index + 1)
    let mut z = seed.wrapping_add((index as u64 + 1).wrapping_mul(0x9E3779B97F4A7C15));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58476D1CE4E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D049BB133111EB);
    z ^ (z >> 31)
}

/// Files produced by [`gen_dataset`].
#[derive(Clone, Debug)]
pub struct DatasetPaths {
    pub dir: PathBuf,
    pub tempo_tsv: PathBuf,
    pub beats_tsv: PathBuf,
    pub tracks: Vec<(String, f64)>,
}

/// Writes `count` WAV click tracks with a tempo TSV and a beat TSV into
/// `dir`. BPM values are sampled uniformly from the spec range; everything
/// is deterministic in the spec seed.
pub fn gen_dataset(spec: &SynthSpec, dir: impl AsRef<Path>) -> Result<DatasetPaths> {
    spec.validate()?;
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut master = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut tempo_rows = Vec::with_capacity(spec.count);
    let mut beat_rows = Vec::with_capacity(spec.count);
    for i in 0..spec.count {
        let bpm = master.random_range(spec.bpm_lo..=spec.bpm_hi);
        let (audio, beats) = gen_click_track(bpm, spec, track_seed(spec.seed, i));
        let name = format!("track_{i:03}.wav");
        write_wav(dir.join(&name), &audio)?;
        tempo_rows.push((name.clone(), bpm));
        beat_rows.push((name, beats));
    }
    let tempo_tsv = dir.join("tempo.tsv");
    let beats_tsv = dir.join("beats.tsv");
    manifest::write_tempo_manifest(&tempo_tsv, &tempo_rows)?;
    manifest::write_beats_manifest(&beats_tsv, &beat_rows)?;
    Ok(DatasetPaths { dir: dir.to_path_buf(), tempo_tsv, beats_tsv, tracks: tempo_rows })
}
