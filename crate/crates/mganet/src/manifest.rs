//! Annotation manifests: `path<TAB>bpm` for tempo, `path<TAB>t1,t2,...`
//! (seconds) for beats. Relative paths resolve against the manifest's
//! directory.

use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::frontend::{self, FRAME_HOP_SECONDS};
use crate::train::TrainExample;

fn resolve(base: &Path, entry: &str) -> PathBuf {
    let p = Path::new(entry);
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        base.parent().unwrap_or(Path::new(".")).join(p)
    }
}

pub fn read_tempo_manifest(path: impl AsRef<Path>) -> Result<Vec<(PathBuf, f64)>> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut rows = Vec::new();
    let mut offset = 0u64;
    for line in text.lines() {
        let this = offset;
        offset += line.len() as u64 + 1;
        if line.trim().is_empty() || line.starts_with('#') {
            continue;
        }
        let (file, bpm) = line.split_once('\t').ok_or_else(|| Error::Parse {
            offset: this,
            detail: format!("expected `path<TAB>bpm`, got {line:?}"),
        })?;
        let bpm: f64 = bpm.trim().parse().map_err(|_| Error::Parse {
            offset: this,
            detail: format!("bad bpm value {bpm:?}"),
        })?;
        rows.push((resolve(path, file), bpm));
    }
    Ok(rows)
}

pub fn read_beats_manifest(path: impl AsRef<Path>) -> Result<Vec<(PathBuf, Vec<f64>)>> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut rows = Vec::new();
    let mut offset = 0u64;
    for line in text.lines() {
        let this = offset;
        offset += line.len() as u64 + 1;
        if line.trim().is_empty() || line.starts_with('#') {
            continue;
        }
        let (file, times) = line.split_once('\t').ok_or_else(|| Error::Parse {
            offset: this,
            detail: format!("expected `path<TAB>times`, got {line:?}"),
        })?;
        let times: Vec<f64> = times
            .split(',')
            .filter(|t| !t.trim().is_empty())
            .map(|t| {
                t.trim().parse().map_err(|_| Error::Parse {
                    offset: this,
                    detail: format!("bad beat time {t:?}"),
                })
            })
            .collect::<Result<_>>()?;
        rows.push((resolve(path, file), times));
    }
    Ok(rows)
}

pub fn write_tempo_manifest(path: impl AsRef<Path>, rows: &[(String, f64)]) -> Result<()> {
    let path = path.as_ref();
    let mut out = String::new();
    for (file, bpm) in rows {
        out.push_str(&format!("{file}\t{bpm:.6}\n"));
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

pub fn write_beats_manifest(path: impl AsRef<Path>, rows: &[(String, Vec<f64>)]) -> Result<()> {
    let path = path.as_ref();
    let mut out = String::new();
    for (file, times) in rows {
        let joined: Vec<String> = times.iter().map(|t| format!("{t:.6}")).collect();
        out.push_str(&format!("{file}\t{}\n", joined.join(",")));
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// Beat time in seconds to a spectrogram frame index.
pub fn beat_time_to_frame(seconds: f64) -> usize {
    (seconds / FRAME_HOP_SECONDS).round() as usize
}

/// Loads tempo-annotated tracks into training examples, attaching beat
/// annotations (as frame indices) where available.
pub fn load_train_examples(
    tempo_manifest: impl AsRef<Path>,
    beats_manifest: Option<&Path>,
) -> Result<Vec<TrainExample>> {
    let rows = read_tempo_manifest(tempo_manifest)?;
    let beats: std::collections::BTreeMap<PathBuf, Vec<f64>> = match beats_manifest {
        Some(p) => read_beats_manifest(p)?.into_iter().collect(),
        None => Default::default(),
    };
    let mut out = Vec::with_capacity(rows.len());
    for (path, bpm) in rows {
        let spec = frontend::wav_to_mel(&path)?;
        let mut ex = TrainExample::new(path.to_string_lossy(), spec, bpm);
        if let Some(times) = beats.get(&path) {
            ex.beat_frames = Some(times.iter().map(|&t| beat_time_to_frame(t)).collect());
        }
        out.push(ex);
    }
    Ok(out)
}
