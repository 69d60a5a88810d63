//! Minimal RIFF/WAVE reader and writer.
//!
//! Reads PCM16 and IEEE float32, mono or stereo (downmixed by channel
//! average). Parse failures report the byte offset; unsupported layouts
//! name the offending chunk or field.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

/// Mono audio in `[-1, 1]` at a known sample rate.
#[derive(Clone, Debug, PartialEq)]
pub struct AudioBuffer {
    pub samples: Vec<f64>,
    pub sample_rate: u32,
}

impl AudioBuffer {
    pub fn duration_seconds(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate as f64
    }
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::Parse {
                offset: self.pos as u64,
                detail: format!("truncated file while reading {what} ({n} bytes needed)"),
            });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32_le(&mut self, what: &str) -> Result<u32> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn u16_le(&mut self, what: &str) -> Result<u16> {
        let b = self.take(2, what)?;
        Ok(u16::from_le_bytes([b[0], b[1]]))
    }
}

#[derive(Clone, Copy)]
struct Format {
    codec: u16,
    channels: u16,
    sample_rate: u32,
    bits: u16,
}

/// Reads a WAV file into a mono buffer.
pub fn read_wav(path: impl AsRef<Path>) -> Result<AudioBuffer> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_wav(&bytes)
}

/// Decodes WAV bytes (exposed separately so tests can build fixtures in
/// memory).
pub fn decode_wav(bytes: &[u8]) -> Result<AudioBuffer> {
    let mut cur = Cursor { bytes, pos: 0 };
    if cur.take(4, "RIFF magic")? != b"RIFF" {
        return Err(Error::Parse { offset: 0, detail: "missing RIFF magic".into() });
    }
    let _riff_size = cur.u32_le("RIFF size")?;
    if cur.take(4, "WAVE tag")? != b"WAVE" {
        return Err(Error::Parse { offset: 8, detail: "missing WAVE form type".into() });
    }

    let mut format: Option<Format> = None;
    let mut data: Option<(usize, usize)> = None; // (offset, len)
    while cur.pos + 8 <= bytes.len() {
        let id_off = cur.pos;
        let id: [u8; 4] = cur.take(4, "chunk id")?.try_into().unwrap();
        let size = cur.u32_le("chunk size")? as usize;
        if cur.pos + size > bytes.len() {
            return Err(Error::Parse {
                offset: id_off as u64,
                detail: format!(
                    "chunk {:?} declares {size} bytes but only {} remain",
                    String::from_utf8_lossy(&id),
                    bytes.len() - cur.pos
                ),
            });
        }
        match &id {
            b"fmt " => {
                let mut f = Cursor { bytes: &bytes[cur.pos..cur.pos + size], pos: 0 };
                let codec = f.u16_le("audio format")?;
                let channels = f.u16_le("channel count")?;
                let sample_rate = f.u32_le("sample rate")?;
                let _byte_rate = f.u32_le("byte rate")?;
                let _block_align = f.u16_le("block align")?;
                let bits = f.u16_le("bits per sample")?;
                format = Some(Format { codec, channels, sample_rate, bits });
            }
            b"data" => {
                data = Some((cur.pos, size));
            }
            _ => {}
        }
        // chunks are word-aligned; odd sizes carry a pad byte
        cur.pos += size + (size & 1);
    }

    let fmt = format.ok_or(Error::Parse { offset: 12, detail: "no fmt chunk found".into() })?;
    let (data_off, data_len) =
        data.ok_or(Error::Parse { offset: 12, detail: "no data chunk found".into() })?;

    if fmt.channels == 0 || fmt.channels > 2 {
        return Err(Error::UnsupportedWav(format!(
            "fmt chunk: {} channels (only mono/stereo supported)",
            fmt.channels
        )));
    }
    if fmt.sample_rate == 0 {
        return Err(Error::UnsupportedWav("fmt chunk: zero sample rate".into()));
    }
    let payload = &bytes[data_off..data_off + data_len];
    let channels = fmt.channels as usize;

    let interleaved: Vec<f64> = match (fmt.codec, fmt.bits) {
        (1, 16) => {
            if data_len % 2 != 0 {
                return Err(Error::Parse {
                    offset: (data_off + data_len) as u64,
                    detail: "data chunk holds a torn 16-bit sample".into(),
                });
            }
            payload
                .chunks_exact(2)
                .map(|b| i16::from_le_bytes([b[0], b[1]]) as f64 / 32768.0)
                .collect()
        }
        (3, 32) => {
            if data_len % 4 != 0 {
                return Err(Error::Parse {
                    offset: (data_off + data_len) as u64,
                    detail: "data chunk holds a torn 32-bit sample".into(),
                });
            }
            payload
                .chunks_exact(4)
                .map(|b| (f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64).clamp(-1.0, 1.0))
                .collect()
        }
        (codec, bits) => {
            return Err(Error::UnsupportedWav(format!(
                "fmt chunk: codec {codec} at {bits} bits (PCM16 or float32 required)"
            )))
        }
    };

    let frames = interleaved.len() / channels;
    let samples = if channels == 1 {
        interleaved
    } else {
        (0..frames)
            .map(|i| (interleaved[2 * i] + interleaved[2 * i + 1]) / 2.0)
            .collect()
    };
    Ok(AudioBuffer { samples, sample_rate: fmt.sample_rate })
}

/// Writes a mono PCM16 WAV file.
pub fn write_wav(path: impl AsRef<Path>, buf: &AudioBuffer) -> Result<()> {
    let path = path.as_ref();
    let bytes = encode_wav(buf);
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn encode_wav(buf: &AudioBuffer) -> Vec<u8> {
    let data_len = buf.samples.len() * 2;
    let mut out = Vec::with_capacity(44 + data_len);
    out.extend_from_slice(b"RIFF");
    out.extend_from_slice(&((36 + data_len) as u32).to_le_bytes());
    out.extend_from_slice(b"WAVE");
    out.extend_from_slice(b"fmt ");
    out.extend_from_slice(&16u32.to_le_bytes());
    out.extend_from_slice(&1u16.to_le_bytes()); // PCM
    out.extend_from_slice(&1u16.to_le_bytes()); // mono
    out.extend_from_slice(&buf.sample_rate.to_le_bytes());
    out.extend_from_slice(&(buf.sample_rate * 2).to_le_bytes());
    out.extend_from_slice(&2u16.to_le_bytes());
    out.extend_from_slice(&16u16.to_le_bytes());
    out.extend_from_slice(b"data");
    out.extend_from_slice(&(data_len as u32).to_le_bytes());
    for &s in &buf.samples {
        let v = (s.clamp(-1.0, 1.0) * 32767.0).round() as i16;
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}
