//! Checkpoint format: `"MGAN"` magic, a u32 version, a u32 header length,
//! a structured-text header (config, schedules, frontend normalization,
//! tensor directory), then little-endian float32 tensor payloads in
//! directory order.
//!
//! The header makes a checkpoint self-describing: loading returns both the
//! parameters and the exact network/frontend configuration they were
//! trained with.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::frontend;
use crate::network::{expected_param_shapes, Network, NetworkConfig, BPM_MIN, CLASS_COUNT};
use crate::params::NetworkParams;
use crate::tensor::{Scalar, Tensor};

const MAGIC: &[u8; 4] = b"MGAN";
const VERSION: u32 = 1;

/// How the frontend prepared network inputs; recorded so inference
/// reproduces training exactly.
#[derive(Clone, Debug, PartialEq)]
pub struct FrontendDescriptor {
    pub mel_bins: usize,
    pub normalization: String,
    pub std_floor: f64,
    pub magnitude: String,
}

impl Default for FrontendDescriptor {
    fn default() -> Self {
        FrontendDescriptor {
            mel_bins: frontend::MEL_BINS,
            normalization: "per-segment-zscore".into(),
            std_floor: frontend::STD_FLOOR,
            magnitude: "linear".into(),
        }
    }
}

/// A saved model: parameters are always float32 on disk.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: NetworkConfig,
    pub frontend: FrontendDescriptor,
    pub params: NetworkParams<f32>,
}

fn join_usizes(v: &[usize]) -> String {
    v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",")
}

fn parse_usizes(s: &str, what: &str, offset: u64) -> Result<Vec<usize>> {
    s.split(',')
        .map(|p| {
            p.trim().parse::<usize>().map_err(|_| Error::Parse {
                offset,
                detail: format!("bad {what} entry {p:?}"),
            })
        })
        .collect()
}

impl Checkpoint {
    pub fn new(config: NetworkConfig, params: NetworkParams<f32>) -> Result<Self> {
        // reuse Network validation to catch shape drift before writing
        let net = Network::new(config, params)?;
        Ok(Checkpoint {
            config: net.config,
            frontend: FrontendDescriptor::default(),
            params: net.params,
        })
    }

    /// Fails when the checkpoint's beat capability does not match what the
    /// caller is about to run.
    pub fn ensure_mode(&self, multitask: bool) -> Result<()> {
        match (multitask, self.config.include_beat_branch) {
            (false, true) => Err(Error::Capability(
                "checkpoint carries a beat branch; refusing to load it into tempo-only mode".into(),
            )),
            (true, false) => Err(Error::Capability(
                "checkpoint has no beat branch; it cannot serve multitask inference".into(),
            )),
            _ => Ok(()),
        }
    }

    pub fn network<T: Scalar>(&self) -> Result<Network<T>> {
        Network::new(self.config.clone(), self.params.cast())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut header = String::new();
        let c = &self.config;
        header.push_str("format = mganet-checkpoint\n");
        header.push_str(&format!("freq_in = {}\n", c.freq_in));
        header.push_str(&format!("time_in = {}\n", c.time_in));
        header.push_str(&format!("channels = {}\n", join_usizes(&c.channels)));
        header.push_str(&format!("pools = {}\n", join_usizes(&c.pools)));
        header.push_str(&format!("groups = {}\n", join_usizes(&c.groups)));
        header.push_str(&format!("branches = {}\n", c.branches));
        header.push_str(&format!("beat_branch = {}\n", c.include_beat_branch));
        header.push_str(&format!("attention_bypass = {}\n", c.attention_bypass));
        header.push_str(&format!("class_count = {CLASS_COUNT}\n"));
        header.push_str(&format!("bpm_min = {BPM_MIN}\n"));
        header.push_str(&format!("norm.mel_bins = {}\n", self.frontend.mel_bins));
        header.push_str(&format!("norm.kind = {}\n", self.frontend.normalization));
        header.push_str(&format!("norm.std_floor = {:e}\n", self.frontend.std_floor));
        header.push_str(&format!("norm.magnitude = {}\n", self.frontend.magnitude));
        let mut offset = 0usize;
        for (name, tensor) in self.params.iter() {
            header.push_str(&format!(
                "tensor {name} {} {offset} {}\n",
                join_usizes(tensor.shape()),
                tensor.numel()
            ));
            offset += tensor.numel() * 4;
        }

        let mut out = Vec::with_capacity(12 + header.len() + offset);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(header.len() as u32).to_le_bytes());
        out.extend_from_slice(header.as_bytes());
        for (_, tensor) in self.params.iter() {
            for &v in tensor.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 12 {
            return Err(Error::Parse { offset: 0, detail: "checkpoint shorter than its fixed header".into() });
        }
        if &bytes[0..4] != MAGIC {
            return Err(Error::Parse { offset: 0, detail: "bad checkpoint magic (want MGAN)".into() });
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
        if version != VERSION {
            return Err(Error::Parse { offset: 4, detail: format!("unsupported checkpoint version {version}") });
        }
        let header_len = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
        if 12 + header_len > bytes.len() {
            return Err(Error::Parse {
                offset: 8,
                detail: format!(
                    "header length {header_len} exceeds file size {} - no model loaded",
                    bytes.len()
                ),
            });
        }
        let header = std::str::from_utf8(&bytes[12..12 + header_len])
            .map_err(|e| Error::Parse { offset: 12 + e.valid_up_to() as u64, detail: "header is not utf-8".into() })?;
        let payload = &bytes[12 + header_len..];

        let mut fields: BTreeMap<String, String> = BTreeMap::new();
        let mut directory: Vec<(String, Vec<usize>, usize, usize)> = Vec::new();
        let mut line_offset = 12u64;
        for line in header.lines() {
            let this_offset = line_offset;
            line_offset += line.len() as u64 + 1;
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            if let Some(rest) = line.strip_prefix("tensor ") {
                let parts: Vec<&str> = rest.split_whitespace().collect();
                if parts.len() != 4 {
                    return Err(Error::Parse {
                        offset: this_offset,
                        detail: format!("malformed tensor directory line {line:?}"),
                    });
                }
                let shape = parse_usizes(parts[1], "shape", this_offset)?;
                let offset: usize = parts[2].parse().map_err(|_| Error::Parse {
                    offset: this_offset,
                    detail: format!("bad tensor offset {:?}", parts[2]),
                })?;
                let count: usize = parts[3].parse().map_err(|_| Error::Parse {
                    offset: this_offset,
                    detail: format!("bad tensor count {:?}", parts[3]),
                })?;
                if shape.iter().product::<usize>() != count {
                    return Err(Error::Parse {
                        offset: this_offset,
                        detail: format!("tensor {} shape/count disagree", parts[0]),
                    });
                }
                directory.push((parts[0].to_string(), shape, offset, count));
            } else if let Some((k, v)) = line.split_once('=') {
                fields.insert(k.trim().to_string(), v.trim().to_string());
            } else {
                return Err(Error::Parse {
                    offset: this_offset,
                    detail: format!("unparseable header line {line:?}"),
                });
            }
        }

        let get = |k: &str| -> Result<&String> {
            fields.get(k).ok_or_else(|| Error::Parse { offset: 12, detail: format!("header missing {k:?}") })
        };
        let get_usize = |k: &str| -> Result<usize> {
            get(k)?.parse().map_err(|_| Error::Parse { offset: 12, detail: format!("bad value for {k:?}") })
        };
        let get_bool = |k: &str| -> Result<bool> {
            get(k)?.parse().map_err(|_| Error::Parse { offset: 12, detail: format!("bad value for {k:?}") })
        };

        let config = NetworkConfig {
            freq_in: get_usize("freq_in")?,
            time_in: get_usize("time_in")?,
            channels: parse_usizes(get("channels")?, "channels", 12)?,
            pools: parse_usizes(get("pools")?, "pools", 12)?,
            groups: parse_usizes(get("groups")?, "groups", 12)?,
            branches: get_usize("branches")?,
            include_beat_branch: get_bool("beat_branch")?,
            attention_bypass: get_bool("attention_bypass")?,
        };
        let fe = FrontendDescriptor {
            mel_bins: get_usize("norm.mel_bins")?,
            normalization: get("norm.kind")?.clone(),
            std_floor: get("norm.std_floor")?
                .parse()
                .map_err(|_| Error::Parse { offset: 12, detail: "bad norm.std_floor".into() })?,
            magnitude: get("norm.magnitude")?.clone(),
        };

        let mut params = NetworkParams::new();
        for (name, shape, offset, count) in directory {
            let end = offset + count * 4;
            if end > payload.len() {
                return Err(Error::Parse {
                    offset: (12 + header_len + payload.len()) as u64,
                    detail: format!(
                        "tensor {name} payload runs to byte {end} but only {} are present - no model loaded",
                        payload.len()
                    ),
                });
            }
            let data: Vec<f32> = payload[offset..end]
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
                .collect();
            params.insert(name, Tensor::new(shape, data));
        }

        // cross-check against the config-derived layout
        let expected = expected_param_shapes(&config);
        for (name, shape) in &expected {
            match params.get(name) {
                Ok(t) if t.shape() == shape.as_slice() => {}
                Ok(t) => {
                    return Err(Error::Parse {
                        offset: 12,
                        detail: format!("tensor {name} has shape {:?}, config expects {shape:?}", t.shape()),
                    })
                }
                Err(_) => {
                    return Err(Error::Parse {
                        offset: 12,
                        detail: format!("checkpoint missing tensor {name}"),
                    })
                }
            }
        }
        if params.len() != expected.len() {
            return Err(Error::Parse {
                offset: 12,
                detail: "checkpoint carries tensors the config does not describe".into(),
            });
        }

        Ok(Checkpoint { config, frontend: fe, params })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}
