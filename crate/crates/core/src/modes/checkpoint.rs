//! Checkpoint format and parameter averaging.
//!
//! Layout: a human-readable header, then the raw value payload.
//!
//! ```text
//! dualmode-checkpoint 1
//! config <key = value>     (one line per config entry)
//! param <id> <0|1 trainable> <ndims> <extents...>
//! end_header
//! <all values as little-endian f64, in header order>
//! ```
//!
//! Round trips are bit-exact; the version line is mandatory.

use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::numerics::{Parameter, ParameterSet, Tensor};

pub const CHECKPOINT_VERSION: u32 = 1;
const MAGIC: &str = "dualmode-checkpoint";

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ManifestEntry {
    pub id: String,
    pub trainable: bool,
    pub shape: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Manifest {
    pub version: u32,
    pub config_lines: Vec<String>,
    pub entries: Vec<ManifestEntry>,
}

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub manifest: Manifest,
    pub params: ParameterSet,
}

impl Checkpoint {
    pub fn new(params: &ParameterSet, config_lines: Vec<String>) -> Self {
        let entries = params
            .iter()
            .map(|p| ManifestEntry {
                id: p.id.clone(),
                trainable: p.trainable,
                shape: p.value.shape().to_vec(),
            })
            .collect();
        Checkpoint {
            manifest: Manifest { version: CHECKPOINT_VERSION, config_lines, entries },
            params: params.clone(),
        }
    }
}

pub fn save_checkpoint(ck: &Checkpoint, path: impl AsRef<Path>) -> Result<()> {
    let mut header = format!("{MAGIC} {}\n", ck.manifest.version);
    for line in &ck.manifest.config_lines {
        if line.contains('\n') {
            return Err(Error::Checkpoint("config line contains newline".into()));
        }
        header.push_str(&format!("config {line}\n"));
    }
    for e in &ck.manifest.entries {
        if e.id.contains(char::is_whitespace) {
            return Err(Error::Checkpoint(format!("parameter id {:?} contains whitespace", e.id)));
        }
        let dims: Vec<String> = e.shape.iter().map(|d| d.to_string()).collect();
        header.push_str(&format!(
            "param {} {} {} {}\n",
            e.id,
            u8::from(e.trainable),
            e.shape.len(),
            dims.join(" ")
        ));
    }
    header.push_str("end_header\n");

    let mut file = std::fs::File::create(path)?;
    file.write_all(header.as_bytes())?;
    for e in &ck.manifest.entries {
        let p = ck.params.get(&e.id)?;
        for v in p.value.data() {
            file.write_all(&v.to_le_bytes())?;
        }
    }
    Ok(())
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    let mut raw = Vec::new();
    std::fs::File::open(path.as_ref())?.read_to_end(&mut raw)?;

    let header_end = find_header_end(&raw)
        .ok_or_else(|| Error::Checkpoint("missing end_header marker".into()))?;
    let header = std::str::from_utf8(&raw[..header_end])
        .map_err(|_| Error::Checkpoint("header is not utf-8".into()))?;
    let payload = &raw[header_end + "end_header\n".len()..];

    let mut lines = header.lines();
    let magic = lines.next().ok_or_else(|| Error::Checkpoint("empty file".into()))?;
    let version = parse_magic(magic)?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::CheckpointVersion { found: version, expected: CHECKPOINT_VERSION });
    }

    let mut config_lines = Vec::new();
    let mut entries = Vec::new();
    for line in lines {
        if let Some(rest) = line.strip_prefix("config ") {
            config_lines.push(rest.to_string());
        } else if let Some(rest) = line.strip_prefix("param ") {
            entries.push(parse_param_line(rest)?);
        } else if !line.trim().is_empty() {
            return Err(Error::Checkpoint(format!("unrecognized header line {line:?}")));
        }
    }

    let total: usize = entries.iter().map(|e| e.shape.iter().product::<usize>()).sum();
    if payload.len() != total * 8 {
        return Err(Error::Checkpoint(format!(
            "payload holds {} bytes, manifest needs {}",
            payload.len(),
            total * 8
        )));
    }

    let mut params = ParameterSet::new();
    let mut offset = 0;
    for e in &entries {
        let numel: usize = e.shape.iter().product();
        let mut data = Vec::with_capacity(numel);
        for i in 0..numel {
            let start = (offset + i) * 8;
            let bytes: [u8; 8] = payload[start..start + 8].try_into().unwrap();
            data.push(f64::from_le_bytes(bytes));
        }
        offset += numel;
        params.insert(Parameter::new(e.id.clone(), Tensor::new(e.shape.clone(), data)?, e.trainable))?;
    }
    Ok(Checkpoint {
        manifest: Manifest { version, config_lines, entries },
        params,
    })
}

fn find_header_end(raw: &[u8]) -> Option<usize> {
    let marker = b"end_header\n";
    raw.windows(marker.len())
        .position(|w| w == marker)
        .filter(|&pos| pos == 0 || raw[pos - 1] == b'\n')
}

fn parse_magic(line: &str) -> Result<u32> {
    let rest = line
        .strip_prefix(MAGIC)
        .ok_or_else(|| Error::Checkpoint(format!("bad magic line {line:?}")))?;
    rest.trim()
        .parse()
        .map_err(|_| Error::Checkpoint(format!("bad version in {line:?}")))
}

fn parse_param_line(rest: &str) -> Result<ManifestEntry> {
    let mut parts = rest.split_whitespace();
    let id = parts.next().ok_or_else(|| Error::Checkpoint("param line missing id".into()))?;
    let trainable = match parts.next() {
        Some("0") => false,
        Some("1") => true,
        other => return Err(Error::Checkpoint(format!("bad trainable flag {other:?}"))),
    };
    let ndims: usize = parts
        .next()
        .and_then(|s| s.parse().ok())
        .ok_or_else(|| Error::Checkpoint("bad ndims".into()))?;
    let shape: Vec<usize> = parts
        .map(|s| s.parse().map_err(|_| Error::Checkpoint(format!("bad extent {s:?}"))))
        .collect::<Result<_>>()?;
    if shape.len() != ndims {
        return Err(Error::Checkpoint(format!(
            "param {id}: {ndims} dims declared, {} given",
            shape.len()
        )));
    }
    Ok(ManifestEntry { id: id.to_string(), trainable, shape })
}

/// Element-wise checkpoint average `w·a + (1−w)·b`. Manifests must match
/// exactly; the endpoints return bit-copies.
pub fn model_soup(a: &Checkpoint, b: &Checkpoint, w: f64) -> Result<Checkpoint> {
    if !(0.0..=1.0).contains(&w) {
        return Err(Error::invalid("model_soup", format!("weight {w} outside [0, 1]")));
    }
    if a.manifest != b.manifest {
        return Err(Error::Checkpoint("manifest mismatch between soup inputs".into()));
    }
    if w == 1.0 {
        return Ok(a.clone());
    }
    if w == 0.0 {
        return Ok(b.clone());
    }
    let mut params = ParameterSet::new();
    for e in &a.manifest.entries {
        let av = &a.params.get(&e.id)?.value;
        let bv = &b.params.get(&e.id)?.value;
        let data: Vec<f64> =
            av.data().iter().zip(bv.data()).map(|(x, y)| w * x + (1.0 - w) * y).collect();
        params.insert(Parameter::new(e.id.clone(), Tensor::new(e.shape.clone(), data)?, e.trainable))?;
    }
    Ok(Checkpoint { manifest: a.manifest.clone(), params })
}
