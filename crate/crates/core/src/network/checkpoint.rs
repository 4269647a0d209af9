//! Checkpoint files: a text header followed by raw little-endian `f32` data.
//!
//! ```text
//! stereoqa-checkpoint v1
//! arch <sha256 of the layer manifest>
//! seed <u64>
//! standardizer.mean <108 comma-separated values>
//! standardizer.std <108 comma-separated values>
//! tensors <count>
//! <name> <d0>,<d1>,...        (one line per tensor)
//! data
//! <Σ numel × 4 bytes>
//! ```

use std::fmt::Write as _;
use std::path::Path;

use super::{architecture_hash, tensor_manifest, NetworkParams};
use crate::error::{Error, Result};
use crate::nss::FeatureStandardizer;
use crate::tensor::{Real, Tensor};

pub const CHECKPOINT_VERSION: &str = "stereoqa-checkpoint v1";

fn join<V: std::fmt::Display>(values: impl IntoIterator<Item = V>) -> String {
    let mut s = String::new();
    for (i, v) in values.into_iter().enumerate() {
        if i > 0 {
            s.push(',');
        }
        write!(s, "{v}").expect("writing to a String");
    }
    s
}

fn encode<T: Real>(params: &NetworkParams<T>) -> Vec<u8> {
    let mut header = format!(
        "{CHECKPOINT_VERSION}\narch {}\nseed {}\nstandardizer.mean {}\nstandardizer.std {}\ntensors {}\n",
        architecture_hash(),
        params.seed,
        join(params.standardizer.mean()),
        join(params.standardizer.std()),
        params.tensors.len()
    );
    for (name, shape) in tensor_manifest() {
        writeln!(header, "{name} {}", join(&shape)).expect("writing to a String");
    }
    header.push_str("data\n");
    let mut bytes = header.into_bytes();
    for t in &params.tensors {
        for &v in t.data() {
            bytes.extend_from_slice(&(v.as_f64() as f32).to_le_bytes());
        }
    }
    bytes
}

/// Writes `params` (stored as `f32` whatever `T` is).
pub fn save_checkpoint<T: Real>(params: &NetworkParams<T>, path: &Path) -> Result<()> {
    std::fs::write(path, encode(params))?;
    Ok(())
}

struct Header<'a> {
    lines: std::str::Split<'a, char>,
    line: usize,
}

impl<'a> Header<'a> {
    fn next(&mut self) -> Result<&'a str> {
        self.line += 1;
        self.lines.next().ok_or_else(|| Error::Format("checkpoint header ends early".into()))
    }

    fn field(&mut self, key: &str) -> Result<&'a str> {
        let line = self.next()?;
        line.strip_prefix(key)
            .and_then(|rest| rest.strip_prefix(' '))
            .ok_or_else(|| Error::Parse { line: self.line, msg: format!("expected '{key} ...', found {line:?}") })
    }

    fn parse<V: std::str::FromStr>(&self, s: &str) -> Result<V> {
        s.parse().map_err(|_| Error::Parse { line: self.line, msg: format!("cannot parse {s:?}") })
    }

    fn list<V: std::str::FromStr>(&self, s: &str) -> Result<Vec<V>> {
        s.split(',').map(|p| self.parse(p)).collect()
    }
}

/// Reads a checkpoint written by [`save_checkpoint`].
pub fn load_checkpoint(path: &Path) -> Result<NetworkParams<f32>> {
    decode(&std::fs::read(path)?)
}

fn decode(bytes: &[u8]) -> Result<NetworkParams<f32>> {
    const MARKER: &[u8] = b"\ndata\n";
    let split = bytes
        .windows(MARKER.len())
        .position(|w| w == MARKER)
        .ok_or_else(|| Error::Format("checkpoint has no data section".into()))?;
    let header = std::str::from_utf8(&bytes[..split]).map_err(|_| Error::Format("checkpoint header is not UTF-8".into()))?;
    let data = &bytes[split + MARKER.len()..];
    let mut h = Header { lines: header.split('\n'), line: 0 };

    let version = h.next()?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::IncompatibleCheckpoint(format!("version {version:?}, expected {CHECKPOINT_VERSION:?}")));
    }
    let arch = h.field("arch")?;
    if arch != architecture_hash() {
        return Err(Error::IncompatibleCheckpoint(format!("architecture hash {arch} does not match this build")));
    }
    let field = h.field("seed")?;
    let seed: u64 = h.parse(field)?;
    let field = h.field("standardizer.mean")?;
    let mean: Vec<f64> = h.list(field)?;
    let field = h.field("standardizer.std")?;
    let std: Vec<f64> = h.list(field)?;
    let standardizer =
        FeatureStandardizer::from_parts(mean, std).map_err(|e| Error::Parse { line: h.line, msg: e.to_string() })?;
    let field = h.field("tensors")?;
    let count: usize = h.parse(field)?;
    let manifest = tensor_manifest();
    if count != manifest.len() {
        return Err(Error::IncompatibleCheckpoint(format!("{count} tensors, expected {}", manifest.len())));
    }
    for (name, shape) in &manifest {
        let line = h.next()?;
        if line != format!("{name} {}", join(shape)) {
            return Err(Error::IncompatibleCheckpoint(format!("manifest entry {line:?} does not match {name}")));
        }
    }
    if h.lines.next().is_some() {
        return Err(Error::Format("unexpected lines after the tensor manifest".into()));
    }

    let expected: usize = manifest.iter().map(|(_, s)| s.iter().product::<usize>()).sum::<usize>() * 4;
    if data.len() != expected {
        return Err(Error::Format(format!(
            "checkpoint data holds {} bytes, expected {expected}{}",
            data.len(),
            if data.len() < expected { " (truncated)" } else { "" }
        )));
    }
    let mut values = data.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]));
    let tensors = manifest
        .into_iter()
        .map(|(_, shape)| {
            let n = shape.iter().product();
            Tensor::new(shape, values.by_ref().take(n).collect())
        })
        .collect::<Result<Vec<_>>>()?;
    NetworkParams::from_tensors(tensors, seed, standardizer)
}
