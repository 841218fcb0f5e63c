//! Binary network checkpoints.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "CSEG"  u32 version
//! u32 len, config text (key = value lines)
//! u32 count, then per parameter: u32 len, name, 4 × u32 dims, f64 values
//! u32 count, then per running-stat set: u32 len, name, u32 channels,
//!     f64 momentum, f64 mean[channels], f64 var[channels]
//! u32 CRC32 of every preceding byte
//! ```

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::network::{Network, NetworkConfig};
use crate::normalization::RunningStats;
use crate::tensor::{Dims, Tensor4D};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"CSEG";
pub const CHECKPOINT_VERSION: u32 = 1;

struct Writer(Vec<u8>);

impl Writer {
    fn u32(&mut self, v: usize) {
        self.0.extend_from_slice(&(v as u32).to_le_bytes());
    }

    fn f64s(&mut self, values: &[f64]) {
        for v in values {
            self.0.extend_from_slice(&v.to_le_bytes());
        }
    }

    fn text(&mut self, s: &str) {
        self.u32(s.len());
        self.0.extend_from_slice(s.as_bytes());
    }
}

pub fn encode_checkpoint(net: &Network) -> Vec<u8> {
    let mut w = Writer(CHECKPOINT_MAGIC.to_vec());
    w.u32(CHECKPOINT_VERSION as usize);
    w.text(&net.config().to_text());
    w.u32(net.parameters().len());
    for p in net.parameters() {
        w.text(&p.name);
        for d in p.value.dims().as_array() {
            w.u32(d);
        }
        w.f64s(p.value.data());
    }
    w.u32(net.running_stats().len());
    for s in net.running_stats() {
        w.text(&s.name);
        w.u32(s.stats.mean.len());
        w.f64s(&[s.stats.momentum]);
        w.f64s(&s.stats.mean);
        w.f64s(&s.stats.var);
    }
    let crc = crc32fast::hash(&w.0);
    w.0.extend_from_slice(&crc.to_le_bytes());
    w.0
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| Error::Integrity(format!("checkpoint truncated at byte {}", self.pos)))?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u32(&mut self) -> Result<usize> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")) as usize)
    }

    fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        let bytes = self.take(
            n.checked_mul(8)
                .ok_or_else(|| Error::Integrity("length overflow".into()))?,
        )?;
        Ok(bytes
            .chunks_exact(8)
            .map(|b| f64::from_le_bytes(b.try_into().expect("8 bytes")))
            .collect())
    }

    fn text(&mut self) -> Result<String> {
        let n = self.u32()?;
        let at = self.pos;
        String::from_utf8(self.take(n)?.to_vec())
            .map_err(|_| Error::Integrity(format!("invalid UTF-8 text at byte {at}")))
    }
}

/// Parses a checkpoint. When `expected` is given, a stored configuration
/// that differs is reported as a config error naming the first differing
/// field.
pub fn decode_checkpoint(bytes: &[u8], expected: Option<&NetworkConfig>) -> Result<Network> {
    if bytes.len() < 12 || &bytes[..4] != CHECKPOINT_MAGIC {
        return Err(Error::Integrity("not a checkpoint (bad magic or too short)".into()));
    }
    let (body, trailer) = bytes.split_at(bytes.len() - 4);
    let mut r = Reader { bytes: body, pos: 4 };
    let version = r.u32()? as u32;
    if version != CHECKPOINT_VERSION {
        return Err(Error::Integrity(format!(
            "checkpoint version {version} is not supported (expected {CHECKPOINT_VERSION})"
        )));
    }
    let stored = u32::from_le_bytes(trailer.try_into().expect("4 bytes"));
    if crc32fast::hash(body) != stored {
        return Err(Error::Integrity(
            "checkpoint checksum mismatch (file corrupt or truncated)".into(),
        ));
    }

    let config = NetworkConfig::from_text(&r.text()?)
        .map_err(|e| Error::Integrity(format!("stored configuration unreadable: {e}")))?;
    if let Some(want) = expected {
        if let Some(field) = want.first_difference(&config) {
            let show = |c: &NetworkConfig| {
                c.fields()
                    .into_iter()
                    .find(|f| f.0 == field)
                    .map(|f| f.1)
                    .unwrap_or_default()
            };
            return Err(Error::config(
                field,
                format!(
                    "checkpoint has {field} = {} but {} was requested",
                    show(&config),
                    show(want)
                ),
            ));
        }
    }
    let mut net =
        Network::build(config, 0).map_err(|e| Error::Integrity(format!("stored configuration invalid: {e}")))?;

    let count = r.u32()?;
    if count != net.parameters().len() {
        return Err(Error::Integrity(format!(
            "checkpoint holds {count} parameters, configuration needs {}",
            net.parameters().len()
        )));
    }
    for p in net.parameters_mut() {
        let name = r.text()?;
        if name != p.name {
            return Err(Error::Integrity(format!("expected parameter {}, found {name}", p.name)));
        }
        let dims = Dims::new(r.u32()?, r.u32()?, r.u32()?, r.u32()?);
        if dims != p.value.dims() {
            return Err(Error::Integrity(format!(
                "{name}: stored dims {dims}, expected {}",
                p.value.dims()
            )));
        }
        p.value = Tensor4D::new(dims, r.f64s(dims.len())?)?;
    }

    let count = r.u32()?;
    if count != net.running_stats().len() {
        return Err(Error::Integrity(format!(
            "checkpoint holds {count} running-stat sets, configuration needs {}",
            net.running_stats().len()
        )));
    }
    for s in net.running_stats_mut() {
        let name = r.text()?;
        if name != s.name {
            return Err(Error::Integrity(format!(
                "expected running stats {}, found {name}",
                s.name
            )));
        }
        let c = r.u32()?;
        if c != s.stats.mean.len() {
            return Err(Error::Integrity(format!(
                "{name}: {c} channels, expected {}",
                s.stats.mean.len()
            )));
        }
        let momentum = r.f64s(1)?[0];
        s.stats = RunningStats {
            mean: r.f64s(c)?,
            var: r.f64s(c)?,
            momentum,
        };
    }
    if r.pos != body.len() {
        return Err(Error::Integrity(format!(
            "{} unexpected bytes after the last record",
            body.len() - r.pos
        )));
    }
    Ok(net)
}

pub fn save_checkpoint(net: &Network, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode_checkpoint(net)).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Network> {
    let path = path.as_ref();
    decode_checkpoint(&fs::read(path).map_err(|e| Error::io(path, e))?, None)
}

/// Loads a checkpoint that must have been saved with `expected`.
pub fn load_checkpoint_expecting(path: impl AsRef<Path>, expected: &NetworkConfig) -> Result<Network> {
    let path = path.as_ref();
    decode_checkpoint(&fs::read(path).map_err(|e| Error::io(path, e))?, Some(expected))
}
