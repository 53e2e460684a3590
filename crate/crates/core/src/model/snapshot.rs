//! Binary snapshot files.
//!
//! ```text
//! SFUDA-SNAP v1
//! descriptor {"in_channels":1,...}            (optional)
//! param enc0.conv.weight 16,1,3,3 144
//! <144 little-endian f32 values>
//! stat enc0.bn.running_mean 16 16
//! <16 little-endian f32 values>
//! ...
//! checksum crc32 1a2b3c4d
//! ```
//!
//! Each record header is one line; its payload follows immediately. The
//! checksum covers the payload bytes of every record, in file order.

use std::fs;
use std::path::Path;

use super::net::{ModelDescriptor, SegModel};
use crate::error::{Error, Result};
use crate::params::{ParamTensor, ParameterSnapshot};

pub const SNAPSHOT_MAGIC: &str = "SFUDA-SNAP v1";

/// Trainable parameters plus, optionally, what is needed to rebuild the
/// full model (descriptor and batch-norm running statistics).
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub descriptor: Option<ModelDescriptor>,
    pub params: ParameterSnapshot<f32>,
    pub stats: Vec<ParamTensor<f32>>,
}

impl Checkpoint {
    pub fn from_model(model: &SegModel<f32>) -> Self {
        Self {
            descriptor: Some(model.descriptor().clone()),
            params: model.snapshot(),
            stats: model.stat_tensors(),
        }
    }

    pub fn params_only(params: ParameterSnapshot<f32>) -> Self {
        Self {
            descriptor: None,
            params,
            stats: Vec::new(),
        }
    }

    pub fn to_model(&self) -> Result<SegModel<f32>> {
        let descriptor = self
            .descriptor
            .clone()
            .ok_or_else(|| Error::Argument("snapshot has no model descriptor".into()))?;
        let mut model = SegModel::new(descriptor)?;
        model.restore(&self.params)?;
        model.restore_stats(&self.stats)?;
        Ok(model)
    }
}

fn shape_field(shape: &[usize]) -> String {
    if shape.is_empty() {
        "_".into()
    } else {
        shape.iter().map(usize::to_string).collect::<Vec<_>>().join(",")
    }
}

pub fn encode_checkpoint(ckpt: &Checkpoint) -> Vec<u8> {
    let mut out = Vec::new();
    let mut crc = crc32fast::Hasher::new();
    out.extend_from_slice(SNAPSHOT_MAGIC.as_bytes());
    out.push(b'\n');
    if let Some(d) = &ckpt.descriptor {
        out.extend_from_slice(b"descriptor ");
        out.extend_from_slice(serde_json::to_string(d).expect("descriptor serializes").as_bytes());
        out.push(b'\n');
    }
    let records = ckpt
        .params
        .entries()
        .iter()
        .map(|p| ("param", p))
        .chain(ckpt.stats.iter().map(|s| ("stat", s)));
    for (kind, t) in records {
        let header = format!("{kind} {} {} {}\n", t.name, shape_field(&t.shape), t.values.len());
        out.extend_from_slice(header.as_bytes());
        let start = out.len();
        for v in &t.values {
            out.extend_from_slice(&v.to_le_bytes());
        }
        crc.update(&out[start..]);
    }
    out.extend_from_slice(format!("checksum crc32 {:08x}\n", crc.finalize()).as_bytes());
    out
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn line(&mut self) -> Option<&'a str> {
        let rest = &self.bytes[self.pos..];
        let end = rest.iter().position(|&b| b == b'\n')?;
        self.pos += end + 1;
        std::str::from_utf8(&rest[..end]).ok()
    }

    fn take(&mut self, n: usize) -> Option<&'a [u8]> {
        let out = self.bytes.get(self.pos..self.pos + n)?;
        self.pos += n;
        Some(out)
    }
}

pub fn decode_checkpoint(bytes: &[u8], path: &Path) -> Result<Checkpoint> {
    let bad = |reason: String| Error::format(path, reason);
    let mut cur = Cursor { bytes, pos: 0 };
    if cur.line() != Some(SNAPSHOT_MAGIC) {
        return Err(bad(format!("missing {SNAPSHOT_MAGIC:?} header")));
    }
    let mut descriptor = None;
    let mut params = Vec::new();
    let mut stats = Vec::new();
    let mut crc = crc32fast::Hasher::new();
    loop {
        let line = cur.line().ok_or_else(|| bad("truncated before checksum".into()))?;
        let fields: Vec<&str> = line.split(' ').collect();
        match fields.as_slice() {
            ["descriptor", ..] => {
                let json = &line["descriptor ".len()..];
                descriptor = Some(
                    serde_json::from_str(json).map_err(|e| bad(format!("bad descriptor: {e}")))?,
                );
            }
            [kind @ ("param" | "stat"), name, shape, count] => {
                let shape: Vec<usize> = if *shape == "_" {
                    Vec::new()
                } else {
                    shape
                        .split(',')
                        .map(str::parse)
                        .collect::<Result<_, _>>()
                        .map_err(|_| bad(format!("bad shape for {name}")))?
                };
                let count: usize = count.parse().map_err(|_| bad(format!("bad count for {name}")))?;
                let payload = cur
                    .take(count * 4)
                    .ok_or_else(|| bad(format!("payload of {name} truncated")))?;
                crc.update(payload);
                let values = payload
                    .chunks_exact(4)
                    .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                    .collect();
                let tensor = ParamTensor::new(*name, shape, values).map_err(|e| bad(e.to_string()))?;
                if *kind == "param" {
                    params.push(tensor);
                } else {
                    stats.push(tensor);
                }
            }
            ["checksum", "crc32", hex] => {
                let stored = u32::from_str_radix(hex, 16).map_err(|_| bad("bad checksum field".into()))?;
                let actual = crc.finalize();
                if stored != actual {
                    return Err(bad(format!("checksum mismatch: file {stored:08x}, payload {actual:08x}")));
                }
                if cur.pos != bytes.len() {
                    return Err(bad("trailing bytes after checksum".into()));
                }
                break;
            }
            _ => return Err(bad(format!("unrecognised record {line:?}"))),
        }
    }
    Ok(Checkpoint {
        descriptor,
        params: ParameterSnapshot::new(params).map_err(|e| bad(e.to_string()))?,
        stats,
    })
}

pub fn write_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let tmp = path.with_extension("snap.partial");
    fs::write(&tmp, encode_checkpoint(ckpt)).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn read_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&bytes, path)
}
