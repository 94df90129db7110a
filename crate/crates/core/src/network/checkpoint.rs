//! Versioned binary model checkpoints.
//!
//! Layout: magic `TSEG`, format version (u16 LE), architecture hash
//! (u64 LE, hash of the channel-plan string), then one record per tensor
//! until end of file. A record is: name length (u16 LE), UTF-8 name,
//! rank (u8), each dim (u32 LE), then the raw little-endian f32 data.
//! Records cover trainable parameters, batch-norm running statistics,
//! and a one-element `initialized` flag per batch-norm layer, so a
//! round trip restores the model bit for bit.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use thiserror::Error;

use super::layers::{BnParams, ConvParams};
use super::model::{DecoderBlock, EncoderBlock, ModelConfig, ModelParams};

pub const CHECKPOINT_MAGIC: [u8; 4] = *b"TSEG";
pub const CHECKPOINT_VERSION: u16 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("checkpoint i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error("bad magic: not a checkpoint file")]
    BadMagic,
    #[error("unsupported checkpoint version {0}")]
    UnsupportedVersion(u16),
    #[error("checkpoint truncated")]
    Truncated,
    #[error("architecture hash mismatch: stored {stored:#018x}, computed {computed:#018x}")]
    HashMismatch { stored: u64, computed: u64 },
    #[error("malformed checkpoint: {0}")]
    Malformed(String),
}

struct Record {
    name: String,
    dims: Vec<usize>,
    data: Vec<f32>,
}

fn conv_records(prefix: &str, name: &str, conv: &ConvParams<f32>, out: &mut Vec<Record>) {
    out.push(Record {
        name: format!("{prefix}.{name}.weight"),
        dims: vec![conv.c_out, conv.c_in, 3, 3],
        data: conv.weight.clone(),
    });
    out.push(Record {
        name: format!("{prefix}.{name}.bias"),
        dims: vec![conv.c_out],
        data: conv.bias.clone(),
    });
}

fn bn_records(prefix: &str, name: &str, bn: &BnParams<f32>, out: &mut Vec<Record>) {
    let c = bn.channels();
    for (field, data) in [
        ("gamma", &bn.gamma),
        ("beta", &bn.beta),
        ("running_mean", &bn.running_mean),
        ("running_var", &bn.running_var),
    ] {
        out.push(Record {
            name: format!("{prefix}.{name}.{field}"),
            dims: vec![c],
            data: data.clone(),
        });
    }
    out.push(Record {
        name: format!("{prefix}.{name}.initialized"),
        dims: vec![1],
        data: vec![if bn.initialized { 1.0 } else { 0.0 }],
    });
}

fn all_records(model: &ModelParams<f32>) -> Vec<Record> {
    let mut out = Vec::new();
    for (k, e) in model.encoders.iter().enumerate() {
        let p = format!("e{}", k + 1);
        conv_records(&p, "conv1", &e.conv1, &mut out);
        bn_records(&p, "bn1", &e.bn1, &mut out);
        conv_records(&p, "conv2", &e.conv2, &mut out);
        bn_records(&p, "bn2", &e.bn2, &mut out);
    }
    for (k, d) in model.decoders.iter().enumerate() {
        let p = format!("d{}", k + 1);
        conv_records(&p, "conv1", &d.conv1, &mut out);
        bn_records(&p, "bn1", &d.bn1, &mut out);
        conv_records(&p, "conv2", &d.conv2, &mut out);
        if let Some(bn2) = &d.bn2 {
            bn_records(&p, "bn2", bn2, &mut out);
        }
    }
    out
}

pub fn save_checkpoint(model: &ModelParams<f32>, path: impl AsRef<Path>) -> Result<(), CheckpointError> {
    let mut buf: Vec<u8> = Vec::new();
    buf.extend_from_slice(&CHECKPOINT_MAGIC);
    buf.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    buf.extend_from_slice(&model.arch_hash().to_le_bytes());
    for rec in all_records(model) {
        let name = rec.name.as_bytes();
        buf.extend_from_slice(&(name.len() as u16).to_le_bytes());
        buf.extend_from_slice(name);
        buf.push(rec.dims.len() as u8);
        for &d in &rec.dims {
            buf.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for &v in &rec.data {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    let mut file = fs::File::create(path)?;
    file.write_all(&buf)?;
    Ok(())
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], CheckpointError> {
        if self.pos + n > self.bytes.len() {
            return Err(CheckpointError::Truncated);
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u16(&mut self) -> Result<u16, CheckpointError> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32, CheckpointError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64, CheckpointError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn done(&self) -> bool {
        self.pos == self.bytes.len()
    }
}

type RecordMap = BTreeMap<String, (Vec<usize>, Vec<f32>)>;

fn take_record(records: &mut RecordMap, name: String, dims: &[usize]) -> Result<Vec<f32>, CheckpointError> {
    let (got_dims, data) = records
        .remove(&name)
        .ok_or_else(|| CheckpointError::Malformed(format!("missing record {name}")))?;
    if got_dims != dims {
        return Err(CheckpointError::Malformed(format!(
            "record {name} has dims {got_dims:?}, expected {dims:?}"
        )));
    }
    Ok(data)
}

fn load_conv(
    records: &mut RecordMap,
    prefix: &str,
    name: &str,
    c_in: usize,
    c_out: usize,
) -> Result<ConvParams<f32>, CheckpointError> {
    Ok(ConvParams {
        c_in,
        c_out,
        weight: take_record(records, format!("{prefix}.{name}.weight"), &[c_out, c_in, 3, 3])?,
        bias: take_record(records, format!("{prefix}.{name}.bias"), &[c_out])?,
    })
}

fn load_bn(records: &mut RecordMap, prefix: &str, name: &str, c: usize) -> Result<BnParams<f32>, CheckpointError> {
    Ok(BnParams {
        gamma: take_record(records, format!("{prefix}.{name}.gamma"), &[c])?,
        beta: take_record(records, format!("{prefix}.{name}.beta"), &[c])?,
        running_mean: take_record(records, format!("{prefix}.{name}.running_mean"), &[c])?,
        running_var: take_record(records, format!("{prefix}.{name}.running_var"), &[c])?,
        initialized: take_record(records, format!("{prefix}.{name}.initialized"), &[1])?[0] != 0.0,
    })
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<ModelParams<f32>, CheckpointError> {
    let bytes = fs::read(path)?;
    let mut r = Reader {
        bytes: &bytes,
        pos: 0,
    };
    if r.take(4)? != CHECKPOINT_MAGIC {
        return Err(CheckpointError::BadMagic);
    }
    let version = r.u16()?;
    if version != CHECKPOINT_VERSION {
        return Err(CheckpointError::UnsupportedVersion(version));
    }
    let stored_hash = r.u64()?;

    let mut records: RecordMap = BTreeMap::new();
    while !r.done() {
        let name_len = r.u16()? as usize;
        let name = String::from_utf8(r.take(name_len)?.to_vec())
            .map_err(|_| CheckpointError::Malformed("non-utf8 record name".into()))?;
        let rank = r.take(1)?[0] as usize;
        let mut dims = Vec::with_capacity(rank);
        for _ in 0..rank {
            dims.push(r.u32()? as usize);
        }
        let count: usize = dims.iter().product();
        let raw = r.take(count * 4)?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        if records.insert(name.clone(), (dims, data)).is_some() {
            return Err(CheckpointError::Malformed(format!("duplicate record {name}")));
        }
    }

    // Reconstruct the architecture from the record shapes.
    let e1 = records
        .get("e1.conv1.weight")
        .ok_or_else(|| CheckpointError::Malformed("missing e1.conv1.weight".into()))?;
    if e1.0.len() != 4 {
        return Err(CheckpointError::Malformed("e1.conv1.weight must be rank 4".into()));
    }
    let base_channels = e1.0[0];
    let in_channels = e1.0[1];
    let stages = (1..)
        .take_while(|k| records.contains_key(&format!("e{k}.conv1.weight")))
        .count();
    if stages < 2 {
        return Err(CheckpointError::Malformed("fewer than two encoder stages".into()));
    }
    let classes_rec = records
        .get(&format!("d{stages}.conv2.weight"))
        .ok_or_else(|| CheckpointError::Malformed("missing classifier conv".into()))?;
    let classes = classes_rec.0[0];
    let cfg = ModelConfig {
        base_channels,
        stages,
        in_channels,
        classes,
    };
    let computed = cfg.arch_hash();
    if computed != stored_hash {
        return Err(CheckpointError::HashMismatch {
            stored: stored_hash,
            computed,
        });
    }

    let mut encoders = Vec::with_capacity(stages);
    let mut in_c = in_channels;
    for k in 0..stages {
        let out_c = base_channels << k;
        let p = format!("e{}", k + 1);
        encoders.push(EncoderBlock {
            conv1: load_conv(&mut records, &p, "conv1", in_c, out_c)?,
            bn1: load_bn(&mut records, &p, "bn1", out_c)?,
            conv2: load_conv(&mut records, &p, "conv2", out_c, out_c)?,
            bn2: load_bn(&mut records, &p, "bn2", out_c)?,
            pooled: k + 1 < stages,
        });
        in_c = out_c;
    }
    let mut decoders = Vec::with_capacity(stages);
    for j in 0..stages {
        let last = j + 1 == stages;
        let p = format!("d{}", j + 1);
        let out_c = if last {
            base_channels
        } else {
            base_channels << (stages - 2 - j)
        };
        if last {
            decoders.push(DecoderBlock {
                unpool: true,
                conv1: load_conv(&mut records, &p, "conv1", in_c, out_c)?,
                bn1: load_bn(&mut records, &p, "bn1", out_c)?,
                conv2: load_conv(&mut records, &p, "conv2", out_c, classes)?,
                bn2: None,
            });
        } else {
            decoders.push(DecoderBlock {
                unpool: j > 0,
                conv1: load_conv(&mut records, &p, "conv1", in_c, out_c)?,
                bn1: load_bn(&mut records, &p, "bn1", out_c)?,
                conv2: load_conv(&mut records, &p, "conv2", out_c, out_c)?,
                bn2: Some(load_bn(&mut records, &p, "bn2", out_c)?),
            });
        }
        in_c = out_c;
    }

    if let Some(name) = records.keys().next() {
        return Err(CheckpointError::Malformed(format!(
            "unexpected extra record {name}"
        )));
    }

    Ok(ModelParams {
        cfg,
        encoders,
        decoders,
    })
}
