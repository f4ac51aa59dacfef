//! `SSMP` parameter files.
//!
//! Layout: magic `SSMP`, version 1, then records of name length (u16),
//! UTF-8 name, rank (u8), extents (u32 each), values (f64, row-major), all
//! little-endian, until end of file. Hyperparameters travel as rank-0
//! records named `config.*` ahead of the tensors.

use std::fs;
use std::path::Path;

use super::ModelParams;
use crate::binio::{put_f64, put_u16, put_u32, Reader};
use crate::config::{Aggregator, ModelConfig};
use crate::cts::Pooling;
use crate::error::{ensure, Error, Result};
use crate::scalar::Scalar;
use crate::ssm::{Discretization, SsmMode};

fn config_records<T>(p: &ModelParams<T>) -> Vec<(&'static str, f64)> {
    let c = &p.config;
    let b = |v: bool| if v { 1.0 } else { 0.0 };
    vec![
        ("d_in", p.d_in as f64),
        ("classes", p.classes as f64),
        ("d_model", c.d_model as f64),
        ("state_dim", c.state_dim as f64),
        ("n_blocks", c.n_blocks as f64),
        ("heads", match c.ssm_mode {
            SsmMode::Diag => 0.0,
            SsmMode::Scalar { heads } => heads as f64,
        }),
        ("discretization", match c.discretization {
            Discretization::Zoh => 0.0,
            Discretization::Euler => 1.0,
        }),
        ("aggregator", c.aggregator.code() as f64),
        ("attn_dim", c.attn_dim as f64),
        ("overlap", b(c.overlap)),
        ("cts", b(c.cts)),
        ("cts_ratio", c.cts_ratio),
        ("local_channels", c.local_channels as f64),
        ("aux_pooling", match c.aux_pooling {
            Pooling::Mean => 0.0,
            Pooling::Max => 1.0,
        }),
        ("aux_weight", c.aux_weight),
        ("s2pe", b(c.s2pe)),
        ("s2pe_kernel", c.s2pe_kernel as f64),
        ("s2pe_dilation", c.s2pe_dilation as f64),
        ("s2pe_residual", b(c.s2pe_residual)),
        ("learning_rate", c.learning_rate),
        ("weight_decay", c.weight_decay),
        ("epochs", c.epochs as f64),
        ("seed_hi", (c.seed >> 32) as f64),
        ("seed_lo", (c.seed & 0xffff_ffff) as f64),
    ]
}

fn put_record(out: &mut Vec<u8>, name: &str, shape: &[usize], values: impl Iterator<Item = f64>) -> Result<()> {
    ensure!(name.len() <= u16::MAX as usize, "parameter name too long");
    ensure!(shape.len() <= u8::MAX as usize, "parameter rank too large");
    put_u16(out, name.len() as u16);
    out.extend_from_slice(name.as_bytes());
    out.push(shape.len() as u8);
    for &e in shape {
        ensure!(e <= u32::MAX as usize, "extent {e} exceeds u32");
        put_u32(out, e as u32);
    }
    for v in values {
        put_f64(out, v);
    }
    Ok(())
}

pub fn encode_checkpoint<T: Scalar>(params: &ModelParams<T>) -> Result<Vec<u8>> {
    let mut out = b"SSMP\x01".to_vec();
    for (name, v) in config_records(params) {
        put_record(&mut out, &format!("config.{name}"), &[], std::iter::once(v))?;
    }
    for (name, t) in params.named() {
        put_record(&mut out, &name, t.shape(), t.data().iter().map(|v| v.as_f64()))?;
    }
    Ok(out)
}

struct Record {
    name: String,
    offset: usize,
    shape: Vec<usize>,
    values: Vec<f64>,
}

fn read_records(bytes: &[u8]) -> Result<Vec<Record>> {
    let mut r = Reader::new(bytes);
    r.magic(b"SSMP", 1)?;
    let mut out = Vec::new();
    while !r.at_end() {
        let offset = r.offset();
        let len = r.u16("name length")? as usize;
        let name = std::str::from_utf8(r.bytes(len, "name")?)
            .map_err(|_| Error::parse(offset + 2, "parameter name is not UTF-8"))?
            .to_string();
        let rank = r.u8("rank")? as usize;
        let shape = (0..rank).map(|_| r.u32("extent").map(|e| e as usize)).collect::<Result<Vec<_>>>()?;
        let numel = shape.iter().try_fold(1usize, |a, &e| a.checked_mul(e));
        let numel = numel.filter(|&n| n <= bytes.len() / 8).ok_or_else(|| Error::parse(offset, format!("`{name}` extents {shape:?} too large")))?;
        let values = (0..numel).map(|_| r.f64("values")).collect::<Result<Vec<_>>>()?;
        out.push(Record { name, offset, shape, values });
    }
    Ok(out)
}

fn config_from(records: &[Record]) -> Result<(ModelConfig, usize, usize)> {
    let get = |key: &str| -> Result<f64> {
        let name = format!("config.{key}");
        let rec = records.iter().find(|r| r.name == name).ok_or_else(|| Error::Config(format!("checkpoint lacks `{name}`")))?;
        if !rec.shape.is_empty() {
            return Err(Error::parse(rec.offset, format!("`{name}` must be rank 0")));
        }
        Ok(rec.values[0])
    };
    let int = |key: &str| -> Result<usize> {
        let v = get(key)?;
        if v < 0.0 || v.fract() != 0.0 || v > u32::MAX as f64 {
            return Err(Error::Config(format!("checkpoint `config.{key}` = {v} is not a count")));
        }
        Ok(v as usize)
    };
    let flag = |key: &str| -> Result<bool> {
        match int(key)? {
            0 => Ok(false),
            1 => Ok(true),
            v => Err(Error::Config(format!("checkpoint `config.{key}` = {v} is not a flag"))),
        }
    };
    let heads = int("heads")?;
    let cfg = ModelConfig {
        d_model: int("d_model")?,
        state_dim: int("state_dim")?,
        n_blocks: int("n_blocks")?,
        ssm_mode: if heads == 0 { SsmMode::Diag } else { SsmMode::Scalar { heads } },
        discretization: if flag("discretization")? { Discretization::Euler } else { Discretization::Zoh },
        aggregator: Aggregator::from_code(int("aggregator")?.min(255) as u8)
            .ok_or_else(|| Error::Config("checkpoint has an unknown aggregator code".into()))?,
        attn_dim: int("attn_dim")?,
        overlap: flag("overlap")?,
        cts: flag("cts")?,
        cts_ratio: get("cts_ratio")?,
        local_channels: int("local_channels")?,
        aux_pooling: if flag("aux_pooling")? { Pooling::Max } else { Pooling::Mean },
        aux_weight: get("aux_weight")?,
        s2pe: flag("s2pe")?,
        s2pe_kernel: int("s2pe_kernel")?,
        s2pe_dilation: int("s2pe_dilation")?,
        s2pe_residual: flag("s2pe_residual")?,
        learning_rate: get("learning_rate")?,
        weight_decay: get("weight_decay")?,
        epochs: int("epochs")?,
        seed: ((int("seed_hi")? as u64) << 32) | int("seed_lo")? as u64,
    };
    cfg.validate().map_err(|e| Error::Config(format!("checkpoint config: {e}")))?;
    Ok((cfg, int("d_in")?, int("classes")?))
}

pub fn decode_checkpoint<T: Scalar>(bytes: &[u8]) -> Result<ModelParams<T>> {
    let records = read_records(bytes)?;
    let (config, d_in, classes) = config_from(&records)?;
    let mut params = ModelParams::<T>::init(&config, d_in, classes)?;
    let names: Vec<String> = params.named().into_iter().map(|(n, _)| n).collect();
    let tensors: Vec<&Record> = records.iter().filter(|r| !r.name.starts_with("config.")).collect();
    if tensors.len() != names.len() {
        return Err(Error::Config(format!("checkpoint holds {} tensors, model needs {}", tensors.len(), names.len())));
    }
    for ((slot, name), rec) in params.tensors_mut().into_iter().zip(&names).zip(tensors) {
        if &rec.name != name {
            return Err(Error::parse(rec.offset, format!("expected tensor `{name}`, found `{}`", rec.name)));
        }
        if rec.shape != slot.shape() {
            return Err(Error::parse(rec.offset, format!("`{name}` has shape {:?}, model needs {:?}", rec.shape, slot.shape())));
        }
        for (d, &v) in slot.data_mut().iter_mut().zip(&rec.values) {
            *d = T::lit(v);
        }
    }
    Ok(params)
}

pub fn save_checkpoint<T: Scalar>(params: &ModelParams<T>, path: &Path) -> Result<()> {
    fs::write(path, encode_checkpoint(params)?)?;
    Ok(())
}

pub fn load_checkpoint<T: Scalar>(path: &Path) -> Result<ModelParams<T>> {
    decode_checkpoint(&fs::read(path)?)
}
