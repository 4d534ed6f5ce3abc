//! Binary checkpoint: model parameters, optimizer moments and the training
//! position.
//!
//! Layout (little-endian): magic `STPC`, `u32` version, `u32` length plus the
//! UTF-8 config text, `u64` iteration, `u64` optimizer step, `u32` frame
//! channels, `u32` record count, then records of `u32` name length, name,
//! `u32` rank, `u32` dims and the `f32` payload. Optimizer moments are
//! records named `adam.m.<param>` and `adam.v.<param>`.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use stp_core::autodiff::{AdamConfig, AdamState};
use stp_core::decoupling::strip_training_params;
use stp_core::network::{init_model, Model};
use stp_core::{Error, Result, Rng, Tensor};

use crate::config::TrainConfig;

const MAGIC: &[u8; 4] = b"STPC";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub config: TrainConfig,
    pub model: Model,
    pub adam: AdamState,
    /// Completed training iterations.
    pub iteration: u64,
}

pub fn adam_config(cfg: &TrainConfig) -> AdamConfig {
    AdamConfig {
        lr: cfg.lr,
        ..AdamConfig::default()
    }
}

fn put_u32(out: &mut Vec<u8>, v: usize) -> Result<()> {
    let v = u32::try_from(v).map_err(|_| Error::Format(format!("{v} does not fit in u32")))?;
    out.extend_from_slice(&v.to_le_bytes());
    Ok(())
}

fn put_record(out: &mut Vec<u8>, name: &str, t: &Tensor) -> Result<()> {
    put_u32(out, name.len())?;
    out.extend_from_slice(name.as_bytes());
    put_u32(out, t.dims().len())?;
    for &d in t.dims() {
        put_u32(out, d)?;
    }
    for v in t.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    Ok(())
}

pub fn encode(ck: &Checkpoint) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    let text = ck.config.to_text();
    put_u32(&mut out, text.len())?;
    out.extend_from_slice(text.as_bytes());
    out.extend_from_slice(&ck.iteration.to_le_bytes());
    out.extend_from_slice(&ck.adam.step.to_le_bytes());
    put_u32(&mut out, ck.model.cfg.channels)?;

    let mut records: Vec<(String, &Tensor)> = Vec::new();
    for (id, p) in ck.model.store.iter() {
        records.push((p.name.clone(), &p.value));
        if let Some((m, v)) = ck.adam.moments(id) {
            records.push((format!("adam.m.{}", p.name), m));
            records.push((format!("adam.v.{}", p.name), v));
        }
    }
    put_u32(&mut out, records.len())?;
    for (name, t) in records {
        put_record(&mut out, &name, t)?;
    }
    Ok(out)
}

pub fn save_checkpoint(path: &Path, ck: &Checkpoint) -> Result<()> {
    let bytes = encode(ck)?;
    let mut f = BufWriter::new(fs::File::create(path)?);
    f.write_all(&bytes)?;
    f.flush()?;
    Ok(())
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::Format("checkpoint is truncated".into()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<usize> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")) as usize)
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn string(&mut self) -> Result<String> {
        let n = self.u32()?;
        String::from_utf8(self.take(n)?.to_vec())
            .map_err(|_| Error::Format("checkpoint string is not UTF-8".into()))
    }

    fn tensor(&mut self) -> Result<Tensor> {
        let rank = self.u32()?;
        if rank > 8 {
            return Err(Error::Format(format!("implausible tensor rank {rank}")));
        }
        let dims = (0..rank).map(|_| self.u32()).collect::<Result<Vec<_>>>()?;
        let numel = dims
            .iter()
            .try_fold(1usize, |a, &d| a.checked_mul(d))
            .ok_or_else(|| Error::Format("tensor size overflows".into()))?;
        let raw = self.take(numel.checked_mul(4).ok_or_else(|| Error::Format("tensor size overflows".into()))?)?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        Tensor::from_vec(&dims, data).map_err(|e| Error::Format(e.to_string()))
    }
}

pub fn decode(bytes: &[u8]) -> Result<Checkpoint> {
    if bytes.len() < 8 || &bytes[..4] != MAGIC {
        return Err(Error::Format("not a checkpoint file (bad magic)".into()));
    }
    let mut r = Reader { bytes, pos: 4 };
    let version = r.u32()?;
    if version != VERSION as usize {
        return Err(Error::Format(format!(
            "unsupported checkpoint version {version} (expected {VERSION})"
        )));
    }
    let config = TrainConfig::from_text(&r.string()?)?;
    let iteration = r.u64()?;
    let adam_step = r.u64()?;
    let frame_channels = r.u32()?;
    let net = config.network(frame_channels);
    let mut model: Model = init_model(&net, &mut Rng::new(0))?;

    let count = r.u32()?;
    let mut params = std::collections::HashMap::new();
    for _ in 0..count {
        let name = r.string()?;
        let t = r.tensor()?;
        if params.insert(name.clone(), t).is_some() {
            return Err(Error::Format(format!("duplicate record '{name}'")));
        }
    }
    if r.pos != bytes.len() {
        return Err(Error::Format("trailing bytes after the last record".into()));
    }
    if model.decouple.is_some() && !params.contains_key(stp_core::decoupling::DECOUPLE_PARAM) {
        model = strip_training_params(model);
    }

    let mut adam = AdamState::new(adam_config(&config), &model.store);
    adam.step = adam_step;
    let mut used = 0;
    let ids = model.store.ids();
    for id in ids {
        let name = model.store.get(id)?.name.clone();
        let mut fetch = |key: &str, like: &Tensor| -> Result<Option<Tensor>> {
            match params.get(key) {
                Some(t) if t.dims() == like.dims() => {
                    used += 1;
                    Ok(Some(t.clone()))
                }
                Some(t) => Err(Error::Format(format!(
                    "record '{key}' has shape {:?}, model expects {:?}",
                    t.dims(),
                    like.dims()
                ))),
                None => Ok(None),
            }
        };
        let like = model.store.value(id)?.clone();
        let value = fetch(&name, &like)?
            .ok_or_else(|| Error::Format(format!("missing parameter '{name}'")))?;
        let m = fetch(&format!("adam.m.{name}"), &like)?;
        let v = fetch(&format!("adam.v.{name}"), &like)?;
        model.store.get_mut(id)?.value = value;
        match (m, v) {
            (Some(m), Some(v)) => adam.moments[id.index()] = Some((m, v)),
            (None, None) => {}
            _ => return Err(Error::Format(format!("incomplete optimizer state for '{name}'"))),
        }
    }
    if used != params.len() {
        return Err(Error::Format("checkpoint holds records the model does not use".into()));
    }
    Ok(Checkpoint {
        config,
        model,
        adam,
        iteration,
    })
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = fs::read(path).map_err(|e| Error::Io(format!("{}: {e}", path.display())))?;
    decode(&bytes)
}
