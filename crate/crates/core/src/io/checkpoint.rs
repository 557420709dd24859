use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::model::{Architecture, BnStore, FusionStrategy, MffcnParams, ParamStore};
use crate::tape::RunningStats;
use crate::tensor::Tensor;

use super::mten::{read_mten, write_mten};

const MAGIC: &[u8; 4] = b"MFFC";
const VERSION: u8 = 1;
const META_STRATEGY: &str = "meta.strategy";
const META_WIDTH: &str = "meta.width_divisor";
const RUNNING_MEAN: &str = ".running_mean";
const RUNNING_VAR: &str = ".running_var";

/// A trained (or initialized) network together with its architecture.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub arch: Architecture,
    pub params: MffcnParams<f32>,
}

fn bad(msg: impl Into<String>) -> Error {
    Error::Format(format!("checkpoint: {}", msg.into()))
}

fn write_record<W: Write>(w: &mut W, name: &str, t: &Tensor<f32>) -> Result<()> {
    let len = u16::try_from(name.len()).map_err(|_| bad(format!("name too long: {name}")))?;
    w.write_all(&len.to_le_bytes()).and_then(|_| w.write_all(name.as_bytes())).map_err(|e| bad(e.to_string()))?;
    write_mten(w, t)
}

/// Records are the two meta entries, every weight in layout order, then the
/// batch-norm running statistics as `<layer>.running_mean` / `.running_var`.
pub fn write_checkpoint<W: Write>(w: &mut W, ckpt: &Checkpoint) -> Result<()> {
    let p = &ckpt.params;
    let count = 2 + p.weights.len() + 2 * p.running.len();
    let count = u32::try_from(count).map_err(|_| bad("too many records"))?;
    w.write_all(MAGIC).map_err(|e| bad(e.to_string()))?;
    w.write_all(&[VERSION]).map_err(|e| bad(e.to_string()))?;
    w.write_all(&count.to_le_bytes()).map_err(|e| bad(e.to_string()))?;
    write_record(w, META_STRATEGY, &Tensor::scalar(ckpt.arch.strategy.index() as f32))?;
    write_record(w, META_WIDTH, &Tensor::scalar(ckpt.arch.width_divisor as f32))?;
    for (name, t) in p.weights.iter() {
        write_record(w, name, t)?;
    }
    for (name, s) in p.running.iter() {
        write_record(w, &format!("{name}{RUNNING_MEAN}"), &s.mean)?;
        write_record(w, &format!("{name}{RUNNING_VAR}"), &s.var)?;
    }
    Ok(())
}

fn meta(t: &Tensor<f32>, name: &str) -> Result<usize> {
    let v = t.data()[0];
    if t.len() != 1 || v < 0.0 || v.fract() != 0.0 {
        return Err(bad(format!("{name} is not a non-negative integer scalar")));
    }
    Ok(v as usize)
}

/// Reads a checkpoint and checks it against the layout of the architecture
/// it names.
pub fn read_checkpoint<R: Read>(r: &mut R) -> Result<Checkpoint> {
    let mut head = [0u8; 9];
    r.read_exact(&mut head).map_err(|e| bad(e.to_string()))?;
    if &head[..4] != MAGIC {
        return Err(bad("bad magic"));
    }
    if head[4] != VERSION {
        return Err(bad(format!("unsupported version {}", head[4])));
    }
    let count = u32::from_le_bytes([head[5], head[6], head[7], head[8]]) as usize;
    let mut records = indexmap::IndexMap::new();
    for _ in 0..count {
        let mut len = [0u8; 2];
        r.read_exact(&mut len).map_err(|e| bad(e.to_string()))?;
        let mut name = vec![0u8; u16::from_le_bytes(len) as usize];
        r.read_exact(&mut name).map_err(|e| bad(e.to_string()))?;
        let name = String::from_utf8(name).map_err(|_| bad("record name is not UTF-8"))?;
        let t = read_mten(r)?;
        if records.insert(name.clone(), t).is_some() {
            return Err(bad(format!("duplicate record {name}")));
        }
    }
    let take = |records: &mut indexmap::IndexMap<String, Tensor<f32>>, name: &str| {
        records.shift_remove(name).ok_or_else(|| bad(format!("missing record {name}")))
    };
    let strategy = meta(&take(&mut records, META_STRATEGY)?, META_STRATEGY)?;
    let strategy = FusionStrategy::from_index(strategy).ok_or_else(|| bad(format!("unknown strategy index {strategy}")))?;
    let width = meta(&take(&mut records, META_WIDTH)?, META_WIDTH)?;
    let arch = Architecture::new(strategy, width)?;

    let mut weights = ParamStore::new();
    for spec in arch.param_layout() {
        let t = take(&mut records, &spec.name)?;
        if t.dims() != spec.dims.as_slice() {
            return Err(bad(format!("{} has dims {:?}, expected {:?}", spec.name, t.dims(), spec.dims)));
        }
        weights.insert(spec.name, t.with_grad());
    }
    let mut running = BnStore::default();
    for (name, c) in arch.bn_layout() {
        let mean = take(&mut records, &format!("{name}{RUNNING_MEAN}"))?;
        let var = take(&mut records, &format!("{name}{RUNNING_VAR}"))?;
        if mean.dims() != [c] || var.dims() != [c] {
            return Err(bad(format!("{name} running statistics are not [{c}]")));
        }
        running.insert(name, RunningStats { mean, var });
    }
    if let Some(extra) = records.keys().next() {
        return Err(bad(format!("unexpected record {extra} for {strategy} / {width}")));
    }
    Ok(Checkpoint { arch, params: MffcnParams { weights, running } })
}

pub fn save_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<()> {
    let mut w = super::create(path)?;
    write_checkpoint(&mut w, ckpt)?;
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    read_checkpoint(&mut super::open(path)?)
}
