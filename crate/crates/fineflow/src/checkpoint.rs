//! `FLOWMAG1` checkpoint container.
//!
//! Layout (little-endian):
//! magic `FLOWMAG1`, `u32` version, `u32` length + JSON metadata,
//! `u32` parameter count then per parameter `u32` name length, name,
//! `u32` rank, `u64` dims, `f32` data; the same for buffers; finally a
//! `u8` optimizer flag followed, when set, by `u64` step count and the
//! first and second moments of every parameter as `f32`.

use std::io::{Cursor, Read};
use std::path::Path;

use byteorder::{LittleEndian as LE, ReadBytesExt, WriteBytesExt};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::external::PROJECT_GAIN;
use crate::model::{FlowModel, ModelConfig, EXTERNAL_INIT_STREAM, OUTPUT_BIAS_INIT};
use crate::nn::{ParamStore, Tensor};
use crate::train::{Adam, TrainConfig};

pub const MAGIC: &[u8; 8] = b"FLOWMAG1";
pub const VERSION: u32 = 1;

/// Initialization rules the weights were drawn with.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InitRecord {
    pub seed: u64,
    pub conv_dense: String,
    pub batch_norm: String,
    pub embedding: String,
    pub output_bias: f64,
}

impl InitRecord {
    pub fn new(seed: u64) -> Self {
        InitRecord {
            seed,
            conv_dense: format!(
                "normal(0, 1/fan_in), bias 0; ext.dense2 weights scaled by {PROJECT_GAIN}; \
                 external pathway drawn from stream {EXTERNAL_INIT_STREAM}"
            ),
            batch_norm: "gamma 1, beta 0, running mean 0, running var 1".into(),
            embedding: "uniform(-0.1, 0.1)".into(),
            output_bias: OUTPUT_BIAS_INIT,
        }
    }
}

/// JSON block stored ahead of the tensors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub model: ModelConfig,
    pub init: InitRecord,
    pub train: Option<TrainConfig>,
    /// Epoch the parameters come from, when saved by the trainer.
    pub epoch: Option<usize>,
}

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub meta: CheckpointMeta,
    pub model: FlowModel<f32>,
    pub adam: Option<Adam<f32>>,
}

fn bad(msg: impl Into<String>) -> Error {
    Error::Checkpoint(msg.into())
}

fn put_tensor(out: &mut Vec<u8>, name: &str, t: &Tensor<f32>) {
    out.write_u32::<LE>(name.len() as u32).unwrap();
    out.extend_from_slice(name.as_bytes());
    out.write_u32::<LE>(t.shape().len() as u32).unwrap();
    for d in t.shape() {
        out.write_u64::<LE>(*d as u64).unwrap();
    }
    put_f32s(out, t.data());
}

fn put_f32s(out: &mut Vec<u8>, vals: &[f32]) {
    out.reserve(vals.len() * 4);
    for v in vals {
        out.write_f32::<LE>(*v).unwrap();
    }
}

pub fn to_bytes(meta: &CheckpointMeta, model: &FlowModel<f32>, adam: Option<&Adam<f32>>) -> Result<Vec<u8>> {
    if meta.model != model.cfg {
        return Err(bad("metadata config differs from the model config"));
    }
    let json = serde_json::to_vec(meta).map_err(|e| bad(format!("encoding metadata: {e}")))?;
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.write_u32::<LE>(VERSION).unwrap();
    out.write_u32::<LE>(json.len() as u32).unwrap();
    out.extend_from_slice(&json);
    let store = &model.store;
    out.write_u32::<LE>(store.params().len() as u32).unwrap();
    for p in store.params() {
        put_tensor(&mut out, &p.name, &p.value);
    }
    out.write_u32::<LE>(store.buffers().len() as u32).unwrap();
    for b in store.buffers() {
        put_tensor(&mut out, &b.name, &b.value);
    }
    match adam {
        None => out.push(0),
        Some(a) => {
            if a.m.len() != store.params().len() || a.v.len() != store.params().len() {
                return Err(bad("optimizer state does not match the parameters"));
            }
            out.push(1);
            out.write_u64::<LE>(a.t).unwrap();
            for (m, p) in a.m.iter().zip(store.params()) {
                if m.len() != p.value.len() {
                    return Err(bad(format!("optimizer state for {} has the wrong size", p.name)));
                }
                put_f32s(&mut out, m);
            }
            for v in &a.v {
                put_f32s(&mut out, v);
            }
        }
    }
    Ok(out)
}

struct Reader<'a> {
    cur: Cursor<&'a [u8]>,
}

impl Reader<'_> {
    fn remaining(&self) -> usize {
        self.cur.get_ref().len() - self.cur.position() as usize
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        self.cur.read_u32::<LE>().map_err(|_| bad(format!("truncated while reading {what}")))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        self.cur.read_u64::<LE>().map_err(|_| bad(format!("truncated while reading {what}")))
    }

    fn bytes(&mut self, n: usize, what: &str) -> Result<Vec<u8>> {
        if n > self.remaining() {
            return Err(bad(format!("truncated while reading {what}")));
        }
        let mut buf = vec![0; n];
        self.cur.read_exact(&mut buf).expect("length checked");
        Ok(buf)
    }

    fn f32s(&mut self, n: usize, what: &str) -> Result<Vec<f32>> {
        if n.checked_mul(4).is_none_or(|b| b > self.remaining()) {
            return Err(bad(format!("truncated while reading {what}")));
        }
        let mut vals = vec![0.0; n];
        self.cur.read_f32_into::<LE>(&mut vals).expect("length checked");
        Ok(vals)
    }

    fn tensor(&mut self) -> Result<(String, Tensor<f32>)> {
        let len = self.u32("tensor name")? as usize;
        let name = String::from_utf8(self.bytes(len, "tensor name")?).map_err(|_| bad("tensor name is not UTF-8"))?;
        let rank = self.u32(&name)? as usize;
        if rank > 8 {
            return Err(bad(format!("{name}: rank {rank} is too large")));
        }
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(usize::try_from(self.u64(&name)?).map_err(|_| bad(format!("{name}: dimension overflow")))?);
        }
        let n = shape
            .iter()
            .try_fold(1usize, |a, d| a.checked_mul(*d))
            .ok_or_else(|| bad(format!("{name}: element count overflows")))?;
        let data = self.f32s(n, &name)?;
        Ok((name, Tensor::new(shape, data)?))
    }
}

pub fn from_bytes(bytes: &[u8]) -> Result<Checkpoint> {
    if bytes.len() < 8 || &bytes[..8] != MAGIC {
        return Err(bad("missing FLOWMAG1 magic"));
    }
    let mut r = Reader {
        cur: Cursor::new(bytes),
    };
    r.cur.set_position(8);
    let version = r.u32("version")?;
    if version != VERSION {
        return Err(bad(format!("unsupported version {version}")));
    }
    let len = r.u32("metadata length")? as usize;
    let meta: CheckpointMeta =
        serde_json::from_slice(&r.bytes(len, "metadata")?).map_err(|e| bad(format!("metadata: {e}")))?;
    let mut store = ParamStore::new();
    for _ in 0..r.u32("parameter count")? {
        let (name, t) = r.tensor()?;
        store.add_param(name, t)?;
    }
    for _ in 0..r.u32("buffer count")? {
        let (name, t) = r.tensor()?;
        store.add_buffer(name, t)?;
    }
    let flag = r.cur.read_u8().map_err(|_| bad("truncated before optimizer flag"))?;
    let adam = match flag {
        0 => None,
        1 => {
            let t = r.u64("optimizer step")?;
            let sizes: Vec<usize> = store.params().iter().map(|p| p.value.len()).collect();
            let m = sizes.iter().map(|n| r.f32s(*n, "first moment")).collect::<Result<Vec<_>>>()?;
            let v = sizes.iter().map(|n| r.f32s(*n, "second moment")).collect::<Result<Vec<_>>>()?;
            let cfg = meta.train.as_ref().map(|c| c.adam).unwrap_or_default();
            Some(Adam { cfg, t, m, v })
        }
        f => return Err(bad(format!("bad optimizer flag {f}"))),
    };
    if r.remaining() != 0 {
        return Err(bad(format!("{} trailing bytes", r.remaining())));
    }
    let model = FlowModel::with_store(meta.model.clone(), store)?;
    Ok(Checkpoint { meta, model, adam })
}

pub fn save_checkpoint(
    path: &Path,
    meta: &CheckpointMeta,
    model: &FlowModel<f32>,
    adam: Option<&Adam<f32>>,
) -> Result<()> {
    let bytes = to_bytes(meta, model, adam)?;
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    from_bytes(&bytes).map_err(|e| match e {
        Error::Checkpoint(m) => Error::Checkpoint(format!("{}: {m}", path.display())),
        other => other,
    })
}
