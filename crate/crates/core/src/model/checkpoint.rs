//! Binary checkpoints and wire payloads.
//!
//! Checkpoint layout (little-endian):
//!
//! ```text
//! "FTCK" | u32 version | u32 header_len | header JSON (config + phase)
//! u32 entry_count
//! per entry: u8 kind (0 dense, 1 quantized) | u8 trainable | u64 numel
//!   dense:     numel × f32
//!   quantized: u32 block | numel × i8 codes | ceil(numel/block) × f32 scales
//! ```
//!
//! A wire payload is the trainable parameters only, as raw f32 in declared
//! order; its length is exactly `4 × trainable count`.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::config::ModelConfig;
use crate::model::params::{ForecastModel, ParamEntry, ParamValue, Phase};
use crate::model::quant::QuantizedTensor;
use crate::numerics::Tensor;

pub const MAGIC: &[u8; 4] = b"FTCK";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Header {
    format_version: u32,
    phase: Phase,
    config: ModelConfig,
}

fn put_f32s(out: &mut Vec<u8>, data: &[f64]) {
    for &v in data {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
}

pub fn to_bytes(model: &ForecastModel) -> Result<Vec<u8>> {
    let header = serde_json::to_vec(&Header {
        format_version: FORMAT_VERSION,
        phase: model.phase(),
        config: model.config().clone(),
    })?;
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(header.len() as u32).to_le_bytes());
    out.extend_from_slice(&header);
    out.extend_from_slice(&(model.entries().len() as u32).to_le_bytes());
    for e in model.entries() {
        match &e.value {
            ParamValue::Dense(t) => {
                out.push(0);
                out.push(u8::from(e.trainable));
                out.extend_from_slice(&(t.len() as u64).to_le_bytes());
                put_f32s(&mut out, t.data());
            }
            ParamValue::Quantized { q, .. } => {
                out.push(1);
                out.push(u8::from(e.trainable));
                out.extend_from_slice(&(q.len() as u64).to_le_bytes());
                out.extend_from_slice(&(q.block_size() as u32).to_le_bytes());
                out.extend(q.codes().iter().map(|&c| c as u8));
                for s in q.scales() {
                    out.extend_from_slice(&s.to_le_bytes());
                }
            }
        }
    }
    Ok(out)
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
            .ok_or_else(|| Error::Checkpoint(format!("truncated at byte {}", self.pos)))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn f32s(&mut self, n: usize) -> Result<Vec<f32>> {
        let len = n.checked_mul(4).ok_or_else(|| Error::Checkpoint("length overflow".into()))?;
        Ok(self
            .take(len)?
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect())
    }
}

pub fn from_bytes(bytes: &[u8]) -> Result<ForecastModel> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4)? != MAGIC {
        return Err(Error::Checkpoint("not a checkpoint (bad magic)".into()));
    }
    let version = r.u32()?;
    if version != FORMAT_VERSION {
        return Err(Error::Checkpoint(format!("unsupported format version {version}")));
    }
    let header_len = r.u32()? as usize;
    let header: Header = serde_json::from_slice(r.take(header_len)?)
        .map_err(|e| Error::Checkpoint(format!("bad header: {e}")))?;
    let count = r.u32()? as usize;
    let template = ForecastModel::new(header.config.clone(), 0)?;
    let mut shapes: Vec<Vec<usize>> = template.entries().iter().map(|e| e.value.shape().to_vec()).collect();
    if header.phase == Phase::Peft {
        let peft = template.into_peft(0)?;
        shapes = peft.entries().iter().map(|e| e.value.shape().to_vec()).collect();
    }
    if count != shapes.len() {
        return Err(Error::Checkpoint(format!("expected {} parameters, found {count}", shapes.len())));
    }
    let mut entries = Vec::with_capacity(count);
    for shape in shapes {
        let kind = r.u8()?;
        let trainable = match r.u8()? {
            0 => false,
            1 => true,
            other => return Err(Error::Checkpoint(format!("bad trainable flag {other}"))),
        };
        let numel = r.u64()? as usize;
        if numel != shape.iter().product::<usize>() {
            return Err(Error::Checkpoint(format!("parameter of shape {shape:?} stored with {numel} values")));
        }
        let value = match kind {
            0 => {
                let data = r.f32s(numel)?.into_iter().map(f64::from).collect();
                ParamValue::Dense(Tensor::new(shape, data).map_err(|e| Error::Checkpoint(e.to_string()))?)
            }
            1 => {
                let block = r.u32()? as usize;
                if block == 0 {
                    return Err(Error::Checkpoint("zero quantization block".into()));
                }
                let codes = r.take(numel)?.iter().map(|&b| b as i8).collect();
                let scales = r.f32s(numel.div_ceil(block))?;
                let q = QuantizedTensor::from_parts(shape, block, codes, scales)?;
                let dense = q.dequantize();
                ParamValue::Quantized { q, dense }
            }
            other => return Err(Error::Checkpoint(format!("unknown entry kind {other}"))),
        };
        entries.push(ParamEntry {
            name: String::new(),
            value,
            trainable,
        });
    }
    if r.pos != bytes.len() {
        return Err(Error::Checkpoint(format!("{} trailing bytes", bytes.len() - r.pos)));
    }
    ForecastModel::from_parts(header.config, header.phase, entries)
}

pub fn save(model: &ForecastModel, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, to_bytes(model)?).map_err(|e| Error::io(path, e))
}

pub fn load(path: impl AsRef<Path>) -> Result<ForecastModel> {
    let path = path.as_ref();
    from_bytes(&std::fs::read(path).map_err(|e| Error::io(path, e))?)
}

/// Raw f32 encoding of a parameter list (the wire format).
pub fn encode_payload(params: &[Tensor]) -> Vec<u8> {
    let mut out = Vec::with_capacity(4 * params.iter().map(Tensor::len).sum::<usize>());
    for p in params {
        put_f32s(&mut out, p.data());
    }
    out
}

/// Inverse of [`encode_payload`] given the expected shapes.
pub fn decode_payload(bytes: &[u8], shapes: &[Vec<usize>]) -> Result<Vec<Tensor>> {
    let total: usize = shapes.iter().map(|s| s.iter().product::<usize>()).sum();
    if bytes.len() != 4 * total {
        return Err(Error::Checkpoint(format!(
            "payload of {} bytes, expected {}",
            bytes.len(),
            4 * total
        )));
    }
    let mut r = Reader { bytes, pos: 0 };
    shapes
        .iter()
        .map(|s| {
            let data = r.f32s(s.iter().product())?.into_iter().map(f64::from).collect();
            Tensor::new(s.clone(), data)
        })
        .collect()
}

/// Wire payload of the trainable parameters.
pub fn trainable_payload(model: &ForecastModel) -> Vec<u8> {
    encode_payload(&model.trainable_params())
}

/// Wire payload of every parameter at full precision, used for the
/// full-model transmission mode.
pub fn full_payload(model: &ForecastModel) -> Vec<u8> {
    let all: Vec<Tensor> = model.entries().iter().map(|e| e.value.dense().clone()).collect();
    encode_payload(&all)
}
