//! Checkpoint serialization: magic `VMUN`, version, embedded config text,
//! a name-sorted tensor table with f32 little-endian payloads, optional
//! optimizer state, and a trailing CRC-32.
//!
//! Tensor order and header bytes are canonical, so `save(load(f)) == f`
//! byte-for-byte and corruption anywhere in the file fails the load.

use std::collections::BTreeMap;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::TensorBase;
use crate::Tensor;

pub const MAGIC: &[u8; 4] = b"VMUN";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState {
    pub step: u64,
    pub epoch: u32,
    pub m: BTreeMap<String, Tensor>,
    pub v: BTreeMap<String, Tensor>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config_text: String,
    pub tensors: BTreeMap<String, Tensor>,
    pub optimizer: Option<OptimizerState>,
}

pub fn crc32(bytes: &[u8]) -> u32 {
    let mut crc = 0xFFFF_FFFFu32;
    for &b in bytes {
        crc ^= b as u32;
        for _ in 0..8 {
            let mask = (crc & 1).wrapping_neg();
            crc = (crc >> 1) ^ (0xEDB8_8320 & mask);
        }
    }
    !crc
}

fn write_table(out: &mut Vec<u8>, table: &BTreeMap<String, Tensor>) -> Result<()> {
    out.extend((table.len() as u32).to_le_bytes());
    for (name, tensor) in table {
        if name.len() > u16::MAX as usize {
            return Err(Error::Format(format!("tensor name too long: {name}")));
        }
        out.extend((name.len() as u16).to_le_bytes());
        out.extend(name.as_bytes());
        out.push(tensor.shape().len() as u8);
        for &dim in tensor.shape() {
            out.extend((dim as u32).to_le_bytes());
        }
        let f32s: TensorBase<f32> = tensor.cast();
        for &v in f32s.data() {
            out.extend(v.to_le_bytes());
        }
    }
    Ok(())
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::Format(format!(
                "truncated checkpoint: wanted {n} bytes at offset {}",
                self.pos
            )));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

fn read_table(r: &mut Reader) -> Result<BTreeMap<String, Tensor>> {
    let count = r.u32()? as usize;
    let mut table = BTreeMap::new();
    let mut prev: Option<String> = None;
    for _ in 0..count {
        let name_len = r.u16()? as usize;
        let name = String::from_utf8(r.take(name_len)?.to_vec())
            .map_err(|_| Error::Format("tensor name is not UTF-8".into()))?;
        if let Some(p) = &prev {
            if *p >= name {
                return Err(Error::Format(format!(
                    "tensor table not sorted: `{p}` before `{name}`"
                )));
            }
        }
        let ndim = r.u8()? as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(r.u32()? as usize);
        }
        let numel: usize = shape.iter().product();
        let payload = r.take(numel * 4)?;
        let data: Vec<f64> = payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
            .collect();
        table.insert(name.clone(), Tensor::new(shape, data)?);
        prev = Some(name);
    }
    Ok(table)
}

pub fn encode(ckpt: &Checkpoint) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend(MAGIC);
    out.extend(VERSION.to_le_bytes());
    out.extend((ckpt.config_text.len() as u32).to_le_bytes());
    out.extend(ckpt.config_text.as_bytes());
    write_table(&mut out, &ckpt.tensors)?;
    match &ckpt.optimizer {
        None => out.push(0),
        Some(opt) => {
            out.push(1);
            out.extend(opt.step.to_le_bytes());
            out.extend(opt.epoch.to_le_bytes());
            write_table(&mut out, &opt.m)?;
            write_table(&mut out, &opt.v)?;
        }
    }
    let crc = crc32(&out);
    out.extend(crc.to_le_bytes());
    Ok(out)
}

pub fn decode(bytes: &[u8]) -> Result<Checkpoint> {
    if bytes.len() < 4 + 4 + 4 {
        return Err(Error::Format("checkpoint too short".into()));
    }
    let (body, crc_bytes) = bytes.split_at(bytes.len() - 4);
    let stored = u32::from_le_bytes(crc_bytes.try_into().unwrap());
    let actual = crc32(body);
    if stored != actual {
        return Err(Error::Format(format!(
            "checksum mismatch: stored {stored:#010x}, computed {actual:#010x}"
        )));
    }
    let mut r = Reader { bytes: body, pos: 0 };
    if r.take(4)? != MAGIC {
        return Err(Error::Format("bad checkpoint magic".into()));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::Format(format!(
            "unsupported checkpoint version {version} (expected {VERSION})"
        )));
    }
    let config_len = r.u32()? as usize;
    let config_text = String::from_utf8(r.take(config_len)?.to_vec())
        .map_err(|_| Error::Format("config text is not UTF-8".into()))?;
    let tensors = read_table(&mut r)?;
    let optimizer = match r.u8()? {
        0 => None,
        1 => {
            let step = r.u64()?;
            let epoch = r.u32()?;
            let m = read_table(&mut r)?;
            let v = read_table(&mut r)?;
            Some(OptimizerState { step, epoch, m, v })
        }
        other => return Err(Error::Format(format!("bad optimizer flag {other}"))),
    };
    if r.pos != body.len() {
        return Err(Error::Format(format!(
            "trailing garbage: {} bytes",
            body.len() - r.pos
        )));
    }
    Ok(Checkpoint { config_text, tensors, optimizer })
}

pub fn save_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<()> {
    std::fs::write(path, encode(ckpt)?)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    decode(&std::fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;

    fn sample_checkpoint() -> Checkpoint {
        let mut rng = Rng::seed_from(7);
        let mut tensors = BTreeMap::new();
        tensors.insert("b.weight".into(), Tensor::uniform(vec![3, 2], -1.0, 1.0, &mut rng));
        tensors.insert("a.bias".into(), Tensor::uniform(vec![4], -1.0, 1.0, &mut rng));
        Checkpoint {
            config_text: "base_channels = 8\n".into(),
            tensors,
            optimizer: None,
        }
    }

    #[test]
    fn save_load_save_is_byte_identical() {
        let ckpt = sample_checkpoint();
        let bytes = encode(&ckpt).unwrap();
        let loaded = decode(&bytes).unwrap();
        let again = encode(&loaded).unwrap();
        assert_eq!(bytes, again);
    }

    #[test]
    fn values_roundtrip_at_f32_precision() {
        let mut tensors = BTreeMap::new();
        tensors.insert("x".into(), Tensor::scalar(1.0 / 3.0));
        let ckpt = Checkpoint { config_text: String::new(), tensors, optimizer: None };
        let loaded = decode(&encode(&ckpt).unwrap()).unwrap();
        assert_eq!(loaded.tensors["x"].item(), (1.0f32 / 3.0f32) as f64);
    }

    #[test]
    fn corrupting_any_byte_fails_load() {
        let bytes = encode(&sample_checkpoint()).unwrap();
        // Flip one bit mid-payload and one in the header.
        for &pos in &[6usize, bytes.len() / 2, bytes.len() - 6] {
            let mut bad = bytes.clone();
            bad[pos] ^= 0x40;
            assert!(decode(&bad).is_err(), "corruption at {pos} went unnoticed");
        }
    }

    #[test]
    fn truncation_fails_load() {
        let bytes = encode(&sample_checkpoint()).unwrap();
        assert!(decode(&bytes[..bytes.len() - 9]).is_err());
    }

    #[test]
    fn unknown_version_is_rejected() {
        let mut bytes = encode(&sample_checkpoint()).unwrap();
        bytes[4] = 99; // version field follows the magic
        let fixed = crc32(&bytes[..bytes.len() - 4]).to_le_bytes();
        let n = bytes.len();
        bytes[n - 4..].copy_from_slice(&fixed);
        let err = decode(&bytes).unwrap_err().to_string();
        assert!(err.contains("version 99"), "{err}");
    }

    #[test]
    fn optimizer_state_roundtrips() {
        let mut ckpt = sample_checkpoint();
        let m: BTreeMap<String, Tensor> = ckpt
            .tensors
            .iter()
            .map(|(k, v)| (k.clone(), Tensor::zeros(v.shape().to_vec())))
            .collect();
        ckpt.optimizer = Some(OptimizerState { step: 42, epoch: 3, m: m.clone(), v: m });
        let loaded = decode(&encode(&ckpt).unwrap()).unwrap();
        let opt = loaded.optimizer.unwrap();
        assert_eq!(opt.step, 42);
        assert_eq!(opt.epoch, 3);
    }

    #[test]
    fn crc32_known_vector() {
        // CRC-32/IEEE of "123456789".
        assert_eq!(crc32(b"123456789"), 0xCBF4_3926);
    }
}
