//! Binary checkpoint container for models and memory banks.
//!
//! Layout, all integers and floats little-endian:
//!
//! ```text
//! magic    8 bytes  "CLTTACKP"
//! version  u32      currently 1
//! sections repeated: tag (4 ASCII bytes), payload length (u64), payload
//! trailer  32 bytes SHA-256 of every preceding byte
//! ```
//!
//! Section `MODL` holds the seed (u64), the width count (u32), the widths
//! (u64 each), then for every hidden block the weight (row-major), bias,
//! gamma, beta, running mean, running variance and momentum, followed by the
//! head weight and bias. Section `BANK` is optional and holds capacity,
//! classes and row count (u64 each) followed by the rows oldest first.

use std::fs;
use std::io::Write;
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::bank::MemoryBank;
use crate::error::{Error, Result};
use crate::netcore::{BatchNorm, Block, Linear, MlpModel};
use crate::numerics::Matrix;

pub const MAGIC: &[u8; 8] = b"CLTTACKP";
pub const VERSION: u32 = 1;
const DIGEST_LEN: usize = 32;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub model: MlpModel,
    pub bank: Option<MemoryBank>,
}

impl Checkpoint {
    pub fn new(model: MlpModel) -> Self {
        Checkpoint { model, bank: None }
    }

    pub fn with_bank(model: MlpModel, bank: MemoryBank) -> Self {
        Checkpoint {
            model,
            bank: Some(bank),
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        write_section(&mut out, b"MODL", &encode_model(&self.model));
        if let Some(bank) = &self.bank {
            write_section(&mut out, b"BANK", &encode_bank(bank));
        }
        let digest = Sha256::digest(&out);
        out.extend_from_slice(&digest);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < MAGIC.len() + 4 + DIGEST_LEN {
            return Err(Error::Format("checkpoint truncated".into()));
        }
        let (body, digest) = bytes.split_at(bytes.len() - DIGEST_LEN);
        if &body[..MAGIC.len()] != MAGIC {
            return Err(Error::Format("bad checkpoint magic".into()));
        }
        if Sha256::digest(body).as_slice() != digest {
            return Err(Error::Format("checkpoint checksum mismatch".into()));
        }
        let mut r = Reader::new(&body[MAGIC.len()..]);
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::Format(format!("unsupported checkpoint version {version}")));
        }
        let mut model = None;
        let mut bank = None;
        while !r.is_done() {
            let tag = r.take(4)?;
            let len = r.len_u64()?;
            let payload = r.take(len)?;
            match tag {
                b"MODL" if model.is_none() => model = Some(decode_model(payload)?),
                b"BANK" if bank.is_none() => bank = Some(decode_bank(payload)?),
                b"MODL" | b"BANK" => {
                    return Err(Error::Format("duplicate checkpoint section".into()));
                }
                other => {
                    return Err(Error::Format(format!(
                        "unknown checkpoint section {:?}",
                        String::from_utf8_lossy(other)
                    )));
                }
            }
        }
        let model = model.ok_or_else(|| Error::Format("checkpoint has no model section".into()))?;
        if let Some(b) = &bank {
            if b.classes() != model.num_classes() {
                return Err(Error::Format("bank width does not match model classes".into()));
            }
        }
        Ok(Checkpoint { model, bank })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.to_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }
}

/// Writes `bytes` to a sibling temporary file, then renames it over `path`.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    let name = path
        .file_name()
        .ok_or_else(|| Error::invalid(format!("{} is not a file path", path.display())))?;
    let tmp = dir.join(format!(".{}.tmp", name.to_string_lossy()));
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path).inspect_err(|_| {
        let _ = fs::remove_file(&tmp);
    })?;
    Ok(())
}

fn write_section(out: &mut Vec<u8>, tag: &[u8; 4], payload: &[u8]) {
    out.extend_from_slice(tag);
    out.extend_from_slice(&(payload.len() as u64).to_le_bytes());
    out.extend_from_slice(payload);
}

fn put_u64(out: &mut Vec<u8>, v: u64) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_f64s(out: &mut Vec<u8>, vs: &[f64]) {
    for v in vs {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

fn encode_model(model: &MlpModel) -> Vec<u8> {
    let mut out = Vec::new();
    put_u64(&mut out, model.seed());
    out.extend_from_slice(&(model.dims().len() as u32).to_le_bytes());
    for &d in model.dims() {
        put_u64(&mut out, d as u64);
    }
    for b in &model.blocks {
        put_f64s(&mut out, b.linear.weight.as_slice());
        put_f64s(&mut out, &b.linear.bias);
        put_f64s(&mut out, &b.bn.gamma);
        put_f64s(&mut out, &b.bn.beta);
        put_f64s(&mut out, &b.bn.running_mean);
        put_f64s(&mut out, &b.bn.running_var);
        put_f64s(&mut out, &[b.bn.momentum]);
    }
    put_f64s(&mut out, model.head.weight.as_slice());
    put_f64s(&mut out, &model.head.bias);
    out
}

fn decode_model(payload: &[u8]) -> Result<MlpModel> {
    let mut r = Reader::new(payload);
    let seed = r.u64()?;
    let n = r.u32()? as usize;
    if !(2..=64).contains(&n) {
        return Err(Error::Format(format!("implausible layer count {n}")));
    }
    let dims = (0..n).map(|_| r.len_u64()).collect::<Result<Vec<_>>>()?;
    if dims.contains(&0) {
        return Err(Error::Format("zero layer width".into()));
    }
    let linear = |r: &mut Reader, fi: usize, fo: usize| -> Result<Linear> {
        let w = r.f64s(fi.checked_mul(fo).ok_or_else(overflow)?)?;
        Ok(Linear {
            weight: Matrix::from_vec(fi, fo, w)?,
            bias: r.f64s(fo)?,
        })
    };
    let mut blocks = Vec::with_capacity(n - 2);
    for i in 0..n - 2 {
        let (fi, fo) = (dims[i], dims[i + 1]);
        let lin = linear(&mut r, fi, fo)?;
        let bn = BatchNorm {
            gamma: r.f64s(fo)?,
            beta: r.f64s(fo)?,
            running_mean: r.f64s(fo)?,
            running_var: r.f64s(fo)?,
            momentum: r.f64()?,
        };
        blocks.push(Block { linear: lin, bn });
    }
    let head = linear(&mut r, dims[n - 2], dims[n - 1])?;
    if !r.is_done() {
        return Err(Error::Format("trailing bytes in model section".into()));
    }
    MlpModel::from_parts(dims, seed, blocks, head).map_err(|e| Error::Format(format!("invalid model: {e}")))
}

fn encode_bank(bank: &MemoryBank) -> Vec<u8> {
    let mut out = Vec::new();
    put_u64(&mut out, bank.capacity() as u64);
    put_u64(&mut out, bank.classes() as u64);
    put_u64(&mut out, bank.len() as u64);
    for row in bank.rows() {
        put_f64s(&mut out, row);
    }
    out
}

fn decode_bank(payload: &[u8]) -> Result<MemoryBank> {
    let mut r = Reader::new(payload);
    let capacity = r.len_u64()?;
    let classes = r.len_u64()?;
    let count = r.len_u64()?;
    if count > capacity {
        return Err(Error::Format("bank holds more rows than its capacity".into()));
    }
    let rows = (0..count).map(|_| r.f64s(classes)).collect::<Result<Vec<_>>>()?;
    if !r.is_done() {
        return Err(Error::Format("trailing bytes in bank section".into()));
    }
    MemoryBank::from_rows(capacity, classes, rows).map_err(|e| Error::Format(format!("invalid bank: {e}")))
}

fn overflow() -> Error {
    Error::Format("section size overflows".into())
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn new(buf: &'a [u8]) -> Self {
        Reader { buf, pos: 0 }
    }

    fn is_done(&self) -> bool {
        self.pos == self.buf.len()
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).ok_or_else(overflow)?;
        if end > self.buf.len() {
            return Err(Error::Format("unexpected end of checkpoint data".into()));
        }
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn len_u64(&mut self) -> Result<usize> {
        usize::try_from(self.u64()?).map_err(|_| overflow())
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        let bytes = self.take(n.checked_mul(8).ok_or_else(overflow)?)?;
        Ok(bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::ProbMatrix;

    fn model() -> MlpModel {
        let mut m = MlpModel::new(&[4, 6, 5, 3], 9).unwrap();
        m.blocks[0].bn.running_var[2] = 0.37;
        m.blocks[1].bn.running_mean[1] = -1.25;
        m
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let mut bank = MemoryBank::new(4, 3).unwrap();
        let p = ProbMatrix::from_rows(&[[0.2, 0.3, 0.5], [0.1, 0.1, 0.8]]).unwrap();
        bank.push_batch(&p).unwrap();
        let ck = Checkpoint::with_bank(model(), bank);
        let bytes = ck.to_bytes();
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(back, ck);
        assert_eq!(back.to_bytes(), bytes);
    }

    #[test]
    fn model_only_round_trip() {
        let ck = Checkpoint::new(model());
        assert_eq!(Checkpoint::from_bytes(&ck.to_bytes()).unwrap(), ck);
    }

    #[test]
    fn flipped_byte_is_rejected() {
        let mut bytes = Checkpoint::new(model()).to_bytes();
        bytes[40] ^= 0x01;
        let err = Checkpoint::from_bytes(&bytes).unwrap_err();
        assert!(matches!(err, Error::Format(_)), "{err}");
    }

    #[test]
    fn truncation_and_magic_are_checked() {
        let bytes = Checkpoint::new(model()).to_bytes();
        assert!(matches!(Checkpoint::from_bytes(&bytes[..20]), Err(Error::Format(_))));
        let mut wrong = bytes.clone();
        wrong[0] = b'X';
        assert!(matches!(Checkpoint::from_bytes(&wrong), Err(Error::Format(_))));
    }

    #[test]
    fn atomic_write_replaces_file() {
        let dir = std::env::temp_dir().join(format!("cltta-ck-{}", std::process::id()));
        fs::create_dir_all(&dir).unwrap();
        let path = dir.join("m.ckpt");
        fs::write(&path, b"old").unwrap();
        let ck = Checkpoint::new(model());
        ck.save(&path).unwrap();
        assert_eq!(Checkpoint::load(&path).unwrap(), ck);
        fs::remove_dir_all(&dir).unwrap();
    }
}
