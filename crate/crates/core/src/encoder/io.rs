//! Binary formats.
//!
//! Embedding file (`.prgt`): magic `PRGT`, `u32` version = 1, `u32` dim,
//! `u64` count, then `count × dim` little-endian `f32`, row-major.
//!
//! Encoder parameter file: magic `PRGE`, `u32` version = 1, `u32` length of a
//! JSON header holding the [`EncoderConfig`], the header, then the tensors
//! `table, w1, b1, w2, b2` as little-endian `f64`.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use chrono::NaiveDate;
use serde::{Deserialize, Serialize};

use super::{EmbeddingMatrix, EncoderConfig, ReferenceEncoder};
use crate::error::{Error, Result};
use crate::text::Concept;

pub const PRGT_MAGIC: &[u8; 4] = b"PRGT";
pub const PARAMS_MAGIC: &[u8; 4] = b"PRGE";
const VERSION: u32 = 1;

pub fn write_prgt<W: Write>(m: &EmbeddingMatrix, mut w: W) -> Result<()> {
    w.write_all(PRGT_MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&(m.dim as u32).to_le_bytes())?;
    w.write_all(&(m.len() as u64).to_le_bytes())?;
    for x in &m.data {
        w.write_all(&x.to_le_bytes())?;
    }
    w.flush()?;
    Ok(())
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

pub fn read_prgt<R: Read>(mut r: R) -> Result<EmbeddingMatrix> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != PRGT_MAGIC {
        return Err(Error::Format("not an embedding file (bad magic)".into()));
    }
    let version = read_u32(&mut r)?;
    if version != VERSION {
        return Err(Error::Format(format!("unsupported embedding file version {version}")));
    }
    let dim = read_u32(&mut r)? as usize;
    let mut cb = [0u8; 8];
    r.read_exact(&mut cb)?;
    let count = u64::from_le_bytes(cb) as usize;
    let mut bytes = vec![0u8; count * dim * 4];
    r.read_exact(&mut bytes)?;
    let data = bytes.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect();
    Ok(EmbeddingMatrix { dim, data })
}

pub fn save_prgt(m: &EmbeddingMatrix, path: &Path) -> Result<()> {
    write_prgt(m, BufWriter::new(File::create(path)?))
}

pub fn load_prgt(path: &Path) -> Result<EmbeddingMatrix> {
    read_prgt(BufReader::new(File::open(path)?))
}

/// Sidecar row description for an embedding file.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RowMeta {
    pub row: usize,
    pub patient_id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub visit_date: Option<NaiveDate>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub concept: Option<Concept>,
}

/// `<name>.prgt` → `<name>.rows.jsonl`
pub fn sidecar_path(path: &Path) -> std::path::PathBuf {
    path.with_extension("rows.jsonl")
}

pub fn write_params<W: Write>(enc: &ReferenceEncoder, mut w: W) -> Result<()> {
    let header = serde_json::to_vec(&enc.config)?;
    w.write_all(PARAMS_MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&(header.len() as u32).to_le_bytes())?;
    w.write_all(&header)?;
    for tensor in enc.params() {
        for x in tensor {
            w.write_all(&x.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

fn read_f64s<R: Read>(r: &mut R, n: usize) -> Result<Vec<f64>> {
    let mut bytes = vec![0u8; n * 8];
    r.read_exact(&mut bytes)?;
    Ok(bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
        .collect())
}

pub fn read_params<R: Read>(mut r: R) -> Result<ReferenceEncoder> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != PARAMS_MAGIC {
        return Err(Error::Format("not an encoder parameter file (bad magic)".into()));
    }
    let version = read_u32(&mut r)?;
    if version != VERSION {
        return Err(Error::Format(format!("unsupported parameter file version {version}")));
    }
    let hlen = read_u32(&mut r)? as usize;
    let mut header = vec![0u8; hlen];
    r.read_exact(&mut header)?;
    let config: EncoderConfig = serde_json::from_slice(&header)?;
    config.validate()?;
    let (v, h, o) = (config.vocab_size, config.hidden_dim, config.output_dim);
    let table = read_f64s(&mut r, v * h)?;
    let w1 = read_f64s(&mut r, h * h)?;
    let b1 = read_f64s(&mut r, h)?;
    let w2 = read_f64s(&mut r, o * h)?;
    let b2 = read_f64s(&mut r, o)?;
    Ok(ReferenceEncoder { config, table, w1, b1, w2, b2 })
}

pub fn save_params(enc: &ReferenceEncoder, path: &Path) -> Result<()> {
    write_params(enc, BufWriter::new(File::create(path)?))
}

pub fn load_params(path: &Path) -> Result<ReferenceEncoder> {
    read_params(BufReader::new(File::open(path)?))
}

/// True when the file starts with the parameter-file magic.
pub fn is_params_file(path: &Path) -> bool {
    let mut magic = [0u8; 4];
    File::open(path).and_then(|mut f| f.read_exact(&mut magic)).is_ok() && &magic == PARAMS_MAGIC
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::{encode_corpus, tiny_encoder};
    use crate::exec::Execution;
    use proptest::prelude::*;

    #[test]
    fn header_layout() {
        let m = EmbeddingMatrix { dim: 2, data: vec![1.0, -2.0, 0.5, 4.0] };
        let mut buf = Vec::new();
        write_prgt(&m, &mut buf).unwrap();
        assert_eq!(&buf[..4], b"PRGT");
        assert_eq!(u32::from_le_bytes(buf[4..8].try_into().unwrap()), 1);
        assert_eq!(u32::from_le_bytes(buf[8..12].try_into().unwrap()), 2);
        assert_eq!(u64::from_le_bytes(buf[12..20].try_into().unwrap()), 2);
        assert_eq!(buf.len(), 20 + 4 * 4);
        assert_eq!(f32::from_le_bytes(buf[24..28].try_into().unwrap()), -2.0);
    }

    #[test]
    fn bad_magic_is_rejected() {
        assert!(matches!(read_prgt(&b"NOPE\x01\0\0\0"[..]), Err(Error::Format(_))));
    }

    #[test]
    fn reencoding_with_reloaded_params_is_byte_identical() {
        let enc = tiny_encoder(16, 1024, 7);
        let dir = tempfile::tempdir().unwrap();
        let params = dir.path().join("enc.bin");
        save_params(&enc, &params).unwrap();
        assert!(is_params_file(&params));
        let texts: Vec<String> = (0..20).map(|i| format!("{i} days after previous, meds: x{i}")).collect();
        let mut first = Vec::new();
        write_prgt(&encode_corpus(&texts, &enc, Execution::default()).unwrap(), &mut first).unwrap();
        let reloaded = load_params(&params).unwrap();
        assert_eq!(reloaded, enc);
        let mut second = Vec::new();
        write_prgt(&encode_corpus(&texts, &reloaded, Execution::Sequential).unwrap(), &mut second).unwrap();
        assert_eq!(first, second);
    }

    proptest! {
        #[test]
        fn prgt_round_trip(dim in 1usize..6, rows in 0usize..8, seed in any::<u32>()) {
            let data: Vec<f32> = (0..dim * rows).map(|i| (i as f32 + seed as f32).sin()).collect();
            let m = EmbeddingMatrix { dim, data };
            let mut buf = Vec::new();
            write_prgt(&m, &mut buf).unwrap();
            prop_assert_eq!(read_prgt(&buf[..]).unwrap(), m);
        }
    }
}
