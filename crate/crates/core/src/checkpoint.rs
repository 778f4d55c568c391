//! Binary parameter archives.
//!
//! Layout: 8-byte magic, little-endian u64 header length, JSON header, then
//! every tensor as little-endian f64 in declaration order.

use std::io::{Read, Write};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::classify::AbmilParams;
use crate::mcfn::{McfnConfig, McfnParams};

pub const MAGIC: &[u8; 8] = b"MMNAVCK1";

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("not a checkpoint (bad magic)")]
    Magic,
    #[error("checkpoint header: {0}")]
    Header(String),
    #[error("checkpoint holds `{found}` parameters, expected `{expected}`")]
    Kind { expected: String, found: String },
    #[error("tensor `{name}`: {msg}")]
    Tensor { name: String, msg: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, CheckpointError>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorInfo {
    pub name: String,
    pub shape: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub kind: String,
    /// Hash of the encoder spec the parameters were trained against.
    pub spec_hash: String,
    pub seed: u64,
    pub config: serde_json::Value,
    pub config_hash: String,
    /// Hash of the run configuration that produced the archive.
    #[serde(default)]
    pub run_hash: String,
    pub tensors: Vec<TensorInfo>,
}

pub fn json_hash(v: &impl Serialize) -> String {
    let s = serde_json::to_string(v).expect("serializable");
    hex::encode(&Sha256::digest(s.as_bytes())[..8])
}

fn write_raw<W: Write>(mut out: W, header: &CheckpointHeader, groups: &[(&str, &[f64])]) -> Result<()> {
    let json = serde_json::to_vec(header).map_err(|e| CheckpointError::Header(e.to_string()))?;
    out.write_all(MAGIC)?;
    out.write_all(&(json.len() as u64).to_le_bytes())?;
    out.write_all(&json)?;
    let mut buf = Vec::new();
    for (_, g) in groups {
        buf.clear();
        buf.reserve(g.len() * 8);
        for v in g.iter() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        out.write_all(&buf)?;
    }
    out.flush()?;
    Ok(())
}

fn read_header<R: Read>(input: &mut R) -> Result<CheckpointHeader> {
    let mut magic = [0u8; 8];
    input.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(CheckpointError::Magic);
    }
    let mut len = [0u8; 8];
    input.read_exact(&mut len)?;
    let len = u64::from_le_bytes(len);
    if len > 1 << 26 {
        return Err(CheckpointError::Header(format!("implausible header length {len}")));
    }
    let mut json = vec![0u8; len as usize];
    input.read_exact(&mut json)?;
    serde_json::from_slice(&json).map_err(|e| CheckpointError::Header(e.to_string()))
}

/// Fills `groups` from the tensor section after checking names and shapes.
fn read_tensors<R: Read>(
    input: &mut R,
    header: &CheckpointHeader,
    expected: &[(&'static str, Vec<usize>)],
    groups: Vec<(&'static str, &mut [f64])>,
) -> Result<()> {
    if header.tensors.len() != expected.len() {
        return Err(CheckpointError::Header(format!(
            "{} tensors stored, {} expected",
            header.tensors.len(),
            expected.len()
        )));
    }
    for (info, (name, shape)) in header.tensors.iter().zip(expected) {
        if info.name != *name || info.shape != *shape {
            return Err(CheckpointError::Tensor {
                name: info.name.clone(),
                msg: format!("stored as {:?}, expected `{name}` {:?}", info.shape, shape),
            });
        }
    }
    for (name, g) in groups {
        let mut bytes = vec![0u8; g.len() * 8];
        input.read_exact(&mut bytes).map_err(|e| CheckpointError::Tensor {
            name: name.into(),
            msg: e.to_string(),
        })?;
        for (v, c) in g.iter_mut().zip(bytes.chunks_exact(8)) {
            *v = f64::from_le_bytes(c.try_into().expect("8 bytes"));
        }
    }
    let mut rest = [0u8; 1];
    if input.read(&mut rest)? != 0 {
        return Err(CheckpointError::Header("trailing bytes after tensors".into()));
    }
    Ok(())
}

fn check_kind(h: &CheckpointHeader, kind: &str) -> Result<()> {
    if h.kind != kind {
        return Err(CheckpointError::Kind {
            expected: kind.into(),
            found: h.kind.clone(),
        });
    }
    Ok(())
}

fn shapes_info(shapes: &[(&'static str, Vec<usize>)]) -> Vec<TensorInfo> {
    shapes
        .iter()
        .map(|(n, s)| TensorInfo {
            name: n.to_string(),
            shape: s.clone(),
        })
        .collect()
}

pub fn save_mcfn<W: Write>(out: W, params: &McfnParams, spec_hash: &str, run_hash: &str) -> Result<()> {
    let header = CheckpointHeader {
        kind: "mcfn".into(),
        spec_hash: spec_hash.into(),
        seed: params.config.seed,
        config: serde_json::to_value(&params.config).map_err(|e| CheckpointError::Header(e.to_string()))?,
        config_hash: json_hash(&params.config),
        run_hash: run_hash.into(),
        tensors: shapes_info(&params.shapes()),
    };
    write_raw(out, &header, &params.groups())
}

pub fn load_mcfn<R: Read>(mut input: R) -> Result<(McfnParams, CheckpointHeader)> {
    let header = read_header(&mut input)?;
    check_kind(&header, "mcfn")?;
    let config: McfnConfig =
        serde_json::from_value(header.config.clone()).map_err(|e| CheckpointError::Header(e.to_string()))?;
    let mut params = McfnParams::zeros(config);
    let shapes = params.shapes();
    read_tensors(&mut input, &header, &shapes, params.groups_mut())?;
    Ok((params, header))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
struct AbmilShape {
    dim: usize,
    hidden: usize,
}

pub fn save_abmil<W: Write>(out: W, params: &AbmilParams, spec_hash: &str, seed: u64, run_hash: &str) -> Result<()> {
    let shape = AbmilShape {
        dim: params.dim,
        hidden: params.hidden,
    };
    let header = CheckpointHeader {
        kind: "abmil".into(),
        spec_hash: spec_hash.into(),
        seed,
        config: serde_json::to_value(shape).map_err(|e| CheckpointError::Header(e.to_string()))?,
        config_hash: json_hash(&shape),
        run_hash: run_hash.into(),
        tensors: shapes_info(&params.shapes()),
    };
    write_raw(out, &header, &params.groups())
}

pub fn load_abmil<R: Read>(mut input: R) -> Result<(AbmilParams, CheckpointHeader)> {
    let header = read_header(&mut input)?;
    check_kind(&header, "abmil")?;
    let shape: AbmilShape =
        serde_json::from_value(header.config.clone()).map_err(|e| CheckpointError::Header(e.to_string()))?;
    let mut params = AbmilParams::zeros(shape.dim, shape.hidden);
    let shapes = params.shapes();
    read_tensors(&mut input, &header, &shapes, params.groups_mut())?;
    Ok((params, header))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mcfn::CmbScope;

    fn small() -> McfnParams {
        McfnParams::init(McfnConfig {
            dim: 4,
            levels: 3,
            output_size: 16,
            cmb_scope: CmbScope::Windowed { side: 2 },
            seed: 5,
            ..Default::default()
        })
    }

    #[test]
    fn mcfn_round_trip_is_exact() {
        let p = small();
        let mut buf = Vec::new();
        save_mcfn(&mut buf, &p, "abc", "r").unwrap();
        let (q, h) = load_mcfn(&buf[..]).unwrap();
        assert_eq!(p, q);
        assert_eq!(h.spec_hash, "abc");
        assert_eq!(h.seed, 5);
        assert_eq!(&buf[..8], MAGIC);
    }

    #[test]
    fn abmil_round_trip_is_exact() {
        let p = AbmilParams::init(6, 3, 2);
        let mut buf = Vec::new();
        save_abmil(&mut buf, &p, "s", 2, "r").unwrap();
        assert_eq!(load_abmil(&buf[..]).unwrap().0, p);
        assert!(matches!(load_mcfn(&buf[..]), Err(CheckpointError::Kind { .. })));
    }

    #[test]
    fn corrupt_archives_rejected() {
        let p = small();
        let mut buf = Vec::new();
        save_mcfn(&mut buf, &p, "abc", "r").unwrap();
        let mut bad = buf.clone();
        bad[0] = b'X';
        assert!(matches!(load_mcfn(&bad[..]), Err(CheckpointError::Magic)));
        assert!(load_mcfn(&buf[..buf.len() - 3]).is_err());
        let mut long = buf.clone();
        long.push(0);
        assert!(load_mcfn(&long[..]).is_err());
    }
}
