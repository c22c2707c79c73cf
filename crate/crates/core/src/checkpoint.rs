//! Model checkpoint container: a versioned header describing the network
//! shape and parameter order, followed by the raw 32-bit parameters.
//!
//! Layout: 4-byte magic `GRLK`, little-endian u32 version, little-endian
//! u32 header length, a JSON header (network config, an arbitrary config
//! echo, and the ordered parameter-block table), then `param_count` f32
//! values in little-endian byte order, matching the header's block table.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::net::{NetConfig, ParamBlock, QNetwork};

const MAGIC: &[u8; 4] = b"GRLK";
const VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("not a checkpoint file (bad magic)")]
    BadMagic,
    #[error("unsupported checkpoint version {0}")]
    BadVersion(u32),
    #[error("parameter count {got} does not match header {want}")]
    ParamCount { got: usize, want: usize },
    #[error("header: {0}")]
    Header(#[from] serde_json::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("network: {0}")]
    Net(#[from] crate::net::NetError),
}

#[derive(Serialize, Deserialize)]
struct Header {
    net: NetConfig,
    /// Free-form echo of the run configuration that produced the model.
    config_echo: serde_json::Value,
    param_count: usize,
    params: Vec<ParamBlock>,
}

pub fn save(
    path: impl AsRef<Path>,
    net: &QNetwork<f32>,
    config_echo: serde_json::Value,
) -> Result<(), CheckpointError> {
    let header = Header {
        net: *net.cfg(),
        config_echo,
        param_count: net.num_params(),
        params: net.layout().param_blocks().to_vec(),
    };
    let header_bytes = serde_json::to_vec(&header)?;
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&(header_bytes.len() as u32).to_le_bytes())?;
    w.write_all(&header_bytes)?;
    for &p in net.params() {
        w.write_all(&p.to_le_bytes())?;
    }
    w.flush()?;
    Ok(())
}

pub fn load(path: impl AsRef<Path>) -> Result<(QNetwork<f32>, serde_json::Value), CheckpointError> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(CheckpointError::BadMagic);
    }
    let mut word = [0u8; 4];
    r.read_exact(&mut word)?;
    let version = u32::from_le_bytes(word);
    if version != VERSION {
        return Err(CheckpointError::BadVersion(version));
    }
    r.read_exact(&mut word)?;
    let header_len = u32::from_le_bytes(word) as usize;
    let mut header_bytes = vec![0u8; header_len];
    r.read_exact(&mut header_bytes)?;
    let header: Header = serde_json::from_slice(&header_bytes)?;

    let mut net = QNetwork::<f32>::new(header.net, 0)?;
    if net.num_params() != header.param_count {
        return Err(CheckpointError::ParamCount {
            got: net.num_params(),
            want: header.param_count,
        });
    }
    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes)?;
    if bytes.len() != 4 * header.param_count {
        return Err(CheckpointError::ParamCount {
            got: bytes.len() / 4,
            want: header.param_count,
        });
    }
    for (i, chunk) in bytes.chunks_exact(4).enumerate() {
        net.params_mut()[i] = f32::from_le_bytes(chunk.try_into().unwrap());
    }
    Ok((net, header.config_echo))
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    #[test]
    fn roundtrip_preserves_params_and_echo() {
        let cfg = NetConfig {
            fov: 5,
            seq_len: 2,
            conv_blocks: 1,
            base_channels: 2,
            lstm_units: 4,
            dense_units: 4,
        };
        let net = QNetwork::<f32>::new(cfg, 99).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        save(&path, &net, json!({"note": "test"})).unwrap();
        let (back, echo) = load(&path).unwrap();
        assert_eq!(net.params(), back.params());
        assert_eq!(back.cfg(), &cfg);
        assert_eq!(echo["note"], "test");
    }

    #[test]
    fn rejects_garbage() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("junk.ckpt");
        std::fs::write(&path, b"definitely not a checkpoint").unwrap();
        assert!(matches!(load(&path), Err(CheckpointError::BadMagic)));
    }
}
