//! Binary checkpoints: magic, version, JSON config, then named tensors.
//!
//! ```text
//! "KDCK" | u32 version | u64 len | config JSON | u64 count
//!        | count × (u64 len | name UTF-8 | tensor)
//! ```
//! Integers are little-endian; tensors use the numerics binary format.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::config::ModelConfig;
use super::model::EncoderModel;
use crate::error::{Error, Result};
use crate::numerics::{read_u64, ParamStore, Tensor};

pub const CHECKPOINT_MAGIC: [u8; 4] = *b"KDCK";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Writes a config and named tensors in checkpoint layout.
pub fn write_store<W: Write>(mut w: W, config_json: &str, store: &ParamStore) -> std::io::Result<()> {
    w.write_all(&CHECKPOINT_MAGIC)?;
    w.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
    w.write_all(&(config_json.len() as u64).to_le_bytes())?;
    w.write_all(config_json.as_bytes())?;
    w.write_all(&(store.len() as u64).to_le_bytes())?;
    for (name, t) in store.names().iter().zip(store.tensors()) {
        w.write_all(&(name.len() as u64).to_le_bytes())?;
        w.write_all(name.as_bytes())?;
        t.write_to(&mut w)?;
    }
    w.flush()
}

/// Reads what [`write_store`] wrote, returning the raw config JSON.
pub fn read_store<R: Read>(mut r: R) -> Result<(String, ParamStore)> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)
        .map_err(|_| Error::Format("file too short for checkpoint header".into()))?;
    if magic != CHECKPOINT_MAGIC {
        return Err(Error::Format("not a checkpoint (bad magic)".into()));
    }
    let mut v = [0u8; 4];
    r.read_exact(&mut v)
        .map_err(|_| Error::Format("truncated checkpoint header".into()))?;
    let version = u32::from_le_bytes(v);
    if version != CHECKPOINT_VERSION {
        return Err(Error::Format(format!(
            "unsupported checkpoint version {version} (expected {CHECKPOINT_VERSION})"
        )));
    }
    let config = read_string(&mut r)?;
    let count = read_u64(&mut r)? as usize;
    let mut store = ParamStore::new();
    for _ in 0..count {
        let name = read_string(&mut r)?;
        let t = Tensor::read_from(&mut r)?;
        store.push(name, t);
    }
    let mut rest = [0u8; 1];
    if r.read(&mut rest).map_err(|e| Error::Format(e.to_string()))? != 0 {
        return Err(Error::Format("trailing bytes after checkpoint".into()));
    }
    Ok((config, store))
}

fn read_string<R: Read>(r: &mut R) -> Result<String> {
    let n = read_u64(r)? as usize;
    if n > 1 << 20 {
        return Err(Error::Format(format!("implausible string length {n}")));
    }
    let mut buf = vec![0u8; n];
    r.read_exact(&mut buf)
        .map_err(|_| Error::Format("truncated checkpoint string".into()))?;
    String::from_utf8(buf).map_err(|_| Error::Format("checkpoint string is not UTF-8".into()))
}

impl EncoderModel {
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let json = serde_json::to_string(self.config()).expect("config serializes");
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        write_store(BufWriter::new(file), &json, &self.params).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        let (json, store) = read_store(BufReader::new(file))?;
        let config: ModelConfig =
            serde_json::from_str(&json).map_err(|e| Error::Format(format!("bad config in checkpoint: {e}")))?;
        EncoderModel::from_params(config, store)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_and_corruption() {
        let m = EncoderModel::new(ModelConfig::new(1, 4, 2, 10).with_max_position(8), 5).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.ckpt");
        m.save(&p).unwrap();
        let back = EncoderModel::load(&p).unwrap();
        assert_eq!(back, m);
        assert_eq!(back.count_params(), m.count_params());

        let bytes = std::fs::read(&p).unwrap();
        std::fs::write(&p, &bytes[..bytes.len() - 10]).unwrap();
        assert!(matches!(EncoderModel::load(&p), Err(Error::Format(_))));

        let mut bad = bytes.clone();
        bad[4] = 9;
        std::fs::write(&p, &bad).unwrap();
        assert!(matches!(EncoderModel::load(&p), Err(Error::Format(m)) if m.contains("version")));

        bad = bytes;
        bad[0] = b'X';
        std::fs::write(&p, &bad).unwrap();
        assert!(matches!(EncoderModel::load(&p), Err(Error::Format(_))));
    }
}
