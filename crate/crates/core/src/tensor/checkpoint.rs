//! Binary checkpoint container.
//!
//! Layout (all integers little-endian):
//! ```text
//! magic "EVGCKPT\0" | u32 version | u64 config_len | config (UTF-8 JSON)
//! | 32-byte SHA-256 of config | u64 n_params
//! | per param: u32 name_len | name | u32 rank | u64 dims[rank] | f64 data[prod(dims)]
//! ```

use std::io::{Read, Write};

use sha2::{Digest, Sha256};

use super::{ParamStore, Tensor};
use crate::error::{Error, Result};

const MAGIC: &[u8; 8] = b"EVGCKPT\0";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config_json: String,
    pub params: ParamStore,
}

impl Checkpoint {
    pub fn config_digest(&self) -> [u8; 32] {
        config_digest(&self.config_json)
    }
}

pub fn config_digest(config_json: &str) -> [u8; 32] {
    Sha256::digest(config_json.as_bytes()).into()
}

pub fn write_checkpoint<W: Write>(mut w: W, config_json: &str, params: &ParamStore) -> Result<()> {
    w.write_all(MAGIC)?;
    w.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
    w.write_all(&(config_json.len() as u64).to_le_bytes())?;
    w.write_all(config_json.as_bytes())?;
    w.write_all(&config_digest(config_json))?;
    w.write_all(&(params.len() as u64).to_le_bytes())?;
    for (name, t) in params.iter() {
        w.write_all(&(name.len() as u32).to_le_bytes())?;
        w.write_all(name.as_bytes())?;
        w.write_all(&(t.rank() as u32).to_le_bytes())?;
        for &d in t.shape() {
            w.write_all(&(d as u64).to_le_bytes())?;
        }
        let mut buf = Vec::with_capacity(t.numel() * 8);
        for x in t.data() {
            buf.extend_from_slice(&x.to_le_bytes());
        }
        w.write_all(&buf)?;
    }
    Ok(())
}

fn read_exact<R: Read>(r: &mut R, n: usize, what: &str) -> Result<Vec<u8>> {
    let mut buf = vec![0u8; n];
    r.read_exact(&mut buf).map_err(|e| match e.kind() {
        std::io::ErrorKind::UnexpectedEof => Error::Truncated(format!("checkpoint ended inside {what}")),
        _ => Error::Io(e),
    })?;
    Ok(buf)
}

fn read_u32<R: Read>(r: &mut R, what: &str) -> Result<u32> {
    Ok(u32::from_le_bytes(read_exact(r, 4, what)?.try_into().expect("4 bytes")))
}

fn read_u64<R: Read>(r: &mut R, what: &str) -> Result<u64> {
    Ok(u64::from_le_bytes(read_exact(r, 8, what)?.try_into().expect("8 bytes")))
}

/// Reads and validates a checkpoint: magic, version, and that the stored
/// digest matches the stored config.
pub fn read_checkpoint<R: Read>(mut r: R) -> Result<Checkpoint> {
    if read_exact(&mut r, 8, "magic")? != MAGIC {
        return Err(Error::Format("not a checkpoint file".into()));
    }
    let version = read_u32(&mut r, "version")?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::Version { found: version, expected: CHECKPOINT_VERSION });
    }
    let len = read_u64(&mut r, "config length")? as usize;
    let config_json = String::from_utf8(read_exact(&mut r, len, "config")?)
        .map_err(|_| Error::Format("checkpoint config is not UTF-8".into()))?;
    let digest = read_exact(&mut r, 32, "digest")?;
    if digest[..] != config_digest(&config_json)[..] {
        return Err(Error::DigestMismatch);
    }
    let n = read_u64(&mut r, "parameter count")?;
    let mut params = ParamStore::new();
    for _ in 0..n {
        let name_len = read_u32(&mut r, "name length")? as usize;
        let name = String::from_utf8(read_exact(&mut r, name_len, "name")?)
            .map_err(|_| Error::Format("parameter name is not UTF-8".into()))?;
        let rank = read_u32(&mut r, "rank")? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(read_u64(&mut r, "dims")? as usize);
        }
        let count: usize = shape.iter().product();
        let bytes = read_exact(&mut r, count * 8, &name)?;
        let data = bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
        params.insert(name, Tensor::new(shape, data)?);
    }
    Ok(Checkpoint { config_json, params })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> ParamStore {
        let mut p = ParamStore::new();
        p.insert("a/w", Tensor::new(vec![2, 2], vec![1.0, -0.5, f64::MIN_POSITIVE, 3e300]).unwrap());
        p.insert("b", Tensor::scalar(0.25));
        p
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let mut buf = Vec::new();
        write_checkpoint(&mut buf, "{\"x\":1}", &sample()).unwrap();
        let ck = read_checkpoint(&buf[..]).unwrap();
        assert_eq!(ck.params, sample());
        assert_eq!(ck.config_json, "{\"x\":1}");
    }

    #[test]
    fn rejects_corruption() {
        let mut buf = Vec::new();
        write_checkpoint(&mut buf, "{\"x\":1}", &sample()).unwrap();
        assert!(matches!(read_checkpoint(&buf[..buf.len() - 3]), Err(Error::Truncated(_))));
        let mut bad = buf.clone();
        bad[8] = 9;
        assert!(matches!(read_checkpoint(&bad[..]), Err(Error::Version { .. })));
        let mut bad = buf.clone();
        bad[21] = b'y'; // inside the config text
        assert!(matches!(read_checkpoint(&bad[..]), Err(Error::DigestMismatch)));
        assert!(matches!(read_checkpoint(&b"garbage!xxxx"[..]), Err(Error::Format(_))));
    }
}
