//! Binary checkpoint format, all integers little-endian:
//!
//! ```text
//! "GFUS" | u32 version = 1
//! u32 config byte length | UTF-8 `key=value\n` lines
//! u32 tensor count
//! per tensor: u16 name length | UTF-8 name | u8 rank | rank × u64 dims | f64 payload
//! ```

use std::path::Path;

use crate::error::{Error, Result};
use crate::model::{Checkpoint, ModelConfig, ParamSet};
use crate::numerics::Tensor;

pub const MAGIC: &[u8; 4] = b"GFUS";
pub const VERSION: u32 = 1;

pub fn encode_checkpoint(ckpt: &Checkpoint) -> Vec<u8> {
    let mut out = Vec::with_capacity(64 + ckpt.num_parameters() * 8);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    let config = ckpt.config().to_lines();
    out.extend_from_slice(&(config.len() as u32).to_le_bytes());
    out.extend_from_slice(config.as_bytes());
    out.extend_from_slice(&(ckpt.params().len() as u32).to_le_bytes());
    for (name, t) in ckpt.params() {
        out.extend_from_slice(&(name.len() as u16).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.push(t.rank() as u8);
        for &d in t.shape() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for &x in t.data() {
            out.extend_from_slice(&x.to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn fail<T>(&self, at: usize, msg: impl Into<String>) -> Result<T> {
        Err(Error::Format {
            offset: at as u64,
            msg: msg.into(),
        })
    }

    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return self.fail(self.pos, format!("truncated while reading {what}"));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    fn u16(&mut self, what: &str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().expect("2 bytes")))
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().expect("8 bytes")))
    }

    fn utf8(&mut self, n: usize, what: &str) -> Result<&'a str> {
        let at = self.pos;
        let bytes = self.take(n, what)?;
        std::str::from_utf8(bytes).or_else(|_| self.fail(at, format!("{what} is not UTF-8")))
    }
}

pub fn decode_checkpoint(buf: &[u8]) -> Result<Checkpoint> {
    let mut r = Reader { buf, pos: 0 };
    if r.take(4, "magic")? != MAGIC {
        return r.fail(0, "bad magic, expected \"GFUS\"");
    }
    let version = r.u32("version")?;
    if version != VERSION {
        return r.fail(4, format!("unsupported version {version}"));
    }
    let config_at = r.pos;
    let config_len = r.u32("config length")? as usize;
    let config_text = r.utf8(config_len, "config")?;
    let config = ModelConfig::from_lines(config_text).or_else(|e| r.fail(config_at, e.to_string()))?;
    let expected = super::params::expected_shapes(&config);

    let count_at = r.pos;
    let count = r.u32("tensor count")? as usize;
    if count != expected.len() {
        return r.fail(
            count_at,
            format!("config requires {} tensors, file has {count}", expected.len()),
        );
    }
    let mut params = ParamSet::new();
    for _ in 0..count {
        let at = r.pos;
        let name_len = r.u16("tensor name length")? as usize;
        let name = r.utf8(name_len, "tensor name")?.to_owned();
        let rank = r.u8("tensor rank")? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.u64("tensor dimension")? as usize);
        }
        match expected.iter().find(|(n, _)| *n == name) {
            None => return r.fail(at, format!("unexpected tensor {name:?}")),
            Some((_, s)) if *s != shape => {
                return r.fail(
                    at,
                    format!("tensor {name} has shape {shape:?}, config requires {s:?}"),
                )
            }
            _ => {}
        }
        if params.contains_key(&name) {
            return r.fail(at, format!("duplicate tensor {name:?}"));
        }
        let n: usize = shape.iter().product();
        let bytes = r.take(n * 8, "tensor payload")?;
        let data = bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        let tensor = Tensor::new(shape, data).or_else(|e| r.fail(at, e.to_string()))?;
        params.insert(name, tensor);
    }
    if r.pos != buf.len() {
        return r.fail(r.pos, "trailing bytes after last tensor");
    }
    Checkpoint::new(config, params).or_else(|e| r.fail(count_at, e.to_string()))
}

pub fn save_checkpoint(ckpt: &Checkpoint, path: impl AsRef<Path>) -> Result<()> {
    std::fs::write(&path, encode_checkpoint(ckpt)).map_err(|e| Error::io(&path, e))
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    let buf = std::fs::read(&path).map_err(|e| Error::io(&path, e))?;
    decode_checkpoint(&buf)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{init_parameters, FusionMode};

    fn ckpt() -> Checkpoint {
        init_parameters(&ModelConfig {
            vocab_size: 9,
            d_model: 4,
            n_heads: 2,
            d_ff: 8,
            max_len: 5,
            fusion_mode: FusionMode::Both,
            seed: 11,
            ..Default::default()
        })
        .unwrap()
    }

    fn offset(err: Error) -> u64 {
        match err {
            Error::Format { offset, .. } => offset,
            other => panic!("expected a format error, got {other:?}"),
        }
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let mut ck = ckpt();
        let mut odd = ck.param("gate.w").unwrap().clone();
        odd.data_mut()[0] = -0.0;
        odd.data_mut()[1] = f64::MIN_POSITIVE / 3.0;
        ck.set_param("gate.w", odd).unwrap();
        let back = decode_checkpoint(&encode_checkpoint(&ck)).unwrap();
        assert!(back.bit_eq(&ck));
    }

    #[test]
    fn header_layout() {
        let bytes = encode_checkpoint(&ckpt());
        assert_eq!(&bytes[..4], b"GFUS");
        assert_eq!(u32::from_le_bytes(bytes[4..8].try_into().unwrap()), 1);
        let len = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
        let text = std::str::from_utf8(&bytes[12..12 + len]).unwrap();
        assert!(text.starts_with("vocab_size=9\n"));
    }

    #[test]
    fn corrupted_magic_is_rejected() {
        let mut bytes = encode_checkpoint(&ckpt());
        bytes[0] = b'X';
        assert_eq!(offset(decode_checkpoint(&bytes).unwrap_err()), 0);
    }

    #[test]
    fn truncation_is_rejected_with_offset() {
        let bytes = encode_checkpoint(&ckpt());
        let cut = bytes.len() - 3;
        let err = decode_checkpoint(&bytes[..cut]).unwrap_err();
        assert!(offset(err) > 12);
        assert!(decode_checkpoint(&bytes[..6]).is_err());
    }

    #[test]
    fn config_shape_mismatch_is_rejected() {
        let ck = ckpt();
        let bytes = encode_checkpoint(&ck);
        let text = ck.config().to_lines();
        let patched = text.replace("vocab_size=9", "vocab_size=8");
        assert_eq!(patched.len(), text.len());
        let mut bad = bytes.clone();
        bad[12..12 + text.len()].copy_from_slice(patched.as_bytes());
        let err = decode_checkpoint(&bad).unwrap_err();
        assert!(err.to_string().contains("tok_emb"), "{err}");
    }

    #[test]
    fn version_and_trailing_bytes() {
        let mut bytes = encode_checkpoint(&ckpt());
        bytes.push(0);
        assert!(decode_checkpoint(&bytes).is_err());
        bytes.pop();
        bytes[4] = 2;
        assert_eq!(offset(decode_checkpoint(&bytes).unwrap_err()), 4);
    }
}
