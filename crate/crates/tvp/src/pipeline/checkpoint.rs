//! Checkpoint serialization.
//!
//! Layout (all integers little-endian):
//!   magic "SEERCKPT", version u32
//!   config block: u32 byte length + UTF-8 key=value lines
//!   vocabulary: u32 word count, then per word u32 length + UTF-8
//!   tensors: u32 count, then per tensor (sorted by name):
//!     u32 name length + UTF-8 name, u8 dtype tag (0 = f32),
//!     u32 rank, u32 dims..., raw little-endian payload
//!   frozen bitmap: one bit per tensor in written order, packed LSB-first
//!
//! load(save(x)) is bit-identical; unknown versions are a hard error.

use std::collections::BTreeMap;
use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::numerics::ParamStore;
use crate::textstack::Vocabulary;

pub const CKPT_MAGIC: &[u8; 8] = b"SEERCKPT";
pub const CKPT_VERSION: u32 = 1;

pub struct Checkpoint {
    pub config: BTreeMap<String, String>,
    pub vocab: Vocabulary,
    pub store: ParamStore<f32>,
}

fn push_u32(buf: &mut Vec<u8>, v: u32) {
    buf.extend_from_slice(&v.to_le_bytes());
}

fn push_str(buf: &mut Vec<u8>, s: &str) {
    push_u32(buf, s.len() as u32);
    buf.extend_from_slice(s.as_bytes());
}

pub fn save_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<()> {
    let mut buf = Vec::new();
    buf.extend_from_slice(CKPT_MAGIC);
    push_u32(&mut buf, CKPT_VERSION);

    let mut config_text = String::new();
    for (k, v) in &ckpt.config {
        config_text.push_str(&format!("{k}={v}\n"));
    }
    push_str(&mut buf, &config_text);

    push_u32(&mut buf, ckpt.vocab.size() as u32);
    for word in ckpt.vocab.tokens() {
        push_str(&mut buf, word);
    }

    let names: Vec<&str> = ckpt.store.names().collect(); // BTreeMap: sorted
    push_u32(&mut buf, names.len() as u32);
    let mut frozen_bits = vec![0u8; names.len().div_ceil(8)];
    for (i, name) in names.iter().enumerate() {
        let param = ckpt.store.param(name).expect("name from the store");
        let tensor = param.tensor();
        if param.frozen() {
            frozen_bits[i / 8] |= 1 << (i % 8);
        }
        push_str(&mut buf, name);
        buf.push(0u8); // dtype f32
        push_u32(&mut buf, tensor.dims().len() as u32);
        for &d in tensor.dims() {
            push_u32(&mut buf, d as u32);
        }
        for &v in tensor.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    buf.extend_from_slice(&frozen_bits);

    let tmp = path.with_extension("tmp");
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(&buf)?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

struct Reader {
    data: Vec<u8>,
    pos: usize,
}

impl Reader {
    fn take(&mut self, n: usize) -> Result<&[u8]> {
        if self.pos + n > self.data.len() {
            return Err(Error::Data("checkpoint truncated".into()));
        }
        let s = &self.data[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn string(&mut self) -> Result<String> {
        let len = self.u32()? as usize;
        String::from_utf8(self.take(len)?.to_vec())
            .map_err(|_| Error::Data("checkpoint: invalid UTF-8".into()))
    }
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let mut data = Vec::new();
    fs::File::open(path)
        .map_err(|e| Error::Data(format!("{}: {e}", path.display())))?
        .read_to_end(&mut data)?;
    let mut r = Reader { data, pos: 0 };
    if r.take(8)? != CKPT_MAGIC {
        return Err(Error::Data(format!("{}: not a checkpoint (bad magic)", path.display())));
    }
    let version = r.u32()?;
    if version != CKPT_VERSION {
        return Err(Error::Data(format!(
            "{}: unsupported checkpoint version {version} (expected {CKPT_VERSION})",
            path.display()
        )));
    }
    let config_text = r.string()?;
    let mut config = BTreeMap::new();
    for line in config_text.lines() {
        if let Some((k, v)) = line.split_once('=') {
            config.insert(k.to_string(), v.to_string());
        }
    }
    let word_count = r.u32()? as usize;
    let mut words = Vec::with_capacity(word_count);
    for _ in 0..word_count {
        words.push(r.string()?);
    }
    let vocab = Vocabulary::from_tokens(words)?;

    let tensor_count = r.u32()? as usize;
    let mut store = ParamStore::new();
    let mut names = Vec::with_capacity(tensor_count);
    for _ in 0..tensor_count {
        let name = r.string()?;
        let dtype = r.take(1)?[0];
        if dtype != 0 {
            return Err(Error::Data(format!("tensor {name}: unsupported dtype tag {dtype}")));
        }
        let rank = r.u32()? as usize;
        let mut dims = Vec::with_capacity(rank);
        for _ in 0..rank {
            dims.push(r.u32()? as usize);
        }
        let n: usize = dims.iter().product();
        let raw = r.take(n * 4)?;
        let values: Vec<f32> = raw
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
            .collect();
        store.insert(&name, dims, values);
        names.push(name);
    }
    let bits = r.take(tensor_count.div_ceil(8))?.to_vec();
    for (i, name) in names.iter().enumerate() {
        if bits[i / 8] & (1 << (i % 8)) != 0 {
            store.set_frozen(name, true);
        }
    }
    Ok(Checkpoint { config, vocab, store })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_is_bit_identical() {
        let dir = std::env::temp_dir().join("tvp_ckpt_test");
        fs::create_dir_all(&dir).unwrap();
        let mut store = ParamStore::new();
        store.insert("b.weight", vec![2, 3], vec![1.0, -2.5, 3.25, 0.0, f32::MIN_POSITIVE, 7.5]);
        store.insert("a.bias", vec![2], vec![0.5, -0.5]);
        store.set_frozen("a.bias", true);
        let mut config = BTreeMap::new();
        config.insert("seed".to_string(), "42".to_string());
        config.insert("meta.stage".to_string(), "2d".to_string());
        let ckpt = Checkpoint { config, vocab: Vocabulary::standard(), store };
        let p1 = dir.join("one.ckpt");
        let p2 = dir.join("two.ckpt");
        save_checkpoint(&p1, &ckpt).unwrap();
        let loaded = load_checkpoint(&p1).unwrap();
        save_checkpoint(&p2, &loaded).unwrap();
        let bytes1 = fs::read(&p1).unwrap();
        let bytes2 = fs::read(&p2).unwrap();
        assert_eq!(bytes1, bytes2);
        assert_eq!(loaded.config.get("seed").unwrap(), "42");
        assert!(loaded.store.param("a.bias").unwrap().frozen());
        assert!(!loaded.store.param("b.weight").unwrap().frozen());
        assert_eq!(
            loaded.store.get("b.weight").unwrap().data()[4].to_bits(),
            f32::MIN_POSITIVE.to_bits()
        );
        fs::remove_dir_all(&dir).ok();
    }

    #[test]
    fn unknown_version_is_hard_error() {
        let dir = std::env::temp_dir().join("tvp_ckpt_ver_test");
        fs::create_dir_all(&dir).unwrap();
        let path = dir.join("bad.ckpt");
        let mut buf = Vec::new();
        buf.extend_from_slice(CKPT_MAGIC);
        buf.extend_from_slice(&99u32.to_le_bytes());
        fs::write(&path, buf).unwrap();
        let err = match load_checkpoint(&path) {
            Err(e) => e.to_string(),
            Ok(_) => panic!("version 99 was accepted"),
        };
        assert!(err.contains("version 99"), "{err}");
        fs::remove_dir_all(&dir).ok();
    }

    #[test]
    fn bad_magic_is_data_error() {
        let dir = std::env::temp_dir().join("tvp_ckpt_magic_test");
        fs::create_dir_all(&dir).unwrap();
        let path = dir.join("bad.ckpt");
        fs::write(&path, b"NOTACKPTxxxx").unwrap();
        assert!(load_checkpoint(&path).is_err());
        fs::remove_dir_all(&dir).ok();
    }
}
