//! Versioned checkpoint container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic "DCPT" | format version u32 | stage u8 | stage-1 file hash [32]
//! config JSON (u32 length + bytes)
//! tokenizer JSON (u32 length + bytes)
//! parameter count u32, then per parameter:
//!   name (u16 length + utf-8) | ndim u8 | dims u32 each | values f64
//! ```
//!
//! Floats are written bit-for-bit, so a save/load round trip is exact.
//! Stage-2 files carry the SHA-256 of the stage-1 file they were trained
//! from; stage-1 files carry all zeros there.

use crate::config::ModelConfig;
use crate::error::{ModelError, Result};
use crate::params::{build_params, Params};
use crate::tokenizer::{Tokenizer, TokenizerState};
use drivecap_tensor::Tensor;
use sha2::{Digest, Sha256};
use std::io::{Read, Write};
use std::path::Path;

const MAGIC: &[u8; 4] = b"DCPT";
const FORMAT_VERSION: u32 = 1;

pub struct Checkpoint {
    pub stage: u8,
    /// SHA-256 of the stage-1 checkpoint file (zeros in stage-1 files).
    pub stage1_hash: [u8; 32],
    pub config: ModelConfig,
    pub tokenizer: TokenizerState,
    pub params: Params,
}

impl Checkpoint {
    pub fn stage1(config: ModelConfig, tokenizer: TokenizerState, params: Params) -> Self {
        Checkpoint {
            stage: 1,
            stage1_hash: [0; 32],
            config,
            tokenizer,
            params,
        }
    }

    pub fn stage2(
        config: ModelConfig,
        tokenizer: TokenizerState,
        params: Params,
        stage1_hash: [u8; 32],
    ) -> Self {
        Checkpoint {
            stage: 2,
            stage1_hash,
            config,
            tokenizer,
            params,
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut buf = Vec::new();
        buf.extend_from_slice(MAGIC);
        buf.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        buf.push(self.stage);
        buf.extend_from_slice(&self.stage1_hash);

        let config = serde_json::to_vec(&self.config)
            .map_err(|e| ModelError::Checkpoint(format!("config serialization: {e}")))?;
        write_chunk(&mut buf, &config);
        let tok = serde_json::to_vec(&self.tokenizer)
            .map_err(|e| ModelError::Checkpoint(format!("tokenizer serialization: {e}")))?;
        write_chunk(&mut buf, &tok);

        buf.extend_from_slice(&(self.params.len() as u32).to_le_bytes());
        for (name, tensor) in self.params.iter() {
            buf.extend_from_slice(&(name.len() as u16).to_le_bytes());
            buf.extend_from_slice(name.as_bytes());
            buf.push(tensor.shape.len() as u8);
            for &dim in &tensor.shape {
                buf.extend_from_slice(&(dim as u32).to_le_bytes());
            }
            for &v in &tensor.data {
                buf.extend_from_slice(&v.to_le_bytes());
            }
        }

        let mut file = std::fs::File::create(path)?;
        file.write_all(&buf)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Checkpoint> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)?.read_to_end(&mut bytes)?;
        let mut r = Reader { bytes: &bytes, at: 0 };

        if r.take(4)? != MAGIC {
            return Err(ModelError::Checkpoint("bad magic; not a checkpoint file".into()));
        }
        let version = r.u32()?;
        if version != FORMAT_VERSION {
            return Err(ModelError::Checkpoint(format!(
                "format version {version}, this build reads {FORMAT_VERSION}"
            )));
        }
        let stage = r.u8()?;
        if !(1..=2).contains(&stage) {
            return Err(ModelError::Checkpoint(format!("unknown stage {stage}")));
        }
        let mut stage1_hash = [0u8; 32];
        stage1_hash.copy_from_slice(r.take(32)?);

        let config: ModelConfig = serde_json::from_slice(r.chunk()?)
            .map_err(|e| ModelError::Checkpoint(format!("config snapshot: {e}")))?;
        let tokenizer: TokenizerState = serde_json::from_slice(r.chunk()?)
            .map_err(|e| ModelError::Checkpoint(format!("tokenizer state: {e}")))?;

        // Rebuild the parameter skeleton from the config snapshot, then
        // require the file to cover it exactly: unknown names, shape
        // drift, or missing entries all fail loudly.
        let vocab = Tokenizer::from_state(tokenizer.clone()).vocab();
        let mut params = build_params(&config, vocab)?;
        let count = r.u32()? as usize;
        if count != params.len() {
            return Err(ModelError::Checkpoint(format!(
                "file has {count} parameters, config implies {}",
                params.len()
            )));
        }
        for _ in 0..count {
            let name_len = r.u16()? as usize;
            let name = std::str::from_utf8(r.take(name_len)?)
                .map_err(|_| ModelError::Checkpoint("parameter name is not utf-8".into()))?
                .to_string();
            let ndim = r.u8()? as usize;
            let mut shape = Vec::with_capacity(ndim);
            for _ in 0..ndim {
                shape.push(r.u32()? as usize);
            }
            let numel: usize = shape.iter().product();
            let raw = r.take(numel * 8)?;
            let data: Vec<f64> = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
                .collect();
            let tensor = Tensor::new(data, shape)
                .map_err(|e| ModelError::Checkpoint(format!("parameter `{name}`: {e}")))?;
            params.set(&name, tensor)?;
        }
        if r.at != bytes.len() {
            return Err(ModelError::Checkpoint(format!(
                "{} trailing bytes after the last parameter",
                bytes.len() - r.at
            )));
        }
        Ok(Checkpoint {
            stage,
            stage1_hash,
            config,
            tokenizer,
            params,
        })
    }
}

/// SHA-256 of a file on disk, for stage-1 → stage-2 provenance.
pub fn file_hash(path: &Path) -> Result<[u8; 32]> {
    let mut hasher = Sha256::new();
    let mut file = std::fs::File::open(path)?;
    std::io::copy(&mut file, &mut hasher)?;
    Ok(hasher.finalize().into())
}

pub fn hash_hex(hash: &[u8; 32]) -> String {
    hash.iter().map(|b| format!("{b:02x}")).collect()
}

fn write_chunk(buf: &mut Vec<u8>, chunk: &[u8]) {
    buf.extend_from_slice(&(chunk.len() as u32).to_le_bytes());
    buf.extend_from_slice(chunk);
}

struct Reader<'a> {
    bytes: &'a [u8],
    at: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.at + n > self.bytes.len() {
            return Err(ModelError::Checkpoint(format!(
                "truncated file: wanted {n} bytes at offset {}, have {}",
                self.at,
                self.bytes.len() - self.at
            )));
        }
        let out = &self.bytes[self.at..self.at + n];
        self.at += n;
        Ok(out)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().expect("2 bytes")))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn chunk(&mut self) -> Result<&'a [u8]> {
        let len = self.u32()? as usize;
        self.take(len)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::ModelConfig;
    use tempfile::tempdir;

    fn small_cfg() -> ModelConfig {
        let mut cfg = ModelConfig::default();
        cfg.c = 16;
        cfg.d_l = 24;
        cfg.q = 4;
        cfg.heads = 4;
        cfg.lm_blocks = 2;
        cfg.reg_layers = 2;
        cfg.c_bb_lo = 12;
        cfg.c_bb_hi = 8;
        cfg.context = 64;
        cfg
    }

    fn toy_checkpoint() -> Checkpoint {
        let cfg = small_cfg();
        let corpus: Vec<String> = ["the car stops .", "a red bus turns ."]
            .iter()
            .flat_map(|l| std::iter::repeat(l.to_string()).take(3))
            .collect();
        let tok = Tokenizer::train(&corpus, 128).unwrap();
        let mut params = build_params(&cfg, tok.vocab()).unwrap();
        // Make the payload distinguishable from a fresh init.
        params.get_mut("fuse.gate").unwrap().data[0] = 0.25;
        params.get_mut("lm.b1.adapter").unwrap().data[0] = -0.5;
        Checkpoint::stage1(cfg, tok.state(), params)
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("ckpt");
        let ck = toy_checkpoint();
        ck.save(&path).unwrap();
        let back = Checkpoint::load(&path).unwrap();

        assert_eq!(back.stage, 1);
        assert_eq!(back.stage1_hash, [0; 32]);
        assert_eq!(back.config, ck.config);
        assert_eq!(back.params, ck.params);
        let tok = Tokenizer::from_state(back.tokenizer);
        let orig = Tokenizer::from_state(ck.tokenizer);
        assert_eq!(tok.encode("the car stops ."), orig.encode("the car stops ."));
    }

    #[test]
    fn saving_twice_produces_identical_bytes() {
        let dir = tempdir().unwrap();
        let (p1, p2) = (dir.path().join("a"), dir.path().join("b"));
        let ck = toy_checkpoint();
        ck.save(&p1).unwrap();
        ck.save(&p2).unwrap();
        assert_eq!(std::fs::read(&p1).unwrap(), std::fs::read(&p2).unwrap());
        assert_eq!(file_hash(&p1).unwrap(), file_hash(&p2).unwrap());
    }

    #[test]
    fn stage2_references_its_stage1_file() {
        let dir = tempdir().unwrap();
        let s1_path = dir.path().join("stage1");
        let ck = toy_checkpoint();
        ck.save(&s1_path).unwrap();
        let h = file_hash(&s1_path).unwrap();
        assert_ne!(h, [0; 32]);

        let s2 = Checkpoint::stage2(ck.config.clone(), ck.tokenizer.clone(), ck.params.clone(), h);
        let s2_path = dir.path().join("stage2");
        s2.save(&s2_path).unwrap();
        let back = Checkpoint::load(&s2_path).unwrap();
        assert_eq!(back.stage, 2);
        assert_eq!(back.stage1_hash, h);
        assert_eq!(hash_hex(&h).len(), 64);
    }

    #[test]
    fn corrupted_and_truncated_files_are_rejected() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("ckpt");
        let ck = toy_checkpoint();
        ck.save(&path).unwrap();
        let good = std::fs::read(&path).unwrap();

        // Bad magic.
        let mut bad = good.clone();
        bad[0] ^= 0xff;
        std::fs::write(&path, &bad).unwrap();
        assert!(Checkpoint::load(&path).is_err());

        // Unsupported version.
        let mut bad = good.clone();
        bad[4] = 99;
        std::fs::write(&path, &bad).unwrap();
        assert!(Checkpoint::load(&path).is_err());

        // Truncation at various depths.
        for cut in [10, good.len() / 2, good.len() - 3] {
            std::fs::write(&path, &good[..cut]).unwrap();
            assert!(Checkpoint::load(&path).is_err(), "cut at {cut} slipped through");
        }

        // A tampered parameter name no longer matches the config skeleton.
        let needle = b"fuse.gate";
        let at = good
            .windows(needle.len())
            .position(|w| w == needle)
            .expect("name present");
        let mut bad = good.clone();
        bad[at] = b'x';
        std::fs::write(&path, &bad).unwrap();
        assert!(Checkpoint::load(&path).is_err());
    }
}
