//! Bit-exact checkpoint persistence.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic   b"RPE2D1\n"
//! u32     config length, then canonical config text
//! u32     parameter count
//! per parameter:
//!   u16   name length, then UTF-8 name
//!   u8    rank, then u32 dims
//!   f32   values (row-major)
//! f32 x5  lr, beta1, beta2, eps, weight_decay
//! u64     optimizer step count
//! per parameter: f32 first moments, then f32 second moments
//! u64     global step
//! u64     base seed
//! u64 x4  rng state words
//! u32     CRC-32 of everything above
//! ```
//!
//! Loading rejects a bad magic, any trailing or missing bytes, and any CRC
//! mismatch, so a single flipped byte anywhere fails the load.

use std::fs;
use std::path::Path;

use crate::error::{CoreError, Result};
use crate::model::ParamStore;
use crate::numerics::AdamW;

pub const MAGIC: &[u8; 7] = b"RPE2D1\n";

#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub config_text: String,
    pub params: ParamStore,
    pub opt: AdamW,
    pub global_step: u64,
    pub base_seed: u64,
    pub rng_state: [u64; 4],
}

/// CRC-32 (IEEE, reflected, polynomial 0xEDB88320).
pub fn crc32(bytes: &[u8]) -> u32 {
    let mut table = [0u32; 256];
    for (i, slot) in table.iter_mut().enumerate() {
        let mut c = i as u32;
        for _ in 0..8 {
            c = if c & 1 != 0 {
                0xEDB8_8320 ^ (c >> 1)
            } else {
                c >> 1
            };
        }
        *slot = c;
    }
    let mut crc = 0xFFFF_FFFFu32;
    for &b in bytes {
        crc = table[((crc ^ b as u32) & 0xFF) as usize] ^ (crc >> 8);
    }
    crc ^ 0xFFFF_FFFF
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(CoreError::Persistence(format!(
                "truncated checkpoint: wanted {n} bytes at offset {}",
                self.pos
            )));
        }
        let s = &self.buf[self.pos..self.pos + n];
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

    fn f32(&mut self) -> Result<f32> {
        Ok(f32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn f32_vec(&mut self, n: usize) -> Result<Vec<f32>> {
        let raw = self.take(4 * n)?;
        Ok(raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        let cfg = self.config_text.as_bytes();
        out.extend_from_slice(&(cfg.len() as u32).to_le_bytes());
        out.extend_from_slice(cfg);

        out.extend_from_slice(&(self.params.len() as u32).to_le_bytes());
        for i in 0..self.params.len() {
            let name = self.params.name(i).as_bytes();
            out.extend_from_slice(&(name.len() as u16).to_le_bytes());
            out.extend_from_slice(name);
            let shape = self.params.shape(i);
            out.push(shape.len() as u8);
            for &d in shape {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            for &v in self.params.value(i) {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }

        for v in [
            self.opt.lr,
            self.opt.beta1,
            self.opt.beta2,
            self.opt.eps,
            self.opt.weight_decay,
        ] {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out.extend_from_slice(&self.opt.step_count.to_le_bytes());
        for i in 0..self.params.len() {
            for &v in &self.opt.first_moment[i] {
                out.extend_from_slice(&v.to_le_bytes());
            }
            for &v in &self.opt.second_moment[i] {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }

        out.extend_from_slice(&self.global_step.to_le_bytes());
        out.extend_from_slice(&self.base_seed.to_le_bytes());
        for w in self.rng_state {
            out.extend_from_slice(&w.to_le_bytes());
        }

        let crc = crc32(&out);
        out.extend_from_slice(&crc.to_le_bytes());
        out
    }

    pub fn from_bytes(buf: &[u8]) -> Result<Checkpoint> {
        if buf.len() < MAGIC.len() + 4 {
            return Err(CoreError::Persistence("checkpoint too short".into()));
        }
        if &buf[..MAGIC.len()] != MAGIC {
            return Err(CoreError::Persistence(
                "bad magic: not a checkpoint file".into(),
            ));
        }
        let body_len = buf.len() - 4;
        let stored_crc = u32::from_le_bytes(buf[body_len..].try_into().unwrap());
        let actual_crc = crc32(&buf[..body_len]);
        if stored_crc != actual_crc {
            return Err(CoreError::Persistence(format!(
                "checksum mismatch: stored {stored_crc:08x}, computed {actual_crc:08x}"
            )));
        }

        let mut r = Reader {
            buf: &buf[..body_len],
            pos: MAGIC.len(),
        };
        let cfg_len = r.u32()? as usize;
        let config_text = String::from_utf8(r.take(cfg_len)?.to_vec())
            .map_err(|_| CoreError::Persistence("config text is not UTF-8".into()))?;

        let param_count = r.u32()? as usize;
        let mut params = ParamStore::new();
        for _ in 0..param_count {
            let name_len = r.u16()? as usize;
            let name = String::from_utf8(r.take(name_len)?.to_vec())
                .map_err(|_| CoreError::Persistence("parameter name is not UTF-8".into()))?;
            let rank = r.u8()? as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(r.u32()? as usize);
            }
            let numel: usize = shape.iter().product();
            let values = r.f32_vec(numel)?;
            params.add(&name, shape, values);
        }

        let mut opt = AdamW::new(1.0, &params.param_lens());
        opt.lr = r.f32()?;
        opt.beta1 = r.f32()?;
        opt.beta2 = r.f32()?;
        opt.eps = r.f32()?;
        opt.weight_decay = r.f32()?;
        opt.step_count = r.u64()?;
        for i in 0..param_count {
            let n = params.value(i).len();
            opt.first_moment[i] = r.f32_vec(n)?;
            opt.second_moment[i] = r.f32_vec(n)?;
        }

        let global_step = r.u64()?;
        let base_seed = r.u64()?;
        let mut rng_state = [0u64; 4];
        for w in rng_state.iter_mut() {
            *w = r.u64()?;
        }

        if r.pos != body_len {
            return Err(CoreError::Persistence(format!(
                "{} trailing bytes after checkpoint payload",
                body_len - r.pos
            )));
        }

        Ok(Checkpoint {
            config_text,
            params,
            opt,
            global_step,
            base_seed,
            rng_state,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Checkpoint> {
        let buf = fs::read(path)
            .map_err(|e| CoreError::Persistence(format!("cannot read {}: {e}", path.display())))?;
        Self::from_bytes(&buf)
    }
}
