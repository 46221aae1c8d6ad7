//! Binary checkpoints: every parameter, optimizer moment, RNG position and
//! epoch counter needed to resume a run bit-for-bit.
//!
//! Layout (little-endian): `CMSTCKPT`, version byte, 32-byte config hash,
//! u64 main epochs done, u64 pretrain epochs done, u32 RNG count followed by
//! (u32 label length, label, u128 word position) per stream, then u32 block
//! count followed by (u64 length, f64 values) per block.

use std::path::Path;

use crate::error::{CmstError, Result};
use crate::nn::{MlpNetwork, Optimizer};
use crate::training::trainer::Trainer;

pub const MAGIC: &[u8; 8] = b"CMSTCKPT";
pub const VERSION: u8 = 1;

/// Decoded checkpoint contents, independent of any trainer.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config_hash: [u8; 32],
    pub epoch: u64,
    pub pretrain_done: u64,
    pub rngs: Vec<(String, u128)>,
    pub blocks: Vec<Vec<f64>>,
}

impl Checkpoint {
    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.push(VERSION);
        out.extend_from_slice(&self.config_hash);
        out.extend_from_slice(&self.epoch.to_le_bytes());
        out.extend_from_slice(&self.pretrain_done.to_le_bytes());
        out.extend_from_slice(&(self.rngs.len() as u32).to_le_bytes());
        for (label, pos) in &self.rngs {
            out.extend_from_slice(&(label.len() as u32).to_le_bytes());
            out.extend_from_slice(label.as_bytes());
            out.extend_from_slice(&pos.to_le_bytes());
        }
        out.extend_from_slice(&(self.blocks.len() as u32).to_le_bytes());
        for block in &self.blocks {
            out.extend_from_slice(&(block.len() as u64).to_le_bytes());
            for x in block {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
        out
    }

    pub fn decode(bytes: &[u8], path: &Path) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0, path };
        if r.take(8)? != MAGIC {
            return Err(CmstError::BadHeader {
                path: path.to_path_buf(),
                reason: "missing CMSTCKPT magic".into(),
            });
        }
        let version = r.take(1)?[0];
        if version != VERSION {
            return Err(CmstError::CheckpointMismatch(format!(
                "checkpoint version {version}, expected {VERSION}"
            )));
        }
        let config_hash: [u8; 32] = r.take(32)?.try_into().expect("32 bytes");
        let epoch = r.u64()?;
        let pretrain_done = r.u64()?;
        let n_rngs = r.u32()? as usize;
        let mut rngs = Vec::with_capacity(n_rngs.min(64));
        for _ in 0..n_rngs {
            let len = r.u32()? as usize;
            let label = String::from_utf8(r.take(len)?.to_vec()).map_err(|_| CmstError::BadHeader {
                path: path.to_path_buf(),
                reason: "RNG label is not UTF-8".into(),
            })?;
            let pos = u128::from_le_bytes(r.take(16)?.try_into().expect("16 bytes"));
            rngs.push((label, pos));
        }
        let n_blocks = r.u32()? as usize;
        let mut blocks = Vec::with_capacity(n_blocks.min(1024));
        for _ in 0..n_blocks {
            let len = r.u64()? as usize;
            let raw = r.take(len.checked_mul(8).ok_or_else(|| r.truncated(usize::MAX))?)?;
            blocks.push(
                raw.chunks_exact(8)
                    .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                    .collect(),
            );
        }
        if r.pos != bytes.len() {
            return Err(CmstError::DimensionMismatch {
                path: path.to_path_buf(),
                reason: format!("{} trailing bytes", bytes.len() - r.pos),
            });
        }
        Ok(Checkpoint {
            config_hash,
            epoch,
            pretrain_done,
            rngs,
            blocks,
        })
    }

    pub fn read(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| CmstError::io(path, e))?;
        Self::decode(&bytes, path)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.encode()).map_err(|e| CmstError::io(path, e))
    }
}

struct Reader<'b> {
    bytes: &'b [u8],
    pos: usize,
    path: &'b Path,
}

impl<'b> Reader<'b> {
    fn truncated(&self, need: usize) -> CmstError {
        CmstError::Truncated {
            path: self.path.to_path_buf(),
            expected: self.pos.saturating_add(need),
            found: self.bytes.len(),
        }
    }

    fn take(&mut self, n: usize) -> Result<&'b [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(self.truncated(n));
        }
        let out = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

fn push_net(blocks: &mut Vec<Vec<f64>>, net: &MlpNetwork<f64>) {
    blocks.push(net.flat_params());
}

fn push_opt(blocks: &mut Vec<Vec<f64>>, opt: &Optimizer<f64>) {
    blocks.push(vec![opt.step as f64, opt.learning_rate, opt.first_moment.len() as f64]);
    blocks.extend(opt.first_moment.iter().cloned());
    blocks.extend(opt.second_moment.iter().cloned());
}

struct BlockCursor<I> {
    blocks: I,
}

impl<I: Iterator<Item = Vec<f64>>> BlockCursor<I> {
    fn next(&mut self) -> Result<Vec<f64>> {
        self.blocks
            .next()
            .ok_or_else(|| CmstError::CheckpointMismatch("checkpoint has too few blocks".into()))
    }

    fn net(&mut self, net: &mut MlpNetwork<f64>) -> Result<()> {
        let block = self.next()?;
        net.set_flat_params(&block)
            .map_err(|_| CmstError::CheckpointMismatch("parameter block does not fit the network".into()))
    }

    fn opt(&mut self, opt: &mut Optimizer<f64>, net: &MlpNetwork<f64>) -> Result<()> {
        let head = self.next()?;
        if head.len() != 3 {
            return Err(CmstError::CheckpointMismatch("malformed optimizer header".into()));
        }
        let n = head[2] as usize;
        let shapes: Vec<usize> = net.params().iter().map(|p| p.len()).collect();
        if n != 0 && n != shapes.len() {
            return Err(CmstError::CheckpointMismatch("optimizer moments do not fit the network".into()));
        }
        let mut take = |count: usize| -> Result<Vec<Vec<f64>>> {
            let mut out = Vec::with_capacity(count);
            for (k, &len) in shapes.iter().take(count).enumerate() {
                let block = self.next()?;
                if block.len() != len {
                    return Err(CmstError::CheckpointMismatch(format!("optimizer moment {k} has wrong length")));
                }
                out.push(block);
            }
            Ok(out)
        };
        let first = take(n)?;
        let second = take(n)?;
        opt.step = head[0] as u64;
        opt.learning_rate = head[1];
        opt.first_moment = first;
        opt.second_moment = second;
        Ok(())
    }
}

impl Trainer<'_> {
    /// Snapshot of the complete training state.
    pub fn checkpoint(&self) -> Checkpoint {
        let mut blocks = Vec::new();
        let m = &self.models;
        for h in [&m.h_v, &m.h_t].into_iter().flatten() {
            push_net(&mut blocks, &h.net);
        }
        push_net(&mut blocks, &m.generators.g_v);
        push_net(&mut blocks, &m.generators.g_t);
        push_net(&mut blocks, &m.classifier.net);
        push_net(&mut blocks, &m.discriminator.net);
        let o = &self.opts;
        for opt in [&o.h_v, &o.h_t].into_iter().flatten() {
            push_opt(&mut blocks, opt);
        }
        for opt in [&o.g_v, &o.g_t, &o.classifier, &o.discriminator] {
            push_opt(&mut blocks, opt);
        }
        Checkpoint {
            config_hash: self.config().model_hash(),
            epoch: self.epoch as u64,
            pretrain_done: self.pretrain_done as u64,
            rngs: self.rngs.all().iter().map(|r| (r.label().to_string(), r.word_pos())).collect(),
            blocks,
        }
    }

    /// Restores state saved by [`Trainer::checkpoint`]. Refuses checkpoints
    /// written under a different model configuration.
    pub fn restore(&mut self, ckpt: &Checkpoint) -> Result<()> {
        if ckpt.config_hash != self.config().model_hash() {
            return Err(CmstError::CheckpointMismatch(format!(
                "checkpoint config hash {} does not match {}",
                hex::encode(ckpt.config_hash),
                self.config().model_hash_hex()
            )));
        }
        if ckpt.rngs.len() != 4 {
            return Err(CmstError::CheckpointMismatch("unexpected RNG stream count".into()));
        }
        for (rng, (label, _)) in self.rngs.all().iter().zip(&ckpt.rngs) {
            if rng.label() != label {
                return Err(CmstError::CheckpointMismatch(format!("unexpected RNG stream `{label}`")));
            }
        }
        // restore into a copy so a failure leaves the trainer untouched
        let mut models = self.models.clone();
        let mut opts = self.opts.clone();
        let mut cur = BlockCursor {
            blocks: ckpt.blocks.iter().cloned(),
        };
        for h in [&mut models.h_v, &mut models.h_t].into_iter().flatten() {
            cur.net(&mut h.net)?;
        }
        cur.net(&mut models.generators.g_v)?;
        cur.net(&mut models.generators.g_t)?;
        cur.net(&mut models.classifier.net)?;
        cur.net(&mut models.discriminator.net)?;
        for (opt, h) in [(&mut opts.h_v, &models.h_v), (&mut opts.h_t, &models.h_t)] {
            if let (Some(opt), Some(h)) = (opt.as_mut(), h.as_ref()) {
                cur.opt(opt, &h.net)?;
            }
        }
        cur.opt(&mut opts.g_v, &models.generators.g_v)?;
        cur.opt(&mut opts.g_t, &models.generators.g_t)?;
        cur.opt(&mut opts.classifier, &models.classifier.net)?;
        cur.opt(&mut opts.discriminator, &models.discriminator.net)?;
        if cur.blocks.next().is_some() {
            return Err(CmstError::CheckpointMismatch("checkpoint has extra blocks".into()));
        }
        self.models = models;
        self.opts = opts;
        for (rng, (_, pos)) in self.rngs.all_mut().into_iter().zip(&ckpt.rngs) {
            rng.set_word_pos(*pos);
        }
        self.epoch = ckpt.epoch as usize;
        self.pretrain_done = ckpt.pretrain_done as usize;
        self.invalidate_frozen();
        Ok(())
    }

    pub fn save_checkpoint(&self, path: &Path) -> Result<()> {
        self.checkpoint().write(path)
    }

    pub fn load_checkpoint(&mut self, path: &Path) -> Result<()> {
        self.restore(&Checkpoint::read(path)?)
    }
}
