use std::path::Path;

use super::model::{PolicyConfig, PolicyMode, PolicyModel};
use crate::binio::{Reader, Writer};
use crate::data::io::{read_stats, write_stats};
use crate::data::NormStats;
use crate::error::{Error, Result};
use crate::nn::{checkpoint, DropoutRates};

pub const MAGIC: &[u8; 4] = b"RFPC";
pub const VERSION: u32 = 1;

/// A trained policy plus what evaluation needs to reproduce its inputs.
#[derive(Clone, Debug)]
pub struct PolicyCheckpoint {
    pub model: PolicyModel,
    /// Observation statistics and return scale of the training dataset.
    pub stats: NormStats,
    pub config_hash: String,
    /// Hash of the buffer the policy trained against, reframe only.
    pub buffer_hash: Option<String>,
}

impl PolicyCheckpoint {
    pub fn encode(&self) -> Vec<u8> {
        let m = &self.model;
        let c = m.config();
        let mut w = Writer::new();
        w.bytes(MAGIC);
        w.u32(VERSION);
        w.u8(m.mode().code());
        w.str(&self.config_hash);
        w.str(self.buffer_hash.as_deref().unwrap_or(""));
        for v in [c.d_model, c.layers, c.heads, c.context, c.max_ep_len] {
            w.u32(v as u32);
        }
        w.f64(c.dropout.hidden);
        w.f64(c.dropout.attention);
        w.f64(c.align_lambda);
        let (qi, lat) = m.query_dims();
        for v in [m.obs_dim(), m.act_dim(), qi, lat] {
            w.u32(v as u32);
        }
        let (lo, hi) = m.action_bounds();
        w.f64s(lo);
        w.f64s(hi);
        write_stats(&mut w, &self.stats);
        w.blob(&checkpoint::encode(&m.params().export_values()));
        w.finish()
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes);
        r.expect_magic(MAGIC)?;
        r.expect_version(VERSION)?;
        let mode = PolicyMode::from_code(r.u8()?).ok_or_else(|| r.err("unknown policy mode"))?;
        let config_hash = r.str()?;
        let buffer_hash = Some(r.str()?).filter(|s| !s.is_empty());
        let u32s = |r: &mut Reader<'_>, n: usize| -> Result<Vec<usize>> {
            (0..n)
                .map(|_| {
                    let d = r.u32()? as usize;
                    if d > 1 << 20 {
                        return Err(r.err("implausible policy dimension"));
                    }
                    Ok(d)
                })
                .collect()
        };
        let arch = u32s(&mut r, 5)?;
        let dropout = DropoutRates {
            hidden: r.f64()?,
            attention: r.f64()?,
        };
        let align_lambda = r.f64()?;
        let config = PolicyConfig {
            d_model: arch[0],
            layers: arch[1],
            heads: arch[2],
            context: arch[3],
            max_ep_len: arch[4],
            dropout,
            align_lambda,
        };
        let io = u32s(&mut r, 4)?;
        let (obs_dim, act_dim, query_in, latent) = (io[0], io[1], io[2], io[3]);
        let lo = r.f64s(act_dim)?;
        let hi = r.f64s(act_dim)?;
        let stats = read_stats(&mut r)?;
        let at = r.offset();
        let blob = r.blob()?;
        r.expect_end()?;
        let tensors = checkpoint::decode(blob).map_err(|e| Error::format(at, format!("embedded checkpoint: {e}")))?;
        let mut model = PolicyModel::build(config, mode, (query_in, latent), lo, hi, obs_dim, 0)
            .map_err(|e| Error::format(at, e.to_string()))?;
        model
            .params_mut()
            .load_values(tensors)
            .map_err(|e| Error::format(at, e.to_string()))?;
        Ok(Self {
            model,
            stats,
            config_hash,
            buffer_hash,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.encode())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| match e.kind() {
            std::io::ErrorKind::NotFound => Error::MissingArtifact(path.to_path_buf()),
            _ => Error::Io(e),
        })?;
        Self::decode(&bytes)
    }
}
