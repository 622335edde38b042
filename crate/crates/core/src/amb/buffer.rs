use std::path::Path;

use super::model::AutoencoderModel;
use crate::binio::{sha256_hex, Reader, Writer};
use crate::data::Trajectory;
use crate::error::{Error, Result};
use crate::nn::Tensor;

pub const MAGIC: &[u8; 4] = b"RFMB";
pub const VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum BufferSource {
    Expert,
    Dataset,
}

impl BufferSource {
    pub fn as_str(self) -> &'static str {
        match self {
            BufferSource::Expert => "expert",
            BufferSource::Dataset => "dataset",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "expert" => Ok(BufferSource::Expert),
            "dataset" => Ok(BufferSource::Dataset),
            _ => Err(Error::Config(format!("unknown buffer source `{s}` (expert|dataset)"))),
        }
    }

    fn code(self) -> u8 {
        match self {
            BufferSource::Expert => 0,
            BufferSource::Dataset => 1,
        }
    }
}

/// Provenance of one stored trajectory; rows appear in trajectory order.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SourceTrajectory {
    pub id: u32,
    pub length: u32,
    pub episode_seed: u64,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Retrieval {
    pub index: usize,
    pub distance_sq: f64,
}

/// Frozen latent rows of stored timesteps plus the model that produced them.
#[derive(Clone, Debug)]
pub struct MemoryBuffer {
    latent: usize,
    rows: Vec<f64>,
    sources: Vec<SourceTrajectory>,
    source: BufferSource,
    model: AutoencoderModel,
    /// Decoded action `a'` of every row, cached at build time.
    actions: Vec<f64>,
}

impl MemoryBuffer {
    /// Encodes every timestep of `trajectories`, in order. `ids` label the
    /// trajectories (defaults to their positions).
    pub fn build(
        trajectories: &[Trajectory],
        ids: Option<&[u32]>,
        model: AutoencoderModel,
        source: BufferSource,
    ) -> Result<Self> {
        if !model.is_frozen() {
            return Err(Error::State("buffers are built from frozen autoencoders only".into()));
        }
        if trajectories.is_empty() {
            return Err(Error::Argument("buffer needs at least one trajectory".into()));
        }
        if let Some(ids) = ids {
            if ids.len() != trajectories.len() {
                return Err(Error::dim("MemoryBuffer::build", &[ids.len()], &[trajectories.len()]));
            }
        }
        let mut rows = Vec::new();
        let mut sources = Vec::with_capacity(trajectories.len());
        for (i, t) in trajectories.iter().enumerate() {
            let latent = model.encode(&t.returns_to_go, &t.observations, &t.actions)?;
            rows.extend_from_slice(latent.data());
            sources.push(SourceTrajectory {
                id: ids.map_or(i as u32, |ids| ids[i]),
                length: t.len() as u32,
                episode_seed: t.episode_seed,
            });
        }
        Self::assemble(model.config().latent, rows, sources, source, model)
    }

    /// Wraps precomputed latent rows (`M x N_latent`, row-major). An empty
    /// matrix is allowed; retrieval from it is a state error.
    pub fn from_rows(
        rows: Vec<f64>,
        sources: Vec<SourceTrajectory>,
        model: AutoencoderModel,
        source: BufferSource,
    ) -> Result<Self> {
        if !model.is_frozen() {
            return Err(Error::State("buffers are built from frozen autoencoders only".into()));
        }
        let latent = model.config().latent;
        if rows.len() % latent != 0 {
            return Err(Error::dim("MemoryBuffer::from_rows", &[rows.len()], &[rows.len() / latent, latent]));
        }
        let m = rows.len() / latent;
        if sources.iter().map(|s| s.length as usize).sum::<usize>() != m {
            return Err(Error::Argument("source lengths must sum to the row count".into()));
        }
        Self::assemble(latent, rows, sources, source, model)
    }

    fn assemble(
        latent: usize,
        rows: Vec<f64>,
        sources: Vec<SourceTrajectory>,
        source: BufferSource,
        model: AutoencoderModel,
    ) -> Result<Self> {
        let m = rows.len() / latent;
        let actions = if m == 0 {
            Vec::new()
        } else {
            model.decode_action(&Tensor::new(vec![m, latent], rows.clone())?)?
        };
        Ok(Self {
            latent,
            rows,
            sources,
            source,
            model,
            actions,
        })
    }

    pub fn len(&self) -> usize {
        self.rows.len() / self.latent
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn latent_dim(&self) -> usize {
        self.latent
    }

    pub fn source(&self) -> BufferSource {
        self.source
    }

    pub fn sources(&self) -> &[SourceTrajectory] {
        &self.sources
    }

    pub fn model(&self) -> &AutoencoderModel {
        &self.model
    }

    pub fn rows(&self) -> &[f64] {
        &self.rows
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.rows[i * self.latent..(i + 1) * self.latent]
    }

    /// Cached `a' = ActDec(row i)`.
    pub fn decoded_action(&self, i: usize) -> &[f64] {
        let ad = self.model.act_dim();
        &self.actions[i * ad..(i + 1) * ad]
    }

    /// Every cached decoded action, `M x act_dim` row-major.
    pub fn decoded_actions(&self) -> &[f64] {
        &self.actions
    }

    /// `(trajectory id, timestep)` of row `i`.
    pub fn provenance(&self, mut i: usize) -> Option<(u32, u32)> {
        for s in &self.sources {
            if i < s.length as usize {
                return Some((s.id, i as u32));
            }
            i -= s.length as usize;
        }
        None
    }

    fn check_query(&self, query: &[f64]) -> Result<()> {
        if self.is_empty() {
            return Err(Error::State("retrieval from an empty buffer".into()));
        }
        if query.len() != self.latent {
            return Err(Error::dim("retrieve", &[query.len()], &[self.latent]));
        }
        Ok(())
    }

    /// Nearest row by squared L2 distance, lowest index on ties. Scans every
    /// row but abandons a row once its partial sum reaches the best so far;
    /// partial sums accumulate in the same order as the full distance, so the
    /// answer equals [`MemoryBuffer::retrieve_exhaustive`] exactly.
    pub fn retrieve(&self, query: &[f64]) -> Result<Retrieval> {
        self.check_query(query)?;
        let mut best = Retrieval {
            index: 0,
            distance_sq: f64::INFINITY,
        };
        'rows: for (i, row) in self.rows.chunks_exact(self.latent).enumerate() {
            let mut d = 0.0;
            for (q, r) in query.iter().zip(row) {
                let diff = q - r;
                d += diff * diff;
                if d >= best.distance_sq {
                    continue 'rows;
                }
            }
            best = Retrieval {
                index: i,
                distance_sq: d,
            };
        }
        if !best.distance_sq.is_finite() {
            return Err(Error::Argument("query produced no finite distance".into()));
        }
        Ok(best)
    }

    /// Reference scan: every distance in full, then the first minimum.
    pub fn retrieve_exhaustive(&self, query: &[f64]) -> Result<Retrieval> {
        self.check_query(query)?;
        let dists: Vec<f64> = self
            .rows
            .chunks_exact(self.latent)
            .map(|row| query.iter().zip(row).map(|(q, r)| (q - r) * (q - r)).sum())
            .collect();
        let mut best = 0;
        for (i, d) in dists.iter().enumerate() {
            if *d < dists[best] {
                best = i;
            }
        }
        Ok(Retrieval {
            index: best,
            distance_sq: dists[best],
        })
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut w = Writer::new();
        w.bytes(MAGIC);
        w.u32(VERSION);
        w.u32(self.latent as u32);
        w.u64(self.len() as u64);
        w.u8(self.source.code());
        w.f64s(&self.rows);
        w.u32(self.sources.len() as u32);
        for s in &self.sources {
            w.u32(s.id);
            w.u32(s.length);
            w.u64(s.episode_seed);
        }
        self.model.write(&mut w);
        w.finish()
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes);
        r.expect_magic(MAGIC)?;
        r.expect_version(VERSION)?;
        let latent = r.u32()? as usize;
        let m = r.u64()? as usize;
        if latent == 0 || m == 0 {
            return Err(r.err("empty buffer"));
        }
        let source = match r.u8()? {
            0 => BufferSource::Expert,
            1 => BufferSource::Dataset,
            _ => return Err(r.err("unknown buffer source")),
        };
        let rows = r.f64s(
            m.checked_mul(latent)
                .ok_or_else(|| r.err("row matrix size overflows"))?,
        )?;
        let count = r.u32()? as usize;
        let mut sources = Vec::new();
        for _ in 0..count {
            sources.push(SourceTrajectory {
                id: r.u32()?,
                length: r.u32()?,
                episode_seed: r.u64()?,
            });
        }
        if sources.iter().map(|s| s.length as usize).sum::<usize>() != m {
            return Err(r.err("metadata lengths disagree with the row count"));
        }
        let model = AutoencoderModel::read(&mut r)?;
        r.expect_end()?;
        if model.config().latent != latent {
            return Err(r.err("embedded model latent width disagrees with the rows"));
        }
        let at = r.offset();
        Self::assemble(latent, rows, sources, source, model).map_err(|e| Error::format(at, e.to_string()))
    }

    /// SHA-256 of the serialized buffer.
    pub fn hash(&self) -> String {
        sha256_hex(&self.encode())
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
