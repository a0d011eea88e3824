//! Checkpoint files: one JSON manifest line, then a little-endian `f64`
//! blob.
//!
//! Blob sections, in order: parameters (manifest `params` order), Adam first
//! moments, Adam second moments, then each inference volume level in
//! voxel-major layout. The volume lets `render` and `mesh` run from the
//! checkpoint alone.

use std::collections::BTreeMap;
use std::io::{BufRead, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::RunConfig;
use crate::error::{contract, format_err, Result};
use crate::pointcloud::PointCloud;
use crate::synth::Dataset;
use crate::tensor::Tensor;
use crate::volume::{DenseVolume, VolumeGeometry, VolumeStack};

use super::model::{Model, ParamInfo};
use super::optim::AdamW;

pub const FORMAT: &str = "render-pretrain-checkpoint";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LevelInfo {
    pub dims: [usize; 3],
    pub origin: [f64; 3],
    pub voxel: [f64; 3],
    pub channels: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RngState {
    pub seed: u64,
    /// Streams are keyed by `(seed, purpose, step)`; this is the next step.
    pub next_step: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub format: String,
    pub version: u32,
    pub step: usize,
    pub rng: RngState,
    pub input_channels: usize,
    /// SHA-256 of the training cloud.
    pub data_fingerprint: String,
    pub config: BTreeMap<String, String>,
    pub params: Vec<ParamInfo>,
    pub optimizer_steps: u64,
    pub volume: Vec<LevelInfo>,
    /// Total `f64` values in the blob.
    pub blob_len: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: RunConfig,
    pub model: Model,
    pub optimizer: AdamW,
    pub step: usize,
    pub input_channels: usize,
    pub data_fingerprint: String,
    pub volume: VolumeStack,
}

/// Hex SHA-256 of a cloud's coordinates and features.
pub fn cloud_fingerprint(pc: &PointCloud) -> String {
    let mut h = Sha256::new();
    h.update((pc.len() as u64).to_le_bytes());
    h.update((pc.channels() as u64).to_le_bytes());
    for p in pc.coords() {
        for v in p {
            h.update(v.to_le_bytes());
        }
    }
    for v in pc.feats() {
        h.update(v.to_le_bytes());
    }
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

impl Checkpoint {
    /// Fails unless `data` is the dataset this checkpoint was trained on.
    pub fn check_dataset(&self, data: &Dataset) -> Result<()> {
        if cloud_fingerprint(&data.cloud) != self.data_fingerprint {
            return Err(contract("checkpoint was trained on a different dataset"));
        }
        Ok(())
    }

    pub fn manifest(&self) -> Manifest {
        let volume: Vec<LevelInfo> = self
            .volume
            .levels
            .iter()
            .map(|v| LevelInfo {
                dims: v.dims,
                origin: v.origin,
                voxel: v.voxel,
                channels: v.channels(),
            })
            .collect();
        let n = self.model.param_count();
        Manifest {
            format: FORMAT.into(),
            version: VERSION,
            step: self.step,
            rng: RngState {
                seed: self.config.seed,
                next_step: self.step,
            },
            input_channels: self.input_channels,
            data_fingerprint: self.data_fingerprint.clone(),
            config: self.config.entries().into_iter().collect(),
            params: self.model.layout(),
            optimizer_steps: self.optimizer.step,
            blob_len: 3 * n
                + self
                    .volume
                    .levels
                    .iter()
                    .map(|v| v.data.len())
                    .sum::<usize>(),
            volume,
        }
    }

    pub fn write<W: Write>(&self, w: &mut W) -> Result<()> {
        let manifest = self.manifest();
        serde_json::to_writer(&mut *w, &manifest)?;
        w.write_all(b"\n")?;
        let mut buf = Vec::with_capacity(8 * manifest.blob_len);
        let params = self.model.flatten();
        for v in params
            .iter()
            .chain(&self.optimizer.m)
            .chain(&self.optimizer.v)
        {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        for l in &self.volume.levels {
            for v in l.data.data() {
                buf.extend_from_slice(&v.to_le_bytes());
            }
        }
        w.write_all(&buf)?;
        Ok(())
    }

    pub fn read<R: BufRead>(r: &mut R) -> Result<Self> {
        let mut line = String::new();
        r.read_line(&mut line)?;
        let m: Manifest = serde_json::from_str(line.trim_end())
            .map_err(|e| format_err(format!("manifest: {e}")))?;
        if m.format != FORMAT || m.version != VERSION {
            return Err(format_err(format!("not a version {VERSION} checkpoint")));
        }
        let mut config = RunConfig::default();
        for (k, v) in &m.config {
            config.set(k, v)?;
        }
        let mut model = Model::init(&config, m.input_channels)?;
        if model.layout() != m.params {
            return Err(format_err(
                "parameter layout disagrees with the config echo",
            ));
        }
        let n = model.param_count();
        let vol_len: usize = m
            .volume
            .iter()
            .map(|l| l.dims.iter().product::<usize>() * l.channels)
            .sum();
        if m.blob_len != 3 * n + vol_len {
            return Err(format_err("blob length disagrees with the manifest"));
        }
        let mut bytes = Vec::new();
        r.read_to_end(&mut bytes)?;
        if bytes.len() != 8 * m.blob_len {
            return Err(format_err(format!(
                "blob holds {} bytes, expected {}",
                bytes.len(),
                8 * m.blob_len
            )));
        }
        let vals: Vec<f64> = bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
            .collect();
        model.set_flat(&vals[..n])?;
        let mut optimizer = AdamW::new(n, config.adam_beta1, config.adam_beta2, config.adam_eps);
        optimizer.m.copy_from_slice(&vals[n..2 * n]);
        optimizer.v.copy_from_slice(&vals[2 * n..3 * n]);
        optimizer.step = m.optimizer_steps;
        let mut off = 3 * n;
        let mut levels = Vec::with_capacity(m.volume.len());
        for l in &m.volume {
            let geom = VolumeGeometry::new(l.dims, l.origin, l.voxel)?;
            let len = geom.voxel_count() * l.channels;
            let data = Tensor::from_vec(
                geom.voxel_count(),
                l.channels,
                vals[off..off + len].to_vec(),
            )?;
            levels.push(DenseVolume::from_tensor(geom, data)?);
            off += len;
        }
        Ok(Self {
            config,
            model,
            optimizer,
            step: m.step,
            input_channels: m.input_channels,
            data_fingerprint: m.data_fingerprint,
            volume: VolumeStack { levels },
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
        self.write(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::read(&mut std::io::BufReader::new(std::fs::File::open(path)?))
    }
}
