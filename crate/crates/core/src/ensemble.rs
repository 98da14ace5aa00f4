//! Cluster-specific autoencoders used as reconstruction-error background models.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use crate::autoencoder::{train_ae, AeModel, TrainConfig};
use crate::binio::{Reader, Writer};
use crate::error::{Error, Result};
use crate::image::GrayImage;
use crate::kmeans::kmeans;

const ENSEMBLE_MAGIC: &[u8; 8] = b"LCDICDEN";
const ENSEMBLE_VERSION: u32 = 1;
const KMEANS_MAX_ITERS: usize = 100;

#[derive(Debug, Clone, PartialEq)]
pub struct AeEnsemble {
    models: Vec<AeModel>,
    assignment: BTreeMap<String, usize>,
}

impl AeEnsemble {
    pub fn new(models: Vec<AeModel>, assignment: BTreeMap<String, usize>) -> Result<Self> {
        if models.is_empty() {
            return Err(Error::InvalidArgument("ensemble needs at least one model".into()));
        }
        let side = models[0].input_side();
        if models.iter().any(|m| m.input_side() != side) {
            return Err(Error::InvalidArgument("ensemble models differ in input side".into()));
        }
        let mut used = vec![false; models.len()];
        for (id, &c) in &assignment {
            *used.get_mut(c).ok_or_else(|| {
                Error::InvalidArgument(format!("`{id}` assigned to missing cluster {c}"))
            })? = true;
        }
        if let Some(c) = used.iter().position(|u| !u) {
            return Err(Error::InvalidArgument(format!("cluster {c} has no images")));
        }
        Ok(Self { models, assignment })
    }

    pub fn k(&self) -> usize {
        self.models.len()
    }

    pub fn input_side(&self) -> usize {
        self.models[0].input_side()
    }

    pub fn models(&self) -> &[AeModel] {
        &self.models
    }

    pub fn assignment(&self) -> &BTreeMap<String, usize> {
        &self.assignment
    }

    /// The background model responsible for reference image `id`.
    pub fn model_for(&self, id: &str) -> Result<&AeModel> {
        let c = self
            .assignment
            .get(id)
            .ok_or_else(|| Error::UnknownId(id.to_string()))?;
        Ok(&self.models[*c])
    }

    pub fn write_to<W: Write>(&self, out: W) -> Result<()> {
        let mut w = Writer::new(out);
        w.bytes(ENSEMBLE_MAGIC)?;
        w.u32(ENSEMBLE_VERSION)?;
        w.u32(self.models.len() as u32)?;
        for m in &self.models {
            let mut buf = Vec::new();
            m.write_to(&mut buf)?;
            w.u64(buf.len() as u64)?;
            w.bytes(&buf)?;
        }
        w.u32(self.assignment.len() as u32)?;
        for (id, &c) in &self.assignment {
            w.str(id)?;
            w.u32(c as u32)?;
        }
        Ok(())
    }

    pub fn read_from<R: Read>(input: R) -> Result<Self> {
        let mut r = Reader::new(input, "autoencoder ensemble");
        r.expect_magic(ENSEMBLE_MAGIC)?;
        let version = r.u32()?;
        if version != ENSEMBLE_VERSION {
            return Err(r.error(format!("unsupported version {version}")));
        }
        let k = r.u32()? as usize;
        let mut models = Vec::with_capacity(k);
        for _ in 0..k {
            let len = r.u64()? as usize;
            models.push(AeModel::read_from(r.bytes(len)?.as_slice())?);
        }
        let n = r.u32()? as usize;
        let mut assignment = BTreeMap::new();
        for _ in 0..n {
            let id = r.str()?;
            let c = r.u32()? as usize;
            assignment.insert(id, c);
        }
        Self::new(models, assignment).map_err(|e| r.error(e.to_string()))
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut buf = Vec::new();
        self.write_to(&mut buf)?;
        std::fs::write(path, buf).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::read_from(bytes.as_slice())
    }
}

/// Partitions the reference images with k-means over their downsampled
/// pixels and trains one autoencoder per cluster.
pub fn train_ensemble(
    references: &[(String, GrayImage)],
    k: usize,
    input_side: usize,
    config: &TrainConfig,
) -> Result<AeEnsemble> {
    let side = input_side as u32;
    let inputs: Vec<Vec<f64>> = references
        .iter()
        .map(|(_, img)| img.resize(side, side).into_pixels())
        .collect();
    let clusters = kmeans(&inputs, k, config.seed, KMEANS_MAX_ITERS)?;
    let mut models = Vec::with_capacity(k);
    for c in 0..k {
        let members: Vec<Vec<f64>> = clusters
            .assignment
            .iter()
            .zip(&inputs)
            .filter(|(&a, _)| a == c)
            .map(|(_, x)| x.clone())
            .collect();
        let cfg = TrainConfig {
            seed: config.seed.wrapping_add(c as u64 + 1),
            ..config.clone()
        };
        log::info!("training background model {}/{k} on {} images", c + 1, members.len());
        models.push(train_ae(&members, input_side, &cfg)?.model);
    }
    let mut assignment = BTreeMap::new();
    for ((id, _), &c) in references.iter().zip(&clusters.assignment) {
        if assignment.insert(id.clone(), c).is_some() {
            return Err(Error::DuplicateId(id.clone()));
        }
    }
    AeEnsemble::new(models, assignment)
}
