//! Model checkpoints: every parameter array plus a TOML snapshot of the
//! configuration that produced them.

use std::path::Path;

use pgs_core::config::{ArchConfig, PipelineConfig, TrainConfig};
use pgs_core::params::ModelParameters;

use crate::archive::Archive;
use crate::error::{PgsError, Result};
use crate::settings::{CheckpointMeta, Snapshot};

/// Extra context recorded next to the parameters.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Provenance {
    pub iterations_done: usize,
    pub train: Option<TrainConfig>,
    pub pipeline: Option<PipelineConfig>,
}

pub fn to_archive(params: &ModelParameters, provenance: &Provenance) -> Archive {
    let snapshot = Snapshot {
        checkpoint: CheckpointMeta {
            parameter_version: params.version(),
            iterations_done: provenance.iterations_done,
        },
        arch: params.arch().into(),
        train: provenance.train.as_ref().map(Into::into),
        pipeline: provenance.pipeline.as_ref().map(Into::into),
    };
    Archive {
        header: snapshot.to_toml(),
        arrays: params.arrays().clone(),
    }
}

pub fn save_checkpoint(params: &ModelParameters, provenance: &Provenance, path: &Path) -> Result<()> {
    to_archive(params, provenance).save(path)
}

pub fn from_archive(archive: Archive, path: &Path) -> Result<(ModelParameters, Snapshot)> {
    let snapshot =
        Snapshot::from_toml(&archive.header).map_err(|e| PgsError::format(path, format!("config snapshot: {e}")))?;
    let arch = ArchConfig::try_from(&snapshot.arch)?;
    let params = ModelParameters::from_arrays(arch, snapshot.checkpoint.parameter_version, archive.arrays).map_err(
        |e| match e {
            pgs_core::Error::Incompatible(msg) => PgsError::Incompatible(format!("{}: {msg}", path.display())),
            other => other.into(),
        },
    )?;
    Ok((params, snapshot))
}

pub fn load_checkpoint(path: &Path) -> Result<(ModelParameters, Snapshot)> {
    from_archive(Archive::load(path)?, path)
}

/// Loads a checkpoint and checks it against an expected architecture,
/// naming every array whose shape disagrees.
pub fn load_checkpoint_for(path: &Path, arch: &ArchConfig) -> Result<ModelParameters> {
    let (params, _) = load_checkpoint(path)?;
    params.check_layout(arch).map_err(|e| match e {
        pgs_core::Error::Incompatible(msg) => PgsError::Incompatible(format!(
            "{} holds a {} model but a {} model was requested: {msg}",
            path.display(),
            params.arch().mode,
            arch.mode
        )),
        other => other.into(),
    })?;
    Ok(params)
}
