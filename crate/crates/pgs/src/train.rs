//! Training from image folders, writing a loss log and a checkpoint.

use std::fs::File;
use std::path::{Path, PathBuf};

use pgs_core::config::{ArchConfig, Mode, PipelineConfig, TrainConfig};
use pgs_core::feature_codec::LossNetwork;
use pgs_core::params::ModelParameters;
use pgs_core::trainer::{StepReport, Trainer};

use crate::archive::Archive;
use crate::checkpoint::{save_checkpoint, Provenance};
use crate::dataset::load_dir;
use crate::error::{PgsError, Result};

pub const CHECKPOINT_FILE: &str = "checkpoint.pgs";
pub const LOSS_LOG_FILE: &str = "loss.csv";
pub const DIAGNOSTICS_FILE: &str = "diagnostics.txt";

#[derive(Clone, Debug)]
pub struct TrainJob {
    pub arch: ArchConfig,
    pub train: TrainConfig,
    pub pipeline: PipelineConfig,
    pub content_dir: PathBuf,
    pub style_dir: PathBuf,
    pub out_dir: PathBuf,
    /// Pretrained VGG-19 archive, full mode only.
    pub vgg_weights: Option<PathBuf>,
}

#[derive(Debug)]
pub struct TrainOutcome {
    pub params: ModelParameters,
    pub log: Vec<StepReport>,
    pub checkpoint: PathBuf,
    pub loss_log: PathBuf,
}

/// The frozen loss network `arch` calls for.
pub fn loss_network(arch: &ArchConfig, vgg_weights: Option<&Path>) -> Result<LossNetwork> {
    match (arch.mode, vgg_weights) {
        (Mode::Full, Some(path)) => {
            let archive = Archive::load(path)?;
            Ok(LossNetwork::for_arch(arch, Some(&archive.arrays))?)
        }
        (Mode::Full, None) => Err(PgsError::Usage(
            "full mode needs --vgg-weights pointing at a VGG-19 archive".into(),
        )),
        (Mode::Tiny, _) => Ok(LossNetwork::for_arch(arch, None)?),
    }
}

struct LossLog {
    writer: csv::Writer<File>,
    path: PathBuf,
}

impl LossLog {
    fn create(path: PathBuf) -> Result<Self> {
        let mut writer = csv::Writer::from_path(&path).map_err(|e| csv_error(&path, e))?;
        writer
            .write_record(["iteration", "content_loss", "style_loss", "total"])
            .map_err(|e| csv_error(&path, e))?;
        Ok(Self { writer, path })
    }

    fn push(&mut self, r: &StepReport) -> Result<()> {
        let row = [
            r.iteration.to_string(),
            r.loss.content.to_string(),
            r.loss.style.to_string(),
            r.loss.total.to_string(),
        ];
        self.writer.write_record(&row).map_err(|e| csv_error(&self.path, e))?;
        self.writer.flush().map_err(|e| PgsError::io(&self.path, e))
    }
}

fn csv_error(path: &Path, e: csv::Error) -> PgsError {
    PgsError::io(path, std::io::Error::other(e))
}

/// Runs the job; `on_step` sees every report as it is logged.
pub fn run_training(job: &TrainJob, mut on_step: impl FnMut(&StepReport)) -> Result<TrainOutcome> {
    let side = job.arch.crop_side() as u32;
    let content = load_dir(&job.content_dir, side, job.train.batch_size)?;
    let style = load_dir(&job.style_dir, side, job.train.batch_size)?;
    let net = loss_network(&job.arch, job.vgg_weights.as_deref())?;
    let params = ModelParameters::init(&job.arch, &net, job.train.seed)?;
    std::fs::create_dir_all(&job.out_dir).map_err(|e| PgsError::io(&job.out_dir, e))?;

    let mut log_file = LossLog::create(job.out_dir.join(LOSS_LOG_FILE))?;
    let mut trainer = Trainer::new(params, net, job.train.clone(), job.pipeline.clone(), content, style)?;
    let mut log = Vec::new();
    let mut write_error = None;
    let result = trainer.run(|r| {
        if write_error.is_none() {
            write_error = log_file.push(r).err();
        }
        on_step(r);
        log.push(*r);
    });
    if let Some(e) = write_error {
        return Err(e);
    }
    if let Err(e) = result {
        if matches!(e.root(), pgs_core::Error::NonFinite(_)) {
            let path = job.out_dir.join(DIAGNOSTICS_FILE);
            let text = format!("training aborted at iteration {}\n{e}\n", trainer.iteration() + 1);
            std::fs::write(&path, text).map_err(|io| PgsError::io(&path, io))?;
        }
        return Err(e.into());
    }

    let checkpoint = job.out_dir.join(CHECKPOINT_FILE);
    let provenance = Provenance {
        iterations_done: trainer.iteration(),
        train: Some(job.train.clone()),
        pipeline: Some(job.pipeline.clone()),
    };
    let params = trainer.into_params();
    save_checkpoint(&params, &provenance, &checkpoint)?;
    Ok(TrainOutcome {
        params,
        log,
        checkpoint,
        loss_log: log_file.path,
    })
}
