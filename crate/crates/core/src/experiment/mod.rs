//! Reproducible experiments: configuration, data preparation, the staged
//! runner and the CSV/JSON artifacts it leaves behind.

mod config;
mod report;
mod run;

use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::attack::AttackError;
use crate::data::{gen_shapes_dataset, load_images, ClientDataset, DataError};
use crate::defenses::DefenseError;
use crate::fl::FlError;
use crate::flow::FlowError;
use crate::nn::NnError;

pub use config::{
    AttackSection, Cell, DataConfig, DataSource, DefenseEntry, DefenseSection, ExperimentConfig, FlConfig, FlowConfig, ModelConfig, SweepConfig,
    TargetConfig,
};
pub use report::{read_metrics_csv, report, verify_run_dir, write_metrics_csv, MetricRow, METRICS_HEADER, SUMMARY_HEADER, SWEEP_HEADER};
pub use run::{gen_data, probe_flow, run_experiment, train_fl, train_flow, CellError, RunRecord, MSF_LEVELS, MSF_TIMES};

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error("invalid experiment config: {0}")]
    Config(String),
    #[error("{0}")]
    Io(String),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Fl(#[from] FlError),
    #[error(transparent)]
    Flow(#[from] FlowError),
    #[error(transparent)]
    Attack(#[from] AttackError),
    #[error(transparent)]
    Defense(#[from] DefenseError),
    #[error(transparent)]
    Nn(#[from] NnError),
}

pub type Result<T> = std::result::Result<T, ExperimentError>;

pub(crate) fn io_err(path: &Path, e: impl std::fmt::Display) -> ExperimentError {
    ExperimentError::Io(format!("{}: {e}", path.display()))
}

/// An independent seed for one named random stream of a run, so adding a
/// stage never shifts the randomness of another.
pub fn derive_seed(seed: u64, stream: &str) -> u64 {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(stream.as_bytes());
    let d = h.finalize();
    u64::from_le_bytes(d[..8].try_into().expect("digest has 32 bytes"))
}

/// Everything one seed of an experiment trains and attacks on.
#[derive(Clone, Debug)]
pub struct SeedData {
    /// Participants of global training.
    pub clients: Vec<ClientDataset>,
    /// The attacked client's images; a batch size `B` cell uses the first
    /// `target_size(B)` of them.
    pub target: ClientDataset,
    /// Held-out images for model accuracy.
    pub eval: ClientDataset,
    pub classes: usize,
}

impl SeedData {
    pub fn image_shape(&self) -> [usize; 3] {
        self.target.image_shape()
    }
}

fn max_target(cfg: &ExperimentConfig) -> usize {
    cfg.batch_sizes().into_iter().map(|b| cfg.target_size(b)).max().unwrap_or(1)
}

/// Loads the file-backed dataset, if any, and splits off the images kept
/// for prior training.
pub(crate) fn file_images(cfg: &ExperimentConfig) -> Result<Option<(ClientDataset, Option<ClientDataset>)>> {
    let Some(format) = cfg.image_format() else {
        return Ok(None);
    };
    let path = cfg.data.path.as_ref().ok_or_else(|| ExperimentError::Config("file-backed data needs data.path".into()))?;
    let all = load_images(path, format)?;
    if let Some(l) = all.labels().iter().find(|&&l| l >= cfg.data.classes) {
        return Err(ExperimentError::Config(format!("label {l} out of range for data.classes = {}", cfg.data.classes)));
    }
    let trains_flow = cfg.flow.enabled && cfg.flow.checkpoint.is_none();
    if !trains_flow {
        return Ok(Some((all, None)));
    }
    let keep = cfg.flow.train_size.min(all.len().saturating_sub(1));
    let rest = all.len() - keep;
    let pool = all.subset(&(0..rest).collect::<Vec<_>>());
    let flow = all.subset(&(rest..all.len()).collect::<Vec<_>>());
    Ok(Some((pool, Some(flow))))
}

/// Builds the clients, target and evaluation sets of one seed.
pub fn seed_data(cfg: &ExperimentConfig, seed: u64) -> Result<SeedData> {
    let d = &cfg.data;
    let target = max_target(cfg);
    let need = [target, d.clients * d.client_size, d.eval_size];
    let (pool, eval) = match file_images(cfg)? {
        None => {
            let pool = gen_shapes_dataset(need[0] + need[1], d.size, d.classes, derive_seed(seed, "data"))?;
            let eval = gen_shapes_dataset(d.eval_size, d.size, d.classes, derive_seed(seed, "eval"))?;
            (pool, eval)
        }
        Some((all, _)) => {
            let total: usize = need.iter().sum();
            if all.len() < total {
                return Err(ExperimentError::Config(format!("{} images available, the experiment needs {total}", all.len())));
            }
            let mut idx: Vec<usize> = (0..all.len()).collect();
            idx.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(seed, "data")));
            let pool = all.subset(&idx[..need[0] + need[1]]);
            let eval = all.subset(&idx[need[0] + need[1]..total]);
            (pool, eval)
        }
    };
    let mut sizes = vec![target];
    sizes.extend(std::iter::repeat_n(d.client_size, d.clients));
    let mut parts = pool.split(&sizes)?.into_iter();
    let target = parts.next().expect("target split");
    Ok(SeedData {
        clients: parts.collect(),
        target,
        eval,
        classes: d.classes,
    })
}

/// Images for prior training: shapes from their own seed stream, or the
/// reserved tail of the image files.
pub fn flow_data(cfg: &ExperimentConfig) -> Result<ClientDataset> {
    match file_images(cfg)? {
        Some((_, Some(flow))) => Ok(flow),
        Some((_, None)) => Err(ExperimentError::Config("no images reserved for prior training".into())),
        None => {
            let seed = cfg.flow.seed.unwrap_or(cfg.seed);
            Ok(gen_shapes_dataset(cfg.flow.train_size, cfg.data.size, cfg.data.classes, derive_seed(seed, "flow-data"))?)
        }
    }
}
