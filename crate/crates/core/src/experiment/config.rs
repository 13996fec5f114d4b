use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{ExperimentError, Result};
use crate::attack::{AttackConfig, AttackVariant, LabelMode};
use crate::data::ImageFormat;
use crate::defenses::{DefenseKind, DefenseSpec, SparsifyMode};
use crate::fl::LocalTrainConfig;
use crate::flow::FlowTrainConfig;
use crate::nn::{Activation, ClassifierKind, ClassifierSpec, FlowNetSpec};
use crate::optim::OptimizerKind;

/// A complete experiment description, read from TOML. Unknown keys are
/// rejected everywhere.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub name: String,
    /// Base seed; runs use `seed, seed + 1, ..` for `repeats` seeds.
    pub seed: u64,
    #[serde(default = "one")]
    pub repeats: usize,
    #[serde(default = "default_out")]
    pub out_dir: PathBuf,
    /// Sweep cells run on up to this many threads.
    #[serde(default = "one")]
    pub workers: usize,
    #[serde(default)]
    pub data: DataConfig,
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default)]
    pub fl: FlConfig,
    #[serde(default)]
    pub target: TargetConfig,
    #[serde(default)]
    pub flow: FlowConfig,
    #[serde(default)]
    pub attack: AttackSection,
    #[serde(default)]
    pub defense: DefenseSection,
    #[serde(default)]
    pub sweep: SweepConfig,
}

fn one() -> usize {
    1
}

fn default_out() -> PathBuf {
    PathBuf::from("runs")
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum DataSource {
    #[default]
    Shapes,
    Pgm,
    Ppm,
    Cifar10Binary,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub source: DataSource,
    /// File or directory for the file-backed sources.
    pub path: Option<PathBuf>,
    /// Side length of generated shapes.
    pub size: usize,
    pub classes: usize,
    /// Federated clients besides the attacked one.
    pub clients: usize,
    pub client_size: usize,
    pub eval_size: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            source: DataSource::Shapes,
            path: None,
            size: 8,
            classes: 10,
            clients: 4,
            client_size: 250,
            eval_size: 200,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub kind: ClassifierKind,
    /// Hidden widths (MLP) or channel counts (convnet); defaults per kind.
    pub hidden: Option<Vec<usize>>,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            kind: ClassifierKind::Convnet,
            hidden: None,
        }
    }
}

/// Global FedAvg training of the non-target clients.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FlConfig {
    /// Global round whose weights the target client receives.
    pub round: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub optimizer: OptimizerKind,
}

impl Default for FlConfig {
    fn default() -> Self {
        Self {
            round: 0,
            epochs: 2,
            batch_size: 10,
            lr: 0.1,
            optimizer: OptimizerKind::Sgd,
        }
    }
}

/// Local training of the attacked client.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TargetConfig {
    /// Images held by the client; defaults to the batch size.
    pub size: Option<usize>,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub optimizer: OptimizerKind,
    pub max_steps: Option<usize>,
}

impl Default for TargetConfig {
    fn default() -> Self {
        Self {
            size: None,
            epochs: 5,
            batch_size: 8,
            lr: 0.1,
            optimizer: OptimizerKind::Sgd,
            max_steps: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FlowConfig {
    pub enabled: bool,
    pub hidden: Vec<usize>,
    pub activation: Activation,
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Images generated for prior training, disjoint from client data.
    pub train_size: usize,
    /// Training seed; defaults to the experiment's base seed.
    pub seed: Option<u64>,
    /// Load this checkpoint instead of training.
    pub checkpoint: Option<PathBuf>,
}

impl Default for FlowConfig {
    fn default() -> Self {
        Self {
            enabled: true,
            hidden: vec![256, 256],
            activation: Activation::Softplus,
            steps: 8000,
            batch_size: 64,
            lr: 2e-3,
            train_size: 2000,
            seed: None,
            checkpoint: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AttackSection {
    pub variant: AttackVariant,
    pub max_iters: usize,
    pub lr: f64,
    pub lambda: f64,
    pub tv_weight: f64,
    pub tau: f64,
    pub alpha_init: f64,
    pub init_low: f64,
    pub init_high: f64,
    pub labels: LabelMode,
}

impl Default for AttackSection {
    fn default() -> Self {
        let d = AttackConfig::default();
        Self {
            variant: AttackVariant::Surrogate,
            max_iters: d.max_iters,
            lr: d.lr,
            lambda: d.lambda,
            tv_weight: d.tv_weight,
            tau: d.tau,
            alpha_init: d.alpha_init,
            init_low: d.init_low,
            init_high: d.init_high,
            labels: d.labels,
        }
    }
}

impl AttackSection {
    pub fn to_config(&self, lambda: f64, seed: u64) -> AttackConfig {
        AttackConfig {
            max_iters: self.max_iters,
            lr: self.lr,
            lambda,
            tv_weight: self.tv_weight,
            tau: self.tau,
            alpha_init: self.alpha_init,
            init_low: self.init_low,
            init_high: self.init_high,
            labels: self.labels,
            seed,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DefenseSection {
    pub kind: DefenseKind,
    pub param: f64,
    pub mode: SparsifyMode,
    /// Also defend every client update during global training.
    pub in_training: bool,
}

impl Default for DefenseSection {
    fn default() -> Self {
        Self {
            kind: DefenseKind::None,
            param: 0.0,
            mode: SparsifyMode::DropSmallest,
            in_training: true,
        }
    }
}

/// One defense setting in a sweep.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DefenseEntry {
    pub kind: DefenseKind,
    #[serde(default)]
    pub param: f64,
}

/// Axes to sweep; an empty axis uses the value from its own section.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SweepConfig {
    pub rounds: Vec<usize>,
    pub batch_sizes: Vec<usize>,
    pub defenses: Vec<DefenseEntry>,
    pub lambdas: Vec<f64>,
    pub variants: Vec<AttackVariant>,
}

/// One point of the sweep grid.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct Cell {
    pub round: usize,
    pub batch_size: usize,
    pub defense: DefenseSpec,
    pub lambda: f64,
    pub variant: AttackVariant,
}

impl Cell {
    /// Directory-safe identifier.
    pub fn id(&self) -> String {
        format!(
            "r{}-b{}-{}-{}-l{}-{}",
            self.round,
            self.batch_size,
            self.defense.kind.name(),
            self.defense.param,
            self.lambda,
            self.variant.name()
        )
    }
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig = toml::from_str(text).map_err(|e| ExperimentError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| ExperimentError::Io(format!("{}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// SHA-256 of the canonical (sorted-key) JSON form, so two files that
    /// differ only in key order hash the same.
    pub fn hash(&self) -> String {
        let value = serde_json::to_value(self).expect("config serializes");
        let digest = Sha256::digest(value.to_string().as_bytes());
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn seeds(&self) -> Vec<u64> {
        (0..self.repeats as u64).map(|k| self.seed + k).collect()
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(ExperimentError::Config(m));
        if self.name.is_empty() || self.name.contains(['/', '\\', ',', '"', '\n']) {
            return bad(format!("name {:?} must be non-empty and free of path separators, commas and quotes", self.name));
        }
        if self.repeats == 0 || self.workers == 0 {
            return bad("repeats and workers must be >= 1".into());
        }
        let d = &self.data;
        if d.source != DataSource::Shapes {
            match &d.path {
                Some(p) if p.exists() => {}
                Some(p) => return bad(format!("data path {} does not exist", p.display())),
                None => return bad("file-backed data needs data.path".into()),
            }
        }
        if d.clients == 0 || d.client_size == 0 || d.eval_size == 0 {
            return bad("data.clients, data.client_size and data.eval_size must be >= 1".into());
        }
        if let Some(p) = &self.flow.checkpoint {
            if !p.exists() {
                return bad(format!("flow checkpoint {} does not exist", p.display()));
            }
        }
        self.classifier_spec([1, d.size.max(1), d.size.max(1)], d.classes.max(2))
            .validate()
            .map_err(|e| ExperimentError::Config(e.to_string()))?;
        for b in self.batch_sizes() {
            self.target_train_config(b, 0).validate().map_err(|e| ExperimentError::Config(e.to_string()))?;
        }
        self.fl_train_config(0).validate().map_err(|e| ExperimentError::Config(e.to_string()))?;
        for cell in self.cells() {
            cell.defense.validate().map_err(|e| ExperimentError::Config(e.to_string()))?;
            self.attack.to_config(cell.lambda, 0).validate().map_err(|e| ExperimentError::Config(e.to_string()))?;
        }
        if !self.flow.enabled && self.lambdas().iter().any(|&l| l > 0.0) {
            return bad("a positive lambda needs flow.enabled = true".into());
        }
        Ok(())
    }

    pub fn classifier_spec(&self, input: [usize; 3], classes: usize) -> ClassifierSpec {
        let base = match self.model.kind {
            ClassifierKind::Mlp => ClassifierSpec::mlp(input, classes),
            ClassifierKind::Convnet => ClassifierSpec::convnet(input, classes),
        };
        match &self.model.hidden {
            Some(h) => ClassifierSpec { hidden: h.clone(), ..base },
            None => base,
        }
    }

    pub fn flow_spec(&self, dim: usize) -> FlowNetSpec {
        FlowNetSpec {
            activation: self.flow.activation,
            ..FlowNetSpec::new(dim, self.flow.hidden.clone())
        }
    }

    pub fn flow_train_config(&self) -> FlowTrainConfig {
        FlowTrainConfig {
            steps: self.flow.steps,
            batch_size: self.flow.batch_size,
            lr: self.flow.lr,
            seed: self.flow.seed.unwrap_or(self.seed),
        }
    }

    pub fn fl_train_config(&self, shuffle_seed: u64) -> LocalTrainConfig {
        LocalTrainConfig {
            epochs: self.fl.epochs,
            batch_size: self.fl.batch_size,
            optimizer: self.fl.optimizer,
            lr: self.fl.lr,
            shuffle_seed,
            max_steps: None,
        }
    }

    pub fn target_train_config(&self, batch_size: usize, shuffle_seed: u64) -> LocalTrainConfig {
        LocalTrainConfig {
            epochs: self.target.epochs,
            batch_size,
            optimizer: self.target.optimizer,
            lr: self.target.lr,
            shuffle_seed,
            max_steps: self.target.max_steps,
        }
    }

    /// Images held by the target client when training with `batch_size`.
    pub fn target_size(&self, batch_size: usize) -> usize {
        self.target.size.unwrap_or(batch_size)
    }

    pub fn batch_sizes(&self) -> Vec<usize> {
        if self.sweep.batch_sizes.is_empty() {
            vec![self.target.batch_size]
        } else {
            self.sweep.batch_sizes.clone()
        }
    }

    pub fn rounds(&self) -> Vec<usize> {
        if self.sweep.rounds.is_empty() {
            vec![self.fl.round]
        } else {
            self.sweep.rounds.clone()
        }
    }

    pub fn defenses(&self) -> Vec<DefenseSpec> {
        let mode = self.defense.mode;
        let base = [DefenseEntry {
            kind: self.defense.kind,
            param: self.defense.param,
        }];
        let entries: &[DefenseEntry] = if self.sweep.defenses.is_empty() { &base } else { &self.sweep.defenses };
        entries
            .iter()
            .map(|e| DefenseSpec {
                kind: e.kind,
                param: e.param,
                seed: 0,
                mode,
            })
            .collect()
    }

    pub fn lambdas(&self) -> Vec<f64> {
        if self.sweep.lambdas.is_empty() {
            vec![self.attack.lambda]
        } else {
            self.sweep.lambdas.clone()
        }
    }

    pub fn variants(&self) -> Vec<AttackVariant> {
        if self.sweep.variants.is_empty() {
            vec![self.attack.variant]
        } else {
            self.sweep.variants.clone()
        }
    }

    /// The sweep grid in a fixed order: round, batch size, defense, lambda,
    /// variant.
    pub fn cells(&self) -> Vec<Cell> {
        let mut out = Vec::new();
        for &round in &self.rounds() {
            for &batch_size in &self.batch_sizes() {
                for &defense in &self.defenses() {
                    for &lambda in &self.lambdas() {
                        for &variant in &self.variants() {
                            out.push(Cell {
                                round,
                                batch_size,
                                defense,
                                lambda,
                                variant,
                            });
                        }
                    }
                }
            }
        }
        out
    }

    pub fn image_format(&self) -> Option<ImageFormat> {
        match self.data.source {
            DataSource::Shapes => None,
            DataSource::Pgm => Some(ImageFormat::Pgm),
            DataSource::Ppm => Some(ImageFormat::Ppm),
            DataSource::Cifar10Binary => Some(ImageFormat::Cifar10Binary),
        }
    }
}
