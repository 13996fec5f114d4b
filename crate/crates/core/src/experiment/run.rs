use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::report::{write_metrics_csv, write_sweep_csv, MetricRow};
use super::{derive_seed, flow_data, io_err, seed_data, Cell, ExperimentConfig, ExperimentError, Result, SeedData};
use crate::attack::{run_attack, ReconstructionResult};
use crate::data::write_pnm;
use crate::defenses::{apply_defense, defend_update, DefenseKind, DefenseSpec};
use crate::fl::{run_global_rounds_with, ClientUpdate, FlError, RoundSnapshot};
use crate::flow::{fm_train, msf_probe, write_msf_csv, FlowModel};
use crate::nn::{Checkpoint, CheckpointMeta, ClassifierSpec, ModelSpec};

/// Noise levels and times of the velocity-magnitude probe.
pub const MSF_LEVELS: [f64; 5] = [0.0, 0.25, 0.5, 0.75, 1.0];
pub const MSF_TIMES: [f64; 5] = [0.0, 0.25, 0.5, 0.75, 1.0];

/// Images per seed used by the velocity-magnitude probe.
const PROBE_IMAGES: usize = 64;

/// A failure that stopped one (cell, seed) pair.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CellError {
    pub cell: String,
    pub seed: u64,
    pub stage: String,
    pub message: String,
}

/// What a run produced. Stored as `record.json` in the run directory;
/// artifact paths are relative to it.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RunRecord {
    pub experiment: String,
    pub config_hash: String,
    pub run_dir: PathBuf,
    /// Wall-clock seconds per stage.
    pub timings: BTreeMap<String, f64>,
    pub artifacts: Vec<PathBuf>,
    pub rows: Vec<MetricRow>,
    pub errors: Vec<CellError>,
}

impl RunRecord {
    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let path = dir.as_ref().join("record.json");
        let text = std::fs::read_to_string(&path).map_err(|e| io_err(&path, e))?;
        serde_json::from_str(&text).map_err(|e| io_err(&path, e))
    }
}

pub(crate) fn write_file(path: &Path, bytes: impl AsRef<[u8]>) -> Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(|e| io_err(parent, e))?;
    }
    std::fs::write(path, bytes).map_err(|e| io_err(path, e))
}

fn run_dir(cfg: &ExperimentConfig) -> PathBuf {
    cfg.out_dir.join(&cfg.name)
}

fn pnm_ext(shape: [usize; 3]) -> &'static str {
    if shape[0] == 1 {
        "pgm"
    } else {
        "ppm"
    }
}

fn classifier(cfg: &ExperimentConfig, data: &SeedData) -> ClassifierSpec {
    cfg.classifier_spec(data.image_shape(), data.classes)
}

/// The defense applied during global training for a cell defense, if any.
fn training_defense(cfg: &ExperimentConfig, d: &DefenseSpec) -> Option<DefenseSpec> {
    (cfg.defense.in_training && d.kind != DefenseKind::None).then_some(*d)
}

fn training_key(d: Option<&DefenseSpec>) -> String {
    match d {
        None => "none".into(),
        Some(d) => format!("{}-{}", d.kind.name(), d.param),
    }
}

fn max_round(cfg: &ExperimentConfig) -> usize {
    cfg.rounds().into_iter().max().unwrap_or(0)
}

fn train_history(cfg: &ExperimentConfig, seed: u64, data: &SeedData, defense: Option<DefenseSpec>) -> Result<Vec<RoundSnapshot>> {
    let spec = classifier(cfg, data);
    let init = spec.init(&mut ChaCha8Rng::seed_from_u64(derive_seed(seed, "init")))?;
    let local = cfg.fl_train_config(derive_seed(seed, "fl"));
    let rounds = max_round(cfg);
    let history = match defense {
        None => run_global_rounds_with(&spec, &init, &data.clients, &local, rounds, &data.eval, None)?,
        Some(d) => {
            let transform = move |round: usize, client: usize, delta: Vec<f64>| {
                let spec = DefenseSpec {
                    seed: derive_seed(seed, &format!("train-defense-{round}-{client}")),
                    ..d
                };
                apply_defense(&delta, &spec).map_err(|e| FlError::Update(e.to_string()))
            };
            run_global_rounds_with(&spec, &init, &data.clients, &local, rounds, &data.eval, Some(&transform))?
        }
    };
    Ok(history)
}

fn save_history(cfg: &ExperimentConfig, seed: u64, spec: &ClassifierSpec, key: &str, history: &[RoundSnapshot], rounds: &[usize]) -> Result<Vec<PathBuf>> {
    let dir = run_dir(cfg);
    let mut out = Vec::new();
    let mut acc = String::from("round,accuracy\n");
    for s in history {
        acc.push_str(&format!("{},{:.12e}\n", s.round, s.accuracy));
    }
    let rel = PathBuf::from(format!("seed-{seed}/fl-{key}.csv"));
    write_file(&dir.join(&rel), acc)?;
    out.push(rel);
    for &r in rounds {
        let ck = Checkpoint {
            spec: ModelSpec::Classifier(spec.clone()),
            params: history[r].global.clone(),
            meta: CheckpointMeta {
                seed,
                steps: r as u64,
                dataset: cfg.name.clone(),
            },
        };
        let rel = PathBuf::from(format!("seed-{seed}/global-{key}-r{r}.json"));
        write_file(&dir.join(&rel), ck.to_json())?;
        out.push(rel);
    }
    Ok(out)
}

fn flow_dataset_name(cfg: &ExperimentConfig) -> String {
    match &cfg.data.path {
        Some(p) if cfg.image_format().is_some() => p.display().to_string(),
        _ => "shapes".into(),
    }
}

/// Trains the prior (or loads `flow.checkpoint`) and stores it in the run
/// directory.
fn obtain_flow(cfg: &ExperimentConfig, artifacts: &mut Vec<PathBuf>) -> Result<FlowModel> {
    if let Some(p) = &cfg.flow.checkpoint {
        return Ok(FlowModel::load(p)?);
    }
    let data = flow_data(cfg)?;
    let model = fm_train(&cfg.flow_spec(data.image_len()), data.pixels(), &cfg.flow_train_config(), &flow_dataset_name(cfg))?;
    let dir = run_dir(cfg);
    std::fs::create_dir_all(&dir).map_err(|e| io_err(&dir, e))?;
    model.save(dir.join("flow.json"))?;
    let mut trace = String::from("step,loss\n");
    for (i, l) in model.loss_trace.iter().enumerate() {
        trace.push_str(&format!("{i},{l:.12e}\n"));
    }
    write_file(&dir.join("flow_loss.csv"), trace)?;
    artifacts.extend([PathBuf::from("flow.json"), PathBuf::from("flow_loss.csv")]);
    Ok(model)
}

fn write_images(dir: &Path, prefix: &str, shape: [usize; 3], images: &[&[f64]], labels: Option<&[usize]>) -> Result<Vec<PathBuf>> {
    let ext = pnm_ext(shape);
    let mut out = Vec::new();
    for (i, px) in images.iter().enumerate() {
        let name = match labels {
            Some(l) => format!("{}_{prefix}{i:05}.{ext}", l[i]),
            None => format!("{prefix}{i}.{ext}"),
        };
        let path = dir.join(&name);
        write_file(&path, write_pnm(shape, px)?)?;
        out.push(path);
    }
    Ok(out)
}

struct CellOutput {
    row: MetricRow,
    artifacts: Vec<PathBuf>,
}

fn run_cell(cfg: &ExperimentConfig, cell: &Cell, seed: u64, data: &SeedData, history: &[RoundSnapshot], flow: Option<&FlowModel>) -> std::result::Result<CellOutput, (String, ExperimentError)> {
    let stage = |s: &'static str| move |e: ExperimentError| (s.to_string(), e);
    let spec = classifier(cfg, data);
    let n = cfg.target_size(cell.batch_size);
    let target = data.target.subset(&(0..n).collect::<Vec<_>>());
    let snapshot = &history[cell.round];

    let local = cfg.target_train_config(cell.batch_size, derive_seed(seed, "target"));
    let update = ClientUpdate::train(&spec, &snapshot.global, &target, &local).map_err(|e| stage("train-target")(e.into()))?;
    let defense = DefenseSpec {
        seed: derive_seed(seed, "defense"),
        ..cell.defense
    };
    let sent = defend_update(&update, &defense).map_err(|e| stage("defense")(e.into()))?;

    let acfg = cfg.attack.to_config(cell.lambda, derive_seed(seed, "attack"));
    let result = run_attack(&sent, target.labels(), flow, &acfg, cell.variant, Some(&target)).map_err(|e| stage("attack")(e.into()))?;

    let rel = PathBuf::from(format!("cells/{}/seed-{seed}", cell.id()));
    let artifacts = write_cell_artifacts(cfg, &rel, cell, seed, &sent, &target, &result, snapshot.accuracy).map_err(stage("artifacts"))?;
    let panel = result.panel.expect("evaluated against the target");
    Ok(CellOutput {
        row: MetricRow {
            experiment: cfg.name.clone(),
            seed,
            round: cell.round,
            batch_size: cell.batch_size,
            defense: cell.defense.kind.name().into(),
            defense_param: cell.defense.param,
            lambda: cell.lambda,
            iterations: result.iterations,
            stop_reason: result.stop_reason.name().into(),
            psnr: panel.psnr,
            ssim: panel.ssim,
            mse: panel.mse,
            tv: panel.tv,
            fmse: panel.fmse,
            alpha_final: result.alpha,
            variant: cell.variant.name().into(),
            model_accuracy: Some(snapshot.accuracy),
        },
        artifacts,
    })
}

#[derive(Serialize)]
struct CellSummary<'a> {
    cell: String,
    seed: u64,
    variant: &'static str,
    round: usize,
    batch_size: usize,
    defense: &'a DefenseSpec,
    lambda: f64,
    model_accuracy: f64,
    iterations: usize,
    stop_reason: &'static str,
    final_sim: f64,
    alpha: f64,
    assignment: &'a Option<Vec<usize>>,
    metrics: &'a Option<crate::metrics::MetricPanel>,
    per_image: &'a [crate::metrics::MetricPanel],
}

#[allow(clippy::too_many_arguments)]
fn write_cell_artifacts(
    cfg: &ExperimentConfig,
    rel: &Path,
    cell: &Cell,
    seed: u64,
    sent: &ClientUpdate,
    target: &crate::data::ClientDataset,
    result: &ReconstructionResult,
    accuracy: f64,
) -> Result<Vec<PathBuf>> {
    let root = run_dir(cfg);
    let dir = root.join(rel);
    let shape = result.image_shape;
    let assignment = result.assignment.clone().unwrap_or_else(|| (0..result.len()).collect());
    let recons: Vec<&[f64]> = assignment.iter().map(|&r| result.image(r)).collect();
    let targets: Vec<&[f64]> = (0..target.len()).map(|i| target.image(i)).collect();
    let mut written = write_images(&dir, "recon_", shape, &recons, None)?;
    written.extend(write_images(&dir, "target_", shape, &targets, None)?);

    let mut trace = Vec::new();
    result.trace.write_csv(&mut trace).map_err(|e| io_err(&dir, e))?;
    write_file(&dir.join("trace.csv"), trace)?;
    write_file(&dir.join("update.json"), sent.to_json())?;
    let summary = CellSummary {
        cell: cell.id(),
        seed,
        variant: cell.variant.name(),
        round: cell.round,
        batch_size: cell.batch_size,
        defense: &cell.defense,
        lambda: cell.lambda,
        model_accuracy: accuracy,
        iterations: result.iterations,
        stop_reason: result.stop_reason.name(),
        final_sim: result.final_sim,
        alpha: result.alpha,
        assignment: &result.assignment,
        metrics: &result.panel,
        per_image: &result.per_image,
    };
    write_file(&dir.join("summary.json"), serde_json::to_string_pretty(&summary).expect("summary serializes"))?;
    written.extend(["trace.csv", "update.json", "summary.json"].map(|f| dir.join(f)));
    Ok(written.into_iter().map(|p| p.strip_prefix(&root).map(Path::to_path_buf).unwrap_or(p)).collect())
}

fn record_secs(timings: &mut BTreeMap<String, f64>, stage: &str, start: Instant) {
    *timings.entry(stage.into()).or_default() += start.elapsed().as_secs_f64();
}

/// Runs every cell of the sweep grid for every seed and writes the run
/// directory `out_dir/name`. A failing cell is recorded in the returned
/// record and does not stop the others.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<RunRecord> {
    cfg.validate()?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.workers)
        .build()
        .map_err(|e| ExperimentError::Config(e.to_string()))?;
    pool.install(|| run_in_pool(cfg))
}

fn run_in_pool(cfg: &ExperimentConfig) -> Result<RunRecord> {
    let dir = run_dir(cfg);
    let started = Instant::now();
    let mut timings = BTreeMap::new();
    let mut artifacts = vec![PathBuf::from("config.toml")];
    write_file(&dir.join("config.toml"), cfg.to_toml())?;

    let cells = cfg.cells();
    let seeds = cfg.seeds();
    let needs_flow = cfg.flow.enabled && cells.iter().any(|c| c.lambda > 0.0);
    let t = Instant::now();
    let flow = if needs_flow { Some(obtain_flow(cfg, &mut artifacts).map_err(|e| e.to_string())) } else { None };
    record_secs(&mut timings, "train-flow", t);

    let t = Instant::now();
    let data: Vec<std::result::Result<SeedData, String>> = seeds.iter().map(|&s| seed_data(cfg, s).map_err(|e| e.to_string())).collect();
    record_secs(&mut timings, "data", t);

    // Global training once per seed and training-time defense.
    let t = Instant::now();
    let mut histories: BTreeMap<(u64, String), std::result::Result<Vec<RoundSnapshot>, String>> = BTreeMap::new();
    for (&seed, d) in seeds.iter().zip(&data) {
        let Ok(d) = d else { continue };
        let mut keys: Vec<Option<DefenseSpec>> = Vec::new();
        for c in &cells {
            let td = training_defense(cfg, &c.defense);
            if !keys.contains(&td) {
                keys.push(td);
            }
        }
        for td in keys {
            let key = training_key(td.as_ref());
            let h = train_history(cfg, seed, d, td);
            if let Ok(h) = &h {
                artifacts.extend(save_history(cfg, seed, &classifier(cfg, d), &key, h, &cfg.rounds())?);
            }
            histories.insert((seed, key), h.map_err(|e| e.to_string()));
        }
    }
    record_secs(&mut timings, "train-fl", t);

    let t = Instant::now();
    let jobs: Vec<(&Cell, usize)> = cells.iter().flat_map(|c| (0..seeds.len()).map(move |k| (c, k))).collect();
    let outputs: Vec<std::result::Result<CellOutput, CellError>> = jobs
        .par_iter()
        .map(|&(cell, k)| {
            let seed = seeds[k];
            let fail = |stage: &str, message: String| CellError {
                cell: cell.id(),
                seed,
                stage: stage.into(),
                message,
            };
            let d = data[k].as_ref().map_err(|e| fail("data", e.clone()))?;
            let key = training_key(training_defense(cfg, &cell.defense).as_ref());
            let history = histories[&(seed, key)].as_ref().map_err(|e| fail("train-fl", e.clone()))?;
            let flow = match &flow {
                Some(Ok(m)) => Some(m),
                Some(Err(e)) if cell.lambda > 0.0 => return Err(fail("train-flow", e.clone())),
                _ => None,
            };
            run_cell(cfg, cell, seed, d, history, flow).map_err(|(stage, e)| fail(&stage, e.to_string()))
        })
        .collect();
    record_secs(&mut timings, "attack", t);

    let mut rows = Vec::new();
    let mut errors = Vec::new();
    for out in outputs {
        match out {
            Ok(o) => {
                rows.push(o.row);
                artifacts.extend(o.artifacts);
            }
            Err(e) => errors.push(e),
        }
    }
    let mut csv = Vec::new();
    write_metrics_csv(&rows, &mut csv).map_err(|e| io_err(&dir, e))?;
    write_file(&dir.join("metrics.csv"), csv)?;
    artifacts.push("metrics.csv".into());
    if !cfg.sweep.defenses.is_empty() {
        let mut csv = Vec::new();
        write_sweep_csv(&rows, &mut csv).map_err(|e| io_err(&dir, e))?;
        write_file(&dir.join("defense_sweep.csv"), csv)?;
        artifacts.push("defense_sweep.csv".into());
    }
    record_secs(&mut timings, "total", started);
    let record = RunRecord {
        experiment: cfg.name.clone(),
        config_hash: cfg.hash(),
        run_dir: dir.clone(),
        timings,
        artifacts,
        rows,
        errors,
    };
    write_file(&dir.join("record.json"), serde_json::to_string_pretty(&record).expect("record serializes"))?;
    Ok(record)
}

/// Writes every seed's client, target and evaluation images under
/// `data/seed-<s>/`, named `<label>_<index>` so they load back with labels.
pub fn gen_data(cfg: &ExperimentConfig) -> Result<Vec<PathBuf>> {
    cfg.validate()?;
    let root = run_dir(cfg).join("data");
    let mut dirs = Vec::new();
    for seed in cfg.seeds() {
        let d = seed_data(cfg, seed)?;
        let mut sets = vec![("target".to_string(), &d.target), ("eval".to_string(), &d.eval)];
        sets.extend(d.clients.iter().enumerate().map(|(k, c)| (format!("client-{k}"), c)));
        for (name, set) in sets {
            let dir = root.join(format!("seed-{seed}")).join(name);
            let images: Vec<&[f64]> = (0..set.len()).map(|i| set.image(i)).collect();
            write_images(&dir, "", set.image_shape(), &images, Some(set.labels()))?;
            dirs.push(dir);
        }
    }
    Ok(dirs)
}

/// Runs global training for every seed and training-time defense and
/// stores the global weights of every round up to the largest swept one.
pub fn train_fl(cfg: &ExperimentConfig) -> Result<Vec<PathBuf>> {
    cfg.validate()?;
    let all_rounds: Vec<usize> = (0..=max_round(cfg)).collect();
    let mut out = Vec::new();
    for seed in cfg.seeds() {
        let d = seed_data(cfg, seed)?;
        let mut done = Vec::new();
        for def in cfg.defenses() {
            let td = training_defense(cfg, &def);
            if done.contains(&td) {
                continue;
            }
            done.push(td);
            let h = train_history(cfg, seed, &d, td)?;
            out.extend(save_history(cfg, seed, &classifier(cfg, &d), &training_key(td.as_ref()), &h, &all_rounds)?);
        }
    }
    let root = run_dir(cfg);
    Ok(out.into_iter().map(|p| root.join(p)).collect())
}

/// Trains the flow prior and writes `flow.json` and `flow_loss.csv`.
pub fn train_flow(cfg: &ExperimentConfig) -> Result<PathBuf> {
    cfg.validate()?;
    let mut artifacts = Vec::new();
    obtain_flow(cfg, &mut artifacts)?;
    Ok(run_dir(cfg).join("flow.json"))
}

/// Measures the prior's velocity magnitude on noised held-out images of the
/// base seed and writes `msf.csv`. Reuses a `flow.json` already in the run
/// directory when there is one.
pub fn probe_flow(cfg: &ExperimentConfig) -> Result<PathBuf> {
    cfg.validate()?;
    let dir = run_dir(cfg);
    let stored = dir.join("flow.json");
    let model = if cfg.flow.checkpoint.is_none() && stored.exists() {
        FlowModel::load(&stored)?
    } else {
        obtain_flow(cfg, &mut Vec::new())?
    };
    let d = seed_data(cfg, cfg.seed)?;
    let n = d.eval.len().min(PROBE_IMAGES);
    let probe = d.eval.subset(&(0..n).collect::<Vec<_>>());
    let rows = msf_probe(&model, probe.pixels(), &MSF_LEVELS, &MSF_TIMES, derive_seed(cfg.seed, "probe"))?;
    let mut csv = Vec::new();
    write_msf_csv(&rows, &mut csv).map_err(|e| io_err(&dir, e))?;
    let path = dir.join("msf.csv");
    write_file(&path, csv)?;
    Ok(path)
}
