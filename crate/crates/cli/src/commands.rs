//! The five commands. Each is a pure function of its resolved config and
//! arguments; artifacts go under the output directory.

use std::fs;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use labelaux::detection::MapReport;
use labelaux::model::PreparedScene;
use labelaux::scene::{generate_scene, load_dataset, save_scene, Manifest};
use labelaux::training::{
    evaluate, load_checkpoint, log_to_csv, pretrain_baseline, save_checkpoint, strip_auxiliary, train_one_stage,
    train_stage1, train_stage2, Dataset, EpochLog, ModelBundle, Stage,
};
use labelaux::{Error, Result};
use serde::{Deserialize, Serialize};

use crate::ablation::{cell_config, config_hash, expand, rows_to_csv, run_cell, AblationRow};
use crate::config::RunConfig;

pub const TRAIN_SPLIT: &str = "train";
pub const VAL_SPLIT: &str = "val";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TrainMode {
    Baseline,
    Stage1,
    Stage2,
    OneStage,
}

impl TrainMode {
    pub fn name(self) -> &'static str {
        match self {
            TrainMode::Baseline => "baseline",
            TrainMode::Stage1 => "stage1",
            TrainMode::Stage2 => "stage2",
            TrainMode::OneStage => "one-stage",
        }
    }

    /// Mode whose checkpoint this one starts from.
    pub fn prerequisite(self) -> Option<TrainMode> {
        match self {
            TrainMode::Stage1 => Some(TrainMode::Baseline),
            TrainMode::Stage2 => Some(TrainMode::Stage1),
            _ => None,
        }
    }
}

pub fn checkpoint_path(outdir: &Path, mode: TrainMode) -> PathBuf {
    outdir.join(format!("{}.ckpt.json", mode.name()))
}

fn write(path: &Path, text: &str) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn scene_file(index: usize) -> String {
    format!("scene_{index:04}.json")
}

/// Writes `num_train + num_val` scene files and `manifest.json` into the
/// dataset directory. Refuses a non-empty directory unless `force`.
pub fn cmd_gen_data(cfg: &RunConfig, outdir: &Path, force: bool) -> Result<PathBuf> {
    let dir = cfg.data_dir(outdir);
    let occupied = fs::read_dir(&dir).map(|mut d| d.next().is_some()).unwrap_or(false);
    if occupied && !force {
        return Err(Error::Validation(format!(
            "dataset directory {} is not empty; pass --force to overwrite",
            dir.display()
        )));
    }
    if occupied {
        fs::remove_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    }
    fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    cfg.echo(outdir)?;

    let total = cfg.gen.num_train + cfg.gen.num_val;
    let mut files = Vec::with_capacity(total);
    for i in 0..total {
        let scene = generate_scene(&cfg.gen, cfg.data_seed + i as u64)?;
        let name = scene_file(i);
        save_scene(&scene, &dir.join(&name))?;
        files.push(name);
    }
    let val = files.split_off(cfg.gen.num_train);
    let manifest = Manifest {
        splits: [(TRAIN_SPLIT.to_string(), files), (VAL_SPLIT.to_string(), val)].into(),
        gen: cfg.gen.clone(),
    };
    manifest.save(&dir)?;
    log::info!("wrote {total} scenes to {}", dir.display());
    Ok(dir)
}

fn prepare(cfg: &RunConfig, scenes: Vec<labelaux::scene::Scene>) -> Result<Vec<PreparedScene>> {
    scenes.into_iter().map(|s| PreparedScene::new(s, &cfg.model)).collect()
}

/// Train and validation splits of the dataset directory, prepared for
/// training.
pub fn load_training_data(cfg: &RunConfig, outdir: &Path) -> Result<Dataset> {
    let dir = cfg.data_dir(outdir);
    let (manifest, train) = load_dataset(&dir, TRAIN_SPLIT)?;
    let (_, val) = load_dataset(&dir, VAL_SPLIT)?;
    if manifest.gen.num_classes() != cfg.model.num_classes {
        return Err(Error::Validation(format!(
            "dataset has {} classes but model.num_classes = {}",
            manifest.gen.num_classes(),
            cfg.model.num_classes
        )));
    }
    Dataset::new(manifest.gen.clone(), prepare(cfg, train)?, prepare(cfg, val)?)
}

/// Contents of a metrics file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub stage: Stage,
    pub split: String,
    pub num_scenes: usize,
    pub map25: f64,
    pub map50: f64,
    pub report: MapReport,
    /// Final epoch of training, absent for `eval`.
    pub final_epoch: Option<EpochLog>,
}

impl Metrics {
    fn new(stage: Stage, split: &str, num_scenes: usize, report: MapReport, final_epoch: Option<EpochLog>) -> Self {
        Metrics {
            stage,
            split: split.to_string(),
            num_scenes,
            map25: report.map_at(0.25).unwrap_or(0.0),
            map50: report.map_at(0.5).unwrap_or(0.0),
            report,
            final_epoch,
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("metrics serialize")
    }
}

/// Runs one training mode, writing `<mode>.ckpt.json`, `<mode>.log.csv`
/// and `<mode>.metrics.json`. Stage 1 and stage 2 start from `input`, or
/// from the previous mode's checkpoint in `outdir`.
pub fn cmd_train(cfg: &RunConfig, outdir: &Path, mode: TrainMode, input: Option<&Path>) -> Result<Metrics> {
    let mut bundle = match mode.prerequisite() {
        Some(pre) => {
            let path = input
                .map(Path::to_path_buf)
                .unwrap_or_else(|| checkpoint_path(outdir, pre));
            if !path.exists() {
                return Err(Error::Checkpoint(format!(
                    "--mode {} needs the {} checkpoint {}; run `train --mode {}` first",
                    mode.name(),
                    pre.name(),
                    path.display(),
                    pre.name()
                )));
            }
            Some(load_checkpoint(&path)?)
        }
        None => None,
    };
    cfg.echo(outdir)?;
    let data = load_training_data(cfg, outdir)?;
    let t = &cfg.train;
    let (bundle, logs) = match mode {
        TrainMode::Baseline => {
            let mut b = ModelBundle::new(cfg.model.clone(), t.seed)?;
            let logs = pretrain_baseline(&mut b, &data, t, t.baseline_epochs)?;
            (b, logs)
        }
        TrainMode::Stage1 => {
            let mut b = bundle.take().expect("prerequisite loaded");
            let logs = train_stage1(&mut b, &data, t)?;
            (b, logs)
        }
        TrainMode::Stage2 => {
            let mut b = bundle.take().expect("prerequisite loaded");
            let logs = train_stage2(&mut b, &data, t)?;
            (b, logs)
        }
        TrainMode::OneStage => train_one_stage(cfg.model.clone(), &data, t)?,
    };
    save_checkpoint(&bundle, &checkpoint_path(outdir, mode))?;
    write(&outdir.join(format!("{}.log.csv", mode.name())), &log_to_csv(&logs))?;
    let report = evaluate(&bundle.params, &data.val, &t.decode)?;
    let metrics = Metrics::new(bundle.stage, VAL_SPLIT, data.val.len(), report, logs.last().cloned());
    write(
        &outdir.join(format!("{}.metrics.json", mode.name())),
        &metrics.to_json(),
    )?;
    Ok(metrics)
}

/// Evaluates the deployed (stripped) model on `split`, writing
/// `metrics.json`.
pub fn cmd_eval(cfg: &RunConfig, outdir: &Path, checkpoint: &Path, split: &str) -> Result<Metrics> {
    let bundle = strip_auxiliary(&load_checkpoint(checkpoint)?);
    let (_, scenes) = load_dataset(&cfg.data_dir(outdir), split)?;
    let scenes: Vec<PreparedScene> = scenes
        .into_iter()
        .map(|s| PreparedScene::new(s, &bundle.config))
        .collect::<Result<_>>()?;
    cfg.echo(outdir)?;
    let report = evaluate(&bundle.params, &scenes, &cfg.train.decode)?;
    let metrics = Metrics::new(bundle.stage, split, scenes.len(), report, None);
    write(&outdir.join("metrics.json"), &metrics.to_json())?;
    Ok(metrics)
}

/// Outcome of `strip`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StripOutcome {
    Stripped,
    /// The input had no auxiliary branch; it was copied unchanged.
    AlreadyStripped,
}

pub fn cmd_strip(input: &Path, output: &Path) -> Result<StripOutcome> {
    let bundle = load_checkpoint(input)?;
    if !bundle.has_aux() && bundle.stage == Stage::Stripped {
        log::warn!("{} is already stripped; writing it unchanged", input.display());
        if input != output {
            fs::copy(input, output).map_err(|e| Error::io(output, e))?;
        }
        return Ok(StripOutcome::AlreadyStripped);
    }
    save_checkpoint(&strip_auxiliary(&bundle), output)?;
    Ok(StripOutcome::Stripped)
}

/// The ablation report: one row per cell and seed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub rows: Vec<AblationRow>,
}

/// Runs every cell of the configured grid for every seed, using up to
/// `jobs` worker threads. Rows come back in grid order regardless of
/// `jobs`. Writes `ablation.json`, `ablation.csv` and one resolved config
/// per cell under `cells/<hash>.json`.
pub fn cmd_ablate(cfg: &RunConfig, outdir: &Path, jobs: usize) -> Result<AblationReport> {
    cfg.echo(outdir)?;
    let data = load_training_data(cfg, outdir)?;
    let cells = expand(&cfg.train, &cfg.ablation);
    let work: Vec<(RunConfig, usize)> = cells
        .iter()
        .enumerate()
        .flat_map(|(i, _)| cfg.ablation.seeds.iter().map(move |&s| (i, s)))
        .map(|(i, s)| (cell_config(cfg, &cells[i], s), i))
        .collect();
    for (run, _) in &work {
        write(
            &outdir.join("cells").join(format!("{}.json", config_hash(run))),
            &run.to_json(),
        )?;
    }

    let next = AtomicUsize::new(0);
    let results: Mutex<Vec<Option<Result<AblationRow>>>> = Mutex::new((0..work.len()).map(|_| None).collect());
    std::thread::scope(|scope| {
        for _ in 0..jobs.clamp(1, work.len().max(1)) {
            scope.spawn(|| loop {
                let k = next.fetch_add(1, Ordering::SeqCst);
                let Some((run, cell)) = work.get(k) else { break };
                log::info!(
                    "ablation cell {}/{}: {} seed {}",
                    k + 1,
                    work.len(),
                    cells[*cell].label(),
                    run.train.seed
                );
                let row = run_cell(run, &cells[*cell], &data);
                results.lock().expect("no worker panicked")[k] = Some(row);
            });
        }
    });
    let rows = results
        .into_inner()
        .expect("no worker panicked")
        .into_iter()
        .map(|r| r.expect("every cell ran"))
        .collect::<Result<Vec<_>>>()?;
    let report = AblationReport { rows };
    write(
        &outdir.join("ablation.json"),
        &serde_json::to_string_pretty(&report).expect("report serializes"),
    )?;
    write(&outdir.join("ablation.csv"), &rows_to_csv(&report.rows))?;
    Ok(report)
}
