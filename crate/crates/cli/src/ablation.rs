//! Declarative ablation grids. Each block is a cross product of its axes;
//! an absent axis keeps the base config's value. Shipped fragments under
//! `configs/ablation/` describe the standard tables.

use std::fmt::Write as _;
use std::time::Instant;

use labelaux::model::AuxVariant;
use labelaux::training::{
    evaluate, pretrain_baseline, train_one_stage, train_stage1, train_stage2, Dataset, ModelBundle, TrainConfig,
};
use labelaux::{Error, Result};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::RunConfig;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Baseline,
    Lkm,
    LkmLai,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Schedule {
    OneStage,
    TwoStage,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AblationBlock {
    /// Report label grouping the block's rows.
    pub table: String,
    #[serde(default = "default_methods")]
    pub methods: Vec<Method>,
    #[serde(default = "default_schedules")]
    pub schedules: Vec<Schedule>,
    #[serde(default)]
    pub scale_factors: Option<Vec<f64>>,
    #[serde(default)]
    pub size_aug: Option<Vec<bool>>,
    #[serde(default)]
    pub fakes: Option<Vec<bool>>,
    #[serde(default)]
    pub aux_weights: Option<Vec<f64>>,
}

fn default_methods() -> Vec<Method> {
    vec![Method::LkmLai]
}

fn default_schedules() -> Vec<Schedule> {
    vec![Schedule::TwoStage]
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AblationGrid {
    /// Every cell runs once per seed.
    pub seeds: Vec<u64>,
    pub blocks: Vec<AblationBlock>,
}

impl Default for AblationGrid {
    fn default() -> Self {
        AblationGrid {
            seeds: vec![0],
            blocks: Vec::new(),
        }
    }
}

impl AblationGrid {
    pub fn validate(&self) -> Result<()> {
        for b in &self.blocks {
            let empty = b.methods.is_empty()
                || b.schedules.is_empty()
                || [
                    b.scale_factors.as_ref().map(Vec::len),
                    b.aux_weights.as_ref().map(Vec::len),
                ]
                .contains(&Some(0))
                || [b.size_aug.as_ref().map(Vec::len), b.fakes.as_ref().map(Vec::len)].contains(&Some(0));
            if empty {
                return Err(Error::Validation(format!(
                    "ablation block `{}` has an empty axis",
                    b.table
                )));
            }
        }
        Ok(())
    }
}

/// One point of the grid, fully resolved.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Cell {
    pub table: String,
    pub method: Method,
    /// `None` for the baseline, which has no auxiliary schedule.
    pub schedule: Option<Schedule>,
    pub train: TrainConfig,
}

impl Cell {
    /// Human-readable cell label.
    pub fn label(&self) -> String {
        let method = match self.method {
            Method::Baseline => "baseline",
            Method::Lkm => "+lkm",
            Method::LkmLai => "+lkm+lai",
        };
        match self.schedule {
            None => method.to_string(),
            Some(s) => {
                let a = &self.train.augment;
                format!(
                    "{method}/{}/scale={}/size_aug={}/fakes={}/aux_weight={}",
                    if s == Schedule::OneStage {
                        "one_stage"
                    } else {
                        "two_stage"
                    },
                    a.scale_factor,
                    a.enable_size_aug,
                    a.enable_fake,
                    self.train.aux_weight
                )
            }
        }
    }
}

fn axis<T: Clone>(values: &Option<Vec<T>>, base: T) -> Vec<T> {
    values.clone().unwrap_or_else(|| vec![base])
}

/// Expands every block into cells, in block order then axis order
/// (method, schedule, scale factor, size aug, fakes, aux_weight). Baseline
/// cells ignore the auxiliary axes and appear once per aux_weight-free block.
pub fn expand(base: &TrainConfig, grid: &AblationGrid) -> Vec<Cell> {
    let mut cells = Vec::new();
    for block in &grid.blocks {
        for &method in &block.methods {
            if method == Method::Baseline {
                cells.push(Cell {
                    table: block.table.clone(),
                    method,
                    schedule: None,
                    train: base.clone(),
                });
                continue;
            }
            let variant = match method {
                Method::Lkm => AuxVariant::Lkm,
                _ => AuxVariant::LkmLai,
            };
            for &schedule in &block.schedules {
                for scale in axis(&block.scale_factors, base.augment.scale_factor) {
                    for size_aug in axis(&block.size_aug, base.augment.enable_size_aug) {
                        for fakes in axis(&block.fakes, base.augment.enable_fake) {
                            for aux_weight in axis(&block.aux_weights, base.aux_weight) {
                                let mut train = base.clone();
                                train.variant = variant;
                                train.aux_weight = aux_weight;
                                train.augment.scale_factor = scale;
                                train.augment.enable_size_aug = size_aug;
                                train.augment.enable_fake = fakes;
                                cells.push(Cell {
                                    table: block.table.clone(),
                                    method,
                                    schedule: Some(schedule),
                                    train,
                                });
                            }
                        }
                    }
                }
            }
        }
    }
    cells
}

/// One report row: a cell at one seed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub table: String,
    pub cell: String,
    pub method: Method,
    pub schedule: Option<Schedule>,
    pub scale_factor: f64,
    pub size_aug: bool,
    pub fakes: bool,
    pub aux_weight: f64,
    pub seed: u64,
    pub map25: f64,
    pub map50: f64,
    pub runtime_s: f64,
    /// SHA-256 of the cell's resolved run config; the config itself is
    /// written next to the report so the cell can be rerun exactly.
    pub config_hash: String,
}

/// Resolved run config for one cell at one seed.
pub fn cell_config(base: &RunConfig, cell: &Cell, seed: u64) -> RunConfig {
    let mut cfg = base.clone();
    cfg.train = cell.train.clone();
    cfg.train.seed = seed;
    cfg.ablation = AblationGrid::default();
    cfg
}

pub fn config_hash(cfg: &RunConfig) -> String {
    hex::encode(Sha256::digest(cfg.to_json().as_bytes()))
}

/// Trains and evaluates one cell. Every arm trains for the same total
/// number of epochs.
pub fn run_cell(cfg: &RunConfig, cell: &Cell, data: &Dataset) -> Result<AblationRow> {
    let start = Instant::now();
    let t = &cfg.train;
    let report = match cell.schedule {
        None => {
            let mut b = ModelBundle::new(cfg.model.clone(), t.seed)?;
            pretrain_baseline(&mut b, data, t, t.baseline_epochs + t.stage1_epochs + t.stage2_epochs)?;
            evaluate(&b.params, &data.val, &t.decode)?
        }
        Some(Schedule::TwoStage) => {
            let mut b = ModelBundle::new(cfg.model.clone(), t.seed)?;
            pretrain_baseline(&mut b, data, t, t.baseline_epochs)?;
            train_stage1(&mut b, data, t)?;
            train_stage2(&mut b, data, t)?;
            evaluate(&b.params, &data.val, &t.decode)?
        }
        Some(Schedule::OneStage) => {
            let (b, _) = train_one_stage(cfg.model.clone(), data, t)?;
            evaluate(&b.params, &data.val, &t.decode)?
        }
    };
    Ok(AblationRow {
        table: cell.table.clone(),
        cell: cell.label(),
        method: cell.method,
        schedule: cell.schedule,
        scale_factor: t.augment.scale_factor,
        size_aug: t.augment.enable_size_aug,
        fakes: t.augment.enable_fake,
        aux_weight: t.aux_weight,
        seed: t.seed,
        map25: report.map_at(0.25).unwrap_or(0.0),
        map50: report.map_at(0.5).unwrap_or(0.0),
        runtime_s: start.elapsed().as_secs_f64(),
        config_hash: config_hash(cfg),
    })
}

pub const REPORT_HEADER: &str =
    "table,cell,method,schedule,scale_factor,size_aug,fakes,aux_weight,seed,map25,map50,runtime_s,config_hash";

pub fn rows_to_csv(rows: &[AblationRow]) -> String {
    let mut out = String::from(REPORT_HEADER);
    out.push('\n');
    for r in rows {
        let method = serde_json::to_value(r.method).expect("serializes");
        let schedule = r.schedule.map(|s| serde_json::to_value(s).expect("serializes"));
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{},{},{},{},{:.3},{}",
            r.table,
            r.cell,
            method.as_str().unwrap_or_default(),
            schedule.as_ref().and_then(|s| s.as_str()).unwrap_or(""),
            r.scale_factor,
            r.size_aug,
            r.fakes,
            r.aux_weight,
            r.seed,
            r.map25,
            r.map50,
            r.runtime_s,
            r.config_hash
        );
    }
    out
}
