//! Training protocols: baseline pretraining, the two-stage schedule, the
//! one-stage variant, stripping of the auxiliary branch, and checkpoints.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::detection::{
    aux_loss, detection_loss, evaluate_map, head_forward, total_loss, LossBreakdown, LossTerms, MapReport,
};
use crate::error::{Error, Result};
use crate::lai::{dither_centers, identification_loss, make_fake_instances, AugmentConfig};
use crate::model::{
    aux_forward, is_aux_group, main_forward, predict, Architecture, AuxVariant, DecodeConfig, ModelConfig,
    PreparedScene, AUX_GROUPS, MAIN_GROUPS,
};
use crate::numerics::{group_of, ParamMask, ParamStore, Sgd, Tape, Tensor, Var};
use crate::scene::{Annotation, AnnotationSet, Bounds, ClassSizeStats, GenConfig};

pub const CHECKPOINT_VERSION: u32 = 1;
pub const MAP_THRESHOLDS: [f64; 2] = [0.25, 0.5];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Init,
    Baseline,
    Stage1,
    Stage2,
    OneStage,
    Stripped,
}

impl Stage {
    pub fn name(self) -> &'static str {
        match self {
            Stage::Init => "init",
            Stage::Baseline => "baseline",
            Stage::Stage1 => "stage1",
            Stage::Stage2 => "stage2",
            Stage::OneStage => "one_stage",
            Stage::Stripped => "stripped",
        }
    }
}

/// Parameters of the detector and, during training, its auxiliary branch,
/// together with the training RNG and the last completed stage.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelBundle {
    pub config: ModelConfig,
    /// `None` while the bundle holds no auxiliary branch.
    pub variant: Option<AuxVariant>,
    pub stage: Stage,
    pub params: ParamStore,
    pub rng: ChaCha8Rng,
}

impl ModelBundle {
    /// Freshly initialized detector (backbone and head).
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        Architecture::default().init_main(&mut params, &config, &mut rng);
        Ok(ModelBundle {
            config,
            variant: None,
            stage: Stage::Init,
            params,
            rng,
        })
    }

    pub fn has_aux(&self) -> bool {
        self.params.names().any(|n| is_aux_group(group_of(n)))
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CheckpointFile {
    version: u32,
    model: ModelConfig,
    variant: Option<AuxVariant>,
    stage: Stage,
    params: ParamStore,
    rng: ChaCha8Rng,
}

pub fn checkpoint_to_json(bundle: &ModelBundle) -> String {
    let file = CheckpointFile {
        version: CHECKPOINT_VERSION,
        model: bundle.config.clone(),
        variant: bundle.variant,
        stage: bundle.stage,
        params: bundle.params.clone(),
        rng: bundle.rng.clone(),
    };
    serde_json::to_string(&file).expect("checkpoint serializes")
}

pub fn checkpoint_from_json(text: &str, context: &str) -> Result<ModelBundle> {
    let raw: serde_json::Value = serde_json::from_str(text).map_err(|e| Error::parse(context, e))?;
    let found = raw
        .get("version")
        .and_then(serde_json::Value::as_u64)
        .ok_or_else(|| Error::parse(context, "missing integer field `version`"))?;
    if found != CHECKPOINT_VERSION as u64 {
        return Err(Error::Version {
            expected: CHECKPOINT_VERSION,
            found: found as u32,
        });
    }
    let file: CheckpointFile = serde_json::from_value(raw).map_err(|e| Error::parse(context, e))?;
    file.model.validate()?;
    Ok(ModelBundle {
        config: file.model,
        variant: file.variant,
        stage: file.stage,
        params: file.params,
        rng: file.rng,
    })
}

pub fn save_checkpoint(bundle: &ModelBundle, path: &Path) -> Result<()> {
    fs::write(path, checkpoint_to_json(bundle)).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<ModelBundle> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    checkpoint_from_json(&text, &path.display().to_string())
}

/// Drops every auxiliary parameter. The remaining backbone and head are
/// untouched, so inference is unchanged.
pub fn strip_auxiliary(bundle: &ModelBundle) -> ModelBundle {
    ModelBundle {
        config: bundle.config.clone(),
        variant: None,
        stage: Stage::Stripped,
        params: bundle.params.filter_groups(|g| MAIN_GROUPS.contains(&g)),
        rng: bundle.rng.clone(),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub baseline_epochs: usize,
    pub stage1_epochs: usize,
    pub stage2_epochs: usize,
    /// Defaults to the sum of the three stage lengths above.
    #[serde(default)]
    pub one_stage_epochs: Option<usize>,
    pub batch_size: usize,
    pub lr: f64,
    pub momentum: f64,
    /// Learning rate multiplier applied once `decay_at` of a stage's epochs
    /// have passed.
    pub lr_decay: f64,
    pub decay_at: f64,
    pub aux_weight: f64,
    pub augment: AugmentConfig,
    /// Multiplies the class size statistics used to draw fakes.
    pub fake_size_scale: f64,
    pub variant: AuxVariant,
    pub seed: u64,
    /// Validation mAP every this many epochs and at the end of each stage;
    /// 0 evaluates only at the end.
    pub eval_every: usize,
    pub decode: DecodeConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            baseline_epochs: 30,
            stage1_epochs: 30,
            stage2_epochs: 60,
            one_stage_epochs: None,
            batch_size: 4,
            lr: 1e-2,
            momentum: 0.9,
            lr_decay: 0.1,
            decay_at: 2.0 / 3.0,
            aux_weight: 1.0,
            augment: AugmentConfig::default(),
            fake_size_scale: 1.0,
            variant: AuxVariant::LkmLai,
            seed: 0,
            eval_every: 10,
            decode: DecodeConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.augment.validate()?;
        if self.batch_size == 0 {
            return Err(Error::Validation("train.batch_size must be positive".into()));
        }
        for (name, v) in [
            ("train.lr", self.lr),
            ("train.lr_decay", self.lr_decay),
            ("train.fake_size_scale", self.fake_size_scale),
        ] {
            if !(v > 0.0) || !v.is_finite() {
                return Err(Error::Validation(format!(
                    "{name} must be a finite positive value, got {v}"
                )));
            }
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Validation(format!(
                "train.momentum must be in [0, 1), got {}",
                self.momentum
            )));
        }
        if !(0.0..=1.0).contains(&self.decay_at) {
            return Err(Error::Validation(format!(
                "train.decay_at must be in [0, 1], got {}",
                self.decay_at
            )));
        }
        if !(self.aux_weight >= 0.0) || !self.aux_weight.is_finite() {
            return Err(Error::Validation(format!(
                "train.aux_weight must be >= 0, got {}",
                self.aux_weight
            )));
        }
        for (name, v) in [
            ("train.score_threshold", self.decode.score_threshold),
            ("train.nms_iou", self.decode.nms_iou),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::Validation(format!("{name} must be in [0, 1], got {v}")));
            }
        }
        Ok(())
    }

    pub fn one_stage_epochs(&self) -> usize {
        self.one_stage_epochs
            .unwrap_or(self.baseline_epochs + self.stage1_epochs + self.stage2_epochs)
    }

    fn lr_at(&self, epoch: usize, epochs: usize) -> f64 {
        let decay_from = (self.decay_at * epochs as f64).floor() as usize;
        if epoch >= decay_from {
            self.lr * self.lr_decay
        } else {
            self.lr
        }
    }
}

/// Prepared train and validation scenes plus the generator settings that
/// fake instances are drawn from.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub gen: GenConfig,
    pub bounds: Bounds,
    pub train: Vec<PreparedScene>,
    pub val: Vec<PreparedScene>,
}

impl Dataset {
    pub fn new(gen: GenConfig, train: Vec<PreparedScene>, val: Vec<PreparedScene>) -> Result<Self> {
        Ok(Dataset {
            bounds: gen.scene_bounds()?,
            gen,
            train,
            val,
        })
    }
}

/// One row of the training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub stage: String,
    pub epoch: usize,
    pub aux_det: f64,
    pub main_det: f64,
    pub idf: f64,
    pub aux: f64,
    pub total: f64,
    pub map25: Option<f64>,
    pub map50: Option<f64>,
}

pub const LOG_HEADER: &str = "epoch,stage,aux_det,main_det,idf,aux,total,map25_val,map50_val";

pub fn log_to_csv(rows: &[EpochLog]) -> String {
    let mut out = String::from(LOG_HEADER);
    out.push('\n');
    let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
    for r in rows {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{},{}",
            r.epoch,
            r.stage,
            r.aux_det,
            r.main_det,
            r.idf,
            r.aux,
            r.total,
            opt(r.map25),
            opt(r.map50)
        );
    }
    out
}

/// What a training step optimizes.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    /// Detection loss of the detector.
    Baseline,
    /// Detection loss of the head on the guidance, plus identification.
    Stage1,
    /// Detection loss plus weighted auxiliary loss against a frozen
    /// auxiliary branch.
    Stage2,
    /// Every term at once.
    OneStage,
}

impl Mode {
    fn stage(self) -> Stage {
        match self {
            Mode::Baseline => Stage::Baseline,
            Mode::Stage1 => Stage::Stage1,
            Mode::Stage2 => Stage::Stage2,
            Mode::OneStage => Stage::OneStage,
        }
    }

    /// Groups a stage updates.
    pub fn mask(self) -> ParamMask {
        match self {
            Mode::Baseline | Mode::Stage2 => ParamMask::of(MAIN_GROUPS),
            Mode::Stage1 => ParamMask::of(AUX_GROUPS.iter().copied().chain(["head"])),
            Mode::OneStage => ParamMask::of(AUX_GROUPS.iter().copied().chain(MAIN_GROUPS)),
        }
    }
}

/// Augmented annotations: dithered reals followed by fakes.
pub fn augment_annotations(
    reals: &[Annotation],
    cfg: &AugmentConfig,
    bounds: &Bounds,
    fake_stats: &[ClassSizeStats],
    rng: &mut ChaCha8Rng,
) -> Result<Vec<Annotation>> {
    let set = AnnotationSet::new(reals.to_vec());
    let dithered = dither_centers(&set, cfg, rng);
    Ok(make_fake_instances(&dithered, cfg, bounds, fake_stats, rng)?.items)
}

fn fake_stats(gen: &GenConfig, cfg: &TrainConfig) -> Vec<ClassSizeStats> {
    gen.size_stats().iter().map(|s| s.scaled(cfg.fake_size_scale)).collect()
}

fn add_term(tape: &mut Tape, acc: Option<Var>, v: Option<Var>) -> Result<Option<Var>> {
    Ok(match (acc, v) {
        (Some(a), Some(b)) => Some(tape.add(a, b)?),
        (a, b) => a.or(b),
    })
}

/// Everything one step needs besides the parameters.
struct StepContext<'a> {
    arch: &'a Architecture,
    variant: Option<AuxVariant>,
    cfg: &'a TrainConfig,
    bounds: &'a Bounds,
    fake_stats: Vec<ClassSizeStats>,
    /// Frozen guidance per training scene, for stage 2.
    frozen_guidance: Option<Vec<Tensor>>,
}

impl StepContext<'_> {
    fn scene_terms(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        mode: Mode,
        index: usize,
        prep: &PreparedScene,
        rng: &mut ChaCha8Rng,
    ) -> Result<LossTerms> {
        let mut terms = LossTerms::default();
        if matches!(mode, Mode::Baseline | Mode::Stage2 | Mode::OneStage) {
            let main = main_forward(tape, store, self.arch, prep)?;
            terms.main_det = Some(detection_loss(tape, &main.preds, &prep.targets)?);
            if mode == Mode::Stage2 {
                let g = self.frozen_guidance.as_ref().expect("stage 2 caches the guidance")[index].clone();
                let g = tape.constant(g)?;
                terms.aux = Some(aux_loss(tape, main.features, g)?);
            }
            if mode == Mode::OneStage {
                let (aux_det, idf, g) = self.aux_terms(tape, store, prep, rng)?;
                terms.aux_det = Some(aux_det);
                terms.idf = idf;
                terms.aux = Some(aux_loss(tape, main.features, g)?);
            }
        }
        if mode == Mode::Stage1 {
            let (aux_det, idf, _) = self.aux_terms(tape, store, prep, rng)?;
            terms.aux_det = Some(aux_det);
            terms.idf = idf;
        }
        Ok(terms)
    }

    /// Detection loss of the head on the guidance, identification loss when
    /// the variant has it, and the guidance itself.
    fn aux_terms(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        prep: &PreparedScene,
        rng: &mut ChaCha8Rng,
    ) -> Result<(Var, Option<Var>, Var)> {
        let variant = self
            .variant
            .ok_or_else(|| Error::Checkpoint("auxiliary branch missing".into()))?;
        let anns = match variant {
            AuxVariant::LkmLai => {
                augment_annotations(&prep.reals, &self.cfg.augment, self.bounds, &self.fake_stats, rng)?
            }
            AuxVariant::Lkm => prep.reals.clone(),
        };
        let aux = aux_forward(tape, store, self.arch, variant, prep, &anns)?;
        let preds = head_forward(tape, store, &self.arch.head, aux.guidance, &prep.seeds.positions)?;
        let aux_det = detection_loss(tape, &preds, &prep.targets)?;
        let idf = match aux.probs {
            Some(p) => Some(identification_loss(tape, p, &aux.flags)?),
            None => None,
        };
        Ok((aux_det, idf, aux.guidance))
    }
}

/// Guidance for every scene from clean (unaugmented) annotations.
pub fn frozen_aux_representations(
    store: &ParamStore,
    variant: AuxVariant,
    scenes: &[PreparedScene],
) -> Result<Vec<Tensor>> {
    let arch = Architecture::default();
    scenes
        .iter()
        .map(|prep| {
            let mut tape = Tape::new();
            let out = aux_forward(&mut tape, store, &arch, variant, prep, &prep.reals)?;
            Ok(tape.value(out.guidance).clone())
        })
        .collect()
}

fn diverged(stage: Stage, epoch: usize, step: usize, loss: f64) -> Error {
    Error::Divergence {
        stage: stage.name().to_string(),
        epoch,
        step,
        loss,
    }
}

/// Runs `epochs` epochs of `mode`, updating only the groups in `mask`.
/// Scene order is reshuffled every epoch from the bundle's RNG.
pub fn train_epochs(
    bundle: &mut ModelBundle,
    data: &Dataset,
    cfg: &TrainConfig,
    mode: Mode,
    epochs: usize,
    mask: &ParamMask,
) -> Result<Vec<EpochLog>> {
    cfg.validate()?;
    if data.train.is_empty() {
        return Err(Error::Validation("training split is empty".into()));
    }
    let arch = Architecture::default();
    let stage = mode.stage();
    let frozen_guidance = match mode {
        Mode::Stage2 => {
            let variant = bundle
                .variant
                .ok_or_else(|| Error::Checkpoint("auxiliary branch missing".into()))?;
            Some(frozen_aux_representations(&bundle.params, variant, &data.train)?)
        }
        _ => None,
    };
    let ctx = StepContext {
        arch: &arch,
        variant: bundle.variant,
        cfg,
        bounds: &data.bounds,
        fake_stats: fake_stats(&data.gen, cfg),
        frozen_guidance,
    };
    let mut logs = Vec::with_capacity(epochs);
    let mut sgd = Sgd::new(cfg.lr, cfg.momentum)?;
    let mut order: Vec<usize> = (0..data.train.len()).collect();
    for epoch in 0..epochs {
        sgd.lr = cfg.lr_at(epoch, epochs);
        order.shuffle(&mut bundle.rng);
        let mut sums = LossBreakdown::default();
        let mut steps = 0usize;
        for (step, batch) in order.chunks(cfg.batch_size).enumerate() {
            let mut tape = Tape::new();
            let mut acc = LossTerms::default();
            let result = (|| -> Result<(Var, LossBreakdown)> {
                for &i in batch {
                    let t = ctx.scene_terms(&mut tape, &bundle.params, mode, i, &data.train[i], &mut bundle.rng)?;
                    acc.aux_det = add_term(&mut tape, acc.aux_det, t.aux_det)?;
                    acc.main_det = add_term(&mut tape, acc.main_det, t.main_det)?;
                    acc.idf = add_term(&mut tape, acc.idf, t.idf)?;
                    acc.aux = add_term(&mut tape, acc.aux, t.aux)?;
                }
                let inv = 1.0 / batch.len() as f64;
                let mut mean = LossTerms::default();
                for (dst, src) in [
                    (&mut mean.aux_det, acc.aux_det),
                    (&mut mean.main_det, acc.main_det),
                    (&mut mean.idf, acc.idf),
                    (&mut mean.aux, acc.aux),
                ] {
                    *dst = match src {
                        Some(v) => Some(tape.scale(v, inv)?),
                        None => None,
                    };
                }
                total_loss(&mut tape, mean, cfg.aux_weight)
            })();
            let (loss, breakdown) = match result {
                Ok(v) => v,
                Err(Error::Numeric { .. }) => return Err(diverged(stage, epoch, step, f64::NAN)),
                Err(e) => return Err(e),
            };
            if !breakdown.total.is_finite() {
                return Err(diverged(stage, epoch, step, breakdown.total));
            }
            let grads = match tape.backward(loss, &bundle.params) {
                Ok(g) => g,
                Err(Error::Numeric { .. }) => return Err(diverged(stage, epoch, step, breakdown.total)),
                Err(e) => return Err(e),
            };
            sgd.step(&mut bundle.params, &grads, mask)?;
            sums.aux_det += breakdown.aux_det;
            sums.main_det += breakdown.main_det;
            sums.idf += breakdown.idf;
            sums.aux += breakdown.aux;
            sums.total += breakdown.total;
            steps += 1;
        }
        let n = steps as f64;
        let last = epoch + 1 == epochs;
        let due = last || (cfg.eval_every > 0 && (epoch + 1) % cfg.eval_every == 0);
        let report = if due && !data.val.is_empty() {
            Some(evaluate(&bundle.params, &data.val, &cfg.decode)?)
        } else {
            None
        };
        let row = EpochLog {
            stage: stage.name().to_string(),
            epoch: epoch + 1,
            aux_det: sums.aux_det / n,
            main_det: sums.main_det / n,
            idf: sums.idf / n,
            aux: sums.aux / n,
            total: sums.total / n,
            map25: report.as_ref().and_then(|r| r.map_at(0.25)),
            map50: report.as_ref().and_then(|r| r.map_at(0.5)),
        };
        log::info!(
            "{} epoch {}/{}: total {:.5} aux_det {:.5} main_det {:.5} idf {:.5} aux {:.5}{}",
            row.stage,
            row.epoch,
            epochs,
            row.total,
            row.aux_det,
            row.main_det,
            row.idf,
            row.aux,
            row.map25.map(|m| format!(" mAP@0.25 {m:.4}")).unwrap_or_default()
        );
        logs.push(row);
    }
    bundle.stage = stage;
    Ok(logs)
}

/// Trains (or keeps training) the plain detector.
pub fn pretrain_baseline(
    bundle: &mut ModelBundle,
    data: &Dataset,
    cfg: &TrainConfig,
    epochs: usize,
) -> Result<Vec<EpochLog>> {
    if bundle.has_aux() {
        return Err(Error::Checkpoint(
            "baseline training expects a bundle without an auxiliary branch".into(),
        ));
    }
    train_epochs(bundle, data, cfg, Mode::Baseline, epochs, &Mode::Baseline.mask())
}

/// Stage 1: builds the auxiliary branch with its backbone copied from the
/// trained one and fits it, together with the shared head, on the detection
/// loss over the guidance plus the identification loss.
pub fn train_stage1(bundle: &mut ModelBundle, data: &Dataset, cfg: &TrainConfig) -> Result<Vec<EpochLog>> {
    if bundle.has_aux() {
        return Err(Error::Checkpoint(
            "stage 1 expects a baseline checkpoint without an auxiliary branch".into(),
        ));
    }
    Architecture::default().init_aux(&mut bundle.params, &bundle.config, cfg.variant, &mut bundle.rng);
    bundle.variant = Some(cfg.variant);
    train_epochs(bundle, data, cfg, Mode::Stage1, cfg.stage1_epochs, &Mode::Stage1.mask())
}

/// Stage 2: freezes the auxiliary branch and trains the backbone and head on
/// the detection loss plus the weighted auxiliary loss.
pub fn train_stage2(bundle: &mut ModelBundle, data: &Dataset, cfg: &TrainConfig) -> Result<Vec<EpochLog>> {
    if !bundle.has_aux() || bundle.variant.is_none() {
        return Err(Error::Checkpoint(
            "auxiliary branch missing: stage 2 needs a stage-1 checkpoint".into(),
        ));
    }
    train_epochs(bundle, data, cfg, Mode::Stage2, cfg.stage2_epochs, &Mode::Stage2.mask())
}

/// All groups from scratch under the full objective in a single phase.
pub fn train_one_stage(config: ModelConfig, data: &Dataset, cfg: &TrainConfig) -> Result<(ModelBundle, Vec<EpochLog>)> {
    let mut bundle = ModelBundle::new(config, cfg.seed)?;
    Architecture::default().init_aux(&mut bundle.params, &bundle.config, cfg.variant, &mut bundle.rng);
    bundle.variant = Some(cfg.variant);
    let logs = train_epochs(
        &mut bundle,
        data,
        cfg,
        Mode::OneStage,
        cfg.one_stage_epochs(),
        &Mode::OneStage.mask(),
    )?;
    Ok((bundle, logs))
}

/// mAP at 0.25 and 0.5 of the deployed path over `scenes`.
pub fn evaluate(params: &ParamStore, scenes: &[PreparedScene], decode: &DecodeConfig) -> Result<MapReport> {
    let arch = Architecture::default();
    let num_classes = arch.head.num_classes(params)?;
    let mut detections = Vec::with_capacity(scenes.len());
    for prep in scenes {
        detections.push(predict(params, &arch, prep, decode)?.0);
    }
    let gt: Vec<Vec<Annotation>> = scenes.iter().map(|p| p.reals.clone()).collect();
    evaluate_map(&detections, &gt, num_classes, &MAP_THRESHOLDS)
}

/// Fraction of annotations (reals plus generated fakes) whose
/// identification probability lands on the right side of 0.5.
pub fn identification_accuracy(
    bundle: &ModelBundle,
    data: &Dataset,
    scenes: &[PreparedScene],
    cfg: &TrainConfig,
    seed: u64,
) -> Result<f64> {
    let variant = bundle
        .variant
        .ok_or_else(|| Error::Checkpoint("auxiliary branch missing".into()))?;
    let arch = Architecture::default();
    let stats = fake_stats(&data.gen, cfg);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut right, mut total) = (0usize, 0usize);
    for prep in scenes {
        let anns = augment_annotations(&prep.reals, &cfg.augment, &data.bounds, &stats, &mut rng)?;
        let mut tape = Tape::new();
        let out = aux_forward(&mut tape, &bundle.params, &arch, variant, prep, &anns)?;
        let Some(p) = out.probs else { continue };
        for (prob, flag) in tape.value(p).data().iter().zip(&out.flags) {
            right += ((*prob > 0.5) == (*flag == 1.0)) as usize;
            total += 1;
        }
    }
    if total == 0 {
        return Err(Error::Validation("no annotations to classify".into()));
    }
    Ok(right as f64 / total as f64)
}

/// Names of the auxiliary parameters in `store`.
pub fn aux_param_names(store: &ParamStore) -> BTreeSet<String> {
    store.names().filter(|n| is_aux_group(group_of(n))).cloned().collect()
}

/// Validation metrics of the two arms of an equal-epoch comparison.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ComparisonResult {
    pub seed: u64,
    pub baseline: MapReport,
    pub two_stage: MapReport,
    pub baseline_log: Vec<EpochLog>,
    pub two_stage_log: Vec<EpochLog>,
}

impl ComparisonResult {
    /// Two-stage mAP@0.25 minus baseline mAP@0.25.
    pub fn improvement(&self) -> f64 {
        self.two_stage.map_at(0.25).unwrap_or(0.0) - self.baseline.map_at(0.25).unwrap_or(0.0)
    }
}

/// Baseline versus two-stage training at equal total epochs. Both arms
/// start from the same pretrained detector; the baseline arm then keeps
/// training for `stage1_epochs + stage2_epochs` more epochs while the other
/// arm runs stage 1 and stage 2.
pub fn equal_epoch_comparison(config: &ModelConfig, data: &Dataset, cfg: &TrainConfig) -> Result<ComparisonResult> {
    let quiet = TrainConfig {
        eval_every: 0,
        ..cfg.clone()
    };
    let mut pretrained = ModelBundle::new(config.clone(), cfg.seed)?;
    let mut pre_log = pretrain_baseline(&mut pretrained, data, &quiet, cfg.baseline_epochs)?;

    let mut baseline = pretrained.clone();
    let mut baseline_log = pre_log.clone();
    baseline_log.extend(pretrain_baseline(
        &mut baseline,
        data,
        &quiet,
        cfg.stage1_epochs + cfg.stage2_epochs,
    )?);

    let mut two_stage = pretrained;
    pre_log.extend(train_stage1(&mut two_stage, data, &quiet)?);
    pre_log.extend(train_stage2(&mut two_stage, data, &quiet)?);

    Ok(ComparisonResult {
        seed: cfg.seed,
        baseline: evaluate(&baseline.params, &data.val, &cfg.decode)?,
        two_stage: evaluate(&two_stage.params, &data.val, &cfg.decode)?,
        baseline_log,
        two_stage_log: pre_log,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scene::generate_scene;

    fn tiny_model() -> ModelConfig {
        ModelConfig {
            num_seeds: 16,
            neighbors: 4,
            hidden: 8,
            channels: 8,
            class_dim: 3,
            annotation_hidden: 8,
            num_classes: 3,
        }
    }

    fn tiny_data(train: usize, val: usize) -> Dataset {
        let gen = GenConfig::default();
        let prep = |s: u64| PreparedScene::new(generate_scene(&gen, s).unwrap(), &tiny_model()).unwrap();
        Dataset::new(
            gen.clone(),
            (0..train as u64).map(prep).collect(),
            (1000..1000 + val as u64).map(prep).collect(),
        )
        .unwrap()
    }

    fn quick_cfg() -> TrainConfig {
        TrainConfig {
            baseline_epochs: 1,
            stage1_epochs: 1,
            stage2_epochs: 1,
            batch_size: 2,
            eval_every: 0,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn baseline_smoke_and_determinism() {
        let data = tiny_data(2, 1);
        let cfg = quick_cfg();
        let run = || {
            let mut b = ModelBundle::new(tiny_model(), 3).unwrap();
            let logs = pretrain_baseline(&mut b, &data, &cfg, 1).unwrap();
            (b, logs)
        };
        let (a, la) = run();
        let (b, lb) = run();
        assert!(la[0].total.is_finite());
        assert_eq!(checkpoint_to_json(&a), checkpoint_to_json(&b));
        assert_eq!(la, lb);
        assert_eq!(a.stage, Stage::Baseline);
    }

    #[test]
    fn frozen_mask_leaves_parameters_unchanged() {
        let data = tiny_data(2, 0);
        let cfg = quick_cfg();
        let mut b = ModelBundle::new(tiny_model(), 1).unwrap();
        Architecture::default().init_aux(&mut b.params, &b.config, AuxVariant::LkmLai, &mut b.rng);
        b.variant = Some(AuxVariant::LkmLai);
        let before = b.params.clone();
        train_epochs(&mut b, &data, &cfg, Mode::Stage1, 1, &ParamMask::none()).unwrap();
        assert_eq!(b.params, before);
    }

    #[test]
    fn stage1_updates_shared_head_and_aux_only() {
        let data = tiny_data(3, 0);
        let cfg = quick_cfg();
        let mut b = ModelBundle::new(tiny_model(), 2).unwrap();
        pretrain_baseline(&mut b, &data, &cfg, 1).unwrap();
        let f_before = b.params.fingerprint(Some("backbone"));
        let d_before = b.params.fingerprint(Some("head"));
        train_stage1(&mut b, &data, &cfg).unwrap();
        assert_eq!(b.params.fingerprint(Some("backbone")), f_before);
        assert_ne!(b.params.fingerprint(Some("head")), d_before);
        assert_ne!(
            b.params.fingerprint(Some("aux_backbone")),
            b.params.fingerprint(Some("backbone"))
        );
        assert_eq!(b.stage, Stage::Stage1);
    }

    #[test]
    fn stage2_freezes_the_auxiliary_branch() {
        let data = tiny_data(3, 1);
        let cfg = quick_cfg();
        let mut b = ModelBundle::new(tiny_model(), 4).unwrap();
        pretrain_baseline(&mut b, &data, &cfg, 1).unwrap();
        train_stage1(&mut b, &data, &cfg).unwrap();
        let aux_before: Vec<u64> = AUX_GROUPS.iter().map(|g| b.params.fingerprint(Some(g))).collect();
        let f_before = b.params.fingerprint(Some("backbone"));
        let logs = train_stage2(&mut b, &data, &cfg).unwrap();
        let aux_after: Vec<u64> = AUX_GROUPS.iter().map(|g| b.params.fingerprint(Some(g))).collect();
        assert_eq!(aux_before, aux_after);
        assert_ne!(b.params.fingerprint(Some("backbone")), f_before);
        assert!(logs[0].aux > 0.0 && logs[0].map25.is_some());
    }

    #[test]
    fn stage2_on_stripped_checkpoint_is_rejected() {
        let data = tiny_data(1, 0);
        let mut b = ModelBundle::new(tiny_model(), 5).unwrap();
        let err = train_stage2(&mut b, &data, &quick_cfg()).unwrap_err();
        assert!(err.to_string().contains("auxiliary branch missing"), "{err}");
        let mut stripped = strip_auxiliary(&b);
        let err = train_stage2(&mut stripped, &data, &quick_cfg()).unwrap_err();
        assert!(err.to_string().contains("auxiliary branch missing"), "{err}");
    }

    #[test]
    fn one_stage_runs_and_strips() {
        let data = tiny_data(2, 1);
        let cfg = TrainConfig {
            one_stage_epochs: Some(1),
            ..quick_cfg()
        };
        let (b, logs) = train_one_stage(tiny_model(), &data, &cfg).unwrap();
        assert!(logs[0].aux_det > 0.0 && logs[0].main_det > 0.0 && logs[0].idf > 0.0);
        let s = strip_auxiliary(&b);
        assert!(aux_param_names(&s.params).is_empty());
        assert!(s.params.num_scalars() < b.params.num_scalars());
        assert_eq!(strip_auxiliary(&s), s);
        assert_eq!(
            evaluate(&s.params, &data.val, &cfg.decode).unwrap(),
            evaluate(&b.params, &data.val, &cfg.decode).unwrap()
        );
    }

    #[test]
    fn checkpoint_round_trip_and_errors() {
        let b = ModelBundle::new(tiny_model(), 6).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ck.json");
        save_checkpoint(&b, &path).unwrap();
        assert_eq!(load_checkpoint(&path).unwrap(), b);

        let text = checkpoint_to_json(&b);
        let err = checkpoint_from_json(&text[..text.len() / 2], "cut").unwrap_err();
        assert!(matches!(err, Error::Parse { .. }));
        let bumped = text.replacen("\"version\":1", "\"version\":7", 1);
        assert!(matches!(
            checkpoint_from_json(&bumped, "v"),
            Err(Error::Version { expected: 1, found: 7 })
        ));
    }

    #[test]
    fn rng_state_survives_round_trip() {
        use rand::Rng;
        let mut b = ModelBundle::new(tiny_model(), 7).unwrap();
        let _: u64 = b.rng.random();
        let mut back = checkpoint_from_json(&checkpoint_to_json(&b), "rt").unwrap();
        assert_eq!(b.rng.random::<u64>(), back.rng.random::<u64>());
    }

    #[test]
    fn lr_schedule_decays_at_two_thirds() {
        let cfg = TrainConfig::default();
        assert_eq!(cfg.lr_at(19, 30), 1e-2);
        assert_eq!(cfg.lr_at(20, 30), 1e-2 * 0.1);
        assert_eq!(cfg.one_stage_epochs(), 120);
    }

    #[test]
    fn csv_has_header_and_blank_missing_metrics() {
        let rows = vec![EpochLog {
            stage: "baseline".into(),
            epoch: 1,
            aux_det: 0.0,
            main_det: 1.5,
            idf: 0.0,
            aux: 0.0,
            total: 1.5,
            map25: None,
            map50: Some(0.25),
        }];
        let csv = log_to_csv(&rows);
        assert_eq!(csv, format!("{LOG_HEADER}\n1,baseline,0,1.5,0,0,1.5,,0.25\n"));
    }
}
