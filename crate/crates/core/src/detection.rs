//! Shared detection head, target assignment, the detection / auxiliary
//! / total losses, box decoding with greedy NMS, and mAP evaluation.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::encoders::Linear;
use crate::error::{Error, Result};
use crate::numerics::{sigmoid, ParamStore, Tape, Tensor, Var};
use crate::scene::{iou3d, Annotation, Point};

/// Objectness logit, center offset, log-size, then class logits.
pub const BOX_OUTPUTS: usize = 7;

/// `C → C` (ReLU) `→ 7 + K` per seed.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DetectionHead {
    pub hidden: Linear,
    pub out: Linear,
}

impl DetectionHead {
    pub fn new(prefix: &str) -> Self {
        DetectionHead {
            hidden: Linear::new(format!("{prefix}.mlp1")),
            out: Linear::new(format!("{prefix}.mlp2")),
        }
    }

    pub fn init(&self, store: &mut ParamStore, channels: usize, num_classes: usize, rng: &mut impl Rng) {
        self.hidden.init(store, channels, channels, rng);
        self.out.init(store, channels, BOX_OUTPUTS + num_classes, rng);
    }

    pub fn num_classes(&self, store: &ParamStore) -> Result<usize> {
        Ok(store.get(&self.out.w())?.cols() - BOX_OUTPUTS)
    }
}

/// Per-seed raw predictions, all on the tape.
#[derive(Clone, Copy, Debug)]
pub struct RawPredictions {
    /// `n×1`.
    pub objectness: Var,
    /// `n×3`, absolute: seed position plus the predicted offset.
    pub center: Var,
    /// `n×3`, natural log of the box extent.
    pub log_size: Var,
    /// `n×K`.
    pub class_logits: Var,
}

pub fn head_forward(
    tape: &mut Tape,
    store: &ParamStore,
    head: &DetectionHead,
    repr: Var,
    seed_positions: &[Point],
) -> Result<RawPredictions> {
    let n = tape.value(repr).rows();
    if n != seed_positions.len() {
        return Err(Error::Contract(format!(
            "head_forward: {n} feature rows for {} seeds",
            seed_positions.len()
        )));
    }
    let h = head.hidden.forward(tape, store, repr)?;
    let h = tape.relu(h)?;
    let out = head.out.forward(tape, store, h)?;
    let width = tape.value(out).cols();
    let objectness = tape.slice_cols(out, 0, 1)?;
    let offset = tape.slice_cols(out, 1, 4)?;
    let seeds = tape.constant(Tensor::from_rows(seed_positions)?)?;
    let center = tape.add(seeds, offset)?;
    let log_size = tape.slice_cols(out, 4, 7)?;
    let class_logits = tape.slice_cols(out, 7, width)?;
    Ok(RawPredictions {
        objectness,
        center,
        log_size,
        class_logits,
    })
}

/// Regression targets for the positive seeds.
#[derive(Clone, Debug, PartialEq)]
pub struct Targets {
    /// Matched ground-truth index per seed, `None` for negatives.
    pub assignment: Vec<Option<usize>>,
    pub objectness: Vec<f64>,
    pub positives: Vec<usize>,
    pub centers: Vec<[f64; 3]>,
    pub log_sizes: Vec<[f64; 3]>,
    pub classes: Vec<usize>,
}

/// A seed is positive when it lies inside a ground-truth box (boundary
/// included); inside several, the box with the nearest center wins, lowest
/// index on ties.
pub fn assign_targets(seed_positions: &[Point], gt: &[Annotation]) -> Targets {
    let assignment: Vec<Option<usize>> = seed_positions
        .iter()
        .map(|p| {
            let mut best: Option<(usize, f64)> = None;
            for (i, a) in gt.iter().enumerate().filter(|(_, a)| a.contains(p)) {
                let d: f64 = (0..3).map(|k| (p[k] - a.center[k]).powi(2)).sum();
                if best.is_none_or(|(_, bd)| d < bd) {
                    best = Some((i, d));
                }
            }
            best.map(|(i, _)| i)
        })
        .collect();
    let positives: Vec<usize> = (0..assignment.len()).filter(|&i| assignment[i].is_some()).collect();
    let matched = |i: &usize| &gt[assignment[*i].expect("positive")];
    Targets {
        objectness: assignment.iter().map(|a| if a.is_some() { 1.0 } else { 0.0 }).collect(),
        centers: positives.iter().map(|i| matched(i).center).collect(),
        log_sizes: positives.iter().map(|i| matched(i).size.map(f64::ln)).collect(),
        classes: positives.iter().map(|i| matched(i).class).collect(),
        positives,
        assignment,
    }
}

/// Objectness BCE averaged over all seeds, plus, averaged over positives:
/// L1 center error summed over axes, L1 log-size error summed over axes,
/// and class cross-entropy. All terms weigh 1.
pub fn detection_loss(tape: &mut Tape, preds: &RawPredictions, targets: &Targets) -> Result<Var> {
    let obj = tape.bce_with_logits(preds.objectness, &targets.objectness)?;
    if targets.positives.is_empty() {
        return Ok(obj);
    }
    let npos = targets.positives.len() as f64;
    let l1 = |tape: &mut Tape, pred: Var, target: &[[f64; 3]]| -> Result<Var> {
        let picked = tape.gather_rows(pred, &targets.positives)?;
        let t = tape.constant(Tensor::from_rows(target)?)?;
        let diff = tape.sub(picked, t)?;
        let abs = tape.abs(diff)?;
        let total = tape.sum(abs)?;
        tape.scale(total, 1.0 / npos)
    };
    let center = l1(tape, preds.center, &targets.centers)?;
    let size = l1(tape, preds.log_size, &targets.log_sizes)?;
    let logits = tape.gather_rows(preds.class_logits, &targets.positives)?;
    let class = tape.cross_entropy(logits, &targets.classes)?;
    let reg = tape.add(center, size)?;
    let sum = tape.add(obj, reg)?;
    tape.add(sum, class)
}

/// `‖features − guidance‖` (Frobenius). The guidance is detached, so the
/// gradient reaches only the parameters behind `features`.
pub fn aux_loss(tape: &mut Tape, features: Var, guidance: Var) -> Result<Var> {
    let (f, g) = (tape.value(features), tape.value(guidance));
    if !f.same_shape(g) {
        return Err(Error::Shape {
            op: "aux_loss",
            lhs: f.shape(),
            rhs: g.shape(),
        });
    }
    let g = tape.detach(guidance)?;
    let diff = tape.sub(features, g)?;
    tape.frobenius(diff)
}

/// Every loss component of one step, with the weight of the auxiliary
/// term. Inactive components are zero.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub aux_det: f64,
    pub main_det: f64,
    pub idf: f64,
    pub aux: f64,
    pub total: f64,
    pub aux_weight: f64,
}

/// Handles of the loss terms present in one step.
#[derive(Clone, Copy, Debug, Default)]
pub struct LossTerms {
    pub aux_det: Option<Var>,
    pub main_det: Option<Var>,
    pub idf: Option<Var>,
    pub aux: Option<Var>,
}

/// `aux_det + main_det + idf + aux_weight·aux` on the tape, plus the recorded values.
pub fn total_loss(tape: &mut Tape, terms: LossTerms, aux_weight: f64) -> Result<(Var, LossBreakdown)> {
    if !(aux_weight >= 0.0) {
        return Err(Error::Contract(format!("aux_weight must be >= 0, got {aux_weight}")));
    }
    let mut parts = Vec::new();
    let mut read = |tape: &mut Tape, v: Option<Var>, weight: f64| -> Result<f64> {
        match v {
            Some(v) => {
                let value = tape.scalar(v)?;
                parts.push(if weight == 1.0 { v } else { tape.scale(v, weight)? });
                Ok(value)
            }
            None => Ok(0.0),
        }
    };
    let aux_det = read(tape, terms.aux_det, 1.0)?;
    let main_det = read(tape, terms.main_det, 1.0)?;
    let idf = read(tape, terms.idf, 1.0)?;
    let aux = read(tape, terms.aux, aux_weight)?;
    let mut total = match parts.first() {
        Some(&v) => v,
        None => return Err(Error::Contract("total_loss needs at least one term".into())),
    };
    for &p in &parts[1..] {
        total = tape.add(total, p)?;
    }
    let breakdown = LossBreakdown {
        aux_det,
        main_det,
        idf,
        aux,
        total: tape.scalar(total)?,
        aux_weight,
    };
    Ok((total, breakdown))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub annotation: Annotation,
    pub score: f64,
}

/// Reads the decoded boxes of every seed from the tape values.
pub fn decode(tape: &Tape, preds: &RawPredictions) -> Vec<Detection> {
    let (obj, center, log_size, logits) = (
        tape.value(preds.objectness),
        tape.value(preds.center),
        tape.value(preds.log_size),
        tape.value(preds.class_logits),
    );
    (0..obj.rows())
        .map(|i| {
            let row = logits.row(i);
            let class = (0..row.len()).fold(0, |best, k| if row[k] > row[best] { k } else { best });
            Detection {
                annotation: Annotation::new(
                    std::array::from_fn(|k| center.get(i, k)),
                    std::array::from_fn(|k| log_size.get(i, k).exp()),
                    class,
                ),
                score: sigmoid(obj.get(i, 0)),
            }
        })
        .collect()
}

/// Greedy class-agnostic NMS: visit by descending score (input order on
/// ties) and keep a box unless its IoU with an already kept box exceeds
/// `iou_threshold`.
pub fn nms(detections: &[Detection], iou_threshold: f64) -> Vec<Detection> {
    let mut order: Vec<usize> = (0..detections.len()).collect();
    order.sort_by(|&a, &b| detections[b].score.total_cmp(&detections[a].score));
    let mut kept: Vec<Detection> = Vec::new();
    for i in order {
        let d = &detections[i];
        if kept
            .iter()
            .all(|k| iou3d(&k.annotation, &d.annotation) <= iou_threshold)
        {
            kept.push(d.clone());
        }
    }
    kept
}

pub fn decode_and_nms(detections: &[Detection], score_threshold: f64, iou_threshold: f64) -> Result<Vec<Detection>> {
    for (name, t) in [("score", score_threshold), ("nms iou", iou_threshold)] {
        if !(0.0..=1.0).contains(&t) {
            return Err(Error::Contract(format!("{name} threshold must be in [0, 1], got {t}")));
        }
    }
    let above: Vec<Detection> = detections
        .iter()
        .filter(|d| d.score > score_threshold)
        .cloned()
        .collect();
    Ok(nms(&above, iou_threshold))
}

/// All-point interpolated AP from detections already sorted by descending
/// score: `tp[i]` marks a true positive.
pub fn average_precision(tp: &[bool], num_gt: usize) -> f64 {
    if num_gt == 0 {
        return 0.0;
    }
    let mut precision = Vec::with_capacity(tp.len());
    let mut recall = Vec::with_capacity(tp.len());
    let mut hits = 0usize;
    for (i, &t) in tp.iter().enumerate() {
        hits += t as usize;
        precision.push(hits as f64 / (i + 1) as f64);
        recall.push(hits as f64 / num_gt as f64);
    }
    for i in (0..precision.len().saturating_sub(1)).rev() {
        precision[i] = precision[i].max(precision[i + 1]);
    }
    let mut ap = 0.0;
    let mut prev_recall = 0.0;
    for (r, p) in recall.iter().zip(&precision) {
        ap += (r - prev_recall) * p;
        prev_recall = *r;
    }
    ap
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ThresholdReport {
    pub iou_threshold: f64,
    /// `None` for classes without ground truth in the split.
    pub per_class_ap: Vec<Option<f64>>,
    pub map: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MapReport {
    pub thresholds: Vec<ThresholdReport>,
    /// Classes without ground truth, left out of every mean.
    pub excluded_classes: Vec<usize>,
}

impl MapReport {
    pub fn map_at(&self, iou_threshold: f64) -> Option<f64> {
        self.thresholds
            .iter()
            .find(|t| t.iou_threshold == iou_threshold)
            .map(|t| t.map)
    }
}

/// True-positive flags, in descending score order, for the detections of
/// one class matched against that class's ground truth. Each detection
/// takes the unmatched box of its scene with the highest IoU, if that IoU
/// reaches `iou_threshold`.
fn match_class(detections: &[Vec<Detection>], gt: &[Vec<Annotation>], class: usize, iou_threshold: f64) -> Vec<bool> {
    let mut ranked: Vec<(usize, &Detection)> = detections
        .iter()
        .enumerate()
        .flat_map(|(s, ds)| ds.iter().map(move |d| (s, d)))
        .filter(|(_, d)| d.annotation.class == class)
        .collect();
    ranked.sort_by(|a, b| b.1.score.total_cmp(&a.1.score));
    let mut used: Vec<Vec<bool>> = gt.iter().map(|g| vec![false; g.len()]).collect();
    ranked
        .iter()
        .map(|&(s, d)| {
            let mut best: Option<(usize, f64)> = None;
            for (j, g) in gt[s].iter().enumerate() {
                if g.class != class || used[s][j] {
                    continue;
                }
                let iou = iou3d(&d.annotation, g);
                if iou >= iou_threshold && best.is_none_or(|(_, b)| iou > b) {
                    best = Some((j, iou));
                }
            }
            match best {
                Some((j, _)) => {
                    used[s][j] = true;
                    true
                }
                None => false,
            }
        })
        .collect()
}

/// Per-class AP and their mean at each IoU threshold. Scenes are aligned by
/// index; classes with no ground truth anywhere are excluded from the mean
/// (mAP is 0 when every class is excluded).
pub fn evaluate_map(
    detections: &[Vec<Detection>],
    gt: &[Vec<Annotation>],
    num_classes: usize,
    thresholds: &[f64],
) -> Result<MapReport> {
    if detections.len() != gt.len() {
        return Err(Error::Contract(format!(
            "evaluate_map: {} detection lists for {} scenes",
            detections.len(),
            gt.len()
        )));
    }
    let gt_count = |c: usize| gt.iter().flatten().filter(|a| a.class == c).count();
    let excluded: Vec<usize> = (0..num_classes).filter(|&c| gt_count(c) == 0).collect();
    let reports = thresholds
        .iter()
        .map(|&t| {
            let per_class: Vec<Option<f64>> = (0..num_classes)
                .map(|c| {
                    let n = gt_count(c);
                    (n > 0).then(|| average_precision(&match_class(detections, gt, c, t), n))
                })
                .collect();
            let present: Vec<f64> = per_class.iter().flatten().copied().collect();
            let map = if present.is_empty() {
                0.0
            } else {
                present.iter().sum::<f64>() / present.len() as f64
            };
            ThresholdReport {
                iou_threshold: t,
                per_class_ap: per_class,
                map,
            }
        })
        .collect();
    Ok(MapReport {
        thresholds: reports,
        excluded_classes: excluded,
    })
}
