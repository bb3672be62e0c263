//! The assembled detector and its auxiliary branch: parameter layout,
//! per-scene preprocessing, and the main and auxiliary forward passes.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::detection::{
    assign_targets, decode, decode_and_nms, head_forward, Detection, DetectionHead, RawPredictions, Targets,
};
use crate::encoders::{
    encode_annotations, encode_label_objects, encode_neighborhoods, neighborhoods, scatter_to_seeds, select_seeds,
    AnnotationDescriptor, Neighborhoods, PointMlp, SeedSet,
};
use crate::error::{Error, Result};
use crate::lai::{annotation_repr, compose_guidance, real_flags, IdentificationHead};
use crate::lkm::{lkm_fuse, AttentionParams};
use crate::numerics::{uniform, ParamStore, Tape, Var};
use crate::scene::{extract_label_points, Annotation, PointCloud, Scene};

/// Parameter groups of the deployed detector.
pub const MAIN_GROUPS: [&str; 2] = ["backbone", "head"];
/// Parameter groups that exist only for training.
pub const AUX_GROUPS: [&str; 8] = [
    "aux_backbone",
    "label_encoder",
    "annotation_encoder",
    "lkm",
    "lai_self",
    "lai_cross",
    "idf",
    "bg",
];

pub fn is_aux_group(group: &str) -> bool {
    AUX_GROUPS.contains(&group)
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    /// Seeds per scene.
    pub num_seeds: usize,
    /// `k`, neighbors pooled per seed.
    pub neighbors: usize,
    /// Hidden width of the point MLPs.
    pub hidden: usize,
    /// Feature channels.
    pub channels: usize,
    /// Width of the learned class embedding inside the annotation encoder.
    pub class_dim: usize,
    pub annotation_hidden: usize,
    pub num_classes: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            num_seeds: 64,
            neighbors: 16,
            hidden: 64,
            channels: 32,
            class_dim: 8,
            annotation_hidden: 64,
            num_classes: 3,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let fields = [
            ("model.num_seeds", self.num_seeds),
            ("model.neighbors", self.neighbors),
            ("model.hidden", self.hidden),
            ("model.channels", self.channels),
            ("model.class_dim", self.class_dim),
            ("model.annotation_hidden", self.annotation_hidden),
            ("model.num_classes", self.num_classes),
        ];
        match fields.iter().find(|(_, v)| *v == 0) {
            Some((name, _)) => Err(Error::Validation(format!("{name} must be positive"))),
            None => Ok(()),
        }
    }
}

/// Which label-guided modules build the auxiliary representation.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AuxVariant {
    /// Raw label-object tokens fused with the seeds; no annotation branch.
    Lkm,
    /// Annotation embeddings, dithering, fakes and the identification task
    /// feeding the fusion.
    LkmLai,
}

/// Names of every module in the parameter store.
#[derive(Clone, Debug)]
pub struct Architecture {
    pub backbone: PointMlp,
    pub head: DetectionHead,
    pub aux_backbone: PointMlp,
    pub label_encoder: PointMlp,
    pub label_empty: String,
    pub annotation_encoder: AnnotationDescriptor,
    pub lkm: AttentionParams,
    pub lai_self: AttentionParams,
    pub lai_cross: AttentionParams,
    pub idf: IdentificationHead,
    pub background: String,
}

impl Default for Architecture {
    fn default() -> Self {
        Architecture {
            backbone: PointMlp::new("backbone"),
            head: DetectionHead::new("head"),
            aux_backbone: PointMlp::new("aux_backbone"),
            label_encoder: PointMlp::new("label_encoder"),
            label_empty: "label_encoder.empty".into(),
            annotation_encoder: AnnotationDescriptor::new("annotation_encoder"),
            lkm: AttentionParams::new("lkm"),
            lai_self: AttentionParams::new("lai_self"),
            lai_cross: AttentionParams::new("lai_cross"),
            idf: IdentificationHead::new("idf"),
            background: "bg.token".into(),
        }
    }
}

impl Architecture {
    pub fn init_main(&self, store: &mut ParamStore, cfg: &ModelConfig, rng: &mut impl Rng) {
        self.backbone.init(store, cfg.hidden, cfg.channels, rng);
        self.head.init(store, cfg.channels, cfg.num_classes, rng);
    }

    /// Fresh auxiliary parameters; the auxiliary backbone starts as a copy of
    /// the current backbone.
    pub fn init_aux(&self, store: &mut ParamStore, cfg: &ModelConfig, variant: AuxVariant, rng: &mut impl Rng) {
        let phi = store.copy_group("backbone", "aux_backbone");
        store.extend(phi);
        let c = cfg.channels;
        self.label_encoder.init(store, cfg.hidden, c, rng);
        store.insert(self.label_empty.clone(), uniform(1, c, 1.0, rng));
        self.lkm.init(store, c, rng);
        store.insert(self.background.clone(), uniform(1, c, 1.0, rng));
        if variant == AuxVariant::LkmLai {
            self.annotation_encoder
                .init(store, cfg.num_classes, cfg.class_dim, cfg.annotation_hidden, c, rng);
            self.lai_self.init(store, c, rng);
            self.lai_cross.init(store, c, rng);
            self.idf.init(store, c, rng);
        }
    }
}

/// Stable per-scene seed for seed-point selection.
pub fn scene_seed(scene_id: &str) -> u64 {
    scene_id.bytes().fold(0xcbf2_9ce4_8422_2325u64, |h, b| {
        (h ^ b as u64).wrapping_mul(0x0100_0000_01b3)
    })
}

/// A scene with everything that does not depend on parameters computed
/// once: seeds, neighbor offsets, detection targets and label clouds.
#[derive(Clone, Debug)]
pub struct PreparedScene {
    pub scene: Scene,
    pub seeds: SeedSet,
    pub hoods: Neighborhoods,
    pub targets: Targets,
    /// Real annotations of the scene.
    pub reals: Vec<Annotation>,
    /// Points inside each real box, relative to the box center.
    pub label_clouds: Vec<PointCloud>,
}

impl PreparedScene {
    pub fn new(scene: Scene, cfg: &ModelConfig) -> Result<Self> {
        if scene.cloud.is_empty() {
            return Err(Error::Validation(format!("scene {} has no points", scene.scene_id)));
        }
        let seeds = select_seeds(&scene.cloud, cfg.num_seeds, cfg.neighbors, scene_seed(&scene.scene_id))?;
        let hoods = neighborhoods(&scene.cloud, &seeds)?;
        let reals: Vec<Annotation> = scene.annotations.reals().cloned().collect();
        let targets = assign_targets(&seeds.positions, &reals);
        let label_clouds = extract_label_points(&scene)
            .into_iter()
            .map(|lc| {
                let c = scene.annotations.items[lc.annotation].center;
                PointCloud::new(
                    lc.cloud
                        .points
                        .iter()
                        .map(|p| [p[0] - c[0], p[1] - c[1], p[2] - c[2]])
                        .collect(),
                )
            })
            .collect();
        Ok(PreparedScene {
            scene,
            seeds,
            hoods,
            targets,
            reals,
            label_clouds,
        })
    }
}

/// Output of the deployed path: backbone features and head predictions.
#[derive(Clone, Copy, Debug)]
pub struct MainOutput {
    pub features: Var,
    pub preds: RawPredictions,
}

/// Detector forward pass. Reads only the `backbone` and `head` groups.
pub fn main_forward(
    tape: &mut Tape,
    store: &ParamStore,
    arch: &Architecture,
    prep: &PreparedScene,
) -> Result<MainOutput> {
    let features = encode_neighborhoods(tape, store, &arch.backbone, &prep.hoods)?;
    let preds = head_forward(tape, store, &arch.head, features, &prep.seeds.positions)?;
    Ok(MainOutput { features, preds })
}

/// Guidance representation and the identification outputs.
#[derive(Clone, Debug)]
pub struct AuxOutput {
    pub guidance: Var,
    /// `N×1` real/fake probabilities; `None` for the LKM-only variant or
    /// scenes without annotations.
    pub probs: Option<Var>,
    pub flags: Vec<f64>,
}

/// Builds the guidance from the auxiliary backbone's seed features, the
/// label clouds and `annotations` (the real
/// annotations after augmentation, followed by any fakes).
pub fn aux_forward(
    tape: &mut Tape,
    store: &ParamStore,
    arch: &Architecture,
    variant: AuxVariant,
    prep: &PreparedScene,
    annotations: &[Annotation],
) -> Result<AuxOutput> {
    let phi = encode_neighborhoods(tape, store, &arch.aux_backbone, &prep.hoods)?;
    let objects = encode_label_objects(tape, store, &arch.label_encoder, &arch.label_empty, &prep.label_clouds)?;
    let background = tape.param(store, &arch.background)?;
    let positions = &prep.seeds.positions;
    match variant {
        AuxVariant::Lkm => {
            let tokens = scatter_to_seeds(tape, objects, &prep.reals, positions, background)?;
            let fused = lkm_fuse(tape, store, &arch.lkm, &tokens, phi)?;
            Ok(AuxOutput {
                guidance: fused.features,
                probs: None,
                flags: Vec::new(),
            })
        }
        AuxVariant::LkmLai => {
            let real_count = annotations.iter().filter(|a| a.is_real).count();
            if real_count != prep.label_clouds.len() {
                return Err(Error::Contract(format!(
                    "aux_forward: {real_count} real annotations for {} label clouds",
                    prep.label_clouds.len()
                )));
            }
            let repr = if annotations.is_empty() {
                None
            } else {
                let emb = encode_annotations(tape, store, &arch.annotation_encoder, annotations)?;
                Some(annotation_repr(
                    tape,
                    store,
                    &arch.lai_self,
                    &arch.lai_cross,
                    emb,
                    annotations,
                    objects,
                )?)
            };
            let out = compose_guidance(
                tape,
                store,
                phi,
                positions,
                repr,
                annotations,
                background,
                &arch.lkm,
                &arch.idf,
            )?;
            Ok(AuxOutput {
                guidance: out.fused.features,
                probs: out.probs,
                flags: real_flags(annotations),
            })
        }
    }
}

/// Post-processing thresholds for inference.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DecodeConfig {
    pub score_threshold: f64,
    pub nms_iou: f64,
}

impl Default for DecodeConfig {
    fn default() -> Self {
        DecodeConfig {
            score_threshold: 0.05,
            nms_iou: 0.25,
        }
    }
}

/// Deployed inference: decoded, thresholded, NMS-filtered boxes. Returns
/// the tape too so callers can inspect which parameters were read.
pub fn predict(
    store: &ParamStore,
    arch: &Architecture,
    prep: &PreparedScene,
    decode_cfg: &DecodeConfig,
) -> Result<(Vec<Detection>, Tape)> {
    let mut tape = Tape::new();
    let out = main_forward(&mut tape, store, arch, prep)?;
    let dets = decode_and_nms(
        &decode(&tape, &out.preds),
        decode_cfg.score_threshold,
        decode_cfg.nms_iou,
    )?;
    Ok((dets, tape))
}
