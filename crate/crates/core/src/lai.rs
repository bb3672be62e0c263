//! Annotation side of the auxiliary branch: center dithering, fake
//! instances, the real/fake identification task, self-attention over
//! annotation embeddings, cross-attention into label-object features, and
//! the composition of the guidance representation.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::encoders::{scatter_to_seeds, LabelTokenGrid, Linear};
use crate::error::{Error, Result};
use crate::lkm::{attention, lkm_fuse, AttentionParams, FusedRepresentation};
use crate::numerics::{ParamStore, Tape, Var};
use crate::scene::{Annotation, AnnotationSet, Bounds, ClassSizeStats, Point};

/// Clamp applied to probabilities before the identification log terms.
pub const PROB_CLAMP: f64 = 1e-12;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AugmentConfig {
    /// Center shifts are drawn from `U[−scale_factor, scale_factor]` times
    /// the box extent on each axis.
    pub scale_factor: f64,
    /// Fakes generated per real annotation.
    pub fake_ratio: f64,
    pub enable_size_aug: bool,
    pub enable_fake: bool,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig {
            scale_factor: 0.1,
            fake_ratio: 1.0,
            enable_size_aug: true,
            enable_fake: true,
        }
    }
}

impl AugmentConfig {
    /// No dithering and no fakes.
    pub fn disabled() -> Self {
        AugmentConfig {
            enable_size_aug: false,
            enable_fake: false,
            ..AugmentConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.scale_factor >= 0.0) || !self.scale_factor.is_finite() {
            return Err(Error::Validation(format!(
                "augment.scale_factor must be a finite value >= 0, got {}",
                self.scale_factor
            )));
        }
        if !(self.fake_ratio >= 0.0) || !self.fake_ratio.is_finite() {
            return Err(Error::Validation(format!(
                "augment.fake_ratio must be a finite value >= 0, got {}",
                self.fake_ratio
            )));
        }
        Ok(())
    }
}

/// Shifts every real center along each axis by a fraction of the box size on
/// that axis, each fraction drawn independently from
/// `U[−scale_factor, scale_factor]`. Fakes, sizes and classes are untouched.
/// With dithering disabled or a zero scale factor the input is returned
/// unchanged and no random numbers are consumed.
pub fn dither_centers(annotations: &AnnotationSet, cfg: &AugmentConfig, rng: &mut impl Rng) -> AnnotationSet {
    let bound = cfg.scale_factor;
    if !cfg.enable_size_aug || bound == 0.0 {
        return annotations.clone();
    }
    let items = annotations
        .items
        .iter()
        .map(|a| {
            if !a.is_real {
                return a.clone();
            }
            let mut out = a.clone();
            for i in 0..3 {
                out.center[i] += rng.random_range(-bound..=bound) * a.size[i];
            }
            out
        })
        .collect();
    AnnotationSet::new(items)
}

/// Appends `round(fake_ratio · reals)` fakes after the input annotations.
/// Each fake has a uniform class, a size from that class's statistics and a
/// center uniform in `bounds`.
pub fn make_fake_instances(
    annotations: &AnnotationSet,
    cfg: &AugmentConfig,
    bounds: &Bounds,
    class_size_stats: &[ClassSizeStats],
    rng: &mut impl Rng,
) -> Result<AnnotationSet> {
    if !cfg.enable_fake {
        return Ok(annotations.clone());
    }
    let count = (cfg.fake_ratio * annotations.real_count() as f64).round() as usize;
    if count > 0 && class_size_stats.is_empty() {
        return Err(Error::Contract(
            "make_fake_instances needs per-class size statistics".into(),
        ));
    }
    let mut items = annotations.items.clone();
    for _ in 0..count {
        let class = rng.random_range(0..class_size_stats.len());
        let size = class_size_stats[class].sample(rng);
        let center: Point = std::array::from_fn(|i| rng.random_range(bounds.min[i]..=bounds.max[i]));
        items.push(Annotation {
            center,
            size,
            class,
            is_real: false,
        });
    }
    Ok(AnnotationSet::new(items))
}

/// Real/fake flags as BCE targets.
pub fn real_flags(annotations: &[Annotation]) -> Vec<f64> {
    annotations.iter().map(|a| if a.is_real { 1.0 } else { 0.0 }).collect()
}

/// `−(1/N) Σ [δ log p + (1−δ) log(1−p)]` with `p` clamped to
/// `[1e-12, 1 − 1e-12]`.
pub fn identification_loss(tape: &mut Tape, probs: Var, flags: &[f64]) -> Result<Var> {
    if flags.iter().any(|&f| f != 0.0 && f != 1.0) {
        return Err(Error::Contract("identification flags must be 0 or 1".into()));
    }
    tape.bce_probs(probs, flags, PROB_CLAMP)
}

/// Fully connected `C → 1` followed by a sigmoid.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct IdentificationHead {
    pub fc: Linear,
}

impl IdentificationHead {
    pub fn new(prefix: &str) -> Self {
        IdentificationHead {
            fc: Linear::new(prefix),
        }
    }

    pub fn init(&self, store: &mut ParamStore, channels: usize, rng: &mut impl Rng) {
        self.fc.init(store, channels, 1, rng);
    }

    /// `N×C` embeddings to `N×1` probabilities.
    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, embeddings: Var) -> Result<Var> {
        let logits = self.fc.forward(tape, store, embeddings)?;
        tape.sigmoid(logits)
    }
}

/// Global annotation representation: self-attention with queries, keys and
/// values all taken from the annotation embeddings.
pub fn annotation_self_attention(
    tape: &mut Tape,
    store: &ParamStore,
    params: &AttentionParams,
    embeddings: Var,
) -> Result<Var> {
    if tape.value(embeddings).rows() == 0 {
        return Err(Error::Contract("annotation_self_attention needs N >= 1".into()));
    }
    Ok(attention(tape, store, params, embeddings, embeddings)?.output)
}

/// Annotation queries attending into the label-object representation.
pub fn lai_cross_attention(
    tape: &mut Tape,
    store: &ParamStore,
    params: &AttentionParams,
    queries: Var,
    label_repr: Var,
) -> Result<Var> {
    Ok(attention(tape, store, params, queries, label_repr)?.output)
}

/// Auxiliary representation plus the identification probabilities that
/// feed the real/fake loss.
#[derive(Clone, Debug)]
pub struct ComposedGuidance {
    pub fused: FusedRepresentation,
    pub tokens: LabelTokenGrid,
    /// `N×1`, one per annotation of the augmented set; `None` when the set
    /// is empty.
    pub probs: Option<Var>,
}

/// Scatters the real rows of `annotation_repr` onto the seeds, fuses them
/// with the seed features, and scores every row with the identification
/// head. `annotations` must align with the rows of `annotation_repr`.
#[allow(clippy::too_many_arguments)]
pub fn compose_guidance(
    tape: &mut Tape,
    store: &ParamStore,
    seed_features: Var,
    seed_positions: &[Point],
    annotation_repr: Option<Var>,
    annotations: &[Annotation],
    background: Var,
    lkm: &AttentionParams,
    head: &IdentificationHead,
) -> Result<ComposedGuidance> {
    let rows = annotation_repr.map_or(0, |v| tape.value(v).rows());
    if rows != annotations.len() {
        return Err(Error::Contract(format!(
            "compose_guidance: {rows} annotation rows for {} annotations",
            annotations.len()
        )));
    }
    let real_idx: Vec<usize> = (0..annotations.len()).filter(|&i| annotations[i].is_real).collect();
    let reals: Vec<Annotation> = real_idx.iter().map(|&i| annotations[i].clone()).collect();
    let real_repr = match annotation_repr {
        Some(r) if !real_idx.is_empty() => Some(tape.gather_rows(r, &real_idx)?),
        _ => None,
    };
    let tokens = scatter_to_seeds(tape, real_repr, &reals, seed_positions, background)?;
    let fused = lkm_fuse(tape, store, lkm, &tokens, seed_features)?;
    let probs = match annotation_repr {
        Some(r) => Some(head.forward(tape, store, r)?),
        None => None,
    };
    Ok(ComposedGuidance { fused, tokens, probs })
}

/// Annotation-enhanced label representation, one row per annotation.
/// Every annotation passes through self-attention; real rows then attend
/// into the label-object embeddings while fake rows, which have no label
/// points, keep their self-attended embedding.
#[allow(clippy::too_many_arguments)]
pub fn annotation_repr(
    tape: &mut Tape,
    store: &ParamStore,
    self_params: &AttentionParams,
    cross_params: &AttentionParams,
    embeddings: Var,
    annotations: &[Annotation],
    label_objects: Option<Var>,
) -> Result<Var> {
    let self_attended = annotation_self_attention(tape, store, self_params, embeddings)?;
    let real_idx: Vec<usize> = (0..annotations.len()).filter(|&i| annotations[i].is_real).collect();
    let fake_idx: Vec<usize> = (0..annotations.len()).filter(|&i| !annotations[i].is_real).collect();
    let Some(label_objects) = label_objects.filter(|_| !real_idx.is_empty()) else {
        if !real_idx.is_empty() {
            return Err(Error::Contract(
                "annotation_repr: real annotations without label embeddings".into(),
            ));
        }
        return Ok(self_attended);
    };
    let real_q = tape.gather_rows(self_attended, &real_idx)?;
    let real_out = lai_cross_attention(tape, store, cross_params, real_q, label_objects)?;
    if fake_idx.is_empty() {
        return Ok(real_out);
    }
    let fake_q = tape.gather_rows(self_attended, &fake_idx)?;
    let stacked = tape.concat_rows(&[real_out, fake_q])?;
    // Stacked order is reals then fakes; map back to annotation order.
    let mut order = vec![0; annotations.len()];
    for (slot, &i) in real_idx.iter().chain(&fake_idx).enumerate() {
        order[i] = slot;
    }
    tape.gather_rows(stacked, &order)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{finite_diff_check_where, uniform, Tensor};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn boxes(n: usize) -> AnnotationSet {
        AnnotationSet::new(
            (0..n)
                .map(|i| Annotation::new([1.0 + i as f64, 2.0, 0.5], [2.0, 1.0, 1.0], i % 3))
                .collect(),
        )
    }

    fn stats() -> Vec<ClassSizeStats> {
        crate::scene::GenConfig::default().size_stats()
    }

    #[test]
    fn zero_scale_is_bitwise_identity() {
        let a = boxes(5);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let cfg = AugmentConfig {
            scale_factor: 0.0,
            ..AugmentConfig::default()
        };
        assert_eq!(dither_centers(&a, &cfg, &mut rng), a);
        let off = AugmentConfig::disabled();
        assert_eq!(dither_centers(&a, &off, &mut rng), a);
    }

    #[test]
    fn dither_respects_size_scaled_bounds() {
        let a = boxes(10);
        let cfg = AugmentConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..1000 {
            let d = dither_centers(&a, &cfg, &mut rng);
            for (x, y) in a.items.iter().zip(&d.items) {
                assert!((y.center[0] - x.center[0]).abs() <= 0.2);
                assert!((y.center[1] - x.center[1]).abs() <= 0.1);
                assert!((y.center[2] - x.center[2]).abs() <= 0.1);
                assert_eq!((x.size, x.class), (y.size, y.class));
            }
        }
    }

    #[test]
    fn dither_shift_mean_is_centered() {
        let a = boxes(1);
        let cfg = AugmentConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let n = 10_000;
        let total: f64 = (0..n)
            .map(|_| dither_centers(&a, &cfg, &mut rng).items[0].center[0] - a.items[0].center[0])
            .sum();
        // U[−0.2, 0.2] has σ = 0.4/√12.
        let sigma = 0.4 / 12f64.sqrt();
        assert!((total / n as f64).abs() <= 3.0 * sigma / (n as f64).sqrt());
    }

    #[test]
    fn dither_leaves_fakes_alone() {
        let mut a = boxes(2);
        a.items[1].is_real = false;
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let d = dither_centers(&a, &AugmentConfig::default(), &mut rng);
        assert_eq!(d.items[1], a.items[1]);
        assert_ne!(d.items[0], a.items[0]);
    }

    #[test]
    fn fake_counts_and_flags() {
        let a = boxes(4);
        let bounds = Bounds::new([0.0; 3], [5.0, 5.0, 2.0]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let out = make_fake_instances(&a, &AugmentConfig::default(), &bounds, &stats(), &mut rng).unwrap();
        assert_eq!(out.len(), 8);
        assert_eq!(out.items.iter().filter(|x| !x.is_real).count(), 4);
        assert_eq!(&out.items[..4], &a.items[..]);
        let off = AugmentConfig {
            enable_fake: false,
            ..AugmentConfig::default()
        };
        assert_eq!(make_fake_instances(&a, &off, &bounds, &stats(), &mut rng).unwrap(), a);
        let none = make_fake_instances(
            &AnnotationSet::default(),
            &AugmentConfig::default(),
            &bounds,
            &stats(),
            &mut rng,
        );
        assert!(none.unwrap().is_empty());
    }

    #[test]
    fn fakes_are_positive_and_inside_bounds() {
        let a = boxes(1);
        let bounds = Bounds::new([0.0; 3], [5.0, 5.0, 2.0]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..1000 {
            let out = make_fake_instances(&a, &AugmentConfig::default(), &bounds, &stats(), &mut rng).unwrap();
            let f = &out.items[1];
            assert!(f.size.iter().all(|&s| s > 0.0));
            assert!(bounds.contains(&f.center));
            assert!(f.class < 3);
        }
    }

    fn loss_of(probs: &[f64], flags: &[f64]) -> f64 {
        let mut tape = Tape::new();
        let p = tape
            .constant(Tensor::from_vec(probs.len(), 1, probs.to_vec()).unwrap())
            .unwrap();
        let l = identification_loss(&mut tape, p, flags).unwrap();
        tape.scalar(l).unwrap()
    }

    #[test]
    fn identification_loss_values() {
        let l = loss_of(&[0.5; 4], &[1.0, 0.0, 0.0, 1.0]);
        assert!((l - std::f64::consts::LN_2).abs() <= 1e-15);
        assert!((loss_of(&[0.9], &[1.0]) - 0.105_360_515_657_826_3).abs() <= 1e-15);
        assert!(loss_of(&[1.0, 0.0], &[0.0, 1.0]).is_finite());
    }

    #[test]
    fn identification_loss_matches_scalar_recomputation() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        for _ in 0..50 {
            let n = rng.random_range(1..10);
            let p: Vec<f64> = (0..n).map(|_| rng.random_range(0.01..0.99)).collect();
            let d: Vec<f64> = (0..n).map(|_| rng.random_range(0..2) as f64).collect();
            let brute = -p
                .iter()
                .zip(&d)
                .map(|(p, d)| d * p.ln() + (1.0 - d) * (1.0 - p).ln())
                .sum::<f64>()
                / n as f64;
            assert!((loss_of(&p, &d) - brute).abs() <= 1e-12);
            let flipped_p: Vec<f64> = p.iter().map(|x| 1.0 - x).collect();
            let flipped_d: Vec<f64> = d.iter().map(|x| 1.0 - x).collect();
            assert!((loss_of(&flipped_p, &flipped_d) - brute).abs() <= 1e-12);
        }
    }

    #[test]
    fn self_attention_single_and_identical_rows() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let params = AttentionParams::new("lai_self");
        let mut store = ParamStore::new();
        params.init(&mut store, 4, &mut rng);
        let mut tape = Tape::new();
        let x = tape.constant(uniform(1, 4, 1.0, &mut rng)).unwrap();
        let out = annotation_self_attention(&mut tape, &store, &params, x).unwrap();
        let v = params.value.forward(&mut tape, &store, x).unwrap();
        assert!(tape.value(out).max_abs_diff(tape.value(v)) <= 1e-15);

        let row = uniform(1, 4, 1.0, &mut rng);
        let rows = Tensor::from_rows(&[row.row(0), row.row(0), row.row(0)]).unwrap();
        let x = tape.constant(rows).unwrap();
        let out = annotation_self_attention(&mut tape, &store, &params, x).unwrap();
        let o = tape.value(out);
        assert_eq!(o.row(0), o.row(1));
        assert_eq!(o.row(0), o.row(2));
    }

    #[test]
    fn cross_attention_single_token_and_zero_query() {
        let params = AttentionParams::new("lai_cross");
        let mut store = ParamStore::new();
        params.init_identity(&mut store, 2);
        let mut tape = Tape::new();
        let q = tape.constant(Tensor::from_rows(&[[0.3, 0.9]]).unwrap()).unwrap();
        let kv = tape.constant(Tensor::from_rows(&[[5.0, -1.0]]).unwrap()).unwrap();
        let out = lai_cross_attention(&mut tape, &store, &params, q, kv).unwrap();
        assert_eq!(tape.value(out).data(), &[5.0, -1.0]);

        let q = tape.constant(Tensor::zeros(2, 2)).unwrap();
        let kv = tape
            .constant(Tensor::from_rows(&[[1.0, 2.0], [3.0, 6.0]]).unwrap())
            .unwrap();
        let out = lai_cross_attention(&mut tape, &store, &params, q, kv).unwrap();
        assert_eq!(tape.value(out).data(), &[2.0, 4.0, 2.0, 4.0]);

        let bad = tape.constant(Tensor::zeros(2, 3)).unwrap();
        assert!(lai_cross_attention(&mut tape, &store, &params, q, bad).is_err());
    }

    fn branch_store(c: usize, rng: &mut ChaCha8Rng) -> ParamStore {
        let mut s = ParamStore::new();
        AttentionParams::new("lkm").init(&mut s, c, rng);
        AttentionParams::new("lai_self").init(&mut s, c, rng);
        AttentionParams::new("lai_cross").init(&mut s, c, rng);
        IdentificationHead::new("idf").init(&mut s, c, rng);
        s.insert("bg.token", uniform(1, c, 1.0, rng));
        s
    }

    #[test]
    fn compose_without_annotations_uses_background() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let store = branch_store(4, &mut rng);
        let mut tape = Tape::new();
        let seeds = tape.constant(uniform(6, 4, 1.0, &mut rng)).unwrap();
        let positions = vec![[0.0; 3]; 6];
        let bg = tape.param(&store, "bg.token").unwrap();
        let out = compose_guidance(
            &mut tape,
            &store,
            seeds,
            &positions,
            None,
            &[],
            bg,
            &AttentionParams::new("lkm"),
            &IdentificationHead::new("idf"),
        )
        .unwrap();
        assert!(out.probs.is_none());
        assert!(out.tokens.source.iter().all(Option::is_none));
        assert_eq!(tape.value(out.fused.features).shape(), vec![6, 4]);
    }

    #[test]
    fn fakes_are_scored_but_never_scattered() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let store = branch_store(3, &mut rng);
        let mut anns = boxes(2).items;
        anns[1].center = [0.0; 3];
        anns[1].is_real = false;
        let positions = vec![[0.0; 3], [1.0, 2.0, 0.5], [4.0, 4.0, 1.5]];
        let mut tape = Tape::new();
        let seeds = tape.constant(uniform(3, 3, 1.0, &mut rng)).unwrap();
        let repr = tape.constant(uniform(2, 3, 1.0, &mut rng)).unwrap();
        let bg = tape.param(&store, "bg.token").unwrap();
        let out = compose_guidance(
            &mut tape,
            &store,
            seeds,
            &positions,
            Some(repr),
            &anns,
            bg,
            &AttentionParams::new("lkm"),
            &IdentificationHead::new("idf"),
        )
        .unwrap();
        assert_eq!(out.tokens.source, vec![None, Some(0), None]);
        let p = tape.value(out.probs.unwrap());
        assert_eq!(p.shape(), vec![2, 1]);
        assert!(p.data().iter().all(|&x| x > 0.0 && x < 1.0));
    }

    #[test]
    fn fake_rows_skip_cross_attention() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let store = branch_store(3, &mut rng);
        let (sp, cp) = (AttentionParams::new("lai_self"), AttentionParams::new("lai_cross"));
        let mut anns = boxes(3).items;
        anns[1].is_real = false;
        let mut tape = Tape::new();
        let emb = tape.constant(uniform(3, 3, 1.0, &mut rng)).unwrap();
        let labels = tape.constant(uniform(2, 3, 1.0, &mut rng)).unwrap();
        let fa = annotation_repr(&mut tape, &store, &sp, &cp, emb, &anns, Some(labels)).unwrap();
        let q = annotation_self_attention(&mut tape, &store, &sp, emb).unwrap();
        let real_q = tape.gather_rows(q, &[0, 2]).unwrap();
        let cross = lai_cross_attention(&mut tape, &store, &cp, real_q, labels).unwrap();
        let (fa, q, cross) = (tape.value(fa), tape.value(q), tape.value(cross));
        assert_eq!(fa.row(1), q.row(1));
        assert_eq!(fa.row(0), cross.row(0));
        assert_eq!(fa.row(2), cross.row(1));
    }

    #[test]
    fn composition_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut store = branch_store(3, &mut rng);
        store.insert("in.emb", uniform(3, 3, 1.0, &mut rng));
        store.insert("in.labels", uniform(2, 3, 1.0, &mut rng));
        store.insert("in.seeds", uniform(4, 3, 1.0, &mut rng));
        let mut anns = boxes(3).items;
        anns[2].is_real = false;
        let positions = vec![[1.0, 2.0, 0.5], [2.0, 2.0, 0.5], [2.1, 2.0, 0.4], [4.0, 0.0, 0.0]];
        let flags = real_flags(&anns);
        let target = uniform(4, 3, 1.0, &mut rng);
        let build = |tape: &mut Tape, s: &ParamStore| -> Result<Var> {
            let emb = tape.param(s, "in.emb")?;
            let labels = tape.param(s, "in.labels")?;
            let seeds = tape.param(s, "in.seeds")?;
            let bg = tape.param(s, "bg.token")?;
            let (sp, cp) = (AttentionParams::new("lai_self"), AttentionParams::new("lai_cross"));
            let fa = annotation_repr(tape, s, &sp, &cp, emb, &anns, Some(labels))?;
            let out = compose_guidance(
                tape,
                s,
                seeds,
                &positions,
                Some(fa),
                &anns,
                bg,
                &AttentionParams::new("lkm"),
                &IdentificationHead::new("idf"),
            )?;
            let t = tape.constant(target.clone())?;
            let prod = tape.mul(out.fused.features, t)?;
            let g = tape.sum(prod)?;
            let idf = identification_loss(tape, out.probs.unwrap(), &flags)?;
            tape.add(g, idf)
        };
        // Key biases cancel inside the softmax, so their exact gradient is
        // zero and the ratio would only measure rounding noise.
        let err = finite_diff_check_where(build, &store, |n| !n.ends_with(".k.b"), 1e-5).unwrap();
        assert!(err <= 1e-5, "err = {err}");
    }
}
