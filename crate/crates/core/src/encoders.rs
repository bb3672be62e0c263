//! Feature producers: the seed encoder shared by the backbone and the
//! auxiliary backbone, the label-object encoder, and the annotation
//! descriptor.

use rand::Rng;

use crate::error::{Error, Result};
use crate::numerics::{ParamStore, Tape, Tensor, Var};
use crate::scene::{subsample_indices, Annotation, Point, PointCloud};

/// Affine layer `x·W + b` stored as `{prefix}.w` / `{prefix}.b`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Linear {
    pub prefix: String,
}

impl Linear {
    pub fn new(prefix: impl Into<String>) -> Self {
        Linear { prefix: prefix.into() }
    }

    pub fn init(&self, store: &mut ParamStore, fan_in: usize, fan_out: usize, rng: &mut impl Rng) {
        store.init_linear(&self.prefix, fan_in, fan_out, rng);
    }

    pub fn w(&self) -> String {
        format!("{}.w", self.prefix)
    }

    pub fn b(&self) -> String {
        format!("{}.b", self.prefix)
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let w = tape.param(store, &self.w())?;
        let b = tape.param(store, &self.b())?;
        let xw = tape.matmul(x, w)?;
        tape.add_row(xw, b)
    }
}

/// Two-layer per-point MLP `3 → hidden → C` with a ReLU in between.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PointMlp {
    pub l1: Linear,
    pub l2: Linear,
}

impl PointMlp {
    pub fn new(prefix: &str) -> Self {
        PointMlp {
            l1: Linear::new(format!("{prefix}.mlp1")),
            l2: Linear::new(format!("{prefix}.mlp2")),
        }
    }

    pub fn init(&self, store: &mut ParamStore, hidden: usize, channels: usize, rng: &mut impl Rng) {
        self.l1.init(store, 3, hidden, rng);
        self.l2.init(store, hidden, channels, rng);
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, points: Var) -> Result<Var> {
        let h = self.l1.forward(tape, store, points)?;
        let h = tape.relu(h)?;
        self.l2.forward(tape, store, h)
    }
}

/// Seeds drawn from a cloud with their k-nearest-neighbor groups.
#[derive(Clone, Debug, PartialEq)]
pub struct SeedSet {
    pub indices: Vec<usize>,
    pub positions: Vec<Point>,
    /// Cloud indices of each seed's neighbors, nearest first.
    pub neighbors: Vec<Vec<usize>>,
}

impl SeedSet {
    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }
}

fn dist2(a: &Point, b: &Point) -> f64 {
    (0..3).map(|i| (a[i] - b[i]).powi(2)).sum()
}

/// `k` nearest cloud points to `center`, ties broken by lower index.
pub fn knn(cloud: &PointCloud, center: &Point, k: usize) -> Vec<usize> {
    let mut order: Vec<(f64, usize)> = cloud
        .points
        .iter()
        .enumerate()
        .map(|(i, p)| (dist2(p, center), i))
        .collect();
    let k = k.min(order.len());
    if k == 0 {
        return Vec::new();
    }
    order.select_nth_unstable_by(k - 1, |a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    order.truncate(k);
    order.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    order.into_iter().map(|(_, i)| i).collect()
}

/// Subsamples `num_seeds` seed points and gathers their neighborhoods.
pub fn select_seeds(cloud: &PointCloud, num_seeds: usize, k: usize, seed: u64) -> Result<SeedSet> {
    let indices = subsample_indices(cloud.len(), num_seeds, seed)?;
    Ok(seeds_from_indices(cloud, indices, k))
}

pub fn seeds_from_indices(cloud: &PointCloud, indices: Vec<usize>, k: usize) -> SeedSet {
    let positions: Vec<Point> = indices.iter().map(|&i| cloud.points[i]).collect();
    let neighbors = positions.iter().map(|p| knn(cloud, p, k)).collect();
    SeedSet {
        indices,
        positions,
        neighbors,
    }
}

/// Seed features on a tape.
#[derive(Clone, Debug)]
pub struct SeedRepresentation {
    pub features: Var,
    pub seeds: SeedSet,
}

/// Neighbor offsets from their seed, stacked seed by seed, with the row
/// groups each seed pools over.
#[derive(Clone, Debug, PartialEq)]
pub struct Neighborhoods {
    pub offsets: Tensor,
    pub groups: Vec<Vec<usize>>,
}

pub fn neighborhoods(cloud: &PointCloud, seeds: &SeedSet) -> Result<Neighborhoods> {
    let mut rows = Vec::new();
    let mut groups = Vec::with_capacity(seeds.len());
    for (s, nbrs) in seeds.positions.iter().zip(&seeds.neighbors) {
        let start = rows.len();
        for &j in nbrs {
            let p = cloud.points[j];
            rows.push([p[0] - s[0], p[1] - s[1], p[2] - s[2]]);
        }
        groups.push((start..rows.len()).collect::<Vec<_>>());
    }
    Ok(Neighborhoods {
        offsets: Tensor::from_rows(&rows)?,
        groups,
    })
}

/// Per-seed feature: max-pool over the MLP applied to each neighbor's
/// offset from the seed.
pub fn encode_neighborhoods(tape: &mut Tape, store: &ParamStore, mlp: &PointMlp, hoods: &Neighborhoods) -> Result<Var> {
    let input = tape.constant(hoods.offsets.clone())?;
    let per_point = mlp.forward(tape, store, input)?;
    tape.segment_max(per_point, &hoods.groups)
}

pub fn encode_seeds(
    tape: &mut Tape,
    store: &ParamStore,
    mlp: &PointMlp,
    cloud: &PointCloud,
    seeds: &SeedSet,
) -> Result<Var> {
    encode_neighborhoods(tape, store, mlp, &neighborhoods(cloud, seeds)?)
}

pub fn encode_points(
    tape: &mut Tape,
    store: &ParamStore,
    mlp: &PointMlp,
    cloud: &PointCloud,
    num_seeds: usize,
    k: usize,
    seed: u64,
) -> Result<SeedRepresentation> {
    if cloud.is_empty() {
        return Err(Error::Contract("encode_points needs a non-empty cloud".into()));
    }
    let seeds = select_seeds(cloud, num_seeds, k, seed)?;
    let features = encode_seeds(tape, store, mlp, cloud, &seeds)?;
    Ok(SeedRepresentation { features, seeds })
}

/// One embedding row per label cloud: max-pool of the MLP over the cloud's
/// points, or the learned `empty` row for clouds with no points. Returns
/// `None` for an empty list.
pub fn encode_label_objects(
    tape: &mut Tape,
    store: &ParamStore,
    mlp: &PointMlp,
    empty_name: &str,
    clouds: &[PointCloud],
) -> Result<Option<Var>> {
    if clouds.is_empty() {
        return Ok(None);
    }
    let mut rows = Vec::new();
    let mut groups = Vec::new();
    for c in clouds.iter().filter(|c| !c.is_empty()) {
        let start = rows.len();
        rows.extend(c.points.iter().copied());
        groups.push((start..rows.len()).collect::<Vec<_>>());
    }
    let empty = tape.param(store, empty_name)?;
    if groups.is_empty() {
        let picks = vec![0; clouds.len()];
        return tape.gather_rows(empty, &picks).map(Some);
    }
    let input = tape.constant(Tensor::from_rows(&rows)?)?;
    let per_point = mlp.forward(tape, store, input)?;
    let pooled = tape.segment_max(per_point, &groups)?;
    let empty_row = groups.len();
    let mut next = 0;
    let picks: Vec<usize> = clouds
        .iter()
        .map(|c| {
            if c.is_empty() {
                empty_row
            } else {
                next += 1;
                next - 1
            }
        })
        .collect();
    let table = tape.concat_rows(&[pooled, empty])?;
    tape.gather_rows(table, &picks).map(Some)
}

/// Per-seed label tokens plus which annotation each seed came from.
#[derive(Clone, Debug)]
pub struct LabelTokenGrid {
    pub tokens: Var,
    pub source: Vec<Option<usize>>,
}

/// For each seed: the annotation with the nearest center (lowest index on
/// ties), kept only if that distance is at most half the box diagonal, so a
/// seed inside (or on the surface of) its nearest box is always claimed.
pub fn assign_seeds_to_annotations(annotations: &[Annotation], seeds: &[Point]) -> Vec<Option<usize>> {
    seeds
        .iter()
        .map(|s| {
            let mut best: Option<(usize, f64)> = None;
            for (i, a) in annotations.iter().enumerate() {
                let d = dist2(s, &a.center);
                if best.is_none_or(|(_, bd)| d < bd) {
                    best = Some((i, d));
                }
            }
            best.and_then(|(i, d)| {
                let a = &annotations[i];
                (d <= dist2(&a.size, &[0.0; 3]) / 4.0).then_some(i)
            })
        })
        .collect()
}

/// Places one embedding row on every seed, or `background` (a `1×C` row)
/// where no annotation claims the seed.
pub fn scatter_to_seeds(
    tape: &mut Tape,
    object_embeddings: Option<Var>,
    annotations: &[Annotation],
    seed_positions: &[Point],
    background: Var,
) -> Result<LabelTokenGrid> {
    let n_obj = object_embeddings.map_or(0, |v| tape.value(v).rows());
    if n_obj != annotations.len() {
        return Err(Error::Contract(format!(
            "scatter_to_seeds: {n_obj} embeddings for {} annotations",
            annotations.len()
        )));
    }
    let source = assign_seeds_to_annotations(annotations, seed_positions);
    let table = match object_embeddings {
        Some(e) => {
            if tape.value(e).cols() != tape.value(background).cols() {
                return Err(Error::Shape {
                    op: "scatter_to_seeds",
                    lhs: tape.value(e).shape(),
                    rhs: tape.value(background).shape(),
                });
            }
            tape.concat_rows(&[e, background])?
        }
        None => background,
    };
    let picks: Vec<usize> = source.iter().map(|s| s.unwrap_or(n_obj)).collect();
    let tokens = tape.gather_rows(table, &picks)?;
    Ok(LabelTokenGrid { tokens, source })
}

/// Annotation encoder: geometry `(x, y, z, l, w, h)` concatenated with a learned class
/// embedding, then `→ hidden → C`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AnnotationDescriptor {
    pub class_table: String,
    pub l1: Linear,
    pub l2: Linear,
}

impl AnnotationDescriptor {
    pub fn new(prefix: &str) -> Self {
        AnnotationDescriptor {
            class_table: format!("{prefix}.class_emb"),
            l1: Linear::new(format!("{prefix}.mlp1")),
            l2: Linear::new(format!("{prefix}.mlp2")),
        }
    }

    pub fn init(
        &self,
        store: &mut ParamStore,
        num_classes: usize,
        class_dim: usize,
        hidden: usize,
        channels: usize,
        rng: &mut impl Rng,
    ) {
        store.insert(
            self.class_table.clone(),
            crate::numerics::uniform(num_classes, class_dim, 1.0, rng),
        );
        self.l1.init(store, 6 + class_dim, hidden, rng);
        self.l2.init(store, hidden, channels, rng);
    }

    pub fn num_classes(&self, store: &ParamStore) -> Result<usize> {
        Ok(store.get(&self.class_table)?.rows())
    }
}

pub fn encode_annotations(
    tape: &mut Tape,
    store: &ParamStore,
    beta: &AnnotationDescriptor,
    annotations: &[Annotation],
) -> Result<Var> {
    if annotations.is_empty() {
        return Err(Error::Contract(
            "encode_annotations needs at least one annotation".into(),
        ));
    }
    let num_classes = beta.num_classes(store)?;
    if let Some(a) = annotations.iter().find(|a| a.class >= num_classes) {
        return Err(Error::Contract(format!(
            "annotation class {} out of range for {num_classes} classes",
            a.class
        )));
    }
    let geom: Vec<[f64; 6]> = annotations
        .iter()
        .map(|a| {
            let r = a.as_row();
            [r[0], r[1], r[2], r[3], r[4], r[5]]
        })
        .collect();
    let geom = tape.constant(Tensor::from_rows(&geom)?)?;
    let table = tape.param(store, &beta.class_table)?;
    let classes: Vec<usize> = annotations.iter().map(|a| a.class).collect();
    let class_rows = tape.gather_rows(table, &classes)?;
    let input = tape.concat_cols(geom, class_rows)?;
    let h = beta.l1.forward(tape, store, input)?;
    let h = tape.relu(h)?;
    beta.l2.forward(tape, store, h)
}
