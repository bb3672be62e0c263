//! Points, axis-aligned boxes, scenes, and the geometric queries on them.

mod generate;
mod io;

pub use generate::{generate_scene, ClassSizeStats, ClassSpec, GenConfig};
pub use io::{load_dataset, load_scene, save_scene, Manifest, MANIFEST_FILE};

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type Point = [f64; 3];

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct PointCloud {
    pub points: Vec<Point>,
}

impl PointCloud {
    pub fn new(points: Vec<Point>) -> Self {
        PointCloud { points }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn is_finite(&self) -> bool {
        self.points.iter().flatten().all(|v| v.is_finite())
    }
}

/// One ground-truth or synthetic box: center and full extents in meters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Annotation {
    pub center: [f64; 3],
    pub size: [f64; 3],
    pub class: usize,
    pub is_real: bool,
}

impl Annotation {
    pub fn new(center: [f64; 3], size: [f64; 3], class: usize) -> Self {
        Annotation {
            center,
            size,
            class,
            is_real: true,
        }
    }

    pub fn min_corner(&self) -> [f64; 3] {
        std::array::from_fn(|i| self.center[i] - self.size[i] / 2.0)
    }

    pub fn max_corner(&self) -> [f64; 3] {
        std::array::from_fn(|i| self.center[i] + self.size[i] / 2.0)
    }

    pub fn volume(&self) -> f64 {
        self.size.iter().product()
    }

    /// Boundary-inclusive containment.
    pub fn contains(&self, p: &Point) -> bool {
        (0..3).all(|i| (p[i] - self.center[i]).abs() <= self.size[i] / 2.0)
    }

    /// The 7 scalars `(x, y, z, l, w, h, c)`.
    pub fn as_row(&self) -> [f64; 7] {
        let [x, y, z] = self.center;
        let [l, w, h] = self.size;
        [x, y, z, l, w, h, self.class as f64]
    }

    pub fn validate(&self, num_classes: Option<usize>) -> Result<()> {
        if !self.center.iter().chain(&self.size).all(|v| v.is_finite()) {
            return Err(Error::Validation("non-finite box parameter".into()));
        }
        if let Some(i) = self.size.iter().position(|&s| s <= 0.0) {
            return Err(Error::Validation(format!(
                "size[{i}] = {} must be positive",
                self.size[i]
            )));
        }
        if let Some(n) = num_classes {
            if self.class >= n {
                return Err(Error::Validation(format!(
                    "class {} out of range for {n} classes",
                    self.class
                )));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct AnnotationSet {
    pub items: Vec<Annotation>,
}

impl AnnotationSet {
    pub fn new(items: Vec<Annotation>) -> Self {
        AnnotationSet { items }
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn reals(&self) -> impl Iterator<Item = &Annotation> {
        self.items.iter().filter(|a| a.is_real)
    }

    pub fn real_count(&self) -> usize {
        self.reals().count()
    }
}

/// Axis-aligned region `[min, max]`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Bounds {
    pub min: [f64; 3],
    pub max: [f64; 3],
}

impl Bounds {
    pub fn new(min: [f64; 3], max: [f64; 3]) -> Result<Self> {
        if (0..3).any(|i| !(min[i] < max[i]) || !min[i].is_finite() || !max[i].is_finite()) {
            return Err(Error::Validation(format!(
                "bounds must satisfy min < max on every axis, got {min:?} / {max:?}"
            )));
        }
        Ok(Bounds { min, max })
    }

    pub fn from_flat(v: [f64; 6]) -> Result<Self> {
        Bounds::new([v[0], v[1], v[2]], [v[3], v[4], v[5]])
    }

    pub fn to_flat(&self) -> [f64; 6] {
        [
            self.min[0],
            self.min[1],
            self.min[2],
            self.max[0],
            self.max[1],
            self.max[2],
        ]
    }

    pub fn intersects_box(&self, a: &Annotation) -> bool {
        let (lo, hi) = (a.min_corner(), a.max_corner());
        (0..3).all(|i| lo[i] <= self.max[i] && hi[i] >= self.min[i])
    }

    pub fn contains(&self, p: &Point) -> bool {
        (0..3).all(|i| p[i] >= self.min[i] && p[i] <= self.max[i])
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Scene {
    pub scene_id: String,
    pub bounds: Bounds,
    pub cloud: PointCloud,
    pub annotations: AnnotationSet,
}

impl Scene {
    pub fn validate(&self, num_classes: Option<usize>) -> Result<()> {
        if !self.cloud.is_finite() {
            return Err(Error::Validation(format!(
                "scene {}: non-finite point coordinate",
                self.scene_id
            )));
        }
        for (i, a) in self.annotations.items.iter().enumerate() {
            a.validate(num_classes)
                .map_err(|e| Error::Validation(format!("scene {} annotation {i}: {e}", self.scene_id)))?;
            if a.is_real && !self.bounds.intersects_box(a) {
                return Err(Error::Validation(format!(
                    "scene {} annotation {i}: box lies outside the scene bounds",
                    self.scene_id
                )));
            }
        }
        Ok(())
    }

    pub fn real_annotations(&self) -> AnnotationSet {
        AnnotationSet::new(self.annotations.reals().cloned().collect())
    }
}

/// Points inside `bx` (boundary inclusive), in input order.
pub fn points_in_box(cloud: &PointCloud, bx: &Annotation) -> PointCloud {
    PointCloud::new(cloud.points.iter().filter(|p| bx.contains(p)).copied().collect())
}

/// One label cloud per real annotation.
#[derive(Clone, Debug, PartialEq)]
pub struct LabelCloud {
    /// Index into the scene's annotation list.
    pub annotation: usize,
    pub cloud: PointCloud,
}

impl LabelCloud {
    /// Boxes that captured no points are kept; this flags them.
    pub fn is_empty(&self) -> bool {
        self.cloud.is_empty()
    }
}

/// Label point clouds for every real annotation. A point inside two boxes
/// appears in both entries.
pub fn extract_label_points(scene: &Scene) -> Vec<LabelCloud> {
    scene
        .annotations
        .items
        .iter()
        .enumerate()
        .filter(|(_, a)| a.is_real)
        .map(|(i, a)| LabelCloud {
            annotation: i,
            cloud: points_in_box(&scene.cloud, a),
        })
        .collect()
}

/// Indices of `count` points: uniform without replacement when the cloud is
/// large enough, otherwise every point once followed by uniform draws with
/// replacement.
pub fn subsample_indices(len: usize, count: usize, seed: u64) -> Result<Vec<usize>> {
    if count == 0 {
        return Err(Error::Contract("subsample count must be at least 1".into()));
    }
    if len == 0 {
        return Err(Error::Contract("cannot subsample an empty cloud".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    if len >= count {
        return Ok(index::sample(&mut rng, len, count).into_vec());
    }
    let mut out = index::sample(&mut rng, len, len).into_vec();
    out.extend((len..count).map(|_| rng.random_range(0..len)));
    Ok(out)
}

pub fn subsample(cloud: &PointCloud, count: usize, seed: u64) -> Result<PointCloud> {
    let idx = subsample_indices(cloud.len(), count, seed)?;
    Ok(PointCloud::new(idx.into_iter().map(|i| cloud.points[i]).collect()))
}

/// Exact axis-aligned 3D IoU.
pub fn iou3d(a: &Annotation, b: &Annotation) -> f64 {
    let (a_lo, a_hi) = (a.min_corner(), a.max_corner());
    let (b_lo, b_hi) = (b.min_corner(), b.max_corner());
    let mut inter = 1.0;
    for i in 0..3 {
        let overlap = a_hi[i].min(b_hi[i]) - a_lo[i].max(b_lo[i]);
        if overlap <= 0.0 {
            return 0.0;
        }
        inter *= overlap;
    }
    let union = a.volume() + b.volume() - inter;
    (inter / union).clamp(0.0, 1.0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn cube(x: f64, y: f64, z: f64) -> Annotation {
        Annotation::new([x, y, z], [1.0, 1.0, 1.0], 0)
    }

    #[test]
    fn membership_is_boundary_inclusive() {
        let b = Annotation::new([1.0, 2.0, 3.0], [2.0, 1.0, 0.5], 0);
        let cloud = PointCloud::new(vec![[1.0, 2.0, 3.0], [2.0, 2.0, 3.0], [2.0 + 1e-9, 2.0, 3.0]]);
        let inside = points_in_box(&cloud, &b);
        assert_eq!(inside.points, vec![[1.0, 2.0, 3.0], [2.0, 2.0, 3.0]]);
    }

    #[test]
    fn iou_basic_cases() {
        assert_eq!(iou3d(&cube(0.0, 0.0, 0.0), &cube(0.0, 0.0, 0.0)), 1.0);
        assert_eq!(iou3d(&cube(0.0, 0.0, 0.0), &cube(3.0, 0.0, 0.0)), 0.0);
        let v = iou3d(&cube(0.0, 0.0, 0.0), &cube(0.5, 0.0, 0.0));
        assert!((v - 1.0 / 3.0).abs() <= 1e-12);
    }

    #[test]
    fn label_points_for_disjoint_boxes() {
        let mut points = Vec::new();
        for i in 0..10 {
            let t = i as f64 * 0.05;
            points.push([t, t, t]);
            points.push([5.0 + t, 5.0, 0.0]);
        }
        let scene = Scene {
            scene_id: "fixture".into(),
            bounds: Bounds::new([-1.0; 3], [7.0; 3]).unwrap(),
            cloud: PointCloud::new(points),
            annotations: AnnotationSet::new(vec![
                Annotation::new([0.25, 0.25, 0.25], [1.0, 1.0, 1.0], 0),
                Annotation::new([5.25, 5.0, 0.0], [1.0, 1.0, 1.0], 1),
                Annotation::new([3.0, 3.0, 3.0], [0.1, 0.1, 0.1], 2),
            ]),
        };
        let labels = extract_label_points(&scene);
        assert_eq!(labels.len(), 3);
        assert_eq!(labels[0].cloud.len(), 10);
        assert_eq!(labels[1].cloud.len(), 10);
        assert!(labels[2].is_empty());
    }

    #[test]
    fn label_points_skip_fakes_and_keep_duplicates() {
        let mut fake = Annotation::new([0.0; 3], [1.0; 3], 0);
        fake.is_real = false;
        let scene = Scene {
            scene_id: "dup".into(),
            bounds: Bounds::new([-1.0; 3], [1.0; 3]).unwrap(),
            cloud: PointCloud::new(vec![[0.0; 3]]),
            annotations: AnnotationSet::new(vec![
                Annotation::new([0.0; 3], [1.0; 3], 0),
                fake,
                Annotation::new([0.2, 0.0, 0.0], [1.0; 3], 1),
            ]),
        };
        let labels = extract_label_points(&scene);
        assert_eq!(labels.iter().map(|l| l.annotation).collect::<Vec<_>>(), vec![0, 2]);
        assert!(labels.iter().all(|l| l.cloud.len() == 1));
    }

    #[test]
    fn no_annotations_no_label_clouds() {
        let scene = Scene {
            scene_id: "empty".into(),
            bounds: Bounds::new([0.0; 3], [1.0; 3]).unwrap(),
            cloud: PointCloud::new(vec![[0.5; 3]]),
            annotations: AnnotationSet::default(),
        };
        assert!(extract_label_points(&scene).is_empty());
    }

    #[test]
    fn subsample_edge_cases() {
        let cloud = PointCloud::new((0..7).map(|i| [i as f64, 0.0, 0.0]).collect());
        let same = subsample(&cloud, 7, 11).unwrap();
        let mut xs: Vec<f64> = same.points.iter().map(|p| p[0]).collect();
        xs.sort_by(f64::total_cmp);
        assert_eq!(xs, (0..7).map(|i| i as f64).collect::<Vec<_>>());

        let one = PointCloud::new(vec![[1.0, 2.0, 3.0]]);
        assert_eq!(subsample(&one, 1, 0).unwrap(), one);

        assert_eq!(subsample(&cloud, 4, 9).unwrap(), subsample(&cloud, 4, 9).unwrap());
        let padded = subsample(&cloud, 12, 1).unwrap();
        assert_eq!(padded.len(), 12);

        assert!(subsample(&PointCloud::default(), 3, 0).is_err());
        assert!(subsample(&cloud, 0, 0).is_err());
    }

    #[test]
    fn bounds_validation() {
        assert!(Bounds::new([0.0; 3], [0.0, 1.0, 1.0]).is_err());
        let b = Bounds::from_flat([0.0, 0.0, 0.0, 1.0, 2.0, 3.0]).unwrap();
        assert_eq!(b.to_flat(), [0.0, 0.0, 0.0, 1.0, 2.0, 3.0]);
    }

    fn arb_box() -> impl Strategy<Value = Annotation> {
        (prop::array::uniform3(-3.0f64..3.0), prop::array::uniform3(0.1f64..2.0))
            .prop_map(|(c, s)| Annotation::new(c, s, 0))
    }

    proptest! {
        #[test]
        fn iou_symmetric_and_reflexive(a in arb_box(), b in arb_box()) {
            let ab = iou3d(&a, &b);
            prop_assert_eq!(ab, iou3d(&b, &a));
            prop_assert!((0.0..=1.0).contains(&ab));
            prop_assert!((iou3d(&a, &a) - 1.0).abs() <= 1e-12);
        }

        #[test]
        fn iou_monotone_under_growing_offset(a in arb_box(), t1 in 0.0f64..2.0, t2 in 0.0f64..2.0) {
            let (near, far) = if t1 <= t2 { (t1, t2) } else { (t2, t1) };
            let mut b1 = a.clone();
            b1.center[0] += near;
            let mut b2 = a.clone();
            b2.center[0] += far;
            prop_assert!(iou3d(&a, &b1) >= iou3d(&a, &b2));
        }

        #[test]
        fn subsample_without_replacement_is_distinct(n in 1usize..200, k in 1usize..200, seed in any::<u64>()) {
            let idx = subsample_indices(n, k, seed).unwrap();
            prop_assert_eq!(idx.len(), k);
            if n >= k {
                let mut sorted = idx.clone();
                sorted.sort_unstable();
                sorted.dedup();
                prop_assert_eq!(sorted.len(), k);
            }
        }
    }
}
