use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{iou3d, Annotation, AnnotationSet, Bounds, Point, PointCloud, Scene};
use crate::error::{Error, Result};

const MAX_PLACEMENT_ATTEMPTS: usize = 1000;

/// Per-class box size distribution: each axis uniform in `mean ± spread`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassSpec {
    pub name: String,
    pub size_mean: [f64; 3],
    pub size_spread: [f64; 3],
}

/// Size statistics per class, used to draw fake instances.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassSizeStats {
    pub mean: [f64; 3],
    pub spread: [f64; 3],
}

impl ClassSizeStats {
    pub fn sample(&self, rng: &mut impl Rng) -> [f64; 3] {
        std::array::from_fn(|i| {
            let s = self.spread[i];
            if s > 0.0 {
                self.mean[i] + rng.random_range(-s..=s)
            } else {
                self.mean[i]
            }
        })
    }

    pub fn scaled(&self, factor: f64) -> ClassSizeStats {
        ClassSizeStats {
            mean: self.mean.map(|v| v * factor),
            spread: self.spread.map(|v| v * factor),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GenConfig {
    pub classes: Vec<ClassSpec>,
    /// Inclusive `[min, max]`.
    pub objects_per_scene: [usize; 2],
    /// `[xmin, ymin, zmin, xmax, ymax, zmax]`; objects rest on `zmin`.
    pub bounds: [f64; 6],
    pub points_per_object: [usize; 2],
    pub background_points: usize,
    pub noise_sigma: f64,
    /// Minimum clearance between placed boxes along x or y.
    #[serde(default = "default_gap")]
    pub min_gap: f64,
    #[serde(default = "default_train")]
    pub num_train: usize,
    #[serde(default = "default_val")]
    pub num_val: usize,
}

fn default_gap() -> f64 {
    0.1
}

fn default_train() -> usize {
    200
}

fn default_val() -> usize {
    50
}

impl Default for GenConfig {
    fn default() -> Self {
        GenConfig {
            classes: vec![
                ClassSpec {
                    name: "small".into(),
                    size_mean: [0.4, 0.4, 0.4],
                    size_spread: [0.05, 0.05, 0.05],
                },
                ClassSpec {
                    name: "medium".into(),
                    size_mean: [0.9, 0.6, 0.7],
                    size_spread: [0.1, 0.1, 0.1],
                },
                ClassSpec {
                    name: "large".into(),
                    size_mean: [1.8, 0.8, 0.5],
                    size_spread: [0.15, 0.1, 0.1],
                },
            ],
            objects_per_scene: [2, 4],
            bounds: [0.0, 0.0, 0.0, 5.0, 5.0, 2.0],
            points_per_object: [60, 100],
            background_points: 120,
            noise_sigma: 0.01,
            min_gap: default_gap(),
            num_train: default_train(),
            num_val: default_val(),
        }
    }
}

impl GenConfig {
    pub fn num_classes(&self) -> usize {
        self.classes.len()
    }

    pub fn scene_bounds(&self) -> Result<Bounds> {
        Bounds::from_flat(self.bounds)
    }

    pub fn size_stats(&self) -> Vec<ClassSizeStats> {
        self.classes
            .iter()
            .map(|c| ClassSizeStats {
                mean: c.size_mean,
                spread: c.size_spread,
            })
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        let bounds = self.scene_bounds()?;
        if self.classes.is_empty() {
            return Err(Error::Validation("gen.classes must not be empty".into()));
        }
        for c in &self.classes {
            for i in 0..3 {
                if !(c.size_mean[i] - c.size_spread[i] > 0.0) || c.size_spread[i] < 0.0 {
                    return Err(Error::Validation(format!(
                        "class `{}`: size mean must exceed spread on every axis",
                        c.name
                    )));
                }
                let extent = bounds.max[i] - bounds.min[i];
                if c.size_mean[i] + c.size_spread[i] > extent {
                    return Err(Error::Validation(format!(
                        "class `{}` does not fit inside the scene bounds",
                        c.name
                    )));
                }
            }
        }
        if self.objects_per_scene[0] > self.objects_per_scene[1] {
            return Err(Error::Validation("gen.objects_per_scene must be [min, max]".into()));
        }
        if self.points_per_object[0] > self.points_per_object[1] {
            return Err(Error::Validation("gen.points_per_object must be [min, max]".into()));
        }
        if !(self.noise_sigma >= 0.0) || !(self.min_gap >= 0.0) {
            return Err(Error::Validation("gen.noise_sigma and gen.min_gap must be >= 0".into()));
        }
        Ok(())
    }
}

fn range_incl(rng: &mut impl Rng, r: [usize; 2]) -> usize {
    if r[0] == r[1] {
        r[0]
    } else {
        rng.random_range(r[0]..=r[1])
    }
}

fn separated(a: &Annotation, b: &Annotation, gap: f64) -> bool {
    let (a_lo, a_hi) = (a.min_corner(), a.max_corner());
    let (b_lo, b_hi) = (b.min_corner(), b.max_corner());
    (0..2).any(|i| a_lo[i] >= b_hi[i] + gap || b_lo[i] >= a_hi[i] + gap)
}

/// Point on the five visible faces (all but the bottom) of a box shrunk by
/// `inset`, chosen with probability proportional to face area.
fn surface_point(bx: &Annotation, inset: f64, rng: &mut impl Rng) -> Point {
    let half: [f64; 3] = std::array::from_fn(|i| (bx.size[i] / 2.0 - inset).max(bx.size[i] * 0.25));
    let [hx, hy, hz] = half;
    // faces: +x, -x, +y, -y, +z
    let areas = [hy * hz, hy * hz, hx * hz, hx * hz, hx * hy];
    let total: f64 = areas.iter().sum();
    let mut pick = rng.random_range(0.0..total);
    let mut face = 4;
    for (i, a) in areas.iter().enumerate() {
        if pick < *a {
            face = i;
            break;
        }
        pick -= a;
    }
    let mut local = [
        rng.random_range(-hx..=hx),
        rng.random_range(-hy..=hy),
        rng.random_range(-hz..=hz),
    ];
    match face {
        0 => local[0] = hx,
        1 => local[0] = -hx,
        2 => local[1] = hy,
        3 => local[1] = -hy,
        _ => local[2] = hz,
    }
    std::array::from_fn(|i| bx.center[i] + local[i])
}

/// Builds one synthetic scene: non-overlapping boxes resting on the floor,
/// noisy surface points per object, and uniform clutter.
pub fn generate_scene(cfg: &GenConfig, seed: u64) -> Result<Scene> {
    cfg.validate()?;
    let bounds = cfg.scene_bounds()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = Normal::new(0.0, cfg.noise_sigma.max(f64::MIN_POSITIVE))
        .map_err(|e| Error::Validation(format!("noise_sigma: {e}")))?;

    let n_objects = range_incl(&mut rng, cfg.objects_per_scene);
    let mut boxes: Vec<Annotation> = Vec::with_capacity(n_objects);
    for k in 0..n_objects {
        let class = rng.random_range(0..cfg.classes.len());
        let stats = ClassSizeStats {
            mean: cfg.classes[class].size_mean,
            spread: cfg.classes[class].size_spread,
        };
        let mut placed = None;
        for _ in 0..MAX_PLACEMENT_ATTEMPTS {
            let size = stats.sample(&mut rng);
            let center = [
                rng.random_range(bounds.min[0] + size[0] / 2.0..=bounds.max[0] - size[0] / 2.0),
                rng.random_range(bounds.min[1] + size[1] / 2.0..=bounds.max[1] - size[1] / 2.0),
                bounds.min[2] + size[2] / 2.0,
            ];
            let candidate = Annotation::new(center, size, class);
            if boxes.iter().all(|b| separated(b, &candidate, cfg.min_gap)) {
                placed = Some(candidate);
                break;
            }
        }
        match placed {
            Some(b) => boxes.push(b),
            None => {
                return Err(Error::Generation(format!(
                    "could not place object {k} of {n_objects} without overlap in \
                     {MAX_PLACEMENT_ATTEMPTS} attempts (seed {seed})"
                )))
            }
        }
    }

    let inset = 3.0 * cfg.noise_sigma;
    let mut points = Vec::new();
    for b in &boxes {
        let count = range_incl(&mut rng, cfg.points_per_object);
        for _ in 0..count {
            let p = surface_point(b, inset, &mut rng);
            let jittered = if cfg.noise_sigma > 0.0 {
                std::array::from_fn(|i| p[i] + noise.sample(&mut rng))
            } else {
                p
            };
            points.push(jittered);
        }
    }
    for _ in 0..cfg.background_points {
        points.push(std::array::from_fn(|i| rng.random_range(bounds.min[i]..=bounds.max[i])));
    }

    debug_assert!(boxes
        .iter()
        .enumerate()
        .all(|(i, a)| boxes[i + 1..].iter().all(|b| iou3d(a, b) == 0.0)));

    Ok(Scene {
        scene_id: format!("scene_{seed:08}"),
        bounds,
        cloud: PointCloud::new(points),
        annotations: AnnotationSet::new(boxes),
    })
}
