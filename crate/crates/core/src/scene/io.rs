use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Annotation, AnnotationSet, Bounds, GenConfig, PointCloud, Scene};
use crate::error::{Error, Result};

pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SceneFile {
    scene_id: String,
    bounds: [f64; 6],
    points: Vec<[f64; 3]>,
    annotations: Vec<Annotation>,
}

impl From<&Scene> for SceneFile {
    fn from(s: &Scene) -> Self {
        SceneFile {
            scene_id: s.scene_id.clone(),
            bounds: s.bounds.to_flat(),
            points: s.cloud.points.clone(),
            annotations: s.annotations.items.clone(),
        }
    }
}

pub fn scene_to_json(scene: &Scene) -> String {
    serde_json::to_string(&SceneFile::from(scene)).expect("scene serializes")
}

pub fn scene_from_json(text: &str, context: &str) -> Result<Scene> {
    let raw: SceneFile = serde_json::from_str(text).map_err(|e| Error::parse(context, e))?;
    let scene = Scene {
        scene_id: raw.scene_id,
        bounds: Bounds::from_flat(raw.bounds).map_err(|e| Error::parse(context, format!("field `bounds`: {e}")))?,
        cloud: PointCloud::new(raw.points),
        annotations: AnnotationSet::new(raw.annotations),
    };
    scene.validate(None)?;
    Ok(scene)
}

pub fn save_scene(scene: &Scene, path: &Path) -> Result<()> {
    fs::write(path, scene_to_json(scene)).map_err(|e| Error::io(path, e))
}

pub fn load_scene(path: &Path) -> Result<Scene> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    scene_from_json(&text, &path.display().to_string())
}

/// Dataset index: split name to scene file names, plus the generator config
/// the scenes came from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub splits: BTreeMap<String, Vec<String>>,
    pub gen: GenConfig,
}

impl Manifest {
    pub fn load(dir: &Path) -> Result<Manifest> {
        let path = dir.join(MANIFEST_FILE);
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::parse(path.display().to_string(), e))
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        let path = dir.join(MANIFEST_FILE);
        let text = serde_json::to_string_pretty(self).expect("manifest serializes");
        fs::write(&path, text).map_err(|e| Error::io(&path, e))
    }

    pub fn split(&self, name: &str) -> Result<&[String]> {
        self.splits.get(name).map(Vec::as_slice).ok_or_else(|| {
            Error::Validation(format!(
                "split `{name}` not in manifest (have: {})",
                self.splits.keys().cloned().collect::<Vec<_>>().join(", ")
            ))
        })
    }
}

/// Loads every scene of `split`, validated against the manifest's classes.
pub fn load_dataset(dir: &Path, split: &str) -> Result<(Manifest, Vec<Scene>)> {
    let manifest = Manifest::load(dir)?;
    let num_classes = manifest.gen.num_classes();
    let scenes = manifest
        .split(split)?
        .iter()
        .map(|f| {
            let s = load_scene(&dir.join(f))?;
            s.validate(Some(num_classes))?;
            Ok(s)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((manifest, scenes))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scene::generate_scene;

    #[test]
    fn round_trip_is_value_identical() {
        let scene = generate_scene(&GenConfig::default(), 7).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("s.json");
        save_scene(&scene, &path).unwrap();
        assert_eq!(load_scene(&path).unwrap(), scene);
    }

    #[test]
    fn missing_annotations_key_is_a_parse_error() {
        let text = r#"{"scene_id":"a","bounds":[0,0,0,1,1,1],"points":[[0.5,0.5,0.5]]}"#;
        let err = scene_from_json(text, "inline").unwrap_err();
        assert!(matches!(err, Error::Parse { .. }));
        assert!(err.to_string().contains("annotations"), "{err}");
        assert!(err.to_string().contains("line"), "{err}");
    }

    #[test]
    fn negative_size_names_the_annotation() {
        let text = r#"{"scene_id":"a","bounds":[0,0,0,1,1,1],"points":[],
            "annotations":[{"center":[0.5,0.5,0.5],"size":[1,1,1],"class":0,"is_real":true},
                           {"center":[0.5,0.5,0.5],"size":[-1,1,1],"class":0,"is_real":true}]}"#;
        let err = scene_from_json(text, "inline").unwrap_err();
        assert!(matches!(err, Error::Validation(_)));
        assert!(err.to_string().contains("annotation 1"), "{err}");
    }

    #[test]
    fn unknown_split_is_an_error() {
        let m = Manifest {
            splits: BTreeMap::from([("train".to_string(), vec![])]),
            gen: GenConfig::default(),
        };
        assert!(m.split("test").is_err());
    }
}
