//! Annotations, manifests, synthetic scenes and augmentation.

mod augment;
mod image;
pub mod synth;

use std::collections::HashSet;
use std::fmt;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

pub use self::augment::{augment, crop_sample, AugmentConfig, CropRect};
pub use self::image::{Image, Normalization};
use crate::geometry::BBox;
use crate::matching::GroundTruthHoi;

#[derive(Debug, thiserror::Error)]
pub enum DataError {
    #[error("io error on {path}: {message}")]
    Io { path: String, message: String },
    #[error("image error: {0}")]
    Image(String),
    #[error("invalid manifest: {0}")]
    Manifest(String),
    #[error("invalid annotations in {path}:\n{}", .offenders.iter().map(ToString::to_string).collect::<Vec<_>>().join("\n"))]
    Annotations { path: String, offenders: Vec<Offender> },
    #[error("synthetic generation failed: {0}")]
    Synth(String),
}

impl DataError {
    fn io(path: &Path, err: std::io::Error) -> Self {
        DataError::Io {
            path: path.display().to_string(),
            message: err.to_string(),
        }
    }
}

/// One rejected annotation record.
#[derive(Debug, Clone, PartialEq)]
pub struct Offender {
    /// 1-based line in the annotation file.
    pub line: usize,
    /// `image` field of the record, when it parsed that far.
    pub image: Option<String>,
    pub message: String,
}

impl fmt::Display for Offender {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match &self.image {
            Some(img) => write!(f, "  line {} ({img}): {}", self.line, self.message),
            None => write!(f, "  line {}: {}", self.line, self.message),
        }
    }
}

/// A valid (object, interaction) combination; its index in the manifest is
/// the HOI category id.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HoiCategory {
    pub object: usize,
    pub interaction: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub objects: Vec<String>,
    pub interactions: Vec<String>,
    pub hoi_categories: Vec<HoiCategory>,
    /// HOI category ids in the Rare split.
    #[serde(default)]
    pub rare: Vec<usize>,
}

impl DatasetManifest {
    /// Every object/interaction combination, interaction-major.
    pub fn dense(objects: Vec<String>, interactions: Vec<String>) -> Self {
        let hoi_categories = (0..interactions.len())
            .flat_map(|r| (0..objects.len()).map(move |o| HoiCategory { object: o, interaction: r }))
            .collect();
        Self {
            objects,
            interactions,
            hoi_categories,
            rare: Vec::new(),
        }
    }

    pub fn num_objects(&self) -> usize {
        self.objects.len()
    }

    pub fn num_interactions(&self) -> usize {
        self.interactions.len()
    }

    pub fn category_id(&self, object: usize, interaction: usize) -> Option<usize> {
        self.hoi_categories
            .iter()
            .position(|c| c.object == object && c.interaction == interaction)
    }

    pub fn is_rare(&self, category: usize) -> bool {
        self.rare.contains(&category)
    }

    pub fn validate(&self) -> Result<(), DataError> {
        if self.objects.is_empty() || self.interactions.is_empty() {
            return Err(DataError::Manifest("objects and interactions must be non-empty".into()));
        }
        let mut seen = HashSet::new();
        for (i, c) in self.hoi_categories.iter().enumerate() {
            if c.object >= self.objects.len() || c.interaction >= self.interactions.len() {
                return Err(DataError::Manifest(format!(
                    "hoi_categories[{i}] references object {} / interaction {} outside the tables",
                    c.object, c.interaction
                )));
            }
            if !seen.insert(*c) {
                return Err(DataError::Manifest(format!("hoi_categories[{i}] is a duplicate")));
            }
        }
        if let Some(r) = self.rare.iter().find(|&&r| r >= self.hoi_categories.len()) {
            return Err(DataError::Manifest(format!(
                "rare id {r} out of range ({} categories)",
                self.hoi_categories.len()
            )));
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, DataError> {
        let text = fs::read_to_string(path).map_err(|e| DataError::io(path, e))?;
        let m: Self = serde_json::from_str(&text)
            .map_err(|e| DataError::Manifest(format!("{}: {e}", path.display())))?;
        m.validate()?;
        Ok(m)
    }

    pub fn save(&self, path: &Path) -> Result<(), DataError> {
        let mut text = serde_json::to_string_pretty(self).expect("manifest serializes");
        text.push('\n');
        fs::write(path, text).map_err(|e| DataError::io(path, e))
    }
}

/// One line of the annotation file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnnotationRecord {
    /// Path relative to the annotation file, or `synthetic:<id>`.
    pub image: String,
    pub width: usize,
    pub height: usize,
    pub hois: Vec<GroundTruthHoi>,
}

pub const SYNTHETIC_PREFIX: &str = "synthetic:";

impl AnnotationRecord {
    pub fn synthetic_id(&self) -> Option<&str> {
        self.image.strip_prefix(SYNTHETIC_PREFIX)
    }

    fn check(&self, manifest: &DatasetManifest, base: &Path) -> Vec<String> {
        let mut problems = Vec::new();
        if self.width == 0 || self.height == 0 {
            problems.push(format!("image size {}x{} is empty", self.width, self.height));
        }
        for (k, h) in self.hois.iter().enumerate() {
            if h.object_class >= manifest.num_objects() {
                problems.push(format!(
                    "hois[{k}]: unknown object id {} ({} object classes)",
                    h.object_class,
                    manifest.num_objects()
                ));
            }
            if h.interaction_class >= manifest.num_interactions() {
                problems.push(format!(
                    "hois[{k}]: unknown interaction id {} ({} interaction classes)",
                    h.interaction_class,
                    manifest.num_interactions()
                ));
            } else if h.object_class < manifest.num_objects()
                && manifest.category_id(h.object_class, h.interaction_class).is_none()
            {
                problems.push(format!(
                    "hois[{k}]: (object {}, interaction {}) is not a listed HOI category",
                    h.object_class, h.interaction_class
                ));
            }
            for (name, b) in [("human_box", &h.human_box), ("object_box", &h.object_box)] {
                if !b.is_valid() {
                    problems.push(format!("hois[{k}]: degenerate {name} {:?}", b.to_array()));
                } else if !intersects_unit(b) {
                    problems.push(format!("hois[{k}]: {name} lies outside the image"));
                }
            }
        }
        if self.synthetic_id().is_none() && !base.join(&self.image).is_file() {
            problems.push(format!("missing image file {}", base.join(&self.image).display()));
        }
        problems
    }
}

fn intersects_unit(b: &BBox) -> bool {
    let c = b.to_corners();
    c.x2 > 0.0 && c.y2 > 0.0 && c.x1 < 1.0 && c.y1 < 1.0
}

/// A loaded image with its ground truth.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub id: String,
    pub image: Image,
    pub hois: Vec<GroundTruthHoi>,
}

#[derive(Debug, Clone)]
pub struct Dataset {
    pub manifest: DatasetManifest,
    pub samples: Vec<Sample>,
}

/// Parse and validate an annotation file against `manifest`.
///
/// Every bad line is reported, not just the first.
pub fn load_annotations(path: &Path, manifest: &DatasetManifest) -> Result<Vec<AnnotationRecord>, DataError> {
    let text = fs::read_to_string(path).map_err(|e| DataError::io(path, e))?;
    let base = base_dir(path);
    let mut records = Vec::new();
    let mut offenders = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        match serde_json::from_str::<AnnotationRecord>(line) {
            Ok(rec) => {
                for message in rec.check(manifest, &base) {
                    offenders.push(Offender {
                        line: i + 1,
                        image: Some(rec.image.clone()),
                        message,
                    });
                }
                records.push(rec);
            }
            Err(e) => offenders.push(Offender {
                line: i + 1,
                image: None,
                message: e.to_string(),
            }),
        }
    }
    if offenders.is_empty() {
        Ok(records)
    } else {
        Err(DataError::Annotations {
            path: path.display().to_string(),
            offenders,
        })
    }
}

pub fn save_annotations(path: &Path, records: &[AnnotationRecord]) -> Result<(), DataError> {
    let mut out = Vec::new();
    for r in records {
        serde_json::to_writer(&mut out, r).expect("record serializes");
        out.push(b'\n');
    }
    let mut f = fs::File::create(path).map_err(|e| DataError::io(path, e))?;
    f.write_all(&out).map_err(|e| DataError::io(path, e))
}

fn base_dir(path: &Path) -> PathBuf {
    path.parent().map(Path::to_path_buf).unwrap_or_default()
}

/// Materialize pixels for validated records.
pub fn load_samples(
    annotation_path: &Path,
    manifest: &DatasetManifest,
    records: &[AnnotationRecord],
) -> Result<Vec<Sample>, DataError> {
    let base = base_dir(annotation_path);
    let synth_style = synth::SceneStyle::from_manifest(manifest);
    records
        .iter()
        .map(|rec| {
            let image = match rec.synthetic_id() {
                Some(id) => {
                    let style = synth_style.as_ref().map_err(|e| DataError::Synth(e.clone()))?;
                    synth::render_scene(rec.width, rec.height, &rec.hois, style, synth::noise_seed(id))
                }
                None => {
                    let img = Image::load_png(&base.join(&rec.image))?;
                    if (img.width(), img.height()) != (rec.width, rec.height) {
                        return Err(DataError::Image(format!(
                            "{}: file is {}x{} but the record says {}x{}",
                            rec.image,
                            img.width(),
                            img.height(),
                            rec.width,
                            rec.height
                        )));
                    }
                    img
                }
            };
            Ok(Sample {
                id: rec.image.clone(),
                image,
                hois: rec.hois.clone(),
            })
        })
        .collect()
}

/// Manifest + annotations + pixels in one call.
pub fn load_dataset(annotation_path: &Path, manifest_path: &Path) -> Result<Dataset, DataError> {
    let manifest = DatasetManifest::load(manifest_path)?;
    let records = load_annotations(annotation_path, &manifest)?;
    let samples = load_samples(annotation_path, &manifest, &records)?;
    Ok(Dataset { manifest, samples })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn manifest(c_obj: usize, c_int: usize) -> DatasetManifest {
        DatasetManifest::dense(
            (0..c_obj).map(|i| format!("o{i}")).collect(),
            (0..c_int).map(|i| format!("r{i}")).collect(),
        )
    }

    fn hoi(o: usize, r: usize) -> GroundTruthHoi {
        GroundTruthHoi {
            human_box: BBox::new(0.3, 0.5, 0.2, 0.6),
            object_box: BBox::new(0.6, 0.4, 0.1, 0.1),
            object_class: o,
            interaction_class: r,
        }
    }

    fn record(name: &str, hois: Vec<GroundTruthHoi>) -> AnnotationRecord {
        AnnotationRecord {
            image: format!("synthetic:{name}"),
            width: 32,
            height: 24,
            hois,
        }
    }

    #[test]
    fn empty_file_is_empty_dataset() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.jsonl");
        fs::write(&p, "").unwrap();
        let m = manifest(3, 2);
        assert!(m.validate().is_ok());
        assert!(load_annotations(&p, &m).unwrap().is_empty());
    }

    #[test]
    fn out_of_range_object_names_the_record() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.jsonl");
        let m = manifest(80, 2);
        save_annotations(&p, &[record("ok", vec![hoi(79, 1)]), record("bad", vec![hoi(80, 0)])]).unwrap();
        let err = load_annotations(&p, &m).unwrap_err();
        let DataError::Annotations { offenders, .. } = &err else {
            panic!("{err}")
        };
        assert_eq!(offenders.len(), 1);
        assert_eq!(offenders[0].line, 2);
        assert_eq!(offenders[0].image.as_deref(), Some("synthetic:bad"));
        assert!(offenders[0].message.contains("object id 80"), "{}", offenders[0].message);
        assert!(err.to_string().contains("line 2 (synthetic:bad)"));
    }

    #[test]
    fn degenerate_box_missing_file_and_garbage_all_reported() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.jsonl");
        let m = manifest(2, 2);
        let mut h = hoi(0, 0);
        h.human_box.w = 0.0;
        let mut lines = Vec::new();
        lines.push(serde_json::to_string(&record("x", vec![h])).unwrap());
        lines.push("{not json".to_string());
        lines.push(
            serde_json::to_string(&AnnotationRecord {
                image: "nope.png".into(),
                width: 4,
                height: 4,
                hois: vec![],
            })
            .unwrap(),
        );
        fs::write(&p, lines.join("\n")).unwrap();
        let DataError::Annotations { offenders, .. } = load_annotations(&p, &m).unwrap_err() else {
            panic!()
        };
        let lines: Vec<usize> = offenders.iter().map(|o| o.line).collect();
        assert_eq!(lines, vec![1, 2, 3]);
        assert!(offenders[0].message.contains("degenerate human_box"));
        assert!(offenders[2].message.contains("missing image file"));
    }

    #[test]
    fn three_image_fixture_round_trips_bytes() {
        let dir = tempfile::tempdir().unwrap();
        let m = manifest(3, 3);
        let recs = vec![
            record("a", vec![hoi(0, 0), hoi(1, 2)]),
            record("b", vec![hoi(2, 1)]),
            record("c", vec![hoi(0, 1), hoi(1, 1)]),
        ];
        assert_eq!(recs.iter().map(|r| r.hois.len()).sum::<usize>(), 5);
        let p1 = dir.path().join("one.jsonl");
        let p2 = dir.path().join("two.jsonl");
        save_annotations(&p1, &recs).unwrap();
        let loaded = load_annotations(&p1, &m).unwrap();
        assert_eq!(loaded, recs);
        save_annotations(&p2, &loaded).unwrap();
        assert_eq!(fs::read(&p1).unwrap(), fs::read(&p2).unwrap());
    }

    #[test]
    fn unlisted_category_rejected() {
        let mut m = manifest(2, 2);
        m.hoi_categories.retain(|c| !(c.object == 1 && c.interaction == 1));
        let problems = record("z", vec![hoi(1, 1)]).check(&m, Path::new("."));
        assert_eq!(problems.len(), 1);
        assert!(problems[0].contains("not a listed HOI category"));
    }

    #[test]
    fn manifest_validation() {
        let mut m = manifest(2, 2);
        m.rare = vec![4];
        assert!(m.validate().is_err());
        m.rare = vec![3];
        assert!(m.validate().is_ok());
        m.hoi_categories.push(HoiCategory { object: 0, interaction: 0 });
        assert!(m.validate().is_err());
    }
}
