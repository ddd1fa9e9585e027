use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::labels::{load_yolo_labels, write_yolo_labels};
use super::pnm::{read_ppm, write_ppm};
use super::synth::{generate_synthetic, SyntheticDataset, SyntheticSpec};
use crate::data::AnnotatedImage;
use crate::error::{Error, Result};

pub const MANIFEST_FILE: &str = "manifest.json";

/// On-disk layout:
///
/// ```text
/// root/images/<id>.ppm
/// root/labels/<id>.txt
/// root/train.txt, root/val.txt   (one id per line)
/// root/classes.txt               (one name per line)
/// root/manifest.json
/// ```
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    #[serde(skip)]
    pub root: PathBuf,
    pub classes: Vec<String>,
    pub train: Vec<String>,
    pub val: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub synthetic: Option<SyntheticSpec>,
}

impl DatasetManifest {
    pub fn image_path(&self, id: &str) -> PathBuf {
        self.root.join("images").join(format!("{id}.ppm"))
    }

    pub fn label_path(&self, id: &str) -> PathBuf {
        self.root.join("labels").join(format!("{id}.txt"))
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub manifest: DatasetManifest,
    pub train: Vec<AnnotatedImage>,
    pub val: Vec<AnnotatedImage>,
}

impl Dataset {
    pub fn num_classes(&self) -> usize {
        self.manifest.classes.len()
    }
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn lines(items: &[String]) -> String {
    items.iter().map(|s| format!("{s}\n")).collect()
}

pub fn write_dataset(root: &Path, data: &SyntheticDataset, spec: Option<&SyntheticSpec>) -> Result<DatasetManifest> {
    for sub in ["images", "labels"] {
        let p = root.join(sub);
        fs::create_dir_all(&p).map_err(|e| Error::io(&p, e))?;
    }
    let manifest = DatasetManifest {
        root: root.to_path_buf(),
        classes: data.classes.clone(),
        train: data.train.iter().map(|im| im.id.clone()).collect(),
        val: data.val.iter().map(|im| im.id.clone()).collect(),
        synthetic: spec.cloned(),
    };
    for im in data.train.iter().chain(&data.val) {
        write_ppm(&manifest.image_path(&im.id), &im.image)?;
        write_yolo_labels(&manifest.label_path(&im.id), &im.labels)?;
    }
    write_text(&root.join("train.txt"), &lines(&manifest.train))?;
    write_text(&root.join("val.txt"), &lines(&manifest.val))?;
    write_text(&root.join("classes.txt"), &lines(&manifest.classes))?;
    write_text(&root.join(MANIFEST_FILE), &manifest.to_json()?)?;
    Ok(manifest)
}

/// Generates a synthetic dataset and writes it under `root`.
pub fn generate_synthetic_to(spec: &SyntheticSpec, root: &Path) -> Result<DatasetManifest> {
    write_dataset(root, &generate_synthetic(spec)?, Some(spec))
}

fn read_list(path: &Path) -> Result<Vec<String>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(text.lines().map(str::trim).filter(|l| !l.is_empty()).map(String::from).collect())
}

/// Reads the split lists, class names, rasters and labels under `root`.
/// Every class id must be below the class count.
pub fn load_dataset(root: &Path) -> Result<Dataset> {
    let classes = read_list(&root.join("classes.txt"))?;
    if classes.is_empty() {
        return Err(Error::Data(format!("{} lists no classes", root.join("classes.txt").display())));
    }
    let val_path = root.join("val.txt");
    let synthetic = match fs::read_to_string(root.join(MANIFEST_FILE)) {
        Ok(text) => serde_json::from_str::<DatasetManifest>(&text)?.synthetic,
        Err(_) => None,
    };
    let manifest = DatasetManifest {
        root: root.to_path_buf(),
        train: read_list(&root.join("train.txt"))?,
        val: if val_path.exists() { read_list(&val_path)? } else { Vec::new() },
        classes,
        synthetic,
    };
    let load = |id: &String| -> Result<AnnotatedImage> {
        let image = read_ppm(&manifest.image_path(id))?;
        let label_path = manifest.label_path(id);
        let labels = load_yolo_labels(&label_path)?;
        if let Some(l) = labels.iter().find(|l| l.class_id >= manifest.classes.len()) {
            return Err(Error::Data(format!(
                "{}: class id {} but only {} classes",
                label_path.display(),
                l.class_id,
                manifest.classes.len()
            )));
        }
        AnnotatedImage::new(id.clone(), image, labels)
    };
    let train = manifest.train.iter().map(load).collect::<Result<_>>()?;
    let val = manifest.val.iter().map(load).collect::<Result<_>>()?;
    Ok(Dataset { manifest, train, val })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn write_then_load_recovers_everything() {
        let dir = tempfile::tempdir().unwrap();
        let spec = SyntheticSpec {
            train_images: 4,
            val_images: 2,
            seed: 3,
            ..SyntheticSpec::default()
        };
        let m = generate_synthetic_to(&spec, dir.path()).unwrap();
        let d = load_dataset(dir.path()).unwrap();
        let original = generate_synthetic(&spec).unwrap();
        assert_eq!(d.train, original.train);
        assert_eq!(d.val, original.val);
        assert_eq!(d.manifest, m);
        assert_eq!(d.manifest.synthetic.as_ref(), Some(&spec));
    }

    #[test]
    fn rejects_out_of_range_class() {
        let dir = tempfile::tempdir().unwrap();
        let spec = SyntheticSpec {
            train_images: 1,
            val_images: 0,
            ..SyntheticSpec::default()
        };
        let m = generate_synthetic_to(&spec, dir.path()).unwrap();
        fs::write(m.label_path(&m.train[0]), "5 0.5 0.5 0.1 0.1\n").unwrap();
        assert!(load_dataset(dir.path()).is_err());
    }
}
