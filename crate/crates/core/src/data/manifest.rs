//! `manifest.json` + `images/*.png` + `sketches/*.png` on disk.

use std::fs;
use std::path::{Path, PathBuf};

use image::RgbImage;
use serde::{Deserialize, Serialize};

use super::{resize_bilinear, ImageEntry, PairedDataset, Raster};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestImage {
    pub id: String,
    pub file: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestSketch {
    pub id: String,
    pub image_id: String,
    pub file: String,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestSplits {
    #[serde(default)]
    pub train: Vec<String>,
    #[serde(default)]
    pub val: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub images: Vec<ManifestImage>,
    pub sketches: Vec<ManifestSketch>,
    #[serde(default)]
    pub splits: ManifestSplits,
}

fn read_png(path: &Path, size: Option<usize>) -> Result<Raster> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let img = image::load_from_memory_with_format(&bytes, image::ImageFormat::Png)
        .map_err(|e| Error::Image {
            path: path.to_path_buf(),
            msg: e.to_string(),
        })?
        .to_rgb8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let data = img.into_raw().into_iter().map(|b| b as f64 / 255.0).collect();
    let raster = Tensor::new(&[h, w, 3], data)?;
    Ok(match size {
        Some(s) if (h, w) != (s, s) => resize_bilinear(&raster, s, s),
        _ => raster,
    })
}

fn write_png(path: &Path, r: &Raster) -> Result<()> {
    let (h, w) = (r.shape()[0], r.shape()[1]);
    let bytes: Vec<u8> = r.data().iter().map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8).collect();
    let img = RgbImage::from_raw(w as u32, h as u32, bytes)
        .ok_or_else(|| Error::Internal(format!("raster {:?} is not H×W×3", r.shape())))?;
    img.save_with_format(path, image::ImageFormat::Png).map_err(|e| Error::Image {
        path: path.to_path_buf(),
        msg: e.to_string(),
    })
}

/// Loads a dataset, resizing every raster to `size×size` when given.
pub fn load_manifest(root: &Path, size: Option<usize>) -> Result<PairedDataset> {
    let path = root.join("manifest.json");
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let manifest: Manifest = serde_json::from_str(&text)
        .map_err(|e| Error::Manifest(format!("{}: {e}", path.display())))?;
    if manifest.sketches.is_empty() {
        return Err(Error::Manifest(format!(
            "{}: sketches list is empty; retrieval is undefined",
            path.display()
        )));
    }
    let images = manifest
        .images
        .iter()
        .map(|im| {
            Ok(ImageEntry {
                id: im.id.clone(),
                raster: read_png(&root.join(&im.file), size)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    // Resolve references before decoding any sketch so the error is the useful one.
    for s in &manifest.sketches {
        if !manifest.images.iter().any(|im| im.id == s.image_id) {
            return Err(Error::Manifest(format!(
                "sketch {:?} references unknown image {:?}",
                s.id, s.image_id
            )));
        }
    }
    let sketches = manifest
        .sketches
        .iter()
        .map(|s| Ok((s.id.clone(), s.image_id.clone(), read_png(&root.join(&s.file), size)?)))
        .collect::<Result<Vec<_>>>()?;
    PairedDataset::new(images, sketches, manifest.splits.train, manifest.splits.val)
}

/// Writes `ds` under `root` in the layout [`load_manifest`] reads.
pub fn write_dataset(ds: &PairedDataset, root: &Path) -> Result<()> {
    let mkdir = |p: PathBuf| fs::create_dir_all(&p).map_err(|e| Error::io(&p, e));
    mkdir(root.join("images"))?;
    mkdir(root.join("sketches"))?;
    let mut manifest = Manifest {
        images: Vec::new(),
        sketches: Vec::new(),
        splits: ManifestSplits {
            train: ds.train.clone(),
            val: ds.val.clone(),
        },
    };
    for im in &ds.images {
        let file = format!("images/{}.png", im.id);
        write_png(&root.join(&file), &im.raster)?;
        manifest.images.push(ManifestImage { id: im.id.clone(), file });
    }
    for s in &ds.sketches {
        let file = format!("sketches/{}.png", s.id);
        write_png(&root.join(&file), &s.raster)?;
        manifest.sketches.push(ManifestSketch {
            id: s.id.clone(),
            image_id: s.image_id.clone(),
            file,
        });
    }
    let path = root.join("manifest.json");
    let text = serde_json::to_string_pretty(&manifest).map_err(|e| Error::Internal(e.to_string()))?;
    fs::write(&path, text + "\n").map_err(|e| Error::io(&path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::synth_dataset;

    #[test]
    fn roundtrip_preserves_pixels() {
        let dir = tempfile::tempdir().unwrap();
        let ds = synth_dataset(4, 16, 5).unwrap();
        write_dataset(&ds, dir.path()).unwrap();
        let back = load_manifest(dir.path(), Some(16)).unwrap();
        assert_eq!(back, ds);
    }

    #[test]
    fn two_images_three_sketches() {
        let dir = tempfile::tempdir().unwrap();
        let ds = synth_dataset(2, 8, 0).unwrap();
        write_dataset(&ds, dir.path()).unwrap();
        let manifest = r#"{
            "images": [{"id": "img_0000", "file": "images/img_0000.png"},
                       {"id": "img_0001", "file": "images/img_0001.png"}],
            "sketches": [{"id": "a", "image_id": "img_0000", "file": "sketches/skt_0000.png"},
                         {"id": "b", "image_id": "img_0001", "file": "sketches/skt_0001.png"},
                         {"id": "c", "image_id": "img_0001", "file": "sketches/skt_0000.png"}]
        }"#;
        fs::write(dir.path().join("manifest.json"), manifest).unwrap();
        let back = load_manifest(dir.path(), None).unwrap();
        assert_eq!((back.images.len(), back.sketches.len()), (2, 3));
        let owners: Vec<usize> = back.sketches.iter().map(|s| s.image_index).collect();
        assert_eq!(owners, [0, 1, 1]);
    }

    #[test]
    fn resizes_to_requested_size() {
        let dir = tempfile::tempdir().unwrap();
        write_dataset(&synth_dataset(2, 16, 0).unwrap(), dir.path()).unwrap();
        let back = load_manifest(dir.path(), Some(8)).unwrap();
        assert_eq!(back.images[0].raster.shape(), [8, 8, 3]);
    }

    #[test]
    fn failures_name_the_problem() {
        let dir = tempfile::tempdir().unwrap();
        let err = load_manifest(dir.path(), None).unwrap_err();
        assert!(matches!(err, Error::Io { .. }));
        assert!(err.to_string().contains("manifest.json"));

        fs::write(dir.path().join("manifest.json"), r#"{"images": [], "sketches": []}"#).unwrap();
        assert!(matches!(load_manifest(dir.path(), None), Err(Error::Manifest(_))));

        fs::write(
            dir.path().join("manifest.json"),
            r#"{"images": [{"id": "x", "file": "images/x.png"}], "sketches": [{"id": "s", "image_id": "x", "file": "s.png"}]}"#,
        )
        .unwrap();
        let err = load_manifest(dir.path(), None).unwrap_err();
        assert!(err.to_string().contains("x.png"), "{err}");
    }

    #[test]
    fn dangling_reference_rejected() {
        let dir = tempfile::tempdir().unwrap();
        write_dataset(&synth_dataset(2, 8, 0).unwrap(), dir.path()).unwrap();
        let manifest = r#"{
            "images": [{"id": "img_0000", "file": "images/img_0000.png"}],
            "sketches": [{"id": "a", "image_id": "nope", "file": "sketches/skt_0000.png"}]
        }"#;
        fs::write(dir.path().join("manifest.json"), manifest).unwrap();
        assert!(matches!(load_manifest(dir.path(), None), Err(Error::Manifest(_))));
    }
}
