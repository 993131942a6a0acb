//! Sketch/image pair datasets: in-memory representation, a procedural
//! generator, augmentation policies, on-disk manifests, and batch assembly.

mod augment;
mod batch;
mod manifest;
mod synth;

pub use augment::{augment, resize_bilinear, AugmentKind, AugmentPolicy, PairPolicy};
pub use batch::{batch_from_indices, make_batch, SiameseBatchInput};
pub use manifest::{load_manifest, write_dataset, Manifest, ManifestImage, ManifestSketch, ManifestSplits};
pub use synth::{heldout_seed, render_image, render_sketch, synth_dataset, synth_layout, Layout, Primitive, Shape};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// `H×W×3` raster with values in `[0, 1]`.
pub type Raster = Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct ImageEntry {
    pub id: String,
    pub raster: Raster,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SketchEntry {
    pub id: String,
    pub image_id: String,
    /// Position of the owning image in [`PairedDataset::images`].
    pub image_index: usize,
    pub raster: Raster,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Val,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PairedDataset {
    pub images: Vec<ImageEntry>,
    pub sketches: Vec<SketchEntry>,
    /// Sketch ids per split.
    pub train: Vec<String>,
    pub val: Vec<String>,
}

impl PairedDataset {
    /// Builds a dataset, sorting entries by id and resolving ownership.
    pub fn new(
        mut images: Vec<ImageEntry>,
        sketches: Vec<(String, String, Raster)>,
        train: Vec<String>,
        val: Vec<String>,
    ) -> Result<Self> {
        if images.is_empty() {
            return Err(Error::Manifest("dataset has no images".into()));
        }
        if sketches.is_empty() {
            return Err(Error::Manifest("dataset has no sketches; retrieval is undefined".into()));
        }
        images.sort_by(|a, b| a.id.cmp(&b.id));
        if let Some(w) = images.windows(2).find(|w| w[0].id == w[1].id) {
            return Err(Error::Manifest(format!("duplicate image id {:?}", w[0].id)));
        }
        let mut entries = Vec::with_capacity(sketches.len());
        for (id, image_id, raster) in sketches {
            let image_index = images
                .binary_search_by(|im| im.id.as_str().cmp(&image_id))
                .map_err(|_| Error::Manifest(format!("sketch {id:?} references unknown image {image_id:?}")))?;
            entries.push(SketchEntry {
                id,
                image_id,
                image_index,
                raster,
            });
        }
        entries.sort_by(|a, b| a.id.cmp(&b.id));
        if let Some(w) = entries.windows(2).find(|w| w[0].id == w[1].id) {
            return Err(Error::Manifest(format!("duplicate sketch id {:?}", w[0].id)));
        }
        let ds = PairedDataset {
            images,
            sketches: entries,
            train,
            val,
        };
        for id in ds.train.iter().chain(&ds.val) {
            if ds.sketch_index(id).is_none() {
                return Err(Error::Manifest(format!("split references unknown sketch {id:?}")));
            }
        }
        Ok(ds)
    }

    pub fn sketch_index(&self, id: &str) -> Option<usize> {
        self.sketches.binary_search_by(|s| s.id.as_str().cmp(id)).ok()
    }

    /// Sketch indices belonging to `split`. An empty train list means "all".
    pub fn split_indices(&self, split: Split) -> Vec<usize> {
        let ids = match split {
            Split::Train => &self.train,
            Split::Val => &self.val,
        };
        if ids.is_empty() && split == Split::Train {
            return (0..self.sketches.len()).collect();
        }
        ids.iter().filter_map(|id| self.sketch_index(id)).collect()
    }

    pub fn image_size(&self) -> (usize, usize) {
        let s = self.images[0].raster.shape();
        (s[0], s[1])
    }
}

/// Fails unless every value of `r` lies in `[0, 1]`.
pub fn check_unit_range(r: &Raster) -> Result<()> {
    if r.rank() != 3 || r.shape()[2] != 3 {
        return Err(Error::Dimension(format!("raster must be H×W×3, got {:?}", r.shape())));
    }
    match r.data().iter().position(|v| !(0.0..=1.0).contains(v)) {
        None => Ok(()),
        Some(i) => Err(Error::Validity(format!(
            "raster value {} at flat index {i} lies outside [0, 1]",
            r.data()[i]
        ))),
    }
}

/// Rounds every value to the nearest multiple of 1/255, the PNG grid.
pub(crate) fn quantize(r: &mut Raster) {
    for v in r.data_mut() {
        *v = (v.clamp(0.0, 1.0) * 255.0).round() / 255.0;
    }
}
