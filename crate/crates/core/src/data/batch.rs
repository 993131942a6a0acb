use rand::seq::index::sample;
use rand::Rng;

use super::{augment, PairPolicy, PairedDataset, Raster};
use crate::error::{Error, Result};

/// Four index-aligned streams: position `j` of each refers to pair `j`.
#[derive(Clone, Debug, PartialEq)]
pub struct SiameseBatchInput {
    pub sketches: Vec<Raster>,
    pub sketches_aug: Vec<Raster>,
    pub images: Vec<Raster>,
    pub images_aug: Vec<Raster>,
    pub sketch_ids: Vec<String>,
    pub image_ids: Vec<String>,
}

impl SiameseBatchInput {
    pub fn len(&self) -> usize {
        self.sketches.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sketches.is_empty()
    }
}

/// Builds a batch from the given sketch indices. Augmentations draw from
/// `rng` in stream order: sketch, sketch counterpart, image, image counterpart.
pub fn batch_from_indices<R: Rng + ?Sized>(
    ds: &PairedDataset,
    indices: &[usize],
    rng: &mut R,
    policy: &PairPolicy,
) -> Result<SiameseBatchInput> {
    let mut b = SiameseBatchInput {
        sketches: Vec::with_capacity(indices.len()),
        sketches_aug: Vec::with_capacity(indices.len()),
        images: Vec::with_capacity(indices.len()),
        images_aug: Vec::with_capacity(indices.len()),
        sketch_ids: Vec::with_capacity(indices.len()),
        image_ids: Vec::with_capacity(indices.len()),
    };
    for &i in indices {
        let s = ds
            .sketches
            .get(i)
            .ok_or_else(|| Error::Parameter(format!("sketch index {i} out of range")))?;
        let im = &ds.images[s.image_index];
        b.sketches.push(augment(&s.raster, &policy.left, rng)?);
        b.sketches_aug.push(augment(&s.raster, &policy.right, rng)?);
        b.images.push(augment(&im.raster, &policy.left, rng)?);
        b.images_aug.push(augment(&im.raster, &policy.right, rng)?);
        b.sketch_ids.push(s.id.clone());
        b.image_ids.push(im.id.clone());
    }
    Ok(b)
}

/// Samples `m` sketches without replacement and assembles their batch.
pub fn make_batch<R: Rng + ?Sized>(
    ds: &PairedDataset,
    m: usize,
    rng: &mut R,
    policy: &PairPolicy,
) -> Result<SiameseBatchInput> {
    if m == 0 || m > ds.sketches.len() {
        return Err(Error::Parameter(format!(
            "batch size {m} must be in 1..={}",
            ds.sketches.len()
        )));
    }
    let idx = sample(rng, ds.sketches.len(), m).into_vec();
    batch_from_indices(ds, &idx, rng, policy)
}
