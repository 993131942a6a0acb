use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::Raster;
use crate::error::{Error, Result};
use crate::mstr::{recycle, MstrConfig, MstrParams, RecycleOutput};
use crate::params::{Bound, Linear, ParamStore};
use crate::tensor::{Graph, Tensor, Var};
use crate::vit::{encode_patches, patchify_batch, Dropout, EncodedBatch, EncoderConfig, EncoderParams};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    pub projection_dim: usize,
    /// One encoder for both modalities instead of one per modality.
    pub share_cross_modal: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            encoder: EncoderConfig::default(),
            projection_dim: 64,
            share_cross_modal: false,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Modality {
    Sketch,
    Image,
}

/// The four input streams of a training batch.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stream {
    Sketch,
    SketchAug,
    Image,
    ImageAug,
}

impl Stream {
    pub fn modality(self) -> Modality {
        match self {
            Stream::Sketch | Stream::SketchAug => Modality::Sketch,
            Stream::Image | Stream::ImageAug => Modality::Image,
        }
    }
}

/// All trainable state of a model, in one [`ParamStore`].
///
/// Augmented and original streams of a modality resolve to the same
/// [`EncoderParams`]; with `share_cross_modal` both modalities do too.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelBundle {
    pub config: ModelConfig,
    pub mstr_config: MstrConfig,
    pub store: ParamStore,
    encoders: Vec<EncoderParams>,
    heads: Vec<MstrParams>,
    pub projection: Linear,
}

/// Rasters per forward pass when embedding a gallery.
const EMBED_CHUNK: usize = 32;

impl ModelBundle {
    /// Builds and initializes a model. The recycling heads exist only when
    /// `mstr.enabled`. Parameters are rounded to `f32` precision.
    pub fn new<R: Rng + ?Sized>(config: &ModelConfig, mstr: &MstrConfig, rng: &mut R) -> Result<Self> {
        config.encoder.validate()?;
        if config.projection_dim == 0 {
            return Err(Error::Parameter("projection_dim must be ≥ 1".into()));
        }
        let mut store = ParamStore::new();
        let names: &[&str] = if config.share_cross_modal {
            &["encoder"]
        } else {
            &["sketch_encoder", "image_encoder"]
        };
        let encoders = names
            .iter()
            .map(|n| EncoderParams::new(&mut store, n, &config.encoder, rng))
            .collect::<Result<Vec<_>>>()?;
        let d = config.encoder.embed_dim;
        let projection = Linear::new(&mut store, "projection", d, config.projection_dim, rng);
        let heads = if mstr.enabled {
            let head_names: &[&str] = if config.share_cross_modal {
                &["mstr"]
            } else {
                &["sketch_mstr", "image_mstr"]
            };
            head_names
                .iter()
                .map(|n| MstrParams::new(&mut store, n, mstr, config.encoder.grid(), d, rng))
                .collect::<Result<Vec<_>>>()?
        } else {
            Vec::new()
        };
        store.round_to_f32();
        Ok(ModelBundle {
            config: config.clone(),
            mstr_config: mstr.clone(),
            store,
            encoders,
            heads,
            projection,
        })
    }

    fn slot(&self, m: Modality) -> usize {
        match m {
            Modality::Image if self.encoders.len() == 2 => 1,
            _ => 0,
        }
    }

    pub fn encoder_for(&self, s: Stream) -> &EncoderParams {
        &self.encoders[self.slot(s.modality())]
    }

    pub fn head_for(&self, m: Modality) -> Option<&MstrParams> {
        self.heads.get(self.slot(m))
    }

    pub fn has_mstr(&self) -> bool {
        !self.heads.is_empty()
    }

    /// Encodes rasters of one modality on `g`.
    pub fn encode(
        &self,
        g: &mut Graph,
        p: &Bound,
        modality: Modality,
        rasters: &[&Raster],
        dropout: &mut Dropout<'_>,
    ) -> Result<EncodedBatch> {
        let cfg = &self.config.encoder;
        let patches = g.constant(patchify_batch(rasters, cfg)?);
        let enc = &self.encoders[self.slot(modality)];
        encode_patches(g, p, enc, cfg, patches, dropout)
    }

    /// Joint-space embedding (before normalization) from class tokens `[B, D]`
    /// and patch tokens `[B, M, D]`. Runs the recycling head when present.
    pub fn joint(
        &self,
        g: &mut Graph,
        p: &Bound,
        modality: Modality,
        cls: Var,
        patches: Var,
    ) -> Result<(Var, Option<RecycleOutput>)> {
        let (cls, rec) = match self.head_for(modality) {
            Some(head) => {
                let rec = recycle(g, p, head, patches)?;
                (g.add(cls, rec.delta_cls)?, Some(rec))
            }
            None => (cls, None),
        };
        Ok((self.projection.forward(g, p, cls)?, rec))
    }

    /// Unit-norm joint embeddings `[G, projection_dim]`, in evaluation mode.
    pub fn embed(&self, rasters: &[Raster], modality: Modality) -> Result<Tensor> {
        let dim = self.config.projection_dim;
        let mut data = Vec::with_capacity(rasters.len() * dim);
        for chunk in rasters.chunks(EMBED_CHUNK) {
            let mut g = Graph::new();
            let p = self.store.bind(&mut g, false);
            let refs: Vec<&Raster> = chunk.iter().collect();
            let enc = self.encode(&mut g, &p, modality, &refs, &mut Dropout::off())?;
            let (out, _) = self.joint(&mut g, &p, modality, enc.cls, enc.patches)?;
            let out = g.l2_normalize(out);
            data.extend_from_slice(g.value(out).data());
        }
        Tensor::new(&[rasters.len(), dim], data)
    }

    /// Unit-norm recycling features `[T, map_dim]` of one raster.
    pub fn map_features(&self, raster: &Raster, modality: Modality) -> Result<Option<Tensor>> {
        if self.head_for(modality).is_none() {
            return Ok(None);
        }
        let mut g = Graph::new();
        let p = self.store.bind(&mut g, false);
        let enc = self.encode(&mut g, &p, modality, &[raster], &mut Dropout::off())?;
        let (_, rec) = self.joint(&mut g, &p, modality, enc.cls, enc.patches)?;
        let rec = rec.ok_or_else(|| Error::Internal("recycling head vanished".into()))?;
        let v = g.value(rec.map_features);
        let shape = v.shape();
        Ok(Some(v.reshape(&shape[1..])?))
    }
}
