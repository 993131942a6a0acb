use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{AdamState, Framework, LossMode, Modality, ModelBundle, TrainConfig, TripletAnchor};
use crate::data::{batch_from_indices, PairPolicy, PairedDataset, Raster, SiameseBatchInput, Split};
use crate::error::{Error, Result};
use crate::mstr::{build_contrast_map, ContrastMap};
use crate::objectives::{
    basic_loss, full_loss, single_stream_loss, triplet, ContrastiveOptions, LossBreakdown, LossTerms, SiameseBatch,
};
use crate::tensor::{Graph, Tensor, Var};
use crate::vit::Dropout;

/// One line of the training log.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogRecord {
    pub step: u64,
    pub multi: f64,
    pub inter: f64,
    pub intra: f64,
    pub recycling: f64,
    pub total: f64,
}

impl LogRecord {
    pub fn new(step: u64, b: &LossBreakdown) -> Self {
        LogRecord {
            step,
            multi: b.multi,
            inter: b.inter,
            intra: b.intra,
            recycling: b.recycling,
            total: b.total,
        }
    }

    pub fn to_json_line(&self) -> String {
        serde_json::to_string(self).expect("log records always serialize")
    }
}

/// Independent random streams derived from one seed, one per subsystem, so
/// that changing how one consumes randomness leaves the others untouched.
#[derive(Clone, Debug)]
pub struct StepRngs {
    pub init: ChaCha8Rng,
    pub data: ChaCha8Rng,
    pub augment: ChaCha8Rng,
    pub dropout: ChaCha8Rng,
}

impl StepRngs {
    pub fn from_seed(seed: u64) -> Self {
        let stream = |s: u64| {
            let mut r = ChaCha8Rng::seed_from_u64(seed);
            r.set_stream(s);
            r
        };
        StepRngs {
            init: stream(0),
            data: stream(1),
            augment: stream(2),
            dropout: stream(3),
        }
    }
}

fn check_mode(bundle: &ModelBundle, cfg: &TrainConfig) -> Result<()> {
    match cfg.loss_mode {
        LossMode::Full if !bundle.has_mstr() => Err(Error::Config {
            path: "mstr.enabled".into(),
            msg: "loss_mode full needs the recycling head".into(),
        }),
        LossMode::Triplet if bundle.has_mstr() => Err(Error::Config {
            path: "mstr.enabled".into(),
            msg: "loss_mode triplet does not use the recycling head; disable it".into(),
        }),
        _ => Ok(()),
    }
}

/// Rows rolled by one: row `i` of the result is row `i + 1 (mod N)`.
fn roll_rows(g: &mut Graph, x: Var) -> Result<Var> {
    let n = g.shape(x)[0];
    if n < 2 {
        return Ok(x);
    }
    let head = g.slice(x, 0, 1, n - 1)?;
    let tail = g.slice(x, 0, 0, 1)?;
    g.concat(&[head, tail], 0)
}

struct Encoded {
    f: Var,
    f_aug: Option<Var>,
    out: Var,
    map_features: Option<Var>,
}

fn forward_modality(
    g: &mut Graph,
    p: &crate::params::Bound,
    bundle: &ModelBundle,
    modality: Modality,
    originals: &[Raster],
    augmented: Option<&[Raster]>,
    dropout: &mut Dropout<'_>,
) -> Result<Encoded> {
    let b = originals.len();
    let mut inputs: Vec<&Raster> = originals.iter().collect();
    if let Some(aug) = augmented {
        inputs.extend(aug.iter());
    }
    let enc = bundle.encode(g, p, modality, &inputs, dropout)?;
    let (f, f_aug, patches) = if augmented.is_some() {
        (
            g.slice(enc.cls, 0, 0, b)?,
            Some(g.slice(enc.cls, 0, b, b)?),
            g.slice(enc.patches, 0, 0, b)?,
        )
    } else {
        (enc.cls, None, enc.patches)
    };
    // The recycling head sees the original stream only.
    let (out, rec) = bundle.joint(g, p, modality, f, patches)?;
    Ok(Encoded {
        f,
        f_aug,
        out,
        map_features: rec.map(|r| r.map_features),
    })
}

/// Forward, loss, backward and one Adam update. Returns the loss breakdown of
/// the forward pass (before the update).
pub fn train_step(
    batch: &SiameseBatchInput,
    bundle: &mut ModelBundle,
    adam: &mut AdamState,
    cfg: &TrainConfig,
    map: Option<&ContrastMap>,
    dropout_rng: &mut ChaCha8Rng,
) -> Result<LossBreakdown> {
    check_mode(bundle, cfg)?;
    if batch.is_empty() {
        return Err(Error::Parameter("empty batch".into()));
    }
    let double = cfg.framework == Framework::Double && cfg.loss_mode != LossMode::Triplet;
    let mut g = Graph::new();
    let p = bundle.store.bind(&mut g, true);
    let mut dropout = Dropout {
        rate: bundle.config.encoder.dropout_rate,
        rng: Some(dropout_rng),
    };
    let skt = forward_modality(
        &mut g,
        &p,
        bundle,
        Modality::Sketch,
        &batch.sketches,
        double.then_some(batch.sketches_aug.as_slice()),
        &mut dropout,
    )?;
    let img = forward_modality(
        &mut g,
        &p,
        bundle,
        Modality::Image,
        &batch.images,
        double.then_some(batch.images_aug.as_slice()),
        &mut dropout,
    )?;

    let terms = match cfg.loss_mode {
        LossMode::Triplet => {
            let s = g.l2_normalize(skt.out);
            let i = g.l2_normalize(img.out);
            let (anchor, positive) = match cfg.triplet_anchor {
                TripletAnchor::Sketch => (s, i),
                TripletAnchor::Image => (i, s),
            };
            let negative = roll_rows(&mut g, positive)?;
            let t = triplet(&mut g, anchor, positive, negative, cfg.triplet_margin)?;
            LossTerms {
                multi: Some(t),
                inter: None,
                intra: None,
                recycling: None,
                total: t,
            }
        }
        LossMode::Basic | LossMode::Full => {
            let sb = SiameseBatch {
                f_skt: skt.f,
                f_skt_aug: skt.f_aug,
                f_img: img.f,
                f_img_aug: img.f_aug,
                out_skt: skt.out,
                out_img: img.out,
            };
            let opts = ContrastiveOptions {
                tau: cfg.tau,
                symmetric: cfg.symmetric_contrastive,
                use_inter: cfg.use_inter,
            };
            let basic = if double {
                basic_loss(&mut g, &sb, &opts)?
            } else {
                single_stream_loss(&mut g, &sb, &opts)?
            };
            if cfg.loss_mode == LossMode::Full {
                let map = map.ok_or_else(|| Error::Contract("full loss needs a contrast map".into()))?;
                let feats: Vec<Var> = [skt.map_features, img.map_features].into_iter().flatten().collect();
                full_loss(&mut g, basic, &feats, map, bundle.mstr_config.include_diagonal)?
            } else {
                basic
            }
        }
    };
    let breakdown = terms.breakdown(&g, cfg.tau);
    if let Some(name) = breakdown.non_finite_component() {
        return Err(Error::Validity(format!(
            "non-finite {name} loss at step {}: {breakdown:?}",
            adam.t + 1
        )));
    }

    let mut grads = g.backward(terms.total)?;
    let mut flat: Vec<Tensor> = Vec::with_capacity(p.vars().len());
    for (&v, (name, t)) in p.vars().iter().zip(bundle.store.iter()) {
        let grad = grads.take(v).unwrap_or_else(|| Tensor::zeros(t.shape()));
        grad.check_finite(&format!("gradient of {name}"))?;
        flat.push(grad);
    }
    if let Some(clip) = cfg.grad_clip {
        let norm = flat.iter().flat_map(|t| t.data()).map(|v| v * v).sum::<f64>().sqrt();
        if norm > clip {
            let k = clip / norm;
            flat.iter_mut().for_each(|t| t.data_mut().iter_mut().for_each(|v| *v *= k));
        }
    }
    adam.step(&mut bundle.store, &flat, cfg.learning_rate, cfg.weight_decay)?;
    bundle.store.round_to_f32();
    adam.round_to_f32();
    bundle.store.check_finite()?;
    Ok(breakdown)
}

/// Epoch loop over a dataset's training split.
pub struct Trainer {
    pub bundle: ModelBundle,
    pub adam: AdamState,
    pub cfg: TrainConfig,
    pub policy: PairPolicy,
    map: Option<ContrastMap>,
    rngs: StepRngs,
}

impl Trainer {
    /// Fresh model initialized from `cfg.seed`.
    pub fn new(
        model: &super::ModelConfig,
        mstr: &crate::mstr::MstrConfig,
        cfg: &TrainConfig,
        policy: PairPolicy,
    ) -> Result<Self> {
        let mut rngs = StepRngs::from_seed(cfg.seed);
        let bundle = ModelBundle::new(model, mstr, &mut rngs.init)?;
        let adam = AdamState::for_store(&bundle.store);
        Trainer::resume(bundle, adam, cfg, policy)
    }

    /// Continues from existing state. Random streams restart from the seed.
    pub fn resume(bundle: ModelBundle, adam: AdamState, cfg: &TrainConfig, policy: PairPolicy) -> Result<Self> {
        cfg.validate()?;
        check_mode(&bundle, cfg)?;
        let map = if bundle.has_mstr() {
            Some(build_contrast_map(&bundle.mstr_config, bundle.config.encoder.grid())?)
        } else {
            None
        };
        Ok(Trainer {
            bundle,
            adam,
            cfg: cfg.clone(),
            policy,
            map,
            rngs: StepRngs::from_seed(cfg.seed),
        })
    }

    pub fn step_count(&self) -> u64 {
        self.adam.t
    }

    pub fn contrast_map(&self) -> Option<&ContrastMap> {
        self.map.as_ref()
    }

    /// One shuffled pass over the training split in batches of
    /// `cfg.batch_size` (the last one may be smaller).
    pub fn epoch(&mut self, ds: &PairedDataset, on_step: &mut dyn FnMut(&LogRecord)) -> Result<()> {
        let mut order = ds.split_indices(Split::Train);
        if order.is_empty() {
            return Err(Error::Parameter("training split is empty".into()));
        }
        order.shuffle(&mut self.rngs.data);
        for chunk in order.chunks(self.cfg.batch_size) {
            let batch = batch_from_indices(ds, chunk, &mut self.rngs.augment, &self.policy)?;
            let b = train_step(
                &batch,
                &mut self.bundle,
                &mut self.adam,
                &self.cfg,
                self.map.as_ref(),
                &mut self.rngs.dropout,
            )?;
            on_step(&LogRecord::new(self.adam.t, &b));
        }
        Ok(())
    }

    /// Runs `cfg.epochs` epochs.
    pub fn fit(&mut self, ds: &PairedDataset, on_step: &mut dyn FnMut(&LogRecord)) -> Result<()> {
        for _ in 0..self.cfg.epochs {
            self.epoch(ds, on_step)?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{make_batch, synth_dataset, AugmentKind};
    use crate::mstr::MstrConfig;
    use crate::trainer::{ModelConfig, Stream};
    use crate::vit::EncoderConfig;

    fn tiny() -> ModelConfig {
        ModelConfig {
            encoder: EncoderConfig {
                image_size: 16,
                patch_size: 4,
                embed_dim: 16,
                num_layers: 2,
                num_heads: 2,
                ..EncoderConfig::default()
            },
            projection_dim: 8,
            share_cross_modal: false,
        }
    }

    fn cfg(mode: LossMode) -> TrainConfig {
        TrainConfig {
            batch_size: 4,
            epochs: 1,
            loss_mode: mode,
            learning_rate: 1e-3,
            ..TrainConfig::default()
        }
    }

    fn mstr(enabled: bool) -> MstrConfig {
        MstrConfig {
            enabled,
            ..MstrConfig::default()
        }
    }

    fn run(mode: LossMode, steps: usize) -> Vec<LogRecord> {
        let ds = synth_dataset(8, 16, 0).unwrap();
        let c = TrainConfig { epochs: steps, ..cfg(mode) };
        let mut t = Trainer::new(&tiny(), &mstr(mode == LossMode::Full), &c, PairPolicy::default()).unwrap();
        let mut log = Vec::new();
        t.fit(&ds, &mut |r| log.push(*r)).unwrap();
        log
    }

    #[test]
    fn identical_seeds_identical_logs() {
        let a = run(LossMode::Full, 2);
        let b = run(LossMode::Full, 2);
        assert_eq!(a.len(), 4);
        let bits = |l: &[LogRecord]| l.iter().map(|r| r.total.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&a), bits(&b));
        assert_eq!(a, b);
    }

    #[test]
    fn zero_learning_rate_keeps_parameters() {
        let ds = synth_dataset(4, 16, 0).unwrap();
        let c = TrainConfig {
            learning_rate: 0.0,
            ..cfg(LossMode::Full)
        };
        let mut t = Trainer::new(&tiny(), &mstr(true), &c, PairPolicy::default()).unwrap();
        let before = t.bundle.store.clone();
        t.epoch(&ds, &mut |_| {}).unwrap();
        assert_eq!(before, t.bundle.store);
        assert_eq!(t.step_count(), 1);
    }

    #[test]
    fn basic_and_full_agree_on_first_forward() {
        let basic = run(LossMode::Basic, 1);
        let full = run(LossMode::Full, 1);
        assert_eq!(basic[0].multi, full[0].multi);
        assert_eq!(basic[0].inter, full[0].inter);
        assert_eq!(basic[0].intra, full[0].intra);
        assert_eq!(basic[0].recycling, 0.0);
        assert!(full[0].recycling > 0.0);
    }

    #[test]
    fn triplet_and_single_modes_run() {
        let log = run(LossMode::Triplet, 1);
        assert!(log.iter().all(|r| r.total.is_finite() && r.intra == 0.0));

        let ds = synth_dataset(4, 16, 0).unwrap();
        let c = TrainConfig {
            framework: Framework::Single,
            use_inter: false,
            ..cfg(LossMode::Basic)
        };
        let mut t = Trainer::new(&tiny(), &mstr(false), &c, PairPolicy::default()).unwrap();
        let mut log = Vec::new();
        t.epoch(&ds, &mut |r| log.push(*r)).unwrap();
        assert_eq!((log[0].intra, log[0].inter), (0.0, 0.0));
        assert_eq!(log[0].total, log[0].multi);
    }

    #[test]
    fn mode_and_head_must_agree() {
        let c = cfg(LossMode::Full);
        assert!(matches!(
            Trainer::new(&tiny(), &mstr(false), &c, PairPolicy::default()),
            Err(Error::Config { .. })
        ));
        let c = cfg(LossMode::Triplet);
        assert!(matches!(
            Trainer::new(&tiny(), &mstr(true), &c, PairPolicy::default()),
            Err(Error::Config { .. })
        ));
    }

    #[test]
    fn sharing_survives_training() {
        let ds = synth_dataset(4, 16, 0).unwrap();
        let mut t = Trainer::new(&tiny(), &mstr(true), &cfg(LossMode::Full), PairPolicy::default()).unwrap();
        t.epoch(&ds, &mut |_| {}).unwrap();
        assert!(std::ptr::eq(
            t.bundle.encoder_for(Stream::Sketch),
            t.bundle.encoder_for(Stream::SketchAug)
        ));
    }

    #[test]
    fn single_pair_overfit_decreases() {
        let ds = synth_dataset(2, 16, 0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let policy = PairPolicy::new(AugmentKind::A0, AugmentKind::A1);
        let c = TrainConfig {
            learning_rate: 1e-3,
            ..cfg(LossMode::Basic)
        };
        let mut bundle = ModelBundle::new(&tiny(), &mstr(false), &mut rng).unwrap();
        let mut adam = AdamState::for_store(&bundle.store);
        // Two pairs so the batch has negatives; same batch every step.
        let batch = make_batch(&ds, 2, &mut rng, &policy).unwrap();
        let mut losses = Vec::new();
        for _ in 0..200 {
            losses.push(train_step(&batch, &mut bundle, &mut adam, &c, None, &mut rng).unwrap().total);
        }
        for i in 0..losses.len() - 50 {
            assert!(losses[i + 50] < losses[i], "step {i}: {} !< {}", losses[i + 50], losses[i]);
        }
    }
}
