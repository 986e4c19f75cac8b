//! The three training stages: synthesis, base segmentation on real CT and
//! fine-tuning on synthetic CT.

use std::collections::BTreeMap;

use log::info;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use super::data::{read_split, write_json, Dataset, RunLayout};
use super::split::Partition;
use super::ExperimentConfig;
use crate::error::{Error, Result};
use crate::metrics::{dice_per_label, ssim, volume_tensor};
use crate::models::losses::gt_distance_maps;
use crate::models::{
    heatmap_to_segmentation, load_checkpoint, save_checkpoint, seg_input, Checkpoint, EpochRecord, Manifest, ModelKind,
    SegmentationModel, SynthesisModel,
};
use crate::nn::{Adam, Tensor};
use crate::volume::{LabelMap, Volume, NUM_CLASSES};

pub const SYNTHESIS_CKPT: &str = "synthesis";
pub const SEGMENTATION_CKPT: &str = "segmentation";
pub const FINETUNED_CKPT: &str = "segmentation_ft";

// stream salts so the stages draw independent crop sequences
const SYNTH_SALT: u64 = 0x53_594e;
const SEG_SALT: u64 = 0x5345_47;
const FT_SALT: u64 = 0x4654;

/// Written next to the run when a loss turns non-finite.
#[derive(Debug, Serialize)]
struct NanDiagnostics<'a> {
    stage: &'a str,
    epoch: usize,
    batch_index: usize,
    subjects: Vec<String>,
    crop_origins: Vec<[usize; 3]>,
    last_finite_epoch_loss: Option<f64>,
}

fn abort_on_nan(
    layout: &RunLayout,
    stage: &'static str,
    epoch: usize,
    batch_index: usize,
    subjects: Vec<String>,
    crop_origins: Vec<[usize; 3]>,
    history: &[EpochRecord],
) -> Error {
    let batch = format!("{batch_index}:{}", subjects.join(","));
    let diag = NanDiagnostics {
        stage,
        epoch,
        batch_index,
        subjects,
        crop_origins,
        last_finite_epoch_loss: history.last().and_then(|r| r.train_loss),
    };
    let path = layout.diagnostics().join(format!("nan-{stage}-epoch{epoch}.json"));
    if let Err(e) = write_json(&path, &diag) {
        log::error!("could not write NaN diagnostics: {e}");
    } else {
        log::error!("non-finite {stage} loss; diagnostics in {}", path.display());
    }
    Error::NonFiniteLoss { stage, epoch, batch }
}

fn crop_origin<R: Rng>(rng: &mut R, shape: [usize; 3], crop: [usize; 3]) -> [usize; 3] {
    [0, 1, 2].map(|a| rng.gen_range(0..=shape[a] - crop[a]))
}

fn crop_size(cfg: &ExperimentConfig, shape: [usize; 3]) -> [usize; 3] {
    if cfg.crop == 0 {
        shape
    } else {
        shape.map(|s| cfg.crop.min(s))
    }
}

fn validates(cfg: &ExperimentConfig, epoch: usize, last: usize) -> bool {
    epoch == last || epoch % cfg.val_interval == 0
}

fn ids(layout: &RunLayout, p: Partition) -> Result<Vec<String>> {
    let ids = read_split(layout)?.ids(p);
    if ids.is_empty() {
        return Err(Error::State(format!("the {p:?} partition is empty")));
    }
    Ok(ids)
}

fn terms_map(pairs: &[(&str, f64)]) -> BTreeMap<String, f64> {
    pairs.iter().map(|(k, v)| (k.to_string(), *v)).collect()
}

/// Mean SSIM of deterministic sCTs against CT.
fn synthesis_score(model: &SynthesisModel, val: &[(Volume, Volume)]) -> Result<f64> {
    let mut total = 0.0;
    for (mri, ct) in val {
        let sct = model.synthesize::<ChaCha8Rng>(mri, true, None)?;
        total += ssim(&sct, ct)?;
    }
    Ok(total / val.len() as f64)
}

pub fn load_synthesis(layout: &RunLayout) -> Result<(SynthesisModel, Checkpoint)> {
    let ck = load_checkpoint(&layout.checkpoints(), SYNTHESIS_CKPT)
        .map_err(|e| Error::State(format!("synthesis checkpoint unavailable ({e}); run train-synth first")))?;
    let mut m = SynthesisModel::new(&ck.manifest.config)?;
    m.load_weights(&ck.weights)?;
    Ok((m, ck))
}

pub fn load_segmentation(layout: &RunLayout, name: &str) -> Result<(SegmentationModel, Checkpoint)> {
    let ck = load_checkpoint(&layout.checkpoints(), name)
        .map_err(|e| Error::State(format!("segmentation checkpoint '{name}' unavailable ({e})")))?;
    let mut m = SegmentationModel::new(&ck.manifest.config)?;
    m.load_weights(&ck.weights)?;
    Ok((m, ck))
}

/// Trains the MRI-to-CT network with alternating discriminator and
/// generator updates on random crops and keeps the weights with the best
/// validation SSIM (initial weights included).
pub fn train_synthesis(cfg: &ExperimentConfig, layout: &RunLayout) -> Result<Manifest> {
    let ds = Dataset::load(&layout.preprocessed())?;
    let train_ids = ids(layout, Partition::Train)?;
    let val_ids = ids(layout, Partition::Val)?;
    let train: Vec<(String, Tensor, Tensor)> = train_ids
        .iter()
        .map(|id| ds.get(id).map(|r| (id.clone(), volume_tensor(&r.mri), volume_tensor(&r.ct))))
        .collect::<Result<_>>()?;
    let val: Vec<(Volume, Volume)> =
        val_ids.iter().map(|id| ds.get(id).map(|r| (r.mri.clone(), r.ct.clone()))).collect::<Result<_>>()?;
    let shape = train[0].1.spatial();
    let crop = crop_size(cfg, shape);

    let mut model = SynthesisModel::new(&cfg.network)?;
    model.mark_trained();
    let mut opt_g = Adam::new(cfg.lr_generator as f32);
    let mut opt_d = Adam::new(cfg.lr_discriminator as f32);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ SYNTH_SALT);

    let mut best = (synthesis_score(&model, &val)?, 0usize, model.weights());
    let mut history = vec![EpochRecord {
        epoch: 0,
        train_loss: None,
        val_metric: Some(best.0),
        terms: BTreeMap::new(),
    }];
    info!("synthesis epoch 0: val ssim {:.4}", best.0);
    let mut order: Vec<usize> = (0..train.len()).collect();
    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        let mut sums = [0.0f64; 6];
        let mut batches = 0usize;
        for (b, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let origins: Vec<[usize; 3]> = chunk.iter().map(|_| crop_origin(&mut rng, shape, crop)).collect();
            let crops: Vec<(Tensor, Tensor)> = chunk
                .iter()
                .zip(&origins)
                .map(|(&i, &o)| (train[i].1.crop(o, crop), train[i].2.crop(o, crop)))
                .collect();
            let batch: Vec<(&Tensor, &Tensor)> = crops.iter().map(|(a, c)| (a, c)).collect();
            let s = match model.train_batch(&batch, &mut rng, &mut opt_g, &mut opt_d) {
                Err(Error::NonFiniteLoss { .. }) => {
                    let subjects = chunk.iter().map(|&i| train[i].0.clone()).collect();
                    return Err(abort_on_nan(layout, "synthesis", epoch, b, subjects, origins, &history));
                }
                r => r?,
            };
            for (acc, v) in sums.iter_mut().zip([
                s.generator,
                s.discriminator,
                s.terms.rec,
                s.terms.adv,
                s.terms.kl,
                s.terms.perc,
            ]) {
                *acc += v;
            }
            batches += 1;
        }
        let m = sums.map(|v| v / batches as f64);
        let val_metric = if validates(cfg, epoch, cfg.epochs) {
            let score = synthesis_score(&model, &val)?;
            if score > best.0 {
                best = (score, epoch, model.weights());
            }
            Some(score)
        } else {
            None
        };
        info!(
            "synthesis epoch {epoch}: loss {:.5} (d {:.5}){}",
            m[0],
            m[1],
            val_metric.map(|v| format!(", val ssim {v:.4}")).unwrap_or_default()
        );
        history.push(EpochRecord {
            epoch,
            train_loss: Some(m[0]),
            val_metric,
            terms: terms_map(&[
                ("discriminator", m[1]),
                ("rec", m[2]),
                ("adv", m[3]),
                ("kl", m[4]),
                ("perc", m[5]),
            ]),
        });
    }
    let mut manifest = Manifest::new(ModelKind::Synthesis, "base", &cfg.network);
    manifest.epoch = best.1;
    manifest.loss_history = history;
    manifest.seed = cfg.seed;
    manifest.blob_sha256 = save_checkpoint(&layout.checkpoints(), SYNTHESIS_CKPT, &manifest, &best.2)?;
    info!("synthesis: kept epoch {} (val ssim {:.4})", best.1, best.0);
    Ok(manifest)
}

/// One subject prepared for segmentation training.
struct SegSample {
    id: String,
    input: Tensor,
    one_hot: Tensor,
    dt_sq: Tensor,
}

fn seg_sample(id: &str, image: &Volume, labels: &LabelMap, atlas_one_hot: &[f32]) -> SegSample {
    let [d, h, w] = image.shape();
    let oh = labels.one_hot();
    let dt = gt_distance_maps(&oh, [d, h, w]);
    SegSample {
        id: id.to_string(),
        input: seg_input(image.data(), atlas_one_hot, [d, h, w]),
        one_hot: Tensor::from_vec([NUM_CLASSES, d, h, w], oh),
        dt_sq: Tensor::from_vec([NUM_CLASSES, d, h, w], dt),
    }
}

/// Mean Dice over the eight foreground labels, averaged over subjects.
fn segmentation_score(
    model: &SegmentationModel,
    val: &[(Volume, LabelMap)],
    atlas: &LabelMap,
    threshold: Option<f64>,
) -> Result<f64> {
    let mut total = 0.0;
    for (image, gt) in val {
        let pred = heatmap_to_segmentation(&model.segment(image, atlas)?, threshold)?;
        let d = dice_per_label(&pred, gt)?;
        total += d.values().sum::<f64>() / d.len() as f64;
    }
    Ok(total / val.len() as f64)
}

struct SegRun<'a> {
    stage: &'static str,
    epochs: usize,
    lr: f64,
    salt: u64,
    train: Vec<SegSample>,
    val: Vec<(Volume, LabelMap)>,
    atlas: &'a LabelMap,
    // false when the validation set already chose the starting weights: their
    // score there is biased upward, so only trained epochs compete
    keep_initial: bool,
}

/// Shared loop of base training and fine-tuning. Returns the best
/// validation weights with the epoch history.
fn run_segmentation(
    cfg: &ExperimentConfig,
    layout: &RunLayout,
    model: &mut SegmentationModel,
    run: SegRun,
) -> Result<(usize, f64, Vec<f32>, Vec<EpochRecord>)> {
    let shape = run.train[0].input.spatial();
    let crop = crop_size(cfg, shape);
    let mut opt = Adam::new(run.lr as f32);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ run.salt);
    model.mark_trained();
    let score = |m: &SegmentationModel| segmentation_score(m, &run.val, run.atlas, cfg.suture_threshold);
    let initial = score(model)?;
    let floor = if run.keep_initial || run.epochs == 0 { initial } else { f64::NEG_INFINITY };
    let mut best = (floor, 0usize, model.weights());
    let mut history = vec![EpochRecord {
        epoch: 0,
        train_loss: None,
        val_metric: Some(initial),
        terms: BTreeMap::new(),
    }];
    info!("{} epoch 0: val mean dice {initial:.4}", run.stage);
    let mut order: Vec<usize> = (0..run.train.len()).collect();
    for epoch in 1..=run.epochs {
        order.shuffle(&mut rng);
        let mut sums = [0.0f64; 4];
        let mut batches = 0usize;
        for (b, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let origins: Vec<[usize; 3]> = chunk.iter().map(|_| crop_origin(&mut rng, shape, crop)).collect();
            let crops: Vec<(Tensor, Tensor, Tensor)> = chunk
                .iter()
                .zip(&origins)
                .map(|(&i, &o)| {
                    let s = &run.train[i];
                    (s.input.crop(o, crop), s.one_hot.crop(o, crop), s.dt_sq.crop(o, crop))
                })
                .collect();
            let batch: Vec<(&Tensor, &[f32], &[f32])> = crops.iter().map(|(x, g, d)| (x, g.data(), d.data())).collect();
            let s = match model.train_batch(&batch, &mut opt) {
                Err(Error::NonFiniteLoss { .. }) => {
                    let subjects = chunk.iter().map(|&i| run.train[i].id.clone()).collect();
                    return Err(abort_on_nan(layout, run.stage, epoch, b, subjects, origins, &history));
                }
                r => r?,
            };
            for (acc, v) in sums.iter_mut().zip([s.total, s.terms.dice, s.terms.focal, s.terms.hausdorff]) {
                *acc += v;
            }
            batches += 1;
        }
        let m = sums.map(|v| v / batches as f64);
        let val_metric = if validates(cfg, epoch, run.epochs) {
            let s = score(model)?;
            if s > best.0 {
                best = (s, epoch, model.weights());
            }
            Some(s)
        } else {
            None
        };
        info!(
            "{} epoch {epoch}: loss {:.5}{}",
            run.stage,
            m[0],
            val_metric.map(|v| format!(", val mean dice {v:.4}")).unwrap_or_default()
        );
        history.push(EpochRecord {
            epoch,
            train_loss: Some(m[0]),
            val_metric,
            terms: terms_map(&[("dice", m[1]), ("focal", m[2]), ("hausdorff", m[3])]),
        });
    }
    Ok((best.1, best.0, best.2, history))
}

/// Base segmentation network, trained on the real CTs of the training
/// split with the atlas labels as extra input channels.
pub fn train_segmentation(cfg: &ExperimentConfig, layout: &RunLayout) -> Result<Manifest> {
    let ds = Dataset::load(&layout.preprocessed())?;
    let atlas_oh = ds.atlas.one_hot();
    let train = ids(layout, Partition::Train)?
        .iter()
        .map(|id| ds.get(id).map(|r| seg_sample(id, &r.ct, &r.bones_sutures, &atlas_oh)))
        .collect::<Result<Vec<_>>>()?;
    let val = ids(layout, Partition::Val)?
        .iter()
        .map(|id| ds.get(id).map(|r| (r.ct.clone(), r.bones_sutures.clone())))
        .collect::<Result<Vec<_>>>()?;
    let mut model = SegmentationModel::new(&cfg.network)?;
    let run = SegRun {
        stage: "segmentation",
        epochs: cfg.epochs,
        lr: cfg.lr_segmenter,
        salt: SEG_SALT,
        train,
        val,
        atlas: &ds.atlas,
        keep_initial: true,
    };
    let (epoch, score, weights, history) = run_segmentation(cfg, layout, &mut model, run)?;
    let mut manifest = Manifest::new(ModelKind::Segmentation, "base", &cfg.network);
    manifest.epoch = epoch;
    manifest.seed = cfg.seed;
    manifest.loss_history = history;
    manifest.blob_sha256 = save_checkpoint(&layout.checkpoints(), SEGMENTATION_CKPT, &manifest, &weights)?;
    info!("segmentation: kept epoch {epoch} (val mean dice {score:.4})");
    Ok(manifest)
}

/// Deterministic sCT of one subject.
pub fn synthesize(model: &SynthesisModel, mri: &Volume) -> Result<Volume> {
    model.synthesize::<ChaCha8Rng>(mri, true, None)
}

/// Continues the base segmentation network on sCTs of the training split
/// at a reduced learning rate. Zero epochs reproduce the base weights.
pub fn finetune_segmentation(cfg: &ExperimentConfig, layout: &RunLayout) -> Result<Manifest> {
    let (synth, _) = load_synthesis(layout)?;
    let (mut model, base) = load_segmentation(layout, SEGMENTATION_CKPT)
        .map_err(|e| Error::State(format!("{e}; run train-seg first")))?;
    let ds = Dataset::load(&layout.preprocessed())?;
    let atlas_oh = ds.atlas.one_hot();
    let mut train = Vec::new();
    for id in ids(layout, Partition::Train)? {
        let r = ds.get(&id)?;
        train.push(seg_sample(&id, &synthesize(&synth, &r.mri)?, &r.bones_sutures, &atlas_oh));
    }
    let mut val = Vec::new();
    for id in ids(layout, Partition::Val)? {
        let r = ds.get(&id)?;
        val.push((synthesize(&synth, &r.mri)?, r.bones_sutures.clone()));
    }
    let run = SegRun {
        stage: "finetune",
        epochs: cfg.finetune_epochs,
        lr: cfg.lr_segmenter * cfg.finetune_lr_factor,
        salt: FT_SALT,
        train,
        val,
        atlas: &ds.atlas,
        keep_initial: false,
    };
    let (epoch, score, weights, history) = run_segmentation(cfg, layout, &mut model, run)?;
    let mut manifest = Manifest::new(ModelKind::Segmentation, "FT", &base.manifest.config);
    manifest.epoch = epoch;
    manifest.seed = cfg.seed;
    manifest.loss_history = history;
    manifest.parent_hash = Some(base.manifest.blob_sha256.clone());
    manifest.blob_sha256 = save_checkpoint(&layout.checkpoints(), FINETUNED_CKPT, &manifest, &weights)?;
    info!("finetune: kept epoch {epoch} (val mean dice on sCT {score:.4})");
    Ok(manifest)
}
