//! Mini-batch training with per-epoch validation and best-F1 snapshotting.

use std::path::Path;

use log::{debug, info};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::adam::{AdamConfig, AdamState};
use super::layers::sigmoid_scalar;
use super::loss::{segmentation_loss, soft_jaccard_slices};
use super::params::{load_checkpoint, save_checkpoint, ParamStore};
use super::tensor::Tensor4;
use super::unet::{Mode, UNet, UNetConfig};
use crate::ensemble::{footprints_from_prediction, PredictionRaster};
use crate::error::{Error, Result};
use crate::evaluation::{match_polygons, pool_reports, MatchReport};
use crate::geometry::extract_polygons;
use crate::labeling::LabelImage;
use crate::parallel::{self, Execution};
use crate::raster::MultiBandImage;

/// Images per inference pass during validation and prediction.
const INFER_CHUNK: usize = 8;

/// One training or validation example.
#[derive(Debug, Clone)]
pub struct Sample {
    pub image: MultiBandImage,
    pub label: LabelImage,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainOptions {
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub adam: AdamConfig,
    pub threshold: f32,
    pub min_area: f64,
    pub iou_threshold: f64,
    #[serde(skip)]
    pub exec: Execution,
}

impl Default for TrainOptions {
    fn default() -> Self {
        TrainOptions {
            epochs: 300,
            batch_size: 64,
            seed: 0,
            adam: AdamConfig::default(),
            threshold: 0.5,
            min_area: 0.0,
            iou_threshold: 0.5,
            exec: Execution::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub train_jaccard: f64,
    pub val_jaccard: f64,
    pub val_f1: f64,
}

/// A network configuration with its parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub config: UNetConfig,
    pub params: ParamStore<f32>,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Parameters from the epoch with the highest validation F1.
    pub model: Model,
    pub history: Vec<EpochRecord>,
    /// 1-based; `None` when no epoch ran.
    pub best_epoch: Option<usize>,
}

impl Model {
    pub fn init(config: UNetConfig, seed: u64) -> Result<Model> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (_, params) = UNet::init(config, &mut rng)?;
        Ok(Model { config, params })
    }

    fn net(&self) -> Result<UNet> {
        UNet::for_params(self.config, &self.params)
    }

    /// Saves the parameters with `extra` stored under the `"extra"` metadata key.
    pub fn save(&self, dir: &Path, extra: serde_json::Value) -> Result<()> {
        let meta = serde_json::json!({ "unet": self.config, "extra": extra });
        save_checkpoint(dir, &self.params, meta)
    }

    pub fn load(dir: &Path) -> Result<(Model, serde_json::Value)> {
        let (params, mut meta) = load_checkpoint(dir)?;
        let config: UNetConfig = serde_json::from_value(meta["unet"].take())
            .map_err(|e| Error::invalid(format!("{}: bad network config: {e}", dir.display())))?;
        let model = Model { config, params };
        model.net()?;
        Ok((model, meta["extra"].take()))
    }

    /// Sigmoid probabilities for each image, using running batch-norm statistics.
    pub fn predict(&self, images: &[&MultiBandImage], exec: Execution) -> Result<Vec<PredictionRaster>> {
        let net = self.net()?;
        let mut out = Vec::with_capacity(images.len());
        for chunk in images.chunks(INFER_CHUNK) {
            let x = batch_tensor(chunk.iter().copied())?;
            let (logits, _) = net.forward(&self.params, &x, Mode::Infer, exec)?;
            for i in 0..chunk.len() {
                let values = logits.sample(i).iter().map(|&z| sigmoid_scalar(z)).collect();
                out.push(PredictionRaster::new(x.h, x.w, values)?);
            }
        }
        Ok(out)
    }
}

fn batch_tensor<'a>(images: impl Iterator<Item = &'a MultiBandImage>) -> Result<Tensor4<f32>> {
    let mut data = Vec::new();
    let mut dims = None;
    let mut n = 0;
    for img in images {
        let d = (img.bands(), img.height(), img.width());
        if *dims.get_or_insert(d) != d {
            return Err(Error::shape("images in a batch differ in shape"));
        }
        data.extend_from_slice(img.data());
        n += 1;
    }
    let (c, h, w) = dims.ok_or_else(|| Error::invalid("empty batch"))?;
    Tensor4::from_vec(n, c, h, w, data)
}

fn label_tensor<'a>(labels: impl Iterator<Item = &'a LabelImage>) -> Result<Tensor4<f32>> {
    let mut data = Vec::new();
    let mut n = 0;
    let mut hw = (0, 0);
    for l in labels {
        hw = (l.height, l.width);
        data.extend_from_slice(&l.values);
        n += 1;
    }
    Tensor4::from_vec(n, 1, hw.0, hw.1, data)
}

fn check_samples(config: &UNetConfig, set: &[Sample], what: &str) -> Result<(usize, usize)> {
    let first = set
        .first()
        .ok_or_else(|| Error::invalid(format!("{what} set is empty")))?;
    let (h, w) = (first.image.height(), first.image.width());
    let m = config.size_multiple();
    if h % m != 0 || w % m != 0 {
        return Err(Error::shape(format!(
            "{what} images are {h}x{w}, not a multiple of {m}"
        )));
    }
    for s in set {
        if s.image.bands() != config.in_channels {
            return Err(Error::shape(format!(
                "{what} image {} has {} channels, network expects {}",
                s.image.image_id,
                s.image.bands(),
                config.in_channels
            )));
        }
        if (s.image.height(), s.image.width()) != (h, w) || (s.label.height, s.label.width) != (h, w) {
            return Err(Error::shape(format!(
                "{what} image {} or its label is not {h}x{w}",
                s.image.image_id
            )));
        }
    }
    Ok((h, w))
}

/// Shuffled mini-batches; a trailing singleton is folded into the previous
/// batch and a lone sample is presented twice so batch statistics exist.
fn epoch_batches(n: usize, batch: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    if n == 1 {
        return vec![vec![0, 0]];
    }
    let mut batches: Vec<Vec<usize>> = order.chunks(batch.max(1)).map(<[usize]>::to_vec).collect();
    if batches.len() > 1 && batches.last().is_some_and(|b| b.len() == 1) {
        let last = batches.pop().expect("nonempty");
        batches.last_mut().expect("nonempty").extend(last);
    }
    if batches[0].len() == 1 {
        // batch size 1 with n >= 2: pair each sample with its successor
        batches = order.chunks(2).map(<[usize]>::to_vec).collect();
        if batches.last().is_some_and(|b| b.len() == 1) {
            let last = batches.pop().expect("nonempty");
            batches.last_mut().expect("nonempty").extend(last);
        }
    }
    batches
}

/// Validation soft-Jaccard (over all pixels pooled) and pooled F1.
pub fn evaluate(model: &Model, set: &[Sample], opts: &TrainOptions) -> Result<(f64, f64)> {
    let images: Vec<&MultiBandImage> = set.iter().map(|s| &s.image).collect();
    let preds = model.predict(&images, opts.exec)?;
    let mut p_all = Vec::new();
    let mut t_all = Vec::new();
    for (p, s) in preds.iter().zip(set) {
        p_all.extend(p.values().iter().map(|&v| v as f64));
        t_all.extend(s.label.values.iter().map(|&v| v as f64));
    }
    let jaccard = soft_jaccard_slices(&p_all, &t_all);
    let reports: Vec<MatchReport> = parallel::map_range(opts.exec, set.len(), |i| {
        let (p, s) = (&preds[i], &set[i]);
        let found = footprints_from_prediction(p, opts.threshold, opts.min_area);
        let truth = extract_polygons(&s.label.to_mask());
        match_polygons(&found, &truth, p.height(), p.width(), opts.iou_threshold)
    })
    .into_iter()
    .collect::<Result<_>>()?;
    let scores = pool_reports(&reports, opts.min_area)?;
    Ok((jaccard, scores.f1))
}

/// Trains from a seeded initialization, returning the snapshot with the
/// best validation F1 (higher validation soft Jaccard, then earlier epoch, on
/// ties) and the per-epoch history.
pub fn train(config: UNetConfig, train_set: &[Sample], val_set: &[Sample], opts: &TrainOptions) -> Result<TrainOutcome> {
    config.validate()?;
    check_samples(&config, train_set, "training")?;
    check_samples(&config, val_set, "validation")?;
    if opts.batch_size == 0 {
        return Err(Error::invalid("batch size must be positive"));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let (net, mut params) = UNet::init::<f32, _>(config, &mut rng)?;
    let mut adam = AdamState::new(&params, opts.adam);
    let mut best = Model {
        config,
        params: params.clone(),
    };
    let mut best_key = (f64::NEG_INFINITY, f64::NEG_INFINITY);
    let mut best_epoch = None;
    let mut history = Vec::with_capacity(opts.epochs);

    for epoch in 1..=opts.epochs {
        let batches = epoch_batches(train_set.len(), opts.batch_size, &mut rng);
        let (mut loss_sum, mut jac_sum, mut seen) = (0.0, 0.0, 0usize);
        for idx in &batches {
            let x = batch_tensor(idx.iter().map(|&i| &train_set[i].image))?;
            let t = label_tensor(idx.iter().map(|&i| &train_set[i].label))?;
            let (logits, cache) = net.forward(&params, &x, Mode::Train, opts.exec)?;
            let cache = cache.expect("training mode caches");
            let out = segmentation_loss(&logits, &t)?;
            cache.update_running_stats(&mut params);
            let (grads, _) = net.backward(&params, cache, &out.dlogits, false, opts.exec)?;
            adam.step(&mut params, &grads);
            loss_sum += out.loss * idx.len() as f64;
            jac_sum += out.jaccard * idx.len() as f64;
            seen += idx.len();
        }
        if !params.all_finite() {
            return Err(Error::invalid(format!("parameters diverged at epoch {epoch}")));
        }
        let current = Model {
            config,
            params: params.clone(),
        };
        let (val_jaccard, val_f1) = evaluate(&current, val_set, opts)?;
        let rec = EpochRecord {
            epoch,
            train_loss: loss_sum / seen as f64,
            train_jaccard: jac_sum / seen as f64,
            val_jaccard,
            val_f1,
        };
        debug!("{rec:?}");
        history.push(rec);
        // F1 first, soft Jaccard breaks ties (F1 saturates on easy validation sets)
        if (val_f1, val_jaccard) > best_key {
            best_key = (val_f1, val_jaccard);
            best_epoch = Some(epoch);
            best = current;
        }
    }
    if let Some(e) = best_epoch {
        info!("best validation F1 {:.4} at epoch {e}", best_key.0);
    }
    Ok(TrainOutcome {
        model: best,
        history,
        best_epoch,
    })
}
