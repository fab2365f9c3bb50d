use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use log::info;
use serde::{Deserialize, Serialize};

use fforge::dataset::{
    read_summary_csv, split, synth_dataset, write_predictions_csv, DatasetSplit, Manifest, ManifestEntry,
    SynthConfig,
};
use fforge::ensemble::{
    combine, footprints_from_prediction, predict_input, stack_v1, stack_v3, PredictionRaster, VariantId,
    VariantInput,
};
use fforge::evaluation::{format_score_table, match_polygons, score_report, write_score_csv};
use fforge::geometry::{read_geojson_layer, MapLayer, Polygon};
use fforge::labeling::{build_label, LabelImage};
use fforge::nn::{train, AdamConfig, Model, Sample, TrainOptions, UNetConfig};
use fforge::parallel::map_slice;
use fforge::raster::{
    center, channel_stats, mean_image, normalize_image, read_raster, read_raster_shape, resize, write_raster,
    BandStats, ResizeMethod,
};
use fforge::tiling::{slice, TileSet};
use fforge::{Execution, MultiBandImage};

use crate::config::{self, Config};
use crate::{Cli, Command, SubsetArgs};

pub fn run(cli: Cli) -> Result<()> {
    if let Some(jobs) = cli.jobs {
        if jobs == 0 {
            bail!("--jobs must be at least 1");
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(jobs)
            .build_global()
            .context("configuring worker threads")?;
    }
    let exec = if cli.sequential {
        Execution::Sequential
    } else {
        Execution::Parallel
    };
    let cfg = config::load(cli.config.as_deref())?;
    let ctx = Ctx { cfg, exec };
    match cli.command {
        Command::Stats(a) => ctx.stats(&a.manifest, a.split.as_deref(), &a.out),
        Command::Preprocess(a) => ctx.preprocess(&a.manifest, &a.stats, &a.out),
        Command::Label(a) => ctx.label(&a.manifest, &a.out, a.tau),
        Command::Tile(a) => tile(&a.input, &a.out),
        Command::Train(a) => ctx.train(a),
        Command::Predict(a) => ctx.predict(a),
        Command::Ensemble(a) => ensemble(&a.inputs, &a.out),
        Command::Polygonize(a) => ctx.polygonize(a),
        Command::Score(a) => ctx.score(a),
        Command::Synth(a) => synth(a),
        Command::Split(a) => {
            let m = Manifest::load(&a.manifest)?;
            let s = split(&m, a.seed)?;
            s.save(&a.out)?;
            println!(
                "train {} / val {} / test {}",
                s.train.len(),
                s.val.len(),
                s.test.len()
            );
            Ok(())
        }
    }
}

struct Ctx {
    cfg: Config,
    exec: Execution,
}

#[derive(Debug, Serialize, Deserialize)]
struct StatsFile {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    rgb: Option<Vec<BandStats>>,
    mul: Vec<BandStats>,
}

/// Metadata stored with each trained model.
#[derive(Debug, Serialize, Deserialize)]
struct ModelMeta {
    variant: VariantId,
    input_size: usize,
    best_epoch: Option<usize>,
}

fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).with_context(|| format!("creating {}", path.display()))
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    fs::write(path, text + "\n").with_context(|| format!("writing {}", path.display()))
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).map_err(|e| anyhow!("{}: {e}", path.display()))
}

fn subset_ids(manifest: &Manifest, args: &SubsetArgs) -> Result<Vec<String>> {
    let all = || manifest.ids().into_iter().map(str::to_string).collect();
    let Some(path) = &args.split else {
        if args.subset != "all" {
            bail!("--subset {} needs --split", args.subset);
        }
        return Ok(all());
    };
    let s = DatasetSplit::load(path)?;
    let ids = match args.subset.as_str() {
        "train" => s.train,
        "val" => s.val,
        "test" => s.test,
        _ => all(),
    };
    check_known(manifest, &ids)?;
    Ok(ids)
}

fn check_known(manifest: &Manifest, ids: &[String]) -> Result<()> {
    let unknown: Vec<&str> = ids
        .iter()
        .filter(|id| manifest.entry(id).is_none())
        .map(String::as_str)
        .collect();
    if !unknown.is_empty() {
        bail!("image ids not in manifest: {}", unknown.join(", "));
    }
    Ok(())
}

fn entry<'a>(manifest: &'a Manifest, id: &str) -> Result<&'a ManifestEntry> {
    manifest
        .entry(id)
        .ok_or_else(|| anyhow!("image id {id} not in manifest"))
}

fn prep_path(prep: &Path, id: &str, product: &str) -> PathBuf {
    prep.join(format!("{id}_{product}.json"))
}

/// Header files in a directory, keyed by file stem.
fn raster_ids(dir: &Path) -> Result<Vec<String>> {
    let mut ids = Vec::new();
    for item in fs::read_dir(dir).with_context(|| format!("listing {}", dir.display()))? {
        let path = item?.path();
        if path.extension().is_some_and(|e| e == "json") {
            if let Some(stem) = path.file_stem().and_then(|s| s.to_str()) {
                ids.push(stem.to_string());
            }
        }
    }
    ids.sort();
    Ok(ids)
}

/// Cache of parsed map layers, keyed by path.
#[derive(Default)]
struct Layers(HashMap<PathBuf, MapLayer>);

impl Layers {
    fn get(&mut self, path: Option<&Path>) -> Result<MapLayer> {
        let Some(p) = path else {
            return Ok(MapLayer::default());
        };
        if !self.0.contains_key(p) {
            self.0.insert(p.to_path_buf(), read_geojson_layer(p)?);
        }
        Ok(self.0[p].clone())
    }
}

/// Uncentered network inputs for one image and the matching label targets.
struct Prepared {
    input: VariantInput,
    labels: Vec<LabelImage>,
    height: usize,
    width: usize,
}

struct Preparer<'a> {
    variant: VariantId,
    input_size: usize,
    manifest: &'a Manifest,
    prep: &'a Path,
    layers: Layers,
}

impl Preparer<'_> {
    fn prepare(&mut self, id: &str, labels: Option<&Path>) -> Result<Prepared> {
        let e = entry(self.manifest, id)?;
        let mul = read_raster(&prep_path(self.prep, id, "mul"))?;
        let (h, w) = (mul.height(), mul.width());
        let label = match labels {
            Some(dir) => Some(read_raster(&dir.join(format!("{id}.json")))?),
            None => None,
        };
        let to_label = |r: &MultiBandImage| -> Result<LabelImage> {
            let mut l = LabelImage::from_raster(r, 0.0)?;
            l.values.iter_mut().for_each(|v| *v = v.clamp(0.0, 1.0));
            Ok(l)
        };
        match self.variant {
            VariantId::V1 => {
                let rgb = read_raster(&prep_path(self.prep, id, "rgb"))?;
                let s = self.input_size;
                let x = resize(&stack_v1(&rgb, &mul)?, s, s, ResizeMethod::Bilinear)?;
                let labels = match &label {
                    Some(l) => vec![to_label(&resize(l, s, s, ResizeMethod::Bilinear)?)?],
                    None => vec![],
                };
                Ok(Prepared {
                    input: VariantInput::Whole(x),
                    labels,
                    height: h,
                    width: w,
                })
            }
            VariantId::V2 | VariantId::V3 => {
                let stacked = if self.variant == VariantId::V3 {
                    let b = self.layers.get(e.buildings.as_deref())?;
                    let r = self.layers.get(e.roads.as_deref())?;
                    let mut m = mul;
                    if m.geotransform.is_none() {
                        m.geotransform = e.geotransform;
                    }
                    stack_v3(&m, &b, &r)?
                } else {
                    mul
                };
                let tiles = slice(&stacked)?;
                let labels = match &label {
                    Some(l) => slice(l)?.tiles.iter().map(to_label).collect::<Result<_>>()?,
                    None => vec![],
                };
                Ok(Prepared {
                    input: VariantInput::Tiles(tiles),
                    labels,
                    height: h,
                    width: w,
                })
            }
        }
    }
}

fn center_input(input: VariantInput, mean: &MultiBandImage) -> Result<VariantInput> {
    Ok(match input {
        VariantInput::Whole(x) => VariantInput::Whole(center(&x, mean)?),
        VariantInput::Tiles(t) => {
            let tiles = t.tiles.iter().map(|x| center(x, mean)).collect::<fforge::Result<Vec<_>>>()?;
            VariantInput::Tiles(t.with_tiles(tiles))
        }
    })
}

fn tile(input: &Path, out: &Path) -> Result<()> {
    let img = read_raster(input)?;
    let set: TileSet = slice(&img)?;
    create_dir(out)?;
    for t in &set.tiles {
        write_raster(&out.join(format!("{}.json", t.image_id)), t)?;
    }
    println!(
        "{} tiles of {}px at rows {:?}, cols {:?}",
        set.tiles.len(),
        set.tile,
        set.row_offsets,
        set.col_offsets
    );
    Ok(())
}

fn ensemble(inputs: &[PathBuf], out: &Path) -> Result<()> {
    let ids = raster_ids(&inputs[0])?;
    for dir in &inputs[1..] {
        let other = raster_ids(dir)?;
        if other != ids {
            let missing: Vec<&String> = ids.iter().filter(|i| !other.contains(i)).collect();
            let extra: Vec<&String> = other.iter().filter(|i| !ids.contains(i)).collect();
            bail!(
                "{} does not match {}: missing {:?}, extra {:?}",
                dir.display(),
                inputs[0].display(),
                missing,
                extra
            );
        }
    }
    create_dir(out)?;
    for id in &ids {
        let preds = inputs
            .iter()
            .map(|d| PredictionRaster::from_raster(&read_raster(&d.join(format!("{id}.json")))?))
            .collect::<fforge::Result<Vec<_>>>()?;
        let refs: Vec<&PredictionRaster> = preds.iter().collect();
        write_raster(&out.join(format!("{id}.json")), &combine(&refs)?.to_raster(id.as_str()))?;
    }
    println!("combined {} images from {} variants", ids.len(), inputs.len());
    Ok(())
}

fn synth(a: crate::SynthArgs) -> Result<()> {
    let cfg = SynthConfig {
        seed: a.seed,
        n_images: a.n,
        size: a.size,
        bands: a.bands,
        building_density: a.density,
        size_range: (a.min_side, a.max_side),
        city: a.city,
        ..SynthConfig::default()
    };
    let m = synth_dataset(&cfg, &a.out)?;
    println!("wrote {} scenes to {}", m.entries.len(), a.out.display());
    Ok(())
}

impl Ctx {
    fn stats(&self, manifest: &Path, split_path: Option<&Path>, out: &Path) -> Result<()> {
        let m = Manifest::load(manifest)?;
        let ids: Vec<String> = match split_path {
            Some(p) => DatasetSplit::load(p)?.train,
            None => m.ids().into_iter().map(str::to_string).collect(),
        };
        check_known(&m, &ids)?;
        let entries: Vec<&ManifestEntry> = ids.iter().map(|id| entry(&m, id)).collect::<Result<_>>()?;
        let pooled = |paths: Vec<&Path>| -> Result<Vec<BandStats>> {
            let imgs = map_slice(self.exec, &paths, |p| read_raster(p))
                .into_iter()
                .collect::<fforge::Result<Vec<_>>>()?;
            let refs: Vec<&MultiBandImage> = imgs.iter().collect();
            Ok((0..refs[0].bands())
                .map(|c| channel_stats(&refs, c))
                .collect::<fforge::Result<_>>()?)
        };
        let mul = pooled(entries.iter().map(|e| e.mul.as_path()).collect())?;
        let rgb = if entries.iter().all(|e| e.rgb.is_some()) {
            Some(pooled(entries.iter().filter_map(|e| e.rgb.as_deref()).collect())?)
        } else {
            None
        };
        write_json(out, &StatsFile { rgb, mul })?;
        println!("band statistics over {} images written to {}", ids.len(), out.display());
        Ok(())
    }

    fn preprocess(&self, manifest: &Path, stats: &Path, out: &Path) -> Result<()> {
        let m = Manifest::load(manifest)?;
        let s: StatsFile = read_json(stats)?;
        create_dir(out)?;
        let results = map_slice(self.exec, &m.entries, |e| -> Result<()> {
            let mul = normalize_image(&read_raster(&e.mul)?, &s.mul)?;
            write_raster(&prep_path(out, &e.image_id, "mul"), &mul)?;
            if let (Some(rgb), Some(st)) = (&e.rgb, &s.rgb) {
                let rgb = normalize_image(&read_raster(rgb)?, st)?;
                write_raster(&prep_path(out, &e.image_id, "rgb"), &rgb)?;
            }
            Ok(())
        });
        results.into_iter().collect::<Result<Vec<_>>>()?;
        println!("normalized {} images into {}", m.entries.len(), out.display());
        Ok(())
    }

    fn label(&self, manifest: &Path, out: &Path, tau: Option<f64>) -> Result<()> {
        let tau = tau.unwrap_or(self.cfg.label.tau);
        let m = Manifest::load(manifest)?;
        let mut tables = HashMap::new();
        for e in &m.entries {
            if !tables.contains_key(&e.footprints) {
                tables.insert(e.footprints.clone(), read_summary_csv(&e.footprints)?);
            }
        }
        create_dir(out)?;
        let results = map_slice(self.exec, &m.entries, |e| -> Result<()> {
            let (_, h, w) = read_raster_shape(&e.mul)?;
            let polys: Vec<Polygon> = tables[&e.footprints]
                .get(&e.image_id)
                .map(|recs| recs.iter().map(|r| r.polygon.clone()).collect())
                .unwrap_or_default();
            let label = build_label(&polys, h, w, tau)?;
            write_raster(&out.join(format!("{}.json", e.image_id)), &label.to_raster(e.image_id.as_str()))?;
            Ok(())
        });
        results.into_iter().collect::<Result<Vec<_>>>()?;
        println!("wrote {} labels (tau {tau}) to {}", m.entries.len(), out.display());
        Ok(())
    }

    fn train(&self, a: crate::TrainArgs) -> Result<()> {
        let variant: VariantId = a.variant.parse()?;
        let t = &self.cfg.train;
        let m = Manifest::load(&a.manifest)?;
        let s = DatasetSplit::load(&a.split)?;
        check_known(&m, &s.train)?;
        check_known(&m, &s.val)?;
        let input_size = a.input_size.unwrap_or(t.input_size);
        let config = UNetConfig {
            in_channels: variant.in_channels(),
            depth: a.depth.unwrap_or(t.depth),
            base_channels: a.base_channels.unwrap_or(t.base_channels),
        };
        let mut prep = Preparer {
            variant,
            input_size,
            manifest: &m,
            prep: &a.prep,
            layers: Layers::default(),
        };
        let mut gather = |ids: &[String]| -> Result<(Vec<MultiBandImage>, Vec<LabelImage>, usize)> {
            let (mut xs, mut ys, mut side) = (Vec::new(), Vec::new(), 0);
            for id in ids {
                let p = prep.prepare(id, Some(&a.labels))?;
                side = p.height;
                xs.extend(p.input.images().into_iter().cloned());
                ys.extend(p.labels);
            }
            Ok((xs, ys, side))
        };
        let (train_x, train_y, parent) = gather(&s.train)?;
        let (val_x, val_y, _) = gather(&s.val)?;
        if train_x.is_empty() || val_x.is_empty() {
            bail!("training needs nonempty train and val splits");
        }
        let mean = mean_image(&train_x.iter().collect::<Vec<_>>())?;
        let samples = |xs: Vec<MultiBandImage>, ys: Vec<LabelImage>| -> Result<Vec<Sample>> {
            xs.into_iter()
                .zip(ys)
                .map(|(x, label)| Ok(Sample { image: center(&x, &mean)?, label }))
                .collect()
        };
        let train_set = samples(train_x, train_y)?;
        let val_set = samples(val_x, val_y)?;

        let net_side = train_set[0].image.height();
        // areas shrink with the v1 resize
        let scale = (net_side as f64 / parent as f64).powi(2);
        let opts = TrainOptions {
            epochs: a.epochs.unwrap_or(t.epochs),
            batch_size: a.batch.unwrap_or(t.batch),
            seed: a.seed.unwrap_or(t.seed),
            adam: AdamConfig {
                lr: a.lr.unwrap_or(t.adam.lr),
                beta1: t.adam.beta1,
                beta2: t.adam.beta2,
                eps: t.adam.eps,
            },
            threshold: self.cfg.predict.threshold,
            min_area: if variant == VariantId::V1 {
                self.cfg.polygonize.min_area * scale
            } else {
                self.cfg.polygonize.min_area
            },
            iou_threshold: self.cfg.score.iou,
            exec: self.exec,
        };
        info!(
            "training {variant} on {} samples ({} validation), {:?}",
            train_set.len(),
            val_set.len(),
            config
        );
        let outcome = train(config, &train_set, &val_set, &opts)?;
        create_dir(&a.out)?;
        let meta = ModelMeta {
            variant,
            input_size,
            best_epoch: outcome.best_epoch,
        };
        outcome.model.save(&a.out, serde_json::to_value(&meta)?)?;
        write_raster(&a.out.join("mean.json"), &mean)?;
        write_json(&a.out.join("history.json"), &outcome.history)?;
        if let Some(best) = outcome.best_epoch.and_then(|e| outcome.history.get(e - 1)) {
            println!(
                "{variant}: best epoch {} with validation F1 {:.4}, soft Jaccard {:.4}",
                best.epoch, best.val_f1, best.val_jaccard
            );
        } else {
            println!("{variant}: no epochs run, saved initialization");
        }
        Ok(())
    }

    fn predict(&self, a: crate::PredictArgs) -> Result<()> {
        let (model, extra) = Model::load(&a.model)?;
        let meta: ModelMeta = serde_json::from_value(extra)
            .map_err(|e| anyhow!("{}: missing model metadata: {e}", a.model.display()))?;
        let mean = read_raster(&a.model.join("mean.json"))?;
        let m = Manifest::load(&a.manifest)?;
        let ids = subset_ids(&m, &a.subset)?;
        let mut prep = Preparer {
            variant: meta.variant,
            input_size: meta.input_size,
            manifest: &m,
            prep: &a.prep,
            layers: Layers::default(),
        };
        create_dir(&a.out)?;
        for id in &ids {
            let p = prep.prepare(id, None)?;
            let input = center_input(p.input, &mean)?;
            let pred = predict_input(&model, &input, p.height, p.width, self.exec)?;
            write_raster(&a.out.join(format!("{id}.json")), &pred.to_raster(id.as_str()))?;
        }
        println!("{}: predicted {} images into {}", meta.variant, ids.len(), a.out.display());
        Ok(())
    }

    fn polygonize(&self, a: crate::PolygonizeArgs) -> Result<()> {
        let min_area = a.min_area.unwrap_or(self.cfg.polygonize.min_area);
        let threshold = a.threshold.unwrap_or(self.cfg.polygonize.threshold);
        if !(threshold > 0.0 && threshold < 1.0) {
            bail!("threshold {threshold} outside (0, 1)");
        }
        if !(min_area >= 0.0) {
            bail!("min area {min_area} is negative");
        }
        let ids = raster_ids(&a.preds)?;
        let found = map_slice(self.exec, &ids, |id| -> Result<(String, Vec<Polygon>)> {
            let pred = PredictionRaster::from_raster(&read_raster(&a.preds.join(format!("{id}.json")))?)?;
            Ok((id.clone(), footprints_from_prediction(&pred, threshold, min_area)))
        })
        .into_iter()
        .collect::<Result<Vec<_>>>()?;
        write_predictions_csv(&a.out, &found)?;
        let total: usize = found.iter().map(|(_, p)| p.len()).sum();
        println!("{total} footprints from {} images written to {}", ids.len(), a.out.display());
        Ok(())
    }

    fn score(&self, a: crate::ScoreArgs) -> Result<()> {
        let pred = read_summary_csv(&a.pred)?;
        let truth = read_summary_csv(&a.truth)?;
        let missing: Vec<&str> = pred
            .keys()
            .filter(|id| !truth.contains_key(*id))
            .map(String::as_str)
            .collect();
        if !missing.is_empty() {
            bail!("image ids not in ground truth: {}", missing.join(", "));
        }
        if pred.is_empty() {
            bail!("{} has no images", a.pred.display());
        }
        let manifest = match &a.manifest {
            Some(p) => Some(Manifest::load(p)?),
            None => None,
        };
        let mut sizes = BTreeMap::new();
        for id in pred.keys() {
            let hw = match &manifest {
                Some(m) => {
                    let (_, h, w) = read_raster_shape(&entry(m, id)?.mul)?;
                    (h, w)
                }
                None => (a.size, a.size),
            };
            sizes.insert(id.clone(), hw);
        }
        let iou = a.iou.unwrap_or(self.cfg.score.iou);
        let ids: Vec<&String> = pred.keys().collect();
        let polys = |recs: &[fforge::geometry::FootprintRecord]| -> Vec<Polygon> {
            recs.iter().map(|r| r.polygon.clone()).collect()
        };
        let reports = map_slice(self.exec, &ids, |id| {
            let (h, w) = sizes[*id];
            match_polygons(&polys(&pred[*id]), &polys(&truth[*id]), h, w, iou)
        })
        .into_iter()
        .collect::<fforge::Result<Vec<_>>>()?;
        let min_area = a.min_area.unwrap_or(self.cfg.polygonize.min_area);
        let row = score_report(&reports, &a.city, min_area)?;
        print!("{}", format_score_table(std::slice::from_ref(&row)));
        if let Some(out) = &a.out {
            write_score_csv(out, &[row])?;
        }
        Ok(())
    }
}
