//! End-to-end commands over a dataset folder and an output folder.
//!
//! Output layout under `out`:
//!
//! ```text
//! config.resolved.toml
//! metrics.csv, metrics.txt
//! synth_preview.png
//! <category>/denoiser.ckpt, extractor.ckpt, loss.csv, [finetune_loss.csv]
//! <category>/delta.txt, scores.csv
//! <category>/images/<defect>/<stem>/final.png, map.amap, map.png(.txt),
//!     steps.csv, [mask.png, generated.png, direct.png]
//! <category>/report/<defect>_<stem>.png
//! ```

use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{load_extractor, load_unet, save_extractor, save_unet};
use crate::config::{DeltaChoice, RunConfig};
use crate::dataset::{
    load_category, load_dataset, write_toy_dataset, DatasetLayout, LoadedCategory,
};
use crate::denoiser::UNet;
use crate::diffusion::NoiseSchedule;
use crate::error::{Error, Result};
use crate::extractor::{finetune_extractor, FeatureExtractor};
use crate::imageio::{
    heatmap, hstack, read_map_raw, save_rgb, tensor_to_rgb, vstack, write_image, write_map_png16,
    write_map_raw, write_unit_map,
};
use crate::metrics::{evaluate, EvalItem, MetricsReport};
use crate::reconstruction::{calibrate_delta, fixed_step_reconstruct, reconstruct};
use crate::scoring::Scorer;
use crate::synth::synthesize_anomaly;
use crate::tensor::{ImageTensor, Map2d};
use crate::toy::make_toy_dataset;
use crate::training::{standard_normal_image, train};

/// Offset separating the calibration noise streams from the test streams.
const CALIBRATION_SEED_OFFSET: u64 = 1 << 32;

fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Resolved configuration plus the output root.
#[derive(Debug, Clone)]
pub struct Run {
    pub config: RunConfig,
    pub out: PathBuf,
}

impl Run {
    pub fn new(config: RunConfig, out: PathBuf) -> Result<Self> {
        config.validate()?;
        Ok(Self { config, out })
    }

    pub fn schedule(&self) -> Result<NoiseSchedule> {
        self.config.schedule.build()
    }

    pub fn category_dir(&self, category: &str) -> PathBuf {
        self.out.join(category)
    }

    /// Write `config.resolved.toml`; returns its text.
    pub fn echo_config(&self) -> Result<String> {
        let text = format!(
            "# config hash {}\n{}",
            self.config.hash(),
            self.config.to_toml()
        );
        write_text(&self.out.join("config.resolved.toml"), &text)?;
        Ok(text)
    }

    pub fn dataset(&self) -> Result<DatasetLayout> {
        let root = self
            .config
            .dataset_root
            .as_ref()
            .ok_or_else(|| Error::Config("dataset_root is not set".into()))?;
        load_dataset(root)
    }

    /// Configured categories, or every category of the dataset.
    pub fn categories(&self, layout: &DatasetLayout) -> Result<Vec<String>> {
        if self.config.categories.is_empty() {
            return Ok(layout.categories.iter().map(|c| c.name.clone()).collect());
        }
        for c in &self.config.categories {
            layout.category(c)?;
        }
        Ok(self.config.categories.clone())
    }

    pub fn load(&self, layout: &DatasetLayout, category: &str) -> Result<LoadedCategory> {
        load_category(layout.category(category)?, self.config.resolution)
    }
}

#[derive(Debug, Clone)]
pub struct TrainSummary {
    pub category: String,
    pub final_loss: f64,
    pub iterations: usize,
    pub finetune_final_loss: Option<f64>,
}

fn write_losses(path: &Path, losses: &[f64]) -> Result<()> {
    let mut s = String::from("iteration,loss\n");
    for (i, l) in losses.iter().enumerate() {
        s.push_str(&format!("{},{:.17e}\n", i + 1, l));
    }
    write_text(path, &s)
}

/// Train the denoiser (and optionally fine-tune the extractor) for one
/// category.
pub fn train_category(run: &Run, data: &LoadedCategory) -> Result<TrainSummary> {
    let cfg = &run.config;
    let schedule = run.schedule()?;
    let dir = run.category_dir(&data.name);
    let mut model = UNet::new(cfg.denoiser.clone())?;
    let report = train(&mut model, &data.train, &cfg.train, &schedule, |_, _| {})?;
    let meta = serde_json::json!({
        "category": data.name,
        "config_hash": cfg.hash(),
        "schedule": cfg.schedule,
        "train": cfg.train,
        "resolution": cfg.resolution,
    });
    save_unet(&dir.join("denoiser.ckpt"), &model, meta.clone())?;
    report.write_csv(&dir.join("loss.csv"))?;

    let extractor = FeatureExtractor::new(cfg.extractor.clone())?;
    let mut finetune_final_loss = None;
    let extractor = match &cfg.finetune {
        Some(ft) => {
            let t = cfg.search.t_min.max(1);
            let mut rng = ChaCha8Rng::seed_from_u64(ft.seed);
            let (tuned, losses) = finetune_extractor(
                &extractor,
                &data.train,
                |x| {
                    let eps = standard_normal_image(&mut rng, x.channels(), x.height(), x.width());
                    fixed_step_reconstruct(&model, x, t, cfg.search.stride, &eps, &schedule)
                },
                ft,
            )?;
            write_losses(&dir.join("finetune_loss.csv"), &losses)?;
            finetune_final_loss = losses.last().copied();
            tuned
        }
        None => extractor,
    };
    save_extractor(&dir.join("extractor.ckpt"), &extractor, meta)?;
    Ok(TrainSummary {
        category: data.name.clone(),
        final_loss: report.losses.last().copied().unwrap_or(f64::NAN),
        iterations: report.losses.len(),
        finetune_final_loss,
    })
}

/// Models saved by [`train_category`].
pub fn load_models(run: &Run, category: &str) -> Result<(UNet, Scorer)> {
    let dir = run.category_dir(category);
    let model = load_unet(&dir.join("denoiser.ckpt"))?;
    let extractor = load_extractor(&dir.join("extractor.ckpt"))?;
    Ok((
        model,
        Scorer {
            extractor,
            params: run.config.scoring.clone(),
        },
    ))
}

/// The threshold for a category and where it came from.
pub fn resolve_delta(
    run: &Run,
    category: &str,
    model: &UNet,
    scorer: &Scorer,
    train: &[ImageTensor],
) -> Result<(f64, String)> {
    match run.config.delta.resolve(category) {
        DeltaChoice::Value { delta, source } => Ok((delta, source.to_string())),
        DeltaChoice::Calibrate => {
            let n = run.config.delta.calibration_images.min(train.len());
            let cfg = run.config.search_for(f64::INFINITY);
            let delta = calibrate_delta(
                model,
                scorer,
                &train[..n],
                &run.schedule()?,
                &cfg,
                run.config.seed.wrapping_add(CALIBRATION_SEED_OFFSET),
            )?;
            Ok((delta, format!("calibrated on {n} training images")))
        }
    }
}

/// One row of `scores.csv`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreRow {
    pub id: String,
    pub defect_type: String,
    pub anomalous: bool,
    pub image_score: f64,
    pub proper_step: usize,
    pub detected_step: Option<usize>,
}

/// Noise stream for test image `index`.
pub fn image_rng(seed: u64, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64);
    rng
}

/// Reconstruct and score every test image; writes per-image artifacts and
/// `scores.csv`.
pub fn reconstruct_category(run: &Run, data: &LoadedCategory) -> Result<Vec<ScoreRow>> {
    let cfg = &run.config;
    let schedule = run.schedule()?;
    let dir = run.category_dir(&data.name);
    let (model, scorer) = load_models(run, &data.name)?;
    let (delta, source) = resolve_delta(run, &data.name, &model, &scorer, &data.train)?;
    write_text(&dir.join("delta.txt"), &format!("{delta:e} {source}\n"))?;
    let search = cfg.search_for(delta);
    let mut rows = Vec::with_capacity(data.test.len());
    for (i, t) in data.test.iter().enumerate() {
        let mut rng = image_rng(cfg.seed, i);
        let trace = reconstruct(&model, &scorer, &t.image, &schedule, &search, &mut rng)?;
        let amap = scorer.score(&t.image, &trace.final_image)?;
        let idir = dir.join("images").join(&t.id);
        write_image(&trace.final_image, &idir.join("final.png"))?;
        trace.write_steps_csv(&idir.join("steps.csv"))?;
        write_map_raw(&amap.map, &idir.join("map.amap"))?;
        write_map_png16(&amap.map, &idir.join("map.png"))?;
        if let Some(mask) = &trace.mask {
            write_unit_map(mask, &idir.join("mask.png"))?;
            if let Some(r) = trace.records.iter().find(|r| r.t == trace.proper_step) {
                write_image(
                    &r.generated.clamp_model_range(),
                    &idir.join("generated.png"),
                )?;
                write_image(&r.direct.clamp_model_range(), &idir.join("direct.png"))?;
            }
        }
        rows.push(ScoreRow {
            id: t.id.clone(),
            defect_type: t.defect_type.clone(),
            anomalous: t.mask.is_some(),
            image_score: amap.image_score,
            proper_step: trace.proper_step,
            detected_step: trace.detected_step,
        });
    }
    write_scores(&dir.join("scores.csv"), &rows)?;
    Ok(rows)
}

pub fn write_scores(path: &Path, rows: &[ScoreRow]) -> Result<()> {
    let mut s = String::from("id,defect_type,anomalous,image_score,proper_step,detected_step\n");
    for r in rows {
        s.push_str(&format!(
            "{},{},{},{:.17e},{},{}\n",
            r.id,
            r.defect_type,
            r.anomalous as u8,
            r.image_score,
            r.proper_step,
            r.detected_step.map_or(String::new(), |t| t.to_string())
        ));
    }
    write_text(path, &s)
}

pub fn read_scores(path: &Path) -> Result<Vec<ScoreRow>> {
    let mut rdr = csv::Reader::from_path(path)?;
    let mut rows = Vec::new();
    for rec in rdr.records() {
        let rec = rec?;
        let field = |i: usize| rec.get(i).unwrap_or_default();
        let bad =
            |what: &str| Error::Config(format!("{}: bad {what} in row {:?}", path.display(), rec));
        rows.push(ScoreRow {
            id: field(0).to_string(),
            defect_type: field(1).to_string(),
            anomalous: field(2) == "1",
            image_score: field(3).parse().map_err(|_| bad("image_score"))?,
            proper_step: field(4).parse().map_err(|_| bad("proper_step"))?,
            detected_step: match field(5) {
                "" => None,
                v => Some(v.parse().map_err(|_| bad("detected_step"))?),
            },
        });
    }
    Ok(rows)
}

/// Metrics from the artifacts of [`reconstruct_category`].
pub fn eval_category(run: &Run, data: &LoadedCategory) -> Result<MetricsReport> {
    let dir = run.category_dir(&data.name);
    let rows = read_scores(&dir.join("scores.csv"))?;
    if rows.len() != data.test.len() {
        return Err(Error::shape(format!(
            "{} scored images but {} test images",
            rows.len(),
            data.test.len()
        )));
    }
    let mut items = Vec::with_capacity(rows.len());
    for (row, t) in rows.iter().zip(&data.test) {
        if row.id != t.id {
            return Err(Error::Config(format!(
                "scores.csv row {} does not match test image {}",
                row.id, t.id
            )));
        }
        let map = read_map_raw(&dir.join("images").join(&t.id).join("map.amap"))?;
        items.push(EvalItem {
            score: row.image_score,
            anomalous: t.mask.is_some(),
            map,
            mask: t.mask.clone(),
        });
    }
    evaluate(&data.name, &items, &run.config.hash())
}

pub fn write_metrics(run: &Run, reports: &[MetricsReport]) -> Result<()> {
    write_text(
        &run.out.join("metrics.csv"),
        &MetricsReport::to_csv(reports),
    )?;
    let mut text: Vec<String> = reports.iter().map(MetricsReport::summary).collect();
    text.push(MetricsReport::average(reports).summary());
    write_text(&run.out.join("metrics.txt"), &(text.join("\n") + "\n"))
}

/// Input | reconstruction | map | ground truth, one file per test image.
pub fn report_category(run: &Run, data: &LoadedCategory) -> Result<usize> {
    let dir = run.category_dir(&data.name);
    // one color scale for the category so panels are comparable
    let mut maps = Vec::with_capacity(data.test.len());
    for t in &data.test {
        maps.push(read_map_raw(
            &dir.join("images").join(&t.id).join("map.amap"),
        )?);
    }
    let lo = maps
        .iter()
        .map(|m| m.min_max().0)
        .fold(f64::INFINITY, f64::min);
    let hi = maps
        .iter()
        .map(|m| m.min_max().1)
        .fold(f64::NEG_INFINITY, f64::max);
    for (t, map) in data.test.iter().zip(&maps) {
        let idir = dir.join("images").join(&t.id);
        let recon = crate::imageio::read_image(&idir.join("final.png"))?;
        let gt = t
            .mask
            .clone()
            .unwrap_or_else(|| Map2d::zeros(map.height(), map.width()));
        let gt_img = ImageTensor::from_fn(3, gt.height(), gt.width(), |_, y, x| {
            2.0 * gt.get(y, x) - 1.0
        });
        let panel = hstack(&[
            tensor_to_rgb(&t.image),
            tensor_to_rgb(&recon),
            heatmap(map, (lo, hi)),
            tensor_to_rgb(&gt_img),
        ])?;
        save_rgb(
            &panel,
            &dir.join("report")
                .join(format!("{}.png", t.id.replace('/', "_"))),
        )?;
    }
    Ok(data.test.len())
}

/// Rows of x | x_a | mask | |n| for `rows` training images.
pub fn synth_preview(run: &Run, train: &[ImageTensor], rows: usize) -> Result<PathBuf> {
    if train.is_empty() {
        return Err(Error::param("no images to preview"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(run.config.seed);
    let mut grid = Vec::with_capacity(rows);
    for i in 0..rows {
        let x = &train[i % train.len()];
        let pair = synthesize_anomaly(x, &mut rng, &run.config.train.synth)?;
        let gray = |m: &Map2d| {
            ImageTensor::from_fn(3, m.height(), m.width(), |_, y, xx| {
                2.0 * m.get(y, xx) - 1.0
            })
        };
        let n_abs = pair.n.channel_mean().map(|v| v.abs().min(1.0));
        grid.push(hstack(&[
            tensor_to_rgb(&pair.x),
            tensor_to_rgb(&pair.x_a),
            tensor_to_rgb(&gray(&pair.mask)),
            tensor_to_rgb(&gray(&n_abs)),
        ])?);
    }
    let path = run.out.join("synth_preview.png");
    save_rgb(&vstack(&grid)?, &path)?;
    Ok(path)
}

/// Write the configured toy dataset under `root`; returns the category dir.
pub fn make_toy(run: &Run, root: &Path) -> Result<PathBuf> {
    write_toy_dataset(&make_toy_dataset(&run.config.toy)?, root)
}

/// train, reconstruct and eval for every configured category.
pub fn run_all(run: &Run) -> Result<Vec<MetricsReport>> {
    run.echo_config()?;
    let layout = run.dataset()?;
    let mut reports = Vec::new();
    for c in run.categories(&layout)? {
        let data = run.load(&layout, &c)?;
        train_category(run, &data)?;
        reconstruct_category(run, &data)?;
        reports.push(eval_category(run, &data)?);
    }
    write_metrics(run, &reports)?;
    Ok(reports)
}
