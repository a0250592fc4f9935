//! End-to-end stages: annotated page to training record, dataset
//! directories, training runs, generation and evaluation.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::annotation::{build_enriched_xml, parse_page_annotation, PageAnnotation};
use crate::bbox::BBox;
use crate::caption::{request_captions, CaptionResult, CaptioningClient, RetryPolicy};
use crate::checkpoint::{load_checkpoint, save_checkpoint};
use crate::dataset::{
    build_record, read_records, write_manifest, ManifestEntry, RasterParams, RecordWriter, TrainingRecord,
    MANIFEST_FILE,
};
use crate::diffusion::{
    batch_indices, prepare_record, train_step, NoiseSchedule, OptimizerConfig, PreparedRecord,
    SamplerConfig, ScheduleConfig, TrainConfig, TrainState,
};
use crate::error::{Error, Result};
use crate::metrics::{clip_i, frechet_distance, FeatureExtractor, FeatureSet};
use crate::model::codec::{HashEmbedder, PoolCodec};
use crate::model::{Denoiser, ModelConfig};
use crate::order::{default_gap_tolerance, order_panels, OrderResult};
use crate::panelize::PageImage;
use crate::synth::{synth_page, SynthParams};

/// Every setting of a run. Unknown keys are rejected when parsed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PipelineConfig {
    /// Page height in pixels.
    pub page_height: usize,
    /// Page width in pixels.
    pub page_width: usize,
    pub k_max: usize,
    pub model: ModelConfig,
    pub schedule: ScheduleConfig,
    pub optimizer: OptimizerConfig,
    pub train: TrainConfig,
    pub sampler: SamplerConfig,
    pub raster: RasterConfig,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RasterConfig {
    pub coverage_threshold: f64,
}

impl Default for RasterConfig {
    fn default() -> Self {
        RasterConfig {
            coverage_threshold: crate::dataset::DEFAULT_COVERAGE_THRESHOLD,
        }
    }
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            page_height: 64,
            page_width: 48,
            k_max: 4,
            model: ModelConfig::default(),
            schedule: ScheduleConfig::default(),
            optimizer: OptimizerConfig::default(),
            train: TrainConfig::default(),
            sampler: SamplerConfig::default(),
            raster: RasterConfig::default(),
            seed: 0,
        }
    }
}

impl PipelineConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: PipelineConfig =
            serde_json::from_str(text).map_err(|e| Error::Config(format!("config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        if self.k_max == 0 {
            return Err(Error::Config("k_max must be positive".into()));
        }
        if self.model.k_max != self.k_max {
            return Err(Error::Config(format!(
                "K_max mismatch: pipeline {} vs model {}",
                self.k_max, self.model.k_max
            )));
        }
        let unit = PoolCodec::default().factor * self.model.patch_size;
        if self.page_height == 0 || self.page_width == 0 || !self.page_height.is_multiple_of(unit) || !self.page_width.is_multiple_of(unit) {
            return Err(Error::Config(format!(
                "page {}x{} must be a positive multiple of {unit}",
                self.page_height, self.page_width
            )));
        }
        if self.model.latent_channels != PoolCodec::default().channels {
            return Err(Error::Config("latent_channels must match the image codec (4)".into()));
        }
        if self.train.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.raster.coverage_threshold) {
            return Err(Error::Config("coverage_threshold must be in [0, 1)".into()));
        }
        NoiseSchedule::from_config(self.model.timesteps, &self.schedule)?;
        Ok(())
    }

    pub fn raster_params(&self) -> RasterParams {
        RasterParams {
            coverage_threshold: self.raster.coverage_threshold,
            ..RasterParams::default()
        }
    }

    pub fn codec(&self) -> PoolCodec {
        PoolCodec::default()
    }

    pub fn embedder(&self) -> HashEmbedder {
        HashEmbedder {
            dim: self.model.text_dim,
            max_tokens: self.model.max_text_tokens,
        }
    }

    pub fn schedule(&self) -> Result<NoiseSchedule> {
        NoiseSchedule::from_config(self.model.timesteps, &self.schedule)
    }
}

/// Everything derived from one annotated page.
#[derive(Debug, Clone)]
pub struct ProcessedPage {
    pub record: TrainingRecord,
    pub order: OrderResult,
    pub captions: CaptionResult,
}

/// Orders panels, builds the enriched XML, requests captions and builds the
/// padded record. A stored panel order in the annotation takes precedence
/// over the estimated one.
pub fn process_page(
    image: &PageImage,
    annotation: &PageAnnotation,
    bubble_boxes: &[BBox],
    client: &dyn CaptioningClient,
    k_max: usize,
    raster: RasterParams,
) -> Result<ProcessedPage> {
    let boxes = annotation.panel_boxes();
    let size = (annotation.width, annotation.height);
    let estimated = order_panels(&boxes, size, default_gap_tolerance(annotation.height))?;
    let order = match annotation.stored_order() {
        Some(permutation) => OrderResult {
            permutation,
            cut_tree: estimated.cut_tree,
        },
        None => estimated,
    };
    if boxes.len() > k_max {
        return Err(Error::Data(format!(
            "page {} has {} panels, more than K_max={k_max}",
            annotation.page_id,
            boxes.len()
        )));
    }
    let enriched = build_enriched_xml(annotation, &order.permutation)?;
    let captions = request_captions(client, image.to_png_bytes()?, &enriched, RetryPolicy::default())?;
    let record = build_record(image, annotation, &order, &captions, bubble_boxes, k_max, raster)?;
    Ok(ProcessedPage {
        record,
        order,
        captions,
    })
}

/// Summary of a dataset build.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct BuildSummary {
    pub records: usize,
    /// Page ids skipped for having more than `k_max` panels.
    pub discarded: Vec<String>,
    pub warnings: Vec<String>,
}

fn sorted_files(dir: &Path, ext: &str) -> Result<Vec<PathBuf>> {
    let mut files: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| Error::Data(format!("cannot read {}: {e}", dir.display())))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == ext))
        .collect();
    files.sort();
    Ok(files)
}

/// Builds records from `annotations/*.xml` plus `images/<page_id>.png`.
/// Bubble boxes come from `bubbles/<page_id>.json` when a bubble directory is
/// given and the file exists, else from the annotation's text boxes.
pub fn build_dataset_dir(
    annotations: &Path,
    images: &Path,
    bubbles: Option<&Path>,
    out: &Path,
    client: &dyn CaptioningClient,
    k_max: usize,
    raster: RasterParams,
) -> Result<BuildSummary> {
    let mut summary = BuildSummary::default();
    let mut writer = RecordWriter::create(out)?;
    let mut manifest = Vec::new();
    for xml_path in sorted_files(annotations, "xml")? {
        let text = fs::read_to_string(&xml_path)?;
        let parsed = parse_page_annotation(&text)?;
        for w in parsed.warnings {
            summary.warnings.push(format!("{}: {w}", xml_path.display()));
        }
        let ann = parsed.annotation;
        if ann.panels.len() > k_max {
            summary.discarded.push(ann.page_id.clone());
            continue;
        }
        if ann.panels.is_empty() {
            summary.warnings.push(format!("{}: no panels, skipped", ann.page_id));
            continue;
        }
        let image_path = images.join(format!("{}.png", ann.page_id));
        let image = PageImage::load_png(&image_path)?;
        let bubble_boxes: Vec<BBox> = match bubbles.map(|d| d.join(format!("{}.json", ann.page_id))) {
            Some(p) if p.exists() => serde_json::from_str(&fs::read_to_string(&p)?)?,
            _ => ann.texts.iter().map(|t| t.bbox).collect(),
        };
        let page = process_page(&image, &ann, &bubble_boxes, client, k_max, raster)?;
        writer.write(&page.record)?;
        manifest.push(ManifestEntry {
            page_id: ann.page_id.clone(),
            image_path: image_path.to_string_lossy().into_owned(),
            xml_path: xml_path.to_string_lossy().into_owned(),
            captions: page.captions.panel_captions,
            story: page.captions.story,
            bubble_boxes,
            order: page.order.permutation,
        });
    }
    summary.records = writer.finish()?;
    write_manifest(&out.join(MANIFEST_FILE), &manifest)?;
    Ok(summary)
}

/// Writes `n` synthetic pages as `annotations/`, `images/` and `bubbles/`
/// under `dir`.
pub fn write_synthetic_corpus(dir: &Path, n: usize, seed: u64, params: SynthParams) -> Result<()> {
    let (ann_dir, img_dir, bub_dir) = (dir.join("annotations"), dir.join("images"), dir.join("bubbles"));
    for d in [&ann_dir, &img_dir, &bub_dir] {
        fs::create_dir_all(d)?;
    }
    for i in 0..n {
        let page = synth_page(seed, i as u64, params);
        let id = &page.annotation.page_id;
        fs::write(
            ann_dir.join(format!("{id}.xml")),
            crate::annotation::serialize_page_annotation(&page.annotation)?,
        )?;
        page.image.save_png(&img_dir.join(format!("{id}.png")))?;
        fs::write(bub_dir.join(format!("{id}.json")), serde_json::to_string(&page.bubble_boxes)?)?;
    }
    Ok(())
}

/// Records of synthetic pages, built through [`process_page`].
pub fn synthetic_records(
    n: usize,
    seed: u64,
    params: SynthParams,
    client: &dyn CaptioningClient,
    raster: RasterParams,
) -> Result<Vec<TrainingRecord>> {
    (0..n)
        .map(|i| {
            let page = synth_page(seed, i as u64, params);
            process_page(&page.image, &page.annotation, &page.bubble_boxes, client, params.k_max, raster)
                .map(|p| p.record)
        })
        .collect()
}

/// Loss after each step.
#[derive(Debug, Clone, Default, Serialize)]
pub struct TrainLog {
    pub losses: Vec<f64>,
}

impl TrainLog {
    /// Mean of the `window` losses ending at step `end` (exclusive).
    pub fn smoothed(&self, end: usize, window: usize) -> f64 {
        let end = end.min(self.losses.len());
        let start = end.saturating_sub(window);
        let s = &self.losses[start..end];
        s.iter().sum::<f64>() / s.len().max(1) as f64
    }
}

/// Runs `steps` training steps from `state` on prepared records.
pub fn train_loop(
    state: &mut TrainState,
    data: &[PreparedRecord],
    cfg: &PipelineConfig,
    steps: u64,
    mut on_step: impl FnMut(u64, f64),
) -> Result<TrainLog> {
    if data.is_empty() {
        return Err(Error::Data("no training records".into()));
    }
    let sched = cfg.schedule()?;
    let mut log = TrainLog::default();
    for _ in 0..steps {
        let idx = batch_indices(state.seed, state.step, cfg.train.batch_size, data.len());
        let batch: Vec<&PreparedRecord> = idx.iter().map(|&i| &data[i]).collect();
        let loss = train_step(state, &batch, &sched, &cfg.optimizer)?;
        log.losses.push(loss);
        on_step(state.step, loss);
    }
    Ok(log)
}

/// Loads records from a dataset directory and checks them against the config.
pub fn prepare_dataset(dir: &Path, cfg: &PipelineConfig) -> Result<Vec<PreparedRecord>> {
    let records = read_records(dir)?;
    if records.is_empty() {
        return Err(Error::Data(format!("no records in {}", dir.display())));
    }
    let (codec, embedder) = (cfg.codec(), cfg.embedder());
    records
        .iter()
        .map(|r| {
            if r.k_max() != cfg.k_max {
                return Err(Error::Config(format!(
                    "K_max mismatch: record {} has {} panels, config says {}",
                    r.page_id,
                    r.k_max(),
                    cfg.k_max
                )));
            }
            if (r.height(), r.width()) != (cfg.page_height, cfg.page_width) {
                return Err(Error::Config(format!(
                    "record {} is {}x{}, config page size is {}x{}",
                    r.page_id,
                    r.height(),
                    r.width(),
                    cfg.page_height,
                    cfg.page_width
                )));
            }
            prepare_record(r, &codec, &embedder)
        })
        .collect()
}

/// Trains from scratch (or resumes from `resume`) and saves to `out`.
pub fn run_train(
    cfg: &PipelineConfig,
    data_dir: &Path,
    out: &Path,
    resume: Option<&Path>,
    on_step: impl FnMut(u64, f64),
) -> Result<TrainLog> {
    cfg.validate()?;
    let data = prepare_dataset(data_dir, cfg)?;
    let mut state = match resume {
        Some(dir) => {
            let (ckpt_cfg, state) = load_checkpoint(dir)?;
            if ckpt_cfg.model != cfg.model {
                return Err(Error::Config("checkpoint model config differs from the run config".into()));
            }
            state
        }
        None => TrainState::new(Denoiser::new(cfg.model.clone(), cfg.seed)?, cfg.seed),
    };
    let remaining = cfg.train.steps.saturating_sub(state.step);
    let log = train_loop(&mut state, &data, cfg, remaining, on_step)?;
    save_checkpoint(out, cfg, &state)?;
    Ok(log)
}

/// Evaluation report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub fid: f64,
    pub clip_i: f64,
    pub n: usize,
    pub extractor_id: String,
}

fn load_dir_features(dir: &Path, extractor: &dyn FeatureExtractor) -> Result<FeatureSet> {
    let files = sorted_files(dir, "png")?;
    if files.is_empty() {
        return Err(Error::Data(format!("no PNG images in {}", dir.display())));
    }
    let images = files.iter().map(|p| PageImage::load_png(p)).collect::<Result<Vec<_>>>()?;
    extractor.extract(&images)
}

/// Fréchet distance and CLIP-I between two image directories; images are
/// paired by sorted file name.
pub fn run_eval(gen_dir: &Path, ref_dir: &Path, extractor: &dyn FeatureExtractor) -> Result<EvalReport> {
    let a = load_dir_features(gen_dir, extractor)?;
    let b = load_dir_features(ref_dir, extractor)?;
    let fid = frechet_distance(&a, &b)?;
    let ci = clip_i(&a, &b)?;
    Ok(EvalReport {
        fid,
        clip_i: ci,
        n: a.len(),
        extractor_id: a.extractor_id.clone(),
    })
}
