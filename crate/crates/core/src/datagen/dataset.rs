//! Paired-record generation, on-disk layout and validation.
//!
//! Layout of a dataset directory:
//!
//! ```text
//! manifest.json
//! records/<id>/src.png
//! records/<id>/tgt.png
//! records/<id>/canny.png      (0.2 → 51, 0.8 → 204)
//! records/<id>/canny.json     (structure-map sidecar)
//! records/<id>/meta.json
//! ```

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use rand::Rng as _;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::filter::{filter_pair, FilterReason, DEFAULT_MIN_CONFIDENCE};
use super::glyphs::GlyphAlphabet;
use super::ocr::ocr;
use super::prompts::{color_name, tokenize, PromptTemplate};
use super::scene::{render_scene, synthesize_view, Pose, Rgb, SceneSpec, ShapeKind, MIN_GLYPH_CONTRAST};
use crate::error::{Error, Result};
use crate::image::ImageGrid;
use crate::rng::{self, Rng};
use crate::structure::{structure_map, CannyKind, CannyMap, CannyParams, CannySidecar};

pub const SCHEMA_VERSION: u32 = 1;
pub const MIN_BACKGROUND_CONTRAST: f64 = 0.2;
pub const DEFAULT_VIEW_FAILURE_RATE: f64 = 0.15;
const ATTEMPT_BATCH: usize = 32;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SourceDataset {
    Generic,
    Texting,
}

impl SourceDataset {
    pub fn name(self) -> &'static str {
        match self {
            SourceDataset::Generic => "generic",
            SourceDataset::Texting => "texting",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatagenParams {
    pub image_size: usize,
    pub canny: CannyParams,
    pub min_confidence: f64,
    /// Probability that the novel-view stand-in corrupts one glyph.
    pub view_failure_rate: f64,
}

impl Default for DatagenParams {
    fn default() -> Self {
        DatagenParams {
            image_size: 64,
            canny: CannyParams::default(),
            min_confidence: DEFAULT_MIN_CONFIDENCE,
            view_failure_rate: DEFAULT_VIEW_FAILURE_RATE,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RecordMeta {
    pub id: String,
    pub prompt: String,
    pub prompt_template: usize,
    pub token_ids: Vec<usize>,
    pub text_content: String,
    pub spec: SceneSpec,
    pub source_pose: Pose,
    pub target_pose: Pose,
    pub canny_params: CannyParams,
    pub seed: u64,
    pub source_dataset: SourceDataset,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetRecord {
    pub meta: RecordMeta,
    pub src: ImageGrid,
    pub tgt: ImageGrid,
    pub canny: CannyMap,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PipelineStats {
    pub attempts: usize,
    pub accepted: usize,
    pub acceptance_rate: f64,
    pub rejections: BTreeMap<String, usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub schema_version: u32,
    pub kind: SourceDataset,
    pub count: usize,
    pub seed: u64,
    pub params: DatagenParams,
    pub stats: PipelineStats,
    pub record_ids: Vec<String>,
}

#[derive(Clone, Debug)]
pub struct Dataset {
    pub manifest: Manifest,
    pub records: Vec<DatasetRecord>,
}

fn random_color(rng: &mut Rng) -> Rgb {
    Rgb([rng.random(), rng.random(), rng.random()])
}

fn sample_colors(rng: &mut Rng) -> (Rgb, Rgb, Rgb) {
    loop {
        let fill = random_color(rng);
        let background = random_color(rng);
        if (fill.luma() - background.luma()).abs() < MIN_BACKGROUND_CONTRAST {
            continue;
        }
        for _ in 0..32 {
            let glyph = random_color(rng);
            if (glyph.luma() - fill.luma()).abs() >= MIN_GLYPH_CONTRAST {
                return (background, fill, glyph);
            }
        }
    }
}

fn sample_pose(rng: &mut Rng) -> Pose {
    Pose::new(
        0.05 * rng.random_range(-4i32..=4) as f64,
        rng.random_range(-20i32..=20) as f64,
    )
}

fn sample_text(rng: &mut Rng, alphabet: &GlyphAlphabet) -> String {
    let chars: Vec<char> = alphabet.chars().collect();
    let len = rng.random_range(1..=3);
    (0..len).map(|_| chars[rng.random_range(0..chars.len())]).collect()
}

/// Scene spec for one attempt; texting specs are retried until the text fits.
pub fn sample_spec(rng: &mut Rng, kind: SourceDataset, size: usize, alphabet: &GlyphAlphabet) -> SceneSpec {
    loop {
        let (background, fill, glyph_color) = sample_colors(rng);
        let shape = ShapeKind::ALL[rng.random_range(0..3)];
        let mut spec = SceneSpec {
            shape,
            half_extent: [rng.random_range(0.20..0.36), rng.random_range(0.15..0.30)],
            fill,
            background,
            glyph_color,
            text: String::new(),
            text_anchor: [0.0, 0.0],
            glyph_scale: 2,
            pose: sample_pose(rng),
        };
        if kind == SourceDataset::Generic {
            return spec;
        }
        spec.text = sample_text(rng, alphabet);
        spec.half_extent = [rng.random_range(0.28..0.40), rng.random_range(0.20..0.32)];
        spec.text_anchor = match shape {
            ShapeKind::Triangle => [rng.random_range(-0.05..0.05), rng.random_range(0.25..0.45)],
            _ => [rng.random_range(-0.1..0.1), rng.random_range(-0.1..0.1)],
        };
        // every delta must keep the text inside the image
        let fits = PromptTemplate::ALL
            .iter()
            .all(|t| synthesize_view(&spec, t.delta(), size, alphabet).is_ok());
        if fits {
            return spec;
        }
    }
}

fn replace_one_glyph(text: &str, rng: &mut Rng, alphabet: &GlyphAlphabet) -> String {
    let mut chars: Vec<char> = text.chars().collect();
    let pos = rng.random_range(0..chars.len());
    let options: Vec<char> = alphabet.chars().filter(|&c| c != chars[pos]).collect();
    chars[pos] = options[rng.random_range(0..options.len())];
    chars.into_iter().collect()
}

enum Attempt {
    Accepted(Box<DatasetRecord>),
    Rejected(FilterReason),
}

fn attempt(
    kind: SourceDataset,
    seed: u64,
    index: usize,
    params: &DatagenParams,
    alphabet: &GlyphAlphabet,
) -> Result<Attempt> {
    let attempt_seed = rng::derive_seed(seed, index as u64);
    let mut rng = rng::seeded(attempt_seed);
    let size = params.image_size;
    let spec = sample_spec(&mut rng, kind, size, alphabet);
    let template = PromptTemplate::ALL[rng.random_range(0..PromptTemplate::ALL.len())];
    let src = render_scene(&spec, size, alphabet)?;

    // novel-view stand-in; occasionally hallucinates a glyph
    let mut view_spec = spec.clone();
    if kind == SourceDataset::Texting && rng.random::<f64>() < params.view_failure_rate {
        view_spec.text = replace_one_glyph(&spec.text, &mut rng, alphabet);
    }
    let tgt = synthesize_view(&view_spec, template.delta(), size, alphabet)?;

    if kind == SourceDataset::Texting {
        let decision = filter_pair(&src, &tgt, alphabet, params.min_confidence);
        if !decision.accepted() {
            return Ok(Attempt::Rejected(decision.reason));
        }
        // both views agree but on a misread string; the label would be wrong
        if decision.src.text != spec.text {
            return Ok(Attempt::Rejected(FilterReason::Mismatch));
        }
    }
    let canny = structure_map(&tgt, &params.canny)?;
    let prompt = template.render(color_name(spec.fill), spec.shape);
    let token_ids = tokenize(&prompt)?;
    let meta = RecordMeta {
        id: String::new(),
        prompt,
        prompt_template: template.id(),
        token_ids,
        text_content: spec.text.clone(),
        source_pose: spec.pose,
        target_pose: spec.pose.compose(template.delta()),
        spec,
        canny_params: params.canny,
        seed: attempt_seed,
        source_dataset: kind,
    };
    Ok(Attempt::Accepted(Box::new(DatasetRecord { meta, src, tgt, canny })))
}

/// Runs the sample → render → novel view → (OCR filter) loop until `n`
/// records are accepted. Attempts are evaluated in parallel batches but
/// committed in index order, so the result depends only on `seed`.
pub fn generate(
    kind: SourceDataset,
    n: usize,
    seed: u64,
    params: &DatagenParams,
    alphabet: &GlyphAlphabet,
) -> Result<(Vec<DatasetRecord>, PipelineStats)> {
    if n == 0 {
        return Err(Error::config("n", "dataset size must be at least 1"));
    }
    params.canny.validate()?;
    let mut records = Vec::with_capacity(n);
    let mut stats = PipelineStats::default();
    let mut next = 0usize;
    while records.len() < n {
        let batch: Vec<Result<Attempt>> = (next..next + ATTEMPT_BATCH)
            .into_par_iter()
            .map(|i| attempt(kind, seed, i, params, alphabet))
            .collect();
        next += ATTEMPT_BATCH;
        for outcome in batch {
            if records.len() >= n {
                break;
            }
            stats.attempts += 1;
            match outcome? {
                Attempt::Accepted(mut record) => {
                    record.meta.id = format!("{:06}", records.len());
                    records.push(*record);
                }
                Attempt::Rejected(reason) => {
                    let key = serde_json::to_value(reason)?.as_str().unwrap_or("unknown").to_string();
                    *stats.rejections.entry(key).or_default() += 1;
                }
            }
            if stats.attempts >= 10 * n && (records.len() as f64) < 0.01 * stats.attempts as f64 {
                return Err(Error::PipelineHealth {
                    accepted: records.len(),
                    attempts: stats.attempts,
                });
            }
        }
    }
    stats.accepted = records.len();
    stats.acceptance_rate = stats.accepted as f64 / stats.attempts as f64;
    Ok((records, stats))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(serde_json::from_str(&text)?)
}

pub fn record_dir(root: &Path, id: &str) -> PathBuf {
    root.join("records").join(id)
}

/// Writes records and manifest under `out`.
pub fn write_dataset(
    out: &Path,
    kind: SourceDataset,
    seed: u64,
    params: &DatagenParams,
    records: &[DatasetRecord],
    stats: &PipelineStats,
) -> Result<Manifest> {
    for record in records {
        let dir = record_dir(out, &record.meta.id);
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        record.src.save_png(&dir.join("src.png"))?;
        record.tgt.save_png(&dir.join("tgt.png"))?;
        record.canny.save_png(&dir.join("canny.png"))?;
        write_json(
            &dir.join("canny.json"),
            &CannySidecar::new(record.meta.canny_params, CannyKind::GroundTruth),
        )?;
        write_json(&dir.join("meta.json"), &record.meta)?;
    }
    let manifest = Manifest {
        schema_version: SCHEMA_VERSION,
        kind,
        count: records.len(),
        seed,
        params: params.clone(),
        stats: stats.clone(),
        record_ids: records.iter().map(|r| r.meta.id.clone()).collect(),
    };
    write_json(&out.join("manifest.json"), &manifest)?;
    Ok(manifest)
}

/// Generates and writes a texting dataset (the OCR-filtered pipeline).
pub fn build_texting_dataset(n: usize, seed: u64, params: &DatagenParams, out: &Path) -> Result<Manifest> {
    let alphabet = GlyphAlphabet::standard();
    let (records, stats) = generate(SourceDataset::Texting, n, seed, params, &alphabet)?;
    write_dataset(out, SourceDataset::Texting, seed, params, &records, &stats)
}

/// Generates and writes a generic (text-free) dataset.
pub fn build_generic_dataset(n: usize, seed: u64, params: &DatagenParams, out: &Path) -> Result<Manifest> {
    let alphabet = GlyphAlphabet::standard();
    let (records, stats) = generate(SourceDataset::Generic, n, seed, params, &alphabet)?;
    write_dataset(out, SourceDataset::Generic, seed, params, &records, &stats)
}

impl Dataset {
    pub fn from_records(
        kind: SourceDataset,
        seed: u64,
        params: DatagenParams,
        records: Vec<DatasetRecord>,
        stats: PipelineStats,
    ) -> Self {
        let manifest = Manifest {
            schema_version: SCHEMA_VERSION,
            kind,
            count: records.len(),
            seed,
            params,
            stats,
            record_ids: records.iter().map(|r| r.meta.id.clone()).collect(),
        };
        Dataset { manifest, records }
    }

    pub fn load(root: &Path) -> Result<Self> {
        let manifest: Manifest = read_json(&root.join("manifest.json"))?;
        if manifest.schema_version != SCHEMA_VERSION {
            return Err(Error::Validation(format!(
                "{}: schema version {} (expected {SCHEMA_VERSION})",
                root.display(),
                manifest.schema_version
            )));
        }
        let records = manifest
            .record_ids
            .par_iter()
            .map(|id| {
                let dir = record_dir(root, id);
                let meta: RecordMeta = read_json(&dir.join("meta.json"))?;
                Ok(DatasetRecord {
                    src: ImageGrid::load_png(&dir.join("src.png"))?,
                    tgt: ImageGrid::load_png(&dir.join("tgt.png"))?,
                    canny: CannyMap::load_png(&dir.join("canny.png"), CannyKind::GroundTruth)?,
                    meta,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        if records.len() != manifest.count {
            return Err(Error::Validation(format!(
                "manifest lists {} records, found {}",
                manifest.count,
                records.len()
            )));
        }
        Ok(Dataset { manifest, records })
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ValidationReport {
    pub records: usize,
    pub kind: SourceDataset,
}

/// Checks every record invariant: the stored structure map equals the one
/// recomputed from `tgt` under the recorded params; texting records read
/// back their text in both views; generic records carry no text.
pub fn validate_records(records: &[DatasetRecord], alphabet: &GlyphAlphabet) -> Result<()> {
    records.par_iter().try_for_each(|record| {
        let meta = &record.meta;
        let recomputed = structure_map(&record.tgt, &meta.canny_params)?;
        if recomputed.values() != record.canny.values() {
            return Err(Error::Validation(format!(
                "record {}: stored structure map differs from recomputation",
                meta.id
            )));
        }
        if meta.token_ids != tokenize(&meta.prompt)? {
            return Err(Error::Validation(format!(
                "record {}: token ids do not match prompt",
                meta.id
            )));
        }
        match meta.source_dataset {
            SourceDataset::Generic => {
                if !meta.text_content.is_empty() {
                    return Err(Error::Validation(format!("generic record {} carries text", meta.id)));
                }
            }
            SourceDataset::Texting => {
                let src = ocr(&record.src, alphabet, None).text;
                let tgt = ocr(&record.tgt, alphabet, None).text;
                if meta.text_content.is_empty() || src != meta.text_content || tgt != meta.text_content {
                    return Err(Error::Validation(format!(
                        "texting record {}: OCR reads {src:?} / {tgt:?}, expected {:?}",
                        meta.id, meta.text_content
                    )));
                }
            }
        }
        Ok(())
    })
}

pub fn validate_dataset(root: &Path) -> Result<ValidationReport> {
    let dataset = Dataset::load(root)?;
    if let Some(r) = dataset
        .records
        .iter()
        .find(|r| r.meta.source_dataset != dataset.manifest.kind)
    {
        return Err(Error::Validation(format!(
            "record {} tagged {:?} in a {:?} dataset",
            r.meta.id, r.meta.source_dataset, dataset.manifest.kind
        )));
    }
    validate_records(&dataset.records, &GlyphAlphabet::standard())?;
    Ok(ValidationReport {
        records: dataset.len(),
        kind: dataset.manifest.kind,
    })
}
