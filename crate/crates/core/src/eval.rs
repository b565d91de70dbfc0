//! Metrics, evaluation runs and report files.
//!
//! PSNR and SSIM on structure maps are computed on the remapped 3-channel
//! grids (levels 0.2/0.8) with peak 1.0. SSIM averages local SSIM over
//! non-overlapping 8×8 windows in every channel, using population variances.
//! Edge-F1 matches edge pixels within a Chebyshev radius. The subject eval
//! scores SC/PA/PQ with a pluggable vision-language client and reports
//! `final_quality = min(PA, PQ)` next to the raw scores.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Duration;

use base64::Engine as _;
use ndarray::Array2;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use sha2::{Digest, Sha256};

use crate::backbone::BackboneWeights;
use crate::blob::hex_digest;
use crate::datagen::{neutral_tokens, ocr, DatasetRecord, GlyphAlphabet};
use crate::error::{Error, Result};
use crate::flow::SamplerConfig;
use crate::image::{hstack, ImageGrid};
use crate::lora::AdapterSet;
use crate::pipeline::{infer, infer_stage1};
use crate::structure::{binarize_prediction, structure_map, CannyKind, CannyMap, CannyParams, BINARIZE_THRESHOLD};

pub const PSNR_CAP_DB: f64 = 100.0;
pub const SSIM_WINDOW: usize = 8;
pub const SSIM_C1: f64 = 0.01 * 0.01;
pub const SSIM_C2: f64 = 0.03 * 0.03;
pub const REPORT_SCHEMA_VERSION: u32 = 1;
pub const VLM_SCORE_MAX: f64 = 10.0;
pub const VLM_TOKEN_ENV: &str = "STRUCTGEN_VLM_TOKEN";

fn check_same(a: &ImageGrid, b: &ImageGrid) -> Result<()> {
    if !a.same_shape(b) {
        return Err(Error::shape(format!("{:?} vs {:?}", a.dim(), b.dim())));
    }
    Ok(())
}

/// `10·log10(peak²/MSE)`, capped at [`PSNR_CAP_DB`] (returned for identical
/// images).
pub fn psnr(a: &ImageGrid, b: &ImageGrid, peak: f64) -> Result<f64> {
    check_same(a, b)?;
    let n = a.as_slice().len();
    if n == 0 {
        return Err(Error::shape("empty image"));
    }
    let mse = a
        .as_slice()
        .iter()
        .zip(b.as_slice())
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        / n as f64;
    if mse == 0.0 {
        return Ok(PSNR_CAP_DB);
    }
    Ok((10.0 * (peak * peak / mse).log10()).min(PSNR_CAP_DB))
}

pub fn ssim(a: &ImageGrid, b: &ImageGrid) -> Result<f64> {
    ssim_with_window(a, b, SSIM_WINDOW)
}

/// Mean local SSIM over non-overlapping `window`×`window` tiles of every
/// channel. Trailing rows/columns that do not fill a tile are skipped.
pub fn ssim_with_window(a: &ImageGrid, b: &ImageGrid, window: usize) -> Result<f64> {
    check_same(a, b)?;
    let (h, w, c) = a.dim();
    if window == 0 || h < window || w < window {
        return Err(Error::shape(format!(
            "{h}x{w} image is smaller than the {window}px window"
        )));
    }
    let n = (window * window) as f64;
    let mut total = 0.0;
    let mut count = 0usize;
    for ch in 0..c {
        for ty in 0..h / window {
            for tx in 0..w / window {
                let (mut sa, mut sb, mut saa, mut sbb, mut sab) = (0.0, 0.0, 0.0, 0.0, 0.0);
                for y in ty * window..(ty + 1) * window {
                    for x in tx * window..(tx + 1) * window {
                        let (p, q) = (a.get(y, x, ch), b.get(y, x, ch));
                        sa += p;
                        sb += q;
                        saa += p * p;
                        sbb += q * q;
                        sab += p * q;
                    }
                }
                let (ma, mb) = (sa / n, sb / n);
                let va = saa / n - ma * ma;
                let vb = sbb / n - mb * mb;
                let cov = sab / n - ma * mb;
                total += ((2.0 * ma * mb + SSIM_C1) * (2.0 * cov + SSIM_C2))
                    / ((ma * ma + mb * mb + SSIM_C1) * (va + vb + SSIM_C2));
                count += 1;
            }
        }
    }
    Ok(total / count as f64)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EdgeScores {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

/// Counts of `true` cells in every (2·tol+1)² Chebyshev neighborhood.
fn neighborhood_hits(mask: &Array2<bool>, tol: usize) -> Array2<bool> {
    let (h, w) = mask.dim();
    let mut integral = Array2::<u32>::zeros((h + 1, w + 1));
    for y in 0..h {
        for x in 0..w {
            integral[[y + 1, x + 1]] =
                u32::from(mask[[y, x]]) + integral[[y, x + 1]] + integral[[y + 1, x]] - integral[[y, x]];
        }
    }
    Array2::from_shape_fn((h, w), |(y, x)| {
        let (y0, x0) = (y.saturating_sub(tol), x.saturating_sub(tol));
        let (y1, x1) = ((y + tol + 1).min(h), (x + tol + 1).min(w));
        integral[[y1, x1]] + integral[[y0, x0]] - integral[[y0, x1]] - integral[[y1, x0]] > 0
    })
}

/// Precision, recall and F1 of predicted edges against ground truth with a
/// Chebyshev matching radius. Two empty maps score (1, 1, 1); an empty side
/// facing a non-empty one scores 0 on that side's ratio.
pub fn edge_f1(pred: &CannyMap, gt: &CannyMap, tolerance_px: usize) -> Result<EdgeScores> {
    if pred.kind() == CannyKind::Predicted {
        return Err(Error::Contract("edge_f1 needs a binarized prediction".into()));
    }
    if gt.kind() != CannyKind::GroundTruth {
        return Err(Error::Contract("edge_f1 reference must be a ground-truth map".into()));
    }
    if pred.height() != gt.height() || pred.width() != gt.width() {
        return Err(Error::shape("edge maps differ in size"));
    }
    let (p, g) = (pred.edges(), gt.edges());
    let np = p.iter().filter(|&&b| b).count();
    let ng = g.iter().filter(|&&b| b).count();
    if np == 0 && ng == 0 {
        return Ok(EdgeScores {
            precision: 1.0,
            recall: 1.0,
            f1: 1.0,
        });
    }
    let near_g = neighborhood_hits(&g, tolerance_px);
    let near_p = neighborhood_hits(&p, tolerance_px);
    let matched_p = p.iter().zip(near_g.iter()).filter(|(&e, &n)| e && n).count();
    let matched_g = g.iter().zip(near_p.iter()).filter(|(&e, &n)| e && n).count();
    let precision = if np == 0 { 0.0 } else { matched_p as f64 / np as f64 };
    let recall = if ng == 0 { 0.0 } else { matched_g as f64 / ng as f64 };
    let f1 = if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    };
    Ok(EdgeScores { precision, recall, f1 })
}

/// Fraction of images whose OCR reading equals the truth exactly.
pub fn ocr_accuracy(samples: &[(ImageGrid, String)], alphabet: &GlyphAlphabet) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::Domain("OCR accuracy of an empty set".into()));
    }
    let correct = samples
        .par_iter()
        .filter(|(img, truth)| ocr(img, alphabet, None).text == *truth)
        .count();
    Ok(correct as f64 / samples.len() as f64)
}

/// Rubric sent to the scoring model together with both images.
pub const VLM_RUBRIC: &str = "You are given a source image and a generated image. Rate the generated image \
from 0 to 10 on three criteria. SC (subject consistency): is the subject of the source image preserved, \
including its shape, colors and any text? PA (prompt adherence): does the generated image follow the \
instruction? PQ (perceptual quality): is the image clean and free of artifacts? \
Reply with JSON only: {\"SC\": <number>, \"PA\": <number>, \"PQ\": <number>}.";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VlmRequest {
    pub instruction: String,
    pub src_png: Vec<u8>,
    pub generated_png: Vec<u8>,
}

impl VlmRequest {
    pub fn new(src: &ImageGrid, generated: &ImageGrid, instruction: &str) -> Result<Self> {
        Ok(VlmRequest {
            instruction: instruction.to_string(),
            src_png: encode_png(src)?,
            generated_png: encode_png(generated)?,
        })
    }
}

pub fn encode_png(img: &ImageGrid) -> Result<Vec<u8>> {
    use image::ImageEncoder as _;
    let (h, w, c) = img.dim();
    if c != 3 {
        return Err(Error::shape("only 3-channel images are sent for scoring"));
    }
    let mut out = Vec::new();
    image::codecs::png::PngEncoder::new(&mut out)
        .write_image(&img.to_bytes(), w as u32, h as u32, image::ExtendedColorType::Rgb8)
        .map_err(|source| Error::Image {
            path: PathBuf::from("<memory>"),
            source,
        })?;
    Ok(out)
}

/// Anything that turns a scoring request into the model's raw reply text.
pub trait VlmClient: Sync {
    fn name(&self) -> &str;
    fn complete(&self, request: &VlmRequest) -> Result<String>;
}

/// Offline client: scores are a pure function of the request bytes.
#[derive(Clone, Copy, Debug, Default)]
pub struct MockVlm;

impl VlmClient for MockVlm {
    fn name(&self) -> &str {
        "mock"
    }

    fn complete(&self, request: &VlmRequest) -> Result<String> {
        let mut h = Sha256::new();
        h.update(request.instruction.as_bytes());
        h.update((request.src_png.len() as u64).to_le_bytes());
        h.update(&request.src_png);
        h.update(&request.generated_png);
        let digest = h.finalize();
        // half-point steps in [0, 10]
        let score = |i: usize| f64::from(u16::from_le_bytes([digest[2 * i], digest[2 * i + 1]]) % 21) / 2.0;
        Ok(json!({"SC": score(0), "PA": score(1), "PQ": score(2)}).to_string())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HttpVlmConfig {
    pub endpoint: String,
    pub model: String,
    pub token_env: String,
    pub timeout_s: f64,
}

impl Default for HttpVlmConfig {
    fn default() -> Self {
        HttpVlmConfig {
            endpoint: String::new(),
            model: String::new(),
            token_env: VLM_TOKEN_ENV.into(),
            timeout_s: 60.0,
        }
    }
}

/// JSON-over-HTTP client.
///
/// Request body:
/// `{"model": str, "rubric": str, "instruction": str, "images": {"source": b64 PNG, "generated": b64 PNG}}`.
/// The reply is either the score object itself or `{"content": "<text containing the score object>"}`.
pub struct HttpVlm {
    config: HttpVlmConfig,
    agent: ureq::Agent,
}

impl HttpVlm {
    pub fn new(config: HttpVlmConfig) -> Result<Self> {
        if config.endpoint.is_empty() {
            return Err(Error::config("vlm.endpoint", "required for the HTTP client"));
        }
        if !(config.timeout_s.is_finite() && config.timeout_s > 0.0) {
            return Err(Error::config("vlm.timeout_s", "must be positive"));
        }
        let agent = ureq::Agent::config_builder()
            .timeout_global(Some(Duration::from_secs_f64(config.timeout_s)))
            .build()
            .into();
        Ok(HttpVlm { config, agent })
    }
}

impl VlmClient for HttpVlm {
    fn name(&self) -> &str {
        "http"
    }

    fn complete(&self, request: &VlmRequest) -> Result<String> {
        let token = std::env::var(&self.config.token_env)
            .map_err(|_| Error::config("vlm.token_env", format!("{} is not set", self.config.token_env)))?;
        let b64 = base64::engine::general_purpose::STANDARD;
        let body = json!({
            "model": self.config.model,
            "rubric": VLM_RUBRIC,
            "instruction": request.instruction,
            "images": {
                "source": b64.encode(&request.src_png),
                "generated": b64.encode(&request.generated_png),
            },
        });
        let network = |e: ureq::Error| Error::Domain(format!("VLM request failed: {e}"));
        let mut resp = self
            .agent
            .post(&self.config.endpoint)
            .header("Authorization", &format!("Bearer {token}"))
            .send_json(&body)
            .map_err(network)?;
        let text = resp.body_mut().read_to_string().map_err(network)?;
        match serde_json::from_str::<Value>(&text) {
            Ok(Value::Object(m)) if m.get("content").is_some_and(Value::is_string) => {
                Ok(m["content"].as_str().unwrap_or_default().to_string())
            }
            _ => Ok(text),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VlmScore {
    pub sc: f64,
    pub pa: f64,
    pub pq: f64,
    pub raw: String,
    /// One note per score that was out of range and clamped.
    pub clamped: Vec<String>,
}

impl VlmScore {
    pub fn final_quality(&self) -> f64 {
        self.pa.min(self.pq)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum VlmOutcome {
    Scored(VlmScore),
    Missing { error: String },
}

/// Extracts the `{"SC", "PA", "PQ"}` object from reply text. Finite scores
/// outside `[0, 10]` are clamped to the nearest bound and noted; anything
/// else unparseable is an error.
pub fn parse_vlm_response(raw: &str) -> Result<VlmScore> {
    let malformed = |reason: &str| Error::format("VLM response", reason.to_string());
    let start = raw.find('{').ok_or_else(|| malformed("no JSON object"))?;
    let end = raw.rfind('}').ok_or_else(|| malformed("no JSON object"))?;
    if end < start {
        return Err(malformed("no JSON object"));
    }
    let obj: Value = serde_json::from_str(&raw[start..=end]).map_err(|e| malformed(&e.to_string()))?;
    let mut clamped = Vec::new();
    let mut get = |key: &str| -> Result<f64> {
        let v = obj
            .get(key)
            .and_then(Value::as_f64)
            .ok_or_else(|| malformed(&format!("missing numeric {key}")))?;
        if !v.is_finite() {
            return Err(malformed(&format!("{key} is not finite")));
        }
        let c = v.clamp(0.0, VLM_SCORE_MAX);
        if c != v {
            clamped.push(format!("{key} clamped from {v} to {c}"));
        }
        Ok(c)
    };
    let (sc, pa, pq) = (get("SC")?, get("PA")?, get("PQ")?);
    Ok(VlmScore {
        sc,
        pa,
        pq,
        raw: raw.to_string(),
        clamped,
    })
}

pub fn vlm_score(src: &ImageGrid, generated: &ImageGrid, instruction: &str, client: &dyn VlmClient) -> VlmOutcome {
    let result = VlmRequest::new(src, generated, instruction)
        .and_then(|req| client.complete(&req))
        .and_then(|raw| parse_vlm_response(&raw));
    match result {
        Ok(score) => VlmOutcome::Scored(score),
        Err(e) => VlmOutcome::Missing { error: e.to_string() },
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub schema_version: u32,
    pub kind: String,
    pub run_id: String,
    pub metrics: BTreeMap<String, f64>,
    pub metric_definitions: BTreeMap<String, String>,
    pub rows: Vec<BTreeMap<String, Value>>,
    pub config: Value,
    pub grids: Vec<String>,
}

impl EvalReport {
    pub fn new(kind: &str, config: Value) -> Self {
        let mut h = Sha256::new();
        h.update(kind.as_bytes());
        h.update(config.to_string().as_bytes());
        let run_id = hex_digest(h)[..12].to_string();
        EvalReport {
            schema_version: REPORT_SCHEMA_VERSION,
            kind: kind.to_string(),
            run_id,
            metrics: BTreeMap::new(),
            metric_definitions: BTreeMap::new(),
            rows: Vec::new(),
            config,
            grids: Vec::new(),
        }
    }

    pub fn set_metric(&mut self, name: &str, value: f64, definition: &str) {
        self.metrics.insert(name.into(), value);
        self.metric_definitions.insert(name.into(), definition.into());
    }

    pub fn validate(&self) -> Result<()> {
        if let Some(name) = self.metrics.keys().find(|k| !self.metric_definitions.contains_key(*k)) {
            return Err(Error::Validation(format!("metric {name} has no recorded definition")));
        }
        Ok(())
    }

    pub fn to_json(&self) -> Result<String> {
        // Value maps are ordered, so keys come out sorted.
        let value = serde_json::to_value(self)?;
        Ok(serde_json::to_string_pretty(&value)? + "\n")
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let report: EvalReport = serde_json::from_str(&text)?;
        if report.schema_version != REPORT_SCHEMA_VERSION {
            return Err(Error::format(
                "report",
                format!("schema version {}", report.schema_version),
            ));
        }
        Ok(report)
    }
}

/// One row of a report's image grid: src | GT structure | predicted structure | fourth panel.
#[derive(Clone, Debug, PartialEq)]
pub struct GridPanel {
    pub id: String,
    pub panels: [ImageGrid; 4],
}

fn csv_field(v: Option<&Value>) -> String {
    let s = match v {
        None | Some(Value::Null) => String::new(),
        Some(Value::String(s)) => s.clone(),
        Some(other) => other.to_string(),
    };
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s
    }
}

pub fn rows_csv(rows: &[BTreeMap<String, Value>]) -> String {
    let mut cols: Vec<&String> = Vec::new();
    for row in rows {
        for k in row.keys() {
            if !cols.contains(&k) {
                cols.push(k);
            }
        }
    }
    cols.sort_by_key(|k| (k.as_str() != "id", k.as_str()));
    let mut out = cols.iter().map(|c| c.as_str()).collect::<Vec<_>>().join(",");
    out.push('\n');
    for row in rows {
        let line: Vec<String> = cols.iter().map(|c| csv_field(row.get(*c))).collect();
        out.push_str(&line.join(","));
        out.push('\n');
    }
    out
}

/// Writes `report.json`, `rows.csv` and `grids/<id>.png`; returns the report
/// with its grid paths filled in.
pub fn emit_report(report: &EvalReport, grids: &[GridPanel], out_dir: &Path) -> Result<EvalReport> {
    report.validate()?;
    let mut report = report.clone();
    let grid_dir = out_dir.join("grids");
    fs::create_dir_all(&grid_dir).map_err(|e| Error::io(&grid_dir, e))?;
    report.grids.clear();
    for g in grids {
        let refs: Vec<&ImageGrid> = g.panels.iter().collect();
        let rel = format!("grids/{}.png", g.id);
        hstack(&refs)?.save_png(&out_dir.join(&rel))?;
        report.grids.push(rel);
    }
    let json_path = out_dir.join("report.json");
    fs::write(&json_path, report.to_json()?).map_err(|e| Error::io(&json_path, e))?;
    let csv_path = out_dir.join("rows.csv");
    fs::write(&csv_path, rows_csv(&report.rows)).map_err(|e| Error::io(&csv_path, e))?;
    Ok(report)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalConfig {
    pub sampler: SamplerConfig,
    pub canny: CannyParams,
    pub tolerance_px: usize,
    /// Number of grid images written (first records).
    pub grid_count: usize,
    /// Concurrent scoring requests for the subject eval.
    pub vlm_max_concurrency: usize,
    pub workers: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            sampler: SamplerConfig::default(),
            canny: CannyParams::default(),
            tolerance_px: 1,
            grid_count: 8,
            vlm_max_concurrency: 4,
            workers: 0,
        }
    }
}

impl EvalConfig {
    fn pool(&self, threads: usize) -> Result<rayon::ThreadPool> {
        rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build()
            .map_err(|e| Error::config("workers", e.to_string()))
    }

    fn snapshot(&self, extra: Value) -> Result<Value> {
        let mut v = serde_json::to_value(self)?;
        if let (Value::Object(m), Value::Object(e)) = (&mut v, extra) {
            m.extend(e);
        }
        Ok(v)
    }
}

fn mean(values: impl Iterator<Item = f64>) -> f64 {
    let (s, n) = values.fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    if n == 0 {
        f64::NAN
    } else {
        s / n as f64
    }
}

fn require_records(records: &[DatasetRecord]) -> Result<()> {
    if records.is_empty() {
        return Err(Error::Domain("evaluation needs at least one record".into()));
    }
    Ok(())
}

#[derive(Clone, Debug)]
pub struct EvalRun {
    pub report: EvalReport,
    pub grids: Vec<GridPanel>,
}

/// Neutral-prompt structure reconstruction scored against the source's own
/// structure map. `predict` returns the raw (unbinarized) prediction.
pub fn run_reconstruction_eval_with<F>(records: &[DatasetRecord], cfg: &EvalConfig, predict: F) -> Result<EvalRun>
where
    F: Fn(&DatasetRecord) -> Result<CannyMap> + Sync,
{
    require_records(records)?;
    let results: Vec<Result<(CannyMap, CannyMap, CannyMap)>> = cfg.pool(cfg.workers)?.install(|| {
        records
            .par_iter()
            .map(|rec| {
                let raw = predict(rec)?;
                let bin = binarize_prediction(&raw, BINARIZE_THRESHOLD);
                let gt = structure_map(&rec.src, &cfg.canny)?;
                Ok((raw, bin, gt))
            })
            .collect()
    });
    let mut report = EvalReport::new(
        "reconstruction",
        cfg.snapshot(json!({
            "psnr_convention": "remapped 3-channel structure maps, peak 1.0, 100 dB cap",
            "prompt": "neutral",
            "records": records.len(),
        }))?,
    );
    let mut grids = Vec::new();
    for (rec, res) in records.iter().zip(results) {
        let (raw, bin, gt) = res?;
        let p = psnr(bin.values(), gt.values(), 1.0)?;
        let s = ssim(bin.values(), gt.values())?;
        let e = edge_f1(&bin, &gt, cfg.tolerance_px)?;
        report.rows.push(BTreeMap::from([
            ("id".to_string(), json!(rec.meta.id)),
            ("psnr".to_string(), json!(p)),
            ("ssim".to_string(), json!(s)),
            ("edge_precision".to_string(), json!(e.precision)),
            ("edge_recall".to_string(), json!(e.recall)),
            ("edge_f1".to_string(), json!(e.f1)),
        ]));
        if grids.len() < cfg.grid_count {
            grids.push(GridPanel {
                id: rec.meta.id.clone(),
                panels: [
                    rec.src.clone(),
                    gt.into_values(),
                    bin.into_values(),
                    raw.values().clamped(),
                ],
            });
        }
    }
    let col = |name: &str| mean(report.rows.iter().filter_map(|r| r.get(name).and_then(Value::as_f64)));
    let (mp, ms, mf, mpr, mre) = (
        col("psnr"),
        col("ssim"),
        col("edge_f1"),
        col("edge_precision"),
        col("edge_recall"),
    );
    report.set_metric(
        "mean_psnr",
        mp,
        "mean over records of PSNR(binarized prediction, GT map), dB, cap 100",
    );
    report.set_metric("mean_ssim", ms, "mean over records of 8x8 non-overlapping-window SSIM");
    report.set_metric(
        "mean_edge_f1",
        mf,
        "mean over records of edge F1 within the Chebyshev tolerance",
    );
    report.set_metric("mean_edge_precision", mpr, "mean over records of edge precision");
    report.set_metric("mean_edge_recall", mre, "mean over records of edge recall");
    report.set_metric("count", records.len() as f64, "number of evaluated records");
    Ok(EvalRun { report, grids })
}

pub fn run_reconstruction_eval(
    weights: &BackboneWeights,
    theta1: &AdapterSet,
    records: &[DatasetRecord],
    cfg: &EvalConfig,
) -> Result<EvalRun> {
    let neutral = neutral_tokens();
    run_reconstruction_eval_with(records, cfg, |rec| {
        infer_stage1(weights, theta1, &rec.src, &neutral, &cfg.sampler)
    })
}

fn generate_all(
    weights: &BackboneWeights,
    theta1: &AdapterSet,
    theta2: &AdapterSet,
    records: &[DatasetRecord],
    cfg: &EvalConfig,
) -> Result<Vec<(CannyMap, ImageGrid)>> {
    cfg.pool(cfg.workers)?.install(|| {
        records
            .par_iter()
            .map(|rec| {
                let out = infer(weights, theta1, theta2, &rec.src, &rec.meta.token_ids, &cfg.sampler)?;
                Ok((out.canny, out.image.clamped()))
            })
            .collect()
    })
}

fn grid_for(rec: &DatasetRecord, canny: &CannyMap, image: &ImageGrid) -> GridPanel {
    GridPanel {
        id: rec.meta.id.clone(),
        panels: [
            rec.src.clone(),
            rec.canny.values().clone(),
            canny.values().clone(),
            image.clone(),
        ],
    }
}

/// Full two-stage generation on text records; OCR of each output against the
/// record's text.
pub fn run_ocr_eval(
    weights: &BackboneWeights,
    theta1: &AdapterSet,
    theta2: &AdapterSet,
    records: &[DatasetRecord],
    alphabet: &GlyphAlphabet,
    cfg: &EvalConfig,
) -> Result<EvalRun> {
    require_records(records)?;
    if let Some(r) = records.iter().find(|r| r.meta.text_content.is_empty()) {
        return Err(Error::Domain(format!("record {} has no text to read", r.meta.id)));
    }
    let outputs = generate_all(weights, theta1, theta2, records, cfg)?;
    let mut report = EvalReport::new("ocr", cfg.snapshot(json!({"records": records.len()}))?);
    let mut grids = Vec::new();
    let mut samples = Vec::with_capacity(records.len());
    for (rec, (canny, image)) in records.iter().zip(&outputs) {
        let read = ocr(image, alphabet, None).text;
        report.rows.push(BTreeMap::from([
            ("id".to_string(), json!(rec.meta.id)),
            ("truth".to_string(), json!(rec.meta.text_content)),
            ("read".to_string(), json!(read)),
            ("correct".to_string(), json!(read == rec.meta.text_content)),
        ]));
        samples.push((image.clone(), rec.meta.text_content.clone()));
        if grids.len() < cfg.grid_count {
            grids.push(grid_for(rec, canny, image));
        }
    }
    let acc = ocr_accuracy(&samples, alphabet)?;
    report.set_metric(
        "ocr_accuracy",
        acc,
        "fraction of generated images whose OCR text equals the record text",
    );
    report.set_metric("count", records.len() as f64, "number of evaluated records");
    Ok(EvalRun { report, grids })
}

/// Full two-stage generation scored by a vision-language client.
pub fn run_subject_eval(
    weights: &BackboneWeights,
    theta1: &AdapterSet,
    theta2: &AdapterSet,
    records: &[DatasetRecord],
    client: &dyn VlmClient,
    cfg: &EvalConfig,
) -> Result<EvalRun> {
    require_records(records)?;
    if cfg.vlm_max_concurrency == 0 {
        return Err(Error::config("vlm.max_concurrency", "must be at least 1"));
    }
    let outputs = generate_all(weights, theta1, theta2, records, cfg)?;
    let outcomes: Vec<VlmOutcome> = cfg.pool(cfg.vlm_max_concurrency)?.install(|| {
        records
            .par_iter()
            .zip(&outputs)
            .map(|(rec, (_, image))| vlm_score(&rec.src, image, &rec.meta.prompt, client))
            .collect()
    });
    let mut report = EvalReport::new(
        "subject",
        cfg.snapshot(json!({
            "client": client.name(),
            "final_quality": "min(PA, PQ)",
            "records": records.len(),
        }))?,
    );
    let mut grids = Vec::new();
    let mut scored = Vec::new();
    for ((rec, (canny, image)), outcome) in records.iter().zip(&outputs).zip(outcomes) {
        let mut row = BTreeMap::from([("id".to_string(), json!(rec.meta.id))]);
        match &outcome {
            VlmOutcome::Scored(s) => {
                row.insert("sc".into(), json!(s.sc));
                row.insert("pa".into(), json!(s.pa));
                row.insert("pq".into(), json!(s.pq));
                row.insert("final_quality".into(), json!(s.final_quality()));
                row.insert("flags".into(), json!(s.clamped.join("; ")));
                row.insert("error".into(), Value::Null);
                scored.push(s.clone());
            }
            VlmOutcome::Missing { error } => {
                for k in ["sc", "pa", "pq", "final_quality"] {
                    row.insert(k.into(), Value::Null);
                }
                row.insert("flags".into(), json!(""));
                row.insert("error".into(), json!(error));
            }
        }
        report.rows.push(row);
        if grids.len() < cfg.grid_count {
            grids.push(grid_for(rec, canny, image));
        }
    }
    report.set_metric("count", records.len() as f64, "number of evaluated records");
    report.set_metric(
        "mean_sc",
        mean(scored.iter().map(|s| s.sc)),
        "mean subject-consistency score over scored rows",
    );
    report.set_metric(
        "mean_pa",
        mean(scored.iter().map(|s| s.pa)),
        "mean prompt-adherence score over scored rows",
    );
    report.set_metric(
        "mean_pq",
        mean(scored.iter().map(|s| s.pq)),
        "mean perceptual-quality score over scored rows",
    );
    report.set_metric(
        "mean_final_quality",
        mean(scored.iter().map(VlmScore::final_quality)),
        "mean over scored rows of min(PA, PQ)",
    );
    report.set_metric("scored", scored.len() as f64, "rows with a parsed score");
    report.set_metric(
        "missing",
        (records.len() - scored.len()) as f64,
        "rows whose scoring request or reply failed",
    );
    Ok(EvalRun { report, grids })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::structure::remap_edges;

    fn noise(seed: u64) -> ImageGrid {
        crate::flow::draw_prior((16, 16, 3), seed).clamped()
    }

    #[test]
    fn psnr_closed_forms() {
        let a = noise(1);
        assert_eq!(psnr(&a, &a, 1.0).unwrap(), PSNR_CAP_DB);
        let zero = ImageGrid::filled(8, 8, 3, 0.2);
        let off = ImageGrid::filled(8, 8, 3, 0.3);
        assert!((psnr(&zero, &off, 1.0).unwrap() - 20.0).abs() < 1e-9);
        assert!(psnr(&a, &ImageGrid::zeros(4, 4, 3), 1.0).is_err());
    }

    #[test]
    fn ssim_identity_and_inversion() {
        let a = noise(2);
        assert!((ssim(&a, &a).unwrap() - 1.0).abs() < 1e-12);
        let inv = ImageGrid::from_array(a.values().mapv(|v| 1.0 - v));
        assert!(ssim(&a, &inv).unwrap() < 1.0);
        assert!(ssim(&ImageGrid::zeros(4, 4, 3), &ImageGrid::zeros(4, 4, 3)).is_err());
    }

    #[test]
    fn edge_f1_conventions() {
        let mut e = Array2::from_elem((10, 10), false);
        let empty = remap_edges(&e);
        assert_eq!(edge_f1(&empty, &empty, 1).unwrap().f1, 1.0);
        e[[4, 4]] = true;
        let gt = remap_edges(&e);
        assert_eq!(edge_f1(&empty, &gt, 1).unwrap().recall, 0.0);
        let mut shifted = Array2::from_elem((10, 10), false);
        shifted[[5, 5]] = true;
        let pred = binarize_prediction(&remap_edges(&shifted), BINARIZE_THRESHOLD);
        assert_eq!(edge_f1(&pred, &gt, 1).unwrap().f1, 1.0);
        assert_eq!(edge_f1(&pred, &gt, 0).unwrap().f1, 0.0);
        let raw = CannyMap::predicted(gt.values().clone()).unwrap();
        assert!(edge_f1(&raw, &gt, 1).is_err());
        assert!(edge_f1(&gt, &pred, 1).is_err());
    }

    #[test]
    fn response_parsing() {
        let s = parse_vlm_response("scores: {\"SC\": 7, \"PA\": 11, \"PQ\": 5.5}").unwrap();
        assert_eq!((s.sc, s.pa, s.pq), (7.0, 10.0, 5.5));
        assert_eq!(s.clamped.len(), 1);
        assert_eq!(s.final_quality(), 5.5);
        assert!(parse_vlm_response("no scores here").is_err());
        assert!(parse_vlm_response("{\"SC\": 1, \"PA\": 2}").is_err());
    }

    #[test]
    fn mock_is_deterministic_and_in_range() {
        let (a, b) = (noise(3), noise(4));
        let x = vlm_score(&a, &b, "turn it", &MockVlm);
        assert_eq!(x, vlm_score(&a, &b, "turn it", &MockVlm));
        match x {
            VlmOutcome::Scored(s) => {
                assert!([s.sc, s.pa, s.pq].iter().all(|v| (0.0..=10.0).contains(v)));
            }
            VlmOutcome::Missing { error } => panic!("{error}"),
        }
    }

    #[test]
    fn csv_quotes_and_orders_columns() {
        let rows = vec![BTreeMap::from([
            ("b".to_string(), json!("x,y")),
            ("id".to_string(), json!("000001")),
            ("a".to_string(), json!(1.5)),
        ])];
        assert_eq!(rows_csv(&rows), "id,a,b\n000001,1.5,\"x,y\"\n");
    }
}
