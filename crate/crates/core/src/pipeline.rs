//! Stage-1 and stage-2 adapter training and chained two-stage inference.
//!
//! Stage 1 learns the target structure map from the source image and the
//! prompt. Stage 2 learns the target image from the source image, the prompt
//! and a structure map: the ground-truth map while training, the binarized
//! stage-1 prediction at inference. The structure map's [`CannyKind`] is the
//! provenance tag, and it is checked every time a conditioning set is built.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use rand::Rng as _;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::backbone::{backward, forward, forward_with_cache, BackboneWeights, Role, TokenSequence};
use crate::datagen::{DatasetRecord, MixedSampler};
use crate::error::{Error, Result};
use crate::flow::{draw_prior, fm_loss_grad, sample_ode, sample_path, SamplerConfig};
use crate::image::ImageGrid;
use crate::lora::{init_adapter_set_with, AdapterConfig, AdapterSet, Stage};
use crate::rng;
use crate::structure::{binarize_prediction, CannyKind, CannyMap, BINARIZE_THRESHOLD};

/// Encoded condition streams for one stage.
#[derive(Clone, Debug, PartialEq)]
pub struct ConditioningSet {
    pub stage: Stage,
    pub streams: Vec<TokenSequence>,
    /// Kind of the structure map behind the canny stream (stage 2 only).
    pub canny_provenance: Option<CannyKind>,
}

impl ConditioningSet {
    pub fn roles(&self) -> Vec<Role> {
        self.streams.iter().filter_map(TokenSequence::role).collect()
    }

    /// Fails unless the canny stream came from a map of the given kind.
    pub fn require_provenance(&self, expected: CannyKind) -> Result<()> {
        match self.canny_provenance {
            Some(kind) if kind == expected => Ok(()),
            other => Err(Error::Contract(format!(
                "canny stream provenance is {other:?}, expected {expected:?}"
            ))),
        }
    }
}

pub fn make_conditioning(
    weights: &BackboneWeights,
    stage: Stage,
    src: &ImageGrid,
    tokens: &[usize],
    canny: Option<&CannyMap>,
) -> Result<ConditioningSet> {
    let mut streams = vec![weights.encode_image(src)?, weights.encode_text(tokens)?];
    let canny_provenance = match (stage, canny) {
        (Stage::Stage1, None) => None,
        (Stage::Stage1, Some(_)) => {
            return Err(Error::Contract("stage 1 takes no structure map".into()));
        }
        (Stage::Stage2, None) => {
            return Err(Error::Contract("stage 2 requires a structure map".into()));
        }
        (Stage::Stage2, Some(map)) => {
            if map.kind() == CannyKind::Predicted {
                return Err(Error::Contract(
                    "stage 2 takes a two-level structure map; binarize predictions first".into(),
                ));
            }
            streams.push(weights.encode_canny(map)?);
            Some(map.kind())
        }
    };
    Ok(ConditioningSet {
        stage,
        streams,
        canny_provenance,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    /// Heavy-ball momentum SGD.
    Sgd,
    Adam,
}

impl OptimizerKind {
    pub fn parse(name: &str) -> Result<Self> {
        match name {
            "sgd" => Ok(OptimizerKind::Sgd),
            "adam" => Ok(OptimizerKind::Adam),
            other => Err(Error::config("train.optimizer", format!("unknown optimizer {other:?}"))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            OptimizerKind::Sgd => "sgd",
            OptimizerKind::Adam => "adam",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub steps: usize,
    pub lr: f64,
    pub momentum: f64,
    pub optimizer: OptimizerKind,
    pub adapter: AdapterConfig,
    pub mix: Vec<f64>,
    pub seed: u64,
    /// Global gradient-norm clip; 0 disables.
    pub grad_clip: f64,
    /// Worker threads for per-sample gradients; 0 uses every core.
    pub workers: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 16,
            steps: 2000,
            lr: 1e-3,
            momentum: 0.9,
            optimizer: OptimizerKind::Adam,
            adapter: AdapterConfig::default(),
            mix: vec![0.8, 0.2],
            seed: 0,
            grad_clip: 1.0,
            workers: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self, datasets: usize) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::config("train.batch_size", "must be at least 1"));
        }
        if !(self.lr.is_finite() && self.lr >= 0.0) {
            return Err(Error::config("train.lr", "must be finite and nonnegative"));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::config("train.momentum", "must lie in [0, 1)"));
        }
        if !(self.grad_clip.is_finite() && self.grad_clip >= 0.0) {
            return Err(Error::config("train.grad_clip", "must be finite and nonnegative"));
        }
        self.adapter.validate()?;
        if self.mix.len() != datasets {
            return Err(Error::config(
                "train.mix",
                format!("{} ratios for {} datasets", self.mix.len(), datasets),
            ));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossPoint {
    pub step: usize,
    pub loss: f64,
}

#[derive(Clone, Debug)]
pub struct TrainOutput {
    pub adapter: AdapterSet,
    pub trace: Vec<LossPoint>,
    pub backbone_checksum: String,
    /// Number of conditioning sets built per canny provenance.
    pub provenance: BTreeMap<String, usize>,
}

pub fn write_loss_csv(trace: &[LossPoint], path: &Path) -> Result<()> {
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut body = String::from("step,loss\n");
    for p in trace {
        body.push_str(&format!("{},{:e}\n", p.step, p.loss));
    }
    f.write_all(body.as_bytes()).map_err(|e| Error::io(path, e))
}

struct Optimizer {
    kind: OptimizerKind,
    lr: f64,
    momentum: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl Optimizer {
    const BETA2: f64 = 0.999;
    const EPS: f64 = 1e-8;

    fn new(cfg: &TrainConfig, n: usize) -> Self {
        Optimizer {
            kind: cfg.optimizer,
            lr: cfg.lr,
            momentum: cfg.momentum,
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        }
    }

    fn step(&mut self, params: &mut [f64], grad: &[f64]) {
        if self.lr == 0.0 {
            return;
        }
        self.t += 1;
        match self.kind {
            OptimizerKind::Sgd => {
                for ((p, m), g) in params.iter_mut().zip(&mut self.m).zip(grad) {
                    *m = self.momentum * *m + g;
                    *p -= self.lr * *m;
                }
            }
            OptimizerKind::Adam => {
                let b1 = self.momentum;
                let c1 = 1.0 - b1.powi(self.t);
                let c2 = 1.0 - Self::BETA2.powi(self.t);
                for (((p, m), v), g) in params.iter_mut().zip(&mut self.m).zip(&mut self.v).zip(grad) {
                    *m = b1 * *m + (1.0 - b1) * g;
                    *v = Self::BETA2 * *v + (1.0 - Self::BETA2) * g * g;
                    *p -= self.lr * (*m / c1) / ((*v / c2).sqrt() + Self::EPS);
                }
            }
        }
    }
}

fn thread_pool(workers: usize) -> Result<rayon::ThreadPool> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .map_err(|e| Error::config("workers", e.to_string()))
}

/// One training example: target, conditioning and the seed for its noise.
struct Example {
    x1: ImageGrid,
    cond: ConditioningSet,
    noise_seed: u64,
    t: f64,
}

fn example_grad(weights: &BackboneWeights, adapter: &AdapterSet, ex: &Example) -> Result<(f64, AdapterSet)> {
    let (h, w, c) = ex.x1.dim();
    let x0 = draw_prior((h, w, c), ex.noise_seed);
    let xt = sample_path(&x0, &ex.x1, ex.t)?;
    let (v, cache) = forward_with_cache(weights, &xt, ex.t, &ex.cond.streams, Some(adapter))?;
    let (loss, dv) = fm_loss_grad(&v, &x0, &ex.x1)?;
    let mut grads = adapter.zeros_like();
    backward(weights, &cache, &dv, Some(adapter), Some(&mut grads))?;
    Ok((loss, grads))
}

fn train_stage<F>(
    weights: &BackboneWeights,
    datasets: &[&[DatasetRecord]],
    cfg: &TrainConfig,
    stage: Stage,
    mut make_example: F,
) -> Result<TrainOutput>
where
    F: FnMut(&DatasetRecord) -> Result<(ImageGrid, ConditioningSet)>,
{
    cfg.validate(datasets.len())?;
    let checksum = weights.checksum();
    let sizes: Vec<usize> = datasets.iter().map(|d| d.len()).collect();
    let stage_tag = match stage {
        Stage::Stage1 => 1,
        Stage::Stage2 => 2,
    };
    let mut sampler = MixedSampler::new(&sizes, &cfg.mix, rng::derive_seed(cfg.seed, 0x5A_00 + stage_tag))?;
    let mut rng = rng::stream(cfg.seed, 0x7E_00 + stage_tag);
    let mut adapter = init_adapter_set_with(&weights.config, &cfg.adapter, stage, cfg.seed)?;
    let mut params = adapter.trainable_parameters();
    let mut opt = Optimizer::new(cfg, params.len());
    let pool = thread_pool(cfg.workers)?;
    let mut trace = Vec::with_capacity(cfg.steps);
    let mut provenance = BTreeMap::new();

    for step in 0..cfg.steps {
        let mut batch = Vec::with_capacity(cfg.batch_size);
        for _ in 0..cfg.batch_size {
            let (d, r) = sampler.next_index();
            let (x1, cond) = make_example(&datasets[d][r])?;
            let key = cond.canny_provenance.map_or("none".to_string(), |k| format!("{k:?}"));
            *provenance.entry(key).or_insert(0) += 1;
            batch.push(Example {
                x1,
                cond,
                noise_seed: rng.random(),
                t: rng.random::<f64>(),
            });
        }
        let results: Vec<Result<(f64, AdapterSet)>> =
            pool.install(|| batch.par_iter().map(|ex| example_grad(weights, &adapter, ex)).collect());
        let mut loss = 0.0;
        let mut grads = adapter.zeros_like();
        let scale = 1.0 / cfg.batch_size as f64;
        for res in results {
            let (l, g) = res.map_err(|e| Error::TrainingAborted {
                step,
                reason: e.to_string(),
            })?;
            loss += l * scale;
            grads.add_scaled(&g, scale);
        }
        if !loss.is_finite() {
            return Err(Error::TrainingAborted {
                step,
                reason: format!("loss is {loss}"),
            });
        }
        trace.push(LossPoint { step, loss });
        let mut flat = grads.trainable_parameters();
        let norm = flat.iter().map(|g| g * g).sum::<f64>().sqrt();
        if cfg.grad_clip > 0.0 && norm > cfg.grad_clip {
            flat.iter_mut().for_each(|g| *g *= cfg.grad_clip / norm);
        }
        opt.step(&mut params, &flat);
        adapter.set_trainable_parameters(&params)?;
        log::debug!("{} step {step} loss {loss:.6} grad norm {norm:.3e}", stage.name());
    }

    if weights.checksum() != checksum {
        return Err(Error::Contract("backbone weights changed during training".into()));
    }
    Ok(TrainOutput {
        adapter,
        trace,
        backbone_checksum: checksum,
        provenance,
    })
}

/// Trains θ1: target is the record's ground-truth structure map.
pub fn train_stage1(
    weights: &BackboneWeights,
    datasets: &[&[DatasetRecord]],
    cfg: &TrainConfig,
) -> Result<TrainOutput> {
    train_stage(weights, datasets, cfg, Stage::Stage1, |rec| {
        if rec.canny.kind() != CannyKind::GroundTruth {
            return Err(Error::Contract(format!(
                "record {}: stage-1 target must be a ground-truth map",
                rec.meta.id
            )));
        }
        let cond = make_conditioning(weights, Stage::Stage1, &rec.src, &rec.meta.token_ids, None)?;
        Ok((rec.canny.values().clone(), cond))
    })
}

/// Trains θ2 with teacher forcing: the canny stream is always the record's
/// ground-truth map.
pub fn train_stage2(
    weights: &BackboneWeights,
    datasets: &[&[DatasetRecord]],
    cfg: &TrainConfig,
) -> Result<TrainOutput> {
    train_stage(weights, datasets, cfg, Stage::Stage2, |rec| {
        let cond = make_conditioning(weights, Stage::Stage2, &rec.src, &rec.meta.token_ids, Some(&rec.canny))?;
        cond.require_provenance(CannyKind::GroundTruth)?;
        Ok((rec.tgt.clone(), cond))
    })
}

fn check_stage(adapter: &AdapterSet, stage: Stage) -> Result<()> {
    if adapter.stage != stage {
        return Err(Error::Contract(format!(
            "expected a {} adapter, got {}",
            stage.name(),
            adapter.stage.name()
        )));
    }
    Ok(())
}

fn sample_with(
    weights: &BackboneWeights,
    adapter: &AdapterSet,
    cond: &ConditioningSet,
    sampler: &SamplerConfig,
) -> Result<ImageGrid> {
    let c = &weights.config;
    sample_ode(
        |x, t| forward(weights, x, t, &cond.streams, Some(adapter)),
        (c.image_size, c.image_size, c.channels),
        sampler,
    )
}

fn stage_sampler(sampler: &SamplerConfig, stage: Stage) -> SamplerConfig {
    let tag = match stage {
        Stage::Stage1 => 1,
        Stage::Stage2 => 2,
    };
    SamplerConfig {
        seed: rng::derive_seed(sampler.seed, tag),
        ..*sampler
    }
}

/// Raw stage-1 prediction (kind `Predicted`).
pub fn infer_stage1(
    weights: &BackboneWeights,
    theta1: &AdapterSet,
    src: &ImageGrid,
    tokens: &[usize],
    sampler: &SamplerConfig,
) -> Result<CannyMap> {
    check_stage(theta1, Stage::Stage1)?;
    let cond = make_conditioning(weights, Stage::Stage1, src, tokens, None)?;
    let raw = sample_with(weights, theta1, &cond, &stage_sampler(sampler, Stage::Stage1))?;
    CannyMap::predicted(raw)
}

#[derive(Clone, Debug, PartialEq)]
pub struct InferOutput {
    pub canny_raw: CannyMap,
    pub canny: CannyMap,
    pub image: ImageGrid,
    /// Provenance of the canny stream that stage 2 consumed.
    pub stage2_provenance: CannyKind,
}

/// Chained inference: stage 1, binarize, stage 2. The two stages draw
/// independent prior noise derived from `sampler.seed`.
pub fn infer(
    weights: &BackboneWeights,
    theta1: &AdapterSet,
    theta2: &AdapterSet,
    src: &ImageGrid,
    tokens: &[usize],
    sampler: &SamplerConfig,
) -> Result<InferOutput> {
    check_stage(theta2, Stage::Stage2)?;
    let canny_raw = infer_stage1(weights, theta1, src, tokens, sampler)?;
    let canny = binarize_prediction(&canny_raw, BINARIZE_THRESHOLD);
    let cond = make_conditioning(weights, Stage::Stage2, src, tokens, Some(&canny))?;
    cond.require_provenance(CannyKind::Binarized)?;
    let image = sample_with(weights, theta2, &cond, &stage_sampler(sampler, Stage::Stage2))?;
    Ok(InferOutput {
        canny_raw,
        canny,
        image,
        stage2_provenance: CannyKind::Binarized,
    })
}
