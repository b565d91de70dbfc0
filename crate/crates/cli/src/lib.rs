//! `structgen` command-line entry point.

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::{json, Value};

use structgen_core::backbone::{init_backbone, BackboneWeights};
use structgen_core::config::{describe_keys, parse_flag_value, RunConfig};
use structgen_core::datagen::{
    build_generic_dataset, build_texting_dataset, color_name, tokenize, validate_dataset, Dataset, GlyphAlphabet,
    PromptTemplate, Rgb, ShapeKind,
};
use structgen_core::eval::{
    emit_report, run_ocr_eval, run_reconstruction_eval, run_subject_eval, EvalRun, HttpVlm, MockVlm, VlmClient,
};
use structgen_core::lora::{AdapterSet, Stage};
use structgen_core::pipeline::{infer, train_stage1, train_stage2, write_loss_csv, TrainOutput};
use structgen_core::rng::derive_seed;
use structgen_core::{Error, ImageGrid, Result};

pub const EXIT_USAGE: i32 = 2;
pub const ADAPTER_FILE: &str = "adapter.bin";

#[derive(Parser, Debug)]
#[command(
    name = "structgen",
    version,
    about = "Two-stage structure-then-render image generation",
    after_help = keys_help()
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

fn keys_help() -> String {
    format!(
        "Configuration keys (flat JSON file via --config, single overrides via --set KEY=VALUE):\n{}",
        describe_keys()
    )
}

#[derive(Args, Debug, Clone, Default)]
struct ConfigArgs {
    /// Flat JSON config file with dotted keys.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override one key, e.g. `--set train.lr=0.01`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

#[derive(Copy, Clone, Debug, ValueEnum)]
enum DatasetKind {
    Texting,
    Generic,
}

#[derive(Copy, Clone, Debug, ValueEnum)]
enum EvalKind {
    Reconstruction,
    Subject,
    Ocr,
}

#[derive(Copy, Clone, Debug, ValueEnum)]
enum VlmChoice {
    Mock,
    Http,
}

#[derive(Args, Debug)]
struct TrainArgs {
    /// Dataset directories, comma separated.
    #[arg(long, value_delimiter = ',', required = true)]
    data: Vec<PathBuf>,
    /// Sampling ratio per data directory (sets train.mix).
    #[arg(long)]
    mix: Option<String>,
    /// Output directory for the adapter, loss trace and config snapshot.
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    cfg: ConfigArgs,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic paired dataset.
    BuildDataset {
        #[arg(long, value_enum)]
        kind: DatasetKind,
        #[arg(long)]
        n: usize,
        #[arg(long)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Re-check every record of a dataset directory.
    ValidateDataset {
        #[arg(long)]
        data: PathBuf,
    },
    /// Train the structure-prediction adapter.
    #[command(after_help = keys_help())]
    TrainStage1(TrainArgs),
    /// Train the structure-guided rendering adapter.
    #[command(after_help = keys_help())]
    TrainStage2(TrainArgs),
    /// Run both stages on one source image.
    Infer {
        #[arg(long)]
        src: PathBuf,
        /// Prompt template: 0 neutral, 1 rotate left, 2 rotate right, 3 turn left, 4 turn right.
        #[arg(long)]
        prompt_id: usize,
        /// Subject shape named in non-neutral prompts.
        #[arg(long)]
        shape: Option<String>,
        /// Subject color word; defaults to the color at the image center.
        #[arg(long)]
        color: Option<String>,
        #[arg(long)]
        theta1: PathBuf,
        #[arg(long)]
        theta2: PathBuf,
        #[arg(long)]
        out_dir: PathBuf,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Evaluate adapters on a held-out dataset.
    Eval {
        #[arg(long, value_enum)]
        kind: EvalKind,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        theta1: PathBuf,
        #[arg(long)]
        theta2: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Scoring client for the subject eval (sets eval.vlm).
        #[arg(long, value_enum)]
        vlm: Option<VlmChoice>,
        /// Evaluate only the first N records.
        #[arg(long)]
        limit: Option<usize>,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
}

/// Parses `argv` (including the program name), runs the command and returns
/// the process exit code.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match dispatch(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

fn resolve(args: &ConfigArgs, extra: Vec<(String, Value)>) -> Result<RunConfig> {
    let mut overrides = Vec::new();
    for item in &args.set {
        let (k, v) = item
            .split_once('=')
            .ok_or_else(|| Error::config(item.clone(), "expected KEY=VALUE"))?;
        overrides.push((k.trim().to_string(), parse_flag_value(k.trim(), v)?));
    }
    overrides.extend(extra);
    RunConfig::resolve(args.config.as_deref(), &overrides)
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn write_json(path: &Path, value: &Value) -> Result<()> {
    let text = serde_json::to_string_pretty(value)? + "\n";
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn backbone(cfg: &RunConfig) -> Result<BackboneWeights> {
    init_backbone(&cfg.backbone(), cfg.backbone_seed())
}

/// Accepts either an adapter file or a training output directory.
fn load_adapter(path: &Path, stage: Stage, weights: &BackboneWeights) -> Result<AdapterSet> {
    let file = if path.is_dir() {
        path.join(ADAPTER_FILE)
    } else {
        path.to_path_buf()
    };
    let adapter = AdapterSet::load(&file)?;
    adapter.check_compatible(&weights.config)?;
    if adapter.stage != stage {
        return Err(Error::Contract(format!(
            "{} holds a {} adapter, expected {}",
            file.display(),
            adapter.stage.name(),
            stage.name()
        )));
    }
    Ok(adapter)
}

fn dispatch(command: Command) -> Result<()> {
    match command {
        Command::BuildDataset {
            kind,
            n,
            seed,
            out,
            cfg,
        } => {
            let cfg = resolve(&cfg, vec![])?;
            create_dir(&out)?;
            let params = cfg.datagen();
            let manifest = match kind {
                DatasetKind::Texting => build_texting_dataset(n, seed, &params, &out)?,
                DatasetKind::Generic => build_generic_dataset(n, seed, &params, &out)?,
            };
            cfg.write_snapshot(&out)?;
            println!(
                "built {} records ({} attempts, acceptance {:.3}) in {}",
                manifest.count,
                manifest.stats.attempts,
                manifest.stats.acceptance_rate,
                out.display()
            );
            Ok(())
        }
        Command::ValidateDataset { data } => {
            let report = validate_dataset(&data)?;
            println!("{} records valid in {}", report.records, data.display());
            Ok(())
        }
        Command::TrainStage1(args) => train(args, Stage::Stage1),
        Command::TrainStage2(args) => train(args, Stage::Stage2),
        Command::Infer {
            src,
            prompt_id,
            shape,
            color,
            theta1,
            theta2,
            out_dir,
            cfg,
        } => {
            let cfg = resolve(&cfg, vec![])?;
            let weights = backbone(&cfg)?;
            let t1 = load_adapter(&theta1, Stage::Stage1, &weights)?;
            let t2 = load_adapter(&theta2, Stage::Stage2, &weights)?;
            let image = ImageGrid::load_png(&src)?;
            let prompt = render_prompt(&image, prompt_id, shape.as_deref(), color.as_deref())?;
            let tokens = tokenize(&prompt)?;
            let sampler = cfg.sampler();
            let out = infer(&weights, &t1, &t2, &image, &tokens, &sampler)?;
            create_dir(&out_dir)?;
            out.canny.save_png(&out_dir.join("canny_pred.png"))?;
            out.image.save_png(&out_dir.join("final.png"))?;
            write_json(
                &out_dir.join("meta.json"),
                &json!({
                    "prompt": prompt,
                    "prompt_id": prompt_id,
                    "token_ids": tokens,
                    "src": src.display().to_string(),
                    "sampler_steps": sampler.steps,
                    "sampler_seed": sampler.seed,
                    "stage1_noise_seed": derive_seed(sampler.seed, 1),
                    "stage2_noise_seed": derive_seed(sampler.seed, 2),
                    "stage2_canny_provenance": out.stage2_provenance,
                    "theta1_checksum": t1.checksum(),
                    "theta2_checksum": t2.checksum(),
                    "backbone_checksum": weights.checksum(),
                    "final_png": "values clipped to [0, 1] and rounded to 8 bits",
                }),
            )?;
            cfg.write_snapshot(&out_dir)?;
            println!("wrote canny_pred.png, final.png and meta.json to {}", out_dir.display());
            Ok(())
        }
        Command::Eval {
            kind,
            data,
            theta1,
            theta2,
            out,
            vlm,
            limit,
            cfg,
        } => {
            let extra = vlm
                .map(|v| {
                    let name = match v {
                        VlmChoice::Mock => "mock",
                        VlmChoice::Http => "http",
                    };
                    vec![("eval.vlm".to_string(), json!(name))]
                })
                .unwrap_or_default();
            let cfg = resolve(&cfg, extra)?;
            let weights = backbone(&cfg)?;
            let t1 = load_adapter(&theta1, Stage::Stage1, &weights)?;
            let mut records = Dataset::load(&data)?.records;
            if let Some(n) = limit {
                records.truncate(n);
            }
            let ecfg = cfg.eval();
            let need_theta2 = || -> Result<AdapterSet> {
                let path = theta2
                    .as_ref()
                    .ok_or_else(|| Error::config("theta2", "this eval kind needs --theta2"))?;
                load_adapter(path, Stage::Stage2, &weights)
            };
            let run: EvalRun = match kind {
                EvalKind::Reconstruction => run_reconstruction_eval(&weights, &t1, &records, &ecfg)?,
                EvalKind::Ocr => {
                    let t2 = need_theta2()?;
                    records.retain(|r| !r.meta.text_content.is_empty());
                    run_ocr_eval(&weights, &t1, &t2, &records, &GlyphAlphabet::standard(), &ecfg)?
                }
                EvalKind::Subject => {
                    let t2 = need_theta2()?;
                    let client: Box<dyn VlmClient> = match cfg.vlm_client_name() {
                        "http" => Box::new(HttpVlm::new(cfg.http_vlm())?),
                        _ => Box::new(MockVlm),
                    };
                    run_subject_eval(&weights, &t1, &t2, &records, client.as_ref(), &ecfg)?
                }
            };
            create_dir(&out)?;
            let mut report = run.report;
            if let Value::Object(m) = &mut report.config {
                m.insert("run_config".into(), serde_json::to_value(cfg.values())?);
            }
            let written = emit_report(&report, &run.grids, &out)?;
            cfg.write_snapshot(&out)?;
            for (k, v) in &written.metrics {
                println!("{k} = {v}");
            }
            Ok(())
        }
    }
}

fn render_prompt(image: &ImageGrid, prompt_id: usize, shape: Option<&str>, color: Option<&str>) -> Result<String> {
    let template = PromptTemplate::from_id(prompt_id)?;
    if template == PromptTemplate::Neutral {
        return Ok(template.render("", ShapeKind::Rectangle));
    }
    let shape_name = shape.ok_or_else(|| Error::config("shape", "non-neutral prompts need --shape"))?;
    let shape = ShapeKind::ALL
        .into_iter()
        .find(|s| s.name() == shape_name)
        .ok_or_else(|| Error::config("shape", format!("unknown shape {shape_name:?}")))?;
    let color = match color {
        Some(c) => c.to_string(),
        None => {
            let (h, w, _) = image.dim();
            let px = |c| structgen_core::image::quantize(image.get(h / 2, w / 2, c));
            color_name(Rgb([px(0), px(1), px(2)])).to_string()
        }
    };
    Ok(template.render(&color, shape))
}

fn train(args: TrainArgs, stage: Stage) -> Result<()> {
    let extra = match &args.mix {
        Some(m) => vec![("train.mix".to_string(), parse_flag_value("train.mix", m)?)],
        None => vec![],
    };
    let cfg = resolve(&args.cfg, extra)?;
    let tcfg = cfg.train()?;
    let datasets = args.data.iter().map(|d| Dataset::load(d)).collect::<Result<Vec<_>>>()?;
    let slices: Vec<&[_]> = datasets.iter().map(|d| d.records.as_slice()).collect();
    let weights = backbone(&cfg)?;
    let output: TrainOutput = match stage {
        Stage::Stage1 => train_stage1(&weights, &slices, &tcfg)?,
        Stage::Stage2 => train_stage2(&weights, &slices, &tcfg)?,
    };
    create_dir(&args.out)?;
    output.adapter.save(&args.out.join(ADAPTER_FILE))?;
    write_loss_csv(&output.trace, &args.out.join("loss.csv"))?;
    write_json(
        &args.out.join("train_meta.json"),
        &json!({
            "stage": stage.name(),
            "data": args.data.iter().map(|d| d.display().to_string()).collect::<Vec<_>>(),
            "backbone_checksum": output.backbone_checksum,
            "adapter_checksum": output.adapter.checksum(),
            "trainable_parameters": output.adapter.parameter_count(),
            "canny_provenance": output.provenance,
            "final_loss": output.trace.last().map(|p| p.loss),
        }),
    )?;
    cfg.write_snapshot(&args.out)?;
    println!(
        "{} trained for {} steps; adapter written to {}",
        stage.name(),
        output.trace.len(),
        args.out.join(ADAPTER_FILE).display()
    );
    Ok(())
}
