//! Subcommand bodies.

use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use clickseg::checkpoint::{load_checkpoint, load_model};
use clickseg::data::{
    encode_mask_png, load_dataset, load_dataset_with, read_rgb, synth_generate, write_dataset, ShapeMix,
    SynthConfig,
};
use clickseg::head::HeadMode;
use clickseg::mask::reflect_pad_image;
use clickseg::metrics::{evaluate_dataset, simulate as simulate_one, EvalConfig};
use clickseg::numeric::AdamConfig;
use clickseg::trainer::{TrainConfig, Trainer};
use clickseg::{Click, Model, ModelConfig};
use clickseg_server::{router, ServiceConfig, SessionManager};
use serde::Serialize;

use crate::config::{describe, key, Key, Resolved};
use crate::{CliError, ConfigArgs};

type Flags<'a> = &'a [(&'static str, Option<String>)];

fn resolve(schema: &[Key], args: &ConfigArgs, flags: Flags) -> Result<Option<Resolved>, CliError> {
    if args.list_keys {
        print!("{}", describe(schema));
        return Ok(None);
    }
    Resolved::resolve(schema, args.config.as_deref(), &args.set, flags).map(Some)
}

/// Prints the resolved configuration and, when `dir` is given, stores it
/// there as `config.txt`.
fn record_config(cfg: &Resolved, dir: Option<&Path>) -> Result<(), CliError> {
    eprint!("{}", cfg.render());
    if let Some(dir) = dir {
        fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
        let p = dir.join("config.txt");
        fs::write(&p, cfg.render()).map_err(|e| CliError::io(p, e))?;
    }
    Ok(())
}

fn usage(msg: impl Into<String>) -> CliError {
    CliError::Usage(msg.into())
}

const SYNTH_KEYS: &[Key] = &[
    key("out", "", "output directory (required)"),
    key("seed", "0", "generator seed"),
    key("count", "200", "number of samples"),
    key("height", "112", "canvas height"),
    key("width", "112", "canvas width"),
    key("first_index", "0", "index of the first sample; disjoint ranges give disjoint splits"),
    key("mix.ellipse", "0.4", "relative frequency of ellipses"),
    key("mix.polygon", "0.4", "relative frequency of polygons"),
    key("mix.bar", "0.1", "relative frequency of thin bars"),
    key("mix.multi_part", "0.1", "relative frequency of multi-part objects"),
    key("patch_size", "14", "canvas sides must be multiples of this"),
];

pub fn synth(args: &ConfigArgs, flags: Flags) -> Result<(), CliError> {
    let Some(cfg) = resolve(SYNTH_KEYS, args, flags)? else {
        return Ok(());
    };
    let out = cfg.path("out")?;
    let synth = SynthConfig {
        seed: cfg.get("seed")?,
        count: cfg.get("count")?,
        height: cfg.get("height")?,
        width: cfg.get("width")?,
        first_index: cfg.get("first_index")?,
        mix: ShapeMix {
            ellipse: cfg.get("mix.ellipse")?,
            polygon: cfg.get("mix.polygon")?,
            bar: cfg.get("mix.bar")?,
            multi_part: cfg.get("mix.multi_part")?,
        },
    };
    synth.validate(cfg.get("patch_size")?)?;
    record_config(&cfg, Some(&out))?;
    let samples = synth_generate(&synth);
    let manifest = write_dataset(&out, &samples)?;
    eprintln!("wrote {} samples to {}", manifest.entries.len(), out.display());
    Ok(())
}

const TRAIN_KEYS: &[Key] = &[
    key("preset", "toy", "toy | vitb: model shape and training defaults"),
    key("data", "", "training dataset directory or manifest (required)"),
    key("out", "", "run directory for checkpoints and curve.jsonl (required)"),
    key("resume", "", "training checkpoint to continue from"),
    key("mode", "full", "full | baseline head"),
    key("fusion_depth", "", "fusion blocks in the head"),
    key("init_seed", "0", "weight initialisation seed"),
    key("epochs", "", "training epochs"),
    key("epoch_size", "", "samples per epoch; `all` for one pass"),
    key("lr", "", "base learning rate"),
    key("beta1", "", "Adam beta1"),
    key("beta2", "", "Adam beta2"),
    key("eps", "", "Adam epsilon"),
    key("lr_decay_epochs", "", "epochs after which the rate is decayed"),
    key("lr_decay_factor", "", "decay multiplier"),
    key("batch_size", "", "samples per step"),
    key("crop", "", "training crop side"),
    key("max_initial_clicks", "", "upper bound of the initial click count"),
    key("iterative_rounds", "", "corrective rounds per sample"),
    key("focal_gamma", "", "focal loss exponent"),
    key("metric_click_prob", "", "probability of a simulator click in corrective rounds"),
    key("freeze_backbone", "", "keep backbone weights fixed"),
    key("seed", "0", "training seed"),
    key("keep_checkpoints", "", "per-epoch checkpoints kept on disk"),
];

fn fill_train_defaults(cfg: &mut Resolved, t: &TrainConfig, head_depth: usize) {
    cfg.fill("fusion_depth", head_depth);
    cfg.fill("epochs", t.epochs);
    cfg.fill("epoch_size", t.epoch_size.map_or("all".to_string(), |n| n.to_string()));
    cfg.fill("lr", t.adam.lr);
    cfg.fill("beta1", t.adam.beta1);
    cfg.fill("beta2", t.adam.beta2);
    cfg.fill("eps", t.adam.eps);
    let decays: Vec<String> = t.lr_decay_epochs.iter().map(ToString::to_string).collect();
    cfg.fill("lr_decay_epochs", decays.join(","));
    cfg.fill("lr_decay_factor", t.lr_decay_factor);
    cfg.fill("batch_size", t.batch_size);
    cfg.fill("crop", t.crop);
    cfg.fill("max_initial_clicks", t.max_initial_clicks);
    cfg.fill("iterative_rounds", t.iterative_rounds);
    cfg.fill("focal_gamma", t.focal_gamma);
    cfg.fill("metric_click_prob", t.metric_click_prob);
    cfg.fill("freeze_backbone", t.freeze_backbone);
    cfg.fill("keep_checkpoints", t.keep_checkpoints);
}

fn build_train_config(cfg: &Resolved, base: TrainConfig) -> Result<TrainConfig, CliError> {
    let epoch_size = match cfg.raw("epoch_size") {
        "all" => None,
        _ => Some(cfg.get("epoch_size")?),
    };
    Ok(TrainConfig {
        adam: AdamConfig {
            lr: cfg.get("lr")?,
            beta1: cfg.get("beta1")?,
            beta2: cfg.get("beta2")?,
            eps: cfg.get("eps")?,
        },
        epochs: cfg.get("epochs")?,
        epoch_size,
        lr_decay_epochs: cfg.list("lr_decay_epochs")?,
        lr_decay_factor: cfg.get("lr_decay_factor")?,
        batch_size: cfg.get("batch_size")?,
        crop: cfg.get("crop")?,
        max_initial_clicks: cfg.get("max_initial_clicks")?,
        iterative_rounds: cfg.get("iterative_rounds")?,
        focal_gamma: cfg.get("focal_gamma")?,
        metric_click_prob: cfg.get("metric_click_prob")?,
        freeze_backbone: cfg.get("freeze_backbone")?,
        seed: cfg.get("seed")?,
        keep_checkpoints: cfg.get("keep_checkpoints")?,
        ..base
    })
}

pub fn train(args: &ConfigArgs, flags: Flags) -> Result<(), CliError> {
    let Some(mut cfg) = resolve(TRAIN_KEYS, args, flags)? else {
        return Ok(());
    };
    let (mut model_config, base) = match cfg.raw("preset") {
        "toy" => (ModelConfig::toy(), TrainConfig::toy()),
        "vitb" => (ModelConfig::paper_shaped(), TrainConfig::default()),
        other => return Err(usage(format!("preset = `{other}`: expected toy or vitb"))),
    };
    let explicit_epochs: Option<usize> = if cfg.is_explicit("epochs") { Some(cfg.get("epochs")?) } else { None };
    fill_train_defaults(&mut cfg, &base, model_config.head.fusion_depth);
    let data = cfg.path("data")?;
    let out = cfg.path("out")?;
    let resume: Option<PathBuf> = cfg.opt("resume")?;

    let mut trainer = match &resume {
        Some(path) => {
            // the stored run configuration wins; only the epoch budget may grow
            let mut t = Trainer::<f32>::resume(load_checkpoint(path)?)?;
            if let Some(e) = explicit_epochs {
                t.config.epochs = e;
                t.config.validate()?;
            }
            t
        }
        None => {
            model_config.head.mode = match cfg.raw("mode") {
                "full" => HeadMode::Full,
                "baseline" => HeadMode::Baseline,
                other => return Err(usage(format!("mode = `{other}`: expected full or baseline"))),
            };
            model_config.head.fusion_depth = cfg.get("fusion_depth")?;
            model_config.init_seed = cfg.get("init_seed")?;
            let train_config = build_train_config(&cfg, base)?;
            train_config.validate()?;
            // images at eval and serve time are normalised like the training set
            let probe = load_dataset(&data)?;
            model_config.normalization = probe.normalization;
            Trainer::new(Model::new(model_config)?, train_config)?
        }
    };
    record_config(&cfg, Some(&out))?;
    let dataset = load_dataset_with(&data, Some(trainer.model.config.normalization))?;
    for s in &dataset.skipped {
        eprintln!("skipping {}: {}", s.id, s.reason);
    }
    let mut epoch_loss = (0usize, 0.0f64, 0usize);
    let last = trainer.run(&dataset.samples, Some(&out), &mut |rec| {
        if rec.epoch != epoch_loss.0 {
            epoch_loss = (rec.epoch, 0.0, 0);
        }
        epoch_loss.1 += rec.loss;
        epoch_loss.2 += 1;
    })?;
    if let Some(path) = last {
        eprintln!(
            "epoch {} done, mean loss {:.4}; checkpoint {}",
            trainer.epoch,
            epoch_loss.1 / epoch_loss.2.max(1) as f64,
            path.display()
        );
    }
    Ok(())
}

const EVAL_KEYS: &[Key] = &[
    key("checkpoint", "", "model checkpoint (required)"),
    key("data", "", "evaluation dataset (required)"),
    key("out", "", "report directory (required)"),
    key("thresholds", "0.8,0.85,0.9", "IoU thresholds"),
    key("click_cap", "20", "maximum clicks per sample"),
];

pub fn eval(args: &ConfigArgs, flags: Flags) -> Result<(), CliError> {
    let Some(cfg) = resolve(EVAL_KEYS, args, flags)? else {
        return Ok(());
    };
    let checkpoint = cfg.path("checkpoint")?;
    let data = cfg.path("data")?;
    let out = cfg.path("out")?;
    let eval_config = EvalConfig {
        thresholds: cfg.list("thresholds")?,
        click_cap: cfg.get("click_cap")?,
    };
    eval_config.validate()?;
    record_config(&cfg, Some(&out))?;
    let model = load_model::<f32>(&checkpoint)?;
    let dataset = load_dataset_with(&data, Some(model.config.normalization))?;
    let report = evaluate_dataset(&model, &dataset.samples, &dataset.skipped, &eval_config)?;
    report.write_to(&out)?;
    print!("{}", report.table());
    for s in &report.skipped {
        eprintln!("skipped {}: {}", s.id, s.reason);
    }
    if report.skipped.is_empty() {
        Ok(())
    } else {
        Err(CliError::Skipped(report.skipped.len()))
    }
}

const SIMULATE_KEYS: &[Key] = &[
    key("checkpoint", "", "model checkpoint (required)"),
    key("data", "", "dataset to simulate on"),
    key("id", "", "restrict to one sample id"),
    key("stop_at", "0.9", "stop a trace once IoU reaches this"),
    key("click_cap", "20", "maximum clicks per sample"),
    key("replay", "", "click log to replay instead of simulating"),
    key("image", "", "image for --replay"),
    key("out", "", "JSONL trace file, or the mask PNG for --replay; stdout when unset"),
];

#[derive(Serialize)]
struct StepRecord<'a> {
    id: &'a str,
    step: usize,
    click: Click,
    iou: f64,
}

#[derive(serde::Deserialize)]
#[serde(untagged)]
enum ClickLog {
    Bare(Vec<Click>),
    Export { clicks: Vec<Click> },
}

pub fn simulate(args: &ConfigArgs, flags: Flags) -> Result<(), CliError> {
    let Some(cfg) = resolve(SIMULATE_KEYS, args, flags)? else {
        return Ok(());
    };
    let model = load_model::<f32>(&cfg.path("checkpoint")?)?;
    let out: Option<PathBuf> = cfg.opt("out")?;
    if let Some(log) = cfg.opt::<PathBuf>("replay")? {
        let image: PathBuf = cfg.opt("image")?.ok_or_else(|| usage("--replay needs --image"))?;
        let out = out.ok_or_else(|| usage("--replay needs --out for the mask PNG"))?;
        let text = fs::read_to_string(&log).map_err(|e| CliError::io(&log, e))?;
        let clicks = match serde_json::from_str(&text) {
            Ok(ClickLog::Bare(c)) | Ok(ClickLog::Export { clicks: c }) => c,
            Err(e) => return Err(usage(format!("{}: not a click log: {e}", log.display()))),
        };
        let mask = replay_log(&model, &read_rgb(&image)?, &clicks)?;
        fs::write(&out, encode_mask_png(&mask)?).map_err(|e| CliError::io(&out, e))?;
        eprintln!("replayed {} clicks into {}", clicks.len(), out.display());
        return Ok(());
    }
    let data = cfg.path("data")?;
    let stop_at: f64 = cfg.get("stop_at")?;
    let cap: usize = cfg.get("click_cap")?;
    let only: Option<String> = cfg.opt("id")?;
    let dataset = load_dataset_with(&data, Some(model.config.normalization))?;
    let mut sink: Box<dyn std::io::Write> = match &out {
        Some(p) => Box::new(fs::File::create(p).map_err(|e| CliError::io(p, e))?),
        None => Box::new(std::io::stdout().lock()),
    };
    let mut seen = 0;
    for s in dataset.samples.iter().filter(|s| only.as_ref().is_none_or(|id| &s.id == id)) {
        seen += 1;
        let trace = simulate_one(&model, &s.image, &s.mask, stop_at, cap)?;
        for (k, (click, iou)) in trace.clicks.iter().zip(&trace.ious).enumerate() {
            let rec = StepRecord {
                id: &s.id,
                step: k + 1,
                click: *click,
                iou: *iou,
            };
            let line = serde_json::to_string(&rec).expect("record serialises");
            writeln!(sink, "{line}").map_err(|e| CliError::io(out.clone().unwrap_or_default(), e))?;
        }
    }
    if let Some(id) = only.filter(|_| seen == 0) {
        return Err(usage(format!("no sample with id `{id}`")));
    }
    Ok(())
}

/// Replays `clicks` on `rgb` exactly as the server does: normalise, pad,
/// encode, sequential predictions, crop back.
pub fn replay_log(model: &Model<f32>, rgb: &clickseg::data::RgbImage, clicks: &[Click]) -> Result<clickseg::Mask, CliError> {
    let (h, w) = (rgb.height() as usize, rgb.width() as usize);
    if let Some(c) = clicks.iter().find(|c| c.row >= h || c.col >= w) {
        return Err(usage(format!("click ({}, {}) lies outside the {h}x{w} image", c.row, c.col)));
    }
    let (ph, pw) = model.config.padded_dims(h, w);
    let image = reflect_pad_image(&model.config.normalization.apply(rgb), ph, pw);
    let features = model.encode(&image)?;
    Ok(model.replay(&features, clicks)?.crop(0, 0, h, w)?)
}

const SERVE_KEYS: &[Key] = &[
    key("checkpoint", "", "model checkpoint (required)"),
    key("host", "127.0.0.1", "listen address"),
    key("port", "8080", "listen port"),
    key("max_sessions", "16", "live sessions before LRU eviction"),
    key("max_pixels", "1048576", "largest accepted image area"),
];

pub fn serve(args: &ConfigArgs, flags: Flags) -> Result<(), CliError> {
    let Some(cfg) = resolve(SERVE_KEYS, args, flags)? else {
        return Ok(());
    };
    let model = load_model::<f32>(&cfg.path("checkpoint")?)?;
    let service = ServiceConfig {
        max_sessions: cfg.get("max_sessions")?,
        max_pixels: cfg.get("max_pixels")?,
    };
    if service.max_sessions == 0 {
        return Err(usage("max_sessions must be at least 1"));
    }
    record_config(&cfg, None)?;
    let addr = format!("{}:{}", cfg.raw("host"), cfg.get::<u16>("port")?);
    let manager = Arc::new(SessionManager::new(Arc::new(model), service));
    let rt = tokio::runtime::Runtime::new().map_err(|e| CliError::Serve(e.to_string()))?;
    rt.block_on(async move {
        let listener = tokio::net::TcpListener::bind(&addr)
            .await
            .map_err(|e| CliError::Serve(format!("bind {addr}: {e}")))?;
        eprintln!("listening on http://{addr}");
        axum::serve(listener, router(manager))
            .await
            .map_err(|e| CliError::Serve(e.to_string()))
    })
}
