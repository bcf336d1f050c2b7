//! Command-line verbs.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use image::RgbImage;
use rayon::prelude::*;

use mtcolor_core::checkpoint::Checkpoint;
use mtcolor_core::color::{load_png, save_png, GrayField};
use mtcolor_core::config::ExperimentConfig;
use mtcolor_core::data::pipeline::{
    annotate_all, CaptionRules, CaptionerClient, ColorRegionDetector, DetectorClient, FailingCaptioner, FailingDetector,
    FixedCaptioner, PaletteCaptioner, SmallCropFailCaptioner, TextSource,
};
use mtcolor_core::data::{generate_synthetic, load_dataset, read_annotations, save_dataset, write_annotations, AnnotatedImage};
use mtcolor_core::diffusion::SamplerConfig;
use mtcolor_core::eval::{evaluate, request_for, run_ablation, Metric, MetricReport, Variant};
use mtcolor_core::io::write_atomic;
use mtcolor_core::multisample::{colorize, conditioning_from_instances, ColorizeRequest};
use mtcolor_core::train::{prepare_examples, train_stage, TrainEvent, Trainer};

use crate::service::{router, Engine, Service, DEFAULT_QUEUE};

#[derive(Debug, Parser)]
#[command(name = "mtcolor", version, about = "Instance-aware diffusion colorization")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic dataset of colored shapes.
    GenData {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Detect and caption instances in a directory of PNGs.
    Annotate {
        #[arg(long)]
        images: PathBuf,
        /// `color-regions` or `failing`.
        #[arg(long)]
        detector: String,
        /// `palette`, `failing`, `refusal`, `small-crop:N` or `fixed:TEXT`.
        #[arg(long)]
        primary: String,
        #[arg(long)]
        fallback: String,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train one stage.
    Train {
        #[arg(long, value_parser = clap::value_parser!(u8).range(1..=2))]
        stage: u8,
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Continue this stage, or start stage 2 from a stage-1 checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Colorize one grayscale image.
    Sample {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        gray: PathBuf,
        /// Annotation file holding the record for this image.
        #[arg(long)]
        ann: PathBuf,
        #[command(flatten)]
        sampler: SamplerArgs,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        luma_lock: bool,
    },
    /// Colorize a dataset and score the results.
    Eval {
        /// Without a checkpoint the dataset images themselves are scored.
        #[arg(long)]
        ckpt: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value = "colorfulness,psnr,ssim,fidelity")]
        metrics: String,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        sampler: SamplerArgs,
    },
    /// Compare model variants on a dataset.
    Ablate {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value = "full,no-mask,no-instance,ddim")]
        variants: String,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        sampler: SamplerArgs,
    },
    /// Serve the HTTP API. `MTCOLOR_ADDR` overrides `--addr`.
    Serve {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long, default_value = "127.0.0.1:8080")]
        addr: String,
        #[arg(long = "static")]
        static_dir: Option<PathBuf>,
        #[arg(long, default_value_t = 1)]
        workers: usize,
        #[arg(long, default_value_t = DEFAULT_QUEUE)]
        queue: usize,
    },
}

#[derive(Debug, Args)]
pub struct SamplerArgs {
    #[arg(long, default_value_t = 0.2)]
    pub alpha: f64,
    #[arg(long, default_value_t = 0.2)]
    pub beta: f64,
    #[arg(long, default_value_t = 20)]
    pub steps: usize,
    #[arg(long, default_value_t = 3.0)]
    pub guidance: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

impl SamplerArgs {
    pub fn config(&self) -> SamplerConfig {
        SamplerConfig {
            ddim_steps: self.steps,
            guidance_scale: self.guidance,
            alpha: self.alpha,
            beta: self.beta,
            seed: self.seed,
            ..SamplerConfig::default()
        }
    }
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenData { config, out } => gen_data(&config, &out),
        Command::Annotate { images, detector, primary, fallback, out } => {
            annotate(&images, &detector, &primary, &fallback, &out)
        }
        Command::Train { stage, config, data, out, resume } => train(stage, &config, &data, &out, resume.as_deref()),
        Command::Sample { ckpt, gray, ann, sampler, out, luma_lock } => {
            sample(&ckpt, &gray, &ann, &sampler.config(), luma_lock, &out)
        }
        Command::Eval { ckpt, data, metrics, out, sampler } => {
            eval(ckpt.as_deref(), &data, &metrics, &sampler.config(), &out)
        }
        Command::Ablate { ckpt, data, variants, out, sampler } => ablate(&ckpt, &data, &variants, &sampler.config(), &out),
        Command::Serve { ckpt, addr, static_dir, workers, queue } => {
            let addr = std::env::var("MTCOLOR_ADDR").ok().filter(|a| !a.is_empty()).unwrap_or(addr);
            serve(&ckpt, &addr, static_dir, workers, queue)
        }
    }
}

fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    Checkpoint::load(path).with_context(|| format!("loading {}", path.display()))
}

fn write_json<T: serde::Serialize>(value: &T, path: &Path) -> Result<()> {
    let mut bytes = serde_json::to_vec_pretty(value)?;
    bytes.push(b'\n');
    write_atomic(path, &bytes).with_context(|| format!("writing {}", path.display()))
}

pub fn gen_data(config: &Path, out: &Path) -> Result<()> {
    let cfg = ExperimentConfig::load(config)?;
    let items: Vec<_> = generate_synthetic(&cfg.synth)?.into_iter().map(|s| (s.image, s.annotation)).collect();
    save_dataset(out, &items).with_context(|| format!("writing dataset to {}", out.display()))?;
    println!("wrote {} images to {}", items.len(), out.display());
    Ok(())
}

pub fn detector_by_name(name: &str) -> Result<Box<dyn DetectorClient>> {
    Ok(match name {
        "color-regions" => Box::new(ColorRegionDetector::default()),
        "failing" => Box::new(FailingDetector),
        other => bail!("unknown detector `{other}` (expected color-regions or failing)"),
    })
}

pub fn captioner_by_name(name: &str) -> Result<Box<dyn CaptionerClient>> {
    if let Some(text) = name.strip_prefix("fixed:") {
        return Ok(Box::new(FixedCaptioner::new(text)));
    }
    if let Some(n) = name.strip_prefix("small-crop:") {
        let n = n.parse().with_context(|| format!("bad crop size in `{name}`"))?;
        return Ok(Box::new(SmallCropFailCaptioner::new(n)));
    }
    Ok(match name {
        "palette" => Box::new(PaletteCaptioner::new()),
        "failing" => Box::new(FailingCaptioner::new()),
        "refusal" => Box::new(FixedCaptioner::new("Unable to provide color description, image is too blurred and unclear.")),
        other => bail!("unknown captioner `{other}` (expected palette, failing, refusal, small-crop:N or fixed:TEXT)"),
    })
}

/// `FILE` → `FILE.provenance.jsonl`.
pub fn provenance_path(out: &Path) -> PathBuf {
    let mut s = out.as_os_str().to_owned();
    s.push(".provenance.jsonl");
    PathBuf::from(s)
}

fn list_pngs(dir: &Path) -> Result<Vec<(String, RgbImage)>> {
    let mut paths: Vec<PathBuf> = std::fs::read_dir(dir)
        .with_context(|| format!("reading {}", dir.display()))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x.eq_ignore_ascii_case("png")))
        .collect();
    paths.sort();
    paths
        .iter()
        .map(|p| {
            let id = p.file_stem().and_then(|s| s.to_str()).context("non-UTF-8 file name")?.to_string();
            Ok((id, load_png(p)?))
        })
        .collect()
}

pub fn annotate(images: &Path, detector: &str, primary: &str, fallback: &str, out: &Path) -> Result<()> {
    let (detector, primary, fallback) = (detector_by_name(detector)?, captioner_by_name(primary)?, captioner_by_name(fallback)?);
    let inputs = list_pngs(images)?;
    let results = annotate_all(&inputs, detector.as_ref(), primary.as_ref(), fallback.as_ref(), &CaptionRules::default())?;
    let records: Vec<AnnotatedImage> = results.iter().map(|(a, _)| a.clone()).collect();
    write_annotations(&records, out)?;
    let mut lines = String::new();
    for (_, p) in &results {
        lines.push_str(&serde_json::to_string(p)?);
        lines.push('\n');
    }
    write_atomic(&provenance_path(out), lines.as_bytes())?;
    let count = |s| results.iter().map(|(_, p)| p.count(s)).sum::<usize>();
    println!(
        "annotated {} images: {} primary, {} fallback, {} uncaptioned instances",
        results.len(),
        count(TextSource::Primary),
        count(TextSource::Fallback),
        count(TextSource::None)
    );
    Ok(())
}

pub fn train(stage: u8, config: &Path, data: &Path, out: &Path, resume: Option<&Path>) -> Result<()> {
    let cfg = ExperimentConfig::load(config)?;
    let mut tcfg = cfg.train.clone();
    tcfg.stage = stage;
    let init = resume.map(load_checkpoint).transpose()?;
    let model_size = init.as_ref().map_or(cfg.model.image_size, |c| c.header.model.image_size);
    let items = load_dataset(data).with_context(|| format!("loading dataset {}", data.display()))?;
    if let Some((img, a)) = items.iter().find(|(img, _)| img.width() as usize != model_size || img.height() as usize != model_size) {
        bail!("image {} is {}×{}, model expects {model_size}×{model_size}", a.image_id, img.width(), img.height());
    }
    let examples = prepare_examples(&items)?;
    let every = (tcfg.iterations / 20).max(1);
    let mut sink = |e: TrainEvent<'_>| {
        match e {
            TrainEvent::Step(r) if r.iteration % every == 0 || r.iteration == tcfg.iterations => {
                eprintln!("stage {stage} iter {} loss {:.5} lr {:.2e} grad {:.3}", r.iteration, r.loss, r.lr, r.grad_norm)
            }
            TrainEvent::Checkpoint(c) => c.save(out)?,
            _ => {}
        }
        Ok(())
    };
    let ckpt = match init {
        // Same stage: continue the run, optimizer state included.
        Some(c) if c.header.stage == stage && c.header.train.is_some() => {
            let mut t = Trainer::resume(&c, cfg.schedule.build()?, tcfg.clone())?;
            t.run(&examples, &mut sink)?;
            t.checkpoint()
        }
        init => train_stage(&tcfg, &examples, cfg.schedule.build()?, &cfg.model, init.as_ref(), &mut sink)?,
    };
    ckpt.save(out).with_context(|| format!("writing {}", out.display()))?;
    println!("stage {stage} done at iteration {}; checkpoint {} ({})", ckpt.header.iteration, out.display(), ckpt.hash()?);
    Ok(())
}

/// The record for `gray`: the only one in the file, or the one whose id is
/// the file stem.
fn find_record(records: Vec<AnnotatedImage>, gray: &Path) -> Result<AnnotatedImage> {
    if records.len() == 1 {
        return Ok(records.into_iter().next().expect("one record"));
    }
    let stem = gray.file_stem().and_then(|s| s.to_str()).unwrap_or_default();
    let n = records.len();
    records
        .into_iter()
        .find(|r| r.image_id == stem)
        .with_context(|| format!("annotation file has {n} records and none with id `{stem}`"))
}

pub fn sample(ckpt: &Path, gray: &Path, ann: &Path, sampler: &SamplerConfig, luma_lock: bool, out: &Path) -> Result<()> {
    let c = load_checkpoint(ckpt)?;
    let engine = Engine::from_checkpoint(&c)?;
    let img = load_png(gray)?;
    let record = find_record(read_annotations(ann)?, gray)?;
    if (img.width() as usize, img.height() as usize) != (record.width, record.height) {
        bail!("gray image is {}×{} but annotation {} is {}×{}", img.width(), img.height(), record.image_id, record.width, record.height);
    }
    let instances: Vec<_> =
        record.instances.iter().filter(|i| !i.text.is_empty()).map(|i| (i.mask.clone(), i.text.clone())).collect();
    let cond = conditioning_from_instances(GrayField::from_rgb(&img), &record.global_text, &instances)?;
    let mut req = ColorizeRequest::new(cond, sampler.clone());
    req.luma_lock = luma_lock;
    let result = colorize(&req, &engine.model, &engine.store, &engine.schedule)?;
    let mut prov = result.provenance;
    prov.checkpoint_hash = Some(engine.checkpoint_hash.clone());
    save_png(&result.image, out)?;
    write_json(&prov, &out.with_extension("json"))?;
    println!(
        "alpha={} beta={} steps={} guidance={} seed={} instances={} -> {}",
        prov.sampler.alpha,
        prov.sampler.beta,
        prov.sampler.ddim_steps,
        prov.sampler.guidance_scale,
        prov.seed,
        prov.instances.len(),
        out.display()
    );
    Ok(())
}

fn print_summary(report: &MetricReport) {
    println!("{:<14}{:>8}{:>12}{:>12}", "metric", "count", "mean", "std");
    for (name, s) in &report.summary {
        println!("{name:<14}{:>8}{:>12.4}{:>12.4}", s.count, s.mean, s.std);
    }
}

pub fn eval(ckpt: Option<&Path>, data: &Path, metrics: &str, sampler: &SamplerConfig, out: &Path) -> Result<()> {
    let metrics = metrics.split(',').filter(|m| !m.trim().is_empty()).map(str::parse).collect::<Result<Vec<Metric>, _>>()?;
    if metrics.is_empty() {
        bail!("no metrics given");
    }
    let items = load_dataset(data).with_context(|| format!("loading dataset {}", data.display()))?;
    let (scored, config) = match ckpt {
        None => (
            items.into_iter().map(|(img, a)| (img.clone(), img, a)).collect::<Vec<_>>(),
            serde_json::json!({"source": "dataset images", "data": data}),
        ),
        Some(path) => {
            let c = load_checkpoint(path)?;
            let engine = Engine::from_checkpoint(&c)?;
            let preds = items
                .par_iter()
                .map(|(img, a)| {
                    let req = request_for(img, a, sampler)?;
                    Ok(colorize(&req, &engine.model, &engine.store, &engine.schedule)?.image)
                })
                .collect::<mtcolor_core::Result<Vec<_>>>()?;
            let scored = preds.into_iter().zip(items).map(|(p, (img, a))| (p, img, a)).collect();
            (scored, serde_json::json!({"checkpoint_hash": engine.checkpoint_hash, "sampler": sampler, "data": data}))
        }
    };
    let report = evaluate(&scored, &metrics, config)?;
    write_json(&report, out)?;
    print_summary(&report);
    Ok(())
}

pub fn ablate(ckpt: &Path, data: &Path, variants: &str, sampler: &SamplerConfig, out: &Path) -> Result<()> {
    let variants = variants.split(',').filter(|v| !v.trim().is_empty()).map(str::parse).collect::<Result<Vec<Variant>, _>>()?;
    if variants.is_empty() {
        bail!("no variants given");
    }
    let c = load_checkpoint(ckpt)?;
    let engine = Engine::from_checkpoint(&c)?;
    let items = load_dataset(data).with_context(|| format!("loading dataset {}", data.display()))?;
    let report = run_ablation(&engine.model, &engine.store, &engine.schedule, &items, &variants, sampler, true)?;
    write_json(&report, out)?;
    println!("{:<12}{:>10}{:>10}{:>10}{:>10}{:>10}", "variant", "fidelity", "leakage", "psnr", "ssim", "colorful");
    for r in &report.results {
        let leak = r.leakage.map_or_else(|| "-".to_string(), |l| format!("{l:.4}"));
        println!(
            "{:<12}{:>10.4}{:>10}{:>10.2}{:>10.4}{:>10.2}",
            r.variant.name(),
            r.fidelity,
            leak,
            r.psnr,
            r.ssim,
            r.colorfulness
        );
    }
    Ok(())
}

pub fn serve(ckpt: &Path, addr: &str, static_dir: Option<PathBuf>, workers: usize, queue: usize) -> Result<()> {
    if workers == 0 || queue == 0 {
        bail!("--workers and --queue must be positive");
    }
    if let Some(dir) = &static_dir {
        if !dir.is_dir() {
            bail!("static directory {} does not exist", dir.display());
        }
    }
    let c = load_checkpoint(ckpt)?;
    let svc = Service::new(Engine::from_checkpoint(&c)?, queue);
    svc.spawn_workers(workers);
    let app = router(svc, static_dir);
    let rt = tokio::runtime::Runtime::new()?;
    rt.block_on(async {
        let listener = tokio::net::TcpListener::bind(addr).await.with_context(|| format!("binding {addr}"))?;
        println!("listening on http://{}", listener.local_addr()?);
        axum::serve(listener, app)
            .with_graceful_shutdown(async {
                let _ = tokio::signal::ctrl_c().await;
            })
            .await?;
        Ok(())
    })
}
