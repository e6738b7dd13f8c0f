use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use log::info;

use usjepa::config::{ConfigError, RunConfig};
use usjepa::corruption::{corrupt, CorruptionKind, CorruptionSpec, SEVERITIES};
use usjepa::data::{prepare_manifest, PreparedFrame};
use usjepa::eval::{
    fewshot_curve, probe_scores, read_reports_csv, reports_markdown, robustness_sweep, summary_markdown, trend_test,
    write_reports_csv, ProbeReport,
};
use usjepa::frames::{synth_frame, write_frame_png, write_mask_pbm, write_rgb_png, SynthConfig};
use usjepa::masking::{render_overlay, sample_mask_set, PatchGrid};
use usjepa::model::{ModelStack, TeacherMode, TeacherSource};
use usjepa::objective::LossKind;
use usjepa::par::map_indexed;
use usjepa::pipeline::{self, PipelineError};
use usjepa::rng::{derive_seed, rng_for};
use usjepa::sampling::{DatasetManifest, FrameRecord, FrameSource};

#[derive(Parser)]
#[command(name = "usjepa", version, about = "Latent masked prediction pretraining and probing for ultrasound frames")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Render a labelled synthetic corpus (PNG frames, PBM region masks, manifest).
    SynthData(SynthArgs),
    /// Preprocess every record of a manifest and write the prepared frames.
    Preprocess(PreprocessArgs),
    /// Pretrain student, predictor and adapter against the configured teacher.
    Pretrain(PretrainArgs),
    /// Linear probe on frozen features, one score per seed.
    Probe(EvalArgs),
    /// Probe scores at reduced label fractions.
    Fewshot(EvalArgs),
    /// Probe scores under test-time corruptions of increasing severity.
    CorruptSweep(EvalArgs),
    /// Overlay sampled context and target blocks on corpus frames.
    MaskViz(MaskVizArgs),
    /// Collect probe CSVs under a directory into markdown tables.
    Report(ReportArgs),
    /// Write every corruption kind and severity for a few test frames.
    CorruptGallery(GalleryArgs),
}

#[derive(Args, Clone)]
struct Common {
    /// TOML run configuration; defaults to the paper-scale settings.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, default_value = "out")]
    out: PathBuf,
    /// Worker threads (0 = all cores). `1` makes runs bit-reproducible.
    #[arg(long, env = "USJEPA_WORKERS")]
    workers: Option<usize>,
}

#[derive(Clone, Copy, ValueEnum)]
enum Toggle {
    On,
    Off,
}

#[derive(Clone, Copy, ValueEnum)]
enum TeacherModeArg {
    Static,
    Ema,
}

#[derive(Args)]
struct PretrainArgs {
    #[command(flatten)]
    common: Common,
    /// random, snapshot:PATH or checkpoint:PATH; implies a static teacher.
    #[arg(long)]
    teacher: Option<TeacherSource>,
    #[arg(long, value_enum)]
    teacher_mode: Option<TeacherModeArg>,
    /// Restrict masks to the ultrasound region.
    #[arg(long, value_enum)]
    usrc: Option<Toggle>,
    #[arg(long)]
    loss: Option<LossKind>,
}

#[derive(Args)]
struct SynthArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    classes: Option<usize>,
    #[arg(long)]
    count: Option<usize>,
    /// Frame side in pixels.
    #[arg(long)]
    size: Option<usize>,
}

#[derive(Args)]
struct PreprocessArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    manifest: PathBuf,
}

#[derive(Args)]
struct EvalArgs {
    #[command(flatten)]
    common: Common,
    /// Pretraining run directory; its config is used unless --config is given.
    #[arg(long)]
    run: Option<PathBuf>,
    /// Checkpoint holding the backbone weights.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Probe a randomly initialized encoder instead of a checkpoint.
    #[arg(long, conflicts_with_all = ["run", "checkpoint"])]
    random_init: bool,
    /// Backbone name used in reports.
    #[arg(long)]
    name: Option<String>,
}

#[derive(Args)]
struct MaskVizArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long, default_value_t = 8)]
    count: usize,
    #[arg(long, value_enum)]
    usrc: Option<Toggle>,
}

#[derive(Args)]
struct ReportArgs {
    /// Directory searched recursively for probe CSVs; report.md is written here.
    #[arg(long, default_value = "out")]
    out: PathBuf,
}

#[derive(Args)]
struct GalleryArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long, default_value_t = 4)]
    count: usize,
}

/// Marks failures caused by invalid configuration or arguments.
#[derive(Debug)]
struct UsageError(String);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

fn usage(msg: impl Into<String>) -> anyhow::Error {
    anyhow::Error::new(UsageError(msg.into()))
}

fn is_config_error(err: &anyhow::Error) -> bool {
    err.chain().any(|e| {
        e.is::<UsageError>() || e.is::<ConfigError>() || e.downcast_ref::<PipelineError>().is_some_and(|p| p.is_config())
    })
}

fn load_config(common: &Common, fallback: Option<&Path>) -> Result<RunConfig> {
    let path = common.config.as_deref().or(fallback);
    let mut cfg = match path {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    if let Some(w) = common.workers {
        cfg.workers = w;
    }
    Ok(cfg)
}

fn create_out(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("cannot create output directory {}", dir.display()))
}

fn synth_data(args: &SynthArgs) -> Result<()> {
    let cfg = load_config(&args.common, None)?;
    let classes = args.classes.unwrap_or(cfg.corpus.classes);
    let count = args.count.unwrap_or(cfg.corpus.synthetic_count);
    let size = args.size.unwrap_or(cfg.data.input_size);
    if classes == 0 || count == 0 || size < 8 {
        return Err(usage("synth-data needs classes >= 1, count >= 1 and size >= 8"));
    }
    let synth = SynthConfig {
        height: size,
        width: size,
        classes,
        ..cfg.data.synth.clone()
    };
    let out = &args.common.out;
    create_out(&out.join("frames"))?;
    create_out(&out.join("masks"))?;
    let seed = cfg.seed;
    let written = map_indexed(count, cfg.workers, |i| -> Result<FrameRecord> {
        let class = i % classes;
        let s = synth_frame(class, derive_seed(seed, &[i as u64]), &synth)?;
        let frame = PathBuf::from(format!("frames/{i:05}.png"));
        let mask = PathBuf::from(format!("masks/{i:05}.pbm"));
        write_frame_png(&s.frame, &out.join(&frame))?;
        write_mask_pbm(&s.region, &out.join(&mask))?;
        Ok(FrameRecord {
            dataset_id: cfg.corpus.dataset_id.clone(),
            source: FrameSource::Path(frame),
            label: Some(class),
            mask: Some(mask),
        })
    });
    let records = written.into_iter().collect::<Result<Vec<_>>>()?;
    let manifest = DatasetManifest::from_records(records, cfg.corpus.threshold, seed);
    manifest.write(&out.join("manifest.tsv"))?;
    info!("wrote {count} frames in {classes} classes to {}", out.display());
    Ok(())
}

fn preprocess(args: &PreprocessArgs) -> Result<()> {
    let cfg = load_config(&args.common, None)?;
    let manifest = DatasetManifest::read(&args.manifest)?;
    let prepared = prepare_manifest(&manifest, &cfg.data, cfg.workers)?;
    let out = &args.common.out;
    create_out(&out.join("frames"))?;
    create_out(&out.join("masks"))?;
    let mut records = Vec::with_capacity(prepared.len());
    let mut log = String::new();
    for (i, (rec, p)) in manifest.records().zip(&prepared).enumerate() {
        let frame = PathBuf::from(format!("frames/{i:05}.png"));
        let mask = PathBuf::from(format!("masks/{i:05}.pbm"));
        write_frame_png(&p.frame, &out.join(&frame))?;
        write_mask_pbm(&p.region, &out.join(&mask))?;
        for note in &p.notes {
            log.push_str(&format!("{}\t{note:?}\n", rec.source));
        }
        records.push(FrameRecord {
            dataset_id: rec.dataset_id.clone(),
            source: FrameSource::Path(frame),
            label: p.label,
            mask: Some(mask),
        });
    }
    DatasetManifest::from_records(records, manifest.threshold, manifest.seed).write(&out.join("manifest.tsv"))?;
    fs::write(out.join("preprocess.log"), log)?;
    info!("prepared {} frames into {}", prepared.len(), out.display());
    Ok(())
}

fn pretrain(args: &PretrainArgs) -> Result<()> {
    let mut cfg = load_config(&args.common, None)?;
    match (args.teacher_mode, &args.teacher) {
        (Some(TeacherModeArg::Ema), Some(_)) => return Err(usage("--teacher applies to static teachers only")),
        (Some(TeacherModeArg::Ema), None) => {
            if !matches!(cfg.model.teacher, TeacherMode::Ema { .. }) {
                cfg.model.teacher = TeacherMode::ema_default();
            }
        }
        (_, Some(source)) => {
            cfg.model.teacher = TeacherMode::Static { source: source.clone() };
        }
        (Some(TeacherModeArg::Static), None) => {
            if !cfg.model.teacher.is_static() {
                cfg.model.teacher = TeacherMode::Static {
                    source: TeacherSource::Random,
                };
            }
        }
        (None, None) => {}
    }
    if let Some(u) = args.usrc {
        cfg.train.usrc = matches!(u, Toggle::On);
    }
    if let Some(kind) = args.loss {
        cfg.train.loss.kind = kind;
    }
    cfg.validate()?;
    let out = &args.common.out;
    create_out(out)?;
    let summary = pipeline::run_pretrain(&cfg, out)?;
    if summary.teacher_digest_before != summary.teacher_digest_after && cfg.model.teacher.is_static() {
        bail!("static teacher weights changed during training");
    }
    let text = format!(
        "{{\"epochs\":{},\"steps\":{},\"best_epoch\":{},\"best_val_loss\":{},\"fallbacks\":{},\"rejected\":{},\"teacher_before\":\"{}\",\"teacher_after\":\"{}\"}}\n",
        summary.epochs,
        summary.steps,
        summary.best_epoch.map_or("null".into(), |e| e.to_string()),
        summary.best_val_loss.map_or("null".into(), |v| v.to_string()),
        summary.fallbacks,
        summary.rejected,
        summary.teacher_digest_before,
        summary.teacher_digest_after,
    );
    fs::write(out.join("summary.json"), text)?;
    info!(
        "finished {} epochs ({} steps); best epoch {:?}",
        summary.epochs, summary.steps, summary.best_epoch
    );
    Ok(())
}

struct Backbone {
    cfg: RunConfig,
    stack: ModelStack<f32>,
    name: String,
}

fn load_eval_backbone(args: &EvalArgs) -> Result<Backbone> {
    let run_config = args.run.as_ref().map(|r| r.join("config.toml"));
    let cfg = load_config(&args.common, run_config.as_deref())?;
    let checkpoint = match (&args.checkpoint, &args.run) {
        (Some(c), _) => Some(c.clone()),
        (None, Some(run)) => Some(
            pipeline::run_checkpoint(run).ok_or_else(|| usage(format!("{} holds no checkpoint", run.display())))?,
        ),
        (None, None) if args.random_init => None,
        (None, None) => return Err(usage("pass --run, --checkpoint or --random-init")),
    };
    let stack = pipeline::load_backbone(&cfg, checkpoint.as_deref())?;
    let name = args.name.clone().unwrap_or_else(|| match (&args.run, &checkpoint) {
        (Some(run), _) => run.file_name().map_or("run".into(), |s| s.to_string_lossy().into_owned()),
        (None, Some(c)) => c.file_stem().map_or("checkpoint".into(), |s| s.to_string_lossy().into_owned()),
        (None, None) => "random-init".into(),
    });
    Ok(Backbone { cfg, stack, name })
}

fn write_reports(out: &Path, stem: &str, reports: &[ProbeReport], extra: &str) -> Result<()> {
    create_out(out)?;
    write_reports_csv(&out.join(format!("{stem}.csv")), reports)?;
    fs::write(out.join(format!("{stem}.md")), format!("{}{extra}", reports_markdown(reports)))?;
    Ok(())
}

#[derive(Clone, Copy)]
enum EvalKind {
    Probe,
    Fewshot,
    Sweep,
}

fn evaluate(args: &EvalArgs, kind: EvalKind) -> Result<()> {
    let Backbone { cfg, stack, name } = load_eval_backbone(args)?;
    let digest = stack.params_digest();
    let frames = pipeline::task_frames(&cfg)?;
    let features = pipeline::task_features(&stack, &name, &frames, cfg.workers)?;
    let out = &args.common.out;
    match kind {
        EvalKind::Probe => {
            let scores = probe_scores(&features, &cfg.probe, cfg.seed)?;
            let report = ProbeReport::new(&features.task, &name, 1.0, None, scores);
            info!("{}: macro-F1 {:.4} ± {:.4}", name, report.mean, report.std);
            write_reports(out, "probe", &[report], "")?;
        }
        EvalKind::Fewshot => {
            let reports = fewshot_curve(&features, &cfg.eval.fractions, &cfg.probe, cfg.seed)?;
            write_reports(out, "fewshot", &reports, "")?;
        }
        EvalKind::Sweep => {
            let reports = robustness_sweep(
                &stack,
                &features,
                &frames.test,
                &cfg.eval.corruptions,
                &cfg.probe,
                cfg.seed,
                cfg.workers,
            )?;
            let mut extra = String::from("\n| corruption | mean slope | non-increasing |\n|---|---|---|\n");
            for k in &cfg.eval.corruptions {
                let grid: Vec<Vec<f64>> = reports
                    .iter()
                    .filter(|r| r.corruption.is_some_and(|(c, _)| c == *k))
                    .map(|r| r.scores.clone())
                    .collect();
                let t = trend_test(&grid);
                extra.push_str(&format!("| {k} | {:.4} | {} |\n", t.mean_slope, t.non_increasing));
            }
            write_reports(out, "robustness", &reports, &extra)?;
        }
    }
    if stack.params_digest() != digest {
        bail!("backbone weights changed during evaluation");
    }
    Ok(())
}

fn mask_viz(args: &MaskVizArgs) -> Result<()> {
    let cfg = load_config(&args.common, None)?;
    let usrc = args.usrc.map_or(cfg.train.usrc, |u| matches!(u, Toggle::On));
    let manifest = pipeline::corpus_manifest(&cfg)?;
    let records: Vec<FrameRecord> = manifest.records().take(args.count).cloned().collect();
    let subset = DatasetManifest {
        datasets: DatasetManifest::from_records(records, manifest.threshold, manifest.seed).datasets,
        ..manifest.clone()
    };
    let frames = prepare_manifest(&subset, &cfg.data, cfg.workers)?;
    let out = &args.common.out;
    create_out(out)?;
    let mut fallbacks = 0;
    for (i, f) in frames.iter().enumerate() {
        let grid = PatchGrid::new(f.frame.height(), f.frame.width(), cfg.model.encoder.patch_size)?;
        let region = usrc.then_some(&f.region);
        let masks = sample_mask_set(&grid, region, &cfg.masking, &mut rng_for(cfg.seed, &[0x4D56, i as u64]))?;
        fallbacks += masks.fallbacks;
        let rgb = render_overlay(&f.frame, &grid, &masks);
        write_rgb_png(f.frame.height(), f.frame.width(), rgb, &out.join(format!("mask-{i:03}.png")))?;
    }
    info!("wrote {} overlays ({fallbacks} fallback blocks)", frames.len());
    Ok(())
}

fn report(args: &ReportArgs) -> Result<()> {
    let mut csvs = Vec::new();
    let mut stack = vec![args.out.clone()];
    while let Some(dir) = stack.pop() {
        for entry in fs::read_dir(&dir).with_context(|| format!("cannot list {}", dir.display()))? {
            let p = entry?.path();
            if p.is_dir() {
                stack.push(p);
            } else if p.extension().is_some_and(|e| e == "csv") {
                csvs.push(p);
            }
        }
    }
    csvs.sort();
    let mut reports = Vec::new();
    for p in &csvs {
        match read_reports_csv(p) {
            Ok(r) => reports.extend(r),
            Err(e) => log::warn!("skipping {}: {e}", p.display()),
        }
    }
    if reports.is_empty() {
        bail!("no probe reports under {}", args.out.display());
    }
    let text = format!(
        "# Macro-F1 (mean ± std over seeds)\n\n{}\n## All settings\n\n{}",
        summary_markdown(&reports),
        reports_markdown(&reports)
    );
    fs::write(args.out.join("report.md"), &text)?;
    print!("{text}");
    Ok(())
}

fn corrupt_gallery(args: &GalleryArgs) -> Result<()> {
    let cfg = load_config(&args.common, None)?;
    let frames = pipeline::task_frames(&cfg)?;
    let out = &args.common.out;
    create_out(out)?;
    let chosen: Vec<&PreparedFrame> = frames.test.iter().take(args.count).collect();
    for (i, f) in chosen.iter().enumerate() {
        write_frame_png(&f.frame, &out.join(format!("{i:03}-clean.png")))?;
        for kind in CorruptionKind::ALL {
            for severity in SEVERITIES {
                let spec = CorruptionSpec::new(kind, severity, derive_seed(cfg.seed, &[i as u64]))?;
                let c = corrupt(&f.frame, &f.region, &spec)?;
                write_frame_png(&c, &out.join(format!("{i:03}-{kind}-{severity}.png")))?;
            }
        }
    }
    info!("wrote gallery for {} frames", chosen.len());
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match &cli.command {
        Command::SynthData(a) => synth_data(a),
        Command::Preprocess(a) => preprocess(a),
        Command::Pretrain(a) => pretrain(a),
        Command::Probe(a) => evaluate(a, EvalKind::Probe),
        Command::Fewshot(a) => evaluate(a, EvalKind::Fewshot),
        Command::CorruptSweep(a) => evaluate(a, EvalKind::Sweep),
        Command::MaskViz(a) => mask_viz(a),
        Command::Report(a) => report(a),
        Command::CorruptGallery(a) => corrupt_gallery(a),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err:#}");
            if is_config_error(&err) {
                ExitCode::from(2)
            } else {
                ExitCode::from(1)
            }
        }
    }
}

