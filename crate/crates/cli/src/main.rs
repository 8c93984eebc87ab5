//! `protagonist`: synthesize toy clips, fine-tune on one, edit it, score it,
//! and run the ablation sweep.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};
use ndarray::Array3;
use protagonist::checkpoint;
use protagonist::denoiser::DenoiserConfig;
use protagonist::experts::{parse_prompt, ExpertRegistry, DEFAULT_PRIOR_COLOR, DEFAULT_PRIOR_SHAPE};
use protagonist::io::{load_image, save_scene, save_video, write_json, write_loss_csv};
use protagonist::metrics::{
    background_preservation, prompt_fidelity, subject_fidelity, subject_fidelity_whole_frame, MetricTriple,
};
use protagonist::pipeline::{
    edit, fine_tune, parse_source_dir, Ablation, EditMode, EditReport, EditRequest, FusionOverrides, ParsedSource,
};
use protagonist::schedules::NoiseSchedule;
use protagonist::synthdata::{canonical_render, default_corpus, generate_scene, SceneDescriptor};
use protagonist::training::TrainConfig;
use serde::{Deserialize, Serialize};

#[derive(Parser)]
#[command(name = "protagonist", version, about = "Mask-guided video editing on toy clips")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Render scene directories and a manifest.
    Synth(SynthArgs),
    /// Fine-tune a denoiser on one scene.
    Train(TrainArgs),
    /// Edit a scene with a fine-tuned checkpoint.
    Edit(EditArgs),
    /// Score an edited clip against its source.
    Eval(EvalArgs),
    /// Run the five-way ablation of text-to-video editing.
    Ablate(AblateArgs),
}

#[derive(Args)]
struct SynthArgs {
    /// JSON list of scene descriptors, or an object with a "scenes" list.
    /// The built-in six-scene corpus when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    scene: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = TrainConfig::default().steps)]
    steps: usize,
    #[arg(long, default_value_t = TrainConfig::default().learning_rate)]
    lr: f64,
    #[arg(long, default_value_t = TrainConfig::default().cond_dropout_p)]
    dropout: f64,
    #[arg(long, env = "PROTAGONIST_SEED", default_value_t = 0)]
    seed: u64,
    /// Train on the clip as is, without recolored copies.
    #[arg(long)]
    no_augment: bool,
    /// Loss curve destination; defaults to `<out>.loss.csv`.
    #[arg(long)]
    loss_csv: Option<PathBuf>,
    /// Denoiser architecture as JSON; defaults otherwise.
    #[arg(long)]
    model_config: Option<PathBuf>,
}

#[derive(Args, Clone)]
struct SamplingArgs {
    #[arg(long)]
    tau_f: Option<usize>,
    #[arg(long)]
    tau_l: Option<usize>,
    #[arg(long)]
    guidance: Option<f64>,
    /// Sampling (and inversion) steps.
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long, env = "PROTAGONIST_SEED", default_value_t = 0)]
    seed: u64,
}

impl SamplingArgs {
    fn overrides(&self) -> FusionOverrides {
        FusionOverrides {
            tau_f: self.tau_f,
            tau_l: self.tau_l,
            guidance: self.guidance,
            n_steps: self.steps,
            mask_downsample: None,
        }
    }
}

#[derive(Args)]
struct EditArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    scene: PathBuf,
    /// protagonist, background, text2video or reconstruct.
    #[arg(long)]
    mode: EditMode,
    /// Reference image per protagonist, in protagonist order.
    #[arg(long = "ref")]
    refs: Vec<PathBuf>,
    #[arg(long)]
    prompt: Option<String>,
    #[command(flatten)]
    sampling: SamplingArgs,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EvalArgs {
    /// Edited clip directory.
    #[arg(long)]
    video: PathBuf,
    /// Source scene directory; its masks are recovered with the experts.
    #[arg(long)]
    scene: PathBuf,
    /// Prompt for prompt fidelity; the source caption when omitted.
    #[arg(long)]
    prompt: Option<String>,
    /// Reference image per protagonist; the source protagonist when omitted.
    #[arg(long = "ref")]
    refs: Vec<PathBuf>,
    /// Embed whole frames for subject fidelity instead of the masked region.
    #[arg(long)]
    whole_frame: bool,
}

#[derive(Args)]
struct AblateArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    scene: PathBuf,
    /// Reference image per protagonist; rendered from the prompt when omitted.
    #[arg(long = "ref")]
    refs: Vec<PathBuf>,
    #[arg(long, default_value = "a blue circle on a striped background")]
    prompt: String,
    #[command(flatten)]
    sampling: SamplingArgs,
    /// Number of variants to run concurrently.
    #[arg(long, default_value_t = 1)]
    jobs: usize,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct SynthConfig {
    scenes: Vec<SceneDescriptor>,
}

#[derive(Serialize)]
struct ManifestEntry {
    name: String,
    protagonists: Vec<String>,
    background: String,
}

#[derive(Serialize)]
struct Manifest {
    scenes: Vec<ManifestEntry>,
}

#[derive(Serialize)]
struct AblationRow {
    name: String,
    metrics: MetricTriple,
}

#[derive(Serialize)]
struct AblationReport {
    prompt: String,
    rows: Vec<AblationRow>,
}

fn read_synth_config(path: &Path) -> Result<Vec<SceneDescriptor>> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let value: serde_json::Value =
        serde_json::from_str(&text).map_err(|e| invalid(format!("{}: {e}", path.display())))?;
    let located = |e: serde_path_to_error::Error<serde_json::Error>| {
        invalid(format!("{}: at {}: {}", path.display(), e.path(), e.inner()))
    };
    let list = if value.is_array() {
        serde_path_to_error::deserialize::<_, Vec<SceneDescriptor>>(value).map_err(located)?
    } else {
        serde_path_to_error::deserialize::<_, SynthConfig>(value).map_err(located)?.scenes
    };
    if list.is_empty() {
        return Err(invalid(format!("{}: scene list is empty", path.display())));
    }
    for (i, d) in list.iter().enumerate() {
        d.validate().map_err(|e| invalid(format!("scenes[{i}]: {e}")))?;
    }
    Ok(list)
}

fn invalid(message: String) -> anyhow::Error {
    protagonist::Error::Invalid(message).into()
}

fn synth(args: SynthArgs) -> Result<()> {
    let scenes = match &args.config {
        Some(p) => read_synth_config(p)?,
        None => default_corpus(),
    };
    fs::create_dir_all(&args.out).with_context(|| format!("creating {}", args.out.display()))?;
    let mut manifest = Manifest { scenes: Vec::new() };
    for (i, desc) in scenes.iter().enumerate() {
        let name = format!("scene_{i:02}");
        let scene = generate_scene(desc)?;
        save_scene(&scene, &args.out.join(&name))?;
        manifest.scenes.push(ManifestEntry {
            name,
            protagonists: desc.protagonists.iter().map(|p| p.phrase()).collect(),
            background: format!("{} {}", desc.background.color, desc.background.style),
        });
    }
    write_json(&args.out.join("manifest.json"), &manifest)?;
    println!("wrote {} scenes to {}", manifest.scenes.len(), args.out.display());
    Ok(())
}

fn parse_scene(dir: &Path) -> Result<(ParsedSource, ExpertRegistry)> {
    let video = protagonist::io::load_video(dir)?;
    let experts = ExpertRegistry::oracle(video.height());
    let parsed = parse_source_dir(dir, &experts)?;
    for w in &parsed.warnings {
        eprintln!("warning: {w}");
    }
    Ok((parsed, experts))
}

fn train(args: TrainArgs) -> Result<()> {
    let (parsed, experts) = parse_scene(&args.scene)?;
    let model: DenoiserConfig = match &args.model_config {
        Some(p) => protagonist::io::read_json(p)?,
        None => DenoiserConfig::default(),
    };
    let cfg = TrainConfig {
        steps: args.steps,
        learning_rate: args.lr,
        cond_dropout_p: args.dropout,
        seed: args.seed,
        color_augmentation: !args.no_augment,
        ..Default::default()
    };
    let sched = NoiseSchedule::default();
    let start = Instant::now();
    let (ck, outcome) = fine_tune(&parsed, model, &cfg, &sched, &experts)?;
    checkpoint::save(&args.out, &ck.model, Some(&cfg), &ck.header.source_hash)?;
    let csv_path = args.loss_csv.clone().unwrap_or_else(|| {
        let mut p = args.out.clone().into_os_string();
        p.push(".loss.csv");
        PathBuf::from(p)
    });
    write_loss_csv(&csv_path, &outcome.losses)?;
    let n = outcome.losses.len();
    let tail = &outcome.losses[n.saturating_sub(100)..];
    let mean = if tail.is_empty() { f64::NAN } else { tail.iter().sum::<f64>() / tail.len() as f64 };
    println!(
        "trained {} steps in {:.1}s; mean loss over the last {} steps {mean:.5}",
        n,
        start.elapsed().as_secs_f64(),
        tail.len()
    );
    Ok(())
}

fn load_refs(paths: &[PathBuf]) -> Result<Vec<Array3<f64>>> {
    paths.iter().map(|p| Ok(load_image(p)?)).collect()
}

fn write_report(dir: &Path, report: &EditReport) -> Result<()> {
    write_json(&dir.join("edit_report.json"), report)?;
    Ok(())
}

fn run_edit(args: EditArgs) -> Result<()> {
    let ck = checkpoint::load(&args.checkpoint)?;
    let (parsed, experts) = parse_scene(&args.scene)?;
    let mut request = EditRequest::new(args.mode).with_references(load_refs(&args.refs)?);
    request.prompt = args.prompt.clone();
    request.overrides = args.sampling.overrides();
    request.seed = args.sampling.seed;
    let out = edit(&request, &ck, &parsed, &NoiseSchedule::default(), &experts)?;
    save_video(&out.video, &args.out)?;
    write_report(&args.out, &out.report)?;
    println!("{}", serde_json::to_string_pretty(&out.report.metrics)?);
    Ok(())
}

fn eval(args: EvalArgs) -> Result<()> {
    let video = protagonist::io::load_video(&args.video)?;
    let (parsed, experts) = parse_scene(&args.scene)?;
    video.ensure_same_shape(&parsed.video, "edited clip vs source")?;
    let prompt = args.prompt.clone().unwrap_or_else(|| parsed.caption.clone());
    let refs = load_refs(&args.refs)?;
    if refs.len() > parsed.masks.len() {
        return Err(invalid(format!("{} references for {} protagonists", refs.len(), parsed.masks.len())));
    }
    let mut scores = Vec::with_capacity(parsed.masks.len());
    for (k, mask) in parsed.masks.iter().enumerate() {
        let reference = match refs.get(k) {
            Some(image) => {
                let seg = experts.segmenter.segment_reference(image.view())?;
                if seg.empty {
                    return Err(invalid(format!("no object found in reference {}", args.refs[k].display())));
                }
                experts.vision_embedder.embed_image(image.view(), Some(seg.mask.view()))?
            }
            None => {
                let f = (0..mask.frames()).find(|&f| mask.area(f) > 0.0).unwrap_or(0);
                experts.vision_embedder.embed_image(parsed.video.frame(f), Some(mask.frame(f)))?
            }
        };
        scores.push(if args.whole_frame {
            subject_fidelity_whole_frame(&video, &reference, &experts)?
        } else {
            subject_fidelity(&video, &reference, mask, &experts)?
        });
    }
    let metrics = MetricTriple {
        prompt_fidelity: prompt_fidelity(&video, &prompt, &experts)?,
        subject_fidelity: scores.iter().sum::<f64>() / scores.len().max(1) as f64,
        background_preservation: background_preservation(&video, &parsed.video, &parsed.masks)?,
    };
    println!("{}", serde_json::to_string_pretty(&metrics)?);
    Ok(())
}

/// Canonical render of the prompt's protagonist, one per source protagonist.
fn refs_from_prompt(prompt: &str, count: usize, resolution: usize) -> Vec<Array3<f64>> {
    let attrs = parse_prompt(prompt);
    let (image, _) = canonical_render(
        attrs.shape.unwrap_or(DEFAULT_PRIOR_SHAPE),
        attrs.protagonist_color.unwrap_or(DEFAULT_PRIOR_COLOR),
        resolution,
    );
    vec![image; count]
}

fn ablate(args: AblateArgs) -> Result<()> {
    let ck = checkpoint::load(&args.checkpoint)?;
    let (parsed, experts) = parse_scene(&args.scene)?;
    let refs = if args.refs.is_empty() {
        refs_from_prompt(&args.prompt, parsed.masks.len(), parsed.video.height())
    } else {
        load_refs(&args.refs)?
    };
    let sched = NoiseSchedule::default();
    let run = |ablation: Ablation| -> protagonist::Result<(Ablation, protagonist::pipeline::EditOutcome)> {
        let mut request = EditRequest::new(EditMode::Text2Video)
            .with_references(refs.clone())
            .with_prompt(&args.prompt);
        request.overrides = args.sampling.overrides();
        request.seed = args.sampling.seed;
        request.ablation = ablation;
        Ok((ablation, edit(&request, &ck, &parsed, &sched, &experts)?))
    };
    let jobs = args.jobs.max(1);
    let mut results = Vec::with_capacity(Ablation::ALL.len());
    for chunk in Ablation::ALL.chunks(jobs) {
        let batch = std::thread::scope(|s| {
            let handles: Vec<_> = chunk.iter().map(|&a| s.spawn(move || run(a))).collect();
            handles
                .into_iter()
                .map(|h| h.join().expect("ablation worker panicked"))
                .collect::<Vec<_>>()
        });
        for r in batch {
            results.push(r?);
        }
    }
    fs::create_dir_all(&args.out).with_context(|| format!("creating {}", args.out.display()))?;
    let mut report = AblationReport {
        prompt: args.prompt.clone(),
        rows: Vec::new(),
    };
    for (ablation, outcome) in results {
        let dir = args.out.join(ablation.label().replace(['.', ' '], "_").replace("__", "_"));
        save_video(&outcome.video, &dir)?;
        write_report(&dir, &outcome.report)?;
        report.rows.push(AblationRow {
            name: ablation.label().to_string(),
            metrics: outcome.report.metrics,
        });
    }
    write_json(&args.out.join("ablation_report.json"), &report)?;
    println!("{}", serde_json::to_string_pretty(&report)?);
    Ok(())
}

fn exit_code(err: &anyhow::Error) -> u8 {
    match err.downcast_ref::<protagonist::Error>() {
        Some(e) if e.is_numerical() => 3,
        Some(protagonist::Error::Io { .. }) => 1,
        Some(_) => 2,
        None => 1,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Synth(a) => synth(a),
        Command::Train(a) => train(a),
        Command::Edit(a) => run_edit(a),
        Command::Eval(a) => eval(a),
        Command::Ablate(a) => ablate(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
