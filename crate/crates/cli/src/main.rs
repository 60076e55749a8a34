//! `audiogate`: dataset synthesis, the two-stage training pipeline,
//! generation, editing, evaluation and ablations.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use audiogate_core::checkpoint::Checkpoint;
use audiogate_core::config::RunConfig;
use audiogate_core::data::io::{dataset_exists, load_dataset, read_png, read_wav, save_dataset};
use audiogate_core::data::{generate_dataset_with, images_from_tensor, ImageSample};
use audiogate_core::editing::{edge_iou, edge_map, interpolate_audio, scale_volume, InjectionConfig, RecordPass};
use audiogate_core::pipeline::{
    edit_images, embedder_checkpoint, evaluation_indices, featurize, generate, load_embedder,
    run_ablations, score_images, train_backbone, train_embedder, train_stage1, train_stage2,
    Ablation, GenerationRequest, LossLog, Models, Prepared,
};
use audiogate_core::projector::AudioEmbedding;
use audiogate_core::sampling::CfgFormulation;
use audiogate_core::Error;
use clap::{Args, Parser, Subcommand};
use serde_json::json;

const OUT_ENV: &str = "AUDIOGATE_OUT";

#[derive(Parser, Debug)]
#[command(name = "audiogate", version, about = "Audio-conditioned diffusion with gated adapters")]
struct Cli {
    /// TOML run configuration; defaults are used for missing files.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output root (also read from AUDIOGATE_OUT).
    #[arg(long, global = true, env = OUT_ENV, default_value = "runs")]
    root: PathBuf,
    /// Print the effective configuration as TOML and exit.
    #[arg(long)]
    print_config: bool,
    #[command(subcommand)]
    command: Option<Command>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate the synthetic paired dataset.
    SynthData {
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Pretrain the text-conditioned backbone.
    TrainBackbone {
        #[command(flatten)]
        io: TrainIo,
    },
    /// Stage 1: align the audio projector with caption tokens.
    TrainProjector {
        #[command(flatten)]
        io: TrainIo,
    },
    /// Stage 2: train the gated adapters on the frozen backbone.
    TrainAdapters {
        #[command(flatten)]
        io: TrainIo,
    },
    /// Train the evaluation embedder on a held-out split.
    TrainEmbedder {
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Sample images conditioned on audio clips.
    Generate(GenerateArgs),
    /// Edit an image with an audio clip.
    Edit(EditArgs),
    /// Score generated images against a reference dataset.
    Evaluate(EvaluateArgs),
    /// Compare ablated configurations.
    Ablate(AblateArgs),
}

#[derive(Args, Debug)]
struct TrainIo {
    /// Dataset directory.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Input checkpoint of the previous stage.
    #[arg(long)]
    from: Option<PathBuf>,
    /// Output checkpoint.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct SamplerArgs {
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    cfg_scale: Option<f64>,
    #[arg(long)]
    beta: Option<f64>,
    /// `standard` or `additive`.
    #[arg(long)]
    formulation: Option<CfgFormulation>,
}

#[derive(Args, Debug)]
struct GenerateArgs {
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Conditioning WAV files, one image each.
    #[arg(long, num_args = 1..)]
    audio: Vec<PathBuf>,
    /// Condition on the first N validation clips of every class instead.
    #[arg(long)]
    from_val: Option<usize>,
    /// Dataset directory used with --from-val.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Also condition on the caption of this class.
    #[arg(long)]
    caption_class: Option<usize>,
    #[arg(long)]
    log_adapter_norms: bool,
    #[command(flatten)]
    sampler: SamplerArgs,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct EditArgs {
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long)]
    image: PathBuf,
    #[arg(long)]
    audio: PathBuf,
    /// Second clip for embedding interpolation.
    #[arg(long)]
    audio2: Option<PathBuf>,
    /// Interpolation weight of the second clip.
    #[arg(long, default_value_t = 0.0)]
    lambda: f64,
    /// Volume gain applied to the first clip.
    #[arg(long, default_value_t = 1.0)]
    gain: f64,
    #[arg(long)]
    tau: Option<f64>,
    /// Injection preset: `default` or `rich`.
    #[arg(long)]
    preset: Option<String>,
    /// Record features during inversion instead of a reconstruction pass.
    #[arg(long)]
    record_during_inversion: bool,
    #[command(flatten)]
    sampler: SamplerArgs,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct EvaluateArgs {
    /// Directory of PNGs named after validation ids (e.g. `val_00003.png`).
    #[arg(long)]
    generated: PathBuf,
    /// Reference dataset directory.
    #[arg(long)]
    reference: Option<PathBuf>,
    #[arg(long)]
    embedder: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct AblateArgs {
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    backbone: Option<PathBuf>,
    #[arg(long)]
    embedder: Option<PathBuf>,
    /// Comma-separated variant names; default is `full` plus every variant.
    #[arg(long, value_delimiter = ',')]
    variants: Vec<Ablation>,
    #[arg(long)]
    out: Option<PathBuf>,
}

struct Ctx {
    root: PathBuf,
    explicit: Option<RunConfig>,
    argv: Vec<String>,
}

impl Ctx {
    fn data_dir(&self, p: &Option<PathBuf>) -> PathBuf {
        p.clone().unwrap_or_else(|| self.root.join("data"))
    }

    fn ckpt(&self, p: &Option<PathBuf>, name: &str) -> PathBuf {
        p.clone()
            .unwrap_or_else(|| self.root.join("checkpoints").join(format!("{name}.safetensors")))
    }

    fn out_dir(&self, p: &Option<PathBuf>, name: &str) -> anyhow::Result<PathBuf> {
        let dir = p.clone().unwrap_or_else(|| self.root.join(name));
        fs::create_dir_all(&dir).map_err(Error::io(&dir))?;
        Ok(dir)
    }

    /// Explicit configuration, else the one stored in `ck`, else defaults.
    fn config_or(&self, ck: Option<&Checkpoint>) -> RunConfig {
        self.explicit
            .clone()
            .or_else(|| ck.map(|c| c.config.clone()))
            .unwrap_or_default()
    }

    fn manifest(&self, dir: &Path, command: &str, extra: serde_json::Value, cfg: &RunConfig) -> anyhow::Result<()> {
        let value = json!({
            "command": command,
            "argv": self.argv,
            "config": cfg.to_toml()?,
            "details": extra,
        });
        write_text(&dir.join("manifest.json"), &serde_json::to_string_pretty(&value)?)
    }
}

fn write_text(path: &Path, text: &str) -> anyhow::Result<()> {
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            fs::create_dir_all(dir).map_err(Error::io(dir))?;
        }
    }
    fs::write(path, text).map_err(Error::io(path))?;
    Ok(())
}

fn load_ckpt(path: &Path) -> anyhow::Result<Checkpoint> {
    Ok(Checkpoint::load(path)?)
}

fn load_prepared(dir: &Path, cfg: &mut RunConfig) -> anyhow::Result<Prepared> {
    if !dataset_exists(dir) {
        return Err(Error::Io {
            path: dir.to_path_buf(),
            source: std::io::Error::new(std::io::ErrorKind::NotFound, "no dataset (run synth-data)"),
        }
        .into());
    }
    let (split, manifest) = load_dataset(dir)?;
    cfg.data = manifest.params;
    Ok(Prepared::new(split, cfg)?)
}

fn save_log(ckpt: &Path, log: &LossLog) -> anyhow::Result<()> {
    write_text(&ckpt.with_extension("csv"), &log.to_csv())
}

fn apply_sampler(cfg: &mut RunConfig, s: &SamplerArgs) {
    if let Some(v) = s.steps {
        cfg.sampler.steps = v;
    }
    if let Some(v) = s.cfg_scale {
        cfg.sampler.scale = v;
    }
    if let Some(v) = s.beta {
        cfg.sampler.beta = v;
    }
    if let Some(v) = s.formulation {
        cfg.sampler.formulation = v;
    }
}

fn embed_wavs(paths: &[PathBuf], cfg: &RunConfig) -> anyhow::Result<Vec<AudioEmbedding>> {
    let clips = paths
        .iter()
        .map(|p| read_wav(p, 0))
        .collect::<audiogate_core::Result<Vec<_>>>()?;
    Ok(featurize(&clips, &cfg.audio.mel, cfg.model.projector.d_audio)?)
}

fn write_images(dir: &Path, names: &[String], images: &[ImageSample]) -> anyhow::Result<Vec<String>> {
    let mut files = Vec::new();
    for (name, img) in names.iter().zip(images) {
        let file = format!("{name}.png");
        audiogate_core::data::io::write_png(&dir.join(&file), img)?;
        files.push(file);
    }
    Ok(files)
}

fn run(cli: Cli) -> anyhow::Result<()> {
    let explicit = match &cli.config {
        Some(p) => Some(RunConfig::load(p)?),
        None => None,
    };
    let ctx = Ctx {
        root: cli.root.clone(),
        explicit,
        argv: std::env::args().collect(),
    };
    if cli.print_config {
        print!("{}", ctx.config_or(None).to_toml()?);
        return Ok(());
    }
    let Some(command) = cli.command else {
        return Err(Error::Argument("a subcommand is required (see --help)".into()).into());
    };
    match command {
        Command::SynthData { out } => {
            let cfg = ctx.config_or(None);
            let dir = ctx.data_dir(&out);
            let split = generate_dataset_with(&cfg.data)?;
            save_dataset(&dir, &split, &cfg.data)?;
            println!(
                "wrote {} train + {} val examples to {}",
                split.train.len(),
                split.val.len(),
                dir.display()
            );
        }
        Command::TrainBackbone { io } => {
            let mut cfg = ctx.config_or(None);
            let data = load_prepared(&ctx.data_dir(&io.data), &mut cfg)?;
            let out = ctx.ckpt(&io.out, "backbone");
            let t = Instant::now();
            let (ck, log) = train_backbone(&cfg, &data)?;
            ck.save(&out)?;
            save_log(&out, &log)?;
            println!("backbone: {} steps in {:.1}s -> {}", cfg.backbone.steps, t.elapsed().as_secs_f64(), out.display());
        }
        Command::TrainProjector { io } => {
            let from = load_ckpt(&ctx.ckpt(&io.from, "backbone"))?;
            let mut cfg = ctx.config_or(Some(&from));
            let data = load_prepared(&ctx.data_dir(&io.data), &mut cfg)?;
            let out = ctx.ckpt(&io.out, "projector");
            let (ck, report) = train_stage1(&cfg, &data, &from)?;
            ck.save(&out)?;
            save_log(&out, &report.log)?;
            write_text(
                &out.with_extension("json"),
                &serde_json::to_string_pretty(&json!({ "centroid_accuracy": report.centroid_accuracy }))?,
            )?;
            println!("projector: centroid accuracy {:.3} -> {}", report.centroid_accuracy, out.display());
        }
        Command::TrainAdapters { io } => {
            let from = load_ckpt(&ctx.ckpt(&io.from, "projector"))?;
            let mut cfg = ctx.config_or(Some(&from));
            let data = load_prepared(&ctx.data_dir(&io.data), &mut cfg)?;
            let out = ctx.ckpt(&io.out, "adapters");
            let (ck, report) = train_stage2(&cfg, &data, &from)?;
            ck.save(&out)?;
            save_log(&out, &report.log)?;
            let summary = json!({
                "gammas": report.gammas,
                "backbone_unchanged": report.backbone_fingerprint_before == report.backbone_fingerprint_after,
                "adapter_grad_norm": report.adapter_grad_norm,
                "projector_grad_norm": report.projector_grad_norm,
                "partition": report.partition,
                "trainable_fraction": report.partition.trainable_fraction(),
            });
            write_text(&out.with_extension("json"), &serde_json::to_string_pretty(&summary)?)?;
            println!("adapters: {} sites -> {}", report.gammas.len(), out.display());
        }
        Command::TrainEmbedder { out } => {
            let cfg = ctx.config_or(None);
            let out = ctx.ckpt(&out, "embedder");
            let (emb, losses) = train_embedder(&cfg)?;
            embedder_checkpoint(&cfg, &emb)?.save(&out)?;
            let mut log = LossLog::new(&["loss"]);
            for (i, l) in losses.iter().enumerate() {
                log.push(i, &[*l])?;
            }
            save_log(&out, &log)?;
            println!("embedder -> {}", out.display());
        }
        Command::Generate(a) => cmd_generate(&ctx, a)?,
        Command::Edit(a) => cmd_edit(&ctx, a)?,
        Command::Evaluate(a) => cmd_evaluate(&ctx, a)?,
        Command::Ablate(a) => cmd_ablate(&ctx, a)?,
    }
    Ok(())
}

fn cmd_generate(ctx: &Ctx, a: GenerateArgs) -> anyhow::Result<()> {
    let ck_path = ctx.ckpt(&a.checkpoint, "adapters");
    let ck = load_ckpt(&ck_path)?;
    let mut cfg = ctx.config_or(Some(&ck));
    apply_sampler(&mut cfg, &a.sampler);
    let seed = a.sampler.seed.unwrap_or(cfg.eval.seed);
    let (embs, names, sources): (Vec<AudioEmbedding>, Vec<String>, Vec<String>) = match a.from_val {
        Some(per_class) => {
            let data = load_prepared(&ctx.data_dir(&a.data), &mut cfg)?;
            let idx = evaluation_indices(&data, per_class);
            let names: Vec<String> = idx.iter().map(|i| format!("val_{i:05}")).collect();
            let embs = idx.iter().map(|&i| data.val_audio[i].clone()).collect();
            (embs, names.clone(), names)
        }
        None => {
            if a.audio.is_empty() {
                return Err(Error::Argument("pass --audio FILE... or --from-val N".into()).into());
            }
            let names = (0..a.audio.len()).map(|i| format!("sample_{i:04}")).collect();
            let sources = a.audio.iter().map(|p| p.display().to_string()).collect();
            (embed_wavs(&a.audio, &cfg)?, names, sources)
        }
    };
    let models = Models::from_checkpoint(&ck)?;
    let refs: Vec<&AudioEmbedding> = embs.iter().collect();
    let caption = a.caption_class.map(audiogate_core::data::caption_tokens);
    let captions: Vec<&[u32]> = caption.iter().map(|c| c.as_slice()).cycle().take(embs.len()).collect();
    let out = generate(
        &models,
        &GenerationRequest {
            audio: Some(&refs),
            captions: caption.as_ref().map(|_| captions.as_slice()),
            batch: embs.len(),
            seed,
            log_adapter_norms: a.log_adapter_norms,
        },
        &cfg.sampler,
        64,
    )?;
    let dir = ctx.out_dir(&a.out, "generate")?;
    let images = images_from_tensor(&out.images, &vec![0; embs.len()])?;
    let files = write_images(&dir, &names, &images)?;
    if a.log_adapter_norms {
        let mut csv = String::from("site,timestep,norm\n");
        for n in &out.adapter_norms {
            csv.push_str(&format!("{},{},{}\n", n.site, n.timestep, n.norm));
        }
        write_text(&dir.join("adapter_norms.csv"), &csv)?;
    }
    let items: Vec<_> = files
        .iter()
        .zip(&sources)
        .map(|(f, s)| json!({ "file": f, "audio": s }))
        .collect();
    ctx.manifest(
        &dir,
        "generate",
        json!({ "checkpoint": ck_path, "seed": seed, "sampler": cfg.sampler, "caption_class": a.caption_class, "items": items }),
        &cfg,
    )?;
    println!("wrote {} images to {}", files.len(), dir.display());
    Ok(())
}

fn cmd_edit(ctx: &Ctx, a: EditArgs) -> anyhow::Result<()> {
    let ck_path = ctx.ckpt(&a.checkpoint, "adapters");
    let ck = load_ckpt(&ck_path)?;
    let mut cfg = ctx.config_or(Some(&ck));
    apply_sampler(&mut cfg, &a.sampler);
    let mut inj = match &a.preset {
        Some(p) => InjectionConfig::preset(p)?,
        None => cfg.editing.clone(),
    };
    if let Some(t) = a.tau {
        inj = inj.with_tau(t);
    }
    if a.record_during_inversion {
        inj.record_pass = RecordPass::Inversion;
    }
    let image = read_png(&a.image, 0)?;
    if image.size != cfg.data.image_size {
        return Err(Error::Argument(format!(
            "image is {}px but the model expects {}px",
            image.size, cfg.data.image_size
        ))
        .into());
    }
    let clip = scale_volume(&read_wav(&a.audio, 0)?, a.gain)?;
    let mut emb = featurize([&clip], &cfg.audio.mel, cfg.model.projector.d_audio)?.remove(0);
    if let Some(p2) = &a.audio2 {
        let e2 = embed_wavs(std::slice::from_ref(p2), &cfg)?.remove(0);
        emb = interpolate_audio(&emb, &e2, a.lambda)?;
    } else if a.lambda != 0.0 {
        return Err(Error::Argument("--lambda needs --audio2".into()).into());
    }
    let models = Models::from_checkpoint(&ck)?;
    let (edited, traj) = edit_images(&models, &[&image], &[&emb], &inj, &cfg.sampler)?;
    let dir = ctx.out_dir(&a.out, "edit")?;
    let edited = images_from_tensor(&edited, &[0])?.remove(0);
    let mut names = vec!["edited".to_string()];
    let mut imgs = vec![edited.clone()];
    if let Some(r) = &traj.reconstruction {
        names.push("reconstruction".into());
        imgs.push(images_from_tensor(r, &[0])?.remove(0));
    }
    write_images(&dir, &names, &imgs)?;
    let iou = edge_iou(
        &edge_map(&image.pixels, image.size, 0.2),
        &edge_map(&edited.pixels, edited.size, 0.2),
    );
    ctx.manifest(
        &dir,
        "edit",
        json!({
            "checkpoint": ck_path,
            "image": a.image,
            "audio": a.audio,
            "audio2": a.audio2,
            "lambda": a.lambda,
            "gain": a.gain,
            "injection": inj,
            "sampler": cfg.sampler,
            "edge_iou": iou,
        }),
        &cfg,
    )?;
    println!("edited image written to {} (edge IoU with source {iou:.3})", dir.display());
    Ok(())
}

fn embedder_for(ctx: &Ctx, path: &Option<PathBuf>, cfg: &RunConfig) -> anyhow::Result<audiogate_core::metrics::EvalEmbedder> {
    let p = ctx.ckpt(path, "embedder");
    if p.exists() {
        return Ok(load_embedder(&load_ckpt(&p)?)?);
    }
    if path.is_some() {
        load_ckpt(&p)?;
    }
    eprintln!("no embedder at {}; training one", p.display());
    let (emb, _) = train_embedder(cfg)?;
    embedder_checkpoint(cfg, &emb)?.save(&p)?;
    Ok(emb)
}

fn cmd_evaluate(ctx: &Ctx, a: EvaluateArgs) -> anyhow::Result<()> {
    let mut cfg = ctx.config_or(None);
    let data = load_prepared(&ctx.data_dir(&a.reference), &mut cfg)?;
    let embedder = embedder_for(ctx, &a.embedder, &cfg)?;
    let mut indices = Vec::new();
    let mut images = Vec::new();
    let mut ids = Vec::new();
    for i in 0..data.split.val.len() {
        let id = format!("val_{i:05}");
        let path = a.generated.join(format!("{id}.png"));
        if path.is_file() {
            images.push(read_png(&path, data.split.val[i].class_id)?);
            indices.push(i);
            ids.push(id);
        }
    }
    if images.len() < 2 {
        return Err(Error::Argument(format!(
            "{} holds {} images named after validation ids; need at least 2",
            a.generated.display(),
            images.len()
        ))
        .into());
    }
    let report = score_images(&embedder, &data, &indices, &images, &ids)?;
    let dir = ctx.out_dir(&a.out, "evaluate")?;
    write_text(&dir.join("report.json"), &serde_json::to_string_pretty(&report)?)?;
    write_text(&dir.join("per_sample.csv"), &report.per_sample_csv())?;
    ctx.manifest(&dir, "evaluate", json!({ "generated": a.generated, "count": images.len() }), &cfg)?;
    println!(
        "AIS {:.4}  AIC {:.4}  IIS {:.4}  FID {:.6}  ({} images)",
        report.ais,
        report.aic,
        report.iis,
        report.fid,
        images.len()
    );
    Ok(())
}

fn cmd_ablate(ctx: &Ctx, a: AblateArgs) -> anyhow::Result<()> {
    let backbone = load_ckpt(&ctx.ckpt(&a.backbone, "backbone"))?;
    let mut cfg = ctx.config_or(Some(&backbone));
    let data = load_prepared(&ctx.data_dir(&a.data), &mut cfg)?;
    let embedder = embedder_for(ctx, &a.embedder, &cfg)?;
    let variants = if a.variants.is_empty() {
        std::iter::once(Ablation::Full).chain(Ablation::VARIANTS).collect()
    } else {
        a.variants.clone()
    };
    let t = Instant::now();
    let table = run_ablations(&cfg, &data, &backbone, &embedder, &variants)?;
    let dir = ctx.out_dir(&a.out, "ablate")?;
    write_text(&dir.join("ablation.md"), &table.to_markdown())?;
    write_text(&dir.join("ablation.csv"), &table.to_csv())?;
    write_text(&dir.join("ablation.json"), &serde_json::to_string_pretty(&table)?)?;
    let names: Vec<String> = variants.iter().map(|v| v.name()).collect();
    let mut timing = BTreeMap::new();
    timing.insert("seconds", t.elapsed().as_secs_f64());
    ctx.manifest(&dir, "ablate", json!({ "variants": names, "timing": timing }), &cfg)?;
    print!("{}", table.to_markdown());
    Ok(())
}

fn exit_code(err: &anyhow::Error) -> u8 {
    match err.chain().find_map(|e| e.downcast_ref::<Error>()) {
        Some(Error::Io { .. } | Error::Format { .. }) => 2,
        Some(Error::Numeric(_)) => 3,
        Some(_) => 1,
        None if err.chain().any(|e| e.is::<std::io::Error>()) => 2,
        None => 1,
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
