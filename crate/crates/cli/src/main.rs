use std::net::{IpAddr, SocketAddr};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use anyhow::{anyhow, bail, Context, Result};
use chargan_cli::service::{self, AppState};
use chargan_core::animation::{export_frames, largest_move, load_timeline, render_timeline, ExportFormat};
use chargan_core::connectivity::RefineConfig;
use chargan_core::dataset::{load_dataset, load_dataset_with, load_pose_file, save_dataset, KeypointId, LoadOptions};
use chargan_core::evaluation::{
    ablation, cross_validate, psnr, LpipsAlex, PerceptualMetric, PosePredictor, Summary,
    GanFoldTrainer, LPIPS_WEIGHTS_ENV,
};
use chargan_core::model::Model;
use chargan_core::synthetic::{generate as generate_synthetic, SyntheticConfig};
use chargan_core::training::{train_to_dir, TrainConfig, FINAL_CHECKPOINT};
use chargan_core::Error as CoreError;
use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Parser)]
#[command(name = "chargan", version, about = "Few-shot keypoint-conditioned character reposing and animation")]
struct Cli {
    /// Log filter, e.g. `info` or `chargan_core=debug`.
    #[arg(long, global = true, default_value = "info")]
    log: String,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Check a dataset directory against its schema.
    Validate(ValidateArgs),
    /// Train a character model.
    Train(TrainArgs),
    /// Leave-one-out cross-validation, checkpoint scoring or generator ablation.
    Eval(EvalArgs),
    /// Generate one image from a pose file.
    Generate(GenerateArgs),
    /// Render a keyframe timeline to a GIF or a PNG sequence.
    Animate(AnimateArgs),
    /// Serve loaded checkpoints over HTTP.
    Serve(ServeArgs),
    /// Write a procedurally drawn layered stick-figure dataset.
    Synth(SynthArgs),
}

#[derive(Args)]
struct ValidateArgs {
    /// Dataset directory containing schema.json and the samples.
    #[arg(long)]
    data: PathBuf,
    /// Override the schema's seed for auto-assigned keypoint colors.
    #[arg(long)]
    color_seed: Option<u64>,
}

#[derive(Args, Clone)]
struct ConfigOverrides {
    /// Override `iterations`.
    #[arg(long)]
    iterations: Option<u64>,
    /// Override `seed`.
    #[arg(long)]
    seed: Option<u64>,
    /// Override `batch_size`.
    #[arg(long)]
    batch_size: Option<usize>,
    /// Override `working_resolution`, as WxH.
    #[arg(long, value_parser = parse_size)]
    resolution: Option<[usize; 2]>,
    /// Override `checkpoint_every`.
    #[arg(long)]
    checkpoint_every: Option<u64>,
}

impl ConfigOverrides {
    fn apply(&self, cfg: &mut TrainConfig) {
        if let Some(v) = self.iterations {
            cfg.iterations = v;
        }
        if let Some(v) = self.seed {
            cfg.seed = v;
        }
        if let Some(v) = self.batch_size {
            cfg.batch_size = v;
        }
        if let Some(v) = self.resolution {
            cfg.working_resolution = v;
        }
        if let Some(v) = self.checkpoint_every {
            cfg.checkpoint_every = v;
        }
    }
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    data: PathBuf,
    /// TOML training config; defaults are used for missing fields.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory for checkpoints and the loss log.
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    overrides: ConfigOverrides,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    data: PathBuf,
    /// TOML training config used for every fold.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Leave-one-out cross-validation (the default when no checkpoint is given).
    #[arg(long)]
    cross_validate: bool,
    /// Number of cross-validation repetitions.
    #[arg(long, default_value_t = 3)]
    runs: usize,
    /// Score an existing checkpoint on every sample of `--data` instead.
    #[arg(long, conflicts_with_all = ["cross_validate", "ablation"])]
    checkpoint: Option<PathBuf>,
    /// Train each generator mode on `--data` and score it on `--test-data`.
    #[arg(long, requires = "test_data", conflicts_with = "cross_validate")]
    ablation: bool,
    /// Held-out dataset for `--ablation`.
    #[arg(long)]
    test_data: Option<PathBuf>,
    /// Comma-separated seeds for `--ablation`.
    #[arg(long, value_delimiter = ',', default_value = "0,1,2")]
    seeds: Vec<u64>,
    /// LPIPS AlexNet weights (safetensors); falls back to CHARGAN_LPIPS_WEIGHTS.
    #[arg(long)]
    lpips_weights: Option<PathBuf>,
    /// Also write the full report as JSON.
    #[arg(long)]
    json: Option<PathBuf>,
    #[command(flatten)]
    overrides: ConfigOverrides,
}

#[derive(Args)]
struct GenerateArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Pose JSON in the annotation format.
    #[arg(long)]
    pose: PathBuf,
    /// Output PNG.
    #[arg(long)]
    out: PathBuf,
    /// Also write the predicted mask.
    #[arg(long)]
    mask_out: Option<PathBuf>,
    /// Repair disconnected masks by nudging neighbouring keypoints.
    #[arg(long, overrides_with = "no_mask_fix")]
    mask_fix: bool,
    #[arg(long, overrides_with = "mask_fix")]
    no_mask_fix: bool,
    /// Fraction of the user's move applied to each repaired keypoint.
    #[arg(long)]
    delta: Option<f64>,
    #[arg(long)]
    max_fix_iters: Option<usize>,
    /// Keypoint the user moved (with `--move`).
    #[arg(long, requires = "move_vec")]
    moved_keypoint: Option<u32>,
    /// Displacement of the moved keypoint, as DX,DY.
    #[arg(long = "move", value_parser = parse_vec2, requires = "moved_keypoint", allow_hyphen_values = true)]
    move_vec: Option<[f64; 2]>,
    /// Pose before the edit; the largest displacement from it is the user's move.
    #[arg(long, conflicts_with = "moved_keypoint")]
    from: Option<PathBuf>,
    /// Write the pose actually generated (after repair) here.
    #[arg(long)]
    pose_out: Option<PathBuf>,
    /// Write the conditioning layers as PNGs into this directory.
    #[arg(long)]
    dump_condition: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum AnimFormat {
    Gif,
    Png,
}

#[derive(Args)]
struct AnimateArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Timeline JSON.
    #[arg(long)]
    timeline: PathBuf,
    /// Override the timeline's frame rate.
    #[arg(long)]
    fps: Option<f64>,
    #[arg(long, value_enum, default_value_t = AnimFormat::Gif)]
    format: AnimFormat,
    /// GIF file, or directory for the PNG sequence.
    #[arg(long)]
    out: PathBuf,
    /// Force mask repair on (overrides the timeline).
    #[arg(long, overrides_with = "no_mask_fix")]
    mask_fix: bool,
    /// Force mask repair off (overrides the timeline).
    #[arg(long, overrides_with = "mask_fix")]
    no_mask_fix: bool,
    #[arg(long)]
    delta: Option<f64>,
    #[arg(long)]
    max_fix_iters: Option<usize>,
}

#[derive(Args)]
struct ServeArgs {
    /// Directory of `<id>.safetensors` files or `<id>/model.safetensors` run directories.
    #[arg(long)]
    checkpoints: PathBuf,
    #[arg(long, default_value_t = 8080)]
    port: u16,
    #[arg(long, default_value = "127.0.0.1")]
    host: IpAddr,
    /// Compute device; only `cpu` is built in.
    #[arg(long, default_value = "cpu")]
    device: String,
    /// Timelines with more frames than this become background jobs.
    #[arg(long, default_value_t = service::DEFAULT_SYNC_FRAME_LIMIT)]
    sync_frame_limit: usize,
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 10)]
    poses: usize,
    /// Image size, as WxH or a single number.
    #[arg(long, value_parser = parse_size, default_value = "256")]
    size: [usize; 2],
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

fn parse_size(s: &str) -> Result<[usize; 2], String> {
    let parse = |p: &str| p.trim().parse::<usize>().map_err(|e| format!("{p:?}: {e}"));
    match s.split_once(['x', 'X']) {
        Some((w, h)) => Ok([parse(w)?, parse(h)?]),
        None => {
            let n = parse(s)?;
            Ok([n, n])
        }
    }
}

fn parse_vec2(s: &str) -> Result<[f64; 2], String> {
    let (a, b) = s.split_once(',').ok_or_else(|| format!("expected DX,DY, got {s:?}"))?;
    let parse = |p: &str| p.trim().parse::<f64>().map_err(|e| format!("{p:?}: {e}"));
    Ok([parse(a)?, parse(b)?])
}

fn refine_config(delta: Option<f64>, max_iters: Option<usize>) -> Result<RefineConfig> {
    let mut cfg = RefineConfig::default();
    if let Some(d) = delta {
        if !(0.0..=1.0).contains(&d) {
            bail!("--delta must lie in [0, 1], got {d}");
        }
        cfg.delta = d;
    }
    if let Some(m) = max_iters {
        cfg.max_iters = m;
    }
    Ok(cfg)
}

fn load_config(path: Option<&Path>, overrides: &ConfigOverrides) -> Result<TrainConfig> {
    let mut cfg = match path {
        Some(p) => TrainConfig::load(p)?,
        None => TrainConfig::default(),
    };
    overrides.apply(&mut cfg);
    cfg.validate()?;
    Ok(cfg)
}

fn cmd_validate(args: &ValidateArgs) -> Result<()> {
    let ds = load_dataset_with(&args.data, &LoadOptions { color_seed: args.color_seed })?;
    let s = ds.schema();
    println!(
        "ok: {} samples, {} keypoints in {} layers, {}x{}, masks: {}, schema hash {}",
        ds.len(),
        s.keypoints.len(),
        s.layer_count,
        s.reference_resolution.0,
        s.reference_resolution.1,
        if ds.has_masks() { "yes" } else { "no" },
        s.hash()
    );
    Ok(())
}

fn cmd_train(args: &TrainArgs) -> Result<()> {
    let ds = load_dataset(&args.data)?;
    let cfg = load_config(args.config.as_deref(), &args.overrides)?;
    let total = cfg.iterations;
    let every = (total / 20).max(1);
    let started = std::time::Instant::now();
    let outcome = train_to_dir(&ds, &cfg, &args.out, &mut |r| {
        if (r.step + 1) % every == 0 {
            log::info!(
                "step {}/{} g {:.4} d {:.4} fm {:.4} perc {:.4} ({:.1}s)",
                r.step + 1,
                total,
                r.total_g,
                r.adv_d,
                r.fm,
                r.perceptual,
                started.elapsed().as_secs_f64()
            );
        }
    })?;
    println!(
        "trained {} iterations; checkpoint {}",
        outcome.model.iteration(),
        args.out.join(FINAL_CHECKPOINT).display()
    );
    Ok(())
}

fn lpips_metric(path: Option<&Path>) -> Option<LpipsAlex> {
    let loaded = match path {
        Some(p) => LpipsAlex::load(p),
        None => LpipsAlex::from_env(),
    };
    match loaded {
        Ok(m) => Some(m),
        Err(e) => {
            log::warn!("LPIPS unavailable ({e}); reporting PSNR only. Set --lpips-weights or {LPIPS_WEIGHTS_ENV}");
            None
        }
    }
}

fn write_json(path: &Path, value: &impl serde::Serialize) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    std::fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn cmd_eval(args: &EvalArgs) -> Result<()> {
    let ds = load_dataset(&args.data)?;
    let lpips = lpips_metric(args.lpips_weights.as_deref());
    let metric = lpips.as_ref().map(|m| m as &dyn PerceptualMetric);

    if let Some(ckpt) = &args.checkpoint {
        let model = Model::load(ckpt)?;
        if model.schema().hash() != ds.schema().hash() {
            return Err(CoreError::SchemaMismatch {
                expected: model.schema().hash(),
                actual: ds.schema().hash(),
            }
            .into());
        }
        let mut rows = Vec::new();
        for s in ds.samples() {
            let pred = model.predict(&s.pose)?;
            let p = psnr(&pred, &s.image)?;
            let l = metric.map(|m| m.distance(&pred, &s.image)).transpose()?;
            println!("{:<24} psnr {:>7.3}{}", s.name, p, l.map(|v| format!("  lpips {v:.4}")).unwrap_or_default());
            rows.push(serde_json::json!({"name": s.name, "psnr": p, "lpips": l}));
        }
        let ps: Vec<f64> = rows.iter().filter_map(|r| r["psnr"].as_f64()).collect();
        if let Some(sum) = Summary::of(&ps) {
            println!("mean psnr {:.3} ± {:.3} over {}", sum.mean, sum.std, sum.n);
        }
        if let Some(p) = &args.json {
            write_json(p, &rows)?;
        }
        return Ok(());
    }

    let cfg = load_config(args.config.as_deref(), &args.overrides)?;
    if args.ablation {
        let test = load_dataset(args.test_data.as_ref().expect("clap enforces --test-data"))?;
        if test.schema().hash() != ds.schema().hash() {
            bail!("--test-data uses a different schema than --data");
        }
        let report = ablation(&ds, test.samples(), &cfg, &args.seeds, metric, &mut |row| {
            log::info!("{} seed {}: psnr {:.3}", row.mode.as_str(), row.seed, row.psnr);
        })?;
        print!("{}", report.to_table());
        if let Some(p) = &args.json {
            write_json(p, &report)?;
        }
        return Ok(());
    }

    if args.runs == 0 {
        bail!("--runs must be at least 1");
    }
    let trainer = GanFoldTrainer { cfg };
    let report = cross_validate(&ds, args.runs, &trainer, metric, &mut |f| match &f.error {
        None => log::info!(
            "run {} fold {} ({}): psnr {:.3}",
            f.run,
            f.held_out,
            f.name,
            f.psnr.unwrap_or(f64::NAN)
        ),
        Some(e) => log::warn!("run {} fold {} ({}) failed: {e}", f.run, f.held_out, f.name),
    })?;
    print!("{}", report.to_table());
    if let Some(p) = &args.json {
        write_json(p, &report)?;
    }
    if report.failed_folds() > 0 && report.psnr.is_none() {
        bail!("every fold failed");
    }
    Ok(())
}

fn check_pose_hash(model: &Model, hash: Option<&str>, path: &Path) -> Result<()> {
    if let Some(h) = hash {
        let expected = model.schema().hash();
        if h != expected {
            return Err(anyhow!(CoreError::SchemaMismatch {
                expected,
                actual: h.to_string(),
            }))
            .with_context(|| format!("pose file {}", path.display()));
        }
    }
    Ok(())
}

fn cmd_generate(args: &GenerateArgs) -> Result<()> {
    let model = Model::load(&args.checkpoint)?;
    let file = load_pose_file(&args.pose)?;
    check_pose_hash(&model, file.schema_hash.as_deref(), &args.pose)?;
    let pose = file.pose;
    pose.validate(model.schema()).map_err(|e| e.with_context(args.pose.display().to_string()))?;

    if let Some(dir) = &args.dump_condition {
        model.condition(&pose)?.save_pngs(dir)?;
    }

    let mask_fix = args.mask_fix && !args.no_mask_fix;
    let (generation, final_pose) = if mask_fix {
        let (kp, v) = match (args.moved_keypoint, args.move_vec, &args.from) {
            (Some(k), Some(v), _) => (KeypointId(k), v),
            (_, _, Some(from)) => {
                let before = load_pose_file(from)?;
                check_pose_hash(&model, before.schema_hash.as_deref(), from)?;
                largest_move(&before.pose, &pose)
                    .ok_or_else(|| anyhow!("--from pose is identical to --pose; nothing moved"))?
            }
            _ => bail!("--mask-fix needs the user's move: pass --moved-keypoint and --move, or --from"),
        };
        let cfg = refine_config(args.delta, args.max_fix_iters)?;
        let (g, r) = model.generate_refined(&pose, kp, v, &cfg)?;
        for m in &r.moves {
            log::info!("moved {} by ({:.2}, {:.2})", m.keypoint, m.displacement[0], m.displacement[1]);
        }
        if !r.converged {
            log::warn!("mask still disconnected after {} repair moves", r.iterations);
        }
        (g, r.pose)
    } else {
        (model.generate(&pose)?, pose)
    };

    generation.image.save_png(&args.out)?;
    if let Some(p) = &args.mask_out {
        match &generation.mask {
            Some(m) => m.save_png(p)?,
            None => bail!("--mask-out given but the model does not predict masks"),
        }
    }
    if let Some(p) = &args.pose_out {
        let file = chargan_core::dataset::PoseFile {
            pose: final_pose,
            schema_hash: Some(model.schema().hash()),
        };
        write_json(p, &file)?;
    }
    println!("wrote {}", args.out.display());
    Ok(())
}

fn cmd_animate(args: &AnimateArgs) -> Result<()> {
    let model = Model::load(&args.checkpoint)?;
    let mut timeline = load_timeline(&args.timeline)?;
    if let Some(fps) = args.fps {
        timeline.fps = fps;
    }
    if args.mask_fix {
        timeline.mask_fix = true;
    }
    if args.no_mask_fix {
        timeline.mask_fix = false;
    }
    let refine = if timeline.mask_fix {
        Some(refine_config(args.delta, args.max_fix_iters)?)
    } else {
        None
    };
    let frames = render_timeline(&timeline, &model, refine.as_ref())?;
    let flagged = frames.iter().filter(|f| f.flagged).count();
    if flagged > 0 {
        log::warn!("{flagged} frames still have a disconnected mask");
    }
    let format = match args.format {
        AnimFormat::Gif => ExportFormat::Gif,
        AnimFormat::Png => ExportFormat::PngSequence,
    };
    let files = export_frames(&frames, format, &args.out, timeline.fps, timeline.looping)?;
    println!("rendered {} frames to {} file(s) at {}", frames.len(), files.len(), args.out.display());
    Ok(())
}

fn cmd_serve(args: &ServeArgs) -> Result<()> {
    if args.device != "cpu" {
        bail!("device {:?} is not available in this build; use cpu", args.device);
    }
    let state = AppState::load_dir(&args.checkpoints)?.with_sync_frame_limit(args.sync_frame_limit);
    log::info!("characters: {}", state.character_ids().join(", "));
    let rt = tokio::runtime::Builder::new_multi_thread().enable_all().build()?;
    rt.block_on(service::serve(Arc::new(state), SocketAddr::new(args.host, args.port)))
}

fn cmd_synth(args: &SynthArgs) -> Result<()> {
    let cfg = SyntheticConfig::new(args.poses, (args.size[0], args.size[1]), args.seed);
    let ch = generate_synthetic(&cfg)?;
    save_dataset(&ch.dataset, &args.out)?;
    let crossing = ch.crossing.iter().filter(|&&c| c).count();
    println!(
        "wrote {} samples ({crossing} with the front arm over the torso) to {}",
        ch.dataset.len(),
        args.out.display()
    );
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    env_logger::Builder::new()
        .parse_filters(&cli.log)
        .format_timestamp(None)
        .init();
    let result = match &cli.command {
        Command::Validate(a) => cmd_validate(a),
        Command::Train(a) => cmd_train(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Generate(a) => cmd_generate(a),
        Command::Animate(a) => cmd_animate(a),
        Command::Serve(a) => cmd_serve(a),
        Command::Synth(a) => cmd_synth(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
