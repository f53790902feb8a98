//! The `slowfast` command line. Every subcommand reads an optional TOML
//! config, applies flag overrides and writes its outputs under `--out`.

use std::ffi::OsString;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;
use slowfast_core::fast::{run_episode, FastSession};
use slowfast_core::gridworld::{make_dataset, make_revisit_benchmark, Action, BlobFormat, Dataset, RevisitAnnotation, World};
use slowfast_core::metrics::{self, FeatureExtractor, MetricsReport, PooledPixels};
use slowfast_core::model::Model;
use slowfast_core::persist::Checkpoint;
use slowfast_core::planner::{
    make_plan_task, plan_and_execute, train_idm, ActionDecoder, InverseDynamics, OracleDecoder, PlanOptions,
};
use slowfast_core::slow::{eval_validation, write_loss_csv, SlowTrainer};
use slowfast_core::slowfast::{episode_loss, random_episodes, run_loop};
use slowfast_core::video::{read_frames, write_png_frames};

use crate::api::{self, AppState};
use crate::config::{RunConfig, SrcFeature};
use crate::error::{CliError, CliResult};

#[derive(Debug, Parser)]
#[command(name = "slowfast", version, about = "Action-driven video generation with slow and fast learning")]
pub struct Cli {
    /// TOML run configuration; every key is optional.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Render a random-walk training dataset or a revisit benchmark.
    GenData(GenDataArgs),
    /// Pre-train the base model.
    TrainSlow(TrainSlowArgs),
    /// Generate an episode without Temp-LoRA.
    Generate(EpisodeArgs),
    /// Generate an episode with Temp-LoRA updated after every chunk.
    FastLearn(FastLearnArgs),
    /// Alternate Temp-LoRA episodes and base-weight updates.
    Loop(LoopArgs),
    /// Return-to-waypoints planning with an inverse dynamics model.
    Plan(PlanArgs),
    /// Score a video directory.
    Eval(EvalArgs),
    /// Run the HTTP session service.
    Serve(ServeArgs),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum DataKind {
    Dataset,
    Revisit,
}

#[derive(Debug, Args)]
pub struct GenDataArgs {
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub episodes: Option<usize>,
    #[arg(long, value_enum, default_value = "dataset")]
    pub kind: DataKind,
    /// Revisit benchmark length in frames after the first.
    #[arg(long, default_value_t = 200)]
    pub length: usize,
    /// Write frames as PPM files instead of float blobs.
    #[arg(long)]
    pub ppm: bool,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct TrainSlowArgs {
    /// Dataset directory from `gen-data`; generated from the config when absent.
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long)]
    pub steps: Option<u64>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Continue from a `train_state.sfvg`.
    #[arg(long)]
    pub resume: Option<PathBuf>,
    /// Held-out episodes for the validation report (0 skips it).
    #[arg(long, default_value_t = 4)]
    pub heldout_episodes: usize,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct EpisodeArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Comma-separated action names, one per chunk.
    #[arg(long, value_delimiter = ',', required = true)]
    pub actions: Vec<String>,
    #[arg(long, default_value_t = 0)]
    pub world_seed: u64,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct FastLearnArgs {
    #[command(flatten)]
    pub episode: EpisodeArgs,
    #[arg(long, conflicts_with = "no_templora")]
    pub templora: bool,
    /// Ablation: run the same episode without Temp-LoRA.
    #[arg(long)]
    pub no_templora: bool,
    #[arg(long)]
    pub rank: Option<usize>,
    #[arg(long)]
    pub k: Option<usize>,
}

#[derive(Debug, Args)]
pub struct LoopArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Held-out episodes scored before and after the loop (0 skips it).
    #[arg(long, default_value_t = 0)]
    pub heldout_episodes: usize,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct PlanArgs {
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Inverse dynamics checkpoint; trained and saved under `--out` when absent.
    #[arg(long)]
    pub idm: Option<PathBuf>,
    #[arg(long)]
    pub no_templora: bool,
    /// Decode actions with the ground-truth simulator instead of the IDM.
    #[arg(long)]
    pub oracle_decoder: bool,
    /// Imagine chunks with the environment itself (needs no checkpoint).
    #[arg(long)]
    pub env_generator: bool,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Any of psnr, ssim, scuts, src.
    #[arg(long, value_delimiter = ',', default_value = "psnr,ssim,scuts,src")]
    pub metrics: Vec<String>,
    #[arg(long)]
    pub video: PathBuf,
    /// Reference frames for psnr/ssim.
    #[arg(long)]
    pub reference: Option<PathBuf>,
    /// Revisit annotation JSON for src.
    #[arg(long)]
    pub annotation: Option<PathBuf>,
    /// Model for bottleneck SRC features.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct ServeArgs {
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long)]
    pub host: Option<String>,
    #[arg(long)]
    pub port: Option<u16>,
}

/// Parses `args` and runs the command; returns the process exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    match run(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

pub fn run(cli: Cli) -> CliResult<()> {
    let config = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    match cli.command {
        Command::GenData(a) => gen_data(config, a),
        Command::TrainSlow(a) => train_slow(config, a),
        Command::Generate(a) => episode(config, a, Some(false)),
        Command::FastLearn(a) => {
            let mut config = config;
            if let Some(r) = a.rank {
                config.fast.rank = r;
            }
            if let Some(k) = a.k {
                config.fast.k = k;
            }
            let enabled = if a.no_templora {
                Some(false)
            } else if a.templora {
                Some(true)
            } else {
                None
            };
            episode(config, a.episode, enabled)
        }
        Command::Loop(a) => slowfast_loop(config, a),
        Command::Plan(a) => plan(config, a),
        Command::Eval(a) => eval(config, a),
        Command::Serve(a) => serve(config, a),
    }
}

fn create_dir(dir: &Path) -> CliResult<()> {
    std::fs::create_dir_all(dir).map_err(|e| CliError::Runtime(format!("{}: {e}", dir.display())))
}

fn write_json(path: &Path, value: &impl Serialize) -> CliResult<()> {
    let bytes = serde_json::to_vec_pretty(value).map_err(|e| CliError::Runtime(e.to_string()))?;
    std::fs::write(path, bytes).map_err(|e| CliError::Runtime(format!("{}: {e}", path.display())))
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> CliResult<T> {
    let bytes = std::fs::read(path).map_err(|e| CliError::Runtime(format!("{}: {e}", path.display())))?;
    serde_json::from_slice(&bytes).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))
}

fn load_model(path: &Path, config: &RunConfig) -> CliResult<Model> {
    let model = Model::load(path)?;
    let size = config.world_config().frame_size();
    if model.frame_size() != size {
        return Err(CliError::Config(format!(
            "checkpoint frames are {}px but the world renders {size}px",
            model.frame_size()
        )));
    }
    Ok(model)
}

fn gen_data(mut config: RunConfig, a: GenDataArgs) -> CliResult<()> {
    if let Some(s) = a.seed {
        config.data.seed = s;
    }
    if let Some(e) = a.episodes {
        config.data.episodes = e;
    }
    create_dir(&a.out)?;
    match a.kind {
        DataKind::Dataset => {
            let ds = make_dataset(&config.dataset()?)?;
            let format = if a.ppm { BlobFormat::Ppm } else { BlobFormat::F32 };
            ds.write(&a.out, format)?;
            log::info!("{} samples from {} episodes", ds.len(), ds.episodes.len());
        }
        DataKind::Revisit => {
            let b = make_revisit_benchmark(&config.world_config(), config.data.seed, a.length, config.chunks.f_g)?;
            write_png_frames(&b.frames, &a.out.join("frames"))?;
            write_json(&a.out.join("annotation.json"), &b.annotation)?;
            let names: Vec<&str> = b.chunk_actions.iter().map(|x| x.name()).collect();
            write_json(&a.out.join("actions.json"), &names)?;
            write_json(&a.out.join("poses.json"), &b.poses)?;
            write_json(
                &a.out.join("benchmark.json"),
                &serde_json::json!({ "world_seed": b.world.seed, "start": b.start, "f_g": b.f_g }),
            )?;
        }
    }
    Ok(())
}

fn train_slow(mut config: RunConfig, a: TrainSlowArgs) -> CliResult<()> {
    if let Some(s) = a.steps {
        config.slow.steps = s;
    }
    if let Some(s) = a.seed {
        config.slow.seed = s;
    }
    create_dir(&a.out)?;
    let dataset = match &a.data {
        Some(d) => Dataset::read(d)?,
        None => make_dataset(&config.dataset()?)?,
    };
    let mut trainer = match &a.resume {
        Some(p) => {
            let mut t = SlowTrainer::resume(&Checkpoint::load(p)?, &dataset)?;
            t.config.steps = config.slow.steps;
            t
        }
        None => {
            let model = Model::new(config.arch(), config.schedule(), config.model.seed)?;
            SlowTrainer::new(model, &dataset, config.slow_config())?
        }
    };
    let state_path = a.out.join("train_state.sfvg");
    let every = config.slow.checkpoint_every;
    let log_every = config.slow.log_every.max(1);
    trainer.run(|t| {
        let step = t.step();
        if step % log_every == 0 {
            log::info!("step {step}: loss {:.5}", t.losses().last().copied().unwrap_or(f32::NAN));
        }
        if every > 0 && step % every == 0 {
            t.checkpoint()?.save(&state_path)?;
        }
        Ok(())
    })?;
    trainer.checkpoint()?.save(&state_path)?;
    write_loss_csv(&a.out.join("loss.csv"), &trainer.loss_curve())?;
    let model = trainer.into_model();
    model.save(&a.out.join("model.sfvg"))?;
    if a.heldout_episodes > 0 {
        let mut held = config.dataset()?;
        held.seed = config.data.seed.wrapping_add(1);
        held.episodes = a.heldout_episodes;
        let report = eval_validation(&model, &make_dataset(&held)?, config.chunks.f_p, 64, config.slow.seed)?;
        log::info!("held-out psnr {:.2} dB (mid-grey {:.2} dB)", report.psnr, report.baseline_psnr);
        write_json(&a.out.join("validation.json"), &report)?;
    }
    Ok(())
}

fn parse_actions(names: &[String]) -> CliResult<Vec<Action>> {
    names
        .iter()
        .map(|n| match n.trim().parse::<Action>() {
            Ok(a) if a.is_env_action() => Ok(a),
            _ => Err(CliError::Config(format!(
                "unknown action `{n}` (allowed: {})",
                Action::env_names().join(", ")
            ))),
        })
        .collect()
}

fn episode(mut config: RunConfig, a: EpisodeArgs, enabled: Option<bool>) -> CliResult<()> {
    if let Some(e) = enabled {
        config.fast.enabled = e;
    }
    if let Some(s) = a.seed {
        config.fast.seed = s;
    }
    let actions = parse_actions(&a.actions)?;
    let model = load_model(&a.checkpoint, &config)?.frozen();
    let world = World::generate(a.world_seed, &config.world_config())?;
    let start = world.random_start(a.world_seed)?;
    let first = slowfast_core::gridworld::render_poses(&world, &[start]);
    let fast = config.fast_config();
    let spec = config.chunk_spec()?;
    let r = run_episode(Arc::new(model), first, &actions, spec, fast.clone())?;
    create_dir(&a.out)?;
    r.write(&a.out, spec, &fast)?;
    Ok(())
}

#[derive(Serialize)]
struct LoopOutput {
    report: slowfast_core::slowfast::LoopReport,
    #[serde(skip_serializing_if = "Option::is_none")]
    heldout_loss_before: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    heldout_loss_after: Option<f64>,
}

fn slowfast_loop(mut config: RunConfig, a: LoopArgs) -> CliResult<()> {
    if let Some(e) = a.epochs {
        config.slowfast.epochs = e;
    }
    if let Some(s) = a.seed {
        config.slowfast.seed = s;
    }
    let mut model = load_model(&a.checkpoint, &config)?;
    let spec = config.chunk_spec()?;
    let world = config.world_config();
    let fast = config.fast_config();
    let l = &config.slowfast;
    let episodes = random_episodes(&world, l.seed, l.episodes, l.chunks, spec.f_g)?;
    let heldout = if a.heldout_episodes > 0 {
        Some(random_episodes(&world, l.seed.wrapping_add(1), a.heldout_episodes, l.chunks, spec.f_g)?)
    } else {
        None
    };
    let score = |m: &Model| -> CliResult<Option<f64>> {
        heldout
            .as_ref()
            .map(|h| episode_loss(m, h, spec, &fast, 2, l.seed).map_err(CliError::from))
            .transpose()
    };
    create_dir(&a.out)?;
    let before = score(&model)?;
    let report = run_loop(&mut model, &episodes, spec, &fast, &config.loop_config(), &a.out.join("ds"))?;
    let after = score(&model)?;
    model.save(&a.out.join("model.sfvg"))?;
    write_json(
        &a.out.join("loop_report.json"),
        &LoopOutput {
            report,
            heldout_loss_before: before,
            heldout_loss_after: after,
        },
    )
}

fn plan(config: RunConfig, a: PlanArgs) -> CliResult<()> {
    let world_cfg = config.world_config();
    let spec = config.chunk_spec()?;
    let task = make_plan_task(&world_cfg, a.seed, config.planner.legs, config.planner.horizon)?;
    let world = World::generate(task.world_seed, &task.world)?;
    create_dir(&a.out)?;
    let mut decoder: Box<dyn ActionDecoder> = if a.oracle_decoder {
        Box::new(OracleDecoder {
            world: world.clone(),
            pose: task.start,
        })
    } else {
        let idm = match &a.idm {
            Some(p) => InverseDynamics::from_checkpoint(&Checkpoint::load(p)?)?,
            None => {
                let idm = train_idm(&world_cfg, &config.idm_config())?;
                idm.to_checkpoint()?.save(&a.out.join("idm.sfvg"))?;
                idm
            }
        };
        Box::new(idm)
    };
    let learn = !a.no_templora && config.fast.enabled;
    let options = PlanOptions {
        closed_loop: config.planner.closed_loop,
        learn,
    };
    let report = if a.env_generator {
        let mut gen = slowfast_core::planner::EnvGenerator {
            world: world.clone(),
            pose: task.start,
            f_g: spec.f_g,
        };
        plan_and_execute(&mut gen, decoder.as_mut(), &task, options)?
    } else {
        let path = a
            .checkpoint
            .as_ref()
            .ok_or_else(|| CliError::Config("plan needs --checkpoint unless --env-generator is set".into()))?;
        let model = Arc::new(load_model(path, &config)?.frozen());
        let mut fast = config.fast_config();
        fast.enabled = learn;
        let first = slowfast_core::gridworld::render_poses(&world, &[task.start]);
        let mut gen = FastSession::new(model, first, spec, fast)?;
        plan_and_execute(&mut gen, decoder.as_mut(), &task, options)?
    };
    log::info!("waypoint distance {:.3}", report.distance);
    if let Some(v) = &report.observed {
        write_png_frames(v, &a.out.join("frames"))?;
    }
    write_json(&a.out.join("plan_report.json"), &report)
}

fn eval(config: RunConfig, a: EvalArgs) -> CliResult<()> {
    let video = read_frames(&a.video)?;
    let mut report = MetricsReport {
        frames: video.len(),
        ..Default::default()
    };
    for m in &a.metrics {
        match m.trim() {
            "psnr" | "ssim" => {
                if report.psnr.is_some() {
                    continue;
                }
                let r = a
                    .reference
                    .as_ref()
                    .ok_or_else(|| CliError::Config(format!("{m} needs --reference")))?;
                let (p, s) = metrics::video_psnr_ssim(&video, &read_frames(r)?)?;
                report.psnr = Some(p);
                report.ssim = Some(s);
            }
            "scuts" => {
                let t = config.scuts_threshold()?;
                report.scuts = Some(metrics::scene_cut_count(&video, t));
                report.scuts_threshold = Some(t);
            }
            "src" => {
                let p = a
                    .annotation
                    .as_ref()
                    .ok_or_else(|| CliError::Config("src needs --annotation".into()))?;
                let ann: RevisitAnnotation = read_json(p)?;
                let src = match config.metrics.src_feature {
                    SrcFeature::PooledPixels => metrics::scene_revisit_consistency(
                        &video,
                        &ann,
                        &PooledPixels {
                            pool: config.metrics.pool,
                        },
                    )?,
                    SrcFeature::Bottleneck => {
                        let cp = a
                            .checkpoint
                            .as_ref()
                            .ok_or_else(|| CliError::Config("bottleneck features need --checkpoint".into()))?;
                        let model = load_model(cp, &config)?;
                        let f = |frame: &[f32], _h: usize, _w: usize| -> Vec<f64> {
                            model
                                .net
                                .bottleneck_features(&model.params, frame)
                                .map(|v| v.into_iter().map(f64::from).collect())
                                .unwrap_or_default()
                        };
                        metrics::scene_revisit_consistency(&video, &ann, &f as &dyn FeatureExtractor)?
                    }
                };
                report.src = Some(src);
            }
            other => {
                return Err(CliError::Config(format!(
                    "unknown metric `{other}` (allowed: psnr, ssim, scuts, src)"
                )))
            }
        }
    }
    create_dir(&a.out)?;
    write_json(&a.out.join("report.json"), &report)
}

fn serve(mut config: RunConfig, a: ServeArgs) -> CliResult<()> {
    if let Some(h) = a.host {
        config.service.host = h;
    }
    if let Some(p) = a.port {
        config.service.port = p;
    }
    let model = a.checkpoint.as_deref().map(|p| load_model(p, &config)).transpose()?;
    let state = Arc::new(AppState::new(config.clone(), model)?);
    let rt = tokio::runtime::Runtime::new().map_err(|e| CliError::Runtime(e.to_string()))?;
    rt.block_on(api::serve(state, &config.service.host, config.service.port))
        .map_err(|e| CliError::Runtime(e.to_string()))
}
