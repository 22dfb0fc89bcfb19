//! `vilp` — train and run the latent video planning stack on the toy push
//! task: dataset tooling, staged training, plan generation, rollouts,
//! latency benchmarks, and ablation sweeps.

mod experiment;
mod frames;

use std::collections::BTreeMap;
use std::path::PathBuf;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};

use experiment::{load_config, ExperimentConfig, ExperimentDir, Stage};
use vilp_core::dataset::DatasetHandle;
use vilp_core::diffusion::SamplerConfig;
use vilp_core::env::{EnvConfig, ToyPushEnv};
use vilp_core::harness;
use vilp_core::metrics::{bench_inference, PixelBaseline};
use vilp_core::planner::MultiviewPlanner;
use vilp_core::policy::{ActionPolicy, ControllerConfig, ReplanTrigger};

#[derive(Parser)]
#[command(name = "vilp", about = "latent video planning for visuomotor imitation", version)]
struct Cli {
    /// Experiment config file (JSON; flat short form or full echoed form).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Base seed for training stages.
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,
    /// Redo work even if checkpoints exist.
    #[arg(long, global = true)]
    force: bool,
    /// Compute device (only `cpu` is available in this build).
    #[arg(long, global = true, default_value = "cpu")]
    device: String,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Inspect or validate a dataset.
    Dataset {
        #[command(subcommand)]
        action: DatasetAction,
    },
    /// Generate scripted demonstrations into a dataset.
    DemoGen {
        /// Environment name (only `toy_push`).
        #[arg(long, default_value = "toy_push")]
        env: String,
        #[arg(long)]
        episodes: usize,
        /// Demonstrator action noise as a fraction of the action cap.
        #[arg(long, default_value_t = 0.08)]
        noise: f64,
        #[arg(long)]
        out: PathBuf,
        /// Randomize the goal per episode (off-target demonstrations).
        #[arg(long)]
        off_target: bool,
        #[arg(long, default_value_t = 0)]
        seed_base: u64,
        /// Render resolution when creating a fresh dataset.
        #[arg(long, default_value_t = 64)]
        resolution: usize,
    },
    /// Train the per-view autoencoders.
    TrainAe,
    /// Train the multiview latent video planner.
    TrainPlanner,
    /// Train the video-to-action policy.
    TrainPolicy,
    /// Run the staged pipeline (defaults to all three stages).
    Pipeline {
        /// Comma-separated subset: train-ae,train-planner,train-policy
        #[arg(long)]
        stages: Option<String>,
    },
    /// Generate one multiview video plan from an observation.
    Plan {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Directory holding one `<view_id>.png` per view.
        #[arg(long)]
        obs_dir: Option<PathBuf>,
        /// Render the observation from a fresh env reset instead.
        #[arg(long)]
        env_seed: Option<u64>,
        /// DDIM steps (defaults to the checkpoint's sampler).
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        plan_seed: u64,
    },
    /// Receding-horizon rollouts in the toy environment.
    Rollout {
        #[arg(long)]
        planner: PathBuf,
        #[arg(long)]
        policy: PathBuf,
        #[arg(long, default_value = "toy_push")]
        env: String,
        #[arg(long, default_value_t = 10)]
        episodes: usize,
        /// Execution horizon N_e.
        #[arg(long)]
        ne: Option<usize>,
        /// DDIM steps override.
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        seed_base: u64,
    },
    /// Latency benchmark: latent planner vs pixel-space baseline.
    Bench {
        #[arg(long)]
        planner: PathBuf,
        /// Pixel baseline checkpoint; a width-matched one is created next
        /// to the planner when omitted.
        #[arg(long)]
        baseline: Option<PathBuf>,
        /// Comma-separated DDIM step counts.
        #[arg(long, default_value = "4,8,16")]
        steps: String,
        #[arg(long, default_value_t = 50)]
        repeats: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Success-rate sweep along one comparison axis.
    Ablate {
        /// ddim_steps | video_horizon | action_horizon | conditioning
        #[arg(long)]
        axis: String,
        /// Comma-separated grid points.
        #[arg(long)]
        grid: String,
        #[arg(long, default_value_t = 10)]
        episodes: usize,
        #[arg(long, default_value = "0,1,2")]
        seeds: String,
        #[arg(long)]
        out: PathBuf,
    },
    /// Environment utilities.
    Env {
        #[command(subcommand)]
        action: EnvAction,
    },
}

#[derive(Subcommand)]
enum DatasetAction {
    Inspect { root: PathBuf },
    Validate { root: PathBuf },
}

#[derive(Subcommand)]
enum EnvAction {
    /// Render the views of a seeded reset to PNG files.
    Render {
        #[arg(long)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 64)]
        resolution: usize,
    },
}

fn main() {
    if let Err(e) = run() {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}

fn config_or_default(cli_config: &Option<PathBuf>) -> Result<ExperimentConfig> {
    match cli_config {
        Some(path) => load_config(path),
        None => {
            let cfg = ExperimentConfig::default_with("dataset".into(), "experiment".into());
            cfg.validate()?;
            Ok(cfg)
        }
    }
}

fn run() -> Result<()> {
    let cli = Cli::parse();
    if cli.device != "cpu" {
        bail!("device {} is not available; this build is CPU-only", cli.device);
    }
    match cli.command {
        Command::Dataset { action } => match action {
            DatasetAction::Inspect { root } => {
                let handle = DatasetHandle::open(&root)?;
                let m = handle.manifest();
                let summary = serde_json::json!({
                    "root": root,
                    "format_version": m.format_version,
                    "views": m.views,
                    "action_dim": m.action_dim,
                    "episodes": m.episodes.len(),
                    "action_labeled_episodes": handle.labeled_episode_ids().len(),
                    "total_frames": m.episodes.iter().map(|e| e.length).sum::<usize>(),
                });
                println!("{}", serde_json::to_string_pretty(&summary)?);
            }
            DatasetAction::Validate { root } => {
                let handle = DatasetHandle::open(&root)?;
                let report = handle.validate()?;
                println!("{}", serde_json::to_string_pretty(&report)?);
                println!("ok");
            }
        },
        Command::DemoGen { env, episodes, noise, out, off_target, seed_base, resolution } => {
            ensure_toy(&env)?;
            let env_cfg = EnvConfig::two_view(resolution);
            let handle =
                harness::generate_demos(&out, &env_cfg, episodes, noise, seed_base, off_target)?;
            println!(
                "wrote {episodes} episodes to {} ({} total)",
                out.display(),
                handle.num_episodes()
            );
        }
        Command::TrainAe => {
            let config = config_or_default(&cli.config)?;
            let outcome =
                experiment::run_pipeline(&config, &[Stage::TrainAe], cli.seed, cli.force)?;
            for (view, path) in &outcome.autoencoders {
                println!("autoencoder[{view}]: {}", path.display());
            }
        }
        Command::TrainPlanner => {
            let config = config_or_default(&cli.config)?;
            let outcome =
                experiment::run_pipeline(&config, &[Stage::TrainPlanner], cli.seed, cli.force)?;
            println!("planner: {}", outcome.planner.unwrap().display());
        }
        Command::TrainPolicy => {
            let config = config_or_default(&cli.config)?;
            let outcome =
                experiment::run_pipeline(&config, &[Stage::TrainPolicy], cli.seed, cli.force)?;
            println!("policy: {}", outcome.policy.unwrap().display());
        }
        Command::Pipeline { stages } => {
            let config = config_or_default(&cli.config)?;
            let stages: Vec<Stage> = match stages {
                Some(s) => s
                    .split(',')
                    .map(|p| p.trim().parse())
                    .collect::<Result<Vec<_>>>()?,
                None => vec![Stage::TrainAe, Stage::TrainPlanner, Stage::TrainPolicy],
            };
            let outcome = experiment::run_pipeline(&config, &stages, cli.seed, cli.force)?;
            println!("experiment dir: {}", outcome.experiment_dir.display());
            for (view, path) in &outcome.autoencoders {
                println!("autoencoder[{view}]: {}", path.display());
            }
            if let Some(p) = outcome.planner {
                println!("planner: {}", p.display());
            }
            if let Some(p) = outcome.policy {
                println!("policy: {}", p.display());
            }
        }
        Command::Plan { checkpoint, obs_dir, env_seed, steps, out, plan_seed } => {
            let planner = MultiviewPlanner::load(&checkpoint)?;
            let obs: BTreeMap<String, vilp_nn::Array<f32>> = match (obs_dir, env_seed) {
                (Some(dir), None) => planner
                    .views
                    .iter()
                    .map(|v| {
                        frames::load_frame_png(&dir.join(format!("{}.png", v.view_id)), v)
                            .map(|f| (v.view_id.clone(), f))
                    })
                    .collect::<Result<_>>()?,
                (None, Some(seed)) => {
                    let res = planner.views[0].height;
                    let mut env = ToyPushEnv::new(EnvConfig::two_view(res))?;
                    env.reset(seed)
                }
                _ => bail!("provide exactly one of --obs-dir or --env-seed"),
            };
            let sampler = steps
                .map(|s| SamplerConfig::evenly_spaced(planner.config.k_max, s))
                .transpose()?;
            let plan = planner.plan(&obs, 0, sampler.as_ref(), plan_seed)?;
            frames::save_plan(
                &plan.frames,
                &out,
                serde_json::json!({
                    "n": plan.n,
                    "dt": plan.dt,
                    "latency": plan.latency,
                }),
            )?;
            println!(
                "plan written to {} ({} views x {} frames, {:.3}s total)",
                out.display(),
                plan.frames.len(),
                plan.n,
                plan.latency.total_s
            );
        }
        Command::Rollout { planner, policy, env, episodes, ne, steps, out, seed_base } => {
            ensure_toy(&env)?;
            let planner = MultiviewPlanner::load(&planner)?;
            let policy = ActionPolicy::load(&policy)?;
            let controller = ControllerConfig {
                n_e: ne.unwrap_or(8),
                replan_trigger: ReplanTrigger::EveryNeSteps,
            };
            let sampler = steps
                .map(|s| SamplerConfig::evenly_spaced(planner.config.k_max, s))
                .transpose()?;
            let res = planner.views[0].height;
            let env_cfg = EnvConfig::two_view(res);
            let records = harness::rollout_many(
                &planner,
                &policy,
                &controller,
                &env_cfg,
                seed_base..seed_base + episodes as u64,
                sampler.as_ref(),
            )?;
            let successes = records.iter().filter(|r| r.success).count();
            let mut lines = String::new();
            for r in &records {
                lines.push_str(&serde_json::to_string(r)?);
                lines.push('\n');
            }
            match &out {
                Some(path) => {
                    std::fs::write(path, lines)?;
                    println!(
                        "{successes}/{episodes} successes; log written to {}",
                        path.display()
                    );
                }
                None => {
                    print!("{lines}");
                    println!("# {successes}/{episodes} successes");
                }
            }
        }
        Command::Bench { planner, baseline, steps, repeats, out } => {
            let planner = MultiviewPlanner::load(&planner)?;
            let baseline_model = match baseline {
                Some(path) => PixelBaseline::load(&path)?,
                None => {
                    let b = PixelBaseline::new(
                        &planner.views,
                        planner.config.n,
                        &planner.config.unet,
                        planner.config.k_max,
                        planner.config.schedule,
                        planner.config.sampler.clone(),
                        0,
                    )?;
                    println!(
                        "note: no --baseline given; using a width-matched untrained pixel model"
                    );
                    b
                }
            };
            let steps_grid: Vec<usize> = steps
                .split(',')
                .map(|s| s.trim().parse().context("parsing --steps"))
                .collect::<Result<_>>()?;
            let res = planner.views[0].height;
            let mut env = ToyPushEnv::new(EnvConfig::two_view(res))?;
            let obs = env.reset(0);
            let reports = bench_inference(&planner, &baseline_model, &obs, &steps_grid, repeats)?;
            std::fs::write(&out, serde_json::to_string_pretty(&reports)?)?;
            for r in &reports {
                println!(
                    "{:<16} steps {:>3}: {:.4}s +- {:.4}s over {} repeats",
                    r.method, r.ddim_steps, r.mean_latency_s, r.std_latency_s, r.repeats
                );
            }
            println!("report written to {}", out.display());
        }
        Command::Ablate { axis, grid, episodes, seeds, out } => {
            let config = config_or_default(&cli.config)?;
            let dir = ExperimentDir::prepare(&config)?;
            let handle = DatasetHandle::open(&config.dataset_root)?;
            let ids = handle.episode_ids();
            let axis: harness::AblationAxis =
                axis.parse().map_err(|e| anyhow::anyhow!("{e}"))?;
            let grid: Vec<String> = grid.split(',').map(|s| s.trim().to_string()).collect();
            let seeds: Vec<u64> = seeds
                .split(',')
                .map(|s| s.trim().parse().context("parsing --seeds"))
                .collect::<Result<_>>()?;
            let table = harness::run_ablation(
                axis,
                &grid,
                &handle,
                &ids,
                &config.stack,
                &dir.checkpoints(),
                &seeds,
                episodes,
            )?;
            std::fs::write(&out, table.to_csv())?;
            print!("{}", table.to_csv());
            println!("table written to {}", out.display());
        }
        Command::Env { action } => match action {
            EnvAction::Render { seed, out, resolution } => {
                let mut env = ToyPushEnv::new(EnvConfig::two_view(resolution))?;
                let obs = env.reset(seed);
                std::fs::create_dir_all(&out)?;
                for (view, frame) in &obs {
                    frames::save_frame_png(frame, &out.join(format!("{view}.png")))?;
                }
                println!("rendered {} views to {}", obs.len(), out.display());
            }
        },
    }
    Ok(())
}

fn ensure_toy(name: &str) -> Result<()> {
    if name != "toy_push" {
        bail!("unknown environment {name}; available: toy_push");
    }
    Ok(())
}
