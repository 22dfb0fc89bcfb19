//! End-to-end experiment plumbing shared by the command-line pipeline, the
//! ablation harness, and the acceptance suite: demo-dataset generation,
//! staged training with checkpoint caching, and success-rate evaluation.

use std::collections::BTreeMap;
use std::collections::hash_map::DefaultHasher;
use std::hash::{Hash, Hasher};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::autoencoder::{train_autoencoder, AeTrainOptions, AutoencoderConfig};
use crate::dataset::DatasetHandle;
use crate::diffusion::SamplerConfig;
use crate::env::{scripted_demo, EnvConfig, TargetMode, ToyPushEnv};
use crate::error::{Error, Result};
use crate::planner::{
    Conditioning, MultiviewPlanner, PlannerConfig, PlannerTrainOptions,
};
use crate::policy::{
    rollout_episode, train_policy, ActionPolicy, ControllerConfig, PolicyConfig,
    PolicyTrainOptions, ReplanTrigger, RolloutRecord,
};
use crate::unet::{ObsEncoderConfig, UNetConfig};

/// Everything needed to train and evaluate one full stack on the toy task.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct StackConfig {
    pub env: EnvConfig,
    pub autoencoder: AutoencoderConfig,
    pub ae_steps: usize,
    pub planner: PlannerConfig,
    pub planner_steps: usize,
    pub policy: PolicyConfig,
    pub policy_steps: usize,
    pub controller: ControllerConfig,
}

impl StackConfig {
    /// The desk-scale defaults: 64x64 two-view rendering, 8x8x4 latents,
    /// N = 6 planned frames at dt = 2, N_e = 8, K = 100 with 8-step DDIM
    /// inference.
    pub fn toy_default() -> Self {
        let env = EnvConfig::two_view(64);
        let autoencoder = AutoencoderConfig::default();
        let latent = (6, 64 / 8, 64 / 8, autoencoder.latent_channels);
        let mut planner = PlannerConfig::with_defaults(latent);
        planner.sampler = SamplerConfig::evenly_spaced(planner.k_max, 16).expect("valid");
        planner.unet = UNetConfig {
            base_channels: 16,
            channel_multipliers: vec![1, 2],
            attention_levels: vec![1],
            num_heads: 2,
            latent_shape: latent,
            cond_tokens: 1,
        };
        planner.obs_encoder =
            ObsEncoderConfig { base_channels: 12, output_dim: 64, depth_repeat: true };
        Self {
            env,
            autoencoder,
            ae_steps: 1600,
            planner,
            planner_steps: 1600,
            policy: PolicyConfig::default(),
            policy_steps: 1500,
            controller: ControllerConfig { n_e: 8, replan_trigger: ReplanTrigger::EveryNeSteps },
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.env.validate()?;
        self.autoencoder.validate()?;
        self.planner.validate()?;
        self.controller.validate(self.planner.n, self.planner.dt)?;
        if self.policy.dt != self.planner.dt {
            return Err(Error::Config(format!(
                "policy dt {} must equal planner dt {}",
                self.policy.dt, self.planner.dt
            )));
        }
        for v in &self.env.views {
            if v.height % self.autoencoder.downsample_factor != 0
                || v.width % self.autoencoder.downsample_factor != 0
            {
                return Err(Error::Config(format!(
                    "view {} not divisible by the autoencoder downsample factor",
                    v.view_id
                )));
            }
        }
        Ok(())
    }
}

fn config_hash(value: &impl Serialize) -> u64 {
    let s = serde_json::to_string(value).expect("serializable config");
    let mut h = DefaultHasher::new();
    s.hash(&mut h);
    h.finish()
}

/// Generate `episodes` scripted demonstrations into a dataset at `root`
/// (created if absent, appended otherwise). `off_target` randomizes the
/// goal per episode: the "different goals" labeled data regime.
pub fn generate_demos(
    root: &Path,
    env_cfg: &EnvConfig,
    episodes: usize,
    noise: f64,
    seed_base: u64,
    off_target: bool,
) -> Result<DatasetHandle> {
    let mut cfg = env_cfg.clone();
    if off_target {
        cfg.target = TargetMode::Randomized;
    }
    let mut handle = if root.join("manifest.json").exists() {
        DatasetHandle::open(root)?
    } else {
        DatasetHandle::create(root, cfg.views.clone(), 2)?
    };
    for i in 0..episodes {
        let mut env = ToyPushEnv::new(cfg.clone())?;
        let demo = scripted_demo(&mut env, seed_base + i as u64, noise)?;
        handle.append_episode(&demo.episode)?;
    }
    Ok(handle)
}

/// The checkpoint paths `train_autoencoders_cached` would produce, without
/// training anything (used for dependency checks).
pub fn autoencoder_checkpoint_paths(
    handle: &DatasetHandle,
    cfg: &StackConfig,
    dir: &Path,
    seed: u64,
) -> BTreeMap<String, PathBuf> {
    handle
        .views()
        .iter()
        .map(|v| {
            let key = config_hash(&(&cfg.autoencoder, cfg.ae_steps, seed, &v.view_id));
            (v.view_id.clone(), dir.join(format!("ae_{}_{key:016x}.ckpt", v.view_id)))
        })
        .collect()
}

/// Train (or reuse) one autoencoder per view. Checkpoints are keyed by
/// config hash; existing files are reused unless `force`. Training frames
/// come from `episodes` when given (e.g. a train split), otherwise the
/// whole dataset.
pub fn train_autoencoders_cached_on(
    handle: &DatasetHandle,
    episodes: &[String],
    cfg: &StackConfig,
    dir: &Path,
    seed: u64,
    force: bool,
) -> Result<BTreeMap<String, PathBuf>> {
    std::fs::create_dir_all(dir)?;
    let out = autoencoder_checkpoint_paths(handle, cfg, dir, seed);
    for v in handle.views() {
        let path = &out[&v.view_id];
        if force || !path.exists() {
            let opts = AeTrainOptions {
                steps: cfg.ae_steps,
                batch_size: 8,
                learning_rate: 1e-3,
                seed,
                resume_from: None,
                episodes: episodes.to_vec(),
            };
            train_autoencoder(handle, &v.view_id, &cfg.autoencoder, &opts, path)?;
        }
    }
    Ok(out)
}

pub fn train_autoencoders_cached(
    handle: &DatasetHandle,
    cfg: &StackConfig,
    dir: &Path,
    seed: u64,
    force: bool,
) -> Result<BTreeMap<String, PathBuf>> {
    train_autoencoders_cached_on(handle, &[], cfg, dir, seed, force)
}

/// Train (or reuse) a planner checkpoint for the given conditioning.
#[allow(clippy::too_many_arguments)]
pub fn train_planner_cached(
    handle: &DatasetHandle,
    train_ids: &[String],
    cfg: &StackConfig,
    conditioning: Conditioning,
    ae_ckpts: &BTreeMap<String, PathBuf>,
    dir: &Path,
    seed: u64,
    force: bool,
) -> Result<PathBuf> {
    std::fs::create_dir_all(dir)?;
    let mut planner_cfg = cfg.planner.clone();
    planner_cfg.conditioning = conditioning;
    let key = config_hash(&(&planner_cfg, cfg.planner_steps, seed, train_ids.len(), ae_ckpts));
    let tag = match conditioning {
        Conditioning::CrossAttention => "xattn",
        Conditioning::ConditionalConcat => "concat",
    };
    let path = dir.join(format!("planner_{tag}_{key:016x}.ckpt"));
    if force || !path.exists() {
        let mut planner = MultiviewPlanner::new(&planner_cfg, handle.views(), ae_ckpts, seed)?;
        let opts = PlannerTrainOptions {
            steps: cfg.planner_steps,
            batch_size: 8,
            learning_rate: 1.5e-3,
            seed,
            latent_cache_dir: Some(dir.join("latent_cache")),
        };
        planner.train(handle, train_ids, &opts, &path)?;
    }
    Ok(path)
}

/// Train (or reuse) a policy checkpoint on the given labeled episodes.
pub fn train_policy_cached(
    handle: &DatasetHandle,
    episode_ids: &[String],
    cfg: &StackConfig,
    dir: &Path,
    tag: &str,
    seed: u64,
    force: bool,
) -> Result<PathBuf> {
    std::fs::create_dir_all(dir)?;
    let key = config_hash(&(&cfg.policy, cfg.policy_steps, seed, episode_ids));
    let path = dir.join(format!("policy_{tag}_{key:016x}.ckpt"));
    if force || !path.exists() {
        let opts = PolicyTrainOptions {
            steps: cfg.policy_steps,
            batch_size: 8,
            learning_rate: 1e-3,
            seed,
            validation_fraction: 0.1,
        };
        train_policy(handle, episode_ids, &cfg.policy, &opts, &path)?;
    }
    Ok(path)
}

/// Success statistics over `seeds x episodes_per_seed` rollouts.
#[derive(Clone, Debug, Serialize)]
pub struct SuccessTable {
    pub per_seed: Vec<(u64, f64)>,
    pub mean: f64,
    pub std: f64,
    pub episodes_per_seed: usize,
    pub records: usize,
}

fn summarize(per_seed: Vec<(u64, f64)>, episodes_per_seed: usize) -> SuccessTable {
    let n = per_seed.len() as f64;
    let mean = per_seed.iter().map(|(_, s)| s).sum::<f64>() / n.max(1.0);
    let var = per_seed.iter().map(|(_, s)| (s - mean) * (s - mean)).sum::<f64>() / (n - 1.0).max(1.0);
    SuccessTable {
        records: per_seed.len() * episodes_per_seed,
        per_seed,
        mean,
        std: var.sqrt(),
        episodes_per_seed,
    }
}

/// Evaluate a trained stack: `episodes_per_seed` fresh env episodes per
/// evaluation seed, receding-horizon control throughout.
pub fn evaluate_success(
    planner: &MultiviewPlanner,
    policy: &ActionPolicy,
    controller: &ControllerConfig,
    env_cfg: &EnvConfig,
    eval_seeds: &[u64],
    episodes_per_seed: usize,
    sampler_override: Option<&SamplerConfig>,
) -> Result<SuccessTable> {
    let mut per_seed = Vec::with_capacity(eval_seeds.len());
    for &seed in eval_seeds {
        let mut successes = 0usize;
        for e in 0..episodes_per_seed {
            let mut env = ToyPushEnv::new(env_cfg.clone())?;
            let episode_seed = 1_000_000 + seed * 10_000 + e as u64;
            let record =
                rollout_episode(&mut env, episode_seed, controller, planner, policy, sampler_override)?;
            if record.success {
                successes += 1;
            }
        }
        per_seed.push((seed, successes as f64 / episodes_per_seed as f64));
    }
    Ok(summarize(per_seed, episodes_per_seed))
}

/// Uniform-random actions: the floor any learned policy must clear.
pub fn random_baseline_success(
    env_cfg: &EnvConfig,
    eval_seeds: &[u64],
    episodes_per_seed: usize,
) -> Result<SuccessTable> {
    use rand::RngExt as _;
    let mut per_seed = Vec::new();
    for &seed in eval_seeds {
        let mut successes = 0;
        for e in 0..episodes_per_seed {
            let mut env = ToyPushEnv::new(env_cfg.clone())?;
            let episode_seed = 1_000_000 + seed * 10_000 + e as u64;
            env.reset(episode_seed);
            let mut rng = vilp_nn::rng_stream(episode_seed, "random-policy");
            let cap = env_cfg.action_cap;
            while !env.is_done() {
                let a = (
                    cap * (2.0 * rng.random::<f64>() - 1.0),
                    cap * (2.0 * rng.random::<f64>() - 1.0),
                );
                env.step(a)?;
            }
            if env.is_success() {
                successes += 1;
            }
        }
        per_seed.push((seed, successes as f64 / episodes_per_seed as f64));
    }
    Ok(summarize(per_seed, episodes_per_seed))
}

/// Detailed rollout logs (JSON-lines friendly) for one stack.
pub fn rollout_many(
    planner: &MultiviewPlanner,
    policy: &ActionPolicy,
    controller: &ControllerConfig,
    env_cfg: &EnvConfig,
    seeds: std::ops::Range<u64>,
    sampler_override: Option<&SamplerConfig>,
) -> Result<Vec<RolloutRecord>> {
    let mut records = Vec::new();
    for seed in seeds {
        let mut env = ToyPushEnv::new(env_cfg.clone())?;
        records.push(rollout_episode(
            &mut env,
            seed,
            controller,
            planner,
            policy,
            sampler_override,
        )?);
    }
    Ok(records)
}

// ---------------------------------------------------------------------------
// Ablation harness

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AblationAxis {
    DdimSteps,
    VideoHorizon,
    ActionHorizon,
    Conditioning,
}

impl std::str::FromStr for AblationAxis {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ddim_steps" => Ok(Self::DdimSteps),
            "video_horizon" => Ok(Self::VideoHorizon),
            "action_horizon" => Ok(Self::ActionHorizon),
            "conditioning" => Ok(Self::Conditioning),
            other => Err(Error::Config(format!("unknown ablation axis {other}"))),
        }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct AblationRow {
    pub grid_point: String,
    pub success: SuccessTable,
}

#[derive(Clone, Debug, Serialize)]
pub struct AblationTable {
    pub axis: AblationAxis,
    pub rows: Vec<AblationRow>,
}

impl AblationTable {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("grid_point,mean_success,std,seeds\n");
        for row in &self.rows {
            out.push_str(&format!(
                "{},{:.4},{:.4},{}\n",
                row.grid_point,
                row.success.mean,
                row.success.std,
                row.success.per_seed.len()
            ));
        }
        out
    }
}

/// Sweep one comparison axis, training missing stacks at toy scale and
/// evaluating success over `seeds x episodes_per_seed` rollouts per grid
/// point.
#[allow(clippy::too_many_arguments)]
pub fn run_ablation(
    axis: AblationAxis,
    grid: &[String],
    handle: &DatasetHandle,
    train_ids: &[String],
    base: &StackConfig,
    work_dir: &Path,
    seeds: &[u64],
    episodes_per_seed: usize,
) -> Result<AblationTable> {
    if grid.is_empty() {
        return Err(Error::Config("ablation grid is empty".into()));
    }
    if seeds.is_empty() {
        return Err(Error::Config("ablation needs at least one seed".into()));
    }
    let mut rows = Vec::new();
    for point in grid {
        let mut success_per_seed = Vec::new();
        for &seed in seeds {
            let mut cfg = base.clone();
            let mut conditioning = cfg.planner.conditioning;
            let mut sampler_override: Option<SamplerConfig> = None;
            match axis {
                AblationAxis::DdimSteps => {
                    let steps: usize = point
                        .parse()
                        .map_err(|_| Error::Config(format!("bad step count {point}")))?;
                    sampler_override = Some(SamplerConfig::evenly_spaced(cfg.planner.k_max, steps)?);
                }
                AblationAxis::VideoHorizon => {
                    let n: usize = point
                        .parse()
                        .map_err(|_| Error::Config(format!("bad horizon {point}")))?;
                    cfg.planner.n = n;
                    cfg.planner.unet.latent_shape.0 = n;
                    cfg.controller.n_e = cfg.controller.n_e.min(n * cfg.planner.dt);
                }
                AblationAxis::ActionHorizon => {
                    let n_e: usize = point
                        .parse()
                        .map_err(|_| Error::Config(format!("bad action horizon {point}")))?;
                    cfg.controller.n_e = n_e;
                }
                AblationAxis::Conditioning => {
                    conditioning = match point.as_str() {
                        "cross_attention" => Conditioning::CrossAttention,
                        "conditional_concatenation" | "conditional_concat" => {
                            Conditioning::ConditionalConcat
                        }
                        other => {
                            return Err(Error::Config(format!("unknown conditioning {other}")))
                        }
                    };
                }
            }
            cfg.validate()?;
            let ae = train_autoencoders_cached(handle, &cfg, work_dir, 0, false)?;
            let planner_path = train_planner_cached(
                handle,
                train_ids,
                &cfg,
                conditioning,
                &ae,
                work_dir,
                seed,
                false,
            )?;
            let policy_path =
                train_policy_cached(handle, train_ids, &cfg, work_dir, "ablate", seed, false)?;
            let planner = MultiviewPlanner::load(&planner_path)?;
            let policy = ActionPolicy::load(&policy_path)?;
            let table = evaluate_success(
                &planner,
                &policy,
                &cfg.controller,
                &cfg.env,
                &[seed],
                episodes_per_seed,
                sampler_override.as_ref(),
            )?;
            success_per_seed.push((seed, table.mean));
        }
        rows.push(AblationRow {
            grid_point: point.clone(),
            success: summarize(success_per_seed, episodes_per_seed),
        });
    }
    Ok(AblationTable { axis, rows })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tmp(tag: &str) -> PathBuf {
        let dir = std::env::temp_dir().join(format!("vilp-harness-{tag}-{}", std::process::id()));
        let _ = std::fs::remove_dir_all(&dir);
        std::fs::create_dir_all(&dir).unwrap();
        dir
    }

    /// Micro stack: 16x16 views, 2x2 latents, tiny nets and step counts.
    /// Exercises wiring, not quality.
    fn micro_config() -> StackConfig {
        let mut cfg = StackConfig::toy_default();
        cfg.env = EnvConfig::two_view(16);
        cfg.autoencoder.base_channels = 8;
        cfg.ae_steps = 30;
        cfg.planner.k_max = 20;
        cfg.planner.sampler = SamplerConfig::evenly_spaced(20, 4).unwrap();
        cfg.planner.n = 3;
        cfg.planner.unet = UNetConfig {
            base_channels: 8,
            channel_multipliers: vec![1, 2],
            attention_levels: vec![1],
            num_heads: 2,
            latent_shape: (3, 2, 2, 4),
            cond_tokens: 1,
        };
        cfg.planner.obs_encoder =
            ObsEncoderConfig { base_channels: 8, output_dim: 16, depth_repeat: true };
        cfg.planner_steps = 12;
        cfg.policy.encoder =
            ObsEncoderConfig { base_channels: 8, output_dim: 16, depth_repeat: true };
        cfg.policy.hidden_dim = 32;
        cfg.policy_steps = 12;
        cfg.controller.n_e = 4;
        cfg
    }

    #[test]
    fn full_micro_pipeline_and_ablation_rows() {
        let dir = tmp("pipeline");
        let cfg = micro_config();
        let handle = generate_demos(&dir.join("ds"), &cfg.env, 4, 0.05, 0, false).unwrap();
        let ids = handle.episode_ids();

        let ae = train_autoencoders_cached(&handle, &cfg, &dir.join("work"), 0, false).unwrap();
        assert_eq!(ae.len(), 2);
        // cached: same call reuses files
        let before: Vec<_> = ae.values().map(|p| p.metadata().unwrap().modified().unwrap()).collect();
        let ae2 = train_autoencoders_cached(&handle, &cfg, &dir.join("work"), 0, false).unwrap();
        let after: Vec<_> =
            ae2.values().map(|p| p.metadata().unwrap().modified().unwrap()).collect();
        assert_eq!(before, after, "cached checkpoints must be reused");

        let planner_path = train_planner_cached(
            &handle,
            &ids,
            &cfg,
            Conditioning::CrossAttention,
            &ae,
            &dir.join("work"),
            0,
            false,
        )
        .unwrap();
        let policy_path =
            train_policy_cached(&handle, &ids, &cfg, &dir.join("work"), "main", 0, false).unwrap();
        let planner = MultiviewPlanner::load(&planner_path).unwrap();
        let policy = ActionPolicy::load(&policy_path).unwrap();
        let table =
            evaluate_success(&planner, &policy, &cfg.controller, &cfg.env, &[0], 2, None).unwrap();
        assert_eq!(table.per_seed.len(), 1);
        assert!((0.0..=1.0).contains(&table.mean));

        // action-horizon ablation: three rows, structure only
        let ablation = run_ablation(
            AblationAxis::ActionHorizon,
            &["2".into(), "4".into(), "6".into()],
            &handle,
            &ids,
            &cfg,
            &dir.join("work"),
            &[0],
            1,
        )
        .unwrap();
        assert_eq!(ablation.rows.len(), 3);
        let csv = ablation.to_csv();
        assert_eq!(csv.lines().count(), 4, "header plus three rows");

        // empty grid errors
        assert!(run_ablation(
            AblationAxis::DdimSteps,
            &[],
            &handle,
            &ids,
            &cfg,
            &dir.join("work"),
            &[0],
            1
        )
        .is_err());
        std::fs::remove_dir_all(&dir).ok();
    }

    #[test]
    fn random_baseline_rarely_succeeds() {
        let cfg = micro_config();
        let table = random_baseline_success(&cfg.env, &[0], 5).unwrap();
        assert!(table.mean <= 0.2, "random actions should essentially never succeed");
    }
}
