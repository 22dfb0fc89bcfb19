//! Experiment configuration, directory layout, and the staged pipeline
//! (train-ae -> train-planner -> train-policy) with a checkpoint registry.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};

use vilp_core::dataset::DatasetHandle;
use vilp_core::diffusion::SamplerConfig;
use vilp_core::harness::{self, StackConfig};
use vilp_core::planner::Conditioning;

pub const ENV_EXPERIMENT_DIR: &str = "VILP_EXPERIMENT_DIR";

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub dataset_root: PathBuf,
    pub output_dir: PathBuf,
    pub seeds: Vec<u64>,
    pub stack: StackConfig,
}

impl ExperimentConfig {
    pub fn default_with(dataset_root: PathBuf, output_dir: PathBuf) -> Self {
        Self { dataset_root, output_dir, seeds: vec![0], stack: StackConfig::toy_default() }
    }

    /// Cross-field validation with field-level messages.
    pub fn validate(&self) -> Result<()> {
        if self.seeds.is_empty() {
            bail!("seeds: need at least one seed");
        }
        let s = &self.stack;
        let n_dt = s.planner.n * s.planner.dt;
        if s.controller.n_e == 0 || s.controller.n_e > n_dt {
            bail!(
                "controller.n_e: {} must lie in 1..={} (N*dt with N={}, dt={})",
                s.controller.n_e,
                n_dt,
                s.planner.n,
                s.planner.dt
            );
        }
        if s.planner.sampler.num_inference_steps > s.planner.k_max {
            bail!(
                "planner.sampler: {} inference steps exceed K={}",
                s.planner.sampler.num_inference_steps,
                s.planner.k_max
            );
        }
        for v in &s.env.views {
            if v.height % s.autoencoder.downsample_factor != 0
                || v.width % s.autoencoder.downsample_factor != 0
            {
                bail!(
                    "env.views.{}: {}x{} not divisible by autoencoder.downsample_factor {}",
                    v.view_id,
                    v.height,
                    v.width,
                    s.autoencoder.downsample_factor
                );
            }
        }
        s.validate().map_err(|e| anyhow::anyhow!("{e}"))?;
        Ok(())
    }
}

/// Load a config file. Two forms are accepted: the full echoed form (with
/// a `stack` object) and a flat short form whose keys override defaults:
/// `k`, `ddim_steps`, `eta`, `downsample_factor`, `n`, `dt`, `n_e`,
/// `resolution`, `seeds`, `dataset_root`, `output_dir`, `conditioning`.
pub fn load_config(path: &Path) -> Result<ExperimentConfig> {
    let text = std::fs::read_to_string(path)
        .with_context(|| format!("reading config {}", path.display()))?;
    let value: serde_json::Value = serde_json::from_str(&text)
        .with_context(|| format!("parsing config {}", path.display()))?;

    let config = if value.get("stack").is_some() {
        serde_json::from_value::<ExperimentConfig>(value).context("parsing full-form config")?
    } else {
        let obj = value.as_object().context("config must be a JSON object")?;
        let mut cfg = ExperimentConfig::default_with(
            PathBuf::from(obj.get("dataset_root").and_then(|v| v.as_str()).unwrap_or("dataset")),
            PathBuf::from(obj.get("output_dir").and_then(|v| v.as_str()).unwrap_or("experiment")),
        );
        if let Some(seeds) = obj.get("seeds").and_then(|v| v.as_array()) {
            cfg.seeds = seeds.iter().filter_map(|s| s.as_u64()).collect();
        }
        let known = [
            "dataset_root",
            "output_dir",
            "seeds",
            "k",
            "ddim_steps",
            "eta",
            "downsample_factor",
            "n",
            "dt",
            "n_e",
            "resolution",
            "conditioning",
            "ae_steps",
            "planner_steps",
            "policy_steps",
        ];
        for key in obj.keys() {
            if !known.contains(&key.as_str()) {
                bail!("unknown config key {key}");
            }
        }
        let s = &mut cfg.stack;
        if let Some(k) = obj.get("k").and_then(|v| v.as_u64()) {
            s.planner.k_max = k as usize;
        }
        if let Some(n) = obj.get("n").and_then(|v| v.as_u64()) {
            s.planner.n = n as usize;
            s.planner.unet.latent_shape.0 = n as usize;
        }
        if let Some(dt) = obj.get("dt").and_then(|v| v.as_u64()) {
            s.planner.dt = dt as usize;
            s.policy.dt = dt as usize;
        }
        if let Some(n_e) = obj.get("n_e").and_then(|v| v.as_u64()) {
            s.controller.n_e = n_e as usize;
        }
        if let Some(sf) = obj.get("downsample_factor").and_then(|v| v.as_u64()) {
            s.autoencoder.downsample_factor = sf as usize;
        }
        if let Some(res) = obj.get("resolution").and_then(|v| v.as_u64()) {
            s.env = vilp_core::env::EnvConfig::two_view(res as usize);
            let sf = s.autoencoder.downsample_factor;
            s.planner.unet.latent_shape.1 = res as usize / sf;
            s.planner.unet.latent_shape.2 = res as usize / sf;
        }
        if let Some(steps) = obj.get("ddim_steps").and_then(|v| v.as_u64()) {
            s.planner.sampler = SamplerConfig::evenly_spaced(s.planner.k_max, steps as usize)
                .map_err(|e| anyhow::anyhow!("ddim_steps: {e}"))?;
        }
        if let Some(eta) = obj.get("eta").and_then(|v| v.as_f64()) {
            s.planner.sampler.eta = eta;
        }
        if let Some(c) = obj.get("conditioning").and_then(|v| v.as_str()) {
            s.planner.conditioning = match c {
                "cross_attention" => Conditioning::CrossAttention,
                "conditional_concatenation" | "conditional_concat" => {
                    Conditioning::ConditionalConcat
                }
                other => bail!("conditioning: unknown mechanism {other}"),
            };
        }
        if let Some(v) = obj.get("ae_steps").and_then(|v| v.as_u64()) {
            s.ae_steps = v as usize;
        }
        if let Some(v) = obj.get("planner_steps").and_then(|v| v.as_u64()) {
            s.planner_steps = v as usize;
        }
        if let Some(v) = obj.get("policy_steps").and_then(|v| v.as_u64()) {
            s.policy_steps = v as usize;
        }
        cfg
    };

    config.validate()?;
    Ok(config)
}

/// Experiment directory layout: one place to audit a run.
pub struct ExperimentDir {
    pub root: PathBuf,
}

impl ExperimentDir {
    /// Resolve the output root (the env var overrides the config), create
    /// the layout, and echo the resolved config for provenance.
    pub fn prepare(config: &ExperimentConfig) -> Result<Self> {
        let root = match std::env::var_os(ENV_EXPERIMENT_DIR) {
            Some(dir) => PathBuf::from(dir),
            None => config.output_dir.clone(),
        };
        for sub in ["checkpoints", "logs", "reports", "videos"] {
            std::fs::create_dir_all(root.join(sub))?;
        }
        std::fs::write(
            root.join("config_echo.json"),
            serde_json::to_string_pretty(config)?,
        )?;
        Ok(Self { root })
    }

    pub fn checkpoints(&self) -> PathBuf {
        self.root.join("checkpoints")
    }
}

/// One pipeline run per experiment directory.
pub struct PipelineLock {
    path: PathBuf,
}

impl PipelineLock {
    pub fn acquire(root: &Path) -> Result<Self> {
        std::fs::create_dir_all(root)?;
        let path = root.join(".pipeline.lock");
        match std::fs::OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(mut f) => {
                use std::io::Write as _;
                let _ = writeln!(f, "{}", std::process::id());
                Ok(Self { path })
            }
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => bail!(
                "another pipeline run owns {} (remove the stale lock if no run is active)",
                path.display()
            ),
            Err(e) => Err(e.into()),
        }
    }
}

impl Drop for PipelineLock {
    fn drop(&mut self) {
        let _ = std::fs::remove_file(&self.path);
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Stage {
    TrainAe,
    TrainPlanner,
    TrainPolicy,
}

impl std::str::FromStr for Stage {
    type Err = anyhow::Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train-ae" => Ok(Self::TrainAe),
            "train-planner" => Ok(Self::TrainPlanner),
            "train-policy" => Ok(Self::TrainPolicy),
            other => bail!("unknown stage {other} (train-ae | train-planner | train-policy)"),
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CheckpointRef {
    pub path: PathBuf,
    pub stage: String,
    pub config_hash: String,
    pub parents: Vec<PathBuf>,
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct CheckpointRegistry {
    pub entries: Vec<CheckpointRef>,
}

impl CheckpointRegistry {
    pub fn load(root: &Path) -> Self {
        std::fs::read(root.join("checkpoints.json"))
            .ok()
            .and_then(|b| serde_json::from_slice(&b).ok())
            .unwrap_or_default()
    }

    pub fn save(&self, root: &Path) -> Result<()> {
        std::fs::write(root.join("checkpoints.json"), serde_json::to_vec_pretty(self)?)?;
        Ok(())
    }

    pub fn record(&mut self, entry: CheckpointRef) {
        self.entries.retain(|e| e.path != entry.path);
        self.entries.push(entry);
    }
}

fn short_hash(value: &impl Serialize) -> String {
    use std::hash::{Hash, Hasher};
    let mut h = std::collections::hash_map::DefaultHasher::new();
    serde_json::to_string(value).expect("serializable").hash(&mut h);
    format!("{:016x}", h.finish())
}

/// Run the requested stages in dependency order. Completed stages are
/// skipped unless `force`; missing dependencies abort before any training.
pub fn run_pipeline(
    config: &ExperimentConfig,
    stages: &[Stage],
    seed: u64,
    force: bool,
) -> Result<PipelineOutcome> {
    let dir = ExperimentDir::prepare(config)?;
    let _lock = PipelineLock::acquire(&dir.root)?;
    let handle = DatasetHandle::open(&config.dataset_root)
        .map_err(|e| anyhow::anyhow!("dataset: {e}"))?;
    let mut registry = CheckpointRegistry::load(&dir.root);
    let ckpt_dir = dir.checkpoints();
    let mut outcome = PipelineOutcome::default();

    let want = |stage: Stage| stages.contains(&stage);

    let mut ae_paths: Option<BTreeMap<String, PathBuf>> = None;
    if want(Stage::TrainAe) {
        let paths =
            harness::train_autoencoders_cached(&handle, &config.stack, &ckpt_dir, seed, force)
                .map_err(|e| anyhow::anyhow!("train-ae: {e}"))?;
        for (view, path) in &paths {
            registry.record(CheckpointRef {
                path: path.clone(),
                stage: "autoencoder".into(),
                config_hash: short_hash(&(&config.stack.autoencoder, view)),
                parents: vec![config.dataset_root.clone()],
            });
        }
        outcome.autoencoders = paths.clone();
        ae_paths = Some(paths);
    }

    if want(Stage::TrainPlanner) {
        let ae = match ae_paths.clone() {
            Some(p) => p,
            None => {
                // dependency: every view needs an existing autoencoder
                let paths = harness::autoencoder_checkpoint_paths(
                    &handle,
                    &config.stack,
                    &ckpt_dir,
                    seed,
                );
                if !paths.values().all(|p| p.exists()) {
                    bail!(
                        "train-planner: missing autoencoder checkpoints (run the train-ae stage first)"
                    );
                }
                paths
            }
        };
        let train_ids = handle.episode_ids();
        let path = harness::train_planner_cached(
            &handle,
            &train_ids,
            &config.stack,
            config.stack.planner.conditioning,
            &ae,
            &ckpt_dir,
            seed,
            force,
        )
        .map_err(|e| anyhow::anyhow!("train-planner: {e}"))?;
        registry.record(CheckpointRef {
            path: path.clone(),
            stage: "planner".into(),
            config_hash: short_hash(&config.stack.planner),
            parents: ae.values().cloned().collect(),
        });
        outcome.planner = Some(path);
    }

    if want(Stage::TrainPolicy) {
        let ids = handle.labeled_episode_ids();
        if ids.is_empty() {
            bail!("train-policy: the dataset has no action-labeled episodes");
        }
        let path = harness::train_policy_cached(
            &handle,
            &ids,
            &config.stack,
            &ckpt_dir,
            "main",
            seed,
            force,
        )
        .map_err(|e| anyhow::anyhow!("train-policy: {e}"))?;
        registry.record(CheckpointRef {
            path: path.clone(),
            stage: "policy".into(),
            config_hash: short_hash(&config.stack.policy),
            parents: outcome.planner.iter().cloned().collect(),
        });
        outcome.policy = Some(path);
    }

    registry.save(&dir.root)?;
    outcome.experiment_dir = dir.root;
    Ok(outcome)
}

#[derive(Debug, Default)]
pub struct PipelineOutcome {
    pub experiment_dir: PathBuf,
    pub autoencoders: BTreeMap<String, PathBuf>,
    pub planner: Option<PathBuf>,
    pub policy: Option<PathBuf>,
}
