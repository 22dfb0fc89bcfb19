//! Orchestrates M per-view latent diffusion models that share a single
//! fused condition vector: training on latent sequences encoded by the
//! frozen autoencoders, and receding-horizon plan inference producing
//! time-aligned multiview video plans.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use vilp_nn::{Adam, Array, ParamBuilder, Tape, Var};

use crate::autoencoder::VqAutoencoder;
use crate::dataset::{DatasetHandle, ViewSpec};
use crate::diffusion::{
    build_schedule, sample, training_loss, NoisePredictor, NoiseSchedule, SamplerConfig,
    ScheduleKind,
};
use crate::error::{Error, Result};
use crate::unet::{nhwc_to_cnhw, ObsEncoderConfig, ObsEncoderSet, UNet3d, UNetConfig};

/// How observations condition the per-view denoisers.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Conditioning {
    /// Fused multiview embedding injected via cross-attention.
    CrossAttention,
    /// Each view's own observation latent concatenated to the noisy input
    /// (no cross-view fusion).
    ConditionalConcat,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct PlannerConfig {
    /// Planned frame count N.
    pub n: usize,
    /// Sampling interval (env steps between planned frames).
    pub dt: usize,
    /// Training diffusion steps K.
    pub k_max: usize,
    pub schedule: ScheduleKind,
    pub sampler: SamplerConfig,
    pub unet: UNetConfig,
    pub obs_encoder: ObsEncoderConfig,
    pub conditioning: Conditioning,
    /// One condition-encoder set shared by every per-view model (the
    /// default) or a separate set per view (fusion ablation).
    pub share_obs_encoders: bool,
    /// Sample the per-view models on threads instead of sequentially.
    pub parallel_views: bool,
}

impl PlannerConfig {
    pub fn with_defaults(latent: (usize, usize, usize, usize)) -> Self {
        Self {
            n: latent.0,
            dt: 2,
            k_max: 100,
            schedule: ScheduleKind::LinearBeta,
            sampler: SamplerConfig::evenly_spaced(100, 16).expect("valid default"),
            unet: UNetConfig { latent_shape: latent, ..Default::default() },
            obs_encoder: ObsEncoderConfig::default(),
            conditioning: Conditioning::CrossAttention,
            share_obs_encoders: true,
            parallel_views: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n == 0 || self.dt == 0 {
            return Err(Error::Config("planner needs N >= 1 and dt >= 1".into()));
        }
        if self.n != self.unet.latent_shape.0 {
            return Err(Error::Config(format!(
                "N = {} must match the latent time extent {}",
                self.n, self.unet.latent_shape.0
            )));
        }
        self.unet.validate()?;
        self.obs_encoder.validate()?;
        self.sampler.validate(self.k_max)?;
        Ok(())
    }
}

/// M time-aligned generated videos plus everything needed to audit them.
#[derive(Clone, Debug)]
pub struct VideoPlan {
    /// Per-view decoded frames `(N, H, W, C)` in [0,1].
    pub frames: BTreeMap<String, Array<f32>>,
    pub anchor_time: usize,
    pub dt: usize,
    pub n: usize,
    /// The fused condition actually consumed by each per-view sampler.
    pub condition_snapshot: Vec<(String, Array<f32>)>,
    pub latency: PlanLatency,
}

#[derive(Clone, Debug, Default, Serialize)]
pub struct PlanLatency {
    pub condition_s: f64,
    pub sample_s: f64,
    pub decode_s: f64,
    pub total_s: f64,
    pub per_view_sample_s: Vec<(String, f64)>,
}

pub struct MultiviewPlanner {
    pub config: PlannerConfig,
    pub views: Vec<ViewSpec>,
    pub schedule: NoiseSchedule,
    autoencoders: BTreeMap<String, VqAutoencoder>,
    ae_refs: BTreeMap<String, (PathBuf, u64)>,
    /// One shared set, or one per view when `share_obs_encoders` is off.
    obs_encoders: BTreeMap<String, ObsEncoderSet>,
    unets: BTreeMap<String, UNet3d>,
    params: Vec<vilp_nn::Param<f32>>,
}

/// Adapts one view's UNet to the generic `NoisePredictor` interface.
/// In concat mode the condition arrives as that view's flattened
/// observation latent and is broadcast along time onto the input channels.
enum ViewPredictor<'a> {
    CrossAttention(&'a UNet3d),
    Concat { unet: &'a UNet3d, latent: (usize, usize, usize) },
}

impl NoisePredictor<f32> for ViewPredictor<'_> {
    fn predict(
        &self,
        tape: &Tape<f32>,
        x_k: &Var<f32>,
        ks: &[usize],
        cond: Option<&Var<f32>>,
    ) -> Var<f32> {
        match self {
            ViewPredictor::CrossAttention(unet) => unet.forward(tape, x_k, ks, cond),
            ViewPredictor::Concat { unet, latent } => {
                let (h, w, c) = *latent;
                let cond = cond.expect("concat conditioning requires the obs latent");
                let b = x_k.shape()[0];
                let n = x_k.shape()[2];
                // [B, h*w*C] -> [B, C, 1, h, w] -> broadcast along time
                let grid = tape.reshape(cond, &[b, h, w, c]);
                let chw = tape.permute(&grid, &[0, 3, 1, 2]);
                let one = tape.reshape(&chw, &[b, c, 1, h, w]);
                let frames: Vec<&Var<f32>> = std::iter::repeat_n(&one, n).collect();
                let cond_video = tape.concat(2, &frames);
                let stacked = tape.concat(1, &[x_k, &cond_video]);
                unet.forward(tape, &stacked, ks, None)
            }
        }
    }
}

pub struct PlannerTrainOptions {
    pub steps: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seed: u64,
    /// Directory for cached per-episode latents (keyed by autoencoder
    /// checksum); reused across runs when present.
    pub latent_cache_dir: Option<PathBuf>,
}

impl Default for PlannerTrainOptions {
    fn default() -> Self {
        Self {
            steps: 1500,
            batch_size: 8,
            learning_rate: 1.5e-3,
            seed: 0,
            latent_cache_dir: None,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct PlannerLossRecord {
    pub step: usize,
    pub total: f64,
    pub per_view: Vec<(String, f64)>,
}

#[derive(Debug)]
pub struct PlannerTrainResult {
    pub checkpoint: PathBuf,
    pub log: Vec<PlannerLossRecord>,
}

impl MultiviewPlanner {
    /// Fresh (untrained) planner over the dataset's views, with the given
    /// frozen autoencoders.
    pub fn new(
        config: &PlannerConfig,
        views: &[ViewSpec],
        ae_ckpts: &BTreeMap<String, PathBuf>,
        seed: u64,
    ) -> Result<Self> {
        config.validate()?;
        if views.is_empty() {
            return Err(Error::Config("planner needs at least one view".into()));
        }
        let mut autoencoders = BTreeMap::new();
        let mut ae_refs = BTreeMap::new();
        for v in views {
            let path = ae_ckpts.get(&v.view_id).ok_or_else(|| {
                Error::Checkpoint(format!("missing autoencoder checkpoint for view {}", v.view_id))
            })?;
            let ae = VqAutoencoder::load(path)?;
            let s = ae.config.downsample_factor;
            let (_, lh, lw, lc) = config.unet.latent_shape;
            if v.height / s != lh || v.width / s != lw || ae.config.latent_channels != lc {
                return Err(Error::Config(format!(
                    "view {}: autoencoder produces {}x{}x{} latents, planner expects {}x{}x{}",
                    v.view_id,
                    v.height / s,
                    v.width / s,
                    ae.config.latent_channels,
                    lh,
                    lw,
                    lc
                )));
            }
            ae_refs.insert(v.view_id.clone(), (path.clone(), ae.checksum()));
            autoencoders.insert(v.view_id.clone(), ae);
        }

        let mut rng = vilp_nn::rng_stream(seed, "planner-init");
        let pb: ParamBuilder<f32> = ParamBuilder::root();
        let (_, lh, lw, lc) = config.unet.latent_shape;

        // key "" holds the shared set; per-view keys hold separate sets
        let mut obs_encoders = BTreeMap::new();
        let cond_dim = match config.conditioning {
            Conditioning::CrossAttention => {
                if config.share_obs_encoders {
                    let set =
                        ObsEncoderSet::new(&pb.pp("obs"), &mut rng, views, &config.obs_encoder)?;
                    let d = set.condition_dim();
                    obs_encoders.insert(String::new(), set);
                    Some(d)
                } else {
                    let mut d = None;
                    for v in views {
                        let set = ObsEncoderSet::new(
                            &pb.pp("obs").pp(&v.view_id),
                            &mut rng,
                            views,
                            &config.obs_encoder,
                        )?;
                        d = Some(set.condition_dim());
                        obs_encoders.insert(v.view_id.clone(), set);
                    }
                    d
                }
            }
            Conditioning::ConditionalConcat => None,
        };

        let mut unets = BTreeMap::new();
        for v in views {
            let upb = pb.pp("view").pp(&v.view_id);
            let in_channels = match config.conditioning {
                Conditioning::CrossAttention => lc,
                Conditioning::ConditionalConcat => 2 * lc,
            };
            let unet = UNet3d::new(&upb, &mut rng, &config.unet, in_channels, lc, cond_dim)?;
            let _ = (lh, lw);
            unets.insert(v.view_id.clone(), unet);
        }

        let schedule = build_schedule(config.schedule, config.k_max)?;
        Ok(Self {
            config: config.clone(),
            views: views.to_vec(),
            schedule,
            autoencoders,
            ae_refs,
            obs_encoders,
            unets,
            params: pb.all(),
        })
    }

    pub fn num_views(&self) -> usize {
        self.views.len()
    }

    pub fn autoencoder(&self, view: &str) -> Option<&VqAutoencoder> {
        self.autoencoders.get(view)
    }

    pub fn ae_checksums(&self) -> BTreeMap<String, u64> {
        self.autoencoders.iter().map(|(v, ae)| (v.clone(), ae.checksum())).collect()
    }

    pub fn latent_hw(&self) -> (usize, usize) {
        (self.config.unet.latent_shape.1, self.config.unet.latent_shape.2)
    }

    /// Cached (or freshly computed) latents for every frame of an episode.
    fn episode_latents(
        &self,
        handle: &DatasetHandle,
        episode_id: &str,
        view: &str,
        cache_dir: Option<&Path>,
    ) -> Result<Array<f32>> {
        let cache_path = cache_dir.map(|d| {
            let checksum = self.ae_refs[view].1;
            d.join(format!("{episode_id}_{view}_{checksum:016x}.arr"))
        });
        if let Some(p) = &cache_path {
            if p.exists() {
                let (shape, data) = crate::dataset::payload::read_f32(p)?;
                return Ok(Array::from_vec(&shape, data));
            }
        }
        let entry = handle.episode_entry(episode_id)?;
        let indices: Vec<usize> = (0..entry.length).collect();
        let frames = handle.read_frames(episode_id, view, &indices)?;
        let latents = self.autoencoders[view].encode_frames(&frames)?;
        if let Some(p) = &cache_path {
            std::fs::create_dir_all(p.parent().unwrap())?;
            crate::dataset::payload::write_f32(p, latents.shape(), latents.data())?;
        }
        Ok(latents)
    }

    /// Train all per-view models jointly (shared condition encoders receive
    /// gradients from every view's loss). Autoencoders stay frozen.
    pub fn train(
        &mut self,
        handle: &DatasetHandle,
        train_ids: &[String],
        opts: &PlannerTrainOptions,
        out_path: &Path,
    ) -> Result<PlannerTrainResult> {
        let span = self.config.n * self.config.dt;
        let usable: Vec<String> = train_ids
            .iter()
            .filter(|id| {
                handle.episode_entry(id).map(|e| e.length - 1 >= span).unwrap_or(false)
            })
            .cloned()
            .collect();
        if usable.is_empty() {
            return Err(Error::Dataset(format!(
                "no training episode is long enough for N*dt = {span} steps"
            )));
        }
        let ae_sums_before = self.ae_checksums();

        // one-time latent cache per (episode, view)
        let cache_dir = opts.latent_cache_dir.as_deref();
        let mut latents: BTreeMap<(String, String), Array<f32>> = BTreeMap::new();
        for id in &usable {
            for v in &self.views {
                let l = self.episode_latents(handle, id, &v.view_id, cache_dir)?;
                latents.insert((id.clone(), v.view_id.clone()), l);
            }
        }

        let mut rng = vilp_nn::rng_stream(opts.seed, "planner-train");
        let warmup = (opts.steps as u64 / 10).clamp(10, 100);
        let mut opt = Adam::new(self.params.clone(), opts.learning_rate)
            .with_warmup(warmup)
            .with_cosine_decay(opts.steps as u64)
            .with_clip_norm(Some(3.0));
        let (_, lh, lw, lc) = self.config.unet.latent_shape;
        let n = self.config.n;
        let dt = self.config.dt;
        let mut log = Vec::new();
        use rand::RngExt as _;

        for step in 0..opts.steps {
            let b = opts.batch_size;
            // sample anchors
            let mut picks = Vec::with_capacity(b);
            for _ in 0..b {
                let id = &usable[rng.random_range(0..usable.len())];
                let t_d = handle.episode_entry(id)?.length - 1;
                let t = rng.random_range(0..=t_d - span);
                picks.push((id.clone(), t));
            }

            // per-view latent video batches [B, C, N, h, w]
            let mut x0_per_view: BTreeMap<String, Array<f32>> = BTreeMap::new();
            for v in &self.views {
                let mut data = Vec::with_capacity(b * lc * n * lh * lw);
                for (id, t) in &picks {
                    let lat = &latents[&(id.clone(), v.view_id.clone())];
                    let per = lh * lw * lc;
                    let mut seq = Vec::with_capacity(n * per);
                    for k in 1..=n {
                        let idx = t + k * dt;
                        seq.extend_from_slice(&lat.data()[idx * per..(idx + 1) * per]);
                    }
                    let seq = Array::from_vec(&[n, lh, lw, lc], seq);
                    data.extend_from_slice(nhwc_to_cnhw(&seq).data());
                }
                x0_per_view
                    .insert(v.view_id.clone(), Array::from_vec(&[b, lc, n, lh, lw], data));
            }

            let tape = Tape::new();
            // condition: fused embedding (cross-attention) or per-view
            // observation latents (concat)
            let mut cond_per_view: BTreeMap<String, Var<f32>> = BTreeMap::new();
            match self.config.conditioning {
                Conditioning::CrossAttention => {
                    let mut obs = BTreeMap::new();
                    for v in &self.views {
                        let mut data = Vec::new();
                        for (id, t) in &picks {
                            let f = handle.read_frames(id, &v.view_id, &[*t])?;
                            data.extend_from_slice(f.data());
                        }
                        obs.insert(
                            v.view_id.clone(),
                            Array::from_vec(&[b, v.height, v.width, v.channels], data),
                        );
                    }
                    if self.config.share_obs_encoders {
                        let (cond, _) = self.obs_encoders[""].encode_batch(&tape, &obs)?;
                        for v in &self.views {
                            cond_per_view.insert(v.view_id.clone(), cond.clone());
                        }
                    } else {
                        for v in &self.views {
                            let (cond, _) =
                                self.obs_encoders[&v.view_id].encode_batch(&tape, &obs)?;
                            cond_per_view.insert(v.view_id.clone(), cond);
                        }
                    }
                }
                Conditioning::ConditionalConcat => {
                    for v in &self.views {
                        let mut data = Vec::with_capacity(b * lh * lw * lc);
                        for (id, t) in &picks {
                            let lat = &latents[&(id.clone(), v.view_id.clone())];
                            let per = lh * lw * lc;
                            data.extend_from_slice(&lat.data()[t * per..(t + 1) * per]);
                        }
                        cond_per_view.insert(
                            v.view_id.clone(),
                            Tape::constant(Array::from_vec(&[b, lh * lw * lc], data)),
                        );
                    }
                }
            }

            let mut total: Option<Var<f32>> = None;
            let mut per_view_losses = Vec::with_capacity(self.views.len());
            for v in &self.views {
                let predictor = self.view_predictor(&v.view_id);
                let cond = cond_per_view.get(&v.view_id);
                let loss = training_loss(
                    &predictor,
                    &tape,
                    &x0_per_view[&v.view_id],
                    cond,
                    &self.schedule,
                    &mut rng,
                )?;
                per_view_losses.push((v.view_id.clone(), loss.value().data()[0] as f64));
                total = Some(match total {
                    Some(acc) => tape.add(&acc, &loss),
                    None => loss,
                });
            }
            let total = tape.scale(&total.expect("at least one view"), 1.0 / self.views.len() as f32);
            let total_v = total.value().data()[0] as f64;
            if !total_v.is_finite() {
                return Err(Error::NonFinite(format!("planner loss at step {step}")));
            }
            tape.backward(&total);
            opt.step();

            if step % 25 == 0 || step + 1 == opts.steps {
                log.push(PlannerLossRecord { step, total: total_v, per_view: per_view_losses });
            }
        }

        // the frozen autoencoders must be bit-unchanged
        let ae_sums_after = self.ae_checksums();
        if ae_sums_before != ae_sums_after {
            return Err(Error::Checkpoint(
                "autoencoder parameters changed during planner training".into(),
            ));
        }

        self.save(out_path)?;
        let mut text = String::new();
        for r in &log {
            text.push_str(&serde_json::to_string(r)?);
            text.push('\n');
        }
        std::fs::write(out_path.with_extension("log.jsonl"), text)?;
        Ok(PlannerTrainResult { checkpoint: out_path.to_path_buf(), log })
    }

    fn view_predictor(&self, view: &str) -> ViewPredictor<'_> {
        let (_, lh, lw, lc) = self.config.unet.latent_shape;
        match self.config.conditioning {
            Conditioning::CrossAttention => ViewPredictor::CrossAttention(&self.unets[view]),
            Conditioning::ConditionalConcat => {
                ViewPredictor::Concat { unet: &self.unets[view], latent: (lh, lw, lc) }
            }
        }
    }

    /// Generate one multiview plan from the current observation. One
    /// condition is computed and shared by every per-view sampler; with
    /// `eta = 0` and a fixed seed the result is deterministic.
    pub fn plan(
        &self,
        obs: &BTreeMap<String, Array<f32>>,
        anchor_time: usize,
        sampler_override: Option<&SamplerConfig>,
        seed: u64,
    ) -> Result<VideoPlan> {
        let sampler = sampler_override.unwrap_or(&self.config.sampler);
        sampler.validate(self.config.k_max)?;
        let t_total = Instant::now();

        // condition, computed once per encoder set
        let t_cond = Instant::now();
        let mut cond_per_view: BTreeMap<String, Array<f32>> = BTreeMap::new();
        match self.config.conditioning {
            Conditioning::CrossAttention => {
                if self.config.share_obs_encoders {
                    let cv = self.obs_encoders[""].encode_observation(obs)?;
                    let d = cv.values.len();
                    for v in &self.views {
                        cond_per_view
                            .insert(v.view_id.clone(), cv.values.reshape(&[1, d]));
                    }
                } else {
                    for v in &self.views {
                        let cv = self.obs_encoders[&v.view_id].encode_observation(obs)?;
                        let d = cv.values.len();
                        cond_per_view.insert(v.view_id.clone(), cv.values.reshape(&[1, d]));
                    }
                }
            }
            Conditioning::ConditionalConcat => {
                for v in &self.views {
                    let frame = obs.get(&v.view_id).ok_or_else(|| {
                        Error::Shape(format!("missing view {}", v.view_id))
                    })?;
                    let grid = self.autoencoders[&v.view_id].encode(frame)?;
                    let d = grid.data.len();
                    cond_per_view.insert(v.view_id.clone(), grid.data.reshape(&[1, d]));
                }
            }
        }
        let condition_s = t_cond.elapsed().as_secs_f64();

        let (_, lh, lw, lc) = self.config.unet.latent_shape;
        let n = self.config.n;

        // per-view sampling, sequential or parallel; per-view rng streams
        // are derived identically in both modes
        let t_sample = Instant::now();
        let sample_one = |view: &str| -> Result<(Array<f32>, Array<f32>, f64)> {
            let t0 = Instant::now();
            let cond_arr: Array<f32> = cond_per_view[view].clone();
            let predictor = self.view_predictor(view);
            let mut view_rng = vilp_nn::rng_stream(seed, &format!("plan-{view}"));
            let latent = sample(
                &predictor,
                &[1, lc, n, lh, lw],
                Some(&cond_arr),
                sampler,
                &self.schedule,
                &mut view_rng,
            )?;
            Ok((latent, cond_arr, t0.elapsed().as_secs_f64()))
        };

        let mut sampled: Vec<(String, (Array<f32>, Array<f32>, f64))> = Vec::new();
        if self.config.parallel_views && self.views.len() > 1 {
            let results: Vec<(String, Result<(Array<f32>, Array<f32>, f64)>)> =
                std::thread::scope(|scope| {
                    let handles: Vec<_> = self
                        .views
                        .iter()
                        .map(|v| {
                            let view = v.view_id.clone();
                            let f = &sample_one;
                            scope.spawn(move || (view.clone(), f(&view)))
                        })
                        .collect();
                    handles.into_iter().map(|h| h.join().expect("sampler thread")).collect()
                });
            for (view, r) in results {
                sampled.push((view, r?));
            }
        } else {
            for v in &self.views {
                sampled.push((v.view_id.clone(), sample_one(&v.view_id)?));
            }
        }
        let sample_s = t_sample.elapsed().as_secs_f64();

        // decode
        let t_decode = Instant::now();
        let mut frames = BTreeMap::new();
        let mut condition_snapshot = Vec::new();
        let mut per_view_sample_s = Vec::new();
        for (view, (latent, cond_used, dt_s)) in sampled {
            per_view_sample_s.push((view.clone(), dt_s));
            condition_snapshot.push((view.clone(), cond_used));
            // [1, C, N, h, w] -> (N, h, w, C)
            let nhwc = crate::unet::cnhw_to_nhwc(&latent.reshape(&[lc, n, lh, lw]));
            if !nhwc.all_finite() {
                return Err(Error::NonFinite(format!("generated latents for view {view}")));
            }
            let decoded = self.autoencoders[&view].decode_frames(&nhwc)?;
            if !decoded.all_finite() {
                return Err(Error::NonFinite(format!("decoded frames for view {view}")));
            }
            frames.insert(view, decoded);
        }
        let decode_s = t_decode.elapsed().as_secs_f64();

        Ok(VideoPlan {
            frames,
            anchor_time,
            dt: self.config.dt,
            n,
            condition_snapshot,
            latency: PlanLatency {
                condition_s,
                sample_s,
                decode_s,
                total_s: t_total.elapsed().as_secs_f64(),
                per_view_sample_s,
            },
        })
    }

    /// Plan repeatedly, conditioning each plan on the final frames of the
    /// previous one. Yields `num_chains` plans covering `N * num_chains`
    /// frames per view.
    pub fn chain_plans(
        &self,
        initial_obs: &BTreeMap<String, Array<f32>>,
        num_chains: usize,
        seed: u64,
    ) -> Result<Vec<VideoPlan>> {
        if num_chains == 0 {
            return Err(Error::Config("num_chains must be >= 1".into()));
        }
        let mut plans = Vec::with_capacity(num_chains);
        let mut obs = initial_obs.clone();
        for i in 0..num_chains {
            let plan = self.plan(&obs, i * self.config.n * self.config.dt, None, seed.wrapping_add(i as u64))?;
            obs = plan
                .frames
                .iter()
                .map(|(v, f)| {
                    let (n, h, w, c) = (f.dim(0), f.dim(1), f.dim(2), f.dim(3));
                    let per = h * w * c;
                    (
                        v.clone(),
                        Array::from_vec(&[h, w, c], f.data()[(n - 1) * per..].to_vec()),
                    )
                })
                .collect();
            plans.push(plan);
        }
        Ok(plans)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let ae_refs: BTreeMap<String, serde_json::Value> = self
            .ae_refs
            .iter()
            .map(|(v, (p, sum))| {
                (v.clone(), serde_json::json!({"path": p, "checksum": format!("{sum:016x}")}))
            })
            .collect();
        let meta = serde_json::json!({
            "kind": "multiview_planner",
            "config": self.config,
            "views": self.views,
            "autoencoders": ae_refs,
        });
        vilp_nn::io::save_params(path, &meta, &self.params)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let (meta, _) = vilp_nn::io::load_archive::<f32>(path)?;
        let config: PlannerConfig = serde_json::from_value(meta["config"].clone())
            .map_err(|e| Error::Checkpoint(format!("{}: bad config: {e}", path.display())))?;
        let views: Vec<ViewSpec> = serde_json::from_value(meta["views"].clone())
            .map_err(|e| Error::Checkpoint(format!("{}: bad views: {e}", path.display())))?;
        let mut ae_ckpts = BTreeMap::new();
        let dir = path.parent().unwrap_or(Path::new("."));
        for (view, entry) in meta["autoencoders"].as_object().ok_or_else(|| {
            Error::Checkpoint("missing autoencoder references".into())
        })? {
            let stored = PathBuf::from(entry["path"].as_str().unwrap_or(""));
            // resolve relative to the checkpoint directory when moved
            let resolved = if stored.exists() {
                stored
            } else {
                let sibling = dir.join(stored.file_name().unwrap_or_default());
                if sibling.exists() {
                    sibling
                } else {
                    return Err(Error::Checkpoint(format!(
                        "autoencoder checkpoint for view {view} not found at {}",
                        stored.display()
                    )));
                }
            };
            ae_ckpts.insert(view.clone(), resolved);
        }
        let planner = Self::new(&config, &views, &ae_ckpts, 0)?;
        vilp_nn::io::load_params(path, &planner.params)?;
        // verify the referenced autoencoders still match the training-time
        // checksums
        for (view, entry) in meta["autoencoders"].as_object().unwrap() {
            let recorded = u64::from_str_radix(entry["checksum"].as_str().unwrap_or("0"), 16)
                .unwrap_or(0);
            let actual = planner.autoencoders[view].checksum();
            if recorded != actual {
                return Err(Error::Checkpoint(format!(
                    "autoencoder for view {view} changed since planner training"
                )));
            }
        }
        Ok(planner)
    }
}
