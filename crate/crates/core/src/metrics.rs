//! Video-plan quality metrics at desk scale: a Fréchet distance over
//! features from a small self-trained extractor, temporal-consistency and
//! multiview-alignment scores, plus inference-latency benchmarking against
//! a parameter-matched pixel-space diffusion baseline.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use vilp_nn::{Adam, Array, Linear, ParamBuilder, Tape, Var};

use crate::dataset::{DatasetHandle, ViewSpec};
use crate::diffusion::{build_schedule, sample, NoisePredictor, NoiseSchedule, SamplerConfig};
use crate::env::{EnvConfig, EnvState, Pose};
use crate::error::{Error, Result};
use crate::planner::MultiviewPlanner;
use crate::unet::{ObsEncoder, ObsEncoderConfig, UNet3d, UNetConfig};

// ---------------------------------------------------------------------------
// Frechet distance

/// Cyclic Jacobi eigendecomposition of a symmetric matrix (f64).
/// Returns eigenvalues; eigenvectors accumulate into `vecs` when given.
fn jacobi_eigenvalues(mat: &[f64], n: usize, mut vecs: Option<&mut Vec<f64>>) -> Vec<f64> {
    let mut a = mat.to_vec();
    if let Some(v) = vecs.as_deref_mut() {
        v.clear();
        v.resize(n * n, 0.0);
        for i in 0..n {
            v[i * n + i] = 1.0;
        }
    }
    for _sweep in 0..100 {
        let mut off = 0.0;
        for i in 0..n {
            for j in i + 1..n {
                off += a[i * n + j] * a[i * n + j];
            }
        }
        if off < 1e-24 {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                let apq = a[p * n + q];
                if apq.abs() < 1e-300 {
                    continue;
                }
                let app = a[p * n + p];
                let aqq = a[q * n + q];
                let theta = (aqq - app) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let akp = a[k * n + p];
                    let akq = a[k * n + q];
                    a[k * n + p] = c * akp - s * akq;
                    a[k * n + q] = s * akp + c * akq;
                }
                for k in 0..n {
                    let apk = a[p * n + k];
                    let aqk = a[q * n + k];
                    a[p * n + k] = c * apk - s * aqk;
                    a[q * n + k] = s * apk + c * aqk;
                }
                if let Some(v) = vecs.as_deref_mut() {
                    for k in 0..n {
                        let vkp = v[k * n + p];
                        let vkq = v[k * n + q];
                        v[k * n + p] = c * vkp - s * vkq;
                        v[k * n + q] = s * vkp + c * vkq;
                    }
                }
            }
        }
    }
    (0..n).map(|i| a[i * n + i]).collect()
}

/// Symmetric PSD square root via eigendecomposition.
fn sqrtm_psd(mat: &[f64], n: usize) -> Vec<f64> {
    let mut vecs = Vec::new();
    let vals = jacobi_eigenvalues(mat, n, Some(&mut vecs));
    let mut out = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            let mut acc = 0.0;
            for k in 0..n {
                acc += vecs[i * n + k] * vals[k].max(0.0).sqrt() * vecs[j * n + k];
            }
            out[i * n + j] = acc;
        }
    }
    out
}

fn matmul_sq(a: &[f64], b: &[f64], n: usize) -> Vec<f64> {
    let mut out = vec![0.0; n * n];
    for i in 0..n {
        for k in 0..n {
            let aik = a[i * n + k];
            if aik == 0.0 {
                continue;
            }
            for j in 0..n {
                out[i * n + j] += aik * b[k * n + j];
            }
        }
    }
    out
}

fn mean_and_cov(features: &Array<f32>, ridge: f64) -> (Vec<f64>, Vec<f64>) {
    let (n, f) = (features.dim(0), features.dim(1));
    let data = features.data();
    let mut mean = vec![0.0f64; f];
    for row in data.chunks_exact(f) {
        for (m, &v) in mean.iter_mut().zip(row) {
            *m += v as f64;
        }
    }
    for m in &mut mean {
        *m /= n as f64;
    }
    let mut cov = vec![0.0f64; f * f];
    for row in data.chunks_exact(f) {
        for i in 0..f {
            let di = row[i] as f64 - mean[i];
            for j in i..f {
                cov[i * f + j] += di * (row[j] as f64 - mean[j]);
            }
        }
    }
    let denom = (n as f64 - 1.0).max(1.0);
    for i in 0..f {
        for j in i..f {
            cov[i * f + j] /= denom;
            cov[j * f + i] = cov[i * f + j];
        }
    }
    if ridge > 0.0 {
        for i in 0..f {
            cov[i * f + i] += ridge;
        }
    }
    (mean, cov)
}

/// Squared Frechet distance between Gaussian fits of two feature sets
/// `(n, F)` and `(m, F)`:
/// `d^2 = |mu_a - mu_b|^2 + tr(Sa + Sb - 2 (Sa Sb)^{1/2})`.
/// Small samples (n <= F) get a ridge-regularized covariance; the flag in
/// the detailed variant records that.
pub fn frechet_distance(a: &Array<f32>, b: &Array<f32>) -> Result<f64> {
    frechet_distance_detailed(a, b).map(|(d, _)| d)
}

pub fn frechet_distance_detailed(a: &Array<f32>, b: &Array<f32>) -> Result<(f64, bool)> {
    if a.ndim() != 2 || b.ndim() != 2 || a.dim(1) != b.dim(1) {
        return Err(Error::Shape("feature sets must be (n, F) with equal F".into()));
    }
    if !a.all_finite() || !b.all_finite() {
        return Err(Error::NonFinite("feature sets".into()));
    }
    let f = a.dim(1);
    let (n, m) = (a.dim(0), b.dim(0));
    if n < 2 || m < 2 {
        return Err(Error::Shape("need at least 2 feature rows per set".into()));
    }
    let regularized = n <= f || m <= f;
    let ridge = if regularized { 1e-6 } else { 0.0 };
    let (mu_a, cov_a) = mean_and_cov(a, ridge);
    let (mu_b, cov_b) = mean_and_cov(b, ridge);

    let mean_term: f64 = mu_a.iter().zip(&mu_b).map(|(x, y)| (x - y) * (x - y)).sum();
    let tr_a: f64 = (0..f).map(|i| cov_a[i * f + i]).sum();
    let tr_b: f64 = (0..f).map(|i| cov_b[i * f + i]).sum();
    // tr((Sa Sb)^{1/2}) computed on the symmetric form A^(1/2) Sb A^(1/2)
    let root_a = sqrtm_psd(&cov_a, f);
    let inner = matmul_sq(&matmul_sq(&root_a, &cov_b, f), &root_a, f);
    let tr_sqrt: f64 =
        jacobi_eigenvalues(&inner, f, None).iter().map(|l| l.max(0.0).sqrt()).sum();

    Ok(((mean_term + tr_a + tr_b - 2.0 * tr_sqrt).max(0.0), regularized))
}

// ---------------------------------------------------------------------------
// Temporal consistency (SSIM of consecutive frames)

/// Mean structural similarity of consecutive frames: 1 for a static video,
/// near 0 for independent noise. `video` is `(N, H, W, C)` in [0,1].
pub fn temporal_consistency(video: &Array<f32>) -> Result<f64> {
    if video.ndim() != 4 {
        return Err(Error::Shape("expected (N, H, W, C)".into()));
    }
    let n = video.dim(0);
    if n < 2 {
        return Err(Error::Config("temporal consistency needs at least 2 frames".into()));
    }
    let per = video.dim(1) * video.dim(2) * video.dim(3);
    let mut acc = 0.0;
    for i in 0..n - 1 {
        let a = &video.data()[i * per..(i + 1) * per];
        let b = &video.data()[(i + 1) * per..(i + 2) * per];
        acc += ssim(a, b, video.dim(1), video.dim(2), video.dim(3));
    }
    Ok(acc / (n - 1) as f64)
}

/// Box-window SSIM (7x7, valid region, averaged over channels).
fn ssim(a: &[f32], b: &[f32], h: usize, w: usize, c: usize) -> f64 {
    const WIN: usize = 7;
    if h < WIN || w < WIN {
        // tiny images: single global window
        return ssim_window(a, b, &(0..a.len()).collect::<Vec<_>>());
    }
    let mut acc = 0.0;
    let mut count = 0usize;
    let step = 3; // dense enough; windows overlap
    for ci in 0..c {
        for y0 in (0..=h - WIN).step_by(step) {
            for x0 in (0..=w - WIN).step_by(step) {
                let mut idx = Vec::with_capacity(WIN * WIN);
                for dy in 0..WIN {
                    for dx in 0..WIN {
                        idx.push(((y0 + dy) * w + (x0 + dx)) * c + ci);
                    }
                }
                acc += ssim_window(a, b, &idx);
                count += 1;
            }
        }
    }
    acc / count.max(1) as f64
}

fn ssim_window(a: &[f32], b: &[f32], idx: &[usize]) -> f64 {
    const C1: f64 = 0.01 * 0.01;
    const C2: f64 = 0.03 * 0.03;
    let n = idx.len() as f64;
    let (mut ma, mut mb) = (0.0f64, 0.0f64);
    for &i in idx {
        ma += a[i] as f64;
        mb += b[i] as f64;
    }
    ma /= n;
    mb /= n;
    let (mut va, mut vb, mut cov) = (0.0f64, 0.0f64, 0.0f64);
    for &i in idx {
        let da = a[i] as f64 - ma;
        let db = b[i] as f64 - mb;
        va += da * da;
        vb += db * db;
        cov += da * db;
    }
    va /= n - 1.0;
    vb /= n - 1.0;
    cov /= n - 1.0;
    ((2.0 * ma * mb + C1) * (2.0 * cov + C2)) / ((ma * ma + mb * mb + C1) * (va + vb + C2))
}

// ---------------------------------------------------------------------------
// Feature extractor (FID/FVD stand-in)

/// Small frame-feature extractor trained on the toy dataset itself (a
/// thumbnail-autoencoding objective). Features are deterministic in
/// evaluation mode; absolute distance values are not comparable to
/// published numbers, only orderings are used.
pub struct FeatureExtractor {
    tower: ObsEncoder,
    pub feature_dim: usize,
    pub provenance: String,
    params: Vec<vilp_nn::Param<f32>>,
}

impl FeatureExtractor {
    pub const FRAME_DIM: usize = 32;

    /// Train on random frames of the dataset view by reconstructing 16x16
    /// thumbnails from the embedding. `episodes` restricts the frame pool
    /// (all episodes when empty).
    pub fn train(
        handle: &DatasetHandle,
        view_id: &str,
        episodes: &[String],
        steps: usize,
        seed: u64,
    ) -> Result<Self> {
        let spec = handle.view(view_id)?.clone();
        let mut rng = vilp_nn::rng_stream(seed, "feature-extractor");
        let pb: ParamBuilder<f32> = ParamBuilder::root();
        let cfg = ObsEncoderConfig {
            base_channels: 12,
            output_dim: Self::FRAME_DIM,
            depth_repeat: true,
        };
        let tower = ObsEncoder::new(&pb.pp("tower"), &mut rng, &cfg);
        let head = Linear::new(&pb.pp("head"), &mut rng, Self::FRAME_DIM, 16 * 16 * 3);
        let params = pb.all();
        let mut opt = Adam::new(params.clone(), 1.5e-3)
            .with_warmup(((steps / 10) as u64).clamp(10, 50))
            .with_clip_norm(Some(3.0));
        let ids: Vec<String> =
            if episodes.is_empty() { handle.episode_ids() } else { episodes.to_vec() };
        if ids.is_empty() {
            return Err(Error::Dataset("feature extractor needs a non-empty dataset".into()));
        }
        use rand::RngExt as _;
        for _ in 0..steps {
            let b = 8;
            let mut frames = Vec::with_capacity(b);
            for _ in 0..b {
                let id = &ids[rng.random_range(0..ids.len())];
                let len = handle.episode_entry(id)?.length;
                let fi = rng.random_range(0..len);
                frames.push(handle.read_frames(id, view_id, &[fi])?.reshape(&[
                    spec.height,
                    spec.width,
                    spec.channels,
                ]));
            }
            let thumbs: Vec<f32> = frames
                .iter()
                .flat_map(|f| thumbnail(f, 16))
                .collect();
            let chw: Vec<Array<f32>> =
                frames.iter().map(crate::util::hwc_to_chw).collect();
            let tape = Tape::new();
            let x = Tape::constant(crate::util::stack(&chw));
            let emb = tower.forward(&tape, &x);
            let rec = head.forward(&tape, &emb);
            let target = Tape::constant(Array::from_vec(&[b, 16 * 16 * 3], thumbs));
            let loss = tape.mse(&rec, &target);
            if !loss.value().all_finite() {
                return Err(Error::NonFinite("feature extractor loss".into()));
            }
            tape.backward(&loss);
            opt.step();
        }
        Ok(Self {
            tower,
            feature_dim: 2 * Self::FRAME_DIM,
            provenance: format!(
                "thumbnail-autoencoding tower trained {steps} steps on view {view_id}"
            ),
            params,
        })
    }

    /// Per-frame embeddings `(N, FRAME_DIM)` for a video `(N, H, W, C)`.
    pub fn frame_features(&self, video: &Array<f32>) -> Result<Array<f32>> {
        if video.ndim() != 4 {
            return Err(Error::Shape("expected (N, H, W, C)".into()));
        }
        let chw: Vec<Array<f32>> =
            crate::util::unstack(video).iter().map(crate::util::hwc_to_chw).collect();
        let tape = Tape::inference();
        let x = Tape::constant(crate::util::stack(&chw));
        let emb = self.tower.forward(&tape, &x);
        Ok(emb.value().clone())
    }

    /// One clip feature per video: mean frame embedding concatenated with
    /// the mean absolute embedding difference of consecutive frames
    /// (carries motion statistics). Clip length is the planner's N.
    pub fn video_feature(&self, video: &Array<f32>) -> Result<Array<f32>> {
        let frames = self.frame_features(video)?;
        let (n, d) = (frames.dim(0), frames.dim(1));
        if n < 2 {
            return Err(Error::Shape("video feature needs at least 2 frames".into()));
        }
        let mut mean = vec![0.0f32; d];
        for row in frames.data().chunks_exact(d) {
            for (m, &v) in mean.iter_mut().zip(row) {
                *m += v;
            }
        }
        for m in &mut mean {
            *m /= n as f32;
        }
        let mut motion = vec![0.0f32; d];
        for i in 0..n - 1 {
            let a = &frames.data()[i * d..(i + 1) * d];
            let b = &frames.data()[(i + 1) * d..(i + 2) * d];
            for (mo, (x, y)) in motion.iter_mut().zip(a.iter().zip(b)) {
                *mo += (x - y).abs();
            }
        }
        for mo in &mut motion {
            *mo /= (n - 1) as f32;
        }
        mean.extend(motion);
        Ok(Array::from_vec(&[2 * d], mean))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let meta = serde_json::json!({
            "kind": "feature_extractor",
            "feature_dim": self.feature_dim,
            "provenance": self.provenance,
        });
        vilp_nn::io::save_params(path, &meta, &self.params)?;
        Ok(())
    }
}

fn thumbnail(frame: &Array<f32>, size: usize) -> Vec<f32> {
    let (h, w, c) = (frame.dim(0), frame.dim(1), frame.dim(2));
    let mut out = vec![0.0f32; size * size * c];
    for ty in 0..size {
        for tx in 0..size {
            let y0 = ty * h / size;
            let y1 = ((ty + 1) * h / size).max(y0 + 1);
            let x0 = tx * w / size;
            let x1 = ((tx + 1) * w / size).max(x0 + 1);
            for ci in 0..c {
                let mut acc = 0.0f32;
                let mut cnt = 0;
                for y in y0..y1 {
                    for x in x0..x1 {
                        acc += frame.data()[(y * w + x) * c + ci];
                        cnt += 1;
                    }
                }
                out[(ty * size + tx) * c + ci] = acc / cnt as f32;
            }
        }
    }
    out
}

// ---------------------------------------------------------------------------
// Pose probes and multiview alignment

/// Per-view regressor from a frame to (agent_xy, block_xy) in world units.
/// Trained on freshly rendered states, so it is independent of the
/// generative stack it evaluates.
pub struct PoseProbe {
    tower: ObsEncoder,
    head: Linear<f32>,
    pub view: ViewSpec,
    /// Mean Euclidean error (world units) on held-out rendered states.
    pub validation_error: f64,
}

#[derive(Clone, Copy, Debug)]
pub struct PoseEstimate {
    pub agent: (f64, f64),
    pub block: (f64, f64),
}

impl PoseProbe {
    pub fn train(env_cfg: &EnvConfig, view: &ViewSpec, steps: usize, seed: u64) -> Result<Self> {
        let mut rng = vilp_nn::rng_stream(seed, "pose-probe");
        let pb: ParamBuilder<f32> = ParamBuilder::root();
        let cfg = ObsEncoderConfig { base_channels: 12, output_dim: 48, depth_repeat: true };
        let tower = ObsEncoder::new(&pb.pp("tower"), &mut rng, &cfg);
        let head = Linear::new(&pb.pp("head"), &mut rng, 48, 4);
        let mut opt = Adam::new(pb.all(), 1.5e-3)
            .with_warmup(((steps / 10) as u64).clamp(10, 50))
            .with_clip_norm(Some(3.0));

        use rand::RngExt as _;
        let sample_state = |rng: &mut vilp_nn::Rng| -> EnvState {
            let bx = 0.15 + 0.7 * rng.random::<f64>();
            let by = 0.15 + 0.7 * rng.random::<f64>();
            let theta = 0.12 * (2.0 * rng.random::<f64>() - 1.0);
            let (ax, ay) = loop {
                let ax = 0.05 + 0.9 * rng.random::<f64>();
                let ay = 0.05 + 0.9 * rng.random::<f64>();
                if ((ax - bx).powi(2) + (ay - by).powi(2)).sqrt() > 0.13 {
                    break (ax, ay);
                }
            };
            EnvState {
                agent_pos: (ax, ay),
                block_pose: Pose { x: bx, y: by, theta },
                target_pose: crate::env::FIXED_TARGET,
                step_count: 0,
            }
        };

        let render_batch = |states: &[EnvState], env_cfg: &EnvConfig, view: &ViewSpec| {
            let frames: Vec<Array<f32>> = states
                .iter()
                .map(|st| crate::util::hwc_to_chw(&crate::env::render_view(st, env_cfg, view)))
                .collect();
            crate::util::stack(&frames)
        };

        for _ in 0..steps {
            let b = 8;
            let states: Vec<EnvState> = (0..b).map(|_| sample_state(&mut rng)).collect();
            let x = render_batch(&states, env_cfg, view);
            let mut targets = Vec::with_capacity(b * 4);
            for st in &states {
                targets.push(st.agent_pos.0 as f32);
                targets.push(st.agent_pos.1 as f32);
                targets.push(st.block_pose.x as f32);
                targets.push(st.block_pose.y as f32);
            }
            let tape = Tape::new();
            let emb = tower.forward(&tape, &Tape::constant(x));
            let out = head.forward(&tape, &emb);
            let loss = tape.mse(&out, &Tape::constant(Array::from_vec(&[b, 4], targets)));
            tape.backward(&loss);
            opt.step();
        }

        // held-out validation error in world units
        let mut probe = Self { tower, head, view: view.clone(), validation_error: 0.0 };
        let mut err = 0.0;
        let n_val = 32;
        for _ in 0..n_val {
            let st = sample_state(&mut rng);
            let frame = crate::env::render_view(&st, env_cfg, view);
            let est = probe.estimate(&frame)?;
            err += dist(est.agent, st.agent_pos) + dist(est.block, (st.block_pose.x, st.block_pose.y));
        }
        probe.validation_error = err / (2.0 * n_val as f64);
        Ok(probe)
    }

    pub fn estimate(&self, frame: &Array<f32>) -> Result<PoseEstimate> {
        if frame.shape() != [self.view.height, self.view.width, self.view.channels] {
            return Err(Error::Shape(format!(
                "probe for view {} got frame {:?}",
                self.view.view_id,
                frame.shape()
            )));
        }
        let tape = Tape::inference();
        let x = crate::util::hwc_to_chw(frame);
        let mut shape = vec![1];
        shape.extend_from_slice(x.shape());
        let emb = self.tower.forward(&tape, &Tape::constant(x.reshape(&shape)));
        let out = self.head.forward(&tape, &emb);
        let d = out.value().data();
        Ok(PoseEstimate {
            agent: (d[0] as f64, d[1] as f64),
            block: (d[2] as f64, d[3] as f64),
        })
    }
}

fn dist(a: (f64, f64), b: (f64, f64)) -> f64 {
    ((a.0 - b.0).powi(2) + (a.1 - b.1).powi(2)).sqrt()
}

/// Multiview alignment score: mean per-frame disagreement of the per-view
/// block-position estimates, in world units (lower is better).
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum AlignmentScore {
    Disagreement(f64),
    /// Single-view plans have no cross-view disagreement to measure.
    NotApplicable,
}

pub fn multiview_alignment(
    plan_frames: &BTreeMap<String, Array<f32>>,
    probes: &BTreeMap<String, PoseProbe>,
) -> Result<AlignmentScore> {
    if plan_frames.len() < 2 {
        return Ok(AlignmentScore::NotApplicable);
    }
    let n = plan_frames.values().next().unwrap().dim(0);
    let mut total = 0.0;
    for fi in 0..n {
        let mut estimates = Vec::new();
        for (view, frames) in plan_frames {
            let probe = probes.get(view).ok_or_else(|| {
                Error::Config(format!("no pose probe for view {view}"))
            })?;
            let per = frames.dim(1) * frames.dim(2) * frames.dim(3);
            let frame = Array::from_vec(
                &[frames.dim(1), frames.dim(2), frames.dim(3)],
                frames.data()[fi * per..(fi + 1) * per].to_vec(),
            );
            estimates.push(probe.estimate(&frame)?.block);
        }
        let mut pair_acc = 0.0;
        let mut pairs = 0;
        for i in 0..estimates.len() {
            for j in i + 1..estimates.len() {
                pair_acc += dist(estimates[i], estimates[j]);
                pairs += 1;
            }
        }
        total += pair_acc / pairs as f64;
    }
    Ok(AlignmentScore::Disagreement(total / n as f64))
}

// ---------------------------------------------------------------------------
// Pixel-space baseline and latency benchmarking

/// Parameter-matched pixel-space video diffusion baseline: the same UNet
/// at full image resolution, conditioned by concatenating the observation
/// frame. Stands in for pixel-space planners in relative latency and
/// quality comparisons.
pub struct PixelBaseline {
    pub views: Vec<ViewSpec>,
    pub n: usize,
    pub schedule: NoiseSchedule,
    pub sampler: SamplerConfig,
    matched: UNetConfig,
    kind: crate::diffusion::ScheduleKind,
    unets: BTreeMap<String, UNet3d>,
    params: Vec<vilp_nn::Param<f32>>,
}

struct PixelPredictor<'a> {
    unet: &'a UNet3d,
    hw: (usize, usize),
}

impl NoisePredictor<f32> for PixelPredictor<'_> {
    fn predict(
        &self,
        tape: &Tape<f32>,
        x_k: &Var<f32>,
        ks: &[usize],
        cond: Option<&Var<f32>>,
    ) -> Var<f32> {
        let cond = cond.expect("pixel baseline conditions on the observation frame");
        let b = x_k.shape()[0];
        let n = x_k.shape()[2];
        let (h, w) = self.hw;
        let grid = tape.reshape(cond, &[b, h, w, 3]);
        let chw = tape.permute(&grid, &[0, 3, 1, 2]);
        let one = tape.reshape(&chw, &[b, 3, 1, h, w]);
        let frames: Vec<&Var<f32>> = std::iter::repeat_n(&one, n).collect();
        let cond_video = tape.concat(2, &frames);
        let stacked = tape.concat(1, &[x_k, &cond_video]);
        self.unet.forward(tape, &stacked, ks, None)
    }
}

impl PixelBaseline {
    /// Width-matched to the latent planner's UNet (same base channels and
    /// multipliers), operating on `(N, H, W, 3)` pixel videos.
    pub fn new(
        views: &[ViewSpec],
        n: usize,
        matched: &UNetConfig,
        k_max: usize,
        kind: crate::diffusion::ScheduleKind,
        sampler: SamplerConfig,
        seed: u64,
    ) -> Result<Self> {
        let mut rng = vilp_nn::rng_stream(seed, "pixel-baseline-init");
        let pb: ParamBuilder<f32> = ParamBuilder::root();
        let mut unets = BTreeMap::new();
        for v in views {
            let cfg = UNetConfig {
                base_channels: matched.base_channels,
                channel_multipliers: matched.channel_multipliers.clone(),
                attention_levels: vec![],
                num_heads: matched.num_heads,
                latent_shape: (n, v.height, v.width, 3),
                cond_tokens: 1,
            };
            cfg.validate()?;
            unets.insert(
                v.view_id.clone(),
                UNet3d::new(&pb.pp("view").pp(&v.view_id), &mut rng, &cfg, 6, 3, None)?,
            );
        }
        let schedule = build_schedule(kind, k_max)?;
        Ok(Self {
            views: views.to_vec(),
            n,
            schedule,
            sampler,
            matched: matched.clone(),
            kind,
            unets,
            params: pb.all(),
        })
    }

    /// Generate per-view pixel videos from the observation; returns the
    /// frames and the total latency in seconds.
    pub fn plan(
        &self,
        obs: &BTreeMap<String, Array<f32>>,
        sampler_override: Option<&SamplerConfig>,
        seed: u64,
    ) -> Result<(BTreeMap<String, Array<f32>>, f64)> {
        let sampler = sampler_override.unwrap_or(&self.sampler);
        let t0 = std::time::Instant::now();
        let mut out = BTreeMap::new();
        for v in &self.views {
            let frame = obs.get(&v.view_id).ok_or_else(|| {
                Error::Shape(format!("missing view {}", v.view_id))
            })?;
            let flat = frame.reshape(&[1, v.height * v.width * 3]);
            let predictor = PixelPredictor { unet: &self.unets[&v.view_id], hw: (v.height, v.width) };
            let mut rng = vilp_nn::rng_stream(seed, &format!("pixel-plan-{}", v.view_id));
            let video = sample(
                &predictor,
                &[1, 3, self.n, v.height, v.width],
                Some(&flat),
                sampler,
                &self.schedule,
                &mut rng,
            )?;
            let nhwc = crate::unet::cnhw_to_nhwc(&video.reshape(&[3, self.n, v.height, v.width]))
                .map(|x| x.clamp(0.0, 1.0));
            out.insert(v.view_id.clone(), nhwc);
        }
        Ok((out, t0.elapsed().as_secs_f64()))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let meta = serde_json::json!({
            "kind": "pixel_baseline",
            "views": self.views,
            "n": self.n,
            "matched": self.matched,
            "schedule_kind": self.kind,
            "k_max": self.schedule.k_max,
            "sampler": self.sampler,
        });
        vilp_nn::io::save_params(path, &meta, &self.params)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let (meta, _) = vilp_nn::io::load_archive::<f32>(path)?;
        let views: Vec<ViewSpec> = serde_json::from_value(meta["views"].clone())
            .map_err(|e| Error::Checkpoint(format!("{}: bad views: {e}", path.display())))?;
        let n = meta["n"].as_u64().unwrap_or(0) as usize;
        let matched: UNetConfig = serde_json::from_value(meta["matched"].clone())
            .map_err(|e| Error::Checkpoint(format!("{}: bad config: {e}", path.display())))?;
        let kind: crate::diffusion::ScheduleKind =
            serde_json::from_value(meta["schedule_kind"].clone())
                .map_err(|e| Error::Checkpoint(format!("{}: bad schedule: {e}", path.display())))?;
        let k_max = meta["k_max"].as_u64().unwrap_or(100) as usize;
        let sampler: SamplerConfig = serde_json::from_value(meta["sampler"].clone())
            .map_err(|e| Error::Checkpoint(format!("{}: bad sampler: {e}", path.display())))?;
        let baseline = Self::new(&views, n, &matched, k_max, kind, sampler, 0)?;
        vilp_nn::io::load_params(path, &baseline.params)?;
        Ok(baseline)
    }
}

/// One latency/quality record per (method, step count).
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct BenchReport {
    pub method: String,
    pub ddim_steps: usize,
    pub repeats: usize,
    pub mean_latency_s: f64,
    pub std_latency_s: f64,
    pub hardware: String,
}

fn hardware_note() -> String {
    format!(
        "cpu, {} threads",
        std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1)
    )
}

/// Measure end-to-end single-plan latency of the latent planner and the
/// pixel-space baseline across a DDIM step grid. Two warmup runs precede
/// the measured repeats; `repeats >= 10` is required.
pub fn bench_inference(
    planner: &MultiviewPlanner,
    baseline: &PixelBaseline,
    obs: &BTreeMap<String, Array<f32>>,
    steps_grid: &[usize],
    repeats: usize,
) -> Result<Vec<BenchReport>> {
    if repeats < 10 {
        return Err(Error::Config(format!("need at least 10 repeats, got {repeats}")));
    }
    if steps_grid.is_empty() {
        return Err(Error::Config("empty step grid".into()));
    }
    let mut reports = Vec::new();
    for &steps in steps_grid {
        let sampler = SamplerConfig::evenly_spaced(planner.config.k_max, steps)?;
        // warmup
        for w in 0..2 {
            planner.plan(obs, 0, Some(&sampler), w)?;
        }
        let mut times = Vec::with_capacity(repeats);
        for r in 0..repeats {
            let plan = planner.plan(obs, 0, Some(&sampler), r as u64)?;
            times.push(plan.latency.total_s);
        }
        reports.push(report_from("latent_planner", steps, &times));

        let sampler_b = SamplerConfig::evenly_spaced(baseline.schedule.k_max, steps)?;
        for w in 0..2 {
            baseline.plan(obs, Some(&sampler_b), w)?;
        }
        let mut times = Vec::with_capacity(repeats);
        for r in 0..repeats {
            let (_, dt) = baseline.plan(obs, Some(&sampler_b), r as u64)?;
            times.push(dt);
        }
        reports.push(report_from("pixel_baseline", steps, &times));
    }
    Ok(reports)
}

fn report_from(method: &str, steps: usize, times: &[f64]) -> BenchReport {
    let n = times.len() as f64;
    let mean = times.iter().sum::<f64>() / n;
    let var = times.iter().map(|t| (t - mean) * (t - mean)).sum::<f64>() / (n - 1.0).max(1.0);
    BenchReport {
        method: method.to_string(),
        ddim_steps: steps,
        repeats: times.len(),
        mean_latency_s: mean,
        std_latency_s: var.sqrt(),
        hardware: hardware_note(),
    }
}
