//! Per-view vector-quantized convolutional autoencoder. A frame
//! `(H, W, C)` in [0,1] maps to a latent grid `(H/s, W/s, C_lat)` and back;
//! after training the model is frozen and downstream diffusion never
//! touches its parameters.
//!
//! Diffusion operates on the continuous pre-quantization latents by
//! default (`diffuse_quantized` switches to codebook values), rescaled by a
//! dataset-estimated scalar so their standard deviation is about 1.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use vilp_nn::{Adam, Array, Conv2d, GroupNorm, Linear, Param, ParamBuilder, Scalar as _, Tape, Var};

use crate::dataset::DatasetHandle;
use crate::error::{Error, Result};
use crate::util::{chw_to_hwc, hwc_to_chw};

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct LossWeights {
    pub reconstruction: f64,
    pub commitment: f64,
    pub perceptual: f64,
    pub adversarial: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { reconstruction: 1.0, commitment: 0.25, perceptual: 0.0, adversarial: 0.0 }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct AutoencoderConfig {
    /// Spatial downsample factor `s` (power of two).
    pub downsample_factor: usize,
    pub latent_channels: usize,
    pub codebook_size: usize,
    pub base_channels: usize,
    pub loss_weights: LossWeights,
    /// Feed quantized codebook values (instead of continuous pre-quant
    /// latents) to downstream diffusion.
    pub diffuse_quantized: bool,
}

impl Default for AutoencoderConfig {
    fn default() -> Self {
        Self {
            downsample_factor: 8,
            latent_channels: 4,
            codebook_size: 256,
            base_channels: 16,
            loss_weights: LossWeights::default(),
            diffuse_quantized: false,
        }
    }
}

impl AutoencoderConfig {
    pub fn validate(&self) -> Result<()> {
        if !self.downsample_factor.is_power_of_two() || self.downsample_factor < 2 {
            return Err(Error::Config(format!(
                "downsample_factor must be a power of two >= 2, got {}",
                self.downsample_factor
            )));
        }
        if self.codebook_size < 2 {
            return Err(Error::Config("codebook_size must be >= 2".into()));
        }
        if self.latent_channels == 0 || self.base_channels == 0 {
            return Err(Error::Config("channel counts must be positive".into()));
        }
        let w = &self.loss_weights;
        for (name, v) in [
            ("reconstruction", w.reconstruction),
            ("commitment", w.commitment),
            ("perceptual", w.perceptual),
            ("adversarial", w.adversarial),
        ] {
            if v < 0.0 || !v.is_finite() {
                return Err(Error::Config(format!("loss weight {name} must be >= 0")));
            }
        }
        if w.reconstruction == 0.0 && w.commitment == 0.0 && w.perceptual == 0.0 && w.adversarial == 0.0
        {
            return Err(Error::Config("all loss weights are zero".into()));
        }
        Ok(())
    }

    fn num_stages(&self) -> usize {
        self.downsample_factor.trailing_zeros() as usize
    }

    fn stage_channels(&self) -> Vec<usize> {
        (0..=self.num_stages()).map(|i| self.base_channels << i.min(2)).collect()
    }
}

/// A compressed frame: continuous values `(H, W, C)` plus the codebook
/// assignment of each cell.
#[derive(Clone, Debug)]
pub struct LatentGrid {
    pub data: Array<f32>,
    pub codebook_indices: Option<Vec<u32>>,
}

impl LatentGrid {
    pub fn height(&self) -> usize {
        self.data.dim(0)
    }
    pub fn width(&self) -> usize {
        self.data.dim(1)
    }
    pub fn channels(&self) -> usize {
        self.data.dim(2)
    }
}

/// Nearest-neighbour quantization of a `(H, W, C)` pre-latent against a
/// codebook `(V, C)`. Ties resolve to the lowest index. Returns the
/// quantized grid and the mean squared distance (commitment loss).
pub fn quantize(pre_latent: &Array<f32>, codebook: &Array<f32>) -> (LatentGrid, f64) {
    assert_eq!(pre_latent.ndim(), 3, "pre_latent must be (H, W, C)");
    assert_eq!(codebook.ndim(), 2, "codebook must be (V, C)");
    let (h, w, c) = (pre_latent.dim(0), pre_latent.dim(1), pre_latent.dim(2));
    let v = codebook.dim(0);
    assert_eq!(codebook.dim(1), c, "codebook width must match latent channels");
    assert!(v >= 1, "codebook must be non-empty");

    let mut out = vec![0f32; h * w * c];
    let mut indices = Vec::with_capacity(h * w);
    let mut commit = 0.0f64;
    for cell in 0..h * w {
        let vec_in = &pre_latent.data()[cell * c..(cell + 1) * c];
        let mut best = 0usize;
        let mut best_d = f64::INFINITY;
        for vi in 0..v {
            let entry = &codebook.data()[vi * c..(vi + 1) * c];
            let mut d = 0.0f64;
            for j in 0..c {
                let diff = vec_in[j] as f64 - entry[j] as f64;
                d += diff * diff;
            }
            if d < best_d {
                best_d = d;
                best = vi;
            }
        }
        indices.push(best as u32);
        commit += best_d;
        out[cell * c..(cell + 1) * c].copy_from_slice(&codebook.data()[best * c..(best + 1) * c]);
    }
    let commitment = commit / (h * w * c) as f64;
    (LatentGrid { data: Array::from_vec(&[h, w, c], out), codebook_indices: Some(indices) }, commitment)
}

struct ResBlock2d {
    norm: GroupNorm<f32>,
    conv: Conv2d<f32>,
}

impl ResBlock2d {
    fn new(pb: &ParamBuilder<f32>, rng: &mut vilp_nn::Rng, ch: usize) -> Self {
        let g = vilp_nn::layers::group_count(ch);
        Self {
            norm: GroupNorm::new(&pb.pp("norm"), ch, g),
            conv: Conv2d::new(&pb.pp("conv"), rng, ch, ch, 3, 1, 1),
        }
    }

    fn forward(&self, tape: &Tape<f32>, x: &Var<f32>) -> Var<f32> {
        let h = self.conv.forward(tape, &tape.silu(&self.norm.forward(tape, x)));
        tape.add(x, &h)
    }
}

// Normalization lives inside the residual blocks only: their skip paths
// carry the DC component, which a final pre-latent norm would destroy
// (uniform frames would become unencodable). The first downsample happens
// in conv_in and the last upsample feeds a slim refinement conv, keeping
// full-resolution work to a minimum.
struct Encoder {
    conv_in: Conv2d<f32>,
    stages: Vec<(ResBlock2d, Conv2d<f32>)>,
    mid: ResBlock2d,
    to_latent: Conv2d<f32>,
}

struct Decoder {
    from_latent: Conv2d<f32>,
    mid: ResBlock2d,
    stages: Vec<(Conv2d<f32>, ResBlock2d)>,
    squeeze: Conv2d<f32>,
    refine: Conv2d<f32>,
    conv_out: Conv2d<f32>,
}

/// Frozen-after-training VQ autoencoder. Inference methods take `&self`;
/// the struct is safe to share across threads once trained.
pub struct VqAutoencoder {
    pub config: AutoencoderConfig,
    pub in_channels: usize,
    encoder: Encoder,
    decoder: Decoder,
    codebook: Param<f32>,
    latent_scale: f64,
    params: Vec<Param<f32>>,
}

impl VqAutoencoder {
    pub fn new(config: &AutoencoderConfig, in_channels: usize, seed: u64) -> Result<Self> {
        config.validate()?;
        if in_channels != 1 && in_channels != 3 {
            return Err(Error::Config(format!("in_channels must be 1 or 3, got {in_channels}")));
        }
        let mut rng = vilp_nn::rng_stream(seed, "autoencoder-init");
        let pb: ParamBuilder<f32> = ParamBuilder::root();
        let chs = config.stage_channels();
        let c_lat = config.latent_channels;

        let epb = pb.pp("encoder");
        // conv_in performs the first downsample
        let conv_in = Conv2d::new(&epb.pp("conv_in"), &mut rng, in_channels, chs[1], 3, 2, 1);
        let mut enc_stages = Vec::new();
        for i in 1..config.num_stages() {
            let spb = epb.pp(&format!("stage{i}"));
            let res = ResBlock2d::new(&spb.pp("res"), &mut rng, chs[i]);
            let down = Conv2d::new(&spb.pp("down"), &mut rng, chs[i], chs[i + 1], 3, 2, 1);
            enc_stages.push((res, down));
        }
        let last = *chs.last().unwrap();
        let enc_mid = ResBlock2d::new(&epb.pp("mid"), &mut rng, last);
        let to_latent = Conv2d::new(&epb.pp("to_latent"), &mut rng, last, c_lat, 1, 1, 0);

        let dpb = pb.pp("decoder");
        let from_latent = Conv2d::new(&dpb.pp("from_latent"), &mut rng, c_lat, last, 1, 1, 0);
        let dec_mid = ResBlock2d::new(&dpb.pp("mid"), &mut rng, last);
        let mut dec_stages = Vec::new();
        for i in (1..config.num_stages()).rev() {
            let spb = dpb.pp(&format!("stage{i}"));
            let up = Conv2d::new(&spb.pp("up"), &mut rng, chs[i + 1], chs[i], 3, 1, 1);
            let res = ResBlock2d::new(&spb.pp("res"), &mut rng, chs[i]);
            dec_stages.push((up, res));
        }
        // full-resolution refinement kept slim: squeeze channels first
        let squeeze = Conv2d::new(&dpb.pp("squeeze"), &mut rng, chs[1], 10, 1, 1, 0);
        let refine = Conv2d::new(&dpb.pp("refine"), &mut rng, 10, 10, 3, 1, 1);
        let conv_out = Conv2d::new(&dpb.pp("conv_out"), &mut rng, 10, in_channels, 3, 1, 1);

        let codebook = pb.param(
            "codebook",
            Array::randn(&mut rng, &[config.codebook_size, c_lat]).scale(0.5),
        );

        Ok(Self {
            config: config.clone(),
            in_channels,
            encoder: Encoder { conv_in, stages: enc_stages, mid: enc_mid, to_latent },
            decoder: Decoder {
                from_latent,
                mid: dec_mid,
                stages: dec_stages,
                squeeze,
                refine,
                conv_out,
            },
            codebook,
            latent_scale: 1.0,
            params: pb.all(),
        })
    }

    pub fn latent_scale(&self) -> f64 {
        self.latent_scale
    }

    pub fn codebook(&self) -> Array<f32> {
        self.codebook.value()
    }

    pub fn params(&self) -> &[Param<f32>] {
        &self.params
    }

    pub fn checksum(&self) -> u64 {
        vilp_nn::io::params_checksum(&self.params)
    }

    /// Encoder forward on a `[B, C, H, W]` batch -> `[B, C_lat, h, w]`
    /// pre-quantization latents (unscaled).
    fn encode_raw(&self, tape: &Tape<f32>, x: &Var<f32>) -> Var<f32> {
        let mut h = self.encoder.conv_in.forward(tape, x);
        for (res, down) in &self.encoder.stages {
            h = res.forward(tape, &h);
            h = down.forward(tape, &h);
        }
        h = self.encoder.mid.forward(tape, &h);
        self.encoder.to_latent.forward(tape, &h)
    }

    /// Decoder forward on `[B, C_lat, h, w]` (unscaled latents) ->
    /// `[B, C, H, W]`, unclamped.
    fn decode_raw(&self, tape: &Tape<f32>, z: &Var<f32>) -> Var<f32> {
        let mut h = self.decoder.from_latent.forward(tape, z);
        h = self.decoder.mid.forward(tape, &h);
        for (up, res) in &self.decoder.stages {
            h = tape.upsample2x(&h);
            h = up.forward(tape, &h);
            h = res.forward(tape, &h);
        }
        h = self.decoder.squeeze.forward(tape, &h);
        h = tape.upsample2x(&h);
        h = tape.silu(&self.decoder.refine.forward(tape, &h));
        // linear output: training MSE never saturates; eval paths clamp
        self.decoder.conv_out.forward(tape, &h)
    }

    fn check_frame_shape(&self, shape: &[usize]) -> Result<()> {
        let s = self.config.downsample_factor;
        if shape.len() != 3 || shape[2] != self.in_channels {
            return Err(Error::Shape(format!(
                "expected (H, W, {}), got {:?}",
                self.in_channels, shape
            )));
        }
        if shape[0] % s != 0 || shape[1] % s != 0 {
            return Err(Error::Shape(format!(
                "spatial dims {:?} not divisible by downsample factor {s}",
                &shape[..2]
            )));
        }
        Ok(())
    }

    /// Compress one frame `(H, W, C)` in [0,1] into a scaled latent grid
    /// `(H/s, W/s, C_lat)`. Deterministic in evaluation mode.
    pub fn encode(&self, frame: &Array<f32>) -> Result<LatentGrid> {
        self.check_frame_shape(frame.shape())?;
        let (h, w, c) = (frame.dim(0), frame.dim(1), frame.dim(2));
        let x = hwc_to_chw(frame).reshape(&[1, c, h, w]);
        let tape = Tape::inference();
        let z = self.encode_raw(&tape, &Tape::constant(x));
        let (zs, zc) = (z.value().dim(2), z.value().dim(3));
        let pre = chw_to_hwc(&z.value().reshape(&[self.config.latent_channels, zs, zc]));
        let (quantized, _commit) = quantize(&pre, &self.codebook.value());
        let chosen = if self.config.diffuse_quantized { quantized.data.clone() } else { pre };
        let scale = self.latent_scale as f32;
        Ok(LatentGrid {
            data: chosen.scale(scale),
            codebook_indices: quantized.codebook_indices,
        })
    }

    /// Reconstruct a frame from a scaled latent grid `(h, w, C_lat)`.
    pub fn decode(&self, latent: &Array<f32>) -> Result<Array<f32>> {
        if latent.ndim() != 3 || latent.dim(2) != self.config.latent_channels {
            return Err(Error::Shape(format!(
                "expected (h, w, {}), got {:?}",
                self.config.latent_channels,
                latent.shape()
            )));
        }
        let unscaled = latent.scale(1.0 / self.latent_scale as f32);
        let (h, w, c) = (unscaled.dim(0), unscaled.dim(1), unscaled.dim(2));
        let z = hwc_to_chw(&unscaled).reshape(&[1, c, h, w]);
        let tape = Tape::inference();
        let out = self.decode_raw(&tape, &Tape::constant(z));
        let s = self.config.downsample_factor;
        let clamped = out.value().map(|v| v.clamp(0.0, 1.0));
        let frame = chw_to_hwc(&clamped.reshape(&[self.in_channels, h * s, w * s]));
        Ok(frame)
    }

    /// Encode a whole stack of frames `(N, H, W, C)` -> `(N, h, w, C_lat)`
    /// scaled latents (no codebook indices).
    pub fn encode_frames(&self, frames: &Array<f32>) -> Result<Array<f32>> {
        if frames.ndim() != 4 {
            return Err(Error::Shape("expected (N, H, W, C)".into()));
        }
        self.check_frame_shape(&frames.shape()[1..])?;
        let (n, h, w, c) = (frames.dim(0), frames.dim(1), frames.dim(2), frames.dim(3));
        let per = h * w * c;
        let batch: Vec<Array<f32>> = (0..n)
            .map(|i| {
                hwc_to_chw(&Array::from_vec(
                    &[h, w, c],
                    frames.data()[i * per..(i + 1) * per].to_vec(),
                ))
            })
            .collect();
        let x = crate::util::stack(&batch);
        let tape = Tape::inference();
        let z = self.encode_raw(&tape, &Tape::constant(x));
        let (zh, zw) = (z.value().dim(2), z.value().dim(3));
        let c_lat = self.config.latent_channels;
        let scale = self.latent_scale as f32;
        let mut out = Vec::with_capacity(n * zh * zw * c_lat);
        for i in 0..n {
            let zi = Array::from_vec(
                &[c_lat, zh, zw],
                z.value().data()[i * c_lat * zh * zw..(i + 1) * c_lat * zh * zw].to_vec(),
            );
            let mut grid = chw_to_hwc(&zi);
            if self.config.diffuse_quantized {
                grid = quantize(&grid, &self.codebook.value()).0.data;
            }
            out.extend_from_slice(grid.scale(scale).data());
        }
        Ok(Array::from_vec(&[n, zh, zw, c_lat], out))
    }

    /// Decode a stack of scaled latents `(N, h, w, C_lat)` -> frames
    /// `(N, H, W, C)`.
    pub fn decode_frames(&self, latents: &Array<f32>) -> Result<Array<f32>> {
        if latents.ndim() != 4 || latents.dim(3) != self.config.latent_channels {
            return Err(Error::Shape(format!(
                "expected (N, h, w, {}), got {:?}",
                self.config.latent_channels,
                latents.shape()
            )));
        }
        let (n, h, w, c) = (latents.dim(0), latents.dim(1), latents.dim(2), latents.dim(3));
        let per = h * w * c;
        let inv = 1.0 / self.latent_scale as f32;
        let batch: Vec<Array<f32>> = (0..n)
            .map(|i| {
                hwc_to_chw(
                    &Array::from_vec(&[h, w, c], latents.data()[i * per..(i + 1) * per].to_vec())
                        .scale(inv),
                )
            })
            .collect();
        let tape = Tape::inference();
        let out = self.decode_raw(&tape, &Tape::constant(crate::util::stack(&batch)));
        let clamped = out.value().map(|v| v.clamp(0.0, 1.0));
        let s = self.config.downsample_factor;
        let (fh, fw) = (h * s, w * s);
        let per_out = self.in_channels * fh * fw;
        let mut data = Vec::with_capacity(n * per_out);
        for i in 0..n {
            let fi = Array::from_vec(
                &[self.in_channels, fh, fw],
                clamped.data()[i * per_out..(i + 1) * per_out].to_vec(),
            );
            data.extend_from_slice(chw_to_hwc(&fi).data());
        }
        Ok(Array::from_vec(&[n, fh, fw, self.in_channels], data))
    }

    pub fn save(&self, path: &Path, extra_meta: serde_json::Value) -> Result<()> {
        let meta = serde_json::json!({
            "kind": "vq_autoencoder",
            "config": self.config,
            "in_channels": self.in_channels,
            "latent_scale": self.latent_scale,
            "extra": extra_meta,
        });
        vilp_nn::io::save_params(path, &meta, &self.params)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let (meta, _) = vilp_nn::io::load_archive::<f32>(path)?;
        let config: AutoencoderConfig = serde_json::from_value(meta["config"].clone())
            .map_err(|e| Error::Checkpoint(format!("{}: bad config: {e}", path.display())))?;
        let in_channels = meta["in_channels"].as_u64().ok_or_else(|| {
            Error::Checkpoint(format!("{}: missing in_channels", path.display()))
        })? as usize;
        let mut model = Self::new(&config, in_channels, 0)?;
        vilp_nn::io::load_params(path, &model.params)?;
        model.latent_scale = meta["latent_scale"].as_f64().unwrap_or(1.0);
        Ok(model)
    }
}

/// Fixed random conv features for the perceptual term: a small frozen
/// network trained on nothing, which still orders reconstructions by
/// structural agreement. Active only when `loss_weights.perceptual > 0`.
struct PerceptualNet {
    w1: Array<f32>,
    w2: Array<f32>,
}

impl PerceptualNet {
    fn new(in_channels: usize) -> Self {
        let mut rng = vilp_nn::rng_stream(0xfea7, "perceptual");
        let w1 = vilp_nn::Init::KaimingNormal { fan_in: in_channels * 9, gain: 1.0 }
            .build(&mut rng, &[16, in_channels, 3, 3]);
        let w2 = vilp_nn::Init::KaimingNormal { fan_in: 16 * 9, gain: 1.0 }
            .build(&mut rng, &[32, 16, 3, 3]);
        Self { w1, w2 }
    }

    fn features(&self, tape: &Tape<f32>, x: &Var<f32>) -> Var<f32> {
        let h = tape.conv2d(x, &Tape::constant(self.w1.clone()), None, (2, 2), (1, 1));
        let h = tape.silu(&h);
        let h = tape.conv2d(&h, &Tape::constant(self.w2.clone()), None, (2, 2), (1, 1));
        tape.silu(&h)
    }
}

/// Patch discriminator for the optional adversarial term.
struct PatchDiscriminator {
    conv1: Conv2d<f32>,
    conv2: Conv2d<f32>,
    head: Conv2d<f32>,
    out: Linear<f32>,
    params: Vec<Param<f32>>,
}

impl PatchDiscriminator {
    fn new(in_channels: usize, seed: u64) -> Self {
        let mut rng = vilp_nn::rng_stream(seed, "discriminator-init");
        let pb: ParamBuilder<f32> = ParamBuilder::root();
        let conv1 = Conv2d::new(&pb.pp("conv1"), &mut rng, in_channels, 16, 3, 2, 1);
        let conv2 = Conv2d::new(&pb.pp("conv2"), &mut rng, 16, 32, 3, 2, 1);
        let head = Conv2d::new(&pb.pp("head"), &mut rng, 32, 1, 3, 1, 1);
        let out = Linear::new(&pb.pp("out"), &mut rng, 1, 1);
        Self { conv1, conv2, head, out, params: pb.all() }
    }

    /// Mean patch logit per batch element `[B, 1]`.
    fn logits(&self, tape: &Tape<f32>, x: &Var<f32>) -> Var<f32> {
        let h = tape.silu(&self.conv1.forward(tape, x));
        let h = tape.silu(&self.conv2.forward(tape, &h));
        let h = self.head.forward(tape, &h);
        let pooled = tape.mean_trailing(&h);
        self.out.forward(tape, &pooled)
    }
}

/// `total` is an exponentially smoothed loss (the value training logs
/// report); the component fields are raw per-batch terms.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct AeLossRecord {
    pub step: usize,
    pub total: f64,
    pub reconstruction: f64,
    pub codebook: f64,
    pub commitment: f64,
}

#[derive(Debug)]
pub struct AeTrainResult {
    pub checkpoint: PathBuf,
    pub log: Vec<AeLossRecord>,
    pub latent_scale: f64,
    pub steps_done: usize,
}

pub struct AeTrainOptions {
    pub steps: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seed: u64,
    /// Continue from this checkpoint instead of fresh initialization.
    pub resume_from: Option<PathBuf>,
    /// Restrict training frames to these episodes (all when empty).
    pub episodes: Vec<String>,
}

impl Default for AeTrainOptions {
    fn default() -> Self {
        Self {
            steps: 2000,
            batch_size: 8,
            learning_rate: 2e-3,
            seed: 0,
            resume_from: None,
            episodes: Vec::new(),
        }
    }
}

/// Train the view's autoencoder on random frames from the dataset, write
/// the checkpoint (config echo, parameters, codebook, latent scale) and a
/// JSON-lines loss log next to it.
pub fn train_autoencoder(
    handle: &DatasetHandle,
    view_id: &str,
    config: &AutoencoderConfig,
    opts: &AeTrainOptions,
    out_path: &Path,
) -> Result<AeTrainResult> {
    config.validate()?;
    let spec = handle.view(view_id)?.clone();
    if handle.num_episodes() == 0 {
        return Err(Error::Dataset("cannot train on an empty dataset".into()));
    }
    if spec.height % config.downsample_factor != 0 || spec.width % config.downsample_factor != 0 {
        return Err(Error::Config(format!(
            "view {view_id} ({}x{}) not divisible by downsample factor {}",
            spec.height, spec.width, config.downsample_factor
        )));
    }

    let (mut model, start_step, mut ema) = match &opts.resume_from {
        Some(path) => {
            let m = VqAutoencoder::load(path)?;
            let (meta, _) = vilp_nn::io::load_archive::<f32>(path)?;
            let done = meta["extra"]["steps_done"].as_u64().unwrap_or(0) as usize;
            let prev = meta["extra"]["final_loss"].as_f64();
            (m, done, prev)
        }
        None => (VqAutoencoder::new(config, spec.channels, opts.seed)?, 0, None),
    };

    let mut rng = vilp_nn::rng_stream(opts.seed, "autoencoder-train");
    let warmup = (opts.steps as u64 / 10).clamp(10, 100);
    let mut opt = Adam::new(model.params.clone(), opts.learning_rate)
        .with_warmup(warmup)
        .with_clip_norm(Some(3.0));
    // short runs (tests, fine-tuning) keep a flat rate; long runs anneal
    if opts.steps >= 500 {
        opt = opt.with_cosine_decay(opts.steps as u64);
    }
    if let Some(prev) = &opts.resume_from {
        let state_path = prev.with_extension("opt");
        if state_path.exists() {
            opt.load_state_file(&state_path)?;
        }
    }
    let perceptual =
        (config.loss_weights.perceptual > 0.0).then(|| PerceptualNet::new(spec.channels));
    let mut disc = (config.loss_weights.adversarial > 0.0)
        .then(|| (PatchDiscriminator::new(spec.channels, opts.seed), ()));
    let mut disc_opt = disc
        .as_ref()
        .map(|(d, _)| Adam::new(d.params.clone(), opts.learning_rate * 0.5));

    let episode_ids =
        if opts.episodes.is_empty() { handle.episode_ids() } else { opts.episodes.clone() };
    if episode_ids.is_empty() {
        return Err(Error::Dataset("no episodes selected for training".into()));
    }
    let mut log = Vec::new();
    let mut code_last_used = vec![0usize; config.codebook_size];
    use rand::RngExt as _;

    for step in 0..opts.steps {
        // assemble a batch of random frames
        let mut batch = Vec::with_capacity(opts.batch_size);
        for _ in 0..opts.batch_size {
            let eid = &episode_ids[rng.random_range(0..episode_ids.len())];
            let len = handle.episode_entry(eid)?.length;
            let fi = rng.random_range(0..len);
            let frame = handle.read_frames(eid, view_id, &[fi])?;
            batch.push(hwc_to_chw(&frame.reshape(&[spec.height, spec.width, spec.channels])));
        }
        let x = crate::util::stack(&batch);
        let b = opts.batch_size;

        let tape = Tape::new();
        let xc = Tape::constant(x.clone());
        let z_e = model.encode_raw(&tape, &xc);
        let (zh, zw) = (z_e.value().dim(2), z_e.value().dim(3));
        let c_lat = config.latent_channels;

        // per-cell vectors: [B, C, h, w] -> [B*h*w, C]
        let z_rows = tape.reshape(
            &tape.permute(&z_e, &[0, 2, 3, 1]),
            &[b * zh * zw, c_lat],
        );

        // data-dependent codebook init: seed entries from real encoder
        // outputs so the quantizer starts on the data manifold
        if step == 0 && start_step == 0 {
            let zr = z_rows.value();
            let cells = b * zh * zw;
            let mut cb = model.codebook.value();
            let data = cb.data_mut();
            for vi in 0..config.codebook_size {
                let cell = rng.random_range(0..cells);
                for j in 0..c_lat {
                    data[vi * c_lat + j] =
                        zr.data()[cell * c_lat + j] + 0.05 * f32::standard_normal(&mut rng);
                }
            }
            model.codebook.set_value(cb);
        }

        // revive entries that have gone unused: park them on current
        // encoder outputs so the codebook tracks the data. This must happen
        // before the nearest-neighbour assignment below.
        if step > 0 && step % 50 == 0 {
            let zr = z_rows.value();
            let cells = b * zh * zw;
            let mut cb = model.codebook.value();
            let data = cb.data_mut();
            for vi in 0..config.codebook_size {
                if step + 1 - code_last_used[vi] > 100 {
                    let cell = rng.random_range(0..cells);
                    data[vi * c_lat..(vi + 1) * c_lat]
                        .copy_from_slice(&zr.data()[cell * c_lat..(cell + 1) * c_lat]);
                    code_last_used[vi] = step + 1;
                }
            }
            model.codebook.set_value(cb);
        }

        let indices: Vec<usize> = {
            let cb = model.codebook.value();
            let zr = z_rows.value();
            let mut idx = Vec::with_capacity(b * zh * zw);
            for cell in 0..b * zh * zw {
                let vec_in = &zr.data()[cell * c_lat..(cell + 1) * c_lat];
                let mut best = 0usize;
                let mut best_d = f64::INFINITY;
                for vi in 0..config.codebook_size {
                    let entry = &cb.data()[vi * c_lat..(vi + 1) * c_lat];
                    let mut d = 0.0f64;
                    for j in 0..c_lat {
                        let diff = (vec_in[j] - entry[j]) as f64;
                        d += diff * diff;
                    }
                    if d < best_d {
                        best_d = d;
                        best = vi;
                    }
                }
                idx.push(best);
            }
            idx
        };
        for &i in &indices {
            code_last_used[i] = step + 1;
        }

        let cb_var = tape.param(&model.codebook);
        let z_q = tape.gather_rows(&cb_var, &indices);
        // codebook pulls toward (detached) encoder output; encoder is
        // pulled toward (detached) codebook values
        let codebook_loss = tape.mse(&z_q, &tape.detach(&z_rows));
        let commitment = tape.mse(&z_rows, &tape.detach(&z_q));
        // The decoder trains on whichever latents downstream diffusion will
        // hand it: continuous pre-quantization values by default, the
        // straight-through quantized path when diffuse_quantized is set.
        let dec_rows = if config.diffuse_quantized {
            tape.straight_through(&z_rows, z_q.value().clone())
        } else {
            z_rows.clone()
        };
        let z_dec = tape.permute(
            &tape.reshape(&dec_rows, &[b, zh, zw, c_lat]),
            &[0, 3, 1, 2],
        );
        let x_hat = model.decode_raw(&tape, &z_dec);
        let recon = tape.mse(&x_hat, &xc);

        let w = &config.loss_weights;
        let mut total = tape.add(
            &tape.scale(&recon, w.reconstruction as f32),
            &tape.add(&codebook_loss, &tape.scale(&commitment, w.commitment as f32)),
        );
        if let Some(p) = &perceptual {
            let fa = p.features(&tape, &x_hat);
            let fb = p.features(&tape, &xc);
            total = tape.add(&total, &tape.scale(&tape.mse(&fa, &fb), w.perceptual as f32));
        }
        if let (Some((d, _)), Some(dopt)) = (&mut disc, &mut disc_opt) {
            // discriminator update on a separate tape
            let dtape = Tape::new();
            let real_logits = d.logits(&dtape, &Tape::constant(x.clone()));
            let fake_logits = d.logits(&dtape, &Tape::constant(x_hat.value().clone()));
            // hinge loss
            let one = Tape::constant(Array::full(real_logits.shape(), 1.0f32));
            let real_term = dtape.mean_all(&dtape.relu(&dtape.sub(&one, &real_logits)));
            let neg_one = Tape::constant(Array::full(fake_logits.shape(), -1.0f32));
            let fake_term = dtape.mean_all(&dtape.relu(&dtape.sub(&fake_logits, &neg_one)));
            let d_loss = dtape.add(&real_term, &fake_term);
            dtape.backward(&d_loss);
            dopt.step();

            // generator term: raise the discriminator score of x_hat
            let g_logits = d.logits(&tape, &x_hat);
            let g_adv = tape.neg(&tape.mean_all(&g_logits));
            total = tape.add(&total, &tape.scale(&g_adv, w.adversarial as f32));
        }

        let total_v = total.value().data()[0] as f64;
        if !total_v.is_finite() {
            return Err(Error::NonFinite(format!(
                "autoencoder loss at step {} (recon {:.4}, codebook {:.4})",
                start_step + step,
                recon.value().data()[0],
                codebook_loss.value().data()[0]
            )));
        }
        tape.backward(&total);
        opt.step();

        ema = Some(match ema {
            Some(e) => 0.9 * e + 0.1 * total_v,
            None => total_v,
        });
        if step % 25 == 0 || step + 1 == opts.steps {
            log.push(AeLossRecord {
                step: start_step + step,
                total: ema.unwrap(),
                reconstruction: recon.value().data()[0] as f64,
                codebook: codebook_loss.value().data()[0] as f64,
                commitment: commitment.value().data()[0] as f64,
            });
        }
    }

    // estimate the latent scale on a frame sample so downstream diffusion
    // sees roughly unit-variance data
    model.latent_scale = 1.0;
    let mut values = Vec::new();
    for _ in 0..64 {
        let eid = &episode_ids[rng.random_range(0..episode_ids.len())];
        let len = handle.episode_entry(eid)?.length;
        let fi = rng.random_range(0..len);
        let frame = handle.read_frames(eid, view_id, &[fi])?;
        let grid =
            model.encode(&frame.reshape(&[spec.height, spec.width, spec.channels]))?;
        values.extend(grid.data.data().iter().map(|&v| v as f64));
    }
    let mean = values.iter().sum::<f64>() / values.len() as f64;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / values.len() as f64;
    model.latent_scale = 1.0 / var.sqrt().max(1e-6);

    let steps_done = start_step + opts.steps;
    opt.save_state_file(&out_path.with_extension("opt"))?;
    model.save(
        out_path,
        serde_json::json!({
            "view_id": view_id,
            "steps_done": steps_done,
            "final_loss": log.last().map(|r| r.total),
        }),
    )?;
    let log_path = out_path.with_extension("log.jsonl");
    let mut text = String::new();
    for r in &log {
        text.push_str(&serde_json::to_string(r)?);
        text.push('\n');
    }
    std::fs::write(&log_path, text)?;

    Ok(AeTrainResult {
        checkpoint: out_path.to_path_buf(),
        log,
        latent_scale: model.latent_scale,
        steps_done,
    })
}
