//! Self-contained 2-D push-a-block task: a disc agent pushes a square block
//! to a target pose under delta-motion actions. Renders synthetic camera
//! views (orthographic top view plus an oblique view) and ships a scripted
//! demonstrator with two approach modes.
//!
//! All simulation math is f64 and seed-deterministic: (seed, action
//! sequence) always reproduces the same trajectory and the same pixels.

use std::collections::BTreeMap;
use std::f64::consts::PI;

use rand::RngExt as _;
use serde::{Deserialize, Serialize};
use vilp_nn::Array;

use crate::dataset::{Episode, ViewSpec};
use crate::error::{Error, Result};

pub type Vec2 = (f64, f64);

fn add(a: Vec2, b: Vec2) -> Vec2 {
    (a.0 + b.0, a.1 + b.1)
}
fn sub(a: Vec2, b: Vec2) -> Vec2 {
    (a.0 - b.0, a.1 - b.1)
}
fn scale(a: Vec2, s: f64) -> Vec2 {
    (a.0 * s, a.1 * s)
}
fn norm(a: Vec2) -> f64 {
    (a.0 * a.0 + a.1 * a.1).sqrt()
}
fn normalize(a: Vec2) -> Vec2 {
    let n = norm(a);
    if n < 1e-12 {
        (0.0, 0.0)
    } else {
        scale(a, 1.0 / n)
    }
}
fn rot(a: Vec2, theta: f64) -> Vec2 {
    let (s, c) = theta.sin_cos();
    (c * a.0 - s * a.1, s * a.0 + c * a.1)
}
fn cross(a: Vec2, b: Vec2) -> f64 {
    a.0 * b.1 - a.1 * b.0
}
fn dot(a: Vec2, b: Vec2) -> f64 {
    a.0 * b.0 + a.1 * b.1
}

fn wrap_angle(t: f64) -> f64 {
    let mut t = t;
    while t <= -PI {
        t += 2.0 * PI;
    }
    while t > PI {
        t -= 2.0 * PI;
    }
    t
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Pose {
    pub x: f64,
    pub y: f64,
    pub theta: f64,
}

impl Pose {
    pub fn xy(&self) -> Vec2 {
        (self.x, self.y)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EnvState {
    pub agent_pos: Vec2,
    pub block_pose: Pose,
    pub target_pose: Pose,
    pub step_count: usize,
}

/// How the target pose is chosen at reset.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub enum TargetMode {
    /// The canonical task goal.
    Fixed,
    /// A fresh goal per seed: the "different goals" regime used for
    /// off-target demonstrations.
    Randomized,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EnvConfig {
    /// Per-step displacement cap (world units).
    pub action_cap: f64,
    pub views: Vec<ViewSpec>,
    /// Block/target overlap fraction that counts as success.
    pub success_threshold: f64,
    pub max_steps: usize,
    pub block_half: f64,
    pub agent_radius: f64,
    pub target: TargetMode,
    /// Supersampling factor for rendering.
    pub render_ss: usize,
}

impl EnvConfig {
    /// Two 64x64 color views: orthographic top view plus an oblique view.
    pub fn two_view(res: usize) -> Self {
        Self {
            action_cap: 0.03,
            views: vec![ViewSpec::color("top", res, res), ViewSpec::color("side", res, res)],
            success_threshold: 0.9,
            max_steps: 220,
            block_half: 0.08,
            agent_radius: 0.035,
            target: TargetMode::Fixed,
            render_ss: 2,
        }
    }

    pub fn single_view(res: usize) -> Self {
        let mut cfg = Self::two_view(res);
        cfg.views.truncate(1);
        cfg
    }

    pub fn validate(&self) -> Result<()> {
        if self.action_cap <= 0.0 {
            return Err(Error::Config("action_cap must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.success_threshold) || self.success_threshold == 0.0 {
            return Err(Error::Config("success_threshold must be in (0,1]".into()));
        }
        for v in &self.views {
            v.validate()?;
        }
        Ok(())
    }
}

pub const FIXED_TARGET: Pose = Pose { x: 0.72, y: 0.72, theta: 0.0 };

/// Region the block pose is sampled from at reset.
pub const BLOCK_INIT_LO: f64 = 0.2;
pub const BLOCK_INIT_HI: f64 = 0.58;
const BLOCK_INIT_THETA: f64 = 0.05;

#[derive(Clone, Debug, Serialize)]
pub struct StepInfo {
    pub overlap: f64,
    pub success: bool,
}

pub struct ToyPushEnv {
    pub cfg: EnvConfig,
    state: EnvState,
    done: bool,
    success: bool,
}

impl ToyPushEnv {
    pub fn new(cfg: EnvConfig) -> Result<Self> {
        cfg.validate()?;
        let state = EnvState {
            agent_pos: (0.15, 0.15),
            block_pose: Pose { x: 0.4, y: 0.4, theta: 0.0 },
            target_pose: FIXED_TARGET,
            step_count: 0,
        };
        Ok(Self { cfg, state, done: false, success: false })
    }

    /// Randomized initial block pose (and target, in `Randomized` mode),
    /// deterministic per seed.
    pub fn reset(&mut self, seed: u64) -> BTreeMap<String, Array<f32>> {
        let mut rng = vilp_nn::rng_stream(seed, "env-reset");
        let bx = BLOCK_INIT_LO + (BLOCK_INIT_HI - BLOCK_INIT_LO) * rng.random::<f64>();
        let by = BLOCK_INIT_LO + (BLOCK_INIT_HI - BLOCK_INIT_LO) * rng.random::<f64>();
        let bt = BLOCK_INIT_THETA * (2.0 * rng.random::<f64>() - 1.0);
        let target = match self.cfg.target {
            TargetMode::Fixed => FIXED_TARGET,
            TargetMode::Randomized => {
                // anywhere in the workspace away from the walls; re-draw
                // until it does not start on top of the block
                loop {
                    let tx = 0.2 + 0.6 * rng.random::<f64>();
                    let ty = 0.2 + 0.6 * rng.random::<f64>();
                    if ((tx - bx).powi(2) + (ty - by).powi(2)).sqrt() > 3.0 * self.cfg.block_half {
                        break Pose { x: tx, y: ty, theta: 0.0 };
                    }
                }
            }
        };
        // agent starts in the lower-left corner area, never inside the block
        let (ax, ay) = loop {
            let ax = 0.08 + 0.1 * rng.random::<f64>();
            let ay = 0.08 + 0.1 * rng.random::<f64>();
            if ((ax - bx).powi(2) + (ay - by).powi(2)).sqrt()
                > self.cfg.block_half + self.cfg.agent_radius + 0.02
            {
                break (ax, ay);
            }
        };
        self.state = EnvState {
            agent_pos: (ax, ay),
            block_pose: Pose { x: bx, y: by, theta: bt },
            target_pose: target,
            step_count: 0,
        };
        self.done = false;
        self.success = false;
        self.observe()
    }

    pub fn state(&self) -> &EnvState {
        &self.state
    }

    pub fn is_done(&self) -> bool {
        self.done
    }

    pub fn is_success(&self) -> bool {
        self.success
    }

    /// Fraction of the block square that lies inside the target square.
    pub fn overlap(&self) -> f64 {
        overlap_fraction(&self.state.block_pose, &self.state.target_pose, self.cfg.block_half)
    }

    /// Apply one delta-motion action (clamped to the magnitude cap).
    pub fn step(&mut self, action: Vec2) -> Result<(BTreeMap<String, Array<f32>>, bool, StepInfo)> {
        if self.done {
            return Err(Error::Env("step called on a terminated episode".into()));
        }
        let mut a = action;
        let n = norm(a);
        if n > self.cfg.action_cap {
            a = scale(a, self.cfg.action_cap / n);
        }
        if n > 0.0 {
            // substeps avoid tunnelling through the block face
            const SUBSTEPS: usize = 2;
            let da = scale(a, 1.0 / SUBSTEPS as f64);
            for _ in 0..SUBSTEPS {
                self.state.agent_pos = add(self.state.agent_pos, da);
                self.state.agent_pos.0 = self.state.agent_pos.0.clamp(0.02, 0.98);
                self.state.agent_pos.1 = self.state.agent_pos.1.clamp(0.02, 0.98);
                self.resolve_contact();
            }
        }
        self.state.step_count += 1;

        let overlap = self.overlap();
        let success = overlap >= self.cfg.success_threshold;
        if success {
            self.success = true;
            self.done = true;
        } else if self.state.step_count >= self.cfg.max_steps {
            self.done = true;
        }
        Ok((self.observe(), self.done, StepInfo { overlap, success }))
    }

    /// Quasi-static pushing: if the agent disc penetrates the block square,
    /// translate the block out along the contact normal and apply a small
    /// torque proportional to the contact-point lever arm.
    fn resolve_contact(&mut self) {
        let half = self.cfg.block_half;
        let r = self.cfg.agent_radius;
        let bp = self.state.block_pose;
        let q = rot(sub(self.state.agent_pos, bp.xy()), -bp.theta);
        let s = (q.0.clamp(-half, half), q.1.clamp(-half, half));
        let d = norm(sub(q, s));
        let inside = d < 1e-12;
        let (n_bf, depth) = if inside {
            // agent centre inside the block: separate along the least-
            // penetrated axis
            let ox = half + r - q.0.abs();
            let oy = half + r - q.1.abs();
            if ox < oy {
                ((q.0.signum(), 0.0), ox)
            } else {
                ((0.0, q.1.signum()), oy)
            }
        } else if d < r {
            (normalize(sub(q, s)), r - d)
        } else {
            return;
        };
        // block translates away from the agent
        let push_bf = scale(n_bf, -depth);
        let push_world = rot(push_bf, bp.theta);
        let mut bx = bp.x + push_world.0;
        let mut by = bp.y + push_world.1;
        let margin = half + 0.02;
        bx = bx.clamp(margin, 1.0 - margin);
        by = by.clamp(margin, 1.0 - margin);
        // torque from the lever arm of the contact point
        let contact = if inside { q } else { s };
        let k_rot = 0.02;
        let dtheta = k_rot * cross(contact, normalize(push_bf)) * (depth / half);
        self.state.block_pose =
            Pose { x: bx, y: by, theta: wrap_angle(bp.theta + dtheta) };
    }

    pub fn observe(&self) -> BTreeMap<String, Array<f32>> {
        render_state(&self.state, &self.cfg)
    }
}

/// Fraction of the square at `block` (half side `half`) inside the equal
/// square at `target`, estimated on a 21x21 grid of interior points.
pub fn overlap_fraction(block: &Pose, target: &Pose, half: f64) -> f64 {
    const G: usize = 21;
    let mut inside = 0usize;
    for i in 0..G {
        for j in 0..G {
            let lx = ((i as f64 + 0.5) / G as f64) * 2.0 * half - half;
            let ly = ((j as f64 + 0.5) / G as f64) * 2.0 * half - half;
            let world = add(block.xy(), rot((lx, ly), block.theta));
            let t = rot(sub(world, target.xy()), -target.theta);
            if t.0.abs() <= half && t.1.abs() <= half {
                inside += 1;
            }
        }
    }
    inside as f64 / (G * G) as f64
}

// ---------------------------------------------------------------------------
// Rendering

struct ViewTransform {
    /// screen = A * (world - c) + c + t
    a: [[f64; 2]; 2],
    c: Vec2,
    t: Vec2,
}

impl ViewTransform {
    fn top() -> Self {
        Self { a: [[1.0, 0.0], [0.0, 1.0]], c: (0.5, 0.5), t: (0.0, 0.0) }
    }

    /// Oblique camera: rotated and foreshortened along one axis.
    fn side() -> Self {
        let phi: f64 = 0.5; // ~29 degrees
        let (s, c) = phi.sin_cos();
        // R(phi) * diag(1.0, 0.62)
        Self { a: [[c, -0.62 * s], [s, 0.62 * c]], c: (0.5, 0.5), t: (0.02, 0.04) }
    }

    fn for_view(view_id: &str) -> Self {
        if view_id.contains("side") || view_id.contains("oblique") {
            Self::side()
        } else {
            Self::top()
        }
    }

    /// screen -> world
    fn inverse(&self, p: Vec2) -> Vec2 {
        let q = sub(sub(p, self.t), self.c);
        let det = self.a[0][0] * self.a[1][1] - self.a[0][1] * self.a[1][0];
        let inv = [
            [self.a[1][1] / det, -self.a[0][1] / det],
            [-self.a[1][0] / det, self.a[0][0] / det],
        ];
        add((inv[0][0] * q.0 + inv[0][1] * q.1, inv[1][0] * q.0 + inv[1][1] * q.1), self.c)
    }
}

struct Palette {
    background: [f64; 3],
    target: [f64; 3],
    block: [f64; 3],
    agent: [f64; 3],
}

fn palette_for(view_id: &str) -> Palette {
    if view_id.contains("side") || view_id.contains("oblique") {
        Palette {
            background: [0.86, 0.87, 0.88],
            target: [0.30, 0.62, 0.34],
            block: [0.22, 0.32, 0.72],
            agent: [0.82, 0.25, 0.20],
        }
    } else {
        Palette {
            background: [0.93, 0.93, 0.94],
            target: [0.36, 0.74, 0.40],
            block: [0.25, 0.38, 0.85],
            agent: [0.90, 0.22, 0.22],
        }
    }
}

/// Rasterize one state into every configured view. Pixels are averaged
/// over `render_ss`^2 sub-samples and quantized to the u8 grid, so frames
/// roundtrip bit-identically through the dataset store.
pub fn render_state(state: &EnvState, cfg: &EnvConfig) -> BTreeMap<String, Array<f32>> {
    let mut out = BTreeMap::new();
    for spec in &cfg.views {
        out.insert(spec.view_id.clone(), render_view(state, cfg, spec));
    }
    out
}

pub fn render_view(state: &EnvState, cfg: &EnvConfig, spec: &ViewSpec) -> Array<f32> {
    let tf = ViewTransform::for_view(&spec.view_id);
    let pal = palette_for(&spec.view_id);
    let (h, w, c) = (spec.height, spec.width, spec.channels);
    let ss = cfg.render_ss.max(1);
    let half = cfg.block_half;
    let mut data = vec![0f32; h * w * c];
    for py in 0..h {
        for px in 0..w {
            let mut acc = [0f64; 3];
            for sy in 0..ss {
                for sx in 0..ss {
                    let screen = (
                        (px as f64 + (sx as f64 + 0.5) / ss as f64) / w as f64,
                        (py as f64 + (sy as f64 + 0.5) / ss as f64) / h as f64,
                    );
                    let world = tf.inverse(screen);
                    let color = sample_color(state, half, cfg.agent_radius, world, &pal);
                    acc[0] += color[0];
                    acc[1] += color[1];
                    acc[2] += color[2];
                }
            }
            let n = (ss * ss) as f64;
            let base = (py * w + px) * c;
            if c == 3 {
                for k in 0..3 {
                    data[base + k] = quantize(acc[k] / n);
                }
            } else {
                // single-channel views store luminance
                let lum = (0.299 * acc[0] + 0.587 * acc[1] + 0.114 * acc[2]) / n;
                data[base] = quantize(lum);
            }
        }
    }
    Array::from_vec(&[h, w, c], data)
}

fn quantize(v: f64) -> f32 {
    ((v.clamp(0.0, 1.0) * 255.0).round() as u8) as f32 / 255.0
}

fn sample_color(state: &EnvState, half: f64, agent_r: f64, world: Vec2, pal: &Palette) -> [f64; 3] {
    // draw order: background, target, block, agent
    if norm(sub(world, state.agent_pos)) <= agent_r {
        return pal.agent;
    }
    let bq = rot(sub(world, state.block_pose.xy()), -state.block_pose.theta);
    if bq.0.abs() <= half && bq.1.abs() <= half {
        return pal.block;
    }
    let tq = rot(sub(world, state.target_pose.xy()), -state.target_pose.theta);
    if tq.0.abs() <= half && tq.1.abs() <= half {
        return pal.target;
    }
    pal.background
}

// ---------------------------------------------------------------------------
// Scripted demonstrator

/// Which side the demonstrator swings around the block on its way to the
/// pushing position. Two modes make the demonstration distribution
/// bimodal.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum ApproachSide {
    Left,
    Right,
}

#[derive(Clone, Debug)]
pub struct DemoOutcome {
    pub episode: Episode,
    pub mode: ApproachSide,
    pub success: bool,
    /// Step index at which the demonstrator entered its push phase.
    pub push_phase_start: usize,
}

/// Run the scripted policy in `env` (already reset) and record an episode.
/// With `noise_level == 0` the demonstrator solves the task.
pub fn scripted_demo(
    env: &mut ToyPushEnv,
    seed: u64,
    noise_level: f64,
) -> Result<DemoOutcome> {
    let mut rng = vilp_nn::rng_stream(seed, "demo");
    let obs0 = env.reset(seed);
    let side = if rng.random::<f64>() < 0.5 { ApproachSide::Left } else { ApproachSide::Right };

    let cap = env.cfg.action_cap;
    let half = env.cfg.block_half;
    let r = env.cfg.agent_radius;
    let standoff = half + r;

    let mut frames: BTreeMap<String, Vec<f32>> = BTreeMap::new();
    for (view, frame) in &obs0 {
        frames.insert(view.clone(), frame.data().to_vec());
    }
    let mut actions: Vec<f32> = Vec::new();
    let mut push_phase_start = None;
    let mut pushing = false;

    while !env.is_done() {
        let st = env.state().clone();
        let block = st.block_pose.xy();
        let target = st.target_pose.xy();
        let remaining = norm(sub(target, block));
        let dir = normalize(sub(target, block));
        let agent = st.agent_pos;
        let rel = sub(agent, block);
        let along = dot(rel, dir); // negative = behind the block
        let lateral = cross(dir, rel);

        // close to the goal, nudge gently instead of re-navigating on
        // tiny overshoots -- but never press through the block
        let behind = along < -half;
        let micro = remaining < 0.02 && behind;

        // drop out of the push phase if the agent is no longer behind or
        // drifted off the push line (prevents dragging the block sideways)
        if pushing && !micro && (along > -half * 0.5 || lateral.abs() > 0.035) {
            pushing = false;
        }
        if !pushing && (micro || (along < -(standoff * 0.85) && lateral.abs() < 0.02)) {
            pushing = true;
            push_phase_start = push_phase_start.or(Some(env.state().step_count));
        }

        let (nav_target, speed) = if pushing {
            let perp = (-dir.1, dir.0);
            let aligned = lateral.abs() < 0.01;
            if !aligned && !micro {
                // slide to the back line, staying clear of the block
                let aim = sub(block, scale(dir, standoff + 0.02));
                (aim, cap.min(0.012))
            } else {
                // steer the block's rotation by pressing off-centre: a
                // lateral contact offset o produces torque ~ -o
                let theta_err = wrap_angle(st.block_pose.theta - st.target_pose.theta);
                let offset = (theta_err * 2.0 * half / 0.1).clamp(-0.25 * half, 0.25 * half);
                // press into the block, gently when the goal is near
                let press = (0.012f64).min(remaining * 0.4).max(0.002);
                let aim = add(sub(block, scale(dir, standoff - press)), scale(perp, offset));
                let speed = if micro {
                    (remaining * 0.6).max(0.008)
                } else {
                    cap.min((remaining * 0.7).max(0.008))
                };
                (aim, speed)
            }
        } else {
            // navigate to the pushing position behind the block; when the
            // straight path would clip the block, orbit it tangentially on
            // the chosen side (recomputed every step, contact-free)
            let behind_point = sub(block, scale(dir, standoff + 0.025));
            let wp = if segment_clearance(agent, behind_point, block) > standoff + 0.008 {
                behind_point
            } else {
                let radial = normalize(rel);
                let tangent = match side {
                    ApproachSide::Left => (-radial.1, radial.0),
                    ApproachSide::Right => (radial.1, -radial.0),
                };
                add(block, add(scale(radial, standoff + 0.03), scale(tangent, 0.05)))
            };
            ((wp.0.clamp(0.04, 0.96), wp.1.clamp(0.04, 0.96)), cap)
        };

        let mut a = sub(nav_target, agent);
        let n = norm(a);
        if n > speed {
            a = scale(a, speed / n);
        }
        if noise_level > 0.0 {
            a.0 += noise_level * cap * normal_sample(&mut rng);
            a.1 += noise_level * cap * normal_sample(&mut rng);
        }
        let before = env.state().agent_pos;
        let (obs, _done, _info) = env.step(a)?;
        let executed = sub(env.state().agent_pos, before);
        actions.push(executed.0 as f32);
        actions.push(executed.1 as f32);
        for (view, frame) in &obs {
            frames.get_mut(view).unwrap().extend_from_slice(frame.data());
        }
    }

    let t = actions.len() / 2;
    let mut ep_frames = BTreeMap::new();
    for spec in &env.cfg.views {
        let data = frames.remove(&spec.view_id).unwrap();
        ep_frames.insert(
            spec.view_id.clone(),
            Array::from_vec(&[t + 1, spec.height, spec.width, spec.channels], data),
        );
    }
    let episode = Episode {
        episode_id: String::new(),
        frames: ep_frames,
        actions: Some(Array::from_vec(&[t, 2], actions)),
        action_labeled: true,
    };
    Ok(DemoOutcome {
        episode,
        mode: side,
        success: env.is_success(),
        push_phase_start: push_phase_start.unwrap_or(0),
    })
}

/// Minimum distance from point `c` to the segment `a..b`.
fn segment_clearance(a: Vec2, b: Vec2, c: Vec2) -> f64 {
    let ab = sub(b, a);
    let len2 = dot(ab, ab);
    if len2 < 1e-12 {
        return norm(sub(c, a));
    }
    let t = (dot(sub(c, a), ab) / len2).clamp(0.0, 1.0);
    norm(sub(c, add(a, scale(ab, t))))
}

fn normal_sample(rng: &mut vilp_nn::Rng) -> f64 {
    use rand_distr_shim::StandardNormalShim;
    StandardNormalShim::sample(rng)
}

// Minimal Box-Muller so this module does not depend on rand_distr.
mod rand_distr_shim {
    pub struct StandardNormalShim;
    impl StandardNormalShim {
        pub fn sample(rng: &mut vilp_nn::Rng) -> f64 {
            use rand::RngExt as _;
            let u1: f64 = rng.random::<f64>().max(1e-12);
            let u2: f64 = rng.random::<f64>();
            (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn env64() -> ToyPushEnv {
        ToyPushEnv::new(EnvConfig::two_view(32)).unwrap()
    }

    #[test]
    fn reset_is_deterministic() {
        let mut e1 = env64();
        let mut e2 = env64();
        let o1 = e1.reset(7);
        let o2 = e2.reset(7);
        assert_eq!(e1.state(), e2.state());
        for (v, f) in &o1 {
            assert_eq!(f.data(), o2[v].data());
        }
        let o3 = e1.reset(8);
        assert!(o3["top"].data() != o1["top"].data(), "different seeds should differ");
    }

    #[test]
    fn reset_covers_the_init_region() {
        // 5x5 equal cells over the block-init square; 100 seeds must hit
        // at least 80% of them
        let mut env = env64();
        let mut hit = [[false; 5]; 5];
        for seed in 0..100 {
            env.reset(seed);
            let b = env.state().block_pose;
            let fx = (b.x - BLOCK_INIT_LO) / (BLOCK_INIT_HI - BLOCK_INIT_LO);
            let fy = (b.y - BLOCK_INIT_LO) / (BLOCK_INIT_HI - BLOCK_INIT_LO);
            let i = ((fx * 5.0) as usize).min(4);
            let j = ((fy * 5.0) as usize).min(4);
            hit[i][j] = true;
        }
        let count: usize = hit.iter().flatten().filter(|&&h| h).count();
        assert!(count >= 20, "only {count}/25 cells covered");
    }

    #[test]
    fn render_contract() {
        let mut env = env64();
        let obs = env.reset(3);
        for spec in &env.cfg.views.clone() {
            let f = &obs[&spec.view_id];
            assert_eq!(f.shape(), &[spec.height, spec.width, spec.channels]);
            assert!(f.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
        }
    }

    #[test]
    fn zero_action_only_advances_the_clock() {
        let mut env = env64();
        env.reset(5);
        let before = env.state().clone();
        let (_, done, _) = env.step((0.0, 0.0)).unwrap();
        assert!(!done);
        let after = env.state();
        assert_eq!(after.agent_pos, before.agent_pos);
        assert_eq!(after.block_pose, before.block_pose);
        assert_eq!(after.step_count, before.step_count + 1);
    }

    #[test]
    fn oversized_actions_are_clamped_to_the_cap() {
        let mut env = env64();
        env.reset(5);
        let before = env.state().agent_pos;
        env.step((10.0, 0.0)).unwrap();
        let moved = norm(sub(env.state().agent_pos, before));
        assert!((moved - env.cfg.action_cap).abs() < 1e-9, "moved {moved}");
    }

    #[test]
    fn step_after_done_errors() {
        let mut env = env64();
        env.reset(5);
        for _ in 0..env.cfg.max_steps {
            if env.step((0.0, 0.0)).unwrap().1 {
                break;
            }
        }
        assert!(env.is_done());
        assert!(env.step((0.0, 0.0)).is_err());
    }

    #[test]
    fn trajectories_are_reproducible() {
        let run = || {
            let mut env = env64();
            env.reset(11);
            let mut states = Vec::new();
            for i in 0..30 {
                let a = (0.02 * ((i % 5) as f64 - 2.0) / 2.0, 0.015);
                env.step(a).unwrap();
                states.push(env.state().clone());
            }
            states
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn scripted_demo_succeeds_and_pushes_monotonically() {
        let mut env = env64();
        let demo = scripted_demo(&mut env, 4, 0.0).unwrap();
        assert!(demo.success, "zero-noise demo must succeed");

        // replay and check overlap is non-decreasing during the push phase
        let mut env = env64();
        env.reset(4);
        let actions = demo.episode.actions.as_ref().unwrap();
        let mut overlaps = Vec::new();
        for row in actions.data().chunks_exact(2) {
            if env.is_done() {
                break;
            }
            let (_, _, info) = env.step((row[0] as f64, row[1] as f64)).unwrap();
            overlaps.push(info.overlap);
        }
        let push = &overlaps[demo.push_phase_start.min(overlaps.len() - 1)..];
        let mut max_seen: f64 = 0.0;
        let mut dips = 0usize;
        for &o in push {
            if o < max_seen - 0.02 {
                dips += 1;
            }
            max_seen = max_seen.max(o);
        }
        // re-approaches may dip briefly; the bulk of the push is monotone
        assert!(dips <= push.len() / 10, "{dips} dips in {} push steps", push.len());
        assert!(max_seen >= env.cfg.success_threshold);
    }

    #[test]
    fn both_demo_modes_occur() {
        let mut left = 0;
        let mut right = 0;
        for seed in 0..100 {
            let mut env = env64();
            let demo = scripted_demo(&mut env, seed, 0.1).unwrap();
            match demo.mode {
                ApproachSide::Left => left += 1,
                ApproachSide::Right => right += 1,
            }
        }
        assert!(left >= 20, "left mode only {left}/100");
        assert!(right >= 20, "right mode only {right}/100");
    }

    #[test]
    fn demo_episode_passes_dataset_validation() {
        let dir = std::env::temp_dir().join(format!("vilp-env-ds-{}", std::process::id()));
        let _ = std::fs::remove_dir_all(&dir);
        let mut env = env64();
        let demo = scripted_demo(&mut env, 0, 0.0).unwrap();
        let mut handle =
            crate::dataset::DatasetHandle::create(&dir, env.cfg.views.clone(), 2).unwrap();
        handle.append_episode(&demo.episode).unwrap();
        handle.validate().unwrap();
        std::fs::remove_dir_all(&dir).ok();
    }

    #[test]
    fn block_stays_inside_the_workspace() {
        let mut env = env64();
        env.reset(2);
        // shove the block toward a wall for a while
        for _ in 0..200 {
            if env.is_done() {
                break;
            }
            let b = env.state().block_pose.xy();
            let a = normalize(sub(b, env.state().agent_pos));
            let _ = env.step(scale(a, 1.0));
        }
        let b = env.state().block_pose;
        let m = env.cfg.block_half;
        assert!(b.x >= m && b.x <= 1.0 - m && b.y >= m && b.y <= 1.0 - m);
        let o = env.overlap();
        assert!((0.0..=1.0).contains(&o));
    }

    #[test]
    #[ignore = "long: 200 seeded demos; run explicitly or via the acceptance suite"]
    fn demonstrator_is_reliable_over_200_seeds() {
        for seed in 0..200 {
            let mut env = env64();
            let demo = scripted_demo(&mut env, seed, 0.0).unwrap();
            assert!(demo.success, "seed {seed} failed");
        }
    }
}
