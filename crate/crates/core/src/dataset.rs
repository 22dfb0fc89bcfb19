//! Episodic on-disk dataset of multiview frames with optional action labels.
//!
//! Layout:
//!
//! ```text
//! <root>/
//!   manifest.json                  # views, action_dim, episode index
//!   episodes/<episode_id>/
//!     <view_id>.arr                # u8 frames, shape (T+1, H, W, C)
//!     actions.arr                  # f32 actions, shape (T, A), labeled only
//! ```
//!
//! Payload files are little-endian arrays: an 8-byte magic, a dtype tag,
//! the shape, then row-major data (see [`payload`]). Frames are stored as
//! 8-bit integers and read back as floats in [0,1]; fixed stride per frame
//! makes partial reads of long episodes cheap.
//!
//! Appends are single-writer; the manifest update is an atomic rename, so
//! a crash mid-append never leaves a partially indexed episode. Reads are
//! safe from any number of threads.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use vilp_nn::Array;

use crate::error::{Error, Result};

pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ViewSpec {
    pub view_id: String,
    pub height: usize,
    pub width: usize,
    /// 1 (depth) or 3 (color).
    pub channels: usize,
}

impl ViewSpec {
    pub fn color(view_id: &str, height: usize, width: usize) -> Self {
        Self { view_id: view_id.to_string(), height, width, channels: 3 }
    }

    pub fn depth(view_id: &str, height: usize, width: usize) -> Self {
        Self { view_id: view_id.to_string(), height, width, channels: 1 }
    }

    pub fn validate(&self) -> Result<()> {
        if self.channels != 1 && self.channels != 3 {
            return Err(Error::Config(format!(
                "view {}: channels must be 1 or 3, got {}",
                self.view_id, self.channels
            )));
        }
        if self.height == 0 || self.width == 0 {
            return Err(Error::Config(format!("view {}: zero spatial extent", self.view_id)));
        }
        Ok(())
    }
}

/// A variable-length sequence of multiview observations with optional
/// per-step actions. Frames are `(T+1, H, W, C)` floats in [0,1]; actions
/// are `(T, A)`.
#[derive(Clone, Debug)]
pub struct Episode {
    pub episode_id: String,
    pub frames: BTreeMap<String, Array<f32>>,
    pub actions: Option<Array<f32>>,
    pub action_labeled: bool,
}

impl Episode {
    /// Frame count `T_d + 1`.
    pub fn length(&self) -> usize {
        self.frames.values().next().map(|f| f.dim(0)).unwrap_or(0)
    }

    /// Last frame index `T_d` (also the action count when labeled).
    pub fn t_d(&self) -> usize {
        self.length().saturating_sub(1)
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EpisodeEntry {
    pub episode_id: String,
    pub length: usize,
    pub action_labeled: bool,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Manifest {
    pub format_version: u32,
    pub views: Vec<ViewSpec>,
    pub action_dim: usize,
    pub episodes: Vec<EpisodeEntry>,
}

/// A sampled diffusion-training window: the N frames at `t + k*dt`
/// (k = 1..=N), the conditioning observation at `t`, and, when labeled,
/// the actions covering steps `t .. t + N*dt - 1`.
#[derive(Clone, Debug)]
pub struct SequenceSample {
    pub frames: BTreeMap<String, Array<f32>>,
    pub condition_obs: BTreeMap<String, Array<f32>>,
    pub actions: Option<Array<f32>>,
    pub anchor_t: usize,
    pub n: usize,
    pub dt: usize,
}

pub struct DatasetHandle {
    root: PathBuf,
    manifest: Manifest,
}

impl DatasetHandle {
    /// Create a fresh dataset. Fails if `root` already holds a manifest.
    pub fn create(root: &Path, views: Vec<ViewSpec>, action_dim: usize) -> Result<Self> {
        if root.join("manifest.json").exists() {
            return Err(Error::ManifestExists(root.to_path_buf()));
        }
        if views.is_empty() {
            return Err(Error::Config("dataset needs at least one view".into()));
        }
        let mut seen = std::collections::BTreeSet::new();
        for v in &views {
            v.validate()?;
            if !seen.insert(v.view_id.clone()) {
                return Err(Error::Config(format!("duplicate view id {}", v.view_id)));
            }
        }
        std::fs::create_dir_all(root.join("episodes"))?;
        let manifest =
            Manifest { format_version: FORMAT_VERSION, views, action_dim, episodes: Vec::new() };
        let handle = Self { root: root.to_path_buf(), manifest };
        handle.write_manifest()?;
        Ok(handle)
    }

    pub fn open(root: &Path) -> Result<Self> {
        let bytes = std::fs::read(root.join("manifest.json"))
            .map_err(|e| Error::Dataset(format!("no manifest at {}: {e}", root.display())))?;
        let manifest: Manifest = serde_json::from_slice(&bytes)?;
        if manifest.format_version != FORMAT_VERSION {
            return Err(Error::Dataset(format!(
                "unsupported format_version {} (expected {FORMAT_VERSION})",
                manifest.format_version
            )));
        }
        Ok(Self { root: root.to_path_buf(), manifest })
    }

    fn write_manifest(&self) -> Result<()> {
        let tmp = self.root.join("manifest.json.tmp");
        std::fs::write(&tmp, serde_json::to_vec_pretty(&self.manifest)?)?;
        std::fs::rename(tmp, self.root.join("manifest.json"))?;
        Ok(())
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn manifest(&self) -> &Manifest {
        &self.manifest
    }

    pub fn views(&self) -> &[ViewSpec] {
        &self.manifest.views
    }

    pub fn view(&self, view_id: &str) -> Result<&ViewSpec> {
        self.manifest
            .views
            .iter()
            .find(|v| v.view_id == view_id)
            .ok_or_else(|| Error::Dataset(format!("unknown view {view_id}")))
    }

    pub fn action_dim(&self) -> usize {
        self.manifest.action_dim
    }

    pub fn num_episodes(&self) -> usize {
        self.manifest.episodes.len()
    }

    pub fn episode_ids(&self) -> Vec<String> {
        self.manifest.episodes.iter().map(|e| e.episode_id.clone()).collect()
    }

    pub fn episode_entry(&self, episode_id: &str) -> Result<&EpisodeEntry> {
        self.manifest
            .episodes
            .iter()
            .find(|e| e.episode_id == episode_id)
            .ok_or_else(|| Error::Dataset(format!("unknown episode {episode_id}")))
    }

    fn episode_dir(&self, episode_id: &str) -> PathBuf {
        self.root.join("episodes").join(episode_id)
    }

    /// Validate and persist an episode; the index update is atomic.
    /// Returns the episode id (assigned sequentially when empty).
    pub fn append_episode(&mut self, episode: &Episode) -> Result<String> {
        let length = self.validate_episode(episode)?;
        let episode_id = if episode.episode_id.is_empty() {
            format!("ep_{:06}", self.manifest.episodes.len())
        } else {
            episode.episode_id.clone()
        };
        if self.manifest.episodes.iter().any(|e| e.episode_id == episode_id) {
            return Err(Error::Dataset(format!("episode {episode_id} already exists")));
        }

        let dir = self.episode_dir(&episode_id);
        std::fs::create_dir_all(&dir)?;
        for spec in &self.manifest.views {
            let frames = &episode.frames[&spec.view_id];
            let quantized: Vec<u8> = frames
                .data()
                .iter()
                .map(|&v| (v * 255.0).round().clamp(0.0, 255.0) as u8)
                .collect();
            payload::write_u8(&dir.join(format!("{}.arr", spec.view_id)), frames.shape(), &quantized)?;
        }
        if episode.action_labeled {
            let actions = episode.actions.as_ref().expect("validated above");
            payload::write_f32(&dir.join("actions.arr"), actions.shape(), actions.data())?;
        }

        self.manifest.episodes.push(EpisodeEntry {
            episode_id: episode_id.clone(),
            length,
            action_labeled: episode.action_labeled,
        });
        self.write_manifest()?;
        Ok(episode_id)
    }

    fn validate_episode(&self, episode: &Episode) -> Result<usize> {
        if episode.frames.len() != self.manifest.views.len() {
            return Err(Error::Shape(format!(
                "episode has {} views, dataset has {}",
                episode.frames.len(),
                self.manifest.views.len()
            )));
        }
        let mut length = None;
        for spec in &self.manifest.views {
            let frames = episode.frames.get(&spec.view_id).ok_or_else(|| {
                Error::Shape(format!("episode missing view {}", spec.view_id))
            })?;
            let s = frames.shape();
            if s.len() != 4 || s[1] != spec.height || s[2] != spec.width || s[3] != spec.channels {
                return Err(Error::Shape(format!(
                    "view {}: frames shape {:?}, expected (T+1, {}, {}, {})",
                    spec.view_id, s, spec.height, spec.width, spec.channels
                )));
            }
            if s[0] < 2 {
                return Err(Error::Shape(format!(
                    "view {}: an episode needs at least 2 frames, got {}",
                    spec.view_id, s[0]
                )));
            }
            match length {
                None => length = Some(s[0]),
                Some(l) if l != s[0] => {
                    return Err(Error::Shape(format!(
                        "view {}: length {} differs from {}",
                        spec.view_id, s[0], l
                    )))
                }
                _ => {}
            }
            if frames.data().iter().any(|&v| !(0.0..=1.0).contains(&v)) {
                return Err(Error::Range(format!(
                    "view {}: frame values must lie in [0,1]",
                    spec.view_id
                )));
            }
        }
        let length = length.expect("at least one view");
        match (&episode.actions, episode.action_labeled) {
            (Some(a), true) => {
                let s = a.shape();
                if s.len() != 2 || s[0] != length - 1 || s[1] != self.manifest.action_dim {
                    return Err(Error::Shape(format!(
                        "actions shape {:?}, expected ({}, {})",
                        s,
                        length - 1,
                        self.manifest.action_dim
                    )));
                }
                if !a.all_finite() {
                    return Err(Error::NonFinite("episode actions".into()));
                }
            }
            (None, true) => {
                return Err(Error::Shape("action_labeled episode without actions".into()))
            }
            (Some(_), false) => {
                return Err(Error::Shape("actions present but action_labeled=false".into()))
            }
            (None, false) => {}
        }
        Ok(length)
    }

    pub fn read_episode(&self, episode_id: &str) -> Result<Episode> {
        let entry = self.episode_entry(episode_id)?.clone();
        let dir = self.episode_dir(episode_id);
        let mut frames = BTreeMap::new();
        for spec in &self.manifest.views {
            let (shape, data) = payload::read_u8(&dir.join(format!("{}.arr", spec.view_id)))?;
            let floats: Vec<f32> = data.iter().map(|&b| b as f32 / 255.0).collect();
            frames.insert(spec.view_id.clone(), Array::from_vec(&shape, floats));
        }
        let actions = if entry.action_labeled {
            let (shape, data) = payload::read_f32(&dir.join("actions.arr"))?;
            Some(Array::from_vec(&shape, data))
        } else {
            None
        };
        Ok(Episode {
            episode_id: episode_id.to_string(),
            frames,
            actions,
            action_labeled: entry.action_labeled,
        })
    }

    /// Read selected frames of one view without loading the episode.
    /// Returns shape `(indices.len(), H, W, C)`.
    pub fn read_frames(&self, episode_id: &str, view_id: &str, indices: &[usize]) -> Result<Array<f32>> {
        let entry = self.episode_entry(episode_id)?;
        let spec = self.view(view_id)?;
        for &i in indices {
            if i >= entry.length {
                return Err(Error::Dataset(format!(
                    "frame index {i} out of range for episode of length {}",
                    entry.length
                )));
            }
        }
        let path = self.episode_dir(episode_id).join(format!("{view_id}.arr"));
        let frame_elems = spec.height * spec.width * spec.channels;
        let data = payload::read_u8_rows(&path, indices, frame_elems)?;
        let floats: Vec<f32> = data.iter().map(|&b| b as f32 / 255.0).collect();
        Ok(Array::from_vec(&[indices.len(), spec.height, spec.width, spec.channels], floats))
    }

    pub fn read_actions(&self, episode_id: &str) -> Result<Option<Array<f32>>> {
        let entry = self.episode_entry(episode_id)?;
        if !entry.action_labeled {
            return Ok(None);
        }
        let (shape, data) = payload::read_f32(&self.episode_dir(episode_id).join("actions.arr"))?;
        Ok(Some(Array::from_vec(&shape, data)))
    }

    /// The frames `[f_{t+dt}, f_{t+2dt}, ..., f_{t+N dt}]` of every view,
    /// plus the conditioning observation `o_t` and, when labeled, the
    /// actions for steps `t .. t + N*dt - 1`.
    pub fn sample_sequence(
        &self,
        episode_id: &str,
        t: usize,
        n: usize,
        dt: usize,
    ) -> Result<SequenceSample> {
        if n == 0 || dt == 0 {
            return Err(Error::Config("sample_sequence needs N >= 1 and dt >= 1".into()));
        }
        let entry = self.episode_entry(episode_id)?.clone();
        let t_d = entry.length - 1;
        if t + n * dt > t_d {
            return Err(Error::SequenceRange { t, n, dt, t_d });
        }
        let indices: Vec<usize> = (1..=n).map(|k| t + k * dt).collect();
        let mut frames = BTreeMap::new();
        let mut condition_obs = BTreeMap::new();
        for spec in &self.manifest.views {
            frames.insert(spec.view_id.clone(), self.read_frames(episode_id, &spec.view_id, &indices)?);
            let cond = self.read_frames(episode_id, &spec.view_id, &[t])?;
            condition_obs.insert(
                spec.view_id.clone(),
                cond.reshape(&[spec.height, spec.width, spec.channels]),
            );
        }
        let actions = match self.read_actions(episode_id)? {
            Some(all) => {
                let a = self.manifest.action_dim;
                let rows = n * dt;
                let mut out = Vec::with_capacity(rows * a);
                out.extend_from_slice(&all.data()[t * a..(t + rows) * a]);
                Some(Array::from_vec(&[rows, a], out))
            }
            None => None,
        };
        Ok(SequenceSample { frames, condition_obs, actions, anchor_t: t, n, dt })
    }

    /// Deterministic per-seed episode split: disjoint, exhaustive, at
    /// episode granularity.
    pub fn split_episodes(&self, ratio: f64, seed: u64) -> Result<(Vec<String>, Vec<String>)> {
        if !(0.0..1.0).contains(&ratio) || ratio == 0.0 {
            return Err(Error::Config(format!("split ratio must be in (0,1), got {ratio}")));
        }
        let e = self.manifest.episodes.len();
        if e < 2 {
            return Err(Error::Dataset(format!("need at least 2 episodes to split, have {e}")));
        }
        let mut ids = self.episode_ids();
        let mut rng = vilp_nn::rng_stream(seed, "episode-split");
        // Fisher-Yates
        use rand::RngExt as _;
        for i in (1..ids.len()).rev() {
            let j = rng.random_range(0..=i);
            ids.swap(i, j);
        }
        let n_train = ((ratio * e as f64).round() as usize).clamp(1, e - 1);
        let test = ids.split_off(n_train);
        Ok((ids, test))
    }

    /// Per-dimension (min, max) of actions across the given labeled episodes.
    pub fn action_stats(&self, episode_ids: &[String]) -> Result<(Vec<f32>, Vec<f32>)> {
        let a = self.manifest.action_dim;
        let mut lo = vec![f32::INFINITY; a];
        let mut hi = vec![f32::NEG_INFINITY; a];
        let mut any = false;
        for id in episode_ids {
            if let Some(actions) = self.read_actions(id)? {
                any = true;
                for row in actions.data().chunks_exact(a) {
                    for (d, &v) in row.iter().enumerate() {
                        lo[d] = lo[d].min(v);
                        hi[d] = hi[d].max(v);
                    }
                }
            }
        }
        if !any {
            return Err(Error::Dataset("no action-labeled episodes in selection".into()));
        }
        Ok((lo, hi))
    }

    pub fn labeled_episode_ids(&self) -> Vec<String> {
        self.manifest
            .episodes
            .iter()
            .filter(|e| e.action_labeled)
            .map(|e| e.episode_id.clone())
            .collect()
    }

    /// Full integrity scan: payload shapes, dtype tags, value ranges.
    pub fn validate(&self) -> Result<DatasetReport> {
        let mut report = DatasetReport {
            episodes: self.manifest.episodes.len(),
            labeled_episodes: 0,
            total_frames: 0,
            views: self.manifest.views.clone(),
            action_dim: self.manifest.action_dim,
        };
        for entry in &self.manifest.episodes {
            let dir = self.episode_dir(&entry.episode_id);
            for spec in &self.manifest.views {
                let (shape, _) = payload::read_u8(&dir.join(format!("{}.arr", spec.view_id)))?;
                let expected = [entry.length, spec.height, spec.width, spec.channels];
                if shape != expected {
                    return Err(Error::Shape(format!(
                        "{}/{}: shape {:?}, manifest says {:?}",
                        entry.episode_id, spec.view_id, shape, expected
                    )));
                }
            }
            if entry.action_labeled {
                report.labeled_episodes += 1;
                let (shape, data) = payload::read_f32(&dir.join("actions.arr"))?;
                if shape != [entry.length - 1, self.manifest.action_dim] {
                    return Err(Error::Shape(format!(
                        "{}: actions shape {:?}",
                        entry.episode_id, shape
                    )));
                }
                if data.iter().any(|v| !v.is_finite()) {
                    return Err(Error::NonFinite(format!("{} actions", entry.episode_id)));
                }
            }
            report.total_frames += entry.length;
        }
        Ok(report)
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct DatasetReport {
    pub episodes: usize,
    pub labeled_episodes: usize,
    pub total_frames: usize,
    pub views: Vec<ViewSpec>,
    pub action_dim: usize,
}

/// Raw array payloads: 8-byte magic, u32 dtype (0 = u8, 1 = f32), u32 ndim,
/// ndim x u64 dims (little endian), then row-major data.
pub mod payload {
    use std::io::{Read, Seek, SeekFrom, Write};
    use std::path::Path;

    use crate::error::{Error, Result};

    pub const MAGIC: &[u8; 8] = b"VILPARR1";
    const DTYPE_U8: u32 = 0;
    const DTYPE_F32: u32 = 1;

    fn write_header(w: &mut impl Write, dtype: u32, shape: &[usize]) -> Result<()> {
        w.write_all(MAGIC)?;
        w.write_all(&dtype.to_le_bytes())?;
        w.write_all(&(shape.len() as u32).to_le_bytes())?;
        for &d in shape {
            w.write_all(&(d as u64).to_le_bytes())?;
        }
        Ok(())
    }

    fn read_header(r: &mut impl Read, path: &Path) -> Result<(u32, Vec<usize>)> {
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(Error::Dataset(format!("{}: bad magic", path.display())));
        }
        let mut b4 = [0u8; 4];
        r.read_exact(&mut b4)?;
        let dtype = u32::from_le_bytes(b4);
        r.read_exact(&mut b4)?;
        let ndim = u32::from_le_bytes(b4) as usize;
        let mut shape = Vec::with_capacity(ndim);
        let mut b8 = [0u8; 8];
        for _ in 0..ndim {
            r.read_exact(&mut b8)?;
            shape.push(u64::from_le_bytes(b8) as usize);
        }
        Ok((dtype, shape))
    }

    fn header_len(ndim: usize) -> u64 {
        8 + 4 + 4 + 8 * ndim as u64
    }

    pub fn write_u8(path: &Path, shape: &[usize], data: &[u8]) -> Result<()> {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
        write_header(&mut w, DTYPE_U8, shape)?;
        w.write_all(data)?;
        w.flush()?;
        Ok(())
    }

    pub fn write_f32(path: &Path, shape: &[usize], data: &[f32]) -> Result<()> {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
        write_header(&mut w, DTYPE_F32, shape)?;
        let mut bytes = Vec::with_capacity(data.len() * 4);
        for v in data {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        w.write_all(&bytes)?;
        w.flush()?;
        Ok(())
    }

    pub fn read_u8(path: &Path) -> Result<(Vec<usize>, Vec<u8>)> {
        let mut r = std::io::BufReader::new(std::fs::File::open(path)?);
        let (dtype, shape) = read_header(&mut r, path)?;
        if dtype != DTYPE_U8 {
            return Err(Error::Dataset(format!("{}: expected u8 payload", path.display())));
        }
        let mut data = vec![0u8; shape.iter().product()];
        r.read_exact(&mut data)?;
        Ok((shape, data))
    }

    pub fn read_f32(path: &Path) -> Result<(Vec<usize>, Vec<f32>)> {
        let mut r = std::io::BufReader::new(std::fs::File::open(path)?);
        let (dtype, shape) = read_header(&mut r, path)?;
        if dtype != DTYPE_F32 {
            return Err(Error::Dataset(format!("{}: expected f32 payload", path.display())));
        }
        let n: usize = shape.iter().product();
        let mut bytes = vec![0u8; n * 4];
        r.read_exact(&mut bytes)?;
        let data = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        Ok((shape, data))
    }

    /// Read rows (leading-dimension slices) of a u8 payload by index,
    /// seeking past unneeded data.
    pub fn read_u8_rows(path: &Path, indices: &[usize], row_elems: usize) -> Result<Vec<u8>> {
        let mut f = std::fs::File::open(path)?;
        let (dtype, shape) = {
            let mut r = std::io::BufReader::new(&mut f);
            read_header(&mut r, path)?
        };
        if dtype != DTYPE_U8 {
            return Err(Error::Dataset(format!("{}: expected u8 payload", path.display())));
        }
        debug_assert_eq!(shape[1..].iter().product::<usize>(), row_elems);
        let base = header_len(shape.len());
        let mut out = vec![0u8; indices.len() * row_elems];
        for (slot, &i) in indices.iter().enumerate() {
            f.seek(SeekFrom::Start(base + (i * row_elems) as u64))?;
            f.read_exact(&mut out[slot * row_elems..(slot + 1) * row_elems])?;
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tmpdir(tag: &str) -> PathBuf {
        let dir = std::env::temp_dir().join(format!("vilp-ds-{tag}-{}", std::process::id()));
        let _ = std::fs::remove_dir_all(&dir);
        std::fs::create_dir_all(&dir).unwrap();
        dir
    }

    fn grid_frames(len: usize, h: usize, w: usize, c: usize, seed: u64) -> Array<f32> {
        // values on the 1/255 grid so storage roundtrips bit-identically
        let mut rng = vilp_nn::rng_stream(seed, "frames");
        use rand::RngExt as _;
        let data: Vec<f32> =
            (0..len * h * w * c).map(|_| rng.random_range(0..=255u32) as f32 / 255.0).collect();
        Array::from_vec(&[len, h, w, c], data)
    }

    fn episode(views: &[ViewSpec], len: usize, actions: bool, seed: u64) -> Episode {
        let mut frames = BTreeMap::new();
        for (i, v) in views.iter().enumerate() {
            frames.insert(
                v.view_id.clone(),
                grid_frames(len, v.height, v.width, v.channels, seed + i as u64),
            );
        }
        let act = actions.then(|| {
            let mut rng = vilp_nn::rng_stream(seed, "actions");
            Array::randn(&mut rng, &[len - 1, 2])
        });
        Episode { episode_id: String::new(), frames, actions: act, action_labeled: actions }
    }

    #[test]
    fn create_fields_and_conflict() {
        let dir = tmpdir("create");
        let views = vec![ViewSpec::color("cam", 96, 160)];
        let h = DatasetHandle::create(&dir, views.clone(), 2).unwrap();
        assert_eq!(h.views().len(), 1);
        assert_eq!(h.action_dim(), 2);
        assert_eq!(h.num_episodes(), 0);

        let two = vec![ViewSpec::color("cam", 96, 160), ViewSpec::depth("depth", 96, 160)];
        let dir2 = tmpdir("create2");
        let h2 = DatasetHandle::create(&dir2, two, 2).unwrap();
        assert_eq!(h2.views().len(), 2);

        // re-create over an existing manifest is an error
        assert!(matches!(
            DatasetHandle::create(&dir, vec![ViewSpec::color("cam", 96, 160)], 2),
            Err(Error::ManifestExists(_))
        ));
        std::fs::remove_dir_all(&dir).ok();
        std::fs::remove_dir_all(&dir2).ok();
    }

    #[test]
    fn append_roundtrip_bit_identical() {
        let dir = tmpdir("roundtrip");
        let views = vec![ViewSpec::color("top", 8, 10), ViewSpec::depth("d", 8, 10)];
        let mut h = DatasetHandle::create(&dir, views.clone(), 2).unwrap();
        let ep = episode(&views, 21, true, 7);
        let id = h.append_episode(&ep).unwrap();

        let back = h.read_episode(&id).unwrap();
        assert_eq!(back.length(), 21);
        for v in &views {
            assert_eq!(
                back.frames[&v.view_id].data(),
                ep.frames[&v.view_id].data(),
                "frames must roundtrip bit-identically"
            );
        }
        let (a, b) = (back.actions.unwrap(), ep.actions.unwrap());
        assert_eq!(a.shape(), b.shape());
        for (x, y) in a.data().iter().zip(b.data()) {
            assert_eq!(x, y);
        }
        std::fs::remove_dir_all(&dir).ok();
    }

    #[test]
    fn append_rejects_bad_episodes() {
        let dir = tmpdir("badep");
        let views = vec![ViewSpec::color("top", 8, 10)];
        let mut h = DatasetHandle::create(&dir, views.clone(), 2).unwrap();

        // 21 frames but 19 actions
        let mut ep = episode(&views, 21, true, 1);
        ep.actions = Some(Array::zeros(&[19, 2]));
        assert!(matches!(h.append_episode(&ep), Err(Error::Shape(_))));

        // frame value out of range
        let mut ep = episode(&views, 5, false, 2);
        let mut f = ep.frames["top"].clone();
        f.data_mut()[0] = 1.5;
        ep.frames.insert("top".into(), f);
        assert!(matches!(h.append_episode(&ep), Err(Error::Range(_))));

        // wrong view shape
        let mut ep = episode(&views, 5, false, 3);
        ep.frames.insert("top".into(), grid_frames(5, 9, 10, 3, 4));
        assert!(matches!(h.append_episode(&ep), Err(Error::Shape(_))));
        std::fs::remove_dir_all(&dir).ok();
    }

    #[test]
    fn sequence_sampling_matches_brute_force() {
        let dir = tmpdir("seq");
        let views = vec![ViewSpec::color("top", 6, 6)];
        let mut h = DatasetHandle::create(&dir, views.clone(), 2).unwrap();
        let ep = episode(&views, 21, true, 9); // T_d = 20
        let id = h.append_episode(&ep).unwrap();

        let s = h.sample_sequence(&id, 0, 5, 2).unwrap();
        let full = h.read_episode(&id).unwrap();
        let fr = &full.frames["top"];
        let elems = 6 * 6 * 3;
        for (k, &idx) in [2usize, 4, 6, 8, 10].iter().enumerate() {
            assert_eq!(
                &s.frames["top"].data()[k * elems..(k + 1) * elems],
                &fr.data()[idx * elems..(idx + 1) * elems],
                "frame {k} should be episode index {idx}"
            );
        }
        assert_eq!(s.condition_obs["top"].data(), &fr.data()[0..elems]);
        let acts = s.actions.unwrap();
        assert_eq!(acts.shape(), &[10, 2]);
        assert_eq!(&acts.data()[..], &full.actions.as_ref().unwrap().data()[..20]);

        // minimal sequence
        let s = h.sample_sequence(&id, 0, 1, 1).unwrap();
        assert_eq!(s.frames["top"].data(), &fr.data()[elems..2 * elems]);

        // out of range: t + N*dt = 11 + 10 = 21 > 20
        assert!(matches!(
            h.sample_sequence(&id, 11, 5, 2),
            Err(Error::SequenceRange { t: 11, n: 5, dt: 2, t_d: 20 })
        ));
        std::fs::remove_dir_all(&dir).ok();
    }

    #[test]
    fn split_is_deterministic_disjoint_exhaustive() {
        let dir = tmpdir("split");
        let views = vec![ViewSpec::color("top", 4, 4)];
        let mut h = DatasetHandle::create(&dir, views.clone(), 2).unwrap();
        for i in 0..10 {
            h.append_episode(&episode(&views, 4, false, 100 + i)).unwrap();
        }
        let (train, test) = h.split_episodes(0.9, 0).unwrap();
        assert_eq!(train.len(), 9);
        assert_eq!(test.len(), 1);
        let (train2, test2) = h.split_episodes(0.9, 0).unwrap();
        assert_eq!(train, train2);
        assert_eq!(test, test2);
        let mut all: Vec<String> = train.iter().chain(test.iter()).cloned().collect();
        all.sort();
        let mut ids = h.episode_ids();
        ids.sort();
        assert_eq!(all, ids);

        // different seeds give different partitions at least once
        let (t0, _) = h.split_episodes(0.9, 1).unwrap();
        let (t1, _) = h.split_episodes(0.9, 2).unwrap();
        assert!(t0 != train || t1 != train, "splits should vary with seed");
        std::fs::remove_dir_all(&dir).ok();
    }

    #[test]
    fn split_count_is_exact_over_seeds() {
        let dir = tmpdir("split100");
        let views = vec![ViewSpec::color("top", 4, 4)];
        let mut h = DatasetHandle::create(&dir, views.clone(), 1) .unwrap();
        for i in 0..100 {
            h.append_episode(&episode(&views, 3, false, i)).unwrap();
        }
        for seed in 0..20 {
            let (train, test) = h.split_episodes(0.9, seed).unwrap();
            assert_eq!(train.len(), 90, "seed {seed}");
            assert_eq!(test.len(), 10, "seed {seed}");
        }
        std::fs::remove_dir_all(&dir).ok();
    }

    #[test]
    fn split_errors() {
        let dir = tmpdir("spliterr");
        let views = vec![ViewSpec::color("top", 4, 4)];
        let mut h = DatasetHandle::create(&dir, views.clone(), 1).unwrap();
        h.append_episode(&episode(&views, 3, false, 0)).unwrap();
        assert!(h.split_episodes(0.9, 0).is_err(), "fewer than 2 episodes");
        h.append_episode(&episode(&views, 3, false, 1)).unwrap();
        assert!(h.split_episodes(0.0, 0).is_err());
        assert!(h.split_episodes(1.0, 0).is_err());
        std::fs::remove_dir_all(&dir).ok();
    }

    #[test]
    fn partial_reads_match_full_reads() {
        let dir = tmpdir("partial");
        let views = vec![ViewSpec::color("top", 5, 7)];
        let mut h = DatasetHandle::create(&dir, views.clone(), 1).unwrap();
        let ep = episode(&views, 12, false, 42);
        let id = h.append_episode(&ep).unwrap();
        let full = h.read_episode(&id).unwrap();
        let some = h.read_frames(&id, "top", &[0, 3, 11]).unwrap();
        let elems = 5 * 7 * 3;
        for (k, &i) in [0usize, 3, 11].iter().enumerate() {
            assert_eq!(
                &some.data()[k * elems..(k + 1) * elems],
                &full.frames["top"].data()[i * elems..(i + 1) * elems]
            );
        }
        assert!(h.read_frames(&id, "top", &[12]).is_err());
        std::fs::remove_dir_all(&dir).ok();
    }

    #[test]
    fn validate_passes_on_good_data() {
        let dir = tmpdir("validate");
        let views = vec![ViewSpec::color("top", 4, 4)];
        let mut h = DatasetHandle::create(&dir, views.clone(), 2).unwrap();
        h.append_episode(&episode(&views, 5, true, 0)).unwrap();
        h.append_episode(&episode(&views, 7, false, 1)).unwrap();
        let report = h.validate().unwrap();
        assert_eq!(report.episodes, 2);
        assert_eq!(report.labeled_episodes, 1);
        assert_eq!(report.total_frames, 12);
        std::fs::remove_dir_all(&dir).ok();
    }
}
