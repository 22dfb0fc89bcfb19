//! Adam optimizer with optional global-norm gradient clipping.

use std::collections::HashMap;

use crate::array::Array;
use crate::param::Param;
use crate::scalar::Scalar;

pub struct Adam<T: Scalar> {
    params: Vec<Param<T>>,
    pub lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    clip_norm: Option<f64>,
    /// Linear learning-rate ramp over the first N steps; tames the early
    /// sign-step phase on deep conv stacks.
    warmup_steps: u64,
    /// Cosine decay horizon: lr anneals to `min_lr_frac * lr` at this step.
    decay_steps: Option<u64>,
    min_lr_frac: f64,
    t: u64,
    // first/second moments in f64, keyed by param position
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl<T: Scalar> Adam<T> {
    pub fn new(params: Vec<Param<T>>, lr: f64) -> Self {
        // Dedupe by identity so shared modules are stepped once.
        let mut seen = HashMap::new();
        let mut unique = Vec::new();
        for p in params {
            if seen.insert(p.id(), ()).is_none() {
                unique.push(p);
            }
        }
        let m = unique.iter().map(|p| vec![0.0; p.value().len()]).collect();
        let v = unique.iter().map(|p| vec![0.0; p.value().len()]).collect();
        Self {
            params: unique,
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            clip_norm: Some(10.0),
            warmup_steps: 0,
            decay_steps: None,
            min_lr_frac: 0.05,
            t: 0,
            m,
            v,
        }
    }

    pub fn with_clip_norm(mut self, clip: Option<f64>) -> Self {
        self.clip_norm = clip;
        self
    }

    pub fn with_warmup(mut self, steps: u64) -> Self {
        self.warmup_steps = steps;
        self
    }

    /// Cosine-anneal the learning rate toward `min_lr_frac * lr` at `total`.
    pub fn with_cosine_decay(mut self, total: u64) -> Self {
        self.decay_steps = Some(total);
        self
    }

    pub fn params(&self) -> &[Param<T>] {
        &self.params
    }

    /// Apply one update from the gradients accumulated on the params, then
    /// clear them. Params without a gradient are skipped.
    pub fn step(&mut self) {
        self.t += 1;
        let grads: Vec<Option<Array<T>>> = self.params.iter().map(|p| p.take_grad()).collect();

        let scale = match self.clip_norm {
            Some(max_norm) => {
                let mut sq = 0.0f64;
                for g in grads.iter().flatten() {
                    for v in g.data() {
                        let x = v.to_f64();
                        sq += x * x;
                    }
                }
                let norm = sq.sqrt();
                if norm > max_norm {
                    max_norm / norm
                } else {
                    1.0
                }
            }
            None => 1.0,
        };

        let mut lr = if self.warmup_steps > 0 && self.t <= self.warmup_steps {
            self.lr * self.t as f64 / self.warmup_steps as f64
        } else {
            self.lr
        };
        if let Some(total) = self.decay_steps {
            if self.t > self.warmup_steps && total > self.warmup_steps {
                let p = ((self.t - self.warmup_steps) as f64
                    / (total - self.warmup_steps) as f64)
                    .min(1.0);
                let cos = 0.5 * (1.0 + (std::f64::consts::PI * p).cos());
                lr = self.lr * (self.min_lr_frac + (1.0 - self.min_lr_frac) * cos);
            }
        }
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for (i, (p, g)) in self.params.iter().zip(grads).enumerate() {
            let g = match g {
                Some(g) => g,
                None => continue,
            };
            let mut value = p.value();
            let data = value.data_mut();
            let gm = &mut self.m[i];
            let gv = &mut self.v[i];
            for (j, d) in data.iter_mut().enumerate() {
                let grad = g.data()[j].to_f64() * scale;
                gm[j] = self.beta1 * gm[j] + (1.0 - self.beta1) * grad;
                gv[j] = self.beta2 * gv[j] + (1.0 - self.beta2) * grad * grad;
                let mhat = gm[j] / bc1;
                let vhat = gv[j] / bc2;
                *d = T::from_f64(d.to_f64() - lr * mhat / (vhat.sqrt() + self.eps));
            }
            p.set_value(value);
        }
    }

    pub fn zero_grad(&self) {
        for p in &self.params {
            p.zero_grad();
        }
    }
}

/// Snapshot of the optimizer moments for checkpoint/resume.
pub struct AdamState {
    pub t: u64,
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
}

impl<T: Scalar> Adam<T> {
    pub fn state(&self) -> AdamState {
        AdamState { t: self.t, m: self.m.clone(), v: self.v.clone() }
    }

    /// Restore moments captured by [`Adam::state`]. Parameter order and
    /// shapes must match the optimizer's construction.
    pub fn load_state(&mut self, state: AdamState) -> Result<(), String> {
        if state.m.len() != self.m.len() || state.v.len() != self.v.len() {
            return Err(format!(
                "optimizer state holds {} moment vectors, model has {}",
                state.m.len(),
                self.m.len()
            ));
        }
        for (i, (m, v)) in state.m.iter().zip(&state.v).enumerate() {
            if m.len() != self.m[i].len() || v.len() != self.v[i].len() {
                return Err(format!("optimizer moment {i} has wrong length"));
            }
        }
        self.t = state.t;
        self.m = state.m;
        self.v = state.v;
        Ok(())
    }

    /// Persist the moments next to a model checkpoint.
    pub fn save_state_file(&self, path: &std::path::Path) -> std::io::Result<()> {
        let mut tensors: Vec<(String, Array<f64>)> = Vec::new();
        for (i, m) in self.m.iter().enumerate() {
            tensors.push((format!("m/{i}"), Array::from_vec(&[m.len()], m.clone())));
        }
        for (i, v) in self.v.iter().enumerate() {
            tensors.push((format!("v/{i}"), Array::from_vec(&[v.len()], v.clone())));
        }
        let meta = serde_json::json!({"kind": "adam_state", "t": self.t, "params": self.m.len()});
        crate::io::save_archive(path, &meta, &tensors)
    }

    pub fn load_state_file(&mut self, path: &std::path::Path) -> std::io::Result<()> {
        let (meta, tensors) = crate::io::load_archive::<f64>(path)?;
        let t = meta["t"].as_u64().unwrap_or(0);
        let n = meta["params"].as_u64().unwrap_or(0) as usize;
        let by_name: std::collections::HashMap<String, Array<f64>> =
            tensors.into_iter().collect();
        let mut m = Vec::with_capacity(n);
        let mut v = Vec::with_capacity(n);
        for i in 0..n {
            m.push(by_name.get(&format!("m/{i}")).map(|a| a.data().to_vec()).ok_or_else(
                || std::io::Error::other(format!("missing optimizer moment m/{i}")),
            )?);
            v.push(by_name.get(&format!("v/{i}")).map(|a| a.data().to_vec()).ok_or_else(
                || std::io::Error::other(format!("missing optimizer moment v/{i}")),
            )?);
        }
        self.load_state(AdamState { t, m, v }).map_err(std::io::Error::other)
    }
}
