use crate::array::Array;
use crate::scalar::Scalar;
use crate::tape::{Tape, Var};

impl<T: Scalar> Tape<T> {
    /// Mean over all elements -> shape `[1]`. Accumulates in f64.
    pub fn mean_all(&self, x: &Var<T>) -> Var<T> {
        let n = x.value.len();
        let value = Array::scalar(T::from_f64(x.value.mean_f64()));
        let shape = x.value.shape().to_vec();
        self.push(
            value,
            vec![x.node],
            Box::new(move |g, _needs: &[bool]| {
                let gv = g.data()[0] * T::from_f64(1.0 / n as f64);
                vec![Some(Array::full(&shape, gv))]
            }),
        )
    }

    /// Mean squared error between two same-shape tensors -> `[1]`.
    pub fn mse(&self, a: &Var<T>, b: &Var<T>) -> Var<T> {
        let d = self.sub(a, b);
        let sq = self.mul(&d, &d);
        self.mean_all(&sq)
    }

    /// `[B,C,..spatial..] -> [B,C]`, mean over trailing dims.
    pub fn mean_trailing(&self, x: &Var<T>) -> Var<T> {
        assert!(x.value.ndim() >= 3);
        let b = x.value.dim(0);
        let c = x.value.dim(1);
        let s: usize = x.value.shape()[2..].iter().product();
        let xd = x.value.data();
        let mut out = vec![T::ZERO; b * c];
        for bc in 0..b * c {
            let mut acc = 0.0f64;
            for i in 0..s {
                acc += xd[bc * s + i].to_f64();
            }
            out[bc] = T::from_f64(acc / s as f64);
        }
        let shape = x.value.shape().to_vec();
        self.push(
            Array::from_vec(&[b, c], out),
            vec![x.node],
            Box::new(move |g, _needs: &[bool]| {
                let gd = g.data();
                let inv = T::from_f64(1.0 / s as f64);
                let mut dx = vec![T::ZERO; b * c * s];
                for bc in 0..b * c {
                    let gv = gd[bc] * inv;
                    for i in 0..s {
                        dx[bc * s + i] = gv;
                    }
                }
                vec![Some(Array::from_vec(&shape, dx))]
            }),
        )
    }

    /// Broadcast-add `v [B,C]` over the trailing spatial dims of
    /// `x [B,C,..spatial..]` (used to inject timestep embeddings).
    pub fn add_channels(&self, x: &Var<T>, v: &Var<T>) -> Var<T> {
        assert!(x.value.ndim() >= 3);
        assert_eq!(v.value.ndim(), 2);
        let b = x.value.dim(0);
        let c = x.value.dim(1);
        assert_eq!(v.value.dim(0), b);
        assert_eq!(v.value.dim(1), c);
        let s: usize = x.value.shape()[2..].iter().product();
        let mut value = x.value.clone();
        {
            let dst = value.data_mut();
            let vd = v.value.data();
            for bc in 0..b * c {
                let add = vd[bc];
                for i in 0..s {
                    dst[bc * s + i] += add;
                }
            }
        }
        self.push(
            value,
            vec![x.node, v.node],
            Box::new(move |g, _needs: &[bool]| {
                let gd = g.data();
                let mut dv = vec![T::ZERO; b * c];
                for bc in 0..b * c {
                    let mut acc = 0.0f64;
                    for i in 0..s {
                        acc += gd[bc * s + i].to_f64();
                    }
                    dv[bc] = T::from_f64(acc);
                }
                vec![Some(g.clone()), Some(Array::from_vec(&[b, c], dv))]
            }),
        )
    }

    /// Row-wise softmax on `[R,C]`.
    pub fn softmax_rows(&self, x: &Var<T>) -> Var<T> {
        assert_eq!(x.value.ndim(), 2);
        let (r, c) = (x.value.dim(0), x.value.dim(1));
        let xd = x.value.data();
        let mut out = vec![T::ZERO; r * c];
        for row in 0..r {
            let xs = &xd[row * c..(row + 1) * c];
            let mx = xs.iter().fold(f64::NEG_INFINITY, |m, v| m.max(v.to_f64()));
            let mut denom = 0.0f64;
            for (j, v) in xs.iter().enumerate() {
                let e = (v.to_f64() - mx).exp();
                out[row * c + j] = T::from_f64(e);
                denom += e;
            }
            let inv = T::from_f64(1.0 / denom);
            for j in 0..c {
                out[row * c + j] *= inv;
            }
        }
        let value = Array::from_vec(&[r, c], out);
        let yv = value.clone();
        self.push(
            value,
            vec![x.node],
            Box::new(move |g, _needs: &[bool]| {
                // dx = y * (g - sum(g * y, row))
                let gd = g.data();
                let yd = yv.data();
                let mut dx = vec![T::ZERO; r * c];
                for row in 0..r {
                    let mut dot = 0.0f64;
                    for j in 0..c {
                        dot += gd[row * c + j].to_f64() * yd[row * c + j].to_f64();
                    }
                    let dot = T::from_f64(dot);
                    for j in 0..c {
                        dx[row * c + j] = yd[row * c + j] * (gd[row * c + j] - dot);
                    }
                }
                vec![Some(Array::from_vec(&[r, c], dx))]
            }),
        )
    }

    /// Group normalization over `[B,C,..spatial..]` with affine params
    /// `gamma [C]`, `beta [C]`. Statistics per (batch, group) in f64.
    pub fn group_norm(
        &self,
        x: &Var<T>,
        gamma: &Var<T>,
        beta: &Var<T>,
        groups: usize,
        eps: f64,
    ) -> Var<T> {
        assert!(x.value.ndim() >= 3);
        let b = x.value.dim(0);
        let c = x.value.dim(1);
        assert_eq!(c % groups, 0, "channels {c} not divisible by groups {groups}");
        assert_eq!(gamma.value.shape(), &[c]);
        assert_eq!(beta.value.shape(), &[c]);
        let s: usize = x.value.shape()[2..].iter().product();
        let cg = c / groups;
        let group_len = cg * s;

        let xd = x.value.data();
        let gam = gamma.value.data();
        let bet = beta.value.data();
        let mut out = vec![T::ZERO; b * c * s];
        let mut means = vec![0.0f64; b * groups];
        let mut invstds = vec![0.0f64; b * groups];
        for bi in 0..b {
            for gi in 0..groups {
                let base = bi * c * s + gi * cg * s;
                let mut mean = 0.0f64;
                for i in 0..group_len {
                    mean += xd[base + i].to_f64();
                }
                mean /= group_len as f64;
                let mut var = 0.0f64;
                for i in 0..group_len {
                    let d = xd[base + i].to_f64() - mean;
                    var += d * d;
                }
                var /= group_len as f64;
                let inv = 1.0 / (var + eps).sqrt();
                means[bi * groups + gi] = mean;
                invstds[bi * groups + gi] = inv;
                for ci in 0..cg {
                    let ch = gi * cg + ci;
                    let g_ = gam[ch].to_f64();
                    let b_ = bet[ch].to_f64();
                    for i in 0..s {
                        let off = base + ci * s + i;
                        let xn = (xd[off].to_f64() - mean) * inv;
                        out[off] = T::from_f64(xn * g_ + b_);
                    }
                }
            }
        }

        let shape = x.value.shape().to_vec();
        let xv = x.value.clone();
        let gv = gamma.value.clone();
        self.push(
            Array::from_vec(&shape, out),
            vec![x.node, gamma.node, beta.node],
            Box::new(move |g, _needs: &[bool]| {
                let gd = g.data();
                let xd = xv.data();
                let gam = gv.data();
                let mut dx = vec![T::ZERO; b * c * s];
                let mut dgamma = vec![0.0f64; c];
                let mut dbeta = vec![0.0f64; c];
                for bi in 0..b {
                    for gi in 0..groups {
                        let base = bi * c * s + gi * cg * s;
                        let mean = means[bi * groups + gi];
                        let inv = invstds[bi * groups + gi];
                        // t1 = gamma_c * dy ; m1 = mean(t1) ; m2 = mean(t1 * xhat)
                        let mut m1 = 0.0f64;
                        let mut m2 = 0.0f64;
                        for ci in 0..cg {
                            let ch = gi * cg + ci;
                            let gch = gam[ch].to_f64();
                            for i in 0..s {
                                let off = base + ci * s + i;
                                let xhat = (xd[off].to_f64() - mean) * inv;
                                let t1 = gch * gd[off].to_f64();
                                m1 += t1;
                                m2 += t1 * xhat;
                                dgamma[ch] += gd[off].to_f64() * xhat;
                                dbeta[ch] += gd[off].to_f64();
                            }
                        }
                        m1 /= group_len as f64;
                        m2 /= group_len as f64;
                        for ci in 0..cg {
                            let ch = gi * cg + ci;
                            let gch = gam[ch].to_f64();
                            for i in 0..s {
                                let off = base + ci * s + i;
                                let xhat = (xd[off].to_f64() - mean) * inv;
                                let t1 = gch * gd[off].to_f64();
                                dx[off] = T::from_f64((t1 - m1 - xhat * m2) * inv);
                            }
                        }
                    }
                }
                let dgamma: Vec<T> = dgamma.into_iter().map(T::from_f64).collect();
                let dbeta: Vec<T> = dbeta.into_iter().map(T::from_f64).collect();
                vec![
                    Some(Array::from_vec(&shape, dx)),
                    Some(Array::from_vec(&[c], dgamma)),
                    Some(Array::from_vec(&[c], dbeta)),
                ]
            }),
        )
    }
}
