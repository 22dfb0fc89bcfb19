//! Thin layer structs owning their parameters. `forward` takes the tape so
//! the same layer serves training and inference.

use crate::array::Array;
use crate::param::{Param, ParamBuilder};
use crate::scalar::Scalar;
use crate::tape::{Tape, Var};

/// Weight initialization schemes.
#[derive(Clone, Copy, Debug)]
pub enum Init {
    Zeros,
    Ones,
    /// Normal with std = gain / sqrt(fan_in).
    KaimingNormal { fan_in: usize, gain: f64 },
    Uniform { lo: f64, hi: f64 },
}

impl Init {
    pub fn build<T: Scalar>(&self, rng: &mut crate::Rng, shape: &[usize]) -> Array<T> {
        match *self {
            Init::Zeros => Array::zeros(shape),
            Init::Ones => Array::full(shape, T::ONE),
            Init::KaimingNormal { fan_in, gain } => {
                let std = gain / (fan_in.max(1) as f64).sqrt();
                let n: usize = shape.iter().product();
                let data =
                    (0..n).map(|_| T::from_f64(T::standard_normal(rng).to_f64() * std)).collect();
                Array::from_vec(shape, data)
            }
            Init::Uniform { lo, hi } => {
                let n: usize = shape.iter().product();
                let data = (0..n)
                    .map(|_| T::from_f64(lo + (hi - lo) * T::uniform(rng).to_f64()))
                    .collect();
                Array::from_vec(shape, data)
            }
        }
    }
}

pub struct Linear<T: Scalar> {
    pub weight: Param<T>, // [in, out]
    pub bias: Option<Param<T>>,
}

impl<T: Scalar> Linear<T> {
    pub fn new(pb: &ParamBuilder<T>, rng: &mut crate::Rng, d_in: usize, d_out: usize) -> Self {
        let weight = pb.param(
            "weight",
            Init::KaimingNormal { fan_in: d_in, gain: 1.0 }.build(rng, &[d_in, d_out]),
        );
        let bias = Some(pb.param("bias", Array::zeros(&[d_out])));
        Self { weight, bias }
    }

    /// Zero-initialized, for output projections that must start inert.
    pub fn new_zeros(pb: &ParamBuilder<T>, d_in: usize, d_out: usize) -> Self {
        let weight = pb.param("weight", Array::zeros(&[d_in, d_out]));
        let bias = Some(pb.param("bias", Array::zeros(&[d_out])));
        Self { weight, bias }
    }

    pub fn no_bias(pb: &ParamBuilder<T>, rng: &mut crate::Rng, d_in: usize, d_out: usize) -> Self {
        let weight = pb.param(
            "weight",
            Init::KaimingNormal { fan_in: d_in, gain: 1.0 }.build(rng, &[d_in, d_out]),
        );
        Self { weight, bias: None }
    }

    /// `x [m, in] -> [m, out]`.
    pub fn forward(&self, tape: &Tape<T>, x: &Var<T>) -> Var<T> {
        let w = tape.param(&self.weight);
        let y = tape.matmul(x, &w);
        match &self.bias {
            Some(b) => {
                let bv = tape.param(b);
                tape.add_bias_rows(&y, &bv)
            }
            None => y,
        }
    }
}

pub struct Conv2d<T: Scalar> {
    pub weight: Param<T>, // [Cout, Cin, kh, kw]
    pub bias: Param<T>,
    pub stride: (usize, usize),
    pub pad: (usize, usize),
}

impl<T: Scalar> Conv2d<T> {
    pub fn new(
        pb: &ParamBuilder<T>,
        rng: &mut crate::Rng,
        cin: usize,
        cout: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
    ) -> Self {
        let fan_in = cin * kernel * kernel;
        let weight = pb.param(
            "weight",
            Init::KaimingNormal { fan_in, gain: 1.0 }.build(rng, &[cout, cin, kernel, kernel]),
        );
        let bias = pb.param("bias", Array::zeros(&[cout]));
        Self { weight, bias, stride: (stride, stride), pad: (pad, pad) }
    }

    pub fn forward(&self, tape: &Tape<T>, x: &Var<T>) -> Var<T> {
        let w = tape.param(&self.weight);
        let b = tape.param(&self.bias);
        tape.conv2d(x, &w, Some(&b), self.stride, self.pad)
    }
}

pub struct Conv3d<T: Scalar> {
    pub weight: Param<T>, // [Cout, Cin, kt, kh, kw]
    pub bias: Param<T>,
    pub stride: (usize, usize, usize),
    pub pad: (usize, usize, usize),
}

impl<T: Scalar> Conv3d<T> {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        pb: &ParamBuilder<T>,
        rng: &mut crate::Rng,
        cin: usize,
        cout: usize,
        kernel: (usize, usize, usize),
        stride: (usize, usize, usize),
        pad: (usize, usize, usize),
    ) -> Self {
        let fan_in = cin * kernel.0 * kernel.1 * kernel.2;
        let weight = pb.param(
            "weight",
            Init::KaimingNormal { fan_in, gain: 1.0 }
                .build(rng, &[cout, cin, kernel.0, kernel.1, kernel.2]),
        );
        let bias = pb.param("bias", Array::zeros(&[cout]));
        Self { weight, bias, stride, pad }
    }

    /// Zero-initialized variant for final output convolutions.
    pub fn new_zeros(
        pb: &ParamBuilder<T>,
        cin: usize,
        cout: usize,
        kernel: (usize, usize, usize),
        stride: (usize, usize, usize),
        pad: (usize, usize, usize),
    ) -> Self {
        let weight =
            pb.param("weight", Array::zeros(&[cout, cin, kernel.0, kernel.1, kernel.2]));
        let bias = pb.param("bias", Array::zeros(&[cout]));
        Self { weight, bias, stride, pad }
    }

    pub fn forward(&self, tape: &Tape<T>, x: &Var<T>) -> Var<T> {
        let w = tape.param(&self.weight);
        let b = tape.param(&self.bias);
        tape.conv3d(x, &w, Some(&b), self.stride, self.pad)
    }
}

pub struct GroupNorm<T: Scalar> {
    pub gamma: Param<T>,
    pub beta: Param<T>,
    pub groups: usize,
    pub eps: f64,
}

impl<T: Scalar> GroupNorm<T> {
    pub fn new(pb: &ParamBuilder<T>, channels: usize, groups: usize) -> Self {
        assert_eq!(channels % groups, 0);
        let gamma = pb.param("gamma", Array::full(&[channels], T::ONE));
        let beta = pb.param("beta", Array::zeros(&[channels]));
        Self { gamma, beta, groups, eps: 1e-5 }
    }

    pub fn forward(&self, tape: &Tape<T>, x: &Var<T>) -> Var<T> {
        let g = tape.param(&self.gamma);
        let b = tape.param(&self.beta);
        tape.group_norm(x, &g, &b, self.groups, self.eps)
    }
}

/// Pick a group count that divides `channels` (at most 8).
pub fn group_count(channels: usize) -> usize {
    for g in [8, 4, 2] {
        if channels % g == 0 {
            return g;
        }
    }
    1
}
