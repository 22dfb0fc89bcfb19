//! Layout helpers between the public channel-last arrays (H, W, C) and the
//! channel-first layout the conv kernels use.

use vilp_nn::{Array, Scalar};

/// `(H, W, C) -> (C, H, W)`
pub fn hwc_to_chw<T: Scalar>(x: &Array<T>) -> Array<T> {
    assert_eq!(x.ndim(), 3);
    let (h, w, c) = (x.dim(0), x.dim(1), x.dim(2));
    let src = x.data();
    let mut out = vec![T::ZERO; x.len()];
    for ci in 0..c {
        for y in 0..h {
            for xw in 0..w {
                out[(ci * h + y) * w + xw] = src[(y * w + xw) * c + ci];
            }
        }
    }
    Array::from_vec(&[c, h, w], out)
}

/// `(C, H, W) -> (H, W, C)`
pub fn chw_to_hwc<T: Scalar>(x: &Array<T>) -> Array<T> {
    assert_eq!(x.ndim(), 3);
    let (c, h, w) = (x.dim(0), x.dim(1), x.dim(2));
    let src = x.data();
    let mut out = vec![T::ZERO; x.len()];
    for y in 0..h {
        for xw in 0..w {
            for ci in 0..c {
                out[(y * w + xw) * c + ci] = src[(ci * h + y) * w + xw];
            }
        }
    }
    Array::from_vec(&[h, w, c], out)
}

/// Stack equally-shaped arrays along a new leading axis.
pub fn stack<T: Scalar>(parts: &[Array<T>]) -> Array<T> {
    assert!(!parts.is_empty());
    let inner = parts[0].shape().to_vec();
    let mut data = Vec::with_capacity(parts.len() * parts[0].len());
    for p in parts {
        assert_eq!(p.shape(), &inner[..], "stack shape mismatch");
        data.extend_from_slice(p.data());
    }
    let mut shape = vec![parts.len()];
    shape.extend_from_slice(&inner);
    Array::from_vec(&shape, data)
}

/// Split the leading axis into individual arrays.
pub fn unstack<T: Scalar>(x: &Array<T>) -> Vec<Array<T>> {
    assert!(x.ndim() >= 2);
    let n = x.dim(0);
    let inner: Vec<usize> = x.shape()[1..].to_vec();
    let per: usize = inner.iter().product();
    (0..n)
        .map(|i| Array::from_vec(&inner, x.data()[i * per..(i + 1) * per].to_vec()))
        .collect()
}

/// Peak signal-to-noise ratio in dB between two same-shape arrays in [0,1].
pub fn psnr<T: Scalar>(a: &Array<T>, b: &Array<T>) -> f64 {
    assert_eq!(a.shape(), b.shape());
    let mse = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| {
            let d = x.to_f64() - y.to_f64();
            d * d
        })
        .sum::<f64>()
        / a.len() as f64;
    if mse <= 0.0 {
        f64::INFINITY
    } else {
        -10.0 * mse.log10()
    }
}
