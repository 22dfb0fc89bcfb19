use rayon::prelude::*;

use crate::array::Array;
use crate::scalar::Scalar;
use crate::tape::{Tape, Var};

pub fn conv2d_out_shape(
    h: usize,
    w: usize,
    kernel: (usize, usize),
    stride: (usize, usize),
    pad: (usize, usize),
) -> (usize, usize) {
    let ho = (h + 2 * pad.0 - kernel.0) / stride.0 + 1;
    let wo = (w + 2 * pad.1 - kernel.1) / stride.1 + 1;
    (ho, wo)
}

pub fn conv3d_out_shape(
    t: usize,
    h: usize,
    w: usize,
    kernel: (usize, usize, usize),
    stride: (usize, usize, usize),
    pad: (usize, usize, usize),
) -> (usize, usize, usize) {
    let to = (t + 2 * pad.0 - kernel.0) / stride.0 + 1;
    let (ho, wo) = conv2d_out_shape(h, w, (kernel.1, kernel.2), (stride.1, stride.2), (pad.1, pad.2));
    (to, ho, wo)
}

#[allow(clippy::too_many_arguments)]
fn im2col_2d<T: Scalar>(
    x: &[T], // [Cin, H, W]
    cin: usize,
    h: usize,
    w: usize,
    (kh, kw): (usize, usize),
    (sh, sw): (usize, usize),
    (ph, pw): (usize, usize),
    (ho, wo): (usize, usize),
) -> Vec<T> {
    let l = ho * wo;
    let mut col = vec![T::ZERO; cin * kh * kw * l];
    for c in 0..cin {
        for ky in 0..kh {
            for kx in 0..kw {
                let row = ((c * kh + ky) * kw + kx) * l;
                for oy in 0..ho {
                    let iy = (oy * sh + ky) as isize - ph as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let src_base = (c * h + iy as usize) * w;
                    let dst_base = row + oy * wo;
                    for ox in 0..wo {
                        let ix = (ox * sw + kx) as isize - pw as isize;
                        if ix >= 0 && ix < w as isize {
                            col[dst_base + ox] = x[src_base + ix as usize];
                        }
                    }
                }
            }
        }
    }
    col
}

#[allow(clippy::too_many_arguments)]
fn col2im_2d<T: Scalar>(
    col: &[T],
    cin: usize,
    h: usize,
    w: usize,
    (kh, kw): (usize, usize),
    (sh, sw): (usize, usize),
    (ph, pw): (usize, usize),
    (ho, wo): (usize, usize),
) -> Vec<T> {
    let l = ho * wo;
    let mut x = vec![T::ZERO; cin * h * w];
    for c in 0..cin {
        for ky in 0..kh {
            for kx in 0..kw {
                let row = ((c * kh + ky) * kw + kx) * l;
                for oy in 0..ho {
                    let iy = (oy * sh + ky) as isize - ph as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let dst_base = (c * h + iy as usize) * w;
                    let src_base = row + oy * wo;
                    for ox in 0..wo {
                        let ix = (ox * sw + kx) as isize - pw as isize;
                        if ix >= 0 && ix < w as isize {
                            x[dst_base + ix as usize] += col[src_base + ox];
                        }
                    }
                }
            }
        }
    }
    x
}

#[allow(clippy::too_many_arguments)]
fn im2col_3d<T: Scalar>(
    x: &[T], // [Cin, T, H, W]
    cin: usize,
    t: usize,
    h: usize,
    w: usize,
    (kt, kh, kw): (usize, usize, usize),
    (st, sh, sw): (usize, usize, usize),
    (pt, ph, pw): (usize, usize, usize),
    (to, ho, wo): (usize, usize, usize),
) -> Vec<T> {
    let l = to * ho * wo;
    let mut col = vec![T::ZERO; cin * kt * kh * kw * l];
    for c in 0..cin {
        for kz in 0..kt {
            for ky in 0..kh {
                for kx in 0..kw {
                    let row = (((c * kt + kz) * kh + ky) * kw + kx) * l;
                    for oz in 0..to {
                        let iz = (oz * st + kz) as isize - pt as isize;
                        if iz < 0 || iz >= t as isize {
                            continue;
                        }
                        for oy in 0..ho {
                            let iy = (oy * sh + ky) as isize - ph as isize;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            let src_base = ((c * t + iz as usize) * h + iy as usize) * w;
                            let dst_base = row + (oz * ho + oy) * wo;
                            for ox in 0..wo {
                                let ix = (ox * sw + kx) as isize - pw as isize;
                                if ix >= 0 && ix < w as isize {
                                    col[dst_base + ox] = x[src_base + ix as usize];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    col
}

#[allow(clippy::too_many_arguments)]
fn col2im_3d<T: Scalar>(
    col: &[T],
    cin: usize,
    t: usize,
    h: usize,
    w: usize,
    (kt, kh, kw): (usize, usize, usize),
    (st, sh, sw): (usize, usize, usize),
    (pt, ph, pw): (usize, usize, usize),
    (to, ho, wo): (usize, usize, usize),
) -> Vec<T> {
    let l = to * ho * wo;
    let mut x = vec![T::ZERO; cin * t * h * w];
    for c in 0..cin {
        for kz in 0..kt {
            for ky in 0..kh {
                for kx in 0..kw {
                    let row = (((c * kt + kz) * kh + ky) * kw + kx) * l;
                    for oz in 0..to {
                        let iz = (oz * st + kz) as isize - pt as isize;
                        if iz < 0 || iz >= t as isize {
                            continue;
                        }
                        for oy in 0..ho {
                            let iy = (oy * sh + ky) as isize - ph as isize;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            let dst_base = ((c * t + iz as usize) * h + iy as usize) * w;
                            let src_base = row + (oz * ho + oy) * wo;
                            for ox in 0..wo {
                                let ix = (ox * sw + kx) as isize - pw as isize;
                                if ix >= 0 && ix < w as isize {
                                    x[dst_base + ix as usize] += col[src_base + ox];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    x
}

/// w_mat [Cout, K] x col [K, L] -> out [Cout, L]
fn forward_gemm<T: Scalar>(w: &[T], col: &[T], cout: usize, k: usize, l: usize) -> Vec<T> {
    let mut out = vec![T::ZERO; cout * l];
    unsafe {
        T::gemm(
            cout,
            k,
            l,
            T::ONE,
            w.as_ptr(),
            k as isize,
            1,
            col.as_ptr(),
            l as isize,
            1,
            T::ZERO,
            out.as_mut_ptr(),
        );
    }
    out
}

impl<T: Scalar> Tape<T> {
    /// 2-D convolution: `x [B,Cin,H,W] * w [Cout,Cin,kh,kw] -> [B,Cout,Ho,Wo]`.
    pub fn conv2d(
        &self,
        x: &Var<T>,
        w: &Var<T>,
        bias: Option<&Var<T>>,
        stride: (usize, usize),
        pad: (usize, usize),
    ) -> Var<T> {
        assert_eq!(x.value.ndim(), 4, "conv2d input must be [B,Cin,H,W]");
        assert_eq!(w.value.ndim(), 4, "conv2d weight must be [Cout,Cin,kh,kw]");
        let (b, cin, h, wd) = (x.value.dim(0), x.value.dim(1), x.value.dim(2), x.value.dim(3));
        let (cout, cin2, kh, kw) = (w.value.dim(0), w.value.dim(1), w.value.dim(2), w.value.dim(3));
        assert_eq!(cin, cin2, "conv2d channel mismatch");
        let kernel = (kh, kw);
        let (ho, wo) = conv2d_out_shape(h, wd, kernel, stride, pad);
        let k = cin * kh * kw;
        let l = ho * wo;

        let xd = x.value.data();
        let wdat = w.value.data();
        let per_sample = cin * h * wd;
        let keep_cols = self.is_recording() && (x.node.is_some() || w.node.is_some());
        let mut results: Vec<(Vec<T>, Vec<T>)> = (0..b)
            .into_par_iter()
            .map(|bi| {
                let col = im2col_2d(
                    &xd[bi * per_sample..(bi + 1) * per_sample],
                    cin,
                    h,
                    wd,
                    kernel,
                    stride,
                    pad,
                    (ho, wo),
                );
                let out = forward_gemm(wdat, &col, cout, k, l);
                (out, if keep_cols { col } else { Vec::new() })
            })
            .collect();
        if let Some(bv) = bias {
            assert_eq!(bv.value.shape(), &[cout]);
            let bd = bv.value.data();
            for (out, _) in results.iter_mut() {
                for c in 0..cout {
                    let add = bd[c];
                    for v in &mut out[c * l..(c + 1) * l] {
                        *v += add;
                    }
                }
            }
        }
        let mut data = Vec::with_capacity(b * cout * l);
        let mut cols = Vec::with_capacity(b);
        for (o, col) in results {
            data.extend_from_slice(&o);
            cols.push(col);
        }
        let value = Array::from_vec(&[b, cout, ho, wo], data);

        let wv = w.value.clone();
        let bias_node = bias.and_then(|v| v.node);
        let has_bias = bias.is_some();
        self.push(
            value,
            vec![x.node, w.node, bias_node],
            Box::new(move |g, needs| {
                let gd = g.data();
                let wdat = wv.data();
                let (need_dx, need_dw) = (needs[0], needs[1]);
                let parts: Vec<(Vec<T>, Vec<T>)> = cols
                    .par_iter()
                    .enumerate()
                    .map(|(bi, col)| {
                        let gb = &gd[bi * cout * l..(bi + 1) * cout * l];
                        let dwp = if need_dw {
                            // dW_b [cout,k] = g_b [cout,l] x col^T [l,k]
                            let mut dwp = vec![T::ZERO; cout * k];
                            unsafe {
                                T::gemm(
                                    cout,
                                    l,
                                    k,
                                    T::ONE,
                                    gb.as_ptr(),
                                    l as isize,
                                    1,
                                    col.as_ptr(),
                                    1,
                                    l as isize,
                                    T::ZERO,
                                    dwp.as_mut_ptr(),
                                );
                            }
                            dwp
                        } else {
                            Vec::new()
                        };
                        let dxb = if need_dx {
                            // dcol [k,l] = w^T [k,cout] x g_b [cout,l]
                            let mut dcol = vec![T::ZERO; k * l];
                            unsafe {
                                T::gemm(
                                    k,
                                    cout,
                                    l,
                                    T::ONE,
                                    wdat.as_ptr(),
                                    1,
                                    k as isize,
                                    gb.as_ptr(),
                                    l as isize,
                                    1,
                                    T::ZERO,
                                    dcol.as_mut_ptr(),
                                );
                            }
                            col2im_2d(&dcol, cin, h, wd, kernel, stride, pad, (ho, wo))
                        } else {
                            Vec::new()
                        };
                        (dxb, dwp)
                    })
                    .collect();

                let dx = need_dx.then(|| {
                    let mut dx = Vec::with_capacity(b * per_sample);
                    for (dxb, _) in &parts {
                        dx.extend_from_slice(dxb);
                    }
                    Array::from_vec(&[b, cin, h, wd], dx)
                });
                let dw = need_dw.then(|| {
                    let mut dw = vec![T::ZERO; cout * k];
                    for (_, dwp) in &parts {
                        for (acc, v) in dw.iter_mut().zip(dwp) {
                            *acc += *v;
                        }
                    }
                    Array::from_vec(&[cout, cin, kh, kw], dw)
                });
                let db = (has_bias && needs[2]).then(|| {
                    let mut db = vec![T::ZERO; cout];
                    for bi in 0..b {
                        for c in 0..cout {
                            let base = (bi * cout + c) * l;
                            let mut acc = 0.0f64;
                            for i in 0..l {
                                acc += gd[base + i].to_f64();
                            }
                            db[c] += T::from_f64(acc);
                        }
                    }
                    Array::from_vec(&[cout], db)
                });
                vec![dx, dw, db]
            }),
        )
    }

    /// 3-D convolution: `x [B,Cin,T,H,W] * w [Cout,Cin,kt,kh,kw]`.
    pub fn conv3d(
        &self,
        x: &Var<T>,
        w: &Var<T>,
        bias: Option<&Var<T>>,
        stride: (usize, usize, usize),
        pad: (usize, usize, usize),
    ) -> Var<T> {
        assert_eq!(x.value.ndim(), 5, "conv3d input must be [B,Cin,T,H,W]");
        assert_eq!(w.value.ndim(), 5, "conv3d weight must be [Cout,Cin,kt,kh,kw]");
        let (b, cin, t, h, wd) =
            (x.value.dim(0), x.value.dim(1), x.value.dim(2), x.value.dim(3), x.value.dim(4));
        let (cout, cin2, kt, kh, kw) =
            (w.value.dim(0), w.value.dim(1), w.value.dim(2), w.value.dim(3), w.value.dim(4));
        assert_eq!(cin, cin2, "conv3d channel mismatch");
        let kernel = (kt, kh, kw);
        let (to, ho, wo) = conv3d_out_shape(t, h, wd, kernel, stride, pad);
        let k = cin * kt * kh * kw;
        let l = to * ho * wo;

        let xd = x.value.data();
        let wdat = w.value.data();
        let per_sample = cin * t * h * wd;
        let keep_cols = self.is_recording() && (x.node.is_some() || w.node.is_some());
        let mut results: Vec<(Vec<T>, Vec<T>)> = (0..b)
            .into_par_iter()
            .map(|bi| {
                let col = im2col_3d(
                    &xd[bi * per_sample..(bi + 1) * per_sample],
                    cin,
                    t,
                    h,
                    wd,
                    kernel,
                    stride,
                    pad,
                    (to, ho, wo),
                );
                let out = forward_gemm(wdat, &col, cout, k, l);
                (out, if keep_cols { col } else { Vec::new() })
            })
            .collect();
        if let Some(bv) = bias {
            assert_eq!(bv.value.shape(), &[cout]);
            let bd = bv.value.data();
            for (out, _) in results.iter_mut() {
                for c in 0..cout {
                    let add = bd[c];
                    for v in &mut out[c * l..(c + 1) * l] {
                        *v += add;
                    }
                }
            }
        }
        let mut data = Vec::with_capacity(b * cout * l);
        let mut cols = Vec::with_capacity(b);
        for (o, col) in results {
            data.extend_from_slice(&o);
            cols.push(col);
        }
        let value = Array::from_vec(&[b, cout, to, ho, wo], data);

        let wv = w.value.clone();
        let bias_node = bias.and_then(|v| v.node);
        let has_bias = bias.is_some();
        self.push(
            value,
            vec![x.node, w.node, bias_node],
            Box::new(move |g, needs| {
                let gd = g.data();
                let wdat = wv.data();
                let (need_dx, need_dw) = (needs[0], needs[1]);
                let parts: Vec<(Vec<T>, Vec<T>)> = cols
                    .par_iter()
                    .enumerate()
                    .map(|(bi, col)| {
                        let gb = &gd[bi * cout * l..(bi + 1) * cout * l];
                        let dwp = if need_dw {
                            let mut dwp = vec![T::ZERO; cout * k];
                            unsafe {
                                T::gemm(
                                    cout,
                                    l,
                                    k,
                                    T::ONE,
                                    gb.as_ptr(),
                                    l as isize,
                                    1,
                                    col.as_ptr(),
                                    1,
                                    l as isize,
                                    T::ZERO,
                                    dwp.as_mut_ptr(),
                                );
                            }
                            dwp
                        } else {
                            Vec::new()
                        };
                        let dxb = if need_dx {
                            let mut dcol = vec![T::ZERO; k * l];
                            unsafe {
                                T::gemm(
                                    k,
                                    cout,
                                    l,
                                    T::ONE,
                                    wdat.as_ptr(),
                                    1,
                                    k as isize,
                                    gb.as_ptr(),
                                    l as isize,
                                    1,
                                    T::ZERO,
                                    dcol.as_mut_ptr(),
                                );
                            }
                            col2im_3d(&dcol, cin, t, h, wd, kernel, stride, pad, (to, ho, wo))
                        } else {
                            Vec::new()
                        };
                        (dxb, dwp)
                    })
                    .collect();

                let dx = need_dx.then(|| {
                    let mut dx = Vec::with_capacity(b * per_sample);
                    for (dxb, _) in &parts {
                        dx.extend_from_slice(dxb);
                    }
                    Array::from_vec(&[b, cin, t, h, wd], dx)
                });
                let dw = need_dw.then(|| {
                    let mut dw = vec![T::ZERO; cout * k];
                    for (_, dwp) in &parts {
                        for (acc, v) in dw.iter_mut().zip(dwp) {
                            *acc += *v;
                        }
                    }
                    Array::from_vec(&[cout, cin, kt, kh, kw], dw)
                });
                let db = (has_bias && needs[2]).then(|| {
                    let mut db = vec![T::ZERO; cout];
                    for bi in 0..b {
                        for c in 0..cout {
                            let base = (bi * cout + c) * l;
                            let mut acc = 0.0f64;
                            for i in 0..l {
                                acc += gd[base + i].to_f64();
                            }
                            db[c] += T::from_f64(acc);
                        }
                    }
                    Array::from_vec(&[cout], db)
                });
                vec![dx, dw, db]
            }),
        )
    }
}
