use crate::array::Array;
use crate::scalar::Scalar;
use crate::tape::{Tape, Var};

fn strides_of(shape: &[usize]) -> Vec<usize> {
    let mut st = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        st[i] = st[i + 1] * shape[i + 1];
    }
    st
}

fn permute_array<T: Scalar>(x: &Array<T>, perm: &[usize]) -> Array<T> {
    let shape = x.shape();
    assert_eq!(perm.len(), shape.len());
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let in_strides = strides_of(shape);
    let out_strides = strides_of(&out_shape);
    let src = x.data();
    let mut out = vec![T::ZERO; x.len()];
    let ndim = shape.len();
    let mut idx = vec![0usize; ndim];
    for (o, slot) in out.iter_mut().enumerate() {
        // decompose output offset o into output index, map to input offset
        let mut rem = o;
        for d in 0..ndim {
            idx[d] = rem / out_strides[d];
            rem %= out_strides[d];
        }
        let mut src_off = 0;
        for d in 0..ndim {
            src_off += idx[d] * in_strides[perm[d]];
        }
        *slot = src[src_off];
    }
    Array::from_vec(&out_shape, out)
}

fn inverse_perm(perm: &[usize]) -> Vec<usize> {
    let mut inv = vec![0usize; perm.len()];
    for (i, &p) in perm.iter().enumerate() {
        inv[p] = i;
    }
    inv
}

impl<T: Scalar> Tape<T> {
    /// Same data, new shape.
    pub fn reshape(&self, x: &Var<T>, shape: &[usize]) -> Var<T> {
        let value = x.value.reshape(shape);
        let old = x.value.shape().to_vec();
        self.push(value, vec![x.node], Box::new(move |g, _needs: &[bool]| vec![Some(g.reshape(&old))]))
    }

    /// Dimension permutation (copies).
    pub fn permute(&self, x: &Var<T>, perm: &[usize]) -> Var<T> {
        let value = permute_array(&x.value, perm);
        let inv = inverse_perm(perm);
        self.push(value, vec![x.node], Box::new(move |g, _needs: &[bool]| vec![Some(permute_array(g, &inv))]))
    }

    /// Concatenate along `axis`.
    pub fn concat(&self, axis: usize, parts: &[&Var<T>]) -> Var<T> {
        assert!(!parts.is_empty());
        let first = parts[0].value.shape().to_vec();
        let ndim = first.len();
        assert!(axis < ndim);
        let mut axis_total = 0;
        let mut axis_sizes = Vec::with_capacity(parts.len());
        for p in parts {
            let s = p.value.shape();
            assert_eq!(s.len(), ndim);
            for d in 0..ndim {
                if d != axis {
                    assert_eq!(s[d], first[d], "concat shape mismatch on dim {d}");
                }
            }
            axis_sizes.push(s[axis]);
            axis_total += s[axis];
        }
        let mut out_shape = first.clone();
        out_shape[axis] = axis_total;

        let outer: usize = first[..axis].iter().product();
        let inner: usize = first[axis + 1..].iter().product();
        let mut out = vec![T::ZERO; outer * axis_total * inner];
        let mut base = 0usize;
        for p in parts {
            let a = p.value.dim(axis);
            let src = p.value.data();
            for o in 0..outer {
                let dst_off = (o * axis_total + base) * inner;
                let src_off = o * a * inner;
                out[dst_off..dst_off + a * inner]
                    .copy_from_slice(&src[src_off..src_off + a * inner]);
            }
            base += a;
        }

        let parents: Vec<Option<usize>> = parts.iter().map(|p| p.node).collect();
        let part_shapes: Vec<Vec<usize>> =
            parts.iter().map(|p| p.value.shape().to_vec()).collect();
        self.push(
            Array::from_vec(&out_shape, out),
            parents,
            Box::new(move |g, _needs: &[bool]| {
                let gd = g.data();
                let mut base = 0usize;
                let mut grads = Vec::with_capacity(part_shapes.len());
                for shape in &part_shapes {
                    let a = shape[axis];
                    let mut part = vec![T::ZERO; outer * a * inner];
                    for o in 0..outer {
                        let src_off = (o * axis_total + base) * inner;
                        let dst_off = o * a * inner;
                        part[dst_off..dst_off + a * inner]
                            .copy_from_slice(&gd[src_off..src_off + a * inner]);
                    }
                    grads.push(Some(Array::from_vec(shape, part)));
                    base += a;
                }
                grads
            }),
        )
    }

    /// Contiguous slice `[start, start+len)` along `axis`.
    pub fn slice(&self, x: &Var<T>, axis: usize, start: usize, len: usize) -> Var<T> {
        let shape = x.value.shape().to_vec();
        let ndim = shape.len();
        assert!(axis < ndim);
        assert!(start + len <= shape[axis], "slice out of range");
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis + 1..].iter().product();
        let a = shape[axis];
        let mut out_shape = shape.clone();
        out_shape[axis] = len;
        let src = x.value.data();
        let mut out = vec![T::ZERO; outer * len * inner];
        for o in 0..outer {
            let src_off = (o * a + start) * inner;
            let dst_off = o * len * inner;
            out[dst_off..dst_off + len * inner].copy_from_slice(&src[src_off..src_off + len * inner]);
        }
        self.push(
            Array::from_vec(&out_shape, out),
            vec![x.node],
            Box::new(move |g, _needs: &[bool]| {
                let gd = g.data();
                let mut dx = vec![T::ZERO; outer * a * inner];
                for o in 0..outer {
                    let dst_off = (o * a + start) * inner;
                    let src_off = o * len * inner;
                    dx[dst_off..dst_off + len * inner]
                        .copy_from_slice(&gd[src_off..src_off + len * inner]);
                }
                vec![Some(Array::from_vec(&shape, dx))]
            }),
        )
    }

    /// Nearest-neighbour 2x upsampling of the last two (spatial) dims.
    /// Accepts `[B,C,H,W]` or `[B,C,T,H,W]`; the time axis is untouched.
    pub fn upsample2x(&self, x: &Var<T>) -> Var<T> {
        let shape = x.value.shape().to_vec();
        let ndim = shape.len();
        assert!(ndim == 4 || ndim == 5, "upsample2x expects 4-D or 5-D input");
        let (h, w) = (shape[ndim - 2], shape[ndim - 1]);
        let outer: usize = shape[..ndim - 2].iter().product();
        let mut out_shape = shape.clone();
        out_shape[ndim - 2] = 2 * h;
        out_shape[ndim - 1] = 2 * w;
        let src = x.value.data();
        let mut out = vec![T::ZERO; outer * 4 * h * w];
        for o in 0..outer {
            for y in 0..h {
                for xw in 0..w {
                    let v = src[(o * h + y) * w + xw];
                    let r0 = (o * 2 * h + 2 * y) * 2 * w + 2 * xw;
                    let r1 = r0 + 2 * w;
                    out[r0] = v;
                    out[r0 + 1] = v;
                    out[r1] = v;
                    out[r1 + 1] = v;
                }
            }
        }
        self.push(
            Array::from_vec(&out_shape, out),
            vec![x.node],
            Box::new(move |g, _needs: &[bool]| {
                let gd = g.data();
                let mut dx = vec![T::ZERO; outer * h * w];
                for o in 0..outer {
                    for y in 0..h {
                        for xw in 0..w {
                            let r0 = (o * 2 * h + 2 * y) * 2 * w + 2 * xw;
                            let r1 = r0 + 2 * w;
                            dx[(o * h + y) * w + xw] =
                                gd[r0] + gd[r0 + 1] + gd[r1] + gd[r1 + 1];
                        }
                    }
                }
                vec![Some(Array::from_vec(&shape, dx))]
            }),
        )
    }
}
