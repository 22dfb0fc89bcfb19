use crate::array::Array;
use crate::scalar::Scalar;
use crate::tape::{Tape, Var};

/// C[m,n] = A[m,k] x B[k,n], optionally transposing either operand via
/// strides (no copies).
fn gemm_rm<T: Scalar>(
    m: usize,
    k: usize,
    n: usize,
    a: &Array<T>,
    ta: bool,
    b: &Array<T>,
    tb: bool,
) -> Array<T> {
    let (rsa, csa) = if ta { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if tb { (1, k as isize) } else { (n as isize, 1) };
    let mut out = vec![T::ZERO; m * n];
    unsafe {
        T::gemm(
            m,
            k,
            n,
            T::ONE,
            a.data().as_ptr(),
            rsa,
            csa,
            b.data().as_ptr(),
            rsb,
            csb,
            T::ZERO,
            out.as_mut_ptr(),
        );
    }
    Array::from_vec(&[m, n], out)
}

impl<T: Scalar> Tape<T> {
    /// `[m,k] x [k,n] -> [m,n]`.
    pub fn matmul(&self, a: &Var<T>, b: &Var<T>) -> Var<T> {
        assert_eq!(a.value.ndim(), 2);
        assert_eq!(b.value.ndim(), 2);
        let (m, k) = (a.value.dim(0), a.value.dim(1));
        let (k2, n) = (b.value.dim(0), b.value.dim(1));
        assert_eq!(k, k2, "matmul inner dims {k} vs {k2}");
        let value = gemm_rm(m, k, n, &a.value, false, &b.value, false);
        let (av, bv) = (a.value.clone(), b.value.clone());
        self.push(
            value,
            vec![a.node, b.node],
            Box::new(move |g, needs: &[bool]| {
                // dA = g x B^T ; dB = A^T x g
                let da = needs[0].then(|| gemm_rm(m, n, k, g, false, &bv, true));
                let db = needs[1].then(|| gemm_rm(k, m, n, &av, true, g, false));
                vec![da, db]
            }),
        )
    }

    /// `[m,k] x [n,k]^T -> [m,n]` — matmul with the second operand
    /// transposed, avoiding an explicit permute.
    pub fn matmul_nt(&self, a: &Var<T>, b: &Var<T>) -> Var<T> {
        assert_eq!(a.value.ndim(), 2);
        assert_eq!(b.value.ndim(), 2);
        let (m, k) = (a.value.dim(0), a.value.dim(1));
        let (n, k2) = (b.value.dim(0), b.value.dim(1));
        assert_eq!(k, k2, "matmul_nt inner dims {k} vs {k2}");
        let value = gemm_rm(m, k, n, &a.value, false, &b.value, true);
        let (av, bv) = (a.value.clone(), b.value.clone());
        self.push(
            value,
            vec![a.node, b.node],
            Box::new(move |g, needs: &[bool]| {
                // C = A x B^T  =>  dA = g x B ; dB = g^T x A
                let da = needs[0].then(|| gemm_rm(m, n, k, g, false, &bv, false));
                let db = needs[1].then(|| gemm_rm(n, m, k, g, true, &av, false));
                vec![da, db]
            }),
        )
    }

    /// Add a bias row vector `[n]` to every row of `[m,n]`.
    pub fn add_bias_rows(&self, x: &Var<T>, b: &Var<T>) -> Var<T> {
        assert_eq!(x.value.ndim(), 2);
        assert_eq!(b.value.ndim(), 1);
        let (m, n) = (x.value.dim(0), x.value.dim(1));
        assert_eq!(b.value.dim(0), n);
        let mut value = x.value.clone();
        {
            let dst = value.data_mut();
            let bx = b.value.data();
            for r in 0..m {
                for c in 0..n {
                    dst[r * n + c] += bx[c];
                }
            }
        }
        self.push(
            value,
            vec![x.node, b.node],
            Box::new(move |g, _needs: &[bool]| {
                let gd = g.data();
                let mut db = vec![T::ZERO; n];
                for r in 0..m {
                    for c in 0..n {
                        db[c] += gd[r * n + c];
                    }
                }
                vec![Some(g.clone()), Some(Array::from_vec(&[n], db))]
            }),
        )
    }

    /// Gather rows of `table [V,C]` at `indices` -> `[len,C]`. The backward
    /// pass scatter-adds into the table gradient (used by the codebook).
    pub fn gather_rows(&self, table: &Var<T>, indices: &[usize]) -> Var<T> {
        assert_eq!(table.value.ndim(), 2);
        let (v, c) = (table.value.dim(0), table.value.dim(1));
        let n = indices.len();
        let src = table.value.data();
        let mut out = vec![T::ZERO; n * c];
        for (row, &ix) in indices.iter().enumerate() {
            assert!(ix < v, "gather index {ix} out of range {v}");
            out[row * c..(row + 1) * c].copy_from_slice(&src[ix * c..(ix + 1) * c]);
        }
        let idx: Vec<usize> = indices.to_vec();
        self.push(
            Array::from_vec(&[n, c], out),
            vec![table.node],
            Box::new(move |g, _needs: &[bool]| {
                let gd = g.data();
                let mut dt = vec![T::ZERO; v * c];
                for (row, &ix) in idx.iter().enumerate() {
                    for j in 0..c {
                        dt[ix * c + j] += gd[row * c + j];
                    }
                }
                vec![Some(Array::from_vec(&[v, c], dt))]
            }),
        )
    }
}
