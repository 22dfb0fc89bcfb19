use crate::array::Array;
use crate::scalar::Scalar;
use crate::tape::{Tape, Var};

impl<T: Scalar> Tape<T> {
    pub fn add(&self, a: &Var<T>, b: &Var<T>) -> Var<T> {
        let value = a.value.add(&b.value);
        self.push(
            value,
            vec![a.node, b.node],
            Box::new(move |g, _needs: &[bool]| vec![Some(g.clone()), Some(g.clone())]),
        )
    }

    pub fn sub(&self, a: &Var<T>, b: &Var<T>) -> Var<T> {
        let value = a.value.sub(&b.value);
        self.push(
            value,
            vec![a.node, b.node],
            Box::new(move |g, _needs: &[bool]| vec![Some(g.clone()), Some(g.scale(-T::ONE))]),
        )
    }

    pub fn mul(&self, a: &Var<T>, b: &Var<T>) -> Var<T> {
        let value = a.value.mul(&b.value);
        let (av, bv) = (a.value.clone(), b.value.clone());
        self.push(
            value,
            vec![a.node, b.node],
            Box::new(move |g, _needs: &[bool]| vec![Some(g.mul(&bv)), Some(g.mul(&av))]),
        )
    }

    pub fn scale(&self, a: &Var<T>, c: T) -> Var<T> {
        let value = a.value.scale(c);
        self.push(value, vec![a.node], Box::new(move |g, _needs: &[bool]| vec![Some(g.scale(c))]))
    }

    pub fn add_scalar(&self, a: &Var<T>, c: T) -> Var<T> {
        let value = a.value.map(|v| v + c);
        self.push(value, vec![a.node], Box::new(move |g, _needs: &[bool]| vec![Some(g.clone())]))
    }

    pub fn neg(&self, a: &Var<T>) -> Var<T> {
        self.scale(a, -T::ONE)
    }

    pub fn relu(&self, a: &Var<T>) -> Var<T> {
        let value = a.value.map(|v| v.maxv(T::ZERO));
        let av = a.value.clone();
        self.push(
            value,
            vec![a.node],
            Box::new(move |g, _needs: &[bool]| {
                vec![Some(g.zip_map(&av, |gv, x| if x > T::ZERO { gv } else { T::ZERO }))]
            }),
        )
    }

    pub fn sigmoid(&self, a: &Var<T>) -> Var<T> {
        let value = a.value.map(sigmoid_scalar);
        let yv = value.clone();
        self.push(
            value,
            vec![a.node],
            Box::new(move |g, _needs: &[bool]| vec![Some(g.zip_map(&yv, |gv, y| gv * y * (T::ONE - y)))]),
        )
    }

    /// x * sigmoid(x).
    pub fn silu(&self, a: &Var<T>) -> Var<T> {
        let value = a.value.map(|x| x * sigmoid_scalar(x));
        let av = a.value.clone();
        self.push(
            value,
            vec![a.node],
            Box::new(move |g, _needs: &[bool]| {
                vec![Some(g.zip_map(&av, |gv, x| {
                    let s = sigmoid_scalar(x);
                    gv * (s + x * s * (T::ONE - s))
                }))]
            }),
        )
    }

    /// Forward takes `values`; the gradient passes through to `src`
    /// unchanged. This is the straight-through estimator used by vector
    /// quantization.
    pub fn straight_through(&self, src: &Var<T>, values: Array<T>) -> Var<T> {
        assert_eq!(src.value.shape(), values.shape(), "straight_through shape mismatch");
        self.push(values, vec![src.node], Box::new(move |g, _needs: &[bool]| vec![Some(g.clone())]))
    }
}

fn sigmoid_scalar<T: Scalar>(x: T) -> T {
    // Numerically stable in both tails.
    if x.to_f64() >= 0.0 {
        let e = (-x).exp();
        T::ONE / (T::ONE + e)
    } else {
        let e = x.exp();
        e / (T::ONE + e)
    }
}
