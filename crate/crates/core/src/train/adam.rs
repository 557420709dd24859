use indexmap::IndexMap;

use crate::error::{Error, Result};
use crate::model::{BoundParams, ParamStore};
use crate::scalar::Scalar;
use crate::tape::Gradients;
use crate::tensor::Tensor;

/// Parameter gradients keyed by parameter name.
pub type NamedGrads<T> = IndexMap<String, Tensor<T>>;

/// Pulls the gradient of every bound parameter out of a backward pass.
pub fn named_gradients<T: Scalar>(bound: &BoundParams, grads: &Gradients<T>) -> Result<NamedGrads<T>> {
    bound
        .iter()
        .map(|(name, var)| {
            let g = grads.get(var).ok_or_else(|| Error::MissingGradient(name.to_string()))?;
            Ok((name.to_string(), g.clone()))
        })
        .collect()
}

/// First and second moment buffers of Adam.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState<T: Scalar> {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    m: IndexMap<String, Vec<T>>,
    v: IndexMap<String, Vec<T>>,
}

impl<T: Scalar> AdamState<T> {
    /// Zeroed moments shaped like `params`, betas 0.9 / 0.999, eps 1e-8.
    pub fn new(params: &ParamStore<T>) -> Self {
        let zeros = || params.iter().map(|(k, t)| (k.to_string(), vec![T::zero(); t.len()])).collect();
        AdamState { beta1: 0.9, beta2: 0.999, eps: 1e-8, step: 0, m: zeros(), v: zeros() }
    }

    pub fn first_moment(&self, name: &str) -> Option<&[T]> {
        self.m.get(name).map(Vec::as_slice)
    }

    pub fn second_moment(&self, name: &str) -> Option<&[T]> {
        self.v.get(name).map(Vec::as_slice)
    }
}

/// One bias-corrected Adam update of every parameter in `params`.
pub fn adam_step<T: Scalar>(params: &mut ParamStore<T>, grads: &NamedGrads<T>, state: &mut AdamState<T>, lr: f64) -> Result<()> {
    for (name, p) in params.iter() {
        let g = grads.get(name).ok_or_else(|| Error::MissingGradient(name.to_string()))?;
        if g.dims() != p.dims() {
            return Err(Error::shape("adam_step", name, format!("{:?}", p.dims()), format!("{:?}", g.dims())));
        }
        if !state.m.contains_key(name) {
            return Err(Error::invalid("adam_step", format!("no moment buffers for {name}")));
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let (b1, b2) = (state.beta1, state.beta2);
    let c1 = 1.0 - b1.powi(t);
    let c2 = 1.0 - b2.powi(t);
    for (name, p) in params.iter_mut() {
        let g = grads[name].data();
        let m = state.m.get_mut(name).expect("checked above");
        let v = state.v.get_mut(name).expect("checked above");
        for (((w, &g), m), v) in p.data_mut().iter_mut().zip(g).zip(m.iter_mut()).zip(v.iter_mut()) {
            let g = g.as_f64();
            let mn = b1 * m.as_f64() + (1.0 - b1) * g;
            let vn = b2 * v.as_f64() + (1.0 - b2) * g * g;
            *m = T::lit(mn);
            *v = T::lit(vn);
            let update = lr * (mn / c1) / ((vn / c2).sqrt() + state.eps);
            *w = T::lit(w.as_f64() - update);
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store() -> ParamStore<f64> {
        let mut p = ParamStore::new();
        p.insert("a", Tensor::from_vec(&[3], vec![1.0, -2.0, 0.5]).unwrap());
        p.insert("b", Tensor::from_vec(&[1], vec![0.0]).unwrap());
        p
    }

    fn grads(a: [f64; 3], b: f64) -> NamedGrads<f64> {
        let mut g = NamedGrads::new();
        g.insert("a".into(), Tensor::from_vec(&[3], a.to_vec()).unwrap());
        g.insert("b".into(), Tensor::from_vec(&[1], vec![b]).unwrap());
        g
    }

    #[test]
    fn first_step_moves_by_lr_times_sign() {
        let mut p = store();
        let before = p.clone();
        let mut s = AdamState::new(&p);
        adam_step(&mut p, &grads([3.0, -0.01, 1e-3], 50.0), &mut s, 0.01).unwrap();
        let moved: Vec<f64> = p.get("a").unwrap().data().iter().zip(before.get("a").unwrap().data()).map(|(x, y)| x - y).collect();
        for (d, sign) in moved.iter().zip([-1.0, 1.0, -1.0]) {
            assert!((d - sign * 0.01).abs() < 1e-6, "{d}");
        }
        assert!((p.get("b").unwrap().data()[0] + 0.01).abs() < 1e-9);
        assert_eq!(s.step, 1);
    }

    #[test]
    fn zero_gradient_leaves_params() {
        let mut p = store();
        let before = p.clone();
        let mut s = AdamState::new(&p);
        for _ in 0..3 {
            adam_step(&mut p, &grads([0.0; 3], 0.0), &mut s, 0.1).unwrap();
        }
        assert_eq!(p, before);
        assert_eq!(s.step, 3);
    }

    #[test]
    fn matches_closed_form_second_step() {
        let mut p = store();
        let mut s = AdamState::new(&p);
        adam_step(&mut p, &grads([1.0, 1.0, 1.0], 1.0), &mut s, 0.1).unwrap();
        adam_step(&mut p, &grads([2.0, 2.0, 2.0], 2.0), &mut s, 0.1).unwrap();
        let m = 0.9 * 0.1 + 0.1 * 2.0;
        let v = 0.999 * 0.001 + 0.001 * 4.0;
        let step2 = 0.1 * (m / (1.0 - 0.81)) / ((v / (1.0 - 0.999f64.powi(2))).sqrt() + 1e-8);
        let expect = 0.0 - 0.1 * 1.0 / (1.0 + 1e-8) - step2;
        assert!((p.get("b").unwrap().data()[0] - expect).abs() < 1e-12);
    }

    #[test]
    fn deterministic() {
        let run = || {
            let mut p = store();
            let mut s = AdamState::new(&p);
            for k in 0..5 {
                let k = k as f64;
                adam_step(&mut p, &grads([k, -k, 0.3 * k], 1.0 / (k + 1.0)), &mut s, 0.05).unwrap();
            }
            (p, s)
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn missing_gradient_is_an_error() {
        let mut p = store();
        let mut s = AdamState::new(&p);
        let mut g = grads([1.0; 3], 1.0);
        g.shift_remove("b");
        assert!(matches!(adam_step(&mut p, &g, &mut s, 0.1), Err(Error::MissingGradient(n)) if n == "b"));
        assert_eq!(s.step, 0);
    }
}
