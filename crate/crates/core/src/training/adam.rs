use crate::error::{Error, Result};
use crate::model::linalg::lit;
use crate::model::{GradientSet, ModelParams, Real};

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const EPSILON: f64 = 1e-8;

/// First and second moments per parameter tensor, plus the step count.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState<T> {
    pub t: u64,
    pub m: Vec<Vec<T>>,
    pub v: Vec<Vec<T>>,
}

impl<T: Real> AdamState<T> {
    pub fn new(params: &ModelParams<T>) -> Self {
        let zeros = || params.tensors.iter().map(|t| vec![T::zero(); t.len()]).collect();
        Self { t: 0, m: zeros(), v: zeros() }
    }
}

/// One bias-corrected Adam update with learning rate `lr`.
///
/// Leaves everything untouched if any gradient is non-finite.
pub fn adam_step<T: Real>(
    params: &mut ModelParams<T>,
    grads: &GradientSet<T>,
    state: &mut AdamState<T>,
    lr: f64,
) -> Result<()> {
    if grads.tensors.len() != params.tensors.len()
        || state.m.len() != params.tensors.len()
        || grads
            .tensors
            .iter()
            .zip(&params.tensors)
            .zip(&state.m)
            .any(|((g, p), m)| g.len() != p.len() || m.len() != p.len())
    {
        return Err(Error::Argument("gradient or optimizer shapes differ from parameters".into()));
    }
    if let Some(name) = grads.first_non_finite() {
        return Err(Error::NonFiniteGradient(name.to_string()));
    }
    state.t += 1;
    let t = state.t as i32;
    let (b1, b2) = (lit::<T>(BETA1), lit::<T>(BETA2));
    let (one_b1, one_b2) = (lit::<T>(1.0 - BETA1), lit::<T>(1.0 - BETA2));
    let c1 = lit::<T>(1.0 / (1.0 - BETA1.powi(t)));
    let c2 = lit::<T>(1.0 / (1.0 - BETA2.powi(t)));
    let (lr, eps) = (lit::<T>(lr), lit::<T>(EPSILON));
    for (i, p) in params.tensors.iter_mut().enumerate() {
        let g = &grads.tensors[i].data;
        let (m, v) = (&mut state.m[i], &mut state.v[i]);
        for j in 0..p.data.len() {
            m[j] = b1 * m[j] + one_b1 * g[j];
            v[j] = b2 * v[j] + one_b2 * g[j] * g[j];
            let mhat = m[j] * c1;
            let vhat = v[j] * c2;
            p.data[j] -= lr * mhat / (vhat.sqrt() + eps);
        }
    }
    Ok(())
}
