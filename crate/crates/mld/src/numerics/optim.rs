use std::collections::BTreeMap;

use super::graph::{Graph, Value};
use super::tensor::{Scalar, TensorG};
use crate::{Error, Result};

/// AdamW hyperparameters. Weight decay is decoupled: it shrinks the parameter
/// directly and never enters the moment estimates.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct AdamwParams {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamwParams {
    fn default() -> Self {
        AdamwParams {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
        }
    }
}

/// One AdamW update for a single tensor. `step` is 1-based and shared by all
/// tensors updated in the same optimizer step.
pub fn adamw_step<T: Scalar>(
    h: &AdamwParams,
    step: u64,
    param: &mut TensorG<T>,
    grad: &TensorG<T>,
    m: &mut TensorG<T>,
    v: &mut TensorG<T>,
) -> Result<()> {
    if !param.same_shape(grad) || !param.same_shape(m) || !param.same_shape(v) {
        return Err(Error::OptimMismatch {
            detail: format!(
                "param {:?} vs grad {:?} / m {:?} / v {:?}",
                param.dims(),
                grad.dims(),
                m.dims(),
                v.dims()
            ),
        });
    }
    let b1 = T::of_f64(h.beta1);
    let b2 = T::of_f64(h.beta2);
    let one = T::one();
    let lr = T::of_f64(h.lr);
    let eps = T::of_f64(h.eps);
    let bc1 = T::of_f64(1.0 - h.beta1.powi(step as i32));
    let bc2 = T::of_f64(1.0 - h.beta2.powi(step as i32));
    let wd = T::of_f64(h.lr * h.weight_decay);

    let pd = param.data_mut();
    let md = m.data_mut();
    let vd = v.data_mut();
    for i in 0..pd.len() {
        let g = grad.data()[i];
        md[i] = b1 * md[i] + (one - b1) * g;
        vd[i] = b2 * vd[i] + (one - b2) * g * g;
        let mhat = md[i] / bc1;
        let vhat = vd[i] / bc2;
        pd[i] = pd[i] - lr * mhat / (vhat.sqrt() + eps) - wd * pd[i];
    }
    Ok(())
}

/// Moment slots for a named parameter set, created lazily on first update.
pub struct OptimState<T> {
    step: u64,
    slots: BTreeMap<String, (TensorG<T>, TensorG<T>)>,
}

impl<T: Scalar> Default for OptimState<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> OptimState<T> {
    pub fn new() -> Self {
        OptimState {
            step: 0,
            slots: BTreeMap::new(),
        }
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    /// Advance the shared step counter; call once per batch before `update`.
    pub fn begin_step(&mut self) {
        self.step += 1;
    }

    pub fn update(
        &mut self,
        name: &str,
        h: &AdamwParams,
        param: &mut TensorG<T>,
        grad: &TensorG<T>,
    ) -> Result<()> {
        if self.step == 0 {
            return Err(Error::OptimMismatch {
                detail: "update before begin_step".into(),
            });
        }
        let (m, v) = self
            .slots
            .entry(name.to_string())
            .or_insert_with(|| (TensorG::zeros(param.dims()), TensorG::zeros(param.dims())));
        adamw_step(h, self.step, param, grad, m, v)
    }
}

/// Finite-difference gradient check report.
#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub checked: usize,
    pub max_abs: f64,
    pub max_rel: f64,
    pub worst_param: String,
    pub worst_index: usize,
}

/// Compare reverse-mode gradients against central finite differences.
///
/// `f` rebuilds the computation from leaf values and returns the scalar loss;
/// it runs once per perturbed coordinate, so keep the inputs oracle-sized.
/// Per-coordinate error is taken relative to the larger of the two gradient
/// magnitudes, floored at the RMS of the whole analytic gradient. Directions
/// whose true gradient is exactly zero (softmax logits are invariant to the
/// key bias, for instance) are thereby measured against the model's gradient
/// scale instead of against finite-difference rounding noise.
pub fn grad_check<T, F>(
    params: &[(&str, TensorG<T>)],
    fd_eps: f64,
    f: F,
) -> Result<GradCheckReport>
where
    T: Scalar,
    F: Fn(&mut Graph<T>, &[Value]) -> Result<Value>,
{
    let eval = |tensors: &[TensorG<T>]| -> Result<f64> {
        let mut g = Graph::new();
        let vals: Vec<Value> = tensors.iter().map(|t| g.constant(t)).collect();
        let loss = f(&mut g, &vals)?;
        if g.value(loss).numel() != 1 {
            return Err(Error::NonScalarLoss {
                numel: g.value(loss).numel(),
            });
        }
        Ok(g.value(loss).item().as_f64())
    };

    // Analytic pass.
    let mut g = Graph::new();
    let vals: Vec<Value> = params.iter().map(|(_, t)| g.param(t)).collect();
    let loss = f(&mut g, &vals)?;
    let grads = g.backward(loss)?;
    let analytic: Vec<TensorG<T>> = vals.iter().map(|&v| grads.for_param(&g, v)).collect();

    let (mut sumsq, mut count) = (0.0f64, 0usize);
    for t in &analytic {
        for &v in t.data() {
            sumsq += v.as_f64() * v.as_f64();
        }
        count += t.numel();
    }
    let floor = (sumsq / count.max(1) as f64).sqrt().max(1e-12);

    let mut tensors: Vec<TensorG<T>> = params.iter().map(|(_, t)| t.clone()).collect();
    let mut report = GradCheckReport {
        checked: 0,
        max_abs: 0.0,
        max_rel: 0.0,
        worst_param: String::new(),
        worst_index: 0,
    };
    let eps = T::of_f64(fd_eps);
    for (pi, (name, _)) in params.iter().enumerate() {
        for j in 0..tensors[pi].numel() {
            let orig = tensors[pi].data()[j];
            tensors[pi].data_mut()[j] = orig + eps;
            let lp = eval(&tensors)?;
            tensors[pi].data_mut()[j] = orig - eps;
            let lm = eval(&tensors)?;
            tensors[pi].data_mut()[j] = orig;

            let fd = (lp - lm) / (2.0 * fd_eps);
            let an = analytic[pi].data()[j].as_f64();
            let abs = (fd - an).abs();
            let rel = abs / fd.abs().max(an.abs()).max(floor);
            report.checked += 1;
            if abs > report.max_abs {
                report.max_abs = abs;
            }
            if rel > report.max_rel {
                report.max_rel = rel;
                report.worst_param = name.to_string();
                report.worst_index = j;
            }
        }
    }
    Ok(report)
}
