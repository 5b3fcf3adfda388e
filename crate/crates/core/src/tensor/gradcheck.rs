//! Central-difference verification of analytic gradients.

use super::{Graph, NodeId, Tensor};
use crate::error::{ensure, Error, Result};

#[derive(Debug, Clone)]
pub struct GradCheckOptions {
    /// Perturbation for the central difference.
    pub eps: f64,
    /// Floor of the relative-error denominator.
    pub floor: f64,
    /// Check at most this many evenly spaced entries per input (all when `None`).
    pub max_entries_per_input: Option<usize>,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            eps: 1e-5,
            floor: 1e-12,
            max_entries_per_input: None,
        }
    }
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    /// Largest per-input relative error.
    pub max_rel_error: f64,
    /// `‖a - n‖ / max(‖a‖, ‖n‖, floor)` per input tensor, in input order.
    pub per_input: Vec<f64>,
    /// Largest entry-wise `|a - n| / max(|a|, |n|, floor)`; informational,
    /// dominated by roundoff on near-zero entries.
    pub max_entry_rel_error: f64,
    pub entries_checked: usize,
}

/// Compares reverse-mode gradients of a scalar-valued graph with central
/// differences. `build` must construct the same computation on every call.
///
/// Each input tensor gets the norm-wise error `‖a - n‖ / max(‖a‖, ‖n‖, floor)`
/// over its checked entries, where `a` is analytic and `n` numeric.
pub fn grad_check<F>(build: F, inputs: &[Tensor], opts: &GradCheckOptions) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &[NodeId]) -> Result<NodeId>,
{
    let eval = |values: &[Tensor]| -> Result<f64> {
        let mut g = Graph::new();
        let ids: Vec<NodeId> = values.iter().map(|t| g.constant(t.clone())).collect();
        let out = build(&mut g, &ids)?;
        let v = g.value(out);
        ensure!(v.len() == 1, ShapeMismatch, "grad_check objective must be scalar, got {:?}", v.shape());
        let v = v.item();
        if !v.is_finite() {
            return Err(Error::NonFinite("objective evaluated to a non-finite value".into()));
        }
        Ok(v)
    };

    let mut g = Graph::new();
    let ids: Vec<NodeId> = inputs.iter().map(|t| g.param(t.clone())).collect();
    let out = build(&mut g, &ids)?;
    let grads = g.backward(out)?;
    let analytic: Vec<Tensor> = ids
        .iter()
        .zip(inputs)
        .map(|(&id, t)| grads.get(id).cloned().unwrap_or_else(|| Tensor::zeros(t.shape().to_vec())))
        .collect();
    if analytic.iter().any(|t| !t.is_finite()) {
        return Err(Error::NonFinite("analytic gradient contains non-finite values".into()));
    }

    let mut work: Vec<Tensor> = inputs.to_vec();
    let mut per_input = Vec::with_capacity(inputs.len());
    let mut checked = 0;
    let mut worst_entry = 0.0f64;
    for (ti, t) in inputs.iter().enumerate() {
        let n = t.len();
        let step = match opts.max_entries_per_input {
            Some(m) if m > 0 && n > m => n.div_ceil(m),
            _ => 1,
        };
        let (mut diff2, mut a2, mut n2) = (0.0f64, 0.0f64, 0.0f64);
        for i in (0..n).step_by(step) {
            let orig = t.data()[i];
            work[ti].data_mut()[i] = orig + opts.eps;
            let plus = eval(&work)?;
            work[ti].data_mut()[i] = orig - opts.eps;
            let minus = eval(&work)?;
            work[ti].data_mut()[i] = orig;
            let numeric = (plus - minus) / (2.0 * opts.eps);
            let a = analytic[ti].data()[i];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(opts.floor);
            worst_entry = worst_entry.max(rel);
            diff2 += (a - numeric) * (a - numeric);
            a2 += a * a;
            n2 += numeric * numeric;
            checked += 1;
        }
        per_input.push(diff2.sqrt() / a2.sqrt().max(n2.sqrt()).max(opts.floor));
    }
    Ok(GradCheckReport {
        max_rel_error: per_input.iter().copied().fold(0.0, f64::max),
        max_entry_rel_error: worst_entry,
        per_input,
        entries_checked: checked,
    })
}
