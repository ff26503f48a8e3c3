//! Deterministic accumulation of per-sequence gradients.
//!
//! Items are split into fixed-size chunks independent of the worker count.
//! Each chunk accumulates sequentially; chunk results are then summed in
//! chunk order, so the reduction tree (and therefore every bit of the
//! result) is the same in sequential and parallel execution.

use super::model::{classifier_loss_and_grad, mlm_loss_and_grad, MarkedSequence, MaskedExample};
use super::params::EncoderParameters;
use crate::error::Result;
use crate::par;

pub const CHUNK: usize = 4;

/// Sums `f(item, grads)` over items; returns (summed loss, summed grads).
pub fn accumulate<T, F>(params: &EncoderParameters, items: &[T], f: F) -> Result<(f64, EncoderParameters)>
where
    T: Sync,
    F: Fn(&T, &mut EncoderParameters) -> Result<f64> + Sync + Send,
{
    let chunks: Vec<&[T]> = items.chunks(CHUNK).collect();
    let partials = par::try_map(&chunks, |chunk| {
        let mut g = params.zeros_like();
        let mut loss = 0.0;
        for item in chunk.iter() {
            loss += f(item, &mut g)?;
        }
        Ok::<_, crate::error::Error>((loss, g))
    })?;
    let mut total = 0.0;
    let mut grads = params.zeros_like();
    for (loss, g) in partials {
        total += loss;
        grads.add_assign(&g);
    }
    Ok((total, grads))
}

/// Mean cross-entropy over labeled sequences and its gradient.
pub fn classifier_batch(params: &EncoderParameters, items: &[(MarkedSequence, usize)]) -> Result<(f64, EncoderParameters)> {
    if items.is_empty() {
        return Ok((0.0, params.zeros_like()));
    }
    let w = 1.0 / items.len() as f64;
    let (sum, grads) = accumulate(params, items, |(seq, label), g| {
        classifier_loss_and_grad(params, seq, *label, w, g)
    })?;
    Ok((sum * w, grads))
}

/// Cross-entropy averaged over every target position of the batch.
pub fn mlm_batch(params: &EncoderParameters, examples: &[MaskedExample]) -> Result<(f64, EncoderParameters)> {
    let count: usize = examples.iter().map(|e| e.positions.len()).sum();
    if count == 0 {
        return Ok((0.0, params.zeros_like()));
    }
    let w = 1.0 / count as f64;
    let (sum, grads) = accumulate(params, examples, |ex, g| {
        mlm_loss_and_grad(params, ex, w, Some(g)).map(|(s, _)| s)
    })?;
    Ok((sum * w, grads))
}
