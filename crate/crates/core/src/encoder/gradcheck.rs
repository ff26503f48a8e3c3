//! Central finite-difference verification of analytic gradients.

use rand::seq::index::sample;
use rand::Rng as _;

use super::params::EncoderParameters;
use crate::error::{Error, Result};
use crate::seed;

pub const DEFAULT_EPSILON: f64 = 1e-5;
pub const DEFAULT_COORDINATES: usize = 200;
/// Denominator floor for the relative error, so coordinates whose true
/// gradient is zero compare on an absolute scale.
pub const REL_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub coordinates: usize,
    /// (tensor name, flat index, analytic, numeric) of the worst coordinate.
    pub worst: Option<(String, usize, f64, f64)>,
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

/// Compares the analytic gradient returned by `loss_fn` with central
/// differences at `min_coords` or more coordinates, spread over every
/// tensor. Half of each tensor's sample is drawn from coordinates with a
/// nonzero analytic gradient when any exist.
pub fn gradient_check<F>(loss_fn: F, params: &EncoderParameters, seed_value: u64, epsilon: f64, min_coords: usize) -> Result<GradCheckReport>
where
    F: Fn(&EncoderParameters) -> Result<(f64, EncoderParameters)>,
{
    let (loss, analytic) = loss_fn(params)?;
    if !loss.is_finite() {
        return Err(Error::Numerical(format!("non-finite loss {loss}")));
    }
    let names = params.tensor_names();
    let n_tensors = names.len();
    let per_tensor = min_coords.div_ceil(n_tensors).max(1);
    let mut rng = seed::rng(seed_value, &[0x6772_6164]);

    let sizes: Vec<usize> = analytic.tensors().iter().map(|t| t.len()).collect();
    let mut takes: Vec<usize> = sizes.iter().map(|&len| per_tensor.min(len)).collect();
    let mut short = min_coords.saturating_sub(takes.iter().sum());
    for (take, &len) in takes.iter_mut().zip(&sizes) {
        let extra = (len - *take).min(short);
        *take += extra;
        short -= extra;
    }

    let mut coords: Vec<(usize, usize)> = Vec::new();
    for (ti, g) in analytic.tensors().iter().enumerate() {
        let take = takes[ti];
        let nonzero: Vec<usize> = g
            .iter()
            .enumerate()
            .filter(|(_, v)| **v != 0.0)
            .map(|(i, _)| i)
            .collect();
        let from_nonzero = (take / 2).min(nonzero.len());
        for _ in 0..from_nonzero {
            coords.push((ti, nonzero[rng.random_range(0..nonzero.len())]));
        }
        for i in sample(&mut rng, g.len(), take - from_nonzero) {
            coords.push((ti, i));
        }
    }

    let mut probe = params.clone();
    let mut max_err = 0.0f64;
    let mut worst = None;
    for &(ti, i) in &coords {
        let orig = params.tensors()[ti].as_slice().expect("contiguous")[i];
        let set = |p: &mut EncoderParameters, v: f64| {
            p.tensors_mut()[ti].as_slice_mut().expect("contiguous")[i] = v;
        };
        set(&mut probe, orig + epsilon);
        let (plus, _) = loss_fn(&probe)?;
        set(&mut probe, orig - epsilon);
        let (minus, _) = loss_fn(&probe)?;
        set(&mut probe, orig);
        if !plus.is_finite() || !minus.is_finite() {
            return Err(Error::Numerical("non-finite loss under perturbation".into()));
        }
        let numeric = (plus - minus) / (2.0 * epsilon);
        let a = analytic.tensors()[ti].as_slice().expect("contiguous")[i];
        let err = relative_error(a, numeric);
        if err > max_err || worst.is_none() {
            max_err = max_err.max(err);
            worst = Some((names[ti].clone(), i, a, numeric));
        }
    }
    Ok(GradCheckReport {
        max_rel_error: max_err,
        coordinates: coords.len(),
        worst,
    })
}
