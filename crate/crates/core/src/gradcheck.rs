//! Central finite-difference verification of analytic gradients.

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::rng::Stream;
use crate::tensor::{Parameter, Tensor};

/// Outcome of a gradient check.
#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    /// Parameter name and flat coordinate of the worst disagreement.
    pub worst: Option<(String, usize)>,
    pub coords_checked: usize,
}

/// Compare an analytic gradient against central differences
/// `(f(θ+eps) − f(θ−eps)) / (2·eps)` per coordinate.
///
/// `f` must be deterministic. `analytic` maps parameter names to gradient
/// tensors; parameters without an entry are skipped (frozen weights).
/// `max_coords_per_param` limits each tensor to a seeded random coordinate
/// sample; `None` checks every coordinate. The relative error denominator is
/// `max(|analytic|, |numeric|, 1e-8)`.
///
/// Each coordinate is scored by its best step size in `eps`: roundoff noise
/// dominates small steps on near-zero gradients and truncation dominates
/// large steps under high curvature, so no single step fits every
/// coordinate, while a genuinely wrong gradient fails at all of them.
pub fn finite_difference_gradcheck<F>(
    f: &mut F,
    params: &mut [Parameter<f64>],
    analytic: &HashMap<String, Tensor<f64>>,
    eps: &[f64],
    max_coords_per_param: Option<usize>,
    coord_seed: u64,
) -> Result<GradCheckReport>
where
    F: FnMut(&[Parameter<f64>]) -> Result<f64>,
{
    if eps.is_empty() || eps.iter().any(|&e| e <= 0.0) {
        return Err(Error::arg(format!("step sizes must be positive, got {eps:?}")));
    }
    let mut rng = Stream::new(coord_seed);
    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        worst: None,
        coords_checked: 0,
    };
    for pi in 0..params.len() {
        let name = params[pi].name.clone();
        let Some(grad) = analytic.get(&name) else {
            continue;
        };
        if grad.shape() != params[pi].value.shape() {
            return Err(Error::dim(format!(
                "gradient shape {:?} vs parameter `{name}` shape {:?}",
                grad.shape(),
                params[pi].value.shape()
            )));
        }
        let n = grad.len();
        let coords: Vec<usize> = match max_coords_per_param {
            Some(k) if k < n => {
                let mut all: Vec<usize> = (0..n).collect();
                rng.shuffle(&mut all);
                all.truncate(k);
                all
            }
            _ => (0..n).collect(),
        };
        for c in coords {
            let a = grad.data()[c];
            if !a.is_finite() {
                return Err(Error::numeric(&name, format!("analytic gradient at {c} is {a}")));
            }
            let orig = params[pi].value.data()[c];
            let mut rel = f64::INFINITY;
            for &e in eps {
                params[pi].value.data_mut()[c] = orig + e;
                let fp = f(params)?;
                params[pi].value.data_mut()[c] = orig - e;
                let fm = f(params)?;
                params[pi].value.data_mut()[c] = orig;
                if !fp.is_finite() || !fm.is_finite() {
                    return Err(Error::numeric(
                        &name,
                        format!("non-finite loss under perturbation at {c}: f+={fp}, f-={fm}"),
                    ));
                }
                let numeric = (fp - fm) / (2.0 * e);
                let denom = a.abs().max(numeric.abs()).max(1e-8);
                rel = rel.min((a - numeric).abs() / denom);
                if rel <= 1e-9 {
                    break;
                }
            }
            report.coords_checked += 1;
            if rel > report.max_rel_err {
                report.max_rel_err = rel;
                report.worst = Some((name.clone(), c));
            }
        }
    }
    Ok(report)
}
