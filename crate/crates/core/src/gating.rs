//! Noisy Top-k gating and the coefficient-of-variation importance loss.
//!
//! Routing logits are `H = x_m·W_gate + ε·softplus(x_m·W_noise)` with
//! `ε ~ N(0,1)` per entry during training and no noise at inference. The
//! gate keeps the k largest logits, softmaxes over them, and zeroes the rest.
//! Per batch, the importance of each expert is the sum over samples of its
//! full-softmax probability of the (noisy) logits; the balancing loss is
//! `CV(importance)² = (Std/Mean)²` with the population (divide-by-N)
//! standard deviation. The dense softmax keeps the gate differentiable even
//! at k = 1, where the routed weight is the constant 1.

use crate::error::{Error, Result};
use crate::rng::Stream;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Trainable gate parameters, both [dim × N_e].
#[derive(Debug, Clone)]
pub struct GateWeights<T: Scalar> {
    pub w_gate: Tensor<T>,
    pub w_noise: Tensor<T>,
}

impl<T: Scalar> GateWeights<T> {
    /// Small random routing weights break expert ties from step 0; the noise
    /// scale starts at zero (softplus(0) ≈ 0.69 logit noise in training).
    pub fn init(dim: usize, num_experts: usize, rng: &mut Stream) -> Self {
        let mut w_gate = Tensor::zeros(&[dim, num_experts]);
        rng.fill_trunc_normal(w_gate.data_mut(), 0.1);
        GateWeights {
            w_gate,
            w_noise: Tensor::zeros(&[dim, num_experts]),
        }
    }

    pub fn num_experts(&self) -> usize {
        self.w_gate.shape()[1]
    }
}

/// Per-sample routing record.
#[derive(Debug, Clone, PartialEq)]
pub struct GateDecision {
    pub clean_logits: Vec<f64>,
    pub noisy_logits: Vec<f64>,
    /// Selected expert indices, sorted by descending logit.
    pub selected: Vec<usize>,
    /// Dense weight vector, zero off the Top-k; sums to 1.
    pub weights: Vec<f64>,
}

impl GateDecision {
    pub fn top1(&self) -> usize {
        self.selected[0]
    }
}

/// Running per-gate sum of gate weight vectors over a batch.
#[derive(Debug, Clone)]
pub struct ImportanceAccumulator {
    sums: Vec<f64>,
    count: usize,
}

impl ImportanceAccumulator {
    pub fn new(num_experts: usize) -> Self {
        ImportanceAccumulator {
            sums: vec![0.0; num_experts],
            count: 0,
        }
    }

    pub fn add(&mut self, decision: &GateDecision) {
        debug_assert_eq!(decision.weights.len(), self.sums.len());
        for (s, w) in self.sums.iter_mut().zip(&decision.weights) {
            *s += w;
        }
        self.count += 1;
    }

    pub fn sums(&self) -> &[f64] {
        &self.sums
    }

    pub fn count(&self) -> usize {
        self.count
    }
}

/// Clean and noisy routing logits for one pooled sample `x_m`.
///
/// In eval mode (`training == false`) the noisy logits equal the clean ones
/// exactly, so inference is deterministic.
pub fn gate_logits<T: Scalar>(
    x_m: &[T],
    gate: &GateWeights<T>,
    training: bool,
    rng: &mut Stream,
) -> Result<(Vec<T>, Vec<T>)> {
    let dim = gate.w_gate.shape()[0];
    if x_m.len() != dim {
        return Err(Error::dim(format!(
            "pooled input has {} entries, gate expects {dim}",
            x_m.len()
        )));
    }
    let ne = gate.num_experts();
    let mut clean = vec![T::zero(); ne];
    crate::tensor::matmul_nn_acc(x_m, gate.w_gate.data(), &mut clean, 1, dim, ne);
    if !training {
        return Ok((clean.clone(), clean));
    }
    let mut raw_noise = vec![T::zero(); ne];
    crate::tensor::matmul_nn_acc(x_m, gate.w_noise.data(), &mut raw_noise, 1, dim, ne);
    let noisy = clean
        .iter()
        .zip(&raw_noise)
        .map(|(&c, &r)| {
            let eps = T::from_f64(rng.normal());
            c + eps * crate::graph::softplus_scalar(r)
        })
        .collect();
    Ok((clean, noisy))
}

/// Top-k indices of `values` by descending value; ties go to the lower index.
pub fn topk_indices<T: Scalar>(values: &[T], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..values.len()).collect();
    idx.sort_by(|&a, &b| {
        values[b]
            .partial_cmp(&values[a])
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.cmp(&b))
    });
    idx.truncate(k);
    idx
}

/// Keep the Top-k noisy logits, softmax over them, zero the rest.
pub fn topk_gate<T: Scalar>(clean: &[T], noisy: &[T], k: usize) -> Result<GateDecision> {
    let ne = noisy.len();
    if k == 0 || k > ne {
        return Err(Error::arg(format!("k = {k} out of range 1..={ne}")));
    }
    let selected = topk_indices(noisy, k);
    let mx = selected
        .iter()
        .map(|&i| noisy[i].as_f64())
        .fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = selected.iter().map(|&i| (noisy[i].as_f64() - mx).exp()).collect();
    let sum: f64 = exps.iter().sum();
    let mut weights = vec![0.0; ne];
    for (&i, e) in selected.iter().zip(&exps) {
        weights[i] = e / sum;
    }
    Ok(GateDecision {
        clean_logits: clean.iter().map(|v| v.as_f64()).collect(),
        noisy_logits: noisy.iter().map(|v| v.as_f64()).collect(),
        selected,
        weights,
    })
}

/// A routed gate inside a recorded forward pass.
#[derive(Debug, Clone)]
pub struct GateTrace {
    pub decision: GateDecision,
    /// Dense gate-weight vector [1×N_e] on the graph (zero off the Top-k).
    pub weights_var: crate::graph::Var,
    /// One length-1 scalar per selected expert, aligned with
    /// `decision.selected`.
    pub selected_weight_vars: Vec<crate::graph::Var>,
    /// Full softmax over all noisy logits [1×N_e] on the graph; the
    /// balancing loss reads its importance through this node.
    pub dense_var: crate::graph::Var,
    /// Values of `dense_var`.
    pub dense_weights: Vec<f64>,
}

/// On-graph noisy Top-k routing for one sample.
///
/// Pools the token stream, computes clean and (in training) noisy logits,
/// selects the Top-k, and softmaxes over the kept entries so gradients flow
/// into `W_gate` (and `W_noise` when the noise path is active).
pub fn route<T: Scalar>(
    binding: &mut crate::bind::Binding<'_, T>,
    prefix: &str,
    gate: &GateWeights<T>,
    x_tokens: crate::graph::Var,
    k: usize,
    training: bool,
    noise: Option<&mut Stream>,
) -> Result<GateTrace> {
    let g = binding.graph;
    let ne = gate.num_experts();
    if k == 0 || k > ne {
        return Err(Error::arg(format!("k = {k} out of range 1..={ne}")));
    }
    let x_m = g.mean_rows(x_tokens)?;
    let w_gate = binding.trainable(&format!("{prefix}.w_gate"), &gate.w_gate);
    let clean = g.matmul(x_m, w_gate)?;
    let noisy = match (training, noise) {
        (true, Some(rng)) => {
            let w_noise = binding.trainable(&format!("{prefix}.w_noise"), &gate.w_noise);
            let raw = g.matmul(x_m, w_noise)?;
            let scale = g.softplus(raw);
            let eps_data: Vec<T> = (0..ne).map(|_| T::from_f64(rng.normal())).collect();
            let eps = Tensor::new(vec![1, ne], eps_data)?;
            g.add(clean, g.mul_const(scale, eps)?)?
        }
        _ => clean,
    };
    let clean_vals = g.value_clone(clean);
    let noisy_vals = g.value_clone(noisy);
    let decision = topk_gate(clean_vals.data(), noisy_vals.data(), k)?;
    let kept = g.gather_cols(noisy, decision.selected.clone())?;
    let kept_weights = g.softmax(kept, 1)?;
    let weights_var = g.scatter_cols(kept_weights, decision.selected.clone(), ne)?;
    let selected_weight_vars = (0..k)
        .map(|slot| g.slice_cols(kept_weights, slot, 1))
        .collect::<Result<Vec<_>>>()?;
    let dense_var = g.softmax(noisy, 1)?;
    let dense_weights = g.value(dense_var).data().iter().map(|v| v.as_f64()).collect();
    Ok(GateTrace {
        decision,
        weights_var,
        selected_weight_vars,
        dense_var,
        dense_weights,
    })
}

/// Elementwise sum of gate weights over a batch of decisions.
pub fn importance(decisions: &[GateDecision]) -> Result<Vec<f64>> {
    let first = decisions
        .first()
        .ok_or_else(|| Error::arg("importance of an empty batch".to_string()))?;
    let mut acc = ImportanceAccumulator::new(first.weights.len());
    for d in decisions {
        acc.add(d);
    }
    Ok(acc.sums().to_vec())
}

/// `CV(imp)² = (population std / mean)²`.
pub fn moe_loss(imp: &[f64]) -> Result<f64> {
    let n = imp.len();
    if n == 0 {
        return Err(Error::arg("empty importance vector".to_string()));
    }
    let mean = imp.iter().sum::<f64>() / n as f64;
    if mean <= 0.0 {
        return Err(Error::numeric(
            "gate importance",
            "all-zero importance: gate is degenerate",
        ));
    }
    let var = imp.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
    Ok(var / (mean * mean))
}

/// Analytic gradient of [`moe_loss`] with respect to each importance entry.
pub fn moe_loss_grad(imp: &[f64]) -> Result<Vec<f64>> {
    let n = imp.len() as f64;
    let mean = imp.iter().sum::<f64>() / n;
    if mean <= 0.0 {
        return Err(Error::numeric(
            "gate importance",
            "all-zero importance: gate is degenerate",
        ));
    }
    let var = imp.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    // d/d imp_e of var/mean²: the variance term and the mean term
    Ok(imp
        .iter()
        .map(|&v| 2.0 * (v - mean) / (n * mean * mean) - 2.0 * var / (n * mean * mean * mean))
        .collect())
}
