//! Mixture of low-rank experts producing additive deltas for the frozen
//! Q/K/V projections.
//!
//! Each expert holds a `W_down`/`W_up` pair per projection; the delta is
//! `x·W_down·W_up`, always computed through the rank bottleneck. One gate per
//! layer routes a sample jointly for Q, K, and V.

use crate::bind::Binding;
use crate::config::RunMode;
use crate::error::{Error, Result};
use crate::gating::{self, GateTrace, GateWeights};
use crate::graph::Var;
use crate::rng::Stream;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Which attention projection a delta feeds.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Proj {
    Q,
    K,
    V,
}

impl Proj {
    pub const ALL: [Proj; 3] = [Proj::Q, Proj::K, Proj::V];

    pub fn name(self) -> &'static str {
        match self {
            Proj::Q => "q",
            Proj::K => "k",
            Proj::V => "v",
        }
    }
}

/// One low-rank expert: three `W_down` [D×r] / `W_up` [r×dim] pairs.
#[derive(Debug, Clone)]
pub struct LoRAExpert<T: Scalar> {
    pub rank: usize,
    pub q_down: Tensor<T>,
    pub q_up: Tensor<T>,
    pub k_down: Tensor<T>,
    pub k_up: Tensor<T>,
    pub v_down: Tensor<T>,
    pub v_up: Tensor<T>,
}

impl<T: Scalar> LoRAExpert<T> {
    /// Down matrices start truncated-normal, up matrices at zero, so the
    /// model begins exactly at the frozen baseline.
    pub fn init(embed_dim: usize, hidden_dim: usize, rank: usize, rng: &mut Stream) -> Self {
        let down = |rng: &mut Stream| {
            crate::backbone::trunc_normal_tensor(&[embed_dim, rank], rng)
        };
        LoRAExpert {
            rank,
            q_down: down(rng),
            q_up: Tensor::zeros(&[rank, hidden_dim]),
            k_down: down(rng),
            k_up: Tensor::zeros(&[rank, hidden_dim]),
            v_down: down(rng),
            v_up: Tensor::zeros(&[rank, hidden_dim]),
        }
    }

    pub fn pair(&self, proj: Proj) -> (&Tensor<T>, &Tensor<T>) {
        match proj {
            Proj::Q => (&self.q_down, &self.q_up),
            Proj::K => (&self.k_down, &self.k_up),
            Proj::V => (&self.v_down, &self.v_up),
        }
    }

    pub fn param_count(&self) -> usize {
        let (d, dim) = (self.q_down.rows(), self.q_up.cols());
        3 * self.rank * (d + dim)
    }
}

/// All low-rank experts of one block plus their shared gate.
#[derive(Debug, Clone)]
pub struct MoELoRALayer<T: Scalar> {
    pub experts: Vec<LoRAExpert<T>>,
    pub gate: GateWeights<T>,
}

impl<T: Scalar> MoELoRALayer<T> {
    pub fn init(embed_dim: usize, hidden_dim: usize, ranks: &[usize], rng: &mut Stream) -> Self {
        let experts = ranks
            .iter()
            .map(|&r| LoRAExpert::init(embed_dim, hidden_dim, r, rng))
            .collect();
        MoELoRALayer {
            experts,
            gate: GateWeights::init(embed_dim, ranks.len(), rng),
        }
    }
}

/// `delta = x · W_down · W_up` for one expert and projection.
pub fn lora_expert_forward<T: Scalar>(
    b: &mut Binding<'_, T>,
    prefix: &str,
    expert: &LoRAExpert<T>,
    proj: Proj,
    x: Var,
) -> Result<Var> {
    let (down, up) = expert.pair(proj);
    let p = proj.name();
    let down_v = b.trainable(&format!("{prefix}.{p}_down"), down);
    let up_v = b.trainable(&format!("{prefix}.{p}_up"), up);
    let mid = b.graph.matmul(x, down_v)?;
    b.graph.matmul(mid, up_v)
}

/// Routed Q/K/V deltas for one sample.
///
/// Under Top-k routing only the selected experts are evaluated; each delta is
/// the gate-weighted sum of their outputs. `multi_experts` sums every expert
/// unweighted; `single_expert` pins the route. `backbone_only` is not valid
/// here: the caller skips the layer entirely.
pub fn moe_lora_forward<T: Scalar>(
    b: &mut Binding<'_, T>,
    prefix: &str,
    layer: &MoELoRALayer<T>,
    x: Var,
    k: usize,
    mode: RunMode,
    training: bool,
    noise: Option<&mut Stream>,
) -> Result<([Var; 3], Option<GateTrace>)> {
    let weighted = |b: &mut Binding<'_, T>, pairs: &[(usize, Option<Var>)]| -> Result<[Var; 3]> {
        let mut deltas = [None, None, None];
        for (slot, proj) in Proj::ALL.iter().enumerate() {
            let mut acc: Option<Var> = None;
            for &(e, weight) in pairs {
                let eprefix = format!("{prefix}.expert{e}");
                let mut out = lora_expert_forward(b, &eprefix, &layer.experts[e], *proj, x)?;
                if let Some(w) = weight {
                    out = b.graph.scale_by(out, w)?;
                }
                acc = Some(match acc {
                    Some(a) => b.graph.add(a, out)?,
                    None => out,
                });
            }
            deltas[slot] = acc;
        }
        Ok([deltas[0].unwrap(), deltas[1].unwrap(), deltas[2].unwrap()])
    };
    match mode {
        RunMode::Moe => {
            let trace = gating::route(
                b,
                &format!("{prefix}.gate"),
                &layer.gate,
                x,
                k,
                training,
                noise,
            )?;
            let pairs: Vec<(usize, Option<Var>)> = trace
                .decision
                .selected
                .iter()
                .zip(&trace.selected_weight_vars)
                .map(|(&e, &w)| (e, Some(w)))
                .collect();
            Ok((weighted(b, &pairs)?, Some(trace)))
        }
        RunMode::MultiExperts => {
            let pairs: Vec<(usize, Option<Var>)> =
                (0..layer.experts.len()).map(|e| (e, None)).collect();
            Ok((weighted(b, &pairs)?, None))
        }
        RunMode::SingleExpert(id) => {
            if id >= layer.experts.len() {
                return Err(Error::arg(format!(
                    "expert {id} out of {}",
                    layer.experts.len()
                )));
            }
            Ok((weighted(b, &[(id, None)])?, None))
        }
        RunMode::BackboneOnly => Err(Error::arg(
            "backbone_only mode has no expert layers".to_string(),
        )),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::Graph;

    fn random_tokens(n: usize, d: usize, rng: &mut Stream) -> Tensor<f64> {
        let data: Vec<f64> = (0..n * d).map(|_| rng.uniform(-1.0, 1.0)).collect();
        Tensor::new(vec![n, d], data).unwrap()
    }

    #[test]
    fn zero_up_matrix_gives_zero_delta() {
        let mut rng = Stream::new(1);
        let e = LoRAExpert::<f64>::init(8, 8, 2, &mut rng);
        let g = Graph::new();
        let mut b = Binding::inference(&g);
        let x = g.constant(random_tokens(5, 8, &mut rng));
        let d = lora_expert_forward(&mut b, "t", &e, Proj::Q, x).unwrap();
        assert_eq!(*g.value(d), Tensor::zeros(&[5, 8]));
    }

    #[test]
    fn expert_forward_is_linear_in_x() {
        let mut rng = Stream::new(2);
        let mut e = LoRAExpert::<f64>::init(6, 6, 2, &mut rng);
        e.v_up = crate::backbone::trunc_normal_tensor(&[2, 6], &mut rng);
        let x = random_tokens(4, 6, &mut rng);
        let g = Graph::new();
        let mut b = Binding::inference(&g);
        let xv = g.constant(x.clone());
        let x2 = g.constant(x.scale(2.0));
        let d1 = lora_expert_forward(&mut b, "t", &e, Proj::V, xv).unwrap();
        let d2 = lora_expert_forward(&mut b, "t", &e, Proj::V, x2).unwrap();
        for (a, bb) in g.value(d1).data().iter().zip(g.value(d2).data()) {
            assert!((2.0 * a - bb).abs() <= 1e-12);
        }
    }

    #[test]
    fn bottleneck_matches_materialized_product() {
        let mut rng = Stream::new(3);
        let mut e = LoRAExpert::<f64>::init(8, 8, 2, &mut rng);
        e.q_up = crate::backbone::trunc_normal_tensor(&[2, 8], &mut rng);
        let x = random_tokens(5, 8, &mut rng);
        let g = Graph::new();
        let mut b = Binding::inference(&g);
        let xv = g.constant(x.clone());
        let d = lora_expert_forward(&mut b, "t", &e, Proj::Q, xv).unwrap();
        let full = crate::tensor::matmul(&e.q_down, &e.q_up).unwrap();
        let expect = crate::tensor::matmul(&x, &full).unwrap();
        for (a, ex) in g.value(d).data().iter().zip(expect.data()) {
            assert!((a - ex).abs() <= 1e-12);
        }
    }

    #[test]
    fn single_expert_mode_uses_exactly_that_expert() {
        let mut rng = Stream::new(4);
        let mut layer = MoELoRALayer::<f64>::init(6, 6, &[1, 2], &mut rng);
        for e in &mut layer.experts {
            e.q_up = crate::backbone::trunc_normal_tensor(&[e.rank, 6], &mut rng);
        }
        let x = random_tokens(4, 6, &mut rng);
        let g = Graph::new();
        let mut b = Binding::inference(&g);
        let xv = g.constant(x.clone());
        let ([dq, _, _], trace) = moe_lora_forward(
            &mut b,
            "l",
            &layer,
            xv,
            1,
            RunMode::SingleExpert(1),
            false,
            None,
        )
        .unwrap();
        assert!(trace.is_none());
        let g2 = Graph::new();
        let mut b2 = Binding::inference(&g2);
        let xv2 = g2.constant(x);
        let direct =
            lora_expert_forward(&mut b2, "l.expert1", &layer.experts[1], Proj::Q, xv2).unwrap();
        assert_eq!(*g.value(dq), *g2.value(direct));
    }

    #[test]
    fn moe_mode_records_a_gate_trace() {
        let mut rng = Stream::new(5);
        let layer = MoELoRALayer::<f64>::init(6, 6, &[1, 2, 3], &mut rng);
        let g = Graph::new();
        let mut b = Binding::inference(&g);
        let xv = g.constant(random_tokens(4, 6, &mut rng));
        let (_, trace) =
            moe_lora_forward(&mut b, "l", &layer, xv, 2, RunMode::Moe, false, None).unwrap();
        let trace = trace.unwrap();
        assert_eq!(trace.decision.selected.len(), 2);
        let sum: f64 = trace.decision.weights.iter().sum();
        assert!((sum - 1.0).abs() <= 1e-12);
    }

    #[test]
    fn expert_param_count_closed_form() {
        let mut rng = Stream::new(6);
        let e = LoRAExpert::<f64>::init(16, 16, 4, &mut rng);
        assert_eq!(e.param_count(), 3 * 4 * 32);
        let walked = e.q_down.len()
            + e.q_up.len()
            + e.k_down.len()
            + e.k_up.len()
            + e.v_down.len()
            + e.v_up.len();
        assert_eq!(e.param_count(), walked);
    }
}
