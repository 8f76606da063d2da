//! Full model assembly, composite loss, frozen/trainable partition,
//! optimizer, and the training loop.

use std::collections::HashMap;

use crate::adapter::{self, MoEAdapterLayer};
use crate::backbone::{self, PatchEmbed, ViTBlockWeights};
use crate::bind::Binding;
use crate::config::{ModelConfig, RunMode, TrainConfig};
use crate::error::{Error, Result};
use crate::gating::{self, GateTrace};
use crate::graph::{Graph, Var};
use crate::lora::{self, MoELoRALayer};
use crate::metrics::{SampleGateRecord, ScoredBatch};
use crate::rng::Stream;
use crate::scalar::Scalar;
use crate::tensor::{Parameter, Tensor};

/// One transformer block with its trainable side modules.
#[derive(Debug, Clone)]
pub struct BlockModules<T: Scalar> {
    pub vit: ViTBlockWeights<T>,
    pub lora: MoELoRALayer<T>,
    pub adapter: MoEAdapterLayer<T>,
}

/// The complete detector.
#[derive(Debug, Clone)]
pub struct MoEFFDModel<T: Scalar> {
    pub config: ModelConfig,
    pub patch: PatchEmbed<T>,
    pub blocks: Vec<BlockModules<T>>,
    /// Final layer norm before the head, both [D].
    pub ln_f_scale: Tensor<T>,
    pub ln_f_shift: Tensor<T>,
    /// [D × 2]
    pub head_weight: Tensor<T>,
    /// [1 × 2]
    pub head_bias: Tensor<T>,
}

impl<T: Scalar> MoEFFDModel<T> {
    /// Build and initialize from the config's own seed.
    pub fn init(config: &ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = Stream::new(config.seed);
        let patch = PatchEmbed::init(config.patch_size, config.num_tokens(), config.embed_dim, &mut rng);
        let blocks = (0..config.depth)
            .map(|_| BlockModules {
                vit: ViTBlockWeights::init(config.embed_dim, config.hidden_dim, &mut rng),
                lora: MoELoRALayer::init(
                    config.embed_dim,
                    config.hidden_dim,
                    &config.lora_ranks,
                    &mut rng,
                ),
                adapter: MoEAdapterLayer::init(
                    config.embed_dim,
                    config.adapter_mid_channels,
                    &config.adapter_kinds,
                    &mut rng,
                ),
            })
            .collect();
        let head_weight = backbone::trunc_normal_tensor(&[config.embed_dim, 2], &mut rng);
        Ok(MoEFFDModel {
            config: config.clone(),
            patch,
            blocks,
            ln_f_scale: Tensor::full(&[config.embed_dim], T::one()),
            ln_f_shift: Tensor::zeros(&[config.embed_dim]),
            head_weight,
            head_bias: Tensor::zeros(&[1, 2]),
        })
    }

    /// Walk every parameter with its name and frozen flag, in a fixed order.
    pub fn for_each_param(&self, f: &mut impl FnMut(&str, &Tensor<T>, bool)) {
        f("patch.proj", &self.patch.proj, true);
        f("patch.pos", &self.patch.pos, true);
        f("patch.class_token", &self.patch.class_token, true);
        for (i, blk) in self.blocks.iter().enumerate() {
            let v = &blk.vit;
            f(&format!("block{i}.attn.w_q"), &v.w_q, true);
            f(&format!("block{i}.attn.w_k"), &v.w_k, true);
            f(&format!("block{i}.attn.w_v"), &v.w_v, true);
            f(&format!("block{i}.attn.w_o"), &v.w_o, true);
            f(&format!("block{i}.mlp.w1"), &v.mlp_w1, true);
            f(&format!("block{i}.mlp.w2"), &v.mlp_w2, true);
            f(&format!("block{i}.ln1.scale"), &v.ln1_scale, true);
            f(&format!("block{i}.ln1.shift"), &v.ln1_shift, true);
            f(&format!("block{i}.ln2.scale"), &v.ln2_scale, true);
            f(&format!("block{i}.ln2.shift"), &v.ln2_shift, true);
            for (e, ex) in blk.lora.experts.iter().enumerate() {
                let p = format!("block{i}.lora.expert{e}");
                f(&format!("{p}.q_down"), &ex.q_down, false);
                f(&format!("{p}.q_up"), &ex.q_up, false);
                f(&format!("{p}.k_down"), &ex.k_down, false);
                f(&format!("{p}.k_up"), &ex.k_up, false);
                f(&format!("{p}.v_down"), &ex.v_down, false);
                f(&format!("{p}.v_up"), &ex.v_up, false);
            }
            f(&format!("block{i}.lora.gate.w_gate"), &blk.lora.gate.w_gate, false);
            f(&format!("block{i}.lora.gate.w_noise"), &blk.lora.gate.w_noise, false);
            for (e, ex) in blk.adapter.experts.iter().enumerate() {
                let p = format!("block{i}.adapter.expert{e}");
                f(&format!("{p}.conv_down"), &ex.conv_down, false);
                f(&format!("{p}.conv_mid"), &ex.conv_mid, false);
                f(&format!("{p}.conv_up"), &ex.conv_up, false);
            }
            f(
                &format!("block{i}.adapter.gate.w_gate"),
                &blk.adapter.gate.w_gate,
                false,
            );
            f(
                &format!("block{i}.adapter.gate.w_noise"),
                &blk.adapter.gate.w_noise,
                false,
            );
        }
        f("ln_f.scale", &self.ln_f_scale, true);
        f("ln_f.shift", &self.ln_f_shift, true);
        f("head.weight", &self.head_weight, false);
        f("head.bias", &self.head_bias, false);
    }

    /// Mutable variant of [`for_each_param`], same names and order.
    pub fn for_each_param_mut(&mut self, f: &mut impl FnMut(&str, &mut Tensor<T>, bool)) {
        f("patch.proj", &mut self.patch.proj, true);
        f("patch.pos", &mut self.patch.pos, true);
        f("patch.class_token", &mut self.patch.class_token, true);
        for (i, blk) in self.blocks.iter_mut().enumerate() {
            let v = &mut blk.vit;
            f(&format!("block{i}.attn.w_q"), &mut v.w_q, true);
            f(&format!("block{i}.attn.w_k"), &mut v.w_k, true);
            f(&format!("block{i}.attn.w_v"), &mut v.w_v, true);
            f(&format!("block{i}.attn.w_o"), &mut v.w_o, true);
            f(&format!("block{i}.mlp.w1"), &mut v.mlp_w1, true);
            f(&format!("block{i}.mlp.w2"), &mut v.mlp_w2, true);
            f(&format!("block{i}.ln1.scale"), &mut v.ln1_scale, true);
            f(&format!("block{i}.ln1.shift"), &mut v.ln1_shift, true);
            f(&format!("block{i}.ln2.scale"), &mut v.ln2_scale, true);
            f(&format!("block{i}.ln2.shift"), &mut v.ln2_shift, true);
            for (e, ex) in blk.lora.experts.iter_mut().enumerate() {
                let p = format!("block{i}.lora.expert{e}");
                f(&format!("{p}.q_down"), &mut ex.q_down, false);
                f(&format!("{p}.q_up"), &mut ex.q_up, false);
                f(&format!("{p}.k_down"), &mut ex.k_down, false);
                f(&format!("{p}.k_up"), &mut ex.k_up, false);
                f(&format!("{p}.v_down"), &mut ex.v_down, false);
                f(&format!("{p}.v_up"), &mut ex.v_up, false);
            }
            f(&format!("block{i}.lora.gate.w_gate"), &mut blk.lora.gate.w_gate, false);
            f(&format!("block{i}.lora.gate.w_noise"), &mut blk.lora.gate.w_noise, false);
            for (e, ex) in blk.adapter.experts.iter_mut().enumerate() {
                let p = format!("block{i}.adapter.expert{e}");
                f(&format!("{p}.conv_down"), &mut ex.conv_down, false);
                f(&format!("{p}.conv_mid"), &mut ex.conv_mid, false);
                f(&format!("{p}.conv_up"), &mut ex.conv_up, false);
            }
            f(
                &format!("block{i}.adapter.gate.w_gate"),
                &mut blk.adapter.gate.w_gate,
                false,
            );
            f(
                &format!("block{i}.adapter.gate.w_noise"),
                &mut blk.adapter.gate.w_noise,
                false,
            );
        }
        f("ln_f.scale", &mut self.ln_f_scale, true);
        f("ln_f.shift", &mut self.ln_f_shift, true);
        f("head.weight", &mut self.head_weight, false);
        f("head.bias", &mut self.head_bias, false);
    }

    /// (trainable, frozen) scalar counts.
    pub fn count_params(&self) -> (usize, usize) {
        let mut trainable = 0;
        let mut frozen = 0;
        self.for_each_param(&mut |_, t, is_frozen| {
            if is_frozen {
                frozen += t.len();
            } else {
                trainable += t.len();
            }
        });
        (trainable, frozen)
    }

    /// Parameter names split into (trainable, frozen) sets.
    pub fn freeze_partition(&self) -> (Vec<String>, Vec<String>) {
        let mut trainable = Vec::new();
        let mut frozen = Vec::new();
        self.for_each_param(&mut |name, _, is_frozen| {
            if is_frozen {
                frozen.push(name.to_string());
            } else {
                trainable.push(name.to_string());
            }
        });
        (trainable, frozen)
    }
}

/// Gate traces of one sample's forward pass, indexed by block. Empty outside
/// routed (`moe`) mode.
#[derive(Debug, Clone, Default)]
pub struct SampleTrace {
    pub lora: Vec<GateTrace>,
    pub adapter: Vec<GateTrace>,
}

impl SampleTrace {
    pub fn gate_record(&self) -> SampleGateRecord {
        SampleGateRecord {
            lora_top1: self.lora.iter().map(|t| t.decision.top1()).collect(),
            adapter_top1: self.adapter.iter().map(|t| t.decision.top1()).collect(),
        }
    }
}

/// Record one sample's forward pass onto the binding's graph.
/// Returns the [1×2] logit node and the gate traces.
pub fn forward_sample<T: Scalar>(
    model: &MoEFFDModel<T>,
    b: &mut Binding<'_, T>,
    image: &Tensor<T>,
    mode: RunMode,
    training: bool,
    mut noise: Option<&mut Stream>,
) -> Result<(Var, SampleTrace)> {
    let cfg = &model.config;
    let tokens = backbone::patch_embed(image, &model.patch, cfg.patch_size)?;
    let g = b.graph;
    let mut x = b.frozen(&tokens);
    let mut trace = SampleTrace::default();
    for (i, blk) in model.blocks.iter().enumerate() {
        let bv = blk.vit.bind(b);
        let x_ln1 = g.layer_norm(x, bv.ln1_scale, bv.ln1_shift, cfg.layer_norm_eps)?;
        let deltas = if mode == RunMode::BackboneOnly {
            None
        } else {
            let (d, t) = lora::moe_lora_forward(
                b,
                &format!("block{i}.lora"),
                &blk.lora,
                x_ln1,
                cfg.top_k,
                mode,
                training,
                noise.as_deref_mut(),
            )?;
            if let Some(t) = t {
                trace.lora.push(t);
            }
            Some(d)
        };
        let attn = backbone::attention(g, x_ln1, &bv, cfg.heads, deltas)?;
        let x1 = g.add(x, attn)?;
        let x_ln2 = g.layer_norm(x1, bv.ln2_scale, bv.ln2_shift, cfg.layer_norm_eps)?;
        let mlp_out = backbone::mlp(g, x_ln2, &bv)?;
        let mut out = g.add(x1, mlp_out)?;
        if mode != RunMode::BackboneOnly {
            let (delta, t) = adapter::moe_adapter_forward(
                b,
                &format!("block{i}.adapter"),
                &blk.adapter,
                x_ln2,
                cfg.top_k,
                mode,
                training,
                noise.as_deref_mut(),
            )?;
            if let Some(t) = t {
                trace.adapter.push(t);
            }
            out = g.add(out, delta)?;
        }
        x = out;
    }
    let ln_s = b.frozen(&model.ln_f_scale);
    let ln_b = b.frozen(&model.ln_f_shift);
    let x_f = g.layer_norm(x, ln_s, ln_b, cfg.layer_norm_eps)?;
    let class = g.slice_rows(x_f, 0, 1)?;
    let head_w = b.trainable("head.weight", &model.head_weight);
    let head_b = b.trainable("head.bias", &model.head_bias);
    let logits = g.add(g.matmul(class, head_w)?, head_b)?;
    Ok((logits, trace))
}

/// Probability of class 1 from a two-logit row.
pub fn fake_probability(logits: &[f64]) -> f64 {
    let m = logits[0].max(logits[1]);
    let e0 = (logits[0] - m).exp();
    let e1 = (logits[1] - m).exp();
    e1 / (e0 + e1)
}

/// Deterministic inference pass over a labeled set.
pub fn evaluate<T: Scalar>(
    model: &MoEFFDModel<T>,
    samples: &[(Tensor<T>, usize)],
    mode: RunMode,
) -> Result<(ScoredBatch, Vec<SampleGateRecord>)> {
    let mut scores = Vec::with_capacity(samples.len());
    let mut labels = Vec::with_capacity(samples.len());
    let mut records = Vec::new();
    for (image, label) in samples {
        let g = Graph::new();
        let mut b = Binding::inference(&g);
        let (logits, trace) = forward_sample(model, &mut b, image, mode, false, None)?;
        let row: Vec<f64> = g.value(logits).data().iter().map(|v| v.as_f64()).collect();
        scores.push(fake_probability(&row));
        labels.push(*label);
        if mode == RunMode::Moe {
            records.push(trace.gate_record());
        }
    }
    Ok((ScoredBatch::new(scores, labels)?, records))
}

/// Mean cross-entropy plus λ times the summed per-gate balancing loss.
///
/// `gate_weights[gate][sample]` is that sample's dense gate-weight vector.
pub fn total_loss(
    logits: &[Vec<f64>],
    labels: &[usize],
    gate_weights: &[Vec<Vec<f64>>],
    lambda: f64,
) -> Result<f64> {
    if logits.len() != labels.len() || logits.is_empty() {
        return Err(Error::arg(format!(
            "{} logit rows vs {} labels",
            logits.len(),
            labels.len()
        )));
    }
    let mut ce = 0.0;
    for (row, &label) in logits.iter().zip(labels) {
        if label > 1 {
            return Err(Error::arg(format!("label {label} not in {{0, 1}}")));
        }
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = m + row.iter().map(|z| (z - m).exp()).sum::<f64>().ln();
        ce += lse - row[label];
    }
    ce /= logits.len() as f64;
    let mut moe = 0.0;
    for per_gate in gate_weights {
        let mut imp = vec![0.0; per_gate.first().map(|w| w.len()).unwrap_or(0)];
        for w in per_gate {
            for (a, b) in imp.iter_mut().zip(w) {
                *a += b;
            }
        }
        moe += gating::moe_loss(&imp)?;
    }
    Ok(ce + lambda * moe)
}

// ── optimizer ────────────────────────────────────────────────────────

/// Per-parameter Adam moments; `t` counts the updates this tensor received.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamSlot<T: Scalar> {
    pub m: Tensor<T>,
    pub v: Tensor<T>,
    pub t: u64,
}

#[derive(Debug, Clone, Default)]
pub struct AdamState<T: Scalar> {
    pub slots: HashMap<String, AdamSlot<T>>,
}

impl<T: Scalar> AdamState<T> {
    pub fn new() -> Self {
        AdamState {
            slots: HashMap::new(),
        }
    }
}

/// Learning rate by parameter group: gate tensors get `lr_gate`, the
/// classification head `lr_head`, every other trainable tensor `lr_other`.
/// The head group exists because the frozen backbone's class feature varies
/// little across inputs, so the head needs far larger weights than the
/// experts to reach useful logit ranges.
pub fn learning_rate_for(name: &str, tc: &TrainConfig) -> f64 {
    if name.contains(".gate.") {
        tc.lr_gate
    } else if name.starts_with("head.") {
        tc.lr_head
    } else {
        tc.lr_other
    }
}

/// One bias-corrected Adam update over every gradient present. Frozen
/// parameters never receive updates; parameters without a gradient this step
/// keep their moments untouched.
pub fn adam_step<T: Scalar>(
    model: &mut MoEFFDModel<T>,
    grads: &HashMap<String, Tensor<T>>,
    state: &mut AdamState<T>,
    tc: &TrainConfig,
) -> Result<()> {
    for (name, g) in grads {
        if !g.all_finite() {
            return Err(Error::numeric(name, "non-finite gradient"));
        }
    }
    let mut applied = 0usize;
    let mut result = Ok(());
    model.for_each_param_mut(&mut |name, value, frozen| {
        if frozen || result.is_err() {
            return;
        }
        let Some(grad) = grads.get(name) else {
            return;
        };
        if grad.shape() != value.shape() {
            result = Err(Error::dim(format!(
                "gradient {:?} vs parameter `{name}` {:?}",
                grad.shape(),
                value.shape()
            )));
            return;
        }
        let slot = state.slots.entry(name.to_string()).or_insert_with(|| AdamSlot {
            m: Tensor::zeros(value.shape()),
            v: Tensor::zeros(value.shape()),
            t: 0,
        });
        slot.t += 1;
        let lr = T::from_f64(learning_rate_for(name, tc));
        let b1 = T::from_f64(tc.beta1);
        let b2 = T::from_f64(tc.beta2);
        let eps = T::from_f64(tc.adam_eps);
        let one = T::one();
        let bc1 = one - T::from_f64(tc.beta1.powi(slot.t as i32));
        let bc2 = one - T::from_f64(tc.beta2.powi(slot.t as i32));
        for i in 0..value.len() {
            let gi = grad.data()[i];
            let m = b1 * slot.m.data()[i] + (one - b1) * gi;
            let v = b2 * slot.v.data()[i] + (one - b2) * gi * gi;
            slot.m.data_mut()[i] = m;
            slot.v.data_mut()[i] = v;
            let mhat = m / bc1;
            let vhat = v / bc2;
            value.data_mut()[i] = value.data()[i] - lr * mhat / (vhat.sqrt() + eps);
        }
        applied += 1;
    });
    result?;
    if applied != grads.len() {
        return Err(Error::arg(format!(
            "{} gradients did not match any trainable parameter",
            grads.len() - applied
        )));
    }
    Ok(())
}

/// Batch loss and its gradients on every bound trainable parameter, without
/// touching the optimizer. With `training` off the gates route on clean
/// logits and `noise` is unused.
pub fn batch_loss_grads<T: Scalar>(
    model: &MoEFFDModel<T>,
    batch: &[(Tensor<T>, usize)],
    mode: RunMode,
    training: bool,
    mut noise: Option<&mut Stream>,
) -> Result<(BatchStats, HashMap<String, Tensor<T>>)> {
    if batch.is_empty() {
        return Err(Error::arg("empty batch".to_string()));
    }
    let lambda = model.config.lambda_moe;
    let g = Graph::new();
    let mut b = Binding::training(&g);
    let mut ces = Vec::with_capacity(batch.len());
    let mut traces = Vec::with_capacity(batch.len());
    for (image, label) in batch {
        let (logits, trace) =
            forward_sample(model, &mut b, image, mode, training, noise.as_deref_mut())?;
        ces.push(g.cross_entropy(logits, *label)?);
        traces.push(trace);
    }
    let inv_b = 1.0 / batch.len() as f64;
    let mut seeds: Vec<(Var, Tensor<T>)> = ces
        .iter()
        .map(|&ce| (ce, Tensor::scalar(T::from_f64(inv_b))))
        .collect();
    let ce_value: f64 = ces.iter().map(|&c| g.scalar_value(c).as_f64()).sum::<f64>() * inv_b;
    let mut moe_value = 0.0;
    if mode == RunMode::Moe {
        // the balancing loss couples samples through per-gate importance
        // sums over the full-softmax probabilities; its gradient enters as
        // extra seeds on each sample's dense softmax node, which keeps the
        // gate trainable even at k = 1 where the routed weight is constant
        let depth = model.config.depth;
        for gate_idx in 0..2 * depth {
            fn pick_gate(t: &SampleTrace, gate_idx: usize, depth: usize) -> &GateTrace {
                if gate_idx < depth {
                    &t.lora[gate_idx]
                } else {
                    &t.adapter[gate_idx - depth]
                }
            }
            let ne = pick_gate(&traces[0], gate_idx, depth).dense_weights.len();
            let mut imp = vec![0.0; ne];
            for t in &traces {
                for (a, w) in imp.iter_mut().zip(&pick_gate(t, gate_idx, depth).dense_weights) {
                    *a += w;
                }
            }
            moe_value += gating::moe_loss(&imp)?;
            if lambda > 0.0 {
                let grad = gating::moe_loss_grad(&imp)?;
                let seed_data: Vec<T> = grad.iter().map(|&v| T::from_f64(lambda * v)).collect();
                let seed = Tensor::new(vec![1, ne], seed_data)?;
                for t in &traces {
                    seeds.push((pick_gate(t, gate_idx, depth).dense_var, seed.clone()));
                }
            }
        }
    }
    let moe_weighted = lambda * moe_value;
    let loss = ce_value + moe_weighted;
    if !loss.is_finite() {
        return Err(Error::numeric(
            "training loss",
            format!("non-finite batch loss {loss} (ce {ce_value}, moe {moe_value})"),
        ));
    }
    let mut grads_by_var = g.backward(seeds)?;
    let mut grads: HashMap<String, Tensor<T>> = HashMap::new();
    for (name, var) in b.bound() {
        if let Some(grad) = grads_by_var.take(var) {
            grads.insert(name.clone(), grad);
        }
    }
    Ok((
        BatchStats {
            loss,
            ce: ce_value,
            moe_weighted,
        },
        grads,
    ))
}

/// Central-finite-difference check of the batch loss against the analytic
/// gradients, on a seeded coordinate sample per trainable parameter. Gate
/// noise is off so the loss is deterministic; parameters the pass never
/// binds (such as noise weights) are skipped.
pub fn model_gradcheck(
    model: &MoEFFDModel<f64>,
    batch: &[(Tensor<f64>, usize)],
    mode: RunMode,
    eps: &[f64],
    max_coords_per_param: Option<usize>,
    coord_seed: u64,
) -> Result<crate::gradcheck::GradCheckReport> {
    let (_, analytic) = batch_loss_grads(model, batch, mode, false, None)?;
    let mut params: Vec<Parameter<f64>> = Vec::new();
    model.for_each_param(&mut |name, t, frozen| {
        if !frozen {
            params.push(Parameter::new(name, t.clone(), false));
        }
    });
    let mut f = |ps: &[Parameter<f64>]| -> Result<f64> {
        let mut m = model.clone();
        let by_name: HashMap<&str, &Tensor<f64>> =
            ps.iter().map(|p| (p.name.as_str(), &p.value)).collect();
        m.for_each_param_mut(&mut |name, value, _| {
            if let Some(t) = by_name.get(name) {
                *value = (*t).clone();
            }
        });
        Ok(batch_loss_grads(&m, batch, mode, false, None)?.0.loss)
    };
    crate::gradcheck::finite_difference_gradcheck(
        &mut f,
        &mut params,
        &analytic,
        eps,
        max_coords_per_param,
        coord_seed,
    )
}

// ── training loop ────────────────────────────────────────────────────

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub mean_loss: f64,
    pub mean_ce: f64,
    /// Mean of λ·Σ_gates CV² across the epoch's batches.
    pub mean_moe_weighted: f64,
}

#[derive(Debug, Clone, Default, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct TrainingReport {
    pub epochs: Vec<EpochRecord>,
}

/// Owns the model and everything stateful about optimization.
#[derive(Debug)]
pub struct Trainer<T: Scalar> {
    pub model: MoEFFDModel<T>,
    pub train_cfg: TrainConfig,
    pub mode: RunMode,
    pub adam: AdamState<T>,
    pub data_rng: Stream,
    pub noise_rng: Stream,
    pub epoch: usize,
}

/// Loss components of one optimized batch.
#[derive(Debug, Clone, Copy)]
pub struct BatchStats {
    pub loss: f64,
    pub ce: f64,
    pub moe_weighted: f64,
}

impl<T: Scalar> Trainer<T> {
    pub fn new(model: MoEFFDModel<T>, train_cfg: TrainConfig, mode: RunMode) -> Self {
        let base = Stream::new(train_cfg.seed);
        Trainer {
            model,
            train_cfg,
            mode,
            adam: AdamState::new(),
            data_rng: base.derive(1),
            noise_rng: base.derive(2),
            epoch: 0,
        }
    }

    /// Forward, backward, and Adam update for one batch.
    pub fn train_batch(&mut self, batch: &[(Tensor<T>, usize)]) -> Result<BatchStats> {
        let (stats, grads) = batch_loss_grads(
            &self.model,
            batch,
            self.mode,
            true,
            Some(&mut self.noise_rng),
        )?;
        adam_step(&mut self.model, &grads, &mut self.adam, &self.train_cfg)?;
        Ok(stats)
    }

    /// Shuffle, batch, and optimize for `epochs` epochs.
    pub fn run_epochs(
        &mut self,
        train: &[(Tensor<T>, usize)],
        epochs: usize,
    ) -> Result<TrainingReport> {
        if train.is_empty() && epochs > 0 {
            return Err(Error::arg("empty training set".to_string()));
        }
        let mut report = TrainingReport::default();
        for _ in 0..epochs {
            let mut order: Vec<usize> = (0..train.len()).collect();
            self.data_rng.shuffle(&mut order);
            let mut sums = (0.0, 0.0, 0.0);
            let mut batches = 0;
            for chunk in order.chunks(self.train_cfg.batch_size) {
                let batch: Vec<(Tensor<T>, usize)> =
                    chunk.iter().map(|&i| train[i].clone()).collect();
                let stats = self.train_batch(&batch).map_err(|e| {
                    Error::numeric(
                        "training",
                        format!("epoch {} batch {batches}: {e}", self.epoch),
                    )
                })?;
                sums.0 += stats.loss;
                sums.1 += stats.ce;
                sums.2 += stats.moe_weighted;
                batches += 1;
            }
            self.epoch += 1;
            report.epochs.push(EpochRecord {
                epoch: self.epoch,
                mean_loss: sums.0 / batches as f64,
                mean_ce: sums.1 / batches as f64,
                mean_moe_weighted: sums.2 / batches as f64,
            });
        }
        Ok(report)
    }
}
