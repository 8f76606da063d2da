//! Built-in self-check suites behind the `verify` command. The integration
//! tests carry the authoritative, fully independent oracles; these checks
//! are a fast on-demand subset runnable from any installed binary.

use crate::checkpoint;
use crate::config::{ModelConfig, RunConfig, RunMode, TrainConfig};
use crate::data;
use crate::diffconv::{self, DiffConvKind};
use crate::error::Result;
use crate::gating;
use crate::metrics::{self, ScoredBatch};
use crate::model::{model_gradcheck, MoEFFDModel, Trainer};
use crate::rng::Stream;
use crate::tensor::Tensor;

#[derive(Debug, Clone)]
pub struct CheckResult {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

fn run_check(name: &'static str, f: impl FnOnce() -> Result<String>) -> CheckResult {
    match f() {
        Ok(detail) => CheckResult {
            name,
            passed: true,
            detail,
        },
        Err(e) => CheckResult {
            name,
            passed: false,
            detail: e.to_string(),
        },
    }
}

fn fail(msg: String) -> crate::error::Error {
    crate::error::Error::numeric("verify", msg)
}

/// Per-pixel difference convolution computed one output value at a time
/// through `sample_xhat`, independent of the plane-sweep forward pass.
fn naive_diff_conv(x: &Tensor<f64>, w: &Tensor<f64>, kind: DiffConvKind) -> Result<Tensor<f64>> {
    let (cin, h, wid) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let cout = w.shape()[0];
    let mut out = Tensor::zeros(&[cout, h, wid]);
    for co in 0..cout {
        for i in 0..h {
            for j in 0..wid {
                let mut acc = 0.0;
                for ci in 0..cin {
                    for p in 0..9 {
                        let wv = w.data()[((co * cin + ci) * 3 + p / 3) * 3 + p % 3];
                        // the center slot multiplies the raw pixel in every kind
                        let xhat = if p == 4 {
                            x.data()[(ci * h + i) * wid + j]
                        } else {
                            diffconv::sample_xhat(x, (ci, i, j), p, kind)?
                        };
                        acc += wv * xhat;
                    }
                }
                out.data_mut()[(co * h + i) * wid + j] = acc;
            }
        }
    }
    Ok(out)
}

fn check_diffconv() -> Result<String> {
    let mut rng = Stream::new(41);
    let mut max_err = 0.0f64;
    for kind in DiffConvKind::ALL {
        for _ in 0..10 {
            let cin = 1 + rng.below(3);
            let cout = 1 + rng.below(3);
            let h = 3 + rng.below(4);
            let wd = 3 + rng.below(4);
            let mut x = Tensor::zeros(&[cin, h, wd]);
            for v in x.data_mut() {
                *v = rng.uniform(-1.0, 1.0);
            }
            let mut w = Tensor::zeros(&[cout, cin, 3, 3]);
            for v in w.data_mut() {
                *v = rng.uniform(-1.0, 1.0);
            }
            let fast = diffconv::forward(&x, &w, kind)?;
            let slow = naive_diff_conv(&x, &w, kind)?;
            for (a, b) in fast.data().iter().zip(slow.data()) {
                max_err = max_err.max((a - b).abs());
            }
        }
    }
    if max_err > 1e-9 {
        return Err(fail(format!("diffconv vs per-pixel oracle: err {max_err:e}")));
    }
    Ok(format!("50 cases, max abs err {max_err:e}"))
}

fn check_gating() -> Result<String> {
    let mut rng = Stream::new(43);
    for case in 0..200 {
        let ne = 2 + rng.below(5);
        let k = 1 + rng.below(ne);
        let logits: Vec<f64> = (0..ne).map(|_| rng.uniform(-3.0, 3.0)).collect();
        let gw = gating::topk_gate(&logits, &logits, k)?;
        let sum: f64 = gw.weights.iter().sum();
        if (sum - 1.0).abs() > 1e-9 {
            return Err(fail(format!("case {case}: weights sum {sum}")));
        }
        let nonzero = gw.weights.iter().filter(|&&w| w != 0.0).count();
        if nonzero != k.min(ne) {
            return Err(fail(format!("case {case}: {nonzero} nonzero, k = {k}")));
        }
        let min_sel = gw
            .selected
            .iter()
            .map(|&i| logits[i])
            .fold(f64::INFINITY, f64::min);
        let max_unsel = (0..ne)
            .filter(|i| !gw.selected.contains(i))
            .map(|i| logits[i])
            .fold(f64::NEG_INFINITY, f64::max);
        if min_sel < max_unsel {
            return Err(fail(format!("case {case}: non-maximal selection")));
        }
        if k == ne {
            // dense dispatch equals a full softmax
            let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = logits.iter().map(|l| (l - m).exp()).sum();
            for (i, &w) in gw.weights.iter().enumerate() {
                let dense = (logits[i] - m).exp() / z;
                if (w - dense).abs() > 1e-12 {
                    return Err(fail(format!("case {case}: sparse vs dense {w} vs {dense}")));
                }
            }
        }
    }
    let uniform = gating::moe_loss(&[2.0, 2.0, 2.0])?;
    let pair = gating::moe_loss(&[1.0, 3.0])?;
    if uniform.abs() > 1e-12 || (pair - 0.25).abs() > 1e-15 {
        return Err(fail(format!("moe_loss anchors: {uniform}, {pair}")));
    }
    Ok("200 random routings plus balancing-loss anchors".to_string())
}

fn check_metrics() -> Result<String> {
    let mut rng = Stream::new(44);
    for case in 0..20 {
        let n = 30;
        let scores: Vec<f64> = (0..n).map(|_| (rng.next_f64() * 8.0).floor() / 8.0).collect();
        let mut labels: Vec<usize> = (0..n).map(|i| i % 2).collect();
        rng.shuffle(&mut labels);
        let b = ScoredBatch::new(scores, labels)?;
        let fast = metrics::auc(&b)?;
        let mut num = 0.0;
        let mut den = 0.0;
        for i in 0..n {
            for j in 0..n {
                if b.labels[i] == 1 && b.labels[j] == 0 {
                    den += 1.0;
                    if b.scores[i] > b.scores[j] {
                        num += 1.0;
                    } else if b.scores[i] == b.scores[j] {
                        num += 0.5;
                    }
                }
            }
        }
        if (fast - num / den).abs() > 1e-12 {
            return Err(fail(format!("case {case}: auc {fast} vs pairs {}", num / den)));
        }
        let e = metrics::eer(&b)?;
        if !(0.0..=1.0).contains(&e) {
            return Err(fail(format!("case {case}: eer {e} outside [0,1]")));
        }
    }
    let sep = ScoredBatch::new(vec![0.1, 0.2, 0.8, 0.9], vec![0, 0, 1, 1])?;
    if metrics::auc(&sep)? != 1.0 || metrics::eer(&sep)? != 0.0 {
        return Err(fail("perfect separator anchors".to_string()));
    }
    Ok("20 batches vs pair-counting oracle".to_string())
}

/// Tiny f64 model with every trainable tensor pushed off its init value:
/// gates off zero so routing is stable under perturbation, up-projections
/// off zero so their gradients rise above finite-difference noise.
fn gradcheck_model(config: &ModelConfig) -> Result<MoEFFDModel<f64>> {
    let mut model = MoEFFDModel::init(config)?;
    let mut rng = Stream::new(config.seed ^ 0x5eed);
    model.for_each_param_mut(&mut |name, t, frozen| {
        if frozen {
            return;
        }
        let std = if name.contains(".gate.w_gate") { 0.5 } else { 0.1 };
        rng.fill_normal(t.data_mut(), std);
    });
    Ok(model)
}

fn gradcheck_batch(config: &ModelConfig, n: usize) -> Vec<(Tensor<f64>, usize)> {
    let mut rng = Stream::new(91);
    (0..n)
        .map(|i| {
            let shape = vec![3, config.image_size, config.image_size];
            let mut t = Tensor::zeros(&shape);
            for v in t.data_mut() {
                *v = rng.uniform(0.0, 1.0);
            }
            (t, i % 2)
        })
        .collect()
}

fn check_gradients(coords: usize, depth: usize) -> Result<String> {
    let mut config = ModelConfig::tiny(7);
    config.depth = depth;
    let model = gradcheck_model(&config)?;
    let batch = gradcheck_batch(&config, 2);
    let report = model_gradcheck(
        &model,
        &batch,
        RunMode::Moe,
        &[1e-2, 3e-3, 1e-3, 1e-4],
        Some(coords),
        17,
    )?;
    if report.max_rel_err > 1e-5 {
        let worst = report
            .worst
            .map(|(n, c)| format!("{n}[{c}]"))
            .unwrap_or_default();
        return Err(fail(format!(
            "rel err {:e} at {worst}",
            report.max_rel_err
        )));
    }
    Ok(format!(
        "{} coords, max rel err {:e}",
        report.coords_checked, report.max_rel_err
    ))
}

fn check_checkpoint() -> Result<String> {
    let rc = RunConfig {
        model: ModelConfig::tiny(3),
        train: TrainConfig {
            epochs: 1,
            batch_size: 2,
            ..TrainConfig::desk(5)
        },
        train_data: None,
        test_data: None,
        out_dir: None,
        mode: "moe".to_string(),
    };
    let model = MoEFFDModel::<f64>::init(&rc.model)?;
    let mut tr = Trainer::new(model, rc.train.clone(), RunMode::Moe);
    let batch = gradcheck_batch(&rc.model, 2);
    tr.train_batch(&batch)?;
    let bytes = checkpoint::encode(&tr, &rc)?;
    let (tr2, rc2) = checkpoint::decode::<f64>(&bytes)?;
    let bytes2 = checkpoint::encode(&tr2, &rc2)?;
    if bytes != bytes2 {
        return Err(fail("re-encoded checkpoint differs".to_string()));
    }
    Ok(format!("{} bytes round-tripped exactly", bytes.len()))
}

fn check_data_determinism() -> Result<String> {
    let a = data::generate_dataset(4, 4, 16, 16, 77)?;
    let b = data::generate_dataset(4, 4, 16, 16, 77)?;
    for (x, y) in a.iter().zip(&b) {
        if x.image.data() != y.image.data() || x.label != y.label {
            return Err(fail(format!("sample {} differs across runs", x.sample_id)));
        }
    }
    let spec = data::PerturbationSpec::new(data::PerturbKind::GaussianNoise, 3)?;
    let p1 = data::perturb(&a[0].image, spec, 5)?;
    let p2 = data::perturb(&a[0].image, spec, 5)?;
    if p1.data() != p2.data() {
        return Err(fail("perturbation not deterministic".to_string()));
    }
    Ok("8 samples and a perturbation reproduced exactly".to_string())
}

fn check_training_smoke() -> Result<String> {
    let mc = ModelConfig::tiny(11);
    let tc = TrainConfig {
        epochs: 3,
        batch_size: 8,
        ..TrainConfig::desk(11)
    };
    let samples = data::generate_dataset(12, 12, 16, 16, 123)?;
    let set: Vec<(Tensor<f32>, usize)> = samples
        .iter()
        .map(|s| (s.image.cast::<f32>(), s.label))
        .collect();
    let model = MoEFFDModel::<f32>::init(&mc)?;
    let mut tr = Trainer::new(model, tc, RunMode::Moe);
    let report = tr.run_epochs(&set, 3)?;
    let first = report.epochs.first().unwrap().mean_loss;
    let last = report.epochs.last().unwrap().mean_loss;
    if !(last < first) {
        return Err(fail(format!("loss did not fall: {first} -> {last}")));
    }
    Ok(format!("mean loss {first:.4} -> {last:.4} over 3 epochs"))
}

/// Quick suite: oracles and invariants that finish in seconds.
pub fn fast_checks() -> Vec<CheckResult> {
    vec![
        run_check("diffconv_per_pixel_oracle", check_diffconv),
        run_check("gating_invariants", check_gating),
        run_check("metrics_oracles", check_metrics),
        run_check("tiny_model_gradcheck", || check_gradients(2, 1)),
        run_check("checkpoint_round_trip", check_checkpoint),
        run_check("data_determinism", check_data_determinism),
    ]
}

/// Full suite: the fast checks plus a deeper 64-bit end-to-end gradient
/// check across two blocks and a short training run.
pub fn full_checks() -> Vec<CheckResult> {
    let mut out = fast_checks();
    out.push(run_check("two_block_gradcheck", || check_gradients(4, 2)));
    out.push(run_check("training_reduces_loss", check_training_smoke));
    out
}
