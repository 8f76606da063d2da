//! `moe-ffd`: dataset generation, training, evaluation, ablation sweeps,
//! self-verification, and expert-usage reports.
//!
//! Exit codes: 0 success, 2 configuration error, 3 numeric error, 4 I/O
//! error.

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand};

use moe_ffd_core::checkpoint;
use moe_ffd_core::config::{RunConfig, RunMode};
use moe_ffd_core::data::{self, DatasetManifest, PerturbKind, PerturbationSpec};
use moe_ffd_core::diffconv::DiffConvKind;
use moe_ffd_core::metrics::{self, ScoredBatch};
use moe_ffd_core::model::{evaluate, MoEFFDModel, Trainer};
use moe_ffd_core::verify;
use moe_ffd_core::{Error, Result, Tensor};

/// Env var naming the root under which relative output paths resolve.
const OUT_ROOT_ENV: &str = "MOE_FFD_OUT_ROOT";

#[derive(Parser)]
#[command(name = "moe-ffd", version, about = "Mixture-of-experts deepfake detector")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a synthetic labeled dataset.
    GenData(GenDataArgs),
    /// Train a model from a run config.
    Train(TrainArgs),
    /// Evaluate a checkpoint on a dataset, optionally under perturbations.
    Eval(EvalArgs),
    /// Train and evaluate one cell per sweep value, consolidated into a CSV.
    Ablate(AblateArgs),
    /// Run the built-in oracle and gradient self-checks.
    Verify(VerifyArgs),
    /// Report per-gate expert selection frequencies for a checkpoint.
    ReportExperts(ReportExpertsArgs),
}

#[derive(Args)]
struct GenDataArgs {
    /// Output dataset directory.
    #[arg(long)]
    out: PathBuf,
    /// Copy generation parameters from this dataset's manifest.
    #[arg(long)]
    like: Option<PathBuf>,
    #[arg(long, default_value_t = 1000)]
    n_real: usize,
    #[arg(long, default_value_t = 1000)]
    n_fake: usize,
    /// Square image side in pixels.
    #[arg(long, default_value_t = 64)]
    size: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct TrainArgs {
    /// Run config JSON; CLI flags below override its fields.
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    train_data: Option<PathBuf>,
    #[arg(long)]
    test_data: Option<PathBuf>,
    #[arg(long)]
    epochs: Option<usize>,
    /// Training seed (data order and gate noise).
    #[arg(long)]
    seed: Option<u64>,
    /// moe | multi_experts | single_expert:<id> | backbone_only
    #[arg(long)]
    mode: Option<String>,
    #[arg(long)]
    lambda: Option<f64>,
    /// Resume from this checkpoint instead of a fresh initialization.
    #[arg(long)]
    resume: Option<PathBuf>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// Directory for metrics.csv and expert_freq.csv; defaults to stdout only.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Label for the metrics.csv split column.
    #[arg(long, default_value = "eval")]
    split: String,
    /// One perturbation: gaussian_blur | gaussian_noise | block_wise.
    #[arg(long)]
    perturb: Option<String>,
    /// Severity 1..=5 for --perturb.
    #[arg(long)]
    severity: Option<usize>,
    /// Evaluate clean plus every perturbation at every severity.
    #[arg(long, default_value_t = false)]
    sweep: bool,
}

#[derive(Args)]
struct AblateArgs {
    #[arg(long)]
    config: PathBuf,
    /// rank | adapter_kind | top_k | lambda | moe_vs_multi
    #[arg(long)]
    sweep: String,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct VerifyArgs {
    /// fast | full
    #[arg(long, default_value = "fast")]
    level: String,
}

#[derive(Args)]
struct ReportExpertsArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: Option<PathBuf>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.cmd {
        Cmd::GenData(a) => cmd_gen_data(a),
        Cmd::Train(a) => cmd_train(a),
        Cmd::Eval(a) => cmd_eval(a),
        Cmd::Ablate(a) => cmd_ablate(a),
        Cmd::Verify(a) => cmd_verify(a),
        Cmd::ReportExperts(a) => cmd_report_experts(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Dim(_) | Error::Arg(_) | Error::Config(_) | Error::Format(_) => 2,
        Error::Numeric { .. } => 3,
        Error::Io { .. } => 4,
    }
}

/// Resolve a possibly relative path under the output-root env var.
fn resolve_out(path: &Path) -> PathBuf {
    if path.is_absolute() {
        return path.to_path_buf();
    }
    match std::env::var_os(OUT_ROOT_ENV) {
        Some(root) => PathBuf::from(root).join(path),
        None => path.to_path_buf(),
    }
}

fn io_err(path: &Path, e: std::io::Error) -> Error {
    Error::io(path.to_path_buf(), e)
}

fn write_file(path: &Path, content: &str) -> Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(|e| io_err(parent, e))?;
    }
    std::fs::write(path, content).map_err(|e| io_err(path, e))
}

fn load_run_config(path: &Path) -> Result<RunConfig> {
    let text = std::fs::read_to_string(path).map_err(|e| io_err(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::config(format!("{}: {e}", path.display())))
}

fn load_samples_f32(dir: &Path) -> Result<(DatasetManifest, Vec<(Tensor<f32>, usize)>)> {
    let (manifest, samples) = data::load_dataset(dir)?;
    let set = samples
        .iter()
        .map(|s| (s.image.cast::<f32>(), s.label))
        .collect();
    Ok((manifest, set))
}

// ── gen-data ─────────────────────────────────────────────────────────

fn cmd_gen_data(a: GenDataArgs) -> Result<()> {
    let (n_real, n_fake, h, w, seed) = match &a.like {
        Some(dir) => {
            let m = data::load_manifest(dir)?;
            (m.n_real, m.n_fake, m.height, m.width, m.seed)
        }
        None => (a.n_real, a.n_fake, a.size, a.size, a.seed),
    };
    let out = resolve_out(&a.out);
    let samples = data::generate_dataset(n_real, n_fake, h, w, seed)?;
    let manifest = DatasetManifest {
        seed,
        n_real,
        n_fake,
        height: h,
        width: w,
    };
    data::save_dataset(&out, &manifest, &samples)?;
    println!("{}", out.join("manifest.json").display());
    Ok(())
}

// ── train ────────────────────────────────────────────────────────────

fn merged_train_config(a: &TrainArgs) -> Result<RunConfig> {
    let mut cfg = load_run_config(&a.config)?;
    if let Some(p) = &a.out {
        cfg.out_dir = Some(p.clone());
    }
    if let Some(p) = &a.train_data {
        cfg.train_data = Some(p.clone());
    }
    if let Some(p) = &a.test_data {
        cfg.test_data = Some(p.clone());
    }
    if let Some(e) = a.epochs {
        cfg.train.epochs = e;
    }
    if let Some(s) = a.seed {
        cfg.train.seed = s;
    }
    if let Some(m) = &a.mode {
        cfg.mode = m.clone();
    }
    if let Some(l) = a.lambda {
        cfg.model.lambda_moe = l;
    }
    Ok(cfg)
}

fn loss_curve_csv(records: &[moe_ffd_core::model::EpochRecord]) -> String {
    let mut out = String::from("epoch,mean_loss,mean_ce,mean_moe_weighted\n");
    for r in records {
        out.push_str(&format!(
            "{},{},{},{}\n",
            r.epoch, r.mean_loss, r.mean_ce, r.mean_moe_weighted
        ));
    }
    out
}

fn run_dir_name(dir: &Path) -> String {
    dir.file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_else(|| "run".to_string())
}

/// Evaluate on both splits, write metrics.csv and (in routed mode) the
/// test-split expert_freq.csv.
fn write_run_reports(
    out: &Path,
    run_id: &str,
    model: &MoEFFDModel<f32>,
    mode: RunMode,
    train_set: &[(Tensor<f32>, usize)],
    test_set: Option<&[(Tensor<f32>, usize)]>,
) -> Result<()> {
    let mut rows = Vec::new();
    let (train_scores, _) = evaluate(model, train_set, mode)?;
    rows.push((
        run_id.to_string(),
        "train".to_string(),
        metrics::auc(&train_scores)?,
        metrics::eer(&train_scores)?,
    ));
    if let Some(test) = test_set {
        let (test_scores, records) = evaluate(model, test, mode)?;
        rows.push((
            run_id.to_string(),
            "test".to_string(),
            metrics::auc(&test_scores)?,
            metrics::eer(&test_scores)?,
        ));
        if mode == RunMode::Moe {
            let report = metrics::expert_frequencies(
                &records,
                model.config.lora_ranks.len(),
                model.config.adapter_kinds.len(),
            )?;
            write_file(&out.join("expert_freq.csv"), &metrics::expert_freq_csv(&report))?;
        }
    }
    write_file(&out.join("metrics.csv"), &metrics::metrics_csv(&rows))?;
    for (run, split, auc, eer) in &rows {
        println!("{run} {split}: auc {auc:.4} eer {eer:.4}");
    }
    Ok(())
}

fn cmd_train(a: TrainArgs) -> Result<()> {
    let cfg = merged_train_config(&a)?;
    let mode = cfg.validate()?;
    let out = resolve_out(
        cfg.out_dir
            .as_deref()
            .ok_or_else(|| Error::config("no output directory (set out_dir or --out)".to_string()))?,
    );
    std::fs::create_dir_all(&out).map_err(|e| io_err(&out, e))?;
    let merged_json = serde_json::to_string_pretty(&cfg)
        .map_err(|e| Error::Format(format!("config encode: {e}")))?;
    write_file(&out.join("config.json"), &merged_json)?;

    let train_dir = cfg
        .train_data
        .as_deref()
        .ok_or_else(|| Error::config("no train_data path".to_string()))?;
    let (_, train_set) = load_samples_f32(train_dir)?;
    let test_set = match cfg.test_data.as_deref() {
        Some(dir) => Some(load_samples_f32(dir)?.1),
        None => None,
    };

    let mut trainer = match &a.resume {
        Some(ckpt) => {
            let (trainer, ckpt_cfg) = checkpoint::load::<f32>(ckpt)?;
            if ckpt_cfg.model != cfg.model {
                return Err(Error::config(
                    "checkpoint model config differs from the run config".to_string(),
                ));
            }
            trainer
        }
        None => Trainer::new(MoEFFDModel::<f32>::init(&cfg.model)?, cfg.train.clone(), mode),
    };

    let started = Instant::now();
    let mut curve = Vec::new();
    while trainer.epoch < cfg.train.epochs {
        let report = match trainer.run_epochs(&train_set, 1) {
            Ok(r) => r,
            Err(e) => {
                // leave a snapshot of the diverged state for inspection
                let snap = out.join("diagnostic.bin");
                let _ = checkpoint::save(&snap, &trainer, &cfg);
                eprintln!("aborting; state written to {}", snap.display());
                return Err(e);
            }
        };
        let rec = report.epochs.into_iter().next().unwrap();
        println!(
            "epoch {}/{}: loss {:.4} (ce {:.4}, moe {:.4})",
            rec.epoch, cfg.train.epochs, rec.mean_loss, rec.mean_ce, rec.mean_moe_weighted
        );
        curve.push(rec);
        let every = cfg.train.checkpoint_every;
        if every > 0 && trainer.epoch % every == 0 && trainer.epoch < cfg.train.epochs {
            checkpoint::save(&out.join(format!("checkpoint_epoch{}.bin", trainer.epoch)), &trainer, &cfg)?;
        }
    }
    checkpoint::save(&out.join("checkpoint.bin"), &trainer, &cfg)?;
    write_file(&out.join("loss_curve.csv"), &loss_curve_csv(&curve))?;
    println!(
        "trained {} epochs in {:.1}s",
        curve.len(),
        started.elapsed().as_secs_f64()
    );
    write_run_reports(
        &out,
        &run_dir_name(&out),
        &trainer.model,
        mode,
        &train_set,
        test_set.as_deref(),
    )
}

// ── eval ─────────────────────────────────────────────────────────────

/// Stable per-sample perturbation seed.
fn perturb_seed(base: u64, sample_id: u64, kind: PerturbKind, severity: usize) -> u64 {
    let kind_idx = PerturbKind::ALL.iter().position(|&k| k == kind).unwrap() as u64;
    base ^ sample_id.wrapping_mul(0x9E3779B97F4A7C15) ^ (kind_idx << 56) ^ ((severity as u64) << 48)
}

fn eval_scores(
    model: &MoEFFDModel<f32>,
    mode: RunMode,
    samples: &[data::ImageSample],
    manifest: &DatasetManifest,
    spec: Option<PerturbationSpec>,
) -> Result<ScoredBatch> {
    let mut set = Vec::with_capacity(samples.len());
    for s in samples {
        let image = match spec {
            Some(spec) => data::perturb(
                &s.image,
                spec,
                perturb_seed(manifest.seed, s.sample_id, spec.kind, spec.severity),
            )?,
            None => s.image.clone(),
        };
        set.push((image.cast::<f32>(), s.label));
    }
    Ok(evaluate(model, &set, mode)?.0)
}

fn cmd_eval(a: EvalArgs) -> Result<()> {
    let (trainer, cfg) = checkpoint::load::<f32>(&a.checkpoint)?;
    let mode = cfg.validate()?;
    let (manifest, samples) = data::load_dataset(&a.data)?;
    let run_id = a
        .checkpoint
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "checkpoint".to_string());

    let mut specs: Vec<(String, Option<PerturbationSpec>)> = Vec::new();
    if a.sweep {
        specs.push((a.split.clone(), None));
        for kind in PerturbKind::ALL {
            for severity in 1..=5 {
                specs.push((
                    format!("{}_s{severity}", kind.name()),
                    Some(PerturbationSpec::new(kind, severity)?),
                ));
            }
        }
    } else if let Some(kind) = &a.perturb {
        let kind = PerturbKind::parse(kind)?;
        let severity = a
            .severity
            .ok_or_else(|| Error::arg("--perturb needs --severity".to_string()))?;
        specs.push((
            format!("{}_s{severity}", kind.name()),
            Some(PerturbationSpec::new(kind, severity)?),
        ));
    } else {
        specs.push((a.split.clone(), None));
    }

    let mut rows = Vec::new();
    for (split, spec) in specs {
        let scores = eval_scores(&trainer.model, mode, &samples, &manifest, spec)?;
        let row = (
            run_id.clone(),
            split,
            metrics::auc(&scores)?,
            metrics::eer(&scores)?,
        );
        println!("{} {}: auc {:.4} eer {:.4}", row.0, row.1, row.2, row.3);
        rows.push(row);
    }
    let csv = metrics::metrics_csv(&rows);
    if let Some(out) = &a.out {
        let out = resolve_out(out);
        write_file(&out.join("metrics.csv"), &csv)?;
        if mode == RunMode::Moe {
            let set: Vec<(Tensor<f32>, usize)> = samples
                .iter()
                .map(|s| (s.image.cast::<f32>(), s.label))
                .collect();
            let (_, records) = evaluate(&trainer.model, &set, mode)?;
            let report = metrics::expert_frequencies(
                &records,
                cfg.model.lora_ranks.len(),
                cfg.model.adapter_kinds.len(),
            )?;
            write_file(&out.join("expert_freq.csv"), &metrics::expert_freq_csv(&report))?;
        }
    }
    Ok(())
}

// ── ablate ───────────────────────────────────────────────────────────

fn ablation_cells(base: &RunConfig, sweep: &str) -> Result<Vec<(String, RunConfig)>> {
    let mut cells = Vec::new();
    match sweep {
        "rank" => {
            for &r in &base.model.lora_ranks {
                let mut c = base.clone();
                c.model.lora_ranks = vec![r];
                c.model.top_k = 1;
                cells.push((format!("rank_{r}"), c));
            }
        }
        "adapter_kind" => {
            for kind in DiffConvKind::ALL {
                let mut c = base.clone();
                c.model.adapter_kinds = vec![kind];
                c.model.top_k = 1;
                cells.push((format!("adapter_{}", kind.name()), c));
            }
        }
        "top_k" => {
            for k in [1, 2, 3] {
                let mut c = base.clone();
                c.model.top_k = k;
                cells.push((format!("top_k_{k}"), c));
            }
        }
        "lambda" => {
            for l in [0.0, 0.1, 1.0, 5.0, 10.0] {
                let mut c = base.clone();
                c.model.lambda_moe = l;
                cells.push((format!("lambda_{l}"), c));
            }
        }
        "moe_vs_multi" => {
            for mode in ["moe", "multi_experts"] {
                let mut c = base.clone();
                c.mode = mode.to_string();
                cells.push((format!("mode_{mode}"), c));
            }
        }
        other => {
            return Err(Error::arg(format!(
                "unknown sweep `{other}` (rank | adapter_kind | top_k | lambda | moe_vs_multi)"
            )))
        }
    }
    Ok(cells)
}

fn run_cell(
    cfg: &RunConfig,
    train_set: &[(Tensor<f32>, usize)],
    test_set: &[(Tensor<f32>, usize)],
) -> Result<(f64, f64, f64)> {
    let mode = cfg.validate()?;
    let model = MoEFFDModel::<f32>::init(&cfg.model)?;
    let mut trainer = Trainer::new(model, cfg.train.clone(), mode);
    let report = trainer.run_epochs(train_set, cfg.train.epochs)?;
    let final_loss = report.epochs.last().map(|r| r.mean_loss).unwrap_or(f64::NAN);
    let (scores, _) = evaluate(&trainer.model, test_set, mode)?;
    Ok((metrics::auc(&scores)?, metrics::eer(&scores)?, final_loss))
}

fn cmd_ablate(a: AblateArgs) -> Result<()> {
    let base = load_run_config(&a.config)?;
    base.validate()?;
    let train_dir = base
        .train_data
        .as_deref()
        .ok_or_else(|| Error::config("no train_data path".to_string()))?;
    let test_dir = base
        .test_data
        .as_deref()
        .ok_or_else(|| Error::config("ablation needs a test_data path".to_string()))?;
    let (_, train_set) = load_samples_f32(train_dir)?;
    let (_, test_set) = load_samples_f32(test_dir)?;

    let mut csv = String::from("sweep,cell,status,auc,eer,final_loss\n");
    let mut failures = 0;
    for (name, cfg) in ablation_cells(&base, &a.sweep)? {
        match run_cell(&cfg, &train_set, &test_set) {
            Ok((auc, eer, loss)) => {
                println!("{name}: auc {auc:.4} eer {eer:.4} loss {loss:.4}");
                csv.push_str(&format!("{},{name},ok,{auc},{eer},{loss}\n", a.sweep));
            }
            Err(e) => {
                // a failed cell must not abort the rest of the sweep
                failures += 1;
                eprintln!("{name}: {e}");
                csv.push_str(&format!("{},{name},error: {e},,,\n", a.sweep));
            }
        }
    }
    if let Some(out) = &a.out {
        let out = resolve_out(out);
        write_file(&out.join("ablate.csv"), &csv)?;
    } else {
        print!("{csv}");
    }
    if failures > 0 {
        return Err(Error::numeric("ablate", format!("{failures} cells failed")));
    }
    Ok(())
}

// ── verify ───────────────────────────────────────────────────────────

fn cmd_verify(a: VerifyArgs) -> Result<()> {
    let checks = match a.level.as_str() {
        "fast" => verify::fast_checks(),
        "full" => verify::full_checks(),
        other => return Err(Error::arg(format!("unknown level `{other}` (fast | full)"))),
    };
    let mut failed = 0;
    for c in &checks {
        let status = if c.passed { "PASS" } else { "FAIL" };
        println!("{status} {}: {}", c.name, c.detail);
        if !c.passed {
            failed += 1;
        }
    }
    if failed > 0 {
        return Err(Error::numeric(
            "verify",
            format!("{failed}/{} checks failed", checks.len()),
        ));
    }
    println!("all {} checks passed", checks.len());
    Ok(())
}

// ── report-experts ───────────────────────────────────────────────────

fn cmd_report_experts(a: ReportExpertsArgs) -> Result<()> {
    let (trainer, cfg) = checkpoint::load::<f32>(&a.checkpoint)?;
    let mode = cfg.validate()?;
    if mode != RunMode::Moe {
        return Err(Error::config(format!(
            "expert report needs a routed checkpoint, mode is `{}`",
            cfg.mode
        )));
    }
    let (_, set) = load_samples_f32(&a.data)?;
    let (_, records) = evaluate(&trainer.model, &set, mode)?;
    let report = metrics::expert_frequencies(
        &records,
        cfg.model.lora_ranks.len(),
        cfg.model.adapter_kinds.len(),
    )?;
    let csv = metrics::expert_freq_csv(&report);
    print!("{csv}");
    if let Some(out) = &a.out {
        let out = resolve_out(out);
        write_file(&out.join("expert_freq.csv"), &csv)?;
    }
    Ok(())
}
