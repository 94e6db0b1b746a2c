use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use cape_core::cape::Ablation;
use cape_core::models::{read_checkpoint, write_checkpoint, Surrogate};
use cape_core::pde::{generate_dataset, Dataset, Split};
use cape_core::trainer::{evaluate, EvalReport, TrainMode, Trainer};
use cape_core::{Error, Result};
use serde::Serialize;
use serde_json::json;

use crate::config::{sha256_hex, ExperimentConfig};

pub const METRICS_HEADER: &str = "epoch,split,param,nrmse,lr,k_trans";

/// Process exit code for an error: 2 config, 3 data, 4 numeric, 1 other.
pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Config(_) => 2,
        Error::Data(_) | Error::Format { .. } | Error::Io(_) | Error::Json(_) => 3,
        Error::Numeric(_)
        | Error::Diverged(_)
        | Error::RolloutDiverged(_)
        | Error::DegenerateTarget => 4,
        Error::Shape(_) | Error::Unsupported(_) => 1,
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct ManifestEntry {
    pub file: String,
    pub split: Split,
    pub param: f64,
    pub trajectories: usize,
    pub sha256: String,
}

/// Write every dataset file plus `manifest.json` into `dir`.
pub fn generate(cfg: &ExperimentConfig, dir: &Path) -> Result<Vec<ManifestEntry>> {
    let files = generate_dataset(&cfg.data, dir)?;
    let mut entries = Vec::with_capacity(files.len());
    for f in files {
        let bytes = std::fs::read(&f.path)?;
        entries.push(ManifestEntry {
            file: f
                .path
                .file_name()
                .expect("file name")
                .to_string_lossy()
                .into_owned(),
            split: f.split,
            param: f.param,
            trajectories: f.n_traj,
            sha256: sha256_hex(&bytes),
        });
    }
    let manifest = json!({
        "data": cfg.data,
        "data_hash": cfg.data_hash(),
        "files": entries,
    });
    std::fs::write(
        dir.join("manifest.json"),
        serde_json::to_string_pretty(&manifest)?,
    )?;
    Ok(entries)
}

pub fn build_surrogate(cfg: &ExperimentConfig) -> Result<Surrogate> {
    let s = Surrogate::new(&cfg.model, cfg.cape_config().as_ref(), cfg.train.seed)?;
    s.check_grid(cfg.data.grid.n_x)?;
    Ok(s)
}

/// Parameter counts as printed by `train --dry-run`.
pub fn dry_run(cfg: &ExperimentConfig) -> Result<String> {
    let s = build_surrogate(cfg)?;
    let (base, cape) = s.param_counts();
    let mut out = String::new();
    writeln!(out, "config {}", cfg.hash()).unwrap();
    writeln!(out, "base parameters: {base}").unwrap();
    writeln!(out, "attention parameters: {cape}").unwrap();
    writeln!(out, "total parameters: {}", base + cape).unwrap();
    Ok(out)
}

fn load(cfg: &ExperimentConfig, split: Split) -> Result<Dataset> {
    cfg.data.load_split(&cfg.data_dir(), split)
}

fn fmt_row(epoch: usize, split: &str, param: f64, value: f64, lr: f64, k_trans: usize) -> String {
    format!("{epoch},{split},{param},{value},{lr},{k_trans}\n")
}

/// Metrics rows of an earlier run that precede `epoch`.
fn metrics_before(path: &Path, epoch: usize) -> Result<String> {
    let mut out = format!("{METRICS_HEADER}\n");
    let Ok(text) = std::fs::read_to_string(path) else {
        return Ok(out);
    };
    for line in text.lines().skip(1) {
        let e: usize = line
            .split(',')
            .next()
            .and_then(|f| f.parse().ok())
            .ok_or_else(|| Error::Data(format!("bad metrics row {line:?}")))?;
        if e < epoch {
            out.push_str(line);
            out.push('\n');
        }
    }
    Ok(out)
}

fn checkpoint_meta(cfg: &ExperimentConfig, t: &Trainer) -> serde_json::Value {
    json!({
        "config": cfg,
        "config_hash": cfg.hash(),
        "epoch": t.epoch,
        "adam_step": t.adam.step_count(),
    })
}

fn report(
    cfg: &ExperimentConfig,
    s: &Surrogate,
    data: &Dataset,
    started: Instant,
) -> Result<EvalReport> {
    let rows = evaluate(s, data, |v| cfg.data.is_seen(v))?;
    Ok(EvalReport {
        rows,
        wall_clock_s: started.elapsed().as_secs_f64(),
        config_hash: cfg.hash(),
    })
}

/// Train into `out`: `config.json`, `metrics.csv`, periodic and final
/// checkpoints, `summary.json`. With `resume`, training continues from
/// that checkpoint and earlier metric rows are kept.
pub fn train(cfg: &ExperimentConfig, out: &Path, resume: Option<&Path>) -> Result<EvalReport> {
    let started = Instant::now();
    let train_set = load(cfg, Split::Train)?;
    let test_set = load(cfg, Split::Test)?;
    std::fs::create_dir_all(out)?;
    std::fs::write(out.join("config.json"), cfg.to_json())?;

    let mut trainer = Trainer::new(build_surrogate(cfg)?, cfg.train.clone())?;
    let metrics_path = out.join("metrics.csv");
    let mut metrics = format!("{METRICS_HEADER}\n");
    if let Some(ckpt) = resume {
        let (tensors, meta) = read_checkpoint(ckpt)?;
        if meta["config_hash"].as_str() != Some(cfg.hash().as_str()) {
            return Err(Error::Config(format!(
                "{} was written by a different config",
                ckpt.display()
            )));
        }
        let epoch = meta["epoch"]
            .as_u64()
            .ok_or_else(|| Error::Data("checkpoint lacks epoch".into()))?;
        let step = meta["adam_step"]
            .as_u64()
            .ok_or_else(|| Error::Data("checkpoint lacks adam_step".into()))?;
        trainer.restore_state(&tensors, step, epoch as usize)?;
        metrics = metrics_before(&metrics_path, trainer.epoch)?;
    }

    let n_t = cfg.data.grid.n_t;
    let steps = (n_t - usize::from(trainer.surrogate.needs_prev())) as f64;
    let every = cfg.train.eval_every.max(1);
    while trainer.epoch < cfg.train.epochs {
        let stats = trainer.train_epoch(&train_set)?;
        let done = stats.epoch + 1;
        log::info!(
            "epoch {done}/{} loss {:.6} lr {:.3e} k_trans {}",
            cfg.train.epochs,
            stats.loss,
            stats.lr,
            stats.k_trans
        );
        for &(param, loss) in &stats.per_param {
            metrics.push_str(&fmt_row(
                stats.epoch,
                "train",
                param,
                loss / steps,
                stats.lr,
                stats.k_trans,
            ));
        }
        if done % every == 0 || done == cfg.train.epochs {
            for r in evaluate(&trainer.surrogate, &test_set, |v| cfg.data.is_seen(v))? {
                metrics.push_str(&fmt_row(
                    stats.epoch,
                    "test",
                    r.param,
                    r.nrmse_mean,
                    stats.lr,
                    stats.k_trans,
                ));
            }
        }
        std::fs::write(&metrics_path, &metrics)?;
        if cfg.run.checkpoint_every > 0 && done % cfg.run.checkpoint_every == 0 {
            let path = out.join(format!("checkpoint_{done:04}.nnck"));
            write_checkpoint(
                &path,
                &trainer.state_tensors(),
                &checkpoint_meta(cfg, &trainer),
            )?;
        }
    }
    std::fs::write(&metrics_path, &metrics)?;
    write_checkpoint(
        &out.join("model.nnck"),
        &trainer.state_tensors(),
        &checkpoint_meta(cfg, &trainer),
    )?;
    let rep = report(cfg, &trainer.surrogate, &test_set, started)?;
    let (base, cape) = trainer.surrogate.param_counts();
    let summary = json!({
        "config_hash": cfg.hash(),
        "data_hash": cfg.data_hash(),
        "parameters": {"base": base, "attention": cape},
        "report": rep,
        "seen_mean": rep.mean_over(Split::Test, true),
        "unseen_mean": rep.mean_over(Split::Test, false),
    });
    std::fs::write(
        out.join("summary.json"),
        serde_json::to_string_pretty(&summary)?,
    )?;
    Ok(rep)
}

/// Surrogate weights from a checkpoint written by [`train`].
pub fn load_model(cfg: &ExperimentConfig, ckpt: &Path) -> Result<Surrogate> {
    let (tensors, _) = read_checkpoint(ckpt)?;
    let mut s = build_surrogate(cfg)?;
    s.params.load_from(&tensors)?;
    Ok(s)
}

/// Evaluate a checkpoint on the test split; writes `eval.csv` and `eval.json`.
pub fn eval(cfg: &ExperimentConfig, ckpt: &Path, out: &Path) -> Result<EvalReport> {
    let started = Instant::now();
    let s = load_model(cfg, ckpt)?;
    let data = load(cfg, Split::Test)?;
    let rep = report(cfg, &s, &data, started)?;
    std::fs::create_dir_all(out)?;
    let mut csv = String::from("kind,param,split,seen,nrmse_mean,nrmse_std,count\n");
    for r in &rep.rows {
        writeln!(
            csv,
            "{},{},{},{},{},{},{}",
            r.kind.name(),
            r.param,
            r.split.name(),
            r.seen,
            r.nrmse_mean,
            r.nrmse_std,
            r.count
        )
        .unwrap();
    }
    std::fs::write(out.join("eval.csv"), csv)?;
    std::fs::write(out.join("eval.json"), serde_json::to_string_pretty(&rep)?)?;
    Ok(rep)
}

#[derive(Debug, Clone, Serialize)]
pub struct AblationRow {
    pub variant: String,
    pub mode: TrainMode,
    pub seen: f64,
    pub unseen: f64,
    /// Seen-parameter change against the full model in the same mode.
    pub delta: f64,
}

fn mode_name(m: TrainMode) -> &'static str {
    match m {
        TrainMode::TeacherForcing => "teacher_forcing",
        TrainMode::Autoregressive => "autoregressive",
        TrainMode::Curriculum => "curriculum",
    }
}

/// `(+0.02)`-style delta.
pub fn format_delta(d: f64) -> String {
    format!("({d:+.2})")
}

/// Train the full model and each configured branch drop under every
/// configured mode; one run directory each plus `summary.csv`.
pub fn ablate(cfg: &ExperimentConfig, out: &Path) -> Result<Vec<AblationRow>> {
    let Some(base_cape) = cfg.cape_config() else {
        return Err(Error::Config(
            "ablate needs model.conditioning = cape".into(),
        ));
    };
    let mut variants: Vec<(String, Option<Ablation>)> = vec![("full".into(), None)];
    for d in &cfg.run.ablate.drops {
        let a: Ablation = d.parse()?;
        variants.push((format!("drop_{a}"), Some(a)));
    }
    let mut rows = Vec::new();
    for &mode in &cfg.run.ablate.modes {
        let mut full = None;
        for (name, drop) in &variants {
            let mut c = cfg.clone();
            let mut cape = base_cape.clone();
            cape.dropped.extend(*drop);
            c.cape = Some(cape);
            c.train.mode = mode;
            let dir = out.join(format!("{name}_{}", mode_name(mode)));
            c.run.output_dir = dir.clone();
            c.run.data_dir = Some(cfg.data_dir());
            let rep = train(&c, &dir, None)?;
            let seen = rep.mean_over(Split::Test, true);
            let reference = *full.get_or_insert(seen);
            rows.push(AblationRow {
                variant: name.clone(),
                mode,
                seen,
                unseen: rep.mean_over(Split::Test, false),
                delta: seen - reference,
            });
        }
    }
    let mut csv = String::from("variant,mode,nrmse_seen,nrmse_unseen,delta,data_hash\n");
    for r in &rows {
        writeln!(
            csv,
            "{},{},{},{},{},{}",
            r.variant,
            mode_name(r.mode),
            r.seen,
            r.unseen,
            format_delta(r.delta),
            cfg.data_hash()
        )
        .unwrap();
    }
    std::fs::create_dir_all(out)?;
    std::fs::write(out.join("summary.csv"), csv)?;
    Ok(rows)
}

/// Write the mask-gated depthwise kernels for parameter `value`.
pub fn dump_kernels(
    cfg: &ExperimentConfig,
    ckpt: &Path,
    value: f64,
    path: &Path,
) -> Result<PathBuf> {
    let s = load_model(cfg, ckpt)?;
    let cape = s
        .cape()
        .ok_or_else(|| Error::Config("dump-kernels needs model.conditioning = cape".into()))?;
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    cape.dump_gated_kernels(&s.params, value, path)?;
    Ok(path.to_path_buf())
}
