use std::fs;
use std::path::{Path, PathBuf};

use anyhow::Context;
use metadiag::data::{self, TaskUnit};
use metadiag::eval::{
    self, ensure_split, fit_unit, longtail_buckets, metric_rows, pool_importance, run_ablation,
    run_ablation_with, run_continual_from, Metric, MetricRow, PipelineConfig, PredictionSet,
    DEFAULT_BUCKETS,
};
use metadiag::knowledge_base;
use metadiag::meta::{self, checkpoint_exists, KbObjective, MetaState};
use metadiag::params::ParamSet;
use metadiag::perclass::{self, HeadConfig, SeparationMask};
use metadiag::ppm::ImportanceMap;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;

use crate::config::RunConfig;

/// An error caused by how the tool was invoked rather than by the run.
#[derive(Debug)]
pub struct Usage(pub String);

impl std::fmt::Display for Usage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Usage {}

pub fn usage(msg: impl Into<String>) -> anyhow::Error {
    Usage(msg.into()).into()
}

pub fn require_file(path: &Path, what: &str) -> anyhow::Result<()> {
    if path.is_file() {
        Ok(())
    } else {
        Err(usage(format!("{what} not found: {}", path.display())))
    }
}

pub fn require_dir(path: &Path, what: &str) -> anyhow::Result<()> {
    if path.is_dir() {
        Ok(())
    } else {
        Err(usage(format!("{what} not found: {}", path.display())))
    }
}

pub const THETA_BIN: &str = "theta.bin";
pub const THETA_JSON: &str = "theta.json";
pub const IMPORTANCE_BIN: &str = "importance.bin";
pub const LOSS_CSV: &str = "loss.csv";
pub const METRICS_CSV: &str = "metrics.csv";
pub const CHECKPOINT_DIR: &str = "checkpoint";

/// Ids of the units stored in `dir`, sorted.
pub fn unit_ids(dir: &Path) -> anyhow::Result<Vec<String>> {
    require_dir(dir, "data directory")?;
    let mut ids = Vec::new();
    for entry in fs::read_dir(dir)? {
        let name = entry?.file_name().to_string_lossy().into_owned();
        if let Some(id) = name.strip_suffix(".manifest.json") {
            ids.push(id.to_string());
        }
    }
    ids.sort();
    if ids.is_empty() {
        return Err(usage(format!("no units in {}", dir.display())));
    }
    Ok(ids)
}

pub fn load_unit(dir: &Path, id: &str) -> anyhow::Result<TaskUnit> {
    let (records, sidecar) = data::unit_paths(dir, id);
    require_file(&records, "unit records")?;
    require_file(&sidecar, "unit manifest")?;
    Ok(data::read_unit(dir, id)
        .with_context(|| format!("reading unit {id} from {}", dir.display()))?
        .0)
}

pub fn load_units(dir: &Path) -> anyhow::Result<Vec<TaskUnit>> {
    unit_ids(dir)?.iter().map(|id| load_unit(dir, id)).collect()
}

pub fn load_params(path: &Path) -> anyhow::Result<ParamSet> {
    require_file(path, "checkpoint")?;
    Ok(ParamSet::load(path)?)
}

/// `importance.bin` beside the checkpoint, if the run protects parameters.
fn sibling_importance(
    checkpoint: &Path,
    config: &PipelineConfig,
) -> anyhow::Result<Option<ImportanceMap>> {
    if !config.use_ppm {
        return Ok(None);
    }
    let path = checkpoint.with_file_name(IMPORTANCE_BIN);
    if path.is_file() {
        Ok(Some(ImportanceMap::load(&path)?))
    } else {
        log::warn!(
            "no {} next to the checkpoint; fine-tuning without protection",
            IMPORTANCE_BIN
        );
        Ok(None)
    }
}

fn arm_label(config: &PipelineConfig) -> String {
    let mut off = Vec::new();
    if !config.use_meta {
        off.push("meta");
    }
    if !config.use_ppm {
        off.push("ppm");
    }
    if !config.use_perclass {
        off.push("perclass");
    }
    if off.is_empty() {
        "full".into()
    } else {
        format!("no-{}", off.join("-"))
    }
}

pub fn run_id(command: &str, config: &RunConfig) -> String {
    match config.seed {
        Some(s) => format!("{command}-s{s}"),
        None => format!("{command}-s{}", config.pipeline.meta.seed),
    }
}

fn write_json<T: Serialize>(value: &T, path: &Path) -> anyhow::Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text)?;
    Ok(())
}

// ---------------------------------------------------------------------------

#[derive(Clone, Copy, Debug, PartialEq, Eq, clap::ValueEnum)]
pub enum DataKind {
    /// Units sharing one cohort, each with its own mastery drift.
    Family,
    /// Tasks whose mastery drifts step by step.
    Sequence,
    /// A single unit.
    Single,
}

pub fn gen_data(
    config: &RunConfig,
    kind: DataKind,
    count: Option<usize>,
    out: &Path,
) -> anyhow::Result<Vec<PathBuf>> {
    let world = &config.data.world;
    let generated = match kind {
        DataKind::Family => {
            data::generate_family(world, count.unwrap_or(config.data.family_units))?
        }
        DataKind::Sequence => {
            let drifting = data::SyntheticWorldConfig {
                drift: config.data.sequence_drift,
                ..world.clone()
            };
            data::generate_drifting_sequence(
                &drifting,
                count.unwrap_or(config.data.sequence_tasks),
            )?
        }
        DataKind::Single => vec![data::generate_synthetic(world)?],
    };
    let units: Vec<TaskUnit> = generated.iter().map(|g| g.unit.clone()).collect();
    let split = ensure_split(&units, &config.pipeline.meta)?;
    let mut written = Vec::new();
    for (unit, g) in split.iter().zip(&generated) {
        let (records, sidecar) = data::write_unit(unit, Some(&g.mastery), out)?;
        written.push(records);
        written.push(sidecar);
    }
    println!("wrote {} units to {}", split.len(), out.display());
    Ok(written)
}

pub fn ingest(config: &RunConfig, inputs: &[PathBuf], out: &Path) -> anyhow::Result<()> {
    let mut reports = serde_json::Map::new();
    for input in inputs {
        require_file(input, "input file")?;
        let got =
            data::ingest_json(input).with_context(|| format!("ingesting {}", input.display()))?;
        let split = ensure_split(&got.units, &config.pipeline.meta)?;
        for unit in &split {
            data::write_unit(unit, None, out)?;
            println!(
                "{}: {} records, {} students",
                unit.id,
                unit.len(),
                unit.num_students
            );
        }
        reports.insert(
            input.display().to_string(),
            serde_json::to_value(&got.report)?,
        );
    }
    write_json(&reports, &out.join("ingest_report.json"))
}

pub fn meta_train(
    config: &RunConfig,
    data_dir: &Path,
    exclude: &[String],
    resume: bool,
    out: &Path,
) -> anyhow::Result<()> {
    let all = load_units(data_dir)?;
    for id in exclude {
        if !all.iter().any(|u| &u.id == id) {
            return Err(usage(format!("--exclude names unknown unit {id}")));
        }
    }
    let pipeline = &config.pipeline;
    let arch = pipeline.model.architecture(all.iter())?;
    let pool = ensure_split(
        &all.iter()
            .filter(|u| !exclude.contains(&u.id))
            .cloned()
            .collect::<Vec<_>>(),
        &pipeline.meta,
    )?;
    if pool.is_empty() {
        return Err(usage("every unit is excluded; nothing to meta-train on"));
    }
    let ckpt = out.join(CHECKPOINT_DIR);
    let (theta, history) = if pipeline.use_meta {
        let mut state = if resume && checkpoint_exists(&ckpt) {
            let s = MetaState::load_checkpoint(&ckpt)?;
            s.live
                .kb_arch()
                .ok()
                .filter(|a| **a == arch)
                .ok_or_else(|| {
                    usage(format!(
                        "checkpoint in {} has a different architecture",
                        ckpt.display()
                    ))
                })?;
            println!("resuming from iteration {}", s.iteration);
            s
        } else {
            if resume {
                log::warn!(
                    "--resume given but no checkpoint in {}; starting fresh",
                    ckpt.display()
                );
            }
            MetaState::new(knowledge_base::init_params(&arch, pipeline.meta.seed)?)
        };
        let objective = KbObjective::training(&arch);
        meta::train_with_checkpoints(
            &mut state,
            &pool,
            &pipeline.meta,
            &objective,
            None,
            config.training.checkpoint_every,
            &ckpt,
        )?;
        (state.live, state.history)
    } else {
        (
            knowledge_base::init_params(&arch, pipeline.meta.seed)?,
            Vec::new(),
        )
    };
    theta.save(&out.join(THETA_BIN))?;
    theta.save_json(&out.join(THETA_JSON))?;
    meta::write_loss_csv(&history, &out.join(LOSS_CSV))?;
    if pipeline.use_ppm {
        if let Some(imp) = pool_importance(&theta, &pool, pipeline.meta.importance_samples)? {
            imp.save(&out.join(IMPORTANCE_BIN))?;
        }
    }
    if let Some(last) = history.last() {
        println!(
            "meta-trained {} iterations; final query loss {:.4}",
            history.len(),
            last.query_loss
        );
    }
    Ok(())
}

pub fn fine_tune(
    config: &RunConfig,
    checkpoint: &Path,
    data_dir: &Path,
    unit_id: &str,
    out: &Path,
) -> anyhow::Result<()> {
    let init = load_params(checkpoint)?;
    let unit = load_unit(data_dir, unit_id)?;
    let imp = sibling_importance(checkpoint, &config.pipeline)?;
    let fitted = fit_unit(&init, &unit, &config.pipeline, imp.as_ref())?;
    fitted.kb.save(&out.join("kb.bin"))?;
    fitted.kb.save_json(&out.join("kb.json"))?;
    if let Some(h) = &fitted.heads {
        write_json(&h.params, &out.join("heads.json"))?;
        write_json(&h.mask, &out.join("mask.json"))?;
    }
    let preds = fitted.predict(&unit, &unit.query)?;
    let rows = metric_rows(
        &run_id("fine-tune", config),
        &arm_label(&config.pipeline),
        &unit.id,
        &preds,
    );
    eval::write_metrics_csv(&rows, &out.join(METRICS_CSV))?;
    print_rows(&rows);
    Ok(())
}

fn print_rows(rows: &[MetricRow]) {
    for r in rows {
        println!(
            "{:<14} {:<12} {:<5} {:.4}",
            r.arm, r.task_id, r.metric, r.value
        );
    }
}

fn longtail(preds: &PredictionSet, unit: &TaskUnit, path: &Path) -> anyhow::Result<()> {
    let rows = longtail_buckets(preds, unit, &DEFAULT_BUCKETS)?;
    eval::write_longtail_csv(&rows, path)?;
    Ok(())
}

pub fn evaluate(
    config: &RunConfig,
    checkpoint: &Path,
    data_dir: &Path,
    units: &[String],
    baseline: bool,
    out: &Path,
) -> anyhow::Result<()> {
    let init = load_params(checkpoint)?;
    let ids = if units.is_empty() {
        unit_ids(data_dir)?
    } else {
        units.to_vec()
    };
    let imp = sibling_importance(checkpoint, &config.pipeline)?;
    let run = run_id("evaluate", config);
    let arm = arm_label(&config.pipeline);
    let xavier = knowledge_base::init_params(init.kb_arch()?, config.pipeline.meta.seed)?;
    let mut rows = Vec::new();
    for id in &ids {
        let unit = load_unit(data_dir, id)?;
        let preds =
            fit_unit(&init, &unit, &config.pipeline, imp.as_ref())?.predict(&unit, &unit.query)?;
        rows.extend(metric_rows(&run, &arm, id, &preds));
        longtail(&preds, &unit, &out.join(format!("longtail_{id}.csv")))?;
        if baseline {
            // same pipeline from a random initialization, no anchor
            let scratch = PipelineConfig {
                use_ppm: false,
                ..config.pipeline.clone()
            };
            let preds = fit_unit(&xavier, &unit, &scratch, None)?.predict(&unit, &unit.query)?;
            rows.extend(metric_rows(&run, "scratch", id, &preds));
            longtail(
                &preds,
                &unit,
                &out.join(format!("longtail_{id}_scratch.csv")),
            )?;
        }
    }
    eval::write_metrics_csv(&rows, &out.join(METRICS_CSV))?;
    print_rows(&rows);
    Ok(())
}

pub fn continual(
    config: &RunConfig,
    checkpoint: Option<&Path>,
    pool_dir: &Path,
    sequence_dir: &Path,
    out: &Path,
) -> anyhow::Result<()> {
    let pipeline = &config.pipeline;
    let pool = ensure_split(&load_units(pool_dir)?, &pipeline.meta)?;
    let sequence = ensure_split(&load_units(sequence_dir)?, &pipeline.meta)?;
    let init = match checkpoint {
        Some(p) => load_params(p)?,
        None => {
            let arch = pipeline.model.architecture(pool.iter().chain(&sequence))?;
            eval::initial_params(&pool, &arch, pipeline)?
        }
    };
    let outcome = run_continual_from(
        &init,
        &pool,
        &sequence,
        pipeline,
        pipeline.use_ppm,
        Metric::Auc,
    )?;
    eval::write_matrix_csv(&outcome.matrix, &out.join("matrix.csv"))?;
    outcome.final_params.save(&out.join("kb_final.bin"))?;
    let arm = if pipeline.use_ppm { "ppm" } else { "no-ppm" };
    let rows = vec![MetricRow {
        run_id: run_id("continual", config),
        arm: arm.into(),
        task_id: "sequence".into(),
        metric: "bwt".into(),
        value: outcome.bwt,
    }];
    eval::write_metrics_csv(&rows, &out.join(METRICS_CSV))?;
    println!("BWT ({arm}): {:.4}", outcome.bwt);
    Ok(())
}

pub fn ablate(
    config: &RunConfig,
    checkpoint: Option<&Path>,
    pool_dir: &Path,
    data_dir: &Path,
    unit_id: &str,
    out: &Path,
) -> anyhow::Result<()> {
    let pipeline = &config.pipeline;
    let pool = ensure_split(&load_units(pool_dir)?, &pipeline.meta)?;
    let test = load_unit(data_dir, unit_id)?;
    let test = ensure_split(std::slice::from_ref(&test), &pipeline.meta)?.remove(0);
    let table = match checkpoint {
        Some(p) => run_ablation_with(&load_params(p)?, &pool, &test, pipeline)?,
        None => run_ablation(&pool, &test, pipeline)?,
    };
    let mut w = csv::Writer::from_path(out.join("ablation.csv"))?;
    w.write_record(["arm", "acc", "auc", "rmse"])?;
    let run = run_id("ablate", config);
    let mut rows = Vec::new();
    for r in &table {
        let auc = r.auc.map(|v| v.to_string()).unwrap_or_default();
        w.write_record([
            r.arm.label().to_string(),
            r.acc.to_string(),
            auc,
            r.rmse.to_string(),
        ])?;
        println!("{:<14} acc {:.4}", r.arm.label(), r.acc);
        for (metric, value) in [("acc", Some(r.acc)), ("auc", r.auc), ("rmse", Some(r.rmse))] {
            if let Some(value) = value {
                rows.push(MetricRow {
                    run_id: run.clone(),
                    arm: r.arm.label().into(),
                    task_id: test.id.clone(),
                    metric: metric.into(),
                    value,
                });
            }
        }
    }
    w.flush()?;
    eval::write_metrics_csv(&rows, &out.join(METRICS_CSV))?;
    Ok(())
}

#[derive(Clone, Debug, Serialize)]
pub struct GridRow {
    pub eta: f64,
    pub lambda: f64,
    pub mu: u32,
    pub val_acc: f64,
}

/// Every `(η, λ, μ)` in the configured grid, η outermost.
pub fn grid_points(config: &RunConfig) -> Vec<(f64, f64, u32)> {
    let g = &config.grid;
    let mut points = Vec::new();
    for &eta in &g.eta {
        for &lambda in &g.lambda {
            for &mu in &g.mu {
                points.push((eta, lambda, mu));
            }
        }
    }
    points
}

/// Scores head hyperparameters on a held-out slice of the support set. The
/// knowledge base is fine-tuned once; only the heads vary per grid point.
pub fn grid(
    config: &RunConfig,
    checkpoint: &Path,
    data_dir: &Path,
    unit_id: &str,
    out: &Path,
) -> anyhow::Result<()> {
    let pipeline = &config.pipeline;
    let init = load_params(checkpoint)?;
    let unit = load_unit(data_dir, unit_id)?;
    let imp = sibling_importance(checkpoint, pipeline)?;
    let kb = meta::kb_test_support(&init, &unit, &pipeline.meta, imp.as_ref())?.params;

    let mut support = unit.support.clone();
    support.shuffle(&mut ChaCha8Rng::seed_from_u64(meta::mix_seed(
        pipeline.meta.seed,
        0x6A1D,
    )));
    let n_val = ((support.len() as f64 * config.grid.validation_fraction).round() as usize)
        .clamp(1, support.len() - 1);
    let (val, train) = support.split_at(n_val);
    let features = |idx: &[usize]| knowledge_base::features(&kb, &unit, idx);
    let labels = |idx: &[usize]| {
        idx.iter()
            .map(|&i| unit.records[i].score)
            .collect::<Vec<u8>>()
    };
    let (x_train, y_train) = (features(train)?, labels(train));
    let (x_val, y_val) = (features(val)?, labels(val));
    let mask = if pipeline.separation.enabled {
        let s = &pipeline.separation;
        perclass::kl_separation(&x_train, &y_train, s.kappa, s.bins, s.keep_fraction)?
    } else {
        SeparationMask::all(x_train.cols())
    };

    let points = grid_points(config);
    let head_seed = meta::mix_seed(pipeline.meta.seed, 0x4EAD);
    let mut rows: Vec<GridRow> = points
        .par_iter()
        .map(|&(eta, lambda, mu)| {
            let hc = HeadConfig {
                eta,
                lambda,
                mu,
                steps: config.grid.steps,
                ..pipeline.heads.clone()
            };
            let heads = perclass::train_heads(&x_train, &y_train, &hc, Some(&mask), head_seed)?;
            let decided = perclass::diagnose(&heads, &x_val, Some(&mask))?;
            let hits = decided.iter().zip(&y_val).filter(|(a, b)| a == b).count();
            Ok(GridRow {
                eta,
                lambda,
                mu,
                val_acc: hits as f64 / y_val.len() as f64,
            })
        })
        .collect::<metadiag::Result<_>>()?;
    // stable sort keeps grid order among ties
    rows.sort_by(|a, b| b.val_acc.total_cmp(&a.val_acc));
    let mut w = csv::Writer::from_path(out.join("grid.csv"))?;
    for r in &rows {
        w.serialize(r)?;
    }
    w.flush()?;
    let best = &rows[0];
    println!(
        "{} runs; best eta {} lambda {} mu {} (validation acc {:.4})",
        rows.len(),
        best.eta,
        best.lambda,
        best.mu,
        best.val_acc
    );
    let mut tuned = config.clone();
    tuned.pipeline.heads.eta = best.eta;
    tuned.pipeline.heads.lambda = best.lambda;
    tuned.pipeline.heads.mu = best.mu;
    fs::write(out.join("best.toml"), tuned.to_toml()?)?;
    Ok(())
}

#[derive(Serialize)]
struct SummaryRow {
    arm: String,
    metric: String,
    n: usize,
    mean: f64,
    std: f64,
}

/// Aggregates `metrics.csv` from several run directories by arm and metric.
pub fn report(runs: &[PathBuf], out: &Path) -> anyhow::Result<()> {
    if runs.is_empty() {
        return Err(usage("report needs at least one run directory"));
    }
    let mut groups: Vec<((String, String), Vec<f64>)> = Vec::new();
    for dir in runs {
        let path = dir.join(METRICS_CSV);
        require_file(&path, "metrics file")?;
        for r in eval::read_metrics_csv(&path)? {
            let key = (r.arm, r.metric);
            match groups.iter_mut().find(|(k, _)| *k == key) {
                Some((_, v)) => v.push(r.value),
                None => groups.push((key, vec![r.value])),
            }
        }
    }
    let mut w = csv::Writer::from_path(out.join("summary.csv"))?;
    println!(
        "{:<16} {:<6} {:>4} {:>8} {:>8}",
        "arm", "metric", "n", "mean", "std"
    );
    for ((arm, metric), values) in groups {
        let n = values.len();
        let mean = values.iter().sum::<f64>() / n as f64;
        let var = if n > 1 {
            values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64
        } else {
            0.0
        };
        println!(
            "{arm:<16} {metric:<6} {n:>4} {mean:>8.4} {:>8.4}",
            var.sqrt()
        );
        w.serialize(SummaryRow {
            arm,
            metric,
            n,
            mean,
            std: var.sqrt(),
        })?;
    }
    w.flush()?;
    Ok(())
}
