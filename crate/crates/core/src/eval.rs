//! Metrics, backward transfer, long-tail buckets and the experiment
//! protocols (per-unit fitting, task-incremental sequence, ablation).

use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::autodiff::sigmoid;
use crate::data::TaskUnit;
use crate::error::{Error, Result};
use crate::knowledge_base::{self, KbArchitecture};
use crate::meta::{self, mix_seed, MetaConfig};
use crate::params::ParamSet;
use crate::perclass::{self, HeadConfig, HeadParams, SeparationMask};
use crate::ppm::{self, ImportanceMap};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PredictionSet {
    pub probabilities: Vec<f64>,
    pub labels: Vec<u8>,
    pub scores: Vec<u8>,
    pub questions: Vec<usize>,
}

impl PredictionSet {
    pub fn new(
        probabilities: Vec<f64>,
        labels: Vec<u8>,
        scores: Vec<u8>,
        questions: Vec<usize>,
    ) -> Result<Self> {
        let n = probabilities.len();
        if labels.len() != n || scores.len() != n || questions.len() != n {
            return Err(Error::invalid("prediction lists differ in length"));
        }
        Ok(PredictionSet {
            probabilities,
            labels,
            scores,
            questions,
        })
    }

    /// Hard labels from thresholding at 0.5 (strictly above → 1).
    pub fn thresholded(
        probabilities: Vec<f64>,
        scores: Vec<u8>,
        questions: Vec<usize>,
    ) -> Result<Self> {
        let labels = probabilities.iter().map(|&p| u8::from(p > 0.5)).collect();
        Self::new(probabilities, labels, scores, questions)
    }

    pub fn len(&self) -> usize {
        self.probabilities.len()
    }

    pub fn is_empty(&self) -> bool {
        self.probabilities.is_empty()
    }

    pub fn subset(&self, keep: impl Fn(usize) -> bool) -> PredictionSet {
        let idx: Vec<usize> = (0..self.len()).filter(|&i| keep(i)).collect();
        PredictionSet {
            probabilities: idx.iter().map(|&i| self.probabilities[i]).collect(),
            labels: idx.iter().map(|&i| self.labels[i]).collect(),
            scores: idx.iter().map(|&i| self.scores[i]).collect(),
            questions: idx.iter().map(|&i| self.questions[i]).collect(),
        }
    }
}

fn non_empty(p: &PredictionSet) -> Result<()> {
    if p.is_empty() {
        return Err(Error::invalid("metric over an empty prediction set"));
    }
    Ok(())
}

pub fn accuracy(p: &PredictionSet) -> Result<f64> {
    non_empty(p)?;
    let hits = p
        .labels
        .iter()
        .zip(&p.scores)
        .filter(|(a, b)| a == b)
        .count();
    Ok(hits as f64 / p.len() as f64)
}

pub fn rmse(p: &PredictionSet) -> Result<f64> {
    non_empty(p)?;
    let se: f64 = p
        .probabilities
        .iter()
        .zip(&p.scores)
        .map(|(&q, &s)| (q - f64::from(s)).powi(2))
        .sum();
    Ok((se / p.len() as f64).sqrt())
}

/// Probability that a random positive outranks a random negative, ties ½.
/// Computed from average ranks in `O(n log n)`.
pub fn auc(p: &PredictionSet) -> Result<f64> {
    non_empty(p)?;
    let pos = p.scores.iter().filter(|&&s| s == 1).count();
    let neg = p.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(Error::UndefinedAuc);
    }
    let mut order: Vec<usize> = (0..p.len()).collect();
    order.sort_by(|&a, &b| p.probabilities[a].total_cmp(&p.probabilities[b]));
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && p.probabilities[order[j + 1]] == p.probabilities[order[i]] {
            j += 1;
        }
        // ranks i+1 ..= j+1 share their average
        let avg = (i + j + 2) as f64 / 2.0;
        rank_sum += order[i..=j].iter().filter(|&&k| p.scores[k] == 1).count() as f64 * avg;
        i = j + 1;
    }
    let (pos, neg) = (pos as f64, neg as f64);
    Ok((rank_sum - pos * (pos + 1.0) / 2.0) / (pos * neg))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Metric {
    Acc,
    Rmse,
    Auc,
}

impl Metric {
    pub fn compute(self, p: &PredictionSet) -> Result<f64> {
        match self {
            Metric::Acc => accuracy(p),
            Metric::Rmse => rmse(p),
            Metric::Auc => auc(p),
        }
    }
}

impl fmt::Display for Metric {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Metric::Acc => "acc",
            Metric::Rmse => "rmse",
            Metric::Auc => "auc",
        })
    }
}

/// `M[r][t]`: performance on task `t` after training through task `r`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalMatrix {
    pub metric: Metric,
    pub task_ids: Vec<String>,
    entries: Vec<Vec<Option<f64>>>,
}

impl EvalMatrix {
    pub fn new(metric: Metric, task_ids: Vec<String>) -> Self {
        let t = task_ids.len();
        EvalMatrix {
            metric,
            task_ids,
            entries: (0..t).map(|r| vec![None; r + 1]).collect(),
        }
    }

    /// Builds a matrix from full lower-triangular rows.
    pub fn from_rows(metric: Metric, rows: &[Vec<f64>]) -> Result<Self> {
        let ids = (0..rows.len()).map(|i| format!("task_{i}")).collect();
        let mut m = Self::new(metric, ids);
        for (r, row) in rows.iter().enumerate() {
            if row.len() != r + 1 {
                return Err(Error::invalid(format!("row {r} needs {} entries", r + 1)));
            }
            for (t, &v) in row.iter().enumerate() {
                m.set(r, t, v)?;
            }
        }
        Ok(m)
    }

    pub fn size(&self) -> usize {
        self.task_ids.len()
    }

    pub fn set(&mut self, r: usize, t: usize, value: f64) -> Result<()> {
        if r >= self.size() || t > r {
            return Err(Error::invalid(format!(
                "entry ({r}, {t}) is outside the lower triangle"
            )));
        }
        self.entries[r][t] = Some(value);
        Ok(())
    }

    pub fn get(&self, r: usize, t: usize) -> Option<f64> {
        self.entries.get(r)?.get(t).copied().flatten()
    }

    fn require(&self, r: usize, t: usize) -> Result<f64> {
        self.get(r, t).ok_or(Error::MissingEntry { row: r, col: t })
    }

    pub fn bwt(&self) -> Result<f64> {
        bwt(self)
    }
}

/// `1/(T−1) Σ_{t<T} (M[T][t] − M[t][t])`.
pub fn bwt(m: &EvalMatrix) -> Result<f64> {
    let t = m.size();
    if t < 2 {
        return Err(Error::TooFewTasks(t));
    }
    let last = t - 1;
    let mut s = 0.0;
    for k in 0..last {
        s += m.require(last, k)? - m.require(k, k)?;
    }
    Ok(s / last as f64)
}

pub const DEFAULT_BUCKETS: [(usize, usize); 6] =
    [(6, 10), (11, 15), (16, 20), (21, 25), (26, 30), (31, 35)];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BucketRow {
    pub bucket: String,
    pub lo: usize,
    pub hi: usize,
    /// Distinct questions whose response count falls in the bucket.
    pub questions: usize,
    /// Predictions on those questions.
    pub count: usize,
    pub acc: f64,
    /// `None` when the bucket's predictions hold a single class.
    pub auc: Option<f64>,
}

/// Per-bucket metrics, grouping questions by their total response count in
/// `unit`. Buckets are inclusive ranges; buckets without predictions are
/// left out.
pub fn longtail_buckets(
    p: &PredictionSet,
    unit: &TaskUnit,
    buckets: &[(usize, usize)],
) -> Result<Vec<BucketRow>> {
    for (i, &(lo, hi)) in buckets.iter().enumerate() {
        if lo > hi || (i > 0 && lo <= buckets[i - 1].1) {
            return Err(Error::invalid("bucket edges must be strictly increasing"));
        }
    }
    let counts = unit.question_counts();
    let mut rows = Vec::new();
    for &(lo, hi) in buckets {
        let inside = |q: usize| counts.get(q).is_some_and(|&c| c >= lo && c <= hi);
        let sub = p.subset(|i| inside(p.questions[i]));
        if sub.is_empty() {
            continue;
        }
        let questions = (0..counts.len()).filter(|&q| inside(q)).count();
        rows.push(BucketRow {
            bucket: format!("{lo}-{hi}"),
            lo,
            hi,
            questions,
            count: sub.len(),
            acc: accuracy(&sub)?,
            auc: auc(&sub).ok(),
        });
    }
    Ok(rows)
}

// ---------------------------------------------------------------------------
// Pipeline

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub hidden: Vec<usize>,
    pub feature_dim: usize,
    pub dropout: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        let a = KbArchitecture::new(1, 1, 1);
        ModelConfig {
            hidden: a.hidden,
            feature_dim: a.feature_dim,
            dropout: a.dropout,
        }
    }
}

impl ModelConfig {
    pub fn architecture<'a>(
        &self,
        units: impl IntoIterator<Item = &'a TaskUnit>,
    ) -> Result<KbArchitecture> {
        let mut arch = KbArchitecture::for_pool(units)?;
        arch.hidden = self.hidden.clone();
        arch.feature_dim = self.feature_dim;
        arch.dropout = self.dropout;
        arch.validate()?;
        Ok(arch)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SeparationConfig {
    pub enabled: bool,
    pub bins: usize,
    pub keep_fraction: f64,
    /// Class weights; empirical priors when absent.
    pub kappa: Option<[f64; 2]>,
}

impl Default for SeparationConfig {
    fn default() -> Self {
        SeparationConfig {
            enabled: true,
            bins: 16,
            keep_fraction: 0.75,
            kappa: None,
        }
    }
}

/// Everything a fit or an experiment needs besides the data.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PipelineConfig {
    pub meta: MetaConfig,
    pub model: ModelConfig,
    pub heads: HeadConfig,
    pub separation: SeparationConfig,
    /// Meta-train the knowledge base; otherwise start from Xavier init.
    pub use_meta: bool,
    pub use_ppm: bool,
    pub use_perclass: bool,
    /// Fine-tuning steps per task in the task-incremental protocol.
    pub sequence_steps: usize,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            meta: MetaConfig::default(),
            model: ModelConfig::default(),
            heads: HeadConfig::default(),
            separation: SeparationConfig::default(),
            use_meta: true,
            use_ppm: true,
            use_perclass: true,
            sequence_steps: 50,
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<()> {
        self.meta.validate()?;
        self.heads.validate()?;
        if self.separation.bins < 2 {
            return Err(Error::invalid("separation.bins must be at least 2"));
        }
        if !(self.separation.keep_fraction > 0.0 && self.separation.keep_fraction <= 1.0) {
            return Err(Error::invalid(
                "separation.keep_fraction must lie in (0, 1]",
            ));
        }
        Ok(())
    }
}

/// Splits every unit that has no support/query split yet.
pub fn ensure_split(units: &[TaskUnit], config: &MetaConfig) -> Result<Vec<TaskUnit>> {
    units
        .iter()
        .enumerate()
        .map(|(i, u)| {
            if u.is_split() {
                Ok(u.clone())
            } else {
                crate::data::split_support_query(
                    u,
                    config.support_fraction,
                    mix_seed(config.seed, 7_000 + i as u64),
                )
            }
        })
        .collect()
}

/// θ_M* from the pool, or a Xavier init when meta-training is off.
pub fn initial_params(
    pool: &[TaskUnit],
    arch: &KbArchitecture,
    config: &PipelineConfig,
) -> Result<ParamSet> {
    if config.use_meta && !pool.is_empty() {
        Ok(meta::meta_train_kb(pool, arch, &config.meta, None)?.params)
    } else {
        knowledge_base::init_params(arch, config.meta.seed)
    }
}

/// Anchor at `params` with sensitivity folded in over every pool unit.
pub fn pool_importance(
    params: &ParamSet,
    pool: &[TaskUnit],
    samples: usize,
) -> Result<Option<ImportanceMap>> {
    let mut imp: Option<ImportanceMap> = None;
    for unit in pool {
        imp = Some(ppm::update_anchor(imp.as_ref(), params, unit, samples)?);
    }
    Ok(imp)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Heads {
    pub params: HeadParams,
    pub mask: SeparationMask,
}

/// A knowledge base adapted to one unit, optionally with per-class heads.
#[derive(Clone, Debug)]
pub struct FittedUnit {
    pub kb: ParamSet,
    pub heads: Option<Heads>,
}

/// Trains heads on the unit's support features of `kb`.
pub fn fit_heads(kb: &ParamSet, unit: &TaskUnit, config: &PipelineConfig) -> Result<Heads> {
    let x = knowledge_base::features(kb, unit, &unit.support)?;
    let labels: Vec<u8> = unit
        .support
        .iter()
        .map(|&i| unit.records[i].score)
        .collect();
    let mask = if config.separation.enabled {
        perclass::kl_separation(
            &x,
            &labels,
            config.separation.kappa,
            config.separation.bins,
            config.separation.keep_fraction,
        )?
    } else {
        SeparationMask::all(x.cols())
    };
    let params = perclass::train_heads(
        &x,
        &labels,
        &config.heads,
        Some(&mask),
        mix_seed(config.meta.seed, 0x4EAD),
    )?;
    Ok(Heads { params, mask })
}

/// Fine-tunes `init` on the unit's support set, then fits heads if enabled.
pub fn fit_unit(
    init: &ParamSet,
    unit: &TaskUnit,
    config: &PipelineConfig,
    importance: Option<&ImportanceMap>,
) -> Result<FittedUnit> {
    let ppm = if config.use_ppm { importance } else { None };
    let kb = meta::kb_test_support(init, unit, &config.meta, ppm)?.params;
    let heads = if config.use_perclass {
        Some(fit_heads(&kb, unit, config)?)
    } else {
        None
    };
    Ok(FittedUnit { kb, heads })
}

/// KB probabilities thresholded at 0.5.
pub fn predict_kb(kb: &ParamSet, unit: &TaskUnit, indices: &[usize]) -> Result<PredictionSet> {
    let probs = knowledge_base::predict(kb, unit, indices)?;
    let (scores, questions) = truth(unit, indices);
    PredictionSet::thresholded(probs, scores, questions)
}

fn truth(unit: &TaskUnit, indices: &[usize]) -> (Vec<u8>, Vec<usize>) {
    indices
        .iter()
        .map(|&i| (unit.records[i].score, unit.records[i].question))
        .unzip()
}

/// Head decisions; the probability reported is `σ(f_1 − f_0)`, which
/// thresholds at 0.5 exactly where the argmax flips.
pub fn predict_heads(
    kb: &ParamSet,
    heads: &Heads,
    unit: &TaskUnit,
    indices: &[usize],
) -> Result<PredictionSet> {
    let x = knowledge_base::features(kb, unit, indices)?;
    let diff = perclass::score_difference(&heads.params, &x, Some(&heads.mask))?;
    let labels = diff.iter().map(|&d| u8::from(d > 0.0)).collect();
    let probs = diff.iter().map(|&d| sigmoid(d)).collect();
    let (scores, questions) = truth(unit, indices);
    PredictionSet::new(probs, labels, scores, questions)
}

impl FittedUnit {
    pub fn predict(&self, unit: &TaskUnit, indices: &[usize]) -> Result<PredictionSet> {
        match &self.heads {
            Some(h) => predict_heads(&self.kb, h, unit, indices),
            None => predict_kb(&self.kb, unit, indices),
        }
    }
}

// ---------------------------------------------------------------------------
// Task-incremental protocol

#[derive(Clone, Debug)]
pub struct ContinualOutcome {
    pub matrix: EvalMatrix,
    pub bwt: f64,
    pub final_params: ParamSet,
}

/// Starts from `init` (θ_M* or a fresh init), then for each task in order:
/// fine-tune for `sequence_steps` with or without the protection penalty,
/// move the anchor if protecting, and score the KB on the query set of
/// every task seen so far. `pool` supplies the initial anchor.
pub fn run_continual_from(
    init: &ParamSet,
    pool: &[TaskUnit],
    sequence: &[TaskUnit],
    config: &PipelineConfig,
    ppm_enabled: bool,
    metric: Metric,
) -> Result<ContinualOutcome> {
    if sequence.len() < 2 {
        return Err(Error::TooFewTasks(sequence.len()));
    }
    let samples = config.meta.importance_samples;
    let mut importance = if ppm_enabled {
        pool_importance(init, pool, samples)?
    } else {
        None
    };
    let step_config = MetaConfig {
        fine_tune_steps: config.sequence_steps,
        ..config.meta.clone()
    };
    let mut current = init.snapshot();
    let mut matrix = EvalMatrix::new(metric, sequence.iter().map(|u| u.id.clone()).collect());
    for (r, task) in sequence.iter().enumerate() {
        let ppm = if ppm_enabled {
            importance.as_ref()
        } else {
            None
        };
        current = meta::kb_test_support(&current, task, &step_config, ppm)?.params;
        if ppm_enabled {
            importance = Some(ppm::update_anchor(
                importance.as_ref(),
                &current,
                task,
                samples,
            )?);
        }
        for (t, seen) in sequence[..=r].iter().enumerate() {
            let preds = predict_kb(&current, seen, &seen.query)?;
            matrix.set(r, t, metric.compute(&preds)?)?;
        }
        log::info!(
            "trained through {}: {:?}",
            task.id,
            (0..=r).map(|t| matrix.get(r, t)).collect::<Vec<_>>()
        );
    }
    let bwt = matrix.bwt()?;
    Ok(ContinualOutcome {
        matrix,
        bwt,
        final_params: current,
    })
}

/// Meta-trains on `pool` (when enabled) and runs the sequence.
pub fn run_continual(
    pool: &[TaskUnit],
    sequence: &[TaskUnit],
    config: &PipelineConfig,
    ppm_enabled: bool,
) -> Result<ContinualOutcome> {
    config.validate()?;
    let pool = ensure_split(pool, &config.meta)?;
    let sequence = ensure_split(sequence, &config.meta)?;
    let arch = config.model.architecture(pool.iter().chain(&sequence))?;
    let init = initial_params(&pool, &arch, config)?;
    run_continual_from(&init, &pool, &sequence, config, ppm_enabled, Metric::Auc)
}

// ---------------------------------------------------------------------------
// Ablation

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Arm {
    Full,
    NoKb,
    NoPpm,
    NoPerClass,
}

impl Arm {
    pub const ALL: [Arm; 4] = [Arm::Full, Arm::NoKb, Arm::NoPpm, Arm::NoPerClass];

    pub fn label(self) -> &'static str {
        match self {
            Arm::Full => "full",
            Arm::NoKb => "w/o KB",
            Arm::NoPpm => "w/o PPM",
            Arm::NoPerClass => "w/o Per-class",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub arm: Arm,
    pub acc: f64,
    pub auc: Option<f64>,
    pub rmse: f64,
}

/// Scores the four arms on `test`'s query set with shared seeds.
///
/// * full: θ_M* → fine-tune with the penalty anchored at θ_M* → heads
/// * w/o KB: Xavier init → fine-tune → heads
/// * w/o PPM: θ_M* → fine-tune without the penalty → heads
/// * w/o Per-class: θ_M* → fine-tune with the penalty → `1[p > 0.5]`
pub fn run_ablation(
    pool: &[TaskUnit],
    test: &TaskUnit,
    config: &PipelineConfig,
) -> Result<Vec<AblationRow>> {
    config.validate()?;
    let pool = ensure_split(pool, &config.meta)?;
    let test = ensure_split(std::slice::from_ref(test), &config.meta)?.remove(0);
    let arch = config.model.architecture(pool.iter().chain([&test]))?;
    let meta_init = meta::meta_train_kb(&pool, &arch, &config.meta, None)?.params;
    run_ablation_with(&meta_init, &pool, &test, config)
}

/// The ablation arms around an already meta-trained `meta_init`. `pool` and
/// `test` must already be split.
pub fn run_ablation_with(
    meta_init: &ParamSet,
    pool: &[TaskUnit],
    test: &TaskUnit,
    config: &PipelineConfig,
) -> Result<Vec<AblationRow>> {
    config.validate()?;
    let importance = pool_importance(meta_init, pool, config.meta.importance_samples)?;
    let xavier = knowledge_base::init_params(meta_init.kb_arch()?, config.meta.seed)?;
    Arm::ALL
        .iter()
        .map(|&arm| {
            let arm_config = PipelineConfig {
                use_ppm: arm != Arm::NoPpm,
                use_perclass: arm != Arm::NoPerClass,
                use_meta: arm != Arm::NoKb,
                ..config.clone()
            };
            let init = if arm == Arm::NoKb { &xavier } else { meta_init };
            // a fresh init has no meaningful anchor
            let imp = if arm == Arm::NoKb {
                None
            } else {
                importance.as_ref()
            };
            let fitted = fit_unit(init, test, &arm_config, imp)?;
            let preds = fitted.predict(test, &test.query)?;
            Ok(AblationRow {
                arm,
                acc: accuracy(&preds)?,
                auc: auc(&preds).ok(),
                rmse: rmse(&preds)?,
            })
        })
        .collect()
}

// ---------------------------------------------------------------------------
// CSV output

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub run_id: String,
    pub arm: String,
    pub task_id: String,
    pub metric: String,
    pub value: f64,
}

pub fn metric_rows(run_id: &str, arm: &str, task_id: &str, p: &PredictionSet) -> Vec<MetricRow> {
    let mut rows = Vec::new();
    for m in [Metric::Acc, Metric::Rmse, Metric::Auc] {
        if let Ok(value) = m.compute(p) {
            rows.push(MetricRow {
                run_id: run_id.into(),
                arm: arm.into(),
                task_id: task_id.into(),
                metric: m.to_string(),
                value,
            });
        }
    }
    rows
}

pub fn write_metrics_csv(rows: &[MetricRow], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_metrics_csv(path: &Path) -> Result<Vec<MetricRow>> {
    let mut r = csv::Reader::from_path(path)?;
    Ok(r.deserialize().collect::<std::result::Result<_, _>>()?)
}

/// Header `trained_through,<task ids…>`, one row per trained-through task
/// with blanks above the diagonal, then a `BWT` footer row.
pub fn write_matrix_csv(m: &EvalMatrix, path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    let mut header = vec!["trained_through".to_string()];
    header.extend(m.task_ids.iter().cloned());
    w.write_record(&header)?;
    for r in 0..m.size() {
        let mut row = vec![m.task_ids[r].clone()];
        for t in 0..m.size() {
            row.push(m.get(r, t).map(|v| v.to_string()).unwrap_or_default());
        }
        w.write_record(&row)?;
    }
    let mut footer = vec![
        "BWT".to_string(),
        m.bwt().map(|v| v.to_string()).unwrap_or_default(),
    ];
    footer.resize(m.size() + 1, String::new());
    w.write_record(&footer)?;
    w.flush()?;
    Ok(())
}

pub fn write_longtail_csv(rows: &[BucketRow], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["bucket", "count", "acc", "auc"])?;
    for r in rows {
        w.write_record([
            r.bucket.clone(),
            r.count.to_string(),
            r.acc.to_string(),
            r.auc.map(|v| v.to_string()).unwrap_or_default(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_synthetic, SyntheticWorldConfig};

    fn preds(probs: &[f64], scores: &[u8]) -> PredictionSet {
        PredictionSet::thresholded(probs.to_vec(), scores.to_vec(), vec![0; probs.len()]).unwrap()
    }

    #[test]
    fn perfect_predictions() {
        let p = preds(&[1.0, 0.0, 1.0], &[1, 0, 1]);
        assert_eq!(accuracy(&p).unwrap(), 1.0);
        assert_eq!(rmse(&p).unwrap(), 0.0);
        assert_eq!(auc(&p).unwrap(), 1.0);
    }

    #[test]
    fn auc_fixtures() {
        assert_eq!(auc(&preds(&[0.9, 0.4, 0.6], &[1, 0, 1])).unwrap(), 1.0);
        assert_eq!(auc(&preds(&[0.5; 4], &[1, 0, 1, 0])).unwrap(), 0.5);
        assert_eq!(auc(&preds(&[0.2, 0.8], &[1, 0])).unwrap(), 0.0);
        assert!(matches!(
            auc(&preds(&[0.3, 0.7], &[1, 1])),
            Err(Error::UndefinedAuc)
        ));
    }

    #[test]
    fn rmse_hand_value() {
        let p = preds(&[0.8, 0.4], &[1, 0]);
        assert!((rmse(&p).unwrap() - ((0.04 + 0.16) / 2.0f64).sqrt()).abs() < 1e-15);
    }

    #[test]
    fn empty_set_rejected() {
        assert!(accuracy(&preds(&[], &[])).is_err());
    }

    #[test]
    fn bwt_needs_two_tasks_and_full_triangle() {
        let m = EvalMatrix::from_rows(Metric::Auc, &[vec![0.7]]).unwrap();
        assert!(matches!(m.bwt(), Err(Error::TooFewTasks(1))));
        let mut m = EvalMatrix::new(Metric::Auc, vec!["a".into(), "b".into()]);
        m.set(0, 0, 0.7).unwrap();
        m.set(1, 1, 0.7).unwrap();
        assert!(matches!(
            m.bwt(),
            Err(Error::MissingEntry { row: 1, col: 0 })
        ));
        assert!(m.set(0, 1, 0.5).is_err());
    }

    #[test]
    fn no_forgetting_is_zero() {
        let m = EvalMatrix::from_rows(
            Metric::Auc,
            &[vec![0.7], vec![0.6, 0.8], vec![0.7, 0.8, 0.9]],
        )
        .unwrap();
        assert!(m.bwt().unwrap().abs() < 1e-15);
    }

    #[test]
    fn bucket_assignment() {
        let unit = generate_synthetic(&SyntheticWorldConfig::default())
            .unwrap()
            .unit;
        let counts = unit.question_counts();
        let idx: Vec<usize> = (0..unit.len()).collect();
        let p = PredictionSet::thresholded(
            vec![0.9; idx.len()],
            unit.records.iter().map(|r| r.score).collect(),
            unit.records.iter().map(|r| r.question).collect(),
        )
        .unwrap();
        let rows = longtail_buckets(&p, &unit, &DEFAULT_BUCKETS).unwrap();
        for row in &rows {
            let expected: usize = counts.iter().filter(|&&c| c >= row.lo && c <= row.hi).sum();
            assert_eq!(row.count, expected, "{}", row.bucket);
        }
        assert!(longtail_buckets(&p, &unit, &[(6, 10), (10, 15)]).is_err());
    }
}
