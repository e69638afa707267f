//! Response logs, Q-matrices and task units.
//!
//! A [`TaskUnit`] is one self-contained bundle of student responses plus the
//! Q-matrix of the questions they answered. Units come from two places:
//! CDBD-style JSON logs ([`ingest_json`]) and the DINA-style simulator
//! ([`generate_synthetic`], [`generate_family`],
//! [`generate_drifting_sequence`]). Student, question and skill ids inside a
//! unit are always dense indices.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::fs;
use std::path::{Path, PathBuf};

use rand::distributions::WeightedIndex;
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Error, Result};

/// Students need strictly more than this many records to be kept.
pub const MIN_RECORDS_EXCLUSIVE: usize = 5;

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ResponseRecord {
    pub student: usize,
    pub question: usize,
    pub skills: Vec<usize>,
    /// 1 = correct.
    pub score: u8,
}

/// Binary question × skill incidence.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct QMatrix {
    num_questions: usize,
    num_skills: usize,
    entries: Vec<bool>,
}

impl QMatrix {
    /// Builds from per-question skill lists. Every row must be non-empty.
    pub fn from_skill_lists(num_skills: usize, rows: &[Vec<usize>]) -> Result<Self> {
        let mut entries = vec![false; rows.len() * num_skills];
        for (q, skills) in rows.iter().enumerate() {
            if skills.is_empty() {
                return Err(Error::EmptyQRow(q));
            }
            for &k in skills {
                if k >= num_skills {
                    return Err(Error::invalid(format!(
                        "skill {k} out of range for question {q} ({num_skills} skills)"
                    )));
                }
                entries[q * num_skills + k] = true;
            }
        }
        Ok(QMatrix {
            num_questions: rows.len(),
            num_skills,
            entries,
        })
    }

    pub fn num_questions(&self) -> usize {
        self.num_questions
    }

    pub fn num_skills(&self) -> usize {
        self.num_skills
    }

    pub fn row(&self, question: usize) -> &[bool] {
        &self.entries[question * self.num_skills..(question + 1) * self.num_skills]
    }

    pub fn row_f64(&self, question: usize) -> Vec<f64> {
        self.row(question)
            .iter()
            .map(|&b| if b { 1.0 } else { 0.0 })
            .collect()
    }

    pub fn skills(&self, question: usize) -> Vec<usize> {
        self.row(question)
            .iter()
            .enumerate()
            .filter_map(|(k, &b)| b.then_some(k))
            .collect()
    }

    pub fn skill_lists(&self) -> Vec<Vec<usize>> {
        (0..self.num_questions).map(|q| self.skills(q)).collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TaskUnit {
    pub id: String,
    pub records: Vec<ResponseRecord>,
    pub qmatrix: QMatrix,
    pub num_students: usize,
    pub support: Vec<usize>,
    pub query: Vec<usize>,
    pub split_seed: Option<u64>,
}

impl TaskUnit {
    /// Validates record ranges, scores and Q-matrix consistency.
    pub fn new(
        id: impl Into<String>,
        records: Vec<ResponseRecord>,
        qmatrix: QMatrix,
        num_students: usize,
    ) -> Result<Self> {
        for (i, r) in records.iter().enumerate() {
            if r.score > 1 {
                return Err(Error::invalid(format!(
                    "record {i}: score {} not in {{0,1}}",
                    r.score
                )));
            }
            if r.student >= num_students || r.question >= qmatrix.num_questions() {
                return Err(Error::invalid(format!("record {i}: index out of range")));
            }
            if r.skills != qmatrix.skills(r.question) {
                return Err(Error::invalid(format!(
                    "record {i}: skills disagree with Q-matrix row {}",
                    r.question
                )));
            }
        }
        Ok(TaskUnit {
            id: id.into(),
            records,
            qmatrix,
            num_students,
            support: Vec::new(),
            query: Vec::new(),
            split_seed: None,
        })
    }

    pub fn num_questions(&self) -> usize {
        self.qmatrix.num_questions()
    }

    pub fn num_skills(&self) -> usize {
        self.qmatrix.num_skills()
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn is_split(&self) -> bool {
        !self.support.is_empty() || !self.query.is_empty()
    }

    pub fn select(&self, indices: &[usize]) -> Vec<&ResponseRecord> {
        indices.iter().map(|&i| &self.records[i]).collect()
    }

    /// Total responses per question over the whole unit.
    pub fn question_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.num_questions()];
        for r in &self.records {
            counts[r.question] += 1;
        }
        counts
    }

    pub fn student_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.num_students];
        for r in &self.records {
            counts[r.student] += 1;
        }
        counts
    }
}

// ---------------------------------------------------------------------------
// JSON ingestion

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct IngestReport {
    pub total: usize,
    pub null_records: usize,
    pub missing_fields: usize,
    pub duplicates: usize,
    pub sparse_students: usize,
    pub sparse_records: usize,
    pub kept: usize,
}

#[derive(Clone, Debug)]
pub struct Ingested {
    pub units: Vec<TaskUnit>,
    pub report: IngestReport,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct WireRecord {
    user_id: i64,
    exercise_id: i64,
    knowledge_code: Vec<i64>,
    score: u8,
}

/// Reads a CDBD-style JSON array of
/// `{user_id, exercise_id, knowledge_code, score}` records.
///
/// Null and incomplete records and exact duplicates are dropped, then every
/// student with five or fewer records. Ids are densely re-indexed in
/// ascending order of the original ids, so ingesting a unit written by
/// [`write_unit`] reproduces it exactly.
pub fn ingest_json(path: impl AsRef<Path>) -> Result<Ingested> {
    let path = path.as_ref();
    let text = fs::read_to_string(path)?;
    let id = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "unit".into());
    ingest_str(&text, &id)
}

fn byte_offset(text: &str, line: usize, column: usize) -> usize {
    let mut offset = 0;
    for (i, l) in text.split_inclusive('\n').enumerate() {
        if i + 1 == line {
            return offset + column.saturating_sub(1);
        }
        offset += l.len();
    }
    offset
}

fn as_index(v: &Value) -> Option<i64> {
    match v {
        Value::Number(n) => n
            .as_i64()
            .or_else(|| n.as_f64().filter(|f| f.fract() == 0.0).map(|f| f as i64)),
        _ => None,
    }
}

fn parse_record(v: &Value) -> Option<(i64, i64, Vec<i64>, u8)> {
    let obj = v.as_object()?;
    let user = as_index(obj.get("user_id")?)?;
    let exercise = as_index(obj.get("exercise_id")?)?;
    let mut skills = match obj.get("knowledge_code")? {
        Value::Array(items) => items.iter().map(as_index).collect::<Option<Vec<_>>>()?,
        other => vec![as_index(other)?],
    };
    if skills.is_empty() {
        return None;
    }
    skills.sort_unstable();
    skills.dedup();
    let score = match obj.get("score")? {
        Value::Number(n) => match n.as_f64()? {
            0.0 => 0,
            1.0 => 1,
            _ => return None,
        },
        Value::Bool(b) => u8::from(*b),
        _ => return None,
    };
    Some((user, exercise, skills, score))
}

pub fn ingest_str(text: &str, unit_id: &str) -> Result<Ingested> {
    let values: Vec<Value> = serde_json::from_str(text).map_err(|e| Error::MalformedJson {
        offset: byte_offset(text, e.line(), e.column()),
        message: e.to_string(),
    })?;
    let mut report = IngestReport {
        total: values.len(),
        ..Default::default()
    };

    let mut seen = HashSet::new();
    let mut raw = Vec::new();
    for v in &values {
        if v.is_null() {
            report.null_records += 1;
            continue;
        }
        let Some(rec) = parse_record(v) else {
            report.missing_fields += 1;
            continue;
        };
        if !seen.insert(rec.clone()) {
            report.duplicates += 1;
            continue;
        }
        raw.push(rec);
    }

    let mut per_student: BTreeMap<i64, usize> = BTreeMap::new();
    for r in &raw {
        *per_student.entry(r.0).or_default() += 1;
    }
    report.sparse_students = per_student
        .values()
        .filter(|&&c| c <= MIN_RECORDS_EXCLUSIVE)
        .count();
    let before = raw.len();
    raw.retain(|r| per_student[&r.0] > MIN_RECORDS_EXCLUSIVE);
    report.sparse_records = before - raw.len();
    if raw.is_empty() {
        return Err(Error::NoUsableRecords);
    }

    let students: BTreeSet<i64> = raw.iter().map(|r| r.0).collect();
    let questions: BTreeSet<i64> = raw.iter().map(|r| r.1).collect();
    let skills: BTreeSet<i64> = raw.iter().flat_map(|r| r.2.iter().copied()).collect();
    let dense = |set: &BTreeSet<i64>| -> BTreeMap<i64, usize> {
        set.iter().enumerate().map(|(i, &v)| (v, i)).collect()
    };
    let (smap, qmap, kmap) = (dense(&students), dense(&questions), dense(&skills));

    let mut rows = vec![BTreeSet::new(); questions.len()];
    for r in &raw {
        rows[qmap[&r.1]].extend(r.2.iter().map(|k| kmap[k]));
    }
    let rows: Vec<Vec<usize>> = rows.into_iter().map(|s| s.into_iter().collect()).collect();
    let qmatrix = QMatrix::from_skill_lists(skills.len(), &rows)?;

    let records = raw
        .iter()
        .map(|r| {
            let q = qmap[&r.1];
            ResponseRecord {
                student: smap[&r.0],
                question: q,
                skills: rows[q].clone(),
                score: r.3,
            }
        })
        .collect::<Vec<_>>();
    report.kept = records.len();
    let unit = TaskUnit::new(unit_id, records, qmatrix, students.len())?;
    Ok(Ingested {
        units: vec![unit],
        report,
    })
}

// ---------------------------------------------------------------------------
// Canonical unit files

/// Sidecar written next to a unit's record file so the unit (including its
/// split) can be replayed exactly.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct UnitManifest {
    pub unit_id: String,
    pub num_students: usize,
    pub num_questions: usize,
    pub num_skills: usize,
    pub split_seed: Option<u64>,
    pub support: Vec<usize>,
    pub query: Vec<usize>,
    pub qmatrix: Vec<Vec<usize>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mastery: Option<Vec<Vec<u8>>>,
}

pub fn records_json(unit: &TaskUnit) -> Result<String> {
    let wire: Vec<WireRecord> = unit
        .records
        .iter()
        .map(|r| WireRecord {
            user_id: r.student as i64,
            exercise_id: r.question as i64,
            knowledge_code: r.skills.iter().map(|&k| k as i64).collect(),
            score: r.score,
        })
        .collect();
    let mut s = serde_json::to_string(&wire)?;
    s.push('\n');
    Ok(s)
}

pub fn unit_paths(dir: &Path, id: &str) -> (PathBuf, PathBuf) {
    (
        dir.join(format!("{id}.json")),
        dir.join(format!("{id}.manifest.json")),
    )
}

/// Writes `<id>.json` (records) and `<id>.manifest.json` into `dir`.
pub fn write_unit(
    unit: &TaskUnit,
    mastery: Option<&[Vec<bool>]>,
    dir: &Path,
) -> Result<(PathBuf, PathBuf)> {
    fs::create_dir_all(dir)?;
    let (rec_path, man_path) = unit_paths(dir, &unit.id);
    fs::write(&rec_path, records_json(unit)?)?;
    let manifest = UnitManifest {
        unit_id: unit.id.clone(),
        num_students: unit.num_students,
        num_questions: unit.num_questions(),
        num_skills: unit.num_skills(),
        split_seed: unit.split_seed,
        support: unit.support.clone(),
        query: unit.query.clone(),
        qmatrix: unit.qmatrix.skill_lists(),
        mastery: mastery.map(|m| {
            m.iter()
                .map(|row| row.iter().map(|&b| u8::from(b)).collect())
                .collect()
        }),
    };
    let mut text = serde_json::to_string_pretty(&manifest)?;
    text.push('\n');
    fs::write(&man_path, text)?;
    Ok((rec_path, man_path))
}

/// Reads a unit written by [`write_unit`], trusting the manifest for sizes,
/// Q-matrix and split. Returns the stored mastery matrix when present.
pub fn read_unit(dir: &Path, id: &str) -> Result<(TaskUnit, Option<Vec<Vec<bool>>>)> {
    let (rec_path, man_path) = unit_paths(dir, id);
    let manifest: UnitManifest = serde_json::from_str(&fs::read_to_string(&man_path)?)?;
    let text = fs::read_to_string(&rec_path)?;
    let wire: Vec<WireRecord> = serde_json::from_str(&text).map_err(|e| Error::MalformedJson {
        offset: byte_offset(&text, e.line(), e.column()),
        message: e.to_string(),
    })?;
    let qmatrix = QMatrix::from_skill_lists(manifest.num_skills, &manifest.qmatrix)?;
    let records = wire
        .into_iter()
        .map(|w| {
            if w.user_id < 0 || w.exercise_id < 0 {
                return Err(Error::invalid("negative id in canonical unit"));
            }
            Ok(ResponseRecord {
                student: w.user_id as usize,
                question: w.exercise_id as usize,
                skills: w.knowledge_code.iter().map(|&k| k as usize).collect(),
                score: w.score,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let mut unit = TaskUnit::new(manifest.unit_id, records, qmatrix, manifest.num_students)?;
    let n = unit.len();
    if manifest
        .support
        .iter()
        .chain(&manifest.query)
        .any(|&i| i >= n)
    {
        return Err(Error::invalid("split index out of range"));
    }
    unit.support = manifest.support;
    unit.query = manifest.query;
    unit.split_seed = manifest.split_seed;
    let mastery = manifest.mastery.map(|m| {
        m.into_iter()
            .map(|row| row.into_iter().map(|b| b != 0).collect())
            .collect()
    });
    Ok((unit, mastery))
}

// ---------------------------------------------------------------------------
// Synthetic populations

fn default_max_skills() -> usize {
    2
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticWorldConfig {
    pub num_students: usize,
    pub num_questions: usize,
    pub num_skills: usize,
    pub slip: f64,
    pub guess: f64,
    /// Exponent of the question-popularity power law.
    pub zipf_exponent: f64,
    pub records_target: usize,
    /// Per-step probability that a mastery bit flips in a drifting sequence.
    pub drift: f64,
    pub rng_seed: u64,
    #[serde(default = "default_max_skills")]
    pub max_skills_per_question: usize,
}

impl Default for SyntheticWorldConfig {
    fn default() -> Self {
        SyntheticWorldConfig {
            num_students: 60,
            num_questions: 80,
            num_skills: 8,
            slip: 0.1,
            guess: 0.2,
            zipf_exponent: 1.0,
            records_target: 1500,
            drift: 0.1,
            rng_seed: 0,
            max_skills_per_question: 2,
        }
    }
}

impl SyntheticWorldConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_students == 0 || self.num_questions == 0 || self.num_skills == 0 {
            return Err(Error::invalid("world sizes must be positive"));
        }
        if !(0.0..1.0).contains(&self.slip) || !(0.0..1.0).contains(&self.guess) {
            return Err(Error::invalid("slip and guess must lie in [0, 1)"));
        }
        if self.slip + self.guess >= 1.0 {
            return Err(Error::invalid("slip + guess must be below 1"));
        }
        if !(self.zipf_exponent > 0.0) {
            return Err(Error::invalid("zipf_exponent must be positive"));
        }
        if !(0.0..=1.0).contains(&self.drift) {
            return Err(Error::invalid("drift must lie in [0, 1]"));
        }
        if self.max_skills_per_question == 0 || self.max_skills_per_question > self.num_skills {
            return Err(Error::invalid(
                "max_skills_per_question must be in [1, num_skills]",
            ));
        }
        let needed = self.num_students * (MIN_RECORDS_EXCLUSIVE + 1);
        if self.records_target < needed {
            return Err(Error::invalid(format!(
                "records_target {} is below {} (every student needs more than {} records)",
                self.records_target, needed, MIN_RECORDS_EXCLUSIVE
            )));
        }
        Ok(())
    }
}

/// A generated unit together with the latent mastery that produced it.
#[derive(Clone, Debug)]
pub struct SyntheticUnit {
    pub unit: TaskUnit,
    /// `mastery[student][skill]`
    pub mastery: Vec<Vec<bool>>,
}

/// The deterministic DINA rule: correct iff every tested skill is mastered.
pub fn masters_all(mastery: &[bool], qrow: &[bool]) -> bool {
    qrow.iter().zip(mastery).all(|(&tested, &m)| !tested || m)
}

/// Zipf probability mass over popularity ranks `1..=n`.
pub fn zipf_masses(n: usize, exponent: f64) -> Vec<f64> {
    let weights: Vec<f64> = (1..=n).map(|k| (k as f64).powf(-exponent)).collect();
    let total: f64 = weights.iter().sum();
    weights.into_iter().map(|w| w / total).collect()
}

struct World {
    qmatrix: QMatrix,
    prevalence: Vec<f64>,
    popularity: WeightedIndex<f64>,
    // popularity rank -> question id
    order: Vec<usize>,
}

fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

fn build_world(cfg: &SyntheticWorldConfig) -> Result<World> {
    let mut rng = stream_rng(cfg.rng_seed, 0);
    let skills: Vec<usize> = (0..cfg.num_skills).collect();
    let rows: Vec<Vec<usize>> = (0..cfg.num_questions)
        .map(|_| {
            let k = rng.gen_range(1..=cfg.max_skills_per_question);
            let mut row: Vec<usize> = skills.choose_multiple(&mut rng, k).copied().collect();
            row.sort_unstable();
            row
        })
        .collect();
    let qmatrix = QMatrix::from_skill_lists(cfg.num_skills, &rows)?;
    let prevalence = (0..cfg.num_skills)
        .map(|_| rng.gen_range(0.3..0.85))
        .collect();
    let mut order: Vec<usize> = (0..cfg.num_questions).collect();
    order.shuffle(&mut rng);
    let popularity = WeightedIndex::new(zipf_masses(cfg.num_questions, cfg.zipf_exponent))
        .map_err(|e| Error::invalid(e.to_string()))?;
    Ok(World {
        qmatrix,
        prevalence,
        popularity,
        order,
    })
}

fn sample_mastery(
    world: &World,
    cfg: &SyntheticWorldConfig,
    rng: &mut ChaCha8Rng,
) -> Vec<Vec<bool>> {
    (0..cfg.num_students)
        .map(|_| world.prevalence.iter().map(|&p| rng.gen_bool(p)).collect())
        .collect()
}

fn sample_records(
    world: &World,
    cfg: &SyntheticWorldConfig,
    mastery: &[Vec<bool>],
    rng: &mut ChaCha8Rng,
) -> Vec<ResponseRecord> {
    let floor = MIN_RECORDS_EXCLUSIVE + 1;
    let mut students: Vec<usize> = (0..cfg.num_students)
        .flat_map(|s| std::iter::repeat_n(s, floor))
        .collect();
    students
        .extend((students.len()..cfg.records_target).map(|_| rng.gen_range(0..cfg.num_students)));
    students
        .into_iter()
        .map(|s| {
            let q = world.order[world.popularity.sample(rng)];
            let p = if masters_all(&mastery[s], world.qmatrix.row(q)) {
                1.0 - cfg.slip
            } else {
                cfg.guess
            };
            ResponseRecord {
                student: s,
                question: q,
                skills: world.qmatrix.skills(q),
                score: u8::from(rng.gen::<f64>() < p),
            }
        })
        .collect()
}

fn make_unit(
    world: &World,
    cfg: &SyntheticWorldConfig,
    id: String,
    mastery: Vec<Vec<bool>>,
    rng: &mut ChaCha8Rng,
) -> Result<SyntheticUnit> {
    let records = sample_records(world, cfg, &mastery, rng);
    let unit = TaskUnit::new(id, records, world.qmatrix.clone(), cfg.num_students)?;
    Ok(SyntheticUnit { unit, mastery })
}

/// One unit from a fresh world.
pub fn generate_synthetic(cfg: &SyntheticWorldConfig) -> Result<SyntheticUnit> {
    cfg.validate()?;
    let world = build_world(cfg)?;
    let mut rng = stream_rng(cfg.rng_seed, 1);
    let mastery = sample_mastery(&world, cfg, &mut rng);
    make_unit(
        &world,
        cfg,
        format!("synthetic_{}", cfg.rng_seed),
        mastery,
        &mut rng,
    )
}

/// `count` related units: one shared Q-matrix, skill prevalence, question
/// popularity and student cohort. Each unit's masteries are the cohort's
/// base masteries with every bit flipped independently with probability
/// `drift`, so units vary around a common population.
pub fn generate_family(cfg: &SyntheticWorldConfig, count: usize) -> Result<Vec<SyntheticUnit>> {
    cfg.validate()?;
    let world = build_world(cfg)?;
    let base = sample_mastery(&world, cfg, &mut stream_rng(cfg.rng_seed, 1));
    (0..count)
        .map(|i| {
            let mut rng = stream_rng(cfg.rng_seed, 2 + i as u64);
            let mut mastery = base.clone();
            flip_bits(&mut mastery, cfg.drift, &mut rng);
            make_unit(&world, cfg, format!("unit_{i:03}"), mastery, &mut rng)
        })
        .collect()
}

fn flip_bits(mastery: &mut [Vec<bool>], p: f64, rng: &mut ChaCha8Rng) {
    for row in mastery {
        for bit in row.iter_mut() {
            if rng.gen_bool(p) {
                *bit = !*bit;
            }
        }
    }
}

/// `count` sequential units over the same students; between consecutive
/// units every mastery bit flips independently with probability `drift`.
pub fn generate_drifting_sequence(
    cfg: &SyntheticWorldConfig,
    count: usize,
) -> Result<Vec<SyntheticUnit>> {
    cfg.validate()?;
    let world = build_world(cfg)?;
    let mut rng = stream_rng(cfg.rng_seed, 1);
    let mut mastery = sample_mastery(&world, cfg, &mut rng);
    let mut out = Vec::with_capacity(count);
    for i in 0..count {
        if i > 0 {
            flip_bits(&mut mastery, cfg.drift, &mut rng);
        }
        out.push(make_unit(
            &world,
            cfg,
            format!("task_{i:03}"),
            mastery.clone(),
            &mut rng,
        )?);
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Splits and batches

/// Stratified per-student support/query split.
///
/// The support total is `round(len * fraction)`, shared out per student by
/// largest remainder; every student with at least two records lands in both
/// sets. Index lists come back sorted.
pub fn split_support_query(unit: &TaskUnit, support_fraction: f64, seed: u64) -> Result<TaskUnit> {
    if !(support_fraction > 0.0 && support_fraction < 1.0) {
        return Err(Error::invalid("support_fraction must lie in (0, 1)"));
    }
    if unit.len() < 2 {
        return Err(Error::UnitTooSmall(unit.len()));
    }
    let mut groups: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, r) in unit.records.iter().enumerate() {
        groups.entry(r.student).or_default().push(i);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let groups: Vec<Vec<usize>> = groups
        .into_values()
        .map(|mut g| {
            g.shuffle(&mut rng);
            g
        })
        .collect();

    let bounds = |n: usize| if n >= 2 { (1, n - 1) } else { (n, n) };
    let mut take: Vec<usize> = Vec::with_capacity(groups.len());
    let mut remainders: Vec<(f64, usize)> = Vec::new();
    for (gi, g) in groups.iter().enumerate() {
        let exact = g.len() as f64 * support_fraction;
        let (lo, hi) = bounds(g.len());
        let base = (exact.floor() as usize).clamp(lo, hi);
        take.push(base);
        remainders.push((exact - base as f64, gi));
    }
    let target = (unit.len() as f64 * support_fraction).round() as usize;
    let mut current: usize = take.iter().sum();
    // hand out (or claw back) single records by largest (smallest) remainder
    remainders.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
    for &(_, gi) in &remainders {
        if current >= target {
            break;
        }
        if take[gi] < bounds(groups[gi].len()).1 {
            take[gi] += 1;
            current += 1;
        }
    }
    for &(_, gi) in remainders.iter().rev() {
        if current <= target {
            break;
        }
        if take[gi] > bounds(groups[gi].len()).0 {
            take[gi] -= 1;
            current -= 1;
        }
    }

    let mut support = Vec::new();
    let mut query = Vec::new();
    for (g, &k) in groups.iter().zip(&take) {
        support.extend_from_slice(&g[..k]);
        query.extend_from_slice(&g[k..]);
    }
    support.sort_unstable();
    query.sort_unstable();
    let mut out = unit.clone();
    out.support = support;
    out.query = query;
    out.split_seed = Some(seed);
    Ok(out)
}

/// Records sampled from one unit for one meta-iteration.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TaskSample {
    /// Index into the pool.
    pub unit: usize,
    pub support: Vec<usize>,
    pub query: Vec<usize>,
}

/// Draws `n` distinct units and `s` support and `s` query records from
/// each, with replacement.
pub fn sample_task_batch(
    pool: &[TaskUnit],
    n: usize,
    s: usize,
    seed: u64,
) -> Result<Vec<TaskSample>> {
    if pool.is_empty() {
        return Err(Error::invalid("empty task pool"));
    }
    if n == 0 || n > pool.len() {
        return Err(Error::invalid(format!(
            "batch size {n} must be in [1, {}]",
            pool.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let picks = rand::seq::index::sample(&mut rng, pool.len(), n);
    let draw = |from: &[usize], rng: &mut ChaCha8Rng| -> Vec<usize> {
        if from.is_empty() {
            return Vec::new();
        }
        (0..s).map(|_| from[rng.gen_range(0..from.len())]).collect()
    };
    Ok(picks
        .into_iter()
        .map(|u| {
            let support = draw(&pool[u].support, &mut rng);
            let query = draw(&pool[u].query, &mut rng);
            TaskSample {
                unit: u,
                support,
                query,
            }
        })
        .collect())
}
