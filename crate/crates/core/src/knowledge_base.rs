//! The knowledge base: an MLP over embedded responses.
//!
//! ```text
//! x (d) -> [linear, relu, dropout]* -> linear, relu = X_KB -> dropout -> linear = logit
//! ```
//!
//! `X_KB` is the penultimate activation. Stripping the classifier turns the
//! network into a feature extractor that emits `X_KB` only.

use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{sigmoid, GradMap, Graph, Mode, NodeId, ValueMap};
use crate::data::{ResponseRecord, TaskUnit};
use crate::embedding;
use crate::error::{Error, Result};
use crate::params::{Descriptor, ParamSet};
use crate::tensor::Tensor;

pub const CLASSIFIER_W: &str = "kb.cls.w";
pub const CLASSIFIER_B: &str = "kb.cls.b";

fn default_hidden() -> Vec<usize> {
    vec![64]
}

fn default_feature_dim() -> usize {
    32
}

fn default_dropout() -> f64 {
    0.5
}

fn default_true() -> bool {
    true
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct KbArchitecture {
    pub num_students: usize,
    pub num_questions: usize,
    /// Input dimension `d`; equals the skill count.
    pub num_skills: usize,
    #[serde(default = "default_hidden")]
    pub hidden: Vec<usize>,
    #[serde(default = "default_feature_dim")]
    pub feature_dim: usize,
    #[serde(default = "default_dropout")]
    pub dropout: f64,
    #[serde(default = "default_true")]
    pub classifier: bool,
}

impl KbArchitecture {
    /// Default layer sizes for the given table dimensions.
    pub fn new(num_students: usize, num_questions: usize, num_skills: usize) -> Self {
        KbArchitecture {
            num_students,
            num_questions,
            num_skills,
            hidden: default_hidden(),
            feature_dim: default_feature_dim(),
            dropout: default_dropout(),
            classifier: true,
        }
    }

    /// Sized to hold every unit of `pool`.
    pub fn for_pool<'a>(pool: impl IntoIterator<Item = &'a TaskUnit>) -> Result<Self> {
        let mut it = pool.into_iter().peekable();
        let skills = it
            .peek()
            .map(|u| u.num_skills())
            .ok_or_else(|| Error::invalid("empty pool"))?;
        let (mut a, mut b) = (0, 0);
        for u in it {
            if u.num_skills() != skills {
                return Err(Error::invalid("units in a pool must share the skill count"));
            }
            a = a.max(u.num_students);
            b = b.max(u.num_questions());
        }
        Ok(Self::new(a, b, skills))
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_skills == 0 || self.num_students == 0 || self.num_questions == 0 {
            return Err(Error::invalid("table sizes must be positive"));
        }
        if self.feature_dim == 0 || self.hidden.contains(&0) {
            return Err(Error::invalid("layer widths must be positive"));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::invalid("dropout must lie in [0, 1)"));
        }
        Ok(())
    }

    /// `(fan_in, fan_out)` of each trunk layer, feature layer last.
    pub fn trunk_layers(&self) -> Vec<(usize, usize)> {
        let mut dims = vec![self.num_skills];
        dims.extend(&self.hidden);
        dims.push(self.feature_dim);
        dims.windows(2).map(|w| (w[0], w[1])).collect()
    }

    pub fn fits(&self, unit: &TaskUnit) -> bool {
        unit.num_students <= self.num_students
            && unit.num_questions() <= self.num_questions
            && unit.num_skills() == self.num_skills
    }
}

pub fn layer_names(i: usize) -> (String, String) {
    (format!("kb.{i}.w"), format!("kb.{i}.b"))
}

/// Uniform on `±sqrt(6 / (fan_in + fan_out))`, shaped `[fan_out, fan_in]`.
pub fn xavier_uniform(fan_out: usize, fan_in: usize, rng: &mut impl Rng) -> Tensor {
    let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let data = (0..fan_in * fan_out)
        .map(|_| rng.gen_range(-bound..=bound))
        .collect();
    Tensor::from_vec(fan_out, fan_in, data)
}

pub fn init_params(arch: &KbArchitecture, seed: u64) -> Result<ParamSet> {
    arch.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut arrays = embedding::init_tables(
        arch.num_students,
        arch.num_questions,
        arch.num_skills,
        &mut rng,
    );
    for (i, (fan_in, fan_out)) in arch.trunk_layers().into_iter().enumerate() {
        let (w, b) = layer_names(i);
        arrays.insert(w, xavier_uniform(fan_out, fan_in, &mut rng));
        arrays.insert(b, Tensor::zeros(1, fan_out));
    }
    if arch.classifier {
        arrays.insert(
            CLASSIFIER_W.into(),
            xavier_uniform(1, arch.feature_dim, &mut rng),
        );
        arrays.insert(CLASSIFIER_B.into(), Tensor::zeros(1, 1));
    }
    Ok(ParamSet::new(Descriptor::Kb(arch.clone()), arrays))
}

/// Nodes of interest in a recorded knowledge-base forward pass.
#[derive(Clone, Copy, Debug)]
pub struct KbNodes {
    pub features: NodeId,
    pub logits: Option<NodeId>,
}

/// Records the network for a batch of records. Dropout masks are derived
/// from `seed` and only take effect when the graph is in training mode.
pub fn build(
    g: &mut Graph,
    arch: &KbArchitecture,
    unit: &TaskUnit,
    records: &[&ResponseRecord],
    seed: u64,
) -> Result<KbNodes> {
    let mut h = embedding::encode_batch(g, &unit.qmatrix, records)?;
    let layers = arch.trunk_layers();
    let last = layers.len() - 1;
    for i in 0..layers.len() {
        let (wn, bn) = layer_names(i);
        let w = g.param(wn);
        let b = g.param(bn);
        let z = g.linear(h, w, b);
        h = g.relu(z);
        if i < last {
            h = g.dropout(h, arch.dropout, seed.wrapping_add(i as u64));
        }
    }
    let features = h;
    let logits = if arch.classifier {
        let d = g.dropout(features, arch.dropout, seed.wrapping_add(last as u64 + 1));
        let w = g.param(CLASSIFIER_W);
        let b = g.param(CLASSIFIER_B);
        Some(g.linear(d, w, b))
    } else {
        None
    };
    Ok(KbNodes { features, logits })
}

#[derive(Clone, Debug)]
pub struct KbOutput {
    /// `σ(logit)` per record; `None` once the classifier is stripped.
    pub probabilities: Option<Vec<f64>>,
    /// `[batch, feature_dim]`
    pub features: Tensor,
}

pub fn kb_forward(
    params: &ParamSet,
    unit: &TaskUnit,
    records: &[&ResponseRecord],
    mode: Mode,
    seed: u64,
) -> Result<KbOutput> {
    let arch = params.kb_arch()?;
    let mut g = Graph::new(mode);
    let nodes = build(&mut g, arch, unit, records, seed)?;
    g.forward(&[&params.arrays])?;
    Ok(KbOutput {
        probabilities: nodes
            .logits
            .map(|l| g.value(l).data().iter().map(|&z| sigmoid(z)).collect()),
        features: g.value(nodes.features).clone(),
    })
}

/// Evaluation-mode probabilities for `indices` of `unit`.
pub fn predict(params: &ParamSet, unit: &TaskUnit, indices: &[usize]) -> Result<Vec<f64>> {
    let out = kb_forward(params, unit, &unit.select(indices), Mode::Eval, 0)?;
    out.probabilities.ok_or(Error::AlreadyStripped)
}

/// Evaluation-mode `X_KB` rows for `indices` of `unit`.
pub fn features(params: &ParamSet, unit: &TaskUnit, indices: &[usize]) -> Result<Tensor> {
    Ok(kb_forward(params, unit, &unit.select(indices), Mode::Eval, 0)?.features)
}

pub fn strip_classifier(params: &ParamSet) -> Result<ParamSet> {
    let arch = params.kb_arch()?;
    if !arch.classifier {
        return Err(Error::AlreadyStripped);
    }
    let mut arch = arch.clone();
    arch.classifier = false;
    let mut arrays = params.arrays.clone();
    arrays.remove(CLASSIFIER_W);
    arrays.remove(CLASSIFIER_B);
    Ok(ParamSet {
        descriptor: Descriptor::Kb(arch),
        version: params.version,
        arrays,
    })
}

/// Mean binary cross-entropy on `indices` of `unit`, with gradients.
pub fn bce_loss(
    params: &ValueMap,
    arch: &KbArchitecture,
    unit: &TaskUnit,
    indices: &[usize],
    mode: Mode,
    seed: u64,
) -> Result<(f64, GradMap)> {
    if !arch.classifier {
        return Err(Error::AlreadyStripped);
    }
    let records = unit.select(indices);
    let targets = records.iter().map(|r| f64::from(r.score)).collect();
    let mut g = Graph::new(mode);
    let nodes = build(&mut g, arch, unit, &records, seed)?;
    g.bce_with_logits(nodes.logits.unwrap(), targets);
    let out = g.forward(&[params])?;
    let loss = g.value(out).item();
    let grads = g.backward_scalar(out)?;
    Ok((loss, grads))
}
