//! Parameter protection: per-parameter sensitivity weights and the
//! quadratic penalty that anchors sensitive parameters.
//!
//! Sensitivity of parameter `k` is the mean over `N` records of
//! `|∂r(x)/∂θ_k|`, with `r(x) = ½‖KB(x)‖²` and `KB(x)` the logit (or `X_KB`
//! once the classifier is stripped). The penalty is
//! `L = ½ Σ_k φ_k (θ_k − θ*_k)²`.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::autodiff::{GradMap, Graph, Mode, ValueMap};
use crate::data::TaskUnit;
use crate::error::{Error, Result};
use crate::knowledge_base;
use crate::params::{decode_container, encode_container, Descriptor, ParamSet};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct ImportanceMap {
    /// Same names and shapes as the anchor's arrays; nonnegative.
    pub phi: ValueMap,
    pub anchor: ParamSet,
    pub tasks_seen: usize,
}

/// Mean of elementwise absolute gradients over a stream of per-sample
/// gradients. Arrays missing from a sample count as zero for that sample.
pub fn mean_abs_gradient(samples: impl IntoIterator<Item = Result<GradMap>>) -> Result<ValueMap> {
    let mut acc = ValueMap::new();
    let mut n = 0usize;
    for g in samples {
        let g = g?;
        n += 1;
        for (name, t) in g {
            let abs = t.map(f64::abs);
            match acc.get_mut(&name) {
                Some(a) => a.add_assign(&abs),
                None => {
                    acc.insert(name, abs);
                }
            }
        }
    }
    if n == 0 {
        return Err(Error::invalid("importance needs at least one record"));
    }
    for t in acc.values_mut() {
        t.scale(1.0 / n as f64);
    }
    Ok(acc)
}

/// Sensitivity weights of `params` on `min(sample_cap, |unit|)` records of
/// `unit`, taken at an even stride. Every array of `params` gets an entry.
pub fn compute_importance(
    params: &ParamSet,
    unit: &TaskUnit,
    sample_cap: usize,
) -> Result<ValueMap> {
    let arch = params.kb_arch()?;
    let n = sample_cap.min(unit.len());
    if n == 0 {
        return Err(Error::invalid("importance needs at least one record"));
    }
    let stride = unit.len() as f64 / n as f64;
    let per_record = (0..n).map(|i| {
        let record = &unit.records[(i as f64 * stride) as usize];
        let mut g = Graph::new(Mode::Eval);
        let nodes = knowledge_base::build(&mut g, arch, unit, &[record], 0)?;
        let out = nodes.logits.unwrap_or(nodes.features);
        let sq = g.sum_squares(out);
        g.scale(sq, 0.5);
        let root = g.forward(&[&params.arrays])?;
        g.backward_scalar(root)
    });
    let mut phi = mean_abs_gradient(per_record)?;
    for (name, t) in &params.arrays {
        phi.entry(name.clone())
            .or_insert_with(|| Tensor::zeros(t.rows(), t.cols()));
    }
    Ok(phi)
}

fn check_layout(current: &ValueMap, importance: &ImportanceMap) -> Result<()> {
    for (name, phi) in &importance.phi {
        let anchor = importance.anchor.arrays.get(name);
        let cur = current.get(name);
        match (anchor, cur) {
            (Some(a), Some(c)) if a.shape() == phi.shape() && c.shape() == phi.shape() => {}
            _ => return Err(Error::LayoutMismatch(name.clone())),
        }
    }
    Ok(())
}

/// `½ Σ φ (θ − θ*)²` and its gradient `φ (θ − θ*)`.
pub fn ppm_penalty(current: &ValueMap, importance: &ImportanceMap) -> Result<(f64, GradMap)> {
    check_layout(current, importance)?;
    let mut loss = 0.0;
    let mut grads = GradMap::new();
    for (name, phi) in &importance.phi {
        let theta = &current[name];
        let anchor = &importance.anchor.arrays[name];
        let mut g = Tensor::zeros(phi.rows(), phi.cols());
        for k in 0..phi.len() {
            let d = theta.data()[k] - anchor.data()[k];
            loss += 0.5 * phi.data()[k] * d * d;
            g.data_mut()[k] = phi.data()[k] * d;
        }
        grads.insert(name.clone(), g);
    }
    Ok((loss, grads))
}

/// Folds one task's weights into the running mean and moves the anchor.
pub fn merge_importance(
    previous: Option<&ImportanceMap>,
    phi_unit: ValueMap,
    anchor: ParamSet,
) -> Result<ImportanceMap> {
    let Some(prev) = previous else {
        return Ok(ImportanceMap {
            phi: phi_unit,
            anchor,
            tasks_seen: 1,
        });
    };
    let seen = prev.tasks_seen as f64;
    let mut phi = ValueMap::new();
    for (name, new) in phi_unit {
        let merged = match prev.phi.get(&name) {
            Some(old) if old.shape() == new.shape() => {
                old.zip_map(&new, |o, n| (seen * o + n) / (seen + 1.0))
            }
            Some(_) => return Err(Error::LayoutMismatch(name)),
            None => new.map(|n| n / (seen + 1.0)),
        };
        phi.insert(name, merged);
    }
    Ok(ImportanceMap {
        phi,
        anchor,
        tasks_seen: prev.tasks_seen + 1,
    })
}

/// Called at a task boundary: anchor to `params_after_task` and fold in the
/// sensitivity measured on `unit`.
pub fn update_anchor(
    previous: Option<&ImportanceMap>,
    params_after_task: &ParamSet,
    unit: &TaskUnit,
    sample_cap: usize,
) -> Result<ImportanceMap> {
    let phi_unit = compute_importance(params_after_task, unit, sample_cap)?;
    merge_importance(previous, phi_unit, params_after_task.snapshot())
}

#[derive(Serialize, Deserialize)]
struct Header {
    tasks_seen: usize,
    anchor_descriptor: Descriptor,
    anchor_version: u64,
}

impl ImportanceMap {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut arrays = ValueMap::new();
        for (k, v) in &self.phi {
            arrays.insert(format!("phi/{k}"), v.clone());
        }
        for (k, v) in &self.anchor.arrays {
            arrays.insert(format!("anchor/{k}"), v.clone());
        }
        encode_container(
            &Header {
                tasks_seen: self.tasks_seen,
                anchor_descriptor: self.anchor.descriptor.clone(),
                anchor_version: self.anchor.version,
            },
            &arrays,
        )
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let (header, arrays): (Header, ValueMap) = decode_container(bytes)?;
        let mut phi = ValueMap::new();
        let mut anchor = ValueMap::new();
        for (k, v) in arrays {
            if let Some(name) = k.strip_prefix("phi/") {
                phi.insert(name.to_string(), v);
            } else if let Some(name) = k.strip_prefix("anchor/") {
                anchor.insert(name.to_string(), v);
            } else {
                return Err(Error::invalid(format!("unexpected array `{k}`")));
            }
        }
        let mut anchor = ParamSet::new(header.anchor_descriptor, anchor);
        anchor.version = header.anchor_version;
        Ok(ImportanceMap {
            phi,
            anchor,
            tasks_seen: header.tasks_seen,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?).map_err(|e| Error::Checkpoint {
            path: path.to_path_buf(),
            message: e.to_string(),
        })
    }
}
