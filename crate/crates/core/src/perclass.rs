//! Per-class diagnosis heads over knowledge-base features.
//!
//! Two 4-layer ReLU networks score a feature vector: `f_0` for "incorrect",
//! `f_1` for "correct", and the diagnosis is `argmax(f_0, f_1)` with ties
//! going to 0. Head `i` is trained only on class-`i` features with
//!
//! ```text
//! mean[−log σ(f_i(x))] + η ‖W4·W3·W2·W1‖_F^μ + λ ‖θ_1 − θ_0‖²
//! ```
//!
//! Both heads start from one copied initialization and the `λ` term tethers
//! each to that shared start. A KL-divergence mask removes the
//! feature dimensions whose class-conditional histograms look most like the
//! pooled one before the heads see them.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{GradMap, Graph, Mode, NodeId, ValueMap};
use crate::error::{Error, Result};
use crate::knowledge_base::xavier_uniform;
use crate::optim::Adam;
use crate::tensor::Tensor;

pub const HEAD_LAYERS: usize = 4;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct HeadLossConfig {
    /// H-reg weight.
    pub eta: f64,
    /// L2-transfer weight.
    pub lambda: f64,
    /// H-reg exponent, one of 2, 3, 4.
    pub mu: u32,
}

impl Default for HeadLossConfig {
    fn default() -> Self {
        HeadLossConfig {
            eta: 0.5,
            lambda: 0.1,
            mu: 2,
        }
    }
}

fn default_hidden() -> Vec<usize> {
    vec![32, 16, 8]
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct HeadConfig {
    pub eta: f64,
    pub lambda: f64,
    pub mu: u32,
    pub hidden: Vec<usize>,
    pub steps: usize,
    pub lr: f64,
    /// Standardise features with training-set statistics before the heads.
    pub standardize: bool,
}

impl Default for HeadConfig {
    fn default() -> Self {
        let l = HeadLossConfig::default();
        HeadConfig {
            eta: l.eta,
            lambda: l.lambda,
            mu: l.mu,
            hidden: default_hidden(),
            steps: 150,
            lr: 0.01,
            standardize: true,
        }
    }
}

impl HeadConfig {
    pub fn loss(&self) -> HeadLossConfig {
        HeadLossConfig {
            eta: self.eta,
            lambda: self.lambda,
            mu: self.mu,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.hidden.len() != HEAD_LAYERS - 1 || self.hidden.contains(&0) {
            return Err(Error::invalid(
                "heads need exactly three positive hidden widths",
            ));
        }
        if !(2..=4).contains(&self.mu) {
            return Err(Error::invalid("mu must be 2, 3 or 4"));
        }
        if self.eta < 0.0 || self.lambda < 0.0 || !(self.lr > 0.0) {
            return Err(Error::invalid(
                "eta and lambda must be nonnegative, lr positive",
            ));
        }
        Ok(())
    }
}

/// Per-dimension affine map `(x − shift) / scale` applied before the heads.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Standardizer {
    pub shift: Vec<f64>,
    pub scale: Vec<f64>,
}

impl Standardizer {
    pub fn identity(dim: usize) -> Self {
        Standardizer {
            shift: vec![0.0; dim],
            scale: vec![1.0; dim],
        }
    }

    pub fn fit(x: &Tensor) -> Self {
        let (n, d) = (x.rows().max(1) as f64, x.cols());
        let mut shift = vec![0.0; d];
        let mut sq = vec![0.0; d];
        for r in 0..x.rows() {
            for (c, v) in x.row_slice(r).iter().enumerate() {
                shift[c] += v;
                sq[c] += v * v;
            }
        }
        let scale = shift
            .iter_mut()
            .zip(&sq)
            .map(|(m, s)| {
                *m /= n;
                let var = (s / n - *m * *m).max(0.0);
                if var > 1e-12 {
                    var.sqrt()
                } else {
                    1.0
                }
            })
            .collect();
        Standardizer { shift, scale }
    }

    pub fn apply(&self, x: &Tensor) -> Tensor {
        let d = x.cols();
        let mut out = x.clone();
        for (k, v) in out.data_mut().iter_mut().enumerate() {
            let c = k % d;
            *v = (*v - self.shift[c]) / self.scale[c];
        }
        out
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HeadParams {
    /// `h{i}.l{k}.w` / `h{i}.l{k}.b` for head `i ∈ {0, 1}`, layer `k ∈ 0..4`.
    pub arrays: ValueMap,
    /// Layer widths from input to the scalar output.
    pub sizes: Vec<usize>,
    pub input_norm: Standardizer,
}

pub fn head_array(head: u8, layer: usize, kind: char) -> String {
    format!("h{head}.l{layer}.{kind}")
}

/// Xavier weights, zero biases; head 1 is an exact copy of head 0.
pub fn init_heads(input_dim: usize, hidden: &[usize], seed: u64) -> HeadParams {
    let mut sizes = vec![input_dim];
    sizes.extend_from_slice(hidden);
    sizes.push(1);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut arrays = ValueMap::new();
    for k in 0..sizes.len() - 1 {
        let w = xavier_uniform(sizes[k + 1], sizes[k], &mut rng);
        let b = Tensor::zeros(1, sizes[k + 1]);
        for head in 0..2 {
            arrays.insert(head_array(head, k, 'w'), w.clone());
            arrays.insert(head_array(head, k, 'b'), b.clone());
        }
    }
    HeadParams {
        arrays,
        sizes,
        input_norm: Standardizer::identity(input_dim),
    }
}

impl HeadParams {
    pub fn layers(&self) -> usize {
        self.sizes.len() - 1
    }

    /// Copies head `from` over head `to`.
    pub fn copy_head(&mut self, from: u8, to: u8) {
        for k in 0..self.layers() {
            for kind in ['w', 'b'] {
                let v = self.arrays[&head_array(from, k, kind)].clone();
                self.arrays.insert(head_array(to, k, kind), v);
            }
        }
    }

    /// `‖θ_1 − θ_0‖₂` over all layers.
    pub fn head_distance(&self) -> f64 {
        let mut s = 0.0;
        for k in 0..self.layers() {
            for kind in ['w', 'b'] {
                let a = &self.arrays[&head_array(0, k, kind)];
                let b = &self.arrays[&head_array(1, k, kind)];
                s += a.zip_map(b, |x, y| x - y).sum_squares();
            }
        }
        s.sqrt()
    }
}

fn head_leaf(g: &mut Graph, name: String, trainable: bool) -> NodeId {
    if trainable {
        g.param(name)
    } else {
        g.input(name)
    }
}

/// Records `f_head(x)` for `x: [n, in]`; returns the `[n, 1]` raw scores.
pub fn build_head(
    g: &mut Graph,
    head: u8,
    layers: usize,
    x: NodeId,
    mask: Option<&SeparationMask>,
    trainable: bool,
) -> NodeId {
    let mut h = match mask {
        Some(m) => {
            let row = g.constant(m.as_row());
            g.mul_row(x, row)
        }
        None => x,
    };
    for k in 0..layers {
        let w = head_leaf(g, head_array(head, k, 'w'), trainable);
        let b = head_leaf(g, head_array(head, k, 'b'), trainable);
        h = g.linear(h, w, b);
        if k + 1 < layers {
            h = g.relu(h);
        }
    }
    h
}

/// Records `‖W_L ⋯ W_1‖_F^μ` for one head.
pub fn build_hreg(g: &mut Graph, head: u8, layers: usize, mu: u32, trainable: bool) -> NodeId {
    let mut prod = head_leaf(g, head_array(head, layers - 1, 'w'), trainable);
    for k in (0..layers - 1).rev() {
        let w = head_leaf(g, head_array(head, k, 'w'), trainable);
        prod = g.matmul(prod, w);
    }
    let sq = g.sum_squares(prod);
    g.powf(sq, f64::from(mu) / 2.0)
}

/// Raw scores of one head on already standardised features.
pub fn head_forward(
    params: &HeadParams,
    head: u8,
    x: &Tensor,
    mask: Option<&SeparationMask>,
) -> Result<Vec<f64>> {
    let mut g = Graph::new(Mode::Eval);
    let xin = g.constant(x.clone());
    build_head(&mut g, head, params.layers(), xin, mask, false);
    let out = g.forward(&[&params.arrays])?;
    Ok(g.value(out).data().to_vec())
}

pub fn hreg(params: &HeadParams, head: u8, mu: u32) -> Result<f64> {
    let mut g = Graph::new(Mode::Eval);
    build_hreg(&mut g, head, params.layers(), mu, false);
    let out = g.forward(&[&params.arrays])?;
    Ok(g.value(out).item())
}

/// Records the three-term loss of head `head` on `batch` (class-`head`
/// features). The other head enters only through the tether, as a constant.
pub fn build_head_loss(
    g: &mut Graph,
    head: u8,
    layers: usize,
    batch: &Tensor,
    loss: &HeadLossConfig,
    mask: Option<&SeparationMask>,
) -> NodeId {
    let other = 1 - head;
    let x = g.constant(batch.clone());
    let scores = build_head(g, head, layers, x, mask, true);
    let nll = g.bce_with_logits(scores, vec![1.0; batch.rows()]);
    let hr = build_hreg(g, head, layers, loss.mu, true);
    let hr = g.scale(hr, loss.eta);
    let mut total = g.add(nll, hr);
    let mut tether: Option<NodeId> = None;
    for k in 0..layers {
        for kind in ['w', 'b'] {
            let mine = g.param(head_array(head, k, kind));
            let theirs = g.input(head_array(other, k, kind));
            let d = g.sub(mine, theirs);
            let s = g.sum_squares(d);
            tether = Some(match tether {
                Some(t) => g.add(t, s),
                None => s,
            });
        }
    }
    let tether = g.scale(tether.unwrap(), loss.lambda);
    total = g.add(total, tether);
    total
}

pub fn head_loss(
    head: u8,
    params: &HeadParams,
    batch: &Tensor,
    loss: &HeadLossConfig,
    mask: Option<&SeparationMask>,
) -> Result<(f64, GradMap)> {
    if batch.rows() == 0 {
        return Err(Error::EmptyClass(head));
    }
    let mut g = Graph::new(Mode::Eval);
    build_head_loss(&mut g, head, params.layers(), batch, loss, mask);
    let out = g.forward(&[&params.arrays])?;
    let value = g.value(out).item();
    Ok((value, g.backward_scalar(out)?))
}

fn rows_of_class(x: &Tensor, labels: &[u8], class: u8) -> Tensor {
    let d = x.cols();
    let mut data = Vec::new();
    let mut n = 0;
    for (r, &l) in labels.iter().enumerate() {
        if l == class {
            data.extend_from_slice(x.row_slice(r));
            n += 1;
        }
    }
    Tensor::from_vec(n, d, data)
}

/// Trains `f_0` on class-0 rows and `f_1` on class-1 rows, both starting
/// from the same copied initialization and tethered to it. Full-batch Adam.
///
/// Tethering `f_1` to the trained `f_0` instead makes `f_1 − f_0` a push
/// that is positive almost everywhere, so every input is diagnosed as 1.
pub fn train_heads(
    features: &Tensor,
    labels: &[u8],
    config: &HeadConfig,
    mask: Option<&SeparationMask>,
    seed: u64,
) -> Result<HeadParams> {
    config.validate()?;
    if features.rows() != labels.len() {
        return Err(Error::invalid("features and labels differ in length"));
    }
    let mut params = init_heads(features.cols(), &config.hidden, seed);
    if config.standardize {
        params.input_norm = Standardizer::fit(features);
    }
    let x = params.input_norm.apply(features);
    let class = [rows_of_class(&x, labels, 0), rows_of_class(&x, labels, 1)];
    for (c, rows) in class.iter().enumerate() {
        if rows.rows() == 0 {
            return Err(Error::EmptyClass(c as u8));
        }
    }
    let loss = config.loss();
    let start = params.arrays.clone();
    for head in [0u8, 1] {
        // The other slot keeps the shared starting copy, so the tether pulls
        // each head back toward the common start rather than toward the
        // other trained head.
        let mut work = HeadParams {
            arrays: start.clone(),
            ..params.clone()
        };
        let mut opt = Adam::new(config.lr);
        for _ in 0..config.steps {
            let (_, grads) = head_loss(head, &work, &class[head as usize], &loss, mask)?;
            opt.step(&mut work.arrays, &grads);
        }
        for k in 0..work.layers() {
            for kind in ['w', 'b'] {
                let name = head_array(head, k, kind);
                let v = work.arrays.remove(&name).unwrap();
                params.arrays.insert(name, v);
            }
        }
    }
    Ok(params)
}

/// `f_1(x) − f_0(x)` per row of raw (unstandardised) features.
pub fn score_difference(
    params: &HeadParams,
    x: &Tensor,
    mask: Option<&SeparationMask>,
) -> Result<Vec<f64>> {
    let z = params.input_norm.apply(x);
    let f0 = head_forward(params, 0, &z, mask)?;
    let f1 = head_forward(params, 1, &z, mask)?;
    Ok(f1.iter().zip(&f0).map(|(a, b)| a - b).collect())
}

/// Index of the larger head score; ties go to class 0.
pub fn argmax_decision(f0: f64, f1: f64) -> u8 {
    u8::from(f1 > f0)
}

/// Diagnoses every row of `x`.
pub fn diagnose(params: &HeadParams, x: &Tensor, mask: Option<&SeparationMask>) -> Result<Vec<u8>> {
    let z = params.input_norm.apply(x);
    let f0 = head_forward(params, 0, &z, mask)?;
    let f1 = head_forward(params, 1, &z, mask)?;
    Ok(f0
        .iter()
        .zip(&f1)
        .map(|(&a, &b)| argmax_decision(a, b))
        .collect())
}

/// `KL(p ‖ q)` in nats with `0 · log(0 / ·) = 0`.
pub fn kl_divergence(p: &[f64], q: &[f64]) -> f64 {
    p.iter()
        .zip(q)
        .filter(|(&pi, _)| pi > 0.0)
        .map(|(&pi, &qi)| pi * (pi / qi).ln())
        .sum()
}

/// Serialized as the list of masked dimension indices plus the width.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(into = "MaskWire", try_from = "MaskWire")]
pub struct SeparationMask {
    pub keep: Vec<bool>,
    pub scores: Vec<f64>,
    pub kappa: [f64; 2],
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct MaskWire {
    dim: usize,
    masked: Vec<usize>,
    scores: Vec<f64>,
    kappa: [f64; 2],
}

impl From<SeparationMask> for MaskWire {
    fn from(m: SeparationMask) -> Self {
        MaskWire {
            dim: m.keep.len(),
            masked: m.masked_indices(),
            scores: m.scores,
            kappa: m.kappa,
        }
    }
}

impl TryFrom<MaskWire> for SeparationMask {
    type Error = String;

    fn try_from(w: MaskWire) -> std::result::Result<Self, String> {
        if w.scores.len() != w.dim {
            return Err(format!(
                "{} scores for {} dimensions",
                w.scores.len(),
                w.dim
            ));
        }
        let mut keep = vec![true; w.dim];
        for i in w.masked {
            *keep
                .get_mut(i)
                .ok_or(format!("masked index {i} out of range"))? = false;
        }
        Ok(SeparationMask {
            keep,
            scores: w.scores,
            kappa: w.kappa,
        })
    }
}

impl SeparationMask {
    pub fn all(dim: usize) -> Self {
        SeparationMask {
            keep: vec![true; dim],
            scores: vec![0.0; dim],
            kappa: [0.5, 0.5],
        }
    }

    pub fn as_row(&self) -> Tensor {
        Tensor::row(
            self.keep
                .iter()
                .map(|&k| if k { 1.0 } else { 0.0 })
                .collect(),
        )
    }

    pub fn kept_indices(&self) -> Vec<usize> {
        self.keep
            .iter()
            .enumerate()
            .filter_map(|(i, &k)| k.then_some(i))
            .collect()
    }

    pub fn masked_indices(&self) -> Vec<usize> {
        self.keep
            .iter()
            .enumerate()
            .filter_map(|(i, &k)| (!k).then_some(i))
            .collect()
    }
}

fn histogram(values: &[f64], lo: f64, hi: f64, bins: usize) -> Vec<f64> {
    let mut h = vec![0.0; bins];
    if values.is_empty() {
        return h;
    }
    let width = (hi - lo) / bins as f64;
    for &v in values {
        let b = (((v - lo) / width) as usize).min(bins - 1);
        h[b] += 1.0;
    }
    let n = values.len() as f64;
    h.iter_mut().for_each(|x| *x /= n);
    h
}

/// Scores each feature dimension by `Σ_i κ_i KL(P_i ‖ P_pooled)` over
/// `bins`-bin histograms on the dimension's observed range, then masks the
/// lowest-scoring dimensions so that `round(keep_fraction · d)` (at least
/// one) remain. Constant dimensions score 0. `kappa` defaults to the
/// empirical class priors.
pub fn kl_separation(
    features: &Tensor,
    labels: &[u8],
    kappa: Option<[f64; 2]>,
    bins: usize,
    keep_fraction: f64,
) -> Result<SeparationMask> {
    if bins < 2 {
        return Err(Error::invalid("need at least two bins"));
    }
    if !(keep_fraction > 0.0 && keep_fraction <= 1.0) {
        return Err(Error::invalid("keep_fraction must lie in (0, 1]"));
    }
    if features.rows() != labels.len() {
        return Err(Error::invalid("features and labels differ in length"));
    }
    let n1 = labels.iter().filter(|&&l| l == 1).count();
    let n0 = labels.len() - n1;
    if n0 == 0 {
        return Err(Error::EmptyClass(0));
    }
    if n1 == 0 {
        return Err(Error::EmptyClass(1));
    }
    let kappa = kappa.unwrap_or([
        n0 as f64 / labels.len() as f64,
        n1 as f64 / labels.len() as f64,
    ]);
    let d = features.cols();
    let mut scores = Vec::with_capacity(d);
    for c in 0..d {
        let col: Vec<f64> = (0..features.rows()).map(|r| features.get(r, c)).collect();
        let lo = col.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = col.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        if !(hi > lo) {
            scores.push(0.0);
            continue;
        }
        let split = |class: u8| -> Vec<f64> {
            col.iter()
                .zip(labels)
                .filter(|(_, &l)| l == class)
                .map(|(&v, _)| v)
                .collect()
        };
        let pooled = histogram(&col, lo, hi, bins);
        let p0 = histogram(&split(0), lo, hi, bins);
        let p1 = histogram(&split(1), lo, hi, bins);
        scores
            .push(kappa[0] * kl_divergence(&p0, &pooled) + kappa[1] * kl_divergence(&p1, &pooled));
    }
    let retain = ((keep_fraction * d as f64).round() as usize).clamp(1, d.max(1));
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]).then(a.cmp(&b)));
    let mut keep = vec![true; d];
    for &i in order.iter().take(d - retain) {
        keep[i] = false;
    }
    Ok(SeparationMask {
        keep,
        scores,
        kappa,
    })
}
