//! Reverse-mode differentiation over a recorded graph of dense matrix ops.
//!
//! A [`Graph`] is built once per step: leaves are named inputs (trainable
//! parameters or plain data) and constants, interior nodes are primitives.
//! [`Graph::forward`] binds the named leaves and evaluates every node in
//! insertion order, which is a topological order by construction.
//! [`Graph::backward`] then walks the tape in reverse and returns gradients
//! for trainable leaves only.
//!
//! ```
//! use metadiag::autodiff::{Graph, Mode, ValueMap};
//! use metadiag::Tensor;
//!
//! let mut g = Graph::new(Mode::Eval);
//! let theta = g.param("theta");
//! let sq = g.sum_squares(theta);
//! let half = g.scale(sq, 0.5);
//!
//! let mut params = ValueMap::new();
//! params.insert("theta".into(), Tensor::scalar(3.0));
//! let out = g.forward(&[&params]).unwrap();
//! assert_eq!(g.value(out).item(), 4.5);
//!
//! let grads = g.backward_scalar(half).unwrap();
//! assert_eq!(grads["theta"].item(), 3.0);
//! ```

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub type ValueMap = BTreeMap<String, Tensor>;
pub type GradMap = BTreeMap<String, Tensor>;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Clone, Debug)]
enum Op {
    Input { name: String, trainable: bool },
    Const,
    Linear { x: NodeId, w: NodeId, b: NodeId },
    MatMul { a: NodeId, b: NodeId },
    Add { a: NodeId, b: NodeId },
    Sub { a: NodeId, b: NodeId },
    Mul { a: NodeId, b: NodeId },
    MulCol { a: NodeId, col: NodeId },
    MulRow { a: NodeId, row: NodeId },
    Scale { a: NodeId, factor: f64 },
    Relu(NodeId),
    Sigmoid(NodeId),
    Dropout { a: NodeId, rate: f64, seed: u64 },
    Gather { table: NodeId, indices: Vec<usize> },
    Sum(NodeId),
    Mean(NodeId),
    SumSquares(NodeId),
    Powf { a: NodeId, exponent: f64 },
    BceWithLogits { logits: NodeId, targets: Vec<f64> },
}

impl Op {
    fn tag(&self) -> &'static str {
        match self {
            Op::Input { .. } => "input",
            Op::Const => "const",
            Op::Linear { .. } => "linear",
            Op::MatMul { .. } => "matmul",
            Op::Add { .. } => "add",
            Op::Sub { .. } => "sub",
            Op::Mul { .. } => "mul",
            Op::MulCol { .. } => "mul_col",
            Op::MulRow { .. } => "mul_row",
            Op::Scale { .. } => "scale",
            Op::Relu(_) => "relu",
            Op::Sigmoid(_) => "sigmoid",
            Op::Dropout { .. } => "dropout",
            Op::Gather { .. } => "gather",
            Op::Sum(_) => "sum",
            Op::Mean(_) => "mean",
            Op::SumSquares(_) => "sum_squares",
            Op::Powf { .. } => "powf",
            Op::BceWithLogits { .. } => "bce_with_logits",
        }
    }

    fn parents(&self) -> Vec<NodeId> {
        match *self {
            Op::Input { .. } | Op::Const => vec![],
            Op::Linear { x, w, b } => vec![x, w, b],
            Op::MatMul { a, b } | Op::Add { a, b } | Op::Sub { a, b } | Op::Mul { a, b } => {
                vec![a, b]
            }
            Op::MulCol { a, col } => vec![a, col],
            Op::MulRow { a, row } => vec![a, row],
            Op::Scale { a, .. }
            | Op::Relu(a)
            | Op::Sigmoid(a)
            | Op::Dropout { a, .. }
            | Op::Sum(a)
            | Op::Mean(a)
            | Op::SumSquares(a)
            | Op::Powf { a, .. } => vec![a],
            Op::Gather { table, .. } => vec![table],
            Op::BceWithLogits { logits, .. } => vec![logits],
        }
    }
}

#[derive(Clone, Debug)]
struct Node {
    op: Op,
    value: Option<Tensor>,
    // dropout mask, already scaled by 1 / (1 - rate)
    mask: Option<Vec<f64>>,
    requires_grad: bool,
}

/// A recorded computation. Single-threaded; build one per step.
#[derive(Clone, Debug)]
pub struct Graph {
    nodes: Vec<Node>,
    mode: Mode,
    forwarded: bool,
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `ln(1 + e^x)` without overflow.
pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

fn check_same(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::ShapeMismatch {
            op,
            left: a.shape(),
            right: b.shape(),
        });
    }
    Ok(())
}

impl Graph {
    pub fn new(mode: Mode) -> Self {
        Graph {
            nodes: Vec::new(),
            mode,
            forwarded: false,
        }
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, op: Op, value: Option<Tensor>) -> NodeId {
        let requires_grad = match &op {
            Op::Input { trainable, .. } => *trainable,
            Op::Const => false,
            other => other
                .parents()
                .iter()
                .any(|p| self.nodes[p.0].requires_grad),
        };
        self.nodes.push(Node {
            op,
            value,
            mask: None,
            requires_grad,
        });
        self.forwarded = false;
        NodeId(self.nodes.len() - 1)
    }

    /// Trainable leaf bound by name at forward time.
    pub fn param(&mut self, name: impl Into<String>) -> NodeId {
        self.push(
            Op::Input {
                name: name.into(),
                trainable: true,
            },
            None,
        )
    }

    /// Non-trainable leaf bound by name at forward time.
    pub fn input(&mut self, name: impl Into<String>) -> NodeId {
        self.push(
            Op::Input {
                name: name.into(),
                trainable: false,
            },
            None,
        )
    }

    pub fn constant(&mut self, value: Tensor) -> NodeId {
        self.push(Op::Const, Some(value))
    }

    /// `x · wᵀ + b` with `x: [n, in]`, `w: [out, in]`, `b: [1, out]`.
    pub fn linear(&mut self, x: NodeId, w: NodeId, b: NodeId) -> NodeId {
        self.push(Op::Linear { x, w, b }, None)
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.push(Op::MatMul { a, b }, None)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.push(Op::Add { a, b }, None)
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.push(Op::Sub { a, b }, None)
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.push(Op::Mul { a, b }, None)
    }

    /// Scales row `r` of `a` by `col[r]`; `col: [n, 1]`.
    pub fn mul_col(&mut self, a: NodeId, col: NodeId) -> NodeId {
        self.push(Op::MulCol { a, col }, None)
    }

    /// Scales column `c` of `a` by `row[c]`; `row: [1, d]`.
    pub fn mul_row(&mut self, a: NodeId, row: NodeId) -> NodeId {
        self.push(Op::MulRow { a, row }, None)
    }

    pub fn scale(&mut self, a: NodeId, factor: f64) -> NodeId {
        self.push(Op::Scale { a, factor }, None)
    }

    pub fn relu(&mut self, a: NodeId) -> NodeId {
        self.push(Op::Relu(a), None)
    }

    pub fn sigmoid(&mut self, a: NodeId) -> NodeId {
        self.push(Op::Sigmoid(a), None)
    }

    /// Inverted dropout: in training mode kept units are scaled by
    /// `1 / (1 - rate)`, in evaluation mode the node is the identity.
    pub fn dropout(&mut self, a: NodeId, rate: f64, seed: u64) -> NodeId {
        self.push(Op::Dropout { a, rate, seed }, None)
    }

    /// Row lookup: output row `r` is `table[indices[r]]`.
    pub fn gather(&mut self, table: NodeId, indices: Vec<usize>) -> NodeId {
        self.push(Op::Gather { table, indices }, None)
    }

    pub fn sum(&mut self, a: NodeId) -> NodeId {
        self.push(Op::Sum(a), None)
    }

    pub fn mean(&mut self, a: NodeId) -> NodeId {
        self.push(Op::Mean(a), None)
    }

    pub fn sum_squares(&mut self, a: NodeId) -> NodeId {
        self.push(Op::SumSquares(a), None)
    }

    /// Elementwise `a^exponent`; inputs must be nonnegative unless the
    /// exponent is an integer.
    pub fn powf(&mut self, a: NodeId, exponent: f64) -> NodeId {
        self.push(Op::Powf { a, exponent }, None)
    }

    /// Mean binary cross-entropy of `sigmoid(logits)` against `targets`.
    pub fn bce_with_logits(&mut self, logits: NodeId, targets: Vec<f64>) -> NodeId {
        self.push(Op::BceWithLogits { logits, targets }, None)
    }

    /// Value of an evaluated node. Panics if forward has not reached it.
    pub fn value(&self, id: NodeId) -> &Tensor {
        self.nodes[id.0]
            .value
            .as_ref()
            .expect("node has not been evaluated")
    }

    pub fn try_value(&self, id: NodeId) -> Option<&Tensor> {
        self.nodes[id.0].value.as_ref()
    }

    fn val(&self, id: NodeId) -> &Tensor {
        self.nodes[id.0].value.as_ref().unwrap()
    }

    /// Evaluates every node. Named leaves are looked up in `inputs` in
    /// order; the first map that has the name wins. Returns the last node.
    pub fn forward(&mut self, inputs: &[&ValueMap]) -> Result<NodeId> {
        if self.nodes.is_empty() {
            return Err(Error::invalid("forward on an empty graph"));
        }
        self.forwarded = false;
        for i in 0..self.nodes.len() {
            let (value, mask) = self.eval_node(i, inputs)?;
            let node = &mut self.nodes[i];
            node.value = Some(value);
            node.mask = mask;
        }
        self.forwarded = true;
        Ok(NodeId(self.nodes.len() - 1))
    }

    fn eval_node(&self, i: usize, inputs: &[&ValueMap]) -> Result<(Tensor, Option<Vec<f64>>)> {
        let op = &self.nodes[i].op;
        let tag = op.tag();
        let value = match op {
            Op::Input { name, .. } => inputs
                .iter()
                .find_map(|m| m.get(name))
                .cloned()
                .ok_or_else(|| Error::MissingInput(name.clone()))?,
            Op::Const => self.nodes[i].value.clone().expect("constant without value"),
            Op::Linear { x, w, b } => {
                let (x, w, b) = (self.val(*x), self.val(*w), self.val(*b));
                if x.cols() != w.cols() {
                    return Err(Error::ShapeMismatch {
                        op: tag,
                        left: x.shape(),
                        right: w.shape(),
                    });
                }
                if b.shape() != [1, w.rows()] {
                    return Err(Error::ShapeMismatch {
                        op: tag,
                        left: w.shape(),
                        right: b.shape(),
                    });
                }
                let mut out = x.matmul(&w.transpose());
                let o = w.rows();
                for r in 0..out.rows() {
                    for c in 0..o {
                        let v = out.get(r, c) + b.data()[c];
                        out.set(r, c, v);
                    }
                }
                out
            }
            Op::MatMul { a, b } => {
                let (a, b) = (self.val(*a), self.val(*b));
                if a.cols() != b.rows() {
                    return Err(Error::ShapeMismatch {
                        op: tag,
                        left: a.shape(),
                        right: b.shape(),
                    });
                }
                a.matmul(b)
            }
            Op::Add { a, b } => {
                let (a, b) = (self.val(*a), self.val(*b));
                check_same(tag, a, b)?;
                a.zip_map(b, |x, y| x + y)
            }
            Op::Sub { a, b } => {
                let (a, b) = (self.val(*a), self.val(*b));
                check_same(tag, a, b)?;
                a.zip_map(b, |x, y| x - y)
            }
            Op::Mul { a, b } => {
                let (a, b) = (self.val(*a), self.val(*b));
                check_same(tag, a, b)?;
                a.zip_map(b, |x, y| x * y)
            }
            Op::MulCol { a, col } => {
                let (a, col) = (self.val(*a), self.val(*col));
                if col.shape() != [a.rows(), 1] {
                    return Err(Error::ShapeMismatch {
                        op: tag,
                        left: a.shape(),
                        right: col.shape(),
                    });
                }
                let mut out = a.clone();
                let cols = a.cols();
                for (k, v) in out.data_mut().iter_mut().enumerate() {
                    *v *= col.data()[k / cols.max(1)];
                }
                out
            }
            Op::MulRow { a, row } => {
                let (a, row) = (self.val(*a), self.val(*row));
                if row.shape() != [1, a.cols()] {
                    return Err(Error::ShapeMismatch {
                        op: tag,
                        left: a.shape(),
                        right: row.shape(),
                    });
                }
                let mut out = a.clone();
                let cols = a.cols();
                for (k, v) in out.data_mut().iter_mut().enumerate() {
                    *v *= row.data()[k % cols];
                }
                out
            }
            Op::Scale { a, factor } => self.val(*a).map(|v| v * factor),
            Op::Relu(a) => self.val(*a).map(|v| v.max(0.0)),
            Op::Sigmoid(a) => self.val(*a).map(sigmoid),
            Op::Dropout { a, rate, seed } => {
                let a = self.val(*a);
                if self.mode == Mode::Eval || *rate == 0.0 {
                    a.clone()
                } else {
                    let keep = 1.0 - rate;
                    let mut rng = ChaCha8Rng::seed_from_u64(*seed);
                    let mask: Vec<f64> = (0..a.len())
                        .map(|_| {
                            if rng.gen::<f64>() < keep {
                                1.0 / keep
                            } else {
                                0.0
                            }
                        })
                        .collect();
                    let mut out = a.clone();
                    for (v, m) in out.data_mut().iter_mut().zip(&mask) {
                        *v *= m;
                    }
                    return Ok((out, Some(mask)));
                }
            }
            Op::Gather { table, indices } => {
                let t = self.val(*table);
                let cols = t.cols();
                let mut data = Vec::with_capacity(indices.len() * cols);
                for &ix in indices {
                    if ix >= t.rows() {
                        return Err(Error::ShapeMismatch {
                            op: tag,
                            left: t.shape(),
                            right: [ix, cols],
                        });
                    }
                    data.extend_from_slice(t.row_slice(ix));
                }
                Tensor::from_vec(indices.len(), cols, data)
            }
            Op::Sum(a) => Tensor::scalar(self.val(*a).sum()),
            Op::Mean(a) => {
                let a = self.val(*a);
                Tensor::scalar(a.sum() / a.len().max(1) as f64)
            }
            Op::SumSquares(a) => Tensor::scalar(self.val(*a).sum_squares()),
            Op::Powf { a, exponent } => self.val(*a).map(|v| v.powf(*exponent)),
            Op::BceWithLogits { logits, targets } => {
                let z = self.val(*logits);
                if z.len() != targets.len() {
                    return Err(Error::ShapeMismatch {
                        op: tag,
                        left: z.shape(),
                        right: [targets.len(), 1],
                    });
                }
                let total: f64 = z
                    .data()
                    .iter()
                    .zip(targets)
                    .map(|(&z, &y)| softplus(z) - z * y)
                    .sum();
                Tensor::scalar(total / targets.len().max(1) as f64)
            }
        };
        Ok((value, None))
    }

    /// Seeds a `[1, 1]` output with 1 and runs [`Graph::backward`].
    pub fn backward_scalar(&mut self, output: NodeId) -> Result<GradMap> {
        self.backward(output, &Tensor::scalar(1.0))
    }

    /// Propagates `seed` from `output` back to every trainable leaf.
    /// Gradients of leaves bound under the same name are summed.
    pub fn backward(&mut self, output: NodeId, seed: &Tensor) -> Result<GradMap> {
        if !self.forwarded {
            return Err(Error::BackwardBeforeForward);
        }
        let out_val = self.val(output);
        if out_val.shape() != seed.shape() {
            return Err(Error::ShapeMismatch {
                op: "backward",
                left: out_val.shape(),
                right: seed.shape(),
            });
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; output.0 + 1];
        grads[output.0] = Some(seed.clone());
        let mut result = GradMap::new();

        for i in (0..=output.0).rev() {
            let Some(dy) = grads[i].take() else { continue };
            if !self.nodes[i].requires_grad {
                continue;
            }
            let node = &self.nodes[i];
            match &node.op {
                Op::Input { name, trainable } => {
                    if *trainable {
                        match result.get_mut(name) {
                            Some(g) => g.add_assign(&dy),
                            None => {
                                result.insert(name.clone(), dy);
                            }
                        }
                    }
                }
                Op::Const => {}
                Op::Linear { x, w, b } => {
                    let (xv, wv) = (self.val(*x), self.val(*w));
                    if self.needs(*x) {
                        accumulate(&mut grads, *x, dy.matmul(wv));
                    }
                    if self.needs(*w) {
                        accumulate(&mut grads, *w, dy.transpose().matmul(xv));
                    }
                    if self.needs(*b) {
                        let mut db = vec![0.0; dy.cols()];
                        for r in 0..dy.rows() {
                            for (acc, v) in db.iter_mut().zip(dy.row_slice(r)) {
                                *acc += v;
                            }
                        }
                        accumulate(&mut grads, *b, Tensor::row(db));
                    }
                }
                Op::MatMul { a, b } => {
                    let (av, bv) = (self.val(*a), self.val(*b));
                    if self.needs(*a) {
                        accumulate(&mut grads, *a, dy.matmul(&bv.transpose()));
                    }
                    if self.needs(*b) {
                        accumulate(&mut grads, *b, av.transpose().matmul(&dy));
                    }
                }
                Op::Add { a, b } => {
                    if self.needs(*a) {
                        accumulate(&mut grads, *a, dy.clone());
                    }
                    if self.needs(*b) {
                        accumulate(&mut grads, *b, dy);
                    }
                }
                Op::Sub { a, b } => {
                    if self.needs(*a) {
                        accumulate(&mut grads, *a, dy.clone());
                    }
                    if self.needs(*b) {
                        accumulate(&mut grads, *b, dy.map(|v| -v));
                    }
                }
                Op::Mul { a, b } => {
                    let (av, bv) = (self.val(*a), self.val(*b));
                    if self.needs(*a) {
                        accumulate(&mut grads, *a, dy.zip_map(bv, |g, y| g * y));
                    }
                    if self.needs(*b) {
                        accumulate(&mut grads, *b, dy.zip_map(av, |g, x| g * x));
                    }
                }
                Op::MulCol { a, col } => {
                    let (av, cv) = (self.val(*a), self.val(*col));
                    let cols = av.cols();
                    if self.needs(*a) {
                        let mut da = dy.clone();
                        for (k, v) in da.data_mut().iter_mut().enumerate() {
                            *v *= cv.data()[k / cols.max(1)];
                        }
                        accumulate(&mut grads, *a, da);
                    }
                    if self.needs(*col) {
                        let mut dc = vec![0.0; av.rows()];
                        for (k, (g, x)) in dy.data().iter().zip(av.data()).enumerate() {
                            dc[k / cols.max(1)] += g * x;
                        }
                        accumulate(&mut grads, *col, Tensor::column(dc));
                    }
                }
                Op::MulRow { a, row } => {
                    let (av, rv) = (self.val(*a), self.val(*row));
                    let cols = av.cols();
                    if self.needs(*a) {
                        let mut da = dy.clone();
                        for (k, v) in da.data_mut().iter_mut().enumerate() {
                            *v *= rv.data()[k % cols];
                        }
                        accumulate(&mut grads, *a, da);
                    }
                    if self.needs(*row) {
                        let mut dr = vec![0.0; cols];
                        for (k, (g, x)) in dy.data().iter().zip(av.data()).enumerate() {
                            dr[k % cols] += g * x;
                        }
                        accumulate(&mut grads, *row, Tensor::row(dr));
                    }
                }
                Op::Scale { a, factor } => {
                    let f = *factor;
                    accumulate(&mut grads, *a, dy.map(|g| g * f));
                }
                Op::Relu(a) => {
                    let av = self.val(*a);
                    accumulate(
                        &mut grads,
                        *a,
                        dy.zip_map(av, |g, x| if x > 0.0 { g } else { 0.0 }),
                    );
                }
                Op::Sigmoid(a) => {
                    let yv = node.value.as_ref().unwrap();
                    accumulate(&mut grads, *a, dy.zip_map(yv, |g, y| g * y * (1.0 - y)));
                }
                Op::Dropout { a, .. } => {
                    let da = match &node.mask {
                        Some(mask) => {
                            let mut da = dy;
                            for (v, m) in da.data_mut().iter_mut().zip(mask) {
                                *v *= m;
                            }
                            da
                        }
                        None => dy,
                    };
                    accumulate(&mut grads, *a, da);
                }
                Op::Gather { table, indices } => {
                    let tv = self.val(*table);
                    let mut dt = Tensor::zeros(tv.rows(), tv.cols());
                    let cols = tv.cols();
                    for (r, &ix) in indices.iter().enumerate() {
                        let src = dy.row_slice(r);
                        let dst = &mut dt.data_mut()[ix * cols..(ix + 1) * cols];
                        for (d, s) in dst.iter_mut().zip(src) {
                            *d += s;
                        }
                    }
                    accumulate(&mut grads, *table, dt);
                }
                Op::Sum(a) => {
                    let av = self.val(*a);
                    let g = dy.item();
                    accumulate(&mut grads, *a, Tensor::filled(av.rows(), av.cols(), g));
                }
                Op::Mean(a) => {
                    let av = self.val(*a);
                    let g = dy.item() / av.len().max(1) as f64;
                    accumulate(&mut grads, *a, Tensor::filled(av.rows(), av.cols(), g));
                }
                Op::SumSquares(a) => {
                    let av = self.val(*a);
                    let g = dy.item();
                    accumulate(&mut grads, *a, av.map(|x| 2.0 * x * g));
                }
                Op::Powf { a, exponent } => {
                    let av = self.val(*a);
                    let p = *exponent;
                    accumulate(
                        &mut grads,
                        *a,
                        dy.zip_map(av, |g, x| g * p * x.powf(p - 1.0)),
                    );
                }
                Op::BceWithLogits { logits, targets } => {
                    let zv = self.val(*logits);
                    let scale = dy.item() / targets.len().max(1) as f64;
                    let data = zv
                        .data()
                        .iter()
                        .zip(targets)
                        .map(|(&z, &y)| (sigmoid(z) - y) * scale)
                        .collect();
                    accumulate(
                        &mut grads,
                        *logits,
                        Tensor::from_vec(zv.rows(), zv.cols(), data),
                    );
                }
            }
        }
        Ok(result)
    }

    fn needs(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    /// Sign pattern of every ReLU input, in tape order. Two evaluations
    /// with different patterns straddle a kink.
    pub fn relu_pattern(&self) -> Vec<bool> {
        let mut out = Vec::new();
        for node in &self.nodes {
            if let Op::Relu(a) = node.op {
                if let Some(v) = self.nodes[a.0].value.as_ref() {
                    out.extend(v.data().iter().map(|&x| x > 0.0));
                }
            }
        }
        out
    }
}

fn accumulate(grads: &mut [Option<Tensor>], id: NodeId, g: Tensor) {
    match &mut grads[id.0] {
        Some(existing) => existing.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}

/// Result of comparing one named parameter block against finite differences.
#[derive(Clone, Debug)]
pub struct BlockReport {
    pub name: String,
    pub max_rel_error: f64,
    pub checked: usize,
    /// Coordinates skipped because a ReLU changed sign within the step.
    pub excluded: usize,
    pub passed: bool,
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub blocks: Vec<BlockReport>,
    pub excluded: usize,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.blocks.iter().all(|b| b.passed)
    }

    pub fn block(&self, name: &str) -> Option<&BlockReport> {
        self.blocks.iter().find(|b| b.name == name)
    }

    pub fn max_rel_error(&self) -> f64 {
        self.blocks
            .iter()
            .map(|b| b.max_rel_error)
            .fold(0.0, f64::max)
    }
}

/// Gradients below this magnitude are compared in absolute terms.
const REL_FLOOR: f64 = 1e-6;

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

/// Runs forward and backward on `graph` (whose last node must be a scalar
/// loss), then checks every entry of every array in `params` against a
/// central difference with the given `step`.
pub fn finite_diff_check(
    graph: &mut Graph,
    params: &ValueMap,
    others: &[&ValueMap],
    step: f64,
    tolerance: f64,
) -> Result<GradCheckReport> {
    let mut bindings = vec![params];
    bindings.extend_from_slice(others);
    let out = graph.forward(&bindings)?;
    let analytic = graph.backward_scalar(out)?;
    compare_gradients(graph, params, others, &analytic, step, tolerance)
}

/// The comparison half of [`finite_diff_check`], for callers that already
/// hold (possibly altered) analytic gradients.
pub fn compare_gradients(
    graph: &mut Graph,
    params: &ValueMap,
    others: &[&ValueMap],
    analytic: &GradMap,
    step: f64,
    tolerance: f64,
) -> Result<GradCheckReport> {
    if !(step > 0.0 && tolerance > 0.0) {
        return Err(Error::invalid("step and tolerance must be positive"));
    }
    let mut work = params.clone();
    let eval = |g: &mut Graph, work: &ValueMap| -> Result<(f64, Vec<bool>)> {
        let mut bindings = vec![work];
        bindings.extend_from_slice(others);
        let out = g.forward(&bindings)?;
        Ok((g.value(out).item(), g.relu_pattern()))
    };
    let (_, base_pattern) = eval(graph, &work)?;

    let mut blocks = Vec::new();
    let mut excluded_total = 0;
    for (name, tensor) in params {
        let zero = Tensor::zeros(tensor.rows(), tensor.cols());
        let grad = analytic.get(name).unwrap_or(&zero);
        let mut max_rel: f64 = 0.0;
        let mut checked = 0;
        let mut excluded = 0;
        for k in 0..tensor.len() {
            let orig = tensor.data()[k];
            work.get_mut(name).unwrap().data_mut()[k] = orig + step;
            let (plus, p_plus) = eval(graph, &work)?;
            work.get_mut(name).unwrap().data_mut()[k] = orig - step;
            let (minus, p_minus) = eval(graph, &work)?;
            work.get_mut(name).unwrap().data_mut()[k] = orig;
            if p_plus != base_pattern || p_minus != base_pattern {
                excluded += 1;
                continue;
            }
            let numeric = (plus - minus) / (2.0 * step);
            max_rel = max_rel.max(relative_error(grad.data()[k], numeric));
            checked += 1;
        }
        excluded_total += excluded;
        blocks.push(BlockReport {
            name: name.clone(),
            max_rel_error: max_rel,
            checked,
            excluded,
            passed: max_rel <= tolerance,
        });
    }
    // leave the graph evaluated at the unperturbed point
    eval(graph, &work)?;
    Ok(GradCheckReport {
        blocks,
        excluded: excluded_total,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn vm(entries: &[(&str, Tensor)]) -> ValueMap {
        entries
            .iter()
            .map(|(k, v)| (k.to_string(), v.clone()))
            .collect()
    }

    #[test]
    fn dense_identity() {
        let mut g = Graph::new(Mode::Eval);
        let x = g.input("x");
        let w = g.param("w");
        let b = g.param("b");
        let y = g.linear(x, w, b);
        let m = vm(&[
            ("x", Tensor::row(vec![3.0, 4.0])),
            ("w", Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]])),
            ("b", Tensor::row(vec![0.0, 0.0])),
        ]);
        g.forward(&[&m]).unwrap();
        assert_eq!(g.value(y).data(), &[3.0, 4.0]);
    }

    #[test]
    fn relu_and_sigmoid_values() {
        let mut g = Graph::new(Mode::Eval);
        let a = g.constant(Tensor::row(vec![-1.0, 2.0]));
        let r = g.relu(a);
        let z = g.constant(Tensor::scalar(0.0));
        let s = g.sigmoid(z);
        g.forward(&[]).unwrap();
        assert_eq!(g.value(r).data(), &[0.0, 2.0]);
        assert_eq!(g.value(s).item(), 0.5);
    }

    #[test]
    fn sigmoid_derivative_at_zero() {
        let mut g = Graph::new(Mode::Eval);
        let t = g.param("t");
        let s = g.sigmoid(t);
        let m = vm(&[("t", Tensor::scalar(0.0))]);
        g.forward(&[&m]).unwrap();
        let grads = g.backward_scalar(s).unwrap();
        assert_eq!(grads["t"].item(), 0.25);
    }

    #[test]
    fn shape_mismatch_names_op() {
        let mut g = Graph::new(Mode::Eval);
        let a = g.constant(Tensor::row(vec![1.0, 2.0]));
        let b = g.constant(Tensor::row(vec![1.0, 2.0, 3.0]));
        g.add(a, b);
        let err = g.forward(&[]).unwrap_err();
        assert!(
            matches!(err, Error::ShapeMismatch { op: "add", .. }),
            "{err}"
        );
    }

    #[test]
    fn backward_before_forward_is_error() {
        let mut g = Graph::new(Mode::Eval);
        let t = g.param("t");
        let s = g.sum(t);
        assert!(matches!(
            g.backward_scalar(s),
            Err(Error::BackwardBeforeForward)
        ));
    }

    #[test]
    fn missing_input_is_error() {
        let mut g = Graph::new(Mode::Eval);
        g.param("nope");
        assert!(matches!(g.forward(&[]), Err(Error::MissingInput(n)) if n == "nope"));
    }

    #[test]
    fn non_trainable_leaves_get_no_gradient() {
        let mut g = Graph::new(Mode::Eval);
        let x = g.input("x");
        let w = g.param("w");
        let p = g.mul(x, w);
        let s = g.sum(p);
        let m = vm(&[
            ("x", Tensor::row(vec![1.0, 2.0])),
            ("w", Tensor::row(vec![3.0, 4.0])),
        ]);
        g.forward(&[&m]).unwrap();
        let grads = g.backward_scalar(s).unwrap();
        assert_eq!(grads.len(), 1);
        assert_eq!(grads["w"].data(), &[1.0, 2.0]);
    }

    #[test]
    fn dropout_is_identity_in_eval_and_masks_in_train() {
        for (mode, expect_identity) in [(Mode::Eval, true), (Mode::Train, false)] {
            let mut g = Graph::new(mode);
            let a = g.constant(Tensor::filled(1, 200, 1.0));
            let d = g.dropout(a, 0.5, 7);
            g.forward(&[]).unwrap();
            let v = g.value(d);
            if expect_identity {
                assert!(v.data().iter().all(|&x| x == 1.0));
            } else {
                assert!(v.data().iter().all(|&x| x == 0.0 || x == 2.0));
                let kept = v.data().iter().filter(|&&x| x > 0.0).count();
                assert!((60..140).contains(&kept), "{kept}");
            }
        }
    }

    #[test]
    fn shared_leaf_gradients_add() {
        // f = sum(w * w) with w bound twice through separate leaves
        let mut g = Graph::new(Mode::Eval);
        let a = g.param("w");
        let b = g.param("w");
        let p = g.mul(a, b);
        let s = g.sum(p);
        let m = vm(&[("w", Tensor::row(vec![1.5, -2.0]))]);
        g.forward(&[&m]).unwrap();
        let grads = g.backward_scalar(s).unwrap();
        assert_eq!(grads["w"].data(), &[3.0, -4.0]);
    }

    #[test]
    fn linear_model_passes_tight_check() {
        let mut g = Graph::new(Mode::Eval);
        let x = g.input("x");
        let w = g.param("w");
        let b = g.param("b");
        let y = g.linear(x, w, b);
        g.sum(y);
        let data = vm(&[(
            "x",
            Tensor::from_rows(&[vec![0.3, -1.2, 2.0], vec![1.0, 0.5, -0.7]]),
        )]);
        let params = vm(&[
            (
                "w",
                Tensor::from_rows(&[vec![0.1, 0.2, -0.3], vec![0.7, -0.4, 0.9]]),
            ),
            ("b", Tensor::row(vec![0.05, -0.02])),
        ]);
        let report = finite_diff_check(&mut g, &params, &[&data], 1e-5, 1e-6).unwrap();
        assert!(report.passed(), "{report:?}");
    }

    #[test]
    fn corrupted_gradient_fails_its_block() {
        let mut g = Graph::new(Mode::Eval);
        let x = g.input("x");
        let w1 = g.param("w1");
        let b1 = g.param("b1");
        let h = g.linear(x, w1, b1);
        let h = g.sigmoid(h);
        let w2 = g.param("w2");
        let b2 = g.param("b2");
        let y = g.linear(h, w2, b2);
        g.sum_squares(y);
        let data = vm(&[("x", Tensor::row(vec![0.4, -0.9]))]);
        let params = vm(&[
            ("w1", Tensor::from_rows(&[vec![0.3, -0.5], vec![0.8, 0.1]])),
            ("b1", Tensor::row(vec![0.1, -0.1])),
            ("w2", Tensor::from_rows(&[vec![0.6, -0.7]])),
            ("b2", Tensor::row(vec![0.2])),
        ]);
        let out = g.forward(&[&params, &data]).unwrap();
        let mut grads = g.backward_scalar(out).unwrap();
        grads.get_mut("w2").unwrap().scale(2.0);
        let report = compare_gradients(&mut g, &params, &[&data], &grads, 1e-5, 1e-4).unwrap();
        assert!(!report.block("w2").unwrap().passed);
        assert!(report.block("w1").unwrap().passed);
        assert!(report.block("b1").unwrap().passed);
    }

    #[test]
    fn kink_is_excluded() {
        let mut g = Graph::new(Mode::Eval);
        let t = g.param("t");
        let r = g.relu(t);
        g.sum(r);
        let params = vm(&[("t", Tensor::row(vec![1e-7, 1.0]))]);
        let report = finite_diff_check(&mut g, &params, &[], 1e-5, 1e-6).unwrap();
        assert_eq!(report.excluded, 1);
        assert_eq!(report.blocks[0].checked, 1);
        assert!(report.passed());
    }

    #[test]
    fn bce_matches_softplus_form() {
        let mut g = Graph::new(Mode::Eval);
        let z = g.param("z");
        g.bce_with_logits(z, vec![1.0, 0.0]);
        let params = vm(&[("z", Tensor::row(vec![2.0, -0.5]))]);
        let out = g.forward(&[&params]).unwrap();
        let expected = ((-(sigmoid(2.0)).ln()) + (-(1.0 - sigmoid(-0.5)).ln())) / 2.0;
        assert!((g.value(out).item() - expected).abs() < 1e-12);
        let report = finite_diff_check(&mut g, &params, &[], 1e-5, 1e-7).unwrap();
        assert!(report.passed(), "{report:?}");
    }
}
