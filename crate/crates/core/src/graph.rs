//! Computation record and reverse-mode gradients.
//!
//! A [`Graph`] is an append-only list of nodes. Every primitive applied through
//! it evaluates the same kernel as [`crate::ops`] and, when recording, keeps the
//! operation and its inputs so that [`Graph::backward`] can walk the list in
//! reverse. Node indices are assigned in evaluation order, which is therefore a
//! topological order.
//!
//! Inference paths use [`Graph::inference`]: values are still produced, but no
//! operation record is kept and `backward` refuses to run.

use rand::Rng;

use crate::ops::{self, MatView};
use crate::tensor::{Result, Tensor, TensorError};

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op {
    Input,
    Detached,
    MatMul {
        a: Var,
        b: Var,
        trans_b: bool,
    },
    Linear {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Relu(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
    },
    Embedding {
        table: Var,
        ids: Vec<usize>,
        shape: Vec<usize>,
    },
    Softmax {
        x: Var,
        axis: usize,
    },
    Gate {
        x: Var,
        gate: Var,
    },
    Reshape {
        x: Var,
        shape: Vec<usize>,
    },
    GatherRows {
        x: Var,
        rows: Vec<usize>,
    },
    Sum(Var),
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        weights: Vec<f64>,
    },
}

impl Op {
    fn inputs(&self) -> Vec<Var> {
        match self {
            Op::Input | Op::Detached => vec![],
            Op::MatMul { a, b, .. } => vec![*a, *b],
            Op::Linear { x, w, b } => [Some(*x), Some(*w), *b].into_iter().flatten().collect(),
            Op::Add(a, b) | Op::Mul(a, b) => vec![*a, *b],
            Op::Scale(x, _) | Op::Relu(x) | Op::Sum(x) => vec![*x],
            Op::LayerNorm { x, gain, bias } => vec![*x, *gain, *bias],
            Op::Embedding { table, .. } => vec![*table],
            Op::Softmax { x, .. } | Op::Reshape { x, .. } | Op::GatherRows { x, .. } => vec![*x],
            Op::Gate { x, gate } => vec![*x, *gate],
            Op::CrossEntropy { logits, .. } => vec![*logits],
        }
    }
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Ordered record of primitive operations (the computation record).
pub struct Graph {
    nodes: Vec<Node>,
    recording: bool,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

impl Graph {
    /// A recording graph; `backward` is available.
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            recording: true,
        }
    }

    /// A non-recording graph for pure forward evaluation.
    pub fn inference() -> Self {
        Self {
            nodes: Vec::new(),
            recording: false,
        }
    }

    pub fn is_recording(&self) -> bool {
        self.recording
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// A differentiable input: parameter, gate variable or any tapped value.
    pub fn input(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Input, true)
    }

    /// A non-differentiable input (masks, fixed encodings).
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Input, false)
    }

    /// Whether every value computed so far is finite (attention masks aside,
    /// which hold `-inf` by design and are checked by the caller's context).
    pub fn all_finite(&self) -> bool {
        self.nodes
            .iter()
            .all(|n| n.value.data().iter().all(|v| v.is_finite() || *v == f64::NEG_INFINITY))
    }

    /// The sign (`> 0`) of every ReLU input element, in recording order.
    ///
    /// Two graphs of the same computation with equal patterns lie in the same
    /// linear region of every ReLU, which is what a finite-difference check
    /// needs to be valid across its bracket.
    pub fn relu_pattern(&self) -> Vec<bool> {
        self.nodes
            .iter()
            .filter_map(|n| match n.op {
                Op::Relu(x) => Some(self.nodes[x.0].value.data().iter().map(|v| *v > 0.0)),
                _ => None,
            })
            .flatten()
            .collect()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        let op = if self.recording || matches!(op, Op::Input) {
            op
        } else {
            Op::Detached
        };
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn apply(&mut self, op: Op) -> Result<Var> {
        let value = eval(&op, |v| &self.nodes[v.0].value)?;
        let requires_grad = op.inputs().iter().any(|v| self.nodes[v.0].requires_grad);
        Ok(self.push(value, op, requires_grad))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(Op::MatMul { a, b, trans_b: false })
    }

    /// `a · bᵀ`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(Op::MatMul { a, b, trans_b: true })
    }

    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        self.apply(Op::Linear { x, w, b })
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(Op::Add(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(Op::Mul(a, b))
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Result<Var> {
        self.apply(Op::Scale(x, factor))
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.apply(Op::Relu(x))
    }

    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        self.apply(Op::LayerNorm { x, gain, bias })
    }

    pub fn embedding(&mut self, table: Var, ids: &[usize], shape: &[usize]) -> Result<Var> {
        self.apply(Op::Embedding {
            table,
            ids: ids.to_vec(),
            shape: shape.to_vec(),
        })
    }

    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.apply(Op::Softmax { x, axis })
    }

    /// Per-example gate: `x[i, ...] * gate[i]`.
    pub fn gate(&mut self, x: Var, gate: Var) -> Result<Var> {
        self.apply(Op::Gate { x, gate })
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        self.apply(Op::Reshape {
            x,
            shape: shape.to_vec(),
        })
    }

    pub fn gather_rows(&mut self, x: Var, rows: &[usize]) -> Result<Var> {
        self.apply(Op::GatherRows { x, rows: rows.to_vec() })
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        self.apply(Op::Sum(x))
    }

    /// Mean negative log-likelihood over unpadded positions.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize], pad_mask: &[bool]) -> Result<Var> {
        let weights = ops::mean_weights(pad_mask)?;
        self.weighted_cross_entropy(logits, targets, &weights)
    }

    pub fn weighted_cross_entropy(&mut self, logits: Var, targets: &[usize], weights: &[f64]) -> Result<Var> {
        self.apply(Op::CrossEntropy {
            logits,
            targets: targets.to_vec(),
            weights: weights.to_vec(),
        })
    }

    /// Inverted dropout. A zero rate returns `x` unchanged.
    pub fn dropout<R: Rng + ?Sized>(&mut self, x: Var, rate: f64, rng: &mut R) -> Result<Var> {
        if rate <= 0.0 {
            return Ok(x);
        }
        let keep = 1.0 - rate;
        let shape = self.shape(x).to_vec();
        let n = shape.iter().product();
        let mask: Vec<f64> = (0..n)
            .map(|_| if rng.random::<f64>() < keep { 1.0 / keep } else { 0.0 })
            .collect();
        let mask = self.constant(Tensor::from_parts(shape, mask));
        self.mul(x, mask)
    }

    /// Re-evaluates every recorded operation from the inputs.
    pub fn replay(&self) -> Result<Vec<Tensor>> {
        if !self.recording {
            return Err(TensorError::NotOnRecord);
        }
        let mut values: Vec<Tensor> = Vec::with_capacity(self.nodes.len());
        for node in &self.nodes {
            let v = match node.op {
                Op::Input => node.value.clone(),
                _ => eval(&node.op, |v| &values[v.0])?,
            };
            values.push(v);
        }
        Ok(values)
    }

    /// Reverse-mode sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<GradientStore> {
        if !self.recording || loss.0 >= self.nodes.len() {
            return Err(TensorError::NotOnRecord);
        }
        let loss_value = &self.nodes[loss.0].value;
        if loss_value.len() != 1 {
            return Err(TensorError::NotScalar(loss_value.shape().to_vec()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad || matches!(node.op, Op::Input) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(node, &g, &mut grads);
            grads[i] = Some(g);
        }
        let grads = grads
            .into_iter()
            .zip(&self.nodes)
            .map(|(g, n)| g.map(|g| Tensor::from_parts(n.value.shape().to_vec(), g)))
            .collect();
        Ok(GradientStore {
            grads,
            shapes: self.nodes.iter().map(|n| n.value.shape().to_vec()).collect(),
        })
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn propagate(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let val = |v: Var| &self.nodes[v.0].value;
        let mut acc = |v: Var, contribution: Vec<f64>| {
            if !self.wants(v) {
                return;
            }
            match &mut grads[v.0] {
                Some(existing) => existing.iter_mut().zip(contribution).for_each(|(e, c)| *e += c),
                slot @ None => *slot = Some(contribution),
            }
        };
        match &node.op {
            Op::Input | Op::Detached => {}
            Op::MatMul { a, b, trans_b } => {
                let (av, bv) = (val(*a), val(*b));
                let (batch, m, k) = dims3(av);
                let (_, r, c) = dims3(bv);
                let n = node.value.last_dim();
                if self.wants(*a) {
                    let mut da = vec![0.0; av.len()];
                    for bi in 0..batch {
                        let gv = MatView::row_major(&g[bi * m * n..(bi + 1) * m * n], m, n);
                        let braw = MatView::row_major(&bv.data()[bi * r * c..(bi + 1) * r * c], r, c);
                        // C = A·B → dA = dC·Bᵀ;  C = A·Bᵀ → dA = dC·B
                        let bop = if *trans_b { braw } else { braw.t() };
                        ops::gemm(1.0, gv, bop, 0.0, &mut da[bi * m * k..(bi + 1) * m * k]);
                    }
                    acc(*a, da);
                }
                if self.wants(*b) {
                    let mut db = vec![0.0; bv.len()];
                    for bi in 0..batch {
                        let gv = MatView::row_major(&g[bi * m * n..(bi + 1) * m * n], m, n);
                        let araw = MatView::row_major(&av.data()[bi * m * k..(bi + 1) * m * k], m, k);
                        let out = &mut db[bi * r * c..(bi + 1) * r * c];
                        if *trans_b {
                            ops::gemm(1.0, gv.t(), araw, 0.0, out);
                        } else {
                            ops::gemm(1.0, araw.t(), gv, 0.0, out);
                        }
                    }
                    acc(*b, db);
                }
            }
            Op::Linear { x, w, b } => {
                let (xv, wv) = (val(*x), val(*w));
                let (out_dim, in_dim) = (wv.shape()[0], wv.shape()[1]);
                let m = xv.rows();
                let gv = MatView::row_major(g, m, out_dim);
                if self.wants(*x) {
                    let mut dx = vec![0.0; xv.len()];
                    ops::gemm(1.0, gv, MatView::row_major(wv.data(), out_dim, in_dim), 0.0, &mut dx);
                    acc(*x, dx);
                }
                if self.wants(*w) {
                    let mut dw = vec![0.0; wv.len()];
                    ops::gemm(1.0, gv.t(), MatView::row_major(xv.data(), m, in_dim), 0.0, &mut dw);
                    acc(*w, dw);
                }
                if let Some(b) = b {
                    if self.wants(*b) {
                        let mut db = vec![0.0; out_dim];
                        for row in g.chunks_exact(out_dim) {
                            db.iter_mut().zip(row).for_each(|(d, r)| *d += r);
                        }
                        acc(*b, db);
                    }
                }
            }
            Op::Add(a, b) => {
                acc(*a, g.to_vec());
                acc(*b, g.to_vec());
            }
            Op::Mul(a, b) => {
                let (av, bv) = (val(*a).data(), val(*b).data());
                acc(*a, g.iter().zip(bv).map(|(g, b)| g * b).collect());
                acc(*b, g.iter().zip(av).map(|(g, a)| g * a).collect());
            }
            Op::Scale(x, f) => acc(*x, g.iter().map(|v| v * f).collect()),
            Op::Relu(x) => {
                let xv = val(*x).data();
                acc(
                    *x,
                    g.iter().zip(xv).map(|(g, &x)| if x > 0.0 { *g } else { 0.0 }).collect(),
                );
            }
            Op::LayerNorm { x, gain, bias } => {
                let (xv, gv) = (val(*x), val(*gain));
                let d = xv.last_dim();
                let mut dx = vec![0.0; xv.len()];
                let mut dgain = vec![0.0; d];
                let mut dbias = vec![0.0; d];
                for ((row, grow), dxrow) in xv
                    .data()
                    .chunks_exact(d)
                    .zip(g.chunks_exact(d))
                    .zip(dx.chunks_exact_mut(d))
                {
                    let (mean, rstd) = ops::row_moments(row);
                    let xhat: Vec<f64> = row.iter().map(|v| (v - mean) * rstd).collect();
                    let dxhat: Vec<f64> = grow.iter().zip(gv.data()).map(|(g, w)| g * w).collect();
                    let mean_dxhat = dxhat.iter().sum::<f64>() / d as f64;
                    let mean_dxhat_xhat = dxhat.iter().zip(&xhat).map(|(a, b)| a * b).sum::<f64>() / d as f64;
                    for i in 0..d {
                        dxrow[i] = rstd * (dxhat[i] - mean_dxhat - xhat[i] * mean_dxhat_xhat);
                        dgain[i] += grow[i] * xhat[i];
                        dbias[i] += grow[i];
                    }
                }
                acc(*x, dx);
                acc(*gain, dgain);
                acc(*bias, dbias);
            }
            Op::Embedding { table, ids, .. } => {
                let tv = val(*table);
                let d = tv.last_dim();
                let mut dt = vec![0.0; tv.len()];
                for (&id, grow) in ids.iter().zip(g.chunks_exact(d)) {
                    dt[id * d..(id + 1) * d].iter_mut().zip(grow).for_each(|(t, g)| *t += g);
                }
                acc(*table, dt);
            }
            Op::Softmax { x, axis } => {
                let y = node.value.data();
                let (outer, len, inner) =
                    ops::axis_layout("softmax", node.value.shape(), *axis).expect("validated in forward");
                let mut dx = vec![0.0; y.len()];
                for o in 0..outer {
                    for j in 0..inner {
                        let idx = |i: usize| (o * len + i) * inner + j;
                        let dot: f64 = (0..len).map(|i| g[idx(i)] * y[idx(i)]).sum();
                        for i in 0..len {
                            dx[idx(i)] = y[idx(i)] * (g[idx(i)] - dot);
                        }
                    }
                }
                acc(*x, dx);
            }
            Op::Gate { x, gate } => {
                let (xv, gatev) = (val(*x), val(*gate));
                let lead = xv.shape()[0];
                let chunk = xv.len() / lead;
                let gate_at = |i: usize| {
                    if gatev.len() == 1 {
                        gatev.data()[0]
                    } else {
                        gatev.data()[i]
                    }
                };
                if self.wants(*x) {
                    let dx = g
                        .chunks_exact(chunk)
                        .enumerate()
                        .flat_map(|(i, gs)| gs.iter().map(move |v| v * gate_at(i)))
                        .collect();
                    acc(*x, dx);
                }
                if self.wants(*gate) {
                    let mut dg = vec![0.0; gatev.len()];
                    for (i, (gs, xs)) in g.chunks_exact(chunk).zip(xv.data().chunks_exact(chunk)).enumerate() {
                        let slot = if gatev.len() == 1 { 0 } else { i };
                        dg[slot] += gs.iter().zip(xs).map(|(a, b)| a * b).sum::<f64>();
                    }
                    acc(*gate, dg);
                }
            }
            Op::Reshape { x, .. } => acc(*x, g.to_vec()),
            Op::GatherRows { x, rows } => {
                let xv = val(*x);
                let d = xv.last_dim();
                let mut dx = vec![0.0; xv.len()];
                for (&r, grow) in rows.iter().zip(g.chunks_exact(d)) {
                    dx[r * d..(r + 1) * d].iter_mut().zip(grow).for_each(|(t, g)| *t += g);
                }
                acc(*x, dx);
            }
            Op::Sum(x) => acc(*x, vec![g[0]; val(*x).len()]),
            Op::CrossEntropy {
                logits,
                targets,
                weights,
            } => {
                let lv = val(*logits);
                let classes = lv.last_dim();
                let mut dl = vec![0.0; lv.len()];
                for (((row, drow), &t), &w) in lv
                    .data()
                    .chunks_exact(classes)
                    .zip(dl.chunks_exact_mut(classes))
                    .zip(targets)
                    .zip(weights)
                {
                    if w == 0.0 {
                        continue;
                    }
                    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                    let total: f64 = row.iter().map(|v| (v - max).exp()).sum();
                    for (d, v) in drow.iter_mut().zip(row) {
                        *d = g[0] * w * (v - max).exp() / total;
                    }
                    drow[t] -= g[0] * w;
                }
                acc(*logits, dl);
            }
        }
    }
}

fn dims3(t: &Tensor) -> (usize, usize, usize) {
    match *t.shape() {
        [r, c] => (1, r, c),
        [b, r, c] => (b, r, c),
        _ => unreachable!("matmul operands validated in forward"),
    }
}

fn eval<'a>(op: &Op, get: impl Fn(Var) -> &'a Tensor) -> Result<Tensor> {
    match op {
        Op::Input | Op::Detached => unreachable!("inputs are not evaluated"),
        Op::MatMul { a, b, trans_b } => ops::matmul(get(*a), get(*b), *trans_b),
        Op::Linear { x, w, b } => ops::linear(get(*x), get(*w), b.map(&get)),
        Op::Add(a, b) => ops::add(get(*a), get(*b)),
        Op::Mul(a, b) => ops::mul(get(*a), get(*b)),
        Op::Scale(x, f) => Ok(get(*x).map(|v| v * f)),
        Op::Relu(x) => Ok(ops::relu(get(*x))),
        Op::LayerNorm { x, gain, bias } => ops::layer_norm(get(*x), get(*gain), get(*bias)),
        Op::Embedding { table, ids, shape } => ops::embedding(get(*table), ids, shape),
        Op::Softmax { x, axis } => ops::softmax(get(*x), *axis),
        Op::Gate { x, gate } => ops::gate(get(*x), get(*gate)),
        Op::Reshape { x, shape } => get(*x).reshape(shape),
        Op::GatherRows { x, rows } => ops::gather_rows(get(*x), rows),
        Op::Sum(x) => Ok(Tensor::scalar(get(*x).sum())),
        Op::CrossEntropy {
            logits,
            targets,
            weights,
        } => ops::weighted_cross_entropy(get(*logits), targets, weights).map(Tensor::scalar),
    }
}

/// Gradients produced by [`Graph::backward`], indexed by [`Var`].
#[derive(Clone, Debug)]
pub struct GradientStore {
    grads: Vec<Option<Tensor>>,
    shapes: Vec<Vec<usize>>,
}

impl GradientStore {
    /// Gradient of `v`; a zero tensor when `v` does not reach the loss.
    pub fn get(&self, v: Var) -> Tensor {
        self.grads[v.0]
            .clone()
            .unwrap_or_else(|| Tensor::zeros(&self.shapes[v.0]))
    }

    pub fn try_get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Adds another worker's gradients, computed on a structurally identical record.
    pub fn accumulate(&mut self, other: &GradientStore) -> Result<()> {
        if self.shapes != other.shapes {
            return Err(TensorError::Invalid {
                op: "accumulate",
                msg: "gradient stores come from different records".into(),
            });
        }
        for (mine, theirs) in self.grads.iter_mut().zip(&other.grads) {
            match (mine.as_mut(), theirs) {
                (_, None) => {}
                (None, Some(t)) => *mine = Some(t.clone()),
                (Some(m), Some(t)) => m.data_mut().iter_mut().zip(t.data()).for_each(|(a, b)| *a += b),
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_of_parameters_has_unit_gradient() {
        let mut g = Graph::new();
        let a = g.input(Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap());
        let b = g.input(Tensor::vector(&[5.0, -6.0, 7.0]));
        let sa = g.sum(a).unwrap();
        let sb = g.sum(b).unwrap();
        let loss = g.add(sa, sb).unwrap();
        let grads = g.backward(loss).unwrap();
        assert!(grads.get(a).data().iter().all(|&v| v == 1.0));
        assert!(grads.get(b).data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn unreachable_parameter_gets_zero_gradient() {
        let mut g = Graph::new();
        let a = g.input(Tensor::vector(&[1.0, 2.0]));
        let unused = g.input(Tensor::ones(&[3, 2]));
        let loss = g.sum(a).unwrap();
        let grads = g.backward(loss).unwrap();
        assert!(grads.try_get(unused).is_none());
        assert_eq!(grads.get(unused), Tensor::zeros(&[3, 2]));
    }

    #[test]
    fn backward_rejects_foreign_or_vector_loss() {
        let mut g = Graph::new();
        let a = g.input(Tensor::vector(&[1.0, 2.0]));
        assert!(matches!(g.backward(a), Err(TensorError::NotScalar(_))));
        let other = Graph::new();
        assert_eq!(other.backward(a).unwrap_err(), TensorError::NotOnRecord);
        let mut inf = Graph::inference();
        let x = inf.input(Tensor::vector(&[1.0]));
        let s = inf.sum(x).unwrap();
        assert_eq!(inf.backward(s).unwrap_err(), TensorError::NotOnRecord);
    }

    #[test]
    fn shared_input_accumulates() {
        let mut g = Graph::new();
        let x = g.input(Tensor::vector(&[3.0]));
        let y = g.mul(x, x).unwrap();
        let loss = g.sum(y).unwrap();
        let grads = g.backward(loss).unwrap();
        assert_eq!(grads.get(x).data(), &[6.0]);
    }

    #[test]
    fn replay_reproduces_outputs() {
        let mut g = Graph::new();
        let x = g.input(Tensor::from_rows(&[vec![0.5, -1.0, 2.0]]).unwrap());
        let w = g.input(Tensor::from_rows(&[vec![1.0, 0.0, 2.0], vec![-1.0, 1.0, 0.5]]).unwrap());
        let h = g.linear(x, w, None).unwrap();
        let s = g.softmax(h, 1).unwrap();
        let loss = g.cross_entropy(h, &[1], &[false]).unwrap();
        let replayed = g.replay().unwrap();
        assert_eq!(&replayed[s.index()], g.value(s));
        assert_eq!(&replayed[loss.index()], g.value(loss));
    }

    #[test]
    fn relu_pattern_records_input_signs() {
        let mut g = Graph::new();
        let x = g.input(Tensor::vector(&[-1.0, 2.0, 0.0]));
        g.relu(x).unwrap();
        assert_eq!(g.relu_pattern(), vec![false, true, false]);
    }

    #[test]
    fn inference_values_match_recording() {
        let build = |g: &mut Graph| {
            let x = g.input(Tensor::from_rows(&[vec![0.5, -1.0], vec![2.0, 0.1]]).unwrap());
            let w = g.input(Tensor::from_rows(&[vec![1.0, 3.0], vec![-1.0, 1.0]]).unwrap());
            let h = g.matmul(x, w).unwrap();
            let r = g.relu(h).unwrap();
            g.value(r).clone()
        };
        assert_eq!(build(&mut Graph::new()), build(&mut Graph::inference()));
    }

    #[test]
    fn summed_stores_match_joint_backward() {
        let run = |vals: &[f64]| {
            let mut g = Graph::new();
            let w = g.input(Tensor::vector(&[0.3, -0.7]));
            let x = g.constant(Tensor::vector(vals));
            let y = g.mul(w, x).unwrap();
            let loss = g.sum(y).unwrap();
            (g.backward(loss).unwrap(), w)
        };
        let (mut a, w) = run(&[1.0, 2.0]);
        let (b, _) = run(&[3.0, -1.0]);
        a.accumulate(&b).unwrap();
        assert_eq!(a.get(w).data(), &[4.0, 1.0]);
    }
}
