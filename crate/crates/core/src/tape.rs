//! Reverse-mode differentiation over [`Tensor3`] values.
//!
//! A [`GradTape`] records every op in execution order. Node indices only
//! ever grow, so each op's inputs precede it and a single reverse sweep
//! visits operations in exact reverse execution order. Gradients reaching
//! a node from several consumers are summed.

use crate::ops;
use crate::tensor::{self, Elementwise, Result, Shape, Tensor3, TensorError};

/// Handle to a value recorded on a [`GradTape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Tanh(Var),
    Sigmoid(Var),
    Relu(Var),
    SliceChannels { x: Var, start: usize },
    Concat(Vec<Var>),
    Conv1d { x: Var, w: Var, b: Option<Var> },
    Dense { x: Var, w: Var, b: Option<Var> },
    AvgPool(Var),
    Mask { x: Var, mask: Vec<f64> },
    TimeStep { x: Var, t: usize },
    StackTime(Vec<Var>),
    ReverseTime(Var),
    Sum(Var),
    CrossEntropy { logits: Var, labels: Vec<usize>, probs: Vec<f64> },
    Mse { pred: Var, target: Var },
}

#[derive(Debug)]
struct Node {
    value: Tensor3,
    op: Op,
}

#[derive(Debug, Default)]
pub struct GradTape {
    nodes: Vec<Node>,
}

impl GradTape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    /// Which ReLU inputs are positive, in recording order. Two evaluations
    /// with equal patterns lie on the same linear piece of every ReLU.
    pub fn relu_pattern(&self) -> Vec<bool> {
        let mut pattern = Vec::new();
        for node in &self.nodes {
            if let Op::Relu(a) = node.op {
                pattern.extend(self.value(a).data().iter().map(|&v| v > 0.0));
            }
        }
        pattern
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Records an input (parameter or constant).
    pub fn leaf(&mut self, value: Tensor3) -> Var {
        self.push(value, Op::Leaf)
    }

    pub fn value(&self, v: Var) -> &Tensor3 {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> Shape {
        self.nodes[v.0].value.shape()
    }

    fn push(&mut self, value: Tensor3, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn elementwise(&mut self, op: Elementwise, a: Var, b: Option<Var>) -> Result<Var> {
        let value = tensor::elementwise(op, self.value(a), b.map(|b| self.value(b)))?;
        let rec = match (op, b) {
            (Elementwise::Add, Some(b)) => Op::Add(a, b),
            (Elementwise::Sub, Some(b)) => Op::Sub(a, b),
            (Elementwise::Mul, Some(b)) => Op::Mul(a, b),
            (Elementwise::Tanh, _) => Op::Tanh(a),
            (Elementwise::Sigmoid, _) => Op::Sigmoid(a),
            _ => Op::Relu(a),
        };
        Ok(self.push(value, rec))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.elementwise(Elementwise::Add, a, Some(b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.elementwise(Elementwise::Sub, a, Some(b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.elementwise(Elementwise::Mul, a, Some(b))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.elementwise(Elementwise::Tanh, a, None).expect("unary op")
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.elementwise(Elementwise::Sigmoid, a, None).expect("unary op")
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.elementwise(Elementwise::Relu, a, None).expect("unary op")
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Var {
        let value = self.value(a).map(|v| v * factor);
        self.push(value, Op::Scale(a, factor))
    }

    pub fn slice_channels(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let value = tensor::slice_channels(self.value(x), start, len)?;
        Ok(self.push(value, Op::SliceChannels { x, start }))
    }

    pub fn split_channels(&mut self, x: Var, groups: usize) -> Result<Vec<Var>> {
        let channels = self.shape(x).channels;
        if groups == 0 || !channels.is_multiple_of(groups) {
            return Err(TensorError::IndivisibleChannels { channels, groups });
        }
        let width = channels / groups;
        (0..groups).map(|g| self.slice_channels(x, g * width, width)).collect()
    }

    pub fn concat_channels(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.len() == 1 {
            return Ok(parts[0]);
        }
        let values: Vec<Tensor3> = parts.iter().map(|&p| self.value(p).clone()).collect();
        let value = tensor::concat_channels(&values)?;
        Ok(self.push(value, Op::Concat(parts.to_vec())))
    }

    /// Same-padded 1-D convolution; `w` is `out × in × k`, `b` is `1 × out × 1`.
    pub fn conv1d(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let value = ops::conv1d_forward(self.value(x), self.value(w), b.map(|b| self.value(b)))?;
        Ok(self.push(value, Op::Conv1d { x, w, b }))
    }

    /// Affine map of `B × in × 1` features; `w` is `out × in × 1`.
    pub fn dense(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let value = ops::dense_forward(self.value(x), self.value(w), b.map(|b| self.value(b)))?;
        Ok(self.push(value, Op::Dense { x, w, b }))
    }

    pub fn global_avg_pool(&mut self, x: Var) -> Var {
        let value = ops::avg_pool_forward(self.value(x));
        self.push(value, Op::AvgPool(x))
    }

    /// Elementwise product with a constant mask that is not differentiated.
    pub fn mask(&mut self, x: Var, mask: Vec<f64>) -> Result<Var> {
        let xv = self.value(x);
        if mask.len() != xv.shape().len() {
            return Err(TensorError::LengthMismatch { shape: xv.shape(), len: mask.len() });
        }
        let data = xv.data().iter().zip(&mask).map(|(a, m)| a * m).collect();
        let value = Tensor3::from_raw(xv.shape(), data);
        Ok(self.push(value, Op::Mask { x, mask }))
    }

    /// The `B × C × 1` slice at time index `t`.
    pub fn time_step(&mut self, x: Var, t: usize) -> Result<Var> {
        let xv = self.value(x);
        let s = xv.shape();
        if t >= s.time {
            return Err(TensorError::Invalid { op: "time_step", msg: format!("index {t} out of range for {s}") });
        }
        let data = (0..s.batch * s.channels).map(|r| xv.data()[r * s.time + t]).collect();
        let value = Tensor3::from_raw(Shape::new(s.batch, s.channels, 1), data);
        Ok(self.push(value, Op::TimeStep { x, t }))
    }

    /// Stacks `B × C × 1` steps into a `B × C × T` sequence.
    pub fn stack_time(&mut self, steps: &[Var]) -> Result<Var> {
        let first = *steps.first().ok_or(TensorError::Empty("stack_time"))?;
        let s0 = self.shape(first);
        for &v in steps {
            let s = self.shape(v);
            if s != s0 || s.time != 1 {
                return Err(TensorError::ShapeMismatch { op: "stack_time", left: s0, right: s });
            }
        }
        let time = steps.len();
        let shape = Shape::new(s0.batch, s0.channels, time);
        let mut data = vec![0.0; shape.len()];
        for (t, &v) in steps.iter().enumerate() {
            for (r, &val) in self.value(v).data().iter().enumerate() {
                data[r * time + t] = val;
            }
        }
        let value = Tensor3::from_raw(shape, data);
        Ok(self.push(value, Op::StackTime(steps.to_vec())))
    }

    pub fn reverse_time(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let s = xv.shape();
        let mut data = xv.data().to_vec();
        for row in data.chunks_mut(s.time) {
            row.reverse();
        }
        let value = Tensor3::from_raw(s, data);
        self.push(value, Op::ReverseTime(x))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let value = Tensor3::scalar(self.value(x).sum());
        self.push(value, Op::Sum(x))
    }

    /// Mean over the batch of `-log softmax(logits)[label]`; logits are `B × classes × 1`.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let lv = self.value(logits);
        let s = lv.shape();
        if s.time != 1 || labels.len() != s.batch {
            return Err(TensorError::Invalid {
                op: "cross_entropy",
                msg: format!("logits {s} incompatible with {} labels", labels.len()),
            });
        }
        let classes = s.channels;
        if let Some(&label) = labels.iter().find(|&&l| l >= classes) {
            return Err(TensorError::LabelOutOfRange { label, classes });
        }
        let mut probs = Vec::with_capacity(s.len());
        let mut total = 0.0;
        for (b, &label) in labels.iter().enumerate() {
            let row = &lv.data()[b * classes..(b + 1) * classes];
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = row.iter().map(|v| (v - max).exp()).sum();
            let lse = max + z.ln();
            total += lse - row[label];
            probs.extend(row.iter().map(|v| (v - lse).exp()));
        }
        let value = Tensor3::scalar(total / s.batch as f64);
        Ok(self.push(value, Op::CrossEntropy { logits, labels: labels.to_vec(), probs }))
    }

    pub fn mse(&mut self, pred: Var, target: Var) -> Result<Var> {
        let (p, t) = (self.value(pred), self.value(target));
        if p.shape() != t.shape() {
            return Err(TensorError::ShapeMismatch { op: "mse", left: p.shape(), right: t.shape() });
        }
        let n = p.shape().len() as f64;
        let loss = p.data().iter().zip(t.data()).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / n;
        Ok(self.push(Tensor3::scalar(loss), Op::Mse { pred, target }))
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let loss_shape = self.shape(loss);
        if loss_shape != Shape::SCALAR {
            return Err(TensorError::NotScalar(loss_shape));
        }
        let mut grads: Vec<Option<Tensor3>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Tensor3::scalar(1.0));
        let mut visited = Vec::new();
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            visited.push(Var(i));
            let node = &self.nodes[i];
            self.propagate(node, &g, &mut grads);
            grads[i] = Some(g);
        }
        let shapes = self.nodes.iter().map(|n| n.value.shape()).collect();
        Ok(Gradients { grads, shapes, visited })
    }

    fn propagate(&self, node: &Node, g: &Tensor3, grads: &mut [Option<Tensor3>]) {
        let y = &node.value;
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                accumulate(grads, *a, self.shape(*a), |d| add_into(d, g.data()));
                accumulate(grads, *b, self.shape(*b), |d| add_into(d, g.data()));
            }
            Op::Sub(a, b) => {
                accumulate(grads, *a, self.shape(*a), |d| add_into(d, g.data()));
                accumulate(grads, *b, self.shape(*b), |d| {
                    d.iter_mut().zip(g.data()).for_each(|(d, g)| *d -= g)
                });
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                accumulate(grads, *a, self.shape(*a), |d| {
                    for ((d, g), b) in d.iter_mut().zip(g.data()).zip(bv) {
                        *d += g * b;
                    }
                });
                accumulate(grads, *b, self.shape(*b), |d| {
                    for ((d, g), a) in d.iter_mut().zip(g.data()).zip(av) {
                        *d += g * a;
                    }
                });
            }
            Op::Scale(a, f) => {
                accumulate(grads, *a, self.shape(*a), |d| {
                    d.iter_mut().zip(g.data()).for_each(|(d, g)| *d += g * f)
                });
            }
            Op::Tanh(a) => accumulate(grads, *a, self.shape(*a), |d| {
                for ((d, g), y) in d.iter_mut().zip(g.data()).zip(y.data()) {
                    *d += g * (1.0 - y * y);
                }
            }),
            Op::Sigmoid(a) => accumulate(grads, *a, self.shape(*a), |d| {
                for ((d, g), y) in d.iter_mut().zip(g.data()).zip(y.data()) {
                    *d += g * y * (1.0 - y);
                }
            }),
            Op::Relu(a) => {
                let xv = self.value(*a).data();
                accumulate(grads, *a, self.shape(*a), |d| {
                    for ((d, g), x) in d.iter_mut().zip(g.data()).zip(xv) {
                        if *x > 0.0 {
                            *d += g;
                        }
                    }
                })
            }
            Op::SliceChannels { x, start } => {
                let xs = self.shape(*x);
                let len = g.channels() * xs.time;
                accumulate(grads, *x, xs, |d| {
                    for b in 0..xs.batch {
                        let from = xs.index(b, *start, 0);
                        add_into(&mut d[from..from + len], &g.data()[b * len..(b + 1) * len]);
                    }
                });
            }
            Op::Concat(parts) => {
                let time = g.time();
                let mut offset = 0;
                for &p in parts {
                    let ps = self.shape(p);
                    let len = ps.channels * time;
                    accumulate(grads, p, ps, |d| {
                        for b in 0..ps.batch {
                            let from = g.shape().index(b, offset, 0);
                            add_into(&mut d[b * len..(b + 1) * len], &g.data()[from..from + len]);
                        }
                    });
                    offset += ps.channels;
                }
            }
            Op::Conv1d { x, w, b } => {
                let cg = ops::conv1d_backward(self.value(*x), self.value(*w), g);
                self.accumulate_affine(grads, *x, *w, *b, cg);
            }
            Op::Dense { x, w, b } => {
                let cg = ops::dense_backward(self.value(*x), self.value(*w), g);
                self.accumulate_affine(grads, *x, *w, *b, cg);
            }
            Op::AvgPool(x) => {
                let xs = self.shape(*x);
                let inv = 1.0 / xs.time as f64;
                accumulate(grads, *x, xs, |d| {
                    for (row, gv) in d.chunks_mut(xs.time).zip(g.data()) {
                        row.iter_mut().for_each(|d| *d += gv * inv);
                    }
                });
            }
            Op::Mask { x, mask } => accumulate(grads, *x, self.shape(*x), |d| {
                for ((d, g), m) in d.iter_mut().zip(g.data()).zip(mask) {
                    *d += g * m;
                }
            }),
            Op::TimeStep { x, t } => {
                let xs = self.shape(*x);
                accumulate(grads, *x, xs, |d| {
                    for (r, gv) in g.data().iter().enumerate() {
                        d[r * xs.time + t] += gv;
                    }
                });
            }
            Op::StackTime(steps) => {
                let time = steps.len();
                for (t, &s) in steps.iter().enumerate() {
                    accumulate(grads, s, self.shape(s), |d| {
                        for (r, d) in d.iter_mut().enumerate() {
                            *d += g.data()[r * time + t];
                        }
                    });
                }
            }
            Op::ReverseTime(x) => {
                let xs = self.shape(*x);
                accumulate(grads, *x, xs, |d| {
                    for (drow, grow) in d.chunks_mut(xs.time).zip(g.data().chunks(xs.time)) {
                        for (dv, gv) in drow.iter_mut().zip(grow.iter().rev()) {
                            *dv += gv;
                        }
                    }
                });
            }
            Op::Sum(x) => {
                let gv = g.data()[0];
                accumulate(grads, *x, self.shape(*x), |d| d.iter_mut().for_each(|d| *d += gv));
            }
            Op::CrossEntropy { logits, labels, probs } => {
                let ls = self.shape(*logits);
                let scale = g.data()[0] / ls.batch as f64;
                accumulate(grads, *logits, ls, |d| {
                    for (i, (d, p)) in d.iter_mut().zip(probs).enumerate() {
                        let onehot = if labels[i / ls.channels] == i % ls.channels { 1.0 } else { 0.0 };
                        *d += scale * (p - onehot);
                    }
                });
            }
            Op::Mse { pred, target } => {
                let (p, t) = (self.value(*pred).data(), self.value(*target).data());
                let scale = 2.0 * g.data()[0] / p.len() as f64;
                accumulate(grads, *pred, self.shape(*pred), |d| {
                    for ((d, p), t) in d.iter_mut().zip(p).zip(t) {
                        *d += scale * (p - t);
                    }
                });
                accumulate(grads, *target, self.shape(*target), |d| {
                    for ((d, p), t) in d.iter_mut().zip(p).zip(t) {
                        *d -= scale * (p - t);
                    }
                });
            }
        }
    }

    fn accumulate_affine(&self, grads: &mut [Option<Tensor3>], x: Var, w: Var, b: Option<Var>, cg: ops::ConvGrads) {
        accumulate(grads, x, self.shape(x), |d| add_into(d, cg.dx.data()));
        accumulate(grads, w, self.shape(w), |d| add_into(d, cg.dw.data()));
        if let Some(b) = b {
            accumulate(grads, b, self.shape(b), |d| add_into(d, cg.db.data()));
        }
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    dst.iter_mut().zip(src).for_each(|(d, s)| *d += s);
}

fn accumulate(grads: &mut [Option<Tensor3>], v: Var, shape: Shape, f: impl FnOnce(&mut [f64])) {
    let slot = grads[v.0].get_or_insert_with(|| Tensor3::zeros(shape));
    f(slot.data_mut());
}

/// Result of [`GradTape::backward`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor3>>,
    shapes: Vec<Shape>,
    visited: Vec<Var>,
}

impl Gradients {
    /// Gradient of the loss with respect to `v`; exact zeros when `v` does not influence it.
    pub fn get(&self, v: Var) -> Tensor3 {
        match &self.grads[v.0] {
            Some(g) => g.clone(),
            None => Tensor3::zeros(self.shapes[v.0]),
        }
    }

    pub fn wrt(&self, v: Var) -> Option<&Tensor3> {
        self.grads[v.0].as_ref()
    }

    /// Nodes reached by the reverse sweep, in visiting order.
    pub fn visited(&self) -> &[Var] {
        &self.visited
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_gradient_is_ones() {
        let mut tape = GradTape::new();
        let x = tape.leaf(Tensor3::from_vec(1, 2, 2, vec![1.0, -2.0, 3.0, 0.5]).unwrap());
        let loss = tape.sum(x);
        let g = tape.backward(loss).unwrap();
        assert_eq!(g.get(x), Tensor3::ones(Shape::new(1, 2, 2)));
    }

    #[test]
    fn square_gradient() {
        let mut tape = GradTape::new();
        let x = tape.leaf(Tensor3::scalar(3.0));
        let sq = tape.mul(x, x).unwrap();
        let loss = tape.sum(sq);
        let g = tape.backward(loss).unwrap();
        assert_eq!(g.get(x).as_scalar().unwrap(), 6.0);
    }

    #[test]
    fn unused_leaf_gets_exact_zero() {
        let mut tape = GradTape::new();
        let x = tape.leaf(Tensor3::scalar(3.0));
        let unused = tape.leaf(Tensor3::full(Shape::new(1, 2, 1), 7.0));
        let loss = tape.sum(x);
        let g = tape.backward(loss).unwrap();
        assert!(g.wrt(unused).is_none());
        assert_eq!(g.get(unused), Tensor3::zeros(Shape::new(1, 2, 1)));
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let mut tape = GradTape::new();
        let x = tape.leaf(Tensor3::zeros(Shape::new(1, 2, 1)));
        assert_eq!(tape.backward(x).unwrap_err(), TensorError::NotScalar(Shape::new(1, 2, 1)));
    }

    #[test]
    fn reverse_visit_order() {
        let mut tape = GradTape::new();
        let x = tape.leaf(Tensor3::scalar(0.3));
        let a = tape.tanh(x);
        let b = tape.sigmoid(a);
        let c = tape.mul(a, b).unwrap();
        let loss = tape.sum(c);
        let g = tape.backward(loss).unwrap();
        assert_eq!(g.visited(), &[loss, c, b, a, x]);
    }

    #[test]
    fn fan_out_accumulates() {
        // y = x + x + x  => dy/dx = 3
        let mut tape = GradTape::new();
        let x = tape.leaf(Tensor3::scalar(1.5));
        let a = tape.add(x, x).unwrap();
        let b = tape.add(a, x).unwrap();
        let loss = tape.sum(b);
        assert_eq!(tape.backward(loss).unwrap().get(x).as_scalar().unwrap(), 3.0);
    }

    #[test]
    fn cross_entropy_rejects_bad_label() {
        let mut tape = GradTape::new();
        let l = tape.leaf(Tensor3::zeros(Shape::new(2, 3, 1)));
        assert_eq!(
            tape.cross_entropy(l, &[0, 3]).unwrap_err(),
            TensorError::LabelOutOfRange { label: 3, classes: 3 }
        );
    }
}
