//! Tape-based reverse-mode differentiation over 2-D tensors.
//!
//! A [`Graph`] is built fresh for every step: each operation appends a node
//! holding its forward value, and [`Graph::backward`] walks the tape once in
//! reverse. Parameter leaves are copied out of a [`ParamStore`] and their
//! gradients are accumulated back into it.

use std::rc::Rc;

use super::params::ParamStore;
use crate::diffusion::PosteriorMap;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Handle to a node on the tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Constant,
    Param { store: u64, offset: usize },
    MatMul(Var, Var),
    AddBias(Var, Var),
    Add(Var, Var),
    Mul(Var, Var),
    MulConst(Var, Rc<Tensor>),
    Scale(Var, f64),
    Silu(Var),
    Gather(Var, Rc<Vec<usize>>),
    MixPositions { x: Var, mix: Var, positions: usize },
    Softmax(Var),
    LogSoftmax(Var),
    LogFloor(Var, f64),
    DotConst(Var, Rc<Tensor>),
    Sum(Var),
    Posterior(Var, Rc<PosteriorMap>),
}

impl Op {
    fn parents(&self) -> Vec<Var> {
        use Op::*;
        match self {
            Constant | Param { .. } => vec![],
            MatMul(a, b) | AddBias(a, b) | Add(a, b) | Mul(a, b) => vec![*a, *b],
            MixPositions { x, mix, .. } => vec![*x, *mix],
            MulConst(a, _)
            | Scale(a, _)
            | Silu(a)
            | Gather(a, _)
            | Softmax(a)
            | LogSoftmax(a)
            | LogFloor(a, _)
            | DotConst(a, _)
            | Sum(a)
            | Posterior(a, _) => {
                vec![*a]
            }
        }
    }
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
}

#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

fn dims2(t: &Tensor) -> (usize, usize) {
    (t.rows(), t.cols())
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Constant)
    }

    /// Read a parameter block as a differentiable leaf.
    pub fn param(&mut self, store: &ParamStore, block: &str) -> Result<Var> {
        let b = store.block(block)?;
        let value = Tensor::new(b.shape.clone(), store.values()[b.range()].to_vec())?;
        Ok(self.push(
            value,
            Op::Param {
                store: store.id(),
                offset: b.offset,
            },
        ))
    }

    /// Stop-gradient: a constant copy of `v`. Nothing upstream of the
    /// returned node receives gradient through it.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.value(v).clone();
        self.constant(value)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (n, k) = dims2(self.value(a));
        let (k2, m) = dims2(self.value(b));
        if k != k2 {
            return Err(Error::Shape(format!("matmul {n}x{k} by {k2}x{m}")));
        }
        let av = self.value(a).data();
        let bv = self.value(b).data();
        let mut out = vec![0.0; n * m];
        for i in 0..n {
            let orow = &mut out[i * m..(i + 1) * m];
            for kk in 0..k {
                let aik = av[i * k + kk];
                if aik == 0.0 {
                    continue;
                }
                let brow = &bv[kk * m..(kk + 1) * m];
                for (o, &bval) in orow.iter_mut().zip(brow) {
                    *o += aik * bval;
                }
            }
        }
        let value = Tensor::new(vec![n, m], out)?;
        Ok(self.push(value, Op::MatMul(a, b)))
    }

    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (n, m) = dims2(self.value(x));
        if self.value(bias).len() != m {
            return Err(Error::Shape(format!(
                "bias of length {} for {m} columns",
                self.value(bias).len()
            )));
        }
        let bv = self.value(bias).data().to_vec();
        let mut value = self.value(x).clone().reshape(vec![n, m])?;
        for r in 0..n {
            for (o, b) in value.row_mut(r).iter_mut().zip(&bv) {
                *o += b;
            }
        }
        Ok(self.push(value, Op::AddBias(x, bias)))
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(Error::Shape(format!(
                "{what}: {:?} vs {:?}",
                self.value(a).shape(),
                self.value(b).shape()
            )));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let mut value = self.value(a).clone();
        for (o, y) in value.data_mut().iter_mut().zip(self.value(b).data()) {
            *o += y;
        }
        Ok(self.push(value, Op::Add(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        let mut value = self.value(a).clone();
        for (o, y) in value.data_mut().iter_mut().zip(self.value(b).data()) {
            *o *= y;
        }
        Ok(self.push(value, Op::Mul(a, b)))
    }

    /// Elementwise product with a constant tensor of the same shape.
    pub fn mul_const(&mut self, a: Var, c: Tensor) -> Result<Var> {
        if c.shape() != self.value(a).shape() {
            return Err(Error::Shape("mul_const shape mismatch".into()));
        }
        let mut value = self.value(a).clone();
        for (o, y) in value.data_mut().iter_mut().zip(c.data()) {
            *o *= y;
        }
        Ok(self.push(value, Op::MulConst(a, Rc::new(c))))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let value = self.value(a).map(|v| v * c);
        self.push(value, Op::Scale(a, c))
    }

    pub fn silu(&mut self, a: Var) -> Var {
        let value = self.value(a).map(|x| x * sigmoid(x));
        self.push(value, Op::Silu(a))
    }

    /// Select rows of a 2-D `table` by index.
    pub fn gather(&mut self, table: Var, ids: Vec<usize>) -> Result<Var> {
        let (rows, m) = dims2(self.value(table));
        let tv = self.value(table).data();
        let mut out = Vec::with_capacity(ids.len() * m);
        for &i in &ids {
            if i >= rows {
                return Err(Error::Shape(format!("gather index {i} of {rows} rows")));
            }
            out.extend_from_slice(&tv[i * m..(i + 1) * m]);
        }
        let value = Tensor::new(vec![ids.len(), m], out)?;
        Ok(self.push(value, Op::Gather(table, Rc::new(ids))))
    }

    /// Mix rows across sequence positions: `x` is `[batch*positions, h]`,
    /// `mix` is `[positions, positions]`, and
    /// `out[b,d] = Σ_e mix[d,e] · x[b,e]`.
    pub fn mix_positions(&mut self, x: Var, mix: Var, positions: usize) -> Result<Var> {
        let (rows, h) = dims2(self.value(x));
        if self.value(mix).shape() != [positions, positions] || rows % positions.max(1) != 0 {
            return Err(Error::Shape("mix_positions shape mismatch".into()));
        }
        let xv = self.value(x).data();
        let mv = self.value(mix).data();
        let mut out = vec![0.0; rows * h];
        for b in 0..rows / positions {
            for d in 0..positions {
                let orow = (b * positions + d) * h;
                for e in 0..positions {
                    let w = mv[d * positions + e];
                    let irow = (b * positions + e) * h;
                    for j in 0..h {
                        out[orow + j] += w * xv[irow + j];
                    }
                }
            }
        }
        let value = Tensor::new(vec![rows, h], out)?;
        Ok(self.push(value, Op::MixPositions { x, mix, positions }))
    }

    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        let value = crate::numerics::softmax_last(self.value(a))?;
        Ok(self.push(value, Op::Softmax(a)))
    }

    pub fn log_softmax(&mut self, a: Var) -> Result<Var> {
        let value = crate::numerics::log_softmax_last(self.value(a))?;
        Ok(self.push(value, Op::LogSoftmax(a)))
    }

    /// `ln(max(x, floor))`; zero gradient where the floor is active.
    pub fn log_floor(&mut self, a: Var, floor: f64) -> Var {
        let value = self.value(a).map(|x| x.max(floor).ln());
        self.push(value, Op::LogFloor(a, floor))
    }

    /// Scalar `Σ_i a_i c_i` against a constant tensor.
    pub fn dot_const(&mut self, a: Var, c: Tensor) -> Result<Var> {
        if c.len() != self.value(a).len() {
            return Err(Error::Shape("dot_const length mismatch".into()));
        }
        let s: f64 = self
            .value(a)
            .data()
            .iter()
            .zip(c.data())
            .filter(|(_, &w)| w != 0.0)
            .map(|(x, w)| x * w)
            .sum();
        Ok(self.push(Tensor::scalar(s), Op::DotConst(a, Rc::new(c))))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().sum();
        self.push(Tensor::scalar(s), Op::Sum(a))
    }

    /// Row-wise posterior transform of probability rows (see [`PosteriorMap`]).
    pub fn posterior(&mut self, x: Var, map: Rc<PosteriorMap>) -> Result<Var> {
        let value = map.forward(self.value(x))?;
        Ok(self.push(value, Op::Posterior(x, map)))
    }

    /// Reverse pass from the scalar `loss`, accumulating `∂loss/∂θ` into the
    /// gradient buffers of `stores`. Leaves from stores that are not passed
    /// are treated as constants.
    pub fn backward(&self, loss: Var, stores: &mut [&mut ParamStore]) -> Result<()> {
        if loss.0 >= self.nodes.len() {
            return Err(Error::Graph("loss node not on this tape".into()));
        }
        if self.value(loss).len() != 1 {
            return Err(Error::Graph(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        for (i, n) in self.nodes.iter().enumerate().take(loss.0 + 1) {
            if n.op.parents().iter().any(|p| p.0 >= i) {
                return Err(Error::Graph(format!("cycle at node {i}")));
            }
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            match &node.op {
                Op::Constant => {}
                Op::Param { store, offset } => {
                    if let Some(s) = stores.iter_mut().find(|s| s.id() == *store) {
                        let buf = &mut s.grads_mut()[*offset..*offset + g.len()];
                        for (b, v) in buf.iter_mut().zip(&g) {
                            *b += v;
                        }
                    }
                }
                op => self.propagate(op, &node.value, &g, &mut grads),
            }
        }
        Ok(())
    }

    fn propagate(&self, op: &Op, out: &Tensor, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let mut acc = |v: Var, delta: Vec<f64>| match &mut grads[v.0] {
            Some(existing) => {
                for (e, d) in existing.iter_mut().zip(delta) {
                    *e += d;
                }
            }
            slot @ None => *slot = Some(delta),
        };
        match op {
            Op::Constant | Op::Param { .. } => unreachable!(),
            Op::MatMul(a, b) => {
                let av = self.value(*a).data();
                let bv = self.value(*b).data();
                let (n, k) = dims2(self.value(*a));
                let m = self.value(*b).cols();
                let mut da = vec![0.0; n * k];
                let mut db = vec![0.0; k * m];
                for i in 0..n {
                    let grow = &g[i * m..(i + 1) * m];
                    for kk in 0..k {
                        let brow = &bv[kk * m..(kk + 1) * m];
                        da[i * k + kk] = grow.iter().zip(brow).map(|(x, y)| x * y).sum();
                        let aik = av[i * k + kk];
                        if aik != 0.0 {
                            let dbrow = &mut db[kk * m..(kk + 1) * m];
                            for (d, &gv) in dbrow.iter_mut().zip(grow) {
                                *d += aik * gv;
                            }
                        }
                    }
                }
                acc(*a, da);
                acc(*b, db);
            }
            Op::AddBias(x, b) => {
                let m = self.value(*b).len();
                let mut db = vec![0.0; m];
                for row in g.chunks(m) {
                    for (d, v) in db.iter_mut().zip(row) {
                        *d += v;
                    }
                }
                acc(*x, g.to_vec());
                acc(*b, db);
            }
            Op::Add(a, b) => {
                acc(*a, g.to_vec());
                acc(*b, g.to_vec());
            }
            Op::Mul(a, b) => {
                let av = self.value(*a).data();
                let bv = self.value(*b).data();
                acc(*a, g.iter().zip(bv).map(|(x, y)| x * y).collect());
                acc(*b, g.iter().zip(av).map(|(x, y)| x * y).collect());
            }
            Op::MulConst(a, c) => {
                acc(*a, g.iter().zip(c.data()).map(|(x, y)| x * y).collect());
            }
            Op::Scale(a, c) => acc(*a, g.iter().map(|x| x * c).collect()),
            Op::Silu(a) => {
                let xv = self.value(*a).data();
                acc(
                    *a,
                    g.iter()
                        .zip(xv)
                        .map(|(gv, &x)| {
                            let s = sigmoid(x);
                            gv * s * (1.0 + x * (1.0 - s))
                        })
                        .collect(),
                );
            }
            Op::Gather(table, ids) => {
                let m = self.value(*table).cols();
                let mut dt = vec![0.0; self.value(*table).len()];
                for (r, &i) in ids.iter().enumerate() {
                    for j in 0..m {
                        dt[i * m + j] += g[r * m + j];
                    }
                }
                acc(*table, dt);
            }
            Op::MixPositions { x, mix, positions } => {
                let p = *positions;
                let xv = self.value(*x).data();
                let mv = self.value(*mix).data();
                let (rows, h) = dims2(self.value(*x));
                let mut dx = vec![0.0; rows * h];
                let mut dm = vec![0.0; p * p];
                for b in 0..rows / p {
                    for d in 0..p {
                        let orow = (b * p + d) * h;
                        for e in 0..p {
                            let irow = (b * p + e) * h;
                            let w = mv[d * p + e];
                            let mut dw = 0.0;
                            for j in 0..h {
                                dx[irow + j] += w * g[orow + j];
                                dw += g[orow + j] * xv[irow + j];
                            }
                            dm[d * p + e] += dw;
                        }
                    }
                }
                acc(*x, dx);
                acc(*mix, dm);
            }
            Op::Softmax(a) => {
                let m = out.cols();
                let y = out.data();
                let mut dx = vec![0.0; y.len()];
                for r in 0..y.len() / m {
                    let ys = &y[r * m..(r + 1) * m];
                    let gs = &g[r * m..(r + 1) * m];
                    let dot: f64 = ys.iter().zip(gs).map(|(a, b)| a * b).sum();
                    for j in 0..m {
                        dx[r * m + j] = ys[j] * (gs[j] - dot);
                    }
                }
                acc(*a, dx);
            }
            Op::LogSoftmax(a) => {
                let m = out.cols();
                let y = out.data();
                let mut dx = vec![0.0; y.len()];
                for r in 0..y.len() / m {
                    let gs = &g[r * m..(r + 1) * m];
                    let total: f64 = gs.iter().sum();
                    for j in 0..m {
                        dx[r * m + j] = gs[j] - y[r * m + j].exp() * total;
                    }
                }
                acc(*a, dx);
            }
            Op::LogFloor(a, floor) => {
                let xv = self.value(*a).data();
                acc(
                    *a,
                    g.iter()
                        .zip(xv)
                        .map(|(gv, &x)| if x > *floor { gv / x } else { 0.0 })
                        .collect(),
                );
            }
            Op::DotConst(a, c) => {
                let s = g[0];
                acc(*a, c.data().iter().map(|w| w * s).collect());
            }
            Op::Sum(a) => {
                let n = self.value(*a).len();
                acc(*a, vec![g[0]; n]);
            }
            Op::Posterior(x, map) => {
                acc(*x, map.backward(self.value(*x), out, g));
            }
        }
    }
}
