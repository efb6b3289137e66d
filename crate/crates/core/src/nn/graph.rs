//! Tape-based reverse-mode differentiation over [`Tensor`]s.
//!
//! A [`Graph`] records every operation of one forward pass. Parameters are
//! read in place from a borrowed [`ParameterStore`]; [`Graph::backward`]
//! returns the gradient of a scalar output with respect to every parameter
//! the pass touched.

use std::collections::HashMap;

use super::ops;
use super::params::{ParamId, ParameterStore};
use super::tensor::Tensor;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Input,
    Param(ParamId),
    Detach,
    MatMul(Var, Var),
    Transpose(Var),
    Reshape(Var),
    Add(Var, Var),
    AddBias(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Tanh(Var),
    Sigmoid(Var),
    Softmax(Var),
    Concat(Vec<Var>),
    StackCols(Vec<Var>),
    MeanCols(Var),
    Index(Var, usize),
    Sum(Var),
    CrossEntropy(Var, u8),
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Input => "input",
            Op::Param(_) => "param",
            Op::Detach => "detach",
            Op::MatMul(..) => "matmul",
            Op::Transpose(_) => "transpose",
            Op::Reshape(_) => "reshape",
            Op::Add(..) => "add",
            Op::AddBias(..) => "add_bias",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::Tanh(_) => "tanh",
            Op::Sigmoid(_) => "sigmoid",
            Op::Softmax(_) => "softmax",
            Op::Concat(_) => "concat",
            Op::StackCols(_) => "stack_cols",
            Op::MeanCols(_) => "mean_cols",
            Op::Index(..) => "index",
            Op::Sum(_) => "sum",
            Op::CrossEntropy(..) => "cross_entropy",
        }
    }
}

struct Node {
    /// `None` for parameters, which live in the store.
    value: Option<Tensor>,
    op: Op,
    requires_grad: bool,
}

pub struct Graph<'s> {
    store: &'s ParameterStore,
    nodes: Vec<Node>,
    bound: HashMap<ParamId, Var>,
}

/// Gradients of one backward pass, keyed by parameter.
pub type ParamGrads = Vec<(ParamId, Tensor)>;

impl<'s> Graph<'s> {
    pub fn new(store: &'s ParameterStore) -> Self {
        Graph {
            store,
            nodes: Vec::with_capacity(256),
            bound: HashMap::new(),
        }
    }

    pub fn store(&self) -> &'s ParameterStore {
        self.store
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        let node = &self.nodes[v.0];
        match (&node.value, &node.op) {
            (Some(t), _) => t,
            (None, Op::Param(id)) => self.store.value(*id),
            _ => unreachable!("only parameters have no stored value"),
        }
    }

    fn push(&mut self, value: Tensor, op: Op) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::Numeric { op: op.name() });
        }
        let requires_grad = match &op {
            Op::Input | Op::Detach => false,
            Op::Param(_) => true,
            Op::MatMul(a, b) | Op::Add(a, b) | Op::AddBias(a, b) | Op::Mul(a, b) => {
                self.rg(*a) || self.rg(*b)
            }
            Op::Transpose(a)
            | Op::Reshape(a)
            | Op::Scale(a, _)
            | Op::Tanh(a)
            | Op::Sigmoid(a)
            | Op::Softmax(a)
            | Op::MeanCols(a)
            | Op::Index(a, _)
            | Op::Sum(a)
            | Op::CrossEntropy(a, _) => self.rg(*a),
            Op::Concat(vs) | Op::StackCols(vs) => vs.iter().any(|v| self.rg(*v)),
        };
        self.nodes.push(Node {
            value: Some(value),
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn input(&mut self, t: Tensor) -> Result<Var> {
        self.push(t, Op::Input)
    }

    /// Binds a parameter; repeated calls return the same variable.
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(&v) = self.bound.get(&id) {
            return v;
        }
        self.nodes.push(Node {
            value: None,
            op: Op::Param(id),
            requires_grad: true,
        });
        let v = Var(self.nodes.len() - 1);
        self.bound.insert(id, v);
        v
    }

    /// Same value, no gradient flows through.
    pub fn detach(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a).clone();
        self.push(t, Op::Detach)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = ops::matmul(self.value(a), self.value(b))?;
        self.push(t, Op::MatMul(a, b))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let t = ops::transpose(self.value(a));
        self.push(t, Op::Transpose(a))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(a).clone().reshaped(shape)?;
        self.push(t, Op::Reshape(a))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.value(a).zip_map(self.value(b), "add", |x, y| x + y)?;
        self.push(t, Op::Add(a, b))
    }

    /// Adds vector `b` to every column of matrix `m` (or to vector `m`).
    pub fn add_bias(&mut self, m: Var, b: Var) -> Result<Var> {
        let (mt, bt) = (self.value(m), self.value(b));
        if bt.shape().len() != 1 || bt.len() != mt.rows() {
            return Err(Error::Shape {
                op: "add_bias",
                left: mt.shape().to_vec(),
                right: bt.shape().to_vec(),
            });
        }
        let cols = mt.cols();
        let mut t = mt.clone();
        for (r, row) in t.data_mut().chunks_mut(cols).enumerate() {
            let bias = bt.data()[r];
            row.iter_mut().for_each(|x| *x += bias);
        }
        self.push(t, Op::AddBias(m, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.value(a).zip_map(self.value(b), "mul", |x, y| x * y)?;
        self.push(t, Op::Mul(a, b))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Result<Var> {
        let t = self.value(a).map(|x| x * s);
        self.push(t, Op::Scale(a, s))
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        let t = ops::tanh_map(self.value(a));
        self.push(t, Op::Tanh(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a).map(ops::sigmoid);
        self.push(t, Op::Sigmoid(a))
    }

    /// Softmax over all entries; the shape is preserved.
    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        let x = self.value(a);
        let shape = x.shape().to_vec();
        let t = Tensor::new(shape, ops::softmax(x.data())?)?;
        self.push(t, Op::Softmax(a))
    }

    /// Vertical concatenation: vectors end to end, or matrices with equal
    /// column counts stacked by rows.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let first = self.value(*parts.first().ok_or(Error::Shape {
            op: "concat",
            left: vec![],
            right: vec![],
        })?);
        let rank = first.shape().len();
        let cols = first.cols();
        let mut rows = 0;
        let mut data = Vec::new();
        for &p in parts {
            let t = self.value(p);
            if t.shape().len() != rank || (rank == 2 && t.cols() != cols) || rank > 2 {
                return Err(Error::Shape {
                    op: "concat",
                    left: first.shape().to_vec(),
                    right: t.shape().to_vec(),
                });
            }
            rows += t.rows();
            data.extend_from_slice(t.data());
        }
        let shape = if rank == 2 {
            vec![rows, cols]
        } else {
            vec![data.len()]
        };
        let t = Tensor::new(shape, data)?;
        self.push(t, Op::Concat(parts.to_vec()))
    }

    /// Stacks equal-length vectors as the columns of a matrix.
    pub fn stack_cols(&mut self, cols: &[Var]) -> Result<Var> {
        let k = cols.len();
        let n = cols.first().map_or(0, |&c| self.value(c).len());
        let mut data = vec![0.0; n * k];
        for (j, &c) in cols.iter().enumerate() {
            let t = self.value(c);
            if t.shape().len() != 1 || t.len() != n {
                return Err(Error::Shape {
                    op: "stack_cols",
                    left: vec![n],
                    right: t.shape().to_vec(),
                });
            }
            for (r, &x) in t.data().iter().enumerate() {
                data[r * k + j] = x;
            }
        }
        let t = Tensor::matrix(n, k, data)?;
        self.push(t, Op::StackCols(cols.to_vec()))
    }

    /// Mean over the columns of a matrix, as a vector.
    pub fn mean_cols(&mut self, m: Var) -> Result<Var> {
        let t = self.value(m);
        let (r, c) = (t.rows(), t.cols());
        if c == 0 {
            return Err(Error::Shape {
                op: "mean_cols",
                left: t.shape().to_vec(),
                right: vec![],
            });
        }
        let out = t
            .data()
            .chunks(c)
            .map(|row| row.iter().sum::<f64>() / c as f64)
            .collect::<Vec<_>>();
        debug_assert_eq!(out.len(), r);
        self.push(Tensor::vector(out), Op::MeanCols(m))
    }

    pub fn index(&mut self, a: Var, i: usize) -> Result<Var> {
        let t = self.value(a);
        let x = *t.data().get(i).ok_or(Error::Shape {
            op: "index",
            left: t.shape().to_vec(),
            right: vec![i],
        })?;
        self.push(Tensor::scalar(x), Op::Index(a, i))
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s = self.value(a).sum();
        self.push(Tensor::scalar(s), Op::Sum(a))
    }

    /// Binary cross-entropy of a probability scalar against a 0/1 label.
    pub fn cross_entropy(&mut self, p: Var, y: u8) -> Result<Var> {
        let l = ops::cross_entropy(self.value(p).item(), y);
        self.push(Tensor::scalar(l), Op::CrossEntropy(p, y))
    }

    /// Gradients of `seed * output` with respect to every bound parameter.
    /// `output` must be a single-element tensor.
    pub fn backward(&self, output: Var, seed: f64) -> Result<ParamGrads> {
        let out_t = self.value(output);
        let mut grads: Vec<Option<Tensor>> = (0..=output.0).map(|_| None).collect();
        grads[output.0] = Some(Tensor::full(out_t.shape(), seed));
        let mut result = Vec::new();

        for i in (0..=output.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            if !g.is_finite() {
                return Err(Error::Numeric { op: node.op.name() });
            }
            let y = self.value(Var(i));
            match &node.op {
                Op::Input | Op::Detach => {}
                Op::Param(id) => result.push((*id, g)),
                Op::MatMul(a, b) => {
                    let (at, bt) = (self.value(*a), self.value(*b));
                    let (m, k, n) = (at.rows(), at.cols(), bt.cols());
                    let (ad, bd, gd) = (at.data(), bt.data(), g.data());
                    if self.rg(*a) {
                        // dA = G B^T
                        let mut da = vec![0.0; m * k];
                        for r in 0..m {
                            let grow = &gd[r * n..(r + 1) * n];
                            for p in 0..k {
                                let brow = &bd[p * n..(p + 1) * n];
                                da[r * k + p] = grow.iter().zip(brow).map(|(x, y)| x * y).sum();
                            }
                        }
                        self.acc(&mut grads, *a, Tensor::new(at.shape().to_vec(), da)?);
                    }
                    if self.rg(*b) {
                        // dB = A^T G
                        let mut db = vec![0.0; k * n];
                        for r in 0..m {
                            let grow = &gd[r * n..(r + 1) * n];
                            for p in 0..k {
                                let a_rp = ad[r * k + p];
                                if a_rp == 0.0 {
                                    continue;
                                }
                                for (d, &gv) in db[p * n..(p + 1) * n].iter_mut().zip(grow) {
                                    *d += a_rp * gv;
                                }
                            }
                        }
                        self.acc(&mut grads, *b, Tensor::new(bt.shape().to_vec(), db)?);
                    }
                }
                Op::Transpose(a) => {
                    let shape = self.value(*a).shape().to_vec();
                    let gt = ops::transpose(&g).reshaped(&shape)?;
                    self.acc(&mut grads, *a, gt);
                }
                Op::Reshape(a) => {
                    let shape = self.value(*a).shape().to_vec();
                    self.acc(&mut grads, *a, g.reshaped(&shape)?);
                }
                Op::Add(a, b) => {
                    if self.rg(*b) {
                        self.acc(&mut grads, *b, g.clone());
                    }
                    self.acc(&mut grads, *a, g);
                }
                Op::AddBias(m, b) => {
                    if self.rg(*b) {
                        let cols = g.cols();
                        let db = g.data().chunks(cols).map(|row| row.iter().sum()).collect();
                        self.acc(&mut grads, *b, Tensor::vector(db));
                    }
                    self.acc(&mut grads, *m, g);
                }
                Op::Mul(a, b) => {
                    let (at, bt) = (self.value(*a), self.value(*b));
                    if self.rg(*a) {
                        self.acc(&mut grads, *a, g.zip_map(bt, "mul", |x, y| x * y)?);
                    }
                    if self.rg(*b) {
                        self.acc(&mut grads, *b, g.zip_map(at, "mul", |x, y| x * y)?);
                    }
                }
                Op::Scale(a, s) => {
                    let s = *s;
                    self.acc(&mut grads, *a, g.map(|x| x * s));
                }
                Op::Tanh(a) => {
                    let d = g.zip_map(y, "tanh", |gv, yv| gv * (1.0 - yv * yv))?;
                    self.acc(&mut grads, *a, d);
                }
                Op::Sigmoid(a) => {
                    let d = g.zip_map(y, "sigmoid", |gv, yv| gv * yv * (1.0 - yv))?;
                    self.acc(&mut grads, *a, d);
                }
                Op::Softmax(a) => {
                    let dot: f64 = g.data().iter().zip(y.data()).map(|(x, y)| x * y).sum();
                    let d = g.zip_map(y, "softmax", |gv, yv| yv * (gv - dot))?;
                    self.acc(&mut grads, *a, d);
                }
                Op::Concat(parts) => {
                    let mut offset = 0;
                    for &p in parts {
                        let pt = self.value(p);
                        let n = pt.len();
                        if self.rg(p) {
                            let piece = Tensor::new(
                                pt.shape().to_vec(),
                                g.data()[offset..offset + n].to_vec(),
                            )?;
                            self.acc(&mut grads, p, piece);
                        }
                        offset += n;
                    }
                }
                Op::StackCols(cols) => {
                    for (j, &c) in cols.iter().enumerate() {
                        if self.rg(c) {
                            self.acc(&mut grads, c, Tensor::vector(g.column(j)));
                        }
                    }
                }
                Op::MeanCols(m) => {
                    let mt = self.value(*m);
                    let c = mt.cols();
                    let mut d = Vec::with_capacity(mt.len());
                    for &gv in g.data() {
                        d.extend(std::iter::repeat_n(gv / c as f64, c));
                    }
                    self.acc(&mut grads, *m, Tensor::new(mt.shape().to_vec(), d)?);
                }
                Op::Index(a, idx) => {
                    let mut d = Tensor::zeros(self.value(*a).shape());
                    d.data_mut()[*idx] = g.item();
                    self.acc(&mut grads, *a, d);
                }
                Op::Sum(a) => {
                    let d = Tensor::full(self.value(*a).shape(), g.item());
                    self.acc(&mut grads, *a, d);
                }
                Op::CrossEntropy(p, label) => {
                    let pv = self.value(*p).item();
                    let dp = if !(ops::PROB_CLAMP..=1.0 - ops::PROB_CLAMP).contains(&pv) {
                        0.0
                    } else if *label == 1 {
                        -1.0 / pv
                    } else {
                        1.0 / (1.0 - pv)
                    };
                    let d = Tensor::new(self.value(*p).shape().to_vec(), vec![g.item() * dp])?;
                    self.acc(&mut grads, *p, d);
                }
            }
        }
        result.sort_by_key(|(id, _)| *id);
        Ok(result)
    }

    fn acc(&self, grads: &mut [Option<Tensor>], v: Var, t: Tensor) {
        if !self.rg(v) {
            return;
        }
        match &mut grads[v.0] {
            Some(existing) => existing.add_scaled(&t, 1.0),
            slot @ None => *slot = Some(t),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::gradcheck::{check_gradients, GradCheck};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
        let n = shape.iter().product();
        Tensor::new(
            shape.to_vec(),
            (0..n).map(|_| rng.random_range(-1.0..1.0)).collect(),
        )
        .unwrap()
    }

    #[test]
    fn sum_of_linear_map_gradient_is_outer_product() {
        let mut store = ParameterStore::new(0);
        let w = store
            .insert(
                "w",
                Tensor::from_rows(&[&[0.3, -1.0, 2.0], &[0.5, 0.1, -0.7]]).unwrap(),
            )
            .unwrap();
        let x = [1.5, -2.0, 0.25];
        let mut g = Graph::new(&store);
        let wv = g.param(w);
        let xv = g.input(Tensor::vector(x.to_vec())).unwrap();
        let y = g.matmul(wv, xv).unwrap();
        let loss = g.sum(y).unwrap();
        let grads = g.backward(loss, 1.0).unwrap();
        assert_eq!(grads.len(), 1);
        assert_eq!(grads[0].1.data(), &[1.5, -2.0, 0.25, 1.5, -2.0, 0.25]);
    }

    #[test]
    fn constant_loss_gives_zero_grads() {
        let mut store = ParameterStore::new(0);
        let w = store.insert("w", Tensor::vector(vec![1.0, 2.0])).unwrap();
        let mut g = Graph::new(&store);
        let wv = g.param(w);
        let z = g.scale(wv, 0.0).unwrap();
        let s = g.sum(z).unwrap();
        let grads = g.backward(s, 1.0).unwrap();
        assert!(grads
            .iter()
            .all(|(_, t)| t.data().iter().all(|&x| x == 0.0)));
        // Detached input: nothing reaches the parameter.
        let mut g = Graph::new(&store);
        let wv = g.param(w);
        let d = g.detach(wv).unwrap();
        let s = g.sum(d).unwrap();
        assert!(g.backward(s, 1.0).unwrap().is_empty());
    }

    #[test]
    fn nan_is_a_hard_error() {
        let store = ParameterStore::new(0);
        let mut g = Graph::new(&store);
        let a = g.input(Tensor::vector(vec![1e300])).unwrap();
        let b = g.input(Tensor::vector(vec![1e300])).unwrap();
        assert!(matches!(g.mul(a, b), Err(Error::Numeric { op: "mul" })));
        assert!(matches!(
            g.input(Tensor::vector(vec![f64::NAN])),
            Err(Error::Numeric { .. })
        ));
    }

    /// Every op, composed so each carries gradient to a parameter.
    fn all_ops_loss(g: &mut Graph, ids: &[ParamId], label: u8) -> Result<Var> {
        let a = g.param(ids[0]); // 3x4
        let b = g.param(ids[1]); // 4x2
        let v = g.param(ids[2]); // 3
        let u = g.param(ids[3]); // 2
        let ab = g.matmul(a, b)?; // 3x2
        let abt = g.transpose(ab)?; // 2x3
        let abb = g.add_bias(ab, v)?; // 3x2
        let t = g.tanh(abb)?;
        let s = g.sigmoid(abt)?; // 2x3
        let st = g.transpose(s)?; // 3x2
        let m = g.mul(t, st)?;
        let m2 = g.scale(m, 1.7)?;
        let sum = g.add(m2, t)?;
        let mc = g.mean_cols(sum)?; // 3
        let cat = g.concat(&[mc, u])?; // 5
        let cols = g.stack_cols(&[mc, v])?; // 3x2
        let cu = g.matmul(cols, u)?; // 3
        let mat_cat = g.concat(&[cols, ab])?; // 6x2
        let mcm = g.mean_cols(mat_cat)?; // 6
        let r = g.reshape(mcm, &[2, 3])?;
        let rs = g.sum(r)?;
        let rs1 = g.reshape(rs, &[1])?;
        let sm = g.softmax(cat)?;
        let idx = g.index(sm, 1)?;
        let cu_sm = g.softmax(cu)?;
        let p = g.index(cu_sm, 0)?;
        let ce = g.cross_entropy(p, label)?;
        let ce1 = g.reshape(ce, &[1])?;
        let idx1 = g.reshape(idx, &[1])?;
        let tot = g.add(ce1, idx1)?;
        let tot = g.add(tot, rs1)?;
        g.sum(tot)
    }

    #[test]
    fn every_op_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut worst: f64 = 0.0;
        for trial in 0..50 {
            let mut store = ParameterStore::new(0);
            let ids = vec![
                store.insert("a", rand_tensor(&mut rng, &[3, 4])).unwrap(),
                store.insert("b", rand_tensor(&mut rng, &[4, 2])).unwrap(),
                store.insert("v", rand_tensor(&mut rng, &[3])).unwrap(),
                store.insert("u", rand_tensor(&mut rng, &[2])).unwrap(),
            ];
            let label = (trial % 2) as u8;
            let report: GradCheck =
                check_gradients(&mut store, |g| all_ops_loss(g, &ids, label)).unwrap();
            worst = worst.max(report.max_rel_error);
        }
        assert!(worst < 1e-4, "max relative error {worst}");
    }
}
