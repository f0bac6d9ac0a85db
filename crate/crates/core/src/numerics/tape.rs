//! Reverse-mode differentiation over the small set of operations the
//! recommender needs. Nodes are recorded in evaluation order; `backward`
//! walks them in reverse.

use crate::error::{Error, Result};

use super::kernels::{self, sigmoid_scalar};
use super::lstm::{lstm_backward, lstm_forward, LstmTrace};
use super::Tensor;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Index of a trainable tensor in the caller's parameter store.
pub type ParamId = usize;

#[derive(Debug)]
enum Op {
    Leaf,
    Param {
        id: ParamId,
    },
    ParamRows {
        id: ParamId,
        rows: Vec<usize>,
        frozen: Option<usize>,
    },
    MatMul(Var, Var),
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Sigmoid(Var),
    Tanh(Var),
    Relu(Var),
    LeakyRelu(Var, f64),
    Softmax(Var),
    Squash(Var),
    RowDots {
        rows: Var,
        v: Var,
    },
    UserAdjacency {
        items: Var,
        user: Var,
        mask: Vec<bool>,
    },
    Propagation {
        adj: Var,
        mask: Vec<bool>,
        inv_sqrt: Vec<f64>,
        floored: Vec<bool>,
    },
    L1Mean {
        x: Var,
        mask: Vec<bool>,
    },
    Lstm {
        x: Var,
        wx: Var,
        wh: Var,
        trace: Box<LstmTrace>,
        b: Var,
    },
    ConcatCols(Var, Var),
    Concat(Vec<Var>),
    MaskRows {
        x: Var,
        mask: Vec<bool>,
    },
    StackRows(Vec<Var>),
    Row {
        x: Var,
        index: usize,
    },
    Transpose(Var),
    BceLogits {
        logit: Var,
        label: f64,
    },
    Sum(Vec<Var>),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
}

/// Receives parameter gradients after a backward pass.
pub trait GradSink {
    /// `rows` is `None` for a whole-tensor gradient, or the leading-index
    /// rows the gradient slices belong to (one slice per entry).
    fn accumulate(&mut self, id: ParamId, rows: Option<&[usize]>, grad: &Tensor);
}

/// Gradients of one backward pass, indexed by node.
pub struct Grads {
    grads: Vec<Option<Tensor>>,
}

impl Grads {
    pub fn wrt(&self, v: Var) -> Option<&Tensor> {
        self.grads[v.0].as_ref()
    }
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

fn accumulate(grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
    match &mut grads[v.0] {
        Some(existing) => existing.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}

fn transpose(t: &Tensor) -> Tensor {
    let (r, c) = (t.shape()[0], t.shape()[1]);
    let mut out = Tensor::zeros(&[c, r]);
    for i in 0..r {
        for j in 0..c {
            out.data_mut()[j * r + i] = t.data()[i * c + j];
        }
    }
    out
}

fn as_matrix(t: &Tensor, column: bool) -> Tensor {
    let shape = match t.shape() {
        [] => vec![1, 1],
        [n] if column => vec![*n, 1],
        [n] => vec![1, *n],
        s => s.to_vec(),
    };
    t.clone().reshape(shape).expect("same element count")
}

fn mask_mismatch(op: &'static str, shape: &[usize], mask: &[bool]) -> Error {
    Error::ShapeMismatch {
        op,
        lhs: shape.to_vec(),
        rhs: vec![mask.len()],
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    /// Input that receives a gradient but maps to no parameter.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf)
    }

    pub fn param(&mut self, id: ParamId, value: &Tensor) -> Var {
        self.push(value.clone(), Op::Param { id })
    }

    /// Gathers leading-index slices of a parameter (embedding lookup, or
    /// one slice of a stacked weight). The result has shape
    /// `[rows.len(), ..rest]`. Gradients for `frozen` are dropped.
    pub fn param_rows(
        &mut self,
        id: ParamId,
        table: &Tensor,
        rows: &[usize],
        frozen: Option<usize>,
    ) -> Result<Var> {
        let w = table.row_len();
        let mut data = Vec::with_capacity(rows.len() * w);
        for &r in rows {
            if r >= table.rows() {
                return Err(Error::InvalidArgument(format!(
                    "row {r} out of range for parameter with {} rows",
                    table.rows()
                )));
            }
            data.extend_from_slice(table.row(r));
        }
        let mut shape = vec![rows.len()];
        shape.extend_from_slice(&table.shape()[1..]);
        let value = Tensor::new(shape, data)?;
        Ok(self.push(
            value,
            Op::ParamRows {
                id,
                rows: rows.to_vec(),
                frozen,
            },
        ))
    }

    /// One leading-index slice of a stacked parameter, with the leading
    /// dimension dropped.
    pub fn param_slice(&mut self, id: ParamId, table: &Tensor, index: usize) -> Result<Var> {
        let v = self.param_rows(id, table, &[index], None)?;
        let shape = table.shape()[1..].to_vec();
        let node = &mut self.nodes[v.0];
        node.value = node.value.clone().reshape(shape)?;
        Ok(v)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = kernels::matmul(self.value(a), self.value(b))?;
        Ok(self.push(value, Op::MatMul(a, b)))
    }

    /// Matrix product with order-independent inner sums.
    pub fn matmul_canonical(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = kernels::matmul_canonical(self.value(a), self.value(b))?;
        Ok(self.push(value, Op::MatMul(a, b)))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = kernels::add(self.value(a), self.value(b))?;
        Ok(self.push(value, Op::Add(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = kernels::hadamard(self.value(a), self.value(b))?;
        Ok(self.push(value, Op::Mul(a, b)))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let value = self.value(a).map(|x| x * s);
        self.push(value, Op::Scale(a, s))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let value = kernels::sigmoid(self.value(a));
        self.push(value, Op::Sigmoid(a))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let value = self.value(a).map(f64::tanh);
        self.push(value, Op::Tanh(a))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let value = kernels::relu(self.value(a));
        self.push(value, Op::Relu(a))
    }

    pub fn leaky_relu(&mut self, a: Var, slope: f64) -> Var {
        let value = kernels::leaky_relu(self.value(a), slope);
        self.push(value, Op::LeakyRelu(a, slope))
    }

    /// Softmax over the last dimension; `mask` selects entries of that
    /// dimension that take part.
    pub fn softmax(&mut self, a: Var, mask: Option<&[bool]>) -> Result<Var> {
        let value = kernels::softmax(self.value(a), mask)?;
        Ok(self.push(value, Op::Softmax(a)))
    }

    pub fn squash(&mut self, a: Var) -> Var {
        let value = kernels::squash(self.value(a));
        self.push(value, Op::Squash(a))
    }

    /// `out[j] = rows[j] . v` for a matrix `rows` and vector `v`.
    pub fn row_dots(&mut self, rows: Var, v: Var) -> Result<Var> {
        let value = kernels::matmul(self.value(rows), self.value(v))?;
        Ok(self.push(value, Op::RowDots { rows, v }))
    }

    /// `A[i][j] = sigmoid((x_i ⊙ x_j) · u)` over valid pairs, zero elsewhere.
    /// Each unordered pair is evaluated once and mirrored, so the result is
    /// exactly symmetric.
    pub fn user_adjacency(&mut self, items: Var, user: Var, mask: &[bool]) -> Result<Var> {
        let x = self.value(items);
        let u = self.value(user);
        if x.rank() != 2 || u.shape() != [x.shape()[1]] {
            return Err(Error::ShapeMismatch {
                op: "user_adjacency",
                lhs: x.shape().to_vec(),
                rhs: u.shape().to_vec(),
            });
        }
        let (m, d) = (x.shape()[0], x.shape()[1]);
        if mask.len() != m {
            return Err(mask_mismatch("user_adjacency", x.shape(), mask));
        }
        let mut a = Tensor::zeros(&[m, m]);
        let ud = u.data();
        for i in 0..m {
            if !mask[i] {
                continue;
            }
            for j in i..m {
                if !mask[j] {
                    continue;
                }
                let (xi, xj) = (x.row(i), x.row(j));
                let mut s = 0.0;
                for k in 0..d {
                    s += (xi[k] * xj[k]) * ud[k];
                }
                let v = sigmoid_scalar(s);
                a.data_mut()[i * m + j] = v;
                a.data_mut()[j * m + i] = v;
            }
        }
        Ok(self.push(
            a,
            Op::UserAdjacency {
                items,
                user,
                mask: mask.to_vec(),
            },
        ))
    }

    /// `P = I + D^{-1/2} A D^{-1/2}` restricted to valid positions; degrees
    /// are row sums of `A` over valid columns, floored at [`DEGREE_FLOOR`].
    pub fn propagation(&mut self, adj: Var, mask: &[bool]) -> Result<Var> {
        let a = self.value(adj);
        let m = a.rows();
        if a.shape() != [m, m] || mask.len() != m {
            return Err(mask_mismatch("propagation", a.shape(), mask));
        }
        let (inv_sqrt, floored) = kernels::degree_inv_sqrt(a, mask);
        let mut p = Tensor::zeros(&[m, m]);
        for i in 0..m {
            if !mask[i] {
                continue;
            }
            for j in 0..m {
                if !mask[j] {
                    continue;
                }
                let mut v = a.at(i, j) * inv_sqrt[i] * inv_sqrt[j];
                if i == j {
                    v += 1.0;
                }
                p.data_mut()[i * m + j] = v;
            }
        }
        Ok(self.push(
            p,
            Op::Propagation {
                adj,
                mask: mask.to_vec(),
                inv_sqrt,
                floored,
            },
        ))
    }

    /// Mean absolute value over valid `(i, j)` pairs of a square matrix.
    pub fn l1_mean(&mut self, x: Var, mask: &[bool]) -> Result<Var> {
        let a = self.value(x);
        let m = a.rows();
        if a.shape() != [m, m] || mask.len() != m {
            return Err(mask_mismatch("l1_mean", a.shape(), mask));
        }
        let n = mask.iter().filter(|&&b| b).count();
        let mut total = 0.0;
        for i in (0..m).filter(|&i| mask[i]) {
            for j in (0..m).filter(|&j| mask[j]) {
                total += a.at(i, j).abs();
            }
        }
        let value = if n == 0 {
            0.0
        } else {
            total / (n * n) as f64
        };
        Ok(self.push(
            Tensor::scalar(value),
            Op::L1Mean {
                x,
                mask: mask.to_vec(),
            },
        ))
    }

    pub fn lstm(
        &mut self,
        x: Var,
        wx: Var,
        wh: Var,
        b: Var,
        mask: &[bool],
        reverse: bool,
    ) -> Result<Var> {
        if mask.len() != self.value(x).rows() {
            return Err(mask_mismatch("lstm", self.value(x).shape(), mask));
        }
        let (value, trace) = lstm_forward(
            self.value(x),
            self.value(wx),
            self.value(wh),
            self.value(b),
            mask,
            reverse,
        )?;
        Ok(self.push(
            value,
            Op::Lstm {
                x,
                wx,
                wh,
                b,
                trace: Box::new(trace),
            },
        ))
    }

    pub fn concat_cols(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.rank() != 2 || bv.rank() != 2 || av.rows() != bv.rows() {
            return Err(Error::ShapeMismatch {
                op: "concat_cols",
                lhs: av.shape().to_vec(),
                rhs: bv.shape().to_vec(),
            });
        }
        let (p, q) = (av.shape()[1], bv.shape()[1]);
        let mut data = Vec::with_capacity(av.rows() * (p + q));
        for i in 0..av.rows() {
            data.extend_from_slice(av.row(i));
            data.extend_from_slice(bv.row(i));
        }
        let value = Tensor::matrix(av.rows(), p + q, data)?;
        Ok(self.push(value, Op::ConcatCols(a, b)))
    }

    /// Concatenates vectors end to end.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let mut data = Vec::new();
        for &p in parts {
            let v = self.value(p);
            if v.rank() != 1 {
                return Err(Error::ShapeMismatch {
                    op: "concat",
                    lhs: vec![1],
                    rhs: v.shape().to_vec(),
                });
            }
            data.extend_from_slice(v.data());
        }
        Ok(self.push(Tensor::vector(data), Op::Concat(parts.to_vec())))
    }

    /// Zeroes the rows whose mask entry is false.
    pub fn mask_rows(&mut self, x: Var, mask: &[bool]) -> Result<Var> {
        let mut value = self.value(x).clone();
        if mask.len() != value.rows() {
            return Err(mask_mismatch("mask_rows", value.shape(), mask));
        }
        for (i, &keep) in mask.iter().enumerate() {
            if !keep {
                value.row_mut(i).fill(0.0);
            }
        }
        Ok(self.push(
            value,
            Op::MaskRows {
                x,
                mask: mask.to_vec(),
            },
        ))
    }

    /// Stacks equally shaped vectors as rows of a matrix.
    pub fn stack_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = self.value(parts[0]).shape().to_vec();
        let mut data = Vec::with_capacity(parts.len() * self.value(parts[0]).len());
        for &p in parts {
            let v = self.value(p);
            if v.shape() != first.as_slice() {
                return Err(Error::ShapeMismatch {
                    op: "stack_rows",
                    lhs: first,
                    rhs: v.shape().to_vec(),
                });
            }
            data.extend_from_slice(v.data());
        }
        let mut shape = vec![parts.len()];
        shape.extend_from_slice(&first);
        let value = Tensor::new(shape, data)?;
        Ok(self.push(value, Op::StackRows(parts.to_vec())))
    }

    pub fn row(&mut self, x: Var, index: usize) -> Var {
        let t = self.value(x);
        let value = Tensor::new(t.shape()[1..].to_vec(), t.row(index).to_vec())
            .expect("row slice matches trailing shape");
        self.push(value, Op::Row { x, index })
    }

    pub fn transpose(&mut self, x: Var) -> Var {
        let value = transpose(self.value(x));
        self.push(value, Op::Transpose(x))
    }

    /// Binary cross-entropy of `sigmoid(logit)` against `label`, computed as
    /// a softplus of the logit.
    pub fn bce_with_logits(&mut self, logit: Var, label: f64) -> Var {
        let y = self.value(logit).item();
        let value = label * kernels::softplus(-y) + (1.0 - label) * kernels::softplus(y);
        self.push(Tensor::scalar(value), Op::BceLogits { logit, label })
    }

    /// Elementwise sum of equally shaped nodes.
    pub fn sum(&mut self, parts: &[Var]) -> Result<Var> {
        let mut value = self.value(parts[0]).clone();
        for &p in &parts[1..] {
            let v = self.value(p);
            value.check_same_shape(v, "sum")?;
            value.add_assign(v);
        }
        Ok(self.push(value, Op::Sum(parts.to_vec())))
    }

    /// Reverse pass seeded with ones at `root`.
    pub fn backward(&self, root: Var) -> Grads {
        self.backward_seeded(root, Tensor::filled(self.value(root).shape(), 1.0))
    }

    /// Reverse pass seeded with `seed`, which must have the shape of `root`.
    pub fn backward_seeded(&self, root: Var, seed: Tensor) -> Grads {
        debug_assert_eq!(seed.shape(), self.value(root).shape());
        let mut grads: Vec<Option<Tensor>> = vec![None; root.0 + 1];
        grads[root.0] = Some(seed);
        for idx in (0..=root.0).rev() {
            let Some(g) = grads[idx].take() else {
                continue;
            };
            self.backprop_node(idx, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Grads { grads }
    }

    /// Hands every parameter-leaf gradient to `sink`.
    pub fn param_grads(&self, grads: &Grads, sink: &mut impl GradSink) {
        for (idx, node) in self.nodes.iter().enumerate().take(grads.grads.len()) {
            let Some(g) = &grads.grads[idx] else {
                continue;
            };
            match &node.op {
                Op::Param { id } => sink.accumulate(*id, None, g),
                Op::ParamRows { id, rows, frozen } => {
                    if let Some(f) = frozen {
                        if rows.contains(f) {
                            let mut g = g.clone().reshape(vec![rows.len(), g.len() / rows.len()])
                                .expect("row gradient");
                            for (i, &r) in rows.iter().enumerate() {
                                if r == *f {
                                    g.row_mut(i).fill(0.0);
                                }
                            }
                            sink.accumulate(*id, Some(rows), &g);
                            continue;
                        }
                    }
                    sink.accumulate(*id, Some(rows), g);
                }
                _ => {}
            }
        }
    }

    fn backprop_node(&self, idx: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let node = &self.nodes[idx];
        let val = |v: Var| &self.nodes[v.0].value;
        match &node.op {
            Op::Leaf | Op::Param { .. } | Op::ParamRows { .. } => {}
            Op::MatMul(a, b) | Op::RowDots { rows: a, v: b } => {
                let (av, bv) = (val(*a), val(*b));
                let a2 = as_matrix(av, false);
                let b2 = as_matrix(bv, true);
                let rows = a2.shape()[0];
                let cols = b2.shape()[1];
                let g2 = g.clone().reshape(vec![rows, cols]).expect("matmul grad shape");
                let da = kernels::matmul(&g2, &transpose(&b2)).expect("matmul grad");
                let db = kernels::matmul(&transpose(&a2), &g2).expect("matmul grad");
                accumulate(grads, *a, da.reshape(av.shape().to_vec()).expect("shape"));
                accumulate(grads, *b, db.reshape(bv.shape().to_vec()).expect("shape"));
            }
            Op::Add(a, b) => {
                accumulate(grads, *a, g.clone());
                accumulate(grads, *b, g.clone());
            }
            Op::Mul(a, b) => {
                let da = kernels::hadamard(g, val(*b)).expect("mul grad");
                let db = kernels::hadamard(g, val(*a)).expect("mul grad");
                accumulate(grads, *a, da);
                accumulate(grads, *b, db);
            }
            Op::Scale(a, s) => accumulate(grads, *a, g.map(|x| x * s)),
            Op::Sigmoid(a) => {
                let y = &node.value;
                let d = y.data().iter().zip(g.data()).map(|(y, g)| g * y * (1.0 - y)).collect();
                accumulate(grads, *a, Tensor::new(y.shape().to_vec(), d).expect("shape"));
            }
            Op::Tanh(a) => {
                let y = &node.value;
                let d = y.data().iter().zip(g.data()).map(|(y, g)| g * (1.0 - y * y)).collect();
                accumulate(grads, *a, Tensor::new(y.shape().to_vec(), d).expect("shape"));
            }
            Op::Relu(a) => {
                let x = val(*a);
                let d = x
                    .data()
                    .iter()
                    .zip(g.data())
                    .map(|(x, g)| if *x > 0.0 { *g } else { 0.0 })
                    .collect();
                accumulate(grads, *a, Tensor::new(x.shape().to_vec(), d).expect("shape"));
            }
            Op::LeakyRelu(a, slope) => {
                let x = val(*a);
                let d = x
                    .data()
                    .iter()
                    .zip(g.data())
                    .map(|(x, g)| if *x >= 0.0 { *g } else { slope * g })
                    .collect();
                accumulate(grads, *a, Tensor::new(x.shape().to_vec(), d).expect("shape"));
            }
            Op::Softmax(a) => {
                let y = &node.value;
                let width = *y.shape().last().unwrap_or(&1);
                let mut d = vec![0.0; y.len()];
                for ((yr, gr), dr) in y
                    .data()
                    .chunks(width)
                    .zip(g.data().chunks(width))
                    .zip(d.chunks_mut(width))
                {
                    let dot: f64 = yr.iter().zip(gr).map(|(y, g)| y * g).sum();
                    for ((o, y), g) in dr.iter_mut().zip(yr).zip(gr) {
                        *o = y * (g - dot);
                    }
                }
                accumulate(grads, *a, Tensor::new(y.shape().to_vec(), d).expect("shape"));
            }
            Op::Squash(a) => {
                let v = val(*a);
                let n2 = v.sum_squares();
                if n2 == 0.0 {
                    accumulate(grads, *a, Tensor::zeros(v.shape()));
                } else {
                    let n = n2.sqrt();
                    let s = n / (1.0 + n2);
                    let ds_dn = (1.0 - n2) / ((1.0 + n2) * (1.0 + n2));
                    let vg: f64 = v.data().iter().zip(g.data()).map(|(v, g)| v * g).sum();
                    let coef = ds_dn / n * vg;
                    let d = v
                        .data()
                        .iter()
                        .zip(g.data())
                        .map(|(v, g)| s * g + coef * v)
                        .collect();
                    accumulate(grads, *a, Tensor::new(v.shape().to_vec(), d).expect("shape"));
                }
            }
            Op::UserAdjacency { items, user, mask } => {
                let x = val(*items);
                let u = val(*user);
                let a = &node.value;
                let (m, d) = (x.shape()[0], x.shape()[1]);
                let mut dx = Tensor::zeros(x.shape());
                let mut du = Tensor::zeros(u.shape());
                for i in (0..m).filter(|&i| mask[i]) {
                    for j in (0..m).filter(|&j| mask[j]) {
                        let aij = a.at(i, j);
                        let s = g.at(i, j) * aij * (1.0 - aij);
                        if s == 0.0 {
                            continue;
                        }
                        for k in 0..d {
                            let (xik, xjk, uk) = (x.at(i, k), x.at(j, k), u.data()[k]);
                            dx.data_mut()[i * d + k] += s * xjk * uk;
                            dx.data_mut()[j * d + k] += s * xik * uk;
                            du.data_mut()[k] += s * xik * xjk;
                        }
                    }
                }
                accumulate(grads, *items, dx);
                accumulate(grads, *user, du);
            }
            Op::Propagation {
                adj,
                mask,
                inv_sqrt,
                floored,
            } => {
                let a = val(*adj);
                let m = a.rows();
                let mut da = Tensor::zeros(a.shape());
                let mut dr = vec![0.0; m];
                for i in (0..m).filter(|&i| mask[i]) {
                    for j in (0..m).filter(|&j| mask[j]) {
                        let gij = g.at(i, j);
                        da.data_mut()[i * m + j] += gij * inv_sqrt[i] * inv_sqrt[j];
                        dr[i] += gij * a.at(i, j) * inv_sqrt[j];
                        dr[j] += gij * a.at(i, j) * inv_sqrt[i];
                    }
                }
                for i in (0..m).filter(|&i| mask[i] && !floored[i]) {
                    // r = deg^{-1/2}  =>  dr/ddeg = -r^3 / 2
                    let ddeg = dr[i] * -0.5 * inv_sqrt[i].powi(3);
                    for j in (0..m).filter(|&j| mask[j]) {
                        da.data_mut()[i * m + j] += ddeg;
                    }
                }
                accumulate(grads, *adj, da);
            }
            Op::L1Mean { x, mask } => {
                let a = val(*x);
                let m = a.rows();
                let n = mask.iter().filter(|&&b| b).count();
                let mut d = Tensor::zeros(a.shape());
                if n > 0 {
                    let scale = g.item() / (n * n) as f64;
                    for i in (0..m).filter(|&i| mask[i]) {
                        for j in (0..m).filter(|&j| mask[j]) {
                            let v = a.at(i, j);
                            let sign = if v > 0.0 {
                                1.0
                            } else if v < 0.0 {
                                -1.0
                            } else {
                                0.0
                            };
                            d.data_mut()[i * m + j] = sign * scale;
                        }
                    }
                }
                accumulate(grads, *x, d);
            }
            Op::Lstm {
                x,
                wx,
                wh,
                b,
                trace,
            } => {
                let lg = lstm_backward(val(*x), val(*wx), val(*wh), trace, g);
                accumulate(grads, *x, lg.dx);
                accumulate(grads, *wx, lg.dwx);
                accumulate(grads, *wh, lg.dwh);
                accumulate(grads, *b, lg.db);
            }
            Op::ConcatCols(a, b) => {
                let (av, bv) = (val(*a), val(*b));
                let (p, q) = (av.shape()[1], bv.shape()[1]);
                let mut da = Tensor::zeros(av.shape());
                let mut db = Tensor::zeros(bv.shape());
                for i in 0..av.rows() {
                    let gr = g.row(i);
                    da.row_mut(i).copy_from_slice(&gr[..p]);
                    db.row_mut(i).copy_from_slice(&gr[p..p + q]);
                }
                accumulate(grads, *a, da);
                accumulate(grads, *b, db);
            }
            Op::Concat(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let n = val(p).len();
                    let d = Tensor::vector(g.data()[offset..offset + n].to_vec());
                    accumulate(grads, p, d);
                    offset += n;
                }
            }
            Op::MaskRows { x, mask } => {
                let mut d = g.clone();
                for (i, &keep) in mask.iter().enumerate() {
                    if !keep {
                        d.row_mut(i).fill(0.0);
                    }
                }
                accumulate(grads, *x, d);
            }
            Op::StackRows(parts) => {
                for (i, &p) in parts.iter().enumerate() {
                    let shape = val(p).shape().to_vec();
                    let d = Tensor::new(shape, g.row(i).to_vec()).expect("shape");
                    accumulate(grads, p, d);
                }
            }
            Op::Row { x, index } => {
                let xv = val(*x);
                let mut d = Tensor::zeros(xv.shape());
                d.row_mut(*index).copy_from_slice(g.data());
                accumulate(grads, *x, d);
            }
            Op::Transpose(x) => accumulate(grads, *x, transpose(g)),
            Op::BceLogits { logit, label } => {
                let y = val(*logit);
                let d = (sigmoid_scalar(y.item()) - label) * g.item();
                accumulate(grads, *logit, Tensor::new(y.shape().to_vec(), vec![d]).expect("shape"));
            }
            Op::Sum(parts) => {
                for &p in parts {
                    accumulate(grads, p, g.clone());
                }
            }
        }
    }
}
