//! A small reverse-mode autodiff tape over dense `f64` matrices.
//!
//! Every value on the tape is an `Array2<f64>`; scalars are `1 x 1`
//! matrices. Nodes are appended in evaluation order, so a single reverse
//! sweep over the node list is a valid topological backward pass.
//!
//! Leaves are either constants or parameters. Only nodes that transitively
//! depend on a trainable parameter carry gradients, which keeps frozen
//! sub-graphs (e.g. a frozen detector) free during the backward sweep.

use std::rc::Rc;

use ndarray::{s, Array2, Axis, Zip};

use crate::params::ParamId;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    /// `a [r x c] + row [1 x c]` broadcast over rows.
    AddRow(Var, Var),
    /// `a [r x c] * row [1 x c]` broadcast over rows.
    MulRow(Var, Var),
    /// `a [r x c] * col [r x 1]` broadcast over columns.
    MulCol(Var, Var),
    /// Elementwise product of equal shapes.
    Mul(Var, Var),
    /// `a * s` with `s` a `1 x 1` node.
    MulScalar(Var, Var),
    Scale(Var, f64),
    Relu(Var),
    Tanh(Var),
    Exp(Var),
    /// Clamp with zero gradient outside `[lo, hi]`.
    Clamp(Var, f64, f64),
    /// Row-wise softmax; masked-out entries are exactly zero.
    Softmax(Var),
    /// Row-wise normalisation to zero mean / unit variance (no affine).
    /// Saves the per-row inverse standard deviation.
    Normalize(Var, Vec<f64>),
    SliceCols(Var, usize, usize),
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    GatherRows(Var, Vec<usize>),
    /// Mean binary cross-entropy on sigmoid(a) against fixed targets.
    BceWithLogits(Var, Rc<Array2<f64>>),
    /// `sum |a - target| / denom`.
    L1(Var, Rc<Array2<f64>>, f64),
    Sum(Var),
}

struct Node {
    value: Array2<f64>,
    op: Op,
    requires_grad: bool,
    param: Option<ParamId>,
}

/// The tape. Create one per forward pass.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients produced by [`Tape::backward`], indexed by node.
pub struct Grads {
    grads: Vec<Option<Array2<f64>>>,
}

impl Grads {
    pub fn get(&self, v: Var) -> Option<&Array2<f64>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Array2<f64> {
        &self.nodes[v.0].value
    }

    /// Value of a `1 x 1` node.
    pub fn scalar(&self, v: Var) -> f64 {
        let val = self.value(v);
        debug_assert_eq!(val.dim(), (1, 1));
        val[[0, 0]]
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Array2<f64>, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            param: None,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    pub fn constant(&mut self, value: Array2<f64>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn scalar_constant(&mut self, x: f64) -> Var {
        self.constant(Array2::from_elem((1, 1), x))
    }

    /// A parameter leaf. `trainable = false` records it as a constant that
    /// still remembers its parameter id.
    pub fn param(&mut self, id: ParamId, value: Array2<f64>, trainable: bool) -> Var {
        let v = self.push(value, Op::Leaf, trainable);
        self.nodes[v.0].param = Some(id);
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).dot(self.value(b));
        let rg = self.rg(&[a, b]);
        self.push(value, Op::MatMul(a, b), rg)
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let value = self.value(a).t().to_owned();
        let rg = self.rg(&[a]);
        self.push(value, Op::Transpose(a), rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.value(a).dim(), self.value(b).dim(), "add: shape mismatch");
        let value = self.value(a) + self.value(b);
        let rg = self.rg(&[a, b]);
        self.push(value, Op::Add(a, b), rg)
    }

    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let r = self.value(row);
        assert_eq!(r.nrows(), 1, "add_row: broadcast operand must have one row");
        assert_eq!(r.ncols(), self.value(a).ncols(), "add_row: column mismatch");
        let value = self.value(a) + r;
        let rg = self.rg(&[a, row]);
        self.push(value, Op::AddRow(a, row), rg)
    }

    pub fn mul_row(&mut self, a: Var, row: Var) -> Var {
        let r = self.value(row);
        assert_eq!(r.nrows(), 1, "mul_row: broadcast operand must have one row");
        assert_eq!(r.ncols(), self.value(a).ncols(), "mul_row: column mismatch");
        let value = self.value(a) * r;
        let rg = self.rg(&[a, row]);
        self.push(value, Op::MulRow(a, row), rg)
    }

    pub fn mul_col(&mut self, a: Var, col: Var) -> Var {
        let c = self.value(col);
        assert_eq!(c.ncols(), 1, "mul_col: broadcast operand must have one column");
        assert_eq!(c.nrows(), self.value(a).nrows(), "mul_col: row mismatch");
        let value = self.value(a) * c;
        let rg = self.rg(&[a, col]);
        self.push(value, Op::MulCol(a, col), rg)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.value(a).dim(), self.value(b).dim(), "mul: shape mismatch");
        let value = self.value(a) * self.value(b);
        let rg = self.rg(&[a, b]);
        self.push(value, Op::Mul(a, b), rg)
    }

    pub fn mul_scalar(&mut self, a: Var, s: Var) -> Var {
        let sv = self.scalar(s);
        let value = self.value(a) * sv;
        let rg = self.rg(&[a, s]);
        self.push(value, Op::MulScalar(a, s), rg)
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Var {
        let value = self.value(a) * k;
        let rg = self.rg(&[a]);
        self.push(value, Op::Scale(a, k), rg)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let value = self.value(a).mapv(|x| if x > 0.0 { x } else { 0.0 });
        let rg = self.rg(&[a]);
        self.push(value, Op::Relu(a), rg)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let value = self.value(a).mapv(f64::tanh);
        let rg = self.rg(&[a]);
        self.push(value, Op::Tanh(a), rg)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let value = self.value(a).mapv(f64::exp);
        let rg = self.rg(&[a]);
        self.push(value, Op::Exp(a), rg)
    }

    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Var {
        let value = self.value(a).mapv(|x| x.clamp(lo, hi));
        let rg = self.rg(&[a]);
        self.push(value, Op::Clamp(a, lo, hi), rg)
    }

    /// Row-wise softmax. With a mask, `false` entries are treated as
    /// negative infinity. Every row must admit at least one entry.
    pub fn softmax(&mut self, a: Var, mask: Option<Rc<Array2<bool>>>) -> Var {
        let x = self.value(a);
        if let Some(m) = &mask {
            assert_eq!(m.dim(), x.dim(), "softmax: mask shape mismatch");
        }
        let mut out = Array2::zeros(x.dim());
        for (r, row) in x.outer_iter().enumerate() {
            let allowed = |c: usize| mask.as_ref().is_none_or(|m| m[[r, c]]);
            let mut max = f64::NEG_INFINITY;
            for (c, &v) in row.iter().enumerate() {
                if allowed(c) && v > max {
                    max = v;
                }
            }
            assert!(max.is_finite(), "softmax: row {r} admits no finite entry");
            let mut sum = 0.0;
            for (c, &v) in row.iter().enumerate() {
                if allowed(c) {
                    let e = (v - max).exp();
                    out[[r, c]] = e;
                    sum += e;
                }
            }
            out.row_mut(r).mapv_inplace(|e| e / sum);
        }
        let rg = self.rg(&[a]);
        self.push(out, Op::Softmax(a), rg)
    }

    pub fn normalize(&mut self, a: Var, eps: f64) -> Var {
        let x = self.value(a);
        let n = x.ncols() as f64;
        let mut out = x.clone();
        let mut inv = Vec::with_capacity(x.nrows());
        for mut row in out.outer_iter_mut() {
            let mean = row.sum() / n;
            row.mapv_inplace(|v| v - mean);
            let var = row.iter().map(|v| v * v).sum::<f64>() / n;
            let is = 1.0 / (var + eps).sqrt();
            row.mapv_inplace(|v| v * is);
            inv.push(is);
        }
        let rg = self.rg(&[a]);
        self.push(out, Op::Normalize(a, inv), rg)
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Var {
        let value = self.value(a).slice(s![.., start..end]).to_owned();
        let rg = self.rg(&[a]);
        self.push(value, Op::SliceCols(a, start, end), rg)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let views: Vec<_> = parts.iter().map(|p| self.value(*p).view()).collect();
        let value = ndarray::concatenate(Axis(1), &views).expect("concat_cols: row mismatch");
        let rg = self.rg(parts);
        self.push(value, Op::ConcatCols(parts.to_vec()), rg)
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        let views: Vec<_> = parts.iter().map(|p| self.value(*p).view()).collect();
        let value = ndarray::concatenate(Axis(0), &views).expect("concat_rows: column mismatch");
        let rg = self.rg(parts);
        self.push(value, Op::ConcatRows(parts.to_vec()), rg)
    }

    pub fn gather_rows(&mut self, a: Var, idx: &[usize]) -> Var {
        let value = self.value(a).select(Axis(0), idx);
        let rg = self.rg(&[a]);
        self.push(value, Op::GatherRows(a, idx.to_vec()), rg)
    }

    pub fn bce_with_logits(&mut self, logits: Var, targets: Array2<f64>) -> Var {
        let x = self.value(logits);
        assert_eq!(x.dim(), targets.dim(), "bce: shape mismatch");
        let n = x.len().max(1) as f64;
        let mut total = 0.0;
        Zip::from(x).and(&targets).for_each(|&x, &y| {
            total += x.max(0.0) - x * y + (-x.abs()).exp().ln_1p();
        });
        let rg = self.rg(&[logits]);
        self.push(
            Array2::from_elem((1, 1), total / n),
            Op::BceWithLogits(logits, Rc::new(targets)),
            rg,
        )
    }

    pub fn l1(&mut self, a: Var, target: Array2<f64>, denom: f64) -> Var {
        let x = self.value(a);
        assert_eq!(x.dim(), target.dim(), "l1: shape mismatch");
        let total: f64 = Zip::from(x)
            .and(&target)
            .fold(0.0, |acc, &p, &t| acc + (p - t).abs());
        let rg = self.rg(&[a]);
        self.push(
            Array2::from_elem((1, 1), total / denom),
            Op::L1(a, Rc::new(target), denom),
            rg,
        )
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let value = Array2::from_elem((1, 1), self.value(a).sum());
        let rg = self.rg(&[a]);
        self.push(value, Op::Sum(a), rg)
    }

    /// Parameter leaves that require gradients, in creation order.
    pub fn trainable_params(&self) -> impl Iterator<Item = (Var, ParamId)> + '_ {
        self.nodes
            .iter()
            .enumerate()
            .filter_map(|(i, n)| match (n.param, n.requires_grad) {
                (Some(p), true) => Some((Var(i), p)),
                _ => None,
            })
    }

    /// Reverse sweep from a `1 x 1` output with seed gradient 1.
    pub fn backward(&self, output: Var) -> Grads {
        assert_eq!(self.value(output).dim(), (1, 1), "backward: output must be scalar");
        let mut grads: Vec<Option<Array2<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[output.0] = Some(Array2::ones((1, 1)));

        for i in (0..=output.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        Grads { grads }
    }

    fn propagate(&self, i: usize, g: &Array2<f64>, grads: &mut [Option<Array2<f64>>]) {
        let node = &self.nodes[i];
        let mut acc = |v: Var, delta: Array2<f64>| {
            if !self.nodes[v.0].requires_grad {
                return;
            }
            match &mut grads[v.0] {
                Some(existing) => *existing += &delta,
                slot @ None => *slot = Some(delta),
            }
        };
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                if self.requires_grad(*a) {
                    acc(*a, g.dot(&self.value(*b).t()));
                }
                if self.requires_grad(*b) {
                    acc(*b, self.value(*a).t().dot(g));
                }
            }
            Op::Transpose(a) => acc(*a, g.t().to_owned()),
            Op::Add(a, b) => {
                acc(*a, g.clone());
                acc(*b, g.clone());
            }
            Op::AddRow(a, row) => {
                acc(*a, g.clone());
                if self.requires_grad(*row) {
                    acc(*row, g.sum_axis(Axis(0)).insert_axis(Axis(0)));
                }
            }
            Op::MulRow(a, row) => {
                let r = self.value(*row);
                if self.requires_grad(*a) {
                    acc(*a, g * r);
                }
                if self.requires_grad(*row) {
                    let prod = g * self.value(*a);
                    acc(*row, prod.sum_axis(Axis(0)).insert_axis(Axis(0)));
                }
            }
            Op::MulCol(a, col) => {
                let c = self.value(*col);
                if self.requires_grad(*a) {
                    acc(*a, g * c);
                }
                if self.requires_grad(*col) {
                    let prod = g * self.value(*a);
                    acc(*col, prod.sum_axis(Axis(1)).insert_axis(Axis(1)));
                }
            }
            Op::Mul(a, b) => {
                if self.requires_grad(*a) {
                    acc(*a, g * self.value(*b));
                }
                if self.requires_grad(*b) {
                    acc(*b, g * self.value(*a));
                }
            }
            Op::MulScalar(a, sv) => {
                let k = self.scalar(*sv);
                if self.requires_grad(*a) {
                    acc(*a, g * k);
                }
                if self.requires_grad(*sv) {
                    let d = (g * self.value(*a)).sum();
                    acc(*sv, Array2::from_elem((1, 1), d));
                }
            }
            Op::Scale(a, k) => acc(*a, g * *k),
            Op::Relu(a) => {
                let mut d = g.clone();
                Zip::from(&mut d)
                    .and(self.value(*a))
                    .for_each(|d, &x| if x <= 0.0 { *d = 0.0 });
                acc(*a, d);
            }
            Op::Tanh(a) => {
                let mut d = g.clone();
                Zip::from(&mut d)
                    .and(&node.value)
                    .for_each(|d, &y| *d *= 1.0 - y * y);
                acc(*a, d);
            }
            Op::Exp(a) => acc(*a, g * &node.value),
            Op::Clamp(a, lo, hi) => {
                let mut d = g.clone();
                Zip::from(&mut d).and(self.value(*a)).for_each(|d, &x| {
                    if x < *lo || x > *hi {
                        *d = 0.0
                    }
                });
                acc(*a, d);
            }
            Op::Softmax(a) => {
                // dx = y * (g - sum(g * y))
                let y = &node.value;
                let mut d = Array2::zeros(y.dim());
                for ((mut dr, yr), gr) in d.outer_iter_mut().zip(y.outer_iter()).zip(g.outer_iter()) {
                    let dot: f64 = yr.iter().zip(gr.iter()).map(|(y, g)| y * g).sum();
                    Zip::from(&mut dr)
                        .and(&yr)
                        .and(&gr)
                        .for_each(|d, &y, &g| *d = y * (g - dot));
                }
                acc(*a, d);
            }
            Op::Normalize(a, inv) => {
                // y = (x - mean) * inv; dx = inv * (g - mean(g) - y * mean(g * y))
                let y = &node.value;
                let n = y.ncols() as f64;
                let mut d = Array2::zeros(y.dim());
                for (r, ((mut dr, yr), gr)) in
                    d.outer_iter_mut().zip(y.outer_iter()).zip(g.outer_iter()).enumerate()
                {
                    let gm = gr.sum() / n;
                    let gy: f64 = yr.iter().zip(gr.iter()).map(|(y, g)| y * g).sum::<f64>() / n;
                    Zip::from(&mut dr)
                        .and(&yr)
                        .and(&gr)
                        .for_each(|d, &y, &g| *d = inv[r] * (g - gm - y * gy));
                }
                acc(*a, d);
            }
            Op::SliceCols(a, start, end) => {
                let mut d = Array2::zeros(self.value(*a).dim());
                d.slice_mut(s![.., *start..*end]).assign(g);
                acc(*a, d);
            }
            Op::ConcatCols(parts) => {
                let mut off = 0;
                for p in parts {
                    let w = self.value(*p).ncols();
                    if self.requires_grad(*p) {
                        acc(*p, g.slice(s![.., off..off + w]).to_owned());
                    }
                    off += w;
                }
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for p in parts {
                    let h = self.value(*p).nrows();
                    if self.requires_grad(*p) {
                        acc(*p, g.slice(s![off..off + h, ..]).to_owned());
                    }
                    off += h;
                }
            }
            Op::GatherRows(a, idx) => {
                let mut d = Array2::zeros(self.value(*a).dim());
                for (r, &src) in idx.iter().enumerate() {
                    let mut row = d.row_mut(src);
                    row += &g.row(r);
                }
                acc(*a, d);
            }
            Op::BceWithLogits(a, targets) => {
                let x = self.value(*a);
                let n = x.len().max(1) as f64;
                let gs = g[[0, 0]] / n;
                let mut d = Array2::zeros(x.dim());
                Zip::from(&mut d)
                    .and(x)
                    .and(targets.as_ref())
                    .for_each(|d, &x, &y| *d = gs * (sigmoid(x) - y));
                acc(*a, d);
            }
            Op::L1(a, target, denom) => {
                let x = self.value(*a);
                let gs = g[[0, 0]] / denom;
                let mut d = Array2::zeros(x.dim());
                Zip::from(&mut d)
                    .and(x)
                    .and(target.as_ref())
                    .for_each(|d, &p, &t| {
                        *d = if p > t {
                            gs
                        } else if p < t {
                            -gs
                        } else {
                            0.0
                        }
                    });
                acc(*a, d);
            }
            Op::Sum(a) => acc(*a, Array2::from_elem(self.value(*a).dim(), g[[0, 0]])),
        }
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}
