//! Eagerly evaluated reverse-mode autodiff over two-dimensional arrays.
//!
//! Every operation computes its value immediately and records how to push a
//! gradient back to its inputs. [`Tape::backward`] walks the record in
//! reverse and accumulates into the gradient buffers of a [`ParameterSet`].

use std::collections::HashMap;

use super::array::Array;
use super::params::{ParamId, ParameterSet};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

enum Op {
    Leaf,
    Param,
    MatMul(Var, Var),
    AddRow(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Sigmoid(Var),
    Tanh(Var),
    Scale(Var, f64),
    RowScale(Var, Vec<f64>),
    Gather(Var, Vec<usize>),
    SliceCols(Var, usize),
    SliceRows(Var, usize),
    ConcatRows(Vec<Var>),
    RowBlend {
        new: Var,
        old: Var,
        mask: Vec<f64>,
    },
    LogSoftmaxPick {
        logits: Var,
        targets: Vec<usize>,
        probs: Array,
    },
    PairRms {
        a: Var,
        b: Var,
        pairs: Vec<(usize, usize)>,
        clip: f64,
    },
    Sum(Var),
}

struct Node {
    value: Array,
    op: Op,
}

/// Gradients of a scalar root with respect to every recorded node.
pub struct Gradients {
    grads: Vec<Option<Array>>,
}

impl Gradients {
    pub fn get(&self, var: Var) -> Option<&Array> {
        self.grads[var.0].as_ref()
    }
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    params: HashMap<ParamId, Var>,
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

    fn push(&mut self, value: Array, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, var: Var) -> &Array {
        &self.nodes[var.0].value
    }

    pub fn constant(&mut self, value: Array) -> Var {
        self.push(value, Op::Leaf)
    }

    /// Leaf bound to a parameter. Repeated calls return the same node.
    pub fn param(&mut self, params: &ParameterSet, id: ParamId) -> Var {
        if let Some(&v) = self.params.get(&id) {
            return v;
        }
        let v = self.push(params.value(id).clone(), Op::Param);
        self.params.insert(id, v);
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).matmul(self.value(b));
        self.push(value, Op::MatMul(a, b))
    }

    /// Adds a `1 × m` row to every row of an `n × m` array.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let (av, rv) = (self.value(a), self.value(row));
        debug_assert_eq!(rv.rows(), 1);
        debug_assert_eq!(av.cols(), rv.cols());
        let mut value = av.clone();
        for r in 0..value.rows() {
            for (x, &b) in value.row_mut(r).iter_mut().zip(rv.data()) {
                *x += b;
            }
        }
        self.push(value, Op::AddRow(a, row))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).zip_map(self.value(b), |x, y| x + y);
        self.push(value, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).zip_map(self.value(b), |x, y| x - y);
        self.push(value, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).zip_map(self.value(b), |x, y| x * y);
        self.push(value, Op::Mul(a, b))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let value = self.value(a).map(sigmoid);
        self.push(value, Op::Sigmoid(a))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let value = self.value(a).map(f64::tanh);
        self.push(value, Op::Tanh(a))
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Var {
        let value = self.value(a).map(|x| x * factor);
        self.push(value, Op::Scale(a, factor))
    }

    /// Multiplies row `i` by `factors[i]`.
    pub fn row_scale(&mut self, a: Var, factors: Vec<f64>) -> Var {
        let mut value = self.value(a).clone();
        debug_assert_eq!(value.rows(), factors.len());
        for (r, &f) in factors.iter().enumerate() {
            value.row_mut(r).iter_mut().for_each(|x| *x *= f);
        }
        self.push(value, Op::RowScale(a, factors))
    }

    /// Row lookup: output row `i` is row `ids[i]` of `table`.
    pub fn gather(&mut self, table: Var, ids: Vec<usize>) -> Var {
        let t = self.value(table);
        let mut value = Array::zeros(ids.len(), t.cols());
        for (r, &id) in ids.iter().enumerate() {
            value.row_mut(r).copy_from_slice(t.row(id));
        }
        self.push(value, Op::Gather(table, ids))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, width: usize) -> Var {
        let av = self.value(a);
        let mut value = Array::zeros(av.rows(), width);
        for r in 0..av.rows() {
            value
                .row_mut(r)
                .copy_from_slice(&av.row(r)[start..start + width]);
        }
        self.push(value, Op::SliceCols(a, start))
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, count: usize) -> Var {
        let av = self.value(a);
        let cols = av.cols();
        let data = av.data()[start * cols..(start + count) * cols].to_vec();
        let value = Array::from_vec(count, cols, data).expect("slice within bounds");
        self.push(value, Op::SliceRows(a, start))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        let cols = self.value(parts[0]).cols();
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let v = self.value(p);
            debug_assert_eq!(v.cols(), cols);
            rows += v.rows();
            data.extend_from_slice(v.data());
        }
        let value = Array::from_vec(rows, cols, data).expect("consistent widths");
        self.push(value, Op::ConcatRows(parts.to_vec()))
    }

    /// Row `i` is taken from `new` when `mask[i] == 1` and from `old` when it is 0.
    pub fn row_blend(&mut self, new: Var, old: Var, mask: Vec<f64>) -> Var {
        let (nv, ov) = (self.value(new), self.value(old));
        let mut value = ov.clone();
        for (r, &m) in mask.iter().enumerate() {
            if m != 0.0 {
                for (x, (&a, &b)) in value.row_mut(r).iter_mut().zip(nv.row(r).iter().zip(ov.row(r))) {
                    *x = m * a + (1.0 - m) * b;
                }
            }
        }
        self.push(value, Op::RowBlend { new, old, mask })
    }

    /// `n × 1` column holding `log softmax(logits[i])[targets[i]]`.
    pub fn log_softmax_pick(&mut self, logits: Var, targets: Vec<usize>) -> Var {
        let lv = self.value(logits);
        debug_assert_eq!(lv.rows(), targets.len());
        let mut probs = Array::zeros(lv.rows(), lv.cols());
        let mut out = Vec::with_capacity(lv.rows());
        for (r, &t) in targets.iter().enumerate() {
            let row = lv.row(r);
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for (p, &x) in probs.row_mut(r).iter_mut().zip(row) {
                *p = (x - max).exp();
                z += *p;
            }
            probs.row_mut(r).iter_mut().for_each(|p| *p /= z);
            out.push(row[t] - max - z.ln());
        }
        let value = Array::from_vec(out.len(), 1, out).expect("column");
        self.push(
            value,
            Op::LogSoftmaxPick {
                logits,
                targets,
                probs,
            },
        )
    }

    /// Column of `min(rms(a[i] - b[j]), clip)` for each `(i, j)` in `pairs`.
    pub fn pair_rms(&mut self, a: Var, b: Var, pairs: Vec<(usize, usize)>, clip: f64) -> Var {
        let (av, bv) = (self.value(a), self.value(b));
        debug_assert_eq!(av.cols(), bv.cols());
        let out: Vec<f64> = pairs
            .iter()
            .map(|&(i, j)| rms(av.row(i), bv.row(j)).min(clip))
            .collect();
        let value = Array::from_vec(out.len(), 1, out).expect("column");
        self.push(value, Op::PairRms { a, b, pairs, clip })
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let value = Array::scalar(self.value(a).sum());
        self.push(value, Op::Sum(a))
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.value(a).len() as f64;
        let s = self.sum(a);
        self.scale(s, 1.0 / n)
    }

    /// Gradients of the scalar `root` with respect to every node.
    pub fn gradients(&self, root: Var) -> Gradients {
        debug_assert_eq!(self.value(root).len(), 1, "backward needs a scalar root");
        let mut grads: Vec<Option<Array>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(Array::scalar(1.0));
        for idx in (0..=root.0).rev() {
            let Some(g) = grads[idx].take() else {
                continue;
            };
            self.propagate(idx, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Gradients { grads }
    }

    /// Accumulates d(root)/d(param) into the gradient buffers of `params`.
    pub fn backward(&self, root: Var, params: &mut ParameterSet) {
        let grads = self.gradients(root);
        for (&id, &var) in &self.params {
            if let Some(g) = grads.get(var) {
                params.grad_mut(id).add_assign(g);
            }
        }
    }

    fn propagate(&self, idx: usize, g: &Array, grads: &mut [Option<Array>]) {
        let node = &self.nodes[idx];
        match &node.op {
            Op::Leaf | Op::Param => {}
            Op::MatMul(a, b) => {
                let ga = g.matmul_transpose_b(self.value(*b));
                let gb = self.value(*a).transpose_a_matmul(g);
                accumulate(grads, *a, ga);
                accumulate(grads, *b, gb);
            }
            Op::AddRow(a, row) => {
                let mut gr = Array::zeros(1, g.cols());
                for r in 0..g.rows() {
                    for (x, &v) in gr.data_mut().iter_mut().zip(g.row(r)) {
                        *x += v;
                    }
                }
                accumulate(grads, *a, g.clone());
                accumulate(grads, *row, gr);
            }
            Op::Add(a, b) => {
                accumulate(grads, *a, g.clone());
                accumulate(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                accumulate(grads, *a, g.clone());
                accumulate(grads, *b, g.map(|x| -x));
            }
            Op::Mul(a, b) => {
                let ga = g.zip_map(self.value(*b), |x, y| x * y);
                let gb = g.zip_map(self.value(*a), |x, y| x * y);
                accumulate(grads, *a, ga);
                accumulate(grads, *b, gb);
            }
            Op::Sigmoid(a) => {
                let ga = g.zip_map(&node.value, |x, s| x * s * (1.0 - s));
                accumulate(grads, *a, ga);
            }
            Op::Tanh(a) => {
                let ga = g.zip_map(&node.value, |x, t| x * (1.0 - t * t));
                accumulate(grads, *a, ga);
            }
            Op::Scale(a, f) => {
                let f = *f;
                accumulate(grads, *a, g.map(|x| x * f));
            }
            Op::RowScale(a, factors) => {
                let mut ga = g.clone();
                for (r, &f) in factors.iter().enumerate() {
                    ga.row_mut(r).iter_mut().for_each(|x| *x *= f);
                }
                accumulate(grads, *a, ga);
            }
            Op::Gather(table, ids) => {
                let tv = self.value(*table);
                let slot = grads[table.0].get_or_insert_with(|| Array::zeros(tv.rows(), tv.cols()));
                for (r, &id) in ids.iter().enumerate() {
                    for (x, &v) in slot.row_mut(id).iter_mut().zip(g.row(r)) {
                        *x += v;
                    }
                }
            }
            Op::SliceCols(a, start) => {
                let av = self.value(*a);
                let slot = grads[a.0].get_or_insert_with(|| Array::zeros(av.rows(), av.cols()));
                for r in 0..g.rows() {
                    for (x, &v) in slot.row_mut(r)[*start..*start + g.cols()]
                        .iter_mut()
                        .zip(g.row(r))
                    {
                        *x += v;
                    }
                }
            }
            Op::SliceRows(a, start) => {
                let av = self.value(*a);
                let slot = grads[a.0].get_or_insert_with(|| Array::zeros(av.rows(), av.cols()));
                for r in 0..g.rows() {
                    for (x, &v) in slot.row_mut(start + r).iter_mut().zip(g.row(r)) {
                        *x += v;
                    }
                }
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let rows = self.value(p).rows();
                    let cols = g.cols();
                    let data = g.data()[offset * cols..(offset + rows) * cols].to_vec();
                    accumulate(grads, p, Array::from_vec(rows, cols, data).expect("slice"));
                    offset += rows;
                }
            }
            Op::RowBlend { new, old, mask } => {
                let mut gn = g.clone();
                let mut go = g.clone();
                for (r, &m) in mask.iter().enumerate() {
                    gn.row_mut(r).iter_mut().for_each(|x| *x *= m);
                    go.row_mut(r).iter_mut().for_each(|x| *x *= 1.0 - m);
                }
                accumulate(grads, *new, gn);
                accumulate(grads, *old, go);
            }
            Op::LogSoftmaxPick {
                logits,
                targets,
                probs,
            } => {
                let mut gl = probs.clone();
                for (r, &t) in targets.iter().enumerate() {
                    let gr = g.get(r, 0);
                    let row = gl.row_mut(r);
                    row.iter_mut().for_each(|p| *p = -*p * gr);
                    row[t] += gr;
                }
                accumulate(grads, *logits, gl);
            }
            Op::PairRms { a, b, pairs, clip } => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let dim = av.cols() as f64;
                let mut ga = Array::zeros(av.rows(), av.cols());
                let mut gb = Array::zeros(bv.rows(), bv.cols());
                for (k, &(i, j)) in pairs.iter().enumerate() {
                    let d = rms(av.row(i), bv.row(j));
                    if d >= *clip || d == 0.0 {
                        continue;
                    }
                    let coef = g.get(k, 0) / (dim * d);
                    for c in 0..av.cols() {
                        let diff = av.get(i, c) - bv.get(j, c);
                        ga.row_mut(i)[c] += coef * diff;
                        gb.row_mut(j)[c] -= coef * diff;
                    }
                }
                accumulate(grads, *a, ga);
                accumulate(grads, *b, gb);
            }
            Op::Sum(a) => {
                let av = self.value(*a);
                accumulate(grads, *a, Array::filled(av.rows(), av.cols(), g.item()));
            }
        }
    }
}

fn accumulate(grads: &mut [Option<Array>], var: Var, g: Array) {
    match &mut grads[var.0] {
        Some(existing) => existing.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Root-mean-square of the coordinate differences.
pub(crate) fn rms(a: &[f64], b: &[f64]) -> f64 {
    let ss: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum();
    (ss / a.len() as f64).sqrt()
}
