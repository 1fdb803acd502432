//! Minimal reverse-mode tape over 2-D matrices.
//!
//! Nodes are appended in evaluation order, so a reverse sweep over the node
//! list is a valid topological order for back-propagation.

use ndarray::{s, Array2, Axis};

use crate::ops;
use crate::tensor::Real;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op<F> {
    Leaf,
    MatMul(usize, usize),
    MatMulBt(usize, usize),
    Add(usize, usize),
    AddRow(usize, usize),
    MulRow(usize, usize),
    Scale(usize, F),
    Silu(usize),
    Normalize(usize, Vec<F>),
    Softmax(usize),
    Im2Col { src: usize, h: usize, w: usize },
    AvgPool { src: usize, h: usize, w: usize },
    Upsample { src: usize, h: usize, w: usize },
    Concat(usize, usize),
    SliceCols { src: usize, start: usize },
    ConcatMany(Vec<usize>),
    GatherRows { table: usize, rows: Vec<usize> },
    Mse(usize, usize),
}

#[derive(Debug)]
struct Node<F> {
    value: Array2<F>,
    op: Op<F>,
    needs_grad: bool,
}

#[derive(Debug, Default)]
pub struct Tape<F: Real> {
    nodes: Vec<Node<F>>,
}

pub struct Grads<F> {
    grads: Vec<Option<Array2<F>>>,
}

impl<F> Grads<F> {
    pub fn get(&self, v: Var) -> Option<&Array2<F>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Array2<F>> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

impl<F: Real> Tape<F> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Array2<F>, op: Op<F>, inputs: &[usize]) -> Var {
        let needs_grad = inputs.iter().any(|&i| self.nodes[i].needs_grad);
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, value: Array2<F>, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Array2<F>) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Array2<F> {
        &self.nodes[v.0].value
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let v = ops::matmul(&self.value(a).view(), &self.value(b).view());
        self.push(v, Op::MatMul(a.0, b.0), &[a.0, b.0])
    }

    /// `a * b^T`; with `b` a `(out x in)` weight this is a linear layer.
    pub fn matmul_bt(&mut self, a: Var, b: Var) -> Var {
        let v = ops::matmul_bt(&self.value(a).view(), &self.value(b).view());
        self.push(v, Op::MatMulBt(a.0, b.0), &[a.0, b.0])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a) + self.value(b);
        self.push(v, Op::Add(a.0, b.0), &[a.0, b.0])
    }

    /// Broadcasts a `1 x n` row over every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let v = self.value(a) + self.value(row);
        self.push(v, Op::AddRow(a.0, row.0), &[a.0, row.0])
    }

    pub fn mul_row(&mut self, a: Var, row: Var) -> Var {
        let v = self.value(a) * self.value(row);
        self.push(v, Op::MulRow(a.0, row.0), &[a.0, row.0])
    }

    pub fn scale(&mut self, a: Var, s: F) -> Var {
        let v = ops::scale(&self.value(a).view(), s);
        self.push(v, Op::Scale(a.0, s), &[a.0])
    }

    pub fn silu(&mut self, a: Var) -> Var {
        let v = ops::silu(&self.value(a).view());
        self.push(v, Op::Silu(a.0), &[a.0])
    }

    pub fn normalize(&mut self, a: Var, eps: F) -> Var {
        let (v, inv) = ops::normalize_rows(&self.value(a).view(), eps);
        self.push(v, Op::Normalize(a.0, inv), &[a.0])
    }

    pub fn softmax(&mut self, a: Var) -> Var {
        let v = ops::softmax_rows(&self.value(a).view());
        self.push(v, Op::Softmax(a.0), &[a.0])
    }

    pub fn im2col3(&mut self, a: Var, h: usize, w: usize) -> Var {
        let v = ops::im2col3(&self.value(a).view(), h, w);
        self.push(v, Op::Im2Col { src: a.0, h, w }, &[a.0])
    }

    pub fn avg_pool2(&mut self, a: Var, h: usize, w: usize) -> Var {
        let v = ops::avg_pool2(&self.value(a).view(), h, w);
        self.push(v, Op::AvgPool { src: a.0, h, w }, &[a.0])
    }

    pub fn upsample2(&mut self, a: Var, h: usize, w: usize) -> Var {
        let v = ops::upsample2(&self.value(a).view(), h, w);
        self.push(v, Op::Upsample { src: a.0, h, w }, &[a.0])
    }

    pub fn concat_cols(&mut self, a: Var, b: Var) -> Var {
        let v = ops::concat_cols(&self.value(a).view(), &self.value(b).view());
        self.push(v, Op::Concat(a.0, b.0), &[a.0, b.0])
    }

    pub fn concat_many(&mut self, parts: &[Var]) -> Var {
        let views: Vec<_> = parts.iter().map(|p| self.value(*p).view()).collect();
        let v = ndarray::concatenate(Axis(1), &views).expect("row counts agree");
        let idx: Vec<usize> = parts.iter().map(|p| p.0).collect();
        self.push(v, Op::ConcatMany(idx.clone()), &idx)
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Var {
        let v = ops::slice_cols(&self.value(a).view(), start, len);
        self.push(v, Op::SliceCols { src: a.0, start }, &[a.0])
    }

    pub fn gather_rows(&mut self, table: Var, rows: &[usize]) -> Var {
        let v = self.value(table).select(Axis(0), rows);
        self.push(
            v,
            Op::GatherRows {
                table: table.0,
                rows: rows.to_vec(),
            },
            &[table.0],
        )
    }

    /// Mean squared error, as a `1 x 1` node.
    pub fn mse(&mut self, pred: Var, target: Var) -> Var {
        let diff = self.value(pred) - self.value(target);
        let n = F::from_usize(diff.len()).expect("usize");
        let loss = diff.iter().map(|&d| d * d).sum::<F>() / n;
        self.push(
            Array2::from_elem((1, 1), loss),
            Op::Mse(pred.0, target.0),
            &[pred.0, target.0],
        )
    }

    /// Back-propagates from a `1 x 1` node.
    pub fn backward(&self, loss: Var) -> Grads<F> {
        let mut grads: Vec<Option<Array2<F>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Array2::from_elem((1, 1), F::one()));
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].needs_grad || matches!(self.nodes[i].op, Op::Leaf) {
                continue;
            }
            // Interior gradients are consumed; only leaf gradients are kept.
            let g = match grads[i].take() {
                Some(g) => g,
                None => continue,
            };
            self.propagate(i, &g, &mut grads);
        }
        Grads { grads }
    }

    fn wants(&self, i: usize) -> bool {
        self.nodes[i].needs_grad
    }

    fn propagate(&self, i: usize, g: &Array2<F>, grads: &mut [Option<Array2<F>>]) {
        let node = &self.nodes[i];
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                if self.wants(*a) {
                    let ga = g.dot(&self.nodes[*b].value.t());
                    accumulate(grads, *a, ga);
                }
                if self.wants(*b) {
                    let gb = self.nodes[*a].value.t().dot(g);
                    accumulate(grads, *b, gb);
                }
            }
            Op::MatMulBt(a, b) => {
                if self.wants(*a) {
                    let ga = g.dot(&self.nodes[*b].value);
                    accumulate(grads, *a, ga);
                }
                if self.wants(*b) {
                    let gb = g.t().dot(&self.nodes[*a].value);
                    accumulate(grads, *b, gb);
                }
            }
            Op::Add(a, b) => {
                if self.wants(*a) {
                    accumulate(grads, *a, g.clone());
                }
                if self.wants(*b) {
                    accumulate(grads, *b, g.clone());
                }
            }
            Op::AddRow(a, r) => {
                if self.wants(*a) {
                    accumulate(grads, *a, g.clone());
                }
                if self.wants(*r) {
                    accumulate(grads, *r, g.sum_axis(Axis(0)).insert_axis(Axis(0)));
                }
            }
            Op::MulRow(a, r) => {
                if self.wants(*a) {
                    accumulate(grads, *a, g * &self.nodes[*r].value);
                }
                if self.wants(*r) {
                    let gr = (g * &self.nodes[*a].value).sum_axis(Axis(0)).insert_axis(Axis(0));
                    accumulate(grads, *r, gr);
                }
            }
            Op::Scale(a, s) => {
                let s = *s;
                accumulate(grads, *a, g.mapv(|v| v * s));
            }
            Op::Silu(a) => {
                let x = &self.nodes[*a].value;
                let mut ga = g.clone();
                ga.zip_mut_with(x, |gv, &xv| *gv *= ops::silu_grad(xv));
                accumulate(grads, *a, ga);
            }
            Op::Normalize(a, inv_std) => {
                let y = &node.value;
                let n = F::from_usize(y.ncols()).expect("usize");
                let mut ga = g.clone();
                for (r, mut row) in ga.rows_mut().into_iter().enumerate() {
                    let yr = y.row(r);
                    let mean_g = row.sum() / n;
                    let mean_gy = row.iter().zip(yr.iter()).map(|(&a, &b)| a * b).sum::<F>() / n;
                    let inv = inv_std[r];
                    for (gv, &yv) in row.iter_mut().zip(yr.iter()) {
                        *gv = inv * (*gv - mean_g - yv * mean_gy);
                    }
                }
                accumulate(grads, *a, ga);
            }
            Op::Softmax(a) => {
                let y = &node.value;
                let mut ga = g * y;
                for (r, mut row) in ga.rows_mut().into_iter().enumerate() {
                    let dot = row.sum();
                    let yr = y.row(r);
                    for (gv, &yv) in row.iter_mut().zip(yr.iter()) {
                        *gv -= yv * dot;
                    }
                }
                accumulate(grads, *a, ga);
            }
            Op::Im2Col { src, h, w } => {
                accumulate(grads, *src, ops::col2im3(&g.view(), *h, *w));
            }
            Op::AvgPool { src, h, w } => {
                accumulate(grads, *src, ops::avg_pool2_backward(&g.view(), *h, *w));
            }
            Op::Upsample { src, h, w } => {
                accumulate(grads, *src, ops::upsample2_backward(&g.view(), *h, *w));
            }
            Op::Concat(a, b) => {
                let ca = self.nodes[*a].value.ncols();
                if self.wants(*a) {
                    accumulate(grads, *a, g.slice(s![.., ..ca]).to_owned());
                }
                if self.wants(*b) {
                    accumulate(grads, *b, g.slice(s![.., ca..]).to_owned());
                }
            }
            Op::ConcatMany(parts) => {
                let mut start = 0;
                for &p in parts {
                    let len = self.nodes[p].value.ncols();
                    if self.wants(p) {
                        accumulate(grads, p, g.slice(s![.., start..start + len]).to_owned());
                    }
                    start += len;
                }
            }
            Op::SliceCols { src, start } => {
                let mut ga = Array2::zeros(self.nodes[*src].value.dim());
                ga.slice_mut(s![.., *start..*start + g.ncols()]).assign(g);
                accumulate(grads, *src, ga);
            }
            Op::GatherRows { table, rows } => {
                let mut gt = Array2::zeros(self.nodes[*table].value.dim());
                for (k, &r) in rows.iter().enumerate() {
                    let mut dst = gt.row_mut(r);
                    dst += &g.row(k);
                }
                accumulate(grads, *table, gt);
            }
            Op::Mse(p, t) => {
                let diff = &self.nodes[*p].value - &self.nodes[*t].value;
                let n = F::from_usize(diff.len()).expect("usize");
                let coef = g[[0, 0]] * F::from_f64c(2.0) / n;
                if self.wants(*p) {
                    accumulate(grads, *p, diff.mapv(|d| d * coef));
                }
                if self.wants(*t) {
                    accumulate(grads, *t, diff.mapv(|d| -d * coef));
                }
            }
        }
    }
}

fn accumulate<F: Real>(grads: &mut [Option<Array2<F>>], i: usize, g: Array2<F>) {
    match &mut grads[i] {
        Some(existing) => *existing += &g,
        slot @ None => *slot = Some(g),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn numeric_grad(
        f: &dyn Fn(&Array2<f64>) -> f64,
        x: &Array2<f64>,
        h: f64,
    ) -> Array2<f64> {
        let mut g = Array2::zeros(x.dim());
        for idx in 0..x.len() {
            let (r, c) = (idx / x.ncols(), idx % x.ncols());
            let mut xp = x.clone();
            xp[[r, c]] += h;
            let mut xm = x.clone();
            xm[[r, c]] -= h;
            g[[r, c]] = (f(&xp) - f(&xm)) / (2.0 * h);
        }
        g
    }

    fn check(build: fn(&mut Tape<f64>, Var) -> Var, x: Array2<f64>) {
        let f = |x: &Array2<f64>| {
            let mut tape = Tape::new();
            let v = tape.leaf(x.clone(), true);
            let out = build(&mut tape, v);
            let target = tape.constant(Array2::zeros(tape.value(out).dim()));
            let loss = tape.mse(out, target);
            tape.value(loss)[[0, 0]]
        };
        let mut tape = Tape::new();
        let v = tape.leaf(x.clone(), true);
        let out = build(&mut tape, v);
        let target = tape.constant(Array2::zeros(tape.value(out).dim()));
        let loss = tape.mse(out, target);
        let grads = tape.backward(loss);
        let analytic = grads.get(v).unwrap();
        let numeric = numeric_grad(&f, &x, 1e-5);
        for (a, n) in analytic.iter().zip(numeric.iter()) {
            assert!((a - n).abs() <= 1e-6 * (1.0 + n.abs()), "{a} vs {n}");
        }
    }

    fn input(rows: usize, cols: usize) -> Array2<f64> {
        Array2::from_shape_fn((rows, cols), |(i, j)| ((i * 31 + j * 17) % 13) as f64 / 6.0 - 1.0)
    }

    #[test]
    fn grad_softmax_normalize_silu() {
        check(|t, x| t.softmax(x), input(3, 5));
        check(|t, x| t.normalize(x, 1e-5), input(4, 6));
        check(|t, x| t.silu(x), input(2, 7));
    }

    #[test]
    fn grad_spatial_ops() {
        check(|t, x| t.im2col3(x, 4, 4), input(16, 3));
        check(|t, x| t.avg_pool2(x, 4, 4), input(16, 2));
        check(|t, x| t.upsample2(x, 2, 2), input(4, 2));
    }

    #[test]
    fn grad_matmuls_and_structure() {
        check(
            |t, x| {
                let w = t.constant(input(4, 5));
                let y = t.matmul_bt(x, w);
                let z = t.matmul(y, w);
                let s = t.slice_cols(z, 1, 3);
                let c = t.concat_cols(s, x);
                t.scale(c, 0.5)
            },
            input(3, 5),
        );
        check(
            |t, x| {
                let g = t.constant(input(3, 3));
                let left = t.matmul(g, x);
                let gx = t.matmul_bt(x, x);
                let right = t.matmul(gx, x);
                let r = t.slice_cols(right, 0, 2);
                let l = t.slice_cols(left, 0, 2);
                let both = t.concat_many(&[l, r]);
                t.silu(both)
            },
            input(3, 5),
        );
        check(
            |t, x| {
                let rows = t.gather_rows(x, &[2, 0, 2]);
                let both = t.concat_many(&[rows, rows]);
                let r0 = t.gather_rows(x, &[1]);
                let a = t.add_row(rows, r0);
                let m = t.mul_row(a, r0);
                let head = t.slice_cols(both, 0, 4);
                t.add(m, head)
            },
            input(3, 4),
        );
    }

    #[test]
    fn constants_do_not_receive_grads() {
        let mut tape = Tape::<f64>::new();
        let c = tape.constant(array![[1.0, 2.0]]);
        let p = tape.leaf(array![[0.5, -0.5]], true);
        let y = tape.add(c, p);
        let t = tape.constant(array![[0.0, 0.0]]);
        let loss = tape.mse(y, t);
        let grads = tape.backward(loss);
        assert!(grads.get(c).is_none());
        assert!(grads.get(p).is_some());
    }
}
