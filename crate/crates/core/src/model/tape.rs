//! Tensor-level reverse-mode differentiation over 2-D row-major values.

use std::rc::Rc;

use num_complex::Complex64;

use crate::spectral::{apply_real_mask, dft_complex, idft_complex};

use super::params::ParamStore;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Param(usize),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    AddRow(Var, Var),
    Scale(Var, f64),
    ScaleBy(Var, Var),
    MatMul(Var, Var),
    Transpose(Var),
    Conv1d { x: Var, w: Var, kernel: usize, dilation: usize },
    Silu(Var),
    Tanh(Var),
    Exp(Var),
    Ln(Var),
    Sqrt(Var),
    SoftmaxRows(Var),
    Sum(Var),
    SumSq(Var),
    L2Norm(Var),
    NormalizeRows(Var),
    ColumnMask(Var, Rc<Vec<f64>>),
    PairwiseColDist(Var),
    DftNorm(Var),
    AxisUnit(Var),
    CrossEntropyRows(Var, Rc<Vec<usize>>),
}

#[derive(Debug, Clone)]
struct Node {
    rows: usize,
    cols: usize,
    value: Vec<f64>,
    op: Op,
}

/// Records operations in evaluation order; `backward` replays them in
/// reverse.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients with respect to every recorded node.
pub struct Grads {
    g: Vec<Option<Vec<f64>>>,
}

impl Grads {
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.g[v.0].as_deref()
    }
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn acc(slot: &mut Option<Vec<f64>>, len: usize, f: impl FnOnce(&mut [f64])) {
    let buf = slot.get_or_insert_with(|| vec![0.0; len]);
    f(buf);
}

fn matmul_into(a: &[f64], b: &[f64], out: &mut [f64], n: usize, k: usize, m: usize) {
    for i in 0..n {
        let orow = &mut out[i * m..(i + 1) * m];
        for (p, &av) in a[i * k..(i + 1) * k].iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            for (o, &bv) in orow.iter_mut().zip(&b[p * m..(p + 1) * m]) {
                *o += av * bv;
            }
        }
    }
}

/// Valid output rows `[lo, hi)` for a tap offset `off`.
fn tap_range(n: usize, off: isize) -> (usize, usize) {
    let lo = (-off).max(0) as usize;
    let hi = (n as isize - off.max(0)).max(0) as usize;
    (lo.min(n), hi)
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

    fn push(&mut self, rows: usize, cols: usize, value: Vec<f64>, op: Op) -> Var {
        debug_assert_eq!(value.len(), rows * cols);
        self.nodes.push(Node { rows, cols, value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value[0]
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        (self.nodes[v.0].rows, self.nodes[v.0].cols)
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) {
        assert_eq!(self.shape(a), self.shape(b), "{what}: shape mismatch");
    }

    pub fn leaf(&mut self, rows: usize, cols: usize, value: Vec<f64>) -> Var {
        assert_eq!(value.len(), rows * cols, "leaf: wrong value length");
        self.push(rows, cols, value, Op::Leaf)
    }

    pub fn constant(&mut self, c: f64) -> Var {
        self.push(1, 1, vec![c], Op::Leaf)
    }

    /// Loads parameter entry `id` from the store.
    pub fn param(&mut self, store: &ParamStore, id: usize) -> Var {
        let e = store.entry(id);
        self.push(e.rows, e.cols, store.slice(id).to_vec(), Op::Param(id))
    }

    fn zip(&mut self, a: Var, b: Var, op: Op, f: impl Fn(f64, f64) -> f64) -> Var {
        self.same_shape(a, b, "elementwise");
        let (r, c) = self.shape(a);
        let v = self.value(a).iter().zip(self.value(b)).map(|(&x, &y)| f(x, y)).collect();
        self.push(r, c, v, op)
    }

    fn map(&mut self, a: Var, op: Op, f: impl Fn(f64) -> f64) -> Var {
        let (r, c) = self.shape(a);
        let v = self.value(a).iter().map(|&x| f(x)).collect();
        self.push(r, c, v, op)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        self.zip(a, b, Op::Add(a, b), |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        self.zip(a, b, Op::Sub(a, b), |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        self.zip(a, b, Op::Mul(a, b), |x, y| x * y)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Var {
        self.zip(a, b, Op::Div(a, b), |x, y| x / y)
    }

    /// `a[n×c] + row[1×c]` broadcast over rows.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let (r, c) = self.shape(a);
        assert_eq!(self.shape(row), (1, c), "add_row: shape mismatch");
        let b = self.value(row).to_vec();
        let v = self
            .value(a)
            .chunks(c)
            .flat_map(|chunk| chunk.iter().zip(&b).map(|(x, y)| x + y).collect::<Vec<_>>())
            .collect();
        self.push(r, c, v, Op::AddRow(a, row))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        self.map(a, Op::Scale(a, s), |x| x * s)
    }

    /// `a * s` with `s` a 1×1 variable.
    pub fn scale_by(&mut self, a: Var, s: Var) -> Var {
        assert_eq!(self.shape(s), (1, 1), "scale_by: scalar expected");
        let k = self.scalar(s);
        self.map(a, Op::ScaleBy(a, s), |x| x * k)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (n, k) = self.shape(a);
        let (k2, m) = self.shape(b);
        assert_eq!(k, k2, "matmul: inner dimensions differ");
        let mut out = vec![0.0; n * m];
        matmul_into(self.value(a), self.value(b), &mut out, n, k, m);
        self.push(n, m, out, Op::MatMul(a, b))
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let (r, c) = self.shape(a);
        let x = self.value(a);
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = x[i * c + j];
            }
        }
        self.push(c, r, out, Op::Transpose(a))
    }

    /// Same-length dilated convolution along rows. `x` is `[n × c_in]`,
    /// `w` is `[kernel·c_in × c_out]` with tap-major rows.
    pub fn conv1d(&mut self, x: Var, w: Var, kernel: usize, dilation: usize) -> Var {
        let (n, cin) = self.shape(x);
        let (wr, cout) = self.shape(w);
        assert_eq!(wr, kernel * cin, "conv1d: weight rows must be kernel*c_in");
        let xv = self.value(x);
        let wv = self.value(w);
        let mut out = vec![0.0; n * cout];
        let centre = (kernel / 2) as isize;
        for k in 0..kernel {
            let off = (k as isize - centre) * dilation as isize;
            let (lo, hi) = tap_range(n, off);
            let wk = &wv[k * cin * cout..(k + 1) * cin * cout];
            for t in lo..hi {
                let src = (t as isize + off) as usize;
                let xrow = &xv[src * cin..(src + 1) * cin];
                let orow = &mut out[t * cout..(t + 1) * cout];
                for (i, &xi) in xrow.iter().enumerate() {
                    for (o, &wo) in orow.iter_mut().zip(&wk[i * cout..(i + 1) * cout]) {
                        *o += xi * wo;
                    }
                }
            }
        }
        self.push(n, cout, out, Op::Conv1d { x, w, kernel, dilation })
    }

    pub fn silu(&mut self, a: Var) -> Var {
        self.map(a, Op::Silu(a), |x| x * sigmoid(x))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.map(a, Op::Tanh(a), f64::tanh)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.map(a, Op::Exp(a), f64::exp)
    }

    pub fn ln(&mut self, a: Var) -> Var {
        self.map(a, Op::Ln(a), f64::ln)
    }

    pub fn sqrt(&mut self, a: Var) -> Var {
        self.map(a, Op::Sqrt(a), f64::sqrt)
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let (r, c) = self.shape(a);
        let mut out = self.value(a).to_vec();
        for row in out.chunks_mut(c) {
            let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut s = 0.0;
            for v in row.iter_mut() {
                *v = (*v - m).exp();
                s += *v;
            }
            for v in row.iter_mut() {
                *v /= s;
            }
        }
        self.push(r, c, out, Op::SoftmaxRows(a))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).iter().sum();
        self.push(1, 1, vec![s], Op::Sum(a))
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.value(a).len() as f64;
        let s = self.sum(a);
        self.scale(s, 1.0 / n)
    }

    pub fn sum_sq(&mut self, a: Var) -> Var {
        let s = self.value(a).iter().map(|v| v * v).sum();
        self.push(1, 1, vec![s], Op::SumSq(a))
    }

    /// Frobenius norm.
    pub fn l2_norm(&mut self, a: Var) -> Var {
        let s = self.value(a).iter().map(|v| v * v).sum::<f64>().sqrt();
        self.push(1, 1, vec![s], Op::L2Norm(a))
    }

    /// Scales each row to unit Euclidean length; zero rows stay zero.
    pub fn normalize_rows(&mut self, a: Var) -> Var {
        let (r, c) = self.shape(a);
        let mut out = self.value(a).to_vec();
        for row in out.chunks_mut(c) {
            let n = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            if n > 0.0 {
                row.iter_mut().for_each(|v| *v /= n);
            }
        }
        self.push(r, c, out, Op::NormalizeRows(a))
    }

    /// Applies `idft(dft(col) ⊙ mask)` to every column.
    pub fn column_mask(&mut self, a: Var, mask: Rc<Vec<f64>>) -> Var {
        let (r, c) = self.shape(a);
        assert_eq!(mask.len(), r, "column_mask: mask length");
        let out = map_columns(self.value(a), r, c, |col| apply_real_mask(col, &mask));
        self.push(r, c, out, Op::ColumnMask(a, mask))
    }

    /// `Σ_{i≠j} ‖a_i − a_j‖₂` over ordered column pairs.
    pub fn pairwise_col_dist(&mut self, a: Var) -> Var {
        let (r, c) = self.shape(a);
        let cols = columns(self.value(a), r, c);
        let mut s = 0.0;
        for i in 0..c {
            for j in 0..c {
                if i != j {
                    s += cols[i].iter().zip(&cols[j]).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
                }
            }
        }
        self.push(1, 1, vec![s], Op::PairwiseColDist(a))
    }

    /// Frobenius norm of the column-wise unitary DFT.
    pub fn dft_norm(&mut self, a: Var) -> Var {
        let (r, c) = self.shape(a);
        let s = columns(self.value(a), r, c)
            .iter()
            .map(|col| {
                let mut buf: Vec<Complex64> = col.iter().map(|&v| Complex64::new(v, 0.0)).collect();
                dft_complex(&mut buf);
                buf.iter().map(|z| z.norm_sqr()).sum::<f64>()
            })
            .sum::<f64>()
            .sqrt();
        self.push(1, 1, vec![s], Op::DftNorm(a))
    }

    /// Unit vector along `(Σ col0, Σ col1)`; zero when both sums vanish.
    pub fn axis_unit(&mut self, a: Var) -> Var {
        let (s1, s2) = self.column_sums01(a);
        let r = (s1 * s1 + s2 * s2).sqrt();
        let v = if r > 0.0 { vec![s1 / r, s2 / r] } else { vec![0.0, 0.0] };
        self.push(1, 2, v, Op::AxisUnit(a))
    }

    pub fn column_sums01(&self, a: Var) -> (f64, f64) {
        let (_, c) = self.shape(a);
        assert!(c >= 2, "need two columns");
        self.value(a).chunks(c).fold((0.0, 0.0), |(p, q), row| (p + row[0], q + row[1]))
    }

    /// Mean over rows of `logsumexp(row) − row[target]`.
    pub fn cross_entropy_rows(&mut self, logits: Var, targets: &[usize]) -> Var {
        let (r, c) = self.shape(logits);
        assert_eq!(targets.len(), r, "cross_entropy_rows: one target per row");
        let x = self.value(logits);
        let mut s = 0.0;
        for (row, &t) in x.chunks(c).zip(targets) {
            s += log_sum_exp(row) - row[t];
        }
        self.push(1, 1, vec![s / r as f64], Op::CrossEntropyRows(logits, Rc::new(targets.to_vec())))
    }

    /// Reverse sweep from a 1×1 output.
    pub fn backward(&self, out: Var) -> Grads {
        assert_eq!(self.shape(out), (1, 1), "backward needs a scalar");
        let mut g: Vec<Option<Vec<f64>>> = vec![None; out.0 + 1];
        g[out.0] = Some(vec![1.0]);
        for i in (0..=out.0).rev() {
            let (lo, hi) = g.split_at_mut(i);
            let Some(gi) = hi[0].as_deref() else { continue };
            let node = &self.nodes[i];
            self.back_node(node, gi, lo);
        }
        Grads { g }
    }

    fn back_node(&self, node: &Node, gi: &[f64], g: &mut [Option<Vec<f64>>]) {
        let len = |v: Var| self.nodes[v.0].value.len();
        let val = |v: Var| &self.nodes[v.0].value[..];
        match &node.op {
            Op::Leaf | Op::Param(_) => {}
            Op::Add(a, b) => {
                acc(&mut g[a.0], len(*a), |d| d.iter_mut().zip(gi).for_each(|(d, x)| *d += x));
                acc(&mut g[b.0], len(*b), |d| d.iter_mut().zip(gi).for_each(|(d, x)| *d += x));
            }
            Op::Sub(a, b) => {
                acc(&mut g[a.0], len(*a), |d| d.iter_mut().zip(gi).for_each(|(d, x)| *d += x));
                acc(&mut g[b.0], len(*b), |d| d.iter_mut().zip(gi).for_each(|(d, x)| *d -= x));
            }
            Op::Mul(a, b) => {
                let (av, bv) = (val(*a), val(*b));
                acc(&mut g[a.0], av.len(), |d| {
                    for ((d, x), y) in d.iter_mut().zip(gi).zip(bv) {
                        *d += x * y;
                    }
                });
                acc(&mut g[b.0], bv.len(), |d| {
                    for ((d, x), y) in d.iter_mut().zip(gi).zip(av) {
                        *d += x * y;
                    }
                });
            }
            Op::Div(a, b) => {
                let bv = val(*b);
                let out = &node.value;
                acc(&mut g[a.0], bv.len(), |d| {
                    for ((d, x), y) in d.iter_mut().zip(gi).zip(bv) {
                        *d += x / y;
                    }
                });
                acc(&mut g[b.0], bv.len(), |d| {
                    for (((d, x), y), o) in d.iter_mut().zip(gi).zip(bv).zip(out) {
                        *d -= x * o / y;
                    }
                });
            }
            Op::AddRow(a, row) => {
                let c = node.cols;
                acc(&mut g[a.0], len(*a), |d| d.iter_mut().zip(gi).for_each(|(d, x)| *d += x));
                acc(&mut g[row.0], c, |d| {
                    for chunk in gi.chunks(c) {
                        d.iter_mut().zip(chunk).for_each(|(d, x)| *d += x);
                    }
                });
            }
            Op::Scale(a, s) => {
                acc(&mut g[a.0], len(*a), |d| d.iter_mut().zip(gi).for_each(|(d, x)| *d += s * x));
            }
            Op::ScaleBy(a, s) => {
                let k = val(*s)[0];
                let av = val(*a);
                acc(&mut g[a.0], av.len(), |d| d.iter_mut().zip(gi).for_each(|(d, x)| *d += k * x));
                let dot: f64 = av.iter().zip(gi).map(|(x, y)| x * y).sum();
                acc(&mut g[s.0], 1, |d| d[0] += dot);
            }
            Op::MatMul(a, b) => {
                let (n, k) = (self.nodes[a.0].rows, self.nodes[a.0].cols);
                let m = self.nodes[b.0].cols;
                let (av, bv) = (val(*a), val(*b));
                acc(&mut g[a.0], n * k, |d| {
                    for i in 0..n {
                        let grow = &gi[i * m..(i + 1) * m];
                        for p in 0..k {
                            d[i * k + p] +=
                                grow.iter().zip(&bv[p * m..(p + 1) * m]).map(|(x, y)| x * y).sum::<f64>();
                        }
                    }
                });
                acc(&mut g[b.0], k * m, |d| {
                    for i in 0..n {
                        let grow = &gi[i * m..(i + 1) * m];
                        for p in 0..k {
                            let av = av[i * k + p];
                            if av == 0.0 {
                                continue;
                            }
                            for (d, x) in d[p * m..(p + 1) * m].iter_mut().zip(grow) {
                                *d += av * x;
                            }
                        }
                    }
                });
            }
            Op::Transpose(a) => {
                let (r, c) = (node.cols, node.rows);
                acc(&mut g[a.0], r * c, |d| {
                    for i in 0..r {
                        for j in 0..c {
                            d[i * c + j] += gi[j * r + i];
                        }
                    }
                });
            }
            Op::Conv1d { x, w, kernel, dilation } => {
                let (n, cin) = (self.nodes[x.0].rows, self.nodes[x.0].cols);
                let cout = node.cols;
                let (xv, wv) = (val(*x), val(*w));
                let centre = (*kernel / 2) as isize;
                let taps = || {
                    (0..*kernel).map(move |k| {
                        let off = (k as isize - centre) * *dilation as isize;
                        (k, off, tap_range(n, off))
                    })
                };
                acc(&mut g[x.0], n * cin, |d| {
                    for (k, off, (lo, hi)) in taps() {
                        let wk = &wv[k * cin * cout..(k + 1) * cin * cout];
                        for t in lo..hi {
                            let src = (t as isize + off) as usize;
                            let grow = &gi[t * cout..(t + 1) * cout];
                            let drow = &mut d[src * cin..(src + 1) * cin];
                            for (i, dv) in drow.iter_mut().enumerate() {
                                *dv += wk[i * cout..(i + 1) * cout]
                                    .iter()
                                    .zip(grow)
                                    .map(|(a, b)| a * b)
                                    .sum::<f64>();
                            }
                        }
                    }
                });
                acc(&mut g[w.0], wv.len(), |d| {
                    for (k, off, (lo, hi)) in taps() {
                        let dk = &mut d[k * cin * cout..(k + 1) * cin * cout];
                        for t in lo..hi {
                            let src = (t as isize + off) as usize;
                            let grow = &gi[t * cout..(t + 1) * cout];
                            for (i, &xi) in xv[src * cin..(src + 1) * cin].iter().enumerate() {
                                for (dv, gv) in dk[i * cout..(i + 1) * cout].iter_mut().zip(grow) {
                                    *dv += xi * gv;
                                }
                            }
                        }
                    }
                });
            }
            Op::Silu(a) => {
                let av = val(*a);
                acc(&mut g[a.0], av.len(), |d| {
                    for ((d, x), &v) in d.iter_mut().zip(gi).zip(av) {
                        let s = sigmoid(v);
                        *d += x * (s + v * s * (1.0 - s));
                    }
                });
            }
            Op::Tanh(a) => {
                acc(&mut g[a.0], len(*a), |d| {
                    for ((d, x), y) in d.iter_mut().zip(gi).zip(&node.value) {
                        *d += x * (1.0 - y * y);
                    }
                });
            }
            Op::Exp(a) => {
                acc(&mut g[a.0], len(*a), |d| {
                    for ((d, x), y) in d.iter_mut().zip(gi).zip(&node.value) {
                        *d += x * y;
                    }
                });
            }
            Op::Ln(a) => {
                let av = val(*a);
                acc(&mut g[a.0], av.len(), |d| {
                    for ((d, x), y) in d.iter_mut().zip(gi).zip(av) {
                        *d += x / y;
                    }
                });
            }
            Op::Sqrt(a) => {
                acc(&mut g[a.0], len(*a), |d| {
                    for ((d, x), y) in d.iter_mut().zip(gi).zip(&node.value) {
                        *d += x / (2.0 * y);
                    }
                });
            }
            Op::SoftmaxRows(a) => {
                let c = node.cols;
                acc(&mut g[a.0], node.value.len(), |d| {
                    for ((drow, grow), prow) in d.chunks_mut(c).zip(gi.chunks(c)).zip(node.value.chunks(c)) {
                        let dot: f64 = grow.iter().zip(prow).map(|(x, y)| x * y).sum();
                        for ((d, x), p) in drow.iter_mut().zip(grow).zip(prow) {
                            *d += p * (x - dot);
                        }
                    }
                });
            }
            Op::Sum(a) => {
                acc(&mut g[a.0], len(*a), |d| d.iter_mut().for_each(|d| *d += gi[0]));
            }
            Op::SumSq(a) => {
                let av = val(*a);
                acc(&mut g[a.0], av.len(), |d| {
                    for (d, x) in d.iter_mut().zip(av) {
                        *d += 2.0 * x * gi[0];
                    }
                });
            }
            Op::L2Norm(a) => {
                let nrm = node.value[0];
                if nrm > 0.0 {
                    let av = val(*a);
                    acc(&mut g[a.0], av.len(), |d| {
                        for (d, x) in d.iter_mut().zip(av) {
                            *d += gi[0] * x / nrm;
                        }
                    });
                }
            }
            Op::NormalizeRows(a) => {
                let c = node.cols;
                let av = val(*a);
                acc(&mut g[a.0], av.len(), |d| {
                    for (((drow, grow), yrow), xrow) in
                        d.chunks_mut(c).zip(gi.chunks(c)).zip(node.value.chunks(c)).zip(av.chunks(c))
                    {
                        let n = xrow.iter().map(|v| v * v).sum::<f64>().sqrt();
                        if n == 0.0 {
                            continue;
                        }
                        let dot: f64 = grow.iter().zip(yrow).map(|(x, y)| x * y).sum();
                        for ((d, x), y) in drow.iter_mut().zip(grow).zip(yrow) {
                            *d += (x - y * dot) / n;
                        }
                    }
                });
            }
            Op::ColumnMask(a, mask) => {
                let (r, c) = (node.rows, node.cols);
                let back = map_columns(gi, r, c, |col| apply_real_mask(col, mask));
                acc(&mut g[a.0], r * c, |d| d.iter_mut().zip(&back).for_each(|(d, x)| *d += x));
            }
            Op::PairwiseColDist(a) => {
                let (r, c) = (self.nodes[a.0].rows, self.nodes[a.0].cols);
                let cols = columns(val(*a), r, c);
                acc(&mut g[a.0], r * c, |d| {
                    for i in 0..c {
                        for j in 0..c {
                            if i == j {
                                continue;
                            }
                            let diff: Vec<f64> = cols[i].iter().zip(&cols[j]).map(|(x, y)| x - y).collect();
                            let n = diff.iter().map(|v| v * v).sum::<f64>().sqrt();
                            if n == 0.0 {
                                continue;
                            }
                            for (t, dv) in diff.iter().enumerate() {
                                let q = gi[0] * dv / n;
                                d[t * c + i] += q;
                                d[t * c + j] -= q;
                            }
                        }
                    }
                });
            }
            Op::DftNorm(a) => {
                let nrm = node.value[0];
                if nrm > 0.0 {
                    let (r, c) = (self.nodes[a.0].rows, self.nodes[a.0].cols);
                    // Adjoint of the unitary transform applied to the spectrum.
                    let back = map_columns(val(*a), r, c, |col| {
                        let mut buf: Vec<Complex64> = col.iter().map(|&v| Complex64::new(v, 0.0)).collect();
                        dft_complex(&mut buf);
                        idft_complex(&mut buf);
                        buf.iter().map(|z| z.re).collect()
                    });
                    acc(&mut g[a.0], r * c, |d| {
                        for (d, x) in d.iter_mut().zip(&back) {
                            *d += gi[0] * x / nrm;
                        }
                    });
                }
            }
            Op::AxisUnit(a) => {
                let (s1, s2) = self.column_sums01(*a);
                let r2 = s1 * s1 + s2 * s2;
                if r2 > 0.0 {
                    let r3 = r2 * r2.sqrt();
                    let ds1 = gi[0] * s2 * s2 / r3 - gi[1] * s1 * s2 / r3;
                    let ds2 = -gi[0] * s1 * s2 / r3 + gi[1] * s1 * s1 / r3;
                    let c = self.nodes[a.0].cols;
                    acc(&mut g[a.0], len(*a), |d| {
                        for row in d.chunks_mut(c) {
                            row[0] += ds1;
                            row[1] += ds2;
                        }
                    });
                }
            }
            Op::CrossEntropyRows(a, targets) => {
                let c = self.nodes[a.0].cols;
                let r = targets.len() as f64;
                let av = val(*a);
                acc(&mut g[a.0], av.len(), |d| {
                    for ((drow, xrow), &t) in d.chunks_mut(c).zip(av.chunks(c)).zip(targets.iter()) {
                        let lse = log_sum_exp(xrow);
                        for (k, (d, x)) in drow.iter_mut().zip(xrow).enumerate() {
                            let p = (x - lse).exp() - f64::from(u8::from(k == t));
                            *d += gi[0] * p / r;
                        }
                    }
                });
            }
        }
    }

    /// Accumulates gradients of parameter leaves into a store-shaped
    /// flat vector.
    pub fn param_grads(&self, grads: &Grads, store: &ParamStore, into: &mut [f64]) {
        assert_eq!(into.len(), store.len());
        for (i, node) in self.nodes.iter().enumerate().take(grads.g.len()) {
            if let (Op::Param(id), Some(gv)) = (&node.op, &grads.g[i]) {
                let e = store.entry(*id);
                for (d, x) in into[e.offset..e.offset + e.len()].iter_mut().zip(gv) {
                    *d += x;
                }
            }
        }
    }
}

pub fn log_sum_exp(row: &[f64]) -> f64 {
    let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln()
}

fn columns(x: &[f64], r: usize, c: usize) -> Vec<Vec<f64>> {
    (0..c).map(|j| (0..r).map(|i| x[i * c + j]).collect()).collect()
}

fn map_columns(x: &[f64], r: usize, c: usize, f: impl Fn(&[f64]) -> Vec<f64>) -> Vec<f64> {
    let mut out = vec![0.0; r * c];
    for (j, col) in columns(x, r, c).iter().enumerate() {
        for (i, v) in f(col).into_iter().enumerate() {
            out[i * c + j] = v;
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    fn randv(rng: &mut ChaCha8Rng, n: usize, sd: f64) -> Vec<f64> {
        (0..n).map(|_| sd * rng.sample::<f64, _>(StandardNormal)).collect()
    }

    /// Checks d(sum(f(inputs) ⊙ R))/d(inputs) against central differences.
    fn check(
        shapes: &[(usize, usize)],
        seed: u64,
        positive: bool,
        f: impl Fn(&mut Tape, &[Var]) -> Var,
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let inputs: Vec<Vec<f64>> = shapes
            .iter()
            .map(|&(r, c)| {
                let v = randv(&mut rng, r * c, 1.0);
                if positive { v.iter().map(|x| x.abs() + 0.5).collect() } else { v }
            })
            .collect();
        let weights = std::cell::RefCell::new(None::<Vec<f64>>);
        let eval = |vals: &[Vec<f64>], rng: &mut ChaCha8Rng| {
            let mut t = Tape::new();
            let vars: Vec<Var> = shapes.iter().zip(vals).map(|(&(r, c), v)| t.leaf(r, c, v.clone())).collect();
            let y = f(&mut t, &vars);
            let (r, c) = t.shape(y);
            let mut w = weights.borrow_mut();
            let wv = w.get_or_insert_with(|| randv(rng, r * c, 1.0)).clone();
            let wl = t.leaf(r, c, wv);
            let p = t.mul(y, wl);
            let s = t.sum(p);
            (t, vars, s)
        };
        let (t, vars, s) = eval(&inputs, &mut rng);
        let grads = t.backward(s);
        let h = 1e-5;
        for (k, v) in vars.iter().enumerate() {
            let analytic = grads.get(*v).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; inputs[k].len()]);
            for idx in 0..inputs[k].len() {
                let mut plus = inputs.clone();
                plus[k][idx] += h;
                let mut minus = inputs.clone();
                minus[k][idx] -= h;
                let (tp, _, sp) = eval(&plus, &mut rng);
                let (tm, _, sm) = eval(&minus, &mut rng);
                let numeric = (tp.scalar(sp) - tm.scalar(sm)) / (2.0 * h);
                let a = analytic[idx];
                let err = (a - numeric).abs() / (a.abs().max(numeric.abs()).max(1e-2));
                assert!(err < 1e-4, "input {k}[{idx}]: analytic {a} numeric {numeric}");
            }
        }
    }

    #[test]
    fn elementwise_grads() {
        for seed in 0..3 {
            check(&[(3, 4), (3, 4)], seed, false, |t, v| t.add(v[0], v[1]));
            check(&[(3, 4), (3, 4)], seed, false, |t, v| t.sub(v[0], v[1]));
            check(&[(3, 4), (3, 4)], seed, false, |t, v| t.mul(v[0], v[1]));
            check(&[(3, 4), (3, 4)], seed, true, |t, v| t.div(v[0], v[1]));
            check(&[(3, 4), (1, 4)], seed, false, |t, v| t.add_row(v[0], v[1]));
            check(&[(3, 4)], seed, false, |t, v| t.scale(v[0], -1.7));
            check(&[(3, 4), (1, 1)], seed, false, |t, v| t.scale_by(v[0], v[1]));
            check(&[(3, 4)], seed, false, |t, v| t.silu(v[0]));
            check(&[(3, 4)], seed, false, |t, v| t.tanh(v[0]));
            check(&[(3, 4)], seed, false, |t, v| t.exp(v[0]));
            check(&[(3, 4)], seed, true, |t, v| t.ln(v[0]));
            check(&[(3, 4)], seed, true, |t, v| t.sqrt(v[0]));
        }
    }

    #[test]
    fn structural_grads() {
        for seed in 0..3 {
            check(&[(3, 5), (5, 2)], seed, false, |t, v| t.matmul(v[0], v[1]));
            check(&[(3, 5)], seed, false, |t, v| t.transpose(v[0]));
            check(&[(4, 6)], seed, false, |t, v| t.softmax_rows(v[0]));
            check(&[(4, 6)], seed, false, |t, v| t.sum(v[0]));
            check(&[(4, 6)], seed, false, |t, v| t.mean(v[0]));
            check(&[(4, 6)], seed, false, |t, v| t.sum_sq(v[0]));
            check(&[(4, 6)], seed, false, |t, v| t.l2_norm(v[0]));
            check(&[(4, 6)], seed, false, |t, v| t.normalize_rows(v[0]));
            check(&[(4, 6)], seed, false, |t, v| t.cross_entropy_rows(v[0], &[0, 5, 2, 2]));
        }
    }

    #[test]
    fn conv_grads() {
        for seed in 0..3 {
            for (k, d) in [(3, 1), (5, 2), (9, 4), (1, 1)] {
                check(&[(8, 3), (k * 3, 2)], seed, false, move |t, v| t.conv1d(v[0], v[1], k, d));
            }
        }
    }

    #[test]
    fn signal_loss_grads() {
        let mask = Rc::new((0..8).map(|k| (k as f64 * 0.7).sin().abs()).collect::<Vec<f64>>());
        for seed in 0..3 {
            let m = mask.clone();
            check(&[(8, 4)], seed, false, move |t, v| t.column_mask(v[0], m.clone()));
            check(&[(8, 4)], seed, false, |t, v| t.pairwise_col_dist(v[0]));
            check(&[(8, 4)], seed, false, |t, v| t.dft_norm(v[0]));
            check(&[(8, 3)], seed, false, |t, v| t.axis_unit(v[0]));
        }
    }

    #[test]
    fn conv_matches_direct_sum() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let (n, cin, cout, k, d) = (10, 2, 3, 5, 2);
        let x = randv(&mut rng, n * cin, 1.0);
        let w = randv(&mut rng, k * cin * cout, 1.0);
        let mut t = Tape::new();
        let xv = t.leaf(n, cin, x.clone());
        let wv = t.leaf(k * cin, cout, w.clone());
        let y = t.conv1d(xv, wv, k, d);
        for tt in 0..n {
            for o in 0..cout {
                let mut s = 0.0;
                for kk in 0..k {
                    let src = tt as isize + (kk as isize - 2) * d as isize;
                    if src < 0 || src >= n as isize {
                        continue;
                    }
                    for i in 0..cin {
                        s += x[src as usize * cin + i] * w[(kk * cin + i) * cout + o];
                    }
                }
                assert!((t.value(y)[tt * cout + o] - s).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn shared_leaf_accumulates() {
        let mut t = Tape::new();
        let x = t.leaf(1, 1, vec![3.0]);
        let y = t.mul(x, x);
        let z = t.add(y, x);
        let g = t.backward(z);
        assert_eq!(g.get(x).unwrap()[0], 7.0);
    }
}
