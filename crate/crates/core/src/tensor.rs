//! Dense row-major matrices and a reverse-mode gradient tape.
//!
//! Every model in the crate records its forward pass on a [`Tape`], calls
//! [`Tape::backward`] on a scalar loss and reads parameter gradients back.
//! Values are `f64`; checkpoints narrow to `f32`.

use rand::Rng;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Self {
        assert_eq!(
            shape.iter().product::<usize>(),
            data.len(),
            "shape {shape:?} does not match {} values",
            data.len()
        );
        Tensor { shape, data }
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Tensor::new(vec![rows, cols], vec![0.0; rows * cols])
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Self {
        let cols = rows.first().map_or(0, Vec::len);
        assert!(rows.iter().all(|r| r.len() == cols), "ragged rows");
        Tensor::new(vec![rows.len(), cols], rows.concat())
    }

    pub fn row_vector(values: Vec<f64>) -> Self {
        Tensor::new(vec![1, values.len()], values)
    }

    pub fn scalar(value: f64) -> Self {
        Tensor::new(vec![1, 1], vec![value])
    }

    pub fn identity(n: usize) -> Self {
        let mut t = Tensor::zeros(n, n);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    /// Uniform in ±sqrt(6 / (fan_in + fan_out)).
    pub fn glorot<R: Rng>(rows: usize, cols: usize, rng: &mut R) -> Self {
        let bound = (6.0 / (rows + cols) as f64).sqrt();
        let data = (0..rows * cols).map(|_| rng.gen_range(-bound..bound)).collect();
        Tensor::new(vec![rows, cols], data)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rows(&self) -> usize {
        self.shape[0]
    }

    pub fn cols(&self) -> usize {
        self.shape[1]
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn row(&self, r: usize) -> &[f64] {
        let c = self.cols();
        &self.data[r * c..(r + 1) * c]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        let c = self.cols();
        &mut self.data[r * c..(r + 1) * c]
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols() + c]
    }

    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        let cols = self.cols();
        self.data[r * cols + c] = v;
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn item(&self) -> f64 {
        assert_eq!(self.data.len(), 1, "item() on non-scalar tensor");
        self.data[0]
    }

    fn add_assign(&mut self, other: &Tensor) {
        debug_assert_eq!(self.shape, other.shape);
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    /// `self · other`; zero entries of `self` are skipped, which matters for
    /// the sparse pianoroll inputs.
    pub fn matmul(&self, other: &Tensor) -> Tensor {
        let (n, k) = (self.rows(), self.cols());
        assert_eq!(
            k,
            other.rows(),
            "matmul shape mismatch {:?} x {:?}",
            self.shape,
            other.shape
        );
        let m = other.cols();
        let mut out = vec![0.0; n * m];
        for i in 0..n {
            let out_row = &mut out[i * m..(i + 1) * m];
            for (kk, &a) in self.data[i * k..(i + 1) * k].iter().enumerate() {
                if a == 0.0 {
                    continue;
                }
                let b_row = &other.data[kk * m..(kk + 1) * m];
                for (o, &b) in out_row.iter_mut().zip(b_row) {
                    *o += a * b;
                }
            }
        }
        Tensor::new(vec![n, m], out)
    }

    /// `self · otherᵀ`.
    fn matmul_transposed(&self, other: &Tensor) -> Tensor {
        let (n, k) = (self.rows(), self.cols());
        assert_eq!(k, other.cols());
        let m = other.rows();
        let mut out = vec![0.0; n * m];
        for i in 0..n {
            let a_row = &self.data[i * k..(i + 1) * k];
            for j in 0..m {
                let b_row = &other.data[j * k..(j + 1) * k];
                out[i * m + j] = a_row.iter().zip(b_row).map(|(a, b)| a * b).sum();
            }
        }
        Tensor::new(vec![n, m], out)
    }

    /// `selfᵀ · other`, skipping zero entries of `self`.
    fn transposed_matmul(&self, other: &Tensor) -> Tensor {
        let (n, k) = (self.rows(), self.cols());
        assert_eq!(n, other.rows());
        let m = other.cols();
        let mut out = vec![0.0; k * m];
        for i in 0..n {
            let g_row = &other.data[i * m..(i + 1) * m];
            for (kk, &a) in self.data[i * k..(i + 1) * k].iter().enumerate() {
                if a == 0.0 {
                    continue;
                }
                let out_row = &mut out[kk * m..(kk + 1) * m];
                for (o, &g) in out_row.iter_mut().zip(g_row) {
                    *o += a * g;
                }
            }
        }
        Tensor::new(vec![k, m], out)
    }
}

/// Fixed sparse row-mixing matrix: output row `i` is
/// `Σ weight · input[col]` over `rows[i]`.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct SparseRows {
    pub input_rows: usize,
    pub rows: Vec<Vec<(usize, f64)>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    LeakyRelu(Var, f64),
    Scale(Var, f64),
    Mix(Var, SparseRows),
    Gather(Var, Vec<usize>),
    ConcatCols(Var, Var),
    MeanRows(Var),
    MaskRows(Var, Vec<bool>),
    SquaredError {
        input: Var,
        target: Tensor,
        scale: f64,
    },
    SoftmaxCrossEntropy {
        logits: Var,
        target: usize,
    },
    Mmd {
        latents: Var,
        prior: Tensor,
        bandwidth: f64,
    },
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Records operations for one forward pass.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, var: Var) -> Option<&Tensor> {
        self.grads.get(var.0).and_then(Option::as_ref)
    }

    /// Gradient of `var`, zeros when the loss did not depend on it.
    pub fn take_or_zeros(&mut self, var: Var, like: &Tensor) -> Tensor {
        self.grads[var.0]
            .take()
            .unwrap_or_else(|| Tensor::new(like.shape.clone(), vec![0.0; like.len()]))
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// Consumes the tape, returning the values of the given variables.
    pub fn into_values(self, vars: &[Var]) -> Vec<Tensor> {
        let mut slots: Vec<Option<Tensor>> = self.nodes.into_iter().map(|n| Some(n.value)).collect();
        vars.iter()
            .map(|v| slots[v.0].take().expect("variable taken twice"))
            .collect()
    }

    /// A trainable leaf.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).matmul(self.value(b));
        let rg = self.rg(a) || self.rg(b);
        self.push(value, Op::MatMul(a, b), rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let mut value = self.value(a).clone();
        assert_eq!(value.shape, self.value(b).shape, "add shape mismatch");
        value.add_assign(self.value(b));
        let rg = self.rg(a) || self.rg(b);
        self.push(value, Op::Add(a, b), rg)
    }

    /// Adds a `[1, m]` row to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let mut value = self.value(a).clone();
        let bias = self.value(row);
        assert_eq!(bias.shape, vec![1, value.cols()], "bias shape mismatch");
        for r in 0..value.rows() {
            for (v, b) in value.row_mut(r).iter_mut().zip(&bias.data) {
                *v += b;
            }
        }
        let rg = self.rg(a) || self.rg(row);
        self.push(value, Op::AddRow(a, row), rg)
    }

    /// `x·W + b` for `x: [n, d_in]`, `W: [d_in, d_out]`, `b: [1, d_out]`.
    pub fn affine(&mut self, x: Var, w: Var, b: Var) -> Var {
        let xw = self.matmul(x, w);
        self.add_row(xw, b)
    }

    pub fn leaky_relu(&mut self, a: Var, slope: f64) -> Var {
        let mut value = self.value(a).clone();
        for v in &mut value.data {
            if *v < 0.0 {
                *v *= slope;
            }
        }
        let rg = self.rg(a);
        self.push(value, Op::LeakyRelu(a, slope), rg)
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Var {
        let mut value = self.value(a).clone();
        value.data.iter_mut().for_each(|v| *v *= factor);
        let rg = self.rg(a);
        self.push(value, Op::Scale(a, factor), rg)
    }

    pub fn mix(&mut self, a: Var, mix: SparseRows) -> Var {
        let input = self.value(a);
        assert_eq!(mix.input_rows, input.rows(), "mix input rows mismatch");
        let cols = input.cols();
        let mut value = Tensor::zeros(mix.rows.len(), cols);
        for (i, entries) in mix.rows.iter().enumerate() {
            for &(j, w) in entries {
                let src = &input.data[j * cols..(j + 1) * cols];
                for (o, s) in value.row_mut(i).iter_mut().zip(src) {
                    *o += w * s;
                }
            }
        }
        let rg = self.rg(a);
        self.push(value, Op::Mix(a, mix), rg)
    }

    pub fn gather_rows(&mut self, a: Var, index: Vec<usize>) -> Var {
        let input = self.value(a);
        let cols = input.cols();
        let mut data = Vec::with_capacity(index.len() * cols);
        for &i in &index {
            data.extend_from_slice(input.row(i));
        }
        let value = Tensor::new(vec![index.len(), cols], data);
        let rg = self.rg(a);
        self.push(value, Op::Gather(a, index), rg)
    }

    pub fn concat_cols(&mut self, a: Var, b: Var) -> Var {
        let (x, y) = (self.value(a), self.value(b));
        assert_eq!(x.rows(), y.rows(), "concat row mismatch");
        let mut data = Vec::with_capacity(x.len() + y.len());
        for r in 0..x.rows() {
            data.extend_from_slice(x.row(r));
            data.extend_from_slice(y.row(r));
        }
        let value = Tensor::new(vec![x.rows(), x.cols() + y.cols()], data);
        let rg = self.rg(a) || self.rg(b);
        self.push(value, Op::ConcatCols(a, b), rg)
    }

    pub fn mean_rows(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let n = x.rows().max(1) as f64;
        let mut out = vec![0.0; x.cols()];
        for r in 0..x.rows() {
            for (o, v) in out.iter_mut().zip(x.row(r)) {
                *o += v / n;
            }
        }
        let value = Tensor::row_vector(out);
        let rg = self.rg(a);
        self.push(value, Op::MeanRows(a), rg)
    }

    /// Zeroes the rows where `keep` is false.
    pub fn mask_rows(&mut self, a: Var, keep: Vec<bool>) -> Var {
        let mut value = self.value(a).clone();
        assert_eq!(keep.len(), value.rows());
        for (r, &k) in keep.iter().enumerate() {
            if !k {
                value.row_mut(r).iter_mut().for_each(|v| *v = 0.0);
            }
        }
        let rg = self.rg(a);
        self.push(value, Op::MaskRows(a, keep), rg)
    }

    /// `scale · Σ (a − target)²` as a `[1, 1]` scalar.
    pub fn squared_error(&mut self, a: Var, target: Tensor, scale: f64) -> Var {
        let x = self.value(a);
        assert_eq!(x.shape, target.shape, "squared_error shape mismatch");
        let sum: f64 = x.data.iter().zip(&target.data).map(|(p, t)| (p - t).powi(2)).sum();
        let rg = self.rg(a);
        self.push(
            Tensor::scalar(scale * sum),
            Op::SquaredError {
                input: a,
                target,
                scale,
            },
            rg,
        )
    }

    /// Mean squared error over every element.
    pub fn mse(&mut self, a: Var, target: Tensor) -> Var {
        let n = target.len().max(1) as f64;
        self.squared_error(a, target, 1.0 / n)
    }

    /// Cross-entropy of `softmax(logits)` against class `target`; `logits` is `[1, C]`.
    pub fn softmax_cross_entropy(&mut self, logits: Var, target: usize) -> Var {
        let x = self.value(logits);
        assert_eq!(x.rows(), 1, "logits must be a single row");
        let max = x.data.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let log_sum = x.data.iter().map(|v| (v - max).exp()).sum::<f64>().ln() + max;
        let value = Tensor::scalar(log_sum - x.data[target]);
        let rg = self.rg(logits);
        self.push(value, Op::SoftmaxCrossEntropy { logits, target }, rg)
    }

    /// Unbiased squared MMD between the rows of `latents` and the constant
    /// `prior` samples under `k(x, y) = exp(−‖x − y‖² / bandwidth)`.
    pub fn mmd(&mut self, latents: Var, prior: Tensor, bandwidth: f64) -> Var {
        let z = self.value(latents);
        let value = Tensor::scalar(mmd_value(z, &prior, bandwidth));
        let rg = self.rg(latents);
        self.push(
            value,
            Op::Mmd {
                latents,
                prior,
                bandwidth,
            },
            rg,
        )
    }

    /// Reverse pass from a `[1, 1]` output.
    pub fn backward(&self, output: Var) -> Gradients {
        assert_eq!(self.value(output).len(), 1, "backward needs a scalar output");
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[output.0] = Some(Tensor::scalar(1.0));

        for idx in (0..=output.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            let send = |v: Var, delta: Tensor, grads: &mut Vec<Option<Tensor>>| {
                if !self.nodes[v.0].requires_grad {
                    return;
                }
                match &mut grads[v.0] {
                    Some(acc) => acc.add_assign(&delta),
                    slot => *slot = Some(delta),
                }
            };
            match &node.op {
                Op::Leaf => {
                    grads[idx] = Some(g);
                    continue;
                }
                Op::MatMul(a, b) => {
                    if self.rg(*a) {
                        send(*a, g.matmul_transposed(self.value(*b)), &mut grads);
                    }
                    if self.rg(*b) {
                        send(*b, self.value(*a).transposed_matmul(&g), &mut grads);
                    }
                }
                Op::Add(a, b) => {
                    send(*b, g.clone(), &mut grads);
                    send(*a, g, &mut grads);
                }
                Op::AddRow(a, row) => {
                    if self.rg(*row) {
                        let mut sum = vec![0.0; g.cols()];
                        for r in 0..g.rows() {
                            for (s, v) in sum.iter_mut().zip(g.row(r)) {
                                *s += v;
                            }
                        }
                        send(*row, Tensor::row_vector(sum), &mut grads);
                    }
                    send(*a, g, &mut grads);
                }
                Op::LeakyRelu(a, slope) => {
                    let x = self.value(*a);
                    let mut d = g;
                    for (dv, xv) in d.data.iter_mut().zip(&x.data) {
                        if *xv < 0.0 {
                            *dv *= slope;
                        }
                    }
                    send(*a, d, &mut grads);
                }
                Op::Scale(a, factor) => {
                    let mut d = g;
                    d.data.iter_mut().for_each(|v| *v *= factor);
                    send(*a, d, &mut grads);
                }
                Op::Mix(a, mix) => {
                    let cols = g.cols();
                    let mut d = Tensor::zeros(mix.input_rows, cols);
                    for (i, entries) in mix.rows.iter().enumerate() {
                        for &(j, w) in entries {
                            for c in 0..cols {
                                d.data[j * cols + c] += w * g.data[i * cols + c];
                            }
                        }
                    }
                    send(*a, d, &mut grads);
                }
                Op::Gather(a, index) => {
                    let src = self.value(*a);
                    let cols = src.cols();
                    let mut d = Tensor::zeros(src.rows(), cols);
                    for (out_row, &i) in index.iter().enumerate() {
                        for c in 0..cols {
                            d.data[i * cols + c] += g.data[out_row * cols + c];
                        }
                    }
                    send(*a, d, &mut grads);
                }
                Op::ConcatCols(a, b) => {
                    let ca = self.value(*a).cols();
                    let cb = self.value(*b).cols();
                    let rows = g.rows();
                    let mut da = Vec::with_capacity(rows * ca);
                    let mut db = Vec::with_capacity(rows * cb);
                    for r in 0..rows {
                        let row = g.row(r);
                        da.extend_from_slice(&row[..ca]);
                        db.extend_from_slice(&row[ca..]);
                    }
                    send(*a, Tensor::new(vec![rows, ca], da), &mut grads);
                    send(*b, Tensor::new(vec![rows, cb], db), &mut grads);
                }
                Op::MeanRows(a) => {
                    let rows = self.value(*a).rows();
                    let n = rows.max(1) as f64;
                    let mut d = Vec::with_capacity(rows * g.cols());
                    for _ in 0..rows {
                        d.extend(g.data.iter().map(|v| v / n));
                    }
                    send(*a, Tensor::new(vec![rows, g.cols()], d), &mut grads);
                }
                Op::MaskRows(a, keep) => {
                    let mut d = g;
                    for (r, &k) in keep.iter().enumerate() {
                        if !k {
                            d.row_mut(r).iter_mut().for_each(|v| *v = 0.0);
                        }
                    }
                    send(*a, d, &mut grads);
                }
                Op::SquaredError { input, target, scale } => {
                    let x = self.value(*input);
                    let k = 2.0 * scale * g.item();
                    let data = x.data.iter().zip(&target.data).map(|(p, t)| k * (p - t)).collect();
                    send(*input, Tensor::new(x.shape.clone(), data), &mut grads);
                }
                Op::SoftmaxCrossEntropy { logits, target } => {
                    let x = self.value(*logits);
                    let max = x.data.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                    let exps: Vec<f64> = x.data.iter().map(|v| (v - max).exp()).collect();
                    let sum: f64 = exps.iter().sum();
                    let gi = g.item();
                    let mut d: Vec<f64> = exps.iter().map(|e| gi * e / sum).collect();
                    d[*target] -= gi;
                    send(*logits, Tensor::new(x.shape.clone(), d), &mut grads);
                }
                Op::Mmd {
                    latents,
                    prior,
                    bandwidth,
                } => {
                    let z = self.value(*latents);
                    let mut d = mmd_grad(z, prior, *bandwidth);
                    let gi = g.item();
                    d.data.iter_mut().for_each(|v| *v *= gi);
                    send(*latents, d, &mut grads);
                }
            }
        }
        Gradients { grads }
    }
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum()
}

fn mmd_value(z: &Tensor, p: &Tensor, bw: f64) -> f64 {
    let n = z.rows();
    let m = p.rows();
    if n < 2 || m < 2 {
        return 0.0;
    }
    let k = |a: &[f64], b: &[f64]| (-sq_dist(a, b) / bw).exp();
    let mut zz = 0.0;
    let mut pp = 0.0;
    let mut zp = 0.0;
    for i in 0..n {
        for j in 0..n {
            if i != j {
                zz += k(z.row(i), z.row(j));
            }
        }
        for j in 0..m {
            zp += k(z.row(i), p.row(j));
        }
    }
    for i in 0..m {
        for j in 0..m {
            if i != j {
                pp += k(p.row(i), p.row(j));
            }
        }
    }
    zz / (n * (n - 1)) as f64 + pp / (m * (m - 1)) as f64 - 2.0 * zp / (n * m) as f64
}

fn mmd_grad(z: &Tensor, p: &Tensor, bw: f64) -> Tensor {
    let n = z.rows();
    let m = p.rows();
    let d = z.cols();
    let mut out = Tensor::zeros(n, d);
    if n < 2 || m < 2 {
        return out;
    }
    let zz_w = 1.0 / (n * (n - 1)) as f64;
    let zp_w = 2.0 / (n * m) as f64;
    for i in 0..n {
        let zi = z.row(i);
        let mut acc = vec![0.0; d];
        // d/dz_i exp(-|z_i - y|²/bw) = -2 (z_i - y)/bw · k
        for j in 0..n {
            if i == j {
                continue;
            }
            let zj = z.row(j);
            let k = (-sq_dist(zi, zj) / bw).exp();
            // pairs (i, j) and (j, i) both contribute
            for c in 0..d {
                acc[c] += 2.0 * zz_w * (-2.0 * (zi[c] - zj[c]) / bw) * k;
            }
        }
        for j in 0..m {
            let pj = p.row(j);
            let k = (-sq_dist(zi, pj) / bw).exp();
            for c in 0..d {
                acc[c] -= zp_w * (-2.0 * (zi[c] - pj[c]) / bw) * k;
            }
        }
        out.row_mut(i).copy_from_slice(&acc);
    }
    out
}

/// SGD with classical momentum: `v ← μ·v + g`, `θ ← θ − lr·v`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sgd {
    pub lr: f64,
    pub momentum: f64,
    velocity: Vec<Tensor>,
}

impl Sgd {
    pub fn new(lr: f64, momentum: f64) -> Self {
        Sgd {
            lr,
            momentum,
            velocity: Vec::new(),
        }
    }

    pub fn step(&mut self, params: &mut [Tensor], grads: &[Tensor]) {
        assert_eq!(params.len(), grads.len());
        if self.velocity.is_empty() {
            self.velocity = params
                .iter()
                .map(|p| Tensor::new(p.shape.clone(), vec![0.0; p.len()]))
                .collect();
        }
        for ((p, g), v) in params.iter_mut().zip(grads).zip(&mut self.velocity) {
            for ((pv, gv), vv) in p.data.iter_mut().zip(&g.data).zip(&mut v.data) {
                *vv = self.momentum * *vv + gv;
                *pv -= self.lr * *vv;
            }
        }
    }
}


#[cfg(test)]
mod tests {
    use super::gradcheck::*;
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Tensor {
        Tensor::new(
            vec![rows, cols],
            (0..rows * cols).map(|_| rng.gen_range(-1.0..1.0)).collect(),
        )
    }

    #[test]
    fn matmul_small() {
        let a = Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]);
        let b = Tensor::from_rows(&[vec![5.0], vec![6.0]]);
        assert_eq!(a.matmul(&b).data(), &[17.0, 39.0]);
    }

    #[test]
    fn softmax_cross_entropy_value() {
        let mut tape = Tape::new();
        let l = tape.param(Tensor::row_vector(vec![1.0, 2.0, 3.0]));
        let ce = tape.softmax_cross_entropy(l, 2);
        let expected = -(3f64.exp() / (1f64.exp() + 2f64.exp() + 3f64.exp())).ln();
        assert!((tape.value(ce).item() - expected).abs() < 1e-12);
    }

    /// Every op in one graph, checked against finite differences.
    #[test]
    fn composite_graph_gradients() {
        for seed in 0..5u64 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let params = vec![
                random(4, 3, &mut rng),
                random(3, 5, &mut rng),
                random(1, 5, &mut rng),
                random(6, 2, &mut rng),
                random(7, 4, &mut rng),
            ];
            let mix = SparseRows {
                input_rows: 4,
                rows: vec![
                    vec![(1, 0.5), (2, 0.5)],
                    vec![],
                    vec![(0, 1.0)],
                    vec![(3, 0.25), (0, 0.75)],
                ],
            };
            let target = random(2, 4, &mut rng);
            let prior = random(4, 3, &mut rng);
            let build = |p: &[Tensor], tape: &mut Tape| -> (Vec<Var>, Var) {
                let vars: Vec<Var> = p.iter().map(|t| tape.param(t.clone())).collect();
                let h = tape.affine(vars[0], vars[1], vars[2]);
                let h = tape.leaky_relu(h, 0.01);
                let m = tape.mix(h, mix.clone());
                let m = tape.mask_rows(m, vec![true, false, true, true]);
                let e = tape.gather_rows(vars[3], vec![0, 5, 5, 2]);
                let c = tape.concat_cols(m, e);
                let c = tape.scale(c, 0.7);
                let s = tape.add(c, c);
                let o = tape.matmul(s, vars[4]);
                let sel = tape.gather_rows(o, vec![1, 3]);
                let l1 = tape.mse(sel, target.clone());
                let mean = tape.mean_rows(o);
                let l2 = tape.softmax_cross_entropy(mean, 1);
                let mmd = tape.mmd(vars[0], prior.clone(), 3.0);
                let l = tape.add(l1, l2);
                let l = tape.add(l, mmd);
                (vars, l)
            };
            let mut tape = Tape::new();
            let (vars, loss) = build(&params, &mut tape);
            let mut grads = tape.backward(loss);
            let analytic: Vec<Tensor> = vars
                .iter()
                .zip(&params)
                .map(|(v, p)| grads.take_or_zeros(*v, p))
                .collect();
            let numeric = numeric_gradients(
                &params,
                |p| {
                    let mut t = Tape::new();
                    let (_, l) = build(p, &mut t);
                    t.value(l).item()
                },
                1e-5,
            );
            let err = max_relative_error(&analytic, &numeric);
            assert!(err < 1e-4, "seed {seed}: relative error {err}");
        }
    }

    #[test]
    fn mmd_grows_with_distribution_shift() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let z = random(8, 2, &mut rng);
        let mut shifted = z.clone();
        shifted.data_mut().iter_mut().for_each(|v| *v += 3.0);
        assert!(mmd_value(&z, &shifted, 2.0) > mmd_value(&z, &z, 2.0) + 0.1);
        assert_eq!(mmd_value(&random(1, 2, &mut rng), &z, 2.0), 0.0);
    }

    #[test]
    fn sgd_momentum_update() {
        let mut p = vec![Tensor::row_vector(vec![1.0])];
        let g = vec![Tensor::row_vector(vec![1.0])];
        let mut opt = Sgd::new(0.1, 0.9);
        opt.step(&mut p, &g);
        assert!((p[0].item() - 0.9).abs() < 1e-12);
        opt.step(&mut p, &g);
        // v = 0.9 + 1 = 1.9
        assert!((p[0].item() - (0.9 - 0.19)).abs() < 1e-12);
    }
}
