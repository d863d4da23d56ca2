//! Tape-based reverse-mode automatic differentiation.
//!
//! A [`Tape`] records every operation of one forward pass as a node holding
//! its output value. [`Tape::backward`] walks the nodes in reverse order and
//! accumulates vector-Jacobian products into a gradient buffer per node.
//!
//! Graph policy: a tape is built for a single forward pass and never reused
//! across optimizer steps. `backward` may be called more than once on the
//! same tape; each call discards the gradients of the previous call and
//! recomputes them from scratch. Leaves created with `requires_grad` receive
//! their gradient in [`Tensor::grad`] as well as through [`Tape::grad`].
//!
//! Nodes only propagate gradient if some input requires it, so constant
//! subgraphs (attention masks, frozen tables) cost nothing on the way back.

use crate::error::{Error, Result};
use crate::tensor::{
    dot, matmul_at_kernel, matmul_bt_kernel, matmul_kernel, transpose_kernel, Tensor, MASKED,
};

/// Layer-norm variance epsilon.
pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Handle to a node on a [`Tape`].
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
    /// `a · bᵀ`
    MatMulBt(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Mul(Var, Var),
    /// Adds a single row to every row of a matrix.
    AddRow(Var, Var),
    Scale(Var, f64),
    Gather {
        table: Var,
        ids: Vec<usize>,
    },
    SliceRows {
        src: Var,
        start: usize,
    },
    SliceCols {
        src: Var,
        start: usize,
    },
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    SoftmaxMasked(Var),
    LayerNorm {
        src: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Gelu(Var),
    CrossEntropy {
        logits: Var,
        /// `(row, target)` for every counted position.
        counted: Vec<(usize, usize)>,
        probs: Vec<f64>,
    },
    L2NormalizeRows {
        src: Var,
        norms: Vec<f64>,
    },
    Sum(Var),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Result of a cross-entropy reduction.
#[derive(Debug, Clone, Copy)]
pub struct CrossEntropy {
    pub loss: Var,
    /// Number of positions that contributed to the mean.
    pub counted: usize,
}

impl CrossEntropy {
    /// Set when every position was ignored and the loss is a constant 0.
    pub fn all_ignored(&self) -> bool {
        self.counted == 0
    }
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
}

fn gelu_parts(x: f64) -> (f64, f64) {
    const C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
    const A: f64 = 0.044_715;
    let u = C * (x + A * x * x * x);
    let t = u.tanh();
    let y = 0.5 * x * (1.0 + t);
    let dy = 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * C * (1.0 + 3.0 * A * x * x);
    (y, dy)
}

/// GELU, tanh approximation.
pub fn gelu(x: f64) -> f64 {
    gelu_parts(x).0
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

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Records a leaf. Gradient is tracked iff `tensor.requires_grad()`.
    pub fn leaf(&mut self, tensor: Tensor) -> Var {
        let needs = tensor.requires_grad();
        self.push(tensor, Op::Leaf, needs)
    }

    /// Records an untracked leaf.
    pub fn constant(&mut self, mut tensor: Tensor) -> Var {
        tensor.set_requires_grad(false);
        self.push(tensor, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// Gradient of the last `backward` call with respect to `v`.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Takes the leaf tensor back out of the tape (with its gradient).
    pub fn take_leaf(&mut self, v: Var) -> Tensor {
        std::mem::replace(&mut self.nodes[v.0].value, Tensor::scalar(0.0))
    }

    fn shape2(&self, v: Var) -> (usize, usize) {
        let t = self.value(v);
        (t.rows(), t.cols())
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.shape2(a);
        let (k2, n) = self.shape2(b);
        if k != k2 {
            return Err(Error::Shape(format!(
                "matmul of {:?} and {:?}",
                self.value(a).shape(),
                self.value(b).shape()
            )));
        }
        let mut out = vec![0.0; m * n];
        matmul_kernel(self.value(a).data(), self.value(b).data(), &mut out, m, k, n);
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(Tensor::matrix(m, n, out)?, Op::MatMul(a, b), needs))
    }

    /// `a · bᵀ` without materialising the transpose.
    pub fn matmul_bt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.shape2(a);
        let (n, k2) = self.shape2(b);
        if k != k2 {
            return Err(Error::Shape(format!(
                "matmul of {:?} and transpose of {:?}",
                self.value(a).shape(),
                self.value(b).shape()
            )));
        }
        let mut out = vec![0.0; m * n];
        matmul_bt_kernel(self.value(a).data(), self.value(b).data(), &mut out, m, k, n);
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(Tensor::matrix(m, n, out)?, Op::MatMulBt(a, b), needs))
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let t = self.value(a).transpose();
        let needs = self.needs(a);
        self.push(t, Op::Transpose(a), needs)
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(Error::Shape(format!(
                "{what} of {:?} and {:?}",
                self.value(a).shape(),
                self.value(b).shape()
            )));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x + y)
            .collect();
        let t = Tensor::new(self.value(a).shape().to_vec(), data)?;
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(t, Op::Add(a, b), needs))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "elementwise product")?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x * y)
            .collect();
        let t = Tensor::new(self.value(a).shape().to_vec(), data)?;
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(t, Op::Mul(a, b), needs))
    }

    /// `x[m×n] + row[n]` broadcast over rows. Used for biases and for adding
    /// the sentence embedding to every position of the query stream.
    pub fn add_row(&mut self, x: Var, row: Var) -> Result<Var> {
        let (m, n) = self.shape2(x);
        if self.value(row).len() != n {
            return Err(Error::Shape(format!(
                "row broadcast of {:?} onto {:?}",
                self.value(row).shape(),
                self.value(x).shape()
            )));
        }
        let r = self.value(row).data();
        let mut data = self.value(x).data().to_vec();
        for chunk in data.chunks_mut(n) {
            for (d, rv) in chunk.iter_mut().zip(r) {
                *d += rv;
            }
        }
        let t = Tensor::matrix(m, n, data)?;
        let needs = self.needs(x) || self.needs(row);
        Ok(self.push(t, Op::AddRow(x, row), needs))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let src = self.value(a);
        let data = src.data().iter().map(|x| x * c).collect();
        let t = Tensor::new(src.shape().to_vec(), data).expect("same shape");
        let needs = self.needs(a);
        self.push(t, Op::Scale(a, c), needs)
    }

    /// Embedding lookup: rows `ids` of `table`.
    pub fn gather(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let (rows, d) = self.shape2(table);
        if ids.is_empty() {
            return Err(Error::Shape("gather of zero rows".into()));
        }
        let mut data = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id >= rows {
                return Err(Error::Index(format!(
                    "row {id} out of range for table with {rows} rows"
                )));
            }
            data.extend_from_slice(self.value(table).row(id));
        }
        let t = Tensor::matrix(ids.len(), d, data)?;
        let needs = self.needs(table);
        Ok(self.push(
            t,
            Op::Gather {
                table,
                ids: ids.to_vec(),
            },
            needs,
        ))
    }

    pub fn slice_rows(&mut self, src: Var, start: usize, len: usize) -> Result<Var> {
        let (m, n) = self.shape2(src);
        if len == 0 || start + len > m {
            return Err(Error::Shape(format!(
                "row slice {start}..{} of a {m}-row matrix",
                start + len
            )));
        }
        let data = self.value(src).data()[start * n..(start + len) * n].to_vec();
        let t = Tensor::matrix(len, n, data)?;
        let needs = self.needs(src);
        Ok(self.push(t, Op::SliceRows { src, start }, needs))
    }

    pub fn slice_cols(&mut self, src: Var, start: usize, width: usize) -> Result<Var> {
        let (m, n) = self.shape2(src);
        if width == 0 || start + width > n {
            return Err(Error::Shape(format!(
                "column slice {start}..{} of a {n}-column matrix",
                start + width
            )));
        }
        let s = self.value(src);
        let mut data = Vec::with_capacity(m * width);
        for r in 0..m {
            data.extend_from_slice(&s.row(r)[start..start + width]);
        }
        let t = Tensor::matrix(m, width, data)?;
        let needs = self.needs(src);
        Ok(self.push(t, Op::SliceCols { src, start }, needs))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let n = parts
            .first()
            .map(|&p| self.value(p).cols())
            .ok_or_else(|| Error::Shape("concat of zero parts".into()))?;
        let mut data = Vec::new();
        let mut m = 0;
        for &p in parts {
            let t = self.value(p);
            if t.cols() != n {
                return Err(Error::Shape(format!(
                    "row concat of widths {n} and {}",
                    t.cols()
                )));
            }
            m += t.rows();
            data.extend_from_slice(t.data());
        }
        let t = Tensor::matrix(m, n, data)?;
        let needs = parts.iter().any(|&p| self.needs(p));
        Ok(self.push(t, Op::ConcatRows(parts.to_vec()), needs))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let m = parts
            .first()
            .map(|&p| self.value(p).rows())
            .ok_or_else(|| Error::Shape("concat of zero parts".into()))?;
        if parts.iter().any(|&p| self.value(p).rows() != m) {
            return Err(Error::Shape("column concat of mismatched heights".into()));
        }
        let width: usize = parts.iter().map(|&p| self.value(p).cols()).sum();
        let mut data = Vec::with_capacity(m * width);
        for r in 0..m {
            for &p in parts {
                data.extend_from_slice(self.value(p).row(r));
            }
        }
        let t = Tensor::matrix(m, width, data)?;
        let needs = parts.iter().any(|&p| self.needs(p));
        Ok(self.push(t, Op::ConcatCols(parts.to_vec()), needs))
    }

    /// Row-wise softmax of `scores + mask`.
    ///
    /// `mask` entries are 0 for visible positions and [`MASKED`] (or lower,
    /// including −∞) for hidden ones. Hidden positions get weight exactly 0.
    /// A row with no visible entry is an error rather than a NaN row.
    pub fn softmax_masked(&mut self, scores: Var, mask: &Tensor) -> Result<Var> {
        let (m, n) = self.shape2(scores);
        if mask.rows() != m || mask.cols() != n {
            return Err(Error::Shape(format!(
                "mask {:?} for scores {:?}",
                mask.shape(),
                self.value(scores).shape()
            )));
        }
        let s = self.value(scores).data();
        let mut out = vec![0.0; m * n];
        for r in 0..m {
            let srow = &s[r * n..(r + 1) * n];
            let mrow = mask.row(r);
            let orow = &mut out[r * n..(r + 1) * n];
            let mut max = f64::NEG_INFINITY;
            for (x, &mk) in srow.iter().zip(mrow) {
                if mk > MASKED {
                    max = max.max(x + mk);
                }
            }
            if max == f64::NEG_INFINITY {
                return Err(Error::DegenerateRow { row: r });
            }
            let mut total = 0.0;
            for ((o, x), &mk) in orow.iter_mut().zip(srow).zip(mrow) {
                if mk > MASKED {
                    *o = (x + mk - max).exp();
                    total += *o;
                }
            }
            for o in orow.iter_mut() {
                *o /= total;
            }
        }
        let t = Tensor::matrix(m, n, out)?;
        let needs = self.needs(scores);
        Ok(self.push(t, Op::SoftmaxMasked(scores), needs))
    }

    /// Row-wise layer normalisation with affine `gamma`, `beta` of width n.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let (m, n) = self.shape2(x);
        if self.value(gamma).len() != n || self.value(beta).len() != n {
            return Err(Error::Shape(format!(
                "layer norm of width {n} with gamma {:?} and beta {:?}",
                self.value(gamma).shape(),
                self.value(beta).shape()
            )));
        }
        let xs = self.value(x).data();
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        let mut xhat = vec![0.0; m * n];
        let mut inv_std = vec![0.0; m];
        let mut out = vec![0.0; m * n];
        for r in 0..m {
            let row = &xs[r * n..(r + 1) * n];
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
            let is = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            inv_std[r] = is;
            for c in 0..n {
                let h = (row[c] - mean) * is;
                xhat[r * n + c] = h;
                out[r * n + c] = h * g[c] + b[c];
            }
        }
        let t = Tensor::matrix(m, n, out)?;
        let needs = self.needs(x) || self.needs(gamma) || self.needs(beta);
        Ok(self.push(
            t,
            Op::LayerNorm {
                src: x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
            needs,
        ))
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        let src = self.value(x);
        let data = src.data().iter().map(|&v| gelu_parts(v).0).collect();
        let t = Tensor::new(src.shape().to_vec(), data).expect("same shape");
        let needs = self.needs(x);
        self.push(t, Op::Gelu(x), needs)
    }

    /// Mean negative log-softmax probability of `targets` over the rows of
    /// `logits`, skipping rows whose target equals `ignore`.
    ///
    /// With every row ignored the loss is a constant 0 and
    /// [`CrossEntropy::all_ignored`] is set.
    pub fn cross_entropy(
        &mut self,
        logits: Var,
        targets: &[usize],
        ignore: usize,
    ) -> Result<CrossEntropy> {
        let (t_rows, v) = self.shape2(logits);
        if targets.len() != t_rows {
            return Err(Error::Shape(format!(
                "{} targets for {t_rows} logit rows",
                targets.len()
            )));
        }
        let l = self.value(logits).data();
        let mut counted = Vec::new();
        let mut probs = Vec::new();
        let mut total = 0.0;
        for (r, &tgt) in targets.iter().enumerate() {
            if tgt == ignore {
                continue;
            }
            if tgt >= v {
                return Err(Error::Index(format!(
                    "target {tgt} at row {r} out of range for {v} classes"
                )));
            }
            let row = &l[r * v..(r + 1) * v];
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let sum: f64 = row.iter().map(|x| (x - max).exp()).sum();
            let lse = max + sum.ln();
            total += lse - row[tgt];
            probs.extend(row.iter().map(|x| (x - lse).exp()));
            counted.push((r, tgt));
        }
        let n = counted.len();
        let loss = if n == 0 { 0.0 } else { total / n as f64 };
        let needs = n > 0 && self.needs(logits);
        let var = self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits,
                counted,
                probs,
            },
            needs,
        );
        Ok(CrossEntropy {
            loss: var,
            counted: n,
        })
    }

    /// Scales every row to unit L2 norm.
    pub fn l2_normalize_rows(&mut self, x: Var) -> Result<Var> {
        let (m, n) = self.shape2(x);
        let src = self.value(x);
        let mut norms = Vec::with_capacity(m);
        let mut data = Vec::with_capacity(m * n);
        for r in 0..m {
            let row = src.row(r);
            let norm = dot(row, row).sqrt();
            if norm == 0.0 || !norm.is_finite() {
                return Err(Error::DegenerateInput(format!(
                    "row {r} has norm {norm} and cannot be normalised"
                )));
            }
            norms.push(norm);
            data.extend(row.iter().map(|v| v / norm));
        }
        let t = Tensor::matrix(m, n, data)?;
        let needs = self.needs(x);
        Ok(self.push(t, Op::L2NormalizeRows { src: x, norms }, needs))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().sum();
        let needs = self.needs(x);
        self.push(Tensor::scalar(s), Op::Sum(x), needs)
    }

    /// Back-propagates from a scalar loss.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if !self.value(loss).is_scalar() {
            return Err(Error::Shape(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        self.backward_seeded(&[(loss, vec![1.0])])
    }

    /// Back-propagates from several outputs at once, each seeded with an
    /// upstream gradient of its own shape. This lets a loss that couples
    /// separately built graphs (in-batch contrastive terms) push its
    /// gradient into each graph.
    pub fn backward_seeded(&mut self, seeds: &[(Var, Vec<f64>)]) -> Result<()> {
        let n = self.nodes.len();
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; n];
        let mut last = 0;
        for (v, g) in seeds {
            if g.len() != self.value(*v).len() {
                return Err(Error::Shape(format!(
                    "seed of length {} for node of {} elements",
                    g.len(),
                    self.value(*v).len()
                )));
            }
            accumulate(&mut grads[v.0], g);
            last = last.max(v.0);
        }
        for i in (0..=last).rev() {
            if !self.nodes[i].needs_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        for (node, g) in self.nodes.iter_mut().zip(&grads) {
            if matches!(node.op, Op::Leaf) && node.value.requires_grad() {
                let g = g.clone().unwrap_or_else(|| vec![0.0; node.value.len()]);
                node.value.set_grad(Some(g))?;
            }
        }
        self.grads = grads;
        Ok(())
    }

    fn propagate(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[i];
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = self.shape2(*a);
                let n = self.value(*b).cols();
                if self.needs(*a) {
                    let mut ga = vec![0.0; m * k];
                    matmul_bt_kernel(g, self.value(*b).data(), &mut ga, m, n, k);
                    accumulate(&mut grads[a.0], &ga);
                }
                if self.needs(*b) {
                    let mut gb = vec![0.0; k * n];
                    matmul_at_kernel(self.value(*a).data(), g, &mut gb, m, k, n);
                    accumulate(&mut grads[b.0], &gb);
                }
            }
            Op::MatMulBt(a, b) => {
                // out[m×n] = a[m×k] · b[n×k]ᵀ
                let (m, k) = self.shape2(*a);
                let n = self.value(*b).rows();
                if self.needs(*a) {
                    let mut ga = vec![0.0; m * k];
                    matmul_kernel(g, self.value(*b).data(), &mut ga, m, n, k);
                    accumulate(&mut grads[a.0], &ga);
                }
                if self.needs(*b) {
                    let mut gb = vec![0.0; n * k];
                    matmul_at_kernel(g, self.value(*a).data(), &mut gb, m, n, k);
                    accumulate(&mut grads[b.0], &gb);
                }
            }
            Op::Transpose(a) => {
                let (r, c) = self.shape2(*a);
                let mut ga = vec![0.0; r * c];
                transpose_kernel(g, &mut ga, c, r);
                accumulate(&mut grads[a.0], &ga);
            }
            Op::Add(a, b) => {
                if self.needs(*a) {
                    accumulate(&mut grads[a.0], g);
                }
                if self.needs(*b) {
                    accumulate(&mut grads[b.0], g);
                }
            }
            Op::Mul(a, b) => {
                if self.needs(*a) {
                    let ga: Vec<f64> = g
                        .iter()
                        .zip(self.value(*b).data())
                        .map(|(x, y)| x * y)
                        .collect();
                    accumulate(&mut grads[a.0], &ga);
                }
                if self.needs(*b) {
                    let gb: Vec<f64> = g
                        .iter()
                        .zip(self.value(*a).data())
                        .map(|(x, y)| x * y)
                        .collect();
                    accumulate(&mut grads[b.0], &gb);
                }
            }
            Op::AddRow(x, row) => {
                if self.needs(*x) {
                    accumulate(&mut grads[x.0], g);
                }
                if self.needs(*row) {
                    let n = self.value(*row).len();
                    let mut gr = vec![0.0; n];
                    for chunk in g.chunks(n) {
                        for (a, b) in gr.iter_mut().zip(chunk) {
                            *a += b;
                        }
                    }
                    accumulate(&mut grads[row.0], &gr);
                }
            }
            Op::Scale(a, c) => {
                let ga: Vec<f64> = g.iter().map(|x| x * c).collect();
                accumulate(&mut grads[a.0], &ga);
            }
            Op::Gather { table, ids } => {
                let t = self.value(*table);
                let d = t.cols();
                let slot = grads[table.0].get_or_insert_with(|| vec![0.0; t.len()]);
                for (r, &id) in ids.iter().enumerate() {
                    for c in 0..d {
                        slot[id * d + c] += g[r * d + c];
                    }
                }
            }
            Op::SliceRows { src, start } => {
                let s = self.value(*src);
                let n = s.cols();
                let slot = grads[src.0].get_or_insert_with(|| vec![0.0; s.len()]);
                for (k, v) in g.iter().enumerate() {
                    slot[start * n + k] += v;
                }
            }
            Op::SliceCols { src, start } => {
                let s = self.value(*src);
                let n = s.cols();
                let w = node.value.cols();
                let slot = grads[src.0].get_or_insert_with(|| vec![0.0; s.len()]);
                for r in 0..s.rows() {
                    for c in 0..w {
                        slot[r * n + start + c] += g[r * w + c];
                    }
                }
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for p in parts {
                    let len = self.value(*p).len();
                    if self.needs(*p) {
                        accumulate(&mut grads[p.0], &g[offset..offset + len]);
                    }
                    offset += len;
                }
            }
            Op::ConcatCols(parts) => {
                let width = node.value.cols();
                let mut col = 0;
                for p in parts {
                    let t = self.value(*p);
                    let w = t.cols();
                    if self.needs(*p) {
                        let mut gp = Vec::with_capacity(t.len());
                        for r in 0..t.rows() {
                            gp.extend_from_slice(&g[r * width + col..r * width + col + w]);
                        }
                        accumulate(&mut grads[p.0], &gp);
                    }
                    col += w;
                }
            }
            Op::SoftmaxMasked(src) => {
                let y = &node.value;
                let n = y.cols();
                let mut gs = vec![0.0; y.len()];
                for r in 0..y.rows() {
                    let yr = y.row(r);
                    let gr = &g[r * n..(r + 1) * n];
                    let inner = dot(yr, gr);
                    for c in 0..n {
                        gs[r * n + c] = yr[c] * (gr[c] - inner);
                    }
                }
                accumulate(&mut grads[src.0], &gs);
            }
            Op::LayerNorm {
                src,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let (m, n) = self.shape2(*src);
                let gam = self.value(*gamma).data();
                if self.needs(*gamma) || self.needs(*beta) {
                    let mut gg = vec![0.0; n];
                    let mut gb = vec![0.0; n];
                    for r in 0..m {
                        for c in 0..n {
                            gg[c] += g[r * n + c] * xhat[r * n + c];
                            gb[c] += g[r * n + c];
                        }
                    }
                    if self.needs(*gamma) {
                        accumulate(&mut grads[gamma.0], &gg);
                    }
                    if self.needs(*beta) {
                        accumulate(&mut grads[beta.0], &gb);
                    }
                }
                if self.needs(*src) {
                    let nf = n as f64;
                    let mut gx = vec![0.0; m * n];
                    for r in 0..m {
                        let mut sum_d = 0.0;
                        let mut sum_dx = 0.0;
                        for c in 0..n {
                            let d = g[r * n + c] * gam[c];
                            sum_d += d;
                            sum_dx += d * xhat[r * n + c];
                        }
                        for c in 0..n {
                            let d = g[r * n + c] * gam[c];
                            gx[r * n + c] =
                                inv_std[r] / nf * (nf * d - sum_d - xhat[r * n + c] * sum_dx);
                        }
                    }
                    accumulate(&mut grads[src.0], &gx);
                }
            }
            Op::Gelu(x) => {
                let gx: Vec<f64> = g
                    .iter()
                    .zip(self.value(*x).data())
                    .map(|(gv, &xv)| gv * gelu_parts(xv).1)
                    .collect();
                accumulate(&mut grads[x.0], &gx);
            }
            Op::CrossEntropy {
                logits,
                counted,
                probs,
            } => {
                let t = self.value(*logits);
                let v = t.cols();
                let scale = g[0] / counted.len() as f64;
                let slot = grads[logits.0].get_or_insert_with(|| vec![0.0; t.len()]);
                for (k, &(r, tgt)) in counted.iter().enumerate() {
                    for c in 0..v {
                        let mut d = probs[k * v + c];
                        if c == tgt {
                            d -= 1.0;
                        }
                        slot[r * v + c] += scale * d;
                    }
                }
            }
            Op::L2NormalizeRows { src, norms } => {
                let y = &node.value;
                let n = y.cols();
                let mut gx = vec![0.0; y.len()];
                for r in 0..y.rows() {
                    let yr = y.row(r);
                    let gr = &g[r * n..(r + 1) * n];
                    let inner = dot(yr, gr);
                    for c in 0..n {
                        gx[r * n + c] = (gr[c] - yr[c] * inner) / norms[r];
                    }
                }
                accumulate(&mut grads[src.0], &gx);
            }
            Op::Sum(x) => {
                let gx = vec![g[0]; self.value(*x).len()];
                accumulate(&mut grads[x.0], &gx);
            }
        }
    }
}

fn accumulate(slot: &mut Option<Vec<f64>>, g: &[f64]) {
    match slot {
        Some(existing) => {
            for (a, b) in existing.iter_mut().zip(g) {
                *a += b;
            }
        }
        None => *slot = Some(g.to_vec()),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn m(rows: &[&[f64]]) -> Tensor {
        Tensor::from_rows(&rows.iter().map(|r| r.to_vec()).collect::<Vec<_>>()).unwrap()
    }

    #[test]
    fn identity_matmul() {
        let mut tape = Tape::new();
        let i = tape.constant(Tensor::identity(2).unwrap());
        let a = tape.constant(m(&[&[1.0, 2.0], &[3.0, 4.0]]));
        let out = tape.matmul(i, a).unwrap();
        assert_eq!(tape.value(out).data(), &[1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn annihilating_matmul() {
        let mut tape = Tape::new();
        let a = tape.constant(m(&[&[1.0, 0.0], &[0.0, 0.0]]));
        let b = tape.constant(m(&[&[0.0, 0.0], &[0.0, 1.0]]));
        let out = tape.matmul(a, b).unwrap();
        assert_eq!(tape.value(out).data(), &[0.0; 4]);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::zeros(vec![2, 3]).unwrap());
        let b = tape.constant(Tensor::zeros(vec![2, 3]).unwrap());
        let err = tape.matmul(a, b).unwrap_err().to_string();
        assert!(err.contains("[2, 3]"), "{err}");
    }

    #[test]
    fn softmax_single_survivor() {
        let mut tape = Tape::new();
        let s = tape.constant(m(&[&[1.0, 1.0]]));
        let mask = m(&[&[0.0, MASKED]]);
        let out = tape.softmax_masked(s, &mask).unwrap();
        assert_eq!(tape.value(out).data(), &[1.0, 0.0]);
    }

    #[test]
    fn softmax_accepts_negative_infinity() {
        let mut tape = Tape::new();
        let s = tape.constant(m(&[&[3.0, 1.0, 2.0]]));
        let mask = m(&[&[f64::NEG_INFINITY, 0.0, 0.0]]);
        let out = tape.softmax_masked(s, &mask).unwrap();
        let v = tape.value(out).data();
        assert_eq!(v[0], 0.0);
        assert!((v[1] + v[2] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn softmax_uniform_and_two_class() {
        let mut tape = Tape::new();
        let s = tape.constant(m(&[&[0.0, 0.0, 0.0]]));
        let out = tape
            .softmax_masked(s, &Tensor::zeros(vec![1, 3]).unwrap())
            .unwrap();
        for &p in tape.value(out).data() {
            assert!((p - 1.0 / 3.0).abs() < 1e-15);
        }

        let s = tape.constant(m(&[&[1.0, 2.0]]));
        let out = tape
            .softmax_masked(s, &Tensor::zeros(vec![1, 2]).unwrap())
            .unwrap();
        let v = tape.value(out).data();
        // 1 / (1 + e) and e / (1 + e)
        assert!((v[0] - 0.268_941_421_369_995).abs() < 1e-5);
        assert!((v[1] - 0.731_058_578_630_005).abs() < 1e-5);
    }

    #[test]
    fn fully_masked_row_is_an_error() {
        let mut tape = Tape::new();
        let s = tape.constant(m(&[&[0.0, 0.0], &[1.0, 1.0]]));
        let mask = m(&[&[0.0, 0.0], &[MASKED, MASKED]]);
        match tape.softmax_masked(s, &mask) {
            Err(Error::DegenerateRow { row }) => assert_eq!(row, 1),
            other => panic!("expected degenerate row, got {other:?}"),
        }
    }

    #[test]
    fn cross_entropy_uniform_and_saturated() {
        let mut tape = Tape::new();
        let l = tape.constant(Tensor::zeros(vec![3, 10]).unwrap());
        let ce = tape.cross_entropy(l, &[1, 4, 9], usize::MAX).unwrap();
        assert!((tape.value(ce.loss).item() - 10f64.ln()).abs() < 1e-12);

        let mut logits = vec![0.0; 5];
        logits[2] = 1000.0;
        let l = tape.constant(Tensor::matrix(1, 5, logits).unwrap());
        let ce = tape.cross_entropy(l, &[2], usize::MAX).unwrap();
        assert!(tape.value(ce.loss).item().abs() < 1e-12);
    }

    #[test]
    fn cross_entropy_all_ignored_is_zero_and_flagged() {
        let mut tape = Tape::new();
        let l = tape.leaf(Tensor::zeros(vec![2, 4]).unwrap().tracked());
        let ce = tape.cross_entropy(l, &[7, 7], 7).unwrap();
        assert!(ce.all_ignored());
        assert_eq!(tape.value(ce.loss).item(), 0.0);
        tape.backward(ce.loss).unwrap();
        assert!(tape.value(l).grad().unwrap().iter().all(|&g| g == 0.0));
    }

    #[test]
    fn cross_entropy_target_out_of_range() {
        let mut tape = Tape::new();
        let l = tape.constant(Tensor::zeros(vec![1, 4]).unwrap());
        assert!(matches!(
            tape.cross_entropy(l, &[4], usize::MAX),
            Err(Error::Index(_))
        ));
    }

    #[test]
    fn backward_of_sum_is_ones() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::zeros(vec![2, 3]).unwrap().tracked());
        let s = tape.sum(x);
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[1.0; 6]);
        assert_eq!(tape.value(x).grad().unwrap(), &[1.0; 6]);
    }

    #[test]
    fn backward_of_half_square_is_identity() {
        let mut tape = Tape::new();
        let data = vec![0.5, -2.0, 3.0, 1.25];
        let x = tape.leaf(Tensor::matrix(2, 2, data.clone()).unwrap().tracked());
        let sq = tape.mul(x, x).unwrap();
        let s = tape.sum(sq);
        let half = tape.scale(s, 0.5);
        tape.backward(half).unwrap();
        assert_eq!(tape.grad(x).unwrap(), data.as_slice());
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::zeros(vec![2]).unwrap().tracked());
        assert!(matches!(tape.backward(x), Err(Error::Shape(_))));
    }

    #[test]
    fn repeated_backward_recomputes_instead_of_accumulating() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::vector(vec![1.0, 2.0]).unwrap().tracked());
        let s = tape.sum(x);
        tape.backward(s).unwrap();
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[1.0, 1.0]);
    }

    #[test]
    fn untracked_inputs_receive_no_gradient() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::vector(vec![1.0, 2.0]).unwrap());
        let s = tape.sum(x);
        tape.backward(s).unwrap();
        assert!(tape.grad(x).is_none());
    }
}
