use std::collections::HashMap;

use indexmap::IndexMap;

use super::tensor::{gelu_grad_scalar, matmul_nn, matmul_nt, matmul_tn};
use super::{gelu_scalar, lit, sigmoid_scalar, NumericsError, ParamStore, Result, Scalar, Tensor};

/// Handle to a value recorded on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op<S> {
    Leaf,
    MatMul(Var, Var),
    MatMulNt(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    ScaleConst(Var, S),
    AddConst(Var),
    ScaleBy(Var, Var),
    Sigmoid(Var),
    Tanh(Var),
    Gelu(Var),
    Softmax(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<S>,
        inv_std: Vec<S>,
    },
    Gather {
        table: Var,
        ids: Vec<usize>,
    },
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    SliceCols(Var, usize),
    SumRows(Var),
    SumAll(Var),
    L2NormalizeRows {
        x: Var,
        norms: Vec<S>,
    },
    CrossEntropy {
        logits: Var,
        targets: Vec<Option<usize>>,
        probs: Vec<S>,
        count: usize,
    },
}

#[derive(Debug, Clone)]
struct Node<S> {
    value: Tensor<S>,
    op: Op<S>,
    tracked: bool,
}

/// Records one forward evaluation so that [`Graph::backward`] can replay it
/// in reverse. A graph is built per loss evaluation and dropped afterwards.
#[derive(Debug, Clone, Default)]
pub struct Graph<S> {
    nodes: Vec<Node<S>>,
    params: HashMap<String, Var>,
    param_order: Vec<(String, Var)>,
}

/// Reverse-mode gradients for every tracked node of a graph.
#[derive(Debug, Clone)]
pub struct Gradients<S> {
    grads: Vec<Option<Tensor<S>>>,
    params: Vec<(String, Var, Vec<usize>)>,
}

impl<S: Scalar> Gradients<S> {
    pub fn wrt(&self, v: Var) -> Option<&Tensor<S>> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Gradient of every trainable parameter that was pulled into the graph.
    /// Parameters the loss does not depend on get an explicit zero tensor.
    pub fn by_name(&self) -> IndexMap<String, Tensor<S>> {
        self.params
            .iter()
            .map(|(name, v, shape)| {
                let g = self.grads[v.0].clone().unwrap_or_else(|| {
                    Tensor::new(shape.clone(), vec![S::zero(); shape.iter().product()])
                        .expect("shape from existing tensor")
                });
                (name.clone(), g)
            })
            .collect()
    }
}

fn check<S: Scalar>(op: &'static str, t: &Tensor<S>) -> Result<()> {
    if t.is_finite() {
        Ok(())
    } else {
        Err(NumericsError::NonFinite { op })
    }
}

impl<S: Scalar> Graph<S> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            params: HashMap::new(),
            param_order: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<S> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn dims(&self, v: Var, op: &'static str) -> Result<(usize, usize)> {
        self.nodes[v.0].value.dims(op)
    }

    fn push(&mut self, op_name: &'static str, value: Tensor<S>, op: Op<S>, inputs: &[Var]) -> Result<Var> {
        check(op_name, &value)?;
        let tracked = inputs.iter().any(|v| self.nodes[v.0].tracked);
        self.nodes.push(Node { value, op, tracked });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Records a constant or input. It is differentiated only when the tensor
    /// was created with `requires_grad`.
    pub fn input(&mut self, t: Tensor<S>) -> Result<Var> {
        check("input", &t)?;
        let tracked = t.requires_grad();
        self.nodes.push(Node {
            value: t,
            op: Op::Leaf,
            tracked,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    pub fn constant(&mut self, t: Tensor<S>) -> Result<Var> {
        self.input(t.with_grad(false))
    }

    /// Pulls a named parameter into the graph (once per graph).
    pub fn param(&mut self, store: &ParamStore<S>, name: &str) -> Result<Var> {
        if let Some(&v) = self.params.get(name) {
            return Ok(v);
        }
        let p = store.get(name)?;
        let v = self.input(p.tensor.clone().with_grad(p.trainable))?;
        self.params.insert(name.to_string(), v);
        if p.trainable {
            self.param_order.push((name.to_string(), v));
        }
        Ok(v)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims(a, "matmul")?;
        let (k2, n) = self.dims(b, "matmul")?;
        if k != k2 {
            return Err(self.mismatch("matmul", a, b));
        }
        let out = matmul_nn(self.value(a).data(), self.value(b).data(), m, k, n);
        self.push("matmul", Tensor::matrix(m, n, out)?, Op::MatMul(a, b), &[a, b])
    }

    /// `a · bᵀ`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims(a, "matmul_nt")?;
        let (n, k2) = self.dims(b, "matmul_nt")?;
        if k != k2 {
            return Err(self.mismatch("matmul_nt", a, b));
        }
        let out = matmul_nt(self.value(a).data(), self.value(b).data(), m, k, n);
        self.push("matmul_nt", Tensor::matrix(m, n, out)?, Op::MatMulNt(a, b), &[a, b])
    }

    fn mismatch(&self, op: &'static str, a: Var, b: Var) -> NumericsError {
        NumericsError::ShapeMismatch {
            op,
            lhs: self.shape(a).to_vec(),
            rhs: self.shape(b).to_vec(),
        }
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).zip(self.value(b), "add", |x, y| x + y)?;
        self.push("add", v, Op::Add(a, b), &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).zip(self.value(b), "sub", |x, y| x - y)?;
        self.push("sub", v, Op::Sub(a, b), &[a, b])
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).zip(self.value(b), "mul", |x, y| x * y)?;
        self.push("mul", v, Op::Mul(a, b), &[a, b])
    }

    /// Adds a `1×n` row to every row of an `m×n` matrix.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (m, n) = self.dims(a, "add_row")?;
        if self.dims(row, "add_row")? != (1, n) {
            return Err(self.mismatch("add_row", a, row));
        }
        let mut out = self.value(a).data().to_vec();
        let r = self.value(row).data();
        for i in 0..m {
            for (o, &x) in out[i * n..(i + 1) * n].iter_mut().zip(r) {
                *o += x;
            }
        }
        self.push("add_row", Tensor::matrix(m, n, out)?, Op::AddRow(a, row), &[a, row])
    }

    pub fn scale(&mut self, a: Var, s: S) -> Result<Var> {
        let v = self.value(a).map(|x| x * s);
        self.push("scale", v, Op::ScaleConst(a, s), &[a])
    }

    pub fn add_const(&mut self, a: Var, c: S) -> Result<Var> {
        let v = self.value(a).map(|x| x + c);
        self.push("add_const", v, Op::AddConst(a), &[a])
    }

    /// Multiplies a tensor by a `1×1` variable.
    pub fn scale_by(&mut self, a: Var, s: Var) -> Result<Var> {
        let sv = self.value(s).item()?;
        let v = self.value(a).map(|x| x * sv);
        self.push("scale_by", v, Op::ScaleBy(a, s), &[a, s])
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a).map(sigmoid_scalar);
        self.push("sigmoid", v, Op::Sigmoid(a), &[a])
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a).map(|x| x.tanh());
        self.push("tanh", v, Op::Tanh(a), &[a])
    }

    pub fn gelu(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a).map(gelu_scalar);
        self.push("gelu", v, Op::Gelu(a), &[a])
    }

    /// Row-wise softmax, stabilized by subtracting the row maximum.
    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        let (m, n) = self.dims(a, "softmax")?;
        let out = softmax_rows(self.value(a).data(), m, n, false);
        self.push("softmax", Tensor::matrix(m, n, out)?, Op::Softmax(a), &[a])
    }

    /// Row-wise softmax where row `i` only sees columns `0..=i`; masked
    /// entries are exactly zero.
    pub fn causal_softmax(&mut self, a: Var) -> Result<Var> {
        let (m, n) = self.dims(a, "causal_softmax")?;
        let out = softmax_rows(self.value(a).data(), m, n, true);
        self.push("causal_softmax", Tensor::matrix(m, n, out)?, Op::Softmax(a), &[a])
    }

    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: S) -> Result<Var> {
        let (m, n) = self.dims(x, "layer_norm")?;
        if self.dims(gain, "layer_norm")? != (1, n) || self.dims(bias, "layer_norm")? != (1, n) {
            return Err(self.mismatch("layer_norm", x, gain));
        }
        let xs = self.value(x).data();
        let g = self.value(gain).data();
        let b = self.value(bias).data();
        let nn: S = lit(n as f64);
        let mut xhat = vec![S::zero(); m * n];
        let mut inv_std = vec![S::zero(); m];
        let mut out = vec![S::zero(); m * n];
        for i in 0..m {
            let row = &xs[i * n..(i + 1) * n];
            let mean = row.iter().copied().sum::<S>() / nn;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<S>() / nn;
            let is = S::one() / (var + eps).sqrt();
            inv_std[i] = is;
            for j in 0..n {
                let h = (row[j] - mean) * is;
                xhat[i * n + j] = h;
                out[i * n + j] = h * g[j] + b[j];
            }
        }
        self.push(
            "layer_norm",
            Tensor::matrix(m, n, out)?,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            },
            &[x, gain, bias],
        )
    }

    /// Selects rows of `table` by index (embedding lookup).
    pub fn gather(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let (v, d) = self.dims(table, "gather")?;
        let t = self.value(table).data();
        let mut out = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id >= v {
                return Err(NumericsError::Index {
                    op: "gather",
                    index: id,
                    extent: v,
                });
            }
            out.extend_from_slice(&t[id * d..(id + 1) * d]);
        }
        self.push(
            "gather",
            Tensor::matrix(ids.len(), d, out)?,
            Op::Gather {
                table,
                ids: ids.to_vec(),
            },
            &[table],
        )
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let (m, _) = self.dims(parts[0], "concat_cols")?;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (r, c) = self.dims(p, "concat_cols")?;
            if r != m {
                return Err(self.mismatch("concat_cols", parts[0], p));
            }
            widths.push(c);
        }
        let n: usize = widths.iter().sum();
        let mut out = vec![S::zero(); m * n];
        let mut off = 0;
        for (&p, &w) in parts.iter().zip(&widths) {
            let src = self.value(p).data();
            for i in 0..m {
                out[i * n + off..i * n + off + w].copy_from_slice(&src[i * w..(i + 1) * w]);
            }
            off += w;
        }
        self.push(
            "concat_cols",
            Tensor::matrix(m, n, out)?,
            Op::ConcatCols(parts.to_vec()),
            parts,
        )
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let (_, n) = self.dims(parts[0], "concat_rows")?;
        let mut out = Vec::new();
        let mut m = 0;
        for &p in parts {
            let (r, c) = self.dims(p, "concat_rows")?;
            if c != n {
                return Err(self.mismatch("concat_rows", parts[0], p));
            }
            out.extend_from_slice(self.value(p).data());
            m += r;
        }
        self.push(
            "concat_rows",
            Tensor::matrix(m, n, out)?,
            Op::ConcatRows(parts.to_vec()),
            parts,
        )
    }

    /// Columns `start..end`.
    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        let (m, n) = self.dims(a, "slice_cols")?;
        if start >= end || end > n {
            return Err(NumericsError::Index {
                op: "slice_cols",
                index: end,
                extent: n,
            });
        }
        let w = end - start;
        let src = self.value(a).data();
        let mut out = Vec::with_capacity(m * w);
        for i in 0..m {
            out.extend_from_slice(&src[i * n + start..i * n + end]);
        }
        self.push("slice_cols", Tensor::matrix(m, w, out)?, Op::SliceCols(a, start), &[a])
    }

    /// Sums the rows of an `m×n` matrix into `1×n`.
    pub fn sum_rows(&mut self, a: Var) -> Result<Var> {
        let (m, n) = self.dims(a, "sum_rows")?;
        let src = self.value(a).data();
        let mut out = vec![S::zero(); n];
        for i in 0..m {
            for (o, &x) in out.iter_mut().zip(&src[i * n..(i + 1) * n]) {
                *o += x;
            }
        }
        self.push("sum_rows", Tensor::row(out), Op::SumRows(a), &[a])
    }

    pub fn mean_rows(&mut self, a: Var) -> Result<Var> {
        let (m, _) = self.dims(a, "mean_rows")?;
        let s = self.sum_rows(a)?;
        self.scale(s, S::one() / lit(m as f64))
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s = self.value(a).sum();
        self.push("sum", Tensor::scalar(s), Op::SumAll(a), &[a])
    }

    /// Divides each row by its Euclidean norm.
    pub fn l2_normalize_rows(&mut self, a: Var) -> Result<Var> {
        let (m, n) = self.dims(a, "l2_normalize_rows")?;
        let src = self.value(a).data();
        let mut out = vec![S::zero(); m * n];
        let mut norms = vec![S::zero(); m];
        for i in 0..m {
            let row = &src[i * n..(i + 1) * n];
            let nrm = row.iter().map(|&v| v * v).sum::<S>().sqrt();
            if nrm == S::zero() {
                return Err(NumericsError::Degenerate {
                    op: "l2_normalize_rows",
                });
            }
            norms[i] = nrm;
            for j in 0..n {
                out[i * n + j] = row[j] / nrm;
            }
        }
        self.push(
            "l2_normalize_rows",
            Tensor::matrix(m, n, out)?,
            Op::L2NormalizeRows { x: a, norms },
            &[a],
        )
    }

    /// Mean natural-log cross-entropy over rows whose target is `Some`.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[Option<usize>]) -> Result<Var> {
        let (m, n) = self.dims(logits, "cross_entropy")?;
        if targets.len() != m {
            return Err(NumericsError::ShapeMismatch {
                op: "cross_entropy",
                lhs: vec![m, n],
                rhs: vec![targets.len()],
            });
        }
        let count = targets.iter().filter(|t| t.is_some()).count();
        if count == 0 {
            return Err(NumericsError::Usage(
                "cross_entropy: every target position is masked".into(),
            ));
        }
        let z = self.value(logits).data();
        let probs = softmax_rows(z, m, n, false);
        let mut total = S::zero();
        for (i, t) in targets.iter().enumerate() {
            if let Some(t) = *t {
                if t >= n {
                    return Err(NumericsError::Index {
                        op: "cross_entropy",
                        index: t,
                        extent: n,
                    });
                }
                let row = &z[i * n..(i + 1) * n];
                let mx = row.iter().copied().fold(S::neg_infinity(), S::max);
                let lse = mx + row.iter().map(|&v| (v - mx).exp()).sum::<S>().ln();
                total += lse - row[t];
            }
        }
        let loss = total / lit(count as f64);
        self.push(
            "cross_entropy",
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
                count,
            },
            &[logits],
        )
    }

    /// Reverse-mode sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<S>> {
        let shape = self.shape(loss);
        if self.value(loss).len() != 1 {
            return Err(NumericsError::NotScalar { shape: shape.to_vec() });
        }
        let mut grads: Vec<Option<Tensor<S>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Tensor::new(shape.to_vec(), vec![S::one()])?);

        for idx in (0..=loss.0).rev() {
            let Some(gout) = grads[idx].take() else {
                continue;
            };
            let node = &self.nodes[idx];
            if !node.tracked {
                grads[idx] = Some(gout);
                continue;
            }
            self.propagate(&node.op, &node.value, &gout, &mut grads)?;
            grads[idx] = Some(gout);
        }

        Ok(Gradients {
            grads,
            params: self
                .param_order
                .iter()
                .map(|(n, v)| (n.clone(), *v, self.shape(*v).to_vec()))
                .collect(),
        })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor<S>>], v: Var, g: Tensor<S>) {
        if !self.nodes[v.0].tracked {
            return;
        }
        match &mut grads[v.0] {
            Some(acc) => acc.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }

    fn propagate(&self, op: &Op<S>, out: &Tensor<S>, gout: &Tensor<S>, grads: &mut [Option<Tensor<S>>]) -> Result<()> {
        let go = gout.data();
        match op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = self.dims(*a, "matmul")?;
                let (_, n) = self.dims(*b, "matmul")?;
                if self.nodes[a.0].tracked {
                    let ga = matmul_nt(go, self.value(*b).data(), m, n, k);
                    self.accumulate(grads, *a, Tensor::matrix(m, k, ga)?);
                }
                if self.nodes[b.0].tracked {
                    let gb = matmul_tn(self.value(*a).data(), go, m, k, n);
                    self.accumulate(grads, *b, Tensor::matrix(k, n, gb)?);
                }
            }
            Op::MatMulNt(a, b) => {
                // out = a·bᵀ, a: m×k, b: n×k
                let (m, k) = self.dims(*a, "matmul_nt")?;
                let (n, _) = self.dims(*b, "matmul_nt")?;
                if self.nodes[a.0].tracked {
                    let ga = matmul_nn(go, self.value(*b).data(), m, n, k);
                    self.accumulate(grads, *a, Tensor::matrix(m, k, ga)?);
                }
                if self.nodes[b.0].tracked {
                    let gb = matmul_tn(go, self.value(*a).data(), m, n, k);
                    self.accumulate(grads, *b, Tensor::matrix(n, k, gb)?);
                }
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, gout.clone());
                self.accumulate(grads, *b, gout.clone());
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, gout.clone());
                self.accumulate(grads, *b, gout.map(|v| -v));
            }
            Op::Mul(a, b) => {
                let av = self.value(*a);
                let bv = self.value(*b);
                self.accumulate(grads, *a, gout.zip(bv, "mul", |g, y| g * y)?);
                self.accumulate(grads, *b, gout.zip(av, "mul", |g, x| g * x)?);
            }
            Op::AddRow(a, row) => {
                self.accumulate(grads, *a, gout.clone());
                let (m, n) = gout.dims("add_row")?;
                let mut gr = vec![S::zero(); n];
                for i in 0..m {
                    for (o, &g) in gr.iter_mut().zip(&go[i * n..(i + 1) * n]) {
                        *o += g;
                    }
                }
                self.accumulate(grads, *row, Tensor::row(gr));
            }
            Op::ScaleConst(a, s) => {
                let s = *s;
                self.accumulate(grads, *a, gout.map(|g| g * s));
            }
            Op::AddConst(a) => self.accumulate(grads, *a, gout.clone()),
            Op::ScaleBy(a, s) => {
                let sv = self.value(*s).item()?;
                self.accumulate(grads, *a, gout.map(|g| g * sv));
                let gs: S = go.iter().zip(self.value(*a).data()).map(|(&g, &x)| g * x).sum();
                self.accumulate(grads, *s, Tensor::scalar(gs));
            }
            Op::Sigmoid(a) => {
                let g = gout.zip(out, "sigmoid", |g, y| g * y * (S::one() - y))?;
                self.accumulate(grads, *a, g);
            }
            Op::Tanh(a) => {
                let g = gout.zip(out, "tanh", |g, y| g * (S::one() - y * y))?;
                self.accumulate(grads, *a, g);
            }
            Op::Gelu(a) => {
                let g = gout.zip(self.value(*a), "gelu", |g, x| g * gelu_grad_scalar(x))?;
                self.accumulate(grads, *a, g);
            }
            Op::Softmax(a) => {
                let (m, n) = out.dims("softmax")?;
                let y = out.data();
                let mut gx = vec![S::zero(); m * n];
                for i in 0..m {
                    let yr = &y[i * n..(i + 1) * n];
                    let gr = &go[i * n..(i + 1) * n];
                    let dot: S = yr.iter().zip(gr).map(|(&p, &g)| p * g).sum();
                    for j in 0..n {
                        gx[i * n + j] = yr[j] * (gr[j] - dot);
                    }
                }
                self.accumulate(grads, *a, Tensor::matrix(m, n, gx)?);
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            } => {
                let (m, n) = out.dims("layer_norm")?;
                let g = self.value(*gain).data();
                let nn: S = lit(n as f64);
                let mut gx = vec![S::zero(); m * n];
                let mut gg = vec![S::zero(); n];
                let mut gb = vec![S::zero(); n];
                for i in 0..m {
                    let mut sum_d = S::zero();
                    let mut sum_dx = S::zero();
                    for j in 0..n {
                        let gij = go[i * n + j];
                        gg[j] += gij * xhat[i * n + j];
                        gb[j] += gij;
                        let d = gij * g[j];
                        sum_d += d;
                        sum_dx += d * xhat[i * n + j];
                    }
                    for j in 0..n {
                        let d = go[i * n + j] * g[j];
                        gx[i * n + j] = inv_std[i] / nn * (nn * d - sum_d - xhat[i * n + j] * sum_dx);
                    }
                }
                self.accumulate(grads, *x, Tensor::matrix(m, n, gx)?);
                self.accumulate(grads, *gain, Tensor::row(gg));
                self.accumulate(grads, *bias, Tensor::row(gb));
            }
            Op::Gather { table, ids } => {
                if self.nodes[table.0].tracked {
                    let (v, d) = self.dims(*table, "gather")?;
                    let mut gt = vec![S::zero(); v * d];
                    for (r, &id) in ids.iter().enumerate() {
                        for j in 0..d {
                            gt[id * d + j] += go[r * d + j];
                        }
                    }
                    self.accumulate(grads, *table, Tensor::matrix(v, d, gt)?);
                }
            }
            Op::ConcatCols(parts) => {
                let (m, n) = out.dims("concat_cols")?;
                let mut off = 0;
                for &p in parts {
                    let (_, w) = self.dims(p, "concat_cols")?;
                    if self.nodes[p.0].tracked {
                        let mut gp = Vec::with_capacity(m * w);
                        for i in 0..m {
                            gp.extend_from_slice(&go[i * n + off..i * n + off + w]);
                        }
                        self.accumulate(grads, p, Tensor::matrix(m, w, gp)?);
                    }
                    off += w;
                }
            }
            Op::ConcatRows(parts) => {
                let (_, n) = out.dims("concat_rows")?;
                let mut row = 0;
                for &p in parts {
                    let (r, _) = self.dims(p, "concat_rows")?;
                    if self.nodes[p.0].tracked {
                        let gp = go[row * n..(row + r) * n].to_vec();
                        self.accumulate(grads, p, Tensor::matrix(r, n, gp)?);
                    }
                    row += r;
                }
            }
            Op::SliceCols(a, start) => {
                let (m, n) = self.dims(*a, "slice_cols")?;
                let (_, w) = out.dims("slice_cols")?;
                let mut ga = vec![S::zero(); m * n];
                for i in 0..m {
                    ga[i * n + start..i * n + start + w].copy_from_slice(&go[i * w..(i + 1) * w]);
                }
                self.accumulate(grads, *a, Tensor::matrix(m, n, ga)?);
            }
            Op::SumRows(a) => {
                let (m, n) = self.dims(*a, "sum_rows")?;
                let mut ga = Vec::with_capacity(m * n);
                for _ in 0..m {
                    ga.extend_from_slice(go);
                }
                self.accumulate(grads, *a, Tensor::matrix(m, n, ga)?);
            }
            Op::SumAll(a) => {
                let g = go[0];
                let av = self.value(*a);
                self.accumulate(grads, *a, av.map(|_| g));
            }
            Op::L2NormalizeRows { x, norms } => {
                let (m, n) = out.dims("l2_normalize_rows")?;
                let y = out.data();
                let mut gx = vec![S::zero(); m * n];
                for i in 0..m {
                    let yr = &y[i * n..(i + 1) * n];
                    let gr = &go[i * n..(i + 1) * n];
                    let dot: S = yr.iter().zip(gr).map(|(&p, &g)| p * g).sum();
                    for j in 0..n {
                        gx[i * n + j] = (gr[j] - yr[j] * dot) / norms[i];
                    }
                }
                self.accumulate(grads, *x, Tensor::matrix(m, n, gx)?);
            }
            Op::CrossEntropy {
                logits,
                targets,
                probs,
                count,
            } => {
                let (m, n) = self.dims(*logits, "cross_entropy")?;
                let scale = go[0] / lit(*count as f64);
                let mut gz = vec![S::zero(); m * n];
                for (i, t) in targets.iter().enumerate() {
                    if let Some(t) = *t {
                        for j in 0..n {
                            gz[i * n + j] = probs[i * n + j] * scale;
                        }
                        gz[i * n + t] -= scale;
                    }
                }
                self.accumulate(grads, *logits, Tensor::matrix(m, n, gz)?);
            }
        }
        Ok(())
    }
}

pub(crate) fn softmax_rows<S: Scalar>(z: &[S], m: usize, n: usize, causal: bool) -> Vec<S> {
    let mut out = vec![S::zero(); m * n];
    for i in 0..m {
        let width = if causal { (i + 1).min(n) } else { n };
        let row = &z[i * n..i * n + width];
        let mx = row.iter().copied().fold(S::neg_infinity(), S::max);
        let mut total = S::zero();
        for j in 0..width {
            let e = (row[j] - mx).exp();
            out[i * n + j] = e;
            total += e;
        }
        for j in 0..width {
            out[i * n + j] /= total;
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn t(rows: usize, cols: usize, data: &[f64]) -> Tensor<f64> {
        Tensor::matrix(rows, cols, data.to_vec()).unwrap()
    }

    /// Central-difference gradient of `f` with respect to every entry of `x`.
    fn numeric_grad(x: &Tensor<f64>, f: impl Fn(&Tensor<f64>) -> f64) -> Vec<f64> {
        let h = 1e-6;
        (0..x.len())
            .map(|i| {
                let mut p = x.clone();
                p.data_mut()[i] += h;
                let mut q = x.clone();
                q.data_mut()[i] -= h;
                (f(&p) - f(&q)) / (2.0 * h)
            })
            .collect()
    }

    fn max_rel_err(a: &[f64], b: &[f64]) -> f64 {
        a.iter()
            .zip(b)
            .map(|(x, y)| (x - y).abs() / x.abs().max(y.abs()).max(1e-6))
            .fold(0.0, f64::max)
    }

    /// Builds `op` on a fresh graph with `x` as the only tracked input, reduces
    /// with a fixed random weighting and compares against finite differences.
    fn gradcheck(x: Tensor<f64>, op: impl Fn(&mut Graph<f64>, Var) -> Result<Var>) -> f64 {
        let eval = |xv: &Tensor<f64>, want_grad: bool| {
            let mut g = Graph::new();
            let v = g.input(xv.clone().with_grad(true)).unwrap();
            let y = op(&mut g, v).unwrap();
            let (r, c) = g.value(y).dims("w").unwrap();
            let w: Vec<f64> = (0..r * c).map(|i| ((i * 7 + 3) % 11) as f64 / 5.0 - 1.0).collect();
            let wv = g.constant(t(r, c, &w)).unwrap();
            let prod = g.mul(y, wv).unwrap();
            let loss = g.sum(prod).unwrap();
            let val = g.value(loss).item().unwrap();
            let grad = if want_grad {
                Some(g.backward(loss).unwrap().wrt(v).unwrap().data().to_vec())
            } else {
                None
            };
            (val, grad)
        };
        let analytic = eval(&x, true).1.unwrap();
        let numeric = numeric_grad(&x, |p| eval(p, false).0);
        max_rel_err(&analytic, &numeric)
    }

    fn sample(rows: usize, cols: usize, seed: u64) -> Tensor<f64> {
        let data = (0..rows * cols)
            .map(|i| (((i as u64 + 1) * 2654435761 + seed * 97) % 1000) as f64 / 400.0 - 1.2)
            .collect();
        Tensor::matrix(rows, cols, data).unwrap()
    }

    #[test]
    fn sum_of_matmul_gradient_is_ones_times_b_transposed() {
        let a = sample(2, 3, 1).with_grad(true);
        let b = sample(3, 4, 2);
        let mut g = Graph::new();
        let av = g.input(a).unwrap();
        let bv = g.constant(b.clone()).unwrap();
        let c = g.matmul(av, bv).unwrap();
        let loss = g.sum(c).unwrap();
        let grads = g.backward(loss).unwrap();
        let want = Tensor::<f64>::full(2, 4, 1.0).matmul(&b.transpose().unwrap()).unwrap();
        let got = grads.wrt(av).unwrap();
        for (x, y) in got.data().iter().zip(want.data()) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn sum_and_quadratic_parameter_gradients() {
        let mut store = ParamStore::new();
        store.insert("w", sample(2, 3, 4)).unwrap();
        let mut g = Graph::new();
        let w = g.param(&store, "w").unwrap();
        let s = g.sum(w).unwrap();
        let grads = g.backward(s).unwrap().by_name();
        assert!(grads["w"].data().iter().all(|&v| v == 1.0));

        let mut g = Graph::new();
        let w = g.param(&store, "w").unwrap();
        let sq = g.mul(w, w).unwrap();
        let s = g.sum(sq).unwrap();
        let half = g.scale(s, 0.5).unwrap();
        let grads = g.backward(half).unwrap().by_name();
        assert_eq!(grads["w"].data(), store.tensor("w").unwrap().data());
    }

    #[test]
    fn non_scalar_loss_is_rejected() {
        let mut g = Graph::new();
        let v = g.input(sample(2, 2, 0).with_grad(true)).unwrap();
        assert!(matches!(g.backward(v), Err(NumericsError::NotScalar { .. })));
    }

    #[test]
    fn softmax_reference_values() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(t(1, 3, &[0.0, 0.0, 0.0])).unwrap();
        let y = g.softmax(x).unwrap();
        for &p in g.value(y).data() {
            assert!((p - 1.0 / 3.0).abs() < 1e-15);
        }
        let x = g.constant(t(1, 1, &[42.0])).unwrap();
        let y = g.softmax(x).unwrap();
        assert_eq!(g.value(y).data(), &[1.0]);
        let x = g.constant(t(1, 2, &[1000.0, 0.0])).unwrap();
        let y = g.softmax(x).unwrap();
        let reference = [1.0 / (1.0 + (-1000.0f64).exp()), (-1000.0f64).exp()];
        assert_eq!(g.value(y).data(), &reference);
    }

    #[test]
    fn layer_norm_reference_values() {
        let mut g = Graph::<f64>::new();
        let gain = g.constant(Tensor::full(1, 2, 1.0)).unwrap();
        let bias = g.constant(Tensor::zeros(1, 2)).unwrap();
        let x = g.constant(t(1, 2, &[1.0, -1.0])).unwrap();
        let y = g.layer_norm(x, gain, bias, 1e-5).unwrap();
        let want = 1.0 / (1.0f64 + 1e-5).sqrt();
        assert!((g.value(y).data()[0] - want).abs() < 1e-15);
        assert!((g.value(y).data()[1] + want).abs() < 1e-15);

        let gain = g.constant(Tensor::full(1, 4, 1.0)).unwrap();
        let bias = g.constant(Tensor::zeros(1, 4)).unwrap();
        let x = g.constant(Tensor::full(1, 4, 3.25)).unwrap();
        let y = g.layer_norm(x, gain, bias, 1e-5).unwrap();
        assert!(g.value(y).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn elementwise_gradients_match_finite_differences() {
        let x = sample(3, 4, 5);
        assert!(gradcheck(x.clone(), |g, v| g.sigmoid(v)) < 1e-4);
        assert!(gradcheck(x.clone(), |g, v| g.tanh(v)) < 1e-4);
        assert!(gradcheck(x.clone(), |g, v| g.gelu(v)) < 1e-4);
        assert!(gradcheck(x.clone(), |g, v| g.softmax(v)) < 1e-4);
        assert!(gradcheck(sample(4, 4, 2), |g, v| g.causal_softmax(v)) < 1e-4);
        assert!(gradcheck(x.clone(), |g, v| g.l2_normalize_rows(v)) < 1e-4);
        assert!(gradcheck(x.clone(), |g, v| g.mul(v, v)) < 1e-4);
        assert!(gradcheck(x.clone(), |g, v| g.sum_rows(v)) < 1e-4);
        assert!(gradcheck(x.clone(), |g, v| g.slice_cols(v, 1, 3)) < 1e-4);
        assert!(gradcheck(x, |g, v| g.matmul_nt(v, v)) < 1e-4);
    }

    #[test]
    fn layer_norm_gradient_matches_finite_differences() {
        let x = sample(3, 5, 9);
        let err = gradcheck(x, |g, v| {
            let gain = g.input(sample(1, 5, 3).with_grad(true))?;
            let bias = g.input(sample(1, 5, 4).with_grad(true))?;
            g.layer_norm(v, gain, bias, 1e-5)
        });
        assert!(err < 1e-4, "{err}");
    }

    #[test]
    fn cross_entropy_gradient_and_masking() {
        let x = sample(3, 5, 11);
        let targets = [Some(1), None, Some(4)];
        let err = gradcheck(x.clone(), |g, v| g.cross_entropy(v, &targets));
        assert!(err < 1e-4, "{err}");
        let mut g = Graph::<f64>::new();
        let v = g.constant(x).unwrap();
        assert!(g.cross_entropy(v, &[None, None, None]).is_err());
    }

    #[test]
    fn gather_and_concat_gradients() {
        let x = sample(4, 3, 6);
        assert!(gradcheck(x.clone(), |g, v| g.gather(v, &[2, 0, 2])) < 1e-4);
        assert!(
            gradcheck(x.clone(), |g, v| {
                let a = g.gather(v, &[1])?;
                let b = g.gather(v, &[3])?;
                g.concat_cols(&[a, b, a])
            }) < 1e-4
        );
        assert!(gradcheck(x, |g, v| g.concat_rows(&[v, v])) < 1e-4);
    }

    #[test]
    fn scale_by_variable_gradient() {
        let x = sample(2, 3, 8);
        let err = gradcheck(x, |g, v| {
            let s = g.gather(v, &[1])?;
            let s = g.slice_cols(s, 2, 3)?;
            g.scale_by(v, s)
        });
        assert!(err < 1e-4);
    }

    #[test]
    fn non_finite_values_are_surfaced() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(t(1, 1, &[1e300])).unwrap();
        assert!(matches!(g.mul(x, x), Err(NumericsError::NonFinite { .. })));
    }

    #[test]
    fn unreached_parameters_get_zero_gradient() {
        let mut store = ParamStore::new();
        store.insert("a", sample(1, 2, 1)).unwrap();
        store.insert("b", sample(1, 2, 2)).unwrap();
        let mut g = Graph::new();
        let a = g.param(&store, "a").unwrap();
        let _b = g.param(&store, "b").unwrap();
        let s = g.sum(a).unwrap();
        let grads = g.backward(s).unwrap().by_name();
        assert_eq!(grads["b"].data(), &[0.0, 0.0]);
    }

    proptest! {
        #[test]
        fn softmax_rows_sum_to_one(data in proptest::collection::vec(-50.0f64..50.0, 12)) {
            let mut g = Graph::<f64>::new();
            let x = g.constant(t(3, 4, &data)).unwrap();
            let y = g.softmax(x).unwrap();
            for r in 0..3 {
                let s: f64 = g.value(y).row_slice(r).iter().sum();
                prop_assert!((s - 1.0).abs() <= 1e-9);
                prop_assert!(g.value(y).row_slice(r).iter().all(|&p| p >= 0.0));
            }
        }

        #[test]
        fn layer_norm_rows_are_centered(data in proptest::collection::vec(-20.0f64..20.0, 16)) {
            let mut g = Graph::<f64>::new();
            let gain = g.constant(Tensor::full(1, 8, 1.0)).unwrap();
            let bias = g.constant(Tensor::zeros(1, 8)).unwrap();
            let x = g.constant(t(2, 8, &data)).unwrap();
            let y = g.layer_norm(x, gain, bias, 1e-5).unwrap();
            for r in 0..2 {
                let mean: f64 = g.value(y).row_slice(r).iter().sum::<f64>() / 8.0;
                prop_assert!(mean.abs() <= 1e-7);
            }
        }

        #[test]
        fn matmul_gradient_matches_finite_differences(seed in 0u64..500) {
            let b = sample(3, 2, seed + 1);
            let err = gradcheck(sample(2, 3, seed), move |g, v| {
                let bv = g.input(b.clone().with_grad(true))?;
                g.matmul(v, bv)
            });
            prop_assert!(err < 1e-4);
        }
    }
}
