//! Reverse-mode automatic differentiation over a linear tape.
//!
//! Every op appends one node; nodes are therefore already in topological
//! order and `backward` walks them once in reverse. Ops are coarse (fused
//! attention, layer norm, losses) so tape bookkeeping stays negligible next
//! to the matrix work.

use crate::error::{Error, Result};
use crate::numcore::kernels::{self, gemm, View};
use crate::numcore::Tensor;

/// Handle to a value recorded on a [`Tape`].
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
    MatMul { a: Var, b: Var },
    Add { a: Var, b: Var },
    Mul { a: Var, b: Var },
    AddRow { x: Var, row: Var },
    Scale { x: Var, s: f64 },
    Gelu { x: Var },
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    Gather { table: Var, ids: Vec<usize> },
    ConcatRows { parts: Vec<Var> },
    CausalAttention { qkv: Var, heads: usize, probs: Vec<f64> },
    Softmax { x: Var },
    LogSoftmax { x: Var },
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        mask: Vec<bool>,
        probs: Vec<f64>,
        count: usize,
    },
    KlDiv {
        student: Var,
        teacher: Vec<f64>,
        mask: Vec<bool>,
        count: usize,
    },
    Sum { x: Var },
    Mean { x: Var },
}

#[derive(Debug)]
struct Node {
    shape: Vec<usize>,
    value: Vec<f64>,
    requires_grad: bool,
    op: Op,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
#[derive(Debug)]
pub struct Grads {
    grads: Vec<Option<Vec<f64>>>,
}

impl Grads {
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    pub fn take(&mut self, v: Var) -> Option<Vec<f64>> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

fn last_dim(shape: &[usize]) -> usize {
    shape.last().copied().unwrap_or(1)
}

fn mat_dims(shape: &[usize]) -> Option<(usize, usize)> {
    match shape {
        [r, c] => Some((*r, *c)),
        _ => None,
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

    fn push(&mut self, shape: Vec<usize>, value: Vec<f64>, requires_grad: bool, op: Op) -> Var {
        debug_assert_eq!(shape.iter().product::<usize>(), value.len());
        self.nodes.push(Node {
            shape,
            value,
            requires_grad,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Records a leaf carrying a copy of `t`; it tracks gradients iff
    /// `t.requires_grad()`.
    pub fn leaf(&mut self, t: &Tensor) -> Var {
        self.push(t.shape().to_vec(), t.data().to_vec(), t.requires_grad(), Op::Leaf)
    }

    /// Records a leaf with an explicit gradient flag.
    pub fn input(&mut self, t: &Tensor, requires_grad: bool) -> Var {
        self.push(t.shape().to_vec(), t.data().to_vec(), requires_grad, Op::Leaf)
    }

    pub fn constant(&mut self, shape: Vec<usize>, value: Vec<f64>) -> Result<Var> {
        Ok(self.leaf(&Tensor::new(shape, value)?))
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.rg(v)
    }

    /// Copies a recorded value out as a standalone tensor.
    pub fn tensor(&self, v: Var) -> Tensor {
        let n = &self.nodes[v.0];
        Tensor::new(n.shape.clone(), n.value.clone())
            .unwrap_or_else(|_| Tensor::zeros(n.shape.clone()))
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value[0]
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = mat_dims(self.shape(a))
            .ok_or_else(|| Error::shape("matmul", format!("lhs {:?} is not 2-D", self.shape(a))))?;
        let (k2, n) = mat_dims(self.shape(b))
            .ok_or_else(|| Error::shape("matmul", format!("rhs {:?} is not 2-D", self.shape(b))))?;
        if k != k2 {
            return Err(Error::shape("matmul", format!("[{m}x{k}] x [{k2}x{n}]")));
        }
        let mut out = vec![0.0; m * n];
        gemm(
            m,
            k,
            n,
            self.value(a),
            View::row_major(k),
            self.value(b),
            View::row_major(n),
            0.0,
            &mut out,
            View::row_major(n),
        );
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(vec![m, n], out, rg, Op::MatMul { a, b }))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(
                op,
                format!("{:?} vs {:?}", self.shape(a), self.shape(b)),
            ));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let out = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(x, y)| x + y)
            .collect();
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(self.shape(a).to_vec(), out, rg, Op::Add { a, b }))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let out = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(x, y)| x * y)
            .collect();
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(self.shape(a).to_vec(), out, rg, Op::Mul { a, b }))
    }

    /// Adds a length-`n` vector to every row of `x`.
    pub fn add_row(&mut self, x: Var, row: Var) -> Result<Var> {
        let n = last_dim(self.shape(x));
        if self.shape(row) != [n] {
            return Err(Error::shape(
                "add_row",
                format!("row {:?} for input {:?}", self.shape(row), self.shape(x)),
            ));
        }
        let r = self.value(row);
        let out = self
            .value(x)
            .chunks_exact(n.max(1))
            .flat_map(|xs| xs.iter().zip(r).map(|(a, b)| a + b))
            .collect();
        let rg = self.rg(x) || self.rg(row);
        Ok(self.push(self.shape(x).to_vec(), out, rg, Op::AddRow { x, row }))
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Var {
        let out = self.value(x).iter().map(|v| v * s).collect();
        let rg = self.rg(x);
        self.push(self.shape(x).to_vec(), out, rg, Op::Scale { x, s })
    }

    /// Exact GELU, `x·Φ(x)`.
    pub fn gelu(&mut self, x: Var) -> Var {
        let out = self
            .value(x)
            .iter()
            .map(|&v| v * kernels::normal_cdf(v))
            .collect();
        let rg = self.rg(x);
        self.push(self.shape(x).to_vec(), out, rg, Op::Gelu { x })
    }

    /// Per-row normalization over the last dimension (population variance),
    /// followed by the affine `gain`/`bias`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let d = last_dim(self.shape(x));
        if d == 0 {
            return Err(Error::shape("layer_norm", "last dimension is zero"));
        }
        if !(eps > 0.0) {
            return Err(Error::Invalid(format!("layer_norm eps must be positive, got {eps}")));
        }
        if self.shape(gain) != [d] || self.shape(bias) != [d] {
            return Err(Error::shape(
                "layer_norm",
                format!(
                    "gain {:?} / bias {:?} for width {d}",
                    self.shape(gain),
                    self.shape(bias)
                ),
            ));
        }
        let xs = self.value(x);
        let g = self.value(gain);
        let b = self.value(bias);
        let rows = xs.len() / d;
        let mut xhat = vec![0.0; xs.len()];
        let mut rstd = vec![0.0; rows];
        let mut out = vec![0.0; xs.len()];
        for r in 0..rows {
            let row = &xs[r * d..(r + 1) * d];
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let rs = 1.0 / (var + eps).sqrt();
            rstd[r] = rs;
            for j in 0..d {
                let h = (row[j] - mean) * rs;
                xhat[r * d + j] = h;
                out[r * d + j] = h * g[j] + b[j];
            }
        }
        let rg = self.rg(x) || self.rg(gain) || self.rg(bias);
        Ok(self.push(
            self.shape(x).to_vec(),
            out,
            rg,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            },
        ))
    }

    /// Selects rows of a 2-D `table` by index.
    pub fn gather_rows(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let (rows, d) = mat_dims(self.shape(table))
            .ok_or_else(|| Error::shape("gather_rows", "table is not 2-D"))?;
        let src = self.value(table);
        let mut out = Vec::with_capacity(ids.len() * d);
        for &i in ids {
            if i >= rows {
                return Err(Error::shape(
                    "gather_rows",
                    format!("row {i} out of range for {rows} rows"),
                ));
            }
            out.extend_from_slice(&src[i * d..(i + 1) * d]);
        }
        let rg = self.rg(table);
        Ok(self.push(
            vec![ids.len(), d],
            out,
            rg,
            Op::Gather {
                table,
                ids: ids.to_vec(),
            },
        ))
    }

    /// Stacks 2-D parts with equal width along rows.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let Some(&first) = parts.first() else {
            return Err(Error::shape("concat_rows", "no parts"));
        };
        let d = last_dim(self.shape(first));
        let mut out = Vec::new();
        let mut rows = 0;
        let mut rg = false;
        for &p in parts {
            let (r, c) = mat_dims(self.shape(p))
                .ok_or_else(|| Error::shape("concat_rows", "part is not 2-D"))?;
            if c != d {
                return Err(Error::shape("concat_rows", format!("width {c} vs {d}")));
            }
            rows += r;
            rg |= self.rg(p);
            out.extend_from_slice(self.value(p));
        }
        Ok(self.push(
            vec![rows, d],
            out,
            rg,
            Op::ConcatRows {
                parts: parts.to_vec(),
            },
        ))
    }

    /// Multi-head causal self-attention over packed `[L, 3d]` query/key/value
    /// rows; returns `[L, d]` with heads concatenated.
    pub fn causal_attention(&mut self, qkv: Var, heads: usize) -> Result<Var> {
        let (l, w) = mat_dims(self.shape(qkv))
            .ok_or_else(|| Error::shape("causal_attention", "qkv is not 2-D"))?;
        if heads == 0 || w % (3 * heads) != 0 {
            return Err(Error::shape(
                "causal_attention",
                format!("width {w} not divisible into 3 x {heads} heads"),
            ));
        }
        let d = w / 3;
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let src = self.value(qkv);
        let mut probs = vec![0.0; heads * l * l];
        let mut out = vec![0.0; l * d];
        for h in 0..heads {
            let p = &mut probs[h * l * l..(h + 1) * l * l];
            gemm(
                l,
                dh,
                l,
                src,
                View { offset: h * dh, rs: w, cs: 1 },
                src,
                View { offset: d + h * dh, rs: 1, cs: w },
                0.0,
                p,
                View::row_major(l),
            );
            for i in 0..l {
                let row = &mut p[i * l..(i + 1) * l];
                let max = row[..=i]
                    .iter()
                    .map(|s| s * scale)
                    .fold(f64::NEG_INFINITY, f64::max);
                let mut sum = 0.0;
                for s in &mut row[..=i] {
                    *s = (*s * scale - max).exp();
                    sum += *s;
                }
                row[..=i].iter_mut().for_each(|s| *s /= sum);
                row[i + 1..].fill(0.0);
            }
            gemm(
                l,
                l,
                dh,
                p,
                View::row_major(l),
                src,
                View { offset: 2 * d + h * dh, rs: w, cs: 1 },
                0.0,
                &mut out,
                View { offset: h * dh, rs: d, cs: 1 },
            );
        }
        let rg = self.rg(qkv);
        Ok(self.push(vec![l, d], out, rg, Op::CausalAttention { qkv, heads, probs }))
    }

    /// Max-subtracted softmax over the last dimension.
    pub fn softmax(&mut self, x: Var) -> Var {
        let d = last_dim(self.shape(x));
        let out = kernels::softmax_rows(self.value(x), d);
        let rg = self.rg(x);
        self.push(self.shape(x).to_vec(), out, rg, Op::Softmax { x })
    }

    pub fn log_softmax(&mut self, x: Var) -> Var {
        let d = last_dim(self.shape(x));
        let out = kernels::log_softmax_rows(self.value(x), d);
        let rg = self.rg(x);
        self.push(self.shape(x).to_vec(), out, rg, Op::LogSoftmax { x })
    }

    /// Mean next-token negative log-likelihood over masked-in rows of
    /// `[L, V]` logits.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize], mask: &[bool]) -> Result<Var> {
        let (l, v) = mat_dims(self.shape(logits))
            .ok_or_else(|| Error::shape("cross_entropy", "logits are not 2-D"))?;
        if targets.len() != l || mask.len() != l {
            return Err(Error::shape(
                "cross_entropy",
                format!("{l} rows, {} targets, {} mask", targets.len(), mask.len()),
            ));
        }
        if let Some(&t) = targets.iter().zip(mask).find(|(t, m)| **m && **t >= v).map(|p| p.0) {
            return Err(Error::Invalid(format!("target {t} outside vocabulary of {v}")));
        }
        let count = mask.iter().filter(|m| **m).count();
        if count == 0 {
            return Err(Error::Invalid("cross_entropy with empty mask".into()));
        }
        let logp = kernels::log_softmax_rows(self.value(logits), v);
        let mut total = 0.0;
        for i in (0..l).filter(|&i| mask[i]) {
            total -= logp[i * v + targets[i]];
        }
        let probs = logp.iter().map(|x| x.exp()).collect();
        let rg = self.rg(logits);
        Ok(self.push(
            vec![],
            vec![total / count as f64],
            rg,
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                mask: mask.to_vec(),
                probs,
                count,
            },
        ))
    }

    /// Mean over masked-in rows of `Σ_v p·(log p − log q)`. The teacher is
    /// plain data, so gradients reach only the student log-probabilities.
    pub fn kl_div(&mut self, teacher_probs: &Tensor, student_log_probs: Var, mask: &[bool]) -> Result<Var> {
        if teacher_probs.shape() != self.shape(student_log_probs) {
            return Err(Error::shape(
                "kl_div",
                format!(
                    "teacher {:?} vs student {:?}",
                    teacher_probs.shape(),
                    self.shape(student_log_probs)
                ),
            ));
        }
        let v = teacher_probs.cols();
        let l = teacher_probs.rows();
        if mask.len() != l {
            return Err(Error::shape("kl_div", format!("{l} rows, {} mask", mask.len())));
        }
        for (i, row) in teacher_probs.data().chunks_exact(v.max(1)).enumerate() {
            let s: f64 = row.iter().sum();
            if (s - 1.0).abs() > 1e-9 || row.iter().any(|p| *p < 0.0) {
                return Err(Error::Invalid(format!(
                    "teacher row {i} is not a distribution (sum {s})"
                )));
            }
        }
        let count = mask.iter().filter(|m| **m).count();
        if count == 0 {
            return Err(Error::Invalid("kl_div with empty mask".into()));
        }
        let q = self.value(student_log_probs);
        let p = teacher_probs.data();
        let mut total = 0.0;
        for i in (0..l).filter(|&i| mask[i]) {
            for j in i * v..(i + 1) * v {
                if p[j] > 0.0 {
                    total += p[j] * (p[j].ln() - q[j]);
                }
            }
        }
        let rg = self.rg(student_log_probs);
        Ok(self.push(
            vec![],
            vec![total / count as f64],
            rg,
            Op::KlDiv {
                student: student_log_probs,
                teacher: p.to_vec(),
                mask: mask.to_vec(),
                count,
            },
        ))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).iter().sum();
        let rg = self.rg(x);
        self.push(vec![], vec![s], rg, Op::Sum { x })
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.value(x).len().max(1) as f64;
        let s = self.value(x).iter().sum::<f64>() / n;
        let rg = self.rg(x);
        self.push(vec![], vec![s], rg, Op::Mean { x })
    }

    /// Gradients of the scalar `loss` with respect to every node that
    /// tracks them.
    pub fn backward(&self, loss: Var) -> Result<Grads> {
        if self.nodes[loss.0].value.len() != 1 {
            return Err(Error::shape("backward", "loss must be a scalar"));
        }
        if !self.nodes[loss.0].value[0].is_finite() {
            return Err(Error::NonFinite("loss".into()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);
        for idx in (0..=loss.0).rev() {
            let Some(gout) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            self.propagate(node, &gout, &mut grads);
            grads[idx] = Some(gout);
        }
        Ok(Grads { grads })
    }

    fn accumulate(&self, grads: &mut [Option<Vec<f64>>], v: Var, f: impl FnOnce(&mut [f64])) {
        if !self.rg(v) {
            return;
        }
        let slot = grads[v.0].get_or_insert_with(|| vec![0.0; self.nodes[v.0].value.len()]);
        f(slot);
    }

    fn propagate(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        match &node.op {
            Op::Leaf => {}
            Op::MatMul { a, b } => {
                let (m, k) = mat_dims(self.shape(*a)).unwrap();
                let n = node.shape[1];
                let (av, bv) = (self.value(*a), self.value(*b));
                // dA = dC·Bᵀ, dB = Aᵀ·dC
                self.accumulate(grads, *a, |ga| {
                    gemm(m, n, k, g, View::row_major(n), bv, View::transposed(n), 1.0, ga, View::row_major(k))
                });
                self.accumulate(grads, *b, |gb| {
                    gemm(k, m, n, av, View::transposed(k), g, View::row_major(n), 1.0, gb, View::row_major(n))
                });
            }
            Op::Add { a, b } => {
                for v in [*a, *b] {
                    self.accumulate(grads, v, |gx| gx.iter_mut().zip(g).for_each(|(x, y)| *x += y));
                }
            }
            Op::Mul { a, b } => {
                let (av, bv) = (self.value(*a), self.value(*b));
                self.accumulate(grads, *a, |ga| {
                    for i in 0..ga.len() {
                        ga[i] += g[i] * bv[i];
                    }
                });
                self.accumulate(grads, *b, |gb| {
                    for i in 0..gb.len() {
                        gb[i] += g[i] * av[i];
                    }
                });
            }
            Op::AddRow { x, row } => {
                let n = last_dim(&node.shape).max(1);
                self.accumulate(grads, *x, |gx| gx.iter_mut().zip(g).for_each(|(a, b)| *a += b));
                self.accumulate(grads, *row, |gr| {
                    for chunk in g.chunks_exact(n) {
                        gr.iter_mut().zip(chunk).for_each(|(a, b)| *a += b);
                    }
                });
            }
            Op::Scale { x, s } => {
                self.accumulate(grads, *x, |gx| gx.iter_mut().zip(g).for_each(|(a, b)| *a += s * b));
            }
            Op::Gelu { x } => {
                let xv = self.value(*x);
                self.accumulate(grads, *x, |gx| {
                    for i in 0..gx.len() {
                        let v = xv[i];
                        gx[i] += g[i] * (kernels::normal_cdf(v) + v * kernels::normal_pdf(v));
                    }
                });
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            } => {
                let d = last_dim(&node.shape);
                let gv = self.value(*gain);
                self.accumulate(grads, *gain, |gg| {
                    for (gr, hr) in g.chunks_exact(d).zip(xhat.chunks_exact(d)) {
                        for j in 0..d {
                            gg[j] += gr[j] * hr[j];
                        }
                    }
                });
                self.accumulate(grads, *bias, |gb| {
                    for gr in g.chunks_exact(d) {
                        gb.iter_mut().zip(gr).for_each(|(a, b)| *a += b);
                    }
                });
                self.accumulate(grads, *x, |gx| {
                    for (r, rs) in rstd.iter().enumerate() {
                        let gr = &g[r * d..(r + 1) * d];
                        let hr = &xhat[r * d..(r + 1) * d];
                        let mut mean_dh = 0.0;
                        let mut mean_dhh = 0.0;
                        for j in 0..d {
                            let dh = gr[j] * gv[j];
                            mean_dh += dh;
                            mean_dhh += dh * hr[j];
                        }
                        mean_dh /= d as f64;
                        mean_dhh /= d as f64;
                        for j in 0..d {
                            let dh = gr[j] * gv[j];
                            gx[r * d + j] += rs * (dh - mean_dh - hr[j] * mean_dhh);
                        }
                    }
                });
            }
            Op::Gather { table, ids } => {
                let d = node.shape[1];
                self.accumulate(grads, *table, |gt| {
                    for (k, &i) in ids.iter().enumerate() {
                        gt[i * d..(i + 1) * d]
                            .iter_mut()
                            .zip(&g[k * d..(k + 1) * d])
                            .for_each(|(a, b)| *a += b);
                    }
                });
            }
            Op::ConcatRows { parts } => {
                let mut offset = 0;
                for &p in parts {
                    let n = self.nodes[p.0].value.len();
                    self.accumulate(grads, p, |gp| {
                        gp.iter_mut()
                            .zip(&g[offset..offset + n])
                            .for_each(|(a, b)| *a += b)
                    });
                    offset += n;
                }
            }
            Op::CausalAttention { qkv, heads, probs } => {
                let (l, w) = mat_dims(self.shape(*qkv)).unwrap();
                let d = w / 3;
                let dh = d / heads;
                let scale = 1.0 / (dh as f64).sqrt();
                let src = self.value(*qkv);
                let mut dp = vec![0.0; l * l];
                self.accumulate(grads, *qkv, |gq| {
                    for h in 0..*heads {
                        let p = &probs[h * l * l..(h + 1) * l * l];
                        let go = View { offset: h * dh, rs: d, cs: 1 };
                        // dV = Pᵀ·dO
                        gemm(l, l, dh, p, View::transposed(l), g, go, 1.0, gq, View { offset: 2 * d + h * dh, rs: w, cs: 1 });
                        // dP = dO·Vᵀ
                        gemm(l, dh, l, g, go, src, View { offset: 2 * d + h * dh, rs: 1, cs: w }, 0.0, &mut dp, View::row_major(l));
                        for i in 0..l {
                            let pr = &p[i * l..(i + 1) * l];
                            let dr = &mut dp[i * l..(i + 1) * l];
                            let dot: f64 = pr[..=i].iter().zip(&dr[..=i]).map(|(a, b)| a * b).sum();
                            for j in 0..=i {
                                dr[j] = scale * pr[j] * (dr[j] - dot);
                            }
                            dr[i + 1..].fill(0.0);
                        }
                        // dQ = dS·K, dK = dSᵀ·Q
                        gemm(l, l, dh, &dp, View::row_major(l), src, View { offset: d + h * dh, rs: w, cs: 1 }, 1.0, gq, View { offset: h * dh, rs: w, cs: 1 });
                        gemm(l, l, dh, &dp, View::transposed(l), src, View { offset: h * dh, rs: w, cs: 1 }, 1.0, gq, View { offset: d + h * dh, rs: w, cs: 1 });
                    }
                });
            }
            Op::Softmax { x } => {
                let d = last_dim(&node.shape);
                let y = &node.value;
                self.accumulate(grads, *x, |gx| {
                    for r in 0..y.len() / d.max(1) {
                        let yr = &y[r * d..(r + 1) * d];
                        let gr = &g[r * d..(r + 1) * d];
                        let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                        for j in 0..d {
                            gx[r * d + j] += yr[j] * (gr[j] - dot);
                        }
                    }
                });
            }
            Op::LogSoftmax { x } => {
                let d = last_dim(&node.shape);
                let y = &node.value;
                self.accumulate(grads, *x, |gx| {
                    for r in 0..y.len() / d.max(1) {
                        let gr = &g[r * d..(r + 1) * d];
                        let s: f64 = gr.iter().sum();
                        for j in 0..d {
                            gx[r * d + j] += gr[j] - y[r * d + j].exp() * s;
                        }
                    }
                });
            }
            Op::CrossEntropy {
                logits,
                targets,
                mask,
                probs,
                count,
            } => {
                let v = self.shape(*logits)[1];
                let scale = g[0] / *count as f64;
                self.accumulate(grads, *logits, |gl| {
                    for i in (0..mask.len()).filter(|&i| mask[i]) {
                        for j in 0..v {
                            gl[i * v + j] += scale * probs[i * v + j];
                        }
                        gl[i * v + targets[i]] -= scale;
                    }
                });
            }
            Op::KlDiv {
                student,
                teacher,
                mask,
                count,
            } => {
                let v = last_dim(self.shape(*student));
                let scale = g[0] / *count as f64;
                self.accumulate(grads, *student, |gs| {
                    for i in (0..mask.len()).filter(|&i| mask[i]) {
                        for j in i * v..(i + 1) * v {
                            gs[j] -= scale * teacher[j];
                        }
                    }
                });
            }
            Op::Sum { x } => {
                self.accumulate(grads, *x, |gx| gx.iter_mut().for_each(|a| *a += g[0]));
            }
            Op::Mean { x } => {
                let n = self.nodes[x.0].value.len().max(1) as f64;
                self.accumulate(grads, *x, |gx| gx.iter_mut().for_each(|a| *a += g[0] / n));
            }
        }
    }
}
