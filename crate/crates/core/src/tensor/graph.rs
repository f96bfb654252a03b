use std::sync::Arc;

use super::kernels;
use super::Tensor;
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

/// Packing of a batch of sequences for the fused attention op.
///
/// Rows of the q/k/v matrices are `batch·seq` positions (example-major);
/// columns are `heads·head_dim` with head `h` owning columns
/// `h·head_dim..(h+1)·head_dim`.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionLayout {
    pub batch: usize,
    pub seq: usize,
    pub heads: usize,
    pub head_dim: usize,
    /// `true` where a key position may be attended to (length `batch·seq`).
    pub key_mask: Vec<bool>,
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddRowVector(Var, Var),
    Relu(Var),
    SoftmaxRows(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    GatherRows {
        table: Var,
        rows: Vec<usize>,
    },
    SliceCols {
        x: Var,
        start: usize,
    },
    ConcatCols(Vec<Var>),
    Sum(Var),
    Mean(Var),
    Attention {
        q: Var,
        k: Var,
        v: Var,
        layout: Arc<AttentionLayout>,
        probs: Vec<f64>,
    },
    CrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        probs: Vec<f64>,
    },
    SoftCrossEntropy {
        student: Var,
        target: Vec<f64>,
        student_probs: Vec<f64>,
        temperature: f64,
    },
    MaskedMse {
        a: Var,
        b: Var,
        row_mask: Vec<bool>,
        denom: f64,
    },
    Dropout {
        x: Var,
        scale_mask: Vec<f64>,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Append-only tape of operations. Nodes are stored in creation order, which
/// is a topological order, so backward is a single reverse sweep.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Gradients produced by [`Graph::backward`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    /// dLoss/dVar; zero when `var` does not influence the loss.
    pub fn wrt(&self, var: Var) -> Tensor {
        let shape = &self.shapes[var.0];
        match &self.grads[var.0] {
            Some(g) => Tensor::new(shape.clone(), g.clone()).expect("gradient shape"),
            None => Tensor::zeros(shape),
        }
    }

    pub fn is_reached(&self, var: Var) -> bool {
        self.grads[var.0].is_some()
    }
}

fn dim_err(op: &'static str, a: &Tensor, b: &Tensor) -> Error {
    Error::Dimension {
        op,
        left: a.shape().to_vec(),
        right: b.shape().to_vec(),
    }
}

fn check_finite(op: &'static str, data: &[f64]) -> Result<()> {
    if data.iter().any(|x| x.is_nan()) {
        return Err(Error::Numeric(format!("{op}: NaN encountered")));
    }
    Ok(())
}

fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for x in row.iter_mut() {
        *x = (*x - max).exp();
        sum += *x;
    }
    for x in row.iter_mut() {
        *x /= sum;
    }
}

/// Row softmax helper shared with loss code outside the graph.
pub(crate) fn softmax_vec(logits: &[f64], temperature: f64) -> Vec<f64> {
    let mut out: Vec<f64> = logits.iter().map(|&z| z / temperature).collect();
    softmax_in_place(&mut out);
    out
}

fn log_softmax(row: &[f64]) -> Vec<f64> {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = row.iter().map(|&x| (x - max).exp()).sum::<f64>().ln() + max;
    row.iter().map(|&x| x - lse).collect()
}

/// SplitMix64 finalizer used as a counter-based generator.
fn mix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
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

    pub fn requires_grad(&self, v: Var) -> bool {
        self.rg(v)
    }

    /// Records a trainable leaf.
    pub fn param(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// Records a leaf that never receives gradients.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    pub fn leaf(&mut self, t: Tensor, requires_grad: bool) -> Var {
        self.push(t, Op::Leaf, requires_grad)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        let out = av.matmul(bv)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::MatMul(a, b), rg))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).transpose()?;
        let rg = self.rg(a);
        Ok(self.push(out, Op::Transpose(a), rg))
    }

    fn zip_same(&self, op: &'static str, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape() != bv.shape() {
            return Err(dim_err(op, av, bv));
        }
        let data = av.data().iter().zip(bv.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::new(av.shape().to_vec(), data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip_same("add", a, b, |x, y| x + y)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip_same("sub", a, b, |x, y| x - y)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::Sub(a, b), rg))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip_same("mul", a, b, |x, y| x * y)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::Mul(a, b), rg))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let out = self.value(a).map(|x| x * s);
        let rg = self.rg(a);
        self.push(out, Op::Scale(a, s), rg)
    }

    /// Adds a length-`n` vector to every row of an `m×n` matrix.
    pub fn add_row_vector(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (xv, bv) = (self.value(x), self.value(bias));
        let n = xv.cols();
        if bv.numel() != n || bv.shape().len() != 1 {
            return Err(dim_err("add_row_vector", xv, bv));
        }
        let mut out = xv.clone();
        for row in out.data_mut().chunks_mut(n) {
            for (o, &b) in row.iter_mut().zip(bv.data()) {
                *o += b;
            }
        }
        let rg = self.rg(x) || self.rg(bias);
        Ok(self.push(out, Op::AddRowVector(x, bias), rg))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| if v > 0.0 { v } else { 0.0 });
        let rg = self.rg(x);
        self.push(out, Op::Relu(x), rg)
    }

    /// Softmax over the last dimension, stabilized by row-max subtraction.
    pub fn softmax_rows(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        check_finite("softmax_rows", xv.data())?;
        let n = xv.cols();
        let mut out = xv.clone();
        for row in out.data_mut().chunks_mut(n) {
            softmax_in_place(row);
        }
        check_finite("softmax_rows", out.data())?;
        let rg = self.rg(x);
        Ok(self.push(out, Op::SoftmaxRows(x), rg))
    }

    /// Normalizes each row over the last dimension with population variance,
    /// then applies `gamma ⊙ x̂ + beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let (xv, gv, bv) = (self.value(x), self.value(gamma), self.value(beta));
        let d = xv.cols();
        if gv.numel() != d {
            return Err(dim_err("layer_norm", xv, gv));
        }
        if bv.numel() != d {
            return Err(dim_err("layer_norm", xv, bv));
        }
        let rows = xv.rows();
        let mut xhat = vec![0.0; rows * d];
        let mut inv_std = vec![0.0; rows];
        let mut out = vec![0.0; rows * d];
        for r in 0..rows {
            let row = &xv.data()[r * d..(r + 1) * d];
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_std[r] = is;
            for j in 0..d {
                let h = (row[j] - mean) * is;
                xhat[r * d + j] = h;
                out[r * d + j] = gv.data()[j] * h + bv.data()[j];
            }
        }
        check_finite("layer_norm", &out)?;
        let out = Tensor::new(xv.shape().to_vec(), out)?;
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        Ok(self.push(
            out,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
            rg,
        ))
    }

    /// Row lookup: output row `i` is row `rows[i]` of `table`.
    pub fn gather_rows(&mut self, table: Var, rows: &[usize]) -> Result<Var> {
        let tv = self.value(table);
        let (m, n) = tv.require_matrix("gather_rows")?;
        if rows.is_empty() {
            return Err(Error::input("gather_rows: empty index list"));
        }
        if let Some(&bad) = rows.iter().find(|&&r| r >= m) {
            return Err(Error::input(format!("gather_rows: index {bad} out of range for {m} rows")));
        }
        let mut data = Vec::with_capacity(rows.len() * n);
        for &r in rows {
            data.extend_from_slice(tv.row(r));
        }
        let out = Tensor::new(vec![rows.len(), n], data)?;
        let rg = self.rg(table);
        Ok(self.push(
            out,
            Op::GatherRows {
                table,
                rows: rows.to_vec(),
            },
            rg,
        ))
    }

    /// Columns `start..start+width` of a matrix.
    pub fn slice_cols(&mut self, x: Var, start: usize, width: usize) -> Result<Var> {
        let xv = self.value(x);
        let (m, n) = xv.require_matrix("slice_cols")?;
        if width == 0 || start + width > n {
            return Err(Error::contract(format!(
                "slice_cols: range {start}..{} exceeds width {n}",
                start + width
            )));
        }
        let mut data = Vec::with_capacity(m * width);
        for r in 0..m {
            data.extend_from_slice(&xv.row(r)[start..start + width]);
        }
        let out = Tensor::new(vec![m, width], data)?;
        let rg = self.rg(x);
        Ok(self.push(out, Op::SliceCols { x, start }, rg))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::contract("concat_cols: no inputs"))?;
        let m = self.value(*first).require_matrix("concat_cols")?.0;
        let mut total = 0;
        for &p in parts {
            let (pm, pn) = self.value(p).require_matrix("concat_cols")?;
            if pm != m {
                return Err(dim_err("concat_cols", self.value(*first), self.value(p)));
            }
            total += pn;
        }
        let mut data = Vec::with_capacity(m * total);
        for r in 0..m {
            for &p in parts {
                data.extend_from_slice(self.value(p).row(r));
            }
        }
        let out = Tensor::new(vec![m, total], data)?;
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(out, Op::ConcatCols(parts.to_vec()), rg))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().sum();
        let rg = self.rg(x);
        self.push(Tensor::scalar(s), Op::Sum(x), rg)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let s = xv.data().iter().sum::<f64>() / xv.numel() as f64;
        let rg = self.rg(x);
        self.push(Tensor::scalar(s), Op::Mean(x), rg)
    }

    /// Inverted dropout with a counter-based mask: the keep decision for
    /// element `i` is a pure function of `(seed, stream, i)`.
    pub fn dropout(&mut self, x: Var, rate: f64, seed: u64, stream: u64) -> Result<Var> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::config(format!("dropout rate {rate} outside [0, 1)")));
        }
        if rate == 0.0 {
            return Ok(x);
        }
        let keep_scale = 1.0 / (1.0 - rate);
        let base = mix64(seed ^ mix64(stream));
        let xv = self.value(x);
        let scale_mask: Vec<f64> = (0..xv.numel() as u64)
            .map(|i| {
                let u = (mix64(base.wrapping_add(i)) >> 11) as f64 / (1u64 << 53) as f64;
                if u < rate {
                    0.0
                } else {
                    keep_scale
                }
            })
            .collect();
        let data = xv.data().iter().zip(&scale_mask).map(|(a, m)| a * m).collect();
        let out = Tensor::new(xv.shape().to_vec(), data)?;
        let rg = self.rg(x);
        Ok(self.push(out, Op::Dropout { x, scale_mask }, rg))
    }

    /// Multi-head scaled dot-product attention over packed sequences.
    ///
    /// Equivalent to running, for every example and head,
    /// `softmax(Q_h K_hᵀ / √head_dim) V_h` and concatenating heads in index
    /// order. Masked keys receive a score of −∞.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, layout: Arc<AttentionLayout>) -> Result<Var> {
        let AttentionLayout {
            batch,
            seq,
            heads,
            head_dim,
            ..
        } = *layout;
        let width = heads * head_dim;
        for var in [q, k, v] {
            let t = self.value(var);
            let (m, n) = t.require_matrix("attention")?;
            if m != batch * seq || n != width {
                return Err(Error::Dimension {
                    op: "attention",
                    left: t.shape().to_vec(),
                    right: vec![batch * seq, width],
                });
            }
        }
        if layout.key_mask.len() != batch * seq {
            return Err(Error::contract("attention: key mask length != batch·seq"));
        }
        if heads == 0 {
            return Err(Error::contract("attention: a layer must retain at least one head"));
        }
        for b in 0..batch {
            if !layout.key_mask[b * seq..(b + 1) * seq].iter().any(|&m| m) {
                return Err(Error::input(format!("attention: example {b} has every position masked")));
            }
        }
        let scale = 1.0 / (head_dim as f64).sqrt();
        let (qd, kd, vd) = (self.value(q).data(), self.value(k).data(), self.value(v).data());
        let mut probs = vec![0.0; batch * heads * seq * seq];
        let mut out = vec![0.0; batch * seq * width];
        for b in 0..batch {
            for h in 0..heads {
                let col = h * head_dim;
                let pbase = (b * heads + h) * seq * seq;
                for i in 0..seq {
                    let qrow = &qd[(b * seq + i) * width + col..][..head_dim];
                    let prow = &mut probs[pbase + i * seq..pbase + (i + 1) * seq];
                    for j in 0..seq {
                        prow[j] = if layout.key_mask[b * seq + j] {
                            let krow = &kd[(b * seq + j) * width + col..][..head_dim];
                            kernels::dot(qrow, krow) * scale
                        } else {
                            f64::NEG_INFINITY
                        };
                    }
                    check_finite("attention", prow)?;
                    softmax_in_place(prow);
                    let orow = &mut out[(b * seq + i) * width + col..][..head_dim];
                    for j in 0..seq {
                        let p = prow[j];
                        if p == 0.0 {
                            continue;
                        }
                        let vrow = &vd[(b * seq + j) * width + col..][..head_dim];
                        for (o, &vv) in orow.iter_mut().zip(vrow) {
                            *o += p * vv;
                        }
                    }
                }
            }
        }
        let out = Tensor::new(vec![batch * seq, width], out)?;
        let rg = self.rg(q) || self.rg(k) || self.rg(v);
        Ok(self.push(
            out,
            Op::Attention {
                q,
                k,
                v,
                layout,
                probs,
            },
            rg,
        ))
    }

    /// Mean over rows of `−log softmax(logits)[label]`.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let lv = self.value(logits);
        let (b, c) = lv.require_matrix("cross_entropy")?;
        if labels.len() != b {
            return Err(Error::Dimension {
                op: "cross_entropy",
                left: lv.shape().to_vec(),
                right: vec![labels.len()],
            });
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= c) {
            return Err(Error::input(format!("label {bad} out of range for {c} classes")));
        }
        let mut probs = Vec::with_capacity(b * c);
        let mut loss = 0.0;
        for (r, &label) in labels.iter().enumerate() {
            let ls = log_softmax(lv.row(r));
            loss -= ls[label];
            probs.extend(ls.iter().map(|x| x.exp()));
        }
        loss /= b as f64;
        check_finite("cross_entropy", &[loss])?;
        let rg = self.rg(logits);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
            rg,
        ))
    }

    /// Mean over rows of `−softmax(t/τ) · log softmax(s/τ)`. Gradients flow
    /// only into `student`.
    pub fn soft_cross_entropy(&mut self, teacher: Var, student: Var, temperature: f64) -> Result<Var> {
        if !temperature.is_finite() || temperature <= 0.0 {
            return Err(Error::config(format!("temperature must be positive, got {temperature}")));
        }
        let (tv, sv) = (self.value(teacher), self.value(student));
        if tv.shape() != sv.shape() {
            return Err(dim_err("soft_cross_entropy", tv, sv));
        }
        let (b, c) = sv.require_matrix("soft_cross_entropy")?;
        let mut target = Vec::with_capacity(b * c);
        let mut student_probs = Vec::with_capacity(b * c);
        let mut loss = 0.0;
        for r in 0..b {
            let pt = softmax_vec(tv.row(r), temperature);
            let scaled: Vec<f64> = sv.row(r).iter().map(|&z| z / temperature).collect();
            let ls = log_softmax(&scaled);
            loss -= pt.iter().zip(&ls).map(|(p, l)| p * l).sum::<f64>();
            student_probs.extend(ls.iter().map(|x| x.exp()));
            target.extend(pt);
        }
        loss /= b as f64;
        check_finite("soft_cross_entropy", &[loss])?;
        let rg = self.rg(student);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::SoftCrossEntropy {
                student,
                target,
                student_probs,
                temperature,
            },
            rg,
        ))
    }

    /// Mean squared difference over the rows selected by `row_mask` and all
    /// columns: `Σ_{r∈mask} Σ_j (a−b)² / (|mask|·cols)`.
    pub fn masked_mse(&mut self, a: Var, b: Var, row_mask: &[bool]) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape() != bv.shape() {
            return Err(dim_err("masked_mse", av, bv));
        }
        let d = av.cols();
        if row_mask.len() != av.rows() {
            return Err(Error::contract("masked_mse: row mask length != row count"));
        }
        let kept = row_mask.iter().filter(|&&m| m).count();
        if kept == 0 {
            return Err(Error::input("masked_mse: every row masked"));
        }
        let denom = (kept * d) as f64;
        let mut total = 0.0;
        for (r, &m) in row_mask.iter().enumerate() {
            if m {
                total += av.row(r).iter().zip(bv.row(r)).map(|(x, y)| (x - y) * (x - y)).sum::<f64>();
            }
        }
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(
            Tensor::scalar(total / denom),
            Op::MaskedMse {
                a,
                b,
                row_mask: row_mask.to_vec(),
                denom,
            },
            rg,
        ))
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lv = self.value(loss);
        if lv.numel() != 1 {
            return Err(Error::contract(format!(
                "backward requires a scalar loss, got shape {:?}",
                lv.shape()
            )));
        }
        let n = loss.0 + 1;
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);

        for idx in (0..n).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.propagate(&node.op, &node.value, &g, &mut grads);
            grads[idx] = Some(g);
        }
        let shapes = self.nodes.iter().map(|n| n.value.shape().to_vec()).collect();
        Ok(Gradients { grads, shapes })
    }

    fn propagate(&self, op: &Op, out: &Tensor, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let mut acc = |v: Var, f: &mut dyn FnMut(&mut [f64])| {
            if !self.nodes[v.0].requires_grad {
                return;
            }
            let slot = grads[v.0].get_or_insert_with(|| vec![0.0; self.nodes[v.0].value.numel()]);
            f(slot);
        };
        match op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (m, k) = (av.shape()[0], av.shape()[1]);
                let n = bv.shape()[1];
                acc(*a, &mut |ga| kernels::matmul_nt_acc(g, bv.data(), ga, m, k, n));
                acc(*b, &mut |gb| kernels::matmul_tn_acc(av.data(), g, gb, m, k, n));
            }
            Op::Transpose(a) => {
                let (r, c) = (out.shape()[0], out.shape()[1]);
                acc(*a, &mut |ga| {
                    for i in 0..r {
                        for j in 0..c {
                            ga[j * r + i] += g[i * c + j];
                        }
                    }
                });
            }
            Op::Add(a, b) => {
                acc(*a, &mut |ga| ga.iter_mut().zip(g).for_each(|(x, y)| *x += y));
                acc(*b, &mut |gb| gb.iter_mut().zip(g).for_each(|(x, y)| *x += y));
            }
            Op::Sub(a, b) => {
                acc(*a, &mut |ga| ga.iter_mut().zip(g).for_each(|(x, y)| *x += y));
                acc(*b, &mut |gb| gb.iter_mut().zip(g).for_each(|(x, y)| *x -= y));
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                acc(*a, &mut |ga| {
                    for i in 0..ga.len() {
                        ga[i] += g[i] * bv[i];
                    }
                });
                acc(*b, &mut |gb| {
                    for i in 0..gb.len() {
                        gb[i] += g[i] * av[i];
                    }
                });
            }
            Op::Scale(a, s) => {
                acc(*a, &mut |ga| ga.iter_mut().zip(g).for_each(|(x, y)| *x += s * y));
            }
            Op::AddRowVector(x, bias) => {
                acc(*x, &mut |gx| gx.iter_mut().zip(g).for_each(|(a, b)| *a += b));
                let n = out.cols();
                acc(*bias, &mut |gb| {
                    for row in g.chunks(n) {
                        for (a, b) in gb.iter_mut().zip(row) {
                            *a += b;
                        }
                    }
                });
            }
            Op::Relu(x) => {
                let xv = self.value(*x).data();
                acc(*x, &mut |gx| {
                    for i in 0..gx.len() {
                        if xv[i] > 0.0 {
                            gx[i] += g[i];
                        }
                    }
                });
            }
            Op::SoftmaxRows(x) => {
                let n = out.cols();
                let y = out.data();
                acc(*x, &mut |gx| {
                    for r in 0..y.len() / n {
                        let yr = &y[r * n..(r + 1) * n];
                        let gr = &g[r * n..(r + 1) * n];
                        let dot = kernels::dot(yr, gr);
                        for j in 0..n {
                            gx[r * n + j] += yr[j] * (gr[j] - dot);
                        }
                    }
                });
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let d = out.cols();
                let rows = inv_std.len();
                let gam = self.value(*gamma).data();
                acc(*x, &mut |gx| {
                    let mut dxhat = vec![0.0; d];
                    for r in 0..rows {
                        let gr = &g[r * d..(r + 1) * d];
                        let hr = &xhat[r * d..(r + 1) * d];
                        let mut s1 = 0.0;
                        let mut s2 = 0.0;
                        for j in 0..d {
                            dxhat[j] = gr[j] * gam[j];
                            s1 += dxhat[j];
                            s2 += dxhat[j] * hr[j];
                        }
                        let k = inv_std[r] / d as f64;
                        for j in 0..d {
                            gx[r * d + j] += k * (d as f64 * dxhat[j] - s1 - hr[j] * s2);
                        }
                    }
                });
                acc(*gamma, &mut |gg| {
                    for r in 0..rows {
                        for j in 0..d {
                            gg[j] += g[r * d + j] * xhat[r * d + j];
                        }
                    }
                });
                acc(*beta, &mut |gb| {
                    for row in g.chunks(d) {
                        for (a, b) in gb.iter_mut().zip(row) {
                            *a += b;
                        }
                    }
                });
            }
            Op::GatherRows { table, rows } => {
                let n = out.cols();
                acc(*table, &mut |gt| {
                    for (i, &r) in rows.iter().enumerate() {
                        for j in 0..n {
                            gt[r * n + j] += g[i * n + j];
                        }
                    }
                });
            }
            Op::SliceCols { x, start } => {
                let w = out.cols();
                let n = self.value(*x).cols();
                acc(*x, &mut |gx| {
                    for r in 0..out.rows() {
                        for j in 0..w {
                            gx[r * n + start + j] += g[r * w + j];
                        }
                    }
                });
            }
            Op::ConcatCols(parts) => {
                let total = out.cols();
                let mut offset = 0;
                for &p in parts {
                    let w = self.value(p).cols();
                    acc(p, &mut |gp| {
                        for r in 0..out.rows() {
                            for j in 0..w {
                                gp[r * w + j] += g[r * total + offset + j];
                            }
                        }
                    });
                    offset += w;
                }
            }
            Op::Sum(x) => {
                acc(*x, &mut |gx| gx.iter_mut().for_each(|a| *a += g[0]));
            }
            Op::Mean(x) => {
                let n = self.value(*x).numel() as f64;
                acc(*x, &mut |gx| gx.iter_mut().for_each(|a| *a += g[0] / n));
            }
            Op::Dropout { x, scale_mask } => {
                acc(*x, &mut |gx| {
                    for i in 0..gx.len() {
                        gx[i] += g[i] * scale_mask[i];
                    }
                });
            }
            Op::Attention {
                q,
                k,
                v,
                layout,
                probs,
            } => self.attention_backward(*q, *k, *v, layout, probs, g, &mut acc),
            Op::CrossEntropy { logits, labels, probs } => {
                let c = self.value(*logits).cols();
                let b = labels.len() as f64;
                acc(*logits, &mut |gl| {
                    for (r, &label) in labels.iter().enumerate() {
                        for j in 0..c {
                            let onehot = if j == label { 1.0 } else { 0.0 };
                            gl[r * c + j] += g[0] * (probs[r * c + j] - onehot) / b;
                        }
                    }
                });
            }
            Op::SoftCrossEntropy {
                student,
                target,
                student_probs,
                temperature,
            } => {
                let sv = self.value(*student);
                let b = sv.rows() as f64;
                acc(*student, &mut |gs| {
                    for i in 0..gs.len() {
                        gs[i] += g[0] * (student_probs[i] - target[i]) / (temperature * b);
                    }
                });
            }
            Op::MaskedMse { a, b, row_mask, denom } => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let d = av.cols();
                let coef = 2.0 * g[0] / denom;
                for (var, sign) in [(*a, 1.0), (*b, -1.0)] {
                    acc(var, &mut |gv| {
                        for (r, &m) in row_mask.iter().enumerate() {
                            if !m {
                                continue;
                            }
                            for j in 0..d {
                                let i = r * d + j;
                                gv[i] += sign * coef * (av.data()[i] - bv.data()[i]);
                            }
                        }
                    });
                }
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn attention_backward(
        &self,
        q: Var,
        k: Var,
        v: Var,
        layout: &AttentionLayout,
        probs: &[f64],
        g: &[f64],
        acc: &mut dyn FnMut(Var, &mut dyn FnMut(&mut [f64])),
    ) {
        let AttentionLayout {
            batch,
            seq,
            heads,
            head_dim,
            ..
        } = *layout;
        let width = heads * head_dim;
        let scale = 1.0 / (head_dim as f64).sqrt();
        let (qd, kd, vd) = (self.value(q).data(), self.value(k).data(), self.value(v).data());

        // dScores for every (example, head), pre-scaled.
        let mut dscores = vec![0.0; probs.len()];
        let mut dp = vec![0.0; seq];
        for b in 0..batch {
            for h in 0..heads {
                let col = h * head_dim;
                let pbase = (b * heads + h) * seq * seq;
                for i in 0..seq {
                    let grow = &g[(b * seq + i) * width + col..][..head_dim];
                    let prow = &probs[pbase + i * seq..pbase + (i + 1) * seq];
                    let mut weighted = 0.0;
                    for j in 0..seq {
                        dp[j] = if prow[j] == 0.0 {
                            0.0
                        } else {
                            kernels::dot(grow, &vd[(b * seq + j) * width + col..][..head_dim])
                        };
                        weighted += prow[j] * dp[j];
                    }
                    for j in 0..seq {
                        dscores[pbase + i * seq + j] = prow[j] * (dp[j] - weighted) * scale;
                    }
                }
            }
        }

        acc(v, &mut |gv| {
            for b in 0..batch {
                for h in 0..heads {
                    let col = h * head_dim;
                    let pbase = (b * heads + h) * seq * seq;
                    for i in 0..seq {
                        let grow = &g[(b * seq + i) * width + col..][..head_dim];
                        for j in 0..seq {
                            let p = probs[pbase + i * seq + j];
                            if p == 0.0 {
                                continue;
                            }
                            let gvrow = &mut gv[(b * seq + j) * width + col..][..head_dim];
                            for (o, &x) in gvrow.iter_mut().zip(grow) {
                                *o += p * x;
                            }
                        }
                    }
                }
            }
        });
        acc(q, &mut |gq| {
            for b in 0..batch {
                for h in 0..heads {
                    let col = h * head_dim;
                    let pbase = (b * heads + h) * seq * seq;
                    for i in 0..seq {
                        let gqrow = &mut gq[(b * seq + i) * width + col..][..head_dim];
                        for j in 0..seq {
                            let ds = dscores[pbase + i * seq + j];
                            if ds == 0.0 {
                                continue;
                            }
                            let krow = &kd[(b * seq + j) * width + col..][..head_dim];
                            for (o, &x) in gqrow.iter_mut().zip(krow) {
                                *o += ds * x;
                            }
                        }
                    }
                }
            }
        });
        acc(k, &mut |gk| {
            for b in 0..batch {
                for h in 0..heads {
                    let col = h * head_dim;
                    let pbase = (b * heads + h) * seq * seq;
                    for i in 0..seq {
                        let qrow = &qd[(b * seq + i) * width + col..][..head_dim];
                        for j in 0..seq {
                            let ds = dscores[pbase + i * seq + j];
                            if ds == 0.0 {
                                continue;
                            }
                            let gkrow = &mut gk[(b * seq + j) * width + col..][..head_dim];
                            for (o, &x) in gkrow.iter_mut().zip(qrow) {
                                *o += ds * x;
                            }
                        }
                    }
                }
            }
        });
    }
}
