use rand::Rng;

use super::kernels::{gelu, gelu_grad, gemm, permute};
use super::Tensor;
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
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
    BatchMatMul { a: Var, b: Var, transpose_b: bool },
    Transpose(Var),
    Permute { input: Var, perm: Vec<usize> },
    Reshape(Var),
    Concat { inputs: Vec<Var>, axis: usize },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale { input: Var, factor: f64 },
    AddRow { input: Var, row: Var },
    Gelu(Var),
    Relu(Var),
    Softmax(Var),
    LayerNorm {
        input: Var,
        gain: Var,
        bias: Var,
        normalized: Vec<f64>,
        inv_std: Vec<f64>,
    },
    GatherRows { table: Var, indices: Vec<usize> },
    Dropout { input: Var, mask: Vec<f64> },
    RowAffine { input: Var, scale: Vec<f64> },
    Sum(Var),
    Mean(Var),
    L1Loss { pred: Var, target: Vec<f64> },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    grad: Option<Vec<f64>>,
    requires_grad: bool,
    op: Op,
}

/// Layer-norm variance epsilon.
pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Linear record of executed ops.
///
/// Nodes are appended in execution order, so every op's inputs precede it and
/// a single reverse sweep visits each op exactly once.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
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

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(value, requires_grad, Op::Leaf)
    }

    /// A leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Gradient accumulated by the last [`Tape::backward`], if any reached `v`.
    pub fn grad(&self, v: Var) -> Option<Tensor> {
        let node = &self.nodes[v.0];
        node.grad
            .as_ref()
            .map(|g| Tensor::new(node.value.shape(), g.clone()).expect("grad shape"))
    }

    fn push(&mut self, value: Tensor, requires_grad: bool, op: Op) -> Var {
        self.nodes.push(Node {
            value,
            grad: None,
            requires_grad,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    fn push_checked(&mut self, name: &'static str, value: Tensor, inputs: &[Var], op: Op) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NonFinite { op: name });
        }
        let rg = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        Ok(self.push(value, rg, op))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa != sb {
            return Err(Error::dim(op, format!("{sa:?} vs {sb:?}")));
        }
        Ok(())
    }

    // ---- ops ----

    /// `[m×k] · [k×n] → [m×n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let [m, k] = self.value(a).dims2("matmul")?;
        let [k2, n] = self.value(b).dims2("matmul")?;
        if k != k2 {
            return Err(Error::dim(
                "matmul",
                format!("[{m}x{k}] x [{k2}x{n}]: inner dimensions differ"),
            ));
        }
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, self.value(a).data(), false, self.value(b).data(), false, &mut out, false);
        let value = Tensor::new(&[m, n], out)?;
        self.push_checked("matmul", value, &[a, b], Op::MatMul(a, b))
    }

    /// Batched product over the leading axis: `[g×m×k] · [g×k×n]`, or
    /// `[g×m×k] · [g×n×k]ᵀ` when `transpose_b`.
    pub fn batch_matmul(&mut self, a: Var, b: Var, transpose_b: bool) -> Result<Var> {
        let [g, m, k] = self.value(a).dims3("batch_matmul")?;
        let [g2, b1, b2] = self.value(b).dims3("batch_matmul")?;
        let (kb, n) = if transpose_b { (b2, b1) } else { (b1, b2) };
        if g != g2 || k != kb {
            return Err(Error::dim(
                "batch_matmul",
                format!("[{g}x{m}x{k}] with [{g2}x{b1}x{b2}] (transpose_b={transpose_b})"),
            ));
        }
        let mut out = vec![0.0; g * m * n];
        let (ad, bd) = (self.value(a).data(), self.value(b).data());
        for i in 0..g {
            gemm(
                m,
                k,
                n,
                &ad[i * m * k..(i + 1) * m * k],
                false,
                &bd[i * k * n..(i + 1) * k * n],
                transpose_b,
                &mut out[i * m * n..(i + 1) * m * n],
                false,
            );
        }
        let value = Tensor::new(&[g, m, n], out)?;
        self.push_checked("batch_matmul", value, &[a, b], Op::BatchMatMul { a, b, transpose_b })
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let value = self.value(a).transpose()?;
        self.push_checked("transpose", value, &[a], Op::Transpose(a))
    }

    /// General axis permutation: output axis `i` is input axis `perm[i]`.
    pub fn permute(&mut self, a: Var, perm: &[usize]) -> Result<Var> {
        let shape = self.value(a).shape().to_vec();
        let mut seen = vec![false; shape.len()];
        if perm.len() != shape.len() || !perm.iter().all(|&p| p < shape.len() && !std::mem::replace(&mut seen[p], true)) {
            return Err(Error::dim("permute", format!("{perm:?} is not a permutation of rank {}", shape.len())));
        }
        let (data, out_shape) = permute(self.value(a).data(), &shape, perm);
        let value = Tensor::new(&out_shape, data)?;
        self.push_checked("permute", value, &[a], Op::Permute { input: a, perm: perm.to_vec() })
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(a).reshape(shape)?;
        self.push_checked("reshape", value, &[a], Op::Reshape(a))
    }

    /// Concatenates along `axis`; all other axes must agree.
    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        let first = inputs.first().ok_or_else(|| Error::dim("concat", "no inputs"))?;
        let base = self.value(*first).shape().to_vec();
        if axis >= base.len() {
            return Err(Error::dim("concat", format!("axis {axis} out of range for rank {}", base.len())));
        }
        let mut total = 0;
        for v in inputs {
            let s = self.value(*v).shape();
            let compatible = s.len() == base.len()
                && s.iter().zip(&base).enumerate().all(|(i, (x, y))| i == axis || x == y);
            if !compatible {
                return Err(Error::dim("concat", format!("{s:?} incompatible with {base:?} on axis {axis}")));
            }
            total += s[axis];
        }
        let outer: usize = base[..axis].iter().product();
        let inner: usize = base[axis + 1..].iter().product();
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for v in inputs {
                let t = self.value(*v);
                let chunk = t.shape()[axis] * inner;
                data.extend_from_slice(&t.data()[o * chunk..(o + 1) * chunk]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        let value = Tensor::new(&shape, data)?;
        self.push_checked("concat", value, inputs, Op::Concat { inputs: inputs.to_vec(), axis })
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let value = zip_map(self.value(a), self.value(b), |x, y| x + y);
        self.push_checked("add", value, &[a, b], Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let value = zip_map(self.value(a), self.value(b), |x, y| x - y);
        self.push_checked("sub", value, &[a, b], Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let value = zip_map(self.value(a), self.value(b), |x, y| x * y);
        self.push_checked("mul", value, &[a, b], Op::Mul(a, b))
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Result<Var> {
        let value = self.value(a).map(|x| x * factor);
        self.push_checked("scale", value, &[a], Op::Scale { input: a, factor })
    }

    /// Adds a `[d]` row vector to every row of a `[…×d]` tensor.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let d = self.value(a).last_dim();
        let rs = self.value(row).shape();
        if rs != [d] {
            return Err(Error::dim("add_row", format!("row {rs:?} vs last axis {d}")));
        }
        let mut value = self.value(a).clone();
        let r = self.value(row).data();
        for chunk in value.data_mut().chunks_exact_mut(d.max(1)) {
            for (x, b) in chunk.iter_mut().zip(r) {
                *x += b;
            }
        }
        self.push_checked("add_row", value, &[a, row], Op::AddRow { input: a, row })
    }

    pub fn gelu(&mut self, a: Var) -> Result<Var> {
        let value = self.value(a).map(gelu);
        self.push_checked("gelu", value, &[a], Op::Gelu(a))
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        let value = self.value(a).map(|x| x.max(0.0));
        self.push_checked("relu", value, &[a], Op::Relu(a))
    }

    /// Softmax over the last axis, stabilised by subtracting the row max.
    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        let mut value = self.value(a).clone();
        let d = value.last_dim();
        if d > 0 {
            for row in value.data_mut().chunks_exact_mut(d) {
                softmax_in_place(row);
            }
        }
        self.push_checked("softmax", value, &[a], Op::Softmax(a))
    }

    /// Layer normalisation over the last axis with affine `gain`/`bias`.
    pub fn layer_norm(&mut self, a: Var, gain: Var, bias: Var) -> Result<Var> {
        let d = self.value(a).last_dim();
        if d == 0 {
            return Err(Error::dim("layer_norm", "last axis is empty"));
        }
        for p in [gain, bias] {
            if self.value(p).shape() != [d] {
                return Err(Error::dim(
                    "layer_norm",
                    format!("affine {:?} vs last axis {d}", self.value(p).shape()),
                ));
            }
        }
        let x = self.value(a);
        let rows = x.outer_len();
        let mut normalized = vec![0.0; x.len()];
        let mut inv_std = vec![0.0; rows];
        let mut out = vec![0.0; x.len()];
        let (g, b) = (self.value(gain).data(), self.value(bias).data());
        for r in 0..rows {
            let row = x.row(r);
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let is = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            inv_std[r] = is;
            for j in 0..d {
                let xh = (row[j] - mean) * is;
                normalized[r * d + j] = xh;
                out[r * d + j] = xh * g[j] + b[j];
            }
        }
        let value = Tensor::new(x.shape(), out)?;
        self.push_checked(
            "layer_norm",
            value,
            &[a, gain, bias],
            Op::LayerNorm { input: a, gain, bias, normalized, inv_std },
        )
    }

    /// Row lookup: output row `i` is `table[indices[i]]`.
    pub fn gather_rows(&mut self, table: Var, indices: &[usize]) -> Result<Var> {
        let [rows, d] = self.value(table).dims2("gather_rows")?;
        let t = self.value(table).data();
        let mut out = Vec::with_capacity(indices.len() * d);
        for &ix in indices {
            if ix >= rows {
                return Err(Error::Index { op: "gather_rows", index: ix, len: rows });
            }
            out.extend_from_slice(&t[ix * d..(ix + 1) * d]);
        }
        let value = Tensor::new(&[indices.len(), d], out)?;
        self.push_checked("gather_rows", value, &[table], Op::GatherRows { table, indices: indices.to_vec() })
    }

    /// Inverted dropout: zeroes each element with probability `p` and
    /// rescales survivors by `1/(1-p)`. `p == 0` records nothing.
    pub fn dropout<R: Rng + ?Sized>(&mut self, a: Var, p: f64, rng: &mut R) -> Result<Var> {
        if !(0.0..1.0).contains(&p) {
            return Err(Error::config("dropout", format!("{p} not in [0, 1)")));
        }
        if p == 0.0 {
            return Ok(a);
        }
        let keep = 1.0 / (1.0 - p);
        let mask: Vec<f64> = (0..self.value(a).len())
            .map(|_| if rng.random::<f64>() < p { 0.0 } else { keep })
            .collect();
        let mut value = self.value(a).clone();
        for (x, m) in value.data_mut().iter_mut().zip(&mask) {
            *x *= m;
        }
        self.push_checked("dropout", value, &[a], Op::Dropout { input: a, mask })
    }

    /// `y[r, :] = x[r, :]·scale[r] + shift[r]` with constant per-row
    /// coefficients over the `[outer_len × last_dim]` view.
    pub fn row_affine(&mut self, a: Var, scale: &[f64], shift: &[f64]) -> Result<Var> {
        let rows = self.value(a).outer_len();
        if scale.len() != rows || shift.len() != rows {
            return Err(Error::dim(
                "row_affine",
                format!("{rows} rows vs {} scales / {} shifts", scale.len(), shift.len()),
            ));
        }
        let mut value = self.value(a).clone();
        for r in 0..rows {
            for x in value.row_mut(r) {
                *x = *x * scale[r] + shift[r];
            }
        }
        self.push_checked("row_affine", value, &[a], Op::RowAffine { input: a, scale: scale.to_vec() })
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let value = Tensor::scalar(self.value(a).sum());
        self.push_checked("sum", value, &[a], Op::Sum(a))
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let n = self.value(a).len();
        if n == 0 {
            return Err(Error::dim("mean", "empty tensor"));
        }
        let value = Tensor::scalar(self.value(a).sum() / n as f64);
        self.push_checked("mean", value, &[a], Op::Mean(a))
    }

    /// Mean absolute error against a constant target. The subgradient at a
    /// zero residual is 0.
    pub fn l1_loss(&mut self, pred: Var, target: &Tensor) -> Result<Var> {
        let p = self.value(pred);
        if p.shape() != target.shape() {
            return Err(Error::dim("l1_loss", format!("{:?} vs {:?}", p.shape(), target.shape())));
        }
        if p.is_empty() {
            return Err(Error::dim("l1_loss", "empty tensor"));
        }
        let total: f64 = p.data().iter().zip(target.data()).map(|(a, b)| (a - b).abs()).sum();
        let value = Tensor::scalar(total / p.len() as f64);
        self.push_checked(
            "l1_loss",
            value,
            &[pred],
            Op::L1Loss { pred, target: target.data().to_vec() },
        )
    }

    // ---- reverse sweep ----

    /// Populates gradients of `loss` with respect to every node that
    /// requires one. Gradients from earlier calls are discarded.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).len() != 1 || self.value(loss).rank() > 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        for node in &mut self.nodes {
            node.grad = None;
        }
        if !self.nodes[loss.0].requires_grad {
            return Ok(());
        }
        self.nodes[loss.0].grad = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(g) = self.nodes[i].grad.take() else { continue };
            self.propagate(i, &g);
            self.nodes[i].grad = Some(g);
        }
        Ok(())
    }

    fn accumulate(&mut self, v: Var, contribution: Vec<f64>) {
        let node = &mut self.nodes[v.0];
        if !node.requires_grad {
            return;
        }
        match &mut node.grad {
            Some(g) => {
                for (a, b) in g.iter_mut().zip(&contribution) {
                    *a += b;
                }
            }
            None => node.grad = Some(contribution),
        }
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn propagate(&mut self, i: usize, g: &[f64]) {
        // Contributions are computed against immutable values first, then
        // accumulated, so the borrow of `self.nodes[i].op` ends early.
        let mut out: Vec<(Var, Vec<f64>)> = Vec::with_capacity(3);
        let node = &self.nodes[i];
        match &node.op {
            Op::Leaf => {}
            &Op::MatMul(a, b) => {
                let [m, k] = self.value(a).dims2("matmul").expect("recorded");
                let n = node.value.shape()[1];
                if self.wants(a) {
                    let mut da = vec![0.0; m * k];
                    gemm(m, n, k, g, false, self.value(b).data(), true, &mut da, false);
                    out.push((a, da));
                }
                if self.wants(b) {
                    let mut db = vec![0.0; k * n];
                    gemm(k, m, n, self.value(a).data(), true, g, false, &mut db, false);
                    out.push((b, db));
                }
            }
            &Op::BatchMatMul { a, b, transpose_b } => {
                let [gs, m, k] = self.value(a).dims3("batch_matmul").expect("recorded");
                let n = node.value.shape()[2];
                let (ad, bd) = (self.value(a).data(), self.value(b).data());
                if self.wants(a) {
                    let mut da = vec![0.0; gs * m * k];
                    for t in 0..gs {
                        let gt = &g[t * m * n..(t + 1) * m * n];
                        let bt = &bd[t * k * n..(t + 1) * k * n];
                        // dA = dC·Bᵀ, or dC·Bs when B was used transposed.
                        gemm(m, n, k, gt, false, bt, !transpose_b, &mut da[t * m * k..(t + 1) * m * k], false);
                    }
                    out.push((a, da));
                }
                if self.wants(b) {
                    let mut db = vec![0.0; gs * k * n];
                    for t in 0..gs {
                        let gt = &g[t * m * n..(t + 1) * m * n];
                        let at = &ad[t * m * k..(t + 1) * m * k];
                        let dbt = &mut db[t * k * n..(t + 1) * k * n];
                        if transpose_b {
                            gemm(n, m, k, gt, true, at, false, dbt, false);
                        } else {
                            gemm(k, m, n, at, true, gt, false, dbt, false);
                        }
                    }
                    out.push((b, db));
                }
            }
            &Op::Transpose(a) => {
                let s = node.value.shape();
                let (data, _) = permute(g, s, &[1, 0]);
                out.push((a, data));
            }
            Op::Permute { input, perm } => {
                let mut inverse = vec![0; perm.len()];
                for (i, &p) in perm.iter().enumerate() {
                    inverse[p] = i;
                }
                let (data, _) = permute(g, node.value.shape(), &inverse);
                out.push((*input, data));
            }
            &Op::Reshape(a) => out.push((a, g.to_vec())),
            Op::Concat { inputs, axis } => {
                let shape = node.value.shape();
                let outer: usize = shape[..*axis].iter().product();
                let inner: usize = shape[axis + 1..].iter().product();
                let total = shape[*axis] * inner;
                let mut offset = 0;
                for v in inputs {
                    let chunk = self.value(*v).shape()[*axis] * inner;
                    if self.wants(*v) {
                        let mut d = Vec::with_capacity(outer * chunk);
                        for o in 0..outer {
                            d.extend_from_slice(&g[o * total + offset..o * total + offset + chunk]);
                        }
                        out.push((*v, d));
                    }
                    offset += chunk;
                }
            }
            &Op::Add(a, b) => {
                out.push((a, g.to_vec()));
                out.push((b, g.to_vec()));
            }
            &Op::Sub(a, b) => {
                out.push((a, g.to_vec()));
                out.push((b, g.iter().map(|x| -x).collect()));
            }
            &Op::Mul(a, b) => {
                let (ad, bd) = (self.value(a).data(), self.value(b).data());
                out.push((a, g.iter().zip(bd).map(|(x, y)| x * y).collect()));
                out.push((b, g.iter().zip(ad).map(|(x, y)| x * y).collect()));
            }
            &Op::Scale { input, factor } => out.push((input, g.iter().map(|x| x * factor).collect())),
            &Op::AddRow { input, row } => {
                out.push((input, g.to_vec()));
                if self.wants(row) {
                    let d = self.value(row).len();
                    let mut dr = vec![0.0; d];
                    for chunk in g.chunks_exact(d.max(1)) {
                        for (a, b) in dr.iter_mut().zip(chunk) {
                            *a += b;
                        }
                    }
                    out.push((row, dr));
                }
            }
            &Op::Gelu(a) => {
                let x = self.value(a).data();
                out.push((a, g.iter().zip(x).map(|(gy, &x)| gy * gelu_grad(x)).collect()));
            }
            &Op::Relu(a) => {
                let x = self.value(a).data();
                out.push((a, g.iter().zip(x).map(|(gy, &x)| if x > 0.0 { *gy } else { 0.0 }).collect()));
            }
            &Op::Softmax(a) => {
                let y = &node.value;
                let d = y.last_dim();
                let mut dx = vec![0.0; y.len()];
                for r in 0..y.outer_len() {
                    let yr = y.row(r);
                    let gr = &g[r * d..(r + 1) * d];
                    let dot: f64 = yr.iter().zip(gr).map(|(p, q)| p * q).sum();
                    for j in 0..d {
                        dx[r * d + j] = yr[j] * (gr[j] - dot);
                    }
                }
                out.push((a, dx));
            }
            Op::LayerNorm { input, gain, bias, normalized, inv_std } => {
                let d = node.value.last_dim();
                let rows = inv_std.len();
                let gd = self.value(*gain).data();
                let mut dx = vec![0.0; rows * d];
                let mut dg = vec![0.0; d];
                let mut dbias = vec![0.0; d];
                for r in 0..rows {
                    let gr = &g[r * d..(r + 1) * d];
                    let xh = &normalized[r * d..(r + 1) * d];
                    let mut sum_dxh = 0.0;
                    let mut sum_dxh_xh = 0.0;
                    for j in 0..d {
                        dg[j] += gr[j] * xh[j];
                        dbias[j] += gr[j];
                        let dxh = gr[j] * gd[j];
                        sum_dxh += dxh;
                        sum_dxh_xh += dxh * xh[j];
                    }
                    let scale = inv_std[r] / d as f64;
                    for j in 0..d {
                        let dxh = gr[j] * gd[j];
                        dx[r * d + j] = scale * (d as f64 * dxh - sum_dxh - xh[j] * sum_dxh_xh);
                    }
                }
                out.push((*input, dx));
                out.push((*gain, dg));
                out.push((*bias, dbias));
            }
            Op::GatherRows { table, indices } => {
                let d = node.value.last_dim();
                let mut dt = vec![0.0; self.value(*table).len()];
                for (r, &ix) in indices.iter().enumerate() {
                    for j in 0..d {
                        dt[ix * d + j] += g[r * d + j];
                    }
                }
                out.push((*table, dt));
            }
            Op::Dropout { input, mask } => {
                out.push((*input, g.iter().zip(mask).map(|(a, b)| a * b).collect()));
            }
            Op::RowAffine { input, scale } => {
                let d = node.value.last_dim();
                let mut dx = g.to_vec();
                for (r, s) in scale.iter().enumerate() {
                    for x in &mut dx[r * d..(r + 1) * d] {
                        *x *= s;
                    }
                }
                out.push((*input, dx));
            }
            &Op::Sum(a) => out.push((a, vec![g[0]; self.value(a).len()])),
            &Op::Mean(a) => {
                let n = self.value(a).len();
                out.push((a, vec![g[0] / n as f64; n]));
            }
            Op::L1Loss { pred, target } => {
                let p = self.value(*pred).data();
                let n = p.len() as f64;
                let dp = p
                    .iter()
                    .zip(target)
                    .map(|(a, b)| {
                        let r = a - b;
                        if r > 0.0 {
                            g[0] / n
                        } else if r < 0.0 {
                            -g[0] / n
                        } else {
                            0.0
                        }
                    })
                    .collect();
                out.push((*pred, dp));
            }
        }
        for (v, contribution) in out {
            self.accumulate(v, contribution);
        }
    }
}

fn zip_map(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    Tensor::new(a.shape(), data).expect("same shape")
}

pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for x in row.iter_mut() {
        *x = (*x - max).exp();
        total += *x;
    }
    for x in row.iter_mut() {
        *x /= total;
    }
}
