use super::tensor::{gelu_grad, layer_norm_parts, Tensor};
use crate::error::{shape_err, CosError, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
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
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Softmax(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    Gelu(Var),
    Reshape(Var),
    Transpose(Var),
    GatherRows(Var, Vec<usize>),
    SliceCols(Var, usize),
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    Mean(Var),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
}

/// Single-threaded reverse-mode recording. Every operation validates shapes
/// and rejects non-finite results.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients of a scalar with respect to every recorded value.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Gradient of `v`, or zeros shaped like `like` when `v` did not
    /// influence the output.
    pub fn get_or_zeros(&self, v: Var, like: &Tensor) -> Tensor {
        self.get(v)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(like.shape()))
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(Option::take)
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

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    fn push(&mut self, value: Tensor, op: Op, name: &'static str) -> Result<Var> {
        value.ensure_finite(name)?;
        self.nodes.push(Node { value, op });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Records an input. Leaves receive gradients like any other node.
    pub fn leaf(&mut self, value: Tensor) -> Result<Var> {
        self.push(value, Op::Leaf, "leaf")
    }

    /// Every softmax output recorded so far, in recording order.
    pub fn softmax_outputs(&self) -> impl Iterator<Item = &Tensor> {
        self.nodes
            .iter()
            .filter(|n| matches!(n.op, Op::Softmax(_)))
            .map(|n| &n.value)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).matmul(self.value(b))?;
        self.push(v, Op::MatMul(a, b), "matmul")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).zip_with(self.value(b), "add", |x, y| x + y)?;
        self.push(v, Op::Add(a, b), "add")
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).zip_with(self.value(b), "sub", |x, y| x - y)?;
        self.push(v, Op::Sub(a, b), "sub")
    }

    /// Element-wise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).zip_with(self.value(b), "mul", |x, y| x * y)?;
        self.push(v, Op::Mul(a, b), "mul")
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Result<Var> {
        let v = self.value(a).map(|x| x * k);
        self.push(v, Op::Scale(a, k), "scale")
    }

    pub fn softmax_rows(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a).softmax_rows()?;
        self.push(v, Op::Softmax(a), "softmax_rows")
    }

    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let (v, xhat, rstd) = layer_norm_parts(self.value(x), self.value(gain), self.value(bias), eps)?;
        self.push(
            v,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            },
            "layer_norm",
        )
    }

    pub fn gelu(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a).gelu();
        self.push(v, Op::Gelu(a), "gelu")
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let v = self.value(a).reshape(shape)?;
        self.push(v, Op::Reshape(a), "reshape")
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a).transpose()?;
        self.push(v, Op::Transpose(a), "transpose")
    }

    /// Selects rows of a matrix by index (rows may repeat).
    pub fn gather_rows(&mut self, a: Var, rows: &[usize]) -> Result<Var> {
        let src = self.value(a);
        let (m, n) = src.expect_matrix("gather_rows")?;
        if rows.is_empty() {
            return shape_err("gather_rows", "empty row selection");
        }
        if let Some(&bad) = rows.iter().find(|&&r| r >= m) {
            return shape_err("gather_rows", format!("row {bad} out of {m}"));
        }
        let mut data = Vec::with_capacity(rows.len() * n);
        for &r in rows {
            data.extend_from_slice(src.row(r));
        }
        let v = Tensor::new([rows.len(), n], data)?;
        self.push(v, Op::GatherRows(a, rows.to_vec()), "gather_rows")
    }

    /// Columns `start..end` of a matrix.
    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        let src = self.value(a);
        let (m, n) = src.expect_matrix("slice_cols")?;
        if start >= end || end > n {
            return shape_err("slice_cols", format!("{start}..{end} of {n} columns"));
        }
        let mut data = Vec::with_capacity(m * (end - start));
        for r in 0..m {
            data.extend_from_slice(&src.row(r)[start..end]);
        }
        let v = Tensor::new([m, end - start], data)?;
        self.push(v, Op::SliceCols(a, start), "slice_cols")
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let Some(&first) = parts.first() else {
            return shape_err("concat_rows", "nothing to concatenate");
        };
        let (_, n) = self.value(first).expect_matrix("concat_rows")?;
        let mut rows = 0;
        let mut data = Vec::new();
        for &p in parts {
            let t = self.value(p);
            let (m, n2) = t.expect_matrix("concat_rows")?;
            if n2 != n {
                return shape_err("concat_rows", format!("column count {n2} vs {n}"));
            }
            rows += m;
            data.extend_from_slice(t.data());
        }
        let v = Tensor::new([rows, n], data)?;
        self.push(v, Op::ConcatRows(parts.to_vec()), "concat_rows")
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let Some(&first) = parts.first() else {
            return shape_err("concat_cols", "nothing to concatenate");
        };
        let (m, _) = self.value(first).expect_matrix("concat_cols")?;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (m2, n) = self.value(p).expect_matrix("concat_cols")?;
            if m2 != m {
                return shape_err("concat_cols", format!("row count {m2} vs {m}"));
            }
            widths.push(n);
        }
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(m * total);
        for r in 0..m {
            for &p in parts {
                data.extend_from_slice(self.value(p).row(r));
            }
        }
        let v = Tensor::new([m, total], data)?;
        self.push(v, Op::ConcatCols(parts.to_vec()), "concat_cols")
    }

    /// Mean of all entries, as a one-element tensor.
    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        let v = Tensor::scalar(t.sum() / t.numel() as f64);
        self.push(v, Op::Mean(a), "mean")
    }

    /// Reverse sweep from a one-element output.
    pub fn backward(&self, output: Var) -> Result<Gradients> {
        if self.value(output).numel() != 1 {
            return shape_err(
                "backward",
                format!("output must be a scalar, got {:?}", self.value(output).shape()),
            );
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; output.0 + 1];
        grads[output.0] = Some(Tensor::ones(self.value(output).shape()));

        for idx in (0..=output.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            match &node.op {
                Op::Leaf => {}
                Op::MatMul(a, b) => {
                    let av = self.value(*a);
                    let bv = self.value(*b);
                    let ga = g.matmul(&bv.transpose()?)?;
                    let gb = av.transpose()?.matmul(&g)?;
                    accumulate(&mut grads, *a, ga);
                    accumulate(&mut grads, *b, gb);
                }
                Op::Add(a, b) => {
                    accumulate(&mut grads, *a, g.clone());
                    accumulate(&mut grads, *b, g.clone());
                }
                Op::Sub(a, b) => {
                    accumulate(&mut grads, *b, g.map(|x| -x));
                    accumulate(&mut grads, *a, g.clone());
                }
                Op::Mul(a, b) => {
                    let ga = g.zip_with(self.value(*b), "mul_backward", |x, y| x * y)?;
                    let gb = g.zip_with(self.value(*a), "mul_backward", |x, y| x * y)?;
                    accumulate(&mut grads, *a, ga);
                    accumulate(&mut grads, *b, gb);
                }
                Op::Scale(a, k) => accumulate(&mut grads, *a, g.map(|x| x * k)),
                Op::Softmax(a) => {
                    let y = &node.value;
                    let d = y.last_dim();
                    let mut out = vec![0.0; y.numel()];
                    for ((o, yr), gr) in out.chunks_mut(d).zip(y.data().chunks(d)).zip(g.data().chunks(d)) {
                        let dot: f64 = yr.iter().zip(gr).map(|(p, q)| p * q).sum();
                        for j in 0..d {
                            o[j] = yr[j] * (gr[j] - dot);
                        }
                    }
                    accumulate(&mut grads, *a, Tensor::new(y.shape(), out)?);
                }
                Op::LayerNorm {
                    x,
                    gain,
                    bias,
                    xhat,
                    rstd,
                } => {
                    let gv = self.value(*gain).data();
                    let d = gv.len();
                    let mut dx = vec![0.0; xhat.len()];
                    let mut dgain = vec![0.0; d];
                    let mut dbias = vec![0.0; d];
                    for (r, (gr, hr)) in g.data().chunks(d).zip(xhat.chunks(d)).enumerate() {
                        let mut mean_dh = 0.0;
                        let mut mean_dh_h = 0.0;
                        for j in 0..d {
                            let dh = gr[j] * gv[j];
                            mean_dh += dh;
                            mean_dh_h += dh * hr[j];
                            dgain[j] += gr[j] * hr[j];
                            dbias[j] += gr[j];
                        }
                        mean_dh /= d as f64;
                        mean_dh_h /= d as f64;
                        for j in 0..d {
                            let dh = gr[j] * gv[j];
                            dx[r * d + j] = rstd[r] * (dh - mean_dh - hr[j] * mean_dh_h);
                        }
                    }
                    accumulate(&mut grads, *x, Tensor::new(g.shape(), dx)?);
                    accumulate(&mut grads, *gain, Tensor::new([d], dgain)?);
                    accumulate(&mut grads, *bias, Tensor::new([d], dbias)?);
                }
                Op::Gelu(a) => {
                    let ga = g.zip_with(self.value(*a), "gelu_backward", |dy, x| dy * gelu_grad(x))?;
                    accumulate(&mut grads, *a, ga);
                }
                Op::Reshape(a) => {
                    let ga = g.reshape(self.value(*a).shape())?;
                    accumulate(&mut grads, *a, ga);
                }
                Op::Transpose(a) => accumulate(&mut grads, *a, g.transpose()?),
                Op::GatherRows(a, rows) => {
                    let n = g.cols();
                    let gd = g.data();
                    accumulate_with(&mut grads, *a, self.value(*a).shape(), |od| {
                        for (i, &r) in rows.iter().enumerate() {
                            for (o, x) in od[r * n..(r + 1) * n].iter_mut().zip(&gd[i * n..(i + 1) * n]) {
                                *o += x;
                            }
                        }
                    });
                }
                Op::SliceCols(a, start) => {
                    let n = self.value(*a).cols();
                    let w = g.cols();
                    accumulate_with(&mut grads, *a, self.value(*a).shape(), |od| {
                        for r in 0..g.rows() {
                            for (o, x) in od[r * n + start..r * n + start + w].iter_mut().zip(g.row(r)) {
                                *o += x;
                            }
                        }
                    });
                }
                Op::ConcatRows(parts) => {
                    let mut offset = 0;
                    for &p in parts {
                        let shape = self.value(p).shape().to_vec();
                        let len = shape[0] * shape[1];
                        let part = Tensor::new(shape, g.data()[offset..offset + len].to_vec())?;
                        offset += len;
                        accumulate(&mut grads, p, part);
                    }
                }
                Op::ConcatCols(parts) => {
                    let total = g.cols();
                    let mut start = 0;
                    for &p in parts {
                        let (m, w) = (self.value(p).rows(), self.value(p).cols());
                        let mut data = Vec::with_capacity(m * w);
                        for r in 0..m {
                            data.extend_from_slice(&g.data()[r * total + start..r * total + start + w]);
                        }
                        start += w;
                        accumulate(&mut grads, p, Tensor::new([m, w], data)?);
                    }
                }
                Op::Mean(a) => {
                    let src = self.value(*a);
                    let k = g.data()[0] / src.numel() as f64;
                    accumulate(&mut grads, *a, Tensor::filled(src.shape(), k));
                }
            }
            grads[idx] = Some(g);
        }

        for g in grads.iter().flatten() {
            if !g.is_finite() {
                return Err(CosError::NonFinite { op: "backward" });
            }
        }
        Ok(Gradients { grads })
    }
}

/// Adds into `v`'s gradient in place, starting from zeros of `shape`.
fn accumulate_with(grads: &mut [Option<Tensor>], v: Var, shape: &[usize], f: impl FnOnce(&mut [f64])) {
    let slot = grads[v.0].get_or_insert_with(|| Tensor::zeros(shape));
    f(slot.data_mut());
}

fn accumulate(grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
    match &mut grads[v.0] {
        Some(existing) => existing.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}
