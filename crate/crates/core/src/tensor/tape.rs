//! Reverse-mode differentiation over a linear tape.
//!
//! Operations are recorded in creation order, which is already a topological
//! order of the DAG, so the backward pass is a single reverse sweep that
//! visits each node exactly once. Forward values are cached on the nodes;
//! no recomputation happens during backward.

use super::Tensor;
use crate::error::TensorError;

pub type NodeId = usize;

const DIST_EPS: f64 = 1e-12;

enum Op {
    Leaf,
    /// out[m,n] = a[m,k] . b[k,n]
    Matmul { a: NodeId, b: NodeId },
    /// out = a + b, identical shapes
    Add { a: NodeId, b: NodeId },
    /// out[r] = a[r] + bias, bias broadcast over rows
    AddRow { a: NodeId, bias: NodeId },
    /// out = c * a
    Scale { a: NodeId, c: f64 },
    /// out = max(0, a), elementwise
    Relu { a: NodeId },
    /// out = a * b, elementwise (Hadamard)
    Mul { a: NodeId, b: NodeId },
    /// Column-wise normalization; `xhat` and `inv_std` cached for backward.
    BatchNorm {
        a: NodeId,
        gamma: NodeId,
        beta: NodeId,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
        train: bool,
    },
    /// Row-wise division by max(L2 norm, eps); `norms` holds the clamped divisor.
    L2Normalize {
        a: NodeId,
        norms: Vec<f64>,
        clamped: Vec<bool>,
    },
    /// out[r] = a[rows[r]]
    GatherRows { a: NodeId, rows: Vec<usize> },
    /// out[i] = ||a_i - b_i||_2 per row
    RowDistance { a: NodeId, b: NodeId },
    /// out[i] = max(0, margin + pos[i] - neg[i]); backward only needs the
    /// activation pattern, so the margin is not kept.
    Hinge { pos: NodeId, neg: NodeId },
    /// scalar = sum_i softplus(-labels[i] * scores[i])
    LogisticLoss { scores: NodeId, labels: Vec<f64> },
    /// scalar = sum of all entries
    Sum { a: NodeId },
    /// out = a * mask, mask entries are 0 or 1/(1-rate)
    Dropout { a: NodeId, mask: Vec<f64> },
    /// Shape-only change from [n,1] or [1,n] to [n]
    Flatten { a: NodeId },
}

struct Node {
    op: Op,
    value: Tensor,
}

/// Gradient map produced by [`Tape::backward`]. Leaves off the path from the
/// root hold no entry and read back as zeros.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn wrt(&self, id: NodeId) -> Option<&Tensor> {
        self.grads.get(id).and_then(|g| g.as_ref())
    }

    /// Gradient for `id`, materializing zeros for untouched nodes.
    pub fn tensor(&self, id: NodeId, tape: &Tape) -> Tensor {
        match self.wrt(id) {
            Some(g) => g.clone(),
            None => Tensor::zeros(tape.value(id).shape().to_vec()),
        }
    }
}

/// Recording tape. Single-threaded per training step; values are immutable
/// once written.
pub struct Tape {
    nodes: Vec<Node>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id].value
    }

    fn push(&mut self, op: Op, value: Tensor) -> NodeId {
        self.nodes.push(Node { op, value });
        self.nodes.len() - 1
    }

    /// Register an input tensor (parameter or data) on the tape.
    pub fn leaf(&mut self, value: Tensor) -> NodeId {
        self.push(Op::Leaf, value)
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, TensorError> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.rank() != 2 || vb.rank() != 2 || va.cols() != vb.rows() {
            return Err(TensorError::ShapeMismatch {
                op: "matmul",
                left: va.shape_string(),
                right: vb.shape_string(),
            });
        }
        let (m, k, n) = (va.rows(), va.cols(), vb.cols());
        let mut out = vec![0.0; m * n];
        let (da, db) = (va.data(), vb.data());
        for i in 0..m {
            for p in 0..k {
                let aip = da[i * k + p];
                if aip == 0.0 {
                    continue;
                }
                let brow = &db[p * n..(p + 1) * n];
                let orow = &mut out[i * n..(i + 1) * n];
                for j in 0..n {
                    orow[j] += aip * brow[j];
                }
            }
        }
        let value = Tensor::matrix(m, n, out)?;
        Ok(self.push(Op::Matmul { a, b }, value))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, TensorError> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() != vb.shape() {
            return Err(TensorError::ShapeMismatch {
                op: "add",
                left: va.shape_string(),
                right: vb.shape_string(),
            });
        }
        let data = va
            .data()
            .iter()
            .zip(vb.data().iter())
            .map(|(x, y)| x + y)
            .collect();
        let value = Tensor::new(va.shape().to_vec(), data)?;
        Ok(self.push(Op::Add { a, b }, value))
    }

    pub fn add_row(&mut self, a: NodeId, bias: NodeId) -> Result<NodeId, TensorError> {
        let (va, vb) = (self.value(a), self.value(bias));
        if va.rank() != 2 || vb.rank() != 1 || va.cols() != vb.len() {
            return Err(TensorError::ShapeMismatch {
                op: "add_row",
                left: va.shape_string(),
                right: vb.shape_string(),
            });
        }
        let cols = va.cols();
        let bd = vb.data();
        let data = va
            .data()
            .iter()
            .enumerate()
            .map(|(i, x)| x + bd[i % cols])
            .collect();
        let value = Tensor::new(va.shape().to_vec(), data)?;
        Ok(self.push(Op::AddRow { a, bias }, value))
    }

    pub fn scale(&mut self, a: NodeId, c: f64) -> NodeId {
        let va = self.value(a);
        let data = va.data().iter().map(|x| c * x).collect();
        let value = Tensor::new(va.shape().to_vec(), data).expect("same shape");
        self.push(Op::Scale { a, c }, value)
    }

    pub fn relu(&mut self, a: NodeId) -> NodeId {
        let va = self.value(a);
        let data = va.data().iter().map(|x| x.max(0.0)).collect();
        let value = Tensor::new(va.shape().to_vec(), data).expect("same shape");
        self.push(Op::Relu { a }, value)
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, TensorError> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() != vb.shape() {
            return Err(TensorError::ShapeMismatch {
                op: "elementwise_product",
                left: va.shape_string(),
                right: vb.shape_string(),
            });
        }
        let data = va
            .data()
            .iter()
            .zip(vb.data().iter())
            .map(|(x, y)| x * y)
            .collect();
        let value = Tensor::new(va.shape().to_vec(), data)?;
        Ok(self.push(Op::Mul { a, b }, value))
    }

    /// Batch normalization over columns using batch statistics. Updates the
    /// running mean/variance by exponential moving average and returns them;
    /// the caller owns writing them back to the model.
    #[allow(clippy::too_many_arguments)]
    pub fn batch_norm_train(
        &mut self,
        a: NodeId,
        gamma: NodeId,
        beta: NodeId,
        eps: f64,
        momentum: f64,
        running_mean: &Tensor,
        running_var: &Tensor,
    ) -> Result<(NodeId, Tensor, Tensor), TensorError> {
        let va = self.value(a);
        let (n, d) = (va.rows(), va.cols());
        if va.rank() != 2 {
            return Err(TensorError::ShapeMismatch {
                op: "batch_norm",
                left: va.shape_string(),
                right: "[batch, d]".into(),
            });
        }
        if n < 2 {
            return Err(TensorError::BatchTooSmall { batch: n });
        }
        self.check_bn_params(a, gamma, beta)?;

        let x = va.data();
        let mut mean = vec![0.0; d];
        let mut var = vec![0.0; d];
        for i in 0..n {
            for j in 0..d {
                mean[j] += x[i * d + j];
            }
        }
        for m in mean.iter_mut() {
            *m /= n as f64;
        }
        for i in 0..n {
            for j in 0..d {
                let c = x[i * d + j] - mean[j];
                var[j] += c * c;
            }
        }
        for v in var.iter_mut() {
            *v /= n as f64;
        }
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let mut xhat = vec![0.0; n * d];
        for i in 0..n {
            for j in 0..d {
                xhat[i * d + j] = (x[i * d + j] - mean[j]) * inv_std[j];
            }
        }
        let g = self.value(gamma).data().to_vec();
        let b = self.value(beta).data().to_vec();
        let mut out = vec![0.0; n * d];
        for i in 0..n {
            for j in 0..d {
                out[i * d + j] = g[j] * xhat[i * d + j] + b[j];
            }
        }
        let mut new_mean = running_mean.clone();
        let mut new_var = running_var.clone();
        for j in 0..d {
            new_mean.data_mut()[j] = momentum * running_mean.data()[j] + (1.0 - momentum) * mean[j];
            new_var.data_mut()[j] = momentum * running_var.data()[j] + (1.0 - momentum) * var[j];
        }
        let value = Tensor::matrix(n, d, out)?;
        let id = self.push(
            Op::BatchNorm {
                a,
                gamma,
                beta,
                xhat,
                inv_std,
                train: true,
            },
            value,
        );
        Ok((id, new_mean, new_var))
    }

    /// Batch normalization using fixed running statistics (inference mode).
    pub fn batch_norm_infer(
        &mut self,
        a: NodeId,
        gamma: NodeId,
        beta: NodeId,
        eps: f64,
        running_mean: &Tensor,
        running_var: &Tensor,
    ) -> Result<NodeId, TensorError> {
        let va = self.value(a);
        if va.rank() != 2 {
            return Err(TensorError::ShapeMismatch {
                op: "batch_norm",
                left: va.shape_string(),
                right: "[batch, d]".into(),
            });
        }
        self.check_bn_params(a, gamma, beta)?;
        let (n, d) = (va.rows(), va.cols());
        if running_mean.len() != d || running_var.len() != d {
            return Err(TensorError::ShapeMismatch {
                op: "batch_norm",
                left: va.shape_string(),
                right: running_mean.shape_string(),
            });
        }
        let x = va.data();
        let inv_std: Vec<f64> = running_var
            .data()
            .iter()
            .map(|v| 1.0 / (v + eps).sqrt())
            .collect();
        let rm = running_mean.data();
        let mut xhat = vec![0.0; n * d];
        for i in 0..n {
            for j in 0..d {
                xhat[i * d + j] = (x[i * d + j] - rm[j]) * inv_std[j];
            }
        }
        let g = self.value(gamma).data().to_vec();
        let b = self.value(beta).data().to_vec();
        let mut out = vec![0.0; n * d];
        for i in 0..n {
            for j in 0..d {
                out[i * d + j] = g[j] * xhat[i * d + j] + b[j];
            }
        }
        let value = Tensor::matrix(n, d, out)?;
        Ok(self.push(
            Op::BatchNorm {
                a,
                gamma,
                beta,
                xhat,
                inv_std,
                train: false,
            },
            value,
        ))
    }

    fn check_bn_params(
        &self,
        a: NodeId,
        gamma: NodeId,
        beta: NodeId,
    ) -> Result<(), TensorError> {
        let d = self.value(a).cols();
        for (id, name) in [(gamma, "gamma"), (beta, "beta")] {
            let v = self.value(id);
            if v.rank() != 1 || v.len() != d {
                return Err(TensorError::ShapeMismatch {
                    op: "batch_norm",
                    left: format!("{name} {}", v.shape_string()),
                    right: format!("[{d}]"),
                });
            }
        }
        Ok(())
    }

    /// Divide each row by max(L2 norm, eps).
    pub fn l2_normalize(&mut self, a: NodeId, eps: f64) -> NodeId {
        let va = self.value(a);
        let (n, d) = (va.rows(), va.cols());
        let x = va.data();
        let mut norms = Vec::with_capacity(n);
        let mut clamped = Vec::with_capacity(n);
        let mut out = vec![0.0; n * d];
        for i in 0..n {
            let row = &x[i * d..(i + 1) * d];
            let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            let divisor = if norm > eps { norm } else { eps };
            clamped.push(norm <= eps);
            norms.push(divisor);
            for j in 0..d {
                out[i * d + j] = row[j] / divisor;
            }
        }
        let value = Tensor::new(va.shape().to_vec(), out).expect("same shape");
        self.push(
            Op::L2Normalize { a, norms, clamped },
            value,
        )
    }

    pub fn gather_rows(&mut self, a: NodeId, rows: Vec<usize>) -> Result<NodeId, TensorError> {
        let va = self.value(a);
        let (n, d) = (va.rows(), va.cols());
        let mut out = Vec::with_capacity(rows.len() * d);
        for &r in &rows {
            if r >= n {
                return Err(TensorError::RowOutOfRange { row: r, rows: n });
            }
            out.extend_from_slice(&va.data()[r * d..(r + 1) * d]);
        }
        let value = Tensor::matrix(rows.len(), d, out)?;
        Ok(self.push(Op::GatherRows { a, rows }, value))
    }

    /// Row-wise Euclidean distance between two equally shaped matrices.
    pub fn row_distance(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, TensorError> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() != vb.shape() || va.rank() != 2 {
            return Err(TensorError::ShapeMismatch {
                op: "row_distance",
                left: va.shape_string(),
                right: vb.shape_string(),
            });
        }
        let (n, d) = (va.rows(), va.cols());
        let (xa, xb) = (va.data(), vb.data());
        let mut out = Vec::with_capacity(n);
        for i in 0..n {
            let mut s = 0.0;
            for j in 0..d {
                let c = xa[i * d + j] - xb[i * d + j];
                s += c * c;
            }
            out.push(s.sqrt());
        }
        Ok(self.push(Op::RowDistance { a, b }, Tensor::vector(out)))
    }

    /// Elementwise hinge max(0, margin + pos - neg); inputs are distance vectors.
    pub fn hinge(
        &mut self,
        pos: NodeId,
        neg: NodeId,
        margin: f64,
    ) -> Result<NodeId, TensorError> {
        let (vp, vn) = (self.value(pos), self.value(neg));
        if vp.shape() != vn.shape() || vp.rank() != 1 {
            return Err(TensorError::ShapeMismatch {
                op: "hinge",
                left: vp.shape_string(),
                right: vn.shape_string(),
            });
        }
        let out = vp
            .data()
            .iter()
            .zip(vn.data().iter())
            .map(|(p, n)| (margin + p - n).max(0.0))
            .collect();
        Ok(self.push(Op::Hinge { pos, neg }, Tensor::vector(out)))
    }

    /// Numerically stable logistic loss: sum_i log(1 + exp(-z_i p_i)),
    /// computed as softplus(t) = max(t, 0) + log1p(exp(-|t|)) with t = -z p.
    pub fn logistic_loss(
        &mut self,
        scores: NodeId,
        labels: &[f64],
    ) -> Result<NodeId, TensorError> {
        let vs = self.value(scores);
        if vs.rank() != 1 || vs.len() != labels.len() {
            return Err(TensorError::ShapeMismatch {
                op: "logistic_loss",
                left: vs.shape_string(),
                right: format!("[{}]", labels.len()),
            });
        }
        let mut total = 0.0;
        for (p, z) in vs.data().iter().zip(labels.iter()) {
            let t = -z * p;
            total += t.max(0.0) + (-t.abs()).exp().ln_1p();
        }
        Ok(self.push(
            Op::LogisticLoss {
                scores,
                labels: labels.to_vec(),
            },
            Tensor::scalar(total),
        ))
    }

    pub fn sum(&mut self, a: NodeId) -> NodeId {
        let total = self.value(a).data().iter().sum();
        self.push(Op::Sum { a }, Tensor::scalar(total))
    }

    /// Inverted-scaling dropout. The mask holds 0 for dropped entries and
    /// 1/(1-rate) for survivors; identity when every entry survives.
    pub fn dropout(&mut self, a: NodeId, mask: Vec<f64>) -> Result<NodeId, TensorError> {
        let va = self.value(a);
        if mask.len() != va.len() {
            return Err(TensorError::ShapeMismatch {
                op: "dropout",
                left: va.shape_string(),
                right: format!("[{}]", mask.len()),
            });
        }
        let data = va
            .data()
            .iter()
            .zip(mask.iter())
            .map(|(x, m)| x * m)
            .collect();
        let value = Tensor::new(va.shape().to_vec(), data)?;
        Ok(self.push(Op::Dropout { a, mask }, value))
    }

    /// Reinterpret a single-column or single-row matrix as a vector.
    pub fn flatten(&mut self, a: NodeId) -> Result<NodeId, TensorError> {
        let va = self.value(a);
        if va.rank() == 1 {
            let value = va.clone();
            return Ok(self.push(Op::Flatten { a }, value));
        }
        if va.rows() != 1 && va.cols() != 1 {
            return Err(TensorError::ShapeMismatch {
                op: "flatten",
                left: va.shape_string(),
                right: "[n, 1] or [1, n]".into(),
            });
        }
        let value = Tensor::vector(va.data().to_vec());
        Ok(self.push(Op::Flatten { a }, value))
    }

    /// Reverse sweep from a scalar root. Returns exact gradients for every
    /// node on the path; leaves off the path read back as zeros.
    pub fn backward(&self, root: NodeId) -> Result<Gradients, TensorError> {
        let rv = self.value(root);
        if !rv.is_scalar() {
            return Err(TensorError::NonScalarRoot {
                shape: rv.shape_string(),
            });
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[root] = Some(Tensor::new(rv.shape().to_vec(), vec![1.0]).expect("scalar"));

        for id in (0..=root).rev() {
            let Some(g) = grads[id].take() else {
                continue;
            };
            self.accumulate(id, &g, &mut grads);
            grads[id] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn accumulate(&self, id: NodeId, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let add_to = |grads: &mut [Option<Tensor>], target: NodeId, delta: Tensor| {
            match &mut grads[target] {
                Some(acc) => acc.add_assign(&delta),
                slot => *slot = Some(delta),
            }
        };
        match &self.nodes[id].op {
            Op::Leaf => {}
            Op::Matmul { a, b } => {
                let (va, vb) = (self.value(*a), self.value(*b));
                let (m, k, n) = (va.rows(), va.cols(), vb.cols());
                let gd = g.data();
                // dA = g . B^T
                let mut da = vec![0.0; m * k];
                for i in 0..m {
                    for p in 0..k {
                        let mut s = 0.0;
                        let brow = &vb.data()[p * n..(p + 1) * n];
                        let grow = &gd[i * n..(i + 1) * n];
                        for j in 0..n {
                            s += grow[j] * brow[j];
                        }
                        da[i * k + p] = s;
                    }
                }
                // dB = A^T . g
                let mut db = vec![0.0; k * n];
                for p in 0..k {
                    for i in 0..m {
                        let aip = va.data()[i * k + p];
                        if aip == 0.0 {
                            continue;
                        }
                        let grow = &gd[i * n..(i + 1) * n];
                        let drow = &mut db[p * n..(p + 1) * n];
                        for j in 0..n {
                            drow[j] += aip * grow[j];
                        }
                    }
                }
                add_to(grads, *a, Tensor::matrix(m, k, da).expect("shape"));
                add_to(grads, *b, Tensor::matrix(k, n, db).expect("shape"));
            }
            Op::Add { a, b } => {
                add_to(grads, *a, g.clone());
                add_to(grads, *b, g.clone());
            }
            Op::AddRow { a, bias } => {
                add_to(grads, *a, g.clone());
                let cols = self.value(*bias).len();
                let mut db = vec![0.0; cols];
                for (i, v) in g.data().iter().enumerate() {
                    db[i % cols] += v;
                }
                add_to(grads, *bias, Tensor::vector(db));
            }
            Op::Scale { a, c } => {
                let data = g.data().iter().map(|v| c * v).collect();
                add_to(
                    grads,
                    *a,
                    Tensor::new(g.shape().to_vec(), data).expect("shape"),
                );
            }
            Op::Relu { a } => {
                let va = self.value(*a);
                let data = va
                    .data()
                    .iter()
                    .zip(g.data().iter())
                    .map(|(x, gv)| if *x > 0.0 { *gv } else { 0.0 })
                    .collect();
                add_to(
                    grads,
                    *a,
                    Tensor::new(g.shape().to_vec(), data).expect("shape"),
                );
            }
            Op::Mul { a, b } => {
                let (va, vb) = (self.value(*a), self.value(*b));
                let da = g
                    .data()
                    .iter()
                    .zip(vb.data().iter())
                    .map(|(gv, y)| gv * y)
                    .collect();
                let db = g
                    .data()
                    .iter()
                    .zip(va.data().iter())
                    .map(|(gv, x)| gv * x)
                    .collect();
                add_to(
                    grads,
                    *a,
                    Tensor::new(g.shape().to_vec(), da).expect("shape"),
                );
                add_to(
                    grads,
                    *b,
                    Tensor::new(g.shape().to_vec(), db).expect("shape"),
                );
            }
            Op::BatchNorm {
                a,
                gamma,
                beta,
                xhat,
                inv_std,
                train,
            } => {
                let va = self.value(*a);
                let (n, d) = (va.rows(), va.cols());
                let gam = self.value(*gamma).data();
                let gd = g.data();

                let mut dgamma = vec![0.0; d];
                let mut dbeta = vec![0.0; d];
                for i in 0..n {
                    for j in 0..d {
                        dgamma[j] += gd[i * d + j] * xhat[i * d + j];
                        dbeta[j] += gd[i * d + j];
                    }
                }

                let mut dx = vec![0.0; n * d];
                if *train {
                    // Batch statistics couple every row of a column.
                    let mut sum_dxhat = vec![0.0; d];
                    let mut sum_dxhat_xhat = vec![0.0; d];
                    for i in 0..n {
                        for j in 0..d {
                            let dxh = gd[i * d + j] * gam[j];
                            sum_dxhat[j] += dxh;
                            sum_dxhat_xhat[j] += dxh * xhat[i * d + j];
                        }
                    }
                    let nf = n as f64;
                    for i in 0..n {
                        for j in 0..d {
                            let dxh = gd[i * d + j] * gam[j];
                            dx[i * d + j] = inv_std[j] / nf
                                * (nf * dxh
                                    - sum_dxhat[j]
                                    - xhat[i * d + j] * sum_dxhat_xhat[j]);
                        }
                    }
                } else {
                    for i in 0..n {
                        for j in 0..d {
                            dx[i * d + j] = gd[i * d + j] * gam[j] * inv_std[j];
                        }
                    }
                }
                add_to(grads, *a, Tensor::matrix(n, d, dx).expect("shape"));
                add_to(grads, *gamma, Tensor::vector(dgamma));
                add_to(grads, *beta, Tensor::vector(dbeta));
            }
            Op::L2Normalize { a, norms, clamped } => {
                let out = &self.nodes[id].value;
                let (n, d) = (out.rows(), out.cols());
                let y = out.data();
                let gd = g.data();
                let mut dx = vec![0.0; n * d];
                for i in 0..n {
                    if clamped[i] {
                        for j in 0..d {
                            dx[i * d + j] = gd[i * d + j] / norms[i];
                        }
                    } else {
                        let mut dot = 0.0;
                        for j in 0..d {
                            dot += gd[i * d + j] * y[i * d + j];
                        }
                        for j in 0..d {
                            dx[i * d + j] = (gd[i * d + j] - y[i * d + j] * dot) / norms[i];
                        }
                    }
                }
                add_to(
                    grads,
                    *a,
                    Tensor::new(out.shape().to_vec(), dx).expect("shape"),
                );
            }
            Op::GatherRows { a, rows } => {
                let va = self.value(*a);
                let (n, d) = (va.rows(), va.cols());
                let mut dx = vec![0.0; n * d];
                for (r, &src) in rows.iter().enumerate() {
                    for j in 0..d {
                        dx[src * d + j] += g.data()[r * d + j];
                    }
                }
                add_to(grads, *a, Tensor::matrix(n, d, dx).expect("shape"));
            }
            Op::RowDistance { a, b } => {
                let (va, vb) = (self.value(*a), self.value(*b));
                let (n, d) = (va.rows(), va.cols());
                let dist = self.nodes[id].value.data();
                let mut da = vec![0.0; n * d];
                let mut db = vec![0.0; n * d];
                for i in 0..n {
                    let denom = dist[i].max(DIST_EPS);
                    let gi = g.data()[i];
                    for j in 0..d {
                        let diff = va.data()[i * d + j] - vb.data()[i * d + j];
                        let v = gi * diff / denom;
                        da[i * d + j] = v;
                        db[i * d + j] = -v;
                    }
                }
                add_to(grads, *a, Tensor::matrix(n, d, da).expect("shape"));
                add_to(grads, *b, Tensor::matrix(n, d, db).expect("shape"));
            }
            Op::Hinge { pos, neg } => {
                let out = self.nodes[id].value.data();
                let mut dp = vec![0.0; out.len()];
                let mut dn = vec![0.0; out.len()];
                for (i, h) in out.iter().enumerate() {
                    if *h > 0.0 {
                        dp[i] = g.data()[i];
                        dn[i] = -g.data()[i];
                    }
                }
                add_to(grads, *pos, Tensor::vector(dp));
                add_to(grads, *neg, Tensor::vector(dn));
            }
            Op::LogisticLoss { scores, labels } => {
                let vs = self.value(*scores);
                let gs = g.item();
                let dp = vs
                    .data()
                    .iter()
                    .zip(labels.iter())
                    .map(|(p, z)| {
                        let t = z * p;
                        // sigmoid(-t), evaluated without overflow
                        let s = if t >= 0.0 {
                            let e = (-t).exp();
                            e / (1.0 + e)
                        } else {
                            1.0 / (1.0 + t.exp())
                        };
                        gs * (-z) * s
                    })
                    .collect();
                add_to(grads, *scores, Tensor::vector(dp));
            }
            Op::Sum { a } => {
                let va = self.value(*a);
                let gv = g.item();
                add_to(grads, *a, Tensor::filled(va.shape().to_vec(), gv));
            }
            Op::Dropout { a, mask } => {
                let data = g
                    .data()
                    .iter()
                    .zip(mask.iter())
                    .map(|(gv, m)| gv * m)
                    .collect();
                add_to(
                    grads,
                    *a,
                    Tensor::new(g.shape().to_vec(), data).expect("shape"),
                );
            }
            Op::Flatten { a } => {
                let va = self.value(*a);
                add_to(
                    grads,
                    *a,
                    Tensor::new(va.shape().to_vec(), g.data().to_vec()).expect("shape"),
                );
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;
    use rand_chacha::rand_core::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    const FD_H: f64 = 1e-5;

    fn rel_err(a: f64, b: f64) -> f64 {
        (a - b).abs() / a.abs().max(b.abs()).max(1e-8)
    }

    /// Central finite differences of a scalar function, h = 1e-5.
    fn numeric_grad(f: &mut dyn FnMut(&[f64]) -> f64, x: &[f64]) -> Vec<f64> {
        let mut g = vec![0.0; x.len()];
        let mut probe = x.to_vec();
        for i in 0..x.len() {
            probe[i] = x[i] + FD_H;
            let fp = f(&probe);
            probe[i] = x[i] - FD_H;
            let fm = f(&probe);
            probe[i] = x[i];
            g[i] = (fp - fm) / (2.0 * FD_H);
        }
        g
    }

    fn assert_grad_close(analytic: &[f64], numeric: &[f64], tol: f64) {
        for (i, (a, n)) in analytic.iter().zip(numeric.iter()).enumerate() {
            assert!(
                rel_err(*a, *n) < tol,
                "grad[{i}]: analytic {a} vs numeric {n}"
            );
        }
    }

    fn rand_vec(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
        (0..n).map(|_| rng.gen_range(-2.0..2.0)).collect()
    }

    #[test]
    fn matmul_identity() {
        let mut tape = Tape::new();
        let i2 = tape.leaf(Tensor::matrix(2, 2, vec![1.0, 0.0, 0.0, 1.0]).unwrap());
        let a = tape.leaf(Tensor::matrix(2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        let c = tape.matmul(i2, a).unwrap();
        assert_eq!(tape.value(c).data(), &[1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn matmul_row_times_column() {
        let mut tape = Tape::new();
        let a = tape.leaf(Tensor::matrix(1, 2, vec![1.0, 2.0]).unwrap());
        let b = tape.leaf(Tensor::matrix(2, 1, vec![3.0, 4.0]).unwrap());
        let c = tape.matmul(a, b).unwrap();
        assert_eq!(tape.value(c).data(), &[11.0]);
    }

    #[test]
    fn matmul_shape_mismatch_names_both_shapes() {
        let mut tape = Tape::new();
        let a = tape.leaf(Tensor::matrix(2, 3, vec![0.0; 6]).unwrap());
        let b = tape.leaf(Tensor::matrix(2, 2, vec![0.0; 4]).unwrap());
        let err = tape.matmul(a, b).unwrap_err().to_string();
        assert!(err.contains("[2, 3]") && err.contains("[2, 2]"), "{err}");
    }

    #[test]
    fn matmul_gradient_of_sum_is_ones_times_b_transposed() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let a_data = rand_vec(&mut rng, 12);
        let b_data = rand_vec(&mut rng, 8);
        let mut tape = Tape::new();
        let a = tape.leaf(Tensor::matrix(3, 4, a_data.clone()).unwrap());
        let b = tape.leaf(Tensor::matrix(4, 2, b_data.clone()).unwrap());
        let c = tape.matmul(a, b).unwrap();
        let s = tape.sum(c);
        let grads = tape.backward(s).unwrap();
        let ga = grads.tensor(a, &tape);
        // Closed form: d(sum)/dA = ones . B^T, i.e. row sums of B per column.
        for i in 0..3 {
            for p in 0..4 {
                let expected = b_data[p * 2] + b_data[p * 2 + 1];
                assert!((ga.data()[i * 4 + p] - expected).abs() < 1e-12);
            }
        }
        // And against central differences.
        let mut f = |x: &[f64]| {
            let mut t = Tape::new();
            let a = t.leaf(Tensor::matrix(3, 4, x.to_vec()).unwrap());
            let b = t.leaf(Tensor::matrix(4, 2, b_data.clone()).unwrap());
            let c = t.matmul(a, b).unwrap();
            let s = t.sum(c);
            t.value(s).item()
        };
        let numeric = numeric_grad(&mut f, &a_data);
        assert_grad_close(ga.data(), &numeric, 1e-4);
    }

    #[test]
    fn relu_forward_and_dead_gradient() {
        let mut tape = Tape::new();
        let a = tape.leaf(Tensor::vector(vec![-1.0, 0.0, 2.0]));
        let r = tape.relu(a);
        assert_eq!(tape.value(r).data(), &[0.0, 0.0, 2.0]);

        let mut tape = Tape::new();
        let a = tape.leaf(Tensor::vector(vec![-1.0, -0.5, -2.0]));
        let r = tape.relu(a);
        assert_eq!(tape.value(r).data(), &[0.0, 0.0, 0.0]);
        let s = tape.sum(r);
        let grads = tape.backward(s).unwrap();
        assert_eq!(grads.tensor(a, &tape).data(), &[0.0, 0.0, 0.0]);
    }

    #[test]
    fn relu_gradient_matches_finite_differences_away_from_zero() {
        let x = vec![-1.5, 0.7, 2.0, -0.3, 1.1, 0.4];
        let mut f = |v: &[f64]| {
            let mut t = Tape::new();
            let a = t.leaf(Tensor::vector(v.to_vec()));
            let r = t.relu(a);
            let s = t.sum(r);
            t.value(s).item()
        };
        let numeric = numeric_grad(&mut f, &x);
        let mut t = Tape::new();
        let a = t.leaf(Tensor::vector(x.clone()));
        let r = t.relu(a);
        let s = t.sum(r);
        let grads = t.backward(s).unwrap();
        assert_grad_close(grads.tensor(a, &t).data(), &numeric, 1e-6);
    }

    #[test]
    fn batch_norm_normalizes_columns() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::matrix(2, 1, vec![1.0, 3.0]).unwrap());
        let gamma = tape.leaf(Tensor::vector(vec![1.0]));
        let beta = tape.leaf(Tensor::vector(vec![0.0]));
        let rm = Tensor::zeros(vec![1]);
        let rv = Tensor::filled(vec![1], 1.0);
        let (y, new_mean, new_var) = tape
            .batch_norm_train(x, gamma, beta, 1e-5, 0.9, &rm, &rv)
            .unwrap();
        let out = tape.value(y).data();
        assert!((out[0] + out[1]).abs() < 1e-9, "mean zero");
        let var = (out[0] * out[0] + out[1] * out[1]) / 2.0;
        assert!((var - 1.0).abs() < 1e-4, "unit variance up to eps, got {var}");
        // EMA with momentum 0.9: mean 0.1 * 2.0, var 0.9 * 1 + 0.1 * 1.
        assert!((new_mean.data()[0] - 0.2).abs() < 1e-12);
        assert!((new_var.data()[0] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn batch_norm_constant_column_shifts_to_beta() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::matrix(3, 1, vec![4.0, 4.0, 4.0]).unwrap());
        let gamma = tape.leaf(Tensor::vector(vec![1.0]));
        let beta = tape.leaf(Tensor::vector(vec![5.0]));
        let rm = Tensor::zeros(vec![1]);
        let rv = Tensor::filled(vec![1], 1.0);
        let (y, _, _) = tape
            .batch_norm_train(x, gamma, beta, 1e-5, 0.9, &rm, &rv)
            .unwrap();
        for v in tape.value(y).data() {
            assert!((v - 5.0).abs() < 1e-9);
        }
    }

    #[test]
    fn batch_norm_batch_of_one_errors_in_train_mode() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::matrix(1, 2, vec![1.0, 2.0]).unwrap());
        let gamma = tape.leaf(Tensor::vector(vec![1.0, 1.0]));
        let beta = tape.leaf(Tensor::vector(vec![0.0, 0.0]));
        let rm = Tensor::zeros(vec![2]);
        let rv = Tensor::filled(vec![2], 1.0);
        assert!(matches!(
            tape.batch_norm_train(x, gamma, beta, 1e-5, 0.9, &rm, &rv),
            Err(TensorError::BatchTooSmall { batch: 1 })
        ));
    }

    #[test]
    fn batch_norm_backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let (n, d) = (8, 4);
        let x0 = rand_vec(&mut rng, n * d);
        let g0 = rand_vec(&mut rng, d);
        let b0 = rand_vec(&mut rng, d);
        // Loss weights decorrelate entries so the column coupling is probed.
        let w = rand_vec(&mut rng, n * d);
        let run = |x: &[f64], g: &[f64], b: &[f64]| -> (f64, Vec<f64>, Vec<f64>, Vec<f64>) {
            let mut t = Tape::new();
            let xn = t.leaf(Tensor::matrix(n, d, x.to_vec()).unwrap());
            let gn = t.leaf(Tensor::vector(g.to_vec()));
            let bn = t.leaf(Tensor::vector(b.to_vec()));
            let rm = Tensor::zeros(vec![d]);
            let rv = Tensor::filled(vec![d], 1.0);
            let (y, _, _) = t
                .batch_norm_train(xn, gn, bn, 1e-5, 0.9, &rm, &rv)
                .unwrap();
            let wn = t.leaf(Tensor::matrix(n, d, w.clone()).unwrap());
            let prod = t.mul(y, wn).unwrap();
            let s = t.sum(prod);
            let grads = t.backward(s).unwrap();
            (
                t.value(s).item(),
                grads.tensor(xn, &t).data().to_vec(),
                grads.tensor(gn, &t).data().to_vec(),
                grads.tensor(bn, &t).data().to_vec(),
            )
        };
        let (_, gx, gg, gb) = run(&x0, &g0, &b0);
        let mut fx = |x: &[f64]| run(x, &g0, &b0).0;
        assert_grad_close(&gx, &numeric_grad(&mut fx, &x0), 1e-5);
        let mut fg = |g: &[f64]| run(&x0, g, &b0).0;
        assert_grad_close(&gg, &numeric_grad(&mut fg, &g0), 1e-5);
        let mut fb = |b: &[f64]| run(&x0, &g0, b).0;
        assert_grad_close(&gb, &numeric_grad(&mut fb, &b0), 1e-5);
    }

    #[test]
    fn l2_normalize_three_four_five() {
        let mut tape = Tape::new();
        let a = tape.leaf(Tensor::matrix(1, 2, vec![3.0, 4.0]).unwrap());
        let y = tape.l2_normalize(a, 1e-12);
        assert_eq!(tape.value(y).data(), &[0.6, 0.8]);
    }

    #[test]
    fn l2_normalize_unit_vector_unchanged() {
        let mut tape = Tape::new();
        let a = tape.leaf(Tensor::matrix(1, 2, vec![0.6, 0.8]).unwrap());
        let y = tape.l2_normalize(a, 1e-12);
        let out = tape.value(y).data();
        assert!((out[0] - 0.6).abs() < 1e-15 && (out[1] - 0.8).abs() < 1e-15);
    }

    #[test]
    fn l2_normalize_unit_norm_rows() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let data = rand_vec(&mut rng, 35);
        let mut tape = Tape::new();
        let a = tape.leaf(Tensor::matrix(5, 7, data).unwrap());
        let y = tape.l2_normalize(a, 1e-12);
        for i in 0..5 {
            let norm: f64 = tape.value(y).row(i).unwrap().iter().map(|v| v * v).sum::<f64>().sqrt();
            assert!((norm - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn l2_normalize_backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let x0 = rand_vec(&mut rng, 35);
        let w = rand_vec(&mut rng, 35);
        let run = |x: &[f64]| -> (f64, Vec<f64>) {
            let mut t = Tape::new();
            let a = t.leaf(Tensor::matrix(5, 7, x.to_vec()).unwrap());
            let y = t.l2_normalize(a, 1e-12);
            let wn = t.leaf(Tensor::matrix(5, 7, w.clone()).unwrap());
            let p = t.mul(y, wn).unwrap();
            let s = t.sum(p);
            let grads = t.backward(s).unwrap();
            (t.value(s).item(), grads.tensor(a, &t).data().to_vec())
        };
        let (_, gx) = run(&x0);
        let mut f = |x: &[f64]| run(x).0;
        assert_grad_close(&gx, &numeric_grad(&mut f, &x0), 1e-5);
    }

    #[test]
    fn elementwise_product_identity_and_zero() {
        let mut tape = Tape::new();
        let a = tape.leaf(Tensor::vector(vec![1.0, 2.0, 3.0]));
        let ones = tape.leaf(Tensor::vector(vec![1.0, 1.0, 1.0]));
        let p = tape.mul(a, ones).unwrap();
        assert_eq!(tape.value(p).data(), &[1.0, 2.0, 3.0]);

        let mut tape = Tape::new();
        let a = tape.leaf(Tensor::vector(vec![1.0, 2.0, 3.0]));
        let zeros = tape.leaf(Tensor::vector(vec![0.0, 0.0, 0.0]));
        let p = tape.mul(a, zeros).unwrap();
        let s = tape.sum(p);
        let grads = tape.backward(s).unwrap();
        assert_eq!(tape.value(p).data(), &[0.0, 0.0, 0.0]);
        assert_eq!(grads.tensor(a, &tape).data(), &[0.0, 0.0, 0.0]);
    }

    #[test]
    fn elementwise_product_gradcheck() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let a0 = rand_vec(&mut rng, 12);
        let b0 = rand_vec(&mut rng, 12);
        let run = |a: &[f64]| -> (f64, Vec<f64>) {
            let mut t = Tape::new();
            let an = t.leaf(Tensor::matrix(3, 4, a.to_vec()).unwrap());
            let bn = t.leaf(Tensor::matrix(3, 4, b0.clone()).unwrap());
            let p = t.mul(an, bn).unwrap();
            let s = t.sum(p);
            let grads = t.backward(s).unwrap();
            (t.value(s).item(), grads.tensor(an, &t).data().to_vec())
        };
        let (_, ga) = run(&a0);
        let mut f = |a: &[f64]| run(a).0;
        assert_grad_close(&ga, &numeric_grad(&mut f, &a0), 1e-6);
    }

    #[test]
    fn row_distance_gradcheck() {
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let a0 = rand_vec(&mut rng, 12);
        let b0 = rand_vec(&mut rng, 12);
        let run = |a: &[f64]| -> (f64, Vec<f64>) {
            let mut t = Tape::new();
            let an = t.leaf(Tensor::matrix(4, 3, a.to_vec()).unwrap());
            let bn = t.leaf(Tensor::matrix(4, 3, b0.clone()).unwrap());
            let d = t.row_distance(an, bn).unwrap();
            let s = t.sum(d);
            let grads = t.backward(s).unwrap();
            (t.value(s).item(), grads.tensor(an, &t).data().to_vec())
        };
        let (_, ga) = run(&a0);
        let mut f = |a: &[f64]| run(a).0;
        assert_grad_close(&ga, &numeric_grad(&mut f, &a0), 1e-4);
    }

    #[test]
    fn logistic_loss_known_values() {
        let mut tape = Tape::new();
        let p = tape.leaf(Tensor::vector(vec![0.0]));
        let l = tape.logistic_loss(p, &[1.0]).unwrap();
        assert!((tape.value(l).item() - std::f64::consts::LN_2).abs() < 1e-12);

        // Saturated cases stay finite: softplus(-50) < 1e-20, softplus(50) ~ 50.
        let mut tape = Tape::new();
        let p = tape.leaf(Tensor::vector(vec![50.0]));
        let l = tape.logistic_loss(p, &[1.0]).unwrap();
        assert!(tape.value(l).item() < 1e-20);
        let mut tape = Tape::new();
        let p = tape.leaf(Tensor::vector(vec![50.0]));
        let l = tape.logistic_loss(p, &[-1.0]).unwrap();
        assert!((tape.value(l).item() - 50.0).abs() < 1e-12);

        let mut tape = Tape::new();
        let p = tape.leaf(Tensor::vector(vec![2.0]));
        let l = tape.logistic_loss(p, &[-1.0]).unwrap();
        let expected = (1.0 + (2.0f64).exp()).ln();
        assert!((tape.value(l).item() - expected).abs() < 1e-12);
    }

    #[test]
    fn logistic_loss_gradcheck() {
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let p0 = rand_vec(&mut rng, 6);
        let labels = vec![1.0, -1.0, 1.0, 1.0, -1.0, -1.0];
        let run = |p: &[f64]| -> (f64, Vec<f64>) {
            let mut t = Tape::new();
            let pn = t.leaf(Tensor::vector(p.to_vec()));
            let l = t.logistic_loss(pn, &labels).unwrap();
            let grads = t.backward(l).unwrap();
            (t.value(l).item(), grads.tensor(pn, &t).data().to_vec())
        };
        let (_, gp) = run(&p0);
        let mut f = |p: &[f64]| run(p).0;
        assert_grad_close(&gp, &numeric_grad(&mut f, &p0), 1e-6);
    }

    #[test]
    fn backward_of_leaf_is_one() {
        let mut tape = Tape::new();
        let a = tape.leaf(Tensor::scalar(3.5));
        let grads = tape.backward(a).unwrap();
        assert_eq!(grads.tensor(a, &tape).data(), &[1.0]);
    }

    #[test]
    fn backward_sum_of_disjoint_leaves() {
        let mut tape = Tape::new();
        let a = tape.leaf(Tensor::vector(vec![1.0, 2.0]));
        let b = tape.leaf(Tensor::vector(vec![3.0, 4.0]));
        let sa = tape.sum(a);
        let sb = tape.sum(b);
        let total = tape.add(sa, sb).unwrap();
        let grads = tape.backward(total).unwrap();
        assert_eq!(grads.tensor(a, &tape).data(), &[1.0, 1.0]);
        assert_eq!(grads.tensor(b, &tape).data(), &[1.0, 1.0]);
    }

    #[test]
    fn backward_rejects_non_scalar_root() {
        let mut tape = Tape::new();
        let a = tape.leaf(Tensor::vector(vec![1.0, 2.0]));
        assert!(matches!(
            tape.backward(a),
            Err(TensorError::NonScalarRoot { .. })
        ));
    }

    #[test]
    fn leaf_off_path_reads_back_zeros() {
        let mut tape = Tape::new();
        let a = tape.leaf(Tensor::vector(vec![1.0, 2.0]));
        let unused = tape.leaf(Tensor::vector(vec![9.0, 9.0, 9.0]));
        let s = tape.sum(a);
        let grads = tape.backward(s).unwrap();
        assert_eq!(grads.tensor(unused, &tape).data(), &[0.0, 0.0, 0.0]);
        assert!(grads.wrt(unused).is_none());
    }

    #[test]
    fn gather_rows_backward_scatters() {
        let mut tape = Tape::new();
        let a = tape.leaf(Tensor::matrix(3, 2, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap());
        let g = tape.gather_rows(a, vec![0, 2, 0]).unwrap();
        assert_eq!(tape.value(g).data(), &[1.0, 2.0, 5.0, 6.0, 1.0, 2.0]);
        let s = tape.sum(g);
        let grads = tape.backward(s).unwrap();
        // Row 0 gathered twice, row 1 never, row 2 once.
        assert_eq!(grads.tensor(a, &tape).data(), &[2.0, 2.0, 0.0, 0.0, 1.0, 1.0]);
    }

    #[test]
    fn hinge_forward_and_inactive_gradient() {
        let mut tape = Tape::new();
        let pos = tape.leaf(Tensor::vector(vec![0.2, 0.5, 0.4]));
        let neg = tape.leaf(Tensor::vector(vec![0.5, 0.4, 0.4]));
        let h = tape.hinge(pos, neg, 0.05).unwrap();
        let out = tape.value(h).data();
        assert!((out[0] - 0.0).abs() < 1e-15);
        assert!((out[1] - 0.15).abs() < 1e-12);
        assert!((out[2] - 0.05).abs() < 1e-12);
        let s = tape.sum(h);
        let grads = tape.backward(s).unwrap();
        // Inactive hinge passes no gradient.
        assert_eq!(grads.tensor(pos, &tape).data()[0], 0.0);
        assert_eq!(grads.tensor(pos, &tape).data()[1], 1.0);
        assert_eq!(grads.tensor(neg, &tape).data()[1], -1.0);
    }

    #[test]
    fn hinge_zero_margin_boundary_is_zero() {
        let mut tape = Tape::new();
        let pos = tape.leaf(Tensor::vector(vec![0.3]));
        let neg = tape.leaf(Tensor::vector(vec![0.3]));
        let h = tape.hinge(pos, neg, 0.0).unwrap();
        assert_eq!(tape.value(h).data(), &[0.0]);
    }

    #[test]
    fn dropout_masks_and_rescales() {
        let mut tape = Tape::new();
        let a = tape.leaf(Tensor::vector(vec![1.0, 2.0, 3.0, 4.0]));
        let d = tape.dropout(a, vec![2.0, 0.0, 2.0, 0.0]).unwrap();
        assert_eq!(tape.value(d).data(), &[2.0, 0.0, 6.0, 0.0]);
        let s = tape.sum(d);
        let grads = tape.backward(s).unwrap();
        assert_eq!(grads.tensor(a, &tape).data(), &[2.0, 0.0, 2.0, 0.0]);
    }

    #[test]
    fn forward_backward_is_deterministic() {
        let mut rng = ChaCha8Rng::seed_from_u64(41);
        let x = rand_vec(&mut rng, 24);
        let w = rand_vec(&mut rng, 12);
        let run = || -> Vec<u64> {
            let mut t = Tape::new();
            let a = t.leaf(Tensor::matrix(8, 3, x.clone()).unwrap());
            let wn = t.leaf(Tensor::matrix(3, 4, w.clone()).unwrap());
            let m = t.matmul(a, wn).unwrap();
            let r = t.relu(m);
            let y = t.l2_normalize(r, 1e-12);
            let s = t.sum(y);
            let grads = t.backward(s).unwrap();
            grads
                .tensor(wn, &t)
                .data()
                .iter()
                .map(|v| v.to_bits())
                .collect()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn batch_norm_train_mode_statistics_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        let (n, d) = (16, 6);
        let x = rand_vec(&mut rng, n * d);
        let mut t = Tape::new();
        let xn = t.leaf(Tensor::matrix(n, d, x).unwrap());
        let g = t.leaf(Tensor::filled(vec![d], 1.0));
        let b = t.leaf(Tensor::zeros(vec![d]));
        let rm = Tensor::zeros(vec![d]);
        let rv = Tensor::filled(vec![d], 1.0);
        let (y, _, _) = t.batch_norm_train(xn, g, b, 1e-5, 0.9, &rm, &rv).unwrap();
        let out = t.value(y);
        for j in 0..d {
            let mut mean = 0.0;
            let mut var = 0.0;
            for i in 0..n {
                mean += out.data()[i * d + j];
            }
            mean /= n as f64;
            for i in 0..n {
                let c = out.data()[i * d + j] - mean;
                var += c * c;
            }
            var /= n as f64;
            assert!(mean.abs() < 1e-9, "column mean {mean}");
            assert!((var - 1.0).abs() < 1e-4, "column variance {var}");
        }
    }
}
