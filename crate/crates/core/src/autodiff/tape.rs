//! Wengert tape: records operations during the forward pass, replays them in
//! reverse to accumulate gradients.
//!
//! The tape is rebuilt from scratch for every training step (define-by-run).
//! Operations whose inputs are all constants are evaluated eagerly and not
//! recorded, so forward-only inference on constant parameters leaves the tape
//! empty.

use std::sync::Arc;

use super::special::{digamma, ln_gamma};
use super::tensor::Tensor;
use super::AdError;

pub type NodeId = usize;

/// One operand of a recorded operation: the forward values plus the node id
/// when the operand is tracked. Constant operands keep `node: None` and never
/// receive gradient.
#[derive(Clone)]
struct Src {
    values: Arc<Vec<f64>>,
    node: Option<NodeId>,
}

impl Src {
    fn of(t: &Tensor) -> Src {
        Src {
            values: t.values_arc(),
            node: t.node(),
        }
    }
}

/// Elementwise map kinds with analytic derivatives.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MapKind {
    Relu,
    Softplus,
    Exp,
    Log,
    LnGamma,
    Recip,
    Neg,
}

impl MapKind {
    pub fn name(self) -> &'static str {
        match self {
            MapKind::Relu => "relu",
            MapKind::Softplus => "softplus",
            MapKind::Exp => "exp",
            MapKind::Log => "log",
            MapKind::LnGamma => "log-gamma",
            MapKind::Recip => "recip",
            MapKind::Neg => "neg",
        }
    }

    fn apply(self, x: f64) -> f64 {
        match self {
            MapKind::Relu => {
                if x > 0.0 {
                    x
                } else {
                    0.0
                }
            }
            MapKind::Softplus => softplus(x),
            MapKind::Exp => x.exp(),
            MapKind::Log => x.ln(),
            MapKind::LnGamma => ln_gamma(x),
            MapKind::Recip => 1.0 / x,
            MapKind::Neg => -x,
        }
    }

    fn derivative(self, x: f64) -> f64 {
        match self {
            MapKind::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            MapKind::Softplus => sigmoid(x),
            MapKind::Exp => x.exp(),
            MapKind::Log => 1.0 / x,
            MapKind::LnGamma => digamma(x),
            MapKind::Recip => -1.0 / (x * x),
            MapKind::Neg => -1.0,
        }
    }

    /// Returns the index of the first element violating the map's domain.
    fn domain_violation(self, values: &[f64]) -> Option<(usize, f64)> {
        match self {
            MapKind::Log | MapKind::LnGamma => values
                .iter()
                .enumerate()
                .find(|(_, &v)| !(v > 0.0))
                .map(|(i, &v)| (i, v)),
            MapKind::Recip => values
                .iter()
                .enumerate()
                .find(|(_, &v)| v == 0.0)
                .map(|(i, &v)| (i, v)),
            _ => None,
        }
    }
}

fn softplus(x: f64) -> f64 {
    // max(x, 0) + ln(1 + exp(-|x|)) avoids overflow on large |x|.
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

enum Op {
    Add {
        a: Src,
        b: Src,
    },
    Sub {
        a: Src,
        b: Src,
    },
    Mul {
        a: Src,
        b: Src,
    },
    Scale {
        a: Src,
        factor: f64,
    },
    AddScalar {
        a: Src,
    },
    Map {
        kind: MapKind,
        a: Src,
    },
    /// out[i,j] = sum_k x[i,k] w[k,j] + b[j]
    Linear {
        x: Src,
        w: Src,
        b: Src,
        n: usize,
        din: usize,
        dout: usize,
    },
    /// out = a @ b, a: [m,k], b: [k,n]
    Matmul {
        a: Src,
        b: Src,
        m: usize,
        k: usize,
        n: usize,
    },
    Transpose {
        a: Src,
        rows: usize,
        cols: usize,
    },
    LayerNorm {
        x: Src,
        gain: Src,
        bias: Src,
        eps: f64,
        rows: usize,
        dim: usize,
    },
    Sum {
        a: Src,
    },
    /// Column-wise concatenation of 2-d parts sharing a row count.
    ConcatCols {
        parts: Vec<(Src, usize)>,
        rows: usize,
    },
    /// Extract column `col` of a 2-d tensor as a vector.
    Column {
        a: Src,
        rows: usize,
        cols: usize,
        col: usize,
    },
    /// out[i, :] = table[indices[i], :]
    Lookup {
        table: Src,
        indices: Arc<Vec<u32>>,
        dim: usize,
    },
}

struct Record {
    out: NodeId,
    op: Op,
}

/// Gradients accumulated by [`Tape::backward`], keyed by node id.
pub struct Gradients {
    per_node: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    /// Gradient for a tensor, or `None` when no gradient reached it
    /// (constants and unreachable nodes).
    pub fn get(&self, t: &Tensor) -> Option<&[f64]> {
        let node = t.node()?;
        self.per_node.get(node).and_then(|g| g.as_deref())
    }

    /// Gradient for a tensor, materializing zeros for constants and
    /// unreachable nodes.
    pub fn get_or_zeros(&self, t: &Tensor) -> Vec<f64> {
        match self.get(t) {
            Some(g) => g.to_vec(),
            None => vec![0.0; t.len()],
        }
    }
}

/// Records operations on tracked tensors and replays them in reverse.
///
/// A tape and the tracked tensors it produces are confined to one thread;
/// independent tapes may run concurrently.
#[derive(Default)]
pub struct Tape {
    records: Vec<Record>,
    node_sizes: Vec<usize>,
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn num_nodes(&self) -> usize {
        self.node_sizes.len()
    }

    pub fn num_records(&self) -> usize {
        self.records.len()
    }

    fn fresh_node(&mut self, size: usize) -> NodeId {
        let id = self.node_sizes.len();
        self.node_sizes.push(size);
        id
    }

    /// Register a tensor as a tracked leaf variable. The returned handle
    /// shares the input's storage.
    pub fn var(&mut self, t: &Tensor) -> Tensor {
        let node = self.fresh_node(t.len());
        Tensor::tracked_shared(t.values_arc(), t.shape().to_vec(), node)
    }

    fn push(&mut self, values: Vec<f64>, shape: Vec<usize>, op: Op) -> Tensor {
        let node = self.fresh_node(values.len());
        self.records.push(Record { out: node, op });
        Tensor::tracked(values, shape, node)
    }

    fn binary_values<F: Fn(f64, f64) -> f64>(
        op: &'static str,
        a: &Tensor,
        b: &Tensor,
        f: F,
    ) -> Result<Vec<f64>, AdError> {
        if a.shape() != b.shape() {
            return Err(AdError::Dim {
                op,
                detail: format!("operand shapes {:?} vs {:?}", a.shape(), b.shape()),
            });
        }
        Ok(a.values()
            .iter()
            .zip(b.values())
            .map(|(&x, &y)| f(x, y))
            .collect())
    }

    pub fn add(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor, AdError> {
        let values = Self::binary_values("add", a, b, |x, y| x + y)?;
        if a.node().is_none() && b.node().is_none() {
            return Tensor::from_vec(values, a.shape());
        }
        Ok(self.push(
            values,
            a.shape().to_vec(),
            Op::Add {
                a: Src::of(a),
                b: Src::of(b),
            },
        ))
    }

    pub fn sub(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor, AdError> {
        let values = Self::binary_values("sub", a, b, |x, y| x - y)?;
        if a.node().is_none() && b.node().is_none() {
            return Tensor::from_vec(values, a.shape());
        }
        Ok(self.push(
            values,
            a.shape().to_vec(),
            Op::Sub {
                a: Src::of(a),
                b: Src::of(b),
            },
        ))
    }

    pub fn mul(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor, AdError> {
        let values = Self::binary_values("mul", a, b, |x, y| x * y)?;
        if a.node().is_none() && b.node().is_none() {
            return Tensor::from_vec(values, a.shape());
        }
        Ok(self.push(
            values,
            a.shape().to_vec(),
            Op::Mul {
                a: Src::of(a),
                b: Src::of(b),
            },
        ))
    }

    pub fn scale(&mut self, a: &Tensor, factor: f64) -> Tensor {
        let values: Vec<f64> = a.values().iter().map(|&x| x * factor).collect();
        if a.node().is_none() {
            return Tensor::from_vec(values, a.shape()).expect("shape preserved");
        }
        self.push(
            values,
            a.shape().to_vec(),
            Op::Scale {
                a: Src::of(a),
                factor,
            },
        )
    }

    pub fn add_scalar(&mut self, a: &Tensor, constant: f64) -> Tensor {
        let values: Vec<f64> = a.values().iter().map(|&x| x + constant).collect();
        if a.node().is_none() {
            return Tensor::from_vec(values, a.shape()).expect("shape preserved");
        }
        self.push(values, a.shape().to_vec(), Op::AddScalar { a: Src::of(a) })
    }

    /// Elementwise map with the kind's analytic backward rule.
    pub fn map(&mut self, kind: MapKind, a: &Tensor) -> Result<Tensor, AdError> {
        if let Some((index, value)) = kind.domain_violation(a.values()) {
            return Err(AdError::Domain {
                op: kind.name(),
                index,
                value,
            });
        }
        let values: Vec<f64> = a.values().iter().map(|&x| kind.apply(x)).collect();
        if a.node().is_none() {
            return Tensor::from_vec(values, a.shape());
        }
        Ok(self.push(
            values,
            a.shape().to_vec(),
            Op::Map {
                kind,
                a: Src::of(a),
            },
        ))
    }

    pub fn relu(&mut self, a: &Tensor) -> Result<Tensor, AdError> {
        self.map(MapKind::Relu, a)
    }

    pub fn softplus(&mut self, a: &Tensor) -> Result<Tensor, AdError> {
        self.map(MapKind::Softplus, a)
    }

    pub fn neg(&mut self, a: &Tensor) -> Result<Tensor, AdError> {
        self.map(MapKind::Neg, a)
    }

    /// out = x w + b with b broadcast over rows.
    /// x: [n, din] (or [din] treated as one row), w: [din, dout], b: [dout].
    pub fn linear(&mut self, x: &Tensor, w: &Tensor, b: &Tensor) -> Result<Tensor, AdError> {
        let (n, din) = x.rows_cols();
        if w.shape().len() != 2 {
            return Err(AdError::Dim {
                op: "linear",
                detail: format!("weight must be 2-d, got shape {:?}", w.shape()),
            });
        }
        let (wdin, dout) = (w.shape()[0], w.shape()[1]);
        if din != wdin {
            return Err(AdError::Dim {
                op: "linear",
                detail: format!(
                    "input axis 1 ({}) does not match weight axis 0 ({})",
                    din, wdin
                ),
            });
        }
        if b.len() != dout {
            return Err(AdError::Dim {
                op: "linear",
                detail: format!(
                    "bias length {} does not match weight axis 1 ({})",
                    b.len(),
                    dout
                ),
            });
        }
        let values = linear_forward(x.values(), w.values(), b.values(), n, din, dout);
        let out_shape = if x.shape().len() == 1 {
            vec![dout]
        } else {
            vec![n, dout]
        };
        if x.node().is_none() && w.node().is_none() && b.node().is_none() {
            return Tensor::from_vec(values, &out_shape);
        }
        Ok(self.push(
            values,
            out_shape,
            Op::Linear {
                x: Src::of(x),
                w: Src::of(w),
                b: Src::of(b),
                n,
                din,
                dout,
            },
        ))
    }

    /// Matrix product a @ b. 1-d operands are promoted to a single row (a)
    /// or a single column (b); the output keeps the promoted rank.
    pub fn matmul(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor, AdError> {
        let (m, ka) = a.rows_cols();
        let (kb, n, b_was_vec) = match b.shape().len() {
            1 => (b.shape()[0], 1, true),
            _ => (b.shape()[0], b.shape()[1], false),
        };
        if ka != kb {
            return Err(AdError::Dim {
                op: "matmul",
                detail: format!(
                    "inner axes differ: left has {} columns, right has {} rows",
                    ka, kb
                ),
            });
        }
        let values = matmul_values(a.values(), b.values(), m, ka, n);
        let out_shape = match (a.shape().len() == 1, b_was_vec) {
            (true, true) => vec![1],
            (true, false) => vec![n],
            (false, true) => vec![m],
            (false, false) => vec![m, n],
        };
        if a.node().is_none() && b.node().is_none() {
            return Tensor::from_vec(values, &out_shape);
        }
        Ok(self.push(
            values,
            out_shape,
            Op::Matmul {
                a: Src::of(a),
                b: Src::of(b),
                m,
                k: ka,
                n,
            },
        ))
    }

    pub fn transpose(&mut self, a: &Tensor) -> Result<Tensor, AdError> {
        if a.shape().len() != 2 {
            return Err(AdError::Dim {
                op: "transpose",
                detail: format!("expected 2-d tensor, got shape {:?}", a.shape()),
            });
        }
        let (rows, cols) = (a.shape()[0], a.shape()[1]);
        let values = transpose_values(a.values(), rows, cols);
        if a.node().is_none() {
            return Tensor::from_vec(values, &[cols, rows]);
        }
        Ok(self.push(
            values,
            vec![cols, rows],
            Op::Transpose {
                a: Src::of(a),
                rows,
                cols,
            },
        ))
    }

    /// Standardize over the last axis, then apply the affine gain/bias.
    pub fn layer_norm(
        &mut self,
        x: &Tensor,
        gain: &Tensor,
        bias: &Tensor,
        eps: f64,
    ) -> Result<Tensor, AdError> {
        let (rows, dim) = x.rows_cols();
        if gain.len() != dim || bias.len() != dim {
            return Err(AdError::Dim {
                op: "layer_norm",
                detail: format!(
                    "gain/bias lengths {}/{} do not match last axis {}",
                    gain.len(),
                    bias.len(),
                    dim
                ),
            });
        }
        if eps < 0.0 {
            return Err(AdError::Contract(format!("layer_norm eps {} < 0", eps)));
        }
        let values = layer_norm_forward(x.values(), gain.values(), bias.values(), rows, dim, eps);
        if x.node().is_none() && gain.node().is_none() && bias.node().is_none() {
            return Tensor::from_vec(values, x.shape());
        }
        Ok(self.push(
            values,
            x.shape().to_vec(),
            Op::LayerNorm {
                x: Src::of(x),
                gain: Src::of(gain),
                bias: Src::of(bias),
                eps,
                rows,
                dim,
            },
        ))
    }

    pub fn sum(&mut self, a: &Tensor) -> Tensor {
        let total: f64 = a.values().iter().sum();
        if a.node().is_none() {
            return Tensor::scalar(total);
        }
        self.push(vec![total], vec![1], Op::Sum { a: Src::of(a) })
    }

    pub fn mean(&mut self, a: &Tensor) -> Tensor {
        let s = self.sum(a);
        self.scale(&s, 1.0 / a.len() as f64)
    }

    /// Concatenate 2-d tensors along the column axis. 1-d operands are
    /// treated as single columns.
    pub fn concat_cols(&mut self, parts: &[&Tensor]) -> Result<Tensor, AdError> {
        if parts.is_empty() {
            return Err(AdError::Contract("concat_cols of zero tensors".into()));
        }
        let rows = match parts[0].shape().len() {
            1 => parts[0].shape()[0],
            _ => parts[0].shape()[0],
        };
        let mut widths = Vec::with_capacity(parts.len());
        for p in parts {
            let (r, c) = match p.shape().len() {
                1 => (p.shape()[0], 1),
                2 => (p.shape()[0], p.shape()[1]),
                _ => {
                    return Err(AdError::Dim {
                        op: "concat_cols",
                        detail: format!("operand of rank {} not supported", p.shape().len()),
                    })
                }
            };
            if r != rows {
                return Err(AdError::Dim {
                    op: "concat_cols",
                    detail: format!("row counts differ: {} vs {}", rows, r),
                });
            }
            widths.push(c);
        }
        let total: usize = widths.iter().sum();
        let mut values = vec![0.0; rows * total];
        let mut offset = 0;
        for (p, &w) in parts.iter().zip(&widths) {
            let pv = p.values();
            for r in 0..rows {
                values[r * total + offset..r * total + offset + w]
                    .copy_from_slice(&pv[r * w..(r + 1) * w]);
            }
            offset += w;
        }
        if parts.iter().all(|p| p.node().is_none()) {
            return Tensor::from_vec(values, &[rows, total]);
        }
        let srcs = parts
            .iter()
            .zip(&widths)
            .map(|(p, &w)| (Src::of(p), w))
            .collect();
        Ok(self.push(
            values,
            vec![rows, total],
            Op::ConcatCols { parts: srcs, rows },
        ))
    }

    /// Extract one column of a 2-d tensor as a vector.
    pub fn column(&mut self, a: &Tensor, col: usize) -> Result<Tensor, AdError> {
        if a.shape().len() != 2 {
            return Err(AdError::Dim {
                op: "column",
                detail: format!("expected 2-d tensor, got shape {:?}", a.shape()),
            });
        }
        let (rows, cols) = (a.shape()[0], a.shape()[1]);
        if col >= cols {
            return Err(AdError::Dim {
                op: "column",
                detail: format!("column {} out of range for {} columns", col, cols),
            });
        }
        let values: Vec<f64> = (0..rows).map(|r| a.values()[r * cols + col]).collect();
        if a.node().is_none() {
            return Tensor::from_vec(values, &[rows]);
        }
        Ok(self.push(
            values,
            vec![rows],
            Op::Column {
                a: Src::of(a),
                rows,
                cols,
                col,
            },
        ))
    }

    /// Row gather: out[i, :] = table[indices[i], :].
    pub fn lookup(&mut self, table: &Tensor, indices: &[u32]) -> Result<Tensor, AdError> {
        if table.shape().len() != 2 {
            return Err(AdError::Dim {
                op: "lookup",
                detail: format!("table must be 2-d, got shape {:?}", table.shape()),
            });
        }
        let (rows, dim) = (table.shape()[0], table.shape()[1]);
        if let Some(&bad) = indices.iter().find(|&&i| i as usize >= rows) {
            return Err(AdError::Dim {
                op: "lookup",
                detail: format!("index {} out of range for table with {} rows", bad, rows),
            });
        }
        let mut values = vec![0.0; indices.len() * dim];
        for (i, &idx) in indices.iter().enumerate() {
            let row = &table.values()[idx as usize * dim..(idx as usize + 1) * dim];
            values[i * dim..(i + 1) * dim].copy_from_slice(row);
        }
        let out_shape = vec![indices.len(), dim];
        if table.node().is_none() {
            return Tensor::from_vec(values, &out_shape);
        }
        Ok(self.push(
            values,
            out_shape,
            Op::Lookup {
                table: Src::of(table),
                indices: Arc::new(indices.to_vec()),
                dim,
            },
        ))
    }

    /// Reverse pass from a scalar loss. Returns gradients for every node
    /// reachable backward from the loss; all other nodes read as zero.
    pub fn backward(&self, loss: &Tensor) -> Result<Gradients, AdError> {
        let node = loss.node().ok_or_else(|| {
            AdError::Contract("backward from a constant: loss is not on the tape".into())
        })?;
        if !loss.is_scalar() {
            return Err(AdError::Contract(format!(
                "backward requires a scalar loss, got shape {:?}",
                loss.shape()
            )));
        }
        let mut per_node: Vec<Option<Vec<f64>>> = vec![None; self.node_sizes.len()];
        per_node[node] = Some(vec![1.0]);

        for record in self.records.iter().rev() {
            let upstream = match per_node[record.out].take() {
                Some(g) => g,
                None => continue,
            };
            self.backward_op(&record.op, &upstream, &mut per_node);
            per_node[record.out] = Some(upstream);
        }
        Ok(Gradients { per_node })
    }

    fn backward_op(&self, op: &Op, g: &[f64], per_node: &mut [Option<Vec<f64>>]) {
        match op {
            Op::Add { a, b } => {
                accumulate(per_node, a.node, g.iter().copied());
                accumulate(per_node, b.node, g.iter().copied());
            }
            Op::Sub { a, b } => {
                accumulate(per_node, a.node, g.iter().copied());
                accumulate(per_node, b.node, g.iter().map(|&x| -x));
            }
            Op::Mul { a, b } => {
                if a.node.is_some() {
                    accumulate(
                        per_node,
                        a.node,
                        g.iter().zip(b.values.iter()).map(|(&gi, &bi)| gi * bi),
                    );
                }
                if b.node.is_some() {
                    accumulate(
                        per_node,
                        b.node,
                        g.iter().zip(a.values.iter()).map(|(&gi, &ai)| gi * ai),
                    );
                }
            }
            Op::Scale { a, factor } => {
                accumulate(per_node, a.node, g.iter().map(|&x| x * factor));
            }
            Op::AddScalar { a } => {
                accumulate(per_node, a.node, g.iter().copied());
            }
            Op::Map { kind, a } => {
                if a.node.is_some() {
                    accumulate(
                        per_node,
                        a.node,
                        g.iter()
                            .zip(a.values.iter())
                            .map(|(&gi, &xi)| gi * kind.derivative(xi)),
                    );
                }
            }
            Op::Linear {
                x,
                w,
                b,
                n,
                din,
                dout,
            } => {
                let (n, din, dout) = (*n, *din, *dout);
                if x.node.is_some() {
                    // dx = g @ w^T
                    let mut dx = vec![0.0; n * din];
                    for i in 0..n {
                        for j in 0..dout {
                            let gij = g[i * dout + j];
                            if gij == 0.0 {
                                continue;
                            }
                            let wrow = &w.values[..];
                            for k in 0..din {
                                dx[i * din + k] += gij * wrow[k * dout + j];
                            }
                        }
                    }
                    accumulate(per_node, x.node, dx.into_iter());
                }
                if w.node.is_some() {
                    // dw = x^T @ g
                    let mut dw = vec![0.0; din * dout];
                    for i in 0..n {
                        for k in 0..din {
                            let xik = x.values[i * din + k];
                            if xik == 0.0 {
                                continue;
                            }
                            for j in 0..dout {
                                dw[k * dout + j] += xik * g[i * dout + j];
                            }
                        }
                    }
                    accumulate(per_node, w.node, dw.into_iter());
                }
                if b.node.is_some() {
                    let mut db = vec![0.0; dout];
                    for i in 0..n {
                        for j in 0..dout {
                            db[j] += g[i * dout + j];
                        }
                    }
                    accumulate(per_node, b.node, db.into_iter());
                }
            }
            Op::Matmul { a, b, m, k, n } => {
                let (m, k, n) = (*m, *k, *n);
                if a.node.is_some() {
                    // da = g @ b^T
                    let mut da = vec![0.0; m * k];
                    for i in 0..m {
                        for j in 0..n {
                            let gij = g[i * n + j];
                            if gij == 0.0 {
                                continue;
                            }
                            for p in 0..k {
                                da[i * k + p] += gij * b.values[p * n + j];
                            }
                        }
                    }
                    accumulate(per_node, a.node, da.into_iter());
                }
                if b.node.is_some() {
                    // db = a^T @ g
                    let mut db = vec![0.0; k * n];
                    for i in 0..m {
                        for p in 0..k {
                            let aip = a.values[i * k + p];
                            if aip == 0.0 {
                                continue;
                            }
                            for j in 0..n {
                                db[p * n + j] += aip * g[i * n + j];
                            }
                        }
                    }
                    accumulate(per_node, b.node, db.into_iter());
                }
            }
            Op::Transpose { a, rows, cols } => {
                // upstream has shape [cols, rows]; send it back transposed
                accumulate(
                    per_node,
                    a.node,
                    transpose_values(g, *cols, *rows).into_iter(),
                );
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                eps,
                rows,
                dim,
            } => {
                let (rows, dim) = (*rows, *dim);
                let mut dx = if x.node.is_some() {
                    vec![0.0; rows * dim]
                } else {
                    Vec::new()
                };
                let mut dgain = vec![0.0; dim];
                let mut dbias = vec![0.0; dim];
                for r in 0..rows {
                    let xr = &x.values[r * dim..(r + 1) * dim];
                    let gr = &g[r * dim..(r + 1) * dim];
                    let mean = xr.iter().sum::<f64>() / dim as f64;
                    let var = xr.iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / dim as f64;
                    let inv_std = 1.0 / (var + eps).sqrt();
                    let xhat: Vec<f64> = xr.iter().map(|&v| (v - mean) * inv_std).collect();
                    for j in 0..dim {
                        dgain[j] += gr[j] * xhat[j];
                        dbias[j] += gr[j];
                    }
                    if x.node.is_some() {
                        let dxhat: Vec<f64> = gr
                            .iter()
                            .zip(gain.values.iter())
                            .map(|(&gi, &ga)| gi * ga)
                            .collect();
                        let mean_dxhat = dxhat.iter().sum::<f64>() / dim as f64;
                        let mean_dxhat_xhat = dxhat
                            .iter()
                            .zip(&xhat)
                            .map(|(&d, &h)| d * h)
                            .sum::<f64>()
                            / dim as f64;
                        for j in 0..dim {
                            dx[r * dim + j] =
                                inv_std * (dxhat[j] - mean_dxhat - xhat[j] * mean_dxhat_xhat);
                        }
                    }
                }
                if x.node.is_some() {
                    accumulate(per_node, x.node, dx.into_iter());
                }
                accumulate(per_node, gain.node, dgain.into_iter());
                accumulate(per_node, bias.node, dbias.into_iter());
            }
            Op::Sum { a } => {
                let g0 = g[0];
                if a.node.is_some() {
                    let n = a.values.len();
                    accumulate(per_node, a.node, std::iter::repeat(g0).take(n));
                }
            }
            Op::ConcatCols { parts, rows } => {
                let rows = *rows;
                let total: usize = parts.iter().map(|(_, w)| *w).sum();
                let mut offset = 0;
                for (src, w) in parts {
                    if src.node.is_some() {
                        let mut dp = vec![0.0; rows * w];
                        for r in 0..rows {
                            dp[r * w..(r + 1) * w]
                                .copy_from_slice(&g[r * total + offset..r * total + offset + w]);
                        }
                        accumulate(per_node, src.node, dp.into_iter());
                    }
                    offset += w;
                }
            }
            Op::Column {
                a,
                rows,
                cols,
                col,
            } => {
                if a.node.is_some() {
                    let mut da = vec![0.0; rows * cols];
                    for r in 0..*rows {
                        da[r * cols + col] = g[r];
                    }
                    accumulate(per_node, a.node, da.into_iter());
                }
            }
            Op::Lookup {
                table,
                indices,
                dim,
            } => {
                if table.node.is_some() {
                    let mut dt = vec![0.0; table.values.len()];
                    for (i, &idx) in indices.iter().enumerate() {
                        let base = idx as usize * dim;
                        for j in 0..*dim {
                            dt[base + j] += g[i * dim + j];
                        }
                    }
                    accumulate(per_node, table.node, dt.into_iter());
                }
            }
        }
    }
}

fn accumulate<I: Iterator<Item = f64>>(
    per_node: &mut [Option<Vec<f64>>],
    node: Option<NodeId>,
    contribution: I,
) {
    let Some(id) = node else { return };
    match &mut per_node[id] {
        Some(existing) => {
            for (e, c) in existing.iter_mut().zip(contribution) {
                *e += c;
            }
        }
        slot @ None => {
            *slot = Some(contribution.collect());
        }
    }
}

pub(crate) fn matmul_values(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for p in 0..k {
            let aip = a[i * k + p];
            if aip == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            let orow = &mut out[i * n..(i + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += aip * bv;
            }
        }
    }
    out
}

fn linear_forward(x: &[f64], w: &[f64], b: &[f64], n: usize, din: usize, dout: usize) -> Vec<f64> {
    let mut out = vec![0.0; n * dout];
    for i in 0..n {
        let orow = &mut out[i * dout..(i + 1) * dout];
        orow.copy_from_slice(b);
        for p in 0..din {
            let xip = x[i * din + p];
            if xip == 0.0 {
                continue;
            }
            let wrow = &w[p * dout..(p + 1) * dout];
            for (o, &wv) in orow.iter_mut().zip(wrow) {
                *o += xip * wv;
            }
        }
    }
    out
}

fn transpose_values(a: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; rows * cols];
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = a[r * cols + c];
        }
    }
    out
}

fn layer_norm_forward(
    x: &[f64],
    gain: &[f64],
    bias: &[f64],
    rows: usize,
    dim: usize,
    eps: f64,
) -> Vec<f64> {
    let mut out = vec![0.0; rows * dim];
    for r in 0..rows {
        let xr = &x[r * dim..(r + 1) * dim];
        let mean = xr.iter().sum::<f64>() / dim as f64;
        let var = xr.iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / dim as f64;
        let inv_std = 1.0 / (var + eps).sqrt();
        for j in 0..dim {
            out[r * dim + j] = (xr[j] - mean) * inv_std * gain[j] + bias[j];
        }
    }
    out
}
