use std::sync::Arc;

use super::tape::NodeId;
use super::AdError;

/// Dense n-dimensional array of 64-bit floats, stored row-major.
///
/// A tensor optionally carries a node id tying it to the [`Tape`](super::Tape)
/// that produced it. Tensors without a node id are constants: they never
/// receive gradient and operations on them are not recorded.
///
/// Values are shared behind an `Arc`, so cloning a tensor (or registering it
/// as a tape variable) is cheap and never copies the data.
#[derive(Debug, Clone)]
pub struct Tensor {
    shape: Vec<usize>,
    values: Arc<Vec<f64>>,
    node: Option<NodeId>,
}

impl Tensor {
    /// Constant tensor from raw values. Fails if the value count does not
    /// match the product of the shape extents.
    pub fn from_vec(values: Vec<f64>, shape: &[usize]) -> Result<Self, AdError> {
        let expected: usize = shape.iter().product();
        if values.len() != expected {
            return Err(AdError::Dim {
                op: "from_vec",
                detail: format!(
                    "shape {:?} implies {} values, got {}",
                    shape,
                    expected,
                    values.len()
                ),
            });
        }
        if shape.iter().any(|&e| e == 0) {
            return Err(AdError::Dim {
                op: "from_vec",
                detail: format!("shape {:?} has a zero extent", shape),
            });
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            values: Arc::new(values),
            node: None,
        })
    }

    /// 1-d constant.
    pub fn vector(values: Vec<f64>) -> Self {
        let n = values.len();
        Tensor::from_vec(values, &[n]).expect("vector shape always consistent")
    }

    /// Scalar constant, represented with shape `[1]`.
    pub fn scalar(value: f64) -> Self {
        Tensor {
            shape: vec![1],
            values: Arc::new(vec![value]),
            node: None,
        }
    }

    /// All-zero constant of the given shape.
    pub fn zeros(shape: &[usize]) -> Self {
        let n: usize = shape.iter().product();
        Tensor::from_vec(vec![0.0; n], shape).expect("zeros shape always consistent")
    }

    pub(crate) fn tracked(values: Vec<f64>, shape: Vec<usize>, node: NodeId) -> Self {
        Tensor {
            shape,
            values: Arc::new(values),
            node: Some(node),
        }
    }

    pub(crate) fn tracked_shared(values: Arc<Vec<f64>>, shape: Vec<usize>, node: NodeId) -> Self {
        Tensor {
            shape,
            values,
            node: Some(node),
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub(crate) fn values_arc(&self) -> Arc<Vec<f64>> {
        Arc::clone(&self.values)
    }

    /// Mutable access to the values, copy-on-write if the buffer is shared.
    /// Used by the optimizer to update parameters in place; any tape that
    /// captured this tensor keeps its own forward snapshot.
    pub fn values_mut(&mut self) -> &mut Vec<f64> {
        Arc::make_mut(&mut self.values)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn node(&self) -> Option<NodeId> {
        self.node
    }

    pub fn is_scalar(&self) -> bool {
        self.values.len() == 1
    }

    /// Scalar value of a single-element tensor.
    pub fn item(&self) -> Result<f64, AdError> {
        if self.is_scalar() {
            Ok(self.values[0])
        } else {
            Err(AdError::Contract(format!(
                "item() on tensor of shape {:?}",
                self.shape
            )))
        }
    }

    /// Value-identical tensor with no tape node: gradients never flow
    /// through the result.
    pub fn detach(&self) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            values: Arc::clone(&self.values),
            node: None,
        }
    }

    /// Same storage and tape node viewed under a different shape.
    /// Gradients are accumulated per buffer, so a reshape needs no tape entry.
    pub fn reshaped(&self, shape: &[usize]) -> Result<Tensor, AdError> {
        let expected: usize = shape.iter().product();
        if expected != self.values.len() {
            return Err(AdError::Dim {
                op: "reshape",
                detail: format!(
                    "cannot view {} values as shape {:?}",
                    self.values.len(),
                    shape
                ),
            });
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            values: Arc::clone(&self.values),
            node: self.node,
        })
    }

    /// Rows of a 2-d tensor; a 1-d tensor is treated as a single row.
    pub(crate) fn rows_cols(&self) -> (usize, usize) {
        match self.shape.len() {
            1 => (1, self.shape[0]),
            2 => (self.shape[0], self.shape[1]),
            _ => (self.shape[0], self.values.len() / self.shape[0]),
        }
    }
}
