//! The dense tensor value type.

/// Handle to a node on a specific tape: (tape id, node index).
pub(crate) type NodeRef = (u64, usize);

/// A dense multi-dimensional array of `f64` in row-major order.
///
/// The optional node handle is set when the tensor was produced by (or
/// registered on) a tape; it is ignored by equality and cleared by
/// [`Tensor::detach`].
#[derive(Clone, Debug)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
    pub(crate) node: Option<NodeRef>,
}

impl Tensor {
    /// Builds a tensor from a shape and row-major data.
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Self {
        let n: usize = shape.iter().product();
        assert!(
            n == data.len(),
            "tensor shape {:?} implies {} elements, got {}",
            shape,
            n,
            data.len()
        );
        assert!(
            shape.iter().all(|&d| d > 0),
            "tensor dimensions must be positive, got {:?}",
            shape
        );
        Tensor { shape, data, node: None }
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Self::new(shape, vec![0.0; n])
    }

    pub fn filled(shape: Vec<usize>, v: f64) -> Self {
        let n = shape.iter().product();
        Self::new(shape, vec![v; n])
    }

    pub fn scalar(v: f64) -> Self {
        Self::new(vec![1], vec![v])
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1
    }

    /// The value of a scalar tensor.
    pub fn item(&self) -> f64 {
        assert!(self.is_scalar(), "item() on non-scalar shape {:?}", self.shape);
        self.data[0]
    }

    /// Element of a rank-2 tensor.
    pub fn at2(&self, r: usize, c: usize) -> f64 {
        debug_assert_eq!(self.shape.len(), 2);
        self.data[r * self.shape[1] + c]
    }

    /// Element of a rank-3 tensor.
    pub fn at3(&self, a: usize, b: usize, c: usize) -> f64 {
        debug_assert_eq!(self.shape.len(), 3);
        self.data[(a * self.shape[1] + b) * self.shape[2] + c]
    }

    /// Same values with any tape handle removed.
    pub fn detach(&self) -> Tensor {
        Tensor { shape: self.shape.clone(), data: self.data.clone(), node: None }
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Euclidean norm of the flattened values.
    pub fn l2(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    /// Elementwise sum, off-tape.
    pub fn plus(&self, other: &Tensor) -> Tensor {
        assert_eq!(self.shape, other.shape, "plus: shape mismatch");
        let data = self.data.iter().zip(&other.data).map(|(a, b)| a + b).collect();
        Tensor::new(self.shape.clone(), data)
    }

    /// Elementwise difference, off-tape.
    pub fn minus(&self, other: &Tensor) -> Tensor {
        assert_eq!(self.shape, other.shape, "minus: shape mismatch");
        let data = self.data.iter().zip(&other.data).map(|(a, b)| a - b).collect();
        Tensor::new(self.shape.clone(), data)
    }

    /// Elementwise product, off-tape.
    pub fn hadamard(&self, other: &Tensor) -> Tensor {
        assert_eq!(self.shape, other.shape, "hadamard: shape mismatch");
        let data = self.data.iter().zip(&other.data).map(|(a, b)| a * b).collect();
        Tensor::new(self.shape.clone(), data)
    }

    /// Scalar multiple, off-tape.
    pub fn scaled(&self, c: f64) -> Tensor {
        Tensor::new(self.shape.clone(), self.data.iter().map(|v| v * c).collect())
    }

    pub(crate) fn raw(shape: Vec<usize>, data: Vec<f64>) -> Tensor {
        Tensor { shape, data, node: None }
    }

    pub(crate) fn with_node(shape: Vec<usize>, data: Vec<f64>, node: NodeRef) -> Tensor {
        Tensor { shape, data, node: Some(node) }
    }
}

// Equality compares values only; where a tensor was recorded is not part of
// its identity.
impl PartialEq for Tensor {
    fn eq(&self, other: &Self) -> bool {
        self.shape == other.shape && self.data == other.data
    }
}
