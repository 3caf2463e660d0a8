//! Dense row-major tensor, the carrier of activations, parameters, and
//! gradients. Double precision throughout so finite-difference checks are
//! meaningful.

/// N-dimensional array with shape metadata. `data.len()` always equals the
/// product of `shape`.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    /// Panics if the element count does not match the shape; that is a
    /// programming error, not a runtime condition.
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Self {
        let expected: usize = shape.iter().product();
        assert_eq!(
            expected,
            data.len(),
            "shape {:?} expects {} elements, got {}",
            shape,
            expected,
            data.len()
        );
        Tensor { shape, data }
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape,
            data: vec![0.0; n],
        }
    }

    pub fn filled(shape: Vec<usize>, value: f64) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape,
            data: vec![value; n],
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    /// Reinterpret with a new shape of identical element count.
    pub fn reshaped(&self, shape: Vec<usize>) -> Tensor {
        Tensor::new(shape, self.data.clone())
    }

    /// Leading extent (batch dimension by convention).
    pub fn extent0(&self) -> usize {
        self.shape[0]
    }

    /// (N, C, H, W) view of a rank-4 tensor.
    pub fn dims4(&self) -> (usize, usize, usize, usize) {
        assert_eq!(self.shape.len(), 4, "expected rank-4 tensor, got {:?}", self.shape);
        (self.shape[0], self.shape[1], self.shape[2], self.shape[3])
    }

    /// (N, D) view of a rank-2 tensor.
    pub fn dims2(&self) -> (usize, usize) {
        assert_eq!(self.shape.len(), 2, "expected rank-2 tensor, got {:?}", self.shape);
        (self.shape[0], self.shape[1])
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn l2_norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    /// Copy of the `i`-th slice along the leading axis, keeping lower dims.
    pub fn slice0(&self, i: usize) -> Tensor {
        let stride: usize = self.shape[1..].iter().product();
        let sub = self.data[i * stride..(i + 1) * stride].to_vec();
        Tensor::new(self.shape[1..].to_vec(), sub)
    }

    /// Stack tensors of identical per-item shape along a new leading axis.
    pub fn stack0(items: &[Tensor]) -> Tensor {
        assert!(!items.is_empty());
        let item_shape = items[0].shape.clone();
        let mut data = Vec::with_capacity(items.len() * items[0].numel());
        for t in items {
            assert_eq!(t.shape, item_shape, "stack0 with inhomogeneous shapes");
            data.extend_from_slice(&t.data);
        }
        let mut shape = vec![items.len()];
        shape.extend(item_shape);
        Tensor::new(shape, data)
    }

    /// Concatenate along the leading axis.
    pub fn concat0(a: &Tensor, b: &Tensor) -> Tensor {
        assert_eq!(a.shape[1..], b.shape[1..], "concat0 with mismatched item shapes");
        let mut data = Vec::with_capacity(a.data.len() + b.data.len());
        data.extend_from_slice(&a.data);
        data.extend_from_slice(&b.data);
        let mut shape = a.shape.clone();
        shape[0] += b.shape[0];
        Tensor::new(shape, data)
    }

    /// Rows `indices` along the leading axis, in the given order.
    pub fn gather0(&self, indices: &[usize]) -> Tensor {
        let stride: usize = self.shape[1..].iter().product();
        let mut data = Vec::with_capacity(indices.len() * stride);
        for &i in indices {
            data.extend_from_slice(&self.data[i * stride..(i + 1) * stride]);
        }
        let mut shape = self.shape.clone();
        shape[0] = indices.len();
        Tensor::new(shape, data)
    }
}
