use std::fmt;

/// Dense row-major `f64` array.
///
/// A tensor whose element count is nonzero but whose buffer is empty is a
/// *meta* tensor: it carries only a shape and is produced by graphs running
/// in shape-inference mode.
#[derive(Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: impl Into<Vec<usize>>, data: Vec<f64>) -> Self {
        let shape = shape.into();
        let n: usize = shape.iter().product();
        assert_eq!(n, data.len(), "shape {shape:?} does not match {} elements", data.len());
        Tensor { shape, data }
    }

    pub fn zeros(shape: impl Into<Vec<usize>>) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn ones(shape: impl Into<Vec<usize>>) -> Self {
        Self::full(shape, 1.0)
    }

    pub fn full(shape: impl Into<Vec<usize>>, value: f64) -> Self {
        let shape = shape.into();
        let n = shape.iter().product();
        Tensor { shape, data: vec![value; n] }
    }

    pub fn scalar(value: f64) -> Self {
        Tensor { shape: vec![1], data: vec![value] }
    }

    /// Shape-only tensor with no backing storage.
    pub fn meta(shape: impl Into<Vec<usize>>) -> Self {
        Tensor { shape: shape.into(), data: Vec::new() }
    }

    pub fn is_meta(&self) -> bool {
        self.data.is_empty() && self.numel() > 0
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.shape.iter().product()
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

    /// `(batch, channels, height, width)`; panics unless the tensor is 4-D.
    pub fn dims4(&self) -> (usize, usize, usize, usize) {
        match self.shape[..] {
            [b, c, h, w] => (b, c, h, w),
            _ => panic!("expected a 4-D tensor, got shape {:?}", self.shape),
        }
    }

    pub fn reshape(mut self, shape: impl Into<Vec<usize>>) -> Self {
        let shape = shape.into();
        assert_eq!(shape.iter().product::<usize>(), self.numel(), "reshape changes element count");
        self.shape = shape;
        self
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor { shape: self.shape.clone(), data: self.data.iter().map(|&v| f(v)).collect() }
    }

    pub fn zip_map(&self, other: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
        assert_eq!(self.shape, other.shape, "zip_map shape mismatch");
        let data = self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect();
        Tensor { shape: self.shape.clone(), data }
    }

    pub fn add_assign(&mut self, other: &Tensor) {
        assert_eq!(self.shape, other.shape, "add_assign shape mismatch");
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        assert_eq!(self.shape, other.shape, "max_abs_diff shape mismatch");
        self.data.iter().zip(&other.data).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max)
    }

    /// Element at a 4-D index.
    pub fn at4(&self, b: usize, c: usize, y: usize, x: usize) -> f64 {
        let (_, ch, h, w) = self.dims4();
        self.data[((b * ch + c) * h + y) * w + x]
    }

    /// Copy of batch item `b` of a 4-D tensor, keeping a leading batch axis of one.
    pub fn batch_item(&self, b: usize) -> Tensor {
        let (_, c, h, w) = self.dims4();
        let n = c * h * w;
        Tensor::new([1, c, h, w], self.data[b * n..(b + 1) * n].to_vec())
    }

    /// Stack equally shaped `[1, C, H, W]` (or `[C, H, W]`) items along the batch axis.
    pub fn stack_batch(items: &[Tensor]) -> Tensor {
        assert!(!items.is_empty(), "cannot stack zero tensors");
        let tail: Vec<usize> = match items[0].shape.len() {
            4 => items[0].shape[1..].to_vec(),
            3 => items[0].shape.clone(),
            _ => panic!("stack_batch expects 3-D or 4-D items"),
        };
        let mut data = Vec::with_capacity(items.len() * tail.iter().product::<usize>());
        for t in items {
            let t_tail = if t.shape.len() == 4 { &t.shape[1..] } else { &t.shape[..] };
            assert_eq!(t_tail, &tail[..], "stack_batch shape mismatch");
            data.extend_from_slice(&t.data);
        }
        let mut shape = vec![items.len()];
        shape.extend(tail);
        Tensor::new(shape, data)
    }
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.is_meta() {
            return write!(f, "Tensor(meta, shape={:?})", self.shape);
        }
        let preview: Vec<f64> = self.data.iter().take(8).copied().collect();
        write!(f, "Tensor(shape={:?}, data[..8]={:?})", self.shape, preview)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn meta_tensor_has_shape_but_no_storage() {
        let t = Tensor::meta([2, 3, 4, 4]);
        assert!(t.is_meta());
        assert_eq!(t.numel(), 96);
        assert!(!Tensor::zeros([2, 3]).is_meta());
    }

    #[test]
    fn stack_and_split_batch() {
        let a = Tensor::new([1, 1, 1, 2], vec![1.0, 2.0]);
        let b = Tensor::new([1, 1, 1, 2], vec![3.0, 4.0]);
        let s = Tensor::stack_batch(&[a.clone(), b.clone()]);
        assert_eq!(s.shape(), &[2, 1, 1, 2]);
        assert_eq!(s.batch_item(1), b);
        assert_eq!(s.at4(0, 0, 0, 1), 2.0);
    }
}
