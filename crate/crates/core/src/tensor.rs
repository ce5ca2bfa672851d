use ndarray::{ArrayView1, ArrayView2, ArrayViewMut2, Ix1, Ix2};
use serde::{Deserialize, Serialize};

/// Dense row-major `f64` tensor of rank 1 or 2.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(shape: &[usize]) -> Self {
        let len = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![0.0; len],
        }
    }

    pub fn filled(shape: &[usize], value: f64) -> Self {
        let mut t = Tensor::zeros(shape);
        t.data.fill(value);
        t
    }

    /// Panics if `data.len()` differs from the shape's element count.
    pub fn from_vec(shape: &[usize], data: Vec<f64>) -> Self {
        assert_eq!(
            shape.iter().product::<usize>(),
            data.len(),
            "tensor data length must equal product of shape"
        );
        assert!(matches!(shape.len(), 1 | 2), "only rank 1 and 2 tensors");
        Tensor {
            shape: shape.to_vec(),
            data,
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
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

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// `(rows, cols)`; a vector of length `n` is treated as `1 × n`.
    pub fn dims2(&self) -> (usize, usize) {
        match self.shape.as_slice() {
            [n] => (1, *n),
            [r, c] => (*r, *c),
            _ => unreachable!("rank checked at construction"),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn view1(&self) -> ArrayView1<'_, f64> {
        ArrayView1::from_shape(self.data.len(), &self.data).expect("contiguous")
    }

    pub fn view2(&self) -> ArrayView2<'_, f64> {
        let (r, c) = self.dims2();
        ArrayView2::from_shape((r, c), &self.data).expect("contiguous")
    }

    pub fn view2_mut(&mut self) -> ArrayViewMut2<'_, f64> {
        let (r, c) = self.dims2();
        ArrayViewMut2::from_shape((r, c), &mut self.data).expect("contiguous")
    }

    pub fn from_array2(a: ndarray::Array2<f64>) -> Self {
        let shape = a.shape().to_vec();
        let data = a.into_dimensionality::<Ix2>().unwrap();
        let data = if data.is_standard_layout() {
            data.into_raw_vec_and_offset().0
        } else {
            data.iter().copied().collect()
        };
        Tensor { shape, data }
    }

    pub fn from_array1(a: ndarray::Array1<f64>) -> Self {
        let a = a.into_dimensionality::<Ix1>().unwrap();
        let n = a.len();
        Tensor {
            shape: vec![n],
            data: a.iter().copied().collect(),
        }
    }
}
