use std::fmt::Debug;
use std::iter::Sum;

use num_traits::{Float, FromPrimitive, NumAssign};
use serde::{Deserialize, Serialize};

use crate::volume::{voxel_count, Dims, Volume};

/// Scalar type a network can be instantiated with. Training runs in `f32`;
/// numerical oracles re-run the same code in `f64`.
pub trait Real:
    Float + NumAssign + FromPrimitive + Default + Debug + Send + Sync + Sum + 'static
{
    #[inline]
    fn lit(x: f64) -> Self {
        Self::from_f64(x).expect("representable literal")
    }
}

impl Real for f32 {}
impl Real for f64 {}

/// Channel count plus spatial extent. Dense outputs use dims `[1, 1, 1]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Shape {
    pub channels: usize,
    pub dims: Dims,
}

impl Shape {
    pub fn new(channels: usize, dims: Dims) -> Self {
        Shape { channels, dims }
    }

    pub fn features(n: usize) -> Self {
        Shape::new(n, [1, 1, 1])
    }

    pub fn spatial(&self) -> usize {
        voxel_count(self.dims)
    }

    pub fn len(&self) -> usize {
        self.channels * self.spatial()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Channel-major activation tensor; each channel is stored x-fastest.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<T> {
    pub shape: Shape,
    pub data: Vec<T>,
}

impl<T: Real> Tensor<T> {
    pub fn zeros(shape: Shape) -> Self {
        Tensor {
            shape,
            data: vec![T::zero(); shape.len()],
        }
    }

    pub fn from_volume(v: &Volume) -> Self {
        Tensor {
            shape: Shape::new(1, v.dims()),
            data: v.data().iter().map(|&x| T::lit(x as f64)).collect(),
        }
    }

    pub fn channel(&self, c: usize) -> &[T] {
        let n = self.shape.spatial();
        &self.data[c * n..(c + 1) * n]
    }

    pub fn sum(&self) -> T {
        self.data.iter().copied().sum()
    }
}

/// `y += a * x`.
#[inline]
pub(crate) fn axpy<T: Real>(a: T, x: &[T], y: &mut [T]) {
    for (yi, &xi) in y.iter_mut().zip(x) {
        *yi += a * xi;
    }
}

/// Dot product with eight independent accumulators; the fixed lane layout
/// keeps the summation order (and therefore the result) reproducible.
#[inline]
pub(crate) fn dot<T: Real>(a: &[T], b: &[T]) -> T {
    let n = a.len().min(b.len());
    let (a, b) = (&a[..n], &b[..n]);
    let mut lanes = [T::zero(); 8];
    let mut ca = a.chunks_exact(8);
    let mut cb = b.chunks_exact(8);
    for (x, y) in (&mut ca).zip(&mut cb) {
        for k in 0..8 {
            lanes[k] += x[k] * y[k];
        }
    }
    let mut tail = T::zero();
    for (&x, &y) in ca.remainder().iter().zip(cb.remainder()) {
        tail += x * y;
    }
    let s = ((lanes[0] + lanes[1]) + (lanes[2] + lanes[3]))
        + ((lanes[4] + lanes[5]) + (lanes[6] + lanes[7]));
    s + tail
}
