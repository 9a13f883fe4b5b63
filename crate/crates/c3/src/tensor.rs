//! Dense row-major tensors over f32 (training default) or f64 (gradient
//! verification mode).

use crate::error::{Error, Result};
use num_traits::Float;

/// Scalar element type for tensors. f32 is the training default; f64 exists
/// for finite-difference gradient checking.
pub trait Scalar:
    Float + std::fmt::Debug + std::fmt::Display + Send + Sync + 'static
{
    fn of(v: f64) -> Self;
    fn as_f64(self) -> f64;

    /// C = alpha * op(A) * op(B) + beta * C, row-major, with optional
    /// logical transposes (no materialization).
    #[allow(clippy::too_many_arguments)]
    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: &[Self],
        ta: bool,
        b: &[Self],
        tb: bool,
        beta: Self,
        c: &mut [Self],
    );
}

macro_rules! impl_scalar {
    ($t:ty, $gemm:path) => {
        impl Scalar for $t {
            #[inline]
            fn of(v: f64) -> Self {
                v as $t
            }
            #[inline]
            fn as_f64(self) -> f64 {
                self as f64
            }

            fn gemm(
                m: usize,
                k: usize,
                n: usize,
                alpha: Self,
                a: &[Self],
                ta: bool,
                b: &[Self],
                tb: bool,
                beta: Self,
                c: &mut [Self],
            ) {
                debug_assert_eq!(a.len(), m * k);
                debug_assert_eq!(b.len(), k * n);
                debug_assert_eq!(c.len(), m * n);
                // Row-major A[m,k] has strides (k, 1); a logical transpose of
                // a stored [k,m] matrix has strides (1, k).
                let (rsa, csa) = if ta { (1, m as isize) } else { (k as isize, 1) };
                let (rsb, csb) = if tb { (1, k as isize) } else { (n as isize, 1) };
                unsafe {
                    $gemm(
                        m,
                        k,
                        n,
                        alpha,
                        a.as_ptr(),
                        rsa,
                        csa,
                        b.as_ptr(),
                        rsb,
                        csb,
                        beta,
                        c.as_mut_ptr(),
                        n as isize,
                        1,
                    );
                }
            }
        }
    };
}

impl_scalar!(f32, matrixmultiply::sgemm);
impl_scalar!(f64, matrixmultiply::dgemm);

/// Dense row-major tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<T: Scalar> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Scalar> Tensor<T> {
    pub fn new(shape: Vec<usize>, data: Vec<T>) -> Self {
        assert_eq!(
            shape.iter().product::<usize>(),
            data.len(),
            "shape {:?} does not match data length {}",
            shape,
            data.len()
        );
        Tensor { shape, data }
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape,
            data: vec![T::zero(); n],
        }
    }

    /// Uninitialized allocation for buffers fully overwritten before any
    /// read (beta = 0 gemm outputs; matrixmultiply never reads C then).
    pub(crate) fn uninit(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        let mut data = Vec::with_capacity(n);
        #[allow(clippy::uninit_vec)]
        unsafe {
            data.set_len(n)
        };
        Tensor { shape, data }
    }

    pub fn scalar(v: T) -> Self {
        Tensor {
            shape: vec![1],
            data: vec![v],
        }
    }

    pub fn from_f64(shape: Vec<usize>, data: &[f64]) -> Self {
        Tensor::new(shape, data.iter().map(|&v| <T as Scalar>::of(v)).collect())
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Rows/cols view for rank-1 and rank-2 tensors; a rank-1 tensor of
    /// length d is treated as [1, d].
    pub fn dims2(&self) -> (usize, usize) {
        match self.shape.len() {
            1 => (1, self.shape[0]),
            2 => (self.shape[0], self.shape[1]),
            _ => panic!("dims2 on rank-{} tensor", self.shape.len()),
        }
    }

    /// Flattens all leading axes into rows, keeping the last axis as columns.
    pub fn rows_cols(&self) -> (usize, usize) {
        let cols = *self.shape.last().expect("rank >= 1");
        (self.data.len() / cols.max(1), cols)
    }

    pub fn item(&self) -> T {
        assert_eq!(self.data.len(), 1, "item() on non-scalar tensor");
        self.data[0]
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn map_to_f64(&self) -> Tensor<f64> {
        Tensor::new(
            self.shape.clone(),
            self.data.iter().map(|v| v.as_f64()).collect(),
        )
    }

    pub fn map_to_f32(&self) -> Tensor<f32> {
        Tensor::new(
            self.shape.clone(),
            self.data.iter().map(|v| v.as_f64() as f32).collect(),
        )
    }

    /// Index of the maximum element (first occurrence wins ties).
    pub fn argmax(&self) -> usize {
        let mut best = 0;
        let mut best_v = self.data[0];
        for (i, &v) in self.data.iter().enumerate().skip(1) {
            if v > best_v {
                best_v = v;
                best = i;
            }
        }
        best
    }
}

/// C[m,n] = op(A) * op(B) as a standalone value (used by the graph and by the
/// no-grad inference path).
pub fn matmul_into<T: Scalar>(
    a: &Tensor<T>,
    ta: bool,
    b: &Tensor<T>,
    tb: bool,
    op: &'static str,
) -> Result<Tensor<T>> {
    let (ar, ac) = a.dims2();
    let (br, bc) = b.dims2();
    let (m, ka) = if ta { (ac, ar) } else { (ar, ac) };
    let (kb, n) = if tb { (bc, br) } else { (br, bc) };
    if ka != kb {
        return Err(Error::ShapeMismatch {
            op,
            left: a.shape.clone(),
            right: b.shape.clone(),
        });
    }
    let mut c = Tensor::uninit(vec![m, n]);
    T::gemm(m, ka, n, T::one(), &a.data, ta, &b.data, tb, T::zero(), &mut c.data);
    Ok(c)
}
