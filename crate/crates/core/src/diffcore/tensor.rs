use std::fmt::{Debug, Display};

use num_traits::{Float, FloatConst};

use super::DiffError;

/// Scalar type the engine is generic over.
///
/// Training runs in `f32`; gradient checks and most unit tests run the same
/// code paths in `f64`.
pub trait Real:
    Float + FloatConst + Debug + Display + Default + Send + Sync + std::iter::Sum + BitRepr + 'static
{
    const NAME: &'static str;

    fn of(v: f64) -> Self;

    fn f64(self) -> f64;

    /// `c = alpha * a·b + beta * c` over strided row-major views.
    #[allow(clippy::too_many_arguments)]
    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: &[Self],
        a_strides: (usize, usize),
        b: &[Self],
        b_strides: (usize, usize),
        beta: Self,
        c: &mut [Self],
        c_strides: (usize, usize),
    );
}

fn check_gemm_bounds(
    m: usize,
    k: usize,
    n: usize,
    a_len: usize,
    a: (usize, usize),
    b_len: usize,
    b: (usize, usize),
    c_len: usize,
    c: (usize, usize),
) {
    let last = |rows: usize, cols: usize, (rs, cs): (usize, usize)| {
        if rows == 0 || cols == 0 {
            0
        } else {
            (rows - 1) * rs + (cols - 1) * cs + 1
        }
    };
    assert!(last(m, k, a) <= a_len, "gemm: lhs view out of bounds");
    assert!(last(k, n, b) <= b_len, "gemm: rhs view out of bounds");
    assert!(last(m, n, c) <= c_len, "gemm: output view out of bounds");
}

macro_rules! impl_real {
    ($t:ty, $name:literal, $kernel:path) => {
        impl Real for $t {
            const NAME: &'static str = $name;

            #[inline]
            fn of(v: f64) -> Self {
                v as $t
            }

            #[inline]
            fn f64(self) -> f64 {
                self as f64
            }

            fn gemm(
                m: usize,
                k: usize,
                n: usize,
                alpha: Self,
                a: &[Self],
                a_strides: (usize, usize),
                b: &[Self],
                b_strides: (usize, usize),
                beta: Self,
                c: &mut [Self],
                c_strides: (usize, usize),
            ) {
                check_gemm_bounds(m, k, n, a.len(), a_strides, b.len(), b_strides, c.len(), c_strides);
                if m == 0 || n == 0 {
                    return;
                }
                // SAFETY: every strided view was bounds-checked above and the
                // output slice is uniquely borrowed.
                unsafe {
                    $kernel(
                        m,
                        k,
                        n,
                        alpha,
                        a.as_ptr(),
                        a_strides.0 as isize,
                        a_strides.1 as isize,
                        b.as_ptr(),
                        b_strides.0 as isize,
                        b_strides.1 as isize,
                        beta,
                        c.as_mut_ptr(),
                        c_strides.0 as isize,
                        c_strides.1 as isize,
                    );
                }
            }
        }
    };
}

impl_real!(f32, "f32", matrixmultiply::sgemm);
impl_real!(f64, "f64", matrixmultiply::dgemm);

/// Dense row-major tensor.
#[derive(Clone, PartialEq)]
pub struct Tensor<F> {
    dims: Vec<usize>,
    data: Vec<F>,
}

impl<F: Real> Debug for Tensor<F> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Tensor<{}>{:?}", F::NAME, self.dims)?;
        if self.data.len() <= 16 {
            write!(f, " {:?}", self.data)?;
        }
        Ok(())
    }
}

impl<F: Real> Tensor<F> {
    pub fn new(dims: impl Into<Vec<usize>>, data: Vec<F>) -> Result<Self, DiffError> {
        let dims = dims.into();
        if dims.is_empty() || dims.contains(&0) {
            return Err(DiffError::shape("tensor", format!("dims must be positive, got {dims:?}")));
        }
        let numel: usize = dims.iter().product();
        if numel != data.len() {
            return Err(DiffError::shape(
                "tensor",
                format!("dims {dims:?} hold {numel} scalars but {} were given", data.len()),
            ));
        }
        Ok(Self { dims, data })
    }

    pub fn zeros(dims: impl Into<Vec<usize>>) -> Self {
        let dims = dims.into();
        let n = dims.iter().product();
        Self { dims, data: vec![F::zero(); n] }
    }

    pub fn full(dims: impl Into<Vec<usize>>, v: F) -> Self {
        let dims = dims.into();
        let n = dims.iter().product();
        Self { dims, data: vec![v; n] }
    }

    pub fn from_fn(dims: impl Into<Vec<usize>>, mut f: impl FnMut(usize) -> F) -> Self {
        let dims = dims.into();
        let n = dims.iter().product();
        Self { dims, data: (0..n).map(&mut f).collect() }
    }

    pub fn scalar(v: F) -> Self {
        Self { dims: vec![1], data: vec![v] }
    }

    pub fn eye(n: usize) -> Self {
        Self::from_fn([n, n], |i| if i / n == i % n { F::one() } else { F::zero() })
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn rank(&self) -> usize {
        self.dims.len()
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[F] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [F] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<F> {
        self.data
    }

    /// Size of the trailing axis.
    pub fn last_dim(&self) -> usize {
        *self.dims.last().expect("tensor rank >= 1")
    }

    /// Number of trailing-axis rows (product of all leading dims).
    pub fn rows(&self) -> usize {
        self.data.len() / self.last_dim()
    }

    pub fn row(&self, i: usize) -> &[F] {
        let n = self.last_dim();
        &self.data[i * n..(i + 1) * n]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [F] {
        let n = self.last_dim();
        &mut self.data[i * n..(i + 1) * n]
    }

    pub fn reshape(mut self, dims: impl Into<Vec<usize>>) -> Result<Self, DiffError> {
        let dims = dims.into();
        if dims.iter().product::<usize>() != self.data.len() || dims.contains(&0) {
            return Err(DiffError::shape(
                "reshape",
                format!("cannot view {:?} as {dims:?}", self.dims),
            ));
        }
        self.dims = dims;
        Ok(self)
    }

    pub fn map(&self, f: impl Fn(F) -> F) -> Self {
        Self { dims: self.dims.clone(), data: self.data.iter().map(|&x| f(x)).collect() }
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn cast<G: Real>(&self) -> Tensor<G> {
        Tensor { dims: self.dims.clone(), data: self.data.iter().map(|x| G::of(x.f64())).collect() }
    }

    pub fn max_abs_diff(&self, other: &Self) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a.f64() - b.f64()).abs())
            .fold(0.0, f64::max)
    }

    /// Bitwise equality of dims and every scalar.
    pub fn bit_eq(&self, other: &Self) -> bool {
        self.dims == other.dims
            && self.data.iter().zip(&other.data).all(|(a, b)| a.bits() == b.bits())
    }
}

/// Raw bit pattern access used for bitwise comparisons.
pub trait BitRepr {
    fn bits(&self) -> u64;
}

impl BitRepr for f32 {
    fn bits(&self) -> u64 {
        self.to_bits() as u64
    }
}

impl BitRepr for f64 {
    fn bits(&self) -> u64 {
        self.to_bits()
    }
}
