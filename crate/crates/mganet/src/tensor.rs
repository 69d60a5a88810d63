//! Dense row-major tensors over `f32`/`f64`.
//!
//! Everything the network computes is stored in a [`Tensor`]. Double
//! precision is used by all correctness tests (finite differences are
//! meaningless in single precision); single precision is the training
//! default for speed.

use rand::Rng;

/// Element type of a [`Tensor`]: `f32` or `f64`.
///
/// The trait carries exactly the math the network needs plus a GEMM hook so
/// convolution and matmul can dispatch to an optimized kernel per precision.
pub trait Scalar:
    Copy
    + PartialOrd
    + std::fmt::Debug
    + std::fmt::Display
    + std::ops::Add<Output = Self>
    + std::ops::Sub<Output = Self>
    + std::ops::Mul<Output = Self>
    + std::ops::Div<Output = Self>
    + std::ops::Neg<Output = Self>
    + std::ops::AddAssign
    + Send
    + Sync
    + 'static
{
    const ZERO: Self;
    const ONE: Self;

    fn from_f64(v: f64) -> Self;
    fn to_f64(self) -> f64;
    fn exp(self) -> Self;
    fn ln(self) -> Self;
    fn ln_1p(self) -> Self;
    fn sqrt(self) -> Self;
    fn abs(self) -> Self;
    fn powi(self, n: i32) -> Self;
    fn max(self, other: Self) -> Self;
    fn min(self, other: Self) -> Self;
    fn is_finite(self) -> bool;

    /// ELU with alpha = 1. The `f32` implementation trades the libm call
    /// for a branchless polynomial (error below one f32 ulp of the result),
    /// which lets the activation over whole feature maps vectorize; `f64`
    /// keeps exact libm semantics for the correctness suites.
    fn elu(self) -> Self;

    /// `c = alpha * a·b + beta * c` for row-major-strided operands.
    ///
    /// # Safety
    /// Pointers must be valid for the given dimensions and strides.
    #[allow(clippy::too_many_arguments)]
    unsafe fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: *const Self,
        rsa: isize,
        csa: isize,
        b: *const Self,
        rsb: isize,
        csb: isize,
        beta: Self,
        c: *mut Self,
        rsc: isize,
        csc: isize,
    );
}

macro_rules! impl_scalar {
    ($t:ty, $gemm:path, $elu_neg:expr) => {
        impl Scalar for $t {
            const ZERO: Self = 0.0;
            const ONE: Self = 1.0;

            #[inline(always)]
            fn from_f64(v: f64) -> Self {
                v as $t
            }
            #[inline(always)]
            fn to_f64(self) -> f64 {
                self as f64
            }
            #[inline(always)]
            fn exp(self) -> Self {
                self.exp()
            }
            #[inline(always)]
            fn ln(self) -> Self {
                self.ln()
            }
            #[inline(always)]
            fn ln_1p(self) -> Self {
                self.ln_1p()
            }
            #[inline(always)]
            fn sqrt(self) -> Self {
                self.sqrt()
            }
            #[inline(always)]
            fn abs(self) -> Self {
                self.abs()
            }
            #[inline(always)]
            fn powi(self, n: i32) -> Self {
                self.powi(n)
            }
            #[inline(always)]
            fn max(self, other: Self) -> Self {
                if self > other {
                    self
                } else {
                    other
                }
            }
            #[inline(always)]
            fn min(self, other: Self) -> Self {
                if self < other {
                    self
                } else {
                    other
                }
            }
            #[inline(always)]
            fn is_finite(self) -> bool {
                <$t>::is_finite(self)
            }
            #[inline(always)]
            fn elu(self) -> Self {
                let neg = $elu_neg(self.min(0.0));
                if self >= 0.0 {
                    self
                } else {
                    neg
                }
            }

            #[inline]
            unsafe fn gemm(
                m: usize,
                k: usize,
                n: usize,
                alpha: Self,
                a: *const Self,
                rsa: isize,
                csa: isize,
                b: *const Self,
                rsb: isize,
                csb: isize,
                beta: Self,
                c: *mut Self,
                rsc: isize,
                csc: isize,
            ) {
                $gemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc)
            }
        }
    };
}

/// Branchless `exp(v) - 1` for `v <= 0`: round-to-even range reduction via
/// the 1.5*2^23 trick, degree-7 Taylor on the reduced argument, exponent
/// assembled from bits. Stays within ~1e-7 absolute of libm over the whole
/// negative range.
#[inline(always)]
fn expm1_neg_f32(v: f32) -> f32 {
    const LOG2_E: f32 = std::f32::consts::LOG2_E;
    const LN2_HI: f32 = 0.693_359_4;
    const LN2_LO: f32 = -2.121_944_4e-4;
    const ROUND_MAGIC: f32 = 12_582_912.0; // 1.5 * 2^23
    let x = v.max(-87.0);
    let n = (x * LOG2_E + ROUND_MAGIC) - ROUND_MAGIC;
    let r = (x - n * LN2_HI) - n * LN2_LO;
    // exp(r) on [-ln2/2, ln2/2]
    let p = 1.0
        + r * (1.0
            + r * (0.5
                + r * (1.0 / 6.0
                    + r * (1.0 / 24.0 + r * (1.0 / 120.0 + r * (1.0 / 720.0 + r / 5040.0))))));
    let scale = f32::from_bits(((n as i32 + 127) << 23) as u32);
    scale * p - 1.0
}

impl_scalar!(f32, matrixmultiply::sgemm, expm1_neg_f32);
impl_scalar!(f64, matrixmultiply::dgemm, |v: f64| v.exp() - 1.0);

/// Dense N-dimensional array, row-major.
#[derive(Clone, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Scalar> Tensor<T> {
    /// Builds a tensor from a shape and flat row-major data.
    ///
    /// Panics if `product(shape) != data.len()`; that invariant is a
    /// programming error, not a runtime condition.
    pub fn new(shape: Vec<usize>, data: Vec<T>) -> Self {
        let numel: usize = shape.iter().product();
        assert_eq!(
            numel,
            data.len(),
            "tensor shape {:?} does not match data length {}",
            shape,
            data.len()
        );
        Tensor { shape, data }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let numel = shape.iter().product();
        Tensor { shape: shape.to_vec(), data: vec![T::ZERO; numel] }
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::filled(shape, T::ONE)
    }

    pub fn filled(shape: &[usize], value: T) -> Self {
        let numel = shape.iter().product();
        Tensor { shape: shape.to_vec(), data: vec![value; numel] }
    }

    pub fn scalar(value: T) -> Self {
        Tensor { shape: vec![1], data: vec![value] }
    }

    pub fn from_f64_slice(shape: &[usize], values: &[f64]) -> Self {
        Self::new(shape.to_vec(), values.iter().map(|&v| T::from_f64(v)).collect())
    }

    /// Uniform samples in `[lo, hi)`, deterministic in the RNG state.
    pub fn rand_uniform<R: Rng>(rng: &mut R, shape: &[usize], lo: f64, hi: f64) -> Self {
        let numel: usize = shape.iter().product();
        let data = (0..numel)
            .map(|_| T::from_f64(rng.random_range(lo..hi)))
            .collect();
        Tensor { shape: shape.to_vec(), data }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    /// Scalar value of a one-element tensor.
    pub fn item(&self) -> T {
        assert_eq!(self.numel(), 1, "item() on tensor of shape {:?}", self.shape);
        self.data[0]
    }

    /// Same data viewed under a new shape with equal element count.
    pub fn reshaped(&self, shape: &[usize]) -> Self {
        let numel: usize = shape.iter().product();
        assert_eq!(numel, self.numel(), "reshape {:?} -> {:?}", self.shape, shape);
        Tensor { shape: shape.to_vec(), data: self.data.clone() }
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    /// Element sum in index order.
    pub fn sum(&self) -> T {
        let mut acc = T::ZERO;
        for &v in &self.data {
            acc += v;
        }
        acc
    }

    /// In-place `self += other` (shapes must match).
    pub fn add_assign(&mut self, other: &Tensor<T>) {
        assert_eq!(self.shape, other.shape, "add_assign shape mismatch");
        for (a, &b) in self.data.iter_mut().zip(other.data.iter()) {
            *a += b;
        }
    }

    /// In-place `self += c * other`.
    pub fn add_scaled(&mut self, other: &Tensor<T>, c: T) {
        assert_eq!(self.shape, other.shape, "add_scaled shape mismatch");
        for (a, &b) in self.data.iter_mut().zip(other.data.iter()) {
            *a += c * b;
        }
    }

    pub fn scale_in_place(&mut self, c: T) {
        for v in &mut self.data {
            *v = *v * c;
        }
    }

    /// Maximum absolute difference against another tensor of the same shape.
    pub fn max_abs_diff(&self, other: &Tensor<T>) -> f64 {
        assert_eq!(self.shape, other.shape, "max_abs_diff shape mismatch");
        self.data
            .iter()
            .zip(other.data.iter())
            .map(|(&a, &b)| (a.to_f64() - b.to_f64()).abs())
            .fold(0.0, f64::max)
    }

    /// Precision conversion (used to move checkpoints between test and
    /// training precisions).
    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| U::from_f64(v.to_f64())).collect(),
        }
    }
}

impl<T: Scalar> std::fmt::Debug for Tensor<T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        if self.numel() <= 16 {
            write!(f, "Tensor{:?} {:?}", self.shape, self.data)
        } else {
            write!(f, "Tensor{:?} [{} elements]", self.shape, self.numel())
        }
    }
}

/// Row-major GEMM helper: `c[m,n] (+)= a[m,k] · b[k,n]`, where either input
/// may be a transposed view of its backing buffer.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm_rm<T: Scalar>(
    m: usize,
    k: usize,
    n: usize,
    a: &[T],
    a_trans: bool,
    b: &[T],
    b_trans: bool,
    beta: T,
    c: &mut [T],
) {
    assert_eq!(a.len(), m * k, "gemm a buffer");
    assert_eq!(b.len(), k * n, "gemm b buffer");
    assert_eq!(c.len(), m * n, "gemm c buffer");
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        if beta.to_f64() == 0.0 {
            c.fill(T::ZERO);
        }
        return;
    }
    // A stored (m,k) row-major => rsa=k, csa=1; transposed view of a (k,m)
    // buffer => rsa=1, csa=m. Same logic for B.
    let (rsa, csa) = if a_trans { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_trans { (1, k as isize) } else { (n as isize, 1) };

    // Degenerate shapes: the packed-kernel GEMM pays more in packing than it
    // earns; plain strided loops win and vectorize where the stride is 1.
    if m == 1 || n == 1 {
        if beta.to_f64() == 0.0 {
            c.fill(T::ZERO);
        }
        let at = |i: usize, p: usize| a[(i as isize * rsa + p as isize * csa) as usize];
        if m == 1 && !b_trans {
            // c[j] += sum_p a[p] * b[p, j]: axpy over contiguous rows of b
            for p in 0..k {
                let av = at(0, p);
                let brow = &b[p * n..(p + 1) * n];
                for (cv, &bv) in c.iter_mut().zip(brow) {
                    *cv += av * bv;
                }
            }
        } else {
            let bt = |p: usize, j: usize| b[(p as isize * rsb + j as isize * csb) as usize];
            for i in 0..m {
                for j in 0..n {
                    let mut acc = T::ZERO;
                    for p in 0..k {
                        acc += at(i, p) * bt(p, j);
                    }
                    c[i * n + j] += acc;
                }
            }
        }
        return;
    }

    unsafe {
        T::gemm(
            m,
            k,
            n,
            T::ONE,
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
