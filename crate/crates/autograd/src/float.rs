use std::fmt::Debug;
use std::iter::Sum;

/// Element type of a tensor. Implemented for `f32` (training) and `f64`
/// (finite-difference checks).
pub trait Float:
    num_traits::Float + num_traits::FromPrimitive + Debug + Default + Send + Sync + Sum + 'static
{
    const DTYPE: safetensors::Dtype;

    /// `c = alpha * a * b + beta * c` with arbitrary row/column strides.
    ///
    /// # Safety
    /// Pointers and strides must describe valid `m x k`, `k x n` and `m x n` matrices.
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

    fn to_le_bytes_vec(data: &[Self]) -> Vec<u8>;
    fn from_le_bytes_slice(bytes: &[u8]) -> Vec<Self>;

    #[inline]
    fn c(v: f64) -> Self {
        Self::from_f64(v).expect("representable constant")
    }
}

impl Float for f32 {
    const DTYPE: safetensors::Dtype = safetensors::Dtype::F32;

    unsafe fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: f32,
        a: *const f32,
        rsa: isize,
        csa: isize,
        b: *const f32,
        rsb: isize,
        csb: isize,
        beta: f32,
        c: *mut f32,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::sgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc);
    }

    fn to_le_bytes_vec(data: &[f32]) -> Vec<u8> {
        data.iter().flat_map(|v| v.to_le_bytes()).collect()
    }

    fn from_le_bytes_slice(bytes: &[u8]) -> Vec<f32> {
        bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect()
    }
}

impl Float for f64 {
    const DTYPE: safetensors::Dtype = safetensors::Dtype::F64;

    unsafe fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: f64,
        a: *const f64,
        rsa: isize,
        csa: isize,
        b: *const f64,
        rsb: isize,
        csb: isize,
        beta: f64,
        c: *mut f64,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::dgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc);
    }

    fn to_le_bytes_vec(data: &[f64]) -> Vec<u8> {
        data.iter().flat_map(|v| v.to_le_bytes()).collect()
    }

    fn from_le_bytes_slice(bytes: &[u8]) -> Vec<f64> {
        bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect()
    }
}

/// Row-major `a (m x k)` times `b (k x n)` accumulated into `c` as `c = a*b + beta*c`,
/// with optional transposition of either operand (the stored layouts are
/// `a: k x m` when `ta`, `b: n x k` when `tb`).
#[allow(clippy::too_many_arguments)]
pub(crate) fn matmul_into<F: Float>(
    ta: bool,
    tb: bool,
    m: usize,
    k: usize,
    n: usize,
    a: &[F],
    b: &[F],
    beta: F,
    c: &mut [F],
) {
    debug_assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        for v in c[..m * n].iter_mut() {
            *v = *v * beta;
        }
        return;
    }
    let (rsa, csa) = if ta { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if tb { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: slice lengths checked above; strides describe the stated layouts.
    unsafe {
        F::gemm(
            m,
            k,
            n,
            F::one(),
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
