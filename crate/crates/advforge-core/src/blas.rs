//! Thin FFI onto the system BLAS (OpenBLAS) for `dgemm`, the one kernel
//! that dominates every training and attack run.
//!
//! The library pins BLAS to a single thread; batch-level parallelism is
//! handled by the callers with an explicit, deterministic reduction order,
//! which keeps results bit-identical regardless of core count.

use std::ffi::CStr;
use std::os::raw::{c_char, c_int};
use std::sync::Once;

const CBLAS_ROW_MAJOR: c_int = 101;
const CBLAS_NO_TRANS: c_int = 111;
const CBLAS_TRANS: c_int = 112;

#[link(name = "openblas")]
extern "C" {
    fn cblas_dgemm(
        layout: c_int,
        transa: c_int,
        transb: c_int,
        m: c_int,
        n: c_int,
        k: c_int,
        alpha: f64,
        a: *const f64,
        lda: c_int,
        b: *const f64,
        ldb: c_int,
        beta: f64,
        c: *mut f64,
        ldc: c_int,
    );
    fn openblas_set_num_threads(n: c_int);
    fn openblas_get_config() -> *const c_char;
}

static INIT: Once = Once::new();

fn ensure_single_threaded() {
    INIT.call_once(|| unsafe {
        openblas_set_num_threads(1);
        tune_allocator();
    });
}

/// Training and attack passes allocate gradient and trace buffers in the
/// tens of megabytes in a steady per-chunk rhythm. With glibc's defaults
/// those blocks bounce between the heap and the kernel — freed waves trim
/// the arena, and the next chunk's allocations re-fault zeroed pages,
/// which shows up as a double-digit-percent tax on the bandwidth-bound
/// passes. Pin the arena instead: never trim, and keep blocks of this size
/// off the mmap path so they are reused in place.
#[cfg(target_env = "gnu")]
unsafe fn tune_allocator() {
    extern "C" {
        fn mallopt(param: c_int, value: c_int) -> c_int;
    }
    const M_TRIM_THRESHOLD: c_int = -1;
    const M_MMAP_THRESHOLD: c_int = -3;
    mallopt(M_TRIM_THRESHOLD, c_int::MAX);
    mallopt(M_MMAP_THRESHOLD, 64 << 20);
}

#[cfg(not(target_env = "gnu"))]
unsafe fn tune_allocator() {}

/// Whether the A/B operand of [`dgemm`] is transposed.
#[derive(Clone, Copy, PartialEq, Eq)]
pub enum Trans {
    No,
    Yes,
}

impl Trans {
    fn cblas(self) -> c_int {
        match self {
            Trans::No => CBLAS_NO_TRANS,
            Trans::Yes => CBLAS_TRANS,
        }
    }
}

/// Row-major `C = alpha * op(A) * op(B) + beta * C`.
///
/// `a` is `m x k` after `op`, `b` is `k x n` after `op`, `c` is `m x n`.
/// Leading dimensions are taken from the *stored* (pre-op) layouts, so a
/// transposed operand passes the stored row width.
#[allow(clippy::too_many_arguments)]
pub fn dgemm(
    transa: Trans,
    transb: Trans,
    m: usize,
    n: usize,
    k: usize,
    alpha: f64,
    a: &[f64],
    b: &[f64],
    beta: f64,
    c: &mut [f64],
) {
    ensure_single_threaded();
    // Stored widths: op == No means the operand is stored with its logical
    // row length; op == Yes means it is stored transposed.
    let lda = if transa == Trans::No { k } else { m };
    let ldb = if transb == Trans::No { n } else { k };
    debug_assert!(a.len() >= m * k, "A too small: {} < {}", a.len(), m * k);
    debug_assert!(b.len() >= k * n, "B too small: {} < {}", b.len(), k * n);
    debug_assert!(c.len() >= m * n, "C too small: {} < {}", c.len(), m * n);
    unsafe {
        cblas_dgemm(
            CBLAS_ROW_MAJOR,
            transa.cblas(),
            transb.cblas(),
            m as c_int,
            n as c_int,
            k as c_int,
            alpha,
            a.as_ptr(),
            lda as c_int,
            b.as_ptr(),
            ldb as c_int,
            beta,
            c.as_mut_ptr(),
            ldc(n),
        );
    }
}

fn ldc(n: usize) -> c_int {
    n as c_int
}

/// Row-major `C = alpha * op(A) * op(B)` into a freshly allocated buffer.
///
/// Same operand conventions as [`dgemm`]. With β = 0 BLAS assigns every
/// element of `C` without reading it, so the output buffer is handed to the
/// kernel uninitialized instead of being zero-filled first — on gradient
/// matrices tens of megabytes wide the redundant memset is measurable.
#[allow(clippy::too_many_arguments)]
pub fn dgemm_new(
    transa: Trans,
    transb: Trans,
    m: usize,
    n: usize,
    k: usize,
    alpha: f64,
    a: &[f64],
    b: &[f64],
) -> Vec<f64> {
    ensure_single_threaded();
    let lda = if transa == Trans::No { k } else { m };
    let ldb = if transb == Trans::No { n } else { k };
    debug_assert!(a.len() >= m * k, "A too small: {} < {}", a.len(), m * k);
    debug_assert!(b.len() >= k * n, "B too small: {} < {}", b.len(), k * n);
    let mut c: Vec<f64> = Vec::with_capacity(m * n);
    // SAFETY: cblas_dgemm with beta == 0 writes all m*n elements of C and
    // never reads them ("when BETA is supplied as zero then C need not be
    // set on input"), so the spare capacity is fully initialized before
    // set_len exposes it.
    unsafe {
        cblas_dgemm(
            CBLAS_ROW_MAJOR,
            transa.cblas(),
            transb.cblas(),
            m as c_int,
            n as c_int,
            k as c_int,
            alpha,
            a.as_ptr(),
            lda as c_int,
            b.as_ptr(),
            ldb as c_int,
            0.0,
            c.as_mut_ptr(),
            ldc(n),
        );
        c.set_len(m * n);
    }
    c
}

/// The loaded OpenBLAS build/config banner, e.g. kernel target and version.
pub fn config_banner() -> String {
    ensure_single_threaded();
    unsafe {
        CStr::from_ptr(openblas_get_config())
            .to_string_lossy()
            .into_owned()
    }
}

/// True when this process would profit from restarting with
/// `OPENBLAS_CORETYPE=SKYLAKEX`: the CPU has AVX-512 but the dynamic-arch
/// OpenBLAS didn't recognize the model and fell back to a pre-AVX kernel.
/// OpenBLAS only reads the variable at load time, so the fix must come from
/// the parent environment (the CLI re-execs itself once).
pub fn wants_coretype_override() -> bool {
    if std::env::var_os("OPENBLAS_CORETYPE").is_some() {
        return false; // the operator already chose
    }
    #[cfg(target_arch = "x86_64")]
    {
        if !std::arch::is_x86_feature_detected!("avx512f") {
            return false;
        }
        let banner = config_banner();
        // Pre-AVX fallback targets that dynamic-arch selects for unknown CPUs.
        return banner.contains("Prescott")
            || banner.contains("Core2")
            || banner.contains("Northwood");
    }
    #[cfg(not(target_arch = "x86_64"))]
    {
        false
    }
}
