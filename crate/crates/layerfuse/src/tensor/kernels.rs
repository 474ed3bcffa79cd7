//! Raw f64 compute kernels shared by forward and backward passes.
//!
//! All kernels accumulate into their output slice so backward passes can
//! reuse them for gradient accumulation. Loop orders are fixed; results are
//! deterministic for identical inputs.

use statrs::function::erf::erf;

const SQRT_2: f64 = std::f64::consts::SQRT_2;
const INV_SQRT_2PI: f64 = 0.398_942_280_401_432_7;

/// C[m,n] += A[m,k] * B[k,n]
pub fn gemm_nn(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    for i in 0..m {
        let c_row = &mut c[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a[i * k + p];
            if aip == 0.0 {
                continue;
            }
            let b_row = &b[p * n..(p + 1) * n];
            for j in 0..n {
                c_row[j] += aip * b_row[j];
            }
        }
    }
}

/// C[m,k] += A[m,n] * B^T where B is [k,n]
pub fn gemm_nt(a: &[f64], b: &[f64], c: &mut [f64], m: usize, n: usize, k: usize) {
    debug_assert_eq!(a.len(), m * n);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * k);
    for i in 0..m {
        let a_row = &a[i * n..(i + 1) * n];
        let c_row = &mut c[i * k..(i + 1) * k];
        for p in 0..k {
            let b_row = &b[p * n..(p + 1) * n];
            let mut acc = 0.0;
            for j in 0..n {
                acc += a_row[j] * b_row[j];
            }
            c_row[p] += acc;
        }
    }
}

/// C[k,n] += A^T * G where A is [m,k], G is [m,n]
pub fn gemm_tn(a: &[f64], g: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(g.len(), m * n);
    debug_assert_eq!(c.len(), k * n);
    for i in 0..m {
        let g_row = &g[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a[i * k + p];
            if aip == 0.0 {
                continue;
            }
            let c_row = &mut c[p * n..(p + 1) * n];
            for j in 0..n {
                c_row[j] += aip * g_row[j];
            }
        }
    }
}

/// Gaussian CDF form of GELU: x * Phi(x).
pub fn gelu_scalar(x: f64) -> f64 {
    x * gauss_cdf(x)
}

/// d/dx gelu(x) = Phi(x) + x * phi(x)
pub fn gelu_grad_scalar(x: f64) -> f64 {
    gauss_cdf(x) + x * gauss_pdf(x)
}

pub fn gauss_cdf(x: f64) -> f64 {
    0.5 * (1.0 + erf(x / SQRT_2))
}

pub fn gauss_pdf(x: f64) -> f64 {
    INV_SQRT_2PI * (-0.5 * x * x).exp()
}

/// ELU with alpha = 1.
pub fn elu_scalar(x: f64) -> f64 {
    if x >= 0.0 {
        x
    } else {
        x.exp() - 1.0
    }
}

pub fn elu_grad_scalar(x: f64) -> f64 {
    if x >= 0.0 {
        1.0
    } else {
        x.exp()
    }
}

/// In-place stable softmax of one contiguous lane.
pub fn softmax_lane(lane: &mut [f64]) {
    let max = lane.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in lane.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in lane.iter_mut() {
        *v /= sum;
    }
}

/// log(sum(exp(row))) with max subtraction.
pub fn log_sum_exp(row: &[f64]) -> f64 {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let sum: f64 = row.iter().map(|&v| (v - max).exp()).sum();
    max + sum.ln()
}
