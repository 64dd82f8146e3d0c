//! Dense kernels on raw row-major slices.
//!
//! Every output element accumulates its terms in ascending index order and
//! never depends on other rows of the inputs. That keeps results bit-stable
//! when rows are added to or removed from a batch.

const MR: usize = 4;
const NR: usize = 8;

/// `c (+)= a · b` with `a: m×k`, `b: k×n`, `c: m×n`.
///
/// Full `MR×NR` tiles keep their accumulators in registers across the `p`
/// loop; edges fall back to a plain loop with the same summation order.
pub fn gemm(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize, accumulate: bool) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    if !accumulate {
        c.fill(0.0);
    }
    let mut i0 = 0;
    while i0 < m {
        let mr = MR.min(m - i0);
        let mut j0 = 0;
        while j0 < n {
            let nr = NR.min(n - j0);
            if mr == MR && nr == NR {
                tile(a, b, c, i0, j0, k, n);
            } else {
                for i in i0..i0 + mr {
                    for j in j0..j0 + nr {
                        let mut acc = c[i * n + j];
                        for p in 0..k {
                            acc += a[i * k + p] * b[p * n + j];
                        }
                        c[i * n + j] = acc;
                    }
                }
            }
            j0 += NR;
        }
        i0 += MR;
    }
}

#[inline(always)]
fn tile(a: &[f64], b: &[f64], c: &mut [f64], i0: usize, j0: usize, k: usize, n: usize) {
    let mut acc = [[0.0f64; NR]; MR];
    for (r, row) in acc.iter_mut().enumerate() {
        row.copy_from_slice(&c[(i0 + r) * n + j0..][..NR]);
    }
    let a_rows: [&[f64]; MR] = std::array::from_fn(|r| &a[(i0 + r) * k..(i0 + r + 1) * k]);
    for p in 0..k {
        let bp: &[f64; NR] = b[p * n + j0..][..NR].try_into().expect("NR slice");
        for r in 0..MR {
            let av = a_rows[r][p];
            for q in 0..NR {
                acc[r][q] += av * bp[q];
            }
        }
    }
    for (r, row) in acc.iter().enumerate() {
        c[(i0 + r) * n + j0..][..NR].copy_from_slice(row);
    }
}

/// `c (+)= a · bᵀ` with `a: m×k`, `b: n×k`, `c: m×n`.
///
/// Transposes `b` into scratch space and reuses [`gemm`], which vectorizes
/// better than row dot products.
pub fn gemm_nt(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize, accumulate: bool) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), n * k);
    debug_assert_eq!(c.len(), m * n);
    let mut bt = vec![0.0; k * n];
    for j in 0..n {
        for p in 0..k {
            bt[p * n + j] = b[j * k + p];
        }
    }
    gemm(a, &bt, c, m, k, n, accumulate);
}

/// `c (+)= aᵀ · b` with `a: m×k`, `b: m×n`, `c: k×n`.
pub fn gemm_tn(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize, accumulate: bool) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), m * n);
    debug_assert_eq!(c.len(), k * n);
    let mut at = vec![0.0; k * m];
    for i in 0..m {
        for p in 0..k {
            at[p * m + i] = a[i * k + p];
        }
    }
    gemm(&at, b, c, k, m, n, accumulate);
}

/// Dot product with four interleaved partial sums, combined in a fixed order.
#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [0.0f64; 4];
    let chunks = a.len() / 4;
    for c in 0..chunks {
        let i = c * 4;
        acc[0] += a[i] * b[i];
        acc[1] += a[i + 1] * b[i + 1];
        acc[2] += a[i + 2] * b[i + 2];
        acc[3] += a[i + 3] * b[i + 3];
    }
    let mut tail = 0.0;
    for i in chunks * 4..a.len() {
        tail += a[i] * b[i];
    }
    ((acc[0] + acc[1]) + (acc[2] + acc[3])) + tail
}
