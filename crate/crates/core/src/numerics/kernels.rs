//! Plain row-major matrix kernels. All accumulate into `c`.

const MR: usize = 4;
const NR: usize = 4;

/// Shared blocked kernel. `a` is read as `a[i*k + p]` when `TA` is false
/// and as `a[p*m + i]` when it is true; `b` is always `[k, n]` row-major.
///
/// Both operands are packed into zero-padded `MR`/`NR`-wide panels so the
/// inner loop is a fixed-size outer product. Each output element sums its
/// `k` products in order before being added to `c`, so results do not
/// depend on the blocking.
fn gemm_kernel<const TA: bool>(m: usize, k: usize, n: usize, a: &[f64], b: &[f64], c: &mut [f64]) {
    if m == 0 || n == 0 || k == 0 {
        return;
    }
    let (mb, nb) = (m.div_ceil(MR), n.div_ceil(NR));
    let mut apack = vec![0.0; mb * k * MR];
    if TA {
        for p in 0..k {
            for (i, &v) in a[p * m..(p + 1) * m].iter().enumerate() {
                apack[(i / MR) * k * MR + p * MR + i % MR] = v;
            }
        }
    } else {
        for i in 0..m {
            let base = (i / MR) * k * MR + i % MR;
            for (p, &v) in a[i * k..(i + 1) * k].iter().enumerate() {
                apack[base + p * MR] = v;
            }
        }
    }
    let mut bpack = vec![0.0; nb * k * NR];
    for p in 0..k {
        for (j, &v) in b[p * n..(p + 1) * n].iter().enumerate() {
            bpack[(j / NR) * k * NR + p * NR + j % NR] = v;
        }
    }
    for ib in 0..mb {
        let ap = &apack[ib * k * MR..(ib + 1) * k * MR];
        let rows = MR.min(m - ib * MR);
        for jb in 0..nb {
            let bp = &bpack[jb * k * NR..(jb + 1) * k * NR];
            let mut acc = [[0.0f64; NR]; MR];
            for (av, bv) in ap.chunks_exact(MR).zip(bp.chunks_exact(NR)) {
                let av: &[f64; MR] = av.try_into().expect("MR lanes");
                let bv: &[f64; NR] = bv.try_into().expect("NR lanes");
                for r in 0..MR {
                    for q in 0..NR {
                        acc[r][q] += av[r] * bv[q];
                    }
                }
            }
            let cols = NR.min(n - jb * NR);
            for (r, row) in acc.iter().enumerate().take(rows) {
                let at = (ib * MR + r) * n + jb * NR;
                c[at..at + cols].iter_mut().zip(row).for_each(|(d, v)| *d += v);
            }
        }
    }
}

/// `c[m,n] += a[m,k] · b[k,n]`
pub(crate) fn gemm_nn(m: usize, k: usize, n: usize, a: &[f64], b: &[f64], c: &mut [f64]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    gemm_kernel::<false>(m, k, n, a, b, c);
}

/// `c[m,n] += a[m,k] · b[n,k]ᵀ`
pub(crate) fn gemm_nt(m: usize, k: usize, n: usize, a: &[f64], b: &[f64], c: &mut [f64]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), n * k);
    debug_assert_eq!(c.len(), m * n);
    let mut bt = vec![0.0; k * n];
    for j in 0..n {
        for p in 0..k {
            bt[p * n + j] = b[j * k + p];
        }
    }
    gemm_kernel::<false>(m, k, n, a, &bt, c);
}

/// `c[m,n] += a[k,m]ᵀ · b[k,n]`
pub(crate) fn gemm_tn(m: usize, k: usize, n: usize, a: &[f64], b: &[f64], c: &mut [f64]) {
    debug_assert_eq!(a.len(), k * m);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    gemm_kernel::<true>(m, k, n, a, b, c);
}
