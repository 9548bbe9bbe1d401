//! Dense row-major matrix helpers on `f64` slices.

use rand::Rng;
use rand_distr::StandardNormal;

/// `c = beta * c + a * b` where `a` is `m x k` and `b` is `k x n`, each
/// optionally read transposed from its row-major storage.
#[allow(clippy::too_many_arguments)]
pub fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_trans: bool,
    b: &[f64],
    b_trans: bool,
    beta: f64,
    c: &mut [f64],
) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    if m == 0 || n == 0 {
        return;
    }
    let (rsa, csa) = if a_trans { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_trans { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: the strides above describe exactly the row-major buffers whose
    // lengths are checked against m, k, n.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
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

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

pub fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

pub fn cosine(a: &[f64], b: &[f64]) -> Option<f64> {
    let na = norm(a);
    let nb = norm(b);
    if na == 0.0 || nb == 0.0 {
        return None;
    }
    Some(dot(a, b) / (na * nb))
}

/// Row-major `rows x cols` matrix of standard normal draws scaled by `scale`.
pub fn gaussian<R: Rng>(rng: &mut R, rows: usize, cols: usize, scale: f64) -> Vec<f64> {
    (0..rows * cols)
        .map(|_| {
            let z: f64 = rng.sample(StandardNormal);
            z * scale
        })
        .collect()
}

/// Random `rows x cols` matrix with orthonormal columns (requires rows >= cols),
/// via modified Gram-Schmidt on a Gaussian draw.
pub fn orthonormal_columns<R: Rng>(rng: &mut R, rows: usize, cols: usize) -> Vec<f64> {
    assert!(rows >= cols, "need rows >= cols for orthonormal columns");
    let mut cols_v: Vec<Vec<f64>> = Vec::with_capacity(cols);
    while cols_v.len() < cols {
        let mut v: Vec<f64> = (0..rows).map(|_| rng.sample(StandardNormal)).collect();
        for u in &cols_v {
            let p = dot(&v, u);
            v.iter_mut().zip(u).for_each(|(x, y)| *x -= p * y);
        }
        let n = norm(&v);
        if n < 1e-8 {
            continue;
        }
        v.iter_mut().for_each(|x| *x /= n);
        cols_v.push(v);
    }
    let mut out = vec![0.0; rows * cols];
    for (j, col) in cols_v.iter().enumerate() {
        for i in 0..rows {
            out[i * cols + j] = col[i];
        }
    }
    out
}

/// Round every entry to the nearest `f32`, so the values survive a float32
/// round trip unchanged.
pub fn round_f32(v: &mut [f64]) {
    v.iter_mut().for_each(|x| *x = *x as f32 as f64);
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn naive(m: usize, k: usize, n: usize, a: &[f64], at: bool, b: &[f64], bt: bool) -> Vec<f64> {
        let mut c = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                for p in 0..k {
                    let av = if at { a[p * m + i] } else { a[i * k + p] };
                    let bv = if bt { b[j * k + p] } else { b[p * n + j] };
                    c[i * n + j] += av * bv;
                }
            }
        }
        c
    }

    #[test]
    fn gemm_matches_naive_for_all_transposes() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (m, k, n) = (5, 7, 3);
        let a = gaussian(&mut rng, m, k, 1.0);
        let b = gaussian(&mut rng, k, n, 1.0);
        for (at, bt) in [(false, false), (true, false), (false, true), (true, true)] {
            let mut c = vec![0.0; m * n];
            gemm(m, k, n, &a, at, &b, bt, 0.0, &mut c);
            let want = naive(m, k, n, &a, at, &b, bt);
            for (x, y) in c.iter().zip(&want) {
                assert!((x - y).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn orthonormal_columns_are_orthonormal() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let (r, c) = (12, 8);
        let q = orthonormal_columns(&mut rng, r, c);
        for i in 0..c {
            for j in 0..c {
                let d: f64 = (0..r).map(|t| q[t * c + i] * q[t * c + j]).sum();
                let want = if i == j { 1.0 } else { 0.0 };
                assert!((d - want).abs() < 1e-12);
            }
        }
    }
}
