use super::Scalar;

/// `out[m×n] += a[m×k] · b[k×n]`, accumulated in f64.
pub fn matmul_into<T: Scalar>(a: &[T], b: &[T], out: &mut [T], m: usize, k: usize, n: usize) {
    let mut acc = vec![0f64; n];
    for i in 0..m {
        let out_row = &mut out[i * n..(i + 1) * n];
        for (s, o) in acc.iter_mut().zip(out_row.iter()) {
            *s = o.as_f64();
        }
        for l in 0..k {
            let av = a[i * k + l].as_f64();
            if av == 0.0 {
                continue;
            }
            let b_row = &b[l * n..(l + 1) * n];
            for (s, &bv) in acc.iter_mut().zip(b_row) {
                *s += av * bv.as_f64();
            }
        }
        for (o, &s) in out_row.iter_mut().zip(&acc) {
            *o = T::of(s);
        }
    }
}

/// `out[m×n] += a[m×k] · b[n×k]ᵀ`
pub fn matmul_nt_into<T: Scalar>(a: &[T], b: &[T], out: &mut [T], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        for j in 0..n {
            out[i * n + j] = T::of(out[i * n + j].as_f64() + dot(a_row, &b[j * k..(j + 1) * k]).as_f64());
        }
    }
}

/// Dot product with eight interleaved f64 partial sums, combined in a fixed
/// order.
#[inline]
fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    let mut acc = [0f64; 8];
    let chunks = a.len() / 8;
    for c in 0..chunks {
        let (x, y) = (&a[c * 8..c * 8 + 8], &b[c * 8..c * 8 + 8]);
        for l in 0..8 {
            acc[l] += x[l].as_f64() * y[l].as_f64();
        }
    }
    let mut tail = 0f64;
    for i in chunks * 8..a.len() {
        tail += a[i].as_f64() * b[i].as_f64();
    }
    T::of(((acc[0] + acc[1]) + (acc[2] + acc[3])) + ((acc[4] + acc[5]) + (acc[6] + acc[7])) + tail)
}

/// `out[k×n] += a[m×k]ᵀ · b[m×n]`, accumulated in f64.
pub fn matmul_tn_into<T: Scalar>(a: &[T], b: &[T], out: &mut [T], m: usize, k: usize, n: usize) {
    let mut acc: Vec<f64> = out[..k * n].iter().map(|v| v.as_f64()).collect();
    for i in 0..m {
        let b_row = &b[i * n..(i + 1) * n];
        for l in 0..k {
            let av = a[i * k + l].as_f64();
            if av == 0.0 {
                continue;
            }
            let acc_row = &mut acc[l * n..(l + 1) * n];
            for (s, &bv) in acc_row.iter_mut().zip(b_row) {
                *s += av * bv.as_f64();
            }
        }
    }
    for (o, s) in out.iter_mut().zip(acc) {
        *o = T::of(s);
    }
}

/// Dot product of two `f32` slices accumulated in `f64`.
#[inline]
pub fn dot_f64(a: &[f32], b: &[f32]) -> f64 {
    // Four independent accumulators keep the loop pipelined; the summation
    // order is fixed, so results are reproducible.
    let mut acc = [0f64; 4];
    let chunks = a.len() / 4;
    for c in 0..chunks {
        let i = c * 4;
        acc[0] += a[i] as f64 * b[i] as f64;
        acc[1] += a[i + 1] as f64 * b[i + 1] as f64;
        acc[2] += a[i + 2] as f64 * b[i + 2] as f64;
        acc[3] += a[i + 3] as f64 * b[i + 3] as f64;
    }
    let mut tail = 0f64;
    for i in chunks * 4..a.len() {
        tail += a[i] as f64 * b[i] as f64;
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}
