//! Inner loops shared by the forward and backward passes.

use super::strides;

/// `c[m×n] += a[m×k] · b[k×n]`.
pub(super) fn gemm_acc(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    // SAFETY: the asserted lengths cover every strided access.
    unsafe {
        matrixmultiply::dgemm(m, k, n, 1.0, a.as_ptr(), k as isize, 1, b.as_ptr(), n as isize, 1, 1.0, c.as_mut_ptr(), n as isize, 1);
    }
}

/// `c[m×k] += a[m×n] · b[k×n]ᵀ`.
pub(super) fn gemm_nt_acc(a: &[f64], b: &[f64], c: &mut [f64], m: usize, n: usize, k: usize) {
    assert!(a.len() >= m * n && b.len() >= k * n && c.len() >= m * k);
    // SAFETY: as above; `b` is read column-major.
    unsafe {
        matrixmultiply::dgemm(m, n, k, 1.0, a.as_ptr(), n as isize, 1, b.as_ptr(), 1, n as isize, 1.0, c.as_mut_ptr(), k as isize, 1);
    }
}

/// `c[k×n] += a[m×k]ᵀ · b[m×n]`.
pub(super) fn gemm_tn_acc(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    assert!(a.len() >= m * k && b.len() >= m * n && c.len() >= k * n);
    // SAFETY: as above; `a` is read column-major.
    unsafe {
        matrixmultiply::dgemm(k, m, n, 1.0, a.as_ptr(), 1, k as isize, b.as_ptr(), n as isize, 1, 1.0, c.as_mut_ptr(), n as isize, 1);
    }
}

/// For every flat index of `full`, the flat index into a tensor of shape
/// `small` broadcast against it (right-aligned, extents equal or 1).
pub(super) fn broadcast_offsets(full: &[usize], small: &[usize]) -> Vec<usize> {
    let rank = full.len();
    let pad = rank - small.len();
    let small_strides = strides(small);
    let mut eff = vec![0usize; rank];
    for d in 0..small.len() {
        if small[d] != 1 {
            eff[pad + d] = small_strides[d];
        }
    }
    let numel: usize = full.iter().product();
    let mut out = Vec::with_capacity(numel);
    let mut idx = vec![0usize; rank];
    let mut off = 0usize;
    for _ in 0..numel {
        out.push(off);
        for d in (0..rank).rev() {
            idx[d] += 1;
            off += eff[d];
            if idx[d] < full[d] {
                break;
            }
            off -= eff[d] * full[d];
            idx[d] = 0;
        }
    }
    out
}

/// Materializes a permutation of axes: `out.shape[i] = shape[axes[i]]`.
pub(super) fn permute(data: &[f64], shape: &[usize], axes: &[usize]) -> (Vec<f64>, Vec<usize>) {
    let out_shape: Vec<usize> = axes.iter().map(|&a| shape[a]).collect();
    let in_strides = strides(shape);
    let src_strides: Vec<usize> = axes.iter().map(|&a| in_strides[a]).collect();
    let rank = shape.len();
    let mut out = Vec::with_capacity(data.len());
    let mut idx = vec![0usize; rank];
    let mut off = 0usize;
    for _ in 0..data.len() {
        out.push(data[off]);
        for d in (0..rank).rev() {
            idx[d] += 1;
            off += src_strides[d];
            if idx[d] < out_shape[d] {
                break;
            }
            off -= src_strides[d] * out_shape[d];
            idx[d] = 0;
        }
    }
    (out, out_shape)
}

pub(super) fn inverse_permutation(axes: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; axes.len()];
    for (i, &a) in axes.iter().enumerate() {
        inv[a] = i;
    }
    inv
}

/// Splits `shape` around `axis` into (outer, len, inner) extents.
pub(super) fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

/// Numerically stable softmax over one strided lane.
pub(super) fn softmax_lane(x: &[f64], out: &mut [f64], base: usize, len: usize, stride: usize) {
    let mut max = f64::NEG_INFINITY;
    for j in 0..len {
        max = max.max(x[base + j * stride]);
    }
    let mut denom = 0.0;
    for j in 0..len {
        let e = (x[base + j * stride] - max).exp();
        out[base + j * stride] = e;
        denom += e;
    }
    for j in 0..len {
        out[base + j * stride] /= denom;
    }
}

pub(super) const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

/// Tanh-approximated GELU and its derivative.
pub(super) fn gelu(x: f64) -> (f64, f64) {
    let inner = GELU_C * (x + 0.044715 * x * x * x);
    // tanh via one exp; libm tanh is several times slower here.
    let t = if inner.abs() > 20.0 { inner.signum() } else { 1.0 - 2.0 / ((2.0 * inner).exp() + 1.0) };
    let y = 0.5 * x * (1.0 + t);
    let dinner = GELU_C * (1.0 + 3.0 * 0.044715 * x * x);
    let dy = 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * dinner;
    (y, dy)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn broadcast_bias_over_rows() {
        assert_eq!(broadcast_offsets(&[2, 3], &[3]), vec![0, 1, 2, 0, 1, 2]);
        assert_eq!(broadcast_offsets(&[2, 3], &[2, 1]), vec![0, 0, 0, 1, 1, 1]);
        assert_eq!(broadcast_offsets(&[2, 2], &[]), vec![0, 0, 0, 0]);
    }

    #[test]
    fn permute_transposes_matrix() {
        let (out, shape) = permute(&[1., 2., 3., 4., 5., 6.], &[2, 3], &[1, 0]);
        assert_eq!(shape, vec![3, 2]);
        assert_eq!(out, vec![1., 4., 2., 5., 3., 6.]);
        assert_eq!(inverse_permutation(&[2, 0, 1]), vec![1, 2, 0]);
    }

    #[test]
    fn gemm_variants_agree() {
        // a: 2x3, b: 3x2
        let a = [1., 2., 3., 4., 5., 6.];
        let b = [7., 8., 9., 10., 11., 12.];
        let mut c = [0.0; 4];
        gemm_acc(&a, &b, &mut c, 2, 3, 2);
        assert_eq!(c, [58., 64., 139., 154.]);
        let bt = [7., 9., 11., 8., 10., 12.];
        let mut c2 = [0.0; 4];
        gemm_nt_acc(&a, &bt, &mut c2, 2, 3, 2);
        assert_eq!(c2, c);
        let at = [1., 4., 2., 5., 3., 6.];
        let mut c3 = [0.0; 4];
        gemm_tn_acc(&at, &b, &mut c3, 3, 2, 2);
        assert_eq!(c3, c);
    }
}
