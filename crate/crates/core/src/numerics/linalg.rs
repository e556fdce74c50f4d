//! Dense kernels. Every reduction accumulates in 64-bit precision.

use super::Tensor;
use crate::error::{Error, Result};

/// `c = op(a) · op(b) + beta · c` on row-major 64-bit buffers.
///
/// `op(a)` is `m×k` and `op(b)` is `k×n`. With `trans_a` the buffer `a`
/// holds a `k×m` matrix, likewise `trans_b` means `b` holds `n×k`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    trans_a: bool,
    b: &[f64],
    trans_b: bool,
    c: &mut [f64],
    beta: f64,
) {
    assert_eq!(a.len(), m * k, "gemm: lhs buffer size");
    assert_eq!(b.len(), k * n, "gemm: rhs buffer size");
    assert_eq!(c.len(), m * n, "gemm: out buffer size");
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        if beta == 0.0 {
            c.fill(0.0);
        } else {
            c.iter_mut().for_each(|v| *v *= beta);
        }
        return;
    }
    let (rsa, csa) = if trans_a { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if trans_b { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: buffer extents were asserted above and the strides describe
    // exactly those extents; `c` does not alias `a` or `b` (distinct borrows).
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

/// Matrix product of two 2-D tensors.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if !a.is_matrix() || !b.is_matrix() {
        return Err(Error::shape(format!(
            "matmul expects matrices, got {:?} and {:?}",
            a.shape(),
            b.shape()
        )));
    }
    let (m, k) = (a.shape()[0], a.shape()[1]);
    let (k2, n) = (b.shape()[0], b.shape()[1]);
    if k != k2 {
        return Err(Error::shape(format!(
            "matmul inner dimensions differ: {m}x{k} · {k2}x{n}"
        )));
    }
    let mut c = vec![0.0; m * n];
    gemm(m, k, n, &a.to_f64(), false, &b.to_f64(), false, &mut c, 0.0);
    Tensor::from_f64(vec![m, n], &c)
}

/// Numerically stable log-softmax of one row, written into `out`.
pub(crate) fn log_softmax_into(row: &[f64], out: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let sum: f64 = row.iter().map(|&v| (v - max).exp()).sum();
    let log_z = max + sum.ln();
    for (o, &v) in out.iter_mut().zip(row) {
        *o = v - log_z;
    }
}

/// Softmax of a real vector, computed with max subtraction.
pub fn softmax(v: &[f32]) -> Result<Vec<f32>> {
    if v.is_empty() {
        return Err(Error::InvalidInput("softmax of empty vector".into()));
    }
    if v.iter().any(|x| !x.is_finite()) {
        return Err(Error::Numeric("softmax input is not finite".into()));
    }
    let wide: Vec<f64> = v.iter().map(|&x| f64::from(x)).collect();
    Ok(softmax_f64(&wide).into_iter().map(|p| p as f32).collect())
}

pub(crate) fn softmax_f64(v: &[f64]) -> Vec<f64> {
    let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = v.iter().map(|&x| (x - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

/// Summed negative log-likelihood `-Σ_t log p(targets[t] | logits[t])`.
///
/// Positions whose `mask` entry is `false` are excluded from the sum.
pub fn cross_entropy_sequence(
    logits: &Tensor,
    targets: &[usize],
    mask: Option<&[bool]>,
) -> Result<f64> {
    if !logits.is_matrix() {
        return Err(Error::shape("cross entropy expects T×V logits"));
    }
    let (t, v) = (logits.shape()[0], logits.shape()[1]);
    if targets.is_empty() {
        return Err(Error::InvalidInput("empty target sequence".into()));
    }
    if targets.len() != t {
        return Err(Error::shape(format!(
            "{} targets for {t} logit rows",
            targets.len()
        )));
    }
    if let Some(m) = mask {
        if m.len() != t {
            return Err(Error::shape("mask length differs from sequence"));
        }
    }
    let mut row = vec![0.0; v];
    let mut out = vec![0.0; v];
    let mut total = 0.0;
    for (pos, &target) in targets.iter().enumerate() {
        if target >= v {
            return Err(Error::InvalidInput(format!(
                "target id {target} out of range for vocabulary of {v}"
            )));
        }
        if mask.is_some_and(|m| !m[pos]) {
            continue;
        }
        for (r, &x) in row.iter_mut().zip(logits.row(pos)) {
            *r = f64::from(x);
        }
        log_softmax_into(&row, &mut out);
        total -= out[target];
    }
    if !total.is_finite() {
        return Err(Error::Numeric("cross entropy is not finite".into()));
    }
    Ok(total)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_and_zero() {
        let m = Tensor::from_rows(&[
            vec![1.0, 2.0, 3.0],
            vec![4.0, 5.0, 6.0],
            vec![7.0, 8.0, 9.5],
        ])
        .unwrap();
        assert_eq!(matmul(&Tensor::identity(3), &m).unwrap(), m);
        let z = Tensor::zeros(&[3, 3]);
        assert_eq!(matmul(&z, &m).unwrap(), z);
    }

    #[test]
    fn scalar_product() {
        let a = Tensor::new(vec![1, 1], vec![2.0]).unwrap();
        let b = Tensor::new(vec![1, 1], vec![3.0]).unwrap();
        assert_eq!(matmul(&a, &b).unwrap().data(), &[6.0]);
    }

    #[test]
    fn mismatched_inner_dims() {
        let a = Tensor::zeros(&[2, 3]);
        let b = Tensor::zeros(&[2, 3]);
        assert!(matches!(matmul(&a, &b), Err(Error::Shape(_))));
    }

    #[test]
    fn transposed_gemm_matches_plain() {
        // a: 2x3, b: 3x2, compare a·b against (aᵀ)ᵀ·(bᵀ)ᵀ
        let a = [1.0, 2.0, 3.0, 4.0, 5.0, 6.0];
        let b = [7.0, 8.0, 9.0, 10.0, 11.0, 12.0];
        let at = [1.0, 4.0, 2.0, 5.0, 3.0, 6.0];
        let bt = [7.0, 9.0, 11.0, 8.0, 10.0, 12.0];
        let mut c1 = [0.0; 4];
        let mut c2 = [0.0; 4];
        gemm(2, 3, 2, &a, false, &b, false, &mut c1, 0.0);
        gemm(2, 3, 2, &at, true, &bt, true, &mut c2, 0.0);
        assert_eq!(c1, [58.0, 64.0, 139.0, 154.0]);
        assert_eq!(c1, c2);
    }

    #[test]
    fn softmax_examples() {
        assert_eq!(softmax(&[0.0, 0.0]).unwrap(), vec![0.5, 0.5]);
        let p = softmax(&[1f32.ln(), 3f32.ln()]).unwrap();
        assert!((p[0] - 0.25).abs() < 1e-7 && (p[1] - 0.75).abs() < 1e-7);
        let base = softmax(&[0.3, -1.2, 2.0]).unwrap();
        let shifted = softmax(&[100.3, 98.8, 102.0]).unwrap();
        for (x, y) in base.iter().zip(&shifted) {
            assert!((x - y).abs() < 1e-6);
        }
        assert!(softmax(&[f32::NAN, 1.0]).is_err());
        assert!(softmax(&[]).is_err());
    }

    #[test]
    fn cross_entropy_uniform_and_certain() {
        let uniform = Tensor::zeros(&[3, 4]);
        let l = cross_entropy_sequence(&uniform, &[0, 1, 3], None).unwrap();
        assert!((l - 3.0 * 4f64.ln()).abs() < 1e-12);

        let mut sharp = Tensor::filled(&[2, 3], -1e4);
        sharp.data_mut()[1] = 0.0;
        sharp.data_mut()[3 + 2] = 0.0;
        let l = cross_entropy_sequence(&sharp, &[1, 2], None).unwrap();
        assert!(l.abs() < 1e-12);
    }

    #[test]
    fn cross_entropy_scalar_oracle() {
        let logits = Tensor::from_rows(&[vec![0.5, -1.0, 2.0], vec![1.5, 0.25, -0.75]]).unwrap();
        let targets = [2, 0];
        // per-position scalar log-softmax
        let mut expected = 0.0;
        for (t, &y) in targets.iter().enumerate() {
            let row: Vec<f64> = logits.row(t).iter().map(|&v| f64::from(v)).collect();
            let z: f64 = row.iter().map(|v| v.exp()).sum();
            expected += z.ln() - row[y];
        }
        let got = cross_entropy_sequence(&logits, &targets, None).unwrap();
        assert!((got - expected).abs() < 1e-12);

        let masked = cross_entropy_sequence(&logits, &targets, Some(&[false, true])).unwrap();
        let row: Vec<f64> = logits.row(1).iter().map(|&v| f64::from(v)).collect();
        let z: f64 = row.iter().map(|v| v.exp()).sum();
        assert!((masked - (z.ln() - row[0])).abs() < 1e-12);
    }

    #[test]
    fn cross_entropy_errors() {
        let logits = Tensor::zeros(&[2, 3]);
        assert!(cross_entropy_sequence(&logits, &[], None).is_err());
        assert!(cross_entropy_sequence(&logits, &[0, 3], None).is_err());
    }
}
