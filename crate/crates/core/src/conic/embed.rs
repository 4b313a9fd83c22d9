use nalgebra::DMatrix;
use num_complex::Complex64;

use super::ConicError;

const HERMITIAN_TOL: f64 = 1e-12;

/// Real symmetric image `[[Re H, −Im H], [Im H, Re H]]` of a Hermitian
/// matrix. `H` is PSD iff the image is, and every eigenvalue of `H` shows
/// up twice.
pub fn hermitian_embed(h: &DMatrix<Complex64>) -> Result<DMatrix<f64>, ConicError> {
    let n = h.nrows();
    if h.ncols() != n {
        return Err(ConicError::Dimension(format!("{}x{} is not square", n, h.ncols())));
    }
    let scale = h.iter().map(|v| v.norm()).fold(1.0, f64::max);
    let mut dev = 0.0f64;
    for i in 0..n {
        for j in 0..n {
            dev = dev.max((h[(i, j)] - h[(j, i)].conj()).norm());
        }
    }
    if dev > HERMITIAN_TOL * scale {
        return Err(ConicError::NotHermitian(dev));
    }
    let mut out = DMatrix::zeros(2 * n, 2 * n);
    for i in 0..n {
        for j in 0..n {
            let v = 0.5 * (h[(i, j)] + h[(j, i)].conj());
            out[(i, j)] = v.re;
            out[(n + i, n + j)] = v.re;
            out[(i, n + j)] = -v.im;
            out[(n + i, j)] = v.im;
        }
    }
    Ok(out)
}

/// Recovers the Hermitian matrix from a real symmetric `2n × 2n` matrix,
/// averaging the two copies so that matrices not exactly of embedded form
/// map to their nearest Hermitian preimage.
pub fn hermitian_from_embedded(x: &DMatrix<f64>) -> DMatrix<Complex64> {
    let n = x.nrows() / 2;
    DMatrix::from_fn(n, n, |i, j| {
        let re = 0.5 * (x[(i, j)] + x[(n + i, n + j)]);
        let im = 0.5 * (x[(n + i, j)] - x[(i, n + j)]);
        Complex64::new(re, im)
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn c(re: f64, im: f64) -> Complex64 {
        Complex64::new(re, im)
    }

    #[test]
    fn identity_embeds_to_identity() {
        let e = hermitian_embed(&DMatrix::identity(3, 3)).unwrap();
        assert_eq!(e, DMatrix::identity(6, 6));
    }

    #[test]
    fn skew_example_has_doubled_spectrum() {
        let h = DMatrix::from_row_slice(2, 2, &[c(0.0, 0.0), c(0.0, 1.0), c(0.0, -1.0), c(0.0, 0.0)]);
        let e = hermitian_embed(&h).unwrap();
        let mut eig: Vec<f64> = e.symmetric_eigenvalues().iter().copied().collect();
        eig.sort_by(f64::total_cmp);
        for (got, want) in eig.iter().zip([-1.0, -1.0, 1.0, 1.0]) {
            assert!((got - want).abs() < 1e-12);
        }
    }

    #[test]
    fn real_input_is_block_diagonal() {
        let h = DMatrix::from_row_slice(2, 2, &[c(2.0, 0.0), c(0.5, 0.0), c(0.5, 0.0), c(1.0, 0.0)]);
        let e = hermitian_embed(&h).unwrap();
        for i in 0..2 {
            for j in 0..2 {
                assert_eq!(e[(i, j)], h[(i, j)].re);
                assert_eq!(e[(i + 2, j + 2)], h[(i, j)].re);
                assert_eq!(e[(i, j + 2)], 0.0);
                assert_eq!(e[(i + 2, j)], 0.0);
            }
        }
    }

    #[test]
    fn rejects_non_hermitian() {
        let h = DMatrix::from_row_slice(2, 2, &[c(1.0, 0.0), c(0.0, 1.0), c(0.0, 1.0), c(1.0, 0.0)]);
        assert!(matches!(hermitian_embed(&h), Err(ConicError::NotHermitian(_))));
    }

    #[test]
    fn trace_doubles_and_round_trips() {
        let a = DMatrix::from_row_slice(2, 2, &[c(1.0, 0.0), c(0.3, -0.7), c(0.3, 0.7), c(2.0, 0.0)]);
        let b = DMatrix::from_row_slice(2, 2, &[c(0.5, 0.0), c(-0.2, 0.1), c(-0.2, -0.1), c(1.5, 0.0)]);
        let ea = hermitian_embed(&a).unwrap();
        let eb = hermitian_embed(&b).unwrap();
        let lhs = (&ea * &eb).trace();
        let rhs = 2.0 * (&a * &b).trace().re;
        assert!((lhs - rhs).abs() < 1e-12);
        let back = hermitian_from_embedded(&ea);
        assert!((back - a).norm() < 1e-15);
    }
}
