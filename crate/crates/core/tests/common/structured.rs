//! Dense-matrix oracles for the indicator-structured noise covariance.

use nalgebra::DMatrix;

/// `R(𝓘)` built entry by entry from the indicator values.
pub fn dense_r_of(r: &DMatrix<f64>, ind: &[f64]) -> DMatrix<f64> {
    let m = r.nrows();
    let mut out = DMatrix::zeros(m, m);
    for i in 0..m {
        for j in 0..m {
            out[(i, j)] = if i == j {
                r[(i, i)] / ind[i]
            } else if ind[i] == 1.0 && ind[j] == 1.0 {
                r[(i, j)]
            } else {
                0.0
            };
        }
    }
    out
}

pub fn dense_inv(m: &DMatrix<f64>) -> DMatrix<f64> {
    m.clone().try_inverse().expect("invertible")
}

/// `R(𝓘ᵢ=1)⁻¹ − R(𝓘ᵢ=ε)⁻¹` by two dense inversions.
pub fn dense_delta(r: &DMatrix<f64>, ind: &[f64], i: usize, eps: f64) -> DMatrix<f64> {
    let mut a = ind.to_vec();
    a[i] = 1.0;
    let mut b = ind.to_vec();
    b[i] = eps;
    dense_inv(&dense_r_of(r, &a)) - dense_inv(&dense_r_of(r, &b))
}

/// `ln|R(𝓘ᵢ=1)| − ln|R(𝓘ᵢ=ε)|` from LU determinants.
pub fn dense_log_det_ratio(r: &DMatrix<f64>, ind: &[f64], i: usize, eps: f64) -> f64 {
    let mut a = ind.to_vec();
    a[i] = 1.0;
    let mut b = ind.to_vec();
    b[i] = eps;
    dense_r_of(r, &a).determinant().ln() - dense_r_of(r, &b).determinant().ln()
}
