//! Small dense linear-algebra helpers shared by the autodiff ops and the
//! plain (non-differentiable) metric-head functions.

use ndarray::{Array2, ArrayView2};

/// Pairwise squared Euclidean distances between the rows of `a` (n x d) and
/// `b` (m x d), computed as |a|^2 + |b|^2 - 2 a b^T with a clamp at zero for
/// the tiny negatives floating point can produce on near-identical rows.
pub fn pairwise_sqdist(a: ArrayView2<'_, f64>, b: ArrayView2<'_, f64>) -> Array2<f64> {
    assert_eq!(a.ncols(), b.ncols(), "pairwise_sqdist: dim mismatch");
    let an: Vec<f64> = a.rows().into_iter().map(|r| r.dot(&r)).collect();
    let bn: Vec<f64> = b.rows().into_iter().map(|r| r.dot(&r)).collect();
    let mut out = a.dot(&b.t());
    for (i, mut row) in out.rows_mut().into_iter().enumerate() {
        for (j, v) in row.iter_mut().enumerate() {
            *v = (an[i] + bn[j] - 2.0 * *v).max(0.0);
        }
    }
    out
}

/// Solve `A x = y` column-wise via LU with partial pivoting.
/// Returns `None` when the system is singular to working precision.
pub fn solve(a: &Array2<f64>, y: &Array2<f64>) -> Option<Array2<f64>> {
    let n = a.nrows();
    assert_eq!(n, a.ncols(), "solve: matrix must be square");
    assert_eq!(n, y.nrows(), "solve: rhs row mismatch");
    let na = nalgebra::DMatrix::from_fn(n, n, |i, j| a[[i, j]]);
    let ny = nalgebra::DMatrix::from_fn(n, y.ncols(), |i, j| y[[i, j]]);
    let lu = na.lu();
    let sol = lu.solve(&ny)?;
    Some(Array2::from_shape_fn((n, y.ncols()), |(i, j)| sol[(i, j)]))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn sqdist_matches_direct_sum() {
        let a = array![[1.0, 2.0], [0.0, -1.0], [3.0, 0.5]];
        let b = array![[0.0, 0.0], [1.0, 1.0]];
        let d = pairwise_sqdist(a.view(), b.view());
        for i in 0..3 {
            for j in 0..2 {
                let direct: f64 = (0..2).map(|k| (a[[i, k]] - b[[j, k]]).powi(2)).sum();
                assert!((d[[i, j]] - direct).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn sqdist_identical_rows_is_zero() {
        let a = array![[0.3, -0.7, 1.9], [0.3, -0.7, 1.9]];
        let d = pairwise_sqdist(a.view(), a.view());
        assert!(d[[0, 1]].abs() < 1e-12);
        assert!(d[[1, 0]].abs() < 1e-12);
    }

    #[test]
    fn solve_recovers_known_solution() {
        let a = array![[4.0, 1.0], [1.0, 3.0]];
        let x = array![[1.0], [2.0]];
        let y = a.dot(&x);
        let got = solve(&a, &y).unwrap();
        assert!((got[[0, 0]] - 1.0).abs() < 1e-12);
        assert!((got[[1, 0]] - 2.0).abs() < 1e-12);
    }

    #[test]
    fn solve_reports_singular() {
        let a = array![[1.0, 2.0], [2.0, 4.0]];
        let y = array![[1.0], [1.0]];
        assert!(solve(&a, &y).is_none());
    }
}
