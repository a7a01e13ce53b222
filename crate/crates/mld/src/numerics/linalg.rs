//! Small dense symmetric eigendecomposition in f64, enough for metric
//! computations over feature covariances and pose alignment. Cyclic Jacobi
//! rotations converge quadratically at the handful-of-dimensions scale this
//! crate works at, with no external linear algebra dependency.

use crate::error::{Error, Result};
use crate::numerics::TensorG;

/// Eigendecomposition of a symmetric matrix. Returns the eigenvalues and a
/// matrix whose columns are the matching orthonormal eigenvectors, so that
/// `a = v * diag(vals) * v^T`. The input is symmetrized first, so slight
/// asymmetry from accumulated float error is tolerated.
pub fn sym_eigen(a: &TensorG<f64>) -> Result<(Vec<f64>, TensorG<f64>)> {
    let n = a.rows();
    if a.dims().len() != 2 || a.cols() != n {
        return Err(Error::ShapeMismatch {
            op: "sym_eigen",
            detail: format!("expected a square matrix, got {:?}", a.dims()),
        });
    }
    if n == 0 {
        return Err(Error::InvalidArgument("empty matrix".into()));
    }
    let mut m: Vec<f64> = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            m[i * n + j] = 0.5 * (a.at(i, j) + a.at(j, i));
        }
    }
    let mut v = vec![0.0f64; n * n];
    for i in 0..n {
        v[i * n + i] = 1.0;
    }

    let scale: f64 = m.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-300);
    for _sweep in 0..100 {
        let mut off = 0.0f64;
        for i in 0..n {
            for j in (i + 1)..n {
                off += m[i * n + j] * m[i * n + j];
            }
        }
        if off.sqrt() <= 1e-14 * scale {
            break;
        }
        for p in 0..n {
            for q in (p + 1)..n {
                let apq = m[p * n + q];
                if apq.abs() <= 1e-300 {
                    continue;
                }
                let theta = (m[q * n + q] - m[p * n + p]) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let (mkp, mkq) = (m[k * n + p], m[k * n + q]);
                    m[k * n + p] = c * mkp - s * mkq;
                    m[k * n + q] = s * mkp + c * mkq;
                }
                for k in 0..n {
                    let (mpk, mqk) = (m[p * n + k], m[q * n + k]);
                    m[p * n + k] = c * mpk - s * mqk;
                    m[q * n + k] = s * mpk + c * mqk;
                }
                for k in 0..n {
                    let (vkp, vkq) = (v[k * n + p], v[k * n + q]);
                    v[k * n + p] = c * vkp - s * vkq;
                    v[k * n + q] = s * vkp + c * vkq;
                }
            }
        }
    }

    let vals: Vec<f64> = (0..n).map(|i| m[i * n + i]).collect();
    let vecs = TensorG::from_vec(vec![n, n], v)?;
    Ok((vals, vecs))
}

/// Principal square root of a symmetric positive semidefinite matrix.
/// Slightly negative eigenvalues from float noise are clamped to zero.
pub fn sqrt_spd(a: &TensorG<f64>) -> Result<TensorG<f64>> {
    let n = a.rows();
    let (vals, vecs) = sym_eigen(a)?;
    let roots: Vec<f64> = vals.iter().map(|l| l.max(0.0).sqrt()).collect();
    let mut out = TensorG::<f64>::zeros(&[n, n]);
    for i in 0..n {
        for j in 0..n {
            let mut acc = 0.0;
            for (k, r) in roots.iter().enumerate() {
                acc += vecs.at(i, k) * r * vecs.at(j, k);
            }
            out.data_mut()[i * n + j] = acc;
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::CounterRng;

    fn random_symmetric(n: usize, seed: u64) -> TensorG<f64> {
        let mut rng = CounterRng::new(seed).fork_str("sym");
        let mut a = TensorG::<f64>::zeros(&[n, n]);
        for i in 0..n {
            for j in i..n {
                let x = rng.normal();
                a.data_mut()[i * n + j] = x;
                a.data_mut()[j * n + i] = x;
            }
        }
        a
    }

    fn reconstruct(vals: &[f64], vecs: &TensorG<f64>) -> TensorG<f64> {
        let n = vals.len();
        let mut out = TensorG::<f64>::zeros(&[n, n]);
        for i in 0..n {
            for j in 0..n {
                let mut acc = 0.0;
                for (k, l) in vals.iter().enumerate() {
                    acc += vecs.at(i, k) * l * vecs.at(j, k);
                }
                out.data_mut()[i * n + j] = acc;
            }
        }
        out
    }

    #[test]
    fn eigen_reconstructs_random_symmetric() {
        for seed in [1u64, 2, 3] {
            let a = random_symmetric(6, seed);
            let (vals, vecs) = sym_eigen(&a).unwrap();
            let back = reconstruct(&vals, &vecs);
            assert!(back.max_abs_diff(&a) < 1e-9);
            for i in 0..6 {
                for j in 0..6 {
                    let mut dot = 0.0;
                    for k in 0..6 {
                        dot += vecs.at(k, i) * vecs.at(k, j);
                    }
                    let want = if i == j { 1.0 } else { 0.0 };
                    assert!((dot - want).abs() < 1e-10);
                }
            }
        }
    }

    #[test]
    fn eigen_handles_diagonal_input() {
        let a = TensorG::<f64>::from_vec(vec![3, 3], vec![4.0, 0.0, 0.0, 0.0, -2.0, 0.0, 0.0, 0.0, 7.0])
            .unwrap();
        let (mut vals, _) = sym_eigen(&a).unwrap();
        vals.sort_by(|x, y| x.partial_cmp(y).unwrap());
        assert!((vals[0] + 2.0).abs() < 1e-12);
        assert!((vals[1] - 4.0).abs() < 1e-12);
        assert!((vals[2] - 7.0).abs() < 1e-12);
    }

    #[test]
    fn sqrt_spd_squares_back() {
        let mut rng = CounterRng::new(4).fork_str("spd");
        let n = 5;
        let mut m = TensorG::<f64>::zeros(&[n, n]);
        for v in m.data_mut() {
            *v = rng.normal();
        }
        let mut a = m.transpose().matmul(&m).unwrap();
        for i in 0..n {
            a.data_mut()[i * n + i] += 0.1;
        }
        let s = sqrt_spd(&a).unwrap();
        let sq = s.matmul(&s).unwrap();
        assert!(sq.max_abs_diff(&a) < 1e-9);
        assert!(s.max_abs_diff(&s.transpose()) < 1e-10);
    }

    #[test]
    fn eigen_rejects_non_square() {
        let a = TensorG::<f64>::zeros(&[2, 3]);
        assert!(sym_eigen(&a).is_err());
    }
}
