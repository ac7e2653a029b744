//! Plain forward kernels. The tape records these and adds backward rules;
//! they are also usable directly for inference and reference checks.
//!
//! All reductions run in a fixed sequential order so results are bitwise
//! reproducible for identical inputs.

use super::{NumericsError, Tensor};
use crate::Scalar;

/// Epsilon added to the norm in [`l2norm`]; keeps the zero vector finite.
pub const L2_EPS: f64 = 1e-12;

/// Layer-norm variance epsilon.
pub const LN_EPS: f64 = 1e-5;

fn mismatch(op: &'static str, detail: String) -> NumericsError {
    NumericsError::ShapeMismatch { op, detail }
}

fn require_matrix<T: Scalar>(op: &'static str, t: &Tensor<T>) -> Result<(usize, usize), NumericsError> {
    if t.rank() != 2 {
        return Err(mismatch(op, format!("expected a matrix, got shape {:?}", t.shape())));
    }
    Ok((t.shape()[0], t.shape()[1]))
}

/// `a · b` for `a: m×k`, `b: k×n`.
pub fn matmul<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>, NumericsError> {
    let (m, k) = require_matrix("matmul", a)?;
    let (k2, n) = require_matrix("matmul", b)?;
    if k != k2 {
        return Err(mismatch("matmul", format!("{:?} x {:?}", a.shape(), b.shape())));
    }
    let (ad, bd) = (a.data(), b.data());
    let mut out = vec![T::zero(); m * n];
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = ad[i * k + p];
            if aip == T::zero() {
                continue;
            }
            let brow = &bd[p * n..(p + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += aip * bv;
            }
        }
    }
    Tensor::new(vec![m, n], out)
}

/// `a · bᵀ` for `a: m×k`, `b: n×k`.
pub fn matmul_nt<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>, NumericsError> {
    let (m, k) = require_matrix("matmul_nt", a)?;
    let (n, k2) = require_matrix("matmul_nt", b)?;
    if k != k2 {
        return Err(mismatch("matmul_nt", format!("{:?} x {:?}^T", a.shape(), b.shape())));
    }
    let (ad, bd) = (a.data(), b.data());
    let mut out = Vec::with_capacity(m * n);
    for i in 0..m {
        let arow = &ad[i * k..(i + 1) * k];
        for j in 0..n {
            let brow = &bd[j * k..(j + 1) * k];
            out.push(dot(arow, brow));
        }
    }
    Tensor::new(vec![m, n], out)
}

/// `aᵀ · b` for `a: k×m`, `b: k×n`.
pub fn matmul_tn<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>, NumericsError> {
    let (k, m) = require_matrix("matmul_tn", a)?;
    let (k2, n) = require_matrix("matmul_tn", b)?;
    if k != k2 {
        return Err(mismatch("matmul_tn", format!("{:?}^T x {:?}", a.shape(), b.shape())));
    }
    let (ad, bd) = (a.data(), b.data());
    let mut out = vec![T::zero(); m * n];
    for p in 0..k {
        let brow = &bd[p * n..(p + 1) * n];
        for i in 0..m {
            let api = ad[p * m + i];
            if api == T::zero() {
                continue;
            }
            let orow = &mut out[i * n..(i + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += api * bv;
            }
        }
    }
    Tensor::new(vec![m, n], out)
}

#[inline]
pub fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    let mut acc = T::zero();
    for (&x, &y) in a.iter().zip(b) {
        acc += x * y;
    }
    acc
}

/// `x / (‖x‖₂ + ε)`.
pub fn l2norm<T: Scalar>(x: &[T]) -> Vec<T> {
    let norm = dot(x, x).sqrt() + T::lit(L2_EPS);
    x.iter().map(|&v| v / norm).collect()
}

/// `W x + b` with `W: d_out×d_in`.
pub fn linear<T: Scalar>(x: &[T], w: &Tensor<T>, b: &[T]) -> Result<Vec<T>, NumericsError> {
    let (d_out, d_in) = require_matrix("linear", w)?;
    if x.len() != d_in || b.len() != d_out {
        return Err(mismatch(
            "linear",
            format!("x[{}], W{:?}, b[{}]", x.len(), w.shape(), b.len()),
        ));
    }
    Ok((0..d_out).map(|o| dot(w.row_slice(o), x) + b[o]).collect())
}

pub fn relu<T: Scalar>(x: &[T]) -> Vec<T> {
    x.iter().map(|&v| v.max(T::zero())).collect()
}

/// Two-layer perceptron `W₂ relu(W₁ x + b₁) + b₂`.
#[derive(Clone, Debug, PartialEq)]
pub struct Mlp2<T> {
    pub w1: Tensor<T>,
    pub b1: Vec<T>,
    pub w2: Tensor<T>,
    pub b2: Vec<T>,
}

impl<T: Scalar> Mlp2<T> {
    pub fn zeros(d_in: usize, hidden: usize, d_out: usize) -> Self {
        Mlp2 {
            w1: Tensor::zeros(&[hidden, d_in]),
            b1: vec![T::zero(); hidden],
            w2: Tensor::zeros(&[d_out, hidden]),
            b2: vec![T::zero(); d_out],
        }
    }

    pub fn d_in(&self) -> usize {
        self.w1.cols()
    }

    pub fn forward(&self, x: &[T]) -> Result<Vec<T>, NumericsError> {
        if x.len() != self.d_in() {
            return Err(mismatch("mlp2", format!("input {} != {}", x.len(), self.d_in())));
        }
        let hidden = relu(&linear(x, &self.w1, &self.b1)?);
        linear(&hidden, &self.w2, &self.b2)
    }
}

/// Row-wise softmax with max subtraction.
pub fn softmax_rows<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    let cols = x.cols();
    let mut out = x.clone();
    if cols == 0 {
        return out;
    }
    for row in out.data_mut().chunks_mut(cols) {
        let max = row.iter().copied().fold(T::neg_infinity(), T::max);
        let mut total = T::zero();
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            total += *v;
        }
        for v in row.iter_mut() {
            *v /= total;
        }
    }
    out
}

/// Attention weights `softmax(Q Kᵀ / √d)`.
pub fn attention_weights<T: Scalar>(q: &Tensor<T>, k: &Tensor<T>) -> Result<Tensor<T>, NumericsError> {
    let d = q.cols();
    let scale = T::one() / T::from_usize_lossy(d.max(1)).sqrt();
    let scores = matmul_nt(q, k)?.scale(scale);
    Ok(softmax_rows(&scores))
}

/// Single-head scaled dot-product attention `softmax(Q Kᵀ / √d) V`.
pub fn attention<T: Scalar>(q: &Tensor<T>, k: &Tensor<T>, v: &Tensor<T>) -> Result<Tensor<T>, NumericsError> {
    let (_, dq) = require_matrix("attention", q)?;
    let (nk, dk) = require_matrix("attention", k)?;
    let (nv, _) = require_matrix("attention", v)?;
    if dq != dk || nk != nv {
        return Err(mismatch(
            "attention",
            format!("Q{:?} K{:?} V{:?}", q.shape(), k.shape(), v.shape()),
        ));
    }
    matmul(&attention_weights(q, k)?, v)
}

/// Layer normalisation over the last dimension; returns output, per-row
/// means and reciprocal standard deviations.
pub fn layer_norm<T: Scalar>(
    x: &Tensor<T>,
    gamma: &[T],
    beta: &[T],
) -> Result<(Tensor<T>, Vec<T>, Vec<T>), NumericsError> {
    let cols = x.cols();
    if gamma.len() != cols || beta.len() != cols {
        return Err(mismatch("layer_norm", format!("{:?} vs gamma[{}]", x.shape(), gamma.len())));
    }
    let n = T::from_usize_lossy(cols);
    let mut out = x.clone();
    let mut means = Vec::with_capacity(x.rows());
    let mut rstds = Vec::with_capacity(x.rows());
    for row in out.data_mut().chunks_mut(cols) {
        let mean = row.iter().copied().sum::<T>() / n;
        let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / n;
        let rstd = T::one() / (var + T::lit(LN_EPS)).sqrt();
        for (j, v) in row.iter_mut().enumerate() {
            *v = (*v - mean) * rstd * gamma[j] + beta[j];
        }
        means.push(mean);
        rstds.push(rstd);
    }
    Ok((out, means, rstds))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn naive_matmul(a: &Tensor<f64>, b: &Tensor<f64>) -> Vec<f64> {
        let (m, k, n) = (a.rows(), a.cols(), b.cols());
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                for p in 0..k {
                    out[i * n + j] += a.get2(i, p) * b.get2(p, j);
                }
            }
        }
        out
    }

    fn transpose(t: &Tensor<f64>) -> Tensor<f64> {
        let (r, c) = (t.rows(), t.cols());
        let mut data = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                data[j * r + i] = t.get2(i, j);
            }
        }
        Tensor::new(vec![c, r], data).unwrap()
    }

    fn rel_close(a: &[f64], b: &[f64], tol: f64) -> bool {
        a.iter().zip(b).all(|(x, y)| (x - y).abs() <= tol * x.abs().max(y.abs()).max(1e-12))
    }

    #[test]
    fn l2norm_cases() {
        let y = l2norm(&[3.0f64, 4.0]);
        assert!((y[0] - 0.6).abs() < 1e-12 && (y[1] - 0.8).abs() < 1e-12);
        assert_eq!(l2norm(&[0.0f64; 5]), vec![0.0; 5]);
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let x = Tensor::<f64>::randn(&[400], 1.0, &mut rng);
        let y = l2norm(x.data());
        let norm = y.iter().map(|v| v * v).sum::<f64>().sqrt();
        assert!(norm <= 1.0 && norm >= 1.0 - 1e-6, "{norm}");
    }

    #[test]
    fn linear_cases() {
        let w = Tensor::<f64>::zeros(&[3, 2]);
        assert_eq!(linear(&[1.0, 2.0], &w, &[0.0; 3]).unwrap(), vec![0.0; 3]);
        let w = Tensor::from_rows(&[vec![1.0f64, 1.0]]);
        assert_eq!(linear(&[2.0, 3.0], &w, &[0.0]).unwrap(), vec![5.0]);
        assert!(matches!(
            linear(&[1.0, 2.0, 3.0], &w, &[0.0]),
            Err(NumericsError::ShapeMismatch { .. })
        ));
    }

    #[test]
    fn linear_matches_triple_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let w = Tensor::<f64>::randn(&[64, 400], 0.1, &mut rng);
        let b = Tensor::<f64>::randn(&[64], 0.1, &mut rng);
        let x = Tensor::<f64>::randn(&[400], 1.0, &mut rng);
        let got = linear(x.data(), &w, b.data()).unwrap();
        let mut expected = vec![0.0; 64];
        for o in 0..64 {
            expected[o] = b.data()[o];
            for i in 0..400 {
                expected[o] += w.get2(o, i) * x.data()[i];
            }
        }
        assert!(rel_close(&got, &expected, 1e-6));
    }

    #[test]
    fn matmul_variants_agree_with_naive() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let a = Tensor::<f64>::randn(&[5, 7], 1.0, &mut rng);
        let b = Tensor::<f64>::randn(&[7, 3], 1.0, &mut rng);
        let expected = naive_matmul(&a, &b);
        assert!(rel_close(matmul(&a, &b).unwrap().data(), &expected, 1e-12));
        assert!(rel_close(matmul_nt(&a, &transpose(&b)).unwrap().data(), &expected, 1e-12));
        assert!(rel_close(matmul_tn(&transpose(&a), &b).unwrap().data(), &expected, 1e-12));
        assert!(matmul(&a, &a).is_err());
    }

    #[test]
    fn mlp2_cases() {
        let zero = Mlp2::<f64>::zeros(4, 2, 2);
        assert_eq!(zero.forward(&[1.0, 2.0, 3.0, 4.0]).unwrap(), vec![0.0, 0.0]);

        // Negative pre-activations: hidden dies, output is exactly b2.
        let mut m = Mlp2::<f64>::zeros(4, 2, 2);
        m.b1 = vec![-1.0, -1.0];
        m.w2 = Tensor::from_rows(&[vec![3.0, 1.0], vec![2.0, 5.0]]);
        m.b2 = vec![0.25, -0.5];
        assert_eq!(m.forward(&[0.1, 0.2, 0.3, 0.4]).unwrap(), vec![0.25, -0.5]);

        // Hand case: W1 selects the first two inputs, relu drops -2.
        let m = Mlp2 {
            w1: Tensor::from_rows(&[vec![1.0, 0.0, 0.0, 0.0], vec![0.0, 1.0, 0.0, 0.0]]),
            b1: vec![0.0, 0.0],
            w2: Tensor::eye(2),
            b2: vec![0.0, 0.0],
        };
        assert_eq!(m.forward(&[1.0, -2.0, 5.0, 5.0]).unwrap(), vec![1.0, 0.0]);
        assert!(m.forward(&[1.0, 2.0]).is_err());
    }

    #[test]
    fn attention_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let v = Tensor::<f64>::randn(&[5, 4], 1.0, &mut rng);
        let k = Tensor::<f64>::randn(&[5, 4], 1.0, &mut rng);
        let q = Tensor::<f64>::zeros(&[2, 4]);
        let out = attention(&q, &k, &v).unwrap();
        for r in 0..2 {
            for c in 0..4 {
                let mean = (0..5).map(|i| v.get2(i, c)).sum::<f64>() / 5.0;
                assert!((out.get2(r, c) - mean).abs() < 1e-12);
            }
        }

        let v1 = Tensor::<f64>::randn(&[1, 4], 1.0, &mut rng);
        let k1 = Tensor::<f64>::randn(&[1, 4], 1.0, &mut rng);
        let q3 = Tensor::<f64>::randn(&[3, 4], 1.0, &mut rng);
        let out = attention(&q3, &k1, &v1).unwrap();
        for r in 0..3 {
            assert_eq!(out.row_slice(r), v1.row_slice(0));
        }

        assert!(attention(&q3, &Tensor::zeros(&[2, 3]), &v1).is_err());
    }

    #[test]
    fn attention_matches_bruteforce() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let q = Tensor::<f64>::randn(&[3, 4], 1.0, &mut rng);
        let k = Tensor::<f64>::randn(&[3, 4], 1.0, &mut rng);
        let v = Tensor::<f64>::randn(&[3, 4], 1.0, &mut rng);
        let got = attention(&q, &k, &v).unwrap();
        let mut expected = vec![0.0; 12];
        for i in 0..3 {
            let scores: Vec<f64> = (0..3)
                .map(|j| (0..4).map(|c| q.get2(i, c) * k.get2(j, c)).sum::<f64>() / 2.0)
                .collect();
            let z: f64 = scores.iter().map(|s| s.exp()).sum();
            for j in 0..3 {
                for c in 0..4 {
                    expected[i * 4 + c] += scores[j].exp() / z * v.get2(j, c);
                }
            }
        }
        assert!(rel_close(got.data(), &expected, 1e-6));
        let w = attention_weights(&q, &k).unwrap();
        for r in 0..3 {
            let s: f64 = w.row_slice(r).iter().sum();
            assert!((s - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn layer_norm_rows_are_standardised() {
        let x = Tensor::<f64>::from_rows(&[vec![1.0, 2.0, 3.0, 4.0], vec![-1.0, 0.0, 0.0, 1.0]]);
        let (y, _, _) = layer_norm(&x, &[1.0; 4], &[0.0; 4]).unwrap();
        for r in 0..2 {
            let row = y.row_slice(r);
            let mean: f64 = row.iter().sum::<f64>() / 4.0;
            let var: f64 = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 4.0;
            assert!(mean.abs() < 1e-12);
            assert!((var - 1.0).abs() < 1e-4);
        }
    }
}
