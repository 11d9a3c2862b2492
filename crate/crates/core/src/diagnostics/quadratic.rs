use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{BlockParams, FfnWeights};
use crate::tensor::{sigmoid, Tensor};

pub const EIGEN_TOL: f64 = 1e-10;
pub const EIGEN_MAX_ITER: usize = 10_000;

#[derive(Debug, Clone, PartialEq)]
pub struct QuadraticFormResult {
    pub channel: usize,
    /// `U_k = Σ_i W_down[k,i] · g_i u_iᵀ`
    pub u: Tensor,
    /// `(U_k + U_kᵀ) / 2`
    pub s: Tensor,
    pub frobenius: f64,
}

/// The SwiGLU weights of a feed-forward block, or a kind error.
pub fn swiglu_weights<T>(block: &BlockParams<T>) -> Result<(&T, &T, &T)> {
    match block {
        BlockParams::FeedForward(p) => match &p.weights {
            FfnWeights::Swiglu { w_gate, w_up, w_down } => Ok((w_gate, w_up, w_down)),
            _ => Err(Error::Kind("quadratic analysis needs a swiglu feed-forward block".into())),
        },
        BlockParams::Attention(_) => {
            Err(Error::Kind("quadratic analysis needs a feed-forward block, got attention".into()))
        }
    }
}

/// Assemble the channel-`k` quadratic form of a SwiGLU block. `w_gate` and
/// `w_up` are `[d_ffn × d]` (row `i` is `g_i`, `u_i`); `w_down` is
/// `[d × d_ffn]`.
pub fn quadratic_form_from(w_gate: &Tensor, w_up: &Tensor, w_down: &Tensor, k: usize) -> Result<QuadraticFormResult> {
    let (f, d) = w_gate.dims2()?;
    if w_up.shape() != [f, d] || w_down.shape() != [d, f] {
        return Err(Error::Dimension(format!(
            "swiglu shapes gate {:?}, up {:?}, down {:?}",
            w_gate.shape(),
            w_up.shape(),
            w_down.shape()
        )));
    }
    if k >= d {
        return Err(Error::Dimension(format!("channel {k} out of range for width {d}")));
    }
    let mut u = vec![0.0; d * d];
    for i in 0..f {
        let c = w_down.data()[k * f + i];
        if c == 0.0 {
            continue;
        }
        let g = w_gate.row(i);
        let up = w_up.row(i);
        for a in 0..d {
            let ga = c * g[a];
            for b in 0..d {
                u[a * d + b] += ga * up[b];
            }
        }
    }
    let mut s = vec![0.0; d * d];
    for a in 0..d {
        for b in 0..d {
            s[a * d + b] = 0.5 * (u[a * d + b] + u[b * d + a]);
        }
    }
    let frobenius = u.iter().map(|x| x * x).sum::<f64>().sqrt();
    Ok(QuadraticFormResult {
        channel: k,
        u: Tensor::new(vec![d, d], u)?,
        s: Tensor::new(vec![d, d], s)?,
        frobenius,
    })
}

pub fn quadratic_form(block: &BlockParams<Tensor>, k: usize) -> Result<QuadraticFormResult> {
    let (g, u, dn) = swiglu_weights(block)?;
    quadratic_form_from(g, u, dn, k)
}

/// Frobenius norm `‖U_k‖_F` for every output channel of a SwiGLU block.
pub fn frobenius_profile(block: &BlockParams<Tensor>) -> Result<Vec<f64>> {
    let (g, u, dn) = swiglu_weights(block)?;
    let d = g.shape()[1];
    (0..d).map(|k| Ok(quadratic_form_from(g, u, dn, k)?.frobenius)).collect()
}

/// `xᵀ M x`
pub fn quadratic_value(m: &Tensor, x: &[f64]) -> f64 {
    let d = x.len();
    (0..d)
        .map(|a| x[a] * (0..d).map(|b| m.data()[a * d + b] * x[b]).sum::<f64>())
        .sum()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EigenResult {
    pub value: f64,
    pub vector: Vec<f64>,
    pub residual: f64,
    pub iterations: usize,
}

fn matvec(s: &[f64], n: usize, x: &[f64], out: &mut [f64]) {
    for (r, o) in out.iter_mut().enumerate() {
        *o = s[r * n..(r + 1) * n].iter().zip(x).map(|(a, b)| a * b).sum();
    }
}

fn norm(x: &[f64]) -> f64 {
    x.iter().map(|v| v * v).sum::<f64>().sqrt()
}

/// Dominant-magnitude eigenpair of a symmetric matrix by power iteration on
/// `S²`; the sign of `λ⋆` comes from the Rayleigh quotient `s⋆ᵀ S s⋆`.
///
/// Converged when `‖S s − λ s‖ ≤ tol·|λ|`. Two eigenvalues of equal
/// magnitude and opposite sign never satisfy this and end in a convergence
/// error.
pub fn top_eigenpair(s: &Tensor, tol: f64, max_iter: usize) -> Result<EigenResult> {
    let (n, m) = s.dims2()?;
    if n != m || n == 0 {
        return Err(Error::Dimension(format!("eigenpair needs a square matrix, got {:?}", s.shape())));
    }
    let a = s.data();
    for r in 0..n {
        for c in 0..r {
            if (a[r * n + c] - a[c * n + r]).abs() > 1e-9 {
                return Err(Error::Contract(format!("matrix is not symmetric at ({r}, {c})")));
            }
        }
    }
    if a.iter().all(|&x| x == 0.0) {
        let mut vector = vec![0.0; n];
        vector[0] = 1.0;
        return Ok(EigenResult {
            value: 0.0,
            vector,
            residual: 0.0,
            iterations: 0,
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(0x5eed);
    let mut x: Vec<f64> = (0..n).map(|_| rng.random::<f64>() - 0.5).collect();
    let nx = norm(&x);
    x.iter_mut().for_each(|v| *v /= nx);
    let mut sx = vec![0.0; n];
    let mut ssx = vec![0.0; n];
    let mut residual = f64::INFINITY;
    for it in 1..=max_iter {
        matvec(a, n, &x, &mut sx);
        let lambda: f64 = x.iter().zip(&sx).map(|(p, q)| p * q).sum();
        residual = sx
            .iter()
            .zip(&x)
            .map(|(p, q)| (p - lambda * q).powi(2))
            .sum::<f64>()
            .sqrt();
        if residual <= tol * lambda.abs() && lambda != 0.0 {
            return Ok(EigenResult {
                value: lambda,
                vector: x,
                residual,
                iterations: it,
            });
        }
        matvec(a, n, &sx, &mut ssx);
        let nn = norm(&ssx);
        if nn == 0.0 {
            break;
        }
        x.iter_mut().zip(&ssx).for_each(|(p, q)| *p = q / nn);
    }
    Err(Error::Convergence {
        iterations: max_iter,
        residual,
    })
}

/// Full spectrum of a symmetric matrix, sorted by descending magnitude.
pub fn spectrum(s: &Tensor) -> Result<Vec<f64>> {
    let (n, m) = s.dims2()?;
    if n != m {
        return Err(Error::Dimension(format!("spectrum needs a square matrix, got {:?}", s.shape())));
    }
    let mat = nalgebra::DMatrix::from_row_slice(n, n, s.data());
    let mut values: Vec<f64> = mat.symmetric_eigen().eigenvalues.iter().copied().collect();
    values.sort_by(|a, b| b.abs().total_cmp(&a.abs()));
    Ok(values)
}

/// Pairwise `|cos|` between dominant eigenvectors.
pub fn shared_direction_similarity(results: &[EigenResult]) -> Result<Vec<Vec<f64>>> {
    let Some(first) = results.first() else {
        return Ok(Vec::new());
    };
    let d = first.vector.len();
    if let Some(r) = results.iter().find(|r| r.vector.len() != d) {
        return Err(Error::Dimension(format!(
            "eigenvectors of length {} and {d}",
            r.vector.len()
        )));
    }
    Ok(results
        .iter()
        .map(|a| {
            results
                .iter()
                .map(|b| cosine(&a.vector, &b.vector).map_or(0.0, f64::abs))
                .collect()
        })
        .collect())
}

/// Cosine similarity, `None` when either vector is zero.
pub fn cosine(a: &[f64], b: &[f64]) -> Option<f64> {
    let (na, nb) = (norm(a), norm(b));
    if na == 0.0 || nb == 0.0 {
        return None;
    }
    Some(a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>() / (na * nb))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RegimeStat {
    /// `cos(a, SiLU(a))` for the gate pre-activation vector `a`.
    pub cosine: f64,
    /// `‖SiLU(a)‖ / ‖a‖`
    pub norm_ratio: f64,
}

/// Compare a gate pre-activation vector with its SiLU image. `None` when
/// the pre-activation is zero.
pub fn silu_regime(pre: &[f64]) -> Option<RegimeStat> {
    let post: Vec<f64> = pre.iter().map(|&a| a * sigmoid(a)).collect();
    let n_pre = norm(pre);
    if n_pre == 0.0 {
        return None;
    }
    Some(RegimeStat {
        cosine: cosine(pre, &post).unwrap_or(0.0),
        norm_ratio: norm(&post) / n_pre,
    })
}

/// Per-token SiLU regime of a SwiGLU block over normalized inputs
/// `[N × d]`. Tokens with a zero pre-activation are `None`.
pub fn silu_regime_stats(block: &BlockParams<Tensor>, inputs: &Tensor) -> Result<Vec<Option<RegimeStat>>> {
    let (w_gate, _, _) = swiglu_weights(block)?;
    let pre = inputs.matmul(&w_gate.transpose()?)?;
    let (rows, _) = pre.dims2()?;
    Ok((0..rows).map(|t| silu_regime(pre.row(t))).collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn rank_one_example() {
        let q = quadratic_form_from(&t(&[1, 2], &[1.0, 0.0]), &t(&[1, 2], &[0.0, 1.0]), &t(&[2, 1], &[2.0, 0.0]), 0).unwrap();
        assert_eq!(q.u.data(), &[0.0, 2.0, 0.0, 0.0]);
        assert_eq!(q.s.data(), &[0.0, 1.0, 1.0, 0.0]);
        assert_eq!(q.frobenius, 2.0);
        let zero = quadratic_form_from(&t(&[1, 2], &[1.0, 0.0]), &t(&[1, 2], &[0.0, 1.0]), &t(&[2, 1], &[2.0, 0.0]), 1).unwrap();
        assert!(zero.u.data().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn diagonal_eigenpairs() {
        let r = top_eigenpair(&t(&[2, 2], &[5.0, 0.0, 0.0, 1.0]), EIGEN_TOL, EIGEN_MAX_ITER).unwrap();
        assert!((r.value - 5.0).abs() < 1e-12);
        assert!((r.vector[0].abs() - 1.0).abs() < 1e-10);
        let r = top_eigenpair(&t(&[2, 2], &[-5.0, 0.0, 0.0, 1.0]), EIGEN_TOL, EIGEN_MAX_ITER).unwrap();
        assert!((r.value + 5.0).abs() < 1e-12);
    }

    #[test]
    fn opposite_sign_tie_does_not_converge() {
        let s = t(&[2, 2], &[5.0, 0.0, 0.0, -5.0]);
        assert!(matches!(top_eigenpair(&s, EIGEN_TOL, 200), Err(Error::Convergence { .. })));
    }

    #[test]
    fn asymmetric_input_is_rejected() {
        let s = t(&[2, 2], &[1.0, 2.0, 0.0, 1.0]);
        assert!(matches!(top_eigenpair(&s, EIGEN_TOL, 10), Err(Error::Contract(_))));
    }

    #[test]
    fn similarity_examples() {
        let e = |v: Vec<f64>| EigenResult {
            value: 1.0,
            vector: v,
            residual: 0.0,
            iterations: 1,
        };
        let m = shared_direction_similarity(&[e(vec![1.0, 0.0]), e(vec![0.0, 1.0]), e(vec![-1.0, 0.0])]).unwrap();
        assert_eq!(m[0][0], 1.0);
        assert_eq!(m[0][1], 0.0);
        assert_eq!(m[0][2], 1.0);
    }

    #[test]
    fn silu_regime_examples() {
        let r = silu_regime(&[10.0; 4]).unwrap();
        assert!((r.cosine - 1.0).abs() < 1e-12);
        assert!((r.norm_ratio - 0.999_954_602_131_297_6).abs() < 1e-12);
        let r = silu_regime(&[-40.0; 3]).unwrap();
        assert!(r.norm_ratio < 1e-15);
        let r = silu_regime(&[10.0, -10.0]).unwrap();
        assert!(r.cosine < 1.0 - 1e-3);
        assert!(silu_regime(&[0.0, 0.0]).is_none());
    }
}
