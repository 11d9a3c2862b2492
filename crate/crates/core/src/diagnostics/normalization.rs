use super::quadratic::cosine;
use crate::error::{Error, Result};
use crate::model::{dynamic_tanh, rmsnorm, Norm};
use crate::tensor::Tensor;

/// Apply a stored normalizer row-wise to `h: [N × d]`.
pub fn normalize(h: &Tensor, norm: &Norm<Tensor>) -> Result<Tensor> {
    match norm {
        Norm::Rms { scale } => rmsnorm(h, scale),
        Norm::DynTanh { alpha, gamma, beta } => dynamic_tanh(h, alpha.data()[0], gamma, beta),
    }
}

fn unit_rms(h: &[f64]) -> Result<Vec<f64>> {
    let d = h.len();
    let x = Tensor::new(vec![1, d], h.to_vec())?;
    Ok(rmsnorm(&x, &Tensor::ones(&[d]))?.into_data())
}

/// Share of `‖h̃‖²` carried by the channels in `channels`, for
/// `h̃ = RMSNorm(h)`.
pub fn normalized_sparsity(h: &[f64], channels: &[usize]) -> Result<f64> {
    if channels.is_empty() {
        return Err(Error::Dimension("spike channel set is empty".into()));
    }
    if let Some(&c) = channels.iter().find(|&&c| c >= h.len()) {
        return Err(Error::Dimension(format!("channel {c} out of range for width {}", h.len())));
    }
    let y = unit_rms(h)?;
    let total: f64 = y.iter().map(|v| v * v).sum();
    if total == 0.0 {
        return Ok(0.0);
    }
    let mut seen = channels.to_vec();
    seen.sort_unstable();
    seen.dedup();
    Ok(seen.iter().map(|&c| y[c] * y[c]).sum::<f64>() / total)
}

/// Whether every coordinate of `RMSNorm(h)` (unit scale) lies within
/// `√d + 1e-9`. A `false` here means the normalization is broken.
pub fn rmsnorm_bound_check(h: &[f64]) -> Result<bool> {
    let bound = (h.len() as f64).sqrt() + 1e-9;
    Ok(unit_rms(h)?.iter().all(|v| v.abs() <= bound))
}

/// Pairwise cosines between hidden vectors, optionally after a normalizer.
pub fn spike_cosine_matrix(states: &[Vec<f64>], normalizer: Option<&Norm<Tensor>>) -> Result<Vec<Vec<f64>>> {
    if states.len() < 2 {
        return Err(Error::Dimension(format!("need at least 2 vectors, got {}", states.len())));
    }
    let d = states[0].len();
    if states.iter().any(|s| s.len() != d) {
        return Err(Error::Dimension("vectors differ in length".into()));
    }
    let rows: Vec<Vec<f64>> = match normalizer {
        Some(n) => {
            let flat: Vec<f64> = states.iter().flatten().copied().collect();
            let y = normalize(&Tensor::new(vec![states.len(), d], flat)?, n)?;
            (0..states.len()).map(|r| y.row(r).to_vec()).collect()
        }
        None => states.to_vec(),
    };
    Ok(rows
        .iter()
        .map(|a| rows.iter().map(|b| cosine(a, b).unwrap_or(0.0)).collect())
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sparsity_examples() {
        let d = 16;
        let mut h = vec![0.0; d];
        h[7] = (d as f64).sqrt();
        assert!((normalized_sparsity(&h, &[7]).unwrap() - 1.0).abs() < 1e-12);
        assert!((normalized_sparsity(&[1.0; 8], &[0, 3]).unwrap() - 0.25).abs() < 1e-12);

        let mut h = vec![1.0; 4096];
        h[7] += 1000.0;
        let s = normalized_sparsity(&h, &[7]).unwrap();
        assert!((s - 1001.0f64.powi(2) / (1001.0f64.powi(2) + 4095.0)).abs() < 1e-9);
        assert!((s - 0.99593).abs() < 5e-6);

        let mut h = vec![1.0; 4096];
        h[7] = 100.0;
        assert!((normalized_sparsity(&h, &[7]).unwrap() - 1e4 / (1e4 + 4095.0)).abs() < 1e-9);
    }

    #[test]
    fn bound_examples() {
        let mut one_hot = vec![0.0; 9];
        one_hot[4] = -2.5;
        assert!(rmsnorm_bound_check(&one_hot).unwrap());
        let y = unit_rms(&one_hot).unwrap();
        assert!((y[4].abs() - 3.0).abs() < 1e-12);
        let mut big = vec![0.3; 32];
        big[0] = 1e6;
        assert!(rmsnorm_bound_check(&big).unwrap());
    }

    #[test]
    fn cosine_matrix_examples() {
        let same = vec![vec![1.0, 2.0, 3.0]; 3];
        let m = spike_cosine_matrix(&same, None).unwrap();
        assert!(m.iter().flatten().all(|&c| (c - 1.0).abs() < 1e-12));
        let m = spike_cosine_matrix(&[vec![1e-3, 0.0], vec![0.0, 1e-3]], None).unwrap();
        assert_eq!(m[0][1], 0.0);
        assert!(spike_cosine_matrix(&same[..1], None).is_err());
    }
}
