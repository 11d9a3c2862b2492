use super::TrainConfig;
use crate::error::{Error, Result};
use crate::model::Parameters;

/// AdamW moments, one buffer per parameter tensor in canonical order.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
    pub step: u64,
}

impl OptimizerState {
    pub fn new(params: &Parameters) -> Self {
        let mut m = Vec::new();
        params.map(|_, t| m.push(vec![0.0; t.numel()]));
        OptimizerState {
            v: m.clone(),
            m,
            step: 0,
        }
    }
}

pub fn global_norm(grads: &[Vec<f64>]) -> f64 {
    grads
        .iter()
        .flat_map(|g| g.iter())
        .map(|x| x * x)
        .sum::<f64>()
        .sqrt()
}

/// Scale every gradient by `cap/‖g‖` when the global norm exceeds `cap`.
/// Returns the factor applied.
pub fn clip_global_norm(grads: &mut [Vec<f64>], cap: f64) -> f64 {
    let norm = global_norm(grads);
    if norm <= cap {
        return 1.0;
    }
    let scale = cap / norm;
    for x in grads.iter_mut().flat_map(|g| g.iter_mut()) {
        *x *= scale;
    }
    scale
}

/// One decoupled-decay Adam update of a flat buffer; `step` is the 1-based
/// count used for bias correction.
#[allow(clippy::too_many_arguments)]
pub fn adamw_update(
    p: &mut [f64],
    g: &[f64],
    m: &mut [f64],
    v: &mut [f64],
    step: u64,
    lr: f64,
    betas: (f64, f64),
    eps: f64,
    weight_decay: f64,
) {
    let (b1, b2) = betas;
    let c1 = 1.0 - b1.powf(step as f64);
    let c2 = 1.0 - b2.powf(step as f64);
    for i in 0..p.len() {
        m[i] = b1 * m[i] + (1.0 - b1) * g[i];
        v[i] = b2 * v[i] + (1.0 - b2) * g[i] * g[i];
        let m_hat = m[i] / c1;
        let v_hat = v[i] / c2;
        p[i] -= lr * (m_hat / (v_hat.sqrt() + eps) + weight_decay * p[i]);
    }
}

pub fn adamw_step(
    params: &mut Parameters,
    grads: &[Vec<f64>],
    state: &mut OptimizerState,
    lr: f64,
    cfg: &TrainConfig,
) -> Result<()> {
    let mut fields = params.fields_mut();
    if fields.len() != grads.len() || fields.len() != state.m.len() {
        return Err(Error::Dimension(format!(
            "{} parameters, {} gradients, {} moment buffers",
            fields.len(),
            grads.len(),
            state.m.len()
        )));
    }
    state.step += 1;
    for (i, (name, p)) in fields.iter_mut().enumerate() {
        let data = p.data_mut();
        if data.len() != grads[i].len() || data.len() != state.m[i].len() {
            return Err(Error::Dimension(format!(
                "{name}: {} values, gradient of {}",
                data.len(),
                grads[i].len()
            )));
        }
        adamw_update(
            data,
            &grads[i],
            &mut state.m[i],
            &mut state.v[i],
            state.step,
            lr,
            cfg.betas,
            cfg.eps,
            cfg.weight_decay,
        );
    }
    Ok(())
}
