use crate::error::{Error, Result};
use crate::nn::{ParamGrads, ParamStore};

/// AdamW hyperparameters.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamW {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 1e-2,
        }
    }
}

/// First and second moments, one buffer per parameter, plus the step count.
#[derive(Clone, Debug, PartialEq)]
pub struct Moments {
    pub step: u64,
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
}

impl Moments {
    pub fn zeros(params: &ParamStore) -> Self {
        let z: Vec<Vec<f64>> = params.iter().map(|p| vec![0.0; p.value.numel()]).collect();
        Self {
            step: 0,
            m: z.clone(),
            v: z,
        }
    }
}

/// One AdamW update. Decay is decoupled: `θ ← θ − lr·wd·θ` first, then the
/// bias-corrected adaptive step.
pub fn adamw_step(
    params: &mut ParamStore,
    grads: &ParamGrads,
    moments: &mut Moments,
    lr: f64,
    hp: &AdamW,
) -> Result<()> {
    if grads.0.len() != params.len() || moments.m.len() != params.len() {
        return Err(Error::dim(format!(
            "adamw_step: {} parameters, {} gradients, {} moment buffers",
            params.len(),
            grads.0.len(),
            moments.m.len()
        )));
    }
    moments.step += 1;
    let t = moments.step as i32;
    let c1 = 1.0 - hp.beta1.powi(t);
    let c2 = 1.0 - hp.beta2.powi(t);
    for (((p, g), m), v) in params
        .iter_mut()
        .zip(&grads.0)
        .zip(&mut moments.m)
        .zip(&mut moments.v)
    {
        let data = p.value.data_mut();
        if g.len() != data.len() {
            return Err(Error::dim(format!(
                "gradient length mismatch for {}",
                p.name
            )));
        }
        for i in 0..data.len() {
            data[i] -= lr * hp.weight_decay * data[i];
            m[i] = hp.beta1 * m[i] + (1.0 - hp.beta1) * g[i];
            v[i] = hp.beta2 * v[i] + (1.0 - hp.beta2) * g[i] * g[i];
            let m_hat = m[i] / c1;
            let v_hat = v[i] / c2;
            data[i] -= lr * m_hat / (v_hat.sqrt() + hp.eps);
        }
    }
    Ok(())
}

/// `base_lr · γ^(number of milestones ≤ epoch)`, epochs counted from zero.
pub fn multistep_lr(epoch: usize, base_lr: f64, milestones: &[usize], gamma: f64) -> f64 {
    let passed = milestones.iter().filter(|&&m| m <= epoch).count();
    base_lr * gamma.powi(passed as i32)
}
