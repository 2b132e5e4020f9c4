use rand::Rng;

use crate::error::{Error, Result};
use crate::nn::{Builder, Conv2d, Ctx, ParamId};
use crate::tensor::{Tensor, Var};

/// `exp(−‖q − kv‖² / (2σ²))`, evaluated directly.
pub fn gaussian_similarity(q: &[f64], kv: &[f64], sigma: f64) -> Result<f64> {
    if q.len() != kv.len() {
        return Err(Error::dim(format!(
            "gaussian_similarity: lengths {} and {} differ",
            q.len(),
            kv.len()
        )));
    }
    if !(sigma > 0.0) {
        return Err(Error::config(format!(
            "sigma must be positive, got {sigma}"
        )));
    }
    let d2: f64 = q.iter().zip(kv).map(|(a, b)| (a - b) * (a - b)).sum();
    Ok((-d2 / (2.0 * sigma * sigma)).exp())
}

#[derive(Clone, Debug)]
pub enum Sigma {
    Fixed(f64),
    Learned(ParamId),
}

/// Non-local attention whose affinity is the Gaussian kernel between query
/// and key positions, followed by a residual add.
#[derive(Clone, Debug)]
pub struct GmwNonLocalBlock {
    pub label: String,
    pub channels: usize,
    pub conv_q: Conv2d,
    pub conv_k: Conv2d,
    pub conv_v: Conv2d,
    pub sigma: Sigma,
}

impl GmwNonLocalBlock {
    pub fn new<R: Rng>(
        b: &mut Builder<'_, R>,
        name: &str,
        channels: usize,
        sigma: f64,
        learn_sigma: bool,
    ) -> Result<Self> {
        if !(sigma > 0.0) {
            return Err(Error::config(format!(
                "sigma must be positive, got {sigma}"
            )));
        }
        let inner = (channels / 2).max(1);
        Ok(b.scope(name, |b| Self {
            label: name.to_string(),
            channels,
            conv_q: Conv2d::new(b, "q", channels, inner, 1, 1, 0),
            conv_k: Conv2d::new(b, "k", channels, inner, 1, 1, 0),
            conv_v: Conv2d::new(b, "v", channels, channels, 1, 1, 0),
            sigma: if learn_sigma {
                Sigma::Learned(b.tensor("sigma", Tensor::scalar(sigma)))
            } else {
                Sigma::Fixed(sigma)
            },
        }))
    }

    pub fn sigma_var(&self, ctx: &mut Ctx<'_>) -> Var {
        match self.sigma {
            Sigma::Fixed(s) => ctx.input(Tensor::scalar(s)),
            Sigma::Learned(id) => ctx.param(id),
        }
    }

    /// `A[(i,j),(m,n)] = G(F_q^{(i,j)}, F_k^{(m,n)})`, shape `[b, h_q·w_q, h_k·w_k]`.
    pub fn attention_matrix(ctx: &mut Ctx<'_>, fq: Var, fk: Var, sigma: Var) -> Result<Var> {
        ctx.tape.gaussian_affinity(fq, fk, sigma)
    }

    /// `softmax(A)·F_v + F`, softmax taken over key positions.
    pub fn forward(&self, ctx: &mut Ctx<'_>, f: Var) -> Result<Var> {
        let shape = ctx.tape.shape(f).to_vec();
        let (b, c, n) = (shape[0], shape[1], shape[2] * shape[3]);
        let q = self.conv_q.forward(ctx, f)?;
        let k = self.conv_k.forward(ctx, f)?;
        let v = self.conv_v.forward(ctx, f)?;
        let sigma = self.sigma_var(ctx);
        let a = Self::attention_matrix(ctx, q, k, sigma)?;
        let weights = ctx.tape.softmax(a, 2)?;
        if ctx.is_recording() {
            ctx.record(format!("{}/softmax", self.label), weights);
        }
        let vm = ctx.tape.reshape(v, &[b, c, n])?;
        // out[c, i] = Σ_j softmax(A)[i, j] · v[c, j]
        let attended = ctx.tape.bmm(vm, weights, false, true)?;
        let attended = ctx.tape.reshape(attended, &shape)?;
        ctx.tape.add(attended, f)
    }
}
