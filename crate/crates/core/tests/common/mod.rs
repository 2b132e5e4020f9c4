//! Helpers and scalar oracles shared by the integration tests.
#![allow(dead_code)]

use dmagaze::attention::{gaussian_similarity, CbamBlock, GmwNonLocalBlock};
use dmagaze::nn::{Builder, Ctx, ParamStore};
use dmagaze::train::AdamW;
use dmagaze::{Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub fn rand(shape: &[usize], seed: u64) -> Tensor {
    Tensor::uniform(shape, -1.0, 1.0, &mut ChaCha8Rng::seed_from_u64(seed))
}

pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

pub fn build<T>(seed: u64, f: impl FnOnce(&mut Builder<'_, ChaCha8Rng>) -> T) -> (T, ParamStore) {
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let m = f(&mut Builder::new(&mut store, &mut rng));
    (m, store)
}

/// Gives every bias a random value.
pub fn randomise_biases(store: &mut ParamStore, seed: u64) {
    for (k, p) in store.iter_mut().enumerate() {
        if p.name.ends_with("bias") {
            p.value = rand(p.value.shape(), seed + k as u64);
        }
    }
}

pub fn run(store: &ParamStore, x: &Tensor, f: impl FnOnce(&mut Ctx<'_>, Var) -> Var) -> Tensor {
    let mut ctx = Ctx::inference(store);
    let v = ctx.input(x.clone());
    let y = f(&mut ctx, v);
    ctx.value(y).clone()
}

pub fn cbam(seed: u64, c: usize) -> (CbamBlock, ParamStore) {
    let (b, mut s) = build(seed, |b| CbamBlock::new(b, "cbam", c, 2));
    randomise_biases(&mut s, seed);
    (b, s)
}

/// Step-by-step channel attention for a single sample.
pub fn channel_oracle(block: &CbamBlock, s: &ParamStore, x: &Tensor) -> Vec<f64> {
    let [_, c, h, w] = x.shape().try_into().unwrap();
    let plane = h * w;
    let d = x.data();
    let avg: Vec<f64> = (0..c)
        .map(|ch| d[ch * plane..(ch + 1) * plane].iter().sum::<f64>() / plane as f64)
        .collect();
    let max: Vec<f64> = (0..c)
        .map(|ch| {
            d[ch * plane..(ch + 1) * plane]
                .iter()
                .copied()
                .fold(f64::NEG_INFINITY, f64::max)
        })
        .collect();
    let (w1, b1) = (
        s.get(block.mlp.hidden.weight).data(),
        s.get(block.mlp.hidden.bias).data(),
    );
    let (w2, b2) = (
        s.get(block.mlp.output.weight).data(),
        s.get(block.mlp.output.bias).data(),
    );
    let hid = b1.len();
    let mlp = |v: &[f64]| -> Vec<f64> {
        let hdn: Vec<f64> = (0..hid)
            .map(|j| (b1[j] + (0..c).map(|i| w1[j * c + i] * v[i]).sum::<f64>()).max(0.0))
            .collect();
        (0..c)
            .map(|o| b2[o] + (0..hid).map(|j| w2[o * hid + j] * hdn[j]).sum::<f64>())
            .collect()
    };
    let (pa, pm) = (mlp(&avg), mlp(&max));
    (0..c).map(|i| sigmoid(pa[i] + pm[i])).collect()
}

/// Direct spatial attention for a single sample.
pub fn spatial_oracle(block: &CbamBlock, s: &ParamStore, x: &Tensor) -> Vec<f64> {
    let [_, c, h, w] = x.shape().try_into().unwrap();
    let d = x.data();
    let at = |ch: usize, y: usize, xx: usize| d[(ch * h + y) * w + xx];
    let mean = |y, xx| (0..c).map(|ch| at(ch, y, xx)).sum::<f64>() / c as f64;
    let max = |y, xx| {
        (0..c)
            .map(|ch| at(ch, y, xx))
            .fold(f64::NEG_INFINITY, f64::max)
    };
    let k = CbamBlock::SPATIAL_KERNEL;
    let half = (k / 2) as isize;
    let wt = s.get(block.spatial.weight).data();
    let bias = s.get(block.spatial.bias).data()[0];
    let mut out = Vec::with_capacity(h * w);
    for i in 0..h {
        for j in 0..w {
            let mut acc = bias;
            for u in 0..k {
                for v in 0..k {
                    let (y, xx) = (
                        i as isize + u as isize - half,
                        j as isize + v as isize - half,
                    );
                    if y < 0 || xx < 0 || y >= h as isize || xx >= w as isize {
                        continue;
                    }
                    let (y, xx) = (y as usize, xx as usize);
                    acc += wt[u * k + v] * mean(y, xx) + wt[k * k + u * k + v] * max(y, xx);
                }
            }
            out.push(sigmoid(acc));
        }
    }
    out
}

pub fn assert_close(a: &[f64], b: &[f64], tol: f64) {
    assert_eq!(a.len(), b.len());
    for (i, (x, y)) in a.iter().zip(b).enumerate() {
        assert!((x - y).abs() < tol, "index {i}: {x} vs {y}");
    }
}

/// `A[n, i, j]` from explicit pairs of position vectors.
pub fn pairwise_oracle(q: &Tensor, k: &Tensor, sigma: f64) -> Vec<f64> {
    let [b, c, hq, wq] = q.shape().try_into().unwrap();
    let [_, _, hk, wk] = k.shape().try_into().unwrap();
    let (nq, nk) = (hq * wq, hk * wk);
    let mut out = Vec::new();
    for n in 0..b {
        for i in 0..nq {
            let qv: Vec<f64> = (0..c).map(|ch| q.data()[(n * c + ch) * nq + i]).collect();
            for j in 0..nk {
                let kv: Vec<f64> = (0..c).map(|ch| k.data()[(n * c + ch) * nk + j]).collect();
                out.push(gaussian_similarity(&qv, &kv, sigma).unwrap());
            }
        }
    }
    out
}

pub fn affinity(q: &Tensor, k: &Tensor, sigma: f64) -> Tensor {
    let s = ParamStore::new();
    let mut ctx = Ctx::inference(&s);
    let (vq, vk, vs) = (
        ctx.input(q.clone()),
        ctx.input(k.clone()),
        ctx.input(Tensor::scalar(sigma)),
    );
    let a = GmwNonLocalBlock::attention_matrix(&mut ctx, vq, vk, vs).unwrap();
    ctx.value(a).clone()
}

/// Sliding-window cross-correlation, one output element at a time.
pub fn conv_oracle(x: &Tensor, w: &Tensor, b: &Tensor, stride: usize, pad: usize) -> Tensor {
    let [n, ci, h, wd] = x.shape().try_into().unwrap();
    let [co, _, kh, kw] = w.shape().try_into().unwrap();
    let oh = (h + 2 * pad - kh) / stride + 1;
    let ow = (wd + 2 * pad - kw) / stride + 1;
    let (xd, wdat) = (x.data(), w.data());
    let mut out = Tensor::zeros(&[n, co, oh, ow]);
    let od = out.data_mut();
    for s in 0..n {
        for o in 0..co {
            for i in 0..oh {
                for j in 0..ow {
                    let mut acc = b.data()[o];
                    for c in 0..ci {
                        for u in 0..kh {
                            for v in 0..kw {
                                let y = (i * stride + u) as isize - pad as isize;
                                let xx = (j * stride + v) as isize - pad as isize;
                                if y < 0 || xx < 0 || y >= h as isize || xx >= wd as isize {
                                    continue;
                                }
                                acc += xd[((s * ci + c) * h + y as usize) * wd + xx as usize]
                                    * wdat[((o * ci + c) * kh + u) * kw + v];
                            }
                        }
                    }
                    od[((s * co + o) * oh + i) * ow + j] = acc;
                }
            }
        }
    }
    out
}

pub fn gmw(seed: u64, c: usize, sigma: f64) -> (GmwNonLocalBlock, ParamStore) {
    let (b, mut s) = build(seed, |b| {
        GmwNonLocalBlock::new(b, "gmw", c, sigma, false).unwrap()
    });
    randomise_biases(&mut s, seed);
    (b, s)
}

/// Mean squared difference, one element at a time.
pub fn mse_loop(a: &Tensor, b: &Tensor) -> f64 {
    let mut s = 0.0;
    for i in 0..a.numel() {
        let d = a.data()[i] - b.data()[i];
        s += d * d;
    }
    s / a.numel() as f64
}

/// Scalar AdamW state over a flat parameter vector.
pub struct AdamWReference {
    pub theta: Vec<f64>,
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub t: i32,
}

impl AdamWReference {
    pub fn new(theta: Vec<f64>) -> Self {
        let n = theta.len();
        Self {
            theta,
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        }
    }

    #[allow(clippy::needless_range_loop)]
    pub fn step(&mut self, g: &[f64], lr: f64, hp: &AdamW) {
        self.t += 1;
        for i in 0..self.theta.len() {
            self.theta[i] *= 1.0 - lr * hp.weight_decay;
            self.m[i] = hp.beta1 * self.m[i] + (1.0 - hp.beta1) * g[i];
            self.v[i] = hp.beta2 * self.v[i] + (1.0 - hp.beta2) * g[i] * g[i];
            let mh = self.m[i] / (1.0 - hp.beta1.powi(self.t));
            let vh = self.v[i] / (1.0 - hp.beta2.powi(self.t));
            self.theta[i] -= lr * mh / (vh.sqrt() + hp.eps);
        }
    }
}
