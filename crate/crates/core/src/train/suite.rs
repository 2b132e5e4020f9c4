//! Finite-difference verification of every differentiable component.
//!
//! Each check builds its own inputs and parameters from a seed, reduces the
//! output to a scalar through a fixed random weighting, and compares the
//! tape's gradients against central differences.

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::attention::{CbamBlock, GmwNonLocalBlock, MsGlamBlock, MsGlamParams};
use crate::config::ModelConfig;
use crate::data::{Batch, GazeSample};
use crate::error::{Error, Result};
use crate::gradcheck::{finite_diff_check_inputs, finite_diff_check_model};
use crate::losses;
use crate::model::DmaGaze;
use crate::nn::{Builder, Conv2d, ConvTranspose2d, Ctx, Linear, Mlp, ParamStore};
use crate::tensor::{Tape, Tensor, Var};

/// Small enough that a ReLU or max-pool kink is almost never straddled,
/// large enough that cancellation stays near 1e-10.
pub const SUITE_EPS: f64 = 1e-6;
pub const COMPONENT_TOLERANCE: f64 = 1e-5;
pub const MODEL_TOLERANCE: f64 = 1e-4;
pub const SUITE_SEEDS: std::ops::Range<u64> = 0..10;
pub const MODULES: [&str; 5] = ["tensor", "layers", "attention", "losses", "model"];

/// Coordinates sampled per seed for checks with many parameters.
const SAMPLED: usize = 400;
const MODEL_SAMPLED: usize = 200;

#[derive(Clone, Debug, PartialEq)]
pub struct CheckResult {
    pub module: &'static str,
    pub name: &'static str,
    pub seed: u64,
    pub max_rel_error: f64,
    pub tolerance: f64,
    pub seconds: f64,
}

impl CheckResult {
    pub fn passed(&self) -> bool {
        self.max_rel_error < self.tolerance
    }
}

struct Check {
    module: &'static str,
    name: &'static str,
    tolerance: f64,
    run: fn(u64) -> Result<f64>,
}

fn rng(seed: u64, salt: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ salt)
}

fn rand_tensor(shape: &[usize], r: &mut ChaCha8Rng) -> Tensor {
    Tensor::uniform(shape, -1.0, 1.0, r)
}

/// `Σ w ⊙ y` with weights fixed by the shape of `y`.
fn probe(tape: &mut Tape, y: Var) -> Result<Var> {
    let shape = tape.shape(y).to_vec();
    let salt = shape
        .iter()
        .fold(17u64, |h, &e| h.wrapping_mul(31).wrapping_add(e as u64));
    let w = rand_tensor(&shape, &mut rng(salt, 0xABCD));
    let w = tape.constant(w);
    let p = tape.mul(y, w)?;
    Ok(tape.sum(p))
}

fn probe_all(tape: &mut Tape, ys: &[Var]) -> Result<Var> {
    let mut total = probe(tape, ys[0])?;
    for &y in &ys[1..] {
        let p = probe(tape, y)?;
        total = tape.add(total, p)?;
    }
    Ok(total)
}

fn inputs(seed: u64, shapes: &[&[usize]]) -> Vec<Tensor> {
    let mut r = rng(seed, 1);
    shapes.iter().map(|s| rand_tensor(s, &mut r)).collect()
}

fn tape_check(
    seed: u64,
    shapes: &[&[usize]],
    f: impl Fn(&mut Tape, &[Var]) -> Result<Var>,
) -> Result<f64> {
    finite_diff_check_inputs(f, &inputs(seed, shapes), SUITE_EPS, Some((SAMPLED, seed)))
}

/// Builds a store with `build`, then redraws biases and mask logits from
/// U(−0.5, 0.5).
fn store_for<T>(
    seed: u64,
    build: impl FnOnce(&mut Builder<'_, ChaCha8Rng>) -> T,
) -> (T, ParamStore) {
    let mut store = ParamStore::new();
    let mut r = rng(seed, 2);
    let module = {
        let mut b = Builder::new(&mut store, &mut r);
        build(&mut b)
    };
    jitter(&mut store, seed);
    (module, store)
}

fn jitter(store: &mut ParamStore, seed: u64) {
    let mut r = rng(seed, 3);
    for p in store.iter_mut() {
        if p.name.ends_with("bias") || p.name == "mask" {
            for v in p.value.data_mut() {
                *v = r.gen_range(-0.5..0.5);
            }
        }
    }
}

fn model_check(
    seed: u64,
    params: &ParamStore,
    shapes: &[&[usize]],
    f: impl Fn(&mut Ctx<'_>, &[Var]) -> Result<Var>,
) -> Result<f64> {
    finite_diff_check_model(
        f,
        params,
        &inputs(seed, shapes),
        SUITE_EPS,
        Some((SAMPLED, seed)),
    )
}

fn elementwise(seed: u64) -> Result<f64> {
    tape_check(
        seed,
        &[&[2, 3, 4, 5], &[1, 3, 1, 5], &[2, 3, 4, 5]],
        |t, v| {
            let a = t.add(v[0], v[1])?;
            let s = t.sub(v[2], v[1])?;
            let m = t.mul(v[0], v[1])?;
            let sg = t.sigmoid(v[0]);
            let e = t.exp(v[2]);
            let r = t.relu(v[0]);
            let ab = t.abs(v[2]);
            let af = t.affine(v[0], -1.5, 0.25);
            probe_all(t, &[a, s, m, sg, e, r, ab, af])
        },
    )
}

fn matmul(seed: u64) -> Result<f64> {
    tape_check(seed, &[&[3, 4], &[4, 5], &[5, 3]], |t, v| {
        let ab = t.matmul_t(v[0], v[1], false, false)?;
        let both = t.matmul_t(v[0], v[2], true, true)?;
        let tb = t.matmul_t(v[1], v[1], false, true)?;
        let ta = t.matmul_t(v[0], v[0], true, false)?;
        probe_all(t, &[ab, ta, tb, both])
    })
}

fn bmm(seed: u64) -> Result<f64> {
    tape_check(seed, &[&[2, 3, 4], &[2, 4, 5], &[2, 5, 3]], |t, v| {
        let ab = t.bmm(v[0], v[1], false, false)?;
        let tt = t.bmm(v[2], v[1], true, true)?;
        let ta = t.bmm(v[1], v[1], true, false)?;
        let tb = t.bmm(v[0], v[0], false, true)?;
        probe_all(t, &[ab, tt, ta, tb])
    })
}

fn softmax(seed: u64) -> Result<f64> {
    tape_check(seed, &[&[2, 3, 4]], |t, v| {
        let x = t.scale(v[0], 3.0);
        let outs = (0..3)
            .map(|axis| t.softmax(x, axis))
            .collect::<Result<Vec<_>>>()?;
        probe_all(t, &outs)
    })
}

fn shape_ops(seed: u64) -> Result<f64> {
    tape_check(seed, &[&[2, 4, 3, 3], &[2, 2, 3, 3]], |t, v| {
        let c = t.concat(&[v[0], v[1]], 1)?;
        let n = t.narrow(c, 1, 1, 4)?;
        let parts = t.group_split(n, 2)?;
        let r = t.reshape(parts[1], &[2, 18])?;
        let c0 = t.concat(&[v[1], v[1]], 0)?;
        let s = t.sum(v[0]);
        let m = t.mean(c0);
        probe_all(t, &[n, parts[0], r, c0, s, m])
    })
}

fn pooling(seed: u64) -> Result<f64> {
    tape_check(seed, &[&[2, 3, 4, 5]], |t, v| {
        let ga = t.global_avg_pool(v[0])?;
        let gm = t.global_max_pool(v[0])?;
        let cm = t.channel_mean(v[0])?;
        let cx = t.channel_max(v[0])?;
        probe_all(t, &[ga, gm, cm, cx])
    })
}

fn conv2d(seed: u64) -> Result<f64> {
    tape_check(
        seed,
        &[&[2, 3, 7, 6], &[4, 3, 3, 3], &[4], &[2, 3, 1, 1], &[2]],
        |t, v| {
            let a = t.conv2d(v[0], v[1], v[2], 1, 1)?;
            let b = t.conv2d(v[0], v[1], v[2], 2, 1)?;
            let c = t.conv2d(v[0], v[1], v[2], 2, 0)?;
            let d = t.conv2d(v[0], v[3], v[4], 1, 0)?;
            probe_all(t, &[a, b, c, d])
        },
    )
}

fn conv_transpose2d(seed: u64) -> Result<f64> {
    tape_check(
        seed,
        &[&[2, 3, 3, 4], &[3, 2, 4, 4], &[2], &[3, 2, 3, 3]],
        |t, v| {
            let a = t.conv_transpose2d(v[0], v[1], v[2], 2, 1)?;
            let b = t.conv_transpose2d(v[0], v[3], v[2], 1, 1)?;
            let c = t.conv_transpose2d(v[0], v[3], v[2], 2, 0)?;
            probe_all(t, &[a, b, c])
        },
    )
}

fn resize(seed: u64) -> Result<f64> {
    tape_check(seed, &[&[2, 2, 4, 5]], |t, v| {
        let up = t.resize_bilinear(v[0], 7, 9)?;
        let down = t.resize_bilinear(v[0], 3, 2)?;
        let same = t.resize_bilinear(v[0], 4, 5)?;
        probe_all(t, &[up, down, same])
    })
}

fn gaussian_affinity(seed: u64) -> Result<f64> {
    let mut xs = inputs(seed, &[&[2, 3, 2, 3], &[2, 3, 3, 2]]);
    xs.push(Tensor::scalar(0.7 + rng(seed, 4).gen_range(0.0..1.0)));
    finite_diff_check_inputs(
        |t, v| {
            let a = t.gaussian_affinity(v[0], v[1], v[2])?;
            let s = t.softmax(a, 2)?;
            probe_all(t, &[a, s])
        },
        &xs,
        SUITE_EPS,
        None,
    )
}

fn complementary_mask(seed: u64) -> Result<f64> {
    let mut xs = inputs(seed, &[&[2, 3, 2, 2]]);
    // Mask values straddle 0.5 on both sides.
    xs.push(Tensor::uniform(
        &[1, 3, 2, 2],
        0.05,
        0.95,
        &mut rng(seed, 5),
    ));
    finite_diff_check_inputs(
        |t, v| {
            let (kept, rest) = t.complementary_mask(v[0], v[1])?;
            probe_all(t, &[kept, rest])
        },
        &xs,
        SUITE_EPS,
        None,
    )
}

fn linear(seed: u64) -> Result<f64> {
    let (layer, store) = store_for(seed, |b| Linear::new(b, "fc", 5, 3));
    model_check(seed, &store, &[&[2, 4, 5]], |ctx, v| {
        let y = layer.forward(ctx, v[0])?;
        probe(&mut ctx.tape, y)
    })
}

fn mlp(seed: u64) -> Result<f64> {
    let (layer, store) = store_for(seed, |b| Mlp::new(b, "mlp", 6, 5, 2));
    model_check(seed, &store, &[&[3, 6]], |ctx, v| {
        let y = layer.forward(ctx, v[0])?;
        probe(&mut ctx.tape, y)
    })
}

fn conv_layer(seed: u64) -> Result<f64> {
    let (layers, store) = store_for(seed, |b| {
        (
            Conv2d::new(b, "a", 3, 4, 3, 2, 1),
            Conv2d::new(b, "b", 4, 2, 7, 1, 3),
        )
    });
    model_check(seed, &store, &[&[2, 3, 8, 6]], |ctx, v| {
        let y = layers.0.forward(ctx, v[0])?;
        let y = layers.1.forward(ctx, y)?;
        probe(&mut ctx.tape, y)
    })
}

fn conv_transpose_layer(seed: u64) -> Result<f64> {
    let (layer, store) = store_for(seed, |b| ConvTranspose2d::new(b, "up", 3, 2, 4, 2, 1));
    model_check(seed, &store, &[&[2, 3, 3, 4]], |ctx, v| {
        let y = layer.forward(ctx, v[0])?;
        probe(&mut ctx.tape, y)
    })
}

fn cbam(seed: u64) -> Result<f64> {
    let (block, store) = store_for(seed, |b| CbamBlock::new(b, "cbam", 8, 2));
    model_check(seed, &store, &[&[2, 8, 4, 4]], |ctx, v| {
        let y = block.forward(ctx, v[0])?;
        probe(&mut ctx.tape, y)
    })
}

fn gmw(seed: u64, learn_sigma: bool) -> Result<f64> {
    let sigma = 0.8 + rng(seed, 6).gen_range(0.0..1.0);
    let (block, store) = store_for(seed, |b| {
        GmwNonLocalBlock::new(b, "gmw", 4, sigma, learn_sigma)
    });
    let block = block?;
    model_check(seed, &store, &[&[2, 4, 3, 4]], |ctx, v| {
        let y = block.forward(ctx, v[0])?;
        probe(&mut ctx.tape, y)
    })
}

fn msglam(seed: u64, learn_sigma: bool) -> Result<f64> {
    let p = MsGlamParams {
        channels: 8,
        groups: 2,
        rounds: 2,
        sigma: 1.0,
        learn_sigma,
        reduction: 2,
    };
    let (block, store) = store_for(seed, |b| MsGlamBlock::new(b, "cascade", p));
    let block = block?;
    model_check(seed, &store, &[&[2, 8, 4, 4]], |ctx, v| {
        let y = block.forward(ctx, v[0])?;
        probe(&mut ctx.tape, y)
    })
}

fn mse(seed: u64) -> Result<f64> {
    tape_check(seed, &[&[2, 3, 4, 5], &[2, 3, 4, 5]], |t, v| {
        losses::mse(t, v[0], v[1])
    })
}

fn recon_losses(seed: u64) -> Result<f64> {
    let (e, r0, r1, r2): (&[usize], &[usize], &[usize], &[usize]) =
        (&[2, 3, 4, 6], &[2, 3, 3, 8], &[2, 3, 2, 8], &[2, 3, 5, 8]);
    tape_check(seed, &[e, e, e, e, r0, r1, r2, r0, r1, r2], |t, v| {
        let l1 = losses::eye_recon_loss(t, v[0], v[1], v[2], v[3])?;
        let l2 = losses::region_recon_loss(t, [v[4], v[5], v[6]], [v[7], v[8], v[9]])?;
        t.add(l1, l2)
    })
}

fn gaze_loss(seed: u64) -> Result<f64> {
    tape_check(seed, &[&[5, 2], &[5, 2]], |t, v| {
        losses::gaze_loss(t, v[0], v[1])
    })
}

fn total_loss(seed: u64) -> Result<f64> {
    tape_check(
        seed,
        &[
            &[3, 2],
            &[3, 2],
            &[2, 3, 2, 2],
            &[2, 3, 2, 2],
            &[2, 4],
            &[2, 4],
        ],
        |t, v| {
            let lg = losses::gaze_loss(t, v[0], v[1])?;
            let l1 = losses::mse(t, v[2], v[3])?;
            let l2 = losses::mse(t, v[4], v[5])?;
            losses::total_loss(t, l1, l2, lg, 0.7, 1.3)
        },
    )
}

fn tiny_config(seed: u64) -> ModelConfig {
    ModelConfig {
        learn_sigma: seed % 2 == 1,
        ..ModelConfig::tiny()
    }
}

fn tiny_model(seed: u64) -> Result<(DmaGaze, ParamStore)> {
    let (model, mut params) = DmaGaze::init(&tiny_config(seed), seed)?;
    jitter(&mut params, seed);
    Ok((model, params))
}

fn face_shape(cfg: &ModelConfig) -> [usize; 4] {
    [2, 3, cfg.face_size[0], cfg.face_size[1]]
}

fn eye_shape(cfg: &ModelConfig) -> [usize; 4] {
    [2, 3, cfg.eye_size[0], cfg.eye_size[1]]
}

fn feature_shape(cfg: &ModelConfig) -> [usize; 4] {
    let (c, h, w) = cfg.feature_shape();
    [2, c, h, w]
}

fn face_encoder(seed: u64) -> Result<f64> {
    let (m, p) = tiny_model(seed)?;
    model_check(seed, &p, &[&face_shape(&m.config)], |ctx, v| {
        let y = m.face_encoder.forward(ctx, v[0])?;
        probe(&mut ctx.tape, y)
    })
}

fn eye_encoder(seed: u64) -> Result<f64> {
    let (m, p) = tiny_model(seed)?;
    let e = eye_shape(&m.config);
    model_check(seed, &p, &[&e, &e], |ctx, v| {
        let y = m.eye_encoder.forward(ctx, v[0], v[1])?;
        probe(&mut ctx.tape, y)
    })
}

fn pose_branch(seed: u64) -> Result<f64> {
    let (m, p) = tiny_model(seed)?;
    model_check(seed, &p, &[&face_shape(&m.config)], |ctx, v| {
        let y = m.pose.forward(ctx, v[0])?;
        probe(&mut ctx.tape, y)
    })
}

fn disentangler(seed: u64) -> Result<f64> {
    let (m, p) = tiny_model(seed)?;
    model_check(seed, &p, &[&feature_shape(&m.config)], |ctx, v| {
        let d = m.disentangle(ctx, v[0])?;
        probe_all(&mut ctx.tape, &[d.f_r, d.f_ir])
    })
}

fn eye_decoder(seed: u64) -> Result<f64> {
    let (m, p) = tiny_model(seed)?;
    model_check(seed, &p, &[&feature_shape(&m.config)], |ctx, v| {
        let ys = m.eye_decoder.forward(ctx, v[0])?;
        probe_all(&mut ctx.tape, &ys)
    })
}

fn region_decoder(seed: u64) -> Result<f64> {
    let (m, p) = tiny_model(seed)?;
    model_check(seed, &p, &[&feature_shape(&m.config)], |ctx, v| {
        let ys = m.region_decoder.forward(ctx, v[0])?;
        probe_all(&mut ctx.tape, &ys)
    })
}

fn gaze_head(seed: u64) -> Result<f64> {
    let (m, p) = tiny_model(seed)?;
    let cfg = &m.config;
    model_check(
        seed,
        &p,
        &[
            &feature_shape(cfg),
            &[2, cfg.eye_feature_len()],
            &[2, cfg.pose_dim],
        ],
        |ctx, v| {
            let y = m.gaze_head(ctx, v[0], v[1], v[2])?;
            probe(&mut ctx.tape, y)
        },
    )
}

/// Total loss of the tiny model on two synthetic samples, with respect to
/// every parameter and all three image inputs.
fn whole_model(seed: u64) -> Result<f64> {
    let (m, p) = tiny_model(seed)?;
    let cfg = &m.config;
    let geom = cfg.geometry();
    let samples = (0..2)
        .map(|i| GazeSample::generate(i, seed * 2 + i as u64, &geom, cfg.eye_size))
        .collect::<Result<Vec<_>>>()?;
    let batch = Batch::new(&samples.iter().collect::<Vec<_>>())?;
    let xs = [batch.face.clone(), batch.eye_l.clone(), batch.eye_r.clone()];
    finite_diff_check_model(
        |ctx, v| {
            let out = m.forward(ctx, v[0], v[1], v[2])?;
            Ok(m.losses(ctx, &out, &batch)?.total)
        },
        &p,
        &xs,
        SUITE_EPS,
        Some((MODEL_SAMPLED, seed)),
    )
}

fn checks() -> Vec<Check> {
    let c = |module, name, run| Check {
        module,
        name,
        tolerance: COMPONENT_TOLERANCE,
        run,
    };
    vec![
        c("tensor", "elementwise", elementwise),
        c("tensor", "matmul", matmul),
        c("tensor", "bmm", bmm),
        c("tensor", "softmax", softmax),
        c("tensor", "shape_ops", shape_ops),
        c("tensor", "pooling", pooling),
        c("tensor", "conv2d", conv2d),
        c("tensor", "conv_transpose2d", conv_transpose2d),
        c("tensor", "resize_bilinear", resize),
        c("tensor", "gaussian_affinity", gaussian_affinity),
        c("tensor", "complementary_mask", complementary_mask),
        c("layers", "linear", linear),
        c("layers", "mlp", mlp),
        c("layers", "conv2d", conv_layer),
        c("layers", "conv_transpose2d", conv_transpose_layer),
        c("attention", "cbam", cbam),
        c("attention", "gmw_fixed_sigma", |s| gmw(s, false)),
        c("attention", "gmw_learned_sigma", |s| gmw(s, true)),
        c("attention", "msglam", |s| msglam(s, false)),
        c("attention", "msglam_learned_sigma", |s| msglam(s, true)),
        c("losses", "mse", mse),
        c("losses", "recon", recon_losses),
        c("losses", "gaze", gaze_loss),
        c("losses", "total", total_loss),
        c("model", "face_encoder", face_encoder),
        c("model", "eye_encoder", eye_encoder),
        c("model", "pose_branch", pose_branch),
        c("model", "disentangler", disentangler),
        c("model", "eye_decoder", eye_decoder),
        c("model", "region_decoder", region_decoder),
        c("model", "gaze_head", gaze_head),
        Check {
            module: "model",
            name: "whole_model",
            tolerance: MODEL_TOLERANCE,
            run: whole_model,
        },
    ]
}

/// Runs every check of `module` (all modules when `None`) once per seed.
pub fn run_suite(
    module: Option<&str>,
    seeds: impl IntoIterator<Item = u64> + Clone,
) -> Result<Vec<CheckResult>> {
    if let Some(m) = module {
        if !MODULES.contains(&m) {
            return Err(Error::usage(format!(
                "unknown gradcheck module {m:?} (expected one of {})",
                MODULES.join(", ")
            )));
        }
    }
    let mut out = Vec::new();
    for check in checks()
        .into_iter()
        .filter(|c| module.is_none_or(|m| m == c.module))
    {
        for seed in seeds.clone() {
            let t0 = Instant::now();
            let max_rel_error = (check.run)(seed)?;
            out.push(CheckResult {
                module: check.module,
                name: check.name,
                seed,
                max_rel_error,
                tolerance: check.tolerance,
                seconds: t0.elapsed().as_secs_f64(),
            });
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unknown_module_is_rejected() {
        assert!(run_suite(Some("optimizer"), 0..1).is_err());
    }

    #[test]
    fn losses_pass_on_one_seed() {
        let r = run_suite(Some("losses"), 0..1).unwrap();
        assert_eq!(r.len(), 4);
        assert!(r.iter().all(CheckResult::passed), "{r:?}");
    }
}
