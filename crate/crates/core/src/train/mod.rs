//! Optimisation, the training and evaluation loops, checkpoints, attention
//! export, parameter sweeps and the gradient-check suite.

pub mod checkpoint;
pub mod export;
mod optim;
pub mod suite;

use std::fmt::Write as _;

use log::info;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub use optim::{adamw_step, multistep_lr, AdamW, Moments};

use crate::config::{RunConfig, TrainConfig};
use crate::data::{Batch, Dataset, GazeSample};
use crate::error::{Error, Result};
use crate::losses::{angular_error_angles, GazeAngles, LossReport};
use crate::model::DmaGaze;
use crate::nn::{Ctx, ParamStore};

pub const METRICS_HEADER: &str = "epoch,lr,Lg,L1,L2,test_angular_error_deg";

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpochMetrics {
    /// One-based.
    pub epoch: usize,
    pub lr: f64,
    pub lg: f64,
    pub l1: f64,
    pub l2: f64,
    pub test_error_deg: f64,
}

/// Metrics CSV with the fixed header; floats use shortest round-trip form so
/// identical runs give identical files.
pub fn metrics_csv(history: &[EpochMetrics]) -> String {
    let mut s = format!("{METRICS_HEADER}\n");
    for m in history {
        let _ = writeln!(
            s,
            "{},{},{},{},{},{}",
            m.epoch, m.lr, m.lg, m.l1, m.l2, m.test_error_deg
        );
    }
    s
}

/// Optimiser state carried between epochs.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainState {
    /// Completed epochs.
    pub epoch: usize,
    pub lr: f64,
    pub seed: u64,
    pub moments: Moments,
    pub config: RunConfig,
}

impl TrainState {
    pub fn hyper(&self) -> AdamW {
        let t = &self.config.train;
        AdamW {
            beta1: t.beta1,
            beta2: t.beta2,
            eps: t.adam_eps,
            weight_decay: t.weight_decay,
        }
    }
}

/// Shuffled batch index lists for `epoch` (zero-based).
pub fn epoch_batches(n: usize, batch_size: usize, seed: u64, epoch: usize) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng =
        ChaCha8Rng::seed_from_u64(seed ^ (epoch as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
    order.shuffle(&mut rng);
    order
        .chunks(batch_size.max(1))
        .map(<[usize]>::to_vec)
        .collect()
}

pub struct Trainer {
    pub model: DmaGaze,
    pub params: ParamStore,
    pub state: TrainState,
    pub history: Vec<EpochMetrics>,
    /// Verify `F_r + F_ir == F` bitwise at every step.
    pub check_mask_identity: bool,
    /// Steps at which the identity was verified.
    pub mask_checks: usize,
}

impl Trainer {
    /// A fresh model initialised from `config.train.seed`.
    pub fn new(config: &RunConfig) -> Result<Self> {
        config.train.validate()?;
        let (model, params) = DmaGaze::init(&config.model, config.train.seed)?;
        Ok(Self::from_parts(model, params, config))
    }

    pub fn from_parts(model: DmaGaze, params: ParamStore, config: &RunConfig) -> Self {
        let t = &config.train;
        let state = TrainState {
            epoch: 0,
            lr: multistep_lr(0, t.lr, &t.milestones, t.gamma),
            seed: t.seed,
            moments: Moments::zeros(&params),
            config: config.clone(),
        };
        Self {
            model,
            params,
            state,
            history: Vec::new(),
            check_mask_identity: false,
            mask_checks: 0,
        }
    }

    fn train_cfg(&self) -> &TrainConfig {
        &self.state.config.train
    }

    /// One optimiser step on `batch`; returns its losses.
    pub fn step(&mut self, batch: &Batch, lr: f64) -> Result<LossReport> {
        let mut ctx = Ctx::new(&self.params);
        let out = self.model.forward_batch(&mut ctx, batch)?;
        if self.check_mask_identity {
            let f = ctx.tape.value(out.face_features).data();
            let r = ctx.tape.value(out.disentangled.f_r).data();
            let ir = ctx.tape.value(out.disentangled.f_ir).data();
            if f.iter().zip(r).zip(ir).any(|((f, a), b)| a + b != *f) {
                return Err(Error::Integrity(format!(
                    "disentangled features do not sum to the face features at step {}",
                    self.state.moments.step + 1
                )));
            }
            self.mask_checks += 1;
        }
        let losses = self.model.losses(&mut ctx, &out, batch)?;
        let report = losses.report(&ctx);
        if ![report.l1, report.l2, report.lg, report.total]
            .iter()
            .all(|v| v.is_finite())
        {
            return Err(Error::Divergence(format!(
                "non-finite loss at step {}: {report:?}",
                self.state.moments.step + 1
            )));
        }
        let grads = ctx.backward(losses.total)?;
        let hp = self.state.hyper();
        adamw_step(&mut self.params, &grads, &mut self.state.moments, lr, &hp)?;
        Ok(report)
    }

    /// Trains one epoch over `data.train` and evaluates on `data.test`.
    pub fn run_epoch(&mut self, data: &Dataset) -> Result<EpochMetrics> {
        if data.train.is_empty() {
            return Err(Error::usage("training set is empty"));
        }
        let t = self.train_cfg().clone();
        let epoch = self.state.epoch;
        let lr = multistep_lr(epoch, t.lr, &t.milestones, t.gamma);
        self.state.lr = lr;
        let (mut l1, mut l2, mut lg, mut n) = (0.0, 0.0, 0.0, 0usize);
        for idx in epoch_batches(data.train.len(), t.batch_size, self.state.seed, epoch) {
            let samples: Vec<&GazeSample> = idx.iter().map(|&i| &data.train[i]).collect();
            let batch = Batch::new(&samples)?;
            let r = self.step(&batch, lr)?;
            let k = batch.len() as f64;
            l1 += r.l1 * k;
            l2 += r.l2 * k;
            lg += r.lg * k;
            n += batch.len();
        }
        let n = n as f64;
        let test_error_deg = if data.test.is_empty() {
            f64::NAN
        } else {
            evaluate(&self.model, &self.params, &data.test, t.batch_size)?.mean_error_deg
        };
        self.state.epoch += 1;
        let m = EpochMetrics {
            epoch: self.state.epoch,
            lr,
            lg: lg / n,
            l1: l1 / n,
            l2: l2 / n,
            test_error_deg,
        };
        info!(
            "epoch {} lr {:.1e} Lg {:.4} L1 {:.4} L2 {:.4} test {:.2}°",
            m.epoch, m.lr, m.lg, m.l1, m.l2, m.test_error_deg
        );
        self.history.push(m);
        Ok(m)
    }

    /// Runs until `epochs` epochs have been completed in total.
    pub fn train(&mut self, data: &Dataset, epochs: usize) -> Result<&[EpochMetrics]> {
        while self.state.epoch < epochs {
            self.run_epoch(data)?;
        }
        Ok(&self.history)
    }
}

/// Trains a fresh model for `config.train.epochs` epochs.
pub fn train_loop(config: &RunConfig, data: &Dataset) -> Result<Trainer> {
    let mut trainer = Trainer::new(config)?;
    trainer.train(data, config.train.epochs)?;
    Ok(trainer)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Prediction {
    pub id: usize,
    pub pred: GazeAngles,
    pub truth: GazeAngles,
    pub error_deg: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Evaluation {
    pub mean_error_deg: f64,
    pub predictions: Vec<Prediction>,
}

impl Evaluation {
    pub fn from_predictions(predictions: Vec<Prediction>) -> Result<Self> {
        if predictions.is_empty() {
            return Err(Error::usage("evaluation over an empty set"));
        }
        let mean_error_deg =
            predictions.iter().map(|p| p.error_deg).sum::<f64>() / predictions.len() as f64;
        Ok(Self {
            mean_error_deg,
            predictions,
        })
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from(
            "sample_id,pred_pitch_deg,pred_yaw_deg,true_pitch_deg,true_yaw_deg,angular_error_deg\n",
        );
        for p in &self.predictions {
            let (pp, py) = p.pred.degrees();
            let (tp, ty) = p.truth.degrees();
            let _ = writeln!(
                s,
                "{},{pp:.6},{py:.6},{tp:.6},{ty:.6},{:.6}",
                p.id, p.error_deg
            );
        }
        s
    }
}

/// Scores `predict` against each sample's truth.
pub fn evaluate_with(
    samples: &[GazeSample],
    mut predict: impl FnMut(&[&GazeSample]) -> Result<Vec<GazeAngles>>,
    batch_size: usize,
) -> Result<Evaluation> {
    let mut out = Vec::with_capacity(samples.len());
    for chunk in samples.chunks(batch_size.max(1)) {
        let refs: Vec<&GazeSample> = chunk.iter().collect();
        let preds = predict(&refs)?;
        for (s, pred) in chunk.iter().zip(preds) {
            out.push(Prediction {
                id: s.meta.id,
                pred,
                truth: s.truth,
                error_deg: angular_error_angles(pred, s.truth)?,
            });
        }
    }
    Evaluation::from_predictions(out)
}

/// Mean angular error of the model on `samples`; parameters are read only.
pub fn evaluate(
    model: &DmaGaze,
    params: &ParamStore,
    samples: &[GazeSample],
    batch_size: usize,
) -> Result<Evaluation> {
    evaluate_with(
        samples,
        |refs| model.predict(params, &Batch::new(refs)?),
        batch_size,
    )
}

/// Error of always predicting `(0, 0)`.
pub fn constant_baseline(samples: &[GazeSample]) -> Result<Evaluation> {
    evaluate_with(
        samples,
        |refs| Ok(vec![GazeAngles::default(); refs.len()]),
        samples.len().max(1),
    )
}
