//! Attention-map export and parameter sweeps.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use log::info;

use super::{constant_baseline, evaluate, EpochMetrics, Trainer};
use crate::config::RunConfig;
use crate::data::{Batch, Dataset, GazeSample};
use crate::error::{Error, Result};
use crate::imageio::write_pgm;
use crate::model::{DmaGaze, MASK_LABEL};
use crate::nn::{Ctx, ParamStore};

/// Smallest side of an exported heatmap; maps are upscaled by pixel
/// replication to reach it.
pub const MIN_EXPORT_SIDE: usize = 64;

#[derive(Clone, Debug)]
pub struct AttentionDump {
    pub height: usize,
    pub width: usize,
    /// Channel mean of the mask, before normalisation.
    pub mask_upper: Vec<f64>,
    /// Channel mean of one minus the mask, before normalisation.
    pub mask_lower: Vec<f64>,
    /// CBAM spatial maps by label, before normalisation.
    pub spatial: Vec<(String, Vec<f64>)>,
    pub files: Vec<PathBuf>,
}

/// Rescales to `[0, 1]`; a constant map becomes all zeros.
pub fn min_max_normalize(v: &[f64]) -> Vec<f64> {
    let lo = v.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let span = hi - lo;
    if !(span > 0.0) {
        return vec![0.0; v.len()];
    }
    v.iter().map(|x| (x - lo) / span).collect()
}

fn write_heatmap(path: &Path, h: usize, w: usize, values: &[f64]) -> Result<()> {
    let norm = min_max_normalize(values);
    let f = MIN_EXPORT_SIDE.div_ceil(h.min(w).max(1)).max(1);
    let (bh, bw) = (h * f, w * f);
    let big: Vec<f64> = (0..bh * bw)
        .map(|i| norm[(i / bw / f) * w + (i % bw) / f])
        .collect();
    write_pgm(path, bw, bh, &big)
}

fn channel_mean(t: &[f64], c: usize, plane: usize, f: impl Fn(f64) -> f64) -> Vec<f64> {
    (0..plane)
        .map(|p| (0..c).map(|ch| f(t[ch * plane + p])).sum::<f64>() / c as f64)
        .collect()
}

/// Writes the mask heatmaps of both branches and every CBAM spatial map
/// for one sample as min-max normalised PGM images.
pub fn dump_attention(
    model: &DmaGaze,
    params: &ParamStore,
    sample: &GazeSample,
    out_dir: &Path,
) -> Result<AttentionDump> {
    std::fs::create_dir_all(out_dir)?;
    let mut ctx = Ctx::inference(params).with_recording();
    model.forward_batch(&mut ctx, &Batch::new(&[sample])?)?;
    let recorded = ctx.take_recorded();
    let mask = recorded
        .iter()
        .find(|r| r.label == MASK_LABEL)
        .ok_or_else(|| Error::usage("forward pass did not record the mask"))?;
    let [_, c, h, w] = *mask.value.shape() else {
        return Err(Error::dim(format!(
            "mask has shape {:?}",
            mask.value.shape()
        )));
    };
    let plane = h * w;
    let mask_upper = channel_mean(mask.value.data(), c, plane, |k| k);
    let mask_lower = channel_mean(mask.value.data(), c, plane, |k| 1.0 - k);

    let mut files = Vec::new();
    for (name, map) in [("mask_upper", &mask_upper), ("mask_lower", &mask_lower)] {
        let p = out_dir.join(format!("{name}.pgm"));
        write_heatmap(&p, h, w, map)?;
        files.push(p);
    }
    let mut spatial = Vec::new();
    for r in recorded.iter().filter(|r| r.label.ends_with("/spatial")) {
        let [_, 1, sh, sw] = *r.value.shape() else {
            return Err(Error::dim(format!(
                "spatial map {} has shape {:?}",
                r.label,
                r.value.shape()
            )));
        };
        let file = r.label.replace(['.', '/'], "_");
        let p = out_dir.join(format!("{file}.pgm"));
        write_heatmap(&p, sh, sw, r.value.data())?;
        files.push(p);
        spatial.push((r.label.clone(), r.value.data().to_vec()));
    }
    Ok(AttentionDump {
        height: h,
        width: w,
        mask_upper,
        mask_lower,
        spatial,
        files,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SweepParam {
    Rounds,
    Sigma,
}

impl FromStr for SweepParam {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "k_rounds" => Ok(Self::Rounds),
            "sigma" => Ok(Self::Sigma),
            _ => Err(Error::config(format!(
                "unknown sweep parameter {s:?} (expected k_rounds or sigma)"
            ))),
        }
    }
}

impl SweepParam {
    pub fn name(self) -> &'static str {
        match self {
            Self::Rounds => "k_rounds",
            Self::Sigma => "sigma",
        }
    }

    pub fn apply(self, base: &RunConfig, value: f64) -> Result<RunConfig> {
        let mut cfg = base.clone();
        match self {
            Self::Rounds => {
                if value < 1.0 || value.fract() != 0.0 {
                    return Err(Error::config(format!(
                        "k_rounds must be a positive integer, got {value}"
                    )));
                }
                cfg.model.rounds = value as usize;
            }
            Self::Sigma => cfg.model.sigma = value,
        }
        cfg.model.validate()?;
        Ok(cfg)
    }
}

#[derive(Clone, Debug)]
pub struct SweepRow {
    pub param: SweepParam,
    pub value: f64,
    pub untrained_error_deg: f64,
    pub constant_error_deg: f64,
    pub final_error_deg: f64,
    pub history: Vec<EpochMetrics>,
}

impl SweepRow {
    /// Below half the untrained error.
    pub fn beats_untrained(&self) -> bool {
        self.final_error_deg < 0.5 * self.untrained_error_deg
    }

    pub fn beats_constant(&self) -> bool {
        self.final_error_deg < self.constant_error_deg
    }
}

/// Trains one model per value from the same seed and data.
pub fn sweep(
    base: &RunConfig,
    data: &Dataset,
    param: SweepParam,
    values: &[f64],
) -> Result<Vec<SweepRow>> {
    if values.is_empty() {
        return Err(Error::usage("sweep needs at least one value"));
    }
    let constant = constant_baseline(&data.test)?.mean_error_deg;
    let mut rows = Vec::with_capacity(values.len());
    for &value in values {
        let cfg = param.apply(base, value)?;
        let mut trainer = Trainer::new(&cfg)?;
        let untrained = evaluate(
            &trainer.model,
            &trainer.params,
            &data.test,
            cfg.train.batch_size,
        )?
        .mean_error_deg;
        trainer.train(data, cfg.train.epochs)?;
        let final_error = trainer
            .history
            .last()
            .map_or(untrained, |m| m.test_error_deg);
        info!(
            "sweep {}={value}: {final_error:.2}° (untrained {untrained:.2}°)",
            param.name()
        );
        rows.push(SweepRow {
            param,
            value,
            untrained_error_deg: untrained,
            constant_error_deg: constant,
            final_error_deg: final_error,
            history: trainer.history,
        });
    }
    Ok(rows)
}

pub const SWEEP_HEADER: &str =
    "param,value,epochs,final_test_error_deg,untrained_error_deg,constant_error_deg,beats_untrained,beats_constant";

pub fn sweep_csv(rows: &[SweepRow]) -> String {
    let mut s = format!("{SWEEP_HEADER}\n");
    for r in rows {
        let _ = writeln!(
            s,
            "{},{},{},{:.4},{:.4},{:.4},{},{}",
            r.param.name(),
            r.value,
            r.history.len(),
            r.final_error_deg,
            r.untrained_error_deg,
            r.constant_error_deg,
            r.beats_untrained(),
            r.beats_constant()
        );
    }
    s
}
