//! The full gaze network: face and eye encoders, the continuous-mask
//! disentangler, two attention cascades, reconstruction decoders, the
//! head-pose branch and the gaze head.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::attention::{MsGlamBlock, MsGlamParams};
use crate::config::ModelConfig;
use crate::data::Batch;
use crate::error::{Error, Result};
use crate::losses::{self, GazeAngles};
use crate::nn::{Builder, Conv2d, ConvTranspose2d, Ctx, Linear, Mlp, ParamId, ParamStore};
use crate::tensor::Var;

/// Label under which the disentangling mask is recorded.
pub const MASK_LABEL: &str = "mask";

/// Stride-2 3×3 convolutions, each followed by ReLU.
#[derive(Clone, Debug)]
pub struct ConvStack {
    pub stages: Vec<Conv2d>,
}

impl ConvStack {
    pub fn new<R: Rng>(
        b: &mut Builder<'_, R>,
        name: &str,
        c_in: usize,
        channels: &[usize],
    ) -> Self {
        b.scope(name, |b| {
            let mut c = c_in;
            let stages = channels
                .iter()
                .enumerate()
                .map(|(i, &out)| {
                    let conv = Conv2d::new(b, &i.to_string(), c, out, 3, 2, 1);
                    c = out;
                    conv
                })
                .collect();
            Self { stages }
        })
    }

    pub fn forward(&self, ctx: &mut Ctx<'_>, x: Var) -> Result<Var> {
        let mut t = x;
        for conv in &self.stages {
            let y = conv.forward(ctx, t)?;
            t = ctx.tape.relu(y);
        }
        Ok(t)
    }

    /// Output extent for an input extent.
    pub fn out_extent(&self, mut n: usize) -> usize {
        for conv in &self.stages {
            n = conv.out_extent(n).unwrap_or(0);
        }
        n
    }
}

/// Shared per-eye convolutions and projection.
#[derive(Clone, Debug)]
pub struct EyeEncoder {
    pub convs: ConvStack,
    pub proj: Linear,
}

impl EyeEncoder {
    /// `F_e = cat(φ(I_l), φ(I_r))`, shape `[b, 2·eye_feature_dim]`.
    pub fn forward(&self, ctx: &mut Ctx<'_>, eye_l: Var, eye_r: Var) -> Result<Var> {
        let b = ctx.tape.shape(eye_l)[0];
        let both = ctx.tape.concat(&[eye_l, eye_r], 0)?;
        let f = self.convs.forward(ctx, both)?;
        let per = ctx.tape.value(f).numel() / (2 * b);
        let flat = ctx.tape.reshape(f, &[2 * b, per])?;
        let p = self.proj.forward(ctx, flat)?;
        let p = ctx.tape.relu(p);
        let l = ctx.tape.narrow(p, 0, 0, b)?;
        let r = ctx.tape.narrow(p, 0, b, b)?;
        ctx.tape.concat(&[l, r], 1)
    }
}

#[derive(Clone, Debug)]
pub struct PoseBranch {
    pub convs: ConvStack,
    pub proj: Linear,
}

impl PoseBranch {
    /// Convolutions, global average pool and a linear map, `[b, pose_dim]`.
    pub fn forward(&self, ctx: &mut Ctx<'_>, face: Var) -> Result<Var> {
        let f = self.convs.forward(ctx, face)?;
        let pooled = ctx.tape.global_avg_pool(f)?;
        let shape = ctx.tape.shape(pooled).to_vec();
        let flat = ctx.tape.reshape(pooled, &[shape[0], shape[1]])?;
        self.proj.forward(ctx, flat)
    }
}

/// A transposed-conv trunk shared by several image heads. Each head resizes
/// the trunk output to its target extent, applies a 3×3 conv to three
/// channels and a sigmoid.
#[derive(Clone, Debug)]
pub struct Decoder {
    pub trunk: Vec<ConvTranspose2d>,
    pub heads: Vec<(Conv2d, [usize; 2])>,
}

impl Decoder {
    pub fn new<R: Rng>(
        b: &mut Builder<'_, R>,
        name: &str,
        c_in: usize,
        channels: &[usize],
        heads: &[(&str, [usize; 2])],
    ) -> Self {
        b.scope(name, |b| {
            let mut c = c_in;
            let trunk = channels
                .iter()
                .enumerate()
                .map(|(i, &out)| {
                    let layer = ConvTranspose2d::new(b, &format!("up{i}"), c, out, 4, 2, 1);
                    c = out;
                    layer
                })
                .collect();
            let heads = heads
                .iter()
                .map(|&(head, size)| (Conv2d::new(b, head, c, 3, 3, 1, 1), size))
                .collect();
            Self { trunk, heads }
        })
    }

    pub fn forward(&self, ctx: &mut Ctx<'_>, x: Var) -> Result<Vec<Var>> {
        let mut t = x;
        for layer in &self.trunk {
            let y = layer.forward(ctx, t)?;
            t = ctx.tape.relu(y);
        }
        self.heads
            .iter()
            .map(|(conv, [h, w])| {
                let r = ctx.tape.resize_bilinear(t, *h, *w)?;
                let y = conv.forward(ctx, r)?;
                Ok(ctx.tape.sigmoid(y))
            })
            .collect()
    }
}

/// Tape handles of the disentangler.
#[derive(Clone, Copy, Debug)]
pub struct DisentangledFeatures {
    /// `sigmoid(M)`, shape `[1, c, h, w]`.
    pub mask: Var,
    pub f_r: Var,
    pub f_ir: Var,
}

/// Everything one forward pass produces, as tape handles.
#[derive(Clone, Copy, Debug)]
pub struct ForwardOutput {
    /// `[b, 2]` of `(pitch, yaw)` in radians.
    pub gaze: Var,
    pub recon_left: Var,
    pub recon_right: Var,
    /// Top, middle, bottom.
    pub recon_regions: [Var; 3],
    pub face_features: Var,
    pub disentangled: DisentangledFeatures,
    pub upper: Var,
    pub lower: Var,
    pub eye_features: Var,
    pub pose: Var,
}

/// Loss handles of one batch.
#[derive(Clone, Copy, Debug)]
pub struct LossVars {
    pub l1: Var,
    pub l2: Var,
    pub lg: Var,
    pub total: Var,
}

impl LossVars {
    pub fn report(&self, ctx: &Ctx<'_>) -> losses::LossReport {
        let v = |x: Var| ctx.tape.value(x).data()[0];
        losses::LossReport {
            l1: v(self.l1),
            l2: v(self.l2),
            lg: v(self.lg),
            total: v(self.total),
        }
    }
}

#[derive(Clone, Debug)]
pub struct DmaGaze {
    pub config: ModelConfig,
    pub face_encoder: ConvStack,
    pub eye_encoder: EyeEncoder,
    /// Free mask logits `M`, shape `[1, c, h, w]`, initialised to zero.
    pub mask_logits: ParamId,
    pub upper: MsGlamBlock,
    pub lower: MsGlamBlock,
    pub eye_decoder: Decoder,
    pub region_decoder: Decoder,
    pub pose: PoseBranch,
    pub gaze_head: Mlp,
}

impl DmaGaze {
    /// Registers every parameter in `store`.
    pub fn build<R: Rng>(
        config: &ModelConfig,
        store: &mut ParamStore,
        rng: &mut R,
    ) -> Result<Self> {
        config.validate()?;
        let (c, h, w) = config.feature_shape();
        let mut b = Builder::new(store, rng);
        let face_encoder = ConvStack::new(&mut b, "face", 3, &config.encoder_channels);

        let eye_convs = ConvStack::new(&mut b, "eye", 3, &config.eye_channels);
        let eye_flat = eye_convs.out_extent(config.eye_size[0])
            * eye_convs.out_extent(config.eye_size[1])
            * config.eye_channels.last().copied().unwrap_or(0);
        let eye_proj = b.scope("eye", |b| {
            Linear::new(b, "proj", eye_flat, config.eye_feature_dim)
        });

        let mask_logits = b.zeros("mask", &[1, c, h, w]);
        let cascade = MsGlamParams {
            channels: c,
            groups: config.groups,
            rounds: config.rounds,
            sigma: config.sigma,
            learn_sigma: config.learn_sigma,
            reduction: config.cbam_reduction,
        };
        let upper = MsGlamBlock::new(&mut b, "upper", cascade)?;
        let lower = MsGlamBlock::new(&mut b, "lower", cascade)?;

        let eye_decoder = Decoder::new(
            &mut b,
            "eye_dec",
            c,
            &config.decoder_channels,
            &[("left", config.eye_size), ("right", config.eye_size)],
        );
        let [top, mid, bot] = config.region_sizes();
        let region_decoder = Decoder::new(
            &mut b,
            "region_dec",
            c,
            &config.decoder_channels,
            &[("top", top), ("mid", mid), ("bot", bot)],
        );

        let pose_convs = ConvStack::new(&mut b, "pose", 3, &config.pose_channels);
        let pose_c = config.pose_channels.last().copied().unwrap_or(0);
        let pose_proj = b.scope("pose", |b| Linear::new(b, "proj", pose_c, config.pose_dim));
        let gaze_head = Mlp::new(
            &mut b,
            "gaze",
            config.gaze_input_len(),
            config.gaze_hidden,
            2,
        );

        Ok(Self {
            config: config.clone(),
            face_encoder,
            eye_encoder: EyeEncoder {
                convs: eye_convs,
                proj: eye_proj,
            },
            mask_logits,
            upper,
            lower,
            eye_decoder,
            region_decoder,
            pose: PoseBranch {
                convs: pose_convs,
                proj: pose_proj,
            },
            gaze_head,
        })
    }

    /// A freshly initialised model and its parameters.
    pub fn init(config: &ModelConfig, seed: u64) -> Result<(Self, ParamStore)> {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let model = Self::build(config, &mut store, &mut rng)?;
        Ok((model, store))
    }

    /// `mask = sigmoid(M)`, `F_r = mask ⊙ F`, `F_ir = (1 − mask) ⊙ F`.
    pub fn disentangle(&self, ctx: &mut Ctx<'_>, features: Var) -> Result<DisentangledFeatures> {
        let m = ctx.param(self.mask_logits);
        let mask = ctx.tape.sigmoid(m);
        let (f_r, f_ir) = ctx.tape.complementary_mask(features, mask)?;
        if ctx.is_recording() {
            ctx.record(MASK_LABEL, mask);
        }
        Ok(DisentangledFeatures { mask, f_r, f_ir })
    }

    /// `GAP(upper) ‖ F_e ‖ pose → MLP → (pitch, yaw)`.
    pub fn gaze_head(
        &self,
        ctx: &mut Ctx<'_>,
        upper: Var,
        eye_features: Var,
        pose: Var,
    ) -> Result<Var> {
        let pooled = ctx.tape.global_avg_pool(upper)?;
        let shape = ctx.tape.shape(pooled).to_vec();
        let flat = ctx.tape.reshape(pooled, &[shape[0], shape[1]])?;
        let joined = ctx.tape.concat(&[flat, eye_features, pose], 1)?;
        self.gaze_head.forward(ctx, joined)
    }

    fn check_input(
        &self,
        ctx: &Ctx<'_>,
        name: &str,
        v: Var,
        hw: [usize; 2],
        batch: Option<usize>,
    ) -> Result<usize> {
        let s = ctx.tape.shape(v);
        match *s {
            [b, 3, h, w] if [h, w] == hw && batch.is_none_or(|n| n == b) => Ok(b),
            _ => Err(Error::dim(format!(
                "{name} input {s:?} does not match [b, 3, {}, {}]",
                hw[0], hw[1]
            ))),
        }
    }

    pub fn forward(
        &self,
        ctx: &mut Ctx<'_>,
        face: Var,
        eye_l: Var,
        eye_r: Var,
    ) -> Result<ForwardOutput> {
        let cfg = &self.config;
        let b = self.check_input(ctx, "face", face, cfg.face_size, None)?;
        self.check_input(ctx, "left eye", eye_l, cfg.eye_size, Some(b))?;
        self.check_input(ctx, "right eye", eye_r, cfg.eye_size, Some(b))?;

        let eye_features = self.eye_encoder.forward(ctx, eye_l, eye_r)?;
        let face_features = self.face_encoder.forward(ctx, face)?;
        let disentangled = self.disentangle(ctx, face_features)?;
        let upper = self.upper.forward(ctx, disentangled.f_r)?;
        let lower = self.lower.forward(ctx, disentangled.f_ir)?;
        let eyes = self.eye_decoder.forward(ctx, upper)?;
        let regions = self.region_decoder.forward(ctx, lower)?;
        let pose = self.pose.forward(ctx, face)?;
        let gaze = self.gaze_head(ctx, upper, eye_features, pose)?;
        Ok(ForwardOutput {
            gaze,
            recon_left: eyes[0],
            recon_right: eyes[1],
            recon_regions: [regions[0], regions[1], regions[2]],
            face_features,
            disentangled,
            upper,
            lower,
            eye_features,
            pose,
        })
    }

    /// Places the batch on the tape and runs [`DmaGaze::forward`].
    pub fn forward_batch(&self, ctx: &mut Ctx<'_>, batch: &Batch) -> Result<ForwardOutput> {
        let face = ctx.input(batch.face.clone());
        let l = ctx.input(batch.eye_l.clone());
        let r = ctx.input(batch.eye_r.clone());
        self.forward(ctx, face, l, r)
    }

    /// `L1`, `L2`, `Lg` and their weighted total against the batch targets.
    pub fn losses(
        &self,
        ctx: &mut Ctx<'_>,
        out: &ForwardOutput,
        batch: &Batch,
    ) -> Result<LossVars> {
        let eye_l = ctx.input(batch.eye_l.clone());
        let eye_r = ctx.input(batch.eye_r.clone());
        let targets = batch.regions.clone().map(|t| ctx.input(t));
        let truth = ctx.input(batch.truth_tensor());
        let tape = &mut ctx.tape;
        let l1 = losses::eye_recon_loss(tape, out.recon_left, out.recon_right, eye_l, eye_r)?;
        let l2 = losses::region_recon_loss(tape, out.recon_regions, targets)?;
        let lg = losses::gaze_loss(tape, out.gaze, truth)?;
        let total = losses::total_loss(
            tape,
            l1,
            l2,
            lg,
            self.config.lambda_eye,
            self.config.lambda_region,
        )?;
        Ok(LossVars { l1, l2, lg, total })
    }

    /// Predicted angles of a forward pass.
    pub fn gaze_angles(ctx: &Ctx<'_>, out: &ForwardOutput) -> Vec<GazeAngles> {
        ctx.tape
            .value(out.gaze)
            .data()
            .chunks(2)
            .map(|p| GazeAngles::new(p[0], p[1]))
            .collect()
    }

    /// Inference on a batch.
    pub fn predict(&self, params: &ParamStore, batch: &Batch) -> Result<Vec<GazeAngles>> {
        let mut ctx = Ctx::inference(params);
        let out = self.forward_batch(&mut ctx, batch)?;
        Ok(Self::gaze_angles(&ctx, &out))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    #[test]
    fn tiny_shapes() {
        let cfg = ModelConfig::tiny();
        let (model, params) = DmaGaze::init(&cfg, 0).unwrap();
        let mut ctx = Ctx::inference(&params);
        let face = ctx.input(Tensor::full(&[2, 3, 32, 32], 0.5));
        let eye = ctx.input(Tensor::full(&[2, 3, 12, 20], 0.5));
        let out = model.forward(&mut ctx, face, eye, eye).unwrap();
        assert_eq!(ctx.tape.shape(out.gaze), &[2, 2]);
        assert_eq!(ctx.tape.shape(out.recon_left), &[2, 3, 12, 20]);
        assert_eq!(ctx.tape.shape(out.face_features), &[2, 8, 4, 4]);
        let [t, m, b] = cfg.region_sizes();
        assert_eq!(ctx.tape.shape(out.recon_regions[0])[2..], t);
        assert_eq!(ctx.tape.shape(out.recon_regions[1])[2..], m);
        assert_eq!(ctx.tape.shape(out.recon_regions[2])[2..], b);
        assert_eq!(ctx.tape.shape(out.eye_features), &[2, 16]);

        let bad = ctx.input(Tensor::zeros(&[2, 3, 30, 32]));
        assert!(matches!(
            model.forward(&mut ctx, bad, eye, eye),
            Err(Error::Dimension(_))
        ));
    }
}
