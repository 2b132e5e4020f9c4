use rand::Rng;

use crate::error::Result;
use crate::nn::{Builder, Conv2d, Ctx, Mlp};
use crate::tensor::Var;

/// Sequential channel-then-spatial attention. Output shape equals input shape.
#[derive(Clone, Debug)]
pub struct CbamBlock {
    pub label: String,
    pub channels: usize,
    /// Shared between the average- and max-pooled paths.
    pub mlp: Mlp,
    /// 2 → 1 channels, 7×7, padding 3.
    pub spatial: Conv2d,
}

impl CbamBlock {
    pub const SPATIAL_KERNEL: usize = 7;

    pub fn new<R: Rng>(
        b: &mut Builder<'_, R>,
        name: &str,
        channels: usize,
        reduction: usize,
    ) -> Self {
        let hidden = (channels / reduction.max(1)).max(1);
        b.scope(name, |b| Self {
            label: name.to_string(),
            channels,
            mlp: Mlp::new(b, "mlp", channels, hidden, channels),
            spatial: Conv2d::new(
                b,
                "spatial",
                2,
                1,
                Self::SPATIAL_KERNEL,
                1,
                Self::SPATIAL_KERNEL / 2,
            ),
        })
    }

    /// `sigmoid(MLP(avgpool(F)) + MLP(maxpool(F)))`, shape `[b, c, 1, 1]`.
    pub fn channel_attention(&self, ctx: &mut Ctx<'_>, f: Var) -> Result<Var> {
        let b = ctx.tape.shape(f)[0];
        let avg = ctx.tape.global_avg_pool(f)?;
        let avg = ctx.tape.reshape(avg, &[b, self.channels])?;
        let max = ctx.tape.global_max_pool(f)?;
        let max = ctx.tape.reshape(max, &[b, self.channels])?;
        let pa = self.mlp.forward(ctx, avg)?;
        let pm = self.mlp.forward(ctx, max)?;
        let logits = ctx.tape.add(pa, pm)?;
        let map = ctx.tape.sigmoid(logits);
        ctx.tape.reshape(map, &[b, self.channels, 1, 1])
    }

    /// `sigmoid(conv(cat(mean_c(F'), max_c(F'))))`, shape `[b, 1, h, w]`.
    pub fn spatial_attention(&self, ctx: &mut Ctx<'_>, f: Var) -> Result<Var> {
        let mean = ctx.tape.channel_mean(f)?;
        let max = ctx.tape.channel_max(f)?;
        let both = ctx.tape.concat(&[mean, max], 1)?;
        let logits = self.spatial.forward(ctx, both)?;
        Ok(ctx.tape.sigmoid(logits))
    }

    pub fn forward(&self, ctx: &mut Ctx<'_>, f: Var) -> Result<Var> {
        let mc = self.channel_attention(ctx, f)?;
        let refined = ctx.tape.mul(f, mc)?;
        let ms = self.spatial_attention(ctx, refined)?;
        if ctx.is_recording() {
            ctx.record(format!("{}/channel", self.label), mc);
            ctx.record(format!("{}/spatial", self.label), ms);
        }
        ctx.tape.mul(refined, ms)
    }
}
