use rand::Rng;

use super::{CbamBlock, GmwNonLocalBlock};
use crate::error::{Error, Result};
use crate::nn::{Builder, Conv2d, Ctx};
use crate::tensor::Var;

/// Parameters of one group within one round.
///
/// Group 0 attends over its own `d` channels; later groups attend over
/// `cat(z_{i−1}, x_sub_i)`, i.e. `2d` channels.
#[derive(Clone, Debug)]
pub struct GroupStep {
    /// `c/n → d`, 3×3.
    pub conv_sub: Conv2d,
    pub cbam: CbamBlock,
    pub gmw: GmwNonLocalBlock,
    /// `cat(a_i, b_i)` (twice the attention width) `→ d`, 1×1.
    pub conv_tail: Conv2d,
}

/// Grouped, cascaded CBAM + GMW non-local attention repeated for several
/// rounds. Every group and every round owns its own parameters.
#[derive(Clone, Debug)]
pub struct MsGlamBlock {
    pub channels: usize,
    pub groups: usize,
    pub rounds: usize,
    /// `steps[round][group]`.
    pub steps: Vec<Vec<GroupStep>>,
    /// `fusion[j-1]` maps `cat(Z^{j−1}, X^{j−1})` (`2c`) back to `c`, 1×1.
    pub fusion: Vec<Conv2d>,
}

#[derive(Clone, Copy, Debug)]
pub struct MsGlamParams {
    pub channels: usize,
    pub groups: usize,
    pub rounds: usize,
    pub sigma: f64,
    pub learn_sigma: bool,
    pub reduction: usize,
}

impl MsGlamBlock {
    pub fn new<R: Rng>(b: &mut Builder<'_, R>, name: &str, p: MsGlamParams) -> Result<Self> {
        if p.groups == 0 || !p.channels.is_multiple_of(p.groups) {
            return Err(Error::config(format!(
                "{} channels are not divisible into {} groups",
                p.channels, p.groups
            )));
        }
        if p.rounds == 0 {
            return Err(Error::config("the cascade needs at least one round"));
        }
        let d = p.channels / p.groups;
        b.scope(name, |b| {
            let mut steps = Vec::with_capacity(p.rounds);
            for j in 0..p.rounds {
                let mut round = Vec::with_capacity(p.groups);
                for i in 0..p.groups {
                    let width = if i == 0 { d } else { 2 * d };
                    let step = b.scope(format!("r{j}.g{i}"), |b| -> Result<GroupStep> {
                        let label = |part: &str| format!("{name}.r{j}.g{i}.{part}");
                        let mut cbam = CbamBlock::new(b, "cbam", width, p.reduction);
                        cbam.label = label("cbam");
                        let mut gmw =
                            GmwNonLocalBlock::new(b, "gmw", width, p.sigma, p.learn_sigma)?;
                        gmw.label = label("gmw");
                        Ok(GroupStep {
                            conv_sub: Conv2d::new(b, "sub", d, d, 3, 1, 1),
                            cbam,
                            gmw,
                            conv_tail: Conv2d::new(b, "tail", 2 * width, d, 1, 1, 0),
                        })
                    })?;
                    round.push(step);
                }
                steps.push(round);
            }
            let fusion = (1..p.rounds)
                .map(|j| Conv2d::new(b, &format!("fuse{j}"), 2 * p.channels, p.channels, 1, 1, 0))
                .collect();
            Ok(Self {
                channels: p.channels,
                groups: p.groups,
                rounds: p.rounds,
                steps,
                fusion,
            })
        })
    }

    pub fn group_width(&self) -> usize {
        self.channels / self.groups
    }

    /// `z_i = conv_tail(cat(CBAM(t), GMW(t)))` with `t = x_sub` for the
    /// first group and `cat(z_{i−1}, x_sub)` afterwards.
    pub fn group_step(
        &self,
        ctx: &mut Ctx<'_>,
        round: usize,
        group: usize,
        x_sub: Var,
        z_prev: Option<Var>,
    ) -> Result<Var> {
        let step = self
            .steps
            .get(round)
            .and_then(|r| r.get(group))
            .ok_or_else(|| Error::usage(format!("no group step ({round}, {group})")))?;
        let t = match (group, z_prev) {
            (0, None) => x_sub,
            (g, Some(z)) if g > 0 => ctx.tape.concat(&[z, x_sub], 1)?,
            _ => {
                return Err(Error::usage(format!(
                    "group {group} {} a previous group output",
                    if group == 0 {
                        "must not receive"
                    } else {
                        "requires"
                    }
                )))
            }
        };
        let a = step.cbam.forward(ctx, t)?;
        let b = step.gmw.forward(ctx, t)?;
        let ab = ctx.tape.concat(&[a, b], 1)?;
        step.conv_tail.forward(ctx, ab)
    }

    /// One traversal of all groups: `Z = cat(z_0, …, z_{n−1})`.
    pub fn round(&self, ctx: &mut Ctx<'_>, round: usize, x: Var) -> Result<Var> {
        let parts = ctx.tape.group_split(x, self.groups)?;
        let mut zs = Vec::with_capacity(self.groups);
        let mut prev = None;
        for (i, part) in parts.into_iter().enumerate() {
            let x_sub = self.steps[round][i].conv_sub.forward(ctx, part)?;
            let z = self.group_step(ctx, round, i, x_sub, prev)?;
            zs.push(z);
            prev = Some(z);
        }
        ctx.tape.concat(&zs, 1)
    }

    /// Runs every round, fusing each round's output with its input to form
    /// the next input, and returns the last round's output.
    pub fn forward(&self, ctx: &mut Ctx<'_>, x: Var) -> Result<Var> {
        let c = ctx.tape.shape(x).get(1).copied().unwrap_or(0);
        if c != self.channels {
            return Err(Error::dim(format!(
                "cascade built for {} channels, got {c}",
                self.channels
            )));
        }
        let mut input = x;
        let mut z = self.round(ctx, 0, input)?;
        for j in 1..self.rounds {
            let both = ctx.tape.concat(&[z, input], 1)?;
            input = self.fusion[j - 1].forward(ctx, both)?;
            z = self.round(ctx, j, input)?;
        }
        Ok(z)
    }
}
