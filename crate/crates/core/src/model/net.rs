//! Forward passes of the registration (SDAT) and enhancement (EDP) networks.

use std::collections::BTreeMap;

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::model::config::{ModelConfig, SDAT_DEPTH};
use crate::model::weights::ModelWeights;
use crate::nn::{
    attn_block, res_mamba_block, AttnBlockParams, Conv3dParams, ConvBn, DeformBn, DeformConv3dParams,
    MambaBlockParams, Mode, NormCtx, NormParams, ResMambaParams, RunningStats, SsmParams,
};
use crate::tensor::{Real, Tensor};

const HALVE: [usize; 3] = [1, 2, 2];

/// Parameters bound to a tape, plus the buffers and norm context of one
/// forward pass.
pub struct Net<'a, 't, S: Real> {
    pub cfg: &'a ModelConfig,
    pub vars: &'a BTreeMap<String, Var<'t, S>>,
    pub buffers: &'a BTreeMap<String, Tensor<S>>,
    pub ctx: &'a NormCtx<S>,
}

impl<'a, 't, S: Real> Net<'a, 't, S> {
    fn var(&self, name: &str) -> Result<Var<'t, S>> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| Error::MissingParam(name.to_string()))
    }

    fn buffer(&self, name: &str) -> Result<Tensor<S>> {
        self.buffers
            .get(name)
            .cloned()
            .ok_or_else(|| Error::MissingParam(name.to_string()))
    }

    fn norm(&self, prefix: &str) -> Result<NormParams<'t, S>> {
        Ok(NormParams {
            gamma: self.var(&format!("{prefix}.gamma"))?,
            beta: self.var(&format!("{prefix}.beta"))?,
            running: RunningStats {
                mean: self.buffer(&format!("{prefix}.running_mean"))?,
                var: self.buffer(&format!("{prefix}.running_var"))?,
            },
            momentum: crate::nn::norm::BN_MOMENTUM,
            eps: crate::nn::norm::BN_EPS,
        })
    }

    fn conv_bn(&self, prefix: &str) -> Result<ConvBn<'t, S>> {
        Ok(ConvBn {
            name: format!("{prefix}.bn"),
            conv: Conv3dParams::same(self.var(&format!("{prefix}.conv.weight"))?, None),
            norm: self.norm(&format!("{prefix}.bn"))?,
        })
    }

    fn deform_bn(&self, prefix: &str) -> Result<DeformBn<'t, S>> {
        Ok(DeformBn {
            name: format!("{prefix}.bn"),
            deform: DeformConv3dParams {
                main: Conv3dParams::same(self.var(&format!("{prefix}.deform.weight"))?, None),
                offset: Conv3dParams::same(
                    self.var(&format!("{prefix}.deform.offset.weight"))?,
                    Some(self.var(&format!("{prefix}.deform.offset.bias"))?),
                ),
            },
            norm: self.norm(&format!("{prefix}.bn"))?,
        })
    }

    fn conv_bias(&self, prefix: &str) -> Result<Conv3dParams<'t, S>> {
        Ok(Conv3dParams::same(
            self.var(&format!("{prefix}.weight"))?,
            Some(self.var(&format!("{prefix}.bias"))?),
        ))
    }

    fn res_mamba(&self, prefix: &str) -> Result<ResMambaParams<'t, S>> {
        let ssm = format!("{prefix}.mamba.ssm");
        let skip_name = format!("{prefix}.skip.weight");
        Ok(ResMambaParams {
            conv1: self.conv_bn(&format!("{prefix}.conv1"))?,
            conv2: self.conv_bn(&format!("{prefix}.conv2"))?,
            mamba: MambaBlockParams {
                inner: self.conv_bn(&format!("{prefix}.mamba.inner"))?,
                outer: self.conv_bn(&format!("{prefix}.mamba.outer"))?,
                residual: self.conv_bn(&format!("{prefix}.mamba.residual"))?,
                ssm: SsmParams {
                    delta_weight: self.var(&format!("{ssm}.delta.weight"))?,
                    delta_bias: self.var(&format!("{ssm}.delta.bias"))?,
                    b_weight: self.var(&format!("{ssm}.b.weight"))?,
                    c_weight: self.var(&format!("{ssm}.c.weight"))?,
                    a_log: self.var(&format!("{ssm}.a_log"))?,
                    skip: self.var(&format!("{ssm}.skip"))?,
                },
                four_directions: self.cfg.four_directions,
            },
            skip: match self.vars.get(&skip_name) {
                Some(&w) => Some(Conv3dParams::same(w, None)),
                None => None,
            },
        })
    }

    fn attn(&self, prefix: &str) -> Result<AttnBlockParams<'t, S>> {
        let v = |s: &str| self.var(&format!("{prefix}.{s}"));
        Ok(AttnBlockParams {
            norm1: (v("norm1.gamma")?, v("norm1.beta")?),
            query: v("query.weight")?,
            key: v("key.weight")?,
            value: v("value.weight")?,
            out: self.conv_bias(&format!("{prefix}.out"))?,
            norm2: (v("norm2.gamma")?, v("norm2.beta")?),
            mlp_in: self.conv_bias(&format!("{prefix}.mlp_in"))?,
            mlp_out: self.conv_bias(&format!("{prefix}.mlp_out"))?,
            heads: self.cfg.attn_heads,
        })
    }

    fn double_conv(&self, x: Var<'t, S>, prefix: &str) -> Result<Var<'t, S>> {
        let y = self.conv_bn(&format!("{prefix}.conv1"))?.forward(x, self.ctx)?;
        self.conv_bn(&format!("{prefix}.conv2"))?.forward(y, self.ctx)
    }

    fn down(&self, x: Var<'t, S>, prefix: &str) -> Result<Var<'t, S>> {
        let mut l = self.conv_bn(prefix)?;
        l.conv = l.conv.strided(HALVE);
        l.forward(x, self.ctx)
    }

    /// Registration network: `N×C×T×H×W` in and out.
    pub fn sdat(&self, x: Var<'t, S>) -> Result<Var<'t, S>> {
        self.cfg.check_input(&x.shape())?;
        let mut skips = Vec::with_capacity(SDAT_DEPTH);
        let mut h = x;
        for lvl in 1..=SDAT_DEPTH {
            if lvl > 1 {
                h = self.down(h, &format!("sdat.down{lvl}"))?;
            }
            h = self.conv_bn(&format!("sdat.enc{lvl}.pre"))?.forward(h, self.ctx)?;
            h = self.deform_bn(&format!("sdat.enc{lvl}.deform"))?.forward(h, self.ctx)?;
            skips.push(h);
        }
        skips.pop();
        for lvl in (1..SDAT_DEPTH).rev() {
            let up = self
                .deform_bn(&format!("sdat.dec{lvl}.up"))?
                .forward_up(h, HALVE, self.ctx)?;
            let cat = Var::concat(&[up, skips[lvl - 1]])?;
            h = self.conv_bn(&format!("sdat.dec{lvl}.fuse"))?.forward(cat, self.ctx)?;
        }
        let proj = crate::nn::conv3d(h, &self.conv_bias("sdat.head")?)?;
        x.add(proj)
    }

    /// Enhancement network: `N×C×T×H×W` in, restored centre frame
    /// `N×C×H×W` out. Clamps to `[0, 1]` in infer mode.
    pub fn edp(&self, x: Var<'t, S>) -> Result<Var<'t, S>> {
        self.cfg.check_input(&x.shape())?;
        let s = x.shape();
        let ctx = self.ctx;
        let h = self.conv_bn("edp.entry")?.forward(x, ctx)?;
        let e1 = res_mamba_block(h, &self.res_mamba("edp.enc1")?, ctx)?;
        let h = self.down(e1, "edp.down2")?;
        let e2 = res_mamba_block(h, &self.res_mamba("edp.enc2")?, ctx)?;
        let h = self.down(e2, "edp.down3")?;
        let e3 = res_mamba_block(h, &self.res_mamba("edp.enc3")?, ctx)?;
        let mut h = self.double_conv(e3, "edp.bottom")?;
        for (lvl, skip) in [(2, e2), (1, e1)] {
            let up = self
                .deform_bn(&format!("edp.dec{lvl}.up"))?
                .forward_up(h, HALVE, ctx)?;
            h = self.double_conv(Var::concat(&[up, skip])?, &format!("edp.dec{lvl}"))?;
        }
        let mut exit = self.conv_bn("edp.exit")?;
        exit.conv.padding = [0, 0, 0];
        let mut r = exit.forward(h, ctx)?;
        for a in 1..=2 {
            r = attn_block(r, &self.attn(&format!("edp.attn{a}"))?, self.cfg.attn_window)?;
        }
        let r = crate::nn::conv3d(r, &self.conv_bias("edp.head")?)?;
        let centre = x.select_frame(s[2] / 2)?;
        let out = centre.add(r)?.reshape(&[s[0], s[1], s[3], s[4]])?;
        Ok(match ctx.mode {
            Mode::Infer => out.clamp(0.0, 1.0),
            Mode::Train => out,
        })
    }

    /// SDAT followed by EDP.
    pub fn mamat(&self, x: Var<'t, S>) -> Result<Var<'t, S>> {
        self.edp(self.sdat(x)?)
    }
}

/// Output of one forward pass on a fresh tape.
pub struct Forward<S: Real> {
    pub output: Tensor<S>,
    pub stats: BTreeMap<String, RunningStats<S>>,
}

impl<S: Real> ModelWeights<S> {
    /// Restores the centre frame of each window in `x` (`N×C×T×H×W`).
    pub fn forward(&self, x: &Tensor<S>, mode: Mode) -> Result<Forward<S>> {
        let tape = Tape::inference();
        let vars = self.bind(&tape);
        let ctx = NormCtx::new(mode);
        let net = Net {
            cfg: &self.config,
            vars: &vars,
            buffers: &self.buffers,
            ctx: &ctx,
        };
        let out = net.mamat(tape.constant(x.clone()))?;
        let output = out.value().as_ref().clone();
        drop(net);
        Ok(Forward {
            output,
            stats: ctx.into_updates(),
        })
    }

    /// Registration stage only.
    pub fn register(&self, x: &Tensor<S>, mode: Mode) -> Result<Tensor<S>> {
        let tape = Tape::inference();
        let vars = self.bind(&tape);
        let ctx = NormCtx::new(mode);
        let net = Net {
            cfg: &self.config,
            vars: &vars,
            buffers: &self.buffers,
            ctx: &ctx,
        };
        let out = net.sdat(tape.constant(x.clone()))?;
        let v = out.value().as_ref().clone();
        Ok(v)
    }
}
