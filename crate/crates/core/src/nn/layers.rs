//! Composite conv + norm + activation layers and the bookkeeping for batch
//! norm running statistics.

use std::cell::RefCell;
use std::collections::BTreeMap;

use crate::autodiff::Var;
use crate::error::Result;
use crate::nn::conv::{conv3d, Conv3dParams};
use crate::nn::deform::{deform_conv3d, upconv3d, DeformConv3dParams};
use crate::nn::norm::{batchnorm3d, Mode, NormParams, RunningStats};
use crate::tensor::Real;

/// Forward-pass context: the norm mode plus the running statistics produced
/// by train-mode batch norms, keyed by layer name.
#[derive(Debug)]
pub struct NormCtx<S: Real> {
    pub mode: Mode,
    updates: RefCell<BTreeMap<String, RunningStats<S>>>,
}

impl<S: Real> NormCtx<S> {
    pub fn new(mode: Mode) -> Self {
        Self {
            mode,
            updates: RefCell::new(BTreeMap::new()),
        }
    }

    pub fn norm<'t>(&self, x: Var<'t, S>, name: &str, p: &NormParams<'t, S>) -> Result<Var<'t, S>> {
        let (y, stats) = batchnorm3d(x, p, self.mode)?;
        if let Some(stats) = stats {
            self.updates.borrow_mut().insert(name.to_string(), stats);
        }
        Ok(y)
    }

    pub fn into_updates(self) -> BTreeMap<String, RunningStats<S>> {
        self.updates.into_inner()
    }
}

/// Convolution followed by batch norm and ReLU.
#[derive(Clone, Debug)]
pub struct ConvBn<'t, S: Real> {
    pub name: String,
    pub conv: Conv3dParams<'t, S>,
    pub norm: NormParams<'t, S>,
}

impl<'t, S: Real> ConvBn<'t, S> {
    pub fn forward(&self, x: Var<'t, S>, ctx: &NormCtx<S>) -> Result<Var<'t, S>> {
        Ok(ctx.norm(conv3d(x, &self.conv)?, &self.name, &self.norm)?.relu())
    }
}

/// Deformable convolution followed by batch norm and ReLU.
#[derive(Clone, Debug)]
pub struct DeformBn<'t, S: Real> {
    pub name: String,
    pub deform: DeformConv3dParams<'t, S>,
    pub norm: NormParams<'t, S>,
}

impl<'t, S: Real> DeformBn<'t, S> {
    pub fn forward(&self, x: Var<'t, S>, ctx: &NormCtx<S>) -> Result<Var<'t, S>> {
        Ok(ctx.norm(deform_conv3d(x, &self.deform)?, &self.name, &self.norm)?.relu())
    }

    /// Nearest upsampling by `scale` before the deformable convolution.
    pub fn forward_up(&self, x: Var<'t, S>, scale: [usize; 3], ctx: &NormCtx<S>) -> Result<Var<'t, S>> {
        Ok(ctx.norm(upconv3d(x, &self.deform, scale)?, &self.name, &self.norm)?.relu())
    }
}
