//! Batch normalization over `(N, T, H, W)` and per-position channel
//! normalization for the attention blocks.

use crate::autodiff::{Backward, Var};
use crate::error::{Error, Result};
use crate::nn::conv::split5;
use crate::tensor::{Real, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Infer,
}

pub const BN_MOMENTUM: f64 = 0.1;
pub const BN_EPS: f64 = 1e-5;
pub const LN_EPS: f64 = 1e-5;

#[derive(Clone, Debug, PartialEq)]
pub struct RunningStats<S: Real> {
    pub mean: Tensor<S>,
    pub var: Tensor<S>,
}

#[derive(Clone, Debug)]
pub struct NormParams<'t, S: Real> {
    pub gamma: Var<'t, S>,
    pub beta: Var<'t, S>,
    pub running: RunningStats<S>,
    pub momentum: f64,
    pub eps: f64,
}

struct BatchNormTrainOp<S> {
    xhat: Vec<S>,
    inv_std: Vec<S>,
    channels: usize,
    plane: usize,
}

impl<S: Real> Backward<S> for BatchNormTrainOp<S> {
    fn name(&self) -> &'static str {
        "batchnorm3d"
    }

    fn backward(
        &self,
        grad: &Tensor<S>,
        inputs: &[&Tensor<S>],
        _output: &Tensor<S>,
        needs: &[bool],
    ) -> Vec<Option<Tensor<S>>> {
        let (x, gamma) = (inputs[0], inputs[1]);
        let c_n = self.channels;
        let batch = x.len() / (c_n * self.plane);
        let count = S::from_f64((batch * self.plane) as f64);
        let g = grad.data();
        let mut dgamma = vec![S::zero(); c_n];
        let mut dbeta = vec![S::zero(); c_n];
        for n in 0..batch {
            for c in 0..c_n {
                let r = (n * c_n + c) * self.plane..(n * c_n + c + 1) * self.plane;
                for i in r {
                    dbeta[c] = dbeta[c] + g[i];
                    dgamma[c] = dgamma[c] + g[i] * self.xhat[i];
                }
            }
        }
        let dx = needs[0].then(|| {
            let mut dx = vec![S::zero(); x.len()];
            for n in 0..batch {
                for c in 0..c_n {
                    let k = gamma.data()[c] * self.inv_std[c];
                    let mean_g = dbeta[c] / count;
                    let mean_gx = dgamma[c] / count;
                    let r = (n * c_n + c) * self.plane..(n * c_n + c + 1) * self.plane;
                    for i in r {
                        dx[i] = k * (g[i] - mean_g - self.xhat[i] * mean_gx);
                    }
                }
            }
            Tensor::from_parts(x.shape().to_vec(), dx)
        });
        vec![
            dx,
            needs[1].then(|| Tensor::from_parts(vec![c_n], dgamma)),
            needs[2].then(|| Tensor::from_parts(vec![c_n], dbeta)),
        ]
    }
}

struct BatchNormInferOp<S> {
    xhat: Vec<S>,
    inv_std: Vec<S>,
    channels: usize,
    plane: usize,
}

impl<S: Real> Backward<S> for BatchNormInferOp<S> {
    fn name(&self) -> &'static str {
        "batchnorm3d_infer"
    }

    fn backward(
        &self,
        grad: &Tensor<S>,
        inputs: &[&Tensor<S>],
        _output: &Tensor<S>,
        needs: &[bool],
    ) -> Vec<Option<Tensor<S>>> {
        let (x, gamma) = (inputs[0], inputs[1]);
        let c_n = self.channels;
        let batch = x.len() / (c_n * self.plane);
        let g = grad.data();
        let mut dx = vec![S::zero(); x.len()];
        let mut dgamma = vec![S::zero(); c_n];
        let mut dbeta = vec![S::zero(); c_n];
        for n in 0..batch {
            for c in 0..c_n {
                let k = gamma.data()[c] * self.inv_std[c];
                for i in (n * c_n + c) * self.plane..(n * c_n + c + 1) * self.plane {
                    dx[i] = k * g[i];
                    dgamma[c] = dgamma[c] + g[i] * self.xhat[i];
                    dbeta[c] = dbeta[c] + g[i];
                }
            }
        }
        vec![
            needs[0].then(|| Tensor::from_parts(x.shape().to_vec(), dx)),
            needs[1].then(|| Tensor::from_parts(vec![c_n], dgamma)),
            needs[2].then(|| Tensor::from_parts(vec![c_n], dbeta)),
        ]
    }
}

/// Per-channel normalization of an `N×C×T×H×W` tensor.
///
/// Train mode normalizes with batch statistics and returns the updated
/// running statistics; infer mode uses the stored running statistics and
/// returns `None`.
pub fn batchnorm3d<'t, S: Real>(
    x: Var<'t, S>,
    p: &NormParams<'t, S>,
    mode: Mode,
) -> Result<(Var<'t, S>, Option<RunningStats<S>>)> {
    if !(p.eps > 0.0) {
        return Err(Error::domain("batchnorm3d", "eps must be positive"));
    }
    let xv = x.value();
    let [n, c_n, t, h, w] = split5(xv.shape(), "batchnorm3d")?;
    let plane = t * h * w;
    let gamma = p.gamma.value();
    let beta = p.beta.value();
    for (what, v) in [
        ("gamma", gamma.shape()),
        ("beta", beta.shape()),
        ("running mean", p.running.mean.shape()),
        ("running var", p.running.var.shape()),
    ] {
        if v != [c_n] {
            return Err(Error::domain("batchnorm3d", format!("{what} shape {v:?} for {c_n} channels")));
        }
    }
    let count = n * plane;
    let eps = S::from_f64(p.eps);
    let (mean, var) = match mode {
        Mode::Train => {
            let mut mean = vec![S::zero(); c_n];
            let mut var = vec![S::zero(); c_n];
            for c in 0..c_n {
                let mut acc = 0.0f64;
                for b in 0..n {
                    let s = &xv.data()[(b * c_n + c) * plane..(b * c_n + c + 1) * plane];
                    acc += s.iter().map(|v| v.as_f64()).sum::<f64>();
                }
                let m = acc / count as f64;
                let mut sq = 0.0f64;
                for b in 0..n {
                    let s = &xv.data()[(b * c_n + c) * plane..(b * c_n + c + 1) * plane];
                    sq += s.iter().map(|v| (v.as_f64() - m).powi(2)).sum::<f64>();
                }
                mean[c] = S::from_f64(m);
                var[c] = S::from_f64(sq / count as f64);
            }
            (mean, var)
        }
        Mode::Infer => (p.running.mean.data().to_vec(), p.running.var.data().to_vec()),
    };
    let inv_std: Vec<S> = var.iter().map(|&v| S::one() / (v + eps).sqrt()).collect();
    let mut xhat = vec![S::zero(); xv.len()];
    let mut out = vec![S::zero(); xv.len()];
    for b in 0..n {
        for c in 0..c_n {
            for i in (b * c_n + c) * plane..(b * c_n + c + 1) * plane {
                xhat[i] = (xv.data()[i] - mean[c]) * inv_std[c];
                out[i] = gamma.data()[c] * xhat[i] + beta.data()[c];
            }
        }
    }
    let out = Tensor::from_parts(xv.shape().to_vec(), out);
    let inputs = [x, p.gamma, p.beta];
    match mode {
        Mode::Train => {
            let m = S::from_f64(p.momentum);
            let unbias = if count > 1 {
                S::from_f64(count as f64 / (count - 1) as f64)
            } else {
                S::one()
            };
            let running = RunningStats {
                mean: p.running.mean.map_with(&mean, |r, b| (S::one() - m) * r + m * b),
                var: p.running.var.map_with(&var, |r, b| (S::one() - m) * r + m * b * unbias),
            };
            let y = x.tape().record(
                out,
                &inputs,
                BatchNormTrainOp {
                    xhat,
                    inv_std,
                    channels: c_n,
                    plane,
                },
            );
            Ok((y, Some(running)))
        }
        Mode::Infer => {
            let y = x.tape().record(
                out,
                &inputs,
                BatchNormInferOp {
                    xhat,
                    inv_std,
                    channels: c_n,
                    plane,
                },
            );
            Ok((y, None))
        }
    }
}

struct ChannelNormOp<S> {
    xhat: Vec<S>,
    inv_std: Vec<S>,
    channels: usize,
    plane: usize,
}

impl<S: Real> Backward<S> for ChannelNormOp<S> {
    fn name(&self) -> &'static str {
        "channel_norm"
    }

    fn backward(
        &self,
        grad: &Tensor<S>,
        inputs: &[&Tensor<S>],
        _output: &Tensor<S>,
        needs: &[bool],
    ) -> Vec<Option<Tensor<S>>> {
        let (x, gamma) = (inputs[0], inputs[1]);
        let (c_n, plane) = (self.channels, self.plane);
        let batch = x.len() / (c_n * plane);
        let g = grad.data();
        let cf = S::from_f64(c_n as f64);
        let mut dx = vec![S::zero(); x.len()];
        let mut dgamma = vec![S::zero(); c_n];
        let mut dbeta = vec![S::zero(); c_n];
        for b in 0..batch {
            for pos in 0..plane {
                let idx = |c: usize| (b * c_n + c) * plane + pos;
                let mut mean_gg = S::zero();
                let mut mean_ggx = S::zero();
                for c in 0..c_n {
                    let i = idx(c);
                    let gg = g[i] * gamma.data()[c];
                    mean_gg = mean_gg + gg;
                    mean_ggx = mean_ggx + gg * self.xhat[i];
                    dgamma[c] = dgamma[c] + g[i] * self.xhat[i];
                    dbeta[c] = dbeta[c] + g[i];
                }
                mean_gg = mean_gg / cf;
                mean_ggx = mean_ggx / cf;
                let k = self.inv_std[b * plane + pos];
                for c in 0..c_n {
                    let i = idx(c);
                    dx[i] = k * (g[i] * gamma.data()[c] - mean_gg - self.xhat[i] * mean_ggx);
                }
            }
        }
        vec![
            needs[0].then(|| Tensor::from_parts(x.shape().to_vec(), dx)),
            needs[1].then(|| Tensor::from_parts(vec![c_n], dgamma)),
            needs[2].then(|| Tensor::from_parts(vec![c_n], dbeta)),
        ]
    }
}

/// Normalizes across channels at every position of an `N×C×…` tensor, then
/// applies a per-channel scale and shift.
pub fn channel_norm<'t, S: Real>(x: Var<'t, S>, gamma: Var<'t, S>, beta: Var<'t, S>) -> Result<Var<'t, S>> {
    let xv = x.value();
    let s = xv.shape();
    if s.len() < 2 {
        return Err(Error::shape(s, "channel_norm needs rank ≥ 2"));
    }
    let (batch, c_n) = (s[0], s[1]);
    let plane = xv.len() / (batch * c_n);
    let gv = gamma.value();
    let bv = beta.value();
    if gv.shape() != [c_n] || bv.shape() != [c_n] {
        return Err(Error::mismatch("channel_norm affine", gv.shape(), &[c_n]));
    }
    let eps = S::from_f64(LN_EPS);
    let cf = S::from_f64(c_n as f64);
    let mut xhat = vec![S::zero(); xv.len()];
    let mut out = vec![S::zero(); xv.len()];
    let mut inv_std = vec![S::zero(); batch * plane];
    let d = xv.data();
    for b in 0..batch {
        for pos in 0..plane {
            let idx = |c: usize| (b * c_n + c) * plane + pos;
            let mean = (0..c_n).map(|c| d[idx(c)]).sum::<S>() / cf;
            let var = (0..c_n).map(|c| (d[idx(c)] - mean).powi(2)).sum::<S>() / cf;
            let k = S::one() / (var + eps).sqrt();
            inv_std[b * plane + pos] = k;
            for c in 0..c_n {
                let i = idx(c);
                xhat[i] = (d[i] - mean) * k;
                out[i] = gv.data()[c] * xhat[i] + bv.data()[c];
            }
        }
    }
    let out = Tensor::from_parts(s.to_vec(), out);
    Ok(x.tape().record(
        out,
        &[x, gamma, beta],
        ChannelNormOp {
            xhat,
            inv_std,
            channels: c_n,
            plane,
        },
    ))
}

impl<S: Real> Tensor<S> {
    fn map_with(&self, other: &[S], f: impl Fn(S, S) -> S) -> Tensor<S> {
        let data = self.data().iter().zip(other).map(|(&a, &b)| f(a, b)).collect();
        Tensor::from_parts(self.shape().to_vec(), data)
    }
}
