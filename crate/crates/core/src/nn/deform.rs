//! Deformable 3D convolution with trilinear sampling.
//!
//! `y(p0) = Σ_n w(p_n) · x(p0 + p_n + Δp_n)` over a 3×3×3 grid. Offsets come
//! from a separate convolution producing `3·27` channels, channel `3·k + a`
//! holding the displacement of tap `k` (lexicographic `(t, y, x)` order) along
//! axis `a ∈ {t, y, x}`. Offsets are shared across input channels.

use crate::autodiff::{Backward, Var};
use crate::error::{Error, Result};
use crate::nn::conv::{conv3d, split5, upsample_nearest, Conv3dParams, LinearCols};
use crate::tensor::{Real, Tensor};

/// Deformable grid side; `|G| = 27`.
pub const GRID: usize = 3;
pub const TAPS: usize = GRID * GRID * GRID;
pub const OFFSET_CHANNELS: usize = 3 * TAPS;

/// Linear interpolation weights along one axis, after clamping to `[-1, extent]`.
#[derive(Clone, Copy, Debug)]
struct AxisSample<S> {
    lo: isize,
    frac: S,
    /// Whether the coordinate sat inside the clamp range (else dq = 0).
    live: bool,
}

fn axis_sample<S: Real>(q: S, extent: usize) -> AxisSample<S> {
    let hi = S::from_f64(extent as f64);
    let lo_bound = -S::one();
    let live = q >= lo_bound && q <= hi;
    let qc = q.max(lo_bound).min(hi);
    let lo = qc.floor();
    AxisSample {
        lo: lo.as_f64() as isize,
        frac: qc - lo,
        live,
    }
}

/// Trilinear sample of a `T×H×W` volume at fractional `(t, y, x)`; voxels
/// outside the volume read as zero.
pub fn trilinear_sample<S: Real>(vol: &[S], dims: [usize; 3], q: [S; 3]) -> S {
    let s = [
        axis_sample(q[0], dims[0]),
        axis_sample(q[1], dims[1]),
        axis_sample(q[2], dims[2]),
    ];
    let mut acc = S::zero();
    for corner in 0..8 {
        if let Some((idx, w, _)) = corner_weight(&s, dims, corner) {
            acc = acc + w * vol[idx];
        }
    }
    acc
}

/// Gradient of [`trilinear_sample`] with respect to the coordinate.
pub fn trilinear_sample_grad<S: Real>(vol: &[S], dims: [usize; 3], q: [S; 3]) -> [S; 3] {
    let s = [
        axis_sample(q[0], dims[0]),
        axis_sample(q[1], dims[1]),
        axis_sample(q[2], dims[2]),
    ];
    let mut g = [S::zero(); 3];
    for corner in 0..8 {
        if let Some((idx, _, dw)) = corner_weight(&s, dims, corner) {
            for a in 0..3 {
                g[a] = g[a] + dw[a] * vol[idx];
            }
        }
    }
    g
}

/// Index, weight and d(weight)/dq of one of the 8 corners, or `None` if the
/// corner lies outside the volume.
#[inline]
fn corner_weight<S: Real>(s: &[AxisSample<S>; 3], dims: [usize; 3], corner: usize) -> Option<(usize, S, [S; 3])> {
    let mut idx = 0usize;
    let mut f = [S::zero(); 3];
    let mut df = [S::zero(); 3];
    for a in 0..3 {
        let bit = (corner >> (2 - a)) & 1;
        let i = s[a].lo + bit as isize;
        if i < 0 || i >= dims[a] as isize {
            return None;
        }
        idx = idx * dims[a] + i as usize;
        if bit == 1 {
            f[a] = s[a].frac;
            df[a] = if s[a].live { S::one() } else { S::zero() };
        } else {
            f[a] = S::one() - s[a].frac;
            df[a] = if s[a].live { -S::one() } else { S::zero() };
        }
    }
    let w = f[0] * f[1] * f[2];
    let dw = [df[0] * f[1] * f[2], f[0] * df[1] * f[2], f[0] * f[1] * df[2]];
    Some((idx, w, dw))
}

/// Sampling geometry of one output voxel and tap, shared by all channels.
#[derive(Clone, Copy)]
struct Site<S> {
    axes: [AxisSample<S>; 3],
}

struct DeformOp<S> {
    lin: LinearCols<S>,
    /// Per batch entry, `TAPS × P` sampling sites.
    sites: Vec<Vec<Site<S>>>,
    cin: usize,
    dims: [usize; 3],
}

impl<S: Real> Backward<S> for DeformOp<S> {
    fn name(&self) -> &'static str {
        "deform_conv3d"
    }

    fn backward(
        &self,
        grad: &Tensor<S>,
        inputs: &[&Tensor<S>],
        _output: &Tensor<S>,
        needs: &[bool],
    ) -> Vec<Option<Tensor<S>>> {
        let (x, offsets, w) = (inputs[0], inputs[1], inputs[2]);
        let g = grad.data();
        let p = self.lin.p;
        let vol = self.dims.iter().product::<usize>();
        let mut dx = needs[0].then(|| vec![S::zero(); x.len()]);
        let mut doff = needs[1].then(|| vec![S::zero(); offsets.len()]);
        if dx.is_some() || doff.is_some() {
            for (n, sites) in self.sites.iter().enumerate() {
                let dcols = self.lin.cols_grad(w.data(), g, n);
                for c in 0..self.cin {
                    let xc = &x.data()[(n * self.cin + c) * vol..(n * self.cin + c + 1) * vol];
                    for k in 0..TAPS {
                        let row = &dcols[(c * TAPS + k) * p..(c * TAPS + k + 1) * p];
                        for o in 0..p {
                            let gc = row[o];
                            if gc == S::zero() {
                                continue;
                            }
                            let site = &sites[k * p + o];
                            for corner in 0..8 {
                                if let Some((idx, wt, dw)) = corner_weight(&site.axes, self.dims, corner) {
                                    if let Some(dx) = dx.as_mut() {
                                        let i = (n * self.cin + c) * vol + idx;
                                        dx[i] = dx[i] + gc * wt;
                                    }
                                    if let Some(doff) = doff.as_mut() {
                                        let v = gc * xc[idx];
                                        for a in 0..3 {
                                            let j = (n * OFFSET_CHANNELS + 3 * k + a) * p + o;
                                            doff[j] = doff[j] + v * dw[a];
                                        }
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
        let mut out = vec![
            dx.map(|d| Tensor::from_parts(x.shape().to_vec(), d)),
            doff.map(|d| Tensor::from_parts(offsets.shape().to_vec(), d)),
            needs[2].then(|| Tensor::from_parts(w.shape().to_vec(), self.lin.weight_grad(g))),
        ];
        if inputs.len() == 4 {
            out.push(needs[3].then(|| Tensor::from_parts(inputs[3].shape().to_vec(), self.lin.bias_grad(g))));
        }
        out
    }
}

/// The sampling half of a deformable convolution: given precomputed
/// `offsets: N×81×T×H×W`, evaluates the deformed 3×3×3 correlation.
pub fn deform_sample_conv<'t, S: Real>(
    x: Var<'t, S>,
    offsets: Var<'t, S>,
    weight: Var<'t, S>,
    bias: Option<Var<'t, S>>,
) -> Result<Var<'t, S>> {
    let xv = x.value();
    let ov = offsets.value();
    let wv = weight.value();
    let [n, cin, t, h, w] = split5(xv.shape(), "deform_conv3d input")?;
    let [cout, wcin, kt, kh, kw] = split5(wv.shape(), "deform_conv3d weight")?;
    if wcin != cin {
        return Err(Error::mismatch("deform_conv3d channels", xv.shape(), wv.shape()));
    }
    if [kt, kh, kw] != [GRID; 3] {
        return Err(Error::shape(wv.shape(), "deformable grid must be 3×3×3"));
    }
    if ov.shape() != [n, OFFSET_CHANNELS, t, h, w] {
        return Err(Error::mismatch(
            "deform_conv3d offsets",
            ov.shape(),
            &[n, OFFSET_CHANNELS, t, h, w],
        ));
    }
    let bias_v = bias.map(|b| b.value());
    if let Some(b) = &bias_v {
        if b.shape() != [cout] {
            return Err(Error::mismatch("deform_conv3d bias", b.shape(), &[cout]));
        }
    }
    let dims = [t, h, w];
    let p = t * h * w;
    let vol = p;
    let rows = cin * TAPS;
    let mut all_sites = Vec::with_capacity(n);
    let mut all_cols = Vec::with_capacity(n);
    for b in 0..n {
        let off = &ov.data()[b * OFFSET_CHANNELS * p..(b + 1) * OFFSET_CHANNELS * p];
        let mut sites = Vec::with_capacity(TAPS * p);
        for k in 0..TAPS {
            let tap = [
                (k / 9) as f64 - 1.0,
                ((k / 3) % 3) as f64 - 1.0,
                (k % 3) as f64 - 1.0,
            ];
            let mut o = 0;
            for ot in 0..t {
                for oy in 0..h {
                    for ox in 0..w {
                        let base = [ot as f64, oy as f64, ox as f64];
                        let mut axes = [axis_sample(S::zero(), 1); 3];
                        for a in 0..3 {
                            let q = S::from_f64(base[a] + tap[a]) + off[(3 * k + a) * p + o];
                            axes[a] = axis_sample(q, dims[a]);
                        }
                        sites.push(Site { axes });
                        o += 1;
                    }
                }
            }
        }
        let mut cols = vec![S::zero(); rows * p];
        for c in 0..cin {
            let xc = &xv.data()[(b * cin + c) * vol..(b * cin + c + 1) * vol];
            for k in 0..TAPS {
                let dst = &mut cols[(c * TAPS + k) * p..(c * TAPS + k + 1) * p];
                for (o, d) in dst.iter_mut().enumerate() {
                    let site = &sites[k * p + o];
                    let mut acc = S::zero();
                    for corner in 0..8 {
                        if let Some((idx, wt, _)) = corner_weight(&site.axes, dims, corner) {
                            acc = acc + wt * xc[idx];
                        }
                    }
                    *d = acc;
                }
            }
        }
        all_sites.push(sites);
        all_cols.push(cols);
    }
    let lin = LinearCols {
        cols: all_cols,
        cout,
        rows,
        p,
    };
    let out = lin.forward(wv.data(), bias_v.as_deref().map(|b| b.data()));
    let out = Tensor::from_parts(vec![n, cout, t, h, w], out);
    let mut inputs = vec![x, offsets, weight];
    inputs.extend(bias);
    Ok(x.tape().record(
        out,
        &inputs,
        DeformOp {
            lin,
            sites: all_sites,
            cin,
            dims,
        },
    ))
}

/// Main 3×3×3 kernel plus the offset-predicting branch.
#[derive(Clone, Copy, Debug)]
pub struct DeformConv3dParams<'t, S: Real> {
    pub main: Conv3dParams<'t, S>,
    /// Produces the 81 offset channels from the block input.
    pub offset: Conv3dParams<'t, S>,
}

/// Deformable convolution: offsets are predicted from `x` by the offset
/// branch, then the main kernel is applied at the displaced sample points.
pub fn deform_conv3d<'t, S: Real>(x: Var<'t, S>, p: &DeformConv3dParams<'t, S>) -> Result<Var<'t, S>> {
    let offsets = conv3d(x, &p.offset)?;
    deform_sample_conv(x, offsets, p.main.weight, p.main.bias)
}

/// Deformable stand-in for a transposed convolution: nearest upsampling by
/// `scale`, then [`deform_conv3d`].
pub fn upconv3d<'t, S: Real>(
    x: Var<'t, S>,
    p: &DeformConv3dParams<'t, S>,
    scale: [usize; 3],
) -> Result<Var<'t, S>> {
    let up = upsample_nearest(x, scale)?;
    deform_conv3d(up, p)
}
