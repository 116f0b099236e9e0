//! Selective state-space layer: zero-order-hold discretization, the scan
//! recurrence, four-direction token orders and the Mamba-in-convolution
//! blocks built on them.

use crate::autodiff::{Backward, Var};
use crate::error::{Error, Result};
use crate::nn::conv::{conv3d, split5, Conv3dParams};
use crate::nn::layers::{ConvBn, NormCtx};
use crate::tensor::{Real, Tensor};

/// Below this `|Δ·A|` the input coefficient uses its first-order expansion.
pub const SMALL_ARG: f64 = 1e-6;

/// `(Ā, Δ·φ(Δ·A))` with `φ(z) = (eᶻ − 1)/z`, so that `B̄ = coef · B`.
#[inline]
fn zoh<S: Real>(a: S, delta: S) -> (S, S) {
    let z = delta * a;
    let abar = z.exp();
    let coef = if z.abs() < S::from_f64(SMALL_ARG) {
        delta * (S::one() + z / S::from_f64(2.0))
    } else {
        delta * (z.exp_m1() / z)
    };
    (abar, coef)
}

/// [`zoh`] plus the partial derivatives of the input coefficient with
/// respect to Δ and A: `(Ā, coef, ∂coef/∂Δ, ∂coef/∂A)`.
#[inline]
pub(crate) fn zoh_grad<S: Real>(a: S, delta: S) -> (S, S, S, S) {
    let z = delta * a;
    let abar = z.exp();
    let half = S::from_f64(0.5);
    if z.abs() < S::from_f64(SMALL_ARG) {
        (abar, delta * (S::one() + z * half), S::one() + z, delta * delta * half)
    } else {
        let em1 = z.exp_m1();
        (abar, delta * (em1 / z), abar, delta * delta * (z * abar - em1) / (z * z))
    }
}

/// Zero-order-hold discretization of one diagonal entry.
///
/// Returns `(Ā, B̄) = (exp(ΔA), (ΔA)⁻¹(exp(ΔA) − 1)·ΔB)`.
pub fn discretize<S: Real>(a: S, delta: S, b: S) -> Result<(S, S)> {
    if !(a < S::zero()) {
        return Err(Error::domain("discretize", format!("A entry {a} must be negative")));
    }
    if !(delta > S::zero()) {
        return Err(Error::domain("discretize", format!("delta {delta} must be positive")));
    }
    let (abar, coef) = zoh(a, delta);
    Ok((abar, coef * b))
}

/// Input coefficient of [`discretize`] using the closed form regardless of
/// the argument size.
pub fn bbar_exact(a: f64, delta: f64, b: f64) -> f64 {
    let z = delta * a;
    delta * (z.exp_m1() / z) * b
}

/// Input coefficient of [`discretize`] using the small-argument expansion.
pub fn bbar_series(a: f64, delta: f64, b: f64) -> f64 {
    delta * (1.0 + delta * a / 2.0) * b
}

/// Literal recurrence `h_t = Ā_t ⊙ h_{t−1} + B̄_t·x_t`, `y_t = ⟨C_t, h_t⟩ + D·x_t`
/// from `h_0 = 0`. `abar`, `bbar`, `c` are `L×d` row-major.
pub fn ssm_scan<S: Real>(abar: &[S], bbar: &[S], c: &[S], x: &[S], skip: S) -> Result<Vec<S>> {
    let len = x.len();
    if len == 0 {
        return Err(Error::domain("ssm_scan", "empty sequence"));
    }
    let d = abar.len() / len;
    if d == 0 || abar.len() != len * d || bbar.len() != len * d || c.len() != len * d {
        return Err(Error::domain(
            "ssm_scan",
            format!("coefficient lengths {}/{}/{} for {len} steps", abar.len(), bbar.len(), c.len()),
        ));
    }
    let mut h = vec![S::zero(); d];
    let mut y = Vec::with_capacity(len);
    for t in 0..len {
        let mut acc = S::zero();
        for k in 0..d {
            h[k] = abar[t * d + k] * h[k] + bbar[t * d + k] * x[t];
            acc = acc + c[t * d + k] * h[k];
        }
        y.push(acc + skip * x[t]);
    }
    Ok(y)
}

struct Dims {
    batch: usize,
    channels: usize,
    state: usize,
    len: usize,
}

struct SelectiveScanOp {
    dims: Dims,
}

/// Reads the `(n, c)` row of an `N×C×L` buffer.
fn row<S>(v: &[S], n: usize, c: usize, channels: usize, len: usize) -> &[S] {
    let at = (n * channels + c) * len;
    &v[at..at + len]
}

fn scan_row<S: Real>(
    x: &[S],
    delta: &[S],
    a: &[S],
    b: &[S],
    cm: &[S],
    skip: S,
    d: usize,
    len: usize,
    history: Option<&mut Vec<S>>,
) -> Vec<S> {
    let mut h = vec![S::zero(); d];
    let mut y = Vec::with_capacity(len);
    let mut hist = history;
    for t in 0..len {
        let mut acc = S::zero();
        for k in 0..d {
            let (abar, coef) = zoh(a[k], delta[t]);
            let bbar = coef * b[k * len + t];
            h[k] = abar * h[k] + bbar * x[t];
            acc = acc + cm[k * len + t] * h[k];
        }
        if let Some(hs) = hist.as_deref_mut() {
            hs.extend_from_slice(&h);
        }
        y.push(acc + skip * x[t]);
    }
    y
}

impl<S: Real> Backward<S> for SelectiveScanOp {
    fn name(&self) -> &'static str {
        "selective_scan"
    }

    fn backward(
        &self,
        grad: &Tensor<S>,
        inputs: &[&Tensor<S>],
        _output: &Tensor<S>,
        needs: &[bool],
    ) -> Vec<Option<Tensor<S>>> {
        let Dims {
            batch,
            channels,
            state: d,
            len,
        } = self.dims;
        let [x, delta, a_log, b, cm, skip] = [0, 1, 2, 3, 4, 5].map(|i| inputs[i].data());
        let g = grad.data();
        let mut dx = vec![S::zero(); x.len()];
        let mut ddelta = vec![S::zero(); delta.len()];
        let mut da_log = vec![S::zero(); a_log.len()];
        let mut db = vec![S::zero(); b.len()];
        let mut dc = vec![S::zero(); cm.len()];
        let mut dskip = vec![S::zero(); channels];
        let mut hist = Vec::with_capacity(len * d);
        let mut dh = vec![S::zero(); d];
        for n in 0..batch {
            let bn = &b[n * d * len..(n + 1) * d * len];
            let cn = &cm[n * d * len..(n + 1) * d * len];
            for c in 0..channels {
                let a: Vec<S> = a_log[c * d..(c + 1) * d].iter().map(|&v| -v.exp()).collect();
                let xr = row(x, n, c, channels, len);
                let dr = row(delta, n, c, channels, len);
                let gr = row(g, n, c, channels, len);
                hist.clear();
                scan_row(xr, dr, &a, bn, cn, skip[c], d, len, Some(&mut hist));
                let mut da = vec![S::zero(); d];
                dh.iter_mut().for_each(|v| *v = S::zero());
                let base = (n * channels + c) * len;
                for t in (0..len).rev() {
                    let xt = xr[t];
                    let dt = dr[t];
                    let gt = gr[t];
                    dskip[c] = dskip[c] + gt * xt;
                    let mut dxt = skip[c] * gt;
                    let mut ddt = S::zero();
                    for k in 0..d {
                        let h = hist[t * d + k];
                        let h_prev = if t > 0 { hist[(t - 1) * d + k] } else { S::zero() };
                        let ck = cn[k * len + t];
                        let bk = bn[k * len + t];
                        dc[n * d * len + k * len + t] = dc[n * d * len + k * len + t] + gt * h;
                        // Adjoint of h_t: output read-out plus the carry from t+1
                        // (already scaled by Ā_{t+1} in the previous iteration).
                        let adj = dh[k] + ck * gt;
                        let ak = a[k];
                        let (abar, coef, dcoef_ddelta, dcoef_da) = zoh_grad(ak, dt);
                        let dabar = adj * h_prev;
                        let du = adj;
                        // u = coef·B·x
                        let bx = bk * xt;
                        ddt = ddt + dabar * abar * ak + du * bx * dcoef_ddelta;
                        da[k] = da[k] + dabar * abar * dt + du * bx * dcoef_da;
                        db[n * d * len + k * len + t] = db[n * d * len + k * len + t] + du * coef * xt;
                        dxt = dxt + du * coef * bk;
                        dh[k] = adj * abar;
                    }
                    dx[base + t] = dxt;
                    ddelta[base + t] = ddt;
                }
                for k in 0..d {
                    // A = −exp(a_log) so dA/da_log = A.
                    da_log[c * d + k] = da_log[c * d + k] + da[k] * a[k];
                }
            }
        }
        let shape = |i: usize| inputs[i].shape().to_vec();
        vec![
            needs[0].then(|| Tensor::from_parts(shape(0), dx)),
            needs[1].then(|| Tensor::from_parts(shape(1), ddelta)),
            needs[2].then(|| Tensor::from_parts(shape(2), da_log)),
            needs[3].then(|| Tensor::from_parts(shape(3), db)),
            needs[4].then(|| Tensor::from_parts(shape(4), dc)),
            needs[5].then(|| Tensor::from_parts(shape(5), dskip)),
        ]
    }
}

/// Fused selective scan over `N×C×L` sequences.
///
/// `delta` is `N×C×L` (positive), `a_log` is `C×d` with `A = −exp(a_log)`,
/// `b` and `c` are `N×d×L` and shared by all channels, `skip` is `C`.
pub fn selective_scan<'t, S: Real>(
    x: Var<'t, S>,
    delta: Var<'t, S>,
    a_log: Var<'t, S>,
    b: Var<'t, S>,
    c: Var<'t, S>,
    skip: Var<'t, S>,
) -> Result<Var<'t, S>> {
    let (xv, dv, av, bv, cv, sv) = (x.value(), delta.value(), a_log.value(), b.value(), c.value(), skip.value());
    let s = xv.shape();
    if s.len() != 3 {
        return Err(Error::shape(s, "selective_scan expects N×C×L"));
    }
    let (batch, channels, len) = (s[0], s[1], s[2]);
    if dv.shape() != s {
        return Err(Error::mismatch("selective_scan delta", s, dv.shape()));
    }
    if av.rank() != 2 || av.shape()[0] != channels {
        return Err(Error::mismatch("selective_scan A", &[channels, 0], av.shape()));
    }
    let d = av.shape()[1];
    for m in [&bv, &cv] {
        if m.shape() != [batch, d, len] {
            return Err(Error::mismatch("selective_scan B/C", &[batch, d, len], m.shape()));
        }
    }
    if sv.shape() != [channels] {
        return Err(Error::mismatch("selective_scan D", &[channels], sv.shape()));
    }
    if let Some(bad) = dv.data().iter().find(|v| !(**v > S::zero())) {
        return Err(Error::domain("selective_scan", format!("non-positive delta {bad}")));
    }
    let mut out = Vec::with_capacity(xv.len());
    for n in 0..batch {
        let bn = &bv.data()[n * d * len..(n + 1) * d * len];
        let cn = &cv.data()[n * d * len..(n + 1) * d * len];
        for ch in 0..channels {
            let a: Vec<S> = av.data()[ch * d..(ch + 1) * d].iter().map(|&v| -v.exp()).collect();
            out.extend(scan_row(
                row(xv.data(), n, ch, channels, len),
                row(dv.data(), n, ch, channels, len),
                &a,
                bn,
                cn,
                sv.data()[ch],
                d,
                len,
                None,
            ));
        }
    }
    let out = Tensor::from_parts(s.to_vec(), out);
    Ok(x.tape().record(
        out,
        &[x, delta, a_log, b, c, skip],
        SelectiveScanOp {
            dims: Dims {
                batch,
                channels,
                state: d,
                len,
            },
        },
    ))
}

/// Token orders used by the four-direction scan.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ScanOrder {
    /// `(t, y, x)` raster order.
    Forward,
    Backward,
    /// `(t, x, y)`: columns before rows within each frame.
    Transposed,
    TransposedBackward,
}

impl ScanOrder {
    pub const ALL: [ScanOrder; 4] = [
        ScanOrder::Forward,
        ScanOrder::Backward,
        ScanOrder::Transposed,
        ScanOrder::TransposedBackward,
    ];

    /// Canonical flat index of each sequence position.
    pub fn permutation(self, t: usize, h: usize, w: usize) -> Vec<usize> {
        let mut idx: Vec<usize> = match self {
            ScanOrder::Forward | ScanOrder::Backward => (0..t * h * w).collect(),
            ScanOrder::Transposed | ScanOrder::TransposedBackward => {
                let mut v = Vec::with_capacity(t * h * w);
                for f in 0..t {
                    for x in 0..w {
                        for y in 0..h {
                            v.push((f * h + y) * w + x);
                        }
                    }
                }
                v
            }
        };
        if matches!(self, ScanOrder::Backward | ScanOrder::TransposedBackward) {
            idx.reverse();
        }
        idx
    }
}

fn invert(perm: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; perm.len()];
    for (i, &p) in perm.iter().enumerate() {
        inv[p] = i;
    }
    inv
}

/// Selective state-space parameters for `C` channels and state size `d`.
#[derive(Clone, Copy, Debug)]
pub struct SsmParams<'t, S: Real> {
    /// `C×C×1×1×1` projection producing Δ before the softplus.
    pub delta_weight: Var<'t, S>,
    /// `C`.
    pub delta_bias: Var<'t, S>,
    /// `d×C×1×1×1`.
    pub b_weight: Var<'t, S>,
    /// `d×C×1×1×1`.
    pub c_weight: Var<'t, S>,
    /// `C×d`, `A = −exp(a_log)`.
    pub a_log: Var<'t, S>,
    /// `C`.
    pub skip: Var<'t, S>,
}

/// Per-token `(Δ, B, C)` for a feature volume: Δ is `N×C×T×H×W`,
/// B and C are `N×d×T×H×W`.
pub fn selective_params<'t, S: Real>(
    f: Var<'t, S>,
    p: &SsmParams<'t, S>,
) -> Result<(Var<'t, S>, Var<'t, S>, Var<'t, S>)> {
    let delta = conv3d(f, &Conv3dParams::same(p.delta_weight, Some(p.delta_bias)))?.softplus();
    let b = conv3d(f, &Conv3dParams::same(p.b_weight, None))?;
    let c = conv3d(f, &Conv3dParams::same(p.c_weight, None))?;
    Ok((delta, b, c))
}

/// Scans the flattened volume in each of `orders`, maps every result back to
/// canonical order and averages.
pub fn multidirectional_ssm_with<'t, S: Real>(
    f: Var<'t, S>,
    p: &SsmParams<'t, S>,
    orders: &[ScanOrder],
) -> Result<Var<'t, S>> {
    let shape = f.shape();
    let [n, c, t, h, w] = split5(&shape, "multidirectional_ssm")?;
    if orders.is_empty() {
        return Err(Error::domain("multidirectional_ssm", "no scan orders"));
    }
    let (delta, b, cm) = selective_params(f, p)?;
    let d = b.shape()[1];
    let len = t * h * w;
    let mut acc: Option<Var<'t, S>> = None;
    for &order in orders {
        let perm = order.permutation(t, h, w);
        let y = selective_scan(
            f.gather(&perm, &[n, c, len])?,
            delta.gather(&perm, &[n, c, len])?,
            p.a_log,
            b.gather(&perm, &[n, d, len])?,
            cm.gather(&perm, &[n, d, len])?,
            p.skip,
        )?;
        let y = y.gather(&invert(&perm), &shape)?;
        acc = Some(match acc {
            Some(a) => a.add(y)?,
            None => y,
        });
    }
    let sum = acc.expect("at least one order");
    Ok(sum.scale(1.0 / orders.len() as f64))
}

/// Four-direction selective scan with output averaging.
pub fn multidirectional_ssm<'t, S: Real>(f: Var<'t, S>, p: &SsmParams<'t, S>) -> Result<Var<'t, S>> {
    multidirectional_ssm_with(f, p, &ScanOrder::ALL)
}

/// The three 1×1×1 conv blocks around the state-space layer.
#[derive(Clone, Debug)]
pub struct MambaBlockParams<'t, S: Real> {
    pub inner: ConvBn<'t, S>,
    pub outer: ConvBn<'t, S>,
    pub residual: ConvBn<'t, S>,
    pub ssm: SsmParams<'t, S>,
    pub four_directions: bool,
}

/// `Conv1(SSM(Conv1(F))) + Conv1(F)`.
pub fn mamba_in_conv<'t, S: Real>(f: Var<'t, S>, p: &MambaBlockParams<'t, S>, ctx: &NormCtx<S>) -> Result<Var<'t, S>> {
    let inner = p.inner.forward(f, ctx)?;
    let scanned = if p.four_directions {
        multidirectional_ssm(inner, &p.ssm)?
    } else {
        multidirectional_ssm_with(inner, &p.ssm, &[ScanOrder::Forward])?
    };
    let branch = p.outer.forward(scanned, ctx)?;
    branch.add(p.residual.forward(f, ctx)?)
}

#[derive(Clone, Debug)]
pub struct ResMambaParams<'t, S: Real> {
    pub conv1: ConvBn<'t, S>,
    pub conv2: ConvBn<'t, S>,
    pub mamba: MambaBlockParams<'t, S>,
    /// 1×1×1 projection of the block input; `None` means identity.
    pub skip: Option<Conv3dParams<'t, S>>,
}

/// Double conv, Mamba-in-convolution, then the skip connection.
pub fn res_mamba_block<'t, S: Real>(f: Var<'t, S>, p: &ResMambaParams<'t, S>, ctx: &NormCtx<S>) -> Result<Var<'t, S>> {
    let y = p.conv2.forward(p.conv1.forward(f, ctx)?, ctx)?;
    let y = mamba_in_conv(y, &p.mamba, ctx)?;
    let skip = match &p.skip {
        Some(proj) => conv3d(f, proj)?,
        None => f,
    };
    y.add(skip)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Tape;
    use crate::nn::norm::Mode;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn hand_values() {
        let (abar, bbar) = discretize(-1.0f64, 0.1, 1.0).unwrap();
        assert!((abar - 0.904837).abs() < 1e-6);
        assert!((bbar - 0.0951626).abs() < 1e-6);
    }

    #[test]
    fn zero_limit_and_preconditions() {
        let (abar, bbar) = discretize(-1e-12f64, 0.5, 2.0).unwrap();
        assert!((abar - 1.0).abs() < 1e-11);
        assert!((bbar - 1.0).abs() < 1e-11);
        assert!(discretize(-1.0f64, 0.0, 1.0).is_err());
        assert!(discretize(0.0f64, 0.1, 1.0).is_err());
    }

    #[test]
    fn fallback_is_continuous() {
        for delta in [1e-3, 0.1, 1.0] {
            let a = -SMALL_ARG / delta;
            let diff = (bbar_exact(a, delta, 1.0) - bbar_series(a, delta, 1.0)).abs();
            assert!(diff < 1e-9, "{diff}");
        }
    }

    #[test]
    fn coefficient_derivatives_in_both_regimes() {
        // Steps scale with the argument so the check resolves tiny Δ·A.
        for (a, delta) in [(-1.3f64, 0.4f64), (-2.0, 1e-7), (-1e-4, 1e-3), (-0.7, 3e-7)] {
            let (_, _, dd, da) = zoh_grad(a, delta);
            let coef = |a: f64, d: f64| zoh(a, d).1;
            let hd = delta * 1e-4;
            let ha = a.abs() * 1e-4;
            let nd = (coef(a, delta + hd) - coef(a, delta - hd)) / (2.0 * hd);
            let na = (coef(a + ha, delta) - coef(a - ha, delta)) / (2.0 * ha);
            assert!(crate::autodiff::relative_error(dd, nd) < 1e-6, "{a} {delta}: {dd} {nd}");
            assert!(crate::autodiff::relative_error(da, na) < 1e-4, "{a} {delta}: {da} {na}");
        }
    }

    #[test]
    fn scan_by_hand() {
        let y = ssm_scan(&[0.5; 3], &[1.0; 3], &[1.0; 3], &[1.0; 3], 0.0).unwrap();
        assert_eq!(y, vec![1.0, 1.5, 1.75]);
        let y = ssm_scan(&[0.0; 3], &[2.0; 3], &[3.0; 3], &[1.0, -1.0, 0.5], 0.0).unwrap();
        assert_eq!(y, vec![6.0, -6.0, 3.0]);
        assert!(ssm_scan(&[0.5; 2], &[1.0; 3], &[1.0; 3], &[1.0; 3], 0.0).is_err());
    }

    #[test]
    fn permutations_are_bijections() {
        for order in ScanOrder::ALL {
            let mut p = order.permutation(2, 3, 4);
            p.sort_unstable();
            assert_eq!(p, (0..24).collect::<Vec<_>>());
        }
        assert_eq!(ScanOrder::Transposed.permutation(1, 2, 2), vec![0, 2, 1, 3]);
    }

    #[test]
    fn fused_scan_matches_literal_recurrence() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (len, d) = (37, 4);
        let x: Vec<f64> = (0..len).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let delta: Vec<f64> = (0..len).map(|_| rng.gen_range(0.001..0.5)).collect();
        let a_log: Vec<f64> = (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let b: Vec<f64> = (0..d * len).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let c: Vec<f64> = (0..d * len).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let mut abar = vec![0.0; len * d];
        let mut bbar = vec![0.0; len * d];
        let mut cc = vec![0.0; len * d];
        for t in 0..len {
            for k in 0..d {
                let (ab, bb) = discretize(-a_log[k].exp(), delta[t], b[k * len + t]).unwrap();
                abar[t * d + k] = ab;
                bbar[t * d + k] = bb;
                cc[t * d + k] = c[k * len + t];
            }
        }
        let want = ssm_scan(&abar, &bbar, &cc, &x, 0.7).unwrap();
        let tape = Tape::<f64>::new();
        let v = |s: &[usize], d: &[f64]| tape.constant(Tensor::from_vec(s, d.to_vec()).unwrap());
        let got = selective_scan(
            v(&[1, 1, len], &x),
            v(&[1, 1, len], &delta),
            v(&[1, d], &a_log),
            v(&[1, d, len], &b),
            v(&[1, d, len], &c),
            v(&[1], &[0.7]),
        )
        .unwrap();
        assert_eq!(got.value().data(), &want[..]);
    }

    fn var<'t>(tape: &'t Tape<f64>, shape: &[usize], data: Vec<f64>) -> Var<'t, f64> {
        tape.constant(Tensor::from_vec(shape, data).unwrap())
    }

    fn rand_var<'t>(tape: &'t Tape<f64>, rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Var<'t, f64> {
        let n = shape.iter().product();
        var(tape, shape, (0..n).map(|_| rng.gen_range(lo..hi)).collect())
    }

    fn ssm_params<'t>(tape: &'t Tape<f64>, rng: &mut ChaCha8Rng, c: usize, d: usize) -> SsmParams<'t, f64> {
        SsmParams {
            delta_weight: rand_var(tape, rng, &[c, c, 1, 1, 1], -0.3, 0.3),
            delta_bias: rand_var(tape, rng, &[c], -3.0, -1.0),
            b_weight: rand_var(tape, rng, &[d, c, 1, 1, 1], -1.0, 1.0),
            c_weight: rand_var(tape, rng, &[d, c, 1, 1, 1], -1.0, 1.0),
            a_log: var(tape, &[c, d], (0..c * d).map(|i| ((i % d + 1) as f64).ln()).collect()),
            skip: var(tape, &[c], vec![1.0; c]),
        }
    }

    fn conv_bn<'t>(tape: &'t Tape<f64>, name: &str, w: Var<'t, f64>) -> ConvBn<'t, f64> {
        let c = w.shape()[0];
        ConvBn {
            name: name.into(),
            conv: Conv3dParams::same(w, None),
            norm: crate::nn::NormParams {
                gamma: var(tape, &[c], vec![1.0; c]),
                beta: var(tape, &[c], vec![0.0; c]),
                running: crate::nn::RunningStats {
                    mean: Tensor::zeros(&[c]).unwrap(),
                    var: Tensor::ones(&[c]).unwrap(),
                },
                momentum: crate::nn::norm::BN_MOMENTUM,
                eps: crate::nn::norm::BN_EPS,
            },
        }
    }

    #[test]
    fn memoryless_and_zero_input() {
        let y = ssm_scan(&[0.0; 4], &[0.5; 4], &[2.0; 4], &[1.0, 2.0, -1.0, 0.0], 0.0).unwrap();
        assert_eq!(y, vec![1.0, 2.0, -1.0, 0.0]);
        let y = ssm_scan(&[0.9; 6], &[0.3; 6], &[1.0; 6], &[0.0; 3], 1.0).unwrap();
        assert_eq!(y, vec![0.0; 3]);
    }

    #[test]
    fn stable_and_state_bounded() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..50 {
            let a = -rng.gen_range(0.01..8.0f64);
            let len = 200;
            let mut abar = Vec::new();
            let mut bx = Vec::new();
            let mut bbar = Vec::new();
            let x: Vec<f64> = (0..len).map(|_| rng.gen_range(-1.0..1.0)).collect();
            for t in 0..len {
                let (ab, bb) = discretize(a, rng.gen_range(1e-4..2.0), 1.0).unwrap();
                assert!(ab > 0.0 && ab < 1.0);
                abar.push(ab);
                bbar.push(bb);
                bx.push((bb * x[t]).abs());
            }
            let bound = bx.iter().cloned().fold(0.0, f64::max) / (1.0 - abar.iter().cloned().fold(0.0, f64::max));
            let h = ssm_scan(&abar, &bbar, &vec![1.0; len], &x, 0.0).unwrap();
            assert!(h.iter().all(|v| v.abs() <= bound * (1.0 + 1e-12)));
        }
    }

    #[test]
    fn impulse_spreads_along_scan_direction() {
        let tape = Tape::<f64>::new();
        let (t, h, w, d) = (2, 3, 3, 2);
        let len = t * h * w;
        let run = |order: ScanOrder, at: usize| {
            let mut x = vec![0.0; len];
            x[at] = 1.0;
            let perm = order.permutation(t, h, w);
            let y = selective_scan(
                var(&tape, &[1, 1, len], x).gather(&perm, &[1, 1, len]).unwrap(),
                var(&tape, &[1, 1, len], vec![0.2; len]),
                var(&tape, &[1, d], vec![0.0, 0.5]),
                var(&tape, &[1, d, len], vec![1.0; d * len]),
                var(&tape, &[1, d, len], vec![1.0; d * len]),
                var(&tape, &[1], vec![0.0]),
            )
            .unwrap();
            y.gather(&invert(&perm), &[1, 1, len]).unwrap().value().data().to_vec()
        };
        let fwd = run(ScanOrder::Forward, 0);
        assert!(fwd.iter().all(|&v| v > 0.0));
        let bwd = run(ScanOrder::Backward, 0);
        assert!(bwd[0] > 0.0 && bwd[1..].iter().all(|&v| v == 0.0));
        let bwd = run(ScanOrder::Backward, len - 1);
        assert!(bwd.iter().all(|&v| v > 0.0));
        let fwd = run(ScanOrder::Forward, len - 1);
        assert!(fwd[..len - 1].iter().all(|&v| v == 0.0));
        // Impulse on the second row of frame 0: transposed order reaches
        // the first row's later columns, raster order does not.
        let tr = run(ScanOrder::Transposed, 3);
        let fw = run(ScanOrder::Forward, 3);
        assert!(tr[1] > 0.0 && fw[1] == 0.0);
    }

    #[test]
    fn constant_volume_branches_agree() {
        let tape = Tape::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let (c, t, h, w) = (2, 3, 4, 4);
        let len = t * h * w;
        let p = ssm_params(&tape, &mut rng, c, 3);
        let f = var(&tape, &[1, c, t, h, w], [0.7, -0.4].iter().flat_map(|&v| vec![v; len]).collect());
        // Every order feeds the scan the same sequence, so the sequence-order
        // outputs coincide.
        let seq = |order: ScanOrder| {
            let y = multidirectional_ssm_with(f, &p, &[order]).unwrap();
            let perm = order.permutation(t, h, w);
            y.gather(&perm, &[1, c, len]).unwrap().value().data().to_vec()
        };
        let base = seq(ScanOrder::Forward);
        for order in ScanOrder::ALL {
            let s = seq(order);
            assert!(s.iter().zip(&base).all(|(a, b)| (a - b).abs() < 1e-12));
        }
        // The averaged output is the single branch mapped back by each order.
        let mean = multidirectional_ssm(f, &p).unwrap();
        let mean = mean.value().data().to_vec();
        for ch in 0..c {
            for j in 0..len {
                let mut want = 0.0;
                for order in ScanOrder::ALL {
                    let pos = order.permutation(t, h, w).iter().position(|&q| q == j).unwrap();
                    want += base[ch * len + pos] / 4.0;
                }
                assert!((mean[ch * len + j] - want).abs() < 1e-12);
                // The zero-state transient makes the output point-symmetric,
                // not constant.
                assert!((mean[ch * len + j] - mean[ch * len + len - 1 - j]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn zero_tokens_give_bias_floor() {
        let tape = Tape::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let p = ssm_params(&tape, &mut rng, 3, 2);
        let f = var(&tape, &[1, 3, 2, 2, 2], vec![0.0; 24]);
        let (delta, b, c) = selective_params(f, &p).unwrap();
        assert_eq!(delta.shape(), vec![1, 3, 2, 2, 2]);
        assert_eq!(b.shape(), vec![1, 2, 2, 2, 2]);
        let bias = p.delta_bias.value();
        for ch in 0..3 {
            let floor = bias.data()[ch].exp().ln_1p();
            assert!(delta.value().data()[ch * 8..(ch + 1) * 8].iter().all(|&v| (v - floor).abs() < 1e-15));
        }
        assert!(c.value().data().iter().all(|&v| v == 0.0));
        let f = rand_var(&tape, &mut rng, &[1, 3, 2, 2, 2], -50.0, 50.0);
        assert!(selective_params(f, &p).unwrap().0.value().data().iter().all(|&v| v > 0.0));
        assert_eq!(multidirectional_ssm(rand_var(&tape, &mut rng, &[1, 4, 5, 8, 8], -1.0, 1.0), &ssm_params(&tape, &mut rng, 4, 2)).unwrap().shape(), vec![1, 4, 5, 8, 8]);
    }

    #[test]
    fn zeroed_ssm_branch_leaves_residual_conv() {
        let tape = Tape::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let (cin, cout) = (3, 4);
        let f = rand_var(&tape, &mut rng, &[1, cin, 3, 4, 4], -1.0, 1.0);
        let p = MambaBlockParams {
            inner: conv_bn(&tape, "inner", var(&tape, &[cout, cin, 1, 1, 1], vec![0.0; cout * cin])),
            outer: conv_bn(&tape, "outer", rand_var(&tape, &mut rng, &[cout, cout, 1, 1, 1], -1.0, 1.0)),
            residual: conv_bn(&tape, "residual", rand_var(&tape, &mut rng, &[cout, cin, 1, 1, 1], -1.0, 1.0)),
            ssm: ssm_params(&tape, &mut rng, cout, 2),
            four_directions: true,
        };
        let ctx = NormCtx::new(Mode::Train);
        let out = mamba_in_conv(f, &p, &ctx).unwrap();
        let res = p.residual.forward(f, &ctx).unwrap();
        assert_eq!(out.shape(), res.shape());
        assert!(out.value().max_abs_diff(&res.value()).unwrap() < 1e-6);
    }

    #[test]
    fn zero_weights_with_identity_skip_is_identity() {
        let tape = Tape::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let c = 3;
        let zeros = |s: &[usize]| var(&tape, s, vec![0.0; s.iter().product()]);
        let zero_ssm = SsmParams {
            delta_weight: zeros(&[c, c, 1, 1, 1]),
            delta_bias: zeros(&[c]),
            b_weight: zeros(&[2, c, 1, 1, 1]),
            c_weight: zeros(&[2, c, 1, 1, 1]),
            a_log: zeros(&[c, 2]),
            skip: zeros(&[c]),
        };
        let mut eye = vec![0.0; c * c];
        for i in 0..c {
            eye[i * c + i] = 1.0;
        }
        let p = ResMambaParams {
            conv1: conv_bn(&tape, "c1", zeros(&[c, c, 3, 3, 3])),
            conv2: conv_bn(&tape, "c2", zeros(&[c, c, 3, 3, 3])),
            mamba: MambaBlockParams {
                inner: conv_bn(&tape, "i", zeros(&[c, c, 1, 1, 1])),
                outer: conv_bn(&tape, "o", zeros(&[c, c, 1, 1, 1])),
                residual: conv_bn(&tape, "r", zeros(&[c, c, 1, 1, 1])),
                ssm: zero_ssm,
                four_directions: true,
            },
            skip: Some(Conv3dParams::same(var(&tape, &[c, c, 1, 1, 1], eye), None)),
        };
        let f = rand_var(&tape, &mut rng, &[1, c, 3, 4, 4], -1.0, 1.0);
        let out = res_mamba_block(f, &p, &NormCtx::new(Mode::Train)).unwrap();
        assert_eq!(out.value().data(), f.value().data());
    }

    #[test]
    fn widening_block_shape() {
        let tape = Tape::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let (cin, cout) = (8, 16);
        let mut w = |s: &[usize]| rand_var(&tape, &mut rng, s, -0.2, 0.2);
        let p = ResMambaParams {
            conv1: conv_bn(&tape, "c1", w(&[cout, cin, 3, 3, 3])),
            conv2: conv_bn(&tape, "c2", w(&[cout, cout, 3, 3, 3])),
            mamba: MambaBlockParams {
                inner: conv_bn(&tape, "i", w(&[cout, cout, 1, 1, 1])),
                outer: conv_bn(&tape, "o", w(&[cout, cout, 1, 1, 1])),
                residual: conv_bn(&tape, "r", w(&[cout, cout, 1, 1, 1])),
                ssm: ssm_params(&tape, &mut ChaCha8Rng::seed_from_u64(1), cout, 2),
                four_directions: true,
            },
            skip: Some(Conv3dParams::same(w(&[cout, cin, 1, 1, 1]), None)),
        };
        let f = tape.constant(Tensor::ones(&[1, cin, 5, 8, 8]).unwrap());
        assert_eq!(res_mamba_block(f, &p, &NormCtx::new(Mode::Train)).unwrap().shape(), vec![1, 16, 5, 8, 8]);
    }
}
