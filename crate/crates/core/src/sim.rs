//! Synthetic turbulence: temporally correlated smooth tilt fields, backward
//! warping and Gaussian blur.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::video::{Frame, VideoClip};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SimParams {
    /// Tilt amplitude in pixels.
    pub alpha: f64,
    /// Spatial correlation length of the tilt, pixels.
    pub sigma_s: f64,
    /// Frame-to-frame AR(1) coefficient.
    pub rho: f64,
    /// Blur standard deviation, pixels.
    pub sigma_b: f64,
    pub seed: u64,
}

impl Default for SimParams {
    fn default() -> Self {
        Self {
            alpha: 2.0,
            sigma_s: 8.0,
            rho: 0.9,
            sigma_b: 1.0,
            seed: 0,
        }
    }
}

impl SimParams {
    pub fn validate(&self) -> Result<()> {
        let ok = self.alpha >= 0.0
            && self.alpha.is_finite()
            && self.sigma_s > 0.0
            && self.sigma_s.is_finite()
            && (0.0..1.0).contains(&self.rho)
            && self.sigma_b >= 0.0
            && self.sigma_b.is_finite();
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!(
                "simulation parameters need alpha ≥ 0, sigma_s > 0, 0 ≤ rho < 1, sigma_b ≥ 0; got {self:?}"
            )))
        }
    }
}

/// Per-pixel displacement of one frame, row-major `H×W`.
#[derive(Clone, Debug, PartialEq)]
pub struct Displacement {
    pub dy: Vec<f64>,
    pub dx: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TiltField {
    pub height: usize,
    pub width: usize,
    pub frames: Vec<Displacement>,
}

/// Normalized Gaussian taps for offsets `-r..=r`, `r = ceil(3σ)`.
pub fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    if sigma <= 0.0 {
        return vec![1.0];
    }
    let r = (3.0 * sigma).ceil() as i64;
    let taps: Vec<f64> = (-r..=r).map(|k| (-(k * k) as f64 / (2.0 * sigma * sigma)).exp()).collect();
    let s: f64 = taps.iter().sum();
    taps.into_iter().map(|t| t / s).collect()
}

/// Separable correlation with `kernel` along rows then columns, edge-clamped.
pub fn filter_separable(img: &[f64], h: usize, w: usize, kernel: &[f64]) -> Vec<f64> {
    let r = (kernel.len() / 2) as i64;
    let clamp = |v: i64, n: usize| v.clamp(0, n as i64 - 1) as usize;
    let mut tmp = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            tmp[y * w + x] = kernel
                .iter()
                .enumerate()
                .map(|(k, &g)| g * img[y * w + clamp(x as i64 + k as i64 - r, w)])
                .sum();
        }
    }
    let mut out = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            out[y * w + x] = kernel
                .iter()
                .enumerate()
                .map(|(k, &g)| g * tmp[clamp(y as i64 + k as i64 - r, h) * w + x])
                .sum();
        }
    }
    out
}

fn smooth_noise(rng: &mut ChaCha8Rng, h: usize, w: usize, kernel: &[f64]) -> Vec<f64> {
    let white: Vec<f64> = (0..h * w).map(|_| StandardNormal.sample(rng)).collect();
    let mut f = filter_separable(&white, h, w, kernel);
    let n = f.len() as f64;
    let mean = f.iter().sum::<f64>() / n;
    let std = (f.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt();
    if std > 0.0 {
        f.iter_mut().for_each(|v| *v /= std);
    }
    f
}

/// AR(1) sequence of smooth random displacement fields. Frame `t` draws its
/// noise from stream `t` of the seeded generator.
pub fn gen_tilt_fields(frames: usize, h: usize, w: usize, p: &SimParams) -> Result<TiltField> {
    p.validate()?;
    let kernel = gaussian_kernel(p.sigma_s);
    let innov = (1.0 - p.rho * p.rho).sqrt();
    let mut out: Vec<Displacement> = Vec::with_capacity(frames);
    for t in 0..frames {
        let mut rng = ChaCha8Rng::seed_from_u64(p.seed);
        rng.set_stream(t as u64);
        let ny = smooth_noise(&mut rng, h, w, &kernel);
        let nx = smooth_noise(&mut rng, h, w, &kernel);
        let d = match out.last() {
            None => Displacement {
                dy: ny.iter().map(|v| p.alpha * v).collect(),
                dx: nx.iter().map(|v| p.alpha * v).collect(),
            },
            Some(prev) => Displacement {
                dy: prev.dy.iter().zip(&ny).map(|(a, n)| p.rho * a + innov * p.alpha * n).collect(),
                dx: prev.dx.iter().zip(&nx).map(|(a, n)| p.rho * a + innov * p.alpha * n).collect(),
            },
        };
        out.push(d);
    }
    Ok(TiltField {
        height: h,
        width: w,
        frames: out,
    })
}

fn bilinear(plane: &[f32], h: usize, w: usize, y: f64, x: f64) -> f32 {
    let y = y.clamp(0.0, (h - 1) as f64);
    let x = x.clamp(0.0, (w - 1) as f64);
    let (y0, x0) = (y.floor() as usize, x.floor() as usize);
    let (y1, x1) = ((y0 + 1).min(h - 1), (x0 + 1).min(w - 1));
    let (fy, fx) = (y - y0 as f64, x - x0 as f64);
    let v = |yy: usize, xx: usize| plane[yy * w + xx] as f64;
    let top = v(y0, x0) * (1.0 - fx) + v(y0, x1) * fx;
    let bot = v(y1, x0) * (1.0 - fx) + v(y1, x1) * fx;
    (top * (1.0 - fy) + bot * fy) as f32
}

/// Backward warp: `out(y, x) = in(y + dy, x + dx)`, bilinear, edge-clamped.
pub fn warp_frame(frame: &Frame, d: &Displacement) -> Result<Frame> {
    let (h, w) = (frame.height, frame.width);
    if d.dy.len() != h * w || d.dx.len() != h * w {
        return Err(Error::mismatch("warp_frame", &[h, w], &[d.dy.len(), d.dx.len()]));
    }
    let mut out = frame.clone();
    for c in 0..frame.channels {
        let src = frame.plane(c);
        let dst = out.plane_mut(c);
        for y in 0..h {
            for x in 0..w {
                let i = y * w + x;
                dst[i] = bilinear(src, h, w, y as f64 + d.dy[i], x as f64 + d.dx[i]);
            }
        }
    }
    Ok(out)
}

/// Separable Gaussian blur; `sigma = 0` is the identity.
pub fn blur_frame(frame: &Frame, sigma: f64) -> Result<Frame> {
    if !(sigma >= 0.0) {
        return Err(Error::domain("blur_frame", "sigma must be ≥ 0"));
    }
    if sigma == 0.0 {
        return Ok(frame.clone());
    }
    let kernel = gaussian_kernel(sigma);
    let mut out = frame.clone();
    for c in 0..frame.channels {
        let plane: Vec<f64> = frame.plane(c).iter().map(|&v| v as f64).collect();
        let f = filter_separable(&plane, frame.height, frame.width, &kernel);
        out.plane_mut(c).iter_mut().zip(f).for_each(|(d, v)| *d = v as f32);
    }
    Ok(out)
}

/// Warps every frame with its tilt field, then blurs.
pub fn simulate_clip(clean: &VideoClip, p: &SimParams) -> Result<VideoClip> {
    let field = gen_tilt_fields(clean.len(), clean.height(), clean.width(), p)?;
    let frames = clean
        .frames
        .iter()
        .zip(&field.frames)
        .map(|(f, d)| blur_frame(&warp_frame(f, d)?, p.sigma_b))
        .collect::<Result<Vec<_>>>()?;
    VideoClip::new(frames)
}

/// Static test chart: a soft gradient with bars of two frequencies, a disk
/// and a checker patch, repeated for `frames` frames. Color charts tint the
/// channels differently.
pub fn test_chart(frames: usize, channels: usize, h: usize, w: usize) -> Result<VideoClip> {
    let mut data = vec![0.0f32; channels * h * w];
    for c in 0..channels {
        for y in 0..h {
            for x in 0..w {
                let (u, v) = (x as f64 / w as f64, y as f64 / h as f64);
                let mut val = 0.25 + 0.3 * u + 0.1 * c as f64 * v;
                if v < 0.3 {
                    val += if (x / 2) % 2 == 0 { 0.25 } else { -0.1 };
                } else if v < 0.5 {
                    val += if (x / 4) % 2 == 0 { 0.2 } else { -0.1 };
                }
                let (dy, dx) = (v - 0.72, u - 0.3);
                if dy * dy + dx * dx < 0.04 {
                    val = 0.9 - 0.2 * c as f64;
                }
                if u > 0.6 && v > 0.6 && ((x / 3) + (y / 3)) % 2 == 0 {
                    val = 0.1 + 0.1 * c as f64;
                }
                data[(c * h + y) * w + x] = val.clamp(0.0, 1.0) as f32;
            }
        }
    }
    let f = Frame::new(channels, h, w, data)?;
    VideoClip::new(vec![f; frames.max(1)])
}
