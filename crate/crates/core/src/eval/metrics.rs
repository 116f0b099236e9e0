//! Full-reference image quality: PSNR and Gaussian-window SSIM.

use crate::error::{Error, Result};
use crate::video::Frame;

/// Returned by [`psnr`] for identical frames.
pub const PSNR_CAP: f64 = 100.0;

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_K1: f64 = 0.01;
pub const SSIM_K2: f64 = 0.03;

fn check(a: &Frame, b: &Frame, op: &'static str) -> Result<()> {
    if a.same_geometry(b) {
        Ok(())
    } else {
        Err(Error::mismatch(
            op,
            &[a.channels, a.height, a.width],
            &[b.channels, b.height, b.width],
        ))
    }
}

/// `10 log10(1 / MSE)` for signals in `[0, 1]`, capped at 100 dB.
pub fn psnr(a: &Frame, b: &Frame) -> Result<f64> {
    check(a, b, "psnr")?;
    let mse = a
        .data
        .iter()
        .zip(&b.data)
        .map(|(&x, &y)| (x as f64 - y as f64).powi(2))
        .sum::<f64>()
        / a.data.len() as f64;
    if mse == 0.0 {
        return Ok(PSNR_CAP);
    }
    Ok((10.0 * (1.0 / mse).log10()).min(PSNR_CAP))
}

fn window() -> Vec<f64> {
    let r = (SSIM_WINDOW / 2) as i64;
    let g: Vec<f64> = (-r..=r)
        .map(|k| (-(k * k) as f64 / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp())
        .collect();
    let s: f64 = g.iter().sum();
    g.into_iter().map(|v| v / s).collect()
}

/// Separable weighted mean over every fully contained window position.
fn local_mean(img: &[f64], h: usize, w: usize, g: &[f64]) -> (Vec<f64>, usize, usize) {
    let k = g.len();
    let (oh, ow) = (h - k + 1, w - k + 1);
    let mut rows = vec![0.0; h * ow];
    for y in 0..h {
        for x in 0..ow {
            rows[y * ow + x] = (0..k).map(|i| g[i] * img[y * w + x + i]).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for y in 0..oh {
        for x in 0..ow {
            out[y * ow + x] = (0..k).map(|i| g[i] * rows[(y + i) * ow + x]).sum();
        }
    }
    (out, oh, ow)
}

fn ssim_plane(a: &[f32], b: &[f32], h: usize, w: usize) -> f64 {
    let g = window();
    let c1 = (SSIM_K1 * 1.0).powi(2);
    let c2 = (SSIM_K2 * 1.0).powi(2);
    let a: Vec<f64> = a.iter().map(|&v| v as f64).collect();
    let b: Vec<f64> = b.iter().map(|&v| v as f64).collect();
    let prod = |x: &[f64], y: &[f64]| x.iter().zip(y).map(|(p, q)| p * q).collect::<Vec<f64>>();
    let (ma, ..) = local_mean(&a, h, w, &g);
    let (mb, ..) = local_mean(&b, h, w, &g);
    let (maa, ..) = local_mean(&prod(&a, &a), h, w, &g);
    let (mbb, ..) = local_mean(&prod(&b, &b), h, w, &g);
    let (mab, oh, ow) = local_mean(&prod(&a, &b), h, w, &g);
    let mut total = 0.0;
    for i in 0..oh * ow {
        let (ua, ub) = (ma[i], mb[i]);
        let va = maa[i] - ua * ua;
        let vb = mbb[i] - ub * ub;
        let cov = mab[i] - ua * ub;
        total += ((2.0 * ua * ub + c1) * (2.0 * cov + c2)) / ((ua * ua + ub * ub + c1) * (va + vb + c2));
    }
    total / (oh * ow) as f64
}

/// Mean SSIM over all valid 11×11 Gaussian windows (σ 1.5, L = 1), averaged
/// over channels.
pub fn ssim(a: &Frame, b: &Frame) -> Result<f64> {
    check(a, b, "ssim")?;
    if a.height < SSIM_WINDOW || a.width < SSIM_WINDOW {
        return Err(Error::shape(
            &[a.height, a.width],
            format!("ssim needs frames of at least {SSIM_WINDOW}×{SSIM_WINDOW}"),
        ));
    }
    let per: f64 = (0..a.channels)
        .map(|c| ssim_plane(a.plane(c), b.plane(c), a.height, a.width))
        .sum();
    Ok(per / a.channels as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(seed: u64, c: usize, h: usize, w: usize) -> Frame {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Frame::new(c, h, w, (0..c * h * w).map(|_| rng.gen()).collect()).unwrap()
    }

    #[test]
    fn psnr_fixtures() {
        let a = random(1, 1, 16, 16);
        assert_eq!(psnr(&a, &a).unwrap(), PSNR_CAP);
        let z = Frame::filled(1, 8, 8, 0.2).unwrap();
        let o = Frame::filled(1, 8, 8, 0.3).unwrap();
        assert!((psnr(&z, &o).unwrap() - 20.0).abs() < 1e-5);
        assert!(psnr(&z, &random(1, 3, 8, 8)).is_err());
    }

    #[test]
    fn psnr_falls_with_noise_amplitude() {
        let a = random(2, 1, 32, 32);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let noise: Vec<f32> = (0..a.data.len()).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let mut prev = f64::INFINITY;
        for amp in [0.01f32, 0.02, 0.05, 0.1, 0.2] {
            let b = Frame {
                data: a.data.iter().zip(&noise).map(|(v, n)| v + amp * n).collect(),
                ..a.clone()
            };
            let p = psnr(&a, &b).unwrap();
            assert!(p < prev);
            prev = p;
        }
    }

    #[test]
    fn ssim_fixtures() {
        let a = random(4, 3, 24, 20);
        assert!((ssim(&a, &a).unwrap() - 1.0).abs() < 1e-9);
        let x = Frame::filled(1, 16, 16, 0.5).unwrap();
        let y = Frame::filled(1, 16, 16, 0.7).unwrap();
        let c1 = 1e-4;
        let want = (2.0 * 0.5 * 0.7 + c1) / (0.25 + 0.49 + c1);
        let got = ssim(&x, &y).unwrap();
        assert!((got - want).abs() < 1e-6, "{got} {want}");
        assert!((got - 0.9461).abs() < 1e-3);
        assert!(ssim(&random(0, 1, 10, 30), &random(1, 1, 10, 30)).is_err());
    }

    #[test]
    fn ssim_symmetric_bounded_and_one_only_when_equal() {
        for s in 0..10 {
            let a = random(s, 1, 16, 16);
            let b = random(s + 100, 1, 16, 16);
            let ab = ssim(&a, &b).unwrap();
            assert_eq!(ab, ssim(&b, &a).unwrap());
            assert!((-1.0..=1.0).contains(&ab));
            assert!(ab < 1.0 - 1e-9);
            let neg = Frame {
                data: a.data.iter().map(|v| 1.0 - v).collect(),
                ..a.clone()
            };
            assert!((-1.0..=1.0).contains(&ssim(&a, &neg).unwrap()));
        }
    }
}
