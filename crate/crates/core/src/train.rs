//! Charbonnier training with Adam on random crops, plus sliding-window
//! restoration of whole clips.

use std::collections::BTreeMap;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::Tape;
use crate::error::{Error, Result};
use crate::model::{ModelWeights, Net};
use crate::nn::{Mode, NormCtx};
use crate::tensor::{Real, Tensor};
use crate::video::{Frame, VideoClip};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub steps: usize,
    pub crop: usize,
    pub window: usize,
    pub charbonnier_eps: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            steps: 300,
            crop: 32,
            window: 5,
            charbonnier_eps: 1e-3,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.crop == 0 || self.crop % 8 != 0 {
            return fail(format!("crop must be a positive multiple of 8, got {}", self.crop));
        }
        if self.window % 2 == 0 {
            return fail(format!("window must be odd, got {}", self.window));
        }
        // lr = 0 is allowed: it freezes the weights.
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return fail(format!("lr must be finite and non-negative, got {}", self.lr));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return fail("Adam betas must lie in [0, 1)".into());
        }
        if !(self.adam_eps > 0.0) || !(self.charbonnier_eps > 0.0) {
            return fail("epsilons must be positive".into());
        }
        Ok(())
    }
}

/// Scalar Charbonnier loss: mean of `sqrt((x - y)² + eps²)`.
pub fn charbonnier<S: Real>(x: &Tensor<S>, y: &Tensor<S>, eps: f64) -> Result<f64> {
    let tape = Tape::inference();
    let l = tape.constant(x.clone()).charbonnier(tape.constant(y.clone()), eps)?;
    Ok(l.value().item().as_f64())
}

/// Adam moments and step counter.
#[derive(Clone, Debug, PartialEq)]
pub struct OptState<S: Real = f32> {
    pub m: BTreeMap<String, Tensor<S>>,
    pub v: BTreeMap<String, Tensor<S>>,
    pub step: u64,
}

impl<S: Real> OptState<S> {
    pub fn new(params: &BTreeMap<String, Tensor<S>>) -> Result<Self> {
        let zeros = |t: &Tensor<S>| Tensor::zeros(t.shape());
        let m = params
            .iter()
            .map(|(k, t)| Ok((k.clone(), zeros(t)?)))
            .collect::<Result<BTreeMap<_, _>>>()?;
        Ok(Self {
            v: m.clone(),
            m,
            step: 0,
        })
    }
}

/// One bias-corrected Adam update. A parameter without a gradient is updated
/// as if its gradient were zero.
pub fn adam_step<S: Real>(
    params: &mut BTreeMap<String, Tensor<S>>,
    grads: &BTreeMap<String, Tensor<S>>,
    state: &mut OptState<S>,
    cfg: &TrainConfig,
) -> Result<()> {
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - cfg.beta1.powi(t);
    let c2 = 1.0 - cfg.beta2.powi(t);
    for (name, w) in params.iter_mut() {
        let m = state.m.get_mut(name).ok_or_else(|| Error::MissingParam(name.clone()))?;
        let v = state.v.get_mut(name).ok_or_else(|| Error::MissingParam(name.clone()))?;
        let g = grads.get(name);
        match g {
            Some(g) if g.shape() != w.shape() => return Err(Error::mismatch("adam_step", w.shape(), g.shape())),
            None => log::warn!("no gradient for {name}; treating it as zero"),
            _ => {}
        }
        let (wd, md, vd) = (w.data_mut(), m.data_mut(), v.data_mut());
        for i in 0..wd.len() {
            let gi = g.map_or(0.0, |g| g.data()[i].as_f64());
            let mi = cfg.beta1 * md[i].as_f64() + (1.0 - cfg.beta1) * gi;
            let vi = cfg.beta2 * vd[i].as_f64() + (1.0 - cfg.beta2) * gi * gi;
            md[i] = S::from_f64(mi);
            vd[i] = S::from_f64(vi);
            let step = cfg.lr * (mi / c1) / ((vi / c2).sqrt() + cfg.adam_eps);
            wd[i] = S::from_f64(wd[i].as_f64() - step);
        }
    }
    Ok(())
}

/// Distorted clip and its clean reference, frame for frame.
#[derive(Clone, Debug, PartialEq)]
pub struct ClipPair {
    pub distorted: VideoClip,
    pub clean: VideoClip,
}

impl ClipPair {
    pub fn new(distorted: VideoClip, clean: VideoClip) -> Result<Self> {
        let (d, c) = (&distorted.frames[0], &clean.frames[0]);
        if distorted.len() != clean.len() || !d.same_geometry(c) {
            return Err(Error::mismatch(
                "ClipPair",
                &[distorted.len(), d.channels, d.height, d.width],
                &[clean.len(), c.channels, c.height, c.width],
            ));
        }
        Ok(Self { distorted, clean })
    }
}

/// Frame indices of the `t`-frame window centred at `i`, clamped to the clip.
pub fn window_indices(len: usize, t: usize, i: usize) -> Vec<usize> {
    let r = (t / 2) as i64;
    (-r..=r)
        .map(|k| (i as i64 + k).clamp(0, len as i64 - 1) as usize)
        .collect()
}

/// One window per frame, centred on it, with edge replication.
pub fn sliding_window_iter(clip: &VideoClip, t: usize) -> impl Iterator<Item = (Vec<&Frame>, usize)> {
    (0..clip.len()).map(move |i| {
        let frames = window_indices(clip.len(), t, i).into_iter().map(|j| &clip.frames[j]).collect();
        (frames, i)
    })
}

/// Stacks frames into `1×C×T×H×W`, cropping `size×size` at `(y0, x0)`.
fn stack(frames: &[&Frame], y0: usize, x0: usize, h: usize, w: usize) -> Result<Tensor<f32>> {
    let c = frames[0].channels;
    let t = frames.len();
    let mut data = Vec::with_capacity(c * t * h * w);
    for ch in 0..c {
        for f in frames {
            let p = f.plane(ch);
            for y in y0..y0 + h {
                data.extend_from_slice(&p[y * f.width + x0..y * f.width + x0 + w]);
            }
        }
    }
    Tensor::from_vec(&[1, c, t, h, w], data)
}

/// Random `t`-frame temporal window and `size×size` spatial crop, shared by
/// both clips. Returns the distorted window and the clean centre frame
/// (`1×C×size×size`).
pub fn random_crop(pair: &ClipPair, size: usize, t: usize, rng: &mut impl Rng) -> Result<(Tensor<f32>, Tensor<f32>)> {
    let f = &pair.distorted.frames[0];
    if f.height < size || f.width < size || pair.distorted.len() < t {
        return Err(Error::shape(
            &[pair.distorted.len(), f.height, f.width],
            format!("clip smaller than a {t}-frame {size}×{size} crop"),
        ));
    }
    let start = rng.gen_range(0..=pair.distorted.len() - t);
    let y0 = rng.gen_range(0..=f.height - size);
    let x0 = rng.gen_range(0..=f.width - size);
    let window: Vec<&Frame> = pair.distorted.frames[start..start + t].iter().collect();
    let x = stack(&window, y0, x0, size, size)?;
    let centre = stack(&[&pair.clean.frames[start + t / 2]], y0, x0, size, size)?;
    Ok((x, centre.reshape(&[1, f.channels, size, size])?))
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainReport {
    /// Loss before each update.
    pub losses: Vec<f64>,
}

fn norms_summary(params: &BTreeMap<String, Tensor<f32>>) -> String {
    let total: f64 = params.values().map(|t| t.norm().powi(2)).sum::<f64>().sqrt();
    let mut each: Vec<(&String, f64)> = params.iter().map(|(k, t)| (k, t.norm())).collect();
    each.sort_by(|a, b| b.1.total_cmp(&a.1));
    let top: Vec<String> = each.iter().take(5).map(|(k, n)| format!("{k}={n:.4e}")).collect();
    format!("parameter norm {total:.4e}; largest: {}", top.join(", "))
}

/// Deterministic training loop. Each step: random crop from a random clip,
/// train-mode forward, Charbonnier loss against the clean centre frame,
/// backward, Adam, running-statistics update. `on_step` sees `(step, loss)`.
pub fn train(
    weights: &mut ModelWeights<f32>,
    data: &[ClipPair],
    cfg: &TrainConfig,
    mut on_step: impl FnMut(usize, f64),
) -> Result<TrainReport> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::Config("training needs at least one clip pair".into()));
    }
    if cfg.window != weights.config.window_frames {
        return Err(Error::Config(format!(
            "window {} does not match the model's {} frames",
            cfg.window, weights.config.window_frames
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut opt = OptState::new(&weights.params)?;
    let mut losses = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let pair = &data[rng.gen_range(0..data.len())];
        let (x, y) = random_crop(pair, cfg.crop, cfg.window, &mut rng)?;
        let tape = Tape::new();
        let vars = weights.bind(&tape);
        let ctx = NormCtx::new(Mode::Train);
        let net = Net {
            cfg: &weights.config,
            vars: &vars,
            buffers: &weights.buffers,
            ctx: &ctx,
        };
        let out = net.mamat(tape.constant(x))?;
        let loss = out.charbonnier(tape.constant(y), cfg.charbonnier_eps)?;
        let value = loss.value().item() as f64;
        if !value.is_finite() {
            return Err(Error::NonFiniteLoss {
                step,
                diagnostics: norms_summary(&weights.params),
            });
        }
        let grads = tape.backward(loss)?.into_map();
        drop(net);
        let stats = ctx.into_updates();
        adam_step(&mut weights.params, &grads, &mut opt, cfg)?;
        weights.apply_stats(stats);
        losses.push(value);
        on_step(step, value);
    }
    Ok(TrainReport { losses })
}

/// Writes `step,loss` rows.
pub fn write_loss_csv(path: &Path, losses: &[f64]) -> Result<()> {
    let csv_err = |e: csv::Error| Error::Csv(format!("{}: {e}", path.display()));
    let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
    w.write_record(["step", "loss"]).map_err(csv_err)?;
    for (i, l) in losses.iter().enumerate() {
        w.write_record([i.to_string(), format!("{l:e}")]).map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

/// Means of consecutive non-overlapping `span`-step blocks.
pub fn block_means(losses: &[f64], span: usize) -> Vec<f64> {
    losses.chunks_exact(span).map(|c| c.iter().sum::<f64>() / span as f64).collect()
}

/// Fraction of consecutive `span`-step block means that decrease.
pub fn decreasing_fraction(losses: &[f64], span: usize) -> f64 {
    let m = block_means(losses, span);
    if m.len() < 2 {
        return 0.0;
    }
    m.windows(2).filter(|w| w[1] < w[0]).count() as f64 / (m.len() - 1) as f64
}

/// Edge-replicates a frame up to `h×w`.
fn pad_frame(f: &Frame, h: usize, w: usize) -> Frame {
    let mut data = Vec::with_capacity(f.channels * h * w);
    for c in 0..f.channels {
        let p = f.plane(c);
        for y in 0..h {
            let sy = y.min(f.height - 1);
            for x in 0..w {
                data.push(p[sy * f.width + x.min(f.width - 1)]);
            }
        }
    }
    Frame {
        channels: f.channels,
        height: h,
        width: w,
        data,
    }
}

/// Restores every frame from its centred window with an inference-mode
/// forward pass. Frames are edge-padded to a multiple of 8 and cropped back.
pub fn restore_clip(weights: &ModelWeights<f32>, clip: &VideoClip) -> Result<VideoClip> {
    let cfg = &weights.config;
    if clip.channels() != cfg.in_channels {
        return Err(Error::Config(format!(
            "clip has {} channels, weights expect {}",
            clip.channels(),
            cfg.in_channels
        )));
    }
    let (h, w) = (clip.height(), clip.width());
    let (ph, pw) = (h.div_ceil(8) * 8, w.div_ceil(8) * 8);
    let padded = VideoClip {
        frames: clip.frames.iter().map(|f| pad_frame(f, ph, pw)).collect(),
    };
    let mut out = Vec::with_capacity(clip.len());
    for (window, _) in sliding_window_iter(&padded, cfg.window_frames) {
        let x = stack(&window, 0, 0, ph, pw)?;
        let y = weights.forward(&x, Mode::Infer)?.output;
        let full = Frame::new(cfg.in_channels, ph, pw, y.into_data())?;
        let mut data = Vec::with_capacity(cfg.in_channels * h * w);
        for c in 0..cfg.in_channels {
            for row in full.plane(c).chunks(pw).take(h) {
                data.extend_from_slice(&row[..w]);
            }
        }
        out.push(Frame::new(cfg.in_channels, h, w, data)?);
    }
    VideoClip::new(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;

    fn clip(len: usize, c: usize, h: usize, w: usize, f: impl Fn(usize, usize, usize, usize) -> f32) -> VideoClip {
        VideoClip::new(
            (0..len)
                .map(|t| {
                    let mut data = Vec::new();
                    for ch in 0..c {
                        for y in 0..h {
                            for x in 0..w {
                                data.push(f(t, ch, y, x));
                            }
                        }
                    }
                    Frame::new(c, h, w, data).unwrap()
                })
                .collect(),
        )
        .unwrap()
    }

    #[test]
    fn charbonnier_values() {
        let x = Tensor::<f64>::from_f64_slice(&[3], &[0.1, 0.2, 0.3]).unwrap();
        assert_eq!(charbonnier(&x, &x, 1e-3).unwrap(), 1e-3);
        let a = Tensor::from_f64_slice(&[1], &[3e-3]).unwrap();
        let z = Tensor::from_f64_slice(&[1], &[0.0]).unwrap();
        assert!((charbonnier(&a, &z, 1e-3).unwrap() - 1e-5f64.sqrt()).abs() < 1e-12);
        assert_eq!(charbonnier(&a, &z, 1e-3).unwrap(), charbonnier(&z, &a, 1e-3).unwrap());
        assert!(charbonnier(&a, &x, 1e-3).is_err());
    }

    #[test]
    fn first_adam_step_moves_by_lr() {
        let cfg = TrainConfig::default();
        for g in [1e-3f64, 0.5, -7.0] {
            let mut p = BTreeMap::from([("w".to_string(), Tensor::<f64>::from_f64_slice(&[1], &[2.0]).unwrap())]);
            let grads = BTreeMap::from([("w".to_string(), Tensor::from_f64_slice(&[1], &[g]).unwrap())]);
            let mut s = OptState::new(&p).unwrap();
            adam_step(&mut p, &grads, &mut s, &cfg).unwrap();
            // m̂ = g, v̂ = g², so the step is lr·g/(|g| + eps).
            let want = 2.0 - cfg.lr * g / (g.abs() + cfg.adam_eps);
            assert!((p["w"].item() - want).abs() < 1e-15);
            assert_eq!(s.step, 1);
        }
    }

    #[test]
    fn zero_or_missing_gradient_leaves_weights_and_decays_moments() {
        let cfg = TrainConfig::default();
        let mut p = BTreeMap::from([("w".to_string(), Tensor::<f64>::from_f64_slice(&[2], &[1.0, -1.0]).unwrap())]);
        let mut s = OptState::new(&p).unwrap();
        s.m.insert("w".into(), Tensor::from_f64_slice(&[2], &[0.0, 0.0]).unwrap());
        let zero = BTreeMap::from([("w".to_string(), Tensor::zeros(&[2]).unwrap())]);
        adam_step(&mut p, &zero, &mut s, &cfg).unwrap();
        adam_step(&mut p, &BTreeMap::new(), &mut s, &cfg).unwrap();
        assert_eq!(p["w"].data(), &[1.0, -1.0]);
        let mut s = OptState::new(&p).unwrap();
        s.v.get_mut("w").unwrap().data_mut().fill(4.0);
        adam_step(&mut p, &zero, &mut s, &cfg).unwrap();
        assert!((s.v["w"].data()[0] - 0.999 * 4.0).abs() < 1e-15);
    }

    #[test]
    fn windows_replicate_edges() {
        assert_eq!(window_indices(50, 5, 0), vec![0, 0, 0, 1, 2]);
        assert_eq!(window_indices(50, 5, 49), vec![47, 48, 49, 49, 49]);
        assert_eq!(window_indices(1, 5, 0), vec![0; 5]);
        let c = clip(50, 1, 2, 2, |t, _, _, _| t as f32);
        let windows: Vec<_> = sliding_window_iter(&c, 5).collect();
        assert_eq!(windows.len(), 50);
        for (w, i) in &windows {
            assert_eq!(w[2].data[0], *i as f32);
        }
        for (w, i) in sliding_window_iter(&c, 1) {
            assert_eq!(w.len(), 1);
            assert_eq!(w[0], &c.frames[i]);
        }
    }

    #[test]
    fn crops_share_origin_and_centre() {
        // Coordinates encoded in the pixel value: t·10⁴ + y·100 + x.
        let enc = |t: usize, _: usize, y: usize, x: usize| (t * 10_000 + y * 100 + x) as f32;
        let pair = ClipPair::new(clip(7, 1, 20, 24, enc), clip(7, 1, 20, 24, enc)).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..20 {
            let (x, y) = random_crop(&pair, 8, 3, &mut rng).unwrap();
            assert_eq!(x.shape(), &[1, 1, 3, 8, 8]);
            assert_eq!(y.shape(), &[1, 1, 8, 8]);
            assert_eq!(&x.data()[64..128], y.data());
            let v = x.data()[0] as usize;
            assert_eq!(x.data()[64] as usize, v + 10_000);
            assert_eq!(x.data()[9] as usize, v + 101);
        }
        let mut a = ChaCha8Rng::seed_from_u64(9);
        let mut b = ChaCha8Rng::seed_from_u64(9);
        assert_eq!(random_crop(&pair, 8, 3, &mut a).unwrap(), random_crop(&pair, 8, 3, &mut b).unwrap());
        let full = ClipPair::new(clip(3, 1, 8, 8, enc), clip(3, 1, 8, 8, enc)).unwrap();
        let (x, _) = random_crop(&full, 8, 3, &mut a).unwrap();
        assert_eq!(x.data()[0], 0.0);
        assert!(random_crop(&full, 16, 3, &mut a).is_err());
    }

    fn tiny_pair() -> ClipPair {
        let clean = clip(4, 1, 8, 8, |t, _, y, x| ((x + y + t) % 4) as f32 / 4.0);
        let distorted = clip(4, 1, 8, 8, |t, _, y, x| ((x * 3 + y + t) % 5) as f32 / 5.0);
        ClipPair::new(distorted, clean).unwrap()
    }

    fn tiny_cfg(lr: f64, steps: usize) -> TrainConfig {
        TrainConfig {
            lr,
            steps,
            crop: 8,
            window: 3,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn zero_learning_rate_keeps_loss_constant() {
        let data = [tiny_pair()];
        // A single-window clip makes every crop identical.
        let one = ClipPair::new(
            VideoClip::new(data[0].distorted.frames[..3].to_vec()).unwrap(),
            VideoClip::new(data[0].clean.frames[..3].to_vec()).unwrap(),
        )
        .unwrap();
        let mut w = ModelWeights::<f32>::init(&ModelConfig::tiny()).unwrap();
        let before = w.params.clone();
        let r = train(&mut w, &[one], &tiny_cfg(0.0, 4), |_, _| {}).unwrap();
        assert_eq!(r.losses.len(), 4);
        assert!(r.losses.iter().all(|&l| l == r.losses[0]), "{:?}", r.losses);
        assert_eq!(w.params, before);
    }

    #[test]
    fn training_is_bit_identical_across_runs() {
        let data = [tiny_pair()];
        let run = || {
            let mut w = ModelWeights::<f32>::init(&ModelConfig::tiny()).unwrap();
            let r = train(&mut w, &data, &tiny_cfg(1e-3, 3), |_, _| {}).unwrap();
            (w, r)
        };
        let (wa, ra) = run();
        let (wb, rb) = run();
        assert_eq!(ra, rb);
        assert_eq!(wa, wb);
        assert_ne!(wa, ModelWeights::<f32>::init(&ModelConfig::tiny()).unwrap());
    }

    #[test]
    fn config_and_data_are_checked() {
        let mut w = ModelWeights::<f32>::init(&ModelConfig::tiny()).unwrap();
        assert!(train(&mut w, &[], &tiny_cfg(1e-3, 1), |_, _| {}).is_err());
        assert!(train(&mut w, &[tiny_pair()], &TrainConfig { crop: 12, ..tiny_cfg(1e-3, 1) }, |_, _| {}).is_err());
        assert!(train(&mut w, &[tiny_pair()], &TrainConfig { window: 5, ..tiny_cfg(1e-3, 1) }, |_, _| {}).is_err());
        assert!(TrainConfig { lr: -1.0, ..TrainConfig::default() }.validate().is_err());
    }

    #[test]
    fn restore_keeps_length_and_geometry() {
        let w = ModelWeights::<f32>::init(&ModelConfig::tiny()).unwrap();
        let c = clip(5, 1, 10, 13, |t, _, y, x| ((x + y * 2 + t) % 7) as f32 / 7.0);
        let r = restore_clip(&w, &c).unwrap();
        assert_eq!(r.len(), 5);
        assert!(r.frames[0].same_geometry(&c.frames[0]));
        assert_eq!(r, restore_clip(&w, &c).unwrap());
    }

    #[test]
    fn block_statistics() {
        let l: Vec<f64> = (0..60).map(|i| 1.0 / (1.0 + i as f64)).collect();
        assert_eq!(block_means(&l, 20).len(), 3);
        assert_eq!(decreasing_fraction(&l, 20), 1.0);
        assert_eq!(decreasing_fraction(&[1.0; 40], 20), 0.0);
    }

    #[test]
    fn loss_csv_has_header() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("loss.csv");
        write_loss_csv(&p, &[0.5, 0.25]).unwrap();
        let text = std::fs::read_to_string(p).unwrap();
        assert_eq!(text.lines().next(), Some("step,loss"));
        assert_eq!(text.lines().count(), 3);
    }
}
