//! Overfits the default-width model on one simulated 16-frame 32×32 clip and
//! reports loss and PSNR before and after.
//!
//! cargo run --release --example train_overfit -- [steps] [lr]

use std::time::Instant;

use mamat::eval::psnr;
use mamat::model::{ModelConfig, ModelWeights};
use mamat::sim::{simulate_clip, test_chart, SimParams};
use mamat::train::{decreasing_fraction, restore_clip, train, ClipPair, TrainConfig};
use mamat::video::VideoClip;

fn mean_psnr(a: &VideoClip, b: &VideoClip) -> f64 {
    a.frames.iter().zip(&b.frames).map(|(x, y)| psnr(x, y).unwrap()).sum::<f64>() / a.len() as f64
}

fn main() -> mamat::Result<()> {
    let args: Vec<String> = std::env::args().collect();
    let steps = args.get(1).map_or(300, |s| s.parse().expect("steps"));
    let lr = args.get(2).map_or(1e-3, |s| s.parse().expect("lr"));

    let clean = test_chart(16, 1, 32, 32)?;
    let distorted = simulate_clip(&clean, &SimParams { seed: 7, ..SimParams::default() })?.quantized();
    let pair = ClipPair::new(distorted.clone(), clean.clone())?;

    let model = ModelConfig {
        in_channels: 1,
        ..ModelConfig::default()
    };
    let mut weights = ModelWeights::<f32>::init(&model)?;
    let cfg = TrainConfig {
        lr,
        steps,
        ..TrainConfig::default()
    };
    let start = Instant::now();
    let report = train(&mut weights, &[pair], &cfg, |step, loss| {
        if step % 25 == 0 {
            println!("step {step:4}  loss {loss:.5}  {:.1}s", start.elapsed().as_secs_f64());
        }
    })?;
    let restored = restore_clip(&weights, &distorted)?;
    let l = &report.losses;
    let head = l[..20.min(l.len())].iter().sum::<f64>() / 20f64.min(l.len() as f64);
    let tail = l[l.len().saturating_sub(20)..].iter().sum::<f64>() / 20f64.min(l.len() as f64);
    println!("loss: first {:.5} last {:.5} (first-20 mean {head:.5}, last-20 mean {tail:.5})", l[0], l[l.len() - 1]);
    println!("decreasing 20-step blocks: {:.2}", decreasing_fraction(l, 20));
    println!(
        "PSNR distorted {:.2} dB, restored {:.2} dB",
        mean_psnr(&distorted, &clean),
        mean_psnr(&restored, &clean)
    );
    println!("wall time {:.1}s", start.elapsed().as_secs_f64());
    Ok(())
}
