//! Renders the synthetic test chart, distorts it with the tilt + blur model
//! and writes both clips as PGM frames.
//!
//! cargo run --release --example simulate -- [out_dir]

use std::path::PathBuf;

use mamat::eval::psnr;
use mamat::sim::{simulate_clip, test_chart, SimParams};
use mamat::video::{write_clip, ClipManifest};

fn main() -> mamat::Result<()> {
    let out = PathBuf::from(std::env::args().nth(1).unwrap_or_else(|| "target/sim-demo".into()));
    let clean = test_chart(16, 1, 64, 64)?;
    write_clip(&out.join("clean"), &clean, &ClipManifest::describe(&clean))?;

    for alpha in [0.0, 1.0, 2.0, 4.0] {
        let p = SimParams {
            alpha,
            seed: 1,
            ..SimParams::default()
        };
        let distorted = simulate_clip(&clean, &p)?;
        let mean: f64 = clean
            .frames
            .iter()
            .zip(&distorted.frames)
            .map(|(a, b)| psnr(a, b).unwrap())
            .sum::<f64>()
            / clean.len() as f64;
        println!("alpha {alpha:3.1}  sigma_b {:.1}  mean PSNR vs clean {mean:6.2} dB", p.sigma_b);
        if alpha == 2.0 {
            let manifest = ClipManifest {
                sim: Some(p.clone()),
                seed: Some(p.seed),
                ..ClipManifest::describe(&distorted)
            };
            write_clip(&out.join("distorted"), &distorted, &manifest)?;
        }
    }
    println!("clips written under {}", out.display());
    Ok(())
}
