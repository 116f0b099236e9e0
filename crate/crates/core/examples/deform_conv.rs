//! Deformable 3D convolution: zero offsets reduce to the plain convolution,
//! and a constant offset of one pixel along x shifts the response.

use mamat::autodiff::Tape;
use mamat::nn::{conv3d, deform_conv3d, deform_sample_conv, Conv3dParams, DeformConv3dParams};
use mamat::Tensor;

const TAPS: usize = 27;

fn main() -> mamat::Result<()> {
    let tape = Tape::<f32>::inference();
    let (t, h, w) = (3, 6, 6);
    let ramp: Vec<f32> = (0..t * h * w).map(|i| (i % w) as f32).collect();
    let x = tape.constant(Tensor::from_vec(&[1, 1, t, h, w], ramp)?);

    // 3×3×3 kernel that reads only the centre tap.
    let mut k = vec![0.0f32; TAPS];
    k[13] = 1.0;
    let weight = tape.constant(Tensor::from_vec(&[1, 1, 3, 3, 3], k)?);
    let main = Conv3dParams::same(weight, None);

    let zero = DeformConv3dParams {
        main,
        offset: Conv3dParams::same(tape.constant(Tensor::zeros(&[3 * TAPS, 1, 3, 3, 3])?), None),
    };
    let plain = conv3d(x, &main)?.value();
    let deformed = deform_conv3d(x, &zero)?.value();
    println!("zero offsets: max |deform - conv| = {:e}", deformed.max_abs_diff(&plain)?);

    // Offsets are (Δt, Δy, Δx) per tap; push every tap +1 along x.
    let mut off = vec![0.0f32; 3 * TAPS * t * h * w];
    let plane = t * h * w;
    for tap in 0..TAPS {
        off[(2 * TAPS + tap) * plane..(2 * TAPS + tap + 1) * plane].fill(1.0);
    }
    let offsets = tape.constant(Tensor::from_vec(&[1, 3 * TAPS, t, h, w], off)?);
    let shifted = deform_sample_conv(x, offsets, weight, None)?.value();
    let row = |v: &Tensor<f32>| v.data()[h * w + 2 * w..h * w + 3 * w].to_vec();
    println!("input row      {:?}", row(&plain));
    println!("shifted by +1x {:?}", row(&shifted));
    Ok(())
}
