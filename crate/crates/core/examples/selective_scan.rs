//! Zero-order-hold discretization and the selective scan on a toy sequence.

use mamat::autodiff::Tape;
use mamat::nn::{discretize, selective_scan};
use mamat::Tensor;

fn main() -> mamat::Result<()> {
    let (abar, bbar) = discretize(-1.0f64, 0.1, 1.0)?;
    println!("A = -1, delta = 0.1, B = 1  ->  Abar {abar:.6}  Bbar {bbar:.7}");

    // One channel, two state dims, impulse input: the response decays at
    // rates set by A = -(k + 1).
    let len = 12;
    let d = 2;
    let tape = Tape::<f64>::inference();
    let c = |shape: &[usize], v: Vec<f64>| Tensor::from_vec(shape, v).map(|t| tape.constant(t));
    let mut x = vec![0.0; len];
    x[0] = 1.0;
    let y = selective_scan(
        c(&[1, 1, len], x)?,
        c(&[1, 1, len], vec![0.5; len])?,
        c(&[1, d], vec![1f64.ln(), 2f64.ln()])?,
        c(&[1, d, len], vec![1.0; d * len])?,
        c(&[1, d, len], vec![1.0; d * len])?,
        c(&[1], vec![0.0])?,
    )?;
    for (t, v) in y.value().data().iter().enumerate() {
        println!("t={t:2}  y={v:.6}");
    }
    Ok(())
}
