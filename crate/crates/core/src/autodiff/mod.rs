//! Reverse-mode differentiation over [`Tensor`](crate::tensor::Tensor).

pub mod gradcheck;
mod ops;
mod tape;

pub use gradcheck::{finite_diff_check, relative_error, CheckOptions, GradReport, ParamSet};
pub use ops::{sigmoid, softplus};
pub use tape::{Backward, Entry, Gradients, Tape, Var};

#[cfg(test)]
mod tests {
    use super::*;
    use crate::error::Error;
    use crate::tensor::Tensor;

    #[test]
    fn sum_gradient_is_ones() {
        let tape = Tape::<f64>::new();
        let x = tape.param("x", Tensor::from_f64_slice(&[3], &[1.0, -2.0, 5.0]).unwrap());
        let g = tape.backward(x.sum()).unwrap();
        assert_eq!(g.get("x").unwrap().data(), &[1.0, 1.0, 1.0]);
    }

    #[test]
    fn sum_of_squares_gradient() {
        let tape = Tape::<f64>::new();
        let x = tape.param("x", Tensor::from_f64_slice(&[2], &[1.0, 2.0]).unwrap());
        let g = tape.backward(x.mul(x).unwrap().sum()).unwrap();
        assert_eq!(g.get("x").unwrap().data(), &[2.0, 4.0]);
    }

    #[test]
    fn unused_parameter_gets_zero_gradient() {
        let tape = Tape::<f64>::new();
        let x = tape.param("x", Tensor::<f64>::ones(&[2]).unwrap());
        let _unused = tape.param("w", Tensor::<f64>::ones(&[2, 3]).unwrap());
        let g = tape.backward(x.sum()).unwrap();
        let w = g.get("w").unwrap();
        assert_eq!(w.shape(), &[2, 3]);
        assert!(w.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn non_scalar_loss_is_rejected() {
        let tape = Tape::<f64>::new();
        let x = tape.param("x", Tensor::<f64>::ones(&[2]).unwrap());
        assert!(matches!(tape.backward(x.relu()), Err(Error::NonScalarLoss(_))));
    }

    #[test]
    fn entries_are_topologically_ordered() {
        let tape = Tape::<f64>::new();
        let x = tape.param("x", Tensor::<f64>::ones(&[2]).unwrap());
        let y = x.square().add(x).unwrap().sum();
        let _ = tape.backward(y).unwrap();
        for e in tape.entries() {
            assert!(e.inputs.iter().all(|&i| i < e.output), "{e:?}");
        }
        let ops: Vec<_> = tape.entries().iter().map(|e| e.op).collect();
        assert_eq!(ops, vec!["square", "add", "sum"]);
    }

    #[test]
    fn inference_tape_keeps_no_rules() {
        let tape = Tape::<f64>::inference();
        let x = tape.param("x", Tensor::ones(&[2]).unwrap());
        let y = x.square().sum();
        assert!(!y.requires_grad());
        assert_eq!(y.value().item(), 2.0);
    }

    #[test]
    fn backward_is_linear_over_terms() {
        let xv = Tensor::from_f64_slice(&[3], &[0.3, -1.1, 2.5]).unwrap();
        let grad_of = |which: u8| {
            let tape = Tape::<f64>::new();
            let x = tape.param("x", xv.clone());
            let a = x.square().sum();
            let b = x.exp().sum();
            let loss = match which {
                0 => a,
                1 => b,
                _ => a.add(b).unwrap(),
            };
            tape.backward(loss).unwrap().get("x").unwrap().clone()
        };
        let (ga, gb, gs) = (grad_of(0), grad_of(1), grad_of(2));
        for i in 0..3 {
            assert!((ga.data()[i] + gb.data()[i] - gs.data()[i]).abs() <= 1e-12);
        }
    }
}
