//! Elementwise, reduction and structural primitives.

use crate::autodiff::tape::{Backward, Var};
use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

#[derive(Clone, Copy, Debug, PartialEq)]
enum Unary {
    Relu,
    Sqrt,
    Square,
    Exp,
    Softplus,
    Scale(f64),
    AddScalar(f64),
    Clamp(f64, f64),
}

impl Unary {
    fn name(self) -> &'static str {
        match self {
            Unary::Relu => "relu",
            Unary::Sqrt => "sqrt",
            Unary::Square => "square",
            Unary::Exp => "exp",
            Unary::Softplus => "softplus",
            Unary::Scale(_) => "scale",
            Unary::AddScalar(_) => "add_scalar",
            Unary::Clamp(..) => "clamp",
        }
    }

    fn apply<S: Real>(self, x: S) -> S {
        match self {
            Unary::Relu => x.max(S::zero()),
            Unary::Sqrt => x.sqrt(),
            Unary::Square => x * x,
            Unary::Exp => x.exp(),
            Unary::Softplus => softplus(x),
            Unary::Scale(c) => x * S::from_f64(c),
            Unary::AddScalar(c) => x + S::from_f64(c),
            Unary::Clamp(lo, hi) => x.max(S::from_f64(lo)).min(S::from_f64(hi)),
        }
    }

    /// dy/dx given input `x` and output `y`.
    fn derivative<S: Real>(self, x: S, y: S) -> S {
        match self {
            // Subgradient 0 at the kink.
            Unary::Relu => {
                if x > S::zero() {
                    S::one()
                } else {
                    S::zero()
                }
            }
            Unary::Sqrt => S::from_f64(0.5) / y,
            Unary::Square => x + x,
            Unary::Exp => y,
            Unary::Softplus => sigmoid(x),
            Unary::Scale(c) => S::from_f64(c),
            Unary::AddScalar(_) => S::one(),
            Unary::Clamp(lo, hi) => {
                if x >= S::from_f64(lo) && x <= S::from_f64(hi) {
                    S::one()
                } else {
                    S::zero()
                }
            }
        }
    }
}

/// Numerically stable `ln(1 + e^x)`.
pub fn softplus<S: Real>(x: S) -> S {
    if x > S::from_f64(20.0) {
        x
    } else {
        x.max(S::zero()) + (-x.abs()).exp().ln_1p()
    }
}

pub fn sigmoid<S: Real>(x: S) -> S {
    if x >= S::zero() {
        S::one() / (S::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (S::one() + e)
    }
}

struct UnaryOp(Unary);

impl<S: Real> Backward<S> for UnaryOp {
    fn name(&self) -> &'static str {
        self.0.name()
    }

    fn backward(
        &self,
        grad: &Tensor<S>,
        inputs: &[&Tensor<S>],
        output: &Tensor<S>,
        _needs: &[bool],
    ) -> Vec<Option<Tensor<S>>> {
        let x = inputs[0];
        let data = grad
            .data()
            .iter()
            .zip(x.data())
            .zip(output.data())
            .map(|((&g, &x), &y)| g * self.0.derivative(x, y))
            .collect();
        vec![Some(Tensor::from_parts(x.shape().to_vec(), data))]
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
enum Binary {
    Add,
    Sub,
    Mul,
}

/// Binary op where either side may be a single-element tensor.
struct BinaryOp {
    kind: Binary,
    lhs_scalar: bool,
    rhs_scalar: bool,
}

impl BinaryOp {
    fn name_of(kind: Binary) -> &'static str {
        match kind {
            Binary::Add => "add",
            Binary::Sub => "sub",
            Binary::Mul => "mul",
        }
    }
}

impl<S: Real> Backward<S> for BinaryOp {
    fn name(&self) -> &'static str {
        Self::name_of(self.kind)
    }

    fn backward(
        &self,
        grad: &Tensor<S>,
        inputs: &[&Tensor<S>],
        _output: &Tensor<S>,
        needs: &[bool],
    ) -> Vec<Option<Tensor<S>>> {
        let (a, b) = (inputs[0], inputs[1]);
        let n = grad.len();
        let at = |t: &Tensor<S>, scalar: bool, i: usize| if scalar { t.data()[0] } else { t.data()[i] };
        let mut out = Vec::with_capacity(2);
        for (side, (&need, (this, scalar))) in needs
            .iter()
            .zip([(a, self.lhs_scalar), (b, self.rhs_scalar)])
            .enumerate()
        {
            if !need {
                out.push(None);
                continue;
            }
            let local = |i: usize| -> S {
                match (self.kind, side) {
                    (Binary::Add, _) => S::one(),
                    (Binary::Sub, 0) => S::one(),
                    (Binary::Sub, _) => -S::one(),
                    (Binary::Mul, 0) => at(b, self.rhs_scalar, i),
                    (Binary::Mul, _) => at(a, self.lhs_scalar, i),
                }
            };
            if scalar {
                let total = (0..n).map(|i| grad.data()[i] * local(i)).sum::<S>();
                out.push(Some(Tensor::from_parts(this.shape().to_vec(), vec![total])));
            } else {
                let data = (0..n).map(|i| grad.data()[i] * local(i)).collect();
                out.push(Some(Tensor::from_parts(this.shape().to_vec(), data)));
            }
        }
        out
    }
}

struct SumOp {
    scale: f64,
}

impl<S: Real> Backward<S> for SumOp {
    fn name(&self) -> &'static str {
        if self.scale == 1.0 {
            "sum"
        } else {
            "mean"
        }
    }

    fn backward(
        &self,
        grad: &Tensor<S>,
        inputs: &[&Tensor<S>],
        _output: &Tensor<S>,
        _needs: &[bool],
    ) -> Vec<Option<Tensor<S>>> {
        let g = grad.item() * S::from_f64(self.scale);
        vec![Some(Tensor::from_parts(
            inputs[0].shape().to_vec(),
            vec![g; inputs[0].len()],
        ))]
    }
}

struct ReshapeOp;

impl<S: Real> Backward<S> for ReshapeOp {
    fn name(&self) -> &'static str {
        "reshape"
    }

    fn backward(
        &self,
        grad: &Tensor<S>,
        inputs: &[&Tensor<S>],
        _output: &Tensor<S>,
        _needs: &[bool],
    ) -> Vec<Option<Tensor<S>>> {
        vec![Some(Tensor::from_parts(
            inputs[0].shape().to_vec(),
            grad.data().to_vec(),
        ))]
    }
}

/// Concatenation along axis 1 of tensors agreeing on every other axis.
struct ConcatOp {
    widths: Vec<usize>,
    outer: usize,
    inner: usize,
}

impl<S: Real> Backward<S> for ConcatOp {
    fn name(&self) -> &'static str {
        "concat"
    }

    fn backward(
        &self,
        grad: &Tensor<S>,
        inputs: &[&Tensor<S>],
        _output: &Tensor<S>,
        needs: &[bool],
    ) -> Vec<Option<Tensor<S>>> {
        let total: usize = self.widths.iter().sum();
        let mut offset = 0;
        let mut out = Vec::with_capacity(inputs.len());
        for (input, (&w, &need)) in inputs.iter().zip(self.widths.iter().zip(needs)) {
            if need {
                let mut data = Vec::with_capacity(input.len());
                for o in 0..self.outer {
                    let start = (o * total + offset) * self.inner;
                    data.extend_from_slice(&grad.data()[start..start + w * self.inner]);
                }
                out.push(Some(Tensor::from_parts(input.shape().to_vec(), data)));
            } else {
                out.push(None);
            }
            offset += w;
        }
        out
    }
}

/// `out[r, j] = in[r, index[j]]` over rows of the leading two axes.
struct GatherOp {
    index: Vec<usize>,
    rows: usize,
    in_cols: usize,
}

impl<S: Real> Backward<S> for GatherOp {
    fn name(&self) -> &'static str {
        "gather"
    }

    fn backward(
        &self,
        grad: &Tensor<S>,
        inputs: &[&Tensor<S>],
        _output: &Tensor<S>,
        _needs: &[bool],
    ) -> Vec<Option<Tensor<S>>> {
        let out_cols = self.index.len();
        let mut data = vec![S::zero(); self.rows * self.in_cols];
        for r in 0..self.rows {
            let g = &grad.data()[r * out_cols..(r + 1) * out_cols];
            let dst = &mut data[r * self.in_cols..(r + 1) * self.in_cols];
            for (j, &src) in self.index.iter().enumerate() {
                dst[src] = dst[src] + g[j];
            }
        }
        vec![Some(Tensor::from_parts(inputs[0].shape().to_vec(), data))]
    }
}

/// Mean Charbonnier penalty `mean(sqrt((x - y)² + eps²))`.
struct CharbonnierOp {
    eps: f64,
}

impl<S: Real> Backward<S> for CharbonnierOp {
    fn name(&self) -> &'static str {
        "charbonnier"
    }

    fn backward(
        &self,
        grad: &Tensor<S>,
        inputs: &[&Tensor<S>],
        _output: &Tensor<S>,
        needs: &[bool],
    ) -> Vec<Option<Tensor<S>>> {
        let (x, y) = (inputs[0], inputs[1]);
        let scale = grad.item() / S::from_f64(x.len() as f64);
        let eps2 = S::from_f64(self.eps * self.eps);
        let dx: Vec<S> = x
            .data()
            .iter()
            .zip(y.data())
            .map(|(&a, &b)| {
                let d = a - b;
                scale * d / (d * d + eps2).sqrt()
            })
            .collect();
        let dy = if needs[1] {
            Some(Tensor::from_parts(
                y.shape().to_vec(),
                dx.iter().map(|&v| -v).collect(),
            ))
        } else {
            None
        };
        vec![Some(Tensor::from_parts(x.shape().to_vec(), dx)), dy]
    }
}

impl<'t, S: Real> Var<'t, S> {
    fn unary(self, kind: Unary) -> Var<'t, S> {
        let out = self.value().map(|v| kind.apply(v));
        self.tape().record(out, &[self], UnaryOp(kind))
    }

    fn binary(self, other: Var<'t, S>, kind: Binary) -> Result<Var<'t, S>> {
        let a = self.value();
        let b = other.value();
        let (lhs_scalar, rhs_scalar) = if a.shape() == b.shape() {
            (false, false)
        } else if b.is_scalar() {
            (false, true)
        } else if a.is_scalar() {
            (true, false)
        } else {
            return Err(Error::mismatch(BinaryOp::name_of(kind), a.shape(), b.shape()));
        };
        let shape = if lhs_scalar { b.shape() } else { a.shape() };
        let n = shape.iter().product::<usize>();
        let at = |t: &Tensor<S>, scalar: bool, i: usize| if scalar { t.data()[0] } else { t.data()[i] };
        let data = (0..n)
            .map(|i| {
                let (x, y) = (at(&a, lhs_scalar, i), at(&b, rhs_scalar, i));
                match kind {
                    Binary::Add => x + y,
                    Binary::Sub => x - y,
                    Binary::Mul => x * y,
                }
            })
            .collect();
        let out = Tensor::from_parts(shape.to_vec(), data);
        Ok(self.tape().record(
            out,
            &[self, other],
            BinaryOp {
                kind,
                lhs_scalar,
                rhs_scalar,
            },
        ))
    }

    pub fn add(self, other: Var<'t, S>) -> Result<Var<'t, S>> {
        self.binary(other, Binary::Add)
    }

    pub fn sub(self, other: Var<'t, S>) -> Result<Var<'t, S>> {
        self.binary(other, Binary::Sub)
    }

    pub fn mul(self, other: Var<'t, S>) -> Result<Var<'t, S>> {
        self.binary(other, Binary::Mul)
    }

    pub fn relu(self) -> Var<'t, S> {
        self.unary(Unary::Relu)
    }

    /// Fails on any negative element.
    pub fn sqrt(self) -> Result<Var<'t, S>> {
        if self.value().data().iter().any(|&v| v < S::zero()) {
            return Err(Error::domain("sqrt", "negative input"));
        }
        Ok(self.unary(Unary::Sqrt))
    }

    pub fn square(self) -> Var<'t, S> {
        self.unary(Unary::Square)
    }

    pub fn exp(self) -> Var<'t, S> {
        self.unary(Unary::Exp)
    }

    pub fn softplus(self) -> Var<'t, S> {
        self.unary(Unary::Softplus)
    }

    pub fn scale(self, c: f64) -> Var<'t, S> {
        self.unary(Unary::Scale(c))
    }

    pub fn add_scalar(self, c: f64) -> Var<'t, S> {
        self.unary(Unary::AddScalar(c))
    }

    pub fn clamp(self, lo: f64, hi: f64) -> Var<'t, S> {
        self.unary(Unary::Clamp(lo, hi))
    }

    /// Sum of all elements, shape `[1]`.
    pub fn sum(self) -> Var<'t, S> {
        let out = Tensor::scalar(self.value().sum());
        self.tape().record(out, &[self], SumOp { scale: 1.0 })
    }

    pub fn mean(self) -> Var<'t, S> {
        let v = self.value();
        let n = v.len() as f64;
        let out = Tensor::scalar(v.sum() / S::from_f64(n));
        self.tape().record(out, &[self], SumOp { scale: 1.0 / n })
    }

    pub fn reshape(self, shape: &[usize]) -> Result<Var<'t, S>> {
        let out = self.value().reshape(shape)?;
        Ok(self.tape().record(out, &[self], ReshapeOp))
    }

    /// Concatenates along axis 1.
    pub fn concat(parts: &[Var<'t, S>]) -> Result<Var<'t, S>> {
        let first = parts
            .first()
            .ok_or_else(|| Error::domain("concat", "no inputs"))?
            .value();
        let shape0 = first.shape().to_vec();
        if shape0.len() < 2 {
            return Err(Error::shape(&shape0, "concat needs rank ≥ 2"));
        }
        let outer = shape0[0];
        let inner: usize = shape0[2..].iter().product();
        let values: Vec<_> = parts.iter().map(|p| p.value()).collect();
        let mut widths = Vec::with_capacity(parts.len());
        for v in &values {
            let s = v.shape();
            if s.len() != shape0.len() || s[0] != outer || s[2..] != shape0[2..] {
                return Err(Error::mismatch("concat", &shape0, s));
            }
            widths.push(s[1]);
        }
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for (v, &w) in values.iter().zip(&widths) {
                data.extend_from_slice(&v.data()[o * w * inner..(o + 1) * w * inner]);
            }
        }
        let mut shape = shape0.clone();
        shape[1] = total;
        let out = Tensor::from_parts(shape, data);
        Ok(first_tape(parts).record(
            out,
            parts,
            ConcatOp {
                widths,
                outer,
                inner,
            },
        ))
    }

    /// Reorders positions within each `(n, c)` row.
    ///
    /// The input is viewed as `rows × cols` with `rows = shape[0]·shape[1]`;
    /// the output has `rows × index.len()` elements under `out_shape`.
    pub fn gather(self, index: &[usize], out_shape: &[usize]) -> Result<Var<'t, S>> {
        let v = self.value();
        let s = v.shape();
        if s.len() < 2 {
            return Err(Error::shape(s, "gather needs rank ≥ 2"));
        }
        let rows = s[0] * s[1];
        let in_cols = v.len() / rows;
        if let Some(&bad) = index.iter().find(|&&i| i >= in_cols) {
            return Err(Error::domain("gather", format!("index {bad} out of range {in_cols}")));
        }
        if out_shape.iter().product::<usize>() != rows * index.len() {
            return Err(Error::mismatch("gather", s, out_shape));
        }
        let mut data = Vec::with_capacity(rows * index.len());
        for r in 0..rows {
            let row = &v.data()[r * in_cols..(r + 1) * in_cols];
            data.extend(index.iter().map(|&i| row[i]));
        }
        let out = Tensor::from_vec(out_shape, data)?;
        Ok(self.tape().record(
            out,
            &[self],
            GatherOp {
                index: index.to_vec(),
                rows,
                in_cols,
            },
        ))
    }

    /// Frame `t` of an `N×C×T×H×W` tensor, keeping a unit time axis.
    pub fn select_frame(self, t: usize) -> Result<Var<'t, S>> {
        let s = self.shape();
        if s.len() != 5 || t >= s[2] {
            return Err(Error::shape(&s, format!("cannot select frame {t}")));
        }
        let (frames, plane) = (s[2], s[3] * s[4]);
        let index: Vec<usize> = (t * plane..(t + 1) * plane).collect();
        debug_assert!(index.iter().all(|&i| i < frames * plane));
        self.gather(&index, &[s[0], s[1], 1, s[3], s[4]])
    }

    /// Mean Charbonnier penalty against `target`.
    pub fn charbonnier(self, target: Var<'t, S>, eps: f64) -> Result<Var<'t, S>> {
        if eps <= 0.0 {
            return Err(Error::domain("charbonnier", "eps must be positive"));
        }
        let x = self.value();
        let y = target.value();
        if x.shape() != y.shape() {
            return Err(Error::mismatch("charbonnier", x.shape(), y.shape()));
        }
        let e = S::from_f64(eps);
        // Accumulating the excess over eps keeps L(x, x) == eps exactly.
        let excess: S = x
            .data()
            .iter()
            .zip(y.data())
            .map(|(&a, &b)| ((a - b) * (a - b) + e * e).sqrt() - e)
            .sum();
        let out = Tensor::scalar(excess / S::from_f64(x.len() as f64) + e);
        Ok(self.tape().record(out, &[self, target], CharbonnierOp { eps }))
    }
}

fn first_tape<'t, S: Real>(parts: &[Var<'t, S>]) -> &'t crate::autodiff::Tape<S> {
    parts[0].tape()
}
