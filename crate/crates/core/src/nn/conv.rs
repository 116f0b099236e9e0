//! Dense 3D convolution (im2col + GEMM) and nearest-neighbour upsampling.

use crate::autodiff::{Backward, Var};
use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

/// Kernel, stride and zero padding along (T, H, W).
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
    pub kernel: [usize; 3],
    pub stride: [usize; 3],
    pub padding: [usize; 3],
}

impl ConvGeometry {
    /// Stride-1 geometry with `k/2` padding, preserving extents for odd kernels.
    pub fn same(kernel: [usize; 3]) -> Self {
        Self {
            kernel,
            stride: [1; 3],
            padding: [kernel[0] / 2, kernel[1] / 2, kernel[2] / 2],
        }
    }

    pub fn cube(k: usize) -> Self {
        Self::same([k; 3])
    }

    pub fn with_stride(mut self, stride: [usize; 3]) -> Self {
        self.stride = stride;
        self
    }

    pub fn taps(&self) -> usize {
        self.kernel.iter().product()
    }

    /// Output extents for input extents `(T, H, W)`.
    pub fn output(&self, input: [usize; 3]) -> Result<[usize; 3]> {
        let mut out = [0; 3];
        for a in 0..3 {
            let padded = input[a] + 2 * self.padding[a];
            if self.stride[a] == 0 || padded < self.kernel[a] {
                return Err(Error::domain(
                    "conv3d",
                    format!(
                        "extent {:?} (+padding {:?}) smaller than kernel {:?}",
                        input, self.padding, self.kernel
                    ),
                ));
            }
            out[a] = (padded - self.kernel[a]) / self.stride[a] + 1;
        }
        Ok(out)
    }
}

/// Weights of one convolution layer together with its geometry.
#[derive(Clone, Copy, Debug)]
pub struct Conv3dParams<'t, S: Real> {
    /// `Cout×Cin×kT×kH×kW`.
    pub weight: Var<'t, S>,
    /// `Cout`, or `None` for bias-free layers.
    pub bias: Option<Var<'t, S>>,
    pub stride: [usize; 3],
    pub padding: [usize; 3],
}

impl<'t, S: Real> Conv3dParams<'t, S> {
    /// "Same" padding derived from the weight's kernel extents.
    pub fn same(weight: Var<'t, S>, bias: Option<Var<'t, S>>) -> Self {
        let s = weight.shape();
        let geom = ConvGeometry::same([s[2], s[3], s[4]]);
        Self {
            weight,
            bias,
            stride: geom.stride,
            padding: geom.padding,
        }
    }

    pub fn strided(mut self, stride: [usize; 3]) -> Self {
        self.stride = stride;
        self
    }

    pub fn geometry(&self) -> ConvGeometry {
        let s = self.weight.shape();
        ConvGeometry {
            kernel: [s[2], s[3], s[4]],
            stride: self.stride,
            padding: self.padding,
        }
    }
}

pub(crate) fn split5(shape: &[usize], what: &'static str) -> Result<[usize; 5]> {
    if shape.len() != 5 {
        return Err(Error::shape(shape, format!("{what} expects N×C×T×H×W")));
    }
    Ok([shape[0], shape[1], shape[2], shape[3], shape[4]])
}

/// Unfolds one batch entry `x: Cin×T×H×W` into `cols: (Cin·K)×P`.
fn im2col<S: Real>(x: &[S], cin: usize, dims: [usize; 3], g: &ConvGeometry, out: [usize; 3], cols: &mut [S]) {
    let [t_in, h_in, w_in] = dims;
    let [to, ho, wo] = out;
    let p = to * ho * wo;
    let [kt, kh, kw] = g.kernel;
    let mut row = 0;
    for c in 0..cin {
        let xc = &x[c * t_in * h_in * w_in..(c + 1) * t_in * h_in * w_in];
        for dt in 0..kt {
            for dy in 0..kh {
                for dx in 0..kw {
                    let dst = &mut cols[row * p..(row + 1) * p];
                    let mut o = 0;
                    for ot in 0..to {
                        let it = (ot * g.stride[0] + dt) as isize - g.padding[0] as isize;
                        for oy in 0..ho {
                            let iy = (oy * g.stride[1] + dy) as isize - g.padding[1] as isize;
                            let row_ok = it >= 0 && (it as usize) < t_in && iy >= 0 && (iy as usize) < h_in;
                            for ox in 0..wo {
                                let ix = (ox * g.stride[2] + dx) as isize - g.padding[2] as isize;
                                dst[o] = if row_ok && ix >= 0 && (ix as usize) < w_in {
                                    xc[(it as usize * h_in + iy as usize) * w_in + ix as usize]
                                } else {
                                    S::zero()
                                };
                                o += 1;
                            }
                        }
                    }
                    row += 1;
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatter-adds `cols` back onto `dx`.
fn col2im<S: Real>(cols: &[S], cin: usize, dims: [usize; 3], g: &ConvGeometry, out: [usize; 3], dx: &mut [S]) {
    let [t_in, h_in, w_in] = dims;
    let [to, ho, wo] = out;
    let p = to * ho * wo;
    let [kt, kh, kw] = g.kernel;
    let mut row = 0;
    for c in 0..cin {
        let dxc = &mut dx[c * t_in * h_in * w_in..(c + 1) * t_in * h_in * w_in];
        for dt in 0..kt {
            for dy in 0..kh {
                for dxk in 0..kw {
                    let src = &cols[row * p..(row + 1) * p];
                    let mut o = 0;
                    for ot in 0..to {
                        let it = (ot * g.stride[0] + dt) as isize - g.padding[0] as isize;
                        for oy in 0..ho {
                            let iy = (oy * g.stride[1] + dy) as isize - g.padding[1] as isize;
                            let row_ok = it >= 0 && (it as usize) < t_in && iy >= 0 && (iy as usize) < h_in;
                            for ox in 0..wo {
                                let ix = (ox * g.stride[2] + dxk) as isize - g.padding[2] as isize;
                                if row_ok && ix >= 0 && (ix as usize) < w_in {
                                    let i = (it as usize * h_in + iy as usize) * w_in + ix as usize;
                                    dxc[i] = dxc[i] + src[o];
                                }
                                o += 1;
                            }
                        }
                    }
                    row += 1;
                }
            }
        }
    }
}

/// Shared GEMM backward for layers expressed as `Y = W·cols + b`.
///
/// Returns `(dW, dcols per batch entry, db)`.
pub(crate) struct LinearCols<S> {
    pub cols: Vec<Vec<S>>,
    pub cout: usize,
    pub rows: usize,
    pub p: usize,
}

impl<S: Real> LinearCols<S> {
    pub(crate) fn forward(&self, weight: &[S], bias: Option<&[S]>) -> Vec<S> {
        let (cout, p) = (self.cout, self.p);
        let mut out = vec![S::zero(); self.cols.len() * cout * p];
        for (n, cols) in self.cols.iter().enumerate() {
            let y = &mut out[n * cout * p..(n + 1) * cout * p];
            if let Some(b) = bias {
                for (co, chunk) in y.chunks_mut(p).enumerate() {
                    chunk.fill(b[co]);
                }
            }
            S::gemm(
                cout,
                self.rows,
                p,
                S::one(),
                weight,
                self.rows as isize,
                1,
                cols,
                p as isize,
                1,
                S::one(),
                y,
                p as isize,
                1,
            );
        }
        out
    }

    pub(crate) fn weight_grad(&self, grad: &[S]) -> Vec<S> {
        let (cout, p, rows) = (self.cout, self.p, self.rows);
        let mut dw = vec![S::zero(); cout * rows];
        for (n, cols) in self.cols.iter().enumerate() {
            let dy = &grad[n * cout * p..(n + 1) * cout * p];
            // dW += dY · colsᵀ
            S::gemm(
                cout,
                p,
                rows,
                S::one(),
                dy,
                p as isize,
                1,
                cols,
                1,
                p as isize,
                S::one(),
                &mut dw,
                rows as isize,
                1,
            );
        }
        dw
    }

    pub(crate) fn cols_grad(&self, weight: &[S], grad: &[S], n: usize) -> Vec<S> {
        let (cout, p, rows) = (self.cout, self.p, self.rows);
        let dy = &grad[n * cout * p..(n + 1) * cout * p];
        let mut dcols = vec![S::zero(); rows * p];
        // dcols = Wᵀ · dY
        S::gemm(
            rows,
            cout,
            p,
            S::one(),
            weight,
            1,
            rows as isize,
            dy,
            p as isize,
            1,
            S::zero(),
            &mut dcols,
            p as isize,
            1,
        );
        dcols
    }

    pub(crate) fn bias_grad(&self, grad: &[S]) -> Vec<S> {
        let (cout, p) = (self.cout, self.p);
        let mut db = vec![S::zero(); cout];
        for n in 0..self.cols.len() {
            for (co, d) in db.iter_mut().enumerate() {
                let start = (n * cout + co) * p;
                *d = *d + grad[start..start + p].iter().copied().sum::<S>();
            }
        }
        db
    }
}

struct Conv3dOp<S> {
    lin: LinearCols<S>,
    geom: ConvGeometry,
    cin: usize,
    in_dims: [usize; 3],
    out_dims: [usize; 3],
}

impl<S: Real> Backward<S> for Conv3dOp<S> {
    fn name(&self) -> &'static str {
        "conv3d"
    }

    fn backward(
        &self,
        grad: &Tensor<S>,
        inputs: &[&Tensor<S>],
        _output: &Tensor<S>,
        needs: &[bool],
    ) -> Vec<Option<Tensor<S>>> {
        let (x, w) = (inputs[0], inputs[1]);
        let g = grad.data();
        let dx = needs[0].then(|| {
            let per = self.cin * self.in_dims.iter().product::<usize>();
            let mut dx = vec![S::zero(); x.len()];
            for n in 0..self.lin.cols.len() {
                let dcols = self.lin.cols_grad(w.data(), g, n);
                col2im(&dcols, self.cin, self.in_dims, &self.geom, self.out_dims, &mut dx[n * per..(n + 1) * per]);
            }
            Tensor::from_parts(x.shape().to_vec(), dx)
        });
        let dw = needs[1].then(|| Tensor::from_parts(w.shape().to_vec(), self.lin.weight_grad(g)));
        let mut out = vec![dx, dw];
        if inputs.len() == 3 {
            out.push(needs[2].then(|| Tensor::from_parts(inputs[2].shape().to_vec(), self.lin.bias_grad(g))));
        }
        out
    }
}

/// Cross-correlation of `x: N×Cin×T×H×W` with `p.weight: Cout×Cin×kT×kH×kW`.
pub fn conv3d<'t, S: Real>(x: Var<'t, S>, p: &Conv3dParams<'t, S>) -> Result<Var<'t, S>> {
    let xv = x.value();
    let wv = p.weight.value();
    let [n, cin, t, h, w] = split5(xv.shape(), "conv3d input")?;
    let [cout, wcin, ..] = split5(wv.shape(), "conv3d weight")?;
    if wcin != cin {
        return Err(Error::mismatch("conv3d channels", xv.shape(), wv.shape()));
    }
    let bias = p.bias.map(|b| b.value());
    if let Some(b) = &bias {
        if b.shape() != [cout] {
            return Err(Error::mismatch("conv3d bias", b.shape(), &[cout]));
        }
    }
    let geom = p.geometry();
    let out_dims = geom.output([t, h, w])?;
    let p_out: usize = out_dims.iter().product();
    let rows = cin * geom.taps();
    let per = cin * t * h * w;
    let cols = (0..n)
        .map(|i| {
            let mut cols = vec![S::zero(); rows * p_out];
            im2col(&xv.data()[i * per..(i + 1) * per], cin, [t, h, w], &geom, out_dims, &mut cols);
            cols
        })
        .collect();
    let lin = LinearCols {
        cols,
        cout,
        rows,
        p: p_out,
    };
    let out = lin.forward(wv.data(), bias.as_deref().map(|b| b.data()));
    let out = Tensor::from_parts(vec![n, cout, out_dims[0], out_dims[1], out_dims[2]], out);
    let mut inputs = vec![x, p.weight];
    inputs.extend(p.bias);
    Ok(x.tape().record(
        out,
        &inputs,
        Conv3dOp {
            lin,
            geom,
            cin,
            in_dims: [t, h, w],
            out_dims,
        },
    ))
}

struct UpsampleOp {
    scale: [usize; 3],
}

impl<S: Real> Backward<S> for UpsampleOp {
    fn name(&self) -> &'static str {
        "upsample_nearest"
    }

    fn backward(
        &self,
        grad: &Tensor<S>,
        inputs: &[&Tensor<S>],
        _output: &Tensor<S>,
        _needs: &[bool],
    ) -> Vec<Option<Tensor<S>>> {
        let x = inputs[0];
        let [n, c, t, h, w] = split5(x.shape(), "upsample").unwrap();
        let [st, sh, sw] = self.scale;
        let (ho, wo) = (h * sh, w * sw);
        let mut dx = vec![S::zero(); x.len()];
        let g = grad.data();
        for nc in 0..n * c {
            for ot in 0..t * st {
                for oy in 0..ho {
                    for ox in 0..wo {
                        let src = ((nc * t * st + ot) * ho + oy) * wo + ox;
                        let dst = ((nc * t + ot / st) * h + oy / sh) * w + ox / sw;
                        dx[dst] = dx[dst] + g[src];
                    }
                }
            }
        }
        vec![Some(Tensor::from_parts(x.shape().to_vec(), dx))]
    }
}

/// Nearest-neighbour upsampling by integer factors in {1, 2} per axis.
pub fn upsample_nearest<'t, S: Real>(x: Var<'t, S>, scale: [usize; 3]) -> Result<Var<'t, S>> {
    if scale.iter().any(|&s| s != 1 && s != 2) {
        return Err(Error::domain("upsample", format!("unsupported scale {scale:?}")));
    }
    let xv = x.value();
    let [n, c, t, h, w] = split5(xv.shape(), "upsample")?;
    let [st, sh, sw] = scale;
    let (to, ho, wo) = (t * st, h * sh, w * sw);
    let mut out = Vec::with_capacity(n * c * to * ho * wo);
    let d = xv.data();
    for nc in 0..n * c {
        for ot in 0..to {
            for oy in 0..ho {
                let base = ((nc * t + ot / st) * h + oy / sh) * w;
                out.extend((0..wo).map(|ox| d[base + ox / sw]));
            }
        }
    }
    let out = Tensor::from_parts(vec![n, c, to, ho, wo], out);
    Ok(x.tape().record(out, &[x], UpsampleOp { scale }))
}
