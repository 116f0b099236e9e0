//! Windowed multi-head self-attention and the pre-norm transformer block.

use crate::autodiff::{Backward, Var};
use crate::error::{Error, Result};
use crate::nn::conv::{conv3d, split5, Conv3dParams};
use crate::nn::norm::channel_norm;
use crate::tensor::{Real, Tensor};

/// Flat spatial indices of each non-overlapping `window×window` tile.
/// Tiles on the right and bottom edges may be smaller; that is the same as
/// padding to a multiple of the window and masking the padded tokens.
pub fn window_partition(h: usize, w: usize, window: usize) -> Vec<Vec<usize>> {
    let mut tiles = Vec::new();
    for y0 in (0..h).step_by(window) {
        for x0 in (0..w).step_by(window) {
            let mut t = Vec::with_capacity(window * window);
            for y in y0..(y0 + window).min(h) {
                for x in x0..(x0 + window).min(w) {
                    t.push(y * w + x);
                }
            }
            tiles.push(t);
        }
    }
    tiles
}

struct Layout {
    batch: usize,
    dim: usize,
    plane: usize,
    heads: usize,
    tiles: Vec<Vec<usize>>,
}

impl Layout {
    fn head_dim(&self) -> usize {
        self.dim / self.heads
    }

    fn at(&self, n: usize, c: usize, pos: usize) -> usize {
        (n * self.dim + c) * self.plane + pos
    }

    /// Row-stochastic attention matrix of one (batch, head, tile).
    fn probs<S: Real>(&self, q: &[S], k: &[S], n: usize, head: usize, tile: &[usize]) -> Vec<S> {
        let dh = self.head_dim();
        let scale = S::from_f64(1.0 / (dh as f64).sqrt());
        let len = tile.len();
        let mut p = vec![S::zero(); len * len];
        for (i, &pi) in tile.iter().enumerate() {
            let row = &mut p[i * len..(i + 1) * len];
            let mut max = S::neg_infinity();
            for (j, &pj) in tile.iter().enumerate() {
                let mut s = S::zero();
                for c in head * dh..(head + 1) * dh {
                    s = s + q[self.at(n, c, pi)] * k[self.at(n, c, pj)];
                }
                row[j] = s * scale;
                max = max.max(row[j]);
            }
            let mut z = S::zero();
            for v in row.iter_mut() {
                *v = (*v - max).exp();
                z = z + *v;
            }
            for v in row.iter_mut() {
                *v = *v / z;
            }
        }
        p
    }
}

struct WindowAttentionOp<S> {
    layout: Layout,
    /// One matrix per (batch, head, tile), in that nesting order.
    probs: Vec<Vec<S>>,
}

impl<S: Real> Backward<S> for WindowAttentionOp<S> {
    fn name(&self) -> &'static str {
        "window_attention"
    }

    fn backward(
        &self,
        grad: &Tensor<S>,
        inputs: &[&Tensor<S>],
        _output: &Tensor<S>,
        needs: &[bool],
    ) -> Vec<Option<Tensor<S>>> {
        let l = &self.layout;
        let (q, k, v) = (inputs[0].data(), inputs[1].data(), inputs[2].data());
        let g = grad.data();
        let dh = l.head_dim();
        let scale = S::from_f64(1.0 / (dh as f64).sqrt());
        let mut dq = vec![S::zero(); q.len()];
        let mut dk = vec![S::zero(); k.len()];
        let mut dv = vec![S::zero(); v.len()];
        let mut slot = 0;
        for n in 0..l.batch {
            for head in 0..l.heads {
                let chans = head * dh..(head + 1) * dh;
                for tile in &l.tiles {
                    let p = &self.probs[slot];
                    slot += 1;
                    let len = tile.len();
                    let mut ds = vec![S::zero(); len];
                    for (i, &pi) in tile.iter().enumerate() {
                        let row = &p[i * len..(i + 1) * len];
                        let mut dot = S::zero();
                        for (j, &pj) in tile.iter().enumerate() {
                            let mut dp = S::zero();
                            for c in chans.clone() {
                                let gi = g[l.at(n, c, pi)];
                                dp = dp + gi * v[l.at(n, c, pj)];
                                dv[l.at(n, c, pj)] = dv[l.at(n, c, pj)] + row[j] * gi;
                            }
                            ds[j] = dp;
                            dot = dot + row[j] * dp;
                        }
                        for (j, &pj) in tile.iter().enumerate() {
                            let s = row[j] * (ds[j] - dot) * scale;
                            for c in chans.clone() {
                                dq[l.at(n, c, pi)] = dq[l.at(n, c, pi)] + s * k[l.at(n, c, pj)];
                                dk[l.at(n, c, pj)] = dk[l.at(n, c, pj)] + s * q[l.at(n, c, pi)];
                            }
                        }
                    }
                }
            }
        }
        let shape = inputs[0].shape().to_vec();
        vec![
            needs[0].then(|| Tensor::from_parts(shape.clone(), dq)),
            needs[1].then(|| Tensor::from_parts(shape.clone(), dk)),
            needs[2].then(|| Tensor::from_parts(shape, dv)),
        ]
    }
}

fn layout<S: Real>(q: &Tensor<S>, k: &Tensor<S>, v: &Tensor<S>, heads: usize, window: usize) -> Result<Layout> {
    let [n, d, t, h, w] = split5(q.shape(), "window_attention")?;
    if k.shape() != q.shape() || v.shape() != q.shape() {
        return Err(Error::mismatch("window_attention", q.shape(), k.shape()));
    }
    if t != 1 {
        return Err(Error::shape(q.shape(), "window attention runs on single frames"));
    }
    if heads == 0 || d % heads != 0 {
        return Err(Error::domain(
            "window_attention",
            format!("dimension {d} not divisible by {heads} heads"),
        ));
    }
    if window == 0 {
        return Err(Error::domain("window_attention", "window must be positive"));
    }
    Ok(Layout {
        batch: n,
        dim: d,
        plane: h * w,
        heads,
        tiles: window_partition(h, w, window),
    })
}

/// Multi-head softmax attention within each spatial window of an
/// `N×d×1×H×W` tensor. Heads split the channel axis into equal groups.
pub fn window_attention<'t, S: Real>(
    q: Var<'t, S>,
    k: Var<'t, S>,
    v: Var<'t, S>,
    heads: usize,
    window: usize,
) -> Result<Var<'t, S>> {
    let (qv, kv, vv) = (q.value(), k.value(), v.value());
    let l = layout(&qv, &kv, &vv, heads, window)?;
    let dh = l.head_dim();
    let mut out = vec![S::zero(); qv.len()];
    let mut probs = Vec::with_capacity(l.batch * heads * l.tiles.len());
    for n in 0..l.batch {
        for head in 0..heads {
            for tile in &l.tiles {
                let p = l.probs(qv.data(), kv.data(), n, head, tile);
                let len = tile.len();
                for (i, &pi) in tile.iter().enumerate() {
                    for c in head * dh..(head + 1) * dh {
                        let mut acc = S::zero();
                        for (j, &pj) in tile.iter().enumerate() {
                            acc = acc + p[i * len + j] * vv.data()[l.at(n, c, pj)];
                        }
                        out[l.at(n, c, pi)] = acc;
                    }
                }
                probs.push(p);
            }
        }
    }
    let out = Tensor::from_parts(qv.shape().to_vec(), out);
    Ok(q.tape().record(out, &[q, k, v], WindowAttentionOp { layout: l, probs }))
}

/// Attention matrices for inspection, one per (batch, head, window).
pub fn attention_probs<S: Real>(q: &Tensor<S>, k: &Tensor<S>, heads: usize, window: usize) -> Result<Vec<Vec<S>>> {
    let l = layout(q, k, k, heads, window)?;
    let mut all = Vec::new();
    for n in 0..l.batch {
        for head in 0..heads {
            for tile in &l.tiles {
                all.push(l.probs(q.data(), k.data(), n, head, tile));
            }
        }
    }
    Ok(all)
}

/// Parameters of one pre-norm transformer block. All projections are
/// 1×1×1 convolutions over `d` channels.
#[derive(Clone, Copy, Debug)]
pub struct AttnBlockParams<'t, S: Real> {
    pub norm1: (Var<'t, S>, Var<'t, S>),
    pub query: Var<'t, S>,
    pub key: Var<'t, S>,
    pub value: Var<'t, S>,
    pub out: Conv3dParams<'t, S>,
    pub norm2: (Var<'t, S>, Var<'t, S>),
    pub mlp_in: Conv3dParams<'t, S>,
    pub mlp_out: Conv3dParams<'t, S>,
    pub heads: usize,
}

/// `x + Attn(LN(x))`, then `+ MLP(LN(·))`, on an `N×d×1×H×W` frame.
pub fn attn_block<'t, S: Real>(x: Var<'t, S>, p: &AttnBlockParams<'t, S>, window: usize) -> Result<Var<'t, S>> {
    let h = channel_norm(x, p.norm1.0, p.norm1.1)?;
    let q = conv3d(h, &Conv3dParams::same(p.query, None))?;
    let k = conv3d(h, &Conv3dParams::same(p.key, None))?;
    let v = conv3d(h, &Conv3dParams::same(p.value, None))?;
    let a = window_attention(q, k, v, p.heads, window)?;
    let x = x.add(conv3d(a, &p.out)?)?;
    let h = channel_norm(x, p.norm2.0, p.norm2.1)?;
    let m = conv3d(conv3d(h, &p.mlp_in)?.relu(), &p.mlp_out)?;
    x.add(m)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Tape;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
        let n = shape.iter().product();
        Tensor::from_vec(shape, (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn partition_counts() {
        let tiles = window_partition(16, 16, 8);
        assert_eq!(tiles.len(), 4);
        assert!(tiles.iter().all(|t| t.len() == 64));
        let ragged = window_partition(10, 12, 8);
        assert_eq!(ragged.iter().map(Vec::len).sum::<usize>(), 120);
    }

    #[test]
    fn rows_are_stochastic() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let q = random(&mut rng, &[1, 8, 1, 16, 16]).map(|v| 4.0 * v);
        let k = random(&mut rng, &[1, 8, 1, 16, 16]);
        let probs = attention_probs(&q, &k, 2, 8).unwrap();
        assert_eq!(probs.len(), 8);
        for p in probs {
            for row in p.chunks(64) {
                assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn zero_output_projections_are_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let tape = Tape::<f64>::new();
        let d = 8;
        let c = |t: Tensor<f64>| tape.constant(t);
        let x = c(random(&mut rng, &[1, d, 1, 16, 16]));
        let p = AttnBlockParams {
            norm1: (c(Tensor::ones(&[d]).unwrap()), c(Tensor::zeros(&[d]).unwrap())),
            query: c(random(&mut rng, &[d, d, 1, 1, 1])),
            key: c(random(&mut rng, &[d, d, 1, 1, 1])),
            value: c(random(&mut rng, &[d, d, 1, 1, 1])),
            out: Conv3dParams::same(c(Tensor::zeros(&[d, d, 1, 1, 1]).unwrap()), Some(c(Tensor::zeros(&[d]).unwrap()))),
            norm2: (c(Tensor::ones(&[d]).unwrap()), c(Tensor::zeros(&[d]).unwrap())),
            mlp_in: Conv3dParams::same(c(random(&mut rng, &[2 * d, d, 1, 1, 1])), Some(c(Tensor::zeros(&[2 * d]).unwrap()))),
            mlp_out: Conv3dParams::same(c(Tensor::zeros(&[d, 2 * d, 1, 1, 1]).unwrap()), Some(c(Tensor::zeros(&[d]).unwrap()))),
            heads: 2,
        };
        let y = attn_block(x, &p, 8).unwrap();
        assert_eq!(y.shape(), vec![1, d, 1, 16, 16]);
        assert_eq!(y.value().data(), x.value().data());
    }

    #[test]
    fn uniform_keys_average_values() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let tape = Tape::<f64>::new();
        let q = tape.constant(random(&mut rng, &[1, 2, 1, 4, 4]));
        let k = tape.constant(Tensor::zeros(&[1, 2, 1, 4, 4]).unwrap());
        let v = tape.constant(random(&mut rng, &[1, 2, 1, 4, 4]));
        let o = window_attention(q, k, v, 1, 8).unwrap().value();
        let vv = v.value();
        for c in 0..2 {
            let mean = vv.data()[c * 16..(c + 1) * 16].iter().sum::<f64>() / 16.0;
            assert!(o.data()[c * 16..(c + 1) * 16].iter().all(|&e| (e - mean).abs() < 1e-12));
        }
    }

    #[test]
    fn heads_must_divide_dimension() {
        let tape = Tape::<f64>::new();
        let q = tape.constant(Tensor::zeros(&[1, 3, 1, 4, 4]).unwrap());
        assert!(window_attention(q, q, q, 2, 8).is_err());
    }
}
