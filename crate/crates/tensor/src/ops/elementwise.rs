use std::rc::Rc;

use crate::{Tensor, Var};

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

impl<'g> Var<'g> {
    pub fn add(self, other: Var<'g>) -> Var<'g> {
        let g = self.graph;
        let (a, b) = (self.value(), other.value());
        assert_eq!(a.shape(), b.shape(), "add: shape mismatch");
        if g.is_meta() {
            return g.push_meta(a.shape().to_vec(), &[self, other]);
        }
        let out = a.zip_map(&b, |x, y| x + y);
        g.push(out, &[self, other], |go, _| vec![Some(go.clone()), Some(go.clone())])
    }

    pub fn scale(self, factor: f64) -> Var<'g> {
        let g = self.graph;
        let a = self.value();
        if g.is_meta() {
            return g.push_meta(a.shape().to_vec(), &[self]);
        }
        let out = a.map(|x| x * factor);
        g.push(out, &[self], move |go, _| vec![Some(go.map(|x| x * factor))])
    }

    pub fn relu(self) -> Var<'g> {
        let g = self.graph;
        let a = self.value();
        if g.is_meta() {
            return g.push_meta(a.shape().to_vec(), &[self]);
        }
        let out = a.map(|x| x.max(0.0));
        g.push(out, &[self], move |go, _| vec![Some(go.zip_map(&a, |d, x| if x > 0.0 { d } else { 0.0 }))])
    }

    pub fn sigmoid(self) -> Var<'g> {
        let g = self.graph;
        let a = self.value();
        if g.is_meta() {
            return g.push_meta(a.shape().to_vec(), &[self]);
        }
        let out = Rc::new(a.map(sigmoid));
        let saved = out.clone();
        g.push((*out).clone(), &[self], move |go, _| {
            vec![Some(go.zip_map(&saved, |d, s| d * s * (1.0 - s)))]
        })
    }

    /// Multiplies every channel of `self` (B, C, H, W) by a single-channel
    /// gate (B, 1, H, W).
    pub fn mul_spatial_gate(self, gate: Var<'g>) -> Var<'g> {
        let g = self.graph;
        let (x, m) = (self.value(), gate.value());
        let (b, c, h, w) = x.dims4();
        assert_eq!(m.dims4(), (b, 1, h, w), "mul_spatial_gate: gate must be (B,1,H,W)");
        if g.is_meta() {
            return g.push_meta(x.shape().to_vec(), &[self, gate]);
        }
        let hw = h * w;
        let mut out = vec![0.0; x.numel()];
        for bi in 0..b {
            let gm = &m.data()[bi * hw..(bi + 1) * hw];
            for ci in 0..c {
                let off = (bi * c + ci) * hw;
                for p in 0..hw {
                    out[off + p] = x.data()[off + p] * gm[p];
                }
            }
        }
        g.push(Tensor::new(x.shape().to_vec(), out), &[self, gate], move |go, need| {
            let dx = need[0].then(|| {
                let mut d = vec![0.0; x.numel()];
                for bi in 0..b {
                    for ci in 0..c {
                        let off = (bi * c + ci) * hw;
                        for p in 0..hw {
                            d[off + p] = go.data()[off + p] * m.data()[bi * hw + p];
                        }
                    }
                }
                Tensor::new(x.shape().to_vec(), d)
            });
            let dm = need[1].then(|| {
                let mut d = vec![0.0; b * hw];
                for bi in 0..b {
                    for ci in 0..c {
                        let off = (bi * c + ci) * hw;
                        for p in 0..hw {
                            d[bi * hw + p] += go.data()[off + p] * x.data()[off + p];
                        }
                    }
                }
                Tensor::new([b, 1, h, w], d)
            });
            vec![dx, dm]
        })
    }

    /// Scales each channel of `self` (B, C, H, W) by `weights` (B, C, 1, 1).
    pub fn mul_channels(self, weights: Var<'g>) -> Var<'g> {
        let g = self.graph;
        let (x, a) = (self.value(), weights.value());
        let (b, c, h, w) = x.dims4();
        assert_eq!(a.dims4(), (b, c, 1, 1), "mul_channels: weights must be (B,C,1,1)");
        if g.is_meta() {
            return g.push_meta(x.shape().to_vec(), &[self, weights]);
        }
        let hw = h * w;
        let mut out = x.data().to_vec();
        for (k, chunk) in out.chunks_mut(hw).enumerate() {
            let s = a.data()[k];
            chunk.iter_mut().for_each(|v| *v *= s);
        }
        g.push(Tensor::new(x.shape().to_vec(), out), &[self, weights], move |go, need| {
            let dx = need[0].then(|| {
                let mut d = go.data().to_vec();
                for (k, chunk) in d.chunks_mut(hw).enumerate() {
                    let s = a.data()[k];
                    chunk.iter_mut().for_each(|v| *v *= s);
                }
                Tensor::new(x.shape().to_vec(), d)
            });
            let da = need[1].then(|| {
                let d = go
                    .data()
                    .chunks(hw)
                    .zip(x.data().chunks(hw))
                    .map(|(gc, xc)| gc.iter().zip(xc).map(|(p, q)| p * q).sum())
                    .collect();
                Tensor::new([b, c, 1, 1], d)
            });
            vec![dx, da]
        })
    }

    /// Reshape without copying semantics (gradient is reshaped back).
    pub fn reshape(self, shape: &[usize]) -> Var<'g> {
        let g = self.graph;
        let a = self.value();
        assert_eq!(shape.iter().product::<usize>(), a.numel(), "reshape: element count mismatch");
        if g.is_meta() {
            return g.push_meta(shape.to_vec(), &[self]);
        }
        let old = a.shape().to_vec();
        g.push((*a).clone().reshape(shape.to_vec()), &[self], move |go, _| {
            vec![Some(go.clone().reshape(old.clone()))]
        })
    }

    /// Arithmetic mean of all elements, as a one-element tensor.
    pub fn mean_all(self) -> Var<'g> {
        let g = self.graph;
        let a = self.value();
        if g.is_meta() {
            return g.push_meta(vec![1], &[self]);
        }
        let n = a.numel() as f64;
        let shape = a.shape().to_vec();
        g.push(Tensor::scalar(a.sum() / n), &[self], move |go, _| {
            vec![Some(Tensor::full(shape.clone(), go.data()[0] / n))]
        })
    }

    /// Scalar-valued function of `self` with a caller-supplied gradient.
    ///
    /// `f` returns the value and d(value)/d(self); the gradient must have the
    /// same shape as `self`.
    pub fn scalar_fn<F>(self, f: F) -> Var<'g>
    where
        F: Fn(&Tensor) -> (f64, Tensor),
    {
        let g = self.graph;
        let a = self.value();
        if g.is_meta() {
            return g.push_meta(vec![1], &[self]);
        }
        let (value, grad) = f(&a);
        assert_eq!(grad.shape(), a.shape(), "scalar_fn: gradient shape mismatch");
        g.push(Tensor::scalar(value), &[self], move |go, _| {
            let s = go.data()[0];
            vec![Some(grad.map(|v| v * s))]
        })
    }
}

/// Concatenates 4-D tensors along the channel axis.
pub fn concat_channels<'g>(parts: &[Var<'g>]) -> Var<'g> {
    assert!(!parts.is_empty(), "concat_channels: nothing to concatenate");
    let g = parts[0].graph;
    let values: Vec<Rc<Tensor>> = parts.iter().map(|p| p.value()).collect();
    let (b, _, h, w) = values[0].dims4();
    let chans: Vec<usize> = values
        .iter()
        .map(|v| {
            let (vb, vc, vh, vw) = v.dims4();
            assert_eq!((vb, vh, vw), (b, h, w), "concat_channels: batch/spatial mismatch");
            vc
        })
        .collect();
    let total: usize = chans.iter().sum();
    if g.is_meta() {
        return g.push_meta(vec![b, total, h, w], parts);
    }
    let hw = h * w;
    let mut out = Vec::with_capacity(b * total * hw);
    for bi in 0..b {
        for (v, &c) in values.iter().zip(&chans) {
            out.extend_from_slice(&v.data()[bi * c * hw..(bi + 1) * c * hw]);
        }
    }
    g.push(Tensor::new([b, total, h, w], out), parts, move |go, need| {
        let mut offset = 0;
        chans
            .iter()
            .zip(need)
            .map(|(&c, &needed)| {
                let start = offset;
                offset += c;
                needed.then(|| {
                    let mut d = Vec::with_capacity(b * c * hw);
                    for bi in 0..b {
                        let base = (bi * total + start) * hw;
                        d.extend_from_slice(&go.data()[base..base + c * hw]);
                    }
                    Tensor::new([b, c, h, w], d)
                })
            })
            .collect()
    })
}

impl<'g> Var<'g> {
    /// Channels `[start, start + len)` of a 4-D tensor.
    pub fn narrow_channels(self, start: usize, len: usize) -> Var<'g> {
        let g = self.graph;
        let x = self.value();
        let (b, c, h, w) = x.dims4();
        assert!(start + len <= c && len > 0, "narrow_channels: range out of bounds");
        if g.is_meta() {
            return g.push_meta(vec![b, len, h, w], &[self]);
        }
        let hw = h * w;
        let mut out = Vec::with_capacity(b * len * hw);
        for bi in 0..b {
            let base = (bi * c + start) * hw;
            out.extend_from_slice(&x.data()[base..base + len * hw]);
        }
        g.push(Tensor::new([b, len, h, w], out), &[self], move |go, _| {
            let mut d = vec![0.0; b * c * hw];
            for bi in 0..b {
                let base = (bi * c + start) * hw;
                d[base..base + len * hw].copy_from_slice(&go.data()[bi * len * hw..(bi + 1) * len * hw]);
            }
            vec![Some(Tensor::new([b, c, h, w], d))]
        })
    }
}

/// Sum of equally shaped variables.
pub fn sum_all<'g>(parts: &[Var<'g>]) -> Var<'g> {
    let mut it = parts.iter().copied();
    let first = it.next().expect("sum_all: empty input");
    it.fold(first, |acc, v| acc.add(v))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::Graph;

    #[test]
    fn concat_then_narrow_round_trips_gradients() {
        let g = Graph::new();
        let a = g.param(Tensor::new([1, 1, 1, 2], vec![1.0, 2.0]));
        let b = g.param(Tensor::new([1, 2, 1, 2], vec![3.0, 4.0, 5.0, 6.0]));
        let cat = concat_channels(&[a, b]);
        assert_eq!(cat.value().data(), &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let mid = cat.narrow_channels(1, 1);
        assert_eq!(mid.value().data(), &[3.0, 4.0]);
        let loss = mid.mean_all();
        let grads = g.backward(loss);
        assert_eq!(grads.get(a).unwrap().data(), &[0.0, 0.0]);
        assert_eq!(grads.get(b).unwrap().data(), &[0.5, 0.5, 0.0, 0.0]);
    }

    #[test]
    fn sigmoid_is_stable_for_large_inputs() {
        assert_eq!(sigmoid(0.0), 0.5);
        assert!(sigmoid(-800.0) >= 0.0 && sigmoid(800.0) <= 1.0);
        assert!(sigmoid(-800.0).is_finite());
    }
}
