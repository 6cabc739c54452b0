use rayon::prelude::*;

use crate::linalg::gemm;
use crate::{Tensor, Var};

/// Geometry of a 2-D convolution (square kernels only).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Conv2dOptions {
    pub stride: usize,
    pub padding: usize,
    pub dilation: usize,
}

impl Default for Conv2dOptions {
    fn default() -> Self {
        Conv2dOptions { stride: 1, padding: 0, dilation: 1 }
    }
}

impl Conv2dOptions {
    /// Padding that keeps the spatial size at stride 1.
    pub fn same(kernel: usize, dilation: usize) -> Self {
        Conv2dOptions { stride: 1, padding: dilation * (kernel - 1) / 2, dilation }
    }

    pub fn out_size(&self, input: usize, kernel: usize) -> usize {
        let span = self.dilation * (kernel - 1) + 1;
        assert!(input + 2 * self.padding >= span, "conv2d: kernel larger than padded input");
        (input + 2 * self.padding - span) / self.stride + 1
    }
}

#[derive(Clone, Copy)]
struct Geom {
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    ho: usize,
    wo: usize,
    opt: Conv2dOptions,
}

impl Geom {
    fn is_pointwise(&self) -> bool {
        self.k == 1 && self.opt.stride == 1 && self.opt.padding == 0
    }
}

fn im2col(x: &[f64], g: Geom, col: &mut [f64]) {
    let Geom { c, h, w, k, ho, wo, opt } = g;
    let n = ho * wo;
    for ci in 0..c {
        for ki in 0..k {
            for kj in 0..k {
                let row = &mut col[((ci * k + ki) * k + kj) * n..][..n];
                for oy in 0..ho {
                    let iy = (oy * opt.stride + ki * opt.dilation) as isize - opt.padding as isize;
                    let dst = &mut row[oy * wo..(oy + 1) * wo];
                    if iy < 0 || iy >= h as isize {
                        dst.fill(0.0);
                        continue;
                    }
                    let src = &x[(ci * h + iy as usize) * w..][..w];
                    for (ox, d) in dst.iter_mut().enumerate() {
                        let ix = (ox * opt.stride + kj * opt.dilation) as isize - opt.padding as isize;
                        *d = if ix < 0 || ix >= w as isize { 0.0 } else { src[ix as usize] };
                    }
                }
            }
        }
    }
}

fn col2im(col: &[f64], g: Geom, x: &mut [f64]) {
    let Geom { c, h, w, k, ho, wo, opt } = g;
    let n = ho * wo;
    for ci in 0..c {
        for ki in 0..k {
            for kj in 0..k {
                let row = &col[((ci * k + ki) * k + kj) * n..][..n];
                for oy in 0..ho {
                    let iy = (oy * opt.stride + ki * opt.dilation) as isize - opt.padding as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let dst = &mut x[(ci * h + iy as usize) * w..][..w];
                    for ox in 0..wo {
                        let ix = (ox * opt.stride + kj * opt.dilation) as isize - opt.padding as isize;
                        if ix >= 0 && ix < w as isize {
                            dst[ix as usize] += row[oy * wo + ox];
                        }
                    }
                }
            }
        }
    }
}

fn columns(x: &[f64], g: Geom) -> Vec<f64> {
    if g.is_pointwise() {
        return x.to_vec();
    }
    let mut col = vec![0.0; g.c * g.k * g.k * g.ho * g.wo];
    im2col(x, g, &mut col);
    col
}

impl<'g> Var<'g> {
    /// 2-D cross-correlation of `self` (B, Cin, H, W) with `weight`
    /// (Cout, Cin, k, k) plus an optional per-channel `bias` (Cout).
    pub fn conv2d(self, weight: Var<'g>, bias: Option<Var<'g>>, opt: Conv2dOptions) -> Var<'g> {
        let graph = self.graph;
        let (x, wt) = (self.value(), weight.value());
        let (b, c, h, w) = x.dims4();
        let (cout, cin, k, k2) = wt.dims4();
        assert_eq!(k, k2, "conv2d: only square kernels are supported");
        assert_eq!(cin, c, "conv2d: weight expects {cin} input channels, got {c}");
        if let Some(bv) = bias {
            assert_eq!(bv.shape(), vec![cout], "conv2d: bias must have Cout entries");
        }
        let (ho, wo) = (opt.out_size(h, k), opt.out_size(w, k));
        let geom = Geom { c, h, w, k, ho, wo, opt };
        let kdim = c * k * k;
        let n = ho * wo;
        graph.add_macs((b * cout * n * kdim) as u64);

        let mut parents = vec![self, weight];
        parents.extend(bias);
        if graph.is_meta() {
            return graph.push_meta(vec![b, cout, ho, wo], &parents);
        }

        let bias_value = bias.map(|bv| bv.value());
        let bias_data = bias_value.as_deref().map(Tensor::data);
        let (xd, wd) = (x.data(), wt.data());
        let mut out = vec![0.0; b * cout * n];
        out.par_chunks_mut(cout * n).enumerate().for_each(|(bi, o)| {
            let col = columns(&xd[bi * c * h * w..(bi + 1) * c * h * w], geom);
            gemm(cout, kdim, n, wd, false, &col, false, o, 0.0);
            if let Some(bd) = bias_data {
                for (co, chunk) in o.chunks_mut(n).enumerate() {
                    let bval = bd[co];
                    chunk.iter_mut().for_each(|v| *v += bval);
                }
            }
        });

        let has_bias = bias.is_some();
        graph.push(Tensor::new([b, cout, ho, wo], out), &parents, move |go, need| {
            let (xd, wd, gd) = (x.data(), wt.data(), go.data());
            let per_item: Vec<(Option<Vec<f64>>, Option<Vec<f64>>)> = (0..b)
                .into_par_iter()
                .map(|bi| {
                    let gout = &gd[bi * cout * n..(bi + 1) * cout * n];
                    let dw = need[1].then(|| {
                        let col = columns(&xd[bi * c * h * w..(bi + 1) * c * h * w], geom);
                        let mut dw = vec![0.0; cout * kdim];
                        gemm(cout, n, kdim, gout, false, &col, true, &mut dw, 0.0);
                        dw
                    });
                    let dx = need[0].then(|| {
                        let mut dcol = vec![0.0; kdim * n];
                        gemm(kdim, cout, n, wd, true, gout, false, &mut dcol, 0.0);
                        if geom.is_pointwise() {
                            dcol
                        } else {
                            let mut dx = vec![0.0; c * h * w];
                            col2im(&dcol, geom, &mut dx);
                            dx
                        }
                    });
                    (dx, dw)
                })
                .collect();

            let mut dx_all = need[0].then(|| Vec::with_capacity(b * c * h * w));
            let mut dw_sum = need[1].then(|| vec![0.0; cout * kdim]);
            for (dx, dw) in per_item {
                if let (Some(all), Some(dx)) = (dx_all.as_mut(), dx) {
                    all.extend_from_slice(&dx);
                }
                if let (Some(sum), Some(dw)) = (dw_sum.as_mut(), dw) {
                    sum.iter_mut().zip(dw).for_each(|(s, v)| *s += v);
                }
            }
            let mut grads = vec![
                dx_all.map(|d| Tensor::new([b, c, h, w], d)),
                dw_sum.map(|d| Tensor::new([cout, cin, k, k], d)),
            ];
            if has_bias {
                let db = need[2].then(|| {
                    let mut db = vec![0.0; cout];
                    for bi in 0..b {
                        for (co, acc) in db.iter_mut().enumerate() {
                            *acc += go.data()[(bi * cout + co) * n..][..n].iter().sum::<f64>();
                        }
                    }
                    Tensor::new([cout], db)
                });
                grads.push(db);
            }
            grads
        })
    }

    /// 1-D convolution along the channel axis of a pooled descriptor
    /// (B, C, 1, 1), with an odd-length `kernel` (k), zero padding of
    /// (k - 1) / 2 on both sides and no bias.
    pub fn conv1d_channels(self, kernel: Var<'g>) -> Var<'g> {
        let graph = self.graph;
        let (x, kv) = (self.value(), kernel.value());
        let (b, c, h, w) = x.dims4();
        assert_eq!((h, w), (1, 1), "conv1d_channels: expects a (B,C,1,1) descriptor");
        assert_eq!(kv.shape().len(), 1, "conv1d_channels: kernel must be 1-D");
        let k = kv.shape()[0];
        assert!(k % 2 == 1, "conv1d_channels: kernel length must be odd");
        graph.add_macs((b * c * k) as u64);
        if graph.is_meta() {
            return graph.push_meta(vec![b, c, 1, 1], &[self, kernel]);
        }
        let half = (k / 2) as isize;
        let tap = move |ci: usize, t: usize| -> Option<usize> {
            let j = ci as isize + t as isize - half;
            (j >= 0 && j < c as isize).then_some(j as usize)
        };
        let mut out = vec![0.0; b * c];
        for bi in 0..b {
            for ci in 0..c {
                out[bi * c + ci] = (0..k)
                    .filter_map(|t| tap(ci, t).map(|j| kv.data()[t] * x.data()[bi * c + j]))
                    .sum();
            }
        }
        graph.push(Tensor::new([b, c, 1, 1], out), &[self, kernel], move |go, need| {
            let mut dx = vec![0.0; b * c];
            let mut dk = vec![0.0; k];
            for bi in 0..b {
                for ci in 0..c {
                    let gv = go.data()[bi * c + ci];
                    for t in 0..k {
                        if let Some(j) = tap(ci, t) {
                            dx[bi * c + j] += kv.data()[t] * gv;
                            dk[t] += x.data()[bi * c + j] * gv;
                        }
                    }
                }
            }
            vec![need[0].then(|| Tensor::new([b, c, 1, 1], dx)), need[1].then(|| Tensor::new([k], dk))]
        })
    }
}
