use crate::{Tensor, Var};

fn pooled_size(input: usize, kernel: usize, stride: usize, padding: usize) -> usize {
    (input + 2 * padding - kernel) / stride + 1
}

impl<'g> Var<'g> {
    /// Max pooling with negative-infinity padding.
    pub fn max_pool2d(self, kernel: usize, stride: usize, padding: usize) -> Var<'g> {
        let graph = self.graph;
        let x = self.value();
        let (b, c, h, w) = x.dims4();
        let (ho, wo) = (pooled_size(h, kernel, stride, padding), pooled_size(w, kernel, stride, padding));
        if graph.is_meta() {
            return graph.push_meta(vec![b, c, ho, wo], &[self]);
        }
        let mut out = vec![0.0; b * c * ho * wo];
        let mut arg = vec![0usize; out.len()];
        for plane in 0..b * c {
            let src = &x.data()[plane * h * w..(plane + 1) * h * w];
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut best = f64::NEG_INFINITY;
                    let mut best_i = 0;
                    for ky in 0..kernel {
                        for kx in 0..kernel {
                            let iy = (oy * stride + ky) as isize - padding as isize;
                            let ix = (ox * stride + kx) as isize - padding as isize;
                            if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                                continue;
                            }
                            let i = iy as usize * w + ix as usize;
                            if src[i] > best {
                                best = src[i];
                                best_i = i;
                            }
                        }
                    }
                    let o = (plane * ho + oy) * wo + ox;
                    out[o] = best;
                    arg[o] = plane * h * w + best_i;
                }
            }
        }
        let shape = x.shape().to_vec();
        graph.push(Tensor::new([b, c, ho, wo], out), &[self], move |go, _| {
            let mut dx = vec![0.0; shape.iter().product()];
            for (o, &i) in arg.iter().enumerate() {
                dx[i] += go.data()[o];
            }
            vec![Some(Tensor::new(shape.clone(), dx))]
        })
    }

    /// Average pooling with zero padding that counts padded cells in the
    /// divisor.
    pub fn avg_pool2d(self, kernel: usize, stride: usize, padding: usize) -> Var<'g> {
        let graph = self.graph;
        let x = self.value();
        let (b, c, h, w) = x.dims4();
        let (ho, wo) = (pooled_size(h, kernel, stride, padding), pooled_size(w, kernel, stride, padding));
        if graph.is_meta() {
            return graph.push_meta(vec![b, c, ho, wo], &[self]);
        }
        let norm = 1.0 / (kernel * kernel) as f64;
        let taps = move |oy: usize, ox: usize| {
            (0..kernel).flat_map(move |ky| (0..kernel).map(move |kx| (ky, kx))).filter_map(move |(ky, kx)| {
                let iy = (oy * stride + ky) as isize - padding as isize;
                let ix = (ox * stride + kx) as isize - padding as isize;
                (iy >= 0 && ix >= 0 && iy < h as isize && ix < w as isize).then(|| iy as usize * w + ix as usize)
            })
        };
        let mut out = vec![0.0; b * c * ho * wo];
        for plane in 0..b * c {
            let src = &x.data()[plane * h * w..(plane + 1) * h * w];
            for oy in 0..ho {
                for ox in 0..wo {
                    out[(plane * ho + oy) * wo + ox] = taps(oy, ox).map(|i| src[i]).sum::<f64>() * norm;
                }
            }
        }
        let shape = x.shape().to_vec();
        graph.push(Tensor::new([b, c, ho, wo], out), &[self], move |go, _| {
            let mut dx = vec![0.0; shape.iter().product()];
            for plane in 0..b * c {
                for oy in 0..ho {
                    for ox in 0..wo {
                        let gv = go.data()[(plane * ho + oy) * wo + ox] * norm;
                        for i in taps(oy, ox) {
                            dx[plane * h * w + i] += gv;
                        }
                    }
                }
            }
            vec![Some(Tensor::new(shape.clone(), dx))]
        })
    }

    /// Mean over the spatial axes: (B, C, H, W) -> (B, C, 1, 1).
    pub fn global_avg_pool(self) -> Var<'g> {
        let graph = self.graph;
        let x = self.value();
        let (b, c, h, w) = x.dims4();
        if graph.is_meta() {
            return graph.push_meta(vec![b, c, 1, 1], &[self]);
        }
        let hw = h * w;
        let out = x.data().chunks(hw).map(|p| p.iter().sum::<f64>() / hw as f64).collect();
        graph.push(Tensor::new([b, c, 1, 1], out), &[self], move |go, _| {
            let mut dx = Vec::with_capacity(b * c * hw);
            for &gv in go.data() {
                dx.extend(std::iter::repeat_n(gv / hw as f64, hw));
            }
            vec![Some(Tensor::new([b, c, h, w], dx))]
        })
    }
}
