use crate::{Tensor, Var};

/// Source taps for one output coordinate of a bilinear resize with
/// half-pixel centers (corner alignment disabled).
#[derive(Debug, Clone, Copy)]
struct Tap {
    i0: usize,
    i1: usize,
    w0: f64,
    w1: f64,
}

fn taps(input: usize, output: usize) -> Vec<Tap> {
    let scale = input as f64 / output as f64;
    (0..output)
        .map(|o| {
            let src = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
            let i0 = (src.floor() as usize).min(input - 1);
            let i1 = (i0 + 1).min(input - 1);
            let w1 = src - i0 as f64;
            Tap { i0, i1, w0: 1.0 - w1, w1 }
        })
        .collect()
}

/// Bilinear resize of a single (H, W) plane.
pub fn resize_plane(src: &[f64], h: usize, w: usize, ho: usize, wo: usize) -> Vec<f64> {
    let (ty, tx) = (taps(h, ho), taps(w, wo));
    let mut out = vec![0.0; ho * wo];
    for (oy, y) in ty.iter().enumerate() {
        for (ox, x) in tx.iter().enumerate() {
            out[oy * wo + ox] = y.w0 * (x.w0 * src[y.i0 * w + x.i0] + x.w1 * src[y.i0 * w + x.i1])
                + y.w1 * (x.w0 * src[y.i1 * w + x.i0] + x.w1 * src[y.i1 * w + x.i1]);
        }
    }
    out
}

impl<'g> Var<'g> {
    /// Bilinear resize of every plane of a 4-D tensor to `(height, width)`.
    pub fn resize_bilinear(self, height: usize, width: usize) -> Var<'g> {
        let graph = self.graph;
        let x = self.value();
        let (b, c, h, w) = x.dims4();
        if graph.is_meta() {
            return graph.push_meta(vec![b, c, height, width], &[self]);
        }
        if (h, w) == (height, width) {
            return graph.push((*x).clone(), &[self], |go, _| vec![Some(go.clone())]);
        }
        let mut out = Vec::with_capacity(b * c * height * width);
        for plane in x.data().chunks(h * w) {
            out.extend(resize_plane(plane, h, w, height, width));
        }
        let (ty, tx) = (taps(h, height), taps(w, width));
        graph.push(Tensor::new([b, c, height, width], out), &[self], move |go, _| {
            let mut dx = vec![0.0; b * c * h * w];
            for (plane, gp) in go.data().chunks(height * width).enumerate() {
                let d = &mut dx[plane * h * w..(plane + 1) * h * w];
                for (oy, y) in ty.iter().enumerate() {
                    for (ox, xt) in tx.iter().enumerate() {
                        let gv = gp[oy * width + ox];
                        d[y.i0 * w + xt.i0] += gv * y.w0 * xt.w0;
                        d[y.i0 * w + xt.i1] += gv * y.w0 * xt.w1;
                        d[y.i1 * w + xt.i0] += gv * y.w1 * xt.w0;
                        d[y.i1 * w + xt.i1] += gv * y.w1 * xt.w1;
                    }
                }
            }
            vec![Some(Tensor::new([b, c, h, w], dx))]
        })
    }
}
