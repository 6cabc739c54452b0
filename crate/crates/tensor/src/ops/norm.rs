use crate::{Tensor, Var};

/// Batch statistics observed by a training-mode [`Var::batch_norm`] call.
#[derive(Debug, Clone)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    /// Unbiased (N - 1) variance, the one folded into running estimates.
    pub var_unbiased: Vec<f64>,
}

pub enum NormMode<'a> {
    /// Normalize with the statistics of the current batch.
    Batch,
    /// Normalize with stored running mean and variance.
    Running { mean: &'a [f64], var: &'a [f64] },
}

impl<'g> Var<'g> {
    /// Per-channel batch normalization of a 4-D tensor followed by the affine
    /// map `gamma * x_hat + beta`.
    pub fn batch_norm(
        self,
        gamma: Var<'g>,
        beta: Var<'g>,
        mode: NormMode<'_>,
        eps: f64,
    ) -> (Var<'g>, Option<BatchStats>) {
        let graph = self.graph;
        let x = self.value();
        let (b, c, h, w) = x.dims4();
        assert_eq!(gamma.shape(), vec![c], "batch_norm: gamma must have C entries");
        assert_eq!(beta.shape(), vec![c], "batch_norm: beta must have C entries");
        if graph.is_meta() {
            return (graph.push_meta(x.shape().to_vec(), &[self, gamma, beta]), None);
        }
        let hw = h * w;
        let count = (b * hw) as f64;
        let channel = move |ci: usize| (0..b).flat_map(move |bi| ((bi * c + ci) * hw)..((bi * c + ci) * hw + hw));

        let (mean, inv_std, stats) = match mode {
            NormMode::Batch => {
                let mut mean = vec![0.0; c];
                let mut var = vec![0.0; c];
                for ci in 0..c {
                    let m = channel(ci).map(|i| x.data()[i]).sum::<f64>() / count;
                    let v = channel(ci).map(|i| (x.data()[i] - m).powi(2)).sum::<f64>();
                    mean[ci] = m;
                    var[ci] = v;
                }
                let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v / count + eps).sqrt()).collect();
                let unbiased = var.iter().map(|v| if count > 1.0 { v / (count - 1.0) } else { 0.0 }).collect();
                (mean.clone(), inv_std, Some(BatchStats { mean, var_unbiased: unbiased }))
            }
            NormMode::Running { mean, var } => {
                assert_eq!((mean.len(), var.len()), (c, c), "batch_norm: running stats must have C entries");
                (mean.to_vec(), var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect(), None)
            }
        };
        let batch_mode = stats.is_some();

        let (gv, bv) = (gamma.value(), beta.value());
        let mut xhat = vec![0.0; x.numel()];
        let mut out = vec![0.0; x.numel()];
        for ci in 0..c {
            for i in channel(ci) {
                let n = (x.data()[i] - mean[ci]) * inv_std[ci];
                xhat[i] = n;
                out[i] = gv.data()[ci] * n + bv.data()[ci];
            }
        }

        let shape = x.shape().to_vec();
        let var = graph.push(Tensor::new(shape.clone(), out), &[self, gamma, beta], move |go, need| {
            let gd = go.data();
            let mut dgamma = vec![0.0; c];
            let mut dbeta = vec![0.0; c];
            for ci in 0..c {
                for i in channel(ci) {
                    dgamma[ci] += gd[i] * xhat[i];
                    dbeta[ci] += gd[i];
                }
            }
            let dx = need[0].then(|| {
                let mut dx = vec![0.0; gd.len()];
                for ci in 0..c {
                    let g = gv.data()[ci];
                    if batch_mode {
                        // dx = g * inv_std / N * (N dy - sum(dy) - x_hat * sum(dy x_hat))
                        let (s1, s2) = (dbeta[ci], dgamma[ci]);
                        for i in channel(ci) {
                            dx[i] = g * inv_std[ci] / count * (count * gd[i] - s1 - xhat[i] * s2);
                        }
                    } else {
                        for i in channel(ci) {
                            dx[i] = g * inv_std[ci] * gd[i];
                        }
                    }
                }
                Tensor::new(shape.clone(), dx)
            });
            vec![dx, need[1].then(|| Tensor::new([c], dgamma)), need[2].then(|| Tensor::new([c], dbeta))]
        });
        (var, stats)
    }
}
