//! Camouflaged-object evaluation metrics: MAE, S-measure, mean E-measure and
//! weighted F-measure.
//!
//! Predictions are maps in [0, 1]; ground truth pixels count as foreground
//! when greater than 0.5.

use rayon::prelude::*;
use serde::Serialize;

use crate::datamodel::Plane;
use crate::error::{BgError, Result};

/// Machine epsilon as used by the reference definitions.
const EPS: f64 = f64::EPSILON;

pub const S_ALPHA: f64 = 0.5;
pub const E_THRESHOLDS: usize = 255;
pub const WF_GAUSS_SIZE: usize = 7;
pub const WF_GAUSS_SIGMA: f64 = 5.0;
pub const WF_BETA2: f64 = 1.0;

fn check_dims(p: &Plane, g: &Plane) -> Result<()> {
    if !p.same_dims(g) {
        return Err(BgError::shape(format!(
            "prediction is {}x{}, ground truth is {}x{}",
            p.height, p.width, g.height, g.width
        )));
    }
    if p.is_empty() {
        return Err(BgError::shape("empty map"));
    }
    Ok(())
}

fn is_fg(v: f64) -> bool {
    v > 0.5
}

pub fn mae(p: &Plane, g: &Plane) -> Result<f64> {
    check_dims(p, g)?;
    Ok(p.data.iter().zip(&g.data).map(|(a, b)| (a - b).abs()).sum::<f64>() / p.len() as f64)
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

/// Sample standard deviation (N − 1 denominator; 0 for one element).
fn std_dev(v: &[f64]) -> f64 {
    if v.len() < 2 {
        return 0.0;
    }
    let m = mean(v);
    (v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (v.len() - 1) as f64).sqrt()
}

fn object_score(values: &[f64]) -> f64 {
    if values.is_empty() {
        return 0.0;
    }
    let x = mean(values);
    2.0 * x / (x * x + 1.0 + std_dev(values) + EPS)
}

fn s_object(p: &Plane, g: &Plane) -> f64 {
    let fg: Vec<f64> = p.data.iter().zip(&g.data).filter(|(_, &g)| is_fg(g)).map(|(&p, _)| p).collect();
    let bg: Vec<f64> = p.data.iter().zip(&g.data).filter(|(_, &g)| !is_fg(g)).map(|(&p, _)| 1.0 - p).collect();
    let u = fg.len() as f64 / g.len() as f64;
    u * object_score(&fg) + (1.0 - u) * object_score(&bg)
}

/// Region similarity of one quadrant.
fn ssim(p: &[f64], g: &[f64]) -> f64 {
    let n = p.len() as f64;
    let x = mean(p);
    let y = mean(g);
    let d = n - 1.0 + EPS;
    let sx2 = p.iter().map(|v| (v - x).powi(2)).sum::<f64>() / d;
    let sy2 = g.iter().map(|v| (v - y).powi(2)).sum::<f64>() / d;
    let sxy = p.iter().zip(g).map(|(a, b)| (a - x) * (b - y)).sum::<f64>() / d;
    let alpha = 4.0 * x * y * sxy;
    let beta = (x * x + y * y) * (sx2 + sy2);
    if alpha != 0.0 {
        alpha / (beta + EPS)
    } else if beta == 0.0 {
        1.0
    } else {
        0.0
    }
}

/// Foreground centroid in 1-based coordinates, rounded half away from zero.
fn centroid(g: &Plane) -> (usize, usize) {
    let total: f64 = g.data.iter().sum();
    if total == 0.0 {
        return ((g.width as f64 / 2.0).round() as usize, (g.height as f64 / 2.0).round() as usize);
    }
    let (mut sx, mut sy) = (0.0, 0.0);
    for y in 0..g.height {
        for x in 0..g.width {
            let v = g.get(y, x);
            sx += v * (x + 1) as f64;
            sy += v * (y + 1) as f64;
        }
    }
    ((sx / total).round() as usize, (sy / total).round() as usize)
}

fn s_region(p: &Plane, g: &Plane) -> f64 {
    let (cx, cy) = centroid(g);
    let (h, w) = (g.height, g.width);
    let area = (h * w) as f64;
    let quads = [(0, cy, 0, cx), (0, cy, cx, w), (cy, h, 0, cx), (cy, h, cx, w)];
    let mut score = 0.0;
    let mut weight_sum = 0.0;
    for (k, &(y0, y1, x0, x1)) in quads.iter().enumerate() {
        let weight = if k < 3 { ((y1 - y0) * (x1 - x0)) as f64 / area } else { 1.0 - weight_sum };
        weight_sum += weight;
        if y1 <= y0 || x1 <= x0 {
            continue;
        }
        let mut pq = Vec::with_capacity((y1 - y0) * (x1 - x0));
        let mut gq = Vec::with_capacity(pq.capacity());
        for y in y0..y1 {
            for x in x0..x1 {
                pq.push(p.get(y, x));
                gq.push(g.get(y, x));
            }
        }
        score += weight * ssim(&pq, &gq);
    }
    score
}

/// Structure measure with α = 0.5.
pub fn s_measure(p: &Plane, g: &Plane) -> Result<f64> {
    check_dims(p, g)?;
    let g = g.map(|v| if is_fg(v) { 1.0 } else { 0.0 });
    let y = g.mean();
    let q = if y == 0.0 {
        1.0 - p.mean()
    } else if y == 1.0 {
        p.mean()
    } else {
        S_ALPHA * s_object(p, &g) + (1.0 - S_ALPHA) * s_region(p, &g)
    };
    Ok(q.max(0.0))
}

/// Enhanced-alignment score of a binary map given counts of
/// (fm, gt) = (1,1), (1,0), (0,1), (0,0).
fn enhanced_from_counts(tp: usize, fp: usize, fn_: usize, tn: usize) -> f64 {
    let n = (tp + fp + fn_ + tn) as f64;
    let gt_fg = (tp + fn_) as f64;
    let fm_fg = (tp + fp) as f64;
    let sum = if gt_fg == 0.0 {
        n - fm_fg
    } else if gt_fg == n {
        fm_fg
    } else {
        let mu_fm = fm_fg / n;
        let mu_gt = gt_fg / n;
        let term = |fm: f64, gt: f64| {
            let (a, b) = (fm - mu_fm, gt - mu_gt);
            let align = 2.0 * a * b / (a * a + b * b + EPS);
            (align + 1.0).powi(2) / 4.0
        };
        tp as f64 * term(1.0, 1.0) + fp as f64 * term(1.0, 0.0) + fn_ as f64 * term(0.0, 1.0) + tn as f64 * term(0.0, 0.0)
    };
    sum / (n - 1.0 + EPS)
}

/// Mean enhanced-alignment measure over thresholds `k/255`,
/// `k = 0..=254`, binarizing with `P > t`.
pub fn e_measure_mean(p: &Plane, g: &Plane) -> Result<f64> {
    check_dims(p, g)?;
    let mut fg_vals = Vec::new();
    let mut bg_vals = Vec::new();
    for (&pv, &gv) in p.data.iter().zip(&g.data) {
        if is_fg(gv) {
            fg_vals.push(pv);
        } else {
            bg_vals.push(pv);
        }
    }
    fg_vals.sort_by(f64::total_cmp);
    bg_vals.sort_by(f64::total_cmp);
    let above = |v: &[f64], t: f64| v.len() - v.partition_point(|&x| x <= t);
    let total: f64 = (0..E_THRESHOLDS)
        .map(|k| {
            let t = k as f64 / 255.0;
            let tp = above(&fg_vals, t);
            let fp = above(&bg_vals, t);
            enhanced_from_counts(tp, fp, fg_vals.len() - tp, bg_vals.len() - fp)
        })
        .sum();
    Ok(total / E_THRESHOLDS as f64)
}

/// Squared Euclidean distance transform to the nearest foreground pixel
/// (separable lower-envelope algorithm); `u64::MAX` when there is none.
fn squared_edt(fg: &[bool], h: usize, w: usize) -> Vec<u64> {
    const INF: f64 = 1e30;
    fn envelope(f: &[f64], out: &mut [f64]) {
        let n = f.len();
        let mut v = vec![0usize; n];
        let mut z = vec![0f64; n + 1];
        let mut k = 0usize;
        z[0] = f64::NEG_INFINITY;
        z[1] = f64::INFINITY;
        for q in 1..n {
            let mut s;
            loop {
                let p = v[k];
                s = ((f[q] + (q * q) as f64) - (f[p] + (p * p) as f64)) / (2.0 * (q as f64 - p as f64));
                if s > z[k] {
                    break;
                }
                k -= 1;
            }
            k += 1;
            v[k] = q;
            z[k] = s;
            z[k + 1] = f64::INFINITY;
        }
        k = 0;
        for (q, o) in out.iter_mut().enumerate() {
            while z[k + 1] < q as f64 {
                k += 1;
            }
            let d = q as f64 - v[k] as f64;
            *o = d * d + f[v[k]];
        }
    }
    let mut cols = vec![0f64; h * w];
    let mut f = vec![0f64; h];
    let mut out = vec![0f64; h];
    for x in 0..w {
        for y in 0..h {
            f[y] = if fg[y * w + x] { 0.0 } else { INF };
        }
        envelope(&f, &mut out);
        for y in 0..h {
            cols[y * w + x] = out[y];
        }
    }
    let mut result = vec![0u64; h * w];
    let mut out = vec![0f64; w];
    for y in 0..h {
        envelope(&cols[y * w..(y + 1) * w], &mut out);
        for x in 0..w {
            result[y * w + x] = if out[x] >= INF / 2.0 { u64::MAX } else { out[x].round() as u64 };
        }
    }
    result
}

fn isqrt(n: u64) -> u64 {
    let mut r = (n as f64).sqrt() as u64;
    while r * r > n {
        r -= 1;
    }
    while (r + 1) * (r + 1) <= n {
        r += 1;
    }
    r
}

/// For every pixel, the row-major index of the nearest foreground pixel
/// (smallest index among equidistant ones) and the Euclidean distance to it.
pub fn nearest_foreground(fg: &[bool], h: usize, w: usize) -> Vec<(usize, f64)> {
    let d2 = squared_edt(fg, h, w);
    (0..h * w)
        .into_par_iter()
        .map(|i| {
            if fg[i] {
                return (i, 0.0);
            }
            let (y, x) = ((i / w) as i64, (i % w) as i64);
            let d = d2[i];
            let r = isqrt(d) as i64;
            let mut best = usize::MAX;
            for dy in -r..=r {
                let rem = d - (dy * dy) as u64;
                let dx = isqrt(rem);
                if dx * dx != rem {
                    continue;
                }
                for dx in [-(dx as i64), dx as i64] {
                    let (yy, xx) = (y + dy, x + dx);
                    if yy >= 0 && xx >= 0 && (yy as usize) < h && (xx as usize) < w {
                        let j = yy as usize * w + xx as usize;
                        if fg[j] && j < best {
                            best = j;
                        }
                    }
                }
            }
            (best, (d as f64).sqrt())
        })
        .collect()
}

/// Normalized `size`×`size` Gaussian kernel.
pub fn gaussian_kernel(size: usize, sigma: f64) -> Vec<f64> {
    let c = (size / 2) as f64;
    let mut k: Vec<f64> = (0..size * size)
        .map(|i| {
            let (y, x) = ((i / size) as f64 - c, (i % size) as f64 - c);
            (-(x * x + y * y) / (2.0 * sigma * sigma)).exp()
        })
        .collect();
    let s: f64 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= s);
    k
}

/// Weighted F-measure. Returns `None` when the ground truth has no
/// foreground.
pub fn f_beta_weighted(p: &Plane, g: &Plane) -> Result<Option<f64>> {
    check_dims(p, g)?;
    let (h, w) = (g.height, g.width);
    let fg: Vec<bool> = g.data.iter().map(|&v| is_fg(v)).collect();
    if !fg.contains(&true) {
        return Ok(None);
    }
    let gt: Vec<f64> = fg.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect();
    let e: Vec<f64> = p.data.iter().zip(&gt).map(|(p, g)| (p - g).abs()).collect();
    let nearest = nearest_foreground(&fg, h, w);
    let et: Vec<f64> = nearest.iter().map(|&(j, _)| e[j]).collect();
    let kernel = gaussian_kernel(WF_GAUSS_SIZE, WF_GAUSS_SIGMA);
    let r = (WF_GAUSS_SIZE / 2) as i64;
    let ea: Vec<f64> = (0..h * w)
        .map(|i| {
            let (y, x) = ((i / w) as i64, (i % w) as i64);
            let mut s = 0.0;
            for ky in -r..=r {
                for kx in -r..=r {
                    let (yy, xx) = (y + ky, x + kx);
                    if yy >= 0 && xx >= 0 && (yy as usize) < h && (xx as usize) < w {
                        s += kernel[((ky + r) * WF_GAUSS_SIZE as i64 + kx + r) as usize] * et[yy as usize * w + xx as usize];
                    }
                }
            }
            s
        })
        .collect();
    let decay = 0.5f64.ln() / 5.0;
    let (mut ew_fg, mut ew_bg, mut n_fg) = (0.0, 0.0, 0usize);
    for i in 0..h * w {
        if fg[i] {
            ew_fg += e[i].min(ea[i]);
            n_fg += 1;
        } else {
            ew_bg += e[i] * (2.0 - (decay * nearest[i].1).exp());
        }
    }
    let tpw = n_fg as f64 - ew_fg;
    let recall = 1.0 - ew_fg / n_fg as f64;
    let precision = tpw / (EPS + tpw + ew_bg);
    Ok(Some((1.0 + WF_BETA2) * recall * precision / (EPS + recall + WF_BETA2 * precision)))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ImageMetrics {
    pub id: String,
    pub s_alpha: f64,
    pub e_phi: f64,
    /// Undefined for ground truth without foreground.
    pub f_beta_w: Option<f64>,
    pub mae: f64,
}

impl ImageMetrics {
    pub fn compute(id: &str, p: &Plane, g: &Plane) -> Result<Self> {
        Ok(ImageMetrics {
            id: id.to_string(),
            s_alpha: s_measure(p, g)?,
            e_phi: e_measure_mean(p, g)?,
            f_beta_w: f_beta_weighted(p, g)?,
            mae: mae(p, g)?,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MetricReport {
    pub per_image: Vec<ImageMetrics>,
    pub s_alpha: f64,
    pub e_phi: f64,
    pub f_beta_w: f64,
    pub mae: f64,
    /// Images left out of the weighted-F mean.
    pub f_beta_w_excluded: usize,
}

impl MetricReport {
    /// Unweighted means over images, reduced in id order.
    pub fn aggregate(mut per_image: Vec<ImageMetrics>) -> Self {
        per_image.sort_by(|a, b| a.id.cmp(&b.id));
        let n = per_image.len().max(1) as f64;
        let defined: Vec<f64> = per_image.iter().filter_map(|m| m.f_beta_w).collect();
        MetricReport {
            s_alpha: per_image.iter().map(|m| m.s_alpha).sum::<f64>() / n,
            e_phi: per_image.iter().map(|m| m.e_phi).sum::<f64>() / n,
            mae: per_image.iter().map(|m| m.mae).sum::<f64>() / n,
            f_beta_w: if defined.is_empty() { 0.0 } else { defined.iter().sum::<f64>() / defined.len() as f64 },
            f_beta_w_excluded: per_image.len() - defined.len(),
            per_image,
        }
    }

    /// Scores every (id, prediction, ground truth) triple in parallel.
    pub fn evaluate(items: &[(String, Plane, Plane)]) -> Result<Self> {
        let per_image = items.par_iter().map(|(id, p, g)| ImageMetrics::compute(id, p, g)).collect::<Result<Vec<_>>>()?;
        Ok(Self::aggregate(per_image))
    }

    /// Header, per-image rows and an aggregate row, tab separated, in the
    /// column order id, S_alpha, E_phi, F_beta_w, MAE.
    pub fn to_tsv(&self) -> String {
        let f = |v: f64| format!("{v:.6}");
        let mut out = String::from("id\tS_alpha\tE_phi\tF_beta_w\tMAE\n");
        for m in &self.per_image {
            let fw = m.f_beta_w.map(f).unwrap_or_else(|| "NaN".into());
            out.push_str(&format!("{}\t{}\t{}\t{}\t{}\n", m.id, f(m.s_alpha), f(m.e_phi), fw, f(m.mae)));
        }
        out.push_str(&format!("MEAN\t{}\t{}\t{}\t{}\n", f(self.s_alpha), f(self.e_phi), f(self.f_beta_w), f(self.mae)));
        out
    }
}
