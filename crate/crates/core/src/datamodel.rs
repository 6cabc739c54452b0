//! Value types shared across the crate: single-channel planes, feature maps
//! and pyramids, samples, prediction sets, plus edge-mask derivation.

use std::collections::BTreeMap;
use std::fmt;

use bgnet_tensor::{Tensor, Var};

use crate::error::{BgError, Result};

pub const ALLOWED_STRIDES: [usize; 6] = [1, 2, 4, 8, 16, 32];

/// Single-channel row-major 2-D array.
#[derive(Debug, Clone, PartialEq)]
pub struct Plane {
    pub height: usize,
    pub width: usize,
    pub data: Vec<f64>,
}

impl Plane {
    pub fn new(height: usize, width: usize, data: Vec<f64>) -> Self {
        assert_eq!(height * width, data.len(), "plane dimensions do not match data length");
        Plane { height, width, data }
    }

    pub fn filled(height: usize, width: usize, value: f64) -> Self {
        Plane { height, width, data: vec![value; height * width] }
    }

    pub fn from_fn(height: usize, width: usize, f: impl Fn(usize, usize) -> f64) -> Self {
        let data = (0..height).flat_map(|y| (0..width).map(move |x| (y, x))).map(|(y, x)| f(y, x)).collect();
        Plane { height, width, data }
    }

    pub fn get(&self, y: usize, x: usize) -> f64 {
        self.data[y * self.width + x]
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn mean(&self) -> f64 {
        self.data.iter().sum::<f64>() / self.data.len() as f64
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Plane {
        Plane { height: self.height, width: self.width, data: self.data.iter().map(|&v| f(v)).collect() }
    }

    pub fn flip_horizontal(&self) -> Plane {
        Plane::from_fn(self.height, self.width, |y, x| self.get(y, self.width - 1 - x))
    }

    /// Values at or above 0.5 become 1, the rest 0.
    pub fn binarize(&self) -> Plane {
        self.map(|v| if v >= 0.5 { 1.0 } else { 0.0 })
    }

    pub fn same_dims(&self, other: &Plane) -> bool {
        self.height == other.height && self.width == other.width
    }

    /// As a (1, 1, H, W) tensor.
    pub fn to_tensor(&self) -> Tensor {
        Tensor::new([1, 1, self.height, self.width], self.data.clone())
    }
}

/// A 4-D activation tensor tagged with its stride relative to the network
/// input.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    data: Tensor,
    stride: usize,
}

impl FeatureMap {
    pub fn new(data: Tensor, stride: usize) -> Result<Self> {
        if data.shape().len() != 4 || data.shape().contains(&0) {
            return Err(BgError::shape(format!("feature map needs 4 nonzero dims, got {:?}", data.shape())));
        }
        if !ALLOWED_STRIDES.contains(&stride) {
            return Err(BgError::shape(format!("stride {stride} not in {ALLOWED_STRIDES:?}")));
        }
        if !data.is_meta() && !data.is_finite() {
            return Err(BgError::NonFinite("feature map construction".into()));
        }
        Ok(FeatureMap { data, stride })
    }

    pub fn data(&self) -> &Tensor {
        &self.data
    }

    pub fn stride(&self) -> usize {
        self.stride
    }

    pub fn dims(&self) -> (usize, usize, usize, usize) {
        self.data.dims4()
    }
}

/// A feature inside a forward graph.
#[derive(Clone, Copy)]
pub struct Feat<'g> {
    pub var: Var<'g>,
    pub stride: usize,
}

impl<'g> Feat<'g> {
    pub fn new(var: Var<'g>, stride: usize) -> Self {
        Feat { var, stride }
    }

    pub fn dims(&self) -> (usize, usize, usize, usize) {
        self.var.dims4()
    }

    pub fn channels(&self) -> usize {
        self.dims().1
    }

    pub fn to_feature_map(&self) -> Result<FeatureMap> {
        FeatureMap::new((*self.var.value()).clone(), self.stride)
    }
}

impl fmt::Debug for Feat<'_> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Feat(stride={}, shape={:?})", self.stride, self.var.shape())
    }
}

/// Backbone features f1..f5 keyed by level.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct FeaturePyramid {
    pub levels: BTreeMap<usize, FeatureMap>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Violation {
    pub level: usize,
    pub message: String,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "level {}: {}", self.level, self.message)
    }
}

/// Lists every way `pyramid` breaks the level/stride/size contract for a
/// square network input of `input_size` pixels. An empty list means valid.
pub fn validate_pyramid(pyramid: &FeaturePyramid, input_size: usize) -> Vec<Violation> {
    let mut out = Vec::new();
    let mut batch = None;
    for (&level, fm) in &pyramid.levels {
        let mut push = |message: String| out.push(Violation { level, message });
        if !(1..=5).contains(&level) {
            push(format!("level index {level} outside 1..=5"));
            continue;
        }
        let want = 1usize << level;
        if fm.stride() != want {
            push(format!("stride {} but level {level} requires {want}", fm.stride()));
        }
        let (b, c, h, w) = fm.dims();
        if b == 0 || c == 0 || h == 0 || w == 0 {
            push(format!("empty dimension in {:?}", fm.data().shape()));
        }
        match batch {
            None => batch = Some(b),
            Some(b0) if b0 != b => push(format!("batch size {b} differs from {b0}")),
            _ => {}
        }
        let side = input_size.div_ceil(want);
        if (h, w) != (side, side) {
            push(format!("spatial size {h}x{w}, expected {side}x{side}"));
        }
        if !fm.data().is_meta() && !fm.data().is_finite() {
            push("non-finite values".to_string());
        }
    }
    out
}

/// Result of deriving edge ground truth from an object mask.
#[derive(Debug, Clone, PartialEq)]
pub struct EdgeDerivation {
    pub edges: Plane,
    /// Set when the mask has no 0/1 transition (all background or all
    /// foreground), in which case `edges` is all zero.
    pub no_boundary: bool,
}

fn sliding_extreme(src: &Plane, radius: usize, take_max: bool) -> Plane {
    let pick = |a: f64, b: f64| if take_max { a.max(b) } else { a.min(b) };
    let (h, w) = (src.height, src.width);
    let rows = Plane::from_fn(h, w, |y, x| {
        let lo = x.saturating_sub(radius);
        let hi = (x + radius).min(w - 1);
        (lo..=hi).map(|i| src.get(y, i)).reduce(pick).unwrap()
    });
    Plane::from_fn(h, w, |y, x| {
        let lo = y.saturating_sub(radius);
        let hi = (y + radius).min(h - 1);
        (lo..=hi).map(|j| rows.get(j, x)).reduce(pick).unwrap()
    })
}

/// Morphological gradient (dilation minus erosion) of the binarized mask
/// with a square structuring element of side `2 * band_width + 1`.
/// Neighbors outside the image are ignored.
pub fn derive_edge_mask(mask: &Plane, band_width: usize) -> Result<EdgeDerivation> {
    if band_width == 0 {
        return Err(BgError::Domain("edge band width must be at least 1".into()));
    }
    let bin = mask.binarize();
    let fg = bin.data.iter().filter(|&&v| v > 0.0).count();
    if fg == 0 || fg == bin.len() {
        return Ok(EdgeDerivation { edges: Plane::filled(mask.height, mask.width, 0.0), no_boundary: true });
    }
    let dilated = sliding_extreme(&bin, band_width, true);
    let eroded = sliding_extreme(&bin, band_width, false);
    let data = dilated.data.iter().zip(&eroded.data).map(|(d, e)| d - e).collect();
    Ok(EdgeDerivation { edges: Plane::new(mask.height, mask.width, data), no_boundary: false })
}

/// One training or evaluation example.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub id: String,
    /// RGB in [0, 1], shape (3, H, W).
    pub image: Tensor,
    pub object_mask: Plane,
    pub edge_mask: Plane,
    /// True when `edge_mask` was computed from `object_mask` (and should be
    /// recomputed after any resize) rather than loaded from disk.
    pub edge_derived: bool,
}

impl Sample {
    pub fn new(id: impl Into<String>, image: Tensor, object_mask: Plane, edge_mask: Plane, edge_derived: bool) -> Result<Self> {
        let id = id.into();
        let (c, h, w) = match image.shape() {
            &[c, h, w] => (c, h, w),
            s => return Err(BgError::shape(format!("sample {id}: image must be (3,H,W), got {s:?}"))),
        };
        if c != 3 {
            return Err(BgError::shape(format!("sample {id}: image has {c} channels, expected 3")));
        }
        for (name, p) in [("object mask", &object_mask), ("edge mask", &edge_mask)] {
            if (p.height, p.width) != (h, w) {
                return Err(BgError::shape(format!(
                    "sample {id}: {name} is {}x{}, image is {h}x{w}",
                    p.height, p.width
                )));
            }
            if p.data.iter().any(|v| !(0.0..=1.0).contains(v)) {
                return Err(BgError::Domain(format!("sample {id}: {name} has values outside [0,1]")));
            }
        }
        Ok(Sample { id, image, object_mask, edge_mask, edge_derived })
    }

    pub fn height(&self) -> usize {
        self.object_mask.height
    }

    pub fn width(&self) -> usize {
        self.object_mask.width
    }
}

/// Network outputs detached from the graph.
#[derive(Debug, Clone)]
pub struct PredictionSet {
    /// Single-channel mask logits keyed by level (2, 3, 4).
    pub mask_logits: BTreeMap<usize, FeatureMap>,
    /// Post-sigmoid edge probabilities; absent for variants without an edge
    /// branch.
    pub edge_prob: Option<FeatureMap>,
}

impl PredictionSet {
    /// The prediction of the last (highest-resolution) decoder stage.
    pub fn final_logits(&self) -> &FeatureMap {
        &self.mask_logits[&2]
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn square_mask(n: usize, lo: usize, hi: usize) -> Plane {
        Plane::from_fn(n, n, |y, x| if (lo..hi).contains(&y) && (lo..hi).contains(&x) { 1.0 } else { 0.0 })
    }

    /// Dilation/erosion by direct neighborhood enumeration.
    fn brute_gradient(mask: &Plane, r: usize) -> Plane {
        let (h, w) = (mask.height as isize, mask.width as isize);
        Plane::from_fn(mask.height, mask.width, |y, x| {
            let mut vals = Vec::new();
            for dy in -(r as isize)..=r as isize {
                for dx in -(r as isize)..=r as isize {
                    let (yy, xx) = (y as isize + dy, x as isize + dx);
                    if yy >= 0 && xx >= 0 && yy < h && xx < w {
                        vals.push(if mask.get(yy as usize, xx as usize) >= 0.5 { 1.0 } else { 0.0 });
                    }
                }
            }
            let max = vals.iter().cloned().fold(f64::MIN, f64::max);
            let min = vals.iter().cloned().fold(f64::MAX, f64::min);
            max - min
        })
    }

    #[test]
    fn square_gives_two_pixel_ring() {
        let mask = square_mask(12, 4, 8);
        let edges = derive_edge_mask(&mask, 1).unwrap();
        assert!(!edges.no_boundary);
        assert_eq!(edges.edges, brute_gradient(&mask, 1));
        // Ring spans rows/cols 3..=8; the 2x2 core 5..7 and everything
        // outside 3..=8 stay zero.
        for y in 0..12 {
            for x in 0..12 {
                let in_outer = (3..=8).contains(&y) && (3..=8).contains(&x);
                let in_core = (5..7).contains(&y) && (5..7).contains(&x);
                assert_eq!(edges.edges.get(y, x), if in_outer && !in_core { 1.0 } else { 0.0 }, "({y},{x})");
            }
        }
    }

    #[test]
    fn constant_masks_have_no_boundary() {
        for v in [0.0, 1.0] {
            let d = derive_edge_mask(&Plane::filled(5, 7, v), 1).unwrap();
            assert!(d.no_boundary);
            assert!(d.edges.data.iter().all(|&e| e == 0.0));
        }
    }

    #[test]
    fn complement_has_same_edges() {
        let mask = Plane::from_fn(16, 16, |y, x| if (y * 3 + x * 5) % 7 < 3 { 1.0 } else { 0.0 });
        for r in 1..=3 {
            let a = derive_edge_mask(&mask, r).unwrap().edges;
            let b = derive_edge_mask(&mask.map(|v| 1.0 - v), r).unwrap().edges;
            assert_eq!(a, b);
            assert_eq!(a, brute_gradient(&mask, r));
        }
    }

    #[test]
    fn zero_band_width_is_rejected() {
        assert!(derive_edge_mask(&Plane::filled(2, 2, 0.0), 0).is_err());
    }

    #[test]
    fn pyramid_validation() {
        let level = |i: usize, stride: usize, side: usize| {
            (i, FeatureMap::new(Tensor::zeros([1, 4, side, side]), stride).unwrap())
        };
        let good = FeaturePyramid {
            levels: [level(2, 4, 104), level(3, 8, 52), level(4, 16, 26), level(5, 32, 13)].into_iter().collect(),
        };
        assert!(validate_pyramid(&good, 416).is_empty());

        let mut bad = good.clone();
        bad.levels.insert(3, FeatureMap::new(Tensor::zeros([1, 4, 52, 52]), 4).unwrap());
        let v = validate_pyramid(&bad, 416);
        assert_eq!(v.len(), 1);
        assert_eq!(v[0].level, 3);
    }

    #[test]
    fn feature_map_rejects_bad_stride_and_nan() {
        assert!(FeatureMap::new(Tensor::zeros([1, 1, 2, 2]), 3).is_err());
        assert!(FeatureMap::new(Tensor::full([1, 1, 1, 1], f64::NAN), 2).is_err());
    }
}
