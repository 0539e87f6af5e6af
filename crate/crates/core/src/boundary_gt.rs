//! Semantic and binary boundary targets generated from label maps.
//!
//! A pixel of class `c` is a boundary pixel of channel `c` when some pixel of a
//! different, non-ignore class lies within Euclidean distance `radius`. Both
//! sides of every transition are marked. Distances come from an exact
//! two-pass squared Euclidean distance transform per class.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// Label value excluded from supervision and from boundary transitions.
pub const IGNORE: u8 = 255;

/// Default boundary radius in pixels.
pub const DEFAULT_RADIUS: usize = 2;

/// Per-pixel class indices.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelMap {
    pub height: usize,
    pub width: usize,
    pub labels: Vec<u8>,
}

impl LabelMap {
    pub fn new(height: usize, width: usize, labels: Vec<u8>) -> Result<Self> {
        if labels.len() != height * width {
            return Err(Error::Data(format!(
                "label map {height}x{width} needs {} labels, got {}",
                height * width,
                labels.len()
            )));
        }
        Ok(Self { height, width, labels })
    }

    pub fn filled(height: usize, width: usize, value: u8) -> Self {
        Self {
            height,
            width,
            labels: vec![value; height * width],
        }
    }

    pub fn get(&self, y: usize, x: usize) -> u8 {
        self.labels[y * self.width + x]
    }

    pub fn set(&mut self, y: usize, x: usize, v: u8) {
        self.labels[y * self.width + x] = v;
    }

    /// Every non-ignore label is below `num_classes`.
    pub fn validate(&self, num_classes: usize) -> Result<()> {
        match self
            .labels
            .iter()
            .position(|&l| l != IGNORE && l as usize >= num_classes)
        {
            Some(i) => Err(Error::Data(format!(
                "label {} at pixel ({}, {}) is not a valid class index for {num_classes} classes",
                self.labels[i],
                i / self.width,
                i % self.width
            ))),
            None => Ok(()),
        }
    }

    pub fn flip_horizontal(&self) -> Self {
        let mut out = self.clone();
        for y in 0..self.height {
            out.labels[y * self.width..(y + 1) * self.width].reverse();
        }
        out
    }
}

/// Binary per-channel boundary maps, `channels × height × width`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BoundaryTarget {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub radius: usize,
    pub data: Vec<u8>,
}

impl BoundaryTarget {
    pub fn zeros(channels: usize, height: usize, width: usize, radius: usize) -> Self {
        Self {
            channels,
            height,
            width,
            radius,
            data: vec![0; channels * height * width],
        }
    }

    pub fn channel(&self, c: usize) -> &[u8] {
        let hw = self.height * self.width;
        &self.data[c * hw..(c + 1) * hw]
    }

    pub fn count(&self) -> usize {
        self.data.iter().map(|&v| v as usize).sum()
    }

    /// Channel-wise OR, a single-channel map.
    pub fn union(&self) -> BoundaryTarget {
        let hw = self.height * self.width;
        let mut data = vec![0u8; hw];
        for c in 0..self.channels {
            for (d, &v) in data.iter_mut().zip(self.channel(c)) {
                *d |= v;
            }
        }
        BoundaryTarget {
            channels: 1,
            height: self.height,
            width: self.width,
            radius: self.radius,
            data,
        }
    }

    /// Stack targets of equal shape into an `N×C×H×W` tensor of 0/1 values.
    pub fn stack<T: Scalar>(targets: &[BoundaryTarget]) -> Result<Tensor<T>> {
        let first = targets
            .first()
            .ok_or_else(|| Error::Data("no boundary targets to stack".into()))?;
        let mut data = Vec::with_capacity(targets.len() * first.data.len());
        for t in targets {
            if (t.channels, t.height, t.width) != (first.channels, first.height, first.width) {
                return Err(Error::Data("boundary targets differ in shape".into()));
            }
            data.extend(t.data.iter().map(|&v| T::of(v as f64)));
        }
        Tensor::new(vec![targets.len(), first.channels, first.height, first.width], data)
    }
}

const FAR: f64 = 1e20;

/// 1-D squared distance transform of sampled function `f` (lower envelope of parabolas).
fn dt1d(f: &[f64], d: &mut [f64], v: &mut [usize], z: &mut [f64]) {
    let n = f.len();
    let mut k = 0usize;
    v[0] = 0;
    z[0] = f64::NEG_INFINITY;
    z[1] = f64::INFINITY;
    for q in 1..n {
        let qf = q as f64;
        let mut s;
        loop {
            let vk = v[k] as f64;
            s = ((f[q] + qf * qf) - (f[v[k]] + vk * vk)) / (2.0 * qf - 2.0 * vk);
            // z[0] is -inf, so this stops at k == 0
            if s <= z[k] {
                k -= 1;
            } else {
                break;
            }
        }
        k += 1;
        v[k] = q;
        z[k] = s;
        z[k + 1] = f64::INFINITY;
    }
    k = 0;
    for (q, dq) in d.iter_mut().enumerate() {
        while z[k + 1] < q as f64 {
            k += 1;
        }
        let dv = q as f64 - v[k] as f64;
        *dq = dv * dv + f[v[k]];
    }
}

/// Exact squared Euclidean distance from every pixel to the nearest feature pixel.
pub fn squared_distance_transform(features: &[bool], height: usize, width: usize) -> Vec<f64> {
    let mut grid: Vec<f64> = features.iter().map(|&f| if f { 0.0 } else { FAR }).collect();
    let n = height.max(width);
    let mut f = vec![0.0; n];
    let mut d = vec![0.0; n];
    let mut v = vec![0usize; n];
    let mut z = vec![0.0; n + 1];
    for x in 0..width {
        for y in 0..height {
            f[y] = grid[y * width + x];
        }
        dt1d(&f[..height], &mut d[..height], &mut v, &mut z);
        for y in 0..height {
            grid[y * width + x] = d[y];
        }
    }
    for y in 0..height {
        let row = &mut grid[y * width..(y + 1) * width];
        f[..width].copy_from_slice(row);
        dt1d(&f[..width], &mut d[..width], &mut v, &mut z);
        row.copy_from_slice(&d[..width]);
    }
    grid
}

/// Per-class boundary maps of `labels`.
pub fn semantic_boundaries(labels: &LabelMap, num_classes: usize, radius: usize) -> Result<BoundaryTarget> {
    if radius == 0 {
        return Err(Error::Config("boundary radius must be at least 1".into()));
    }
    labels.validate(num_classes)?;
    let (h, w) = (labels.height, labels.width);
    let mut out = BoundaryTarget::zeros(num_classes, h, w, radius);
    let mut present = vec![false; num_classes];
    for &l in &labels.labels {
        if l != IGNORE {
            present[l as usize] = true;
        }
    }
    let r2 = (radius * radius) as f64;
    let hw = h * w;
    for c in (0..num_classes).filter(|&c| present[c]) {
        let features: Vec<bool> = labels.labels.iter().map(|&l| l != IGNORE && l as usize != c).collect();
        if !features.iter().any(|&f| f) {
            continue;
        }
        let dist = squared_distance_transform(&features, h, w);
        let dst = &mut out.data[c * hw..(c + 1) * hw];
        for (i, (&l, &d2)) in labels.labels.iter().zip(&dist).enumerate() {
            if l as usize == c && d2 <= r2 {
                dst[i] = 1;
            }
        }
    }
    Ok(out)
}

/// Single-channel union of the per-class boundaries.
pub fn binary_boundaries(labels: &LabelMap, radius: usize) -> Result<BoundaryTarget> {
    let num_classes = labels
        .labels
        .iter()
        .filter(|&&l| l != IGNORE)
        .map(|&l| l as usize + 1)
        .max()
        .unwrap_or(1);
    Ok(semantic_boundaries(labels, num_classes, radius)?.union())
}

/// Boundaries of an argmax pseudo-label map; same rule as for ground truth.
pub fn derive_boundaries_from_prediction(
    pred_labels: &LabelMap,
    num_classes: usize,
    radius: usize,
) -> Result<BoundaryTarget> {
    semantic_boundaries(pred_labels, num_classes, radius)
}
