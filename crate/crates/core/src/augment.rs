//! Weak (geometric) and strong (photometric + CutMix) views.
//!
//! The strong view is built on top of the weak one, so both share geometry
//! pixel for pixel. CutMix boxes are recorded so the same paste can be applied
//! to teacher pseudo-labels after inference.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::boundary_gt::{LabelMap, IGNORE};
use crate::error::{Error, Result};

/// Planar RGB image with values in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    pub height: usize,
    pub width: usize,
    /// `3 * height * width`, channel-major
    pub data: Vec<f32>,
}

impl Image {
    pub fn new(height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != 3 * height * width {
            return Err(Error::Data(format!(
                "image buffer of {} values for {height}x{width}x3",
                data.len()
            )));
        }
        Ok(Self { height, width, data })
    }

    pub fn filled(height: usize, width: usize, rgb: [f32; 3]) -> Self {
        let hw = height * width;
        let data = (0..3 * hw).map(|i| rgb[i / hw]).collect();
        Self { height, width, data }
    }

    pub fn plane(&self, c: usize) -> &[f32] {
        let hw = self.height * self.width;
        &self.data[c * hw..(c + 1) * hw]
    }

    pub fn get(&self, c: usize, y: usize, x: usize) -> f32 {
        self.data[(c * self.height + y) * self.width + x]
    }

    pub fn channel_means(&self) -> [f32; 3] {
        let hw = (self.height * self.width).max(1) as f64;
        let m = |c: usize| (self.plane(c).iter().map(|&v| v as f64).sum::<f64>() / hw) as f32;
        [m(0), m(1), m(2)]
    }

    pub fn flip_horizontal(&self) -> Self {
        let w = self.width;
        let data = (0..self.data.len())
            .map(|i| {
                let (row, x) = (i / w, i % w);
                self.data[row * w + (w - 1 - x)]
            })
            .collect();
        Self {
            height: self.height,
            width: w,
            data,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AugmentConfig {
    pub scale_min: f64,
    pub scale_max: f64,
    pub flip_prob: f64,
    /// `±` range for brightness, contrast and saturation factors
    pub jitter: f64,
    pub jitter_prob: f64,
    pub grayscale_prob: f64,
    pub blur_prob: f64,
    pub cutmix_prob: f64,
    pub cutmix_area_min: f64,
    pub cutmix_area_max: f64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            scale_min: 0.5,
            scale_max: 2.0,
            flip_prob: 0.5,
            jitter: 0.3,
            jitter_prob: 0.8,
            grayscale_prob: 0.2,
            blur_prob: 0.5,
            cutmix_prob: 1.0,
            cutmix_area_min: 0.2,
            cutmix_area_max: 0.5,
        }
    }
}

impl AugmentConfig {
    pub fn validate(&self) -> Result<()> {
        let probs = [
            ("flip_prob", self.flip_prob),
            ("jitter_prob", self.jitter_prob),
            ("grayscale_prob", self.grayscale_prob),
            ("blur_prob", self.blur_prob),
            ("cutmix_prob", self.cutmix_prob),
        ];
        for (name, p) in probs {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::Config(format!("augment.{name} must be in [0, 1], got {p}")));
            }
        }
        if !(self.scale_min > 0.0 && self.scale_min <= self.scale_max) {
            return Err(Error::Config("augment scale range must satisfy 0 < min <= max".into()));
        }
        if !(0.0..1.0).contains(&self.jitter) {
            return Err(Error::Config(format!(
                "augment.jitter must be in [0, 1), got {}",
                self.jitter
            )));
        }
        if !(0.0 <= self.cutmix_area_min && self.cutmix_area_min <= self.cutmix_area_max && self.cutmix_area_max <= 1.0)
        {
            return Err(Error::Config(
                "cutmix area range must satisfy 0 <= min <= max <= 1".into(),
            ));
        }
        Ok(())
    }
}

/// Scale, crop window and flip applied by the weak pipeline.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Geometry {
    pub scale: f64,
    /// top-left corner of the crop in scaled-image pixels (may be negative when padding)
    pub crop_y: i64,
    pub crop_x: i64,
    pub out_h: usize,
    pub out_w: usize,
    pub flip: bool,
}

impl Geometry {
    pub fn identity(h: usize, w: usize) -> Self {
        Self {
            scale: 1.0,
            crop_y: 0,
            crop_x: 0,
            out_h: h,
            out_w: w,
            flip: false,
        }
    }

    /// Position in the scaled image that output pixel `(y, x)` samples.
    pub fn scaled_position(&self, y: usize, x: usize) -> (i64, i64) {
        let x = if self.flip { self.out_w - 1 - x } else { x };
        (self.crop_y + y as i64, self.crop_x + x as i64)
    }

    /// Source pixel for output `(y, x)` under nearest-neighbour sampling, if inside.
    pub fn source_pixel(&self, y: usize, x: usize, src_h: usize, src_w: usize) -> Option<(usize, usize)> {
        let (sy, sx) = self.scaled_position(y, x);
        let (sh, sw) = scaled_size(src_h, src_w, self.scale);
        if sy < 0 || sx < 0 || sy >= sh as i64 || sx >= sw as i64 {
            return None;
        }
        let map = |s: i64, n: usize| (((s as f64 + 0.5) / self.scale).floor() as usize).min(n - 1);
        Some((map(sy, src_h), map(sx, src_w)))
    }
}

fn scaled_size(h: usize, w: usize, scale: f64) -> (usize, usize) {
    let r = |n: usize| ((n as f64 * scale).round() as usize).max(1);
    (r(h), r(w))
}

pub fn sample_geometry(rng: &mut impl Rng, src_h: usize, src_w: usize, crop: usize, cfg: &AugmentConfig) -> Geometry {
    let scale = if cfg.scale_max > cfg.scale_min {
        rng.gen_range(cfg.scale_min..=cfg.scale_max)
    } else {
        cfg.scale_min
    };
    let (sh, sw) = scaled_size(src_h, src_w, scale);
    let mut offset = |s: usize| {
        if s >= crop {
            rng.gen_range(0..=(s - crop)) as i64
        } else {
            // centre the padded content at a random position
            -(rng.gen_range(0..=(crop - s)) as i64)
        }
    };
    let crop_y = offset(sh);
    let crop_x = offset(sw);
    Geometry {
        scale,
        crop_y,
        crop_x,
        out_h: crop,
        out_w: crop,
        flip: rng.gen_bool(cfg.flip_prob),
    }
}

/// Resample image (bilinear) and labels (nearest) under `geom`.
///
/// Pixels outside the scaled image are filled with the image mean and `IGNORE`.
pub fn apply_geometry(image: &Image, labels: Option<&LabelMap>, geom: &Geometry) -> (Image, Option<LabelMap>) {
    let (h, w) = (image.height, image.width);
    let (sh, sw) = scaled_size(h, w, geom.scale);
    let (oh, ow) = (geom.out_h, geom.out_w);
    let mean = image.channel_means();
    let mut out = vec![0f32; 3 * oh * ow];
    // half-pixel source coordinate, clamped, with the two taps and weight
    let taps = |s: i64, n: usize, sn: usize| {
        let f = ((s as f64 + 0.5) * n as f64 / sn as f64 - 0.5).clamp(0.0, (n - 1) as f64);
        let i0 = f.floor() as usize;
        let i1 = (i0 + 1).min(n - 1);
        (i0, i1, (f - i0 as f64) as f32)
    };
    for y in 0..oh {
        for x in 0..ow {
            let (sy, sx) = geom.scaled_position(y, x);
            let inside = sy >= 0 && sx >= 0 && sy < sh as i64 && sx < sw as i64;
            for c in 0..3 {
                let v = if inside {
                    let (y0, y1, fy) = taps(sy, h, sh);
                    let (x0, x1, fx) = taps(sx, w, sw);
                    let p = image.plane(c);
                    let top = p[y0 * w + x0] * (1.0 - fx) + p[y0 * w + x1] * fx;
                    let bot = p[y1 * w + x0] * (1.0 - fx) + p[y1 * w + x1] * fx;
                    top * (1.0 - fy) + bot * fy
                } else {
                    mean[c]
                };
                out[(c * oh + y) * ow + x] = v;
            }
        }
    }
    let img = Image {
        height: oh,
        width: ow,
        data: out,
    };
    let lab = labels.map(|l| {
        let mut m = LabelMap::filled(oh, ow, IGNORE);
        for y in 0..oh {
            for x in 0..ow {
                if let Some((py, px)) = geom.source_pixel(y, x, l.height, l.width) {
                    m.set(y, x, l.get(py, px));
                }
            }
        }
        m
    });
    (img, lab)
}

/// Weak view: random scale, crop and flip.
pub fn weak_augment(
    rng: &mut impl Rng,
    image: &Image,
    labels: Option<&LabelMap>,
    crop: usize,
    cfg: &AugmentConfig,
) -> (Image, Option<LabelMap>, Geometry) {
    let geom = sample_geometry(rng, image.height, image.width, crop, cfg);
    let (img, lab) = apply_geometry(image, labels, &geom);
    (img, lab, geom)
}

/// Photometric parameters of one strong view; factors of 1 are no-ops.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Photometric {
    pub brightness: f32,
    pub contrast: f32,
    pub saturation: f32,
    pub grayscale: bool,
    pub blur: bool,
}

impl Photometric {
    pub const IDENTITY: Photometric = Photometric {
        brightness: 1.0,
        contrast: 1.0,
        saturation: 1.0,
        grayscale: false,
        blur: false,
    };
}

pub fn sample_photometric(rng: &mut impl Rng, cfg: &AugmentConfig) -> Photometric {
    let mut p = Photometric::IDENTITY;
    if cfg.jitter > 0.0 && rng.gen_bool(cfg.jitter_prob) {
        let j = cfg.jitter as f32;
        p.brightness = rng.gen_range(1.0 - j..=1.0 + j);
        p.contrast = rng.gen_range(1.0 - j..=1.0 + j);
        p.saturation = rng.gen_range(1.0 - j..=1.0 + j);
    }
    p.grayscale = rng.gen_bool(cfg.grayscale_prob);
    p.blur = rng.gen_bool(cfg.blur_prob);
    p
}

fn luma(r: f32, g: f32, b: f32) -> f32 {
    0.299 * r + 0.587 * g + 0.114 * b
}

/// Apply jitter, grayscale and blur; geometry is untouched.
pub fn apply_photometric(image: &Image, p: &Photometric) -> Image {
    let hw = image.height * image.width;
    let mut d = image.data.clone();
    if p.brightness != 1.0 {
        d.iter_mut().for_each(|v| *v = (*v * p.brightness).clamp(0.0, 1.0));
    }
    if p.contrast != 1.0 {
        let mean = (0..hw)
            .map(|i| luma(d[i], d[hw + i], d[2 * hw + i]) as f64)
            .sum::<f64>()
            / hw as f64;
        let mean = mean as f32;
        d.iter_mut()
            .for_each(|v| *v = ((*v - mean) * p.contrast + mean).clamp(0.0, 1.0));
    }
    if p.saturation != 1.0 || p.grayscale {
        let s = if p.grayscale { 0.0 } else { p.saturation };
        for i in 0..hw {
            let l = luma(d[i], d[hw + i], d[2 * hw + i]);
            for c in 0..3 {
                let v = &mut d[c * hw + i];
                *v = if p.grayscale {
                    l
                } else {
                    ((*v - l) * s + l).clamp(0.0, 1.0)
                };
            }
        }
    }
    if p.blur {
        d = blur3(&d, image.height, image.width);
    }
    Image {
        height: image.height,
        width: image.width,
        data: d,
    }
}

/// Separable `[1, 2, 1] / 4` Gaussian with replicated borders.
fn blur3(d: &[f32], h: usize, w: usize) -> Vec<f32> {
    let mut tmp = vec![0f32; d.len()];
    let mut out = vec![0f32; d.len()];
    for row in 0..d.len() / w {
        let r = &d[row * w..(row + 1) * w];
        for x in 0..w {
            let l = r[x.saturating_sub(1)];
            let rr = r[(x + 1).min(w - 1)];
            tmp[row * w + x] = 0.25 * l + 0.5 * r[x] + 0.25 * rr;
        }
    }
    for plane in 0..d.len() / (h * w) {
        let p = &tmp[plane * h * w..(plane + 1) * h * w];
        for y in 0..h {
            let (u, dn) = (y.saturating_sub(1), (y + 1).min(h - 1));
            for x in 0..w {
                out[plane * h * w + y * w + x] = 0.25 * p[u * w + x] + 0.5 * p[y * w + x] + 0.25 * p[dn * w + x];
            }
        }
    }
    out
}

pub fn strong_augment(rng: &mut impl Rng, weak: &Image, cfg: &AugmentConfig) -> (Image, Photometric) {
    let p = sample_photometric(rng, cfg);
    (apply_photometric(weak, &p), p)
}

/// Axis-aligned box in output pixels; `[y0, y0+h) x [x0, x0+w)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CutBox {
    pub y0: usize,
    pub x0: usize,
    pub h: usize,
    pub w: usize,
}

impl CutBox {
    pub fn contains(&self, y: usize, x: usize) -> bool {
        y >= self.y0 && y < self.y0 + self.h && x >= self.x0 && x < self.x0 + self.w
    }

    pub fn area(&self) -> usize {
        self.h * self.w
    }
}

/// Which partner was pasted into a sample, and where.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CutMixRecord {
    pub partner: usize,
    pub cut: CutBox,
}

/// Box whose area ratio is uniform in `[area_min, area_max]` with a random aspect.
pub fn sample_box(rng: &mut impl Rng, h: usize, w: usize, area_min: f64, area_max: f64) -> CutBox {
    let ratio = if area_max > area_min {
        rng.gen_range(area_min..=area_max)
    } else {
        area_min
    };
    let aspect: f64 = rng.gen_range(0.5f64..=2.0).max(ratio).min(1.0 / ratio.max(1e-9));
    let bh = ((h as f64 * (ratio * aspect).sqrt()).round() as usize).min(h);
    let bw = ((w as f64 * (ratio / aspect).sqrt()).round() as usize).min(w);
    CutBox {
        y0: rng.gen_range(0..=h - bh),
        x0: rng.gen_range(0..=w - bw),
        h: bh,
        w: bw,
    }
}

/// Paste `cut` of `src` into `dst`; both hold `planes` planes of `h x w`.
pub fn paste<T: Copy>(dst: &mut [T], src: &[T], planes: usize, h: usize, w: usize, cut: &CutBox) {
    for p in 0..planes {
        for y in cut.y0..cut.y0 + cut.h {
            let r = (p * h + y) * w;
            dst[r + cut.x0..r + cut.x0 + cut.w].copy_from_slice(&src[r + cut.x0..r + cut.x0 + cut.w]);
        }
    }
}

/// Sample a partner and box for each sample. Batches of one are left alone.
pub fn sample_cutmix(
    rng: &mut impl Rng,
    batch: usize,
    h: usize,
    w: usize,
    cfg: &AugmentConfig,
) -> Vec<Option<CutMixRecord>> {
    (0..batch)
        .map(|i| {
            if batch < 2 || !rng.gen_bool(cfg.cutmix_prob) {
                return None;
            }
            let mut partner = rng.gen_range(0..batch - 1);
            if partner >= i {
                partner += 1;
            }
            Some(CutMixRecord {
                partner,
                cut: sample_box(rng, h, w, cfg.cutmix_area_min, cfg.cutmix_area_max),
            })
        })
        .collect()
}

/// Apply records to per-sample buffers, always reading partners from the unmixed originals.
pub fn mix<T: Copy>(
    samples: &[Vec<T>],
    records: &[Option<CutMixRecord>],
    planes: usize,
    h: usize,
    w: usize,
) -> Vec<Vec<T>> {
    samples
        .iter()
        .zip(records)
        .map(|(s, r)| {
            let mut out = s.clone();
            if let Some(r) = r {
                paste(&mut out, &samples[r.partner], planes, h, w, &r.cut);
            }
            out
        })
        .collect()
}

/// CutMix a batch of strong views; returns the mixed images and the records.
pub fn cutmix(
    rng: &mut impl Rng,
    views: &[Image],
    cfg: &AugmentConfig,
) -> Result<(Vec<Image>, Vec<Option<CutMixRecord>>)> {
    let Some(first) = views.first() else {
        return Ok((Vec::new(), Vec::new()));
    };
    let (h, w) = (first.height, first.width);
    if views.iter().any(|v| v.height != h || v.width != w) {
        return Err(Error::Data("cutmix needs equally sized views".into()));
    }
    let records = sample_cutmix(rng, views.len(), h, w, cfg);
    let data: Vec<Vec<f32>> = views.iter().map(|v| v.data.clone()).collect();
    let mixed = mix(&data, &records, 3, h, w)
        .into_iter()
        .map(|data| Image {
            height: h,
            width: w,
            data,
        })
        .collect();
    Ok((mixed, records))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random_image(rng: &mut ChaCha8Rng, h: usize, w: usize) -> Image {
        Image::new(h, w, (0..3 * h * w).map(|_| rng.gen_range(0.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn identity_geometry_is_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let img = random_image(&mut rng, 8, 12);
        let lab = LabelMap::new(8, 12, (0..96).map(|i| (i % 3) as u8).collect()).unwrap();
        let (out, l) = apply_geometry(&img, Some(&lab), &Geometry::identity(8, 12));
        assert_eq!(out, img);
        assert_eq!(l.unwrap(), lab);
    }

    #[test]
    fn flip_is_an_involution() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let img = random_image(&mut rng, 5, 7);
        assert_eq!(img.flip_horizontal().flip_horizontal(), img);
        let g = Geometry {
            flip: true,
            ..Geometry::identity(5, 7)
        };
        assert_eq!(apply_geometry(&img, None, &g).0, img.flip_horizontal());
    }

    #[test]
    fn labels_track_content() {
        // a one-hot "label image": channel 0 carries the label value, so image and label must agree
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let cfg = AugmentConfig::default();
        for _ in 0..30 {
            let (h, w) = (16, 16);
            let labels: Vec<u8> = (0..h * w).map(|_| rng.gen_range(0..4)).collect();
            let lab = LabelMap::new(h, w, labels).unwrap();
            let g = sample_geometry(&mut rng, h, w, 16, &cfg);
            let (_, out) = apply_geometry(&Image::filled(h, w, [0.0; 3]), Some(&lab), &g);
            let out = out.unwrap();
            for y in 0..16 {
                for x in 0..16 {
                    let want = g.source_pixel(y, x, h, w).map_or(IGNORE, |(sy, sx)| lab.get(sy, sx));
                    assert_eq!(out.get(y, x), want);
                }
            }
        }
    }

    #[test]
    fn padding_uses_ignore_and_mean() {
        let img = Image::filled(4, 4, [0.2, 0.4, 0.6]);
        let lab = LabelMap::filled(4, 4, 1);
        let g = Geometry {
            crop_y: -2,
            crop_x: -2,
            out_h: 8,
            out_w: 8,
            ..Geometry::identity(4, 4)
        };
        let (out, l) = apply_geometry(&img, Some(&lab), &g);
        let l = l.unwrap();
        assert_eq!(l.get(0, 0), IGNORE);
        assert_eq!(l.get(3, 3), 1);
        assert!((out.get(1, 0, 0) - 0.4).abs() < 1e-6);
    }

    #[test]
    fn zero_magnitude_strong_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let img = random_image(&mut rng, 6, 6);
        let cfg = AugmentConfig {
            jitter: 0.0,
            grayscale_prob: 0.0,
            blur_prob: 0.0,
            ..Default::default()
        };
        for _ in 0..10 {
            assert_eq!(strong_augment(&mut rng, &img, &cfg).0, img);
        }
    }

    #[test]
    fn grayscale_equalizes_channels() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let img = random_image(&mut rng, 6, 6);
        let out = apply_photometric(
            &img,
            &Photometric {
                grayscale: true,
                ..Photometric::IDENTITY
            },
        );
        assert_eq!(out.plane(0), out.plane(1));
        assert_eq!(out.plane(1), out.plane(2));
    }

    #[test]
    fn photometric_keeps_geometry() {
        // a bright stripe stays where it was after any photometric transform
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut img = Image::filled(8, 8, [0.1, 0.1, 0.1]);
        for c in 0..3 {
            for y in 0..8 {
                img.data[(c * 8 + y) * 8 + 5] = 0.9;
            }
        }
        for _ in 0..20 {
            let (s, _) = strong_augment(&mut rng, &img, &AugmentConfig::default());
            for y in 0..8 {
                let row: Vec<f32> = (0..8).map(|x| s.get(0, y, x)).collect();
                let arg = (0..8)
                    .max_by(|&a, &b| row[a].total_cmp(&row[b]).then(b.cmp(&a)))
                    .unwrap();
                assert_eq!(arg, 5);
            }
        }
    }

    #[test]
    fn cutmix_select_semantics() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let cfg = AugmentConfig::default();
        let views: Vec<Image> = (0..3).map(|_| random_image(&mut rng, 10, 10)).collect();
        let labels: Vec<Vec<u8>> = (0..3u8).map(|i| vec![i; 100]).collect();
        let (mixed, rec) = cutmix(&mut rng, &views, &cfg).unwrap();
        let mixed_labels = mix(&labels, &rec, 1, 10, 10);
        for (i, r) in rec.iter().enumerate() {
            let r = r.unwrap();
            assert_ne!(r.partner, i);
            let ratio = r.cut.area() as f64 / 100.0;
            assert!((0.1..=0.6).contains(&ratio), "{ratio}");
            for y in 0..10 {
                for x in 0..10 {
                    let src = if r.cut.contains(y, x) { r.partner } else { i };
                    assert_eq!(mixed_labels[i][y * 10 + x], src as u8);
                    for c in 0..3 {
                        assert_eq!(mixed[i].get(c, y, x), views[src].get(c, y, x));
                    }
                }
            }
        }
    }

    #[test]
    fn cutmix_degenerate_boxes() {
        let a = vec![1u8; 16];
        let b = vec![2u8; 16];
        let full = CutMixRecord {
            partner: 1,
            cut: CutBox {
                y0: 0,
                x0: 0,
                h: 4,
                w: 4,
            },
        };
        let empty = CutMixRecord {
            partner: 0,
            cut: CutBox {
                y0: 2,
                x0: 2,
                h: 0,
                w: 0,
            },
        };
        let out = mix(&[a.clone(), b.clone()], &[Some(full), Some(empty)], 1, 4, 4);
        assert_eq!(out, vec![b, vec![2u8; 16]]);
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let one = vec![Image::filled(4, 4, [0.5; 3])];
        let (m, r) = cutmix(&mut rng, &one, &AugmentConfig::default()).unwrap();
        assert_eq!(m, one);
        assert_eq!(r, vec![None]);
    }
}
