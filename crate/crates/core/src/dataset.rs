//! Synthetic scenes, labeled/unlabeled splits and PPM/PGM persistence.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::augment::Image;
use crate::boundary_gt::{LabelMap, IGNORE};
use crate::error::{Error, Result};

pub const MANIFEST_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SceneConfig {
    /// square image side in pixels
    pub size: usize,
    /// background plus shape classes
    pub num_classes: usize,
    pub min_shapes: usize,
    pub max_shapes: usize,
    /// standard deviation of per-pixel Gaussian noise, in `[0, 1]` intensity units
    pub noise: f64,
    /// per-shape uniform color offset around the class color
    pub color_jitter: f64,
    pub seed: u64,
}

impl Default for SceneConfig {
    fn default() -> Self {
        Self {
            size: 64,
            num_classes: 5,
            min_shapes: 2,
            max_shapes: 5,
            noise: 0.08,
            color_jitter: 0.15,
            seed: 0,
        }
    }
}

impl SceneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 2 || self.num_classes > IGNORE as usize {
            return Err(Error::Config(format!(
                "num_classes must be in 2..=254, got {}",
                self.num_classes
            )));
        }
        if self.size == 0 || !self.size.is_multiple_of(16) {
            return Err(Error::Config(format!(
                "image size must be a positive multiple of 16, got {}",
                self.size
            )));
        }
        if self.min_shapes > self.max_shapes {
            return Err(Error::Config("min_shapes exceeds max_shapes".into()));
        }
        if !(self.noise >= 0.0 && self.color_jitter >= 0.0) {
            return Err(Error::Config("noise and color_jitter must be non-negative".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Shape {
    Circle { cy: f64, cx: f64, r: f64 },
    Rect { y0: f64, x0: f64, y1: f64, x1: f64 },
    Triangle { pts: [(f64, f64); 3] },
}

impl Shape {
    /// Whether the centre of pixel `(y, x)` lies inside.
    pub fn contains(&self, y: usize, x: usize) -> bool {
        let (py, px) = (y as f64 + 0.5, x as f64 + 0.5);
        match *self {
            Shape::Circle { cy, cx, r } => (py - cy).powi(2) + (px - cx).powi(2) <= r * r,
            Shape::Rect { y0, x0, y1, x1 } => py >= y0 && py < y1 && px >= x0 && px < x1,
            Shape::Triangle { pts } => {
                let side = |a: (f64, f64), b: (f64, f64)| (b.1 - a.1) * (py - a.0) - (b.0 - a.0) * (px - a.1);
                let d = [side(pts[0], pts[1]), side(pts[1], pts[2]), side(pts[2], pts[0])];
                d.iter().all(|&v| v >= 0.0) || d.iter().all(|&v| v <= 0.0)
            }
        }
    }
}

/// One generated image with its exact labels.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Scene {
    /// interleaved RGB bytes, row-major
    pub rgb: Vec<u8>,
    pub labels: LabelMap,
}

impl Scene {
    pub fn height(&self) -> usize {
        self.labels.height
    }

    pub fn width(&self) -> usize {
        self.labels.width
    }

    /// Planar float copy in `[0, 1]`.
    pub fn image(&self) -> Image {
        let hw = self.height() * self.width();
        let data = (0..3 * hw)
            .map(|i| self.rgb[(i % hw) * 3 + i / hw] as f32 / 255.0)
            .collect();
        Image {
            height: self.height(),
            width: self.width(),
            data,
        }
    }
}

/// Reference color of a class; background is a muted gray-green.
pub fn class_color(class: usize, num_classes: usize) -> [f64; 3] {
    if class == 0 {
        return [0.45, 0.5, 0.42];
    }
    let hue = (class - 1) as f64 / (num_classes - 1) as f64;
    let ch = |offset: f64| 0.5 + 0.35 * (2.0 * std::f64::consts::PI * (hue + offset)).cos();
    [ch(0.0), ch(1.0 / 3.0), ch(2.0 / 3.0)]
}

/// Paint shapes of random classes onto a textured background.
pub fn render_scene(cfg: &SceneConfig, shapes: &[(Shape, u8, [f64; 3])], rng: &mut impl Rng) -> Scene {
    let n = cfg.size;
    let mut labels = LabelMap::filled(n, n, 0);
    let bg = class_color(0, cfg.num_classes);
    let (fy, fx, phase) = (
        rng.gen_range(0.05..0.3),
        rng.gen_range(0.05..0.3),
        rng.gen_range(0.0..6.3),
    );
    let mut color = vec![[0f64; 3]; n * n];
    for y in 0..n {
        for x in 0..n {
            let t = 0.08 * (fy * y as f64 + fx * x as f64 + phase).sin();
            color[y * n + x] = [bg[0] + t, bg[1] + t, bg[2] + t];
        }
    }
    for (shape, class, c) in shapes {
        for y in 0..n {
            for x in 0..n {
                if shape.contains(y, x) {
                    labels.set(y, x, *class);
                    color[y * n + x] = *c;
                }
            }
        }
    }
    let normal = (cfg.noise > 0.0).then(|| Normal::new(0.0, cfg.noise).expect("finite noise"));
    let mut rgb = Vec::with_capacity(3 * n * n);
    for px in &color {
        for &v in px {
            let e = normal.as_ref().map_or(0.0, |d| d.sample(rng));
            rgb.push(((v + e).clamp(0.0, 1.0) * 255.0).round() as u8);
        }
    }
    Scene { rgb, labels }
}

fn random_shape(rng: &mut impl Rng, n: f64) -> Shape {
    let r = rng.gen_range(n / 10.0..n / 4.0);
    let (cy, cx) = (rng.gen_range(0.0..n), rng.gen_range(0.0..n));
    match rng.gen_range(0..3) {
        0 => Shape::Circle { cy, cx, r },
        1 => {
            let (hh, hw) = (r * rng.gen_range(0.5..1.2), r * rng.gen_range(0.5..1.2));
            Shape::Rect {
                y0: cy - hh,
                x0: cx - hw,
                y1: cy + hh,
                x1: cx + hw,
            }
        }
        _ => {
            let a0 = rng.gen_range(0.0..std::f64::consts::TAU);
            let pts = [0.0, 2.1, 4.2].map(|d: f64| {
                let a = a0 + d + rng.gen_range(-0.3..0.3);
                (cy + 1.3 * r * a.sin(), cx + 1.3 * r * a.cos())
            });
            Shape::Triangle { pts }
        }
    }
}

/// Scene `index` of the dataset seeded by `cfg.seed`; each index has its own stream.
pub fn generate_scene(cfg: &SceneConfig, index: u64) -> Scene {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(index);
    let count = rng.gen_range(cfg.min_shapes..=cfg.max_shapes);
    let shapes: Vec<_> = (0..count)
        .map(|_| {
            let shape = random_shape(&mut rng, cfg.size as f64);
            let class = rng.gen_range(1..cfg.num_classes) as u8;
            let base = class_color(class as usize, cfg.num_classes);
            let j = cfg.color_jitter;
            let c = base.map(|v| if j > 0.0 { v + rng.gen_range(-j..=j) } else { v });
            (shape, class, c)
        })
        .collect();
    render_scene(cfg, &shapes, &mut rng)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SplitKind {
    Train,
    Val,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub image: String,
    pub label: String,
    pub split: SplitKind,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub version: u32,
    pub num_classes: usize,
    pub size: usize,
    pub seed: u64,
    pub scene: SceneConfig,
    pub files: Vec<ManifestEntry>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub scene: SceneConfig,
    pub train: Vec<Scene>,
    pub val: Vec<Scene>,
}

impl Dataset {
    pub fn generate(cfg: &SceneConfig, n_train: usize, n_val: usize) -> Result<Self> {
        cfg.validate()?;
        let train = (0..n_train as u64).map(|i| generate_scene(cfg, i)).collect();
        let val = (0..n_val as u64)
            .map(|i| generate_scene(cfg, n_train as u64 + i))
            .collect();
        Ok(Self {
            scene: cfg.clone(),
            train,
            val,
        })
    }

    pub fn num_classes(&self) -> usize {
        self.scene.num_classes
    }

    pub fn manifest(&self) -> Manifest {
        let entry = |i: usize, split| ManifestEntry {
            image: format!("images/{i:04}.ppm"),
            label: format!("labels/{i:04}.pgm"),
            split,
        };
        let nt = self.train.len();
        let files = (0..nt)
            .map(|i| entry(i, SplitKind::Train))
            .chain((0..self.val.len()).map(|i| entry(nt + i, SplitKind::Val)))
            .collect();
        Manifest {
            version: MANIFEST_VERSION,
            num_classes: self.scene.num_classes,
            size: self.scene.size,
            seed: self.scene.seed,
            scene: self.scene.clone(),
            files,
        }
    }

    /// Write `images/NNNN.ppm`, `labels/NNNN.pgm` and `manifest.json` under `dir`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        for sub in ["images", "labels"] {
            let p = dir.join(sub);
            fs::create_dir_all(&p).map_err(|e| Error::io(&p, e))?;
        }
        let manifest = self.manifest();
        for (scene, entry) in self.train.iter().chain(&self.val).zip(&manifest.files) {
            let (h, w) = (scene.height(), scene.width());
            write_file(&dir.join(&entry.image), &encode_pnm(b"P6", w, h, &scene.rgb))?;
            write_file(&dir.join(&entry.label), &encode_pnm(b"P5", w, h, &scene.labels.labels))?;
        }
        let json = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
        write_file(&dir.join("manifest.json"), json.as_bytes())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let mpath = dir.join("manifest.json");
        let text = fs::read_to_string(&mpath).map_err(|e| Error::io(&mpath, e))?;
        let manifest: Manifest = serde_json::from_str(&text).map_err(|e| Error::Json {
            path: mpath.clone(),
            source: e,
        })?;
        if manifest.version != MANIFEST_VERSION {
            return Err(Error::Data(format!(
                "{}: manifest version {} is not supported",
                mpath.display(),
                manifest.version
            )));
        }
        let (mut train, mut val) = (Vec::new(), Vec::new());
        for entry in &manifest.files {
            let ip = dir.join(&entry.image);
            let lp = dir.join(&entry.label);
            let (w, h, rgb) = read_pnm(&ip, b"P6")?;
            let (lw, lh, labels) = read_pnm(&lp, b"P5")?;
            if (w, h) != (lw, lh) || w != manifest.size || h != manifest.size {
                return Err(Error::Data(format!(
                    "{}: image {w}x{h} and labels {lw}x{lh} disagree with size {}",
                    ip.display(),
                    manifest.size
                )));
            }
            let labels = LabelMap::new(h, w, labels)?;
            labels
                .validate(manifest.num_classes)
                .map_err(|e| Error::Data(format!("{}: {e}", lp.display())))?;
            let scene = Scene { rgb, labels };
            match entry.split {
                SplitKind::Train => train.push(scene),
                SplitKind::Val => val.push(scene),
            }
        }
        Ok(Self {
            scene: manifest.scene,
            train,
            val,
        })
    }
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(bytes).map_err(|e| Error::io(path, e))
}

/// Binary PNM with maxval 255.
pub fn encode_pnm(magic: &[u8; 2], width: usize, height: usize, payload: &[u8]) -> Vec<u8> {
    let mut out = format!(
        "{}\n{width} {height}\n255\n",
        std::str::from_utf8(magic).expect("ascii magic")
    )
    .into_bytes();
    out.extend_from_slice(payload);
    out
}

pub fn read_pnm(path: &Path, magic: &[u8; 2]) -> Result<(usize, usize, Vec<u8>)> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    parse_pnm(&bytes, magic, path)
}

/// Parse a binary P5/P6 file; errors report the byte offset of the problem.
pub fn parse_pnm(bytes: &[u8], magic: &[u8; 2], path: &Path) -> Result<(usize, usize, Vec<u8>)> {
    let err = |offset: usize, msg: String| Error::Parse {
        path: PathBuf::from(path),
        offset: offset as u64,
        msg,
    };
    if bytes.len() < 2 || &bytes[..2] != magic {
        return Err(err(0, format!("expected magic {}", String::from_utf8_lossy(magic))));
    }
    let mut pos = 2;
    let field = |pos: &mut usize, name: &str| -> Result<(usize, usize)> {
        loop {
            match bytes.get(*pos) {
                Some(b) if b.is_ascii_whitespace() => *pos += 1,
                Some(b'#') => {
                    while bytes.get(*pos).is_some_and(|&b| b != b'\n') {
                        *pos += 1;
                    }
                }
                _ => break,
            }
        }
        let start = *pos;
        while bytes.get(*pos).is_some_and(u8::is_ascii_digit) {
            *pos += 1;
        }
        if start == *pos {
            return Err(err(start, format!("expected {name}")));
        }
        std::str::from_utf8(&bytes[start..*pos])
            .expect("digits")
            .parse()
            .map(|v| (start, v))
            .map_err(|_| err(start, format!("{name} out of range")))
    };
    let (_, width) = field(&mut pos, "width")?;
    let (_, height) = field(&mut pos, "height")?;
    let (maxval_at, maxval) = field(&mut pos, "maxval")?;
    if maxval != 255 {
        return Err(err(maxval_at, format!("maxval {maxval} unsupported (need 255)")));
    }
    match bytes.get(pos) {
        Some(b) if b.is_ascii_whitespace() => pos += 1,
        _ => return Err(err(pos, "expected whitespace before pixel data".into())),
    }
    let channels = if magic == b"P6" { 3 } else { 1 };
    let need = width * height * channels;
    let payload = &bytes[pos..];
    if payload.len() < need {
        return Err(err(
            bytes.len(),
            format!("truncated pixel data: need {need} bytes, found {}", payload.len()),
        ));
    }
    if payload.len() > need {
        return Err(err(pos + need, "trailing bytes after pixel data".into()));
    }
    Ok((width, height, payload.to_vec()))
}

/// Train-set partition; validation is the separate held-out set.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetSplit {
    pub labeled: Vec<usize>,
    pub unlabeled: Vec<usize>,
    pub validation: Vec<usize>,
    pub fraction: f64,
}

/// `floor(n_train * fraction)` labeled images chosen by a seeded shuffle.
pub fn make_split(n_train: usize, n_val: usize, fraction: f64, seed: u64) -> Result<DatasetSplit> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::Config(format!(
            "label fraction must be in (0, 1], got {fraction}"
        )));
    }
    let k = (n_train as f64 * fraction).floor() as usize;
    if k == 0 {
        return Err(Error::Config(format!(
            "label fraction {fraction} of {n_train} images leaves no labeled image"
        )));
    }
    let mut order: Vec<usize> = (0..n_train).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut labeled = order[..k].to_vec();
    let mut unlabeled = order[k..].to_vec();
    labeled.sort_unstable();
    unlabeled.sort_unstable();
    Ok(DatasetSplit {
        labeled,
        unlabeled,
        validation: (0..n_val).collect(),
        fraction,
    })
}

/// Parse `1/8`, `0.125` and friends.
pub fn parse_fraction(s: &str) -> Result<f64> {
    let bad = || Error::Config(format!("cannot parse label fraction '{s}'"));
    let v = match s.split_once('/') {
        Some((a, b)) => {
            let a: f64 = a.trim().parse().map_err(|_| bad())?;
            let b: f64 = b.trim().parse().map_err(|_| bad())?;
            a / b
        }
        None => s.trim().parse().map_err(|_| bad())?,
    };
    if !(v > 0.0 && v <= 1.0) {
        return Err(Error::Config(format!("label fraction must be in (0, 1], got {s}")));
    }
    Ok(v)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rectangle_scene_is_exact() {
        let cfg = SceneConfig {
            size: 16,
            noise: 0.0,
            ..Default::default()
        };
        let rect = Shape::Rect {
            y0: 4.0,
            x0: 2.0,
            y1: 9.0,
            x1: 12.0,
        };
        let s = render_scene(&cfg, &[(rect, 1, class_color(1, 5))], &mut ChaCha8Rng::seed_from_u64(0));
        for y in 0..16 {
            for x in 0..16 {
                let inside = (4..9).contains(&y) && (2..12).contains(&x);
                assert_eq!(s.labels.get(y, x), inside as u8);
            }
        }
    }

    #[test]
    fn occlusion_order() {
        let cfg = SceneConfig {
            size: 16,
            noise: 0.0,
            ..Default::default()
        };
        let a = Shape::Circle {
            cy: 8.0,
            cx: 8.0,
            r: 6.0,
        };
        let b = Shape::Rect {
            y0: 6.0,
            x0: 6.0,
            y1: 10.0,
            x1: 10.0,
        };
        let s = render_scene(
            &cfg,
            &[(a, 1, [0.0; 3]), (b, 2, [1.0; 3])],
            &mut ChaCha8Rng::seed_from_u64(0),
        );
        assert_eq!(s.labels.get(7, 7), 2);
        assert_eq!(s.labels.get(4, 8), 1);
        assert_eq!(&s.rgb[(7 * 16 + 7) * 3..][..3], &[255, 255, 255]);
    }

    #[test]
    fn scenes_are_deterministic_and_valid() {
        let cfg = SceneConfig::default();
        for i in 0..20 {
            let a = generate_scene(&cfg, i);
            assert_eq!(a, generate_scene(&cfg, i));
            a.labels.validate(cfg.num_classes).unwrap();
            assert_eq!(a.rgb.len(), 3 * 64 * 64);
        }
        assert_ne!(generate_scene(&cfg, 0), generate_scene(&cfg, 1));
    }

    #[test]
    fn triangle_contains_its_centroid() {
        let t = Shape::Triangle {
            pts: [(2.0, 2.0), (2.0, 12.0), (12.0, 7.0)],
        };
        assert!(t.contains(5, 6));
        assert!(!t.contains(0, 0));
        assert!(!t.contains(13, 13));
    }

    #[test]
    fn split_arithmetic() {
        let s = make_split(320, 64, 1.0 / 8.0, 3).unwrap();
        assert_eq!((s.labeled.len(), s.unlabeled.len(), s.validation.len()), (40, 280, 64));
        assert_eq!(s, make_split(320, 64, 0.125, 3).unwrap());
        assert_ne!(s.labeled, make_split(320, 64, 0.125, 4).unwrap().labeled);
        let mut all: Vec<usize> = s.labeled.iter().chain(&s.unlabeled).copied().collect();
        all.sort_unstable();
        assert_eq!(all, (0..320).collect::<Vec<_>>());
        let full = make_split(10, 0, 1.0, 0).unwrap();
        assert!(full.unlabeled.is_empty() && full.labeled.len() == 10);
        assert!(make_split(4, 0, 0.1, 0).is_err());
    }

    #[test]
    fn fraction_parsing() {
        assert_eq!(parse_fraction("1/8").unwrap(), 0.125);
        assert_eq!(parse_fraction("0.25").unwrap(), 0.25);
        assert!(parse_fraction("3/2").is_err());
        assert!(parse_fraction("x").is_err());
    }

    #[test]
    fn pnm_errors_carry_offsets() {
        let p = Path::new("t.pgm");
        let good = encode_pnm(b"P5", 2, 2, &[0, 1, 2, 3]);
        assert_eq!(parse_pnm(&good, b"P5", p).unwrap(), (2, 2, vec![0, 1, 2, 3]));
        let with_comment = b"P5\n# hi\n2 1\n255\n\x01\x02";
        assert_eq!(parse_pnm(with_comment, b"P5", p).unwrap().2, vec![1, 2]);

        let offset = |bytes: &[u8]| match parse_pnm(bytes, b"P5", p) {
            Err(Error::Parse { offset, .. }) => offset,
            other => panic!("{other:?}"),
        };
        assert_eq!(offset(b"P6\n2 2\n255\n"), 0);
        assert_eq!(offset(b"P5\nx 2\n255\n"), 3);
        assert_eq!(offset(b"P5\n2 2\n65535\n"), 7);
        assert_eq!(offset(&good[..good.len() - 1]), good.len() as u64 - 1);
    }
}
