//! Slow, direct reference implementations used to cross-check the fast paths.
//!
//! Nothing here shares code with the production kernels: convolution is a
//! direct sum, bilinear resize weighs every source pixel with a tent function,
//! boundaries compare all pixel pairs and the band metrics scan full windows.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::boundary_gt::{semantic_boundaries, LabelMap, IGNORE};
use crate::error::Result;
use crate::metrics;
use crate::tensor::{ConvSpec, Tensor};

/// Direct-sum grouped cross-correlation.
pub fn conv2d_direct(x: &Tensor<f64>, w: &Tensor<f64>, b: Option<&Tensor<f64>>, spec: ConvSpec) -> Tensor<f64> {
    let (n, c, h, wd) = x.dims4().unwrap();
    let (o, cg, k, _) = w.dims4().unwrap();
    let og = o / spec.groups;
    let oh = (h + 2 * spec.padding - k) / spec.stride + 1;
    let ow = (wd + 2 * spec.padding - k) / spec.stride + 1;
    let mut out = Tensor::zeros(&[n, o, oh, ow]);
    for ni in 0..n {
        for oi in 0..o {
            let grp = oi / og;
            for y in 0..oh {
                for xx in 0..ow {
                    let mut acc = b.map_or(0.0, |b| b.data()[oi]);
                    for ci in 0..cg {
                        let cin = grp * cg + ci;
                        for ky in 0..k {
                            for kx in 0..k {
                                let iy = (y * spec.stride + ky) as isize - spec.padding as isize;
                                let ix = (xx * spec.stride + kx) as isize - spec.padding as isize;
                                if iy < 0 || ix < 0 || iy >= h as isize || ix >= wd as isize {
                                    continue;
                                }
                                let xv = x.data()[((ni * c + cin) * h + iy as usize) * wd + ix as usize];
                                let wv = w.data()[((oi * cg + ci) * k + ky) * k + kx];
                                acc += xv * wv;
                            }
                        }
                    }
                    out.data_mut()[((ni * o + oi) * oh + y) * ow + xx] = acc;
                }
            }
        }
    }
    out
}

/// Bilinear resize (half-pixel centres, edge clamped) via tent weights over all source pixels.
pub fn bilinear_direct(x: &Tensor<f64>, out_h: usize, out_w: usize) -> Tensor<f64> {
    let (n, c, h, w) = x.dims4().unwrap();
    let src = |d: usize, inn: usize, out: usize| {
        let s = (d as f64 + 0.5) * inn as f64 / out as f64 - 0.5;
        s.clamp(0.0, (inn - 1) as f64)
    };
    let tent = |a: f64, b: f64| (1.0 - (a - b).abs()).max(0.0);
    let mut out = Tensor::zeros(&[n, c, out_h, out_w]);
    for p in 0..n * c {
        for oy in 0..out_h {
            let sy = src(oy, h, out_h);
            for ox in 0..out_w {
                let sx = src(ox, w, out_w);
                let mut acc = 0.0;
                for iy in 0..h {
                    for ix in 0..w {
                        acc += tent(sy, iy as f64) * tent(sx, ix as f64) * x.data()[(p * h + iy) * w + ix];
                    }
                }
                out.data_mut()[(p * out_h + oy) * out_w + ox] = acc;
            }
        }
    }
    out
}

/// 3×3 mean over in-bounds neighbours.
pub fn avg_pool3_direct(x: &Tensor<f64>) -> Tensor<f64> {
    let (n, c, h, w) = x.dims4().unwrap();
    let mut out = Tensor::zeros(&[n, c, h, w]);
    for p in 0..n * c {
        for y in 0..h as isize {
            for xx in 0..w as isize {
                let (mut s, mut cnt) = (0.0, 0.0);
                for dy in -1..=1 {
                    for dx in -1..=1 {
                        let (yy, xn) = (y + dy, xx + dx);
                        if yy >= 0 && xn >= 0 && yy < h as isize && xn < w as isize {
                            s += x.data()[(p * h + yy as usize) * w + xn as usize];
                            cnt += 1.0;
                        }
                    }
                }
                out.data_mut()[(p * h + y as usize) * w + xx as usize] = s / cnt;
            }
        }
    }
    out
}

/// Per-class boundary masks by comparing every pair of pixels.
pub fn boundaries_brute_force(labels: &LabelMap, num_classes: usize, radius: usize) -> Vec<u8> {
    let (h, w) = (labels.height, labels.width);
    let mut out = vec![0u8; num_classes * h * w];
    for y in 0..h {
        for x in 0..w {
            let l = labels.get(y, x);
            if l == IGNORE {
                continue;
            }
            let near_other = (0..h).any(|yy| {
                (0..w).any(|xx| {
                    let m = labels.get(yy, xx);
                    let d2 = (yy as isize - y as isize).pow(2) + (xx as isize - x as isize).pow(2);
                    m != IGNORE && m != l && d2 as usize <= radius * radius
                })
            });
            if near_other {
                out[(l as usize * h + y) * w + x] = 1;
            }
        }
    }
    out
}

/// IoU per class by counting pixels directly.
pub fn iou_counting(pred: &[LabelMap], gt: &[LabelMap], num_classes: usize) -> Vec<Option<f64>> {
    (0..num_classes as u8)
        .map(|c| {
            let (mut i, mut u) = (0u64, 0u64);
            for (p, g) in pred.iter().zip(gt) {
                for (&a, &b) in p.labels.iter().zip(&g.labels) {
                    if b == IGNORE {
                        continue;
                    }
                    i += (a == c && b == c) as u64;
                    u += (a == c || b == c) as u64;
                }
            }
            (u > 0).then(|| i as f64 / u as f64)
        })
        .collect()
}

fn window_all(mask: &[u8], h: usize, w: usize, y: usize, x: usize, r: isize, out_of_bounds: bool) -> bool {
    (-r..=r).all(|dy| {
        (-r..=r).all(|dx| {
            let (yy, xx) = (y as isize + dy, x as isize + dx);
            if yy < 0 || xx < 0 || yy >= h as isize || xx >= w as isize {
                out_of_bounds
            } else {
                mask[yy as usize * w + xx as usize] == 1
            }
        })
    })
}

fn window_any(mask: &[u8], h: usize, w: usize, y: usize, x: usize, r: isize) -> bool {
    (-r..=r).any(|dy| {
        (-r..=r).any(|dx| {
            let (yy, xx) = (y as isize + dy, x as isize + dx);
            yy >= 0 && xx >= 0 && yy < (h as isize) && xx < (w as isize) && mask[yy as usize * w + xx as usize] == 1
        })
    })
}

/// Mask pixels with a background pixel inside their k×k window.
pub fn band_brute_force(mask: &[u8], h: usize, w: usize, k: usize) -> Vec<u8> {
    let r = (k / 2) as isize;
    (0..h * w)
        .map(|i| (mask[i] == 1 && !window_all(mask, h, w, i / w, i % w, r, true)) as u8)
        .collect()
}

fn one_hot(p: &LabelMap, g: &LabelMap, c: u8) -> (Vec<u8>, Vec<u8>) {
    let pm = p
        .labels
        .iter()
        .zip(&g.labels)
        .map(|(&a, &b)| (b != IGNORE && a == c) as u8)
        .collect();
    let gm = g.labels.iter().map(|&b| (b == c) as u8).collect();
    (pm, gm)
}

pub fn biou_brute_force(pred: &[LabelMap], gt: &[LabelMap], num_classes: usize, k: usize) -> Vec<Option<f64>> {
    (0..num_classes as u8)
        .map(|c| {
            let (mut i, mut u, mut band_n) = (0u64, 0u64, 0u64);
            for (p, g) in pred.iter().zip(gt) {
                let (h, w) = (g.height, g.width);
                let (pm, gm) = one_hot(p, g, c);
                let band = band_brute_force(&gm, h, w, k);
                for j in 0..h * w {
                    if band[j] == 1 {
                        band_n += 1;
                        i += (pm[j] == 1 && gm[j] == 1) as u64;
                        u += (pm[j] == 1 || gm[j] == 1) as u64;
                    }
                }
            }
            (band_n > 0).then(|| i as f64 / u as f64)
        })
        .collect()
}

pub fn bf1_brute_force(pred: &[LabelMap], gt: &[LabelMap], num_classes: usize, k: usize) -> Vec<Option<f64>> {
    let r = (k / 2) as isize;
    (0..num_classes as u8)
        .map(|c| {
            let (mut pm_n, mut pt, mut gm_n, mut gtot) = (0u64, 0u64, 0u64, 0u64);
            for (p, g) in pred.iter().zip(gt) {
                let (h, w) = (g.height, g.width);
                let (pm, gm) = one_hot(p, g, c);
                let pb = band_brute_force(&pm, h, w, k);
                let gb = band_brute_force(&gm, h, w, k);
                for j in 0..h * w {
                    if pb[j] == 1 {
                        pt += 1;
                        pm_n += window_any(&gb, h, w, j / w, j % w, r) as u64;
                    }
                    if gb[j] == 1 {
                        gtot += 1;
                        gm_n += window_any(&pb, h, w, j / w, j % w, r) as u64;
                    }
                }
            }
            if pt == 0 && gtot == 0 {
                return None;
            }
            let prec = if pt == 0 { 0.0 } else { pm_n as f64 / pt as f64 };
            let rec = if gtot == 0 { 0.0 } else { gm_n as f64 / gtot as f64 };
            Some(if prec + rec > 0.0 {
                2.0 * prec * rec / (prec + rec)
            } else {
                0.0
            })
        })
        .collect()
}

/// Per-pixel cross-entropy loop; `mask = None` averages over non-ignore pixels,
/// `Some(mask)` sums masked pixels and divides by the full pixel count.
pub fn cross_entropy_loop(logits: &Tensor<f64>, labels: &[u8], mask: Option<&[bool]>) -> f64 {
    let (n, c, h, w) = logits.dims4().unwrap();
    let (mut total, mut count) = (0.0, 0usize);
    for b in 0..n {
        for y in 0..h {
            for x in 0..w {
                let i = (b * h + y) * w + x;
                if labels[i] == IGNORE || mask.is_some_and(|m| !m[i]) {
                    continue;
                }
                let at = |ch: usize| logits.data()[((b * c + ch) * h + y) * w + x];
                let z: f64 = (0..c).map(|ch| at(ch).exp()).sum();
                total += -(at(labels[i] as usize).exp() / z).ln();
                count += 1;
            }
        }
    }
    match mask {
        Some(_) => total / (n * h * w) as f64,
        None if count == 0 => 0.0,
        None => total / count as f64,
    }
}

/// Class-balanced BCE written out per plane and pixel.
pub fn bce_reweighted_loop(q: &Tensor<f64>, z: &Tensor<f64>) -> f64 {
    let (n, c, h, w) = q.dims4().unwrap();
    let mut total = 0.0;
    for plane in 0..n * c {
        let zs = &z.data()[plane * h * w..(plane + 1) * h * w];
        let qs = &q.data()[plane * h * w..(plane + 1) * h * w];
        let beta = zs.iter().sum::<f64>() / (h * w) as f64;
        for (&zi, &qi) in zs.iter().zip(qs) {
            let qi = qi.clamp(1e-6, 1.0 - 1e-6);
            total += beta * (1.0 - zi) * (1.0 - qi).ln() + (1.0 - beta) * zi * qi.ln();
        }
    }
    -total / (n * c * h * w) as f64
}

pub fn mean_abs_diff(a: &Tensor<f64>, b: &Tensor<f64>) -> f64 {
    a.data().iter().zip(b.data()).map(|(x, y)| (x - y).abs()).sum::<f64>() / a.numel() as f64
}

/// Outcome of comparing one fast routine with its brute-force counterpart.
#[derive(Clone, Debug, Serialize)]
pub struct OracleCheck {
    pub name: String,
    pub cases: usize,
    pub mismatches: usize,
}

#[derive(Clone, Debug, Serialize)]
pub struct OracleReport {
    pub k: usize,
    pub checks: Vec<OracleCheck>,
}

impl OracleReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.mismatches == 0)
    }

    pub fn table(&self) -> String {
        let mut s = format!("{:<24} {:>6} {:>10}  status\n", "oracle", "cases", "mismatch");
        for c in &self.checks {
            let status = if c.mismatches == 0 { "ok" } else { "FAIL" };
            s.push_str(&format!(
                "{:<24} {:>6} {:>10}  {status}\n",
                c.name, c.cases, c.mismatches
            ));
        }
        s
    }
}

fn random_map(rng: &mut impl Rng, h: usize, w: usize, c: u8) -> LabelMap {
    let bs = rng.gen_range(1..4);
    let cells: Vec<u8> = (0..h * w).map(|_| rng.gen_range(0..c)).collect();
    let mut labels: Vec<u8> = (0..h * w).map(|i| cells[(i / w / bs) * w + (i % w) / bs]).collect();
    if rng.gen_bool(0.2) {
        let i = rng.gen_range(0..h * w);
        labels[i] = IGNORE;
    }
    LabelMap::new(h, w, labels).expect("sizes agree")
}

/// Exact comparison of mIoU, BIoU, BF1 and boundary generation against the
/// brute-force routines on `cases` random maps of at most 12×12 with C ≤ 3.
pub fn run_oracle_suite(cases: usize, k: usize, seed: u64) -> Result<OracleReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut bad = [0usize; 4];
    for _ in 0..cases {
        let (h, w) = (rng.gen_range(1..=12), rng.gen_range(1..=12));
        let c = rng.gen_range(2..=3u8);
        let p = random_map(&mut rng, h, w, c);
        let g = random_map(&mut rng, h, w, c);
        let (ps, gs) = (std::slice::from_ref(&p), std::slice::from_ref(&g));
        let n = c as usize;
        bad[0] += (metrics::miou(ps, gs, n, IGNORE)?.per_class != iou_counting(ps, gs, n)) as usize;
        bad[1] += (metrics::boundary_iou(ps, gs, n, k)?.per_class != biou_brute_force(ps, gs, n, k)) as usize;
        bad[2] += (metrics::boundary_f1(ps, gs, n, k)?.per_class != bf1_brute_force(ps, gs, n, k)) as usize;
        let radius = rng.gen_range(1..=3);
        bad[3] += (semantic_boundaries(&g, n, radius)?.data != boundaries_brute_force(&g, n, radius)) as usize;
    }
    let names = ["miou", "boundary_iou", "boundary_f1", "semantic_boundaries"];
    Ok(OracleReport {
        k,
        checks: names
            .iter()
            .zip(bad)
            .map(|(name, mismatches)| OracleCheck {
                name: name.to_string(),
                cases,
                mismatches,
            })
            .collect(),
    })
}
