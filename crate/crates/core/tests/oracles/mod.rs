//! Brute-force reference implementations shared by the integration and
//! acceptance suites. Each one is written directly from the contract, with no
//! calls into the library's own algorithms.
#![allow(dead_code)]

use std::collections::BTreeMap;
use std::f64::consts::PI;

use rand::Rng;
use rangesam::kitti::{PointCloud, IGNORE};
use rangesam::projection::{ElevationConvention, ProjectionConfig};

/// Pixel `(u, v)` from the projection formula, clamped into the raster.
pub fn project(p: [f32; 3], cfg: &ProjectionConfig) -> (usize, usize) {
    let (x, y, z) = (p[0] as f64, p[1] as f64, p[2] as f64);
    let r = (x * x + y * y + z * z).sqrt();
    let theta = y.atan2(x);
    let phi = (z / r).clamp(-1.0, 1.0).asin();
    let offset = match cfg.convention {
        ElevationConvention::Published => cfg.fov_up,
        ElevationConvention::SensorFov => cfg.fov_down,
    };
    let fov = cfg.fov_up + cfg.fov_down;
    let (w, h) = (cfg.width as f64, cfg.height as f64);
    let u = (0.5 * (1.0 - theta / PI) * w).floor().clamp(0.0, w - 1.0);
    let v = ((1.0 - (phi + offset) / fov) * h).floor().clamp(0.0, h - 1.0);
    (u as usize, v as usize)
}

pub fn range_of(p: [f32; 3]) -> f64 {
    let (x, y, z) = (p[0] as f64, p[1] as f64, p[2] as f64);
    (x * x + y * y + z * z).sqrt()
}

/// Reference raster: per-pixel winner, 6 x H x W channels, label raster.
pub struct OracleImage {
    pub winner: Vec<Option<usize>>,
    pub channels: Vec<f32>,
    pub labels: Option<Vec<u8>>,
    pub point_pixel: Vec<(u32, u32)>,
}

/// Buckets every point by pixel, then scans each pixel's bucket for the
/// minimum `(range, index)`.
pub fn rasterize(pc: &PointCloud, cfg: &ProjectionConfig) -> OracleImage {
    let (h, w) = (cfg.height, cfg.width);
    let n = h * w;
    let mut buckets: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    let mut point_pixel = Vec::with_capacity(pc.len());
    for (i, &p) in pc.xyz.iter().enumerate() {
        let (u, v) = project(p, cfg);
        buckets.entry(v * w + u).or_default().push(i);
        point_pixel.push((v as u32, u as u32));
    }
    let mut winner = vec![None; n];
    let mut channels = vec![0.0f32; 6 * n];
    let mut labels = pc.labels.as_ref().map(|_| vec![IGNORE; n]);
    for (&pix, members) in &buckets {
        let mut best = members[0];
        for &j in &members[1..] {
            let (rj, rb) = (range_of(pc.xyz[j]), range_of(pc.xyz[best]));
            if rj < rb || (rj == rb && j < best) {
                best = j;
            }
        }
        winner[pix] = Some(best);
        let [x, y, z] = pc.xyz[best];
        for (c, val) in [range_of(pc.xyz[best]) as f32, x, y, z, pc.remission[best], 1.0].into_iter().enumerate() {
            channels[c * n + pix] = val;
        }
        if let (Some(out), Some(src)) = (labels.as_mut(), pc.labels.as_ref()) {
            out[pix] = src[best];
        }
    }
    OracleImage { winner, channels, labels, point_pixel }
}

/// Random cloud of up to `max_points` points. A share of points are exact
/// duplicates or radial rescalings of earlier ones, forcing pixel collisions and
/// exact range ties.
pub fn random_cloud<R: Rng>(rng: &mut R, max_points: usize, labeled: bool) -> PointCloud {
    let n = rng.random_range(0..=max_points);
    let mut xyz: Vec<[f32; 3]> = Vec::with_capacity(n);
    for _ in 0..n {
        let p = if !xyz.is_empty() && rng.random_bool(0.1) {
            xyz[rng.random_range(0..xyz.len())]
        } else if !xyz.is_empty() && rng.random_bool(0.1) {
            let q = xyz[rng.random_range(0..xyz.len())];
            let s: f32 = rng.random_range(0.5..2.0);
            [q[0] * s, q[1] * s, q[2] * s]
        } else {
            let theta: f64 = rng.random_range(-PI..PI);
            let phi: f64 = rng.random_range(-0.6..0.2);
            let r: f64 = rng.random_range(0.5..90.0);
            [(r * phi.cos() * theta.cos()) as f32, (r * phi.cos() * theta.sin()) as f32, (r * phi.sin()) as f32]
        };
        if range_of(p) > 0.0 {
            xyz.push(p);
        }
    }
    let remission = (0..xyz.len()).map(|_| rng.random_range(0.0..1.0)).collect();
    let labels = labeled.then(|| (0..xyz.len()).map(|_| rng.random_range(0..19)).collect());
    PointCloud { xyz, remission, labels }
}

/// Cloud with exactly one point per chosen pixel: each point sits on the ray
/// through a pixel centre at a random range.
pub fn single_occupancy_cloud<R: Rng>(rng: &mut R, cfg: &ProjectionConfig, fill: f64) -> PointCloud {
    let mut pc = PointCloud { labels: Some(Vec::new()), ..Default::default() };
    for v in 0..cfg.height {
        for u in 0..cfg.width {
            if !rng.random_bool(fill) {
                continue;
            }
            let phi = cfg.row_elevation(v as f64);
            let theta = cfg.column_azimuth(u as f64);
            let r = rng.random_range(1.0..60.0);
            let p = [(r * phi.cos() * theta.cos()) as f32, (r * phi.cos() * theta.sin()) as f32, (r * phi.sin()) as f32];
            if project(p, cfg) != (u, v) {
                continue;
            }
            pc.xyz.push(p);
            pc.remission.push(rng.random_range(0.0..1.0));
            pc.labels.as_mut().unwrap().push(rng.random_range(0..19));
        }
    }
    pc
}

/// Label of one point by exhaustive ranking of its window: every valid pixel is
/// scored `(|r_pixel - r_point|, not own pixel, scanline index)`, fully sorted,
/// cut to `k`, and the majority taken with ties to the earliest-ranked label.
#[allow(clippy::too_many_arguments)]
pub fn backproject_point(
    img_labels: &[u8],
    range: &[f32],
    valid: &[bool],
    (h, w): (usize, usize),
    (v, u): (usize, usize),
    point_range: f32,
    k: usize,
    window: usize,
) -> u8 {
    let half = (window / 2) as i64;
    let own = v * w + u;
    let mut all = Vec::new();
    for vv in 0..h as i64 {
        for uu in 0..w as i64 {
            if (vv - v as i64).abs() > half || (uu - u as i64).abs() > half {
                continue;
            }
            let pix = vv as usize * w + uu as usize;
            if valid[pix] {
                all.push(((range[pix] as f64 - point_range as f64).abs(), pix != own, pix));
            }
        }
    }
    if all.is_empty() {
        return if valid[own] { img_labels[own] } else { IGNORE };
    }
    all.sort_by(|a, b| a.partial_cmp(b).unwrap());
    all.truncate(k);
    let ranked: Vec<u8> = all.iter().map(|c| img_labels[c.2]).collect();
    let mut best = ranked[0];
    let mut best_count = 0;
    for &l in &ranked {
        let c = ranked.iter().filter(|&&x| x == l).count();
        if c > best_count {
            best = l;
            best_count = c;
        }
    }
    best
}

fn softmax(row: &[f64]) -> Vec<f64> {
    let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = row.iter().map(|v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

/// Per-pixel class probabilities of `[B, K, H, W]` logits as `[B*H*W][K]`.
pub fn probabilities(logits: &[f64], b: usize, k: usize, hw: usize) -> Vec<Vec<f64>> {
    (0..b * hw)
        .map(|i| {
            let (bi, p) = (i / hw, i % hw);
            softmax(&(0..k).map(|c| logits[(bi * k + c) * hw + p]).collect::<Vec<_>>())
        })
        .collect()
}

pub fn wce(probs: &[Vec<f64>], target: &[u8], w: &[f64]) -> f64 {
    let valid: Vec<(usize, u8)> = target.iter().copied().enumerate().filter(|&(_, t)| t != IGNORE).collect();
    if valid.is_empty() {
        return 0.0;
    }
    valid.iter().map(|&(i, t)| -w[t as usize] * probs[i][t as usize].ln()).sum::<f64>() / valid.len() as f64
}

/// `(dice loss, iou loss)` over classes present in the target.
pub fn soft_overlap(probs: &[Vec<f64>], target: &[u8], k: usize, eps: f64) -> (f64, f64) {
    let (mut dice, mut iou, mut n) = (0.0, 0.0, 0);
    for c in 0..k {
        let (mut inter, mut mass, mut tmass) = (0.0, 0.0, 0.0);
        for (i, &t) in target.iter().enumerate() {
            if t == IGNORE {
                continue;
            }
            mass += probs[i][c];
            if t as usize == c {
                inter += probs[i][c];
                tmass += 1.0;
            }
        }
        if tmass > 0.0 {
            dice += 2.0 * inter / (mass + tmass + eps);
            iou += inter / (mass + tmass - inter + eps);
            n += 1;
        }
    }
    if n == 0 {
        (0.0, 0.0)
    } else {
        (1.0 - dice / n as f64, 1.0 - iou / n as f64)
    }
}

/// Mean cross-entropy over pixels with a 4-neighbour of a different valid label.
pub fn boundary(probs: &[Vec<f64>], target: &[u8], b: usize, h: usize, w: usize) -> f64 {
    let mut sum = 0.0;
    let mut n = 0;
    for bi in 0..b {
        for y in 0..h {
            for x in 0..w {
                let i = bi * h * w + y * w + x;
                let t = target[i];
                if t == IGNORE {
                    continue;
                }
                let mut nbrs = Vec::new();
                if y > 0 {
                    nbrs.push(i - w);
                }
                if y + 1 < h {
                    nbrs.push(i + w);
                }
                if x > 0 {
                    nbrs.push(i - 1);
                }
                if x + 1 < w {
                    nbrs.push(i + 1);
                }
                if nbrs.iter().any(|&j| target[j] != IGNORE && target[j] != t) {
                    sum += -probs[i][t as usize].ln();
                    n += 1;
                }
            }
        }
    }
    if n == 0 {
        0.0
    } else {
        sum / n as f64
    }
}
