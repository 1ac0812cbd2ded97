//! Point-cloud augmentations (before projection) and range-view augmentations
//! (on rasterized samples).

use std::f64::consts::TAU;

use rand::seq::index;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::kitti::{PointCloud, IGNORE};
use crate::projection::{RangeImage, CHANNELS, CH_VALID};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AugConfig {
    /// Master switch; when false both stages are identity.
    pub enabled: bool,
    pub p_rotate: f64,
    pub p_jitter: f64,
    pub p_flip: f64,
    pub p_drop: f64,
    pub p_mix: f64,
    pub p_union: f64,
    pub p_shift: f64,
    pub p_paste: f64,
    /// Jitter standard deviation, meters.
    pub jitter_sigma: f64,
    /// Jitter clip magnitude, meters.
    pub jitter_clip: f64,
    /// Upper bound of the dropped point fraction.
    pub drop_max: f64,
    /// Column bands used by the mix operation.
    pub mix_sectors: usize,
    /// Train IDs transplanted by the paste operation.
    pub paste_classes: Vec<u8>,
}

impl Default for AugConfig {
    fn default() -> Self {
        Self {
            enabled: true,
            p_rotate: 1.0,
            p_jitter: 1.0,
            p_flip: 1.0,
            p_drop: 1.0,
            p_mix: 0.9,
            p_union: 0.1,
            p_shift: 0.9,
            p_paste: 1.0,
            jitter_sigma: 0.01,
            jitter_clip: 0.05,
            drop_max: 0.1,
            mix_sectors: 4,
            // bicycle, motorcycle, truck, other-vehicle, person, bicyclist, motorcyclist
            paste_classes: vec![1, 2, 3, 4, 5, 6, 7],
        }
    }
}

impl AugConfig {
    /// Every probability zero: both stages are identity.
    pub fn disabled() -> Self {
        Self { enabled: false, ..Self::default() }
    }

    pub fn validate(&self) -> Result<(), AugError> {
        let probs = [
            ("p_rotate", self.p_rotate),
            ("p_jitter", self.p_jitter),
            ("p_flip", self.p_flip),
            ("p_drop", self.p_drop),
            ("p_mix", self.p_mix),
            ("p_union", self.p_union),
            ("p_shift", self.p_shift),
            ("p_paste", self.p_paste),
            ("drop_max", self.drop_max),
        ];
        if let Some((name, p)) = probs.iter().find(|(_, p)| !(0.0..=1.0).contains(p)) {
            return Err(AugError::Config(format!("{name} = {p} outside [0, 1]")));
        }
        if !(self.jitter_sigma >= 0.0 && self.jitter_clip >= 0.0) {
            return Err(AugError::Config("jitter_sigma and jitter_clip must be >= 0".into()));
        }
        if self.mix_sectors == 0 {
            return Err(AugError::Config("mix_sectors must be >= 1".into()));
        }
        Ok(())
    }

    fn all_zero(&self) -> Self {
        Self {
            p_rotate: 0.0,
            p_jitter: 0.0,
            p_flip: 0.0,
            p_drop: 0.0,
            p_mix: 0.0,
            p_union: 0.0,
            p_shift: 0.0,
            p_paste: 0.0,
            ..self.clone()
        }
    }

    fn effective(&self) -> Self {
        if self.enabled {
            self.clone()
        } else {
            self.all_zero()
        }
    }
}

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum AugError {
    #[error("raster dims differ: {0:?} vs {1:?}")]
    Dims((usize, usize), (usize, usize)),
    #[error("invalid augmentation config: {0}")]
    Config(String),
}

/// Global yaw rotation, clipped Gaussian jitter, random x/y sign flips and random
/// point removal, each gated by its probability. Labels follow their points.
pub fn augment3d<R: Rng + ?Sized>(pc: &PointCloud, cfg: &AugConfig, rng: &mut R) -> PointCloud {
    let cfg = cfg.effective();
    let mut out = pc.clone();
    if rng.random::<f64>() < cfg.p_rotate {
        let (s, c) = (rng.random::<f64>() * TAU).sin_cos();
        for p in &mut out.xyz {
            let (x, y) = (p[0] as f64, p[1] as f64);
            p[0] = (c * x - s * y) as f32;
            p[1] = (s * x + c * y) as f32;
        }
    }
    if rng.random::<f64>() < cfg.p_jitter && cfg.jitter_sigma > 0.0 {
        let dist = Normal::new(0.0, cfg.jitter_sigma).expect("finite sigma");
        for p in &mut out.xyz {
            for v in p.iter_mut() {
                let d: f64 = dist.sample(rng);
                *v += d.clamp(-cfg.jitter_clip, cfg.jitter_clip) as f32;
            }
        }
    }
    if rng.random::<f64>() < cfg.p_flip {
        let fx = rng.random::<bool>();
        let fy = rng.random::<bool>();
        for p in &mut out.xyz {
            if fx {
                p[0] = -p[0];
            }
            if fy {
                p[1] = -p[1];
            }
        }
    }
    let n = out.len();
    let mut keep = vec![true; n];
    if rng.random::<f64>() < cfg.p_drop && n > 0 {
        let ratio = rng.random::<f64>() * cfg.drop_max;
        let drop = ((ratio * n as f64).floor() as usize).min(n);
        for i in index::sample(rng, n, drop) {
            keep[i] = false;
        }
    }
    for (k, p) in keep.iter_mut().zip(&out.xyz) {
        *k &= p.iter().all(|v| v.is_finite()) && p.iter().any(|&v| v != 0.0);
    }
    if keep.iter().all(|&k| k) {
        out
    } else {
        out.select(&keep)
    }
}

/// Dense training sample: `[6, H, W]` channels and an `H x W` label raster.
#[derive(Debug, Clone, PartialEq)]
pub struct RangeSample {
    pub height: usize,
    pub width: usize,
    pub channels: Vec<f32>,
    pub labels: Vec<u8>,
}

impl RangeSample {
    /// Copies a rasterized image; missing labels become IGNORE.
    pub fn from_image(img: &RangeImage) -> Self {
        Self {
            height: img.height,
            width: img.width,
            channels: img.channels.clone(),
            labels: img.labels.clone().unwrap_or_else(|| vec![IGNORE; img.pixels()]),
        }
    }

    pub fn pixels(&self) -> usize {
        self.height * self.width
    }

    pub fn is_valid(&self, pix: usize) -> bool {
        self.channels[CH_VALID * self.pixels() + pix] != 0.0
    }

    /// Copies every channel and the label of `pix` from `src`.
    fn copy_pixel(&mut self, dst: usize, src: &RangeSample, from: usize) {
        let n = self.pixels();
        for c in 0..CHANNELS {
            self.channels[c * n + dst] = src.channels[c * n + from];
        }
        self.labels[dst] = src.labels[from];
    }

    fn check_dims(&self, other: &RangeSample) -> Result<(), AugError> {
        if (self.height, self.width) != (other.height, other.width) {
            return Err(AugError::Dims((self.height, self.width), (other.height, other.width)));
        }
        Ok(())
    }
}

/// Replaces the listed column bands (of `sectors` equal bands) of `a` with `b`'s.
pub fn range_mix(a: &RangeSample, b: &RangeSample, sectors: usize, replace: &[usize]) -> Result<RangeSample, AugError> {
    a.check_dims(b)?;
    let mut out = a.clone();
    let w = a.width;
    for &s in replace.iter().filter(|&&s| s < sectors) {
        let (lo, hi) = (s * w / sectors, (s + 1) * w / sectors);
        for v in 0..a.height {
            for u in lo..hi {
                out.copy_pixel(v * w + u, b, v * w + u);
            }
        }
    }
    Ok(out)
}

/// Fills `a`'s empty pixels from `b`'s valid ones.
pub fn range_union(a: &RangeSample, b: &RangeSample) -> Result<RangeSample, AugError> {
    a.check_dims(b)?;
    let mut out = a.clone();
    for pix in 0..a.pixels() {
        if !a.is_valid(pix) && b.is_valid(pix) {
            out.copy_pixel(pix, b, pix);
        }
    }
    Ok(out)
}

/// Cyclic roll along the width axis: column `u` moves to `(u + offset) mod W`.
pub fn range_shift(a: &RangeSample, offset: usize) -> RangeSample {
    let mut out = a.clone();
    let w = a.width;
    for v in 0..a.height {
        for u in 0..w {
            out.copy_pixel(v * w + (u + offset) % w, a, v * w + u);
        }
    }
    out
}

/// Overwrites `a` with every pixel of `b` whose label is in `classes`.
pub fn range_paste(a: &RangeSample, b: &RangeSample, classes: &[u8]) -> Result<RangeSample, AugError> {
    a.check_dims(b)?;
    let mut out = a.clone();
    for pix in 0..a.pixels() {
        if b.labels[pix] != IGNORE && classes.contains(&b.labels[pix]) {
            out.copy_pixel(pix, b, pix);
        }
    }
    Ok(out)
}

/// Mix, union, shift and paste applied in that order, each with its probability;
/// `donor` supplies the second sample.
pub fn augment_range<R: Rng + ?Sized>(
    a: &RangeSample,
    donor: &RangeSample,
    cfg: &AugConfig,
    rng: &mut R,
) -> Result<RangeSample, AugError> {
    let cfg = cfg.effective();
    a.check_dims(donor)?;
    let mut out = a.clone();
    if rng.random::<f64>() < cfg.p_mix {
        let bands: Vec<usize> = (0..cfg.mix_sectors).filter(|_| rng.random::<bool>()).collect();
        out = range_mix(&out, donor, cfg.mix_sectors, &bands)?;
    }
    if rng.random::<f64>() < cfg.p_union {
        out = range_union(&out, donor)?;
    }
    if rng.random::<f64>() < cfg.p_shift {
        out = range_shift(&out, rng.random_range(0..out.width));
    }
    if rng.random::<f64>() < cfg.p_paste {
        out = range_paste(&out, donor, &cfg.paste_classes)?;
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn sample(h: usize, w: usize, seed: u64) -> RangeSample {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = h * w;
        let mut channels = vec![0.0; CHANNELS * n];
        let mut labels = vec![IGNORE; n];
        for pix in 0..n {
            if rng.random::<f64>() < 0.7 {
                for c in 0..CH_VALID {
                    channels[c * n + pix] = rng.random::<f32>() * 10.0;
                }
                channels[CH_VALID * n + pix] = 1.0;
                labels[pix] = rng.random_range(0..19);
            }
        }
        RangeSample { height: h, width: w, channels, labels }
    }

    fn cloud(n: usize) -> PointCloud {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        PointCloud {
            xyz: (0..n).map(|_| [rng.random_range(-20.0..20.0), rng.random_range(-20.0..20.0), rng.random_range(-2.0..1.0)]).collect(),
            remission: vec![0.5; n],
            labels: Some((0..n).map(|i| (i % 19) as u8).collect()),
        }
    }

    #[test]
    fn zero_probabilities_are_identity() {
        let pc = cloud(200);
        let cfg = AugConfig::default().all_zero();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert_eq!(augment3d(&pc, &cfg, &mut rng), pc);
        let (a, b) = (sample(4, 16, 1), sample(4, 16, 2));
        assert_eq!(augment_range(&a, &b, &cfg, &mut rng).unwrap(), a);
        assert_eq!(augment_range(&a, &b, &AugConfig::disabled(), &mut rng).unwrap(), a);
    }

    #[test]
    fn rotation_preserves_range_and_height() {
        let pc = cloud(500);
        let cfg = AugConfig { p_rotate: 1.0, ..AugConfig::default().all_zero() };
        let out = augment3d(&pc, &cfg, &mut ChaCha8Rng::seed_from_u64(4));
        assert_eq!(out.len(), pc.len());
        for i in 0..pc.len() {
            assert_eq!(out.xyz[i][2], pc.xyz[i][2]);
            assert!((out.range(i) - pc.range(i)).abs() <= 1e-6 * pc.range(i));
        }
        assert_ne!(out.xyz, pc.xyz);
    }

    #[test]
    fn drop_bound_and_label_alignment() {
        let pc = cloud(1000);
        let cfg = AugConfig { p_drop: 1.0, ..AugConfig::default().all_zero() };
        for seed in 0..20 {
            let out = augment3d(&pc, &cfg, &mut ChaCha8Rng::seed_from_u64(seed));
            assert!((900..=1000).contains(&out.len()));
            let labels = out.labels.as_ref().unwrap();
            for (p, l) in out.xyz.iter().zip(labels) {
                let i = pc.xyz.iter().position(|q| q == p).unwrap();
                assert_eq!(pc.labels.as_ref().unwrap()[i], *l);
            }
        }
    }

    #[test]
    fn jitter_is_clipped() {
        let pc = cloud(300);
        let cfg = AugConfig { p_jitter: 1.0, jitter_sigma: 1.0, ..AugConfig::default().all_zero() };
        let out = augment3d(&pc, &cfg, &mut ChaCha8Rng::seed_from_u64(2));
        for (a, b) in out.xyz.iter().zip(&pc.xyz) {
            for k in 0..3 {
                assert!((a[k] - b[k]).abs() <= 0.05 + 1e-5);
            }
        }
    }

    #[test]
    fn mix_band_arithmetic() {
        let (a, b) = (sample(3, 16, 1), sample(3, 16, 2));
        assert_eq!(range_mix(&a, &b, 4, &[]).unwrap(), a);
        assert_eq!(range_mix(&a, &b, 4, &[0, 1, 2, 3]).unwrap(), b);
        let m = range_mix(&a, &b, 4, &[1, 3]).unwrap();
        for v in 0..3 {
            for u in 0..16 {
                let from_b = (4..8).contains(&u) || (12..16).contains(&u);
                let src = if from_b { &b } else { &a };
                assert_eq!(m.labels[v * 16 + u], src.labels[v * 16 + u]);
                for c in 0..CHANNELS {
                    assert_eq!(m.channels[c * 48 + v * 16 + u], src.channels[c * 48 + v * 16 + u]);
                }
            }
        }
    }

    #[test]
    fn union_shift_paste_trivial_cases() {
        let b = sample(3, 8, 2);
        let mut full = sample(3, 8, 1);
        let n = full.pixels();
        full.channels[CH_VALID * n..].fill(1.0);
        full.labels.iter_mut().for_each(|l| *l = 3);
        assert_eq!(range_union(&full, &b).unwrap(), full);
        let a = sample(3, 8, 5);
        assert_eq!(range_shift(&a, 0), a);
        assert_eq!(range_shift(&a, 8), a);
        assert_eq!(range_shift(&range_shift(&a, 3), 5), a);
        assert_eq!(range_paste(&a, &b, &[]).unwrap(), a);
        assert!(range_mix(&a, &sample(4, 8, 1), 4, &[0]).is_err());
    }

    #[test]
    fn shift_preserves_column_multiset() {
        let a = sample(4, 10, 3);
        let s = range_shift(&a, 7);
        let column = |x: &RangeSample, u: usize| -> Vec<(Vec<u32>, u8)> {
            (0..x.height)
                .map(|v| {
                    let pix = v * x.width + u;
                    ((0..CHANNELS).map(|c| x.channels[c * x.pixels() + pix].to_bits()).collect(), x.labels[pix])
                })
                .collect()
        };
        let mut ca: Vec<_> = (0..10).map(|u| column(&a, u)).collect();
        let mut cs: Vec<_> = (0..10).map(|u| column(&s, u)).collect();
        ca.sort();
        cs.sort();
        assert_eq!(ca, cs);
    }

    #[test]
    fn coherence_and_determinism() {
        let (a, b) = (sample(4, 16, 1), sample(4, 16, 2));
        let cfg = AugConfig { p_union: 1.0, ..AugConfig::default() };
        let x = augment_range(&a, &b, &cfg, &mut ChaCha8Rng::seed_from_u64(11)).unwrap();
        let y = augment_range(&a, &b, &cfg, &mut ChaCha8Rng::seed_from_u64(11)).unwrap();
        assert_eq!(x, y);
        for pix in 0..x.pixels() {
            if !x.is_valid(pix) {
                assert_eq!(x.labels[pix], IGNORE);
            }
        }
    }

    #[test]
    fn config_validation() {
        assert!(AugConfig::default().validate().is_ok());
        assert!(AugConfig { p_mix: 1.5, ..Default::default() }.validate().is_err());
        assert!(AugConfig { mix_sectors: 0, ..Default::default() }.validate().is_err());
    }
}
