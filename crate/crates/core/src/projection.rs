//! Spherical range-view projection, min-range rasterization and k-NN label
//! back-projection.

use std::io::{self, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::kitti::{PointCloud, IGNORE, NUM_CLASSES};

/// Marker for a raster pixel that holds no point.
pub const EMPTY: u32 = u32::MAX;
/// Channel layout of [`RangeImage::channels`].
pub const CHANNELS: usize = 6;
pub const CH_RANGE: usize = 0;
pub const CH_X: usize = 1;
pub const CH_Y: usize = 2;
pub const CH_Z: usize = 3;
pub const CH_REMISSION: usize = 4;
pub const CH_VALID: usize = 5;

const PALETTE: &str = include_str!("../fixtures/palette.txt");

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum ProjectionError {
    #[error("point has zero range")]
    ZeroRange,
    #[error("invalid projection config: {0}")]
    Config(String),
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("k must be >= 1 and the window odd (k={k}, window={window})")]
    Neighborhood { k: usize, window: usize },
}

/// How the elevation angle maps to a raster row.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ElevationConvention {
    /// `v = floor((1 - (phi + fov_up) / fov) * h)`: the formula as published.
    #[default]
    Published,
    /// `v = floor((1 - (phi + fov_down) / fov) * h)`: row 0 at `+fov_up`, row `h` at
    /// `-fov_down`, which matches the physical field of view of the sensor.
    SensorFov,
}

/// Raster geometry. Angles are in radians; `fov_down` is stored as a positive magnitude.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ProjectionConfig {
    pub height: usize,
    pub width: usize,
    pub fov_up: f64,
    pub fov_down: f64,
    pub convention: ElevationConvention,
}

impl Default for ProjectionConfig {
    fn default() -> Self {
        Self {
            height: 64,
            width: 2048,
            fov_up: 3f64.to_radians(),
            fov_down: 25f64.to_radians(),
            convention: ElevationConvention::Published,
        }
    }
}

impl ProjectionConfig {
    pub fn with_size(height: usize, width: usize) -> Self {
        Self { height, width, ..Self::default() }
    }

    pub fn validate(&self) -> Result<(), ProjectionError> {
        if self.height < 1 || self.width < 2 {
            return Err(ProjectionError::Config(format!("raster {}x{} (need h >= 1, w >= 2)", self.height, self.width)));
        }
        if !(self.fov() > 0.0) || !self.fov_up.is_finite() || !self.fov_down.is_finite() {
            return Err(ProjectionError::Config(format!("fov_up {} + fov_down {} must be > 0", self.fov_up, self.fov_down)));
        }
        Ok(())
    }

    /// Total vertical field of view.
    pub fn fov(&self) -> f64 {
        self.fov_up + self.fov_down
    }

    fn elevation_offset(&self) -> f64 {
        match self.convention {
            ElevationConvention::Published => self.fov_up,
            ElevationConvention::SensorFov => self.fov_down,
        }
    }

    /// Elevation angle at the vertical center of row `v` (inverse of the row mapping).
    pub fn row_elevation(&self, v: f64) -> f64 {
        (1.0 - (v + 0.5) / self.height as f64) * self.fov() - self.elevation_offset()
    }

    /// Azimuth at the horizontal center of column `u`.
    pub fn column_azimuth(&self, u: f64) -> f64 {
        std::f64::consts::PI * (1.0 - 2.0 * (u + 0.5) / self.width as f64)
    }
}

/// `(theta, phi, r)`: azimuth in `(-pi, pi]`, elevation in `[-pi/2, pi/2]`, range.
pub fn spherical_coords(p: [f64; 3]) -> Result<(f64, f64, f64), ProjectionError> {
    let r = (p[0] * p[0] + p[1] * p[1] + p[2] * p[2]).sqrt();
    if r == 0.0 || !r.is_finite() {
        return Err(ProjectionError::ZeroRange);
    }
    Ok((p[1].atan2(p[0]), (p[2] / r).clamp(-1.0, 1.0).asin(), r))
}

/// Raster coordinates `(u, v)` of a point, clamped into the image.
pub fn project_point(p: [f64; 3], cfg: &ProjectionConfig) -> Result<(usize, usize), ProjectionError> {
    let (theta, phi, _) = spherical_coords(p)?;
    Ok(project_angles(theta, phi, cfg))
}

fn project_angles(theta: f64, phi: f64, cfg: &ProjectionConfig) -> (usize, usize) {
    let w = cfg.width as f64;
    let h = cfg.height as f64;
    let u = (0.5 * (1.0 - theta / std::f64::consts::PI) * w).floor();
    let v = ((1.0 - (phi + cfg.elevation_offset()) / cfg.fov()) * h).floor();
    (u.clamp(0.0, w - 1.0) as usize, v.clamp(0.0, h - 1.0) as usize)
}

/// A rasterized sweep.
#[derive(Debug, Clone, PartialEq)]
pub struct RangeImage {
    pub height: usize,
    pub width: usize,
    /// `[6, H, W]`: range, x, y, z, remission, validity.
    pub channels: Vec<f32>,
    /// Winning point index per pixel, or [`EMPTY`].
    pub pixel_point: Vec<u32>,
    /// `(v, u)` for every point, including collision losers.
    pub point_pixel: Vec<(u32, u32)>,
    /// Winner's label per pixel ([`IGNORE`] at invalid pixels).
    pub labels: Option<Vec<u8>>,
}

impl RangeImage {
    pub fn empty(height: usize, width: usize, with_labels: bool) -> Self {
        Self {
            height,
            width,
            channels: vec![0.0; CHANNELS * height * width],
            pixel_point: vec![EMPTY; height * width],
            point_pixel: Vec::new(),
            labels: with_labels.then(|| vec![IGNORE; height * width]),
        }
    }

    pub fn pixels(&self) -> usize {
        self.height * self.width
    }

    pub fn channel(&self, c: usize) -> &[f32] {
        let n = self.pixels();
        &self.channels[c * n..(c + 1) * n]
    }

    pub fn channel_mut(&mut self, c: usize) -> &mut [f32] {
        let n = self.pixels();
        &mut self.channels[c * n..(c + 1) * n]
    }

    pub fn is_valid(&self, pixel: usize) -> bool {
        self.channels[CH_VALID * self.pixels() + pixel] != 0.0
    }

    pub fn valid_count(&self) -> usize {
        self.channel(CH_VALID).iter().filter(|&&v| v != 0.0).count()
    }

    /// Fraction of pixels holding a point.
    pub fn occupancy(&self) -> f64 {
        if self.pixels() == 0 {
            0.0
        } else {
            self.valid_count() as f64 / self.pixels() as f64
        }
    }
}

/// Projects every point; each pixel keeps its minimum-range point (lower index on ties).
/// Empty pixels are zero in all channels and [`IGNORE`] in the label raster.
pub fn rasterize(pc: &PointCloud, cfg: &ProjectionConfig) -> RangeImage {
    let (h, w) = (cfg.height, cfg.width);
    let n_pix = h * w;
    let mut img = RangeImage::empty(h, w, pc.labels.is_some());
    let mut best = vec![f64::INFINITY; n_pix];
    img.point_pixel.reserve(pc.len());
    for (i, p) in pc.xyz.iter().enumerate() {
        let p = [p[0] as f64, p[1] as f64, p[2] as f64];
        let (u, v) = match spherical_coords(p) {
            Ok((theta, phi, r)) => {
                let (u, v) = project_angles(theta, phi, cfg);
                let pix = v * w + u;
                if r < best[pix] {
                    best[pix] = r;
                    img.pixel_point[pix] = i as u32;
                }
                (u, v)
            }
            // Unreachable for ingested clouds; keep the map total anyway.
            Err(_) => (0, 0),
        };
        img.point_pixel.push((v as u32, u as u32));
    }
    for pix in 0..n_pix {
        let idx = img.pixel_point[pix];
        if idx == EMPTY {
            continue;
        }
        let i = idx as usize;
        let [x, y, z] = pc.xyz[i];
        let vals = [best[pix] as f32, x, y, z, pc.remission[i], 1.0];
        for (c, v) in vals.into_iter().enumerate() {
            img.channels[c * n_pix + pix] = v;
        }
        if let (Some(out), Some(src)) = (img.labels.as_mut(), pc.labels.as_ref()) {
            out[pix] = src[i];
        }
    }
    img
}

/// Assigns every point a label by voting over the `k` valid pixels in its
/// `window x window` raster neighborhood whose range is closest to the point's.
///
/// Candidates are ranked by `|r_pixel - r_point|` (both at the stored 32-bit
/// precision), then the point's own pixel before others, then scanline order. The
/// majority label wins; among labels tied for the majority, the one whose best
/// candidate ranks first wins. Points with no valid candidate take the raw pixel
/// label at their own pixel, or [`IGNORE`] if that pixel is invalid.
pub fn backproject_labels(
    img_labels: &[u8],
    img: &RangeImage,
    pc: &PointCloud,
    k: usize,
    window: usize,
) -> Result<Vec<u8>, ProjectionError> {
    if k == 0 || window % 2 == 0 {
        return Err(ProjectionError::Neighborhood { k, window });
    }
    if img_labels.len() != img.pixels() {
        return Err(ProjectionError::Dimension(format!(
            "{} labels for a {}x{} raster",
            img_labels.len(),
            img.height,
            img.width
        )));
    }
    if img.point_pixel.len() != pc.len() {
        return Err(ProjectionError::Dimension(format!(
            "raster indexes {} points, cloud has {}",
            img.point_pixel.len(),
            pc.len()
        )));
    }
    let (h, w) = (img.height as i64, img.width as i64);
    let half = (window / 2) as i64;
    let range = img.channel(CH_RANGE);
    let valid = img.channel(CH_VALID);
    let mut cands: Vec<(f64, bool, usize)> = Vec::with_capacity(window * window);
    let rank = |a: &(f64, bool, usize), b: &(f64, bool, usize)| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2));
    let mut out = Vec::with_capacity(pc.len());
    for (i, &(v, u)) in img.point_pixel.iter().enumerate() {
        // Same rounding as the stored range channel, so the own pixel of a winning point is at distance 0.
        let rp = pc.range(i) as f32 as f64;
        cands.clear();
        let (v, u) = (v as i64, u as i64);
        let own = (v * w + u) as usize;
        for dv in -half..=half {
            let vv = v + dv;
            if vv < 0 || vv >= h {
                continue;
            }
            for du in -half..=half {
                let uu = u + du;
                if uu < 0 || uu >= w {
                    continue;
                }
                let pix = (vv * w + uu) as usize;
                if valid[pix] != 0.0 {
                    cands.push(((range[pix] as f64 - rp).abs(), pix != own, pix));
                }
            }
        }
        if cands.is_empty() {
            out.push(if valid[own] != 0.0 { img_labels[own] } else { IGNORE });
            continue;
        }
        let take = k.min(cands.len());
        if take < cands.len() {
            cands.select_nth_unstable_by(take - 1, rank);
        }
        let chosen = &mut cands[..take];
        chosen.sort_unstable_by(rank);
        out.push(vote(chosen.iter().map(|&(_, _, pix)| img_labels[pix])));
    }
    Ok(out)
}

/// Majority vote over labels given in rank order; ties go to the earliest-ranked label.
fn vote(ranked: impl Iterator<Item = u8>) -> u8 {
    let mut counts = [0u32; 256];
    let mut first_rank = [usize::MAX; 256];
    for (rank, l) in ranked.enumerate() {
        counts[l as usize] += 1;
        if first_rank[l as usize] == usize::MAX {
            first_rank[l as usize] = rank;
        }
    }
    (0..256)
        .filter(|&l| counts[l] > 0)
        .max_by(|&a, &b| counts[a].cmp(&counts[b]).then(first_rank[b].cmp(&first_rank[a])))
        .expect("at least one vote") as u8
}

/// 19-colour palette indexed by train ID.
pub fn palette() -> [[u8; 3]; NUM_CLASSES] {
    let mut out = [[0u8; 3]; NUM_CLASSES];
    for line in PALETTE.lines() {
        let body = line.split('#').next().unwrap_or("").trim();
        let f: Vec<u16> = body.split_whitespace().filter_map(|t| t.parse().ok()).collect();
        if let [id, r, g, b] = f[..] {
            if (id as usize) < NUM_CLASSES {
                out[id as usize] = [r as u8, g as u8, b as u8];
            }
        }
    }
    out
}

/// Writes a binary PPM (P6).
pub fn write_ppm<W: Write>(mut out: W, width: usize, height: usize, rgb: &[u8]) -> io::Result<()> {
    if rgb.len() != width * height * 3 {
        return Err(io::Error::new(io::ErrorKind::InvalidInput, "rgb buffer does not match image size"));
    }
    write!(out, "P6\n{width} {height}\n255\n")?;
    out.write_all(rgb)?;
    out.flush()
}

/// Grayscale rendering of the range channel: near is bright, empty pixels black.
pub fn range_rgb(img: &RangeImage) -> Vec<u8> {
    let range = img.channel(CH_RANGE);
    let max = range.iter().cloned().fold(0.0f32, f32::max);
    let mut rgb = vec![0u8; img.pixels() * 3];
    for (pix, &r) in range.iter().enumerate() {
        if img.is_valid(pix) {
            let g = if max > 0.0 { (255.0 - 200.0 * (r / max)).round().clamp(55.0, 255.0) as u8 } else { 255 };
            rgb[pix * 3..pix * 3 + 3].fill(g);
        }
    }
    rgb
}

/// Palette rendering of a label raster; [`IGNORE`] is black.
pub fn label_rgb(labels: &[u8]) -> Vec<u8> {
    let pal = palette();
    labels.iter().flat_map(|&l| pal.get(l as usize).copied().unwrap_or([0, 0, 0])).collect()
}

pub fn save_ppm(path: &Path, width: usize, height: usize, rgb: &[u8]) -> io::Result<()> {
    write_ppm(io::BufWriter::new(std::fs::File::create(path)?), width, height, rgb)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::{FRAC_PI_2, FRAC_PI_4, PI};

    fn close(a: f64, b: f64) -> bool {
        (a - b).abs() < 1e-12
    }

    #[test]
    fn spherical_axes() {
        let (t, p, r) = spherical_coords([1.0, 0.0, 0.0]).unwrap();
        assert!(close(t, 0.0) && close(p, 0.0) && close(r, 1.0));
        let (t, p, r) = spherical_coords([0.0, 1.0, 0.0]).unwrap();
        assert!(close(t, FRAC_PI_2) && close(p, 0.0) && close(r, 1.0));
        let (t, p, r) = spherical_coords([1.0, 1.0, 2f64.sqrt()]).unwrap();
        assert!(close(t, FRAC_PI_4) && close(p, FRAC_PI_4) && close(r, 2.0));
        assert_eq!(spherical_coords([0.0; 3]), Err(ProjectionError::ZeroRange));
    }

    #[test]
    fn hand_projection() {
        let cfg = ProjectionConfig::default();
        assert_eq!(project_point([1.0, 0.0, 0.0], &cfg).unwrap(), (1024, 57));
        assert_eq!(project_point([-1.0, 1e-12, 0.0], &cfg).unwrap().0, 0);
        assert_eq!(project_point([-1.0, -1e-12, 0.0], &cfg).unwrap().0, 2047);
    }

    #[test]
    fn elevation_rows_per_convention() {
        let at = |phi: f64| [phi.cos(), 0.0, phi.sin()];
        let cfg = ProjectionConfig::default();
        // (1 - 6/28) * 64 = 50.29
        assert_eq!(project_point(at(cfg.fov_up), &cfg).unwrap().1, 50);
        assert_eq!(project_point(at(cfg.fov_down), &cfg).unwrap().1, 0);
        let sensor = ProjectionConfig { convention: ElevationConvention::SensorFov, ..cfg };
        assert_eq!(project_point(at(sensor.fov_up), &sensor).unwrap().1, 0);
        assert_eq!(project_point(at(-sensor.fov_down + 1e-9), &sensor).unwrap().1, 63);
        for v in 0..64 {
            assert_eq!(project_point(at(sensor.row_elevation(v as f64)), &sensor).unwrap().1, v);
            assert_eq!(project_point(at(cfg.row_elevation(v as f64)), &cfg).unwrap().1, v);
        }
        for u in [0usize, 1, 1023, 1024, 2047] {
            let a = cfg.column_azimuth(u as f64);
            assert_eq!(project_point([a.cos(), a.sin(), 0.0], &cfg).unwrap().0, u);
        }
        assert!(close(cfg.column_azimuth(-0.5), PI));
    }

    #[test]
    fn config_validation() {
        assert!(ProjectionConfig::default().validate().is_ok());
        assert!(ProjectionConfig::with_size(0, 8).validate().is_err());
        assert!(ProjectionConfig::with_size(4, 1).validate().is_err());
        let bad = ProjectionConfig { fov_up: 0.1, fov_down: -0.1, ..Default::default() };
        assert!(bad.validate().is_err());
    }

    fn cloud(points: &[[f32; 3]], labels: Option<Vec<u8>>) -> PointCloud {
        PointCloud { xyz: points.to_vec(), remission: vec![0.25; points.len()], labels }
    }

    #[test]
    fn min_range_wins() {
        let cfg = ProjectionConfig::default();
        let pc = cloud(&[[5.0, 0.0, 0.0], [3.0, 0.0, 0.0], [3.0, 0.0, 0.0]], Some(vec![1, 2, 3]));
        let img = rasterize(&pc, &cfg);
        let pix = 57 * 2048 + 1024;
        assert_eq!(img.pixel_point[pix], 1);
        assert_eq!(img.channel(CH_RANGE)[pix], 3.0);
        assert_eq!(img.labels.as_ref().unwrap()[pix], 2);
        assert_eq!(img.point_pixel, vec![(57, 1024); 3]);
        assert_eq!(img.valid_count(), 1);
    }

    #[test]
    fn empty_and_single() {
        let cfg = ProjectionConfig::with_size(8, 16);
        let img = rasterize(&PointCloud::default(), &cfg);
        assert!(img.channels.iter().all(|&c| c == 0.0));
        assert_eq!(img.occupancy(), 0.0);
        let pc = cloud(&[[1.0, 2.0, -0.5]], None);
        let img = rasterize(&pc, &cfg);
        assert_eq!(img.valid_count(), 1);
        let (v, u) = img.point_pixel[0];
        let pix = v as usize * 16 + u as usize;
        let r = (1.0f64 + 4.0 + 0.25).sqrt() as f32;
        let got: Vec<f32> = (0..CHANNELS).map(|c| img.channel(c)[pix]).collect();
        assert_eq!(got, vec![r, 1.0, 2.0, -0.5, 0.25, 1.0]);
    }

    #[test]
    fn vote_tie_breaks_by_rank() {
        assert_eq!(vote([4u8, 2, 2, 4].into_iter()), 4);
        assert_eq!(vote([4u8, 2, 2].into_iter()), 2);
        assert_eq!(vote([7u8].into_iter()), 7);
    }

    #[test]
    fn backproject_edge_cases() {
        let cfg = ProjectionConfig::with_size(4, 8);
        let pc = cloud(&[[1.0, 0.0, 0.0]], None);
        let img = rasterize(&pc, &cfg);
        assert!(backproject_labels(&[0; 32], &img, &pc, 0, 7).is_err());
        assert!(backproject_labels(&[0; 32], &img, &pc, 1, 4).is_err());
        assert!(backproject_labels(&[0; 31], &img, &pc, 1, 7).is_err());
        assert_eq!(backproject_labels(&[3; 32], &img, &pc, 7, 7).unwrap(), vec![3]);
    }

    #[test]
    fn ppm_header_and_palette() {
        let mut buf = Vec::new();
        write_ppm(&mut buf, 2, 1, &[1, 2, 3, 4, 5, 6]).unwrap();
        assert_eq!(&buf[..11], b"P6\n2 1\n255\n");
        assert_eq!(buf.len(), 17);
        let pal = palette();
        assert_eq!(pal[0], [100, 150, 245]);
        assert!(pal.iter().all(|c| c != &[0, 0, 0]));
        assert_eq!(label_rgb(&[IGNORE]), vec![0, 0, 0]);
    }
}
