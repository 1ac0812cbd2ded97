//! Composite segmentation objective: weighted cross-entropy, soft Dice, boundary
//! cross-entropy and soft IoU, with auxiliary-head supervision.
//!
//! Logits are `[B, K, H, W]`; targets are `B * H * W` train IDs in row-major
//! order with [`IGNORE`] excluded everywhere.

use serde::{Deserialize, Serialize};

use crate::kitti::IGNORE;
use crate::tensor::{Real, Tensor, TensorError};

/// Smoothing constant of the Dice and IoU ratios.
pub const SOFT_EPS: f64 = 1e-6;
/// Frequency floor of [`ClassWeights::from_frequencies`].
pub const FREQ_FLOOR: f64 = 1e-4;

#[derive(Debug, thiserror::Error)]
pub enum LossError {
    #[error("target has {got} labels, logits expect {expected}")]
    TargetSize { got: usize, expected: usize },
    #[error("target label {label} outside 0..{classes} and not IGNORE")]
    Label { label: u8, classes: usize },
    #[error("{got} class weights for {expected} classes")]
    Weights { got: usize, expected: usize },
    #[error("invalid class weights: {0}")]
    BadWeights(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

pub type Result<T> = std::result::Result<T, LossError>;

/// Positive, finite per-class cross-entropy weights.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassWeights(Vec<f64>);

impl ClassWeights {
    pub fn new(w: Vec<f64>) -> Result<Self> {
        if w.is_empty() || w.iter().any(|v| !v.is_finite() || *v <= 0.0) {
            return Err(LossError::BadWeights(format!("{w:?}")));
        }
        Ok(Self(w))
    }

    pub fn uniform(classes: usize) -> Self {
        Self(vec![1.0; classes])
    }

    /// `w_c = 1 / sqrt(f_c + 1e-4)` normalized to mean 1, where `f_c` are the
    /// per-class frequencies (counts are normalized to fractions first).
    pub fn from_frequencies(freq: &[f64]) -> Result<Self> {
        let total: f64 = freq.iter().sum();
        if freq.is_empty() || freq.iter().any(|f| !f.is_finite() || *f < 0.0) {
            return Err(LossError::BadWeights(format!("frequencies {freq:?}")));
        }
        let frac = |f: f64| if total > 0.0 { f / total } else { 0.0 };
        let raw: Vec<f64> = freq.iter().map(|&f| 1.0 / (frac(f) + FREQ_FLOOR).sqrt()).collect();
        let mean = raw.iter().sum::<f64>() / raw.len() as f64;
        Self::new(raw.into_iter().map(|w| w / mean).collect())
    }

    /// Per-class pixel counts over labels (IGNORE skipped).
    pub fn count_labels(labels: impl IntoIterator<Item = u8>, classes: usize) -> Vec<f64> {
        let mut counts = vec![0.0; classes];
        for l in labels {
            if (l as usize) < classes {
                counts[l as usize] += 1.0;
            }
        }
        counts
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

/// Checks shapes/labels and returns `(batch, classes, pixels per image)`.
fn geometry<T: Real>(logits: &Tensor<T>, target: &[u8]) -> Result<(usize, usize, usize)> {
    let s = logits.shape();
    if s.len() != 4 {
        return Err(TensorError::ShapeMismatch { op: "loss", detail: format!("logits {s:?}, expected [B,K,H,W]") }.into());
    }
    let (b, k, hw) = (s[0], s[1], s[2] * s[3]);
    if target.len() != b * hw {
        return Err(LossError::TargetSize { got: target.len(), expected: b * hw });
    }
    if let Some(&label) = target.iter().find(|&&l| l != IGNORE && l as usize >= k) {
        return Err(LossError::Label { label, classes: k });
    }
    Ok((b, k, hw))
}

/// Constant `[B, K, H, W]` tensor holding `value(pixel, label)` at each target's
/// class slot and zero elsewhere (including IGNORE pixels).
fn scatter_target<T: Real>(shape: &[usize], target: &[u8], value: impl Fn(usize, u8) -> f64) -> Tensor<T> {
    let (b, k, hw) = (shape[0], shape[1], shape[2] * shape[3]);
    let mut data = vec![T::zero(); b * k * hw];
    for (i, &t) in target.iter().enumerate() {
        if t != IGNORE {
            let (bi, p) = (i / hw, i % hw);
            data[(bi * k + t as usize) * hw + p] = T::from_f64(value(i, t));
        }
    }
    Tensor::from_vec(data, shape)
}

/// `-sum(log_softmax(logits) * S)` for a selection tensor built from per-pixel
/// scales; a zero-valued, zero-gradient result when nothing is selected.
fn selected_nll<T: Real>(logits: &Tensor<T>, target: &[u8], scale: impl Fn(usize, u8) -> f64) -> Result<Tensor<T>> {
    let sel = scatter_target::<T>(logits.shape(), target, scale);
    Ok(logits.log_softmax(1)?.mul(&sel)?.sum().neg())
}

/// Mean over non-IGNORE pixels of `w[t] * -log softmax(logits)[t]`.
pub fn wce_loss<T: Real>(logits: &Tensor<T>, target: &[u8], weights: &ClassWeights) -> Result<Tensor<T>> {
    let (_, k, _) = geometry(logits, target)?;
    if weights.len() != k {
        return Err(LossError::Weights { got: weights.len(), expected: k });
    }
    let n = target.iter().filter(|&&t| t != IGNORE).count();
    let norm = if n == 0 { 0.0 } else { 1.0 / n as f64 };
    let w = weights.as_slice();
    selected_nll(logits, target, |_, t| w[t as usize] * norm)
}

/// Per-class soft statistics `(intersection, prob mass, target mass)` as `[K]`
/// tensors, plus the presence mask of target classes.
fn soft_stats<T: Real>(logits: &Tensor<T>, target: &[u8]) -> Result<(Tensor<T>, Tensor<T>, Vec<f64>, Vec<bool>)> {
    let (_, k, hw) = geometry(logits, target)?;
    let shape = logits.shape().to_vec();
    let onehot = scatter_target::<T>(&shape, target, |_, _| 1.0);
    let mut valid = vec![T::zero(); shape[0] * hw];
    for (v, &t) in valid.iter_mut().zip(target) {
        if t != IGNORE {
            *v = T::one();
        }
    }
    let valid = Tensor::from_vec(valid, &[shape[0], 1, shape[2], shape[3]]);
    let p = logits.softmax(1)?.mul(&valid)?;
    let inter = p.mul(&onehot)?.sum_axes_keepdim(&[0, 2, 3])?.reshape(&[k])?;
    let mass = p.sum_axes_keepdim(&[0, 2, 3])?.reshape(&[k])?;
    let mut tmass = vec![0.0; k];
    for &t in target.iter().filter(|&&t| t != IGNORE) {
        tmass[t as usize] += 1.0;
    }
    let present = tmass.iter().map(|&m| m > 0.0).collect();
    Ok((inter, mass, tmass, present))
}

/// `1 - mean_c(score_c)` over present classes.
fn one_minus_present_mean<T: Real>(scores: &Tensor<T>, present: &[bool]) -> Result<Tensor<T>> {
    let n = present.iter().filter(|&&p| p).count();
    if n == 0 {
        return Ok(scores.mul_scalar(T::zero()).sum());
    }
    let sel: Vec<T> = present.iter().map(|&p| if p { T::from_f64(1.0 / n as f64) } else { T::zero() }).collect();
    let mean = scores.mul(&Tensor::from_vec(sel, &[present.len()]))?.sum();
    Ok(mean.neg().add_scalar(T::one()))
}

/// Soft Dice: `1 - mean_c 2 sum(p_c y_c) / (sum p_c + sum y_c + eps)` over present classes.
pub fn dice_loss<T: Real>(logits: &Tensor<T>, target: &[u8]) -> Result<Tensor<T>> {
    let (inter, mass, tmass, present) = soft_stats(logits, target)?;
    let k = tmass.len();
    let denom = mass.add(&Tensor::from_vec(tmass.iter().map(|&m| T::from_f64(m + SOFT_EPS)).collect(), &[k]))?;
    let dice = inter.mul_scalar(T::from_f64(2.0)).div(&denom)?;
    one_minus_present_mean(&dice, &present)
}

/// Soft Jaccard: `1 - mean_c sum(p_c y_c) / (sum p_c + sum y_c - sum(p_c y_c) + eps)`.
pub fn iou_loss<T: Real>(logits: &Tensor<T>, target: &[u8]) -> Result<Tensor<T>> {
    let (inter, mass, tmass, present) = soft_stats(logits, target)?;
    let k = tmass.len();
    let denom = mass
        .add(&Tensor::from_vec(tmass.iter().map(|&m| T::from_f64(m + SOFT_EPS)).collect(), &[k]))?
        .sub(&inter)?;
    let iou = inter.div(&denom)?;
    one_minus_present_mean(&iou, &present)
}

/// Pixels (non-IGNORE) with a 4-neighbour in the same image carrying a different
/// non-IGNORE label.
pub fn boundary_mask(target: &[u8], batch: usize, height: usize, width: usize) -> Vec<bool> {
    let hw = height * width;
    let mut mask = vec![false; target.len()];
    for b in 0..batch {
        for y in 0..height {
            for x in 0..width {
                let i = b * hw + y * width + x;
                let t = target[i];
                if t == IGNORE {
                    continue;
                }
                let differs = |j: usize| target[j] != IGNORE && target[j] != t;
                mask[i] = (y > 0 && differs(i - width))
                    || (y + 1 < height && differs(i + width))
                    || (x > 0 && differs(i - 1))
                    || (x + 1 < width && differs(i + 1));
            }
        }
    }
    mask
}

/// Unweighted cross-entropy averaged over [`boundary_mask`] pixels (0 if there are none).
pub fn boundary_loss<T: Real>(logits: &Tensor<T>, target: &[u8]) -> Result<Tensor<T>> {
    let (b, _, _) = geometry(logits, target)?;
    let mask = boundary_mask(target, b, logits.dim(2), logits.dim(3));
    let n = mask.iter().filter(|&&m| m).count();
    let norm = if n == 0 { 0.0 } else { 1.0 / n as f64 };
    selected_nll(logits, target, |i, _| if mask[i] { norm } else { 0.0 })
}

/// Weights of the four loss terms and of the auxiliary heads.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossConfig {
    /// `[wce, dice, boundary, iou]`.
    pub lambda: [f64; 4],
    pub aux_weight: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self { lambda: [1.0; 4], aux_weight: 0.4 }
    }
}

/// Values of the individual terms, for logging.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossTerms {
    pub wce: f64,
    pub dice: f64,
    pub boundary: f64,
    pub iou: f64,
}

#[derive(Debug, Clone)]
pub struct LossOutput<T: Real> {
    pub total: Tensor<T>,
    pub main: LossTerms,
    /// Weighted sum of the four terms for each auxiliary head (before `aux_weight`).
    pub aux: Vec<f64>,
}

/// `sum_i lambda_i L_i(logits)` and the individual terms.
pub fn composite_loss<T: Real>(
    logits: &Tensor<T>,
    target: &[u8],
    weights: &ClassWeights,
    lambda: &[f64; 4],
) -> Result<(Tensor<T>, LossTerms)> {
    let mut total: Option<Tensor<T>> = None;
    let mut terms = LossTerms::default();
    let mut acc = |l: Tensor<T>, w: f64, slot: &mut f64| -> Result<()> {
        *slot = l.item().to_f64();
        if w != 0.0 {
            let l = l.mul_scalar(T::from_f64(w));
            total = Some(match total.take() {
                Some(t) => t.add(&l)?,
                None => l,
            });
        }
        Ok(())
    };
    acc(wce_loss(logits, target, weights)?, lambda[0], &mut terms.wce)?;
    acc(dice_loss(logits, target)?, lambda[1], &mut terms.dice)?;
    acc(boundary_loss(logits, target)?, lambda[2], &mut terms.boundary)?;
    acc(iou_loss(logits, target)?, lambda[3], &mut terms.iou)?;
    let total = total.unwrap_or_else(|| logits.mul_scalar(T::zero()).sum());
    Ok((total, terms))
}

/// Nearest-neighbour downsampling of a `[B, H, W]` label raster: output pixel
/// `(i, j)` copies source `(floor(i * H / h), floor(j * W / w))`.
pub fn downsample_labels(target: &[u8], batch: usize, src: (usize, usize), dst: (usize, usize)) -> Vec<u8> {
    let (h, w) = src;
    let (oh, ow) = dst;
    let mut out = Vec::with_capacity(batch * oh * ow);
    for b in 0..batch {
        for i in 0..oh {
            let y = i * h / oh;
            for j in 0..ow {
                out.push(target[b * h * w + y * w + j * w / ow]);
            }
        }
    }
    out
}

/// Main composite loss plus `aux_weight` times the composite loss of every
/// auxiliary head against the nearest-downsampled target.
pub fn total_loss<T: Real>(
    main: &Tensor<T>,
    aux: &[Tensor<T>],
    target: &[u8],
    weights: &ClassWeights,
    cfg: &LossConfig,
) -> Result<LossOutput<T>> {
    let (mut total, terms) = composite_loss(main, target, weights, &cfg.lambda)?;
    let (b, h, w) = (main.dim(0), main.dim(2), main.dim(3));
    let mut aux_vals = Vec::with_capacity(aux.len());
    for a in aux {
        let t = downsample_labels(target, b, (h, w), (a.dim(2), a.dim(3)));
        let (l, _) = composite_loss(a, &t, weights, &cfg.lambda)?;
        aux_vals.push(l.item().to_f64());
        if cfg.aux_weight != 0.0 {
            total = total.add(&l.mul_scalar(T::from_f64(cfg.aux_weight)))?;
        }
    }
    Ok(LossOutput { total, main: terms, aux: aux_vals })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn logits(k: usize, h: usize, w: usize, f: impl Fn(usize, usize) -> f64) -> Tensor<f64> {
        let hw = h * w;
        Tensor::from_vec((0..k * hw).map(|i| f(i / hw, i % hw)).collect(), &[1, k, h, w])
    }

    #[test]
    fn uniform_logits_give_ln_k() {
        let l = logits(19, 2, 3, |_, _| 0.7);
        let t = [0u8, 5, 18, 3, IGNORE, 9];
        let v = wce_loss(&l, &t, &ClassWeights::uniform(19)).unwrap().item();
        assert!((v - 19f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn doubling_a_weight_doubles_its_share() {
        let l = logits(2, 1, 2, |c, p| if c == p { 0.3 } else { -0.4 });
        let t = [0u8, 1];
        let base = wce_loss(&l, &t, &ClassWeights::uniform(2)).unwrap().item();
        let doubled = wce_loss(&l, &t, &ClassWeights::new(vec![2.0, 1.0]).unwrap()).unwrap().item();
        let p0 = -(0.3f64.exp() / (0.3f64.exp() + (-0.4f64).exp())).ln();
        assert!((base - p0).abs() < 1e-12, "symmetric pixels have equal CE");
        assert!((doubled - base - p0 / 2.0).abs() < 1e-12);
    }

    #[test]
    fn all_ignore_is_zero() {
        let l = logits(3, 2, 2, |c, p| (c + p) as f64).requires_grad();
        let t = [IGNORE; 4];
        for v in [
            wce_loss(&l, &t, &ClassWeights::uniform(3)).unwrap(),
            dice_loss(&l, &t).unwrap(),
            iou_loss(&l, &t).unwrap(),
            boundary_loss(&l, &t).unwrap(),
        ] {
            assert_eq!(v.item(), 0.0);
            assert!(v.backward().get_or_zeros(&l).iter().all(|&g| g == 0.0));
        }
    }

    #[test]
    fn confident_correct_prediction_is_near_zero() {
        let t = [0u8, 0, 1, 1, 2, 2];
        let l = logits(3, 2, 3, |c, p| if c == t[p] as usize { 30.0 } else { -30.0 });
        assert!(wce_loss(&l, &t, &ClassWeights::uniform(3)).unwrap().item() < 1e-6);
        assert!(dice_loss(&l, &t).unwrap().item() < 1e-3);
        assert!(iou_loss(&l, &t).unwrap().item() < 1e-3);
        assert!(boundary_loss(&l, &t).unwrap().item() < 1e-6);
    }

    #[test]
    fn disjoint_prediction_gives_one() {
        let t = [0u8, 0, 1, 1];
        let l = logits(3, 2, 2, |c, _| if c == 2 { 40.0 } else { -40.0 });
        assert!((dice_loss(&l, &t).unwrap().item() - 1.0).abs() < 1e-9);
        assert!((iou_loss(&l, &t).unwrap().item() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn boundary_of_half_plane() {
        let (h, w) = (6, 4);
        let t: Vec<u8> = (0..h * w).map(|i| if i / w < 3 { 0 } else { 1 }).collect();
        let m = boundary_mask(&t, 1, h, w);
        let rows: Vec<usize> = (0..h * w).filter(|&i| m[i]).map(|i| i / w).collect();
        assert_eq!(rows, [2, 2, 2, 2, 3, 3, 3, 3]);
        assert!(boundary_mask(&[4u8; 9], 1, 3, 3).iter().all(|&b| !b));
    }

    #[test]
    fn nearest_downsample() {
        let t: Vec<u8> = (0..16).collect();
        assert_eq!(downsample_labels(&t, 1, (4, 4), (2, 2)), [0, 2, 8, 10]);
        assert_eq!(downsample_labels(&t, 1, (4, 4), (4, 4)), t);
    }

    #[test]
    fn class_weight_rules() {
        let w = ClassWeights::from_frequencies(&[0.25; 4]).unwrap();
        assert!(w.as_slice().iter().all(|&v| (v - 1.0).abs() < 1e-12));
        let w = ClassWeights::from_frequencies(&[100.0, 1.0]).unwrap();
        let (f0, f1) = (100.0 / 101.0, 1.0 / 101.0);
        let expected = ((f0 + FREQ_FLOOR) / (f1 + FREQ_FLOOR)).sqrt();
        assert!((w.as_slice()[1] / w.as_slice()[0] - expected).abs() < 1e-12);
        assert!(expected > 9.9 && expected < 10.0);
        let w = ClassWeights::from_frequencies(&[10.0, 0.0]).unwrap();
        assert!(w.as_slice().iter().all(|v| v.is_finite() && *v > 0.0));
        assert!(ClassWeights::new(vec![1.0, 0.0]).is_err());
    }

    #[test]
    fn rejects_bad_targets() {
        let l = logits(2, 1, 2, |_, _| 0.0);
        assert!(matches!(wce_loss(&l, &[0u8], &ClassWeights::uniform(2)), Err(LossError::TargetSize { .. })));
        assert!(matches!(dice_loss(&l, &[0u8, 2]), Err(LossError::Label { label: 2, .. })));
        assert!(matches!(wce_loss(&l, &[0u8, 1], &ClassWeights::uniform(3)), Err(LossError::Weights { .. })));
    }
}
