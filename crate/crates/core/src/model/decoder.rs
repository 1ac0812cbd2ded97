//! Receptive-field-block decoder with per-scale auxiliary heads.

use crate::tensor::{Conv2dOptions, ParamStore, Real, Tensor};

use super::{Builder, Conv, ModelConfig, ModelOutput, MultiScaleFeatures, Norm, Result};

/// Convolution followed by channel LayerNorm and GELU.
#[derive(Debug, Clone)]
pub struct ConvNormAct {
    pub conv: Conv,
    pub norm: Norm,
}

impl ConvNormAct {
    fn new(b: &mut Builder<'_>, name: &str, cin: usize, cout: usize, kernel: usize, opts: Conv2dOptions, eps: f64) -> Result<Self> {
        b.scoped(name, |b| Ok(Self { conv: Conv::new(b, "conv", cin, cout, kernel, opts)?, norm: Norm::new(b, "norm", cout, eps)? }))
    }

    fn forward<T: Real>(&self, store: &ParamStore<T>, x: &Tensor<T>) -> Result<Tensor<T>> {
        Ok(self.norm.channels(store, &self.conv.forward(store, x)?)?.gelu())
    }
}

/// Four parallel branches (1x1; 1x1 then 3x3 at dilation 1, 3, 5), concatenated,
/// fused by a 1x1 convolution and added to a 1x1 shortcut:
/// `GELU(LN(fuse(branches)) + LN(shortcut(x)))`.
#[derive(Debug, Clone)]
pub struct Rfb {
    pub branches: Vec<Vec<ConvNormAct>>,
    pub fuse: Conv,
    pub fuse_norm: Norm,
    pub shortcut: Conv,
    pub shortcut_norm: Norm,
}

impl Rfb {
    pub(crate) fn new(b: &mut Builder<'_>, name: &str, cin: usize, cout: usize, eps: f64) -> Result<Self> {
        let q = cout / 4;
        b.scoped(name, |b| {
            let mut branches = Vec::with_capacity(4);
            for (i, dilation) in [None, Some(1), Some(3), Some(5)].into_iter().enumerate() {
                let branch = b.scoped(&format!("branch{i}"), |b| -> Result<_> {
                    let mut layers = vec![ConvNormAct::new(b, "reduce", cin, q, 1, Conv2dOptions::default(), eps)?];
                    if let Some(d) = dilation {
                        layers.push(ConvNormAct::new(b, "dilated", q, q, 3, Conv2dOptions::dilated(d), eps)?);
                    }
                    Ok(layers)
                })?;
                branches.push(branch);
            }
            Ok(Self {
                branches,
                fuse: Conv::new(b, "fuse", cout, cout, 1, Conv2dOptions::default())?,
                fuse_norm: Norm::new(b, "fuse_norm", cout, eps)?,
                shortcut: Conv::new(b, "shortcut", cin, cout, 1, Conv2dOptions::default())?,
                shortcut_norm: Norm::new(b, "shortcut_norm", cout, eps)?,
            })
        })
    }

    pub fn forward<T: Real>(&self, store: &ParamStore<T>, x: &Tensor<T>) -> Result<Tensor<T>> {
        let mut outs = Vec::with_capacity(self.branches.len());
        for branch in &self.branches {
            let mut t = x.clone();
            for layer in branch {
                t = layer.forward(store, &t)?;
            }
            outs.push(t);
        }
        let fused = self.fuse.forward(store, &Tensor::concat(&outs, 1)?)?;
        drop(outs);
        let main = self.fuse_norm.channels(store, &fused)?;
        let skip = self.shortcut_norm.channels(store, &self.shortcut.forward(store, x)?)?;
        Ok(main.add(&skip)?.gelu())
    }
}

/// RFB per scale, auxiliary 1x1 heads, then upsample, concatenate, 3x3 reduce and classify.
#[derive(Debug, Clone)]
pub struct Decoder {
    pub rfbs: Vec<Rfb>,
    pub aux: Vec<Conv>,
    pub reduce: ConvNormAct,
    pub classifier: Conv,
}

impl Decoder {
    pub(crate) fn new(b: &mut Builder<'_>, cfg: &ModelConfig) -> Result<Self> {
        let d = cfg.decoder_channels;
        let k = cfg.num_classes;
        b.scoped("decoder", |b| {
            let rfbs = (0..4)
                .map(|s| Rfb::new(b, &format!("rfb{}", s + 1), cfg.stage_channels[s], d, cfg.ln_eps))
                .collect::<Result<Vec<_>>>()?;
            let aux = (0..4)
                .map(|s| Conv::new(b, &format!("aux{}", s + 1), d, k, 1, Conv2dOptions::default()))
                .collect::<Result<Vec<_>>>()?;
            let reduce = ConvNormAct::new(b, "fuse", 4 * d, d, 3, Conv2dOptions::padded(1), cfg.ln_eps)?;
            let classifier = Conv::new(b, "classifier", d, k, 1, Conv2dOptions::default())?;
            Ok(Self { rfbs, aux, reduce, classifier })
        })
    }

    pub fn forward<T: Real>(
        &self,
        store: &ParamStore<T>,
        feats: &MultiScaleFeatures<T>,
        out_hw: (usize, usize),
    ) -> Result<ModelOutput<T>> {
        let (h, w) = out_hw;
        let mut aux = Vec::with_capacity(4);
        let mut ups = Vec::with_capacity(4);
        for ((rfb, head), f) in self.rfbs.iter().zip(&self.aux).zip(&feats.maps) {
            let r = rfb.forward(store, f)?;
            aux.push(head.forward(store, &r)?);
            ups.push(if r.dim(2) == h && r.dim(3) == w { r } else { r.upsample_bilinear(h, w)? });
        }
        let cat = Tensor::concat(&ups, 1)?;
        drop(ups);
        let t = self.reduce.forward(store, &cat)?;
        drop(cat);
        let main = self.classifier.forward(store, &t)?;
        Ok(ModelOutput { main, aux })
    }
}
