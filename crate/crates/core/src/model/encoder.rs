//! Stem, windowed/global attention blocks and stage transitions.
//!
//! Blocks work on channel-last `[B, H, W, C]` maps so attention tokens and MLP
//! linears need no transposes; stage outputs are handed out as NCHW.

use crate::tensor::{drop_path, Conv2dOptions, MhaWeights, ParamId, ParamStore, Real, Tensor, MASK_NEG};

use super::{Builder, Conv, ForwardCtx, Linear, ModelConfig, MultiScaleFeatures, Norm, PosMode, Result};

/// Per-pixel projection, LayerNorm, GELU, 7x7 overlapping patch convolution and
/// the coarse positional grid.
#[derive(Debug, Clone)]
pub struct Stem {
    pub proj: Linear,
    pub norm: Norm,
    pub patch: Conv,
    /// `(table [rows, cols], per-channel scale [C])`.
    pub pos: Option<(ParamId, ParamId)>,
}

impl Stem {
    pub(crate) fn new(b: &mut Builder<'_>, cfg: &ModelConfig) -> Result<Self> {
        let c = cfg.stem_channels;
        b.scoped("stem", |b| {
            let proj = Linear::new(b, "proj", cfg.in_channels, c)?;
            let norm = Norm::new(b, "norm", c, cfg.ln_eps)?;
            let patch = Conv::new(b, "patch", c, c, 7, Conv2dOptions::padded(3))?;
            let pos = match cfg.pos_mode {
                PosMode::Grid => {
                    let (r, k) = cfg.pos_table_shape;
                    Some((b.trunc_normal("pos_table", &[r, k])?, b.constant("pos_scale", &[c], 1.0)?))
                }
                PosMode::Off => None,
            };
            Ok(Self { proj, norm, patch, pos })
        })
    }

    /// `[B, Cin, H, W]` to `[B, C, H, W]`.
    pub fn forward<T: Real>(&self, store: &ParamStore<T>, x: &Tensor<T>) -> Result<Tensor<T>> {
        let t = x.permute(&[0, 2, 3, 1])?;
        let t = self.norm.last(store, &self.proj.forward(store, &t)?)?.gelu();
        let t = self.patch.forward(store, &t.permute(&[0, 3, 1, 2])?)?;
        match self.pos {
            Some((table, scale)) => add_pos_embed(&t, store.get(table), store.get(scale)),
            None => Ok(t),
        }
    }
}

/// `y[b, c] = x[b, c] + scale[c] * up(table)`, with the table bilinearly resized to the map.
pub fn add_pos_embed<T: Real>(x: &Tensor<T>, table: &Tensor<T>, scale: &Tensor<T>) -> Result<Tensor<T>> {
    let (c, h, w) = (x.dim(1), x.dim(2), x.dim(3));
    let grid = table.reshape(&[1, 1, table.dim(0), table.dim(1)])?.upsample_bilinear(h, w)?;
    let pos = grid.mul(&scale.reshape(&[1, c, 1, 1])?)?;
    Ok(x.add(&pos)?)
}

/// Geometry needed to undo [`window_partition`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct WindowLayout {
    pub batch: usize,
    pub height: usize,
    pub width: usize,
    pub rows: usize,
    pub cols: usize,
    pub padded_height: usize,
    pub padded_width: usize,
}

impl WindowLayout {
    pub fn new(batch: usize, height: usize, width: usize, rows: usize, cols: usize) -> Self {
        Self {
            batch,
            height,
            width,
            rows,
            cols,
            padded_height: height.div_ceil(rows) * rows,
            padded_width: width.div_ceil(cols) * cols,
        }
    }

    pub fn windows_per_image(&self) -> usize {
        (self.padded_height / self.rows) * (self.padded_width / self.cols)
    }

    pub fn tokens(&self) -> usize {
        self.rows * self.cols
    }

    pub fn is_padded(&self) -> bool {
        self.padded_height != self.height || self.padded_width != self.width
    }

    /// `[B * windows, 1, tokens]` additive mask hiding zero-padded keys.
    pub fn key_mask<T: Real>(&self) -> Tensor<T> {
        let nw = self.padded_width / self.cols;
        let per_image = self.windows_per_image();
        let mut data = Vec::with_capacity(self.batch * per_image * self.tokens());
        for _ in 0..self.batch {
            for win in 0..per_image {
                let (wi, wj) = (win / nw, win % nw);
                for r in 0..self.rows {
                    for c in 0..self.cols {
                        let outside = wi * self.rows + r >= self.height || wj * self.cols + c >= self.width;
                        data.push(if outside { T::from_f64(MASK_NEG) } else { T::zero() });
                    }
                }
            }
        }
        Tensor::from_vec(data, &[self.batch * per_image, 1, self.tokens()])
    }
}

/// Zero-pads a channel-last `[B, H, W, C]` map to whole windows and tiles it into
/// `[B * windows, rows * cols, C]` token sequences (windows in row-major order).
pub fn window_partition<T: Real>(x: &Tensor<T>, rows: usize, cols: usize) -> Result<(Tensor<T>, WindowLayout)> {
    let (b, h, w, c) = (x.dim(0), x.dim(1), x.dim(2), x.dim(3));
    let layout = WindowLayout::new(b, h, w, rows, cols);
    let (hp, wp) = (layout.padded_height, layout.padded_width);
    let x = if layout.is_padded() { x.pad(&[(0, 0), (0, hp - h), (0, wp - w), (0, 0)])? } else { x.clone() };
    let t = x
        .reshape(&[b, hp / rows, rows, wp / cols, cols, c])?
        .permute(&[0, 1, 3, 2, 4, 5])?
        .reshape(&[b * layout.windows_per_image(), rows * cols, c])?;
    Ok((t, layout))
}

/// Inverse of [`window_partition`], cropping the padding.
pub fn window_unpartition<T: Real>(t: &Tensor<T>, layout: &WindowLayout) -> Result<Tensor<T>> {
    let l = layout;
    let c = t.dim(2);
    let x = t
        .reshape(&[l.batch, l.padded_height / l.rows, l.padded_width / l.cols, l.rows, l.cols, c])?
        .permute(&[0, 1, 3, 2, 4, 5])?
        .reshape(&[l.batch, l.padded_height, l.padded_width, c])?;
    if !l.is_padded() {
        return Ok(x);
    }
    Ok(x.narrow(1, 0, l.height)?.narrow(2, 0, l.width)?)
}

/// `[H*W, H*W]` additive mask that is zero between tokens in the same window and
/// [`MASK_NEG`] across windows.
pub fn block_diagonal_mask<T: Real>(height: usize, width: usize, rows: usize, cols: usize) -> Tensor<T> {
    let n = height * width;
    let unit = |i: usize| ((i / width) / rows, (i % width) / cols);
    let mut data = vec![T::from_f64(MASK_NEG); n * n];
    for i in 0..n {
        for j in 0..n {
            if unit(i) == unit(j) {
                data[i * n + j] = T::zero();
            }
        }
    }
    Tensor::from_vec(data, &[n, n])
}

/// How a block's attention sublayer groups tokens.
#[derive(Debug, Clone)]
pub enum AttentionMode<T: Real> {
    /// Attention within non-overlapping `(rows, cols)` windows.
    Windowed { rows: usize, cols: usize },
    /// Every token attends to every token.
    Global,
    /// Global token sequence with an explicit additive `[H*W, H*W]` mask.
    Masked(Tensor<T>),
}

/// Pre-norm transformer block: masked attention sublayer and a depthwise-conv MLP
/// sublayer, each wrapped in a stochastic-depth residual.
#[derive(Debug, Clone)]
pub struct HieraBlock {
    pub norm1: Norm,
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
    pub norm2: Norm,
    pub fc1: Linear,
    pub dw: Conv,
    pub fc2: Linear,
    pub heads: usize,
}

impl HieraBlock {
    pub(crate) fn new(b: &mut Builder<'_>, name: &str, c: usize, heads: usize, mlp_ratio: usize, eps: f64) -> Result<Self> {
        let hidden = c * mlp_ratio;
        b.scoped(name, |b| {
            let norm1 = Norm::new(b, "norm1", c, eps)?;
            let (q, k, v, o) = b.scoped("attn", |b| -> Result<_> {
                Ok((
                    Linear::new(b, "q", c, c)?,
                    Linear::new(b, "k", c, c)?,
                    Linear::new(b, "v", c, c)?,
                    Linear::new(b, "o", c, c)?,
                ))
            })?;
            let norm2 = Norm::new(b, "norm2", c, eps)?;
            let (fc1, dw, fc2) = b.scoped("mlp", |b| -> Result<_> {
                Ok((
                    Linear::new(b, "fc1", c, hidden)?,
                    Conv::new(b, "dw", hidden, hidden, 3, Conv2dOptions::depthwise(hidden, 1))?,
                    Linear::new(b, "fc2", hidden, c)?,
                ))
            })?;
            Ok(Self { norm1, q, k, v, o, norm2, fc1, dw, fc2, heads })
        })
    }

    fn mha_weights<T: Real>(&self, store: &ParamStore<T>) -> MhaWeights<T> {
        let g = |id| store.get(id).clone();
        MhaWeights {
            wq: g(self.q.weight),
            bq: g(self.q.bias),
            wk: g(self.k.weight),
            bk: g(self.k.bias),
            wv: g(self.v.weight),
            bv: g(self.v.bias),
            wo: g(self.o.weight),
            bo: g(self.o.bias),
        }
    }

    /// Attention sublayer output (before the residual) for a normalized `[B, H, W, C]` map.
    pub fn attention<T: Real>(&self, store: &ParamStore<T>, z: &Tensor<T>, mode: &AttentionMode<T>) -> Result<Tensor<T>> {
        let (b, h, w, c) = (z.dim(0), z.dim(1), z.dim(2), z.dim(3));
        let weights = self.mha_weights(store);
        match mode {
            AttentionMode::Windowed { rows, cols } => {
                let (tokens, layout) = window_partition(z, *rows, *cols)?;
                let mask = layout.is_padded().then(|| layout.key_mask());
                let out = tokens.masked_mha(&weights, self.heads, mask.as_ref())?;
                window_unpartition(&out, &layout)
            }
            AttentionMode::Global | AttentionMode::Masked(_) => {
                let mask = match mode {
                    AttentionMode::Masked(m) => Some(m),
                    _ => None,
                };
                let out = z.reshape(&[b, h * w, c])?.masked_mha(&weights, self.heads, mask)?;
                Ok(out.reshape(&[b, h, w, c])?)
            }
        }
    }

    /// `Lin(GELU(DWConv3x3(GELU(Lin(z)))))` on a `[B, H, W, C]` map.
    pub fn mlp<T: Real>(&self, store: &ParamStore<T>, z: &Tensor<T>, skip_dwconv: bool) -> Result<Tensor<T>> {
        let t = self.fc1.forward(store, z)?.gelu();
        let t = if skip_dwconv {
            t
        } else {
            self.dw.forward(store, &t.permute(&[0, 3, 1, 2])?)?.permute(&[0, 2, 3, 1])?
        };
        self.fc2.forward(store, &t.gelu())
    }

    pub fn forward<T: Real>(
        &self,
        store: &ParamStore<T>,
        x: &Tensor<T>,
        mode: &AttentionMode<T>,
        drop_rate: f64,
        ctx: &mut ForwardCtx,
    ) -> Result<Tensor<T>> {
        let a = self.attention(store, &self.norm1.last(store, x)?, mode)?;
        let x = x.add(&drop_path(&a, drop_rate, ctx.training, &mut ctx.rng)?)?;
        let m = self.mlp(store, &self.norm2.last(store, &x)?, ctx.skip_dwconv)?;
        Ok(x.add(&drop_path(&m, drop_rate, ctx.training, &mut ctx.rng)?)?)
    }
}

/// 2x2 mean pool followed by a 1x1 channel-doubling projection (NCHW).
#[derive(Debug, Clone)]
pub struct Transition {
    pub proj: Conv,
}

impl Transition {
    pub(crate) fn new(b: &mut Builder<'_>, name: &str, c: usize) -> Result<Self> {
        b.scoped(name, |b| Ok(Self { proj: Conv::new(b, "proj", c, 2 * c, 1, Conv2dOptions::default())? }))
    }

    pub fn forward<T: Real>(&self, store: &ParamStore<T>, x: &Tensor<T>) -> Result<Tensor<T>> {
        let (h, w) = (x.dim(2), x.dim(3));
        let x = if h % 2 == 1 || w % 2 == 1 { x.pad(&[(0, 0), (0, 0), (0, h % 2), (0, w % 2)])? } else { x.clone() };
        self.proj.forward(store, &x.pool2d_mean(2)?)
    }
}

#[derive(Debug, Clone)]
pub struct Encoder {
    pub stem: Stem,
    pub blocks: Vec<HieraBlock>,
    pub transitions: Vec<Transition>,
}

impl Encoder {
    pub(crate) fn new(b: &mut Builder<'_>, cfg: &ModelConfig) -> Result<Self> {
        let stem = Stem::new(b, cfg)?;
        let stages = cfg.block_stages();
        let blocks = b.scoped("blocks", |b| {
            stages
                .iter()
                .enumerate()
                .map(|(i, &s)| {
                    HieraBlock::new(b, &i.to_string(), cfg.stage_channels[s], cfg.heads[s], cfg.mlp_ratio, cfg.ln_eps)
                })
                .collect::<Result<Vec<_>>>()
        })?;
        let transitions = b.scoped("transitions", |b| {
            (0..3).map(|s| Transition::new(b, &s.to_string(), cfg.stage_channels[s])).collect::<Result<Vec<_>>>()
        })?;
        Ok(Self { stem, blocks, transitions })
    }

    pub fn forward<T: Real>(
        &self,
        store: &ParamStore<T>,
        x: &Tensor<T>,
        cfg: &ModelConfig,
        ctx: &mut ForwardCtx,
    ) -> Result<MultiScaleFeatures<T>> {
        let stages = cfg.block_stages();
        let mut x = self.stem.forward(store, x)?;
        let mut maps = Vec::with_capacity(4);
        for s in 0..4 {
            let mut t = x.permute(&[0, 2, 3, 1])?;
            for (i, block) in self.blocks.iter().enumerate().filter(|(i, _)| stages[*i] == s) {
                let mode = if cfg.is_global(i) {
                    AttentionMode::Global
                } else {
                    let (rows, cols) = cfg.window_sizes[s];
                    AttentionMode::Windowed { rows, cols }
                };
                t = block.forward(store, &t, &mode, cfg.drop_rate(i), ctx)?;
            }
            let f = t.permute(&[0, 3, 1, 2])?;
            drop(t);
            if s < 3 {
                x = self.transitions[s].forward(store, &f)?;
            }
            maps.push(f);
        }
        let maps: [Tensor<T>; 4] = maps.try_into().expect("four stages");
        Ok(MultiScaleFeatures { maps })
    }
}
