//! Central finite-difference checks of every differentiable op, the losses and
//! the end-to-end model.
//!
//! Each check reduces the op output to a scalar with a fixed random projection
//! `L = sum(y * R)`, compares `dL/dx` from the tape against
//! `(L(x + h e_i) - L(x - h e_i)) / 2h` at sampled coordinates, and reports the
//! worst relative error `|a - n| / max(|a|, |n|, floor)`.

use std::fmt;
use std::time::Instant;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::loss::{boundary_loss, dice_loss, iou_loss, total_loss, wce_loss, ClassWeights, LossConfig};
use crate::model::{ForwardCtx, ModelConfig, RangeSam};
use crate::tensor::{drop_path, gelu_derivative, gelu_value, Conv2dOptions, MhaWeights, ParamStore, Real, Result, Tensor, MASK_NEG};


#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    F32,
    #[default]
    F64,
}

impl std::str::FromStr for Precision {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "f32" | "32" => Ok(Self::F32),
            "f64" | "64" => Ok(Self::F64),
            other => Err(format!("unknown precision {other:?} (expected f32 or f64)")),
        }
    }
}

/// A deliberately broken backward rule, to demonstrate the checker catches it.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Fault {
    /// GELU derivative scaled by 1.01.
    Gelu,
}

impl std::str::FromStr for Fault {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "gelu" => Ok(Self::Gelu),
            other => Err(format!("unknown fault {other:?} (expected gelu)")),
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct GradcheckConfig {
    pub precision: Precision,
    /// Finite-difference step.
    pub step: f64,
    pub tolerance: f64,
    /// Denominator floor of the relative error, so gradients near zero are compared absolutely.
    pub floor: f64,
    /// Coordinates sampled per op input.
    pub samples_per_input: usize,
    /// Coordinates sampled per parameter tensor in the end-to-end check.
    pub samples_per_param: usize,
    /// Raster of the end-to-end toy model.
    pub model_hw: (usize, usize),
    pub include_model: bool,
    pub fault: Option<Fault>,
    pub seed: u64,
}

impl GradcheckConfig {
    /// Step, tolerance and floor suited to the precision: `h = 1e-5`, `1e-4`,
    /// `1e-4` for 64-bit; `h = 1e-2`, `5e-2`, `1e-2` for 32-bit (a coarse smoke check: single
    /// precision cannot resolve central differences much tighter through the full model).
    pub fn new(precision: Precision) -> Self {
        let (step, tolerance, floor) = match precision {
            Precision::F64 => (1e-5, 1e-4, 1e-4),
            Precision::F32 => (1e-2, 5e-2, 1e-2),
        };
        Self {
            precision,
            step,
            tolerance,
            floor,
            samples_per_input: 24,
            samples_per_param: 2,
            model_hw: (16, 64),
            include_model: true,
            fault: None,
            seed: 0,
        }
    }
}

impl Default for GradcheckConfig {
    fn default() -> Self {
        Self::new(Precision::F64)
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct CheckResult {
    pub name: String,
    pub coords: usize,
    pub max_rel_err: f64,
    /// Worst coordinate as `(input, flat index, analytic, numeric)`.
    pub worst: Option<(String, usize, f64, f64)>,
    pub passed: bool,
}

#[derive(Debug, Clone, Serialize)]
pub struct GradcheckReport {
    pub precision: Precision,
    pub step: f64,
    pub tolerance: f64,
    pub results: Vec<CheckResult>,
    pub seconds: f64,
}

impl GradcheckReport {
    pub fn passed(&self) -> bool {
        self.results.iter().all(|r| r.passed)
    }

    pub fn failures(&self) -> impl Iterator<Item = &CheckResult> {
        self.results.iter().filter(|r| !r.passed)
    }
}

impl fmt::Display for GradcheckReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "gradient check ({:?}, h = {:e}, tolerance {:e})", self.precision, self.step, self.tolerance)?;
        for r in &self.results {
            write!(f, "  {:<4} {:<28} coords {:>4}  max rel err {:.3e}", if r.passed { "ok" } else { "FAIL" }, r.name, r.coords, r.max_rel_err)?;
            if let (false, Some((input, i, a, n))) = (r.passed, &r.worst) {
                write!(f, "  [{input}[{i}]: analytic {a:.6e} numeric {n:.6e}]")?;
            }
            writeln!(f)?;
        }
        let failed = self.failures().count();
        write!(f, "{} checks, {} failed, {:.1} s", self.results.len(), failed, self.seconds)
    }
}

pub fn rel_err(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

fn projection<T: Real>(y: &Tensor<T>, seed: u64) -> Tensor<T> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let r: Vec<T> = (0..y.numel()).map(|_| T::from_f64(rng.random_range(-1.0..1.0))).collect();
    Tensor::from_vec(r, y.shape())
}

fn reduce<T: Real>(y: &Tensor<T>, r: &Tensor<T>) -> Result<Tensor<T>> {
    Ok(y.mul(r)?.sum())
}

fn coords(n: usize, k: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    if n <= k {
        (0..n).collect()
    } else {
        let mut v = sample(rng, n, k).into_vec();
        v.sort_unstable();
        v
    }
}

struct Worst {
    floor: f64,
    max: f64,
    at: Option<(String, usize, f64, f64)>,
    coords: usize,
}

impl Worst {
    fn new(floor: f64) -> Self {
        Self { floor, max: 0.0, at: None, coords: 0 }
    }

    fn record(&mut self, input: &str, i: usize, a: f64, n: f64) {
        let e = rel_err(a, n, self.floor);
        self.coords += 1;
        if e > self.max || !e.is_finite() || self.at.is_none() {
            self.max = if e.is_finite() { e.max(self.max) } else { f64::INFINITY };
            self.at = Some((input.to_string(), i, a, n));
        }
    }

    fn finish(self, name: &str, tol: f64) -> CheckResult {
        CheckResult { name: name.to_string(), coords: self.coords, passed: self.max <= tol, max_rel_err: self.max, worst: self.at }
    }
}

/// Checks `f` with respect to every input at sampled coordinates.
pub fn check_fn<T: Real>(
    name: &str,
    inputs: &[Tensor<T>],
    f: impl Fn(&[Tensor<T>]) -> Result<Tensor<T>>,
    cfg: &GradcheckConfig,
    rng: &mut ChaCha8Rng,
) -> Result<CheckResult> {
    let leaves: Vec<Tensor<T>> = inputs.iter().map(|t| Tensor::leaf(t.to_vec(), t.shape())).collect();
    let y = f(&leaves)?;
    let r = projection(&y, rng.random());
    let grads = reduce(&y, &r)?.backward();
    let eval = |xs: &[Tensor<T>]| -> Result<f64> { Ok(reduce(&f(xs)?, &r)?.item().to_f64()) };
    let mut worst = Worst::new(cfg.floor);
    for (j, x) in leaves.iter().enumerate() {
        let analytic = grads.get_or_zeros(x);
        for i in coords(x.numel(), cfg.samples_per_input, rng) {
            let mut shifted: Vec<Tensor<T>> = leaves.iter().map(|t| t.detach()).collect();
            let mut plus = x.to_vec();
            plus[i] += T::from_f64(cfg.step);
            shifted[j] = Tensor::from_vec(plus, x.shape());
            let lp = eval(&shifted)?;
            let mut minus = x.to_vec();
            minus[i] -= T::from_f64(cfg.step);
            shifted[j] = Tensor::from_vec(minus, x.shape());
            let lm = eval(&shifted)?;
            worst.record(&format!("x{j}"), i, analytic[i].to_f64(), (lp - lm) / (2.0 * cfg.step));
        }
    }
    Ok(worst.finish(name, cfg.tolerance))
}

fn randn<T: Real>(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<T> {
    let n = shape.iter().product();
    Tensor::from_vec((0..n).map(|_| T::from_f64(rng.random_range(-1.0..1.0))).collect(), shape)
}

fn positive<T: Real>(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<T> {
    let n = shape.iter().product();
    Tensor::from_vec((0..n).map(|_| T::from_f64(rng.random_range(0.5..2.0))).collect(), shape)
}

fn labels(rng: &mut ChaCha8Rng, n: usize, classes: u8, ignore_every: usize) -> Vec<u8> {
    (0..n).map(|i| if i % ignore_every == ignore_every - 1 { crate::kitti::IGNORE } else { rng.random_range(0..classes) }).collect()
}

fn op_suite<T: Real>(cfg: &GradcheckConfig, rng: &mut ChaCha8Rng) -> Result<Vec<CheckResult>> {
    let mut out = Vec::new();
    macro_rules! check {
        ($name:expr, [$($x:expr),+ $(,)?], $f:expr) => {{
            let inputs: Vec<Tensor<T>> = vec![$($x),+];
            let mut sub = ChaCha8Rng::seed_from_u64(rng.random());
            out.push(check_fn($name, &inputs, $f, cfg, &mut sub)?);
        }};
    }
    let s = |v: f64| T::from_f64(v);

    check!("add (broadcast)", [randn(rng, &[2, 3, 4]), randn(rng, &[3, 1])], |x| x[0].add(&x[1]));
    check!("sub (broadcast)", [randn(rng, &[2, 3, 4]), randn(rng, &[1, 4])], |x| x[0].sub(&x[1]));
    check!("mul (broadcast)", [randn(rng, &[2, 3, 4]), randn(rng, &[2, 1, 4])], |x| x[0].mul(&x[1]));
    check!("div (broadcast)", [randn(rng, &[2, 3, 4]), positive(rng, &[3, 4])], |x| x[0].div(&x[1]));
    check!("add_scalar", [randn(rng, &[5, 3])], |x| Ok(x[0].add_scalar(s(0.7))));
    check!("mul_scalar", [randn(rng, &[5, 3])], |x| Ok(x[0].mul_scalar(s(-1.3))));
    check!("neg", [randn(rng, &[5, 3])], |x| Ok(x[0].neg()));
    check!("exp", [randn(rng, &[5, 3])], |x| Ok(x[0].exp()));
    check!("ln", [positive(rng, &[5, 3])], |x| Ok(x[0].ln()));
    check!("square", [randn(rng, &[5, 3])], |x| Ok(x[0].square()));
    match cfg.fault {
        Some(Fault::Gelu) => check!("gelu", [randn(rng, &[4, 6])], |x| Ok(x[0]
            .map_unary(gelu_value, |v, _| gelu_derivative(v) * T::from_f64(1.01)))),
        None => check!("gelu", [randn(rng, &[4, 6])], |x| Ok(x[0].gelu())),
    }
    check!("sum", [randn(rng, &[3, 4])], |x| Ok(x[0].sum()));
    check!("mean", [randn(rng, &[3, 4])], |x| Ok(x[0].mean()));
    check!("sum_axis", [randn(rng, &[2, 3, 4])], |x| x[0].sum_axis(1, false));
    check!("sum_axes_keepdim", [randn(rng, &[2, 3, 4])], |x| x[0].sum_axes_keepdim(&[0, 2]));
    check!("reshape", [randn(rng, &[2, 3, 4])], |x| x[0].reshape(&[6, 4]));
    check!("permute", [randn(rng, &[2, 3, 4])], |x| x[0].permute(&[2, 0, 1]));
    check!("transpose", [randn(rng, &[2, 3, 4])], |x| x[0].transpose(0, 2));
    check!("narrow", [randn(rng, &[2, 5, 4])], |x| x[0].narrow(1, 1, 3));
    check!("concat", [randn(rng, &[2, 3, 4]), randn(rng, &[2, 2, 4])], |x| Tensor::concat(x, 1));
    check!("pad", [randn(rng, &[1, 2, 3, 3])], |x| x[0].pad(&[(0, 0), (0, 0), (1, 2), (0, 1)]));
    check!("matmul (batched)", [randn(rng, &[2, 3, 4]), randn(rng, &[2, 4, 5])], |x| x[0].matmul(&x[1]));
    check!("matmul_t", [randn(rng, &[2, 3, 4]), randn(rng, &[2, 5, 4])], |x| x[0].matmul_t(&x[1]));
    check!("softmax", [randn(rng, &[3, 5])], |x| x[0].softmax(1));
    check!("softmax_scaled", [randn(rng, &[2, 4, 3])], |x| x[0].softmax_scaled(1, s(0.6)));
    check!("log_softmax", [randn(rng, &[2, 4, 3])], |x| x[0].log_softmax(1));
    check!("layer_norm", [randn(rng, &[3, 6]), randn(rng, &[6]), randn(rng, &[6])], |x| x[0]
        .layer_norm(&x[1], &x[2], 1e-6));
    check!("layer_norm_axis", [randn(rng, &[2, 4, 3, 2]), randn(rng, &[4]), randn(rng, &[4])], |x| x[0]
        .layer_norm_axis(1, &x[1], &x[2], 1e-6));
    check!("linear", [randn(rng, &[2, 3, 4]), randn(rng, &[4, 5]), randn(rng, &[5])], |x| x[0]
        .linear(&x[1], Some(&x[2])));
    check!("pool2d_mean", [randn(rng, &[1, 2, 4, 6])], |x| x[0].pool2d_mean(2));
    check!("upsample_bilinear", [randn(rng, &[1, 2, 3, 4])], |x| x[0].upsample_bilinear(6, 8));
    check!("drop_path", [randn(rng, &[4, 3])], |x| drop_path(&x[0], 0.5, true, &mut ChaCha8Rng::seed_from_u64(7)));
    check!("conv2d", [randn(rng, &[2, 3, 5, 6]), randn(rng, &[4, 3, 3, 3]), randn(rng, &[4])], |x| x[0]
        .conv2d(&x[1], Some(&x[2]), Conv2dOptions::padded(1)));
    check!("conv2d (stride 2)", [randn(rng, &[1, 2, 6, 6]), randn(rng, &[3, 2, 3, 3])], |x| x[0]
        .conv2d(&x[1], None, Conv2dOptions { stride: 2, padding: 1, ..Default::default() }));
    check!("conv2d (dilated)", [randn(rng, &[1, 2, 7, 7]), randn(rng, &[2, 2, 3, 3]), randn(rng, &[2])], |x| x[0]
        .conv2d(&x[1], Some(&x[2]), Conv2dOptions::dilated(2)));
    check!("conv2d (grouped)", [randn(rng, &[1, 4, 5, 5]), randn(rng, &[6, 2, 3, 3])], |x| x[0]
        .conv2d(&x[1], None, Conv2dOptions { padding: 1, groups: 2, ..Default::default() }));
    check!("conv2d (depthwise)", [randn(rng, &[2, 3, 5, 5]), randn(rng, &[3, 1, 3, 3]), randn(rng, &[3])], |x| x[0]
        .conv2d(&x[1], Some(&x[2]), Conv2dOptions::depthwise(3, 1)));
    {
        let mut mask = vec![0.0; 36];
        for (i, m) in mask.iter_mut().enumerate() {
            if (i / 6) / 3 != (i % 6) / 3 {
                *m = MASK_NEG;
            }
        }
        let mask = Tensor::<T>::from_f64_slice(&mask, &[6, 6]);
        let mut w = Vec::new();
        for _ in 0..4 {
            w.push(randn::<T>(rng, &[4, 4]).mul_scalar(s(0.5)));
            w.push(randn(rng, &[4]));
        }
        let mut inputs = vec![randn(rng, &[2, 6, 4])];
        inputs.extend(w);
        let mut sub = ChaCha8Rng::seed_from_u64(rng.random());
        out.push(check_fn(
            "masked_mha",
            &inputs,
            |x| {
                let weights = MhaWeights {
                    wq: x[1].clone(),
                    bq: x[2].clone(),
                    wk: x[3].clone(),
                    bk: x[4].clone(),
                    wv: x[5].clone(),
                    bv: x[6].clone(),
                    wo: x[7].clone(),
                    bo: x[8].clone(),
                };
                x[0].masked_mha(&weights, 2, Some(&mask))
            },
            cfg,
            &mut sub,
        )?);
    }

    let (b, k, h, w) = (2, 4, 3, 5);
    let target = labels(rng, b * h * w, k as u8, 7);
    let weights = ClassWeights::new(vec![0.5, 1.0, 1.5, 1.0]).expect("positive weights");
    let map_err = |e: crate::loss::LossError| crate::tensor::TensorError::InvalidArgument { op: "loss", detail: e.to_string() };
    check!("wce_loss", [randn(rng, &[b, k, h, w])], |x| wce_loss(&x[0], &target, &weights).map_err(map_err));
    check!("dice_loss", [randn(rng, &[b, k, h, w])], |x| dice_loss(&x[0], &target).map_err(map_err));
    check!("iou_loss", [randn(rng, &[b, k, h, w])], |x| iou_loss(&x[0], &target).map_err(map_err));
    check!("boundary_loss", [randn(rng, &[b, k, h, w])], |x| boundary_loss(&x[0], &target).map_err(map_err));
    let big = labels(rng, 4 * 8, k as u8, 9);
    check!("total_loss", [randn(rng, &[1, k, 4, 8]), randn(rng, &[1, k, 2, 4]), randn(rng, &[1, k, 1, 2])], |x| {
        total_loss(&x[0], &x[1..], &big, &weights, &LossConfig::default()).map(|o| o.total).map_err(map_err)
    });
    Ok(out)
}

/// Moves the freshly initialized model to a generic point: zero biases and
/// small weights leave pre-normalization activations nearly constant across
/// channels, where LayerNorm's curvature swamps any finite-difference step.
/// Biases are redrawn from `U(-1, 1)` and one-dimensional gains from `U(0.5, 1.5)`.
fn condition_parameters<T: Real>(store: &mut ParamStore<T>, rng: &mut ChaCha8Rng) -> Result<()> {
    let ids: Vec<_> = store.iter().filter(|(_, p)| p.value.ndim() == 1).map(|(id, p)| (id, p.name.ends_with("bias"), p.value.numel())).collect();
    for (id, is_bias, n) in ids {
        let range = if is_bias { -1.0..1.0 } else { 0.5..1.5 };
        store.set_data(id, (0..n).map(|_| T::from_f64(rng.random_range(range.clone()))).collect())?;
    }
    Ok(())
}

/// End-to-end check of a toy model in training mode: the loss is differentiated
/// with respect to sampled coordinates of every parameter tensor and of the input.
pub fn check_model<T: Real>(cfg: &GradcheckConfig, rng: &mut ChaCha8Rng) -> Result<CheckResult> {
    let (h, w) = cfg.model_hw;
    let model_cfg = ModelConfig {
        input_hw: (h, w),
        stage_blocks: [1, 1, 2, 1],
        window_sizes: [(4, 8), (4, 8), (2, 4), (2, 4)],
        decoder_channels: 16,
        num_classes: 5,
        stem_channels: 8,
        stage_channels: [8, 16, 32, 64],
        ..ModelConfig::toy()
    };
    let (model, store32) =
        RangeSam::new(model_cfg.clone(), cfg.seed).map_err(|e| crate::tensor::TensorError::InvalidArgument { op: "model", detail: e.to_string() })?;
    let mut store: ParamStore<T> = store32.cast();
    condition_parameters(&mut store, rng)?;
    let x = randn::<T>(rng, &[1, 6, h, w]);
    let target = labels(rng, h * w, model_cfg.num_classes as u8, 11);
    let weights = ClassWeights::uniform(model_cfg.num_classes);
    let ctx_seed: u64 = rng.random();
    let loss_of = |store: &ParamStore<T>, x: &Tensor<T>| -> Result<Tensor<T>> {
        let mut ctx = ForwardCtx::train(ctx_seed);
        let err = |e: String| crate::tensor::TensorError::InvalidArgument { op: "model", detail: e };
        let out = model.forward(store, x, &mut ctx).map_err(|e| err(e.to_string()))?;
        total_loss(&out.main, &out.aux, &target, &weights, &LossConfig::default())
            .map(|o| o.total)
            .map_err(|e| err(e.to_string()))
    };
    let xl = Tensor::leaf(x.to_vec(), x.shape());
    let grads = loss_of(&store, &xl)?.backward();
    let mut worst = Worst::new(cfg.floor);
    let ids: Vec<_> = store.iter().map(|(id, p)| (id, p.name.clone())).collect();
    for (id, name) in ids {
        let p = store.get(id);
        let analytic = grads.get_or_zeros(p);
        for i in coords(p.numel(), cfg.samples_per_param, rng) {
            let eval = |delta: f64| -> Result<f64> {
                let mut s = store.clone();
                let mut d = p.to_vec();
                d[i] += T::from_f64(delta);
                s.set_data(id, d)?;
                Ok(loss_of(&s, &x)?.item().to_f64())
            };
            let n = (eval(cfg.step)? - eval(-cfg.step)?) / (2.0 * cfg.step);
            worst.record(&name, i, analytic[i].to_f64(), n);
        }
    }
    let gx = grads.get_or_zeros(&xl);
    for i in coords(x.numel(), cfg.samples_per_input, rng) {
        let eval = |delta: f64| -> Result<f64> {
            let mut d = x.to_vec();
            d[i] += T::from_f64(delta);
            Ok(loss_of(&store, &Tensor::from_vec(d, x.shape()))?.item().to_f64())
        };
        let n = (eval(cfg.step)? - eval(-cfg.step)?) / (2.0 * cfg.step);
        worst.record("input", i, gx[i].to_f64(), n);
    }
    Ok(worst.finish("toy model end-to-end", cfg.tolerance))
}

fn run_typed<T: Real>(cfg: &GradcheckConfig) -> Result<Vec<CheckResult>> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut results = op_suite::<T>(cfg, &mut rng)?;
    if cfg.include_model {
        results.push(check_model::<T>(cfg, &mut rng)?);
    }
    Ok(results)
}

/// Runs the op suite, the losses and (optionally) the end-to-end model check.
pub fn run(cfg: &GradcheckConfig) -> Result<GradcheckReport> {
    let start = Instant::now();
    let results = match cfg.precision {
        Precision::F64 => run_typed::<f64>(cfg)?,
        Precision::F32 => run_typed::<f32>(cfg)?,
    };
    Ok(GradcheckReport {
        precision: cfg.precision,
        step: cfg.step,
        tolerance: cfg.tolerance,
        results,
        seconds: start.elapsed().as_secs_f64(),
    })
}
