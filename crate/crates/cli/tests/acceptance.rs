//! End-to-end acceptance suite. Every criterion runs in sequence, prints one
//! PASS/FAIL line, and the target exits non-zero if any criterion failed.
//! Runs without the libtest harness so the lines are never captured.

#[path = "../../core/tests/oracles/mod.rs"]
mod oracles;

use std::any::Any;
use std::fs;
use std::panic::{self, AssertUnwindSafe};
use std::path::Path;
use std::process::{Command, ExitCode};
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rangesam::config::RunConfig;
use rangesam::gradcheck::{self, GradcheckConfig, Precision};
use rangesam::kitti::{LabelRemap, PointCloud, IGNORE};
use rangesam::loss::*;
use rangesam::metrics::ConfusionMatrix;
use rangesam::model::*;
use rangesam::projection::*;
use rangesam::synthetic::synthetic_scene;
use rangesam::tensor::{no_grad, ParamStore, Tensor};

const BIN: &str = env!("CARGO_BIN_EXE_rangesam");

fn rangesam(args: &[&str]) -> String {
    let out = Command::new(BIN).args(args).output().expect("spawn rangesam");
    let stdout = String::from_utf8_lossy(&out.stdout).into_owned();
    assert!(out.status.success(), "rangesam {args:?} failed:\n{stdout}\n{}", String::from_utf8_lossy(&out.stderr));
    stdout
}

fn within(elapsed: Duration, limit_s: u64, what: &str) {
    assert!(elapsed <= Duration::from_secs(limit_s), "{what} took {:.1} s (limit {limit_s} s)", elapsed.as_secs_f64());
}

fn projection_matches_oracle() -> String {
    let mut rng = ChaCha8Rng::seed_from_u64(1001);
    let start = Instant::now();
    let mut points = 0;
    for trial in 0..1000 {
        let cfg = ProjectionConfig {
            convention: if trial % 2 == 0 { ElevationConvention::SensorFov } else { ElevationConvention::Published },
            ..Default::default()
        };
        let pc = oracles::random_cloud(&mut rng, 10_000, true);
        points += pc.len();
        let img = rasterize(&pc, &cfg);
        let want = oracles::rasterize(&pc, &cfg);
        let winners: Vec<Option<usize>> = img.pixel_point.iter().map(|&p| (p != EMPTY).then_some(p as usize)).collect();
        assert!(winners == want.winner, "cloud {trial}: winner index differs");
        assert!(img.channels == want.channels, "cloud {trial}: channels differ");
        assert!(img.labels == want.labels, "cloud {trial}: labels differ");
        assert!(img.point_pixel == want.point_pixel, "cloud {trial}: point pixels differ");
    }
    within(start.elapsed(), 60, "1000 clouds");
    format!("1000 clouds, {points} points, {:.1} s", start.elapsed().as_secs_f64())
}

fn round_trip_is_lossless() -> String {
    let mut rng = ChaCha8Rng::seed_from_u64(1002);
    let mut configs = vec![ProjectionConfig::default(), ProjectionConfig::with_size(16, 256)];
    for _ in 0..8 {
        configs.push(ProjectionConfig {
            height: rng.random_range(4..64),
            width: rng.random_range(16..1024),
            convention: if rng.random() { ElevationConvention::Published } else { ElevationConvention::SensorFov },
            ..Default::default()
        });
    }
    let mut cm = ConfusionMatrix::new(19);
    for cfg in &configs {
        let pc = oracles::single_occupancy_cloud(&mut rng, cfg, 0.6);
        let img = rasterize(&pc, cfg);
        assert_eq!(img.valid_count(), pc.len(), "cloud is not single-occupancy");
        let out = backproject_labels(img.labels.as_ref().unwrap(), &img, &pc, 1, 7).unwrap();
        cm.add_all(pc.labels.as_ref().unwrap(), &out);
    }
    let miou = cm.miou().mean;
    assert!(miou == 1.0, "point mIoU {miou}");
    format!("{} configs, {} points, point mIoU {miou}", configs.len(), cm.total())
}

fn forward_axis_pixel() -> String {
    let got = project_point([1.0, 0.0, 0.0], &ProjectionConfig::default()).unwrap();
    assert_eq!(got, (1024, 57));
    format!("(u, v) = {got:?}")
}

/// Redraws every parameter so attention scores are far from uniform.
fn scramble(store: &mut ParamStore<f32>, rng: &mut ChaCha8Rng) {
    let ids: Vec<_> = store.iter().map(|(id, p)| (id, p.value.numel())).collect();
    for (id, n) in ids {
        store.set_data(id, (0..n).map(|_| rng.random_range(-0.5..0.5)).collect()).unwrap();
    }
}

fn windowed_equals_masked() -> String {
    let mut rng = ChaCha8Rng::seed_from_u64(1004);
    let mut worst = 0.0f32;
    for _ in 0..20 {
        let heads = [1, 2, 4][rng.random_range(0..3)];
        let c = heads * rng.random_range(2..6);
        let cfg = ModelConfig {
            stem_channels: c,
            stage_channels: [c, 2 * c, 4 * c, 8 * c],
            heads: [heads, 2, 4, 8],
            ..ModelConfig::toy()
        };
        let (model, mut store) = RangeSam::new(cfg, rng.random()).unwrap();
        scramble(&mut store, &mut rng);
        let (h, w) = (rng.random_range(1..17), rng.random_range(1..33));
        let (rows, cols) = (rng.random_range(1..9), rng.random_range(1..17));
        let b = rng.random_range(1..3);
        let z = Tensor::from_vec((0..b * h * w * c).map(|_| rng.random_range(-1.0..1.0)).collect(), &[b, h, w, c]);
        let block = &model.encoder.blocks[0];
        let windowed = block.attention(&store, &z, &AttentionMode::Windowed { rows, cols }).unwrap();
        let masked = block.attention(&store, &z, &AttentionMode::Masked(block_diagonal_mask(h, w, rows, cols))).unwrap();
        let diff = windowed.data().iter().zip(masked.data()).map(|(a, b)| (a - b).abs()).fold(0.0, f32::max);
        assert!(diff <= 1e-5, "diff {diff} for {h}x{w} with {rows}x{cols} windows");
        worst = worst.max(diff);
    }
    format!("20 configs, max abs diff {worst:.2e}")
}

fn gradients_are_exact() -> String {
    let report = gradcheck::run(&GradcheckConfig::new(Precision::F64)).unwrap();
    let model = report.results.iter().find(|r| r.name.contains("model")).expect("model check ran");
    let failures: Vec<&str> = report.failures().map(|r| r.name.as_str()).collect();
    assert!(failures.is_empty(), "failed: {failures:?}\n{report}");
    within(Duration::from_secs_f64(report.seconds), 300, "gradient suite");
    let worst = report.results.iter().map(|r| r.max_rel_err).fold(0.0, f64::max);
    format!(
        "{} checks, worst rel err {worst:.2e}, model {:.2e}, {:.1} s",
        report.results.len(),
        model.max_rel_err,
        report.seconds
    )
}

fn default_shapes() -> String {
    let cfg = ModelConfig::default();
    let (model, store) = RangeSam::new(cfg.clone(), 0).unwrap();
    let x = Tensor::<f32>::zeros(&[1, 6, 64, 2048]);
    let start = Instant::now();
    let (feats, out) = no_grad(|| {
        let feats = model.encode(&store, &x, &mut ForwardCtx::eval())?;
        let out = model.decoder.forward(&store, &feats, (64, 2048))?;
        Ok::<_, ModelError>((feats, out))
    })
    .unwrap();
    let want = [[96, 64, 2048], [192, 32, 1024], [384, 16, 512], [768, 8, 256]];
    for (s, (f, w)) in feats.maps.iter().zip(want).enumerate() {
        assert_eq!(f.shape()[1..], w, "F{}", s + 1);
    }
    assert_eq!(out.main.shape()[1..], [19, 64, 2048]);
    assert_eq!(out.aux.len(), 4);
    for (s, a) in out.aux.iter().enumerate() {
        assert_eq!(a.shape()[1..], [19, 64 >> s, 2048 >> s], "aux {}", s + 1);
    }
    format!("F1..F4 and 19x64x2048 + 4 aux maps, forward {:.0} s", start.elapsed().as_secs_f64())
}

fn synthetic_training_converges() -> String {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().to_str().unwrap();
    let start = Instant::now();
    rangesam(&["train", "--toy", "--synthetic", "--eval-train", "--out", out, "--log-every", "50"]);
    let elapsed = start.elapsed();
    let metrics: serde_json::Value = serde_json::from_str(&fs::read_to_string(dir.path().join("train_metrics.json")).unwrap()).unwrap();
    let miou = metrics["pixels"]["miou"].as_f64().unwrap();
    let steps = metrics["steps"].as_u64().unwrap();
    assert!(steps <= 300, "{steps} steps");
    assert!(miou >= 0.90, "pixel mIoU {miou:.4} after {steps} steps");
    within(elapsed, 600, "synthetic training");
    format!("pixel mIoU {miou:.4} after {steps} steps, {:.0} s", elapsed.as_secs_f64())
}

fn one_hot_logits(target: &[u8], b: usize, k: usize, hw: usize, margin: f64) -> Tensor<f64> {
    let mut data = vec![0.0; b * k * hw];
    for (i, &t) in target.iter().enumerate() {
        if t != IGNORE {
            data[((i / hw) * k + t as usize) * hw + i % hw] = margin;
        }
    }
    Tensor::from_vec(data, &[b, k, hw / 16, 16])
}

fn loss_values() -> String {
    let mut rng = ChaCha8Rng::seed_from_u64(1008);
    let (b, k, h, w) = (2, 19, 8, 16);
    let target: Vec<u8> = (0..b * h * w)
        .map(|i| if i % 17 == 0 { IGNORE } else { [0u8, 8, 10, 12, 14][(i / 5 + i / 40) % 5] })
        .collect();
    let weights = ClassWeights::uniform(k);

    let uniform = Tensor::<f64>::full(&[b, k, h, w], 0.37);
    let wce = wce_loss(&uniform, &target, &weights).unwrap().item();
    assert!((wce - 19f64.ln()).abs() <= 1e-4, "uniform WCE {wce}");

    let perfect = one_hot_logits(&target, b, k, h * w, 30.0);
    let dice = dice_loss(&perfect, &target).unwrap().item();
    let iou = iou_loss(&perfect, &target).unwrap().item();
    let bnd = boundary_loss(&perfect, &target).unwrap().item();
    assert!(dice <= 1e-3 && iou <= 1e-3 && bnd <= 1e-3, "perfect prediction: dice {dice} iou {iou} boundary {bnd}");

    let main = Tensor::from_vec((0..b * k * h * w).map(|_| rng.random_range(-3.0..3.0)).collect(), &[b, k, h, w]);
    let aux: Vec<Tensor<f64>> = (0..4)
        .map(|s| {
            let (ah, aw) = (h >> s, w >> s);
            Tensor::from_vec((0..b * k * ah * aw).map(|_| rng.random_range(-3.0..3.0)).collect(), &[b, k, ah, aw])
        })
        .collect();
    let cfg = LossConfig { lambda: [1.0, 0.7, 1.3, 0.4], aux_weight: 0.3 };
    let got = total_loss(&main, &aux, &target, &weights, &cfg).unwrap().total.item();
    let composite = |l: &Tensor<f64>, t: &[u8]| {
        let (lh, lw) = (l.dim(2), l.dim(3));
        let p = oracles::probabilities(l.data(), b, k, lh * lw);
        let (d, j) = oracles::soft_overlap(&p, t, k, SOFT_EPS);
        cfg.lambda[0] * oracles::wce(&p, t, weights.as_slice())
            + cfg.lambda[1] * d
            + cfg.lambda[2] * oracles::boundary(&p, t, b, lh, lw)
            + cfg.lambda[3] * j
    };
    let mut want = composite(&main, &target);
    for a in &aux {
        let (ah, aw) = (a.dim(2), a.dim(3));
        let t: Vec<u8> = (0..b * ah * aw)
            .map(|i| {
                let (bi, y, x) = (i / (ah * aw), i / aw % ah, i % aw);
                target[bi * h * w + (y * h / ah) * w + x * w / aw]
            })
            .collect();
        want += cfg.aux_weight * composite(a, &t);
    }
    assert!((got - want).abs() <= 1e-6, "total {got} vs summed {want}");
    format!("WCE-ln19 {:.1e}, dice {dice:.1e}, iou {iou:.1e}, boundary {bnd:.1e}, total diff {:.1e}", wce - 19f64.ln(), got - want)
}

fn knn_matches_oracle() -> String {
    let mut rng = ChaCha8Rng::seed_from_u64(1009);
    let mut neighborhoods = 0;
    while neighborhoods < 100_000 {
        let (h, w) = (rng.random_range(1..12), rng.random_range(2..16));
        let mut img = RangeImage::empty(h, w, false);
        let n = h * w;
        let fill = rng.random_range(0.0..1.0);
        for pix in 0..n {
            if rng.random_bool(fill) {
                // Quantized ranges force exact distance ties.
                img.channels[CH_RANGE * n + pix] = rng.random_range(1..8) as f32 * 0.5;
                img.channels[CH_VALID * n + pix] = 1.0;
            }
        }
        let labels: Vec<u8> = (0..n).map(|_| rng.random_range(0..5)).collect();
        let mut pc = PointCloud::default();
        for _ in 0..50 {
            let r = rng.random_range(1..8) as f32 * 0.5 + if rng.random() { 0.25 } else { 0.0 };
            pc.xyz.push([0.0, 0.0, r]);
            pc.remission.push(0.0);
            img.point_pixel.push((rng.random_range(0..h) as u32, rng.random_range(0..w) as u32));
        }
        let k = rng.random_range(1..15);
        let window = [1, 3, 5, 7, 9][rng.random_range(0..5)];
        let got = backproject_labels(&labels, &img, &pc, k, window).unwrap();
        let range = img.channel(CH_RANGE).to_vec();
        let valid: Vec<bool> = img.channel(CH_VALID).iter().map(|&v| v != 0.0).collect();
        for (i, &(v, u)) in img.point_pixel.iter().enumerate() {
            let want = oracles::backproject_point(&labels, &range, &valid, (h, w), (v as usize, u as usize), pc.range(i) as f32, k, window);
            assert_eq!(got[i], want, "neighborhood {neighborhoods}: k {k} window {window}");
            neighborhoods += 1;
        }
    }
    format!("{neighborhoods} neighborhoods")
}

/// Writes synthetic scenes in the on-disk dataset layout with raw label ids.
fn write_dataset(root: &Path, scans: usize, cfg: &RunConfig) {
    let remap = LabelRemap::semantic_kitti();
    let raw_of = |train: u8| (0..=259u32).find(|&r| remap.to_train(r) == train).expect("class has a raw id");
    for seq in ["00", "01"] {
        let dir = root.join("sequences").join(seq);
        fs::create_dir_all(dir.join("velodyne")).unwrap();
        fs::create_dir_all(dir.join("labels")).unwrap();
        for i in 0..scans {
            let pc = synthetic_scene(100 * seq.parse::<u64>().unwrap() + i as u64, &cfg.projection);
            fs::write(dir.join(format!("velodyne/{i:06}.bin")), pc.to_bin_bytes()).unwrap();
            let raw: Vec<u8> = pc.labels.unwrap().iter().flat_map(|&l| raw_of(l).to_le_bytes()).collect();
            fs::write(dir.join(format!("labels/{i:06}.label")), raw).unwrap();
        }
    }
}

fn seeded_training_is_deterministic() -> String {
    let data = tempfile::tempdir().unwrap();
    write_dataset(data.path(), 2, &RunConfig::toy());
    let root = format!("data.root={}", data.path().display());
    let runs = [tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap()];
    for d in &runs {
        rangesam(&["train", "--toy", "--set", &root, "--set", "schedule.max_steps=4", "--set", "seed=7", "--out", d.path().to_str().unwrap()]);
    }
    let read = |d: &tempfile::TempDir, f: &str| fs::read(d.path().join(f)).unwrap();
    let (a, b) = (read(&runs[0], "checkpoint.ckpt"), read(&runs[1], "checkpoint.ckpt"));
    assert!(a == b, "checkpoints differ");
    assert!(read(&runs[0], "train_log.jsonl") == read(&runs[1], "train_log.jsonl"), "step logs differ");
    format!("4 augmented steps on 4 on-disk scans, {} checkpoint bytes identical", a.len())
}

fn parameter_report_flags_inconsistency() -> String {
    let stdout = rangesam(&["stats"]);
    assert!(stdout.contains("INCONSISTENT"), "no inconsistency flag:\n{stdout}");
    let total = stdout.lines().find(|l| l.starts_with("total")).expect("total line").trim().to_string();
    let (_, store) = RangeSam::new(ModelConfig::default(), 0).unwrap();
    assert!(total.contains(&store.numel().to_string()), "{total}");
    format!("{}; 30M/63M flagged", total.split_whitespace().collect::<Vec<_>>().join(" "))
}

fn panic_message(e: Box<dyn Any + Send>) -> String {
    e.downcast_ref::<String>()
        .cloned()
        .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
        .unwrap_or_else(|| "panicked".into())
}

fn main() -> ExitCode {
    let criteria: [(&str, fn() -> String); 11] = [
        ("projection matches naive oracle", projection_matches_oracle),
        ("rasterize/backproject round trip", round_trip_is_lossless),
        ("forward axis projects to (1024, 57)", forward_axis_pixel),
        ("windowed vs masked global attention", windowed_equals_masked),
        ("gradient check suite (f64)", gradients_are_exact),
        ("default-config shapes", default_shapes),
        ("synthetic training reaches 0.90 mIoU", synthetic_training_converges),
        ("loss values", loss_values),
        ("k-NN matches exhaustive oracle", knn_matches_oracle),
        ("seeded training is deterministic", seeded_training_is_deterministic),
        ("parameter report flags 30M/63M", parameter_report_flags_inconsistency),
    ];
    let mut lines = Vec::new();
    for (i, (name, check)) in criteria.into_iter().enumerate() {
        let start = Instant::now();
        let outcome = panic::catch_unwind(AssertUnwindSafe(check));
        let secs = start.elapsed().as_secs_f64();
        let line = match outcome {
            Ok(detail) => format!("PASS  {:>2}. {name} ({detail}) [{secs:.1} s]", i + 1),
            Err(e) => format!("FAIL  {:>2}. {name}: {} [{secs:.1} s]", i + 1, panic_message(e)),
        };
        println!("{line}");
        lines.push(line);
    }
    println!("\nacceptance summary:");
    for l in &lines {
        println!("{l}");
    }
    let failed = lines.iter().filter(|l| l.starts_with("FAIL")).count();
    println!("\n{} passed, {failed} failed", lines.len() - failed);
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
