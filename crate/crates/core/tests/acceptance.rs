//! End-to-end acceptance checks. Prints one PASS/FAIL line per criterion and
//! exits non-zero if any fails.

use std::path::Path;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use voxseg::cli::{checkpoint_file, cmd_grid, curve_file, GridArgs, NetArgs, OptimArgs, REPORT_FILE};
use voxseg::dice::{
    class_weights, multiclass_dice_loss, percent, soft_dice_grad, soft_dice_loss, ClassCounts, ClassWeights,
    DiceReport, ReportTable, WeightScheme, EPSILON,
};
use voxseg::inference::{axis_positions, default_stride, evaluate_cases, plan_tiles, predict_volume};
use voxseg::ops::{gradient_check, softmax_channels};
use voxseg::phantom::{generate_dataset, write_dataset, Dataset, PhantomSpec};
use voxseg::trainer::{adam_step, batch_loss, loss_and_gradient, AdamState, TrainConfig, Trainer};
use voxseg::unet3d::{forward, init_params, UNetConfig};
use voxseg::voxelgrid::{volume_to_tensor, Dims5, ScalarVolume, Shape3, Tensor5};

/// Training length of the convergence runs.
const ITERATIONS: usize = 400;
/// Training length of each grid cell.
const GRID_ITERATIONS: usize = 40;
const SEED: u64 = 0;

struct Outcome {
    passed: bool,
    detail: String,
}

fn outcome(passed: bool, detail: impl Into<String>) -> Outcome {
    Outcome { passed, detail: detail.into() }
}

fn cube(n: usize) -> Shape3 {
    Shape3::cube(n).unwrap()
}

fn soft_dice_gradients() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut worst: f64 = 0.0;
    for patch in 0..20 {
        let classes = 1 + patch % 3;
        let n = 64;
        // one-hot reference over `classes` channels; a single channel is a random binary mask
        let labels: Vec<usize> = (0..n).map(|_| rng.random_range(0..classes.max(2))).collect();
        for c in 0..classes {
            let r: Vec<f64> = labels.iter().map(|&l| (l == c) as u8 as f64).collect();
            let s: Vec<f64> = (0..n).map(|_| rng.random_range(0.01..0.99)).collect();
            let analytic = soft_dice_grad(&s, &r).unwrap();
            let report = gradient_check(|x| soft_dice_loss(x, &r).unwrap(), &s, &analytic, 1e-3, 1e-4).unwrap();
            worst = worst.max(report.max_rel_error);
        }
    }
    let elapsed = start.elapsed();
    outcome(
        worst <= 1e-4 && elapsed < Duration::from_secs(5),
        format!("max rel error {worst:.2e}, {:.2} s", elapsed.as_secs_f64()),
    )
}

fn network_gradients() -> Outcome {
    let start = Instant::now();
    let cfg = UNetConfig { in_channels: 1, num_classes: 2, levels: 1, base_channels: 2, patch: cube(4) };
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut params = init_params::<f64>(cfg, 7).unwrap();
    for k in params.layers_mut() {
        k.bias.iter_mut().for_each(|b| *b = rng.random_range(-0.1..0.1));
    }
    let dims = Dims5::new(2, 1, 4, 4, 4);
    let input = Tensor5::from_fn(dims, |_, _, _, _, _| rng.random_range(-1.0..1.0));
    let fg_voxel = |x: usize, y: usize, z: usize| (x + y + z).is_multiple_of(3);
    let target = Tensor5::from_fn(dims.with_channels(2), |_, c, x, y, z| (fg_voxel(x, y, z) == (c == 1)) as u8 as f64);
    let fg = target.channel(0, 1).iter().chain(target.channel(1, 1)).filter(|&&v| v == 1.0).count() as u64;
    // simple weights from the label counts of this batch
    let counts = ClassCounts::new(vec![128 - fg, fg]).unwrap();
    let weights = class_weights(&counts, WeightScheme::Simple, EPSILON);
    let out = loss_and_gradient(&params, &input, &target, &weights).unwrap();
    let mut probe = params.clone();
    let report = gradient_check(
        |x| {
            probe.set_flat(x);
            batch_loss(&probe, &input, &target, &weights).unwrap()
        },
        &params.to_flat(),
        &out.grads.to_flat(),
        1e-6,
        1e-3,
    )
    .unwrap();
    let elapsed = start.elapsed();
    outcome(
        report.passed() && elapsed < Duration::from_secs(60),
        format!(
            "{} parameters, max rel error {:.2e}, {:.2} s",
            params.param_count(),
            report.max_rel_error,
            elapsed.as_secs_f64()
        ),
    )
}

fn loss_exactness() -> Outcome {
    let dims = Dims5::new(2, 3, 3, 2, 2);
    let onehot = Tensor5::from_fn(dims, |b, c, x, y, z| ((b + x + y + z) % 3 == c) as u8 as f64);
    let uniform = ClassWeights::from_values(WeightScheme::Uniform, vec![1.0; 3], EPSILON).unwrap();
    let perfect = multiclass_dice_loss(&onehot, &onehot, &uniform).unwrap().loss;
    let s = [0.5f64; 8];
    let r = [1.0, 1.0, 1.0, 1.0, 0.0, 0.0, 0.0, 0.0];
    let half = soft_dice_loss(&s, &r).unwrap();
    outcome((perfect + 1.0).abs() <= 1e-9 && (half + 0.5).abs() <= 1e-9, format!("perfect {perfect}, half {half}"))
}

fn weight_formulas() -> Outcome {
    let counts = ClassCounts::new(vec![850, 50, 50, 50]).unwrap();
    let u = class_weights(&counts, WeightScheme::Uniform, EPSILON);
    let s = class_weights(&counts, WeightScheme::Simple, EPSILON);
    let q = class_weights(&counts, WeightScheme::Square, EPSILON);
    let examples = u.values().iter().all(|&w| (w - 1.0).abs() <= 1e-9)
        && (1..4).all(|l| (s.values()[l] - 1000.0 / 201.0).abs() <= 1e-9)
        && (1..4).all(|l| (q.values()[l] - 1000.0 / 10001.0).abs() <= 1e-9);
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut violations = 0;
    for _ in 0..1000 {
        let l = rng.random_range(2..10);
        let per: Vec<u64> = (0..l).map(|_| rng.random_range(1..100_000)).collect();
        let counts = ClassCounts::new(per.clone()).unwrap();
        let ws = class_weights(&counts, WeightScheme::Simple, EPSILON);
        let wq = class_weights(&counts, WeightScheme::Square, EPSILON);
        for a in 0..l {
            for b in 0..l {
                if per[a] > per[b] && !(ws.values()[a] < ws.values()[b] && wq.values()[a] < wq.values()[b]) {
                    violations += 1;
                }
                if per[a] >= per[b] && wq.values()[a] / wq.values()[b] > ws.values()[a] / ws.values()[b] * (1.0 + 1e-12)
                {
                    violations += 1;
                }
            }
        }
    }
    outcome(
        examples && violations == 0,
        format!("examples {}, {violations} property violations", if examples { "match" } else { "differ" }),
    )
}

fn table_aggregation() -> Outcome {
    let names = ["background", "artery", "vein", "liver", "spleen", "stomach", "gallbladder", "pancreas"];
    let values = [99.9, 80.4, 78.6, 96.5, 94.7, 96.3, 77.3, 82.7].map(|v| v / 100.0);
    let r = DiceReport::from_values(names.map(String::from).to_vec(), values.to_vec()).unwrap();
    let (avg, max, min) = (percent(r.avg()), percent(r.max()), percent(r.min()));
    outcome(avg == "88.3" && max == "99.9" && min == "77.3", format!("AVG {avg}, MAX {max}, MIN {min}"))
}

fn stitching() -> Outcome {
    let cfg = UNetConfig::new(8, cube(16));
    let params = init_params::<f64>(cfg, 21).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let vol = ScalarVolume::new(cube(16), (0..4096).map(|_| rng.random_range(-2.0..2.0)).collect()).unwrap();
    let single = predict_volume(&params, &vol, &plan_tiles(cube(16), cube(16), cube(8)).unwrap()).unwrap();
    let (logits, _) = forward(&params, &volume_to_tensor(&vol)).unwrap();
    let (direct, _) = softmax_channels(&logits).unwrap();
    let mut identity_err: f64 = 0.0;
    for c in 0..8 {
        for i in 0..4096 {
            let (x, y, z) = vol.shape().coords(i);
            identity_err = identity_err.max((single.get(c, x, y, z) - direct.get(0, c, x, y, z)).abs());
        }
    }

    let params = init_params::<f32>(UNetConfig::new(8, cube(32)), 22).unwrap();
    let big = ScalarVolume::new(cube(48), (0..48 * 48 * 48).map(|_| rng.random_range(-2.0..2.0)).collect()).unwrap();
    let plan = plan_tiles(cube(48), cube(32), cube(16)).unwrap();
    let map = predict_volume(&params, &big, &plan).unwrap();
    let n = cube(48).voxel_count();
    let mut sum_err: f64 = 0.0;
    for i in 0..n {
        let s: f64 = (0..8).map(|c| map.class(c)[i]).sum();
        sum_err = sum_err.max((s - 1.0).abs());
    }
    let positions = axis_positions(48, 32, 16) == vec![0, 16] && axis_positions(40, 32, 16) == vec![0, 8];
    outcome(
        identity_err <= 1e-12 && sum_err <= 1e-5 && positions && plan.corners.len() == 8,
        format!(
            "single-tile max diff {identity_err:.1e}, 48^3 max |sum - 1| {sum_err:.1e}, {} tiles",
            plan.corners.len()
        ),
    )
}

fn adam_oracle() -> Outcome {
    let mut theta = [0.0f64];
    let mut state = AdamState::new(1);
    adam_step(&mut theta, &[1.0], &mut state, 0.1).unwrap();
    let init = [0.3f32, -1.7, 0.0, 5e-3];
    let mut p = init;
    let mut s = AdamState::new(4);
    for _ in 0..3 {
        adam_step(&mut p, &[0.2, -4.0, 1.0, 1e-6], &mut s, 0.0).unwrap();
    }
    outcome(
        (theta[0] + 0.1).abs() <= 1e-7 && p == init,
        format!("theta {:.10}, zero-rate identity {}", theta[0], p == init),
    )
}

/// Checkpoint bytes, full-volume report and its CSV for one convergence run.
struct Convergence {
    checkpoint: Vec<u8>,
    report: DiceReport,
    csv: String,
    seconds: f64,
}

fn phantom(sigma: f32) -> Dataset {
    let spec = PhantomSpec { noise_sigma: sigma, seed: SEED, ..PhantomSpec::default() };
    generate_dataset(&spec, 20, 0.8).unwrap()
}

fn converge(dataset: &Dataset) -> Convergence {
    let start = Instant::now();
    let train = dataset.train_pairs();
    let test = dataset.test_pairs();
    let unet = UNetConfig::new(dataset.num_classes, cube(32));
    let cfg = TrainConfig {
        learning_rate: 0.001,
        iterations: ITERATIONS,
        batch_size: 3,
        scheme: WeightScheme::Uniform,
        seed: SEED,
        validation_interval: 100,
        distinct_patients: true,
    };
    let mut trainer = Trainer::new(&train, &test, unet, cfg).unwrap();
    trainer.run(|_, _| {}).unwrap();
    let params = trainer.into_params();
    let report = evaluate_cases(&params, &test, &dataset.class_names, default_stride(unet.patch)).unwrap();
    let mut table = ReportTable::default();
    table.push("uniform_lr0.001", Some(report.clone()));
    Convergence {
        checkpoint: params.to_checkpoint_bytes(),
        csv: table.to_csv_string(),
        report,
        seconds: start.elapsed().as_secs_f64(),
    }
}

fn convergence(noisy: &Convergence, clean: &Convergence) -> Outcome {
    let a = noisy.report.mean_foreground();
    let b = clean.report.mean_foreground();
    outcome(
        a >= 0.70 && b >= 0.90,
        format!(
            "{ITERATIONS} iterations: sigma>0 mean foreground DSC {a:.3} ({:.0} s), sigma=0 {b:.3} ({:.0} s)",
            noisy.seconds, clean.seconds
        ),
    )
}

fn grid_args(data: &Path, out: &Path) -> GridArgs {
    GridArgs {
        data: data.to_path_buf(),
        out_dir: out.to_path_buf(),
        schemes: WeightScheme::ALL.to_vec(),
        learning_rates: vec![0.001, 0.01],
        parallel: 1,
        net: NetArgs { patch: 32, levels: 2, base_channels: 8 },
        optim: OptimArgs { seed: SEED, iterations: GRID_ITERATIONS, batch_size: 3, validation_interval: 10 },
    }
}

fn read(path: &Path) -> Vec<u8> {
    std::fs::read(path).unwrap_or_default()
}

/// Whether every curve, checkpoint and the report agree byte for byte.
fn same_grid_outputs(a: &Path, b: &Path) -> bool {
    let mut files = vec![REPORT_FILE.to_string()];
    for s in WeightScheme::ALL {
        for lr in [0.001, 0.01] {
            files.push(curve_file(s, lr));
            files.push(checkpoint_file(s, lr));
        }
    }
    files.iter().all(|f| read(&a.join(f)) == read(&b.join(f)))
}

fn grid(data: &Path, a: &Path, b: &Path) -> Outcome {
    let start = Instant::now();
    let mut log = Vec::new();
    if let Err(e) = cmd_grid(&grid_args(data, a), &mut log) {
        return outcome(false, format!("grid failed: {e}"));
    }
    let first = start.elapsed().as_secs_f64();
    if let Err(e) = cmd_grid(&grid_args(data, b), &mut Vec::new()) {
        return outcome(false, format!("grid rerun failed: {e}"));
    }
    let curves = WeightScheme::ALL
        .iter()
        .flat_map(|&s| [0.001, 0.01].map(|lr| curve_file(s, lr)))
        .filter(|f| a.join(f).exists())
        .count();
    let report = String::from_utf8(read(&a.join(REPORT_FILE))).unwrap_or_default();
    let rows: Vec<Vec<String>> = report.lines().map(|l| l.split(',').map(String::from).collect()).collect();
    let shape = rows.len() == 1 + 8 + 3 && rows.iter().all(|r| r.len() == 7);
    let mut avg_ok = shape;
    let mut diverged = 0;
    if shape {
        for col in 1..7 {
            if rows[1][col] == "diverged" {
                diverged += 1;
                continue;
            }
            let classes: Vec<f64> = rows[1..9].iter().map(|r| r[col].parse().unwrap()).collect();
            let mean = classes.iter().sum::<f64>() / 8.0;
            let avg: f64 = rows[9][col].parse().unwrap();
            // class rows are rounded to one decimal
            avg_ok &= (mean - avg).abs() <= 0.05 + 1e-9;
        }
    }
    let deterministic = same_grid_outputs(a, b);
    print!("{}", String::from_utf8_lossy(&log));
    print!("{report}");
    outcome(
        curves == 6 && shape && avg_ok && deterministic,
        format!(
            "{curves} curves, report {}x{}, AVG consistent {avg_ok}, {diverged} diverged, byte-identical rerun {deterministic}, {first:.0} s per grid",
            rows.len(),
            rows.first().map_or(0, Vec::len)
        ),
    )
}

fn determinism(first: &Convergence, dataset: &Dataset, a: &Path, b: &Path) -> Outcome {
    let again = converge(dataset);
    let same_run = again.checkpoint == first.checkpoint && again.csv == first.csv;
    let same_grid = same_grid_outputs(a, b);
    outcome(same_run && same_grid, format!("convergence rerun identical {same_run}, grid rerun identical {same_grid}"))
}

fn main() {
    let mut results: Vec<(usize, &str, Outcome)> = vec![
        (1, "soft Dice gradient", soft_dice_gradients()),
        (2, "network gradient", network_gradients()),
        (3, "loss exactness", loss_exactness()),
        (4, "weight formulas", weight_formulas()),
        (5, "table aggregation", table_aggregation()),
        (6, "stitching", stitching()),
        (7, "Adam", adam_oracle()),
    ];
    for (n, name, o) in &results {
        println!("criterion {n} ({name}): {} {}", if o.passed { "PASS" } else { "FAIL" }, o.detail);
    }

    let noisy_data = phantom(PhantomSpec::default().noise_sigma);
    let noisy = converge(&noisy_data);
    let clean = converge(&phantom(0.0));
    let c8 = convergence(&noisy, &clean);
    println!("criterion 8 (convergence): {} {}", if c8.passed { "PASS" } else { "FAIL" }, c8.detail);
    print!("{}", noisy.csv);
    results.push((8, "convergence", c8));

    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    write_dataset(&noisy_data, &data).unwrap();
    let (ga, gb) = (tmp.path().join("grid_a"), tmp.path().join("grid_b"));
    let c9 = grid(&data, &ga, &gb);
    println!("criterion 9 (grid): {} {}", if c9.passed { "PASS" } else { "FAIL" }, c9.detail);
    results.push((9, "grid", c9));

    let c10 = determinism(&noisy, &noisy_data, &ga, &gb);
    println!("criterion 10 (determinism): {} {}", if c10.passed { "PASS" } else { "FAIL" }, c10.detail);
    results.push((10, "determinism", c10));

    let failed: Vec<usize> = results.iter().filter(|(_, _, o)| !o.passed).map(|(n, _, _)| *n).collect();
    if failed.is_empty() {
        println!("all {} criteria passed", results.len());
    } else {
        println!("failed criteria: {failed:?}");
        std::process::exit(1);
    }
}
