//! Acceptance run: one PASS/FAIL line per criterion, nonzero exit if any fails.

use std::path::Path;
use std::process::Command;
use std::time::{Duration, Instant};

use graphalign::bench::{self, AlignmentInputs, Bucket, Method, PipelineConfig, SelectorTraining, SweepGrid};
use graphalign::formats;
use graphalign::fusion::FusedBlock;
use graphalign::graph::{build_graph, GraphConfig, PadMode};
use graphalign::oracle;
use graphalign::safa::{
    finite_difference_gradient, init_params, selection_loss, selection_loss_gradient, self_attention, train_selector, AttentionMode, GradientMethod,
    SelectionTask, TrainerConfig,
};
use graphalign::scene::{generate, perturb, PerturbationSpec, SceneSpec};
use ndarray::{Array2, Array3, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Outcome = Result<String, String>;

fn ensure(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn complexity_claim() -> Outcome {
    let r = bench::complexity_ratio(1272, 375, 36);
    ensure((r - 368.06).abs() <= 0.01, format!("ratio {r:.4}"))
}

fn mac_exponent() -> Outcome {
    let (n, c) = (200, 12);
    let params = init_params(c, 1, 0).map_err(|e| e.to_string())?;
    let mut logs = Vec::new();
    for k in [8usize, 16, 32] {
        let mut rng = ChaCha8Rng::seed_from_u64(k as u64);
        let block = FusedBlock::new(
            Array3::from_shape_simple_fn((n, k, c), || rng.random_range(-1.0..1.0)),
            Array2::from_elem((n, k), true),
        )
        .map_err(|e| e.to_string())?;
        let macs = self_attention(&block, &params, AttentionMode::Literal).map_err(|e| e.to_string())?.macs.attention();
        logs.push(((k as f64).ln(), (macs as f64).ln()));
    }
    let mx = logs.iter().map(|p| p.0).sum::<f64>() / 3.0;
    let my = logs.iter().map(|p| p.1).sum::<f64>() / 3.0;
    let slope = logs.iter().map(|(x, y)| (x - mx) * (y - my)).sum::<f64>() / logs.iter().map(|(x, _)| (x - mx).powi(2)).sum::<f64>();
    ensure((slope - 2.0).abs() <= 0.1, format!("exponent {slope:.4}"))
}

fn knn_oracle() -> Outcome {
    let configs = [(16, 1000, PadMode::SelfIndex), (36, 5000, PadMode::SelfIndex), (9, 500, PadMode::LiteralZero), (25, 3000, PadMode::SelfIndex)];
    let mut max_n = 0;
    for seed in 0..20u64 {
        let scene = generate(&SceneSpec {
            seed,
            n_objects: 8,
            ground_points: 2500,
            points_per_object: 250,
            ..Default::default()
        })
        .map_err(|e| e.to_string())?;
        let n = scene.points.len();
        if n > 5000 {
            return Err(format!("seed {seed}: {n} points exceeds 5000"));
        }
        max_n = max_n.max(n);
        let (k, chunk, pad) = configs[seed as usize % configs.len()];
        let g = build_graph(&scene.points, &GraphConfig::new(k, chunk, pad).map_err(|e| e.to_string())?).map_err(|e| e.to_string())?;
        let reference = oracle::chunked_knn_reference(scene.points.coords(), k, chunk, pad);
        if let Some(i) = (0..n).find(|&i| g.row(i) != &reference[i].0[..] || g.valid_row(i) != &reference[i].1[..]) {
            return Err(format!("seed {seed} k={k} chunk={chunk}: row {i} differs"));
        }
    }
    Ok(format!("20 scenes identical, largest N = {max_n}"))
}

fn far_accuracy(scene_seed: u64, perturbation: &PerturbationSpec, method: Method, params: Option<&graphalign::safa::AttentionParams>) -> Result<f64, String> {
    let scene = generate(&SceneSpec {
        seed: scene_seed,
        ..Default::default()
    })
    .map_err(|e| e.to_string())?;
    let rig = perturb(&scene.rig, perturbation).map_err(|e| e.to_string())?;
    let report = bench::evaluate(&AlignmentInputs::from_scene(&scene, &rig), method, &PipelineConfig::default(), params).map_err(|e| e.to_string())?;
    Ok(report.bucket(Bucket::Far).accuracy)
}

fn clean_fidelity() -> Outcome {
    let mut accs = Vec::new();
    for seed in 0..5 {
        accs.push(far_accuracy(seed, &PerturbationSpec::default(), Method::ProjectionOnly, None)?);
    }
    let min = accs.iter().copied().fold(f64::INFINITY, f64::min);
    ensure(min >= 0.99, format!("far accuracy per scene {accs:.4?}"))
}

fn miscalibration_robustness() -> Outcome {
    let perturbation = |seed| PerturbationSpec {
        translation_sigma: 0.2,
        timing_skew: 0.1,
        seed,
        ..Default::default()
    };
    let trained = bench::train_on_scenes(&SceneSpec::default(), &perturbation(100), &PipelineConfig::default(), 1, &SelectorTraining::default())
        .map_err(|e| e.to_string())?;
    let mut mean = [0.0; 3];
    for s in 0..10u64 {
        for (m, method) in Method::ALL.into_iter().enumerate() {
            mean[m] += far_accuracy(s, &perturbation(100 + s), method, Some(&trained.params))? / 10.0;
        }
    }
    let [proj, max, safa] = mean;
    ensure(
        safa >= max && max >= proj && safa - proj >= 0.02,
        format!("far accuracy graph_safa_max {safa:.4}, graph_max {max:.4}, projection_only {proj:.4}"),
    )
}

fn attention_correctness() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let (mut fdiff, mut sum_err, mut masked) = (0.0f64, 0.0f64, 0usize);
    for case in 0..100u64 {
        let heads = [1, 2, 3, 4][case as usize % 4];
        let (n, k, c) = (rng.random_range(1..8), rng.random_range(1..10), heads * rng.random_range(1..4));
        let block = FusedBlock::new(
            Array3::from_shape_simple_fn((n, k, c), || rng.random_range(-2.0..2.0)),
            Array2::from_shape_simple_fn((n, k), || rng.random_bool(0.75)),
        )
        .map_err(|e| e.to_string())?;
        let params = init_params(c, heads, case).map_err(|e| e.to_string())?;
        for mode in [AttentionMode::Literal, AttentionMode::Standard] {
            let fast = self_attention(&block, &params, mode).map_err(|e| e.to_string())?;
            let slow = oracle::attention_reference(&block, &params, mode);
            let w = fast.weights.as_ref().ok_or("attention weights missing")?;
            fdiff = fdiff.max((&fast.features - &slow.features).iter().fold(0.0, |m, d| m.max(d.abs())));
            fdiff = fdiff.max((w - &slow.weights).iter().fold(0.0, |m, d| m.max(d.abs())));
            for (i, valid) in block.valid.outer_iter().enumerate() {
                if !valid.iter().any(|&v| v) {
                    continue;
                }
                for per_head in w.index_axis(Axis(0), i).outer_iter() {
                    for row in per_head.outer_iter() {
                        sum_err = sum_err.max((row.sum() - 1.0).abs());
                        masked += row.iter().zip(valid.iter()).filter(|(x, v)| !**v && **x != 0.0).count();
                    }
                }
            }
        }
    }
    ensure(
        fdiff <= 1e-9 && sum_err <= 1e-6 && masked == 0,
        format!("max oracle diff {fdiff:.2e}, max |row sum - 1| {sum_err:.2e}, {masked} nonzero masked weights"),
    )
}

fn trainer_sanity() -> Outcome {
    let task = SelectionTask::toy(64, 8, 8, 7).map_err(|e| e.to_string())?;
    let init = init_params(8, 1, 7).map_err(|e| e.to_string())?;
    let config = TrainerConfig {
        steps: 200,
        gradient: GradientMethod::FiniteDifference,
        ..Default::default()
    };
    let outcome = train_selector(std::slice::from_ref(&task), &init, &config).map_err(|e| e.to_string())?;
    let (first, last) = (outcome.losses[0], *outcome.losses.last().unwrap());
    let mut worst = 0.0f64;
    for seed in 0..20u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(500 + seed);
        let heads = [1, 2][seed as usize % 2];
        let mode = [AttentionMode::Literal, AttentionMode::Standard][(seed as usize / 2) % 2];
        let (n, k, c) = (rng.random_range(2..8), rng.random_range(2..6), 4);
        let block = FusedBlock::new(
            Array3::from_shape_simple_fn((n, k, c), || rng.random_range(-1.0..1.0)),
            Array2::from_shape_simple_fn((n, k), || rng.random_bool(0.8)),
        )
        .map_err(|e| e.to_string())?;
        let points = Array2::from_shape_simple_fn((n, c), || rng.random_range(-1.0..1.0));
        let targets = Array2::from_shape_simple_fn((n, c), || rng.random_range(-1.0..1.0));
        let t = SelectionTask::new(block, points, targets).map_err(|e| e.to_string())?;
        let params = init_params(c, heads, seed).map_err(|e| e.to_string())?;
        let tasks = std::slice::from_ref(&t);
        let (loss, analytic) = selection_loss_gradient(tasks, &params, mode).map_err(|e| e.to_string())?;
        if (loss - selection_loss(tasks, &params, mode).map_err(|e| e.to_string())?).abs() > 1e-12 {
            return Err(format!("instance {seed}: loss mismatch"));
        }
        let numeric = finite_difference_gradient(tasks, &params, mode, 1e-6).map_err(|e| e.to_string())?;
        let diff = analytic.iter().zip(&numeric).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
        let norm = numeric.iter().map(|b| b * b).sum::<f64>().sqrt();
        worst = worst.max(diff / norm.max(1e-12));
    }
    ensure(
        last < first && worst <= 1e-4,
        format!("toy MSE {first:.5} -> {last:.5}, analytic vs finite differences max relative error {worst:.2e}"),
    )
}

fn cli(args: &[&str]) -> Result<Vec<u8>, String> {
    let out = Command::new(env!("CARGO_BIN_EXE_graphalign"))
        .args(args)
        .env_remove("GRAPHALIGN_SEED")
        .output()
        .map_err(|e| e.to_string())?;
    if !out.status.success() {
        return Err(format!("{args:?}: {}", String::from_utf8_lossy(&out.stderr).trim()));
    }
    Ok(out.stdout)
}

fn sweep_without_timing(csv: &[u8]) -> Result<Vec<bench::SweepRow>, String> {
    Ok(bench::read_sweep_csv(csv)
        .map_err(|e| e.to_string())?
        .into_iter()
        .map(|r| bench::SweepRow {
            project_ms: 0.0,
            build_graph_ms: 0.0,
            fuse_ms: 0.0,
            attention_ms: 0.0,
            max_ms: 0.0,
            ..r
        })
        .collect())
}

fn determinism() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let common = [
        "--seed", "5", "--translation-sigma", "0.2", "--timing-skew", "0.1", "--perturb-seed", "105", "--heads", "2", "--train-steps", "5",
        "--train-rows", "200",
    ];
    let mut compared = 0;
    for sub in ["generate", "align", "sweep", "oracle-check"] {
        let mut outputs = Vec::new();
        for workers in ["1", "4"] {
            let out_dir = dir.path().join(format!("{sub}-{workers}"));
            let mut args = vec![sub, "--workers", workers];
            args.extend(common);
            let out_str = out_dir.to_str().unwrap().to_string();
            if sub == "generate" {
                args.extend(["--out", &out_str]);
            }
            if sub == "sweep" {
                args.extend(["--k", "9,16", "--heads", "1,2"]);
            }
            let stdout = cli(&args)?;
            outputs.push(match sub {
                "generate" => {
                    let files = ["points.gapc", "features.gafm", "calibration.txt", "ground_truth.csv"];
                    files.iter().flat_map(|f| std::fs::read(out_dir.join(f)).unwrap_or_default()).collect()
                }
                "align" => bench::strip_timing(&String::from_utf8_lossy(&stdout)).as_bytes().to_vec(),
                "sweep" => format!("{:?}", sweep_without_timing(&stdout)?).into_bytes(),
                _ => stdout,
            });
        }
        if outputs[0] != outputs[1] {
            return Err(format!("{sub} output differs between --workers 1 and 4"));
        }
        compared += 1;
    }
    Ok(format!("{compared} commands identical across --workers 1 and 4"))
}

fn rewrite<T>(bytes: &[u8], decode: impl Fn(&[u8]) -> graphalign::Result<T>, encode: impl Fn(&T) -> graphalign::Result<Vec<u8>>) -> Result<bool, String> {
    let value = decode(bytes).map_err(|e| e.to_string())?;
    Ok(encode(&value).map_err(|e| e.to_string())? == bytes)
}

fn sweep_bytes(rows: &[bench::SweepRow]) -> graphalign::Result<Vec<u8>> {
    let mut out = Vec::new();
    bench::write_sweep_csv(rows, &mut out)?;
    Ok(out)
}

fn format_round_trips() -> Outcome {
    for seed in 0..5u64 {
        let scene = generate(&SceneSpec {
            seed,
            n_objects: 8,
            ground_points: 2000,
            points_per_object: 200,
            ..Default::default()
        })
        .map_err(|e| e.to_string())?;
        let rig = perturb(
            &scene.rig,
            &PerturbationSpec {
                translation_sigma: 0.2,
                rotation_sigma: 0.01,
                timing_skew: 0.1,
                seed,
            },
        )
        .map_err(|e| e.to_string())?;
        let graph = build_graph(&scene.points, &GraphConfig::default()).map_err(|e| e.to_string())?;
        let params = init_params(12, [1, 2, 3, 4, 1][seed as usize], seed).map_err(|e| e.to_string())?;
        let grid = SweepGrid {
            methods: Method::ALL.to_vec(),
            ks: vec![9, 16],
            chunks: vec![1000],
            heads: vec![1],
        };
        let inputs = AlignmentInputs::from_scene(&scene, &rig);
        let rows = bench::sweep(&inputs, &grid, &PipelineConfig::default(), &|h| init_params(12, h, seed), 0).map_err(|e| e.to_string())?;
        let checks = [
            ("GAPC", rewrite(&formats::encode_point_cloud(&scene.points).map_err(|e| e.to_string())?, formats::decode_point_cloud, formats::encode_point_cloud)?),
            ("GAFM", rewrite(&formats::encode_feature_map(&scene.feature_map).map_err(|e| e.to_string())?, formats::decode_feature_map, formats::encode_feature_map)?),
            ("GAGR", rewrite(&formats::encode_graph(&graph).map_err(|e| e.to_string())?, formats::decode_graph, formats::encode_graph)?),
            ("GASA", rewrite(&formats::encode_params(&params).map_err(|e| e.to_string())?, formats::decode_params, formats::encode_params)?),
            (
                "calibration",
                rewrite(
                    formats::encode_calibration(&rig).as_bytes(),
                    |b| formats::decode_calibration(std::str::from_utf8(b).unwrap_or("")),
                    |r| Ok(formats::encode_calibration(r).into_bytes()),
                )?,
            ),
            ("sweep CSV", rewrite(&sweep_bytes(&rows).map_err(|e| e.to_string())?, |b: &[u8]| bench::read_sweep_csv(b), |r| sweep_bytes(r))?),
        ];
        if let Some((name, _)) = checks.iter().find(|(_, same)| !same) {
            return Err(format!("seed {seed}: {name} changed on rewrite"));
        }
    }
    Ok("6 formats byte-identical on 5 seeds".into())
}

fn main() {
    // the binary is built by cargo before this target runs
    assert!(Path::new(env!("CARGO_BIN_EXE_graphalign")).exists());
    let criteria: [(&str, fn() -> Outcome, Duration); 9] = [
        ("complexity ratio", complexity_claim, Duration::from_secs(1)),
        ("attention MAC exponent in K", mac_exponent, Duration::from_secs(10)),
        ("chunked KNN equals oracle", knn_oracle, Duration::from_secs(60)),
        ("clean projection far-range fidelity", clean_fidelity, Duration::from_secs(60)),
        ("miscalibration robustness ordering", miscalibration_robustness, Duration::from_secs(300)),
        ("attention matches loop oracle", attention_correctness, Duration::from_secs(30)),
        ("trainer sanity and gradient check", trainer_sanity, Duration::from_secs(300)),
        ("determinism across worker counts", determinism, Duration::from_secs(120)),
        ("format round trips", format_round_trips, Duration::from_secs(30)),
    ];
    let mut failed = 0;
    for (i, (name, run, budget)) in criteria.into_iter().enumerate() {
        let start = Instant::now();
        let result = run();
        let elapsed = start.elapsed();
        let (status, detail) = match result {
            Ok(d) if elapsed <= budget => ("PASS", d),
            Ok(d) => ("FAIL", format!("{d}; over time budget {budget:?}")),
            Err(d) => ("FAIL", d),
        };
        if status == "FAIL" {
            failed += 1;
        }
        println!("{status} criterion {}: {name} ({:.2}s): {detail}", i + 1, elapsed.as_secs_f64());
    }
    println!("acceptance: {} of 9 criteria passed", 9 - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
