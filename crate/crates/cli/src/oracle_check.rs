//! `oracle-check`: every fast path against its slow reference on the
//! configured scene.

use std::io::Write;

use graphalign::formats;
use graphalign::fusion::{assemble_neighbor_block, fuse, gather_image_features, ChannelAdapter};
use graphalign::geometry::project;
use graphalign::graph::{build_graph, knn_bruteforce, GraphConfig};
use graphalign::oracle;
use graphalign::safa::{finite_difference_gradient, init_params, max_select, selection_loss_gradient, self_attention, AttentionMode, SelectionTask};
use graphalign::scene;
use ndarray::Axis;

use crate::config::RunConfig;
use crate::CliError;

/// Largest cloud prefix compared against the full-space brute force.
const BRUTE_FORCE_POINTS: usize = 2000;
/// Rows of the fused block compared against the attention loops.
const ATTENTION_ROWS: usize = 400;
const GRADIENT_INSTANCES: u64 = 5;

pub struct Check {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

fn check(name: impl Into<String>, passed: bool, detail: impl Into<String>) -> Check {
    Check {
        name: name.into(),
        passed,
        detail: detail.into(),
    }
}

fn max_abs_diff<'a>(a: impl IntoIterator<Item = &'a f64>, b: impl IntoIterator<Item = &'a f64>) -> f64 {
    a.into_iter().zip(b).fold(0.0, |m, (x, y)| m.max((x - y).abs()))
}

fn round_trip<T>(name: &str, bytes: Vec<u8>, decode: impl Fn(&[u8]) -> graphalign::Result<T>, encode: impl Fn(&T) -> graphalign::Result<Vec<u8>>) -> Check {
    let again = decode(&bytes).and_then(|v| encode(&v));
    match again {
        Ok(b) => check(format!("format {name}"), b == bytes, format!("{} bytes", bytes.len())),
        Err(e) => check(format!("format {name}"), false, e.to_string()),
    }
}

fn encode_ground_truth(gt: &scene::GroundTruth) -> graphalign::Result<Vec<u8>> {
    let mut b = Vec::new();
    formats::write_ground_truth(gt, &mut b)?;
    Ok(b)
}

/// Runs all comparisons. Errors are returned only when the inputs themselves
/// cannot be built.
pub fn checks(cfg: &RunConfig) -> Result<Vec<Check>, CliError> {
    let mut out = Vec::new();
    let scene = scene::generate(&cfg.scene)?;
    let rig = scene::perturb(&scene.rig, &cfg.perturbation)?;
    let points = &scene.points;

    let proj = project(points, &rig);
    let reference = oracle::projection_reference(points, &rig);
    let (w, h) = (rig.image_width() as f64, rig.image_height() as f64);
    let kept: Vec<usize> = (0..reference.len())
        .filter(|&i| {
            let [u, v, z] = reference[i];
            z > 0.0 && (0.0..=w).contains(&u) && (0.0..=h).contains(&v)
        })
        .collect();
    let pixel_diff = if kept == proj.source_index {
        proj.source_index
            .iter()
            .enumerate()
            .map(|(row, &i)| {
                let r = reference[i];
                (proj.pixels[row][0] - r[0]).abs().max((proj.pixels[row][1] - r[1]).abs()).max((proj.depth[row] - r[2]).abs())
            })
            .fold(0.0, f64::max)
    } else {
        f64::INFINITY
    };
    out.push(check("projection", pixel_diff <= 1e-9, format!("{} kept, max diff {pixel_diff:.3e}", kept.len())));

    for &k in &cfg.ks {
        for &chunk in &cfg.chunks {
            let g = build_graph(points, &GraphConfig::new(k, chunk, cfg.pad_mode)?)?;
            let reference = oracle::chunked_knn_reference(points.coords(), k, chunk, cfg.pad_mode);
            let bad = reference
                .iter()
                .enumerate()
                .filter(|(i, (idx, valid))| g.row(*i) != &idx[..] || g.valid_row(*i) != &valid[..])
                .count();
            out.push(check(format!("chunked graph k={k} chunk={chunk}"), bad == 0, format!("{bad} of {} rows differ", reference.len())));
        }
    }

    let m = points.len().min(BRUTE_FORCE_POINTS);
    if m > 0 {
        let prefix = points.permuted(&(0..m).collect::<Vec<_>>());
        let k = cfg.ks[0].min(m);
        let chunked = build_graph(&prefix, &GraphConfig::new(k, m, cfg.pad_mode)?)?;
        let full = knn_bruteforce(&prefix, k)?;
        let same = chunked.indices() == full.indices() && chunked.valid() == full.valid();
        out.push(check(format!("single chunk equals brute force k={k}"), same, format!("{m} points")));
    }

    let adapter = ChannelAdapter::identity(scene.feature_map.channels());
    let gathered = gather_image_features(&scene.feature_map, &proj, &adapter)?;
    out.push(check(
        "gather",
        gathered == oracle::gather_reference(&scene.feature_map, &proj.pixels),
        format!("{} rows", gathered.nrows()),
    ));

    let graph = build_graph(points, &GraphConfig::new(cfg.ks[0], cfg.chunks[0], cfg.pad_mode)?)?;
    let (nb, mask) = assemble_neighbor_block(&gathered, &graph, &proj)?;
    let block = fuse(points.features().view(), &nb, &mask)?;
    let step = proj.len().div_ceil(ATTENTION_ROWS).max(1);
    let rows: Vec<usize> = proj.source_index.iter().copied().step_by(step).collect();
    let block = block.select_rows(&rows);
    for &heads in &cfg.heads {
        let params = init_params(block.channels(), heads, cfg.attention_seed)?;
        for mode in [AttentionMode::Literal, AttentionMode::Standard] {
            let fast = self_attention(&block, &params, mode)?;
            let slow = oracle::attention_reference(&block, &params, mode);
            let weights = fast.weights.as_ref().expect("self_attention keeps weights");
            let fdiff = max_abs_diff(&fast.features, &slow.features);
            let wdiff = max_abs_diff(weights, &slow.weights);
            out.push(check(
                format!("attention {} H={heads}", mode.as_str()),
                fdiff <= 1e-9 && wdiff <= 1e-9,
                format!("{} rows, features {fdiff:.3e}, weights {wdiff:.3e}", block.n()),
            ));
            let (mut sum_err, mut masked_nonzero) = (0.0f64, 0usize);
            for (i, valid) in block.valid.outer_iter().enumerate() {
                if !valid.iter().any(|&v| v) {
                    continue;
                }
                for hh in 0..heads {
                    for row in weights.index_axis(Axis(0), i).index_axis(Axis(0), hh).outer_iter() {
                        sum_err = sum_err.max((row.sum() - 1.0).abs());
                        masked_nonzero += row.iter().zip(valid.iter()).filter(|(w, v)| !**v && **w != 0.0).count();
                    }
                }
            }
            out.push(check(
                format!("softmax rows {} H={heads}", mode.as_str()),
                sum_err <= 1e-6 && masked_nonzero == 0,
                format!("max |sum - 1| {sum_err:.3e}, {masked_nonzero} nonzero masked weights"),
            ));
            let selected = max_select(fast.features.view(), &block.valid)?;
            out.push(check(
                format!("max selection {} H={heads}", mode.as_str()),
                selected.features == oracle::masked_max_reference(&fast.features, &block.valid),
                format!("{} rows", block.n()),
            ));
        }
    }

    let mut worst = 0.0f64;
    for seed in 0..GRADIENT_INSTANCES {
        for mode in [AttentionMode::Literal, AttentionMode::Standard] {
            let task = SelectionTask::toy(12, 4, 4, seed)?;
            let params = init_params(4, 2, seed)?;
            let tasks = std::slice::from_ref(&task);
            let (_, analytic) = selection_loss_gradient(tasks, &params, mode)?;
            let numeric = finite_difference_gradient(tasks, &params, mode, 1e-6)?;
            let diff = analytic.iter().zip(&numeric).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
            let norm = numeric.iter().map(|b| b * b).sum::<f64>().sqrt();
            worst = worst.max(diff / norm.max(1e-12));
        }
    }
    out.push(check("analytic gradient", worst <= 1e-4, format!("max relative error {worst:.3e}")));

    out.push(round_trip("GAPC", formats::encode_point_cloud(points)?, formats::decode_point_cloud, formats::encode_point_cloud));
    out.push(round_trip("GAFM", formats::encode_feature_map(&scene.feature_map)?, formats::decode_feature_map, formats::encode_feature_map));
    out.push(round_trip("GAGR", formats::encode_graph(&graph)?, formats::decode_graph, formats::encode_graph));
    let params = init_params(points.channels(), cfg.heads[0], cfg.attention_seed)?;
    out.push(round_trip("GASA", formats::encode_params(&params)?, formats::decode_params, formats::encode_params));
    out.push(round_trip(
        "calibration",
        formats::encode_calibration(&rig).into_bytes(),
        |b| formats::decode_calibration(&String::from_utf8_lossy(b)),
        |r| Ok(formats::encode_calibration(r).into_bytes()),
    ));
    out.push(round_trip("ground truth", encode_ground_truth(&scene.ground_truth)?, |b: &[u8]| formats::read_ground_truth(b), encode_ground_truth));
    Ok(out)
}

pub fn run(cfg: &RunConfig, out: &mut dyn Write) -> Result<(), CliError> {
    let results = checks(cfg)?;
    let mut text = String::new();
    for c in &results {
        text.push_str(&format!("{} {}: {}\n", if c.passed { "PASS" } else { "FAIL" }, c.name, c.detail));
    }
    out.write_all(text.as_bytes()).map_err(|e| graphalign::Error::io("<stdout>", e))?;
    match results.iter().filter(|c| !c.passed).count() {
        0 => Ok(()),
        n => Err(CliError::OracleMismatch(n)),
    }
}
