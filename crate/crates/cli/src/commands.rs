use std::io::Write;
use std::path::Path;

use graphalign::bench::{self, AlignmentInputs, Method, PipelineConfig, SelectorTraining, SweepGrid};
use graphalign::formats;
use graphalign::fusion::ImageFeatureMap;
use graphalign::geometry::{apply_augmentation, CalibrationRig, PointSet};
use graphalign::safa::{init_params, AttentionParams};
use graphalign::scene::{self, GroundTruth};

use crate::config::{RunConfig, CALIBRATION_FILE, FEATURES_FILE, GROUND_TRUTH_FILE, POINTS_FILE};
use crate::CliError;

/// Inputs of one alignment run, owned.
pub struct Loaded {
    pub points: PointSet,
    pub feature_map: ImageFeatureMap,
    pub rig: CalibrationRig,
    pub ground_truth: GroundTruth,
}

impl Loaded {
    pub fn inputs(&self) -> AlignmentInputs<'_> {
        AlignmentInputs {
            points: &self.points,
            feature_map: &self.feature_map,
            rig: &self.rig,
            ground_truth: &self.ground_truth,
        }
    }
}

/// Generates the configured scene as the aligner sees it: augmented points
/// and the miscalibrated rig.
pub fn synthesize(cfg: &RunConfig) -> Result<Loaded, CliError> {
    let scene = scene::generate(&cfg.scene)?;
    let rig = scene::perturb(&scene.rig, &cfg.perturbation)?;
    let points = match cfg.augmentation() {
        Some(rec) => apply_augmentation(&scene.points, &rec)?,
        None => scene.points,
    };
    Ok(Loaded {
        points,
        feature_map: scene.feature_map,
        rig,
        ground_truth: scene.ground_truth,
    })
}

/// Reads inputs from files when any input path is configured, otherwise
/// generates them.
pub fn load(cfg: &RunConfig) -> Result<Loaded, CliError> {
    if !cfg.has_file_inputs() {
        return synthesize(cfg);
    }
    let [points, fmap, calib, gt] = cfg.input_paths()?;
    Ok(Loaded {
        points: formats::load_point_cloud(&points)?,
        feature_map: formats::load_feature_map(&fmap)?,
        rig: formats::load_calibration(&calib)?,
        ground_truth: formats::load_ground_truth(&gt)?,
    })
}

pub fn generate(cfg: &RunConfig) -> Result<(), CliError> {
    let dir = cfg.out.as_deref().ok_or_else(|| CliError::Usage("generate needs --out DIR".into()))?;
    std::fs::create_dir_all(dir).map_err(|e| graphalign::Error::io(dir, e))?;
    let data = synthesize(cfg)?;
    formats::write_file(&dir.join(POINTS_FILE), &formats::encode_point_cloud(&data.points)?)?;
    formats::write_file(&dir.join(FEATURES_FILE), &formats::encode_feature_map(&data.feature_map)?)?;
    formats::write_file(&dir.join(CALIBRATION_FILE), formats::encode_calibration(&data.rig).as_bytes())?;
    formats::save_ground_truth(&dir.join(GROUND_TRUTH_FILE), &data.ground_truth)?;
    Ok(())
}

/// Attention parameters for `heads`: read from the params file, trained on
/// synthetic scenes when `train_steps > 0`, or a seeded init.
pub fn attention_params(cfg: &RunConfig, channels: usize, heads: usize, pipeline: &PipelineConfig) -> graphalign::Result<AttentionParams> {
    if let Some(path) = &cfg.params {
        let params = formats::load_params(path)?;
        if params.heads() != heads || params.channels() != channels {
            return Err(graphalign::Error::InvalidInput(format!(
                "{} holds C={} H={}, run needs C={channels} H={heads}",
                path.display(),
                params.channels(),
                params.heads()
            )));
        }
        return Ok(params);
    }
    if cfg.training.trainer.steps > 0 {
        let training = SelectorTraining {
            init_seed: cfg.attention_seed,
            ..cfg.training
        };
        // training scenes are generated unaugmented
        let config = PipelineConfig {
            augmentation: None,
            ..pipeline.clone()
        };
        return Ok(bench::train_on_scenes(&cfg.scene, &cfg.perturbation, &config, heads, &training)?.params);
    }
    init_params(channels, heads, cfg.attention_seed)
}

fn write_output(path: Option<&Path>, bytes: &[u8], out: &mut dyn Write) -> Result<(), CliError> {
    match path {
        Some(p) => formats::write_file(p, bytes)?,
        None => out
            .write_all(bytes)
            .and_then(|_| out.flush())
            .map_err(|e| graphalign::Error::io("<stdout>", e))?,
    }
    Ok(())
}

/// Renders the alignment report of `cfg` without writing it.
pub fn align_report(cfg: &RunConfig) -> Result<(String, Loaded, Option<AttentionParams>), CliError> {
    let k = cfg.single("k", &cfg.ks)?;
    let chunk = cfg.single("chunk", &cfg.chunks)?;
    let heads = cfg.single("heads", &cfg.heads)?;
    let data = load(cfg)?;
    let pipeline = cfg.pipeline(k, chunk);
    let params = if cfg.methods.contains(&Method::GraphSafaMax) || cfg.params_out.is_some() {
        Some(attention_params(cfg, data.points.channels(), heads, &pipeline)?)
    } else {
        None
    };
    let inputs = data.inputs();
    let mut report = bench::alignment_report(&inputs, &cfg.methods, &pipeline, params.as_ref(), cfg.echo())?;
    if cfg.timing_repetitions >= 3 {
        for m in &mut report.methods {
            m.timing = bench::time_pipeline(&inputs, m.method, &pipeline, params.as_ref(), cfg.timing_repetitions)?;
        }
    }
    report.check_invariants()?;
    Ok((report.render(), data, params))
}

pub fn align(cfg: &RunConfig, out: &mut dyn Write) -> Result<(), CliError> {
    let (text, data, params) = align_report(cfg)?;
    if let (Some(path), Some(p)) = (&cfg.params_out, &params) {
        formats::write_file(path, &formats::encode_params(p)?)?;
    }
    if let Some(path) = &cfg.fused_out {
        let method = *cfg.methods.last().expect("validated non-empty");
        let pipeline = cfg.pipeline(cfg.ks[0], cfg.chunks[0]);
        let output = bench::run_pipeline(&data.inputs(), method, &pipeline, params.as_ref())?;
        let coords = output.rows.iter().map(|&i| data.points.coords()[i]).collect();
        let labels = output.rows.iter().map(|&i| data.points.labels()[i]).collect();
        let fused = PointSet::new(coords, output.features, labels)?;
        formats::write_file(path, &formats::encode_point_cloud(&fused)?)?;
    }
    write_output(cfg.report.as_deref(), text.as_bytes(), out)
}

/// Sweep CSV with the effective configuration as comment lines after the
/// version line.
pub fn sweep_csv(cfg: &RunConfig) -> Result<String, CliError> {
    let grid = SweepGrid {
        methods: cfg.methods.clone(),
        ks: cfg.ks.clone(),
        chunks: cfg.chunks.clone(),
        heads: cfg.heads.clone(),
    };
    grid.validate().map_err(|e| CliError::Usage(e.to_string()))?;
    let data = load(cfg)?;
    let channels = data.points.channels();
    let base = cfg.pipeline(cfg.ks[0], cfg.chunks[0]);
    let params_for = |h: usize| attention_params(cfg, channels, h, &base);
    let rows = bench::sweep(&data.inputs(), &grid, &base, &params_for, cfg.timing_repetitions)?;
    bench::check_sweep_rows(&rows)?;
    let mut buf = Vec::new();
    bench::write_sweep_csv(&rows, &mut buf)?;
    let text = String::from_utf8(buf).expect("csv writer emits utf-8");
    let (version, body) = text.split_once('\n').unwrap_or((&text, ""));
    let mut csv = format!("{version}\n");
    for (k, v) in cfg.echo() {
        csv.push_str(&format!("# {k}: {v}\n"));
    }
    csv.push_str(body);
    Ok(csv)
}

pub fn sweep(cfg: &RunConfig, out: &mut dyn Write) -> Result<(), CliError> {
    let csv = sweep_csv(cfg)?;
    write_output(cfg.csv.as_deref(), csv.as_bytes(), out)
}
