//! Run configuration: defaults, flat key-value files, flag overrides and the
//! `GRAPHALIGN_SEED` environment override.
//!
//! Every key in [`KEYS`] is accepted both in a config file (`key = value`)
//! and as a `--key-name` flag. Later sources win: defaults, then the file,
//! then flags, then the environment seed.

use std::path::{Path, PathBuf};

use graphalign::bench::{Method, PipelineConfig, SelectorTraining};
use graphalign::geometry::AugmentationRecord;
use graphalign::graph::{GraphConfig, PadMode};
use graphalign::safa::AttentionMode;
use graphalign::scene::{PerturbationSpec, SceneSpec};

use crate::CliError;

pub const SEED_ENV: &str = "GRAPHALIGN_SEED";

/// Largest neighbor count accepted.
pub const MAX_K: usize = 64;

pub struct Key {
    pub name: &'static str,
    pub flag: &'static str,
    pub help: &'static str,
    /// Echoed into reports; output paths and the worker count are not.
    pub echo: bool,
}

const fn key(name: &'static str, flag: &'static str, help: &'static str) -> Key {
    Key { name, flag, help, echo: true }
}

const fn quiet(name: &'static str, flag: &'static str, help: &'static str) -> Key {
    Key { name, flag, help, echo: false }
}

pub const KEYS: &[Key] = &[
    key("seed", "seed", "Scene seed"),
    key("n_objects", "n-objects", "Objects per scene"),
    key("n_classes", "n-classes", "Object classes"),
    key("range_max", "range-max", "Farthest object and ground range, meters"),
    key("min_range", "min-range", "Closest object range, meters"),
    key("points_per_object", "points-per-object", "LiDAR returns per object at 10 m"),
    key("ground_points", "ground-points", "Ground returns per scene"),
    key("image_width", "image-width", "Feature-map width, pixels"),
    key("image_height", "image-height", "Feature-map height, pixels"),
    key("channels", "channels", "Feature channels"),
    key("scan_order", "scan-order", "Store points in scan order (true) or shuffled (false)"),
    key("focal_length", "focal-length", "Focal length, pixels"),
    key("feature_noise", "feature-noise", "Std-dev of point feature noise"),
    key("translation_sigma", "translation-sigma", "Per-axis translation error std-dev, meters"),
    key("rotation_sigma", "rotation-sigma", "Rotation error std-dev, radians"),
    key("timing_skew", "timing-skew", "Lateral offset emulating time-sync error, meters"),
    key("perturb_seed", "perturb-seed", "Calibration error seed"),
    key("augment_flip", "augment-flip", "Points are flipped about the x axis (y -> -y)"),
    key("augment_yaw", "augment-yaw", "Points are rotated by this yaw, radians"),
    key("augment_scale", "augment-scale", "Points are scaled by this factor"),
    key("k", "k", "Neighbors per point (comma list for sweeps, at most 64)"),
    key("chunk", "chunk", "Points per index chunk (comma list for sweeps)"),
    key("pad_mode", "pad-mode", "Padding of short chunks: self_index or literal_zero"),
    key("heads", "heads", "Attention heads, must divide channels (comma list for sweeps)"),
    key("mode", "mode", "Attention variant: literal or standard"),
    key("attention_seed", "attention-seed", "Seed of the attention parameter init"),
    key("params", "params", "GASA parameter file to use instead of a seeded init"),
    quiet("params_out", "params-out", "Write the attention parameters used to this GASA file"),
    key("train_steps", "train-steps", "Gradient steps fitting attention on training scenes (0 = no training)"),
    key("train_scenes", "train-scenes", "Training scenes"),
    key("train_rows", "train-rows", "Training rows per scene"),
    key("learning_rate", "learning-rate", "Training learning rate"),
    key("methods", "methods", "Comma list of projection_only, graph_max, graph_safa_max"),
    key("timing_repetitions", "timing-repetitions", "Timed repetitions per pipeline (0 = time the scored run only, else at least 3)"),
    key("data", "data", "Directory holding points.gapc, features.gafm, calibration.txt, ground_truth.csv"),
    key("points", "points", "GAPC point cloud (overrides the data directory)"),
    key("feature_map", "feature-map", "GAFM feature map (overrides the data directory)"),
    key("calibration", "calibration", "Calibration text file (overrides the data directory)"),
    key("ground_truth", "ground-truth", "Ground-truth CSV (overrides the data directory)"),
    quiet("out", "out", "Output directory of generate"),
    quiet("report", "report", "Report file of align (stdout if unset)"),
    quiet("fused_out", "fused-out", "GAPC dump of the fused features of the last method"),
    quiet("csv", "csv", "Sweep CSV file (stdout if unset)"),
    quiet("workers", "workers", "Worker threads (default: all cores)"),
];

pub const POINTS_FILE: &str = "points.gapc";
pub const FEATURES_FILE: &str = "features.gafm";
pub const CALIBRATION_FILE: &str = "calibration.txt";
pub const GROUND_TRUTH_FILE: &str = "ground_truth.csv";

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub scene: SceneSpec,
    pub perturbation: PerturbationSpec,
    pub augmentation: AugmentationRecord,
    pub ks: Vec<usize>,
    pub chunks: Vec<usize>,
    pub pad_mode: PadMode,
    pub heads: Vec<usize>,
    pub mode: AttentionMode,
    pub attention_seed: u64,
    pub params: Option<PathBuf>,
    pub params_out: Option<PathBuf>,
    pub training: SelectorTraining,
    pub methods: Vec<Method>,
    pub timing_repetitions: usize,
    pub data: Option<PathBuf>,
    pub points: Option<PathBuf>,
    pub feature_map: Option<PathBuf>,
    pub calibration: Option<PathBuf>,
    pub ground_truth: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub report: Option<PathBuf>,
    pub fused_out: Option<PathBuf>,
    pub csv: Option<PathBuf>,
    pub workers: Option<usize>,
}

impl Default for RunConfig {
    fn default() -> Self {
        let mut training = SelectorTraining::default();
        training.trainer.steps = 0;
        Self {
            scene: SceneSpec::default(),
            perturbation: PerturbationSpec::default(),
            augmentation: AugmentationRecord::default(),
            ks: vec![16],
            chunks: vec![1000],
            pad_mode: PadMode::SelfIndex,
            heads: vec![1],
            mode: AttentionMode::Literal,
            attention_seed: 42,
            params: None,
            params_out: None,
            training,
            methods: Method::ALL.to_vec(),
            timing_repetitions: 0,
            data: None,
            points: None,
            feature_map: None,
            calibration: None,
            ground_truth: None,
            out: None,
            report: None,
            fused_out: None,
            csv: None,
            workers: None,
        }
    }
}

fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T, CliError> {
    value
        .trim()
        .parse()
        .map_err(|_| CliError::Usage(format!("bad value `{value}` for {key}")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool, CliError> {
    match value.trim() {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(CliError::Usage(format!("bad value `{value}` for {key}, expected true or false"))),
    }
}

fn parse_list<T: std::str::FromStr>(key: &str, value: &str) -> Result<Vec<T>, CliError> {
    let items = value
        .split(',')
        .filter(|s| !s.trim().is_empty())
        .map(|s| parse(key, s))
        .collect::<Result<Vec<T>, _>>()?;
    if items.is_empty() {
        return Err(CliError::Usage(format!("{key} needs at least one value")));
    }
    Ok(items)
}

fn join<T: ToString>(items: &[T]) -> String {
    items.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",")
}

fn path_str(p: &Option<PathBuf>) -> String {
    p.as_ref().map(|p| p.display().to_string()).unwrap_or_default()
}

impl RunConfig {
    /// Sets one key from its textual value.
    pub fn set(&mut self, key: &str, value: &str) -> Result<(), CliError> {
        let path = || Some(PathBuf::from(value.trim()));
        match key {
            "seed" => self.scene.seed = parse(key, value)?,
            "n_objects" => self.scene.n_objects = parse(key, value)?,
            "n_classes" => self.scene.n_classes = parse(key, value)?,
            "range_max" => self.scene.range_max = parse(key, value)?,
            "min_range" => self.scene.min_range = parse(key, value)?,
            "points_per_object" => self.scene.points_per_object = parse(key, value)?,
            "ground_points" => self.scene.ground_points = parse(key, value)?,
            "image_width" => self.scene.image_width = parse(key, value)?,
            "image_height" => self.scene.image_height = parse(key, value)?,
            "channels" => self.scene.channels = parse(key, value)?,
            "scan_order" => self.scene.scan_order = parse_bool(key, value)?,
            "focal_length" => self.scene.focal_length = parse(key, value)?,
            "feature_noise" => self.scene.feature_noise = parse(key, value)?,
            "translation_sigma" => self.perturbation.translation_sigma = parse(key, value)?,
            "rotation_sigma" => self.perturbation.rotation_sigma = parse(key, value)?,
            "timing_skew" => self.perturbation.timing_skew = parse(key, value)?,
            "perturb_seed" => self.perturbation.seed = parse(key, value)?,
            "augment_flip" => self.augmentation.flipped_y = parse_bool(key, value)?,
            "augment_yaw" => self.augmentation.yaw = parse(key, value)?,
            "augment_scale" => self.augmentation.scale_factor = parse(key, value)?,
            "k" => self.ks = parse_list(key, value)?,
            "chunk" => self.chunks = parse_list(key, value)?,
            "pad_mode" => self.pad_mode = value.trim().parse().map_err(|e: graphalign::Error| CliError::Usage(e.to_string()))?,
            "heads" => self.heads = parse_list(key, value)?,
            "mode" => self.mode = value.trim().parse().map_err(|e: graphalign::Error| CliError::Usage(e.to_string()))?,
            "attention_seed" => self.attention_seed = parse(key, value)?,
            "params" => self.params = path(),
            "params_out" => self.params_out = path(),
            "train_steps" => self.training.trainer.steps = parse(key, value)?,
            "train_scenes" => self.training.scenes = parse(key, value)?,
            "train_rows" => self.training.rows_per_scene = parse(key, value)?,
            "learning_rate" => self.training.trainer.learning_rate = parse(key, value)?,
            "methods" => {
                self.methods = value
                    .split(',')
                    .filter(|s| !s.trim().is_empty())
                    .map(|s| s.trim().parse::<Method>().map_err(|e| CliError::Usage(e.to_string())))
                    .collect::<Result<_, _>>()?
            }
            "timing_repetitions" => self.timing_repetitions = parse(key, value)?,
            "data" => self.data = path(),
            "points" => self.points = path(),
            "feature_map" => self.feature_map = path(),
            "calibration" => self.calibration = path(),
            "ground_truth" => self.ground_truth = path(),
            "out" => self.out = path(),
            "report" => self.report = path(),
            "fused_out" => self.fused_out = path(),
            "csv" => self.csv = path(),
            "workers" => self.workers = Some(parse(key, value)?),
            _ => return Err(CliError::Usage(format!("unknown config key `{key}`"))),
        }
        Ok(())
    }

    /// Current value of `key` in the syntax [`RunConfig::set`] accepts.
    pub fn get(&self, key: &str) -> String {
        match key {
            "seed" => self.scene.seed.to_string(),
            "n_objects" => self.scene.n_objects.to_string(),
            "n_classes" => self.scene.n_classes.to_string(),
            "range_max" => self.scene.range_max.to_string(),
            "min_range" => self.scene.min_range.to_string(),
            "points_per_object" => self.scene.points_per_object.to_string(),
            "ground_points" => self.scene.ground_points.to_string(),
            "image_width" => self.scene.image_width.to_string(),
            "image_height" => self.scene.image_height.to_string(),
            "channels" => self.scene.channels.to_string(),
            "scan_order" => self.scene.scan_order.to_string(),
            "focal_length" => self.scene.focal_length.to_string(),
            "feature_noise" => self.scene.feature_noise.to_string(),
            "translation_sigma" => self.perturbation.translation_sigma.to_string(),
            "rotation_sigma" => self.perturbation.rotation_sigma.to_string(),
            "timing_skew" => self.perturbation.timing_skew.to_string(),
            "perturb_seed" => self.perturbation.seed.to_string(),
            "augment_flip" => self.augmentation.flipped_y.to_string(),
            "augment_yaw" => self.augmentation.yaw.to_string(),
            "augment_scale" => self.augmentation.scale_factor.to_string(),
            "k" => join(&self.ks),
            "chunk" => join(&self.chunks),
            "pad_mode" => self.pad_mode.as_str().to_string(),
            "heads" => join(&self.heads),
            "mode" => self.mode.as_str().to_string(),
            "attention_seed" => self.attention_seed.to_string(),
            "params" => path_str(&self.params),
            "params_out" => path_str(&self.params_out),
            "train_steps" => self.training.trainer.steps.to_string(),
            "train_scenes" => self.training.scenes.to_string(),
            "train_rows" => self.training.rows_per_scene.to_string(),
            "learning_rate" => self.training.trainer.learning_rate.to_string(),
            "methods" => self.methods.iter().map(|m| m.as_str()).collect::<Vec<_>>().join(","),
            "timing_repetitions" => self.timing_repetitions.to_string(),
            "data" => path_str(&self.data),
            "points" => path_str(&self.points),
            "feature_map" => path_str(&self.feature_map),
            "calibration" => path_str(&self.calibration),
            "ground_truth" => path_str(&self.ground_truth),
            "out" => path_str(&self.out),
            "report" => path_str(&self.report),
            "fused_out" => path_str(&self.fused_out),
            "csv" => path_str(&self.csv),
            "workers" => self.workers.map(|w| w.to_string()).unwrap_or_default(),
            _ => String::new(),
        }
    }

    /// Applies a flat `key = value` file. Blank lines and `#` comments are
    /// skipped; `:` is accepted in place of `=`.
    pub fn apply_file_text(&mut self, text: &str) -> Result<(), CliError> {
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .or_else(|| line.split_once(':'))
                .ok_or_else(|| CliError::Usage(format!("config line {}: expected `key = value`", lineno + 1)))?;
            self.set(k.trim(), v.trim())?;
        }
        Ok(())
    }

    pub fn apply_file(&mut self, path: &Path) -> Result<(), CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| graphalign::Error::io(path, e))?;
        self.apply_file_text(&text)
    }

    /// Replaces every seed with `seed`.
    pub fn override_seeds(&mut self, seed: u64) {
        self.scene.seed = seed;
        self.perturbation.seed = seed;
        self.attention_seed = seed;
    }

    pub fn validate(&self) -> Result<(), CliError> {
        let usage = |m: String| Err(CliError::Usage(m));
        if let Some(&k) = self.ks.iter().find(|&&k| k == 0 || k > MAX_K) {
            return usage(format!("k = {k} outside 1..={MAX_K}"));
        }
        if self.chunks.contains(&0) {
            return usage("chunk must be positive".into());
        }
        if let Some(&h) = self.heads.iter().find(|&&h| h == 0 || self.scene.channels % h != 0) {
            return usage(format!("heads = {h} must divide channels = {}", self.scene.channels));
        }
        if self.scene.n_classes == 0 || self.scene.n_classes > self.scene.channels {
            return usage(format!(
                "n_classes = {} must lie in 1..=channels ({})",
                self.scene.n_classes, self.scene.channels
            ));
        }
        if self.methods.is_empty() {
            return usage("no methods selected".into());
        }
        if self.timing_repetitions > 0 && self.timing_repetitions < 3 {
            return usage("timing_repetitions must be 0 or at least 3".into());
        }
        if self.workers == Some(0) {
            return usage("workers must be positive".into());
        }
        Ok(())
    }

    /// Effective configuration for report provenance.
    pub fn echo(&self) -> Vec<(String, String)> {
        KEYS.iter()
            .filter(|k| k.echo)
            .map(|k| (k.name.to_string(), self.get(k.name)))
            .collect()
    }

    pub fn augmentation(&self) -> Option<AugmentationRecord> {
        (self.augmentation != AugmentationRecord::default()).then_some(self.augmentation)
    }

    /// Pipeline settings for one `(k, chunk)` cell.
    pub fn pipeline(&self, k: usize, chunk: usize) -> PipelineConfig {
        PipelineConfig {
            graph: GraphConfig {
                k,
                chunk_size: chunk,
                pad_mode: self.pad_mode,
            },
            mode: self.mode,
            classes: self.scene.n_classes,
            augmentation: self.augmentation(),
        }
    }

    /// The single value of a list-valued key, for commands that take one.
    pub fn single(&self, key: &str, values: &[usize]) -> Result<usize, CliError> {
        match values {
            [v] => Ok(*v),
            _ => Err(CliError::Usage(format!("{key} takes a single value here, got {}", join(values)))),
        }
    }

    fn input(&self, explicit: &Option<PathBuf>, file: &str) -> Option<PathBuf> {
        explicit.clone().or_else(|| self.data.as_ref().map(|d| d.join(file)))
    }

    pub fn has_file_inputs(&self) -> bool {
        self.data.is_some() || self.points.is_some() || self.feature_map.is_some() || self.calibration.is_some() || self.ground_truth.is_some()
    }

    /// Input paths `(points, feature map, calibration, ground truth)`.
    pub fn input_paths(&self) -> Result<[PathBuf; 4], CliError> {
        let need = |p: Option<PathBuf>, what: &str| p.ok_or_else(|| CliError::Usage(format!("no {what} given (set data or {what})")));
        Ok([
            need(self.input(&self.points, POINTS_FILE), "points")?,
            need(self.input(&self.feature_map, FEATURES_FILE), "feature_map")?,
            need(self.input(&self.calibration, CALIBRATION_FILE), "calibration")?,
            need(self.input(&self.ground_truth, GROUND_TRUTH_FILE), "ground_truth")?,
        ])
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_key_round_trips() {
        let c = RunConfig::default();
        for k in KEYS {
            let v = c.get(k.name);
            let mut d = RunConfig::default();
            if !v.is_empty() {
                d.set(k.name, &v).unwrap();
            }
            assert_eq!(d, c, "key {}", k.name);
        }
    }

    #[test]
    fn file_then_override() {
        let mut c = RunConfig::default();
        c.apply_file_text("# comment\nk = 9,16\nmode: standard\n\nseed=5\n").unwrap();
        assert_eq!(c.ks, vec![9, 16]);
        assert_eq!(c.mode, AttentionMode::Standard);
        c.set("seed", "7").unwrap();
        assert_eq!(c.scene.seed, 7);
        assert!(c.apply_file_text("bogus = 1").is_err());
        assert!(c.apply_file_text("no separator").is_err());
    }

    #[test]
    fn validation_ranges() {
        let mut c = RunConfig::default();
        c.validate().unwrap();
        c.ks = vec![65];
        assert!(c.validate().is_err());
        c.ks = vec![64];
        c.heads = vec![5];
        assert!(c.validate().is_err());
        c.heads = vec![4];
        c.validate().unwrap();
        c.timing_repetitions = 2;
        assert!(c.validate().is_err());
    }

    #[test]
    fn seeds_override_together() {
        let mut c = RunConfig::default();
        c.override_seeds(11);
        assert_eq!((c.scene.seed, c.perturbation.seed, c.attention_seed), (11, 11, 11));
    }

    #[test]
    fn echo_skips_outputs_and_workers() {
        let echo = RunConfig::default().echo();
        assert!(echo.iter().all(|(k, _)| k != "workers" && k != "report" && k != "out"));
        assert!(echo.iter().any(|(k, _)| k == "k"));
    }
}
