//! End-to-end pipelines, distance-bucketed metrics, timing and sweeps.
//!
//! Three pipelines are compared:
//!
//! * `projection_only`: each point is fused with the single pixel it projects to;
//! * `graph_max`: the point is fused with the pixels of its K graph neighbors and
//!   the channelwise max over the K fused slots is kept;
//! * `graph_safa_max`: as `graph_max` with self-attention over the K slots before
//!   the max.
//!
//! Quality is judged on the image contribution alone (fused output minus the
//! point feature): its strongest class channel, if above one half, names the
//! predicted class, otherwise the point is predicted as background. Accuracy
//! is scored on object points, whose target embedding has a class channel to
//! recover; cosine similarity is averaged over every surviving point, so
//! object features leaking onto background points still show up there.

use std::fmt::Write as _;
use std::io::{Read, Write};
use std::time::Instant;

use ndarray::{Array2, Axis};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::fusion::{assemble_neighbor_block, fuse, gather_image_features, ChannelAdapter, FusedBlock, ImageFeatureMap};
use crate::geometry::{invert_augmentation, project, AugmentationRecord, CalibrationRig, PointSet, ProjectedCoords};
use crate::graph::{build_graph, GraphConfig, NeighborGraph};
use crate::safa::{
    init_params, max_select, self_attention_features, train_selector, AttentionMode, AttentionParams, GradientMethod, MacCount,
    SelectionTask, TrainerConfig, TrainingOutcome,
};
use crate::scene::{class_embedding, generate, perturb, GroundTruth, PerturbationSpec, Scene, SceneSpec, BACKGROUND};

pub const REPORT_VERSION: u32 = 1;

/// Image-contribution level above which a class channel counts as present.
pub const PRESENCE_THRESHOLD: f64 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Bucket {
    Near,
    Mid,
    Far,
}

impl Bucket {
    pub const ALL: [Bucket; 3] = [Bucket::Near, Bucket::Mid, Bucket::Far];

    /// Bucket of a point at `range` meters from the sensor.
    pub fn of(range: f64) -> Bucket {
        if range < 20.0 {
            Bucket::Near
        } else if range < 40.0 {
            Bucket::Mid
        } else {
            Bucket::Far
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Bucket::Near => "0-20m",
            Bucket::Mid => "20-40m",
            Bucket::Far => "40m+",
        }
    }

    fn index(self) -> usize {
        self as usize
    }
}

impl std::str::FromStr for Bucket {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Bucket::ALL
            .into_iter()
            .find(|b| b.as_str() == s)
            .ok_or_else(|| Error::InvalidInput(format!("unknown bucket `{s}`")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Method {
    ProjectionOnly,
    GraphMax,
    GraphSafaMax,
}

impl Method {
    pub const ALL: [Method; 3] = [Method::ProjectionOnly, Method::GraphMax, Method::GraphSafaMax];

    pub fn as_str(self) -> &'static str {
        match self {
            Method::ProjectionOnly => "projection_only",
            Method::GraphMax => "graph_max",
            Method::GraphSafaMax => "graph_safa_max",
        }
    }

    pub fn uses_graph(self) -> bool {
        self != Method::ProjectionOnly
    }
}

impl std::str::FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| Error::InvalidInput(format!("unknown method `{s}`")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    Project,
    BuildGraph,
    Fuse,
    Attention,
    Max,
}

impl Stage {
    pub const ALL: [Stage; 5] = [Stage::Project, Stage::BuildGraph, Stage::Fuse, Stage::Attention, Stage::Max];

    pub fn as_str(self) -> &'static str {
        match self {
            Stage::Project => "project",
            Stage::BuildGraph => "build_graph",
            Stage::Fuse => "fuse",
            Stage::Attention => "attention",
            Stage::Max => "max",
        }
    }
}

/// Wall-clock milliseconds per stage, indexed like [`Stage::ALL`].
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct StageTimes(pub [f64; 5]);

impl StageTimes {
    pub fn get(&self, stage: Stage) -> f64 {
        self.0[stage as usize]
    }

    pub fn total(&self) -> f64 {
        self.0.iter().sum()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PipelineConfig {
    pub graph: GraphConfig,
    pub mode: AttentionMode,
    /// Number of object classes; channels `0..classes` are class channels.
    pub classes: usize,
    /// Set when the input coordinates are augmented and must be mapped back
    /// before projection.
    pub augmentation: Option<AugmentationRecord>,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            graph: GraphConfig::default(),
            mode: AttentionMode::Literal,
            classes: 3,
            augmentation: None,
        }
    }
}

/// Everything a pipeline run reads.
#[derive(Debug, Clone, Copy)]
pub struct AlignmentInputs<'a> {
    pub points: &'a PointSet,
    pub feature_map: &'a ImageFeatureMap,
    pub rig: &'a CalibrationRig,
    pub ground_truth: &'a GroundTruth,
}

impl<'a> AlignmentInputs<'a> {
    /// A scene's data seen through `rig` (usually a perturbed copy of the scene rig).
    pub fn from_scene(scene: &'a Scene, rig: &'a CalibrationRig) -> Self {
        Self {
            points: &scene.points,
            feature_map: &scene.feature_map,
            rig,
            ground_truth: &scene.ground_truth,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PipelineOutput {
    /// Point index of every surviving row.
    pub rows: Vec<usize>,
    /// Fused feature per surviving row.
    pub features: Array2<f64>,
    /// Point feature per surviving row (what the image contribution is measured against).
    pub point_features: Array2<f64>,
    pub times: StageTimes,
    pub macs: MacCount,
    /// Rows that went through attention with at least one valid slot.
    pub attended_rows: usize,
}

fn elapsed_ms(t: Instant) -> f64 {
    t.elapsed().as_secs_f64() * 1e3
}

fn check_method_inputs(inputs: &AlignmentInputs<'_>, method: Method, config: &PipelineConfig, params: Option<&AttentionParams>) -> Result<()> {
    let c = inputs.points.channels();
    if inputs.feature_map.channels() != c {
        return Err(Error::InvalidInput(format!(
            "point features have {c} channels, feature map has {}",
            inputs.feature_map.channels()
        )));
    }
    if config.classes == 0 || config.classes > c {
        return Err(Error::InvalidInput(format!("{} classes do not fit in {c} channels", config.classes)));
    }
    if method == Method::GraphSafaMax {
        let p = params.ok_or_else(|| Error::InvalidInput("graph_safa_max needs attention parameters".into()))?;
        if p.channels() != c {
            return Err(Error::InvalidInput(format!(
                "attention parameters expect {} channels, features have {c}",
                p.channels()
            )));
        }
    }
    config.graph.validate()
}

fn raw_points<'a>(inputs: &AlignmentInputs<'a>, config: &PipelineConfig) -> Result<std::borrow::Cow<'a, PointSet>> {
    Ok(match &config.augmentation {
        Some(record) => std::borrow::Cow::Owned(invert_augmentation(inputs.points, record)?),
        None => std::borrow::Cow::Borrowed(inputs.points),
    })
}

/// Fused `N' x K x C` block for the surviving rows and the projection it came from.
fn graph_block(
    inputs: &AlignmentInputs<'_>,
    config: &PipelineConfig,
    cached: Option<&NeighborGraph>,
    times: &mut StageTimes,
) -> Result<(ProjectedCoords, FusedBlock)> {
    let t = Instant::now();
    let raw = raw_points(inputs, config)?;
    let proj = project(&raw, inputs.rig);
    let gathered = gather_image_features(inputs.feature_map, &proj, &ChannelAdapter::identity(inputs.feature_map.channels()))?;
    times.0[Stage::Project as usize] = elapsed_ms(t);

    let t = Instant::now();
    let built;
    let graph = match cached {
        Some(g) => {
            if g.n() != raw.len() || g.k() != config.graph.k {
                return Err(Error::InvalidInput("cached graph does not match the inputs".into()));
            }
            g
        }
        None => {
            built = build_graph(&raw, &config.graph)?;
            &built
        }
    };
    times.0[Stage::BuildGraph as usize] = elapsed_ms(t);

    let t = Instant::now();
    let (nb, mask) = assemble_neighbor_block(&gathered, graph, &proj)?;
    let fused = fuse(raw.features().view(), &nb, &mask)?.select_rows(&proj.source_index);
    times.0[Stage::Fuse as usize] = elapsed_ms(t);
    Ok((proj, fused))
}

fn run(
    inputs: &AlignmentInputs<'_>,
    method: Method,
    config: &PipelineConfig,
    params: Option<&AttentionParams>,
    cached: Option<&NeighborGraph>,
) -> Result<PipelineOutput> {
    check_method_inputs(inputs, method, config, params)?;
    let mut times = StageTimes::default();
    let mut macs = MacCount::default();
    let mut attended_rows = 0;
    let (rows, features) = match method {
        Method::ProjectionOnly => {
            let t = Instant::now();
            let raw = raw_points(inputs, config)?;
            let proj = project(&raw, inputs.rig);
            let gathered = gather_image_features(inputs.feature_map, &proj, &ChannelAdapter::identity(inputs.feature_map.channels()))?;
            times.0[Stage::Project as usize] = elapsed_ms(t);
            let t = Instant::now();
            let fused = raw.features().select(Axis(0), &proj.source_index) + &gathered;
            times.0[Stage::Fuse as usize] = elapsed_ms(t);
            (proj.source_index, fused)
        }
        Method::GraphMax => {
            let (proj, block) = graph_block(inputs, config, cached, &mut times)?;
            let t = Instant::now();
            let selected = max_select(block.data.view(), &block.valid)?;
            times.0[Stage::Max as usize] = elapsed_ms(t);
            (proj.source_index, selected.features)
        }
        Method::GraphSafaMax => {
            let params = params.expect("checked above");
            let (proj, block) = graph_block(inputs, config, cached, &mut times)?;
            let t = Instant::now();
            let attended = self_attention_features(&block, params, config.mode)?;
            times.0[Stage::Attention as usize] = elapsed_ms(t);
            macs = attended.macs;
            attended_rows = block.n() - attended.bypassed_rows;
            let t = Instant::now();
            let selected = max_select(attended.features.view(), &block.valid)?;
            times.0[Stage::Max as usize] = elapsed_ms(t);
            (proj.source_index, selected.features)
        }
    };
    let point_features = inputs.points.features().select(Axis(0), &rows);
    Ok(PipelineOutput {
        rows,
        features,
        point_features,
        times,
        macs,
        attended_rows,
    })
}

/// Runs one pipeline end to end.
pub fn run_pipeline(
    inputs: &AlignmentInputs<'_>,
    method: Method,
    config: &PipelineConfig,
    params: Option<&AttentionParams>,
) -> Result<PipelineOutput> {
    run(inputs, method, config, params, None)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BucketMetrics {
    pub bucket: Bucket,
    /// Fraction of object points whose predicted class is correct; 0 when
    /// the bucket holds no object point.
    pub accuracy: f64,
    /// Mean cosine similarity of the image contribution to the target
    /// embedding over all points; 0 for an empty bucket.
    pub cosine: f64,
    /// Surviving points in the bucket.
    pub n: usize,
    /// Object points among them.
    pub labeled: usize,
}

/// Cosine similarity; two zero vectors agree fully, one zero vector not at all.
pub fn cosine_similarity(a: &[f64], b: &[f64]) -> f64 {
    const EPS: f64 = 1e-12;
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    match (na < EPS, nb < EPS) {
        (true, true) => 1.0,
        (true, false) | (false, true) => 0.0,
        _ => (a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>() / (na * nb)).clamp(-1.0, 1.0),
    }
}

/// Class named by an image contribution: the strongest of the first
/// `classes` channels if it exceeds [`PRESENCE_THRESHOLD`], else background.
pub fn predicted_class(contribution: &[f64], classes: usize) -> i32 {
    let mut best = BACKGROUND;
    let mut best_value = PRESENCE_THRESHOLD;
    for (ch, &v) in contribution.iter().take(classes).enumerate() {
        if v > best_value {
            best_value = v;
            best = ch as i32 + 1;
        }
    }
    best
}

fn class_table(gt: &GroundTruth, n: usize) -> Result<Vec<i32>> {
    let mut classes = vec![None; n];
    for row in &gt.rows {
        let slot = classes
            .get_mut(row.index)
            .ok_or_else(|| Error::Evaluation(format!("ground truth refers to point {} of {n}", row.index)))?;
        if slot.replace(row.class).is_some() {
            return Err(Error::Evaluation(format!("duplicate ground truth for point {}", row.index)));
        }
    }
    classes
        .into_iter()
        .enumerate()
        .map(|(i, c)| c.ok_or_else(|| Error::Evaluation(format!("no ground truth for point {i}"))))
        .collect()
}

/// Per-bucket metrics of a pipeline output. `coords` are the raw point positions.
pub fn bucket_metrics(output: &PipelineOutput, coords: &[[f64; 3]], gt: &GroundTruth, classes: usize) -> Result<[BucketMetrics; 3]> {
    let table = class_table(gt, coords.len())?;
    let c = output.features.ncols();
    let mut correct = [0usize; 3];
    let mut cos = [0.0f64; 3];
    let mut count = [0usize; 3];
    let mut labeled = [0usize; 3];
    let mut contribution = vec![0.0; c];
    for (row, &i) in output.rows.iter().enumerate() {
        let p = coords[i];
        let b = Bucket::of((p[0] * p[0] + p[1] * p[1] + p[2] * p[2]).sqrt()).index();
        for ch in 0..c {
            contribution[ch] = output.features[[row, ch]] - output.point_features[[row, ch]];
        }
        let truth = table[i];
        count[b] += 1;
        if truth > BACKGROUND {
            labeled[b] += 1;
            if predicted_class(&contribution, classes) == truth {
                correct[b] += 1;
            }
        }
        cos[b] += cosine_similarity(&contribution, &class_embedding(truth, c));
    }
    Ok(Bucket::ALL.map(|bucket| {
        let i = bucket.index();
        let n = count[i];
        let accuracy = if labeled[i] == 0 { 0.0 } else { correct[i] as f64 / labeled[i] as f64 };
        let cosine = if n == 0 { 0.0 } else { cos[i] / n as f64 };
        BucketMetrics {
            bucket,
            accuracy,
            cosine,
            n,
            labeled: labeled[i],
        }
    }))
}

/// Per-stage timing over repeated runs.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StageTiming {
    pub stage: Stage,
    pub median_ms: f64,
    pub min_ms: f64,
    pub max_ms: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TimingSummary {
    pub repetitions: usize,
    pub stages: Vec<StageTiming>,
}

impl TimingSummary {
    fn from_runs(runs: &[StageTimes]) -> Self {
        let stages = Stage::ALL
            .into_iter()
            .map(|stage| {
                let mut v: Vec<f64> = runs.iter().map(|r| r.get(stage)).collect();
                v.sort_by(f64::total_cmp);
                let m = v.len();
                let median = if m % 2 == 1 { v[m / 2] } else { (v[m / 2 - 1] + v[m / 2]) / 2.0 };
                StageTiming {
                    stage,
                    median_ms: median,
                    min_ms: v[0],
                    max_ms: v[m - 1],
                }
            })
            .collect();
        Self {
            repetitions: runs.len(),
            stages,
        }
    }

    pub fn median(&self, stage: Stage) -> f64 {
        self.stages.iter().find(|s| s.stage == stage).map_or(0.0, |s| s.median_ms)
    }

    pub fn total_median(&self) -> f64 {
        self.stages.iter().map(|s| s.median_ms).sum()
    }
}

/// Times a pipeline on a single worker. One warm-up run is discarded, then
/// `repetitions` (at least 3) runs are summarized by their median and range.
pub fn time_pipeline(
    inputs: &AlignmentInputs<'_>,
    method: Method,
    config: &PipelineConfig,
    params: Option<&AttentionParams>,
    repetitions: usize,
) -> Result<TimingSummary> {
    if repetitions < 3 {
        return Err(Error::InvalidInput(format!("timing needs at least 3 repetitions, got {repetitions}")));
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(1)
        .build()
        .map_err(|e| Error::Evaluation(format!("cannot start timing worker: {e}")))?;
    pool.install(|| {
        run_pipeline(inputs, method, config, params)?;
        let runs = (0..repetitions)
            .map(|_| run_pipeline(inputs, method, config, params).map(|o| o.times))
            .collect::<Result<Vec<_>>>()?;
        Ok(TimingSummary::from_runs(&runs))
    })
}

/// Per-point, per-channel cost ratio of cross-attention over the whole image
/// to attention over K neighbors: `W H / K^2`.
pub fn complexity_ratio(image_w: u32, image_h: u32, k: usize) -> f64 {
    (image_w as f64 * image_h as f64) / (k as f64 * k as f64)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ComplexityEstimate {
    pub points: usize,
    pub k: usize,
    pub channels: usize,
    pub image_width: u32,
    pub image_height: u32,
    /// `N K^2 C`.
    pub safa_macs: u64,
    /// `N W H C`.
    pub cross_attention_macs: u64,
    pub ratio: f64,
}

impl ComplexityEstimate {
    pub fn new(points: usize, k: usize, channels: usize, image_width: u32, image_height: u32) -> Self {
        let (n, k64, c) = (points as u64, k as u64, channels as u64);
        Self {
            points,
            k,
            channels,
            image_width,
            image_height,
            safa_macs: n * k64 * k64 * c,
            cross_attention_macs: n * image_width as u64 * image_height as u64 * c,
            ratio: complexity_ratio(image_width, image_height, k),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MethodReport {
    pub method: Method,
    pub buckets: [BucketMetrics; 3],
    pub surviving: usize,
    pub dropped: usize,
    pub timing: TimingSummary,
    pub macs: MacCount,
}

impl MethodReport {
    pub fn bucket(&self, bucket: Bucket) -> &BucketMetrics {
        &self.buckets[bucket.index()]
    }
}

/// Runs `method` and scores it against the ground truth.
pub fn evaluate(
    inputs: &AlignmentInputs<'_>,
    method: Method,
    config: &PipelineConfig,
    params: Option<&AttentionParams>,
) -> Result<MethodReport> {
    evaluate_with(inputs, method, config, params, None)
}

fn evaluate_with(
    inputs: &AlignmentInputs<'_>,
    method: Method,
    config: &PipelineConfig,
    params: Option<&AttentionParams>,
    cached: Option<&NeighborGraph>,
) -> Result<MethodReport> {
    let output = run(inputs, method, config, params, cached)?;
    let raw = raw_points(inputs, config)?;
    let buckets = bucket_metrics(&output, raw.coords(), inputs.ground_truth, config.classes)?;
    Ok(MethodReport {
        method,
        buckets,
        surviving: output.rows.len(),
        dropped: inputs.points.len() - output.rows.len(),
        timing: TimingSummary::from_runs(&[output.times]),
        macs: output.macs,
    })
}

/// Metrics for several methods on the same inputs, plus provenance.
#[derive(Debug, Clone, PartialEq)]
pub struct AlignmentReport {
    /// Effective configuration as ordered key-value pairs.
    pub config: Vec<(String, String)>,
    pub complexity: ComplexityEstimate,
    pub methods: Vec<MethodReport>,
}

impl AlignmentReport {
    pub fn method(&self, method: Method) -> Option<&MethodReport> {
        self.methods.iter().find(|m| m.method == method)
    }

    /// Accuracies in [0, 1], bucket counts summing to the surviving points,
    /// positive complexity ratio.
    pub fn check_invariants(&self) -> Result<()> {
        if !(self.complexity.ratio > 0.0) {
            return Err(Error::Evaluation(format!("complexity ratio {} is not positive", self.complexity.ratio)));
        }
        for m in &self.methods {
            let total: usize = m.buckets.iter().map(|b| b.n).sum();
            if total != m.surviving {
                return Err(Error::Evaluation(format!(
                    "{}: bucket counts sum to {total}, {} points survived",
                    m.method.as_str(),
                    m.surviving
                )));
            }
            for b in &m.buckets {
                if !(0.0..=1.0).contains(&b.accuracy) || !(-1.0..=1.0).contains(&b.cosine) {
                    return Err(Error::Evaluation(format!("{} {}: metric out of range", m.method.as_str(), b.bucket.as_str())));
                }
            }
        }
        Ok(())
    }

    /// Structured text. Everything above the `[timing]` section depends only
    /// on inputs and configuration.
    pub fn render(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "report_version: {REPORT_VERSION}");
        let _ = writeln!(s, "\n[config]");
        for (k, v) in &self.config {
            let _ = writeln!(s, "{k}: {v}");
        }
        let c = &self.complexity;
        let _ = writeln!(s, "\n[complexity]");
        let _ = writeln!(s, "points: {}", c.points);
        let _ = writeln!(s, "k: {}", c.k);
        let _ = writeln!(s, "channels: {}", c.channels);
        let _ = writeln!(s, "image: {} {}", c.image_width, c.image_height);
        let _ = writeln!(s, "safa_macs: {}", c.safa_macs);
        let _ = writeln!(s, "cross_attention_macs: {}", c.cross_attention_macs);
        let _ = writeln!(s, "ratio: {}", c.ratio);
        let _ = writeln!(s, "\n[points]");
        let _ = writeln!(s, "method,surviving,dropped,attention_macs");
        for m in &self.methods {
            let _ = writeln!(s, "{},{},{},{}", m.method.as_str(), m.surviving, m.dropped, m.macs.attention());
        }
        let _ = writeln!(s, "\n[accuracy]");
        let _ = writeln!(s, "method,bucket,accuracy,cosine,n,labeled");
        for m in &self.methods {
            for b in &m.buckets {
                let _ = writeln!(s, "{},{},{},{},{},{}", m.method.as_str(), b.bucket.as_str(), b.accuracy, b.cosine, b.n, b.labeled);
            }
        }
        let _ = writeln!(s, "\n[timing]");
        let _ = writeln!(s, "method,stage,repetitions,median_ms,min_ms,max_ms");
        for m in &self.methods {
            for t in &m.timing.stages {
                let _ = writeln!(
                    s,
                    "{},{},{},{:.3},{:.3},{:.3}",
                    m.method.as_str(),
                    t.stage.as_str(),
                    m.timing.repetitions,
                    t.median_ms,
                    t.min_ms,
                    t.max_ms
                );
            }
        }
        s
    }
}

/// The rendered report without its `[timing]` section.
pub fn strip_timing(report: &str) -> &str {
    match report.find("\n[timing]") {
        Some(i) => &report[..i],
        None => report,
    }
}

/// One `[accuracy]` line of a rendered report.
#[derive(Debug, Clone, PartialEq)]
pub struct AccuracyLine {
    pub method: Method,
    pub bucket: Bucket,
    pub accuracy: f64,
    pub cosine: f64,
    pub n: usize,
    pub labeled: usize,
}

/// Reads back the accuracy table, surviving counts and complexity ratio of a
/// rendered report and checks the report invariants on them.
pub fn parse_report(text: &str) -> Result<(Vec<AccuracyLine>, Vec<(Method, usize)>, f64)> {
    let bad = |m: String| Error::format("report", m);
    let mut lines = text.lines();
    if lines.next() != Some(&format!("report_version: {REPORT_VERSION}")[..]) {
        return Err(bad("missing report_version header".into()));
    }
    let mut section = "";
    let mut ratio = None;
    let mut acc = Vec::new();
    let mut surviving = Vec::new();
    for line in lines {
        if line.is_empty() {
            continue;
        }
        if line.starts_with('[') {
            section = line;
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        match section {
            "[complexity]" => {
                if let Some(v) = line.strip_prefix("ratio: ") {
                    ratio = Some(v.parse::<f64>().map_err(|_| bad(format!("bad ratio `{v}`")))?);
                }
            }
            "[points]" if fields[0] != "method" => {
                if fields.len() != 4 {
                    return Err(bad(format!("bad points line `{line}`")));
                }
                let n = fields[1].parse().map_err(|_| bad(format!("bad count in `{line}`")))?;
                surviving.push((fields[0].parse()?, n));
            }
            "[accuracy]" if fields[0] != "method" => {
                if fields.len() != 6 {
                    return Err(bad(format!("bad accuracy line `{line}`")));
                }
                let num = |s: &str| s.parse::<f64>().map_err(|_| bad(format!("bad number `{s}`")));
                acc.push(AccuracyLine {
                    method: fields[0].parse()?,
                    bucket: fields[1].parse()?,
                    accuracy: num(fields[2])?,
                    cosine: num(fields[3])?,
                    n: fields[4].parse().map_err(|_| bad(format!("bad count `{}`", fields[4])))?,
                    labeled: fields[5].parse().map_err(|_| bad(format!("bad count `{}`", fields[5])))?,
                });
            }
            _ => {}
        }
    }
    let ratio = ratio.ok_or_else(|| bad("missing complexity ratio".into()))?;
    if !(ratio > 0.0) {
        return Err(Error::Evaluation(format!("complexity ratio {ratio} is not positive")));
    }
    for &(method, n) in &surviving {
        let total: usize = acc.iter().filter(|l| l.method == method).map(|l| l.n).sum();
        if total != n {
            return Err(Error::Evaluation(format!("{}: bucket counts sum to {total}, {n} survived", method.as_str())));
        }
    }
    if let Some(l) = acc.iter().find(|l| !(0.0..=1.0).contains(&l.accuracy) || !(-1.0..=1.0).contains(&l.cosine)) {
        return Err(Error::Evaluation(format!("{} {}: metric out of range", l.method.as_str(), l.bucket.as_str())));
    }
    Ok((acc, surviving, ratio))
}

/// Evaluates each method and assembles a report.
pub fn alignment_report(
    inputs: &AlignmentInputs<'_>,
    methods: &[Method],
    config: &PipelineConfig,
    params: Option<&AttentionParams>,
    echo: Vec<(String, String)>,
) -> Result<AlignmentReport> {
    if methods.is_empty() {
        return Err(Error::InvalidInput("no methods selected".into()));
    }
    let reports = methods
        .iter()
        .map(|&m| evaluate(inputs, m, config, params))
        .collect::<Result<Vec<_>>>()?;
    // attended rows equal the surviving rows of any graph pipeline
    let points = reports
        .iter()
        .find(|r| r.method == Method::GraphSafaMax)
        .map(|r| (r.macs.attention() / (config.graph.k * config.graph.k * inputs.points.channels()).max(1) as u64) as usize)
        .unwrap_or_else(|| reports[0].surviving);
    let complexity = ComplexityEstimate::new(
        points,
        config.graph.k,
        inputs.points.channels(),
        inputs.rig.image_width(),
        inputs.rig.image_height(),
    );
    Ok(AlignmentReport {
        config: echo,
        complexity,
        methods: reports,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepGrid {
    pub methods: Vec<Method>,
    pub ks: Vec<usize>,
    pub chunks: Vec<usize>,
    pub heads: Vec<usize>,
}

impl SweepGrid {
    /// The neighbor counts, chunk sizes and head counts of the ablation grid.
    pub fn anchors() -> Self {
        Self {
            methods: Method::ALL.to_vec(),
            ks: vec![9, 16, 25, 36, 48],
            chunks: vec![500, 1000, 3000, 5000, 8000, 10000],
            heads: vec![1, 2, 3, 4],
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.methods.is_empty() || self.ks.is_empty() || self.chunks.is_empty() || self.heads.is_empty() {
            return Err(Error::InvalidInput("sweep grid has an empty axis".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepRow {
    pub method: Method,
    pub k: usize,
    pub chunk: usize,
    pub heads: usize,
    pub bucket: Bucket,
    pub accuracy: f64,
    pub cosine: f64,
    pub n: usize,
    pub project_ms: f64,
    pub build_graph_ms: f64,
    pub fuse_ms: f64,
    pub attention_ms: f64,
    pub max_ms: f64,
}

pub const SWEEP_COLUMNS: [&str; 13] = [
    "method",
    "k",
    "chunk",
    "heads",
    "bucket",
    "accuracy",
    "cosine",
    "n",
    "project_ms",
    "build_graph_ms",
    "fuse_ms",
    "attention_ms",
    "max_ms",
];

/// Evaluates every cell of `grid`. Accuracy cells run in parallel and share
/// one graph per `(K, chunk)`; with `repetitions >= 3` each cell is then
/// timed sequentially on one worker, otherwise the evaluation run's stage
/// times are reported. `params_for(heads)` supplies attention parameters.
pub fn sweep(
    inputs: &AlignmentInputs<'_>,
    grid: &SweepGrid,
    base: &PipelineConfig,
    params_for: &(dyn Fn(usize) -> Result<AttentionParams> + Sync),
    repetitions: usize,
) -> Result<Vec<SweepRow>> {
    grid.validate()?;
    let raw = raw_points(inputs, base)?;
    let mut cells = Vec::new();
    for &method in &grid.methods {
        for &k in &grid.ks {
            for &chunk in &grid.chunks {
                for &heads in &grid.heads {
                    cells.push((method, k, chunk, heads));
                }
            }
        }
    }
    let mut graph_keys: Vec<(usize, usize)> = cells.iter().filter(|c| c.0.uses_graph()).map(|c| (c.1, c.2)).collect();
    graph_keys.sort_unstable();
    graph_keys.dedup();
    let graphs = graph_keys
        .par_iter()
        .map(|&(k, chunk)| {
            let config = GraphConfig { k, chunk_size: chunk, ..base.graph };
            build_graph(&raw, &config).map(|g| ((k, chunk), g))
        })
        .collect::<Result<Vec<_>>>()?;
    let mut heads: Vec<usize> = grid.heads.clone();
    heads.sort_unstable();
    heads.dedup();
    let params = heads
        .iter()
        .map(|&h| params_for(h).map(|p| (h, p)))
        .collect::<Result<Vec<_>>>()?;
    let config_for = |k: usize, chunk: usize| PipelineConfig {
        graph: GraphConfig { k, chunk_size: chunk, ..base.graph },
        ..base.clone()
    };

    let reports = cells
        .par_iter()
        .map(|&(method, k, chunk, h)| {
            let graph = graphs.iter().find(|(key, _)| *key == (k, chunk)).map(|(_, g)| g);
            let p = params.iter().find(|(hh, _)| *hh == h).map(|(_, p)| p);
            evaluate_with(inputs, method, &config_for(k, chunk), p, graph)
        })
        .collect::<Result<Vec<_>>>()?;

    let mut rows = Vec::with_capacity(cells.len() * 3);
    for (&(method, k, chunk, h), report) in cells.iter().zip(reports) {
        let timing = if repetitions >= 3 {
            let p = params.iter().find(|(hh, _)| *hh == h).map(|(_, p)| p);
            time_pipeline(inputs, method, &config_for(k, chunk), p, repetitions)?
        } else {
            report.timing.clone()
        };
        for b in report.buckets {
            rows.push(SweepRow {
                method,
                k,
                chunk,
                heads: h,
                bucket: b.bucket,
                accuracy: b.accuracy,
                cosine: b.cosine,
                n: b.n,
                project_ms: timing.median(Stage::Project),
                build_graph_ms: timing.median(Stage::BuildGraph),
                fuse_ms: timing.median(Stage::Fuse),
                attention_ms: timing.median(Stage::Attention),
                max_ms: timing.median(Stage::Max),
            });
        }
    }
    Ok(rows)
}

/// Checks metric ranges of sweep rows and that the bucket counts of every
/// cell agree with each other's totals for the same method.
pub fn check_sweep_rows(rows: &[SweepRow]) -> Result<()> {
    for r in rows {
        if !(0.0..=1.0).contains(&r.accuracy) || !(-1.0..=1.0).contains(&r.cosine) {
            return Err(Error::Evaluation(format!(
                "{} k={} chunk={} heads={} {}: metric out of range",
                r.method.as_str(),
                r.k,
                r.chunk,
                r.heads,
                r.bucket.as_str()
            )));
        }
        let times = [r.project_ms, r.build_graph_ms, r.fuse_ms, r.attention_ms, r.max_ms];
        if times.iter().any(|t| !(*t >= 0.0)) {
            return Err(Error::Evaluation("negative or missing stage time".into()));
        }
    }
    for cell in rows.chunks(3) {
        if cell.len() != 3 || cell.iter().map(|r| r.bucket).collect::<Vec<_>>() != Bucket::ALL {
            return Err(Error::Evaluation("sweep rows do not come in bucket triples".into()));
        }
    }
    let totals: Vec<usize> = rows.chunks(3).map(|c| c.iter().map(|r| r.n).sum()).collect();
    if totals.windows(2).any(|w| w[0] != w[1]) {
        return Err(Error::Evaluation("cells disagree on the surviving point count".into()));
    }
    Ok(())
}

/// Writes sweep rows as CSV under a `# report_version` comment line.
pub fn write_sweep_csv(rows: &[SweepRow], mut out: impl Write) -> Result<()> {
    let err = |e: &dyn std::fmt::Display| Error::format("sweep CSV", e.to_string());
    writeln!(out, "# report_version: {REPORT_VERSION}").map_err(|e| err(&e))?;
    let mut w = csv::Writer::from_writer(out);
    w.write_record(SWEEP_COLUMNS).map_err(|e| err(&e))?;
    for r in rows {
        w.write_record([
            r.method.as_str().to_string(),
            r.k.to_string(),
            r.chunk.to_string(),
            r.heads.to_string(),
            r.bucket.as_str().to_string(),
            r.accuracy.to_string(),
            r.cosine.to_string(),
            r.n.to_string(),
            r.project_ms.to_string(),
            r.build_graph_ms.to_string(),
            r.fuse_ms.to_string(),
            r.attention_ms.to_string(),
            r.max_ms.to_string(),
        ])
        .map_err(|e| err(&e))?;
    }
    w.flush().map_err(|e| err(&e))
}

pub fn read_sweep_csv(mut input: impl Read) -> Result<Vec<SweepRow>> {
    let bad = |m: String| Error::format("sweep CSV", m);
    let mut text = String::new();
    input.read_to_string(&mut text).map_err(|e| bad(e.to_string()))?;
    if !text.starts_with(&format!("# report_version: {REPORT_VERSION}\n")) {
        return Err(bad("missing report_version line".into()));
    }
    let mut r = csv::ReaderBuilder::new().comment(Some(b'#')).from_reader(text.as_bytes());
    let headers = r.headers().map_err(|e| bad(e.to_string()))?.clone();
    if headers.iter().collect::<Vec<_>>() != SWEEP_COLUMNS {
        return Err(bad(format!("unexpected columns {headers:?}")));
    }
    let mut rows = Vec::new();
    for rec in r.records() {
        let rec = rec.map_err(|e| bad(e.to_string()))?;
        let f = |i: usize| rec.get(i).unwrap_or("");
        let int = |i: usize| f(i).parse::<usize>().map_err(|_| bad(format!("bad integer `{}`", f(i))));
        let real = |i: usize| f(i).parse::<f64>().map_err(|_| bad(format!("bad number `{}`", f(i))));
        rows.push(SweepRow {
            method: f(0).parse()?,
            k: int(1)?,
            chunk: int(2)?,
            heads: int(3)?,
            bucket: f(4).parse()?,
            accuracy: real(5)?,
            cosine: real(6)?,
            n: int(7)?,
            project_ms: real(8)?,
            build_graph_ms: real(9)?,
            fuse_ms: real(10)?,
            attention_ms: real(11)?,
            max_ms: real(12)?,
        });
    }
    Ok(rows)
}

/// Builds a training instance for the slot selector from a pipeline run:
/// the fused blocks of up to `max_rows` surviving points whose neighbors see
/// differing image features, with each point's class embedding as target.
pub fn selection_task(inputs: &AlignmentInputs<'_>, config: &PipelineConfig, max_rows: usize, seed: u64) -> Result<SelectionTask> {
    check_method_inputs(inputs, Method::GraphMax, config, None)?;
    let mut times = StageTimes::default();
    let (proj, block) = graph_block(inputs, config, None, &mut times)?;
    let table = class_table(inputs.ground_truth, inputs.points.len())?;
    let c = block.channels();
    let mut informative: Vec<usize> = (0..block.n())
        .filter(|&i| {
            let slots = block.data.index_axis(Axis(0), i);
            let valid = block.valid.row(i);
            let mut first = None;
            slots.outer_iter().zip(valid).filter(|(_, &v)| v).any(|(s, _)| match first {
                None => {
                    first = Some(s);
                    false
                }
                Some(f) => f != s,
            })
        })
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    informative.shuffle(&mut rng);
    informative.truncate(max_rows);
    informative.sort_unstable();
    if informative.is_empty() {
        return Err(Error::Evaluation("no point sees differing neighbor features".into()));
    }
    let sub = block.select_rows(&informative);
    let sources: Vec<usize> = informative.iter().map(|&r| proj.source_index[r]).collect();
    let point_features = inputs.points.features().select(Axis(0), &sources);
    let mut targets = Array2::zeros((sources.len(), c));
    for (mut row, &s) in targets.outer_iter_mut().zip(&sources) {
        row.assign(&ndarray::Array1::from(class_embedding(table[s], c)));
    }
    SelectionTask::new(sub, point_features, targets)
}

/// Seed offset separating training scenes from evaluation scenes.
pub const TRAINING_SEED_OFFSET: u64 = 1_000_000;

/// How to fit attention parameters on synthetic training scenes.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SelectorTraining {
    pub scenes: usize,
    pub rows_per_scene: usize,
    pub init_seed: u64,
    pub trainer: TrainerConfig,
}

impl Default for SelectorTraining {
    fn default() -> Self {
        Self {
            scenes: 2,
            rows_per_scene: 500,
            init_seed: 42,
            trainer: TrainerConfig {
                steps: 200,
                learning_rate: 50.0,
                gradient: GradientMethod::Analytic,
                ..TrainerConfig::default()
            },
        }
    }
}

/// Trains attention parameters on scenes drawn like `spec` and miscalibrated
/// like `perturbation`, with seeds offset by [`TRAINING_SEED_OFFSET`] so they
/// never coincide with evaluation scenes of nearby seeds.
pub fn train_on_scenes(
    spec: &SceneSpec,
    perturbation: &PerturbationSpec,
    config: &PipelineConfig,
    heads: usize,
    training: &SelectorTraining,
) -> Result<TrainingOutcome> {
    let tasks = (0..training.scenes as u64)
        .into_par_iter()
        .map(|s| {
            let scene = generate(&SceneSpec {
                seed: spec.seed.wrapping_add(TRAINING_SEED_OFFSET + s),
                ..spec.clone()
            })?;
            let rig = perturb(
                &scene.rig,
                &PerturbationSpec {
                    seed: perturbation.seed.wrapping_add(TRAINING_SEED_OFFSET + s),
                    ..*perturbation
                },
            )?;
            selection_task(&AlignmentInputs::from_scene(&scene, &rig), config, training.rows_per_scene, s)
        })
        .collect::<Result<Vec<_>>>()?;
    let init = init_params(spec.channels, heads, training.init_seed)?;
    train_selector(&tasks, &init, &TrainerConfig { mode: config.mode, ..training.trainer })
}
