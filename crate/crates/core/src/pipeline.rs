//! End-to-end run: load, index, estimate geometry, expand, merge, box.

use std::fmt;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::Serialize;
use thiserror::Error;

use crate::cloud::{
    load_cloud, load_labels_text, load_weak_labels, write_labeled_cloud, CloudFormat, LabelMatrix,
    LabelOutput, PointCloud, WeakLabels,
};
use crate::detection::{export_boxes, instance_boxes, DEFAULT_MIN_POINTS};
use crate::expansion::{attach_cluster_labels, expand_regions, select_seeds, ExpansionConfig};
use crate::geometry::{estimate_geometry, CurvatureMode, DEFAULT_GEOMETRY_K};
use crate::merge::{
    run_merging, FileProvider, MergeConfig, OracleProvider, RoundStats, SegChannel, SemanticProvider,
    UniformProvider,
};
use crate::octree::{Octree, DEFAULT_LEAF_CAPACITY};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum Stage {
    Config,
    Load,
    Octree,
    Geometry,
    Expand,
    Merge,
    Boxes,
    Write,
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Stage::Config => "config",
            Stage::Load => "load",
            Stage::Octree => "octree",
            Stage::Geometry => "geometry",
            Stage::Expand => "expand",
            Stage::Merge => "merge",
            Stage::Boxes => "boxes",
            Stage::Write => "write",
        })
    }
}

#[derive(Debug, Error)]
#[error("{stage}: {message}")]
pub struct PipelineError {
    pub stage: Stage,
    pub message: String,
}

impl PipelineError {
    fn new(stage: Stage, e: impl fmt::Display) -> Self {
        PipelineError {
            stage,
            message: e.to_string(),
        }
    }

    /// Bad configuration or unreadable inputs, as opposed to a failure
    /// inside a processing stage.
    pub fn is_input_error(&self) -> bool {
        matches!(self.stage, Stage::Config | Stage::Load)
    }
}

/// Where per-cluster class distributions come from.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub enum ProviderSpec {
    #[default]
    Uniform,
    File(PathBuf),
    /// Ground-truth labels-text file.
    Oracle(PathBuf),
}

impl std::str::FromStr for ProviderSpec {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        if s == "uniform" {
            return Ok(ProviderSpec::Uniform);
        }
        match s.split_once(':') {
            Some(("file", p)) if !p.is_empty() => Ok(ProviderSpec::File(p.into())),
            Some(("oracle", p)) if !p.is_empty() => Ok(ProviderSpec::Oracle(p.into())),
            _ => Err(format!("expected uniform, file:<path> or oracle:<path>, got {s:?}")),
        }
    }
}

impl fmt::Display for ProviderSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ProviderSpec::Uniform => f.write_str("uniform"),
            ProviderSpec::File(p) => write!(f, "file:{}", p.display()),
            ProviderSpec::Oracle(p) => write!(f, "oracle:{}", p.display()),
        }
    }
}

impl ProviderSpec {
    pub fn build(&self, num_classes: usize) -> Result<Box<dyn SemanticProvider>, String> {
        match self {
            ProviderSpec::Uniform => Ok(Box::new(UniformProvider { num_classes })),
            ProviderSpec::File(p) => {
                let fp = FileProvider::load(p).map_err(|e| e.to_string())?;
                if fp.num_classes() != num_classes {
                    return Err(format!(
                        "provider file has {} classes, weak labels declare {num_classes}",
                        fp.num_classes()
                    ));
                }
                Ok(Box::new(fp))
            }
            ProviderSpec::Oracle(p) => {
                let gt = load_labels_text(p).map_err(|e| e.to_string())?;
                Ok(Box::new(OracleProvider {
                    ground_truth: gt.semantic_label,
                    num_classes,
                }))
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PipelineConfig {
    pub leaf_capacity: usize,
    pub geom_k: usize,
    pub curvature_mode: CurvatureMode,
    pub expansion: ExpansionConfig,
    pub merge: MergeConfig,
    pub provider: ProviderSpec,
    pub min_points: usize,
    pub exclude_classes: Vec<i32>,
    pub seed: u64,
    /// Worker threads; 0 lets the pool choose.
    pub threads: usize,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            leaf_capacity: DEFAULT_LEAF_CAPACITY,
            geom_k: DEFAULT_GEOMETRY_K,
            curvature_mode: CurvatureMode::default(),
            expansion: ExpansionConfig::default(),
            merge: MergeConfig::default(),
            provider: ProviderSpec::Uniform,
            min_points: DEFAULT_MIN_POINTS,
            exclude_classes: vec![0, 1],
            seed: 0,
            threads: 0,
        }
    }
}

pub const CONFIG_KEYS: &[&str] = &[
    "leaf_capacity",
    "geom_k",
    "curvature_mode",
    "gamma",
    "sigma",
    "k_expand",
    "seed_fraction",
    "max_iterations",
    "rounds",
    "cond3",
    "cond4",
    "k_clusters",
    "inflate",
    "seg_channel",
    "provider",
    "min_points",
    "exclude_classes",
    "seed",
    "threads",
];

fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T, String>
where
    T::Err: fmt::Display,
{
    value
        .parse::<T>()
        .map_err(|e| format!("invalid value {value:?} for {key}: {e}"))
}

impl PipelineConfig {
    /// Sets one `key = value` entry.
    pub fn set(&mut self, key: &str, value: &str) -> Result<(), String> {
        match key {
            "leaf_capacity" => self.leaf_capacity = parse(key, value)?,
            "geom_k" => self.geom_k = parse(key, value)?,
            "curvature_mode" => self.curvature_mode = parse(key, value)?,
            "gamma" => self.expansion.gamma_deg = parse(key, value)?,
            "sigma" => self.expansion.sigma = parse(key, value)?,
            "k_expand" => self.expansion.k_expand = parse(key, value)?,
            "seed_fraction" => self.expansion.seed_fraction = parse(key, value)?,
            "max_iterations" => self.expansion.max_iterations = Some(parse(key, value)?),
            "rounds" => self.merge.rounds = parse(key, value)?,
            "cond3" => self.merge.cond3 = parse(key, value)?,
            "cond4" => self.merge.cond4 = parse(key, value)?,
            "k_clusters" => self.merge.k_clusters = parse(key, value)?,
            "inflate" => self.merge.inflate = parse(key, value)?,
            "seg_channel" => self.merge.channel = parse::<SegChannel>(key, value)?,
            "provider" => self.provider = parse(key, value)?,
            "min_points" => self.min_points = parse(key, value)?,
            "exclude_classes" => self.exclude_classes = parse_class_list(value)?,
            "seed" => self.seed = parse(key, value)?,
            "threads" => self.threads = parse(key, value)?,
            other => return Err(format!("unknown configuration key {other:?}")),
        }
        Ok(())
    }

    /// Reads `key = value` lines on top of the defaults. Blank lines and
    /// `#` comments are ignored.
    pub fn parse_str(text: &str) -> Result<Self, String> {
        let mut cfg = PipelineConfig::default();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| format!("line {}: expected key = value", n + 1))?;
            cfg.set(k.trim(), v.trim())
                .map_err(|e| format!("line {}: {e}", n + 1))?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, String> {
        let text = std::fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()))?;
        Self::parse_str(&text)
    }

    pub fn validate(&self) -> Result<(), String> {
        if self.leaf_capacity == 0 {
            return Err("leaf_capacity must be positive".into());
        }
        if self.geom_k < 3 {
            return Err(format!("geom_k must be at least 3, got {}", self.geom_k));
        }
        self.expansion.validate().map_err(|e| e.to_string())?;
        self.merge.validate().map_err(|e| e.to_string())?;
        Ok(())
    }
}

pub fn parse_class_list(s: &str) -> Result<Vec<i32>, String> {
    if s.trim().is_empty() {
        return Ok(Vec::new());
    }
    s.split(',')
        .map(|t| t.trim().parse::<i32>().map_err(|_| format!("invalid class id {t:?}")))
        .collect()
}

#[derive(Debug, Clone, Serialize)]
pub struct StageReport {
    pub stage: Stage,
    pub millis: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub clusters: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub coverage: Option<f64>,
}

#[derive(Debug, Clone, Serialize)]
pub struct RunOutputs {
    pub labels: PathBuf,
    pub colored_ply: PathBuf,
    pub provenance: PathBuf,
    pub boxes: PathBuf,
    pub report: PathBuf,
}

impl RunOutputs {
    pub fn in_dir(dir: &Path) -> Self {
        RunOutputs {
            labels: dir.join("labels.txt"),
            colored_ply: dir.join("labels_colored.ply"),
            provenance: dir.join("provenance.json"),
            boxes: dir.join("boxes.json"),
            report: dir.join("report.json"),
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct RunReport {
    pub scene: String,
    pub points: usize,
    pub weak_labels: usize,
    pub seed: u64,
    pub threads: usize,
    pub stages: Vec<StageReport>,
    pub stop_reason: crate::expansion::StopReason,
    pub label_conflicts: usize,
    pub merge_rounds: Vec<RoundStats>,
    pub boxes: usize,
    pub coverage_after_expansion: f64,
    pub final_coverage: f64,
    pub outputs: RunOutputs,
}

/// Everything the run computed, kept in memory for callers that want more
/// than the files.
#[derive(Debug, Clone)]
pub struct RunResult {
    pub report: RunReport,
    pub expanded: LabelMatrix,
    pub labels: LabelMatrix,
    pub boxes: Vec<crate::detection::Box3D>,
}

fn log_stage(stage: Stage, millis: f64, extra: serde_json::Value) {
    let mut obj = serde_json::json!({ "event": "stage", "stage": stage, "millis": millis });
    if let (Some(o), serde_json::Value::Object(e)) = (obj.as_object_mut(), extra) {
        o.extend(e);
    }
    log::info!(target: "pipeline", "{obj}");
}

struct Timer(Instant);

impl Timer {
    fn start() -> Self {
        Timer(Instant::now())
    }

    fn ms(&self) -> f64 {
        self.0.elapsed().as_secs_f64() * 1e3
    }
}

/// Loads the cloud and weak labels, then runs [`run_on`] and writes every
/// output into `out_dir`.
pub fn run_pipeline(
    config: &PipelineConfig,
    cloud_path: &Path,
    weak_path: &Path,
    out_dir: &Path,
) -> Result<RunResult, PipelineError> {
    config.validate().map_err(|e| PipelineError::new(Stage::Config, e))?;
    let t = Timer::start();
    let load = |p: &Path| {
        let fmt = CloudFormat::detect(p)?;
        load_cloud(p, fmt)
    };
    let cloud = load(cloud_path).map_err(|e| PipelineError::new(Stage::Load, e))?;
    let weak = load_weak_labels(weak_path).map_err(|e| PipelineError::new(Stage::Load, e))?;
    weak.check_range(cloud.len())
        .map_err(|e| PipelineError::new(Stage::Load, e))?;
    let provider = config
        .provider
        .build(weak.num_classes())
        .map_err(|e| PipelineError::new(Stage::Load, e))?;
    let load_ms = t.ms();
    log_stage(Stage::Load, load_ms, serde_json::json!({ "points": cloud.len() }));

    std::fs::create_dir_all(out_dir).map_err(|e| PipelineError::new(Stage::Write, e))?;
    let mut result = run_on(config, &cloud, &weak, provider.as_ref(), out_dir)?;
    result.report.stages.insert(
        0,
        StageReport {
            stage: Stage::Load,
            millis: load_ms,
            clusters: None,
            coverage: None,
        },
    );
    write_report(&result.report)?;
    Ok(result)
}

fn write_report(report: &RunReport) -> Result<(), PipelineError> {
    let text = serde_json::to_string_pretty(report).map_err(|e| PipelineError::new(Stage::Write, e))?;
    std::fs::write(&report.outputs.report, text + "\n").map_err(|e| PipelineError::new(Stage::Write, e))
}

/// Runs the stages on an in-memory cloud inside a pool of
/// `config.threads` workers and writes the outputs into `out_dir`.
pub fn run_on(
    config: &PipelineConfig,
    cloud: &PointCloud,
    weak: &WeakLabels,
    provider: &dyn SemanticProvider,
    out_dir: &Path,
) -> Result<RunResult, PipelineError> {
    config.validate().map_err(|e| PipelineError::new(Stage::Config, e))?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(config.threads)
        .build()
        .map_err(|e| PipelineError::new(Stage::Config, e))?;
    pool.install(|| run_stages(config, cloud, weak, provider, out_dir))
}

fn run_stages(
    config: &PipelineConfig,
    cloud: &PointCloud,
    weak: &WeakLabels,
    provider: &dyn SemanticProvider,
    out_dir: &Path,
) -> Result<RunResult, PipelineError> {
    let mut stages = Vec::new();
    let mut record = |stage: Stage, millis: f64, labels: Option<&LabelMatrix>| {
        let clusters = labels.map(|l| l.cluster_count());
        let coverage = labels.map(|l| l.coverage());
        log_stage(
            stage,
            millis,
            serde_json::json!({ "clusters": clusters, "coverage": coverage }),
        );
        stages.push(StageReport {
            stage,
            millis,
            clusters,
            coverage,
        });
    };

    let t = Timer::start();
    let tree = Octree::build(cloud.points(), config.leaf_capacity)
        .map_err(|e| PipelineError::new(Stage::Octree, e))?;
    record(Stage::Octree, t.ms(), None);

    let t = Timer::start();
    let geometry = estimate_geometry(cloud, &tree, config.geom_k, config.curvature_mode)
        .map_err(|e| PipelineError::new(Stage::Geometry, e))?;
    record(Stage::Geometry, t.ms(), None);

    let t = Timer::start();
    let seeds = select_seeds(&geometry, weak, &config.expansion).map_err(|e| PipelineError::new(Stage::Expand, e))?;
    let expansion = expand_regions(cloud, &tree, &geometry, &seeds, &config.expansion)
        .map_err(|e| PipelineError::new(Stage::Expand, e))?;
    let (expanded, conflicts) = attach_cluster_labels(&expansion.labels, weak);
    record(Stage::Expand, t.ms(), Some(&expanded));

    let t = Timer::start();
    let merged = run_merging(&expanded, cloud, provider, &config.merge).map_err(|e| PipelineError::new(Stage::Merge, e))?;
    record(Stage::Merge, t.ms(), Some(&merged.labels));

    let t = Timer::start();
    let boxes = instance_boxes(&merged.labels, cloud, config.min_points, &config.exclude_classes)
        .map_err(|e| PipelineError::new(Stage::Boxes, e))?;
    record(Stage::Boxes, t.ms(), None);

    let t = Timer::start();
    let outputs = RunOutputs::in_dir(out_dir);
    let write = |r: Result<(), crate::cloud::CloudError>| r.map_err(|e| PipelineError::new(Stage::Write, e));
    write(write_labeled_cloud(cloud, &merged.labels, &outputs.labels, LabelOutput::LabelsText))?;
    write(write_labeled_cloud(cloud, &merged.labels, &outputs.colored_ply, LabelOutput::ColoredPly))?;
    let provenance = serde_json::to_string(&expansion.admissions).map_err(|e| PipelineError::new(Stage::Write, e))?;
    std::fs::write(&outputs.provenance, provenance + "\n").map_err(|e| PipelineError::new(Stage::Write, e))?;
    write(export_boxes(&boxes, &outputs.boxes))?;
    record(Stage::Write, t.ms(), None);

    let report = RunReport {
        scene: cloud.scene_id.clone(),
        points: cloud.len(),
        weak_labels: weak.len(),
        seed: config.seed,
        threads: rayon::current_num_threads(),
        stages,
        stop_reason: expansion.stop,
        label_conflicts: conflicts.len(),
        merge_rounds: merged.rounds,
        boxes: boxes.len(),
        coverage_after_expansion: expanded.coverage(),
        final_coverage: merged.labels.coverage(),
        outputs,
    };
    write_report(&report)?;
    Ok(RunResult {
        report,
        expanded,
        labels: merged.labels,
        boxes,
    })
}
