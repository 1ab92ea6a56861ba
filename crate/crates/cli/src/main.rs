use std::fmt::Write as _;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, Context, Result};
use clap::{Args, Parser, Subcommand};

use pseudolabel::cloud::{
    load_cloud, load_labels_text, load_weak_labels, write_labeled_cloud, CloudFormat, LabelMatrix,
    LabelOutput, PointCloud,
};
use pseudolabel::detection::{export_boxes, instance_boxes, load_boxes, pseudo_confidence};
use pseudolabel::expansion::{attach_cluster_labels, expand_regions, select_seeds};
use pseudolabel::geometry::{estimate_geometry, CurvatureMode};
use pseudolabel::loss::{dice_loss, js_divergence, masked_cross_entropy, parse_matrix, Target};
use pseudolabel::merge::run_merging;
use pseudolabel::metrics::{average_precision, miou};
use pseudolabel::octree::{bench_knn, random_cloud, Octree, SpeedupReport};
use pseudolabel::pipeline::{parse_class_list, run_pipeline, PipelineConfig, ProviderSpec};

#[derive(Parser)]
#[command(name = "pseudolabel", version, about = "Pseudo labels and boxes from sparse point labels")]
struct Cli {
    /// key = value configuration file
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads (0 = one per core)
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Seed selection and region expansion
    Cluster(ClusterArgs),
    /// Merge clusters of an existing label file
    Merge(MergeArgs),
    /// Axis-aligned boxes from a label file
    Boxes(BoxesArgs),
    /// Segmentation, detection or loss evaluation
    Eval(EvalArgs),
    /// Octree against linear-scan KNN timing
    BenchKnn(BenchArgs),
    /// Full pipeline
    Run(RunArgs),
}

#[derive(Args)]
struct ClusterArgs {
    #[arg(long)]
    cloud: PathBuf,
    #[arg(long)]
    weak_labels: PathBuf,
    #[arg(long)]
    gamma: Option<f64>,
    #[arg(long)]
    sigma: Option<f64>,
    #[arg(long)]
    seed_fraction: Option<f64>,
    #[arg(long)]
    k_expand: Option<usize>,
    #[arg(long)]
    geom_k: Option<usize>,
    #[arg(long)]
    curvature_mode: Option<CurvatureMode>,
    #[arg(long)]
    out_labels: PathBuf,
    #[arg(long)]
    out_provenance: Option<PathBuf>,
}

#[derive(Args)]
struct MergeArgs {
    #[arg(long)]
    labels: PathBuf,
    #[arg(long)]
    cloud: PathBuf,
    /// uniform, file:<path> or oracle:<ground-truth labels>
    #[arg(long, default_value = "uniform")]
    provider: ProviderSpec,
    /// Class count; defaults to one past the largest label seen
    #[arg(long)]
    classes: Option<usize>,
    #[arg(long)]
    rounds: Option<usize>,
    #[arg(long)]
    cond3: Option<f64>,
    #[arg(long)]
    cond4: Option<f64>,
    #[arg(long)]
    k_clusters: Option<usize>,
    #[arg(long)]
    inflate: Option<f64>,
    /// literal or narrative
    #[arg(long)]
    seg_channel: Option<String>,
    #[arg(long)]
    out_labels: PathBuf,
}

#[derive(Args)]
struct BoxesArgs {
    #[arg(long)]
    labels: PathBuf,
    #[arg(long)]
    cloud: PathBuf,
    #[arg(long)]
    min_points: Option<usize>,
    /// Comma-separated class ids
    #[arg(long)]
    exclude_classes: Option<String>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long, requires_all = ["gt_labels", "classes"])]
    pred_labels: Option<PathBuf>,
    #[arg(long)]
    gt_labels: Option<PathBuf>,
    #[arg(long)]
    classes: Option<usize>,
    #[arg(long, requires = "gt_boxes")]
    pred_boxes: Option<PathBuf>,
    #[arg(long)]
    gt_boxes: Option<PathBuf>,
    #[arg(long, default_value_t = 0.5)]
    iou: f64,
    /// ce, js or dice over matrix text files
    #[arg(long, requires_all = ["pred_matrix", "target_matrix"])]
    loss: Option<String>,
    #[arg(long)]
    pred_matrix: Option<PathBuf>,
    #[arg(long)]
    target_matrix: Option<PathBuf>,
    #[arg(long)]
    csv: Option<PathBuf>,
}

#[derive(Args)]
struct BenchArgs {
    #[arg(long, default_value_t = 100_000)]
    n: usize,
    #[arg(long, default_value_t = 16)]
    k: usize,
    #[arg(long, default_value_t = 1000)]
    queries: usize,
    #[arg(long, default_value_t = 32)]
    leaf_capacity: usize,
    /// Append a result row, writing the header for a new file
    #[arg(long)]
    csv: Option<PathBuf>,
}

#[derive(Args)]
struct RunArgs {
    #[arg(long)]
    cloud: PathBuf,
    #[arg(long)]
    weak_labels: PathBuf,
    #[arg(long)]
    out_dir: PathBuf,
    #[arg(long)]
    provider: Option<ProviderSpec>,
    /// Extra key=value overrides, applied after the config file
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

/// Failure classes mapped to exit codes.
enum Failure {
    Input(anyhow::Error),
    Stage(anyhow::Error),
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::Input(_) => 2,
            Failure::Stage(_) => 3,
        }
    }
}

trait InputErr<T> {
    fn input(self) -> Result<T, Failure>;
    fn stage(self) -> Result<T, Failure>;
}

impl<T, E: Into<anyhow::Error>> InputErr<T> for Result<T, E> {
    fn input(self) -> Result<T, Failure> {
        self.map_err(|e| Failure::Input(e.into()))
    }
    fn stage(self) -> Result<T, Failure> {
        self.map_err(|e| Failure::Stage(e.into()))
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn"))
        .format(|buf, record| writeln!(buf, "{}", record.args()))
        .init();
    let cli = Cli::parse();
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            let (Failure::Input(e) | Failure::Stage(e)) = &f;
            eprintln!("error: {e:#}");
            ExitCode::from(f.code())
        }
    }
}

fn dispatch(cli: Cli) -> Result<(), Failure> {
    let mut config = match &cli.config {
        Some(p) => PipelineConfig::load(p).map_err(|e| Failure::Input(anyhow!(e)))?,
        None => PipelineConfig::default(),
    };
    if let Some(s) = cli.seed {
        config.seed = s;
    }
    if let Some(t) = cli.threads {
        config.threads = t;
    }
    let pool = rayon_pool(config.threads)?;
    match cli.command {
        Command::Run(a) => run(config, a),
        Command::Cluster(a) => pool.install(|| cluster(config, a)),
        Command::Merge(a) => pool.install(|| merge(config, a)),
        Command::Boxes(a) => boxes(config, a),
        Command::Eval(a) => eval(a),
        Command::BenchKnn(a) => bench(config.seed, a),
    }
}

fn rayon_pool(threads: usize) -> Result<rayon::ThreadPool, Failure> {
    rayon::ThreadPoolBuilder::new().num_threads(threads).build().input()
}

fn load_any(path: &Path) -> Result<PointCloud, Failure> {
    let fmt = CloudFormat::detect(path).input()?;
    load_cloud(path, fmt)
        .with_context(|| format!("loading {}", path.display()))
        .input()
}

fn set(config: &mut PipelineConfig, key: &str, value: Option<impl ToString>) -> Result<(), Failure> {
    if let Some(v) = value {
        config.set(key, &v.to_string()).map_err(|e| Failure::Input(anyhow!(e)))?;
    }
    Ok(())
}

fn validated(config: &PipelineConfig) -> Result<(), Failure> {
    config.validate().map_err(|e| Failure::Input(anyhow!(e)))
}

fn cluster(mut config: PipelineConfig, a: ClusterArgs) -> Result<(), Failure> {
    set(&mut config, "gamma", a.gamma)?;
    set(&mut config, "sigma", a.sigma)?;
    set(&mut config, "seed_fraction", a.seed_fraction)?;
    set(&mut config, "k_expand", a.k_expand)?;
    set(&mut config, "geom_k", a.geom_k)?;
    set(&mut config, "curvature_mode", a.curvature_mode)?;
    validated(&config)?;

    let cloud = load_any(&a.cloud)?;
    let weak = load_weak_labels(&a.weak_labels).input()?;
    weak.check_range(cloud.len()).input()?;
    let tree = Octree::build(cloud.points(), config.leaf_capacity).stage()?;
    let geometry = estimate_geometry(&cloud, &tree, config.geom_k, config.curvature_mode).stage()?;
    let seeds = select_seeds(&geometry, &weak, &config.expansion).stage()?;
    let expansion = expand_regions(&cloud, &tree, &geometry, &seeds, &config.expansion).stage()?;
    let (labels, _) = attach_cluster_labels(&expansion.labels, &weak);
    write_labeled_cloud(&cloud, &labels, &a.out_labels, LabelOutput::LabelsText).stage()?;
    if let Some(p) = a.out_provenance {
        let json = serde_json::to_string(&expansion.admissions).stage()?;
        std::fs::write(&p, json + "\n").stage()?;
    }
    println!(
        "{} points, {} clusters, coverage {:.4}, stop {:?}",
        cloud.len(),
        labels.cluster_count(),
        labels.coverage(),
        expansion.stop
    );
    Ok(())
}

fn class_count(labels: &LabelMatrix, explicit: Option<usize>) -> usize {
    explicit.unwrap_or_else(|| {
        let max = labels.semantic_label.iter().copied().max().unwrap_or(-1);
        (max + 1).max(1) as usize
    })
}

fn merge(mut config: PipelineConfig, a: MergeArgs) -> Result<(), Failure> {
    set(&mut config, "rounds", a.rounds)?;
    set(&mut config, "cond3", a.cond3)?;
    set(&mut config, "cond4", a.cond4)?;
    set(&mut config, "k_clusters", a.k_clusters)?;
    set(&mut config, "inflate", a.inflate)?;
    set(&mut config, "seg_channel", a.seg_channel)?;
    validated(&config)?;

    let cloud = load_any(&a.cloud)?;
    let labels = load_labels_text(&a.labels).input()?;
    if labels.len() != cloud.len() {
        return Err(Failure::Input(anyhow!(
            "labels have {} points, cloud has {}",
            labels.len(),
            cloud.len()
        )));
    }
    let classes = match (&a.provider, a.classes) {
        (_, Some(c)) => c,
        (ProviderSpec::Oracle(p), None) => class_count(&load_labels_text(p).input()?, None),
        _ => class_count(&labels, None),
    };
    let provider = a.provider.build(classes).map_err(|e| Failure::Input(anyhow!(e)))?;
    let out = run_merging(&labels, &cloud, provider.as_ref(), &config.merge).stage()?;
    write_labeled_cloud(&cloud, &out.labels, &a.out_labels, LabelOutput::LabelsText).stage()?;
    println!(
        "{} -> {} clusters, coverage {:.4} -> {:.4}",
        labels.cluster_count(),
        out.labels.cluster_count(),
        labels.coverage(),
        out.labels.coverage()
    );
    Ok(())
}

fn boxes(mut config: PipelineConfig, a: BoxesArgs) -> Result<(), Failure> {
    set(&mut config, "min_points", a.min_points)?;
    if let Some(list) = a.exclude_classes {
        config.exclude_classes = parse_class_list(&list).map_err(|e| Failure::Input(anyhow!(e)))?;
    }
    let cloud = load_any(&a.cloud)?;
    let labels = load_labels_text(&a.labels).input()?;
    let boxes = instance_boxes(&labels, &cloud, config.min_points, &config.exclude_classes).input()?;
    export_boxes(&boxes, &a.out).stage()?;
    println!("{} boxes", boxes.len());
    Ok(())
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "n/a".to_string(), |x| format!("{x:.4}"))
}

fn eval(a: EvalArgs) -> Result<(), Failure> {
    let mut table = String::new();
    let mut csv = String::from("metric,class,value\n");
    let mut any = false;

    if let (Some(pred), Some(gt), Some(classes)) = (&a.pred_labels, &a.gt_labels, a.classes) {
        any = true;
        let p = load_labels_text(pred).input()?;
        let g = load_labels_text(gt).input()?;
        let r = miou(&p.semantic_label, &g.semantic_label, classes).input()?;
        let _ = writeln!(table, "{:<10} {:>6} {:>8}", "metric", "class", "value");
        for (c, v) in r.per_class.iter().enumerate() {
            let _ = writeln!(table, "{:<10} {:>6} {:>8}", "iou", c, fmt_opt(*v));
            let _ = writeln!(csv, "iou,{c},{}", v.map_or(String::new(), |x| x.to_string()));
        }
        let _ = writeln!(table, "{:<10} {:>6} {:>8}", "miou", "all", fmt_opt(r.mean));
        let _ = writeln!(csv, "miou,all,{}", r.mean.map_or(String::new(), |x| x.to_string()));
    }

    if let (Some(pred), Some(gt)) = (&a.pred_boxes, &a.gt_boxes) {
        any = true;
        let p = load_boxes(pred).input()?;
        let g = load_boxes(gt).input()?;
        let conf = pseudo_confidence(&p);
        let scored: Vec<_> = p.into_iter().zip(conf).collect();
        let r = average_precision(&scored, &g, a.iou).input()?;
        let name = format!("ap@{}", a.iou);
        for (c, v) in &r.per_class {
            let _ = writeln!(table, "{:<10} {:>6} {:>8.4}", name, c, v);
            let _ = writeln!(csv, "{name},{c},{v}");
        }
        let _ = writeln!(table, "{:<10} {:>6} {:>8}", format!("m{name}"), "all", fmt_opt(r.mean));
        let _ = writeln!(csv, "m{name},all,{}", r.mean.map_or(String::new(), |x| x.to_string()));
    }

    if let (Some(kind), Some(pm), Some(tm)) = (&a.loss, &a.pred_matrix, &a.target_matrix) {
        any = true;
        let read = |p: &Path| -> Result<_, Failure> {
            let text = std::fs::read_to_string(p)
                .with_context(|| format!("reading {}", p.display()))
                .input()?;
            parse_matrix(&text).map_err(|e| Failure::Input(anyhow!("{}: {e}", p.display())))
        };
        let (p, t) = (read(pm)?, read(tm)?);
        let rows = p.nrows();
        let mask = vec![true; rows];
        let value = match kind.as_str() {
            "ce" => masked_cross_entropy(p.view(), Target::Distribution(t.view()), &mask, rows.max(1) as f64).input()?,
            "js" => js_divergence(p.view(), t.view(), &mask, rows.max(1) as f64).input()?,
            "dice" => {
                let pv: Vec<f64> = p.iter().copied().collect();
                let tv: Vec<f64> = t.iter().copied().collect();
                dice_loss(&pv, &tv).input()?
            }
            other => return Err(Failure::Input(anyhow!("unknown loss {other:?}; expected ce, js or dice"))),
        };
        let _ = writeln!(table, "{:<10} {:>6} {:>8.6}", kind, "all", value);
        let _ = writeln!(csv, "{kind},all,{value}");
    }

    if !any {
        return Err(Failure::Input(anyhow!(
            "nothing to evaluate: give --pred-labels/--gt-labels/--classes, --pred-boxes/--gt-boxes, or --loss"
        )));
    }
    print!("{table}");
    if let Some(p) = a.csv {
        std::fs::write(&p, csv).stage()?;
    }
    Ok(())
}

fn bench(seed: u64, a: BenchArgs) -> Result<(), Failure> {
    let cloud = random_cloud(a.n, seed);
    let r = bench_knn(&cloud, a.k, a.queries, seed, a.leaf_capacity).input()?;
    println!(
        "n={} k={} queries={} build {:.1} ms, octree {:.1} ms, brute force {:.1} ms, ratio {:.1}x, verified {}",
        r.n, r.k, r.queries, r.build_ms, r.octree_ms, r.brute_ms, r.ratio, r.verified
    );
    if let Some(p) = a.csv {
        let fresh = !p.exists();
        let mut f = std::fs::OpenOptions::new()
            .create(true)
            .append(true)
            .open(&p)
            .stage()?;
        if fresh {
            writeln!(f, "{}", SpeedupReport::CSV_HEADER).stage()?;
        }
        writeln!(f, "{}", r.csv_row()).stage()?;
    }
    if !r.verified {
        return Err(Failure::Stage(anyhow!("octree results differ from the linear scan")));
    }
    Ok(())
}

fn run(mut config: PipelineConfig, a: RunArgs) -> Result<(), Failure> {
    if let Some(p) = a.provider {
        config.provider = p;
    }
    for kv in &a.overrides {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| Failure::Input(anyhow!("expected KEY=VALUE, got {kv:?}")))?;
        config.set(k.trim(), v.trim()).map_err(|e| Failure::Input(anyhow!(e)))?;
    }
    validated(&config)?;
    let result = run_pipeline(&config, &a.cloud, &a.weak_labels, &a.out_dir).map_err(|e| {
        if e.is_input_error() {
            Failure::Input(e.into())
        } else {
            Failure::Stage(e.into())
        }
    })?;
    let r = &result.report;
    for s in &r.stages {
        let clusters = s.clusters.map_or(String::new(), |c| format!(" clusters={c}"));
        let coverage = s.coverage.map_or(String::new(), |c| format!(" coverage={c:.4}"));
        println!("{:<9} {:>9.1} ms{clusters}{coverage}", s.stage.to_string(), s.millis);
    }
    println!("{} boxes; outputs in {}", r.boxes, a.out_dir.display());
    Ok(())
}
