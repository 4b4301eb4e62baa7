use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::json;

use hcnet_core::checks::{run_check, CheckOp};
use hcnet_core::cost::{
    balanced_partition, cost_report, ideal_balanced, random_partition, single_region, to_f64, verify_counts,
    CostReport,
};
use hcnet_core::io::{read_fmap, read_json, write_fmap, write_json, ParamBundle};
use hcnet_core::metrics::{confusion, f1_oa, iou_per_class, s_iou, Connectivity, InstanceMap, Matching, SiouOptions};
use hcnet_core::pipeline::{hcnet_forward, synth_scene, train_toy, window_means, HcnetConfig, HcnetParams, TrainConfig};
use hcnet_core::prior::PartitionMap;
use hcnet_core::Rng;

#[derive(Parser)]
#[command(name = "hcnet", version, about = "Hierarchical context network: forward runs, checks, benchmarks and metrics")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the network on an image and write class probabilities.
    Forward(ForwardArgs),
    /// Finite-difference check of one stage's backward pass.
    Gradcheck(GradcheckArgs),
    /// Dense vs hierarchical attention cost.
    Bench(BenchArgs),
    /// Train on a seeded synthetic scene.
    TrainToy(TrainArgs),
    /// Segmentation metrics for a predicted label map.
    Eval(EvalArgs),
    /// Write a seeded synthetic scene.
    Synth(SynthArgs),
}

#[derive(Args)]
struct ForwardArgs {
    /// Image FMAP, 3×H×W.
    #[arg(long)]
    input: PathBuf,
    /// Parameter bundle directory; parameters are initialized from the
    /// config seed when absent.
    #[arg(long)]
    params: Option<PathBuf>,
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    dump_q: Option<PathBuf>,
    #[arg(long)]
    dump_t: Option<PathBuf>,
}

#[derive(Args)]
struct GradcheckArgs {
    #[arg(long, value_parser = parse_op)]
    op: CheckOp,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 1e-5)]
    eps: f64,
    #[arg(long, default_value_t = 1e-4)]
    tol: f64,
    #[arg(long)]
    json: Option<PathBuf>,
}

fn parse_op(s: &str) -> std::result::Result<CheckOp, String> {
    s.parse().map_err(|_| format!("expected one of {}", CheckOp::ALL.map(|o| o.name()).join(", ")))
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum PartitionKind {
    Balanced,
    Random,
    Single,
    FromFile,
}

impl fmt::Display for PartitionKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.to_possible_value().expect("no skipped variants").get_name())
    }
}

#[derive(Args)]
struct BenchArgs {
    #[arg(long)]
    height: usize,
    #[arg(long)]
    width: usize,
    #[arg(long)]
    channels: usize,
    #[arg(long)]
    classes: usize,
    /// `from-file` takes a path: an FMAP label map or a JSON array of
    /// region sizes.
    #[arg(long, num_args = 1..=2, value_names = ["KIND", "PATH"], default_values = ["balanced"])]
    partition: Vec<String>,
    /// Seed for `--partition random` and for `--verify` inputs.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    json: Option<PathBuf>,
    /// Run the instrumented kernels and compare with the formulas.
    #[arg(long)]
    verify: bool,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long, default_value_t = 300)]
    steps: usize,
    #[arg(long, default_value_t = 0.01)]
    lr: f64,
    #[arg(long, default_value_t = 0.8)]
    lambda: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 32)]
    height: usize,
    #[arg(long, default_value_t = 32)]
    width: usize,
    #[arg(long, default_value_t = 3)]
    classes: usize,
    #[arg(long, default_value_t = 4)]
    instances: usize,
    #[arg(long, default_value_t = 16)]
    channels: usize,
    /// Gradient-norm cap; 0 disables clipping.
    #[arg(long, default_value_t = hcnet_core::pipeline::CLIP_NORM)]
    clip_norm: f64,
    #[arg(long)]
    report: Option<PathBuf>,
    #[arg(long)]
    save_params: Option<PathBuf>,
    /// Include wall time in the report (makes it run-dependent).
    #[arg(long)]
    record_time: bool,
}

#[derive(Clone, Copy, ValueEnum)]
enum SiouMatch {
    Components,
    Classmap,
}

#[derive(Clone, Copy, ValueEnum)]
enum Conn {
    #[value(name = "4")]
    Four,
    #[value(name = "8")]
    Eight,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    pred: PathBuf,
    #[arg(long)]
    gt: PathBuf,
    #[arg(long)]
    instances: Option<PathBuf>,
    /// JSON object mapping instance id to class; derived from `--gt` when
    /// omitted.
    #[arg(long, requires = "instances")]
    inst_classes: Option<PathBuf>,
    #[arg(long)]
    classes: usize,
    #[arg(long)]
    ignore_label: Option<u16>,
    #[arg(long)]
    report: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = SiouMatch::Components)]
    siou_match: SiouMatch,
    #[arg(long, value_enum, default_value_t = Conn::Four)]
    connectivity: Conn,
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    height: usize,
    #[arg(long)]
    width: usize,
    #[arg(long)]
    classes: usize,
    #[arg(long)]
    instances: usize,
    #[arg(long)]
    out_dir: PathBuf,
}

/// Argument problems found after parsing; these exit with the usage code.
#[derive(Debug)]
struct Usage(String);

impl fmt::Display for Usage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Usage {}

fn usage(msg: impl Into<String>) -> anyhow::Error {
    Usage(msg.into()).into()
}

/// A check that ran to completion and failed.
#[derive(Debug)]
struct Failed(String);

impl fmt::Display for Failed {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Failed {}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Forward(a) => forward(a),
        Command::Gradcheck(a) => gradcheck(a),
        Command::Bench(a) => bench(a),
        Command::TrainToy(a) => train(a),
        Command::Eval(a) => eval(a),
        Command::Synth(a) => synth(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) if e.is::<Usage>() => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}

fn load_config(path: &Path) -> Result<HcnetConfig> {
    let config: HcnetConfig = read_json(path)?;
    config.validate().with_context(|| format!("invalid config {}", path.display()))?;
    Ok(config)
}

fn forward(a: ForwardArgs) -> Result<()> {
    let config = load_config(&a.config)?;
    let params = match &a.params {
        Some(dir) => HcnetParams::from_bundle(&ParamBundle::load(dir)?, &config)
            .with_context(|| format!("parameters in {}", dir.display()))?,
        None => HcnetParams::init(&config)?,
    };
    let image = read_fmap(&a.input)?;
    let out = hcnet_forward(&image, &params, &config).with_context(|| format!("forward on {}", a.input.display()))?;
    write_fmap(&out.probs, &a.out)?;
    if let Some(p) = &a.dump_q {
        write_fmap(out.q.tensor(), p)?;
    }
    if let Some(p) = &a.dump_t {
        write_fmap(&out.t.to_tensor(), p)?;
    }
    println!(
        "wrote {} ({} classes, {}x{})",
        a.out.display(),
        config.num_classes,
        out.probs.dim(1),
        out.probs.dim(2)
    );
    Ok(())
}

fn gradcheck(a: GradcheckArgs) -> Result<()> {
    if !(a.eps > 0.0 && a.tol > 0.0) {
        return Err(usage("--eps and --tol must be positive"));
    }
    let report = run_check(a.op, a.seed, a.eps, a.tol)?;
    if let Some(p) = &a.json {
        write_json(&json!({ "op": a.op, "seed": a.seed, "eps": a.eps, "report": report }), p)?;
    }
    println!(
        "{:<8} seed {:<3} coords {:<6} max rel err {:.3e}  {}",
        a.op,
        a.seed,
        report.coords_checked,
        report.max_rel_error,
        if report.passed { "PASS" } else { "FAIL" }
    );
    if !report.passed {
        return Err(Failed(format!("gradcheck {} exceeded tolerance {}", a.op, a.tol)).into());
    }
    Ok(())
}

fn sizes_from_file(path: &Path, hw: usize, n: usize) -> Result<Vec<usize>> {
    let is_json = path.extension().is_some_and(|e| e.eq_ignore_ascii_case("json"));
    let sizes = if is_json {
        read_json::<Vec<usize>>(path)?
    } else {
        let map = PartitionMap::from_tensor(&read_fmap(path)?)?;
        if map.len() != hw {
            bail!("{}: label map has {} pixels, expected {hw}", path.display(), map.len());
        }
        map.counts(n)?.into_iter().map(|c| c as usize).collect()
    };
    if sizes.len() != n || sizes.iter().sum::<usize>() != hw {
        bail!("{}: region sizes {sizes:?} do not partition {hw} pixels into {n} regions", path.display());
    }
    Ok(sizes)
}

fn print_cost(label: &str, r: &CostReport) {
    println!("{label}");
    println!("  dense MACs        {:>20.0}", r.macs_dense);
    println!("  hier MACs         {:>20.0}  (pcm {:.0}, rcm {:.0})", r.macs_total, r.macs_pcm, r.macs_rcm);
    println!("  total ratio       {:>20.6}", r.ratio);
    println!("  pairwise ratio    {:>20.6e}", r.pairwise_ratio);
    println!("  attention bytes   {:>20.0} -> {:.0}", r.bytes_attn_dense, r.bytes_attn_hier);
    println!("  memory reduction  {:>19.2}%", 100.0 * r.memory_reduction);
}

fn bench(a: BenchArgs) -> Result<()> {
    let kind = PartitionKind::from_str(&a.partition[0], false).map_err(|e| usage(format!("--partition: {e}")))?;
    let path = a.partition.get(1).map(PathBuf::from);
    match (kind, &path) {
        (PartitionKind::FromFile, None) => return Err(usage("--partition from-file needs a PATH")),
        (k, Some(_)) if k != PartitionKind::FromFile => {
            return Err(usage(format!("--partition {k} does not take a path")))
        }
        _ => {}
    }
    if a.height == 0 || a.width == 0 || a.classes == 0 {
        return Err(usage("--height, --width and --classes must be positive"));
    }
    let hw = a.height * a.width;
    let mut rng = Rng::new(a.seed);
    let integer = match kind {
        PartitionKind::Balanced => balanced_partition(hw, a.classes),
        PartitionKind::Random => random_partition(hw, a.classes, &mut rng),
        PartitionKind::Single => single_region(hw, a.classes),
        PartitionKind::FromFile => sizes_from_file(path.as_deref().expect("checked above"), hw, a.classes)?,
    };
    // balanced costs use the ideal fractional split; the integer split is
    // reported alongside
    let sizes = match kind {
        PartitionKind::Balanced => ideal_balanced(hw, a.classes),
        _ => to_f64(&integer),
    };
    let report = cost_report(a.height, a.width, a.channels, &sizes)?;
    let integer_report = cost_report(a.height, a.width, a.channels, &to_f64(&integer))?;
    print_cost(&format!("partition {kind} ({} regions)", a.classes), &report);
    if kind == PartitionKind::Balanced {
        println!("  integer split pairwise ratio {:.6e}", integer_report.pairwise_ratio);
    }
    let verify = if a.verify {
        let v = verify_counts(a.height, a.width, a.channels, &integer, &mut rng)?;
        println!("verify: dense {} pcm {} rcm {} MACs match", v.dense.counted, v.pcm.counted, v.rcm.counted);
        Some(v)
    } else {
        None
    };
    if let Some(p) = &a.json {
        write_json(
            &json!({
                "partition": kind.to_string(),
                "report": report,
                "integer_sizes": integer,
                "integer_report": integer_report,
                "verify": verify,
            }),
            p,
        )?;
    }
    Ok(())
}

fn train(a: TrainArgs) -> Result<()> {
    if a.clip_norm < 0.0 {
        return Err(usage("--clip-norm must be nonnegative"));
    }
    let cfg = TrainConfig {
        height: a.height,
        width: a.width,
        classes: a.classes,
        instances: a.instances,
        channels: a.channels,
        steps: a.steps,
        lr: a.lr,
        lambda: a.lambda,
        seed: a.seed,
        clip_norm: (a.clip_norm > 0.0).then_some(a.clip_norm),
        ..TrainConfig::default()
    };
    let start = Instant::now();
    let outcome = train_toy(&cfg)?;
    let mut report = outcome.report;
    if a.record_time {
        report.wall_time_s = Some(start.elapsed().as_secs_f64());
    }
    let losses = report.total_losses();
    let window = (cfg.steps / 6).max(1);
    println!("step windows of {window}: mean total loss");
    for (i, m) in window_means(&losses, window).iter().enumerate() {
        println!("  {:>5}-{:<5} {m:.6}", i * window, (i + 1) * window - 1);
    }
    if let Some(s) = report.diverged_at {
        println!("diverged at step {s}");
    } else {
        println!("pixel accuracy   {:.4}", report.final_pixel_accuracy);
        println!("preseg accuracy  {:.4}", report.final_preseg_accuracy);
    }
    if let Some(p) = &a.report {
        write_json(&report, p)?;
    }
    if let Some(dir) = &a.save_params {
        outcome.params.to_bundle(&outcome.model)?.save(dir)?;
    }
    if let Some(s) = report.diverged_at {
        return Err(Failed(format!("loss became non-finite at step {s}")).into());
    }
    Ok(())
}

fn read_labels(path: &Path, what: &str) -> Result<PartitionMap> {
    let t = read_fmap(path)?;
    PartitionMap::from_tensor(&t).with_context(|| format!("{what} {}", path.display()))
}

/// Class of every instance, read off the ground truth; an instance spanning
/// several classes is an error.
fn classes_from_gt(instances: &InstanceMap, gt: &PartitionMap) -> Result<BTreeMap<u32, u16>> {
    let mut out = BTreeMap::new();
    for (id, pixels) in instances.pixels() {
        let class = gt.labels()[pixels[0]];
        if pixels.iter().any(|&p| gt.labels()[p] != class) {
            bail!("instance {id} covers more than one ground-truth class; pass --inst-classes");
        }
        out.insert(id, class);
    }
    Ok(out)
}

fn eval(a: EvalArgs) -> Result<()> {
    if a.classes == 0 {
        return Err(usage("--classes must be positive"));
    }
    let pred = read_labels(&a.pred, "prediction")?;
    let gt = read_labels(&a.gt, "ground truth")?;
    let counts = confusion(&pred, &gt, a.classes, a.ignore_label)?;
    let iou = iou_per_class(&counts);
    let f1 = f1_oa(&counts);
    let siou = match &a.instances {
        None => None,
        Some(path) => {
            let instances = InstanceMap::from_tensor(&read_fmap(path)?)
                .with_context(|| format!("instance map {}", path.display()))?;
            let classes = match &a.inst_classes {
                Some(p) => {
                    let raw: BTreeMap<String, u16> = read_json(p)?;
                    raw.into_iter()
                        .map(|(k, v)| {
                            k.parse::<u32>()
                                .map(|id| (id, v))
                                .map_err(|_| anyhow!("{}: instance id {k:?} is not an integer", p.display()))
                        })
                        .collect::<Result<_>>()?
                }
                None => classes_from_gt(&instances, &gt)?,
            };
            let options = SiouOptions {
                connectivity: match a.connectivity {
                    Conn::Four => Connectivity::Four,
                    Conn::Eight => Connectivity::Eight,
                },
                matching: match a.siou_match {
                    SiouMatch::Components => Matching::Components,
                    SiouMatch::Classmap => Matching::Classmap,
                },
            };
            Some(s_iou(&pred, &instances, &classes, options)?)
        }
    };
    let fmt = |v: Option<f64>| v.map_or("n/a".to_string(), |x| format!("{x:.4}"));
    println!("{:<6} {:>8} {:>8}", "class", "IoU", "F1");
    for k in 0..a.classes {
        println!("{k:<6} {:>8} {:>8}", fmt(iou.per_class[k]), fmt(f1.per_class[k]));
    }
    println!("mIoU {}  mean F1 {}  OA {}", fmt(iou.miou), fmt(f1.mean_f1), fmt(f1.oa));
    if let Some(s) = &siou {
        for b in &s.buckets {
            let hi = b.max_area.map_or("inf".to_string(), |m| m.to_string());
            println!("S-IoU area [{}, {hi}): {} instances, mS-IoU {}", b.min_area, b.count, fmt(b.ms_iou));
        }
        println!("mS-IoU {}", fmt(s.ms_iou));
    }
    if let Some(p) = &a.report {
        write_json(&json!({ "confusion": counts, "iou": iou, "f1": f1, "siou": siou }), p)?;
    }
    Ok(())
}

fn synth(a: SynthArgs) -> Result<()> {
    let scene = synth_scene(a.seed, a.height, a.width, a.classes, a.instances)?;
    std::fs::create_dir_all(&a.out_dir).with_context(|| format!("creating {}", a.out_dir.display()))?;
    write_fmap(&scene.image, a.out_dir.join("image.fmap"))?;
    write_fmap(&scene.labels.to_tensor(), a.out_dir.join("labels.fmap"))?;
    write_fmap(&scene.instances.to_tensor(), a.out_dir.join("instances.fmap"))?;
    let classes: BTreeMap<String, u16> = scene.instance_classes.iter().map(|(k, v)| (k.to_string(), *v)).collect();
    write_json(&classes, a.out_dir.join("inst_classes.json"))?;
    println!("wrote scene with {} instances to {}", classes.len(), a.out_dir.display());
    Ok(())
}
