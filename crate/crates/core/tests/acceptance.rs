//! Acceptance suite: one line per criterion, non-zero exit if any fails.

use std::collections::BTreeMap;
use std::process::ExitCode;
use std::time::{Duration, Instant};

use hcnet_core::checks::{run_check, CheckOp};
use hcnet_core::cost::{
    balanced_partition, cost_report, count_hier, ideal_balanced, random_partition, to_f64, verify_counts,
};
use hcnet_core::io::{decode_fmap, encode_fmap};
use hcnet_core::metrics::{bucket_index, confusion, f1_oa, iou_per_class, s_iou, InstanceMap, SiouOptions};
use hcnet_core::objective::{median_frequency_weights, total_loss, weighted_ce, ClassWeights, DEFAULT_LAMBDA};
use hcnet_core::pcm::pcm_forward;
use hcnet_core::piam::{nra_normalize_rows, piam_forward, FeatureSet, PiamParams, NRA_EPS};
use hcnet_core::pipeline::{
    hcnet_forward, synth_scene, synth_scene_with_areas, train_toy, window_means, HcnetConfig, HcnetParams,
    TrainConfig,
};
use hcnet_core::prior::{AffiliationMap, PartitionMap};
use hcnet_core::rcm::rcm_forward_with_eps;
use hcnet_core::{DType, Rng, Tensor};

type Outcome = Result<String, String>;

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn within(start: Instant, limit: Duration) -> Result<(), String> {
    let t = start.elapsed();
    ensure(t < limit, || format!("took {t:.2?}, limit {limit:?}"))
}

fn e(err: hcnet_core::Error) -> String {
    err.to_string()
}

fn random_labels(h: usize, w: usize, n: usize, rng: &mut Rng) -> PartitionMap {
    PartitionMap::new(h, w, (0..h * w).map(|_| rng.below(n as u64) as u16).collect()).unwrap()
}

fn oracle_equivalence() -> Outcome {
    let start = Instant::now();
    let mut rng = Rng::new(101);
    let mut worst = 0.0f64;
    let configs = 24;
    for i in 0..configs {
        let c = if i % 2 == 0 { 8 } else { 16 };
        let h = 1 + rng.below(16) as usize;
        let w = 1 + rng.below((256 / h).min(16) as u64) as usize;
        let x = Tensor::randn(&[c, h, w], 1.0, &mut rng);
        let mut params = PiamParams::init(c, &mut rng).map_err(e)?;
        params.alpha = rng.uniform_range(-1.0, 1.0);
        let n = 1 + rng.below(3) as usize;
        let (got, _) = pcm_forward(&x, &PartitionMap::constant(h, w, 0), n, &params).map_err(e)?;
        let flat = FeatureSet::new(x.reshape(&[c, h * w]).map_err(e)?).map_err(e)?;
        let (want, _) = piam_forward(&flat, &params).map_err(e)?;
        let want = want.into_values().reshape(&[c, h, w]).map_err(e)?;
        worst = worst.max(got.max_abs_diff(&want).map_err(e)?);
    }
    ensure(worst < 1e-6, || format!("max abs error {worst:e}"))?;
    within(start, Duration::from_secs(10))?;
    Ok(format!("{configs} configs, max abs error {worst:e}"))
}

fn identity_at_init() -> Outcome {
    let mut rng = Rng::new(202);
    let cases = 10;
    for _ in 0..cases {
        let (c, h, w, n) = (8, 3 + rng.below(6) as usize, 3 + rng.below(6) as usize, 1 + rng.below(4) as usize);
        let x = Tensor::randn(&[c, h, w], 1.0, &mut rng);
        let t = random_labels(h, w, n, &mut rng);
        let params = PiamParams::init(c, &mut rng).map_err(e)?;
        let (y, _) = pcm_forward(&x, &t, n, &params).map_err(e)?;
        ensure(y == x, || "PCM with alpha = 0 changed its input".into())?;

        // every class present, features constant per region; dyadic values
        // keep the region means exact
        let mut labels = t.labels().to_vec();
        for (k, l) in labels.iter_mut().take(n).enumerate() {
            *l = k as u16;
        }
        let t = PartitionMap::new(h, w, labels).map_err(e)?;
        let values: Vec<f64> = (0..c * n).map(|_| (rng.below(33) as f64 - 16.0) * 0.25).collect();
        let xc = Tensor::from_fn(&[c, h, w], |i| {
            let (ch, p) = (i / (h * w), i % (h * w));
            values[ch * n + t.labels()[p] as usize]
        });
        let q = AffiliationMap::one_hot(&t, n).map_err(e)?;
        let (y, _) = rcm_forward_with_eps(&xc, &q, &params, 0.0, NRA_EPS).map_err(e)?;
        ensure(y == xc, || "pool -> identity attention -> unpool changed a piecewise-constant input".into())?;
    }
    Ok(format!("{cases} PCM and {cases} region round trips exact"))
}

fn gradient_suite() -> Outcome {
    let start = Instant::now();
    let mut worst = (0.0f64, CheckOp::Piam, 0u64);
    for op in CheckOp::ALL {
        for seed in 0..5 {
            let r = run_check(op, seed, 1e-5, 1e-4).map_err(e)?;
            ensure(r.passed, || format!("{op} seed {seed}: max rel error {:e}", r.max_rel_error))?;
            if r.max_rel_error > worst.0 {
                worst = (r.max_rel_error, op, seed);
            }
        }
    }
    within(start, Duration::from_secs(120))?;
    Ok(format!("6 ops x 5 seeds, worst rel error {:e} ({} seed {}) in {:.1?}", worst.0, worst.1, worst.2, start.elapsed()))
}

fn nra_contract() -> Outcome {
    let mut rng = Rng::new(404);
    let mut fallback_seen = 0;
    for k in 1..12 {
        let mut a = Tensor::randn(&[k, k], 1.0, &mut rng);
        if k >= 2 {
            // constructed zero-sum row
            let row = &mut a.data_mut()[..k];
            row.fill(0.0);
            row[0] = 1.0;
            row[1] = -1.0;
        }
        let out = nra_normalize_rows(&a, NRA_EPS).map_err(e)?;
        for i in 0..k {
            let row = &out.weights.data()[i * k..(i + 1) * k];
            if out.fallback[i] {
                fallback_seen += 1;
                ensure(row.iter().all(|&v| v == 1.0 / k as f64), || format!("fallback row {i} not uniform"))?;
            } else {
                let s: f64 = row.iter().sum();
                ensure((s - 1.0).abs() <= 1e-6, || format!("row {i} of {k}x{k} sums to {s}"))?;
            }
        }
        ensure(k < 2 || out.fallback[0], || "zero-sum row did not fall back".into())?;
    }
    Ok(format!("rows sum to 1, {fallback_seen} fallback rows exactly uniform"))
}

fn complexity() -> Outcome {
    let start = Instant::now();
    let mut rng = Rng::new(505);
    let configs = 60;
    let mut strict = 0;
    for _ in 0..configs {
        let (h, w) = (2 + rng.below(7) as usize, 2 + rng.below(7) as usize);
        let c = 4 * (1 + rng.below(4) as usize);
        let n = 1 + rng.below(5) as usize;
        let sizes = random_partition(h * w, n, &mut rng);
        let v = verify_counts(h, w, c, &sizes, &mut rng).map_err(e)?;
        ensure(v.passed(), || format!("count mismatch {v:?}"))?;

        let nonempty = sizes.iter().filter(|&&s| s > 0).count();
        if nonempty >= 2 && (n * n) <= h * w {
            let r = cost_report(h, w, c, &to_f64(&sizes)).map_err(e)?;
            ensure(r.attention_macs_hier < r.pairwise_dense, || format!("hier attention not cheaper for {sizes:?}"))?;
            ensure(r.bytes_attn_hier < r.bytes_attn_dense, || format!("hier attention not smaller for {sizes:?}"))?;
            strict += 1;
        }
    }
    let r = cost_report(64, 128, 512, &ideal_balanced(64 * 128, 19)).map_err(e)?;
    let dev = (r.pairwise_ratio - 1.0 / 19.0).abs();
    ensure(dev <= 1e-12, || format!("pairwise ratio {} off 1/19 by {dev:e}", r.pairwise_ratio))?;
    ensure(r.memory_reduction > 0.8, || format!("memory reduction {}", r.memory_reduction))?;
    within(start, Duration::from_secs(5))?;
    Ok(format!(
        "{configs} counted configs exact, {strict} strict inequalities, ratio 1/19 to {dev:.1e}, memory -{:.2}%",
        100.0 * r.memory_reduction
    ))
}

fn balanced_minimality() -> Outcome {
    let (hw, n) = (1024, 8);
    let best = count_hier(&to_f64(&balanced_partition(hw, n)), n, 64, 32, 32).map_err(e)?.pcm.pairwise();
    let mut rng = Rng::new(606);
    for i in 0..1000 {
        let sizes = random_partition(hw, n, &mut rng);
        let p = count_hier(&to_f64(&sizes), n, 64, 32, 32).map_err(e)?.pcm.pairwise();
        ensure(p >= best, || format!("partition {i} {sizes:?} beats balanced: {p} < {best}"))?;
    }
    Ok(format!("1000 random partitions, none below balanced {best:.0}"))
}

fn loss_fixtures() -> Outcome {
    let w = median_frequency_weights(&[10, 30, 60]).map_err(e)?;
    ensure(w.weights == [3.0, 1.0, 0.5], || format!("weights {:?}", w.weights))?;
    let w = median_frequency_weights(&[1, 1, 3, 5]).map_err(e)?;
    ensure(w.weights == [2.0, 2.0, 2.0 / 3.0, 0.4], || format!("weights {:?}", w.weights))?;

    let p = Tensor::new(vec![2, 1, 1], vec![0.5, 0.5]).map_err(e)?;
    let y = PartitionMap::constant(1, 1, 0);
    let (l1, _) = weighted_ce(&p, &y, &ClassWeights::uniform(2)).map_err(e)?;
    let two = ClassWeights { weights: vec![2.0, 1.0], ..ClassWeights::uniform(2) };
    let (l2, _) = weighted_ce(&p, &y, &two).map_err(e)?;
    let ln2 = std::f64::consts::LN_2;
    ensure((l1 - ln2).abs() <= 1e-12, || format!("ln 2 case gave {l1}"))?;
    ensure((l2 - 2.0 * ln2).abs() <= 1e-12, || format!("2 ln 2 case gave {l2}"))?;
    ensure(DEFAULT_LAMBDA == 0.8, || "default lambda".into())?;
    ensure((total_loss(1.0, 0.5, DEFAULT_LAMBDA) - 1.4).abs() < 1e-15, || "total loss".into())?;
    Ok(format!("weights exact, CE errors {:.1e} / {:.1e}", (l1 - ln2).abs(), (l2 - 2.0 * ln2).abs()))
}

/// Map where class 1 has the given TP/FP/FN and the rest is true negative.
fn binary_case(tp: usize, fp: usize, fn_: usize, tn: usize) -> (PartitionMap, PartitionMap) {
    let mut gt = Vec::new();
    let mut pred = Vec::new();
    for (g, p, k) in [(1, 1, tp), (0, 1, fp), (1, 0, fn_), (0, 0, tn)] {
        gt.extend(std::iter::repeat_n(g, k));
        pred.extend(std::iter::repeat_n(p, k));
    }
    let len = gt.len();
    (PartitionMap::new(1, len, pred).unwrap(), PartitionMap::new(1, len, gt).unwrap())
}

fn metric_fixtures() -> Outcome {
    let (pred, gt) = binary_case(8, 1, 1, 5);
    let iou = iou_per_class(&confusion(&pred, &gt, 2, None).map_err(e)?);
    ensure(iou.per_class[1] == Some(0.8), || format!("IoU {:?}", iou.per_class[1]))?;
    let (pred, gt) = binary_case(8, 2, 2, 5);
    let f1 = f1_oa(&confusion(&pred, &gt, 2, None).map_err(e)?);
    ensure(f1.per_class[1] == Some(0.8), || format!("F1 {:?}", f1.per_class[1]))?;

    // |S| = 100, |S ∩ P| = 80, |S ∪ P| = 120
    let (h, w) = (10, 20);
    let inst = InstanceMap::new(h, w, (0..h * w).map(|p| u32::from(p % w < 10)).collect()).map_err(e)?;
    let pred = PartitionMap::new(h, w, (0..h * w).map(|p| u16::from((2..12).contains(&(p % w)))).collect()).map_err(e)?;
    let r = s_iou(&pred, &inst, &BTreeMap::from([(1, 1)]), SiouOptions::default()).map_err(e)?;
    ensure(r.records[0].s_iou == 2.0 / 3.0, || format!("S-IoU {}", r.records[0].s_iou))?;

    let buckets = [2499, 2500, 62500].map(bucket_index);
    ensure(buckets == [0, 1, 2], || format!("buckets {buckets:?}"))?;

    let mut spanned = Vec::new();
    for scene in [
        synth_scene(0, 300, 300, 4, 6).map_err(e)?,
        synth_scene_with_areas(0, 300, 300, 4, &[400, 10_000, 70_000]).map_err(e)?,
    ] {
        let r = s_iou(&scene.labels, &scene.instances, &scene.instance_classes, SiouOptions::default()).map_err(e)?;
        ensure(r.buckets.iter().all(|b| b.count > 0), || "scene does not span all buckets".into())?;
        ensure(r.ms_iou == Some(1.0) && r.records.iter().all(|x| x.s_iou == 1.0), || "perfect predictor below 1".into())?;
        spanned.push(r.records.len());
    }
    Ok(format!("0.8 / 0.8 / 2/3 exact, edges ok, perfect S-IoU 1.0 on scenes with {spanned:?} instances"))
}

fn toy_training() -> Outcome {
    let start = Instant::now();
    let cfg = TrainConfig::default();
    ensure(cfg.steps == 300 && cfg.momentum == 0.9 && cfg.poly_power == 0.9 && cfg.lambda == 0.8, || "config".into())?;
    ensure((cfg.height, cfg.width, cfg.classes) == (32, 32, 3), || "scene".into())?;
    let r = train_toy(&cfg).map_err(e)?.report;
    let elapsed = start.elapsed();
    ensure(r.diverged_at.is_none(), || format!("diverged at {:?}", r.diverged_at))?;
    let windows = window_means(&r.total_losses(), 50);
    ensure(windows.windows(2).all(|p| p[1] <= p[0]), || format!("windowed loss rises: {windows:?}"))?;
    ensure(r.final_pixel_accuracy >= 0.95, || format!("pixel accuracy {}", r.final_pixel_accuracy))?;
    ensure(r.final_preseg_accuracy >= 0.90, || format!("preseg accuracy {}", r.final_preseg_accuracy))?;
    within(start, Duration::from_secs(180))?;
    Ok(format!(
        "pixel {:.4}, preseg {:.4}, windows {:.4} -> {:.4}, {elapsed:.1?}",
        r.final_pixel_accuracy,
        r.final_preseg_accuracy,
        windows[0],
        windows[windows.len() - 1]
    ))
}

fn determinism() -> Outcome {
    let scene = synth_scene(7, 20, 24, 3, 3).map_err(e)?;
    let mut config = HcnetConfig::new(3, 8);
    config.seed = 7;
    let forward = || -> Result<Vec<u8>, String> {
        let params = HcnetParams::init(&config).map_err(e)?;
        let out = hcnet_forward(&scene.image, &params, &config).map_err(e)?;
        encode_fmap(&out.probs).map_err(e)
    };
    ensure(forward()? == forward()?, || "forward FMAP bytes differ".into())?;

    let cfg = TrainConfig { steps: 20, seed: 3, ..TrainConfig::default() };
    let report = || -> Result<String, String> {
        serde_json::to_string(&train_toy(&cfg).map_err(e)?.report).map_err(|x| x.to_string())
    };
    ensure(report()? == report()?, || "train-toy JSON differs".into())?;

    let mut rng = Rng::new(1010);
    for dtype in [DType::Float32, DType::Float64, DType::Uint16, DType::Uint32] {
        let values: Vec<f64> = (0..24)
            .map(|_| match dtype {
                DType::Float32 => rng.normal() as f32 as f64,
                DType::Float64 => rng.normal(),
                DType::Uint16 => rng.below(1 << 16) as f64,
                DType::Uint32 => rng.below(1 << 32) as f64,
            })
            .collect();
        let t = Tensor::with_dtype(vec![2, 3, 4], dtype, values).map_err(e)?;
        let bytes = encode_fmap(&t).map_err(e)?;
        let back = decode_fmap(&bytes).map_err(e)?;
        ensure(back == t && encode_fmap(&back).map_err(e)? == bytes, || format!("{dtype} round trip"))?;
    }
    Ok("forward and train-toy byte-identical, FMAP round trip exact for all dtypes".into())
}

fn main() -> ExitCode {
    let criteria: [(&str, fn() -> Outcome); 10] = [
        ("1 oracle equivalence", oracle_equivalence),
        ("2 identity at initialization", identity_at_init),
        ("3 gradient suite", gradient_suite),
        ("4 NRA contract", nra_contract),
        ("5 complexity claims", complexity),
        ("6 balanced-partition minimality", balanced_minimality),
        ("7 loss fixtures", loss_fixtures),
        ("8 metric fixtures", metric_fixtures),
        ("9 toy training", toy_training),
        ("10 determinism", determinism),
    ];
    let mut failed = 0;
    for (name, run) in criteria {
        match run() {
            Ok(detail) => println!("PASS  {name}: {detail}"),
            Err(why) => {
                failed += 1;
                println!("FAIL  {name}: {why}");
            }
        }
    }
    println!("{} of 10 criteria passed", 10 - failed);
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
