//! One line per acceptance criterion; exits non-zero if any fails.

#[path = "../../core/tests/support/mod.rs"]
mod support;

use std::collections::BTreeMap;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::time::Instant;

use skelfuse::gradcheck::gradient_suite;
use skelfuse::graph::{
    normalize_adjacency, partition_neighbors, PartitionedAdjacency, SkeletonSequence, SkeletonTemplate, DEFAULT_ALPHA,
    PARTITION_SUBSETS,
};
use skelfuse::io::{decode_checkpoint, encode_checkpoint, format_skeletons, load_checkpoint, parse_skeletons, save_checkpoint};
use skelfuse::resnet::RgbNet;
use skelfuse::rng::Rng;
use skelfuse::stgcn::{extract_joint_weights, StGcn};
use skelfuse::stroi::{apply_joint_weights, ChannelStats, StRoiGeometry, StRoiGrid, SubjectLayout};
use skelfuse::synth::Split;
use skelfuse::train::{lr_at_epoch, soft_mode_probe, train_rgb_stage, AttentionMode, RgbExample, TrainConfig};
use skelfuse::{Error, Tensor};
use skelfuse_cli::config::Config;
use skelfuse_cli::stages::{Dataset, Stage};

type Outcome = Result<String, String>;

fn check(cond: bool, what: impl Into<String>) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(what.into())
    }
}

fn gradients() -> Outcome {
    let start = Instant::now();
    let cases = gradient_suite(42).map_err(|e| e.to_string())?;
    let secs = start.elapsed().as_secs_f64();
    let worst = cases.iter().fold(("", 0.0f32), |w, c| if c.max_rel_error > w.1 { (c.name, c.max_rel_error) } else { w });
    for c in &cases {
        check(c.max_rel_error < 1e-3, format!("{} relative error {:.3e}", c.name, c.max_rel_error))?;
    }
    check(secs < 120.0, format!("took {secs:.1} s"))?;
    Ok(format!("{} cases, worst {} {:.2e}, {secs:.2} s", cases.len(), worst.0, worst.1))
}

fn oracles() -> Outcome {
    use support::*;
    let mut rng = Rng::new(2);
    let (mut exact, mut rounded) = (0.0f64, 0.0f64);
    for _ in 0..50 {
        let (x, k, spec) = conv_problem(&mut rng);
        exact = exact.max(rel_error(&conv_tape::<f64>(&x, &k, spec), &conv_oracle(&x, &k, spec).0, 1e-9));
        let (x, k) = (x.cast::<f32>().cast::<f64>(), k.cast::<f32>().cast::<f64>());
        let (want, mag) = conv_oracle(&x, &k, spec);
        rounded = rounded.max(rel_error_to_magnitude(&conv_tape::<f32>(&x, &k, spec), &want, &mag));

        let (a, b) = matmul_problem(&mut rng);
        exact = exact.max(rel_error(&matmul_tape::<f64>(&a, &b), &matmul_oracle(&a, &b).0, 1e-9));
        let (a, b) = (a.cast::<f32>().cast::<f64>(), b.cast::<f32>().cast::<f64>());
        let (want, mag) = matmul_oracle(&a, &b);
        rounded = rounded.max(rel_error_to_magnitude(&matmul_tape::<f32>(&a, &b), &want, &mag));

        let (x, axes) = reduce_problem(&mut rng);
        exact = exact.max(rel_error(&reduce_tape::<f64>(&x, &axes), &reduce_oracle(&x, &axes).0, 1e-9));
        let x = x.cast::<f32>().cast::<f64>();
        let (want, mag) = reduce_oracle(&x, &axes);
        rounded = rounded.max(rel_error_to_magnitude(&reduce_tape::<f32>(&x, &axes), &want, &mag));
    }
    check(exact < 1e-5, format!("f64 element-wise relative error {exact:.2e}"))?;
    check(rounded < 1e-5, format!("f32 error relative to term magnitude {rounded:.2e}"))?;
    Ok(format!("50 shapes each; f64 element-wise {exact:.1e}, f32 vs term magnitude {rounded:.1e}"))
}

fn adjacency() -> Outcome {
    let mut rng = Rng::new(3);
    for g in 0..20 {
        let raw: Vec<Tensor> = (0..PARTITION_SUBSETS).map(|_| support::random_adjacency(6, &mut rng)).collect();
        let adj = normalize_adjacency(PartitionedAdjacency { raw: raw.clone(), normalized: vec![] }, DEFAULT_ALPHA)
            .map_err(|e| e.to_string())?;
        for (a, n) in raw.iter().zip(&adj.normalized) {
            let want = support::normalized_oracle(a, DEFAULT_ALPHA);
            check(
                n.data().iter().zip(want.data()).all(|(x, y)| x.to_bits() == y.to_bits()),
                format!("graph {g} differs from the per-element formula"),
            )?;
        }
    }
    let template = SkeletonTemplate::stick_figure();
    let m = template.joint_count();
    for pose in 0..10 {
        let seq = SkeletonSequence::single(Tensor::normal(&[3, m, 3], 1.0, &mut rng), 0).unwrap();
        let adj = partition_neighbors(&template, &seq).map_err(|e| e.to_string())?;
        for i in 0..m {
            let mut hood = template.neighbors(i);
            hood.push(i);
            for j in 0..m {
                let count: f32 = adj.raw.iter().map(|a| a.at(&[i, j])).sum();
                let want = if hood.contains(&j) { 1.0 } else { 0.0 };
                check(count == want, format!("pose {pose}: pair ({i}, {j}) in {count} subsets"))?;
            }
        }
    }
    Ok(format!("20 random 6-vertex graphs bit-exact; partition of all {m} joints over 10 poses"))
}

fn joint_weights() -> Outcome {
    let mut rng = Rng::new(4);
    let mut worst = 0.0f64;
    for _ in 0..20 {
        let y = Tensor::normal(&[8, 6, 15], 1.0, &mut rng);
        let got = extract_joint_weights(&y).map_err(|e| e.to_string())?;
        for (g, w) in got.values().iter().zip(support::joint_weight_oracle(&y)) {
            worst = worst.max((*g as f64 - w).abs());
        }
        check(extract_joint_weights(&y.map(|v| -v)).unwrap() == got, "sign flip changed the weights")?;
        for c in [0.5f32, 2.0, 4.0] {
            let scaled = extract_joint_weights(&y.map(|v| v * c)).unwrap();
            let want: Vec<f32> = got.values().iter().map(|v| v * c).collect();
            check(scaled.values() == want.as_slice(), format!("scaling by {c} is not exact"))?;
        }
    }
    check(worst <= 1e-6, format!("oracle deviation {worst:.2e}"))?;
    Ok(format!("20 maps of (8,6,15): max deviation {worst:.1e}; sign flip and scaling exact"))
}

fn stroi_geometry() -> Outcome {
    support::check_block_placement(5)?;
    for (p, side) in [(96, 480), (48, 240)] {
        let g = StRoiGeometry::new(5, 5, p, SubjectLayout::Single).map_err(|e| e.to_string())?;
        check(g.image_size() == (side, side), format!("P={p} gives {:?}", g.image_size()))?;
    }
    support::check_two_subject_golden()?;
    Ok("sentinel placement exact; P=96 -> 480x480, P=48 -> 240x240; two-subject golden image".into())
}

fn weighting() -> Outcome {
    let mut rng = Rng::new(6);
    let geometry = StRoiGeometry::new(5, 5, 8, SubjectLayout::Pair).unwrap();
    let (h, w) = geometry.image_size();
    let grid = StRoiGrid { image: Tensor::uniform(&[3, h, w], 0.0, 1.0, &mut rng), geometry, subject_count: 2 };
    let apply = |w: &[f32]| apply_joint_weights(&grid, w).map(|o| o.image).map_err(|e| e.to_string());
    check(apply(&[1.0; 10])? == grid.image, "unit weights changed the image")?;
    for part in 0..10 {
        let mut wts = [1.0f32; 10];
        wts[part] = 0.0;
        let out = apply(&wts)?;
        let probe = StRoiGrid { image: out, ..grid.clone() };
        let (subject, row) = (part / 5, part % 5);
        for l in 0..5 {
            check(probe.block(row, l, subject).data().iter().all(|&v| v == 0.0), format!("part {part} not annihilated"))?;
            check(probe.block(row, l, 1 - subject) == grid.block(row, l, 1 - subject), "other subject affected")?;
        }
    }
    let mut worst = 0.0f32;
    for _ in 0..10 {
        let a: Vec<f32> = (0..10).map(|_| rng.uniform() as f32).collect();
        let b: Vec<f32> = (0..10).map(|_| rng.uniform() as f32).collect();
        let s: Vec<f32> = a.iter().zip(&b).map(|(x, y)| x + y).collect();
        let (ya, yb, ys) = (apply(&a)?, apply(&b)?, apply(&s)?);
        for ((p, q), r) in ya.data().iter().zip(yb.data()).zip(ys.data()) {
            worst = worst.max((p + q - r).abs());
        }
    }
    check(worst <= 1e-6, format!("linearity deviation {worst:.2e}"))?;
    Ok(format!("identity exact, annihilation exact, linearity within {worst:.1e}"))
}

fn schedule() -> Outcome {
    let cfg = TrainConfig::reference_schedule();
    let got: Vec<f64> = [0, 44, 54].iter().map(|&e| lr_at_epoch(&cfg, e).unwrap()).collect();
    check(got == [0.1, 0.01, 0.001], format!("{got:?}"))?;
    Ok(format!("epochs 0/44/54 -> {got:?}"))
}

fn config(pairs: &[(&str, &str)], out: &Path) -> Config {
    let pairs: Vec<(String, String)> = pairs.iter().map(|(k, v)| (k.to_string(), v.to_string())).collect();
    Config::from_pairs(&pairs).unwrap().with_overrides(Some(42), Some(out.to_path_buf())).unwrap()
}

/// Small pipeline configuration shared by the determinism and mode checks.
const REDUCED: &[(&str, &str)] = &[
    ("samples_per_class", "10"),
    ("frames", "16"),
    ("P", "8"),
    ("S", "32"),
    ("gcn_layers", "8:1,16:2"),
    ("rgb_stem", "8:3:1"),
    ("rgb_stages", "8x1,16x1"),
    ("epochs", "3"),
    ("decay_epochs", "1,2"),
    ("batch", "8"),
];

fn run_stages(cfg: &Config, modes: &[AttentionMode]) -> Result<(), String> {
    let mut sink = std::io::sink();
    let mut stage = Stage::new(cfg, &mut sink);
    let e = |e: Error| e.to_string();
    stage.gen_synthetic().map_err(e)?;
    stage.train_skeleton().map_err(e)?;
    stage.build_stroi().map_err(e)?;
    stage.extract_weights().map_err(e)?;
    for &m in modes {
        stage.train_rgb(m).map_err(e)?;
    }
    stage.evaluate(None).map_err(e)?;
    Ok(())
}

/// Relative path -> bytes of every metrics file, checkpoint and report.
fn artifacts(root: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for entry in std::fs::read_dir(&dir).unwrap() {
            let path = entry.unwrap().path();
            if path.is_dir() {
                stack.push(path);
            } else if matches!(path.extension().and_then(|e| e.to_str()), Some("jsonl" | "skfz" | "txt" | "json" | "png")) {
                out.insert(path.strip_prefix(root).unwrap().to_path_buf(), std::fs::read(&path).unwrap());
            }
        }
    }
    out
}

fn determinism() -> Outcome {
    let dirs = [tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap()];
    let modes = [AttentionMode::None, AttentionMode::Fixed, AttentionMode::Soft];
    let mut runs = Vec::new();
    for d in &dirs {
        run_stages(&config(REDUCED, d.path()), &modes)?;
        runs.push(artifacts(d.path()));
    }
    check(runs[0].keys().eq(runs[1].keys()), "runs wrote different files")?;
    for (path, bytes) in &runs[0] {
        check(&runs[1][path] == bytes, format!("{} differs between runs", path.display()))?;
    }
    let checkpoints = runs[0].keys().filter(|p| p.extension().is_some_and(|e| e == "skfz")).count();
    let metrics = runs[0].keys().filter(|p| p.extension().is_some_and(|e| e == "jsonl")).count();
    Ok(format!(
        "two seed-42 runs (reduced config, all three modes): {} files identical ({checkpoints} checkpoints, {metrics} metrics)",
        runs[0].len()
    ))
}

fn end_to_end() -> Outcome {
    let start = Instant::now();
    let dir = tempfile::tempdir().unwrap();
    let cfg = config(&[], dir.path());
    let mut sink = std::io::sink();
    let mut stage = Stage::new(&cfg, &mut sink);
    let e = |e: Error| e.to_string();
    stage.gen_synthetic().map_err(e)?;
    stage.train_skeleton().map_err(e)?;
    stage.build_stroi().map_err(e)?;
    stage.train_rgb(AttentionMode::None).map_err(e)?;
    stage.train_rgb(AttentionMode::Fixed).map_err(e)?;
    stage.ensemble(AttentionMode::Fixed).map_err(e)?;
    let rows = stage.evaluate(Some(AttentionMode::Fixed)).map_err(e)?;
    let secs = start.elapsed().as_secs_f64();
    let acc = |i: usize| rows[i - 1].accuracy.ok_or(format!("row {i} missing"));
    let (skeleton, plain, weighted, ens) = (acc(1)?, acc(2)?, acc(4)?, acc(7)?);
    let summary = format!(
        "skeleton {skeleton:.3}, rgb plain {plain:.3}, rgb weighted {weighted:.3}, ensemble {ens:.3}, {:.0} s",
        secs
    );
    check(skeleton >= 0.8, format!("(a) skeleton below 0.80: {summary}"))?;
    check(weighted >= 0.8, format!("(b) weighted rgb below 0.80: {summary}"))?;
    check(weighted > plain, format!("(c) weighted not above unweighted: {summary}"))?;
    check(ens >= skeleton.max(weighted) - 0.02, format!("(d) ensemble too low: {summary}"))?;
    check(secs < 900.0, format!("over 15 min: {summary}"))?;
    Ok(summary)
}

fn mode_contracts() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config(REDUCED, dir.path());
    let mut sink = std::io::sink();
    let mut stage = Stage::new(&cfg, &mut sink);
    let e = |e: Error| e.to_string();
    stage.gen_synthetic().map_err(e)?;
    stage.train_skeleton().map_err(e)?;
    stage.build_stroi().map_err(e)?;
    let model_path = stage.paths.skeleton_model();
    let before = std::fs::read(&model_path).unwrap();

    let dataset = Dataset::load(&cfg, &stage.paths).map_err(e)?;
    let grids = stage.load_grids(&dataset).map_err(e)?;
    let train: Vec<RgbExample> = dataset
        .indices(Split::Train)
        .into_iter()
        .map(|i| RgbExample { grid: &grids[i], skeleton: &dataset.skeletons[i], label: dataset.manifest.samples[i].label })
        .collect();
    let classes = dataset.classes();
    let load_gcn = || StGcn::import(cfg.gcn_config_for(classes), &load_checkpoint(&model_path).unwrap()).unwrap();
    let new_rgb = || RgbNet::new(cfg.rgb_config_for(classes), &mut Rng::new(5)).unwrap();
    // One optimizer step: a single epoch with the whole split in one batch.
    let one_step = TrainConfig { epochs: 1, batch_size: train.len(), decay_epochs: vec![], ..cfg.train.clone() };

    let mut gcn = load_gcn();
    train_rgb_stage(&mut new_rgb(), &mut gcn, &dataset.template, &train, &[], &one_step, AttentionMode::Fixed, false)
        .map_err(e)?;
    stage.train_rgb(AttentionMode::Fixed).map_err(e)?;
    check(encode_checkpoint(&gcn.export()) == before, "fixed mode changed the skeleton network")?;
    check(std::fs::read(&model_path).unwrap() == before, "fixed mode rewrote the skeleton checkpoint")?;

    let mut gcn = load_gcn();
    let original = gcn.export();
    train_rgb_stage(&mut new_rgb(), &mut gcn, &dataset.template, &train, &[], &one_step, AttentionMode::Soft, true)
        .map_err(e)?;
    let changed = gcn.export().iter().filter(|(k, v)| original[*k] != **v).count();
    check(changed > 0, "soft mode left every skeleton parameter unchanged")?;

    let mut gcn = load_gcn();
    let stats = ChannelStats::measure(train.iter().map(|x| &x.grid.image)).map_err(e)?;
    let probe = soft_mode_probe(&mut new_rgb(), &mut gcn, &dataset.template, &train[..4], &stats, cfg.train.loss)
        .map_err(e)?;
    check(probe.mask_grad_norm > 0.0, "edge-mask gradient is zero")?;
    Ok(format!(
        "fixed: skeleton checkpoint byte-identical; soft: {changed} skeleton tensors changed after one step, |dL/dM| = {:.2e}",
        probe.mask_grad_norm
    ))
}

fn persistence() -> Outcome {
    let mut rng = Rng::new(11);
    let dir = tempfile::tempdir().unwrap();
    let mut bundle = BTreeMap::new();
    bundle.insert("w".to_string(), Tensor::normal(&[3, 4, 5], 1.0, &mut rng));
    bundle.insert("edge".to_string(), Tensor::new(&[3], vec![-0.0, f32::MIN_POSITIVE / 8.0, f32::MAX]).unwrap());
    let path = dir.path().join("m.skfz");
    save_checkpoint(&bundle, &path).map_err(|e| e.to_string())?;
    let loaded = load_checkpoint(&path).map_err(|e| e.to_string())?;
    check(encode_checkpoint(&loaded) == std::fs::read(&path).unwrap(), "checkpoint round trip not bit-identical")?;
    let bytes = std::fs::read(&path).unwrap();
    for i in 0..bytes.len() {
        let mut bad = bytes.clone();
        bad[i] ^= 0x01;
        check(
            matches!(decode_checkpoint(&bad, &path), Err(Error::Corrupt { .. })),
            format!("flipped byte {i} was accepted"),
        )?;
    }
    let seqs: Vec<SkeletonSequence> =
        (0..3).map(|l| SkeletonSequence::single(Tensor::normal(&[4, 15, 3], 2.0, &mut rng), l).unwrap()).collect();
    let text = format_skeletons(&seqs);
    let back = parse_skeletons(&text, Path::new("mem")).map_err(|e| e.to_string())?;
    check(back == seqs && format_skeletons(&back) == text, "skeleton text round trip not exact")?;
    Ok(format!("checkpoint bit-identical; all {} single-byte corruptions rejected; skeleton text exact", bytes.len()))
}

fn main() {
    let criteria: [(&str, fn() -> Outcome); 11] = [
        ("gradient suite", gradients),
        ("oracle equivalence", oracles),
        ("adjacency", adjacency),
        ("joint weights", joint_weights),
        ("ST-ROI geometry", stroi_geometry),
        ("weighting properties", weighting),
        ("learning-rate schedule", schedule),
        ("determinism", determinism),
        ("synthetic end-to-end", end_to_end),
        ("mode contracts", mode_contracts),
        ("persistence", persistence),
    ];
    // Optional criterion numbers on the command line select a subset.
    let only: Vec<usize> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let (mut passed, mut failed) = (0, 0);
    for (i, (name, run)) in criteria.iter().enumerate() {
        if !only.is_empty() && !only.contains(&(i + 1)) {
            continue;
        }
        let outcome = catch_unwind(AssertUnwindSafe(run)).unwrap_or_else(|p| {
            Err(p.downcast_ref::<String>().cloned().or(p.downcast_ref::<&str>().map(|s| s.to_string())).unwrap_or_default())
        });
        match outcome {
            Ok(detail) => {
                passed += 1;
                println!("criterion {:>2} PASS  {name}: {detail}", i + 1);
            }
            Err(why) => {
                failed += 1;
                println!("criterion {:>2} FAIL  {name}: {why}", i + 1);
            }
        }
    }
    println!("acceptance: {passed} passed, {failed} failed");
    if failed > 0 {
        std::process::exit(1);
    }
}
