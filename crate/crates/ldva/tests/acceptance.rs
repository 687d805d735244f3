//! Acceptance suite. Prints one PASS/FAIL line per criterion and a summary.
//!
//! Exits 0 regardless of outcome unless `LDVA_ACCEPTANCE_STRICT=1`. Set
//! `LDVA_ACCEPTANCE_ONLY=4,5` to run a subset. Real-data criteria read
//! `LDVA_MNIST_DIR`, `LDVA_USPS_DIR` and `LDVA_OMNIGLOT_DIR`.

use std::path::{Path, PathBuf};
use std::process::{Command, ExitCode};
use std::time::{Duration, Instant};

use ldva::checkpoint;
use ldva::cli::{IMAGES_FILE, LABELS_FILE};
use ldva::core::backbone::{self, maps_from_values};
use ldva::core::config::{DaPhase, StageConfig, Task, TrainConfig};
use ldva::core::data::{
    augment_rotations, class_split, generate_synthetic, sample_split, ShiftKind, SynthSpec,
};
use ldva::core::encoder::PrototypeDictionary;
use ldva::core::heads::{self, ClassPrototype, Domain};
use ldva::core::rng::{self, Purpose};
use ldva::core::trainer::{train, Checkpoint, TrainData, Trainer};
use ldva::core::{eval, Graph, Group, Tensor};
use ldva::run::{DataConfig, IdxPaths, ShiftStep};
use ldva::tasks;
use rand::Rng;

const HAND_TOL: f64 = 1e-9;
const TABLE_TOL: f64 = 0.05;

type Outcome = Result<(bool, String), String>;

fn main() -> ExitCode {
    let only: Option<Vec<usize>> = std::env::var("LDVA_ACCEPTANCE_ONLY")
        .ok()
        .map(|s| s.split(',').filter_map(|t| t.trim().parse().ok()).collect());
    let criteria: [(usize, &str, Duration, fn() -> Outcome); 9] = [
        (1, "gradient suite", Duration::from_secs(60), gradient_suite),
        (2, "hand oracles", Duration::MAX, hand_oracles),
        (3, "harmonic mean table rows", Duration::MAX, table_rows),
        (4, "synthetic GZSL", Duration::from_secs(15 * 60), synthetic_gzsl),
        (5, "synthetic DA", Duration::from_secs(15 * 60), synthetic_da),
        (6, "MNIST to USPS", Duration::from_secs(30 * 60), mnist_usps),
        (7, "Omniglot 5-way 1-shot", Duration::from_secs(30 * 60), omniglot),
        (8, "freeze and determinism", Duration::MAX, freeze_and_determinism),
        (9, "attention diversity", Duration::MAX, attention_diversity),
    ];
    let mut passed = 0;
    let mut run = 0;
    for (n, name, limit, f) in criteria {
        if only.as_ref().is_some_and(|o| !o.contains(&n)) {
            continue;
        }
        run += 1;
        let start = Instant::now();
        let (mut ok, mut detail) = f().unwrap_or_else(|e| (false, format!("error: {e}")));
        let took = start.elapsed();
        if took > limit {
            ok = false;
            detail.push_str(&format!("; over the {}s limit", limit.as_secs()));
        }
        passed += ok as usize;
        println!(
            "{} criterion {n} ({name}): {detail} [{:.1}s]",
            if ok { "PASS" } else { "FAIL" },
            took.as_secs_f64()
        );
    }
    println!("acceptance: {passed}/{run} criteria passed");
    let strict = std::env::var("LDVA_ACCEPTANCE_STRICT").is_ok_and(|v| v == "1");
    if strict && passed < run {
        ExitCode::FAILURE
    } else {
        ExitCode::SUCCESS
    }
}

fn err(e: impl std::fmt::Display) -> String {
    e.to_string()
}

fn pct(x: f64) -> String {
    format!("{:.1}%", 100.0 * x)
}

// ---- 1 ----

fn gradient_suite() -> Outcome {
    let o = Command::new(env!("CARGO_BIN_EXE_ldva")).args(["gradcheck", "--seed", "0"]).output().map_err(err)?;
    let table = String::from_utf8_lossy(&o.stdout);
    let rows = table.lines().filter(|l| l.ends_with(" ok") || l.ends_with("FAIL")).count();
    let ok = o.status.code() == Some(0);
    let mut detail = format!("`ldva gradcheck` exit {:?}, {rows} losses checked", o.status.code());
    if !ok {
        detail.push_str(&format!(": {}", String::from_utf8_lossy(&o.stderr).trim()));
    }
    Ok((ok, detail))
}

// ---- 2 ----

struct Oracle {
    failures: Vec<String>,
    count: usize,
}

impl Oracle {
    fn close(&mut self, what: &str, got: f64, want: f64) {
        self.count += 1;
        if (got - want).abs() > HAND_TOL {
            self.failures.push(format!("{what}: got {got}, want {want}"));
        }
    }

    fn same(&mut self, what: &str, got: usize, want: usize) {
        self.count += 1;
        if got != want {
            self.failures.push(format!("{what}: got {got}, want {want}"));
        }
    }
}

/// `[M, 2, 2]` maps for one sample.
fn part_losses(maps: &[f64], m: usize, zeta: f64, lambda: f64) -> Result<(Vec<f64>, Vec<f64>, f64), String> {
    let t = Tensor::new(&[1, m, 2, 2], maps.to_vec()).map_err(err)?;
    let mut g = Graph::frozen();
    let attn = maps_from_values(&mut g, &t).map_err(err)?;
    let dis = backbone::loss_dis(&mut g, &attn).map_err(err)?;
    let div = backbone::loss_div(&mut g, &attn, zeta).map_err(err)?;
    let part = backbone::loss_part(&mut g, &attn, zeta, lambda).map_err(err)?;
    Ok((g.value(dis).data().to_vec(), g.value(div).data().to_vec(), g.scalar(part)))
}

fn hand_oracles() -> Outcome {
    let mut o = Oracle { failures: Vec::new(), count: 0 };
    let onehot = |i: usize| {
        let mut v = vec![0.0; 4];
        v[i] = 1.0;
        v
    };

    let (dis, _, _) = part_losses(&[0.5, 0.5, 0.0, 0.0], 1, 0.0, 0.0)?;
    o.close("loss_dis half-split row", dis[0], 0.5);
    let (dis, _, _) = part_losses(&[0.25; 4], 1, 0.0, 0.0)?;
    o.close("loss_dis uniform", dis[0], 1.0);
    let (dis, _, _) = part_losses(&onehot(3), 1, 0.0, 0.0)?;
    o.close("loss_dis one-hot", dis[0], 0.0);

    let same = [onehot(2), onehot(2)].concat();
    let disjoint = [onehot(0), onehot(3)].concat();
    let (_, div, _) = part_losses(&same, 2, 0.02, 0.0)?;
    o.close("loss_div identical maps", div[0], 0.98);
    let (_, div, _) = part_losses(&disjoint, 2, 0.02, 0.0)?;
    o.close("loss_div disjoint maps", div[0], -0.02);
    let (_, div, _) = part_losses(&disjoint, 2, 0.0, 0.0)?;
    o.close("loss_div disjoint, zeta 0", div[0], 0.0);
    let (_, _, part) = part_losses(&disjoint, 2, 0.02, 2.0)?;
    o.close("loss_part disjoint, lambda 2", part, -0.08);

    let eye = Tensor::new(&[1, 2, 2], vec![1.0, 0.0, 0.0, 1.0]).map_err(err)?;
    let dict = PrototypeDictionary::new(eye.clone(), eye).map_err(err)?;
    let z = Tensor::new(&[1, 2], vec![0.7, -1.3]).map_err(err)?;
    o.close("loss_prob identity, lambda 1", dict.loss_prob(&z, 1.0).map_err(err)?, 4.0);
    o.close("loss_prob identity, lambda 0", dict.loss_prob(&z, 0.0).map_err(err)?, 0.0);

    let sem = heads::SemanticSet::new(vec![(1, vec![1.0, 0.0]), (2, vec![0.0, 1.0])]).map_err(err)?;
    o.close("loss_gzsl y=1", heads::loss_gzsl_value(&[1.0, 0.0], 1, &sem, 0.1).map_err(err)?, 0.0);
    o.close("loss_gzsl y=2", heads::loss_gzsl_value(&[1.0, 0.0], 2, &sem, 0.1).map_err(err)?, 1.1);

    let ce = -(2f64.exp() / (2f64.exp() + 1.0)).ln();
    o.close("loss_fsl [2,0]", heads::loss_fsl_value(&[2.0, 0.0], 0).map_err(err)?, ce);
    o.close("loss_fsl uniform over 5", heads::loss_fsl_value(&[0.3; 5], 2).map_err(err)?, 5f64.ln());

    let logits: [f64; 3] = [0.4, 1.7, -0.2];
    let z: f64 = logits.iter().map(|x| x.exp()).sum();
    let p = logits[1].exp() / z;
    o.close("loss_da target", heads::loss_da_value(&logits, Domain::Target, None).map_err(err)?, -p.ln());
    o.close("loss_da uniform over 10", heads::loss_da_value(&[0.0; 10], Domain::Target, None).map_err(err)?, 10f64.ln());
    o.close(
        "loss_da source is loss_fsl",
        heads::loss_da_value(&[2.0, 0.0], Domain::Source, Some(0)).map_err(err)?,
        ce,
    );

    let protos = vec![
        ClassPrototype { label: 1, mean: vec![1.0, 0.0] },
        ClassPrototype { label: 2, mean: vec![0.0, 1.0] },
    ];
    o.same("fsl_classify [0.9,0.2]", heads::fsl_classify(&[0.9, 0.2], &protos), 1);
    o.same("fsl_classify tie", heads::fsl_classify(&[0.5, 0.5], &protos), 1);

    o.same("pseudo_label [0.2,0.5,0.3]", heads::pseudo_label(&[0.2, 0.5, 0.3]), 1);
    o.same("pseudo_label all equal", heads::pseudo_label(&[0.4; 6]), 0);
    let mut r = rng::stream(0, Purpose::Split, 99, 0);
    for t in 0..200 {
        let v: Vec<f64> = (0..9).map(|_| r.random_range(-3.0..3.0)).collect();
        let scan = (1..v.len()).fold(0, |b, i| if v[i] > v[b] { i } else { b });
        o.same(&format!("pseudo_label random vector {t}"), heads::pseudo_label(&v), scan);
    }

    if o.failures.is_empty() {
        Ok((true, format!("{} checks within {HAND_TOL:e}", o.count)))
    } else {
        Ok((false, o.failures.join("; ")))
    }
}

// ---- 3 ----

fn table_rows() -> Outcome {
    let rows = [(59.2, 74.6, 66.0), (33.4, 87.5, 48.4), (41.1, 68.0, 51.2)];
    let mut ok = true;
    let parts: Vec<String> = rows
        .iter()
        .map(|&(ts, tr, want)| {
            let h = heads::harmonic_mean(ts, tr).unwrap_or(f64::NAN);
            let hit = (h - want).abs() <= TABLE_TOL;
            ok &= hit;
            format!("({ts}, {tr}) -> {h:.4} vs {want} {}", if hit { "ok" } else { "off" })
        })
        .collect();
    Ok((ok, parts.join(", ")))
}

// ---- 4 and 9 ----

fn gzsl_data_config() -> DataConfig {
    let mut spec = SynthSpec::new(28, 20, 4, 3, 40);
    spec.noise = 0.05;
    spec.jitter = 1;
    spec.seed = 0;
    DataConfig { synth: Some(spec), seen_fraction: 0.75, train_fraction: 0.7, split_seed: 0, ..DataConfig::default() }
}

fn gzsl_train_config() -> TrainConfig {
    let mut c = TrainConfig::for_task(Task::Gzsl);
    c.epochs = 30;
    c.lr_step_a = 3e-3;
    c.lr_step_b = Some(3e-3);
    c.loss_weights.part = 0.0;
    c.loss_weights.prob = 0.01;
    c.loss_weights.task = 1.0;
    c.seed = 0;
    c
}

struct GzslRun {
    data: tasks::GzslData,
    config: TrainConfig,
    checkpoint: Checkpoint,
}

fn gzsl_run() -> Result<&'static GzslRun, String> {
    static RUN: std::sync::OnceLock<Result<GzslRun, String>> = std::sync::OnceLock::new();
    RUN.get_or_init(|| {
        let data = tasks::gzsl_data(&gzsl_data_config()).map_err(err)?;
        let config = gzsl_train_config();
        let seen = data.seen_semantics().map_err(err)?;
        let (checkpoint, _) =
            train(&config, &TrainData::Gzsl { train: &data.train, semantics: &seen }, None, |_| {}).map_err(err)?;
        Ok(GzslRun { data, config, checkpoint })
    })
    .as_ref()
    .map_err(Clone::clone)
}

fn synthetic_gzsl() -> Outcome {
    let run = gzsl_run()?;
    let d = &run.data;
    let model = run.checkpoint.model().map_err(err)?;

    let unseen_idx: Vec<usize> = (0..d.test.len()).filter(|&i| d.split.is_unseen(d.test.labels[i])).collect();
    let unseen_test = d.test.subset(&unseen_idx);
    let unseen_sem = d.semantics.subset(&d.split.unseen).map_err(err)?.normalized();
    let pred: Vec<usize> = eval::predict_all(&model, &unseen_test)
        .map_err(err)?
        .iter()
        .map(|v| {
            let s = unseen_sem.scores(v);
            unseen_sem.labels()[(1..s.len()).fold(0, |b, i| if s[i] > s[b] { i } else { b })]
        })
        .collect();
    let zsl = per_class_mean(&pred, &unseen_test.labels);

    let (val, test) = sample_split(&d.test, 0.5, 0).map_err(err)?;
    let c_cs = eval::calibrate_c_cs(&model, &val, &d.semantics, &d.split).map_err(err)?;
    let plain = eval::evaluate_gzsl(&model, &test, &d.semantics, &d.split, 0.0).map_err(err)?;
    let cs = eval::evaluate_gzsl(&model, &test, &d.semantics, &d.split, c_cs).map_err(err)?;

    let ok = zsl >= 0.60 && cs.h >= plain.h;
    Ok((
        ok,
        format!(
            "unseen top-1 {} (bar 60.0%, chance 20.0%); ts {:.1} tr {:.1} H {:.1}; c_cs {c_cs:.4}: ts {:.1} tr {:.1} H_cs {:.1}",
            pct(zsl),
            plain.ts,
            plain.tr,
            plain.h,
            cs.ts,
            cs.tr,
            cs.h
        ),
    ))
}

/// Accuracy averaged over the classes present in `truth`.
fn per_class_mean(pred: &[usize], truth: &[usize]) -> f64 {
    let mut classes: Vec<usize> = truth.to_vec();
    classes.sort_unstable();
    classes.dedup();
    let acc: f64 = classes
        .iter()
        .map(|&c| {
            let total = truth.iter().filter(|&&t| t == c).count();
            let hits = truth.iter().zip(pred).filter(|(&t, &p)| t == c && p == c).count();
            hits as f64 / total as f64
        })
        .sum();
    acc / classes.len().max(1) as f64
}

fn attention_diversity() -> Outcome {
    let run = gzsl_run()?;
    let init = Trainer::new(run.config.clone(), run.checkpoint.output_dim).map_err(err)?;
    let before = eval::attention_overlap(&init.model, &run.data.train).map_err(err)?;
    let after = eval::attention_overlap(&run.checkpoint.model().map_err(err)?, &run.data.train).map_err(err)?;
    Ok((after < before, format!("mean pairwise overlap {before:.4} at init, {after:.4} after training")))
}

// ---- 5 and 6 ----

fn da_configs(source_epochs: usize, joint_epochs: usize) -> (TrainConfig, TrainConfig) {
    let mut source = TrainConfig::for_task(Task::Da);
    source.epochs = source_epochs;
    source.lr_step_a = 3e-3;
    source.lr_step_b = Some(3e-3);
    source.loss_weights.part = 0.0;
    source.loss_weights.prob = 0.01;
    let mut joint = source.clone();
    joint.da_phase = Some(DaPhase::JointPi);
    joint.epochs = joint_epochs;
    joint.lr_step_a = 1e-3;
    joint.lr_step_b = Some(1e-3);
    (source, joint)
}

/// Target accuracy after source-π and after joint-π.
fn source_then_joint(data: &tasks::DaData, source: &TrainConfig, joint: &TrainConfig) -> Result<(f64, f64), String> {
    let (ck, _) = train(source, &TrainData::Da { source: &data.source, target: None }, None, |_| {}).map_err(err)?;
    let src = eval::evaluate_da(&ck.model().map_err(err)?, &data.target).map_err(err)?;
    let (jk, _) = train(joint, &TrainData::Da { source: &data.source, target: Some(&data.target) }, Some(&ck), |_| {})
        .map_err(err)?;
    let jnt = eval::evaluate_da(&jk.model().map_err(err)?, &data.target).map_err(err)?;
    Ok((src, jnt))
}

fn synthetic_da() -> Outcome {
    let mut spec = SynthSpec::new(28, 10, 4, 3, 160);
    spec.noise = 0.05;
    spec.seed = 0;
    let d = DataConfig {
        synth: Some(spec),
        target_shift: vec![
            ShiftStep { kind: ShiftKind::Invert, magnitude: 1.0 },
            ShiftStep { kind: ShiftKind::Noise, magnitude: 0.1 },
        ],
        ..DataConfig::default()
    };
    let data = tasks::da_data(&d).map_err(err)?;
    let (source, joint) = da_configs(15, 10);
    let (src, jnt) = source_then_joint(&data, &source, &joint)?;
    Ok((
        jnt >= src && jnt >= 0.85,
        format!("target accuracy source-pi {} -> joint-pi {} (bar: joint >= source and >= 85.0%)", pct(src), pct(jnt)),
    ))
}

fn dataset_dir(var: &str) -> Result<PathBuf, String> {
    match std::env::var_os(var) {
        Some(p) if Path::new(&p).is_dir() => Ok(PathBuf::from(p)),
        Some(p) => Err(format!("{var}={} is not a directory", Path::new(&p).display())),
        None => Err(format!("dataset not available: set {var}")),
    }
}

/// `images-idx3-ubyte` and `labels-idx1-ubyte` in `dir`, or the `train-`
/// prefixed names used by the MNIST distribution.
fn idx_paths(dir: &Path, limit: Option<usize>, resize: Option<usize>) -> Result<IdxPaths, String> {
    for prefix in ["", "train-"] {
        let images = dir.join(format!("{prefix}{IMAGES_FILE}"));
        let labels = dir.join(format!("{prefix}{LABELS_FILE}"));
        if images.is_file() && labels.is_file() {
            return Ok(IdxPaths { images, labels, limit, resize });
        }
    }
    Err(format!("no {IMAGES_FILE} / {LABELS_FILE} pair in {}", dir.display()))
}

fn mnist_usps() -> Outcome {
    let mnist = dataset_dir("LDVA_MNIST_DIR")?;
    let usps = dataset_dir("LDVA_USPS_DIR")?;
    let d = DataConfig {
        train: Some(idx_paths(&mnist, Some(10_000), None)?),
        target: Some(idx_paths(&usps, None, Some(28))?),
        ..DataConfig::default()
    };
    let data = tasks::da_data(&d).map_err(err)?;
    let (mut source, joint) = da_configs(10, 10);
    source.batch_size = 64;
    let mut joint = joint;
    joint.batch_size = 64;
    let (src, jnt) = source_then_joint(&data, &source, &joint)?;
    Ok((
        src >= 0.75 && jnt - src >= 0.02,
        format!("USPS accuracy source-pi {} -> joint-pi {} (bar: source >= 75.0%, gain >= 2 points)", pct(src), pct(jnt)),
    ))
}

// ---- 7 ----

fn omniglot() -> Outcome {
    let dir = dataset_dir("LDVA_OMNIGLOT_DIR")?;
    let all = tasks::load_paths(&idx_paths(&dir, None, Some(28))?).map_err(err)?;
    let classes = all.present_classes().len();
    if classes != 200 {
        return Err(format!("expected a 200-class subset, found {classes} classes"));
    }
    let (base, novel, _) = class_split(&all, 0.75, 0).map_err(err)?;
    let base = augment_rotations(&base, &[90, 180, 270]).map_err(err)?;
    let novel = augment_rotations(&novel, &[90, 180, 270]).map_err(err)?;
    let mut c = TrainConfig::for_task(Task::Fsl);
    c.epochs = 10;
    c.lr_step_a = 3e-3;
    c.lr_step_b = Some(3e-3);
    c.loss_weights.part = 0.0;
    c.loss_weights.prob = 0.01;
    c.batch_size = 64;
    let (ck, _) = train(&c, &TrainData::Fsl { train: &base }, None, |_| {}).map_err(err)?;
    let r = eval::evaluate_fsl(&ck.model().map_err(err)?, &novel, 5, 1, 15, 200, 0).map_err(err)?;
    Ok((
        r.mean_acc >= 0.85,
        format!("5-way 1-shot {} ± {} over {} episodes (bar 85.0%)", pct(r.mean_acc), pct(r.stderr), r.episodes),
    ))
}

// ---- 8 ----

fn small_config() -> TrainConfig {
    let mut c = TrainConfig::for_task(Task::Gzsl);
    c.input_side = 16;
    c.stages = vec![StageConfig::new(8, 3, 1, 2), StageConfig::new(12, 3, 1, 2)];
    c.parts = 2;
    c.prototypes = 4;
    c.hidden = 16;
    c.batch_size = 8;
    c.epochs = 2;
    c.lr_step_a = 1e-2;
    c.lr_step_b = Some(1e-2);
    c.seed = 5;
    c
}

fn freeze_and_determinism() -> Outcome {
    let mut spec = SynthSpec::new(16, 6, 4, 2, 8);
    spec.noise = 0.02;
    spec.seed = 3;
    let set = generate_synthetic(&spec).map_err(err)?;
    let sem = set.semantics.clone().ok_or("synthetic set has no semantics")?;
    let data = TrainData::Gzsl { train: &set, semantics: &sem };
    let mut failures = Vec::new();

    let mut t = Trainer::new(small_config(), sem.dim()).map_err(err)?;
    let idx: Vec<usize> = (0..8).collect();
    let x = set.batch(&idx).map_err(err)?;
    let before = t.model.params.clone();
    t.step_a(&x).map_err(err)?;
    for g in [Group::Backbone, Group::Encoder, Group::Predictor] {
        if !t.model.params.group_bits_equal(&before, g) {
            failures.push(format!("step-A moved {g:?}"));
        }
    }
    let before = t.model.params.clone();
    let labels: Vec<usize> = set.labels[..8].to_vec();
    let matrix = sem.normalized().matrix();
    let targets = ldva::core::model::TaskTargets::Gzsl { rows: &labels, semantics: &matrix, eta: 1.0 };
    t.step_b(&x, targets).map_err(err)?;
    if !t.model.params.group_bits_equal(&before, Group::Grouping) {
        failures.push("step-B moved Grouping".into());
    }
    let before = t.model.params.clone();
    eval::gzsl_scores(&t.model, &set, &sem).map_err(err)?;
    eval::attention_overlap(&t.model, &set).map_err(err)?;
    if Group::ALL.iter().any(|&g| !t.model.params.group_bits_equal(&before, g)) {
        failures.push("evaluation moved parameters".into());
    }

    let (ck, _) = train(&small_config(), &data, None, |_| {}).map_err(err)?;
    let tmp = tempfile::tempdir().map_err(err)?;
    let path = tmp.path().join("ck.ldva");
    checkpoint::save(&ck, &path).map_err(err)?;
    let back = checkpoint::load(&path).map_err(err)?;
    if back != ck {
        failures.push("checkpoint round trip changed the checkpoint".into());
    }
    let bits = |c: &Checkpoint| -> Result<Vec<u64>, String> {
        let m = c.model().map_err(err)?;
        Ok(eval::gzsl_scores(&m, &set, &sem).map_err(err)?.concat().iter().map(|v| v.to_bits()).collect())
    };
    if bits(&ck)? != bits(&back)? {
        failures.push("reloaded checkpoint scores differ".into());
    }

    let jsonl = |name: &str| -> Result<(Vec<u8>, Vec<u8>), String> {
        let cfg = serde_json::json!({
            "train": serde_json::to_value(small_config()).map_err(err)?,
            "data": {"synth": serde_json::to_value(&spec).map_err(err)?},
        });
        let cfg_path = tmp.path().join(format!("{name}.json"));
        std::fs::write(&cfg_path, cfg.to_string()).map_err(err)?;
        let out = tmp.path().join(name);
        let o = Command::new(env!("CARGO_BIN_EXE_ldva"))
            .args(["train", "--task", "gzsl", "--config"])
            .arg(&cfg_path)
            .arg("--out")
            .arg(&out)
            .env_remove("LDVA_SEED")
            .output()
            .map_err(err)?;
        if !o.status.success() {
            return Err(format!("ldva train failed: {}", String::from_utf8_lossy(&o.stderr).trim()));
        }
        let read = |f: &str| std::fs::read(out.join(f)).map_err(err);
        Ok((read(ldva::cli::METRICS_FILE)?, read(ldva::cli::CHECKPOINT_FILE)?))
    };
    let (a, b) = (jsonl("a")?, jsonl("b")?);
    if a.0 != b.0 {
        failures.push("metrics.jsonl differs between identical runs".into());
    }
    if a.1 != b.1 {
        failures.push("checkpoint bytes differ between identical runs".into());
    }

    if failures.is_empty() {
        Ok((true, "group isolation, checkpoint round trip and run metrics all bit-exact".into()))
    } else {
        Ok((false, failures.join("; ")))
    }
}
