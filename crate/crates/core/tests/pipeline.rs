use ldva_core::config::{StageConfig, Task, TrainConfig};
use ldva_core::data::{generate_synthetic, sample_episode, LabeledImageSet, SynthSpec};
use ldva_core::eval;
use ldva_core::rng::{self, Purpose};
use ldva_core::trainer::{train, TrainData, Trainer};
use ldva_core::Group;

fn small_config(task: Task) -> TrainConfig {
    let mut c = TrainConfig::for_task(task);
    c.input_side = 16;
    c.stages = vec![StageConfig::new(8, 3, 1, 2), StageConfig::new(12, 3, 1, 2)];
    c.parts = 2;
    c.prototypes = 4;
    c.hidden = 16;
    c.batch_size = 16;
    c.lr_step_a = 3e-3;
    c.lr_step_b = Some(3e-3);
    c.loss_weights.part = 0.0;
    c.loss_weights.prob = 0.01;
    c.seed = 4;
    c
}

fn synthetic(classes: usize, per: usize) -> LabeledImageSet {
    let mut spec = SynthSpec::new(16, classes, 4, 3, per);
    spec.noise = 0.02;
    spec.seed = 8;
    generate_synthetic(&spec).unwrap()
}

#[test]
fn episode_class_inclusion_is_uniform() {
    let set = LabeledImageSet::new(1, 1, vec![0.5; 40], (0..40).map(|i| i % 20).collect(), 20).unwrap();
    let mut r = rng::stream(11, Purpose::Episode, 0, 0);
    let trials = 10_000;
    let mut counts = [0usize; 20];
    for _ in 0..trials {
        let ep = sample_episode(&set, 5, 1, 1, &mut r).unwrap();
        ep.classes.iter().for_each(|&c| counts[c] += 1);
    }
    let p = 0.25;
    let sigma = (trials as f64 * p * (1.0 - p)).sqrt();
    for (c, &n) in counts.iter().enumerate() {
        let dev = (n as f64 - trials as f64 * p).abs();
        assert!(dev <= 3.0 * sigma, "class {c}: {n} inclusions, {dev:.1} > 3σ = {:.1}", 3.0 * sigma);
    }
}

#[test]
fn freeze_contracts_hold_over_a_full_epoch() {
    let set = synthetic(4, 8);
    let data = TrainData::Fsl { train: &set };
    let mut t = Trainer::new(small_config(Task::Fsl), set.num_classes).unwrap();
    let x = set.batch(&(0..16).collect::<Vec<_>>()).unwrap();

    let before = t.model.params.clone();
    t.step_a(&x).unwrap();
    for g in [Group::Backbone, Group::Encoder, Group::Predictor] {
        assert!(t.model.params.group_bits_equal(&before, g), "step-A moved {g:?}");
    }
    assert!(!t.model.params.group_bits_equal(&before, Group::Grouping));

    let before = t.model.params.clone();
    let rows: Vec<usize> = set.labels[..16].to_vec();
    t.step_b(&x, ldva_core::model::TaskTargets::Fsl { labels: &rows }).unwrap();
    assert!(t.model.params.group_bits_equal(&before, Group::Grouping), "step-B moved grouping");

    t.run_epoch(&data).unwrap();
    let before = t.model.params.clone();
    eval::evaluate_fsl(&t.model, &set, 2, 1, 2, 3, 0).unwrap();
    eval::attention_overlap(&t.model, &set).unwrap();
    for g in Group::ALL {
        assert!(t.model.params.group_bits_equal(&before, g), "evaluation moved {g:?}");
    }
}

#[test]
fn full_runs_are_bit_identical() {
    let set = synthetic(4, 8);
    let mut cfg = small_config(Task::Fsl);
    cfg.epochs = 2;
    let data = TrainData::Fsl { train: &set };
    let (a, ma) = train(&cfg, &data, None, |_| {}).unwrap();
    let (b, mb) = train(&cfg, &data, None, |_| {}).unwrap();
    assert_eq!(a, b);
    assert_eq!(ma, mb);
    let bits = |m: &[ldva_core::trainer::EpochMetrics]| m.iter().map(|e| e.losses.total.to_bits()).collect::<Vec<_>>();
    assert_eq!(bits(&ma), bits(&mb));
}

#[test]
fn synthetic_classes_become_separable() {
    let mut spec = SynthSpec::new(28, 6, 4, 3, 20);
    spec.noise = 0.02;
    spec.seed = 8;
    let set = generate_synthetic(&spec).unwrap();
    let mut cfg = TrainConfig::for_task(Task::Fsl);
    cfg.lr_step_a = 3e-3;
    cfg.lr_step_b = Some(3e-3);
    cfg.loss_weights.part = 0.0;
    cfg.loss_weights.prob = 0.01;
    cfg.epochs = 10;
    cfg.batch_size = 8;
    let (ck, metrics) = train(&cfg, &TrainData::Fsl { train: &set }, None, |_| {}).unwrap();
    let model = ck.model().unwrap();
    let pred: Vec<usize> =
        eval::predict_all(&model, &set).unwrap().iter().map(|v| ldva_core::heads::pseudo_label(v)).collect();
    let acc = eval::accuracy(&pred, &set.labels);
    assert!(acc >= 0.9, "train accuracy {acc}, per epoch {:?}", metrics.iter().map(|m| m.train_acc).collect::<Vec<_>>());
}
