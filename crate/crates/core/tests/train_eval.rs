mod common;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use treeprompt::grounder::{Dataset, DatasetConfig, Split, SplitSizes, WorldConfig};
use treeprompt::numerics::ParamStore;
use treeprompt::train_eval::{ablate, AblationConfig, evaluate, evaluate_model, log_convergence, tune, ConvergenceLog, PromptedModel, RunConfig, TrainError};
use treeprompt::tree_prompt::{TreePromptError, WordVectors, UNK};
use treeprompt::Tensor32;

fn quick(seed: u64) -> RunConfig {
    RunConfig {
        prompt_len: 4,
        d_w: 8,
        d_l: 4,
        epochs_tree: 2,
        lr_tree: 1e-3,
        seed,
        ..Default::default()
    }
}

#[test]
fn perfect_predictor_scores_one() {
    let ds = common::small_dataset(0, [10, 10, 10, 10, 40]);
    let acc = evaluate(ds.split(Split::TuneTestCompositional), |e| Ok(e.gold_box)).unwrap();
    assert_eq!(acc, 1.0);
    let acc = evaluate(ds.split(Split::TuneTestCompositional), |e| Ok(e.scene.region((e.gold + 1) % e.scene.objects.len()))).unwrap();
    assert_eq!(acc, 0.0);
}

#[test]
fn uniform_predictor_matches_binomial() {
    let config = DatasetConfig {
        world: WorldConfig { min_objects: 12, max_objects: 12, ..Default::default() },
        sizes: SplitSizes { pretrain: 0, tune_train: 0, tune_val: 0, tune_test_simple: 2000, tune_test_compositional: 0 },
        ..Default::default()
    };
    let ds = Dataset::generate(3, &config).unwrap();
    let examples = ds.split(Split::TuneTestSimple);
    assert!(examples.iter().all(|e| e.scene.objects.len() == 12));
    let acc = evaluate(examples, |e| {
        let idx: u64 = e.id.rsplit('-').next().unwrap().parse().unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(idx ^ 0xabcdef);
        Ok(e.scene.region(rng.gen_range(0..12)))
    })
    .unwrap();
    let p = 1.0 / 12.0;
    let sigma = (p * (1.0 - p) / examples.len() as f64).sqrt();
    assert!((acc - p).abs() <= 3.0 * sigma, "accuracy {acc}, expected {p} ± {}", 3.0 * sigma);
}

#[test]
fn empty_split_is_an_error() {
    assert!(matches!(evaluate(&[], |e| Ok(e.gold_box)), Err(TrainError::EmptySplit(_))));
}

#[test]
fn zero_learning_rate_keeps_accuracy() {
    let ds = common::small_dataset(0, [20, 24, 16, 16, 16]);
    let fb = common::random_backbone::<f32>(&ds, 1);
    let cfg = RunConfig { lr_tree: 0.0, ..quick(3) };
    let before = PromptedModel::build(&fb, &cfg, None).unwrap();
    let (report, after) = tune(&fb, &ds, &cfg, None).unwrap();
    assert_eq!(before.prompt_store().hash(), after.prompt_store().hash());
    let initial = evaluate_model(&before, ds.split(Split::TuneTestCompositional)).unwrap();
    assert_eq!(report.test_accuracy["tune_test_compositional"], initial);
    assert!(report.epoch_val_accuracy.windows(2).all(|w| w[0] == w[1]));
}

#[test]
fn tuning_is_reproducible_and_keeps_backbone() {
    let ds = common::small_dataset(0, [20, 24, 8, 8, 8]);
    let fb = common::random_backbone::<f32>(&ds, 1);
    let hash = fb.hash();
    let (a, ma) = tune(&fb, &ds, &quick(7), None).unwrap();
    let (b, mb) = tune(&fb, &ds, &quick(7), None).unwrap();
    assert_eq!(a.step_losses, b.step_losses);
    assert_eq!(a.test_accuracy, b.test_accuracy);
    assert_eq!(ma.prompt_store().hash(), mb.prompt_store().hash());
    assert_eq!(a.backbone_hash_before, a.backbone_hash_after);
    assert_eq!(fb.hash(), hash);
    assert_eq!(ma.backbone_hash(), fb.hash());
    assert_eq!(a.step_losses.len(), 2 * 24 / 8);
    assert_eq!(a.epoch_val_accuracy.len(), 3);
}

#[test]
fn continuous_cell_matches_continuous_run() {
    let ds = common::small_dataset(0, [20, 16, 8, 8, 8]);
    let fb = common::random_backbone::<f32>(&ds, 1);
    let acfg = AblationConfig { seeds: vec![2], lengths: vec![], ..Default::default() };
    let report = ablate(&fb, &ds, &quick(0), &acfg).unwrap();
    assert_eq!(report.cells.len(), 4);
    let plain = RunConfig { tree_enabled: false, modules_enabled: false, ..quick(2) };
    let (solo, _) = tune(&fb, &ds, &plain, None).unwrap();
    let cell = report.runs.iter().find(|r| r.variant == "continuous").unwrap();
    assert_eq!(cell.step_losses, solo.step_losses);
    assert_eq!(cell.test_accuracy, solo.test_accuracy);
    assert_eq!(solo.tuned_parameters, 4 * 16);
}

#[test]
fn convergence_of_identical_runs() {
    let ds = common::small_dataset(0, [20, 24, 8, 8, 8]);
    let fb = common::random_backbone::<f32>(&ds, 1);
    let (a, _) = tune(&fb, &ds, &quick(5), None).unwrap();
    let log = log_convergence(&a, &a, 2).unwrap();
    assert_eq!(log.loss_a, log.loss_b);
    assert_eq!(log.steps_a, log.steps_b);
    let (la, lb) = ConvergenceLog::parse_csv(&log.to_csv()).unwrap();
    assert_eq!((la, lb), (log.loss_a.clone(), log.loss_b.clone()));
    let mut other = a.clone();
    other.config.lr_tree = 0.5;
    assert!(matches!(log_convergence(&a, &other, 2), Err(TrainError::Config(_))));
}

#[test]
fn prompt_checkpoints_cannot_carry_backbone_weights() {
    let ds = common::small_dataset(0, [20, 4, 4, 4, 4]);
    let fb = common::random_backbone::<f32>(&ds, 1);
    let mut model = PromptedModel::build(&fb, &quick(0), None).unwrap();
    let mut rogue = ParamStore::<f32>::new();
    let (_, name, t) = fb.store.iter().next().unwrap();
    rogue.insert(name, t.clone()).unwrap();
    assert!(matches!(model.load_prompt(&rogue), Err(TrainError::Config(_))));
    let mut unknown = ParamStore::<f32>::new();
    unknown.insert("tree.extra", Tensor32::zeros(&[1])).unwrap();
    assert!(matches!(model.load_prompt(&unknown), Err(TrainError::Config(_))));
    model.load_prompt(&model.prompt_store()).unwrap();
}

#[test]
fn word_vectors_fill_the_word_table() {
    let ds = common::small_dataset(0, [20, 4, 4, 4, 4]);
    let fb = common::random_backbone::<f32>(&ds, 1);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("glove.tpck");
    let words = vec!["red".to_string(), "square".to_string(), UNK.to_string()];
    let data: Vec<f32> = (0..3 * 8).map(|i| i as f32).collect();
    WordVectors { words, vectors: Tensor32::new(vec![3, 8], data).unwrap() }.save(&path).unwrap();

    let cfg = RunConfig { word_vectors: Some(path.clone()), ..quick(0) };
    let model = PromptedModel::build(&fb, &cfg, None).unwrap();
    let table = model.store.by_name("tree.emb.word").unwrap();
    let row = |w: &str| {
        let i = fb.vocab.words.id(w);
        table.data()[i * 8..(i + 1) * 8].to_vec()
    };
    assert_eq!(row("red"), (0..8).map(|i| i as f32).collect::<Vec<_>>());
    assert_eq!(row("square"), (8..16).map(|i| i as f32).collect::<Vec<_>>());
    // Words the file lacks take the <unk> row.
    assert_eq!(row("circle"), (16..24).map(|i| i as f32).collect::<Vec<_>>());

    let wide = RunConfig { d_w: 10, ..cfg };
    let err = PromptedModel::build(&fb, &wide, None).unwrap_err();
    assert!(matches!(err, TrainError::TreePrompt(TreePromptError::DimMismatch { expected: 10, found: 8 })), "{err}");
}
