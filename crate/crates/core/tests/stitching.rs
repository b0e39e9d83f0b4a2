use repsim::nn::{mean_preserving_rotation, Activation, ModelConfig, StepBatch, TinyModel, TrainRecipe};
use repsim::stitch::{stitch_sweep, train_stitch, StitchLayer, StitchSpec, SweepMode};
use repsim::toy::{train_population, PopulationSpec, TaskData, TaskSpec};

fn task() -> TaskSpec {
    TaskSpec {
        vocab: 10,
        seq_len: 8,
        permutation_seed: 2,
        train_steps: 400,
        batch_size: 8,
    }
}

fn config() -> ModelConfig {
    ModelConfig {
        vocab: 10,
        width: 8,
        hidden: 24,
        depth: 2,
        activation: Activation::GeluApprox,
    }
}

fn eval_batch(data: &TaskData, task: &TaskSpec) -> StepBatch {
    let tokens = data.eval_tokens();
    StepBatch {
        targets: task.target_map().apply(&tokens),
        tokens,
    }
}

#[test]
fn rotation_keeps_the_function_and_the_mean_direction() {
    let q = mean_preserving_rotation(8, 3);
    let ones = ndarray::Array1::<f64>::ones(8);
    assert!((q.dot(&ones) - &ones).iter().all(|v| v.abs() < 1e-12));
    let qtq = q.t().dot(&q);
    assert!((qtq - ndarray::Array2::<f64>::eye(8)).iter().all(|v| v.abs() < 1e-12));

    let f = TinyModel::new(config(), 4).unwrap();
    let g = f.rotate_residual(&q).unwrap();
    let data = TaskData::generate(&task(), 50, 1).unwrap();
    let (lf, lg) = (f.forward(data.eval.view()).unwrap(), g.forward(data.eval.view()).unwrap());
    assert!((lf - lg).iter().all(|v| v.abs() < 1e-9));
    // the residual basis itself did change
    let (rf, rg) = (
        f.forward_prefix(1, data.eval.view()).unwrap(),
        g.forward_prefix(1, data.eval.view()).unwrap(),
    );
    assert!((rf - rg).iter().any(|v| v.abs() > 1e-3));
}

#[test]
fn trained_connector_beats_its_initialisation_across_widths() {
    let task = task();
    let f = TinyModel::new(config(), 1).unwrap();
    let mut wide = config();
    wide.width = 12;
    let g = TinyModel::new(wide, 2).unwrap();
    let data = TaskData::generate(&task, 200, 3).unwrap();
    let map = task.target_map();
    let batches = data.batches(&map, task.batch_size, 3);
    let eval = eval_batch(&data, &task);
    let mut recipe = TrainRecipe::stitching(3);
    recipe.steps = 150;
    recipe.warmup_steps = 15;
    let spec = StitchSpec {
        f: &f,
        g: &g,
        l: 1,
        m: 1,
        connector: StitchLayer::affine_ln(8, 12),
        recipe,
    };
    let before = (f.clone(), g.clone());
    let report = train_stitch(&spec, &batches, &eval).unwrap();
    assert_eq!((f, g), before);
    assert_eq!(report.curve.len(), 150);
    let head: f64 = report.curve[..10].iter().sum::<f64>() / 10.0;
    let tail: f64 = report.curve[140..].iter().sum::<f64>() / 10.0;
    assert!(tail < head, "loss went from {head} to {tail}");
    assert!(report.trained);
    assert!(report.baselines.self_f.is_finite() && report.baselines.self_g.is_finite());
}

#[test]
fn identity_sweep_on_a_population_localizes_the_divergence() {
    let spec = PopulationSpec {
        model: ModelConfig {
            depth: 3,
            ..config()
        },
        task: task(),
        seed: 1,
        members_per_group: 1,
        frozen_blocks: 2,
        finetune_steps: 200,
        merge_group: 2,
    };
    let pop = train_population(&spec).unwrap();
    let a = &pop.group("A").next().unwrap();
    let b = &pop.group("B").next().unwrap();
    let tokens = pop.data.eval_tokens();
    let eval = StepBatch {
        targets: b.targets.apply(&tokens),
        tokens,
    };
    let map = b.targets.clone();
    let batches = pop.data.batches(&map, 8, 1);
    let pairs: Vec<(usize, usize)> = (0..=3).map(|t| (t, t)).collect();
    let entries = stitch_sweep(&a.model, &b.model, &pairs, &SweepMode::Identity, &batches, &eval);
    let penalties: Vec<f64> = entries.iter().map(|e| e.report.as_ref().unwrap().penalty).collect();
    // shared frozen prefix: stitching in front of block 2 reproduces the target model
    assert_eq!(&penalties[..3], &[0.0, 0.0, 0.0]);
    assert!(penalties[3] > 0.1, "{penalties:?}");
}
