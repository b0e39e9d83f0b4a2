use repsim::nn::{load_checkpoint, save_checkpoint, Activation, ModelConfig};
use repsim::toy::{train_toy_model, TaskData, TaskSpec};

fn task(train_steps: usize) -> TaskSpec {
    TaskSpec {
        vocab: 16,
        seq_len: 32,
        permutation_seed: 11,
        train_steps,
        batch_size: 8,
    }
}

fn config(activation: Activation) -> ModelConfig {
    ModelConfig {
        vocab: 16,
        width: 32,
        hidden: 128,
        depth: 3,
        activation,
    }
}

fn held_out_loss(activation: Activation, bound: f64) {
    let task = task(3000);
    let model = train_toy_model(&config(activation), &task, 5).unwrap();
    let train = model.final_train_loss.unwrap();
    let data = TaskData::generate(&task, 1000, 5).unwrap();
    let tokens = data.eval_tokens();
    let (eval, acc) = model.evaluate(&tokens, &task.target_map().apply(&tokens)).unwrap();
    assert!(train < bound, "{activation:?} train loss {train} >= {bound}");
    assert!(eval < bound, "{activation:?} held-out loss {eval} >= {bound}");
    assert_eq!(acc, 1.0);
}

#[test]
fn gelu_model_learns_the_permutation() {
    held_out_loss(Activation::GeluApprox, 0.1 * 16f64.ln());
}

#[test]
fn solu_model_learns_the_permutation() {
    held_out_loss(Activation::Solu, 0.2 * 16f64.ln());
}

#[test]
fn training_is_reproducible_through_checkpoints() {
    let task = task(60);
    let a = train_toy_model(&config(Activation::Solu), &task, 9).unwrap();
    let b = train_toy_model(&config(Activation::Solu), &task, 9).unwrap();
    assert_eq!(a, b);
    let c = train_toy_model(&config(Activation::Solu), &task, 10).unwrap();
    assert_ne!(a.embedding, c.embedding);

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.rsck");
    save_checkpoint(&a, &path).unwrap();
    let loaded = load_checkpoint(&path).unwrap();
    assert_eq!(loaded, a);
    let tokens = TaskData::generate(&task, 20, 1).unwrap().eval;
    assert_eq!(loaded.forward(tokens.view()).unwrap(), a.forward(tokens.view()).unwrap());
}
