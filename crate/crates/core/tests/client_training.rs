use std::time::Instant;

use fedgtea::client::{
    evaluate, local_train_round, local_train_round_prox, ClientConfig, ClientState,
};
use fedgtea::datakit::make_blobs;
use fedgtea::models::{ArchConfig, ClientModel, ImageShape};

fn setup(classes: usize) -> (ClientModel, ClientState, fedgtea::datakit::LabeledImageSet) {
    let model = ClientModel::new(ArchConfig::toy(ImageShape::TOY_GRAY, classes)).unwrap();
    let data = make_blobs(classes, 100, ImageShape::TOY_GRAY, 6.0, 11).unwrap();
    let mut state = ClientState::new(0);
    let all: Vec<usize> = (0..classes).collect();
    state.advance_task(&all, data.clone()).unwrap();
    (model, state, data)
}

fn toy_cfg(iters: usize) -> ClientConfig {
    ClientConfig {
        local_iterations: iters,
        lr: 1e-3,
        ..ClientConfig::default()
    }
}

#[test]
fn zero_iterations_return_the_global_model() {
    let (model, state, _) = setup(2);
    let g = model.init_params(3);
    let up = local_train_round(&model, &state, &g, &toy_cfg(0), 9).unwrap();
    assert!(up.params.bit_eq(&g));
    assert_eq!(up.num_examples, 200);
}

#[test]
fn same_seed_gives_bit_identical_updates() {
    let (model, state, _) = setup(2);
    let g = model.init_params(3);
    let a = local_train_round(&model, &state, &g, &toy_cfg(5), 9).unwrap();
    let b = local_train_round(&model, &state, &g, &toy_cfg(5), 9).unwrap();
    assert!(a.params.bit_eq(&b.params));
    let c = local_train_round(&model, &state, &g, &toy_cfg(5), 10).unwrap();
    assert!(!a.params.bit_eq(&c.params));
}

#[test]
fn two_blob_classes_are_learned() {
    let (model, state, data) = setup(2);
    let g = model.init_params(3);
    let t = Instant::now();
    let up = local_train_round(&model, &state, &g, &toy_cfg(200), 1).unwrap();
    let acc = evaluate(&model, &up.params, &data, &[0, 1], false).unwrap();
    eprintln!("train accuracy {acc:.3} in {:?}", t.elapsed());
    assert!(acc >= 0.9, "accuracy {acc}");
}

#[test]
fn proximal_term_zero_and_large() {
    let (model, state, _) = setup(2);
    let g = model.init_params(3);
    let cfg = toy_cfg(10);
    let plain = local_train_round(&model, &state, &g, &cfg, 4).unwrap();
    let mu0 = local_train_round_prox(&model, &state, &g, 0.0, &cfg, 4).unwrap();
    assert!(plain.params.bit_eq(&mu0.params));
    let big = local_train_round_prox(&model, &state, &g, 1e6, &cfg, 4).unwrap();
    let d_plain = plain.params.l2_distance(&g).unwrap();
    let d_big = big.params.l2_distance(&g).unwrap();
    assert!(d_big < d_plain, "{d_big} vs {d_plain}");
}

#[test]
fn update_serializes_only_parameters_and_count() {
    let (model, state, _) = setup(2);
    let g = model.init_params(3);
    let up = local_train_round(&model, &state, &g, &toy_cfg(1), 4).unwrap();
    let v: serde_json::Value = serde_json::to_value(&up).unwrap();
    let mut keys: Vec<&str> = v.as_object().unwrap().keys().map(String::as_str).collect();
    keys.sort_unstable();
    assert_eq!(keys, ["client_id", "num_examples", "params"]);
    assert_eq!(v["params"].as_array().unwrap().len(), model.param_count());
}
