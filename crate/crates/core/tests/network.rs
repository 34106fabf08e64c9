//! Network-level integration: gradient flow, checkpoint wiring, training
//! smoke behavior, and the f32 instantiation of the generic core.

use vmunet_core::checkpoint::{decode, encode, Checkpoint};
use vmunet_core::config::RunConfig;
use vmunet_core::data::synth_dataset;
use vmunet_core::loss::LossWeights;
use vmunet_core::net::{NetworkConfig, VmUnetBase};
use vmunet_core::tape::TapeBase;
use vmunet_core::train::{model_from_checkpoint, train};
use vmunet_core::{Rng, Tape, Tensor};

fn toy_net_config() -> NetworkConfig {
    NetworkConfig {
        base_channels: 4,
        encoder_depths: [1, 1, 1, 1],
        decoder_depths: [1, 1, 1, 1],
        state_dim: 2,
        input_size: 32,
        ..Default::default()
    }
}

#[test]
fn gradient_reaches_every_parameter() {
    let mut rng = Rng::seed_from(3);
    let model = VmUnetBase::<f64>::new(toy_net_config(), &mut rng).unwrap();
    let sample = &synth_dataset(1, 32, 1, 5).unwrap()[0];

    let mut tape = Tape::new();
    let mut drop_rng = Rng::seed_from(0);
    let fwd = model.forward(&mut tape, &sample.image, true, &mut drop_rng).unwrap();
    let flat = tape.reshape(fwd.logits, vec![32 * 32, 1]).unwrap();
    let loss = tape
        .bcedice(flat, &sample.mask_f64(), &LossWeights::default())
        .unwrap();
    let grads = tape.backward(loss).unwrap();

    for (def, &var) in model.param_defs().iter().zip(&fwd.param_vars) {
        let g = grads.get(var).unwrap();
        assert!(
            g.data().iter().any(|&v| v != 0.0),
            "parameter `{}` received an all-zero gradient",
            def.name
        );
    }
}

#[test]
fn vss_blocks_preserve_shape_through_the_network() {
    // The residual add inside every block enforces input == output shape;
    // a full forward over a non-square extent exercises all of them.
    let mut rng = Rng::seed_from(4);
    let model = VmUnetBase::<f64>::new(toy_net_config(), &mut rng).unwrap();
    let img = Tensor::uniform(vec![32, 64, 3], 0.0, 1.0, &mut rng);
    let logits = model.infer(&img).unwrap();
    assert_eq!(logits.shape(), &[32, 64, 1]);
}

#[test]
fn checkpoint_roundtrip_restores_inference() {
    let mut cfg = RunConfig::default();
    cfg.net = toy_net_config();
    let mut rng = Rng::seed_from(9);
    let model = VmUnetBase::<f64>::new(cfg.net.clone(), &mut rng).unwrap();
    let img = Tensor::uniform(vec![32, 32, 3], 0.0, 1.0, &mut rng);

    let ckpt = Checkpoint {
        config_text: cfg.to_canonical_text(),
        tensors: model.named_tensors(),
        optimizer: None,
    };
    let restored = decode(&encode(&ckpt).unwrap()).unwrap();
    let (_, loaded) = model_from_checkpoint(&restored).unwrap();

    // Parameters pass through f32 storage; logits agree to that precision.
    let a = model.infer(&img).unwrap();
    let b = loaded.infer(&img).unwrap();
    assert!(a.max_abs_diff(&b) < 1e-4, "diff {}", a.max_abs_diff(&b));
}

#[test]
fn loading_against_wrong_config_names_the_tensor() {
    let mut cfg = RunConfig::default();
    cfg.net = toy_net_config();
    let mut rng = Rng::seed_from(9);
    let model = VmUnetBase::<f64>::new(cfg.net.clone(), &mut rng).unwrap();
    let mut bigger = cfg.net.clone();
    bigger.base_channels = 8;
    let mut other = VmUnetBase::<f64>::new(bigger, &mut rng).unwrap();
    let err = other.load_named_tensors(model.named_tensors()).unwrap_err();
    let msg = err.to_string();
    assert!(msg.contains('`'), "error should name a tensor: {msg}");
}

#[test]
fn short_training_reduces_loss() {
    let mut cfg = RunConfig::default();
    cfg.net = toy_net_config();
    cfg.train.epochs = 6;
    cfg.train.batch_size = 4;
    cfg.train.t_max = 6;
    cfg.train.eval_every = 1;
    cfg.train.augment = false;
    let data = synth_dataset(4, 32, 1, 5).unwrap();
    let out = train(&cfg, &data, &[], 1, &mut |_| {}).unwrap();
    let losses: Vec<f64> = out
        .log
        .lines()
        .map(|l| {
            l.split_whitespace()
                .find_map(|kv| kv.strip_prefix("loss="))
                .unwrap()
                .parse()
                .unwrap()
        })
        .collect();
    assert!(losses.len() >= 2);
    assert!(
        losses.last().unwrap() < losses.first().unwrap(),
        "loss did not decrease: {losses:?}"
    );
}

#[test]
fn multi_class_training_and_evaluation_run() {
    let mut cfg = RunConfig::default();
    cfg.net = toy_net_config();
    cfg.net.num_classes = 3;
    cfg.train.epochs = 2;
    cfg.train.batch_size = 2;
    cfg.train.t_max = 2;
    cfg.train.eval_every = 1;
    let data = synth_dataset(2, 32, 3, 4).unwrap();
    let out = train(&cfg, &data, &[], 2, &mut |_| {}).unwrap();
    let last_line = out.log.lines().last().unwrap();
    for key in ["loss=", "dsc=", "hd95=", "acc=", "dsc_class1=", "dsc_class2="] {
        assert!(last_line.contains(key), "missing {key} in `{last_line}`");
    }
    // Predictions stay within the class range.
    let (_, model) = model_from_checkpoint(&out.best).unwrap();
    let logits = model.infer(&data[0].image).unwrap();
    assert_eq!(logits.shape(), &[32, 32, 3]);
    let mask = vmunet_core::train::predict_mask(&logits);
    assert!(mask.iter().all(|&v| v < 3));
}

#[test]
fn train_mode_without_dropout_matches_eval_mode() {
    let mut rng = Rng::seed_from(6);
    let mut cfg = toy_net_config();
    cfg.dropout_p = 0.0;
    let model = VmUnetBase::<f64>::new(cfg, &mut rng).unwrap();
    let img = Tensor::uniform(vec![32, 32, 3], 0.0, 1.0, &mut rng);

    let mut tape = Tape::new();
    let mut drop_rng = Rng::seed_from(1);
    let fwd = model.forward(&mut tape, &img, true, &mut drop_rng).unwrap();
    let train_logits = tape.value(fwd.logits).clone();
    let eval_logits = model.infer(&img).unwrap();
    assert_eq!(train_logits, eval_logits);
}

#[test]
fn f32_instantiation_runs_forward() {
    let mut rng = Rng::seed_from(2);
    let model = VmUnetBase::<f32>::new(toy_net_config(), &mut rng).unwrap();
    let img = vmunet_core::tensor::TensorBase::<f32>::uniform(vec![32, 32, 3], 0.0, 1.0, &mut rng);
    let mut tape = TapeBase::<f32>::new();
    let mut drop_rng = Rng::seed_from(0);
    let out = model.forward(&mut tape, &img, false, &mut drop_rng).unwrap();
    let logits = tape.value(out.logits);
    assert_eq!(logits.shape(), &[32, 32, 1]);
    assert!(logits.all_finite());
}
