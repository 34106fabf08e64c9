//! Training loop: seeded shuffling, flip/rotation augmentation, per-sample
//! tapes with batch gradient averaging, AdamW under cosine annealing,
//! periodic evaluation, and best-checkpoint retention.
//!
//! RNG streams (init, shuffle, augment, dropout) are forked independently
//! from the master seed, so runs are byte-reproducible.

use std::collections::BTreeMap;

use crate::checkpoint::{Checkpoint, OptimizerState};
use crate::config::RunConfig;
use crate::data::SegmentationSample;
use crate::error::{Error, Result};
use crate::metrics::{confusion, dsc_per_class, hd95, metrics, ConfusionStats};
use crate::net::VmUnetBase;
use crate::optim::{cosine_lr, AdamW};
use crate::rng::Rng;
use crate::tensor::TensorBase;
use crate::{Tape, Tensor};

// ── augmentation ────────────────────────────────────────────────────────

fn permute_grid(image: &Tensor, mask: &[u8], f: impl Fn(usize, usize) -> (usize, usize), oh: usize, ow: usize) -> (Tensor, Vec<u8>) {
    let c = image.shape()[2];
    let w_in = image.shape()[1];
    let mut out_mask = vec![0u8; oh * ow];
    let out_img = TensorBase::from_fn(vec![oh, ow, c], |i| {
        let ch = i % c;
        let pix = i / c;
        let (r, col) = (pix / ow, pix % ow);
        let (sr, sc) = f(r, col);
        if ch == 0 {
            out_mask[pix] = mask[sr * w_in + sc];
        }
        image.data()[(sr * w_in + sc) * c + ch]
    });
    (out_img, out_mask)
}

pub fn hflip(image: &Tensor, mask: &[u8]) -> (Tensor, Vec<u8>) {
    let (h, w) = (image.shape()[0], image.shape()[1]);
    permute_grid(image, mask, |r, c| (r, w - 1 - c), h, w)
}

pub fn vflip(image: &Tensor, mask: &[u8]) -> (Tensor, Vec<u8>) {
    let (h, w) = (image.shape()[0], image.shape()[1]);
    permute_grid(image, mask, |r, c| (h - 1 - r, c), h, w)
}

/// 90-degree clockwise rotation; output is `[W,H,C]`.
pub fn rot90(image: &Tensor, mask: &[u8]) -> (Tensor, Vec<u8>) {
    let (h, w) = (image.shape()[0], image.shape()[1]);
    permute_grid(image, mask, |r, c| (h - 1 - c, r), w, h)
}

/// Random horizontal flip (p=0.5), vertical flip (p=0.5), and rotation by a
/// multiple of 90 degrees, applied identically to image and mask.
/// Non-square inputs restrict rotation to multiples of 180.
pub fn augment(image: &Tensor, mask: &[u8], rng: &mut Rng) -> (Tensor, Vec<u8>) {
    let square = image.shape()[0] == image.shape()[1];
    let do_h = rng.bernoulli(0.5);
    let do_v = rng.bernoulli(0.5);
    let quarter_turns = if square { rng.below(4) } else { 2 * rng.below(2) };
    let mut pair = (image.clone(), mask.to_vec());
    if do_h {
        pair = hflip(&pair.0, &pair.1);
    }
    if do_v {
        pair = vflip(&pair.0, &pair.1);
    }
    for _ in 0..quarter_turns {
        pair = rot90(&pair.0, &pair.1);
    }
    pair
}

// ── prediction and evaluation ───────────────────────────────────────────

/// Hard class map from logits. One channel: foreground iff `sigmoid > 0.5`
/// (a tie at exactly 0.5 stays background). Several: argmax, lowest index
/// winning ties.
pub fn predict_mask(logits: &Tensor) -> Vec<u8> {
    let k = *logits.shape().last().unwrap();
    let pixels = logits.numel() / k;
    if k == 1 {
        logits.data().iter().map(|&z| u8::from(z > 0.0)).collect()
    } else {
        (0..pixels)
            .map(|p| {
                let row = &logits.data()[p * k..(p + 1) * k];
                let mut best = 0usize;
                for (c, &v) in row.iter().enumerate() {
                    if v > row[best] {
                        best = c;
                    }
                }
                best as u8
            })
            .collect()
    }
}

/// Ordered `key=value` pairs of one evaluation over a sample set.
pub fn evaluate(model: &VmUnetBase<f64>, samples: &[SegmentationSample]) -> Result<Vec<(String, f64)>> {
    let k = model.config.num_classes;
    let mut out = Vec::new();
    if k == 1 {
        let mut stats = ConfusionStats::default();
        let mut hd_sum = 0.0;
        let mut hd_n = 0u32;
        for s in samples {
            let logits = model.infer(&s.image)?;
            let pred = predict_mask(&logits);
            let gt: Vec<u8> = s.mask.iter().map(|&v| u8::from(v != 0)).collect();
            stats = stats.merge(confusion(&pred, &gt)?);
            let d = hd95(&pred, &gt, s.height(), s.width(), 1.0)?;
            if d.is_finite() && (pred.iter().any(|&v| v != 0) || gt.iter().any(|&v| v != 0)) {
                hd_sum += d;
                hd_n += 1;
            }
        }
        let m = metrics(&stats);
        out.push(("miou".into(), m.miou));
        out.push(("dsc".into(), m.dsc));
        out.push(("acc".into(), m.acc));
        out.push(("spe".into(), m.spe));
        out.push(("sen".into(), m.sen));
        out.push(("miou_twoclass".into(), m.miou_twoclass));
        out.push(("hd95".into(), if hd_n > 0 { hd_sum / f64::from(hd_n) } else { 0.0 }));
    } else {
        let mut dsc_acc = vec![0.0f64; k];
        let mut correct = 0u64;
        let mut total = 0u64;
        let mut hd_sum = 0.0;
        let mut hd_n = 0u32;
        for s in samples {
            let logits = model.infer(&s.image)?;
            let pred = predict_mask(&logits);
            let per_class = dsc_per_class(&pred, &s.mask, k)?;
            for (acc, d) in dsc_acc.iter_mut().zip(&per_class) {
                *acc += d;
            }
            correct += pred.iter().zip(&s.mask).filter(|(p, g)| p == g).count() as u64;
            total += pred.len() as u64;
            for c in 1..k as u8 {
                let pm: Vec<u8> = pred.iter().map(|&v| u8::from(v == c)).collect();
                let gm: Vec<u8> = s.mask.iter().map(|&v| u8::from(v == c)).collect();
                if pm.iter().any(|&v| v != 0) && gm.iter().any(|&v| v != 0) {
                    hd_sum += hd95(&pm, &gm, s.height(), s.width(), 1.0)?;
                    hd_n += 1;
                }
            }
        }
        let n = samples.len() as f64;
        let fg_mean = dsc_acc[1..].iter().sum::<f64>() / ((k - 1) as f64 * n);
        out.push(("dsc".into(), fg_mean));
        out.push(("hd95".into(), if hd_n > 0 { hd_sum / f64::from(hd_n) } else { 0.0 }));
        out.push(("acc".into(), correct as f64 / total as f64));
        for (c, acc) in dsc_acc.iter().enumerate().skip(1) {
            out.push((format!("dsc_class{c}"), acc / n));
        }
    }
    Ok(out)
}

pub fn format_record(pairs: &[(String, f64)]) -> String {
    pairs
        .iter()
        .map(|(k, v)| format!("{k}={v:.6}"))
        .collect::<Vec<_>>()
        .join(" ")
}

// ── the loop ────────────────────────────────────────────────────────────

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub log: String,
    pub best: Checkpoint,
    pub last: Checkpoint,
    pub best_dsc: f64,
    pub steps: u64,
}

fn sample_loss(
    model: &VmUnetBase<f64>,
    cfg: &RunConfig,
    image: &Tensor,
    mask: &[u8],
    rng: &mut Rng,
) -> Result<(f64, Vec<Tensor>)> {
    let mut tape = Tape::new();
    let fwd = model.forward(&mut tape, image, true, rng)?;
    let k = cfg.net.num_classes;
    let pixels = tape.value(fwd.logits).numel() / k;
    let flat = tape.reshape(fwd.logits, vec![pixels, k])?;
    let loss = if k == 1 {
        let target: Vec<f64> = mask.iter().map(|&v| f64::from(v != 0)).collect();
        tape.bcedice(flat, &target, &cfg.train.weights)?
    } else {
        tape.cedice(flat, mask, &cfg.train.weights)?
    };
    let loss_value = tape.value(loss).item();
    if !loss_value.is_finite() {
        return Err(Error::Numeric(format!("loss became {loss_value}")));
    }
    let mut grads = tape.backward(loss)?;
    let per_param = fwd
        .param_vars
        .iter()
        .map(|&v| grads.take(v).expect("tracked parameter"))
        .collect();
    Ok((loss_value, per_param))
}

/// Train on `dataset`, evaluating every `eval_every` epochs (and at the end)
/// on the training set plus `val` when non-empty. The best checkpoint by
/// validation Dice (training Dice when `val` is empty) is retained.
pub fn train(
    cfg: &RunConfig,
    dataset: &[SegmentationSample],
    val: &[SegmentationSample],
    seed: u64,
    on_line: &mut dyn FnMut(&str),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if dataset.is_empty() {
        return Err(Error::Data("training dataset is empty".into()));
    }
    for (i, s) in dataset.iter().chain(val).enumerate() {
        if s.height() != cfg.net.input_size || s.width() != cfg.net.input_size {
            return Err(Error::Data(format!(
                "sample {i} (`{}`) is {}x{}, config expects {}",
                s.id,
                s.height(),
                s.width(),
                cfg.net.input_size
            )));
        }
    }

    let master = Rng::seed_from(seed);
    let mut init_rng = master.fork(1);
    let mut shuffle_rng = master.fork(2);
    let mut aug_rng = master.fork(3);
    let mut dropout_rng = master.fork(4);

    let mut model = VmUnetBase::<f64>::new(cfg.net.clone(), &mut init_rng)?;
    let shapes: Vec<Vec<usize>> = model
        .param_defs()
        .iter()
        .map(|d| d.shape.clone())
        .collect();
    let mut opt = AdamW::<f64>::new(&shapes, cfg.train.weight_decay);
    let sched = cfg.train.schedule();
    let config_text = cfg.to_canonical_text();

    let mut log = String::new();
    let mut best_dsc = f64::NEG_INFINITY;
    let mut best: Option<Checkpoint> = None;
    let mut steps = 0u64;

    for epoch in 0..cfg.train.epochs {
        let lr = cosine_lr(epoch, &sched);
        let mut order: Vec<usize> = (0..dataset.len()).collect();
        shuffle_rng.shuffle(&mut order);

        let mut loss_sum = 0.0;
        let mut loss_n = 0u32;
        for batch in order.chunks(cfg.train.batch_size) {
            let mut accum: Vec<Tensor> =
                shapes.iter().map(|s| Tensor::zeros(s.clone())).collect();
            for &i in batch {
                let s = &dataset[i];
                let (img, mask) = if cfg.train.augment {
                    augment(&s.image, &s.mask, &mut aug_rng)
                } else {
                    (s.image.clone(), s.mask.clone())
                };
                let (loss, grads) = sample_loss(&model, cfg, &img, &mask, &mut dropout_rng)
                    .map_err(|e| Error::Numeric(format!("sample {i} (`{}`): {e}", s.id)))?;
                loss_sum += loss;
                loss_n += 1;
                for (a, g) in accum.iter_mut().zip(&grads) {
                    let ad = a.data_mut();
                    for (x, &y) in ad.iter_mut().zip(g.data()) {
                        *x += y;
                    }
                }
            }
            let inv = 1.0 / batch.len() as f64;
            for a in accum.iter_mut() {
                for x in a.data_mut() {
                    *x *= inv;
                }
            }
            opt.step(model.param_values_mut(), &accum, lr)?;
            steps += 1;
        }

        let last_epoch = epoch + 1 == cfg.train.epochs;
        if (epoch + 1) % cfg.train.eval_every == 0 || last_epoch {
            let mut pairs = vec![
                ("epoch".to_string(), f64::from(epoch)),
                ("lr".to_string(), lr),
                ("loss".to_string(), loss_sum / f64::from(loss_n.max(1))),
            ];
            let train_metrics = evaluate(&model, dataset)?;
            let train_dsc = train_metrics
                .iter()
                .find(|(k, _)| k == "dsc")
                .map(|(_, v)| *v)
                .unwrap_or(0.0);
            pairs.extend(train_metrics);
            let mut select_dsc = train_dsc;
            if !val.is_empty() {
                let val_metrics = evaluate(&model, val)?;
                for (k, v) in val_metrics {
                    if k == "dsc" {
                        select_dsc = v;
                    }
                    pairs.push((format!("val_{k}"), v));
                }
            }
            let line = format_record(&pairs);
            on_line(&line);
            log.push_str(&line);
            log.push('\n');

            if select_dsc > best_dsc {
                best_dsc = select_dsc;
                best = Some(Checkpoint {
                    config_text: config_text.clone(),
                    tensors: model.named_tensors(),
                    optimizer: None,
                });
            }
        }
    }

    let names: Vec<String> = model.param_defs().iter().map(|d| d.name.clone()).collect();
    let (m, v) = opt.moments();
    let moment_map = |ts: &[Tensor]| -> BTreeMap<String, Tensor> {
        names.iter().cloned().zip(ts.iter().cloned()).collect()
    };
    let last = Checkpoint {
        config_text: config_text.clone(),
        tensors: model.named_tensors(),
        optimizer: Some(OptimizerState {
            step: opt.step,
            epoch: cfg.train.epochs,
            m: moment_map(m),
            v: moment_map(v),
        }),
    };
    let best = best.unwrap_or_else(|| last.clone());
    Ok(TrainOutcome { log, best, last, best_dsc, steps })
}

/// Rebuild a model from a checkpoint (config text + tensors).
pub fn model_from_checkpoint(ckpt: &Checkpoint) -> Result<(RunConfig, VmUnetBase<f64>)> {
    let cfg = RunConfig::parse(&ckpt.config_text)
        .map_err(|e| Error::Data(format!("checkpoint config: {e}")))?;
    let mut rng = Rng::seed_from(0);
    let mut model = VmUnetBase::<f64>::new(cfg.net.clone(), &mut rng)?;
    model.load_named_tensors(ckpt.tensors.clone())?;
    Ok((cfg, model))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::synth_dataset;

    fn tiny_cfg() -> RunConfig {
        let mut cfg = RunConfig::default();
        cfg.net.base_channels = 4;
        cfg.net.encoder_depths = [1, 1, 1, 1];
        cfg.net.decoder_depths = [1, 1, 1, 1];
        cfg.net.state_dim = 2;
        cfg.net.input_size = 32;
        cfg.train.epochs = 1;
        cfg.train.batch_size = 2;
        cfg.train.synth_samples = 2;
        cfg.train.synth_val_samples = 0;
        cfg
    }

    #[test]
    fn augment_identity_when_draws_are_identity() {
        // Find a seed whose three draws are (false, false, 0).
        let mut seed = 0u64;
        loop {
            let mut rng = Rng::seed_from(seed);
            if !rng.bernoulli(0.5) && !rng.bernoulli(0.5) && rng.below(4) == 0 {
                break;
            }
            seed += 1;
        }
        let mut rng = Rng::seed_from(seed);
        let img = Tensor::new(vec![2, 2, 3], (0..12).map(f64::from).collect()).unwrap();
        let mask = vec![0u8, 1, 1, 0];
        let (ai, am) = augment(&img, &mask, &mut rng);
        assert_eq!(ai, img);
        assert_eq!(am, mask);
    }

    #[test]
    fn double_hflip_is_identity() {
        let mut rng = Rng::seed_from(3);
        let img = Tensor::uniform(vec![3, 5, 3], 0.0, 1.0, &mut rng);
        let mask: Vec<u8> = (0..15).map(|i| (i % 2) as u8).collect();
        let (f1, m1) = hflip(&img, &mask);
        let (f2, m2) = hflip(&f1, &m1);
        assert_eq!(f2, img);
        assert_eq!(m2, mask);
    }

    #[test]
    fn rot90_two_by_two_permutation() {
        let img = Tensor::new(
            vec![2, 2, 1],
            vec![1.0, 2.0, 3.0, 4.0],
        )
        .unwrap();
        let mask = vec![1u8, 2, 3, 4];
        let (ri, rm) = rot90(&img, &mask);
        // Clockwise: [[1,2],[3,4]] -> [[3,1],[4,2]]
        assert_eq!(ri.data(), &[3.0, 1.0, 4.0, 2.0]);
        assert_eq!(rm, vec![3, 1, 4, 2]);
    }

    #[test]
    fn augment_on_non_square_input_preserves_extents() {
        let mut rng = Rng::seed_from(2);
        let img = Tensor::uniform(vec![2, 5, 3], 0.0, 1.0, &mut rng);
        let mask = vec![0u8; 10];
        for _ in 0..16 {
            let (ai, am) = augment(&img, &mask, &mut rng);
            assert_eq!(ai.shape(), &[2, 5, 3]);
            assert_eq!(am.len(), 10);
        }
    }

    #[test]
    fn augment_keeps_image_mask_correspondence() {
        let mut rng = Rng::seed_from(11);
        for _ in 0..8 {
            let mask: Vec<u8> = (0..16).map(|_| u8::from(rng.bernoulli(0.5))).collect();
            let img = TensorBase::from_fn(vec![4, 4, 3], |i| {
                if i % 3 == 0 {
                    f64::from(mask[i / 3])
                } else {
                    0.5
                }
            });
            let (ai, am) = augment(&img, &mask, &mut rng);
            for (pix, &mv) in am.iter().enumerate() {
                assert_eq!(ai.data()[pix * 3], f64::from(mv));
            }
        }
    }

    #[test]
    fn predict_mask_threshold_and_ties() {
        let logits = Tensor::new(vec![1, 3, 1], vec![0.2, -0.2, 0.0]).unwrap();
        assert_eq!(predict_mask(&logits), vec![1, 0, 0]); // tie -> background
        let multi = Tensor::new(vec![1, 2, 3], vec![0.0, 1.0, -1.0, 2.0, 2.0, 0.0]).unwrap();
        assert_eq!(predict_mask(&multi), vec![1, 0]); // argmax, tie -> lowest
    }

    #[test]
    fn zero_lr_leaves_params_bit_identical() {
        let mut cfg = tiny_cfg();
        cfg.train.lr = 0.0;
        cfg.train.eta_min = 0.0;
        let data = synth_dataset(2, 32, 2, 5).unwrap();
        let mut init = Rng::seed_from(42).fork(1);
        let reference = VmUnetBase::<f64>::new(cfg.net.clone(), &mut init).unwrap();
        let out = train(&cfg, &data, &[], 42, &mut |_| {}).unwrap();
        for (def, val) in reference.param_defs().iter().zip(reference.param_values()) {
            assert_eq!(&out.last.tensors[&def.name], val, "{}", def.name);
        }
    }

    #[test]
    fn fixed_seed_reproduces_log_and_checkpoints() {
        let cfg = tiny_cfg();
        let data = synth_dataset(2, 32, 2, 5).unwrap();
        let a = train(&cfg, &data, &[], 7, &mut |_| {}).unwrap();
        let b = train(&cfg, &data, &[], 7, &mut |_| {}).unwrap();
        assert_eq!(a.log, b.log);
        assert_eq!(
            crate::checkpoint::encode(&a.best).unwrap(),
            crate::checkpoint::encode(&b.best).unwrap()
        );
        assert_eq!(
            crate::checkpoint::encode(&a.last).unwrap(),
            crate::checkpoint::encode(&b.last).unwrap()
        );
    }

    #[test]
    fn rejects_wrong_sample_extent() {
        let cfg = tiny_cfg();
        let data = synth_dataset(2, 64, 2, 5).unwrap();
        let err = train(&cfg, &data, &[], 7, &mut |_| {}).unwrap_err();
        assert!(err.to_string().contains("sample 0"), "{err}");
    }
}
