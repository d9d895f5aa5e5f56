//! WebAssembly bindings for the static page in `www/`. Each export returns a
//! JSON document; the plain-Rust functions behind them are usable natively.

use serde_json::{json, Value};
use wasm_bindgen::prelude::*;

use resiter::data::{Dataset, Split, SyntheticKind, SyntheticSpec};
use resiter::nn::{build_model, ArchitectureConfig, Family, Mode, ShortcutKind, StageSpec};
use resiter::probes::{block_probes, drop_scan, taylor_residual_check, TAYLOR_SCALES};
use resiter::share_unroll::{activation_explosion_probe, build_shared_model, ShareBnMode, SharingSpec};
use resiter::train::{evaluate, train_epoch, Augment, LrStep, OptimizerState, TrainConfig};
use resiter::Result;

fn gratings(n_per_class: usize, classes: usize, size: usize, separation: f64, seed: u64, split: Split) -> Result<Dataset> {
    SyntheticSpec {
        kind: SyntheticKind::Gratings,
        n_per_class,
        class_count: classes,
        image_shape: [3, size, size],
        separation,
        seed,
    }
    .generate(split)
}

fn single_repr(input: [usize; 3], blocks: usize, channels: usize, classes: usize) -> ArchitectureConfig {
    let mut c = ArchitectureConfig::desk(Family::SingleRepr);
    c.input_shape = input;
    c.stages = vec![StageSpec { blocks, channels }];
    c.stem_channels = channels;
    c.num_classes = classes;
    c.shortcut = ShortcutKind::None;
    c
}

/// Per-depth activation norms at initialization of a three-stage model,
/// unshared and under each batch-norm mode of weight sharing.
pub fn explosion(seed: u64, blocks_per_stage: usize, share_from: usize) -> Result<Value> {
    let mut cfg = ArchitectureConfig::desk(Family::Original);
    cfg.input_shape = [3, 16, 16];
    for s in cfg.stages.iter_mut() {
        s.blocks = blocks_per_stage;
    }
    let data = gratings(2, 8, 16, 0.5, seed, Split::Train)?;
    let (x, _) = data.gather(&(0..16).collect::<Vec<_>>());
    let mut curves = Vec::new();
    let variants = [
        ("unshared", None),
        ("naive", Some(ShareBnMode::Naive)),
        ("unshared_stats", Some(ShareBnMode::UnsharedStats)),
        ("ubn_full", Some(ShareBnMode::UbnFull)),
    ];
    for (name, mode) in variants {
        let model = match mode {
            None => build_model(&cfg, seed)?,
            Some(m) => build_shared_model(
                &cfg,
                &SharingSpec {
                    share_from_block: vec![share_from],
                    bn_mode: m,
                    gamma_init_shared: if m == ShareBnMode::UbnFull { 0.1 } else { 1.0 },
                },
                seed,
            )?,
        };
        let rep = activation_explosion_probe(&model, &x, Mode::Train, &[share_from])?;
        curves.push(json!({
            "name": name,
            "norms": rep.norms,
            "growth_factor": rep.growth_factor,
            "trainable": model.trainable_count(),
        }));
    }
    Ok(json!({ "blocks_per_stage": blocks_per_stage, "share_from": share_from, "curves": curves }))
}

/// Taylor residuals R(s) of the loss downstream of `block` in a dense-stem
/// model at initialization, one curve per sample.
pub fn taylor(seed: u64, block: usize) -> Result<Value> {
    let cfg = single_repr([8, 1, 1], 4, 8, 3);
    let model = build_model(&cfg, seed)?;
    let data = SyntheticSpec {
        kind: SyntheticKind::Blobs,
        n_per_class: 4,
        class_count: 3,
        image_shape: [8, 1, 1],
        separation: 2.0,
        seed,
    }
    .generate(Split::Train)?;
    let (x, labels) = data.gather(&(0..data.len()).collect::<Vec<_>>());
    let rep = taylor_residual_check(&model, &x, &labels, block, &TAYLOR_SCALES)?;
    let samples: Vec<Value> = rep
        .samples
        .iter()
        .map(|s| json!({ "residuals": s.residuals, "slope": s.slope, "kinked": s.kinked }))
        .collect();
    Ok(json!({ "scales": rep.scales, "samples": samples }))
}

/// Trains a small single-representation model on synthetic gratings and
/// probes every block afterwards.
pub fn train_and_probe(seed: u64, epochs: usize) -> Result<Value> {
    let (size, classes) = (8, 4);
    let mut train = gratings(40, classes, size, 0.6, seed, Split::Train)?;
    let norm = train.standardize();
    let mut val = gratings(20, classes, size, 0.6, seed, Split::Val)?;
    val.normalize_with(&norm);
    let mut model = build_model(&single_repr([3, size, size], 5, 8, classes), seed)?;
    let cfg = TrainConfig {
        epochs,
        batch_size: 16,
        momentum: 0.9,
        lr_schedule: vec![LrStep { until_epoch: None, lr: 0.05 }],
        augment: Augment::default(),
        seed,
    };
    let mut st = OptimizerState::new(model.params());
    let mut history = Vec::new();
    for e in 0..epochs {
        let m = train_epoch(&mut model, &train, &cfg, &mut st, e)?;
        let v = evaluate(&model, &val, 100)?;
        history.push(json!({
            "epoch": e + 1,
            "train_loss": m.train_loss,
            "train_acc": m.train_acc,
            "val_loss": v.loss,
            "val_acc": v.accuracy,
        }));
    }
    let probes = block_probes(&model, &train, 100)?;
    let drops = drop_scan(&model, &val, 100)?;
    let blocks: Vec<Value> = probes
        .iter()
        .zip(&drops)
        .map(|(p, d)| {
            json!({
                "block": p.block,
                "cosine": p.cosine_loss.mean,
                "l2_ratio": p.l2_ratio.mean,
                "drop_accuracy": d,
            })
        })
        .collect();
    Ok(json!({ "history": history, "blocks": blocks }))
}

fn to_js(r: Result<Value>) -> std::result::Result<String, JsValue> {
    r.map(|v| v.to_string()).map_err(|e| JsValue::from_str(&e.to_string()))
}

#[wasm_bindgen(js_name = explosionCurves)]
pub fn explosion_curves(seed: u32, blocks_per_stage: u32, share_from: u32) -> std::result::Result<String, JsValue> {
    to_js(explosion(seed as u64, blocks_per_stage as usize, share_from as usize))
}

#[wasm_bindgen(js_name = taylorResiduals)]
pub fn taylor_residuals(seed: u32, block: u32) -> std::result::Result<String, JsValue> {
    to_js(taylor(seed as u64, block as usize))
}

#[wasm_bindgen(js_name = trainAndProbe)]
pub fn train_and_probe_js(seed: u32, epochs: u32) -> std::result::Result<String, JsValue> {
    to_js(train_and_probe(seed as u64, epochs as usize))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn explosion_reports_every_mode() {
        let v = explosion(0, 4, 1).unwrap();
        let curves = v["curves"].as_array().unwrap();
        assert_eq!(curves.len(), 4);
        for c in curves {
            assert_eq!(c["norms"].as_array().unwrap().len(), 13);
        }
        assert!(explosion(0, 4, 9).is_err());
    }

    #[test]
    fn taylor_returns_one_curve_per_sample() {
        let v = taylor(1, 2).unwrap();
        assert_eq!(v["samples"].as_array().unwrap().len(), 12);
        assert_eq!(v["scales"].as_array().unwrap().len(), TAYLOR_SCALES.len());
    }

    #[test]
    fn train_and_probe_covers_every_block() {
        let v = train_and_probe(0, 2).unwrap();
        assert_eq!(v["history"].as_array().unwrap().len(), 2);
        assert_eq!(v["blocks"].as_array().unwrap().len(), 5);
    }
}
