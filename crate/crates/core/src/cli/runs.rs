use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use super::config::{ExperimentConfig, ProbeSettings, Splits};
use super::{append_csv, create_dir, write_csv, write_file, METRICS_SCHEMA_VERSION, UNROLL_SCHEMA_VERSION};
use crate::autodiff::l2;
use crate::data::{batch_indices, Dataset, Split};
use crate::nn::{load_checkpoint, save_checkpoint, CheckpointHeader, Mode, Model};
use crate::probes::{
    block_probes, block_vectors, borderline_split, cosine, drop_scan, grad_norm_ratio, group_metric, intermediate_eval,
    Group, ProbeKind, ProbeRecord, ProbeRow, PROBES_SCHEMA_VERSION,
};
use crate::share_unroll::{activation_explosion_probe, unroll_last_block, ExplosionReport, SharingSpec, UnrollSpec};
use crate::train::{evaluate, train_epoch, OptimizerState};
use crate::{Error, Real, Result};

/// One line of `metrics.csv`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub schema_version: u32,
    pub epoch: usize,
    pub lr: Real,
    pub train_loss: Real,
    pub train_acc: Real,
    pub val_loss: Real,
    pub val_acc: Real,
    pub wall_seconds: Real,
}

/// One line of `unroll.csv`. Metrics of an empty group are left blank.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UnrollRow {
    pub schema_version: u32,
    pub step: usize,
    pub split: Split,
    pub group: Group,
    pub loss: Option<Real>,
    pub accuracy: Option<Real>,
    pub entropy: Option<Real>,
    pub cosine: Option<Real>,
    pub l2_ratio: Option<Real>,
}

/// Rows produced by one probe sweep and the probes skipped for structural reasons.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ProbeOutcome {
    pub rows: Vec<ProbeRow>,
    pub skipped: Vec<String>,
}

/// Contents of `summary.json`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub run_id: String,
    pub run_dir: PathBuf,
    pub epochs: usize,
    pub trainable_params: usize,
    pub running_stats: usize,
    pub final_metrics: Option<MetricsRow>,
    pub best_epoch: usize,
    pub best_val_acc: Real,
    pub probes_skipped: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sharing: Option<SharingSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub explosion_init: Option<ExplosionReport>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub explosion_final: Option<ExplosionReport>,
}

fn leading(data: &Dataset, max: Option<usize>) -> Dataset {
    match max {
        Some(k) if k < data.len() => data.subset(&(0..k).collect::<Vec<_>>()),
        _ => data.clone(),
    }
}

fn skip(skipped: &mut Vec<String>, reason: String) {
    eprintln!("probe skipped: {reason}");
    skipped.push(reason);
}

/// Runs every enabled probe on `data` (truncated to `settings.max_samples`).
/// Probes that do not apply to the architecture, or that are undefined on
/// this data, are skipped with a reason instead of failing the sweep.
pub fn collect_probes(
    model: &Model,
    data: &Dataset,
    settings: &ProbeSettings,
    run_id: &str,
    epoch: usize,
) -> Result<ProbeOutcome> {
    let data = leading(data, settings.max_samples);
    let bs = settings.batch_size;
    let mut enabled = settings.enabled.clone();
    enabled.sort_unstable();
    enabled.dedup();
    let on = |k| enabled.contains(&k);
    let mut out = ProbeOutcome::default();
    let n = model.num_blocks();
    let mut records: Vec<ProbeRecord> = (0..n)
        .map(|b| {
            Ok(ProbeRecord {
                block_index: b,
                stage_index: model.locate(b)?.0,
                split: data.split,
                cosine_loss: None,
                l2_ratio: None,
                drop_accuracy: None,
                intermediate_accuracy: None,
            })
        })
        .collect::<Result<_>>()?;

    if on(ProbeKind::CosineLoss) || on(ProbeKind::L2Ratio) {
        match block_probes(model, &data, bs) {
            Ok(bp) => {
                for (r, p) in records.iter_mut().zip(bp) {
                    r.cosine_loss = on(ProbeKind::CosineLoss).then_some(p.cosine_loss);
                    r.l2_ratio = on(ProbeKind::L2Ratio).then_some(p.l2_ratio);
                }
            }
            Err(e @ Error::ProbeUndefined(_)) => skip(&mut out.skipped, format!("cosine_loss/l2_ratio: {e}")),
            Err(e) => return Err(e),
        }
    }
    if on(ProbeKind::DropAccuracy) {
        for (r, acc) in records.iter_mut().zip(drop_scan(model, &data, bs)?) {
            r.drop_accuracy = Some(acc);
        }
    }
    if on(ProbeKind::IntermediateAccuracy) {
        let last = model.last_stage_blocks();
        if last.start > 0 {
            skip(
                &mut out.skipped,
                format!(
                    "intermediate_accuracy: blocks 0..{} lie outside the final stage; the classifier input shape differs",
                    last.start
                ),
            );
        }
        for (b, ev) in last.clone().zip(intermediate_eval(model, &data, last, bs)?) {
            records[b].intermediate_accuracy = Some(ev.accuracy);
        }
    }
    for r in &records {
        r.validate()?;
        out.rows.extend(r.to_rows(run_id, epoch));
    }
    if on(ProbeKind::GradNormRatio) {
        let idx: Vec<usize> = (0..data.len().min(bs)).collect();
        let (x, labels) = data.gather(&idx);
        match grad_norm_ratio(model, &x, &labels, Mode::Eval) {
            Ok(g) if g.vanished => skip(
                &mut out.skipped,
                "grad_norm_ratio: gradient at the last stage vanished".to_string(),
            ),
            Ok(g) => out.rows.push(ProbeRow {
                schema_version: PROBES_SCHEMA_VERSION,
                run_id: run_id.to_owned(),
                epoch,
                split: data.split,
                probe: ProbeKind::GradNormRatio,
                block: None,
                stage: None,
                value: g.ratio,
                n_excluded: 0,
            }),
            Err(e @ Error::ProbeUndefined(_)) => skip(&mut out.skipped, format!("grad_norm_ratio: {e}")),
            Err(e) => return Err(e),
        }
    }
    Ok(out)
}

fn build(cfg: &ExperimentConfig) -> Result<Model> {
    Model::build(&cfg.architecture, cfg.sharing.as_ref(), cfg.train.seed)
}

fn check_data(model: &Model, splits: &Splits) -> Result<()> {
    let want = model.config().input_shape;
    for ds in [&splits.train, &splits.val, &splits.test] {
        if ds.image_shape() != want {
            return Err(Error::Config(format!(
                "{} examples are {:?}, the architecture expects {want:?}",
                ds.split,
                ds.image_shape()
            )));
        }
        if ds.class_count > model.config().num_classes {
            return Err(Error::Config(format!(
                "{} has {} classes, the architecture has {} outputs",
                ds.split,
                ds.class_count,
                model.config().num_classes
            )));
        }
    }
    Ok(())
}

fn explosion(model: &Model, data: &Dataset, spec: &SharingSpec, batch: usize) -> Result<ExplosionReport> {
    let idx: Vec<usize> = (0..data.len().min(batch)).collect();
    let (x, _) = data.gather(&idx);
    activation_explosion_probe(model, &x, Mode::Eval, &spec.share_from_block)
}

/// Trains from scratch into `<out_root>/<run_id>`: `config.toml`,
/// `metrics.csv`, `probes.csv`, `summary.json`, `checkpoint_final.bin` and
/// `checkpoint_best.bin` (highest validation accuracy, earliest on ties).
pub fn run_train(cfg: &ExperimentConfig, out_root: &Path) -> Result<RunSummary> {
    train_impl(cfg, out_root, false)
}

/// As [`run_train`] for a config with a `sharing` section; the summary also
/// records activation growth across the shared span before and after training.
pub fn run_share_train(cfg: &ExperimentConfig, out_root: &Path) -> Result<RunSummary> {
    if cfg.sharing.is_none() {
        return Err(Error::Config("share-train needs a [sharing] section".into()));
    }
    train_impl(cfg, out_root, true)
}

fn train_impl(cfg: &ExperimentConfig, out_root: &Path, track_explosion: bool) -> Result<RunSummary> {
    cfg.validate()?;
    let run_dir = out_root.join(&cfg.run_id);
    if run_dir.exists() {
        return Err(Error::Config(format!(
            "{} already exists; run_id must be unique per output directory",
            run_dir.display()
        )));
    }
    let splits = cfg.data.load()?;
    let mut model = build(cfg)?;
    check_data(&model, &splits)?;
    create_dir(&run_dir)?;
    write_file(&run_dir.join("config.toml"), cfg.to_toml()?)?;

    let explosion_init = match (&cfg.sharing, track_explosion) {
        (Some(s), true) => Some(explosion(&model, &splits.train, s, cfg.train.batch_size)?),
        _ => None,
    };
    let probe_data = splits.get(cfg.probes.split);
    let mut state = OptimizerState::new(model.params());
    let mut metrics = Vec::with_capacity(cfg.train.epochs);
    let mut probe_rows = Vec::new();
    let mut skipped = Vec::new();
    let mut best: Option<(usize, Real, Model)> = None;
    for epoch in 0..cfg.train.epochs {
        let t0 = Instant::now();
        let m = train_epoch(&mut model, &splits.train, &cfg.train, &mut state, epoch)?;
        let ev = evaluate(&model, &splits.val, cfg.probes.batch_size)?;
        let row = MetricsRow {
            schema_version: METRICS_SCHEMA_VERSION,
            epoch: epoch + 1,
            lr: m.lr,
            train_loss: m.train_loss,
            train_acc: m.train_acc,
            val_loss: ev.loss,
            val_acc: ev.accuracy,
            wall_seconds: t0.elapsed().as_secs_f64() as Real,
        };
        eprintln!(
            "[{}] epoch {} lr {} train_loss {:.4} train_acc {:.4} val_loss {:.4} val_acc {:.4}",
            cfg.run_id, row.epoch, row.lr, row.train_loss, row.train_acc, row.val_loss, row.val_acc
        );
        if best.as_ref().is_none_or(|b| ev.accuracy > b.1) {
            best = Some((epoch + 1, ev.accuracy, model.clone()));
        }
        metrics.push(row);
        let done = epoch + 1;
        if !cfg.probes.enabled.is_empty() && (done % cfg.probes.every == 0 || done == cfg.train.epochs) {
            let o = collect_probes(&model, probe_data, &cfg.probes, &cfg.run_id, done)?;
            probe_rows.extend(o.rows);
            for s in o.skipped {
                if !skipped.contains(&s) {
                    skipped.push(s);
                }
            }
        }
    }
    write_csv(&run_dir.join("metrics.csv"), &metrics)?;
    write_csv(&run_dir.join("probes.csv"), &probe_rows)?;
    save_checkpoint(&model, cfg.train.epochs, &run_dir.join("checkpoint_final.bin"))?;
    let (best_epoch, best_val_acc) = match &best {
        Some((e, acc, m)) => {
            save_checkpoint(m, *e, &run_dir.join("checkpoint_best.bin"))?;
            (*e, *acc)
        }
        None => {
            save_checkpoint(&model, 0, &run_dir.join("checkpoint_best.bin"))?;
            (0, evaluate(&model, &splits.val, cfg.probes.batch_size)?.accuracy)
        }
    };
    let explosion_final = match (&cfg.sharing, track_explosion) {
        (Some(s), true) => Some(explosion(&model, &splits.train, s, cfg.train.batch_size)?),
        _ => None,
    };
    let count = cfg.architecture.parameter_count(cfg.sharing.as_ref())?;
    let summary = RunSummary {
        run_id: cfg.run_id.clone(),
        run_dir: run_dir.clone(),
        epochs: cfg.train.epochs,
        trainable_params: count.trainable,
        running_stats: count.running_stats,
        final_metrics: metrics.last().cloned(),
        best_epoch,
        best_val_acc,
        probes_skipped: skipped,
        sharing: cfg.sharing.clone(),
        explosion_init,
        explosion_final,
    };
    write_file(&run_dir.join("summary.json"), serde_json::to_string_pretty(&summary)?)?;
    Ok(summary)
}

fn load_for(checkpoint: &Path, cfg: &ExperimentConfig) -> Result<(Model, CheckpointHeader, Splits)> {
    cfg.validate()?;
    let (model, header) = load_checkpoint(checkpoint)?;
    let splits = cfg.data.load()?;
    check_data(&model, &splits)?;
    Ok((model, header, splits))
}

/// Probes a checkpoint on one split (default: the config's probe split) and
/// appends the rows to `<out_dir>/probes.csv`. With no probes enabled in the
/// config, every probe runs.
pub fn run_probe(checkpoint: &Path, cfg: &ExperimentConfig, split: Option<Split>, out_dir: &Path) -> Result<ProbeOutcome> {
    let (model, header, splits) = load_for(checkpoint, cfg)?;
    let mut settings = cfg.probes.clone();
    if settings.enabled.is_empty() {
        settings.enabled = ProbeKind::ALL.to_vec();
    }
    let data = splits.get(split.unwrap_or(settings.split));
    let out = collect_probes(&model, data, &settings, &cfg.run_id, header.epoch)?;
    create_dir(out_dir)?;
    append_csv(&out_dir.join("probes.csv"), &out.rows)?;
    Ok(out)
}

/// Accuracy with each block dropped in turn, one `drop_accuracy` row per
/// block, appended to `<out_dir>/probes.csv`.
pub fn run_drop_scan(checkpoint: &Path, cfg: &ExperimentConfig, split: Option<Split>, out_dir: &Path) -> Result<Vec<ProbeRow>> {
    let (model, header, splits) = load_for(checkpoint, cfg)?;
    let data = leading(splits.get(split.unwrap_or(cfg.probes.split)), cfg.probes.max_samples);
    let accs = drop_scan(&model, &data, cfg.probes.batch_size)?;
    let rows = accs
        .into_iter()
        .enumerate()
        .map(|(b, acc)| {
            Ok(ProbeRow {
                schema_version: PROBES_SCHEMA_VERSION,
                run_id: cfg.run_id.clone(),
                epoch: header.epoch,
                split: data.split,
                probe: ProbeKind::DropAccuracy,
                block: Some(b),
                stage: Some(model.locate(b)?.0),
                value: acc,
                n_excluded: 0,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    create_dir(out_dir)?;
    append_csv(&out_dir.join("probes.csv"), &rows)?;
    Ok(rows)
}

fn mean_over(values: &[Option<Real>], idx: &[usize]) -> Option<Real> {
    let used: Vec<Real> = idx.iter().filter_map(|&i| values[i]).collect();
    (!used.is_empty()).then(|| used.iter().sum::<Real>() / used.len() as Real)
}

/// Per-step metrics of the last block unrolled by `spec`: step 0 is the
/// block's trained application, step k its k-th extra one. Groups are fixed
/// by the original model's output on `data`; cosine and ℓ² ratio are
/// per-sample means over each group.
pub fn unroll_rows(
    model: &Model,
    spec: &UnrollSpec,
    calibration: &Dataset,
    data: &Dataset,
    tau: Real,
    batch_size: usize,
) -> Result<Vec<UnrollRow>> {
    let groups = borderline_split(model, data, tau, batch_size)?;
    let unrolled = unroll_last_block(model, spec, calibration, batch_size)?;
    let first = model.num_blocks() - 1;
    let steps = spec.extra_steps + 1;
    let evs = intermediate_eval(&unrolled, data, first..first + steps, batch_size)?;
    let mut cos = vec![Vec::with_capacity(data.len()); steps];
    let mut rat = vec![Vec::with_capacity(data.len()); steps];
    for idx in batch_indices(data.len(), batch_size, None) {
        let (x, labels) = data.gather(&idx);
        let v = block_vectors(&unrolled, &x, &labels)?;
        for k in 0..steps {
            let (h, f, g) = (&v.h[first + k], &v.f[first + k], &v.grad[first + k]);
            for i in 0..idx.len() {
                cos[k].push(cosine(f.row(i), g.row(i)));
                let nh = l2(h.row(i));
                rat[k].push((nh > 0.0).then(|| l2(f.row(i)) / nh));
            }
        }
    }
    let mut rows = Vec::with_capacity(steps * Group::ALL.len());
    for k in 0..steps {
        for g in Group::ALL {
            let idx = groups.get(g);
            let m = group_metric(&evs[k], &data.labels, idx);
            rows.push(UnrollRow {
                schema_version: UNROLL_SCHEMA_VERSION,
                step: k,
                split: data.split,
                group: g,
                loss: m.map(|m| m.loss),
                accuracy: m.map(|m| m.accuracy),
                entropy: m.map(|m| m.entropy),
                cosine: mean_over(&cos[k], idx),
                l2_ratio: mean_over(&rat[k], idx),
            });
        }
    }
    Ok(rows)
}

/// Unrolls a checkpoint's last block (spec from the config, else the
/// default), calibrating new steps on the train split, and writes
/// `<out_dir>/unroll.csv` measured on `split`.
pub fn run_unroll(checkpoint: &Path, cfg: &ExperimentConfig, split: Option<Split>, out_dir: &Path) -> Result<Vec<UnrollRow>> {
    let (model, _, splits) = load_for(checkpoint, cfg)?;
    let spec = cfg.unroll.unwrap_or_default();
    let data = leading(splits.get(split.unwrap_or(cfg.probes.split)), cfg.probes.max_samples);
    let rows = unroll_rows(&model, &spec, &splits.train, &data, cfg.probes.tau, cfg.probes.batch_size)?;
    create_dir(out_dir)?;
    write_csv(&out_dir.join("unroll.csv"), &rows)?;
    Ok(rows)
}
