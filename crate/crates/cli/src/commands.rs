use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use evdet::consensus::{consensus_events, ConsensusConfig};
use evdet::eval::{calibrate_thresholds, evaluate};
use evdet::inference::{
    detect_record, read_detections, save_detections, DetectionThresholds, ModelDetector,
    RecordDetections,
};
use evdet::io::{
    read_annotations, read_record, read_split, save_annotations, write_record, write_split,
};
use evdet::network::{read_checkpoint, write_checkpoint};
use evdet::synth::generate_dataset;
use evdet::train::{train, LabeledSet};
use evdet::types::normalize_record;
use evdet::{Annotation, DefaultGrid, DetectorModel, Error, Record, Result};
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;

pub const RECORD_EXT: &str = "dsr";
pub const RECORDS_DIR: &str = "records";
pub const ANNOTATIONS_FILE: &str = "annotations.jsonl";
pub const SPLIT_FILE: &str = "split.json";
pub const CHECKPOINT_FILE: &str = "model.dsm";
pub const TRAIN_LOG_FILE: &str = "train_log.csv";

/// What a checkpoint carries besides the weights.
#[derive(Debug, Clone, Serialize, Deserialize)]
struct ModelMetadata {
    grid: DefaultGrid,
    /// Annotation label of each network output label, in order.
    labels: Vec<u32>,
    epoch: usize,
}

fn record_path(dir: &Path, id: &str) -> PathBuf {
    dir.join(RECORDS_DIR).join(format!("{id}.{RECORD_EXT}"))
}

pub fn generate(cfg: &RunConfig, out_dir: &Path) -> Result<()> {
    let ds = generate_dataset(&cfg.synth, cfg.n_records, cfg.synth.seed)?;
    fs::create_dir_all(out_dir.join(RECORDS_DIR))?;
    for r in &ds.records {
        write_record(record_path(out_dir, &r.id), r)?;
    }
    save_annotations(out_dir.join(ANNOTATIONS_FILE), &ds.annotations)?;
    write_split(out_dir.join(SPLIT_FILE), &ds.split)?;
    log::info!(
        "wrote {} records to {}",
        ds.records.len(),
        out_dir.display()
    );
    Ok(())
}

/// Every record file directly inside `dir`, sorted by name.
fn record_files(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut files: Vec<PathBuf> = fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == RECORD_EXT))
        .collect();
    files.sort();
    Ok(files)
}

fn load_normalized(paths: &[PathBuf]) -> Result<Vec<Record>> {
    paths
        .iter()
        .map(|p| normalize_record(&read_record(p)?))
        .collect()
}

/// Records of `ids` from a data directory, normalised, with annotations
/// reduced to `labels`.
fn load_split(data_dir: &Path, ids: &[String], labels: &[u32]) -> Result<LabeledSet> {
    let paths: Vec<PathBuf> = ids.iter().map(|id| record_path(data_dir, id)).collect();
    for (id, p) in ids.iter().zip(&paths) {
        if !p.exists() {
            return Err(Error::MissingRecord(id.clone()));
        }
    }
    let anns: Vec<Annotation> = read_annotations(data_dir.join(ANNOTATIONS_FILE))?
        .iter()
        .map(|a| a.select_labels(labels))
        .collect();
    Ok(LabeledSet::new(load_normalized(&paths)?, &anns))
}

pub fn train_cmd(cfg: &RunConfig, data_dir: &Path, out_dir: &Path) -> Result<()> {
    let split = read_split(data_dir.join(SPLIT_FILE))?;
    let train_set = load_split(data_dir, &split.train, &cfg.labels)?;
    let validation = load_split(data_dir, &split.validation, &cfg.labels)?;
    let grid = cfg.grid.build()?;
    fs::create_dir_all(out_dir)?;
    let model = DetectorModel::<f32>::init(cfg.network, cfg.seed)?;
    let checkpoint = out_dir.join(CHECKPOINT_FILE);
    let (_, log) = train(
        model,
        &train_set,
        &validation,
        &grid,
        &cfg.loss,
        &cfg.train,
        |epoch, best| {
            let meta = ModelMetadata {
                grid: grid.clone(),
                labels: cfg.labels.clone(),
                epoch,
            };
            write_checkpoint(&checkpoint, best, serde_json::to_value(meta)?)
        },
    )?;
    log.save_csv(out_dir.join(TRAIN_LOG_FILE))?;
    log::info!("best epoch {} of {}", log.best_epoch, log.epochs.len());
    Ok(())
}

fn load_detector(path: &Path) -> Result<(ModelDetector, Vec<u32>)> {
    let (model, header) = read_checkpoint(path)?;
    let meta: ModelMetadata = serde_json::from_value(header.metadata)
        .map_err(|e| Error::MalformedHeader(format!("checkpoint metadata: {e}")))?;
    if meta.labels.len() != model.config.labels {
        return Err(Error::MalformedHeader(
            "label list does not match the network".into(),
        ));
    }
    Ok((ModelDetector::new(model, meta.grid)?, meta.labels))
}

/// Thresholds keyed by annotation label, as written to disk.
#[derive(Debug, Serialize, Deserialize)]
struct ThresholdFile {
    delta: f64,
    theta: std::collections::BTreeMap<u32, f64>,
    /// Mean validation F1 at each grid value, per annotation label.
    curves: std::collections::BTreeMap<u32, Vec<(f64, f64)>>,
}

pub fn calibrate(
    cfg: &RunConfig,
    checkpoint: &Path,
    data_dir: &Path,
    delta: f64,
    out: &Path,
) -> Result<()> {
    let (detector, labels) = load_detector(checkpoint)?;
    let ids = match read_split(data_dir.join(SPLIT_FILE)) {
        Ok(split) => split.validation,
        Err(Error::Io(_)) => record_files(&data_dir.join(RECORDS_DIR))?
            .iter()
            .filter_map(|p| p.file_stem().map(|s| s.to_string_lossy().into_owned()))
            .collect(),
        Err(e) => return Err(e),
    };
    let validation = load_split(data_dir, &ids, &labels)?;
    let cal = calibrate_thresholds(
        &detector,
        &validation,
        delta,
        &cfg.eval,
        cfg.detect.nms_iou,
        cfg.detect.stride,
    )?;
    let to_ann = |k: &u32| labels[*k as usize - 1];
    let file = ThresholdFile {
        delta,
        theta: cal
            .thresholds
            .theta
            .iter()
            .map(|(k, v)| (to_ann(k), *v))
            .collect(),
        curves: cal
            .curves
            .iter()
            .map(|(k, v)| (to_ann(k), v.clone()))
            .collect(),
    };
    fs::write(out, serde_json::to_string_pretty(&file)?)?;
    Ok(())
}

pub fn detect(
    cfg: &RunConfig,
    checkpoint: &Path,
    thresholds: &Path,
    inputs: &[PathBuf],
    out: &Path,
) -> Result<()> {
    let (detector, labels) = load_detector(checkpoint)?;
    let file: ThresholdFile = serde_json::from_str(&fs::read_to_string(thresholds)?)?;
    let mut theta = DetectionThresholds {
        theta: Default::default(),
    };
    for (k, ann_label) in labels.iter().enumerate() {
        let t =
            file.theta.get(ann_label).copied().ok_or_else(|| {
                Error::InvalidConfig(format!("no threshold for label {ann_label}"))
            })?;
        theta.theta.insert(k as u32 + 1, t);
    }
    let mut paths = Vec::new();
    for p in inputs {
        if p.is_dir() {
            paths.extend(record_files(p)?);
        } else {
            paths.push(p.clone());
        }
    }
    let mut results = Vec::with_capacity(paths.len());
    for p in &paths {
        let record = normalize_record(&read_record(p)?)?;
        let mut detections = detect_record(
            &detector,
            &record,
            &theta,
            cfg.detect.nms_iou,
            cfg.detect.stride,
        )?;
        for d in &mut detections {
            d.label = labels[d.label as usize - 1];
        }
        results.push(RecordDetections {
            record_id: record.id,
            detections,
        });
    }
    save_detections(out, &results)
}

pub fn evaluate_cmd(
    cfg: &RunConfig,
    detections: &Path,
    annotations: &Path,
    records: Option<&[String]>,
    out_dir: &Path,
) -> Result<()> {
    let preds = read_detections(detections)?;
    let mut anns = read_annotations(annotations)?;
    if let Some(ids) = records {
        anns.retain(|a| ids.contains(&a.record_id));
    }
    let report = evaluate(&preds, &anns, &cfg.labels, &cfg.eval.deltas)?;
    fs::create_dir_all(out_dir)?;
    let mut csv = std::io::BufWriter::new(fs::File::create(out_dir.join("metrics.csv"))?);
    report.write_csv(&mut csv)?;
    csv.flush()?;
    fs::write(
        out_dir.join("summary.json"),
        serde_json::to_string_pretty(&report.summary_json())?,
    )?;
    let mut table = std::io::BufWriter::new(fs::File::create(out_dir.join("f1_vs_delta.csv"))?);
    report.write_f1_table(&mut table)?;
    table.flush()?;
    Ok(())
}

pub fn consensus(
    cfg: &RunConfig,
    files: &[PathBuf],
    kappa: f64,
    resolution: Option<f64>,
    duration: Option<f64>,
    out: &Path,
) -> Result<()> {
    let scorers: Vec<Vec<Annotation>> =
        files.iter().map(read_annotations).collect::<Result<_>>()?;
    let resolution = resolution.unwrap_or(1.0 / cfg.synth.sample_rate);
    let mut ids: Vec<String> = Vec::new();
    for a in scorers.iter().flatten() {
        if !ids.contains(&a.record_id) {
            ids.push(a.record_id.clone());
        }
    }
    let mut merged = Vec::with_capacity(ids.len());
    for id in ids {
        let per_scorer: Vec<Annotation> = scorers
            .iter()
            .map(|s| {
                s.iter()
                    .find(|a| a.record_id == id)
                    .cloned()
                    .unwrap_or_else(|| Annotation::empty(id.clone()))
            })
            .collect();
        let span = duration.unwrap_or_else(|| {
            per_scorer
                .iter()
                .flat_map(|a| a.events.iter().map(|e| e.end()))
                .fold(0.0, f64::max)
        });
        let steps = (span / resolution - 1e-9).ceil().max(0.0) as usize;
        let cc = ConsensusConfig { kappa, resolution };
        merged.push(consensus_events(&per_scorer, &cc, steps)?);
    }
    save_annotations(out, &merged)
}
