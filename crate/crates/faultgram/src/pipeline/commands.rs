//! One function per CLI subcommand. Each command validates its config,
//! verifies the manifests of the stages it consumes, does its work, and
//! writes its own manifest into the run directory:
//!
//! ```text
//! <run_dir>/
//!   config.toml                  effective config of the last command run
//!   <stage>.manifest.json        one per completed stage
//!   encoded/{train,val,test}.fgc GADF image containers
//!   gan/gan_class<k>.fgc         one WGAN-GP checkpoint (+ metrics CSV) per class
//!   augmented/synthetic.fgc      generated images, plus fidelity.json
//!   classifier/checkpoint.fgc    trained classifier, plus history.csv
//!   eval/evaluation.json         metrics, confusion matrix, t-SNE projections
//!   report/                      plots, CSV tables, report.json
//! ```
//!
//! All outputs are deterministic functions of the config, so rerunning a
//! stage with the same config reproduces its artifacts byte for byte.

use super::manifest::{self, StageManifest, MANIFEST_SCHEMA};
use super::{PipelineConfig, PipelineError};
use crate::augment::{self, GanTrainConfig};
use crate::dataio::{
    load_xjtu_csv, segment_windows, stratified_split, synth_bearing_signal, FaultClass,
    SignalWindow, SyntheticSpec,
};
use crate::evalviz::{
    embed_with_params, evaluate_model, extract_embeddings, render_report, silhouette_score,
    tsne_project, ConfusionMatrix, EmbeddingProjection, EvalError, EvaluationReport,
    ProjectionStage, RunMeta,
};
use crate::gafenc::{encode_window, load_images, serialize_images, GafImage};
use crate::macnn::{
    load_classifier_checkpoint, save_classifier_checkpoint, train_classifier, MacnnParams,
};
use ndarray::Array2;
use serde::{Deserialize, Serialize};
use serde_json::json;
use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

pub const STAGE_SYNTH: &str = "synth";
pub const STAGE_ENCODE: &str = "encode";
pub const STAGE_TRAIN_GAN: &str = "train-gan";
pub const STAGE_AUGMENT: &str = "augment";
pub const STAGE_TRAIN_CLASSIFIER: &str = "train-classifier";
pub const STAGE_EVALUATE: &str = "evaluate";
pub const STAGE_REPORT: &str = "report";

/// What a completed stage hands back to the caller: a one-line summary for
/// the terminal plus the manifest it just wrote.
#[derive(Debug, Clone)]
pub struct StageOutcome {
    pub stage: &'static str,
    pub message: String,
    pub manifest: StageManifest,
}

// ---------------------------------------------------------------------------
// stage fingerprints
//
// A fingerprint hashes exactly the config slices a stage's output depends
// on, plus the fingerprints of the stages it consumes. Downstream commands
// recompute these from the live config and compare against the stored
// manifests, so any relevant config edit invalidates the whole chain below
// the stage it touches — and nothing else.
// ---------------------------------------------------------------------------

fn toml_of<T: Serialize>(value: &T) -> String {
    toml::to_string(value).expect("config section serializes")
}

fn fp_synth(config: &PipelineConfig) -> String {
    manifest::fingerprint(
        STAGE_SYNTH,
        &[&toml_of(&config.dataset), &toml_of(&config.synth)],
    )
}

fn fp_encode(config: &PipelineConfig) -> String {
    manifest::fingerprint(
        STAGE_ENCODE,
        &[&toml_of(&config.dataset), &toml_of(&config.encode)],
    )
}

fn fp_train_gan(config: &PipelineConfig) -> String {
    // `gan_config(None)` excludes `samples_per_class` (a generation-time
    // knob) and the checkpoint directory (a location, not a hyperparameter),
    // so changing those never forces retraining.
    let gan = serde_json::to_string(&config.gan_config(None)).expect("gan config serializes");
    manifest::fingerprint(STAGE_TRAIN_GAN, &[&gan, &fp_encode(config)])
}

fn fp_augment(config: &PipelineConfig) -> String {
    manifest::fingerprint(
        STAGE_AUGMENT,
        &[
            &config.gan.samples_per_class.to_string(),
            &fp_train_gan(config),
        ],
    )
}

fn fp_train_classifier(config: &PipelineConfig) -> String {
    let mut parts = vec![
        toml_of(&config.model),
        toml_of(&config.train),
        fp_encode(config),
    ];
    if config.train.augment {
        parts.push(fp_augment(config));
    }
    let refs: Vec<&str> = parts.iter().map(String::as_str).collect();
    manifest::fingerprint(STAGE_TRAIN_CLASSIFIER, &refs)
}

fn fp_evaluate(config: &PipelineConfig) -> String {
    manifest::fingerprint(
        STAGE_EVALUATE,
        &[
            &toml_of(&config.eval),
            &fp_train_classifier(config),
            &fp_encode(config),
        ],
    )
}

// ---------------------------------------------------------------------------
// shared plumbing
// ---------------------------------------------------------------------------

/// Create the run directory and snapshot the effective config into it.
fn prepare_run_dir(config: &PipelineConfig) -> Result<PathBuf, PipelineError> {
    let dir = PathBuf::from(&config.output.run_dir);
    std::fs::create_dir_all(&dir)?;
    std::fs::write(dir.join("config.toml"), config.to_toml())?;
    Ok(dir)
}

fn hash_outputs(
    run_dir: &Path,
    rels: &[String],
) -> Result<BTreeMap<String, String>, PipelineError> {
    rels.iter()
        .map(|rel| Ok((rel.clone(), manifest::hash_file(&run_dir.join(rel))?)))
        .collect()
}

fn finish_stage(
    run_dir: &Path,
    stage: &'static str,
    fingerprint: String,
    inputs: BTreeMap<String, String>,
    outputs: BTreeMap<String, String>,
    details: serde_json::Value,
    message: String,
) -> Result<StageOutcome, PipelineError> {
    let manifest = StageManifest {
        schema: MANIFEST_SCHEMA.to_string(),
        stage: stage.to_string(),
        fingerprint,
        inputs,
        outputs,
        details,
    };
    manifest::write_manifest(run_dir, &manifest)?;
    Ok(StageOutcome {
        stage,
        message,
        manifest,
    })
}

fn config_err(key: &str, reason: impl Into<String>) -> PipelineError {
    PipelineError::Config {
        key: key.to_string(),
        reason: reason.into(),
    }
}

// ---------------------------------------------------------------------------
// synth
// ---------------------------------------------------------------------------

/// XJTU-SY layout: a header naming both accelerometer channels, then one
/// sample per row. The synthesizer models a single sensor, so the same
/// trace fills both columns. `{}` prints the shortest round-tripping
/// decimal, so the loader recovers the exact bits.
fn write_xjtu_csv(path: &Path, samples: &[f64]) -> Result<(), PipelineError> {
    let mut out = String::with_capacity(24 * samples.len());
    out.push_str("Horizontal_vibration_signals,Vertical_vibration_signals\n");
    for v in samples {
        writeln!(out, "{v},{v}").expect("writing to a string cannot fail");
    }
    std::fs::write(path, out)?;
    Ok(())
}

/// Generate the synthetic dataset under `dataset.root`: one subdirectory
/// per class, `synth.records_per_class` CSV files each, in the same layout
/// the encode stage expects from real data.
pub fn cmd_synth(config: &PipelineConfig) -> Result<StageOutcome, PipelineError> {
    config.validate()?;
    let run_dir = prepare_run_dir(config)?;
    let root = PathBuf::from(&config.dataset.root);
    let s = &config.synth;
    if s.records_per_class == 0 {
        return Err(config_err("synth.records_per_class", "must be at least 1"));
    }

    let mut outputs = BTreeMap::new();
    let mut total = 0usize;
    for (label, class) in config.dataset.classes.iter().enumerate() {
        let fault: FaultClass = class.parse().map_err(|e: String| {
            config_err("dataset.classes", format!("cannot synthesize {class:?}: {e}"))
        })?;
        let class_dir = root.join(class);
        std::fs::create_dir_all(&class_dir)?;
        for r in 0..s.records_per_class {
            let spec = SyntheticSpec {
                geometry: config.geometry(),
                shaft_hz: s.shaft_hz,
                fault_class: fault,
                snr_db: s.snr_db,
                resonance_hz: s.resonance_hz,
                decay: s.decay,
                // Distinct stream per record, stable under reordering.
                seed: s.seed + (label * 1000 + r) as u64,
                duration_s: s.duration_s,
                sample_rate: config.dataset.sample_rate,
            };
            let record = synth_bearing_signal(&spec);
            let path = class_dir.join(format!("{}.csv", r + 1));
            write_xjtu_csv(&path, &record.samples)?;
            outputs.insert(path.display().to_string(), manifest::hash_file(&path)?);
            total += 1;
        }
    }

    let samples_per_record = (s.duration_s * config.dataset.sample_rate).round() as u64;
    let details = json!({
        "classes": config.dataset.classes,
        "records_per_class": s.records_per_class,
        "samples_per_record": samples_per_record,
    });
    let message = format!(
        "wrote {total} records ({} classes x {}) under {}",
        config.dataset.classes.len(),
        s.records_per_class,
        root.display()
    );
    finish_stage(
        &run_dir,
        STAGE_SYNTH,
        fp_synth(config),
        BTreeMap::new(),
        outputs,
        details,
        message,
    )
}

// ---------------------------------------------------------------------------
// encode
// ---------------------------------------------------------------------------

/// Load every CSV under the class directories, window, split, GADF-encode,
/// and write one image container per split.
pub fn cmd_encode(config: &PipelineConfig) -> Result<StageOutcome, PipelineError> {
    config.validate()?;
    let run_dir = prepare_run_dir(config)?;
    let d = &config.dataset;
    let root = PathBuf::from(&d.root);
    if !root.is_dir() {
        return Err(config_err(
            "dataset.root",
            format!("{} is not a directory", root.display()),
        ));
    }
    let channel = config.channel()?;

    let mut inputs = BTreeMap::new();
    let mut windows: Vec<SignalWindow> = Vec::new();
    let mut warnings: Vec<String> = Vec::new();
    for (label, class) in d.classes.iter().enumerate() {
        let class_dir = root.join(class);
        if !class_dir.is_dir() {
            return Err(config_err(
                "dataset.classes",
                format!("{} is not a directory", class_dir.display()),
            ));
        }
        let mut files: Vec<PathBuf> = std::fs::read_dir(&class_dir)?
            .filter_map(|entry| entry.ok().map(|e| e.path()))
            .filter(|p: &PathBuf| p.extension().is_some_and(|x| x == "csv"))
            .collect();
        files.sort();
        if files.is_empty() {
            return Err(config_err(
                "dataset.root",
                format!("no CSV files under {}", class_dir.display()),
            ));
        }
        for path in files {
            let loaded = load_xjtu_csv(&path, channel, d.sample_rate)?;
            warnings.extend(loaded.warnings);
            inputs.insert(
                format!("file:{}", path.display()),
                manifest::hash_file(&path)?,
            );
            windows.extend(segment_windows(
                &loaded.record,
                d.window_len,
                d.stride,
                label,
                class,
            )?);
        }
    }

    let (train, val, test) = stratified_split(&windows, &config.split_spec())?;
    std::fs::create_dir_all(run_dir.join("encoded"))?;

    let mut outputs = BTreeMap::new();
    let mut counts = serde_json::Map::new();
    let mut sizes = [0usize; 3];
    for (i, (split, set)) in [("train", &train), ("val", &val), ("test", &test)]
        .into_iter()
        .enumerate()
    {
        let images = set
            .iter()
            .map(|w| encode_window(w, config.encode.image_size))
            .collect::<Result<Vec<GafImage>, _>>()?;
        let rel = format!("encoded/{split}.fgc");
        let path = run_dir.join(&rel);
        serialize_images(&images, &path)?;
        outputs.insert(rel, manifest::hash_file(&path)?);

        let mut per_class = vec![0u64; d.classes.len()];
        for im in &images {
            per_class[im.label] += 1;
        }
        counts.insert(split.to_string(), json!(per_class));
        sizes[i] = images.len();
    }

    let details = json!({
        "classes": d.classes,
        "image_size": config.encode.image_size,
        "windows_total": windows.len(),
        "counts_per_class": counts,
        "warnings": warnings,
    });
    let message = format!(
        "encoded {} windows at {px}x{px} px (train {} / val {} / test {})",
        windows.len(),
        sizes[0],
        sizes[1],
        sizes[2],
        px = config.encode.image_size
    );
    finish_stage(
        &run_dir,
        STAGE_ENCODE,
        fp_encode(config),
        inputs,
        outputs,
        details,
        message,
    )
}

// ---------------------------------------------------------------------------
// train-gan
// ---------------------------------------------------------------------------

/// A checkpoint on disk may be resumed only if it was trained under the
/// same hyperparameters; a higher step budget is the one legitimate
/// difference (that is a request to train further). Anything else — or a
/// checkpoint already past the current budget — is discarded so training
/// restarts cleanly.
fn discard_unresumable_checkpoints(
    gan_dir: &Path,
    current: &GanTrainConfig,
    num_classes: usize,
) -> Result<(), PipelineError> {
    let neutral = |c: &GanTrainConfig| GanTrainConfig {
        total_gen_steps: 0,
        checkpoint_every: 0,
        checkpoint_dir: None,
        ..c.clone()
    };
    for label in 0..num_classes {
        let path = augment::checkpoint_path(gan_dir, label);
        if !path.exists() {
            continue;
        }
        let resumable = match augment::load_gan_checkpoint(&path) {
            Ok(ck) => {
                neutral(&ck.config) == neutral(current)
                    && ck.gen_step <= current.total_gen_steps
            }
            Err(_) => false, // unreadable: treat as stale
        };
        if !resumable {
            std::fs::remove_file(&path)?;
            let metrics = augment::metrics_path(gan_dir, label);
            if metrics.exists() {
                std::fs::remove_file(&metrics)?;
            }
        }
    }
    Ok(())
}

/// Train one WGAN-GP per class on the encoded training images, resuming
/// from any compatible checkpoints already in the run directory.
pub fn cmd_train_gan(config: &PipelineConfig) -> Result<StageOutcome, PipelineError> {
    config.validate()?;
    let run_dir = prepare_run_dir(config)?;
    let encode_fp = fp_encode(config);
    manifest::check_upstream(&run_dir, STAGE_ENCODE, &encode_fp)?;

    let train = load_images(&run_dir.join("encoded/train.fgc"))?;
    let gan_dir = run_dir.join("gan");
    std::fs::create_dir_all(&gan_dir)?;
    let gan_config = config.gan_config(Some(gan_dir.clone()));
    discard_unresumable_checkpoints(&gan_dir, &gan_config, config.dataset.classes.len())?;

    let checkpoints = augment::train_wgan_gp(&train, &gan_config)?;

    // Rewrite every artifact from the returned states: a resumed run that
    // was already complete takes no steps, and this keeps its outputs
    // freshly written (and byte-identical) anyway.
    let mut rels = Vec::new();
    let mut per_class = Vec::new();
    for ck in &checkpoints {
        augment::save_gan_checkpoint(ck, &augment::checkpoint_path(&gan_dir, ck.label))?;
        augment::write_metrics_csv(&augment::metrics_path(&gan_dir, ck.label), &ck.metrics)?;
        rels.push(format!("gan/gan_class{}.fgc", ck.label));
        rels.push(format!("gan/gan_class{}_metrics.csv", ck.label));
        per_class.push(json!({
            "label": ck.label,
            "class": ck.label_name,
            "gen_steps": ck.gen_step,
            "final_wasserstein_estimate": ck.metrics.last().map(|m| m.wasserstein_estimate),
        }));
    }

    let outputs = hash_outputs(&run_dir, &rels)?;
    let details = json!({ "per_class": per_class });
    let message = format!(
        "trained {} class GANs to {} generator steps",
        checkpoints.len(),
        config.gan.total_gen_steps
    );
    finish_stage(
        &run_dir,
        STAGE_TRAIN_GAN,
        fp_train_gan(config),
        BTreeMap::from([(STAGE_ENCODE.to_string(), encode_fp)]),
        outputs,
        details,
        message,
    )
}

// ---------------------------------------------------------------------------
// augment
// ---------------------------------------------------------------------------

/// Salt mixed into `gan.seed` for the sampling stream, so generated-image
/// draws never reuse latents seen during training.
const GENERATION_SEED_SALT: u64 = 0x67656e; // "gen"

/// Draw `gan.samples_per_class` images from each trained generator and
/// score their fidelity against the real training set.
pub fn cmd_augment(config: &PipelineConfig) -> Result<StageOutcome, PipelineError> {
    config.validate()?;
    let run_dir = prepare_run_dir(config)?;
    let encode_fp = fp_encode(config);
    let gan_fp = fp_train_gan(config);
    manifest::check_upstream(&run_dir, STAGE_ENCODE, &encode_fp)?;
    manifest::check_upstream(&run_dir, STAGE_TRAIN_GAN, &gan_fp)?;

    let n = config.gan.samples_per_class;
    if n == 0 {
        return Err(config_err("gan.samples_per_class", "must be at least 1"));
    }
    let gan_dir = run_dir.join("gan");
    let mut synthetic: Vec<GafImage> = Vec::with_capacity(n * config.dataset.classes.len());
    for label in 0..config.dataset.classes.len() {
        let ck = augment::load_gan_checkpoint(&augment::checkpoint_path(&gan_dir, label))?;
        let seed = config
            .gan
            .seed
            .wrapping_add(GENERATION_SEED_SALT)
            .wrapping_add(label as u64);
        synthetic.extend(augment::generate_samples(&ck, n, seed));
    }

    let real = load_images(&run_dir.join("encoded/train.fgc"))?;
    let fidelity = augment::fidelity_report(&real, &synthetic);

    std::fs::create_dir_all(run_dir.join("augmented"))?;
    serialize_images(&synthetic, &run_dir.join("augmented/synthetic.fgc"))?;
    let mut fidelity_text = serde_json::to_string_pretty(&fidelity)?;
    fidelity_text.push('\n');
    std::fs::write(run_dir.join("augmented/fidelity.json"), fidelity_text)?;

    let rels = vec![
        "augmented/synthetic.fgc".to_string(),
        "augmented/fidelity.json".to_string(),
    ];
    let outputs = hash_outputs(&run_dir, &rels)?;
    let details = json!({
        "samples_per_class": n,
        "total": synthetic.len(),
        "nn_rms_median_per_class": fidelity
            .classes
            .iter()
            .map(|c| json!({ "class": c.label_name, "nn_rms_median": c.nn_rms_median }))
            .collect::<Vec<_>>(),
    });
    let message = format!(
        "generated {} synthetic images ({n} per class)",
        synthetic.len()
    );
    finish_stage(
        &run_dir,
        STAGE_AUGMENT,
        fp_augment(config),
        BTreeMap::from([
            (STAGE_ENCODE.to_string(), encode_fp),
            (STAGE_TRAIN_GAN.to_string(), gan_fp),
        ]),
        outputs,
        details,
        message,
    )
}

// ---------------------------------------------------------------------------
// train-classifier
// ---------------------------------------------------------------------------

/// Train the classifier from scratch on the encoded training set — plus the
/// synthetic images when `train.augment` is set (the `--no-augment` flag is
/// shorthand for clearing it).
pub fn cmd_train_classifier(config: &PipelineConfig) -> Result<StageOutcome, PipelineError> {
    config.validate()?;
    let run_dir = prepare_run_dir(config)?;
    let encode_fp = fp_encode(config);
    manifest::check_upstream(&run_dir, STAGE_ENCODE, &encode_fp)?;
    let mut inputs = BTreeMap::from([(STAGE_ENCODE.to_string(), encode_fp)]);

    let mut train = load_images(&run_dir.join("encoded/train.fgc"))?;
    let val = load_images(&run_dir.join("encoded/val.fgc"))?;
    let real_count = train.len();
    let mut synthetic_count = 0usize;
    if config.train.augment {
        let augment_fp = fp_augment(config);
        manifest::check_upstream(&run_dir, STAGE_AUGMENT, &augment_fp)?;
        inputs.insert(STAGE_AUGMENT.to_string(), augment_fp);
        let synthetic = load_images(&run_dir.join("augmented/synthetic.fgc"))?;
        synthetic_count = synthetic.len();
        train.extend(synthetic);
    }

    std::fs::create_dir_all(run_dir.join("classifier"))?;
    let log_rel = "classifier/history.csv";
    let ck_rel = "classifier/checkpoint.fgc";
    let tcfg = config.train_config(Some(run_dir.join(log_rel)));
    let checkpoint = train_classifier(&train, &val, &config.macnn_config(), &tcfg, None)?;
    save_classifier_checkpoint(&checkpoint, &run_dir.join(ck_rel))?;

    let outputs = hash_outputs(&run_dir, &[ck_rel.to_string(), log_rel.to_string()])?;
    let details = json!({
        "epochs": checkpoint.epoch,
        "best_val_accuracy": checkpoint.best_val_accuracy,
        "real_train_images": real_count,
        "synthetic_train_images": synthetic_count,
        "augment": config.train.augment,
        "parameters": checkpoint.params.iter().map(|(_, a)| a.len()).sum::<usize>(),
    });
    let message = format!(
        "trained {} epochs on {} images ({} real + {} synthetic), best val accuracy {:.4}",
        checkpoint.epoch,
        real_count + synthetic_count,
        real_count,
        synthetic_count,
        checkpoint.best_val_accuracy
    );
    finish_stage(
        &run_dir,
        STAGE_TRAIN_CLASSIFIER,
        fp_train_classifier(config),
        inputs,
        outputs,
        details,
        message,
    )
}

// ---------------------------------------------------------------------------
// evaluate
// ---------------------------------------------------------------------------

const EVALUATION_SCHEMA: &str = "faultgram-evaluation/1";

/// On-disk form of an evaluation: everything the report stage needs to
/// re-render without touching model weights or test data.
#[derive(Debug, Serialize, Deserialize)]
struct EvaluationDoc {
    schema: String,
    accuracy: f64,
    per_class: Vec<PerClassDoc>,
    confusion: ConfusionDoc,
    run_meta: RunMetaDoc,
    projections: Vec<ProjectionDoc>,
    notices: Vec<String>,
}

#[derive(Debug, Serialize, Deserialize)]
struct PerClassDoc {
    class: String,
    support: u64,
    precision: Option<f64>,
    recall: Option<f64>,
}

#[derive(Debug, Serialize, Deserialize)]
struct ConfusionDoc {
    class_names: Vec<String>,
    /// Row = true class, column = predicted class.
    counts: Vec<Vec<u64>>,
}

#[derive(Debug, Serialize, Deserialize)]
struct RunMetaDoc {
    config_hash: String,
    seed: Option<u64>,
    manifest_hash: Option<String>,
}

#[derive(Debug, Serialize, Deserialize)]
struct ProjectionDoc {
    stage: String,
    perplexity: f64,
    seed: u64,
    silhouette: Option<f64>,
    labels: Vec<usize>,
    points: Vec<[f64; 2]>,
}

fn bad_evaluation(reason: impl Into<String>) -> PipelineError {
    PipelineError::Eval(EvalError::BadInput {
        reason: format!("evaluation.json: {}", reason.into()),
    })
}

impl EvaluationDoc {
    fn into_parts(self) -> Result<(EvaluationReport, Vec<EmbeddingProjection>), PipelineError> {
        if self.schema != EVALUATION_SCHEMA {
            return Err(bad_evaluation(format!(
                "schema {:?} is not {EVALUATION_SCHEMA:?}",
                self.schema
            )));
        }
        let k = self.confusion.class_names.len();
        if self.confusion.counts.len() != k
            || self.confusion.counts.iter().any(|row| row.len() != k)
        {
            return Err(bad_evaluation("confusion matrix is not square"));
        }
        let mut counts = Array2::zeros((k, k));
        for (i, row) in self.confusion.counts.iter().enumerate() {
            for (j, &v) in row.iter().enumerate() {
                counts[(i, j)] = v;
            }
        }
        let confusion = ConfusionMatrix {
            counts,
            class_names: self.confusion.class_names,
        };
        let run_meta = RunMeta {
            config_hash: self.run_meta.config_hash,
            seed: self.run_meta.seed,
            manifest_hash: self.run_meta.manifest_hash,
        };
        // Accuracy and per-class metrics are re-derived from the matrix;
        // they were stored for readers, not as independent state.
        let report = EvaluationReport::from_confusion(confusion, run_meta);

        let mut projections = Vec::with_capacity(self.projections.len());
        for p in self.projections {
            let stage = match p.stage.as_str() {
                "initial" => ProjectionStage::Initial,
                "final" => ProjectionStage::Final,
                other => {
                    return Err(bad_evaluation(format!("unknown projection stage {other:?}")))
                }
            };
            if p.labels.len() != p.points.len() {
                return Err(bad_evaluation(format!(
                    "{} projection has {} points but {} labels",
                    p.stage,
                    p.points.len(),
                    p.labels.len()
                )));
            }
            let mut points = Array2::zeros((p.points.len(), 2));
            for (i, [x, y]) in p.points.iter().enumerate() {
                points[(i, 0)] = *x;
                points[(i, 1)] = *y;
            }
            projections.push(EmbeddingProjection {
                points,
                labels: p.labels,
                stage,
                perplexity: p.perplexity,
                seed: p.seed,
            });
        }
        Ok((report, projections))
    }
}

/// Score the trained classifier on the test split and project its
/// embeddings (untrained and trained weights) with t-SNE.
pub fn cmd_evaluate(config: &PipelineConfig) -> Result<StageOutcome, PipelineError> {
    config.validate()?;
    let run_dir = prepare_run_dir(config)?;
    let encode_fp = fp_encode(config);
    let classifier_fp = fp_train_classifier(config);
    manifest::check_upstream(&run_dir, STAGE_ENCODE, &encode_fp)?;
    manifest::check_upstream(&run_dir, STAGE_TRAIN_CLASSIFIER, &classifier_fp)?;

    let test = load_images(&run_dir.join("encoded/test.fgc"))?;
    let checkpoint = load_classifier_checkpoint(&run_dir.join("classifier/checkpoint.fgc"))?;

    let mut report = evaluate_model(&checkpoint, &test)?;
    report.run_meta = RunMeta {
        config_hash: manifest::sha256_hex(config.to_toml().as_bytes()),
        seed: Some(config.train.seed),
        manifest_hash: Some(manifest::hash_file(&manifest::manifest_path(
            &run_dir,
            STAGE_ENCODE,
        ))?),
    };

    // Two embedding sets: fresh weights under the training seed (what the
    // classifier looked like before epoch 1) and the trained best weights.
    let labels: Vec<usize> = test.iter().map(|im| im.label).collect();
    let initial = MacnnParams::init(&config.macnn_config(), config.train.seed)?;
    let stages = [
        (ProjectionStage::Initial, embed_with_params(&initial, &test)?),
        (ProjectionStage::Final, extract_embeddings(&checkpoint, &test)?),
    ];

    let mut notices = Vec::new();
    let mut projections: Vec<(EmbeddingProjection, Option<f64>)> = Vec::new();
    for (stage, features) in stages {
        match tsne_project(
            &features,
            &labels,
            stage,
            config.eval.tsne_perplexity,
            config.eval.tsne_seed,
        ) {
            Ok(proj) => {
                let silhouette = silhouette_score(&proj.points, &proj.labels).ok();
                projections.push((proj, silhouette));
            }
            Err(EvalError::TooFewSamples { have, need }) => notices.push(format!(
                "t-SNE skipped for {stage} embeddings: {have} test samples, \
                 perplexity {} needs at least {need}; lower eval.tsne_perplexity",
                config.eval.tsne_perplexity
            )),
            Err(e) => return Err(e.into()),
        }
    }

    let doc = EvaluationDoc {
        schema: EVALUATION_SCHEMA.to_string(),
        accuracy: report.accuracy,
        per_class: report
            .per_class
            .iter()
            .map(|m| PerClassDoc {
                class: m.class.clone(),
                support: m.support,
                precision: m.precision,
                recall: m.recall,
            })
            .collect(),
        confusion: ConfusionDoc {
            class_names: report.confusion.class_names.clone(),
            counts: report
                .confusion
                .counts
                .rows()
                .into_iter()
                .map(|row| row.to_vec())
                .collect(),
        },
        run_meta: RunMetaDoc {
            config_hash: report.run_meta.config_hash.clone(),
            seed: report.run_meta.seed,
            manifest_hash: report.run_meta.manifest_hash.clone(),
        },
        projections: projections
            .iter()
            .map(|(proj, silhouette)| ProjectionDoc {
                stage: proj.stage.as_str().to_string(),
                perplexity: proj.perplexity,
                seed: proj.seed,
                silhouette: *silhouette,
                labels: proj.labels.clone(),
                points: proj
                    .points
                    .rows()
                    .into_iter()
                    .map(|row| [row[0], row[1]])
                    .collect(),
            })
            .collect(),
        notices: notices.clone(),
    };

    std::fs::create_dir_all(run_dir.join("eval"))?;
    let mut text = serde_json::to_string_pretty(&doc)?;
    text.push('\n');
    std::fs::write(run_dir.join("eval/evaluation.json"), text)?;

    let outputs = hash_outputs(&run_dir, &["eval/evaluation.json".to_string()])?;
    let silhouettes: serde_json::Map<String, serde_json::Value> = projections
        .iter()
        .map(|(proj, silhouette)| {
            (proj.stage.as_str().to_string(), json!(silhouette))
        })
        .collect();
    let details = json!({
        "accuracy": report.accuracy,
        "test_images": test.len(),
        "silhouettes": silhouettes,
        "notices": notices,
    });
    let message = format!(
        "test accuracy {:.4} over {} images",
        report.accuracy,
        test.len()
    );
    finish_stage(
        &run_dir,
        STAGE_EVALUATE,
        fp_evaluate(config),
        BTreeMap::from([
            (STAGE_ENCODE.to_string(), encode_fp),
            (STAGE_TRAIN_CLASSIFIER.to_string(), classifier_fp),
        ]),
        outputs,
        details,
        message,
    )
}

// ---------------------------------------------------------------------------
// report
// ---------------------------------------------------------------------------

/// Render the stored evaluation (plus the classifier's training history)
/// into plots, CSV tables, and a versioned report.json under `report/`.
pub fn cmd_report(config: &PipelineConfig) -> Result<StageOutcome, PipelineError> {
    config.validate()?;
    let run_dir = prepare_run_dir(config)?;
    let evaluate_fp = fp_evaluate(config);
    let classifier_fp = fp_train_classifier(config);
    manifest::check_upstream(&run_dir, STAGE_EVALUATE, &evaluate_fp)?;
    manifest::check_upstream(&run_dir, STAGE_TRAIN_CLASSIFIER, &classifier_fp)?;

    let text = std::fs::read_to_string(run_dir.join("eval/evaluation.json"))?;
    let doc: EvaluationDoc = serde_json::from_str(&text)?;
    let (report, projections) = doc.into_parts()?;
    let checkpoint = load_classifier_checkpoint(&run_dir.join("classifier/checkpoint.fgc"))?;

    let report_dir = run_dir.join("report");
    let written = render_report(&report, &projections, &checkpoint.history, &report_dir)?;

    let rels: Vec<String> = written
        .iter()
        .map(|path| {
            path.strip_prefix(&run_dir)
                .unwrap_or(path)
                .to_string_lossy()
                .into_owned()
        })
        .collect();
    let outputs = hash_outputs(&run_dir, &rels)?;
    let details = json!({
        "files": rels,
        "accuracy": report.accuracy,
    });
    let message = format!(
        "wrote {} report files under {}",
        rels.len(),
        report_dir.display()
    );
    finish_stage(
        &run_dir,
        STAGE_REPORT,
        manifest::fingerprint(STAGE_REPORT, &[&evaluate_fp, &classifier_fp]),
        BTreeMap::from([
            (STAGE_EVALUATE.to_string(), evaluate_fp),
            (STAGE_TRAIN_CLASSIFIER.to_string(), classifier_fp),
        ]),
        outputs,
        details,
        message,
    )
}
