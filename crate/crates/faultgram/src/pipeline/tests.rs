//! Pipeline tests: config parsing and overrides, then the staleness
//! machinery exercised through real (micro-scale) runs on temp directories.

use super::*;
use std::path::Path;

// ---------------------------------------------------------------------------
// config parsing
// ---------------------------------------------------------------------------

const MINIMAL: &str = r#"
[dataset]
root = "data"

[output]
run_dir = "runs/demo"
"#;

#[test]
fn minimal_config_materializes_defaults() {
    let config = parse_config(MINIMAL, &[]).unwrap();
    assert_eq!(config.dataset.root, "data");
    assert_eq!(config.output.run_dir, "runs/demo");
    // Defaults mirror the module configs and the published settings.
    assert_eq!(
        config.dataset.classes,
        ["healthy", "outer_race", "inner_race", "cage"]
    );
    assert_eq!(config.dataset.window_len, 1024);
    assert_eq!(config.dataset.sample_rate, 25_600.0);
    assert_eq!(config.encode.image_size, 64);
    assert_eq!(config.gan.lambda_gp, 10.0);
    assert_eq!(config.gan.critic_steps_per_gen, 5);
    assert_eq!(config.gan.adam_betas, (0.0, 0.9));
    assert_eq!(config.model.branch_kernels, [5, 7, 9]);
    assert_eq!(config.eval.tsne_perplexity, 30.0);
    assert!(config.train.augment);
    assert_eq!(config.train.stop_at_val_accuracy, None);
}

#[test]
fn effective_config_round_trips_through_toml() {
    let sets = ["train.stop_at_val_accuracy=0.95".to_string()];
    let config = parse_config(MINIMAL, &sets).unwrap();
    assert_eq!(config.train.stop_at_val_accuracy, Some(0.95));
    let echoed = parse_config(&config.to_toml(), &[]).unwrap();
    assert_eq!(echoed, config);
}

#[test]
fn set_overrides_parse_native_toml_types() {
    let sets = [
        "train.epochs=7".to_string(),
        "gan.learning_rate=2e-3".to_string(),
        "train.augment=false".to_string(),
        "dataset.channel=vertical".to_string(),
        "model.branch_kernels=[3, 5, 7]".to_string(),
    ];
    let config = parse_config(MINIMAL, &sets).unwrap();
    assert_eq!(config.train.epochs, 7);
    assert_eq!(config.gan.learning_rate, 2e-3);
    assert!(!config.train.augment);
    assert_eq!(config.dataset.channel, "vertical");
    assert_eq!(config.model.branch_kernels, [3, 5, 7]);
}

#[test]
fn set_override_rejects_unknown_keys_and_malformed_pairs() {
    // A typo in the key is caught by the strict final deserialize and the
    // error names the offending key.
    let err = parse_config(MINIMAL, &["train.epoch=7".to_string()]).unwrap_err();
    assert!(err.to_string().contains("epoch"), "{err}");
    assert_eq!(err.category(), "config");

    let err = parse_config(MINIMAL, &["gann.seed=1".to_string()]).unwrap_err();
    assert!(err.to_string().contains("gann"), "{err}");

    let err = parse_config(MINIMAL, &["train.epochs".to_string()]).unwrap_err();
    assert!(err.to_string().contains("key=value"), "{err}");

    // Type mismatches are config errors too, not panics.
    let err = parse_config(MINIMAL, &["train.epochs=soon".to_string()]).unwrap_err();
    assert_eq!(err.category(), "config");
}

#[test]
fn validation_errors_name_the_toml_key() {
    let cases = [
        ("output.run_dir=''", "output.run_dir"),
        ("dataset.channel=sideways", "dataset.channel"),
        ("dataset.window_len=1", "dataset.window_len"),
        ("dataset.train_fraction=0.9", "dataset"),
        ("encode.image_size=4096", "encode.image_size"),
        ("eval.tsne_perplexity=0.5", "eval.tsne_perplexity"),
    ];
    for (set, key) in cases {
        let err = parse_config(MINIMAL, &[set.to_string()]).unwrap_err();
        assert!(
            err.to_string().contains(key),
            "override {set:?} -> {err} (expected mention of {key})"
        );
    }
}

#[test]
fn duplicate_class_names_are_rejected() {
    let err = parse_config(
        MINIMAL,
        &["dataset.classes=['healthy', 'healthy']".to_string()],
    )
    .unwrap_err();
    assert!(err.to_string().contains("duplicate"), "{err}");
}

// ---------------------------------------------------------------------------
// stage runs on a temp directory
// ---------------------------------------------------------------------------

/// Micro-scale config: 4 classes x 8 windows of 256 samples, 16 px images,
/// tiny GAN and classifier. Sized so the full seven-stage chain stays in
/// test-suite territory.
fn micro_config(dir: &Path) -> PipelineConfig {
    let doc = format!(
        r#"
[dataset]
root = "{root}"
window_len = 256
stride = 256
sample_rate = 4096.0
split_seed = 11

[synth]
records_per_class = 1
duration_s = 0.5
shaft_hz = 40.0
resonance_hz = 900.0
decay = 400.0
seed = 77

[encode]
image_size = 16

[gan]
z_dim = 8
base_channels = 4
batch_size = 4
total_gen_steps = 3
critic_steps_per_gen = 2
samples_per_class = 3
seed = 5

[model]
wide_kernel = 5
wide_stride = 2
wide_filters = 4
branch_kernels = [3, 5, 7]
stage_filters = [4, 8]
se_reduction = 2

[train]
epochs = 2
batch_size = 8
lr = 1e-3
seed = 3

[eval]
tsne_perplexity = 2.2
tsne_seed = 4

[output]
run_dir = "{run}"
"#,
        root = dir.join("data").display(),
        run = dir.join("run").display(),
    );
    parse_config(&doc, &[]).unwrap()
}

fn read(path: &Path) -> Vec<u8> {
    std::fs::read(path).unwrap()
}

#[test]
fn synth_then_encode_produces_deterministic_artifacts() {
    let tmp = tempfile::tempdir().unwrap();
    let config = micro_config(tmp.path());
    let run_dir = Path::new(&config.output.run_dir).to_path_buf();

    let outcome = cmd_synth(&config).unwrap();
    assert_eq!(outcome.stage, STAGE_SYNTH);
    assert_eq!(outcome.manifest.outputs.len(), 4); // one record per class
    for class in &config.dataset.classes {
        assert!(tmp.path().join("data").join(class).join("1.csv").is_file());
    }
    let manifest_file = manifest_path(&run_dir, STAGE_SYNTH);
    let first = read(&manifest_file);
    cmd_synth(&config).unwrap();
    assert_eq!(first, read(&manifest_file), "synth rerun must be a no-op");

    let outcome = cmd_encode(&config).unwrap();
    // 0.5 s at 4096 Hz = 2048 samples = 8 windows/class; split 0.5/0.25/0.25
    // puts 4/2/2 of each class in train/val/test.
    let counts = &outcome.manifest.details["counts_per_class"];
    assert_eq!(counts["train"], serde_json::json!([4, 4, 4, 4]));
    assert_eq!(counts["val"], serde_json::json!([2, 2, 2, 2]));
    assert_eq!(counts["test"], serde_json::json!([2, 2, 2, 2]));
    assert_eq!(outcome.manifest.inputs.len(), 4);
    assert!(outcome.manifest.inputs.keys().all(|k| k.starts_with("file:")));

    let images = crate::gafenc::load_images(&run_dir.join("encoded/train.fgc")).unwrap();
    assert_eq!(images.len(), 16);
    assert_eq!(images[0].p(), 16);

    let manifest_file = manifest_path(&run_dir, STAGE_ENCODE);
    let first = read(&manifest_file);
    cmd_encode(&config).unwrap();
    assert_eq!(first, read(&manifest_file), "encode rerun must be a no-op");
}

#[test]
fn encode_without_data_names_the_config_key() {
    let tmp = tempfile::tempdir().unwrap();
    let config = micro_config(tmp.path());
    let err = cmd_encode(&config).unwrap_err();
    assert_eq!(err.category(), "config");
    assert!(err.to_string().contains("dataset.root"), "{err}");
}

#[test]
fn evaluate_before_training_reports_the_missing_stage() {
    let tmp = tempfile::tempdir().unwrap();
    let config = micro_config(tmp.path());
    cmd_synth(&config).unwrap();
    cmd_encode(&config).unwrap();
    let err = cmd_evaluate(&config).unwrap_err();
    assert_eq!(err.category(), "missing-artifact");
    assert!(err.to_string().contains(STAGE_TRAIN_CLASSIFIER), "{err}");
}

#[test]
fn config_drift_is_reported_as_stale() {
    let tmp = tempfile::tempdir().unwrap();
    let config = micro_config(tmp.path());
    cmd_synth(&config).unwrap();
    cmd_encode(&config).unwrap();

    // Any change to a config slice a stage depends on makes downstream
    // commands refuse the stored artifacts.
    let mut drifted = config.clone();
    drifted.dataset.split_seed += 1;
    let err = cmd_train_gan(&drifted).unwrap_err();
    assert_eq!(err.category(), "stale-artifact");
    assert!(err.to_string().contains(STAGE_ENCODE), "{err}");
}

#[test]
fn modified_artifacts_and_inputs_are_reported_as_stale() {
    let tmp = tempfile::tempdir().unwrap();
    let config = micro_config(tmp.path());
    let run_dir = Path::new(&config.output.run_dir).to_path_buf();
    cmd_synth(&config).unwrap();
    cmd_encode(&config).unwrap();

    // Tamper with an encoded output.
    let target = run_dir.join("encoded/train.fgc");
    let mut bytes = read(&target);
    bytes.push(0);
    std::fs::write(&target, &bytes).unwrap();
    let err = cmd_train_gan(&config).unwrap_err();
    assert_eq!(err.category(), "stale-artifact");
    assert!(err.to_string().contains("train.fgc"), "{err}");

    // Heal the output, then tamper with a raw input CSV.
    cmd_encode(&config).unwrap();
    let csv = tmp.path().join("data/healthy/1.csv");
    let mut text = std::fs::read_to_string(&csv).unwrap();
    text.push_str("0.5,0.5\n");
    std::fs::write(&csv, text).unwrap();
    let err = cmd_train_gan(&config).unwrap_err();
    assert_eq!(err.category(), "stale-artifact");
    assert!(err.to_string().contains("1.csv"), "{err}");
}

#[test]
fn full_micro_pipeline_runs_and_reruns_identically() {
    let tmp = tempfile::tempdir().unwrap();
    let config = micro_config(tmp.path());
    let run_dir = Path::new(&config.output.run_dir).to_path_buf();

    cmd_synth(&config).unwrap();
    cmd_encode(&config).unwrap();
    cmd_train_gan(&config).unwrap();
    let outcome = cmd_augment(&config).unwrap();
    assert_eq!(outcome.manifest.details["total"], 12); // 3 per class

    let outcome = cmd_train_classifier(&config).unwrap();
    assert_eq!(outcome.manifest.details["epochs"], 2);
    assert_eq!(outcome.manifest.details["real_train_images"], 16);
    assert_eq!(outcome.manifest.details["synthetic_train_images"], 12);

    let outcome = cmd_evaluate(&config).unwrap();
    let silhouettes = outcome.manifest.details["silhouettes"].as_object().unwrap();
    assert!(silhouettes.contains_key("initial") && silhouettes.contains_key("final"));

    let outcome = cmd_report(&config).unwrap();
    assert!(run_dir.join("report/report.json").is_file());
    assert!(run_dir.join("report/confusion.png").is_file());
    assert!(run_dir.join("report/tsne_final.csv").is_file());
    assert!(outcome.manifest.outputs.len() >= 8);

    // The evaluation document round-trips through the report stage: the
    // accuracy it stored matches what the renderer re-derived.
    let eval_doc: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(run_dir.join("eval/evaluation.json")).unwrap())
            .unwrap();
    let report_doc: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(run_dir.join("report/report.json")).unwrap())
            .unwrap();
    assert_eq!(eval_doc["accuracy"], report_doc["accuracy"]);
    assert_eq!(eval_doc["schema"], "faultgram-evaluation/1");

    // Rerunning every stage with the same config reproduces every manifest
    // (and therefore every artifact hash) byte for byte.
    let stages = [
        STAGE_SYNTH,
        STAGE_ENCODE,
        STAGE_TRAIN_GAN,
        STAGE_AUGMENT,
        STAGE_TRAIN_CLASSIFIER,
        STAGE_EVALUATE,
        STAGE_REPORT,
    ];
    let before: Vec<Vec<u8>> = stages
        .iter()
        .map(|s| read(&manifest_path(&run_dir, s)))
        .collect();
    cmd_synth(&config).unwrap();
    cmd_encode(&config).unwrap();
    cmd_train_gan(&config).unwrap();
    cmd_augment(&config).unwrap();
    cmd_train_classifier(&config).unwrap();
    cmd_evaluate(&config).unwrap();
    cmd_report(&config).unwrap();
    for (stage, old) in stages.iter().zip(&before) {
        assert_eq!(
            old,
            &read(&manifest_path(&run_dir, stage)),
            "{stage} manifest changed on rerun"
        );
    }
}

#[test]
fn ablation_changes_run_meta_but_reuses_the_encode_stage() {
    let tmp = tempfile::tempdir().unwrap();
    let config = micro_config(tmp.path());
    let run_dir = Path::new(&config.output.run_dir).to_path_buf();
    cmd_synth(&config).unwrap();
    cmd_encode(&config).unwrap();
    cmd_train_gan(&config).unwrap();
    cmd_augment(&config).unwrap();
    cmd_train_classifier(&config).unwrap();
    cmd_evaluate(&config).unwrap();
    let augmented: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(run_dir.join("eval/evaluation.json")).unwrap())
            .unwrap();

    // --no-augment is config sugar, so the downstream hashes all change
    // while the encode artifacts stay valid.
    let mut ablation = config.clone();
    ablation.train.augment = false;
    cmd_train_classifier(&ablation).unwrap();
    cmd_evaluate(&ablation).unwrap();
    let plain: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(run_dir.join("eval/evaluation.json")).unwrap())
            .unwrap();

    assert_ne!(
        augmented["run_meta"]["config_hash"], plain["run_meta"]["config_hash"],
        "ablation must be visible in run_meta"
    );
    // Same encode manifest feeds both runs.
    assert_eq!(
        augmented["run_meta"]["manifest_hash"],
        plain["run_meta"]["manifest_hash"]
    );
}

#[test]
fn gan_checkpoints_resume_and_extend_without_retraining() {
    let tmp = tempfile::tempdir().unwrap();
    let config = micro_config(tmp.path());
    let run_dir = Path::new(&config.output.run_dir).to_path_buf();
    cmd_synth(&config).unwrap();
    cmd_encode(&config).unwrap();
    cmd_train_gan(&config).unwrap();

    // Raising the step budget resumes: the per-step metrics of the first
    // run remain a prefix of the extended log.
    let short = std::fs::read_to_string(run_dir.join("gan/gan_class0_metrics.csv")).unwrap();
    let mut extended = config.clone();
    extended.gan.total_gen_steps += 2;
    cmd_train_gan(&extended).unwrap();
    let long = std::fs::read_to_string(run_dir.join("gan/gan_class0_metrics.csv")).unwrap();
    assert!(long.starts_with(&short), "extending must preserve the prefix");
    assert_eq!(
        long.lines().count(),
        short.lines().count() + 2,
        "two more generator steps, two more rows"
    );

    // Changing a true hyperparameter discards the checkpoints instead.
    let mut changed = extended.clone();
    changed.gan.seed += 1;
    let outcome = cmd_train_gan(&changed).unwrap();
    assert_eq!(
        outcome.manifest.details["per_class"][0]["gen_steps"],
        serde_json::json!(changed.gan.total_gen_steps)
    );
    let fresh = std::fs::read_to_string(run_dir.join("gan/gan_class0_metrics.csv")).unwrap();
    assert!(!fresh.starts_with(&short), "new seed must retrain from scratch");
}
