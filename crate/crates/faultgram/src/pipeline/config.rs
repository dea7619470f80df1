//! The pipeline configuration file: one TOML document whose sections feed
//! each stage. Every hyperparameter has an explicit default here, so a
//! minimal config only names its run directory and dataset root, and the
//! effective (fully materialized) config is what gets snapshotted, hashed,
//! and compared for staleness.

use super::PipelineError;
use crate::augment::GanTrainConfig;
use crate::dataio::{BearingGeometry, Channel, SplitSpec};
use crate::macnn::{MacnnConfig, TrainConfig};
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};

fn config_err(key: &str, reason: impl Into<String>) -> PipelineError {
    PipelineError::Config {
        key: key.to_string(),
        reason: reason.into(),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetSection {
    /// Directory holding one subdirectory of CSV records per class.
    pub root: String,
    /// Class subdirectory names; the position is the label index.
    pub classes: Vec<String>,
    pub channel: String,
    pub window_len: usize,
    pub stride: usize,
    /// Hz. Always configured, never inferred from data files.
    pub sample_rate: f64,
    pub train_fraction: f64,
    pub val_fraction: f64,
    pub test_fraction: f64,
    pub split_seed: u64,
}

impl Default for DatasetSection {
    fn default() -> Self {
        DatasetSection {
            root: String::new(),
            classes: ["healthy", "outer_race", "inner_race", "cage"]
                .map(String::from)
                .to_vec(),
            channel: "horizontal".to_string(),
            window_len: 1024,
            stride: 1024,
            sample_rate: 25_600.0,
            train_fraction: 0.5,
            val_fraction: 0.25,
            test_fraction: 0.25,
            split_seed: 7,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthSection {
    pub records_per_class: usize,
    pub duration_s: f64,
    pub shaft_hz: f64,
    pub snr_db: f64,
    pub resonance_hz: f64,
    /// Impulse-response decay rate (1/s).
    pub decay: f64,
    pub seed: u64,
    pub ball_count: u32,
    pub ball_diameter_mm: f64,
    pub pitch_diameter_mm: f64,
    pub contact_angle_deg: f64,
}

impl Default for SynthSection {
    fn default() -> Self {
        let g = BearingGeometry::xjtu_ldk_uer204();
        SynthSection {
            records_per_class: 1,
            // 3.2 s at 25.6 kHz = 81,920 samples = 80 non-overlapping
            // 1024-sample windows per record.
            duration_s: 3.2,
            shaft_hz: 35.0,
            snr_db: 3.0,
            resonance_hz: 3000.0,
            decay: 800.0,
            seed: 1234,
            ball_count: g.ball_count,
            ball_diameter_mm: g.ball_diameter_mm,
            pitch_diameter_mm: g.pitch_diameter_mm,
            contact_angle_deg: g.contact_angle_deg,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EncodeSection {
    /// Side length P of the GADF images (PAA target length).
    pub image_size: usize,
}

impl Default for EncodeSection {
    fn default() -> Self {
        EncodeSection { image_size: 64 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GanSection {
    pub z_dim: usize,
    pub lambda_gp: f64,
    pub critic_steps_per_gen: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub adam_betas: (f64, f64),
    pub total_gen_steps: u64,
    pub base_channels: usize,
    pub seed: u64,
    /// Persist a checkpoint every this many generator steps (0 = at the
    /// end only).
    pub checkpoint_every: u64,
    /// Synthetic images drawn per class by the augment stage.
    pub samples_per_class: usize,
}

impl Default for GanSection {
    fn default() -> Self {
        let g = GanTrainConfig::default();
        GanSection {
            z_dim: g.z_dim,
            lambda_gp: g.lambda_gp,
            critic_steps_per_gen: g.critic_steps_per_gen,
            batch_size: g.batch_size,
            learning_rate: g.learning_rate,
            adam_betas: g.adam_betas,
            total_gen_steps: g.total_gen_steps,
            base_channels: g.base_channels,
            seed: 99,
            checkpoint_every: g.checkpoint_every,
            samples_per_class: 200,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    pub wide_kernel: usize,
    pub wide_stride: usize,
    pub wide_filters: usize,
    pub branch_kernels: [usize; 3],
    pub stage_filters: [usize; 2],
    pub se_reduction: usize,
    pub eca_gamma: f64,
    pub eca_b: f64,
}

impl Default for ModelSection {
    fn default() -> Self {
        let m = MacnnConfig::default();
        ModelSection {
            wide_kernel: m.wide_kernel,
            wide_stride: m.wide_stride,
            wide_filters: m.wide_filters,
            branch_kernels: m.branch_kernels,
            stage_filters: m.stage_filters,
            se_reduction: m.se_reduction,
            eca_gamma: m.eca_gamma,
            eca_b: m.eca_b,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    pub lr: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    /// Stop early once validation accuracy reaches this value.
    pub stop_at_val_accuracy: Option<f64>,
    /// Train on real + GAN images (the `--no-augment` flag overrides this).
    pub augment: bool,
}

impl Default for TrainSection {
    fn default() -> Self {
        let t = TrainConfig::default();
        TrainSection {
            lr: t.lr,
            batch_size: t.batch_size,
            epochs: t.epochs,
            seed: t.seed,
            stop_at_val_accuracy: None,
            augment: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSection {
    pub tsne_perplexity: f64,
    pub tsne_seed: u64,
}

impl Default for EvalSection {
    fn default() -> Self {
        EvalSection {
            tsne_perplexity: 30.0,
            tsne_seed: 5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct OutputSection {
    /// Directory receiving every artifact of this run.
    pub run_dir: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub dataset: DatasetSection,
    pub synth: SynthSection,
    pub encode: EncodeSection,
    pub gan: GanSection,
    pub model: ModelSection,
    pub train: TrainSection,
    pub eval: EvalSection,
    pub output: OutputSection,
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<(), PipelineError> {
        let d = &self.dataset;
        if self.output.run_dir.is_empty() {
            return Err(config_err("output.run_dir", "must be set"));
        }
        if d.classes.is_empty() {
            return Err(config_err("dataset.classes", "must name at least one class"));
        }
        for (i, a) in d.classes.iter().enumerate() {
            if a.is_empty() {
                return Err(config_err("dataset.classes", "class names must be nonempty"));
            }
            if d.classes[..i].contains(a) {
                return Err(config_err("dataset.classes", format!("duplicate class {a:?}")));
            }
        }
        self.channel()?;
        if d.window_len < 2 {
            return Err(config_err("dataset.window_len", "must be at least 2"));
        }
        if d.stride == 0 {
            return Err(config_err("dataset.stride", "must be at least 1"));
        }
        if !(d.sample_rate.is_finite() && d.sample_rate > 0.0) {
            return Err(config_err("dataset.sample_rate", "must be positive"));
        }
        self.split_spec()
            .validate()
            .map_err(|e| config_err("dataset.*_fraction", e.to_string()))?;
        if self.encode.image_size < 2 || self.encode.image_size > d.window_len {
            return Err(config_err(
                "encode.image_size",
                format!("must lie in [2, window_len = {}]", d.window_len),
            ));
        }
        self.gan_config(None)
            .validate()
            .map_err(|e| config_err("gan", e.to_string()))?;
        self.macnn_config()
            .validate()
            .map_err(|e| config_err("model", e.to_string()))?;
        if !(self.eval.tsne_perplexity.is_finite() && self.eval.tsne_perplexity > 1.0) {
            return Err(config_err("eval.tsne_perplexity", "must exceed 1"));
        }
        Ok(())
    }

    pub fn channel(&self) -> Result<Channel, PipelineError> {
        match self.dataset.channel.as_str() {
            "horizontal" => Ok(Channel::Horizontal),
            "vertical" => Ok(Channel::Vertical),
            other => Err(config_err(
                "dataset.channel",
                format!("{other:?} is not \"horizontal\" or \"vertical\""),
            )),
        }
    }

    pub fn split_spec(&self) -> SplitSpec {
        SplitSpec {
            train_fraction: self.dataset.train_fraction,
            val_fraction: self.dataset.val_fraction,
            test_fraction: self.dataset.test_fraction,
            seed: self.dataset.split_seed,
            stratified: true,
        }
    }

    pub fn geometry(&self) -> BearingGeometry {
        BearingGeometry {
            ball_count: self.synth.ball_count,
            ball_diameter_mm: self.synth.ball_diameter_mm,
            pitch_diameter_mm: self.synth.pitch_diameter_mm,
            contact_angle_deg: self.synth.contact_angle_deg,
        }
    }

    pub fn gan_config(&self, checkpoint_dir: Option<PathBuf>) -> GanTrainConfig {
        let g = &self.gan;
        GanTrainConfig {
            z_dim: g.z_dim,
            lambda_gp: g.lambda_gp,
            critic_steps_per_gen: g.critic_steps_per_gen,
            batch_size: g.batch_size,
            learning_rate: g.learning_rate,
            adam_betas: g.adam_betas,
            total_gen_steps: g.total_gen_steps,
            image_size: self.encode.image_size,
            base_channels: g.base_channels,
            seed: g.seed,
            checkpoint_every: g.checkpoint_every,
            checkpoint_dir,
        }
    }

    pub fn macnn_config(&self) -> MacnnConfig {
        let m = &self.model;
        MacnnConfig {
            input_size: self.encode.image_size,
            wide_kernel: m.wide_kernel,
            wide_stride: m.wide_stride,
            wide_filters: m.wide_filters,
            branch_kernels: m.branch_kernels,
            stage_filters: m.stage_filters,
            se_reduction: m.se_reduction,
            eca_gamma: m.eca_gamma,
            eca_b: m.eca_b,
            num_classes: self.dataset.classes.len(),
            ..MacnnConfig::default()
        }
    }

    pub fn train_config(&self, log_path: Option<PathBuf>) -> TrainConfig {
        let t = &self.train;
        TrainConfig {
            lr: t.lr,
            batch_size: t.batch_size,
            epochs: t.epochs,
            seed: t.seed,
            stop_at_val_accuracy: t.stop_at_val_accuracy,
            log_path,
        }
    }

    /// The effective config as a TOML snapshot (defaults materialized,
    /// overrides applied). Byte-deterministic for a given config value.
    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }
}

/// Apply one `key=value` override to a parsed TOML document. The value is
/// parsed as TOML, so strings need no quoting unless ambiguous. Typos are
/// caught downstream: the overridden document is deserialized strictly, so
/// an unknown key fails with the offending name.
fn apply_override(doc: &mut toml::Value, spec: &str) -> Result<(), PipelineError> {
    let (key, raw) = spec.split_once('=').ok_or_else(|| {
        config_err(spec, "override must look like section.key=value")
    })?;
    let (key, raw) = (key.trim(), raw.trim());

    // A bare value is not a TOML document; wrap it to parse, falling back
    // to a plain string (so --set dataset.channel=vertical works unquoted).
    let parsed: toml::Value = format!("v = {raw}")
        .parse::<toml::Table>()
        .map(|t| t["v"].clone())
        .unwrap_or_else(|_| toml::Value::String(raw.to_string()));

    let mut node = doc;
    let parts: Vec<&str> = key.split('.').collect();
    for (i, part) in parts.iter().enumerate() {
        let table = node
            .as_table_mut()
            .ok_or_else(|| config_err(key, format!("{} is not a table", parts[..i].join("."))))?;
        if i + 1 == parts.len() {
            // Insert rather than require presence: optional settings are
            // omitted from the materialized document when unset.
            table.insert(part.to_string(), parsed);
            return Ok(());
        }
        node = table
            .get_mut(*part)
            .ok_or_else(|| config_err(key, "no such section"))?;
    }
    unreachable!("split('.') yields at least one part")
}

/// Read a config file, apply `--set` overrides, and validate.
pub fn load_config(path: &Path, sets: &[String]) -> Result<PipelineConfig, PipelineError> {
    let text = std::fs::read_to_string(path).map_err(|e| PipelineError::Config {
        key: "config".to_string(),
        reason: format!("{}: {e}", path.display()),
    })?;
    parse_config(&text, sets)
}

/// `load_config` on an in-memory document.
pub fn parse_config(text: &str, sets: &[String]) -> Result<PipelineConfig, PipelineError> {
    // Parse loosely first so overrides can address keys the file omits:
    // defaults are materialized before override application.
    let sparse: PipelineConfig = toml::from_str(text)?;
    let mut doc: toml::Value = toml::Value::try_from(&sparse).expect("config re-serializes");
    for spec in sets {
        apply_override(&mut doc, spec)?;
    }
    let config: PipelineConfig = doc.try_into().map_err(PipelineError::from)?;
    config.validate()?;
    Ok(config)
}
