//! Classifier training: cross-entropy minimization with Adam, per-epoch
//! validation, best-checkpoint retention, and resumable state.

use super::{forward_tensor, softmax, MacnnConfig, MacnnError, MacnnParams};
use crate::autodiff::{Adam, ParamSet, Tensor};
use crate::container::{self, NamedArray};
use crate::gafenc::GafImage;
use ndarray::{ArrayD, IxDyn};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::io::Write;
use std::path::{Path, PathBuf};

#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub lr: f64,
    pub batch_size: usize,
    /// Total epoch budget, counted from scratch (a resumed run continues
    /// until this total, not for this many more).
    pub epochs: usize,
    pub seed: u64,
    /// Stop early once validation accuracy reaches this level.
    pub stop_at_val_accuracy: Option<f64>,
    /// Where to write the per-epoch CSV log, if anywhere.
    pub log_path: Option<PathBuf>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 1e-3,
            batch_size: 32,
            epochs: 50,
            seed: 0,
            stop_at_val_accuracy: None,
            log_path: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochStats {
    pub train_loss: f64,
    pub val_loss: f64,
    pub val_accuracy: f64,
}

/// Snapshot of a training run: the state needed to resume exactly where it
/// stopped, plus the best-validation weights for inference.
pub struct ClassifierCheckpoint {
    pub config: MacnnConfig,
    /// Epochs completed; always equals `history.len()`.
    pub epoch: usize,
    pub best_val_accuracy: f64,
    pub history: Vec<EpochStats>,
    /// Parameter state after `epoch` epochs (the resume point).
    pub params: Vec<(String, ArrayD<f64>)>,
    /// Parameter state of the epoch that achieved `best_val_accuracy`
    /// (what inference should use).
    pub best: Vec<(String, ArrayD<f64>)>,
    pub opt_step: u64,
    pub opt_m: Vec<ArrayD<f64>>,
    pub opt_v: Vec<ArrayD<f64>>,
}

impl ClassifierCheckpoint {
    fn build(&self, arrays: &[(String, ArrayD<f64>)]) -> Result<MacnnParams, MacnnError> {
        let mut set = ParamSet::new();
        for (name, data) in arrays {
            set.add(name, data.clone());
        }
        Ok(MacnnParams {
            config: self.config.clone(),
            set,
        })
    }

    /// Parameters of the best-validation epoch, ready for inference.
    pub fn best_params(&self) -> Result<MacnnParams, MacnnError> {
        self.build(&self.best)
    }

    /// Parameters at the resume point.
    pub fn current_params(&self) -> Result<MacnnParams, MacnnError> {
        self.build(&self.params)
    }
}

fn snapshot(set: &ParamSet) -> Vec<(String, ArrayD<f64>)> {
    set.iter()
        .map(|p| (p.name().to_string(), p.tensor().data().clone()))
        .collect()
}

/// Average cross-entropy of `logits (n, k)` against integer labels,
/// computed through a numerically stable log-softmax.
pub fn cross_entropy(logits: &Tensor, labels: &[usize]) -> Result<Tensor, MacnnError> {
    let shape = logits.shape().to_vec();
    let (n, k) = (shape[0], shape[1]);
    assert_eq!(n, labels.len(), "one label per logit row");
    let mut onehot = ArrayD::zeros(IxDyn(&[n, k]));
    for (i, &y) in labels.iter().enumerate() {
        if y >= k {
            return Err(MacnnError::LabelOutOfRange {
                label: y,
                num_classes: k,
            });
        }
        onehot[[i, y]] = 1.0;
    }
    let mut rowmax = ArrayD::zeros(IxDyn(&[n, 1]));
    let data = logits.data();
    for i in 0..n {
        let mut m = f64::NEG_INFINITY;
        for j in 0..k {
            m = m.max(data[[i, j]]);
        }
        rowmax[[i, 0]] = m;
    }
    let shifted = logits - &Tensor::constant(rowmax).broadcast_to(&shape);
    let lse = shifted.exp().sum_axes(&[1], true).ln().broadcast_to(&shape);
    let logp = &shifted - &lse;
    let picked = (&logp * &Tensor::constant(onehot)).sum_axes(&[1], false);
    Ok(picked.mean_all().scale(-1.0))
}

fn check_labels(images: &[GafImage], num_classes: usize) -> Result<(), MacnnError> {
    for im in images {
        if im.label >= num_classes {
            return Err(MacnnError::LabelOutOfRange {
                label: im.label,
                num_classes,
            });
        }
    }
    Ok(())
}

/// Batch order for one epoch, a pure function of `(seed, epoch)` so a
/// resumed run replays the exact schedule of a straight one.
fn epoch_order(n: usize, seed: u64, epoch: usize) -> Vec<usize> {
    let mut rng =
        ChaCha8Rng::seed_from_u64(seed.wrapping_add((epoch as u64).wrapping_mul(0x9E3779B97F4A7C15)));
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    order
}

fn forward_loss(
    images: &[&GafImage],
    params: &MacnnParams,
) -> Result<(Tensor, usize), MacnnError> {
    let x = super::batch_from_refs(images, &params.config)?;
    let labels: Vec<usize> = images.iter().map(|im| im.label).collect();
    let (logits, _) = forward_tensor(&x, params)?;
    let loss = cross_entropy(&logits, &labels)?;
    let correct = count_correct(&logits, &labels);
    Ok((loss, correct))
}

fn count_correct(logits: &Tensor, labels: &[usize]) -> usize {
    let p = softmax(logits);
    let d = p.data();
    let k = logits.shape()[1];
    labels
        .iter()
        .enumerate()
        .filter(|&(i, &y)| (0..k).all(|j| d[[i, j]] <= d[[i, y]]))
        .count()
}

/// Train (or continue training) the classifier.
///
/// Each epoch shuffles the training set with a seed derived from
/// `(seed, epoch)`, takes one Adam step per batch, then scores the
/// validation set. The parameters of the best-validation epoch are retained
/// separately from the live ones, so the returned checkpoint supports both
/// exact resumption and best-weights inference.
pub fn train_classifier(
    train: &[GafImage],
    val: &[GafImage],
    config: &MacnnConfig,
    tcfg: &TrainConfig,
    resume: Option<ClassifierCheckpoint>,
) -> Result<ClassifierCheckpoint, MacnnError> {
    config.validate()?;
    if train.is_empty() || val.is_empty() {
        return Err(MacnnError::BadConfig {
            reason: "training and validation sets must be nonempty".to_string(),
        });
    }
    assert!(tcfg.batch_size > 0, "batch_size must be positive");
    check_labels(train, config.num_classes)?;
    check_labels(val, config.num_classes)?;

    let (params, mut adam, mut history, mut best, mut best_acc, start_epoch) = match resume {
        Some(ck) => {
            if &ck.config != config {
                return Err(MacnnError::BadConfig {
                    reason: "resume checkpoint was trained with a different config".to_string(),
                });
            }
            let params = ck.current_params()?;
            let mut adam = Adam::new(&params.set, tcfg.lr, 0.9, 0.999);
            adam.load_state(ck.opt_step, ck.opt_m.clone(), ck.opt_v.clone());
            (params, adam, ck.history, ck.best, ck.best_val_accuracy, ck.epoch)
        }
        None => {
            let params = MacnnParams::init(config, tcfg.seed)?;
            let adam = Adam::new(&params.set, tcfg.lr, 0.9, 0.999);
            let best = snapshot(&params.set);
            // -1.0 means "no validation yet"; any real accuracy beats it,
            // and unlike -inf it survives the JSON metadata round trip.
            (params, adam, Vec::new(), best, -1.0, 0)
        }
    };

    let val_refs: Vec<&GafImage> = val.iter().collect();
    for epoch in start_epoch..tcfg.epochs {
        let order = epoch_order(train.len(), tcfg.seed, epoch);
        let mut train_loss_sum = 0.0;
        for (batch_no, chunk) in order.chunks(tcfg.batch_size).enumerate() {
            let batch: Vec<&GafImage> = chunk.iter().map(|&i| &train[i]).collect();
            let (loss, _) = forward_loss(&batch, &params)?;
            let value = loss.item();
            if !value.is_finite() {
                return Err(MacnnError::NonFiniteLoss {
                    epoch,
                    batch: batch_no,
                });
            }
            train_loss_sum += value * batch.len() as f64;
            let grads = super::param_grads(&loss, &params.set);
            adam.step(&params.set, &grads);
        }

        let mut val_loss_sum = 0.0;
        let mut val_correct = 0;
        for chunk in val_refs.chunks(tcfg.batch_size) {
            let (loss, correct) = forward_loss(chunk, &params)?;
            val_loss_sum += loss.item() * chunk.len() as f64;
            val_correct += correct;
        }

        let stats = EpochStats {
            train_loss: train_loss_sum / train.len() as f64,
            val_loss: val_loss_sum / val.len() as f64,
            val_accuracy: val_correct as f64 / val.len() as f64,
        };
        history.push(stats);
        if stats.val_accuracy > best_acc {
            best_acc = stats.val_accuracy;
            best = snapshot(&params.set);
        }
        if tcfg
            .stop_at_val_accuracy
            .is_some_and(|t| stats.val_accuracy >= t)
        {
            break;
        }
    }

    if let Some(path) = &tcfg.log_path {
        write_history_csv(path, &history)?;
    }

    let (opt_step, m, v) = adam.state();
    Ok(ClassifierCheckpoint {
        config: config.clone(),
        epoch: history.len(),
        best_val_accuracy: best_acc,
        history,
        params: snapshot(&params.set),
        best,
        opt_step,
        opt_m: m.to_vec(),
        opt_v: v.to_vec(),
    })
}

fn write_history_csv(path: &Path, history: &[EpochStats]) -> Result<(), MacnnError> {
    let mut f = std::fs::File::create(path)?;
    writeln!(f, "epoch,train_loss,val_loss,val_accuracy")?;
    for (i, s) in history.iter().enumerate() {
        writeln!(
            f,
            "{},{},{},{}",
            i + 1,
            s.train_loss,
            s.val_loss,
            s.val_accuracy
        )?;
    }
    Ok(())
}

const CHECKPOINT_SCHEMA: &str = "classifier-checkpoint";

fn named(prefix: &str, arrays: &[(String, ArrayD<f64>)]) -> Vec<NamedArray> {
    arrays
        .iter()
        .map(|(name, data)| NamedArray {
            name: format!("{prefix}.{name}"),
            shape: data.shape().to_vec(),
            values: container::quantize(
                data.as_standard_layout().as_slice().expect("standard layout"),
            ),
        })
        .collect()
}

/// Persist a checkpoint to the versioned container format. Values are
/// narrowed to the container dtype; a reloaded checkpoint resumes from the
/// narrowed state.
pub fn save_classifier_checkpoint(
    ck: &ClassifierCheckpoint,
    path: &Path,
) -> Result<(), MacnnError> {
    let mut arrays = named("param", &ck.params);
    arrays.extend(named("best", &ck.best));
    let opt: Vec<(String, ArrayD<f64>)> = ck
        .params
        .iter()
        .zip(ck.opt_m.iter().zip(&ck.opt_v))
        .flat_map(|((name, _), (m, v))| {
            [
                (format!("m.{name}"), m.clone()),
                (format!("v.{name}"), v.clone()),
            ]
        })
        .collect();
    arrays.extend(named("adam", &opt));

    let (layout, payload) = container::pack_arrays(&arrays);
    let history: Vec<[f64; 3]> = ck
        .history
        .iter()
        .map(|s| [s.train_loss, s.val_loss, s.val_accuracy])
        .collect();
    let meta = serde_json::json!({
        "schema": CHECKPOINT_SCHEMA,
        "config": ck.config,
        "epoch": ck.epoch,
        "best_val_accuracy": ck.best_val_accuracy,
        "opt_step": ck.opt_step,
        "history": history,
        "arrays": layout,
    });
    container::write_container(path, &meta, &payload)?;
    Ok(())
}

pub fn load_classifier_checkpoint(path: &Path) -> Result<ClassifierCheckpoint, MacnnError> {
    let c = container::read_container(path)?;
    let bad = |reason: String| MacnnError::BadCheckpoint { reason };
    if c.meta["schema"] != CHECKPOINT_SCHEMA {
        return Err(bad(format!("schema {} unexpected", c.meta["schema"])));
    }
    let config: MacnnConfig = serde_json::from_value(c.meta["config"].clone())
        .map_err(|e| bad(format!("config: {e}")))?;
    let epoch = c.meta["epoch"].as_u64().ok_or_else(|| bad("epoch".into()))? as usize;
    let best_val_accuracy = c.meta["best_val_accuracy"]
        .as_f64()
        .ok_or_else(|| bad("best_val_accuracy".into()))?;
    let opt_step = c.meta["opt_step"]
        .as_u64()
        .ok_or_else(|| bad("opt_step".into()))?;
    let raw_history: Vec<[f64; 3]> = serde_json::from_value(c.meta["history"].clone())
        .map_err(|e| bad(format!("history: {e}")))?;
    let history: Vec<EpochStats> = raw_history
        .iter()
        .map(|s| EpochStats {
            train_loss: s[0],
            val_loss: s[1],
            val_accuracy: s[2],
        })
        .collect();
    if history.len() != epoch {
        return Err(bad(format!(
            "history length {} does not match epoch {epoch}",
            history.len()
        )));
    }

    let arrays = container::unpack_arrays(&c.meta["arrays"], &c.payload)?;
    let mut params = Vec::new();
    let mut best = Vec::new();
    let mut opt_m = Vec::new();
    let mut opt_v = Vec::new();
    for a in arrays {
        let data = ArrayD::from_shape_vec(IxDyn(&a.shape), container::dequantize(&a.values))
            .map_err(|e| bad(format!("array {}: {e}", a.name)))?;
        match a.name.split_once('.') {
            Some(("param", rest)) => params.push((rest.to_string(), data)),
            Some(("best", rest)) => best.push((rest.to_string(), data)),
            Some(("adam", rest)) => match rest.split_once('.') {
                Some(("m", _)) => opt_m.push(data),
                Some(("v", _)) => opt_v.push(data),
                _ => return Err(bad(format!("unexpected optimizer array {}", a.name))),
            },
            _ => return Err(bad(format!("unexpected array {}", a.name))),
        }
    }
    if params.len() != best.len() || params.len() != opt_m.len() || opt_m.len() != opt_v.len() {
        return Err(bad("parameter/optimizer array counts disagree".to_string()));
    }
    Ok(ClassifierCheckpoint {
        config,
        epoch,
        best_val_accuracy,
        history,
        params,
        best,
        opt_step,
        opt_m,
        opt_v,
    })
}
