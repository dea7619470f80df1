//! Evaluation metrics, t-SNE projections of the classifier's embedding
//! space, and static report rendering.
//!
//! Everything here is a pure function of its inputs: reports, projections,
//! and rendered files are bit-reproducible given the same checkpoint, data,
//! and seeds.

use crate::gafenc::GafImage;
use crate::macnn::{
    forward_tensor, images_to_batch, ClassifierCheckpoint, EpochStats, MacnnError, MacnnParams,
};
use ndarray::{Array2, ArrayView1};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::json;
use sha2::{Digest, Sha256};
use std::fmt;
use std::path::{Path, PathBuf};
use thiserror::Error;

mod plot;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("too few samples: have {have}, need at least {need}")]
    TooFewSamples { have: usize, need: usize },
    #[error("bad input: {reason}")]
    BadInput { reason: String },
    #[error(transparent)]
    Model(#[from] MacnnError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

// ---------------------------------------------------------------------------
// confusion matrix and report
// ---------------------------------------------------------------------------

/// Prediction counts with rows = true class, columns = predicted class.
#[derive(Debug, Clone, PartialEq)]
pub struct ConfusionMatrix {
    pub counts: Array2<u64>,
    pub class_names: Vec<String>,
}

impl ConfusionMatrix {
    /// Tally `(truth, predicted)` pairs into a `k x k` matrix.
    pub fn from_pairs(
        truth: &[usize],
        predicted: &[usize],
        class_names: Vec<String>,
    ) -> Result<Self, EvalError> {
        if truth.len() != predicted.len() {
            return Err(EvalError::BadInput {
                reason: format!(
                    "{} truth labels vs {} predictions",
                    truth.len(),
                    predicted.len()
                ),
            });
        }
        let k = class_names.len();
        let mut counts = Array2::zeros((k, k));
        for (&t, &p) in truth.iter().zip(predicted) {
            if t >= k || p >= k {
                return Err(EvalError::BadInput {
                    reason: format!("label pair ({t}, {p}) outside {k} classes"),
                });
            }
            counts[(t, p)] += 1;
        }
        Ok(ConfusionMatrix {
            counts,
            class_names,
        })
    }

    pub fn num_classes(&self) -> usize {
        self.class_names.len()
    }

    /// Total evaluated samples.
    pub fn total(&self) -> u64 {
        self.counts.sum()
    }

    /// trace / total; 0 on an empty matrix.
    pub fn accuracy(&self) -> f64 {
        let total = self.total();
        if total == 0 {
            return 0.0;
        }
        let trace: u64 = (0..self.num_classes()).map(|i| self.counts[(i, i)]).sum();
        trace as f64 / total as f64
    }
}

/// Precision/recall for one class. A class with no true samples has no
/// recall, and one never predicted has no precision; both are reported as
/// absent rather than as 0/0.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassMetrics {
    pub class: String,
    /// Number of true samples of this class.
    pub support: u64,
    pub precision: Option<f64>,
    pub recall: Option<f64>,
}

/// Provenance recorded alongside every report.
#[derive(Debug, Clone, PartialEq)]
pub struct RunMeta {
    /// SHA-256 of the serialized model config.
    pub config_hash: String,
    pub seed: Option<u64>,
    pub manifest_hash: Option<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvaluationReport {
    pub accuracy: f64,
    pub per_class: Vec<ClassMetrics>,
    pub confusion: ConfusionMatrix,
    pub run_meta: RunMeta,
}

impl EvaluationReport {
    /// Derive accuracy and per-class metrics from a confusion matrix.
    pub fn from_confusion(confusion: ConfusionMatrix, run_meta: RunMeta) -> Self {
        let k = confusion.num_classes();
        let per_class = (0..k)
            .map(|c| {
                let row: u64 = (0..k).map(|j| confusion.counts[(c, j)]).sum();
                let col: u64 = (0..k).map(|i| confusion.counts[(i, c)]).sum();
                let hit = confusion.counts[(c, c)];
                ClassMetrics {
                    class: confusion.class_names[c].clone(),
                    support: row,
                    precision: (col > 0).then(|| hit as f64 / col as f64),
                    recall: (row > 0).then(|| hit as f64 / row as f64),
                }
            })
            .collect();
        EvaluationReport {
            accuracy: confusion.accuracy(),
            per_class,
            confusion,
            run_meta,
        }
    }
}

/// Class names for labels `0..k`, taken from the first image carrying each
/// label; unseen labels fall back to `class{i}`.
pub fn class_names_from(images: &[GafImage], k: usize) -> Vec<String> {
    let mut names: Vec<Option<String>> = vec![None; k];
    for im in images {
        if im.label < k && names[im.label].is_none() {
            names[im.label] = Some(im.label_name.clone());
        }
    }
    names
        .into_iter()
        .enumerate()
        .map(|(i, n)| n.unwrap_or_else(|| format!("class{i}")))
        .collect()
}

fn sha256_hex(bytes: &[u8]) -> String {
    let mut h = Sha256::new();
    h.update(bytes);
    let digest = h.finalize();
    digest.iter().map(|b| format!("{b:02x}")).collect()
}

/// Run the classifier (best weights) over a labeled test set and tabulate
/// the results. `run_meta.seed` and `manifest_hash` are left unset; the
/// pipeline layer fills them in when it has them.
pub fn evaluate_model(
    checkpoint: &ClassifierCheckpoint,
    test: &[GafImage],
) -> Result<EvaluationReport, EvalError> {
    if test.is_empty() {
        return Err(EvalError::TooFewSamples { have: 0, need: 1 });
    }
    let k = checkpoint.config.num_classes;
    let truth: Vec<usize> = test.iter().map(|im| im.label).collect();
    let (predicted, _) = crate::macnn::predict(checkpoint, test)?;
    let confusion = ConfusionMatrix::from_pairs(&truth, &predicted, class_names_from(test, k))?;
    let run_meta = RunMeta {
        config_hash: sha256_hex(serde_json::to_string(&checkpoint.config)?.as_bytes()),
        seed: None,
        manifest_hash: None,
    };
    Ok(EvaluationReport::from_confusion(confusion, run_meta))
}

// ---------------------------------------------------------------------------
// embeddings and t-SNE
// ---------------------------------------------------------------------------

/// Post-pooling feature vectors, one row per image, from explicit weights.
pub fn embed_with_params(
    params: &MacnnParams,
    images: &[GafImage],
) -> Result<Array2<f64>, EvalError> {
    let n = images.len();
    let c = params.config.fused_channels();
    let mut out = Array2::zeros((n, c));
    for (start, chunk) in images.chunks(32).enumerate().map(|(i, ch)| (i * 32, ch)) {
        let x = images_to_batch(chunk, &params.config)?;
        let (_, embedding) = forward_tensor(&x, params)?;
        let e = embedding.data();
        for i in 0..chunk.len() {
            for j in 0..c {
                out[(start + i, j)] = e[[i, j]];
            }
        }
    }
    Ok(out)
}

/// Post-pooling feature vectors under the checkpoint's best weights.
pub fn extract_embeddings(
    checkpoint: &ClassifierCheckpoint,
    images: &[GafImage],
) -> Result<Array2<f64>, EvalError> {
    Ok(embed_with_params(&checkpoint.best_params()?, images)?)
}

/// Whether a projection shows the model before or after training.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ProjectionStage {
    Initial,
    Final,
}

impl ProjectionStage {
    pub fn as_str(self) -> &'static str {
        match self {
            ProjectionStage::Initial => "initial",
            ProjectionStage::Final => "final",
        }
    }
}

impl fmt::Display for ProjectionStage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// A 2-D t-SNE layout of N feature vectors.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingProjection {
    pub points: Array2<f64>,
    pub labels: Vec<usize>,
    pub stage: ProjectionStage,
    pub perplexity: f64,
    pub seed: u64,
}

const TSNE_ITERS: usize = 1000;
const TSNE_LEARNING_RATE: f64 = 200.0;
const TSNE_EXAGGERATION: f64 = 12.0;
const TSNE_EXAGGERATION_ITERS: usize = 250;
const TSNE_MOMENTUM_SWITCH: usize = 250;
const TSNE_EPS: f64 = 1e-12;

fn pairwise_sq_dists(x: &Array2<f64>) -> Array2<f64> {
    let n = x.nrows();
    let gram = x.dot(&x.t());
    let mut d = Array2::zeros((n, n));
    for i in 0..n {
        for j in 0..n {
            d[(i, j)] = (gram[(i, i)] + gram[(j, j)] - 2.0 * gram[(i, j)]).max(0.0);
        }
    }
    d
}

/// One row of conditional affinities `p_{j|i}` at the precision that hits
/// the target entropy `ln(perplexity)`, found by 50 bisection steps.
fn affinity_row(d2: ArrayView1<f64>, i: usize, perplexity: f64) -> Vec<f64> {
    let n = d2.len();
    let target = perplexity.ln();
    let dmin = d2
        .iter()
        .enumerate()
        .filter(|&(j, _)| j != i)
        .map(|(_, &v)| v)
        .fold(f64::INFINITY, f64::min);
    let mut beta = 1.0;
    let (mut lo, mut hi) = (0.0, f64::INFINITY);
    let mut row = vec![0.0; n];
    for _ in 0..50 {
        let mut sum = 0.0;
        for (j, &v) in d2.iter().enumerate() {
            row[j] = if j == i {
                0.0
            } else {
                (-beta * (v - dmin)).exp()
            };
            sum += row[j];
        }
        let mut entropy = 0.0;
        for r in row.iter_mut() {
            *r /= sum;
            if *r > 0.0 {
                entropy -= *r * r.ln();
            }
        }
        if (entropy - target).abs() < 1e-7 {
            break;
        }
        if entropy > target {
            // Too diffuse: sharpen.
            lo = beta;
            beta = if hi.is_finite() { (lo + hi) / 2.0 } else { beta * 2.0 };
        } else {
            hi = beta;
            beta = (lo + hi) / 2.0;
        }
    }
    row
}

/// Exact (quadratic-cost) t-SNE with the standard reference schedule:
/// early exaggeration 12 for 250 iterations, momentum 0.5 then 0.8, adaptive
/// per-coordinate gains, 1000 iterations total.
pub fn tsne_project(
    features: &Array2<f64>,
    labels: &[usize],
    stage: ProjectionStage,
    perplexity: f64,
    seed: u64,
) -> Result<EmbeddingProjection, EvalError> {
    let n = features.nrows();
    if labels.len() != n {
        return Err(EvalError::BadInput {
            reason: format!("{n} feature rows vs {} labels", labels.len()),
        });
    }
    if !perplexity.is_finite() || perplexity <= 1.0 {
        return Err(EvalError::BadInput {
            reason: format!("perplexity {perplexity} must exceed 1"),
        });
    }
    if n as f64 <= 3.0 * perplexity {
        return Err(EvalError::TooFewSamples {
            have: n,
            need: (3.0 * perplexity).floor() as usize + 1,
        });
    }

    // Symmetrized joint affinities.
    let d2 = pairwise_sq_dists(features);
    let mut p = Array2::zeros((n, n));
    for i in 0..n {
        let row = affinity_row(d2.row(i), i, perplexity);
        for (j, v) in row.into_iter().enumerate() {
            p[(i, j)] = v;
        }
    }
    let mut joint = Array2::zeros((n, n));
    for i in 0..n {
        for j in 0..n {
            joint[(i, j)] = ((p[(i, j)] + p[(j, i)]) / (2.0 * n as f64)).max(TSNE_EPS);
        }
        joint[(i, i)] = TSNE_EPS;
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut y = Array2::from_shape_fn((n, 2), |_| {
        1e-4 * rng.sample::<f64, _>(rand_distr::StandardNormal)
    });
    let mut step = Array2::<f64>::zeros((n, 2));
    let mut gains = Array2::<f64>::from_elem((n, 2), 1.0);
    let mut w = Array2::zeros((n, n));
    let mut grad = Array2::zeros((n, 2));

    for t in 0..TSNE_ITERS {
        let exagg = if t < TSNE_EXAGGERATION_ITERS {
            TSNE_EXAGGERATION
        } else {
            1.0
        };
        // Student-t kernel on the current layout.
        let mut wsum = 0.0;
        for i in 0..n {
            w[(i, i)] = 0.0;
            for j in (i + 1)..n {
                let dx = y[(i, 0)] - y[(j, 0)];
                let dy = y[(i, 1)] - y[(j, 1)];
                let v = 1.0 / (1.0 + dx * dx + dy * dy);
                w[(i, j)] = v;
                w[(j, i)] = v;
                wsum += 2.0 * v;
            }
        }
        let wsum = wsum.max(TSNE_EPS);

        for i in 0..n {
            let (mut gx, mut gy) = (0.0, 0.0);
            for j in 0..n {
                if i == j {
                    continue;
                }
                let q = (w[(i, j)] / wsum).max(TSNE_EPS);
                let f = 4.0 * (exagg * joint[(i, j)] - q) * w[(i, j)];
                gx += f * (y[(i, 0)] - y[(j, 0)]);
                gy += f * (y[(i, 1)] - y[(j, 1)]);
            }
            grad[(i, 0)] = gx;
            grad[(i, 1)] = gy;
        }

        let momentum = if t < TSNE_MOMENTUM_SWITCH { 0.5 } else { 0.8 };
        for i in 0..n {
            for d in 0..2 {
                let g = grad[(i, d)];
                gains[(i, d)] = if (g > 0.0) != (step[(i, d)] > 0.0) {
                    gains[(i, d)] + 0.2
                } else {
                    (gains[(i, d)] * 0.8).max(0.01)
                };
                step[(i, d)] = momentum * step[(i, d)] - TSNE_LEARNING_RATE * gains[(i, d)] * g;
                y[(i, d)] += step[(i, d)];
            }
        }
        for d in 0..2 {
            let mean = y.column(d).sum() / n as f64;
            for i in 0..n {
                y[(i, d)] -= mean;
            }
        }
    }

    Ok(EmbeddingProjection {
        points: y,
        labels: labels.to_vec(),
        stage,
        perplexity,
        seed,
    })
}

/// Mean silhouette coefficient over all points (Euclidean distances).
/// Points in singleton clusters score 0 by convention.
pub fn silhouette_score(points: &Array2<f64>, labels: &[usize]) -> Result<f64, EvalError> {
    let n = points.nrows();
    if labels.len() != n || n == 0 {
        return Err(EvalError::BadInput {
            reason: format!("{n} points vs {} labels", labels.len()),
        });
    }
    let classes: std::collections::BTreeSet<usize> = labels.iter().copied().collect();
    if classes.len() < 2 {
        return Err(EvalError::BadInput {
            reason: "silhouette needs at least two clusters".to_string(),
        });
    }
    let d2 = pairwise_sq_dists(points);
    let mut total = 0.0;
    for i in 0..n {
        let own = labels[i];
        let own_size = labels.iter().filter(|&&l| l == own).count();
        if own_size == 1 {
            continue; // contributes 0
        }
        let mut a = 0.0;
        let mut b = f64::INFINITY;
        for &other in &classes {
            let (mut sum, mut cnt) = (0.0, 0usize);
            for j in 0..n {
                if j != i && labels[j] == other {
                    sum += d2[(i, j)].sqrt();
                    cnt += 1;
                }
            }
            if other == own {
                a = sum / cnt as f64;
            } else if cnt > 0 {
                b = b.min(sum / cnt as f64);
            }
        }
        total += (b - a) / a.max(b);
    }
    Ok(total / n as f64)
}

// ---------------------------------------------------------------------------
// report rendering
// ---------------------------------------------------------------------------

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

fn json_opt_f64(v: Option<f64>) -> serde_json::Value {
    v.map(serde_json::Value::from)
        .unwrap_or(serde_json::Value::Null)
}

/// Write the full report bundle into `out_dir`: a versioned JSON copy of
/// every number, CSV twins of each table, and PNG plots (confusion heatmap,
/// per-stage t-SNE scatters, training curves). Returns the files written.
/// Missing optional inputs are skipped and noted in the JSON.
pub fn render_report(
    report: &EvaluationReport,
    projections: &[EmbeddingProjection],
    history: &[EpochStats],
    out_dir: &Path,
) -> Result<Vec<PathBuf>, EvalError> {
    std::fs::create_dir_all(out_dir)?;
    let mut written = Vec::new();
    let mut notices: Vec<String> = Vec::new();

    // Projections: scatter plot, CSV, and a silhouette figure per stage.
    let mut projection_docs = Vec::new();
    for proj in projections {
        let stem = format!("tsne_{}", proj.stage);
        let silhouette = silhouette_score(&proj.points, &proj.labels).ok();
        projection_docs.push(json!({
            "stage": proj.stage.as_str(),
            "n": proj.points.nrows(),
            "perplexity": proj.perplexity,
            "seed": proj.seed,
            "silhouette": json_opt_f64(silhouette),
        }));

        let csv_path = out_dir.join(format!("{stem}.csv"));
        let mut wtr = csv::Writer::from_path(&csv_path)?;
        wtr.write_record(["x", "y", "label"])?;
        for (i, row) in proj.points.rows().into_iter().enumerate() {
            wtr.write_record([
                row[0].to_string(),
                row[1].to_string(),
                proj.labels[i].to_string(),
            ])?;
        }
        wtr.flush()?;
        written.push(csv_path);

        let png_path = out_dir.join(format!("{stem}.png"));
        plot::scatter(&proj.points, &proj.labels)
            .save(&png_path)
            .map_err(|e| std::io::Error::other(e.to_string()))?;
        written.push(png_path);
    }
    if projections.is_empty() {
        notices.push("no projections provided; t-SNE scatter plots omitted".to_string());
    }

    // Confusion matrix: CSV + heatmap.
    let k = report.confusion.num_classes();
    let confusion_csv = out_dir.join("confusion.csv");
    {
        let mut wtr = csv::Writer::from_path(&confusion_csv)?;
        let mut header = vec!["true/predicted".to_string()];
        header.extend(report.confusion.class_names.iter().cloned());
        wtr.write_record(&header)?;
        for i in 0..k {
            let mut rec = vec![report.confusion.class_names[i].clone()];
            rec.extend((0..k).map(|j| report.confusion.counts[(i, j)].to_string()));
            wtr.write_record(&rec)?;
        }
        wtr.flush()?;
    }
    written.push(confusion_csv);
    let confusion_png = out_dir.join("confusion.png");
    plot::heatmap(&report.confusion.counts)
        .save(&confusion_png)
        .map_err(|e| std::io::Error::other(e.to_string()))?;
    written.push(confusion_png);

    // Per-class metrics CSV.
    let per_class_csv = out_dir.join("per_class.csv");
    {
        let mut wtr = csv::Writer::from_path(&per_class_csv)?;
        wtr.write_record(["class", "support", "precision", "recall"])?;
        for m in &report.per_class {
            wtr.write_record([
                m.class.clone(),
                m.support.to_string(),
                fmt_opt(m.precision),
                fmt_opt(m.recall),
            ])?;
        }
        wtr.flush()?;
    }
    written.push(per_class_csv);

    // Training curves.
    if history.is_empty() {
        notices.push("no training history provided; curve plots omitted".to_string());
    } else {
        let curves_csv = out_dir.join("curves.csv");
        let mut wtr = csv::Writer::from_path(&curves_csv)?;
        wtr.write_record(["epoch", "train_loss", "val_loss", "val_accuracy"])?;
        for (i, s) in history.iter().enumerate() {
            wtr.write_record([
                (i + 1).to_string(),
                s.train_loss.to_string(),
                s.val_loss.to_string(),
                s.val_accuracy.to_string(),
            ])?;
        }
        wtr.flush()?;
        written.push(curves_csv);

        let curves_png = out_dir.join("curves.png");
        plot::curves(history)
            .save(&curves_png)
            .map_err(|e| std::io::Error::other(e.to_string()))?;
        written.push(curves_png);
    }

    // Machine-readable copy of everything above.
    let doc = json!({
        "schema_version": 1,
        "accuracy": report.accuracy,
        "per_class": report.per_class.iter().map(|m| json!({
            "class": m.class,
            "support": m.support,
            "precision": json_opt_f64(m.precision),
            "recall": json_opt_f64(m.recall),
        })).collect::<Vec<_>>(),
        "confusion": {
            "class_names": report.confusion.class_names,
            "rows_are_true_class": true,
            "counts": (0..k).map(|i| (0..k).map(|j| report.confusion.counts[(i, j)]).collect::<Vec<_>>()).collect::<Vec<_>>(),
        },
        "run_meta": {
            "config_hash": report.run_meta.config_hash,
            "seed": report.run_meta.seed,
            "manifest_hash": report.run_meta.manifest_hash,
        },
        "projections": projection_docs,
        "history": history.iter().enumerate().map(|(i, s)| json!({
            "epoch": i + 1,
            "train_loss": s.train_loss,
            "val_loss": s.val_loss,
            "val_accuracy": s.val_accuracy,
        })).collect::<Vec<_>>(),
        "notices": notices,
    });
    let json_path = out_dir.join("report.json");
    let mut text = serde_json::to_string_pretty(&doc)?;
    text.push('\n');
    std::fs::write(&json_path, text)?;
    written.push(json_path);

    Ok(written)
}
