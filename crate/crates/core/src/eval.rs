//! Open-set recognition and semantic recovery metrics.

use std::fmt::Write as _;

use ndarray::{s, ArrayView1, ArrayView2};

use crate::dataio::{TargetDataset, TargetEval};
use crate::error::{Error, Result};
use crate::model::{forward_c, forward_d, forward_ga, forward_gz, Checkpoint, ModelParams};
use crate::numkernel::Matrix;
use crate::separation::prototype_predict;

/// Threshold turning attribute probabilities into binary predictions.
pub const ATTRIBUTE_THRESHOLD: f64 = 0.5;

#[derive(Debug, Clone, PartialEq)]
pub struct MetricsReport {
    pub os: f64,
    pub os_star: f64,
    pub os_diamond: f64,
    pub s: f64,
    pub u: f64,
    pub h: f64,
    pub tau: f64,
    pub epochs: usize,
    pub seed: u64,
    /// `K_t` true classes by `K_s + 1` predicted columns (last is unknown).
    pub confusion: Vec<Vec<u64>>,
    /// Per-sample attribute (precision, recall).
    pub attr_pr: Vec<(f64, f64)>,
}

impl MetricsReport {
    pub fn known_classes(&self) -> usize {
        self.confusion.first().map_or(0, |r| r.len().saturating_sub(1))
    }

    /// `|os − (K_s·os* + os◇)/(K_s + 1)|`.
    pub fn composition_residual(&self) -> f64 {
        let k = self.known_classes() as f64;
        (self.os - (k * self.os_star + self.os_diamond) / (k + 1.0)).abs()
    }

    pub fn mean_attr_pr(&self) -> (f64, f64) {
        let n = self.attr_pr.len().max(1) as f64;
        let (p, r) = self.attr_pr.iter().fold((0.0, 0.0), |(a, b), (p, r)| (a + p, b + r));
        (p / n, r / n)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct OpenSetScores {
    pub os: f64,
    pub os_star: f64,
    pub os_diamond: f64,
    pub confusion: Vec<Vec<u64>>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SemanticScores {
    pub s: f64,
    pub u: f64,
    pub h: f64,
}

pub fn harmonic_mean(s: f64, u: f64) -> f64 {
    if s + u > 0.0 {
        2.0 * s * u / (s + u)
    } else {
        0.0
    }
}

/// Precision and recall of `a_hat ≥ threshold` against a binary vector.
/// With no predicted positives precision is 1 when there are no true
/// positives either and 0 otherwise; with no true positives recall is 1.
pub fn attribute_pr(a_hat: ArrayView1<'_, f64>, a_true: ArrayView1<'_, f64>, threshold: f64) -> (f64, f64) {
    let (mut tp, mut fp, mut fneg) = (0usize, 0usize, 0usize);
    for (&p, &t) in a_hat.iter().zip(a_true.iter()) {
        match (p >= threshold, t >= 0.5) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, true) => fneg += 1,
            (false, false) => {}
        }
    }
    let precision = if tp + fp > 0 {
        tp as f64 / (tp + fp) as f64
    } else if tp + fneg == 0 {
        1.0
    } else {
        0.0
    };
    let recall = if tp + fneg > 0 { tp as f64 / (tp + fneg) as f64 } else { 1.0 };
    (precision, recall)
}

/// Class-averaged accuracies from true labels over `K_t` classes and
/// open-set predictions over `K_s + 1` columns. Seen classes without samples
/// are left out of the OS* average; OS is composed from OS* and OS◇.
pub fn openset_scores(truth: &[usize], predicted: &[usize], known: usize, total: usize) -> Result<OpenSetScores> {
    if truth.len() != predicted.len() {
        return Err(Error::Contract(format!("{} labels but {} predictions", truth.len(), predicted.len())));
    }
    let mut confusion = vec![vec![0u64; known + 1]; total];
    for (&t, &p) in truth.iter().zip(predicted) {
        if t >= total || p > known {
            return Err(Error::Contract(format!("label {t} or prediction {p} out of range")));
        }
        confusion[t][p] += 1;
    }
    let seen_acc: Vec<f64> = (0..known)
        .filter_map(|c| {
            let n: u64 = confusion[c].iter().sum();
            (n > 0).then(|| confusion[c][c] as f64 / n as f64)
        })
        .collect();
    let os_star = if seen_acc.is_empty() {
        0.0
    } else {
        seen_acc.iter().sum::<f64>() / seen_acc.len() as f64
    };
    let (hits, count) = confusion[known..]
        .iter()
        .fold((0u64, 0u64), |(h, n), row| (h + row[known], n + row.iter().sum::<u64>()));
    let os_diamond = if count > 0 { hits as f64 / count as f64 } else { 0.0 };
    let k = known as f64;
    Ok(OpenSetScores {
        os: (k * os_star + os_diamond) / (k + 1.0),
        os_star,
        os_diamond,
        confusion,
    })
}

/// Mean over classes present in `truth` of the per-class hit rate.
pub fn class_averaged_accuracy(truth: &[usize], predicted: &[usize]) -> f64 {
    let classes = truth.iter().copied().max().map_or(0, |m| m + 1);
    let mut hits = vec![0usize; classes];
    let mut counts = vec![0usize; classes];
    for (&t, &p) in truth.iter().zip(predicted) {
        counts[t] += 1;
        hits[t] += (t == p) as usize;
    }
    let accs: Vec<f64> = counts
        .iter()
        .zip(&hits)
        .filter(|(&n, _)| n > 0)
        .map(|(&n, &h)| h as f64 / n as f64)
        .collect();
    if accs.is_empty() {
        0.0
    } else {
        accs.iter().sum::<f64>() / accs.len() as f64
    }
}

fn joint_matrix(z: &Matrix, a_hat: &Matrix, fusion: bool) -> Matrix {
    let mut joint = Matrix::zeros((z.nrows(), z.ncols() + a_hat.ncols()));
    joint.slice_mut(s![.., ..z.ncols()]).assign(z);
    if fusion {
        joint.slice_mut(s![.., z.ncols()..]).assign(a_hat);
    }
    joint
}

fn argmax(row: ArrayView1<'_, f64>) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Model outputs on the target set that the metrics consume.
#[derive(Debug, Clone, PartialEq)]
pub struct TargetOutputs {
    /// Raw attribute predictions, one row per sample.
    pub attributes: Matrix,
    /// Classifier argmax; `K_s` means unknown.
    pub openset: Vec<usize>,
    /// Stage-one routing decision.
    pub routed_seen: Vec<bool>,
}

pub fn target_outputs(ckpt: &Checkpoint, features: ArrayView2<'_, f64>) -> Result<TargetOutputs> {
    let params: &ModelParams = &ckpt.params;
    let known = params.shape().known_classes;
    let z = forward_gz(params, features)?;
    let a_hat = forward_ga(params, z.view())?;
    let joint = joint_matrix(&z, &a_hat, ckpt.meta.fusion);
    let logits = forward_c(params, joint.view())?;
    let openset: Vec<usize> = logits.rows().into_iter().map(argmax).collect();
    let routed_seen = if ckpt.meta.binary_head {
        let probs = forward_d(params, joint.view())?;
        probs.rows().into_iter().map(|p| p[0] >= p[1]).collect()
    } else {
        openset.iter().map(|&p| p < known).collect()
    };
    Ok(TargetOutputs {
        attributes: a_hat,
        openset,
        routed_seen,
    })
}

fn require_eval(target: &TargetDataset, eval: &TargetEval, known: usize) -> Result<()> {
    if eval.labels.len() != target.features.nrows() {
        return Err(Error::Protocol(format!(
            "{} evaluation labels for {} target samples",
            eval.labels.len(),
            target.features.nrows()
        )));
    }
    if eval.attributes.num_classes() <= known {
        return Err(Error::Protocol(format!(
            "attribute table has {} classes, needs more than the {known} seen ones",
            eval.attributes.num_classes()
        )));
    }
    Ok(())
}

pub fn eval_openset(ckpt: &Checkpoint, target: &TargetDataset, eval: &TargetEval) -> Result<OpenSetScores> {
    let known = ckpt.params.shape().known_classes;
    require_eval(target, eval, known)?;
    let out = target_outputs(ckpt, target.features.view())?;
    openset_scores(&eval.labels, &out.openset, known, eval.attributes.num_classes())
}

fn semantic_from_outputs(out: &TargetOutputs, eval: &TargetEval, known: usize) -> Result<SemanticScores> {
    let table = eval.attributes.as_matrix();
    let seen_rows = table.slice(s![..known, ..]);
    let unseen_rows = table.slice(s![known.., ..]);
    let mut predicted = Vec::with_capacity(eval.labels.len());
    for (i, &seen) in out.routed_seen.iter().enumerate() {
        let a = out.attributes.row(i);
        predicted.push(if seen {
            prototype_predict(a, seen_rows)?.label
        } else {
            known + prototype_predict(a, unseen_rows)?.label
        });
    }
    let split = |want_seen: bool| -> f64 {
        let (t, p): (Vec<usize>, Vec<usize>) = eval
            .labels
            .iter()
            .zip(&predicted)
            .filter(|(&t, _)| (t < known) == want_seen)
            .map(|(&t, &p)| (t, p))
            .unzip();
        class_averaged_accuracy(&t, &p)
    };
    let (s, u) = (split(true), split(false));
    Ok(SemanticScores { s, u, h: harmonic_mean(s, u) })
}

pub fn eval_semantic(ckpt: &Checkpoint, target: &TargetDataset, eval: &TargetEval) -> Result<SemanticScores> {
    let known = ckpt.params.shape().known_classes;
    require_eval(target, eval, known)?;
    let out = target_outputs(ckpt, target.features.view())?;
    semantic_from_outputs(&out, eval, known)
}

/// Full report for a checkpoint on a labeled target set.
pub fn evaluate(ckpt: &Checkpoint, target: &TargetDataset, eval: &TargetEval) -> Result<MetricsReport> {
    let known = ckpt.params.shape().known_classes;
    require_eval(target, eval, known)?;
    if eval.attributes.dim() != ckpt.params.shape().attribute_dim {
        return Err(Error::Protocol(format!(
            "attribute table has {} dims, model predicts {}",
            eval.attributes.dim(),
            ckpt.params.shape().attribute_dim
        )));
    }
    let out = target_outputs(ckpt, target.features.view())?;
    let open = openset_scores(&eval.labels, &out.openset, known, eval.attributes.num_classes())?;
    let sem = semantic_from_outputs(&out, eval, known)?;
    let attr_pr = eval
        .labels
        .iter()
        .enumerate()
        .map(|(i, &t)| attribute_pr(out.attributes.row(i), eval.attributes.row(t), ATTRIBUTE_THRESHOLD))
        .collect();
    Ok(MetricsReport {
        os: open.os,
        os_star: open.os_star,
        os_diamond: open.os_diamond,
        s: sem.s,
        u: sem.u,
        h: sem.h,
        tau: ckpt.meta.tau,
        epochs: ckpt.meta.epochs as usize,
        seed: ckpt.meta.seed,
        confusion: open.confusion,
        attr_pr,
    })
}

/// Plain-text tables: open-set accuracies, semantic recovery, attribute
/// precision/recall and the confusion matrix.
pub fn render_report(report: &MetricsReport) -> String {
    let pct = |v: f64| format!("{:.1}", 100.0 * v);
    let mut out = String::new();
    writeln!(out, "run: seed {}, {} epochs, tau {:.4}", report.seed, report.epochs, report.tau).unwrap();
    writeln!(out).unwrap();
    writeln!(out, "{:>8} {:>8} {:>8}", "OS", "OS*", "OS◇").unwrap();
    writeln!(out, "{:>8} {:>8} {:>8}", pct(report.os), pct(report.os_star), pct(report.os_diamond)).unwrap();
    writeln!(out).unwrap();
    writeln!(out, "{:>8} {:>8} {:>8}", "S", "U", "H").unwrap();
    writeln!(out, "{:>8} {:>8} {:>8}", pct(report.s), pct(report.u), pct(report.h)).unwrap();
    writeln!(out).unwrap();
    let (p, r) = report.mean_attr_pr();
    writeln!(out, "attributes: precision {} recall {} over {} samples", pct(p), pct(r), report.attr_pr.len()).unwrap();
    writeln!(out).unwrap();
    let known = report.known_classes();
    write!(out, "{:>6}", "true").unwrap();
    for c in 0..known {
        write!(out, " {c:>5}").unwrap();
    }
    writeln!(out, " {:>5}", "unk").unwrap();
    for (t, row) in report.confusion.iter().enumerate() {
        write!(out, "{t:>6}").unwrap();
        for v in row {
            write!(out, " {v:>5}").unwrap();
        }
        writeln!(out).unwrap();
    }
    out
}
