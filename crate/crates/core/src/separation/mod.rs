//! Progressive seen/unseen separation of the target domain.
//!
//! Source class means act as the initial prototypes. Each round scores every
//! target sample by a softmax over negative cosine distances, splits the
//! target set at the mean top probability and drifts each prototype toward the
//! mean of its confidently predicted targets. The low-confidence remainder is
//! clustered into `K` novel groups, and a final K-means pass over the whole
//! target set, seeded with all prototypes, assigns the pseudo labels.

pub mod kmeans;

use std::fmt::Write as _;
use std::path::Path;

use ndarray::{ArrayView1, ArrayView2};

use crate::dataio::{write_atomic, SourceDataset, TargetDataset};
use crate::error::{Error, Result};
use crate::numkernel::{cosine_dist, ensure_finite, softmax_neg, Matrix};

pub use kmeans::{kmeans, KMeansInit, KMeansParams, KMeansResult};

/// Prototypes in the feature space the separation ran in.
#[derive(Debug, Clone, PartialEq)]
pub struct PrototypeSet {
    /// One row per seen class.
    pub seen: Matrix,
    /// One row per novel cluster; zero rows before clustering.
    pub unseen: Matrix,
}

impl PrototypeSet {
    pub fn known(&self) -> usize {
        self.seen.nrows()
    }

    /// Seen rows followed by unseen rows.
    pub fn all(&self) -> Matrix {
        ndarray::concatenate![ndarray::Axis(0), self.seen, self.unseen]
    }
}

/// Pseudo labels of the target domain.
#[derive(Debug, Clone, PartialEq)]
pub struct PseudoState {
    /// Values below `known` are seen classes, the rest novel clusters.
    pub labels: Vec<usize>,
    pub confidence: Vec<f64>,
    pub tau: f64,
    pub seen_mask: Vec<bool>,
    pub prototypes: PrototypeSet,
}

impl PseudoState {
    pub fn known(&self) -> usize {
        self.prototypes.known()
    }

    pub fn num_seen(&self) -> usize {
        self.seen_mask.iter().filter(|&&s| s).count()
    }

    /// `sample_id, pseudo_label, confidence, seen_flag` rows, tab separated.
    pub fn to_tsv(&self) -> String {
        let mut out = String::from("sample_id\tpseudo_label\tconfidence\tseen_flag\n");
        for (i, ((l, c), s)) in self
            .labels
            .iter()
            .zip(&self.confidence)
            .zip(&self.seen_mask)
            .enumerate()
        {
            writeln!(out, "{i}\t{l}\t{c}\t{}", *s as u8).unwrap();
        }
        out
    }

    pub fn save_tsv(&self, path: &Path) -> Result<()> {
        write_atomic(path, self.to_tsv().as_bytes())
    }
}

#[derive(Debug, Clone)]
pub struct SeparationConfig {
    /// Prototype mixing rate.
    pub alpha: f64,
    /// Number of novel clusters `K`.
    pub novel_classes: usize,
    pub rounds: usize,
    /// When false the K-means stages are skipped and every label is a seen
    /// class prediction.
    pub cluster: bool,
    /// Treat the lowest-confidence `ceil(N_t / (K_s + K))` samples as unseen
    /// candidates when the threshold leaves too few.
    pub unseen_fallback: bool,
    pub kmeans: KMeansParams,
    pub seed: u64,
}

impl Default for SeparationConfig {
    fn default() -> Self {
        SeparationConfig {
            alpha: 0.001,
            novel_classes: 1,
            rounds: 5,
            cluster: true,
            unseen_fallback: false,
            kmeans: KMeansParams::default(),
            seed: 0,
        }
    }
}

/// Per-class means of the labeled features.
pub fn init_prototypes(
    features: ArrayView2<'_, f64>,
    labels: &[usize],
    known: usize,
) -> Result<PrototypeSet> {
    if features.nrows() != labels.len() {
        return Err(Error::Contract(format!(
            "{} feature rows but {} labels",
            features.nrows(),
            labels.len()
        )));
    }
    let d = features.ncols();
    let mut sums = Matrix::zeros((known, d));
    let mut counts = vec![0usize; known];
    for (row, &l) in features.rows().into_iter().zip(labels) {
        if l >= known {
            return Err(Error::Data(format!("label {l} outside 0..{known}")));
        }
        counts[l] += 1;
        let mut acc = sums.row_mut(l);
        acc += &row;
    }
    if let Some(c) = counts.iter().position(|&n| n == 0) {
        return Err(Error::Data(format!("class {c} has no source samples")));
    }
    for (c, &n) in counts.iter().enumerate() {
        sums.row_mut(c).mapv_inplace(|v| v / n as f64);
    }
    Ok(PrototypeSet {
        seen: sums,
        unseen: Matrix::zeros((0, d)),
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub label: usize,
    pub confidence: f64,
    pub probs: Vec<f64>,
    /// A zero-norm vector forced a neutral cosine distance.
    pub degenerate: bool,
}

/// Softmax over negative cosine distances to each prototype row.
pub fn prototype_predict(
    x: ArrayView1<'_, f64>,
    prototypes: ArrayView2<'_, f64>,
) -> Result<Prediction> {
    if prototypes.nrows() == 0 {
        return Err(Error::Contract("prototype_predict needs a prototype".into()));
    }
    if prototypes.ncols() != x.len() {
        return Err(Error::Contract(format!(
            "sample has {} dims, prototypes have {}",
            x.len(),
            prototypes.ncols()
        )));
    }
    let mut degenerate = false;
    let dists: Vec<f64> = prototypes
        .rows()
        .into_iter()
        .map(|p| {
            let c = cosine_dist(x, p);
            degenerate |= c.degenerate;
            c.distance
        })
        .collect();
    let probs = softmax_neg(&dists)?;
    let (label, confidence) = probs
        .iter()
        .copied()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |best, (i, p)| if p > best.1 { (i, p) } else { best });
    Ok(Prediction {
        label,
        confidence,
        probs,
        degenerate,
    })
}

fn predict_all(
    samples: ArrayView2<'_, f64>,
    prototypes: ArrayView2<'_, f64>,
) -> Result<(Vec<usize>, Vec<f64>)> {
    let mut labels = Vec::with_capacity(samples.nrows());
    let mut conf = Vec::with_capacity(samples.nrows());
    let mut degenerate = 0;
    for x in samples.rows() {
        let p = prototype_predict(x, prototypes)?;
        degenerate += p.degenerate as usize;
        labels.push(p.label);
        conf.push(p.confidence);
    }
    if degenerate > 0 {
        log::warn!("{degenerate} samples hit a zero-norm cosine distance");
    }
    Ok((labels, conf))
}

/// Threshold at the mean confidence; samples at or above it are seen.
pub fn split_seen_unseen(confidences: &[f64]) -> (f64, Vec<bool>) {
    // offset from the minimum so that equal inputs give exactly that value
    let low = confidences.iter().copied().fold(f64::INFINITY, f64::min);
    let tau = low + confidences.iter().map(|c| c - low).sum::<f64>() / confidences.len() as f64;
    let mask = confidences.iter().map(|&c| c >= tau).collect();
    (tau, mask)
}

/// `mu_c <- (1 - alpha) mu_c + alpha * mean(seen targets predicted c)`.
/// Classes without seen members keep their prototype.
pub fn update_prototypes_ema(
    prototypes: &PrototypeSet,
    target: ArrayView2<'_, f64>,
    labels: &[usize],
    seen_mask: &[bool],
    alpha: f64,
) -> PrototypeSet {
    assert!((0.0..=1.0).contains(&alpha), "alpha {alpha} outside [0, 1]");
    let known = prototypes.known();
    let mut sums = Matrix::zeros(prototypes.seen.raw_dim());
    let mut counts = vec![0usize; known];
    for ((row, &l), &seen) in target.rows().into_iter().zip(labels).zip(seen_mask) {
        if seen && l < known {
            counts[l] += 1;
            let mut acc = sums.row_mut(l);
            acc += &row;
        }
    }
    let mut seen = prototypes.seen.clone();
    for c in 0..known {
        if counts[c] == 0 {
            continue;
        }
        let n = counts[c] as f64;
        for (mu, s) in seen.row_mut(c).iter_mut().zip(sums.row(c)) {
            *mu = (1.0 - alpha) * *mu + alpha * (s / n);
        }
    }
    PrototypeSet {
        seen,
        unseen: prototypes.unseen.clone(),
    }
}

pub fn run_progressive_separation(
    source: &SourceDataset,
    target: &TargetDataset,
    cfg: &SeparationConfig,
) -> Result<PseudoState> {
    separate_features(
        source.features.view(),
        &source.labels,
        source.num_known(),
        target.features.view(),
        cfg,
    )
}

/// [`run_progressive_separation`] over arbitrary feature spaces (raw inputs or
/// learned embeddings).
pub fn separate_features(
    source: ArrayView2<'_, f64>,
    source_labels: &[usize],
    known: usize,
    target: ArrayView2<'_, f64>,
    cfg: &SeparationConfig,
) -> Result<PseudoState> {
    ensure_finite(target, "target features")?;
    if target.nrows() == 0 {
        return Err(Error::Separation("empty target set".into()));
    }
    if source.ncols() != target.ncols() {
        return Err(Error::Contract(format!(
            "source has {} dims, target {}",
            source.ncols(),
            target.ncols()
        )));
    }
    let mut protos = init_prototypes(source, source_labels, known)?;
    for _ in 0..cfg.rounds {
        let (labels, conf) = predict_all(target, protos.seen.view())?;
        let (_, mask) = split_seen_unseen(&conf);
        protos = update_prototypes_ema(&protos, target, &labels, &mask, cfg.alpha);
    }
    let (labels, conf) = predict_all(target, protos.seen.view())?;
    let (tau, mut seen_mask) = split_seen_unseen(&conf);

    if !cfg.cluster {
        return Ok(PseudoState {
            seen_mask: vec![true; labels.len()],
            labels,
            confidence: conf,
            tau,
            prototypes: protos,
        });
    }

    let k = cfg.novel_classes;
    if k == 0 {
        return Err(Error::Contract("novel class count K must be positive".into()));
    }
    let n_t = target.nrows();
    let mut candidates: Vec<usize> = (0..n_t).filter(|&i| !seen_mask[i]).collect();
    if candidates.len() < k {
        if !cfg.unseen_fallback {
            return Err(Error::Separation(format!(
                "no unseen candidates: {} samples below tau = {tau} but K = {k}",
                candidates.len()
            )));
        }
        let take = n_t.div_ceil(known + k).max(k).min(n_t);
        let mut order: Vec<usize> = (0..n_t).collect();
        order.sort_by(|&a, &b| conf[a].total_cmp(&conf[b]).then(a.cmp(&b)));
        candidates = order[..take].to_vec();
        candidates.sort_unstable();
        log::warn!("threshold left too few unseen candidates; using the {take} least confident");
        for &i in &candidates {
            seen_mask[i] = false;
        }
    }
    let unseen_points = Matrix::from_shape_fn((candidates.len(), target.ncols()), |(r, j)| {
        target[[candidates[r], j]]
    });
    let novel = kmeans(
        unseen_points.view(),
        k,
        &KMeansInit::PlusPlus { seed: cfg.seed },
        cfg.kmeans,
    )?;
    protos.unseen = novel.centers;

    let refined = kmeans(target, known + k, &KMeansInit::Centers(protos.all()), cfg.kmeans)?;
    let centers = refined.centers;
    let final_protos = PrototypeSet {
        seen: centers.slice(ndarray::s![0..known, ..]).to_owned(),
        unseen: centers.slice(ndarray::s![known.., ..]).to_owned(),
    };
    let (_, confidence) = predict_all(target, centers.view())?;
    let labels = refined.assignment;
    let seen_mask = labels.iter().map(|&l| l < known).collect();
    Ok(PseudoState {
        labels,
        confidence,
        tau,
        seen_mask,
        prototypes: final_protos,
    })
}
