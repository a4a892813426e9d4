//! Loss terms on a mixed source/target batch and their exact gradients.
//!
//! The batch objective is
//!
//! ```text
//! total = L_C + L_D + λ1 (L_R_source + L_R_target) + λ2 L_A
//! ```
//!
//! where `L_R` pulls embeddings toward their class center in `z`-space and
//! pushes them from the other centers, `L_A` is the binary cross-entropy of
//! graph-propagated attribute predictions, and `L_C`/`L_D` are the
//! cross-entropies of the classifier and the seen/unseen head over the joint
//! features of every sample. Gradients flow through the propagation matrix,
//! including its dependence on the embeddings via the adjacency graph.

use ndarray::{Array1, ArrayView1, ArrayView2, Axis};

use crate::error::{Error, Result};
use crate::model::{logistic, softmax_rows, AttributeOrigin, ModelParams, SampleKind};
use crate::numkernel::{inv_small, pairwise_sq_dist, variance, Matrix};

/// Floor applied to the adjacency bandwidth `σ²`.
pub const SIGMA2_FLOOR: f64 = 1e-12;
/// Floor applied to node degrees before `D^{-1/2}`.
pub const DEGREE_FLOOR: f64 = 1e-12;
/// Propagated attribute probabilities are clamped to `[ε, 1 − ε]`.
pub const ATTR_CLAMP: f64 = 1e-7;

/// Class centers of the target embeddings under the current pseudo labels.
#[derive(Debug, Clone, PartialEq)]
pub struct ZPrototypes {
    pub centers: Matrix,
    /// `false` for classes without members; their rows are zero and ignored.
    pub present: Vec<bool>,
}

impl ZPrototypes {
    pub fn num_present(&self) -> usize {
        self.present.iter().filter(|&&p| p).count()
    }
}

pub fn compute_z_prototypes(z: ArrayView2<'_, f64>, labels: &[usize], classes: usize) -> Result<ZPrototypes> {
    if z.nrows() != labels.len() {
        return Err(Error::Contract(format!("{} embeddings but {} labels", z.nrows(), labels.len())));
    }
    let mut centers = Matrix::zeros((classes, z.ncols()));
    let mut counts = vec![0usize; classes];
    for (row, &l) in z.rows().into_iter().zip(labels) {
        if l >= classes {
            return Err(Error::Contract(format!("pseudo label {l} outside 0..{classes}")));
        }
        counts[l] += 1;
        let mut acc = centers.row_mut(l);
        acc += &row;
    }
    for (c, &n) in counts.iter().enumerate() {
        if n > 0 {
            centers.row_mut(c).mapv_inplace(|v| v / n as f64);
        }
    }
    Ok(ZPrototypes {
        centers,
        present: counts.iter().map(|&n| n > 0).collect(),
    })
}

/// Gaussian affinity `exp(−d²/σ²)` with zero diagonal, where `σ²` is the
/// population variance of the off-diagonal squared distances (floored).
pub fn build_adjacency(z: ArrayView2<'_, f64>) -> Result<(Matrix, f64)> {
    let n = z.nrows();
    if n < 2 {
        return Err(Error::Contract(format!("adjacency needs at least 2 samples, got {n}")));
    }
    let d2 = pairwise_sq_dist(z)?;
    let sigma2 = off_diagonal_variance(&d2).max(SIGMA2_FLOOR);
    let mut a = Matrix::zeros((n, n));
    for i in 0..n {
        for j in 0..n {
            if i != j {
                a[[i, j]] = (-d2[[i, j]] / sigma2).exp();
            }
        }
    }
    Ok((a, sigma2))
}

fn off_diagonal_variance(d2: &Matrix) -> f64 {
    let n = d2.nrows();
    let mut values = Vec::with_capacity(n * (n - 1));
    for i in 0..n {
        for j in 0..n {
            if i != j {
                values.push(d2[[i, j]]);
            }
        }
    }
    variance(&values)
}

fn degree_scales(a: &Matrix) -> (Array1<f64>, Vec<bool>) {
    let mut scales = Array1::zeros(a.nrows());
    let mut floored = vec![false; a.nrows()];
    for (i, row) in a.rows().into_iter().enumerate() {
        let mut deg = row.sum();
        if deg < DEGREE_FLOOR {
            deg = DEGREE_FLOOR;
            floored[i] = true;
        }
        scales[i] = 1.0 / deg.sqrt();
    }
    (scales, floored)
}

/// `D^{-1/2} A D^{-1/2}` with degrees floored.
pub fn normalized_adjacency(a: ArrayView2<'_, f64>) -> Matrix {
    let a = a.to_owned();
    let (scales, _) = degree_scales(&a);
    normalized_laplacian(&a, &scales)
}

fn normalized_laplacian(a: &Matrix, scales: &Array1<f64>) -> Matrix {
    let n = a.nrows();
    Matrix::from_shape_fn((n, n), |(i, j)| scales[i] * a[[i, j]] * scales[j])
}

/// `W = (I − β D^{-1/2} A D^{-1/2})^{-1}`.
pub fn propagation_matrix(a: ArrayView2<'_, f64>, beta: f64) -> Result<Matrix> {
    let n = a.nrows();
    if a.ncols() != n {
        return Err(Error::Contract("adjacency must be square".into()));
    }
    if beta == 0.0 {
        return Ok(Matrix::eye(n));
    }
    let a = a.to_owned();
    let (scales, _) = degree_scales(&a);
    let lap = normalized_laplacian(&a, &scales);
    let m = Matrix::eye(n) - lap * beta;
    inv_small(m.view()).map_err(|e| Error::Propagation(format!("I - beta L is not invertible: {e}")))
}

/// `W · raw`, clamped into `[ε, 1 − ε]`.
pub fn propagate_attributes(w: ArrayView2<'_, f64>, raw: ArrayView2<'_, f64>) -> Result<Matrix> {
    if w.ncols() != raw.nrows() {
        return Err(Error::Contract(format!(
            "propagation matrix has {} columns, attributes {} rows",
            w.ncols(),
            raw.nrows()
        )));
    }
    Ok(w.dot(&raw).mapv_into(|v| v.clamp(ATTR_CLAMP, 1.0 - ATTR_CLAMP)))
}

/// Loss and gradient of one domain's partial-alignment term.
fn alignment_with_grad(z: ArrayView2<'_, f64>, labels: &[usize], rz: &ZPrototypes) -> (f64, Matrix) {
    let n = z.nrows();
    let mut grad = Matrix::zeros(z.raw_dim());
    let present = rz.num_present();
    if n == 0 {
        return (0.0, grad);
    }
    if present < 2 {
        log::warn!("alignment loss skipped: only {present} class centers present");
        return (0.0, grad);
    }
    let push = 1.0 / (present - 1) as f64;
    let mut total = 0.0;
    for (i, &y) in labels.iter().enumerate() {
        let zi = z.row(i);
        for (c, center) in rz.centers.rows().into_iter().enumerate() {
            if !rz.present[c] {
                continue;
            }
            let coef = if c == y { 1.0 } else { -push };
            let diff = &zi - &center;
            let dist = diff.dot(&diff).sqrt();
            total += coef * dist;
            if dist > 1e-12 {
                grad.row_mut(i).scaled_add(coef / (dist * n as f64), &diff);
            }
        }
    }
    (total / n as f64, grad)
}

/// Partial alignment `(L_R_source, L_R_target)` with Euclidean distances.
pub fn loss_alignment(
    z_source: ArrayView2<'_, f64>,
    source_labels: &[usize],
    z_target: ArrayView2<'_, f64>,
    pseudo_labels: &[usize],
    rz: &ZPrototypes,
) -> (f64, f64) {
    (
        alignment_with_grad(z_source, source_labels, rz).0,
        alignment_with_grad(z_target, pseudo_labels, rz).0,
    )
}

fn bce_with_grad(pred: ArrayView2<'_, f64>, target: ArrayView2<'_, f64>) -> (f64, Matrix) {
    let rows = pred.nrows();
    let mut grad = Matrix::zeros(pred.raw_dim());
    if rows == 0 {
        return (0.0, grad);
    }
    let scale = 1.0 / (rows * pred.ncols()) as f64;
    let mut total = 0.0;
    for ((idx, &p), &a) in pred.indexed_iter().zip(target.iter()) {
        total -= a * p.ln() + (1.0 - a) * (1.0 - p).ln();
        grad[idx] = scale * (-a / p + (1.0 - a) / (1.0 - p));
    }
    (total * scale, grad)
}

/// Mean over samples of the per-dimension mean binary cross-entropy.
pub fn loss_attribute(pred: ArrayView2<'_, f64>, target: ArrayView2<'_, f64>) -> Result<f64> {
    if pred.dim() != target.dim() {
        return Err(Error::Contract("attribute prediction and target shapes differ".into()));
    }
    if target.iter().any(|&a| a != 0.0 && a != 1.0) {
        return Err(Error::Contract("attribute targets must be binary".into()));
    }
    Ok(bce_with_grad(pred, target).0)
}

fn cross_entropy_with_grad(logits: &Matrix, labels: &[usize]) -> Result<(f64, Matrix)> {
    let rows = logits.nrows();
    let classes = logits.ncols();
    if let Some(&l) = labels.iter().find(|&&l| l >= classes) {
        return Err(Error::Contract(format!("label {l} outside 0..{classes}")));
    }
    if rows == 0 {
        return Ok((0.0, Matrix::zeros(logits.raw_dim())));
    }
    let mut total = 0.0;
    for (row, &l) in logits.rows().into_iter().zip(labels) {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        total += lse - row[l];
    }
    let mut grad = softmax_rows(logits);
    for (i, &l) in labels.iter().enumerate() {
        grad[[i, l]] -= 1.0;
    }
    grad /= rows as f64;
    Ok((total / rows as f64, grad))
}

/// Mean softmax cross-entropy over classifier logits, one row per joint
/// feature.
pub fn loss_classifier(logits: &Matrix, labels: &[usize]) -> Result<f64> {
    Ok(cross_entropy_with_grad(logits, labels)?.0)
}

/// Mean cross-entropy of the seen/unseen head; `psi` is 0 for seen, 1 for
/// unseen.
pub fn loss_binary(logits: &Matrix, psi: &[usize]) -> Result<f64> {
    if logits.ncols() != 2 {
        return Err(Error::Contract("binary head must have two logits".into()));
    }
    Ok(cross_entropy_with_grad(logits, psi)?.0)
}

/// Per-term values of one batch.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct LossParts {
    pub l_r_source: f64,
    pub l_r_target: f64,
    pub l_a: f64,
    pub l_c: f64,
    pub l_d: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct BatchLossReport {
    pub l_r_source: f64,
    pub l_r_target: f64,
    pub l_a: f64,
    pub l_c: f64,
    pub l_d: f64,
    pub total: f64,
    pub lambda1: f64,
    pub lambda2: f64,
}

pub fn total_objective(parts: LossParts, lambda1: f64, lambda2: f64) -> BatchLossReport {
    BatchLossReport {
        l_r_source: parts.l_r_source,
        l_r_target: parts.l_r_target,
        l_a: parts.l_a,
        l_c: parts.l_c,
        l_d: parts.l_d,
        total: parts.l_c + parts.l_d + lambda1 * (parts.l_r_source + parts.l_r_target) + lambda2 * parts.l_a,
        lambda1,
        lambda2,
    }
}

impl BatchLossReport {
    /// Equal-weight mean of several reports; the composition identity is
    /// preserved because every field is averaged the same way.
    pub fn mean(reports: &[BatchLossReport]) -> BatchLossReport {
        let n = reports.len().max(1) as f64;
        let sum = |f: fn(&BatchLossReport) -> f64| reports.iter().map(f).sum::<f64>() / n;
        let parts = LossParts {
            l_r_source: sum(|r| r.l_r_source),
            l_r_target: sum(|r| r.l_r_target),
            l_a: sum(|r| r.l_a),
            l_c: sum(|r| r.l_c),
            l_d: sum(|r| r.l_d),
        };
        let (l1, l2) = reports.first().map_or((0.0, 0.0), |r| (r.lambda1, r.lambda2));
        total_objective(parts, l1, l2)
    }

    pub fn identity_residual(&self) -> f64 {
        (self.total
            - (self.l_c + self.l_d + self.lambda1 * (self.l_r_source + self.l_r_target) + self.lambda2 * self.l_a))
            .abs()
    }
}

/// `epoch,l_c,l_d,l_r_s,l_r_t,l_a,total` lines with a header.
pub fn loss_log_csv(epochs: &[BatchLossReport]) -> String {
    let mut out = String::from("epoch,l_c,l_d,l_r_s,l_r_t,l_a,total\n");
    for (e, r) in epochs.iter().enumerate() {
        out.push_str(&format!(
            "{e},{},{},{},{},{},{}\n",
            r.l_c, r.l_d, r.l_r_source, r.l_r_target, r.l_a, r.total
        ));
    }
    out
}

/// Loss switches and trade-offs.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ObjectiveConfig {
    pub lambda1: f64,
    pub lambda2: f64,
    pub beta: f64,
    pub use_lr: bool,
    pub use_ld: bool,
    pub use_prop: bool,
    pub use_fusion: bool,
}

impl Default for ObjectiveConfig {
    fn default() -> Self {
        ObjectiveConfig {
            lambda1: 1e-4,
            lambda2: 0.1,
            beta: 0.2,
            use_lr: true,
            use_ld: true,
            use_prop: true,
            use_fusion: true,
        }
    }
}

/// Coefficients of each term in the differentiated scalar.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TermWeights {
    pub c: f64,
    pub d: f64,
    pub r_source: f64,
    pub r_target: f64,
    pub a: f64,
}

impl TermWeights {
    /// The weights of the training objective under `cfg`.
    pub fn objective(cfg: &ObjectiveConfig) -> Self {
        TermWeights {
            c: 1.0,
            d: if cfg.use_ld { 1.0 } else { 0.0 },
            r_source: if cfg.use_lr { cfg.lambda1 } else { 0.0 },
            r_target: if cfg.use_lr { cfg.lambda1 } else { 0.0 },
            a: cfg.lambda2,
        }
    }

    pub fn none() -> Self {
        TermWeights {
            c: 0.0,
            d: 0.0,
            r_source: 0.0,
            r_target: 0.0,
            a: 0.0,
        }
    }

    pub fn combine(&self, r: &BatchLossReport) -> f64 {
        self.c * r.l_c + self.d * r.l_d + self.r_source * r.l_r_source + self.r_target * r.l_r_target + self.a * r.l_a
    }
}

/// A training batch. Target rows carry pseudo labels (values `>= K_s` mark
/// unseen samples) and, for seen rows, the pseudo attribute vectors.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub source_x: Matrix,
    pub source_labels: Vec<usize>,
    pub source_attrs: Matrix,
    pub target_x: Matrix,
    pub target_labels: Vec<usize>,
    /// Pseudo attributes; rows of unseen samples are ignored.
    pub target_attrs: Matrix,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.source_x.nrows() + self.target_x.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Intermediate values of the propagation graph needed by the backward pass.
struct PropagationTape {
    d2: Matrix,
    a: Matrix,
    sigma2: f64,
    sigma_floored: bool,
    scales: Array1<f64>,
    degree_floored: Vec<bool>,
    w: Matrix,
}

fn propagation_forward(z: &Matrix, beta: f64) -> Result<PropagationTape> {
    let (a, sigma2) = build_adjacency(z.view())?;
    let d2 = pairwise_sq_dist(z.view())?;
    let sigma_floored = off_diagonal_variance(&d2) < SIGMA2_FLOOR;
    let (scales, degree_floored) = degree_scales(&a);
    let w = propagation_matrix(a.view(), beta)?;
    Ok(PropagationTape {
        d2,
        a,
        sigma2,
        sigma_floored,
        scales,
        degree_floored,
        w,
    })
}

/// Gradient of the embeddings given `∂/∂W`.
fn propagation_backward(tape: &PropagationTape, z: &Matrix, d_w: &Matrix, beta: f64) -> Matrix {
    let n = z.nrows();
    let wt = tape.w.t();
    // W = M^{-1}: dM = -W^T dW W^T, and M = I - βL
    let d_lap = wt.dot(d_w).dot(&wt) * beta;
    let s = &tape.scales;
    let a = &tape.a;

    let mut d_a = Matrix::zeros((n, n));
    let mut d_s = Array1::<f64>::zeros(n);
    for i in 0..n {
        for j in 0..n {
            let g = d_lap[[i, j]];
            d_a[[i, j]] += g * s[i] * s[j];
            d_s[i] += g * a[[i, j]] * s[j];
            d_s[j] += g * s[i] * a[[i, j]];
        }
    }
    for i in 0..n {
        if tape.degree_floored[i] {
            continue;
        }
        // s = deg^{-1/2}  =>  ds/ddeg = -s^3 / 2
        let d_deg = -0.5 * d_s[i] * s[i] * s[i] * s[i];
        for j in 0..n {
            d_a[[i, j]] += d_deg;
        }
    }

    let sigma2 = tape.sigma2;
    let mut d_d2 = Matrix::zeros((n, n));
    let mut d_sigma2 = 0.0;
    for i in 0..n {
        for j in 0..n {
            if i == j {
                continue;
            }
            let ga = d_a[[i, j]] * a[[i, j]];
            d_d2[[i, j]] = -ga / sigma2;
            d_sigma2 += ga * tape.d2[[i, j]] / (sigma2 * sigma2);
        }
    }
    if !tape.sigma_floored {
        let m = (n * (n - 1)) as f64;
        let mut mean = 0.0;
        for i in 0..n {
            for j in 0..n {
                if i != j {
                    mean += tape.d2[[i, j]];
                }
            }
        }
        mean /= m;
        for i in 0..n {
            for j in 0..n {
                if i != j {
                    d_d2[[i, j]] += d_sigma2 * 2.0 * (tape.d2[[i, j]] - mean) / m;
                }
            }
        }
    }

    let mut d_z = Matrix::zeros(z.raw_dim());
    for i in 0..n {
        for j in 0..n {
            if i == j {
                continue;
            }
            let g = 2.0 * (d_d2[[i, j]] + d_d2[[j, i]]);
            if g == 0.0 {
                continue;
            }
            let zi = z.row(i);
            let zj = z.row(j);
            let mut row = d_z.row_mut(i);
            ndarray::Zip::from(&mut row).and(&zi).and(&zj).for_each(|out, &a, &b| *out += g * (a - b));
        }
    }
    d_z
}

struct JointRow {
    sample: usize,
    origin: Option<AttributeOrigin>,
    class: usize,
    /// `Some(ψ)` for target rows.
    psi: Option<usize>,
}

fn sample_kind(is_source: bool, label: usize, known: usize) -> SampleKind {
    if is_source {
        SampleKind::Source
    } else if label < known {
        SampleKind::TargetSeen
    } else {
        SampleKind::TargetUnseen
    }
}

fn validate_batch(params: &ModelParams, batch: &Batch, rz: &ZPrototypes) -> Result<()> {
    let shape = params.shape();
    let known = shape.known_classes;
    let ok = batch.source_x.ncols() == shape.input_dim
        && batch.target_x.ncols() == shape.input_dim
        && batch.source_x.nrows() == batch.source_labels.len()
        && batch.source_attrs.dim() == (batch.source_x.nrows(), shape.attribute_dim)
        && batch.target_x.nrows() == batch.target_labels.len()
        && batch.target_attrs.dim() == (batch.target_x.nrows(), shape.attribute_dim)
        && rz.centers.ncols() == shape.embed_dim
        && rz.present.len() == rz.centers.nrows();
    if !ok {
        return Err(Error::Contract("batch, prototypes and model shapes disagree".into()));
    }
    if let Some(&l) = batch.source_labels.iter().find(|&&l| l >= known) {
        return Err(Error::Contract(format!("source label {l} outside 0..{known}")));
    }
    if let Some(&l) = batch.target_labels.iter().find(|&&l| l >= rz.centers.nrows()) {
        return Err(Error::Contract(format!("pseudo label {l} has no class center")));
    }
    if batch.is_empty() {
        return Err(Error::Contract("empty batch".into()));
    }
    Ok(())
}

/// Forward pass of the batch objective, and when `weights` is given, the
/// gradient of `weights · terms` with respect to every parameter.
fn run(
    params: &ModelParams,
    batch: &Batch,
    rz: &ZPrototypes,
    cfg: &ObjectiveConfig,
    weights: Option<&TermWeights>,
) -> Result<(BatchLossReport, Option<ModelParams>)> {
    validate_batch(params, batch, rz)?;
    let shape = params.shape();
    let known = shape.known_classes;
    let embed = shape.embed_dim;
    let d_a = shape.attribute_dim;
    let n_s = batch.source_x.nrows();
    let n = batch.len();

    let x = ndarray::concatenate![Axis(0), batch.source_x, batch.target_x];
    let labels: Vec<usize> = batch.source_labels.iter().chain(&batch.target_labels).copied().collect();
    let (z, gz_tape) = params.gz.forward_taped(x.view());
    let (ga_logits, ga_tape) = params.ga.forward_taped(z.view());
    let raw = ga_logits.mapv(logistic);

    let prop = if cfg.use_prop && n >= 2 {
        Some(propagation_forward(&z, cfg.beta)?)
    } else {
        None
    };
    let unclamped = match &prop {
        Some(t) => t.w.dot(&raw),
        None => raw.clone(),
    };
    let a_hat = unclamped.mapv(|v| v.clamp(ATTR_CLAMP, 1.0 - ATTR_CLAMP));

    // attribute supervision: all source rows and the pseudo-seen target rows
    let supervised: Vec<usize> = (0..n).filter(|&i| i < n_s || labels[i] < known).collect();
    let attr_target_row = |i: usize| -> ArrayView1<'_, f64> {
        if i < n_s {
            batch.source_attrs.row(i)
        } else {
            batch.target_attrs.row(i - n_s)
        }
    };
    let sup_pred = a_hat.select(Axis(0), &supervised);
    let sup_target = Matrix::from_shape_fn((supervised.len(), d_a), |(r, j)| attr_target_row(supervised[r])[j]);
    let (l_a, d_sup) = bce_with_grad(sup_pred.view(), sup_target.view());

    // joint features
    let mut rows: Vec<JointRow> = Vec::with_capacity(2 * n);
    for i in 0..n {
        let is_source = i < n_s;
        let kind = sample_kind(is_source, labels[i], known);
        let class = if kind == SampleKind::TargetUnseen { known } else { labels[i] };
        let psi = match kind {
            SampleKind::Source => None,
            SampleKind::TargetSeen => Some(0),
            SampleKind::TargetUnseen => Some(1),
        };
        if cfg.use_fusion {
            for &origin in kind.joint_origins() {
                rows.push(JointRow { sample: i, origin: Some(origin), class, psi });
            }
        } else {
            rows.push(JointRow { sample: i, origin: None, class, psi });
        }
    }
    let mut joint = Matrix::zeros((rows.len(), embed + d_a));
    for (r, row) in rows.iter().enumerate() {
        joint.slice_mut(ndarray::s![r, ..embed]).assign(&z.row(row.sample));
        let tail = match row.origin {
            Some(AttributeOrigin::GroundTruth) | Some(AttributeOrigin::Pseudo) => Some(attr_target_row(row.sample)),
            Some(AttributeOrigin::Predicted) => Some(a_hat.row(row.sample)),
            None => None,
        };
        if let Some(tail) = tail {
            joint.slice_mut(ndarray::s![r, embed..]).assign(&tail);
        }
    }

    let (c_logits, c_tape) = params.c.forward_taped(joint.view());
    let class_labels: Vec<usize> = rows.iter().map(|r| r.class).collect();
    let (l_c, d_c_logits) = cross_entropy_with_grad(&c_logits, &class_labels)?;

    let target_rows: Vec<usize> = (0..rows.len()).filter(|&r| rows[r].psi.is_some()).collect();
    let d_part = if cfg.use_ld && !target_rows.is_empty() {
        let joint_t = joint.select(Axis(0), &target_rows);
        let (d_logits, d_tape) = params.d.forward_taped(joint_t.view());
        let psi: Vec<usize> = target_rows.iter().map(|&r| rows[r].psi.unwrap()).collect();
        let (l_d, g) = cross_entropy_with_grad(&d_logits, &psi)?;
        Some((l_d, g, d_tape))
    } else {
        None
    };
    let l_d = d_part.as_ref().map_or(0.0, |p| p.0);

    let z_s = z.slice(ndarray::s![..n_s, ..]);
    let z_t = z.slice(ndarray::s![n_s.., ..]);
    let (align_s, align_t) = if cfg.use_lr {
        let (ls, gs) = alignment_with_grad(z_s, &batch.source_labels, rz);
        let (lt, gt) = alignment_with_grad(z_t, &batch.target_labels, rz);
        (Some((ls, gs)), Some((lt, gt)))
    } else {
        (None, None)
    };

    let parts = LossParts {
        l_r_source: align_s.as_ref().map_or(0.0, |p| p.0),
        l_r_target: align_t.as_ref().map_or(0.0, |p| p.0),
        l_a,
        l_c,
        l_d,
    };
    let report = total_objective(parts, cfg.lambda1, cfg.lambda2);
    if !report.total.is_finite() {
        return Err(Error::Training(format!("non-finite batch loss: {report:?}")));
    }
    let Some(w) = weights else {
        return Ok((report, None));
    };

    let mut grads = params.zeros_like();
    let mut d_z = Matrix::zeros(z.raw_dim());
    let mut d_a_hat = Matrix::zeros(a_hat.raw_dim());

    let scatter = |d_joint: &Matrix, subset: &dyn Fn(usize) -> usize, d_z: &mut Matrix, d_a_hat: &mut Matrix| {
        for (k, g) in d_joint.rows().into_iter().enumerate() {
            let row = &rows[subset(k)];
            let mut dz = d_z.row_mut(row.sample);
            dz += &g.slice(ndarray::s![..embed]);
            if row.origin == Some(AttributeOrigin::Predicted) {
                let mut da = d_a_hat.row_mut(row.sample);
                da += &g.slice(ndarray::s![embed..]);
            }
        }
    };

    if w.c != 0.0 {
        let d_joint = params.c.backward(&c_tape, (d_c_logits * w.c).view(), &mut grads.c);
        scatter(&d_joint, &|k| k, &mut d_z, &mut d_a_hat);
    }
    if let Some((_, g, d_tape)) = &d_part {
        if w.d != 0.0 {
            let d_joint = params.d.backward(d_tape, (g * w.d).view(), &mut grads.d);
            scatter(&d_joint, &|k| target_rows[k], &mut d_z, &mut d_a_hat);
        }
    }
    if let (Some((_, gs)), Some((_, gt))) = (&align_s, &align_t) {
        d_z.slice_mut(ndarray::s![..n_s, ..]).scaled_add(w.r_source, gs);
        d_z.slice_mut(ndarray::s![n_s.., ..]).scaled_add(w.r_target, gt);
    }
    if w.a != 0.0 {
        for (r, &i) in supervised.iter().enumerate() {
            let mut da = d_a_hat.row_mut(i);
            da.scaled_add(w.a, &d_sup.row(r));
        }
    }

    // clamp passes gradient only strictly inside the interval
    ndarray::Zip::from(&mut d_a_hat).and(&unclamped).for_each(|g, &v| {
        if !(ATTR_CLAMP..=1.0 - ATTR_CLAMP).contains(&v) {
            *g = 0.0;
        }
    });
    let d_raw = match &prop {
        Some(t) => {
            let d_w = d_a_hat.dot(&raw.t());
            d_z += &propagation_backward(t, &z, &d_w, cfg.beta);
            t.w.t().dot(&d_a_hat)
        }
        None => d_a_hat,
    };
    let d_ga_logits = d_raw * raw.mapv(|p| p * (1.0 - p));
    d_z += &params.ga.backward(&ga_tape, d_ga_logits.view(), &mut grads.ga);
    params.gz.backward(&gz_tape, d_z.view(), &mut grads.gz);

    if !grads.all_finite() {
        return Err(Error::Training("non-finite gradient".into()));
    }
    Ok((report, Some(grads)))
}

/// Loss terms of one batch.
pub fn batch_objective(
    params: &ModelParams,
    batch: &Batch,
    rz: &ZPrototypes,
    cfg: &ObjectiveConfig,
) -> Result<BatchLossReport> {
    Ok(run(params, batch, rz, cfg, None)?.0)
}

/// Loss terms of one batch and the gradient of `weights · terms`.
pub fn batch_gradients(
    params: &ModelParams,
    batch: &Batch,
    rz: &ZPrototypes,
    cfg: &ObjectiveConfig,
    weights: &TermWeights,
) -> Result<(BatchLossReport, ModelParams)> {
    let (report, grads) = run(params, batch, rz, cfg, Some(weights))?;
    Ok((report, grads.expect("gradients requested")))
}
