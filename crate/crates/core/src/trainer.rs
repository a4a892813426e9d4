//! Mini-batch training with periodic pseudo-label refresh.

use std::path::Path;

use ndarray::Axis;

use crate::dataio::{parse_key_values, parse_value, write_atomic, SourceDataset, TargetDataset};
use crate::error::{Error, Result};
use crate::model::{forward_gz, init_params, save_checkpoint, Checkpoint, CheckpointMeta, ModelParams};
use crate::numkernel::{Matrix, Rng};
use crate::objective::{
    batch_gradients, compute_z_prototypes, loss_log_csv, Batch, BatchLossReport, ObjectiveConfig, TermWeights,
    ZPrototypes,
};
use crate::separation::{separate_features, PseudoState, SeparationConfig};

pub const CHECKPOINT_FILE: &str = "checkpoint.bin";
pub const HISTORY_FILE: &str = "history.csv";
pub const PSEUDO_FILE: &str = "pseudo.tsv";

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub lr: f64,
    pub epochs: usize,
    /// Half source (rounded up), half target.
    pub batch_size: usize,
    pub lambda1: f64,
    pub lambda2: f64,
    pub alpha: f64,
    pub beta: f64,
    /// Number of novel clusters.
    pub k: usize,
    pub seed: u64,
    /// Epochs between embedding-space refreshes; 0 keeps the initial labels.
    pub refresh_period: usize,
    pub r_sep: usize,
    pub use_lr: bool,
    pub use_ld: bool,
    pub use_prop: bool,
    pub use_fusion: bool,
    pub unseen_fallback: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 1e-3,
            epochs: 100,
            batch_size: 64,
            lambda1: 1e-4,
            lambda2: 0.1,
            alpha: 0.001,
            beta: 0.2,
            k: 3,
            seed: 0,
            refresh_period: 10,
            r_sep: 5,
            use_lr: true,
            use_ld: true,
            use_prop: true,
            use_fusion: true,
            unseen_fallback: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("lr", self.lr),
            ("lambda1", self.lambda1),
            ("lambda2", self.lambda2),
            ("alpha", self.alpha),
        ];
        if let Some((k, v)) = positive.iter().find(|(_, v)| !(v.is_finite() && *v > 0.0)) {
            return Err(Error::Config(format!("`{k}` must be positive, got {v}")));
        }
        if !(0.0..1.0).contains(&self.beta) {
            return Err(Error::Config(format!("`beta` must lie in [0, 1), got {}", self.beta)));
        }
        if self.alpha > 1.0 {
            return Err(Error::Config(format!("`alpha` must not exceed 1, got {}", self.alpha)));
        }
        if self.batch_size < 2 {
            return Err(Error::Config(format!("`batch_size` must be at least 2, got {}", self.batch_size)));
        }
        if self.epochs == 0 || self.k == 0 {
            return Err(Error::Config("`epochs` and `k` must be positive".into()));
        }
        Ok(())
    }

    pub fn objective(&self) -> ObjectiveConfig {
        ObjectiveConfig {
            lambda1: self.lambda1,
            lambda2: self.lambda2,
            beta: self.beta,
            use_lr: self.use_lr,
            use_ld: self.use_ld,
            use_prop: self.use_prop,
            use_fusion: self.use_fusion,
        }
    }

    pub fn separation(&self) -> SeparationConfig {
        SeparationConfig {
            alpha: self.alpha,
            novel_classes: self.k,
            rounds: self.r_sep,
            unseen_fallback: self.unseen_fallback,
            seed: self.seed,
            ..SeparationConfig::default()
        }
    }

    /// Reads `key = value` lines; absent keys keep their defaults.
    pub fn from_key_values(text: &str, origin: &Path) -> Result<Self> {
        let mut cfg = TrainConfig::default();
        for (line, key, value) in parse_key_values(text, origin)? {
            let loc = format!("line {line}");
            let v = value.as_str();
            match key.as_str() {
                "lr" => cfg.lr = parse_value(v, origin, &loc, &key)?,
                "epochs" => cfg.epochs = parse_value(v, origin, &loc, &key)?,
                "batch_size" => cfg.batch_size = parse_value(v, origin, &loc, &key)?,
                "lambda1" => cfg.lambda1 = parse_value(v, origin, &loc, &key)?,
                "lambda2" => cfg.lambda2 = parse_value(v, origin, &loc, &key)?,
                "alpha" => cfg.alpha = parse_value(v, origin, &loc, &key)?,
                "beta" => cfg.beta = parse_value(v, origin, &loc, &key)?,
                "k" => cfg.k = parse_value(v, origin, &loc, &key)?,
                "seed" => cfg.seed = parse_value(v, origin, &loc, &key)?,
                "refresh_period" => cfg.refresh_period = parse_value(v, origin, &loc, &key)?,
                "r_sep" => cfg.r_sep = parse_value(v, origin, &loc, &key)?,
                "use_lr" => cfg.use_lr = parse_value(v, origin, &loc, &key)?,
                "use_ld" => cfg.use_ld = parse_value(v, origin, &loc, &key)?,
                "use_prop" => cfg.use_prop = parse_value(v, origin, &loc, &key)?,
                "use_fusion" => cfg.use_fusion = parse_value(v, origin, &loc, &key)?,
                "unseen_fallback" => cfg.unseen_fallback = parse_value(v, origin, &loc, &key)?,
                _ => return Err(Error::format(origin, loc, format!("unknown key `{key}`"))),
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_key_values(&self) -> String {
        format!(
            "lr = {}\nepochs = {}\nbatch_size = {}\nlambda1 = {}\nlambda2 = {}\nalpha = {}\nbeta = {}\nk = {}\n\
             seed = {}\nrefresh_period = {}\nr_sep = {}\nuse_lr = {}\nuse_ld = {}\nuse_prop = {}\n\
             use_fusion = {}\nunseen_fallback = {}\n",
            self.lr,
            self.epochs,
            self.batch_size,
            self.lambda1,
            self.lambda2,
            self.alpha,
            self.beta,
            self.k,
            self.seed,
            self.refresh_period,
            self.r_sep,
            self.use_lr,
            self.use_ld,
            self.use_prop,
            self.use_fusion,
            self.unseen_fallback,
        )
    }
}

/// Index sets of one batch.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BatchIndices {
    pub source: Vec<usize>,
    pub target: Vec<usize>,
}

/// One epoch of batches. The epoch length is set by whichever domain needs
/// more `⌈b/2⌉`/`⌊b/2⌋` batches to be covered; both shuffled domains are then
/// spread evenly over that many batches, so every sample appears exactly once.
pub fn make_batches(n_source: usize, n_target: usize, batch_size: usize, rng: &mut Rng) -> Result<Vec<BatchIndices>> {
    if batch_size < 2 {
        return Err(Error::Config(format!("batch size must be at least 2, got {batch_size}")));
    }
    if n_source == 0 || n_target == 0 {
        return Err(Error::Contract("batching needs samples in both domains".into()));
    }
    let half_s = batch_size.div_ceil(2);
    let half_t = batch_size / 2;
    let count = n_source.div_ceil(half_s).max(n_target.div_ceil(half_t));
    let mut src: Vec<usize> = (0..n_source).collect();
    let mut tgt: Vec<usize> = (0..n_target).collect();
    rng.shuffle(&mut src);
    rng.shuffle(&mut tgt);
    let chunk = |items: &[usize], b: usize| -> Vec<usize> {
        let lo = b * items.len() / count;
        let hi = (b + 1) * items.len() / count;
        items[lo..hi].to_vec()
    };
    Ok((0..count)
        .map(|b| BatchIndices {
            source: chunk(&src, b),
            target: chunk(&tgt, b),
        })
        .collect())
}

/// `θ ← θ − lr·g`.
pub fn sgd_step(params: &mut ModelParams, grads: &ModelParams, lr: f64) -> Result<()> {
    if params.tensor_shapes() != grads.tensor_shapes() {
        return Err(Error::Contract("gradient shapes differ from parameters".into()));
    }
    if !grads.all_finite() {
        return Err(Error::Training("non-finite gradient".into()));
    }
    params.add_scaled(grads, -lr);
    Ok(())
}

/// Pseudo labels, pseudo attributes and embedding-space class centers.
#[derive(Debug, Clone, PartialEq)]
pub struct PseudoTargets {
    pub state: PseudoState,
    /// Source attribute row of the pseudo label for seen samples, zeros for
    /// unseen ones.
    pub attributes: Matrix,
    pub centers: ZPrototypes,
}

/// Runs separation in the raw input space (`in_input_space`) or in the
/// current embedding space, then recomputes pseudo attributes and centers.
pub fn refresh_pseudo(
    params: &ModelParams,
    source: &SourceDataset,
    target: &TargetDataset,
    cfg: &TrainConfig,
    in_input_space: bool,
) -> Result<PseudoTargets> {
    let known = source.num_known();
    let z_target = forward_gz(params, target.features.view())?;
    let state = if in_input_space {
        separate_features(
            source.features.view(),
            &source.labels,
            known,
            target.features.view(),
            &cfg.separation(),
        )?
    } else {
        let z_source = forward_gz(params, source.features.view())?;
        separate_features(z_source.view(), &source.labels, known, z_target.view(), &cfg.separation())?
    };
    let mut attributes = Matrix::zeros((target.features.nrows(), source.attributes.dim()));
    for (i, &l) in state.labels.iter().enumerate() {
        if l < known {
            attributes.row_mut(i).assign(&source.attributes.row(l));
        }
    }
    let centers = compute_z_prototypes(z_target.view(), &state.labels, known + cfg.k)?;
    Ok(PseudoTargets {
        state,
        attributes,
        centers,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainHistory {
    /// Batch-averaged loss terms per epoch.
    pub epochs: Vec<BatchLossReport>,
    /// Epochs at whose start pseudo labels were recomputed.
    pub refreshes: Vec<usize>,
    pub checksum: String,
}

impl TrainHistory {
    pub fn to_csv(&self) -> String {
        loss_log_csv(&self.epochs)
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub params: ModelParams,
    pub history: TrainHistory,
    pub pseudo: PseudoTargets,
}

impl TrainOutcome {
    pub fn checkpoint(&self, cfg: &TrainConfig) -> Checkpoint {
        Checkpoint {
            params: self.params.clone(),
            meta: CheckpointMeta {
                epochs: cfg.epochs as u64,
                seed: cfg.seed,
                tau: self.pseudo.state.tau,
                fusion: cfg.use_fusion,
                binary_head: cfg.use_ld,
            },
        }
    }
}

fn gather(batch: &BatchIndices, source: &SourceDataset, target: &TargetDataset, pseudo: &PseudoTargets) -> Batch {
    let source_labels: Vec<usize> = batch.source.iter().map(|&i| source.labels[i]).collect();
    let mut source_attrs = Matrix::zeros((batch.source.len(), source.attributes.dim()));
    for (r, &l) in source_labels.iter().enumerate() {
        source_attrs.row_mut(r).assign(&source.attributes.row(l));
    }
    Batch {
        source_x: source.features.select(Axis(0), &batch.source),
        source_labels,
        source_attrs,
        target_x: target.features.select(Axis(0), &batch.target),
        target_labels: batch.target.iter().map(|&i| pseudo.state.labels[i]).collect(),
        target_attrs: pseudo.attributes.select(Axis(0), &batch.target),
    }
}

pub fn train(cfg: &TrainConfig, source: &SourceDataset, target: &TargetDataset) -> Result<TrainOutcome> {
    cfg.validate()?;
    if source.features.ncols() != target.features.ncols() {
        return Err(Error::Contract(format!(
            "source has {} feature dims, target {}",
            source.features.ncols(),
            target.features.ncols()
        )));
    }
    let mut params = init_params(
        source.features.ncols(),
        source.attributes.dim(),
        source.num_known(),
        cfg.seed,
    );
    let objective = cfg.objective();
    let weights = TermWeights::objective(&objective);
    let mut batch_rng = Rng::new(cfg.seed).fork(10);

    let mut pseudo = refresh_pseudo(&params, source, target, cfg, true)?;
    let mut refreshes = vec![0];
    log::info!(
        "initial separation: tau {:.4}, {} of {} target samples seen",
        pseudo.state.tau,
        pseudo.state.num_seen(),
        target.features.nrows()
    );
    let mut epochs = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        if epoch > 0 && cfg.refresh_period > 0 && epoch % cfg.refresh_period == 0 {
            pseudo = refresh_pseudo(&params, source, target, cfg, false)?;
            refreshes.push(epoch);
            log::info!("epoch {epoch}: refreshed pseudo labels, tau {:.4}", pseudo.state.tau);
        }
        let batches = make_batches(source.features.nrows(), target.features.nrows(), cfg.batch_size, &mut batch_rng)?;
        let mut reports = Vec::with_capacity(batches.len());
        for (b, idx) in batches.iter().enumerate() {
            let batch = gather(idx, source, target, &pseudo);
            let (report, grads) = batch_gradients(&params, &batch, &pseudo.centers, &objective, &weights)
                .map_err(|e| Error::Training(format!("epoch {epoch}, batch {b}: {e}")))?;
            sgd_step(&mut params, &grads, cfg.lr).map_err(|e| Error::Training(format!("epoch {epoch}, batch {b}: {e}")))?;
            reports.push(report);
        }
        let mean = BatchLossReport::mean(&reports);
        log::debug!("epoch {epoch}: total {:.6}", mean.total);
        epochs.push(mean);
    }
    let history = TrainHistory {
        epochs,
        refreshes,
        checksum: params.checksum(),
    };
    Ok(TrainOutcome {
        params,
        history,
        pseudo,
    })
}

/// Trains and writes the checkpoint, loss history and final pseudo labels
/// into `out`.
pub fn train_to_dir(cfg: &TrainConfig, source: &SourceDataset, target: &TargetDataset, out: &Path) -> Result<TrainOutcome> {
    let outcome = train(cfg, source, target)?;
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    save_checkpoint(&outcome.checkpoint(cfg), &out.join(CHECKPOINT_FILE))?;
    write_atomic(&out.join(HISTORY_FILE), outcome.history.to_csv().as_bytes())?;
    outcome.pseudo.state.save_tsv(&out.join(PSEUDO_FILE))?;
    Ok(outcome)
}
