//! The SwAMP training loop and its contrastive-only baseline.
//!
//! Every minibatch is embedded by both encoders and pushed into the feature
//! queue. Class posteriors over the whole queue feed two transport problems
//! with swapped costs: modality A's targets come from modality B's
//! posteriors and vice versa. The minibatch rows of each plan become soft
//! targets for that modality's classifier, added to the hard-negative
//! contrastive loss. The model with the best validation pair R@1 is kept.

mod config;
mod model;

use std::time::Instant;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

pub use config::{Assignment, Init, LossMode, TrainConfig};
pub use model::{Modality, Model};

use crate::error::{Error, Result};
use crate::feature_queue::{FeatureQueue, QueueSnapshot};
use crate::losses::{
    class_posteriors, class_posteriors_detached, contrastive_loss, similarity_matrix, swamp_loss,
    swap_cost, total_loss,
};
use crate::ndmath::{Adam, Matrix, Tape};
use crate::retrieval_eval::{
    evaluate_paired, pair_recall_at_1, Direction, ErrorType, RetrievalReport,
};
use crate::rng::stream;
use crate::sinkhorn::{harden, sinkhorn_solve};
use crate::synthgen::{PairView, PairedDataset, Split};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Phase {
    /// Contrastive-only pretraining of a warm-started run.
    Pretrain,
    Main,
}

/// Per-epoch training summary. Wall time is kept apart so records compare
/// exactly across runs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub phase: Phase,
    pub epoch: usize,
    /// Mean over the epoch's minibatches.
    pub loss_contrastive: f64,
    /// Mean swapped cross-entropy; absent when the loss is not computed.
    pub loss_swamp: Option<f64>,
    pub val_r1_pair: f64,
    /// Whether this epoch set a new best validation score within its phase.
    pub is_best: bool,
}

/// Transport solver diagnostics accumulated over a run.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SolverStats {
    pub solves: usize,
    /// Solves that hit the iteration cap before reaching the tolerance.
    pub capped: usize,
    pub total_iterations: usize,
    pub max_final_residual: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainHistory {
    pub records: Vec<EpochRecord>,
    pub epoch_seconds: Vec<f64>,
    /// Epoch of the returned model.
    pub best_epoch: usize,
    pub best_val_r1_pair: f64,
    pub solver: SolverStats,
    pub wall_seconds: f64,
}

impl TrainHistory {
    pub fn phase_records(&self, phase: Phase) -> impl Iterator<Item = &EpochRecord> {
        self.records.iter().filter(move |r| r.phase == phase)
    }
}

/// Receives every epoch record as soon as it is complete.
pub trait MetricsSink {
    fn record(&mut self, record: &EpochRecord, seconds: f64) -> Result<()>;
}

impl MetricsSink for () {
    fn record(&mut self, _: &EpochRecord, _: f64) -> Result<()> {
        Ok(())
    }
}

impl MetricsSink for Vec<EpochRecord> {
    fn record(&mut self, record: &EpochRecord, _: f64) -> Result<()> {
        self.push(record.clone());
        Ok(())
    }
}

/// Fresh model for `cfg`, drawn from the seed's init streams.
pub fn init_model(dim_a: usize, dim_b: usize, cfg: &TrainConfig) -> Result<Model> {
    Model::new(
        dim_a,
        dim_b,
        cfg.hidden,
        cfg.embed_dim,
        cfg.num_classes,
        &mut stream(cfg.seed, "encoder-init"),
        &mut stream(cfg.seed, "prototype-init"),
    )
}

pub fn train(ds: &PairedDataset, cfg: &TrainConfig) -> Result<(Model, TrainHistory)> {
    train_with_sink(ds, cfg, &mut ())
}

pub fn train_with_sink(
    ds: &PairedDataset,
    cfg: &TrainConfig,
    sink: &mut dyn MetricsSink,
) -> Result<(Model, TrainHistory)> {
    let mut train_view = ds.pairs(Split::Train);
    if let Some(n) = cfg.train_subset {
        train_view = train_view.head(n);
    }
    train_pairs(&train_view, &ds.pairs(Split::Val), cfg, sink)
}

/// Trains on unlabeled pairs; `val` drives model selection.
pub fn train_pairs(
    train: &PairView,
    val: &PairView,
    cfg: &TrainConfig,
    sink: &mut dyn MetricsSink,
) -> Result<(Model, TrainHistory)> {
    cfg.validate()?;
    if train.len() < cfg.batch_size {
        return Err(Error::Input(format!(
            "{} training pairs hold no full batch of {}",
            train.len(),
            cfg.batch_size
        )));
    }
    if val.is_empty() {
        return Err(Error::Input("validation split is empty".into()));
    }
    if cfg.loss_mode == LossMode::SwampCombined
        && cfg.queue_capacity > 0
        && cfg.queue_capacity < cfg.num_classes
    {
        log::warn!(
            "queue of {} rows is smaller than the {} classes it is balanced over",
            cfg.queue_capacity,
            cfg.num_classes
        );
    }

    let start = Instant::now();
    let mut history = TrainHistory::default();
    let model = init_model(train.xa.cols(), train.xb.cols(), cfg)?;
    let model = match cfg.init {
        Init::Random => {
            let mut rng = stream(cfg.seed, "shuffle");
            run_phase(
                Phase::Main,
                model,
                train,
                val,
                cfg,
                &mut rng,
                sink,
                &mut history,
            )?
        }
        Init::Warmstart => {
            let pre_cfg = TrainConfig {
                loss_mode: LossMode::ContrastiveOnly,
                ..cfg.clone()
            };
            let mut rng = stream(cfg.seed, "shuffle");
            let mut model = run_phase(
                Phase::Pretrain,
                model,
                train,
                val,
                &pre_cfg,
                &mut rng,
                sink,
                &mut history,
            )?;
            model.restart(&mut stream(cfg.seed, "prototype-restart"))?;
            let main_cfg = TrainConfig {
                loss_mode: LossMode::SwampCombined,
                ..cfg.clone()
            };
            let mut rng = stream(cfg.seed, "shuffle-warmstart");
            run_phase(
                Phase::Main,
                model,
                train,
                val,
                &main_cfg,
                &mut rng,
                sink,
                &mut history,
            )?
        }
    };
    history.wall_seconds = start.elapsed().as_secs_f64();
    Ok((model, history))
}

#[allow(clippy::too_many_arguments)]
fn run_phase<R: Rng>(
    phase: Phase,
    mut model: Model,
    train: &PairView,
    val: &PairView,
    cfg: &TrainConfig,
    rng: &mut R,
    sink: &mut dyn MetricsSink,
    history: &mut TrainHistory,
) -> Result<Model> {
    let adam = Adam::new(cfg.lr);
    let mut queue = FeatureQueue::new(cfg.queue_capacity);
    let bs = cfg.batch_size;
    let n_batches = train.len() / bs;
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut best: Option<(f64, usize, Model)> = None;

    for _ in 0..cfg.epochs {
        // Epochs are numbered across phases.
        let epoch = history.records.len() + 1;
        let t0 = Instant::now();
        order.shuffle(rng);
        let (mut sum_c, mut sum_s) = (0.0, 0.0);
        for batch in 0..n_batches {
            let idx = &order[batch * bs..(batch + 1) * bs];
            let xa = train.xa.select_rows(idx);
            let xb = train.xb.select_rows(idx);
            let (lc, ls) = step(
                &mut model,
                &mut queue,
                &xa,
                &xb,
                cfg,
                &adam,
                &mut history.solver,
            )
            .map_err(|e| match e {
                Error::NumericAbort {
                    contrastive, swamp, ..
                } => Error::NumericAbort {
                    epoch,
                    batch,
                    contrastive,
                    swamp,
                },
                other => other,
            })?;
            sum_c += lc;
            sum_s += ls.unwrap_or(0.0);
        }
        let val_r1 = validation_r1(&model, val)?;
        let is_best = best.as_ref().is_none_or(|(b, _, _)| val_r1 > *b);
        if is_best {
            best = Some((val_r1, epoch, model.clone()));
        }
        let record = EpochRecord {
            phase,
            epoch,
            loss_contrastive: sum_c / n_batches as f64,
            loss_swamp: (cfg.loss_mode == LossMode::SwampCombined)
                .then(|| sum_s / n_batches as f64),
            val_r1_pair: val_r1,
            is_best,
        };
        let seconds = t0.elapsed().as_secs_f64();
        log::info!(
            "{phase:?} epoch {epoch}: Lc {:.4} Ls {} val R@1 {val_r1:.2}{} ({seconds:.1}s)",
            record.loss_contrastive,
            record
                .loss_swamp
                .map_or("-".to_string(), |v| format!("{v:.4}")),
            if is_best { " *" } else { "" }
        );
        sink.record(&record, seconds)?;
        history.records.push(record);
        history.epoch_seconds.push(seconds);
    }
    let (score, epoch, model) = best.expect("epochs >= 1");
    history.best_epoch = epoch;
    history.best_val_r1_pair = score;
    Ok(model)
}

/// One optimizer step on a minibatch; returns the contrastive and swapped
/// losses before the update.
fn step(
    model: &mut Model,
    queue: &mut FeatureQueue,
    xa: &Matrix,
    xb: &Matrix,
    cfg: &TrainConfig,
    adam: &Adam,
    stats: &mut SolverStats,
) -> Result<(f64, Option<f64>)> {
    let mut tape = Tape::new();
    let fa = model.embed_taped(&mut tape, Modality::A, xa)?;
    let fb = model.embed_taped(&mut tape, Modality::B, xb)?;
    let s = similarity_matrix(&mut tape, fa, fb)?;
    let lc = contrastive_loss(&mut tape, s, cfg.margin)?;

    let (loss, ls) = match cfg.loss_mode {
        LossMode::ContrastiveOnly => (lc, None),
        LossMode::SwampCombined => {
            queue.push(tape.value(fa), tape.value(fb))?;
            let snap = queue.snapshot()?;
            let (target_a, target_b) =
                swapped_targets(&snap, model.prototype_values(), cfg, stats)?;
            let protos = tape.param(model.params(), model.prototypes().id());
            let logp_a = class_posteriors(&mut tape, fa, protos, cfg.tau)?;
            let logp_b = class_posteriors(&mut tape, fb, protos, cfg.tau)?;
            let ls = swamp_loss(&mut tape, &target_a, &target_b, logp_a, logp_b)?;
            (total_loss(&mut tape, lc, ls, cfg.lambda)?, Some(ls))
        }
    };
    let lc_value = tape.value(lc).item();
    let ls_value = ls.map(|v| tape.value(v).item());
    if !lc_value.is_finite()
        || ls_value.is_some_and(|v| !v.is_finite())
        || !tape.value(loss).item().is_finite()
    {
        return Err(Error::NumericAbort {
            epoch: 0,
            batch: 0,
            contrastive: lc_value,
            swamp: ls_value.unwrap_or(f64::NAN),
        });
    }

    let params = model.params_mut();
    params.zero_grad();
    tape.backward(loss, params)?;
    adam.step(params.iter_mut());
    let protos = *model.prototypes();
    protos.project_unit(model.params_mut())?;
    Ok((lc_value, ls_value))
}

/// Transport targets for the minibatch rows of `snap`: modality A's targets
/// are solved from modality B's posteriors and vice versa. Rows sum to one.
pub fn swapped_targets(
    snap: &QueueSnapshot,
    prototypes: &Matrix,
    cfg: &TrainConfig,
    stats: &mut SolverStats,
) -> Result<(Matrix, Matrix)> {
    let logp_a = class_posteriors_detached(&snap.a, prototypes, cfg.tau)?;
    let logp_b = class_posteriors_detached(&snap.b, prototypes, cfg.tau)?;
    let rows = snap.batch_indices();
    let mut solve = |logp_other: &Matrix| -> Result<Matrix> {
        let (plan, state) = sinkhorn_solve(
            &swap_cost(logp_other)?,
            cfg.eta,
            cfg.sk_max_iters,
            cfg.sk_tol,
        )?;
        stats.solves += 1;
        stats.total_iterations += state.iterations_used;
        stats.capped += usize::from(!state.converged(cfg.sk_tol));
        stats.max_final_residual = stats.max_final_residual.max(state.final_residual);
        let plan = match cfg.assignment {
            Assignment::Soft => plan,
            Assignment::Hard => harden(&plan),
        };
        plan.conditional_rows(&rows)
    };
    let target_a = solve(&logp_b)?;
    let target_b = solve(&logp_a)?;
    Ok((target_a, target_b))
}

/// Pair-based R@1 (percent) retrieving B from A over `val`.
pub fn validation_r1(model: &Model, val: &PairView) -> Result<f64> {
    let fa = model.embed(Modality::A, &val.xa)?;
    let fb = model.embed(Modality::B, &val.xb)?;
    pair_recall_at_1(&fa, &fb)
}

/// Training objective of `model` on consecutive minibatches of `pairs`,
/// with transport targets solved per batch (no queue) and no updates.
/// Returns the mean contrastive and swapped losses.
pub fn batch_objective(model: &Model, pairs: &PairView, cfg: &TrainConfig) -> Result<(f64, f64)> {
    let bs = cfg.batch_size;
    let n_batches = pairs.len() / bs;
    if n_batches == 0 {
        return Err(Error::Input("no full batch to evaluate".into()));
    }
    let mut stats = SolverStats::default();
    let (mut sum_c, mut sum_s) = (0.0, 0.0);
    for b in 0..n_batches {
        let idx: Vec<usize> = (b * bs..(b + 1) * bs).collect();
        let xa = pairs.xa.select_rows(&idx);
        let xb = pairs.xb.select_rows(&idx);
        let mut tape = Tape::new();
        let fa = model.embed_taped(&mut tape, Modality::A, &xa)?;
        let fb = model.embed_taped(&mut tape, Modality::B, &xb)?;
        let s = similarity_matrix(&mut tape, fa, fb)?;
        let lc = contrastive_loss(&mut tape, s, cfg.margin)?;
        let mut queue = FeatureQueue::new(0);
        queue.push(tape.value(fa), tape.value(fb))?;
        let (ta, tb) = swapped_targets(
            &queue.snapshot()?,
            model.prototype_values(),
            cfg,
            &mut stats,
        )?;
        let protos = tape.param(model.params(), model.prototypes().id());
        let logp_a = class_posteriors(&mut tape, fa, protos, cfg.tau)?;
        let logp_b = class_posteriors(&mut tape, fb, protos, cfg.tau)?;
        let ls = swamp_loss(&mut tape, &ta, &tb, logp_a, logp_b)?;
        sum_c += tape.value(lc).item();
        sum_s += tape.value(ls).item();
    }
    Ok((sum_c / n_batches as f64, sum_s / n_batches as f64))
}

/// Test-time retrieval reports for both directions and both error types.
pub fn evaluate_split(
    model: &Model,
    ds: &PairedDataset,
    split: Split,
) -> Result<Vec<RetrievalReport>> {
    let view = ds.pairs(split);
    let labels = ds.labels_of(split);
    let fa = model.embed(Modality::A, &view.xa)?;
    let fb = model.embed(Modality::B, &view.xb)?;
    let mut out = Vec::with_capacity(4);
    for direction in [Direction::AToB, Direction::BToA] {
        let (q, g) = match direction {
            Direction::AToB => (&fa, &fb),
            Direction::BToA => (&fb, &fa),
        };
        for error_type in [ErrorType::Pair, ErrorType::Class] {
            out.push(evaluate_paired(q, g, &labels, direction, error_type)?);
        }
    }
    Ok(out)
}
