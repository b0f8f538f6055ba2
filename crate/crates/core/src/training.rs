//! Triplet training: best-positive selection, hard-negative mining over a
//! cached database subset, grouped Adam and early stopping.

use log::{info, warn};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Graph, Var};
use crate::config::TrainConfig;
use crate::dataset::{geo_distance, GeoTag};
use crate::error::{Error, Result};
use crate::eval::{cosine, describe_all, split_recall, SeqTag, SequenceSet, SplitSequences, Threshold};
use crate::model::SequenceModel;
use crate::params::{ParamGroup, ParamStore};

fn l2_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// `sum_k max(|a - p| - |a - n_k| + margin, 0)` on plain vectors.
pub fn triplet_loss(a: &[f64], p: &[f64], negatives: &[Vec<f64>], margin: f64) -> Result<f64> {
    if negatives.is_empty() {
        return Err(Error::usage("triplet loss needs at least one negative"));
    }
    if p.len() != a.len() || negatives.iter().any(|n| n.len() != a.len()) {
        return Err(Error::shape("triplet descriptors differ in dimension"));
    }
    let dap = l2_dist(a, p);
    Ok(negatives.iter().map(|n| (dap - l2_dist(a, n) + margin).max(0.0)).sum())
}

/// Graph version of [`triplet_loss`].
pub fn triplet_loss_graph(g: &mut Graph, a: Var, p: Var, negatives: &[Var], margin: f64) -> Result<Var> {
    if negatives.is_empty() {
        return Err(Error::usage("triplet loss needs at least one negative"));
    }
    let d = g.sub(a, p)?;
    let dap = g.norm(d);
    let mut total: Option<Var> = None;
    for &n in negatives {
        let d = g.sub(a, n)?;
        let dan = g.norm(d);
        let diff = g.sub(dap, dan)?;
        let shifted = g.add_scalar(diff, margin);
        let hinge = g.relu(shifted);
        total = Some(match total {
            Some(t) => g.add(t, hinge)?,
            None => hinge,
        });
    }
    Ok(total.expect("at least one negative"))
}

/// Index of the candidate most cosine-similar to the anchor; ties keep the
/// lowest index.
pub fn select_best_positive(anchor: &[f64], candidates: &[&[f64]]) -> Option<usize> {
    let mut best: Option<(usize, f64)> = None;
    for (i, c) in candidates.iter().enumerate() {
        let s = cosine(anchor, c);
        if best.is_none_or(|(_, b)| s > b) {
            best = Some((i, s));
        }
    }
    best.map(|(i, _)| i)
}

/// Descriptors of a database subset, tagged with the optimizer step that
/// produced them.
#[derive(Clone, Debug, PartialEq)]
pub struct MiningCache {
    /// Database sequence indices, ascending.
    pub ids: Vec<usize>,
    pub descriptors: Vec<Vec<f64>>,
    pub iteration: u64,
}

impl MiningCache {
    pub fn get(&self, db_index: usize) -> Option<&[f64]> {
        self.ids
            .binary_search(&db_index)
            .ok()
            .map(|i| self.descriptors[i].as_slice())
    }
}

/// Samples `size` database sequences (all of them when `size >= len`) and
/// describes them with the current parameters.
pub fn refresh_cache(
    model: &SequenceModel,
    db: &SequenceSet,
    size: usize,
    seed: u64,
    iteration: u64,
) -> Result<MiningCache> {
    let n = db.len();
    let ids: Vec<usize> = if size >= n {
        (0..n).collect()
    } else {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut ids = rand::seq::index::sample(&mut rng, n, size).into_vec();
        ids.sort_unstable();
        ids
    };
    let descriptors = ids
        .iter()
        .map(|&i| model.describe(&db.frames(i)))
        .collect::<Result<_>>()?;
    Ok(MiningCache {
        ids,
        descriptors,
        iteration,
    })
}

/// The `k` cached candidates at least `neg_threshold` meters from the anchor
/// with the highest cosine similarity, hardest first. Returns database
/// sequence indices; fewer than `k` are returned (with a warning) when the
/// cache lacks valid candidates.
pub fn mine_hard_negatives(
    anchor: &[f64],
    anchor_tag: &GeoTag,
    cache: &MiningCache,
    db_tags: &[SeqTag],
    k: usize,
    neg_threshold: f64,
) -> Result<Vec<usize>> {
    let mut valid: Vec<(f64, usize)> = Vec::new();
    for (slot, &id) in cache.ids.iter().enumerate() {
        let tag = db_tags
            .get(id)
            .ok_or_else(|| Error::usage(format!("no tag for database sequence {id}")))?;
        if geo_distance(anchor_tag, &tag.tag)? >= neg_threshold {
            valid.push((cosine(anchor, &cache.descriptors[slot]), id));
        }
    }
    valid.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
    if valid.len() < k {
        warn!(
            "only {} of {k} requested negatives are at least {neg_threshold} m from the anchor",
            valid.len()
        );
    }
    Ok(valid.into_iter().take(k).map(|(_, id)| id).collect())
}

pub fn group_lr(cfg: &TrainConfig, group: ParamGroup) -> f64 {
    match group {
        ParamGroup::Tokenizer => cfg.lr_tokenizer,
        ParamGroup::Spatial => cfg.lr_spatial,
        ParamGroup::Temporal => cfg.lr_temporal,
        ParamGroup::NetVlad => cfg.lr_netvlad,
    }
}

/// Adam moments for every tensor of a [`ParamStore`].
#[derive(Clone, Debug)]
pub struct OptimState {
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
    pub step: u64,
}

impl OptimState {
    pub fn new(store: &ParamStore) -> Self {
        let zeros: Vec<Vec<f64>> = store.tensors().iter().map(|t| vec![0.0; t.len()]).collect();
        Self {
            m: zeros.clone(),
            v: zeros,
            step: 0,
        }
    }
}

/// Bias-corrected Adam update from the accumulated gradients, which are
/// cleared afterwards. A non-finite gradient skips the update and returns
/// `false`.
pub fn adam_step(store: &mut ParamStore, state: &mut OptimState, cfg: &TrainConfig) -> Result<bool> {
    if state.m.len() != store.len() {
        return Err(Error::shape("optimizer state does not match the parameter store"));
    }
    let finite = store
        .tensors()
        .iter()
        .all(|t| t.grad().is_none_or(|g| g.iter().all(|x| x.is_finite())));
    if !finite {
        warn!("non-finite gradient, skipping optimizer step");
        store.zero_grads();
        return Ok(false);
    }
    state.step += 1;
    let t = state.step as i32;
    let (b1, b2) = (cfg.adam_beta1, cfg.adam_beta2);
    let c1 = 1.0 - b1.powi(t);
    let c2 = 1.0 - b2.powi(t);
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        let lr = group_lr(cfg, store.group(id));
        let i = id.index();
        let tensor = store.get_mut(id);
        let Some(grad) = tensor.grad().map(<[f64]>::to_vec) else {
            continue;
        };
        let (m, v) = (&mut state.m[i], &mut state.v[i]);
        for (j, w) in tensor.data_mut().iter_mut().enumerate() {
            let gj = grad[j];
            m[j] = b1 * m[j] + (1.0 - b1) * gj;
            v[j] = b2 * v[j] + (1.0 - b2) * gj * gj;
            *w -= lr * (m[j] / c1) / ((v[j] / c2).sqrt() + cfg.adam_eps);
        }
    }
    store.zero_grads();
    Ok(true)
}

/// Triplet loss of full sequences on one graph; parameters are shared, so
/// backward sums their gradients over all branches.
pub fn sequence_triplet_loss(
    g: &mut Graph,
    model: &SequenceModel,
    anchor: &[crate::autodiff::Tensor],
    positive: &[crate::autodiff::Tensor],
    negatives: &[Vec<crate::autodiff::Tensor>],
    margin: f64,
) -> Result<Var> {
    let a = model.forward(g, anchor)?;
    let p = model.forward(g, positive)?;
    let n = negatives
        .iter()
        .map(|f| model.forward(g, f))
        .collect::<Result<Vec<_>>>()?;
    triplet_loss_graph(g, a, p, &n, margin)
}

/// Patience counter on a metric that should increase.
#[derive(Clone, Debug)]
pub struct EarlyStopper {
    pub patience: usize,
    pub best: f64,
    pub stagnant: usize,
}

/// Outcome of one [`EarlyStopper::observe`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Observation {
    /// Strictly better than every earlier value.
    pub improved: bool,
    /// At least as good as the best so far (the checkpoint is refreshed).
    pub keep: bool,
    pub stop: bool,
}

impl EarlyStopper {
    pub fn new(patience: usize) -> Self {
        Self {
            patience,
            best: f64::NEG_INFINITY,
            stagnant: 0,
        }
    }

    pub fn observe(&mut self, value: f64) -> Observation {
        let improved = value > self.best;
        let keep = value >= self.best;
        if improved {
            self.best = value;
            self.stagnant = 0;
        } else {
            self.stagnant += 1;
        }
        Observation {
            improved,
            keep,
            stop: self.patience > 0 && self.stagnant >= self.patience,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StopReason {
    EpochBudget,
    IterationBudget,
    Patience,
    LossTarget,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochStats {
    pub epoch: usize,
    /// Mean triplet loss over the groups of this epoch.
    pub mean_loss: f64,
    pub val_recall5: Option<f64>,
    pub groups: usize,
    pub skipped: usize,
    /// Optimizer steps taken so far.
    pub iterations: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct History {
    pub epochs: Vec<EpochStats>,
    /// Mean group loss of every optimizer step.
    pub step_losses: Vec<f64>,
    pub iterations: u64,
    /// Epoch whose parameters were returned, when validation ran.
    pub best_epoch: Option<usize>,
    pub stop: StopReason,
}

fn snapshot(store: &ParamStore) -> Vec<Vec<f64>> {
    store.tensors().iter().map(|t| t.data().to_vec()).collect()
}

fn restore(store: &mut ParamStore, snap: &[Vec<f64>]) -> Result<()> {
    let ids: Vec<_> = store.ids().collect();
    for (id, data) in ids.into_iter().zip(snap) {
        store.assign(id, data)?;
    }
    Ok(())
}

fn cache_seed(seed: u64, iteration: u64) -> u64 {
    seed ^ iteration.wrapping_mul(0x9E37_79B9_7F4A_7C15)
}

/// Trains `model` in place on query anchors of `train` against its database.
///
/// Each anchor forms one triplet group (best positive within
/// `pos_threshold`, hardest cached negatives beyond `neg_threshold`);
/// `batch_size` groups are accumulated per Adam step. With `val`, Recall@5
/// is measured after every epoch and the best parameters are restored at
/// the end.
pub fn train(
    model: &mut SequenceModel,
    train: &SplitSequences,
    val: Option<&SplitSequences>,
    cfg: &TrainConfig,
) -> Result<History> {
    let mut history = History {
        epochs: Vec::new(),
        step_losses: Vec::new(),
        iterations: 0,
        best_epoch: None,
        stop: StopReason::EpochBudget,
    };
    if cfg.max_epochs == 0 {
        return Ok(history);
    }
    if train.db.is_empty() || train.query.is_empty() {
        return Err(Error::usage("training split has no database or query sequences"));
    }
    if cfg.batch_size == 0 || cfg.cache_refresh == 0 || cfg.negatives == 0 {
        return Err(Error::config(
            "batch_size, cache_refresh and negatives must be positive",
        ));
    }
    let db_tags = train.db.tags();
    let q_tags = train.query.tags();
    let positives: Vec<Vec<usize>> = q_tags
        .iter()
        .map(|q| {
            db_tags
                .iter()
                .enumerate()
                .filter(|(_, d)| geo_distance(&q.tag, &d.tag).is_ok_and(|x| x <= cfg.pos_threshold))
                .map(|(i, _)| i)
                .collect()
        })
        .collect();

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut state = OptimState::new(&model.store);
    let mut stopper = EarlyStopper::new(cfg.patience);
    let mut best: Option<Vec<Vec<f64>>> = None;
    let mut cache: Option<MiningCache> = None;
    let inv_batch = 1.0 / cfg.batch_size as f64;
    model.store.zero_grads();

    'epochs: for epoch in 0..cfg.max_epochs {
        let mut order: Vec<usize> = (0..train.query.len()).collect();
        order.shuffle(&mut rng);
        let (mut epoch_loss, mut groups, mut skipped) = (0.0, 0usize, 0usize);
        let (mut batch_loss, mut in_batch) = (0.0, 0usize);
        let mut budget_hit = false;

        for &qi in &order {
            let it = history.iterations;
            if cache
                .as_ref()
                .is_none_or(|c| c.iteration != it && it.is_multiple_of(cfg.cache_refresh as u64))
            {
                cache = Some(refresh_cache(
                    model,
                    &train.db,
                    cfg.cache_size,
                    cache_seed(cfg.seed, it),
                    it,
                )?);
            }
            let cache_ref = cache.as_ref().expect("cache was just filled");
            if positives[qi].is_empty() {
                warn!(
                    "query sequence {qi} has no database sequence within {} m",
                    cfg.pos_threshold
                );
                skipped += 1;
                continue;
            }

            let mut g = Graph::new();
            let anchor_frames = train.query.frames(qi);
            let a = model.forward(&mut g, &anchor_frames)?;
            let a_val = g.value(a).to_vec();
            let cand: Vec<Vec<f64>> = positives[qi]
                .iter()
                .map(|&d| match cache_ref.get(d) {
                    Some(v) => Ok(v.to_vec()),
                    None => model.describe(&train.db.frames(d)),
                })
                .collect::<Result<_>>()?;
            let refs: Vec<&[f64]> = cand.iter().map(Vec::as_slice).collect();
            let pos = positives[qi][select_best_positive(&a_val, &refs).expect("candidates are non-empty")];
            let negs = mine_hard_negatives(
                &a_val,
                &q_tags[qi].tag,
                cache_ref,
                &db_tags,
                cfg.negatives,
                cfg.neg_threshold,
            )?;
            if negs.is_empty() {
                skipped += 1;
                continue;
            }
            let p = model.forward(&mut g, &train.db.frames(pos))?;
            let n = negs
                .iter()
                .map(|&i| model.forward(&mut g, &train.db.frames(i)))
                .collect::<Result<Vec<_>>>()?;
            let loss = triplet_loss_graph(&mut g, a, p, &n, cfg.margin)?;
            let lv = g.scalar(loss);
            if !lv.is_finite() {
                warn!("non-finite loss for query sequence {qi}, skipping");
                skipped += 1;
                continue;
            }
            let scaled = g.scale(loss, inv_batch);
            g.backward(scaled, model.store.tensors_mut())?;
            epoch_loss += lv;
            groups += 1;
            batch_loss += lv;
            in_batch += 1;

            if in_batch == cfg.batch_size {
                adam_step(&mut model.store, &mut state, cfg)?;
                history.iterations += 1;
                history.step_losses.push(batch_loss / in_batch as f64);
                batch_loss = 0.0;
                in_batch = 0;
                if cfg.max_iterations > 0 && history.iterations >= cfg.max_iterations as u64 {
                    budget_hit = true;
                    break;
                }
            }
        }
        if in_batch > 0 {
            adam_step(&mut model.store, &mut state, cfg)?;
            history.iterations += 1;
            history.step_losses.push(batch_loss / in_batch as f64);
            if cfg.max_iterations > 0 && history.iterations >= cfg.max_iterations as u64 {
                budget_hit = true;
            }
        }
        if groups == 0 {
            return Err(Error::Training(format!(
                "epoch {epoch}: no query sequence produced a valid triplet \
                 (positives within {} m, negatives beyond {} m)",
                cfg.pos_threshold, cfg.neg_threshold
            )));
        }

        let mean_loss = epoch_loss / groups as f64;
        let val_recall5 = match val {
            Some(v) => Some(split_recall(model, v, 5, Threshold::Radius(cfg.val_radius))?),
            None => None,
        };
        info!(
            "epoch {epoch}: loss {mean_loss:.5}, groups {groups}, skipped {skipped}, steps {}{}",
            history.iterations,
            val_recall5.map_or(String::new(), |r| format!(", val R@5 {r:.4}"))
        );
        history.epochs.push(EpochStats {
            epoch,
            mean_loss,
            val_recall5,
            groups,
            skipped,
            iterations: history.iterations,
        });

        if let Some(r) = val_recall5 {
            let obs = stopper.observe(r);
            if obs.keep {
                best = Some(snapshot(&model.store));
                history.best_epoch = Some(epoch);
            }
            if obs.stop {
                history.stop = StopReason::Patience;
                break 'epochs;
            }
        }
        if cfg.loss_target > 0.0 && mean_loss <= cfg.loss_target {
            history.stop = StopReason::LossTarget;
            break;
        }
        if budget_hit {
            history.stop = StopReason::IterationBudget;
            break;
        }
    }

    if let Some(snap) = best {
        restore(&mut model.store, &snap)?;
    }
    Ok(history)
}

/// Descriptors for every cached id, recomputed from scratch (test oracle and
/// diagnostics).
pub fn cache_oracle(model: &SequenceModel, db: &SequenceSet, ids: &[usize]) -> Result<Vec<Vec<f64>>> {
    let all = describe_all(model, db)?;
    Ok(ids.iter().map(|&i| all[i].clone()).collect())
}
