//! Scoring, losses, negative sampling and the training loop.
//!
//! A candidate's score is `sigmoid(F([h_o ‖ r]))` where `F` is the
//! feed-forward head; appending the query relation embedding keeps scores
//! defined (and query-dependent) even for unreachable candidates with a
//! zero path state. The objective is negative log-likelihood over the
//! positive and `n` sampled negatives, plus an orthogonality regularizer
//! `‖RᵀR - αI‖` on the relation table. Parameters are updated with Adam.
//!
//! One training step covers one timestamp: every query grouped under that
//! timestamp propagates over the same history graph, per-query gradients
//! are computed in parallel and reduced in a fixed order (so runs are
//! deterministic for any thread count), and the regularizer is added once
//! per step.

use crate::data::{history_window, DatasetSplit, Quadruple, SnapshotSequence};
use crate::error::ModelError;
use crate::eval::{self, EvalConfig};
use crate::graph::HistoryTemporalGraph;
use crate::model::{Model, ModelVars};
use crate::path::{propagate, GateMode, Query};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use rayon::prelude::*;
use std::collections::BTreeMap;
use tkgr_grad::{Reduce, Tape, Tensor, Var};

/// Probabilities are clamped to `[CLAMP, 1 - CLAMP]` inside the loss so
/// logs stay finite.
pub const PROB_CLAMP: f64 = 1e-12;

/// Training hyperparameters.
#[derive(Clone, Debug)]
pub struct TrainConfig {
    /// Negatives sampled per positive.
    pub n_negatives: usize,
    /// Scale of the identity target in the relation regularizer.
    pub alpha: f64,
    pub learning_rate: f64,
    pub max_epochs: usize,
    /// History window length m.
    pub history_len: usize,
    pub seed: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    /// Global-norm gradient clip; `None` disables clipping.
    pub clip_norm: Option<f64>,
    /// Query-level parallelism; 1 is fully sequential.
    pub threads: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            n_negatives: 64,
            alpha: 1.0,
            learning_rate: 5e-4,
            max_epochs: 20,
            history_len: 8,
            seed: 0,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            clip_norm: None,
            threads: default_threads(),
        }
    }
}

pub fn default_threads() -> usize {
    std::thread::available_parallelism()
        .map(|n| n.get())
        .unwrap_or(1)
}

/// Per-epoch training log entry.
#[derive(Clone, Debug)]
pub struct EpochStats {
    pub epoch: usize,
    /// Mean per-positive link loss over the epoch.
    pub loss_tkg: f64,
    /// Mean regularizer value over the epoch's steps.
    pub loss_reg: f64,
    /// loss_tkg + loss_reg, asserted to decompose exactly.
    pub loss_total: f64,
    pub valid_mrr: f64,
    /// Queries skipped because their history window was empty.
    pub skipped_queries: usize,
}

/// Outcome of [`train`].
pub struct TrainReport {
    pub epochs: Vec<EpochStats>,
    /// Parameters from the epoch with the best validation MRR.
    pub best_model: Model,
    pub best_epoch: usize,
    pub best_valid_mrr: f64,
}

/// Scores every candidate: `sigmoid(F([h_o ‖ r]))`, one probability per
/// entity, returned as a `num_entities x 1` column.
pub fn score_all<'t>(
    vars: &ModelVars<'t>,
    state: Var<'t>,
    query_rel_row: Var<'t>,
) -> Var<'t> {
    let n = state.value().rows();
    let d = state.value().cols();
    let rel = query_rel_row.reshape(vec![d]).broadcast_row(n);
    let feat = state.concat_cols(rel);
    let hidden = feat.matmul(vars.head_w1).add_row(vars.head_b1).relu();
    hidden
        .matmul(vars.head_w2)
        .add_row(vars.head_b2)
        .sigmoid()
}

/// Uniformly corrupts the object with a different entity; relation and
/// timestamp are preserved so negatives live at the query's timestamp.
/// Subject corruption arises from querying the inverse relation.
pub fn sample_negatives(
    positive: &Quadruple,
    num_entities: usize,
    n: usize,
    rng: &mut ChaCha12Rng,
) -> Vec<Quadruple> {
    assert!(n >= 1, "need at least one negative");
    assert!(num_entities >= 2, "need at least two entities to corrupt");
    (0..n)
        .map(|_| {
            let mut o = rng.gen_range(0..num_entities);
            while o == positive.object {
                o = rng.gen_range(0..num_entities);
            }
            Quadruple::new(positive.subject, positive.relation, o, positive.timestamp)
        })
        .collect()
}

/// `-log p_pos - (1/n) Σ log(1 - p_neg_j)`, probabilities clamped.
pub fn loss_tkg<'t>(p_pos: Var<'t>, p_negs: Var<'t>) -> Var<'t> {
    let pos_term = p_pos
        .clamp(PROB_CLAMP, 1.0 - PROB_CLAMP)
        .log()
        .neg()
        .reshape(vec![]);
    let neg_term = p_negs
        .clamp(PROB_CLAMP, 1.0 - PROB_CLAMP)
        .neg()
        .add_scalar(1.0)
        .log()
        .reduce(Reduce::Mean, None)
        .neg();
    pos_term.add(neg_term)
}

/// Frobenius norm of `RᵀR - αI` (I is d x d).
pub fn loss_reg<'t>(tape: &'t Tape, relations: Var<'t>, alpha: f64) -> Var<'t> {
    let d = relations.value().cols();
    let gram = relations.transpose().matmul(relations);
    let target = tape.constant(Tensor::eye(d, alpha));
    let diff = gram.sub(target);
    // tiny epsilon keeps sqrt differentiable at the regularizer's zero
    diff.mul(diff)
        .reduce(Reduce::Sum, None)
        .add_scalar(1e-24)
        .sqrt()
}

/// Adam optimizer state over the model's named parameters.
pub struct Adam {
    step: u64,
    m: BTreeMap<String, Tensor>,
    v: BTreeMap<String, Tensor>,
}

impl Adam {
    pub fn new() -> Self {
        Adam {
            step: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }

    /// Applies one update from named gradients; missing names are treated
    /// as zero gradient.
    pub fn step(&mut self, model: &mut Model, grads: &BTreeMap<String, Tensor>, cfg: &TrainConfig) {
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - cfg.beta1.powi(t);
        let bc2 = 1.0 - cfg.beta2.powi(t);
        let scale = clip_scale(grads, cfg.clip_norm);
        for (name, param) in model.named_params_mut() {
            let Some(grad) = grads.get(&name) else {
                continue;
            };
            let m = self
                .m
                .entry(name.clone())
                .or_insert_with(|| Tensor::zeros_like(param));
            let v = self
                .v
                .entry(name)
                .or_insert_with(|| Tensor::zeros_like(param));
            for i in 0..param.len() {
                let g = grad.data()[i] * scale;
                let mi = cfg.beta1 * m.data()[i] + (1.0 - cfg.beta1) * g;
                let vi = cfg.beta2 * v.data()[i] + (1.0 - cfg.beta2) * g * g;
                m.data_mut()[i] = mi;
                v.data_mut()[i] = vi;
                let m_hat = mi / bc1;
                let v_hat = vi / bc2;
                param.data_mut()[i] -= cfg.learning_rate * m_hat / (v_hat.sqrt() + cfg.adam_eps);
            }
        }
    }
}

impl Default for Adam {
    fn default() -> Self {
        Self::new()
    }
}

fn clip_scale(grads: &BTreeMap<String, Tensor>, clip_norm: Option<f64>) -> f64 {
    let Some(max_norm) = clip_norm else {
        return 1.0;
    };
    let total: f64 = grads
        .values()
        .map(|g| g.data().iter().map(|v| v * v).sum::<f64>())
        .sum();
    let norm = total.sqrt();
    if norm > max_norm {
        max_norm / norm
    } else {
        1.0
    }
}

/// Queries at one timestamp grouped by (subject, relation); each group
/// shares a single propagation pass.
fn group_queries(facts: &[Quadruple]) -> BTreeMap<(usize, usize), Vec<usize>> {
    let mut groups: BTreeMap<(usize, usize), Vec<usize>> = BTreeMap::new();
    for q in facts {
        groups.entry((q.subject, q.relation)).or_default().push(q.object);
    }
    groups
}

/// One (subject, relation) query group at a timestamp: all its gold
/// objects share a single propagation pass.
struct GroupJob {
    subject: usize,
    relation: usize,
    gold_objects: Vec<usize>,
    negatives: Vec<Vec<usize>>,
}

/// Forward/backward for one query group. Returns the summed per-positive
/// loss and named gradients of the summed loss.
fn query_group_pass(
    model: &Model,
    graph: &HistoryTemporalGraph,
    time: usize,
    job: &GroupJob,
) -> Result<(f64, BTreeMap<String, Tensor>), ModelError> {
    let tape = Tape::new();
    let vars = model.vars(&tape);
    let prop = propagate(
        &tape,
        model,
        &vars,
        graph,
        Query {
            subject: job.subject,
            relation: job.relation,
            time,
        },
        GateMode::Off,
    )?;
    let probs = score_all(&vars, prop.state, prop.query_rel);
    let mut total: Option<Var> = None;
    for (gold, negs) in job.gold_objects.iter().zip(&job.negatives) {
        let p_pos = probs.gather_rows(&[*gold]).reshape(vec![]);
        let p_negs = probs.gather_rows(negs).reshape(vec![negs.len()]);
        let loss = loss_tkg(p_pos, p_negs);
        total = Some(match total {
            Some(acc) => acc.add(loss),
            None => loss,
        });
    }
    let total = total.expect("query group with no positives");
    let grads = tape.backward(total);
    let mut named = BTreeMap::new();
    for (name, var) in vars.named() {
        if let Some(g) = grads.get(var) {
            named.insert(name, g.clone());
        }
    }
    Ok((total.item(), named))
}

fn accumulate_into(acc: &mut BTreeMap<String, Tensor>, part: &BTreeMap<String, Tensor>, scale: f64) {
    for (name, g) in part {
        match acc.get_mut(name) {
            Some(existing) => {
                for (a, b) in existing.data_mut().iter_mut().zip(g.data()) {
                    *a += b * scale;
                }
            }
            None => {
                acc.insert(name.clone(), g.map(|v| v * scale));
            }
        }
    }
}

/// Trains on the split's train sequence, evaluating validation MRR each
/// epoch and retaining the best-validation parameters.
pub fn train(
    model: &mut Model,
    split: &DatasetSplit,
    cfg: &TrainConfig,
    mut log: impl FnMut(&EpochStats),
) -> Result<TrainReport, ModelError> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.threads.max(1))
        .build()
        .map_err(|e| ModelError::Config(format!("thread pool: {e}")))?;
    let num_entities = split.num_entities();
    let mut optimizer = Adam::new();
    let mut epochs = Vec::new();
    let mut best: Option<(usize, f64, Model)> = None;

    // validation context: windows may draw on train plus earlier valid facts
    let valid_context = {
        let mut snapshots = split.train.snapshots.clone();
        snapshots.extend(split.valid.snapshots.iter().cloned());
        snapshots.sort_by_key(|(t, _)| *t);
        SnapshotSequence {
            snapshots,
            ..split.train.clone()
        }
    };

    for epoch in 0..cfg.max_epochs {
        let mut sum_tkg = 0.0;
        let mut n_positives = 0usize;
        let mut sum_reg = 0.0;
        let mut n_steps = 0usize;
        let mut skipped = 0usize;

        for (t, facts) in split.train.snapshots.clone() {
            let window = history_window(&split.train, t, cfg.history_len);
            if window.is_empty() {
                skipped += facts.len();
                continue;
            }
            let graph = HistoryTemporalGraph::build(&window, num_entities, t)?;
            let groups = group_queries(&facts);

            // negatives drawn deterministically per (epoch, timestamp, group)
            let jobs: Vec<GroupJob> = groups
                .into_iter()
                .enumerate()
                .map(|(gi, ((subject, relation), gold_objects))| {
                    let mut rng = ChaCha12Rng::seed_from_u64(cfg.seed);
                    rng.set_stream(((epoch as u64) << 40) ^ ((t as u64) << 20) ^ gi as u64);
                    let negatives = gold_objects
                        .iter()
                        .map(|&gold| {
                            sample_negatives(
                                &Quadruple::new(subject, relation, gold, t),
                                num_entities,
                                cfg.n_negatives,
                                &mut rng,
                            )
                            .into_iter()
                            .map(|q| q.object)
                            .collect()
                        })
                        .collect();
                    GroupJob {
                        subject,
                        relation,
                        gold_objects,
                        negatives,
                    }
                })
                .collect();

            type GroupResult = Result<(f64, usize, BTreeMap<String, Tensor>), ModelError>;
            let results: Vec<GroupResult> = pool.install(|| {
                jobs.par_iter()
                    .map(|job| {
                        let (loss, grads) = query_group_pass(model, &graph, t, job)?;
                        Ok((loss, job.gold_objects.len(), grads))
                    })
                    .collect()
            });

            // fixed-order reduction keeps runs deterministic under parallelism
            let mut step_grads: BTreeMap<String, Tensor> = BTreeMap::new();
            let mut step_loss = 0.0;
            let mut step_positives = 0usize;
            for result in results {
                let (loss, count, grads) = result?;
                step_loss += loss;
                step_positives += count;
                accumulate_into(&mut step_grads, &grads, 1.0);
            }
            if step_positives == 0 {
                continue;
            }
            // loss_tkg for the step is the mean over its positives
            let inv = 1.0 / step_positives as f64;
            for g in step_grads.values_mut() {
                for v in g.data_mut() {
                    *v *= inv;
                }
            }
            // regularizer once per step
            let reg_tape = Tape::new();
            let rel_var = reg_tape.var(model.relations.clone());
            let reg = loss_reg(&reg_tape, rel_var, cfg.alpha);
            let reg_value = reg.item();
            let reg_grads = reg_tape.backward(reg);
            if let Some(g) = reg_grads.get(rel_var) {
                let part = BTreeMap::from([("relations".to_string(), g.clone())]);
                accumulate_into(&mut step_grads, &part, 1.0);
            }

            optimizer.step(model, &step_grads, cfg);
            sum_tkg += step_loss;
            n_positives += step_positives;
            sum_reg += reg_value;
            n_steps += 1;
        }

        let loss_tkg = if n_positives > 0 {
            sum_tkg / n_positives as f64
        } else {
            0.0
        };
        let loss_reg_mean = if n_steps > 0 { sum_reg / n_steps as f64 } else { 0.0 };
        // the logged total is exactly the sum of the two logged parts
        let loss_total = loss_tkg + loss_reg_mean;

        let eval_cfg = EvalConfig {
            history_len: cfg.history_len,
            threads: cfg.threads,
            ..EvalConfig::default()
        };
        let (_, valid_metrics) =
            eval::evaluate(model, &valid_context, &split.valid, &eval_cfg)?;
        let stats = EpochStats {
            epoch,
            loss_tkg,
            loss_reg: loss_reg_mean,
            loss_total,
            valid_mrr: valid_metrics.mrr,
            skipped_queries: skipped,
        };
        log(&stats);
        let improved = best
            .as_ref()
            .map(|(_, mrr, _)| valid_metrics.mrr > *mrr)
            .unwrap_or(true);
        if improved {
            best = Some((epoch, valid_metrics.mrr, model.clone()));
        }
        epochs.push(stats);
    }

    let (best_epoch, best_valid_mrr, best_model) = best.unwrap_or((0, 0.0, model.clone()));
    Ok(TrainReport {
        epochs,
        best_model,
        best_epoch,
        best_valid_mrr,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;

    #[test]
    fn zero_head_scores_half_for_every_candidate() {
        let mut model = Model::init(ModelConfig::new(2, 4), 1).unwrap();
        model.head.w1 = Tensor::zeros(vec![8, 4]);
        model.head.b1 = Tensor::zeros(vec![4]);
        model.head.w2 = Tensor::zeros(vec![4, 1]);
        model.head.b2 = Tensor::zeros(vec![1]);
        let tape = Tape::new();
        let vars = model.vars(&tape);
        let state = tape.var(Tensor::from_fn(3, 4, |i, j| (i + j) as f64));
        let rel = tape.var(Tensor::matrix(1, 4, vec![0.1, 0.2, 0.3, 0.4]));
        let probs = score_all(&vars, state, rel);
        for &p in probs.value().data() {
            assert_eq!(p, 0.5);
        }
    }

    #[test]
    fn unreachable_candidate_score_depends_on_query_relation() {
        let model = Model::init(ModelConfig::new(4, 6), 3).unwrap();
        let tape = Tape::new();
        let vars = model.vars(&tape);
        let zero_state = tape.var(Tensor::zeros(vec![2, 6]));
        let r1 = tape.var(Tensor::matrix(1, 6, vec![0.5, -0.1, 0.2, 0.3, -0.2, 0.4]));
        let r2 = tape.var(Tensor::matrix(1, 6, vec![-0.3, 0.2, 0.1, -0.5, 0.6, 0.0]));
        let p1 = score_all(&vars, zero_state, r1);
        let p2 = score_all(&vars, zero_state, r2);
        assert_ne!(p1.value().data()[0], p2.value().data()[0]);
    }

    #[test]
    fn score_odds_scale_with_logit_shift() {
        // raising the logit by 1 multiplies the odds by e
        let logit = 0.37f64;
        let p = 1.0 / (1.0 + (-logit).exp());
        let p_shift = 1.0 / (1.0 + (-(logit + 1.0)).exp());
        let odds = p / (1.0 - p);
        let odds_shift = p_shift / (1.0 - p_shift);
        assert!((odds_shift / odds - std::f64::consts::E).abs() < 1e-12);
    }

    #[test]
    fn negatives_always_differ_from_the_positive_object() {
        let mut rng = ChaCha12Rng::seed_from_u64(11);
        let pos = Quadruple::new(0, 0, 3, 5);
        for _ in 0..100 {
            for q in sample_negatives(&pos, 10, 100, &mut rng) {
                assert_ne!(q.object, 3);
                assert_eq!((q.subject, q.relation, q.timestamp), (0, 0, 5));
            }
        }
    }

    #[test]
    fn two_entities_leave_one_possible_negative() {
        let mut rng = ChaCha12Rng::seed_from_u64(7);
        let pos = Quadruple::new(0, 0, 0, 1);
        for q in sample_negatives(&pos, 2, 64, &mut rng) {
            assert_eq!(q.object, 1);
        }
    }

    #[test]
    fn loss_tkg_matches_hand_arithmetic() {
        // p_pos = 0.5 with one negative at 0.5: -ln 0.5 - ln 0.5 = 2 ln 2
        let tape = Tape::new();
        let p_pos = tape.var(Tensor::scalar(0.5));
        let p_negs = tape.var(Tensor::vector(vec![0.5]));
        let loss = loss_tkg(p_pos, p_negs);
        assert!((loss.item() - 2.0 * std::f64::consts::LN_2).abs() < 1e-12);
    }

    #[test]
    fn loss_tkg_perfect_classifier_is_zero_up_to_clamp() {
        let tape = Tape::new();
        let p_pos = tape.var(Tensor::scalar(1.0));
        let p_negs = tape.var(Tensor::vector(vec![0.0, 0.0]));
        let loss = loss_tkg(p_pos, p_negs);
        assert!(loss.item().abs() < 1e-9);
    }

    #[test]
    fn loss_tkg_decreases_when_a_negative_drops() {
        let eval = |neg: f64| {
            let tape = Tape::new();
            let p_pos = tape.var(Tensor::scalar(0.7));
            let p_negs = tape.var(Tensor::vector(vec![neg, 0.4]));
            loss_tkg(p_pos, p_negs).item()
        };
        assert!(eval(0.3) < eval(0.5));
    }

    #[test]
    fn loss_reg_zero_for_scaled_orthonormal_columns() {
        // columns orthonormal scaled by sqrt(alpha) makes R^T R = alpha I
        let alpha = 2.25f64;
        let s = alpha.sqrt();
        let tape = Tape::new();
        let r = tape.var(Tensor::matrix(
            4,
            2,
            vec![s, 0.0, 0.0, s, 0.0, 0.0, 0.0, 0.0],
        ));
        let loss = loss_reg(&tape, r, alpha);
        assert!(loss.item() < 1e-9);
        // at the regularizer's zero the gradient vanishes
        let grads = tape.backward(loss);
        let gnorm: f64 = grads
            .get(r)
            .unwrap()
            .data()
            .iter()
            .map(|v| v.abs())
            .fold(0.0, f64::max);
        assert!(gnorm < 1e-12);
    }

    #[test]
    fn loss_reg_zero_matrix_gives_sqrt_d() {
        // R = 0, alpha = 1, d = 2: ‖-I‖_F = sqrt(2)
        let tape = Tape::new();
        let r = tape.var(Tensor::zeros(vec![3, 2]));
        let loss = loss_reg(&tape, r, 1.0);
        assert!((loss.item() - 2f64.sqrt()).abs() < 1e-9);
    }

    #[test]
    fn adam_first_step_moves_only_touched_parameters() {
        let mut model = Model::init(ModelConfig::new(2, 4), 5).unwrap();
        let before = model.relations.clone();
        let mut grads = BTreeMap::new();
        let mut g = Tensor::zeros(vec![2, 4]);
        g.data_mut()[0] = 1.0; // only relation 0, coordinate 0
        grads.insert("relations".to_string(), g);
        let cfg = TrainConfig::default();
        let mut adam = Adam::new();
        adam.step(&mut model, &grads, &cfg);
        assert_ne!(model.relations.data()[0], before.data()[0]);
        for i in 1..8 {
            assert_eq!(model.relations.data()[i], before.data()[i]);
        }
        // untouched parameter blocks stay bit-identical
        assert_eq!(model.head.w1.data(), {
            let fresh = Model::init(ModelConfig::new(2, 4), 5).unwrap();
            fresh.head.w1.data().to_vec()
        });
    }
}
