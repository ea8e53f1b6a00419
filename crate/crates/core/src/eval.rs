//! Time-aware filtered ranking evaluation: MRR and Hits@{1, 3, 10}.
//!
//! For a query `(s, r, ?, t)` every entity is a candidate. Under the
//! time-aware filtered setting, only alternative true answers occurring at
//! the same timestamp `t` are removed from the candidate list before the
//! gold entity is ranked; facts from other timestamps are left in. Both
//! query directions are evaluated (object queries and, via the pre-added
//! inverse edges, subject queries) and pooled.
//!
//! Ground-truth facts at time `t` are used only for filtering: the model's
//! input window contains strictly earlier snapshots.

use crate::data::{history_window, Quadruple, SnapshotSequence};
use crate::error::{DataError, ModelError};
use crate::graph::HistoryTemporalGraph;
use crate::learning::score_all;
use crate::model::Model;
use crate::path::{propagate, GateMode, Query};
use rayon::prelude::*;
use std::collections::HashSet;
use tkgr_grad::Tape;

/// How rank ties are resolved.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TieRule {
    /// Tied candidates share the mean of their positions (default).
    Mean,
    /// Gold wins ties.
    Optimistic,
    /// Gold loses ties.
    Pessimistic,
}

/// One ranked query.
#[derive(Clone, Debug)]
pub struct RankResult {
    pub query: Quadruple,
    /// 1-based rank; fractional under the mean tie rule.
    pub rank: f64,
    /// Candidates removed by time-aware filtering.
    pub filtered_count: usize,
}

/// Aggregate ranking metrics.
#[derive(Clone, Copy, Debug, Default)]
pub struct Metrics {
    pub mrr: f64,
    pub hits1: f64,
    pub hits3: f64,
    pub hits10: f64,
    pub count: usize,
}

impl Metrics {
    pub fn report_lines(&self) -> String {
        format!(
            "mrr={:.6}\nhits1={:.6}\nhits3={:.6}\nhits10={:.6}\nqueries={}\n",
            self.mrr, self.hits1, self.hits3, self.hits10, self.count
        )
    }
}

/// Evaluation options.
#[derive(Clone, Debug)]
pub struct EvalConfig {
    pub history_len: usize,
    pub tie_rule: TieRule,
    pub threads: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            history_len: 8,
            tie_rule: TieRule::Mean,
            threads: crate::learning::default_threads(),
        }
    }
}

/// Candidate mask for `(s, r, ?, t)`: removes every `o' != gold` with
/// `(s, r, o')` true at the same timestamp; the gold stays in.
pub fn time_aware_filter(
    subject: usize,
    relation: usize,
    gold_object: usize,
    truth_at_t: &HashSet<(usize, usize, usize)>,
    num_entities: usize,
) -> Result<Vec<bool>, DataError> {
    if !truth_at_t.contains(&(subject, relation, gold_object)) {
        return Err(DataError::GoldMissing {
            s: subject,
            r: relation,
            o: gold_object,
        });
    }
    let mut keep = vec![true; num_entities];
    for &(s, r, o) in truth_at_t {
        if s == subject && r == relation && o != gold_object {
            keep[o] = false;
        }
    }
    Ok(keep)
}

/// Rank of the gold entity among unmasked candidates.
///
/// Mean rule: `1 + #{score > gold} + #{ties}/2`; optimistic drops the tie
/// term, pessimistic counts ties fully.
pub fn rank_of(scores: &[f64], gold: usize, keep: &[bool], tie_rule: TieRule) -> f64 {
    assert_eq!(scores.len(), keep.len(), "mask length mismatch");
    assert!(keep[gold], "gold candidate must be unmasked");
    let gold_score = scores[gold];
    let mut higher = 0usize;
    let mut ties = 0usize;
    for (o, (&score, &kept)) in scores.iter().zip(keep).enumerate() {
        if !kept || o == gold {
            continue;
        }
        if score > gold_score {
            higher += 1;
        } else if score == gold_score {
            ties += 1;
        }
    }
    let rank = match tie_rule {
        TieRule::Mean => 1.0 + higher as f64 + ties as f64 / 2.0,
        TieRule::Optimistic => 1.0 + higher as f64,
        TieRule::Pessimistic => 1.0 + (higher + ties) as f64,
    };
    debug_assert!(rank >= 1.0);
    rank
}

/// MRR and Hits@{1,3,10} over ranks.
pub fn metrics(ranks: &[f64]) -> Result<Metrics, DataError> {
    if ranks.is_empty() {
        return Err(DataError::EmptyRanks);
    }
    let n = ranks.len() as f64;
    let hits = |k: f64| ranks.iter().filter(|&&r| r <= k).count() as f64 / n;
    Ok(Metrics {
        mrr: ranks.iter().map(|r| 1.0 / r).sum::<f64>() / n,
        hits1: hits(1.0),
        hits3: hits(3.0),
        hits10: hits(10.0),
        count: ranks.len(),
    })
}

/// Scores one query against all candidates (forward pass only).
pub fn score_query(
    model: &Model,
    context: &SnapshotSequence,
    query: Query,
    history_len: usize,
) -> Result<Vec<f64>, ModelError> {
    let window = history_window(context, query.time, history_len);
    let graph = HistoryTemporalGraph::build(&window, context.num_entities, query.time)?;
    let tape = Tape::new();
    let vars = model.vars(&tape);
    let prop = propagate(&tape, model, &vars, &graph, query, GateMode::Off)?;
    let probs = score_all(&vars, prop.state, prop.query_rel);
    Ok(probs.value().data().to_vec())
}

/// Evaluates each eval-sequence fact as an object query (inverse edges in
/// the sequence supply the subject direction) and pools the ranks.
pub fn evaluate(
    model: &Model,
    context: &SnapshotSequence,
    eval_seq: &SnapshotSequence,
    cfg: &EvalConfig,
) -> Result<(Vec<RankResult>, Metrics), ModelError> {
    let queries: Vec<Quadruple> = eval_seq.all_facts().copied().collect();
    evaluate_queries(model, context, eval_seq, &queries, cfg)
}

/// Evaluates an explicit query list; `truth_seq` supplies the same-time
/// truth sets used for filtering.
pub fn evaluate_queries(
    model: &Model,
    context: &SnapshotSequence,
    truth_seq: &SnapshotSequence,
    queries: &[Quadruple],
    cfg: &EvalConfig,
) -> Result<(Vec<RankResult>, Metrics), ModelError> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.threads.max(1))
        .build()
        .map_err(|e| ModelError::Config(format!("thread pool: {e}")))?;
    let num_entities = context.num_entities;

    // per-timestamp truth sets (facts of the eval split, inverses included)
    let mut truth: std::collections::BTreeMap<usize, HashSet<(usize, usize, usize)>> =
        std::collections::BTreeMap::new();
    for q in truth_seq.all_facts() {
        truth
            .entry(q.timestamp)
            .or_default()
            .insert((q.subject, q.relation, q.object));
    }

    let results: Vec<Result<RankResult, ModelError>> = pool.install(|| {
        queries
            .par_iter()
            .map(|q| {
                let empty = HashSet::new();
                let truth_at_t = truth.get(&q.timestamp).unwrap_or(&empty);
                let keep = time_aware_filter(
                    q.subject,
                    q.relation,
                    q.object,
                    truth_at_t,
                    num_entities,
                )?;
                let scores = score_query(
                    model,
                    context,
                    Query {
                        subject: q.subject,
                        relation: q.relation,
                        time: q.timestamp,
                    },
                    cfg.history_len,
                )?;
                let filtered_count = keep.iter().filter(|&&k| !k).count();
                let rank = rank_of(&scores, q.object, &keep, cfg.tie_rule);
                debug_assert!(rank <= (num_entities - filtered_count) as f64);
                Ok(RankResult {
                    query: *q,
                    rank,
                    filtered_count,
                })
            })
            .collect()
    });
    let mut ranks = Vec::with_capacity(results.len());
    let mut out = Vec::with_capacity(results.len());
    for r in results {
        let r = r?;
        ranks.push(r.rank);
        out.push(r);
    }
    let m = metrics(&ranks)?;
    Ok((out, m))
}
