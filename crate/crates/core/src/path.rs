//! Query-aware temporal path propagation.
//!
//! Starting from a state matrix that is zero everywhere except the query
//! subject's row (initialized to the query relation embedding), each of the
//! omega layers merges every incoming temporal edge's representation with
//! its source state and aggregates the messages per destination entity.
//! After omega layers, row `o` holds the aggregated representation of all
//! temporal paths from the query subject to `o`.
//!
//! Message/aggregation layout: messages are materialized edge-parallel via
//! row gathers on the previous state, merged with per-edge representations
//! gathered from the combo table, then segment-reduced by destination.
//! When the boundary toggle is on, every entity additionally receives its
//! layer-0 state as one extra message, so paths of every length <= omega
//! survive; without it the final state only reflects length-omega walks.
//!
//! Entities with no messages at all in a layer keep an exactly-zero state
//! for that layer (the residual shortcut aside).

use crate::encoding::{combo_reprs, EdgeComboTable};
use crate::error::ModelError;
use crate::graph::HistoryTemporalGraph;
use crate::model::{Activation, Aggregator, MergeOp, Model, ModelVars};
use tkgr_grad::{Reduce, Tape, Tensor, Var};

/// A link-prediction query `(subject, relation, ?, time)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Query {
    pub subject: usize,
    pub relation: usize,
    pub time: usize,
}

/// Per-edge gating of merged messages.
#[derive(Clone, Copy, Debug, Default)]
pub enum GateMode<'a> {
    /// No gates.
    #[default]
    Off,
    /// Gates fixed at 1.0, recorded as differentiable leaves; their
    /// gradients are per-(edge, layer) importances.
    Record,
    /// Gates fixed at the given per-edge values (shared across layers),
    /// recorded as constants.
    Fixed(&'a [f64]),
}

/// Result of a propagation pass.
pub struct Propagation<'t> {
    /// Final state, `num_entities x d`; row `o` is the temporal-path
    /// representation from the query subject to `o`.
    pub state: Var<'t>,
    /// Query relation embedding row, `1 x d`.
    pub query_rel: Var<'t>,
    /// Per-layer edge gates (ones), recorded only when requested; the
    /// gradient of the score with respect to these measures per-edge
    /// importance.
    pub gates: Vec<Var<'t>>,
}

/// Initial path state: the query subject's row holds the query relation
/// embedding, every other row is zero.
pub fn init_state<'t>(
    tape: &'t Tape,
    num_entities: usize,
    query_subject: usize,
    query_rel_row: Var<'t>,
) -> Result<Var<'t>, ModelError> {
    if query_subject >= num_entities {
        return Err(ModelError::Data(crate::error::DataError::EntityOutOfRange {
            id: query_subject,
            num_entities,
        }));
    }
    let d = query_rel_row.value().cols();
    let zeros = tape.constant(Tensor::zeros(vec![num_entities, d]));
    Ok(zeros.scatter_add_rows(&[query_subject], query_rel_row))
}

/// Merge a partial path state with an edge representation.
pub fn merge<'t>(op: MergeOp, state: Var<'t>, edge: Var<'t>) -> Var<'t> {
    match op {
        MergeOp::Mult => state.mul(edge),
        MergeOp::Add => state.add(edge),
        MergeOp::Rotate => state.rotate(edge),
    }
}

/// Aggregate a message matrix by destination segment.
///
/// For PNA the four statistics are concatenated as mean ‖ max ‖ min ‖ std
/// and projected back to d. Empty segments yield zero rows.
fn aggregate<'t>(
    aggregator: Aggregator,
    messages: Var<'t>,
    segments: &[usize],
    num_segments: usize,
    pna_weight: Option<Var<'t>>,
    pna_bias: Option<Var<'t>>,
) -> Var<'t> {
    match aggregator {
        Aggregator::Sum => messages.segment_reduce(Reduce::Sum, segments, num_segments),
        Aggregator::Mean => messages.segment_reduce(Reduce::Mean, segments, num_segments),
        Aggregator::Max => messages.segment_reduce(Reduce::Max, segments, num_segments),
        Aggregator::Pna => {
            let mean = messages.segment_reduce(Reduce::Mean, segments, num_segments);
            let max = messages.segment_reduce(Reduce::Max, segments, num_segments);
            let min = messages.segment_reduce(Reduce::Min, segments, num_segments);
            let std = messages.segment_reduce(Reduce::Std, segments, num_segments);
            let stats = mean.concat_cols(max).concat_cols(min).concat_cols(std);
            stats
                .matmul(pna_weight.expect("PNA aggregator without projection weights"))
                .add_row(pna_bias.expect("PNA aggregator without projection bias"))
        }
    }
}

/// Runs omega propagation layers for one query over the history temporal
/// graph.
pub fn propagate<'t>(
    tape: &'t Tape,
    model: &Model,
    vars: &ModelVars<'t>,
    graph: &HistoryTemporalGraph,
    query: Query,
    gate_mode: GateMode<'_>,
) -> Result<Propagation<'t>, ModelError> {
    let cfg = &model.config;
    cfg.validate()?;
    if query.relation >= cfg.num_relations {
        return Err(ModelError::UnknownRelation {
            id: query.relation,
            num_relations: cfg.num_relations,
        });
    }
    let num_entities = graph.num_entities;
    let query_rel_row = vars.relations.gather_rows(&[query.relation]);
    let h0 = init_state(tape, num_entities, query.subject, query_rel_row)?;

    let num_edges = graph.edges.len();
    let src: Vec<usize> = graph.edges.iter().map(|e| e.src).collect();
    let mut segments: Vec<usize> = graph.edges.iter().map(|e| e.dst).collect();
    if cfg.prop.include_boundary {
        // boundary message: every entity receives its layer-0 state
        segments.extend(0..num_entities);
    }
    let combo_table = EdgeComboTable::build(graph, query.time);
    let query_rel_vec = query_rel_row.reshape(vec![cfg.dim]);

    // entities with no messages keep a zero state (mask applied after the
    // post-aggregation pipeline, before the shortcut)
    let empty_mask: Option<Var<'t>> = if cfg.prop.include_boundary {
        None
    } else {
        let mut mask = vec![0.0; num_entities];
        for &dst in segments.iter() {
            mask[dst] = 1.0;
        }
        Some(tape.constant(Tensor::vector(mask)))
    };

    let mut gates = Vec::new();
    let mut state = h0;
    for layer in 0..cfg.prop.omega {
        let mut out = if num_edges == 0 {
            // no temporal edges: only boundary messages (if any) survive
            if cfg.prop.include_boundary {
                aggregate(
                    cfg.prop.aggregator,
                    h0,
                    &segments,
                    num_entities,
                    vars.layer(layer).pna_weight,
                    vars.layer(layer).pna_bias,
                )
            } else {
                tape.constant(Tensor::zeros(vec![num_entities, cfg.dim]))
            }
        } else {
            let reprs = combo_reprs(tape, vars, cfg, layer, &combo_table.combos, query_rel_vec)?;
            let w_edges = reprs.gather_rows(&combo_table.edge_combo);
            let h_src = state.gather_rows(&src);
            let mut merged = merge(cfg.prop.merge, h_src, w_edges);
            match gate_mode {
                GateMode::Off => {}
                GateMode::Record => {
                    let gate = tape.var(Tensor::ones(vec![num_edges]));
                    merged = merged.scale_rows(gate);
                    gates.push(gate);
                }
                GateMode::Fixed(values) => {
                    assert_eq!(values.len(), num_edges, "gate length mismatch");
                    let gate = tape.constant(Tensor::vector(values.to_vec()));
                    merged = merged.scale_rows(gate);
                }
            }
            let messages = if cfg.prop.include_boundary {
                merged.concat_rows(h0)
            } else {
                merged
            };
            aggregate(
                cfg.prop.aggregator,
                messages,
                &segments,
                num_entities,
                vars.layer(layer).pna_weight,
                vars.layer(layer).pna_bias,
            )
        };
        if cfg.prop.activation == Activation::Relu {
            out = out.relu();
        }
        if cfg.prop.use_layer_norm {
            let lp = vars.layer(layer);
            out = out.layer_norm(
                lp.norm_gain.expect("layer norm enabled without gain"),
                lp.norm_bias.expect("layer norm enabled without bias"),
            );
        }
        if let Some(mask) = empty_mask {
            out = out.scale_rows(mask);
        }
        if cfg.prop.use_shortcut {
            out = out.add(state);
        }
        state = out;
    }
    Ok(Propagation {
        state,
        query_rel: query_rel_row,
        gates,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::Quadruple;
    use crate::model::ModelConfig;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha12Rng;

    fn graph_from(edges: &[(usize, usize, usize, usize)], v: usize, qt: usize) -> HistoryTemporalGraph {
        let mut by_t = std::collections::BTreeMap::<usize, Vec<Quadruple>>::new();
        for &(s, r, o, t) in edges {
            by_t.entry(t).or_default().push(Quadruple::new(s, r, o, t));
        }
        let history: Vec<(usize, Vec<Quadruple>)> = by_t.into_iter().collect();
        HistoryTemporalGraph::build(&history, v, qt).unwrap()
    }

    #[test]
    fn init_state_has_one_nonzero_row() {
        let tape = Tape::new();
        let r = tape.var(Tensor::matrix(1, 2, vec![1.0, 2.0]));
        let h = init_state(&tape, 3, 1, r).unwrap();
        assert_eq!(h.value().data(), &[0.0, 0.0, 1.0, 2.0, 0.0, 0.0]);
    }

    #[test]
    fn init_state_zero_relation_vector_is_all_zero() {
        let tape = Tape::new();
        let r = tape.var(Tensor::zeros(vec![1, 2]));
        let h = init_state(&tape, 3, 0, r).unwrap();
        assert!(h.value().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn init_state_subject_out_of_range_is_an_error() {
        let tape = Tape::new();
        let r = tape.var(Tensor::matrix(1, 2, vec![1.0, 2.0]));
        assert!(init_state(&tape, 3, 3, r).is_err());
    }

    #[test]
    fn merge_ops_match_examples() {
        let tape = Tape::new();
        let h = tape.var(Tensor::vector(vec![1.0, 2.0]));
        let w = tape.var(Tensor::vector(vec![3.0, 4.0]));
        assert_eq!(merge(MergeOp::Mult, h, w).value().data(), &[3.0, 8.0]);
        assert_eq!(merge(MergeOp::Add, h, w).value().data(), &[4.0, 6.0]);
    }

    /// Walk oracle: enumerate all walks s -> o of length <= omega and sum
    /// r ⊙ (product of edge vectors along the walk), in plain f64.
    fn walk_oracle(
        graph: &HistoryTemporalGraph,
        num_entities: usize,
        subject: usize,
        r: &[f64],
        edge_vec: impl Fn(usize) -> Vec<f64>,
        omega: usize,
    ) -> Vec<Vec<f64>> {
        let d = r.len();
        let mut out = vec![vec![0.0; d]; num_entities];
        // the empty walk contributes r to the subject row
        for (j, &v) in r.iter().enumerate() {
            out[subject][j] += v;
        }
        // depth-first over walks
        let mut stack: Vec<(usize, usize, Vec<f64>)> = vec![(subject, 0, r.to_vec())];
        let mut out_edges: Vec<Vec<usize>> = vec![Vec::new(); num_entities];
        for (i, e) in graph.edges.iter().enumerate() {
            out_edges[e.src].push(i);
        }
        while let Some((node, len, acc)) = stack.pop() {
            if len == omega {
                continue;
            }
            for &ei in &out_edges[node] {
                let e = graph.edges[ei];
                let w = edge_vec(ei);
                let next: Vec<f64> = acc.iter().zip(&w).map(|(a, b)| a * b).collect();
                for (j, &v) in next.iter().enumerate() {
                    out[e.dst][j] += v;
                }
                stack.push((e.dst, len + 1, next));
            }
        }
        out
    }

    #[test]
    fn oracle_mode_matches_walk_enumeration_on_random_graphs() {
        let mut rng = ChaCha12Rng::seed_from_u64(2024);
        for trial in 0..20 {
            let v = rng.gen_range(3..=8);
            let num_rel = rng.gen_range(2..=4) * 2;
            let omega = rng.gen_range(1..=4);
            let d = 4;
            let n_edges = rng.gen_range(3..=14);
            let edges: Vec<(usize, usize, usize, usize)> = (0..n_edges)
                .map(|_| {
                    (
                        rng.gen_range(0..v),
                        rng.gen_range(0..num_rel),
                        rng.gen_range(0..v),
                        rng.gen_range(0..3),
                    )
                })
                .collect();
            let graph = graph_from(&edges, v, 3);
            let model = Model::init(ModelConfig::oracle(num_rel, d, omega), 100 + trial).unwrap();
            let subject = rng.gen_range(0..v);
            let relation = rng.gen_range(0..num_rel);

            let tape = Tape::new();
            let vars = model.vars(&tape);
            let prop = propagate(
                &tape,
                &model,
                &vars,
                &graph,
                Query {
                    subject,
                    relation,
                    time: 3,
                },
                GateMode::Off,
            )
            .unwrap();

            // with tied layers and the edge transform bypassed, an edge's
            // vector is W_p · r + b_p from the layer-0 parameters
            let r: Vec<f64> = model.relations.row(relation).to_vec();
            let edge_vec = |ei: usize| -> Vec<f64> {
                let p = graph.edges[ei].rel;
                let w = &model.layers[0].rel_weight[p];
                let b = &model.layers[0].rel_bias[p];
                (0..d)
                    .map(|i| {
                        (0..d).map(|j| w.get2(i, j) * r[j]).sum::<f64>() + b.data()[i]
                    })
                    .collect()
            };
            let expect = walk_oracle(&graph, v, subject, &r, edge_vec, omega);
            let got = prop.state.value();
            for o in 0..v {
                for j in 0..d {
                    assert!(
                        (got.get2(o, j) - expect[o][j]).abs() < 1e-9,
                        "trial {trial}: state[{o}][{j}] = {} vs oracle {}",
                        got.get2(o, j),
                        expect[o][j]
                    );
                }
            }
        }
    }

    #[test]
    fn single_chain_state_is_the_path_product() {
        // chain 0 -r0-> 1 -r1-> 2: final state of entity 2 must equal
        // r ⊙ w(e1) ⊙ w(e2)
        let graph = graph_from(&[(0, 0, 1, 0), (1, 1, 2, 1)], 3, 2);
        let model = Model::init(ModelConfig::oracle(4, 4, 2), 5).unwrap();
        let tape = Tape::new();
        let vars = model.vars(&tape);
        let prop = propagate(
            &tape,
            &model,
            &vars,
            &graph,
            Query {
                subject: 0,
                relation: 2,
                time: 2,
            },
            GateMode::Off,
        )
        .unwrap();
        let r: Vec<f64> = model.relations.row(2).to_vec();
        let psi = |p: usize| -> Vec<f64> {
            let w = &model.layers[0].rel_weight[p];
            (0..4)
                .map(|i| (0..4).map(|j| w.get2(i, j) * r[j]).sum::<f64>())
                .collect()
        };
        let w1 = psi(0);
        let w2 = psi(1);
        let state = prop.state.value();
        for j in 0..4 {
            let expect = r[j] * w1[j] * w2[j];
            assert!((state.get2(2, j) - expect).abs() < 1e-12);
        }
    }

    #[test]
    fn no_in_edges_and_no_boundary_stays_zero() {
        // entities 3 and 4 have no incoming edges and a zero initial state;
        // with the boundary off their rows stay zero through all layers even
        // with norm/shortcut on
        let graph = graph_from(&[(0, 0, 1, 0), (1, 1, 2, 1)], 5, 2);
        let mut cfg = ModelConfig::new(4, 6);
        cfg.prop.include_boundary = false;
        cfg.prop.omega = 3;
        let model = Model::init(cfg, 9).unwrap();
        let tape = Tape::new();
        let vars = model.vars(&tape);
        let prop = propagate(
            &tape,
            &model,
            &vars,
            &graph,
            Query {
                subject: 0,
                relation: 1,
                time: 2,
            },
            GateMode::Off,
        )
        .unwrap();
        let state = prop.state.value();
        assert!(state.row(3).iter().all(|&v| v == 0.0));
        assert!(state.row(4).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn reachability_matches_bfs_on_random_graphs() {
        // boundary on, default toggles, freshly initialized parameters:
        // a row is nonzero iff the entity is reachable within omega hops
        let mut rng = ChaCha12Rng::seed_from_u64(77);
        for trial in 0..10 {
            let v = rng.gen_range(4..=9);
            let omega = rng.gen_range(1..=3);
            let n_edges = rng.gen_range(3..=12);
            let edges: Vec<(usize, usize, usize, usize)> = (0..n_edges)
                .map(|_| {
                    (
                        rng.gen_range(0..v),
                        rng.gen_range(0..4),
                        rng.gen_range(0..v),
                        rng.gen_range(0..2),
                    )
                })
                .collect();
            let graph = graph_from(&edges, v, 2);
            let mut cfg = ModelConfig::new(4, 16);
            cfg.prop.omega = omega;
            let model = Model::init(cfg, 800 + trial).unwrap();
            let subject = rng.gen_range(0..v);
            let tape = Tape::new();
            let vars = model.vars(&tape);
            let prop = propagate(
                &tape,
                &model,
                &vars,
                &graph,
                Query {
                    subject,
                    relation: 1,
                    time: 2,
                },
                GateMode::Off,
            )
            .unwrap();

            // BFS oracle over edge direction, depth <= omega
            let mut reach = vec![false; v];
            reach[subject] = true;
            let mut frontier = vec![subject];
            for _ in 0..omega {
                let mut next = Vec::new();
                for e in &graph.edges {
                    if frontier.contains(&e.src) && !reach[e.dst] {
                        reach[e.dst] = true;
                        next.push(e.dst);
                    }
                }
                // walks may revisit: frontier is everything reached so far
                frontier = (0..v).filter(|&i| reach[i]).collect();
                if next.is_empty() {
                    break;
                }
            }
            let state = prop.state.value();
            for o in 0..v {
                let nonzero = state.row(o).iter().any(|&x| x.abs() > 1e-12);
                assert_eq!(
                    nonzero, reach[o],
                    "trial {trial}: entity {o} reach={} but |state| {}",
                    reach[o],
                    state.row(o).iter().map(|x| x.abs()).fold(0.0, f64::max)
                );
            }
        }
    }

    #[test]
    fn gradient_reaches_query_relation_row() {
        let graph = graph_from(&[(0, 0, 1, 0), (1, 1, 2, 1)], 3, 2);
        let model = Model::init(ModelConfig::new(4, 8), 3).unwrap();
        let tape = Tape::new();
        let vars = model.vars(&tape);
        let prop = propagate(
            &tape,
            &model,
            &vars,
            &graph,
            Query {
                subject: 0,
                relation: 1,
                time: 2,
            },
            GateMode::Off,
        )
        .unwrap();
        let loss = prop.state.reduce(Reduce::Sum, None);
        let grads = tape.backward(loss);
        let rel_grad = grads.get(vars.relations).expect("relation table gradient");
        let row_norm: f64 = rel_grad.row(1).iter().map(|v| v.abs()).sum();
        assert!(row_norm > 0.0, "query relation row must receive gradient");
        // the table is only read through the query relation row, so every
        // other row (the inverse relation's included) gets zero gradient
        for rel in [0usize, 2, 3] {
            let other: f64 = rel_grad.row(rel).iter().map(|v| v.abs()).sum();
            assert_eq!(other, 0.0, "relation {rel} must not receive gradient");
        }
    }
}
