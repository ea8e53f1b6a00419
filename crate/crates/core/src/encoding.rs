//! Query-aware temporal edge representations.
//!
//! A temporal edge `(z, p_tau, o)` is encoded from two components:
//! a static part `Psi_r(p) = W_p · r + b_p` derived from the query relation
//! vector, and a temporal part `Upsilon(dtau)`, a cosine encoding of the
//! relative time distance `dtau = |tau - t_q|`. The two halves are
//! concatenated and passed through a per-layer feed-forward combiner.
//! Because the encoding depends only on `(relation, dtau)`, edges sharing
//! that pair share one representation; the batched path below computes one
//! row per distinct pair and lets the propagation layer gather per edge.

use crate::error::ModelError;
use crate::graph::{HistoryTemporalGraph, TemporalEdge};
use crate::model::{ModelConfig, ModelVars, TimeSharing};
use tkgr_grad::{stack_rows, Tape, Var};

/// Distinct `(relation, dtau)` pairs of a graph plus the per-edge mapping
/// into them.
#[derive(Clone, Debug)]
pub struct EdgeComboTable {
    /// Distinct pairs in first-occurrence order.
    pub combos: Vec<(usize, usize)>,
    /// Index into `combos` for each graph edge.
    pub edge_combo: Vec<usize>,
}

impl EdgeComboTable {
    pub fn build(graph: &HistoryTemporalGraph, query_time: usize) -> Self {
        let mut combos = Vec::new();
        let mut lookup = std::collections::HashMap::new();
        let mut edge_combo = Vec::with_capacity(graph.edges.len());
        for e in &graph.edges {
            let dtau = query_time.abs_diff(e.tau);
            let key = (e.rel, dtau);
            let idx = *lookup.entry(key).or_insert_with(|| {
                combos.push(key);
                combos.len() - 1
            });
            edge_combo.push(idx);
        }
        EdgeComboTable { combos, edge_combo }
    }
}

/// `Psi_r(p) = W_p · r + b_p` with the given layer's parameters.
pub fn static_component<'t>(
    vars: &ModelVars<'t>,
    config: &ModelConfig,
    layer: usize,
    rel_type: usize,
    query_rel_vec: Var<'t>,
) -> Result<Var<'t>, ModelError> {
    if rel_type >= config.num_relations {
        return Err(ModelError::UnknownRelation {
            id: rel_type,
            num_relations: config.num_relations,
        });
    }
    let d = config.dim;
    let lp = vars.layer(layer);
    let r_col = query_rel_vec.reshape(vec![d, 1]);
    Ok(lp.rel_weight[rel_type]
        .matmul(r_col)
        .reshape(vec![d])
        .add(lp.rel_bias[rel_type]))
}

/// `Upsilon(dtau)`: component `i` is `sqrt(1/d) * cos(w_i * dtau + phi_i)`,
/// using the shared frequency/phase pair or the relation-specific one.
pub fn time_component<'t>(
    vars: &ModelVars<'t>,
    config: &ModelConfig,
    rel_type: usize,
    delta_tau: usize,
) -> Var<'t> {
    let d = config.dim;
    let row = match config.time_sharing {
        TimeSharing::Shared => 0,
        TimeSharing::PerRelation => rel_type,
    };
    let freq = vars.time_freq.gather_rows(&[row]).reshape(vec![d]);
    let phase = vars.time_phase.gather_rows(&[row]).reshape(vec![d]);
    freq.scale(delta_tau as f64)
        .add(phase)
        .cos()
        .scale((1.0 / d as f64).sqrt())
}

/// Batched edge representations, one row per `(relation, dtau)` combo.
///
/// `query_rel_vec` is the query relation embedding as a d-vector. Returns a
/// `|combos| x d` matrix.
pub fn combo_reprs<'t>(
    tape: &'t Tape,
    vars: &ModelVars<'t>,
    config: &ModelConfig,
    layer: usize,
    combos: &[(usize, usize)],
    query_rel_vec: Var<'t>,
) -> Result<Var<'t>, ModelError> {
    assert!(!combos.is_empty(), "combo_reprs on an empty combo table");
    let d = config.dim;
    let lp = vars.layer(layer);

    // one static component per distinct relation present
    let mut present: Vec<usize> = combos.iter().map(|(p, _)| *p).collect();
    present.sort_unstable();
    present.dedup();
    let r_col = query_rel_vec.reshape(vec![d, 1]);
    let mut psi_rows = Vec::with_capacity(present.len());
    for &p in &present {
        if p >= config.num_relations {
            return Err(ModelError::UnknownRelation {
                id: p,
                num_relations: config.num_relations,
            });
        }
        psi_rows.push(
            lp.rel_weight[p]
                .matmul(r_col)
                .reshape(vec![d])
                .add(lp.rel_bias[p]),
        );
    }
    let psi_present = stack_rows(tape, &psi_rows);
    let rel_pos: Vec<usize> = combos
        .iter()
        .map(|(p, _)| present.binary_search(p).unwrap())
        .collect();
    let psi = psi_present.gather_rows(&rel_pos);
    if config.bypass_edge_transform {
        return Ok(psi);
    }

    let upsilon = if config.use_time_encoder {
        let rows: Vec<usize> = combos
            .iter()
            .map(|(p, _)| match config.time_sharing {
                TimeSharing::Shared => 0,
                TimeSharing::PerRelation => *p,
            })
            .collect();
        let dtaus: Vec<f64> = combos.iter().map(|(_, dt)| *dt as f64).collect();
        let dtau_var = tape.constant(tkgr_grad::Tensor::vector(dtaus));
        vars.time_freq
            .gather_rows(&rows)
            .scale_rows(dtau_var)
            .add(vars.time_phase.gather_rows(&rows))
            .cos()
            .scale((1.0 / d as f64).sqrt())
    } else {
        tape.constant(tkgr_grad::Tensor::zeros(vec![combos.len(), d]))
    };

    Ok(psi
        .concat_cols(upsilon)
        .matmul(lp.ff_weight)
        .add_row(lp.ff_bias)
        .relu())
}

/// Representation of a single temporal edge for a given query.
pub fn edge_repr<'t>(
    tape: &'t Tape,
    vars: &ModelVars<'t>,
    config: &ModelConfig,
    layer: usize,
    edge: &TemporalEdge,
    query_rel_vec: Var<'t>,
    query_time: usize,
) -> Result<Var<'t>, ModelError> {
    let combos = [(edge.rel, query_time.abs_diff(edge.tau))];
    Ok(combo_reprs(tape, vars, config, layer, &combos, query_rel_vec)?
        .reshape(vec![config.dim]))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Model;
    use tkgr_grad::{finite_diff_check, Reduce, Tensor};

    fn toy_model(num_relations: usize, dim: usize) -> Model {
        Model::init(ModelConfig::new(num_relations, dim), 42).unwrap()
    }

    #[test]
    fn identity_weight_returns_query_vector() {
        let mut model = toy_model(2, 4);
        model.layers[0].rel_weight[0] = Tensor::eye(4, 1.0);
        model.layers[0].rel_bias[0] = Tensor::zeros(vec![4]);
        let tape = Tape::new();
        let vars = model.vars(&tape);
        let r = tape.var(Tensor::vector(vec![0.1, -0.2, 0.3, 0.4]));
        let psi = static_component(&vars, &model.config, 0, 0, r).unwrap();
        assert_eq!(psi.value().data(), &[0.1, -0.2, 0.3, 0.4]);
    }

    #[test]
    fn zero_weight_returns_bias_regardless_of_query() {
        let mut model = toy_model(2, 3);
        model.layers[0].rel_weight[1] = Tensor::zeros(vec![3, 3]);
        model.layers[0].rel_bias[1] = Tensor::vector(vec![7.0, 8.0, 9.0]);
        let tape = Tape::new();
        let vars = model.vars(&tape);
        for q in [[0.0, 0.0, 0.0], [1.0, -5.0, 2.0]] {
            let r = tape.var(Tensor::vector(q.to_vec()));
            let psi = static_component(&vars, &model.config, 0, 1, r).unwrap();
            assert_eq!(psi.value().data(), &[7.0, 8.0, 9.0]);
        }
    }

    #[test]
    fn unknown_relation_is_an_error() {
        let model = toy_model(2, 3);
        let tape = Tape::new();
        let vars = model.vars(&tape);
        let r = tape.var(Tensor::vector(vec![0.0; 3]));
        assert!(matches!(
            static_component(&vars, &model.config, 0, 5, r),
            Err(ModelError::UnknownRelation { id: 5, .. })
        ));
    }

    #[test]
    fn static_component_gradient_wrt_query_is_column_sums() {
        // finite-diff of sum(W_p · r) with respect to r matches the column
        // sums of W_p
        let model = toy_model(2, 4);
        let w = model.layers[0].rel_weight[0].clone();
        let run = |query: &Tensor| {
            let tape = Tape::new();
            let vars = model.vars(&tape);
            let r = tape.var(query.clone());
            let psi = static_component(&vars, &model.config, 0, 0, r).unwrap();
            let loss = psi.reduce(Reduce::Sum, None);
            let grad = tape.backward(loss).get(r).unwrap().clone();
            (loss.item(), grad)
        };
        let q = Tensor::vector(vec![0.3, -0.1, 0.5, 0.2]);
        let (_, analytic) = run(&q);
        for j in 0..4 {
            let col_sum: f64 = (0..4).map(|i| w.get2(i, j)).sum();
            assert!((analytic.data()[j] - col_sum).abs() < 1e-12);
        }
        let mut f = |inputs: &[Tensor]| run(&inputs[0]).0;
        let report = finite_diff_check(&mut f, &[q], &[analytic], 1e-4, 1e-6).unwrap();
        assert!(report.pass(), "{report}");
    }

    #[test]
    fn time_component_at_zero_distance_with_zero_phase() {
        let model = toy_model(2, 16);
        let tape = Tape::new();
        let vars = model.vars(&tape);
        let ups = time_component(&vars, &model.config, 0, 0);
        let expect = (1.0f64 / 16.0).sqrt();
        for &v in ups.value().data() {
            assert!((v - expect).abs() < 1e-12, "cos(0) components");
        }
    }

    #[test]
    fn time_component_is_bounded_by_inverse_sqrt_dim() {
        let model = toy_model(2, 8);
        let tape = Tape::new();
        let vars = model.vars(&tape);
        let bound = (1.0f64 / 8.0).sqrt() + 1e-12;
        for dtau in [0usize, 1, 3, 17, 400] {
            let ups = time_component(&vars, &model.config, 1, dtau);
            assert!(ups.value().data().iter().all(|v| v.abs() <= bound));
        }
    }

    #[test]
    fn edge_repr_projects_to_static_half_under_crafted_ff() {
        // ff = [I; 0] with zero bias makes the combiner return Psi, so the
        // representation must equal the (nonnegative) static component.
        let mut model = toy_model(2, 3);
        model.layers[0].rel_weight[0] = Tensor::zeros(vec![3, 3]);
        model.layers[0].rel_bias[0] = Tensor::vector(vec![0.5, 0.25, 2.0]);
        model.layers[0].ff_weight = Tensor::from_fn(6, 3, |i, j| if i == j { 1.0 } else { 0.0 });
        model.layers[0].ff_bias = Tensor::zeros(vec![3]);
        let tape = Tape::new();
        let vars = model.vars(&tape);
        let r = tape.var(Tensor::vector(vec![1.0, 2.0, 3.0]));
        let edge = TemporalEdge {
            src: 0,
            rel: 0,
            dst: 1,
            tau: 2,
        };
        let w = edge_repr(&tape, &vars, &model.config, 0, &edge, r, 5).unwrap();
        assert_eq!(w.value().data(), &[0.5, 0.25, 2.0]);
    }

    #[test]
    fn edges_differing_only_in_tau_get_distinct_representations() {
        // collision-free frequencies: distinct dtau must change the output
        let mut model = toy_model(2, 4);
        model.temporal.freq = Tensor::ones(vec![1, 4]);
        model.temporal.phase = Tensor::zeros(vec![1, 4]);
        // route the temporal half straight through the combiner
        model.layers[0].ff_weight = Tensor::from_fn(8, 4, |i, j| if i == j + 4 { 1.0 } else { 0.0 });
        model.layers[0].ff_bias = Tensor::zeros(vec![4]);
        let tape = Tape::new();
        let vars = model.vars(&tape);
        let r = tape.var(Tensor::vector(vec![0.3, 0.1, -0.2, 0.7]));
        let mk = |tau| TemporalEdge {
            src: 0,
            rel: 1,
            dst: 1,
            tau,
        };
        let a = edge_repr(&tape, &vars, &model.config, 0, &mk(4), r, 5).unwrap();
        let b = edge_repr(&tape, &vars, &model.config, 0, &mk(3), r, 5).unwrap();
        assert_ne!(a.value().data(), b.value().data());
    }

    #[test]
    fn temporal_encoder_ablation_ignores_tau() {
        let mut model = toy_model(2, 4);
        model.config.use_time_encoder = false;
        let tape = Tape::new();
        let vars = model.vars(&tape);
        let r = tape.var(Tensor::vector(vec![0.3, 0.1, -0.2, 0.7]));
        let mk = |tau| TemporalEdge {
            src: 0,
            rel: 1,
            dst: 1,
            tau,
        };
        let a = edge_repr(&tape, &vars, &model.config, 0, &mk(4), r, 5).unwrap();
        let b = edge_repr(&tape, &vars, &model.config, 0, &mk(1), r, 5).unwrap();
        assert_eq!(a.value().data(), b.value().data());
    }

    #[test]
    fn query_awareness_changes_representation() {
        let model = toy_model(3, 6);
        let tape = Tape::new();
        let vars = model.vars(&tape);
        let edge = TemporalEdge {
            src: 0,
            rel: 2,
            dst: 1,
            tau: 1,
        };
        let q1 = tape.var(Tensor::vector(vec![0.5, 0.1, 0.2, -0.3, 0.4, 0.6]));
        let q2 = tape.var(Tensor::vector(vec![-0.2, 0.7, 0.1, 0.2, -0.5, 0.3]));
        let a = edge_repr(&tape, &vars, &model.config, 0, &edge, q1, 3).unwrap();
        let b = edge_repr(&tape, &vars, &model.config, 0, &edge, q2, 3).unwrap();
        assert_ne!(a.value().data(), b.value().data());
    }

    #[test]
    fn per_relation_mode_with_identical_rows_matches_shared_mode() {
        let shared = toy_model(3, 4);
        let mut specific = shared.clone();
        specific.config.time_sharing = TimeSharing::PerRelation;
        let row: Vec<f64> = shared.temporal.freq.data().to_vec();
        specific.temporal.freq =
            Tensor::from_fn(3, 4, |_, j| row[j]);
        specific.temporal.phase = Tensor::zeros(vec![3, 4]);

        let tape_a = Tape::new();
        let vars_a = shared.vars(&tape_a);
        let tape_b = Tape::new();
        let vars_b = specific.vars(&tape_b);
        for rel in 0..3 {
            for dtau in [0usize, 2, 9] {
                let a = time_component(&vars_a, &shared.config, rel, dtau);
                let b = time_component(&vars_b, &specific.config, rel, dtau);
                assert_eq!(a.value().data(), b.value().data());
            }
        }
    }

    #[test]
    fn combo_table_deduplicates_relation_time_pairs() {
        use crate::data::Quadruple;
        let history = vec![
            (0, vec![Quadruple::new(0, 0, 1, 0), Quadruple::new(1, 0, 2, 0)]),
            (1, vec![Quadruple::new(0, 0, 1, 1), Quadruple::new(2, 1, 0, 1)]),
        ];
        let g = HistoryTemporalGraph::build(&history, 3, 2).unwrap();
        let table = EdgeComboTable::build(&g, 2);
        assert_eq!(table.combos, vec![(0, 2), (0, 1), (1, 1)]);
        assert_eq!(table.edge_combo, vec![0, 0, 1, 2]);
    }
}
