//! Reasoning-path evidence via gradient attribution.
//!
//! Each merged edge message is multiplied by a scalar gate fixed at 1.0;
//! the partial derivative of the prediction's score with respect to a gate
//! measures that edge's contribution. Gate gradients are summed across the
//! omega layers into one importance per temporal edge. A beam search over
//! simple chains from the query subject (length <= omega, no revisited
//! entities) then scores each path by the sum of its member edges'
//! importances and returns the top-k paths ending at the predicted object.
//!
//! Paths are restricted to simple ones because importances are summed: a
//! walk that shuttles back and forth over the highest-importance edge
//! would otherwise outrank the actual reasoning chain while carrying no
//! extra information.

use crate::error::ModelError;
use crate::graph::{HistoryTemporalGraph, TemporalEdge};
use crate::learning::score_all;
use crate::model::Model;
use crate::path::{propagate, GateMode, Query};
use tkgr_grad::Tape;

/// Per-edge importance, indexed like `graph.edges`; edges that never
/// contribute to the score keep importance zero.
#[derive(Clone, Debug)]
pub struct EdgeImportance {
    pub per_edge: Vec<f64>,
}

/// A chained sequence of temporal edges from the query subject to the
/// predicted object, with its summed importance.
#[derive(Clone, Debug, PartialEq)]
pub struct EvidencePath {
    /// Edge indices into `graph.edges`, consecutive edges chained
    /// (`dst_i == src_{i+1}`), entities along the chain distinct.
    pub edges: Vec<usize>,
    pub importance: f64,
}

/// Computes per-edge importances for `p(subject, relation, prediction)`:
/// forward with unit gates, backward from the predicted entity's score,
/// gate gradients summed over layers.
pub fn edge_importances(
    model: &Model,
    graph: &HistoryTemporalGraph,
    query: Query,
    prediction: usize,
) -> Result<EdgeImportance, ModelError> {
    if prediction >= graph.num_entities {
        return Err(ModelError::Data(crate::error::DataError::EntityOutOfRange {
            id: prediction,
            num_entities: graph.num_entities,
        }));
    }
    let tape = Tape::new();
    let vars = model.vars(&tape);
    let prop = propagate(&tape, model, &vars, graph, query, GateMode::Record)?;
    let probs = score_all(&vars, prop.state, prop.query_rel);
    let score = probs.gather_rows(&[prediction]).reshape(vec![]);
    let grads = tape.backward(score);
    let mut per_edge = vec![0.0; graph.num_edges()];
    for gate in &prop.gates {
        if let Some(g) = grads.get(*gate) {
            for (acc, &v) in per_edge.iter_mut().zip(g.data()) {
                *acc += v;
            }
        }
    }
    Ok(EdgeImportance { per_edge })
}

/// Beam search for the top-k simple chains from `subject` to `prediction`
/// of length <= `max_len`, scored by summed edge importance (signed sums).
/// Ties break by lexicographic edge-index sequence. `beam_width =
/// usize::MAX` is a full search.
pub fn top_k_paths(
    graph: &HistoryTemporalGraph,
    subject: usize,
    prediction: usize,
    importances: &EdgeImportance,
    k: usize,
    beam_width: usize,
    max_len: usize,
) -> Vec<EvidencePath> {
    assert!(k >= 1, "need k >= 1");
    assert!(beam_width >= k, "beam width must be at least k");
    let mut out_edges: Vec<Vec<usize>> = vec![Vec::new(); graph.num_entities];
    for (i, e) in graph.edges.iter().enumerate() {
        out_edges[e.src].push(i);
    }

    let order = |a: &EvidencePath, b: &EvidencePath| {
        b.importance
            .partial_cmp(&a.importance)
            .unwrap_or(std::cmp::Ordering::Equal)
            .then_with(|| a.edges.cmp(&b.edges))
    };

    // frontier entries: (current node, visited entities, path)
    let mut frontier: Vec<(usize, Vec<usize>, EvidencePath)> = vec![(
        subject,
        vec![subject],
        EvidencePath {
            edges: Vec::new(),
            importance: 0.0,
        },
    )];
    let mut completed: Vec<EvidencePath> = Vec::new();
    for _ in 0..max_len {
        let mut candidates: Vec<(usize, Vec<usize>, EvidencePath)> = Vec::new();
        for (node, visited, path) in &frontier {
            for &ei in &out_edges[*node] {
                let edge = graph.edges[ei];
                if visited.contains(&edge.dst) {
                    continue;
                }
                let mut edges = path.edges.clone();
                edges.push(ei);
                let next = EvidencePath {
                    edges,
                    importance: path.importance + importances.per_edge[ei],
                };
                if edge.dst == prediction {
                    completed.push(next.clone());
                }
                let mut next_visited = visited.clone();
                next_visited.push(edge.dst);
                candidates.push((edge.dst, next_visited, next));
            }
        }
        if candidates.is_empty() {
            break;
        }
        candidates.sort_by(|(_, _, a), (_, _, b)| order(a, b));
        candidates.truncate(beam_width);
        frontier = candidates;
    }
    completed.sort_by(|a, b| order(a, b));
    completed.truncate(k);
    completed
}

/// Renders paths one per line:
/// `tau1:(s r o) -> tau2:(s r o)  importance=<float>`.
pub fn render_paths(graph: &HistoryTemporalGraph, paths: &[EvidencePath]) -> String {
    let mut out = String::new();
    for path in paths {
        let hops: Vec<String> = path
            .edges
            .iter()
            .map(|&ei| {
                let e: TemporalEdge = graph.edges[ei];
                format!("{}:({} {} {})", e.tau, e.src, e.rel, e.dst)
            })
            .collect();
        out.push_str(&format!(
            "{}  importance={}\n",
            hops.join(" -> "),
            path.importance
        ));
    }
    out
}

/// Exhaustive oracle: enumerates every simple chain from `subject` of
/// length <= `max_len`, keeps those ending at `prediction`, and returns
/// the top-k under the same ordering as the beam search. Only usable on
/// small graphs.
pub fn exhaustive_top_k(
    graph: &HistoryTemporalGraph,
    subject: usize,
    prediction: usize,
    importances: &EdgeImportance,
    k: usize,
    max_len: usize,
) -> Vec<EvidencePath> {
    let mut out_edges: Vec<Vec<usize>> = vec![Vec::new(); graph.num_entities];
    for (i, e) in graph.edges.iter().enumerate() {
        out_edges[e.src].push(i);
    }
    let mut completed = Vec::new();
    let mut stack: Vec<(usize, Vec<usize>, Vec<usize>, f64)> =
        vec![(subject, vec![subject], Vec::new(), 0.0)];
    while let Some((node, visited, edges, score)) = stack.pop() {
        if edges.len() == max_len {
            continue;
        }
        for &ei in &out_edges[node] {
            let e = graph.edges[ei];
            if visited.contains(&e.dst) {
                continue;
            }
            let mut next_edges = edges.clone();
            next_edges.push(ei);
            let next_score = score + importances.per_edge[ei];
            if e.dst == prediction {
                completed.push(EvidencePath {
                    edges: next_edges.clone(),
                    importance: next_score,
                });
            }
            let mut next_visited = visited.clone();
            next_visited.push(e.dst);
            stack.push((e.dst, next_visited, next_edges, next_score));
        }
    }
    completed.sort_by(|a, b| {
        b.importance
            .partial_cmp(&a.importance)
            .unwrap_or(std::cmp::Ordering::Equal)
            .then_with(|| a.edges.cmp(&b.edges))
    });
    completed.truncate(k);
    completed
}
