//! The unified history temporal graph.
//!
//! A history window's snapshots are merged into one multigraph whose edges
//! carry their source timestamp: the same fact occurring at two timestamps
//! becomes two distinct temporal edges. Edges are indexed by destination
//! because propagation aggregates incoming messages into each candidate's
//! path state; no source index is kept. The graph is immutable after
//! construction and safe to share across concurrent query evaluations.

use crate::data::Quadruple;
use crate::error::DataError;
use std::fmt::Write as _;

/// One temporal edge `(src, rel, dst)` stamped with its snapshot time.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct TemporalEdge {
    pub src: usize,
    pub rel: usize,
    pub dst: usize,
    pub tau: usize,
}

/// Union of a history window's snapshots with per-edge time labels.
#[derive(Clone, Debug)]
pub struct HistoryTemporalGraph {
    pub edges: Vec<TemporalEdge>,
    /// Incoming edge indices per entity, in edge insertion order.
    in_index: Vec<Vec<usize>>,
    pub num_entities: usize,
    /// `(first, last)` snapshot timestamps of the window; `None` for an
    /// empty history.
    pub window: Option<(usize, usize)>,
    pub query_time: usize,
}

impl HistoryTemporalGraph {
    /// Builds the graph from a history window (as produced by
    /// `data::history_window`). Every snapshot must precede `query_time`.
    pub fn build(
        history: &[(usize, Vec<Quadruple>)],
        num_entities: usize,
        query_time: usize,
    ) -> Result<Self, DataError> {
        let mut edges = Vec::with_capacity(history.iter().map(|(_, e)| e.len()).sum());
        let mut in_index = vec![Vec::new(); num_entities];
        for (t, snapshot) in history {
            if *t >= query_time {
                return Err(DataError::HistoryNotStrict {
                    snapshot: *t,
                    query_time,
                });
            }
            for q in snapshot {
                if q.subject >= num_entities {
                    return Err(DataError::EntityOutOfRange {
                        id: q.subject,
                        num_entities,
                    });
                }
                if q.object >= num_entities {
                    return Err(DataError::EntityOutOfRange {
                        id: q.object,
                        num_entities,
                    });
                }
                let idx = edges.len();
                edges.push(TemporalEdge {
                    src: q.subject,
                    rel: q.relation,
                    dst: q.object,
                    tau: *t,
                });
                in_index[q.object].push(idx);
            }
        }
        let window = match (history.first(), history.last()) {
            (Some((a, _)), Some((b, _))) => Some((*a, *b)),
            _ => None,
        };
        Ok(HistoryTemporalGraph {
            edges,
            in_index,
            num_entities,
            window,
            query_time,
        })
    }

    pub fn num_edges(&self) -> usize {
        self.edges.len()
    }

    /// Incoming edges of `entity` in insertion order.
    pub fn in_edges(&self, entity: usize) -> Result<Vec<TemporalEdge>, DataError> {
        Ok(self
            .in_edge_indices(entity)?
            .iter()
            .map(|&i| self.edges[i])
            .collect())
    }

    pub fn in_edge_indices(&self, entity: usize) -> Result<&[usize], DataError> {
        self.in_index
            .get(entity)
            .map(|v| v.as_slice())
            .ok_or(DataError::EntityOutOfRange {
                id: entity,
                num_entities: self.num_entities,
            })
    }

    /// One `src rel dst tau` line per edge, for debugging.
    pub fn dump(&self) -> String {
        let mut out = String::new();
        for e in &self.edges {
            let _ = writeln!(out, "{} {} {} {}", e.src, e.rel, e.dst, e.tau);
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn quad(s: usize, r: usize, o: usize, t: usize) -> Quadruple {
        Quadruple::new(s, r, o, t)
    }

    #[test]
    fn union_keeps_time_labels() {
        // three snapshots merge into one graph, edges keep their timestamps
        let history = vec![
            (0, vec![quad(0, 0, 1, 0)]),
            (1, vec![quad(1, 0, 2, 1), quad(2, 1, 0, 1)]),
            (2, vec![quad(0, 1, 2, 2)]),
        ];
        let g = HistoryTemporalGraph::build(&history, 3, 3).unwrap();
        assert_eq!(g.num_edges(), 4);
        assert_eq!(g.window, Some((0, 2)));
        let taus: Vec<usize> = g.edges.iter().map(|e| e.tau).collect();
        assert_eq!(taus, vec![0, 1, 1, 2]);
    }

    #[test]
    fn same_fact_at_two_timestamps_stays_distinct() {
        let history = vec![
            (1, vec![quad(0, 0, 1, 1)]),
            (2, vec![quad(0, 0, 1, 2)]),
        ];
        let g = HistoryTemporalGraph::build(&history, 2, 3).unwrap();
        assert_eq!(g.num_edges(), 2);
        assert_ne!(g.edges[0], g.edges[1]);
    }

    #[test]
    fn empty_history_builds_empty_graph() {
        let g = HistoryTemporalGraph::build(&[], 3, 0).unwrap();
        assert_eq!(g.num_edges(), 0);
        assert_eq!(g.window, None);
    }

    #[test]
    fn strictness_is_enforced() {
        let history = vec![(5, vec![quad(0, 0, 1, 5)])];
        assert!(matches!(
            HistoryTemporalGraph::build(&history, 2, 5),
            Err(DataError::HistoryNotStrict { .. })
        ));
    }

    #[test]
    fn entity_out_of_range_is_rejected() {
        let history = vec![(0, vec![quad(0, 0, 7, 0)])];
        assert!(matches!(
            HistoryTemporalGraph::build(&history, 3, 1),
            Err(DataError::EntityOutOfRange { id: 7, .. })
        ));
    }

    #[test]
    fn in_edges_in_insertion_order() {
        let history = vec![
            (0, vec![quad(0, 0, 1, 0)]),
            (1, vec![quad(2, 1, 1, 1)]),
        ];
        let g = HistoryTemporalGraph::build(&history, 3, 2).unwrap();
        let ins = g.in_edges(1).unwrap();
        assert_eq!(ins.len(), 2);
        assert_eq!((ins[0].src, ins[0].tau), (0, 0));
        assert_eq!((ins[1].src, ins[1].tau), (2, 1));
        assert!(g.in_edges(0).unwrap().is_empty());
        assert!(g.in_edges(9).is_err());
    }

    #[test]
    fn in_index_matches_naive_filter_under_permuted_insertion() {
        // the index must agree with a naive scan of the edge list for any
        // insertion order
        let orders: Vec<Vec<Quadruple>> = vec![
            vec![quad(0, 0, 2, 0), quad(1, 0, 2, 0), quad(2, 0, 0, 0)],
            vec![quad(2, 0, 0, 0), quad(0, 0, 2, 0), quad(1, 0, 2, 0)],
        ];
        for snapshot in orders {
            let history = vec![(0, snapshot)];
            let g = HistoryTemporalGraph::build(&history, 3, 1).unwrap();
            for entity in 0..3 {
                let naive: Vec<TemporalEdge> = g
                    .edges
                    .iter()
                    .copied()
                    .filter(|e| e.dst == entity)
                    .collect();
                assert_eq!(g.in_edges(entity).unwrap(), naive);
            }
        }
    }

    #[test]
    fn edge_count_equals_window_snapshot_sizes() {
        let history = vec![
            (0, vec![quad(0, 0, 1, 0), quad(1, 0, 0, 0)]),
            (1, vec![quad(0, 1, 1, 1)]),
        ];
        let g = HistoryTemporalGraph::build(&history, 2, 2).unwrap();
        let expected: usize = history.iter().map(|(_, e)| e.len()).sum();
        assert_eq!(g.num_edges(), expected);
    }

    #[test]
    fn identical_input_builds_identical_edge_order() {
        let history = vec![
            (0, vec![quad(0, 0, 1, 0), quad(1, 1, 2, 0)]),
            (1, vec![quad(2, 0, 0, 1)]),
        ];
        let a = HistoryTemporalGraph::build(&history, 3, 2).unwrap();
        let b = HistoryTemporalGraph::build(&history, 3, 2).unwrap();
        assert_eq!(a.edges, b.edges);
        assert_eq!(a.dump(), b.dump());
    }
}
