//! Empirical complexity check: per-query propagation time should grow
//! linearly in m·|E| (window length times per-snapshot edge count) with an
//! m-independent intercept for the per-entity aggregation work.

use crate::data::Quadruple;
use crate::error::ModelError;
use crate::graph::HistoryTemporalGraph;
use crate::learning::score_all;
use crate::model::{Model, ModelConfig};
use crate::path::{propagate, GateMode, Query};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use std::time::Instant;
use tkgr_grad::Tape;

/// One measured sweep point.
#[derive(Clone, Debug)]
pub struct ScalingPoint {
    pub m: usize,
    pub edges_per_snapshot: usize,
    pub omega: usize,
    pub seconds_per_query: f64,
}

/// Sweep result with the least-squares fit of time against m·|E|.
#[derive(Clone, Debug)]
pub struct ScalingReport {
    pub points: Vec<ScalingPoint>,
    pub slope: f64,
    pub intercept: f64,
    pub r_squared: f64,
}

impl ScalingReport {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("m,edges_per_snapshot,omega,seconds_per_query\n");
        for p in &self.points {
            out.push_str(&format!(
                "{},{},{},{:.9}\n",
                p.m, p.edges_per_snapshot, p.omega, p.seconds_per_query
            ));
        }
        out.push_str(&format!(
            "# fit: seconds_per_query = {:.3e} * (m * edges) + {:.3e}, r_squared = {:.4}\n",
            self.slope, self.intercept, self.r_squared
        ));
        out
    }
}

/// Sweep options.
#[derive(Clone, Debug)]
pub struct ScalingConfig {
    pub ms: Vec<usize>,
    pub num_entities: usize,
    pub edges_per_snapshot: usize,
    pub num_relations_base: usize,
    pub dim: usize,
    pub omega: usize,
    pub queries_per_point: usize,
    pub repeats: usize,
    pub seed: u64,
}

impl Default for ScalingConfig {
    fn default() -> Self {
        ScalingConfig {
            ms: vec![2, 4, 8, 16],
            num_entities: 16,
            edges_per_snapshot: 300,
            num_relations_base: 4,
            dim: 64,
            omega: 3,
            queries_per_point: 24,
            repeats: 7,
            seed: 11,
        }
    }
}

/// Measures mean forward time per query at each window length over random
/// graphs of fixed per-snapshot density; takes the minimum over repeats to
/// suppress scheduling noise.
pub fn scaling_sweep(cfg: &ScalingConfig) -> Result<ScalingReport, ModelError> {
    let mut rng = ChaCha12Rng::seed_from_u64(cfg.seed);
    let model = Model::init(
        ModelConfig::new(2 * cfg.num_relations_base, cfg.dim),
        cfg.seed,
    )?;
    let max_m = *cfg.ms.iter().max().expect("nonempty sweep");
    // one shared snapshot pool, windows take suffixes of it
    let snapshots: Vec<(usize, Vec<Quadruple>)> = (0..max_m)
        .map(|t| {
            let edges = (0..cfg.edges_per_snapshot)
                .map(|_| {
                    Quadruple::new(
                        rng.gen_range(0..cfg.num_entities),
                        rng.gen_range(0..2 * cfg.num_relations_base),
                        rng.gen_range(0..cfg.num_entities),
                        t,
                    )
                })
                .collect();
            (t, edges)
        })
        .collect();
    let queries: Vec<Query> = (0..cfg.queries_per_point)
        .map(|_| Query {
            subject: rng.gen_range(0..cfg.num_entities),
            relation: rng.gen_range(0..2 * cfg.num_relations_base),
            time: max_m,
        })
        .collect();

    let graphs: Vec<HistoryTemporalGraph> = cfg
        .ms
        .iter()
        .map(|&m| HistoryTemporalGraph::build(&snapshots[max_m - m..], cfg.num_entities, max_m))
        .collect::<Result<_, _>>()?;
    let run_queries = |graph: &HistoryTemporalGraph, qs: &[Query]| -> Result<(), ModelError> {
        for q in qs {
            let tape = Tape::new();
            let vars = model.vars(&tape);
            let prop = propagate(&tape, &model, &vars, graph, *q, GateMode::Off)?;
            let probs = score_all(&vars, prop.state, prop.query_rel);
            std::hint::black_box(probs.value());
        }
        Ok(())
    };
    // repeats interleave across window lengths so clock or load drift hits
    // every point equally; the minimum per point suppresses interference
    let mut best = vec![f64::INFINITY; cfg.ms.len()];
    for graph in &graphs {
        run_queries(graph, &queries[..cfg.queries_per_point.min(4)])?; // warmup
    }
    for _ in 0..cfg.repeats {
        for (i, graph) in graphs.iter().enumerate() {
            let start = Instant::now();
            run_queries(graph, &queries)?;
            let elapsed = start.elapsed().as_secs_f64() / cfg.queries_per_point as f64;
            best[i] = best[i].min(elapsed);
        }
    }
    let points = cfg
        .ms
        .iter()
        .zip(&best)
        .map(|(&m, &seconds_per_query)| ScalingPoint {
            m,
            edges_per_snapshot: cfg.edges_per_snapshot,
            omega: cfg.omega,
            seconds_per_query,
        })
        .collect::<Vec<_>>();

    let xs: Vec<f64> = points
        .iter()
        .map(|p| (p.m * p.edges_per_snapshot) as f64)
        .collect();
    let ys: Vec<f64> = points.iter().map(|p| p.seconds_per_query).collect();
    let (slope, intercept, r_squared) = linear_fit(&xs, &ys);
    Ok(ScalingReport {
        points,
        slope,
        intercept,
        r_squared,
    })
}

/// Ordinary least squares y = a·x + b with the coefficient of
/// determination.
pub fn linear_fit(xs: &[f64], ys: &[f64]) -> (f64, f64, f64) {
    assert!(xs.len() == ys.len() && xs.len() >= 2, "need >= 2 points");
    let n = xs.len() as f64;
    let mean_x = xs.iter().sum::<f64>() / n;
    let mean_y = ys.iter().sum::<f64>() / n;
    let sxx: f64 = xs.iter().map(|x| (x - mean_x) * (x - mean_x)).sum();
    let sxy: f64 = xs
        .iter()
        .zip(ys)
        .map(|(x, y)| (x - mean_x) * (y - mean_y))
        .sum();
    let slope = sxy / sxx;
    let intercept = mean_y - slope * mean_x;
    let ss_res: f64 = xs
        .iter()
        .zip(ys)
        .map(|(x, y)| {
            let pred = slope * x + intercept;
            (y - pred) * (y - pred)
        })
        .sum();
    let ss_tot: f64 = ys.iter().map(|y| (y - mean_y) * (y - mean_y)).sum();
    let r_squared = if ss_tot == 0.0 { 1.0 } else { 1.0 - ss_res / ss_tot };
    (slope, intercept, r_squared)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fit_recovers_exact_line() {
        let xs = [1.0, 2.0, 3.0, 4.0];
        let ys: Vec<f64> = xs.iter().map(|x| 3.0 * x + 0.5).collect();
        let (a, b, r2) = linear_fit(&xs, &ys);
        assert!((a - 3.0).abs() < 1e-12);
        assert!((b - 0.5).abs() < 1e-12);
        assert!((r2 - 1.0).abs() < 1e-12);
    }

    #[test]
    fn sweep_runs_on_a_tiny_config() {
        let cfg = ScalingConfig {
            ms: vec![1, 2],
            num_entities: 6,
            edges_per_snapshot: 10,
            dim: 8,
            omega: 2,
            queries_per_point: 2,
            repeats: 1,
            ..ScalingConfig::default()
        };
        let report = scaling_sweep(&cfg).unwrap();
        assert_eq!(report.points.len(), 2);
        assert!(report.points.iter().all(|p| p.seconds_per_query > 0.0));
        assert!(report.to_csv().contains("seconds_per_query"));
    }
}
