//! Desk-scale synthetic datasets with planted temporal rules, plus
//! fully-inductive paired datasets with disjoint entity sets.
//!
//! The generator plants chains `(X, r1, Y, t1)`, `(Y, r2, Z, t2)` with
//! `t1 < t2` and emits the consequence `(X, r3, Z, t2 + 1)`. Noise edges
//! are drawn uniformly over entities and over all base relations except
//! the rule head, so every head-relation fact is a planted consequence.
//! The planted chains double as ground truth for learnability and
//! evidence-recovery checks: every consequence is answerable via a 2-hop
//! path inside its history window (verified by BFS at generation time).

use crate::data::{split_by_time, DatasetSplit, Quadruple, RawQuadruple, SnapshotSequence};
use crate::error::DataError;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use std::collections::BTreeSet;

/// A compositional rule: `r1` then `r2` (in temporal order) implies `r3`
/// one step after the body completes.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PlantedRule {
    /// Body relations (r1, r2), fired with t1 < t2.
    pub body: (usize, usize),
    /// Head relation r3, fired at t2 + 1.
    pub head: usize,
}

impl PlantedRule {
    pub fn validate(&self) -> Result<(), DataError> {
        let (r1, r2) = self.body;
        if r1 == r2 || r1 == self.head || r2 == self.head {
            return Err(DataError::Infeasible(
                "planted rule needs three distinct relations".into(),
            ));
        }
        Ok(())
    }
}

/// Generator options.
#[derive(Clone, Debug)]
pub struct PlantedConfig {
    pub num_entities: usize,
    pub num_timestamps: usize,
    pub num_base_relations: usize,
    pub num_chains: usize,
    /// Expected noise edges per entity per timestamp (0.25 with the default
    /// 8-step window is 2 noise edges per entity per window).
    pub noise_edge_rate: f64,
    /// History window length consequences must be answerable within.
    pub history_len: usize,
    pub rule: PlantedRule,
    pub train_frac: f64,
    pub valid_frac: f64,
    pub seed: u64,
}

impl Default for PlantedConfig {
    fn default() -> Self {
        PlantedConfig {
            num_entities: 50,
            num_timestamps: 60,
            num_base_relations: 4,
            num_chains: 40,
            noise_edge_rate: 0.25,
            history_len: 8,
            rule: PlantedRule {
                body: (0, 1),
                head: 2,
            },
            train_frac: 0.8,
            valid_frac: 0.1,
            seed: 7,
        }
    }
}

/// One planted chain with its consequence timestamp `t2 + 1`.
#[derive(Clone, Copy, Debug)]
pub struct Chain {
    pub x: usize,
    pub y: usize,
    pub z: usize,
    pub t1: usize,
    pub t2: usize,
}

impl Chain {
    pub fn consequence_time(&self) -> usize {
        self.t2 + 1
    }
}

/// Generated dataset plus its ground truth.
#[derive(Clone, Debug)]
pub struct PlantedDataset {
    /// Raw (pre-augmentation) facts, as written to disk.
    pub base_facts: Vec<RawQuadruple>,
    /// The augmented, snapshot-grouped sequence.
    pub sequence: SnapshotSequence,
    pub split: DatasetSplit,
    pub chains: Vec<Chain>,
    /// Planted consequences with timestamps in the test range.
    pub ground_truth: Vec<Quadruple>,
    pub config: PlantedConfig,
}

impl PlantedDataset {
    /// Ground-truth consequences whose full chain lies inside the given
    /// entity set, remapped through `remap` (used for inductive sides).
    pub fn ground_truth_within(
        &self,
        entities: &BTreeSet<usize>,
        remap: impl Fn(usize) -> usize,
        min_time: usize,
    ) -> Vec<Quadruple> {
        let mut out = BTreeSet::new();
        for c in &self.chains {
            if c.consequence_time() >= min_time
                && entities.contains(&c.x)
                && entities.contains(&c.y)
                && entities.contains(&c.z)
            {
                out.insert(Quadruple::new(
                    remap(c.x),
                    self.config.rule.head,
                    remap(c.z),
                    c.consequence_time(),
                ));
            }
        }
        out.into_iter().collect()
    }
}

/// Generates a planted-rule dataset. Deterministic in the seed.
pub fn gen_planted(cfg: &PlantedConfig) -> Result<PlantedDataset, DataError> {
    cfg.rule.validate()?;
    if cfg.num_entities < 6 {
        return Err(DataError::Infeasible(format!(
            "need at least 6 entities, got {}",
            cfg.num_entities
        )));
    }
    if cfg.num_timestamps < 5 {
        return Err(DataError::Infeasible(format!(
            "need at least 5 timestamps, got {}",
            cfg.num_timestamps
        )));
    }
    let max_rel = cfg.rule.body.0.max(cfg.rule.body.1).max(cfg.rule.head);
    if max_rel >= cfg.num_base_relations {
        return Err(DataError::Infeasible(format!(
            "rule relation {max_rel} outside base vocabulary of {}",
            cfg.num_base_relations
        )));
    }
    if cfg.history_len < 2 {
        return Err(DataError::Infeasible(
            "history_len must be at least 2 for a two-hop body".into(),
        ));
    }
    let mut rng = ChaCha12Rng::seed_from_u64(cfg.seed);
    let t_max = cfg.num_timestamps - 1;
    let mut facts: BTreeSet<(usize, usize, usize, usize)> = BTreeSet::new();
    let mut chains = Vec::with_capacity(cfg.num_chains);

    for _ in 0..cfg.num_chains {
        // consequence lands in [2, t_max]; body inside the preceding window
        let t2 = rng.gen_range(1..t_max);
        let t1_lo = (t2 + 1).saturating_sub(cfg.history_len);
        let t1 = rng.gen_range(t1_lo..t2);
        let x = rng.gen_range(0..cfg.num_entities);
        let y = loop {
            let y = rng.gen_range(0..cfg.num_entities);
            if y != x {
                break y;
            }
        };
        let z = loop {
            let z = rng.gen_range(0..cfg.num_entities);
            if z != x && z != y {
                break z;
            }
        };
        let chain = Chain { x, y, z, t1, t2 };
        facts.insert((x, cfg.rule.body.0, y, t1));
        facts.insert((y, cfg.rule.body.1, z, t2));
        facts.insert((x, cfg.rule.head, z, chain.consequence_time()));
        chains.push(chain);
    }

    // noise: uniformly random edges over base relations except the head
    let noise_rels: Vec<usize> = (0..cfg.num_base_relations)
        .filter(|&r| r != cfg.rule.head)
        .collect();
    let per_snapshot = cfg.noise_edge_rate * cfg.num_entities as f64;
    for t in 0..cfg.num_timestamps {
        let count = per_snapshot.floor() as usize
            + usize::from(rng.gen_bool(per_snapshot.fract().clamp(0.0, 1.0)));
        for _ in 0..count {
            let s = rng.gen_range(0..cfg.num_entities);
            let o = loop {
                let o = rng.gen_range(0..cfg.num_entities);
                if o != s {
                    break o;
                }
            };
            let r = *noise_rels.choose(&mut rng).expect("nonempty noise relations");
            facts.insert((s, r, o, t));
        }
    }

    let base_facts: Vec<RawQuadruple> = facts
        .into_iter()
        .map(|(s, r, o, t)| RawQuadruple {
            subject: s,
            relation: r,
            object: o,
            timestamp: t as u64,
        })
        .collect();
    let time_map: std::collections::BTreeMap<u64, usize> =
        (0..cfg.num_timestamps as u64).map(|t| (t, t as usize)).collect();
    let raw_timestamps: Vec<u64> = (0..cfg.num_timestamps as u64).collect();
    let sequence = crate::data::build_sequence(
        &base_facts,
        cfg.num_entities,
        cfg.num_base_relations,
        &time_map,
        &raw_timestamps,
    );
    let split = split_by_time(&sequence, cfg.train_frac, cfg.valid_frac)?;
    let min_test_time = split
        .test
        .snapshots
        .first()
        .map(|(t, _)| *t)
        .unwrap_or(usize::MAX);

    // every consequence must be answerable from its window: X reaches Z in
    // two hops over edges strictly before the consequence time
    for c in &chains {
        let qt = c.consequence_time();
        let window_start = qt.saturating_sub(cfg.history_len);
        assert!(
            c.t1 >= window_start && c.t2 >= window_start && c.t2 < qt,
            "chain body must lie inside the history window"
        );
        let window = crate::data::history_window(&sequence, qt, cfg.history_len);
        let mut reach: BTreeSet<usize> = BTreeSet::from([c.x]);
        for _ in 0..2 {
            let mut next = reach.clone();
            for (_, snap) in &window {
                for q in snap {
                    if reach.contains(&q.subject) {
                        next.insert(q.object);
                    }
                }
            }
            reach = next;
        }
        assert!(
            reach.contains(&c.z),
            "consequence object must be 2-hop reachable in its window"
        );
    }

    let mut ground_truth: Vec<Quadruple> = chains
        .iter()
        .filter(|c| c.consequence_time() >= min_test_time)
        .map(|c| Quadruple::new(c.x, cfg.rule.head, c.z, c.consequence_time()))
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    ground_truth.sort();

    Ok(PlantedDataset {
        base_facts,
        sequence,
        split,
        chains,
        ground_truth,
        config: cfg.clone(),
    })
}

/// A fully-inductive pair: two sequences over disjoint entity sets sharing
/// one relation vocabulary.
#[derive(Clone, Debug)]
pub struct InductivePair {
    pub side_a: SnapshotSequence,
    pub side_b: SnapshotSequence,
    /// Original entity ids assigned to each side.
    pub entities_a: BTreeSet<usize>,
    pub entities_b: BTreeSet<usize>,
    /// Original id -> dense id within its side.
    pub remap_a: std::collections::BTreeMap<usize, usize>,
    pub remap_b: std::collections::BTreeMap<usize, usize>,
    pub ratio: f64,
}

/// Partitions entities by `ratio`, keeps only facts with both endpoints on
/// one side, and symmetrically drops facts whose relation does not occur
/// on both sides. Relation ids are left untouched so checkpoints transfer.
pub fn make_inductive(
    seq: &SnapshotSequence,
    ratio: f64,
    seed: u64,
) -> Result<InductivePair, DataError> {
    if !(0.0 < ratio && ratio < 1.0) {
        return Err(DataError::Infeasible(format!(
            "ratio must be in (0, 1), got {ratio}"
        )));
    }
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let mut ids: Vec<usize> = (0..seq.num_entities).collect();
    ids.shuffle(&mut rng);
    let cut = ((seq.num_entities as f64 * ratio).round() as usize)
        .clamp(1, seq.num_entities - 1);
    let entities_a: BTreeSet<usize> = ids[..cut].iter().copied().collect();
    let entities_b: BTreeSet<usize> = ids[cut..].iter().copied().collect();

    let collect_side = |entities: &BTreeSet<usize>| -> Vec<(usize, Vec<Quadruple>)> {
        seq.snapshots
            .iter()
            .map(|(t, facts)| {
                (
                    *t,
                    facts
                        .iter()
                        .filter(|q| entities.contains(&q.subject) && entities.contains(&q.object))
                        .copied()
                        .collect::<Vec<_>>(),
                )
            })
            .filter(|(_, facts)| !facts.is_empty())
            .collect()
    };
    let side_a_facts = collect_side(&entities_a);
    let side_b_facts = collect_side(&entities_b);

    let rel_set = |facts: &[(usize, Vec<Quadruple>)]| -> BTreeSet<usize> {
        facts
            .iter()
            .flat_map(|(_, f)| f.iter().map(|q| q.relation))
            .collect()
    };
    let shared: BTreeSet<usize> = rel_set(&side_a_facts)
        .intersection(&rel_set(&side_b_facts))
        .copied()
        .collect();

    let build_side = |facts: Vec<(usize, Vec<Quadruple>)>,
                      entities: &BTreeSet<usize>,
                      side: &'static str|
     -> Result<(SnapshotSequence, std::collections::BTreeMap<usize, usize>), DataError> {
        let remap: std::collections::BTreeMap<usize, usize> = entities
            .iter()
            .enumerate()
            .map(|(new, &old)| (old, new))
            .collect();
        let snapshots: Vec<(usize, Vec<Quadruple>)> = facts
            .into_iter()
            .map(|(t, fs)| {
                (
                    t,
                    fs.into_iter()
                        .filter(|q| shared.contains(&q.relation))
                        .map(|q| {
                            Quadruple::new(remap[&q.subject], q.relation, remap[&q.object], t)
                        })
                        .collect::<Vec<_>>(),
                )
            })
            .filter(|(_, fs)| !fs.is_empty())
            .collect();
        if snapshots.is_empty() {
            return Err(DataError::EmptySide { side });
        }
        Ok((
            SnapshotSequence {
                snapshots,
                num_entities: entities.len(),
                num_relations: seq.num_relations,
                raw_timestamps: seq.raw_timestamps.clone(),
            },
            remap,
        ))
    };
    let (side_a, remap_a) = build_side(side_a_facts, &entities_a, "A")?;
    let (side_b, remap_b) = build_side(side_b_facts, &entities_b, "B")?;

    // postcondition: shared relation vocabulary after pruning
    debug_assert_eq!(
        side_a
            .all_facts()
            .map(|q| q.relation)
            .collect::<BTreeSet<_>>(),
        side_b
            .all_facts()
            .map(|q| q.relation)
            .collect::<BTreeSet<_>>()
    );

    Ok(InductivePair {
        side_a,
        side_b,
        entities_a,
        entities_b,
        remap_a,
        remap_b,
        ratio,
    })
}
