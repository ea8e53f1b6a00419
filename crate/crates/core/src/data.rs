//! Quadruple datasets: loading, validation, inverse-edge augmentation,
//! timestamp-ordered splitting and history windows.
//!
//! The on-disk format is the common benchmark convention: one fact per
//! line, `s r o t` as whitespace-separated integers, with an adjacent
//! `stat.txt` holding `num_entities num_relations_base`. For every loaded
//! fact `(s, r, o, t)` the inverse `(o, r + |R_base|, s, t)` is inserted,
//! so `num_relations` on a [`SnapshotSequence`] is always the augmented
//! count. Raw timestamps are normalized to consecutive ids; the map back
//! to raw values is kept for reporting.

use crate::error::DataError;
use std::collections::{BTreeMap, BTreeSet};
use std::io::{BufRead, Write};
use std::path::Path;

/// A timestamped fact `(subject, relation, object, timestamp)`.
///
/// Relation ids are post-augmentation: `r < |R_base|` are original facts,
/// `r >= |R_base|` their inverses. Timestamps are normalized ids.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Quadruple {
    pub subject: usize,
    pub relation: usize,
    pub object: usize,
    pub timestamp: usize,
}

impl Quadruple {
    pub fn new(subject: usize, relation: usize, object: usize, timestamp: usize) -> Self {
        Quadruple {
            subject,
            relation,
            object,
            timestamp,
        }
    }
}

/// Facts grouped into per-timestamp snapshots, inverse edges included.
#[derive(Clone, Debug)]
pub struct SnapshotSequence {
    /// `(normalized timestamp, facts at that timestamp)`, timestamps
    /// strictly increasing, facts deduplicated within a snapshot.
    pub snapshots: Vec<(usize, Vec<Quadruple>)>,
    pub num_entities: usize,
    /// Post-augmentation relation count (`2 * |R_base|`).
    pub num_relations: usize,
    /// Normalized timestamp id -> raw timestamp from the source file.
    pub raw_timestamps: Vec<u64>,
}

impl SnapshotSequence {
    pub fn num_base_relations(&self) -> usize {
        self.num_relations / 2
    }

    pub fn num_snapshots(&self) -> usize {
        self.snapshots.len()
    }

    pub fn num_facts(&self) -> usize {
        self.snapshots.iter().map(|(_, e)| e.len()).sum()
    }

    pub fn timestamps(&self) -> impl Iterator<Item = usize> + '_ {
        self.snapshots.iter().map(|(t, _)| *t)
    }

    pub fn snapshot_at(&self, t: usize) -> Option<&[Quadruple]> {
        self.snapshots
            .iter()
            .find(|(st, _)| *st == t)
            .map(|(_, e)| e.as_slice())
    }

    pub fn all_facts(&self) -> impl Iterator<Item = &Quadruple> + '_ {
        self.snapshots.iter().flat_map(|(_, e)| e.iter())
    }

    /// Inverse relation id under the augmentation convention.
    pub fn inverse_relation(&self, r: usize) -> usize {
        inverse_relation(r, self.num_base_relations())
    }

    /// Normalized id of a raw timestamp, if it occurs in this dataset.
    pub fn normalize_raw_time(&self, raw: u64) -> Option<usize> {
        self.raw_timestamps.binary_search(&raw).ok()
    }
}

/// `inv(r) = r + |R_base|` for base relations and `r - |R_base|` for
/// inverse ones; applying it twice is the identity.
pub fn inverse_relation(r: usize, num_base: usize) -> usize {
    if r < num_base {
        r + num_base
    } else {
        r - num_base
    }
}

/// Timestamp-ordered train/valid/test triple sharing one vocabulary.
#[derive(Clone, Debug)]
pub struct DatasetSplit {
    pub train: SnapshotSequence,
    pub valid: SnapshotSequence,
    pub test: SnapshotSequence,
}

impl DatasetSplit {
    pub fn num_entities(&self) -> usize {
        self.train.num_entities
    }

    pub fn num_relations(&self) -> usize {
        self.train.num_relations
    }

    /// All snapshots merged back into one sequence; windows for validation
    /// and test queries draw from this so a query at time `t` can see every
    /// ground-truth fact strictly before `t`.
    pub fn full_sequence(&self) -> SnapshotSequence {
        let mut snapshots = self.train.snapshots.clone();
        snapshots.extend(self.valid.snapshots.iter().cloned());
        snapshots.extend(self.test.snapshots.iter().cloned());
        snapshots.sort_by_key(|(t, _)| *t);
        SnapshotSequence {
            snapshots,
            num_entities: self.train.num_entities,
            num_relations: self.train.num_relations,
            raw_timestamps: self.train.raw_timestamps.clone(),
        }
    }

    /// Enforces `(timestamps of train) < (timestamps of valid) <
    /// (timestamps of test)`.
    pub fn validate_ordering(&self) -> Result<(), DataError> {
        let max_t = |s: &SnapshotSequence| s.snapshots.last().map(|(t, _)| *t);
        let min_t = |s: &SnapshotSequence| s.snapshots.first().map(|(t, _)| *t);
        if let (Some(a), Some(b)) = (max_t(&self.train), min_t(&self.valid)) {
            if a >= b {
                return Err(DataError::SplitOrdering(format!(
                    "max train timestamp {a} >= min valid timestamp {b}"
                )));
            }
        }
        if let (Some(a), Some(b)) = (max_t(&self.valid), min_t(&self.test)) {
            if a >= b {
                return Err(DataError::SplitOrdering(format!(
                    "max valid timestamp {a} >= min test timestamp {b}"
                )));
            }
        }
        Ok(())
    }
}

/// A raw (pre-augmentation, pre-normalization) parsed fact.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub struct RawQuadruple {
    pub subject: usize,
    pub relation: usize,
    pub object: usize,
    pub timestamp: u64,
}

/// Parses one quadruple file without normalizing timestamps. Lines need at
/// least four whitespace-separated integer fields; extra fields are
/// ignored; blank lines are skipped.
pub fn parse_quadruple_file(
    path: &Path,
    num_entities: usize,
    num_base_relations: usize,
) -> Result<Vec<RawQuadruple>, DataError> {
    let file = std::fs::File::open(path).map_err(|source| DataError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let reader = std::io::BufReader::new(file);
    let mut out = Vec::new();
    for (idx, line) in reader.lines().enumerate() {
        let line_no = idx + 1;
        let line = line.map_err(|source| DataError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        let trimmed = line.trim();
        if trimmed.is_empty() {
            continue;
        }
        let fields: Vec<&str> = trimmed.split_whitespace().collect();
        if fields.len() < 4 {
            return Err(DataError::Parse {
                path: path.to_path_buf(),
                line: line_no,
                reason: format!("expected at least 4 fields, found {}", fields.len()),
            });
        }
        let mut parsed = [0u64; 4];
        for (k, field) in fields[..4].iter().enumerate() {
            parsed[k] = field.parse::<u64>().map_err(|_| DataError::Parse {
                path: path.to_path_buf(),
                line: line_no,
                reason: format!("field {} ({:?}) is not a nonnegative integer", k + 1, field),
            })?;
        }
        let [s, r, o, t] = parsed;
        let check = |field: &'static str, value: u64, bound: usize| -> Result<usize, DataError> {
            if (value as usize) < bound {
                Ok(value as usize)
            } else {
                Err(DataError::OutOfRange {
                    path: path.to_path_buf(),
                    line: line_no,
                    field,
                    value,
                    bound,
                })
            }
        };
        out.push(RawQuadruple {
            subject: check("subject", s, num_entities)?,
            relation: check("relation", r, num_base_relations)?,
            object: check("object", o, num_entities)?,
            timestamp: t,
        });
    }
    Ok(out)
}

/// Groups raw facts into snapshots under a shared raw-to-normalized
/// timestamp map, adding inverse edges and deduplicating per snapshot.
pub fn build_sequence(
    raw: &[RawQuadruple],
    num_entities: usize,
    num_base_relations: usize,
    time_map: &BTreeMap<u64, usize>,
    raw_timestamps: &[u64],
) -> SnapshotSequence {
    let mut by_time: BTreeMap<usize, Vec<Quadruple>> = BTreeMap::new();
    for q in raw {
        let t = time_map[&q.timestamp];
        let bucket = by_time.entry(t).or_default();
        bucket.push(Quadruple::new(q.subject, q.relation, q.object, t));
        bucket.push(Quadruple::new(
            q.object,
            q.relation + num_base_relations,
            q.subject,
            t,
        ));
    }
    let snapshots = by_time
        .into_iter()
        .map(|(t, edges)| (t, dedup_preserving_order(edges)))
        .collect();
    SnapshotSequence {
        snapshots,
        num_entities,
        num_relations: 2 * num_base_relations,
        raw_timestamps: raw_timestamps.to_vec(),
    }
}

/// Each snapshot is a set of facts: duplicates within one timestamp are
/// dropped (first occurrence kept); duplicates across timestamps remain
/// distinct facts.
fn dedup_preserving_order(edges: Vec<Quadruple>) -> Vec<Quadruple> {
    let mut seen = BTreeSet::new();
    edges.into_iter().filter(|q| seen.insert(*q)).collect()
}

fn normalize_timestamps(raw: &[RawQuadruple]) -> (BTreeMap<u64, usize>, Vec<u64>) {
    let distinct: BTreeSet<u64> = raw.iter().map(|q| q.timestamp).collect();
    let raw_timestamps: Vec<u64> = distinct.into_iter().collect();
    let map = raw_timestamps
        .iter()
        .enumerate()
        .map(|(i, &t)| (t, i))
        .collect();
    (map, raw_timestamps)
}

/// Loads one quadruple file: parse, validate, normalize timestamps to
/// consecutive ids, group by snapshot, add inverse edges.
pub fn load_quadruple_file(
    path: &Path,
    num_entities: usize,
    num_base_relations: usize,
) -> Result<SnapshotSequence, DataError> {
    let raw = parse_quadruple_file(path, num_entities, num_base_relations)?;
    let (time_map, raw_timestamps) = normalize_timestamps(&raw);
    Ok(build_sequence(
        &raw,
        num_entities,
        num_base_relations,
        &time_map,
        &raw_timestamps,
    ))
}

/// Writes every stored fact (originals and inverses) as `s r o t` lines
/// using raw timestamps.
pub fn write_quadruple_file(seq: &SnapshotSequence, path: &Path) -> Result<(), DataError> {
    let mut file = std::fs::File::create(path).map_err(|source| DataError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let mut buf = String::new();
    for (t, edges) in &seq.snapshots {
        let raw_t = seq.raw_timestamps.get(*t).copied().unwrap_or(*t as u64);
        for q in edges {
            buf.push_str(&format!(
                "{} {} {} {}\n",
                q.subject, q.relation, q.object, raw_t
            ));
        }
    }
    file.write_all(buf.as_bytes()).map_err(|source| DataError::Io {
        path: path.to_path_buf(),
        source,
    })
}

/// Reads the `num_entities num_relations_base` stat line.
pub fn read_stat_file(path: &Path) -> Result<(usize, usize), DataError> {
    let text = std::fs::read_to_string(path).map_err(|source| DataError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let fields: Vec<&str> = text.split_whitespace().collect();
    if fields.len() < 2 {
        return Err(DataError::Parse {
            path: path.to_path_buf(),
            line: 1,
            reason: "stat file needs `num_entities num_relations_base`".into(),
        });
    }
    let parse = |s: &str| {
        s.parse::<usize>().map_err(|_| DataError::Parse {
            path: path.to_path_buf(),
            line: 1,
            reason: format!("{s:?} is not a nonnegative integer"),
        })
    };
    Ok((parse(fields[0])?, parse(fields[1])?))
}

/// Loads a benchmark-style directory: `stat.txt` (or `stat`) plus
/// `train.txt`, `valid.txt`, `test.txt`, normalizing timestamps jointly so
/// the split ordering invariant is checkable.
pub fn load_dataset_dir(dir: &Path) -> Result<DatasetSplit, DataError> {
    let stat_path = ["stat.txt", "stat"]
        .iter()
        .map(|n| dir.join(n))
        .find(|p| p.exists())
        .ok_or_else(|| DataError::Io {
            path: dir.join("stat.txt"),
            source: std::io::Error::new(std::io::ErrorKind::NotFound, "missing stat file"),
        })?;
    let (num_entities, num_base) = read_stat_file(&stat_path)?;
    let mut parts = Vec::new();
    for name in ["train.txt", "valid.txt", "test.txt"] {
        parts.push(parse_quadruple_file(
            &dir.join(name),
            num_entities,
            num_base,
        )?);
    }
    let all: Vec<RawQuadruple> = parts.iter().flatten().copied().collect();
    let (time_map, raw_timestamps) = normalize_timestamps(&all);
    let mut seqs = parts
        .iter()
        .map(|raw| build_sequence(raw, num_entities, num_base, &time_map, &raw_timestamps));
    let split = DatasetSplit {
        train: seqs.next().unwrap(),
        valid: seqs.next().unwrap(),
        test: seqs.next().unwrap(),
    };
    split.validate_ordering()?;
    Ok(split)
}

/// Writes a stat file next to dataset files.
pub fn write_stat_file(
    path: &Path,
    num_entities: usize,
    num_base_relations: usize,
) -> Result<(), DataError> {
    std::fs::write(path, format!("{num_entities} {num_base_relations}\n")).map_err(|source| {
        DataError::Io {
            path: path.to_path_buf(),
            source,
        }
    })
}

/// Splits a sequence into contiguous timestamp ranges. Snapshot counts are
/// rounded from the fractions with a floor of one snapshot per part.
pub fn split_by_time(
    seq: &SnapshotSequence,
    train_frac: f64,
    valid_frac: f64,
) -> Result<DatasetSplit, DataError> {
    if !(train_frac > 0.0 && valid_frac > 0.0 && train_frac + valid_frac < 1.0) {
        return Err(DataError::BadSplitFractions {
            train: train_frac,
            valid: valid_frac,
            reason: "need 0 < train, 0 < valid, train + valid < 1".into(),
        });
    }
    let total = seq.snapshots.len();
    if total < 3 {
        return Err(DataError::TooFewTimestamps {
            needed: 3,
            found: total,
        });
    }
    let n_train = ((total as f64 * train_frac).round() as usize).max(1);
    let n_valid = ((total as f64 * valid_frac).round() as usize).max(1);
    if n_train + n_valid >= total {
        return Err(DataError::BadSplitFractions {
            train: train_frac,
            valid: valid_frac,
            reason: format!("{total} timestamps leave no room for a test range"),
        });
    }
    let take = |range: std::ops::Range<usize>| SnapshotSequence {
        snapshots: seq.snapshots[range].to_vec(),
        num_entities: seq.num_entities,
        num_relations: seq.num_relations,
        raw_timestamps: seq.raw_timestamps.clone(),
    };
    let split = DatasetSplit {
        train: take(0..n_train),
        valid: take(n_train..n_train + n_valid),
        test: take(n_train + n_valid..total),
    };
    split.validate_ordering()?;
    Ok(split)
}

/// The up-to-`m` snapshots with the largest timestamps strictly less than
/// `query_time`, in ascending timestamp order. Empty history is allowed.
pub fn history_window(
    seq: &SnapshotSequence,
    query_time: usize,
    m: usize,
) -> Vec<(usize, Vec<Quadruple>)> {
    assert!(m >= 1, "history window length must be >= 1");
    let end = seq.snapshots.partition_point(|(t, _)| *t < query_time);
    let start = end.saturating_sub(m);
    seq.snapshots[start..end].to_vec()
}
