//! Event-sequence data model, JSONL persistence, and deterministic splitting.
//!
//! The on-disk format is JSON-Lines: the first line is a header object
//! `{"num_types": K, "t_max": float}` (optionally carrying `max_gap`), every
//! following line is one sequence `{"id": string, "events": [[time, mark], ...]}`.
//! This format is the contract between all pipeline stages.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;

/// A single marked event: arrival time and event-type id.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Event {
    /// Arrival time, non-negative, in abstract time units.
    pub time: f64,
    /// Event-type id in `[0, K)` for the owning dataset's `K`.
    pub mark: usize,
}

/// An ordered sequence of events belonging to one entity.
#[derive(Debug, Clone, PartialEq)]
pub struct EventSequence {
    pub id: String,
    /// Sorted non-decreasing by time.
    pub events: Vec<Event>,
}

impl EventSequence {
    pub fn new(id: impl Into<String>, events: Vec<Event>) -> Self {
        EventSequence {
            id: id.into(),
            events,
        }
    }

    pub fn len(&self) -> usize {
        self.events.len()
    }

    pub fn is_empty(&self) -> bool {
        self.events.is_empty()
    }

    pub fn is_sorted(&self) -> bool {
        self.events.windows(2).all(|w| w[0].time <= w[1].time)
    }

    /// Restore the time ordering in place. Ties keep their relative order.
    pub fn sort_by_time(&mut self) {
        self.events
            .sort_by(|a, b| a.time.partial_cmp(&b.time).expect("finite times"));
    }

    /// Largest inter-event gap, 0 for sequences of length 1.
    pub fn max_gap(&self) -> f64 {
        self.events
            .windows(2)
            .map(|w| w[1].time - w[0].time)
            .fold(0.0, f64::max)
    }
}

/// A collection of event sequences over `num_types` marks on `[0, t_max]`.
///
/// Immutable after construction; safe to share across concurrent readers.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub sequences: Vec<EventSequence>,
    pub num_types: usize,
    pub t_max: f64,
    /// Normalization constant for inter-event gaps, when one has been fixed
    /// upstream (written by the corruption stage, consumed by training).
    pub max_gap: Option<f64>,
}

impl Dataset {
    pub fn new(sequences: Vec<EventSequence>, num_types: usize, t_max: f64) -> Result<Self> {
        let d = Dataset {
            sequences,
            num_types,
            t_max,
            max_gap: None,
        };
        d.validate()?;
        Ok(d)
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_types == 0 {
            return Err(Error::Config("num_types must be positive".into()));
        }
        if !(self.t_max > 0.0) {
            return Err(Error::Config(format!("t_max must be positive, got {}", self.t_max)));
        }
        for seq in &self.sequences {
            if seq.is_empty() {
                return Err(Error::Contract(format!("sequence {} has no events", seq.id)));
            }
            if !seq.is_sorted() {
                return Err(Error::Contract(format!("sequence {} is not time-sorted", seq.id)));
            }
            for ev in &seq.events {
                if !(ev.time >= 0.0 && ev.time <= self.t_max) {
                    return Err(Error::Contract(format!(
                        "sequence {}: time {} outside [0, {}]",
                        seq.id, ev.time, self.t_max
                    )));
                }
                if ev.mark >= self.num_types {
                    return Err(Error::Contract(format!(
                        "sequence {}: mark {} >= num_types {}",
                        seq.id, ev.mark, self.num_types
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.sequences.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sequences.is_empty()
    }

    pub fn total_events(&self) -> usize {
        self.sequences.iter().map(EventSequence::len).sum()
    }

    /// Largest inter-event gap over all sequences.
    pub fn observed_max_gap(&self) -> f64 {
        self.sequences
            .iter()
            .map(EventSequence::max_gap)
            .fold(0.0, f64::max)
    }
}

/// Fractions for a four-way sequence-level split. Must sum to 1.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct SplitSpec {
    pub train_frac: f64,
    pub val_frac: f64,
    pub test_frac: f64,
    pub clean_frac: f64,
    pub seed: u64,
}

impl SplitSpec {
    pub fn validate(&self) -> Result<()> {
        let fracs = [self.train_frac, self.val_frac, self.test_frac, self.clean_frac];
        for f in fracs {
            if !(0.0..=1.0).contains(&f) {
                return Err(Error::Config(format!("split fraction {f} outside [0,1]")));
            }
        }
        let sum: f64 = fracs.iter().sum();
        if (sum - 1.0).abs() > 1e-9 {
            return Err(Error::Config(format!("split fractions sum to {sum}, expected 1")));
        }
        Ok(())
    }
}

/// Result of a four-way split, plus warnings for splits that rounded to zero.
#[derive(Debug)]
pub struct Split {
    pub train: Dataset,
    pub val: Dataset,
    pub test: Dataset,
    pub clean: Dataset,
    /// Names of splits whose fraction was positive but size rounded to zero.
    pub empty_warnings: Vec<&'static str>,
}

/// Partition a dataset into train/val/test/clean at sequence granularity.
///
/// The partition is disjoint, exhaustive, and deterministic given the seed.
/// The clean split is carved out of the contiguous block designated for
/// training, so it is drawn from the training pool before any corruption.
pub fn split(dataset: &Dataset, spec: &SplitSpec) -> Result<Split> {
    spec.validate()?;
    if dataset.is_empty() {
        return Err(Error::EmptyDataset("cannot split an empty dataset".into()));
    }

    let n = dataset.len();
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = rng::stream(spec.seed, &[0x53504c49]);
    order.shuffle(&mut rng);

    // Largest-remainder apportionment in fixed split order.
    let fracs = [spec.train_frac, spec.clean_frac, spec.val_frac, spec.test_frac];
    let ideal: Vec<f64> = fracs.iter().map(|f| f * n as f64).collect();
    let mut sizes: Vec<usize> = ideal.iter().map(|x| x.floor() as usize).collect();
    let mut leftover = n - sizes.iter().sum::<usize>();
    let mut by_remainder: Vec<usize> = (0..4).collect();
    by_remainder.sort_by(|&a, &b| {
        let ra = ideal[a] - ideal[a].floor();
        let rb = ideal[b] - ideal[b].floor();
        rb.partial_cmp(&ra).unwrap().then(a.cmp(&b))
    });
    for idx in by_remainder {
        if leftover == 0 {
            break;
        }
        sizes[idx] += 1;
        leftover -= 1;
    }

    let take = |start: usize, count: usize| -> Vec<EventSequence> {
        order[start..start + count]
            .iter()
            .map(|&i| dataset.sequences[i].clone())
            .collect()
    };
    let (n_train, n_clean, n_val, n_test) = (sizes[0], sizes[1], sizes[2], sizes[3]);
    let mut offset = 0;
    let train_seqs = take(offset, n_train);
    offset += n_train;
    let clean_seqs = take(offset, n_clean);
    offset += n_clean;
    let val_seqs = take(offset, n_val);
    offset += n_val;
    let test_seqs = take(offset, n_test);

    let mk = |seqs: Vec<EventSequence>| -> Dataset {
        Dataset {
            sequences: seqs,
            num_types: dataset.num_types,
            t_max: dataset.t_max,
            max_gap: dataset.max_gap,
        }
    };

    let mut empty_warnings = Vec::new();
    let named = [
        ("train", spec.train_frac, n_train),
        ("clean", spec.clean_frac, n_clean),
        ("val", spec.val_frac, n_val),
        ("test", spec.test_frac, n_test),
    ];
    for (name, frac, size) in named {
        if frac > 0.0 && size == 0 {
            empty_warnings.push(name);
        }
    }

    Ok(Split {
        train: mk(train_seqs),
        val: mk(val_seqs),
        test: mk(test_seqs),
        clean: mk(clean_seqs),
        empty_warnings,
    })
}

#[derive(Serialize, Deserialize)]
struct HeaderLine {
    num_types: usize,
    t_max: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    max_gap: Option<f64>,
}

#[derive(Serialize, Deserialize)]
struct SequenceLine {
    id: String,
    events: Vec<(f64, usize)>,
}

/// A loaded dataset plus repair metadata.
#[derive(Debug)]
pub struct Loaded {
    pub dataset: Dataset,
    /// Number of sequences that arrived unsorted and were re-sorted.
    pub resorted: usize,
}

/// Load a dataset from JSONL, enforcing all invariants.
///
/// Unsorted sequences are repaired by sorting (time-noise corruption
/// legitimately produces out-of-order raw records) and counted in the
/// returned metadata rather than rejected.
pub fn load_dataset(path: impl AsRef<Path>) -> Result<Loaded> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let reader = BufReader::new(file);
    let mut lines = reader.lines().enumerate();

    let header: HeaderLine = match lines.next() {
        None => return Err(Error::EmptyDataset(format!("{} has no header line", path.display()))),
        Some((_, line)) => {
            let line = line.map_err(|e| Error::io(path.display().to_string(), e))?;
            serde_json::from_str(&line).map_err(|e| Error::MalformedInput {
                line: 1,
                message: format!("bad header: {e}"),
            })?
        }
    };
    if header.num_types == 0 {
        return Err(Error::SchemaViolation {
            line: 1,
            message: "num_types must be positive".into(),
        });
    }
    if !(header.t_max > 0.0) {
        return Err(Error::SchemaViolation {
            line: 1,
            message: format!("t_max must be positive, got {}", header.t_max),
        });
    }

    let mut sequences = Vec::new();
    let mut resorted = 0usize;
    for (idx, line) in lines {
        let line_no = idx + 1;
        let line = line.map_err(|e| Error::io(path.display().to_string(), e))?;
        if line.trim().is_empty() {
            continue;
        }
        let parsed: SequenceLine = serde_json::from_str(&line).map_err(|e| Error::MalformedInput {
            line: line_no,
            message: e.to_string(),
        })?;
        if parsed.events.is_empty() {
            return Err(Error::SchemaViolation {
                line: line_no,
                message: format!("sequence {} has no events", parsed.id),
            });
        }
        let mut events = Vec::with_capacity(parsed.events.len());
        for (time, mark) in parsed.events {
            if !time.is_finite() || time < 0.0 {
                return Err(Error::SchemaViolation {
                    line: line_no,
                    message: format!("time {time} is not a finite non-negative number"),
                });
            }
            if time > header.t_max {
                return Err(Error::SchemaViolation {
                    line: line_no,
                    message: format!("time {} exceeds t_max {}", time, header.t_max),
                });
            }
            if mark >= header.num_types {
                return Err(Error::SchemaViolation {
                    line: line_no,
                    message: format!("mark {} >= num_types {}", mark, header.num_types),
                });
            }
            events.push(Event { time, mark });
        }
        let mut seq = EventSequence::new(parsed.id, events);
        if !seq.is_sorted() {
            seq.sort_by_time();
            resorted += 1;
        }
        sequences.push(seq);
    }

    let dataset = Dataset {
        sequences,
        num_types: header.num_types,
        t_max: header.t_max,
        max_gap: header.max_gap,
    };
    dataset.validate()?;
    Ok(Loaded { dataset, resorted })
}

/// Canonical JSONL form of a dataset: the exact bytes `save_dataset` writes.
pub fn to_jsonl_string(dataset: &Dataset) -> String {
    let header = HeaderLine {
        num_types: dataset.num_types,
        t_max: dataset.t_max,
        max_gap: dataset.max_gap,
    };
    let mut out = serde_json::to_string(&header).expect("header serializes");
    out.push('\n');
    for seq in &dataset.sequences {
        let line = SequenceLine {
            id: seq.id.clone(),
            events: seq.events.iter().map(|e| (e.time, e.mark)).collect(),
        };
        out.push_str(&serde_json::to_string(&line).expect("sequence serializes"));
        out.push('\n');
    }
    out
}

/// Write a dataset as JSONL. `load_dataset(save_dataset(d))` equals `d`
/// field for field.
pub fn save_dataset(dataset: &Dataset, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let mut w = BufWriter::new(file);
    let io_err = |e: std::io::Error| Error::io(path.display().to_string(), e);
    w.write_all(to_jsonl_string(dataset).as_bytes()).map_err(io_err)?;
    w.flush().map_err(io_err)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn tmpfile(name: &str) -> std::path::PathBuf {
        let dir = std::env::temp_dir().join("rhawk-dataset-tests");
        std::fs::create_dir_all(&dir).unwrap();
        dir.join(name)
    }

    fn write_lines(path: &Path, lines: &[&str]) {
        std::fs::write(path, lines.join("\n")).unwrap();
    }

    #[test]
    fn load_simple_file() {
        let p = tmpfile("simple.jsonl");
        write_lines(
            &p,
            &[
                r#"{"num_types": 2, "t_max": 10.0}"#,
                r#"{"id":"s0","events":[[0.5,1],[1.0,0]]}"#,
            ],
        );
        let loaded = load_dataset(&p).unwrap();
        assert_eq!(loaded.dataset.len(), 1);
        assert_eq!(loaded.dataset.sequences[0].len(), 2);
        assert_eq!(loaded.dataset.num_types, 2);
        assert_eq!(loaded.resorted, 0);
    }

    #[test]
    fn empty_file_is_an_error() {
        let p = tmpfile("empty.jsonl");
        std::fs::write(&p, "").unwrap();
        match load_dataset(&p) {
            Err(Error::EmptyDataset(_)) => {}
            other => panic!("expected EmptyDataset, got {other:?}"),
        }
    }

    #[test]
    fn unsorted_input_is_repaired_with_warning() {
        let p = tmpfile("unsorted.jsonl");
        write_lines(
            &p,
            &[
                r#"{"num_types": 2, "t_max": 10.0}"#,
                r#"{"id":"s0","events":[[1.0,0],[0.5,1]]}"#,
            ],
        );
        let loaded = load_dataset(&p).unwrap();
        assert_eq!(loaded.resorted, 1);
        let times: Vec<f64> = loaded.dataset.sequences[0].events.iter().map(|e| e.time).collect();
        assert_eq!(times, vec![0.5, 1.0]);
    }

    #[test]
    fn mark_out_of_range_names_line() {
        let p = tmpfile("badmark.jsonl");
        write_lines(
            &p,
            &[
                r#"{"num_types": 2, "t_max": 10.0}"#,
                r#"{"id":"s0","events":[[0.5,1]]}"#,
                r#"{"id":"s1","events":[[0.5,2]]}"#,
            ],
        );
        match load_dataset(&p) {
            Err(Error::SchemaViolation { line, .. }) => assert_eq!(line, 3),
            other => panic!("expected SchemaViolation, got {other:?}"),
        }
    }

    #[test]
    fn parse_failure_names_line() {
        let p = tmpfile("badjson.jsonl");
        write_lines(&p, &[r#"{"num_types": 2, "t_max": 10.0}"#, "not json"]);
        match load_dataset(&p) {
            Err(Error::MalformedInput { line, .. }) => assert_eq!(line, 2),
            other => panic!("expected MalformedInput, got {other:?}"),
        }
    }

    #[test]
    fn save_load_round_trip() {
        let d = Dataset::new(
            vec![
                EventSequence::new("a", vec![Event { time: 0.25, mark: 0 }, Event { time: 1.5, mark: 2 }]),
                EventSequence::new("b", vec![Event { time: 3.0, mark: 1 }]),
            ],
            3,
            5.0,
        )
        .unwrap();
        let p = tmpfile("roundtrip.jsonl");
        save_dataset(&d, &p).unwrap();
        let loaded = load_dataset(&p).unwrap();
        assert_eq!(loaded.dataset, d);
    }

    #[test]
    fn save_empty_dataset_round_trips() {
        let d = Dataset {
            sequences: vec![],
            num_types: 4,
            t_max: 2.0,
            max_gap: None,
        };
        let p = tmpfile("headeronly.jsonl");
        save_dataset(&d, &p).unwrap();
        let text = std::fs::read_to_string(&p).unwrap();
        assert_eq!(text.lines().count(), 1);
        let loaded = load_dataset(&p).unwrap();
        assert_eq!(loaded.dataset, d);
    }

    #[test]
    fn save_to_unwritable_path_is_io_error() {
        let d = Dataset {
            sequences: vec![],
            num_types: 1,
            t_max: 1.0,
            max_gap: None,
        };
        match save_dataset(&d, "/nonexistent-dir/x/y.jsonl") {
            Err(Error::Io { .. }) => {}
            other => panic!("expected Io error, got {other:?}"),
        }
    }

    #[test]
    fn max_gap_header_round_trips() {
        let mut d = Dataset::new(
            vec![EventSequence::new("a", vec![Event { time: 0.0, mark: 0 }])],
            1,
            1.0,
        )
        .unwrap();
        d.max_gap = Some(0.75);
        let p = tmpfile("maxgap.jsonl");
        save_dataset(&d, &p).unwrap();
        assert_eq!(load_dataset(&p).unwrap().dataset.max_gap, Some(0.75));
    }

    fn toy_dataset(n: usize) -> Dataset {
        let sequences = (0..n)
            .map(|i| {
                EventSequence::new(
                    format!("s{i}"),
                    vec![Event { time: 0.5, mark: 0 }],
                )
            })
            .collect();
        Dataset::new(sequences, 1, 1.0).unwrap()
    }

    #[test]
    fn split_sizes_match_paper_protocol() {
        let d = toy_dataset(100);
        let spec = SplitSpec {
            train_frac: 0.8,
            val_frac: 0.1,
            test_frac: 0.1,
            clean_frac: 0.0,
            seed: 3,
        };
        let s = split(&d, &spec).unwrap();
        assert_eq!(
            (s.train.len(), s.val.len(), s.test.len(), s.clean.len()),
            (80, 10, 10, 0)
        );
    }

    #[test]
    fn split_sizes_proportional_within_rounding() {
        // 67 + 26 + 26 sized pool, split 60/20/10/10.
        let d = toy_dataset(119);
        let spec = SplitSpec {
            train_frac: 0.6,
            val_frac: 0.2,
            test_frac: 0.1,
            clean_frac: 0.1,
            seed: 11,
        };
        let s = split(&d, &spec).unwrap();
        let total = s.train.len() + s.val.len() + s.test.len() + s.clean.len();
        assert_eq!(total, 119);
        assert!((s.train.len() as f64 - 71.4).abs() <= 1.0);
        assert!((s.val.len() as f64 - 23.8).abs() <= 1.0);
        assert!((s.test.len() as f64 - 11.9).abs() <= 1.0);
        assert!((s.clean.len() as f64 - 11.9).abs() <= 1.0);
    }

    #[test]
    fn split_is_deterministic_and_exhaustive() {
        let d = toy_dataset(53);
        let spec = SplitSpec {
            train_frac: 0.7,
            val_frac: 0.1,
            test_frac: 0.15,
            clean_frac: 0.05,
            seed: 99,
        };
        let a = split(&d, &spec).unwrap();
        let b = split(&d, &spec).unwrap();
        for (x, y) in [(&a.train, &b.train), (&a.val, &b.val), (&a.test, &b.test), (&a.clean, &b.clean)] {
            assert_eq!(x, y);
        }
        let mut ids: Vec<&str> = a
            .train
            .sequences
            .iter()
            .chain(&a.val.sequences)
            .chain(&a.test.sequences)
            .chain(&a.clean.sequences)
            .map(|s| s.id.as_str())
            .collect();
        ids.sort_unstable();
        let mut expect: Vec<String> = (0..53).map(|i| format!("s{i}")).collect();
        expect.sort();
        assert_eq!(ids, expect.iter().map(String::as_str).collect::<Vec<_>>());
        ids.dedup();
        assert_eq!(ids.len(), 53);
    }

    #[test]
    fn split_warns_on_rounded_to_zero() {
        let d = toy_dataset(3);
        let spec = SplitSpec {
            train_frac: 0.9,
            val_frac: 0.0,
            test_frac: 0.0,
            clean_frac: 0.1,
            seed: 1,
        };
        let s = split(&d, &spec).unwrap();
        if s.clean.is_empty() {
            assert!(s.empty_warnings.contains(&"clean"));
        }
    }

    #[test]
    fn random_files_satisfy_invariants_after_load() {
        // Randomized round of generated files, including unsorted ones.
        for trial in 0..40u64 {
            let mut rng = crate::rng::stream(1234, &[trial]);
            let k = rng.random_range(1..6usize);
            let t_max = 10.0;
            let n_seqs = rng.random_range(1..8usize);
            let mut lines = vec![format!(r#"{{"num_types": {k}, "t_max": {t_max}}}"#)];
            for s in 0..n_seqs {
                let n_ev = rng.random_range(1..12usize);
                let evs: Vec<String> = (0..n_ev)
                    .map(|_| {
                        let t: f64 = rng.random_range(0.0..t_max);
                        let m = rng.random_range(0..k);
                        format!("[{t},{m}]")
                    })
                    .collect();
                lines.push(format!(r#"{{"id":"s{s}","events":[{}]}}"#, evs.join(",")));
            }
            let p = tmpfile(&format!("fuzz{trial}.jsonl"));
            write_lines(&p, &lines.iter().map(String::as_str).collect::<Vec<_>>());
            let loaded = load_dataset(&p).unwrap();
            for seq in &loaded.dataset.sequences {
                assert!(seq.is_sorted());
                assert!(seq.events.iter().all(|e| e.mark < k && e.time <= t_max));
            }
        }
    }
}
