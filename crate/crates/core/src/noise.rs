//! Controlled corruption of training data.
//!
//! Marks are resampled through a row-stochastic corruption matrix (uniform,
//! flip, or flip2 patterns); timestamps are perturbed by additive Gaussian
//! noise, clamped back into the observation window, and the sequence is
//! re-sorted. Every alteration is logged so downstream stages can verify
//! which splits were touched.

use std::collections::BTreeMap;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::dataset::Dataset;
use crate::error::{Error, Result};
use crate::rng;

/// Mark-corruption pattern.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NoiseKind {
    /// Each mark moves to any of the other `K-1` classes with total mass `p`.
    Uniform,
    /// Each mark moves to one fixed partner class with mass `p`; the partner
    /// assignment is a derangement, so no class maps to itself.
    Flip,
    /// Each mark moves to two fixed distinct partner classes, `p/2` each.
    Flip2,
    /// Identity matrix; no mark corruption.
    None,
}

impl std::str::FromStr for NoiseKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "uniform" => Ok(NoiseKind::Uniform),
            "flip" => Ok(NoiseKind::Flip),
            "flip2" => Ok(NoiseKind::Flip2),
            "none" => Ok(NoiseKind::None),
            other => Err(Error::Config(format!("unknown noise kind '{other}'"))),
        }
    }
}

impl std::fmt::Display for NoiseKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            NoiseKind::Uniform => "uniform",
            NoiseKind::Flip => "flip",
            NoiseKind::Flip2 => "flip2",
            NoiseKind::None => "none",
        };
        f.write_str(s)
    }
}

/// Full corruption recipe for one dataset pass.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct NoiseSpec {
    pub kind: NoiseKind,
    /// Mark-corruption probability.
    pub p: f64,
    /// Probability that a timestamp is perturbed.
    pub time_p: f64,
    /// Standard deviation of the additive Gaussian time perturbation.
    pub time_sigma: f64,
    pub seed: u64,
}

impl NoiseSpec {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.p) {
            return Err(Error::Config(format!("p {} outside [0,1]", self.p)));
        }
        if !(0.0..=1.0).contains(&self.time_p) {
            return Err(Error::Config(format!("time_p {} outside [0,1]", self.time_p)));
        }
        if !(self.time_sigma >= 0.0) {
            return Err(Error::Config(format!("time_sigma {} must be >= 0", self.time_sigma)));
        }
        Ok(())
    }
}

/// Row-stochastic K x K matrix; entry `[i][j]` is the probability that a
/// true mark `i` is recorded as `j`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorruptionMatrix {
    pub rows: Vec<Vec<f64>>,
}

impl CorruptionMatrix {
    pub fn k(&self) -> usize {
        self.rows.len()
    }

    /// Sample a recorded mark for true mark `i` from row `i`.
    pub fn sample(&self, i: usize, rng: &mut impl Rng) -> usize {
        let row = &self.rows[i];
        let mut u: f64 = rng.random();
        for (j, &w) in row.iter().enumerate() {
            if u < w {
                return j;
            }
            u -= w;
        }
        row.len() - 1
    }

    pub fn check_row_stochastic(&self) -> Result<()> {
        for (i, row) in self.rows.iter().enumerate() {
            if row.iter().any(|&x| x < 0.0) {
                return Err(Error::Contract(format!("row {i} has a negative entry")));
            }
            let sum: f64 = row.iter().sum();
            if (sum - 1.0).abs() > 1e-9 {
                return Err(Error::Contract(format!("row {i} sums to {sum}")));
            }
        }
        Ok(())
    }
}

/// Build the corruption matrix for a noise pattern.
///
/// - uniform: diagonal `1-p`, every off-diagonal `p/(K-1)`.
/// - flip: diagonal `1-p`, mass `p` on one seeded-random partner per row;
///   partners form a derangement.
/// - flip2: diagonal `1-p`, mass `p/2` on each of two seeded-random distinct
///   partners per row.
/// - none: identity.
pub fn build_matrix(kind: NoiseKind, k: usize, p: f64, seed: u64) -> Result<CorruptionMatrix> {
    if !(0.0..=1.0).contains(&p) {
        return Err(Error::Config(format!("p {p} outside [0,1]")));
    }
    if k < 2 && kind != NoiseKind::None {
        return Err(Error::Config(format!("noise kind {kind} requires K >= 2, got {k}")));
    }
    if kind == NoiseKind::Flip2 && k < 3 {
        return Err(Error::Config(format!("flip2 requires K >= 3, got {k}")));
    }
    let mut rows = vec![vec![0.0; k]; k];
    match kind {
        NoiseKind::None => {
            for (i, row) in rows.iter_mut().enumerate() {
                row[i] = 1.0;
            }
        }
        NoiseKind::Uniform => {
            let off = p / (k as f64 - 1.0);
            for (i, row) in rows.iter_mut().enumerate() {
                for (j, cell) in row.iter_mut().enumerate() {
                    *cell = if i == j { 1.0 - p } else { off };
                }
            }
        }
        NoiseKind::Flip => {
            let partner = derangement(k, seed);
            for (i, row) in rows.iter_mut().enumerate() {
                row[i] = 1.0 - p;
                row[partner[i]] += p;
            }
        }
        NoiseKind::Flip2 => {
            let mut rng = rng::stream(seed, &[0x464c_4950, 2]);
            for (i, row) in rows.iter_mut().enumerate() {
                row[i] = 1.0 - p;
                let a = loop {
                    let c = rng.random_range(0..k);
                    if c != i {
                        break c;
                    }
                };
                let b = loop {
                    let c = rng.random_range(0..k);
                    if c != i && c != a {
                        break c;
                    }
                };
                row[a] += p / 2.0;
                row[b] += p / 2.0;
            }
        }
    }
    let m = CorruptionMatrix { rows };
    m.check_row_stochastic()?;
    Ok(m)
}

/// Seeded random permutation of `0..k` with no fixed point.
fn derangement(k: usize, seed: u64) -> Vec<usize> {
    let mut rng = rng::stream(seed, &[0x464c_4950, 1]);
    loop {
        let mut perm: Vec<usize> = (0..k).collect();
        // Fisher-Yates.
        for i in (1..k).rev() {
            let j = rng.random_range(0..=i);
            perm.swap(i, j);
        }
        if perm.iter().enumerate().all(|(i, &p)| i != p) {
            return perm;
        }
    }
}

/// One altered event: its index in the original sequence plus the values it
/// had before corruption. Serializes as the tuple
/// `[index, original_time, original_mark]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(from = "(usize, f64, usize)", into = "(usize, f64, usize)")]
pub struct Alteration {
    pub index: usize,
    pub original_time: f64,
    pub original_mark: usize,
}

impl From<(usize, f64, usize)> for Alteration {
    fn from((index, original_time, original_mark): (usize, f64, usize)) -> Self {
        Alteration {
            index,
            original_time,
            original_mark,
        }
    }
}

impl From<Alteration> for (usize, f64, usize) {
    fn from(a: Alteration) -> Self {
        (a.index, a.original_time, a.original_mark)
    }
}

/// Per-sequence record of everything the corruption pass changed.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct CorruptionLog {
    /// Sequence id -> alterations, in event order.
    pub entries: BTreeMap<String, Vec<Alteration>>,
    /// Number of perturbed timestamps that had to be clamped into the window.
    pub clamped: usize,
}

impl CorruptionLog {
    pub fn total_altered(&self) -> usize {
        self.entries.values().map(Vec::len).sum()
    }
}

/// Apply mark and time corruption to every event of `dataset`.
///
/// Each event's mark is resampled from its corruption-matrix row (the
/// diagonal carries the survival mass, so the marginal change rate is
/// `1 - diag`). Each timestamp is perturbed with probability `time_p` by
/// `Normal(0, time_sigma)`, clamped to `[0, t_max]`, and sequences are
/// re-sorted afterwards. Deterministic given the seed; each sequence uses
/// an RNG stream derived from its position, so the pass parallelizes.
pub fn corrupt(dataset: &Dataset, spec: &NoiseSpec) -> Result<(Dataset, CorruptionLog)> {
    spec.validate()?;
    let matrix = build_matrix(spec.kind, dataset.num_types.max(2), spec.p, spec.seed)?;
    let mut log = CorruptionLog::default();
    let mut out = dataset.clone();

    for (seq_idx, seq) in out.sequences.iter_mut().enumerate() {
        let mut rng = rng::stream(spec.seed, &[0xC0_44, seq_idx as u64]);
        let normal = if spec.time_sigma > 0.0 {
            Some(Normal::new(0.0, spec.time_sigma).map_err(|e| Error::Config(e.to_string()))?)
        } else {
            None
        };
        let mut alterations = Vec::new();
        for (i, ev) in seq.events.iter_mut().enumerate() {
            let orig_time = ev.time;
            let orig_mark = ev.mark;
            if ev.mark < matrix.k() {
                ev.mark = matrix.sample(orig_mark, &mut rng);
            }
            let perturb_time: f64 = rng.random();
            if spec.time_p > 0.0 && perturb_time < spec.time_p {
                if let Some(n) = &normal {
                    let shifted = ev.time + n.sample(&mut rng);
                    let clamped = shifted.clamp(0.0, dataset.t_max);
                    if clamped != shifted {
                        log.clamped += 1;
                    }
                    ev.time = clamped;
                }
            }
            if ev.time != orig_time || ev.mark != orig_mark {
                alterations.push(Alteration {
                    index: i,
                    original_time: orig_time,
                    original_mark: orig_mark,
                });
            }
        }
        if !seq.is_sorted() {
            seq.sort_by_time();
        }
        if !alterations.is_empty() {
            log.entries.insert(seq.id.clone(), alterations);
        }
    }

    out.validate()?;
    Ok((out, log))
}
